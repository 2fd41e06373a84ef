//! Middlebury `.flo` optical-flow codec.
//!
//! Layout: f32 sanity tag 202021.25, i32 width, i32 height, then
//! row-major interleaved (u, v) f32 pairs, all little-endian.

use crate::io::FormatError;
use crate::types::{FlowField, Image2D};

/// The float whose bytes spell "PIEH" in little-endian files.
pub const FLO_TAG: f32 = 202021.25;

/// Decodes a `.flo` byte stream.
pub fn read_flo(bytes: &[u8]) -> Result<FlowField, FormatError> {
    if bytes.len() < 12 {
        return Err(FormatError::Truncated {
            what: "flo header",
            offset: bytes.len(),
        });
    }
    let tag = f32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if tag != FLO_TAG {
        return Err(FormatError::BadMagic {
            what: "flo (expected tag 202021.25)",
            offset: 0,
        });
    }
    let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if width <= 0 || height <= 0 {
        return Err(FormatError::Parse {
            what: "flo dimensions must be positive",
            offset: 4,
        });
    }
    let (width, height) = (width as usize, height as usize);
    let expected = width * height * 2 * 4;
    if bytes.len() - 12 < expected {
        return Err(FormatError::Truncated {
            what: "flo payload",
            offset: bytes.len(),
        });
    }

    let mut u = vec![0.0f64; width * height];
    let mut v = vec![0.0f64; width * height];
    for i in 0..width * height {
        let base = 12 + i * 8;
        u[i] = f32::from_le_bytes(bytes[base..base + 4].try_into().unwrap()) as f64;
        v[i] = f32::from_le_bytes(bytes[base + 4..base + 8].try_into().unwrap()) as f64;
    }
    let u = Image2D::new(height, width, 1, u).map_err(FormatError::Core)?;
    let v = Image2D::new(height, width, 1, v).map_err(FormatError::Core)?;
    FlowField::new(u, v).map_err(FormatError::Core)
}

/// Encodes a flow field as `.flo` bytes.
pub fn write_flo(flow: &FlowField) -> Vec<u8> {
    let (h, w) = (flow.height(), flow.width());
    let mut out = Vec::with_capacity(12 + h * w * 8);
    out.extend_from_slice(&FLO_TAG.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    let (u, v) = (flow.u.channel(0), flow.v.channel(0));
    for i in 0..h * w {
        out.extend_from_slice(&(u[i] as f32).to_le_bytes());
        out.extend_from_slice(&(v[i] as f32).to_le_bytes());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flow_1x1(u: f64, v: f64) -> FlowField {
        FlowField::new(
            Image2D::new(1, 1, 1, vec![u]).unwrap(),
            Image2D::new(1, 1, 1, vec![v]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zero_flow_is_20_bytes_and_round_trips() {
        let bytes = write_flo(&flow_1x1(0.0, 0.0));
        assert_eq!(bytes.len(), 20);
        let back = read_flo(&bytes).unwrap();
        assert_eq!(back.u.channel(0), &[0.0]);
        assert_eq!(back.v.channel(0), &[0.0]);
    }

    #[test]
    fn exactly_representable_values_survive() {
        let back = read_flo(&write_flo(&flow_1x1(3.0, 4.0))).unwrap();
        assert_eq!(back.u.channel(0), &[3.0]);
        assert_eq!(back.v.channel(0), &[4.0]);
    }

    #[test]
    fn wrong_tag_rejected() {
        let mut bytes = write_flo(&flow_1x1(0.0, 0.0));
        bytes[0] ^= 0xff;
        assert!(matches!(
            read_flo(&bytes).unwrap_err(),
            FormatError::BadMagic { .. }
        ));
    }

    #[test]
    fn truncation_detected() {
        let bytes = write_flo(&flow_1x1(1.0, 2.0));
        assert!(matches!(
            read_flo(&bytes[..bytes.len() - 1]).unwrap_err(),
            FormatError::Truncated { .. }
        ));
    }
}
