//! Portable Float Map codec.
//!
//! Header: magic `Pf` (1 channel) or `PF` (3 channels), width, height,
//! then a scale line whose sign encodes endianness (negative = little).
//! Rows are stored bottom-to-top in the file; this codec flips them so the
//! rest of the codebase only ever sees top-to-bottom images.

use crate::io::FormatError;
use crate::types::Image2D;

/// Decode metadata: the scale magnitude from the header, payload byte
/// order, and how many non-finite payload values were zeroed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PfmMeta {
    pub scale: f64,
    pub little_endian: bool,
    pub non_finite_count: usize,
}

/// A decoded PFM file.
#[derive(Debug, Clone, PartialEq)]
pub struct PfmImage {
    pub image: Image2D,
    pub meta: PfmMeta,
}

fn is_pfm_whitespace(b: u8) -> bool {
    matches!(b, b' ' | b'\n' | b'\r' | b'\t')
}

/// Reads the next whitespace-delimited ASCII token starting at `pos`.
/// Returns (token, offset just past the single terminating whitespace byte).
fn next_token(bytes: &[u8], mut pos: usize) -> Result<(&str, usize), FormatError> {
    while pos < bytes.len() && is_pfm_whitespace(bytes[pos]) {
        pos += 1;
    }
    let start = pos;
    while pos < bytes.len() && !is_pfm_whitespace(bytes[pos]) {
        pos += 1;
    }
    if start == pos {
        return Err(FormatError::Truncated {
            what: "pfm header token",
            offset: start,
        });
    }
    let token = std::str::from_utf8(&bytes[start..pos]).map_err(|_| FormatError::Parse {
        what: "pfm header is not ASCII",
        offset: start,
    })?;
    // Exactly one whitespace byte terminates the token before binary data.
    Ok((token, pos + 1))
}

/// Decodes a PFM byte stream into a top-to-bottom image.
pub fn read_pfm(bytes: &[u8]) -> Result<PfmImage, FormatError> {
    if bytes.len() < 2 {
        return Err(FormatError::Truncated {
            what: "pfm magic",
            offset: 0,
        });
    }
    let channels = match &bytes[0..2] {
        b"PF" => 3,
        b"Pf" => 1,
        _ => {
            return Err(FormatError::BadMagic {
                what: "pfm (expected 'PF' or 'Pf')",
                offset: 0,
            })
        }
    };
    let (w_tok, pos) = next_token(bytes, 2)?;
    let width: usize = w_tok.parse().map_err(|_| FormatError::Parse {
        what: "pfm width is not a positive integer",
        offset: 2,
    })?;
    let (h_tok, pos) = next_token(bytes, pos)?;
    let height: usize = h_tok.parse().map_err(|_| FormatError::Parse {
        what: "pfm height is not a positive integer",
        offset: pos,
    })?;
    let scale_offset = pos;
    let (s_tok, payload_start) = next_token(bytes, pos)?;
    let scale_signed: f64 = s_tok.parse().map_err(|_| FormatError::Parse {
        what: "pfm scale is not a number",
        offset: scale_offset,
    })?;
    if scale_signed == 0.0 || width == 0 || height == 0 {
        return Err(FormatError::Parse {
            what: "pfm scale/dims must be nonzero",
            offset: scale_offset,
        });
    }
    let little_endian = scale_signed < 0.0;

    let n_values = width * height * channels;
    let expected = n_values * 4;
    let payload = &bytes[payload_start.min(bytes.len())..];
    if payload.len() < expected {
        return Err(FormatError::Truncated {
            what: "pfm payload",
            offset: payload_start + payload.len(),
        });
    }

    // File rows run bottom-to-top; values within a row are interleaved
    // (r, g, b) for 3-channel files. Output is planar top-to-bottom.
    let mut data = vec![0.0f64; n_values];
    let mut non_finite_count = 0usize;
    let plane = width * height;
    for file_row in 0..height {
        let y = height - 1 - file_row;
        for x in 0..width {
            for c in 0..channels {
                let idx = ((file_row * width + x) * channels + c) * 4;
                let raw: [u8; 4] = payload[idx..idx + 4].try_into().unwrap();
                let v = if little_endian {
                    f32::from_le_bytes(raw)
                } else {
                    f32::from_be_bytes(raw)
                };
                let mut v = v as f64;
                if !v.is_finite() {
                    non_finite_count += 1;
                    v = 0.0;
                }
                data[c * plane + y * width + x] = v;
            }
        }
    }

    let image = Image2D::new(height, width, channels, data).map_err(FormatError::Core)?;
    Ok(PfmImage {
        image,
        meta: PfmMeta {
            scale: scale_signed.abs(),
            little_endian,
            non_finite_count,
        },
    })
}

/// Encodes an image as PFM with canonical header and unit scale.
pub fn write_pfm(img: &Image2D, little_endian: bool) -> Result<Vec<u8>, FormatError> {
    let channels = img.channels();
    if channels != 1 && channels != 3 {
        return Err(FormatError::UnsupportedChannels { channels });
    }
    let (h, w) = (img.height(), img.width());
    let magic = if channels == 3 { "PF" } else { "Pf" };
    let scale = if little_endian { "-1.0" } else { "1.0" };
    let mut out = format!("{magic}\n{w} {h}\n{scale}\n").into_bytes();
    out.reserve(h * w * channels * 4);
    for file_row in 0..h {
        let y = h - 1 - file_row;
        for x in 0..w {
            for c in 0..channels {
                let v = img.get(c, y, x) as f32;
                let raw = if little_endian {
                    v.to_le_bytes()
                } else {
                    v.to_be_bytes()
                };
                out.extend_from_slice(&raw);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_minimal_little_endian_fixture() {
        let mut bytes = b"Pf\n2 1\n-1.0\n".to_vec();
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&2.0f32.to_le_bytes());
        let decoded = read_pfm(&bytes).unwrap();
        assert_eq!(decoded.image.height(), 1);
        assert_eq!(decoded.image.width(), 2);
        assert_eq!(decoded.image.channels(), 1);
        assert_eq!(decoded.image.channel(0), &[1.0, 2.0]);
        assert!(decoded.meta.little_endian);
        assert_eq!(decoded.meta.scale, 1.0);
    }

    #[test]
    fn big_endian_payload_decodes_identically() {
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&1.0f32.to_be_bytes());
        bytes.extend_from_slice(&2.0f32.to_be_bytes());
        let decoded = read_pfm(&bytes).unwrap();
        assert_eq!(decoded.image.channel(0), &[1.0, 2.0]);
        assert!(!decoded.meta.little_endian);
    }

    #[test]
    fn row_order_is_flipped() {
        // 1x2 column image: file stores bottom row first.
        let mut bytes = b"Pf\n1 2\n-1.0\n".to_vec();
        bytes.extend_from_slice(&10.0f32.to_le_bytes()); // bottom row
        bytes.extend_from_slice(&20.0f32.to_le_bytes()); // top row
        let decoded = read_pfm(&bytes).unwrap();
        assert_eq!(decoded.image.get(0, 0, 0), 20.0);
        assert_eq!(decoded.image.get(0, 1, 0), 10.0);
    }

    #[test]
    fn write_is_deterministic_and_three_channel_uses_pf() {
        let img = Image2D::zeros(1, 1, 1).unwrap();
        let a = write_pfm(&img, true).unwrap();
        let b = write_pfm(&img, true).unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with(b"Pf\n1 1\n-1.0\n"));

        let rgb = Image2D::zeros(1, 1, 3).unwrap();
        assert!(write_pfm(&rgb, true).unwrap().starts_with(b"PF\n"));
    }

    #[test]
    fn bad_magic_and_truncation_report_offsets() {
        let err = read_pfm(b"XX\n1 1\n1.0\n\0\0\0\0").unwrap_err();
        assert!(matches!(err, FormatError::BadMagic { offset: 0, .. }));

        let err = read_pfm(b"Pf\n2 1\n-1.0\n\0\0\0\0").unwrap_err();
        assert!(matches!(err, FormatError::Truncated { .. }));

        let err = read_pfm(b"Pf\nx 1\n-1.0\n").unwrap_err();
        assert!(matches!(err, FormatError::Parse { .. }));
    }

    #[test]
    fn non_finite_values_are_zeroed_and_counted() {
        let mut bytes = b"Pf\n2 1\n-1.0\n".to_vec();
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        bytes.extend_from_slice(&3.0f32.to_le_bytes());
        let decoded = read_pfm(&bytes).unwrap();
        assert_eq!(decoded.meta.non_finite_count, 1);
        assert_eq!(decoded.image.channel(0), &[0.0, 3.0]);
    }

    #[test]
    fn round_trip_bytes_to_bytes() {
        let img = Image2D::new(2, 3, 3, (0..18).map(|i| i as f64 * 0.5 - 4.0).collect()).unwrap();
        for le in [true, false] {
            let bytes = write_pfm(&img, le).unwrap();
            let decoded = read_pfm(&bytes).unwrap();
            assert_eq!(decoded.image, img);
            let again = write_pfm(&decoded.image, decoded.meta.little_endian).unwrap();
            assert_eq!(again, bytes);
        }
    }
}
