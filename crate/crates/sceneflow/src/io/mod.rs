//! File-format codecs and the on-disk dataset layout.
//!
//! A dataset root contains `<root>/<subset>/<split>/<sample-id>/` with the
//! seven files `left_t.png`, `left_t1.png`, `right_t.png`, `right_t1.png`,
//! `flow.flo` (or `flow.pfm`), `disp_t.pfm`, `disp_t1.pfm`.

pub mod flo;
pub mod pfm;

use std::fmt;
use std::path::{Path, PathBuf};

use crate::types::{
    CoreError, DisparityPair, FlowField, Image2D, SceneFlowField, StereoQuad,
};
use thiserror::Error;

pub use flo::{read_flo, write_flo, FLO_TAG};
pub use pfm::{read_pfm, write_pfm, PfmImage, PfmMeta};

/// Errors from the codecs and dataset index.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic for {what} at byte {offset}")]
    BadMagic { what: &'static str, offset: usize },
    #[error("truncated input: {what} ends at byte {offset}")]
    Truncated { what: &'static str, offset: usize },
    #[error("parse error: {what} (byte {offset})")]
    Parse { what: &'static str, offset: usize },
    #[error("unsupported channel count {channels} for PFM (expected 1 or 3)")]
    UnsupportedChannels { channels: usize },
    #[error("file {path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image file {path}: {message}")]
    ImageFile { path: PathBuf, message: String },
    #[error("sample {id}: {message}")]
    Sample { id: String, message: String },
    #[error(transparent)]
    Core(#[from] CoreError),
}

/// Dataset split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}' (expected train|test)")),
        }
    }
}

/// Dataset subset label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Subset {
    A,
    B,
    C,
    #[serde(rename = "synthetic")]
    Synthetic,
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subset::A => write!(f, "A"),
            Subset::B => write!(f, "B"),
            Subset::C => write!(f, "C"),
            Subset::Synthetic => write!(f, "synthetic"),
        }
    }
}

impl std::str::FromStr for Subset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" => Ok(Subset::A),
            "B" => Ok(Subset::B),
            "C" => Ok(Subset::C),
            "synthetic" => Ok(Subset::Synthetic),
            other => Err(format!("unknown subset '{other}' (expected A|B|C|synthetic)")),
        }
    }
}

/// Paths of the seven files backing one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub left_t: PathBuf,
    pub left_t1: PathBuf,
    pub right_t: PathBuf,
    pub right_t1: PathBuf,
    pub flow: PathBuf,
    pub disp_t: PathBuf,
    pub disp_t1: PathBuf,
}

/// An ordered, validated listing of samples under one subset/split.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub split: Split,
    pub subset: Subset,
    pub samples: Vec<SampleRecord>,
    /// One message per excluded sample directory.
    pub diagnostics: Vec<String>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Scans `root/<subset>/<split>` and returns the samples whose seven files
/// all exist, in lexicographic id order. Incomplete samples are excluded
/// and reported in `diagnostics`.
pub fn build_index(root: &Path, split: Split, subset: Subset) -> Result<DatasetIndex, FormatError> {
    let dir = root.join(subset.to_string()).join(split.to_string());
    let mut samples = Vec::new();
    let mut diagnostics = Vec::new();

    let mut ids: Vec<String> = Vec::new();
    if dir.is_dir() {
        for entry in std::fs::read_dir(&dir).map_err(|source| FormatError::File {
            path: dir.clone(),
            source,
        })? {
            let entry = entry.map_err(|source| FormatError::File {
                path: dir.clone(),
                source,
            })?;
            if entry.path().is_dir() {
                ids.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
    }
    ids.sort();

    for id in ids {
        let sample_dir = dir.join(&id);
        let mut missing = Vec::new();
        let file = |name: &str| sample_dir.join(name);
        for name in ["left_t.png", "left_t1.png", "right_t.png", "right_t1.png"] {
            if !file(name).is_file() {
                missing.push(name.to_string());
            }
        }
        let flow = if file("flow.flo").is_file() {
            Some(file("flow.flo"))
        } else if file("flow.pfm").is_file() {
            Some(file("flow.pfm"))
        } else {
            missing.push("flow.flo|flow.pfm".to_string());
            None
        };
        for name in ["disp_t.pfm", "disp_t1.pfm"] {
            if !file(name).is_file() {
                missing.push(name.to_string());
            }
        }
        if !missing.is_empty() {
            diagnostics.push(format!("sample {id}: missing {}", missing.join(", ")));
            continue;
        }
        samples.push(SampleRecord {
            id,
            left_t: file("left_t.png"),
            left_t1: file("left_t1.png"),
            right_t: file("right_t.png"),
            right_t1: file("right_t1.png"),
            flow: flow.unwrap(),
            disp_t: file("disp_t.pfm"),
            disp_t1: file("disp_t1.pfm"),
        });
    }

    if !diagnostics.is_empty() {
        log::warn!(
            "index {}/{}: excluded {} incomplete sample(s)",
            subset,
            split,
            diagnostics.len()
        );
    }

    Ok(DatasetIndex {
        root: root.to_path_buf(),
        split,
        subset,
        samples,
        diagnostics,
    })
}

/// Decode-time bookkeeping for one sample.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleMeta {
    /// Non-finite ground-truth values zeroed during decode.
    pub non_finite_count: usize,
    /// True where the stored disparity used a negative sign convention and
    /// was flipped to a magnitude on load.
    pub disp_t_sign_flipped: bool,
    pub disp_t1_sign_flipped: bool,
}

fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    std::fs::read(path).map_err(|source| FormatError::File {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads an 8-bit RGB image and maps values from [0, 255] to [-1, 1].
pub fn load_image_normalized(path: &Path) -> Result<Image2D, FormatError> {
    let img = image::open(path)
        .map_err(|e| FormatError::ImageFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f64; 3 * h * w];
    let plane = h * w;
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for (c, &byte) in px.0.iter().enumerate() {
            data[c * plane + i] = byte as f64 / 127.5 - 1.0;
        }
    }
    Image2D::new(h, w, 3, data).map_err(FormatError::Core)
}

/// Quantizes a normalized [-1, 1] image to 8-bit RGB and writes a PNG.
pub fn save_image_normalized(path: &Path, img: &Image2D) -> Result<(), FormatError> {
    assert_eq!(img.channels(), 3, "png export expects RGB");
    let (h, w) = (img.height(), img.width());
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for (c, slot) in px.iter_mut().enumerate() {
                let v = ((img.get(c, y, x) + 1.0) * 127.5).round().clamp(0.0, 255.0);
                *slot = v as u8;
            }
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    out.save(path).map_err(|e| FormatError::ImageFile {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Reads flow ground truth from `.flo` or 3-channel PFM (third channel
/// ignored), dispatching on the file extension.
pub fn load_flow(path: &Path) -> Result<(FlowField, usize), FormatError> {
    let bytes = read_file(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("flo") => Ok((read_flo(&bytes)?, 0)),
        _ => {
            let decoded = read_pfm(&bytes)?;
            let img = decoded.image;
            if img.channels() != 3 {
                return Err(FormatError::ImageFile {
                    path: path.to_path_buf(),
                    message: format!(
                        "flow PFM must be 3-channel (u, v, ignored), got {}",
                        img.channels()
                    ),
                });
            }
            let (h, w) = (img.height(), img.width());
            let u = Image2D::new(h, w, 1, img.channel(0).to_vec())?;
            let v = Image2D::new(h, w, 1, img.channel(1).to_vec())?;
            Ok((FlowField::new(u, v)?, decoded.meta.non_finite_count))
        }
    }
}

/// Reads a disparity PFM and normalizes it to non-negative magnitudes,
/// reporting whether a sign flip was applied.
pub fn load_disparity(path: &Path) -> Result<(Image2D, bool, usize), FormatError> {
    let bytes = read_file(path)?;
    let decoded = read_pfm(&bytes)?;
    let img = decoded.image;
    if img.channels() != 1 {
        return Err(FormatError::ImageFile {
            path: path.to_path_buf(),
            message: format!("disparity PFM must be 1-channel, got {}", img.channels()),
        });
    }
    let flipped = img.data().iter().any(|&v| v < 0.0);
    let img = if flipped {
        let (h, w) = (img.height(), img.width());
        Image2D::new(h, w, 1, img.data().iter().map(|v| v.abs()).collect())?
    } else {
        img
    };
    Ok((img, flipped, decoded.meta.non_finite_count))
}

/// Fully decodes one sample: the four conditioning images and the
/// ground-truth field, with dimension consistency enforced.
pub fn load_sample(
    record: &SampleRecord,
) -> Result<(StereoQuad, SceneFlowField, SampleMeta), FormatError> {
    let left_t = load_image_normalized(&record.left_t)?;
    let left_t1 = load_image_normalized(&record.left_t1)?;
    let right_t = load_image_normalized(&record.right_t)?;
    let right_t1 = load_image_normalized(&record.right_t1)?;
    let quad = StereoQuad::new(left_t, left_t1, right_t, right_t1)?;

    let (flow, flow_nan) = load_flow(&record.flow)?;
    let (d_t, flip_t, nan_t) = load_disparity(&record.disp_t)?;
    let (d_t1, flip_t1, nan_t1) = load_disparity(&record.disp_t1)?;
    let gt = SceneFlowField::new(flow, DisparityPair::new_ground_truth(d_t, d_t1)?)?;

    if gt.height() != quad.height() || gt.width() != quad.width() {
        return Err(FormatError::Sample {
            id: record.id.clone(),
            message: format!(
                "ground truth is {}x{} but images are {}x{}",
                gt.height(),
                gt.width(),
                quad.height(),
                quad.width()
            ),
        });
    }

    let meta = SampleMeta {
        non_finite_count: flow_nan + nan_t + nan_t1,
        disp_t_sign_flipped: flip_t,
        disp_t1_sign_flipped: flip_t1,
    };
    if meta.non_finite_count > 0 {
        log::warn!(
            "sample {}: zeroed {} non-finite ground-truth value(s)",
            record.id,
            meta.non_finite_count
        );
    }
    Ok((quad, gt, meta))
}

/// Flow file format choice for writers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowFormat {
    Flo,
    Pfm,
}

/// Writes the seven files of one sample into `dir` (created if needed).
pub fn save_sample(
    dir: &Path,
    quad: &StereoQuad,
    gt: &SceneFlowField,
    flow_format: FlowFormat,
) -> Result<(), FormatError> {
    std::fs::create_dir_all(dir).map_err(|source| FormatError::File {
        path: dir.to_path_buf(),
        source,
    })?;
    let write = |name: &str, bytes: &[u8]| -> Result<(), FormatError> {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|source| FormatError::File { path, source })
    };

    save_image_normalized(&dir.join("left_t.png"), &quad.left_t)?;
    save_image_normalized(&dir.join("left_t1.png"), &quad.left_t1)?;
    save_image_normalized(&dir.join("right_t.png"), &quad.right_t)?;
    save_image_normalized(&dir.join("right_t1.png"), &quad.right_t1)?;

    match flow_format {
        FlowFormat::Flo => write("flow.flo", &write_flo(&gt.flow))?,
        FlowFormat::Pfm => {
            let (h, w) = (gt.height(), gt.width());
            let mut data = Vec::with_capacity(3 * h * w);
            data.extend_from_slice(gt.flow.u.channel(0));
            data.extend_from_slice(gt.flow.v.channel(0));
            data.extend(std::iter::repeat_n(0.0, h * w));
            let img = Image2D::new(h, w, 3, data)?;
            write("flow.pfm", &write_pfm(&img, true)?)?;
        }
    }
    write("disp_t.pfm", &write_pfm(&gt.disparities.d_t, true)?)?;
    write("disp_t1.pfm", &write_pfm(&gt.disparities.d_t1, true)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    #[test]
    fn empty_directory_gives_empty_index() {
        let tmp = TempDir::new().unwrap();
        let index = build_index(tmp.path(), Split::Train, Subset::Synthetic).unwrap();
        assert!(index.is_empty());
        assert!(index.diagnostics.is_empty());
    }

    #[test]
    fn incomplete_sample_is_excluded_with_diagnostic() {
        let tmp = TempDir::new().unwrap();
        let dir = tmp.path().join("synthetic").join("train").join("000000");
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("left_t.png"), b"stub").unwrap();
        let index = build_index(tmp.path(), Split::Train, Subset::Synthetic).unwrap();
        assert_eq!(index.len(), 0);
        assert_eq!(index.diagnostics.len(), 1);
        assert!(index.diagnostics[0].contains("000000"));
        assert!(index.diagnostics[0].contains("disp_t.pfm"));
    }

    #[test]
    fn one_broken_sample_excluded_rest_survive() {
        let tmp = TempDir::new().unwrap();
        crate::synth::generate_dataset(
            &crate::synth::SceneConfig::default(),
            4,
            13,
            tmp.path(),
            Split::Train,
        )
        .unwrap();
        let victim = tmp
            .path()
            .join("synthetic")
            .join("train")
            .join("000002")
            .join("disp_t1.pfm");
        std::fs::remove_file(&victim).unwrap();
        let index = build_index(tmp.path(), Split::Train, Subset::Synthetic).unwrap();
        assert_eq!(index.len(), 3);
        assert_eq!(index.diagnostics.len(), 1);
        assert!(index.diagnostics[0].contains("000002"));
        assert!(index.diagnostics[0].contains("disp_t1.pfm"));
    }

    #[test]
    fn disparity_sign_convention_normalized() {
        let tmp = TempDir::new().unwrap();
        let img = Image2D::new(1, 2, 1, vec![-3.0, -4.0]).unwrap();
        let path = tmp.path().join("d.pfm");
        std::fs::write(&path, write_pfm(&img, true).unwrap()).unwrap();
        let (loaded, flipped, nan) = load_disparity(&path).unwrap();
        assert!(flipped);
        assert_eq!(nan, 0);
        assert_eq!(loaded.channel(0), &[3.0, 4.0]);
    }

    #[test]
    fn png_round_trip_preserves_quantized_values() {
        let tmp = TempDir::new().unwrap();
        // Values already on the u8 grid survive exactly.
        let data: Vec<f64> = (0..12).map(|i| (i * 20) as f64 / 127.5 - 1.0).collect();
        let img = Image2D::new(2, 2, 3, data).unwrap();
        let path = tmp.path().join("img.png");
        save_image_normalized(&path, &img).unwrap();
        let back = load_image_normalized(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn flow_pfm_third_channel_ignored() {
        let tmp = TempDir::new().unwrap();
        let mut data = vec![0.0f64; 12];
        data[0..4].copy_from_slice(&[1.0, 2.0, 3.0, 4.0]); // u
        data[4..8].copy_from_slice(&[5.0, 6.0, 7.0, 8.0]); // v
        data[8..12].copy_from_slice(&[9.0, 9.0, 9.0, 9.0]); // ignored
        let img = Image2D::new(2, 2, 3, data).unwrap();
        let path = tmp.path().join("flow.pfm");
        std::fs::write(&path, write_pfm(&img, true).unwrap()).unwrap();
        let (flow, _) = load_flow(&path).unwrap();
        assert_eq!(flow.u.channel(0), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(flow.v.channel(0), &[5.0, 6.0, 7.0, 8.0]);
    }
}
