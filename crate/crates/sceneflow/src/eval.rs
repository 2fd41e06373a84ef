//! Test-set metrics (flow EPE plus the two disparity errors, reported per
//! subset) and pinhole reconstruction of 3D point flow from the 4-channel
//! field.

use thiserror::Error;

use crate::io::{load_sample, DatasetIndex, FormatError};
use crate::loss::{epe, l1_disparity, LossError, Reduction};
use crate::net::{generator_forward, GeneratorSpec, NetError, ParameterSet, Phase};
use crate::tensor::{pack_input, unpack_target, Batch, TargetTensor};
use crate::types::{CameraRig, CoreError, SceneFlowField, StereoQuad};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("no decodable samples in index")]
    EmptyIndex,
}

/// One row of the error table: per-sample mean EPE and L1 errors,
/// averaged uniformly over the samples of a subset/split.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsRow {
    pub subset: String,
    pub split: String,
    pub flow_epe: f64,
    pub d1: f64,
    pub d2: f64,
    pub sample_count: usize,
    pub excluded: usize,
}

/// Flow/disparity error report in the standard three-column layout.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub model_tag: String,
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    /// Renders rows as `<subset> | <flow> | <d_1> | <d_2>` with two
    /// decimals, under a header carrying the model tag.
    pub fn render_table(&self) -> String {
        let mut out = format!("{}\n  | Flow | d_1 | d_2\n", self.model_tag);
        for row in &self.rows {
            out.push_str(&Self::render_row(row));
            out.push('\n');
        }
        out
    }

    pub fn render_row(row: &MetricsRow) -> String {
        format!(
            "{} | {:.2} | {:.2} | {:.2}",
            row.subset, row.flow_epe, row.d1, row.d2
        )
    }
}

/// Evaluates an arbitrary predictor over an index. Undecodable samples
/// are excluded and counted; metrics average per-sample means uniformly.
pub fn evaluate_with_predictor<F>(
    mut predict: F,
    index: &DatasetIndex,
    model_tag: &str,
) -> Result<MetricsReport, EvalError>
where
    F: FnMut(&StereoQuad) -> Result<SceneFlowField, EvalError>,
{
    let mut sums = (0.0f64, 0.0f64, 0.0f64);
    let mut count = 0usize;
    let mut excluded = index.diagnostics.len();
    for record in &index.samples {
        let (quad, gt, _meta) = match load_sample(record) {
            Ok(x) => x,
            Err(e) => {
                log::warn!("excluding sample {}: {e}", record.id);
                excluded += 1;
                continue;
            }
        };
        let pred = predict(&quad)?;
        sums.0 += epe(&pred.flow, &gt.flow, Reduction::Mean)?;
        sums.1 += l1_disparity(&pred.disparities.d_t, &gt.disparities.d_t, Reduction::Mean)?;
        sums.2 += l1_disparity(
            &pred.disparities.d_t1,
            &gt.disparities.d_t1,
            Reduction::Mean,
        )?;
        count += 1;
    }
    if count == 0 && !index.samples.is_empty() {
        return Err(EvalError::EmptyIndex);
    }
    let denom = count.max(1) as f64;
    Ok(MetricsReport {
        model_tag: model_tag.to_string(),
        rows: vec![MetricsRow {
            subset: index.subset.to_string(),
            split: index.split.to_string(),
            flow_epe: sums.0 / denom,
            d1: sums.1 / denom,
            d2: sums.2 / denom,
            sample_count: count,
            excluded,
        }],
    })
}

/// Evaluates a trained generator in inference mode over an index.
pub fn evaluate(
    spec: &GeneratorSpec,
    params: &ParameterSet,
    index: &DatasetIndex,
    model_tag: &str,
) -> Result<MetricsReport, EvalError> {
    evaluate_with_predictor(
        |quad| {
            let input = Batch::stack(&[&pack_input(quad).0]);
            let out = generator_forward(spec, params, &input, Phase::Eval)?;
            Ok(unpack_target(&TargetTensor(out.extract(0)))?)
        },
        index,
        model_tag,
    )
}

/// Dense 3D positions and motion vectors on the pixel grid; pixels with
/// non-positive disparity are masked out.
#[derive(Debug, Clone)]
pub struct PointFlowCloud {
    pub height: usize,
    pub width: usize,
    pub valid: Vec<bool>,
    /// P_t = (X, Y, Z) in meters, meaningful where `valid`.
    pub position: Vec<[f64; 3]>,
    /// P_{t+1} - P_t in meters, meaningful where `valid`.
    pub motion: Vec<[f64; 3]>,
}

impl PointFlowCloud {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Plain-text export: one `x y z dx dy dz` row per valid pixel.
    pub fn export_rows(&self) -> String {
        let mut out = String::new();
        for i in 0..self.valid.len() {
            if !self.valid[i] {
                continue;
            }
            let p = self.position[i];
            let m = self.motion[i];
            out.push_str(&format!(
                "{} {} {} {} {} {}\n",
                p[0], p[1], p[2], m[0], m[1], m[2]
            ));
        }
        out
    }
}

/// Back-projects the 4-channel field through the pinhole model:
/// Z = f*B/d, X = (x-cx)Z/f, Y = (y-cy)Z/f, with the t+1 point taken at
/// pixel (x+u, y+v) and the stored d_{t+1}.
pub fn reconstruct_point_flow(sf: &SceneFlowField, rig: &CameraRig) -> PointFlowCloud {
    let (h, w) = (sf.height(), sf.width());
    let f = rig.focal_length;
    let (cx, cy) = rig.principal_point;
    let fb = f * rig.baseline;
    let mut valid = vec![false; h * w];
    let mut position = vec![[0.0; 3]; h * w];
    let mut motion = vec![[0.0; 3]; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let d_t = sf.disparities.d_t.get(0, y, x);
            let d_t1 = sf.disparities.d_t1.get(0, y, x);
            if d_t <= 0.0 || d_t1 <= 0.0 {
                continue;
            }
            let z_t = fb / d_t;
            let px = x as f64;
            let py = y as f64;
            let p_t = [(px - cx) * z_t / f, (py - cy) * z_t / f, z_t];
            let z_t1 = fb / d_t1;
            let qx = px + sf.flow.u.get(0, y, x);
            let qy = py + sf.flow.v.get(0, y, x);
            let p_t1 = [(qx - cx) * z_t1 / f, (qy - cy) * z_t1 / f, z_t1];
            valid[i] = true;
            position[i] = p_t;
            motion[i] = [p_t1[0] - p_t[0], p_t1[1] - p_t[1], p_t1[2] - p_t[2]];
        }
    }
    PointFlowCloud {
        height: h,
        width: w,
        valid,
        position,
        motion,
    }
}

/// Residuals between the stored flow and the flow implied by reprojecting
/// the reconstructed 3D motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualStats {
    pub mean: f64,
    pub max: f64,
    pub checked: usize,
    pub masked: usize,
}

/// Reconstructs, reprojects P_t + dP, and compares the implied pixel
/// displacement against the stored (u, v). Masked pixels are excluded.
pub fn projection_consistency_check(sf: &SceneFlowField, rig: &CameraRig) -> ResidualStats {
    let cloud = reconstruct_point_flow(sf, rig);
    let f = rig.focal_length;
    let (cx, cy) = rig.principal_point;
    let (h, w) = (sf.height(), sf.width());
    let mut sum = 0.0;
    let mut max = 0.0f64;
    let mut checked = 0usize;
    let mut masked = 0usize;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !cloud.valid[i] {
                masked += 1;
                continue;
            }
            let p = cloud.position[i];
            let m = cloud.motion[i];
            let p1 = [p[0] + m[0], p[1] + m[1], p[2] + m[2]];
            let x1 = cx + f * p1[0] / p1[2];
            let y1 = cy + f * p1[1] / p1[2];
            let du = x1 - x as f64 - sf.flow.u.get(0, y, x);
            let dv = y1 - y as f64 - sf.flow.v.get(0, y, x);
            let r = du.hypot(dv);
            sum += r;
            max = max.max(r);
            checked += 1;
        }
    }
    ResidualStats {
        mean: if checked > 0 { sum / checked as f64 } else { 0.0 },
        max,
        checked,
        masked,
    }
}
