//! Procedural stereo scene-flow samples with closed-form ground truth.
//!
//! Scenes are textured fronto-parallel rectangles moving in front of a
//! textured background plane, imaged by a rectified pinhole stereo rig.
//! Every ground-truth value follows directly from the projection model:
//! disparity d = f*B/Z, flow = projected displacement of the surface point.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::io::{
    build_index, save_sample, DatasetIndex, FlowFormat, FormatError, Split, Subset,
};
use crate::types::{
    CameraRig, CoreError, DisparityPair, FlowField, Image2D, SceneFlowField, StereoQuad,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// A textured planar rectangle moving with constant 3D velocity.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ObjectSpec {
    /// Center (X, Y, Z) in meters at time t, left-camera frame.
    pub center: [f64; 3],
    /// Physical extent (width, height) in meters.
    pub size: (f64, f64),
    /// Displacement (Vx, Vy, Vz) in meters per frame.
    pub velocity: [f64; 3],
    pub texture_seed: u64,
}

/// Optional image degradation applied after rendering (ground truth is
/// left untouched).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DegradeSpec {
    /// Std-dev of additive Gaussian noise, in [-1, 1] units.
    pub noise_sigma: f64,
    /// Max absolute brightness shift drawn uniformly per image.
    pub brightness_shift: f64,
}

/// One renderable scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub rig: CameraRig,
    pub background_depth: f64,
    pub objects: Vec<ObjectSpec>,
    pub degrade: Option<DegradeSpec>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.height == 0 || self.width == 0 {
            return Err(SynthError::InvalidSpec("empty image".into()));
        }
        if self.background_depth.is_nan() || self.background_depth <= 0.0 {
            return Err(SynthError::InvalidSpec(format!(
                "background depth must be positive, got {}",
                self.background_depth
            )));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.center[2].is_nan() || o.center[2] <= 0.0 {
                return Err(SynthError::InvalidSpec(format!(
                    "object {i}: Z must be positive, got {}",
                    o.center[2]
                )));
            }
            let z1 = o.center[2] + o.velocity[2];
            if z1.is_nan() || z1 <= 0.0 {
                return Err(SynthError::InvalidSpec(format!(
                    "object {i}: Z+Vz must stay positive, got {}",
                    o.center[2] + o.velocity[2]
                )));
            }
            if o.size.0.is_nan() || o.size.1.is_nan() || o.size.0 <= 0.0 || o.size.1 <= 0.0 {
                return Err(SynthError::InvalidSpec(format!("object {i}: empty size")));
            }
        }
        Ok(())
    }
}

/// Band-limited procedural texture: three oriented sinusoids per channel
/// with amplitudes summing to one, so values stay in [-1, 1]. Wavelengths
/// are chosen relative to the surface's nearest depth so the finest
/// on-screen wavelength stays around ten pixels, keeping bilinear warps
/// accurate.
#[derive(Debug, Clone)]
struct Texture {
    // per channel: (kx, ky, phase, amplitude) per component
    components: [[(f64, f64, f64, f64); 3]; 3],
}

const TEXTURE_SCREEN_WAVELENGTHS: [f64; 3] = [24.0, 14.0, 10.0];
const TEXTURE_AMPLITUDES: [f64; 3] = [0.5, 0.3, 0.2];

impl Texture {
    /// `metric_per_pixel` is the surface extent of one pixel (Z_near / f).
    fn new(seed: u64, metric_per_pixel: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut components = [[(0.0, 0.0, 0.0, 0.0); 3]; 3];
        for channel in components.iter_mut() {
            for (k, slot) in channel.iter_mut().enumerate() {
                let wavelength = TEXTURE_SCREEN_WAVELENGTHS[k] * metric_per_pixel;
                let omega = std::f64::consts::TAU / wavelength;
                let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                *slot = (
                    omega * theta.cos(),
                    omega * theta.sin(),
                    phase,
                    TEXTURE_AMPLITUDES[k],
                );
            }
        }
        Self { components }
    }

    #[inline]
    fn sample(&self, channel: usize, s: f64, t: f64) -> f64 {
        let mut v = 0.0;
        for &(kx, ky, phase, amp) in &self.components[channel] {
            v += amp * (kx * s + ky * t + phase).sin();
        }
        v
    }
}

/// Pixel ownership: object index, or -1 for the background plane.
pub type OwnerMap = Vec<i32>;
pub const OWNER_BACKGROUND: i32 = -1;

/// A rendered sample plus the per-image ownership maps that tests and
/// consistency checks use to exclude occlusions.
#[derive(Debug, Clone)]
pub struct RenderedSample {
    pub quad: StereoQuad,
    pub gt: SceneFlowField,
    pub owner_left_t: OwnerMap,
    pub owner_left_t1: OwnerMap,
    pub owner_right_t: OwnerMap,
    pub owner_right_t1: OwnerMap,
    pub warnings: Vec<String>,
}

struct Camera {
    fx: f64,
    cx: f64,
    cy: f64,
    /// X offset of the camera center in meters (0 = left, baseline = right).
    offset_x: f64,
}

/// Renders one camera view at time tau (0 or 1) and its ownership map.
fn render_view(
    spec: &SceneSpec,
    textures: &[Texture],
    bg_texture: &Texture,
    cam: &Camera,
    tau: f64,
) -> (Vec<f64>, OwnerMap) {
    let (h, w) = (spec.height, spec.width);
    let plane = h * w;
    let mut data = vec![0.0f64; 3 * plane];
    let mut owners = vec![OWNER_BACKGROUND; plane];

    // Nearest-first ordering at this time instant; ties broken by index.
    let mut order: Vec<usize> = (0..spec.objects.len()).collect();
    order.sort_by(|&a, &b| {
        let za = spec.objects[a].center[2] + spec.objects[a].velocity[2] * tau;
        let zb = spec.objects[b].center[2] + spec.objects[b].velocity[2] * tau;
        za.partial_cmp(&zb).unwrap().then(a.cmp(&b))
    });

    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let mut hit: Option<(usize, f64, f64)> = None;
            for &oi in &order {
                let o = &spec.objects[oi];
                let z = o.center[2] + o.velocity[2] * tau;
                let xc = o.center[0] + o.velocity[0] * tau;
                let yc = o.center[1] + o.velocity[1] * tau;
                // Surface point where the pixel ray meets the plane z.
                let xp = (x as f64 - cam.cx) * z / cam.fx + cam.offset_x;
                let yp = (y as f64 - cam.cy) * z / cam.fx;
                if (xp - xc).abs() <= o.size.0 / 2.0 && (yp - yc).abs() <= o.size.1 / 2.0 {
                    hit = Some((oi, xp - xc, yp - yc));
                    break;
                }
            }
            match hit {
                Some((oi, s, t)) => {
                    owners[idx] = oi as i32;
                    for c in 0..3 {
                        data[c * plane + idx] = textures[oi].sample(c, s, t);
                    }
                }
                None => {
                    let z = spec.background_depth;
                    let xp = (x as f64 - cam.cx) * z / cam.fx + cam.offset_x;
                    let yp = (y as f64 - cam.cy) * z / cam.fx;
                    for c in 0..3 {
                        data[c * plane + idx] = bg_texture.sample(c, xp, yp);
                    }
                }
            }
        }
    }
    (data, owners)
}

/// Snaps normalized values to the 8-bit grid used by the PNG writer, so
/// in-memory samples match what a save/load round trip produces.
fn quantize(data: &mut [f64]) {
    for v in data.iter_mut() {
        let q = ((*v + 1.0) * 127.5).round().clamp(0.0, 255.0);
        *v = q / 127.5 - 1.0;
    }
}

fn degrade(data: &mut [f64], spec: &DegradeSpec, rng: &mut ChaCha8Rng) {
    let shift = rng.random_range(-spec.brightness_shift..=spec.brightness_shift);
    let normal = Normal::new(0.0, spec.noise_sigma.max(1e-12)).unwrap();
    for v in data.iter_mut() {
        *v = (*v + shift + normal.sample(rng)).clamp(-1.0, 1.0);
    }
}

/// Renders the stereo quad and exact ground truth for one scene.
///
/// `seed` only drives the optional degradation pass; geometry and texture
/// come from the spec, so identical (spec, seed) pairs render identically.
pub fn render_sample(spec: &SceneSpec, seed: u64) -> Result<RenderedSample, SynthError> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let plane = h * w;
    let f = spec.rig.focal_length;
    let (cx, cy) = spec.rig.principal_point;
    let baseline = spec.rig.baseline;

    let textures: Vec<Texture> = spec
        .objects
        .iter()
        .map(|o| {
            let z_near = o.center[2].min(o.center[2] + o.velocity[2]);
            Texture::new(o.texture_seed, z_near / f)
        })
        .collect();
    // Background texture seed is fixed by the sample seed so the plane is
    // stable across the four views.
    let bg_texture = Texture::new(seed ^ 0x9e3779b97f4a7c15, spec.background_depth / f);

    let left = Camera {
        fx: f,
        cx,
        cy,
        offset_x: 0.0,
    };
    let right = Camera {
        fx: f,
        cx,
        cy,
        offset_x: baseline,
    };

    let (mut img_lt, owner_left_t) = render_view(spec, &textures, &bg_texture, &left, 0.0);
    let (mut img_lt1, owner_left_t1) = render_view(spec, &textures, &bg_texture, &left, 1.0);
    let (mut img_rt, owner_right_t) = render_view(spec, &textures, &bg_texture, &right, 0.0);
    let (mut img_rt1, owner_right_t1) = render_view(spec, &textures, &bg_texture, &right, 1.0);

    if let Some(d) = &spec.degrade {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        for img in [&mut img_lt, &mut img_lt1, &mut img_rt, &mut img_rt1] {
            degrade(img, d, &mut rng);
        }
    }
    for img in [&mut img_lt, &mut img_lt1, &mut img_rt, &mut img_rt1] {
        quantize(img);
    }

    // Ground truth on the left-t pixel grid.
    let mut u = vec![0.0f64; plane];
    let mut v = vec![0.0f64; plane];
    let mut d_t = vec![0.0f64; plane];
    let mut d_t1 = vec![0.0f64; plane];
    let bg_disp = f * baseline / spec.background_depth;
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let oi = owner_left_t[idx];
            if oi == OWNER_BACKGROUND {
                d_t[idx] = bg_disp;
                d_t1[idx] = bg_disp;
            } else {
                let o = &spec.objects[oi as usize];
                let z = o.center[2];
                let z1 = z + o.velocity[2];
                let xp = (x as f64 - cx) * z / f;
                let yp = (y as f64 - cy) * z / f;
                let x1 = cx + f * (xp + o.velocity[0]) / z1;
                let y1 = cy + f * (yp + o.velocity[1]) / z1;
                u[idx] = x1 - x as f64;
                v[idx] = y1 - y as f64;
                d_t[idx] = f * baseline / z;
                d_t1[idx] = f * baseline / z1;
            }
        }
    }

    let mut warnings = Vec::new();
    for (i, o) in spec.objects.iter().enumerate() {
        for tau in [0.0, 1.0] {
            let z = o.center[2] + o.velocity[2] * tau;
            let xc = o.center[0] + o.velocity[0] * tau;
            let yc = o.center[1] + o.velocity[1] * tau;
            let x0 = cx + f * (xc - o.size.0 / 2.0) / z;
            let x1 = cx + f * (xc + o.size.0 / 2.0) / z;
            let y0 = cy + f * (yc - o.size.1 / 2.0) / z;
            let y1 = cy + f * (yc + o.size.1 / 2.0) / z;
            if x1 < 0.0 || x0 > (w - 1) as f64 || y1 < 0.0 || y0 > (h - 1) as f64 {
                warnings.push(format!(
                    "object {i} projects entirely outside the left frame at t{}",
                    if tau == 0.0 { "" } else { "+1" }
                ));
            }
        }
    }

    let image = |data: Vec<f64>| Image2D::new(h, w, 3, data);
    let quad = StereoQuad::new(
        image(img_lt)?,
        image(img_lt1)?,
        image(img_rt)?,
        image(img_rt1)?,
    )?;
    let chan = |data: Vec<f64>| Image2D::new(h, w, 1, data);
    let gt = SceneFlowField::new(
        FlowField::new(chan(u)?, chan(v)?)?,
        DisparityPair::new_ground_truth(chan(d_t)?, chan(d_t1)?)?,
    )?;

    Ok(RenderedSample {
        quad,
        gt,
        owner_left_t,
        owner_left_t1,
        owner_right_t,
        owner_right_t1,
        warnings,
    })
}

/// Tunable ranges for random scene sampling; defaults give desk-scale
/// 64x64 samples with sub-8-pixel displacements.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub focal_length: f64,
    pub baseline: f64,
    pub background_depth: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_depth: f64,
    pub max_depth: f64,
    pub min_object_size: f64,
    pub max_object_size: f64,
    /// Max |Vx|, |Vy| in meters/frame.
    pub max_lateral_speed: f64,
    /// Max approach speed (negative Vz magnitude).
    pub max_approach_speed: f64,
    /// Max recede speed (positive Vz).
    pub max_recede_speed: f64,
    pub degrade: Option<DegradeSpec>,
    pub flow_format: FlowFormat,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            focal_length: 64.0,
            baseline: 0.5,
            background_depth: 10.0,
            min_objects: 2,
            max_objects: 4,
            min_depth: 2.5,
            max_depth: 6.0,
            min_object_size: 0.8,
            max_object_size: 2.2,
            max_lateral_speed: 0.25,
            max_approach_speed: 0.35,
            max_recede_speed: 0.6,
            degrade: None,
            flow_format: FlowFormat::Flo,
        }
    }
}

impl SceneConfig {
    pub fn rig(&self) -> CameraRig {
        CameraRig::new(
            self.focal_length,
            (
                (self.width as f64 - 1.0) / 2.0,
                (self.height as f64 - 1.0) / 2.0,
            ),
            self.baseline,
        )
        .expect("config rig")
    }
}

/// Draws a random scene within the config's ranges.
pub fn random_scene(config: &SceneConfig, rng: &mut ChaCha8Rng) -> SceneSpec {
    let rig = config.rig();
    let f = rig.focal_length;
    let (cx, cy) = rig.principal_point;
    let n = rng.random_range(config.min_objects..=config.max_objects);
    let mut objects = Vec::with_capacity(n);
    for _ in 0..n {
        let z = rng.random_range(config.min_depth..config.max_depth);
        // Place the center so it projects well inside the frame.
        let px = rng.random_range(0.2 * config.width as f64..0.8 * config.width as f64);
        let py = rng.random_range(0.2 * config.height as f64..0.8 * config.height as f64);
        let x = (px - cx) * z / f;
        let y = (py - cy) * z / f;
        let vx = rng.random_range(-config.max_lateral_speed..config.max_lateral_speed);
        let vy = rng.random_range(-config.max_lateral_speed..config.max_lateral_speed);
        let vz_min = -config.max_approach_speed.min(z - config.min_depth.min(1.0));
        let vz = rng.random_range(vz_min..config.max_recede_speed);
        objects.push(ObjectSpec {
            center: [x, y, z],
            size: (
                rng.random_range(config.min_object_size..config.max_object_size),
                rng.random_range(config.min_object_size..config.max_object_size),
            ),
            velocity: [vx, vy, vz],
            texture_seed: rng.random(),
        });
    }
    SceneSpec {
        height: config.height,
        width: config.width,
        rig,
        background_depth: config.background_depth,
        objects,
        degrade: config.degrade,
    }
}

/// Renders `n_samples` scenes (per-sample seed = base_seed + i), writes
/// them under `out_root/synthetic/<split>/`, and indexes the result.
pub fn generate_dataset(
    config: &SceneConfig,
    n_samples: usize,
    base_seed: u64,
    out_root: &Path,
    split: Split,
) -> Result<DatasetIndex, SynthError> {
    let dir = out_root.join(Subset::Synthetic.to_string()).join(split.to_string());
    for i in 0..n_samples {
        let seed = base_seed.wrapping_add(i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_scene(config, &mut rng);
        let rendered = render_sample(&spec, seed)?;
        for warning in &rendered.warnings {
            log::warn!("sample {i}: {warning}");
        }
        save_sample(
            &dir.join(format!("{i:06}")),
            &rendered.quad,
            &rendered.gt,
            config.flow_format,
        )?;
    }
    Ok(build_index(out_root, split, Subset::Synthetic)?)
}

/// Mean/max absolute photometric residual over the pixels a warp check
/// could validate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpStats {
    pub mean_abs: f64,
    pub max_abs: f64,
    pub checked_pixels: usize,
    pub total_pixels: usize,
}

#[inline]
fn bilinear(img: &Image2D, c: usize, xf: f64, yf: f64) -> Option<f64> {
    let (h, w) = (img.height() as f64, img.width() as f64);
    if xf < 0.0 || yf < 0.0 || xf > w - 1.0 || yf > h - 1.0 {
        return None;
    }
    let x0 = xf.floor() as usize;
    let y0 = yf.floor() as usize;
    let x1 = (x0 + 1).min(img.width() - 1);
    let y1 = (y0 + 1).min(img.height() - 1);
    let ax = xf - x0 as f64;
    let ay = yf - y0 as f64;
    let v00 = img.get(c, y0, x0);
    let v01 = img.get(c, y0, x1);
    let v10 = img.get(c, y1, x0);
    let v11 = img.get(c, y1, x1);
    Some(v00 * (1.0 - ay) * (1.0 - ax) + v01 * (1.0 - ay) * ax + v10 * ay * (1.0 - ax) + v11 * ay * ax)
}

/// True when the four bilinear neighbors of (xf, yf) share `owner`.
fn neighbors_match(owners: &OwnerMap, w: usize, h: usize, xf: f64, yf: f64, owner: i32) -> bool {
    if xf < 0.0 || yf < 0.0 || xf > (w - 1) as f64 || yf > (h - 1) as f64 {
        return false;
    }
    let x0 = xf.floor() as usize;
    let y0 = yf.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    [(y0, x0), (y0, x1), (y1, x0), (y1, x1)]
        .iter()
        .all(|&(y, x)| owners[y * w + x] == owner)
}

/// Photometric check: warping left-t by the ground-truth flow should
/// reproduce left-t+1 on pixels that stay visible.
pub fn flow_warp_error(sample: &RenderedSample) -> WarpStats {
    let (h, w) = (sample.quad.height(), sample.quad.width());
    let mut sum = 0.0;
    let mut max = 0.0f64;
    let mut checked = 0usize;
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let owner = sample.owner_left_t[idx];
            let xf = x as f64 + sample.gt.flow.u.get(0, y, x);
            let yf = y as f64 + sample.gt.flow.v.get(0, y, x);
            if !neighbors_match(&sample.owner_left_t1, w, h, xf, yf, owner) {
                continue;
            }
            for c in 0..3 {
                let warped = bilinear(&sample.quad.left_t1, c, xf, yf).unwrap();
                let err = (warped - sample.quad.left_t.get(c, y, x)).abs();
                sum += err;
                max = max.max(err);
            }
            checked += 1;
        }
    }
    WarpStats {
        mean_abs: if checked > 0 { sum / (checked * 3) as f64 } else { 0.0 },
        max_abs: max,
        checked_pixels: checked,
        total_pixels: h * w,
    }
}

/// Photometric check: warping right-t by the ground-truth disparity should
/// reproduce left-t on pixels visible in both views.
pub fn stereo_warp_error(sample: &RenderedSample) -> WarpStats {
    let (h, w) = (sample.quad.height(), sample.quad.width());
    let mut sum = 0.0;
    let mut max = 0.0f64;
    let mut checked = 0usize;
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let owner = sample.owner_left_t[idx];
            let xf = x as f64 - sample.gt.disparities.d_t.get(0, y, x);
            let yf = y as f64;
            if !neighbors_match(&sample.owner_right_t, w, h, xf, yf, owner) {
                continue;
            }
            for c in 0..3 {
                let warped = bilinear(&sample.quad.right_t, c, xf, yf).unwrap();
                let err = (warped - sample.quad.left_t.get(c, y, x)).abs();
                sum += err;
                max = max.max(err);
            }
            checked += 1;
        }
    }
    WarpStats {
        mean_abs: if checked > 0 { sum / (checked * 3) as f64 } else { 0.0 },
        max_abs: max,
        checked_pixels: checked,
        total_pixels: h * w,
    }
}
