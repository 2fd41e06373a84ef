//! Core data model shared by every other module.
//!
//! All pixel data is stored planar (channel-major, row-major within a
//! channel) as `f64`. File codecs convert to/from `f32` at the boundary.

use thiserror::Error;

/// Errors raised by the data-model constructors.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("image dimensions must be at least 1x1, got {height}x{width}")]
    EmptyImage { height: usize, width: usize },
    #[error("unsupported channel count {channels} (expected 1 or 3)")]
    BadChannelCount { channels: usize },
    #[error("data length {got} does not match {channels}x{height}x{width}={expected}")]
    DataLength {
        got: usize,
        expected: usize,
        channels: usize,
        height: usize,
        width: usize,
    },
    #[error("non-finite value {value} at channel {channel}, pixel ({y}, {x})")]
    NonFinite {
        value: f64,
        channel: usize,
        y: usize,
        x: usize,
    },
    #[error("dimension mismatch: {name} is {got_h}x{got_w}, expected {want_h}x{want_w}")]
    DimensionMismatch {
        name: &'static str,
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },
    #[error("{name} must be {expected}-channel, got {got}")]
    ChannelMismatch {
        name: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("{name}: pixel value {value} outside normalized range [-1, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("ground-truth disparity {name} has negative value {value} at pixel ({y}, {x})")]
    NegativeDisparity {
        name: &'static str,
        value: f64,
        y: usize,
        x: usize,
    },
    #[error("camera rig invalid: {reason}")]
    BadRig { reason: String },
}

/// A dense real-valued raster with 1 or 3 channels, planar layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image2D {
    /// Builds an image from planar data, rejecting bad shapes and
    /// non-finite values.
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, CoreError> {
        if height == 0 || width == 0 {
            return Err(CoreError::EmptyImage { height, width });
        }
        if channels != 1 && channels != 3 {
            return Err(CoreError::BadChannelCount { channels });
        }
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(CoreError::DataLength {
                got: data.len(),
                expected,
                channels,
                height,
                width,
            });
        }
        for (i, &v) in data.iter().enumerate() {
            if !v.is_finite() {
                let plane = height * width;
                return Err(CoreError::NonFinite {
                    value: v,
                    channel: i / plane,
                    y: (i % plane) / width,
                    x: i % width,
                });
            }
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// All-zero image.
    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self, CoreError> {
        Self::new(height, width, channels, vec![0.0; channels * height * width])
    }

    /// Fills a single-channel image from a per-pixel closure.
    pub fn from_fn_1ch(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self, CoreError> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self::new(height, width, 1, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Planar data: channel 0 rows, then channel 1, ...
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f64 {
        debug_assert!(channel < self.channels && y < self.height && x < self.width);
        self.data[(channel * self.height + y) * self.width + x]
    }

    /// One channel plane as a contiguous row-major slice.
    pub fn channel(&self, channel: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[channel * plane..(channel + 1) * plane]
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    fn expect_dims(
        &self,
        name: &'static str,
        h: usize,
        w: usize,
        channels: usize,
    ) -> Result<(), CoreError> {
        if self.channels != channels {
            return Err(CoreError::ChannelMismatch {
                name,
                got: self.channels,
                expected: channels,
            });
        }
        if self.height != h || self.width != w {
            return Err(CoreError::DimensionMismatch {
                name,
                got_h: self.height,
                got_w: self.width,
                want_h: h,
                want_w: w,
            });
        }
        Ok(())
    }
}

/// The conditioning input: left/right RGB images at t and t+1, values
/// normalized to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct StereoQuad {
    pub left_t: Image2D,
    pub left_t1: Image2D,
    pub right_t: Image2D,
    pub right_t1: Image2D,
}

impl StereoQuad {
    pub fn new(
        left_t: Image2D,
        left_t1: Image2D,
        right_t: Image2D,
        right_t1: Image2D,
    ) -> Result<Self, CoreError> {
        let (h, w) = (left_t.height(), left_t.width());
        left_t.expect_dims("left_t", h, w, 3)?;
        left_t1.expect_dims("left_t1", h, w, 3)?;
        right_t.expect_dims("right_t", h, w, 3)?;
        right_t1.expect_dims("right_t1", h, w, 3)?;
        for (name, img) in [
            ("left_t", &left_t),
            ("left_t1", &left_t1),
            ("right_t", &right_t),
            ("right_t1", &right_t1),
        ] {
            for &v in img.data() {
                if !(-1.0..=1.0).contains(&v) {
                    return Err(CoreError::OutOfRange { name, value: v });
                }
            }
        }
        Ok(Self {
            left_t,
            left_t1,
            right_t,
            right_t1,
        })
    }

    pub fn height(&self) -> usize {
        self.left_t.height()
    }

    pub fn width(&self) -> usize {
        self.left_t.width()
    }
}

/// Per-pixel optical flow in pixels: horizontal u, vertical v.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub u: Image2D,
    pub v: Image2D,
}

impl FlowField {
    pub fn new(u: Image2D, v: Image2D) -> Result<Self, CoreError> {
        let (h, w) = (u.height(), u.width());
        u.expect_dims("u", h, w, 1)?;
        v.expect_dims("v", h, w, 1)?;
        Ok(Self { u, v })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            u: Image2D::zeros(height, width, 1).expect("nonzero dims"),
            v: Image2D::zeros(height, width, 1).expect("nonzero dims"),
        }
    }

    pub fn height(&self) -> usize {
        self.u.height()
    }

    pub fn width(&self) -> usize {
        self.u.width()
    }
}

/// Disparities of the stereo pair at t and t+1, in pixels.
///
/// Ground truth is non-negative by convention; predictions may transiently
/// go negative and are not clamped, so only [`DisparityPair::new_ground_truth`]
/// enforces the sign.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityPair {
    pub d_t: Image2D,
    pub d_t1: Image2D,
}

impl DisparityPair {
    pub fn new(d_t: Image2D, d_t1: Image2D) -> Result<Self, CoreError> {
        let (h, w) = (d_t.height(), d_t.width());
        d_t.expect_dims("d_t", h, w, 1)?;
        d_t1.expect_dims("d_t1", h, w, 1)?;
        Ok(Self { d_t, d_t1 })
    }

    /// Like [`new`](Self::new) but rejects negative disparities.
    pub fn new_ground_truth(d_t: Image2D, d_t1: Image2D) -> Result<Self, CoreError> {
        for (name, img) in [("d_t", &d_t), ("d_t1", &d_t1)] {
            let w = img.width();
            for (i, &v) in img.data().iter().enumerate() {
                if v < 0.0 {
                    return Err(CoreError::NegativeDisparity {
                        name,
                        value: v,
                        y: i / w,
                        x: i % w,
                    });
                }
            }
        }
        Self::new(d_t, d_t1)
    }

    pub fn height(&self) -> usize {
        self.d_t.height()
    }

    pub fn width(&self) -> usize {
        self.d_t.width()
    }
}

/// The 4-channel scene-flow field: optical flow plus the two disparities.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFlowField {
    pub flow: FlowField,
    pub disparities: DisparityPair,
}

impl SceneFlowField {
    pub fn new(flow: FlowField, disparities: DisparityPair) -> Result<Self, CoreError> {
        if flow.height() != disparities.height() || flow.width() != disparities.width() {
            return Err(CoreError::DimensionMismatch {
                name: "disparities",
                got_h: disparities.height(),
                got_w: disparities.width(),
                want_h: flow.height(),
                want_w: flow.width(),
            });
        }
        Ok(Self { flow, disparities })
    }

    pub fn height(&self) -> usize {
        self.flow.height()
    }

    pub fn width(&self) -> usize {
        self.flow.width()
    }
}

/// Calibrated stereo rig: focal length and principal point in pixels,
/// baseline in meters. Depth follows Z = f*B/d.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraRig {
    pub focal_length: f64,
    pub principal_point: (f64, f64),
    pub baseline: f64,
}

impl CameraRig {
    pub fn new(
        focal_length: f64,
        principal_point: (f64, f64),
        baseline: f64,
    ) -> Result<Self, CoreError> {
        if focal_length.is_nan() || focal_length <= 0.0 || !focal_length.is_finite() {
            return Err(CoreError::BadRig {
                reason: format!("focal_length must be positive and finite, got {focal_length}"),
            });
        }
        if baseline.is_nan() || baseline <= 0.0 || !baseline.is_finite() {
            return Err(CoreError::BadRig {
                reason: format!("baseline must be positive and finite, got {baseline}"),
            });
        }
        if !principal_point.0.is_finite() || !principal_point.1.is_finite() {
            return Err(CoreError::BadRig {
                reason: "principal point must be finite".into(),
            });
        }
        Ok(Self {
            focal_length,
            principal_point,
            baseline,
        })
    }

    /// Disparity of a point at depth `z` (meters): d = f*B/z.
    pub fn disparity_at_depth(&self, z: f64) -> f64 {
        self.focal_length * self.baseline / z
    }

    /// Depth of a point with disparity `d` (pixels): Z = f*B/d.
    pub fn depth_at_disparity(&self, d: f64) -> f64 {
        self.focal_length * self.baseline / d
    }
}
