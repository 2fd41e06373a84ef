//! Dense CHW / NCHW tensors and the packing contracts between the image
//! domain types and the network input/output grids.
//!
//! Channel order is fixed here and nowhere else:
//! input = [left_t RGB, left_t1 RGB, right_t RGB, right_t1 RGB] (12 channels),
//! target = [u, v, d_t, d_t1] (4 channels).

use crate::types::{
    CoreError, DisparityPair, FlowField, Image2D, SceneFlowField, StereoQuad,
};

/// Channel count of the stacked stereo input.
pub const INPUT_CHANNELS: usize = 12;
/// Channel count of the scene-flow target.
pub const TARGET_CHANNELS: usize = 4;

/// Target channel indices.
pub const CH_U: usize = 0;
pub const CH_V: usize = 1;
pub const CH_DT: usize = 2;
pub const CH_DT1: usize = 3;

/// A single-sample planar tensor of shape (channels, height, width).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width, "tensor data length");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Contiguous plane of one channel.
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let plane = self.height * self.width;
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A batch of same-shape tensors, planar NCHW.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub n: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Batch {
    pub fn zeros(n: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            n,
            channels,
            height,
            width,
            data: vec![0.0; n * channels * height * width],
        }
    }

    /// Stacks single-sample tensors into a batch. Panics on shape mismatch;
    /// callers batch tensors produced by the packing functions below, which
    /// already guarantee uniform shapes.
    pub fn stack(samples: &[&Tensor]) -> Self {
        assert!(!samples.is_empty(), "cannot stack an empty batch");
        let (c, h, w) = (samples[0].channels, samples[0].height, samples[0].width);
        let mut data = Vec::with_capacity(samples.len() * c * h * w);
        for s in samples {
            assert_eq!(
                (s.channels, s.height, s.width),
                (c, h, w),
                "batch samples must share shape"
            );
            data.extend_from_slice(&s.data);
        }
        Self {
            n: samples.len(),
            channels: c,
            height: h,
            width: w,
            data,
        }
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// One sample as a contiguous CHW slice.
    pub fn sample(&self, i: usize) -> &[f64] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let len = self.sample_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    /// Copies one sample back out as a standalone tensor.
    pub fn extract(&self, i: usize) -> Tensor {
        Tensor::from_vec(
            self.channels,
            self.height,
            self.width,
            self.sample(i).to_vec(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// The 12 x H x W network input grid.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTensor(pub Tensor);

/// The 4 x H x W network target/prediction grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTensor(pub Tensor);

/// Stacks the four images of a quad into a 12-channel grid, channels
/// ordered [left_t RGB, left_t1 RGB, right_t RGB, right_t1 RGB].
pub fn pack_input(quad: &StereoQuad) -> InputTensor {
    let (h, w) = (quad.height(), quad.width());
    let mut t = Tensor::zeros(INPUT_CHANNELS, h, w);
    for (slot, img) in [&quad.left_t, &quad.left_t1, &quad.right_t, &quad.right_t1]
        .iter()
        .enumerate()
    {
        for c in 0..3 {
            t.channel_mut(slot * 3 + c).copy_from_slice(img.channel(c));
        }
    }
    InputTensor(t)
}

/// Inverse of [`pack_input`]. Values pass through bit-exactly.
pub fn unpack_input(input: &InputTensor) -> Result<StereoQuad, CoreError> {
    let t = &input.0;
    let (h, w) = (t.height, t.width);
    let mut images = Vec::with_capacity(4);
    for slot in 0..4 {
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            data.extend_from_slice(t.channel(slot * 3 + c));
        }
        images.push(Image2D::new(h, w, 3, data)?);
    }
    let right_t1 = images.pop().unwrap();
    let right_t = images.pop().unwrap();
    let left_t1 = images.pop().unwrap();
    let left_t = images.pop().unwrap();
    StereoQuad::new(left_t, left_t1, right_t, right_t1)
}

/// Packs a scene-flow field into a 4-channel grid: [u, v, d_t, d_t1].
pub fn pack_target(sf: &SceneFlowField) -> TargetTensor {
    let (h, w) = (sf.height(), sf.width());
    let mut t = Tensor::zeros(TARGET_CHANNELS, h, w);
    t.channel_mut(CH_U).copy_from_slice(sf.flow.u.channel(0));
    t.channel_mut(CH_V).copy_from_slice(sf.flow.v.channel(0));
    t.channel_mut(CH_DT)
        .copy_from_slice(sf.disparities.d_t.channel(0));
    t.channel_mut(CH_DT1)
        .copy_from_slice(sf.disparities.d_t1.channel(0));
    TargetTensor(t)
}

/// Inverse of [`pack_target`]. Fails on non-finite values (the constructors
/// reject them), which is how NaN predictions surface.
pub fn unpack_target(target: &TargetTensor) -> Result<SceneFlowField, CoreError> {
    let t = &target.0;
    let (h, w) = (t.height, t.width);
    let plane = |c: usize| Image2D::new(h, w, 1, t.channel(c).to_vec());
    let flow = FlowField::new(plane(CH_U)?, plane(CH_V)?)?;
    let disparities = DisparityPair::new(plane(CH_DT)?, plane(CH_DT1)?)?;
    SceneFlowField::new(flow, disparities)
}
