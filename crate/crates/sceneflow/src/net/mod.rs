//! Generator and critic networks as declarative specs plus flat named
//! parameter sets, with hand-written forward and backward passes.
//!
//! The generator is an encoder-decoder built from conv(3x3)-batchnorm-
//! leakyReLU units: stride-2 convs going down, nearest-upsample + conv
//! going up, skip connections merging encoder stages into decoder stages
//! of the same resolution, and a linear 3x3 output conv (flow and
//! disparity magnitudes are unbounded). The critic is three strided conv
//! units followed by three dense layers with one dropout layer; it scores
//! a bare 4-channel field, unconditioned on the images.

pub mod checkpoint;
pub mod layers;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{Batch, Tensor, INPUT_CHANNELS, TARGET_CHANNELS};
use layers::*;

/// Running-statistics momentum for batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid spec: {0}")]
    BadSpec(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("input {h}x{w} not divisible by {required} (2^depth)")]
    Indivisible { h: usize, w: usize, required: usize },
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
}

/// How encoder features are merged into the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkipMode {
    Concatenate,
    Add,
}

/// Critic output head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputMode {
    /// Sigmoid-squashed probability in (0, 1).
    Probability,
    /// Unbounded score (Wasserstein critic).
    Score,
}

/// Forward-pass phase: training uses batch statistics and active dropout,
/// evaluation uses running statistics and bypasses dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    /// Number of stride-2 downsampling stages.
    pub depth: usize,
    pub base_channels: usize,
    pub use_batchnorm: bool,
    pub leaky_slope: f64,
    pub skip_mode: SkipMode,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 32,
            use_batchnorm: true,
            leaky_slope: 0.2,
            skip_mode: SkipMode::Concatenate,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.depth < 1 {
            return Err(NetError::BadSpec("generator depth must be >= 1".into()));
        }
        if self.base_channels < 1 {
            return Err(NetError::BadSpec("base_channels must be >= 1".into()));
        }
        Ok(())
    }

    /// Channels of encoder stage i (1-based), doubling per stage and
    /// capped at 8x base.
    pub fn enc_channels(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|i| (self.base_channels << i.min(3)).min(self.base_channels * 8))
            .collect()
    }

    /// Output channels of decoder stage j (1-based).
    fn dec_out_channels(&self, j: usize) -> usize {
        if j >= 2 {
            self.enc_channels()[j - 2]
        } else {
            self.base_channels
        }
    }

    /// Channels entering decoder stage j (before upsampling).
    fn dec_in_channels(&self, j: usize) -> usize {
        let enc = self.enc_channels();
        if j == self.depth {
            enc[self.depth - 1]
        } else {
            match self.skip_mode {
                SkipMode::Concatenate => 2 * enc[j - 1],
                SkipMode::Add => enc[j - 1],
            }
        }
    }

    pub fn required_divisor(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DiscriminatorSpec {
    pub conv_channels: [usize; 3],
    pub dense_widths: [usize; 3],
    pub dropout_rate: f64,
    pub leaky_slope: f64,
    pub use_batchnorm: bool,
    pub output_mode: OutputMode,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            conv_channels: [32, 64, 128],
            dense_widths: [256, 64, 1],
            dropout_rate: 0.4,
            leaky_slope: 0.2,
            use_batchnorm: true,
            output_mode: OutputMode::Score,
        }
    }
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.conv_channels.contains(&0) || self.dense_widths.contains(&0) {
            return Err(NetError::BadSpec("zero-width layer".into()));
        }
        if self.dense_widths[2] != 1 {
            return Err(NetError::BadSpec(
                "last dense layer must have width 1 (scalar score)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NetError::BadSpec(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Flattened feature count after the three stride-2 convs.
    pub fn flat_features(&self, input_h: usize, input_w: usize) -> Result<usize, NetError> {
        if !input_h.is_multiple_of(8) || !input_w.is_multiple_of(8) || input_h < 8 || input_w < 8 {
            return Err(NetError::Indivisible {
                h: input_h,
                w: input_w,
                required: 8,
            });
        }
        Ok(self.conv_channels[2] * (input_h / 8) * (input_w / 8))
    }
}

/// Role of a named parameter array. Learnable kinds are optimized and
/// (for the critic) clipped; running statistics are neither.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    NormRunningMean,
    NormRunningVar,
}

impl ParamKind {
    pub fn learnable(&self) -> bool {
        !matches!(self, ParamKind::NormRunningMean | ParamKind::NormRunningVar)
    }
}

/// One named parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Ordered collection of named parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, kind: ParamKind, shape: Vec<usize>, values: Vec<f64>) {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "shape/value mismatch for {name}"
        );
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter {name}"
        );
        self.by_name.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            kind,
            shape,
            values,
        });
    }

    pub fn index_of(&self, name: &str) -> usize {
        *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, name: &str) -> &Param {
        &self.params[self.index_of(name)]
    }

    pub fn values(&self, name: &str) -> &[f64] {
        &self.get(name).values
    }

    pub fn values_mut(&mut self, name: &str) -> &mut Vec<f64> {
        let i = self.index_of(name);
        &mut self.params[i].values
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total learnable scalar count.
    pub fn learnable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.learnable())
            .map(|p| p.values.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.values.iter().all(|v| v.is_finite()))
    }

    /// Bitwise equality over every array, the comparison the training
    /// freeze/isolation contracts are stated in.
    pub fn bit_identical(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.values.len() == b.values.len()
                    && a.values
                        .iter()
                        .zip(&b.values)
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

impl Default for ParameterSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradients, index-aligned with a [`ParameterSet`].
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub grads: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        Self {
            grads: params
                .params()
                .iter()
                .map(|p| vec![0.0; p.values.len()])
                .collect(),
        }
    }

    fn accumulate(&mut self, index: usize, values: &[f64]) {
        let g = &mut self.grads[index];
        for (a, b) in g.iter_mut().zip(values) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

fn normal_fill(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("std > 0");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// He-style fan-in scaling with the leaky-ReLU gain.
fn hidden_std(fan_in: usize, slope: f64) -> f64 {
    (2.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt()
}

fn add_conv(
    params: &mut ParameterSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    std: f64,
) {
    params.add(
        &format!("{prefix}/conv/weight"),
        ParamKind::Weight,
        vec![cout, cin, k, k],
        normal_fill(rng, cout * cin * k * k, std),
    );
    params.add(
        &format!("{prefix}/conv/bias"),
        ParamKind::Bias,
        vec![cout],
        vec![0.0; cout],
    );
}

fn add_bn(params: &mut ParameterSet, prefix: &str, c: usize) {
    params.add(
        &format!("{prefix}/bn/gamma"),
        ParamKind::NormScale,
        vec![c],
        vec![1.0; c],
    );
    params.add(
        &format!("{prefix}/bn/beta"),
        ParamKind::NormShift,
        vec![c],
        vec![0.0; c],
    );
    params.add(
        &format!("{prefix}/bn/running_mean"),
        ParamKind::NormRunningMean,
        vec![c],
        vec![0.0; c],
    );
    params.add(
        &format!("{prefix}/bn/running_var"),
        ParamKind::NormRunningVar,
        vec![c],
        vec![1.0; c],
    );
}

/// Deterministic, fan-in-scaled initialization of all generator
/// parameters: He-normal weights, zero biases, identity norm stats.
pub fn init_generator(spec: &GeneratorSpec, seed: u64) -> Result<ParameterSet, NetError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    let enc = spec.enc_channels();
    let mut cin = INPUT_CHANNELS;
    for (i, &cout) in enc.iter().enumerate() {
        let prefix = format!("gen/enc{}", i + 1);
        add_conv(
            &mut params,
            &mut rng,
            &prefix,
            cin,
            cout,
            3,
            hidden_std(cin * 9, spec.leaky_slope),
        );
        if spec.use_batchnorm {
            add_bn(&mut params, &prefix, cout);
        }
        cin = cout;
    }
    for j in (1..=spec.depth).rev() {
        let prefix = format!("gen/dec{j}");
        let cin = spec.dec_in_channels(j);
        let cout = spec.dec_out_channels(j);
        add_conv(
            &mut params,
            &mut rng,
            &prefix,
            cin,
            cout,
            3,
            hidden_std(cin * 9, spec.leaky_slope),
        );
        if spec.use_batchnorm {
            add_bn(&mut params, &prefix, cout);
        }
    }
    // Final layer is linear: plain 1/sqrt(fan_in) scale.
    let out_in = spec.base_channels;
    add_conv(
        &mut params,
        &mut rng,
        "gen/out",
        out_in,
        TARGET_CHANNELS,
        3,
        (1.0 / (out_in as f64 * 9.0)).sqrt(),
    );
    Ok(params)
}

/// Deterministic critic initialization; the dense widths bind to the
/// input resolution through the flatten layer.
pub fn init_critic(
    spec: &DiscriminatorSpec,
    input_h: usize,
    input_w: usize,
    seed: u64,
) -> Result<ParameterSet, NetError> {
    spec.validate()?;
    let flat = spec.flat_features(input_h, input_w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    let mut cin = TARGET_CHANNELS;
    for (i, &cout) in spec.conv_channels.iter().enumerate() {
        let prefix = format!("critic/conv{}", i + 1);
        add_conv(
            &mut params,
            &mut rng,
            &prefix,
            cin,
            cout,
            3,
            hidden_std(cin * 9, spec.leaky_slope),
        );
        if spec.use_batchnorm {
            add_bn(&mut params, &prefix, cout);
        }
        cin = cout;
    }
    let mut in_f = flat;
    for (i, &out_f) in spec.dense_widths.iter().enumerate() {
        let prefix = format!("critic/dense{}", i + 1);
        let std = if i == 2 {
            (1.0 / in_f as f64).sqrt()
        } else {
            hidden_std(in_f, spec.leaky_slope)
        };
        params.add(
            &format!("{prefix}/weight"),
            ParamKind::Weight,
            vec![out_f, in_f],
            normal_fill(&mut rng, out_f * in_f, std),
        );
        params.add(
            &format!("{prefix}/bias"),
            ParamKind::Bias,
            vec![out_f],
            vec![0.0; out_f],
        );
        in_f = out_f;
    }
    Ok(params)
}

/// Cache of one conv(-bn)-leakyReLU unit.
struct UnitCache {
    prefix: String,
    conv_input: Batch,
    bn: Option<BnCache>,
    act_input: Batch,
}

#[allow(clippy::too_many_arguments)]
fn unit_forward(
    params: &ParameterSet,
    prefix: &str,
    input: Batch,
    cout: usize,
    stride: usize,
    use_bn: bool,
    slope: f64,
    phase: Phase,
) -> (Batch, UnitCache) {
    let weight = params.values(&format!("{prefix}/conv/weight"));
    let bias = params.values(&format!("{prefix}/conv/bias"));
    let conv_out = conv2d_forward(&input, weight, bias, cout, 3, stride, 1);
    let (act_input, bn) = if use_bn {
        let gamma = params.values(&format!("{prefix}/bn/gamma"));
        let beta = params.values(&format!("{prefix}/bn/beta"));
        match phase {
            Phase::Train => {
                let (out, cache) = batchnorm_forward_train(&conv_out, gamma, beta);
                (out, Some(cache))
            }
            Phase::Eval => {
                let rm = params.values(&format!("{prefix}/bn/running_mean"));
                let rv = params.values(&format!("{prefix}/bn/running_var"));
                (batchnorm_forward_eval(&conv_out, gamma, beta, rm, rv), None)
            }
        }
    } else {
        (conv_out, None)
    };
    let out = leaky_relu_forward(&act_input, slope);
    (
        out,
        UnitCache {
            prefix: prefix.to_string(),
            conv_input: input,
            bn,
            act_input,
        },
    )
}

/// Backward through one unit; accumulates parameter gradients and returns
/// the gradient with respect to the unit input.
fn unit_backward(
    params: &ParameterSet,
    cache: &UnitCache,
    stride: usize,
    slope: f64,
    grad_out: &Batch,
    grads: &mut GradientSet,
) -> Batch {
    let prefix = &cache.prefix;
    let grad_act = leaky_relu_backward(&cache.act_input, slope, grad_out);
    let grad_conv_out = if let Some(bn) = &cache.bn {
        let gamma = params.values(&format!("{prefix}/bn/gamma"));
        let (gin, ggamma, gbeta) = batchnorm_backward(bn, gamma, &grad_act);
        grads.accumulate(params.index_of(&format!("{prefix}/bn/gamma")), &ggamma);
        grads.accumulate(params.index_of(&format!("{prefix}/bn/beta")), &gbeta);
        gin
    } else {
        grad_act
    };
    let weight = params.values(&format!("{prefix}/conv/weight"));
    let cout = grad_conv_out.channels;
    let (grad_in, gw, gb) = conv2d_backward(
        &cache.conv_input,
        weight,
        cout,
        3,
        stride,
        1,
        &grad_conv_out,
    );
    grads.accumulate(params.index_of(&format!("{prefix}/conv/weight")), &gw);
    grads.accumulate(params.index_of(&format!("{prefix}/conv/bias")), &gb);
    grad_in
}

/// Activation cache of a full generator pass.
pub struct GeneratorCache {
    enc: Vec<UnitCache>,
    dec: Vec<UnitCache>,
    out_conv_input: Batch,
}

fn check_generator_input(spec: &GeneratorSpec, input: &Batch) -> Result<(), NetError> {
    if input.channels != INPUT_CHANNELS {
        return Err(NetError::Shape(format!(
            "generator input must have {INPUT_CHANNELS} channels, got {}",
            input.channels
        )));
    }
    let d = spec.required_divisor();
    if !input.height.is_multiple_of(d) || !input.width.is_multiple_of(d) || input.height < d || input.width < d
    {
        return Err(NetError::Indivisible {
            h: input.height,
            w: input.width,
            required: d,
        });
    }
    if !input.is_finite() {
        return Err(NetError::NonFinite("generator input"));
    }
    Ok(())
}

/// Full generator pass returning the 4-channel prediction and the cache
/// needed for backprop.
pub fn generator_apply(
    spec: &GeneratorSpec,
    params: &ParameterSet,
    input: &Batch,
    phase: Phase,
) -> Result<(Batch, GeneratorCache), NetError> {
    spec.validate()?;
    check_generator_input(spec, input)?;
    let enc_ch = spec.enc_channels();
    let mut enc_caches = Vec::with_capacity(spec.depth);
    let mut enc_outputs: Vec<Batch> = Vec::with_capacity(spec.depth);
    let mut x = input.clone();
    for (i, &cout) in enc_ch.iter().enumerate() {
        let (out, cache) = unit_forward(
            params,
            &format!("gen/enc{}", i + 1),
            x,
            cout,
            2,
            spec.use_batchnorm,
            spec.leaky_slope,
            phase,
        );
        enc_caches.push(cache);
        enc_outputs.push(out.clone());
        x = out;
    }

    // Decoder: j runs depth..1; d_depth = e_depth.
    let mut dec_caches: Vec<UnitCache> = Vec::with_capacity(spec.depth);
    let mut d = enc_outputs[spec.depth - 1].clone();
    for j in (1..=spec.depth).rev() {
        let up = upsample2_forward(&d);
        let (h_j, cache) = unit_forward(
            params,
            &format!("gen/dec{j}"),
            up,
            spec.dec_out_channels(j),
            1,
            spec.use_batchnorm,
            spec.leaky_slope,
            phase,
        );
        dec_caches.push(cache);
        if j >= 2 {
            let skip = &enc_outputs[j - 2];
            d = match spec.skip_mode {
                SkipMode::Concatenate => concat_channels(&h_j, skip),
                SkipMode::Add => {
                    let mut merged = h_j;
                    add_into(&mut merged, skip);
                    merged
                }
            };
        } else {
            d = h_j;
        }
    }

    let weight = params.values("gen/out/conv/weight");
    let bias = params.values("gen/out/conv/bias");
    let out = conv2d_forward(&d, weight, bias, TARGET_CHANNELS, 3, 1, 1);
    Ok((
        out,
        GeneratorCache {
            enc: enc_caches,
            dec: dec_caches,
            out_conv_input: d,
        },
    ))
}

/// Forward-only entry point: 12 x H x W in, 4 x H x W out.
pub fn generator_forward(
    spec: &GeneratorSpec,
    params: &ParameterSet,
    input: &Batch,
    phase: Phase,
) -> Result<Batch, NetError> {
    Ok(generator_apply(spec, params, input, phase)?.0)
}

/// Backward through the whole generator given d(loss)/d(output).
pub fn generator_backward(
    spec: &GeneratorSpec,
    params: &ParameterSet,
    cache: &GeneratorCache,
    grad_out: &Batch,
) -> GradientSet {
    let mut grads = GradientSet::zeros_like(params);
    let weight = params.values("gen/out/conv/weight");
    let (grad_d, gw, gb) = conv2d_backward(
        &cache.out_conv_input,
        weight,
        TARGET_CHANNELS,
        3,
        1,
        1,
        grad_out,
    );
    grads.accumulate(params.index_of("gen/out/conv/weight"), &gw);
    grads.accumulate(params.index_of("gen/out/conv/bias"), &gb);

    let enc_ch = spec.enc_channels();
    // Walk decoder stages j = 1..depth (reverse of forward order); dec
    // caches were pushed for j = depth..1, so cache index is depth - j.
    let mut skip_grads: Vec<Option<Batch>> = vec![None; spec.depth + 1];
    let mut g_h = grad_d;
    let mut g_e_depth: Option<Batch> = None;
    for j in 1..=spec.depth {
        let cache_idx = spec.depth - j;
        let g_up = unit_backward(
            params,
            &cache.dec[cache_idx],
            1,
            spec.leaky_slope,
            &g_h,
            &mut grads,
        );
        let g_d = upsample2_backward(&g_up);
        if j == spec.depth {
            g_e_depth = Some(g_d);
        } else {
            // d_j = merge(h_{j+1}, e_j); h_{j+1} has enc_ch[j-1] channels.
            match spec.skip_mode {
                SkipMode::Concatenate => {
                    let (gh_next, ge) = split_channels(&g_d, enc_ch[j - 1]);
                    skip_grads[j] = Some(ge);
                    g_h = gh_next;
                }
                SkipMode::Add => {
                    skip_grads[j] = Some(g_d.clone());
                    g_h = g_d;
                }
            }
        }
    }

    // Encoder backward, deepest first; skip grads join on the way down.
    let mut g = g_e_depth.expect("decoder reached the bottleneck");
    for i in (1..=spec.depth).rev() {
        if let Some(skip) = &skip_grads[i] {
            add_into(&mut g, skip);
        }
        g = unit_backward(
            params,
            &cache.enc[i - 1],
            2,
            spec.leaky_slope,
            &g,
            &mut grads,
        );
    }
    grads
}

/// Batch-norm running statistics observed during a training-mode pass.
pub struct BnUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn collect_bn(units: &[UnitCache]) -> Vec<BnUpdate> {
    units
        .iter()
        .filter_map(|u| {
            u.bn.as_ref().map(|bn| BnUpdate {
                prefix: u.prefix.clone(),
                mean: bn.mean.clone(),
                var: bn.var.clone(),
            })
        })
        .collect()
}

impl GeneratorCache {
    pub fn bn_updates(&self) -> Vec<BnUpdate> {
        let mut v = collect_bn(&self.enc);
        v.extend(collect_bn(&self.dec));
        v
    }
}

/// Folds batch statistics into the running statistics. Called by the
/// training steps, never by forward itself, so evaluating a loss is pure.
pub fn apply_bn_updates(params: &mut ParameterSet, updates: &[BnUpdate], momentum: f64) {
    for u in updates {
        let rm = params.values_mut(&format!("{}/bn/running_mean", u.prefix));
        for (r, &m) in rm.iter_mut().zip(&u.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        let rv = params.values_mut(&format!("{}/bn/running_var", u.prefix));
        for (r, &m) in rv.iter_mut().zip(&u.var) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
    }
}

/// Activation cache of a full critic pass.
pub struct CriticCache {
    conv_units: Vec<UnitCache>,
    conv_out_shape: (usize, usize, usize),
    flat: Vec<f64>,
    d1_pre: Vec<f64>,
    dropout_mask: Option<Vec<f64>>,
    d2_in: Vec<f64>,
    d2_pre: Vec<f64>,
    d2_act: Vec<f64>,
    squashed: Option<Vec<f64>>,
    n: usize,
}

impl CriticCache {
    pub fn bn_updates(&self) -> Vec<BnUpdate> {
        collect_bn(&self.conv_units)
    }
}

fn check_critic_input(input: &Batch) -> Result<(), NetError> {
    if input.channels != TARGET_CHANNELS {
        return Err(NetError::Shape(format!(
            "critic input must have {TARGET_CHANNELS} channels, got {}",
            input.channels
        )));
    }
    if !input.is_finite() {
        return Err(NetError::NonFinite("critic input"));
    }
    Ok(())
}

/// Full critic pass over a batch of 4-channel fields. `dropout_seed`
/// fixes the dropout mask of a training-phase pass; it is ignored in
/// evaluation, where dropout is bypassed.
pub fn critic_apply(
    spec: &DiscriminatorSpec,
    params: &ParameterSet,
    input: &Batch,
    phase: Phase,
    dropout_seed: u64,
) -> Result<(Vec<f64>, CriticCache), NetError> {
    spec.validate()?;
    check_critic_input(input)?;
    spec.flat_features(input.height, input.width)?;

    let mut x = input.clone();
    let mut conv_units = Vec::with_capacity(3);
    for (i, &cout) in spec.conv_channels.iter().enumerate() {
        let (out, cache) = unit_forward(
            params,
            &format!("critic/conv{}", i + 1),
            x,
            cout,
            2,
            spec.use_batchnorm,
            spec.leaky_slope,
            phase,
        );
        conv_units.push(cache);
        x = out;
    }
    let conv_out_shape = (x.channels, x.height, x.width);
    let n = x.n;
    let flat = x.data.clone();

    let w1 = params.values("critic/dense1/weight");
    let b1 = params.values("critic/dense1/bias");
    let d1_pre = dense_forward(&flat, n, w1, b1, spec.dense_widths[0]);
    let d1_act: Vec<f64> = d1_pre
        .iter()
        .map(|&v| if v < 0.0 { v * spec.leaky_slope } else { v })
        .collect();
    let (d2_in, dropout_mask) = if phase == Phase::Train && spec.dropout_rate > 0.0 {
        let (out, mask) = dropout_forward(&d1_act, spec.dropout_rate, dropout_seed);
        (out, Some(mask))
    } else {
        (d1_act, None)
    };

    let w2 = params.values("critic/dense2/weight");
    let b2 = params.values("critic/dense2/bias");
    let d2_pre = dense_forward(&d2_in, n, w2, b2, spec.dense_widths[1]);
    let d2_act: Vec<f64> = d2_pre
        .iter()
        .map(|&v| if v < 0.0 { v * spec.leaky_slope } else { v })
        .collect();

    let w3 = params.values("critic/dense3/weight");
    let b3 = params.values("critic/dense3/bias");
    let d3_pre = dense_forward(&d2_act, n, w3, b3, 1);

    let (scores, squashed) = match spec.output_mode {
        OutputMode::Score => (d3_pre.clone(), None),
        OutputMode::Probability => {
            let s: Vec<f64> = d3_pre.iter().map(|&v| sigmoid(v)).collect();
            (s.clone(), Some(s))
        }
    };

    Ok((
        scores,
        CriticCache {
            conv_units,
            conv_out_shape,
            flat,
            d1_pre,
            dropout_mask,
            d2_in,
            d2_pre,
            d2_act,
            squashed,
            n,
        },
    ))
}

/// Backward through the critic given d(loss)/d(score) per sample.
/// Returns parameter gradients and, when requested, the gradient with
/// respect to the input field (used to train the generator through a
/// frozen critic).
pub fn critic_backward(
    spec: &DiscriminatorSpec,
    params: &ParameterSet,
    cache: &CriticCache,
    grad_scores: &[f64],
    want_input_grad: bool,
) -> (GradientSet, Option<Batch>) {
    assert_eq!(grad_scores.len(), cache.n, "one score gradient per sample");
    let mut grads = GradientSet::zeros_like(params);

    let g_d3: Vec<f64> = match (&spec.output_mode, &cache.squashed) {
        (OutputMode::Score, _) => grad_scores.to_vec(),
        (OutputMode::Probability, Some(s)) => grad_scores
            .iter()
            .zip(s)
            .map(|(g, &p)| g * p * (1.0 - p))
            .collect(),
        (OutputMode::Probability, None) => unreachable!("probability cache"),
    };

    let w3 = params.values("critic/dense3/weight");
    let (g_d2_act, gw3, gb3) = dense_backward(&cache.d2_act, cache.n, w3, 1, &g_d3);
    grads.accumulate(params.index_of("critic/dense3/weight"), &gw3);
    grads.accumulate(params.index_of("critic/dense3/bias"), &gb3);

    let g_d2_pre: Vec<f64> = g_d2_act
        .iter()
        .zip(&cache.d2_pre)
        .map(|(g, &x)| if x < 0.0 { g * spec.leaky_slope } else { *g })
        .collect();
    let w2 = params.values("critic/dense2/weight");
    let (g_d2_in, gw2, gb2) =
        dense_backward(&cache.d2_in, cache.n, w2, spec.dense_widths[1], &g_d2_pre);
    grads.accumulate(params.index_of("critic/dense2/weight"), &gw2);
    grads.accumulate(params.index_of("critic/dense2/bias"), &gb2);

    let g_d1_act = match &cache.dropout_mask {
        Some(mask) => dropout_backward(mask, &g_d2_in),
        None => g_d2_in,
    };
    let g_d1_pre: Vec<f64> = g_d1_act
        .iter()
        .zip(&cache.d1_pre)
        .map(|(g, &x)| if x < 0.0 { g * spec.leaky_slope } else { *g })
        .collect();
    let w1 = params.values("critic/dense1/weight");
    let (g_flat, gw1, gb1) =
        dense_backward(&cache.flat, cache.n, w1, spec.dense_widths[0], &g_d1_pre);
    grads.accumulate(params.index_of("critic/dense1/weight"), &gw1);
    grads.accumulate(params.index_of("critic/dense1/bias"), &gb1);

    let (c, h, w) = cache.conv_out_shape;
    let mut g = Batch {
        n: cache.n,
        channels: c,
        height: h,
        width: w,
        data: g_flat,
    };
    for i in (0..3).rev() {
        g = unit_backward(
            params,
            &cache.conv_units[i],
            2,
            spec.leaky_slope,
            &g,
            &mut grads,
        );
    }
    let input_grad = if want_input_grad { Some(g) } else { None };
    (grads, input_grad)
}

/// Spec-level single-sample scoring entry point. Training-phase calls
/// need a dropout seed to be reproducible; evaluation is deterministic.
pub fn discriminator_forward(
    spec: &DiscriminatorSpec,
    params: &ParameterSet,
    field: &Tensor,
    phase: Phase,
    dropout_seed: u64,
) -> Result<f64, NetError> {
    let batch = Batch::stack(&[field]);
    let (scores, _) = critic_apply(spec, params, &batch, phase, dropout_seed)?;
    Ok(scores[0])
}
