//! Scalar training objectives: end-point error, disparity L1, the joint
//! flow+disparity loss, and the adversarial terms in both the probability
//! and Wasserstein (score) formulations.
//!
//! Every differentiable loss comes with an explicit gradient used by the
//! training steps; subgradients at kinks (EPE at zero error, L1 at
//! equality) are fixed to 0 so training is deterministic.

use thiserror::Error;

use crate::tensor::{Batch, CH_DT, CH_DT1, CH_U, CH_V, TARGET_CHANNELS};
use crate::types::{FlowField, Image2D, SceneFlowField};

/// Clamp for probability-mode logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("dimension mismatch: pred {pred_h}x{pred_w}, gt {gt_h}x{gt_w}")]
    DimensionMismatch {
        pred_h: usize,
        pred_w: usize,
        gt_h: usize,
        gt_w: usize,
    },
    #[error("empty score batch")]
    EmptyBatch,
    #[error("probability score {value} outside [0, 1] in vanilla mode")]
    BadProbability { value: f64 },
    #[error("channel count {got} does not match target layout ({expected})")]
    BadChannels { got: usize, expected: usize },
}

/// Reduction applied over all pixels of a term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Mean,
    Sum,
}

impl Reduction {
    #[inline]
    fn scale(&self, count: usize) -> f64 {
        match self {
            Reduction::Mean => 1.0 / count as f64,
            Reduction::Sum => 1.0,
        }
    }
}

/// Adversarial objective family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GanMode {
    /// Log-loss on probabilities.
    Vanilla,
    /// Score-gap objective with an unbounded critic.
    Wasserstein,
}

/// The per-step loss record written to the training log.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub epe: f64,
    pub l1_dt: f64,
    pub l1_dt1: f64,
    pub joint: f64,
    pub adversarial: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(parts: JointLossParts, adversarial: f64, lambda_adv: f64) -> Self {
        Self {
            epe: parts.epe,
            l1_dt: parts.l1_dt,
            l1_dt1: parts.l1_dt1,
            joint: parts.joint,
            adversarial,
            total: total_generator_loss(parts.joint, adversarial, lambda_adv),
        }
    }
}

/// The three supervised terms and their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointLossParts {
    pub epe: f64,
    pub l1_dt: f64,
    pub l1_dt1: f64,
    pub joint: f64,
}

fn check_dims(
    pred_h: usize,
    pred_w: usize,
    gt_h: usize,
    gt_w: usize,
) -> Result<(), LossError> {
    if pred_h != gt_h || pred_w != gt_w {
        return Err(LossError::DimensionMismatch {
            pred_h,
            pred_w,
            gt_h,
            gt_w,
        });
    }
    Ok(())
}

/// End-point error: reduction of sqrt((u-u')^2 + (v-v')^2) per pixel.
pub fn epe(pred: &FlowField, gt: &FlowField, reduction: Reduction) -> Result<f64, LossError> {
    check_dims(pred.height(), pred.width(), gt.height(), gt.width())?;
    let (pu, pv) = (pred.u.channel(0), pred.v.channel(0));
    let (gu, gv) = (gt.u.channel(0), gt.v.channel(0));
    let mut sum = 0.0;
    for i in 0..pu.len() {
        let du = pu[i] - gu[i];
        let dv = pv[i] - gv[i];
        sum += (du * du + dv * dv).sqrt();
    }
    Ok(sum * reduction.scale(pu.len()))
}

/// L1 disparity error: reduction of |d - d'| per pixel.
pub fn l1_disparity(
    pred: &Image2D,
    gt: &Image2D,
    reduction: Reduction,
) -> Result<f64, LossError> {
    check_dims(pred.height(), pred.width(), gt.height(), gt.width())?;
    let (p, g) = (pred.channel(0), gt.channel(0));
    let mut sum = 0.0;
    for i in 0..p.len() {
        sum += (p[i] - g[i]).abs();
    }
    Ok(sum * reduction.scale(p.len()))
}

/// Joint supervised loss: EPE plus the two disparity L1 terms, all under
/// one shared reduction.
pub fn joint_loss(
    pred: &SceneFlowField,
    gt: &SceneFlowField,
    reduction: Reduction,
) -> Result<JointLossParts, LossError> {
    let epe = epe(&pred.flow, &gt.flow, reduction)?;
    let l1_dt = l1_disparity(&pred.disparities.d_t, &gt.disparities.d_t, reduction)?;
    let l1_dt1 = l1_disparity(&pred.disparities.d_t1, &gt.disparities.d_t1, reduction)?;
    Ok(JointLossParts {
        epe,
        l1_dt,
        l1_dt1,
        joint: epe + l1_dt + l1_dt1,
    })
}

/// Joint loss on packed 4-channel batches, plus its gradient with respect
/// to the prediction. Mean reduction averages over n*h*w per term.
pub fn joint_loss_grad(
    pred: &Batch,
    gt: &Batch,
    reduction: Reduction,
) -> Result<(JointLossParts, Batch), LossError> {
    if pred.channels != TARGET_CHANNELS {
        return Err(LossError::BadChannels {
            got: pred.channels,
            expected: TARGET_CHANNELS,
        });
    }
    check_dims(pred.height, pred.width, gt.height, gt.width)?;
    assert_eq!(pred.n, gt.n, "batch sizes must match");

    let plane = pred.height * pred.width;
    let scale = reduction.scale(pred.n * plane);
    let mut grad = Batch::zeros(pred.n, pred.channels, pred.height, pred.width);
    let (mut s_epe, mut s_dt, mut s_dt1) = (0.0, 0.0, 0.0);

    for s in 0..pred.n {
        let p = pred.sample(s);
        let g = gt.sample(s);
        let gr = grad.sample_mut(s);
        for i in 0..plane {
            let du = p[CH_U * plane + i] - g[CH_U * plane + i];
            let dv = p[CH_V * plane + i] - g[CH_V * plane + i];
            let r = (du * du + dv * dv).sqrt();
            s_epe += r;
            if r > 0.0 {
                gr[CH_U * plane + i] = scale * du / r;
                gr[CH_V * plane + i] = scale * dv / r;
            }
            let ddt = p[CH_DT * plane + i] - g[CH_DT * plane + i];
            s_dt += ddt.abs();
            gr[CH_DT * plane + i] = scale * sign0(ddt);
            let ddt1 = p[CH_DT1 * plane + i] - g[CH_DT1 * plane + i];
            s_dt1 += ddt1.abs();
            gr[CH_DT1 * plane + i] = scale * sign0(ddt1);
        }
    }
    let parts = JointLossParts {
        epe: s_epe * scale,
        l1_dt: s_dt * scale,
        l1_dt1: s_dt1 * scale,
        joint: (s_epe + s_dt + s_dt1) * scale,
    };
    Ok((parts, grad))
}

#[inline]
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_scores(scores: &[f64], mode: GanMode) -> Result<(), LossError> {
    if scores.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if mode == GanMode::Vanilla {
        for &s in scores {
            if !(0.0..=1.0).contains(&s) {
                return Err(LossError::BadProbability { value: s });
            }
        }
    }
    Ok(())
}

/// Critic objective. Wasserstein: mean(fake) - mean(real) (the critic
/// minimizes this, i.e. maximizes the score gap). Vanilla: negative
/// log-likelihood with clamped probabilities.
pub fn critic_loss(
    scores_real: &[f64],
    scores_fake: &[f64],
    mode: GanMode,
) -> Result<f64, LossError> {
    check_scores(scores_real, mode)?;
    check_scores(scores_fake, mode)?;
    let m_real = scores_real.len() as f64;
    let m_fake = scores_fake.len() as f64;
    Ok(match mode {
        GanMode::Wasserstein => {
            scores_fake.iter().sum::<f64>() / m_fake - scores_real.iter().sum::<f64>() / m_real
        }
        GanMode::Vanilla => {
            let mut loss = 0.0;
            for &p in scores_real {
                loss -= clamp_prob(p).ln() / m_real;
            }
            for &p in scores_fake {
                loss -= (1.0 - clamp_prob(p)).ln() / m_fake;
            }
            loss
        }
    })
}

/// Critic loss plus gradients with respect to both score batches.
pub fn critic_loss_grad(
    scores_real: &[f64],
    scores_fake: &[f64],
    mode: GanMode,
) -> Result<(f64, Vec<f64>, Vec<f64>), LossError> {
    let loss = critic_loss(scores_real, scores_fake, mode)?;
    let m_real = scores_real.len() as f64;
    let m_fake = scores_fake.len() as f64;
    let (grad_real, grad_fake) = match mode {
        GanMode::Wasserstein => (
            vec![-1.0 / m_real; scores_real.len()],
            vec![1.0 / m_fake; scores_fake.len()],
        ),
        GanMode::Vanilla => (
            scores_real
                .iter()
                .map(|&p| {
                    if in_clamp(p) {
                        -1.0 / (p * m_real)
                    } else {
                        0.0
                    }
                })
                .collect(),
            scores_fake
                .iter()
                .map(|&p| {
                    if in_clamp(p) {
                        1.0 / ((1.0 - p) * m_fake)
                    } else {
                        0.0
                    }
                })
                .collect(),
        ),
    };
    Ok((loss, grad_real, grad_fake))
}

/// Generator-side adversarial term. Wasserstein: -mean(fake scores).
/// Vanilla: non-saturating -mean(log D(fake)).
pub fn generator_adv_loss(scores_fake: &[f64], mode: GanMode) -> Result<f64, LossError> {
    check_scores(scores_fake, mode)?;
    let m = scores_fake.len() as f64;
    Ok(match mode {
        GanMode::Wasserstein => -scores_fake.iter().sum::<f64>() / m,
        GanMode::Vanilla => -scores_fake.iter().map(|&p| clamp_prob(p).ln()).sum::<f64>() / m,
    })
}

/// Generator adversarial loss plus its gradient with respect to the fake
/// scores.
pub fn generator_adv_loss_grad(
    scores_fake: &[f64],
    mode: GanMode,
) -> Result<(f64, Vec<f64>), LossError> {
    let loss = generator_adv_loss(scores_fake, mode)?;
    let m = scores_fake.len() as f64;
    let grad = match mode {
        GanMode::Wasserstein => vec![-1.0 / m; scores_fake.len()],
        GanMode::Vanilla => scores_fake
            .iter()
            .map(|&p| if in_clamp(p) { -1.0 / (p * m) } else { 0.0 })
            .collect(),
    };
    Ok((loss, grad))
}

/// Combined objective the generator minimizes: joint + lambda * adversarial.
pub fn total_generator_loss(joint: f64, adversarial: f64, lambda_adv: f64) -> f64 {
    joint + lambda_adv * adversarial
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

#[inline]
fn in_clamp(p: f64) -> bool {
    (PROB_EPS..=1.0 - PROB_EPS).contains(&p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{pack_target, Batch};
    use crate::types::DisparityPair;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(h: usize, w: usize, data: Vec<f64>) -> Image2D {
        Image2D::new(h, w, 1, data).unwrap()
    }

    fn random_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> SceneFlowField {
        let img = |rng: &mut ChaCha8Rng| {
            image(h, w, (0..h * w).map(|_| rng.random_range(-9.0..9.0)).collect())
        };
        SceneFlowField::new(
            FlowField::new(img(rng), img(rng)).unwrap(),
            DisparityPair::new(img(rng), img(rng)).unwrap(),
        )
        .unwrap()
    }

    /// Brute-force per-pixel oracle, independent loop structure.
    fn joint_oracle(pred: &SceneFlowField, gt: &SceneFlowField, mean: bool) -> (f64, f64, f64) {
        let (h, w) = (pred.height(), pred.width());
        let mut epe = 0.0;
        let mut l1a = 0.0;
        let mut l1b = 0.0;
        for y in 0..h {
            for x in 0..w {
                let du = pred.flow.u.get(0, y, x) - gt.flow.u.get(0, y, x);
                let dv = pred.flow.v.get(0, y, x) - gt.flow.v.get(0, y, x);
                epe += du.hypot(dv);
                l1a += (pred.disparities.d_t.get(0, y, x) - gt.disparities.d_t.get(0, y, x)).abs();
                l1b +=
                    (pred.disparities.d_t1.get(0, y, x) - gt.disparities.d_t1.get(0, y, x)).abs();
            }
        }
        let n = (h * w) as f64;
        if mean {
            (epe / n, l1a / n, l1b / n)
        } else {
            (epe, l1a, l1b)
        }
    }

    #[test]
    fn epe_identity_and_345() {
        let zero = FlowField::zeros(1, 1);
        assert_eq!(epe(&zero, &zero, Reduction::Mean).unwrap(), 0.0);
        let pred = FlowField::new(image(1, 1, vec![3.0]), image(1, 1, vec![4.0])).unwrap();
        assert_eq!(epe(&pred, &zero, Reduction::Mean).unwrap(), 5.0);
        assert_eq!(epe(&pred, &zero, Reduction::Sum).unwrap(), 5.0);
    }

    #[test]
    fn l1_trivial_cases() {
        let a = image(1, 1, vec![2.0]);
        let b = image(1, 1, vec![0.0]);
        assert_eq!(l1_disparity(&a, &a, Reduction::Mean).unwrap(), 0.0);
        assert_eq!(l1_disparity(&a, &b, Reduction::Mean).unwrap(), 2.0);
    }

    #[test]
    fn joint_single_pixel_hand_arithmetic() {
        let pred = SceneFlowField::new(
            FlowField::new(image(1, 1, vec![3.0]), image(1, 1, vec![4.0])).unwrap(),
            DisparityPair::new(image(1, 1, vec![2.0]), image(1, 1, vec![3.0])).unwrap(),
        )
        .unwrap();
        let gt = SceneFlowField::new(
            FlowField::zeros(1, 1),
            DisparityPair::new(image(1, 1, vec![0.0]), image(1, 1, vec![0.0])).unwrap(),
        )
        .unwrap();
        let parts = joint_loss(&pred, &gt, Reduction::Mean).unwrap();
        assert_eq!(parts.epe, 5.0);
        assert_eq!(parts.l1_dt, 2.0);
        assert_eq!(parts.l1_dt1, 3.0);
        assert_eq!(parts.joint, 10.0);
    }

    #[test]
    fn joint_matches_loop_oracle_and_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let pred = random_field(&mut rng, 4, 4);
            let gt = random_field(&mut rng, 4, 4);
            for (red, mean) in [(Reduction::Mean, true), (Reduction::Sum, false)] {
                let parts = joint_loss(&pred, &gt, red).unwrap();
                let (oe, oa, ob) = joint_oracle(&pred, &gt, mean);
                assert!((parts.epe - oe).abs() < 1e-12);
                assert!((parts.l1_dt - oa).abs() < 1e-12);
                assert!((parts.l1_dt1 - ob).abs() < 1e-12);
                // Compositional: joint equals the separately computed terms.
                let e = epe(&pred.flow, &gt.flow, red).unwrap();
                let a = l1_disparity(&pred.disparities.d_t, &gt.disparities.d_t, red).unwrap();
                let b = l1_disparity(&pred.disparities.d_t1, &gt.disparities.d_t1, red).unwrap();
                assert_eq!(parts.joint, parts.epe + parts.l1_dt + parts.l1_dt1);
                assert!((parts.joint - (e + a + b)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn symmetry_and_homogeneity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pred = random_field(&mut rng, 3, 5);
        let gt = random_field(&mut rng, 3, 5);
        let ab = joint_loss(&pred, &gt, Reduction::Mean).unwrap();
        let ba = joint_loss(&gt, &pred, Reduction::Mean).unwrap();
        assert!((ab.joint - ba.joint).abs() < 1e-12);

        // Scaling both fields by c scales the joint loss by exactly c.
        let c = 3.5;
        let scale = |f: &SceneFlowField| {
            let s = |img: &Image2D| {
                Image2D::new(
                    img.height(),
                    img.width(),
                    1,
                    img.data().iter().map(|v| v * c).collect(),
                )
                .unwrap()
            };
            SceneFlowField::new(
                FlowField::new(s(&f.flow.u), s(&f.flow.v)).unwrap(),
                DisparityPair::new(s(&f.disparities.d_t), s(&f.disparities.d_t1)).unwrap(),
            )
            .unwrap()
        };
        let scaled = joint_loss(&scale(&pred), &scale(&gt), Reduction::Mean).unwrap();
        assert!((scaled.joint - c * ab.joint).abs() < 1e-9 * ab.joint.max(1.0));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = FlowField::zeros(2, 2);
        let b = FlowField::zeros(2, 3);
        assert!(matches!(
            epe(&a, &b, Reduction::Mean),
            Err(LossError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn wasserstein_critic_loss_cases() {
        assert_eq!(
            critic_loss(&[0.3, 0.7], &[0.3, 0.7], GanMode::Wasserstein).unwrap(),
            0.0
        );
        assert_eq!(
            critic_loss(&[1.0], &[0.0], GanMode::Wasserstein).unwrap(),
            -1.0
        );
        // Shift invariance: adding a constant to every score changes nothing.
        let real = [0.2, -1.4, 3.0];
        let fake = [0.9, 0.1];
        let base = critic_loss(&real, &fake, GanMode::Wasserstein).unwrap();
        let shift = 17.5;
        let real_s: Vec<f64> = real.iter().map(|v| v + shift).collect();
        let fake_s: Vec<f64> = fake.iter().map(|v| v + shift).collect();
        let shifted = critic_loss(&real_s, &fake_s, GanMode::Wasserstein).unwrap();
        assert!((base - shifted).abs() < 1e-12);
    }

    #[test]
    fn vanilla_critic_loss_perfect_discrimination() {
        let d_real = 1.0 - PROB_EPS;
        let d_fake = PROB_EPS;
        let loss = critic_loss(&[d_real], &[d_fake], GanMode::Vanilla).unwrap();
        // Closed form: -ln(1-eps) - ln(1-eps) = -2 ln(1-eps).
        let expected = -2.0 * (1.0 - PROB_EPS).ln();
        assert!((loss - expected).abs() < 1e-15);
        assert!(loss.abs() < 1e-6);
    }

    #[test]
    fn vanilla_rejects_out_of_range_probability() {
        assert!(matches!(
            critic_loss(&[1.5], &[0.5], GanMode::Vanilla),
            Err(LossError::BadProbability { .. })
        ));
        assert!(critic_loss(&[1.5], &[0.5], GanMode::Wasserstein).is_ok());
    }

    #[test]
    fn generator_adv_loss_cases() {
        assert_eq!(
            generator_adv_loss(&[0.0], GanMode::Wasserstein).unwrap(),
            0.0
        );
        assert_eq!(
            generator_adv_loss(&[2.0, 4.0], GanMode::Wasserstein).unwrap(),
            -3.0
        );
        // Fully fooled critic at the clamp: -ln(eps), large but finite.
        let loss = generator_adv_loss(&[0.0], GanMode::Vanilla).unwrap();
        let expected = -PROB_EPS.ln();
        assert!((loss - expected).abs() < 1e-9);
        assert!(loss.is_finite() && loss > 10.0);
    }

    #[test]
    fn total_loss_composition() {
        assert_eq!(total_generator_loss(10.0, -3.0, 1.0), 7.0);
        assert_eq!(total_generator_loss(10.0, -3.0, 0.0), 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let j: f64 = rng.random_range(-5.0..5.0);
            let a: f64 = rng.random_range(-5.0..5.0);
            assert_eq!(total_generator_loss(j, a, 1.0), j + a);
        }
    }

    #[test]
    fn joint_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (h, w) = (3, 4);
        let mk = |rng: &mut ChaCha8Rng| {
            let t = crate::tensor::Tensor::from_vec(
                4,
                h,
                w,
                (0..4 * h * w).map(|_| rng.random_range(-4.0..4.0)).collect(),
            );
            Batch::stack(&[&t])
        };
        let pred = mk(&mut rng);
        let gt = mk(&mut rng);
        let (_, grad) = joint_loss_grad(&pred, &gt, Reduction::Mean).unwrap();
        let h_step = 1e-6;
        for i in (0..pred.data.len()).step_by(7) {
            let mut plus = pred.clone();
            plus.data[i] += h_step;
            let mut minus = pred.clone();
            minus.data[i] -= h_step;
            let lp = joint_loss_grad(&plus, &gt, Reduction::Mean).unwrap().0.joint;
            let lm = joint_loss_grad(&minus, &gt, Reduction::Mean)
                .unwrap()
                .0
                .joint;
            let numeric = (lp - lm) / (2.0 * h_step);
            let analytic = grad.data[i];
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(
                ((analytic - numeric) / denom).abs() < 1e-4,
                "index {i}: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn batch_losses_match_domain_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let pred = random_field(&mut rng, 4, 4);
        let gt = random_field(&mut rng, 4, 4);
        let pb = Batch::stack(&[&pack_target(&pred).0]);
        let gb = Batch::stack(&[&pack_target(&gt).0]);
        let (parts, _) = joint_loss_grad(&pb, &gb, Reduction::Mean).unwrap();
        let domain = joint_loss(&pred, &gt, Reduction::Mean).unwrap();
        assert!((parts.joint - domain.joint).abs() < 1e-12);
        assert!((parts.epe - domain.epe).abs() < 1e-12);
    }
}
