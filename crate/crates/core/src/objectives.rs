//! Self-supervised objectives with analytic gradients.
//!
//! Every objective is written in the maximization convention: larger
//! values are better. Trainers negate the value once before descending.
//!
//! * [`cpc_loss`]: InfoNCE over a shared batch of negatives,
//!   `(1/n) Σ_i ln( e^{s_ii} / ((1/n) Σ_j e^{s_ij}) )`, bounded by `ln n`.
//! * [`js_loss`]: Jensen–Shannon lower bound,
//!   `E_pairs[-softplus(-s)] - E_{i≠j}[softplus(s)]`.
//! * [`fp_loss`]: forward prediction of the signal from the representation,
//!   with squared-error or Bernoulli likelihoods.
//! * [`ip_loss`]: inverse prediction, `-(1/n) Σ ‖z_x - z_s‖²`.
//! * [`composite_loss`]: the weighted sum of the three families.
//!
//! Scores are inner products `⟨g(z_x), g(z_s)⟩` through a projection head
//! `g` that is the identity unless configured as linear.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{self, matmul, matmul_nt, matmul_tn, EncoderSpec, Params, Tensor};

/// Floor on log arguments in the Bernoulli likelihoods.
pub const LOG_FLOOR: f64 = 1e-12;

/// Paired embeddings: row `i` of `zx` goes with row `i` of `zs`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub zx: Tensor,
    pub zs: Tensor,
}

impl PairBatch {
    pub fn new(zx: Tensor, zs: Tensor) -> Result<Self> {
        if zx.shape().len() != 2 || zx.shape() != zs.shape() {
            return invalid(format!(
                "paired embeddings must be matrices of equal shape, got {:?} and {:?}",
                zx.shape(),
                zs.shape()
            ));
        }
        Ok(Self { zx, zs })
    }

    pub fn len(&self) -> usize {
        self.zx.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn contrastive(&self) -> Result<usize> {
        let n = self.len();
        if n < 2 {
            return invalid(format!("contrastive objectives need n >= 2 pairs, got {n}"));
        }
        Ok(n)
    }
}

/// Projection head applied before scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Projection {
    Identity,
    /// `g(z) = W z` with `W: k×d`.
    Linear { weight: Tensor },
}

impl Projection {
    fn apply(&self, z: &Tensor) -> Result<Tensor> {
        match self {
            Self::Identity => Ok(z.clone()),
            Self::Linear { weight } => {
                if weight.shape().len() != 2 || weight.cols() != z.cols() {
                    return invalid("projection width does not match embedding width");
                }
                Ok(matmul_nt(z, weight))
            }
        }
    }

    /// Pulls gradients on `g(z)` back to `z` and accumulates the head gradient.
    fn pull_back(&self, z: &Tensor, grad_g: &Tensor, head: &mut Option<Tensor>) -> Tensor {
        match self {
            Self::Identity => grad_g.clone(),
            Self::Linear { weight } => {
                let gw = matmul_tn(grad_g, z);
                match head {
                    Some(h) => h.add_scaled(&gw, 1.0).expect("head shapes agree"),
                    None => *head = Some(gw),
                }
                matmul(grad_g, weight)
            }
        }
    }
}

/// Objective value with gradients on both inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_zx: Tensor,
    /// Gradient on the second input: `zs` for the pair objectives, the
    /// reconstruction target for [`fp_loss`].
    pub grad_zs: Tensor,
    pub grad_head: Option<Tensor>,
    pub grad_decoder: Option<Params>,
    /// A Bernoulli log argument hit [`LOG_FLOOR`].
    pub clamped: bool,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Shared backward for score-matrix objectives: `grad_s` is `∂value/∂s_ij`.
fn score_backward(
    batch: &PairBatch,
    head: &Projection,
    gx: &Tensor,
    gs: &Tensor,
    value: f64,
    grad_s: &Tensor,
) -> LossOutput {
    let grad_gx = matmul(grad_s, gs);
    let grad_gs = matmul_tn(grad_s, gx);
    let mut grad_head = None;
    let grad_zx = head.pull_back(&batch.zx, &grad_gx, &mut grad_head);
    let grad_zs = head.pull_back(&batch.zs, &grad_gs, &mut grad_head);
    LossOutput {
        value,
        grad_zx,
        grad_zs,
        grad_head,
        grad_decoder: None,
        clamped: false,
    }
}

/// InfoNCE with the positive included in the denominator.
pub fn cpc_loss(batch: &PairBatch, head: &Projection) -> Result<LossOutput> {
    let n = batch.contrastive()?;
    let gx = head.apply(&batch.zx)?;
    let gs = head.apply(&batch.zs)?;
    let scores = matmul_nt(&gx, &gs);
    let (value, grad) = info_nce_from_scores(&scores)?;
    debug_assert_eq!(grad.rows(), n);
    Ok(score_backward(batch, head, &gx, &gs, value, &grad))
}

/// InfoNCE value and `∂value/∂scores` for an `n×n` score matrix whose
/// diagonal holds the positive pairs.
pub fn info_nce_from_scores(scores: &Tensor) -> Result<(f64, Tensor)> {
    let n = scores.rows();
    if n < 2 || scores.cols() != n {
        return invalid("InfoNCE needs a square score matrix with n >= 2");
    }
    let nf = n as f64;
    let mut value = 0.0;
    let mut grad = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let row = scores.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|s| (s - m).exp()).sum();
        let lse = m + sum.ln();
        value += row[i] - lse + nf.ln();
        let g = grad.row_mut(i);
        for (j, s) in row.iter().enumerate() {
            g[j] = -((s - lse).exp()) / nf;
        }
        g[i] += 1.0 / nf;
    }
    Ok((value / nf, grad))
}

/// Jensen–Shannon objective over paired and mismatched scores.
pub fn js_loss(batch: &PairBatch, head: &Projection) -> Result<LossOutput> {
    let n = batch.contrastive()?;
    let gx = head.apply(&batch.zx)?;
    let gs = head.apply(&batch.zs)?;
    let scores = matmul_nt(&gx, &gs);
    let nf = n as f64;
    let off = nf * (nf - 1.0);
    let mut value = 0.0;
    let mut grad = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let s = scores.row(i)[j];
            if i == j {
                value -= softplus(-s) / nf;
                grad.row_mut(i)[j] = sigmoid(-s) / nf;
            } else {
                value -= softplus(s) / off;
                grad.row_mut(i)[j] = -sigmoid(s) / off;
            }
        }
    }
    Ok(score_backward(batch, head, &gx, &gs, value, &grad))
}

/// Likelihood used by the forward predictive objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FpFlavor {
    /// `-‖s - R(z)‖²`
    Mse,
    /// Factorized Bernoulli on `s` with means `σ(R(z))`.
    Bce,
    /// Factorized Bernoulli on `R(z)` with means `σ(s)`.
    Revbce,
}

/// Decoder `R` mapping representations to the signal space.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub spec: EncoderSpec,
    pub params: Params,
}

/// `ln σ(a)` floored at `ln LOG_FLOOR`; returns `(value, derivative, floored)`.
fn log_sigmoid(a: f64) -> (f64, f64, bool) {
    let v = -softplus(-a);
    if v < LOG_FLOOR.ln() {
        (LOG_FLOOR.ln(), 0.0, true)
    } else {
        (v, sigmoid(-a), false)
    }
}

/// Forward predictive objective: reconstruct `s_target` from `zx`.
pub fn fp_loss(
    zx: &Tensor,
    s_target: &Tensor,
    decoder: &Decoder,
    flavor: FpFlavor,
) -> Result<LossOutput> {
    if decoder.spec.normalize {
        return invalid("the decoder must not normalize its outputs");
    }
    let fwd = nn::forward_cached(&decoder.spec, &decoder.params, zx)?;
    let raw = &fwd.output;
    if raw.shape() != s_target.shape() {
        return invalid(format!(
            "decoder output {:?} does not match target {:?}",
            raw.shape(),
            s_target.shape()
        ));
    }
    if flavor == FpFlavor::Bce {
        if let Some(bad) = s_target.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return invalid(format!("BCE targets must lie in [0, 1], found {bad}"));
        }
    }
    let n = zx.rows() as f64;
    let mut value = 0.0;
    let mut clamped = false;
    let mut grad_raw = Tensor::zeros(raw.shape());
    let mut grad_s = Tensor::zeros(raw.shape());
    let cells = raw.data().iter().zip(s_target.data());
    for (k, (&a, &s)) in cells.enumerate() {
        let (v, ga, gs) = match flavor {
            FpFlavor::Mse => {
                let d = s - a;
                (-d * d, 2.0 * d, -2.0 * d)
            }
            FpFlavor::Bce => {
                // s ln σ(a) + (1-s) ln σ(-a)
                let (lp, dlp, f1) = log_sigmoid(a);
                let (ln, dln, f2) = log_sigmoid(-a);
                clamped |= f1 || f2;
                (s * lp + (1.0 - s) * ln, s * dlp - (1.0 - s) * dln, lp - ln)
            }
            FpFlavor::Revbce => {
                // r ln σ(s) + (1-r) ln σ(-s) with r = σ(a)
                let r = sigmoid(a);
                let (lp, dlp, f1) = log_sigmoid(s);
                let (ln, dln, f2) = log_sigmoid(-s);
                clamped |= f1 || f2;
                let dr = r * (1.0 - r);
                (r * lp + (1.0 - r) * ln, (lp - ln) * dr, r * dlp - (1.0 - r) * dln)
            }
        };
        value += v / n;
        grad_raw.data_mut()[k] = ga / n;
        grad_s.data_mut()[k] = gs / n;
    }
    let back = nn::backward_from(&decoder.spec, &decoder.params, &fwd, &grad_raw)?;
    Ok(LossOutput {
        value,
        grad_zx: back.input,
        grad_zs: grad_s,
        grad_head: None,
        grad_decoder: Some(back.params),
        clamped,
    })
}

/// Inverse predictive objective `-(1/n) Σ ‖zx_i - zs_i‖²`.
pub fn ip_loss(batch: &PairBatch) -> Result<LossOutput> {
    let n = batch.len() as f64;
    let mut value = 0.0;
    let mut grad_zx = Tensor::zeros(batch.zx.shape());
    for (k, (a, b)) in batch.zx.data().iter().zip(batch.zs.data()).enumerate() {
        let d = a - b;
        value -= d * d / n;
        grad_zx.data_mut()[k] = -2.0 * d / n;
    }
    let grad_zs = grad_zx.scale(-1.0);
    Ok(LossOutput {
        value,
        grad_zx,
        grad_zs,
        grad_head: None,
        grad_decoder: None,
        clamped: false,
    })
}

/// `(λ_CL, λ_FP, λ_IP)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cl: f64,
    pub fp: f64,
    pub ip: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.cl, self.fp, self.ip];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return invalid("loss weights must be finite and nonnegative");
        }
        if w.iter().all(|v| *v == 0.0) {
            return invalid("at least one loss weight must be positive");
        }
        if self.cl == 0.0 && self.fp == 0.0 {
            return invalid(
                "inverse prediction alone collapses to a constant representation; \
                 pair it with a contrastive or forward predictive term",
            );
        }
        Ok(())
    }
}

/// `λ_IP` that makes the inverse predictive term one tenth of the magnitude
/// of the remaining terms.
pub fn auto_tenth_ip_weight(other_value: f64, ip_value: f64) -> f64 {
    if ip_value == 0.0 {
        0.0
    } else {
        0.1 * other_value.abs() / ip_value.abs()
    }
}

/// Component outputs of one batch.
#[derive(Debug, Clone, Copy, Default)]
pub struct Components<'a> {
    pub cl: Option<&'a LossOutput>,
    pub fp: Option<&'a LossOutput>,
    pub ip: Option<&'a LossOutput>,
}

/// Weighted sum `λ_CL L_CL + λ_FP L_FP + λ_IP L_IP`.
///
/// The forward predictive term contributes to `grad_zx` and the decoder
/// only; its target gradient lives in a different space from `zs`.
pub fn composite_loss(weights: LossWeights, parts: Components<'_>) -> Result<LossOutput> {
    weights.validate()?;
    let terms = [(weights.cl, parts.cl), (weights.fp, parts.fp), (weights.ip, parts.ip)];
    let shape_src = terms
        .iter()
        .find_map(|(_, p)| *p)
        .ok_or_else(|| crate::Error::InvalidArgument("no loss components supplied".into()))?;
    for (w, p) in &terms {
        if *w > 0.0 && p.is_none() {
            return invalid("a positively weighted component was not supplied");
        }
    }
    let zs_shape = parts.cl.or(parts.ip).map(|p| p.grad_zs.shape().to_vec());
    let mut out = LossOutput {
        value: 0.0,
        grad_zx: Tensor::zeros(shape_src.grad_zx.shape()),
        grad_zs: Tensor::zeros(zs_shape.as_deref().unwrap_or(shape_src.grad_zx.shape())),
        grad_head: None,
        grad_decoder: None,
        clamped: false,
    };
    for (k, (w, part)) in terms.iter().enumerate() {
        let Some(p) = part else { continue };
        if *w == 0.0 {
            continue;
        }
        out.value += w * p.value;
        out.grad_zx.add_scaled(&p.grad_zx, *w)?;
        if k != 1 {
            out.grad_zs.add_scaled(&p.grad_zs, *w)?;
        }
        out.clamped |= p.clamped;
        if let Some(h) = &p.grad_head {
            match &mut out.grad_head {
                Some(acc) => acc.add_scaled(h, *w)?,
                None => out.grad_head = Some(h.scale(*w)),
            }
        }
        if let Some(d) = &p.grad_decoder {
            let mut d = d.clone();
            d.tensors.iter_mut().for_each(|t| *t = t.scale(*w));
            out.grad_decoder = Some(d);
        }
    }
    Ok(out)
}
