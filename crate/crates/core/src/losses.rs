//! Scalar training objectives and their analytic gradients w.r.t. logits.
//!
//! Covers multi-class cross-entropy, weighted sigmoid BCE, the
//! confidence-amplified target / non-target expert losses, their per-view
//! combination, the product-of-experts loss, and the mixed main-model loss.
//! All probabilities are floored at 1e-12 before any log.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ovr::BinaryView;

pub const PROB_FLOOR: f64 = 1e-12;

/// Amplification exponent and class-balance coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmplifyParams {
    /// Exponent on the confidence weights `q^alpha` / `(1-q)^alpha`.
    /// `alpha = 0` disables amplification.
    pub alpha: f64,
    /// Coefficient on the target-class term; default `(k-1)/k`.
    pub lambda1: f64,
    /// Coefficient on the non-target term; default `1/k`.
    pub lambda2: f64,
}

impl AmplifyParams {
    /// Default balance coefficients for a k-class task.
    pub fn for_k(k: usize, alpha: f64) -> Self {
        let k = k as f64;
        Self {
            alpha,
            lambda1: (k - 1.0) / k,
            lambda2: 1.0 / k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(Error::Config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if self.lambda1 <= 0.0 || self.lambda2 <= 0.0 {
            return Err(Error::Config(format!(
                "lambda1/lambda2 must be positive, got {}/{}",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

/// The auxiliary model's probability of the true class, per train example.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceTable {
    q: Vec<f64>,
}

impl ConfidenceTable {
    pub fn new(q: Vec<f64>) -> Result<Self> {
        if let Some(bad) = q.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::ConfidenceTable(format!(
                "confidence {bad} outside [0, 1]"
            )));
        }
        Ok(Self { q })
    }

    pub fn uniform(n: usize, k: usize) -> Self {
        Self {
            q: vec![1.0 / k as f64; n],
        }
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn get(&self, example_id: usize) -> Result<f64> {
        self.q.get(example_id).copied().ok_or_else(|| {
            Error::ConfidenceTable(format!(
                "no entry for example {example_id} (table covers {})",
                self.q.len()
            ))
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.q
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Numerically stable `ln(1 + e^z)`.
#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// `q^alpha` with the `0^0 = 1` convention (continuity at the plain-BCE limit).
#[inline]
fn amp_weight(q: f64, alpha: f64) -> f64 {
    if alpha == 0.0 {
        1.0
    } else {
        q.powf(alpha)
    }
}

/// Stable log-sum-exp based softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Multi-class cross-entropy: `-ln softmax(logits)[y]` with its gradient.
pub fn softmax_ce(logits: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
    if y >= logits.len() {
        return Err(Error::Label(format!(
            "label {y} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = lse - logits[y];
    let mut grad: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    grad[y] -= 1.0;
    Ok((loss, grad))
}

/// Weighted binary cross-entropy on a single logit, stabilized against
/// overflow. Returns `(loss, d loss / d logit)`.
pub fn sigmoid_bce(logit: f64, label: bool, weight: f64) -> (f64, f64) {
    let t = f64::from(label);
    // -[t ln sigma(z) + (1-t) ln(1 - sigma(z))] = softplus(z) - t*z
    let loss = weight * (softplus(logit) - t * logit);
    let grad = weight * (sigmoid(logit) - t);
    (loss, grad)
}

fn check_logit_count(view: &BinaryView<'_>, logits: &[f64]) -> Result<()> {
    if logits.len() != view.active_indices().len() {
        return Err(Error::InputShape(format!(
            "expected {} logits (one per active example), got {}",
            view.active_indices().len(),
            logits.len()
        )));
    }
    Ok(())
}

/// Target-class expert loss over the view's active positives:
/// mean of `q^alpha * -ln sigma(f)`. The gradient vector is aligned with
/// `view.active_indices()` (zeros at negatives).
pub fn target_loss(
    view: &BinaryView<'_>,
    logits: &[f64],
    q: &ConfidenceTable,
    params: &AmplifyParams,
) -> Result<(f64, Vec<f64>)> {
    params.validate()?;
    check_logit_count(view, logits)?;
    let n_pos = view.active_positive_count();
    if n_pos == 0 {
        return Err(Error::DegenerateClass(format!(
            "view for class {} has no active positives",
            view.target_class()
        )));
    }
    let norm = n_pos as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (j, &idx) in view.active_indices().iter().enumerate() {
        if !view.binary_label(idx) {
            continue;
        }
        let w = amp_weight(q.get(idx)?, params.alpha);
        // -ln sigma(z) = softplus(-z)
        loss += w * softplus(-logits[j]) / norm;
        grad[j] = w * (sigmoid(logits[j]) - 1.0) / norm;
    }
    Ok((loss, grad))
}

/// Non-target expert loss over the view's active negatives:
/// mean of `(1-q)^alpha * -ln(1 - sigma(f))`. Gradient aligned with
/// `view.active_indices()` (zeros at positives).
pub fn non_target_loss(
    view: &BinaryView<'_>,
    logits: &[f64],
    q: &ConfidenceTable,
    params: &AmplifyParams,
) -> Result<(f64, Vec<f64>)> {
    params.validate()?;
    check_logit_count(view, logits)?;
    let n_neg = view.active_negative_count();
    if n_neg == 0 {
        return Err(Error::DegenerateClass(format!(
            "view for class {} has no active negatives",
            view.target_class()
        )));
    }
    let norm = n_neg as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (j, &idx) in view.active_indices().iter().enumerate() {
        if view.binary_label(idx) {
            continue;
        }
        let w = amp_weight(1.0 - q.get(idx)?, params.alpha);
        // -ln(1 - sigma(z)) = softplus(z)
        loss += w * softplus(logits[j]) / norm;
        grad[j] = w * sigmoid(logits[j]) / norm;
    }
    Ok((loss, grad))
}

/// Combined expert objective over all k views:
/// `(1/k) * sum_i (lambda1 * target_i + lambda2 * non_target_i)`.
///
/// `q` is a constant table here; no gradient flows toward whatever model
/// produced it.
pub fn expert_loss(
    views: &[BinaryView<'_>],
    logits: &[Vec<f64>],
    q: &ConfidenceTable,
    params: &AmplifyParams,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if views.len() != logits.len() {
        return Err(Error::InputShape(format!(
            "{} views but {} logit vectors",
            views.len(),
            logits.len()
        )));
    }
    let k = views.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(views.len());
    for (view, view_logits) in views.iter().zip(logits.iter()) {
        let (t_loss, t_grad) = target_loss(view, view_logits, q, params)?;
        let (n_loss, n_grad) = non_target_loss(view, view_logits, q, params)?;
        total += (params.lambda1 * t_loss + params.lambda2 * n_loss) / k;
        let grad: Vec<f64> = t_grad
            .iter()
            .zip(n_grad.iter())
            .map(|(t, n)| (params.lambda1 * t + params.lambda2 * n) / k)
            .collect();
        grads.push(grad);
    }
    Ok((total, grads))
}

/// Per-view training objective with the view's own balancing weights folded
/// in: per-side means of `weight * q^alpha * BCE`. For a reweighted view this
/// equals `lambda1 * target_loss + lambda2 * non_target_loss` exactly.
pub fn balanced_view_loss(
    view: &BinaryView<'_>,
    logits: &[f64],
    q: &ConfidenceTable,
    alpha: f64,
) -> Result<(f64, Vec<f64>)> {
    check_logit_count(view, logits)?;
    let positions: Vec<usize> = (0..view.active_indices().len()).collect();
    balanced_subset_loss(view, &positions, logits, q, alpha)
}

/// [`balanced_view_loss`] restricted to a subset of active positions (a
/// mini-batch). Normalizers are the subset's own positive/negative counts;
/// an empty side contributes zero.
pub fn balanced_subset_loss(
    view: &BinaryView<'_>,
    positions: &[usize],
    logits: &[f64],
    q: &ConfidenceTable,
    alpha: f64,
) -> Result<(f64, Vec<f64>)> {
    if logits.len() != positions.len() {
        return Err(Error::InputShape(format!(
            "expected {} logits, got {}",
            positions.len(),
            logits.len()
        )));
    }
    let active = view.active_indices();
    let n_pos = positions
        .iter()
        .filter(|&&p| view.binary_label(active[p]))
        .count();
    let n_neg = positions.len() - n_pos;

    let mut loss = 0.0;
    let mut grad = vec![0.0; positions.len()];
    for (j, &p) in positions.iter().enumerate() {
        let idx = active[p];
        let w = view.weight(idx);
        let z = logits[j];
        if view.binary_label(idx) {
            let a = w * amp_weight(q.get(idx)?, alpha) / n_pos as f64;
            loss += a * softplus(-z);
            grad[j] = a * (sigmoid(z) - 1.0);
        } else {
            let a = w * amp_weight(1.0 - q.get(idx)?, alpha) / n_neg as f64;
            loss += a * softplus(z);
            grad[j] = a * sigmoid(z);
        }
    }
    Ok((loss, grad))
}

fn validate_expert_probs(p_b: &[f64], k: usize) -> Result<Vec<f64>> {
    if p_b.len() != k {
        return Err(Error::InputShape(format!(
            "expert distribution has {} entries, expected {k}",
            p_b.len()
        )));
    }
    if p_b.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(Error::Distribution(format!(
            "expert distribution has negative or non-finite entries: {p_b:?}"
        )));
    }
    let sum: f64 = p_b.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Distribution(format!(
            "expert distribution sums to {sum}, expected 1"
        )));
    }
    let clamped: Vec<f64> = p_b
        .iter()
        .map(|&p| {
            if p < PROB_FLOOR {
                log::warn!("expert probability {p} clamped to {PROB_FLOOR}");
                PROB_FLOOR
            } else {
                p
            }
        })
        .collect();
    Ok(clamped)
}

/// Product-of-experts loss: `-ln softmax(ln p_d + ln p_b)[y]` where
/// `p_d = softmax(main_logits)`. The gradient is w.r.t. `main_logits` only;
/// the expert distribution is a constant.
pub fn poe_loss(main_logits: &[f64], p_b: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
    let p_b = validate_expert_probs(p_b, main_logits.len())?;
    // ln softmax(z) + ln p_b differs from z + ln p_b by a constant, which
    // softmax ignores, so the combined logits are just z + ln p_b.
    let combined: Vec<f64> = main_logits
        .iter()
        .zip(p_b.iter())
        .map(|(z, p)| z + p.ln())
        .collect();
    softmax_ce(&combined, y)
}

/// Mixed main-model objective: `ce_coeff * CE + poe_coeff * PoE`.
pub fn main_loss(
    main_logits: &[f64],
    p_b: &[f64],
    y: usize,
    ce_coeff: f64,
    poe_coeff: f64,
) -> Result<(f64, Vec<f64>)> {
    if ce_coeff < 0.0 || poe_coeff < 0.0 {
        return Err(Error::Config(format!(
            "loss coefficients must be >= 0, got ce {ce_coeff}, poe {poe_coeff}"
        )));
    }
    let (ce, ce_grad) = softmax_ce(main_logits, y)?;
    let (poe, poe_grad) = poe_loss(main_logits, p_b, y)?;
    let loss = ce_coeff * ce + poe_coeff * poe;
    let grad = ce_grad
        .iter()
        .zip(poe_grad.iter())
        .map(|(c, p)| ce_coeff * c + poe_coeff * p)
        .collect();
    Ok((loss, grad))
}
