//! Partial-label losses with analytic gradients through the softmax layer.
//!
//! Every loss returns a [`LossResult`] whose gradient is taken with respect
//! to the logits `z` feeding `p = softmax(z)`. Identification-style weights
//! (merit, LW, RC) are recomputed on each call and then treated as
//! constants: no gradient flows through them.
//!
//! | kind      | value                                                   | dL/dz_j                               |
//! |-----------|---------------------------------------------------------|---------------------------------------|
//! | `nll`     | `-log p̂`                                                | `(p_j / p̂)(p̂ - y_j)`                  |
//! | `libra`   | `log(1 - p̂) - (1/k) Σ y_i log p_i`                      | `-1/k` allowed, `p_j / (1 - p̂)` else  |
//! | `sag`     | `(1/(m-k)) Σ (1-y_i) log p_i - (1/k) Σ y_i log p_i`     | `-1/k` allowed, `1/(m-k)` else        |
//! | `uniform` | `-Σ y_i log p_i`                                        | `k p_j - y_j`                         |
//! | `merit`   | `-Σ w_i log p_i`, `w ∝ y (p/p̂)^β`                       | `p_j - w_j`                           |
//! | `lws`     | `Σ y_i w_i σ(z_i) + β Σ (1-y_i) w_i σ(-z_i)`            | see [`lws`]                           |
//! | `rc`      | `-(1/2) Σ y_i w_i log p_i`, `w = p / p̂`                 | `(1/2)(p_j - y_j w_j)`                |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::LabelVector;
use crate::numkit::{softmax, Rng};

/// Smallest probability fed to a logarithm in tolerant mode.
pub const MIN_PROB: f64 = 1e-300;
/// Smallest disallowed mass `1 - p̂` used by libra in tolerant mode.
pub const MIN_DISALLOWED_MASS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Nll,
    Libra,
    Sag,
    Uniform,
    Merit,
    Lws,
    Rc,
}

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::Nll,
        LossKind::Libra,
        LossKind::Sag,
        LossKind::Uniform,
        LossKind::Merit,
        LossKind::Lws,
        LossKind::Rc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Nll => "nll",
            LossKind::Libra => "libra",
            LossKind::Sag => "sag",
            LossKind::Uniform => "uniform",
            LossKind::Merit => "merit",
            LossKind::Lws => "lws",
            LossKind::Rc => "rc",
        }
    }

    /// Whether the loss is a function of `p` alone (everything but LW).
    pub fn is_probability_defined(self) -> bool {
        self != LossKind::Lws
    }

    pub fn has_identification_weights(self) -> bool {
        matches!(self, LossKind::Merit | LossKind::Lws | LossKind::Rc)
    }

    /// Losses whose disallowed term needs at least one disallowed output.
    pub fn requires_disallowed(self) -> bool {
        matches!(self, LossKind::Sag | LossKind::Lws)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown loss '{s}' (expected one of nll, libra, sag, uniform, merit, lws, rc)"
                ))
            })
    }
}

/// Which logistic function the LW loss uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmoidForm {
    /// `σ(t) = 1 / (1 + e^t)`, decreasing.
    #[default]
    Printed,
    /// `σ(t) = 1 / (1 + e^-t)`.
    Conventional,
}

impl SigmoidForm {
    fn eval(self, t: f64) -> f64 {
        let s = match self {
            SigmoidForm::Printed => -t,
            SigmoidForm::Conventional => t,
        };
        // 1 / (1 + e^-s), evaluated without overflow.
        if s >= 0.0 {
            1.0 / (1.0 + (-s).exp())
        } else {
            let e = s.exp();
            e / (1.0 + e)
        }
    }

    /// Sign of dσ/dt; `σ'(t) = sign · σ(t) σ(-t)` for both forms.
    fn slope_sign(self) -> f64 {
        match self {
            SigmoidForm::Printed => -1.0,
            SigmoidForm::Conventional => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossParams {
    /// Merit exponent (in `[0, 1]`) or LW leverage (`> 0`).
    pub beta: f64,
    /// Scale libra by `w_Lib = 1 - p̂` (frozen), so it vanishes near a fit.
    pub libra_fit_weight: bool,
    /// `γ_z` of the `γ_z Σ z_i²` logit penalty.
    pub logit_l2_gamma: f64,
    /// Weight `γ` of the negative-supervision term.
    pub neg_gamma: f64,
    /// Negative label sets sampled per update.
    pub neg_sample_count: usize,
    /// Clamp logarithm arguments instead of failing at the simplex boundary.
    pub tolerant: bool,
    pub lws_sigmoid: SigmoidForm,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            beta: 1.0,
            libra_fit_weight: false,
            logit_l2_gamma: 0.0,
            neg_gamma: 0.0,
            neg_sample_count: 50,
            tolerant: false,
            lws_sigmoid: SigmoidForm::Printed,
        }
    }
}

impl LossParams {
    /// Defaults used for training: tolerant clamping and the libra fit weight.
    pub fn training() -> Self {
        Self {
            libra_fit_weight: true,
            tolerant: true,
            ..Self::default()
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn validate_for(&self, kind: LossKind) -> Result<()> {
        if !(self.logit_l2_gamma >= 0.0 && self.logit_l2_gamma.is_finite()) {
            return Err(Error::invalid("logit_l2_gamma must be finite and >= 0"));
        }
        if !(self.neg_gamma >= 0.0 && self.neg_gamma.is_finite()) {
            return Err(Error::invalid("neg_gamma must be finite and >= 0"));
        }
        if self.neg_sample_count == 0 {
            return Err(Error::invalid("neg_sample_count must be >= 1"));
        }
        match kind {
            LossKind::Merit if !(0.0..=1.0).contains(&self.beta) => {
                Err(Error::invalid(format!("merit beta must lie in [0, 1], got {}", self.beta)))
            }
            LossKind::Lws if !(self.beta > 0.0 && self.beta.is_finite()) => {
                Err(Error::invalid(format!("lws beta must be > 0, got {}", self.beta)))
            }
            _ => Ok(()),
        }
    }
}

/// Loss value and its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossResult {
    pub value: f64,
    pub grad_logits: Vec<f64>,
}

impl LossResult {
    pub fn zeros(m: usize) -> Self {
        Self {
            value: 0.0,
            grad_logits: vec![0.0; m],
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.value *= s;
        self.grad_logits.iter_mut().for_each(|g| *g *= s);
    }

    /// `self += s · other`
    pub fn add_scaled(&mut self, other: &LossResult, s: f64) {
        self.value += s * other.value;
        for (g, o) in self.grad_logits.iter_mut().zip(&other.grad_logits) {
            *g += s * o;
        }
    }

    pub fn grad_sum(&self) -> f64 {
        self.grad_logits.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.grad_logits.iter().all(|g| g.is_finite())
    }
}

fn ln_guarded(v: f64, tolerant: bool, what: &str) -> Result<f64> {
    if tolerant {
        Ok(v.max(MIN_PROB).ln())
    } else if v > 0.0 {
        Ok(v.ln())
    } else {
        Err(Error::Domain(format!("log of non-positive {what}")))
    }
}

fn check_probs(p: &[f64], y: &LabelVector) -> Result<()> {
    y.check_len(p.len())?;
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid("probabilities must be finite and non-negative"));
    }
    Ok(())
}

fn check_has_disallowed(kind: LossKind, y: &LabelVector) -> Result<()> {
    if y.is_degenerate() {
        return Err(Error::invalid(format!("{kind} requires at least one disallowed output (k < m)")));
    }
    Ok(())
}

/// `-Σ_allowed (1/k) log p_i`, the allowed term shared by libra and sag.
fn mean_allowed_log(p: &[f64], y: &LabelVector, tolerant: bool) -> Result<f64> {
    let mut acc = 0.0;
    for i in y.allowed() {
        acc += ln_guarded(p[i], tolerant, "allowed probability")?;
    }
    Ok(acc / y.k() as f64)
}

/// Negative log of the allowed mass.
pub fn nll(p: &[f64], y: &LabelVector, params: &LossParams) -> Result<LossResult> {
    check_probs(p, y)?;
    let allowed = y.allowed_mass(p);
    let rest = y.disallowed_mass(p);
    let value = -ln_guarded(allowed, params.tolerant, "allowed mass")?;
    let denom = allowed.max(MIN_PROB);
    // (p_j / p̂)(p̂ - 1) for allowed j, written with the directly summed
    // disallowed mass so the factor stays accurate as p̂ -> 1.
    let grad_logits = (0..p.len())
        .map(|j| {
            if y.is_allowed(j) {
                -p[j] * rest / denom
            } else {
                p[j]
            }
        })
        .collect();
    Ok(LossResult { value, grad_logits })
}

/// Libra-loss: `log(1 - p̂) - (1/k) Σ y_i log p_i`.
///
/// Every allowed logit receives exactly `-1/k`, which keeps the ratios of
/// allowed probabilities fixed under a gradient step on the logits. With
/// `libra_fit_weight` both value and gradient are scaled by `1 - p̂`.
///
/// At `p̂ = 1` the value is `-inf`; strict mode reports
/// [`Error::FitComplete`], tolerant mode clamps `1 - p̂` and, when the fit
/// weight is on, returns a zero gradient.
pub fn libra(p: &[f64], y: &LabelVector, params: &LossParams) -> Result<LossResult> {
    check_probs(p, y)?;
    let m = p.len();
    let k = y.k() as f64;
    let rest = y.disallowed_mass(p);
    if rest <= 0.0 {
        if !params.tolerant {
            return Err(Error::FitComplete);
        }
        if params.libra_fit_weight {
            return Ok(LossResult::zeros(m));
        }
    }
    let rest_c = if params.tolerant { rest.max(MIN_DISALLOWED_MASS) } else { rest };
    let value = rest_c.ln() - mean_allowed_log(p, y, params.tolerant)?;
    let grad_logits = (0..m)
        .map(|j| if y.is_allowed(j) { -1.0 / k } else { p[j] / rest_c })
        .collect();
    let mut out = LossResult { value, grad_logits };
    if params.libra_fit_weight {
        out.scale(rest);
    }
    Ok(out)
}

/// Sag-loss: mean disallowed log-likelihood minus mean allowed log-likelihood.
///
/// The logit gradient is constant: `-1/k` on allowed outputs and `1/(m-k)`
/// on disallowed ones, so ratios inside both classes are preserved.
pub fn sag(p: &[f64], y: &LabelVector, params: &LossParams) -> Result<LossResult> {
    check_probs(p, y)?;
    check_has_disallowed(LossKind::Sag, y)?;
    let m = p.len();
    let k = y.k() as f64;
    let rest = (m - y.k()) as f64;
    let mut dis = 0.0;
    for i in y.disallowed() {
        dis += ln_guarded(p[i], params.tolerant, "disallowed probability")?;
    }
    let value = dis / rest - mean_allowed_log(p, y, params.tolerant)?;
    let grad_logits = (0..m)
        .map(|j| if y.is_allowed(j) { -1.0 / k } else { 1.0 / rest })
        .collect();
    Ok(LossResult { value, grad_logits })
}

/// Sum of the allowed negative log-likelihoods.
pub fn uniform_loss(p: &[f64], y: &LabelVector, params: &LossParams) -> Result<LossResult> {
    check_probs(p, y)?;
    let k = y.k() as f64;
    let mut value = 0.0;
    for i in y.allowed() {
        value -= ln_guarded(p[i], params.tolerant, "allowed probability")?;
    }
    let grad_logits = (0..p.len()).map(|j| k * p[j] - y.indicator(j)).collect();
    Ok(LossResult { value, grad_logits })
}

/// Normalized `y_i (p_i / p̂)^β` weights of the β-merit loss.
pub fn merit_weights(p: &[f64], y: &LabelVector, beta: f64, tolerant: bool) -> Result<Vec<f64>> {
    let allowed = y.allowed_mass(p);
    if allowed <= 0.0 && !tolerant {
        return Err(Error::Domain("merit: allowed mass is zero".into()));
    }
    let allowed = allowed.max(MIN_PROB);
    let mut w: Vec<f64> = (0..p.len())
        .map(|i| if y.is_allowed(i) { (p[i] / allowed).powf(beta) } else { 0.0 })
        .collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Domain("merit: degenerate weights".into()));
    }
    w.iter_mut().for_each(|v| *v /= total);
    Ok(w)
}

/// β-merit loss. β = 1 reproduces the nll gradient, β = 0 is uniform / k.
pub fn merit(p: &[f64], y: &LabelVector, params: &LossParams) -> Result<LossResult> {
    check_probs(p, y)?;
    if !(0.0..=1.0).contains(&params.beta) {
        return Err(Error::invalid(format!("merit beta must lie in [0, 1], got {}", params.beta)));
    }
    let w = merit_weights(p, y, params.beta, params.tolerant)?;
    let mut value = 0.0;
    for i in y.allowed() {
        value -= w[i] * ln_guarded(p[i], params.tolerant, "allowed probability")?;
    }
    let grad_logits = p.iter().zip(&w).map(|(pj, wj)| pj - wj).collect();
    Ok(LossResult { value, grad_logits })
}

/// LW weights: softmax of the logits restricted to the allowed outputs for
/// allowed `i` and to the disallowed outputs otherwise.
pub fn lws_weights(z: &[f64], y: &LabelVector) -> Vec<f64> {
    let class_max = |allowed: bool| {
        (0..z.len())
            .filter(|&i| y.is_allowed(i) == allowed)
            .map(|i| z[i])
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let (max_a, max_d) = (class_max(true), class_max(false));
    let mut w: Vec<f64> = (0..z.len())
        .map(|i| {
            let shift = if y.is_allowed(i) { max_a } else { max_d };
            (z[i] - shift).exp()
        })
        .collect();
    let sum_a: f64 = y.allowed().map(|i| w[i]).sum();
    let sum_d: f64 = y.disallowed().map(|i| w[i]).sum();
    for (i, v) in w.iter_mut().enumerate() {
        *v /= if y.is_allowed(i) { sum_a } else { sum_d };
    }
    w
}

fn lws_with_weights(z: &[f64], y: &LabelVector, w: &[f64], params: &LossParams) -> LossResult {
    let sigma = params.lws_sigmoid;
    let beta = params.beta;
    let mut value = 0.0;
    let mut grad_logits = Vec::with_capacity(z.len());
    for (j, (&zj, &wj)) in z.iter().zip(w).enumerate() {
        let slope = sigma.slope_sign() * sigma.eval(zj) * sigma.eval(-zj);
        if y.is_allowed(j) {
            value += wj * sigma.eval(zj);
            grad_logits.push(wj * slope);
        } else {
            value += beta * wj * sigma.eval(-zj);
            grad_logits.push(-beta * wj * slope);
        }
    }
    LossResult { value, grad_logits }
}

/// Leverage-weighted loss on raw logits, weights frozen.
///
/// With the printed `σ(t) = 1/(1 + e^t)` the gradient is
/// `-y_j w_j σ(z_j)σ(-z_j) + β(1 - y_j) w_j σ(z_j)σ(-z_j)`; the conventional
/// form flips both signs.
pub fn lws(z: &[f64], y: &LabelVector, params: &LossParams) -> Result<LossResult> {
    y.check_len(z.len())?;
    check_has_disallowed(LossKind::Lws, y)?;
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logit".into()));
    }
    if !(params.beta > 0.0) {
        return Err(Error::invalid(format!("lws beta must be > 0, got {}", params.beta)));
    }
    let w = lws_weights(z, y);
    Ok(lws_with_weights(z, y, &w, params))
}

/// `p_i / p̂` on allowed outputs, zero elsewhere.
pub fn rc_weights(p: &[f64], y: &LabelVector, tolerant: bool) -> Result<Vec<f64>> {
    let allowed = y.allowed_mass(p);
    if allowed <= 0.0 && !tolerant {
        return Err(Error::Domain("rc: allowed mass is zero".into()));
    }
    let allowed = allowed.max(MIN_PROB);
    Ok((0..p.len())
        .map(|i| if y.is_allowed(i) { p[i] / allowed } else { 0.0 })
        .collect())
}

/// Risk-consistent loss, leading 1/2 kept.
pub fn rc(p: &[f64], y: &LabelVector, params: &LossParams) -> Result<LossResult> {
    check_probs(p, y)?;
    let w = rc_weights(p, y, params.tolerant)?;
    let mut value = 0.0;
    for i in y.allowed() {
        value -= 0.5 * w[i] * ln_guarded(p[i], params.tolerant, "allowed probability")?;
    }
    let weight_sum: f64 = w.iter().sum();
    let grad_logits = p
        .iter()
        .zip(&w)
        .map(|(pj, wj)| 0.5 * (pj * weight_sum - wj))
        .collect();
    Ok(LossResult { value, grad_logits })
}

/// Evaluate `kind` at logits `z`, including the logit L2 penalty when
/// `params.logit_l2_gamma > 0`. The negative-supervision term is separate,
/// see [`negative_term`].
pub fn evaluate(kind: LossKind, z: &[f64], y: &LabelVector, params: &LossParams) -> Result<LossResult> {
    y.check_len(z.len())?;
    let mut out = if kind == LossKind::Lws {
        lws(z, y, params)?
    } else {
        let p = softmax(z)?;
        evaluate_probs(kind, &p, y, params)?
    };
    if params.logit_l2_gamma > 0.0 {
        let gamma = params.logit_l2_gamma;
        for (g, &zj) in out.grad_logits.iter_mut().zip(z) {
            out.value += gamma * zj * zj;
            *g += 2.0 * gamma * zj;
        }
    }
    Ok(out)
}

/// Dispatch for the probability-defined losses. LW needs logits and is
/// rejected here.
pub fn evaluate_probs(kind: LossKind, p: &[f64], y: &LabelVector, params: &LossParams) -> Result<LossResult> {
    match kind {
        LossKind::Nll => nll(p, y, params),
        LossKind::Libra => libra(p, y, params),
        LossKind::Sag => sag(p, y, params),
        LossKind::Uniform => uniform_loss(p, y, params),
        LossKind::Merit => merit(p, y, params),
        LossKind::Rc => rc(p, y, params),
        LossKind::Lws => Err(Error::invalid("lws is defined on logits, not probabilities")),
    }
}

/// Negative-supervision term `-Σ L(p, y_neg)` over a uniform sample (without
/// replacement) of at most `params.neg_sample_count` negative label sets.
///
/// The result is unscaled; the combined objective is
/// `base + params.neg_gamma · negative_term(..)`. An empty pool yields zero.
pub fn negative_term(
    kind: LossKind,
    z: &[f64],
    negatives: &[LabelVector],
    rng: &mut Rng,
    params: &LossParams,
) -> Result<LossResult> {
    let mut out = LossResult::zeros(z.len());
    if negatives.is_empty() {
        return Ok(out);
    }
    let chosen = rng.sample_indices(negatives.len(), params.neg_sample_count);
    let base = LossParams {
        logit_l2_gamma: 0.0,
        ..params.clone()
    };
    for idx in chosen {
        let term = evaluate(kind, z, &negatives[idx], &base)?;
        out.add_scaled(&term, -1.0);
    }
    Ok(out)
}

/// Base loss plus `γ` times the sampled negative term.
pub fn evaluate_with_negatives(
    kind: LossKind,
    z: &[f64],
    y: &LabelVector,
    negatives: &[LabelVector],
    rng: &mut Rng,
    params: &LossParams,
) -> Result<LossResult> {
    let mut out = evaluate(kind, z, y, params)?;
    if params.neg_gamma > 0.0 && !negatives.is_empty() {
        let neg = negative_term(kind, z, negatives, rng, params)?;
        out.add_scaled(&neg, params.neg_gamma);
    }
    Ok(out)
}

/// Weights held constant while differentiating.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenWeights {
    /// Per-output identification weights (merit, LW, RC).
    pub per_output: Option<Vec<f64>>,
    /// Libra's `w_Lib`, 1 when unused.
    pub fit_weight: f64,
}

/// Capture the weights of `kind` at probability point `p`. LW weights are
/// taken at the logits `log p`.
pub fn freeze_weights(kind: LossKind, p: &[f64], y: &LabelVector, params: &LossParams) -> Result<FrozenWeights> {
    check_probs(p, y)?;
    let per_output = match kind {
        LossKind::Merit => Some(merit_weights(p, y, params.beta, params.tolerant)?),
        LossKind::Rc => Some(rc_weights(p, y, params.tolerant)?),
        LossKind::Lws => {
            let z: Vec<f64> = p.iter().map(|v| v.ln()).collect();
            Some(lws_weights(&z, y))
        }
        _ => None,
    };
    let fit_weight = if kind == LossKind::Libra && params.libra_fit_weight {
        1.0 - y.allowed_mass(p)
    } else {
        1.0
    };
    Ok(FrozenWeights { per_output, fit_weight })
}

/// Loss value as a literal function of `p` with frozen weights.
///
/// `p` need not lie on the simplex: this is the black-box view used by
/// finite-difference oracles, so e.g. libra uses `1 - Σ y_i p_i` rather
/// than the disallowed mass. LW is evaluated at `z = log p`.
pub fn value_in_probs(
    kind: LossKind,
    p: &[f64],
    y: &LabelVector,
    params: &LossParams,
    frozen: &FrozenWeights,
) -> Result<f64> {
    y.check_len(p.len())?;
    let tol = params.tolerant;
    let k = y.k() as f64;
    let log_allowed_sum = |scale: &dyn Fn(usize) -> f64| -> Result<f64> {
        let mut acc = 0.0;
        for i in y.allowed() {
            acc += scale(i) * ln_guarded(p[i], tol, "allowed probability")?;
        }
        Ok(acc)
    };
    let weights = || {
        frozen
            .per_output
            .as_deref()
            .ok_or_else(|| Error::invalid(format!("{kind} needs frozen weights")))
    };
    let value = match kind {
        LossKind::Nll => -ln_guarded(y.allowed_mass(p), tol, "allowed mass")?,
        LossKind::Libra => {
            let v = ln_guarded(1.0 - y.allowed_mass(p), tol, "disallowed mass")? - log_allowed_sum(&|_| 1.0)? / k;
            frozen.fit_weight * v
        }
        LossKind::Sag => {
            check_has_disallowed(kind, y)?;
            let rest = (y.m() - y.k()) as f64;
            let mut dis = 0.0;
            for i in y.disallowed() {
                dis += ln_guarded(p[i], tol, "disallowed probability")?;
            }
            dis / rest - log_allowed_sum(&|_| 1.0)? / k
        }
        LossKind::Uniform => -log_allowed_sum(&|_| 1.0)?,
        LossKind::Merit => {
            let w = weights()?;
            -log_allowed_sum(&|i| w[i])?
        }
        LossKind::Rc => {
            let w = weights()?;
            -0.5 * log_allowed_sum(&|i| w[i])?
        }
        LossKind::Lws => {
            check_has_disallowed(kind, y)?;
            let w = weights()?;
            let mut z = Vec::with_capacity(p.len());
            for &v in p {
                z.push(ln_guarded(v, tol, "probability")?);
            }
            lws_with_weights(&z, y, w, params).value
        }
    };
    Ok(value)
}

/// Analytic `∂L/∂p_i` with weights frozen at `p`.
pub fn prob_gradient(kind: LossKind, p: &[f64], y: &LabelVector, params: &LossParams) -> Result<Vec<f64>> {
    check_probs(p, y)?;
    let frozen = freeze_weights(kind, p, y, params)?;
    let m = p.len();
    let k = y.k() as f64;
    let inv = |v: f64| -> Result<f64> {
        if v > 0.0 {
            Ok(1.0 / v)
        } else {
            Err(Error::Domain("probability gradient at the boundary".into()))
        }
    };
    let mut g = vec![0.0; m];
    match kind {
        LossKind::Nll => {
            let a = inv(y.allowed_mass(p))?;
            for i in y.allowed() {
                g[i] = -a;
            }
        }
        LossKind::Libra => {
            let r = inv(1.0 - y.allowed_mass(p))?;
            for i in y.allowed() {
                g[i] = frozen.fit_weight * (-r - inv(p[i])? / k);
            }
        }
        LossKind::Sag => {
            check_has_disallowed(kind, y)?;
            let rest = (m - y.k()) as f64;
            for i in 0..m {
                g[i] = if y.is_allowed(i) { -inv(p[i])? / k } else { inv(p[i])? / rest };
            }
        }
        LossKind::Uniform => {
            for i in y.allowed() {
                g[i] = -inv(p[i])?;
            }
        }
        LossKind::Merit | LossKind::Rc => {
            let w = frozen.per_output.as_deref().unwrap_or_default();
            let c = if kind == LossKind::Rc { 0.5 } else { 1.0 };
            for i in y.allowed() {
                g[i] = -c * w[i] * inv(p[i])?;
            }
        }
        LossKind::Lws => {
            let z: Vec<f64> = p.iter().map(|v| v.ln()).collect();
            let w = frozen.per_output.as_deref().unwrap_or_default();
            let r = lws_with_weights(&z, y, w, params);
            for i in 0..m {
                g[i] = r.grad_logits[i] * inv(p[i])?;
            }
        }
    }
    Ok(g)
}

/// Allowed cross-entropy `-(1/k) Σ y_i log p_i`.
pub fn allowed_cross_entropy(p: &[f64], y: &LabelVector) -> f64 {
    -y.allowed().map(|i| p[i].ln()).sum::<f64>() / y.k() as f64
}

/// `KL(U_y ‖ p)` with `U_y` uniform on the allowed outputs.
pub fn kl_uniform_allowed(p: &[f64], y: &LabelVector) -> f64 {
    let u = 1.0 / y.k() as f64;
    y.allowed().map(|i| u * (u / p[i]).ln()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(bits: &[u8]) -> LabelVector {
        LabelVector::from_binary(bits).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < tol, "{a:?} vs {b:?}");
        }
    }

    const P: [f64; 3] = [0.5, 0.3, 0.2];

    #[test]
    fn nll_reference_values() {
        let y = lv(&[1, 1, 0]);
        let r = nll(&P, &y, &LossParams::default()).unwrap();
        assert!((r.value - 0.223_143_551_314_209_76).abs() < 1e-15);
        close(&r.grad_logits, &[-0.125, -0.075, 0.2], 1e-15);

        // (p_j / p̂)(p̂ - y_j) with p̂ = 0.9, i.e. softmax minus the one-hot.
        let r = nll(&[0.9, 0.1], &lv(&[1, 0]), &LossParams::default()).unwrap();
        assert!((r.value + 0.9f64.ln()).abs() < 1e-15);
        close(&r.grad_logits, &[-0.1, 0.1], 1e-15);
    }

    #[test]
    fn nll_all_allowed_is_flat() {
        let r = nll(&P, &lv(&[1, 1, 1]), &LossParams::default()).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad_logits.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn nll_zero_mass_is_domain_error() {
        let y = lv(&[1, 0, 0]);
        let err = nll(&[0.0, 0.5, 0.5], &y, &LossParams::default()).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
        let tolerant = LossParams { tolerant: true, ..LossParams::default() };
        let r = nll(&[0.0, 0.5, 0.5], &y, &tolerant).unwrap();
        assert!(r.is_finite());
    }

    #[test]
    fn libra_reference_values() {
        let y = lv(&[1, 1, 0]);
        let r = libra(&P, &y, &LossParams::default()).unwrap();
        close(&r.grad_logits, &[-0.5, -0.5, 1.0], 1e-15);
        assert!((r.value + 0.660_877_919_991_159_7).abs() < 1e-14);

        let r = libra(&[0.25; 4], &lv(&[1, 1, 0, 0]), &LossParams::default()).unwrap();
        assert!((r.value - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn libra_single_allowed_has_unit_derivative() {
        let y = lv(&[0, 1, 0, 0]);
        let r = libra(&[0.1, 0.2, 0.3, 0.4], &y, &LossParams::default()).unwrap();
        assert_eq!(r.grad_logits[1], -1.0);
    }

    #[test]
    fn libra_fit_complete() {
        let y = lv(&[1, 1, 0]);
        let p = [0.6, 0.4, 0.0];
        assert!(matches!(libra(&p, &y, &LossParams::default()), Err(Error::FitComplete)));
        let r = libra(&p, &y, &LossParams::training()).unwrap();
        assert!(r.grad_logits.iter().all(|&g| g == 0.0));
        let no_weight = LossParams { tolerant: true, ..LossParams::default() };
        assert!(libra(&p, &y, &no_weight).unwrap().value.is_finite());
    }

    #[test]
    fn libra_fit_weight_scales_result() {
        let y = lv(&[1, 1, 0]);
        let plain = libra(&P, &y, &LossParams::default()).unwrap();
        let weighted = libra(&P, &y, &LossParams { libra_fit_weight: true, ..LossParams::default() }).unwrap();
        assert!((weighted.value - 0.2 * plain.value).abs() < 1e-15);
        close(&weighted.grad_logits, &[-0.1, -0.1, 0.2], 1e-15);
    }

    #[test]
    fn sag_gradient_is_constant() {
        let y = lv(&[1, 1, 0]);
        for p in [[0.5, 0.3, 0.2], [0.1, 0.1, 0.8]] {
            let r = sag(&p, &y, &LossParams::default()).unwrap();
            assert_eq!(r.grad_logits, vec![-0.5, -0.5, 1.0]);
        }
        let r = sag(&[0.25; 4], &lv(&[1, 0, 1, 0]), &LossParams::default()).unwrap();
        assert_eq!(r.grad_logits, vec![-0.5, 0.5, -0.5, 0.5]);
        assert_eq!(r.grad_sum(), 0.0);
        let r = sag(&[0.5, 0.5], &lv(&[1, 0]), &LossParams::default()).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(sag(&P, &lv(&[1, 1, 1]), &LossParams::default()).is_err());
    }

    #[test]
    fn sag_logit_penalty_via_evaluate() {
        let y = lv(&[1, 0, 0]);
        let z = [0.5, -1.0, 2.0];
        let params = LossParams { logit_l2_gamma: 0.01, ..LossParams::default() };
        let plain = evaluate(LossKind::Sag, &z, &y, &LossParams::default()).unwrap();
        let pen = evaluate(LossKind::Sag, &z, &y, &params).unwrap();
        assert!((pen.value - plain.value - 0.01 * 5.25).abs() < 1e-14);
        for ((a, b), zj) in pen.grad_logits.iter().zip(&plain.grad_logits).zip(&z) {
            assert!((a - b - 0.02 * zj).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_values() {
        let y = lv(&[1, 1, 0]);
        let r = uniform_loss(&P, &y, &LossParams::default()).unwrap();
        assert!((r.value - 1.897_119_984_885_881_3).abs() < 1e-14);
        let r = uniform_loss(&[0.25; 4], &lv(&[1, 0, 1, 1]), &LossParams::default()).unwrap();
        assert!((r.value - 3.0 * 4f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn uniform_gradient_vanishes_only_at_uniform_on_allowed() {
        let y = lv(&[1, 1, 0, 0]);
        let tol = LossParams { tolerant: true, ..LossParams::default() };
        let opt = uniform_loss(&[0.5, 0.5, 0.0, 0.0], &y, &tol).unwrap();
        assert!(opt.grad_logits.iter().all(|g| g.abs() < 1e-15));
        let off = uniform_loss(&[0.6, 0.4, 0.0, 0.0], &y, &tol).unwrap();
        assert!(off.grad_logits.iter().any(|g| g.abs() > 1e-3));
    }

    #[test]
    fn merit_interpolates_nll_and_uniform() {
        let y = lv(&[1, 1, 0]);
        let r1 = merit(&P, &y, &LossParams::default().with_beta(1.0)).unwrap();
        let n = nll(&P, &y, &LossParams::default()).unwrap();
        close(&r1.grad_logits, &n.grad_logits, 1e-12);

        let r0 = merit(&P, &y, &LossParams::default().with_beta(0.0)).unwrap();
        let u = uniform_loss(&P, &y, &LossParams::default()).unwrap();
        let scaled: Vec<f64> = u.grad_logits.iter().map(|g| g / 2.0).collect();
        close(&r0.grad_logits, &scaled, 1e-12);

        let r = merit(&P, &y, &LossParams::default().with_beta(0.5)).unwrap();
        assert!((r.value - 0.916_118_311_741_808_1).abs() < 1e-14);
        close(
            &r.grad_logits,
            &[-0.063_508_326_896_291_56, -0.136_491_673_103_708_44, 0.2],
            1e-15,
        );
        assert!(merit(&P, &y, &LossParams::default().with_beta(1.5)).is_err());
    }

    #[test]
    fn lws_values() {
        let params = LossParams::default();
        let r = lws(&[0.0, 0.0], &lv(&[1, 0]), &params).unwrap();
        assert!((r.value - 1.0).abs() < 1e-15);

        let r = lws(&[1.0, -1.0, 0.0], &lv(&[1, 0, 0]), &params).unwrap();
        assert!((r.value - 0.706_800_198_813_510_8).abs() < 1e-15);
        close(
            &r.grad_logits,
            &[-0.196_611_933_241_481_85, 0.052_877_092_784_266_72, 0.182_764_644_657_501_22],
            1e-15,
        );

        // Zero logits with k = m/2 and β = 1: both halves contribute 1/2.
        let y = lv(&[1, 1, 0, 0]);
        let r = lws(&[0.0; 4], &y, &params).unwrap();
        assert!((r.value - 1.0).abs() < 1e-15);
        let flipped = lws(&[0.0; 4], &lv(&[0, 0, 1, 1]), &params).unwrap();
        assert_eq!(r.value, flipped.value);

        assert!(lws(&[0.0, 0.0], &lv(&[1, 1]), &params).is_err());
    }

    #[test]
    fn rc_values() {
        let y = lv(&[1, 1, 0]);
        let r = rc(&P, &y, &LossParams::default()).unwrap();
        assert!((r.value - 0.442_353_394_736_095_9).abs() < 1e-15);
        close(&r.grad_logits, &[-0.0625, -0.0375, 0.1], 1e-15);

        let r = rc(&P, &lv(&[0, 1, 0]), &LossParams::default()).unwrap();
        assert!((r.value + 0.5 * 0.3f64.ln()).abs() < 1e-15);

        let r = rc(&P, &lv(&[1, 1, 1]), &LossParams::default()).unwrap();
        let entropy: f64 = -P.iter().map(|p| p * p.ln()).sum::<f64>();
        assert!((r.value - 0.5 * entropy).abs() < 1e-15);
    }

    #[test]
    fn negative_term_cancels_matching_positive() {
        let y = lv(&[1, 1, 0]);
        let z = [0.2, -0.4, 1.0];
        let params = LossParams { neg_gamma: 1.0, ..LossParams::default() };
        let mut rng = Rng::new(0);
        let r = evaluate_with_negatives(LossKind::Nll, &z, &y, std::slice::from_ref(&y), &mut rng, &params).unwrap();
        assert!(r.value.abs() < 1e-15);
        assert!(r.grad_logits.iter().all(|g| g.abs() < 1e-15));

        let off = LossParams::default();
        let base = evaluate(LossKind::Nll, &z, &y, &off).unwrap();
        let r = evaluate_with_negatives(LossKind::Nll, &z, &y, std::slice::from_ref(&y), &mut rng, &off).unwrap();
        assert_eq!(r, base);

        let empty = negative_term(LossKind::Nll, &z, &[], &mut rng, &params).unwrap();
        assert_eq!(empty, LossResult::zeros(3));
    }

    #[test]
    fn negative_sampling_is_reproducible() {
        let negs: Vec<LabelVector> = (0..5).map(|i| LabelVector::from_indices(6, &[i]).unwrap()).collect();
        let params = LossParams { neg_sample_count: 2, ..LossParams::default() };
        let z = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let a = negative_term(LossKind::Uniform, &z, &negs, &mut Rng::new(11), &params).unwrap();
        let b = negative_term(LossKind::Uniform, &z, &negs, &mut Rng::new(11), &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn entropy_identity() {
        let y = lv(&[1, 0, 1, 1, 0]);
        let p = [0.1, 0.2, 0.3, 0.15, 0.25];
        let lhs = allowed_cross_entropy(&p, &y);
        let rhs = kl_uniform_allowed(&p, &y) + 3f64.ln();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn loss_names_round_trip() {
        for kind in LossKind::ALL {
            assert_eq!(kind.name().parse::<LossKind>().unwrap(), kind);
        }
        assert!("mse".parse::<LossKind>().is_err());
    }

    #[test]
    fn param_validation() {
        let p = LossParams::default().with_beta(2.0);
        assert!(p.validate_for(LossKind::Merit).is_err());
        assert!(p.validate_for(LossKind::Lws).is_ok());
        assert!(LossParams::default().with_beta(0.0).validate_for(LossKind::Lws).is_err());
        let bad = LossParams { logit_l2_gamma: -1.0, ..LossParams::default() };
        assert!(bad.validate_for(LossKind::Sag).is_err());
    }
}
