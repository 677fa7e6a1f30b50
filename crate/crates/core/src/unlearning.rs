//! Unlearning engines: retention-aware sample weights, gradient ascent and
//! its weighted variant, and the composite objectives (gradient difference,
//! KL minimization, preference optimization) with optional weighting of the
//! forget term.

use std::fmt;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{self, AttributionError};
use crate::linalg::{self, LinalgError};
use crate::model::{self, Dataset, ModelError, ModelSpec, ParamVector};
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UnlearnError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite attribution score at position {0}")]
    NonFiniteScore(usize),
    #[error("{weights} weights for {grads} forget gradients")]
    Misaligned { weights: usize, grads: usize },
    #[error("KL minimization needs the frozen pre-unlearning parameters")]
    MissingReference,
    #[error("preference optimization needs a neutral label")]
    MissingNeutralLabel,
    #[error("non-finite diagnostics at step {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
}

pub type Result<T> = std::result::Result<T, UnlearnError>;

/// Per-forget-sample weights `ω_i = n_f · softmax(−a/τ)_i`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GuardWeights {
    pub weights: Vec<f64>,
    pub tau: f64,
    pub scores: Vec<f64>,
}

impl GuardWeights {
    pub fn uniform(n: usize) -> Self {
        Self { weights: vec![1.0; n], tau: f64::INFINITY, scores: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().sum::<f64>() / self.weights.len() as f64
    }

    /// Population variance of the weights.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.weights.iter().map(|w| (w - m) * (w - m)).sum::<f64>() / self.weights.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Temperature softmax of the negated scores, scaled so the weights average
/// to one. The maximum exponent is subtracted before exponentiating; weights
/// whose exponent falls below the `f64` range underflow to zero.
pub fn guard_weights(scores: &[f64], tau: f64) -> Result<GuardWeights> {
    if scores.is_empty() {
        return Err(UnlearnError::Config("at least one forget score is required".into()));
    }
    if !(tau > 0.0) || tau.is_nan() {
        return Err(UnlearnError::Config(format!("temperature must be > 0, got {tau}")));
    }
    if let Some(i) = scores.iter().position(|a| !a.is_finite()) {
        return Err(UnlearnError::NonFiniteScore(i));
    }
    let z: Vec<f64> = scores.iter().map(|a| -a / tau).collect();
    let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // subnormal exponentials lose the ordering of their scores; they become 0
    let e: Vec<f64> = z.iter().map(|v| flush_subnormal((v - zmax).exp())).collect();
    let total: f64 = e.iter().sum();
    let n = scores.len() as f64;
    let weights = e.iter().map(|v| flush_subnormal(n * v / total)).collect();
    Ok(GuardWeights { weights, tau, scores: scores.to_vec() })
}

fn flush_subnormal(v: f64) -> f64 {
    if v < f64::MIN_POSITIVE {
        0.0
    } else {
        v
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(UnlearnError::Config(format!("unlearning rate must be finite and >= 0, got {eta}")));
    }
    Ok(())
}

/// `θ + η · (1/n_f) Σ g_i`
pub fn ga_step(theta: &ParamVector, eta: f64, forget_grads: &[Vec<f64>]) -> Result<ParamVector> {
    check_eta(eta)?;
    step_with(theta, eta, forget_grads, None)
}

/// `θ + (η/n_f) Σ ω_i g_i`. Shares its reduction with [`ga_step`], so unit
/// weights give a bit-identical result.
pub fn guard_ga_step(theta: &ParamVector, eta: f64, forget_grads: &[Vec<f64>], w: &GuardWeights) -> Result<ParamVector> {
    check_eta(eta)?;
    if w.len() != forget_grads.len() {
        return Err(UnlearnError::Misaligned { weights: w.len(), grads: forget_grads.len() });
    }
    step_with(theta, eta, forget_grads, Some(&w.weights))
}

fn step_with(theta: &ParamVector, eta: f64, grads: &[Vec<f64>], w: Option<&[f64]>) -> Result<ParamVector> {
    let dir = linalg::weighted_mean(grads, w)?;
    if dir.len() != theta.len() {
        return Err(LinalgError::Dimension { expected: theta.len(), actual: dir.len() }.into());
    }
    let mut out = theta.clone();
    linalg::axpy(eta, &dir, &mut out.0);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    GA,
    GD,
    KM,
    PO,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::GA, Method::GD, Method::KM, Method::PO];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Method::GA => "GA",
            Method::GD => "GD",
            Method::KM => "KM",
            Method::PO => "PO",
        };
        f.write_str(s)
    }
}

fn default_epochs() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnConfig {
    pub method: Method,
    #[serde(default)]
    pub use_guard: bool,
    pub eta: f64,
    #[serde(default = "crate::config::default_tau")]
    pub tau: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Class index substituted for forget labels under PO.
    #[serde(default)]
    pub neutral_label: Option<usize>,
    /// Seeded retain subsample for the GD/KM/PO retain terms; the full
    /// retain set is used when absent.
    #[serde(default)]
    pub retain_subsample: Option<usize>,
    /// Recompute scores and weights at the start of every epoch instead of
    /// freezing them at the initial parameters.
    #[serde(default)]
    pub recompute_weights: bool,
    #[serde(default)]
    pub seed: u64,
}

impl UnlearnConfig {
    pub fn new(method: Method, use_guard: bool, eta: f64, tau: f64) -> Self {
        Self {
            method,
            use_guard,
            eta,
            tau,
            epochs: 1,
            neutral_label: None,
            retain_subsample: None,
            recompute_weights: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(UnlearnError::Config(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(self.tau > 0.0) || self.tau.is_nan() {
            return Err(UnlearnError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.epochs == 0 {
            return Err(UnlearnError::Config("epochs must be >= 1".into()));
        }
        if self.retain_subsample == Some(0) {
            return Err(UnlearnError::Config("retain_subsample must be >= 1 when set".into()));
        }
        if self.method == Method::PO && self.neutral_label.is_none() {
            return Err(UnlearnError::MissingNeutralLabel);
        }
        Ok(())
    }

    /// `"GA"` or `"GUARD-GA"` etc.
    pub fn tag(&self) -> String {
        if self.use_guard {
            format!("GUARD-{}", self.method)
        } else {
            self.method.to_string()
        }
    }
}

/// Inputs the composite objectives need besides the parameters.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveContext<'a> {
    /// Frozen pre-unlearning parameters (KL minimization).
    pub reference: Option<&'a ParamVector>,
    pub neutral_label: Option<usize>,
    /// Retain indices used by the retain terms.
    pub retain_subset: &'a [usize],
}

/// Gradient of the method's objective (minimized by descent):
///
/// * GA: `−L_f`
/// * GD: `−L_f + L_r`
/// * KM: `−L_f + mean_r KL(M_0(x) ‖ M_θ(x))`
/// * PO: `L_r + L_f^neutral`
///
/// The forget term is the ω-weighted mean when `weights` is given.
pub fn composite_objective_grad(
    method: Method,
    spec: &ModelSpec,
    theta: &ParamVector,
    data: &Dataset,
    weights: Option<&GuardWeights>,
    ctx: &ObjectiveContext<'_>,
) -> Result<Vec<f64>> {
    let s = &data.samples;
    if let Some(w) = weights {
        if w.len() != data.n_forget() {
            return Err(UnlearnError::Misaligned { weights: w.len(), grads: data.n_forget() });
        }
    }
    let w = weights.map(|w| w.weights.as_slice());
    let retain_mean = |theta: &ParamVector| model::avg_grad(spec, theta, s, ctx.retain_subset);

    let mut g = match method {
        Method::GA | Method::GD | Method::KM => {
            let fg = model::per_sample_grads(spec, theta, s, &data.forget_idx)?;
            let mut f = linalg::weighted_mean(&fg, w)?;
            f.iter_mut().for_each(|v| *v = -*v);
            f
        }
        Method::PO => {
            let neutral = ctx.neutral_label.ok_or(UnlearnError::MissingNeutralLabel)?;
            let fg = data
                .forget_idx
                .iter()
                .map(|&i| model::sample_grad(spec, theta, &s.inputs[i], neutral))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            linalg::weighted_mean(&fg, w)?
        }
    };
    match method {
        Method::GA => {}
        Method::GD | Method::PO => linalg::axpy(1.0, &retain_mean(theta)?, &mut g),
        Method::KM => {
            let reference = ctx.reference.ok_or(UnlearnError::MissingReference)?;
            let kl = kl_grad(spec, theta, reference, data, ctx.retain_subset)?;
            linalg::axpy(1.0, &kl, &mut g);
        }
    }
    Ok(g)
}

fn kl_grad(
    spec: &ModelSpec,
    theta: &ParamVector,
    reference: &ParamVector,
    data: &Dataset,
    subset: &[usize],
) -> Result<Vec<f64>> {
    let s = &data.samples;
    let grads = subset
        .iter()
        .map(|&i| {
            let p0 = model::class_probabilities(spec, reference, &s.inputs[i])?;
            model::soft_target_grad(spec, theta, &s.inputs[i], &p0)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(linalg::weighted_mean(&grads, None)?)
}

/// Mean `KL(M_0(x) ‖ M_θ(x))` over `subset`.
pub fn kl_term(
    spec: &ModelSpec,
    theta: &ParamVector,
    reference: &ParamVector,
    data: &Dataset,
    subset: &[usize],
) -> Result<f64> {
    let s = &data.samples;
    let mut acc = 0.0;
    for &i in subset {
        let p0 = model::class_probabilities(spec, reference, &s.inputs[i])?;
        let p = model::class_probabilities(spec, theta, &s.inputs[i])?;
        acc += model::kl_divergence(&p0, &p);
    }
    Ok(acc / subset.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub forget_loss: f64,
    pub retain_loss: f64,
    pub step_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnlearnResult {
    pub method: String,
    pub theta_after: ParamVector,
    pub steps: Vec<StepDiagnostics>,
    /// Weights used in the first epoch (absent without weighting).
    pub weights: Option<GuardWeights>,
    /// Attribution scores at the initial parameters.
    pub scores: Vec<f64>,
}

impl UnlearnResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }
}

/// Retention attribution for every forget sample at `theta`.
pub fn forget_scores(spec: &ModelSpec, theta: &ParamVector, data: &Dataset) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let s = &data.samples;
    let j_avg = model::avg_grad(spec, theta, s, &data.retain_idx)?;
    let grads = model::per_sample_grads(spec, theta, s, &data.forget_idx)?;
    let scores = grads.iter().map(|g| attribution::guard_score(&j_avg, g)).collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((scores, grads))
}

fn retain_subset(data: &Dataset, cfg: &UnlearnConfig) -> Result<Vec<usize>> {
    match cfg.retain_subsample {
        None => Ok(data.retain_idx.clone()),
        Some(k) if k > data.n_retain() => {
            Err(UnlearnError::Config(format!("retain_subsample {k} exceeds retain set size {}", data.n_retain())))
        }
        Some(k) => {
            let mut r = rng::substream(cfg.seed, "subsample");
            let mut picked: Vec<usize> =
                index::sample(&mut r, data.n_retain(), k).into_iter().map(|i| data.retain_idx[i]).collect();
            picked.sort_unstable();
            Ok(picked)
        }
    }
}

/// Attribution at `theta0`, weights, then `epochs` steps of the configured
/// method. Scores and weights stay frozen at `theta0` unless
/// `recompute_weights` is set.
pub fn run_unlearning(spec: &ModelSpec, data: &Dataset, theta0: &ParamVector, cfg: &UnlearnConfig) -> Result<UnlearnResult> {
    cfg.validate()?;
    if let Some(l) = cfg.neutral_label {
        if l >= spec.num_classes {
            return Err(UnlearnError::Config(format!("neutral_label {l} out of range for {} classes", spec.num_classes)));
        }
    }
    let s = &data.samples;
    let (scores, grads0) = forget_scores(spec, theta0, data)?;
    let mut weights = if cfg.use_guard { Some(guard_weights(&scores, cfg.tau)?) } else { None };
    let first_weights = weights.clone();
    let retain = retain_subset(data, cfg)?;
    let ctx = ObjectiveContext { reference: Some(theta0), neutral_label: cfg.neutral_label, retain_subset: &retain };

    let mut theta = theta0.clone();
    let mut steps = Vec::with_capacity(cfg.epochs);
    for step in 0..cfg.epochs {
        if step > 0 && cfg.use_guard && cfg.recompute_weights {
            let (sc, _) = forget_scores(spec, &theta, data)?;
            weights = Some(guard_weights(&sc, cfg.tau)?);
        }
        let next = match cfg.method {
            Method::GA => {
                let fresh;
                let grads = if step == 0 {
                    &grads0
                } else {
                    fresh = model::per_sample_grads(spec, &theta, s, &data.forget_idx)?;
                    &fresh
                };
                match &weights {
                    Some(w) => guard_ga_step(&theta, cfg.eta, grads, w)?,
                    None => ga_step(&theta, cfg.eta, grads)?,
                }
            }
            m => {
                let g = composite_objective_grad(m, spec, &theta, data, weights.as_ref(), &ctx)?;
                let mut t = theta.clone();
                linalg::axpy(-cfg.eta, &g, &mut t.0);
                t
            }
        };
        let step_norm = linalg::norm2(&linalg::sub(&next.0, &theta.0)?);
        theta = next;
        let d = StepDiagnostics {
            step,
            forget_loss: model::empirical_loss(spec, &theta, s, &data.forget_idx)?,
            retain_loss: model::empirical_loss(spec, &theta, s, &data.retain_idx)?,
            step_norm,
        };
        if !(d.forget_loss.is_finite() && d.retain_loss.is_finite() && d.step_norm.is_finite()) {
            return Err(UnlearnError::NonFinite(step));
        }
        steps.push(d);
    }
    Ok(UnlearnResult { method: cfg.tag(), theta_after: theta, steps, weights: first_weights, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Samples;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_data(seed: u64) -> (ModelSpec, Dataset, ParamVector) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = ModelSpec::logistic(3, 4, 1e-3);
        let n = 24;
        let inputs = (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let labels = (0..n).map(|i| i % 3).collect();
        let data = Dataset::new(Samples::new(3, 4, inputs, labels).unwrap(), vec![1, 5, 9, 14, 20]).unwrap();
        let theta = model::finetune(&spec, &data.samples, 0.5, 50, seed).unwrap().theta;
        (spec, data, theta)
    }

    #[test]
    fn equal_scores_give_unit_weights() {
        for tau in [1e-3, 0.03, 1.0, 1e3] {
            let w = guard_weights(&[0.4; 7], tau).unwrap();
            assert!(w.weights.iter().all(|x| *x == 1.0));
        }
    }

    #[test]
    fn hand_softmax_case() {
        let tau = 0.03;
        let w = guard_weights(&[0.0, tau * 3f64.ln()], tau).unwrap();
        assert!((w.weights[0] - 1.5).abs() < 1e-12 && (w.weights[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn infinite_temperature_recovers_uniform() {
        let w = guard_weights(&[-3.0, 0.5, 2.0, 7.5], 1e9).unwrap();
        assert!(w.weights.iter().all(|x| (x - 1.0).abs() <= 1e-6));
    }

    #[test]
    fn small_temperature_does_not_overflow() {
        let w = guard_weights(&[-50.0, 10.0, 40.0], 0.03).unwrap();
        assert!(w.weights.iter().all(|x| x.is_finite()));
        assert_eq!(w.weights[0], 3.0);
    }

    #[test]
    fn subnormal_weights_flush_to_zero() {
        // exp(-744) and exp(-745) are distinct subnormals only in name
        let w = guard_weights(&[0.0, 700.0, 744.0, 745.0], 1.0).unwrap();
        assert!(w.weights[1] > 0.0);
        assert_eq!(&w.weights[2..], &[0.0, 0.0]);
        assert!((w.mean() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn weight_errors() {
        assert!(guard_weights(&[], 1.0).is_err());
        assert!(guard_weights(&[1.0], 0.0).is_err());
        assert!(matches!(guard_weights(&[1.0, f64::NAN], 1.0), Err(UnlearnError::NonFiniteScore(1))));
    }

    #[test]
    fn ga_step_cases() {
        let theta = ParamVector(vec![0.0, 0.0]);
        let g = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(ga_step(&theta, 0.1, &g).unwrap().0, vec![0.05, 0.05]);
        assert_eq!(ga_step(&theta, 0.0, &g).unwrap(), theta);
        let single = vec![vec![0.3, -0.7]];
        let t = ParamVector(vec![1.0, 2.0]);
        assert_eq!(ga_step(&t, 0.2, &single).unwrap().0, vec![1.0 + 0.2 * 0.3, 2.0 + 0.2 * -0.7]);
    }

    #[test]
    fn guard_step_cases() {
        let theta = ParamVector(vec![0.0, 0.0]);
        let g = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let w = GuardWeights { weights: vec![1.5, 0.5], tau: 1.0, scores: vec![0.0, 0.0] };
        let out = guard_ga_step(&theta, 0.1, &g, &w).unwrap();
        assert!((out.0[0] - 0.075).abs() < 1e-15 && (out.0[1] - 0.025).abs() < 1e-15);

        let uniform = GuardWeights::uniform(2);
        assert_eq!(guard_ga_step(&theta, 0.1, &g, &uniform).unwrap(), ga_step(&theta, 0.1, &g).unwrap());

        // zero temperature concentrates everything on the lowest score
        let g3 = vec![vec![1.0, 2.0], vec![-4.0, 0.5], vec![3.0, 3.0]];
        let w = guard_weights(&[0.2, -0.1, 0.4], 1e-6).unwrap();
        let out = guard_ga_step(&theta, 0.1, &g3, &w).unwrap();
        assert!((out.0[0] + 0.4).abs() < 1e-14 && (out.0[1] - 0.05).abs() < 1e-14);

        let bad = GuardWeights::uniform(3);
        assert!(matches!(guard_ga_step(&theta, 0.1, &g, &bad), Err(UnlearnError::Misaligned { .. })));
    }

    #[test]
    fn gd_isolates_forget_term_when_retain_gradient_vanishes() {
        // retain pair with opposite gradients at θ = 0
        let spec = ModelSpec::logistic(1, 2, 0.0);
        let s = Samples::new(1, 2, vec![vec![1.0], vec![1.0], vec![2.0]], vec![0, 1, 0]).unwrap();
        let data = Dataset::new(s, vec![2]).unwrap();
        let theta = ParamVector::zeros(2);
        let ctx = ObjectiveContext { reference: None, neutral_label: None, retain_subset: &data.retain_idx };
        let g = composite_objective_grad(Method::GD, &spec, &theta, &data, None, &ctx).unwrap();
        let fg = model::sample_grad(&spec, &theta, &[2.0], 0).unwrap();
        assert_eq!(g, fg.iter().map(|v| -v).collect::<Vec<_>>());
    }

    #[test]
    fn km_at_reference_equals_ga_direction() {
        let (spec, data, theta) = toy_data(3);
        let ctx = ObjectiveContext { reference: Some(&theta), neutral_label: None, retain_subset: &data.retain_idx };
        assert_eq!(kl_term(&spec, &theta, &theta, &data, &data.retain_idx).unwrap(), 0.0);
        let km = composite_objective_grad(Method::KM, &spec, &theta, &data, None, &ctx).unwrap();
        let ga = composite_objective_grad(Method::GA, &spec, &theta, &data, None, &ctx).unwrap();
        assert_eq!(km, ga);
        let no_ref = ObjectiveContext { reference: None, ..ctx };
        assert_eq!(
            composite_objective_grad(Method::KM, &spec, &theta, &data, None, &no_ref),
            Err(UnlearnError::MissingReference)
        );
    }

    #[test]
    fn km_gradient_matches_finite_differences() {
        let (spec, data, theta0) = toy_data(4);
        let mut theta = theta0.clone();
        theta.0.iter_mut().enumerate().for_each(|(i, v)| *v += 0.05 * ((i % 3) as f64 - 1.0));
        let g = kl_grad(&spec, &theta, &theta0, &data, &data.retain_idx).unwrap();
        for (j, gj) in g.iter().enumerate() {
            let mut p = theta.clone();
            let mut m = theta.clone();
            p.0[j] += 1e-5;
            m.0[j] -= 1e-5;
            let fd = (kl_term(&spec, &p, &theta0, &data, &data.retain_idx).unwrap()
                - kl_term(&spec, &m, &theta0, &data, &data.retain_idx).unwrap())
                / 2e-5;
            assert!((fd - gj).abs() <= 1e-6, "{j}: {fd} vs {gj}");
        }
    }

    #[test]
    fn po_with_neutral_forget_label_is_plain_descent() {
        let (spec, data, theta) = toy_data(5);
        // relabel every forget sample with the neutral class
        let mut s = data.samples.clone();
        for &i in &data.forget_idx {
            s.labels[i] = 3;
        }
        let relabeled = Dataset::new(s, data.forget_idx.clone()).unwrap();
        let ctx = ObjectiveContext { reference: None, neutral_label: Some(3), retain_subset: &relabeled.retain_idx };
        let g = composite_objective_grad(Method::PO, &spec, &theta, &relabeled, None, &ctx).unwrap();
        let mut want = model::avg_grad(&spec, &theta, &relabeled.samples, &relabeled.forget_idx).unwrap();
        let r = model::avg_grad(&spec, &theta, &relabeled.samples, &relabeled.retain_idx).unwrap();
        linalg::axpy(1.0, &r, &mut want);
        for (a, b) in g.iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn run_ga_matches_single_step() {
        let (spec, data, theta) = toy_data(6);
        let cfg = UnlearnConfig::new(Method::GA, false, 0.05, 0.03);
        let res = run_unlearning(&spec, &data, &theta, &cfg).unwrap();
        let grads = model::per_sample_grads(&spec, &theta, &data.samples, &data.forget_idx).unwrap();
        assert_eq!(res.theta_after, ga_step(&theta, 0.05, &grads).unwrap());
        assert_eq!(res.method, "GA");
        assert_eq!(res.steps.len(), 1);
    }

    #[test]
    fn run_guard_high_temperature_matches_ga() {
        let (spec, data, theta) = toy_data(7);
        let ga = run_unlearning(&spec, &data, &theta, &UnlearnConfig::new(Method::GA, false, 0.05, 1.0)).unwrap();
        let gu = run_unlearning(&spec, &data, &theta, &UnlearnConfig::new(Method::GA, true, 0.05, 1e9)).unwrap();
        let dtheta = linalg::norm2(&linalg::sub(&ga.theta_after.0, &theta.0).unwrap());
        let diff = linalg::norm_inf(&linalg::sub(&ga.theta_after.0, &gu.theta_after.0).unwrap());
        assert!(diff <= 1e-6 * dtheta);
        assert_eq!(gu.method, "GUARD-GA");
    }

    #[test]
    fn forget_loss_rises_under_ascent() {
        let (spec, data, theta) = toy_data(8);
        let l0 = model::empirical_loss(&spec, &theta, &data.samples, &data.forget_idx).unwrap();
        for use_guard in [false, true] {
            let res = run_unlearning(&spec, &data, &theta, &UnlearnConfig::new(Method::GA, use_guard, 1e-2, 0.5)).unwrap();
            assert!(res.steps[0].forget_loss > l0);
        }
    }

    #[test]
    fn update_norm_bounded_by_triangle_inequality() {
        let (spec, data, theta) = toy_data(9);
        let cfg = UnlearnConfig::new(Method::GA, true, 0.1, 0.05);
        let res = run_unlearning(&spec, &data, &theta, &cfg).unwrap();
        let grads = model::per_sample_grads(&spec, &theta, &data.samples, &data.forget_idx).unwrap();
        let gmax = grads.iter().map(|g| linalg::norm2(g)).fold(0.0, f64::max);
        let wmax = res.weights.as_ref().unwrap().max();
        let moved = linalg::norm2(&linalg::sub(&res.theta_after.0, &theta.0).unwrap());
        assert!(moved <= 0.1 * gmax * wmax * (1.0 + 1e-12));
    }

    #[test]
    fn config_validation() {
        let (spec, data, theta) = toy_data(10);
        let mut cfg = UnlearnConfig::new(Method::PO, false, 0.1, 0.03);
        assert_eq!(run_unlearning(&spec, &data, &theta, &cfg).unwrap_err(), UnlearnError::MissingNeutralLabel);
        cfg.neutral_label = Some(3);
        cfg.retain_subsample = Some(0);
        assert!(run_unlearning(&spec, &data, &theta, &cfg).is_err());
        cfg.retain_subsample = Some(5);
        let a = run_unlearning(&spec, &data, &theta, &cfg).unwrap();
        let b = run_unlearning(&spec, &data, &theta, &cfg).unwrap();
        assert_eq!(a.theta_after, b.theta_after);
        cfg.eta = 0.0;
        assert!(run_unlearning(&spec, &data, &theta, &cfg).is_err());
    }

    #[test]
    fn frozen_versus_recomputed_weights() {
        let (spec, data, theta) = toy_data(11);
        let mut cfg = UnlearnConfig::new(Method::GA, true, 0.05, 0.1);
        cfg.epochs = 3;
        let frozen = run_unlearning(&spec, &data, &theta, &cfg).unwrap();
        cfg.recompute_weights = true;
        let fresh = run_unlearning(&spec, &data, &theta, &cfg).unwrap();
        assert_eq!(frozen.steps.len(), 3);
        assert_eq!(frozen.steps[0], fresh.steps[0]);
        assert_ne!(frozen.theta_after, fresh.theta_after);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn weight_laws(scores in prop::collection::vec(-1.0f64..1.0, 1..64), log_tau in -2.0f64..2.0) {
                let tau = 10f64.powf(log_tau);
                let w = guard_weights(&scores, tau).unwrap();
                prop_assert!((w.mean() - 1.0).abs() <= 1e-12);
                prop_assert!(w.weights.iter().all(|x| *x > 0.0));
                for i in 0..scores.len() {
                    for j in 0..scores.len() {
                        if scores[i] < scores[j] {
                            prop_assert!(w.weights[i] > w.weights[j]);
                        }
                    }
                }
                let hotter = guard_weights(&scores, tau * 3.0).unwrap();
                prop_assert!(hotter.variance() <= w.variance() + 1e-12);
            }
        }
    }
}
