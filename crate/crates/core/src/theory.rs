//! First-order alignment statistics and the predicted retention, forgetting
//! and sacrifice-rate gaps between gradient ascent and its weighted variant.

use serde::Serialize;
use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::model::{self, Dataset, ModelError, ModelSpec, ParamVector};
use crate::unlearning::{self, UnlearnError};

/// Denominators at or below this magnitude make a sacrifice rate undefined.
pub const DEGENERATE_DENOMINATOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("sacrifice rate undefined: forget-side change {0:e} is too close to zero")]
    DegenerateRate(f64),
    #[error("normalized alignment {0} must be < 1 for the first-order predictions")]
    AssumptionViolation(f64),
    #[error("at least one forget gradient is required")]
    Empty,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Unlearn(#[from] UnlearnError),
}

pub type Result<T> = std::result::Result<T, TheoryError>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentStats {
    /// `⟨ḡ_f, ḡ_r⟩`
    pub kappa: f64,
    /// `⟨ḡ_r, g_j⟩` per forget sample.
    pub kappa_j: Vec<f64>,
    /// Population variance of `kappa_j`.
    pub sigma2_kappa: f64,
    pub delta_kappa: f64,
    pub tau: f64,
    /// `⟨ḡ_f, g_j⟩` per forget sample.
    pub self_alignment_j: Vec<f64>,
    pub gbar_f_norm2: f64,
}

pub fn alignment_stats(forget_grads: &[Vec<f64>], retain_avg: &[f64], tau: f64) -> Result<AlignmentStats> {
    if forget_grads.is_empty() {
        return Err(TheoryError::Empty);
    }
    let gbar_f = linalg::weighted_mean(forget_grads, None)?;
    let kappa = linalg::dot(&gbar_f, retain_avg)?;
    let kappa_j = forget_grads.iter().map(|g| linalg::dot(retain_avg, g)).collect::<std::result::Result<Vec<_>, _>>()?;
    let self_alignment_j = forget_grads.iter().map(|g| linalg::dot(&gbar_f, g)).collect::<std::result::Result<Vec<_>, _>>()?;
    let n = kappa_j.len() as f64;
    // mean of squares minus squared mean, on values shifted by the first one
    let shift = kappa_j[0];
    let (s1, s2) = kappa_j.iter().fold((0.0, 0.0), |(a, b), k| {
        let v = k - shift;
        (a + v, b + v * v)
    });
    let sigma2_kappa = (s2 / n - (s1 / n) * (s1 / n)).max(0.0);
    Ok(AlignmentStats {
        kappa,
        kappa_j,
        sigma2_kappa,
        delta_kappa: kappa / tau,
        tau,
        self_alignment_j,
        gbar_f_norm2: linalg::dot(&gbar_f, &gbar_f)?,
    })
}

fn ratio(num: f64, den: f64) -> Result<f64> {
    if den.abs() <= DEGENERATE_DENOMINATOR || !den.is_finite() {
        return Err(TheoryError::DegenerateRate(den));
    }
    Ok(num / den)
}

/// Retain-loss rise per unit of forget-loss rise.
pub fn sacrifice_rate_loss(l_r_before: f64, l_r_after: f64, l_f_before: f64, l_f_after: f64) -> Result<f64> {
    ratio(l_r_after - l_r_before, l_f_after - l_f_before)
}

/// Retain-metric drop per unit of forget-metric drop. Negative when the
/// retain metric improves.
pub fn sacrifice_rate_metric(eps_r0: f64, eps_r: f64, eps_f0: f64, eps_f: f64) -> Result<f64> {
    ratio(eps_r0 - eps_r, eps_f0 - eps_f)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictedGaps {
    /// `η σ²_κ / ((1 − δ_κ) τ)`
    pub retain_gap: f64,
    /// `δ_κ η ‖ḡ_f‖²`
    pub forget_gap: f64,
    /// `(κ² + σ²_κ) / (τ ‖ḡ_f‖²)`
    pub sr_gap: f64,
    /// `⟨ḡ_r, ḡ'_f⟩` with the exact softmax weights.
    pub kappa_prime: f64,
    /// `η (κ − κ')`: first-order retain gap with exact weights.
    pub retain_gap_first_order: f64,
    /// `η (⟨ḡ_f, ḡ'_f⟩ − ‖ḡ_f‖²)`: signed first-order forget gap (weighted minus plain).
    pub forget_gap_first_order: f64,
}

pub fn predicted_gaps(stats: &AlignmentStats, eta: f64, tau: f64, gbar_f_norm2: f64) -> Result<PredictedGaps> {
    let delta = stats.kappa / tau;
    if !(delta < 1.0) {
        return Err(TheoryError::AssumptionViolation(delta));
    }
    let w = unlearning::guard_weights(&stats.kappa_j, tau)?;
    let n = stats.kappa_j.len() as f64;
    let kappa_prime = w.weights.iter().zip(&stats.kappa_j).map(|(w, k)| w * k).sum::<f64>() / n;
    let weighted_self = w.weights.iter().zip(&stats.self_alignment_j).map(|(w, s)| w * s).sum::<f64>() / n;
    Ok(PredictedGaps {
        retain_gap: eta * stats.sigma2_kappa / ((1.0 - delta) * tau),
        forget_gap: delta * eta * gbar_f_norm2,
        sr_gap: (stats.kappa * stats.kappa + stats.sigma2_kappa) / (tau * gbar_f_norm2),
        kappa_prime,
        retain_gap_first_order: eta * (stats.kappa - kappa_prime),
        forget_gap_first_order: eta * (weighted_self - gbar_f_norm2),
    })
}

/// `mean(g)ᵀ (θ_after − θ_0)` over the given gradients.
pub fn first_order_loss_change(theta0: &ParamVector, theta_after: &ParamVector, grads: &[Vec<f64>]) -> Result<f64> {
    let step = linalg::sub(&theta_after.0, &theta0.0)?;
    if grads.is_empty() {
        return Ok(0.0);
    }
    Ok(linalg::dot(&linalg::weighted_mean(grads, None)?, &step)?)
}

/// `‖Σ_f − (tr Σ_f / p) I‖_F / ‖Σ_f‖_F` with `Σ_f = (1/n_f) Σ g gᵀ`.
pub fn isotropy_diagnostic(forget_grads: &[Vec<f64>]) -> f64 {
    let Some(p) = forget_grads.first().map(Vec::len) else {
        return 0.0;
    };
    let n = forget_grads.len() as f64;
    let mut sigma = vec![0.0; p * p];
    for g in forget_grads {
        for r in 0..p {
            for c in 0..p {
                sigma[r * p + c] += g[r] * g[c] / n;
            }
        }
    }
    let fro2: f64 = sigma.iter().map(|v| v * v).sum();
    if fro2 == 0.0 {
        return 0.0;
    }
    let mean_diag = (0..p).map(|i| sigma[i * p + i]).sum::<f64>() / p as f64;
    let dev2: f64 = (0..p * p)
        .map(|k| {
            let v = if k / p == k % p { sigma[k] - mean_diag } else { sigma[k] };
            v * v
        })
        .sum();
    (dev2 / fro2).sqrt()
}

/// Observed losses before and after one method's update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossPair {
    pub forget: f64,
    pub retain: f64,
}

impl LossPair {
    pub fn at(spec: &ModelSpec, theta: &ParamVector, data: &Dataset) -> Result<Self> {
        Ok(Self {
            forget: model::empirical_loss(spec, theta, &data.samples, &data.forget_idx)?,
            retain: model::empirical_loss(spec, theta, &data.samples, &data.retain_idx)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryReport {
    pub eta: f64,
    pub tau: f64,
    pub kappa: f64,
    pub kappa_j: Vec<f64>,
    pub sigma2_kappa: f64,
    pub delta_kappa: f64,
    pub delta_theta: f64,
    pub gbar_f_norm2: f64,
    pub before: LossPair,
    pub after_ga: LossPair,
    pub after_guard: LossPair,
    /// `L_r^GA − L_r^GUARD`
    pub observed_retain_gap: f64,
    /// `|L_f^GA − L_f^GUARD|`
    pub observed_forget_gap: f64,
    /// `L_f^GUARD − L_f^GA`
    pub signed_forget_gap: f64,
    /// `ρ^GA − ρ^GUARD`, absent when either rate is degenerate.
    pub observed_sr_gap: Option<f64>,
    pub rho_ga: Option<f64>,
    pub rho_guard: Option<f64>,
    /// Absent when `δ_κ ≥ 1`.
    pub predicted: Option<PredictedGaps>,
    pub kappa_positive: bool,
    pub max_kappa_j_over_tau: f64,
    pub isotropy: f64,
    /// `‖θ_GA − θ_GUARD‖²`
    pub step_gap_norm2: f64,
}

pub const CSV_HEADER: &str = "eta,tau,kappa,sigma2_kappa,delta_kappa,delta_theta,gbar_f_norm2,\
observed_retain_gap,predicted_retain_gap,observed_forget_gap,predicted_forget_gap,\
observed_sr_gap,predicted_sr_gap,isotropy";

impl TheoryReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row matching [`CSV_HEADER`]; unavailable values are left empty.
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let p = self.predicted.as_ref();
        [
            self.eta.to_string(),
            self.tau.to_string(),
            self.kappa.to_string(),
            self.sigma2_kappa.to_string(),
            self.delta_kappa.to_string(),
            self.delta_theta.to_string(),
            self.gbar_f_norm2.to_string(),
            self.observed_retain_gap.to_string(),
            opt(p.map(|p| p.retain_gap)),
            self.observed_forget_gap.to_string(),
            opt(p.map(|p| p.forget_gap)),
            opt(self.observed_sr_gap),
            opt(p.map(|p| p.sr_gap)),
            self.isotropy.to_string(),
        ]
        .join(",")
    }
}

/// Runs one plain and one weighted ascent step of size `eta` from `theta0`
/// and compares the observed gaps with the first-order predictions.
pub fn theory_report(spec: &ModelSpec, data: &Dataset, theta0: &ParamVector, eta: f64, tau: f64) -> Result<TheoryReport> {
    let (scores, grads) = unlearning::forget_scores(spec, theta0, data)?;
    let retain_avg = model::avg_grad(spec, theta0, &data.samples, &data.retain_idx)?;
    let stats = alignment_stats(&grads, &retain_avg, tau)?;
    let w = unlearning::guard_weights(&scores, tau)?;
    let theta_ga = unlearning::ga_step(theta0, eta, &grads)?;
    let theta_gu = unlearning::guard_ga_step(theta0, eta, &grads, &w)?;

    let before = LossPair::at(spec, theta0, data)?;
    let after_ga = LossPair::at(spec, &theta_ga, data)?;
    let after_guard = LossPair::at(spec, &theta_gu, data)?;
    let rise = |t: &ParamVector, subset: &[usize]| model::loss_difference(spec, t, theta0, &data.samples, subset);
    let rho_ga = sacrifice_rate_loss(0.0, rise(&theta_ga, &data.retain_idx)?, 0.0, rise(&theta_ga, &data.forget_idx)?).ok();
    let rho_guard = sacrifice_rate_loss(0.0, rise(&theta_gu, &data.retain_idx)?, 0.0, rise(&theta_gu, &data.forget_idx)?).ok();
    let step = |t: &ParamVector| linalg::norm2(&linalg::sub(&t.0, &theta0.0).expect("same length"));
    let gap = linalg::sub(&theta_ga.0, &theta_gu.0)?;
    let forget_gap = model::loss_difference(spec, &theta_ga, &theta_gu, &data.samples, &data.forget_idx)?;

    Ok(TheoryReport {
        eta,
        tau,
        kappa: stats.kappa,
        sigma2_kappa: stats.sigma2_kappa,
        delta_kappa: stats.delta_kappa,
        delta_theta: step(&theta_ga).max(step(&theta_gu)),
        gbar_f_norm2: stats.gbar_f_norm2,
        observed_retain_gap: model::loss_difference(spec, &theta_ga, &theta_gu, &data.samples, &data.retain_idx)?,
        observed_forget_gap: forget_gap.abs(),
        signed_forget_gap: -forget_gap,
        observed_sr_gap: rho_ga.zip(rho_guard).map(|(a, b)| a - b),
        rho_ga,
        rho_guard,
        predicted: predicted_gaps(&stats, eta, tau, stats.gbar_f_norm2).ok(),
        kappa_positive: stats.kappa > 0.0,
        max_kappa_j_over_tau: stats.kappa_j.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / tau,
        isotropy: isotropy_diagnostic(&grads),
        step_gap_norm2: linalg::dot(&gap, &gap)?,
        kappa_j: stats.kappa_j,
        before,
        after_ga,
        after_guard,
    })
}
