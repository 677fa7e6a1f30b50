//! Data attribution: the gradient-alignment proxy score, the Hessian-weighted
//! influence function, the spectral bound relating the two, the optimal
//! global scale between them, and a leave-one-out retraining oracle.

use serde::Serialize;
use thiserror::Error;

use crate::linalg::{self, Cholesky, EigenDecomp, LinalgError, SymMatrix};
use crate::model::{self, Dataset, ModelError, ModelSpec, ParamVector, Samples};

/// Denominators `|q⁺ + q⁻|` below this make the spectral bound vacuous.
pub const DEGENERATE_DENOMINATOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttributionError {
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("Hessian is singular or indefinite ({0}); increase l2_damping")]
    Singular(LinalgError),
    #[error("degenerate bound denominator |q+ + q-| = {0:e}")]
    DegenerateDenominator(f64),
    #[error("all attribution scores are zero; optimal scale undefined")]
    DegenerateScale,
    #[error("forget index {0} is not part of the forget set")]
    NotForget(usize),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, AttributionError>;

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(AttributionError::Dimension(a.len(), b.len()));
    }
    Ok(())
}

/// Retention attribution of one forget sample: `J_avg_rᵀ · J_i`.
pub fn guard_score(j_avg_r: &[f64], j_i: &[f64]) -> Result<f64> {
    same_len(j_avg_r, j_i)?;
    Ok(linalg::dot(j_avg_r, j_i)?)
}

/// Cached Cholesky factor of the (damped) summed Hessian.
#[derive(Debug, Clone)]
pub struct InfluenceSolver {
    chol: Cholesky,
    order: usize,
}

impl InfluenceSolver {
    pub fn new(h: &SymMatrix) -> Result<Self> {
        let chol = Cholesky::factor(h).map_err(AttributionError::Singular)?;
        Ok(Self { chol, order: h.order() })
    }

    /// `J_avgᵀ · H⁻¹ · J_j`, with no leading minus sign.
    pub fn score(&self, j_avg: &[f64], j_j: &[f64]) -> Result<f64> {
        same_len(j_avg, j_j)?;
        if j_j.len() != self.order {
            return Err(AttributionError::Dimension(self.order, j_j.len()));
        }
        let x = self.chol.solve(j_j)?;
        Ok(linalg::dot(j_avg, &x)?)
    }
}

pub fn influence_score(h: &SymMatrix, j_avg: &[f64], j_j: &[f64]) -> Result<f64> {
    InfluenceSolver::new(h)?.score(j_avg, j_j)
}

/// Eigen-decomposition of `H⁻¹` (eigenvalues descending).
pub fn inverse_hessian_spectrum(h: &SymMatrix) -> Result<EigenDecomp> {
    linalg::sym_eigen(h)?.inverse().map_err(AttributionError::Singular)
}

/// Spectral bound on the influence score for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IfBounds {
    pub lo: f64,
    pub hi: f64,
    pub lambda_l: f64,
    pub lambda_u: f64,
    pub q_plus: f64,
    pub q_minus: f64,
    /// `J_avgᵀ J_j` computed directly.
    pub proxy: f64,
}

impl IfBounds {
    /// `|q⁺ + q⁻ − proxy|`, the residual of the eigen-expansion identity.
    pub fn identity_residual(&self) -> f64 {
        (self.q_plus + self.q_minus - self.proxy).abs()
    }
}

/// Projections `q_k = s_avg,k · s_j,k · ‖v_k‖²` of the two gradients onto
/// the eigenbasis of `H⁻¹`.
pub fn eigen_products(inv: &EigenDecomp, j_avg: &[f64], j_j: &[f64]) -> Result<Vec<f64>> {
    same_len(j_avg, j_j)?;
    inv.eigenvectors
        .iter()
        .map(|v| {
            let nv = linalg::norm2(v);
            let s_avg = linalg::dot(j_avg, v)? / nv;
            let s_j = linalg::dot(j_j, v)? / nv;
            Ok(s_avg * s_j * nv * nv)
        })
        .collect()
}

/// `λ_l · a ≤ a^IF ≤ λ_u · a`, with λ's the extreme eigenvalues of `H⁻¹`
/// mixed by the positive and negative parts of the eigen-products.
pub fn if_bounds(inv: &EigenDecomp, j_avg: &[f64], j_j: &[f64]) -> Result<IfBounds> {
    let q = eigen_products(inv, j_avg, j_j)?;
    let lam_max = inv.eigenvalues.first().copied().unwrap_or(0.0);
    let lam_min = inv.eigenvalues.last().copied().unwrap_or(0.0);
    let q_plus: f64 = q.iter().filter(|v| **v >= 0.0).sum();
    let q_minus: f64 = q.iter().filter(|v| **v < 0.0).sum();
    let denom = q_plus + q_minus;
    if denom.abs() < DEGENERATE_DENOMINATOR {
        return Err(AttributionError::DegenerateDenominator(denom.abs()));
    }
    let hi = lam_max * q_plus + lam_min * q_minus;
    let lo = lam_min * q_plus + lam_max * q_minus;
    Ok(IfBounds {
        lo,
        hi,
        lambda_l: lo / denom,
        lambda_u: hi / denom,
        q_plus,
        q_minus,
        proxy: linalg::dot(j_avg, j_j)?,
    })
}

/// `C* = Σ C_j a_j² / Σ a_j²` over `(C_j, a_j)` pairs.
pub fn c_star(pairs: &[(f64, f64)]) -> Result<f64> {
    let den: f64 = pairs.iter().map(|(_, a)| a * a).sum();
    if den == 0.0 {
        return Err(AttributionError::DegenerateScale);
    }
    let num: f64 = pairs.iter().map(|(c, a)| c * a * a).sum();
    Ok(num / den)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        let avg = (start + end - 1) as f64 / 2.0 + 1.0;
        for &k in &idx[start..end] {
            r[k] = avg;
        }
        start = end;
    }
    r
}

/// Leave-one-out retraining: optimal objective values on `D` and on `D∖{j}`.
///
/// Both fits follow the same protocol (gradient descent from the seeded
/// initialization). Convex models are then polished with Newton steps so the
/// optima are unique to near machine precision.
#[derive(Debug, Clone)]
pub struct LooOracle<'a> {
    spec: ModelSpec,
    samples: &'a Samples,
    lr: f64,
    epochs: usize,
    seed: u64,
    full: model::FinetuneOutcome,
}

const NEWTON_TOL: f64 = 1e-12;
const NEWTON_MAX_ITER: usize = 100;

impl<'a> LooOracle<'a> {
    pub fn new(spec: &ModelSpec, samples: &'a Samples, lr: f64, epochs: usize, seed: u64) -> Result<Self> {
        let all = samples.all_indices();
        let full = Self::fit(spec, samples, &all, lr, epochs, seed)?;
        Ok(Self { spec: *spec, samples, lr, epochs, seed, full })
    }

    fn fit(
        spec: &ModelSpec,
        samples: &Samples,
        subset: &[usize],
        lr: f64,
        epochs: usize,
        seed: u64,
    ) -> Result<model::FinetuneOutcome> {
        let out = model::train(spec, samples, subset, model::init_params(spec, seed), lr, epochs)?;
        if spec.is_convex() && spec.l2_damping > 0.0 {
            Ok(model::newton_refine(spec, samples, subset, out.theta, NEWTON_TOL, NEWTON_MAX_ITER)?)
        } else {
            Ok(out)
        }
    }

    pub fn full_optimum(&self) -> &ParamVector {
        &self.full.theta
    }

    pub fn full_loss(&self) -> f64 {
        self.full.final_loss
    }

    /// Parameters retrained without sample `j`.
    pub fn without(&self, j: usize) -> Result<model::FinetuneOutcome> {
        if j >= self.samples.len() {
            return Err(ModelError::Index { index: j, len: self.samples.len() }.into());
        }
        let subset: Vec<usize> = (0..self.samples.len()).filter(|&i| i != j).collect();
        Self::fit(&self.spec, self.samples, &subset, self.lr, self.epochs, self.seed)
    }

    /// `min L_D − min L_{D∖j}`, each optimum evaluated on its own objective.
    pub fn delta(&self, j: usize) -> Result<f64> {
        Ok(self.full.final_loss - self.without(j)?.final_loss)
    }

    /// Shift of the mean loss over `subset` when `j` is left out:
    /// `L_S(θ*_{−j}) − L_S(θ*)`. With `subset = D_r` this is the quantity
    /// the retain-averaged influence score linearizes.
    pub fn subset_shift(&self, subset: &[usize], j: usize) -> Result<f64> {
        let theta_j = self.without(j)?.theta;
        let after = model::empirical_loss(&self.spec, &theta_j, self.samples, subset)?;
        let before = model::empirical_loss(&self.spec, &self.full.theta, self.samples, subset)?;
        Ok(after - before)
    }
}

pub fn loo_delta(spec: &ModelSpec, samples: &Samples, j: usize, lr: f64, epochs: usize, seed: u64) -> Result<f64> {
    LooOracle::new(spec, samples, lr, epochs, seed)?.delta(j)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributionOptions {
    pub compute_if: bool,
    pub compute_bounds: bool,
    pub compute_loo: bool,
    /// Leave-one-out retraining on at most this many forget samples.
    pub loo_limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleAttribution {
    pub index: usize,
    pub guard: f64,
    pub influence: Option<f64>,
    pub bound_lo: Option<f64>,
    pub bound_hi: Option<f64>,
    pub loo_delta: Option<f64>,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributionReport {
    pub samples: Vec<SampleAttribution>,
    pub c_star: Option<f64>,
    pub damping: f64,
    pub theta_digest: String,
    pub spearman_if_loo: Option<f64>,
}

/// Training protocol used by the leave-one-out oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrainProtocol {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

/// Per-forget-sample attribution at `theta0`. The influence score and bound
/// use the summed Hessian over all of `D` and the retain-set mean gradient.
pub fn attribute(
    spec: &ModelSpec,
    data: &Dataset,
    theta0: &ParamVector,
    opts: AttributionOptions,
    retrain: Option<RetrainProtocol>,
) -> Result<AttributionReport> {
    let s = &data.samples;
    let j_avg = model::avg_grad(spec, theta0, s, &data.retain_idx)?;
    let grads = model::per_sample_grads(spec, theta0, s, &data.forget_idx)?;

    let need_h = opts.compute_if || opts.compute_bounds;
    let h = if need_h { Some(model::hessian(spec, theta0, s, &s.all_indices())?) } else { None };
    let solver = match (&h, opts.compute_if) {
        (Some(h), true) => Some(InfluenceSolver::new(h)?),
        _ => None,
    };
    let spectrum = match (&h, opts.compute_bounds) {
        (Some(h), true) => Some(inverse_hessian_spectrum(h)?),
        _ => None,
    };
    let loo = match (opts.compute_loo, retrain) {
        (true, Some(p)) => Some(LooOracle::new(spec, s, p.lr, p.epochs, p.seed)?),
        _ => None,
    };

    let mut out = Vec::with_capacity(grads.len());
    let loo_take = opts.loo_limit.unwrap_or(usize::MAX);
    for (k, (&idx, g)) in data.forget_idx.iter().zip(&grads).enumerate() {
        let mut row = SampleAttribution {
            index: idx,
            guard: guard_score(&j_avg, g)?,
            influence: None,
            bound_lo: None,
            bound_hi: None,
            loo_delta: None,
            flags: Vec::new(),
        };
        if let Some(sol) = &solver {
            row.influence = Some(sol.score(&j_avg, g)?);
        }
        if let Some(inv) = &spectrum {
            match if_bounds(inv, &j_avg, g) {
                Ok(b) => {
                    row.bound_lo = Some(b.lo);
                    row.bound_hi = Some(b.hi);
                    if let Some(a_if) = row.influence {
                        let slack = 1e-8 * a_if.abs();
                        if a_if < b.lo - slack || a_if > b.hi + slack {
                            row.flags.push("bound_violated".into());
                        }
                    }
                }
                Err(AttributionError::DegenerateDenominator(_)) => row.flags.push("bound_skipped_degenerate".into()),
                Err(e) => return Err(e),
            }
        }
        if let Some(o) = loo.as_ref().filter(|_| k < loo_take) {
            row.loo_delta = Some(o.delta(idx)?);
        }
        out.push(row);
    }

    let pairs: Vec<(f64, f64)> = out
        .iter()
        .filter(|r| r.guard != 0.0)
        .filter_map(|r| r.influence.map(|a_if| (a_if / r.guard, r.guard)))
        .collect();
    let c_star = if pairs.is_empty() { None } else { c_star(&pairs).ok() };
    let spearman_if_loo = {
        let (a, b): (Vec<f64>, Vec<f64>) = out.iter().filter_map(|r| Some((r.influence?, r.loo_delta?))).unzip();
        spearman(&a, &b)
    };
    Ok(AttributionReport {
        samples: out,
        c_star,
        damping: spec.l2_damping,
        theta_digest: theta0.digest(),
        spearman_if_loo,
    })
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl AttributionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per forget sample: `index,guard,if,lo,hi,loo,flags`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,guard,if,lo,hi,loo,flags\n");
        for r in &self.samples {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.index,
                r.guard,
                opt_cell(r.influence),
                opt_cell(r.bound_lo),
                opt_cell(r.bound_hi),
                opt_cell(r.loo_delta),
                r.flags.join(";")
            ));
        }
        s
    }
}
