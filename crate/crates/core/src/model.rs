//! Small differentiable classifiers with per-sample gradients and Hessians.
//!
//! Two kinds are supported: multinomial logistic regression (convex once
//! damped) and a one-hidden-layer tanh MLP. Every per-sample loss carries the
//! full ridge term `(λ/2)·‖θ‖²`, so means over any subset are ridge-regularized
//! cross-entropy and Hessian sums pick up `λ·n_subset·I`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linalg::{self, LinalgError, SymMatrix};
use crate::rng;

/// Step used for finite-difference MLP Hessians.
pub const HESSIAN_FD_STEP: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    Dimension { what: &'static str, expected: usize, actual: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    Label { label: usize, num_classes: usize },
    #[error("empty subset")]
    EmptySubset,
    #[error("index {index} out of range for {len} samples")]
    Index { index: usize, len: usize },
    #[error("invalid dataset split: {0}")]
    Split(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("dataset format error on line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    #[serde(alias = "logistic")]
    MultinomialLogistic,
    #[serde(alias = "mlp")]
    Mlp1Hidden,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
    /// Only meaningful for [`ModelKind::Mlp1Hidden`].
    pub hidden_width: usize,
    pub l2_damping: f64,
}

impl ModelSpec {
    pub fn logistic(input_dim: usize, num_classes: usize, l2_damping: f64) -> Self {
        Self { kind: ModelKind::MultinomialLogistic, input_dim, num_classes, hidden_width: 0, l2_damping }
    }

    pub fn mlp(input_dim: usize, num_classes: usize, hidden_width: usize, l2_damping: f64) -> Self {
        Self { kind: ModelKind::Mlp1Hidden, input_dim, num_classes, hidden_width, l2_damping }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(ModelError::Invalid("input_dim and num_classes must be >= 1".into()));
        }
        if self.kind == ModelKind::Mlp1Hidden && self.hidden_width == 0 {
            return Err(ModelError::Invalid("hidden_width must be >= 1 for the MLP".into()));
        }
        if !(self.l2_damping >= 0.0) || !self.l2_damping.is_finite() {
            return Err(ModelError::Invalid(format!("l2_damping must be finite and >= 0, got {}", self.l2_damping)));
        }
        Ok(())
    }

    pub fn param_len(&self) -> usize {
        let (d, c, h) = (self.input_dim, self.num_classes, self.hidden_width);
        match self.kind {
            ModelKind::MultinomialLogistic => c * d,
            ModelKind::Mlp1Hidden => h * d + h + c * h + c,
        }
    }

    pub fn is_convex(&self) -> bool {
        self.kind == ModelKind::MultinomialLogistic
    }
}

/// Flattened model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// SHA-256 over the little-endian bytes of every entry, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for x in &self.0 {
            h.update(x.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Feature vectors with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub dim: usize,
    pub num_classes: usize,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn new(dim: usize, num_classes: usize, inputs: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(ModelError::Dimension { what: "labels", expected: inputs.len(), actual: labels.len() });
        }
        for x in &inputs {
            if x.len() != dim {
                return Err(ModelError::Dimension { what: "features", expected: dim, actual: x.len() });
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::Invalid("non-finite feature".into()));
            }
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(ModelError::Label { label, num_classes });
        }
        Ok(Self { dim, num_classes, inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

/// Training samples with a forget/retain partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Samples,
    pub forget_idx: Vec<usize>,
    pub retain_idx: Vec<usize>,
}

impl Dataset {
    /// `forget_idx` may be unsorted; the retain set is its complement.
    pub fn new(samples: Samples, mut forget_idx: Vec<usize>) -> Result<Self> {
        let n = samples.len();
        forget_idx.sort_unstable();
        forget_idx.dedup();
        if let Some(&i) = forget_idx.iter().find(|&&i| i >= n) {
            return Err(ModelError::Index { index: i, len: n });
        }
        let mut in_forget = vec![false; n];
        forget_idx.iter().for_each(|&i| in_forget[i] = true);
        let retain_idx: Vec<usize> = (0..n).filter(|&i| !in_forget[i]).collect();
        let ds = Self { samples, forget_idx, retain_idx };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.samples.len();
        if self.forget_idx.is_empty() || self.retain_idx.is_empty() {
            return Err(ModelError::Split("forget and retain sets must both be non-empty".into()));
        }
        let mut seen = vec![0u8; n];
        for &i in self.forget_idx.iter().chain(&self.retain_idx) {
            if i >= n {
                return Err(ModelError::Index { index: i, len: n });
            }
            seen[i] += 1;
        }
        if seen.iter().any(|&c| c != 1) {
            return Err(ModelError::Split("forget and retain sets must partition [0, n)".into()));
        }
        if !self.forget_idx.windows(2).all(|w| w[0] < w[1]) || !self.retain_idx.windows(2).all(|w| w[0] < w[1]) {
            return Err(ModelError::Split("index lists must be sorted".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_forget(&self) -> usize {
        self.forget_idx.len()
    }

    pub fn n_retain(&self) -> usize {
        self.retain_idx.len()
    }

    /// Serializes to the line format: a `d,C,n` header, then one
    /// `f_1,...,f_d,label,F|R` row per sample. Floats use the shortest
    /// representation that round-trips exactly.
    pub fn to_text(&self) -> String {
        let mut forget = vec![false; self.len()];
        self.forget_idx.iter().for_each(|&i| forget[i] = true);
        write_rows(&self.samples, |i| if forget[i] { 'F' } else { 'R' })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (samples, tags) = parse_rows(text)?;
        let forget = tags.iter().enumerate().filter(|(_, t)| **t == 'F').map(|(i, _)| i).collect();
        Dataset::new(samples, forget)
    }
}

/// Held-out samples use the same line format with every row tagged `R`.
pub fn samples_to_text(samples: &Samples) -> String {
    write_rows(samples, |_| 'R')
}

pub fn samples_from_text(text: &str) -> Result<Samples> {
    parse_rows(text).map(|(s, _)| s)
}

fn write_rows(samples: &Samples, tag: impl Fn(usize) -> char) -> String {
    use std::fmt::Write;
    let mut out = format!("{},{},{}\n", samples.dim, samples.num_classes, samples.len());
    for (i, (x, y)) in samples.inputs.iter().zip(&samples.labels).enumerate() {
        for v in x {
            write!(out, "{v},").unwrap();
        }
        writeln!(out, "{y},{}", tag(i)).unwrap();
    }
    out
}

fn parse_rows(text: &str) -> Result<(Samples, Vec<char>)> {
    let fmt_err = |line: usize, msg: String| ModelError::Format { line, msg };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| fmt_err(1, "missing header".into()))?;
    let head: Vec<usize> = header
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| fmt_err(1, format!("header must be `d,C,n`: {e}")))?;
    let [d, c, n] = head[..] else {
        return Err(fmt_err(1, "header must have exactly three fields `d,C,n`".into()));
    };
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut tags = Vec::with_capacity(n);
    for (ln, line) in lines {
        let line_no = ln + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != d + 2 {
            return Err(fmt_err(line_no, format!("expected {} fields, found {}", d + 2, fields.len())));
        }
        let x = fields[..d]
            .iter()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| fmt_err(line_no, format!("bad feature: {e}")))?;
        let y = fields[d].parse::<usize>().map_err(|e| fmt_err(line_no, format!("bad label: {e}")))?;
        let tag = match fields[d + 1] {
            "F" => 'F',
            "R" => 'R',
            other => return Err(fmt_err(line_no, format!("membership tag must be F or R, found `{other}`"))),
        };
        inputs.push(x);
        labels.push(y);
        tags.push(tag);
    }
    if inputs.len() != n {
        return Err(fmt_err(1, format!("header declares {n} samples, found {}", inputs.len())));
    }
    Ok((Samples::new(d, c, inputs, labels)?, tags))
}

fn check_theta(spec: &ModelSpec, theta: &[f64]) -> Result<()> {
    if theta.len() != spec.param_len() {
        return Err(ModelError::Dimension { what: "parameters", expected: spec.param_len(), actual: theta.len() });
    }
    Ok(())
}

fn check_sample(spec: &ModelSpec, x: &[f64], y: usize) -> Result<()> {
    if x.len() != spec.input_dim {
        return Err(ModelError::Dimension { what: "features", expected: spec.input_dim, actual: x.len() });
    }
    if y >= spec.num_classes {
        return Err(ModelError::Label { label: y, num_classes: spec.num_classes });
    }
    Ok(())
}

fn check_subset(samples: &Samples, subset: &[usize]) -> Result<()> {
    if subset.is_empty() {
        return Err(ModelError::EmptySubset);
    }
    if let Some(&i) = subset.iter().find(|&&i| i >= samples.len()) {
        return Err(ModelError::Index { index: i, len: samples.len() });
    }
    Ok(())
}

struct Forward {
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

fn forward(spec: &ModelSpec, theta: &[f64], x: &[f64]) -> Forward {
    let (d, c, h) = (spec.input_dim, spec.num_classes, spec.hidden_width);
    match spec.kind {
        ModelKind::MultinomialLogistic => {
            let logits = (0..c).map(|k| linalg::dot_unchecked(&theta[k * d..(k + 1) * d], x)).collect();
            Forward { hidden: Vec::new(), logits }
        }
        ModelKind::Mlp1Hidden => {
            let (w1, rest) = theta.split_at(h * d);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(c * h);
            let hidden: Vec<f64> =
                (0..h).map(|j| (linalg::dot_unchecked(&w1[j * d..(j + 1) * d], x) + b1[j]).tanh()).collect();
            let logits = (0..c).map(|k| linalg::dot_unchecked(&w2[k * h..(k + 1) * h], &hidden) + b2[k]).collect();
            Forward { hidden, logits }
        }
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|z| (z - lse).exp()).collect()
}

/// Pulls an upstream logit gradient back to the parameters (no damping term).
fn backward(spec: &ModelSpec, theta: &[f64], x: &[f64], fwd: &Forward, dlogits: &[f64]) -> Vec<f64> {
    let (d, c, h) = (spec.input_dim, spec.num_classes, spec.hidden_width);
    let mut g = vec![0.0; theta.len()];
    match spec.kind {
        ModelKind::MultinomialLogistic => {
            for k in 0..c {
                for j in 0..d {
                    g[k * d + j] = dlogits[k] * x[j];
                }
            }
        }
        ModelKind::Mlp1Hidden => {
            let w2 = &theta[h * d + h..h * d + h + c * h];
            let off_b1 = h * d;
            let off_w2 = off_b1 + h;
            let off_b2 = off_w2 + c * h;
            for k in 0..c {
                for j in 0..h {
                    g[off_w2 + k * h + j] = dlogits[k] * fwd.hidden[j];
                }
                g[off_b2 + k] = dlogits[k];
            }
            for j in 0..h {
                let mut dh = 0.0;
                for k in 0..c {
                    dh += w2[k * h + j] * dlogits[k];
                }
                let da = dh * (1.0 - fwd.hidden[j] * fwd.hidden[j]);
                for i in 0..d {
                    g[j * d + i] = da * x[i];
                }
                g[off_b1 + j] = da;
            }
        }
    }
    g
}

fn ridge(spec: &ModelSpec, theta: &[f64]) -> f64 {
    0.5 * spec.l2_damping * linalg::dot_unchecked(theta, theta)
}

pub fn logits(spec: &ModelSpec, theta: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    check_theta(spec, &theta.0)?;
    if x.len() != spec.input_dim {
        return Err(ModelError::Dimension { what: "features", expected: spec.input_dim, actual: x.len() });
    }
    Ok(forward(spec, &theta.0, x).logits)
}

pub fn class_probabilities(spec: &ModelSpec, theta: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    logits(spec, theta, x).map(|z| softmax(&z))
}

/// Cross-entropy `−log softmax(logits)[y]` plus `(λ/2)·‖θ‖²`.
pub fn sample_loss(spec: &ModelSpec, theta: &ParamVector, x: &[f64], y: usize) -> Result<f64> {
    check_theta(spec, &theta.0)?;
    check_sample(spec, x, y)?;
    let z = forward(spec, &theta.0, x).logits;
    Ok(log_sum_exp(&z) - z[y] + ridge(spec, &theta.0))
}

/// Analytic gradient of [`sample_loss`].
pub fn sample_grad(spec: &ModelSpec, theta: &ParamVector, x: &[f64], y: usize) -> Result<Vec<f64>> {
    check_theta(spec, &theta.0)?;
    check_sample(spec, x, y)?;
    let mut target = vec![0.0; spec.num_classes];
    target[y] = 1.0;
    let mut g = soft_target_grad_unchecked(spec, &theta.0, x, &target);
    linalg::axpy(spec.l2_damping, &theta.0, &mut g);
    Ok(g)
}

/// Gradient of the soft-target cross-entropy `−Σ_c t_c log p_c(x; θ)`,
/// without the ridge term. With `t` equal to a reference model's class
/// distribution this is the gradient of `KL(t ‖ p_θ)`.
pub fn soft_target_grad(spec: &ModelSpec, theta: &ParamVector, x: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    check_theta(spec, &theta.0)?;
    if x.len() != spec.input_dim || target.len() != spec.num_classes {
        return Err(ModelError::Dimension { what: "soft target", expected: spec.num_classes, actual: target.len() });
    }
    Ok(soft_target_grad_unchecked(spec, &theta.0, x, target))
}

fn soft_target_grad_unchecked(spec: &ModelSpec, theta: &[f64], x: &[f64], target: &[f64]) -> Vec<f64> {
    let fwd = forward(spec, theta, x);
    let p = softmax(&fwd.logits);
    let dl: Vec<f64> = p.iter().zip(target).map(|(a, b)| a - b).collect();
    backward(spec, theta, x, &fwd, &dl)
}

/// `KL(p ‖ q) = Σ p log(p/q)` with the `0·log 0 = 0` convention.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a.ln() - b.ln())).sum()
}

/// Mean sample loss over `subset`, summed in subset order.
pub fn empirical_loss(spec: &ModelSpec, theta: &ParamVector, samples: &Samples, subset: &[usize]) -> Result<f64> {
    check_subset(samples, subset)?;
    let mut acc = 0.0;
    for &i in subset {
        acc += sample_loss(spec, theta, &samples.inputs[i], samples.labels[i])?;
    }
    Ok(acc / subset.len() as f64)
}

/// `L_S(θ_a) − L_S(θ_b)` accumulated per sample, which keeps small
/// differences between nearby parameter vectors accurate.
pub fn loss_difference(
    spec: &ModelSpec,
    theta_a: &ParamVector,
    theta_b: &ParamVector,
    samples: &Samples,
    subset: &[usize],
) -> Result<f64> {
    check_theta(spec, &theta_a.0)?;
    check_theta(spec, &theta_b.0)?;
    check_subset(samples, subset)?;
    let mut acc = 0.0;
    for &i in subset {
        let (x, y) = (&samples.inputs[i], samples.labels[i]);
        check_sample(spec, x, y)?;
        let za = forward(spec, &theta_a.0, x).logits;
        let zb = forward(spec, &theta_b.0, x).logits;
        acc += (log_sum_exp(&za) - log_sum_exp(&zb)) - (za[y] - zb[y]);
    }
    let diff: Vec<f64> = theta_a.0.iter().zip(&theta_b.0).map(|(a, b)| a - b).collect();
    let sum: Vec<f64> = theta_a.0.iter().zip(&theta_b.0).map(|(a, b)| a + b).collect();
    Ok(acc / subset.len() as f64 + 0.5 * spec.l2_damping * linalg::dot_unchecked(&diff, &sum))
}

pub fn per_sample_grads(spec: &ModelSpec, theta: &ParamVector, samples: &Samples, subset: &[usize]) -> Result<Vec<Vec<f64>>> {
    subset.iter().map(|&i| {
        if i >= samples.len() {
            return Err(ModelError::Index { index: i, len: samples.len() });
        }
        sample_grad(spec, theta, &samples.inputs[i], samples.labels[i])
    }).collect()
}

/// Mean per-sample gradient over `subset`.
pub fn avg_grad(spec: &ModelSpec, theta: &ParamVector, samples: &Samples, subset: &[usize]) -> Result<Vec<f64>> {
    check_subset(samples, subset)?;
    let grads = per_sample_grads(spec, theta, samples, subset)?;
    Ok(linalg::weighted_mean(&grads, None)?)
}

/// Fraction of `subset` whose arg-max class equals the label.
pub fn accuracy(spec: &ModelSpec, theta: &ParamVector, samples: &Samples, subset: &[usize]) -> Result<f64> {
    check_subset(samples, subset)?;
    let mut hits = 0usize;
    for &i in subset {
        let z = logits(spec, theta, &samples.inputs[i])?;
        let best = z.iter().enumerate().fold(0, |b, (k, v)| if *v > z[b] { k } else { b });
        hits += usize::from(best == samples.labels[i]);
    }
    Ok(hits as f64 / subset.len() as f64)
}

/// Per-sample Hessian of [`sample_loss`], including the `λ·I` ridge term.
pub fn sample_hessian(spec: &ModelSpec, theta: &ParamVector, x: &[f64], y: usize) -> Result<SymMatrix> {
    check_theta(spec, &theta.0)?;
    check_sample(spec, x, y)?;
    let p = spec.param_len();
    let mut h = match spec.kind {
        ModelKind::MultinomialLogistic => {
            let d = spec.input_dim;
            let s = softmax(&forward(spec, &theta.0, x).logits);
            // (diag(s) − s sᵀ) ⊗ x xᵀ
            SymMatrix::from_upper(p, |r, c| {
                let (cr, kr) = (r / d, r % d);
                let (cc, kc) = (c / d, c % d);
                let sm = if cr == cc { s[cr] - s[cr] * s[cc] } else { -s[cr] * s[cc] };
                sm * x[kr] * x[kc]
            })
        }
        ModelKind::Mlp1Hidden => {
            let mut dense = vec![0.0; p * p];
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            for j in 0..p {
                plus.0[j] += HESSIAN_FD_STEP;
                minus.0[j] -= HESSIAN_FD_STEP;
                let gp = sample_grad(spec, &plus, x, y)?;
                let gm = sample_grad(spec, &minus, x, y)?;
                for i in 0..p {
                    dense[i * p + j] = (gp[i] - gm[i]) / (2.0 * HESSIAN_FD_STEP);
                }
                plus.0[j] = theta.0[j];
                minus.0[j] = theta.0[j];
            }
            // the FD columns already include the ridge; remove it so it is
            // added back exactly below
            let mut m = SymMatrix::symmetrized(p, &dense)?;
            m.add_diagonal(-spec.l2_damping);
            m
        }
    };
    h.add_diagonal(spec.l2_damping);
    Ok(h)
}

/// Hessian SUM `Σ_{i∈subset} ∇² l_i(θ)`; the ridge contributes `λ·|subset|·I`.
pub fn hessian(spec: &ModelSpec, theta: &ParamVector, samples: &Samples, subset: &[usize]) -> Result<SymMatrix> {
    check_subset(samples, subset)?;
    let mut acc = SymMatrix::zeros(spec.param_len());
    for &i in subset {
        acc.add_assign(&sample_hessian(spec, theta, &samples.inputs[i], samples.labels[i])?)?;
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneOutcome {
    pub theta: ParamVector,
    pub final_loss: f64,
    pub grad_norm: f64,
    pub epochs: usize,
}

/// Seeded small-random initialization, `N(0, 0.01²)` per parameter.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    use rand_distr::{Distribution, Normal};
    let mut r = rng::substream(seed, "init");
    let normal = Normal::new(0.0, 0.01).expect("valid normal");
    ParamVector((0..spec.param_len()).map(|_| normal.sample(&mut r)).collect())
}

/// Full-batch gradient descent on the mean loss over all samples.
pub fn finetune(spec: &ModelSpec, samples: &Samples, lr: f64, epochs: usize, seed: u64) -> Result<FinetuneOutcome> {
    train(spec, samples, &samples.all_indices(), init_params(spec, seed), lr, epochs)
}

/// Full-batch gradient descent on the mean loss over `subset`, from `init`.
pub fn train(
    spec: &ModelSpec,
    samples: &Samples,
    subset: &[usize],
    init: ParamVector,
    lr: f64,
    epochs: usize,
) -> Result<FinetuneOutcome> {
    spec.validate()?;
    check_theta(spec, &init.0)?;
    check_subset(samples, subset)?;
    if epochs == 0 {
        return Err(ModelError::Invalid("epochs must be >= 1".into()));
    }
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(ModelError::Invalid(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    let mut theta = init;
    for epoch in 1..=epochs {
        let g = avg_grad(spec, &theta, samples, subset)?;
        linalg::axpy(-lr, &g, &mut theta.0);
        if !theta.is_finite() {
            return Err(ModelError::Diverged { epoch, loss: f64::NAN });
        }
    }
    let final_loss = empirical_loss(spec, &theta, samples, subset)?;
    if !final_loss.is_finite() {
        return Err(ModelError::Diverged { epoch: epochs, loss: final_loss });
    }
    let grad_norm = linalg::norm2(&avg_grad(spec, &theta, samples, subset)?);
    Ok(FinetuneOutcome { theta, final_loss, grad_norm, epochs })
}

/// Newton refinement of the mean loss over `subset`, for convex damped
/// models. Stops once the gradient norm is below `tol`.
pub fn newton_refine(
    spec: &ModelSpec,
    samples: &Samples,
    subset: &[usize],
    init: ParamVector,
    tol: f64,
    max_iter: usize,
) -> Result<FinetuneOutcome> {
    let mut theta = init;
    let n = subset.len() as f64;
    for it in 0..max_iter {
        let g = avg_grad(spec, &theta, samples, subset)?;
        if linalg::norm2(&g) <= tol {
            let final_loss = empirical_loss(spec, &theta, samples, subset)?;
            return Ok(FinetuneOutcome { theta, final_loss, grad_norm: linalg::norm2(&g), epochs: it });
        }
        let h = hessian(spec, &theta, samples, subset)?.scaled(1.0 / n);
        let step = linalg::solve_spd(&h, &g)?;
        // backtracking keeps the iteration monotone far from the optimum
        let f0 = empirical_loss(spec, &theta, samples, subset)?;
        let mut t = 1.0;
        loop {
            let mut cand = theta.clone();
            linalg::axpy(-t, &step, &mut cand.0);
            let f1 = empirical_loss(spec, &cand, samples, subset)?;
            // near the optimum the loss is flat to rounding; accept those steps
            if f1 <= f0 + 8.0 * f64::EPSILON * f0.abs() || t < 1e-8 {
                theta = cand;
                break;
            }
            t *= 0.5;
        }
    }
    let g = avg_grad(spec, &theta, samples, subset)?;
    Err(ModelError::Invalid(format!("Newton refinement did not reach tolerance {tol:e} (|g| = {:e})", linalg::norm2(&g))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_theta(spec: &ModelSpec, rng: &mut ChaCha8Rng, scale: f64) -> ParamVector {
        ParamVector((0..spec.param_len()).map(|_| rng.random_range(-scale..scale)).collect())
    }

    fn toy_samples(rng: &mut ChaCha8Rng, n: usize, d: usize, c: usize) -> Samples {
        let inputs = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
        let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
        Samples::new(d, c, inputs, labels).unwrap()
    }

    // direct softmax/log oracle, written independently of the model code
    fn direct_logistic_loss(theta: &[f64], x: &[f64], y: usize, c: usize, lam: f64) -> f64 {
        let d = x.len();
        let z: Vec<f64> = (0..c).map(|k| (0..d).map(|j| theta[k * d + j] * x[j]).sum()).collect();
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        -(z[y].exp() / denom).ln() + 0.5 * lam * theta.iter().map(|t| t * t).sum::<f64>()
    }

    fn fd_grad(spec: &ModelSpec, theta: &ParamVector, x: &[f64], y: usize, h: f64) -> Vec<f64> {
        (0..theta.len())
            .map(|j| {
                let mut p = theta.clone();
                let mut m = theta.clone();
                p.0[j] += h;
                m.0[j] -= h;
                (sample_loss(spec, &p, x, y).unwrap() - sample_loss(spec, &m, x, y).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        let scale = linalg::norm_inf(b).max(1e-8);
        a.iter().zip(b).map(|(x, y)| (x - y).abs() / scale).fold(0.0, f64::max)
    }

    #[test]
    fn zero_theta_binary_loss_is_ln2() {
        let spec = ModelSpec::logistic(1, 2, 0.0);
        let l = sample_loss(&spec, &ParamVector::zeros(2), &[1.0], 0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let g = sample_grad(&spec, &ParamVector::zeros(2), &[1.0], 0).unwrap();
        assert_eq!(g, vec![-0.5, 0.5]);
    }

    #[test]
    fn saturated_margin_leaves_ridge_only() {
        let spec = ModelSpec::logistic(1, 2, 1e-3);
        let theta = ParamVector(vec![60.0, -60.0]);
        let l = sample_loss(&spec, &theta, &[1.0], 0).unwrap();
        let ridge = 0.5 * 1e-3 * 7200.0;
        assert!((l - ridge).abs() < 1e-12);
        let g = sample_grad(&spec, &theta, &[1.0], 0).unwrap();
        assert!(linalg::norm2(&g) <= 1e-3 * linalg::norm2(&theta.0) + 1e-6);
    }

    #[test]
    fn loss_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = ModelSpec::logistic(4, 3, 1e-3);
        for _ in 0..20 {
            let theta = random_theta(&spec, &mut rng, 1.0);
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = rng.random_range(0..3);
            let a = sample_loss(&spec, &theta, &x, y).unwrap();
            let b = direct_logistic_loss(&theta.0, &x, y, 3, 1e-3);
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn dimension_errors() {
        let spec = ModelSpec::logistic(2, 2, 0.0);
        assert!(matches!(sample_loss(&spec, &ParamVector::zeros(3), &[1.0, 1.0], 0), Err(ModelError::Dimension { .. })));
        assert!(matches!(sample_loss(&spec, &ParamVector::zeros(4), &[1.0], 0), Err(ModelError::Dimension { .. })));
        assert!(matches!(sample_loss(&spec, &ParamVector::zeros(4), &[1.0, 1.0], 2), Err(ModelError::Label { .. })));
    }

    #[test]
    fn empirical_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = ModelSpec::logistic(3, 3, 1e-3);
        let s = toy_samples(&mut rng, 10, 3, 3);
        let theta = random_theta(&spec, &mut rng, 0.5);
        let single = empirical_loss(&spec, &theta, &s, &[4]).unwrap();
        assert_eq!(single, sample_loss(&spec, &theta, &s.inputs[4], s.labels[4]).unwrap());

        let all = s.all_indices();
        let doubled: Vec<usize> = all.iter().chain(&all).copied().collect();
        let a = empirical_loss(&spec, &theta, &s, &all).unwrap();
        let b = empirical_loss(&spec, &theta, &s, &doubled).unwrap();
        assert!((a - b).abs() < 1e-14);

        let mut oracle = 0.0;
        for &i in &all {
            oracle += sample_loss(&spec, &theta, &s.inputs[i], s.labels[i]).unwrap();
        }
        assert_eq!(a, oracle / all.len() as f64);
        assert_eq!(empirical_loss(&spec, &theta, &s, &[]), Err(ModelError::EmptySubset));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for spec in [ModelSpec::logistic(4, 3, 1e-3), ModelSpec::mlp(3, 3, 5, 1e-3)] {
            for _ in 0..10 {
                let theta = random_theta(&spec, &mut rng, 1.0);
                let x: Vec<f64> = (0..spec.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let y = rng.random_range(0..spec.num_classes);
                let g = sample_grad(&spec, &theta, &x, y).unwrap();
                let fd = fd_grad(&spec, &theta, &x, y, 1e-5);
                assert!(max_rel_err(&g, &fd) <= 1e-4, "{:?}", spec.kind);
            }
        }
    }

    #[test]
    fn avg_grad_cases() {
        let spec = ModelSpec::logistic(1, 2, 0.0);
        let s = Samples::new(1, 2, vec![vec![1.0], vec![1.0]], vec![0, 1]).unwrap();
        let theta = ParamVector::zeros(2);
        assert_eq!(avg_grad(&spec, &theta, &s, &[0, 1]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(avg_grad(&spec, &theta, &s, &[1]).unwrap(), sample_grad(&spec, &theta, &[1.0], 1).unwrap());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = ModelSpec::mlp(2, 3, 4, 1e-3);
        let s = toy_samples(&mut rng, 8, 2, 3);
        let theta = random_theta(&spec, &mut rng, 0.7);
        let sub = [0, 2, 3, 7];
        let g = avg_grad(&spec, &theta, &s, &sub).unwrap();
        let h = 1e-5;
        let fd: Vec<f64> = (0..theta.len())
            .map(|j| {
                let mut p = theta.clone();
                let mut m = theta.clone();
                p.0[j] += h;
                m.0[j] -= h;
                (empirical_loss(&spec, &p, &s, &sub).unwrap() - empirical_loss(&spec, &m, &s, &sub).unwrap()) / (2.0 * h)
            })
            .collect();
        assert!(max_rel_err(&g, &fd) <= 1e-4);
    }

    #[test]
    fn hessian_uniform_softmax_block() {
        let spec = ModelSpec::logistic(1, 2, 0.0);
        let s = Samples::new(1, 2, vec![vec![1.0]], vec![0]).unwrap();
        let h = hessian(&spec, &ParamVector::zeros(2), &s, &[0]).unwrap();
        assert_eq!(h.as_slice(), &[0.25, -0.25, -0.25, 0.25]);
    }

    #[test]
    fn hessian_sum_convention_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for spec in [ModelSpec::logistic(3, 3, 1e-3), ModelSpec::mlp(2, 3, 3, 1e-3)] {
            let s = toy_samples(&mut rng, 6, spec.input_dim, 3);
            let theta = random_theta(&spec, &mut rng, 0.8);
            let all = s.all_indices();
            let doubled: Vec<usize> = all.iter().chain(&all).copied().collect();
            let h1 = hessian(&spec, &theta, &s, &all).unwrap();
            let h2 = hessian(&spec, &theta, &s, &doubled).unwrap();
            let mut diff = h2.clone();
            diff.add_assign(&h1.scaled(-2.0)).unwrap();
            assert!(diff.frobenius() <= 1e-12 * h1.frobenius());

            // central differences of the analytic gradient sum
            let p = spec.param_len();
            let step = 1e-5;
            let mut fd = vec![0.0; p * p];
            for j in 0..p {
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp.0[j] += step;
                tm.0[j] -= step;
                let gp = avg_grad(&spec, &tp, &s, &all).unwrap();
                let gm = avg_grad(&spec, &tm, &s, &all).unwrap();
                for i in 0..p {
                    fd[i * p + j] = (gp[i] - gm[i]) / (2.0 * step) * all.len() as f64;
                }
            }
            let err = h1.as_slice().iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-4 * h1.norm_inf(), "{:?}: {err}", spec.kind);
        }
    }

    #[test]
    fn damped_logistic_hessian_is_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = ModelSpec::logistic(3, 3, 1e-2);
        let s = toy_samples(&mut rng, 12, 3, 3);
        let theta = random_theta(&spec, &mut rng, 1.0);
        let h = hessian(&spec, &theta, &s, &s.all_indices()).unwrap();
        let e = linalg::sym_eigen(&h).unwrap();
        assert!(*e.eigenvalues.last().unwrap() >= 1e-2 * 12.0 - 1e-10);
    }

    #[test]
    fn split_mean_decomposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = ModelSpec::logistic(2, 2, 1e-3);
        let s = toy_samples(&mut rng, 9, 2, 2);
        let ds = Dataset::new(s, vec![1, 4, 7]).unwrap();
        let theta = random_theta(&spec, &mut rng, 1.0);
        let lf = empirical_loss(&spec, &theta, &ds.samples, &ds.forget_idx).unwrap();
        let lr = empirical_loss(&spec, &theta, &ds.samples, &ds.retain_idx).unwrap();
        let all = empirical_loss(&spec, &theta, &ds.samples, &ds.samples.all_indices()).unwrap();
        assert!((all - (3.0 * lf + 6.0 * lr) / 9.0).abs() < 1e-15);
    }

    #[test]
    fn finetune_converges_on_separable_pair() {
        let spec = ModelSpec::logistic(2, 2, 1e-2);
        let s = Samples::new(2, 2, vec![vec![1.0, 0.5], vec![-1.0, 0.2]], vec![0, 1]).unwrap();
        let out = finetune(&spec, &s, 1.0, 20_000, 3).unwrap();
        assert!(out.grad_norm <= 1e-6, "{}", out.grad_norm);
    }

    #[test]
    fn finetune_noop_and_determinism() {
        let spec = ModelSpec::logistic(2, 2, 1e-3);
        let s = Samples::new(2, 2, vec![vec![1.0, 0.5], vec![-1.0, 0.2]], vec![0, 1]).unwrap();
        assert!(finetune(&spec, &s, 0.1, 0, 3).is_err());
        let out = finetune(&spec, &s, 0.0, 1, 3).unwrap();
        assert_eq!(out.theta, init_params(&spec, 3));
        let a = finetune(&spec, &s, 0.5, 50, 3).unwrap();
        let b = finetune(&spec, &s, 0.5, 50, 3).unwrap();
        assert_eq!(a.theta.digest(), b.theta.digest());
    }

    #[test]
    fn loss_difference_matches_direct_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for spec in [ModelSpec::logistic(3, 4, 1e-2), ModelSpec::mlp(3, 4, 5, 1e-2)] {
            let s = toy_samples(&mut rng, 30, 3, 4);
            let all = s.all_indices();
            let a = random_theta(&spec, &mut rng, 1.0);
            let b = random_theta(&spec, &mut rng, 1.0);
            let direct = empirical_loss(&spec, &a, &s, &all).unwrap() - empirical_loss(&spec, &b, &s, &all).unwrap();
            assert!((loss_difference(&spec, &a, &b, &s, &all).unwrap() - direct).abs() < 1e-13);
            assert_eq!(loss_difference(&spec, &a, &a, &s, &all).unwrap(), 0.0);
        }
    }

    #[test]
    fn divergence_reported() {
        // the ridge term alone flips and amplifies θ every epoch
        let spec = ModelSpec::logistic(1, 2, 1.0);
        let s = Samples::new(1, 2, vec![vec![1.0]], vec![0]).unwrap();
        assert!(matches!(finetune(&spec, &s, 1e10, 100, 1), Err(ModelError::Diverged { .. })));
    }

    #[test]
    fn dataset_text_format() {
        let s = Samples::new(2, 3, vec![vec![0.1, -2.5], vec![1e-17, 3.0], vec![7.0, 0.0]], vec![0, 2, 1]).unwrap();
        let ds = Dataset::new(s, vec![1]).unwrap();
        let text = ds.to_text();
        assert_eq!(text, "2,3,3\n0.1,-2.5,0,R\n0.00000000000000001,3,2,F\n7,0,1,R\n");
        assert_eq!(Dataset::from_text(&text).unwrap(), ds);
        let bad = "2,3,1\n0.1,0.2,0,X\n";
        assert!(matches!(Dataset::from_text(bad), Err(ModelError::Format { line: 2, .. })));
    }

    #[test]
    fn dataset_split_validation() {
        let s = Samples::new(1, 2, vec![vec![0.0], vec![1.0]], vec![0, 1]).unwrap();
        assert!(Dataset::new(s.clone(), vec![]).is_err());
        assert!(Dataset::new(s.clone(), vec![0, 1]).is_err());
        assert!(Dataset::new(s, vec![5]).is_err());
    }

    #[test]
    fn newton_reaches_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let spec = ModelSpec::logistic(3, 3, 1e-2);
        let s = toy_samples(&mut rng, 30, 3, 3);
        let all = s.all_indices();
        let out = newton_refine(&spec, &s, &all, ParamVector::zeros(9), 1e-12, 50).unwrap();
        assert!(out.grad_norm <= 1e-12);
    }
}
