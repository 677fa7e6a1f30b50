//! Seeded Gaussian-cluster classification data with a tunable share of
//! forget samples drawn from the retain classes.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::model::{self, Dataset, ModelError, ModelSpec, ParamVector, Samples};
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenError {
    #[error("invalid generator spec: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn default_separation() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub seed: u64,
    /// Total samples, including the held-out split.
    pub n: usize,
    pub d: usize,
    /// Class count including the reserved neutral class (the last index),
    /// which never receives generated samples.
    pub num_classes: usize,
    pub forget_frac: f64,
    /// Probability that a forget sample is drawn from its label's retain
    /// cluster rather than from a forget-only cluster.
    pub overlap: f64,
    pub noise_sigma: f64,
    #[serde(default)]
    pub test_frac: f64,
    /// Norm of every cluster center.
    #[serde(default = "default_separation")]
    pub separation: f64,
}

impl GenSpec {
    pub fn new(seed: u64, n: usize, d: usize, num_classes: usize, forget_frac: f64, overlap: f64) -> Self {
        Self {
            seed,
            n,
            d,
            num_classes,
            forget_frac,
            overlap,
            noise_sigma: 1.0,
            test_frac: 0.0,
            separation: default_separation(),
        }
    }

    pub fn n_forget(&self) -> usize {
        (self.n as f64 * self.forget_frac).round() as usize
    }

    pub fn n_test(&self) -> usize {
        (self.n as f64 * self.test_frac).round() as usize
    }

    pub fn n_retain(&self) -> usize {
        self.n.saturating_sub(self.n_forget() + self.n_test())
    }

    /// Index of the reserved neutral class.
    pub fn neutral_label(&self) -> usize {
        self.num_classes - 1
    }

    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: String| Err(GenError::Invalid(m));
        if self.d == 0 {
            return bad("d must be >= 1".into());
        }
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2 (one real class plus the neutral class)".into());
        }
        if !(self.forget_frac > 0.0 && self.forget_frac < 1.0) {
            return bad(format!("forget_frac must lie in (0, 1), got {}", self.forget_frac));
        }
        if (self.n as f64) * self.forget_frac < 1.0 {
            return bad(format!("n * forget_frac = {} leaves no forget samples", self.n as f64 * self.forget_frac));
        }
        if !(0.0..1.0).contains(&self.test_frac) {
            return bad(format!("test_frac must lie in [0, 1), got {}", self.test_frac));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return bad(format!("overlap must lie in [0, 1], got {}", self.overlap));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return bad(format!("separation must be finite and >= 0, got {}", self.separation));
        }
        if self.n_forget() + self.n_test() >= self.n {
            return bad("no samples left for the retain set".into());
        }
        Ok(())
    }
}

fn center<R: Rng>(rng: &mut R, d: usize, norm: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let len = linalg::norm2(&v);
        if len > 1e-8 {
            return v.into_iter().map(|x| x * norm / len).collect();
        }
    }
}

fn draw<R: Rng>(rng: &mut R, mu: &[f64], sigma: f64) -> Vec<f64> {
    mu.iter().map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Training data with its forget split, plus held-out samples from the retain
/// clusters.
pub fn generate(gen: &GenSpec) -> Result<(Dataset, Samples), GenError> {
    gen.validate()?;
    let mut rng = rng::substream(gen.seed, "data");
    let real = gen.num_classes - 1;
    let retain_centers: Vec<Vec<f64>> = (0..real).map(|_| center(&mut rng, gen.d, gen.separation)).collect();
    let forget_centers: Vec<Vec<f64>> = (0..real).map(|_| center(&mut rng, gen.d, gen.separation)).collect();

    let mut rows: Vec<(Vec<f64>, usize, bool)> = Vec::with_capacity(gen.n);
    for i in 0..gen.n_retain() {
        let c = i % real;
        rows.push((draw(&mut rng, &retain_centers[c], gen.noise_sigma), c, false));
    }
    for _ in 0..gen.n_forget() {
        let c = rng.random_range(0..real);
        let mu = if rng.random::<f64>() < gen.overlap { &retain_centers[c] } else { &forget_centers[c] };
        rows.push((draw(&mut rng, mu, gen.noise_sigma), c, true));
    }
    rows.shuffle(&mut rng);

    let forget_idx = rows.iter().enumerate().filter(|(_, r)| r.2).map(|(i, _)| i).collect();
    let (inputs, labels) = rows.into_iter().map(|(x, y, _)| (x, y)).unzip();
    let train = Dataset::new(Samples::new(gen.d, gen.num_classes, inputs, labels)?, forget_idx)?;

    let (test_x, test_y) = (0..gen.n_test())
        .map(|i| {
            let c = i % real;
            (draw(&mut rng, &retain_centers[c], gen.noise_sigma), c)
        })
        .unzip();
    let test = Samples::new(gen.d, gen.num_classes, test_x, test_y)?;
    Ok((train, test))
}

/// `⟨ḡ_f, ḡ_r⟩` at `theta0`.
pub fn measured_entanglement(spec: &ModelSpec, theta0: &ParamVector, data: &Dataset) -> Result<f64, ModelError> {
    let s = &data.samples;
    let f = model::avg_grad(spec, theta0, s, &data.forget_idx)?;
    let r = model::avg_grad(spec, theta0, s, &data.retain_idx)?;
    Ok(linalg::dot(&f, &r)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        let g = GenSpec::new(1, 200, 4, 4, 0.10, 0.5);
        let (data, test) = generate(&g).unwrap();
        assert_eq!(data.n_forget(), 20);
        assert_eq!(data.n_retain(), 180);
        assert!(test.is_empty());

        let g = GenSpec { test_frac: 0.2, ..GenSpec::new(1, 500, 4, 4, 0.01, 0.5) };
        let (data, test) = generate(&g).unwrap();
        assert_eq!((data.n_forget(), data.n_retain(), test.len()), (5, 395, 100));
        data.validate().unwrap();
    }

    #[test]
    fn deterministic_per_seed() {
        let g = GenSpec { test_frac: 0.1, ..GenSpec::new(9, 120, 3, 3, 0.05, 0.3) };
        let (a, ta) = generate(&g).unwrap();
        let (b, tb) = generate(&g).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        assert_eq!(model::samples_to_text(&ta), model::samples_to_text(&tb));
        let (c, _) = generate(&GenSpec { seed: 10, ..g }).unwrap();
        assert_ne!(a.to_text(), c.to_text());
    }

    #[test]
    fn neutral_class_is_never_generated() {
        let g = GenSpec { test_frac: 0.2, ..GenSpec::new(3, 300, 2, 5, 0.1, 0.5) };
        let (data, test) = generate(&g).unwrap();
        assert!(data.samples.labels.iter().chain(&test.labels).all(|&y| y < g.neutral_label()));
    }

    #[test]
    fn rejects_degenerate_specs() {
        let base = GenSpec::new(0, 100, 2, 3, 0.1, 0.5);
        assert!(generate(&GenSpec { forget_frac: 0.0, ..base.clone() }).is_err());
        assert!(generate(&GenSpec { forget_frac: 0.001, ..base.clone() }).is_err());
        assert!(generate(&GenSpec { num_classes: 1, ..base.clone() }).is_err());
        assert!(generate(&GenSpec { overlap: 1.5, ..base.clone() }).is_err());
        assert!(generate(&GenSpec { d: 0, ..base.clone() }).is_err());
        assert!(generate(&GenSpec { test_frac: 0.95, ..base }).is_err());
    }

    #[test]
    fn copied_forget_set_has_retain_norm_entanglement() {
        let spec = ModelSpec::logistic(2, 3, 1e-3);
        let inputs = vec![vec![0.5, 1.0], vec![-1.0, 0.2], vec![0.5, 1.0], vec![-1.0, 0.2]];
        let s = Samples::new(2, 3, inputs, vec![0, 1, 0, 1]).unwrap();
        let data = Dataset::new(s, vec![2, 3]).unwrap();
        let theta = ParamVector(vec![0.1, -0.2, 0.3, 0.0, -0.1, 0.2]);
        let r = model::avg_grad(&spec, &theta, &data.samples, &data.retain_idx).unwrap();
        let k = measured_entanglement(&spec, &theta, &data).unwrap();
        assert_eq!(k, linalg::dot(&r, &r).unwrap());
        assert!(k > 0.0);
    }

    #[test]
    fn opposed_forget_gradients_give_negative_entanglement() {
        // one-dimensional binary logistic at θ = 0: label flip negates the gradient
        let spec = ModelSpec::logistic(1, 2, 0.0);
        let s = Samples::new(1, 2, vec![vec![1.0], vec![1.0]], vec![0, 1]).unwrap();
        let data = Dataset::new(s, vec![1]).unwrap();
        assert!(measured_entanglement(&spec, &ParamVector::zeros(2), &data).unwrap() < 0.0);
    }
}
