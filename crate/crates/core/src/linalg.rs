//! Dense real linear algebra for the attribution math.
//!
//! Everything here is sized for parameter counts of at most a few hundred:
//! row-major dense storage, a cyclic Jacobi eigen-solver and a Cholesky
//! solve. All reductions run left-to-right so results are bit-reproducible.

use thiserror::Error;

/// Absolute tolerance for the symmetry check on [`SymMatrix`] construction.
pub const SYMMETRY_TOL: f64 = 1e-12;

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_REL_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("matrix is not symmetric at ({row}, {col}): |{a} - {b}| exceeds tolerance")]
    NotSymmetric { row: usize, col: usize, a: f64, b: f64 },
    #[error("non-finite entry at position {0}")]
    NonFinite(usize),
    #[error("matrix is not positive definite: non-positive pivot {value:e} at index {index}")]
    NotPositiveDefinite { index: usize, value: f64 },
    #[error("Jacobi eigen-solver did not converge after {0} sweeps")]
    NoConvergence(usize),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(LinalgError::Dimension { expected, actual });
    }
    Ok(())
}

/// Inner product, accumulated strictly left to right.
pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len())?;
    Ok(dot_unchecked(a, b))
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn norm2(a: &[f64]) -> f64 {
    dot_unchecked(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check_len(a.len(), b.len())?;
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

/// Weighted mean `(1/n) Σ w_i v_i` of equal-length vectors, summed in index
/// order. `weights = None` means uniform weights of one.
pub fn weighted_mean(vectors: &[Vec<f64>], weights: Option<&[f64]>) -> Result<Vec<f64>> {
    let first = vectors.first().ok_or(LinalgError::Dimension { expected: 1, actual: 0 })?;
    if let Some(w) = weights {
        check_len(vectors.len(), w.len())?;
    }
    let mut acc = vec![0.0; first.len()];
    for (i, v) in vectors.iter().enumerate() {
        check_len(first.len(), v.len())?;
        let w = weights.map_or(1.0, |w| w[i]);
        axpy(w, v, &mut acc);
    }
    let inv = 1.0 / vectors.len() as f64;
    acc.iter_mut().for_each(|x| *x *= inv);
    Ok(acc)
}

/// Sum of vectors using a fixed pairwise tree. The shape of the tree depends
/// only on the number of inputs, so the result is identical no matter how the
/// leaves were produced (sequentially or in parallel).
pub fn tree_sum(vectors: &[Vec<f64>]) -> Option<Vec<f64>> {
    match vectors.len() {
        0 => None,
        1 => Some(vectors[0].clone()),
        n => {
            let (l, r) = vectors.split_at(n / 2);
            let mut a = tree_sum(l)?;
            let b = tree_sum(r)?;
            for (x, y) in a.iter_mut().zip(&b) {
                *x += y;
            }
            Some(a)
        }
    }
}

/// Dense symmetric matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    order: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    /// Validates shape, finiteness and symmetry (within [`SYMMETRY_TOL`]).
    pub fn new(order: usize, data: Vec<f64>) -> Result<Self> {
        check_len(order * order, data.len())?;
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite(i));
        }
        for r in 0..order {
            for c in (r + 1)..order {
                let (a, b) = (data[r * order + c], data[c * order + r]);
                if (a - b).abs() > SYMMETRY_TOL {
                    return Err(LinalgError::NotSymmetric { row: r, col: c, a, b });
                }
            }
        }
        Ok(Self { order, data })
    }

    pub fn zeros(order: usize) -> Self {
        Self { order, data: vec![0.0; order * order] }
    }

    pub fn identity(order: usize) -> Self {
        let mut m = Self::zeros(order);
        m.add_diagonal(1.0);
        m
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, d) in diag.iter().enumerate() {
            m.data[i * diag.len() + i] = *d;
        }
        m
    }

    /// Builds a matrix from the upper triangle (`f(r, c)` with `r <= c`),
    /// mirroring it so the result is exactly symmetric.
    pub fn from_upper(order: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(order);
        for r in 0..order {
            for c in r..order {
                let v = f(r, c);
                m.data[r * order + c] = v;
                m.data[c * order + r] = v;
            }
        }
        m
    }

    /// Symmetrizes an arbitrary square matrix as `(A + Aᵀ) / 2`.
    pub fn symmetrized(order: usize, data: &[f64]) -> Result<Self> {
        check_len(order * order, data.len())?;
        Ok(Self::from_upper(order, |r, c| 0.5 * (data[r * order + c] + data[c * order + r])))
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.order + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.order..(r + 1) * self.order]
    }

    pub fn add_diagonal(&mut self, v: f64) {
        for i in 0..self.order {
            self.data[i * self.order + i] += v;
        }
    }

    /// Adds `alpha * x xᵀ`.
    pub fn add_outer(&mut self, alpha: f64, x: &[f64]) {
        debug_assert_eq!(x.len(), self.order);
        let n = self.order;
        for (row, xr) in self.data.chunks_exact_mut(n).zip(x) {
            let ar = alpha * xr;
            for (a, xc) in row.iter_mut().zip(x) {
                *a += ar * xc;
            }
        }
    }

    pub fn add_assign(&mut self, other: &SymMatrix) -> Result<()> {
        check_len(self.order, other.order)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { order: self.order, data: self.data.iter().map(|x| x * s).collect() }
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.order, x.len())?;
        Ok((0..self.order).map(|r| dot_unchecked(self.row(r), x)).collect())
    }

    /// `xᵀ M y`
    pub fn quad_form(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let my = self.matvec(y)?;
        dot(x, &my)
    }

    pub fn frobenius(&self) -> f64 {
        norm2(&self.data)
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.order)
            .map(|r| self.row(r).iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    fn off_diagonal_frobenius(&self) -> f64 {
        let n = self.order;
        let mut acc = 0.0;
        for r in 0..n {
            for c in 0..n {
                if r != c {
                    acc += self.data[r * n + c] * self.data[r * n + c];
                }
            }
        }
        acc.sqrt()
    }
}

/// Full spectral decomposition. Eigenvalues are sorted descending and
/// `eigenvectors[k]` pairs with `eigenvalues[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomp {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Vec<Vec<f64>>,
}

impl EigenDecomp {
    /// `Σ_k f(λ_k) v_k v_kᵀ`
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let n = self.eigenvalues.len();
        let mut m = SymMatrix::zeros(n);
        for (lambda, v) in self.eigenvalues.iter().zip(&self.eigenvectors) {
            m.add_outer(f(*lambda), v);
        }
        // rank-one sums are symmetric up to rounding; mirror to make it exact
        SymMatrix::symmetrized(n, m.as_slice()).expect("square by construction")
    }

    pub fn reconstruct(&self) -> SymMatrix {
        self.reconstruct_with(|l| l)
    }

    /// Decomposition of the inverse matrix: eigenvalues inverted and the
    /// pairs re-sorted descending. Fails if any eigenvalue is non-positive.
    pub fn inverse(&self) -> Result<EigenDecomp> {
        if let Some((i, &l)) = self.eigenvalues.iter().enumerate().find(|(_, l)| **l <= 0.0) {
            return Err(LinalgError::NotPositiveDefinite { index: i, value: l });
        }
        let mut pairs: Vec<(f64, Vec<f64>)> = self
            .eigenvalues
            .iter()
            .zip(&self.eigenvectors)
            .map(|(l, v)| (1.0 / l, v.clone()))
            .collect();
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
        let (eigenvalues, eigenvectors) = pairs.into_iter().unzip();
        Ok(EigenDecomp { eigenvalues, eigenvectors })
    }
}

/// Symmetric eigen-decomposition by cyclic Jacobi rotations.
///
/// Sweeps over all off-diagonal pairs until the off-diagonal Frobenius norm
/// drops to `1e-12 · ‖m‖_F`.
pub fn sym_eigen(m: &SymMatrix) -> Result<EigenDecomp> {
    let n = m.order;
    let mut a = m.clone();
    let mut v = SymMatrix::identity(n).data; // columns are eigenvectors
    let threshold = JACOBI_REL_TOL * m.frobenius();

    let mut converged = a.off_diagonal_frobenius() <= threshold;
    let mut sweeps = 0;
    while !converged {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(LinalgError::NoConvergence(JACOBI_MAX_SWEEPS));
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.data[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a.data[p * n + p];
                let aqq = a.data[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a.data, n, p, q, c, s);
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
        converged = a.off_diagonal_frobenius() <= threshold;
    }

    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|k| {
            let col: Vec<f64> = (0..n).map(|r| v[r * n + k]).collect();
            let nrm = norm2(&col);
            (a.data[k * n + k], col.into_iter().map(|x| x / nrm).collect())
        })
        .collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0));
    let (eigenvalues, eigenvectors) = pairs.into_iter().unzip();
    Ok(EigenDecomp { eigenvalues, eigenvectors })
}

/// Applies the rotation `Jᵀ A J` in the (p, q) plane, keeping `a` symmetric.
fn rotate(a: &mut [f64], n: usize, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..n {
        let akp = a[k * n + p];
        let akq = a[k * n + q];
        a[k * n + p] = c * akp - s * akq;
        a[k * n + q] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[p * n + k];
        let aqk = a[q * n + k];
        a[p * n + k] = c * apk - s * aqk;
        a[q * n + k] = s * apk + c * aqk;
    }
    a[p * n + q] = 0.0;
    a[q * n + p] = 0.0;
}

/// Lower-triangular Cholesky factor `L` with `M = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    order: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    pub fn factor(m: &SymMatrix) -> Result<Self> {
        let n = m.order;
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = m.get(j, j);
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > 0.0) {
                return Err(LinalgError::NotPositiveDefinite { index: j, value: d });
            }
            let djj = d.sqrt();
            l[j * n + j] = djj;
            for i in (j + 1)..n {
                let mut s = m.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / djj;
            }
        }
        Ok(Self { order: n, lower: l })
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.order;
        check_len(n, b.len())?;
        let l = &self.lower;
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= l[i * n + k] * y[k];
            }
            y[i] = s / l[i * n + i];
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[k * n + i] * x[k];
            }
            x[i] = s / l[i * n + i];
        }
        Ok(x)
    }
}

/// Solves `m x = b` for symmetric positive definite `m`.
pub fn solve_spd(m: &SymMatrix, b: &[f64]) -> Result<Vec<f64>> {
    Cholesky::factor(m)?.solve(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> SymMatrix {
        let a: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut m = SymMatrix::from_upper(n, |r, c| (0..n).map(|k| a[r * n + k] * a[c * n + k]).sum());
        m.add_diagonal(0.5);
        m
    }

    fn neumaier(a: &[f64], b: &[f64]) -> f64 {
        let (mut sum, mut comp) = (0.0_f64, 0.0_f64);
        for (x, y) in a.iter().zip(b) {
            let t = x * y;
            let s = sum + t;
            comp += if sum.abs() >= t.abs() { (sum - s) + t } else { (t - s) + sum };
            sum = s;
        }
        sum + comp
    }

    #[test]
    fn dot_small_cases() {
        assert_eq!(dot(&[1.0, 0.0], &[0.5, 2.0]).unwrap(), 0.5);
        assert_eq!(dot(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 25.0);
        assert!(matches!(dot(&[1.0], &[1.0, 2.0]), Err(LinalgError::Dimension { .. })));
    }

    #[test]
    fn dot_matches_compensated_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let diff = (dot(&a, &b).unwrap() - neumaier(&a, &b)).abs();
        assert!(diff <= 1e-10 * norm2(&a) * norm2(&b));
        assert_eq!(dot(&a, &b).unwrap().to_bits(), dot(&a, &b).unwrap().to_bits());
    }

    #[test]
    fn eigen_identity_and_2x2() {
        let e = sym_eigen(&SymMatrix::identity(3)).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 1.0, 1.0]);

        let m = SymMatrix::new(2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let e = sym_eigen(&m).unwrap();
        assert!((e.eigenvalues[0] - 3.0).abs() < 1e-14);
        assert!((e.eigenvalues[1] - 1.0).abs() < 1e-14);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let v0 = &e.eigenvectors[0];
        let v1 = &e.eigenvectors[1];
        assert!((v0[0].abs() - h).abs() < 1e-12 && (v0[0] - v0[1]).abs() < 1e-12);
        assert!((v1[0].abs() - h).abs() < 1e-12 && (v1[0] + v1[1]).abs() < 1e-12);
    }

    #[test]
    fn eigen_reconstruction_and_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [1, 2, 8, 17, 64] {
            let m = random_spd(&mut rng, n);
            let e = sym_eigen(&m).unwrap();
            let mut diff = e.reconstruct();
            diff.add_assign(&m.scaled(-1.0)).unwrap();
            assert!(diff.frobenius() <= 1e-8 * m.frobenius(), "order {n}");
            let scale = m.norm_inf().max(1.0);
            for (k, v) in e.eigenvectors.iter().enumerate() {
                assert!((norm2(v) - 1.0).abs() <= 1e-10);
                let mv = m.matvec(v).unwrap();
                let res: Vec<f64> = mv.iter().zip(v).map(|(a, b)| a - e.eigenvalues[k] * b).collect();
                assert!(norm_inf(&res) <= 1e-8 * scale);
                for w in &e.eigenvectors[k + 1..] {
                    assert!(dot(v, w).unwrap().abs() <= 1e-8);
                }
            }
            assert!(e.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn non_symmetric_rejected() {
        let err = SymMatrix::new(2, vec![1.0, 2.0, 2.1, 1.0]).unwrap_err();
        assert!(matches!(err, LinalgError::NotSymmetric { row: 0, col: 1, .. }));
    }

    #[test]
    fn spd_solve_cases() {
        let b = [1.0, -2.0, 3.0];
        assert_eq!(solve_spd(&SymMatrix::identity(3), &b).unwrap(), b.to_vec());
        let x = solve_spd(&SymMatrix::diagonal(&[2.0, 4.0]), &[2.0, 8.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn spd_solve_matches_eigen_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_spd(&mut rng, 10);
        let b: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = solve_spd(&m, &b).unwrap();
        let inv = sym_eigen(&m).unwrap().reconstruct_with(|l| 1.0 / l);
        let oracle = inv.matvec(&b).unwrap();
        let diff = sub(&x, &oracle).unwrap();
        assert!(norm_inf(&diff) <= 1e-8);
        let r = sub(&m.matvec(&x).unwrap(), &b).unwrap();
        assert!(norm_inf(&r) <= 1e-8 * norm_inf(&b));
    }

    #[test]
    fn singular_pivot_reported() {
        let m = SymMatrix::diagonal(&[1.0, 0.0, 2.0]);
        match solve_spd(&m, &[1.0, 1.0, 1.0]) {
            Err(LinalgError::NotPositiveDefinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tree_sum_is_order_fixed() {
        let vs: Vec<Vec<f64>> = (0..7).map(|i| vec![0.1 * i as f64, 1.0 / (i + 1) as f64]).collect();
        let a = tree_sum(&vs).unwrap();
        let b = tree_sum(&vs.clone()).unwrap();
        assert_eq!(a, b);
        assert!((a[0] - 2.1).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop_assert, proptest};

        proptest! {
            #[test]
            fn solve_inverts_matvec(seed in 0u64..1000, n in 1usize..12) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let m = random_spd(&mut rng, n);
                let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
                let b = m.matvec(&x).unwrap();
                let y = solve_spd(&m, &b).unwrap();
                let err = norm_inf(&sub(&x, &y).unwrap());
                prop_assert!(err <= 1e-8 * norm_inf(&x).max(1e-300));
            }
        }
    }
}
