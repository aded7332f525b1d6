//! Set alignment by reconstructing probe vectors from gallery vectors.
//!
//! Each pooled probe vector `x` is coded over the gallery dictionary `Y`
//! (columns are the pooled gallery vectors) by minimizing
//!
//! ```text
//! ‖x - Y a‖² + (λ/M) R(a)
//! ```
//!
//! with `R = ‖a‖²` (collaborative, closed form) or `R = ‖a‖₁` (sparse,
//! feature-sign search). Two sets are scored by the negated mean
//! reconstruction error of the probe vectors.

use rayon::prelude::*;

use crate::error::{PifrError, Result};
use crate::numerics::{dot, Cholesky, DenseMatrix};
use crate::setrep::{reduction_order, PooledSet, Summation};

/// Regularizer selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    /// Sparse coding, `‖a‖₁`.
    L1,
    /// Collaborative coding, `‖a‖₂²`.
    L2,
}

impl Norm {
    pub fn from_p(p: u32) -> Result<Self> {
        match p {
            1 => Ok(Norm::L1),
            2 => Ok(Norm::L2),
            other => Err(PifrError::Config(format!("p must be 1 or 2, got {other}"))),
        }
    }

    pub fn p(self) -> u32 {
        match self {
            Norm::L1 => 1,
            Norm::L2 => 2,
        }
    }

    /// `Σ|a|` for `L1`, `Σa²` for `L2`.
    pub fn penalty(self, a: &[f64]) -> f64 {
        match self {
            Norm::L1 => a.iter().map(|v| v.abs()).sum(),
            Norm::L2 => a.iter().map(|v| v * v).sum(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodingConfig {
    pub p: Norm,
    pub lambda: f64,
    /// Outer-step cap for feature-sign search.
    pub max_iter: usize,
    pub summation: Summation,
}

impl Default for CodingConfig {
    fn default() -> Self {
        Self {
            p: Norm::L2,
            lambda: 1.0,
            max_iter: 1000,
            summation: Summation::Canonical,
        }
    }
}

impl CodingConfig {
    pub fn new(p: Norm, lambda: f64) -> Self {
        Self {
            p,
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(PifrError::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.p == Norm::L1 && self.lambda == 0.0 {
            return Err(PifrError::SparseNeedsLambda(self.lambda));
        }
        Ok(())
    }

    /// Per-coefficient regularization weight `λ/M`.
    pub fn gamma(&self, m: usize) -> f64 {
        self.lambda / m as f64
    }
}

/// Reconstruction coefficients `A ∈ R^{M×N}`; column `n` codes probe vector `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct CodingMatrix {
    pub a: DenseMatrix,
    pub config: CodingConfig,
}

impl CodingMatrix {
    pub fn column(&self, n: usize) -> Vec<f64> {
        self.a.column(n)
    }
}

/// A gallery prepared for coding: vectors in reduction order, their Gram
/// matrix and, for collaborative coding, the factorized ridge system.
/// Build once and reuse against many probes.
#[derive(Debug, Clone)]
pub struct GalleryDictionary {
    /// Gallery storage index of each dictionary atom.
    order: Vec<usize>,
    atoms: Vec<Vec<f64>>,
    gram: DenseMatrix,
    ridge: Option<Cholesky>,
    config: CodingConfig,
}

impl GalleryDictionary {
    pub fn new(gallery: &PooledSet, config: CodingConfig) -> Result<Self> {
        config.validate()?;
        let order = reduction_order(gallery.vectors(), config.summation);
        let atoms: Vec<Vec<f64>> = order.iter().map(|&i| gallery.vectors()[i].clone()).collect();
        Self::from_atoms(order, atoms, config)
    }

    /// Dictionary whose atoms are used exactly in the given order.
    pub fn from_matrix(y: &DenseMatrix, config: CodingConfig) -> Result<Self> {
        config.validate()?;
        let atoms = (0..y.cols()).map(|j| y.column(j)).collect();
        Self::from_atoms((0..y.cols()).collect(), atoms, config)
    }

    fn from_atoms(order: Vec<usize>, atoms: Vec<Vec<f64>>, config: CodingConfig) -> Result<Self> {
        let m = atoms.len();
        if m == 0 {
            return Err(PifrError::Data("gallery dictionary is empty".into()));
        }
        let mut gram = DenseMatrix::zeros(m, m);
        for a in 0..m {
            for b in a..m {
                let g = dot(&atoms[a], &atoms[b]);
                gram[(a, b)] = g;
                gram[(b, a)] = g;
            }
        }
        let ridge = match config.p {
            Norm::L2 => {
                let mut sys = gram.clone();
                let gamma = config.gamma(m);
                for i in 0..m {
                    sys[(i, i)] += gamma;
                }
                Some(Cholesky::factor(&sys).map_err(|_| {
                    if config.lambda == 0.0 {
                        PifrError::SingularRidge
                    } else {
                        PifrError::NotPositiveDefinite { pivot: 0, value: gamma }
                    }
                })?)
            }
            Norm::L1 => None,
        };
        Ok(Self {
            order,
            atoms,
            gram,
            ridge,
            config,
        })
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn d(&self) -> usize {
        self.atoms[0].len()
    }

    pub fn config(&self) -> &CodingConfig {
        &self.config
    }

    pub fn gram(&self) -> &DenseMatrix {
        &self.gram
    }

    /// `Yᵀx` in dictionary order.
    fn correlate(&self, x: &[f64]) -> Vec<f64> {
        self.atoms.iter().map(|y| dot(y, x)).collect()
    }

    /// `Y a` with `a` in dictionary order.
    pub fn reconstruct(&self, a: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d()];
        for (y, &c) in self.atoms.iter().zip(a) {
            for (o, v) in out.iter_mut().zip(y) {
                *o += c * v;
            }
        }
        out
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d() {
            return Err(PifrError::Dimension(format!(
                "probe vector has length {}, dictionary atoms have length {}",
                x.len(),
                self.d()
            )));
        }
        Ok(())
    }

    /// Codes `x`; coefficients are returned in dictionary order.
    pub fn code(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let b = self.correlate(x);
        match (self.config.p, &self.ridge) {
            (Norm::L2, Some(chol)) => chol.solve(&b),
            _ => feature_sign_search(
                &self.gram,
                &b,
                self.config.gamma(self.len()),
                self.config.max_iter,
            ),
        }
    }

    /// Codes `x`; coefficients are returned in gallery storage order.
    pub fn code_storage_order(&self, x: &[f64]) -> Result<Vec<f64>> {
        let coded = self.code(x)?;
        let mut out = vec![0.0; coded.len()];
        for (k, &idx) in self.order.iter().enumerate() {
            out[idx] = coded[k];
        }
        Ok(out)
    }
}

/// `‖x - Ya‖² + γ R(a)`.
pub fn coding_objective(x: &[f64], y: &DenseMatrix, a: &[f64], gamma: f64, p: Norm) -> Result<f64> {
    let r = y.matvec(a)?;
    let err: f64 = x.iter().zip(&r).map(|(u, v)| (u - v) * (u - v)).sum();
    Ok(err + gamma * p.penalty(a))
}

/// Largest violation of the ℓ1 optimality conditions for
/// `‖x - Ya‖² + γ‖a‖₁`: `|∇_k + γ sign(a_k)|` on the support and
/// `max(0, |∇_k| - γ)` off it.
pub fn l1_kkt_residual(x: &[f64], y: &DenseMatrix, a: &[f64], gamma: f64) -> Result<f64> {
    let r = y.matvec(a)?;
    let resid: Vec<f64> = x.iter().zip(&r).map(|(u, v)| v - u).collect();
    let grad: Vec<f64> = y.tr_matvec(&resid)?.into_iter().map(|g| 2.0 * g).collect();
    Ok(kkt_from_grad(&grad, a, gamma))
}

fn kkt_from_grad(grad: &[f64], a: &[f64], gamma: f64) -> f64 {
    grad.iter()
        .zip(a)
        .map(|(&g, &ak)| {
            if ak != 0.0 {
                (g + gamma * ak.signum()).abs()
            } else {
                (g.abs() - gamma).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Ridge coding of `x` over the columns of `y`:
/// `(YᵀY + (λ/M) I) a = Yᵀx`.
pub fn solve_collaborative(x: &[f64], y: &DenseMatrix, config: &CodingConfig) -> Result<Vec<f64>> {
    let cfg = CodingConfig { p: Norm::L2, ..*config };
    GalleryDictionary::from_matrix(y, cfg)?.code(x)
}

/// ℓ1 coding of `x` over the columns of `y` by feature-sign search.
pub fn solve_sparse(x: &[f64], y: &DenseMatrix, config: &CodingConfig) -> Result<Vec<f64>> {
    let cfg = CodingConfig { p: Norm::L1, ..*config };
    GalleryDictionary::from_matrix(y, cfg)?.code(x)
}

/// `½aᵀGa - bᵀa + (γ/2)‖a‖₁`, which is half the coding objective minus a
/// constant; comparisons between candidates are all the search needs.
fn half_objective(gram: &DenseMatrix, b: &[f64], gamma: f64, a: &[f64]) -> f64 {
    let m = a.len();
    let mut quad = 0.0;
    for i in 0..m {
        if a[i] == 0.0 {
            continue;
        }
        let mut gi = 0.0;
        for j in 0..m {
            gi += gram[(i, j)] * a[j];
        }
        quad += a[i] * gi;
    }
    0.5 * quad - dot(b, a) + 0.5 * gamma * a.iter().map(|v| v.abs()).sum::<f64>()
}

/// Gradient of the smooth part, `2(Ga - b)`.
fn smooth_grad(gram: &DenseMatrix, b: &[f64], a: &[f64]) -> Vec<f64> {
    let m = a.len();
    (0..m)
        .map(|i| {
            let mut gi = -b[i];
            for j in 0..m {
                gi += gram[(i, j)] * a[j];
            }
            2.0 * gi
        })
        .collect()
}

/// Solves `G_SS z = rhs` on the active set, with a small diagonal jitter
/// if the active atoms happen to be linearly dependent.
fn solve_active(gram: &DenseMatrix, active: &[usize], rhs: &[f64]) -> Result<Vec<f64>> {
    let k = active.len();
    let mut sub = DenseMatrix::zeros(k, k);
    for (r, &i) in active.iter().enumerate() {
        for (c, &j) in active.iter().enumerate() {
            sub[(r, c)] = gram[(i, j)];
        }
    }
    let scale = (0..k).map(|i| sub[(i, i)]).fold(0.0f64, f64::max).max(1e-300);
    let mut jitter = 0.0;
    loop {
        let mut sys = sub.clone();
        for i in 0..k {
            sys[(i, i)] += jitter;
        }
        match Cholesky::factor(&sys) {
            Ok(chol) => return chol.solve(rhs),
            Err(e) if jitter > 1e-4 * scale => return Err(e),
            Err(_) => {
                jitter = if jitter == 0.0 { 1e-12 * scale } else { jitter * 100.0 };
            }
        }
    }
}

/// Feature-sign search for `min ‖x - Ya‖² + γ‖a‖₁` given `G = YᵀY` and
/// `b = Yᵀx`.
///
/// Starts from `a = 0`, repeatedly activates the zero coefficient whose
/// gradient most exceeds `γ`, solves the quadratic on the active set with
/// signs fixed, and line-searches along the segment toward that solution,
/// stopping at every point where a coefficient changes sign.
pub fn feature_sign_search(gram: &DenseMatrix, b: &[f64], gamma: f64, max_iter: usize) -> Result<Vec<f64>> {
    let m = b.len();
    if gram.rows() != m || gram.cols() != m {
        return Err(PifrError::Dimension("Gram matrix does not match correlation vector".into()));
    }
    if !(gamma > 0.0) {
        return Err(PifrError::SparseNeedsLambda(gamma));
    }
    let scale = b.iter().fold(gamma, |s, v| s.max(2.0 * v.abs()));
    let tol = 1e-12 * scale;

    let mut a = vec![0.0; m];
    let mut sign = vec![0.0f64; m];
    let mut iterations = 0;

    loop {
        let grad = smooth_grad(gram, b, &a);
        // Zero coefficient with the largest gradient magnitude.
        let pick = (0..m)
            .filter(|&i| a[i] == 0.0)
            .map(|i| (i, grad[i].abs()))
            .fold(None, |best: Option<(usize, f64)>, (i, g)| match best {
                Some((_, bg)) if bg >= g => best,
                _ => Some((i, g)),
            });
        let nonzero_ok = (0..m)
            .filter(|&i| a[i] != 0.0)
            .all(|i| (grad[i] + gamma * sign[i]).abs() <= tol);
        match pick {
            Some((i, g)) if g > gamma + tol => {
                sign[i] = -grad[i].signum();
            }
            _ if nonzero_ok => return Ok(a),
            _ => {}
        }

        // Feature-sign steps until the active coefficients are optimal.
        loop {
            iterations += 1;
            if iterations > max_iter {
                let grad = smooth_grad(gram, b, &a);
                return Err(PifrError::NoConvergence {
                    iterations: max_iter,
                    kkt_residual: kkt_from_grad(&grad, &a, gamma),
                });
            }
            let active: Vec<usize> = (0..m).filter(|&i| sign[i] != 0.0).collect();
            let rhs: Vec<f64> = active.iter().map(|&i| b[i] - 0.5 * gamma * sign[i]).collect();
            let target = solve_active(gram, &active, &rhs)?;

            let current: Vec<f64> = active.iter().map(|&i| a[i]).collect();
            // Candidate step lengths: the full step, plus every point where
            // an active coefficient crosses zero (that coefficient lands on 0).
            let mut steps: Vec<(f64, Option<usize>)> = vec![(1.0, None)];
            for (k, (c, t)) in current.iter().zip(&target).enumerate() {
                if (*c > 0.0 && *t < 0.0) || (*c < 0.0 && *t > 0.0) {
                    steps.push((c / (c - t), Some(k)));
                }
            }
            let mut best = a.clone();
            let mut best_val = f64::INFINITY;
            for &(s, zeroed) in &steps {
                let mut cand = a.clone();
                for (k, &i) in active.iter().enumerate() {
                    cand[i] = if zeroed == Some(k) {
                        0.0
                    } else {
                        current[k] + s * (target[k] - current[k])
                    };
                }
                let val = half_objective(gram, b, gamma, &cand);
                if val < best_val {
                    best_val = val;
                    best = cand;
                }
            }
            a = best;
            for i in 0..m {
                sign[i] = if a[i] == 0.0 { 0.0 } else { a[i].signum() };
            }

            let grad = smooth_grad(gram, b, &a);
            let ok = (0..m)
                .filter(|&i| a[i] != 0.0)
                .all(|i| (grad[i] + gamma * sign[i]).abs() <= tol);
            if ok {
                break;
            }
        }
    }
}

/// Codes every probe vector over the gallery. Rows of the result follow
/// the gallery's storage order, columns the probe's. Columns are solved
/// in parallel; the result does not depend on scheduling.
pub fn code_set(probe: &PooledSet, gallery: &PooledSet, config: &CodingConfig) -> Result<CodingMatrix> {
    let dict = GalleryDictionary::new(gallery, *config)?;
    code_set_with(probe, &dict)
}

pub fn code_set_with(probe: &PooledSet, dict: &GalleryDictionary) -> Result<CodingMatrix> {
    if probe.d() != dict.d() {
        return Err(PifrError::Dimension(format!(
            "probe has D = {}, gallery has D = {}",
            probe.d(),
            dict.d()
        )));
    }
    let columns: Vec<Vec<f64>> = probe
        .vectors()
        .par_iter()
        .enumerate()
        .map(|(n, x)| {
            dict.code_storage_order(x).map_err(|e| PifrError::Column {
                column: n,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    Ok(CodingMatrix {
        a: DenseMatrix::from_columns(&columns)?,
        config: dict.config,
    })
}

/// Negated mean squared reconstruction error `-(1/N)‖X̄ - ȲA‖²`.
/// The regularizer is not part of the score.
pub fn set_similarity(probe: &PooledSet, gallery: &PooledSet, config: &CodingConfig) -> Result<f64> {
    let dict = GalleryDictionary::new(gallery, *config)?;
    set_similarity_with(probe, &dict)
}

/// [`set_similarity`] against a prepared gallery.
pub fn set_similarity_with(probe: &PooledSet, dict: &GalleryDictionary) -> Result<f64> {
    if probe.d() != dict.d() {
        return Err(PifrError::Dimension(format!(
            "probe has D = {}, gallery has D = {}",
            probe.d(),
            dict.d()
        )));
    }
    let errors: Vec<f64> = probe
        .vectors()
        .par_iter()
        .enumerate()
        .map(|(n, x)| {
            let a = dict.code(x).map_err(|e| PifrError::Column {
                column: n,
                source: Box::new(e),
            })?;
            let r = dict.reconstruct(&a);
            Ok(x.iter().zip(&r).map(|(u, v)| (u - v) * (u - v)).sum())
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for n in reduction_order(probe.vectors(), dict.config.summation) {
        total += errors[n];
    }
    Ok(-total / probe.len() as f64)
}

/// Mean of the two directed similarities.
pub fn symmetric_similarity(probe: &PooledSet, gallery: &PooledSet, config: &CodingConfig) -> Result<f64> {
    let forward = set_similarity(probe, gallery, config)?;
    let backward = set_similarity(gallery, probe, config)?;
    Ok(0.5 * (forward + backward))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pooled(v: &[&[f64]]) -> PooledSet {
        PooledSet::new(v.iter().map(|x| x.to_vec()).collect()).unwrap()
    }

    fn eye2() -> DenseMatrix {
        DenseMatrix::identity(2)
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
        DenseMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn collaborative_examples() {
        let cfg0 = CodingConfig::new(Norm::L2, 0.0);
        let a = solve_collaborative(&[1.0, 0.0], &eye2(), &cfg0).unwrap();
        assert_eq!(a, vec![1.0, 0.0]);

        let cfg1 = CodingConfig::new(Norm::L2, 1.0);
        let a = solve_collaborative(&[1.0, 0.0], &eye2(), &cfg1).unwrap();
        assert!((a[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(a[1], 0.0);
        let err = coding_objective(&[1.0, 0.0], &eye2(), &a, 0.0, Norm::L2).unwrap();
        assert!((err - 1.0 / 9.0).abs() < 1e-15);

        let y = DenseMatrix::from_rows(&[vec![1.0], vec![0.0], vec![0.0]]).unwrap();
        let a = solve_collaborative(&[0.0, 2.0, -1.0], &y, &cfg1).unwrap();
        assert_eq!(a, vec![0.0]);
    }

    #[test]
    fn collaborative_singular_at_zero_lambda() {
        let y = DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            solve_collaborative(&[1.0, 0.0], &y, &CodingConfig::new(Norm::L2, 0.0)),
            Err(PifrError::SingularRidge)
        ));
        assert!(solve_collaborative(&[1.0, 0.0], &y, &CodingConfig::new(Norm::L2, 0.5)).is_ok());
    }

    #[test]
    fn collaborative_perturbation_never_improves() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let (d, m) = (rng.random_range(1..8), rng.random_range(1..8));
            let y = random_matrix(&mut rng, d, m);
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let cfg = CodingConfig::new(Norm::L2, rng.random_range(0.01..3.0));
            let a = solve_collaborative(&x, &y, &cfg).unwrap();
            let gamma = cfg.gamma(m);
            let best = coding_objective(&x, &y, &a, gamma, Norm::L2).unwrap();
            for _ in 0..10 {
                let delta: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                let r = rng.random_range(0.0..1e-2);
                let moved: Vec<f64> = a.iter().zip(&delta).map(|(u, v)| u + v * r / norm).collect();
                let val = coding_objective(&x, &y, &moved, gamma, Norm::L2).unwrap();
                assert!(val >= best - 1e-12 * best.abs().max(1.0));
            }
        }
    }

    #[test]
    fn sparse_examples() {
        let y = DenseMatrix::from_rows(&[vec![1.0]]).unwrap();
        let a = solve_sparse(&[1.0], &y, &CodingConfig::new(Norm::L1, 0.5)).unwrap();
        assert!((a[0] - 0.75).abs() < 1e-15);

        let y = DenseMatrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        let x = [0.2, -0.1];
        // |2Yᵀx| = (0.4, 0.0) <= λ/M = 0.5
        let a = solve_sparse(&x, &y, &CodingConfig::new(Norm::L1, 1.0)).unwrap();
        assert_eq!(a, vec![0.0, 0.0]);
    }

    #[test]
    fn sparse_requires_positive_lambda() {
        let y = DenseMatrix::identity(2);
        assert!(matches!(
            solve_sparse(&[1.0, 0.0], &y, &CodingConfig::new(Norm::L1, 0.0)),
            Err(PifrError::SparseNeedsLambda(_))
        ));
    }

    #[test]
    fn sparse_satisfies_kkt_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..300 {
            let m = rng.random_range(1..10);
            let d = rng.random_range(1..12);
            let y = random_matrix(&mut rng, d, m);
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let cfg = CodingConfig::new(Norm::L1, rng.random_range(0.01..4.0));
            let a = solve_sparse(&x, &y, &cfg).unwrap();
            let kkt = l1_kkt_residual(&x, &y, &a, cfg.gamma(m)).unwrap();
            assert!(kkt <= 1e-6, "kkt residual {kkt}");
        }
    }

    #[test]
    fn sparse_handles_duplicate_atoms() {
        let y = DenseMatrix::from_rows(&[vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let x = [2.0, 1.0];
        let cfg = CodingConfig::new(Norm::L1, 0.3);
        let a = solve_sparse(&x, &y, &cfg).unwrap();
        assert!(l1_kkt_residual(&x, &y, &a, cfg.gamma(3)).unwrap() <= 1e-6);
    }

    #[test]
    fn code_set_examples() {
        let gallery = pooled(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let cfg = CodingConfig::new(Norm::L2, 0.0);
        let a = code_set(&gallery, &gallery, &cfg).unwrap();
        assert_eq!(a.a, DenseMatrix::identity(2));

        let probe = pooled(&[&[0.5, 2.0]]);
        let a = code_set(&probe, &gallery, &CodingConfig::new(Norm::L2, 1.0)).unwrap();
        let direct = solve_collaborative(
            &[0.5, 2.0],
            &DenseMatrix::identity(2),
            &CodingConfig::new(Norm::L2, 1.0),
        )
        .unwrap();
        assert_eq!(a.a.cols(), 1);
        assert_eq!(a.column(0), direct);

        let swapped = gallery.permuted(&[1, 0]);
        let b = code_set(&probe, &swapped, &CodingConfig::new(Norm::L2, 1.0)).unwrap();
        assert_eq!(b.column(0), vec![a.a[(1, 0)], a.a[(0, 0)]]);
    }

    #[test]
    fn code_set_reports_failing_column() {
        let gallery = pooled(&[&[1.0, 0.0]]);
        let probe = pooled(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let cfg = CodingConfig {
            max_iter: 0,
            ..CodingConfig::new(Norm::L1, 0.1)
        };
        match code_set(&probe, &gallery, &cfg) {
            Err(PifrError::Column { column: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn similarity_examples() {
        let gallery = pooled(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let probe = pooled(&[&[1.0, 0.0]]);
        let s0 = set_similarity(&pooled(&[&[0.3, -0.7], &[2.0, 1.0]]), &gallery, &CodingConfig::new(Norm::L2, 0.0))
            .unwrap();
        assert!(s0.abs() < 1e-15);
        let s = set_similarity(&probe, &gallery, &CodingConfig::new(Norm::L2, 1.0)).unwrap();
        assert!((s + 1.0 / 9.0).abs() < 1e-15);

        let cfg0 = CodingConfig::new(Norm::L2, 0.0);
        assert!(symmetric_similarity(&gallery, &gallery, &cfg0).unwrap().abs() < 1e-15);
        let single = pooled(&[&[0.4, 0.1]]);
        let cfg = CodingConfig::new(Norm::L2, 1.0);
        assert_eq!(
            symmetric_similarity(&single, &single, &cfg).unwrap(),
            set_similarity(&single, &single, &cfg).unwrap()
        );
    }

    #[test]
    fn similarity_is_permutation_invariant_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let d = rng.random_range(2..8);
            let n = rng.random_range(1..7);
            let m = rng.random_range(1..7);
            let mk = |rng: &mut ChaCha8Rng, k| {
                PooledSet::new((0..k).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
                    .unwrap()
            };
            let (p, g) = (mk(&mut rng, n), mk(&mut rng, m));
            for norm in [Norm::L1, Norm::L2] {
                let cfg = CodingConfig::new(norm, 0.7);
                let base = set_similarity(&p, &g, &cfg).unwrap();
                let mut po: Vec<usize> = (0..n).collect();
                let mut go: Vec<usize> = (0..m).collect();
                po.shuffle(&mut rng);
                go.shuffle(&mut rng);
                let shuffled = set_similarity(&p.permuted(&po), &g.permuted(&go), &cfg).unwrap();
                assert_eq!(base.to_bits(), shuffled.to_bits());
                assert_eq!(
                    symmetric_similarity(&p, &g, &cfg).unwrap(),
                    symmetric_similarity(&g, &p, &cfg).unwrap()
                );
            }
        }
    }

    #[test]
    fn enlarging_gallery_never_lowers_unregularized_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let cfg = CodingConfig::new(Norm::L2, 0.0);
        for _ in 0..100 {
            let d = rng.random_range(3..10);
            let m = rng.random_range(1..d);
            let vecs: Vec<Vec<f64>> = (0..=m).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let probe = PooledSet::new((0..3).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()).unwrap();
            let small = PooledSet::new(vecs[..m].to_vec()).unwrap();
            let large = PooledSet::new(vecs.clone()).unwrap();
            let s_small = set_similarity(&probe, &small, &cfg).unwrap();
            let s_large = set_similarity(&probe, &large, &cfg).unwrap();
            assert!(s_large >= s_small - 1e-10);
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = pooled(&[&[1.0, 0.0]]);
        let g = pooled(&[&[1.0]]);
        assert!(matches!(
            set_similarity(&p, &g, &CodingConfig::default()),
            Err(PifrError::Dimension(_))
        ));
    }
}
