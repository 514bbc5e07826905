//! Gaussians on product manifolds with covariances in tangent coordinates at
//! the mean.

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::manifold::{symmetrize, Factor, FramePolicy, ManifoldDescriptor};
use crate::quat;

pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Regularization {
    None,
    /// `Σ + εI`.
    DiagonalFloor { eps: f64 },
    /// Orientation factors (S², S³) are reduced to their diagonal and
    /// decoupled from every other coordinate; Euclidean and circle factors
    /// keep their mutual correlations. Eigenvalues are then floored at `eps`.
    BlockDecorrelate { eps: f64 },
    /// Each orientation factor's own block is reduced to its diagonal;
    /// correlations with other factors are kept. Eigenvalues are then
    /// floored at `eps`.
    SphereDiagonal { eps: f64 },
}

impl Default for Regularization {
    fn default() -> Self {
        Regularization::BlockDecorrelate { eps: DEFAULT_EPS }
    }
}

/// Applies a covariance regularization policy.
pub fn regularize(cov: &DMatrix<f64>, manifold: &ManifoldDescriptor, policy: Regularization) -> DMatrix<f64> {
    match policy {
        Regularization::None => symmetrize(cov),
        Regularization::DiagonalFloor { eps } => {
            let n = cov.nrows();
            symmetrize(cov) + DMatrix::identity(n, n) * eps
        }
        Regularization::BlockDecorrelate { eps } => {
            let mut out = symmetrize(cov);
            for (i, f) in manifold.factors().iter().enumerate() {
                if !f.is_sphere() {
                    continue;
                }
                for r in manifold.tangent_range(i) {
                    for c in 0..out.ncols() {
                        if c != r {
                            out[(r, c)] = 0.0;
                            out[(c, r)] = 0.0;
                        }
                    }
                }
            }
            floor_eigenvalues(&out, eps)
        }
        Regularization::SphereDiagonal { eps } => {
            let mut out = symmetrize(cov);
            for (i, f) in manifold.factors().iter().enumerate() {
                if !f.is_sphere() {
                    continue;
                }
                let r = manifold.tangent_range(i);
                for a in r.clone() {
                    for b in r.clone() {
                        if a != b {
                            out[(a, b)] = 0.0;
                        }
                    }
                }
            }
            floor_eigenvalues(&out, eps)
        }
    }
}

/// Raises all eigenvalues below `eps` to `eps`; matrices that already
/// satisfy the floor are returned unchanged.
pub fn floor_eigenvalues(cov: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    let eig = cov.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= eps) {
        return cov.clone();
    }
    let lam = eig.eigenvalues.map(|l| l.max(eps));
    let v = &eig.eigenvectors;
    symmetrize(&(v * DMatrix::from_diagonal(&lam) * v.transpose()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RiemannianGaussian {
    pub manifold: ManifoldDescriptor,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// A Gaussian with its Cholesky factor cached for repeated density
/// evaluation.
#[derive(Clone, Debug)]
pub struct Density {
    manifold: ManifoldDescriptor,
    pub(crate) mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

impl Density {
    pub fn log_pdf(&self, p: &DVector<f64>) -> Result<f64> {
        let v = self.manifold.log_map_lenient(&self.mean, p)?;
        Ok(self.log_pdf_tangent(&v))
    }

    /// Log-density of a tangent deviation already expressed at the mean.
    pub fn log_pdf_tangent(&self, v: &DVector<f64>) -> f64 {
        let z = self.chol.l().solve_lower_triangular(v).expect("triangular factor is nonsingular");
        self.log_norm - 0.5 * z.norm_squared()
    }
}

fn cholesky(cov: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(cov.clone()).ok_or_else(|| Error::Numerical(format!("{what} covariance is not positive definite")))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MleOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for MleOptions {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: 20 }
    }
}

/// Weighted Karcher mean by Gauss-Newton iteration in the tangent space of
/// the current estimate.
pub fn mle_mean(
    manifold: &ManifoldDescriptor,
    points: &[DVector<f64>],
    weights: &[f64],
    init: &DVector<f64>,
    opts: MleOptions,
) -> Result<DVector<f64>> {
    if points.len() != weights.len() {
        return Err(Error::Dimension {
            context: "mle weights",
            expected: points.len(),
            got: weights.len(),
        });
    }
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(Error::arg("mle weights must be finite and nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::arg("mle weights must have a positive sum"));
    }
    let mut x = init.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..opts.max_iter {
        let mut delta = DVector::zeros(manifold.tangent_dim());
        for (p, &w) in points.iter().zip(weights) {
            if w > 0.0 {
                delta.axpy(w / total, &manifold.log_map_lenient(&x, p)?, 1.0);
            }
        }
        residual = delta.norm();
        if residual <= opts.tol {
            return Ok(x);
        }
        x = manifold.exp_map(&x, &delta)?;
    }
    Err(Error::NonConvergence {
        what: "weighted mean",
        iterations: opts.max_iter,
        residual,
        last: Box::new(x),
    })
}

/// Weighted mean that accepts the last iterate when the iteration budget is
/// exhausted.
pub fn mle_mean_lenient(
    manifold: &ManifoldDescriptor,
    points: &[DVector<f64>],
    weights: &[f64],
    init: &DVector<f64>,
    opts: MleOptions,
) -> Result<DVector<f64>> {
    match mle_mean(manifold, points, weights, init, opts) {
        Err(Error::NonConvergence { last, .. }) => Ok(*last),
        r => r,
    }
}

/// Weighted covariance of tangent deviations at `mean`.
pub fn weighted_tangent_cov(
    manifold: &ManifoldDescriptor,
    points: &[DVector<f64>],
    weights: &[f64],
    mean: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let n = manifold.tangent_dim();
    let total: f64 = weights.iter().sum();
    let mut cov = DMatrix::zeros(n, n);
    for (p, &w) in points.iter().zip(weights) {
        if w > 0.0 {
            let v = manifold.log_map_lenient(mean, p)?;
            cov.ger(w / total, &v, &v, 1.0);
        }
    }
    Ok(symmetrize(&cov))
}

/// Result of conditioning a Gaussian on some of its factors.
#[derive(Clone, Debug)]
pub struct Conditional {
    pub gaussian: RiemannianGaussian,
    /// True when the input covariance block had to be regularized before
    /// inversion.
    pub regularized: bool,
    pub iterations: usize,
}

pub const CONDITION_MAX_ITER: usize = 10;
pub const CONDITION_TOL: f64 = 1e-9;
pub const PRODUCT_MAX_ITER: usize = 100;
pub const PRODUCT_TOL: f64 = 1e-9;
const PRODUCT_BACKTRACK: usize = 30;
/// Residual below which an iterate that no step can improve is accepted.
const PRODUCT_STALL_TOL: f64 = 1e-6;

impl RiemannianGaussian {
    pub fn new(manifold: ManifoldDescriptor, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        manifold.check_point(&mean, 1e-6)?;
        let n = manifold.tangent_dim();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::Dimension {
                context: "gaussian covariance",
                expected: n,
                got: cov.nrows(),
            });
        }
        Ok(Self { manifold, mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.manifold.tangent_dim()
    }

    pub fn density(&self) -> Result<Density> {
        let chol = cholesky(&self.cov, "gaussian")?;
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let n = self.dim() as f64;
        Ok(Density {
            manifold: self.manifold.clone(),
            mean: self.mean.clone(),
            chol,
            log_norm: -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + log_det),
        })
    }

    pub fn log_pdf(&self, p: &DVector<f64>) -> Result<f64> {
        self.density()?.log_pdf(p)
    }

    /// Marginal over a subset of factors (in the given order).
    pub fn marginal(&self, factors: &[usize]) -> Result<RiemannianGaussian> {
        let sub = self.manifold.submanifold(factors)?;
        let idx = self.manifold.tangent_indices(factors);
        let mean = self.manifold.extract(&self.mean, factors);
        let cov = self.cov.select_rows(&idx).select_columns(&idx);
        Ok(RiemannianGaussian { manifold: sub, mean, cov })
    }

    /// Negates S³ mean factors whose dot product with the matching factor of
    /// `reference` is negative, carrying the covariance along.
    pub fn align_quaternions(&self, reference: &DVector<f64>) -> Result<RiemannianGaussian> {
        let mut out = self.clone();
        for (i, f) in self.manifold.factors().iter().enumerate() {
            if *f != Factor::Quaternion {
                continue;
            }
            let r = self.manifold.ambient_range(i);
            if quat::dot(&out.mean.as_slice()[r.clone()], &reference.as_slice()[r]) < 0.0 {
                let (m, j) = self.manifold.flip_quaternion(&out.mean, i)?;
                out.cov = symmetrize(&(&j * &out.cov * j.transpose()));
                out.mean = m;
            }
        }
        Ok(out)
    }

    /// Conditions on the factors `inputs`, given their ambient coordinates
    /// `value` (concatenated in the order of `inputs`). The result lives on
    /// the remaining factors in their original order.
    pub fn condition(&self, inputs: &[usize], value: &DVector<f64>) -> Result<Conditional> {
        let m = &self.manifold;
        m.check_indices(inputs)?;
        let outputs: Vec<usize> = (0..m.num_factors()).filter(|i| !inputs.contains(i)).collect();
        if outputs.is_empty() {
            return Err(Error::arg("conditioning on every factor leaves nothing to predict"));
        }
        let in_sub = m.submanifold(inputs)?;
        if value.len() != in_sub.ambient_dim() {
            return Err(Error::Dimension {
                context: "conditioning value",
                expected: in_sub.ambient_dim(),
                got: value.len(),
            });
        }
        let in_idx = m.tangent_indices(inputs);
        let out_idx = m.tangent_indices(&outputs);
        let out_sub = m.submanifold(&outputs)?;

        // assemble the full point: inputs from `value`, outputs from the mean
        let mut x = self.mean.clone();
        let mut off = 0;
        for &i in inputs {
            let r = m.ambient_range(i);
            let len = r.len();
            let mut v = value.rows(off, len).into_owned();
            if m.factors()[i] == Factor::Quaternion && quat::dot(v.as_slice(), &self.mean.as_slice()[r.clone()]) < 0.0 {
                v.neg_mut();
            }
            x.rows_mut(r.start, len).copy_from(&v);
            off += len;
        }

        let mut regularized = false;
        let mut iterations = 0;
        let mut cov_x;
        loop {
            let delta = m.log_map(&x, &self.mean)?;
            cov_x = m.parallel_transport(&self.cov, &self.mean, &x)?;
            let s_ii = cov_x.select_rows(&in_idx).select_columns(&in_idx);
            let s_oi = cov_x.select_rows(&out_idx).select_columns(&in_idx);
            let (chol, reg) = robust_cholesky(&s_ii);
            regularized |= reg;
            let d_i = delta.select_rows(&in_idx);
            let d_o = delta.select_rows(&out_idx);
            let step = d_o - &s_oi * chol.solve(&d_i);
            iterations += 1;
            let out_point = m.extract(&x, &outputs);
            let new_out = out_sub.exp_map(&out_point, &step)?;
            let mut off = 0;
            for &i in &outputs {
                let r = m.ambient_range(i);
                x.rows_mut(r.start, r.len()).copy_from(&new_out.rows(off, r.len()));
                off += r.len();
            }
            if step.norm() <= CONDITION_TOL || iterations >= CONDITION_MAX_ITER {
                cov_x = m.parallel_transport(&self.cov, &self.mean, &x)?;
                break;
            }
        }
        let s_ii = cov_x.select_rows(&in_idx).select_columns(&in_idx);
        let s_oi = cov_x.select_rows(&out_idx).select_columns(&in_idx);
        let s_oo = cov_x.select_rows(&out_idx).select_columns(&out_idx);
        let (chol, reg) = robust_cholesky(&s_ii);
        regularized |= reg;
        if regularized {
            warn!("input covariance block is singular; regularized before conditioning");
        }
        let cov = symmetrize(&(s_oo - &s_oi * chol.solve(&s_oi.transpose())));
        Ok(Conditional {
            gaussian: RiemannianGaussian {
                manifold: out_sub,
                mean: m.extract(&x, &outputs),
                cov,
            },
            regularized,
            iterations,
        })
    }

    /// Pushes the Gaussian through the rigid frame `(rot, trans)` and applies
    /// a post-transport regularization.
    pub fn transform(
        &self,
        rot: &[f64],
        trans: &Vector3<f64>,
        policies: &[FramePolicy],
        reg: Regularization,
    ) -> Result<RiemannianGaussian> {
        let (mean, jac) = self.manifold.frame_jacobian(&self.mean, rot, trans, policies)?;
        let cov = &jac * &self.cov * jac.transpose();
        Ok(RiemannianGaussian {
            manifold: self.manifold.clone(),
            mean,
            cov: regularize(&cov, &self.manifold, reg),
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, chol: &Cholesky<f64, Dyn>, rng: &mut R) -> Result<DVector<f64>> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        self.manifold.exp_map(&self.mean, &(chol.l_dirty().lower_triangle() * z))
    }
}

/// Cholesky of an SPD block, adding a growing ridge when it fails.
fn robust_cholesky(m: &DMatrix<f64>) -> (Cholesky<f64, Dyn>, bool) {
    if let Some(c) = Cholesky::new(m.clone()) {
        return (c, false);
    }
    let n = m.nrows();
    let scale = m.diagonal().abs().max().max(1.0);
    let mut ridge = DEFAULT_EPS * scale;
    loop {
        if let Some(c) = Cholesky::new(m + DMatrix::identity(n, n) * ridge) {
            return (c, true);
        }
        ridge *= 10.0;
    }
}

/// Product of Gaussians on a common manifold, solved by Gauss-Newton in the
/// tangent space of the current estimate.
pub fn product(gs: &[RiemannianGaussian]) -> Result<RiemannianGaussian> {
    let (g, fused) = product_iterate(gs)?;
    match fused {
        Fused::Converged => Ok(g),
        Fused::Stalled { iterations, residual } => Err(Error::NonConvergence {
            what: "gaussian product",
            iterations,
            residual,
            last: Box::new(g.mean),
        }),
    }
}

/// Outcome of the product iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fused {
    Converged,
    Stalled { iterations: usize, residual: f64 },
}

/// Product that returns the iterate with the smallest fixed-point residual
/// when the iteration does not converge, together with that residual.
pub fn product_best_effort(gs: &[RiemannianGaussian]) -> Result<(RiemannianGaussian, Fused)> {
    product_iterate(gs)
}

fn product_iterate(gs: &[RiemannianGaussian]) -> Result<(RiemannianGaussian, Fused)> {
    let first = gs.first().ok_or_else(|| Error::arg("product of zero Gaussians"))?;
    if gs.len() == 1 {
        return Ok((first.clone(), Fused::Converged));
    }
    let m = &first.manifold;
    if gs.iter().any(|g| &g.manifold != m) {
        return Err(Error::arg("product operands live on different manifolds"));
    }
    let gs: Vec<RiemannianGaussian> = gs
        .iter()
        .map(|g| g.align_quaternions(&first.mean))
        .collect::<Result<_>>()?;
    let n = m.tangent_dim();
    // Fixed-point iteration on the precision-weighted tangent mean, started
    // at the most concentrated operand; steps are halved until the
    // fixed-point residual shrinks.
    let newton = |x: &DVector<f64>| -> Result<(Cholesky<f64, Dyn>, DVector<f64>)> {
        let mut lambda = DMatrix::zeros(n, n);
        let mut eta = DVector::zeros(n);
        for g in &gs {
            let d = m.log_map(x, &g.mean)?;
            let c = m.parallel_transport(&g.cov, &g.mean, x)?;
            let prec = cholesky(&c, "product operand")?.inverse();
            eta += &prec * d;
            lambda += prec;
        }
        let chol = cholesky(&symmetrize(&lambda), "product precision")?;
        let step = chol.solve(&eta);
        Ok((chol, step))
    };
    let start = gs
        .iter()
        .map(|g| cholesky(&g.cov, "product operand").map(|c| c.ln_determinant()))
        .collect::<Result<Vec<_>>>()?
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i);
    let mut x = gs[start].mean.clone();
    let (mut chol, mut step) = newton(&x)?;
    let mut residual = step.norm();
    let mut iterations = PRODUCT_MAX_ITER;
    for iter in 0..PRODUCT_MAX_ITER {
        if residual <= PRODUCT_TOL || m.is_euclidean() && iter > 0 {
            return Ok((
                RiemannianGaussian {
                    manifold: m.clone(),
                    mean: x,
                    cov: symmetrize(&chol.inverse()),
                },
                Fused::Converged,
            ));
        }
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..PRODUCT_BACKTRACK {
            let trial = m.exp_map(&x, &(&step * scale))?;
            if let Ok((c, s)) = newton(&trial) {
                if s.norm() < residual {
                    accepted = Some((trial, c, s));
                    break;
                }
            }
            scale *= 0.5;
        }
        match accepted {
            Some((trial, c, s)) => {
                x = trial;
                chol = c;
                residual = s.norm();
                step = s;
            }
            None if residual <= PRODUCT_STALL_TOL => {
                return Ok((
                    RiemannianGaussian {
                        manifold: m.clone(),
                        mean: x,
                        cov: symmetrize(&chol.inverse()),
                    },
                    Fused::Converged,
                ));
            }
            None => {
                iterations = iter + 1;
                break;
            }
        }
    }
    Ok((
        RiemannianGaussian {
            manifold: m.clone(),
            mean: x,
            cov: symmetrize(&chol.inverse()),
        },
        Fused::Stalled { iterations, residual },
    ))
}

pub const KL_DEFAULT_SAMPLES: usize = 10_000;
pub const KL_REDRAW_LIMIT: usize = 100;
const KL_CHUNK: usize = 512;

/// Monte-Carlo estimate of KL(p ‖ q) and its standard error.
///
/// Samples are drawn in fixed-size chunks, each from its own seeded stream,
/// so the estimate is identical in parallel and sequential execution.
pub fn kl_monte_carlo_with_se(
    p: &RiemannianGaussian,
    q: &RiemannianGaussian,
    n: usize,
    seed: u64,
    exec: Execution,
) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::arg("kl_monte_carlo needs at least one sample"));
    }
    if p.manifold != q.manifold {
        return Err(Error::arg("KL operands live on different manifolds"));
    }
    let pd = p.density()?;
    let q = q.align_quaternions(&p.mean)?;
    let qd = q.density()?;
    let chol = cholesky(&p.cov, "KL sampling")?;
    let chunks = n.div_ceil(KL_CHUNK);
    let partial = exec::map_indices(exec, chunks, |c| -> Result<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        let count = KL_CHUNK.min(n - c * KL_CHUNK);
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..count {
            let mut tries = 0;
            let d = loop {
                let x = p.sample(&chol, &mut rng)?;
                match (pd.log_pdf(&x), qd.log_pdf(&x)) {
                    (Ok(a), Ok(b)) => break a - b,
                    (Err(Error::Singularity(_)), _) | (_, Err(Error::Singularity(_))) if tries < KL_REDRAW_LIMIT => {
                        tries += 1;
                    }
                    (Err(e), _) | (_, Err(e)) => return Err(e),
                }
            };
            s += d;
            s2 += d * d;
        }
        Ok((s, s2))
    });
    let (mut s, mut s2) = (0.0, 0.0);
    for r in partial {
        let (a, b) = r?;
        s += a;
        s2 += b;
    }
    let nf = n as f64;
    let mean = s / nf;
    let var = (s2 / nf - mean * mean).max(0.0);
    Ok((mean, (var / nf).sqrt()))
}

pub fn kl_monte_carlo(p: &RiemannianGaussian, q: &RiemannianGaussian, n: usize, seed: u64) -> Result<f64> {
    kl_monte_carlo_with_se(p, q, n, seed, Execution::default()).map(|r| r.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn euclid(n: usize) -> ManifoldDescriptor {
        ManifoldDescriptor::euclidean(n)
    }

    fn s3() -> ManifoldDescriptor {
        ManifoldDescriptor::new(vec![Factor::Quaternion]).unwrap()
    }

    #[test]
    fn standard_normal_mode() {
        let g = RiemannianGaussian::new(euclid(1), dvector![0.0], dmatrix![1.0]).unwrap();
        let lp = g.log_pdf(&dvector![0.0]).unwrap();
        assert!((lp + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn log_pdf_matches_closed_form() {
        let cov = dmatrix![2.0, 0.3, -0.1; 0.3, 1.0, 0.2; -0.1, 0.2, 0.5];
        let mu = dvector![0.5, -1.0, 2.0];
        let g = RiemannianGaussian::new(euclid(3), mu.clone(), cov.clone()).unwrap();
        let x = dvector![1.0, 0.0, 1.5];
        let d = &x - &mu;
        let inv = cov.clone().try_inverse().unwrap();
        let expected = -0.5 * (d.dot(&(&inv * &d)) + cov.determinant().ln() + 3.0 * (2.0 * std::f64::consts::PI).ln());
        assert!((g.log_pdf(&x).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn mle_identical_points() {
        let m = s3();
        let q = quat::from_axis_angle(&Vector3::new(1.0, 0.0, 1.0), 0.8);
        let p = DVector::from_column_slice(&q);
        let r = mle_mean(&m, &[p.clone(), p.clone()], &[1.0, 2.0], &p, MleOptions::default()).unwrap();
        assert_eq!(r, p);
    }

    #[test]
    fn mle_euclidean_is_weighted_average() {
        let m = euclid(2);
        let pts = [dvector![0.0, 0.0], dvector![3.0, 6.0]];
        let r = mle_mean(&m, &pts, &[2.0, 1.0], &dvector![10.0, 10.0], MleOptions::default()).unwrap();
        assert!((r - dvector![1.0, 2.0]).norm() < 1e-12);
    }

    #[test]
    fn mle_s3_midpoint_is_slerp() {
        let m = s3();
        let a = quat::from_axis_angle(&Vector3::new(0.2, 1.0, 0.0), 0.4);
        let b = quat::from_axis_angle(&Vector3::new(1.0, -0.3, 0.5), 1.7);
        let pts = [DVector::from_column_slice(&a), DVector::from_column_slice(&b)];
        let r = mle_mean(&m, &pts, &[1.0, 1.0], &m.origin(), MleOptions::default()).unwrap();
        let mid = quat::slerp(&a, &b, 0.5);
        assert!((r - DVector::from_column_slice(&mid)).norm() < 1e-9);
    }

    #[test]
    fn mle_non_convergence_reports_last_iterate() {
        let m = s3();
        let a = quat::from_axis_angle(&Vector3::x(), 2.0);
        let b = quat::from_axis_angle(&Vector3::y(), 2.5);
        let pts = [DVector::from_column_slice(&a), DVector::from_column_slice(&b)];
        let err = mle_mean(&m, &pts, &[1.0, 1.0], &m.origin(), MleOptions { tol: 1e-9, max_iter: 1 }).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { .. }));
    }

    #[test]
    fn condition_2d_closed_form() {
        let g = RiemannianGaussian::new(
            ManifoldDescriptor::new(vec![Factor::Euclid(1), Factor::Euclid(1)]).unwrap(),
            dvector![0.0, 0.0],
            dmatrix![1.0, 0.5; 0.5, 1.0],
        )
        .unwrap();
        let c = g.condition(&[0], &dvector![1.0]).unwrap();
        assert!((c.gaussian.mean[0] - 0.5).abs() < 1e-15);
        assert!((c.gaussian.cov[(0, 0)] - 0.75).abs() < 1e-15);
        assert!(!c.regularized);
    }

    #[test]
    fn condition_at_input_mean_gives_output_mean() {
        let m = ManifoldDescriptor::new(vec![Factor::Euclid(1), Factor::Euclid(3), Factor::Quaternion]).unwrap();
        let q = quat::from_axis_angle(&Vector3::new(0.1, 0.7, -0.2), 1.1);
        let mean = dvector![0.4, 0.1, 0.2, 0.3, q[0], q[1], q[2], q[3]];
        let mut cov = DMatrix::identity(7, 7) * 0.1;
        cov[(0, 1)] = 0.02;
        cov[(1, 0)] = 0.02;
        cov[(0, 5)] = 0.03;
        cov[(5, 0)] = 0.03;
        let g = RiemannianGaussian::new(m, mean.clone(), cov).unwrap();
        let c = g.condition(&[0], &dvector![0.4]).unwrap();
        assert!((c.gaussian.mean - mean.rows(1, 7)).norm() < 1e-12);
    }

    #[test]
    fn condition_independent_blocks() {
        let m = ManifoldDescriptor::new(vec![Factor::Euclid(1), Factor::Quaternion]).unwrap();
        let q = quat::from_axis_angle(&Vector3::z(), 0.5);
        let g = RiemannianGaussian::new(
            m,
            dvector![0.0, q[0], q[1], q[2], q[3]],
            DMatrix::from_diagonal(&dvector![2.0, 0.1, 0.2, 0.3]),
        )
        .unwrap();
        let c = g.condition(&[0], &dvector![5.0]).unwrap();
        assert!((c.gaussian.mean - DVector::from_column_slice(&q)).norm() < 1e-14);
        assert!((c.gaussian.cov - DMatrix::from_diagonal(&dvector![0.1, 0.2, 0.3])).norm() < 1e-14);
    }

    #[test]
    fn condition_on_quaternion_input() {
        // output ℝ¹ linearly coupled to the rotation tangent: the conditional
        // mean must follow the closed form evaluated at Log_μ(value)
        let m = ManifoldDescriptor::new(vec![Factor::Quaternion, Factor::Euclid(1)]).unwrap();
        let mut cov = DMatrix::from_diagonal(&dvector![0.2, 0.2, 0.2, 1.0]);
        cov[(2, 3)] = 0.1;
        cov[(3, 2)] = 0.1;
        let g = RiemannianGaussian::new(m, dvector![1.0, 0.0, 0.0, 0.0, 3.0], cov).unwrap();
        let v = quat::from_axis_angle(&Vector3::z(), 0.6);
        let c = g.condition(&[0], &DVector::from_column_slice(&v)).unwrap();
        assert!((c.gaussian.mean[0] - (3.0 + 0.1 / 0.2 * 0.3)).abs() < 1e-12);
        // negated input quaternion gives the same answer
        let c2 = g.condition(&[0], &DVector::from_column_slice(&quat::neg(&v))).unwrap();
        assert!((c2.gaussian.mean[0] - c.gaussian.mean[0]).abs() < 1e-12);
    }

    #[test]
    fn singular_input_block_is_regularized() {
        let m = ManifoldDescriptor::new(vec![Factor::Euclid(2), Factor::Euclid(1)]).unwrap();
        let cov = dmatrix![1.0, 1.0, 0.0; 1.0, 1.0, 0.0; 0.0, 0.0, 1.0];
        let g = RiemannianGaussian::new(m, dvector![0.0, 0.0, 0.0], cov).unwrap();
        let c = g.condition(&[0], &dvector![0.1, 0.1]).unwrap();
        assert!(c.regularized);
        assert!(c.gaussian.mean[0].is_finite());
    }

    #[test]
    fn transform_examples() {
        let m = ManifoldDescriptor::new(vec![Factor::Euclid(3), Factor::Quaternion]).unwrap();
        let q = quat::from_axis_angle(&Vector3::new(1.0, 2.0, 3.0), 0.9);
        let g = RiemannianGaussian::new(
            m,
            dvector![0.1, 0.2, 0.3, q[0], q[1], q[2], q[3]],
            DMatrix::from_diagonal(&dvector![0.01, 0.02, 0.03, 0.1, 0.2, 0.3]),
        )
        .unwrap();
        let pol = [FramePolicy::Full, FramePolicy::Full];
        let id = g.transform(&quat::IDENTITY, &Vector3::zeros(), &pol, Regularization::default()).unwrap();
        assert_eq!(id.mean, g.mean);
        assert!((id.cov - &g.cov).norm() < 1e-15);

        let qf = quat::from_axis_angle(&Vector3::new(-1.0, 0.5, 0.2), 2.2);
        let b = Vector3::new(1.0, -2.0, 0.5);
        let t = g.transform(&qf, &b, &pol, Regularization::None).unwrap();
        let expected_pos = quat::rotation_matrix(&qf) * Vector3::new(0.1, 0.2, 0.3) + b;
        assert!((t.mean.rows(0, 3) - expected_pos).norm() < 1e-14);
        let expected_q = quat::mul(&qf, &q);
        assert!((t.mean.rows(3, 4) - DVector::from_column_slice(&expected_q)).norm() < 1e-14);
    }

    #[test]
    fn transform_introduces_rotation_cross_terms_and_regularization_removes_them() {
        let m = ManifoldDescriptor::new(vec![Factor::Euclid(1), Factor::Euclid(3), Factor::Quaternion]).unwrap();
        let q = quat::from_axis_angle(&Vector3::new(0.3, 0.2, 1.0), 0.7);
        let g = RiemannianGaussian::new(
            m,
            dvector![0.5, 0.0, 0.0, 0.0, q[0], q[1], q[2], q[3]],
            DMatrix::from_diagonal(&dvector![0.05, 0.01, 0.01, 0.01, 0.01, 0.09, 0.04]),
        )
        .unwrap();
        let pol = [FramePolicy::Identity, FramePolicy::Full, FramePolicy::Full];
        let qf = quat::from_axis_angle(&Vector3::new(0.0, 0.3, 1.0), 1.2);
        let raw = g.transform(&qf, &Vector3::zeros(), &pol, Regularization::None).unwrap();
        let corr = raw.cov[(4, 5)] / (raw.cov[(4, 4)] * raw.cov[(5, 5)]).sqrt();
        assert!(corr.abs() > 0.05);
        let fixed = g.transform(&qf, &Vector3::zeros(), &pol, Regularization::default()).unwrap();
        assert_eq!(fixed.cov[(4, 5)], 0.0);
        assert_eq!(fixed.cov[(3, 4)], 0.0);
    }

    #[test]
    fn regularization_keeps_euclidean_block() {
        let m = ManifoldDescriptor::new(vec![Factor::Euclid(2), Factor::Sphere2]).unwrap();
        let cov = dmatrix![
            1.0, 0.4, 0.0, 0.0;
            0.4, 1.0, 0.0, 0.0;
            0.0, 0.0, 0.5, 0.0;
            0.0, 0.0, 0.0, 0.3
        ];
        assert_eq!(regularize(&cov, &m, Regularization::default()), cov);
        let mut bad = cov.clone();
        bad[(2, 3)] = 0.2;
        bad[(3, 2)] = 0.2;
        bad[(1, 2)] = 0.1;
        bad[(2, 1)] = 0.1;
        assert_eq!(regularize(&bad, &m, Regularization::default()), cov);
    }

    #[test]
    fn product_examples() {
        let e1 = euclid(1);
        let a = RiemannianGaussian::new(e1.clone(), dvector![0.0], dmatrix![1.0]).unwrap();
        let b = RiemannianGaussian::new(e1, dvector![2.0], dmatrix![1.0]).unwrap();
        let p = product(&[a.clone(), b]).unwrap();
        assert!((p.mean[0] - 1.0).abs() < 1e-15 && (p.cov[(0, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(product(std::slice::from_ref(&a)).unwrap(), a);

        let m = s3();
        let q = quat::from_axis_angle(&Vector3::new(0.5, 0.1, -0.3), 1.0);
        let g = RiemannianGaussian::new(m, DVector::from_column_slice(&q), DMatrix::from_diagonal(&dvector![0.1, 0.2, 0.3])).unwrap();
        let p = product(&[g.clone(), g.clone()]).unwrap();
        assert!((p.mean - &g.mean).norm() < 1e-12);
        assert!((p.cov - &g.cov * 0.5).norm() < 1e-12);
    }

    #[test]
    fn product_of_quaternions_ignores_sign() {
        let m = s3();
        let a = quat::from_axis_angle(&Vector3::z(), 0.2);
        let b = quat::from_axis_angle(&Vector3::z(), 0.6);
        let cov = DMatrix::identity(3, 3) * 0.1;
        let ga = RiemannianGaussian::new(m.clone(), DVector::from_column_slice(&a), cov.clone()).unwrap();
        let gb = RiemannianGaussian::new(m.clone(), DVector::from_column_slice(&quat::neg(&b)), cov).unwrap();
        let p = product(&[ga, gb]).unwrap();
        let expected = quat::from_axis_angle(&Vector3::z(), 0.4);
        assert!((p.mean - DVector::from_column_slice(&expected)).norm() < 1e-9);
    }

    #[test]
    fn kl_self_is_zero_within_noise() {
        let m = ManifoldDescriptor::new(vec![Factor::Euclid(3), Factor::Quaternion]).unwrap();
        let g = RiemannianGaussian::new(
            m.clone(),
            dvector![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
            DMatrix::identity(6, 6) * 0.05,
        )
        .unwrap();
        let (kl, se) = kl_monte_carlo_with_se(&g, &g, 2000, 7, Execution::Sequential).unwrap();
        assert!(kl.abs() <= 3.0 * se + 1e-12);
    }

    #[test]
    fn kl_is_deterministic_and_mode_independent() {
        let e = euclid(2);
        let p = RiemannianGaussian::new(e.clone(), dvector![0.0, 0.0], DMatrix::identity(2, 2)).unwrap();
        let q = RiemannianGaussian::new(e, dvector![1.0, 0.0], DMatrix::identity(2, 2) * 2.0).unwrap();
        let a = kl_monte_carlo_with_se(&p, &q, 3000, 11, Execution::Parallel).unwrap();
        let b = kl_monte_carlo_with_se(&p, &q, 3000, 11, Execution::Sequential).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kl_grows_with_mean_offset() {
        let e = euclid(3);
        let p = RiemannianGaussian::new(e.clone(), DVector::zeros(3), DMatrix::identity(3, 3)).unwrap();
        let kls: Vec<f64> = [0.5, 1.0, 2.0]
            .iter()
            .map(|&d| {
                let q = RiemannianGaussian::new(e.clone(), dvector![d, 0.0, 0.0], DMatrix::identity(3, 3)).unwrap();
                kl_monte_carlo(&p, &q, 10_000, 3).unwrap()
            })
            .collect();
        assert!(kls[0] < kls[1] && kls[1] < kls[2]);
    }
}
