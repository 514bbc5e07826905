//! Hidden Markov models with Riemannian Gaussian emissions: time-binned
//! initialization, Baum-Welch fitting and stateful regression.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::distr::{weighted::WeightedIndex, Distribution};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::gaussian::{
    self, mle_mean_lenient, weighted_tangent_cov, Density, MleOptions, RiemannianGaussian, DEFAULT_EPS,
};
use crate::manifold::{symmetrize, ManifoldDescriptor};

pub const STOCHASTIC_TOL: f64 = 1e-9;
pub const SELF_TRANSITION: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct HMMModel {
    pub manifold: ManifoldDescriptor,
    pub priors: DVector<f64>,
    pub transitions: DMatrix<f64>,
    pub components: Vec<RiemannianGaussian>,
}

impl HMMModel {
    pub fn new(
        manifold: ManifoldDescriptor,
        priors: DVector<f64>,
        transitions: DMatrix<f64>,
        components: Vec<RiemannianGaussian>,
    ) -> Result<Self> {
        let m = Self {
            manifold,
            priors,
            transitions,
            components,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 {
            return Err(Error::arg("an HMM needs at least one component"));
        }
        if self.priors.len() != k {
            return Err(Error::Dimension {
                context: "HMM priors",
                expected: k,
                got: self.priors.len(),
            });
        }
        if self.transitions.nrows() != k || self.transitions.ncols() != k {
            return Err(Error::Dimension {
                context: "HMM transitions",
                expected: k,
                got: self.transitions.nrows(),
            });
        }
        if self.priors.iter().any(|&p| p < 0.0) || (self.priors.sum() - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::arg(format!("priors must be a probability vector (sum {})", self.priors.sum())));
        }
        for (r, row) in self.transitions.row_iter().enumerate() {
            if row.iter().any(|&a| a < 0.0) || (row.sum() - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::arg(format!("transition row {r} is not a probability vector")));
            }
        }
        if self.components.iter().any(|c| c.manifold != self.manifold) {
            return Err(Error::arg("HMM components live on different manifolds"));
        }
        Ok(())
    }

    /// Restricts every component to a subset of factors; priors and
    /// transitions are kept.
    pub fn marginalize(&self, factors: &[usize]) -> Result<HMMModel> {
        let components = self
            .components
            .iter()
            .map(|c| c.marginal(factors))
            .collect::<Result<Vec<_>>>()?;
        Ok(HMMModel {
            manifold: components[0].manifold.clone(),
            priors: self.priors.clone(),
            transitions: self.transitions.clone(),
            components,
        })
    }

    fn densities(&self) -> Result<Vec<Density>> {
        self.components.iter().map(|c| c.density()).collect()
    }

    /// Total log-likelihood of a set of sequences under the HMM.
    pub fn log_likelihood(&self, data: &[Vec<DVector<f64>>], exec: Execution) -> Result<f64> {
        let dens = self.densities()?;
        let per = exec::try_map_slice(exec, data, |seq| {
            let lb = emission_log_probs(&dens, seq);
            forward_backward(&self.priors, &self.transitions, &lb).map(|fb| fb.log_likelihood)
        })?;
        Ok(per.iter().sum())
    }

    /// Draws one state/observation sequence of length `len`.
    pub fn sample_sequence<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Result<Vec<DVector<f64>>> {
        let chols = self
            .components
            .iter()
            .map(|c| {
                nalgebra::Cholesky::new(c.cov.clone())
                    .ok_or_else(|| Error::Numerical("component covariance is not positive definite".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let pick = |w: &[f64], rng: &mut R| -> Result<usize> {
            Ok(WeightedIndex::new(w).map_err(|e| Error::Numerical(e.to_string()))?.sample(rng))
        };
        let mut state = pick(self.priors.as_slice(), rng)?;
        let mut out = Vec::with_capacity(len);
        for t in 0..len {
            if t > 0 {
                let row: Vec<f64> = self.transitions.row(state).iter().copied().collect();
                state = pick(&row, rng)?;
            }
            out.push(self.components[state].sample(&chols[state], rng)?);
        }
        Ok(out)
    }
}

/// Left-to-right transition matrix with self-probability `stay`.
pub fn left_to_right(k: usize, stay: f64) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(k, k);
    for i in 0..k {
        if i + 1 < k {
            a[(i, i)] = stay;
            a[(i, i + 1)] = 1.0 - stay;
        } else {
            a[(i, i)] = 1.0;
        }
    }
    a
}

/// Splits each (equal-length) sequence into `k` consecutive time bins and
/// fits one component per bin.
pub fn init_time_binned(
    manifold: &ManifoldDescriptor,
    data: &[Vec<DVector<f64>>],
    k: usize,
    eps: f64,
) -> Result<HMMModel> {
    if k == 0 {
        return Err(Error::arg("K must be at least 1"));
    }
    let len = data.first().map(|d| d.len()).ok_or_else(|| Error::arg("no sequences to initialize from"))?;
    if data.iter().any(|d| d.len() != len) {
        return Err(Error::arg("time-binned initialization needs equal-length sequences"));
    }
    let mut bins: Vec<Vec<DVector<f64>>> = vec![Vec::new(); k];
    for seq in data {
        for (j, x) in seq.iter().enumerate() {
            bins[j * k / len].push(x.clone());
        }
    }
    let n = manifold.tangent_dim();
    let mut components = Vec::with_capacity(k);
    for (b, pts) in bins.iter().enumerate() {
        if pts.is_empty() {
            return Err(Error::EmptyBin { bin: b, bins: k });
        }
        let w = vec![1.0; pts.len()];
        let mean = mle_mean_lenient(manifold, pts, &w, &pts[0], MleOptions::default())?;
        let cov = weighted_tangent_cov(manifold, pts, &w, &mean)? + DMatrix::identity(n, n) * eps;
        components.push(RiemannianGaussian {
            manifold: manifold.clone(),
            mean,
            cov,
        });
    }
    let mut priors = DVector::zeros(k);
    priors[0] = 1.0;
    HMMModel::new(manifold.clone(), priors, left_to_right(k, SELF_TRANSITION), components)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Relative log-likelihood improvement below which EM stops.
    pub tol: f64,
    /// Diagonal covariance floor added in every M-step.
    pub eps: f64,
    pub mle: MleOptions,
    pub exec: Execution,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-5,
            eps: DEFAULT_EPS,
            mle: MleOptions::default(),
            exec: Execution::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmReport {
    /// Data log-likelihood before each M-step, and of the returned model last.
    pub log_likelihoods: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Indices (in the initial model) of pruned components.
    pub pruned: Vec<usize>,
}

pub const COLLAPSE_MASS: f64 = 1e-8;

/// Per-step emission log-probabilities, `−∞` where a sample sits on a
/// component's cut locus.
fn emission_log_probs(dens: &[Density], seq: &[DVector<f64>]) -> Vec<Vec<f64>> {
    seq.iter()
        .map(|x| dens.iter().map(|d| d.log_pdf(x).unwrap_or(f64::NEG_INFINITY)).collect())
        .collect()
}

pub(crate) struct ForwardBackward {
    pub gamma: Vec<DVector<f64>>,
    pub xi: DMatrix<f64>,
    pub log_likelihood: f64,
}

/// Scaled forward-backward pass with per-step max-shifted emissions.
pub(crate) fn forward_backward(
    priors: &DVector<f64>,
    trans: &DMatrix<f64>,
    log_b: &[Vec<f64>],
) -> Result<ForwardBackward> {
    let k = priors.len();
    let t_len = log_b.len();
    let mut b = Vec::with_capacity(t_len);
    let mut shift = Vec::with_capacity(t_len);
    for lb in log_b {
        let m = lb.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return Err(Error::Numerical("a sample has zero likelihood under every component".into()));
        }
        shift.push(m);
        b.push(DVector::from_iterator(k, lb.iter().map(|l| (l - m).exp())));
    }
    let mut alpha = Vec::with_capacity(t_len);
    let mut scale = Vec::with_capacity(t_len);
    let tt = trans.transpose();
    for t in 0..t_len {
        let pred = if t == 0 { priors.clone() } else { &tt * &alpha[t - 1] };
        let a = pred.component_mul(&b[t]);
        let c = a.sum();
        if c <= 0.0 || !c.is_finite() {
            return Err(Error::Numerical(format!("forward pass underflow at step {t}")));
        }
        alpha.push(a / c);
        scale.push(c);
    }
    let log_likelihood = scale.iter().zip(&shift).map(|(c, s)| c.ln() + s).sum();
    let mut beta = vec![DVector::from_element(k, 1.0); t_len];
    for t in (0..t_len.saturating_sub(1)).rev() {
        beta[t] = trans * beta[t + 1].component_mul(&b[t + 1]) / scale[t + 1];
    }
    let mut xi = DMatrix::zeros(k, k);
    for t in 0..t_len.saturating_sub(1) {
        let right = beta[t + 1].component_mul(&b[t + 1]) / scale[t + 1];
        for i in 0..k {
            if alpha[t][i] == 0.0 {
                continue;
            }
            for j in 0..k {
                xi[(i, j)] += alpha[t][i] * trans[(i, j)] * right[j];
            }
        }
    }
    let gamma = alpha
        .iter()
        .zip(&beta)
        .map(|(a, b)| {
            let g = a.component_mul(b);
            let s = g.sum();
            g / s
        })
        .collect();
    Ok(ForwardBackward {
        gamma,
        xi,
        log_likelihood,
    })
}

fn expected_log_pdf(g: &RiemannianGaussian, samples: &[DVector<f64>], weights: &[f64]) -> f64 {
    let Ok(d) = g.density() else {
        return f64::NEG_INFINITY;
    };
    samples
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(x, &w)| w * d.log_pdf(x).unwrap_or(f64::NEG_INFINITY))
        .sum()
}

/// Baum-Welch re-estimation of priors, transitions and Riemannian Gaussian
/// emissions.
pub fn em_fit(init: &HMMModel, data: &[Vec<DVector<f64>>], config: &EmConfig) -> Result<(HMMModel, EmReport)> {
    init.validate()?;
    if data.is_empty() || data.iter().any(|d| d.is_empty()) {
        return Err(Error::arg("EM needs at least one non-empty sequence"));
    }
    let samples: Vec<DVector<f64>> = data.iter().flatten().cloned().collect();
    let mut model = init.clone();
    let mut alive: Vec<usize> = (0..init.k()).collect();
    let mut report = EmReport::default();
    let n = model.manifold.tangent_dim();
    for iter in 0..=config.max_iter {
        let dens = model.densities()?;
        let passes = exec::try_map_slice(config.exec, data, |seq| {
            forward_backward(&model.priors, &model.transitions, &emission_log_probs(&dens, seq))
        })?;
        let ll: f64 = passes.iter().map(|p| p.log_likelihood).sum();
        report.log_likelihoods.push(ll);
        report.iterations = iter;
        if let [.., prev, last] = report.log_likelihoods[..] {
            if last - prev <= config.tol * prev.abs() {
                report.converged = true;
                break;
            }
        }
        if iter == config.max_iter {
            break;
        }

        let k = model.k();
        let weights: Vec<Vec<f64>> = (0..k)
            .map(|c| passes.iter().flat_map(|p| p.gamma.iter().map(move |g| g[c])).collect())
            .collect();
        let mass: Vec<f64> = weights.iter().map(|w| w.iter().sum()).collect();
        let keep: Vec<usize> = (0..k).filter(|&c| mass[c] >= COLLAPSE_MASS).collect();
        if keep.is_empty() {
            return Err(Error::Numerical("every component collapsed".into()));
        }
        for c in (0..k).filter(|c| !keep.contains(c)) {
            warn!("pruning collapsed component {} (mass {:.2e})", alive[c], mass[c]);
            report.pruned.push(alive[c]);
        }

        let comps = exec::try_map_slice(config.exec, &keep, |&c| -> Result<RiemannianGaussian> {
            let old = &model.components[c];
            let fitted = |mean: DVector<f64>| -> Result<RiemannianGaussian> {
                let cov = weighted_tangent_cov(&model.manifold, &samples, &weights[c], &mean)?
                    + DMatrix::identity(n, n) * config.eps;
                Ok(RiemannianGaussian {
                    manifold: model.manifold.clone(),
                    mean,
                    cov,
                })
            };
            let mean = mle_mean_lenient(&model.manifold, &samples, &weights[c], &old.mean, config.mle)?;
            let moved = fitted(mean)?;
            if model.manifold.is_euclidean() {
                return Ok(moved);
            }
            // The Karcher mean only approximately maximizes the expected
            // log-likelihood on curved factors.
            let stayed = fitted(old.mean.clone())?;
            Ok(if expected_log_pdf(&stayed, &samples, &weights[c]) > expected_log_pdf(&moved, &samples, &weights[c]) {
                stayed
            } else {
                moved
            })
        })?;

        let mut priors = DVector::from_iterator(keep.len(), keep.iter().map(|&c| passes.iter().map(|p| p.gamma[0][c]).sum::<f64>()));
        let psum = priors.sum();
        if psum > 0.0 {
            priors /= psum;
        } else {
            priors = DVector::from_element(keep.len(), 1.0 / keep.len() as f64);
        }
        let mut xi = DMatrix::zeros(k, k);
        for p in &passes {
            xi += &p.xi;
        }
        let mut trans = DMatrix::zeros(keep.len(), keep.len());
        for (r, &i) in keep.iter().enumerate() {
            let row_sum: f64 = keep.iter().map(|&j| xi[(i, j)]).sum();
            for (c, &j) in keep.iter().enumerate() {
                trans[(r, c)] = if row_sum > 0.0 {
                    xi[(i, j)] / row_sum
                } else {
                    model.transitions[(i, j)]
                };
            }
            let s = trans.row(r).sum();
            if s > 0.0 {
                trans.row_mut(r).scale_mut(1.0 / s);
            } else {
                trans[(r, r)] = 1.0;
            }
        }
        alive = keep.iter().map(|&c| alive[c]).collect();
        model = HMMModel {
            manifold: model.manifold.clone(),
            priors,
            transitions: trans,
            components: comps,
        };
    }
    Ok((model, report))
}

/// Output of one regression step.
#[derive(Clone, Debug)]
pub struct GmrOutput {
    pub gaussian: RiemannianGaussian,
    pub weights: DVector<f64>,
    pub reset: bool,
}

/// Stateful regression over an HMM: conditions on the input factors and
/// carries the state distribution from step to step.
#[derive(Clone, Debug)]
pub struct GmrState<'m> {
    model: &'m HMMModel,
    inputs: Vec<usize>,
    outputs: Vec<usize>,
    input_manifold: ManifoldDescriptor,
    input_dens: Vec<Density>,
    prior: DVector<f64>,
    resets: usize,
}

impl<'m> GmrState<'m> {
    /// Starts from the model priors, so the first step weights components by
    /// `(πᵀA)_k · N_k(i)`.
    pub fn new(model: &'m HMMModel, inputs: &[usize]) -> Result<Self> {
        Self::with_prior(model, inputs, model.priors.clone())
    }

    pub fn with_prior(model: &'m HMMModel, inputs: &[usize], prior: DVector<f64>) -> Result<Self> {
        model.manifold.check_indices(inputs)?;
        if prior.len() != model.k() {
            return Err(Error::Dimension {
                context: "running prior",
                expected: model.k(),
                got: prior.len(),
            });
        }
        let outputs: Vec<usize> = (0..model.manifold.num_factors()).filter(|i| !inputs.contains(i)).collect();
        if outputs.is_empty() {
            return Err(Error::arg("regression needs at least one output factor"));
        }
        let input_dens = model
            .components
            .iter()
            .map(|c| c.marginal(inputs)?.density())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model,
            inputs: inputs.to_vec(),
            outputs,
            input_manifold: model.manifold.submanifold(inputs)?,
            input_dens,
            prior,
            resets: 0,
        })
    }

    pub fn model(&self) -> &'m HMMModel {
        self.model
    }

    pub fn prior(&self) -> &DVector<f64> {
        &self.prior
    }

    pub fn set_prior(&mut self, prior: DVector<f64>) {
        self.prior = prior;
    }

    pub fn resets(&self) -> usize {
        self.resets
    }

    pub fn outputs(&self) -> &[usize] {
        &self.outputs
    }

    /// Component weights for the next input without advancing the state.
    pub fn weights(&self, input: &DVector<f64>) -> Result<(DVector<f64>, bool)> {
        let k = self.model.k();
        let log_h: Vec<f64> = self
            .input_dens
            .iter()
            .map(|d| match d.log_pdf(&self.input_manifold.align_signs(input, &d.mean)) {
                Ok(v) => Ok(v),
                Err(Error::Singularity(_)) => Ok(f64::NEG_INFINITY),
                Err(e) => Err(e),
            })
            .collect::<Result<_>>()?;
        let pred = self.model.transitions.transpose() * &self.prior;
        let log_a: Vec<f64> = (0..k).map(|i| pred[i].ln() + log_h[i]).collect();
        let max_a = log_a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max_a >= f64::MIN_POSITIVE.ln() {
            return Ok((softmax(&log_a), false));
        }
        if log_h.iter().all(|l| *l == f64::NEG_INFINITY) {
            return Err(Error::Singularity("input lies on the cut locus of every component".into()));
        }
        Ok((softmax(&log_h), true))
    }

    pub fn step(&mut self, input: &DVector<f64>) -> Result<GmrOutput> {
        let (weights, reset) = self.weights(input)?;
        if reset {
            self.resets += 1;
        }
        let gaussian = self.mix(&weights, input)?;
        self.prior = weights.clone();
        Ok(GmrOutput {
            gaussian,
            weights,
            reset,
        })
    }

    /// Moment-matched single Gaussian of the weighted conditionals.
    fn mix(&self, weights: &DVector<f64>, input: &DVector<f64>) -> Result<RiemannianGaussian> {
        let mut conds = Vec::new();
        let mut w = Vec::new();
        for (k, c) in self.model.components.iter().enumerate() {
            if weights[k] > 1e-12 {
                conds.push(c.condition(&self.inputs, input)?.gaussian);
                w.push(weights[k]);
            }
        }
        if conds.len() == 1 {
            return Ok(conds.pop().unwrap());
        }
        let m = conds[0].manifold.clone();
        let best = w.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let means: Vec<DVector<f64>> = conds.iter().map(|c| c.mean.clone()).collect();
        let mean = mle_mean_lenient(&m, &means, &w, &means[best], MleOptions::default())?;
        let total: f64 = w.iter().sum();
        let n = m.tangent_dim();
        let mut cov = DMatrix::zeros(n, n);
        for (c, &wk) in conds.iter().zip(&w) {
            let d = m.log_map(&mean, &c.mean)?;
            let s = m.parallel_transport(&c.cov, &c.mean, &mean)?;
            cov += (s + &d * d.transpose()) * (wk / total);
        }
        Ok(RiemannianGaussian {
            manifold: m,
            mean,
            cov: symmetrize(&cov),
        })
    }
}

pub(crate) fn softmax(logs: &[f64]) -> DVector<f64> {
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = DVector::from_iterator(logs.len(), logs.iter().map(|l| (l - m).exp()));
    let s = e.sum();
    e / s
}

/// Componentwise Gaussian product of several HMMs sharing priors and
/// transitions (taken from the first). A component whose product does not
/// converge keeps the best iterate and is reported with a warning.
pub fn product_models(models: &[HMMModel]) -> Result<HMMModel> {
    let first = models.first().ok_or_else(|| Error::arg("product of zero models"))?;
    if models.iter().any(|m| m.k() != first.k()) {
        return Err(Error::arg("models in a product must have equal component counts"));
    }
    let components = (0..first.k())
        .map(|k| {
            let gs: Vec<RiemannianGaussian> = models.iter().map(|m| m.components[k].clone()).collect();
            let (g, fused) = gaussian::product_best_effort(&gs)?;
            if let gaussian::Fused::Stalled { residual, .. } = fused {
                warn!("component {k}: product stalled at residual {residual:.3e}");
            }
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HMMModel {
        manifold: first.manifold.clone(),
        priors: first.priors.clone(),
        transitions: first.transitions.clone(),
        components,
    })
}
