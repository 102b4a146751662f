//! Gaussian mixtures, EM fitting, kernel density mixtures, and the
//! component-count policy used by the bimodal experiments.

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// A finite Gaussian mixture with full covariances.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

impl GaussianMixture {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Single-component mixture from raw sample moments (unbiased
    /// covariance, no regularisation).
    pub fn from_moments(e: &Ensemble) -> Self {
        GaussianMixture {
            weights: vec![1.0],
            means: vec![e.mean()],
            covs: vec![e.covariance()],
        }
    }

    /// Overall mean of the mixture.
    pub fn mixture_mean(&self) -> DVector<f64> {
        let mut mu = DVector::zeros(self.dim());
        for l in 0..self.len() {
            mu += self.weights[l] * &self.means[l];
        }
        mu
    }

    /// Overall covariance of the mixture.
    pub fn mixture_covariance(&self) -> DMatrix<f64> {
        let mu = self.mixture_mean();
        let mut cov = DMatrix::zeros(self.dim(), self.dim());
        for l in 0..self.len() {
            let d = &self.means[l] - &mu;
            cov += self.weights[l] * (&self.covs[l] + &d * d.transpose());
        }
        cov
    }
}

/// Log of `sum(exp(v))` computed stably.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !hi.is_finite() {
        return hi;
    }
    let s: f64 = v.iter().map(|x| (x - hi).exp()).sum();
    hi + s.ln()
}

/// Log density of `N(mean, cov)` at `x`.
pub fn gaussian_logpdf(x: &[f64], mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let chol = Cholesky::new(cov.clone())
        .ok_or_else(|| Error::LinAlg("covariance not positive definite".into()))?;
    Ok(logpdf_with(&chol, mean, x))
}

fn logpdf_with(chol: &Cholesky<f64, Dyn>, mean: &DVector<f64>, x: &[f64]) -> f64 {
    let n = mean.len();
    let d = DVector::from_iterator(n, x.iter().zip(mean.iter()).map(|(a, b)| a - b));
    let y = chol
        .l()
        .solve_lower_triangular(&d)
        .expect("triangular solve");
    let maha = y.norm_squared();
    let logdet: f64 = (0..n).map(|i| chol.l()[(i, i)].ln()).sum();
    -0.5 * (n as f64) * (2.0 * std::f64::consts::PI).ln() - logdet - 0.5 * maha
}

/// Precomputed per-component factorizations for repeated density queries.
pub struct MixtureDensity {
    log_weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    chols: Vec<Cholesky<f64, Dyn>>,
}

impl MixtureDensity {
    pub fn new(mix: &GaussianMixture) -> Result<Self> {
        let mut chols = Vec::with_capacity(mix.len());
        for cov in &mix.covs {
            chols.push(Cholesky::new(cov.clone()).ok_or_else(|| {
                Error::LinAlg("mixture covariance not positive definite".into())
            })?);
        }
        Ok(MixtureDensity {
            log_weights: mix.weights.iter().map(|w| w.ln()).collect(),
            means: mix.means.clone(),
            chols,
        })
    }

    pub fn component_logpdf(&self, l: usize, x: &[f64]) -> f64 {
        logpdf_with(&self.chols[l], &self.means[l], x)
    }

    /// Per-component weighted log densities and their log-sum at `x`.
    pub fn weighted_logs(&self, x: &[f64], buf: &mut Vec<f64>) -> f64 {
        buf.clear();
        for l in 0..self.means.len() {
            buf.push(self.log_weights[l] + self.component_logpdf(l, x));
        }
        log_sum_exp(buf)
    }
}

/// How membership probabilities are computed for a state-space mixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RespMode<'a> {
    /// Component densities evaluated on the full state vector.
    FullState,
    /// Component densities evaluated on the scalar projection `h . x`.
    Observed { h: &'a [f64] },
}

/// Membership probabilities `beta[(i, l)]` of each member in each component,
/// together with the total log likelihood of the ensemble under the mixture
/// and the per-member mixture log densities.
pub fn responsibilities(
    mix: &GaussianMixture,
    e: &Ensemble,
    mode: RespMode,
) -> Result<(DMatrix<f64>, f64, Vec<f64>)> {
    let m = e.size();
    let l_count = mix.len();
    let mut beta = DMatrix::zeros(m, l_count);
    let mut member_logs = vec![0.0; m];
    let mut buf = Vec::with_capacity(l_count);
    let mut total = 0.0;
    match mode {
        RespMode::FullState => {
            let dens = MixtureDensity::new(mix)?;
            for i in 0..m {
                let lse = dens.weighted_logs(e.member(i), &mut buf);
                for l in 0..l_count {
                    beta[(i, l)] = (buf[l] - lse).exp();
                }
                member_logs[i] = lse;
                total += lse;
            }
        }
        RespMode::Observed { h } => {
            let (my, vy, al) = marginal(mix, h, 0.0);
            let ys = e.project(h);
            for i in 0..m {
                buf.clear();
                for l in 0..l_count {
                    let d = ys[i] - my[l];
                    let lg = -0.5 * (2.0 * std::f64::consts::PI * vy[l]).ln()
                        - 0.5 * d * d / vy[l];
                    buf.push(al[l].ln() + lg);
                }
                let lse = log_sum_exp(&buf);
                for l in 0..l_count {
                    beta[(i, l)] = (buf[l] - lse).exp();
                }
                member_logs[i] = lse;
                total += lse;
            }
        }
    }
    Ok((beta, total, member_logs))
}

/// Regularisation applied during EM fitting.
#[derive(Debug, Clone, Copy)]
pub struct EmParams {
    /// Ridge added to every fitted covariance.
    pub delta: f64,
    /// Lower bound enforced on fitted covariance eigenvalues (and hence on
    /// every projected variance).
    pub var_floor: f64,
    pub max_iter: usize,
    /// Relative log-likelihood change that stops iteration.
    pub tol: f64,
}

impl Default for EmParams {
    fn default() -> Self {
        EmParams {
            delta: 1e-6,
            var_floor: 5e-4,
            max_iter: 200,
            tol: 1e-8,
        }
    }
}

/// Clamp the eigenvalues of a symmetric matrix from below.
fn floor_eigenvalues(cov: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    if cov.nrows() == 1 {
        return DMatrix::from_element(1, 1, cov[(0, 0)].max(floor));
    }
    let es = cov.clone().symmetric_eigen();
    let mut vals = es.eigenvalues;
    let mut needs = false;
    for v in vals.iter_mut() {
        if *v < floor {
            *v = floor;
            needs = true;
        }
    }
    if !needs {
        return cov.clone();
    }
    &es.eigenvectors * DMatrix::from_diagonal(&vals) * es.eigenvectors.transpose()
}

/// One EM iteration: membership probabilities from the current mixture, then
/// weight, mean, and covariance updates with ridge and eigenvalue floor.
/// Returns the updated mixture and the log likelihood of the ensemble under
/// the input mixture.
pub fn em_step(e: &Ensemble, mix: &GaussianMixture, params: &EmParams) -> Result<(GaussianMixture, f64)> {
    let (beta, loglik, _) = responsibilities(mix, e, RespMode::FullState)?;
    let n = e.dim();
    let m = e.size();
    let l_count = mix.len();
    let mut out = mix.clone();
    for l in 0..l_count {
        let mass: f64 = (0..m).map(|i| beta[(i, l)]).sum();
        out.weights[l] = mass / m as f64;
        let mut mu = DVector::zeros(n);
        for i in 0..m {
            let b = beta[(i, l)];
            for (k, v) in e.member(i).iter().enumerate() {
                mu[k] += b * v;
            }
        }
        mu /= mass;
        let mut cov = DMatrix::zeros(n, n);
        for i in 0..m {
            let b = beta[(i, l)];
            let d = DVector::from_iterator(n, e.member(i).iter().zip(mu.iter()).map(|(x, c)| x - c));
            cov.syger(b, &d, &d, 1.0);
        }
        cov /= mass;
        cov.fill_upper_triangle_with_lower_triangle();
        for k in 0..n {
            cov[(k, k)] += params.delta;
        }
        out.means[l] = mu;
        out.covs[l] = floor_eigenvalues(&cov, params.var_floor);
    }
    Ok((out, loglik))
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

fn init_mixture(e: &Ensemble, l_count: usize, params: &EmParams) -> GaussianMixture {
    let n = e.dim();
    let m = e.size();
    let sample_cov = floor_eigenvalues(&e.covariance(), params.var_floor);
    if l_count == 1 {
        return GaussianMixture {
            weights: vec![1.0],
            means: vec![e.mean()],
            covs: vec![sample_cov],
        };
    }
    let means: Vec<DVector<f64>> = if n == 1 {
        // Spread initial centers to the 25th and 75th percentile (splitting
        // further quantiles evenly for larger component counts).
        let mut xs: Vec<f64> = (0..m).map(|i| e.member(i)[0]).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        (0..l_count)
            .map(|l| {
                let q = 0.25 + 0.5 * l as f64 / (l_count - 1) as f64;
                DVector::from_element(1, quantile(&xs, q))
            })
            .collect()
    } else {
        // Start from the two members farthest apart, then keep adding the
        // member farthest from all chosen centers.
        let mut chosen: Vec<usize> = Vec::new();
        let mut best = (0usize, 1usize, -1.0f64);
        for i in 0..m {
            for j in (i + 1)..m {
                let d: f64 = e
                    .member(i)
                    .iter()
                    .zip(e.member(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d > best.2 {
                    best = (i, j, d);
                }
            }
        }
        chosen.push(best.0);
        chosen.push(best.1);
        while chosen.len() < l_count {
            let far = (0..m)
                .max_by(|&a, &b| {
                    let da: f64 = chosen
                        .iter()
                        .map(|&cidx| {
                            e.member(a)
                                .iter()
                                .zip(e.member(cidx))
                                .map(|(x, y)| (x - y) * (x - y))
                                .sum::<f64>()
                        })
                        .fold(f64::INFINITY, f64::min);
                    let db: f64 = chosen
                        .iter()
                        .map(|&cidx| {
                            e.member(b)
                                .iter()
                                .zip(e.member(cidx))
                                .map(|(x, y)| (x - y) * (x - y))
                                .sum::<f64>()
                        })
                        .fold(f64::INFINITY, f64::min);
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            chosen.push(far);
        }
        chosen
            .into_iter()
            .map(|i| DVector::from_column_slice(e.member(i)))
            .collect()
    };
    GaussianMixture {
        weights: vec![1.0 / l_count as f64; l_count],
        means,
        covs: vec![sample_cov; l_count],
    }
}

/// Fit an `L` component mixture by EM, starting from `warm` when provided
/// (and of matching size) or from a quantile/farthest-member initialisation.
///
/// A component whose membership mass collapses below 1e-12 is restarted at
/// the member the current mixture explains worst, with the sample covariance
/// and a weight of at least `1/M`.
pub fn em_fit(
    e: &Ensemble,
    l_count: usize,
    params: &EmParams,
    warm: Option<&GaussianMixture>,
) -> Result<GaussianMixture> {
    if e.size() < 2 {
        return Err(Error::MixtureFit("need at least two members".into()));
    }
    let mut mix = match warm {
        Some(w) if w.len() == l_count && w.dim() == e.dim() => w.clone(),
        _ => init_mixture(e, l_count, params),
    };
    if l_count == 1 {
        // EM converges in a single step for one component.
        let (fit, _) = em_step(e, &mix, params)?;
        return Ok(fit);
    }
    let m = e.size();
    let mut prev_ll = f64::NEG_INFINITY;
    for _ in 0..params.max_iter {
        let (beta, _, member_logs) = responsibilities(&mix, e, RespMode::FullState)?;
        let masses: Vec<f64> = (0..l_count)
            .map(|l| (0..m).map(|i| beta[(i, l)]).sum())
            .collect();
        if masses.iter().any(|&s| s < 1e-12) {
            let worst = (0..m)
                .min_by(|&a, &b| member_logs[a].partial_cmp(&member_logs[b]).unwrap())
                .unwrap();
            let sample_cov = floor_eigenvalues(&e.covariance(), params.var_floor);
            for l in 0..l_count {
                if masses[l] < 1e-12 {
                    mix.means[l] = DVector::from_column_slice(e.member(worst));
                    mix.covs[l] = sample_cov.clone();
                    mix.weights[l] = mix.weights[l].max(1.0 / m as f64);
                }
            }
            let z: f64 = mix.weights.iter().sum();
            for w in &mut mix.weights {
                *w /= z;
            }
            prev_ll = f64::NEG_INFINITY;
            continue;
        }
        let (next, ll) = em_step(e, &mix, params)?;
        mix = next;
        if (ll - prev_ll).abs() <= params.tol * (1.0 + ll.abs()) {
            break;
        }
        prev_ll = ll;
    }
    Ok(mix)
}

/// Component count for sign-split bimodal states: one component when at
/// least 90% of the policy coordinate values share a strict sign, two
/// otherwise. Values exactly at zero support neither side.
pub fn l_policy_double_well(xs: &[f64]) -> usize {
    let m = xs.len();
    let pos = xs.iter().filter(|&&x| x > 0.0).count();
    let neg = xs.iter().filter(|&&x| x < 0.0).count();
    let thresh = 0.9 * m as f64;
    if pos as f64 >= thresh || neg as f64 >= thresh {
        1
    } else {
        2
    }
}

/// Bandwidth scale factor `(2/(N+2))^(4/(N+4)) M^(-2/(N+4))` for Gaussian
/// kernel density estimation.
pub fn kde_bandwidth(n: usize, m: usize) -> f64 {
    let nf = n as f64;
    let e1 = 4.0 / (nf + 4.0);
    let e2 = -2.0 / (nf + 4.0);
    (2.0 / (nf + 2.0)).powf(e1) * (m as f64).powf(e2)
}

/// Kernel density mixture: one component per member, all with covariance
/// `c P` where `P` is the sample covariance.
pub fn kde_mixture(e: &Ensemble, c: f64) -> Result<GaussianMixture> {
    if e.size() < 2 {
        return Err(Error::MixtureFit("kernel mixture needs at least two members".into()));
    }
    let b = c * e.covariance();
    if Cholesky::new(b.clone()).is_none() {
        return Err(Error::LinAlg("kernel covariance not positive definite".into()));
    }
    let m = e.size();
    Ok(GaussianMixture {
        weights: vec![1.0 / m as f64; m],
        means: (0..m)
            .map(|i| DVector::from_column_slice(e.member(i)))
            .collect(),
        covs: vec![b; m],
    })
}

/// Projection of each component onto a scalar observable: means `h . mu_l`,
/// variances `h^T P_l h` clamped from below by `floor`, and the weights.
pub fn marginal(mix: &GaussianMixture, h: &[f64], floor: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hv = DVector::from_column_slice(h);
    let means: Vec<f64> = mix.means.iter().map(|mu| mu.dot(&hv)).collect();
    let vars: Vec<f64> = mix
        .covs
        .iter()
        .map(|p| ((p * &hv).dot(&hv)).max(floor))
        .collect();
    (means, vars, mix.weights.clone())
}
