//! The fictitious-time analysis flow that transports ensemble members from
//! prior to posterior.
//!
//! Members move over a unit pseudo-time interval under the sum of two
//! fields: a contraction field that pulls each member toward the observation
//! (Kalman-like within each mixture component) and an exchange field that
//! shifts probability mass between components according to how well each
//! component explains the observation. The exchange field has Gaussian tails
//! in its denominator and is therefore bounded by a configurable cut-off.

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::mixture::{
    em_fit, kde_mixture, l_policy_double_well, log_sum_exp, marginal, responsibilities,
    EmParams, GaussianMixture, RespMode,
};
use crate::rng::Rng;
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use statrs::function::erf::erf;

/// A scalar observation `y = h . x + e`, `e ~ N(0, r)`.
#[derive(Debug, Clone)]
pub struct Observation {
    pub h: Vec<f64>,
    pub y: f64,
    pub r: f64,
}

/// Negative log likelihood of a state under a scalar observation, up to the
/// additive normalisation constant: `(y - h.x)^2 / (2 r)`.
pub fn negloglik(x: &[f64], obs: &Observation) -> f64 {
    let hx: f64 = x.iter().zip(&obs.h).map(|(a, b)| a * b).sum();
    let d = obs.y - hx;
    d * d / (2.0 * obs.r)
}

/// Expectation of `negloglik` under a scalar Gaussian with mean `ybar` and
/// variance `var`: `((y - ybar)^2 + var) / (2 r)`.
pub fn expected_negloglik_component(ybar: f64, var: f64, y_obs: f64, r: f64) -> f64 {
    let d = y_obs - ybar;
    (d * d + var) / (2.0 * r)
}

/// Mixture expectation: the weight-convex combination of component values.
pub fn expected_negloglik_mixture(es: &[f64], alphas: &[f64]) -> f64 {
    es.iter().zip(alphas).map(|(e, a)| e * a).sum()
}

/// Per-observation quantities shared by every member's field evaluation.
pub struct ObsContext {
    /// `P_l h` per component.
    pub gain_dir: Vec<DVector<f64>>,
    /// `h^T P_l h` per component.
    pub hph: Vec<f64>,
    /// Component means and variances projected onto the observable.
    pub my: Vec<f64>,
    pub vy: Vec<f64>,
    pub alphas: Vec<f64>,
    /// Per-component expected negative log likelihood and its mixture value.
    pub e_comp: Vec<f64>,
    pub e_mix: f64,
    pub y_obs: f64,
    pub r: f64,
}

impl ObsContext {
    pub fn new(mix: &GaussianMixture, obs: &Observation) -> Self {
        let hv = DVector::from_column_slice(&obs.h);
        let (my, vy, alphas) = marginal(mix, &obs.h, 0.0);
        let gain_dir: Vec<DVector<f64>> = mix.covs.iter().map(|p| p * &hv).collect();
        let hph: Vec<f64> = gain_dir.iter().map(|g| g.dot(&hv)).collect();
        let e_comp: Vec<f64> = my
            .iter()
            .zip(&vy)
            .map(|(&m, &v)| expected_negloglik_component(m, v, obs.y, obs.r))
            .collect();
        let e_mix = expected_negloglik_mixture(&e_comp, &alphas);
        ObsContext {
            gain_dir,
            hph,
            my,
            vy,
            alphas,
            e_comp,
            e_mix,
            y_obs: obs.y,
            r: obs.r,
        }
    }
}

/// Contraction field for one member under an EM-fitted mixture:
/// `-1/2 sum_l beta_l P_l h (h.x_i + h.xbar_l - 2 y_obs) / r`, accumulated
/// into `out`.
pub fn contraction_field(
    ctx: &ObsContext,
    beta_row: &[f64],
    y_i: f64,
    out: &mut DVector<f64>,
) {
    for l in 0..ctx.my.len() {
        let b = beta_row[l];
        if b == 0.0 {
            continue;
        }
        let coeff = -0.5 * b * (y_i + ctx.my[l] - 2.0 * ctx.y_obs) / ctx.r;
        out.axpy(coeff, &ctx.gain_dir[l], 1.0);
    }
}

/// Contraction field for the kernel density mixture. Identical in form to
/// [`contraction_field`] with every component sharing the kernel covariance
/// and centred on a member.
pub fn kde_contraction_field(
    ctx: &ObsContext,
    beta_row: &[f64],
    y_i: f64,
    out: &mut DVector<f64>,
) {
    contraction_field(ctx, beta_row, y_i, out);
}

/// Perturbed-observation contraction field `-B h (h.x_i - y_obs + d_i) / r`
/// for a shared kernel covariance `B`; `d_i` is the member's observation
/// perturbation, drawn once per assimilation event.
pub fn perturbed_contraction_field(
    bh: &DVector<f64>,
    r: f64,
    y_i: f64,
    y_obs: f64,
    d_i: f64,
    out: &mut DVector<f64>,
) {
    out.axpy(-(y_i - y_obs + d_i) / r, bh, 1.0);
}

const LOG_RATIO_CAP: f64 = 700.0;

/// Exchange field with error-function mass transfer:
/// `1/2 sum_l beta_l P_l h (E_l - E_mix) / vy_l * erf((y_i - my_l) / sqrt(2 vy_l)) / N(y_i; my_l, vy_l)`.
/// The `beta * erf / N` ratio is evaluated in log space and capped so the
/// result stays finite even deep in the Gaussian tails; the cut-off operator
/// bounds whatever survives.
pub fn exchange_field_erf(ctx: &ObsContext, beta_row: &[f64], y_i: f64, out: &mut DVector<f64>) {
    for l in 0..ctx.my.len() {
        let b = beta_row[l];
        if b == 0.0 {
            continue;
        }
        let v = ctx.vy[l];
        let d = y_i - ctx.my[l];
        let erf_val = erf(d / (2.0 * v).sqrt());
        if erf_val == 0.0 {
            continue;
        }
        let log_gauss = -0.5 * (2.0 * std::f64::consts::PI * v).ln() - 0.5 * d * d / v;
        let log_abs = (b.ln() + erf_val.abs().ln() - log_gauss).min(LOG_RATIO_CAP);
        let ratio = erf_val.signum() * log_abs.exp();
        let coeff = 0.5 * (ctx.e_comp[l] - ctx.e_mix) / v * ratio;
        out.axpy(coeff, &ctx.gain_dir[l], 1.0);
    }
}

/// Density of the scaled three-degree-of-freedom t form used by the
/// polynomial-tail exchange variant: `(2 sigma^3 / pi) / (sigma^2 + (y-ybar)^2)^2`.
pub fn t3_pdf(y: f64, ybar: f64, sigma: f64) -> f64 {
    let d = y - ybar;
    let q = sigma * sigma + d * d;
    2.0 * sigma.powi(3) / (std::f64::consts::PI * q * q)
}

/// Antiderivative of [`t3_pdf`] vanishing at `ybar`.
pub fn t3_cdf_centered(y: f64, ybar: f64, sigma: f64) -> f64 {
    let d = y - ybar;
    let q = sigma * sigma + d * d;
    (d / sigma).atan() / std::f64::consts::PI + sigma * d / (std::f64::consts::PI * q)
}

/// Exchange field with polynomial-tail mass transfer:
/// `sum_l beta_l P_l h (E_l - E_mix) / vy_l * T3cdf(y_i) / T3pdf(y_i)`.
/// Carries no 1/2 prefactor, matching the variant's printed form.
pub fn exchange_field_t3(ctx: &ObsContext, beta_row: &[f64], y_i: f64, out: &mut DVector<f64>) {
    for l in 0..ctx.my.len() {
        let b = beta_row[l];
        if b == 0.0 {
            continue;
        }
        let sigma = ctx.vy[l].sqrt();
        let ratio = t3_cdf_centered(y_i, ctx.my[l], sigma) / t3_pdf(y_i, ctx.my[l], sigma);
        let coeff = b * (ctx.e_comp[l] - ctx.e_mix) / ctx.vy[l] * ratio;
        out.axpy(coeff, &ctx.gain_dir[l], 1.0);
    }
}

/// Bound a field vector's sup-norm by `u_cut` with a direction-preserving
/// rescale.
pub fn clip_field(u: &mut DVector<f64>, u_cut: f64) {
    let sup = u.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if sup > u_cut {
        let k = u_cut / sup;
        for v in u.iter_mut() {
            // Clamp so the bound holds exactly despite rounding in the rescale.
            *v = (*v * k).clamp(-u_cut, u_cut);
        }
    }
}

/// Which exchange-field tail form to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExchangeVariant {
    Erf,
    T3,
}

/// Time discretisation of the contraction term within each pseudo-time step.
///
/// `Euler` is the plain explicit step. `IntegratingFactor` integrates the
/// contraction with the mixture frozen over the substep, shrinking the
/// member's deviation from each component mean and the mean's offset from
/// the observation by their exact exponential factors. Both parts stay
/// monotone however stiff the contraction is, where the explicit step
/// overshoots; the two schemes agree to first order in the substep size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContractionScheme {
    Euler,
    IntegratingFactor,
}

/// How mixture parameters track the moving ensemble during the pseudo-time
/// loop: refit from the current members each substep, or evolve the fitted
/// parameters by their own flow equations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixtureUpdate {
    Refit,
    ParamFlow,
}

/// Mixture-fitting policy used at each substep.
#[derive(Debug, Clone, Copy)]
pub enum Fitter {
    /// Fixed component count; one component uses raw sample moments.
    FixedL(usize),
    /// One component when 90% of the given coordinate shares a sign, two
    /// otherwise, re-decided at every substep.
    SignPolicy { coord: usize },
    /// Kernel density mixture with covariance `c P`, recomputed each
    /// substep. `perturbed` switches the contraction field to the
    /// perturbed-observation form.
    Kde { c: f64, perturbed: bool },
}

#[derive(Debug, Clone)]
pub struct AnalysisConfig {
    /// Pseudo-time step; `1/ds` must be an integer number of substeps.
    pub ds: f64,
    /// Sup-norm bound applied to the exchange field.
    pub u_cut: f64,
    pub exchange: ExchangeVariant,
    pub scheme: ContractionScheme,
    pub update: MixtureUpdate,
    /// Membership probabilities from full-state densities (default) or from
    /// the observed marginal only.
    pub full_state_resp: bool,
    pub em: EmParams,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            ds: 0.05,
            u_cut: 100.0,
            exchange: ExchangeVariant::Erf,
            scheme: ContractionScheme::Euler,
            update: MixtureUpdate::Refit,
            full_state_resp: true,
            em: EmParams::default(),
        }
    }
}

impl AnalysisConfig {
    pub fn substeps(&self) -> Result<usize> {
        if !(self.ds > 0.0) {
            return Err(Error::Config("pseudo-time step must be positive".into()));
        }
        let n = 1.0 / self.ds;
        if (n - n.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "1/ds must be an integer, got ds={}",
                self.ds
            )));
        }
        Ok(n.round() as usize)
    }
}

/// Diagnostics from one analysis event.
#[derive(Debug, Clone, Copy, Default)]
pub struct AnalysisStats {
    /// Component count chosen at the first substep.
    pub l_entry: usize,
    /// Whether any substep used more than one component.
    pub used_multi: bool,
    /// Weight clamp events during parameter-flow updates.
    pub alpha_clamped: usize,
}

/// One forward-Euler step of the mixture parameter flow for a single
/// observation: means relax toward the observation, covariances contract,
/// and weights reweight by relative expected misfit under a multiplier
/// keeping their sum constant. Weights are renormalised after the step;
/// negatives are clamped to zero first and counted.
pub fn mixture_param_flow(
    mix: &mut GaussianMixture,
    obs: &Observation,
    ds: f64,
) -> Result<usize> {
    let hv = DVector::from_column_slice(&obs.h);
    let l_count = mix.len();
    let mut d = vec![0.0; l_count];
    for l in 0..l_count {
        let my = mix.means[l].dot(&hv);
        let dm = my - obs.y;
        d[l] = dm * dm / obs.r;
    }
    let lambda: f64 = -mix
        .weights
        .iter()
        .zip(&d)
        .map(|(a, dl)| a * dl)
        .sum::<f64>();
    let mut clamped = 0;
    for l in 0..l_count {
        let g = &mix.covs[l] * &hv;
        let my = mix.means[l].dot(&hv);
        // dP/ds = -(P h)(P h)^T / r keeps P symmetric by construction.
        let mean_step = -(my - obs.y) / obs.r * &g;
        mix.means[l] += ds * mean_step;
        let cov_step = &g * g.transpose() / obs.r;
        mix.covs[l] -= ds * cov_step;
        mix.weights[l] += ds * (-0.5 * mix.weights[l] * (d[l] + lambda));
        if mix.weights[l] < 0.0 {
            mix.weights[l] = 0.0;
            clamped += 1;
        }
    }
    let z: f64 = mix.weights.iter().sum();
    if z <= 0.0 {
        return Err(Error::MixtureFit("all mixture weights vanished".into()));
    }
    for w in &mut mix.weights {
        *w /= z;
    }
    Ok(clamped)
}

/// `(1 - exp(-z)) / z`, the exact shrink factor of a frozen linear
/// contraction over one substep, with its `z -> 0` limit.
fn phi_shrink(z: f64) -> f64 {
    if z.abs() < 1e-8 {
        1.0 - 0.5 * z
    } else {
        -(-z).exp_m1() / z
    }
}

fn fit_mixture(
    e: &Ensemble,
    fitter: &Fitter,
    em: &EmParams,
    warm: &mut Option<GaussianMixture>,
) -> Result<GaussianMixture> {
    match fitter {
        Fitter::FixedL(1) => Ok(GaussianMixture::from_moments(e)),
        Fitter::FixedL(l) => {
            let mix = em_fit(e, *l, em, warm.as_ref())?;
            *warm = Some(mix.clone());
            Ok(mix)
        }
        Fitter::SignPolicy { coord } => {
            let vals: Vec<f64> = (0..e.size()).map(|i| e.member(i)[*coord]).collect();
            if l_policy_double_well(&vals) == 1 {
                Ok(GaussianMixture::from_moments(e))
            } else {
                let mix = em_fit(e, 2, em, warm.as_ref())?;
                *warm = Some(mix.clone());
                Ok(mix)
            }
        }
        Fitter::Kde { c, .. } => kde_mixture(e, *c),
    }
}

/// Membership probabilities as an `M x L` matrix, with a single shared
/// factorization when every component carries the same covariance.
fn memberships(
    mix: &GaussianMixture,
    e: &Ensemble,
    full_state: bool,
    obs: &Observation,
    shared_cov: bool,
) -> Result<DMatrix<f64>> {
    let m = e.size();
    let l_count = mix.len();
    if l_count == 1 {
        return Ok(DMatrix::from_element(m, 1, 1.0));
    }
    if full_state && shared_cov {
        // All components share one covariance: one factorization, and the
        // common normalisation constant cancels inside the softmax.
        let chol = nalgebra::Cholesky::new(mix.covs[0].clone())
            .ok_or_else(|| Error::LinAlg("kernel covariance not positive definite".into()))?;
        let n = e.dim();
        let mut beta = DMatrix::zeros(m, l_count);
        let mut logs = vec![0.0; l_count];
        let mut d = DVector::zeros(n);
        for i in 0..m {
            let xi = e.member(i);
            for l in 0..l_count {
                for k in 0..n {
                    d[k] = xi[k] - mix.means[l][k];
                }
                let y = chol
                    .l()
                    .solve_lower_triangular(&d)
                    .ok_or_else(|| Error::LinAlg("triangular solve failed".into()))?;
                logs[l] = mix.weights[l].ln() - 0.5 * y.norm_squared();
            }
            let lse = log_sum_exp(&logs);
            for l in 0..l_count {
                beta[(i, l)] = (logs[l] - lse).exp();
            }
        }
        return Ok(beta);
    }
    let mode = if full_state {
        RespMode::FullState
    } else {
        RespMode::Observed { h: &obs.h }
    };
    let (beta, _, _) = responsibilities(mix, e, mode)?;
    Ok(beta)
}

/// Transport an ensemble from prior to posterior through one unit of
/// pseudo-time, against one or more mutually uncorrelated scalar
/// observations. Fields from all observations are evaluated against the
/// same current mixture and summed. Returns per-event diagnostics; the
/// ensemble is updated in place.
pub fn analysis_step(
    e: &mut Ensemble,
    obs_list: &[Observation],
    fitter: &Fitter,
    cfg: &AnalysisConfig,
    rng: &mut Rng,
) -> Result<AnalysisStats> {
    analysis_step_traced(e, obs_list, fitter, cfg, rng, None)
}

/// As [`analysis_step`], optionally recording `(s, ensemble)` snapshots
/// after every substep for particle-rearrangement plots.
pub fn analysis_step_traced(
    e: &mut Ensemble,
    obs_list: &[Observation],
    fitter: &Fitter,
    cfg: &AnalysisConfig,
    rng: &mut Rng,
    mut trace: Option<&mut Vec<(f64, Ensemble)>>,
) -> Result<AnalysisStats> {
    let mut stats = AnalysisStats::default();
    if obs_list.is_empty() {
        return Ok(stats);
    }
    for obs in obs_list {
        if obs.h.len() != e.dim() {
            return Err(Error::Dimension("observation operator vs state dim".into()));
        }
        if !(obs.r > 0.0) {
            return Err(Error::Config("observation variance must be positive".into()));
        }
    }
    if !cfg.full_state_resp && obs_list.len() != 1 {
        return Err(Error::Config(
            "projected membership mode supports a single observation".into(),
        ));
    }
    let nsub = cfg.substeps()?;
    let m = e.size();
    let n = e.dim();

    // Observation perturbations for the perturbed contraction variant are
    // drawn once per event and held fixed across substeps.
    let perturbed = matches!(fitter, Fitter::Kde { perturbed: true, .. });
    let d_perturb: Vec<Vec<f64>> = if perturbed {
        obs_list
            .iter()
            .map(|obs| {
                (0..m)
                    .map(|_| obs.r.sqrt() * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut warm: Option<GaussianMixture> = None;
    let mut flow_mix: Option<GaussianMixture> = None;
    let mut disp = DMatrix::<f64>::zeros(n, m);
    let mut field = DVector::<f64>::zeros(n);
    let mut beta_row = vec![0.0; 0];

    for k in 0..nsub {
        let mix = match cfg.update {
            MixtureUpdate::Refit => fit_mixture(e, fitter, &cfg.em, &mut warm)?,
            MixtureUpdate::ParamFlow => match flow_mix.take() {
                Some(mx) => mx,
                None => fit_mixture(e, fitter, &cfg.em, &mut warm)?,
            },
        };
        let l_count = mix.len();
        if k == 0 {
            stats.l_entry = l_count;
        }
        if l_count > 1 {
            stats.used_multi = true;
        }
        let shared_cov = matches!(fitter, Fitter::Kde { .. });
        disp.fill(0.0);
        for (oi, obs) in obs_list.iter().enumerate() {
            let ctx = ObsContext::new(&mix, obs);
            if ctx.vy.iter().any(|&v| !(v > 0.0)) && l_count > 1 {
                return Err(Error::LinAlg(
                    "component marginal variance not positive".into(),
                ));
            }
            let beta = memberships(&mix, e, cfg.full_state_resp, obs, shared_cov)?;
            beta_row.resize(l_count, 0.0);
            let ys = e.project(&obs.h);
            for i in 0..m {
                for l in 0..l_count {
                    beta_row[l] = beta[(i, l)];
                }
                // Contraction part.
                if perturbed {
                    field.fill(0.0);
                    perturbed_contraction_field(
                        &ctx.gain_dir[0],
                        obs.r,
                        ys[i],
                        obs.y,
                        d_perturb[oi][i],
                        &mut field,
                    );
                    match cfg.scheme {
                        ContractionScheme::Euler => {
                            for k2 in 0..n {
                                disp[(k2, i)] += cfg.ds * field[k2];
                            }
                        }
                        ContractionScheme::IntegratingFactor => {
                            // Each member relaxes toward its own perturbed
                            // target, so a single frozen-coefficient factor
                            // integrates the substep exactly.
                            let rate = ctx.hph[0] / obs.r;
                            let fac = phi_shrink(rate * cfg.ds) * cfg.ds;
                            for k2 in 0..n {
                                disp[(k2, i)] += fac * field[k2];
                            }
                        }
                    }
                } else {
                    match cfg.scheme {
                        ContractionScheme::Euler => {
                            field.fill(0.0);
                            contraction_field(&ctx, &beta_row, ys[i], &mut field);
                            for k2 in 0..n {
                                disp[(k2, i)] += cfg.ds * field[k2];
                            }
                        }
                        ContractionScheme::IntegratingFactor => {
                            // Mode-split exponential step. With the mixture
                            // frozen, a member's observed-space deviation from
                            // a component mean relaxes at a_l = h P_l h / 2r
                            // while the mean offset from the observation
                            // relaxes at 2 a_l. Shrinking each part by its own
                            // exponential factor keeps the member between its
                            // start and the frozen-flow limit however stiff
                            // the contraction is; the plain step instead
                            // overshoots once a_l ds > 1.
                            for l in 0..l_count {
                                let b = beta_row[l];
                                let hph = ctx.hph[l];
                                if b == 0.0 || hph <= 0.0 {
                                    continue;
                                }
                                let z = 0.5 * hph / obs.r * cfg.ds;
                                let dev = ys[i] - ctx.my[l];
                                let off = ctx.my[l] - ctx.y_obs;
                                let dw =
                                    b * ((-z).exp_m1() * dev + (-2.0 * z).exp_m1() * off);
                                let coeff = dw / hph;
                                for k2 in 0..n {
                                    disp[(k2, i)] += coeff * ctx.gain_dir[l][k2];
                                }
                            }
                        }
                    }
                }
                // Exchange part, bounded, always explicit.
                if l_count > 1 {
                    field.fill(0.0);
                    match cfg.exchange {
                        ExchangeVariant::Erf => {
                            exchange_field_erf(&ctx, &beta_row, ys[i], &mut field)
                        }
                        ExchangeVariant::T3 => exchange_field_t3(&ctx, &beta_row, ys[i], &mut field),
                    }
                    clip_field(&mut field, cfg.u_cut);
                    for k2 in 0..n {
                        disp[(k2, i)] += cfg.ds * field[k2];
                    }
                }
            }
        }
        for i in 0..m {
            for (k2, v) in e.member_mut(i).iter_mut().enumerate() {
                *v += disp[(k2, i)];
            }
        }
        if !e.is_finite() {
            return Err(Error::non_finite(format!("analysis substep {k}")));
        }
        if cfg.update == MixtureUpdate::ParamFlow && k + 1 < nsub {
            let mut mx = mix;
            for obs in obs_list {
                stats.alpha_clamped += mixture_param_flow(&mut mx, obs, cfg.ds)?;
            }
            flow_mix = Some(mx);
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(((k + 1) as f64 * cfg.ds, e.clone()));
        }
    }
    Ok(stats)
}
