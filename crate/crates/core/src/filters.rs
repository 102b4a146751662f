//! The concrete assimilation schemes compared in the experiments: the
//! perturbed-observation ensemble Kalman filter, a continuous ensemble
//! square-root filter, a rank histogram filter, the mixture transport filter,
//! and the ensemble Kalman-Bucy step for increment observations.

use crate::dynamics::Langevin;
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::mixture::GaussianMixture;
use crate::rng::Rng;
use crate::transport::{
    analysis_step, clip_field, contraction_field, exchange_field_erf, exchange_field_t3,
    AnalysisConfig, AnalysisStats, ContractionScheme, ExchangeVariant, Fitter, MixtureUpdate,
    ObsContext, Observation,
};
use nalgebra::DVector;
use rand_chacha::rand_core::SeedableRng;
use rand::Rng as _;
use rand_distr::StandardNormal;
use statrs::function::erf::{erfc, erfc_inv};

/// Standard normal CDF.
pub(crate) fn ndtr(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile function.
fn ndtri(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// Deterministic core of the perturbed-observation update with the
/// perturbations supplied by the caller:
/// `x_i += K (y + d_i - h.x_i)`, `K = P h / (h^T P h + r)`.
pub fn enkf_po_update(e: &mut Ensemble, obs: &Observation, perturbations: &[f64]) -> Result<()> {
    if perturbations.len() != e.size() {
        return Err(Error::Dimension("one perturbation per member".into()));
    }
    let hv = DVector::from_column_slice(&obs.h);
    let p = e.covariance();
    let g = &p * &hv;
    let hph = g.dot(&hv);
    let k = g / (hph + obs.r);
    let ys = e.project(&obs.h);
    for i in 0..e.size() {
        let innov = obs.y + perturbations[i] - ys[i];
        for (c, v) in e.member_mut(i).iter_mut().enumerate() {
            *v += k[c] * innov;
        }
    }
    if !e.is_finite() {
        return Err(Error::non_finite("perturbed-observation update"));
    }
    Ok(())
}

/// Classical one-shot ensemble Kalman filter analysis with perturbed
/// observations, `d_i ~ N(0, r)`.
pub fn enkf_po_step(e: &mut Ensemble, obs: &Observation, rng: &mut Rng) -> Result<()> {
    let sr = obs.r.sqrt();
    let d: Vec<f64> = (0..e.size())
        .map(|_| sr * rng.sample::<f64, _>(StandardNormal))
        .collect();
    enkf_po_update(e, obs, &d)
}

/// Continuous-time ensemble square-root analysis: integrates
/// `dx_i/ds = -1/2 P h (h.x_i + h.xbar - 2 y) / r` over unit pseudo-time
/// with `P` and the mean recomputed every substep of size `ds`.
pub fn esrf_continuous_step(
    e: &mut Ensemble,
    obs: &Observation,
    ds: f64,
    scheme: ContractionScheme,
) -> Result<()> {
    let cfg = AnalysisConfig {
        ds,
        scheme,
        ..AnalysisConfig::default()
    };
    // Deterministic: the single-component path never consumes randomness.
    let mut rng = Rng::seed_from_u64(0);
    analysis_step(
        e,
        std::slice::from_ref(obs),
        &Fitter::FixedL(1),
        &cfg,
        &mut rng,
    )?;
    Ok(())
}

/// Rank histogram filter analysis.
///
/// The prior in observation space is approximated by flat pieces carrying
/// mass `1/(M+1)` between consecutive sorted member projections, with
/// Gaussian tails matched to the sample moments outside. Multiplying by the
/// Gaussian likelihood gives a piecewise posterior; each member is moved to
/// the posterior quantile at its prior rank, and the observation-space
/// increments are regressed back onto the state with the ensemble
/// covariance.
pub fn rhf_step(e: &mut Ensemble, obs: &Observation) -> Result<()> {
    let m = e.size();
    if m < 2 {
        return Err(Error::Dimension("rank histogram needs at least two members".into()));
    }
    let ys = e.project(&obs.h);
    let mut order: Vec<usize> = (0..m).collect();
    // Stable sort keeps duplicate projections in member-index order.
    order.sort_by(|&a, &b| ys[a].partial_cmp(&ys[b]).unwrap().then(a.cmp(&b)));
    let sy: Vec<f64> = order.iter().map(|&i| ys[i]).collect();

    let mean = ys.iter().sum::<f64>() / m as f64;
    let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / (m as f64 - 1.0);
    if var < 1e-300 {
        return Ok(());
    }
    let sd = var.sqrt();
    let srr = obs.r.sqrt();
    let unit = 1.0 / (m as f64 + 1.0);

    // Tail Gaussians scaled to carry mass 1/(M+1) outside the extremes.
    let gamma_l = unit / ndtr((sy[0] - mean) / sd).max(1e-300);
    let gamma_r = unit / ndtr(-(sy[m - 1] - mean) / sd).max(1e-300);
    // Product of the tail Gaussian with the likelihood.
    let s2p = var * obs.r / (var + obs.r);
    let sp = s2p.sqrt();
    let mp = (mean * obs.r + obs.y * var) / (var + obs.r);
    let dm = mean - obs.y;
    let c_lr = (-0.5 * dm * dm / (var + obs.r)).exp()
        / (2.0 * std::f64::consts::PI * (var + obs.r)).sqrt();

    let mut mass = vec![0.0; m + 1];
    mass[0] = gamma_l * c_lr * ndtr((sy[0] - mp) / sp);
    for j in 1..m {
        let a = sy[j - 1];
        let b = sy[j];
        let w = b - a;
        mass[j] = if w > 1e-300 {
            unit * (ndtr((b - obs.y) / srr) - ndtr((a - obs.y) / srr)) / w
        } else {
            let d = a - obs.y;
            unit * (-0.5 * d * d / obs.r).exp() / (2.0 * std::f64::consts::PI * obs.r).sqrt()
        };
    }
    mass[m] = gamma_r * c_lr * ndtr(-(sy[m - 1] - mp) / sp);

    let tot: f64 = mass.iter().sum();
    if !(tot.is_finite() && tot > 0.0) {
        return Err(Error::non_finite("rank histogram posterior mass"));
    }
    for w in &mut mass {
        *w /= tot;
    }
    let g_lc = gamma_l * c_lr / tot;
    let g_rc = gamma_r * c_lr / tot;

    let mut cum = vec![0.0; m + 2];
    for k in 0..=m {
        cum[k + 1] = cum[k] + mass[k];
    }

    let mut dy = vec![0.0; m];
    let mut region = 0usize;
    for j in 0..m {
        let q = (j as f64 + 1.0) * unit;
        while region < m && cum[region + 1] < q {
            region += 1;
        }
        let newy = if region == 0 {
            mp + sp * ndtri((q / g_lc).clamp(1e-300, 1.0 - 1e-16))
        } else if region == m {
            let inner = (q - cum[m]) / g_rc + ndtr((sy[m - 1] - mp) / sp);
            mp + sp * ndtri(inner.clamp(1e-300, 1.0 - 1e-16))
        } else {
            let a = sy[region - 1];
            let b = sy[region];
            if mass[region] > 0.0 {
                a + (q - cum[region]) / mass[region] * (b - a)
            } else {
                a
            }
        };
        dy[order[j]] = newy - sy[j];
    }

    // Linear regression of observation-space increments onto the state.
    let hv = DVector::from_column_slice(&obs.h);
    let p = e.covariance();
    let g = &p * &hv;
    let hph = g.dot(&hv);
    if hph <= 0.0 {
        return Ok(());
    }
    for i in 0..m {
        let f = dy[i] / hph;
        for (c, v) in e.member_mut(i).iter_mut().enumerate() {
            *v += f * g[c];
        }
    }
    if !e.is_finite() {
        return Err(Error::non_finite("rank histogram update"));
    }
    Ok(())
}

/// Mixture transport analysis: delegates to the pseudo-time flow with the
/// configured fitting policy.
pub fn egmf_step(
    e: &mut Ensemble,
    obs_list: &[Observation],
    fitter: &Fitter,
    cfg: &AnalysisConfig,
    rng: &mut Rng,
) -> Result<AnalysisStats> {
    analysis_step(e, obs_list, fitter, cfg, rng)
}

/// One combined model-plus-assimilation Euler step for the underdamped
/// Langevin system observed through position increments `dq_obs` over `dt`.
///
/// Both the model drift and the assimilation fields are evaluated at the
/// pre-step ensemble, matching a single Euler discretisation of the combined
/// dynamics; the assimilation substitutes `y = v`, `y_obs = dq_obs/dt`,
/// `r = c/dt` and advances one unit pseudo-time step.
pub fn langevin_combined_step(
    e: &mut Ensemble,
    dq_obs: f64,
    dt: f64,
    model: &Langevin,
    c: f64,
    fitter: &Fitter,
    cfg: &AnalysisConfig,
    rng: &mut Rng,
) -> Result<AnalysisStats> {
    if e.dim() != 2 {
        return Err(Error::Dimension("combined step needs (q, v) states".into()));
    }
    if !(c > 0.0) {
        return Err(Error::Config("observation noise intensity must be positive".into()));
    }
    let obs = Observation {
        h: vec![0.0, 1.0],
        y: dq_obs / dt,
        r: c / dt,
    };
    let m = e.size();
    let mut stats = AnalysisStats::default();

    // Assimilation displacement from the pre-step ensemble.
    let mix = match fitter {
        Fitter::FixedL(1) => GaussianMixture::from_moments(e),
        Fitter::FixedL(l) => crate::mixture::em_fit(e, *l, &cfg.em, None)?,
        Fitter::SignPolicy { coord } => {
            let vals: Vec<f64> = (0..m).map(|i| e.member(i)[*coord]).collect();
            if crate::mixture::l_policy_double_well(&vals) == 1 {
                GaussianMixture::from_moments(e)
            } else {
                crate::mixture::em_fit(e, 2, &cfg.em, None)?
            }
        }
        Fitter::Kde { c: bw, .. } => crate::mixture::kde_mixture(e, *bw)?,
    };
    let l_count = mix.len();
    stats.l_entry = l_count;
    stats.used_multi = l_count > 1;
    let ctx = ObsContext::new(&mix, &obs);
    let beta = if l_count == 1 {
        nalgebra::DMatrix::from_element(m, 1, 1.0)
    } else {
        let mode = if cfg.full_state_resp {
            crate::mixture::RespMode::FullState
        } else {
            crate::mixture::RespMode::Observed { h: &obs.h }
        };
        crate::mixture::responsibilities(&mix, e, mode)?.0
    };
    let vs = e.project(&obs.h);
    let mut disp = nalgebra::DMatrix::<f64>::zeros(2, m);
    let mut field = DVector::<f64>::zeros(2);
    let mut beta_row = vec![0.0; l_count];
    for i in 0..m {
        for l in 0..l_count {
            beta_row[l] = beta[(i, l)];
        }
        field.fill(0.0);
        contraction_field(&ctx, &beta_row, vs[i], &mut field);
        disp[(0, i)] += field[0];
        disp[(1, i)] += field[1];
        if l_count > 1 {
            field.fill(0.0);
            match cfg.exchange {
                ExchangeVariant::Erf => exchange_field_erf(&ctx, &beta_row, vs[i], &mut field),
                ExchangeVariant::T3 => exchange_field_t3(&ctx, &beta_row, vs[i], &mut field),
            }
            clip_field(&mut field, cfg.u_cut);
            disp[(0, i)] += field[0];
            disp[(1, i)] += field[1];
        }
    }

    // Model part, also from the pre-step states, with member noise drawn in
    // member order.
    let sdt = dt.sqrt();
    let sig = model.sigma2.sqrt();
    for i in 0..m {
        let xi: f64 = rng.sample::<f64, _>(StandardNormal);
        let x = e.member_mut(i);
        let (q, v) = (x[0], x[1]);
        let (fq, fv) = crate::dynamics::langevin_drift(q, v, model.gamma);
        x[0] = q + dt * fq + disp[(0, i)];
        x[1] = v + dt * fv + sdt * sig * xi + disp[(1, i)];
    }
    if !e.is_finite() {
        return Err(Error::non_finite("combined Langevin step"));
    }
    Ok(stats)
}

/// Ensemble Kalman-Bucy step for increment observations: the single
/// component form of [`langevin_combined_step`], i.e.
/// `dq_i = v_i dt - (P_qv / 2c)(v_i dt + vbar dt - 2 dq_obs)` and
/// `dv_i = (-V'(q_i) - gamma v_i) dt + sigma dw_i - (P_vv / 2c)(...)`,
/// with covariances from the pre-step ensemble.
pub fn kalman_bucy_step(
    e: &mut Ensemble,
    dq_obs: f64,
    dt: f64,
    model: &Langevin,
    c: f64,
    rng: &mut Rng,
) -> Result<()> {
    let cfg = AnalysisConfig {
        ds: 1.0,
        u_cut: f64::INFINITY,
        scheme: ContractionScheme::Euler,
        update: MixtureUpdate::Refit,
        ..AnalysisConfig::default()
    };
    langevin_combined_step(e, dq_obs, dt, model, c, &Fitter::FixedL(1), &cfg, rng)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamId};
    use approx::assert_relative_eq;

    fn obs1(y: f64, r: f64) -> Observation {
        Observation {
            h: vec![1.0],
            y,
            r,
        }
    }

    fn gaussian_ensemble(m: usize, mean: f64, sd: f64, seed: u64) -> Ensemble {
        let mut rng = stream(seed, StreamId::Truth);
        let xs: Vec<f64> = (0..m)
            .map(|_| mean + sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ensemble::from_rows(&xs)
    }

    #[test]
    fn po_update_hand_value() {
        // Members {1, 2, 3}: sample variance 1, gain 1/2; the middle member
        // with zero perturbed innovation target moves 2 -> 1.
        let mut e = Ensemble::from_rows(&[1.0, 2.0, 3.0]);
        enkf_po_update(&mut e, &obs1(0.0, 1.0), &[0.0, 0.0, 0.0]).unwrap();
        assert_relative_eq!(e.member(1)[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(e.member(0)[0], 0.5, epsilon = 1e-14);
        assert_relative_eq!(e.member(2)[0], 1.5, epsilon = 1e-14);
    }

    #[test]
    fn po_zero_spread_is_identity() {
        let mut e = Ensemble::from_rows(&[1.0, 1.0, 1.0]);
        let before = e.clone();
        let mut rng = stream(0, StreamId::Filter(0));
        enkf_po_step(&mut e, &obs1(5.0, 1.0), &mut rng).unwrap();
        assert_eq!(e, before);
    }

    #[test]
    fn po_huge_observation_noise_barely_moves() {
        let mut e = gaussian_ensemble(10, 0.0, 1.0, 14);
        let before = e.clone();
        let mut rng = stream(14, StreamId::Filter(0));
        enkf_po_step(&mut e, &obs1(0.5, 1e12), &mut rng).unwrap();
        // Gain ~ P/R and the drawn perturbation has std sqrt(R), so the
        // displacement scale is P/sqrt(R) = 1e-6 times a standard normal.
        let max_disp = (0..10)
            .map(|i| (e.member(i)[0] - before.member(i)[0]).abs())
            .fold(0.0f64, f64::max);
        assert!(max_disp < 1e-5, "max displacement {max_disp}");
    }

    #[test]
    fn esrf_consensus_on_observation_unchanged() {
        let mut e = Ensemble::from_rows(&[2.0, 2.0, 2.0, 2.0]);
        let before = e.clone();
        esrf_continuous_step(&mut e, &obs1(2.0, 1.0), 0.05, ContractionScheme::Euler).unwrap();
        for i in 0..4 {
            assert_relative_eq!(e.member(i)[0], before.member(i)[0], epsilon = 1e-12);
        }
    }

    #[test]
    fn esrf_reaches_kalman_covariance() {
        let mut e = gaussian_ensemble(300, 1.0, 2.0, 15);
        let p0 = e.covariance()[(0, 0)];
        let r = 3.0;
        esrf_continuous_step(&mut e, &obs1(0.0, r), 1e-3, ContractionScheme::Euler).unwrap();
        let exact = 1.0 / (1.0 / p0 + 1.0 / r);
        assert_relative_eq!(e.covariance()[(0, 0)], exact, max_relative = 1e-2);
    }

    #[test]
    fn esrf_deterministic_repeat() {
        let e0 = gaussian_ensemble(40, -1.0, 1.5, 16);
        let mut e1 = e0.clone();
        let mut e2 = e0.clone();
        esrf_continuous_step(&mut e1, &obs1(1.0, 2.0), 0.05, ContractionScheme::Euler).unwrap();
        esrf_continuous_step(&mut e2, &obs1(1.0, 2.0), 0.05, ContractionScheme::Euler).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn esrf_equals_single_component_transport() {
        let e0 = gaussian_ensemble(50, 0.5, 1.2, 17);
        let obs = obs1(-0.5, 1.5);
        let mut e1 = e0.clone();
        esrf_continuous_step(&mut e1, &obs, 0.05, ContractionScheme::Euler).unwrap();
        let mut e2 = e0.clone();
        let cfg = AnalysisConfig::default();
        let mut rng = stream(17, StreamId::Filter(1));
        egmf_step(&mut e2, &[obs.clone()], &Fitter::FixedL(1), &cfg, &mut rng).unwrap();
        let max_dev = (0..50)
            .map(|i| (e1.member(i)[0] - e2.member(i)[0]).abs())
            .fold(0.0f64, f64::max);
        assert!(max_dev < 1e-12, "max deviation {max_dev}");
    }

    #[test]
    fn rhf_flat_likelihood_is_identity() {
        let mut e = gaussian_ensemble(30, 0.0, 1.0, 18);
        let before = e.clone();
        rhf_step(&mut e, &obs1(0.3, 1e12)).unwrap();
        let max_disp = (0..30)
            .map(|i| (e.member(i)[0] - before.member(i)[0]).abs())
            .fold(0.0f64, f64::max);
        assert!(max_disp < 1e-6, "max displacement {max_disp}");
    }

    #[test]
    fn rhf_preserves_member_order() {
        let mut e = gaussian_ensemble(50, 1.0, 2.0, 19);
        let before_order: Vec<usize> = {
            let ys = e.project(&[1.0]);
            let mut idx: Vec<usize> = (0..50).collect();
            idx.sort_by(|&a, &b| ys[a].partial_cmp(&ys[b]).unwrap());
            idx
        };
        rhf_step(&mut e, &obs1(-1.0, 0.5)).unwrap();
        let ys = e.project(&[1.0]);
        for w in before_order.windows(2) {
            assert!(
                ys[w[0]] <= ys[w[1]] + 1e-12,
                "order broken: {} vs {}",
                ys[w[0]],
                ys[w[1]]
            );
        }
    }

    #[test]
    fn rhf_large_ensemble_matches_kalman_mean() {
        let mut e = gaussian_ensemble(2000, 0.0, 1.0, 20);
        let mu0 = e.mean()[0];
        let p0 = e.covariance()[(0, 0)];
        let y = 1.0;
        let r = 1.0;
        rhf_step(&mut e, &obs1(y, r)).unwrap();
        let kalman = mu0 + p0 / (p0 + r) * (y - mu0);
        assert!(
            (e.mean()[0] - kalman).abs() < 0.05,
            "mean {} vs kalman {kalman}",
            e.mean()[0]
        );
    }

    #[test]
    fn rhf_regresses_unobserved_coordinates() {
        // Two correlated coordinates, observation on the first; the second
        // must move by the regression ratio P_21/P_11.
        let mut rng = stream(21, StreamId::Truth);
        let members: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let a: f64 = rng.sample::<f64, _>(StandardNormal);
                let b: f64 = rng.sample::<f64, _>(StandardNormal);
                vec![a, 0.8 * a + 0.2 * b]
            })
            .collect();
        let mut e = Ensemble::from_members(&members).unwrap();
        let p = e.covariance();
        let ratio = p[(0, 1)] / p[(0, 0)];
        let before = e.clone();
        rhf_step(
            &mut e,
            &Observation {
                h: vec![1.0, 0.0],
                y: 2.0,
                r: 0.5,
            },
        )
        .unwrap();
        for i in 0..e.size() {
            let dy = e.member(i)[0] - before.member(i)[0];
            let dz = e.member(i)[1] - before.member(i)[1];
            assert_relative_eq!(dz, ratio * dy, epsilon = 1e-10);
        }
    }

    #[test]
    fn deterministic_filters_contract_mean_toward_observation() {
        for seed in 0..5 {
            let e0 = gaussian_ensemble(40, 2.0, 1.0, 100 + seed);
            let obs = obs1(-1.0, 2.0);
            let prior_gap = (e0.mean()[0] - obs.y).abs();

            let mut e = e0.clone();
            esrf_continuous_step(&mut e, &obs, 0.05, ContractionScheme::Euler).unwrap();
            assert!((e.mean()[0] - obs.y).abs() <= prior_gap + 1e-12);

            let mut e = e0.clone();
            rhf_step(&mut e, &obs).unwrap();
            assert!((e.mean()[0] - obs.y).abs() <= prior_gap + 1e-9);

            let mut e = e0.clone();
            let cfg = AnalysisConfig::default();
            let mut rng = stream(seed, StreamId::Filter(3));
            egmf_step(&mut e, &[obs.clone()], &Fitter::FixedL(1), &cfg, &mut rng).unwrap();
            assert!((e.mean()[0] - obs.y).abs() <= prior_gap + 1e-12);
        }
    }

    fn langevin_ensemble(m: usize, q0: f64, seed: u64) -> Ensemble {
        let mut rng = stream(seed, StreamId::Truth);
        let members: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                let a: f64 = rng.sample::<f64, _>(StandardNormal);
                let b: f64 = rng.sample::<f64, _>(StandardNormal);
                vec![q0 + 0.3 * a, 0.5 * b]
            })
            .collect();
        Ensemble::from_members(&members).unwrap()
    }

    #[test]
    fn kalman_bucy_zero_covariance_is_pure_model_step() {
        // Consensus ensemble: both covariances vanish, so the combined step
        // must equal a plain Euler-Maruyama step with the same noise.
        let model = Langevin {
            gamma: 0.25,
            sigma2: 0.35,
        };
        let members = vec![vec![1.2, 0.4]; 6];
        let mut e = Ensemble::from_members(&members).unwrap();
        let dt = 0.01;
        let mut rng = stream(30, StreamId::Filter(0));
        kalman_bucy_step(&mut e, 0.7, dt, &model, 0.2, &mut rng).unwrap();
        let mut rng2 = stream(30, StreamId::Filter(0));
        let (fq, fv) = crate::dynamics::langevin_drift(1.2, 0.4, model.gamma);
        for i in 0..6 {
            let xi: f64 = rng2.sample::<f64, _>(StandardNormal);
            let q = 1.2 + dt * fq;
            let v = 0.4 + dt * fv + dt.sqrt() * model.sigma2.sqrt() * xi;
            assert_relative_eq!(e.member(i)[0], q, epsilon = 1e-14);
            assert_relative_eq!(e.member(i)[1], v, epsilon = 1e-14);
        }
    }

    #[test]
    fn kalman_bucy_consensus_increment_match_leaves_assimilation_silent() {
        // All members share v with v dt = dq_obs: every innovation bracket
        // v_i dt + vbar dt - 2 dq_obs vanishes.
        let model = Langevin {
            gamma: 0.25,
            sigma2: 0.0,
        };
        let members: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.5, 0.8]).collect();
        let mut e = Ensemble::from_members(&members).unwrap();
        let dt = 0.01;
        let dq = 0.8 * dt;
        let mut rng = stream(31, StreamId::Filter(0));
        kalman_bucy_step(&mut e, dq, dt, &model, 0.2, &mut rng).unwrap();
        for (i, x0) in members.iter().enumerate() {
            let (fq, fv) = crate::dynamics::langevin_drift(x0[0], x0[1], model.gamma);
            assert_relative_eq!(e.member(i)[0], x0[0] + dt * fq, epsilon = 1e-13);
            assert_relative_eq!(e.member(i)[1], x0[1] + dt * fv, epsilon = 1e-13);
        }
    }

    #[test]
    fn kalman_bucy_matches_printed_equations() {
        let model = Langevin {
            gamma: 0.25,
            sigma2: 0.35,
        };
        let e0 = langevin_ensemble(20, 1.0, 32);
        let dt = 0.01;
        let dq = 0.012;
        let c = 0.2;
        let mut e = e0.clone();
        let mut rng = stream(32, StreamId::Filter(0));
        kalman_bucy_step(&mut e, dq, dt, &model, c, &mut rng).unwrap();

        // Direct transcription of the update equations.
        let p = e0.covariance();
        let (pqv, pvv) = (p[(0, 1)], p[(1, 1)]);
        let vbar = e0.mean()[1];
        let mut rng2 = stream(32, StreamId::Filter(0));
        for i in 0..20 {
            let xi: f64 = rng2.sample::<f64, _>(StandardNormal);
            let (q, v) = (e0.member(i)[0], e0.member(i)[1]);
            let bracket = v * dt + vbar * dt - 2.0 * dq;
            let qn = q + v * dt - pqv / (2.0 * c) * bracket;
            let vn = v + (crate::dynamics::double_well_drift(q) - model.gamma * v) * dt
                + dt.sqrt() * model.sigma2.sqrt() * xi
                - pvv / (2.0 * c) * bracket;
            assert_relative_eq!(e.member(i)[0], qn, epsilon = 1e-13);
            assert_relative_eq!(e.member(i)[1], vn, epsilon = 1e-13);
        }
    }

    #[test]
    fn single_component_transport_reduces_to_kalman_bucy() {
        let model = Langevin {
            gamma: 0.25,
            sigma2: 0.35,
        };
        // Ensemble entirely in the right well: the sign policy chooses one
        // component, so the mixture filter must reproduce the Kalman-Bucy
        // step through the same code path and noise stream.
        let e0 = langevin_ensemble(25, 1.5, 33);
        let dt = 0.01;
        let dq = -0.004;
        let c = 0.2;
        let cfg = AnalysisConfig {
            ds: 1.0,
            u_cut: 0.25,
            scheme: ContractionScheme::Euler,
            ..AnalysisConfig::default()
        };
        let mut e1 = e0.clone();
        let mut rng1 = stream(33, StreamId::Filter(0));
        let stats = langevin_combined_step(
            &mut e1,
            dq,
            dt,
            &model,
            c,
            &Fitter::SignPolicy { coord: 0 },
            &cfg,
            &mut rng1,
        )
        .unwrap();
        assert_eq!(stats.l_entry, 1);
        let mut e2 = e0.clone();
        let mut rng2 = stream(33, StreamId::Filter(0));
        kalman_bucy_step(&mut e2, dq, dt, &model, c, &mut rng2).unwrap();
        let max_dev = (0..25)
            .map(|i| {
                (e1.member(i)[0] - e2.member(i)[0])
                    .abs()
                    .max((e1.member(i)[1] - e2.member(i)[1]).abs())
            })
            .fold(0.0f64, f64::max);
        assert!(max_dev < 1e-12, "max deviation {max_dev}");
    }
}
