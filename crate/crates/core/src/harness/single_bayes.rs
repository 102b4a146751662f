//! One Bayes update of a bimodal Gaussian prior, where the exact posterior
//! is available in closed form and filter ensembles can be scored against
//! it directly.

use super::config::{ExperimentConfig, FilterName};
use super::{CsvTable, FilterOutcome, RunReport};
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::filters::{self, ndtr};
use crate::mixture::GaussianMixture;
use crate::rng::{stream, StreamId};
use crate::transport::{
    analysis_step, AnalysisConfig, ContractionScheme, ExchangeVariant, Fitter, MixtureUpdate,
    Observation,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use std::f64::consts::PI;

const BIN_LO: f64 = -10.0;
const BIN_HI: f64 = 10.0;
const BIN_W: f64 = 0.25;
const N_BINS: usize = ((BIN_HI - BIN_LO) / BIN_W) as usize;

/// The study prior: equal-weight unit-variance components at -pi and pi.
pub fn single_bayes_prior() -> GaussianMixture {
    GaussianMixture {
        weights: vec![0.5, 0.5],
        means: vec![
            DVector::from_element(1, -PI),
            DVector::from_element(1, PI),
        ],
        covs: vec![
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        ],
    }
}

/// Exact posterior of a 1-D Gaussian mixture under a scalar linear-Gaussian
/// observation: each component gets the conjugate update, each weight is
/// multiplied by the component's evidence, and the weights are renormalized.
pub fn analytic_posterior_1d(prior: &GaussianMixture, obs: &Observation) -> Result<GaussianMixture> {
    if prior.dim() != 1 || obs.h.len() != 1 {
        return Err(Error::Dimension(
            "analytic posterior needs a scalar state".into(),
        ));
    }
    let h = obs.h[0];
    let mut post = prior.clone();
    for l in 0..prior.len() {
        let m = prior.means[l][0];
        let s2 = prior.covs[l][(0, 0)];
        let evid_var = h * h * s2 + obs.r;
        let innov = obs.y - h * m;
        post.means[l][0] = m + s2 * h * innov / evid_var;
        post.covs[l][(0, 0)] = s2 * obs.r / evid_var;
        post.weights[l] = prior.weights[l]
            * (-0.5 * innov * innov / evid_var).exp()
            / (2.0 * PI * evid_var).sqrt();
    }
    let total: f64 = post.weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DensityUnderflow(
            "all posterior component weights vanished".into(),
        ));
    }
    for w in &mut post.weights {
        *w /= total;
    }
    Ok(post)
}

fn bin_masses(mix: &GaussianMixture) -> [f64; N_BINS] {
    let mut masses = [0.0; N_BINS];
    for l in 0..mix.len() {
        let m = mix.means[l][0];
        let s = mix.covs[l][(0, 0)].sqrt();
        let w = mix.weights[l];
        for (b, mass) in masses.iter_mut().enumerate() {
            let lo = BIN_LO + b as f64 * BIN_W;
            let hi = lo + BIN_W;
            *mass += w * (ndtr((hi - m) / s) - ndtr((lo - m) / s));
        }
    }
    masses
}

/// Half the summed absolute difference between the sample's bin masses and
/// the mixture's, on bins of width 0.25 spanning [-10, 10]. Samples outside
/// the span are ignored, like the mixture's own negligible outside mass.
pub fn histogram_l1(samples: &[f64], mix: &GaussianMixture) -> f64 {
    let target = bin_masses(mix);
    let mut counts = [0usize; N_BINS];
    for &x in samples {
        if (BIN_LO..BIN_HI).contains(&x) {
            counts[((x - BIN_LO) / BIN_W) as usize] += 1;
        }
    }
    let inv = 1.0 / samples.len() as f64;
    let mut l1 = 0.0;
    for b in 0..N_BINS {
        l1 += (counts[b] as f64 * inv - target[b]).abs();
    }
    0.5 * l1
}

fn sample_prior(m: usize, rng: &mut crate::rng::Rng) -> Ensemble {
    let xs: Vec<f64> = (0..m)
        .map(|_| {
            let center = if rng.gen::<f64>() < 0.5 { PI } else { -PI };
            center + rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    Ensemble::from_rows(&xs)
}

pub(crate) fn run(
    cfg: &ExperimentConfig,
    seed: u64,
    artifacts: Option<&mut Vec<CsvTable>>,
) -> Result<RunReport> {
    let obs = Observation {
        h: vec![1.0],
        y: PI,
        r: cfg.r,
    };
    let posterior = analytic_posterior_1d(&single_bayes_prior(), &obs)?;
    let mut init_rng = stream(seed, StreamId::Init(0));
    let prior_ensemble = sample_prior(cfg.m, &mut init_rng);

    let mut outcomes = Vec::with_capacity(cfg.filters.len());
    let mut densities: Vec<(String, [f64; N_BINS])> = Vec::new();
    for (fi, spec) in cfg.filters.iter().enumerate() {
        let mut e = prior_ensemble.clone();
        let mut rng = stream(seed, StreamId::Filter(fi as u64));
        match spec.name {
            FilterName::Egmf => {
                let acfg = AnalysisConfig {
                    ds: spec.ds.unwrap_or(0.05),
                    u_cut: spec.u_cut.unwrap_or(25.0),
                    exchange: exchange_variant(spec.variant.as_deref()),
                    scheme: ContractionScheme::Euler,
                    update: MixtureUpdate::ParamFlow,
                    ..AnalysisConfig::default()
                };
                analysis_step(
                    &mut e,
                    std::slice::from_ref(&obs),
                    &Fitter::FixedL(2),
                    &acfg,
                    &mut rng,
                )?;
            }
            FilterName::Rhf => filters::rhf_step(&mut e, &obs)?,
            FilterName::EnkfPo => filters::enkf_po_step(&mut e, &obs, &mut rng)?,
            FilterName::Esrf => filters::esrf_continuous_step(
                &mut e,
                &obs,
                spec.ds.unwrap_or(0.05),
                ContractionScheme::Euler,
            )?,
            FilterName::KalmanBucy => unreachable!("rejected by config validation"),
        }
        let samples: Vec<f64> = (0..e.size()).map(|i| e.member(i)[0]).collect();
        let l1 = histogram_l1(&samples, &posterior);
        let mut outcome = FilterOutcome::new(spec.name.to_string(), cfg.m, cfg.r, l1);
        outcome.posterior_l1 = Some(l1);
        outcomes.push(outcome);
        if artifacts.is_some() {
            let mut counts = [0.0; N_BINS];
            for &x in &samples {
                if (BIN_LO..BIN_HI).contains(&x) {
                    counts[((x - BIN_LO) / BIN_W) as usize] += 1.0;
                }
            }
            for c in &mut counts {
                *c /= cfg.m as f64 * BIN_W;
            }
            densities.push((spec.name.to_string(), counts));
        }
    }

    if let Some(tables) = artifacts {
        for (name, dens) in &densities {
            let mut t = CsvTable::new(format!("density_{name}"), "x,p");
            for (b, p) in dens.iter().enumerate() {
                let x = BIN_LO + (b as f64 + 0.5) * BIN_W;
                t.rows.push(format!("{x},{p}"));
            }
            tables.push(t);
        }
        let analytic = bin_masses(&posterior);
        let mut t = CsvTable::new("density_analytic", "x,p");
        for (b, mass) in analytic.iter().enumerate() {
            let x = BIN_LO + (b as f64 + 0.5) * BIN_W;
            t.rows.push(format!("{x},{}", mass / BIN_W));
        }
        tables.push(t);
    }

    Ok(RunReport { seed, outcomes })
}

fn exchange_variant(name: Option<&str>) -> ExchangeVariant {
    match name {
        Some("t3") => ExchangeVariant::T3,
        _ => ExchangeVariant::Erf,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pi_obs() -> Observation {
        Observation {
            h: vec![1.0],
            y: PI,
            r: 16.0,
        }
    }

    #[test]
    fn conjugate_posterior_of_the_study_prior() {
        let post = analytic_posterior_1d(&single_bayes_prior(), &pi_obs()).unwrap();
        assert_relative_eq!(post.means[0][0], -2.7720, epsilon = 1e-4);
        assert_relative_eq!(post.means[1][0], PI, epsilon = 1e-12);
        for l in 0..2 {
            assert_relative_eq!(post.covs[l][(0, 0)], 16.0 / 17.0, epsilon = 1e-12);
        }
        assert_relative_eq!(post.weights[0], 0.2385, epsilon = 1e-4);
        assert_relative_eq!(post.weights[1], 0.7615, epsilon = 1e-4);
    }

    #[test]
    fn infinite_noise_leaves_the_prior() {
        let obs = Observation {
            h: vec![1.0],
            y: 2.0,
            r: 1e14,
        };
        let prior = single_bayes_prior();
        let post = analytic_posterior_1d(&prior, &obs).unwrap();
        for l in 0..2 {
            assert_relative_eq!(post.means[l][0], prior.means[l][0], epsilon = 1e-9);
            assert_relative_eq!(post.covs[l][(0, 0)], 1.0, epsilon = 1e-9);
            assert_relative_eq!(post.weights[l], 0.5, epsilon = 1e-9);
        }
    }

    #[test]
    fn single_component_is_the_scalar_kalman_update() {
        let prior = GaussianMixture {
            weights: vec![1.0],
            means: vec![DVector::from_element(1, 1.0)],
            covs: vec![DMatrix::from_element(1, 1, 4.0)],
        };
        let obs = Observation {
            h: vec![1.0],
            y: 3.0,
            r: 2.0,
        };
        let post = analytic_posterior_1d(&prior, &obs).unwrap();
        // K = 4/6, mean = 1 + K*2 = 7/3, var = 4*2/6 = 4/3.
        assert_relative_eq!(post.means[0][0], 7.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(post.covs[0][(0, 0)], 4.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(post.weights[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn histogram_distance_of_exact_samples_is_small() {
        let post = analytic_posterior_1d(&single_bayes_prior(), &pi_obs()).unwrap();
        let mut rng = stream(3, StreamId::Truth);
        let samples: Vec<f64> = (0..200_000)
            .map(|_| {
                let l = if rng.gen::<f64>() < post.weights[0] { 0 } else { 1 };
                post.means[l][0]
                    + post.covs[l][(0, 0)].sqrt() * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let l1 = histogram_l1(&samples, &post);
        assert!(l1 < 0.01, "exact-sampler histogram distance {l1}");
    }

    #[test]
    fn run_is_deterministic() {
        let mut cfg = ExperimentConfig::default_single_bayes();
        cfg.m = 80;
        cfg.seeds = vec![5];
        let a = run(&cfg, 5, None).unwrap();
        let b = run(&cfg, 5, None).unwrap();
        for (x, y) in a.outcomes.iter().zip(&b.outcomes) {
            assert_eq!(x.rms, y.rms);
        }
    }
}
