//! Underdamped Langevin particle observed through noisy position
//! increments, assimilated at every model step by combined
//! model-plus-analysis updates.

use super::config::{ExperimentConfig, FilterName};
use super::{CsvTable, FilterOutcome, RunReport};
use crate::dynamics::{langevin_drift, propagate_ensemble, Langevin};
use crate::ensemble::Ensemble;
use crate::error::Result;
use crate::filters::{kalman_bucy_step, langevin_combined_step, rhf_step};
use crate::rng::{member_streams, stream, Rng, StreamId};
use crate::transport::{
    AnalysisConfig, ContractionScheme, ExchangeVariant, Fitter, MixtureUpdate, Observation,
};
use rand::Rng as _;
use rand_distr::StandardNormal;

const GAMMA: f64 = 0.25;
const SIGMA2: f64 = 0.35;

struct FilterState {
    name: FilterName,
    acfg: AnalysisConfig,
    ensemble: Ensemble,
    member_rngs: Vec<Rng>,
    filter_rng: Rng,
    sq_q: f64,
    sq_v: f64,
    multi_events: usize,
}

pub(crate) fn run(
    cfg: &ExperimentConfig,
    seed: u64,
    artifacts: Option<&mut Vec<CsvTable>>,
) -> Result<RunReport> {
    let model = Langevin {
        gamma: GAMMA,
        sigma2: SIGMA2,
    };
    let c = cfg.r;
    let dt = cfg.dt;
    let sigma = SIGMA2.sqrt();
    let mut truth_rng = stream(seed, StreamId::Truth);
    let (mut qr, mut vr) = (1.0, 1.0);

    let mut states: Vec<FilterState> = cfg
        .filters
        .iter()
        .enumerate()
        .map(|(fi, spec)| {
            let mut init_rng = stream(seed, StreamId::Init(fi as u64));
            let members: Vec<Vec<f64>> = (0..cfg.m)
                .map(|_| {
                    vec![
                        qr + init_rng.sample::<f64, _>(StandardNormal),
                        vr + init_rng.sample::<f64, _>(StandardNormal),
                    ]
                })
                .collect();
            let acfg = AnalysisConfig {
                ds: spec.ds.unwrap_or(1.0),
                u_cut: spec.u_cut.unwrap_or(0.25),
                exchange: if spec.variant.as_deref() == Some("t3") {
                    ExchangeVariant::T3
                } else {
                    ExchangeVariant::Erf
                },
                scheme: ContractionScheme::Euler,
                update: MixtureUpdate::Refit,
                ..AnalysisConfig::default()
            };
            Ok(FilterState {
                name: spec.name,
                acfg,
                ensemble: Ensemble::from_members(&members)?,
                member_rngs: member_streams(seed, fi as u64, cfg.m),
                filter_rng: stream(seed, StreamId::Filter(fi as u64)),
                sq_q: 0.0,
                sq_v: 0.0,
                multi_events: 0,
            })
        })
        .collect::<Result<_>>()?;

    let record_every = (cfg.horizon / 2000).max(1);
    let record = artifacts.is_some();
    let mut trajectory: Vec<Vec<f64>> = Vec::new();
    for k in 0..cfg.horizon {
        // Increment observation from the pre-step truth, then the truth step.
        let dq = vr * dt + (c * dt).sqrt() * truth_rng.sample::<f64, _>(StandardNormal);
        let (fq, fv) = langevin_drift(qr, vr, GAMMA);
        qr += dt * fq;
        vr += dt * fv + dt.sqrt() * sigma * truth_rng.sample::<f64, _>(StandardNormal);

        let mut row = vec![(k + 1) as f64 * dt, qr, vr];
        for st in &mut states {
            match st.name {
                FilterName::Egmf => {
                    let stats = langevin_combined_step(
                        &mut st.ensemble,
                        dq,
                        dt,
                        &model,
                        c,
                        &Fitter::SignPolicy { coord: 0 },
                        &st.acfg,
                        &mut st.filter_rng,
                    )?;
                    if stats.l_entry > 1 {
                        st.multi_events += 1;
                    }
                }
                FilterName::KalmanBucy => {
                    kalman_bucy_step(&mut st.ensemble, dq, dt, &model, c, &mut st.filter_rng)?
                }
                FilterName::Rhf => {
                    propagate_ensemble(&model, &mut st.ensemble, 1, dt, &mut st.member_rngs)?;
                    let obs = Observation {
                        h: vec![0.0, 1.0],
                        y: dq / dt,
                        r: c / dt,
                    };
                    rhf_step(&mut st.ensemble, &obs)?;
                }
                _ => unreachable!("rejected by config validation"),
            }
            let mean = st.ensemble.mean();
            st.sq_q += (mean[0] - qr) * (mean[0] - qr);
            st.sq_v += (mean[1] - vr) * (mean[1] - vr);
            if record && k % record_every == 0 {
                row.push(mean[0]);
                row.push(mean[1]);
            }
        }
        if record && k % record_every == 0 {
            trajectory.push(row);
        }
    }

    let n = cfg.horizon as f64;
    let outcomes = states
        .iter()
        .map(|st| {
            let rms = ((st.sq_q + st.sq_v) / (2.0 * n)).sqrt();
            let mut o = FilterOutcome::new(st.name.to_string(), cfg.m, cfg.r, rms);
            o.rms_truth = Some(rms);
            if st.name == FilterName::Egmf {
                o.l2_fraction = Some(st.multi_events as f64 / n);
            }
            o
        })
        .collect();

    if let Some(tables) = artifacts {
        let mut header = String::from("t,q_truth,v_truth");
        for st in &states {
            header.push_str(&format!(",q_{0},v_{0}", st.name));
        }
        let mut t = CsvTable::new("mean_trajectory", header);
        for row in &trajectory {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            t.rows.push(cells.join(","));
        }
        tables.push(t);
    }

    Ok(RunReport { seed, outcomes })
}
