//! Drift fields, steppers and synthetic-truth generation for the three test
//! systems: the 1-D double well, the 2-D underdamped Langevin oscillator in
//! the same potential, and Lorenz-63.

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::rng::Rng;
use rand::Rng as _;
use rand_distr::StandardNormal;

/// Maximum state dimension across supported models; lets steppers use stack
/// buffers in the per-member hot loop.
pub const MAX_DIM: usize = 4;

/// A diffusion process `dx = f(x) dt + diag(g) dW` with state-independent,
/// diagonal noise amplitudes.
pub trait Model: Sync {
    fn dim(&self) -> usize;
    /// Drift `f(x)` written into `out`.
    fn drift(&self, x: &[f64], out: &mut [f64]);
    /// Per-coordinate noise amplitudes `g` written into `out`.
    fn diffusion(&self, out: &mut [f64]);
}

/// `V(x) = cos(x) + 3/4 (x/6)^4`: two wells near +-pi with steep confining
/// walls that keep the process inside roughly [-10, 10].
pub fn double_well_potential(x: f64) -> f64 {
    let u = x / 6.0;
    x.cos() + 0.75 * u * u * u * u
}

/// `-V'(x) = sin(x) - x^3/432`.
pub fn double_well_drift(x: f64) -> f64 {
    x.sin() - x * x * x / 432.0
}

/// Overdamped diffusion in the double-well potential with unit noise
/// amplitude (diffusion coefficient 1/2).
#[derive(Debug, Clone, Copy)]
pub struct DoubleWell;

impl Model for DoubleWell {
    fn dim(&self) -> usize {
        1
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        out[0] = double_well_drift(x[0]);
    }
    fn diffusion(&self, out: &mut [f64]) {
        out[0] = 1.0;
    }
}

/// Underdamped Langevin dynamics in the double-well potential:
/// `dq = v dt`, `dv = (-V'(q) - gamma v) dt + sigma dW`.
#[derive(Debug, Clone, Copy)]
pub struct Langevin {
    pub gamma: f64,
    /// Noise variance rate; the amplitude on `v` is `sqrt(sigma2)`.
    pub sigma2: f64,
}

/// Drift of the Langevin system at `(q, v)`.
pub fn langevin_drift(q: f64, v: f64, gamma: f64) -> (f64, f64) {
    (v, double_well_drift(q) - gamma * v)
}

impl Model for Langevin {
    fn dim(&self) -> usize {
        2
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let (dq, dv) = langevin_drift(x[0], x[1], self.gamma);
        out[0] = dq;
        out[1] = dv;
    }
    fn diffusion(&self, out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = self.sigma2.sqrt();
    }
}

/// Deterministic Lorenz-63 system.
#[derive(Debug, Clone, Copy)]
pub struct Lorenz63 {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
}

impl Default for Lorenz63 {
    fn default() -> Self {
        Lorenz63 {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
        }
    }
}

/// Drift of Lorenz-63 at `(x, y, z)`.
pub fn lorenz63_drift(x: f64, y: f64, z: f64, p: &Lorenz63) -> (f64, f64, f64) {
    (
        p.sigma * (y - x),
        x * (p.rho - z) - y,
        x * y - p.beta * z,
    )
}

impl Model for Lorenz63 {
    fn dim(&self) -> usize {
        3
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let (dx, dy, dz) = lorenz63_drift(x[0], x[1], x[2], self);
        out[0] = dx;
        out[1] = dy;
        out[2] = dz;
    }
    fn diffusion(&self, out: &mut [f64]) {
        out[..self.dim()].fill(0.0);
    }
}

/// One forward Euler step `x + dt f(x)` in place.
pub fn step_euler(model: &dyn Model, x: &mut [f64], dt: f64) {
    let n = model.dim();
    let mut f = [0.0; MAX_DIM];
    model.drift(x, &mut f);
    for k in 0..n {
        x[k] += dt * f[k];
    }
}

/// One Euler-Maruyama step `x + dt f(x) + sqrt(dt) g xi` in place.
pub fn step_euler_maruyama(model: &dyn Model, x: &mut [f64], dt: f64, rng: &mut Rng) {
    let n = model.dim();
    let mut f = [0.0; MAX_DIM];
    let mut g = [0.0; MAX_DIM];
    model.drift(x, &mut f);
    model.diffusion(&mut g);
    let sdt = dt.sqrt();
    for k in 0..n {
        let xi: f64 = rng.sample::<f64, _>(StandardNormal);
        x[k] += dt * f[k] + sdt * g[k] * xi;
    }
}

/// Advance every ensemble member `steps` Euler-Maruyama steps of size `dt`.
///
/// Member `i` draws noise exclusively from `rngs[i]`, so results do not
/// depend on iteration order and stay reproducible under any scheduling.
pub fn propagate_ensemble(
    model: &dyn Model,
    ensemble: &mut Ensemble,
    steps: usize,
    dt: f64,
    rngs: &mut [Rng],
) -> Result<()> {
    let n = model.dim();
    if ensemble.dim() != n {
        return Err(Error::Dimension(format!(
            "ensemble dim {} vs model dim {}",
            ensemble.dim(),
            n
        )));
    }
    if rngs.len() != ensemble.size() {
        return Err(Error::Dimension(format!(
            "{} rng streams for {} members",
            rngs.len(),
            ensemble.size()
        )));
    }
    let m = ensemble.size();
    for i in 0..m {
        let mut x = [0.0; MAX_DIM];
        x[..n].copy_from_slice(ensemble.member(i));
        for _ in 0..steps {
            step_euler_maruyama(model, &mut x[..n], dt, &mut rngs[i]);
        }
        if x[..n].iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("member {i} after propagation")));
        }
        ensemble.member_mut(i).copy_from_slice(&x[..n]);
    }
    Ok(())
}

/// Truth trajectory and noisy scalar observations `y_k = h . x(t_k) + e_k`,
/// `e_k ~ N(0, r)`, taken every `steps_per_obs` model steps.
///
/// Returns the truth states at observation times and the observations.
pub fn synth_observations(
    model: &dyn Model,
    x0: &[f64],
    dt: f64,
    steps_per_obs: usize,
    n_obs: usize,
    h: &[f64],
    r: f64,
    rng: &mut Rng,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let n = model.dim();
    if x0.len() != n || h.len() != n {
        return Err(Error::Dimension("x0/h length vs model dim".into()));
    }
    let mut x = [0.0; MAX_DIM];
    x[..n].copy_from_slice(x0);
    let mut truths = Vec::with_capacity(n_obs);
    let mut obs = Vec::with_capacity(n_obs);
    let sr = r.sqrt();
    for _ in 0..n_obs {
        for _ in 0..steps_per_obs {
            step_euler_maruyama(model, &mut x[..n], dt, rng);
        }
        if x[..n].iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("truth trajectory"));
        }
        let hx: f64 = h.iter().zip(&x[..n]).map(|(a, b)| a * b).sum();
        let e: f64 = rng.sample::<f64, _>(StandardNormal);
        truths.push(x[..n].to_vec());
        obs.push(hx + sr * e);
    }
    Ok((truths, obs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamId};
    use approx::assert_relative_eq;

    #[test]
    fn potential_at_six() {
        // cos(6) + 0.75 * 1^4
        assert_relative_eq!(
            double_well_potential(6.0),
            1.7101702866503661,
            max_relative = 1e-12
        );
    }

    #[test]
    fn drift_at_pi_is_pure_confinement() {
        // sin(pi) = 0 up to rounding, leaving -pi^3/432
        assert_relative_eq!(
            double_well_drift(std::f64::consts::PI),
            -0.07177378861180512,
            epsilon = 1e-12
        );
    }

    #[test]
    fn drift_is_minus_potential_gradient() {
        let h = 1e-6;
        for &x in &[-7.3, -3.1, -0.4, 0.9, 3.2, 8.5] {
            let grad = (double_well_potential(x + h) - double_well_potential(x - h)) / (2.0 * h);
            assert_relative_eq!(double_well_drift(x), -grad, epsilon = 1e-7);
        }
    }

    #[test]
    fn langevin_drift_at_rest_point() {
        let (dq, dv) = langevin_drift(0.0, 1.0, 0.25);
        assert_relative_eq!(dq, 1.0);
        assert_relative_eq!(dv, -0.25, epsilon = 1e-15);
    }

    #[test]
    fn lorenz_drift_values() {
        let p = Lorenz63::default();
        let (dx, dy, dz) = lorenz63_drift(1.0, 1.0, 1.0, &p);
        assert_relative_eq!(dx, 0.0);
        assert_relative_eq!(dy, 26.0);
        assert_relative_eq!(dz, -5.0 / 3.0, max_relative = 1e-14);
    }

    #[test]
    fn lorenz_fixed_point() {
        let p = Lorenz63::default();
        let w = 72f64.sqrt();
        let (dx, dy, dz) = lorenz63_drift(w, w, 27.0, &p);
        assert!(dx.abs() < 1e-12 && dy.abs() < 1e-12 && dz.abs() < 1e-12);
    }

    #[test]
    fn euler_step_lorenz() {
        let p = Lorenz63::default();
        let mut x = [1.0, 1.0, 1.0];
        step_euler(&p, &mut x, 0.01);
        assert_relative_eq!(x[0], 1.0);
        assert_relative_eq!(x[1], 1.26);
        assert_relative_eq!(x[2], 1.0 - 0.05 / 3.0, max_relative = 1e-14);
    }

    #[test]
    fn euler_maruyama_increment_moments() {
        // From a fixed point of the deterministic part, increments are pure
        // noise: mean ~ drift*dt, variance ~ sigma^2 * dt.
        let model = DoubleWell;
        let mut rng = stream(11, StreamId::Truth);
        let x0 = 2.0;
        let dt = 0.01;
        let ndraw = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..ndraw {
            let mut x = [x0];
            step_euler_maruyama(&model, &mut x, dt, &mut rng);
            let d = x[0] - x0;
            sum += d;
            sumsq += d * d;
        }
        let mean = sum / ndraw as f64;
        let var = sumsq / ndraw as f64 - mean * mean;
        assert_relative_eq!(mean, double_well_drift(x0) * dt, epsilon = 3.0 * (dt / ndraw as f64).sqrt());
        assert_relative_eq!(var, dt, max_relative = 0.02);
    }

    #[test]
    fn propagation_uses_per_member_streams() {
        let model = DoubleWell;
        let mut e = Ensemble::from_rows(&[0.0, 1.0, -1.0]);
        let mut r1 = crate::rng::member_streams(5, 0, 3);
        propagate_ensemble(&model, &mut e, 50, 0.1, &mut r1).unwrap();
        // Rerunning with fresh streams reproduces the exact state.
        let mut e2 = Ensemble::from_rows(&[0.0, 1.0, -1.0]);
        let mut r2 = crate::rng::member_streams(5, 0, 3);
        propagate_ensemble(&model, &mut e2, 50, 0.1, &mut r2).unwrap();
        assert_eq!(e.data(), e2.data());
    }

    #[test]
    fn long_double_well_run_matches_stationary_density() {
        // Stationary density of dx = -V' dt + dW is proportional to
        // exp(-2 V); compare the empirical histogram of a long trajectory
        // on cells of width 0.125 over [-10, 10).
        let model = DoubleWell;
        let mut rng = stream(0, StreamId::Truth);
        let dt = 0.1;
        let nsteps = 1_000_000usize;
        let nbins = 160;
        let lo = -10.0;
        let dx = 0.125;
        let mut counts = vec![0u64; nbins];
        let mut x = [-3.14f64];
        for _ in 0..nsteps {
            step_euler_maruyama(&model, &mut x, dt, &mut rng);
            let b = ((x[0] - lo) / dx).floor();
            if (0.0..nbins as f64).contains(&b) {
                counts[b as usize] += 1;
            }
        }
        let mut target: Vec<f64> = (0..nbins)
            .map(|i| {
                let xc = lo + (i as f64 + 0.5) * dx;
                (-2.0 * double_well_potential(xc)).exp()
            })
            .collect();
        let z: f64 = target.iter().sum();
        for t in &mut target {
            *t /= z;
        }
        let total: f64 = counts.iter().sum::<u64>() as f64;
        let l1: f64 = counts
            .iter()
            .zip(&target)
            .map(|(&c, &t)| (c as f64 / total - t).abs())
            .sum();
        assert!(l1 < 0.05, "L1 distance {l1} too large");
    }
}
