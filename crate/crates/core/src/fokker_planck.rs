//! Exact filtering oracle for 1-D diffusions: a finite-volume Fokker-Planck
//! solver on a periodic grid, plus pointwise Bayes updates. The double-well
//! experiment scores every ensemble filter against this reference.

use crate::error::{Error, Result};
use crate::rng::Rng;
use nalgebra::DMatrix;
use rand::Rng as _;

/// Uniform periodic grid of cell centers over `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid1D {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Default for Grid1D {
    fn default() -> Self {
        Grid1D {
            lo: -10.0,
            hi: 10.0,
            n: 160,
        }
    }
}

impl Grid1D {
    pub fn dx(&self) -> f64 {
        (self.hi - self.lo) / self.n as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.dx()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.center(i)).collect()
    }
}

/// A probability density on grid cells; cell masses `values[i] * dx` sum
/// to one.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    pub grid: Grid1D,
    pub values: Vec<f64>,
}

impl GridDensity {
    /// Discretize a nonnegative function and normalize it to unit mass.
    pub fn from_fn(grid: Grid1D, f: impl Fn(f64) -> f64) -> Result<Self> {
        let mut values: Vec<f64> = (0..grid.n).map(|i| f(grid.center(i))).collect();
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::non_finite("density discretisation"));
        }
        let mass: f64 = values.iter().sum::<f64>() * grid.dx();
        if mass <= 0.0 {
            return Err(Error::DensityUnderflow("zero mass on grid".into()));
        }
        for v in &mut values {
            *v /= mass;
        }
        Ok(GridDensity { grid, values })
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.dx()
    }

    pub fn mean(&self) -> f64 {
        let dx = self.grid.dx();
        (0..self.grid.n)
            .map(|i| self.grid.center(i) * self.values[i] * dx)
            .sum()
    }

    /// Integrated absolute difference of two densities on the same grid.
    pub fn l1_distance(&self, other: &GridDensity) -> f64 {
        assert_eq!(self.grid, other.grid);
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * self.grid.dx()
    }

    /// Multiply by the Gaussian likelihood of a direct observation of the
    /// state, `exp(-(y - x)^2 / 2r)`, and renormalize.
    pub fn bayes_update(&mut self, y: f64, r: f64) -> Result<()> {
        for (i, v) in self.values.iter_mut().enumerate() {
            let d = y - (self.grid.lo + (i as f64 + 0.5) * self.grid.dx());
            *v *= (-0.5 * d * d / r).exp();
        }
        let mass: f64 = self.values.iter().sum::<f64>() * self.grid.dx();
        if !(mass > 1e-300) {
            return Err(Error::DensityUnderflow(
                "posterior mass vanished in the Bayes update".into(),
            ));
        }
        for v in &mut self.values {
            *v /= mass;
        }
        Ok(())
    }

    /// Inverse-CDF sample with linear interpolation inside the cell.
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        let dx = self.grid.dx();
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        for i in 0..self.grid.n {
            let m = self.values[i] * dx;
            if cum + m >= u || i == self.grid.n - 1 {
                let frac = if m > 0.0 { ((u - cum) / m).clamp(0.0, 1.0) } else { 0.5 };
                return self.grid.lo + (i as f64 + frac) * dx;
            }
            cum += m;
        }
        unreachable!()
    }
}

/// Finite-volume solver for `dp/dt = -(a(x) p)' + D p''` on a periodic grid.
///
/// Advection uses central face averages where the cell Peclet number
/// `|a| dx / D` is at most 2 and first-order upwinding beyond, which keeps
/// every off-diagonal transition weight nonnegative; diffusion is the
/// standard centered flux. The substep size halves the model step until it
/// satisfies `dt <= dx^2 / (2D + dx max|a|)`, the positivity bound for the
/// explicit scheme.
pub struct FokkerPlanck1D {
    pub grid: Grid1D,
    pub diffusion: f64,
    pub dt_model: f64,
    dt_sub: f64,
    nsub: usize,
    /// Drift at the right face of each cell, and whether that face uses the
    /// central average.
    face_drift: Vec<f64>,
    face_central: Vec<bool>,
}

impl FokkerPlanck1D {
    pub fn new(grid: Grid1D, drift: impl Fn(f64) -> f64, dt_model: f64) -> Self {
        let diffusion = 0.5;
        let dx = grid.dx();
        let face_drift: Vec<f64> = (0..grid.n)
            .map(|i| drift(grid.lo + (i as f64 + 1.0) * dx))
            .collect();
        let max_a = face_drift.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        let bound = dx * dx / (2.0 * diffusion + dx * max_a);
        let mut dt_sub = dt_model;
        let mut nsub = 1usize;
        while dt_sub > bound {
            dt_sub *= 0.5;
            nsub *= 2;
        }
        let face_central: Vec<bool> = face_drift
            .iter()
            .map(|a| a.abs() * dx / diffusion <= 2.0)
            .collect();
        FokkerPlanck1D {
            grid,
            diffusion,
            dt_model,
            dt_sub,
            nsub,
            face_drift,
            face_central,
        }
    }

    pub fn substep_size(&self) -> f64 {
        self.dt_sub
    }

    pub fn substeps_per_model_step(&self) -> usize {
        self.nsub
    }

    fn apply_substep(&self, p: &mut [f64], flux: &mut [f64]) {
        let n = self.grid.n;
        let dx = self.grid.dx();
        for i in 0..n {
            let right = (i + 1) % n;
            let a = self.face_drift[i];
            let adv = if self.face_central[i] {
                a * 0.5 * (p[i] + p[right])
            } else if a > 0.0 {
                a * p[i]
            } else {
                a * p[right]
            };
            let dif = -self.diffusion * (p[right] - p[i]) / dx;
            flux[i] = adv + dif;
        }
        let scale = self.dt_sub / dx;
        let mut prev = flux[n - 1];
        for i in 0..n {
            let f = flux[i];
            p[i] -= scale * (f - prev);
            prev = f;
        }
    }

    /// Advance the density by `model_steps` steps of `dt_model`.
    pub fn propagate(&self, dens: &mut GridDensity, model_steps: usize) -> Result<()> {
        assert_eq!(dens.grid, self.grid);
        let mut flux = vec![0.0; self.grid.n];
        for _ in 0..model_steps * self.nsub {
            self.apply_substep(&mut dens.values, &mut flux);
        }
        if dens.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("density propagation"));
        }
        Ok(())
    }

    /// The one-substep transition matrix `A` with `p_new = A p_old`,
    /// materialized column by column through the same stencil used for
    /// propagation. Intended for tests; stepping uses the stencil directly.
    pub fn transition_matrix(&self) -> DMatrix<f64> {
        let n = self.grid.n;
        let mut a = DMatrix::zeros(n, n);
        let mut flux = vec![0.0; n];
        for j in 0..n {
            let mut p = vec![0.0; n];
            p[j] = 1.0;
            self.apply_substep(&mut p, &mut flux);
            for i in 0..n {
                a[(i, j)] = p[i];
            }
        }
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{double_well_drift, double_well_potential};
    use crate::rng::{stream, StreamId};
    use approx::assert_relative_eq;

    fn dw_solver() -> FokkerPlanck1D {
        FokkerPlanck1D::new(Grid1D::default(), double_well_drift, 0.1)
    }

    fn stationary() -> GridDensity {
        GridDensity::from_fn(Grid1D::default(), |x| (-2.0 * double_well_potential(x)).exp())
            .unwrap()
    }

    #[test]
    fn substep_respects_positivity_bound() {
        let fp = dw_solver();
        // max |drift| on faces is about 2.859 at the domain edge, giving a
        // bound near 0.0115, so halving 0.1 stops at 0.00625.
        assert_relative_eq!(fp.substep_size(), 0.00625);
        assert_eq!(fp.substeps_per_model_step(), 16);
        let dx = fp.grid.dx();
        let max_a = fp.face_drift.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        assert!(fp.substep_size() <= dx * dx / (2.0 * fp.diffusion + dx * max_a));
    }

    #[test]
    fn transition_matrix_is_column_stochastic_and_nonnegative() {
        let fp = dw_solver();
        let a = fp.transition_matrix();
        for j in 0..fp.grid.n {
            let col_sum: f64 = (0..fp.grid.n).map(|i| a[(i, j)]).sum();
            assert_relative_eq!(col_sum, 1.0, epsilon = 1e-12);
            for i in 0..fp.grid.n {
                assert!(a[(i, j)] >= -1e-15, "negative weight at ({i},{j})");
            }
        }
    }

    #[test]
    fn stationary_density_is_near_fixed_point() {
        let fp = dw_solver();
        let a = fp.transition_matrix();
        let p = stationary();
        let pv = nalgebra::DVector::from_column_slice(&p.values);
        let ap = &a * &pv;
        let l1: f64 = ap
            .iter()
            .zip(&p.values)
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            * fp.grid.dx();
        assert!(l1 < 1e-4, "one-substep defect {l1}");
    }

    #[test]
    fn long_propagation_conserves_mass_and_converges() {
        let fp = dw_solver();
        let mut dens = GridDensity::from_fn(Grid1D::default(), |x| {
            (-0.5 * (x - 2.0) * (x - 2.0)).exp()
        })
        .unwrap();
        fp.propagate(&mut dens, 10_000).unwrap();
        assert!((dens.mass() - 1.0).abs() < 1e-10, "mass {}", dens.mass());
        let stat = stationary();
        let l1 = dens.l1_distance(&stat);
        assert!(l1 < 0.02, "distance to stationary {l1}");
    }

    #[test]
    fn bayes_update_sharpens_toward_observation() {
        let mut dens = stationary();
        dens.bayes_update(3.14, 0.5).unwrap();
        assert!((dens.mean() - 3.14).abs() < 0.5);
        assert_relative_eq!(dens.mass(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn bayes_update_underflow_is_an_error() {
        let grid = Grid1D::default();
        // All mass in one cell near the left edge, observation at the right
        // edge with tiny noise: every product underflows to zero.
        let mut values = vec![0.0; grid.n];
        values[0] = 1.0 / grid.dx();
        let mut dens = GridDensity { grid, values };
        let err = dens.bayes_update(9.9, 1e-4).unwrap_err();
        assert!(matches!(err, Error::DensityUnderflow(_)));
    }

    #[test]
    fn grid_mean_of_tight_gaussian() {
        let dens = GridDensity::from_fn(Grid1D::default(), |x| {
            (-0.5 * (x - 2.0) * (x - 2.0) / 0.25).exp()
        })
        .unwrap();
        assert_relative_eq!(dens.mean(), 2.0, epsilon = 1e-3);
    }

    #[test]
    fn sampling_matches_density_histogram() {
        let dens = stationary();
        let mut rng = stream(40, StreamId::Truth);
        let ndraw = 200_000;
        let mut counts = vec![0u64; dens.grid.n];
        for _ in 0..ndraw {
            let x = dens.sample(&mut rng);
            let b = ((x - dens.grid.lo) / dens.grid.dx()).floor() as usize;
            counts[b.min(dens.grid.n - 1)] += 1;
        }
        let l1: f64 = counts
            .iter()
            .zip(&dens.values)
            .map(|(&c, &v)| (c as f64 / ndraw as f64 - v * dens.grid.dx()).abs())
            .sum();
        assert!(l1 < 0.02, "sampling L1 {l1}");
    }
}
