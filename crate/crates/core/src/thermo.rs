//! Thermodynamic state algebra: entropy, potentials, and the
//! positivity-enforcing change of variables between partial mass densities
//! and entropy variables.
//!
//! The entropy variables are the relative thermo-chemical potentials
//! `v_i = log(rho_i / rho_n)` (i < n) and `w = log(theta)`. Densities are
//! recovered through a max-shifted softmax against the conserved total
//! density `rho_total`, so any finite `(v, w)` maps to strictly positive
//! `(rho, theta)`.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::grid::{Field, Grid1D};

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("nonpositive density rho[{index}] = {value}")]
    NonpositiveDensity { index: usize, value: f64 },
    #[error("nonpositive temperature theta = {0}")]
    NonpositiveTemperature(f64),
    #[error("nonpositive total density rho_total = {0}")]
    NonpositiveTotal(f64),
    #[error("non-finite potential v[{index}] = {value}")]
    NonFinitePotential { index: usize, value: f64 },
}

/// Nodal mixture state: `n` partial mass densities and the temperature,
/// together with the time-invariant total density `rho_total`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureState {
    pub rho: Vec<Field>,
    pub theta: Field,
    pub rho_total: Field,
}

impl MixtureState {
    /// Builds a state from density fields; `rho_total` is their nodewise sum.
    pub fn new(rho: Vec<Field>, theta: Field) -> Result<Self, DomainError> {
        let grid = theta.grid();
        let cells = grid.cells();
        let mut total = vec![0.0; cells];
        for (i, r) in rho.iter().enumerate() {
            for (k, &x) in r.values().iter().enumerate() {
                if !(x > 0.0) {
                    return Err(DomainError::NonpositiveDensity { index: i, value: x });
                }
                total[k] += x;
            }
        }
        for &t in theta.values() {
            if !(t > 0.0) {
                return Err(DomainError::NonpositiveTemperature(t));
            }
        }
        Ok(Self {
            rho,
            theta,
            rho_total: Field::new(grid, total),
        })
    }

    pub fn n_species(&self) -> usize {
        self.rho.len()
    }

    pub fn grid(&self) -> Grid1D {
        self.theta.grid()
    }

    /// Densities of every species at node `k`.
    pub fn rho_at(&self, k: usize) -> Vec<f64> {
        self.rho.iter().map(|f| f.values()[k]).collect()
    }
}

/// The scheme unknowns: relative potentials `v_1..v_{n-1}` and `w = log theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyState {
    pub v: Vec<Field>,
    pub w: Field,
}

impl EntropyState {
    pub fn n_species(&self) -> usize {
        self.v.len() + 1
    }

    pub fn grid(&self) -> Grid1D {
        self.w.grid()
    }
}

/// Thermo-chemical potentials `q_i = log(rho_i/theta)` and their mean-free
/// projection `Pi q`.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialSet {
    pub q: Vec<Field>,
    pub pi_q: Vec<Field>,
}

/// Mathematical entropy density `h = sum_i rho_i (log rho_i - 1) - rho log theta`.
pub fn entropy_density(rho: &[f64], theta: f64) -> Result<f64, DomainError> {
    check_positive(rho, theta)?;
    let mut h = 0.0;
    let mut total = 0.0;
    for &r in rho {
        h += r * (r.ln() - 1.0);
        total += r;
    }
    Ok(h - total * theta.ln())
}

/// Mean-free projection `z - (1·z/n) 1`, the action of `Pi = I - 1⊗1/n`.
pub fn project_pi(z: &[f64]) -> Vec<f64> {
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    z.iter().map(|x| x - mean).collect()
}

/// Inverts the relative potentials: `rho_i = rho_total e^{v_i} / sum_j e^{v_j}`
/// with the gauge `v_n = 0`, evaluated max-shifted so arbitrarily large
/// `|v_i|` cannot overflow. The last density closes the sum exactly,
/// `rho_n = rho_total - sum_{i<n} rho_i`, whenever it holds a macroscopic
/// share of the total; below that the complement is dominated by rounding
/// noise and the direct softmax value is used instead (the sum then differs
/// from `rho_total` by at most a few ulps).
pub fn densities_from_potentials(v: &[f64], rho_total: f64) -> Result<Vec<f64>, DomainError> {
    if !(rho_total > 0.0) {
        return Err(DomainError::NonpositiveTotal(rho_total));
    }
    for (i, &x) in v.iter().enumerate() {
        if !x.is_finite() {
            return Err(DomainError::NonFinitePotential { index: i, value: x });
        }
    }
    let n = v.len() + 1;
    let vmax = v.iter().copied().fold(0.0f64, f64::max); // v_n = 0 included
    let mut weights = Vec::with_capacity(n);
    for &x in v {
        weights.push((x - vmax).exp());
    }
    weights.push((-vmax).exp()); // the n-th species, gauge v_n = 0
    let sum: f64 = weights.iter().sum();
    let mut rho = Vec::with_capacity(n);
    let mut partial = 0.0;
    for w in &weights[..n - 1] {
        let r = rho_total * w / sum;
        partial += r;
        rho.push(r);
    }
    let complement = rho_total - partial;
    if complement >= 1e-2 * rho_total {
        rho.push(close_complement(rho_total, partial, complement));
    } else {
        rho.push(rho_total * weights[n - 1] / sum);
    }
    Ok(rho)
}

/// Nudges the complement by at most a couple of ulps so that
/// `partial + complement == total` bitwise. The subtraction error is below
/// half an ulp of the total unless the complement shares the total's
/// binade, and there a one-ulp nudge moves the rounded sum by exactly one
/// ulp, so the loop terminates immediately.
fn close_complement(total: f64, partial: f64, mut complement: f64) -> f64 {
    for _ in 0..4 {
        let recomposed = partial + complement;
        if recomposed == total {
            break;
        }
        let bits = complement.to_bits();
        complement = f64::from_bits(if recomposed > total { bits - 1 } else { bits + 1 });
    }
    complement
}

/// Relative potentials `v_i = log(rho_i/rho_n)`, `w = log theta`, and the
/// potential set `q_i = log(rho_i/theta)`, `Pi q`.
pub fn potentials_from_densities(
    state: &MixtureState,
) -> Result<(EntropyState, PotentialSet), DomainError> {
    let grid = state.grid();
    let n = state.n_species();
    let cells = grid.cells();
    let mut v = vec![vec![0.0; cells]; n - 1];
    let mut q = vec![vec![0.0; cells]; n];
    let mut pi_q = vec![vec![0.0; cells]; n];
    let mut w = vec![0.0; cells];
    for k in 0..cells {
        let rho = state.rho_at(k);
        let theta = state.theta.values()[k];
        check_positive(&rho, theta)?;
        let log_theta = theta.ln();
        let log_n = rho[n - 1].ln();
        for i in 0..n - 1 {
            v[i][k] = rho[i].ln() - log_n;
        }
        w[k] = log_theta;
        let qk: Vec<f64> = rho.iter().map(|r| r.ln() - log_theta).collect();
        let pk = project_pi(&qk);
        for i in 0..n {
            q[i][k] = qk[i];
            pi_q[i][k] = pk[i];
        }
    }
    let lift = |cols: Vec<Vec<f64>>| cols.into_iter().map(|c| Field::new(grid, c)).collect();
    Ok((
        EntropyState {
            v: lift(v),
            w: Field::new(grid, w),
        },
        PotentialSet {
            q: lift(q),
            pi_q: lift(pi_q),
        },
    ))
}

/// Rebuilds a [`MixtureState`] from entropy variables and the conserved
/// total density field.
pub fn mixture_from_entropy(
    y: &EntropyState,
    rho_total: &Field,
) -> Result<MixtureState, DomainError> {
    let grid = y.grid();
    let n = y.n_species();
    let cells = grid.cells();
    let mut rho = vec![vec![0.0; cells]; n];
    let mut theta = vec![0.0; cells];
    for k in 0..cells {
        let vk: Vec<f64> = y.v.iter().map(|f| f.values()[k]).collect();
        let rk = densities_from_potentials(&vk, rho_total.values()[k])?;
        for i in 0..n {
            rho[i][k] = rk[i];
        }
        theta[k] = y.w.values()[k].exp();
    }
    Ok(MixtureState {
        rho: rho.into_iter().map(|c| Field::new(grid, c)).collect(),
        theta: Field::new(grid, theta),
        rho_total: rho_total.clone(),
    })
}

/// Free energy and derived quantities for the ideal mixture with unit molar
/// masses and unit heat capacity: returns `(psi, s, mu, E, p)` satisfying
/// `E = psi + theta s` exactly.
pub fn free_energy_and_derived(
    rho: &[f64],
    theta: f64,
) -> Result<(f64, f64, Vec<f64>, f64, f64), DomainError> {
    check_positive(rho, theta)?;
    let total: f64 = rho.iter().sum();
    let log_theta = theta.ln();
    let mix: f64 = rho.iter().map(|&r| r * (r.ln() - 1.0)).sum();
    let psi = theta * mix - total * theta * (log_theta - 1.0);
    let s = -mix + total * log_theta;
    let mu = rho
        .iter()
        .map(|&r| theta * ((r / theta).ln() + 1.0))
        .collect();
    let energy = total * theta;
    let pressure = total * theta;
    Ok((psi, s, mu, energy, pressure))
}

/// Hessian of `h(rho', theta)` as a function of the reduced densities and
/// the temperature, with `rho_n = rho_total - sum rho'`:
/// `d2h/drho_i drho_j = delta_ij / rho_i + 1/rho_n`, `d2h/dtheta^2 =
/// rho_total / theta^2`, mixed entries zero. Symmetric positive definite on
/// admissible states.
pub fn entropy_hessian(
    rho_prime: &[f64],
    theta: f64,
    rho_total: f64,
) -> Result<DMatrix<f64>, DomainError> {
    let n1 = rho_prime.len();
    let rho_n = rho_total - rho_prime.iter().sum::<f64>();
    let mut all = rho_prime.to_vec();
    all.push(rho_n);
    check_positive(&all, theta)?;
    let mut hess = DMatrix::zeros(n1 + 1, n1 + 1);
    for i in 0..n1 {
        for j in 0..n1 {
            hess[(i, j)] = 1.0 / rho_n;
        }
        hess[(i, i)] += 1.0 / rho_prime[i];
    }
    hess[(n1, n1)] = rho_total / (theta * theta);
    Ok(hess)
}

fn check_positive(rho: &[f64], theta: f64) -> Result<(), DomainError> {
    for (i, &r) in rho.iter().enumerate() {
        if !(r > 0.0) {
            return Err(DomainError::NonpositiveDensity { index: i, value: r });
        }
    }
    if !(theta > 0.0) {
        return Err(DomainError::NonpositiveTemperature(theta));
    }
    Ok(())
}
