//! Structural diagnostics: the discrete entropy balance, the temperature
//! estimate, conservation series, and norm summaries.
//!
//! Everything here is recomputed from the states through grid primitives,
//! independently of the solver's assembly, so a passing gate is a genuine
//! cross-check of the step and not a tautology.

use nalgebra::{DMatrix, DVector};

use crate::grid::{integrate, second_diff, Field};
use crate::onsager::Provenance;
use crate::scheme::{Formulation, ReactionModel, SchemeConfig, Trajectory};
use crate::thermo::{entropy_density, mixture_from_entropy, EntropyState};

/// The discrete entropy balance of one accepted step: the relative entropy
/// before/after and every dissipation integral, each nonnegative as
/// assembled, plus the closure residual of the tested identity.
#[derive(Debug, Clone)]
pub struct EntropyLedger {
    pub phi_before: f64,
    pub phi_after: f64,
    /// quadratic-form diffusion production (the `I_4` term)
    pub diffusion_production: f64,
    /// `int kappa(theta) |grad log theta|^2`, assembled as a cosh expression
    pub heat_production: f64,
    /// `2 lambda sum_b (cosh(w0 - w_b) - 1)`
    pub boundary_production: f64,
    /// `c_r int sum (Pi q)_i v_i`
    pub reaction_production: f64,
    /// `eps int (|D2 v|^2 + |v|^2)`
    pub eps_mass_production: f64,
    /// `2 eps int (w - w0) sinh(w - w0)`
    pub eps_lower_order_production: f64,
    /// curvature and p-term productions of the regularized energy equation
    pub eps_temperature_production: f64,
    /// Soret/Dufour cross terms; exactly cancelling in the potential
    /// formulation, reported as measured in the density formulation
    pub cross_term: f64,
    /// `tau 2 eps ||w0||^2 + 10 tol L`
    pub slack_budget: f64,
    /// `|time-term/tau + sum of productions|`, the tested-identity closure
    pub identity_residual: f64,
    /// density-weighted production `int sum rho_i |grad (Pi q)_i|^2`,
    /// computed for the degenerate matrix model
    pub degenerate_weighted_production: Option<f64>,
    pub pass: bool,
}

impl EntropyLedger {
    pub fn total_production(&self) -> f64 {
        self.diffusion_production
            + self.heat_production
            + self.boundary_production
            + self.reaction_production
            + self.eps_mass_production
            + self.eps_lower_order_production
            + self.eps_temperature_production
    }
}

fn pi_q_nodal(v: &[f64]) -> Vec<f64> {
    let n = v.len() + 1;
    let mean = v.iter().sum::<f64>() / n as f64;
    let mut out: Vec<f64> = v.iter().map(|x| x - mean).collect();
    out.push(-mean);
    out
}

/// Relative entropy `Phi = int (h + e^{-w0} E) dx` of an entropy state.
pub fn relative_entropy(
    y: &EntropyState,
    rho_total: &Field,
    theta0: f64,
) -> f64 {
    let state = mixture_from_entropy(y, rho_total).expect("finite entropy state");
    let grid = y.grid();
    let mut phi = 0.0;
    for k in 0..grid.cells() {
        let rho = state.rho_at(k);
        let theta = state.theta.values()[k];
        let h = entropy_density(&rho, theta).expect("positive state");
        phi += h + rho_total.values()[k] * theta / theta0;
    }
    phi * grid.spacing()
}

/// Recomputes both sides of the discrete entropy inequality for one step.
pub fn entropy_balance(
    y_prev: &EntropyState,
    y: &EntropyState,
    rho_total: &Field,
    cfg: &SchemeConfig,
    tau: f64,
) -> EntropyLedger {
    let grid = y.grid();
    let cells = grid.cells();
    let h = grid.spacing();
    let n = y.n_species();
    let nv = n - 1;
    let w0 = cfg.theta0.ln();

    let state_prev = mixture_from_entropy(y_prev, rho_total).expect("finite previous state");
    let state = mixture_from_entropy(y, rho_total).expect("finite state");

    let phi_before = relative_entropy(y_prev, rho_total, cfg.theta0);
    let phi_after = relative_entropy(y, rho_total, cfg.theta0);

    // time term of the tested identity (before the convexity inequality)
    let mut time_term = 0.0;
    for k in 0..cells {
        let mut acc = 0.0;
        for i in 0..nv {
            acc += (state.rho[i].values()[k] - state_prev.rho[i].values()[k])
                * y.v[i].values()[k];
        }
        let theta = state.theta.values()[k];
        let theta_prev = state_prev.theta.values()[k];
        acc += rho_total.values()[k] * (theta - theta_prev) * ((-w0).exp() - 1.0 / theta);
        time_term += acc;
    }
    time_term *= h;

    // nodal coefficients at the new state
    let theta: Vec<f64> = state.theta.values().to_vec();
    let eneg: Vec<f64> = y.w.values().iter().map(|w| (-w).exp()).collect();
    let mut m_nodes: Vec<DMatrix<f64>> = Vec::with_capacity(cells);
    let mut soret_nodes: Vec<DVector<f64>> = Vec::with_capacity(cells);
    let mut provenance = Provenance::Custom;
    for k in 0..cells {
        let onsager = cfg
            .matrix_model
            .evaluate(&state.rho_at(k), theta[k])
            .expect("model evaluation");
        provenance = onsager.provenance;
        m_nodes.push(onsager.m);
        soret_nodes.push(onsager.soret);
    }
    let kappa: Vec<f64> = theta.iter().map(|&t| cfg.kappa.evaluate(t)).collect();

    let vq = |k: usize| -> Vec<f64> { (0..nv).map(|i| y.v[i].values()[k]).collect() };

    let mut diffusion = 0.0;
    let mut heat = 0.0;
    let mut cross = 0.0;
    let mut weighted = 0.0;
    for f in 1..cells {
        let (l, r) = (f - 1, f);
        let m_face = (&m_nodes[l] + &m_nodes[r]) * 0.5;
        let s_face = (&soret_nodes[l] + &soret_nodes[r]) * 0.5;
        let kappa_face = 0.5 * (kappa[l] + kappa[r]);
        let dtheta = (theta[r] - theta[l]) / h;
        let deneg = (eneg[r] - eneg[l]) / h;
        // full thermo-chemical potential differences dq_i = d log rho_i - dw
        let dw = (y.w.values()[r] - y.w.values()[l]) / h;
        let dq: Vec<f64> = (0..n)
            .map(|i| {
                (state.rho[i].values()[r].ln() - state.rho[i].values()[l].ln()) / h - dw
            })
            .collect();
        let dv: Vec<f64> = (0..nv)
            .map(|j| (y.v[j].values()[r] - y.v[j].values()[l]) / h)
            .collect();
        match cfg.formulation {
            Formulation::Potential => {
                for i in 0..n {
                    for j in 0..n {
                        diffusion += m_face[(i, j)] * dq[i] * dq[j];
                    }
                }
                // Soret tested with v and Dufour tested with -e^{-w}
                let soret_part: f64 = (0..nv).map(|i| s_face[i] * deneg * dv[i]).sum();
                let dufour_part: f64 = (0..nv).map(|j| s_face[j] * dv[j] * (-deneg)).sum();
                cross += soret_part + dufour_part;
            }
            Formulation::Density => {
                let drho: Vec<f64> = (0..n)
                    .map(|j| (state.rho[j].values()[r] - state.rho[j].values()[l]) / h)
                    .collect();
                for i in 0..nv {
                    let mut flux = 0.0;
                    for j in 0..n {
                        let c = 0.5
                            * (m_nodes[l][(i, j)] / state.rho[j].values()[l]
                                + m_nodes[r][(i, j)] / state.rho[j].values()[r]);
                        flux += c * drho[j];
                    }
                    diffusion += flux * dv[i];
                }
                let soret_part: f64 = (0..nv).map(|i| s_face[i] * deneg * dv[i]).sum();
                let mut dufour_part = 0.0;
                for j in 0..n {
                    let d = 0.5
                        * (soret_nodes[l][j] / state.rho[j].values()[l]
                            + soret_nodes[r][j] / state.rho[j].values()[r]);
                    dufour_part += d * drho[j] * (-deneg);
                }
                cross += soret_part + dufour_part;
            }
        }
        heat += kappa_face * (-dtheta * deneg);
        if provenance == Provenance::Degenerate {
            let pl = pi_q_nodal(&vq(l));
            let pr = pi_q_nodal(&vq(r));
            for i in 0..n {
                let rho_face =
                    0.5 * (state.rho[i].values()[l] + state.rho[i].values()[r]);
                let dpi = (pr[i] - pl[i]) / h;
                weighted += rho_face * dpi * dpi;
            }
        }
    }
    let diffusion = diffusion * h;
    let heat = heat * h;
    let cross = cross * h;
    let weighted = weighted * h;

    let boundary = 2.0
        * cfg.lambda
        * (((w0 - y.w.values()[0]).cosh() - 1.0)
            + ((w0 - y.w.values()[cells - 1]).cosh() - 1.0));

    let reaction = match cfg.reaction {
        ReactionModel::None => 0.0,
        ReactionModel::LinearPiQ { c_r } => {
            let mut acc = 0.0;
            for k in 0..cells {
                let v = vq(k);
                let pq = pi_q_nodal(&v);
                for i in 0..nv {
                    acc += pq[i] * v[i];
                }
            }
            c_r * acc * h
        }
    };

    let (eps_mass, eps_lower, eps_temp) = if cfg.epsilon > 0.0 {
        let eps = cfg.epsilon;
        let mut mass = 0.0;
        for i in 0..nv {
            let d2 = second_diff(&y.v[i]);
            for k in 0..cells {
                let v = y.v[i].values()[k];
                mass += d2.values()[k] * d2.values()[k] + v * v;
            }
        }
        let mut lower = 0.0;
        for k in 0..cells {
            let dw = y.w.values()[k] - w0;
            lower += dw * dw.sinh();
        }
        let eneg_field = Field::new(grid, eneg.clone());
        let d2e = second_diff(&eneg_field);
        let mut temp = 0.0;
        for k in 0..cells {
            let g = theta[k] * d2e.values()[k];
            temp += g * g;
        }
        temp *= h;
        for f in 1..cells {
            let (l, r) = (f - 1, f);
            let s = (y.w.values()[r] - y.w.values()[l]) / h;
            let deneg = (eneg[r] - eneg[l]) / h;
            temp += 0.5 * (theta[l] + theta[r]) * s * s * s * (-deneg) * h;
        }
        (eps * mass * h, 2.0 * eps * lower * h, eps * temp)
    } else {
        (0.0, 0.0, 0.0)
    };

    let slack_budget = tau * 2.0 * cfg.epsilon * w0 * w0 * grid.length()
        + 10.0 * cfg.newton.tol * grid.length();

    let productions = [
        diffusion, heat, boundary, reaction, eps_mass, eps_lower, eps_temp,
    ];
    let total: f64 = productions.iter().sum();
    let identity_residual = (time_term / tau + total + cross).abs();

    let scale = 1.0 + productions.iter().map(|p| p.abs()).sum::<f64>();
    let neg_floor = -1e-12 * cells as f64 * scale;
    let nonnegative = productions.iter().all(|&p| p >= neg_floor);
    let pass = nonnegative && (phi_after - phi_before + tau * total <= slack_budget);

    EntropyLedger {
        phi_before,
        phi_after,
        diffusion_production: diffusion,
        heat_production: heat,
        boundary_production: boundary,
        reaction_production: reaction,
        eps_mass_production: eps_mass,
        eps_lower_order_production: eps_lower,
        eps_temperature_production: eps_temp,
        cross_term: cross,
        slack_budget,
        identity_residual,
        degenerate_weighted_production: if provenance == Provenance::Degenerate {
            Some(weighted)
        } else {
            None
        },
        pass,
    }
}

/// Measured per-step temperature estimate, mirroring the discrete proof:
/// `(Theta_k - Theta_{k-1})/(2 tau) + K/2 <= C + C' V` with
/// `C' = n sup(M_j/theta)^2 / (2 c_kappa)` and `C` assembled from the
/// boundary term, the measured epsilon contribution, and the solver budget.
#[derive(Debug, Clone)]
pub struct TemperatureLedger {
    pub theta_sq_before: f64,
    pub theta_sq_after: f64,
    pub kappa_grad_sq: f64,
    pub theta_weighted_grad_sq: f64,
    pub grad_v_sq: f64,
    pub boundary_term: f64,
    pub cross_term: f64,
    pub eps_tested: f64,
    pub mu_sup: f64,
    pub c_prime: f64,
    pub c_constant: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub measured_c: f64,
    pub pass: bool,
}

pub fn temperature_estimate_step(
    y_prev: &EntropyState,
    y: &EntropyState,
    rho_total: &Field,
    cfg: &SchemeConfig,
    tau: f64,
) -> TemperatureLedger {
    let grid = y.grid();
    let cells = grid.cells();
    let h = grid.spacing();
    let n = y.n_species();
    let nv = n - 1;
    let w0 = cfg.theta0.ln();

    let state_prev = mixture_from_entropy(y_prev, rho_total).expect("finite state");
    let state = mixture_from_entropy(y, rho_total).expect("finite state");
    let theta: Vec<f64> = state.theta.values().to_vec();
    let theta_prev: Vec<f64> = state_prev.theta.values().to_vec();

    let weighted_sq = |th: &[f64]| -> f64 {
        th.iter()
            .zip(rho_total.values())
            .map(|(t, r)| r * t * t)
            .sum::<f64>()
            * h
    };
    let theta_sq_before = weighted_sq(&theta_prev);
    let theta_sq_after = weighted_sq(&theta);

    let mut soret_nodes: Vec<DVector<f64>> = Vec::with_capacity(cells);
    let mut mu_sup: f64 = 0.0;
    for k in 0..cells {
        let onsager = cfg
            .matrix_model
            .evaluate(&state.rho_at(k), theta[k])
            .expect("model evaluation");
        for i in 0..n {
            mu_sup = mu_sup.max((onsager.soret[i] / theta[k]).abs());
        }
        soret_nodes.push(onsager.soret);
    }

    let mut kappa_grad = 0.0;
    let mut theta_weighted = 0.0;
    let mut cross = 0.0;
    let mut grad_v = 0.0;
    for f in 1..cells {
        let (l, r) = (f - 1, f);
        let dtheta = (theta[r] - theta[l]) / h;
        let kappa_face = 0.5 * (cfg.kappa.evaluate(theta[l]) + cfg.kappa.evaluate(theta[r]));
        kappa_grad += kappa_face * dtheta * dtheta;
        let theta_face = 0.5 * (theta[l] + theta[r]);
        theta_weighted += theta_face * theta_face * dtheta * dtheta;
        let mut dufour = 0.0;
        match cfg.formulation {
            Formulation::Potential => {
                for j in 0..nv {
                    let dv = (y.v[j].values()[r] - y.v[j].values()[l]) / h;
                    dufour += 0.5 * (soret_nodes[l][j] + soret_nodes[r][j]) * dv;
                    grad_v += dv * dv;
                }
            }
            Formulation::Density => {
                for j in 0..n {
                    let drho =
                        (state.rho[j].values()[r] - state.rho[j].values()[l]) / h;
                    let d = 0.5
                        * (soret_nodes[l][j] / state.rho[j].values()[l]
                            + soret_nodes[r][j] / state.rho[j].values()[r]);
                    dufour += d * drho;
                }
                for j in 0..nv {
                    let dv = (y.v[j].values()[r] - y.v[j].values()[l]) / h;
                    grad_v += dv * dv;
                }
            }
        }
        cross += dufour * dtheta;
    }
    let kappa_grad = kappa_grad * h;
    let theta_weighted = theta_weighted * h;
    let cross = cross * h;
    let grad_v = grad_v * h;

    let boundary =
        cfg.lambda * ((cfg.theta0 - theta[0]) * theta[0] + (cfg.theta0 - theta[cells - 1]) * theta[cells - 1]);

    let eps_tested = if cfg.epsilon > 0.0 {
        let eps = cfg.epsilon;
        let eneg: Vec<f64> = y.w.values().iter().map(|w| (-w).exp()).collect();
        let eneg_field = Field::new(grid, eneg.clone());
        let d2e = second_diff(&eneg_field);
        let z = Field::new(
            grid,
            (0..cells)
                .map(|k| -theta[k] * theta[k] * d2e.values()[k])
                .collect(),
        );
        let curvature = crate::grid::second_diff_transpose(&z);
        let mut p_flux = vec![0.0; cells + 1];
        for f in 1..cells {
            let (l, r) = (f - 1, f);
            let s = (y.w.values()[r] - y.w.values()[l]) / h;
            p_flux[f] = 0.5 * (theta[l] + theta[r]) * s * s * s;
        }
        let mut acc = 0.0;
        for k in 0..cells {
            let term = curvature.values()[k] - (p_flux[k + 1] - p_flux[k]) / h
                + (w0.exp() + theta[k]) * (y.w.values()[k] - w0);
            acc += theta[k] * term;
        }
        eps * acc * h
    } else {
        0.0
    };

    let theta_max = theta.iter().copied().fold(0.0f64, f64::max);
    let tol_budget = 10.0 * cfg.newton.tol * grid.length() * (1.0 + theta_max);
    let c_prime = n as f64 * mu_sup * mu_sup / (2.0 * cfg.kappa.c_kappa);
    let c_constant = 0.5 * cfg.lambda * cfg.theta0 * cfg.theta0 + (-eps_tested).max(0.0)
        + tol_budget;
    let lhs = (theta_sq_after - theta_sq_before) / (2.0 * tau) + 0.5 * kappa_grad;
    let rhs = c_constant + c_prime * grad_v;
    TemperatureLedger {
        theta_sq_before,
        theta_sq_after,
        kappa_grad_sq: kappa_grad,
        theta_weighted_grad_sq: theta_weighted,
        grad_v_sq: grad_v,
        boundary_term: boundary,
        cross_term: cross,
        eps_tested,
        mu_sup,
        c_prime,
        c_constant,
        lhs,
        rhs,
        measured_c: lhs - c_prime * grad_v,
        pass: lhs <= rhs,
    }
}

/// Runs the temperature estimate over every step of a trajectory.
pub fn temperature_estimate(
    trajectory: &Trajectory,
    cfg: &SchemeConfig,
) -> (Vec<TemperatureLedger>, bool) {
    let mut ledgers = Vec::new();
    let mut all_pass = true;
    let mut prev = crate::thermo::potentials_from_densities(&trajectory.initial)
        .expect("positive initial state")
        .0;
    for entry in &trajectory.entries {
        let (y, _) = crate::thermo::potentials_from_densities(&entry.state)
            .expect("positive state");
        let ledger = temperature_estimate_step(
            &prev,
            &y,
            &trajectory.initial.rho_total,
            cfg,
            entry.report.tau,
        );
        all_pass &= ledger.pass;
        ledgers.push(ledger);
        prev = y;
    }
    (ledgers, all_pass)
}

/// Mass and energy series with drift flags for conservative runs.
#[derive(Debug, Clone)]
pub struct ConservationReport {
    pub times: Vec<f64>,
    pub masses: Vec<Vec<f64>>,
    pub energies: Vec<f64>,
    pub max_mass_drift_rel: Vec<f64>,
    pub max_energy_drift_rel: f64,
    pub max_total_density_deviation: f64,
    pub flagged: bool,
}

pub fn conservation_report(trajectory: &Trajectory, cfg: &SchemeConfig) -> ConservationReport {
    let n = trajectory.initial.n_species();
    let mut times = vec![0.0];
    let mut masses: Vec<Vec<f64>> = vec![trajectory
        .initial
        .rho
        .iter()
        .map(integrate)
        .collect()];
    let energy_of = |state: &crate::thermo::MixtureState| -> f64 {
        integrate(&Field::new(
            state.grid(),
            state
                .rho_total
                .values()
                .iter()
                .zip(state.theta.values())
                .map(|(r, t)| r * t)
                .collect(),
        ))
    };
    let mut energies = vec![energy_of(&trajectory.initial)];
    let mut max_dev: f64 = total_density_deviation(&trajectory.initial);
    for entry in &trajectory.entries {
        times.push(entry.t);
        masses.push(entry.report.masses.clone());
        energies.push(entry.report.energy);
        max_dev = max_dev.max(total_density_deviation(&entry.state));
    }
    let mut max_mass_drift = vec![0.0f64; n];
    for row in &masses {
        for i in 0..n {
            let rel = (row[i] - masses[0][i]).abs() / masses[0][i].abs().max(1e-300);
            max_mass_drift[i] = max_mass_drift[i].max(rel);
        }
    }
    let max_energy_drift = energies
        .iter()
        .map(|e| (e - energies[0]).abs() / energies[0].abs().max(1e-300))
        .fold(0.0f64, f64::max);
    let mass_conservative = cfg.reaction == ReactionModel::None && cfg.epsilon == 0.0;
    let energy_conservative = mass_conservative && cfg.lambda == 0.0;
    let flagged = (mass_conservative && max_mass_drift.iter().any(|&d| d > 1e-10))
        || (energy_conservative && max_energy_drift > 1e-10);
    ConservationReport {
        times,
        masses,
        energies,
        max_mass_drift_rel: max_mass_drift,
        max_energy_drift_rel: max_energy_drift,
        max_total_density_deviation: max_dev,
        flagged,
    }
}

fn total_density_deviation(state: &crate::thermo::MixtureState) -> f64 {
    let cells = state.grid().cells();
    let mut max_dev: f64 = 0.0;
    for k in 0..cells {
        let sum: f64 = state.rho.iter().map(|f| f.values()[k]).sum();
        max_dev = max_dev.max((sum - state.rho_total.values()[k]).abs());
    }
    max_dev
}

/// Norm summaries over a trajectory: `sup_t int theta^2`, the space-time
/// integral of `theta^2 |grad theta|^2`, the `L^{16/3}` norm of the
/// temperature, and the sup of each density.
#[derive(Debug, Clone)]
pub struct NormsReport {
    pub sup_theta_sq: f64,
    pub spacetime_theta_grad_sq: f64,
    pub theta_l16_3: f64,
    pub sup_rho: Vec<f64>,
    pub sup_rho_initial: Vec<f64>,
}

pub fn norms_report(trajectory: &Trajectory) -> NormsReport {
    let grid = trajectory.grid;
    let h = grid.spacing();
    let n = trajectory.initial.n_species();
    let mut sup_theta_sq: f64 = theta_sq(&trajectory.initial.theta);
    let mut spacetime = 0.0;
    let mut l163 = 0.0;
    let mut sup_rho = vec![0.0f64; n];
    for i in 0..n {
        sup_rho[i] = trajectory.initial.rho[i].max();
    }
    for entry in &trajectory.entries {
        let theta = entry.state.theta.values();
        sup_theta_sq = sup_theta_sq.max(theta_sq(&entry.state.theta));
        let tau = entry.report.tau;
        let mut grad_acc = 0.0;
        for f in 1..grid.cells() {
            let dtheta = (theta[f] - theta[f - 1]) / h;
            let theta_face = 0.5 * (theta[f] + theta[f - 1]);
            grad_acc += theta_face * theta_face * dtheta * dtheta;
        }
        spacetime += tau * grad_acc * h;
        l163 += tau * theta.iter().map(|t| t.powf(16.0 / 3.0)).sum::<f64>() * h;
        for i in 0..n {
            sup_rho[i] = sup_rho[i].max(entry.state.rho[i].max());
        }
    }
    NormsReport {
        sup_theta_sq,
        spacetime_theta_grad_sq: spacetime,
        theta_l16_3: l163.powf(3.0 / 16.0),
        sup_rho,
        sup_rho_initial: (0..n)
            .map(|i| trajectory.initial.rho[i].max())
            .collect(),
    }
}

fn theta_sq(theta: &Field) -> f64 {
    integrate(&Field::new(
        theta.grid(),
        theta.values().iter().map(|t| t * t).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid1D;
    use crate::onsager::{builtin_matrix_model, ModelParams};
    use crate::scheme::{run, KappaModel, NewtonParams, SchemeConfig};
    use crate::thermo::MixtureState;
    use approx::assert_relative_eq;

    fn cfg_constant_pi(n: usize) -> SchemeConfig {
        SchemeConfig {
            tau: 1e-3,
            epsilon: 0.0,
            lambda: 0.0,
            theta0: 1.0,
            kappa: KappaModel {
                c_kappa: 1.0,
                big_c_kappa: 1.0,
            },
            matrix_model: builtin_matrix_model(
                "constant_pi",
                n,
                ModelParams {
                    c: Some(1.0),
                    ..Default::default()
                },
            )
            .unwrap(),
            reaction: crate::scheme::ReactionModel::None,
            formulation: crate::scheme::Formulation::Potential,
            newton: NewtonParams::default(),
        }
    }

    #[test]
    fn stationary_step_has_zero_productions() {
        let grid = Grid1D::new(1.0, 8).unwrap();
        let cfg = cfg_constant_pi(2);
        let y = EntropyState {
            v: vec![Field::constant(grid, 0.2)],
            w: Field::constant(grid, 0.0),
        };
        let rho_total = Field::constant(grid, 1.0);
        let ledger = entropy_balance(&y, &y, &rho_total, &cfg, cfg.tau);
        assert_relative_eq!(ledger.phi_after, ledger.phi_before);
        assert_eq!(ledger.diffusion_production, 0.0);
        assert_eq!(ledger.heat_production, 0.0);
        assert_eq!(ledger.boundary_production, 0.0);
        assert!(ledger.pass);
    }

    #[test]
    fn entropy_nonincreasing_along_mixing_run() {
        let grid = Grid1D::new(1.0, 16).unwrap();
        let cfg = cfg_constant_pi(2);
        let r1 = Field::from_fn(grid, |x| 0.5 + 0.35 * (std::f64::consts::PI * x).cos());
        let r2 = Field::from_fn(grid, |x| 1.0 - 0.35 * (std::f64::consts::PI * x).cos());
        let state = MixtureState::new(vec![r1, r2], Field::constant(grid, 1.0)).unwrap();
        let trajectory = run(&state, &cfg, 0.03, |_| {}).unwrap();
        for e in &trajectory.entries {
            assert!(e.report.ledger.pass);
            assert!(
                e.report.ledger.identity_residual
                    < 100.0 * cfg.newton.tol * (1.0 + e.report.ledger.total_production())
            );
            assert!(e.report.ledger.phi_after <= e.report.ledger.phi_before + 1e-11);
        }
    }

    #[test]
    fn degenerate_production_matches_weighted_form() {
        let grid = Grid1D::new(1.0, 12).unwrap();
        let mut cfg = cfg_constant_pi(3);
        cfg.matrix_model =
            builtin_matrix_model("degenerate_pirhopi", 3, ModelParams::default()).unwrap();
        let r1 = Field::from_fn(grid, |x| 0.3 + 0.1 * (2.0 * x).sin());
        let r2 = Field::from_fn(grid, |x| 0.5 - 0.2 * x);
        let r3 = Field::from_fn(grid, |x| 0.4 + 0.15 * x * x);
        let state =
            MixtureState::new(vec![r1, r2, r3], Field::from_fn(grid, |x| 1.0 + 0.2 * x))
                .unwrap();
        let trajectory = run(&state, &cfg, 5e-3, |_| {}).unwrap();
        for e in &trajectory.entries {
            let ledger = &e.report.ledger;
            let weighted = ledger.degenerate_weighted_production.unwrap();
            assert!(
                (ledger.diffusion_production - weighted).abs()
                    <= 1e-12 * (1.0 + weighted.abs()),
                "diffusion {} vs weighted {}",
                ledger.diffusion_production,
                weighted
            );
        }
    }

    #[test]
    fn cooling_run_decreases_weighted_theta_square() {
        // lambda = 0 and no Dufour coupling: int rho0 theta^2 is nonincreasing
        let grid = Grid1D::new(1.0, 12).unwrap();
        let cfg = cfg_constant_pi(2);
        let state = MixtureState::new(
            vec![Field::constant(grid, 0.6), Field::constant(grid, 0.9)],
            Field::from_fn(grid, |x| 1.0 + 0.5 * (std::f64::consts::PI * x).cos()),
        )
        .unwrap();
        let trajectory = run(&state, &cfg, 0.02, |_| {}).unwrap();
        let (ledgers, all_pass) = temperature_estimate(&trajectory, &cfg);
        assert!(all_pass);
        for l in &ledgers {
            assert!(l.theta_sq_after <= l.theta_sq_before + 1e-10);
            assert!(l.cross_term.abs() < 1e-14);
        }
    }

    #[test]
    fn conservation_report_flags_nothing_for_conservative_run() {
        let grid = Grid1D::new(1.0, 12).unwrap();
        let cfg = cfg_constant_pi(2);
        let r1 = Field::from_fn(grid, |x| 0.5 + 0.2 * (std::f64::consts::PI * x).cos());
        let r2 = Field::from_fn(grid, |x| 0.7 - 0.2 * (std::f64::consts::PI * x).cos());
        let state = MixtureState::new(vec![r1, r2], Field::constant(grid, 1.2)).unwrap();
        let trajectory = run(&state, &cfg, 0.02, |_| {}).unwrap();
        let report = conservation_report(&trajectory, &cfg);
        assert!(!report.flagged, "{:?}", report.max_mass_drift_rel);
        assert_eq!(report.max_total_density_deviation, 0.0);
    }

    #[test]
    fn norms_of_constant_temperature() {
        let grid = Grid1D::new(2.0, 8).unwrap();
        let mut cfg = cfg_constant_pi(2);
        cfg.tau = 0.25;
        let state = MixtureState::new(
            vec![Field::constant(grid, 1.0), Field::constant(grid, 1.0)],
            Field::constant(grid, 1.5),
        )
        .unwrap();
        let t_end = 1.0;
        let trajectory = run(&state, &cfg, t_end, |_| {}).unwrap();
        let norms = norms_report(&trajectory);
        // constant field: ||theta||_{16/3} = theta (L T)^{3/16}
        let expected = 1.5 * (grid.length() * t_end).powf(3.0 / 16.0);
        assert_relative_eq!(norms.theta_l16_3, expected, max_relative = 1e-12);
        assert!(norms.sup_rho.iter().zip(&norms.sup_rho_initial).all(|(a, b)| a <= b));
    }
}
