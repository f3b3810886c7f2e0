//! The implicit Euler step in entropy variables and the time loop.
//!
//! Unknowns per cell are `(v_1, ..., v_{n-1}, w)`. Each step solves the
//! nonlinear finite-volume system by damped Newton with an analytic banded
//! Jacobian; an optional Picard mode iterates the frozen-coefficient linear
//! problem instead.
//!
//! Discrete structure, by construction:
//! - densities and temperature are exponentials of the unknowns, so any
//!   accepted step is strictly positive nodewise;
//! - the total density never enters the update (closure of the softmax), so
//!   `sum_i rho_i = rho_total` is pinned;
//! - the Soret flux is assembled with the exact face difference of `e^{-w}`
//!   and the Dufour flux with face-averaged coefficients times `grad v`, so
//!   the two cross terms cancel exactly when the system is tested with
//!   `(v, e^{-w0} - e^{-w})`;
//! - `kappa grad theta` uses the exact face difference of `e^w`, making the
//!   heat production a nonnegative `cosh` expression facewise;
//! - the epsilon terms are realized through `D2^T D2` forms whose tested
//!   quantities are sums of squares.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::band::{BandError, BandedMatrix};
use crate::diagnostics::{entropy_balance, EntropyLedger};
use crate::grid::{Field, Grid1D};
use crate::onsager::{MatrixError, MatrixModel};
use crate::thermo::{
    densities_from_potentials, mixture_from_entropy, potentials_from_densities, DomainError,
    EntropyState, MixtureState,
};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("non-finite residual at node {node}, equation {field}")]
    NonFinite { node: usize, field: usize },
    #[error("Newton did not converge after {iterations} iterations (residual {last_residual:.3e})")]
    NonConvergence {
        iterations: usize,
        last_residual: f64,
    },
    #[error("linear solve failed: {0}")]
    LinearSolve(#[from] BandError),
    #[error("matrix model failed: {0}")]
    Matrix(#[from] MatrixError),
    #[error("state left the admissible domain: {0}")]
    Domain(#[from] DomainError),
    #[error("run aborted at t = {t}: {reason}")]
    Abort { t: f64, reason: String },
}

/// Heat conductivity `kappa(theta) = (c + C)/2 * (1 + theta^2)`, sitting in
/// the middle of the admissible growth band `[c (1+theta^2), C (1+theta^2)]`.
#[derive(Debug, Clone, Copy)]
pub struct KappaModel {
    pub c_kappa: f64,
    pub big_c_kappa: f64,
}

impl KappaModel {
    pub fn evaluate(&self, theta: f64) -> f64 {
        0.5 * (self.c_kappa + self.big_c_kappa) * (1.0 + theta * theta)
    }

    pub fn derivative(&self, theta: f64) -> f64 {
        (self.c_kappa + self.big_c_kappa) * theta
    }

    /// Checks the growth bounds on a sample ladder of temperatures. With
    /// `lambda = 0` only the weaker lower bound `c theta^2` is required.
    pub fn satisfies_growth_bounds(&self, lambda: f64) -> bool {
        let thetas = [1e-3, 0.1, 0.5, 1.0, 2.0, 10.0, 100.0];
        thetas.iter().all(|&t| {
            let k = self.evaluate(t);
            let lower = if lambda > 0.0 {
                self.c_kappa * (1.0 + t * t)
            } else {
                self.c_kappa * t * t
            };
            k >= lower - 1e-12 && k <= self.big_c_kappa * (1.0 + t * t) + 1e-12
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReactionModel {
    None,
    /// `r_i = -c_r (Pi q)_i`; sums to zero and gives
    /// `sum_i r_i q_i = -c_r |Pi q|^2` exactly.
    LinearPiQ { c_r: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Formulation {
    /// Fluxes through `M grad v` (Theorem-style nondegenerate form).
    Potential,
    /// Fluxes through `(M_ij / rho_j) grad rho_j` (degenerate form).
    Density,
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonParams {
    pub tol: f64,
    pub max_iter: usize,
    pub damping_min: f64,
    pub picard_fallback: bool,
}

impl Default for NewtonParams {
    fn default() -> Self {
        Self {
            tol: 1e-11,
            max_iter: 25,
            damping_min: 1e-8,
            picard_fallback: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SchemeConfig {
    pub tau: f64,
    pub epsilon: f64,
    pub lambda: f64,
    pub theta0: f64,
    pub kappa: KappaModel,
    pub matrix_model: MatrixModel,
    pub reaction: ReactionModel,
    pub formulation: Formulation,
    pub newton: NewtonParams,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SolveStats {
    pub newton_iterations: usize,
    pub picard_iterations: usize,
    pub final_residual: f64,
    pub used_picard: bool,
}

/// Per-step diagnostics: solver effort, entropy ledger, conserved
/// quantities, and field extrema.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub t: f64,
    pub tau: f64,
    pub halvings: u32,
    pub stats: SolveStats,
    pub ledger: EntropyLedger,
    pub masses: Vec<f64>,
    pub energy: f64,
    pub rho_min: Vec<f64>,
    pub rho_max: Vec<f64>,
    pub theta_min: f64,
    pub theta_max: f64,
    /// `lambda [(theta0 - theta)_left + (theta0 - theta)_right]`
    pub boundary_heat_exchange: f64,
    pub structural_ok: bool,
}

#[derive(Debug, Clone)]
pub struct TrajectoryEntry {
    pub t: f64,
    pub state: MixtureState,
    pub report: StepReport,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub grid: Grid1D,
    pub initial: MixtureState,
    pub entries: Vec<TrajectoryEntry>,
    pub violations: Vec<String>,
}

// ---------------------------------------------------------------------------
// assembly
// ---------------------------------------------------------------------------

/// One implicit step frozen against its previous state.
struct StepProblem<'a> {
    cfg: &'a SchemeConfig,
    grid: Grid1D,
    n: usize,
    tau: f64,
    w0: f64,
    rho_total: Vec<f64>,
    rho_prev: Vec<Vec<f64>>,
    theta_prev: Vec<f64>,
}

/// State-dependent quantities evaluated once per residual/Jacobian call.
struct NodalEval {
    rho: Vec<Vec<f64>>,
    theta: Vec<f64>,
    eneg: Vec<f64>,
    kappa: Vec<f64>,
    m: Vec<DMatrix<f64>>,
    soret: Vec<DVector<f64>>,
    /// density formulation: `C_ij = M_ij / rho_j` per node
    c_over_rho: Vec<DMatrix<f64>>,
    /// density formulation: `M_j / rho_j` per node
    dufour_over_rho: Vec<DVector<f64>>,
}

fn index(node: usize, field: usize, nf: usize) -> usize {
    node * nf + field
}

impl<'a> StepProblem<'a> {
    fn new(
        cfg: &'a SchemeConfig,
        y_prev: &EntropyState,
        rho_total: &Field,
        tau: f64,
    ) -> Result<Self, SolverError> {
        let grid = y_prev.grid();
        let n = y_prev.n_species();
        let cells = grid.cells();
        let mut rho_prev = Vec::with_capacity(cells);
        let mut theta_prev = Vec::with_capacity(cells);
        for k in 0..cells {
            let vk: Vec<f64> = y_prev.v.iter().map(|f| f.values()[k]).collect();
            rho_prev.push(densities_from_potentials(&vk, rho_total.values()[k])?);
            theta_prev.push(y_prev.w.values()[k].exp());
        }
        Ok(Self {
            cfg,
            grid,
            n,
            tau,
            w0: cfg.theta0.ln(),
            rho_total: rho_total.values().to_vec(),
            rho_prev,
            theta_prev,
        })
    }

    fn dim(&self) -> usize {
        self.grid.cells() * self.n
    }

    fn bandwidth(&self) -> usize {
        let reach = if self.cfg.epsilon > 0.0 { 2 } else { 1 };
        reach * self.n + self.n - 1
    }

    fn node_values<'y>(&self, y: &'y [f64], k: usize) -> (&'y [f64], f64) {
        let nf = self.n;
        (&y[k * nf..k * nf + nf - 1], y[k * nf + nf - 1])
    }

    fn evaluate(&self, y: &[f64]) -> Result<NodalEval, SolverError> {
        let cells = self.grid.cells();
        let n = self.n;
        let density = self.cfg.formulation == Formulation::Density;
        let mut eval = NodalEval {
            rho: Vec::with_capacity(cells),
            theta: Vec::with_capacity(cells),
            eneg: Vec::with_capacity(cells),
            kappa: Vec::with_capacity(cells),
            m: Vec::with_capacity(cells),
            soret: Vec::with_capacity(cells),
            c_over_rho: Vec::new(),
            dufour_over_rho: Vec::new(),
        };
        for k in 0..cells {
            let (vk, wk) = self.node_values(y, k);
            if !wk.is_finite() || vk.iter().any(|x| !x.is_finite()) {
                return Err(SolverError::NonFinite { node: k, field: n - 1 });
            }
            let theta = wk.exp();
            if !theta.is_finite() || theta <= 0.0 {
                return Err(SolverError::NonFinite { node: k, field: n - 1 });
            }
            let rho = densities_from_potentials(vk, self.rho_total[k])?;
            let onsager = self.cfg.matrix_model.evaluate(&rho, theta)?;
            if density {
                let mut c = DMatrix::zeros(n, n);
                let mut d = DVector::zeros(n);
                for j in 0..n {
                    for i in 0..n {
                        c[(i, j)] = onsager.m[(i, j)] / rho[j];
                    }
                    d[j] = onsager.soret[j] / rho[j];
                }
                eval.c_over_rho.push(c);
                eval.dufour_over_rho.push(d);
            }
            eval.kappa.push(self.cfg.kappa.evaluate(theta));
            eval.eneg.push((-wk).exp());
            eval.theta.push(theta);
            eval.rho.push(rho);
            eval.m.push(onsager.m);
            eval.soret.push(onsager.soret);
        }
        Ok(eval)
    }

    /// `(Pi q)_i = v_i - (sum_j v_j)/n` with the gauge `v_n = 0`.
    fn pi_q(&self, vk: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mean = vk.iter().sum::<f64>() / n as f64;
        let mut out: Vec<f64> = vk.iter().map(|x| x - mean).collect();
        out.push(-mean);
        out
    }

    fn residual(&self, y: &[f64]) -> Result<Vec<f64>, SolverError> {
        let eval = self.evaluate(y)?;
        let cells = self.grid.cells();
        let h = self.grid.spacing();
        let n = self.n;
        let nv = n - 1;
        let nf = n;
        let cfg = self.cfg;
        let density = cfg.formulation == Formulation::Density;

        // face fluxes: Y_i = -J_i (mass) and H = -J_e (energy)
        let mut mass_flux = vec![vec![0.0; cells + 1]; nv];
        let mut energy_flux = vec![0.0; cells + 1];
        for f in 1..cells {
            let (l, r) = (f - 1, f);
            let dv: Vec<f64> = (0..nv)
                .map(|j| (y[index(r, j, nf)] - y[index(l, j, nf)]) / h)
                .collect();
            let deneg = (eval.eneg[r] - eval.eneg[l]) / h;
            let dtheta = (eval.theta[r] - eval.theta[l]) / h;
            let kappa_f = 0.5 * (eval.kappa[l] + eval.kappa[r]);
            if density {
                let drho: Vec<f64> = (0..n)
                    .map(|j| (eval.rho[r][j] - eval.rho[l][j]) / h)
                    .collect();
                for i in 0..nv {
                    let mut y_if = 0.0;
                    for j in 0..n {
                        y_if +=
                            0.5 * (eval.c_over_rho[l][(i, j)] + eval.c_over_rho[r][(i, j)])
                                * drho[j];
                    }
                    y_if += 0.5 * (eval.soret[l][i] + eval.soret[r][i]) * deneg;
                    mass_flux[i][f] = y_if;
                }
                let mut h_f = kappa_f * dtheta;
                for j in 0..n {
                    h_f += 0.5 * (eval.dufour_over_rho[l][j] + eval.dufour_over_rho[r][j])
                        * drho[j];
                }
                energy_flux[f] = h_f;
            } else {
                for i in 0..nv {
                    let mut y_if = 0.0;
                    for j in 0..nv {
                        y_if += 0.5 * (eval.m[l][(i, j)] + eval.m[r][(i, j)]) * dv[j];
                    }
                    y_if += 0.5 * (eval.soret[l][i] + eval.soret[r][i]) * deneg;
                    mass_flux[i][f] = y_if;
                }
                let mut h_f = kappa_f * dtheta;
                for j in 0..nv {
                    h_f += 0.5 * (eval.soret[l][j] + eval.soret[r][j]) * dv[j];
                }
                energy_flux[f] = h_f;
            }
        }
        energy_flux[0] = -cfg.lambda * (cfg.theta0 - eval.theta[0]);
        energy_flux[cells] = cfg.lambda * (cfg.theta0 - eval.theta[cells - 1]);

        let mut res = vec![0.0; self.dim()];
        for k in 0..cells {
            let (vk, wk) = self.node_values(y, k);
            let reaction = match cfg.reaction {
                ReactionModel::None => vec![0.0; nv],
                ReactionModel::LinearPiQ { c_r } => {
                    let pq = self.pi_q(vk);
                    (0..nv).map(|i| -c_r * pq[i]).collect()
                }
            };
            for i in 0..nv {
                res[index(k, i, nf)] = (eval.rho[k][i] - self.rho_prev[k][i]) / self.tau
                    - (mass_flux[i][k + 1] - mass_flux[i][k]) / h
                    - reaction[i];
            }
            res[index(k, nv, nf)] = self.rho_total[k] * (eval.theta[k] - self.theta_prev[k])
                / self.tau
                - (energy_flux[k + 1] - energy_flux[k]) / h;
            let _ = wk;
        }

        if cfg.epsilon > 0.0 {
            self.add_regularization(y, &eval, &mut res);
        }

        for (i, r) in res.iter().enumerate() {
            if !r.is_finite() {
                return Err(SolverError::NonFinite {
                    node: i / nf,
                    field: i % nf,
                });
            }
        }
        Ok(res)
    }

    /// The epsilon terms: `(D2^T D2 + I) v_i` in the mass rows, and in the
    /// energy row the curvature term `D2^T(e^{2w} (-D2 e^{-w}))`, the
    /// face-valued `|grad w|^2 grad w` divergence, and the lower-order
    /// relaxation `(e^{w0} + e^w)(w - w0)`.
    fn add_regularization(&self, y: &[f64], eval: &NodalEval, res: &mut [f64]) {
        let cells = self.grid.cells();
        let h = self.grid.spacing();
        let n = self.n;
        let nv = n - 1;
        let nf = n;
        let eps = self.cfg.epsilon;
        let grid = self.grid;

        for i in 0..nv {
            let vi = Field::new(grid, (0..cells).map(|k| y[index(k, i, nf)]).collect());
            let bil = crate::grid::discrete_bilaplacian(&vi);
            for k in 0..cells {
                res[index(k, i, nf)] += eps * (bil.values()[k] + vi.values()[k]);
            }
        }

        let eneg = Field::new(grid, eval.eneg.clone());
        let d2e = crate::grid::second_diff(&eneg);
        let z = Field::new(
            grid,
            (0..cells)
                .map(|k| -eval.theta[k] * eval.theta[k] * d2e.values()[k])
                .collect(),
        );
        let curvature = crate::grid::second_diff_transpose(&z);

        // face-valued p-term flux, zero on boundary faces
        let mut p_flux = vec![0.0; cells + 1];
        for f in 1..cells {
            let (l, r) = (f - 1, f);
            let s = (y[index(r, nv, nf)] - y[index(l, nv, nf)]) / h;
            p_flux[f] = 0.5 * (eval.theta[l] + eval.theta[r]) * s * s * s;
        }

        let ew0 = self.w0.exp();
        for k in 0..cells {
            let wk = y[index(k, nv, nf)];
            res[index(k, nv, nf)] += eps * curvature.values()[k]
                - eps * (p_flux[k + 1] - p_flux[k]) / h
                + eps * (ew0 + eval.theta[k]) * (wk - self.w0);
        }
    }

    fn jacobian(&self, y: &[f64], frozen: bool) -> Result<BandedMatrix, SolverError> {
        let eval = self.evaluate(y)?;
        let cells = self.grid.cells();
        let h = self.grid.spacing();
        let n = self.n;
        let nv = n - 1;
        let nf = n;
        let cfg = self.cfg;
        let density = cfg.formulation == Formulation::Density;
        let band = self.bandwidth();
        let mut jac = BandedMatrix::new(self.dim(), band, band);

        // chained model derivatives per node (skipped in frozen mode)
        struct NodeDerivs {
            drho_dv: Vec<Vec<f64>>,      // [species][m]
            dm_dv: Vec<DMatrix<f64>>,    // [m]
            dms_dv: Vec<DVector<f64>>,   // [m]
            dm_dw: DMatrix<f64>,
            dms_dw: DVector<f64>,
            dc_dv: Vec<DMatrix<f64>>,    // density form
            dc_dw: DMatrix<f64>,
            dd_dv: Vec<DVector<f64>>,
            dd_dw: DVector<f64>,
        }
        let mut derivs: Vec<NodeDerivs> = Vec::with_capacity(cells);
        for k in 0..cells {
            let rho = &eval.rho[k];
            let theta = eval.theta[k];
            let total = self.rho_total[k];
            let mut drho_dv = vec![vec![0.0; nv]; n];
            for i in 0..n {
                for m in 0..nv {
                    let delta = if i == m { 1.0 } else { 0.0 };
                    drho_dv[i][m] = rho[i] * (delta - rho[m] / total);
                }
            }
            let (dm_dv, dms_dv, dm_dw, dms_dw) = if frozen {
                (
                    vec![DMatrix::zeros(n, n); nv],
                    vec![DVector::zeros(n); nv],
                    DMatrix::zeros(n, n),
                    DVector::zeros(n),
                )
            } else {
                let md = cfg.matrix_model.derivatives(rho, theta)?;
                let mut dm_dv = Vec::with_capacity(nv);
                let mut dms_dv = Vec::with_capacity(nv);
                for m in 0..nv {
                    let mut dm = DMatrix::zeros(n, n);
                    let mut ds = DVector::zeros(n);
                    for j in 0..n {
                        dm += &md.d_m_drho[j] * drho_dv[j][m];
                        ds += &md.d_soret_drho[j] * drho_dv[j][m];
                    }
                    dm_dv.push(dm);
                    dms_dv.push(ds);
                }
                (
                    dm_dv,
                    dms_dv,
                    &md.d_m_dtheta * theta,
                    &md.d_soret_dtheta * theta,
                )
            };
            let (dc_dv, dc_dw, dd_dv, dd_dw) = if density {
                let mut dc_dv = Vec::with_capacity(nv);
                let mut dd_dv = Vec::with_capacity(nv);
                for m in 0..nv {
                    let mut dc = DMatrix::zeros(n, n);
                    let mut dd = DVector::zeros(n);
                    for j in 0..n {
                        for i in 0..n {
                            dc[(i, j)] = (dm_dv[m][(i, j)] * rho[j]
                                - eval.m[k][(i, j)] * drho_dv[j][m])
                                / (rho[j] * rho[j]);
                        }
                        dd[j] = (dms_dv[m][j] * rho[j] - eval.soret[k][j] * drho_dv[j][m])
                            / (rho[j] * rho[j]);
                    }
                    dc_dv.push(dc);
                    dd_dv.push(dd);
                }
                let mut dc_dw = DMatrix::zeros(n, n);
                let mut dd_dw = DVector::zeros(n);
                for j in 0..n {
                    for i in 0..n {
                        dc_dw[(i, j)] = dm_dw[(i, j)] / rho[j];
                    }
                    dd_dw[j] = dms_dw[j] / rho[j];
                }
                (dc_dv, dc_dw, dd_dv, dd_dw)
            } else {
                (Vec::new(), DMatrix::zeros(0, 0), Vec::new(), DVector::zeros(0))
            };
            derivs.push(NodeDerivs {
                drho_dv,
                dm_dv,
                dms_dv,
                dm_dw,
                dms_dw,
                dc_dv,
                dc_dw,
                dd_dv,
                dd_dw,
            });
        }

        // node-diagonal parts: time derivative, reaction, Robin boundary
        for k in 0..cells {
            let nd = &derivs[k];
            for i in 0..nv {
                for m in 0..nv {
                    jac.add(
                        index(k, i, nf),
                        index(k, m, nf),
                        nd.drho_dv[i][m] / self.tau,
                    );
                }
            }
            jac.add(
                index(k, nv, nf),
                index(k, nv, nf),
                self.rho_total[k] * eval.theta[k] / self.tau,
            );
            if let ReactionModel::LinearPiQ { c_r } = cfg.reaction {
                if !frozen {
                    for i in 0..nv {
                        for m in 0..nv {
                            let delta = if i == m { 1.0 } else { 0.0 };
                            jac.add(
                                index(k, i, nf),
                                index(k, m, nf),
                                c_r * (delta - 1.0 / n as f64),
                            );
                        }
                    }
                }
            }
        }
        if cfg.lambda > 0.0 && !frozen {
            jac.add(
                index(0, nv, nf),
                index(0, nv, nf),
                cfg.lambda * eval.theta[0] / h,
            );
            jac.add(
                index(cells - 1, nv, nf),
                index(cells - 1, nv, nf),
                cfg.lambda * eval.theta[cells - 1] / h,
            );
        }

        // flux terms, face by face
        for f in 1..cells {
            let (l, r) = (f - 1, f);
            let dv: Vec<f64> = (0..nv)
                .map(|j| (y[index(r, j, nf)] - y[index(l, j, nf)]) / h)
                .collect();
            let deneg = (eval.eneg[r] - eval.eneg[l]) / h;
            let dtheta = (eval.theta[r] - eval.theta[l]) / h;
            let kappa_f = 0.5 * (eval.kappa[l] + eval.kappa[r]);
            let drho: Vec<f64> = if density {
                (0..n)
                    .map(|j| (eval.rho[r][j] - eval.rho[l][j]) / h)
                    .collect()
            } else {
                Vec::new()
            };
            for (&node, &sign) in [l, r].iter().zip([-1.0f64, 1.0].iter()) {
                let nd = &derivs[node];
                // d flux / d v[node][m] and d flux / d w[node]
                for m in 0..=nv {
                    let is_w = m == nv;
                    let mut d_mass = vec![0.0; nv];
                    let mut d_energy;
                    if is_w {
                        for i in 0..nv {
                            let mut acc = 0.0;
                            if density {
                                for j in 0..n {
                                    acc += 0.5 * nd.dc_dw[(i, j)] * drho[j];
                                }
                            } else {
                                for j in 0..nv {
                                    acc += 0.5 * nd.dm_dw[(i, j)] * dv[j];
                                }
                            }
                            acc += 0.5 * nd.dms_dw[i] * deneg;
                            // exact face difference of e^{-w}
                            acc += 0.5 * (eval.soret[l][i] + eval.soret[r][i])
                                * (-sign * eval.eneg[node] / h);
                            d_mass[i] = acc;
                        }
                        let mut acc = kappa_f * sign * eval.theta[node] / h;
                        if !frozen {
                            acc += 0.5
                                * self.cfg.kappa.derivative(eval.theta[node])
                                * eval.theta[node]
                                * dtheta;
                            if density {
                                for j in 0..n {
                                    acc += 0.5 * nd.dd_dw[j] * drho[j];
                                }
                            } else {
                                for j in 0..nv {
                                    acc += 0.5 * nd.dms_dw[j] * dv[j];
                                }
                            }
                        }
                        d_energy = acc;
                        if frozen {
                            // frozen mode keeps only the principal kappa part
                            for dm in d_mass.iter_mut() {
                                *dm = 0.0;
                            }
                            d_energy = kappa_f * sign * eval.theta[node] / h;
                        }
                    } else {
                        for i in 0..nv {
                            let mut acc = 0.0;
                            if density {
                                for j in 0..n {
                                    acc += 0.5 * nd.dc_dv[m][(i, j)] * drho[j];
                                    acc += 0.5
                                        * (eval.c_over_rho[l][(i, j)]
                                            + eval.c_over_rho[r][(i, j)])
                                        * sign
                                        * nd.drho_dv[j][m]
                                        / h;
                                }
                            } else {
                                for j in 0..nv {
                                    acc += 0.5 * nd.dm_dv[m][(i, j)] * dv[j];
                                }
                                acc += 0.5 * (eval.m[l][(i, m)] + eval.m[r][(i, m)]) * sign / h;
                            }
                            acc += 0.5 * nd.dms_dv[m][i] * deneg;
                            d_mass[i] = acc;
                        }
                        let mut acc = 0.0;
                        if density {
                            for j in 0..n {
                                acc += 0.5 * nd.dd_dv[m][j] * drho[j];
                                acc += 0.5
                                    * (eval.dufour_over_rho[l][j] + eval.dufour_over_rho[r][j])
                                    * sign
                                    * nd.drho_dv[j][m]
                                    / h;
                            }
                        } else {
                            for j in 0..nv {
                                acc += 0.5 * nd.dms_dv[m][j] * dv[j];
                            }
                            acc += 0.5 * (eval.soret[l][m] + eval.soret[r][m]) * sign / h;
                        }
                        d_energy = acc;
                        if frozen {
                            // keep the principal M grad v coupling only
                            for (i, dm) in d_mass.iter_mut().enumerate() {
                                *dm = if density {
                                    (0..n)
                                        .map(|j| {
                                            0.5 * (eval.c_over_rho[l][(i, j)]
                                                + eval.c_over_rho[r][(i, j)])
                                                * sign
                                                * nd.drho_dv[j][m]
                                                / h
                                        })
                                        .sum()
                                } else {
                                    0.5 * (eval.m[l][(i, m)] + eval.m[r][(i, m)]) * sign / h
                                };
                            }
                            d_energy = 0.0;
                        }
                    }
                    let col = index(node, m, nf);
                    for i in 0..nv {
                        if d_mass[i] != 0.0 {
                            jac.add(index(l, i, nf), col, -d_mass[i] / h);
                            jac.add(index(r, i, nf), col, d_mass[i] / h);
                        }
                    }
                    if d_energy != 0.0 {
                        jac.add(index(l, nv, nf), col, -d_energy / h);
                        jac.add(index(r, nv, nf), col, d_energy / h);
                    }
                }
            }
        }

        if cfg.epsilon > 0.0 {
            self.add_regularization_jacobian(y, &eval, &mut jac);
        }
        Ok(jac)
    }

    fn add_regularization_jacobian(&self, y: &[f64], eval: &NodalEval, jac: &mut BandedMatrix) {
        let cells = self.grid.cells();
        let h = self.grid.spacing();
        let h2 = h * h;
        let n = self.n;
        let nv = n - 1;
        let nf = n;
        let eps = self.cfg.epsilon;

        // mass rows: eps (D2^T D2 + I) v_i; compose the stencil rows
        // coefficient of f[p] in (D2 f)[m], with the natural closure
        let d2coef = |m: usize, p: isize| -> f64 {
            if m == 0 || m == cells - 1 {
                return 0.0;
            }
            let m = m as isize;
            if p == m - 1 || p == m + 1 {
                1.0 / h2
            } else if p == m {
                -2.0 / h2
            } else {
                0.0
            }
        };
        for k in 0..cells {
            for i in 0..nv {
                jac.add(index(k, i, nf), index(k, i, nf), eps);
            }
            // (D2^T D2)[k][p] = sum_m d2coef(m, k) d2coef(m, p)
            let m_lo = k.saturating_sub(1).max(1);
            let m_hi = (k + 1).min(cells.saturating_sub(2));
            for m in m_lo..=m_hi {
                for dp in -1isize..=1 {
                    let p = m as isize + dp;
                    if p < 0 || p >= cells as isize {
                        continue;
                    }
                    let c = d2coef(m, k as isize) * d2coef(m, p);
                    if c != 0.0 {
                        for i in 0..nv {
                            jac.add(index(k, i, nf), index(p as usize, i, nf), eps * c);
                        }
                    }
                }
            }
        }

        // energy row curvature term: T = D2^T z, z_m = -theta_m^2 (D2 e^{-w})_m
        let d2e = |m: usize| -> f64 {
            if m == 0 || m == cells - 1 {
                0.0
            } else {
                (eval.eneg[m + 1] - 2.0 * eval.eneg[m] + eval.eneg[m - 1]) / h2
            }
        };
        for k in 0..cells {
            let m_lo = k.saturating_sub(1).max(1);
            let m_hi = (k + 1).min(cells.saturating_sub(2));
            for m in m_lo..=m_hi {
                let dk = d2coef(m, k as isize);
                if dk == 0.0 {
                    continue;
                }
                let theta2 = eval.theta[m] * eval.theta[m];
                let z_m = -theta2 * d2e(m);
                // d z_m / d w_p = 2 z_m delta_pm + theta_m^2 e^{-w_p} S2(m, p)
                jac.add(index(k, nv, nf), index(m, nv, nf), eps * dk * 2.0 * z_m);
                for dp in -1isize..=1 {
                    let p = m as isize + dp;
                    if p < 0 || p >= cells as isize {
                        continue;
                    }
                    let s2 = d2coef(m, p);
                    if s2 != 0.0 {
                        jac.add(
                            index(k, nv, nf),
                            index(p as usize, nv, nf),
                            eps * dk * theta2 * eval.eneg[p as usize] * s2,
                        );
                    }
                }
            }
        }

        // p-term faces: -eps (X_{k+1} - X_k)/h with X_f = mean(theta) s^3
        for f in 1..cells {
            let (l, r) = (f - 1, f);
            let s = (y[index(r, nv, nf)] - y[index(l, nv, nf)]) / h;
            let mean_theta = 0.5 * (eval.theta[l] + eval.theta[r]);
            for (&node, &sign) in [l, r].iter().zip([-1.0f64, 1.0].iter()) {
                let dx = 0.5 * eval.theta[node] * s * s * s
                    + mean_theta * 3.0 * s * s * sign / h;
                let col = index(node, nv, nf);
                jac.add(index(l, nv, nf), col, -eps * dx / h);
                jac.add(index(r, nv, nf), col, eps * dx / h);
            }
        }

        // lower-order relaxation
        let ew0 = self.w0.exp();
        for k in 0..cells {
            let wk = y[index(k, nv, nf)];
            jac.add(
                index(k, nv, nf),
                index(k, nv, nf),
                eps * (eval.theta[k] * (wk - self.w0) + ew0 + eval.theta[k]),
            );
        }
    }
}

/// Assembles the stacked nonlinear residual of one implicit step: per cell,
/// `n - 1` mass equations followed by the energy equation.
pub fn residual(
    y: &EntropyState,
    y_prev: &EntropyState,
    rho_total: &Field,
    cfg: &SchemeConfig,
    tau: f64,
) -> Result<Vec<f64>, SolverError> {
    let problem = StepProblem::new(cfg, y_prev, rho_total, tau)?;
    problem.residual(&flatten(y))
}

/// Assembles the analytic banded Jacobian of [`residual`] with respect to
/// the nodal unknowns `(v', w)`.
pub fn jacobian(
    y: &EntropyState,
    y_prev: &EntropyState,
    rho_total: &Field,
    cfg: &SchemeConfig,
    tau: f64,
) -> Result<BandedMatrix, SolverError> {
    let problem = StepProblem::new(cfg, y_prev, rho_total, tau)?;
    problem.jacobian(&flatten(y), false)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
}

fn flatten(y: &EntropyState) -> Vec<f64> {
    let cells = y.grid().cells();
    let nv = y.v.len();
    let nf = nv + 1;
    let mut out = vec![0.0; cells * nf];
    for k in 0..cells {
        for i in 0..nv {
            out[index(k, i, nf)] = y.v[i].values()[k];
        }
        out[index(k, nv, nf)] = y.w.values()[k];
    }
    out
}

fn unflatten(grid: Grid1D, n: usize, y: &[f64]) -> EntropyState {
    let cells = grid.cells();
    let nv = n - 1;
    let nf = n;
    let v = (0..nv)
        .map(|i| Field::new(grid, (0..cells).map(|k| y[index(k, i, nf)]).collect()))
        .collect();
    let w = Field::new(grid, (0..cells).map(|k| y[index(k, nv, nf)]).collect());
    EntropyState { v, w }
}

/// One implicit Euler step by damped Newton; on failure, the
/// frozen-coefficient Picard iteration when enabled.
pub fn solve_step(
    y_prev: &EntropyState,
    rho_total: &Field,
    cfg: &SchemeConfig,
    tau: f64,
) -> Result<(EntropyState, SolveStats), SolverError> {
    let problem = StepProblem::new(cfg, y_prev, rho_total, tau)?;
    let y0 = flatten(y_prev);
    match newton_iterate(&problem, y0.clone()) {
        Ok((y, stats)) => Ok((unflatten(problem.grid, problem.n, &y), stats)),
        Err(err) if cfg.newton.picard_fallback => {
            let (y, mut stats) = picard_iterate(&problem, y0).map_err(|_| err)?;
            stats.used_picard = true;
            Ok((unflatten(problem.grid, problem.n, &y), stats))
        }
        Err(err) => Err(err),
    }
}

fn newton_iterate(
    problem: &StepProblem,
    mut y: Vec<f64>,
) -> Result<(Vec<f64>, SolveStats), SolverError> {
    let params = problem.cfg.newton;
    let mut residual = problem.residual(&y)?;
    let mut norm = inf_norm(&residual);
    let mut iterations = 0;
    while norm > params.tol {
        if iterations >= params.max_iter {
            return Err(SolverError::NonConvergence {
                iterations,
                last_residual: norm,
            });
        }
        let jac = problem.jacobian(&y, false)?;
        let lu = jac.factor()?;
        let mut delta = residual.clone();
        lu.solve(&mut delta);
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..=30 {
            let trial: Vec<f64> = y
                .iter()
                .zip(&delta)
                .map(|(yi, di)| yi - alpha * di)
                .collect();
            if let Ok(f_trial) = problem.residual(&trial) {
                let n_trial = inf_norm(&f_trial);
                if n_trial < norm || n_trial <= params.tol {
                    y = trial;
                    residual = f_trial;
                    norm = n_trial;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
            if alpha < params.damping_min {
                break;
            }
        }
        if !accepted {
            return Err(SolverError::NonConvergence {
                iterations,
                last_residual: norm,
            });
        }
        iterations += 1;
    }
    Ok((
        y,
        SolveStats {
            newton_iterations: iterations,
            picard_iterations: 0,
            final_residual: norm,
            used_picard: false,
        },
    ))
}

/// Fixed-point iteration on the linear problem with coefficients frozen at
/// the current iterate. The matrix keeps the time-derivative blocks and the
/// principal diffusion parts; Soret, Dufour, reaction, and boundary
/// couplings stay lagged on the right-hand side, so the fixed point is
/// exactly a residual zero.
fn picard_iterate(
    problem: &StepProblem,
    mut y: Vec<f64>,
) -> Result<(Vec<f64>, SolveStats), SolverError> {
    let params = problem.cfg.newton;
    const MAX_PICARD: usize = 400;
    let mut residual = problem.residual(&y)?;
    let mut norm = inf_norm(&residual);
    let mut iterations = 0;
    while norm > params.tol {
        if iterations >= MAX_PICARD {
            return Err(SolverError::NonConvergence {
                iterations,
                last_residual: norm,
            });
        }
        let jac = problem.jacobian(&y, true)?;
        let lu = jac.factor()?;
        let mut delta = residual.clone();
        lu.solve(&mut delta);
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..=20 {
            let trial: Vec<f64> = y
                .iter()
                .zip(&delta)
                .map(|(yi, di)| yi - alpha * di)
                .collect();
            if let Ok(f_trial) = problem.residual(&trial) {
                let n_trial = inf_norm(&f_trial);
                if n_trial < norm || n_trial <= params.tol {
                    y = trial;
                    residual = f_trial;
                    norm = n_trial;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(SolverError::NonConvergence {
                iterations,
                last_residual: norm,
            });
        }
        iterations += 1;
    }
    Ok((
        y,
        SolveStats {
            newton_iterations: 0,
            picard_iterations: iterations,
            final_residual: norm,
            used_picard: true,
        },
    ))
}

const MAX_TAU_HALVINGS: u32 = 10;

/// Advances the scheme with fixed `tau` until `t_end`. A non-convergent
/// step is retried with a halved step size (up to ten times) before the
/// run aborts. Every accepted step is measured against the entropy and
/// positivity gates; violations are flagged on the trajectory.
pub fn run<F>(
    initial: &MixtureState,
    cfg: &SchemeConfig,
    t_end: f64,
    mut on_step: F,
) -> Result<Trajectory, SolverError>
where
    F: FnMut(&TrajectoryEntry),
{
    let grid = initial.grid();
    let (mut y, _) = potentials_from_densities(initial)?;
    let rho_total = initial.rho_total.clone();
    let mut trajectory = Trajectory {
        grid,
        initial: initial.clone(),
        entries: Vec::new(),
        violations: Vec::new(),
    };
    let mut t = 0.0;
    while t_end - t > 1e-9 * cfg.tau {
        let mut tau_try = cfg.tau.min(t_end - t);
        let mut halvings = 0;
        let (y_new, stats) = loop {
            match solve_step(&y, &rho_total, cfg, tau_try) {
                Ok(pair) => break pair,
                Err(SolverError::NonConvergence { iterations, last_residual })
                    if halvings < MAX_TAU_HALVINGS =>
                {
                    let _ = (iterations, last_residual);
                    halvings += 1;
                    tau_try *= 0.5;
                }
                Err(e) => {
                    return Err(SolverError::Abort {
                        t,
                        reason: e.to_string(),
                    })
                }
            }
        };
        t += tau_try;
        let state = mixture_from_entropy(&y_new, &rho_total)?;
        let ledger = entropy_balance(&y, &y_new, &rho_total, cfg, tau_try);
        let report = build_report(t, tau_try, halvings, stats, ledger, &state, cfg);
        if !report.ledger.pass {
            trajectory
                .violations
                .push(format!("entropy balance failed at t = {t}"));
        }
        if !report.structural_ok {
            trajectory
                .violations
                .push(format!("positivity violated at t = {t}"));
        }
        let entry = TrajectoryEntry {
            t,
            state,
            report,
        };
        on_step(&entry);
        trajectory.entries.push(entry);
        y = y_new;
    }
    Ok(trajectory)
}

fn build_report(
    t: f64,
    tau: f64,
    halvings: u32,
    stats: SolveStats,
    ledger: EntropyLedger,
    state: &MixtureState,
    cfg: &SchemeConfig,
) -> StepReport {
    let masses: Vec<f64> = state.rho.iter().map(crate::grid::integrate).collect();
    let energy = crate::grid::integrate(&Field::new(
        state.grid(),
        state
            .rho_total
            .values()
            .iter()
            .zip(state.theta.values())
            .map(|(r, th)| r * th)
            .collect(),
    ));
    let rho_min: Vec<f64> = state.rho.iter().map(Field::min).collect();
    let rho_max: Vec<f64> = state.rho.iter().map(Field::max).collect();
    let theta_min = state.theta.min();
    let theta_max = state.theta.max();
    let tl = state.theta.values()[0];
    let tr = state.theta.values()[state.grid().cells() - 1];
    let structural_ok = rho_min.iter().all(|&r| r > 0.0) && theta_min > 0.0;
    StepReport {
        t,
        tau,
        halvings,
        stats,
        ledger,
        masses,
        energy,
        rho_min,
        rho_max,
        theta_min,
        theta_max,
        boundary_heat_exchange: cfg.lambda * ((cfg.theta0 - tl) + (cfg.theta0 - tr)),
        structural_ok,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::onsager::{FrictionSpec, ModelParams};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn basic_cfg(n: usize) -> SchemeConfig {
        SchemeConfig {
            tau: 1e-3,
            epsilon: 0.0,
            lambda: 0.0,
            theta0: 1.0,
            kappa: KappaModel {
                c_kappa: 1.0,
                big_c_kappa: 1.0,
            },
            matrix_model: crate::onsager::builtin_matrix_model(
                "constant_pi",
                n,
                ModelParams {
                    c: Some(1.0),
                    ..Default::default()
                },
            )
            .unwrap(),
            reaction: ReactionModel::None,
            formulation: Formulation::Potential,
            newton: NewtonParams::default(),
        }
    }

    fn uniform_entropy_state(grid: Grid1D, n: usize, v: f64, w: f64) -> EntropyState {
        EntropyState {
            v: (0..n - 1).map(|_| Field::constant(grid, v)).collect(),
            w: Field::constant(grid, w),
        }
    }

    #[test]
    fn residual_zero_at_uniform_steady_state() {
        let grid = Grid1D::new(1.0, 8).unwrap();
        let cfg = basic_cfg(2);
        let y = uniform_entropy_state(grid, 2, 0.3, 0.1);
        let rho_total = Field::constant(grid, 2.0);
        let problem = StepProblem::new(&cfg, &y, &rho_total, cfg.tau).unwrap();
        let res = problem.residual(&flatten(&y)).unwrap();
        assert!(inf_norm(&res) < 1e-13);
    }

    #[test]
    fn residual_zero_at_thermal_equilibrium_with_robin() {
        let grid = Grid1D::new(1.0, 8).unwrap();
        let mut cfg = basic_cfg(2);
        cfg.lambda = 3.0;
        cfg.theta0 = 1.7;
        let y = uniform_entropy_state(grid, 2, -0.2, cfg.theta0.ln());
        let rho_total = Field::constant(grid, 1.0);
        let problem = StepProblem::new(&cfg, &y, &rho_total, cfg.tau).unwrap();
        let res = problem.residual(&flatten(&y)).unwrap();
        assert!(inf_norm(&res) < 1e-12);
        // with regularization the full equilibrium also needs v = 0
        cfg.epsilon = 1e-2;
        let y0 = uniform_entropy_state(grid, 2, 0.0, cfg.theta0.ln());
        let problem = StepProblem::new(&cfg, &y0, &rho_total, cfg.tau).unwrap();
        let res = problem.residual(&flatten(&y0)).unwrap();
        assert!(inf_norm(&res) < 1e-12);
    }

    #[test]
    fn robin_term_appears_only_in_boundary_cells() {
        let grid = Grid1D::new(1.0, 8).unwrap();
        let mut cfg = basic_cfg(2);
        cfg.lambda = 2.0;
        cfg.theta0 = 1.5;
        let theta: f64 = 1.2;
        let y = uniform_entropy_state(grid, 2, 0.0, theta.ln());
        let rho_total = Field::constant(grid, 1.0);
        let problem = StepProblem::new(&cfg, &y, &rho_total, cfg.tau).unwrap();
        let res = problem.residual(&flatten(&y)).unwrap();
        let h = grid.spacing();
        let expected = -cfg.lambda * (cfg.theta0 - theta) / h;
        // energy rows: boundary cells carry the Robin term, interior zero
        assert_relative_eq!(res[index(0, 1, 2)], expected, epsilon = 1e-10);
        assert_relative_eq!(res[index(7, 1, 2)], expected, epsilon = 1e-10);
        for k in 1..7 {
            assert!(res[index(k, 1, 2)].abs() < 1e-12);
            assert!(res[index(k, 0, 2)].abs() < 1e-12);
        }
    }

    fn random_flat_state(dim_nodes: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut y = Vec::with_capacity(dim_nodes * n);
        for _ in 0..dim_nodes {
            for _ in 0..n - 1 {
                y.push(rng.gen_range(-1.0..1.0));
            }
            y.push(rng.gen_range(-0.5..0.5));
        }
        y
    }

    fn fd_jacobian_check(cfg: &SchemeConfig, cells: usize, n: usize, seed: u64) {
        let grid = Grid1D::new(1.0, cells).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rho_total = Field::from_fn(grid, |x| 1.5 + 0.3 * (2.0 * x).sin());
        let y_prev = EntropyState {
            v: (0..n - 1)
                .map(|_| Field::from_fn(grid, |x| 0.2 * (3.0 * x).cos()))
                .collect(),
            w: Field::from_fn(grid, |x| 0.1 * x),
        };
        let problem = StepProblem::new(cfg, &y_prev, &rho_total, cfg.tau).unwrap();
        let y = random_flat_state(cells, n, &mut rng);
        let jac = problem.jacobian(&y, false).unwrap();
        let dim = y.len();
        let band = problem.bandwidth();
        for col in 0..dim {
            let step = 1e-6 * (1.0 + y[col].abs());
            let mut yp = y.clone();
            yp[col] += step;
            let mut ym = y.clone();
            ym[col] -= step;
            let fp = problem.residual(&yp).unwrap();
            let fm = problem.residual(&ym).unwrap();
            for row in 0..dim {
                let fd = (fp[row] - fm[row]) / (2.0 * step);
                let an = jac.get(row, col);
                let denom = 1.0 + fd.abs().max(an.abs());
                assert!(
                    (fd - an).abs() <= 1e-6 * denom,
                    "jacobian mismatch at ({row}, {col}): fd={fd:.6e} an={an:.6e}"
                );
                if (row as isize - col as isize).unsigned_abs() > band {
                    assert!(
                        fd.abs() < 1e-7 * denom,
                        "entry outside declared band at ({row}, {col}): {fd:e}"
                    );
                }
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences_potential() {
        let mut cfg = basic_cfg(3);
        cfg.lambda = 0.7;
        cfg.theta0 = 1.3;
        cfg.reaction = ReactionModel::LinearPiQ { c_r: 0.4 };
        cfg.matrix_model = MatrixModel::MaxwellStefan {
            friction: FrictionSpec::uniform(3, 1.0),
            q_star: vec![0.5, -0.1, -0.4],
        };
        fd_jacobian_check(&cfg, 8, 3, 17);
        cfg.epsilon = 1e-3;
        fd_jacobian_check(&cfg, 8, 3, 18);
    }

    #[test]
    fn jacobian_matches_finite_differences_density() {
        let mut cfg = basic_cfg(2);
        cfg.formulation = Formulation::Density;
        cfg.lambda = 0.5;
        cfg.matrix_model = MatrixModel::DegeneratePiRhoPi {
            q_star: vec![1.0, -1.0],
        };
        fd_jacobian_check(&cfg, 8, 2, 19);
        cfg.epsilon = 1e-3;
        fd_jacobian_check(&cfg, 8, 2, 20);
    }

    #[test]
    fn equilibrium_converges_immediately() {
        let grid = Grid1D::new(1.0, 8).unwrap();
        let mut cfg = basic_cfg(2);
        cfg.lambda = 1.0;
        let y = uniform_entropy_state(grid, 2, 0.4, 0.0);
        let rho_total = Field::constant(grid, 1.0);
        let (y_new, stats) = solve_step(&y, &rho_total, &cfg, cfg.tau).unwrap();
        assert!(stats.newton_iterations <= 1);
        for k in 0..8 {
            assert_relative_eq!(y_new.w.values()[k], y.w.values()[k], epsilon = 1e-9);
        }
    }

    #[test]
    fn uniform_relaxation_matches_scalar_recursion() {
        // near-infinite conduction keeps the temperature uniform, so the
        // energy mean follows theta = (rho0 L thbar + 2 tau lambda th0) /
        // (rho0 L + 2 tau lambda)
        let grid = Grid1D::new(1.0, 8).unwrap();
        let mut cfg = basic_cfg(2);
        cfg.lambda = 1.0;
        cfg.theta0 = 1.0;
        cfg.tau = 1e-4;
        cfg.kappa = KappaModel {
            c_kappa: 1e6,
            big_c_kappa: 1e6,
        };
        // the kappa-scaled residual floor sits near 1e-8 here
        cfg.newton.tol = 1e-7;
        let theta_init: f64 = 1.02;
        let rho0 = 1.0;
        let rho_total = Field::constant(grid, rho0);
        let mut y = uniform_entropy_state(grid, 2, 0.0, theta_init.ln());
        let length = grid.length();
        let mut mean = theta_init;
        for _ in 0..20 {
            let (y_new, _) = solve_step(&y, &rho_total, &cfg, cfg.tau).unwrap();
            let theta_mean = y_new
                .w
                .values()
                .iter()
                .map(|w| w.exp())
                .sum::<f64>()
                / 8.0;
            mean = (rho0 * length * mean + 2.0 * cfg.tau * cfg.lambda * cfg.theta0)
                / (rho0 * length + 2.0 * cfg.tau * cfg.lambda);
            assert_relative_eq!(theta_mean, mean, epsilon = 1e-10);
            y = y_new;
        }
    }

    #[test]
    fn picard_agrees_with_newton() {
        let grid = Grid1D::new(1.0, 12).unwrap();
        let mut cfg = basic_cfg(2);
        cfg.tau = 5e-4;
        let r1 = Field::from_fn(grid, |x| 0.6 + 0.2 * (std::f64::consts::PI * x).cos());
        let r2 = Field::from_fn(grid, |x| 1.0 - 0.2 * (std::f64::consts::PI * x).cos());
        let theta = Field::constant(grid, 1.0);
        let state = MixtureState::new(vec![r1, r2], theta).unwrap();
        let (y0, _) = potentials_from_densities(&state).unwrap();
        let (newton_y, _) = solve_step(&y0, &state.rho_total, &cfg, cfg.tau).unwrap();
        let problem = StepProblem::new(&cfg, &y0, &state.rho_total, cfg.tau).unwrap();
        let (picard_y, stats) = picard_iterate(&problem, flatten(&y0)).unwrap();
        assert!(stats.picard_iterations > 0);
        let picard_y = unflatten(grid, 2, &picard_y);
        for k in 0..12 {
            assert_relative_eq!(
                picard_y.v[0].values()[k],
                newton_y.v[0].values()[k],
                epsilon = 1e-8
            );
        }
    }

    #[test]
    fn run_conserves_mass_without_sources() {
        let grid = Grid1D::new(1.0, 16).unwrap();
        let mut cfg = basic_cfg(2);
        cfg.tau = 2e-3;
        let r1 = Field::from_fn(grid, |x| 0.5 + 0.3 * (std::f64::consts::PI * x).cos());
        let r2 = Field::from_fn(grid, |x| 1.5 - 0.3 * (std::f64::consts::PI * x).cos());
        let state = MixtureState::new(vec![r1, r2], Field::constant(grid, 1.0)).unwrap();
        let m0: Vec<f64> = state.rho.iter().map(crate::grid::integrate).collect();
        let energy0 = crate::grid::integrate(&Field::new(
            grid,
            state
                .rho_total
                .values()
                .iter()
                .zip(state.theta.values())
                .map(|(r, t)| r * t)
                .collect(),
        ));
        let trajectory = run(&state, &cfg, 0.05, |_| {}).unwrap();
        assert!(trajectory.violations.is_empty());
        let last = trajectory.entries.last().unwrap();
        for i in 0..2 {
            assert_relative_eq!(last.report.masses[i], m0[i], max_relative = 1e-10);
        }
        assert_relative_eq!(last.report.energy, energy0, max_relative = 1e-10);
        // mixing decreases entropy monotonically
        let mut prev = f64::INFINITY;
        for e in &trajectory.entries {
            assert!(e.report.ledger.phi_after <= prev + 1e-10);
            prev = e.report.ledger.phi_after;
        }
    }

    #[test]
    fn run_relaxes_to_background_temperature() {
        let grid = Grid1D::new(1.0, 12).unwrap();
        let mut cfg = basic_cfg(2);
        cfg.lambda = 5.0;
        cfg.theta0 = 1.0;
        cfg.tau = 0.05;
        let state = MixtureState::new(
            vec![Field::constant(grid, 0.5), Field::constant(grid, 0.5)],
            Field::from_fn(grid, |x| 1.4 + 0.1 * x),
        )
        .unwrap();
        let trajectory = run(&state, &cfg, 12.0, |_| {}).unwrap();
        let last = trajectory.entries.last().unwrap();
        let dev = last
            .state
            .theta
            .values()
            .iter()
            .map(|t| (t - cfg.theta0).abs())
            .fold(0.0f64, f64::max);
        assert!(dev < 1e-6, "final deviation {dev:.3e}");
    }
}
