//! Construction and certification of the Onsager diffusion matrix `M` and
//! the Soret/Dufour vector `M_i`.
//!
//! The Maxwell-Stefan route builds the friction matrix `B` from pairwise
//! friction coefficients, takes its group inverse `B#` through a bordered
//! solve with the known kernels (right kernel `rho`, left kernel `1`), and
//! assembles `M = B# R P` with `R = diag(rho)` and the projection
//! `P = I - 1 (rho/rho_tot)^T`. Certificates measure the coercivity
//! constants of the nondegenerate and density-weighted quadratic-form
//! conditions by exact small-matrix eigen-solves.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::thermo::project_pi;

#[derive(Debug, Error)]
pub enum MatrixError {
    #[error("friction matrix is not symmetric at ({i}, {j}): {a} vs {b}")]
    AsymmetricFriction { i: usize, j: usize, a: f64, b: f64 },
    #[error("friction coefficient b[{i}][{j}] = {value} must be positive off the diagonal")]
    NonpositiveFriction { i: usize, j: usize, value: f64 },
    #[error("negative friction coefficient b[{i}][{j}] = {value}")]
    NegativeFriction { i: usize, j: usize, value: f64 },
    #[error("friction matrix rank deficiency beyond one (pivot ratio {pivot_ratio:.2e})")]
    RankDeficient { pivot_ratio: f64 },
    #[error("q_star is not rho-orthogonal: sum q*_i rho_i = {dot:.3e}")]
    QStarNotOrthogonal { dot: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown matrix model `{0}` (expected constant_pi | maxwell_stefan | degenerate_pirhopi | custom)")]
    UnknownModel(String),
    #[error("matrix model `{model}` is missing parameter `{param}`")]
    MissingParameter { model: &'static str, param: &'static str },
}

/// Pairwise friction coefficients, constant or state-dependent.
#[derive(Clone)]
pub enum FrictionSpec {
    Constant(DMatrix<f64>),
    StateDependent(Arc<dyn Fn(&[f64], f64) -> DMatrix<f64> + Send + Sync>),
}

impl fmt::Debug for FrictionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FrictionSpec::Constant(b) => write!(f, "FrictionSpec::Constant({b:?})"),
            FrictionSpec::StateDependent(_) => write!(f, "FrictionSpec::StateDependent(..)"),
        }
    }
}

impl FrictionSpec {
    pub fn constant(b: DMatrix<f64>) -> Result<Self, MatrixError> {
        validate_friction(&b)?;
        Ok(FrictionSpec::Constant(b))
    }

    /// Uniform coefficient `b` for every pair.
    pub fn uniform(n: usize, b: f64) -> Self {
        let mut m = DMatrix::from_element(n, n, b);
        for i in 0..n {
            m[(i, i)] = 0.0;
        }
        FrictionSpec::Constant(m)
    }

    pub fn evaluate(&self, rho: &[f64], theta: f64) -> Result<DMatrix<f64>, MatrixError> {
        let b = match self {
            FrictionSpec::Constant(b) => b.clone(),
            FrictionSpec::StateDependent(f) => {
                let b = f(rho, theta);
                validate_friction(&b)?;
                b
            }
        };
        if b.nrows() != rho.len() {
            return Err(MatrixError::DimensionMismatch {
                expected: rho.len(),
                got: b.nrows(),
            });
        }
        Ok(b)
    }
}

fn validate_friction(b: &DMatrix<f64>) -> Result<(), MatrixError> {
    let scale = 1.0 + b.amax();
    for i in 0..b.nrows() {
        for j in i + 1..b.ncols() {
            if (b[(i, j)] - b[(j, i)]).abs() > 1e-13 * scale {
                return Err(MatrixError::AsymmetricFriction {
                    i,
                    j,
                    a: b[(i, j)],
                    b: b[(j, i)],
                });
            }
            if b[(i, j)] < 0.0 {
                return Err(MatrixError::NegativeFriction {
                    i,
                    j,
                    value: b[(i, j)],
                });
            }
        }
    }
    Ok(())
}

/// Friction matrix `B` with `B_ii = sum_{j != i} b_ij rho_j`,
/// `B_ij = -b_ij rho_i`, evaluated at the state it was built from.
/// `B rho = 0` and `1^T B = 0` hold by construction.
#[derive(Debug, Clone)]
pub struct FrictionMatrixB {
    pub matrix: DMatrix<f64>,
    pub rho: Vec<f64>,
}

impl FrictionMatrixB {
    /// Max residuals of the two kernel identities, relative to the matrix scale.
    pub fn kernel_residuals(&self) -> (f64, f64) {
        let n = self.rho.len();
        let scale = 1.0 + self.matrix.amax();
        let rho = DVector::from_column_slice(&self.rho);
        let right = (&self.matrix * &rho).amax() / scale;
        let mut left: f64 = 0.0;
        for j in 0..n {
            let col: f64 = (0..n).map(|i| self.matrix[(i, j)]).sum();
            left = left.max(col.abs());
        }
        (right, left / scale)
    }
}

pub fn friction_matrix(rho: &[f64], spec: &FrictionSpec) -> Result<FrictionMatrixB, MatrixError> {
    let n = rho.len();
    let b = spec.evaluate(rho, 1.0)?;
    let mut matrix = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut diag = 0.0;
        for j in 0..n {
            if i != j {
                diag += b[(i, j)] * rho[j];
                matrix[(i, j)] = -b[(i, j)] * rho[i];
            }
        }
        matrix[(i, i)] = diag;
    }
    Ok(FrictionMatrixB {
        matrix,
        rho: rho.to_vec(),
    })
}

fn kernel_projector(rho: &[f64]) -> DMatrix<f64> {
    let n = rho.len();
    let total: f64 = rho.iter().sum();
    DMatrix::from_fn(n, n, |i, _| rho[i] / total)
}

/// Group inverse `B#` of the index-1 friction matrix, via the bordered
/// nonsingular system `(B + Q) X = I - Q` with the oblique kernel projector
/// `Q = rho 1^T / (1 . rho)`; then `B# = X (I - Q)`.
pub fn group_inverse(b: &FrictionMatrixB) -> Result<DMatrix<f64>, MatrixError> {
    let (b_sharp, _) = group_inverse_with_lu(b)?;
    Ok(b_sharp)
}

fn group_inverse_with_lu(
    b: &FrictionMatrixB,
) -> Result<(DMatrix<f64>, nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>), MatrixError> {
    let n = b.rho.len();
    let q = kernel_projector(&b.rho);
    let bordered = &b.matrix + &q;
    let lu = bordered.clone().lu();
    // a second kernel direction shows up as a vanishing pivot of the
    // bordered system
    let u = lu.u();
    let mut pmin = f64::INFINITY;
    let mut pmax: f64 = 0.0;
    for i in 0..n {
        let p = u[(i, i)].abs();
        pmin = pmin.min(p);
        pmax = pmax.max(p);
    }
    if pmin <= 1e-12 * pmax {
        return Err(MatrixError::RankDeficient {
            pivot_ratio: pmin / pmax,
        });
    }
    let rhs = DMatrix::identity(n, n) - &q;
    let x = lu.solve(&rhs).ok_or(MatrixError::RankDeficient {
        pivot_ratio: 0.0,
    })?;
    Ok((&x * &rhs, lu))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Constant,
    MaxwellStefan,
    Degenerate,
    Custom,
}

/// Pointwise diffusion matrix and Soret/Dufour vector, with their origin.
#[derive(Debug, Clone)]
pub struct OnsagerMatrices {
    pub m: DMatrix<f64>,
    pub soret: DVector<f64>,
    pub provenance: Provenance,
}

impl OnsagerMatrices {
    pub fn n(&self) -> usize {
        self.m.nrows()
    }

    /// Max violation of the structural conditions: column sums of `M` and of
    /// the Soret vector (relative), symmetry (relative), and the most
    /// negative eigenvalue (absolute).
    pub fn structural_residuals(&self) -> StructuralResiduals {
        let n = self.n();
        let scale = 1.0 + self.m.amax();
        let mut col_sum: f64 = 0.0;
        let mut sym: f64 = 0.0;
        for j in 0..n {
            col_sum = col_sum.max((0..n).map(|i| self.m[(i, j)]).sum::<f64>().abs());
            for i in 0..j {
                sym = sym.max((self.m[(i, j)] - self.m[(j, i)]).abs());
            }
        }
        let soret_sum = self.soret.iter().sum::<f64>().abs() / (1.0 + self.soret.amax());
        let symmetrized = (&self.m + self.m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(symmetrized);
        let min_eig = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        StructuralResiduals {
            column_sum: col_sum / scale,
            soret_sum,
            symmetry: sym / scale,
            min_eigenvalue: min_eig,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StructuralResiduals {
    pub column_sum: f64,
    pub soret_sum: f64,
    pub symmetry: f64,
    pub min_eigenvalue: f64,
}

impl StructuralResiduals {
    pub fn pass(&self, tol: f64) -> bool {
        self.column_sum <= tol
            && self.soret_sum <= tol
            && self.symmetry <= tol
            && self.min_eigenvalue >= -tol
    }
}

/// Onsager matrices from the Maxwell-Stefan friction route:
/// `M = B# R P`, `M_i = -theta sum_k B#_ik rho_k q*_k`. Requires the
/// weights to satisfy `sum_i q*_i rho_i = 0`.
pub fn onsager_from_friction(
    rho: &[f64],
    theta: f64,
    spec: &FrictionSpec,
    q_star: &[f64],
) -> Result<OnsagerMatrices, MatrixError> {
    let n = rho.len();
    if q_star.len() != n {
        return Err(MatrixError::DimensionMismatch {
            expected: n,
            got: q_star.len(),
        });
    }
    let weighted: f64 = q_star.iter().zip(rho).map(|(q, r)| q * r).sum();
    let scale: f64 = 1.0 + q_star.iter().zip(rho).map(|(q, r)| (q * r).abs()).sum::<f64>();
    if weighted.abs() > 1e-10 * scale {
        return Err(MatrixError::QStarNotOrthogonal { dot: weighted });
    }
    let b = spec.evaluate(rho, theta)?;
    for i in 0..n {
        for j in 0..n {
            if i != j && b[(i, j)] <= 0.0 {
                return Err(MatrixError::NonpositiveFriction {
                    i,
                    j,
                    value: b[(i, j)],
                });
            }
        }
    }
    let friction = friction_matrix(rho, spec)?;
    let b_sharp = group_inverse(&friction)?;
    Ok(assemble_onsager(&b_sharp, rho, theta, q_star))
}

fn assemble_onsager(
    b_sharp: &DMatrix<f64>,
    rho: &[f64],
    theta: f64,
    q_star: &[f64],
) -> OnsagerMatrices {
    let n = rho.len();
    let total: f64 = rho.iter().sum();
    // M = B# R P with P = I - 1 (rho/rho_tot)^T
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                let p_kj = if k == j { 1.0 } else { 0.0 } - rho[j] / total;
                acc += b_sharp[(i, k)] * rho[k] * p_kj;
            }
            m[(i, j)] = acc;
        }
    }
    let soret = DVector::from_fn(n, |i, _| {
        -theta
            * (0..n)
                .map(|k| b_sharp[(i, k)] * rho[k] * q_star[k])
                .sum::<f64>()
    });
    OnsagerMatrices {
        m,
        soret,
        provenance: Provenance::MaxwellStefan,
    }
}

/// Projects a constant weight vector onto the rho-orthogonal hyperplane:
/// `q* - (sum q*_j rho_j / rho_tot) 1`.
pub fn project_q_star(q_star: &[f64], rho: &[f64]) -> Vec<f64> {
    let total: f64 = rho.iter().sum();
    let shift: f64 = q_star.iter().zip(rho).map(|(q, r)| q * r).sum::<f64>() / total;
    q_star.iter().map(|q| q - shift).collect()
}

/// Verifies that the Maxwell-Stefan and Fick-Onsager flux forms agree:
/// computes `J` from `(M, M_i)` and the driving forces `d` directly from
/// the same gradient data, and returns `||d + B J||_inf / max(1, ||d||_inf)`.
pub fn flux_equivalence_check(
    rho: &[f64],
    theta: f64,
    grad_q: &[f64],
    grad_inv_theta: f64,
    spec: &FrictionSpec,
    q_star: &[f64],
) -> Result<f64, MatrixError> {
    let n = rho.len();
    let q_eff = project_q_star(q_star, rho);
    let onsager = onsager_from_friction(rho, theta, spec, &q_eff)?;
    // Fick-Onsager fluxes from the same gradients
    let flux: Vec<f64> = (0..n)
        .map(|i| {
            -(0..n)
                .map(|j| onsager.m[(i, j)] * grad_q[j])
                .sum::<f64>()
                - onsager.soret[i] * grad_inv_theta
        })
        .collect();
    // driving forces: d_i = rho_i grad(mu_i/theta) - rho_i/(rho theta) grad(rho theta)
    //                      - 2 rho_i theta grad(1/theta) + q*_i rho_i grad(log theta),
    // with every gradient expressed through grad_q and grad(1/theta):
    //   grad(mu_i/theta) = grad q_i,  grad(log theta) = -theta grad(1/theta),
    //   grad rho_j = rho_j (grad q_j - theta grad(1/theta)),
    //   grad theta = -theta^2 grad(1/theta).
    let total: f64 = rho.iter().sum();
    let grad_log_theta = -theta * grad_inv_theta;
    let grad_rho_theta: f64 = theta
        * rho
            .iter()
            .zip(grad_q)
            .map(|(r, g)| r * (g + grad_log_theta))
            .sum::<f64>()
        + total * (-theta * theta * grad_inv_theta);
    let d: Vec<f64> = (0..n)
        .map(|i| {
            rho[i] * grad_q[i] - rho[i] / (total * theta) * grad_rho_theta
                - 2.0 * rho[i] * theta * grad_inv_theta
                + q_eff[i] * rho[i] * grad_log_theta
        })
        .collect();
    let friction = friction_matrix(rho, spec)?;
    let mut residual: f64 = 0.0;
    let mut d_norm: f64 = 0.0;
    for i in 0..n {
        let bj: f64 = (0..n).map(|j| friction.matrix[(i, j)] * flux[j]).sum();
        residual = residual.max((d[i] + bj).abs());
        d_norm = d_norm.max(d[i].abs());
    }
    Ok(residual / d_norm.max(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoercivityKind {
    M2,
    M3,
}

/// Coercivity certificate: the measured constant and a witness vector
/// minimizing the Rayleigh quotient.
#[derive(Debug, Clone)]
pub struct CoercivityCertificate {
    pub kind: CoercivityKind,
    pub c_m: f64,
    pub witness: DVector<f64>,
}

/// Orthonormal (Helmert) basis of `span{1}^perp` as columns.
pub fn ones_complement_basis(n: usize) -> DMatrix<f64> {
    let mut u = DMatrix::zeros(n, n - 1);
    for k in 1..n {
        let norm = (k as f64 * (k as f64 + 1.0)).sqrt();
        for i in 0..k {
            u[(i, k - 1)] = 1.0 / norm;
        }
        u[(k, k - 1)] = -(k as f64) / norm;
    }
    u
}

/// Measures the nondegenerate coercivity constant: the smallest eigenvalue
/// of `Pi M Pi` restricted to `span{1}^perp`.
pub fn certify_m2(onsager: &OnsagerMatrices) -> CoercivityCertificate {
    let n = onsager.n();
    let u = ones_complement_basis(n);
    let a = u.transpose() * &onsager.m * &u;
    let sym = (&a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let (idx, &c_m) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    let witness = &u * eig.eigenvectors.column(idx);
    CoercivityCertificate {
        kind: CoercivityKind::M2,
        c_m,
        witness,
    }
}

/// Outcome of the reduced-coercivity verification of the leading
/// `(n-1) x (n-1)` block against `c_M / n`.
#[derive(Debug, Clone)]
pub struct ReducedCoercivityReport {
    pub pass: bool,
    pub min_eigenvalue: f64,
    pub bound: f64,
    pub witness: Option<Vec<f64>>,
}

/// Checks `sum_{i,j<n} M_ij y_i y_j >= (c_M/n) |y|^2` by the exact
/// eigen-solve of the leading block.
pub fn reduced_coercivity_check(onsager: &OnsagerMatrices, c_m: f64) -> ReducedCoercivityReport {
    let n = onsager.n();
    let block = onsager.m.view((0, 0), (n - 1, n - 1)).into_owned();
    let sym = (&block + block.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let (idx, &min_eig) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    let bound = c_m / n as f64;
    let tol = 1e-12 * (1.0 + onsager.m.amax());
    let pass = min_eig >= bound - tol;
    ReducedCoercivityReport {
        pass,
        min_eigenvalue: min_eig,
        bound,
        witness: if pass {
            None
        } else {
            Some(eig.eigenvectors.column(idx).iter().copied().collect())
        },
    }
}

/// Measures the degenerate (density-weighted) coercivity constant over the
/// supplied states: the minimum over samples of the generalized eigenvalue
/// problem `z . M z / sum_i rho_i (Pi z)_i^2` on `span{1}^perp`.
pub fn certify_m3(
    model: &MatrixModel,
    states: &[(Vec<f64>, f64)],
) -> Result<CoercivityCertificate, MatrixError> {
    assert!(!states.is_empty(), "certify_m3 needs at least one state");
    let n = states[0].0.len();
    let u = ones_complement_basis(n);
    let mut c_m = f64::INFINITY;
    let mut witness = DVector::zeros(n);
    for (rho, theta) in states {
        let onsager = model.evaluate(rho, *theta)?;
        let a = u.transpose() * &onsager.m * &u;
        let a = (&a + a.transpose()) * 0.5;
        let r = DMatrix::from_fn(n, n, |i, j| if i == j { rho[i] } else { 0.0 });
        let g = u.transpose() * r * &u;
        let chol = Cholesky::new(g).expect("rho-weighted Gram matrix is SPD for positive rho");
        // generalized problem (A, G) -> standard problem L^-1 A L^-T
        let l_inv = chol
            .l()
            .try_inverse()
            .expect("triangular factor is invertible");
        let c = &l_inv * a * l_inv.transpose();
        let eig = SymmetricEigen::new((&c + c.transpose()) * 0.5);
        let (idx, &min_eig) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        if min_eig < c_m {
            c_m = min_eig;
            let y = l_inv.transpose() * eig.eigenvectors.column(idx);
            witness = &u * y;
        }
    }
    Ok(CoercivityCertificate {
        kind: CoercivityKind::M3,
        c_m,
        witness,
    })
}

/// State-dependent derivatives of an Onsager model, used for the exact
/// Jacobian of the implicit step.
#[derive(Debug, Clone)]
pub struct ModelDerivatives {
    /// d M / d rho_m, one matrix per species
    pub d_m_drho: Vec<DMatrix<f64>>,
    /// d M_soret / d rho_m
    pub d_soret_drho: Vec<DVector<f64>>,
    pub d_m_dtheta: DMatrix<f64>,
    pub d_soret_dtheta: DVector<f64>,
}

/// A state-to-matrices map `(rho, theta) -> (M, M_i)` with the structural
/// guarantees of the scheme.
#[derive(Clone)]
pub enum MatrixModel {
    /// `M = c Pi`, `M_i = theta (Pi sigma)_i`; constant in the state.
    ConstantPi { scale: f64, sigma: Vec<f64> },
    /// Maxwell-Stefan friction route with per-run Soret weights, projected
    /// to rho-orthogonality at every state.
    MaxwellStefan {
        friction: FrictionSpec,
        q_star: Vec<f64>,
    },
    /// Degenerate `M = Pi diag(rho) Pi`, `M_i = theta (Pi R Pi q*)_i`.
    DegeneratePiRhoPi { q_star: Vec<f64> },
    /// User-supplied map; treated as frozen in the Jacobian.
    Custom(Arc<dyn Fn(&[f64], f64) -> OnsagerMatrices + Send + Sync>),
}

impl fmt::Debug for MatrixModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatrixModel::ConstantPi { scale, sigma } => f
                .debug_struct("ConstantPi")
                .field("scale", scale)
                .field("sigma", sigma)
                .finish(),
            MatrixModel::MaxwellStefan { friction, q_star } => f
                .debug_struct("MaxwellStefan")
                .field("friction", friction)
                .field("q_star", q_star)
                .finish(),
            MatrixModel::DegeneratePiRhoPi { q_star } => f
                .debug_struct("DegeneratePiRhoPi")
                .field("q_star", q_star)
                .finish(),
            MatrixModel::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// Parameters for [`builtin_matrix_model`].
#[derive(Debug, Clone, Default)]
pub struct ModelParams {
    pub c: Option<f64>,
    pub sigma: Option<Vec<f64>>,
    pub b: Option<DMatrix<f64>>,
    pub q_star: Option<Vec<f64>>,
}

/// Instantiates a named builtin model.
pub fn builtin_matrix_model(
    name: &str,
    n: usize,
    params: ModelParams,
) -> Result<MatrixModel, MatrixError> {
    match name {
        "constant_pi" => Ok(MatrixModel::ConstantPi {
            scale: params.c.ok_or(MatrixError::MissingParameter {
                model: "constant_pi",
                param: "c",
            })?,
            sigma: params.sigma.unwrap_or_else(|| vec![0.0; n]),
        }),
        "maxwell_stefan" => {
            let b = params.b.ok_or(MatrixError::MissingParameter {
                model: "maxwell_stefan",
                param: "b",
            })?;
            Ok(MatrixModel::MaxwellStefan {
                friction: FrictionSpec::constant(b)?,
                q_star: params.q_star.unwrap_or_else(|| vec![0.0; n]),
            })
        }
        "degenerate_pirhopi" => Ok(MatrixModel::DegeneratePiRhoPi {
            q_star: params.q_star.unwrap_or_else(|| vec![0.0; n]),
        }),
        other => Err(MatrixError::UnknownModel(other.to_string())),
    }
}

fn pi_matrix(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        (if i == j { 1.0 } else { 0.0 }) - 1.0 / n as f64
    })
}

fn pi_rho_pi(rho: &[f64]) -> DMatrix<f64> {
    let n = rho.len();
    let total: f64 = rho.iter().sum();
    DMatrix::from_fn(n, n, |i, j| {
        (if i == j { rho[i] } else { 0.0 }) - (rho[i] + rho[j]) / n as f64
            + total / (n * n) as f64
    })
}

impl MatrixModel {
    pub fn evaluate(&self, rho: &[f64], theta: f64) -> Result<OnsagerMatrices, MatrixError> {
        let n = rho.len();
        match self {
            MatrixModel::ConstantPi { scale, sigma } => {
                let soret = DVector::from_vec(project_pi(sigma)) * theta;
                Ok(OnsagerMatrices {
                    m: pi_matrix(n) * *scale,
                    soret,
                    provenance: Provenance::Constant,
                })
            }
            MatrixModel::MaxwellStefan { friction, q_star } => {
                let q_eff = project_q_star(q_star, rho);
                onsager_from_friction(rho, theta, friction, &q_eff)
            }
            MatrixModel::DegeneratePiRhoPi { q_star } => {
                let m = pi_rho_pi(rho);
                let soret = &m * DVector::from_column_slice(q_star) * theta;
                Ok(OnsagerMatrices {
                    m,
                    soret,
                    provenance: Provenance::Degenerate,
                })
            }
            MatrixModel::Custom(f) => Ok(f(rho, theta)),
        }
    }

    /// Analytic state derivatives. The custom model returns zeros (frozen
    /// coefficients); a state-dependent friction callback is treated as
    /// locally constant.
    pub fn derivatives(&self, rho: &[f64], theta: f64) -> Result<ModelDerivatives, MatrixError> {
        let n = rho.len();
        let zeros = || ModelDerivatives {
            d_m_drho: vec![DMatrix::zeros(n, n); n],
            d_soret_drho: vec![DVector::zeros(n); n],
            d_m_dtheta: DMatrix::zeros(n, n),
            d_soret_dtheta: DVector::zeros(n),
        };
        match self {
            MatrixModel::ConstantPi { sigma, .. } => {
                let mut d = zeros();
                d.d_soret_dtheta = DVector::from_vec(project_pi(sigma));
                Ok(d)
            }
            MatrixModel::DegeneratePiRhoPi { q_star } => {
                let mut d = zeros();
                let pi = pi_matrix(n);
                let q = DVector::from_column_slice(q_star);
                for m in 0..n {
                    // d(Pi R Pi)/d rho_m = Pi e_m e_m^T Pi
                    let col = pi.column(m).into_owned();
                    let dm = &col * col.transpose();
                    d.d_soret_drho[m] = &dm * &q * theta;
                    d.d_m_drho[m] = dm;
                }
                d.d_soret_dtheta = pi_rho_pi(rho) * &q;
                Ok(d)
            }
            MatrixModel::MaxwellStefan { friction, q_star } => {
                maxwell_stefan_derivatives(rho, theta, friction, q_star)
            }
            MatrixModel::Custom(_) => Ok(zeros()),
        }
    }
}

fn maxwell_stefan_derivatives(
    rho: &[f64],
    theta: f64,
    friction: &FrictionSpec,
    q_star: &[f64],
) -> Result<ModelDerivatives, MatrixError> {
    let n = rho.len();
    let total: f64 = rho.iter().sum();
    let b = friction.evaluate(rho, theta)?;
    let fric = friction_matrix(rho, friction)?;
    let (b_sharp, lu) = group_inverse_with_lu(&fric)?;
    let q_eff = project_q_star(q_star, rho);
    let q_mean: f64 = q_star.iter().zip(rho).map(|(q, r)| q * r).sum::<f64>() / total;
    let rq = DVector::from_fn(n, |k, _| rho[k] * q_eff[k]);

    let p = DMatrix::from_fn(n, n, |k, j| {
        (if k == j { 1.0 } else { 0.0 }) - rho[j] / total
    });
    let r = DMatrix::from_fn(n, n, |i, j| if i == j { rho[i] } else { 0.0 });
    let rp = &r * &p;

    let mut d_m_drho = Vec::with_capacity(n);
    let mut d_soret_drho = Vec::with_capacity(n);
    for m in 0..n {
        // dB: row m picks up -b_mj, diagonal picks up b_im (i != m)
        let mut db = DMatrix::zeros(n, n);
        for i in 0..n {
            if i != m {
                db[(i, i)] = b[(i, m)];
                db[(m, i)] = -b[(m, i)];
            }
        }
        // dQ with Q = rho 1^T / rho_tot (column-constant)
        let dq_col = DVector::from_fn(n, |i, _| {
            ((if i == m { 1.0 } else { 0.0 }) * total - rho[i]) / (total * total)
        });
        let dq = DMatrix::from_fn(n, n, |i, _| dq_col[i]);
        // (B + Q) dB# = -dQ - (dB + dQ) B#
        let rhs = -&dq - (&db + &dq) * &b_sharp;
        let db_sharp = lu.solve(&rhs).ok_or(MatrixError::RankDeficient {
            pivot_ratio: 0.0,
        })?;
        // dM = dB# R P + B# d(RP); the kernel identity B# rho = 0 removes the
        // dP contribution, and d(R)P is the rank-one e_m (P row m).
        let mut dm = &db_sharp * &rp;
        for i in 0..n {
            for j in 0..n {
                dm[(i, j)] += b_sharp[(i, m)] * p[(m, j)];
            }
        }
        // dM_s = -theta [dB# (rho . q_eff) + q_eff_m B# e_m]; the projection
        // shift differentiates into a multiple of rho, killed by B# rho = 0.
        let mut ds = -(&db_sharp * &rq) * theta;
        for i in 0..n {
            ds[i] -= theta * b_sharp[(i, m)] * q_eff[m];
        }
        // the m-entry of rho.q_eff also moves through the projection shift
        // d q_eff_k / d rho_m = -(q*_m - mean)/total for every k
        let shift = (q_star[m] - q_mean) / total;
        let bs_rho = &b_sharp * DVector::from_column_slice(rho);
        for i in 0..n {
            ds[i] += theta * shift * bs_rho[i];
        }
        d_m_drho.push(dm);
        d_soret_drho.push(ds);
    }
    let d_soret_dtheta = -(&b_sharp * &rq);
    Ok(ModelDerivatives {
        d_m_drho,
        d_soret_drho,
        d_m_dtheta: DMatrix::zeros(n, n),
        d_soret_dtheta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_species() -> FrictionMatrixB {
        friction_matrix(&[1.0, 2.0], &FrictionSpec::uniform(2, 1.0)).unwrap()
    }

    /// Group inverse of a symmetric singular matrix through its
    /// eigendecomposition; independent oracle for the bordered route.
    fn symmetric_group_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
        let eig = SymmetricEigen::new(m.clone());
        let max = eig.eigenvalues.amax();
        let mut inv = DMatrix::zeros(m.nrows(), m.ncols());
        for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda.abs() > 1e-12 * max {
                let v = eig.eigenvectors.column(k);
                inv += v * v.transpose() / lambda;
            }
        }
        inv
    }

    fn random_state(n: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, DMatrix<f64>) {
        let rho: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..3.0)).collect();
        let mut b = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i + 1..n {
                let v = rng.gen_range(0.2..2.0);
                b[(i, j)] = v;
                b[(j, i)] = v;
            }
        }
        (rho, b)
    }

    #[test]
    fn friction_matrix_example() {
        let b = two_species();
        assert_relative_eq!(b.matrix[(0, 0)], 2.0);
        assert_relative_eq!(b.matrix[(0, 1)], -1.0);
        assert_relative_eq!(b.matrix[(1, 0)], -2.0);
        assert_relative_eq!(b.matrix[(1, 1)], 1.0);
        let (right, left) = b.kernel_residuals();
        assert!(right < 1e-14 && left < 1e-14);
    }

    #[test]
    fn friction_rejects_asymmetric() {
        let mut m = DMatrix::zeros(2, 2);
        m[(0, 1)] = 1.0;
        m[(1, 0)] = 2.0;
        assert!(matches!(
            FrictionSpec::constant(m),
            Err(MatrixError::AsymmetricFriction { .. })
        ));
    }

    #[test]
    fn group_inverse_two_species_closed_form() {
        // B^2 = b rho_tot B, so B# = B / (b rho_tot)^2
        let b = two_species();
        let sharp = group_inverse(&b).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(sharp[(i, j)], b.matrix[(i, j)] / 9.0, epsilon = 1e-13);
            }
        }
        // BB# = I - (rho/rho_tot) 1^T
        let prod = &b.matrix * &sharp;
        let expected = DMatrix::from_fn(2, 2, |i, _| {
            [1.0, 2.0][i] / 3.0
        });
        let identity = DMatrix::<f64>::identity(2, 2);
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(
                    prod[(i, j)],
                    identity[(i, j)] - expected[(i, j)],
                    epsilon = 1e-13
                );
            }
        }
    }

    #[test]
    fn group_inverse_identities_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 2..=6 {
            for _ in 0..20 {
                let (rho, b) = random_state(n, &mut rng);
                let fric =
                    friction_matrix(&rho, &FrictionSpec::constant(b).unwrap()).unwrap();
                let sharp = group_inverse(&fric).unwrap();
                let bm = &fric.matrix;
                let scale = 1.0 + bm.amax() + sharp.amax();
                let bsb = bm * &sharp * bm;
                let sbs = &sharp * bm * &sharp;
                let comm = bm * &sharp - &sharp * bm;
                assert!((bsb - bm).amax() / scale < 1e-10);
                assert!((sbs - &sharp).amax() / scale < 1e-10);
                assert!(comm.amax() / scale < 1e-10);
                // paper identities: B# rho = 0 and column sums of B# vanish
                let rho_v = DVector::from_column_slice(&rho);
                assert!((&sharp * rho_v).amax() / scale < 1e-10);
                for j in 0..n {
                    let col: f64 = (0..n).map(|i| sharp[(i, j)]).sum();
                    assert!(col.abs() / scale < 1e-10);
                }
            }
        }
    }

    #[test]
    fn group_inverse_detects_rank_deficiency() {
        // zero friction between a decoupled block produces a second kernel
        let mut b = DMatrix::zeros(3, 3);
        b[(0, 1)] = 1.0;
        b[(1, 0)] = 1.0;
        // species 2 has no friction with anyone
        let fric = friction_matrix(&[1.0, 1.0, 1.0], &FrictionSpec::constant(b).unwrap());
        let fric = fric.unwrap();
        assert!(matches!(
            group_inverse(&fric),
            Err(MatrixError::RankDeficient { .. })
        ));
    }

    #[test]
    fn tau_symmetric_and_bsharp_factorization() {
        // tau = B R is symmetric; B# = P^T R tau# P^T via the eigen route
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [2usize, 3] {
            for _ in 0..10 {
                let (rho, b) = random_state(n, &mut rng);
                let fric =
                    friction_matrix(&rho, &FrictionSpec::constant(b).unwrap()).unwrap();
                let r = DMatrix::from_fn(n, n, |i, j| if i == j { rho[i] } else { 0.0 });
                let tau = &fric.matrix * &r;
                assert!((&tau - tau.transpose()).amax() < 1e-12 * (1.0 + tau.amax()));
                let tau_sharp = symmetric_group_inverse(&tau);
                let total: f64 = rho.iter().sum();
                let p = DMatrix::from_fn(n, n, |i, j| {
                    (if i == j { 1.0 } else { 0.0 }) - rho[j] / total
                });
                let via_tau = p.transpose() * &r * &tau_sharp * p.transpose();
                let direct = group_inverse(&fric).unwrap();
                assert!(
                    (&via_tau - &direct).amax() < 1e-9 * (1.0 + direct.amax()),
                    "n={n}"
                );
            }
        }
    }

    #[test]
    fn onsager_two_species_closed_form() {
        let spec = FrictionSpec::uniform(2, 1.0);
        let onsager = onsager_from_friction(&[1.0, 2.0], 1.3, &spec, &[2.0, -1.0]).unwrap();
        // M = rho1 rho2 / (b rho_tot^2) [[1,-1],[-1,1]] = (2/9) [[1,-1],[-1,1]]
        assert_relative_eq!(onsager.m[(0, 0)], 2.0 / 9.0, epsilon = 1e-13);
        assert_relative_eq!(onsager.m[(0, 1)], -2.0 / 9.0, epsilon = 1e-13);
        assert_relative_eq!(onsager.m[(1, 0)], -2.0 / 9.0, epsilon = 1e-13);
        assert_relative_eq!(onsager.m[(1, 1)], 2.0 / 9.0, epsilon = 1e-13);
        // M_soret at theta = 1: (-2/3, 2/3)
        let at_unit = onsager_from_friction(&[1.0, 2.0], 1.0, &spec, &[2.0, -1.0]).unwrap();
        assert_relative_eq!(at_unit.soret[0], -2.0 / 3.0, epsilon = 1e-13);
        assert_relative_eq!(at_unit.soret[1], 2.0 / 3.0, epsilon = 1e-13);
        assert!(onsager.structural_residuals().pass(1e-12));
    }

    #[test]
    fn onsager_rejects_nonorthogonal_weights() {
        let spec = FrictionSpec::uniform(2, 1.0);
        assert!(matches!(
            onsager_from_friction(&[1.0, 2.0], 1.0, &spec, &[1.0, 1.0]),
            Err(MatrixError::QStarNotOrthogonal { .. })
        ));
    }

    #[test]
    fn flux_equivalence_random_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for n in [2usize, 3, 4] {
            for _ in 0..50 {
                let (rho, b) = random_state(n, &mut rng);
                let theta = rng.gen_range(0.2..4.0);
                let grad_q: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let g_inv_theta = rng.gen_range(-2.0..2.0);
                let q_star: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let res = flux_equivalence_check(
                    &rho,
                    theta,
                    &grad_q,
                    g_inv_theta,
                    &FrictionSpec::constant(b).unwrap(),
                    &q_star,
                )
                .unwrap();
                assert!(res <= 1e-8, "n={n}, residual={res:.3e}");
            }
        }
    }

    #[test]
    fn flux_zero_gradients_zero_residual() {
        let spec = FrictionSpec::uniform(3, 1.0);
        let res =
            flux_equivalence_check(&[1.0, 0.5, 0.7], 1.2, &[0.0; 3], 0.0, &spec, &[0.0; 3])
                .unwrap();
        assert_eq!(res, 0.0);
    }

    #[test]
    fn flux_invariant_under_constant_q_gradient_shift() {
        // row sums of M vanish, so shifting all q-gradients by a constant
        // leaves the fluxes unchanged
        let spec = FrictionSpec::uniform(3, 0.7);
        let rho = [0.8, 1.1, 0.4];
        let theta = 1.5;
        let onsager =
            onsager_from_friction(&rho, theta, &spec, &project_q_star(&[1.0, 0.0, -1.0], &rho))
                .unwrap();
        let g = [0.3, -0.2, 0.9];
        let shifted: Vec<f64> = g.iter().map(|x| x + 5.0).collect();
        for i in 0..3 {
            let j1: f64 = (0..3).map(|j| onsager.m[(i, j)] * g[j]).sum();
            let j2: f64 = (0..3).map(|j| onsager.m[(i, j)] * shifted[j]).sum();
            assert_relative_eq!(j1, j2, epsilon = 1e-12);
        }
    }

    #[test]
    fn certify_m2_examples() {
        let n = 3;
        let pi = OnsagerMatrices {
            m: pi_matrix(n),
            soret: DVector::zeros(n),
            provenance: Provenance::Constant,
        };
        let cert = certify_m2(&pi);
        assert_relative_eq!(cert.c_m, 1.0, epsilon = 1e-12);

        let spec = FrictionSpec::uniform(2, 1.0);
        let ms = onsager_from_friction(&[1.0, 2.0], 1.0, &spec, &[0.0, 0.0]).unwrap();
        let cert = certify_m2(&ms);
        assert_relative_eq!(cert.c_m, 4.0 / 9.0, epsilon = 1e-12);

        let zero = OnsagerMatrices {
            m: DMatrix::zeros(n, n),
            soret: DVector::zeros(n),
            provenance: Provenance::Custom,
        };
        assert_relative_eq!(certify_m2(&zero).c_m, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn reduced_coercivity_pi_n3() {
        let pi = OnsagerMatrices {
            m: pi_matrix(3),
            soret: DVector::zeros(3),
            provenance: Provenance::Constant,
        };
        let report = reduced_coercivity_check(&pi, 1.0);
        assert!(report.pass);
        assert_relative_eq!(report.min_eigenvalue, 1.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(report.bound, 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn reduced_coercivity_random_certified() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [2usize, 3, 4] {
            for _ in 0..20 {
                let (rho, b) = random_state(n, &mut rng);
                let onsager = onsager_from_friction(
                    &rho,
                    1.0,
                    &FrictionSpec::constant(b).unwrap(),
                    &vec![0.0; n],
                )
                .unwrap();
                let cert = certify_m2(&onsager);
                let report = reduced_coercivity_check(&onsager, cert.c_m);
                assert!(report.pass, "witness {:?}", report.witness);
            }
        }
    }

    #[test]
    fn certify_m3_degenerate_model_is_unit() {
        let model = MatrixModel::DegeneratePiRhoPi {
            q_star: vec![0.0; 3],
        };
        let states = vec![
            (vec![1.0, 1.0, 1.0], 1.0),
            (vec![2.0, 1e-6, 0.3], 0.7),
            (vec![0.1, 0.2, 5.0], 3.0),
        ];
        let cert = certify_m3(&model, &states).unwrap();
        assert_relative_eq!(cert.c_m, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn certify_m3_scaled_and_zero() {
        let scaled = MatrixModel::Custom(Arc::new(|rho: &[f64], _| OnsagerMatrices {
            m: pi_rho_pi(rho) * 2.0,
            soret: DVector::zeros(rho.len()),
            provenance: Provenance::Custom,
        }));
        let states = vec![(vec![0.5, 1.5, 1.0], 1.0)];
        assert_relative_eq!(
            certify_m3(&scaled, &states).unwrap().c_m,
            2.0,
            epsilon = 1e-10
        );
        let zero = MatrixModel::Custom(Arc::new(|rho: &[f64], _| OnsagerMatrices {
            m: DMatrix::zeros(rho.len(), rho.len()),
            soret: DVector::zeros(rho.len()),
            provenance: Provenance::Custom,
        }));
        assert_relative_eq!(
            certify_m3(&zero, &states).unwrap().c_m,
            0.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn m2_degenerates_but_m3_stays_unit_for_dilute_states() {
        // the M2 witness is mean-free, so it needs two species to vanish
        // before the unweighted constant collapses; M3 stays at one
        let model = MatrixModel::DegeneratePiRhoPi {
            q_star: vec![0.0; 3],
        };
        let mut last_m2 = f64::INFINITY;
        for &tiny in &[1e-1, 1e-3, 1e-5, 1e-7] {
            let rho = vec![1.0, tiny, tiny];
            let onsager = model.evaluate(&rho, 1.0).unwrap();
            let m2 = certify_m2(&onsager).c_m;
            assert!(m2 < last_m2, "M2 constant should shrink with dilution");
            last_m2 = m2;
            let m3 = certify_m3(&model, &[(rho, 1.0)]).unwrap().c_m;
            assert_relative_eq!(m3, 1.0, epsilon = 1e-7);
        }
        assert!(last_m2 < 1e-6);
    }

    #[test]
    fn builtin_models() {
        let m = builtin_matrix_model("constant_pi", 2, ModelParams {
            c: Some(1.0),
            ..Default::default()
        })
        .unwrap();
        let eval = m.evaluate(&[1.0, 1.0], 1.0).unwrap();
        assert_relative_eq!(eval.m[(0, 0)], 0.5);
        assert_relative_eq!(eval.m[(0, 1)], -0.5);

        // degenerate at rho = 1 is Pi itself
        let d = builtin_matrix_model("degenerate_pirhopi", 3, ModelParams::default()).unwrap();
        let eval = d.evaluate(&[1.0, 1.0, 1.0], 1.0).unwrap();
        let pi = pi_matrix(3);
        assert!((eval.m - pi).amax() < 1e-14);

        assert!(matches!(
            builtin_matrix_model("nope", 2, ModelParams::default()),
            Err(MatrixError::UnknownModel(_))
        ));
    }

    #[test]
    fn model_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let specs: Vec<MatrixModel> = vec![
            MatrixModel::ConstantPi {
                scale: 0.8,
                sigma: vec![0.5, -0.1, -0.4],
            },
            MatrixModel::DegeneratePiRhoPi {
                q_star: vec![1.0, 0.0, -1.0],
            },
            MatrixModel::MaxwellStefan {
                friction: FrictionSpec::constant({
                    let (_, b) = random_state(3, &mut rng);
                    b
                })
                .unwrap(),
                q_star: vec![0.7, -0.2, 0.1],
            },
        ];
        for model in &specs {
            let rho = vec![0.9, 1.4, 0.6];
            let theta = 1.3;
            let der = model.derivatives(&rho, theta).unwrap();
            let step = 1e-6;
            for m in 0..3 {
                let mut plus = rho.clone();
                plus[m] += step;
                let mut minus = rho.clone();
                minus[m] -= step;
                let ep = model.evaluate(&plus, theta).unwrap();
                let em = model.evaluate(&minus, theta).unwrap();
                let fd_m = (ep.m - em.m) / (2.0 * step);
                let fd_s = (ep.soret - em.soret) / (2.0 * step);
                assert!(
                    (&fd_m - &der.d_m_drho[m]).amax() < 1e-6 * (1.0 + fd_m.amax()),
                    "{model:?} dM/drho_{m}"
                );
                assert!(
                    (&fd_s - &der.d_soret_drho[m]).amax() < 1e-6 * (1.0 + fd_s.amax()),
                    "{model:?} dMs/drho_{m}"
                );
            }
            let ep = model.evaluate(&rho, theta + step).unwrap();
            let em = model.evaluate(&rho, theta - step).unwrap();
            let fd_mt = (ep.m - em.m) / (2.0 * step);
            let fd_st = (ep.soret - em.soret) / (2.0 * step);
            assert!((&fd_mt - &der.d_m_dtheta).amax() < 1e-6 * (1.0 + fd_mt.amax()));
            assert!((&fd_st - &der.d_soret_dtheta).amax() < 1e-6 * (1.0 + fd_st.amax()));
        }
    }

    #[test]
    fn onsager_structural_invariants_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for n in 2..=5 {
            for _ in 0..10 {
                let (rho, b) = random_state(n, &mut rng);
                let q: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let onsager = onsager_from_friction(
                    &rho,
                    rng.gen_range(0.3..3.0),
                    &FrictionSpec::constant(b).unwrap(),
                    &project_q_star(&q, &rho),
                )
                .unwrap();
                let res = onsager.structural_residuals();
                assert!(res.pass(1e-10), "{res:?}");
            }
        }
    }
}
