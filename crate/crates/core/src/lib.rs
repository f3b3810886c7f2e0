//! Structure-preserving 1D solver for Maxwell-Stefan-Fourier cross-diffusion
//! systems in Fick-Onsager form.
//!
//! The scheme advances the partial mass densities `rho_1..rho_n` and the
//! temperature `theta` through an implicit Euler step posed in the entropy
//! variables `v_i = log(rho_i/rho_n)`, `w = log theta`. Positivity and the
//! nodewise constancy of the total density come for free from the change of
//! variables; the discrete entropy balance, conservation ledgers, and
//! temperature estimates are recomputed after every step and gate the run.
//!
//! Modules:
//! - [`thermo`]: entropy, potentials, and the density/potential bijection
//! - [`onsager`]: diffusion matrices, the Maxwell-Stefan friction route
//!   through the group inverse, and coercivity certificates
//! - [`grid`]: 1D finite-volume primitives with exact summation by parts
//! - [`scheme`]: the implicit step, Newton/Picard solvers, and the time loop
//! - [`diagnostics`]: entropy/temperature/conservation ledgers
//! - [`config`] and [`cli`]: TOML-configured runs, certification, and
//!   refinement studies with CSV export

pub mod band;
pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod grid;
pub mod onsager;
pub mod scheme;
pub mod thermo;
