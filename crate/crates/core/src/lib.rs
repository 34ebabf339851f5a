//! Numerical laboratory for Cauchy–de Branges spaces.
//!
//! A Cauchy–de Branges space `H(T, A, μ)` is the Hilbert space of entire
//! functions `F(z) = A(z) · Σ_n a_n μ_n^{1/2} / (z − t_n)` with `{a_n} ∈ ℓ²`,
//! where `T = {t_n}` is a discrete set of complex nodes, `μ = Σ μ_n δ_{t_n}`
//! a positive measure with `Σ μ_n / (|t_n|² + 1) < ∞`, and `A` an entire
//! function with simple zeros exactly on `T`.
//!
//! This crate builds finite truncations of such spaces and studies where the
//! zeros of their elements live:
//!
//! * [`kernel`] — working-precision contexts and error-bounded values (MPFR
//!   backed; all evaluation happens in arbitrary precision),
//! * [`nodes`] — node-set generators (geometric, power, lattices, unions)
//!   with power-separation constants, plus weight measures,
//! * [`entire`] — evaluation of the generating functions `A`: canonical
//!   products with tail bounds, `z⁻¹ sin(πz) sin(πiz)`, the Weierstrass σ
//!   function, rational modifications,
//! * [`space`] — space elements, Cauchy-transform evaluation, moments,
//!   membership diagnostics,
//! * [`zerofind`] — argument-principle subdivision with Newton polishing,
//!   zero classification against localization disks, attraction sets,
//! * [`experiments`] — budgeted localization/ordering/type-2 experiments
//!   with reproducible verdicts.

pub mod entire;
pub mod experiments;
pub mod kernel;
pub mod nodes;
pub mod space;
pub mod zerofind;

pub use kernel::{BoundedValue, KernelError, PrecisionContext};
