//! Stationary performance analysis of two-dimensional reflected random walks
//! whose boundary behaviour is *coupled*: the rate at which each coordinate
//! decreases depends on whether the other coordinate is at zero, through a
//! sharing parameter `w` in `[0, 1]`.  The walk is additionally *Markov
//! modulated*: an environment phase `J(t)` in `{0, .., N}` switches the active
//! increment rates, with phase 0 the fully operational mode and phases
//! `1..=N` degraded modes in which decrements are disabled.
//!
//! The crate provides three routes to the stationary distribution and its
//! moments, which deliberately do not share numerical machinery so that they
//! can validate one another:
//!
//! * **Power-series route** ([`psa`]): the boundary-coupled functional
//!   equation for the empty-phase generating function `Π₀(x, y)` is solved as
//!   a power series in the sharing parameter `w`.  Each coefficient function
//!   `V_m(x, y)` satisfies the same scalar equation with an order-`(m-1)`
//!   source term and is evaluated recursively on demand.  Moments come from
//!   contour differentiation, and series in `w` can be resummed with Padé
//!   approximants.
//! * **Closed forms**: the `w = 0` / `w = 1` priority extremes
//!   ([`psa::w_boundary_closed_form`]), a fully symmetric special case with
//!   explicit first moments ([`symmetric`]), and a retrial-queue reduction in
//!   which orbits play the role of the two coordinates ([`retrial`]).
//! * **Oracle route** ([`oracle`]): truncated-generator solves (direct
//!   level-reduction or uniformization power iteration) and an exact-jump
//!   stochastic simulation, both independent of every generating-function
//!   ingredient above.
//!
//! [`kernel`] holds the generating-function kernels shared by the analytic
//! routes, [`stability`] the ergodicity tests and the zero curves of the
//! kernel, and [`model`] the rate-level description, validation, and builders
//! (a two-queue network with breakdowns, and its symmetric restriction).
//!
//! # Conventions
//!
//! * `x`, `y` are the generating-function variables attached to the two
//!   coordinates; both live on the closed unit bidisc.
//! * Rates are per unit time (continuous time); all generator rows sum to 0.
//! * `q_{i,j}(k)` denotes the rate of a level increment `(i, j)` in phase
//!   `k` away from the boundary, `q^{(1)}`/`q^{(2)}`/`q^{(0)}` the rate
//!   fields on the horizontal boundary, vertical boundary, and origin.

pub mod kernel;
pub mod model;
pub mod oracle;
pub mod psa;
pub mod retrial;
pub mod stability;
pub mod symmetric;

pub use model::{
    build_network_model, is_symmetric, validate_model, IncrementRateField, ModelError, ModelSpec,
    NetworkParams, PhaseSwitch, ValidationReport,
};

/// Complex scalar used throughout the analytic routes.
pub type C64 = num_complex::Complex64;
