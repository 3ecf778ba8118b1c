//! Generating-function kernels of the walk.
//!
//! Balancing the stationary equations of the modulated walk against its
//! probability generating functions produces a functional equation tying the
//! interior transform to its boundary sections.  This module evaluates every
//! building block of that equation at complex points:
//!
//! * the per-phase drift transforms `D_k` (and their jump parts `S_k`),
//! * the raw kernels `R`, `K`, `C` that weight the interior transform and its
//!   boundary sections,
//! * the phase elimination: the linear system whose solution `F_k` expresses
//!   each alternative-phase transform as a multiple of the working-phase one,
//!   together with the resulting factor `T`,
//! * the scaled kernels `G`, `G10`, `G00` used by the power-series engine,
//! * numerical derivatives of analytic functions via Cauchy contour
//!   integration (replacing repeated L'Hospital limits).
//!
//! Everything here is a pure function of `(spec, point)`, cheap enough to be
//! evaluated on demand; no caching is performed at this layer.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use thiserror::Error;

use crate::model::ModelSpec;

/// Slack admitted around the closed unit bidisc for the functional-equation
/// kernels (`eval_rkc`): these are only used at stationary-analysis points.
pub const BIDISC_TOL: f64 = 1e-9;

/// Wider slack admitted for the phase solve and the scaled kernels: the
/// derivative contours of radius up to 1e-2 centred at 1 must stay
/// evaluable, and all these objects are rational in `(x, y)`.
pub const CONTOUR_MARGIN: f64 = 2e-2;

/// Hard floor for the modulus of the denominator of `T`.
pub const T_DENOMINATOR_FLOOR: f64 = 1e-14;

/// Relative agreement required between the two algebraic forms of `C`.
pub const C_FORMS_TOL: f64 = 1e-12;

/// A point of evaluation in `C^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexPoint {
    pub x: C64,
    pub y: C64,
}

impl ComplexPoint {
    /// Point from two complex coordinates.
    #[must_use]
    pub fn new(x: C64, y: C64) -> Self {
        Self { x, y }
    }

    /// Point from two real coordinates.
    #[must_use]
    pub fn real(x: f64, y: f64) -> Self {
        Self {
            x: C64::new(x, 0.0),
            y: C64::new(y, 0.0),
        }
    }

    /// Both moduli at most `1 + margin`?
    #[must_use]
    pub fn within_bidisc(&self, margin: f64) -> bool {
        self.x.norm() <= 1.0 + margin && self.y.norm() <= 1.0 + margin
    }
}

/// Failure modes of kernel evaluation.
#[derive(Debug, Error)]
pub enum KernelError {
    /// The point lies too far outside the closed unit bidisc.
    #[error("point ({x}, {y}) lies outside the admissible bidisc (margin {margin:.0e})")]
    OutsideBidisc { x: C64, y: C64, margin: f64 },
    /// The phase linear system could not be solved.
    #[error("phase system is singular at ({x}, {y}): |det| = {det_abs:.3e}")]
    SingularPhaseSystem { x: C64, y: C64, det_abs: f64 },
    /// The denominator of `T` fell below [`T_DENOMINATOR_FLOOR`].
    #[error(
        "denominator of T has modulus {denom_abs:.3e} (< {T_DENOMINATOR_FLOOR:.0e}) at ({x}, {y})"
    )]
    TinyTDenominator { x: C64, y: C64, denom_abs: f64 },
    /// The scaled kernels contain `1/x` terms and cannot be evaluated at 0.
    #[error("x = 0 is a pole of the scaled kernels")]
    ZeroX,
    /// A phase solve was requested for a model with no alternative phases.
    #[error("the model has no alternative phases; the phase system is empty")]
    NoPhases,
    /// Contour quadrature kept changing under node doubling.
    #[error(
        "contour derivative did not stabilise: {nodes} nodes still change the value by {rel_change:.3e} (relative)"
    )]
    NonConvergentContour { nodes: usize, rel_change: f64 },
}

// ===========================================================================
// Raw kernels
// ===========================================================================

/// Values of the functional-equation kernels at one point.
#[derive(Debug, Clone)]
pub struct KernelValues {
    /// Kernel multiplying the interior transform.
    pub r: C64,
    /// Kernel multiplying the boundary sections.
    pub k: C64,
    /// Kernel multiplying the origin probability.
    pub c: C64,
    /// `D_k(x, y)` for every phase `k = 0..=N`.
    pub dk: Vec<C64>,
}

/// `S_k(x, y)`: jump transform of the nonnegative increments of phase `k`.
fn s_k(spec: &ModelSpec, k: usize, x: C64, y: C64) -> C64 {
    let mut acc = C64::new(0.0, 0.0);
    for (dx, dy, rate) in spec.phase_field(k).nonneg() {
        if (dx, dy) == (0, 0) {
            continue;
        }
        acc += rate * (C64::new(1.0, 0.0) - x.powi(dx) * y.powi(dy));
    }
    acc
}

/// `D_k(x, y) = S_k(x, y) + theta_{k,.}`.
fn d_k(spec: &ModelSpec, k: usize, x: C64, y: C64) -> C64 {
    s_k(spec, k, x, y) + spec.switch.theta_out(k)
}

/// Full-rate second-coordinate drops: sum of `q2_{i,-1} (y - x^i)`.
fn drop2_poly(spec: &ModelSpec, x: C64, y: C64) -> C64 {
    let mut acc = C64::new(0.0, 0.0);
    for (i, rate) in spec.boundary_y.y_decrements() {
        acc += rate * (y - x.powi(i));
    }
    acc
}

/// Full-rate first-coordinate drops: sum of `q1_{-1,j} (x - y^j)`.
fn drop1_poly(spec: &ModelSpec, x: C64, y: C64) -> C64 {
    let mut acc = C64::new(0.0, 0.0);
    for (j, rate) in spec.boundary_x.x_decrements() {
        acc += rate * (x - y.powi(j));
    }
    acc
}

/// Evaluates `R`, `K`, `C` and all `D_k` at `p`.
///
/// `R` is assembled from the interior field exactly as displayed (its
/// coupled drop rates appear verbatim); the identity tying it to the
/// full-rate boundary fields through the sharing parameter is exercised in
/// tests, not assumed here.  `C` is computed in both of its algebraic forms
/// and the two are asserted to agree to [`C_FORMS_TOL`] relative.
///
/// # Errors
///
/// [`KernelError::OutsideBidisc`] when `p` exceeds the closed bidisc by more
/// than [`BIDISC_TOL`].
///
/// # Panics
///
/// Panics when the two algebraic forms of `C` disagree beyond roundoff,
/// which would indicate a corrupted spec rather than a numerical issue.
pub fn eval_rkc(spec: &ModelSpec, p: ComplexPoint) -> Result<KernelValues, KernelError> {
    if !p.within_bidisc(BIDISC_TOL) {
        return Err(KernelError::OutsideBidisc {
            x: p.x,
            y: p.y,
            margin: BIDISC_TOL,
        });
    }
    Ok(eval_rkc_unchecked(spec, p))
}

/// [`eval_rkc`] without the domain fence.
///
/// The stability root trackers follow kernel zeros that may sit slightly
/// outside the closed bidisc, and their intermediate iterates can wander
/// further still before converging; they are the only intended callers.
pub(crate) fn eval_rkc_unchecked(spec: &ModelSpec, p: ComplexPoint) -> KernelValues {
    let (x, y) = (p.x, p.y);

    let dk: Vec<C64> = (0..spec.phase_count()).map(|k| d_k(spec, k, x, y)).collect();

    let full2 = drop2_poly(spec, x, y);
    let full1 = drop1_poly(spec, x, y);
    let k_val = x * full2 - y * full1;

    let w = spec.w;
    let c_first = w * k_val + y * full1;
    let c_second = -(1.0 - w) * k_val + x * full2;
    let scale = k_val
        .norm()
        .max((y * full1).norm())
        .max((x * full2).norm())
        .max(1.0);
    assert!(
        (c_first - c_second).norm() <= C_FORMS_TOL * scale,
        "the two algebraic forms of C disagree: {c_first} vs {c_second}"
    );

    // Interior coupled drop rates, straight from the display.
    let mut r = x * y * dk[0];
    for (j, rate) in spec.interior.x_decrements() {
        r += y * rate * (x - y.powi(j));
    }
    for (i, rate) in spec.interior.y_decrements() {
        r += x * rate * (y - x.powi(i));
    }

    KernelValues {
        r,
        k: k_val,
        c: c_first,
        dk,
    }
}

// ===========================================================================
// Phase elimination
// ===========================================================================

/// Solution of the phase linear system at one point.
#[derive(Debug, Clone)]
pub struct PhaseSolve {
    /// `F_k(x, y)` for `k = 1..=N`: the factor turning the working-phase
    /// transform into the phase-`k` transform (stored at index `k - 1`).
    pub f: Vec<C64>,
    /// The factor `T(x, y)`, reciprocal of the weighted return flow.
    pub t: C64,
    /// Determinant of the transposed phase matrix.
    pub det_l: C64,
}

/// Solves the `N x N` phase system at `p` by LU factorisation and forms `T`.
///
/// # Errors
///
/// [`KernelError::NoPhases`] when the model has a single phase;
/// [`KernelError::OutsideBidisc`] beyond [`CONTOUR_MARGIN`];
/// [`KernelError::SingularPhaseSystem`] when the LU solve fails;
/// [`KernelError::TinyTDenominator`] when the return-flow sum is below
/// [`T_DENOMINATOR_FLOOR`] in modulus.
pub fn eval_phase_solve(spec: &ModelSpec, p: ComplexPoint) -> Result<PhaseSolve, KernelError> {
    if spec.n == 0 {
        return Err(KernelError::NoPhases);
    }
    if !p.within_bidisc(CONTOUR_MARGIN) {
        return Err(KernelError::OutsideBidisc {
            x: p.x,
            y: p.y,
            margin: CONTOUR_MARGIN,
        });
    }
    eval_phase_solve_unchecked(spec, p)
}

/// [`eval_phase_solve`] without the domain fence (same intended callers as
/// [`eval_rkc_unchecked`]).
pub(crate) fn eval_phase_solve_unchecked(
    spec: &ModelSpec,
    p: ComplexPoint,
) -> Result<PhaseSolve, KernelError> {
    let n = spec.n;
    if n == 0 {
        return Err(KernelError::NoPhases);
    }
    let (x, y) = (p.x, p.y);

    // Row k of the phase matrix holds D_k on the diagonal and
    // -theta_{k,m} A_{k,m} off it; the system couples through its transpose.
    let mut lt: DMatrix<C64> = DMatrix::zeros(n, n);
    for k in 1..=n {
        for m in 1..=n {
            let entry = if k == m {
                d_k(spec, k, x, y)
            } else {
                -spec.switch.theta(k, m) * spec.switch.jump(k, m).pgf(x, y)
            };
            // transpose: row m-1, column k-1 receives L[k-1][m-1]
            lt[(m - 1, k - 1)] = entry;
        }
    }
    let e: DVector<C64> = DVector::from_iterator(
        n,
        (1..=n).map(|k| C64::from(spec.switch.theta(0, k)) * spec.switch.jump(0, k).pgf(x, y)),
    );

    let lu = lt.lu();
    let det_l = lu.determinant();
    let f = lu.solve(&e).ok_or(KernelError::SingularPhaseSystem {
        x,
        y,
        det_abs: det_l.norm(),
    })?;

    let mut t_denom = C64::new(0.0, 0.0);
    for k in 1..=n {
        t_denom += spec.switch.theta(k, 0) * spec.switch.jump(k, 0).pgf(x, y) * f[k - 1];
    }
    if t_denom.norm() < T_DENOMINATOR_FLOOR {
        return Err(KernelError::TinyTDenominator {
            x,
            y,
            denom_abs: t_denom.norm(),
        });
    }

    Ok(PhaseSolve {
        f: f.iter().copied().collect(),
        t: C64::new(1.0, 0.0) / t_denom,
        det_l,
    })
}

/// Radius of the derivative contours through `(1, 1)` used for the phase
/// prefactors; small enough to stay well inside the fenced evaluation
/// domain, large enough for first derivatives.
const PREFACTOR_RADIUS: f64 = 5e-3;

/// Corner aggregates of the phase ratios: `sum_k F_k(1, 1)` together with
/// the sums of their first derivatives along each axis.  Every moment route
/// multiplies these three scalars into its working-phase result to account
/// for level growth accumulated while degraded.
///
/// # Errors
///
/// Phase-solve failures at a contour node, or a non-settling contour.
pub(crate) fn phase_prefactors(spec: &ModelSpec) -> Result<(f64, f64, f64), KernelError> {
    if spec.n == 0 {
        return Ok((0.0, 0.0, 0.0));
    }
    let one = C64::new(1.0, 0.0);
    let at_corner = eval_phase_solve(spec, ComplexPoint::real(1.0, 1.0))?;
    let f_sum: f64 = at_corner.f.iter().map(|v| v.re).sum();
    let df_dx = contour_derivative(
        |x| Ok(eval_phase_solve(spec, ComplexPoint::new(x, one))?.f.iter().sum()),
        one,
        1,
        PREFACTOR_RADIUS,
    )?;
    let df_dy = contour_derivative(
        |y| Ok(eval_phase_solve(spec, ComplexPoint::new(one, y))?.f.iter().sum()),
        one,
        1,
        PREFACTOR_RADIUS,
    )?;
    Ok((f_sum, df_dx.re, df_dy.re))
}

// ===========================================================================
// Scaled kernels for the power-series engine
// ===========================================================================

/// The three sharing-free kernels of the power-series recursion.
#[derive(Debug, Clone, Copy)]
pub struct PsaKernels {
    /// Kernel of the current-order unknown.
    pub g: C64,
    /// Kernel of the first-coordinate boundary section.
    pub g10: C64,
    /// Kernel of the origin value.
    pub g00: C64,
}

/// Evaluates the scaled kernels `G`, `G10`, `G00` at `p`.
///
/// When the model has no alternative phases the eliminated factor `T` is
/// absent and the kernels reduce to their single-phase form (no `- y` term
/// in `G`); the recursion driven by them is structurally identical.
///
/// # Errors
///
/// [`KernelError::ZeroX`] at `x = 0` (the kernels carry `1/x` factors);
/// [`KernelError::OutsideBidisc`] beyond [`CONTOUR_MARGIN`]; propagated
/// phase-solve errors for models with alternative phases.
pub fn eval_psa_kernels(spec: &ModelSpec, p: ComplexPoint) -> Result<PsaKernels, KernelError> {
    if p.x.norm() == 0.0 {
        return Err(KernelError::ZeroX);
    }
    if !p.within_bidisc(CONTOUR_MARGIN) {
        return Err(KernelError::OutsideBidisc {
            x: p.x,
            y: p.y,
            margin: CONTOUR_MARGIN,
        });
    }
    let (x, y) = (p.x, p.y);

    let d0 = d_k(spec, 0, x, y);
    let full2 = drop2_poly(spec, x, y);
    // y * sum of q1_{-1,j} (1 - y^j / x)
    let mut scaled1 = C64::new(0.0, 0.0);
    for (j, rate) in spec.boundary_x.x_decrements() {
        scaled1 += rate * (C64::new(1.0, 0.0) - y.powi(j) / x);
    }
    scaled1 *= y;

    if spec.n == 0 {
        return Ok(PsaKernels {
            g: y * d0 + full2,
            g10: full2 - scaled1,
            g00: scaled1,
        });
    }

    let ps = eval_phase_solve(spec, p)?;
    Ok(PsaKernels {
        g: ps.t * (y * d0 + full2) - y,
        g10: ps.t * (full2 - scaled1),
        g00: ps.t * scaled1,
    })
}

// ===========================================================================
// Contour differentiation
// ===========================================================================

/// Why [`contour_derivative_general`] failed: the integrand itself erred at
/// a node, or node doubling hit the cap without settling.
#[derive(Debug)]
pub enum ContourFailure<E> {
    /// The integrand returned an error at some node.
    Integrand(E),
    /// The node-doubling estimate did not settle.
    NonConvergent { nodes: usize, rel_change: f64 },
}

/// `order`-th derivative of an analytic function at `center`, by trapezoidal
/// quadrature of the Cauchy integral on a circle of the given `radius`,
/// generic over the integrand's error type.
///
/// Starts at 64 nodes and doubles until the value moves by less than `1e-9`
/// relative, accepting up to `1e-6` at the node cap.  Trapezoidal quadrature
/// of a periodic analytic integrand converges spectrally, so the doubling
/// test is a sound error estimate.
///
/// The integrand mean scales like `radius^order`, so for higher orders a
/// tiny radius drowns the value in cancellation noise; pick the largest
/// radius the domain of analyticity allows (small radii near 1 are meant
/// for first and second derivatives).
///
/// # Errors
///
/// [`ContourFailure::NonConvergent`] when doubling at the node cap still
/// changes the value by more than `1e-6` relative; integrand errors are
/// wrapped in [`ContourFailure::Integrand`].
///
/// # Panics
///
/// Panics when `order` is 0 or `radius` is not strictly positive.
pub fn contour_derivative_general<E, F>(
    f: F,
    center: C64,
    order: u32,
    radius: f64,
) -> Result<C64, ContourFailure<E>>
where
    F: FnMut(C64) -> Result<C64, E>,
{
    contour_derivative_tolerant(f, center, order, radius, 1e-9)
}

/// [`contour_derivative_general`] with a caller-chosen settling tolerance:
/// node doubling stops once the estimate moves by less than
/// `settle_tol * max(|estimate|, 1)`, and at the node cap a value is still
/// accepted within `1e3 * settle_tol`.  Integrands whose own noise floor
/// exceeds `1e-9` (recursively computed series coefficients, say) must
/// relax the tolerance to what they can actually deliver, or the doubling
/// chases noise to the cap.
///
/// # Errors
///
/// As [`contour_derivative_general`].
///
/// # Panics
///
/// Panics when `order` is 0 or `radius` is not strictly positive.
pub fn contour_derivative_tolerant<E, F>(
    mut f: F,
    center: C64,
    order: u32,
    radius: f64,
    settle_tol: f64,
) -> Result<C64, ContourFailure<E>>
where
    F: FnMut(C64) -> Result<C64, E>,
{
    assert!(order >= 1, "use f directly for the 0th derivative");
    assert!(radius > 0.0, "contour radius must be positive");
    const NODE_CAP: usize = 4096;

    let factorial: f64 = (1..=order).map(f64::from).product();
    let mut nodes = 64usize;
    let mut previous: Option<C64> = None;
    loop {
        let mut sum = C64::new(0.0, 0.0);
        for idx in 0..nodes {
            let angle = 2.0 * std::f64::consts::PI * idx as f64 / nodes as f64;
            let dir = C64::from_polar(1.0, angle);
            let value = f(center + radius * dir).map_err(ContourFailure::Integrand)?;
            sum += value * C64::from_polar(1.0, -(f64::from(order)) * angle);
        }
        let estimate = sum * factorial / (nodes as f64 * radius.powi(order as i32));

        if let Some(prev) = previous {
            let scale = estimate.norm().max(1.0);
            let change = (estimate - prev).norm();
            if change <= settle_tol * scale {
                return Ok(estimate);
            }
            if nodes >= NODE_CAP {
                if change <= 1e3 * settle_tol * scale {
                    return Ok(estimate);
                }
                return Err(ContourFailure::NonConvergent {
                    nodes,
                    rel_change: change / scale,
                });
            }
        }
        previous = Some(estimate);
        nodes *= 2;
    }
}

/// [`contour_derivative_general`] specialised to kernel-evaluating
/// integrands, with non-convergence reported as a [`KernelError`].
///
/// # Errors
///
/// [`KernelError::NonConvergentContour`] when doubling at the node cap still
/// changes the value by more than `1e-6` relative; errors from `f` are
/// propagated.
///
/// # Panics
///
/// Panics when `order` is 0 or `radius` is not strictly positive.
pub fn contour_derivative<F>(
    f: F,
    center: C64,
    order: u32,
    radius: f64,
) -> Result<C64, KernelError>
where
    F: FnMut(C64) -> Result<C64, KernelError>,
{
    contour_derivative_general(f, center, order, radius).map_err(|e| match e {
        ContourFailure::Integrand(k) => k,
        ContourFailure::NonConvergent { nodes, rel_change } => {
            KernelError::NonConvergentContour { nodes, rel_change }
        }
    })
}

// ===========================================================================
// Tests
// ===========================================================================
