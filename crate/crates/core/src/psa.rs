//! Power-series expansion of the stationary distribution in the sharing
//! parameter.
//!
//! The functional equation of the walk couples the interior transform to two
//! unknown boundary sections.  Regrouped so that every sharing-dependent
//! term sits on one side, it reads
//!
//! ```text
//! G V_m = G10 * [V_m(x, 0) + P_{m-1}] + G00 * V_m(0, 0) + ...,
//! ```
//!
//! order by order in the sharing parameter `w`: each coefficient `V_m` of
//! `Pi_0 = sum_m V_m w^m` satisfies a copy of the *same* scalar equation
//! whose source involves only the previous order.  The remaining boundary
//! unknown `V_m(x, 0)` is eliminated through the unique in-disc zero
//! `y = Y(x)` of `G(x, .)`, where the analytic left-hand side must vanish.
//! The three kernels `G`, `G10`, `G00` do not depend on `w` at all, so the
//! coefficients are computed once and assembled for any `w`.
//!
//! Provided here:
//!
//! * [`ScalarFeq`] — the scalar-equation abstraction (kernels, source term,
//!   origin constant) the engine recurses on; [`WalkEquation`] implements it
//!   for a walk specification, and the retrial reduction supplies its own;
//! * [`find_root_in_disc`] — the in-disc kernel zero `Y(x)`, with a
//!   polynomial fast path and an argument-principle uniqueness check;
//! * [`PsaSeries`] — the memoized coefficient evaluator `V_m(x, y)`;
//! * [`psa_moment_series`] / [`MomentSeries`] — first-moment coefficient
//!   extraction and truncated assembly;
//! * [`pade_from_series`] / [`pade_two_point`] — rational acceleration of
//!   the truncated series;
//! * [`w_boundary_closed_form`] — the exact solution of the two trivial
//!   couplings (`w = 0` and `w = 1`), an independent route used to anchor
//!   the series at its endpoints.

use std::cell::RefCell;
use std::collections::HashMap;

use num_complex::Complex64 as C64;
use serde::Serialize;
use thiserror::Error;

use crate::kernel::{self, ComplexPoint, ContourFailure, KernelError, PsaKernels};
use crate::model::ModelSpec;
use crate::stability::StabilityError;

/// Roots returned by the finders satisfy `|G| <=` this residual.
pub const ROOT_RESIDUAL_TOL: f64 = 1e-10;

/// Newton iterations on `G` target this residual (tighter than the
/// contracted bound to leave margin).
const ROOT_ATOL: f64 = 1e-12;

/// Radius of the circle used for removable-singularity means and moment
/// contours around 1.
const NEAR_ONE_RADIUS: f64 = 5e-3;

/// Radius of the derivative contours that extract moment coefficients at
/// the corner.  A stable walk's generating function continues analytically
/// past the closed bidisc (its coefficient tails decay geometrically), so
/// the contour may use the whole kernel-fence budget; the wider circle
/// divides node noise by a 4x smaller `1/radius` factor and lets the
/// node-doubling estimate settle at small node counts.
const MOMENT_CONTOUR_RADIUS: f64 = 1.9e-2;

/// Radius of the circle replacing evaluation on the line `x = 0`, where the
/// kernels have a removable `1/x`.  Kept large: the per-node amplification
/// of inherited error is `|G10/G|`, which decays roughly like `1/|x|`
/// (measured ~18 at radius 0.3 but ~3-4 at 0.7), so nodes sit far out and
/// the node count absorbs the slower quadrature convergence.
const ZERO_X_RADIUS: f64 = 0.7;

/// Points with `|x|` below this are evaluated by the circle mean.
const ZERO_X_NEIGHBORHOOD: f64 = 1e-4;

/// `x` counts as exactly 1 below this distance; the whole line `x = 1` is
/// a removable 0/0 of the elimination ratio (the boundary kernel vanishes
/// at `(1, Y(1)) = (1, 1)`).
const X_ONE_TOL: f64 = 1e-9;

/// Points with `|y - Y(x)|` below this are candidates for evaluation by a
/// `y`-circle mean (the coefficient formula is 0/0 on the root curve).
const ROOT_NEIGHBORHOOD: f64 = 5e-3;

/// The `y`-circle actually replaces the direct formula only when the
/// direct amplification factor `|G10|/|G|` exceeds this.  Near the corner
/// `(1, 1)` the boundary kernel vanishes together with `G`, the ratio stays
/// small, and the direct formula is both well conditioned and much cheaper
/// than a circle of recursive evaluations.
const ROOT_AMP_THRESHOLD: f64 = 30.0;

/// The `y`-circle radius is `ROOT_CIRCLE_CEILING - |Y(x)|`, capped and
/// floored: as large as the kernel evaluation fence allows so the nodes
/// sit well away from the root curve, without ever leaving the fence.
/// The floor stays just above `ROOT_NEIGHBORHOOD` so circle nodes can
/// never land back in the circle rule and recurse into themselves, while
/// remaining below the ceiling budget for every root the engine reaches.
const ROOT_CIRCLE_CEILING: f64 = 1.019;
const ROOT_CIRCLE_RADIUS_MAX: f64 = 0.25;
const ROOT_CIRCLE_RADIUS_MIN: f64 = 5.5e-3;

/// Hard cap on memoized coefficient values; hitting it means the recursion
/// is not closing over a bounded point set.
const CACHE_LIMIT: usize = 6_000_000;

/// Roots within this of the unit circle are refused rather than classified
/// as inside or outside.
const BOUNDARY_MARGIN: f64 = 1e-8;

const C_ONE: C64 = C64::new(1.0, 0.0);
const C_ZERO: C64 = C64::new(0.0, 0.0);

/// Failure modes of the power-series machinery.
#[derive(Debug, Error)]
pub enum PsaError {
    /// A kernel evaluation failed.
    #[error(transparent)]
    Kernel(#[from] KernelError),
    /// The walk failed its stability analysis (the expansion only exists
    /// for ergodic walks).
    #[error(transparent)]
    Stability(#[from] StabilityError),
    /// No root finder converged to the in-disc kernel zero.
    #[error("in-disc kernel zero not found at x = {x}")]
    RootSolveFailed { x: C64 },
    /// The argument-principle count disagrees with the single-zero
    /// hypothesis the elimination rests on.
    #[error("winding count of the kernel at x = {x} is {count}, expected exactly 1 in-disc zero")]
    WindingMismatch { x: C64, count: i64 },
    /// The polynomial route produced several (or no) residual-verified
    /// in-disc roots.
    #[error("in-disc kernel zero at x = {x} is ambiguous: {found} candidate roots")]
    AmbiguousRoot { x: C64, found: usize },
    /// A root sits too close to the unit circle to classify.
    #[error("kernel zero y = {y} at x = {x} lies within 1e-8 of the unit circle; refusing to classify it")]
    BoundaryRoot { x: C64, y: C64 },
    /// The coefficient cache exceeded its budget.
    #[error("coefficient cache exceeded {limit} entries; the recursion is not closing")]
    CacheBudget { limit: usize },
    /// The linear system for the rational-approximant denominator is
    /// singular (defective table entry); retry with a smaller denominator
    /// degree.
    #[error("rational approximant system for orders [{l}/{k}] is singular")]
    SingularPade { l: usize, k: usize },
    /// The rational approximant has a pole on the physical interval.
    #[error("rational approximant denominator vanishes on [0, 1] near w = {w:.4}")]
    PadePole { w: f64 },
    /// Re-expanding the rational approximant does not reproduce the input
    /// series (numerical degeneracy).
    #[error("rational approximant re-expansion differs at order {order} by {err:.3e}")]
    PadeMismatch { order: usize, err: f64 },
    /// The input series is too short for the requested orders.
    #[error("series too short: need {need} coefficients, have {have}")]
    ShortSeries { need: usize, have: usize },
}

// ===========================================================================
// The scalar functional equation abstraction
// ===========================================================================

/// One scalar functional equation the power-series engine can recurse on:
/// three kernels, the origin constant, an order-`m` source term built from
/// the previous order, and an optional polynomial form of `G(x, .)`.
///
/// The engine solves, order by order,
/// `G V_m = G10 V_m(x, 0) + G00 [m = 0] v00 + S_m`, eliminating `V_m(x, 0)`
/// at the in-disc zero of `G(x, .)`.
pub trait ScalarFeq {
    /// The kernels `G`, `G10`, `G00` at `p`.
    fn kernels(&self, p: ComplexPoint) -> Result<PsaKernels, PsaError>;

    /// The constant `V_0(0, 0)` (the origin probability; every higher-order
    /// coefficient vanishes at the origin).
    fn v00(&self) -> f64;

    /// Order-`m` source term at `p` for `m >= 1`, in terms of the
    /// order-`m-1` coefficient exposed through `prev`.
    fn source(
        &self,
        m: usize,
        p: ComplexPoint,
        prev: &mut dyn FnMut(ComplexPoint) -> Result<C64, PsaError>,
    ) -> Result<C64, PsaError>;

    /// Ascending coefficients of a polynomial in `y` whose in-disc zeros
    /// include those of `G(x, .)` (spurious factor zeros are weeded out by
    /// a residual check), when the equation admits one.
    fn y_polynomial(&self, _x: C64) -> Option<Vec<C64>> {
        None
    }
}

/// The walk's scalar functional equation.
///
/// Construction runs the stability analysis: the origin constant is the
/// stationary probability of the empty-and-operational state, which only
/// exists for ergodic walks.
pub struct WalkEquation<'a> {
    spec: &'a ModelSpec,
    v00: f64,
}

impl<'a> WalkEquation<'a> {
    /// Builds the equation for `spec`, refusing unstable walks.
    ///
    /// # Errors
    ///
    /// Propagates the stability analysis, in particular
    /// [`StabilityError::Unstable`].
    pub fn new(spec: &'a ModelSpec) -> Result<Self, PsaError> {
        let v00 = crate::stability::pi0_origin(spec)?;
        Ok(Self { spec, v00 })
    }

    /// The underlying specification.
    #[must_use]
    pub fn spec(&self) -> &ModelSpec {
        self.spec
    }

    /// True when phase switching is star-shaped (every transition involves
    /// the working phase) and free of displacement jumps, which makes
    /// `G(x, .)` an explicit polynomial after clearing the eliminated phase
    /// factor.
    fn has_polynomial_form(&self) -> bool {
        let n = self.spec.n;
        if self.spec.switch.explicit_jumps().next().is_some() {
            return false;
        }
        for j in 1..=n {
            for k in 1..=n {
                if j != k && self.spec.switch.theta(j, k) != 0.0 {
                    return false;
                }
            }
        }
        true
    }

    /// `S_k(x, .) + theta_out(k)` as an ascending polynomial in `y`.
    fn phase_factor_poly(&self, k: usize, x: C64) -> Vec<C64> {
        let field = self.spec.phase_field(k);
        let mut degree = 0usize;
        for (dx, dy, _) in field.iter() {
            if dx >= 0 && dy >= 0 {
                degree = degree.max(dy as usize);
            }
        }
        let mut coeffs = vec![C_ZERO; degree + 1];
        coeffs[0] += self.spec.switch.theta_out(k);
        for (dx, dy, rate) in field.iter() {
            if dx >= 0 && dy >= 0 {
                coeffs[0] += rate;
                coeffs[dy as usize] -= rate * x.powi(dx);
            }
        }
        coeffs
    }

    /// `y D_0(x, .) + f2(x, .)` as an ascending polynomial in `y`, where
    /// `f2` sums the second-coordinate drop terms.
    fn numerator_core_poly(&self, x: C64) -> Vec<C64> {
        let d0 = self.phase_factor_poly(0, x);
        let mut coeffs = vec![C_ZERO; d0.len() + 1];
        for (j, c) in d0.iter().enumerate() {
            coeffs[j + 1] += c;
        }
        for (i, rate) in self.spec.boundary_y.y_decrements() {
            coeffs[1] += C64::from(rate);
            coeffs[0] -= rate * x.powi(i);
        }
        coeffs
    }
}

fn poly_mul(a: &[C64], b: &[C64]) -> Vec<C64> {
    let mut out = vec![C_ZERO; a.len() + b.len() - 1];
    for (i, &ai) in a.iter().enumerate() {
        for (j, &bj) in b.iter().enumerate() {
            out[i + j] += ai * bj;
        }
    }
    out
}

fn poly_add_assign(a: &mut Vec<C64>, b: &[C64], scale: C64) {
    if a.len() < b.len() {
        a.resize(b.len(), C_ZERO);
    }
    for (i, &bi) in b.iter().enumerate() {
        a[i] += scale * bi;
    }
}

impl ScalarFeq for WalkEquation<'_> {
    fn kernels(&self, p: ComplexPoint) -> Result<PsaKernels, PsaError> {
        Ok(kernel::eval_psa_kernels(self.spec, p)?)
    }

    fn v00(&self) -> f64 {
        self.v00
    }

    fn source(
        &self,
        m: usize,
        p: ComplexPoint,
        prev: &mut dyn FnMut(ComplexPoint) -> Result<C64, PsaError>,
    ) -> Result<C64, PsaError> {
        debug_assert!(m >= 1);
        // G10 * P_{m-1} with P_{m-1} the mixed second difference of the
        // previous order between (x, y) and the two axes.
        let g10 = self.kernels(p)?.g10;
        let p_prev = prev(p)?
            - prev(ComplexPoint::new(p.x, C_ZERO))?
            - prev(ComplexPoint::new(C_ZERO, p.y))?
            + prev(ComplexPoint::new(C_ZERO, C_ZERO))?;
        Ok(g10 * p_prev)
    }

    fn y_polynomial(&self, x: C64) -> Option<Vec<C64>> {
        if !self.has_polynomial_form() {
            return None;
        }
        let n = self.spec.n;
        let core = self.numerator_core_poly(x);
        if n == 0 {
            return Some(core);
        }
        // Clearing the eliminated phase factor T = D / sum_j th_{j0} th_{0j} D^{(j)}
        // from G = T * core - y leaves D * core - y * sum_j th_{j0} th_{0j} D^{(j)}.
        let factors: Vec<Vec<C64>> = (1..=n).map(|k| self.phase_factor_poly(k, x)).collect();
        let mut full = vec![C_ONE];
        for f in &factors {
            full = poly_mul(&full, f);
        }
        let mut poly = poly_mul(&full, &core);
        for j in 1..=n {
            let weight = self.spec.switch.theta(j, 0) * self.spec.switch.theta(0, j);
            if weight == 0.0 {
                continue;
            }
            let mut partial = vec![C_ONE];
            for (k, f) in factors.iter().enumerate() {
                if k + 1 != j {
                    partial = poly_mul(&partial, f);
                }
            }
            // times -y * weight
            let mut shifted = vec![C_ZERO; partial.len() + 1];
            for (i, &c) in partial.iter().enumerate() {
                shifted[i + 1] = c;
            }
            poly_add_assign(&mut poly, &shifted, C64::from(-weight));
        }
        Some(poly)
    }
}

// ===========================================================================
// In-disc root of G(x, .)
// ===========================================================================

/// Newton iteration on `y -> G(x, y)` with a central-difference derivative.
fn newton_on_g<F: ScalarFeq>(feq: &F, x: C64, seed: C64) -> Option<C64> {
    let mut y = seed;
    for _ in 0..60 {
        let g = feq.kernels(ComplexPoint::new(x, y)).ok()?.g;
        if g.norm() <= ROOT_ATOL {
            return Some(y);
        }
        let step = 1e-7 * y.norm().max(1e-2);
        let gp = feq.kernels(ComplexPoint::new(x, y + step)).ok()?.g;
        let gm = feq.kernels(ComplexPoint::new(x, y - step)).ok()?.g;
        let dg = (gp - gm) / (2.0 * step);
        if dg.norm() < 1e-14 {
            return None;
        }
        y -= g / dg;
        if !y.is_finite() || y.norm() > 1.5 {
            return None;
        }
    }
    None
}

/// All roots of an ascending-coefficient complex polynomial, by
/// Durand-Kerner iteration (degree is small here; the classic simultaneous
/// iteration is robust and dependency-free).
fn polynomial_roots(coeffs: &[C64]) -> Vec<C64> {
    let scale = coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max);
    if scale == 0.0 {
        return Vec::new();
    }
    let mut c = coeffs.to_vec();
    while c.len() > 1 && c.last().is_some_and(|l| l.norm() < 1e-13 * scale) {
        c.pop();
    }
    let degree = c.len() - 1;
    if degree == 0 {
        return Vec::new();
    }
    let lead = c[degree];
    let monic: Vec<C64> = c.iter().map(|v| v / lead).collect();
    let eval = |z: C64| {
        let mut acc = C_ZERO;
        for &coeff in monic.iter().rev() {
            acc = acc * z + coeff;
        }
        acc
    };
    let base = C64::new(0.4, 0.9);
    let mut roots: Vec<C64> = (0..degree).map(|k| base.powi(k as i32 + 1)).collect();
    for _ in 0..500 {
        let mut largest_move = 0.0f64;
        for k in 0..degree {
            let mut denom = C_ONE;
            for j in 0..degree {
                if j != k {
                    denom *= roots[k] - roots[j];
                }
            }
            if denom.norm() < 1e-300 {
                denom = C64::new(1e-300, 0.0);
            }
            let delta = eval(roots[k]) / denom;
            roots[k] -= delta;
            largest_move = largest_move.max(delta.norm());
        }
        if largest_move < 1e-13 {
            break;
        }
    }
    roots
}

/// Classic Mueller iteration on `y -> G(x, y)` seeded on the ray from 0.
fn muller_root<F: ScalarFeq>(feq: &F, x: C64) -> Result<C64, PsaError> {
    let g_at = |y: C64| -> Result<C64, PsaError> { Ok(feq.kernels(ComplexPoint::new(x, y))?.g) };
    let mut p0 = C64::new(0.0, 0.0);
    let mut p1 = C64::new(0.25, 0.0);
    let mut p2 = C64::new(0.5, 0.0);
    let mut f0 = g_at(p0)?;
    let mut f1 = g_at(p1)?;
    let mut f2 = g_at(p2)?;
    for _ in 0..100 {
        if f2.norm() <= ROOT_ATOL {
            return Ok(p2);
        }
        let h1 = p1 - p0;
        let h2 = p2 - p1;
        let d1 = (f1 - f0) / h1;
        let d2 = (f2 - f1) / h2;
        let dd = (d2 - d1) / (h2 + h1);
        let b = d2 + h2 * dd;
        let disc = (b * b - 4.0 * f2 * dd).sqrt();
        let denom = if (b + disc).norm() >= (b - disc).norm() {
            b + disc
        } else {
            b - disc
        };
        if denom.norm() < 1e-300 {
            return Err(PsaError::RootSolveFailed { x });
        }
        let p3 = p2 - 2.0 * f2 / denom;
        if !p3.is_finite() || p3.norm() > 2.0 {
            return Err(PsaError::RootSolveFailed { x });
        }
        let f3 = g_at(p3).map_err(|_| PsaError::RootSolveFailed { x })?;
        p0 = p1;
        f0 = f1;
        p1 = p2;
        f1 = f2;
        p2 = p3;
        f2 = f3;
    }
    Err(PsaError::RootSolveFailed { x })
}

/// Winding number of `y -> G(x, y)` along `|y| = radius`, by accumulating
/// principal-branch argument increments over a fine uniform sampling.
fn winding_count<F: ScalarFeq>(feq: &F, x: C64, radius: f64) -> Result<i64, PsaError> {
    let nodes = 2048usize;
    let mut total = 0.0f64;
    let mut prev: Option<C64> = None;
    for k in 0..=nodes {
        let angle = std::f64::consts::TAU * k as f64 / nodes as f64;
        let y = C64::from_polar(radius, angle);
        let g = feq.kernels(ComplexPoint::new(x, y))?.g;
        if g.norm() < 1e-13 {
            return Err(PsaError::BoundaryRoot { x, y });
        }
        if let Some(p) = prev {
            total += (g / p).arg();
        }
        prev = Some(g);
    }
    Ok((total / std::f64::consts::TAU).round() as i64)
}

///`Y(x)`: the unique zero of `G(x, .)` in the closed unit disc.
///
/// `x = 1` returns the known value `Y(1) = 1`.  When the equation exposes a
/// polynomial form, its roots are enumerated, Newton-polished on `G`
/// itself, filtered by residual (which discards zeros of the cleared
/// factor), and required to leave exactly one in-disc candidate.  Otherwise
/// Mueller iteration seeded on the ray from `y = 0` finds the root and an
/// argument-principle winding count on `|y| = 1 - 1e-6` certifies
/// uniqueness.
///
/// # Errors
///
/// [`PsaError::BoundaryRoot`] when a root cannot be classified as interior
/// (within `1e-8` of the unit circle); [`PsaError::AmbiguousRoot`] /
/// [`PsaError::WindingMismatch`] when the single-zero hypothesis fails
/// numerically; [`PsaError::RootSolveFailed`] when no iteration converges.
pub fn find_root_in_disc<F: ScalarFeq>(feq: &F, x: C64) -> Result<C64, PsaError> {
    if x.norm() == 0.0 {
        return Err(KernelError::ZeroX.into());
    }
    if (x - C_ONE).norm() <= 1e-9 {
        return Ok(C_ONE);
    }
    if let Some(poly) = feq.y_polynomial(x) {
        let mut candidates: Vec<C64> = Vec::new();
        for raw in polynomial_roots(&poly) {
            let Some(root) = newton_on_g(feq, x, raw) else {
                // A zero of the cleared phase factor, not of G: Newton on G
                // does not converge there.
                continue;
            };
            if (root.norm() - 1.0).abs() < BOUNDARY_MARGIN {
                return Err(PsaError::BoundaryRoot { x, y: root });
            }
            if root.norm() > 1.0 {
                continue;
            }
            if !candidates.iter().any(|c| (c - root).norm() < 1e-8) {
                candidates.push(root);
            }
        }
        match candidates.as_slice() {
            [unique] => Ok(*unique),
            found => Err(PsaError::AmbiguousRoot {
                x,
                found: found.len(),
            }),
        }
    } else {
        let y = muller_root(feq, x)?;
        let y = newton_on_g(feq, x, y).ok_or(PsaError::RootSolveFailed { x })?;
        if (y.norm() - 1.0).abs() < BOUNDARY_MARGIN {
            return Err(PsaError::BoundaryRoot { x, y });
        }
        if y.norm() > 1.0 {
            return Err(PsaError::RootSolveFailed { x });
        }
        let count = winding_count(feq, x, 1.0 - 1e-6)?;
        if count != 1 {
            return Err(PsaError::WindingMismatch { x, count });
        }
        Ok(y)
    }
}

/// Continues the root from the anchor `Y(1) = 1` to a nearby `x` (possibly
/// slightly outside the unit disc, where moment contours live) in a few
/// homotopy steps of warm-started Newton.
fn continued_root_from_one<F: ScalarFeq>(feq: &F, x: C64) -> Result<C64, PsaError> {
    let steps = 4;
    let mut y = C_ONE;
    for s in 1..=steps {
        let xs = C_ONE + (x - C_ONE) * (f64::from(s) / f64::from(steps));
        y = newton_on_g(feq, xs, y).ok_or(PsaError::RootSolveFailed { x: xs })?;
    }
    Ok(y)
}

// ===========================================================================
// The memoized coefficient engine
// ===========================================================================

/// Coordinates quantized to 1e-12 for cache keys.
fn quantize(v: f64) -> i64 {
    (v / 1e-12).round() as i64
}

fn point_key(p: ComplexPoint) -> (i64, i64, i64, i64) {
    (
        quantize(p.x.re),
        quantize(p.x.im),
        quantize(p.y.re),
        quantize(p.y.im),
    )
}

/// One power-series session: a memoized evaluator of the coefficients
/// `V_m(x, y)` of one scalar functional equation, with a private root
/// cache.
///
/// Sessions are independent; a single session uses interior mutability for
/// its caches and is meant for one worker at a time.
pub struct PsaSeries<'a, F: ScalarFeq> {
    feq: &'a F,
    cache: RefCell<HashMap<(usize, i64, i64, i64, i64), C64>>,
    roots: RefCell<HashMap<(i64, i64), C64>>,
}

impl<'a, F: ScalarFeq> PsaSeries<'a, F> {
    /// Opens a session over `feq`.
    pub fn new(feq: &'a F) -> Self {
        Self {
            feq,
            cache: RefCell::new(HashMap::new()),
            roots: RefCell::new(HashMap::new()),
        }
    }

    /// The equation this session expands.
    #[must_use]
    pub fn equation(&self) -> &F {
        self.feq
    }

    /// The in-disc kernel root `Y(x)`, cached per quantized `x`; close to
    /// `x = 1` the root is continued from the anchor `Y(1) = 1` (this also
    /// covers the moment contours that step slightly outside the unit
    /// disc), otherwise the certified finder runs.
    ///
    /// # Errors
    ///
    /// As [`find_root_in_disc`].
    pub fn y_root(&self, x: C64) -> Result<C64, PsaError> {
        let key = (quantize(x.re), quantize(x.im));
        if let Some(&y) = self.roots.borrow().get(&key) {
            return Ok(y);
        }
        let y = if (x - C_ONE).norm() <= 1e-9 {
            C_ONE
        } else if (x - C_ONE).norm() < 0.05 {
            continued_root_from_one(self.feq, x)?
        } else {
            find_root_in_disc(self.feq, x)?
        };
        self.roots.borrow_mut().insert(key, y);
        Ok(y)
    }

    /// The order-`m` coefficient `V_m(x, y)`.
    ///
    /// Evaluation dispatches on position: near `x = 0` and on the line
    /// `x = 1` the value is recovered as a Cauchy mean over a small
    /// `x`-circle (both are removable singularities of the coefficient
    /// formula), near the root curve `y = Y(x)` likewise over a small
    /// `y`-circle; all circle nodes recurse into the same memoized
    /// evaluator.
    ///
    /// # Errors
    ///
    /// Root-finder and kernel failures; [`PsaError::CacheBudget`] when the
    /// recursion fails to close over a bounded point set.
    pub fn eval(&self, m: usize, p: ComplexPoint) -> Result<C64, PsaError> {
        let key = point_key(p);
        let full_key = (m, key.0, key.1, key.2, key.3);
        if let Some(&v) = self.cache.borrow().get(&full_key) {
            return Ok(v);
        }
        let value = self.eval_dispatch(m, p)?;
        let mut cache = self.cache.borrow_mut();
        if cache.len() >= CACHE_LIMIT {
            return Err(PsaError::CacheBudget { limit: CACHE_LIMIT });
        }
        cache.insert(full_key, value);
        Ok(value)
    }

    fn eval_dispatch(&self, m: usize, p: ComplexPoint) -> Result<C64, PsaError> {
        if p.x.norm() < ZERO_X_NEIGHBORHOOD {
            return self.circle_mean(m, p, true, ZERO_X_RADIUS, 48);
        }
        if (p.x - C_ONE).norm() <= X_ONE_TOL {
            return self.circle_mean(m, p, true, NEAR_ONE_RADIUS, 16);
        }
        let yr = self.y_root(p.x)?;
        let here = self.feq.kernels(p)?;
        if (p.y - yr).norm() < ROOT_NEIGHBORHOOD
            && here.g.norm() * ROOT_AMP_THRESHOLD < here.g10.norm()
        {
            // Centre the circle exactly on the root: the uniform nodes then
            // cancel the pole of the per-node formula by symmetry, instead
            // of amplifying shared node errors by 1 / |Y - centre|.  The
            // query point is recovered by discrete Cauchy weights.
            let radius = (ROOT_CIRCLE_CEILING - yr.norm())
                .clamp(ROOT_CIRCLE_RADIUS_MIN, ROOT_CIRCLE_RADIUS_MAX);
            return self.cauchy_mean_y(m, p.x, yr, p.y, radius, 16);
        }
        self.direct(m, p, yr, here)
    }

    /// Cauchy mean over a circle around `p` in the `x` (or `y`) coordinate:
    /// equals the analytic value at the centre while keeping every node
    /// away from the singular locus.
    fn circle_mean(
        &self,
        m: usize,
        p: ComplexPoint,
        move_x: bool,
        radius: f64,
        nodes: usize,
    ) -> Result<C64, PsaError> {
        let mut sum = C_ZERO;
        for k in 0..nodes {
            let angle = std::f64::consts::TAU * k as f64 / nodes as f64;
            let offset = C64::from_polar(radius, angle);
            let q = if move_x {
                ComplexPoint::new(p.x + offset, p.y)
            } else {
                ComplexPoint::new(p.x, p.y + offset)
            };
            sum += self.eval(m, q)?;
        }
        Ok(sum / nodes as f64)
    }

    /// Cauchy reconstruction of `V_m(x, query)` from a `y`-circle of the
    /// given radius centred at `center`: exact for analytic integrands up
    /// to a geometrically small quadrature term, with every node kept at
    /// full circle distance from the root curve.  `query == center`
    /// reduces to the plain mean.
    fn cauchy_mean_y(
        &self,
        m: usize,
        x: C64,
        center: C64,
        query: C64,
        radius: f64,
        nodes: usize,
    ) -> Result<C64, PsaError> {
        let mut sum = C_ZERO;
        for k in 0..nodes {
            let angle = std::f64::consts::TAU * k as f64 / nodes as f64;
            let offset = C64::from_polar(radius, angle);
            let y = center + offset;
            let v = self.eval(m, ComplexPoint::new(x, y))?;
            sum += v * offset / (y - query);
        }
        Ok(sum / nodes as f64)
    }

    /// The coefficient formula away from all singular loci: the source
    /// (plus the origin term at order 0) with the boundary unknown
    /// eliminated at `(x, Y(x))`, divided by `G`.
    fn direct(&self, m: usize, p: ComplexPoint, yr: C64, here: PsaKernels) -> Result<C64, PsaError> {
        let at_root = self.feq.kernels(ComplexPoint::new(p.x, yr))?;
        let ratio = here.g10 / at_root.g10;
        let mut numerator = self.source_at(m, p)? - ratio * self.source_at(m, ComplexPoint::new(p.x, yr))?;
        if m == 0 {
            numerator += (here.g00 - ratio * at_root.g00) * self.feq.v00();
        }
        Ok(numerator / here.g)
    }

    fn source_at(&self, m: usize, p: ComplexPoint) -> Result<C64, PsaError> {
        if m == 0 {
            return Ok(C_ZERO);
        }
        self.feq.source(m, p, &mut |q| self.eval(m - 1, q))
    }

    /// Number of memoized coefficient values (diagnostic).
    pub fn cache_len(&self) -> usize {
        self.cache.borrow().len()
    }
}

// ===========================================================================
// Moment extraction and truncated assembly
// ===========================================================================

/// First-moment data of one walk: the per-order derivative coefficients of
/// the working-phase transform and the phase prefactors that assemble them
/// into mean levels.
#[derive(Debug, Clone, Serialize)]
pub struct MomentSeries {
    /// `d/dx V_m(x, 1)` at `x = 1`, `m = 0..=M`.
    pub v1: Vec<f64>,
    /// `d/dy V_m(1, y)` at `y = 1`, `m = 0..=M`.
    pub v2: Vec<f64>,
    /// Sum of the phase ratios `F_k(1, 1)` (0 for single-phase walks).
    pub f_sum: f64,
    /// Sum of `d/dx F_k(x, 1)` at `x = 1`.
    pub df_dx_sum: f64,
    /// Sum of `d/dy F_k(1, y)` at `y = 1`.
    pub df_dy_sum: f64,
}

impl MomentSeries {
    /// Highest expansion order available.
    #[must_use]
    pub fn max_order(&self) -> usize {
        self.v1.len() - 1
    }

    fn assemble(&self, v: &[f64], df_sum: f64, w: f64, truncation: usize) -> f64 {
        assert!(
            truncation < v.len(),
            "truncation order {truncation} exceeds the computed series (max {})",
            v.len() - 1
        );
        let tail: f64 = v[..=truncation]
            .iter()
            .enumerate()
            .map(|(m, &coeff)| w.powi(m as i32) * coeff)
            .sum();
        let weight = 1.0 + self.f_sum;
        (df_sum + weight * weight * tail) / weight
    }

    /// Mean first coordinate at sharing `w`, truncated at order
    /// `truncation`.
    ///
    /// # Panics
    ///
    /// Panics when `truncation` exceeds [`Self::max_order`].
    #[must_use]
    pub fn mean_x1(&self, w: f64, truncation: usize) -> f64 {
        self.assemble(&self.v1, self.df_dx_sum, w, truncation)
    }

    /// Mean second coordinate at sharing `w`, truncated at order
    /// `truncation`.
    ///
    /// # Panics
    ///
    /// Panics when `truncation` exceeds [`Self::max_order`].
    #[must_use]
    pub fn mean_x2(&self, w: f64, truncation: usize) -> f64 {
        self.assemble(&self.v2, self.df_dy_sum, w, truncation)
    }

    fn metric_series(&self, v: &[f64], df_sum: f64) -> Vec<f64> {
        let weight = 1.0 + self.f_sum;
        let mut out = Vec::with_capacity(v.len());
        out.push(df_sum / weight + weight * v[0]);
        out.extend(v.iter().skip(1).map(|&c| weight * c));
        out
    }

    /// Power-series coefficients (in `w`) of the mean first coordinate,
    /// ready for rational acceleration.
    #[must_use]
    pub fn series_x1(&self) -> Vec<f64> {
        self.metric_series(&self.v1, self.df_dx_sum)
    }

    /// Power-series coefficients (in `w`) of the mean second coordinate.
    #[must_use]
    pub fn series_x2(&self) -> Vec<f64> {
        self.metric_series(&self.v2, self.df_dy_sum)
    }
}

/// Maps a generic-contour failure into a [`PsaError`].
fn psa_contour<G>(
    f: G,
    center: C64,
    order: u32,
    radius: f64,
    settle_tol: f64,
) -> Result<C64, PsaError>
where
    G: FnMut(C64) -> Result<C64, PsaError>,
{
    kernel::contour_derivative_tolerant(f, center, order, radius, settle_tol).map_err(
        |e| match e {
            ContourFailure::Integrand(err) => err,
            ContourFailure::NonConvergent { nodes, rel_change } => {
                PsaError::Kernel(KernelError::NonConvergentContour { nodes, rel_change })
            }
        },
    )
}

/// Settling tolerance for the order-`m` moment contour: the coefficient is
/// damped by `w^m` at assembly, so the extraction may be loose by the same
/// geometric factor the assembly regains.  Anchored at `1e-9` for the
/// leading orders and never looser than `1e-4`.
fn moment_contour_tol(m: usize) -> f64 {
    (1e-9 * 2f64.powi(m as i32)).min(1e-4)
}

/// Phase prefactors of the moment assembly: `sum F_k(1,1)` and the sums of
/// the first derivatives of the phase ratios along each axis.
fn phase_moment_prefactors(spec: &ModelSpec) -> Result<(f64, f64, f64), PsaError> {
    Ok(kernel::phase_prefactors(spec)?)
}

/// Computes the moment series of a walk through expansion order
/// `max_order`: each `v_{m,i}` is a contour derivative of the order-`m`
/// coefficient along its axis through `(1, 1)`.
///
/// The kernels do not involve the sharing parameter, so the result serves
/// every `w` (assembly is [`MomentSeries::mean_x1`] /
/// [`MomentSeries::mean_x2`]).
///
/// # Errors
///
/// Stability, root-finder, kernel, and contour failures.
pub fn psa_moment_series(spec: &ModelSpec, max_order: usize) -> Result<MomentSeries, PsaError> {
    let feq = WalkEquation::new(spec)?;
    let series = PsaSeries::new(&feq);
    let mut v1 = Vec::with_capacity(max_order + 1);
    let mut v2 = Vec::with_capacity(max_order + 1);
    for m in 0..=max_order {
        let d1 = psa_contour(
            |x| series.eval(m, ComplexPoint::new(x, C_ONE)),
            C_ONE,
            1,
            MOMENT_CONTOUR_RADIUS,
            moment_contour_tol(m),
        )?;
        v1.push(d1.re);
        let d2 = psa_contour(
            |y| series.eval(m, ComplexPoint::new(C_ONE, y)),
            C_ONE,
            1,
            MOMENT_CONTOUR_RADIUS,
            moment_contour_tol(m),
        )?;
        v2.push(d2.re);
    }
    let (f_sum, df_dx_sum, df_dy_sum) = phase_moment_prefactors(spec)?;
    Ok(MomentSeries {
        v1,
        v2,
        f_sum,
        df_dx_sum,
        df_dy_sum,
    })
}

/// Partial sum of the stationary total mass assembled from the expansion:
/// `sum_{m<=M} w^m V_m(1, 1)` scaled by the phase weight `1 + sum F_k`.
/// Converges to 1 as `M` grows for convergent `w` — the normalization
/// diagnostic of the expansion.
///
/// # Errors
///
/// As [`PsaSeries::eval`], plus phase-solve failures.
pub fn normalization_partial_sum(
    series: &PsaSeries<'_, WalkEquation<'_>>,
    w: f64,
    max_order: usize,
) -> Result<f64, PsaError> {
    let spec = series.feq.spec;
    let f_sum = if spec.n == 0 {
        0.0
    } else {
        kernel::eval_phase_solve(spec, ComplexPoint::real(1.0, 1.0))?
            .f
            .iter()
            .map(|v| v.re)
            .sum()
    };
    let corner = ComplexPoint::real(1.0, 1.0);
    let mut total = 0.0;
    for m in 0..=max_order {
        total += w.powi(m as i32) * series.eval(m, corner)?.re;
    }
    Ok(total * (1.0 + f_sum))
}

// ===========================================================================
// Rational (Pade) acceleration
// ===========================================================================

/// A rational approximant `num(w) / den(w)` with the numerator normalized
/// to `num[0] = 1`, free of poles on `[0, 1]`.
#[derive(Debug, Clone, Serialize)]
pub struct PadeApproximant {
    /// Ascending numerator coefficients; `num[0] = 1`.
    pub num: Vec<f64>,
    /// Ascending denominator coefficients.
    pub den: Vec<f64>,
}

impl PadeApproximant {
    /// Evaluates the approximant at `w`.
    #[must_use]
    pub fn eval(&self, w: f64) -> f64 {
        let horner = |c: &[f64]| c.iter().rev().fold(0.0, |acc, &v| acc * w + v);
        horner(&self.num) / horner(&self.den)
    }
}

/// Taylor coefficients of `num / den` through `orders`.
fn taylor_of_ratio(num: &[f64], den: &[f64], orders: usize) -> Vec<f64> {
    let mut q = vec![0.0; orders + 1];
    for t in 0..=orders {
        let mut acc = if t < num.len() { num[t] } else { 0.0 };
        for i in 1..den.len().min(t + 1) {
            acc -= den[i] * q[t - i];
        }
        q[t] = acc / den[0];
    }
    q
}

/// Shared finishing steps: normalize `num[0]` to 1, sweep `[0, 1]` for
/// denominator zeros, and re-expand against the matched conditions.
fn finish_pade(
    mut num: Vec<f64>,
    mut den: Vec<f64>,
    series: &[f64],
    matched_orders: usize,
    l: usize,
    k: usize,
) -> Result<PadeApproximant, PsaError> {
    let scale = num[0];
    if scale.abs() < 1e-300 {
        return Err(PsaError::SingularPade { l, k });
    }
    for c in num.iter_mut().chain(den.iter_mut()) {
        *c /= scale;
    }

    // Pole sweep on [0, 1] at step 1e-3: no sign change, no near-zero.
    let den_at = |w: f64| den.iter().rev().fold(0.0, |acc, &v| acc * w + v);
    let mut prev = den_at(0.0);
    for step in 0..=1000 {
        let w = f64::from(step) * 1e-3;
        let value = den_at(w);
        if value.abs() < 1e-12 || value * prev < 0.0 {
            return Err(PsaError::PadePole { w });
        }
        prev = value;
    }

    // Exactness: the re-expansion must reproduce the matched coefficients.
    let expanded = taylor_of_ratio(&num, &den, matched_orders);
    for (order, (&got, &want)) in expanded.iter().zip(series.iter()).enumerate() {
        let err = (got - want).abs();
        if err > 1e-9 * want.abs().max(1.0) {
            return Err(PsaError::PadeMismatch { order, err });
        }
    }
    Ok(PadeApproximant { num, den })
}

/// Solves the `k x k` linear system `m b = rhs` (dense, partial-pivot LU).
fn solve_dense(m: &nalgebra::DMatrix<f64>, rhs: &nalgebra::DVector<f64>) -> Option<Vec<f64>> {
    m.clone().lu().solve(rhs).map(|v| v.iter().copied().collect())
}

/// Classical one-point rational approximant `[l/k]` of a power series at 0:
/// denominator coefficients from the Toeplitz system that kills the series
/// tail through order `l + k`, numerator by convolution, numerator leading
/// coefficient normalized to 1.
///
/// # Errors
///
/// [`PsaError::ShortSeries`] when fewer than `l + k + 1` coefficients are
/// given; [`PsaError::SingularPade`] on a defective table entry (callers
/// lower `k`); [`PsaError::PadePole`] when the denominator vanishes on
/// `[0, 1]`; [`PsaError::PadeMismatch`] when re-expansion fails its `1e-9`
/// check.
pub fn pade_from_series(series: &[f64], l: usize, k: usize) -> Result<PadeApproximant, PsaError> {
    let need = l + k + 1;
    if series.len() < need {
        return Err(PsaError::ShortSeries {
            need,
            have: series.len(),
        });
    }
    let a = |t: i64| -> f64 {
        if t < 0 {
            0.0
        } else {
            series[t as usize]
        }
    };
    let mut den = vec![1.0];
    if k > 0 {
        let m = nalgebra::DMatrix::from_fn(k, k, |row, col| {
            a(l as i64 + row as i64 + 1 - (col as i64 + 1))
        });
        let rhs = nalgebra::DVector::from_fn(k, |row, _| -a(l as i64 + row as i64 + 1));
        let b = solve_dense(&m, &rhs).ok_or(PsaError::SingularPade { l, k })?;
        den.extend(b);
    }
    let num: Vec<f64> = (0..=l)
        .map(|t| {
            (0..=t.min(k))
                .map(|i| den[i] * a(t as i64 - i as i64))
                .sum()
        })
        .collect();
    finish_pade(num, den, series, l + k, l, k)
}

/// Two-point variant: matches the series through order `l + k - 1` at
/// `w = 0` and the exact value `value_at_one` at `w = 1` (the endpoint
/// anchor from the closed-form trivial coupling).
///
/// # Errors
///
/// As [`pade_from_series`], needing only `l + k` series coefficients.
pub fn pade_two_point(
    series: &[f64],
    l: usize,
    k: usize,
    value_at_one: f64,
) -> Result<PadeApproximant, PsaError> {
    let need = l + k;
    if series.len() < need.max(1) {
        return Err(PsaError::ShortSeries {
            need: need.max(1),
            have: series.len(),
        });
    }
    let a = |t: i64| -> f64 {
        if t < 0 || t as usize >= series.len() {
            0.0
        } else {
            series[t as usize]
        }
    };
    // Partial sums A_i = sum_{u=0..l-i} a_u appearing in num(1).
    let partial = |i: usize| -> f64 {
        if i > l {
            0.0
        } else {
            (0..=(l - i)).map(|u| a(u as i64)).sum()
        }
    };
    let mut den = vec![1.0];
    if k > 0 {
        let m = nalgebra::DMatrix::from_fn(k, k, |row, col| {
            if row < k - 1 {
                // Tail conditions at orders l+1 .. l+k-1.
                a(l as i64 + row as i64 + 1 - (col as i64 + 1))
            } else {
                // Value condition at w = 1.
                partial(col + 1) - value_at_one
            }
        });
        let rhs = nalgebra::DVector::from_fn(k, |row, _| {
            if row < k - 1 {
                -a(l as i64 + row as i64 + 1)
            } else {
                value_at_one - partial(0)
            }
        });
        let b = solve_dense(&m, &rhs).ok_or(PsaError::SingularPade { l, k })?;
        den.extend(b);
    }
    let mut num: Vec<f64> = (0..=l)
        .map(|t| {
            (0..=t.min(k))
                .map(|i| den[i] * a(t as i64 - i as i64))
                .sum()
        })
        .collect();
    if k == 0 {
        // No denominator freedom: the last numerator coefficient absorbs
        // the w = 1 condition instead of matching order l.
        let lower: f64 = num[..l].iter().sum();
        num[l] = value_at_one - lower;
    }
    let approx = finish_pade(num, den, series, need.saturating_sub(1), l, k)?;
    let endpoint = approx.eval(1.0);
    let err = (endpoint - value_at_one).abs();
    if err > 1e-9 * value_at_one.abs().max(1.0) {
        return Err(PsaError::PadeMismatch { order: need, err });
    }
    Ok(approx)
}

// ===========================================================================
// Closed forms at the sharing endpoints
// ===========================================================================

/// Which trivial coupling to solve exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SharingBoundary {
    /// `w = 0`: the first coordinate receives no interior service.
    W0,
    /// `w = 1`: the second coordinate receives no interior service.
    W1,
}

/// Mean levels of a trivial-coupling walk.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BoundaryMoments {
    /// Mean first coordinate.
    pub mean_x1: f64,
    /// Mean second coordinate.
    pub mean_x2: f64,
}

/// The interior transform of a `w = 0` walk in closed form: with one
/// boundary section absent, the functional equation is solved by evaluating
/// it on the root curve, leaving
/// `Pi_0 = [K(x, Yt) C(x, y) - K(x, y) C(x, Yt)] / (K(x, Yt) D(x, y))`
/// times the origin probability, where `Yt = Y(x)` and `D` is the combined
/// kernel (`x y - T R` for multi-phase walks, `-R` single-phase up to the
/// shared sign).
fn closed_form_pi0(
    spec: &ModelSpec,
    roots: &PsaSeries<'_, WalkEquation<'_>>,
    v00: f64,
    p: ComplexPoint,
) -> Result<C64, PsaError> {
    let yr = roots.y_root(p.x)?;
    let here = kernel::eval_rkc_unchecked(spec, p);
    let at_root = kernel::eval_rkc_unchecked(spec, ComplexPoint::new(p.x, yr));
    let value = if spec.n == 0 {
        let num = at_root.k * here.c - here.k * at_root.c;
        num / (at_root.k * here.r)
    } else {
        let t = kernel::eval_phase_solve_unchecked(spec, p)?.t;
        let num = t * (here.k * at_root.c - at_root.k * here.c);
        num / (at_root.k * (p.x * p.y - t * here.r))
    };
    Ok(value * v00)
}

/// Mean over a small `x`-circle of the closed-form transform — used
/// wherever `x = 1` must be approached (the closed form divides by
/// `K(x, Y(x))`, which vanishes there).
fn closed_form_pi0_near_one(
    spec: &ModelSpec,
    roots: &PsaSeries<'_, WalkEquation<'_>>,
    v00: f64,
    y: C64,
) -> Result<C64, PsaError> {
    let nodes = 16;
    let mut sum = C_ZERO;
    for k in 0..nodes {
        let angle = std::f64::consts::TAU * f64::from(k) / f64::from(nodes);
        let x = C_ONE + C64::from_polar(NEAR_ONE_RADIUS, angle);
        sum += closed_form_pi0(spec, roots, v00, ComplexPoint::new(x, y))?;
    }
    Ok(sum / f64::from(nodes))
}

fn closed_form_w0_moments(spec: &ModelSpec) -> Result<BoundaryMoments, PsaError> {
    debug_assert!(spec.w == 0.0);
    let feq = WalkEquation::new(spec)?;
    let v00 = feq.v00();
    let roots = PsaSeries::new(&feq);
    let (f_sum, df_dx_sum, df_dy_sum) = phase_moment_prefactors(spec)?;
    let weight = 1.0 + f_sum;

    let d1 = psa_contour(
        |x| closed_form_pi0(spec, &roots, v00, ComplexPoint::new(x, C_ONE)),
        C_ONE,
        1,
        NEAR_ONE_RADIUS,
        1e-9,
    )?;
    let d2 = psa_contour(
        |y| closed_form_pi0_near_one(spec, &roots, v00, y),
        C_ONE,
        1,
        NEAR_ONE_RADIUS,
        1e-9,
    )?;
    Ok(BoundaryMoments {
        mean_x1: (df_dx_sum + weight * weight * d1.re) / weight,
        mean_x2: (df_dy_sum + weight * weight * d2.re) / weight,
    })
}

/// Mean levels of the walk at a trivial coupling, from the exact
/// boundary-free solution of the functional equation (no expansion): the
/// requested endpoint model is rebuilt with the corresponding sharing
/// split, and the `w = 1` side is solved as the coordinate-swapped `w = 0`
/// problem.
///
/// # Errors
///
/// Stability, root-finder, kernel, and contour failures.
pub fn w_boundary_closed_form(
    spec: &ModelSpec,
    side: SharingBoundary,
) -> Result<BoundaryMoments, PsaError> {
    match side {
        SharingBoundary::W0 => closed_form_w0_moments(&spec.with_sharing(0.0)),
        SharingBoundary::W1 => {
            let swapped = spec.with_sharing(1.0).coordinate_swapped();
            let m = closed_form_w0_moments(&swapped)?;
            Ok(BoundaryMoments {
                mean_x1: m.mean_x2,
                mean_x2: m.mean_x1,
            })
        }
    }
}

// ===========================================================================
// Tests
// ===========================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_network_model, tests::two_mode_params, NetworkParams};
    use crate::oracle::{refine_truncation, OracleMetric};
    use approx::assert_relative_eq;

    fn two_mode_spec() -> ModelSpec {
        build_network_model(&two_mode_params()).unwrap()
    }

    /// Self-mirror walk: both coordinates see identical arrival, service,
    /// transfer, failure, and repair rates, with the service split evenly.
    fn mirror_spec() -> ModelSpec {
        build_network_model(&NetworkParams {
            lambda1: vec![0.5, 0.4, 0.1],
            lambda2: vec![0.5, 0.4, 0.1],
            nu1: 6.0,
            nu2: 6.0,
            r12: 0.3,
            r21: 0.3,
            gamma: vec![0.5, 0.8],
            tau: vec![5.0, 8.0],
            w: 0.5,
        })
        .unwrap()
    }

    /// Stable walk whose failed modes switch between each other, so the
    /// switching matrix is not a star and the kernel loses its polynomial
    /// form in `y`.
    fn cross_switching_spec() -> ModelSpec {
        let mut spec = two_mode_spec();
        spec.switch.set_theta(1, 2, 0.7);
        spec.switch.set_theta(2, 1, 0.4);
        spec
    }

    fn phaseless_spec() -> ModelSpec {
        build_network_model(&NetworkParams {
            lambda1: vec![0.5],
            lambda2: vec![0.5],
            nu1: 2.0,
            nu2: 2.0,
            r12: 0.0,
            r21: 0.0,
            gamma: vec![],
            tau: vec![],
            w: 0.5,
        })
        .unwrap()
    }

    #[test]
    fn kernel_vanishes_at_the_corner() {
        for spec in [two_mode_spec(), phaseless_spec(), cross_switching_spec()] {
            let feq = WalkEquation::new(&spec).unwrap();
            let g = feq.kernels(ComplexPoint::real(1.0, 1.0)).unwrap().g;
            assert!(g.norm() < 1e-10, "G(1,1) = {g}");
        }
    }

    #[test]
    fn root_at_x_one_is_one() {
        let spec = two_mode_spec();
        let feq = WalkEquation::new(&spec).unwrap();
        let y = find_root_in_disc(&feq, C_ONE).unwrap();
        assert_eq!(y, C_ONE);
    }

    #[test]
    fn roots_on_the_circle_are_interior_with_small_residual() {
        let spec = two_mode_spec();
        let feq = WalkEquation::new(&spec).unwrap();
        for k in [1, 7, 13, 19, 27] {
            let x = C64::from_polar(1.0, std::f64::consts::TAU * f64::from(k) / 32.0);
            let y = find_root_in_disc(&feq, x).unwrap();
            assert!(y.norm() < 1.0, "|Y({x})| = {}", y.norm());
            let g = feq.kernels(ComplexPoint::new(x, y)).unwrap().g;
            assert!(g.norm() < ROOT_RESIDUAL_TOL, "residual {}", g.norm());
        }
    }

    #[test]
    fn roots_mirror_under_conjugation() {
        let spec = two_mode_spec();
        let feq = WalkEquation::new(&spec).unwrap();
        for k in [3, 9, 21] {
            let x = C64::from_polar(1.0, std::f64::consts::TAU * f64::from(k) / 64.0);
            let y = find_root_in_disc(&feq, x).unwrap();
            let y_conj = find_root_in_disc(&feq, x.conj()).unwrap();
            assert!(
                (y_conj - y.conj()).norm() < 1e-9,
                "Y(conj x) = {y_conj} vs conj Y(x) = {}",
                y.conj()
            );
        }
    }

    #[test]
    fn polynomial_and_mueller_routes_agree() {
        let spec = two_mode_spec();
        let feq = WalkEquation::new(&spec).unwrap();
        assert!(feq.has_polynomial_form());
        for k in [5, 11, 23] {
            let x = C64::from_polar(1.0, std::f64::consts::TAU * f64::from(k) / 32.0);
            let fast = find_root_in_disc(&feq, x).unwrap();
            let slow = muller_root(&feq, x)
                .and_then(|y| newton_on_g(&feq, x, y).ok_or(PsaError::RootSolveFailed { x }))
                .unwrap();
            assert!(
                (fast - slow).norm() < 1e-9,
                "polynomial {fast} vs iterative {slow}"
            );
        }
    }

    #[test]
    fn general_switching_takes_the_winding_verified_route() {
        let spec = cross_switching_spec();
        let feq = WalkEquation::new(&spec).unwrap();
        assert!(!feq.has_polynomial_form());
        let x = C64::from_polar(1.0, 1.0);
        let y = find_root_in_disc(&feq, x).unwrap();
        assert!(y.norm() < 1.0);
        let g = feq.kernels(ComplexPoint::new(x, y)).unwrap().g;
        assert!(g.norm() < ROOT_RESIDUAL_TOL);
    }

    #[test]
    fn order_zero_reproduces_the_origin_probability() {
        let spec = two_mode_spec();
        let feq = WalkEquation::new(&spec).unwrap();
        let series = PsaSeries::new(&feq);
        let origin = ComplexPoint::real(0.0, 0.0);
        let v0 = series.eval(0, origin).unwrap();
        assert!(
            (v0.re - feq.v00()).abs() < 1e-9 && v0.im.abs() < 1e-9,
            "V_0(0,0) = {v0} vs origin probability {}",
            feq.v00()
        );
    }

    #[test]
    fn higher_orders_vanish_at_the_origin() {
        let spec = two_mode_spec();
        let feq = WalkEquation::new(&spec).unwrap();
        let series = PsaSeries::new(&feq);
        let origin = ComplexPoint::real(0.0, 0.0);
        for m in 1..=3 {
            let v = series.eval(m, origin).unwrap();
            assert!(v.norm() < 1e-9, "V_{m}(0,0) = {v}");
        }
    }

    #[test]
    fn engine_matches_the_literal_ratio_form() {
        // The engine eliminates through the source at (x, y) and (x, Y(x));
        // the published ratio form assembles the mixed difference of the
        // previous order between y and Y(x) explicitly.  Both must agree.
        let spec = two_mode_spec();
        let feq = WalkEquation::new(&spec).unwrap();
        let series = PsaSeries::new(&feq);
        for (m, p) in [
            (1, ComplexPoint::new(C64::new(0.4, 0.1), C64::new(0.3, -0.2))),
            (2, ComplexPoint::new(C64::new(0.7, 0.0), C64::new(0.2, 0.0))),
        ] {
            let yr = series.y_root(p.x).unwrap();
            let q = series.eval(m - 1, p).unwrap()
                - series.eval(m - 1, ComplexPoint::new(p.x, yr)).unwrap()
                - series.eval(m - 1, ComplexPoint::new(C_ZERO, p.y)).unwrap()
                + series.eval(m - 1, ComplexPoint::new(C_ZERO, yr)).unwrap();
            let k = feq.kernels(p).unwrap();
            let literal = q * k.g10 / k.g;
            let engine = series.eval(m, p).unwrap();
            assert!(
                (literal - engine).norm() < 1e-9,
                "order {m}: literal {literal} vs engine {engine}"
            );
        }
    }

    #[test]
    fn memoization_is_transparent() {
        let spec = two_mode_spec();
        let feq = WalkEquation::new(&spec).unwrap();
        let p = ComplexPoint::new(C64::new(0.6, 0.2), C64::new(0.5, -0.1));

        let fresh = PsaSeries::new(&feq);
        let direct = fresh.eval(2, p).unwrap();

        let warmed = PsaSeries::new(&feq);
        // Populate the cache through unrelated evaluations first.
        for m in 0..=2 {
            warmed.eval(m, ComplexPoint::real(0.3, 0.4)).unwrap();
            warmed.eval(m, ComplexPoint::real(1.0, 1.0)).unwrap();
        }
        let cached = warmed.eval(2, p).unwrap();
        assert!(
            (direct - cached).norm() < 1e-12,
            "fresh {direct} vs warmed {cached}"
        );
    }

    #[test]
    fn normalization_partial_sums_stay_at_one() {
        // Total mass is independent of the sharing parameter, so the whole
        // mass sits in the order-0 term and every deeper term contributes
        // exactly zero; the defect must stay at the order-0 noise floor for
        // every truncation and sharing value rather than grow with either.
        let spec = two_mode_spec();
        let feq = WalkEquation::new(&spec).unwrap();
        let series = PsaSeries::new(&feq);
        for (w, max_order) in [(0.1, 2), (0.1, 8), (0.5, 2), (0.5, 8)] {
            let defect = (normalization_partial_sum(&series, w, max_order).unwrap() - 1.0).abs();
            assert!(
                defect < 1e-8,
                "normalization defect {defect} at w {w}, order {max_order}"
            );
        }
    }

    #[test]
    fn symmetric_walk_truncations_have_equal_means_at_half_sharing() {
        // Mirror symmetry exchanges the coordinates together with
        // `w -> 1 - w`, so the per-order coefficients of the two means
        // differ; the assembled truncations must agree at w = 1/2, where
        // the walk is its own mirror image, up to the truncation tails.
        let series = psa_moment_series(&mirror_spec(), 10).unwrap();
        let e1 = series.mean_x1(0.5, 10);
        let e2 = series.mean_x2(0.5, 10);
        assert!(
            (e1 - e2).abs() < 1e-4 * e1.abs().max(1.0),
            "mean x1 {e1} vs mean x2 {e2}"
        );
    }

    #[test]
    fn truncated_mean_at_w_zero_is_the_leading_term() {
        let series = psa_moment_series(&two_mode_spec(), 3).unwrap();
        let at_zero = series.mean_x2(0.0, 3);
        let leading = series.mean_x2(0.0, 0);
        assert_relative_eq!(at_zero, leading, max_relative = 1e-12);
    }

    #[test]
    fn truncated_mean_matches_oracle_at_small_sharing() {
        let mut p = two_mode_params();
        p.w = 0.05;
        let spec = build_network_model(&p).unwrap();
        let series = psa_moment_series(&spec, 10).unwrap();
        let psa = series.mean_x2(0.05, 10);
        let oracle = refine_truncation(&spec, OracleMetric::MeanX2, 1e-5)
            .unwrap()
            .value;
        assert!(
            (psa - oracle).abs() / oracle.abs() < 0.01,
            "series {psa} vs oracle {oracle}"
        );
    }

    #[test]
    fn refinements_shrink_with_the_order() {
        let series = psa_moment_series(&two_mode_spec(), 6).unwrap();
        let w = 0.1;
        let first_step = (series.mean_x2(w, 1) - series.mean_x2(w, 0)).abs();
        let last_step = (series.mean_x2(w, 6) - series.mean_x2(w, 5)).abs();
        assert!(
            last_step < first_step,
            "refinement steps should shrink: {first_step} -> {last_step}"
        );
    }

    #[test]
    fn pade_recovers_the_geometric_series() {
        let approx = pade_from_series(&[1.0, -1.0, 1.0, -1.0], 0, 1).unwrap();
        assert_eq!(approx.num, vec![1.0]);
        assert_relative_eq!(approx.den[0], 1.0, max_relative = 1e-12);
        assert_relative_eq!(approx.den[1], 1.0, max_relative = 1e-12);
        for w in [0.0, 0.3, 0.9] {
            assert_relative_eq!(approx.eval(w), 1.0 / (1.0 + w), max_relative = 1e-12);
        }
    }

    #[test]
    fn pade_of_the_exponential_is_the_diagonal_quotient() {
        let approx = pade_from_series(&[1.0, 1.0, 0.5], 1, 1).unwrap();
        assert_relative_eq!(approx.num[1], 0.5, max_relative = 1e-12);
        assert_relative_eq!(approx.den[1], -0.5, max_relative = 1e-12);
    }

    #[test]
    fn pade_numerator_is_normalized() {
        let approx = pade_from_series(&[2.0, 1.0, 0.25, 0.125, 0.0625], 2, 2).unwrap();
        assert_relative_eq!(approx.num[0], 1.0, max_relative = 1e-15);
    }

    #[test]
    fn pade_rejects_singular_tables_and_short_series() {
        assert!(matches!(
            pade_from_series(&[0.0, 1.0], 0, 1),
            Err(PsaError::SingularPade { .. })
        ));
        assert!(matches!(
            pade_from_series(&[1.0, 2.0], 1, 1),
            Err(PsaError::ShortSeries { need: 3, have: 2 })
        ));
    }

    #[test]
    fn pade_rejects_poles_on_the_interval() {
        // 1/(1 - 2w): pole at w = 0.5.
        assert!(matches!(
            pade_from_series(&[1.0, 2.0, 4.0], 0, 1),
            Err(PsaError::PadePole { .. })
        ));
    }

    #[test]
    fn two_point_variant_anchors_the_endpoint() {
        let approx = pade_two_point(&[1.0, -1.0], 0, 1, 0.5).unwrap();
        for w in [0.0, 0.4, 1.0] {
            assert_relative_eq!(approx.eval(w), 1.0 / (1.0 + w), max_relative = 1e-12);
        }
        // Numerator-only variant: value condition replaces the top order.
        let poly = pade_two_point(&[3.0, 1.0], 1, 0, 5.0).unwrap();
        assert_relative_eq!(poly.eval(0.0), 3.0, max_relative = 1e-12);
        assert_relative_eq!(poly.eval(1.0), 5.0, max_relative = 1e-12);
    }

    #[test]
    fn closed_form_matches_engine_order_zero() {
        // The order-0 coefficient of the expansion and the boundary-free
        // closed form of the no-sharing walk are the same function reached
        // through different kernels.
        let spec = two_mode_spec();
        let twin = spec.with_sharing(0.0);
        let feq_twin = WalkEquation::new(&twin).unwrap();
        let roots = PsaSeries::new(&feq_twin);

        let feq = WalkEquation::new(&spec).unwrap();
        let series = PsaSeries::new(&feq);

        for p in [
            ComplexPoint::new(C64::new(0.4, 0.1), C64::new(0.3, -0.2)),
            ComplexPoint::new(C64::new(0.7, 0.0), C64::new(0.2, 0.0)),
        ] {
            let closed = closed_form_pi0(&twin, &roots, feq_twin.v00(), p).unwrap();
            let engine = series.eval(0, p).unwrap();
            assert!(
                (closed - engine).norm() < 1e-9,
                "closed {closed} vs engine {engine} at ({}, {})",
                p.x,
                p.y
            );
        }
    }

    #[test]
    fn closed_form_total_mass_is_one() {
        let twin = two_mode_spec().with_sharing(0.0);
        let feq = WalkEquation::new(&twin).unwrap();
        let roots = PsaSeries::new(&feq);
        let pi0_corner = closed_form_pi0_near_one(&twin, &roots, feq.v00(), C_ONE)
            .unwrap()
            .re;
        let (f_sum, _, _) = phase_moment_prefactors(&twin).unwrap();
        let total = pi0_corner * (1.0 + f_sum);
        assert!((total - 1.0).abs() < 1e-8, "total mass {total}");
    }

    #[test]
    fn endpoint_moments_match_oracle() {
        let spec = two_mode_spec();
        let moments = w_boundary_closed_form(&spec, SharingBoundary::W0).unwrap();
        let twin = spec.with_sharing(0.0);
        for (value, metric) in [
            (moments.mean_x1, OracleMetric::MeanX1),
            (moments.mean_x2, OracleMetric::MeanX2),
        ] {
            let oracle = refine_truncation(&twin, metric, 1e-5).unwrap().value;
            assert!(
                (value - oracle).abs() / oracle.abs() < 0.005,
                "closed form {value} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn endpoint_matches_leading_series_term() {
        let spec = two_mode_spec();
        let moments = w_boundary_closed_form(&spec, SharingBoundary::W0).unwrap();
        let series = psa_moment_series(&spec, 0).unwrap();
        assert!(
            (moments.mean_x2 - series.mean_x2(0.0, 0)).abs() < 1e-6,
            "closed {} vs series {}",
            moments.mean_x2,
            series.mean_x2(0.0, 0)
        );
    }

    #[test]
    fn symmetric_walk_has_mirrored_endpoints() {
        let spec = mirror_spec();
        let w0 = w_boundary_closed_form(&spec, SharingBoundary::W0).unwrap();
        let w1 = w_boundary_closed_form(&spec, SharingBoundary::W1).unwrap();
        assert!(
            (w0.mean_x1 - w1.mean_x2).abs() < 1e-8,
            "w0 x1 {} vs w1 x2 {}",
            w0.mean_x1,
            w1.mean_x2
        );
        assert!(
            (w0.mean_x2 - w1.mean_x1).abs() < 1e-8,
            "w0 x2 {} vs w1 x1 {}",
            w0.mean_x2,
            w1.mean_x1
        );
    }
}

