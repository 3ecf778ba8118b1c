//! Ergodicity analysis of the coupled walk.
//!
//! Everything in this module flows from one observation: the boundary-drop
//! kernel `K(x, y)` — the factor weighing the two boundary sections of the
//! functional equation against each other — has a zero curve `x = s(y)`
//! passing through `(1, 1)`.  Along that curve the functional equation loses
//! its boundary unknowns and leaves a scalar relation between the interior
//! transform and the origin probability; letting `y -> 1` along the curve
//! turns the relation into a value for the probability of the
//! empty-and-operational state, and the sign of that value is the
//! ergodicity verdict.
//!
//! Provided here:
//!
//! * [`solve_s_curve`] — the zero `x = s(y)` of the drop kernel for `y` on
//!   the unit circle, with a closed-form cross-check whenever both drop
//!   families live on `{0, 1}` (the kernel is then quadratic in `x`);
//! * [`pi0_origin`] — the origin probability, by Richardson-extrapolated
//!   contour differentiation of the composed functional equation along the
//!   curve;
//! * [`phase_probabilities`] — stationary phase occupancies from the phase
//!   elimination at `(1, 1)`;
//! * [`network_stability`] — the closed-form workload inequality for the
//!   repairable two-queue network, an independent route to the same verdict;
//! * [`kernel_zero_curves`] — the nonzero root `g(s)` of the combined kernel
//!   restricted to `x = g s`, `y = g / s`, traced by continuation in the
//!   angle of `s`; its images are the curves bounding the analytic
//!   continuation domains of the boundary transforms;
//! * [`stability_summary`] — a one-stop verdict combining the above.

use num_complex::Complex64 as C64;
use serde::Serialize;
use thiserror::Error;

use crate::kernel::{self, ComplexPoint, KernelError};
use crate::model::{ModelError, ModelSpec, NetworkParams};

/// Drop-curve samples must satisfy `|K(s(y), y)| <` this bound.
pub const CURVE_RESIDUAL_TOL: f64 = 1e-10;

/// Required agreement between the iterated drop-curve root and the explicit
/// quadratic root available when both drop families live on `{0, 1}`.
pub const QBD_AGREEMENT_TOL: f64 = 1e-9;

/// Maximum admitted spread between the two second-level Richardson
/// extrapolants of the origin-probability limit (relative to the value).
pub const LIMIT_SPREAD_TOL: f64 = 1e-4;

/// Newton iterations target this root residual, scaled by the total rate.
const ROOT_ATOL: f64 = 1e-12;

/// Relaxation factor of the damped fixed-point iteration on the drop curve.
const DAMPING: f64 = 0.5;

/// Iteration cap of the damped fixed-point solver.
const FIXED_POINT_CAP: usize = 500;

/// Iteration cap of the Newton solvers.
const NEWTON_CAP: usize = 60;

/// Newton iterates for the combined-kernel root beyond this modulus are
/// treated as divergent (the root itself lies in the closed unit disc).
const DIVERGENCE_RADIUS: f64 = 1.5;

/// Distances `1 - y` at which the origin-probability ratio is evaluated
/// before extrapolating `y -> 1`.
const LIMIT_EPSILONS: [f64; 4] = [1e-2, 5e-3, 2.5e-3, 1.25e-3];

/// Failure modes of the stability analysis.
#[derive(Debug, Error)]
pub enum StabilityError {
    /// The working-phase drop rates cannot support the drop-curve analysis.
    #[error("degenerate working-phase drop rates: {0}")]
    DegenerateBoundary(&'static str),
    /// Neither the damped fixed-point iteration (500 iterations) nor the
    /// Newton fallback converged to a drop-kernel zero.
    #[error("the drop-kernel zero could not be tracked to y = {y}")]
    TrackingFailed { y: C64 },
    /// The iterated root and the explicit quadratic root disagree.
    #[error(
        "drop-curve cross-check failed at y = {y}: iterated root {iterated} vs closed form {closed}"
    )]
    ClosedFormMismatch { y: C64, iterated: C64, closed: C64 },
    /// The Richardson extrapolants of the origin-probability limit spread
    /// further than [`LIMIT_SPREAD_TOL`] allows.
    #[error(
        "origin-probability limit is ill-conditioned: extrapolant spread {spread:.3e} exceeds {tol:.3e}"
    )]
    IllConditionedLimit { spread: f64, tol: f64 },
    /// The origin-probability limit is nonpositive: the walk has no
    /// stationary distribution.
    #[error("the walk is unstable: the origin-probability limit is {value:.6e} <= 0")]
    Unstable { value: f64 },
    /// Newton continuation for the combined-kernel root diverged.
    #[error("combined-kernel root tracking diverged at angle {phi:.6}")]
    CurveDivergence { phi: f64 },
    /// A kernel evaluation failed.
    #[error(transparent)]
    Kernel(#[from] KernelError),
    /// The network parameters are structurally invalid.
    #[error(transparent)]
    Network(#[from] ModelError),
}

// ===========================================================================
// The drop kernel and its zero curve x = s(y)
// ===========================================================================

/// One full turn of the drop-kernel zero `x = s(y)` along the unit circle.
#[derive(Debug, Clone)]
pub struct SCurve {
    /// `(y, s(y))` at equally spaced angles starting from `y = 1`, where
    /// `s(y)` is the zero of the drop kernel continued from `s(1) = 1`.
    pub samples: Vec<(C64, C64)>,
    /// `d s / d y` at `y = 1`, from the closed formula (ratio of first
    /// moments of the two drop families).
    pub s_prime_1: f64,
}

/// The boundary drop families and everything needed to track the zero of
/// the drop kernel `K(x, y) = x L2(x, y) - y L1(x, y)`, where `L2` sums
/// `q2_{i,-1} (y - x^i)` and `L1` sums `q1_{-1,j} (x - y^j)`.
struct DropKernel {
    /// `(j, rate)` of the full-rate first-coordinate drops `(-1, j)`.
    q1: Vec<(i32, f64)>,
    /// `(i, rate)` of the full-rate second-coordinate drops `(i, -1)`.
    q2: Vec<(i32, f64)>,
    /// Total rate of `q1`.
    sum1: f64,
    /// Total rate of `q2`.
    sum2: f64,
    /// Closed-form slope of the zero curve at `(1, 1)`.
    s_prime_1: f64,
    /// Absolute residual below which a root is accepted.
    atol: f64,
}

impl DropKernel {
    fn from_spec(spec: &ModelSpec) -> Result<Self, StabilityError> {
        let q1: Vec<(i32, f64)> = spec.boundary_x.x_decrements().collect();
        let q2: Vec<(i32, f64)> = spec.boundary_y.y_decrements().collect();
        let sum1: f64 = q1.iter().map(|&(_, r)| r).sum();
        let sum2: f64 = q2.iter().map(|&(_, r)| r).sum();
        if sum1 + sum2 <= 0.0 {
            return Err(StabilityError::DegenerateBoundary(
                "the working phase has no boundary drop rates",
            ));
        }
        // Slope of the zero curve at (1, 1) by implicit differentiation.
        let slope_num: f64 = sum2 + q1.iter().map(|&(j, r)| f64::from(j) * r).sum::<f64>();
        let slope_den: f64 = sum1 + q2.iter().map(|&(i, r)| f64::from(i) * r).sum::<f64>();
        if slope_den <= 0.0 {
            return Err(StabilityError::DegenerateBoundary(
                "the zero curve through (1, 1) has unbounded slope: no first-coordinate \
                 drops and no sliding second-coordinate drops",
            ));
        }
        let atol = ROOT_ATOL * (sum1 + sum2).max(1.0);
        Ok(Self {
            q1,
            q2,
            sum1,
            sum2,
            s_prime_1: slope_num / slope_den,
            atol,
        })
    }

    /// `K(x, y)`.
    fn value(&self, x: C64, y: C64) -> C64 {
        let f2: C64 = self.q2.iter().map(|&(i, r)| r * (y - x.powi(i))).sum();
        let f1: C64 = self.q1.iter().map(|&(j, r)| r * (x - y.powi(j))).sum();
        x * f2 - y * f1
    }

    /// `d K / d x`.
    fn x_derivative(&self, x: C64, y: C64) -> C64 {
        let d2: C64 = self
            .q2
            .iter()
            .map(|&(i, r)| r * ((y - x.powi(i)) - f64::from(i) * x.powi(i)))
            .sum();
        d2 - y * self.sum1
    }

    /// The map whose fixed points in `x` are the zeros of `K(., y)`; `None`
    /// when its denominator vanishes.
    fn fixed_point_map(&self, x: C64, y: C64) -> Option<C64> {
        let num = y
            * (x * self.sum2
                + self.q1.iter().map(|&(j, r)| r * y.powi(j)).sum::<C64>());
        let den =
            self.q2.iter().map(|&(i, r)| r * x.powi(i)).sum::<C64>() + y * self.sum1;
        (den.norm() > 1e-14).then(|| num / den)
    }

    /// Damped fixed-point iteration from `seed`; `None` at the iteration cap.
    fn damped_fixed_point(&self, y: C64, seed: C64) -> Option<C64> {
        let mut x = seed;
        for _ in 0..FIXED_POINT_CAP {
            let mapped = self.fixed_point_map(x, y)?;
            let next = x + DAMPING * (mapped - x);
            if !next.is_finite() {
                return None;
            }
            if (next - x).norm() <= 1e-13 * next.norm().max(1.0) {
                return Some(next);
            }
            x = next;
        }
        None
    }

    /// Newton iteration on `K(., y)` from `seed` down to the residual target.
    fn newton(&self, y: C64, seed: C64) -> Option<C64> {
        let mut x = seed;
        for _ in 0..NEWTON_CAP {
            let k = self.value(x, y);
            if k.norm() <= self.atol {
                return Some(x);
            }
            let dk = self.x_derivative(x, y);
            if dk.norm() < 1e-14 {
                return None;
            }
            x -= k / dk;
            if !x.is_finite() || x.norm() > 100.0 {
                return None;
            }
        }
        None
    }

    /// Root of `K(., y)` near `seed`: the damped fixed point polished by
    /// Newton and a direct Newton run race from the seed, and the converged
    /// root closer to the seed wins.  The distance criterion keeps the
    /// continuation on one branch — the fixed-point map can switch
    /// attractors between neighbouring zeros along the way (it provably
    /// does so near `y = -1` when the drop families are equal).
    fn solve(&self, y: C64, seed: C64) -> Option<C64> {
        let direct = self.newton(y, seed);
        let relaxed = self
            .damped_fixed_point(y, seed)
            .and_then(|x| self.newton(y, x));
        match (direct, relaxed) {
            (Some(a), Some(b)) => {
                Some(if (a - seed).norm() <= (b - seed).norm() { a } else { b })
            }
            (a, b) => a.or(b),
        }
    }

    /// True when both drop families live on exponents `{0, 1}`, so that
    /// `K(., y)` is a quadratic polynomial with explicit roots.
    fn has_quadratic_form(&self) -> bool {
        self.q1.iter().all(|&(j, _)| (0..=1).contains(&j))
            && self.q2.iter().all(|&(i, _)| (0..=1).contains(&i))
    }

    /// Roots of the quadratic form of `K(., y)` (callers check
    /// [`Self::has_quadratic_form`] first).  Expanding
    /// `x (b0 (y - 1) + b1 (y - x)) - y (a0 (x - 1) + a1 (x - y)) = 0`
    /// and clearing signs gives
    /// `b1 x^2 + [b0 + y (a0 + a1 - b0 - b1)] x - y (a0 + a1 y) = 0`,
    /// with `a = q1` and `b = q2` rates; the roots are paired through the
    /// product of roots to avoid cancellation.
    fn quadratic_roots(&self, y: C64) -> Vec<C64> {
        let find = |fam: &[(i32, f64)], e: i32| {
            fam.iter().find(|&&(k, _)| k == e).map_or(0.0, |&(_, r)| r)
        };
        let a0 = find(&self.q1, 0);
        let a1 = find(&self.q1, 1);
        let b0 = find(&self.q2, 0);
        let b1 = find(&self.q2, 1);

        let b = b0 + y * (a0 + a1 - b0 - b1);
        let c = -y * (a0 + a1 * y);
        if b1 == 0.0 {
            return if b.norm() > 1e-14 { vec![-c / b] } else { Vec::new() };
        }
        let sq = (b * b - 4.0 * b1 * c).sqrt();
        let q = if (b + sq).norm() >= (b - sq).norm() {
            -(b + sq) / 2.0
        } else {
            -(b - sq) / 2.0
        };
        let mut roots = vec![q / b1];
        if q.norm() > 0.0 {
            roots.push(c / q);
        }
        roots
    }
}

/// Tracks the zero `x = s(y)` of the drop kernel for `n_samples` equally
/// spaced `y` on the unit circle (at least 4), warm-starting each sample
/// from the previous one beginning at the known value `s(1) = 1`.
///
/// Every sample is first approached by the damped fixed-point iteration and
/// then polished by Newton on the kernel itself; when both drop families
/// live on `{0, 1}` the explicit quadratic root closest to the iterate is
/// also computed and must agree within [`QBD_AGREEMENT_TOL`].
///
/// # Errors
///
/// [`StabilityError::DegenerateBoundary`] when the working phase has no
/// drop rates or the curve has unbounded slope at `(1, 1)`;
/// [`StabilityError::TrackingFailed`] when neither solver converges;
/// [`StabilityError::ClosedFormMismatch`] when the quadratic cross-check
/// fails.
pub fn solve_s_curve(spec: &ModelSpec, n_samples: usize) -> Result<SCurve, StabilityError> {
    let dk = DropKernel::from_spec(spec)?;
    let n = n_samples.max(4);
    let quadratic = dk.has_quadratic_form();
    let mut samples = Vec::with_capacity(n);
    let mut warm = C64::new(1.0, 0.0);
    for k in 0..n {
        let phi = std::f64::consts::TAU * k as f64 / n as f64;
        let y = C64::from_polar(1.0, phi);
        let s = dk
            .solve(y, warm)
            .ok_or(StabilityError::TrackingFailed { y })?;
        if quadratic {
            let closest = dk
                .quadratic_roots(y)
                .into_iter()
                .min_by(|a, b| (a - s).norm().total_cmp(&(b - s).norm()));
            if let Some(closed) = closest {
                if (closed - s).norm() > QBD_AGREEMENT_TOL * s.norm().max(1.0) {
                    return Err(StabilityError::ClosedFormMismatch {
                        y,
                        iterated: s,
                        closed,
                    });
                }
            }
        }
        warm = s;
        samples.push((y, s));
    }
    Ok(SCurve {
        samples,
        s_prime_1: dk.s_prime_1,
    })
}

// ===========================================================================
// The origin probability and the ergodicity verdict
// ===========================================================================

/// Which composite of the functional equation along the drop curve is being
/// differentiated.
#[derive(Clone, Copy)]
enum CompositePart {
    /// `R(s(y), y) T(s(y), y) - s(y) y` (single-phase models: `R(s(y), y)`).
    Numerator,
    /// `T(s(y), y) C(s(y), y)` (single-phase models: `C(s(y), y)`).
    Denominator,
}

/// First derivative in `y` of one composite part, by contour quadrature on
/// a circle around `center`; the drop-curve root is re-solved at every
/// contour node, warm-started from its neighbour.
fn composite_derivative(
    spec: &ModelSpec,
    dk: &DropKernel,
    center: C64,
    radius: f64,
    warm_seed: C64,
    part: CompositePart,
) -> Result<C64, StabilityError> {
    let mut warm = warm_seed;
    let mut lost_track: Option<C64> = None;
    let result = kernel::contour_derivative(
        |y| {
            let Some(s) = dk.newton(y, warm).or_else(|| dk.solve(y, warm)) else {
                // Remember the failure and unwind with a placeholder error;
                // the caller rewrites it below.
                lost_track = Some(y);
                return Err(KernelError::ZeroX);
            };
            warm = s;
            let p = ComplexPoint::new(s, y);
            let kv = kernel::eval_rkc_unchecked(spec, p);
            if spec.n == 0 {
                Ok(match part {
                    CompositePart::Numerator => kv.r,
                    CompositePart::Denominator => kv.c,
                })
            } else {
                let ps = kernel::eval_phase_solve_unchecked(spec, p)?;
                Ok(match part {
                    CompositePart::Numerator => kv.r * ps.t - s * y,
                    CompositePart::Denominator => ps.t * kv.c,
                })
            }
        },
        center,
        1,
        radius,
    );
    match result {
        Ok(v) => Ok(v),
        Err(_) if lost_track.is_some() => Err(StabilityError::TrackingFailed {
            y: lost_track.unwrap(),
        }),
        Err(e) => Err(e.into()),
    }
}

/// The signed origin-probability limit: positive exactly when the walk is
/// ergodic, in which case it equals the stationary probability of the
/// empty-and-operational state.
///
/// Both composite parts vanish at `y = 1`, so the limit of their ratio is
/// taken with one round of l'Hospital, numerically: the ratio of first
/// derivatives is evaluated at `y = 1 - eps` for the four epsilons in
/// [`LIMIT_EPSILONS`] and Richardson-extrapolated to `eps -> 0` (three
/// halving levels, leaving a quartic error term).  Multi-phase models carry
/// the prefactor `1 / (1 + sum F_k(1, 1))`, the working-phase occupancy.
fn origin_limit(spec: &ModelSpec) -> Result<f64, StabilityError> {
    let dk = DropKernel::from_spec(spec)?;
    let prefactor = if spec.n == 0 {
        1.0
    } else {
        let ps = kernel::eval_phase_solve(spec, ComplexPoint::real(1.0, 1.0))?;
        1.0 / (1.0 + ps.f.iter().map(|v| v.re).sum::<f64>())
    };

    let mut ratios = [0.0_f64; LIMIT_EPSILONS.len()];
    for (slot, &eps) in LIMIT_EPSILONS.iter().enumerate() {
        let center = C64::new(1.0 - eps, 0.0);
        let seed = C64::new(1.0 - dk.s_prime_1 * eps, 0.0);
        let s_center = dk
            .solve(center, seed)
            .ok_or(StabilityError::TrackingFailed { y: center })?;
        let radius = eps / 2.0;
        let num =
            composite_derivative(spec, &dk, center, radius, s_center, CompositePart::Numerator)?;
        let den = composite_derivative(
            spec,
            &dk,
            center,
            radius,
            s_center,
            CompositePart::Denominator,
        )?;
        ratios[slot] = (num / den).re;
    }

    let b1 = 2.0 * ratios[1] - ratios[0];
    let b2 = 2.0 * ratios[2] - ratios[1];
    let b3 = 2.0 * ratios[3] - ratios[2];
    let c1 = (4.0 * b2 - b1) / 3.0;
    let c2 = (4.0 * b3 - b2) / 3.0;
    let value = prefactor * (8.0 * c2 - c1) / 7.0;
    let spread = prefactor * (c2 - c1).abs();
    let tol = LIMIT_SPREAD_TOL * value.abs().max(1.0);
    if spread > tol {
        return Err(StabilityError::IllConditionedLimit { spread, tol });
    }
    Ok(value)
}

/// The stationary probability of the empty-and-operational state.
///
/// # Errors
///
/// [`StabilityError::Unstable`] when the limit is nonpositive (the walk is
/// not ergodic); [`StabilityError::IllConditionedLimit`] when the
/// extrapolation does not settle; degenerate-boundary, tracking, and kernel
/// errors as in [`solve_s_curve`].
pub fn pi0_origin(spec: &ModelSpec) -> Result<f64, StabilityError> {
    let value = origin_limit(spec)?;
    if value <= 0.0 {
        return Err(StabilityError::Unstable { value });
    }
    Ok(value)
}

// ===========================================================================
// Phase occupancies
// ===========================================================================

/// Stationary probabilities of the phase process, working phase first.
///
/// The phase elimination at `(1, 1)` yields the occupancy of each
/// alternative phase as a multiple `F_k(1, 1)` of the working phase's, and
/// normalisation fixes the latter to `1 / (1 + sum F_k(1, 1))`.
///
/// # Errors
///
/// Propagates the phase-solve failure modes; in particular
/// [`KernelError::NoPhases`] for models with a single phase.
pub fn phase_probabilities(spec: &ModelSpec) -> Result<Vec<f64>, StabilityError> {
    let ps = kernel::eval_phase_solve(spec, ComplexPoint::real(1.0, 1.0))?;
    let f: Vec<f64> = ps.f.iter().map(|v| v.re).collect();
    let pi0 = 1.0 / (1.0 + f.iter().sum::<f64>());
    let mut probs = Vec::with_capacity(f.len() + 1);
    probs.push(pi0);
    probs.extend(f.iter().map(|v| v * pi0));
    Ok(probs)
}

// ===========================================================================
// Closed-form network condition
// ===========================================================================

/// Both sides of the closed-form stability inequality for the repairable
/// two-queue network.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct NetworkStability {
    /// Work brought into the network per unit time (in units of service
    /// capacity), averaged over the station modes.
    pub rho_left: f64,
    /// Fraction of time the station is operational — the only time work can
    /// leave.
    pub rho_right: f64,
    /// `rho_left < rho_right`.
    pub stable: bool,
}

/// Evaluates the closed-form stability condition of the two-queue network:
/// the mode-averaged workload arriving per unit time must stay below the
/// fraction of time the station is operational.
///
/// Feedback routing inflates the raw arrival rates to the effective rates
/// `(lambda_i + lambda_other * r_other,i) / (1 - r12 r21)`, and the station
/// modes are weighted by their stationary occupancies `1 : gamma_k / tau_k`.
///
/// # Errors
///
/// [`StabilityError::Network`] when the parameters are structurally invalid
/// (including a routing loop with `r12 * r21 >= 1`).
pub fn network_stability(p: &NetworkParams) -> Result<NetworkStability, StabilityError> {
    p.check()?;
    let feedback = 1.0 - p.r12 * p.r21;
    let weight_total: f64 = 1.0
        + p.gamma
            .iter()
            .zip(&p.tau)
            .map(|(&g, &t)| g / t)
            .sum::<f64>();
    let p0 = 1.0 / weight_total;

    let mut left = 0.0;
    for k in 0..=p.n_modes() {
        let weight = if k == 0 {
            p0
        } else {
            p0 * p.gamma[k - 1] / p.tau[k - 1]
        };
        let eff1 = (p.lambda1[k] + p.lambda2[k] * p.r21) / feedback;
        let eff2 = (p.lambda2[k] + p.lambda1[k] * p.r12) / feedback;
        left += weight * (eff1 / p.nu1 + eff2 / p.nu2);
    }
    Ok(NetworkStability {
        rho_left: left,
        rho_right: p0,
        stable: left < p0,
    })
}

// ===========================================================================
// Zero curves of the combined kernel
// ===========================================================================

/// The nonzero root `g(s)` of the combined kernel on `x = g s`, `y = g / s`,
/// together with its two curve images.
#[derive(Debug, Clone)]
pub struct KernelZeroCurves {
    /// `(s, g(s))` at equally spaced angles starting from `s = 1`.
    pub g: Vec<(C64, C64)>,
    /// First-coordinate image `x = g(s) s` per sample.
    pub s1: Vec<C64>,
    /// Second-coordinate image `y = g(s) / s` per sample.
    pub s2: Vec<C64>,
}

/// `g^2 - psi(g s, g / s)` where `psi = R T` is the combined kernel
/// (`x y - psi` vanishes on the zero set being traced, and substituting
/// `x = g s`, `y = g / s` turns it into this scalar residual).
fn combined_residual(spec: &ModelSpec, g: C64, s: C64) -> Result<C64, KernelError> {
    let p = ComplexPoint::new(g * s, g / s);
    let kv = kernel::eval_rkc_unchecked(spec, p);
    let ps = kernel::eval_phase_solve_unchecked(spec, p)?;
    Ok(g * g - kv.r * ps.t)
}

/// Newton on the combined-kernel residual in `g` (derivative by central
/// difference), rejecting the identically-zero root and iterates beyond
/// [`DIVERGENCE_RADIUS`].
fn track_combined_root(spec: &ModelSpec, s: C64, seed: C64) -> Option<C64> {
    let mut g = seed;
    for _ in 0..NEWTON_CAP {
        let h = combined_residual(spec, g, s).ok()?;
        if h.norm() <= ROOT_ATOL {
            return (g.norm() > 1e-6).then_some(g);
        }
        let step = 1e-6 * g.norm().max(0.1);
        let hp = combined_residual(spec, g + step, s).ok()?;
        let hm = combined_residual(spec, g - step, s).ok()?;
        let dh = (hp - hm) / (2.0 * step);
        if dh.norm() < 1e-12 {
            return None;
        }
        g -= h / dh;
        if !g.is_finite() || g.norm() > DIVERGENCE_RADIUS {
            return None;
        }
    }
    None
}

/// Traces the nonzero combined-kernel root `g(s)` for `s` on the unit
/// circle, by continuation in the angle starting from the exact value
/// `g(1) = 1`.
///
/// The sample count is rounded up to a multiple of 4 so that `-s` and the
/// conjugate of every sampled `s` are themselves sample points (the traced
/// branch satisfies `g(-s) = -g(s)` and `g(conj s) = conj g(s)`).  Each
/// sample runs Newton from the modulus of the previous sample and from the
/// previous sample itself, keeping the converged root closer to the
/// previous sample — both seeds matter because the branch's phase advances
/// with the angle while its modulus moves slowly.
///
/// # Errors
///
/// [`KernelError::NoPhases`] for single-phase models (the combined kernel
/// involves the eliminated phase factor); [`StabilityError::Unstable`] when
/// the ergodicity verdict fails (the two-root structure underlying the
/// continuation is only guaranteed for ergodic walks);
/// [`StabilityError::CurveDivergence`] when the tracker loses the root.
pub fn kernel_zero_curves(
    spec: &ModelSpec,
    n_samples: usize,
) -> Result<KernelZeroCurves, StabilityError> {
    if spec.n == 0 {
        return Err(KernelError::NoPhases.into());
    }
    let limit = origin_limit(spec)?;
    if limit <= 0.0 {
        return Err(StabilityError::Unstable { value: limit });
    }

    let n = n_samples.div_ceil(4).max(1) * 4;
    let mut g_samples = Vec::with_capacity(n);
    let mut s1 = Vec::with_capacity(n);
    let mut s2 = Vec::with_capacity(n);
    let mut prev = C64::new(1.0, 0.0);
    for k in 0..n {
        let phi = std::f64::consts::TAU * k as f64 / n as f64;
        let s = C64::from_polar(1.0, phi);
        let mut best: Option<C64> = None;
        for seed in [C64::from(prev.norm()), prev] {
            if let Some(root) = track_combined_root(spec, s, seed) {
                let keep = match best {
                    None => true,
                    Some(b) => (root - prev).norm() < (b - prev).norm(),
                };
                if keep {
                    best = Some(root);
                }
            }
        }
        let g = best.ok_or(StabilityError::CurveDivergence { phi })?;
        prev = g;
        g_samples.push((s, g));
        s1.push(g * s);
        s2.push(g / s);
    }
    Ok(KernelZeroCurves {
        g: g_samples,
        s1,
        s2,
    })
}

// ===========================================================================
// Summary
// ===========================================================================

/// Stationary-regime verdict and headline quantities of one walk.
#[derive(Debug, Clone, Serialize)]
pub struct StabilitySummary {
    /// Signed origin-probability limit; the probability of the
    /// empty-and-operational state when positive.
    pub pi0_origin: f64,
    /// Stationary phase occupancies, working phase first (`[1.0]` for
    /// single-phase models).
    pub phase_probs: Vec<f64>,
    /// Utilisation-style margin: one minus the origin probability, the
    /// fraction of time the system is busy or degraded.  Below 1 exactly
    /// when the walk is ergodic.
    pub rho: f64,
    /// `pi0_origin > 0`.
    pub stable: bool,
}

/// Computes the full stability summary of a walk.
///
/// # Errors
///
/// As [`pi0_origin`] (but an unstable walk is reported in the summary, not
/// as an error) and [`phase_probabilities`].
pub fn stability_summary(spec: &ModelSpec) -> Result<StabilitySummary, StabilityError> {
    let value = origin_limit(spec)?;
    let phase_probs = if spec.n == 0 {
        vec![1.0]
    } else {
        phase_probabilities(spec)?
    };
    Ok(StabilitySummary {
        pi0_origin: value,
        phase_probs,
        rho: 1.0 - value,
        stable: value > 0.0,
    })
}

// ===========================================================================
// Tests
// ===========================================================================
