//! Rate-level description of the modulated, boundary-coupled random walk.
//!
//! A model instance consists of
//!
//! * five *increment rate fields*, one per lattice region and phase group:
//!   - `interior`: phase 0, both coordinates positive.  Increments live in
//!     `{-1, 0, 1, ..} x {-1, 0, 1, ..}` minus the double decrement
//!     `(-1, -1)`.
//!   - `boundary_x`: phase 0 on the horizontal boundary (`x2 = 0`), with
//!     `dx >= -1` and `dy >= 0`.
//!   - `boundary_y`: phase 0 on the vertical boundary (`x1 = 0`), with
//!     `dx >= 0` and `dy >= -1`.
//!   - `corner`: phase 0 at the origin, nonnegative increments only.
//!   - `interior_phase[k-1]`: phase `k >= 1` everywhere, nonnegative
//!     increments only (degraded modes never serve).
//! * a [`PhaseSwitch`]: switching rates `theta[j][j']` between phases with an
//!   optional nonnegative level jump drawn from a finite distribution at each
//!   switch.
//! * the sharing parameter `w` in `[0, 1]`.
//!
//! Two structural identities tie the fields together and are enforced by
//! [`validate_model`]:
//!
//! * **Boundary agreement**: on nonnegative increments every phase-0 field
//!   agrees with `interior`; boundary fields may differ only in how they
//!   serve (negative components).
//! * **Coupling**: interior decrements are the boundary service rates scaled
//!   by the share of capacity each coordinate receives when both are busy,
//!   ```text
//!   q_{i,-1}(0) = (1 - w) * q^{(2)}_{i,-1}(0),
//!   q_{-1,j}(0) =      w  * q^{(1)}_{-1,j}(0).
//!   ```
//!
//! [`build_network_model`] constructs such a spec from the parameters of a
//! two-queue network whose single repairable station switches between an
//! operational mode and `N` degraded modes, and [`is_symmetric`] recognises
//! the exchangeable restriction used by the closed-form moment route.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::C64;

/// Relative tolerance used when testing the structural rate identities
/// (boundary agreement, coupling, jump-probability normalisation).
pub const RATE_IDENTITY_TOL: f64 = 1e-12;

/// Returns true when `a` and `b` agree within [`RATE_IDENTITY_TOL`],
/// absolutely near zero and relatively otherwise.
#[inline]
fn rate_eq(a: f64, b: f64) -> bool {
    (a - b).abs() <= RATE_IDENTITY_TOL * 1f64.max(a.abs()).max(b.abs())
}

// ===========================================================================
// Increment rate fields
// ===========================================================================

/// One transition rate of a rate field, serialised as
/// `{"dx": .., "dy": .., "rate": ..}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateEntry {
    /// Increment of the first coordinate.
    pub dx: i32,
    /// Increment of the second coordinate.
    pub dy: i32,
    /// Transition rate (per unit time, nonnegative).
    pub rate: f64,
}

/// A finitely supported map from level increments to transition rates.
///
/// Entries with rate exactly `0` are dropped on insertion, so two fields are
/// equal iff they induce the same generator.  Iteration order is fixed
/// (lexicographic in `(dx, dy)`), which keeps every downstream computation
/// and serialisation deterministic.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<RateEntry>", into = "Vec<RateEntry>")]
pub struct IncrementRateField {
    entries: BTreeMap<(i32, i32), f64>,
}

impl IncrementRateField {
    /// Creates an empty field.
    #[must_use]
    pub fn new() -> Self {
        Self::default()
    }

    /// Builder-style insertion; a zero rate removes the entry.
    #[must_use]
    pub fn with(mut self, dx: i32, dy: i32, rate: f64) -> Self {
        self.insert(dx, dy, rate);
        self
    }

    /// Sets the rate of increment `(dx, dy)`; a zero rate removes the entry.
    pub fn insert(&mut self, dx: i32, dy: i32, rate: f64) {
        if rate == 0.0 {
            self.entries.remove(&(dx, dy));
        } else {
            self.entries.insert((dx, dy), rate);
        }
    }

    /// Rate of increment `(dx, dy)`, zero when absent.
    #[must_use]
    pub fn rate(&self, dx: i32, dy: i32) -> f64 {
        self.entries.get(&(dx, dy)).copied().unwrap_or(0.0)
    }

    /// All stored increments with their rates, in lexicographic order.
    pub fn iter(&self) -> impl Iterator<Item = (i32, i32, f64)> + '_ {
        self.entries.iter().map(|(&(dx, dy), &r)| (dx, dy, r))
    }

    /// Entries with both components nonnegative.
    pub fn nonneg(&self) -> impl Iterator<Item = (i32, i32, f64)> + '_ {
        self.iter().filter(|&(dx, dy, _)| dx >= 0 && dy >= 0)
    }

    /// Entries of the form `(-1, j)`, yielded as `(j, rate)`.
    pub fn x_decrements(&self) -> impl Iterator<Item = (i32, f64)> + '_ {
        self.iter()
            .filter(|&(dx, _, _)| dx == -1)
            .map(|(_, dy, r)| (dy, r))
    }

    /// Entries of the form `(i, -1)`, yielded as `(i, rate)`.
    pub fn y_decrements(&self) -> impl Iterator<Item = (i32, f64)> + '_ {
        self.iter()
            .filter(|&(_, dy, _)| dy == -1)
            .map(|(dx, _, r)| (dx, r))
    }

    /// Sum of all rates (total outflow contributed by this field).
    #[must_use]
    pub fn total_rate(&self) -> f64 {
        self.iter().map(|(_, _, r)| r).sum()
    }

    /// True when the field is empty.
    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The field with `dx` and `dy` exchanged in every entry.
    #[must_use]
    pub fn transposed(&self) -> Self {
        let mut out = Self::new();
        for (dx, dy, r) in self.iter() {
            out.insert(dy, dx, r);
        }
        out
    }

    /// True when `self` and `other` carry the same increments with rates
    /// equal within [`RATE_IDENTITY_TOL`].
    #[must_use]
    pub fn approx_eq(&self, other: &Self) -> bool {
        let keys: std::collections::BTreeSet<_> = self
            .entries
            .keys()
            .chain(other.entries.keys())
            .copied()
            .collect();
        keys.into_iter()
            .all(|(dx, dy)| rate_eq(self.rate(dx, dy), other.rate(dx, dy)))
    }
}

impl From<Vec<RateEntry>> for IncrementRateField {
    fn from(entries: Vec<RateEntry>) -> Self {
        let mut field = Self::new();
        for e in entries {
            // Duplicate increments accumulate, matching generator semantics.
            let prev = field.rate(e.dx, e.dy);
            field.insert(e.dx, e.dy, prev + e.rate);
        }
        field
    }
}

impl From<IncrementRateField> for Vec<RateEntry> {
    fn from(field: IncrementRateField) -> Self {
        field
            .iter()
            .map(|(dx, dy, rate)| RateEntry { dx, dy, rate })
            .collect()
    }
}

// ===========================================================================
// Phase switching
// ===========================================================================

/// One probability atom of a switch-jump distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpEntry {
    /// Nonnegative increment of the first coordinate at the switch.
    pub dx: i32,
    /// Nonnegative increment of the second coordinate at the switch.
    pub dy: i32,
    /// Probability of this increment (entries sum to 1).
    pub p: f64,
}

/// Finite distribution of the level jump performed at a phase switch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JumpDistribution {
    pub entries: Vec<JumpEntry>,
}

impl JumpDistribution {
    /// Point mass at `(0, 0)`: the switch moves the phase only.
    #[must_use]
    pub fn none() -> Self {
        Self {
            entries: vec![JumpEntry {
                dx: 0,
                dy: 0,
                p: 1.0,
            }],
        }
    }

    /// Probability generating function `A(x, y) = sum p * x^dx * y^dy`.
    #[must_use]
    pub fn pgf(&self, x: C64, y: C64) -> C64 {
        self.entries
            .iter()
            .map(|e| x.powi(e.dx) * y.powi(e.dy) * e.p)
            .sum()
    }

    /// Total probability mass (1 for a valid distribution).
    #[must_use]
    pub fn total_mass(&self) -> f64 {
        self.entries.iter().map(|e| e.p).sum()
    }

    /// True when the entries, after accumulating duplicates, agree within
    /// [`RATE_IDENTITY_TOL`].
    #[must_use]
    pub fn approx_eq(&self, other: &Self) -> bool {
        let collect = |d: &Self| {
            let mut m: BTreeMap<(i32, i32), f64> = BTreeMap::new();
            for e in &d.entries {
                *m.entry((e.dx, e.dy)).or_insert(0.0) += e.p;
            }
            m
        };
        let (a, b) = (collect(self), collect(other));
        let keys: std::collections::BTreeSet<_> = a.keys().chain(b.keys()).copied().collect();
        keys.into_iter().all(|k| {
            rate_eq(
                a.get(&k).copied().unwrap_or(0.0),
                b.get(&k).copied().unwrap_or(0.0),
            )
        })
    }
}

/// Serialised form of one switch-jump distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct JumpSpec {
    from: usize,
    to: usize,
    dist: Vec<JumpEntry>,
}

/// Phase-switching structure: rates `theta[j][j']` and the jump distribution
/// attached to each ordered phase pair.
///
/// # Invariants
///
/// * `theta` is a square `(N + 1) x (N + 1)` matrix with zero diagonal and
///   nonnegative entries.
/// * Every pair with `theta[j][j'] > 0` owns a jump distribution whose
///   probabilities are nonnegative and sum to 1; pairs without an explicit
///   distribution default to the point mass at `(0, 0)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "PhaseSwitchSerde", into = "PhaseSwitchSerde")]
pub struct PhaseSwitch {
    theta: Vec<Vec<f64>>,
    jumps: BTreeMap<(usize, usize), JumpDistribution>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PhaseSwitchSerde {
    theta: Vec<Vec<f64>>,
    #[serde(default)]
    jumps: Vec<JumpSpec>,
}

impl From<PhaseSwitchSerde> for PhaseSwitch {
    fn from(s: PhaseSwitchSerde) -> Self {
        let jumps = s
            .jumps
            .into_iter()
            .map(|j| {
                (
                    (j.from, j.to),
                    JumpDistribution { entries: j.dist },
                )
            })
            .collect();
        Self {
            theta: s.theta,
            jumps,
        }
    }
}

impl From<PhaseSwitch> for PhaseSwitchSerde {
    fn from(p: PhaseSwitch) -> Self {
        Self {
            theta: p.theta,
            jumps: p
                .jumps
                .into_iter()
                .map(|((from, to), d)| JumpSpec {
                    from,
                    to,
                    dist: d.entries,
                })
                .collect(),
        }
    }
}

impl PhaseSwitch {
    /// Switching structure on `n + 1` phases with all rates zero.
    #[must_use]
    pub fn all_zero(n_phases_total: usize) -> Self {
        Self {
            theta: vec![vec![0.0; n_phases_total]; n_phases_total],
            jumps: BTreeMap::new(),
        }
    }

    /// Star-shaped switching: phase 0 moves to phase `k` at rate `gamma[k-1]`
    /// and phase `k` returns at rate `tau[k-1]`, with no level jumps.
    ///
    /// # Panics
    ///
    /// Panics when `gamma` and `tau` differ in length.
    #[must_use]
    pub fn star(gamma: &[f64], tau: &[f64]) -> Self {
        assert_eq!(
            gamma.len(),
            tau.len(),
            "star switching needs one return rate per departure rate"
        );
        let total = gamma.len() + 1;
        let mut theta = vec![vec![0.0; total]; total];
        for (k, (&g, &t)) in gamma.iter().zip(tau).enumerate() {
            theta[0][k + 1] = g;
            theta[k + 1][0] = t;
        }
        Self {
            theta,
            jumps: BTreeMap::new(),
        }
    }

    /// Switching rate from phase `j` to phase `j2`.
    #[must_use]
    pub fn theta(&self, j: usize, j2: usize) -> f64 {
        self.theta[j][j2]
    }

    /// Total switching rate out of phase `j`.
    #[must_use]
    pub fn theta_out(&self, j: usize) -> f64 {
        self.theta[j]
            .iter()
            .enumerate()
            .filter(|&(m, _)| m != j)
            .map(|(_, &t)| t)
            .sum()
    }

    /// Jump distribution for the switch `j -> j2` (point mass at `(0, 0)`
    /// when none was specified).
    #[must_use]
    pub fn jump(&self, j: usize, j2: usize) -> JumpDistribution {
        self.jumps
            .get(&(j, j2))
            .cloned()
            .unwrap_or_else(JumpDistribution::none)
    }

    /// Sets the jump distribution for the switch `j -> j2`.
    pub fn set_jump(&mut self, j: usize, j2: usize, dist: JumpDistribution) {
        self.jumps.insert((j, j2), dist);
    }

    /// Sets the switching rate from phase `j` to phase `j2`, for structures
    /// beyond the star shape (e.g. direct moves between alternative phases).
    ///
    /// # Panics
    ///
    /// Panics when `j == j2`: self-switches are not representable.
    pub fn set_theta(&mut self, j: usize, j2: usize, rate: f64) {
        assert_ne!(j, j2, "self-switches are not representable");
        self.theta[j][j2] = rate;
    }

    /// Number of phases (`N + 1`).
    #[must_use]
    pub fn phase_count(&self) -> usize {
        self.theta.len()
    }

    pub(crate) fn explicit_jumps(&self) -> impl Iterator<Item = (usize, usize, &JumpDistribution)> {
        self.jumps.iter().map(|(&(j, j2), d)| (j, j2, d))
    }
}

// ===========================================================================
// Model specification
// ===========================================================================

/// Complete description of one modulated, boundary-coupled walk.
///
/// See the [module documentation](self) for the meaning of each field and the
/// identities connecting them.  The JSON serialisation uses the key
/// `n_phases` for [`n`](Self::n).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Number of degraded modes `N`; the phase set is `{0, .., N}`.
    #[serde(rename = "n_phases")]
    pub n: usize,
    /// Sharing parameter in `[0, 1]`: fraction of the first coordinate's
    /// service capacity retained while the second coordinate is busy.
    pub w: f64,
    /// Phase-0 rates with both coordinates positive.
    pub interior: IncrementRateField,
    /// Rates of each degraded mode `k = 1..=N` (nonnegative increments,
    /// used at every lattice position).
    pub interior_phase: Vec<IncrementRateField>,
    /// Phase-0 rates on the horizontal boundary (`x2 = 0`).
    pub boundary_x: IncrementRateField,
    /// Phase-0 rates on the vertical boundary (`x1 = 0`).
    pub boundary_y: IncrementRateField,
    /// Phase-0 rates at the origin.
    pub corner: IncrementRateField,
    /// Phase-switching rates and jumps.
    pub switch: PhaseSwitch,
}

impl ModelSpec {
    /// Total number of phases, `N + 1`.
    #[must_use]
    pub fn phase_count(&self) -> usize {
        self.n + 1
    }

    /// Rate field of phase `k` away from all boundaries (`k = 0` gives the
    /// interior field).
    ///
    /// # Panics
    ///
    /// Panics when `k > N`.
    #[must_use]
    pub fn phase_field(&self, k: usize) -> &IncrementRateField {
        if k == 0 {
            &self.interior
        } else {
            &self.interior_phase[k - 1]
        }
    }

    /// The same model with the sharing parameter replaced by `w`: the
    /// interior coupled drop rates are rebuilt from the boundary families as
    /// `w * q1` / `(1 - w) * q2` (valid specifications satisfy exactly that
    /// coupling for their own `w`, so this swaps one admissible sharing
    /// split for another without touching anything else).
    #[must_use]
    pub(crate) fn with_sharing(&self, w: f64) -> Self {
        let mut interior = self.interior.clone();
        for (j, rate) in self.boundary_x.x_decrements() {
            interior = interior.with(-1, j, w * rate);
        }
        for (i, rate) in self.boundary_y.y_decrements() {
            interior = interior.with(i, -1, (1.0 - w) * rate);
        }
        Self {
            w,
            interior,
            ..self.clone()
        }
    }

    /// The specification with the two coordinates exchanged everywhere and
    /// the sharing parameter replaced by `1 - w`.
    ///
    /// Exchanging coordinates maps a valid model to a valid model: boundary
    /// roles swap, and the coupling identities hold with `w' = 1 - w`.
    #[must_use]
    pub fn coordinate_swapped(&self) -> Self {
        let mut switch = self.switch.clone();
        let pairs: Vec<(usize, usize, JumpDistribution)> = self
            .switch
            .explicit_jumps()
            .map(|(j, j2, d)| {
                let entries = d
                    .entries
                    .iter()
                    .map(|e| JumpEntry {
                        dx: e.dy,
                        dy: e.dx,
                        p: e.p,
                    })
                    .collect();
                (j, j2, JumpDistribution { entries })
            })
            .collect();
        for (j, j2, d) in pairs {
            switch.set_jump(j, j2, d);
        }
        Self {
            n: self.n,
            w: 1.0 - self.w,
            interior: self.interior.transposed(),
            interior_phase: self
                .interior_phase
                .iter()
                .map(IncrementRateField::transposed)
                .collect(),
            boundary_x: self.boundary_y.transposed(),
            boundary_y: self.boundary_x.transposed(),
            corner: self.corner.transposed(),
            switch,
        }
    }
}

// ===========================================================================
// Validation
// ===========================================================================

/// Identifies which structural rule a [`Violation`] breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[non_exhaustive]
pub enum ValidationRule {
    /// A rate, probability, or parameter is negative, NaN, or infinite.
    FiniteNonnegative,
    /// The sharing parameter lies outside `[0, 1]`.
    SharingParameterRange,
    /// A field stores a zero increment `(0, 0)` (a self-loop).
    SelfLoopIncrement,
    /// An increment leaves the region its field is responsible for
    /// (e.g. a double decrement in the interior, or any decrement at the
    /// origin).
    IncrementOutOfRegion,
    /// A phase-0 field disagrees with the interior on a nonnegative
    /// increment.
    BoundaryAgreement,
    /// An interior decrement rate is not the boundary service rate scaled
    /// by `w` (vertical) or `1 - w` (horizontal).
    CouplingIdentity,
    /// Array sizes disagree with the declared number of phases.
    DimensionMismatch,
    /// A switch-jump distribution has negative mass, does not sum to 1, or
    /// contains a negative increment.
    JumpDistribution,
    /// The switching matrix has a nonzero diagonal entry.
    SelfSwitch,
}

impl fmt::Display for ValidationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Self::FiniteNonnegative => "finite-nonnegative",
            Self::SharingParameterRange => "sharing-parameter-range",
            Self::SelfLoopIncrement => "self-loop-increment",
            Self::IncrementOutOfRegion => "increment-out-of-region",
            Self::BoundaryAgreement => "boundary-agreement",
            Self::CouplingIdentity => "coupling-identity",
            Self::DimensionMismatch => "dimension-mismatch",
            Self::JumpDistribution => "jump-distribution",
            Self::SelfSwitch => "self-switch",
        };
        f.write_str(name)
    }
}

/// One violated structural condition, with the offending location.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub rule: ValidationRule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.rule, self.detail)
    }
}

/// Outcome of [`validate_model`]: the complete list of violated conditions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    /// True when no condition is violated.
    #[must_use]
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, rule: ValidationRule, detail: String) {
        self.violations.push(Violation { rule, detail });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            writeln!(f, "model valid")
        } else {
            for v in &self.violations {
                writeln!(f, "{v}")?;
            }
            Ok(())
        }
    }
}

/// Errors produced by model construction and downstream preconditions.
#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    /// The specification violates at least one structural condition.
    #[error("invalid model: {} violation(s): {}", .0.len(), format_violations(.0))]
    InvalidModel(Vec<Violation>),
    /// Network parameters are unusable before a spec can even be built.
    #[error("invalid network parameters: {0}")]
    InvalidNetwork(String),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// Checks every structural condition of `spec` and reports all violations.
///
/// The conditions are: finite nonnegative rates and probabilities; sharing
/// parameter in `[0, 1]`; no self-loop increments; region-compatible
/// increment supports; boundary agreement and coupling identities (within
/// [`RATE_IDENTITY_TOL`]); consistent array dimensions; zero-diagonal
/// switching matrix; and normalised, nonnegative jump distributions for
/// every active switch.
#[must_use]
pub fn validate_model(spec: &ModelSpec) -> ValidationReport {
    let mut report = ValidationReport::default();
    let total = spec.phase_count();

    if !spec.w.is_finite() || !(0.0..=1.0).contains(&spec.w) {
        report.push(
            ValidationRule::SharingParameterRange,
            format!("w = {} is not in [0, 1]", spec.w),
        );
    }

    if spec.interior_phase.len() != spec.n {
        report.push(
            ValidationRule::DimensionMismatch,
            format!(
                "interior_phase has {} fields but n_phases = {}",
                spec.interior_phase.len(),
                spec.n
            ),
        );
    }
    if spec.switch.phase_count() != total
        || spec.switch.theta.iter().any(|row| row.len() != total)
    {
        report.push(
            ValidationRule::DimensionMismatch,
            format!(
                "switching matrix is not {total} x {total} (phases 0..={})",
                spec.n
            ),
        );
        // Switch-dependent checks below index into theta; stop here.
        return report;
    }

    /// Which increments a rate field may carry.
    #[derive(Clone, Copy)]
    enum Region {
        Interior,
        BoundaryX,
        BoundaryY,
        Nonnegative,
    }
    impl Region {
        fn allows(self, dx: i32, dy: i32) -> bool {
            match self {
                Self::Interior => dx >= -1 && dy >= -1 && !(dx == -1 && dy == -1),
                Self::BoundaryX => dx >= -1 && dy >= 0,
                Self::BoundaryY => dx >= 0 && dy >= -1,
                Self::Nonnegative => dx >= 0 && dy >= 0,
            }
        }
    }

    let mut fields: Vec<(String, &IncrementRateField, Region)> = vec![
        ("interior".into(), &spec.interior, Region::Interior),
        ("boundary_x".into(), &spec.boundary_x, Region::BoundaryX),
        ("boundary_y".into(), &spec.boundary_y, Region::BoundaryY),
        ("corner".into(), &spec.corner, Region::Nonnegative),
    ];
    for (k, f) in spec.interior_phase.iter().enumerate() {
        fields.push((format!("interior_phase[{k}]"), f, Region::Nonnegative));
    }

    for (label, field, region) in &fields {
        for (dx, dy, r) in field.iter() {
            if !r.is_finite() || r < 0.0 {
                report.push(
                    ValidationRule::FiniteNonnegative,
                    format!("{label} rate at ({dx}, {dy}) is {r}"),
                );
            }
            if dx == 0 && dy == 0 {
                report.push(
                    ValidationRule::SelfLoopIncrement,
                    format!("{label} stores a (0, 0) increment"),
                );
            }
            if !region.allows(dx, dy) {
                report.push(
                    ValidationRule::IncrementOutOfRegion,
                    format!("{label} increment ({dx}, {dy}) leaves its region"),
                );
            }
        }
    }

    // Boundary agreement: all phase-0 fields coincide on nonnegative
    // increments.
    for (name, field) in [
        ("boundary_x", &spec.boundary_x),
        ("boundary_y", &spec.boundary_y),
        ("corner", &spec.corner),
    ] {
        let keys: std::collections::BTreeSet<(i32, i32)> = field
            .nonneg()
            .map(|(dx, dy, _)| (dx, dy))
            .chain(spec.interior.nonneg().map(|(dx, dy, _)| (dx, dy)))
            .collect();
        for (dx, dy) in keys {
            let (a, b) = (field.rate(dx, dy), spec.interior.rate(dx, dy));
            if !rate_eq(a, b) {
                report.push(
                    ValidationRule::BoundaryAgreement,
                    format!(
                        "{name} rate {a} at ({dx}, {dy}) differs from interior rate {b}"
                    ),
                );
            }
        }
    }

    // Coupling identities between interior decrements and boundary services.
    if spec.w.is_finite() {
        let keys_x: std::collections::BTreeSet<i32> = spec
            .interior
            .x_decrements()
            .map(|(j, _)| j)
            .chain(spec.boundary_x.x_decrements().map(|(j, _)| j))
            .collect();
        for j in keys_x {
            let (lhs, rhs) = (
                spec.interior.rate(-1, j),
                spec.w * spec.boundary_x.rate(-1, j),
            );
            if !rate_eq(lhs, rhs) {
                report.push(
                    ValidationRule::CouplingIdentity,
                    format!(
                        "interior rate {lhs} at (-1, {j}) is not w * boundary_x rate = {rhs}"
                    ),
                );
            }
        }
        let keys_y: std::collections::BTreeSet<i32> = spec
            .interior
            .y_decrements()
            .map(|(i, _)| i)
            .chain(spec.boundary_y.y_decrements().map(|(i, _)| i))
            .collect();
        for i in keys_y {
            let (lhs, rhs) = (
                spec.interior.rate(i, -1),
                (1.0 - spec.w) * spec.boundary_y.rate(i, -1),
            );
            if !rate_eq(lhs, rhs) {
                report.push(
                    ValidationRule::CouplingIdentity,
                    format!(
                        "interior rate {lhs} at ({i}, -1) is not (1 - w) * boundary_y rate = {rhs}"
                    ),
                );
            }
        }
    }

    // Switching structure.
    for j in 0..total {
        for j2 in 0..total {
            let t = spec.switch.theta(j, j2);
            if !t.is_finite() || t < 0.0 {
                report.push(
                    ValidationRule::FiniteNonnegative,
                    format!("switching rate theta[{j}][{j2}] is {t}"),
                );
            }
            if j == j2 && t != 0.0 {
                report.push(
                    ValidationRule::SelfSwitch,
                    format!("theta[{j}][{j}] = {t} must be 0"),
                );
            }
            if j != j2 && t > 0.0 {
                let dist = spec.switch.jump(j, j2);
                check_jump_dist(&mut report, j, j2, &dist);
            }
        }
    }
    for (j, j2, dist) in spec.switch.explicit_jumps() {
        if j >= total || j2 >= total {
            report.push(
                ValidationRule::DimensionMismatch,
                format!("jump distribution for switch {j} -> {j2} references a missing phase"),
            );
        } else if spec.switch.theta(j, j2) == 0.0 {
            // Harmless but checked for well-formedness anyway.
            check_jump_dist(&mut report, j, j2, dist);
        }
    }

    report
}

fn check_jump_dist(report: &mut ValidationReport, j: usize, j2: usize, dist: &JumpDistribution) {
    let mut mass = 0.0;
    for e in &dist.entries {
        if !e.p.is_finite() || e.p < 0.0 {
            report.push(
                ValidationRule::JumpDistribution,
                format!("switch {j} -> {j2}: probability {} at ({}, {})", e.p, e.dx, e.dy),
            );
            return;
        }
        if e.dx < 0 || e.dy < 0 {
            report.push(
                ValidationRule::JumpDistribution,
                format!(
                    "switch {j} -> {j2}: negative increment ({}, {})",
                    e.dx, e.dy
                ),
            );
            return;
        }
        mass += e.p;
    }
    if !rate_eq(mass, 1.0) {
        report.push(
            ValidationRule::JumpDistribution,
            format!("switch {j} -> {j2}: probabilities sum to {mass}, not 1"),
        );
    }
}

/// Validates `spec`, returning it on success and the violation list as a
/// [`ModelError::InvalidModel`] otherwise.  Convenience for entry points
/// whose precondition is a valid spec.
pub fn require_valid(spec: &ModelSpec) -> Result<(), ModelError> {
    let report = validate_model(spec);
    if report.is_valid() {
        Ok(())
    } else {
        Err(ModelError::InvalidModel(report.violations))
    }
}

// ===========================================================================
// Two-queue network builder
// ===========================================================================

/// Parameters of a two-queue network with a repairable service station.
///
/// Two queues are served by one station that alternates between the
/// operational mode (phase 0) and `N` degraded modes.  In the operational
/// mode queue `i` completes work at rate `nu_i` when it is the only busy
/// queue; when both queues are busy, queue 1 receives the fraction `w` of
/// its capacity and queue 2 the fraction `1 - w`.  A job leaving queue 1
/// re-enters queue 2 with probability `r12` (and symmetrically `r21`),
/// otherwise it departs.  External arrivals to queue `i` occur at rate
/// `lambda_i[k]` while the station is in mode `k`; degraded modes perform no
/// service.  Mode `k` is entered from the operational mode at rate
/// `gamma[k - 1]` and repaired at rate `tau[k - 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    /// Arrival rates to queue 1 per mode, `lambda1[k]` for `k = 0..=N`.
    pub lambda1: Vec<f64>,
    /// Arrival rates to queue 2 per mode.
    pub lambda2: Vec<f64>,
    /// Full service rate of queue 1.
    pub nu1: f64,
    /// Full service rate of queue 2.
    pub nu2: f64,
    /// Probability that a queue-1 departure joins queue 2.
    pub r12: f64,
    /// Probability that a queue-2 departure joins queue 1.
    pub r21: f64,
    /// Breakdown rates into each degraded mode, length `N`.
    pub gamma: Vec<f64>,
    /// Repair rates out of each degraded mode, length `N`.
    pub tau: Vec<f64>,
    /// Capacity share of queue 1 when both queues are busy.
    pub w: f64,
}

impl NetworkParams {
    /// Number of degraded modes `N`.
    #[must_use]
    pub fn n_modes(&self) -> usize {
        self.gamma.len()
    }

    /// Structural validation shared by the builder and the closed-form
    /// stability check; rejects negative data, zero service or repair rates,
    /// mismatched lengths, and a routing loop with `r12 * r21 >= 1`.
    pub(crate) fn check(&self) -> Result<(), ModelError> {
        let err = |msg: String| Err(ModelError::InvalidNetwork(msg));
        let n = self.gamma.len();
        if self.tau.len() != n {
            return err(format!(
                "gamma has {} entries but tau has {}",
                n,
                self.tau.len()
            ));
        }
        if self.lambda1.len() != n + 1 || self.lambda2.len() != n + 1 {
            return err(format!(
                "arrival rate vectors must have {} entries (one per mode)",
                n + 1
            ));
        }
        let nonneg = |name: &str, v: f64| -> Result<(), ModelError> {
            if !v.is_finite() || v < 0.0 {
                Err(ModelError::InvalidNetwork(format!("{name} = {v} must be finite and >= 0")))
            } else {
                Ok(())
            }
        };
        for (i, &l) in self.lambda1.iter().enumerate() {
            nonneg(&format!("lambda1[{i}]"), l)?;
        }
        for (i, &l) in self.lambda2.iter().enumerate() {
            nonneg(&format!("lambda2[{i}]"), l)?;
        }
        for (i, &g) in self.gamma.iter().enumerate() {
            nonneg(&format!("gamma[{i}]"), g)?;
        }
        for (i, &t) in self.tau.iter().enumerate() {
            nonneg(&format!("tau[{i}]"), t)?;
            if t == 0.0 {
                return err(format!("tau[{i}] = 0: a degraded mode must be repairable"));
            }
        }
        nonneg("nu1", self.nu1)?;
        nonneg("nu2", self.nu2)?;
        if self.nu1 == 0.0 || self.nu2 == 0.0 {
            return err("service rates nu1, nu2 must be positive".to_string());
        }
        for (name, r) in [("r12", self.r12), ("r21", self.r21)] {
            if !r.is_finite() || !(0.0..=1.0).contains(&r) {
                return err(format!("{name} = {r} must lie in [0, 1]"));
            }
        }
        if self.r12 * self.r21 >= 1.0 {
            return err(format!(
                "feedback loop r12 * r21 = {} must be < 1",
                self.r12 * self.r21
            ));
        }
        if !self.w.is_finite() || !(0.0..=1.0).contains(&self.w) {
            return err(format!("w = {} must lie in [0, 1]", self.w));
        }
        Ok(())
    }
}

/// Builds the walk specification of the two-queue network described by `p`.
///
/// Queue lengths are the two coordinates and the station mode is the phase.
/// Service completions at rate `nu_i` split into a departure and a transfer
/// to the other queue according to the routing probabilities; interior
/// decrements carry the capacity shares `w` and `1 - w`, boundary fields the
/// full rates.  Degraded modes only receive arrivals, and the switching
/// structure is the star with rates `gamma` / `tau` and no level jumps.
///
/// # Errors
///
/// [`ModelError::InvalidNetwork`] when `p` is inconsistent (negative rates,
/// routing probabilities outside `[0, 1]`, `r12 * r21 >= 1`, zero service or
/// repair rates, mismatched lengths).
pub fn build_network_model(p: &NetworkParams) -> Result<ModelSpec, ModelError> {
    p.check()?;
    let n = p.n_modes();

    let arrivals = |k: usize| {
        IncrementRateField::new()
            .with(1, 0, p.lambda1[k])
            .with(0, 1, p.lambda2[k])
    };

    // Full-rate service entries for each queue.
    let serve1_depart = p.nu1 * (1.0 - p.r12);
    let serve1_transfer = p.nu1 * p.r12;
    let serve2_depart = p.nu2 * (1.0 - p.r21);
    let serve2_transfer = p.nu2 * p.r21;

    let interior = arrivals(0)
        .with(-1, 0, p.w * serve1_depart)
        .with(-1, 1, p.w * serve1_transfer)
        .with(0, -1, (1.0 - p.w) * serve2_depart)
        .with(1, -1, (1.0 - p.w) * serve2_transfer);
    let boundary_x = arrivals(0)
        .with(-1, 0, serve1_depart)
        .with(-1, 1, serve1_transfer);
    let boundary_y = arrivals(0)
        .with(0, -1, serve2_depart)
        .with(1, -1, serve2_transfer);
    let corner = arrivals(0);
    let interior_phase = (1..=n).map(arrivals).collect();

    let spec = ModelSpec {
        n,
        w: p.w,
        interior,
        interior_phase,
        boundary_x,
        boundary_y,
        corner,
        switch: PhaseSwitch::star(&p.gamma, &p.tau),
    };
    debug_assert!(
        validate_model(&spec).is_valid(),
        "network builder must produce a valid spec"
    );
    Ok(spec)
}

// ===========================================================================
// Symmetry detection
// ===========================================================================

/// True when `spec` is exchangeable in the sense required by the closed-form
/// moment route: the phase-0 fields are invariant under exchanging the two
/// coordinates, every breakdown happens at a common rate with a common jump
/// distribution, and capacity is shared evenly (`w = 1/2`).
///
/// Degraded-mode arrival fields and repair rates are *not* constrained:
/// the closed-form route only needs the exchangeability of the phase-0
/// dynamics.  Comparisons use [`RATE_IDENTITY_TOL`].
#[must_use]
pub fn is_symmetric(spec: &ModelSpec) -> bool {
    if !rate_eq(spec.w, 0.5) {
        return false;
    }
    if !spec.interior.approx_eq(&spec.interior.transposed()) {
        return false;
    }
    if !spec.boundary_x.approx_eq(&spec.boundary_y.transposed()) {
        return false;
    }
    if !spec.corner.approx_eq(&spec.corner.transposed()) {
        return false;
    }
    if spec.n > 0 {
        let theta0 = spec.switch.theta(0, 1);
        let jump0 = spec.switch.jump(0, 1);
        for k in 1..=spec.n {
            if !rate_eq(spec.switch.theta(0, k), theta0) {
                return false;
            }
            if !spec.switch.jump(0, k).approx_eq(&jump0) {
                return false;
            }
        }
    }
    true
}

// ===========================================================================
// Tests
// ===========================================================================

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Two-mode network used across the test suite: moderate load, asymmetric
    /// degraded-mode arrivals.
    pub(crate) fn two_mode_params() -> NetworkParams {
        NetworkParams {
            lambda1: vec![1.0, 0.5, 0.1],
            lambda2: vec![0.8, 0.6, 0.2],
            nu1: 5.0,
            nu2: 6.0,
            r12: 0.3,
            r21: 0.2,
            gamma: vec![0.5, 0.8],
            tau: vec![5.0, 8.0],
            w: 0.3,
        }
    }

    fn symmetric_params(lambda: f64, gamma: f64) -> NetworkParams {
        NetworkParams {
            lambda1: vec![lambda, 0.5, 0.1],
            lambda2: vec![lambda, 0.6, 0.2],
            nu1: 6.0,
            nu2: 6.0,
            r12: 0.3,
            r21: 0.3,
            gamma: vec![gamma, gamma],
            tau: vec![5.0, 8.0],
            w: 0.5,
        }
    }

    #[test]
    fn builder_produces_valid_spec() {
        let spec = build_network_model(&two_mode_params()).unwrap();
        let report = validate_model(&spec);
        assert!(report.is_valid(), "unexpected violations: {report}");
        assert_eq!(spec.phase_count(), 3);
    }

    #[test]
    fn builder_maps_rates_with_capacity_shares_and_routing() {
        use approx::assert_relative_eq;
        let p = two_mode_params();
        let spec = build_network_model(&p).unwrap();
        let tol = 1e-14;
        // Interior services carry the shares; transfers follow the routing.
        assert_relative_eq!(spec.interior.rate(-1, 0), 0.3 * 5.0 * 0.7, max_relative = tol);
        assert_relative_eq!(spec.interior.rate(-1, 1), 0.3 * 5.0 * 0.3, max_relative = tol);
        assert_relative_eq!(spec.interior.rate(0, -1), 0.7 * 6.0 * 0.8, max_relative = tol);
        assert_relative_eq!(spec.interior.rate(1, -1), 0.7 * 6.0 * 0.2, max_relative = tol);
        assert_eq!(spec.interior.rate(1, 0), 1.0);
        assert_eq!(spec.interior.rate(0, 1), 0.8);
        // Boundaries serve at full rate.
        assert_relative_eq!(spec.boundary_x.rate(-1, 0), 5.0 * 0.7, max_relative = tol);
        assert_relative_eq!(spec.boundary_y.rate(1, -1), 6.0 * 0.2, max_relative = tol);
        // The origin only sees arrivals.
        assert!(spec.corner.x_decrements().count() == 0);
        assert!(spec.corner.y_decrements().count() == 0);
        // Degraded modes: arrivals only, star switching.
        assert_eq!(spec.interior_phase[1].rate(1, 0), 0.1);
        assert_eq!(spec.switch.theta(0, 2), 0.8);
        assert_eq!(spec.switch.theta(2, 0), 8.0);
        assert_eq!(spec.switch.theta(1, 2), 0.0);
    }

    #[test]
    fn validation_flags_broken_coupling() {
        let mut spec = build_network_model(&two_mode_params()).unwrap();
        spec.interior.insert(-1, 0, 99.0);
        let report = validate_model(&spec);
        assert!(report
            .violations
            .iter()
            .any(|v| v.rule == ValidationRule::CouplingIdentity));
    }

    #[test]
    fn validation_flags_boundary_disagreement() {
        let mut spec = build_network_model(&two_mode_params()).unwrap();
        spec.corner.insert(1, 0, 2.5);
        let report = validate_model(&spec);
        assert!(report
            .violations
            .iter()
            .any(|v| v.rule == ValidationRule::BoundaryAgreement));
    }

    #[test]
    fn validation_flags_double_decrement_and_negative_rate() {
        let mut spec = build_network_model(&two_mode_params()).unwrap();
        spec.interior.insert(-1, -1, 1.0);
        spec.boundary_x.insert(1, 0, -1.0);
        let rules: Vec<ValidationRule> = validate_model(&spec)
            .violations
            .iter()
            .map(|v| v.rule)
            .collect();
        assert!(rules.contains(&ValidationRule::IncrementOutOfRegion));
        assert!(rules.contains(&ValidationRule::FiniteNonnegative));
    }

    #[test]
    fn validation_flags_bad_jump_distribution_and_self_switch() {
        let mut spec = build_network_model(&two_mode_params()).unwrap();
        spec.switch.set_jump(
            0,
            1,
            JumpDistribution {
                entries: vec![JumpEntry {
                    dx: 1,
                    dy: 0,
                    p: 0.9,
                }],
            },
        );
        spec.switch.theta[1][1] = 2.0;
        let rules: Vec<ValidationRule> = validate_model(&spec)
            .violations
            .iter()
            .map(|v| v.rule)
            .collect();
        assert!(rules.contains(&ValidationRule::JumpDistribution));
        assert!(rules.contains(&ValidationRule::SelfSwitch));
    }

    #[test]
    fn validation_flags_dimension_mismatch() {
        let mut spec = build_network_model(&two_mode_params()).unwrap();
        spec.interior_phase.pop();
        let report = validate_model(&spec);
        assert!(report
            .violations
            .iter()
            .any(|v| v.rule == ValidationRule::DimensionMismatch));
    }

    /// Field-by-field comparison within [`RATE_IDENTITY_TOL`].  JSON float
    /// parsing can be one ulp off, so round-trip tests cannot be bitwise.
    pub(crate) fn specs_approx_eq(a: &ModelSpec, b: &ModelSpec) -> bool {
        a.n == b.n
            && rate_eq(a.w, b.w)
            && a.interior.approx_eq(&b.interior)
            && a.boundary_x.approx_eq(&b.boundary_x)
            && a.boundary_y.approx_eq(&b.boundary_y)
            && a.corner.approx_eq(&b.corner)
            && a.interior_phase.len() == b.interior_phase.len()
            && a.interior_phase
                .iter()
                .zip(&b.interior_phase)
                .all(|(x, y)| x.approx_eq(y))
            && a.switch.theta.len() == b.switch.theta.len()
            && (0..a.phase_count()).all(|j| {
                (0..a.phase_count())
                    .all(|j2| rate_eq(a.switch.theta(j, j2), b.switch.theta(j, j2)))
            })
            && (0..a.phase_count()).all(|j| {
                (0..a.phase_count()).all(|j2| a.switch.jump(j, j2).approx_eq(&b.switch.jump(j, j2)))
            })
    }

    #[test]
    fn json_round_trip_preserves_spec() {
        let spec = build_network_model(&two_mode_params()).unwrap();
        let json = serde_json::to_string_pretty(&spec).unwrap();
        assert!(json.contains("\"n_phases\""));
        assert!(json.contains("\"dx\""));
        let back: ModelSpec = serde_json::from_str(&json).unwrap();
        assert!(specs_approx_eq(&spec, &back), "round trip drifted:\n{json}");
        assert!(validate_model(&back).is_valid());
    }

    #[test]
    fn network_params_json_uses_field_names() {
        let p = two_mode_params();
        let json = serde_json::to_string(&p).unwrap();
        for key in ["lambda1", "nu1", "r12", "gamma", "tau", "w"] {
            assert!(json.contains(&format!("\"{key}\"")), "missing key {key}");
        }
        let back: NetworkParams = serde_json::from_str(&json).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn single_queue_reduction_is_valid_and_w_independent_on_boundary() {
        // No queue-2 arrivals: queue 1 sees a birth-death walk on the
        // horizontal boundary at full service rate.
        let p = NetworkParams {
            lambda1: vec![0.5],
            lambda2: vec![0.0],
            nu1: 1.0,
            nu2: 1.0,
            r12: 0.0,
            r21: 0.0,
            gamma: vec![],
            tau: vec![],
            w: 0.3,
        };
        let spec = build_network_model(&p).unwrap();
        assert!(validate_model(&spec).is_valid());
        assert_eq!(spec.n, 0);
        assert_eq!(spec.boundary_x.rate(-1, 0), 1.0);
        assert_eq!(spec.boundary_x.rate(1, 0), 0.5);
    }

    #[test]
    fn symmetry_detection() {
        let sym = build_network_model(&symmetric_params(0.5, 0.5)).unwrap();
        assert!(
            is_symmetric(&sym),
            "evenly shared symmetric network must be detected"
        );
        let asym = build_network_model(&two_mode_params()).unwrap();
        assert!(!is_symmetric(&asym));
        let mut uneven = symmetric_params(0.5, 0.5);
        uneven.w = 0.4;
        assert!(!is_symmetric(&build_network_model(&uneven).unwrap()));
        let mut lopsided = symmetric_params(0.5, 0.5);
        lopsided.nu2 = 7.0;
        assert!(!is_symmetric(&build_network_model(&lopsided).unwrap()));
    }

    #[test]
    fn coordinate_swap_is_involutive_and_validity_preserving() {
        let spec = build_network_model(&two_mode_params()).unwrap();
        let swapped = spec.coordinate_swapped();
        assert!(
            validate_model(&swapped).is_valid(),
            "swap must preserve validity: {}",
            validate_model(&swapped)
        );
        assert_eq!(swapped.w, 1.0 - spec.w);
        assert_eq!(swapped.boundary_x.rate(-1, 1), spec.boundary_y.rate(1, -1));
        assert!(specs_approx_eq(&spec, &swapped.coordinate_swapped()));
    }

    #[test]
    fn jump_pgf_is_one_at_one_one() {
        let d = JumpDistribution {
            entries: vec![
                JumpEntry { dx: 0, dy: 0, p: 0.25 },
                JumpEntry { dx: 2, dy: 1, p: 0.75 },
            ],
        };
        let one = C64::new(1.0, 0.0);
        assert!((d.pgf(one, one).re - 1.0).abs() < 1e-15);
        let v = d.pgf(C64::new(0.5, 0.0), C64::new(0.5, 0.0));
        assert!((v.re - (0.25 + 0.75 * 0.25 * 0.5)).abs() < 1e-15);
    }

    proptest! {
        /// The builder always yields a spec that passes validation, for any
        /// admissible parameter draw.
        #[test]
        fn builder_output_always_validates(
            l10 in 0.0..3.0f64, l20 in 0.0..3.0f64,
            l11 in 0.0..2.0f64, l21 in 0.0..2.0f64,
            nu1 in 0.1..10.0f64, nu2 in 0.1..10.0f64,
            r12 in 0.0..0.9f64, r21 in 0.0..0.9f64,
            gamma in 0.0..3.0f64, tau in 0.1..10.0f64,
            w in 0.0..=1.0f64,
        ) {
            let p = NetworkParams {
                lambda1: vec![l10, l11],
                lambda2: vec![l20, l21],
                nu1, nu2, r12, r21,
                gamma: vec![gamma],
                tau: vec![tau],
                w,
            };
            let spec = build_network_model(&p).unwrap();
            let report = validate_model(&spec);
            prop_assert!(report.is_valid(), "violations: {report}");
        }

        /// Exchanging coordinates twice returns the original spec.
        #[test]
        fn coordinate_swap_involution(
            w in 0.0..=1.0f64,
            nu1 in 0.5..8.0f64,
            nu2 in 0.5..8.0f64,
            r12 in 0.0..0.9f64,
        ) {
            let p = NetworkParams {
                lambda1: vec![1.0, 0.3],
                lambda2: vec![0.7, 0.4],
                nu1, nu2, r12, r21: 0.2,
                gamma: vec![0.5],
                tau: vec![4.0],
                w,
            };
            let spec = build_network_model(&p).unwrap();
            prop_assert!(specs_approx_eq(&spec, &spec.coordinate_swapped().coordinate_swapped()));
        }
    }
}

