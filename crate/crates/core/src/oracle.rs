//! Independent numerical oracle: truncated-generator solves and stochastic
//! simulation.
//!
//! Nothing in this module uses generating functions, kernels, or series
//! expansions; it works directly with transition rates.  That independence is
//! the point: every analytic route in the crate is validated against these
//! solvers, so they must not share assumptions with them.
//!
//! # Truncation semantics
//!
//! [`build_truncated_ctmc`] restricts the walk to the finite lattice
//! `{0..l1} x {0..l2}`.  Transitions that would leave the lattice are
//! dropped and the diagonal is the negated sum of the *retained* rates, so
//! the truncated generator is a proper conservative generator (the chain
//! simply cannot make the dropped moves).  For a stable walk the dropped
//! mass vanishes geometrically in the truncation level; [`refine_ladder`]
//! doubles the level until the requested metric stops moving, and
//! [`escaping_mass_verdict`] turns the trend of the mass near the artificial
//! boundary into a stability verdict.
//!
//! # Solvers
//!
//! * Direct: when the state count is moderate and every retained transition
//!   changes the first coordinate by at most one, the generator is block
//!   tridiagonal in the first coordinate.  Levels are eliminated back to
//!   front (each level's generator is censored onto its predecessors), the
//!   level-0 stationary vector is a left null vector of the fully censored
//!   block, and the remaining levels are recovered front to back.
//! * Uniformization: otherwise the embedded chain `P = I + Q / L` with
//!   `L = 1.05 * max |diag|` is power-iterated.
//!
//! Both verify `max |pi Q| <= 1e-9` before returning, and both check
//! irreducibility (forward and backward reachability) first.
//!
//! # Simulation
//!
//! [`simulate`] runs the jump chain exactly (exponential holding times,
//! categorical jumps) on the *untruncated* lattice, discards a 10% warm-up,
//! and reports time-averaged coordinate means with batch-means confidence
//! intervals.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::model::{ModelError, ModelSpec};

// ===== Tuning constants =====

/// Largest state count handled by the direct block solver.
pub const DIRECT_STATE_LIMIT: usize = 50_000;
/// Acceptance threshold on the stationary residual `max |pi Q|`.
pub const RESIDUAL_TOL: f64 = 1e-9;
/// Relative L1 change between power-iteration sweeps that counts as
/// converged.
const POWER_REL_TOL: f64 = 1e-12;
/// Hard cap on power-iteration sweeps.
const POWER_SWEEP_CAP: usize = 400_000;
/// First truncation level of the refinement ladder.
const LADDER_START: u32 = 16;
/// Largest truncation level the refinement ladder will try.
pub const LADDER_CAP: u32 = 512;
/// Largest truncation level used when judging stability from escaping mass.
const ESCAPE_LADDER_CAP: u32 = 128;
/// A final boundary-band mass below this is read as "mass is not escaping".
const BOUNDARY_MASS_STABLE: f64 = 1e-4;
/// Number of batches used for batch-means confidence intervals.
const SIM_BATCHES: usize = 40;
/// Fraction of the horizon discarded as warm-up.
const SIM_WARMUP_FRACTION: f64 = 0.1;
/// Minimum number of post-warm-up jumps for a meaningful batch-means CI.
const SIM_MIN_EVENTS: u64 = 1_500;

/// Errors from the oracle route.
#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error(transparent)]
    Model(#[from] ModelError),
    /// The truncated chain is not irreducible.
    #[error("truncated chain is reducible: {0}")]
    ReducibleChain(String),
    /// An iterative solver ran out of iterations or ladder levels.
    #[error("solver did not converge: {0}")]
    NonConvergence(String),
    /// A direct solve produced an unusable result (singular block, large
    /// residual, significantly negative probabilities).
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    /// Refinement was asked for a spec whose analytic verdict is unstable.
    #[error("refinement refused, the model is unstable: {0}")]
    UnstableModel(String),
    /// The simulation horizon cannot support the requested batch structure.
    #[error("simulation horizon too short: {0}")]
    HorizonTooShort(String),
}

// ===========================================================================
// Lattice models
// ===========================================================================

/// One transition out of a lattice state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    /// Increment of the first coordinate.
    pub dx1: i64,
    /// Increment of the second coordinate.
    pub dx2: i64,
    /// Phase after the transition.
    pub phase: usize,
    /// Transition rate (positive).
    pub rate: f64,
}

/// A Markov process on `Z+ x Z+ x {0..N}` described by its per-state
/// transition lists.  Implemented by [`ModelSpec`] and by the retrial-system
/// parameters; everything in this module is generic over it.
pub trait LatticeModel {
    /// Total number of phases.
    fn phase_count(&self) -> usize;

    /// Appends every transition out of `(x1, x2, phase)` to `out`.
    /// Implementations may emit duplicate targets; rates accumulate.
    fn transitions(&self, x1: u64, x2: u64, phase: usize, out: &mut Vec<Transition>);
}

impl LatticeModel for ModelSpec {
    fn phase_count(&self) -> usize {
        self.n + 1
    }

    fn transitions(&self, x1: u64, x2: u64, phase: usize, out: &mut Vec<Transition>) {
        let field = if phase == 0 {
            match (x1 > 0, x2 > 0) {
                (true, true) => &self.interior,
                (true, false) => &self.boundary_x,
                (false, true) => &self.boundary_y,
                (false, false) => &self.corner,
            }
        } else {
            &self.interior_phase[phase - 1]
        };
        for (dx, dy, rate) in field.iter() {
            out.push(Transition {
                dx1: dx.into(),
                dx2: dy.into(),
                phase,
                rate,
            });
        }
        for j2 in 0..self.phase_count() {
            let theta = if j2 == phase {
                continue;
            } else {
                self.switch.theta(phase, j2)
            };
            if theta > 0.0 {
                for e in &self.switch.jump(phase, j2).entries {
                    if e.p > 0.0 {
                        out.push(Transition {
                            dx1: e.dx.into(),
                            dx2: e.dy.into(),
                            phase: j2,
                            rate: theta * e.p,
                        });
                    }
                }
            }
        }
    }
}

// ===========================================================================
// Truncated generator
// ===========================================================================

/// Conservative generator of the walk truncated to `{0..l1} x {0..l2}`,
/// stored row-compressed with the diagonal included.
///
/// State index: `((x1 * (l2 + 1)) + x2) * phases + phase`, so states are
/// grouped by first-coordinate level, which the direct solver exploits.
#[derive(Debug, Clone)]
pub struct TruncatedCtmc {
    pub l1: u32,
    pub l2: u32,
    pub phases: usize,
    row_ptr: Vec<usize>,
    col: Vec<u32>,
    val: Vec<f64>,
    /// Largest `|dx1|` among retained off-diagonal transitions.
    max_dx1: i64,
}

impl TruncatedCtmc {
    /// Total number of states.
    #[must_use]
    pub fn states(&self) -> usize {
        (self.l1 as usize + 1) * (self.l2 as usize + 1) * self.phases
    }

    /// Flat index of `(x1, x2, phase)`.
    #[must_use]
    pub fn index(&self, x1: u32, x2: u32, phase: usize) -> usize {
        ((x1 as usize) * (self.l2 as usize + 1) + x2 as usize) * self.phases + phase
    }

    /// Inverse of [`index`](Self::index).
    #[must_use]
    pub fn coords(&self, state: usize) -> (u32, u32, usize) {
        let phase = state % self.phases;
        let level = state / self.phases;
        let per = self.l2 as usize + 1;
        ((level / per) as u32, (level % per) as u32, phase)
    }

    /// The stored row of state `i`: `(column, rate)` pairs including the
    /// diagonal.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.col[self.row_ptr[i]..self.row_ptr[i + 1]]
            .iter()
            .copied()
            .zip(self.val[self.row_ptr[i]..self.row_ptr[i + 1]].iter().copied())
    }

    /// Largest first-coordinate jump among retained transitions.
    #[must_use]
    pub fn x1_bandwidth(&self) -> i64 {
        self.max_dx1
    }
}

/// Builds the truncated generator of `model` on `{0..l1} x {0..l2}`.
///
/// Out-of-lattice transitions are dropped; each diagonal entry is the
/// negated sum of the retained off-diagonal rates in its row.
#[must_use]
pub fn build_truncated_ctmc<M: LatticeModel>(model: &M, l1: u32, l2: u32) -> TruncatedCtmc {
    let phases = model.phase_count();
    let per_level = (l2 as usize + 1) * phases;
    let states = (l1 as usize + 1) * per_level;

    let mut row_ptr = Vec::with_capacity(states + 1);
    let mut col: Vec<u32> = Vec::new();
    let mut val: Vec<f64> = Vec::new();
    row_ptr.push(0);
    let mut max_dx1: i64 = 0;

    let mut scratch: Vec<Transition> = Vec::with_capacity(16);
    // Accumulates (target, rate) for one source row before compression.
    let mut row_acc: Vec<(u32, f64)> = Vec::with_capacity(16);

    for x1 in 0..=l1 {
        for x2 in 0..=l2 {
            for phase in 0..phases {
                scratch.clear();
                row_acc.clear();
                model.transitions(x1.into(), x2.into(), phase, &mut scratch);
                let mut diag = 0.0;
                for t in &scratch {
                    let nx1 = i64::from(x1) + t.dx1;
                    let nx2 = i64::from(x2) + t.dx2;
                    if nx1 < 0 || nx2 < 0 || nx1 > i64::from(l1) || nx2 > i64::from(l2) {
                        continue; // dropped by the reflecting truncation
                    }
                    let target = ((nx1 as usize) * (l2 as usize + 1) + nx2 as usize) * phases
                        + t.phase;
                    debug_assert!(t.rate > 0.0);
                    diag += t.rate;
                    max_dx1 = max_dx1.max(t.dx1.abs());
                    row_acc.push((target as u32, t.rate));
                }
                let here = ((x1 as usize) * (l2 as usize + 1) + x2 as usize) * phases + phase;
                row_acc.push((here as u32, -diag));
                row_acc.sort_unstable_by_key(|&(c, _)| c);
                // Merge duplicates (several transitions can share a target).
                for &(c, v) in &*row_acc {
                    if let Some(last) = col.last() {
                        if *last == c && col.len() > row_ptr[row_ptr.len() - 1] {
                            *val.last_mut().unwrap() += v;
                            continue;
                        }
                    }
                    col.push(c);
                    val.push(v);
                }
                row_ptr.push(col.len());
            }
        }
    }

    TruncatedCtmc {
        l1,
        l2,
        phases,
        row_ptr,
        col,
        val,
        max_dx1,
    }
}

// ===========================================================================
// Stationary distributions
// ===========================================================================

/// A stationary distribution on a truncated lattice, with the summaries the
/// analytic routes are tested against.
#[derive(Debug, Clone)]
pub struct StationaryDist {
    pub l1: u32,
    pub l2: u32,
    pub phases: usize,
    /// Probability of each state, indexed like [`TruncatedCtmc::index`].
    pub pi: Vec<f64>,
}

impl StationaryDist {
    /// Probability of `(x1, x2, phase)`.
    #[must_use]
    pub fn prob(&self, x1: u32, x2: u32, phase: usize) -> f64 {
        let idx = ((x1 as usize) * (self.l2 as usize + 1) + x2 as usize) * self.phases + phase;
        self.pi[idx]
    }

    fn coords(&self, state: usize) -> (u32, u32, usize) {
        let phase = state % self.phases;
        let level = state / self.phases;
        let per = self.l2 as usize + 1;
        ((level / per) as u32, (level % per) as u32, phase)
    }

    /// Mean of the first coordinate.
    #[must_use]
    pub fn mean_x1(&self) -> f64 {
        self.pi
            .iter()
            .enumerate()
            .map(|(s, &p)| f64::from(self.coords(s).0) * p)
            .sum()
    }

    /// Mean of the second coordinate.
    #[must_use]
    pub fn mean_x2(&self) -> f64 {
        self.pi
            .iter()
            .enumerate()
            .map(|(s, &p)| f64::from(self.coords(s).1) * p)
            .sum()
    }

    /// Probability of each phase.
    #[must_use]
    pub fn phase_occupancy(&self) -> Vec<f64> {
        let mut occ = vec![0.0; self.phases];
        for (s, &p) in self.pi.iter().enumerate() {
            occ[self.coords(s).2] += p;
        }
        occ
    }

    /// Probability of the empty state in the operational phase,
    /// `P(X = (0, 0), J = 0)`.
    #[must_use]
    pub fn origin_prob(&self) -> f64 {
        self.prob(0, 0, 0)
    }

    /// Total mass on the artificial boundary band
    /// (`x1 = l1` or `x2 = l2`).
    #[must_use]
    pub fn boundary_band_mass(&self) -> f64 {
        self.pi
            .iter()
            .enumerate()
            .filter(|&(s, _)| {
                let (x1, x2, _) = self.coords(s);
                x1 == self.l1 || x2 == self.l2
            })
            .map(|(_, &p)| p)
            .sum()
    }
}

/// Which scalar summary of the stationary distribution a refinement targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMetric {
    MeanX1,
    MeanX2,
    /// `P(X = (0, 0), J = 0)`.
    OriginProb,
    /// Probability of one phase.
    PhaseOccupancy(usize),
}

impl OracleMetric {
    /// Extracts the metric from a solved distribution.
    #[must_use]
    pub fn extract(&self, dist: &StationaryDist) -> f64 {
        match *self {
            Self::MeanX1 => dist.mean_x1(),
            Self::MeanX2 => dist.mean_x2(),
            Self::OriginProb => dist.origin_prob(),
            Self::PhaseOccupancy(k) => dist.phase_occupancy()[k],
        }
    }
}

/// Solves `pi Q = 0`, `sum pi = 1` on the truncated lattice.
///
/// Checks irreducibility first, then routes to the direct block solver
/// (state count at most [`DIRECT_STATE_LIMIT`] and first-coordinate
/// bandwidth 1) or uniformization power iteration.  The returned vector is
/// nonnegative, sums to 1, and satisfies `max |pi Q| <=` [`RESIDUAL_TOL`].
///
/// # Errors
///
/// [`OracleError::ReducibleChain`] when some state is unreachable from the
/// origin or cannot reach it; [`OracleError::NonConvergence`] /
/// [`OracleError::NumericalFailure`] when a solver fails its own checks.
pub fn solve_stationary(ctmc: &TruncatedCtmc) -> Result<StationaryDist, OracleError> {
    check_irreducible(ctmc)?;
    let states = ctmc.states();
    let mut pi = if states <= DIRECT_STATE_LIMIT && ctmc.x1_bandwidth() <= 1 {
        direct_solve(ctmc)?
    } else {
        power_solve(ctmc)?
    };

    // Clamp roundoff negatives, renormalise, and verify the residual.
    let min = pi.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -1e-10 {
        return Err(OracleError::NumericalFailure(format!(
            "stationary vector has entry {min}"
        )));
    }
    for p in &mut pi {
        if *p < 0.0 {
            *p = 0.0;
        }
    }
    let total: f64 = pi.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(OracleError::NumericalFailure(format!(
            "stationary vector has total mass {total}"
        )));
    }
    for p in &mut pi {
        *p /= total;
    }
    let residual = residual_inf_norm(ctmc, &pi);
    if residual > RESIDUAL_TOL {
        return Err(OracleError::NumericalFailure(format!(
            "stationary residual {residual:.3e} exceeds {RESIDUAL_TOL:.0e}"
        )));
    }

    Ok(StationaryDist {
        l1: ctmc.l1,
        l2: ctmc.l2,
        phases: ctmc.phases,
        pi,
    })
}

/// `max_j |sum_i pi_i Q_{ij}|`.
fn residual_inf_norm(ctmc: &TruncatedCtmc, pi: &[f64]) -> f64 {
    let mut acc = vec![0.0f64; pi.len()];
    for i in 0..pi.len() {
        if pi[i] == 0.0 {
            continue;
        }
        for (j, v) in ctmc.row(i) {
            acc[j as usize] += pi[i] * v;
        }
    }
    acc.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
}

fn check_irreducible(ctmc: &TruncatedCtmc) -> Result<(), OracleError> {
    let states = ctmc.states();
    // Forward reachability over the stored pattern (positive rates only).
    let mut fwd = vec![false; states];
    let mut queue = VecDeque::from([0usize]);
    fwd[0] = true;
    let mut seen = 1usize;
    while let Some(i) = queue.pop_front() {
        for (j, v) in ctmc.row(i) {
            let j = j as usize;
            if v > 0.0 && !fwd[j] {
                fwd[j] = true;
                seen += 1;
                queue.push_back(j);
            }
        }
    }
    if seen != states {
        let missing = fwd.iter().position(|&r| !r).unwrap();
        let (x1, x2, ph) = ctmc.coords(missing);
        return Err(OracleError::ReducibleChain(format!(
            "state ({x1}, {x2}, phase {ph}) is unreachable from the origin"
        )));
    }
    // Backward reachability via the reversed pattern.
    let mut radj: Vec<Vec<u32>> = vec![Vec::new(); states];
    for i in 0..states {
        for (j, v) in ctmc.row(i) {
            if v > 0.0 && j as usize != i {
                radj[j as usize].push(i as u32);
            }
        }
    }
    let mut bwd = vec![false; states];
    let mut queue = VecDeque::from([0usize]);
    bwd[0] = true;
    seen = 1;
    while let Some(i) = queue.pop_front() {
        for &j in &radj[i] {
            let j = j as usize;
            if !bwd[j] {
                bwd[j] = true;
                seen += 1;
                queue.push_back(j);
            }
        }
    }
    if seen != states {
        let missing = bwd.iter().position(|&r| !r).unwrap();
        let (x1, x2, ph) = ctmc.coords(missing);
        return Err(OracleError::ReducibleChain(format!(
            "state ({x1}, {x2}, phase {ph}) cannot reach the origin"
        )));
    }
    Ok(())
}

// ===== Direct block solver =====

/// Censored-level elimination for generators that are block tridiagonal in
/// the first coordinate.
fn direct_solve(ctmc: &TruncatedCtmc) -> Result<Vec<f64>, OracleError> {
    use nalgebra::DMatrix;

    let per_level = (ctmc.l2 as usize + 1) * ctmc.phases;
    let levels = ctmc.l1 as usize + 1;

    // Extract the three block diagonals: within-level (dense), up (sparse
    // triplets, level l -> l + 1), down (sparse triplets, level l -> l - 1).
    let mut a: Vec<DMatrix<f64>> = (0..levels)
        .map(|_| DMatrix::zeros(per_level, per_level))
        .collect();
    let mut up: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); levels];
    let mut down: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); levels];
    for i in 0..ctmc.states() {
        let li = i / per_level;
        let ri = i % per_level;
        for (j, v) in ctmc.row(i) {
            let j = j as usize;
            let lj = j / per_level;
            let rj = j % per_level;
            match lj as i64 - li as i64 {
                0 => a[li][(ri, rj)] += v,
                1 => up[li].push((ri, rj, v)),
                -1 => down[li].push((ri, rj, v)),
                _ => {
                    return Err(OracleError::NumericalFailure(
                        "direct solver requires first-coordinate bandwidth 1".into(),
                    ))
                }
            }
        }
    }

    // Backward censoring sweep.  `inv[l]` is (-censored A_l)^{-1} for l >= 1.
    let mut inv: Vec<Option<DMatrix<f64>>> = vec![None; levels];
    let mut censored = a[levels - 1].clone();
    for l in (0..levels - 1).rev() {
        let m = (-&censored).try_inverse().ok_or_else(|| {
            OracleError::NumericalFailure(format!("singular censored block at level {}", l + 1))
        })?;
        // m_c = m * down[l + 1] (columns touched by the sparse down block).
        let mut m_down: DMatrix<f64> = DMatrix::zeros(per_level, per_level);
        for &(r, c, v) in &down[l + 1] {
            for i in 0..per_level {
                m_down[(i, c)] += m[(i, r)] * v;
            }
        }
        // censored_l = a_l + up[l] * m_down.
        censored = a[l].clone();
        for &(r, c, v) in &up[l] {
            for jcol in 0..per_level {
                censored[(r, jcol)] += v * m_down[(c, jcol)];
            }
        }
        inv[l + 1] = Some(m);
    }

    // Left null vector of the fully censored level-0 block.
    let pi0 = left_null_vector(&censored)?;

    // Forward propagation: pi_{l+1} = pi_l * up[l] * inv[l+1].
    let mut pi = vec![0.0f64; ctmc.states()];
    pi[..per_level].copy_from_slice(&pi0);
    let mut current = pi0;
    for l in 0..levels - 1 {
        let mut pushed = vec![0.0f64; per_level];
        for &(r, c, v) in &up[l] {
            pushed[c] += current[r] * v;
        }
        let m = inv[l + 1].as_ref().expect("inverse stored by backward sweep");
        let mut next = vec![0.0f64; per_level];
        for i in 0..per_level {
            if pushed[i] != 0.0 {
                for jcol in 0..per_level {
                    next[jcol] += pushed[i] * m[(i, jcol)];
                }
            }
        }
        pi[(l + 1) * per_level..(l + 2) * per_level].copy_from_slice(&next);
        current = next;
    }
    Ok(pi)
}

/// Solves `v A = 0` with `sum v = 1` for an irreducible conservative
/// generator block `A`, by replacing one column equation with normalisation.
fn left_null_vector(a: &nalgebra::DMatrix<f64>) -> Result<Vec<f64>, OracleError> {
    use nalgebra::DVector;
    let n = a.nrows();
    let scale = a.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1.0);
    // Try a few replacement columns in case one system is ill-conditioned.
    let mut candidates: Vec<usize> = vec![0, n / 2, n - 1];
    candidates.dedup();
    for &k in &candidates {
        let mut sys = a.transpose();
        for jcol in 0..n {
            sys[(k, jcol)] = 1.0;
        }
        let mut rhs = DVector::zeros(n);
        rhs[k] = 1.0;
        if let Some(v) = sys.lu().solve(&rhs) {
            let residual = (v.transpose() * a)
                .iter()
                .fold(0.0f64, |m, &r| m.max(r.abs()));
            if residual <= 1e-8 * scale {
                return Ok(v.iter().copied().collect());
            }
        }
    }
    Err(OracleError::NumericalFailure(
        "could not extract a left null vector of the censored level-0 block".into(),
    ))
}

// ===== Uniformization power iteration =====

fn power_solve(ctmc: &TruncatedCtmc) -> Result<Vec<f64>, OracleError> {
    let states = ctmc.states();
    let max_diag = (0..states)
        .flat_map(|i| ctmc.row(i).filter(move |&(j, _)| j as usize == i))
        .fold(0.0f64, |m, (_, v)| m.max(v.abs()));
    let lambda = 1.05 * max_diag.max(1e-300);

    let mut pi = vec![1.0 / states as f64; states];
    let mut next = vec![0.0f64; states];
    for sweep in 0..POWER_SWEEP_CAP {
        next.copy_from_slice(&pi);
        for i in 0..states {
            let p = pi[i];
            if p == 0.0 {
                continue;
            }
            for (j, v) in ctmc.row(i) {
                next[j as usize] += p * v / lambda;
            }
        }
        let total: f64 = next.iter().sum();
        let mut diff = 0.0;
        for (n, p) in next.iter_mut().zip(&pi) {
            *n /= total;
            diff += (*n - p).abs();
        }
        std::mem::swap(&mut pi, &mut next);
        if diff < POWER_REL_TOL {
            return Ok(pi);
        }
        // Cheap periodic residual check permits early exit on stagnation.
        if sweep % 20_000 == 19_999 && residual_inf_norm(ctmc, &pi) <= RESIDUAL_TOL / 10.0 {
            return Ok(pi);
        }
    }
    Err(OracleError::NonConvergence(format!(
        "power iteration did not reach {POWER_REL_TOL:.0e} in {POWER_SWEEP_CAP} sweeps"
    )))
}

// ===========================================================================
// Truncation refinement and stability verdicts
// ===========================================================================

/// Result of a truncation refinement.
#[derive(Debug, Clone)]
pub struct RefinedEstimate {
    /// Converged metric value.
    pub value: f64,
    /// Truncation level at which it converged (`l1 = l2`).
    pub level: u32,
    /// Boundary-band mass of the final solve (truncation-quality gauge).
    pub boundary_mass: f64,
    /// `(level, value)` for every ladder rung, for diagnostics.
    pub ladder: Vec<(u32, f64)>,
}

/// Doubles the truncation level from [`LADDER_START`] until the metric's
/// relative change drops below `tol`, then returns the converged value.
///
/// This is the unguarded core shared by the spec-level and retrial-level
/// refinement entry points (which first refuse analytically unstable
/// models).
pub fn refine_ladder<M: LatticeModel>(
    model: &M,
    metric: OracleMetric,
    tol: f64,
) -> Result<RefinedEstimate, OracleError> {
    let mut ladder = Vec::new();
    let mut prev: Option<f64> = None;
    let mut level = LADDER_START;
    loop {
        let dist = solve_stationary(&build_truncated_ctmc(model, level, level))?;
        let value = metric.extract(&dist);
        ladder.push((level, value));
        if let Some(p) = prev {
            if (value - p).abs() <= tol * value.abs().max(1.0) {
                return Ok(RefinedEstimate {
                    value,
                    level,
                    boundary_mass: dist.boundary_band_mass(),
                    ladder,
                });
            }
        }
        if level >= LADDER_CAP {
            return Err(OracleError::NonConvergence(format!(
                "metric still moving at truncation level {level}: ladder {ladder:?}"
            )));
        }
        prev = Some(value);
        level *= 2;
    }
}

/// Default relative tolerance of the refinement ladder.
pub const REFINE_DEFAULT_TOL: f64 = 1e-4;

/// Stability-guarded truncation refinement for walk specifications.
///
/// Computes the analytic ergodicity verdict first and refuses unstable
/// models — their truncated chains still solve, but the values drift with
/// the truncation level instead of converging — then runs [`refine_ladder`].
///
/// # Errors
///
/// [`OracleError::UnstableModel`] when the analytic origin-probability
/// limit is nonpositive; [`OracleError::NumericalFailure`] when the verdict
/// itself cannot be computed; otherwise as [`refine_ladder`].
pub fn refine_truncation(
    spec: &ModelSpec,
    metric: OracleMetric,
    tol: f64,
) -> Result<RefinedEstimate, OracleError> {
    match crate::stability::pi0_origin(spec) {
        Ok(_) => refine_ladder(spec, metric, tol),
        Err(e @ crate::stability::StabilityError::Unstable { .. }) => {
            Err(OracleError::UnstableModel(e.to_string()))
        }
        Err(e) => Err(OracleError::NumericalFailure(format!(
            "stability verdict unavailable: {e}"
        ))),
    }
}

/// Stability verdict obtained purely from truncated solves.
#[derive(Debug, Clone)]
pub struct EscapeVerdict {
    /// True when mass does not escape to the artificial boundary.
    pub stable: bool,
    /// `(level, boundary-band mass)` per ladder rung.
    pub masses: Vec<(u32, f64)>,
}

/// Judges stability by how much stationary mass the truncated chains place
/// against the artificial boundary as the truncation level doubles up to
/// 128: for a stable walk this mass vanishes geometrically, for an unstable
/// one it stays macroscopic.  Never refuses a model.
pub fn escaping_mass_verdict<M: LatticeModel>(model: &M) -> Result<EscapeVerdict, OracleError> {
    let mut masses = Vec::new();
    let mut level = LADDER_START;
    while level <= ESCAPE_LADDER_CAP {
        let dist = solve_stationary(&build_truncated_ctmc(model, level, level))?;
        let mass = dist.boundary_band_mass();
        masses.push((level, mass));
        // A clearly vanished band already decides the verdict.
        if mass < BOUNDARY_MASS_STABLE / 100.0 {
            return Ok(EscapeVerdict {
                stable: true,
                masses,
            });
        }
        level *= 2;
    }
    let stable = masses.last().map(|&(_, m)| m < BOUNDARY_MASS_STABLE).unwrap_or(false);
    Ok(EscapeVerdict { stable, masses })
}

// ===========================================================================
// Simulation
// ===========================================================================

/// Point estimates and batch-means confidence intervals from one simulation
/// run.
#[derive(Debug, Clone)]
pub struct SimEstimate {
    /// Time-averaged mean of the first coordinate (after warm-up).
    pub mean_x1: f64,
    /// Time-averaged mean of the second coordinate.
    pub mean_x2: f64,
    /// 95% batch-means confidence half-width for `mean_x1`.
    pub half_width_x1: f64,
    /// 95% batch-means confidence half-width for `mean_x2`.
    pub half_width_x2: f64,
    /// Time fraction spent in each phase (sums to 1).
    pub phase_occupancy: Vec<f64>,
    /// Number of batches used.
    pub batches: usize,
    /// Jump count after warm-up.
    pub events: u64,
}

/// Simulates the jump chain of `model` exactly up to `horizon` time units
/// with a deterministic ChaCha8 stream seeded by `seed`.
///
/// The first 10% of the horizon is discarded; the rest is split into 40
/// equal-duration batches whose time-averaged coordinate means feed a
/// Student-t 95% confidence interval.
///
/// # Errors
///
/// [`OracleError::HorizonTooShort`] when fewer than 1500 jumps remain after
/// warm-up (the batch means would be meaningless).
pub fn simulate<M: LatticeModel>(
    model: &M,
    horizon: f64,
    seed: u64,
) -> Result<SimEstimate, OracleError> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(OracleError::HorizonTooShort(format!(
            "horizon {horizon} must be positive"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let warmup = SIM_WARMUP_FRACTION * horizon;
    let batch_len = (horizon - warmup) / SIM_BATCHES as f64;

    let phases = model.phase_count();
    let (mut x1, mut x2, mut phase) = (0u64, 0u64, 0usize);
    let mut t = 0.0f64;
    let mut events = 0u64;

    let mut batch_x1 = vec![0.0f64; SIM_BATCHES];
    let mut batch_x2 = vec![0.0f64; SIM_BATCHES];
    let mut occupancy = vec![0.0f64; phases];
    let mut transitions: Vec<Transition> = Vec::with_capacity(16);

    // Accumulates `value * dt` into the batch grid, splitting the holding
    // interval at warm-up and batch boundaries.
    let accumulate = |from: f64, to: f64, x1: u64, x2: u64, phase: usize,
                          batch_x1: &mut [f64], batch_x2: &mut [f64], occupancy: &mut [f64]| {
        let lo = from.max(warmup);
        let hi = to.min(horizon);
        if hi <= lo {
            return;
        }
        occupancy[phase] += hi - lo;
        // Intersect [lo, hi] with each batch interval it can touch; iterating
        // over batch indices keeps the loop bounded even when a computed
        // boundary collides with an interval endpoint to the last ulp.
        let b_lo = (((lo - warmup) / batch_len) as usize).min(SIM_BATCHES - 1);
        let b_hi = (((hi - warmup) / batch_len) as usize).min(SIM_BATCHES - 1);
        for b in b_lo..=b_hi {
            let blo = warmup + b as f64 * batch_len;
            let bhi = if b + 1 == SIM_BATCHES {
                hi
            } else {
                warmup + (b + 1) as f64 * batch_len
            };
            let dt = (hi.min(bhi) - lo.max(blo)).max(0.0);
            batch_x1[b] += x1 as f64 * dt;
            batch_x2[b] += x2 as f64 * dt;
        }
    };

    while t < horizon {
        transitions.clear();
        model.transitions(x1, x2, phase, &mut transitions);
        let total: f64 = transitions.iter().map(|tr| tr.rate).sum();
        if total <= 0.0 {
            // Absorbing state: the trajectory stays here for the rest of the
            // horizon.
            accumulate(t, horizon, x1, x2, phase, &mut batch_x1, &mut batch_x2, &mut occupancy);
            break;
        }
        let u: f64 = 1.0 - rng.gen::<f64>(); // in (0, 1]
        let dt = -u.ln() / total;
        let next_t = t + dt;
        accumulate(t, next_t, x1, x2, phase, &mut batch_x1, &mut batch_x2, &mut occupancy);
        if next_t >= horizon {
            break;
        }
        // Categorical jump.
        let mut draw = rng.gen::<f64>() * total;
        let mut chosen = transitions[transitions.len() - 1];
        for tr in &transitions {
            draw -= tr.rate;
            if draw <= 0.0 {
                chosen = *tr;
                break;
            }
        }
        x1 = (x1 as i64 + chosen.dx1).max(0) as u64;
        x2 = (x2 as i64 + chosen.dx2).max(0) as u64;
        phase = chosen.phase;
        t = next_t;
        if t > warmup {
            events += 1;
        }
    }

    if events < SIM_MIN_EVENTS {
        return Err(OracleError::HorizonTooShort(format!(
            "only {events} jumps after warm-up, need at least {SIM_MIN_EVENTS}"
        )));
    }

    let occ_total: f64 = occupancy.iter().sum();
    for o in &mut occupancy {
        *o /= occ_total;
    }
    let means_x1: Vec<f64> = batch_x1.iter().map(|v| v / batch_len).collect();
    let means_x2: Vec<f64> = batch_x2.iter().map(|v| v / batch_len).collect();
    let (mean_x1, half_width_x1) = batch_ci(&means_x1);
    let (mean_x2, half_width_x2) = batch_ci(&means_x2);

    Ok(SimEstimate {
        mean_x1,
        mean_x2,
        half_width_x1,
        half_width_x2,
        phase_occupancy: occupancy,
        batches: SIM_BATCHES,
        events,
    })
}

/// Mean and 95% Student-t half-width of a set of batch means.
fn batch_ci(batch_means: &[f64]) -> (f64, f64) {
    let n = batch_means.len() as f64;
    let mean = batch_means.iter().sum::<f64>() / n;
    let var = batch_means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let t = StudentsT::new(0.0, 1.0, n - 1.0)
        .expect("valid t distribution")
        .inverse_cdf(0.975);
    (mean, t * (var / n).sqrt())
}

// ===========================================================================
// Tests
// ===========================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_network_model, NetworkParams};
    use std::collections::BTreeMap;

    /// Single queue fed at `lambda`, served at rate 1: a birth-death chain
    /// on the first coordinate (the second coordinate never moves).
    fn single_queue(lambda: f64) -> ModelSpec {
        build_network_model(&NetworkParams {
            lambda1: vec![lambda],
            lambda2: vec![0.0],
            nu1: 1.0,
            nu2: 1.0,
            r12: 0.0,
            r21: 0.0,
            gamma: vec![],
            tau: vec![],
            w: 0.3,
        })
        .unwrap()
    }

    fn two_mode_spec() -> ModelSpec {
        build_network_model(&crate::model::tests::two_mode_params()).unwrap()
    }

    /// Two queues with the whole sharing weight on the first one (`w = 1`):
    /// queue 1 then serves at full rate everywhere, so its marginal is
    /// exactly the `lambda1` birth-death chain, while the light second flow
    /// keeps the lattice genuinely two-dimensional and irreducible.
    fn dominant_first_queue(lambda1: f64) -> ModelSpec {
        build_network_model(&NetworkParams {
            lambda1: vec![lambda1],
            lambda2: vec![0.1],
            nu1: 1.0,
            nu2: 1.0,
            r12: 0.0,
            r21: 0.0,
            gamma: vec![],
            tau: vec![],
            w: 1.0,
        })
        .unwrap()
    }

    #[test]
    fn birth_death_solve_matches_geometric_law() {
        let spec = single_queue(0.5);
        let ctmc = build_truncated_ctmc(&spec, 200, 0);
        let dist = solve_stationary(&ctmc).unwrap();
        // Mean rho / (1 - rho) = 1 and geometric decay ratio rho.
        assert!((dist.mean_x1() - 1.0).abs() < 1e-6, "mean {}", dist.mean_x1());
        assert!((dist.prob(0, 0, 0) - 0.5).abs() < 1e-9);
        for k in 1..10 {
            let ratio = dist.prob(k + 1, 0, 0) / dist.prob(k, 0, 0);
            assert!((ratio - 0.5).abs() < 1e-9, "ratio at {k}: {ratio}");
        }
        assert_eq!(dist.mean_x2(), 0.0);
    }

    #[test]
    fn direct_and_power_solvers_agree() {
        let spec = two_mode_spec();
        let ctmc = build_truncated_ctmc(&spec, 16, 16);
        check_irreducible(&ctmc).unwrap();
        let normalize = |mut v: Vec<f64>| {
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|p| *p /= s);
            v
        };
        let direct = normalize(direct_solve(&ctmc).unwrap());
        let power = normalize(power_solve(&ctmc).unwrap());
        let max_diff = direct
            .iter()
            .zip(&power)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(max_diff < 1e-8, "solver routes disagree by {max_diff:.3e}");
    }

    #[test]
    fn phase_occupancy_matches_autonomous_switch_chain() {
        // The switching process never looks at the lattice position, so the
        // phase marginal is exactly the stationary law of the star chain.
        let spec = two_mode_spec();
        let dist = solve_stationary(&build_truncated_ctmc(&spec, 12, 12)).unwrap();
        let p = crate::model::tests::two_mode_params();
        let denom = 1.0 + p.gamma[0] / p.tau[0] + p.gamma[1] / p.tau[1];
        let expected = [
            1.0 / denom,
            (p.gamma[0] / p.tau[0]) / denom,
            (p.gamma[1] / p.tau[1]) / denom,
        ];
        for (k, &e) in expected.iter().enumerate() {
            let got = dist.phase_occupancy()[k];
            assert!((got - e).abs() < 1e-9, "phase {k}: {got} vs {e}");
        }
    }

    #[test]
    fn generator_matches_hand_coded_network_semantics() {
        // Re-derive every transition straight from the network's service
        // story and compare with the builder + truncation pipeline.
        let p = crate::model::tests::two_mode_params();
        let spec = build_network_model(&p).unwrap();
        let (l1, l2) = (6u32, 6u32);
        let ctmc = build_truncated_ctmc(&spec, l1, l2);
        let phases = p.n_modes() + 1;

        for x1 in 0..=l1 {
            for x2 in 0..=l2 {
                for j in 0..phases {
                    let mut expected: BTreeMap<(i64, i64, usize), f64> = BTreeMap::new();
                    let mut add = |dx1: i64, dx2: i64, ph: usize, rate: f64| {
                        if rate > 0.0 {
                            let nx1 = i64::from(x1) + dx1;
                            let nx2 = i64::from(x2) + dx2;
                            if (0..=i64::from(l1)).contains(&nx1)
                                && (0..=i64::from(l2)).contains(&nx2)
                            {
                                *expected.entry((dx1, dx2, ph)).or_insert(0.0) += rate;
                            }
                        }
                    };
                    add(1, 0, j, p.lambda1[j]);
                    add(0, 1, j, p.lambda2[j]);
                    if j == 0 {
                        if x1 > 0 {
                            let rate = if x2 > 0 { p.w * p.nu1 } else { p.nu1 };
                            add(-1, 0, 0, rate * (1.0 - p.r12));
                            add(-1, 1, 0, rate * p.r12);
                        }
                        if x2 > 0 {
                            let rate = if x1 > 0 { (1.0 - p.w) * p.nu2 } else { p.nu2 };
                            add(0, -1, 0, rate * (1.0 - p.r21));
                            add(1, -1, 0, rate * p.r21);
                        }
                        for k in 1..phases {
                            add(0, 0, k, p.gamma[k - 1]);
                        }
                    } else {
                        add(0, 0, 0, p.tau[j - 1]);
                    }

                    let from = ctmc.index(x1, x2, j);
                    let mut got: BTreeMap<(i64, i64, usize), f64> = BTreeMap::new();
                    let mut diag = 0.0;
                    for (c, v) in ctmc.row(from) {
                        if c as usize == from && v < 0.0 {
                            diag = v;
                            continue;
                        }
                        let (nx1, nx2, ph) = ctmc.coords(c as usize);
                        *got
                            .entry((
                                i64::from(nx1) - i64::from(x1),
                                i64::from(nx2) - i64::from(x2),
                                ph,
                            ))
                            .or_insert(0.0) += v;
                    }
                    assert_eq!(
                        expected.keys().collect::<Vec<_>>(),
                        got.keys().collect::<Vec<_>>(),
                        "support mismatch at ({x1}, {x2}, {j})"
                    );
                    for (k, &e) in &expected {
                        let g = got[k];
                        assert!(
                            (g - e).abs() <= 1e-12 * e.max(1.0),
                            "rate mismatch at ({x1}, {x2}, {j}) -> {k:?}: {g} vs {e}"
                        );
                    }
                    let out_sum: f64 = expected.values().sum();
                    assert!(
                        (diag + out_sum).abs() <= 1e-12 * out_sum.max(1.0),
                        "diagonal not conservative at ({x1}, {x2}, {j})"
                    );
                }
            }
        }
    }

    #[test]
    fn reducible_chain_is_rejected() {
        // No arrivals anywhere: nothing can leave the origin.
        let mut spec = single_queue(0.5);
        spec.interior = crate::model::IncrementRateField::new();
        spec.boundary_x = crate::model::IncrementRateField::new()
            .with(-1, 0, 1.0);
        spec.boundary_y = crate::model::IncrementRateField::new();
        spec.corner = crate::model::IncrementRateField::new();
        let ctmc = build_truncated_ctmc(&spec, 4, 0);
        match solve_stationary(&ctmc) {
            Err(OracleError::ReducibleChain(_)) => {}
            other => panic!("expected reducibility error, got {other:?}"),
        }
    }

    #[test]
    fn refinement_ladder_converges_on_known_marginal_mean() {
        let spec = dominant_first_queue(0.5);
        let est = refine_ladder(&spec, OracleMetric::MeanX1, 1e-6).unwrap();
        assert!((est.value - 1.0).abs() < 1e-5, "value {}", est.value);
        assert!(est.level <= 128);
        assert!(est.boundary_mass < 1e-4);
        assert!(est.ladder.len() >= 2);
    }

    #[test]
    fn escaping_mass_separates_stable_from_unstable() {
        let stable = escaping_mass_verdict(&dominant_first_queue(0.5)).unwrap();
        assert!(stable.stable, "masses {:?}", stable.masses);
        let unstable = escaping_mass_verdict(&dominant_first_queue(1.5)).unwrap();
        assert!(!unstable.stable, "masses {:?}", unstable.masses);
    }

    #[test]
    fn guarded_refinement_refuses_unstable_specs() {
        let mut p = crate::model::tests::two_mode_params();
        for l in p.lambda1.iter_mut().chain(p.lambda2.iter_mut()) {
            *l *= 10.0;
        }
        let overloaded = build_network_model(&p).unwrap();
        match refine_truncation(&overloaded, OracleMetric::OriginProb, 1e-4) {
            Err(OracleError::UnstableModel(msg)) => {
                assert!(msg.contains("unstable"), "message: {msg}");
            }
            other => panic!("expected an unstable-model refusal, got {other:?}"),
        }

        let stable = two_mode_spec();
        let guarded = refine_truncation(&stable, OracleMetric::OriginProb, 1e-4).unwrap();
        let raw = refine_ladder(&stable, OracleMetric::OriginProb, 1e-4).unwrap();
        assert_eq!(guarded.value, raw.value);
        assert_eq!(guarded.level, raw.level);
    }

    #[test]
    fn simulation_is_deterministic_and_covers_birth_death_mean() {
        let spec = single_queue(0.5);
        let a = simulate(&spec, 40_000.0, 7).unwrap();
        let b = simulate(&spec, 40_000.0, 7).unwrap();
        assert_eq!(a.mean_x1, b.mean_x1, "same seed must reproduce exactly");
        assert_eq!(a.phase_occupancy, b.phase_occupancy);
        assert!(
            (a.mean_x1 - 1.0).abs() <= 3.0 * a.half_width_x1.max(0.02),
            "mean {} +/- {}",
            a.mean_x1,
            a.half_width_x1
        );
        let occ_sum: f64 = a.phase_occupancy.iter().sum();
        assert!((occ_sum - 1.0).abs() < 1e-12);
        assert!(a.events >= SIM_MIN_EVENTS);
        assert_eq!(a.batches, SIM_BATCHES);
    }

    #[test]
    fn simulation_differs_across_seeds() {
        let spec = single_queue(0.5);
        let a = simulate(&spec, 40_000.0, 1).unwrap();
        let b = simulate(&spec, 40_000.0, 2).unwrap();
        assert_ne!(a.mean_x1, b.mean_x1);
    }

    #[test]
    fn short_horizon_is_rejected() {
        let spec = single_queue(0.5);
        match simulate(&spec, 10.0, 3) {
            Err(OracleError::HorizonTooShort(_)) => {}
            other => panic!("expected horizon error, got {other:?}"),
        }
    }
}
