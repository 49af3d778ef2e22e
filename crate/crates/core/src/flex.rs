//! Interface flexibility aggregation, Q-target allocation and discrete tap
//! handling.
//!
//! Two strategies share one evaluation core: an exhaustive oracle over tap
//! combinations and a uniform q grid, and a sensitivity-guided sequential
//! LP. Every number either returns is taken from a full nonlinear
//! re-simulation via [`coupled_power_flow_tol`]; linear predictions only
//! steer the search.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};

use microlp::{ComparisonOp, OptimizationDirection};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{
    coupled_power_flow_with, local_q_slopes, CoupledOptions, Capability, ControlCharacteristic, ControlError,
    CoupledSolution, QOverrides,
};
use crate::grid::{interface_unchecked, Asset, AssetKind, BusKind, InterfaceSpec, Network, VoltageLevel};
use crate::powerflow::{interface_q, branch_sensitivities, jacobian_sensitivities, PowerFlowSolution, TapVector};

pub const ORACLE_MAX_TAPS: usize = 3;
pub const ORACLE_MAX_ASSETS: usize = 4;
pub const DEFAULT_RESOLUTION: usize = 21;
/// Slack allowed before a bound counts as violated.
pub const VIOLATION_TOL: f64 = 1e-9;
/// Heuristic stops once an accepted step gains less than this (pu).
pub const IMPROVEMENT_TOL: f64 = 1e-5;
pub const MAX_SLP_ITER: usize = 60;
/// Initial trust region as a fraction of each asset's q range.
pub const INITIAL_TRUST: f64 = 0.25;
/// Deviation below which a target counts as met.
pub const TARGET_TOL: f64 = 1e-6;

/// Tolerances for every evaluation in this module; tight enough that
/// loading and voltage noise stays well below [`MARGIN`].
pub const EVAL_OPTIONS: CoupledOptions = CoupledOptions {
    picard_tol: 1e-10,
    pf_tol: 1e-12,
    secant: true,
};
/// Distance kept from voltage and loading bounds by the linearised
/// constraints, above the fixed-point noise of a default-tolerance
/// re-simulation.
const MARGIN: f64 = 5e-6;
const MIN_TRUST: f64 = 1e-6;
const ELASTIC_COST: f64 = 1e3;
const MAX_TAP_MOVES: usize = 24;
/// Branches loaded above this fraction get linearised thermal rows.
const THERMAL_WATCH: f64 = 0.5;
const THERMAL_FACETS: usize = 8;
/// Backoff marking a thermal row as modelled without tightening it.
const WATCH_ONLY: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FlexError {
    #[error(
        "oracle guard exceeded: {taps} optimiser taps (max {ORACLE_MAX_TAPS}), {assets} controllable assets (max {ORACLE_MAX_ASSETS})"
    )]
    OracleTooLarge { taps: usize, assets: usize },
    #[error("no constraint-satisfying operating point ({} violations)", violations.len())]
    Infeasible { violations: Vec<Violation> },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Control(#[from] ControlError),
}

// ---------------------------------------------------------------------------
// Constraints
// ---------------------------------------------------------------------------

/// Operational limits, indexed like the network they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub v_min: Vec<f64>,
    pub v_max: Vec<f64>,
    /// Per-unit current rating per line.
    pub line_rating: Vec<f64>,
    /// Per-unit apparent power rating per transformer.
    pub transformer_rating: Vec<f64>,
    pub capabilities: Vec<Capability>,
    /// Transformers whose tap position is a decision variable.
    pub controlled_taps: BTreeSet<usize>,
}

impl ConstraintSet {
    /// Limits from the network itself; every tap changer is a decision
    /// variable.
    pub fn from_network(net: &Network) -> Self {
        ConstraintSet {
            v_min: net.buses.iter().map(|b| b.v_min).collect(),
            v_max: net.buses.iter().map(|b| b.v_max).collect(),
            line_rating: net.lines.iter().map(|l| l.i_max).collect(),
            transformer_rating: net.transformers.iter().map(|t| t.s_rated).collect(),
            capabilities: net.assets.iter().map(Capability::of).collect(),
            controlled_taps: net
                .transformers
                .iter()
                .enumerate()
                .filter(|(_, t)| t.tap.is_some())
                .map(|(i, _)| i)
                .collect(),
        }
    }

    /// Restricts the tap decision variables to the named transformers.
    pub fn with_controlled_taps<'a>(mut self, net: &Network, ids: impl IntoIterator<Item = &'a str>) -> Self {
        self.controlled_taps = ids
            .into_iter()
            .filter_map(|id| net.transformer_idx(id))
            .filter(|&t| net.transformers[t].tap.is_some())
            .collect();
        self
    }

    /// The same limits for `to`, matched by element id. Elements unknown to
    /// `from` take their limits from `to` itself.
    pub fn restricted(&self, from: &Network, to: &Network) -> ConstraintSet {
        let own = ConstraintSet::from_network(to);
        let bus = |i: usize| from.bus_idx(&to.buses[i].id);
        let line = |i: usize| from.lines.iter().position(|l| l.id == to.lines[i].id);
        let asset = |i: usize| from.asset_idx(&to.assets[i].id);
        ConstraintSet {
            v_min: (0..to.buses.len()).map(|i| bus(i).map_or(own.v_min[i], |j| self.v_min[j])).collect(),
            v_max: (0..to.buses.len()).map(|i| bus(i).map_or(own.v_max[i], |j| self.v_max[j])).collect(),
            line_rating: (0..to.lines.len())
                .map(|i| line(i).map_or(own.line_rating[i], |j| self.line_rating[j]))
                .collect(),
            transformer_rating: (0..to.transformers.len())
                .map(|i| {
                    from.transformer_idx(&to.transformers[i].id)
                        .map_or(own.transformer_rating[i], |j| self.transformer_rating[j])
                })
                .collect(),
            capabilities: (0..to.assets.len())
                .map(|i| asset(i).map_or(own.capabilities[i], |j| self.capabilities[j]))
                .collect(),
            controlled_taps: (0..to.transformers.len())
                .filter(|&i| {
                    to.transformers[i].tap.is_some()
                        && from
                            .transformer_idx(&to.transformers[i].id)
                            .is_some_and(|j| self.controlled_taps.contains(&j))
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    Lower,
    Upper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Violation {
    Voltage {
        bus: String,
        bound: Bound,
        value: f64,
        limit: f64,
        magnitude: f64,
    },
    /// `loading` is the flow relative to the rating (> 1).
    Thermal { branch: String, loading: f64 },
}

impl Violation {
    pub fn excess(&self) -> f64 {
        match self {
            Violation::Voltage { magnitude, .. } => *magnitude,
            Violation::Thermal { loading, .. } => loading - 1.0,
        }
    }
}

pub fn check_constraints(net: &Network, sol: &PowerFlowSolution, cs: &ConstraintSet) -> Vec<Violation> {
    let mut out = Vec::new();
    for (i, b) in net.buses.iter().enumerate() {
        let v = sol.vm[i];
        if v < cs.v_min[i] - VIOLATION_TOL {
            out.push(Violation::Voltage {
                bus: b.id.clone(),
                bound: Bound::Lower,
                value: v,
                limit: cs.v_min[i],
                magnitude: cs.v_min[i] - v,
            });
        } else if v > cs.v_max[i] + VIOLATION_TOL {
            out.push(Violation::Voltage {
                bus: b.id.clone(),
                bound: Bound::Upper,
                value: v,
                limit: cs.v_max[i],
                magnitude: v - cs.v_max[i],
            });
        }
    }
    for (i, l) in net.lines.iter().enumerate() {
        let loading = sol.lines[i].i_from.max(sol.lines[i].i_to) / cs.line_rating[i];
        if loading > 1.0 + VIOLATION_TOL {
            out.push(Violation::Thermal {
                branch: l.id.clone(),
                loading,
            });
        }
    }
    for (i, t) in net.transformers.iter().enumerate() {
        let f = &sol.transformers[i];
        let s = f.p_from.hypot(f.q_from).max(f.p_to.hypot(f.q_to));
        let loading = s / cs.transformer_rating[i];
        if loading > 1.0 + VIOLATION_TOL {
            out.push(Violation::Thermal {
                branch: t.id.clone(),
                loading,
            });
        }
    }
    out
}

/// Loading of every line, then every transformer, relative to its rating.
pub fn branch_loadings(net: &Network, sol: &PowerFlowSolution, cs: &ConstraintSet) -> Vec<f64> {
    let lines = (0..net.lines.len()).map(|i| sol.lines[i].i_from.max(sol.lines[i].i_to) / cs.line_rating[i]);
    let trafos = (0..net.transformers.len()).map(|i| {
        let f = &sol.transformers[i];
        f.p_from.hypot(f.q_from).max(f.p_to.hypot(f.q_to)) / cs.transformer_rating[i]
    });
    lines.chain(trafos).collect()
}

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

/// Tap positions plus reactive setpoints for directly controllable assets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetpointBundle {
    pub taps: TapVector,
    /// Per-unit, keyed by asset id.
    pub q_setpoints: BTreeMap<String, f64>,
    pub achieved_q_if: f64,
    /// `target - achieved`; zero for flexibility witnesses.
    pub deviation: f64,
}

impl SetpointBundle {
    pub fn overrides(&self, net: &Network) -> QOverrides {
        self.q_setpoints
            .iter()
            .filter_map(|(id, &q)| Some((net.asset_idx(id)?, q)))
            .collect()
    }

    /// Writes the setpoints and taps into `net`.
    pub fn apply(&self, net: &mut Network) {
        for (id, &pos) in &self.taps.0 {
            if let Some(tc) = net.transformer_idx(id).and_then(|t| net.transformers[t].tap.as_mut()) {
                tc.position = pos;
            }
        }
        for (id, &q) in &self.q_setpoints {
            if let Some(i) = net.asset_idx(id) {
                net.assets[i].q_setpoint = Some(q);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlexRange {
    pub q_min: f64,
    pub q_max: f64,
    /// Interface flow at the starting operating point.
    pub q_base: f64,
    pub witness_min: Option<SetpointBundle>,
    pub witness_max: Option<SetpointBundle>,
    pub feasible: bool,
    /// Power flows evaluated.
    pub evaluations: usize,
    /// Enumeration points whose power flow failed.
    pub failed_points: usize,
    /// Oracle q-grid spacing (largest over assets); zero for the heuristic.
    pub grid_step: f64,
}

impl FlexRange {
    pub fn width(&self) -> f64 {
        self.q_max - self.q_min
    }

    pub fn contains(&self, q: f64, eps: f64) -> bool {
        q >= self.q_min - eps && q <= self.q_max + eps
    }
}

/// Re-simulates `bundle` from a flat start and checks every constraint.
pub fn verify_bundle(
    net: &Network,
    ifc: &InterfaceSpec,
    cs: &ConstraintSet,
    bundle: &SetpointBundle,
) -> Result<(CoupledSolution, Vec<Violation>, f64), ControlError> {
    let mut taps = TapVector::from_network(net);
    for (id, &p) in &bundle.taps.0 {
        taps.set(id, p);
    }
    let c = coupled_power_flow_with(net, &bundle.overrides(net), &taps, None, &EVAL_OPTIONS)?;
    let v = check_constraints(net, &c.solution, cs);
    let q = interface_q(&c.solution, ifc);
    Ok((c, v, q))
}

// ---------------------------------------------------------------------------
// Evaluation core
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
enum Objective {
    Max,
    Min,
    Target(f64),
}

#[derive(Debug, Clone)]
struct Point {
    taps: TapVector,
    q: Vec<f64>,
    coupled: CoupledSolution,
    q_if: f64,
    violations: Vec<Violation>,
    excess: f64,
}

impl Point {
    fn feasible(&self) -> bool {
        self.violations.is_empty()
    }
}

struct Ctx<'a> {
    net: &'a Network,
    ifc: &'a InterfaceSpec,
    cs: &'a ConstraintSet,
    assets: Vec<usize>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    taps: Vec<usize>,
    slack: usize,
    evals: AtomicUsize,
}

impl<'a> Ctx<'a> {
    fn new(net: &'a Network, ifc: &'a InterfaceSpec, cs: &'a ConstraintSet) -> Self {
        let assets = ifc.controllable_assets.clone();
        let (lo, hi) = assets
            .iter()
            .map(|&i| cs.capabilities[i].bounds_at(net.assets[i].p))
            .unzip();
        let taps = ifc
            .tap_changers
            .iter()
            .copied()
            .filter(|t| cs.controlled_taps.contains(t))
            .collect();
        Ctx {
            net,
            ifc,
            cs,
            assets,
            lo,
            hi,
            taps,
            slack: net.slack_idx().unwrap_or(0),
            evals: AtomicUsize::new(0),
        }
    }

    fn evaluations(&self) -> usize {
        self.evals.load(Ordering::Relaxed)
    }

    fn eval(&self, taps: &TapVector, q: &[f64], start: Option<&PowerFlowSolution>) -> Result<Point, ControlError> {
        self.evals.fetch_add(1, Ordering::Relaxed);
        let overrides: QOverrides = self.assets.iter().copied().zip(q.iter().copied()).collect();
        let coupled = coupled_power_flow_with(self.net, &overrides, taps, start, &EVAL_OPTIONS)?;
        let violations = check_constraints(self.net, &coupled.solution, self.cs);
        let excess = violations.iter().map(Violation::excess).sum();
        Ok(Point {
            taps: taps.clone(),
            q: q.to_vec(),
            q_if: interface_q(&coupled.solution, self.ifc),
            coupled,
            violations,
            excess,
        })
    }

    /// Current operating point: stored setpoints or characteristic output,
    /// clamped into the decision box.
    fn base_point(&self) -> Result<Point, ControlError> {
        let taps = TapVector::from_network(self.net);
        let free = coupled_power_flow_with(self.net, &QOverrides::new(), &taps, None, &EVAL_OPTIONS)?;
        let q: Vec<f64> = self
            .assets
            .iter()
            .enumerate()
            .map(|(k, &i)| free.dispatch.q[i].clamp(self.lo[k], self.hi[k]))
            .collect();
        self.eval(&taps, &q, Some(&free.solution))
    }

    fn score(&self, p: &Point, obj: Objective) -> f64 {
        match obj {
            Objective::Max => -p.q_if,
            Objective::Min => p.q_if,
            Objective::Target(t) => (p.q_if - t).abs(),
        }
    }

    fn better(&self, a: &Point, b: &Point, obj: Objective) -> bool {
        match (a.feasible(), b.feasible()) {
            (true, false) => true,
            (false, true) => false,
            (false, false) => a.excess < b.excess - 1e-12,
            (true, true) => self.score(a, obj) < self.score(b, obj) - 1e-12,
        }
    }

    fn bundle(&self, p: &Point, target: Option<f64>) -> SetpointBundle {
        SetpointBundle {
            taps: p.taps.clone(),
            q_setpoints: self
                .assets
                .iter()
                .zip(&p.q)
                .map(|(&i, &q)| (self.net.assets[i].id.clone(), q))
                .collect(),
            achieved_q_if: p.q_if,
            deviation: target.map_or(0.0, |t| t - p.q_if),
        }
    }

    fn overrides(&self, q: &[f64]) -> QOverrides {
        self.assets.iter().copied().zip(q.iter().copied()).collect()
    }

    /// One LP over `dq` on the linearised model at `p`; returns the step and
    /// the predicted objective gain.
    fn lp_step(&self, p: &Point, obj: Objective, frac: f64, backoff: &[f64]) -> Option<(Vec<f64>, f64)> {
        if self.assets.is_empty() {
            return None;
        }
        let sol = &p.coupled.solution;
        let slopes = local_q_slopes(self.net, &self.overrides(&p.q), sol);
        let (dv, g) = jacobian_sensitivities(self.net, sol, self.ifc, &p.taps, &self.assets, Some(&slopes)).ok()?;

        let mut lp = microlp::Problem::new(OptimizationDirection::Minimize);
        let mut bounds = Vec::with_capacity(self.assets.len());
        let vars: Vec<_> = (0..self.assets.len())
            .map(|k| {
                let rho = frac * (self.hi[k] - self.lo[k]);
                let lb = (self.lo[k] - p.q[k]).max(-rho).min(0.0);
                let ub = (self.hi[k] - p.q[k]).min(rho).max(0.0);
                bounds.push(lb.abs().max(ub.abs()));
                let cost = match obj {
                    Objective::Max => -g[k],
                    Objective::Min => g[k],
                    Objective::Target(_) => 0.0,
                };
                lp.add_var(cost, (lb, ub))
            })
            .collect();
        let dev_var = if let Objective::Target(t) = obj {
            let d = p.q_if - t;
            let e = lp.add_var(1.0, (0.0, f64::INFINITY));
            let mut up: Vec<_> = vars.iter().zip(&g).map(|(&v, &gk)| (v, -gk)).collect();
            up.push((e, 1.0));
            lp.add_constraint(up, ComparisonOp::Ge, d);
            let mut down: Vec<_> = vars.iter().zip(&g).map(|(&v, &gk)| (v, gk)).collect();
            down.push((e, 1.0));
            lp.add_constraint(down, ComparisonOp::Ge, -d);
            Some((e, d.abs()))
        } else {
            None
        };
        for b in 0..self.net.buses.len() {
            if b == self.slack {
                continue;
            }
            let v = sol.vm[b];
            let reach: f64 = (0..self.assets.len()).map(|k| dv[(b, k)].abs() * bounds[k]).sum();
            let upper = self.cs.v_max[b] - MARGIN - backoff[2 * b];
            let lower = self.cs.v_min[b] + MARGIN + backoff[2 * b + 1];
            let row = |lp: &mut microlp::Problem| -> Vec<(microlp::Variable, f64)> {
                let s = lp.add_var(ELASTIC_COST, (0.0, f64::INFINITY));
                let mut r: Vec<_> = vars.iter().enumerate().map(|(k, &x)| (x, dv[(b, k)])).collect();
                r.push((s, 0.0));
                r
            };
            if v + reach >= upper {
                let mut r = row(&mut lp);
                r.last_mut().unwrap().1 = -1.0;
                lp.add_constraint(r, ComparisonOp::Le, upper - v);
            }
            if v - reach <= lower {
                let mut r = row(&mut lp);
                r.last_mut().unwrap().1 = 1.0;
                lp.add_constraint(r, ComparisonOp::Ge, lower - v);
            }
        }
        let loading = branch_loadings(self.net, sol, self.cs);
        let nb = 2 * self.net.buses.len();
        let watched: Vec<usize> = (0..loading.len())
            .filter(|&i| loading[i] > THERMAL_WATCH || backoff[nb + i] > 0.0)
            .collect();
        if !watched.is_empty() {
            let lin = branch_sensitivities(
                self.net,
                sol,
                &p.taps,
                &self.assets,
                Some(&slopes),
                &self.cs.line_rating,
                &self.cs.transformer_rating,
            )
            .ok()?;
            for &i in &watched {
                let x = lin[i].value;
                // Outer octagon of the rating disk, aligned with the present
                // phasor so the first row is the exact tangent.
                let base = if x.norm() > 0.0 { x / x.norm() } else { Complex64::new(1.0, 0.0) };
                for j in 0..THERMAL_FACETS {
                    let d = base * Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * j as f64 / THERMAL_FACETS as f64);
                    let now = (d.conj() * x).re;
                    let s = lp.add_var(ELASTIC_COST, (0.0, f64::INFINITY));
                    let mut row: Vec<_> = vars
                        .iter()
                        .enumerate()
                        .map(|(k, &v)| (v, (d.conj() * lin[i].grad[k]).re))
                        .collect();
                    row.push((s, -1.0));
                    lp.add_constraint(row, ComparisonOp::Le, 1.0 - MARGIN - backoff[nb + i] - now);
                }
            }
        }
        let solution = lp.solve().ok()?.into_solution().ok()?;
        let step: Vec<f64> = vars.iter().map(|&v| solution.var_value(v)).collect();
        let linear: f64 = step.iter().zip(&g).map(|(d, gk)| d * gk).sum();
        let gain = match (obj, dev_var) {
            (Objective::Max, _) => linear,
            (Objective::Min, _) => -linear,
            (Objective::Target(_), Some((e, d0))) => d0 - solution.var_value(e),
            (Objective::Target(_), None) => 0.0,
        };
        Some((step, gain))
    }

    fn moved(&self, p: &Point, step: &[f64], t: f64) -> Vec<f64> {
        (0..self.assets.len())
            .map(|k| (p.q[k] + t * step[k]).clamp(self.lo[k], self.hi[k]))
            .collect()
    }

    /// Largest feasible fraction of `step` from the feasible point `p`.
    fn line_search(&self, p: &Point, step: &[f64]) -> Option<Point> {
        let scale = step.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        let (mut lo, mut hi) = (0.0, 1.0);
        let mut best: Option<Point> = None;
        while (hi - lo) * scale > 1e-9 {
            let mid = 0.5 * (lo + hi);
            let start = best.as_ref().map_or(&p.coupled.solution, |b| &b.coupled.solution);
            match self.eval(&p.taps, &self.moved(p, step, mid), Some(start)) {
                Ok(c) if c.feasible() => {
                    lo = mid;
                    best = Some(c);
                }
                _ => hi = mid,
            }
        }
        best
    }

    /// Row index in the backoff vector: two per bus, then one per branch.
    fn backoff_row(&self, v: &Violation) -> Option<usize> {
        match v {
            Violation::Voltage { bus, bound, .. } => {
                let b = self.net.bus_idx(bus)?;
                Some(2 * b + usize::from(*bound == Bound::Lower))
            }
            Violation::Thermal { branch, .. } => {
                let nb = 2 * self.net.buses.len();
                self.net
                    .lines
                    .iter()
                    .position(|l| &l.id == branch)
                    .or_else(|| {
                        self.net
                            .transformer_idx(branch)
                            .map(|t| self.net.lines.len() + t)
                    })
                    .map(|i| nb + i)
            }
        }
    }

    /// Sequential LP over the continuous setpoints with taps held. Rows
    /// that a candidate violates are tightened by the observed model error
    /// before the step is retried.
    fn continuous(&self, start: Point, obj: Objective) -> Point {
        let tol = match obj {
            Objective::Target(_) => 1e-9,
            _ => IMPROVEMENT_TOL,
        };
        let mut backoff = vec![0.0; 2 * self.net.buses.len() + self.net.lines.len() + self.net.transformers.len()];
        let mut cur = start;
        let mut frac = INITIAL_TRUST;
        let mut retries = 0;
        for _ in 0..MAX_SLP_ITER {
            if let Objective::Target(t) = obj {
                if cur.feasible() && (cur.q_if - t).abs() <= TARGET_TOL {
                    break;
                }
            }
            let Some((step, predicted)) = self.lp_step(&cur, obj, frac, &backoff) else {
                break;
            };
            if cur.feasible() && predicted < tol {
                if backoff.iter().any(|&b| b > WATCH_ONLY) {
                    backoff.iter_mut().for_each(|b| *b = if *b > WATCH_ONLY { 0.5 * *b } else { *b });
                    continue;
                }
                break;
            }
            let cand = self.eval(&cur.taps, &self.moved(&cur, &step, 1.0), Some(&cur.coupled.solution));
            match cand {
                Ok(c) if self.better(&c, &cur, obj) => {
                    let gain = self.score(&cur, obj) - self.score(&c, obj);
                    let was_feasible = cur.feasible();
                    cur = c;
                    retries = 0;
                    if was_feasible && gain < tol {
                        break;
                    }
                }
                Ok(c) if cur.feasible() && !c.feasible() && retries < 4 => {
                    retries += 1;
                    let nb = 2 * self.net.buses.len();
                    let loading = branch_loadings(self.net, &cur.coupled.solution, self.cs);
                    for v in &c.violations {
                        if let Some(r) = self.backoff_row(v) {
                            let modeled = r < nb || loading[r - nb] > THERMAL_WATCH || backoff[r] > 0.0;
                            backoff[r] += if modeled { 2.0 * v.excess() } else { WATCH_ONLY };
                        }
                    }
                }
                Ok(c) if cur.feasible() && !c.feasible() => {
                    retries = 0;
                    match self.line_search(&cur, &step) {
                        Some(b) if self.better(&b, &cur, obj) => cur = b,
                        _ => frac *= 0.5,
                    }
                }
                _ => frac *= 0.5,
            }
            if frac < MIN_TRUST {
                break;
            }
        }
        cur
    }

    /// Continuous optimisation followed by greedy one-step tap moves, each
    /// re-optimised continuously.
    fn optimize(&self, start: Point, obj: Objective) -> Point {
        let mut best = self.continuous(start, obj);
        for _ in 0..MAX_TAP_MOVES {
            if let Objective::Target(t) = obj {
                if best.feasible() && (best.q_if - t).abs() <= TARGET_TOL {
                    break;
                }
            }
            let mut improved: Option<Point> = None;
            for &t in &self.taps {
                let tr = &self.net.transformers[t];
                let tc = tr.tap.as_ref().expect("decision taps have changers");
                let pos = best.taps.position(self.net, t).unwrap_or(tc.position);
                for delta in [-1, 1] {
                    if !tc.contains(pos + delta) {
                        continue;
                    }
                    let mut taps = best.taps.clone();
                    taps.set(&tr.id, pos + delta);
                    let Ok(p0) = self.eval(&taps, &best.q, Some(&best.coupled.solution)) else {
                        continue;
                    };
                    let cand = self.continuous(p0, obj);
                    let reference = improved.as_ref().unwrap_or(&best);
                    if self.better(&cand, reference, obj) {
                        improved = Some(cand);
                    }
                }
            }
            match improved {
                Some(c) if self.better(&c, &best, obj) => best = c,
                _ => break,
            }
        }
        best
    }
}

fn tap_combinations(net: &Network, taps: &[usize], base: &TapVector) -> Vec<TapVector> {
    let mut combos = vec![base.clone()];
    for &t in taps {
        let tr = &net.transformers[t];
        let tc = tr.tap.as_ref().expect("decision taps have changers");
        combos = combos
            .into_iter()
            .flat_map(|c| {
                (tc.pos_min..=tc.pos_max).map(move |p| {
                    let mut c = c.clone();
                    c.set(&tr.id, p);
                    c
                })
            })
            .collect();
    }
    combos
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if hi - lo <= 0.0 {
        return vec![lo];
    }
    (0..n)
        .map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
        .collect()
}

// ---------------------------------------------------------------------------
// Flexibility ranges
// ---------------------------------------------------------------------------

/// Exhaustive enumeration of optimiser taps times a uniform q grid of
/// `resolution` points per controllable asset.
pub fn flex_range_oracle(
    net: &Network,
    ifc: &InterfaceSpec,
    cs: &ConstraintSet,
    resolution: usize,
) -> Result<FlexRange, FlexError> {
    let ctx = Ctx::new(net, ifc, cs);
    if ctx.taps.len() > ORACLE_MAX_TAPS || ctx.assets.len() > ORACLE_MAX_ASSETS {
        return Err(FlexError::OracleTooLarge {
            taps: ctx.taps.len(),
            assets: ctx.assets.len(),
        });
    }
    if resolution < 2 {
        return Err(FlexError::InvalidInput(format!("resolution must be at least 2, got {resolution}")));
    }
    let base = ctx.base_point()?;
    let combos = tap_combinations(net, &ctx.taps, &base.taps);
    let grids: Vec<Vec<f64>> = (0..ctx.assets.len())
        .map(|k| linspace(ctx.lo[k], ctx.hi[k], resolution))
        .collect();
    let per_combo: usize = grids.iter().map(Vec::len).product();
    let decode = |k: usize| -> (usize, Vec<f64>) {
        let mut r = k % per_combo;
        let mut q = vec![0.0; grids.len()];
        for j in (0..grids.len()).rev() {
            q[j] = grids[j][r % grids[j].len()];
            r /= grids[j].len();
        }
        (k / per_combo, q)
    };
    let start = &base.coupled.solution;
    let outcomes: Vec<Option<(f64, bool)>> = (0..combos.len() * per_combo)
        .into_par_iter()
        .map(|k| {
            let (c, q) = decode(k);
            ctx.eval(&combos[c], &q, Some(start))
                .ok()
                .map(|p| (p.q_if, p.feasible()))
        })
        .collect();

    let mut failed = 0;
    let (mut min, mut max): (Option<(usize, f64)>, Option<(usize, f64)>) = (None, None);
    for (k, o) in outcomes.iter().enumerate() {
        match *o {
            None => failed += 1,
            Some((q, true)) => {
                if min.is_none_or(|(_, m)| q < m) {
                    min = Some((k, q));
                }
                if max.is_none_or(|(_, m)| q > m) {
                    max = Some((k, q));
                }
            }
            Some(_) => {}
        }
    }
    let grid_step = (0..ctx.assets.len())
        .map(|k| (ctx.hi[k] - ctx.lo[k]) / (resolution - 1) as f64)
        .fold(0.0, f64::max);
    let witness = |k: usize| -> Result<SetpointBundle, FlexError> {
        let (c, q) = decode(k);
        let p = ctx.eval(&combos[c], &q, Some(start))?;
        Ok(ctx.bundle(&p, None))
    };
    let (feasible, q_min, q_max, witness_min, witness_max) = match (min, max) {
        (Some((kmin, qmin)), Some((kmax, qmax))) => (true, qmin, qmax, Some(witness(kmin)?), Some(witness(kmax)?)),
        _ => (false, base.q_if, base.q_if, None, None),
    };
    Ok(FlexRange {
        q_min,
        q_max,
        q_base: base.q_if,
        witness_min,
        witness_max,
        feasible,
        evaluations: ctx.evaluations(),
        failed_points: failed,
        grid_step,
    })
}

/// Sensitivity-guided search for the interface extremes: a trust-region
/// sequential LP over the continuous setpoints with greedy tap moves.
pub fn flex_range_sensitivity(net: &Network, ifc: &InterfaceSpec, cs: &ConstraintSet) -> Result<FlexRange, FlexError> {
    let ctx = Ctx::new(net, ifc, cs);
    let base = ctx.base_point()?;
    let hi = ctx.optimize(base.clone(), Objective::Max);
    let lo = ctx.optimize(base.clone(), Objective::Min);
    if !hi.feasible() || !lo.feasible() {
        return Err(FlexError::Infeasible {
            violations: base.violations,
        });
    }
    Ok(FlexRange {
        q_min: lo.q_if,
        q_max: hi.q_if,
        q_base: base.q_if,
        witness_min: Some(ctx.bundle(&lo, None)),
        witness_max: Some(ctx.bundle(&hi, None)),
        feasible: true,
        evaluations: ctx.evaluations(),
        failed_points: 0,
        grid_step: 0.0,
    })
}

// ---------------------------------------------------------------------------
// Allocation
// ---------------------------------------------------------------------------

/// Setpoints and taps minimising `|Q_if - q_target|` within the constraints.
/// Unreachable targets clamp to the nearest achievable flow.
pub fn allocate_setpoints(
    net: &Network,
    ifc: &InterfaceSpec,
    cs: &ConstraintSet,
    q_target: f64,
) -> Result<SetpointBundle, FlexError> {
    let ctx = Ctx::new(net, ifc, cs);
    let base = ctx.base_point()?;
    if base.feasible() && (base.q_if - q_target).abs() <= TARGET_TOL {
        return Ok(ctx.bundle(&base, Some(q_target)));
    }
    let best = ctx.optimize(base, Objective::Target(q_target));
    if !best.feasible() {
        return Err(FlexError::Infeasible {
            violations: best.violations,
        });
    }
    Ok(ctx.bundle(&best, Some(q_target)))
}

/// Continuous relaxation of the optimiser taps: one LP over setpoints and
/// fractional tap positions using Jacobian columns and one-step secants.
pub fn relaxed_tap_positions(
    net: &Network,
    ifc: &InterfaceSpec,
    cs: &ConstraintSet,
    q_target: f64,
) -> Result<BTreeMap<String, f64>, FlexError> {
    let ctx = Ctx::new(net, ifc, cs);
    let base = ctx.base_point()?;
    let sol = &base.coupled.solution;
    let slopes = local_q_slopes(net, &ctx.overrides(&base.q), sol);
    let (dv, g) = jacobian_sensitivities(net, sol, ifc, &base.taps, &ctx.assets, Some(&slopes))
        .map_err(ControlError::from)?;
    let mut lp = microlp::Problem::new(OptimizationDirection::Minimize);
    let mut cols: Vec<(microlp::Variable, Vec<f64>, f64)> = Vec::new();
    for k in 0..ctx.assets.len() {
        let v = lp.add_var(0.0, (ctx.lo[k] - base.q[k], ctx.hi[k] - base.q[k]));
        cols.push((v, (0..net.buses.len()).map(|b| dv[(b, k)]).collect(), g[k]));
    }
    let mut tap_vars = Vec::new();
    for &t in &ctx.taps {
        let tr = &net.transformers[t];
        let tc = tr.tap.as_ref().expect("decision taps have changers");
        let pos = base.taps.position(net, t).unwrap_or(tc.position);
        let mut up = base.taps.clone();
        let dir = if tc.contains(pos + 1) { 1 } else { -1 };
        up.set(&tr.id, pos + dir);
        let s = ctx.eval(&up, &base.q, Some(sol))?;
        let d = dir as f64;
        let v = lp.add_var(0.0, ((tc.pos_min - pos) as f64, (tc.pos_max - pos) as f64));
        let dvt = s.coupled.solution.vm.iter().zip(&sol.vm).map(|(a, b)| d * (a - b)).collect();
        cols.push((v, dvt, d * (s.q_if - base.q_if)));
        tap_vars.push((tr.id.clone(), v, pos as f64));
    }
    let e = lp.add_var(1.0, (0.0, f64::INFINITY));
    let d = base.q_if - q_target;
    let mut up: Vec<_> = cols.iter().map(|(v, _, gk)| (*v, -gk)).collect();
    up.push((e, 1.0));
    lp.add_constraint(up, ComparisonOp::Ge, d);
    let mut down: Vec<_> = cols.iter().map(|(v, _, gk)| (*v, *gk)).collect();
    down.push((e, 1.0));
    lp.add_constraint(down, ComparisonOp::Ge, -d);
    for b in 0..net.buses.len() {
        if b == ctx.slack {
            continue;
        }
        let s = lp.add_var(ELASTIC_COST, (0.0, f64::INFINITY));
        let mut r: Vec<_> = cols.iter().map(|(v, dvb, _)| (*v, dvb[b])).collect();
        r.push((s, -1.0));
        lp.add_constraint(r, ComparisonOp::Le, cs.v_max[b] - sol.vm[b]);
        let s = lp.add_var(ELASTIC_COST, (0.0, f64::INFINITY));
        let mut r: Vec<_> = cols.iter().map(|(v, dvb, _)| (*v, dvb[b])).collect();
        r.push((s, 1.0));
        lp.add_constraint(r, ComparisonOp::Ge, cs.v_min[b] - sol.vm[b]);
    }
    let solution = lp
        .solve()
        .ok()
        .and_then(|o| o.into_solution().ok())
        .ok_or_else(|| FlexError::InvalidInput("relaxation LP failed".into()))?;
    Ok(tap_vars
        .into_iter()
        .map(|(id, v, pos)| (id, pos + solution.var_value(v)))
        .collect())
}

/// Rounds fractional tap positions: floor/ceiling candidates ordered by the
/// secant-predicted deviation (ties toward neutral), the first whose
/// continuous re-dispatch is feasible wins.
pub fn round_and_fix_taps(
    net: &Network,
    ifc: &InterfaceSpec,
    cs: &ConstraintSet,
    q_target: f64,
    relaxed: &BTreeMap<String, f64>,
) -> Result<(TapVector, SetpointBundle), FlexError> {
    let ctx = Ctx::new(net, ifc, cs);
    let base = ctx.base_point()?;
    let mut choices: Vec<(usize, Vec<i32>)> = Vec::new();
    for (id, &x) in relaxed {
        let t = net
            .transformer_idx(id)
            .ok_or_else(|| FlexError::InvalidInput(format!("unknown transformer `{id}`")))?;
        let tc = net.transformers[t]
            .tap
            .as_ref()
            .ok_or_else(|| FlexError::InvalidInput(format!("`{id}` has no tap changer")))?;
        if !(x >= tc.pos_min as f64 - 1e-9 && x <= tc.pos_max as f64 + 1e-9) {
            return Err(FlexError::InvalidInput(format!("`{id}` position {x} out of bounds")));
        }
        let r = x.round();
        let cand = if (x - r).abs() <= 1e-9 {
            vec![r as i32]
        } else {
            vec![x.floor() as i32, x.ceil() as i32]
        };
        choices.push((t, cand));
    }

    let mut floor = base.taps.clone();
    for (t, c) in &choices {
        floor.set(&net.transformers[*t].id, c[0]);
    }
    let needs_secant = choices.iter().any(|(_, c)| c.len() > 1);
    let p0 = ctx.eval(&floor, &base.q, Some(&base.coupled.solution))?;
    let mut secant = vec![0.0; choices.len()];
    if needs_secant {
        for (k, (t, c)) in choices.iter().enumerate() {
            if c.len() > 1 {
                let mut up = floor.clone();
                up.set(&net.transformers[*t].id, c[1]);
                if let Ok(s) = ctx.eval(&up, &base.q, Some(&p0.coupled.solution)) {
                    secant[k] = s.q_if - p0.q_if;
                }
            }
        }
    }

    let mut combos: Vec<Vec<i32>> = vec![Vec::new()];
    for (_, c) in &choices {
        combos = combos
            .into_iter()
            .flat_map(|prefix| {
                c.iter().map(move |&p| {
                    let mut v = prefix.clone();
                    v.push(p);
                    v
                })
            })
            .collect();
    }
    let predicted = |combo: &[i32]| -> f64 {
        let q: f64 = p0.q_if
            + combo
                .iter()
                .zip(&choices)
                .zip(&secant)
                .map(|((&p, (_, c)), s)| (p - c[0]) as f64 * s)
                .sum::<f64>();
        (q - q_target).abs()
    };
    let from_neutral = |combo: &[i32]| -> i32 {
        combo
            .iter()
            .zip(&choices)
            .map(|(&p, (t, _))| (p - net.transformers[*t].tap.as_ref().unwrap().neutral).abs())
            .sum()
    };
    let mut ranked: Vec<(f64, i32, Vec<i32>)> = combos
        .into_iter()
        .map(|c| (predicted(&c), from_neutral(&c), c))
        .collect();
    ranked.sort_by(|a, b| {
        // Predictions equal to within solver noise count as ties.
        let pa = (a.0 * 1e9).round();
        let pb = (b.0 * 1e9).round();
        pa.total_cmp(&pb).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    });

    let mut last_violations = base.violations.clone();
    for (_, _, combo) in ranked {
        let mut taps = base.taps.clone();
        for (p, (t, _)) in combo.iter().zip(&choices) {
            taps.set(&net.transformers[*t].id, *p);
        }
        let Ok(start) = ctx.eval(&taps, &base.q, Some(&base.coupled.solution)) else {
            continue;
        };
        let best = ctx.continuous(start, Objective::Target(q_target));
        if best.feasible() {
            return Ok((taps, ctx.bundle(&best, Some(q_target))));
        }
        last_violations = best.violations;
    }
    Err(FlexError::Infeasible {
        violations: last_violations,
    })
}

// ---------------------------------------------------------------------------
// Level decomposition
// ---------------------------------------------------------------------------

/// One MV/LV substation: its LV subtree with a slack at the MV bus.
#[derive(Debug, Clone)]
pub struct SubProblem {
    pub transformer: String,
    pub mv_bus: String,
    pub net: Network,
    pub interface: InterfaceSpec,
    pub constraints: ConstraintSet,
    /// Interface flow at the operating point used for decomposition.
    pub q_base: f64,
    pub p_base: f64,
    /// Flexibility of the substation once computed.
    pub range: Option<FlexRange>,
}

impl SubProblem {
    /// Copy of the sub-network with the MV slack held at `v`.
    pub fn with_slack_voltage(&self, v: f64) -> Network {
        let mut net = self.net.clone();
        if let Some(s) = net.slack_idx() {
            net.buses[s].v_set = v;
        }
        net
    }
}

/// MV level with every substation collapsed into one controllable
/// aggregate injection.
#[derive(Debug, Clone)]
pub struct MasterProblem {
    pub net: Network,
    pub interface: InterfaceSpec,
    pub constraints: ConstraintSet,
    /// Aggregate asset index in `net.assets`, one per sub-problem.
    pub aggregates: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    pub subproblems: Vec<SubProblem>,
    pub master: MasterProblem,
}

pub const AGGREGATE_PREFIX: &str = "agg:";

fn induced(
    net: &Network,
    keep: &BTreeSet<usize>,
    slack: Option<(usize, f64)>,
    extra_assets: Vec<Asset>,
) -> Network {
    let buses = keep
        .iter()
        .map(|&i| {
            let mut b = net.buses[i].clone();
            match slack {
                Some((s, v)) if s == i => {
                    b.kind = BusKind::Slack;
                    b.v_set = v;
                }
                Some(_) => b.kind = BusKind::Load,
                None => {}
            }
            b
        })
        .collect();
    let inside = |id: &str| net.bus_idx(id).is_some_and(|b| keep.contains(&b));
    let lines = net
        .lines
        .iter()
        .filter(|l| inside(&l.from_bus) && inside(&l.to_bus))
        .cloned()
        .collect();
    let transformers = net
        .transformers
        .iter()
        .filter(|t| inside(&t.hv_bus) && inside(&t.lv_bus))
        .cloned()
        .collect();
    let mut assets: Vec<Asset> = net.assets.iter().filter(|a| inside(&a.bus)).cloned().collect();
    assets.extend(extra_assets);
    Network::new(net.s_base, buses, lines, transformers, assets)
}

/// Splits the problem below `ifc` into per-substation LV sub-problems and an
/// MV master problem, linearised around the current operating point.
pub fn decompose_by_level(net: &Network, ifc: &InterfaceSpec, cs: &ConstraintSet) -> Result<Decomposition, FlexError> {
    let base = coupled_power_flow_with(net, &QOverrides::new(), &TapVector::from_network(net), None, &EVAL_OPTIONS)?;
    let sol = &base.solution;
    let subs: Vec<usize> = net
        .transformers
        .iter()
        .enumerate()
        .filter(|&(t, tr)| {
            let (h, l) = (net.bus_idx(&tr.hv_bus), net.bus_idx(&tr.lv_bus));
            t != ifc.transformer
                && h.is_some_and(|h| ifc.buses.contains(&h) && net.buses[h].level == VoltageLevel::MV)
                && l.is_some_and(|l| net.buses[l].level == VoltageLevel::LV)
        })
        .map(|(t, _)| t)
        .collect();

    let mut lv_buses = BTreeSet::new();
    let mut subproblems = Vec::new();
    for &t in &subs {
        let tr = &net.transformers[t];
        let mv = net.bus_idx(&tr.hv_bus).expect("validated");
        let down = net.downstream_buses(t);
        lv_buses.extend(down.iter().copied());
        let mut keep = down.clone();
        keep.insert(mv);
        let sub_net = induced(net, &keep, Some((mv, sol.vm[mv])), Vec::new());
        let st = sub_net.transformer_idx(&tr.id).expect("kept");
        let interface = interface_unchecked(&sub_net, st);
        let mut constraints = cs.restricted(net, &sub_net);
        let slack = sub_net.slack_idx().expect("sub-network has a slack");
        constraints.v_min[slack] = 0.0;
        constraints.v_max[slack] = f64::INFINITY;
        let flow = &sol.transformers[t];
        subproblems.push(SubProblem {
            transformer: tr.id.clone(),
            mv_bus: tr.hv_bus.clone(),
            net: sub_net,
            interface,
            constraints,
            q_base: flow.q_from,
            p_base: flow.p_from,
            range: None,
        });
    }

    let keep: BTreeSet<usize> = (0..net.buses.len()).filter(|b| !lv_buses.contains(b)).collect();
    let aggregates: Vec<Asset> = subproblems
        .iter()
        .map(|s| Asset {
            id: format!("{AGGREGATE_PREFIX}{}", s.transformer),
            bus: s.mv_bus.clone(),
            kind: AssetKind::SubstationAggregate,
            p: -s.p_base,
            q_min: -s.q_base,
            q_max: -s.q_base,
            s_max: None,
            control: ControlCharacteristic::DirectSetpoint { q: -s.q_base },
            directly_controllable: true,
            q_setpoint: Some(-s.q_base),
        })
        .collect();
    let n_agg = aggregates.len();
    let master_net = induced(net, &keep, None, aggregates);
    let mt = master_net
        .transformer_idx(&ifc.transformer_id)
        .expect("interface transformer lies on the MV level");
    let interface = interface_unchecked(&master_net, mt);
    let constraints = cs.restricted(net, &master_net);
    let first = master_net.assets.len() - n_agg;
    Ok(Decomposition {
        subproblems,
        master: MasterProblem {
            net: master_net,
            interface,
            constraints,
            aggregates: (first..first + n_agg).collect(),
        },
    })
}

/// Result of a decomposed computation, verified on the full network.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalAllocation {
    pub bundle: SetpointBundle,
    /// Interface flow each substation is asked to realise, by transformer id.
    pub substation_q: BTreeMap<String, f64>,
    /// Expected MV-side voltage at each substation under the allocation.
    pub substation_v: BTreeMap<String, f64>,
    /// Master-level setpoints (MV assets and HV/MV taps).
    pub mv_setpoints: BTreeMap<String, f64>,
    pub mv_taps: TapVector,
}

impl Decomposition {
    /// Computes every substation's flexibility with the heuristic. Pinned
    /// substations keep a degenerate range at their current flow.
    pub fn compute_ranges(&mut self, pinned: &BTreeSet<String>) -> Result<(), FlexError> {
        for (k, sub) in self.subproblems.iter_mut().enumerate() {
            let range = if pinned.contains(&sub.transformer) || sub.interface.controllable_assets.is_empty() && {
                let own = sub.interface.tap_changers.iter().filter(|t| sub.constraints.controlled_taps.contains(t));
                own.count() == 0
            } {
                FlexRange {
                    q_min: sub.q_base,
                    q_max: sub.q_base,
                    q_base: sub.q_base,
                    witness_min: None,
                    witness_max: None,
                    feasible: true,
                    evaluations: 0,
                    failed_points: 0,
                    grid_step: 0.0,
                }
            } else {
                flex_range_sensitivity(&sub.net, &sub.interface, &sub.constraints)?
            };
            let a = self.master.aggregates[k];
            let asset = &mut self.master.net.assets[a];
            asset.q_min = -range.q_max;
            asset.q_max = -range.q_min;
            self.master.constraints.capabilities[a] = Capability::of(asset);
            sub.range = Some(range);
        }
        Ok(())
    }

    /// Expands a master-level bundle into a full-network bundle by
    /// allocating each aggregate's share on its sub-problem.
    fn disaggregate(&self, full: &Network, master: &SetpointBundle) -> Result<HierarchicalAllocation, FlexError> {
        let m = &self.master;
        let mut taps = TapVector::from_network(&m.net);
        for (id, &p) in &master.taps.0 {
            taps.set(id, p);
        }
        let solved = coupled_power_flow_with(&m.net, &master.overrides(&m.net), &taps, None, &EVAL_OPTIONS)?;
        let mut out_taps = TapVector::from_network(full);
        for (id, &p) in &taps.0 {
            out_taps.set(id, p);
        }
        let mut q_setpoints = BTreeMap::new();
        let mut mv_setpoints = BTreeMap::new();
        for (id, &q) in &master.q_setpoints {
            if !id.starts_with(AGGREGATE_PREFIX) {
                q_setpoints.insert(id.clone(), q);
                mv_setpoints.insert(id.clone(), q);
            }
        }
        let mut substation_q = BTreeMap::new();
        let mut substation_v = BTreeMap::new();
        for (k, sub) in self.subproblems.iter().enumerate() {
            let agg = &m.net.assets[m.aggregates[k]];
            let target = -master.q_setpoints.get(&agg.id).copied().unwrap_or(-sub.q_base);
            let v = solved.solution.vm[m.net.bus_idx(&sub.mv_bus).expect("kept")];
            substation_q.insert(sub.transformer.clone(), target);
            substation_v.insert(sub.transformer.clone(), v);
            if sub.interface.controllable_assets.is_empty() && sub.interface.tap_changers.is_empty() {
                continue;
            }
            let local = sub.with_slack_voltage(v);
            let b = match allocate_setpoints(&local, &sub.interface, &sub.constraints, target) {
                Ok(b) => b,
                Err(FlexError::Infeasible { .. }) => continue,
                Err(e) => return Err(e),
            };
            for (id, &p) in &b.taps.0 {
                out_taps.set(id, p);
            }
            q_setpoints.extend(b.q_setpoints);
        }
        Ok(HierarchicalAllocation {
            bundle: SetpointBundle {
                taps: out_taps,
                q_setpoints,
                achieved_q_if: f64::NAN,
                deviation: 0.0,
            },
            substation_q,
            substation_v,
            mv_setpoints,
            mv_taps: taps,
        })
    }

    fn full_point(&self, ctx: &Ctx, base: &Point, alloc: &HierarchicalAllocation) -> Result<Point, FlexError> {
        let q: Vec<f64> = ctx
            .assets
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                alloc
                    .bundle
                    .q_setpoints
                    .get(&ctx.net.assets[i].id)
                    .copied()
                    .unwrap_or(base.q[k])
            })
            .collect();
        Ok(ctx.eval(&alloc.bundle.taps, &q, Some(&base.coupled.solution))?)
    }

    /// Verifies an expanded bundle on the full network. A violating bundle
    /// is pulled back by bisection: toward the operating point when that is
    /// feasible, otherwise toward `master_base` in the master problem.
    fn verify(
        &self,
        ctx: &Ctx,
        base: &Point,
        alloc: &mut HierarchicalAllocation,
        master: (&SetpointBundle, &SetpointBundle),
        target: Option<f64>,
    ) -> Result<Point, FlexError> {
        let mut point = self.full_point(ctx, base, alloc)?;
        if !point.feasible() {
            let taps = alloc.bundle.taps.clone();
            let q = point.q.clone();
            let blend = |t: f64| -> Vec<f64> { base.q.iter().zip(&q).map(|(a, b)| a + t * (b - a)).collect() };
            let mut best = ctx.eval(&taps, &base.q, Some(&base.coupled.solution)).ok().filter(Point::feasible);
            if best.is_some() {
                let (mut lo, mut hi) = (0.0, 1.0);
                for _ in 0..30 {
                    let mid = 0.5 * (lo + hi);
                    match ctx.eval(&taps, &blend(mid), Some(&base.coupled.solution)) {
                        Ok(p) if p.feasible() => {
                            lo = mid;
                            best = Some(p);
                        }
                        _ => hi = mid,
                    }
                }
            } else {
                let (mb, mw) = master;
                let mix = |t: f64| -> SetpointBundle {
                    let mut b = mw.clone();
                    for (id, q) in b.q_setpoints.iter_mut() {
                        let q0 = mb.q_setpoints.get(id).copied().unwrap_or(*q);
                        *q = q0 + t * (*q - q0);
                    }
                    b
                };
                let (mut lo, mut hi) = (0.0, 1.0);
                for k in 0..24 {
                    let mid = if k == 0 { 0.0 } else { 0.5 * (lo + hi) };
                    let a = self.disaggregate(ctx.net, &mix(mid))?;
                    match self.full_point(ctx, base, &a) {
                        Ok(p) if p.feasible() => {
                            lo = mid;
                            best = Some(p);
                            *alloc = a;
                        }
                        _ if k == 0 => break,
                        _ => hi = mid,
                    }
                }
            }
            point = match best {
                Some(b) => b,
                None if base.feasible() => base.clone(),
                None => {
                    return Err(FlexError::Infeasible {
                        violations: point.violations,
                    })
                }
            };
        }
        alloc.bundle.q_setpoints = ctx.bundle(&point, target).q_setpoints;
        alloc.bundle.taps = point.taps.clone();
        alloc.bundle.achieved_q_if = point.q_if;
        alloc.bundle.deviation = target.map_or(0.0, |t| t - point.q_if);
        Ok(point)
    }

    /// Flexibility at the HV/MV interface from the per-level problems, with
    /// witnesses verified on `full`. Requires [`Decomposition::compute_ranges`].
    pub fn flex_range(&self, full: &Network, ifc: &InterfaceSpec, cs: &ConstraintSet) -> Result<FlexRange, FlexError> {
        let m = &self.master;
        let master = flex_range_sensitivity(&m.net, &m.interface, &m.constraints)?;
        let ctx = Ctx::new(full, ifc, cs);
        let base = ctx.base_point()?;
        let mctx = Ctx::new(&m.net, &m.interface, &m.constraints);
        let mbase = mctx.bundle(&mctx.base_point()?, None);
        let mut ends = Vec::new();
        for w in [&master.witness_min, &master.witness_max] {
            let w = w.as_ref().expect("feasible range carries witnesses");
            let mut alloc = self.disaggregate(full, w)?;
            self.verify(&ctx, &base, &mut alloc, (&mbase, w), None)?;
            ends.push(alloc.bundle);
        }
        let (wmax, wmin) = (ends.pop().unwrap(), ends.pop().unwrap());
        Ok(FlexRange {
            q_min: if base.feasible() { wmin.achieved_q_if.min(base.q_if) } else { wmin.achieved_q_if },
            q_max: if base.feasible() { wmax.achieved_q_if.max(base.q_if) } else { wmax.achieved_q_if },
            q_base: base.q_if,
            witness_min: Some(wmin),
            witness_max: Some(wmax),
            feasible: true,
            evaluations: master.evaluations + ctx.evaluations(),
            failed_points: 0,
            grid_step: 0.0,
        })
    }

    /// Allocates `q_target` at the HV/MV interface: proportional to each
    /// aggregate's headroom first, polished by the sequential LP, then
    /// disaggregated and verified on `full`. Requires
    /// [`Decomposition::compute_ranges`].
    pub fn allocate(
        &self,
        full: &Network,
        ifc: &InterfaceSpec,
        cs: &ConstraintSet,
        q_target: f64,
    ) -> Result<HierarchicalAllocation, FlexError> {
        let m = &self.master;
        let mctx = Ctx::new(&m.net, &m.interface, &m.constraints);
        let fctx = Ctx::new(full, ifc, cs);
        let fbase = fctx.base_point()?;
        let mbase = mctx.base_point()?;
        let mut master_target = q_target;
        let mut best: Option<(f64, HierarchicalAllocation)> = None;
        for _ in 0..3 {
            let point = proportional(&mctx, &mbase, master_target);
            let point = if point.feasible() && (point.q_if - master_target).abs() <= TARGET_TOL {
                point
            } else {
                mctx.optimize(point, Objective::Target(master_target))
            };
            if !point.feasible() {
                break;
            }
            let mb = mctx.bundle(&point, Some(master_target));
            let mut alloc = self.disaggregate(full, &mb)?;
            let verified = self.verify(&fctx, &fbase, &mut alloc, (&mctx.bundle(&mbase, None), &mb), Some(q_target))?;
            let dev = (verified.q_if - q_target).abs();
            if best.as_ref().is_none_or(|(d, _)| dev < *d) {
                best = Some((dev, alloc));
            }
            if dev <= TARGET_TOL {
                break;
            }
            master_target += q_target - verified.q_if;
        }
        match best {
            Some((_, a)) => Ok(a),
            None => Err(FlexError::Infeasible {
                violations: mbase.violations,
            }),
        }
    }
}

/// Moves every decision asset by the same fraction of its headroom toward
/// the target, the fraction found by bisection on exact evaluations.
fn proportional(ctx: &Ctx, base: &Point, target: f64) -> Point {
    let at = |lambda: f64| -> Vec<f64> {
        (0..ctx.assets.len())
            .map(|k| {
                if lambda >= 0.0 {
                    base.q[k] + lambda * (ctx.hi[k] - base.q[k])
                } else {
                    base.q[k] + lambda * (base.q[k] - ctx.lo[k])
                }
            })
            .collect()
    };
    if ctx.assets.is_empty() || (base.q_if - target).abs() <= TARGET_TOL {
        return base.clone();
    }
    let mut best = base.clone();
    for end in [1.0, -1.0] {
        let Ok(p_end) = ctx.eval(&base.taps, &at(end), Some(&base.coupled.solution)) else {
            continue;
        };
        let f0 = base.q_if - target;
        let f1 = p_end.q_if - target;
        if f0.signum() == f1.signum() {
            if p_end.feasible() && f1.abs() < (best.q_if - target).abs() {
                best = p_end;
            }
            continue;
        }
        let (mut lo, mut hi) = (0.0, end);
        for _ in 0..50 {
            let mid = 0.5 * (lo + hi);
            let Ok(p) = ctx.eval(&base.taps, &at(mid), Some(&best.coupled.solution)) else {
                hi = mid;
                continue;
            };
            let f = p.q_if - target;
            if p.feasible() && ctx.better(&p, &best, Objective::Target(target)) {
                best = p;
            }
            if f.abs() <= TARGET_TOL * 0.1 {
                break;
            }
            if f.signum() == f0.signum() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        break;
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::coupled_power_flow;
    use crate::fixture;
    use crate::grid::interface_of;

    #[test]
    fn flat_case_has_no_violations() {
        let net = fixture::two_bus_transformer(0.01);
        let cs = ConstraintSet::from_network(&net);
        let c = coupled_power_flow(&net, &QOverrides::new(), &TapVector::from_network(&net)).unwrap();
        assert!(check_constraints(&net, &c.solution, &cs).is_empty());
    }

    #[test]
    fn undervoltage_magnitude() {
        let net = fixture::two_bus(0.0, 0.1, 0.0, 0.0);
        let mut cs = ConstraintSet::from_network(&net);
        let c = coupled_power_flow(&net, &QOverrides::new(), &TapVector::default()).unwrap();
        let mut sol = c.solution;
        sol.vm[1] = 0.89;
        cs.v_min[1] = 0.90;
        let v = check_constraints(&net, &sol, &cs);
        assert_eq!(v.len(), 1);
        match &v[0] {
            Violation::Voltage { bus, bound, magnitude, .. } => {
                assert_eq!((bus.as_str(), *bound), ("b2", Bound::Lower));
                assert!((magnitude - 0.01).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn thermal_overload() {
        let net = fixture::two_bus(0.0, 0.1, -0.5, 0.0);
        let c = coupled_power_flow(&net, &QOverrides::new(), &TapVector::default()).unwrap();
        let mut cs = ConstraintSet::from_network(&net);
        let i = c.solution.lines[0].i_from.max(c.solution.lines[0].i_to);
        cs.line_rating[0] = i / 1.2;
        let v = check_constraints(&net, &c.solution, &cs);
        assert_eq!(v.len(), 1);
        assert!(matches!(v[0], Violation::Thermal { loading, .. } if (loading - 1.2).abs() < 1e-9));
    }

    #[test]
    fn oracle_trivial_without_decisions() {
        let net = fixture::two_bus_transformer(0.01);
        let ifc = interface_of(&net, "t1").unwrap();
        let cs = ConstraintSet::from_network(&net).with_controlled_taps(&net, []);
        let r = flex_range_oracle(&net, &ifc, &cs, DEFAULT_RESOLUTION).unwrap();
        assert!(r.feasible);
        assert_eq!(r.q_min, r.q_max);
    }

    #[test]
    fn oracle_guard() {
        let inst = fixture::random_instance(3, &fixture::RandomSpec::default());
        let mut net = inst.net.clone();
        for k in 0..5 {
            let mut a = net.assets.iter().find(|a| a.directly_controllable).unwrap().clone();
            a.id = format!("extra{k}");
            net.assets.push(a);
        }
        let ifc = interface_of(&net, &inst.interface).unwrap();
        let cs = ConstraintSet::from_network(&net);
        assert!(matches!(
            flex_range_oracle(&net, &ifc, &cs, 3),
            Err(FlexError::OracleTooLarge { .. })
        ));
    }

    #[test]
    fn infeasible_when_bound_excludes_everything() {
        let net = fixture::two_bus_der(0.1);
        let ifc = interface_of(&net, "t1").unwrap();
        let mut cs = ConstraintSet::from_network(&net);
        let b2 = net.bus_idx("b2").unwrap();
        cs.v_min[b2] = 1.2;
        cs.v_max[b2] = 1.3;
        let r = flex_range_oracle(&net, &ifc, &cs, 5).unwrap();
        assert!(!r.feasible);
        assert!(matches!(
            flex_range_sensitivity(&net, &ifc, &cs),
            Err(FlexError::Infeasible { .. })
        ));
    }

    #[test]
    fn allocation_at_base_is_noop() {
        let net = fixture::two_bus_transformer(0.01);
        let ifc = interface_of(&net, "t1").unwrap();
        let cs = ConstraintSet::from_network(&net).with_controlled_taps(&net, []);
        let c = coupled_power_flow(&net, &QOverrides::new(), &TapVector::from_network(&net)).unwrap();
        let b = allocate_setpoints(&net, &ifc, &cs, interface_q(&c.solution, &ifc)).unwrap();
        assert!(b.q_setpoints.is_empty());
        assert!(b.deviation.abs() <= TARGET_TOL);
    }

    #[test]
    fn integral_tap_kept() {
        let net = fixture::two_bus_der(0.1);
        let ifc = interface_of(&net, "t1").unwrap();
        let mut net = net;
        net.transformers[0].tap = fixture::two_bus_transformer(0.01).transformers[0].tap.clone();
        let cs = ConstraintSet::from_network(&net);
        let relaxed = BTreeMap::from([("t1".to_string(), 2.0)]);
        let (taps, _) = round_and_fix_taps(&net, &ifc, &cs, 0.2, &relaxed).unwrap();
        assert_eq!(taps.get("t1"), Some(2));
    }

    #[test]
    fn rounding_tie_goes_to_neutral() {
        // A regulator feeding an empty bus cannot change the interface flow,
        // so floor and ceiling predict the same deviation.
        let mut net = fixture::two_bus_der(0.1);
        let mut buses = net.buses.clone();
        buses.push(crate::grid::Bus {
            id: "spur".into(),
            ..net.buses[2].clone()
        });
        let mut trafos = net.transformers.clone();
        let mut reg = fixture::two_bus_transformer(0.01).transformers[0].clone();
        reg.id = "reg".into();
        reg.hv_bus = "b2".into();
        reg.lv_bus = "spur".into();
        reg.is_interface = false;
        trafos.push(reg);
        net = Network::new(net.s_base, buses, net.lines, trafos, net.assets);
        assert!(crate::grid::validate(&net).is_valid());
        let ifc = interface_of(&net, "t1").unwrap();
        let cs = ConstraintSet::from_network(&net);
        let relaxed = BTreeMap::from([("reg".to_string(), 2.4)]);
        let (taps, _) = round_and_fix_taps(&net, &ifc, &cs, 0.1, &relaxed).unwrap();
        assert_eq!(taps.get("reg"), Some(2));
    }
}
