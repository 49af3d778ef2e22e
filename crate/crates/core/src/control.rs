//! Local, communication-free control laws and their coupling with the
//! power flow.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::grid::{Asset, Network, TapChanger};
use crate::powerflow::{
    solve_power_flow_from, Dispatch, PfOptions, PowerFlowError, PowerFlowSolution, TapVector,
};

/// Damping factor of the fixed-point iteration between local controls and
/// the power flow.
pub const PICARD_DAMPING: f64 = 0.5;
/// Convergence threshold on the reactive power update, per-unit.
pub const PICARD_TOL: f64 = 1e-6;
pub const PICARD_MAX_ITER: usize = 100;
/// Upper bound on OLTC automaton iterations within one step.
pub const MAX_TAP_ITERATIONS: usize = 20;

/// Piecewise-linear curve with strictly increasing abscissae and flat
/// extrapolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Curve(pub Vec<(f64, f64)>);

impl Curve {
    /// Default Q(V) droop in fractions of `q_max`.
    pub fn default_q_of_v() -> Self {
        Curve(vec![(0.93, 1.0), (0.97, 0.0), (1.03, 0.0), (1.07, -1.0)])
    }

    pub fn check(&self) -> Result<(), String> {
        if self.0.is_empty() {
            return Err("curve has no breakpoints".into());
        }
        if self.0.windows(2).any(|w| !(w[0].0 < w[1].0)) {
            return Err("curve breakpoints must be strictly increasing".into());
        }
        if self.0.iter().any(|&(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err("curve breakpoints must be finite".into());
        }
        Ok(())
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.eval_with_slope(x).0
    }

    /// Value and derivative at `x`; the derivative is zero on the flat
    /// extrapolated parts.
    pub fn eval_with_slope(&self, x: f64) -> (f64, f64) {
        let pts = &self.0;
        let (first, last) = (pts[0], pts[pts.len() - 1]);
        if x <= first.0 {
            return (first.1, 0.0);
        }
        if x >= last.0 {
            return (last.1, 0.0);
        }
        let k = pts.partition_point(|p| p.0 <= x);
        let (a, b) = (pts[k - 1], pts[k]);
        let slope = (b.1 - a.1) / (b.0 - a.0);
        (a.1 + slope * (x - a.0), slope)
    }
}

fn default_curve() -> Curve {
    Curve::default_q_of_v()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Excitation {
    /// Absorbs reactive power (inductive behaviour, `q < 0`).
    Underexcited,
    /// Delivers reactive power (`q > 0`).
    Overexcited,
}

/// Autonomous law applied when no fresh external setpoint is available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FallbackLaw {
    QOfV {
        #[serde(default = "default_curve")]
        points: Curve,
    },
    /// Fixed reactive power, per-unit in memory and MVar on file.
    Constant { q: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ControlCharacteristic {
    FixedCosPhi { cos_phi: f64, excitation: Excitation },
    /// Q(V) with `q` expressed as a fraction of `q_max`.
    QOfV {
        #[serde(default = "default_curve")]
        points: Curve,
    },
    /// Q(P) with `p` as a fraction of `s_max` and `q` as a fraction of `q_max`.
    QOfP { points: Curve },
    /// Fixed reactive power, per-unit in memory and MVar on file.
    DirectSetpoint { q: f64 },
    /// Accepts external setpoints; follows `profile` without one.
    FallbackProfile { profile: FallbackLaw },
}

impl Default for ControlCharacteristic {
    fn default() -> Self {
        ControlCharacteristic::FixedCosPhi {
            cos_phi: 1.0,
            excitation: Excitation::Underexcited,
        }
    }
}

impl ControlCharacteristic {
    pub fn depends_on_voltage(&self) -> bool {
        matches!(
            self,
            ControlCharacteristic::QOfV { .. }
                | ControlCharacteristic::FallbackProfile {
                    profile: FallbackLaw::QOfV { .. }
                }
        )
    }

    pub fn admits_setpoint(&self) -> bool {
        matches!(
            self,
            ControlCharacteristic::DirectSetpoint { .. } | ControlCharacteristic::FallbackProfile { .. }
        )
    }

    pub fn check(&self) -> Result<(), String> {
        match self {
            ControlCharacteristic::FixedCosPhi { cos_phi, .. } => {
                if !(*cos_phi > 0.0 && *cos_phi <= 1.0) {
                    return Err(format!("cos_phi must lie in (0, 1], got {cos_phi}"));
                }
                Ok(())
            }
            ControlCharacteristic::QOfV { points }
            | ControlCharacteristic::QOfP { points }
            | ControlCharacteristic::FallbackProfile {
                profile: FallbackLaw::QOfV { points },
            } => points.check(),
            ControlCharacteristic::DirectSetpoint { .. }
            | ControlCharacteristic::FallbackProfile {
                profile: FallbackLaw::Constant { .. },
            } => Ok(()),
        }
    }

    /// Copy with all absolute reactive-power values multiplied by `factor`
    /// (unit conversion between MVar and per-unit).
    pub fn scaled(&self, factor: f64) -> Self {
        match self {
            ControlCharacteristic::DirectSetpoint { q } => ControlCharacteristic::DirectSetpoint { q: q * factor },
            ControlCharacteristic::FallbackProfile {
                profile: FallbackLaw::Constant { q },
            } => ControlCharacteristic::FallbackProfile {
                profile: FallbackLaw::Constant { q: q * factor },
            },
            other => other.clone(),
        }
    }
}

/// Reactive capability box and apparent power circle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Capability {
    pub q_min: f64,
    pub q_max: f64,
    pub s_max: Option<f64>,
}

impl Capability {
    pub fn of(asset: &Asset) -> Self {
        Capability {
            q_min: asset.q_min,
            q_max: asset.q_max,
            s_max: asset.s_max,
        }
    }

    /// Admissible reactive interval at active power `p`.
    pub fn bounds_at(&self, p: f64) -> (f64, f64) {
        let (mut lo, mut hi) = (self.q_min, self.q_max);
        if let Some(s) = self.s_max {
            let r = (s * s - p * p).max(0.0).sqrt();
            lo = lo.max(-r);
            hi = hi.min(r);
        }
        (lo, hi.max(lo))
    }

    pub fn clamp(&self, q: f64, p: f64) -> f64 {
        let (lo, hi) = self.bounds_at(p);
        q.clamp(lo, hi)
    }
}

/// Raw (unclamped) law output and its voltage derivative.
fn raw_characteristic(c: &ControlCharacteristic, v: f64, p: f64, limits: &Capability) -> (f64, f64) {
    let curve_q = |points: &Curve, x: f64| {
        let (f, df) = points.eval_with_slope(x);
        (f * limits.q_max, df * limits.q_max)
    };
    match c {
        ControlCharacteristic::FixedCosPhi { cos_phi, excitation } => {
            let tan_phi = (1.0 - cos_phi * cos_phi).max(0.0).sqrt() / cos_phi;
            let q = p.abs() * tan_phi;
            match excitation {
                Excitation::Underexcited => (-q, 0.0),
                Excitation::Overexcited => (q, 0.0),
            }
        }
        ControlCharacteristic::QOfV { points } => curve_q(points, v),
        ControlCharacteristic::QOfP { points } => {
            let x = limits.s_max.map_or(p, |s| p / s);
            (curve_q(points, x).0, 0.0)
        }
        ControlCharacteristic::DirectSetpoint { q } => (*q, 0.0),
        ControlCharacteristic::FallbackProfile { profile } => match profile {
            FallbackLaw::QOfV { points } => curve_q(points, v),
            FallbackLaw::Constant { q } => (*q, 0.0),
        },
    }
}

/// Reactive power the law emits at terminal voltage `v` and active power
/// `p`, clamped into the capability.
pub fn eval_characteristic(c: &ControlCharacteristic, v: f64, p: f64, limits: &Capability) -> f64 {
    let (q, _) = raw_characteristic(c, v, p, limits);
    limits.clamp(q, p)
}

/// `dq/dv` of the clamped law (zero where clamping is active).
pub fn characteristic_slope(c: &ControlCharacteristic, v: f64, p: f64, limits: &Capability) -> f64 {
    let (q, dq) = raw_characteristic(c, v, p, limits);
    let (lo, hi) = limits.bounds_at(p);
    if q < lo || q > hi {
        0.0
    } else {
        dq
    }
}

/// Which autonomous law an asset falls back to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FallbackPolicy {
    /// The asset's own configured profile; assets without one use the
    /// default Q(V) curve.
    AssetProfile,
    /// Always the default Q(V) curve.
    DefaultQofV,
    /// A fixed reactive power in per-unit.
    Constant(f64),
}

/// Reactive power an asset applies autonomously when no central setpoint
/// is fresh.
pub fn fallback_setpoint(asset: &Asset, policy: FallbackPolicy, local_v: f64, local_p: f64) -> f64 {
    let limits = Capability::of(asset);
    let default = ControlCharacteristic::QOfV {
        points: Curve::default_q_of_v(),
    };
    let law = match policy {
        FallbackPolicy::DefaultQofV => default,
        FallbackPolicy::Constant(q) => ControlCharacteristic::DirectSetpoint { q },
        FallbackPolicy::AssetProfile => match &asset.control {
            ControlCharacteristic::DirectSetpoint { .. } => default,
            other => other.clone(),
        },
    };
    eval_characteristic(&law, local_v, local_p, &limits)
}

/// Reactive power overrides by asset index; these win over every
/// characteristic and over the asset's stored setpoint.
pub type QOverrides = BTreeMap<usize, f64>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ControlError {
    #[error("local control fixed point diverged after {iterations} iterations (oscillation {amplitude:.3e} pu)")]
    FixedPointDivergence { iterations: usize, amplitude: f64 },
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledSolution {
    pub solution: PowerFlowSolution,
    /// Injections used for `solution`; re-solving with them reproduces it.
    pub dispatch: Dispatch,
    pub outer_iterations: usize,
}

enum QSource {
    Fixed(f64),
    Law,
}

fn q_source(asset: &Asset, ov: Option<f64>) -> QSource {
    if let Some(q) = ov.or(asset.q_setpoint) {
        return QSource::Fixed(q);
    }
    QSource::Law
}

/// Power flow with every Q(V)/Q(P)/cos(φ) asset at its characteristic,
/// found by damped fixed-point iteration.
pub fn coupled_power_flow(
    net: &Network,
    overrides: &QOverrides,
    taps: &TapVector,
) -> Result<CoupledSolution, ControlError> {
    coupled_power_flow_from(net, overrides, taps, None)
}

/// [`coupled_power_flow`] with an optional warm start for the inner solves.
pub fn coupled_power_flow_from(
    net: &Network,
    overrides: &QOverrides,
    taps: &TapVector,
    start: Option<&PowerFlowSolution>,
) -> Result<CoupledSolution, ControlError> {
    coupled_power_flow_with(net, overrides, taps, start, &CoupledOptions::default())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoupledOptions {
    /// Fixed-point threshold on the reactive power update. Running out of
    /// iterations is only an error if the update is still above
    /// [`PICARD_TOL`].
    pub picard_tol: f64,
    /// Mismatch tolerance of the inner power flows.
    pub pf_tol: f64,
    /// Per-asset secant step in `[PICARD_DAMPING, 1]` instead of the fixed
    /// damping. Same fixed point, fewer iterations on soft feeders.
    pub secant: bool,
}

impl Default for CoupledOptions {
    fn default() -> Self {
        CoupledOptions {
            picard_tol: PICARD_TOL,
            pf_tol: PfOptions::default().tol,
            secant: false,
        }
    }
}

/// [`coupled_power_flow_from`] with explicit tolerances.
pub fn coupled_power_flow_with(
    net: &Network,
    overrides: &QOverrides,
    taps: &TapVector,
    start: Option<&PowerFlowSolution>,
    copts: &CoupledOptions,
) -> Result<CoupledSolution, ControlError> {
    let tol = copts.picard_tol;
    let n = net.assets.len();
    let bus_of: Vec<usize> = net
        .assets
        .iter()
        .map(|a| net.bus_idx(&a.bus).expect("asset bus resolves"))
        .collect();
    let limits: Vec<Capability> = net.assets.iter().map(Capability::of).collect();
    let sources: Vec<QSource> = net
        .assets
        .iter()
        .enumerate()
        .map(|(i, a)| q_source(a, overrides.get(&i).copied()))
        .collect();
    let coupled: Vec<usize> = (0..n)
        .filter(|&i| matches!(sources[i], QSource::Law) && net.assets[i].control.depends_on_voltage())
        .collect();

    let law_q = |i: usize, v: f64| eval_characteristic(&net.assets[i].control, v, net.assets[i].p, &limits[i]);
    let v_start = |i: usize| start.map_or(1.0, |s| s.vm[bus_of[i]]);
    let mut dispatch = Dispatch {
        p: net.assets.iter().map(|a| a.p).collect(),
        q: (0..n)
            .map(|i| match sources[i] {
                QSource::Fixed(q) => q,
                QSource::Law => law_q(i, v_start(i)),
            })
            .collect(),
    };
    let mut opts = PfOptions {
        tol: copts.pf_tol,
        ..PfOptions::default()
    };
    if start.is_some() {
        opts.flat_start = false;
    }
    let mut sol = solve_power_flow_from(net, &dispatch, taps, &opts, start)?;
    if coupled.is_empty() {
        return Ok(CoupledSolution {
            solution: sol,
            dispatch,
            outer_iterations: 1,
        });
    }
    opts.flat_start = false;
    let mut amplitude = f64::INFINITY;
    let mut last = None;
    let mut secant = copts.secant;
    // Previous (q, residual) per asset for the secant step.
    let mut prev: Vec<Option<(f64, f64)>> = vec![None; n];
    for it in 1..=PICARD_MAX_ITER {
        let previous_amplitude = amplitude;
        amplitude = 0.0;
        let mut next = dispatch.q.clone();
        let mut steps = Vec::with_capacity(coupled.len());
        for &i in &coupled {
            let target = law_q(i, sol.vm[bus_of[i]]);
            let r = target - dispatch.q[i];
            amplitude = amplitude.max(r.abs());
            let mut alpha = PICARD_DAMPING;
            if let Some((q0, r0)) = prev[i] {
                let dq = dispatch.q[i] - q0;
                if dq.abs() > 1e-14 {
                    let d = (r - r0) / dq;
                    if d < -1.0 {
                        alpha = (-1.0 / d).max(PICARD_DAMPING);
                    } else {
                        alpha = 1.0;
                    }
                }
            }
            steps.push((i, r, alpha));
        }
        if amplitude > previous_amplitude {
            secant = false;
        }
        for (i, r, alpha) in steps {
            let alpha = if secant { alpha } else { PICARD_DAMPING };
            prev[i] = Some((dispatch.q[i], r));
            next[i] = dispatch.q[i] + alpha * r;
        }
        if amplitude <= tol {
            return Ok(CoupledSolution {
                solution: sol,
                dispatch,
                outer_iterations: it,
            });
        }
        if amplitude <= PICARD_TOL {
            last = Some((sol.clone(), dispatch.clone(), it));
        }
        dispatch.q = next;
        sol = solve_power_flow_from(net, &dispatch, taps, &opts, Some(&sol))?;
    }
    if let Some((solution, dispatch, outer_iterations)) = last {
        return Ok(CoupledSolution {
            solution,
            dispatch,
            outer_iterations,
        });
    }
    Err(ControlError::FixedPointDivergence {
        iterations: PICARD_MAX_ITER,
        amplitude,
    })
}

/// Per-bus `dQ/dV` of voltage-dependent injections at a solution, for
/// closed-loop sensitivities.
pub fn local_q_slopes(net: &Network, overrides: &QOverrides, sol: &PowerFlowSolution) -> Vec<f64> {
    let mut slopes = vec![0.0; net.buses.len()];
    for (i, a) in net.assets.iter().enumerate() {
        if overrides.contains_key(&i) || !a.is_voltage_dependent() {
            continue;
        }
        let b = net.bus_idx(&a.bus).expect("asset bus resolves");
        slopes[b] += characteristic_slope(&a.control, sol.vm[b], a.p, &Capability::of(a));
    }
    slopes
}

// ---------------------------------------------------------------------------
// OLTC automaton
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OltcState {
    pub position: i32,
    /// Consecutive evaluations outside the deadband on the current side.
    pub violation_counter: u32,
    /// Side of the current violation: -1 below, +1 above, 0 none.
    pub side: i8,
}

impl OltcState {
    pub fn at(tc: &TapChanger) -> Self {
        OltcState {
            position: tc.position,
            violation_counter: 0,
            side: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OltcOutcome {
    pub state: OltcState,
    /// Position change in `{-1, 0, +1}`; `+1` raises the LV voltage.
    pub tap_delta: i32,
    /// A step was due but the position limit blocked it.
    pub saturated: bool,
}

/// One evaluation of the deadband/delay automaton.
pub fn oltc_step(state: OltcState, tc: &TapChanger, v_measured: f64) -> OltcOutcome {
    let error = v_measured - tc.v_setpoint;
    if error.abs() <= tc.deadband {
        return OltcOutcome {
            state: OltcState {
                position: state.position,
                violation_counter: 0,
                side: 0,
            },
            tap_delta: 0,
            saturated: false,
        };
    }
    let side: i8 = if error < 0.0 { -1 } else { 1 };
    let counter = if side == state.side {
        state.violation_counter + 1
    } else {
        1
    };
    if counter < tc.delay_steps.max(1) {
        return OltcOutcome {
            state: OltcState {
                position: state.position,
                violation_counter: counter,
                side,
            },
            tap_delta: 0,
            saturated: false,
        };
    }
    // Voltage low -> raise the LV side.
    let delta = -(side as i32);
    let target = state.position + delta;
    if !tc.contains(target) {
        return OltcOutcome {
            state: OltcState {
                position: state.position,
                violation_counter: counter,
                side,
            },
            tap_delta: 0,
            saturated: true,
        };
    }
    OltcOutcome {
        state: OltcState {
            position: target,
            violation_counter: 0,
            side: 0,
        },
        tap_delta: delta,
        saturated: false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SettleOutcome {
    pub coupled: CoupledSolution,
    pub taps: TapVector,
    pub states: BTreeMap<usize, OltcState>,
    /// Tap vectors visited, starting with the initial one.
    pub history: Vec<TapVector>,
    pub iterations: usize,
    pub quiescent: bool,
    pub saturated: Vec<usize>,
}

/// Runs the OLTC automata of `automatic` transformers against the coupled
/// power flow until no changer acts or [`MAX_TAP_ITERATIONS`] is reached.
pub fn settle_taps(
    net: &Network,
    overrides: &QOverrides,
    taps: &TapVector,
    automatic: &[usize],
    states: &BTreeMap<usize, OltcState>,
) -> Result<SettleOutcome, ControlError> {
    let mut taps = taps.clone();
    let mut states: BTreeMap<usize, OltcState> = automatic
        .iter()
        .filter_map(|&t| {
            let tc = net.transformers[t].tap.as_ref()?;
            let mut st = states.get(&t).copied().unwrap_or_else(|| OltcState::at(tc));
            st.position = taps.position(net, t).unwrap_or(tc.position);
            Some((t, st))
        })
        .collect();
    let mut history = vec![taps.clone()];
    let mut coupled = coupled_power_flow(net, overrides, &taps)?;
    let mut saturated = Vec::new();
    for iteration in 1..=MAX_TAP_ITERATIONS {
        let mut moved = false;
        let mut pending = false;
        saturated.clear();
        for (&t, st) in states.iter_mut() {
            let tr = &net.transformers[t];
            let tc = tr.tap.as_ref().expect("filtered above");
            let lv = net.bus_idx(&tr.lv_bus).expect("validated");
            let out = oltc_step(*st, tc, coupled.solution.vm[lv]);
            *st = out.state;
            if out.saturated {
                saturated.push(t);
            }
            if out.tap_delta != 0 {
                taps.set(&tr.id, out.state.position);
                moved = true;
            } else if out.state.violation_counter > 0 && !out.saturated {
                pending = true;
            }
        }
        if !moved && !pending {
            return Ok(SettleOutcome {
                coupled,
                taps,
                states,
                history,
                iterations: iteration,
                quiescent: true,
                saturated,
            });
        }
        if moved {
            history.push(taps.clone());
            coupled = coupled_power_flow_from(net, overrides, &taps, Some(&coupled.solution))?;
        }
    }
    Ok(SettleOutcome {
        coupled,
        taps,
        states,
        history,
        iterations: MAX_TAP_ITERATIONS,
        quiescent: false,
        saturated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sym(q: f64) -> Capability {
        Capability {
            q_min: -q,
            q_max: q,
            s_max: None,
        }
    }

    #[test]
    fn q_of_v_inside_deadband() {
        let c = ControlCharacteristic::QOfV {
            points: Curve::default_q_of_v(),
        };
        assert_eq!(eval_characteristic(&c, 1.00, 0.3, &sym(0.2)), 0.0);
    }

    #[test]
    fn q_of_v_mid_segment() {
        let c = ControlCharacteristic::QOfV {
            points: Curve::default_q_of_v(),
        };
        let q = eval_characteristic(&c, 1.05, 0.3, &sym(0.2));
        assert!((q + 0.1).abs() < 1e-12, "{q}");
    }

    #[test]
    fn q_of_v_flat_extrapolation() {
        let c = ControlCharacteristic::QOfV {
            points: Curve::default_q_of_v(),
        };
        assert_eq!(eval_characteristic(&c, 1.2, 0.0, &sym(0.2)), -0.2);
        assert_eq!(eval_characteristic(&c, 0.8, 0.0, &sym(0.2)), 0.2);
    }

    #[test]
    fn fixed_cos_phi_underexcited() {
        let c = ControlCharacteristic::FixedCosPhi {
            cos_phi: 0.95,
            excitation: Excitation::Underexcited,
        };
        let q = eval_characteristic(&c, 1.0, 0.4, &sym(1.0));
        assert!((q + 0.4 * 0.95f64.acos().tan()).abs() < 1e-12);
    }

    #[test]
    fn clamped_by_circle() {
        let c = ControlCharacteristic::DirectSetpoint { q: 0.9 };
        let cap = Capability {
            q_min: -1.0,
            q_max: 1.0,
            s_max: Some(0.5),
        };
        let q = eval_characteristic(&c, 1.0, 0.4, &cap);
        assert!((q - 0.3).abs() < 1e-12);
    }

    #[test]
    fn q_of_p_uses_fraction_of_rating() {
        let c = ControlCharacteristic::QOfP {
            points: Curve(vec![(0.5, 0.0), (1.0, -1.0)]),
        };
        let cap = Capability {
            q_min: -0.1,
            q_max: 0.1,
            s_max: Some(2.0),
        };
        let q = eval_characteristic(&c, 1.0, 1.5, &cap);
        assert!((q + 0.05).abs() < 1e-12, "{q}");
    }

    fn changer() -> TapChanger {
        TapChanger {
            pos_min: -2,
            pos_max: 2,
            neutral: 0,
            step_size: 0.025,
            position: 0,
            v_setpoint: 1.0,
            deadband: 0.015,
            delay_steps: 2,
        }
    }

    #[test]
    fn oltc_idle_at_setpoint() {
        let tc = changer();
        let out = oltc_step(OltcState::at(&tc), &tc, 1.0);
        assert_eq!(out.tap_delta, 0);
        assert_eq!(out.state.violation_counter, 0);
    }

    #[test]
    fn oltc_raises_after_delay() {
        let tc = changer();
        let v = tc.v_setpoint - 2.0 * tc.deadband;
        let first = oltc_step(OltcState::at(&tc), &tc, v);
        assert_eq!((first.tap_delta, first.state.violation_counter), (0, 1));
        let second = oltc_step(first.state, &tc, v);
        assert_eq!(second.tap_delta, 1);
        assert_eq!(second.state.position, 1);
        assert_eq!(second.state.violation_counter, 0);
    }

    #[test]
    fn oltc_deadband_edge_is_inside() {
        let tc = changer();
        let out = oltc_step(OltcState::at(&tc), &tc, tc.v_setpoint + tc.deadband);
        assert_eq!(out.state.violation_counter, 0);
    }

    #[test]
    fn oltc_saturates_at_limit() {
        let mut tc = changer();
        tc.position = tc.pos_max;
        tc.delay_steps = 1;
        let out = oltc_step(OltcState::at(&tc), &tc, 0.9);
        assert_eq!(out.tap_delta, 0);
        assert!(out.saturated);
        assert_eq!(out.state.position, tc.pos_max);
    }

    #[test]
    fn oltc_side_change_restarts_counter() {
        let tc = changer();
        let low = oltc_step(OltcState::at(&tc), &tc, 0.95);
        let high = oltc_step(low.state, &tc, 1.05);
        assert_eq!((high.tap_delta, high.state.violation_counter, high.state.side), (0, 1, 1));
    }

    fn asset(control: ControlCharacteristic) -> Asset {
        Asset {
            id: "pv".into(),
            bus: "b".into(),
            kind: crate::grid::AssetKind::Pv,
            p: 0.3,
            q_min: -0.2,
            q_max: 0.2,
            s_max: None,
            control,
            directly_controllable: true,
            q_setpoint: None,
        }
    }

    #[test]
    fn fallback_profile_q_of_v() {
        let a = asset(ControlCharacteristic::FallbackProfile {
            profile: FallbackLaw::QOfV {
                points: Curve::default_q_of_v(),
            },
        });
        assert_eq!(fallback_setpoint(&a, FallbackPolicy::AssetProfile, 1.0, 0.3), 0.0);
    }

    #[test]
    fn fallback_constant_ignores_voltage() {
        let a = asset(ControlCharacteristic::FallbackProfile {
            profile: FallbackLaw::Constant { q: 0.0 },
        });
        for v in [0.85, 1.0, 1.15] {
            assert_eq!(fallback_setpoint(&a, FallbackPolicy::AssetProfile, v, 0.3), 0.0);
        }
    }

    #[test]
    fn fallback_default_curve_endpoint() {
        let a = asset(ControlCharacteristic::DirectSetpoint { q: 0.1 });
        assert_eq!(fallback_setpoint(&a, FallbackPolicy::DefaultQofV, 1.07, 0.3), -0.2);
        assert_eq!(fallback_setpoint(&a, FallbackPolicy::AssetProfile, 1.07, 0.3), -0.2);
    }

    #[test]
    fn curve_rejects_unsorted() {
        assert!(Curve(vec![(1.0, 0.0), (1.0, 1.0)]).check().is_err());
    }
}
