//! Multi-level coordination: an upstream stub, the central controller and
//! field agents (one per MV/LV substation plus an MV gateway), advanced in
//! lockstep by the simulation clock and talking only through [`Bus`].
//!
//! One step runs five phases, each preceded by message delivery:
//! measurements and heartbeats, Step 1 (flexibility), Steps 2-3 (target),
//! Step 4 (allocation) and field actuation. With zero latency a full
//! cycle completes inside one step.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::comms::{Bus, CommsError, Envelope, LinkModel, MessageKind, Step};
use crate::control::{ControlCharacteristic, Curve, FallbackLaw, FallbackPolicy};
use crate::flex::{
    allocate_setpoints, decompose_by_level, verify_bundle, ConstraintSet, Decomposition, FlexError, FlexRange,
    HierarchicalAllocation, SetpointBundle, SubProblem, AGGREGATE_PREFIX,
};
use crate::grid::{interface_of, GridError, InterfaceSpec, Network, VoltageLevel};
use crate::powerflow::{interface_q, PowerFlowSolution, TapVector};

pub const UPSTREAM: &str = "upstream";
pub const CENTRAL: &str = "central";
/// Field gateway for MV-connected assets and HV/MV tap changers.
pub const MV_GATEWAY: &str = "mv";

/// Missed heartbeat periods after which a field agent falls back.
pub const FALLBACK_THRESHOLD: Step = 3;
pub const DEFAULT_VALIDITY_CYCLES: Step = 2;
/// Deviation (pu) by which an edge's own allocation may trail the central
/// hint before the hint is preferred.
const HINT_PREFERENCE: f64 = 1e-4;

pub fn edge_node(transformer: &str) -> String {
    format!("edge_{transformer}")
}

#[derive(Debug, thiserror::Error)]
pub enum CoordError {
    #[error("no fresh measurements at step {now}")]
    StaleData { now: Step },
    #[error(transparent)]
    Flex(#[from] FlexError),
    #[error(transparent)]
    Comms(#[from] CommsError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

// ---------------------------------------------------------------------------
// Messages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Coordinated,
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Upstream,
    Central,
    Edge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetReading {
    pub p: f64,
    pub q_min: f64,
    pub q_max: f64,
    /// Setpoint in force; `None` when the asset runs its own law.
    pub q_setpoint: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementReport {
    pub assets: BTreeMap<String, AssetReading>,
    pub taps: BTreeMap<String, i32>,
    pub voltages: BTreeMap<String, f64>,
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlexibilityReport {
    pub q_min: f64,
    pub q_max: f64,
    pub q_base: f64,
    pub feasible: bool,
    /// Substations held at their last known flow.
    pub pinned: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTarget {
    pub q_target: f64,
    /// Last step at which the target may be acted on.
    pub valid_until: Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetpointCommand {
    pub seq: u64,
    /// Interface flow the substation should realise (edges only).
    pub substation_q: Option<f64>,
    /// Expected MV-side voltage at the substation under the allocation.
    pub v_expected: Option<f64>,
    pub q_setpoints: BTreeMap<String, f64>,
    pub taps: BTreeMap<String, i32>,
    pub valid_until: Step,
    /// Directive to drop to local laws.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub seq: u64,
    pub deviation: f64,
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Payload {
    MeasurementReport(MeasurementReport),
    FlexibilityReport(FlexibilityReport),
    QTarget(QTarget),
    SetpointCommand(SetpointCommand),
    Heartbeat,
    Ack(Ack),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub sender: String,
    pub receiver: String,
    pub sent_at: Step,
    #[serde(flatten)]
    pub payload: Payload,
}

impl MessageKind for Message {
    fn kind(&self) -> &'static str {
        match self.payload {
            Payload::MeasurementReport(_) => "MeasurementReport",
            Payload::FlexibilityReport(_) => "FlexibilityReport",
            Payload::QTarget(_) => "QTarget",
            Payload::SetpointCommand(_) => "SetpointCommand",
            Payload::Heartbeat => "Heartbeat",
            Payload::Ack(_) => "Ack",
        }
    }
}

/// Something a controller noticed, recorded in the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolEvent {
    pub t: Step,
    pub node: String,
    pub kind: String,
    pub detail: String,
}

// ---------------------------------------------------------------------------
// Pure protocol steps
// ---------------------------------------------------------------------------

/// Step 1: flexibility at the HV/MV interface of `net_view`. An infeasible
/// operating point yields a degenerate report flagged infeasible.
pub fn central_step1(
    net_view: &Network,
    ifc: &InterfaceSpec,
    cs: &ConstraintSet,
    pinned: &BTreeSet<String>,
) -> Result<(FlexibilityReport, Decomposition), CoordError> {
    let mut dec = decompose_by_level(net_view, ifc, cs)?;
    let report = |r: &FlexRange| FlexibilityReport {
        q_min: r.q_min,
        q_max: r.q_max,
        q_base: r.q_base,
        feasible: r.feasible,
        pinned: pinned.iter().cloned().collect(),
    };
    let range = dec
        .compute_ranges(pinned)
        .and_then(|_| dec.flex_range(net_view, ifc, cs));
    match range {
        Ok(r) => Ok((report(&r), dec)),
        Err(FlexError::Infeasible { .. }) => {
            let q_base = current_q(net_view, ifc).unwrap_or(0.0);
            Ok((
                FlexibilityReport {
                    q_min: q_base,
                    q_max: q_base,
                    q_base,
                    feasible: false,
                    pinned: pinned.iter().cloned().collect(),
                },
                dec,
            ))
        }
        Err(e) => Err(e.into()),
    }
}

/// Steps 2-3 (stub): clamps the TSO request, or the current flow when
/// there is none, into the reported range. Infeasible reports yield no
/// target.
pub fn upstream_step2_3(reports: &[FlexibilityReport], tso_request_q: Option<f64>, valid_until: Step) -> Option<QTarget> {
    let r = reports.last()?;
    if !r.feasible {
        return None;
    }
    let q = tso_request_q.unwrap_or(r.q_base).clamp(r.q_min, r.q_max);
    Some(QTarget {
        q_target: q,
        valid_until,
    })
}

/// Step 4: hierarchical allocation of `target` on the decomposition from
/// Step 1.
pub fn central_step4(
    target: &QTarget,
    dec: &Decomposition,
    net_view: &Network,
    ifc: &InterfaceSpec,
    cs: &ConstraintSet,
) -> Result<HierarchicalAllocation, FlexError> {
    dec.allocate(net_view, ifc, cs, target.q_target)
}

/// What a field agent measures locally.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalMeasurements {
    /// MV-side voltage at the substation.
    pub v_mv: f64,
    pub taps: BTreeMap<String, i32>,
    pub assets: BTreeMap<String, AssetReading>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeDecision {
    pub taps: BTreeMap<String, i32>,
    pub q_setpoints: BTreeMap<String, f64>,
    /// Substation flow predicted on the local model.
    pub predicted_q: f64,
    pub deviation: f64,
    pub feasible: bool,
}

/// Local model of an edge with its measurements applied.
fn local_problem(state: &FieldAgentState, model: &SubProblem, meas: &LocalMeasurements, v: f64) -> (Network, InterfaceSpec, ConstraintSet) {
    let mut net = model.with_slack_voltage(v);
    for a in &mut net.assets {
        if let Some(r) = meas.assets.get(&a.id) {
            a.p = r.p;
            a.q_min = r.q_min;
            a.q_max = r.q_max;
        }
        a.q_setpoint = if a.directly_controllable {
            state.applied_q.get(&a.id).copied()
        } else {
            None
        };
    }
    for tr in &mut net.transformers {
        if let (Some(tc), Some(&p)) = (tr.tap.as_mut(), meas.taps.get(&tr.id)) {
            tc.position = p;
        }
    }
    let ifc = interface_of(&net, &model.transformer).expect("substation transformer is kept");
    let mut cs = ConstraintSet::from_network(&net)
        .with_controlled_taps(&net, state.coordinated_taps.iter().map(String::as_str));
    cs.v_min = model.constraints.v_min.clone();
    cs.v_max = model.constraints.v_max.clone();
    cs.line_rating = model.constraints.line_rating.clone();
    cs.transformer_rating = model.constraints.transformer_rating.clone();
    (net, ifc, cs)
}

/// Cascaded local optimisation of one substation: own taps and directly
/// controllable LV assets against the commanded substation flow, with the
/// central allocation as a fallback candidate. A pure function of its
/// inputs.
pub fn edge_cascade(state: &FieldAgentState, command: &SetpointCommand, meas: &LocalMeasurements) -> EdgeDecision {
    let model = state.model.as_ref().expect("edge agents carry a local model");
    let (net, ifc, cs) = local_problem(state, model, meas, command.v_expected.unwrap_or(meas.v_mv));
    let target = command.substation_q.unwrap_or(0.0);
    let own_taps = |taps: &TapVector| -> BTreeMap<String, i32> {
        taps.0
            .iter()
            .filter(|(id, _)| state.coordinated_taps.contains(*id))
            .map(|(id, &p)| (id.clone(), p))
            .collect()
    };

    let mut candidates: Vec<EdgeDecision> = Vec::new();
    if let Ok(b) = allocate_setpoints(&net, &ifc, &cs, target) {
        candidates.push(EdgeDecision {
            taps: own_taps(&b.taps),
            q_setpoints: b.q_setpoints,
            predicted_q: b.achieved_q_if,
            deviation: target - b.achieved_q_if,
            feasible: true,
        });
    }
    let hint = SetpointBundle {
        taps: TapVector(
            command
                .taps
                .iter()
                .filter(|(id, _)| state.coordinated_taps.contains(*id))
                .map(|(id, &p)| (id.clone(), p))
                .collect(),
        ),
        q_setpoints: command
            .q_setpoints
            .iter()
            .filter(|(id, _)| net.asset_idx(id).is_some())
            .map(|(id, &q)| (id.clone(), q))
            .collect(),
        achieved_q_if: 0.0,
        deviation: 0.0,
    };
    if let Ok((_, v, q)) = verify_bundle(&net, &ifc, &cs, &hint) {
        if v.is_empty() {
            let better = candidates
                .first()
                .is_none_or(|c| c.deviation.abs() > (target - q).abs() + HINT_PREFERENCE);
            if better {
                candidates.insert(
                    0,
                    EdgeDecision {
                        taps: hint.taps.0.clone(),
                        q_setpoints: hint.q_setpoints.clone(),
                        predicted_q: q,
                        deviation: target - q,
                        feasible: true,
                    },
                );
            }
        }
    }
    if let Some(best) = candidates.into_iter().next() {
        return best;
    }
    // Nothing feasible: hold the present state and report the gap.
    let q_now = current_q(&net, &ifc).unwrap_or(target);
    EdgeDecision {
        taps: meas
            .taps
            .iter()
            .filter(|(id, _)| state.coordinated_taps.contains(*id))
            .map(|(id, &p)| (id.clone(), p))
            .collect(),
        q_setpoints: state.applied_q.clone(),
        predicted_q: q_now,
        deviation: target - q_now,
        feasible: false,
    }
}

fn current_q(net: &Network, ifc: &InterfaceSpec) -> Option<f64> {
    let c = crate::control::coupled_power_flow(net, &Default::default(), &TapVector::from_network(net)).ok()?;
    Some(interface_q(&c.solution, ifc))
}

/// Heartbeat and command driven mode change of a field agent.
pub fn fallback_transition(state: &FieldAgentState, now: Step) -> FieldAgentState {
    let mut next = state.clone();
    let last = state.last_heartbeat_rx.get(CENTRAL).copied().unwrap_or(state.started_at);
    match state.mode {
        Mode::Coordinated if now.saturating_sub(last) >= FALLBACK_THRESHOLD => next.mode = Mode::Fallback,
        Mode::Fallback if last == now && state.command_rx_at == Some(now) => next.mode = Mode::Coordinated,
        _ => {}
    }
    next
}

// ---------------------------------------------------------------------------
// Controller state
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FieldAgentState {
    pub node: String,
    pub role: Role,
    /// Substation transformer id; `None` for the MV gateway.
    pub substation: Option<String>,
    pub mode: Mode,
    pub started_at: Step,
    pub last_heartbeat_rx: BTreeMap<String, Step>,
    /// When the last fresh, non-fallback command arrived.
    pub command_rx_at: Option<Step>,
    pub last_command: Option<SetpointCommand>,
    pub last_seq: u64,
    pub assets: Vec<String>,
    pub taps: Vec<String>,
    pub coordinated_taps: BTreeSet<String>,
    /// Setpoints in force on directly controllable assets.
    pub applied_q: BTreeMap<String, f64>,
    /// Positions of coordinated taps.
    pub applied_taps: BTreeMap<String, i32>,
    pub last_deviation: f64,
    /// Step of the last agent update.
    pub clock_at: Step,
    pub model: Option<SubProblem>,
}

impl FieldAgentState {
    fn new(node: String, substation: Option<String>, assets: Vec<String>, taps: Vec<String>, model: Option<SubProblem>) -> Self {
        FieldAgentState {
            node,
            role: Role::Edge,
            substation,
            mode: Mode::Coordinated,
            started_at: 0,
            last_heartbeat_rx: BTreeMap::new(),
            command_rx_at: None,
            last_command: None,
            last_seq: 0,
            assets,
            taps,
            coordinated_taps: BTreeSet::new(),
            applied_q: BTreeMap::new(),
            applied_taps: BTreeMap::new(),
            last_deviation: 0.0,
            clock_at: 0,
            model,
        }
    }

    fn measure(&self, net: &Network, sol: Option<&PowerFlowSolution>) -> MeasurementReport {
        let mut assets = BTreeMap::new();
        let mut buses = BTreeSet::new();
        for id in &self.assets {
            if let Some(i) = net.asset_idx(id) {
                let a = &net.assets[i];
                assets.insert(
                    id.clone(),
                    AssetReading {
                        p: a.p,
                        q_min: a.q_min,
                        q_max: a.q_max,
                        q_setpoint: self.applied_q.get(id).copied().filter(|_| a.directly_controllable),
                    },
                );
                buses.insert(a.bus.clone());
            }
        }
        let mut taps = BTreeMap::new();
        for id in &self.taps {
            if let Some(t) = net.transformer_idx(id) {
                let tr = &net.transformers[t];
                if let Some(tc) = &tr.tap {
                    taps.insert(id.clone(), tc.position);
                }
                buses.insert(tr.hv_bus.clone());
                buses.insert(tr.lv_bus.clone());
            }
        }
        let voltages = sol
            .map(|s| {
                buses
                    .iter()
                    .filter_map(|b| Some((b.clone(), s.vm[net.bus_idx(b)?])))
                    .collect()
            })
            .unwrap_or_default();
        MeasurementReport {
            assets,
            taps,
            voltages,
            mode: self.mode,
        }
    }

    fn local_measurements(&self, net: &Network, sol: Option<&PowerFlowSolution>) -> LocalMeasurements {
        let report = self.measure(net, sol);
        let v_mv = self
            .model
            .as_ref()
            .and_then(|m| Some((m, sol?)))
            .and_then(|(m, s)| Some(s.vm[net.bus_idx(&m.mv_bus)?]))
            .unwrap_or(1.0);
        LocalMeasurements {
            v_mv,
            taps: report.taps,
            assets: report.assets,
        }
    }

}

#[derive(Debug, Clone)]
pub struct UpstreamState {
    pub reports: Vec<FlexibilityReport>,
    pub tso_request: Option<f64>,
    pub last_target: Option<QTarget>,
}

#[derive(Debug, Clone)]
pub struct CentralState {
    pub model: Network,
    pub interface_id: String,
    /// Field node owning each asset and transformer id.
    pub owners: BTreeMap<String, String>,
    pub coordinated_taps: BTreeSet<String>,
    pub last_rx: BTreeMap<String, Step>,
    pub reports: BTreeMap<String, MeasurementReport>,
    pub flex: Option<FlexibilityReport>,
    pub pending_target: Option<QTarget>,
    pub target_rx_at: Option<Step>,
    pub next_seq: u64,
    pub acks: BTreeMap<String, Ack>,
    view: Option<View>,
}

#[derive(Debug, Clone)]
struct View {
    net: Network,
    ifc: InterfaceSpec,
    cs: ConstraintSet,
    dec: Decomposition,
    computed_at: Step,
}

impl CentralState {
    fn field_nodes(&self) -> BTreeSet<String> {
        self.owners.values().cloned().collect()
    }

    fn reachable(&self, node: &str, now: Step, bound: Step) -> bool {
        self.last_rx.get(node).is_some_and(|&t| now.saturating_sub(t) < bound)
    }

    /// Network model updated with the latest reports; assets of
    /// unreachable nodes lose their controllability.
    fn build_view(&self, now: Step, bound: Step) -> Result<(Network, InterfaceSpec, ConstraintSet, BTreeSet<String>), CoordError> {
        let nodes = self.field_nodes();
        if !nodes.iter().any(|n| self.reachable(n, now, bound)) {
            return Err(CoordError::StaleData { now });
        }
        let mut net = self.model.clone();
        for report in self.reports.values() {
            for (id, r) in &report.assets {
                if let Some(i) = net.asset_idx(id) {
                    let a = &mut net.assets[i];
                    a.p = r.p;
                    a.q_min = r.q_min;
                    a.q_max = r.q_max;
                    a.q_setpoint = r.q_setpoint;
                }
            }
            for (id, &p) in &report.taps {
                if let Some(tc) = net.transformer_idx(id).and_then(|t| net.transformers[t].tap.as_mut()) {
                    tc.position = p;
                }
            }
        }
        let unreachable: BTreeSet<&String> = nodes.iter().filter(|n| !self.reachable(n, now, bound)).collect();
        for a in &mut net.assets {
            if self.owners.get(&a.id).is_some_and(|o| unreachable.contains(o)) {
                a.directly_controllable = false;
            }
        }
        let taps = self
            .coordinated_taps
            .iter()
            .filter(|id| self.owners.get(*id).is_some_and(|o| !unreachable.contains(o)));
        let cs = ConstraintSet::from_network(&net).with_controlled_taps(&net, taps.map(String::as_str));
        let ifc = interface_of(&net, &self.interface_id)?;
        let pinned = net
            .transformers
            .iter()
            .filter(|t| unreachable.contains(&edge_node(&t.id)))
            .map(|t| t.id.clone())
            .collect();
        Ok((net, ifc, cs, pinned))
    }

    fn commands(&mut self, alloc: &HierarchicalAllocation, valid_until: Step) -> Vec<(String, SetpointCommand)> {
        let mut by_node: BTreeMap<String, SetpointCommand> = BTreeMap::new();
        for node in self.field_nodes() {
            by_node.insert(
                node,
                SetpointCommand {
                    seq: 0,
                    substation_q: None,
                    v_expected: None,
                    q_setpoints: BTreeMap::new(),
                    taps: BTreeMap::new(),
                    valid_until,
                    fallback: false,
                },
            );
        }
        for (id, &q) in &alloc.bundle.q_setpoints {
            if id.starts_with(AGGREGATE_PREFIX) {
                continue;
            }
            if let Some(cmd) = self.owners.get(id).and_then(|o| by_node.get_mut(o)) {
                cmd.q_setpoints.insert(id.clone(), q);
            }
        }
        for (id, &p) in &alloc.bundle.taps.0 {
            if !self.coordinated_taps.contains(id) {
                continue;
            }
            if let Some(cmd) = self.owners.get(id).and_then(|o| by_node.get_mut(o)) {
                cmd.taps.insert(id.clone(), p);
            }
        }
        for (t, &q) in &alloc.substation_q {
            if let Some(cmd) = by_node.get_mut(&edge_node(t)) {
                cmd.substation_q = Some(q);
                cmd.v_expected = alloc.substation_v.get(t).copied();
            }
        }
        by_node
            .into_iter()
            .map(|(node, mut cmd)| {
                self.next_seq += 1;
                cmd.seq = self.next_seq;
                (node, cmd)
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// System
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinationConfig {
    pub cycle_steps: Step,
    pub validity_cycles: Step,
    /// Steps after which a node's measurements count as stale.
    pub staleness_bound: Step,
    pub fallback_policy: FallbackPolicy,
}

impl Default for CoordinationConfig {
    fn default() -> Self {
        CoordinationConfig {
            cycle_steps: 1,
            validity_cycles: DEFAULT_VALIDITY_CYCLES,
            staleness_bound: FALLBACK_THRESHOLD,
            fallback_policy: FallbackPolicy::AssetProfile,
        }
    }
}

/// What the controllers did in one step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub flex: Option<FlexibilityReport>,
    pub target: Option<QTarget>,
    /// Interface flow the central allocation predicts.
    pub predicted_q: Option<f64>,
    pub commands_sent: usize,
    pub events: Vec<ProtocolEvent>,
}

/// Field decisions to impose on the physical network.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Actuation {
    pub q_setpoints: BTreeMap<String, f64>,
    /// Directly controllable assets running their fallback law.
    pub on_fallback_law: BTreeSet<String>,
    pub taps: BTreeMap<String, i32>,
    /// Tap changers left to their own automaton.
    pub automatic: BTreeSet<String>,
}

impl Actuation {
    /// Writes the decisions into `net` and returns the indices of the
    /// automatic tap changers.
    pub fn apply(&self, net: &mut Network, policy: FallbackPolicy) -> Vec<usize> {
        for a in &mut net.assets {
            if let Some(&q) = self.q_setpoints.get(&a.id) {
                a.q_setpoint = Some(crate::control::Capability::of(a).clamp(q, a.p));
            } else if a.directly_controllable && self.on_fallback_law.contains(&a.id) {
                a.q_setpoint = None;
                a.control = fallback_control(&a.control, policy);
            }
        }
        for tr in &mut net.transformers {
            if let (Some(tc), Some(&p)) = (tr.tap.as_mut(), self.taps.get(&tr.id)) {
                tc.position = p.clamp(tc.pos_min, tc.pos_max);
            }
        }
        net.transformers
            .iter()
            .enumerate()
            .filter(|(_, t)| t.tap.is_some() && self.automatic.contains(&t.id))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Law an asset runs when it has no fresh setpoint.
pub fn fallback_control(control: &ControlCharacteristic, policy: FallbackPolicy) -> ControlCharacteristic {
    let default = ControlCharacteristic::FallbackProfile {
        profile: FallbackLaw::QOfV {
            points: Curve::default_q_of_v(),
        },
    };
    match policy {
        FallbackPolicy::DefaultQofV => default,
        FallbackPolicy::Constant(q) => ControlCharacteristic::FallbackProfile {
            profile: FallbackLaw::Constant { q },
        },
        FallbackPolicy::AssetProfile => match control {
            ControlCharacteristic::DirectSetpoint { .. } => default,
            other => other.clone(),
        },
    }
}

pub struct System {
    pub config: CoordinationConfig,
    pub bus: Bus<Message>,
    pub upstream: UpstreamState,
    pub central: CentralState,
    pub agents: BTreeMap<String, FieldAgentState>,
    inbox: BTreeMap<String, Vec<Envelope<Message>>>,
}

/// Links between every pair of talking nodes.
pub fn default_links(net: &Network, interface_id: &str, latency: Step) -> Vec<LinkModel> {
    let mut nodes = vec![MV_GATEWAY.to_string()];
    nodes.extend(edge_transformers(net, interface_id).into_iter().map(|t| edge_node(&net.transformers[t].id)));
    let mut links = vec![LinkModel::new(UPSTREAM, CENTRAL, latency), LinkModel::new(CENTRAL, UPSTREAM, latency)];
    for n in nodes {
        links.push(LinkModel::new(CENTRAL, &n, latency));
        links.push(LinkModel::new(&n, CENTRAL, latency));
    }
    links
}

/// MV/LV substations below the interface.
fn edge_transformers(net: &Network, interface_id: &str) -> Vec<usize> {
    let Ok(ifc) = interface_of(net, interface_id) else {
        return Vec::new();
    };
    net.transformers
        .iter()
        .enumerate()
        .filter(|&(t, tr)| {
            t != ifc.transformer
                && net.bus_idx(&tr.hv_bus).is_some_and(|h| ifc.buses.contains(&h) && net.buses[h].level == VoltageLevel::MV)
                && net.bus_idx(&tr.lv_bus).is_some_and(|l| net.buses[l].level == VoltageLevel::LV)
        })
        .map(|(t, _)| t)
        .collect()
}

impl System {
    /// Controllers for `net` below `interface_id`; every tap changer in
    /// `coordinated_taps` is moved by commands, all others by their own
    /// automaton.
    pub fn new(
        net: &Network,
        interface_id: &str,
        coordinated_taps: &BTreeSet<String>,
        config: CoordinationConfig,
        links: Vec<LinkModel>,
        seed: u64,
    ) -> Result<Self, CoordError> {
        let ifc = interface_of(net, interface_id)?;
        let cs = ConstraintSet::from_network(net);
        let dec = decompose_by_level(net, &ifc, &cs)?;
        let mut owners = BTreeMap::new();
        let mut agents = BTreeMap::new();
        let mut lv_buses = BTreeSet::new();
        for sub in dec.subproblems {
            let node = edge_node(&sub.transformer);
            let t = net.transformer_idx(&sub.transformer).expect("from net");
            let down = net.downstream_buses(t);
            lv_buses.extend(down.iter().copied());
            let assets: Vec<String> = net
                .assets
                .iter()
                .filter(|a| net.bus_idx(&a.bus).is_some_and(|b| down.contains(&b)))
                .map(|a| a.id.clone())
                .collect();
            let taps: Vec<String> = net
                .transformers
                .iter()
                .filter(|tr| tr.tap.is_some() && net.bus_idx(&tr.lv_bus).is_some_and(|b| down.contains(&b)))
                .map(|tr| tr.id.clone())
                .collect();
            for id in assets.iter().chain(&taps) {
                owners.insert(id.clone(), node.clone());
            }
            agents.insert(node.clone(), FieldAgentState::new(node, Some(sub.transformer.clone()), assets, taps, Some(sub)));
        }
        let mv_assets: Vec<String> = net
            .assets
            .iter()
            .filter(|a| net.bus_idx(&a.bus).is_some_and(|b| !lv_buses.contains(&b)))
            .map(|a| a.id.clone())
            .collect();
        let mv_taps: Vec<String> = net
            .transformers
            .iter()
            .filter(|tr| tr.tap.is_some() && !owners.contains_key(&tr.id))
            .map(|tr| tr.id.clone())
            .collect();
        for id in mv_assets.iter().chain(&mv_taps) {
            owners.insert(id.clone(), MV_GATEWAY.to_string());
        }
        agents.insert(
            MV_GATEWAY.to_string(),
            FieldAgentState::new(MV_GATEWAY.to_string(), None, mv_assets, mv_taps, None),
        );
        for a in agents.values_mut() {
            a.coordinated_taps = a.taps.iter().filter(|t| coordinated_taps.contains(*t)).cloned().collect();
        }
        Ok(System {
            config,
            bus: Bus::new(seed, links)?,
            upstream: UpstreamState {
                reports: Vec::new(),
                tso_request: None,
                last_target: None,
            },
            central: CentralState {
                model: net.clone(),
                interface_id: interface_id.to_string(),
                owners,
                coordinated_taps: coordinated_taps.clone(),
                last_rx: BTreeMap::new(),
                reports: BTreeMap::new(),
                flex: None,
                pending_target: None,
                target_rx_at: None,
                next_seq: 0,
                acks: BTreeMap::new(),
                view: None,
            },
            agents,
            inbox: BTreeMap::new(),
        })
    }

    pub fn set_tso_request(&mut self, q: Option<f64>) {
        self.upstream.tso_request = q;
    }

    /// Switches a tap changer between command-driven and automatic
    /// operation.
    pub fn set_tap_mode(&mut self, transformer: &str, coordinated: bool) {
        if coordinated {
            self.central.coordinated_taps.insert(transformer.to_string());
        } else {
            self.central.coordinated_taps.remove(transformer);
        }
        for a in self.agents.values_mut() {
            if a.taps.iter().any(|t| t == transformer) {
                if coordinated {
                    a.coordinated_taps.insert(transformer.to_string());
                } else {
                    a.coordinated_taps.remove(transformer);
                    a.applied_taps.remove(transformer);
                }
            }
        }
    }

    pub fn modes(&self) -> BTreeMap<String, Mode> {
        self.agents.iter().map(|(n, a)| (n.clone(), a.mode)).collect()
    }

    fn send(&mut self, from: &str, to: &str, payload: Payload, now: Step) -> Result<(), CoordError> {
        let msg = Message {
            sender: from.to_string(),
            receiver: to.to_string(),
            sent_at: now,
            payload,
        };
        self.bus.send(from, to, msg, now)?;
        Ok(())
    }

    fn deliver(&mut self, now: Step) {
        for env in self.bus.deliver_due(now) {
            self.inbox.entry(env.to.clone()).or_default().push(env);
        }
    }

    fn take(&mut self, node: &str) -> Vec<Message> {
        self.inbox.remove(node).unwrap_or_default().into_iter().map(|e| e.msg).collect()
    }

    /// Advances every controller by one step. `physical` carries this
    /// step's injections; `last` is the previous step's solved state.
    pub fn step(&mut self, now: Step, physical: &Network, last: Option<&PowerFlowSolution>) -> Result<StepReport, CoordError> {
        let mut report = StepReport::default();
        let cycle = now.is_multiple_of(self.config.cycle_steps.max(1));
        let horizon = now + self.config.validity_cycles * self.config.cycle_steps.max(1);

        // Phase A: measurements up, heartbeats down.
        let nodes: Vec<String> = self.agents.keys().cloned().collect();
        for n in &nodes {
            let m = self.agents[n].measure(physical, last);
            self.send(n, CENTRAL, Payload::MeasurementReport(m), now)?;
            self.send(CENTRAL, n, Payload::Heartbeat, now)?;
        }
        self.deliver(now);
        self.central_receive(now);

        // Phase B: Step 1.
        let mut step1_ok = false;
        if cycle {
            match self.central_flex(now) {
                Ok(r) => {
                    step1_ok = true;
                    if !r.feasible {
                        report.events.push(event(now, CENTRAL, "flex_infeasible", "operating point violates limits"));
                    }
                    report.flex = Some(r.clone());
                    self.send(CENTRAL, UPSTREAM, Payload::FlexibilityReport(r), now)?;
                }
                Err(CoordError::StaleData { .. }) => {
                    report.events.push(event(now, CENTRAL, "stale_data", "no fresh measurements"));
                }
                Err(CoordError::Flex(e)) => {
                    report.events.push(event(now, CENTRAL, "flex_error", &e.to_string()));
                }
                Err(e) => return Err(e),
            }
        }
        self.deliver(now);

        // Phase C: Steps 2-3.
        let mut fresh_report = false;
        for m in self.take(UPSTREAM) {
            if let Payload::FlexibilityReport(r) = m.payload {
                self.upstream.reports.push(r);
                fresh_report = true;
            }
        }
        if fresh_report {
            match upstream_step2_3(&self.upstream.reports, self.upstream.tso_request, horizon) {
                Some(t) => {
                    self.upstream.last_target = Some(t.clone());
                    self.send(UPSTREAM, CENTRAL, Payload::QTarget(t), now)?;
                }
                None => report.events.push(event(now, UPSTREAM, "target_withheld", "infeasible flexibility report")),
            }
            self.upstream.reports.clear();
        }
        self.deliver(now);
        self.central_receive(now);

        // Phase D: Step 4.
        let target = self.central.pending_target.clone().filter(|t| t.valid_until >= now);
        if target.is_none() {
            self.central.pending_target = None;
        }
        let fresh_target = self.central.target_rx_at == Some(now);
        if let Some(t) = target.filter(|_| (cycle && step1_ok) || fresh_target) {
            report.target = Some(t.clone());
            if let Some(view) = &self.central.view {
                match central_step4(&t, &view.dec, &view.net, &view.ifc, &view.cs) {
                    Ok(alloc) => {
                        report.predicted_q = Some(alloc.bundle.achieved_q_if);
                        let cmds = self.central.commands(&alloc, horizon);
                        report.commands_sent = cmds.len();
                        for (node, cmd) in cmds {
                            self.send(CENTRAL, &node, Payload::SetpointCommand(cmd), now)?;
                        }
                    }
                    Err(e) => {
                        report.events.push(event(now, CENTRAL, "fallback_directive", &e.to_string()));
                        for node in self.central.field_nodes() {
                            self.central.next_seq += 1;
                            let cmd = SetpointCommand {
                                seq: self.central.next_seq,
                                substation_q: None,
                                v_expected: None,
                                q_setpoints: BTreeMap::new(),
                                taps: BTreeMap::new(),
                                valid_until: horizon,
                                fallback: true,
                            };
                            self.send(CENTRAL, &node, Payload::SetpointCommand(cmd), now)?;
                            report.commands_sent += 1;
                        }
                    }
                }
            }
        }
        self.deliver(now);

        // Phase E: field agents.
        for n in &nodes {
            let msgs = self.take(n);
            let (st, ack, events) = field_step(&self.agents[n], msgs, now, physical, last);
            report.events.extend(events);
            self.agents.insert(n.clone(), st);
            if let Some(ack) = ack {
                self.send(n, CENTRAL, Payload::Ack(ack), now)?;
            }
        }
        self.deliver(now);
        self.central_receive(now);
        Ok(report)
    }

    fn central_receive(&mut self, now: Step) {
        for m in self.take(CENTRAL) {
            match m.payload {
                Payload::MeasurementReport(r) => {
                    let t = self.central.last_rx.entry(m.sender.clone()).or_insert(m.sent_at);
                    *t = (*t).max(m.sent_at);
                    self.central.reports.insert(m.sender, r);
                }
                Payload::QTarget(t) => {
                    self.central.pending_target = Some(t);
                    self.central.target_rx_at = Some(now);
                }
                Payload::Ack(a) => {
                    self.central.acks.insert(m.sender, a);
                }
                _ => {}
            }
        }
    }

    fn central_flex(&mut self, now: Step) -> Result<FlexibilityReport, CoordError> {
        let (net, ifc, cs, pinned) = self.central.build_view(now, self.config.staleness_bound)?;
        let (r, dec) = central_step1(&net, &ifc, &cs, &pinned)?;
        self.central.flex = Some(r.clone());
        self.central.view = Some(View {
            net,
            ifc,
            cs,
            dec,
            computed_at: now,
        });
        Ok(r)
    }

    /// Step at which the central view was last rebuilt.
    pub fn view_step(&self) -> Option<Step> {
        self.central.view.as_ref().map(|v| v.computed_at)
    }

    /// Decisions of all field agents, to be applied before the physics.
    pub fn actuation(&self) -> Actuation {
        let mut act = Actuation::default();
        for a in self.agents.values() {
            for id in &a.assets {
                match a.applied_q.get(id) {
                    Some(&q) if a.mode == Mode::Coordinated || a.command_valid_fallback() => {
                        act.q_setpoints.insert(id.clone(), q);
                    }
                    _ => {
                        act.on_fallback_law.insert(id.clone());
                    }
                }
            }
            let commanding = a.mode == Mode::Coordinated || a.command_valid_fallback();
            for id in &a.taps {
                if !(commanding && a.coordinated_taps.contains(id)) {
                    act.automatic.insert(id.clone());
                } else if let Some(&p) = a.applied_taps.get(id) {
                    act.taps.insert(id.clone(), p);
                }
            }
        }
        act
    }
}

impl FieldAgentState {
    fn command_valid_fallback(&self) -> bool {
        self.mode == Mode::Fallback && self.fallback_command().is_some()
    }

    /// Last command still usable while in fallback.
    fn fallback_command(&self) -> Option<&SetpointCommand> {
        self.last_command.as_ref().filter(|c| !c.fallback && c.valid_until >= self.clock_at)
    }
}

fn event(t: Step, node: &str, kind: &str, detail: &str) -> ProtocolEvent {
    ProtocolEvent {
        t,
        node: node.to_string(),
        kind: kind.to_string(),
        detail: detail.to_string(),
    }
}

/// One field agent's phase: inbox, mode transition, local decision.
fn field_step(
    state: &FieldAgentState,
    msgs: Vec<Message>,
    now: Step,
    physical: &Network,
    last: Option<&PowerFlowSolution>,
) -> (FieldAgentState, Option<Ack>, Vec<ProtocolEvent>) {
    let mut st = state.clone();
    let mut events = Vec::new();
    let mut fresh: Option<SetpointCommand> = None;
    for m in msgs {
        match m.payload {
            Payload::Heartbeat => {
                st.last_heartbeat_rx.insert(m.sender, now);
            }
            Payload::SetpointCommand(cmd) if cmd.seq > st.last_seq => {
                st.last_seq = cmd.seq;
                fresh = Some(cmd);
            }
            _ => {}
        }
    }
    let directive = fresh.as_ref().is_some_and(|c| c.fallback);
    if let Some(c) = fresh.as_ref().filter(|c| !c.fallback) {
        st.command_rx_at = Some(now);
        st.last_command = Some(c.clone());
    }
    let before = st.mode;
    st = fallback_transition(&st, now);
    if directive && st.mode == Mode::Coordinated {
        st.mode = Mode::Fallback;
        st.last_command = None;
    }
    st.clock_at = now;
    if st.mode != before {
        let kind = match st.mode {
            Mode::Fallback => "enter_fallback",
            Mode::Coordinated => "enter_coordinated",
        };
        events.push(event(now, &st.node, kind, ""));
    }

    let command = match st.mode {
        Mode::Coordinated => fresh.filter(|c| !c.fallback),
        Mode::Fallback => st.fallback_command().cloned(),
    };
    let Some(cmd) = command else {
        if st.mode == Mode::Fallback {
            st.applied_q.clear();
            st.applied_taps.clear();
        }
        return (st, None, events);
    };
    let deviation = if st.model.is_some() {
        let meas = st.local_measurements(physical, last);
        let d = edge_cascade(&st, &cmd, &meas);
        st.applied_q = d.q_setpoints.clone();
        for (id, p) in d.taps {
            st.applied_taps.insert(id, p);
        }
        if !d.feasible {
            events.push(event(now, &st.node, "local_infeasible", &format!("deviation {:.6}", d.deviation)));
        }
        d.deviation
    } else {
        st.applied_q = cmd.q_setpoints.clone();
        for (id, &p) in &cmd.taps {
            if st.coordinated_taps.contains(id) {
                st.applied_taps.insert(id.clone(), p);
            }
        }
        0.0
    };
    st.last_deviation = deviation;
    let ack = Ack {
        seq: cmd.seq,
        deviation,
        mode: st.mode,
    };
    (st, Some(ack), events)
}
