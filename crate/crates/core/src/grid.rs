//! Electrical network data model, per-unit conversion, validation and the
//! on-disk grid file format.
//!
//! Files carry engineering units (kV, MW, MVar, ohms, amperes); everything
//! inside [`Network`] is per-unit on the system base `s_base` (MVA) and the
//! per-bus voltage base `base_kv`.
//!
//! Sign conventions:
//! * asset injections are generation-positive (`p > 0` generates, `q > 0`
//!   injects reactive power into the grid);
//! * interface reactive flow is positive when flowing from the higher to the
//!   lower voltage level.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::ControlCharacteristic;

/// Default system base in MVA.
pub const DEFAULT_S_BASE_MVA: f64 = 10.0;
/// Default lower voltage bound in per-unit.
pub const DEFAULT_V_MIN: f64 = 0.90;
/// Default upper voltage bound in per-unit.
pub const DEFAULT_V_MAX: f64 = 1.10;

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("grid file schema violation: {0}")]
    Schema(String),
    #[error("network is invalid:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error("unknown element id `{0}`")]
    UnknownId(String),
    #[error("`{0}` is not a transformer")]
    NotATransformer(String),
    #[error("transformer `{0}` is not marked as an interface")]
    NotAnInterface(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VoltageLevel {
    LV,
    MV,
    HV,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusKind {
    Slack,
    Load,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: String,
    pub kind: BusKind,
    pub base_kv: f64,
    #[serde(default = "default_v_min")]
    pub v_min: f64,
    #[serde(default = "default_v_max")]
    pub v_max: f64,
    pub level: VoltageLevel,
    /// Voltage magnitude held by the slack bus. Ignored for load buses.
    #[serde(default = "one")]
    pub v_set: f64,
}

/// Line in per-unit on the system base.
#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub id: String,
    pub from_bus: String,
    pub to_bus: String,
    pub r: f64,
    pub x: f64,
    /// Total shunt susceptance, split equally between both ends.
    pub b_shunt: f64,
    pub i_max: f64,
}

/// Discrete on-load tap changer. Increasing `position` raises the LV-side
/// voltage: the no-load ratio is `V_lv = t * V_hv` with
/// `t = 1 + (position - neutral) * step_size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapChanger {
    pub pos_min: i32,
    pub pos_max: i32,
    pub neutral: i32,
    pub step_size: f64,
    pub position: i32,
    #[serde(default = "one")]
    pub v_setpoint: f64,
    pub deadband: f64,
    #[serde(default = "one_step")]
    pub delay_steps: u32,
}

impl TapChanger {
    pub fn ratio_at(&self, position: f64) -> f64 {
        1.0 + (position - self.neutral as f64) * self.step_size
    }

    pub fn ratio(&self) -> f64 {
        self.ratio_at(self.position as f64)
    }

    pub fn contains(&self, position: i32) -> bool {
        (self.pos_min..=self.pos_max).contains(&position)
    }
}

/// Two-winding transformer; `s_rated`, `r` and `x` are per-unit on the
/// system base.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub id: String,
    pub hv_bus: String,
    pub lv_bus: String,
    pub s_rated: f64,
    pub r: f64,
    pub x: f64,
    pub tap: Option<TapChanger>,
    pub is_interface: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssetKind {
    Pv,
    Wind,
    Storage,
    EvCharging,
    Household,
    Commercial,
    /// A whole MV/LV substation collapsed into one injection; only produced
    /// by level decomposition.
    SubstationAggregate,
}

impl AssetKind {
    pub fn is_load(self) -> bool {
        matches!(self, AssetKind::Household | AssetKind::Commercial)
    }
}

/// DER or load in per-unit on the system base.
#[derive(Debug, Clone, PartialEq)]
pub struct Asset {
    pub id: String,
    pub bus: String,
    pub kind: AssetKind,
    pub p: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub s_max: Option<f64>,
    pub control: ControlCharacteristic,
    pub directly_controllable: bool,
    /// Externally supplied setpoint currently applied. Runtime state, never
    /// part of the grid file.
    pub q_setpoint: Option<f64>,
}

impl Asset {
    /// Whether the asset's reactive power depends on its terminal voltage
    /// when no external setpoint is applied.
    pub fn is_voltage_dependent(&self) -> bool {
        self.q_setpoint.is_none() && self.control.depends_on_voltage()
    }
}

/// Immutable-by-convention network in per-unit. Element ids must not be
/// changed after construction; everything else may be edited on a copy.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub s_base: f64,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub transformers: Vec<Transformer>,
    pub assets: Vec<Asset>,
    bus_index: BTreeMap<String, usize>,
}

impl Network {
    pub fn new(
        s_base: f64,
        buses: Vec<Bus>,
        lines: Vec<Line>,
        transformers: Vec<Transformer>,
        assets: Vec<Asset>,
    ) -> Self {
        let bus_index = buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id.clone(), i))
            .collect();
        Network {
            s_base,
            buses,
            lines,
            transformers,
            assets,
            bus_index,
        }
    }

    pub fn bus_idx(&self, id: &str) -> Option<usize> {
        self.bus_index.get(id).copied()
    }

    pub fn asset_idx(&self, id: &str) -> Option<usize> {
        self.assets.iter().position(|a| a.id == id)
    }

    pub fn transformer_idx(&self, id: &str) -> Option<usize> {
        self.transformers.iter().position(|t| t.id == id)
    }

    pub fn slack_idx(&self) -> Option<usize> {
        self.buses.iter().position(|b| b.kind == BusKind::Slack)
    }

    /// Branches as `(from, to)` bus index pairs: lines first, then transformers.
    fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let lines = self
            .lines
            .iter()
            .filter_map(|l| Some((self.bus_idx(&l.from_bus)?, self.bus_idx(&l.to_bus)?)));
        let trafos = self
            .transformers
            .iter()
            .filter_map(|t| Some((self.bus_idx(&t.hv_bus)?, self.bus_idx(&t.lv_bus)?)));
        lines.chain(trafos)
    }

    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.buses.len()];
        for (e, (a, b)) in self.edges().enumerate() {
            adj[a].push((b, e));
            adj[b].push((a, e));
        }
        adj
    }

    /// Buses reachable from `start` without traversing branch `blocked`
    /// (branch numbering as in `edges`), in BFS order.
    fn reachable(&self, adj: &[Vec<(usize, usize)>], start: usize, blocked: Option<usize>) -> Vec<usize> {
        let mut seen = vec![false; self.buses.len()];
        let mut order = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(u) = queue.pop_front() {
            order.push(u);
            for &(v, e) in &adj[u] {
                if Some(e) != blocked && !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        order
    }

    /// Buses on the LV side of transformer `t` (including its LV bus).
    pub fn downstream_buses(&self, t: usize) -> BTreeSet<usize> {
        let adj = self.adjacency();
        let Some(lv) = self.bus_idx(&self.transformers[t].lv_bus) else {
            return BTreeSet::new();
        };
        self.reachable(&adj, lv, Some(self.lines.len() + t))
            .into_iter()
            .collect()
    }

    /// Reactive capability of asset `i` as a clamping box.
    pub fn capability(&self, i: usize) -> crate::control::Capability {
        crate::control::Capability::of(&self.assets[i])
    }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.errors.is_empty()
    }
}

pub fn validate(net: &Network) -> ValidationReport {
    let mut rep = ValidationReport::default();
    let err = |rep: &mut ValidationReport, msg: String| rep.errors.push(msg);

    if !(net.s_base > 0.0) {
        err(&mut rep, format!("s_base must be positive, got {}", net.s_base));
    }

    let mut ids = BTreeSet::new();
    for b in &net.buses {
        if !ids.insert(b.id.as_str()) {
            err(&mut rep, format!("duplicate bus id `{}`", b.id));
        }
        if !(b.base_kv > 0.0) {
            err(&mut rep, format!("bus `{}`: base_kv must be positive", b.id));
        }
        if !(b.v_min > 0.0 && b.v_min < b.v_max) {
            err(
                &mut rep,
                format!("bus `{}`: require 0 < v_min < v_max, got [{}, {}]", b.id, b.v_min, b.v_max),
            );
        }
        if b.kind == BusKind::Slack && !(b.v_set > 0.0) {
            err(&mut rep, format!("slack bus `{}`: v_set must be positive", b.id));
        }
    }
    let slacks: Vec<&str> = net
        .buses
        .iter()
        .filter(|b| b.kind == BusKind::Slack)
        .map(|b| b.id.as_str())
        .collect();
    match slacks.len() {
        0 => err(&mut rep, "no slack bus".into()),
        1 => {}
        _ => err(&mut rep, format!("duplicate slack: {} slack buses ({})", slacks.len(), slacks.join(", "))),
    }

    let mut branch_ids = BTreeSet::new();
    for l in &net.lines {
        if !branch_ids.insert(l.id.as_str()) {
            err(&mut rep, format!("duplicate branch id `{}`", l.id));
        }
        let from = net.bus_idx(&l.from_bus);
        let to = net.bus_idx(&l.to_bus);
        if from.is_none() {
            err(&mut rep, format!("line `{}`: unknown from_bus `{}`", l.id, l.from_bus));
        }
        if to.is_none() {
            err(&mut rep, format!("line `{}`: unknown to_bus `{}`", l.id, l.to_bus));
        }
        if l.from_bus == l.to_bus {
            err(&mut rep, format!("line `{}`: from_bus equals to_bus", l.id));
        }
        if l.r == 0.0 && l.x == 0.0 {
            err(&mut rep, format!("line `{}`: zero impedance", l.id));
        }
        if l.r < 0.0 {
            err(&mut rep, format!("line `{}`: negative resistance", l.id));
        }
        if !(l.i_max > 0.0) {
            err(&mut rep, format!("line `{}`: i_max must be positive", l.id));
        }
        if let (Some(f), Some(t)) = (from, to) {
            let (bf, bt) = (&net.buses[f], &net.buses[t]);
            if (bf.base_kv - bt.base_kv).abs() > 1e-9 * bf.base_kv {
                err(&mut rep, format!("line `{}`: connects buses with different base_kv", l.id));
            }
        }
    }

    for t in &net.transformers {
        if !branch_ids.insert(t.id.as_str()) {
            err(&mut rep, format!("duplicate branch id `{}`", t.id));
        }
        if !(t.s_rated > 0.0) {
            err(&mut rep, format!("transformer `{}`: s_rated must be positive", t.id));
        }
        if !(t.x > 0.0) {
            err(&mut rep, format!("transformer `{}`: x must be positive", t.id));
        }
        let hv = net.bus_idx(&t.hv_bus);
        let lv = net.bus_idx(&t.lv_bus);
        if hv.is_none() {
            err(&mut rep, format!("transformer `{}`: unknown hv_bus `{}`", t.id, t.hv_bus));
        }
        if lv.is_none() {
            err(&mut rep, format!("transformer `{}`: unknown lv_bus `{}`", t.id, t.lv_bus));
        }
        if let (Some(h), Some(l)) = (hv, lv) {
            let (bh, bl) = (&net.buses[h], &net.buses[l]);
            // 1:1 in-line regulators share level and base voltage.
            let inline = bh.level == bl.level && (bh.base_kv - bl.base_kv).abs() <= 1e-9 * bh.base_kv;
            if bh.level <= bl.level && !inline {
                err(
                    &mut rep,
                    format!(
                        "transformer `{}`: hv_bus level {:?} is not above lv_bus level {:?}",
                        t.id, bh.level, bl.level
                    ),
                );
            }
        }
        if let Some(tc) = &t.tap {
            if !(tc.pos_min <= tc.neutral && tc.neutral <= tc.pos_max) {
                err(&mut rep, format!("transformer `{}`: require pos_min <= neutral <= pos_max", t.id));
            }
            if !tc.contains(tc.position) {
                err(&mut rep, format!("transformer `{}`: tap position {} out of bounds", t.id, tc.position));
            }
            if !(tc.step_size > 0.0) {
                err(&mut rep, format!("transformer `{}`: step_size must be positive", t.id));
            }
            if tc.deadband < 0.0 {
                err(&mut rep, format!("transformer `{}`: negative deadband", t.id));
            } else if tc.deadband <= tc.step_size / 2.0 {
                rep.warnings.push(format!(
                    "transformer `{}`: deadband below half step ({} <= {}/2), tap hunting possible",
                    t.id, tc.deadband, tc.step_size
                ));
            }
            if tc.ratio_at(tc.pos_min as f64) <= 0.0 {
                err(&mut rep, format!("transformer `{}`: tap range yields non-positive ratio", t.id));
            }
        }
    }

    let mut asset_ids = BTreeSet::new();
    for a in &net.assets {
        if !asset_ids.insert(a.id.as_str()) {
            err(&mut rep, format!("duplicate asset id `{}`", a.id));
        }
        if net.bus_idx(&a.bus).is_none() {
            err(&mut rep, format!("asset `{}`: unknown bus `{}`", a.id, a.bus));
        }
        if !(a.q_min <= a.q_max) {
            err(&mut rep, format!("asset `{}`: q_min > q_max", a.id));
        }
        let controllable = a.directly_controllable || a.control.depends_on_voltage();
        if controllable && !(a.q_min <= 0.0 && 0.0 <= a.q_max) {
            err(&mut rep, format!("asset `{}`: controllable DER requires q_min <= 0 <= q_max", a.id));
        }
        if controllable && !(a.q_min.is_finite() && a.q_max.is_finite()) {
            err(&mut rep, format!("asset `{}`: controllable DER requires finite q bounds", a.id));
        }
        if let Some(s) = a.s_max {
            if !(s > 0.0) {
                err(&mut rep, format!("asset `{}`: s_max must be positive", a.id));
            } else if a.p.abs() > s * (1.0 + 1e-12) {
                err(&mut rep, format!("asset `{}`: |p| exceeds s_max", a.id));
            }
        }
        if a.directly_controllable && !a.control.admits_setpoint() {
            err(
                &mut rep,
                format!("asset `{}`: directly controllable but control does not admit a setpoint", a.id),
            );
        }
        if let Err(msg) = a.control.check() {
            err(&mut rep, format!("asset `{}`: {}", a.id, msg));
        }
        if matches!(a.control, ControlCharacteristic::QOfP { .. }) && a.s_max.is_none() {
            err(&mut rep, format!("asset `{}`: Q(P) control requires s_max", a.id));
        }
    }

    // Topology checks only make sense once every branch endpoint resolves.
    if net.buses.is_empty() || rep.errors.iter().any(|e| e.contains("unknown")) {
        return rep;
    }
    let adj = net.adjacency();
    let start = net.slack_idx().unwrap_or(0);
    let reached: BTreeSet<usize> = net.reachable(&adj, start, None).into_iter().collect();
    for (i, b) in net.buses.iter().enumerate() {
        if !reached.contains(&i) {
            err(&mut rep, format!("bus `{}` is disconnected from the slack", b.id));
        }
    }
    if reached.len() != net.buses.len() {
        return rep;
    }
    for (ti, t) in net.transformers.iter().enumerate() {
        let (Some(h), Some(l)) = (net.bus_idx(&t.hv_bus), net.bus_idx(&t.lv_bus)) else {
            continue;
        };
        let edge = net.lines.len() + ti;
        let sub: BTreeSet<usize> = net.reachable(&adj, l, Some(edge)).into_iter().collect();
        let is_bridge = !sub.contains(&h);
        if t.is_interface && !is_bridge {
            err(&mut rep, format!("interface transformer `{}` is not a cut branch", t.id));
        }
        if is_bridge && sub.contains(&start) {
            err(&mut rep, format!("transformer `{}`: slack bus lies on its LV side", t.id));
        }
        let mv_lv = net.buses[l].level == VoltageLevel::LV && net.buses[h].level != VoltageLevel::LV;
        if mv_lv {
            let inner_edges = net
                .edges()
                .enumerate()
                .filter(|&(e, (a, b))| e != edge && sub.contains(&a) && sub.contains(&b))
                .count();
            if !is_bridge || inner_edges + 1 != sub.len() {
                err(&mut rep, format!("network below MV/LV transformer `{}` is not radial", t.id));
            }
        }
    }
    rep
}

// ---------------------------------------------------------------------------
// Interfaces
// ---------------------------------------------------------------------------

/// Coordination boundary at a transformer. Reactive flow is measured at the
/// HV terminal, positive from HV to LV.
#[derive(Debug, Clone, PartialEq)]
pub struct InterfaceSpec {
    pub transformer_id: String,
    pub transformer: usize,
    pub hv_bus: usize,
    pub lv_bus: usize,
    /// Buses on the LV side, including `lv_bus`.
    pub buses: BTreeSet<usize>,
    /// All downstream assets.
    pub assets: Vec<usize>,
    /// Downstream assets accepting external setpoints.
    pub controllable_assets: Vec<usize>,
    /// Downstream tap-changer-equipped transformers, including this one.
    pub tap_changers: Vec<usize>,
}

pub fn interface_of(net: &Network, transformer_id: &str) -> Result<InterfaceSpec, GridError> {
    let Some(t) = net.transformer_idx(transformer_id) else {
        if net.lines.iter().any(|l| l.id == transformer_id)
            || net.buses.iter().any(|b| b.id == transformer_id)
            || net.assets.iter().any(|a| a.id == transformer_id)
        {
            return Err(GridError::NotATransformer(transformer_id.to_string()));
        }
        return Err(GridError::UnknownId(transformer_id.to_string()));
    };
    if !net.transformers[t].is_interface {
        return Err(GridError::NotAnInterface(transformer_id.to_string()));
    }
    Ok(interface_unchecked(net, t))
}

/// Interface at transformer `t` regardless of its `is_interface` flag.
pub(crate) fn interface_unchecked(net: &Network, t: usize) -> InterfaceSpec {
    let tr = &net.transformers[t];
    let buses = net.downstream_buses(t);
    let assets: Vec<usize> = net
        .assets
        .iter()
        .enumerate()
        .filter(|(_, a)| net.bus_idx(&a.bus).is_some_and(|b| buses.contains(&b)))
        .map(|(i, _)| i)
        .collect();
    let controllable_assets = assets
        .iter()
        .copied()
        .filter(|&i| net.assets[i].directly_controllable)
        .collect();
    let tap_changers = net
        .transformers
        .iter()
        .enumerate()
        .filter(|&(i, x)| {
            x.tap.is_some()
                && (i == t || net.bus_idx(&x.hv_bus).is_some_and(|b| buses.contains(&b)))
        })
        .map(|(i, _)| i)
        .collect();
    InterfaceSpec {
        transformer_id: tr.id.clone(),
        transformer: t,
        hv_bus: net.bus_idx(&tr.hv_bus).expect("validated network"),
        lv_bus: net.bus_idx(&tr.lv_bus).expect("validated network"),
        buses,
        assets,
        controllable_assets,
        tap_changers,
    }
}

// ---------------------------------------------------------------------------
// File format (engineering units)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineUnits {
    /// `r`, `x` in ohms, `b_shunt` in siemens, `i_max` in amperes.
    #[default]
    Ohm,
    /// All quantities already per-unit on the system base.
    Pu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineRecord {
    pub id: String,
    pub from_bus: String,
    pub to_bus: String,
    pub r: f64,
    pub x: f64,
    #[serde(default)]
    pub b_shunt: f64,
    pub i_max: f64,
    #[serde(default)]
    pub units: LineUnits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerRecord {
    pub id: String,
    pub hv_bus: String,
    pub lv_bus: String,
    /// MVA.
    pub s_rated: f64,
    /// Per-unit on the transformer's own rating.
    pub r: f64,
    pub x: f64,
    #[serde(default)]
    pub tap: Option<TapChanger>,
    #[serde(default)]
    pub is_interface: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssetRecord {
    pub id: String,
    pub bus: String,
    pub kind: AssetKind,
    /// MW, generation positive.
    pub p: f64,
    /// MVar; omitted means unbounded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_max: Option<f64>,
    /// MVA.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_max: Option<f64>,
    #[serde(default)]
    pub control: ControlCharacteristic,
    #[serde(default)]
    pub directly_controllable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    #[serde(default = "default_s_base")]
    pub s_base_mva: f64,
    pub buses: Vec<Bus>,
    #[serde(default)]
    pub lines: Vec<LineRecord>,
    #[serde(default)]
    pub transformers: Vec<TransformerRecord>,
    #[serde(default)]
    pub assets: Vec<AssetRecord>,
}

impl GridFile {
    /// Converts to per-unit. Unresolvable bus references are left for
    /// [`validate`] to report.
    pub fn to_network(&self) -> Network {
        let s_base = self.s_base_mva;
        let kv_of: BTreeMap<&str, f64> = self.buses.iter().map(|b| (b.id.as_str(), b.base_kv)).collect();
        let lines = self
            .lines
            .iter()
            .map(|l| {
                let (r, x, b_shunt, i_max) = match l.units {
                    LineUnits::Pu => (l.r, l.x, l.b_shunt, l.i_max),
                    LineUnits::Ohm => {
                        let kv = kv_of.get(l.from_bus.as_str()).copied().unwrap_or(1.0);
                        let z_base = kv * kv / s_base;
                        // kA base for a three-phase system.
                        let i_base_a = s_base / (3f64.sqrt() * kv) * 1000.0;
                        (l.r / z_base, l.x / z_base, l.b_shunt * z_base, l.i_max / i_base_a)
                    }
                };
                Line {
                    id: l.id.clone(),
                    from_bus: l.from_bus.clone(),
                    to_bus: l.to_bus.clone(),
                    r,
                    x,
                    b_shunt,
                    i_max,
                }
            })
            .collect();
        let transformers = self
            .transformers
            .iter()
            .map(|t| {
                let scale = s_base / t.s_rated;
                Transformer {
                    id: t.id.clone(),
                    hv_bus: t.hv_bus.clone(),
                    lv_bus: t.lv_bus.clone(),
                    s_rated: t.s_rated / s_base,
                    r: t.r * scale,
                    x: t.x * scale,
                    tap: t.tap.clone(),
                    is_interface: t.is_interface,
                }
            })
            .collect();
        let assets = self
            .assets
            .iter()
            .map(|a| Asset {
                id: a.id.clone(),
                bus: a.bus.clone(),
                kind: a.kind,
                p: a.p / s_base,
                q_min: a.q_min.map_or(f64::NEG_INFINITY, |q| q / s_base),
                q_max: a.q_max.map_or(f64::INFINITY, |q| q / s_base),
                s_max: a.s_max.map(|s| s / s_base),
                control: a.control.scaled(1.0 / s_base),
                directly_controllable: a.directly_controllable,
                q_setpoint: None,
            })
            .collect();
        Network::new(s_base, self.buses.clone(), lines, transformers, assets)
    }

    pub fn from_network(net: &Network) -> GridFile {
        let s_base = net.s_base;
        let lines = net
            .lines
            .iter()
            .map(|l| {
                let kv = net.bus_idx(&l.from_bus).map_or(1.0, |i| net.buses[i].base_kv);
                let z_base = kv * kv / s_base;
                let i_base_a = s_base / (3f64.sqrt() * kv) * 1000.0;
                LineRecord {
                    id: l.id.clone(),
                    from_bus: l.from_bus.clone(),
                    to_bus: l.to_bus.clone(),
                    r: l.r * z_base,
                    x: l.x * z_base,
                    b_shunt: l.b_shunt / z_base,
                    i_max: l.i_max * i_base_a,
                    units: LineUnits::Ohm,
                }
            })
            .collect();
        let transformers = net
            .transformers
            .iter()
            .map(|t| {
                let s_rated = t.s_rated * s_base;
                let scale = s_rated / s_base;
                TransformerRecord {
                    id: t.id.clone(),
                    hv_bus: t.hv_bus.clone(),
                    lv_bus: t.lv_bus.clone(),
                    s_rated,
                    r: t.r * scale,
                    x: t.x * scale,
                    tap: t.tap.clone(),
                    is_interface: t.is_interface,
                }
            })
            .collect();
        let finite = |q: f64| q.is_finite().then_some(q * s_base);
        let assets = net
            .assets
            .iter()
            .map(|a| AssetRecord {
                id: a.id.clone(),
                bus: a.bus.clone(),
                kind: a.kind,
                p: a.p * s_base,
                q_min: finite(a.q_min),
                q_max: finite(a.q_max),
                s_max: a.s_max.map(|s| s * s_base),
                control: a.control.scaled(s_base),
                directly_controllable: a.directly_controllable,
            })
            .collect();
        GridFile {
            s_base_mva: s_base,
            buses: net.buses.clone(),
            lines,
            transformers,
            assets,
        }
    }
}

pub fn parse_network(text: &str) -> Result<Network, GridError> {
    let file: GridFile = serde_json::from_str(text).map_err(|e| GridError::Schema(e.to_string()))?;
    if !(file.s_base_mva > 0.0) {
        return Err(GridError::Invalid(vec![format!(
            "s_base_mva must be positive, got {}",
            file.s_base_mva
        )]));
    }
    let net = file.to_network();
    let report = validate(&net);
    if !report.is_valid() {
        return Err(GridError::Invalid(report.errors));
    }
    Ok(net)
}

pub fn load_network(path: impl AsRef<Path>) -> Result<Network, GridError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| GridError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_network(&text)
}

pub fn network_to_json(net: &Network) -> String {
    serde_json::to_string_pretty(&GridFile::from_network(net)).expect("grid file serializes")
}

pub fn save_network(net: &Network, path: impl AsRef<Path>) -> Result<(), GridError> {
    let path = path.as_ref();
    std::fs::write(path, network_to_json(net) + "\n").map_err(|source| GridError::Io {
        path: path.display().to_string(),
        source,
    })
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.errors.is_empty() && self.warnings.is_empty() {
            return write!(f, "ok");
        }
        for e in &self.errors {
            writeln!(f, "error: {e}")?;
        }
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        Ok(())
    }
}

fn default_v_min() -> f64 {
    DEFAULT_V_MIN
}
fn default_v_max() -> f64 {
    DEFAULT_V_MAX
}
fn default_s_base() -> f64 {
    DEFAULT_S_BASE_MVA
}
fn one() -> f64 {
    1.0
}
fn one_step() -> u32 {
    1
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const TWO_BUS: &str = r#"{
        "s_base_mva": 10.0,
        "buses": [
            {"id": "b1", "kind": "slack", "base_kv": 20.0, "level": "MV"},
            {"id": "b2", "kind": "load", "base_kv": 20.0, "level": "MV"}
        ],
        "lines": [
            {"id": "l1", "from_bus": "b1", "to_bus": "b2", "r": 0.0, "x": 0.1, "i_max": 10.0, "units": "pu"}
        ],
        "assets": [
            {"id": "load", "bus": "b2", "kind": "commercial", "p": -5.0,
             "control": {"type": "direct_setpoint", "q": -2.0}}
        ]
    }"#;

    #[test]
    fn minimal_two_bus_loads() {
        let net = parse_network(TWO_BUS).unwrap();
        assert_eq!(net.buses.len(), 2);
        assert_eq!(net.lines.len(), 1);
        assert!((net.assets[0].p + 0.5).abs() < 1e-15);
        assert_eq!(net.buses[0].v_min, DEFAULT_V_MIN);
    }

    #[test]
    fn two_slacks_rejected() {
        let text = TWO_BUS.replace(r#""id": "b2", "kind": "load""#, r#""id": "b2", "kind": "slack""#);
        match parse_network(&text) {
            Err(GridError::Invalid(errs)) => {
                assert!(errs.iter().any(|e| e.contains("duplicate slack")), "{errs:?}")
            }
            other => panic!("expected invalid, got {other:?}"),
        }
    }

    #[test]
    fn all_failures_listed() {
        let text = TWO_BUS
            .replace(r#""id": "b2", "kind": "load""#, r#""id": "b2", "kind": "slack""#)
            .replace(r#""i_max": 10.0"#, r#""i_max": -1.0"#);
        let Err(GridError::Invalid(errs)) = parse_network(&text) else {
            panic!("expected invalid")
        };
        assert!(errs.len() >= 2, "{errs:?}");
    }

    #[test]
    fn schema_error_names_field() {
        let text = TWO_BUS.replace(r#""base_kv": 20.0, "level": "MV"}"#, r#""level": "MV"}"#);
        match parse_network(&text) {
            Err(GridError::Schema(msg)) => assert!(msg.contains("base_kv"), "{msg}"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn disconnected_bus_named() {
        let mut net = parse_network(TWO_BUS).unwrap();
        net.buses.push(Bus {
            id: "island".into(),
            kind: BusKind::Load,
            base_kv: 20.0,
            v_min: 0.9,
            v_max: 1.1,
            level: VoltageLevel::MV,
            v_set: 1.0,
        });
        let net = Network::new(net.s_base, net.buses, net.lines, net.transformers, net.assets);
        let rep = validate(&net);
        assert!(rep.errors.iter().any(|e| e.contains("island")), "{rep:?}");
    }

    #[test]
    fn ohm_conversion() {
        let text = TWO_BUS.replace(r#""units": "pu""#, r#""units": "ohm""#);
        let net = parse_network(&text).unwrap();
        // z_base = 20^2 / 10 = 40 ohm
        assert!((net.lines[0].x - 0.1 / 40.0).abs() < 1e-15);
        let i_base = 10.0 / (3f64.sqrt() * 20.0) * 1000.0;
        assert!((net.lines[0].i_max - 10.0 / i_base).abs() < 1e-12);
    }
}
