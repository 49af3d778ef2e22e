//! Quasi-static time-series runner.
//!
//! Each step applies, in order: events and profiles, the controllers
//! (with message delivery between their phases), actuation, the physics
//! (coupled power flow with OLTC automata to quiescence) and recording.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::comms::{write_log_csv, CommsError, DeliveryRecord, LinkModel, Step};
use crate::control::{settle_taps, ControlCharacteristic, FallbackPolicy, OltcState, QOverrides};
use crate::coordination::{
    default_links, CoordError, CoordinationConfig, Mode, ProtocolEvent, System, DEFAULT_VALIDITY_CYCLES,
    FALLBACK_THRESHOLD, MV_GATEWAY,
};
use crate::flex::{check_constraints, ConstraintSet, Violation};
use crate::grid::{interface_of, load_network, validate, GridError, GridFile, Network};
use crate::powerflow::{interface_q, PowerFlowSolution, TapVector};

pub const DEFAULT_STEP_MINUTES: f64 = 15.0;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Coordination(#[from] CoordError),
    #[error(transparent)]
    Comms(#[from] CommsError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ScenarioError + '_ {
    move |source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Scenario file
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Grid file, relative to the scenario file.
    pub grid: PathBuf,
    pub interface: String,
    #[serde(default = "default_step_minutes")]
    pub step_minutes: f64,
    pub horizon: usize,
    /// Profile CSV `step,asset_id,p_mw[,q_mvar]`, relative to the scenario
    /// file. Without one, injections stay at their grid-file values.
    #[serde(default)]
    pub profiles: Option<PathBuf>,
    #[serde(default)]
    pub events: Vec<ScenarioEvent>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub constraints: ConstraintOverrides,
    #[serde(default)]
    pub comms: CommsSettings,
    #[serde(default)]
    pub coordination: CoordinationSettings,
}

fn default_step_minutes() -> f64 {
    DEFAULT_STEP_MINUTES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEvent {
    pub at: usize,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    /// Reactive power requested at the interface; `null` clears it.
    TsoQRequest { q_mvar: Option<f64> },
    /// Cuts every link between the two node sets for `duration` steps.
    /// `edges` and `field` expand to all edge agents and to edges plus the
    /// MV gateway.
    CommPartition {
        a: Vec<String>,
        b: Vec<String>,
        duration: usize,
    },
    AssetLimitChange {
        asset: String,
        #[serde(default)]
        q_min_mvar: Option<f64>,
        #[serde(default)]
        q_max_mvar: Option<f64>,
    },
    TapModeChange { transformer: String, mode: TapMode },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapMode {
    Coordinated,
    Automatic,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VoltageBounds {
    #[serde(default)]
    pub v_min: Option<f64>,
    #[serde(default)]
    pub v_max: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintOverrides {
    #[serde(default, flatten)]
    pub all: VoltageBounds,
    #[serde(default)]
    pub buses: BTreeMap<String, VoltageBounds>,
}

impl ConstraintOverrides {
    pub fn apply(&self, net: &mut Network) -> Result<(), ScenarioError> {
        for b in &mut net.buses {
            b.v_min = self.all.v_min.unwrap_or(b.v_min);
            b.v_max = self.all.v_max.unwrap_or(b.v_max);
        }
        for (id, vb) in &self.buses {
            let i = net.bus_idx(id).ok_or_else(|| ScenarioError::Invalid(format!("unknown bus {id}")))?;
            let b = &mut net.buses[i];
            b.v_min = vb.v_min.unwrap_or(b.v_min);
            b.v_max = vb.v_max.unwrap_or(b.v_max);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSettings {
    pub from: String,
    pub to: String,
    #[serde(default)]
    pub latency_steps: Step,
    #[serde(default)]
    pub drop_probability: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommsSettings {
    #[serde(default)]
    pub latency_steps: Step,
    #[serde(default)]
    pub drop_probability: f64,
    /// Per-link overrides.
    #[serde(default)]
    pub links: Vec<LinkSettings>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackSetting {
    AssetProfile,
    DefaultQOfV,
    Constant { q_mvar: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinationSettings {
    #[serde(default = "one")]
    pub cycle_steps: Step,
    #[serde(default = "validity")]
    pub validity_cycles: Step,
    #[serde(default = "threshold")]
    pub staleness_bound: Step,
    #[serde(default = "asset_profile")]
    pub fallback: FallbackSetting,
    /// Tap changers driven by commands; all of them when absent.
    #[serde(default)]
    pub coordinated_taps: Option<Vec<String>>,
}

fn one() -> Step {
    1
}
fn validity() -> Step {
    DEFAULT_VALIDITY_CYCLES
}
fn threshold() -> Step {
    FALLBACK_THRESHOLD
}
fn asset_profile() -> FallbackSetting {
    FallbackSetting::AssetProfile
}

impl Default for CoordinationSettings {
    fn default() -> Self {
        CoordinationSettings {
            cycle_steps: 1,
            validity_cycles: DEFAULT_VALIDITY_CYCLES,
            staleness_bound: FALLBACK_THRESHOLD,
            fallback: FallbackSetting::AssetProfile,
            coordinated_taps: None,
        }
    }
}

/// Per-step injections from the profile CSV, in MW and MVar.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Profiles(pub BTreeMap<usize, BTreeMap<String, (f64, Option<f64>)>>);

#[derive(Debug, Deserialize)]
struct ProfileRow {
    step: usize,
    asset_id: String,
    p_mw: f64,
    #[serde(default)]
    q_mvar: Option<f64>,
}

impl Profiles {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(text.as_bytes());
        let mut out: BTreeMap<usize, BTreeMap<String, (f64, Option<f64>)>> = BTreeMap::new();
        for row in rdr.deserialize::<ProfileRow>() {
            let r = row.map_err(|e| ScenarioError::Parse(format!("profile: {e}")))?;
            out.entry(r.step).or_default().insert(r.asset_id, (r.p_mw, r.q_mvar));
        }
        Ok(Profiles(out))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "asset_id", "p_mw", "q_mvar"])?;
        for (step, rows) in &self.0 {
            for (id, (p, q)) in rows {
                let q = q.map(|q| q.to_string()).unwrap_or_default();
                w.write_record([step.to_string(), id.clone(), p.to_string(), q])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// A scenario with its grid and profiles resolved.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub scenario: Scenario,
    pub net: Network,
    pub profiles: Profiles,
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<LoadedScenario, ScenarioError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let scenario: Scenario = serde_json::from_str(&text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let net = load_network(dir.join(&scenario.grid))?;
    let profiles = match &scenario.profiles {
        Some(p) => {
            let p = dir.join(p);
            Profiles::parse(&fs::read_to_string(&p).map_err(io_err(&p))?)?
        }
        None => Profiles::default(),
    };
    let loaded = LoadedScenario { scenario, net, profiles };
    loaded.check()?;
    Ok(loaded)
}

impl LoadedScenario {
    /// Scenario consistency against its grid.
    pub fn check(&self) -> Result<(), ScenarioError> {
        let sc = &self.scenario;
        let report = validate(&self.net);
        if !report.is_valid() {
            return Err(GridError::Invalid(report.errors).into());
        }
        interface_of(&self.net, &sc.interface)?;
        if !self.profiles.0.is_empty() {
            if let Some(gap) = (0..sc.horizon).find(|s| !self.profiles.0.contains_key(s)) {
                return Err(ScenarioError::Invalid(format!("profiles do not cover step {gap}")));
            }
            for rows in self.profiles.0.values() {
                if let Some(id) = rows.keys().find(|id| self.net.asset_idx(id).is_none()) {
                    return Err(ScenarioError::Invalid(format!("profile names unknown asset {id}")));
                }
            }
        }
        for e in &sc.events {
            if e.at >= sc.horizon {
                return Err(ScenarioError::Invalid(format!("event at step {} is beyond the horizon", e.at)));
            }
            match &e.kind {
                EventKind::AssetLimitChange { asset, .. } if self.net.asset_idx(asset).is_none() => {
                    return Err(ScenarioError::Invalid(format!("unknown asset {asset}")));
                }
                EventKind::TapModeChange { transformer, .. }
                    if self.net.transformer_idx(transformer).and_then(|t| self.net.transformers[t].tap.as_ref()).is_none() =>
                {
                    return Err(ScenarioError::Invalid(format!("{transformer} has no tap changer")));
                }
                _ => {}
            }
        }
        if sc.coordination.cycle_steps == 0 {
            return Err(ScenarioError::Invalid("cycle_steps must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

/// One step of the run. Reactive power in MVar, voltages in per-unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub converged: bool,
    pub voltages: BTreeMap<String, f64>,
    pub interface_q_mvar: Option<f64>,
    pub flex_q_min_mvar: Option<f64>,
    pub flex_q_max_mvar: Option<f64>,
    pub flex_feasible: Option<bool>,
    pub target_mvar: Option<f64>,
    /// `target - achieved` when a target was acted on.
    pub deviation_mvar: Option<f64>,
    pub taps: BTreeMap<String, i32>,
    /// Applied injections `(p_mw, q_mvar)` per asset.
    pub dispatch: BTreeMap<String, (f64, f64)>,
    pub modes: BTreeMap<String, Mode>,
    pub violations: Vec<Violation>,
    pub oltc_iterations: usize,
    pub oltc_quiescent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultLog {
    pub s_base: f64,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub events: Vec<ProtocolEvent>,
    pub comms: Vec<DeliveryRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlexStats {
    pub reports: usize,
    pub infeasible: usize,
    pub min_width_mvar: Option<f64>,
    pub max_width_mvar: Option<f64>,
    pub mean_width_mvar: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub steps: usize,
    pub seed: u64,
    pub violation_count: usize,
    pub violation_steps: usize,
    pub nonconverged_steps: usize,
    pub max_abs_deviation_mvar: Option<f64>,
    pub mean_abs_deviation_mvar: Option<f64>,
    pub flex: FlexStats,
    /// Steps each field agent spent in fallback.
    pub fallback_steps: BTreeMap<String, usize>,
    pub messages_sent: usize,
    pub messages_dropped: usize,
}

impl ResultLog {
    pub fn violation_count(&self) -> usize {
        self.steps.iter().map(|s| s.violations.len()).sum()
    }

    pub fn summary(&self) -> Summary {
        let devs: Vec<f64> = self.steps.iter().filter_map(|s| s.deviation_mvar).map(f64::abs).collect();
        let widths: Vec<f64> = self
            .steps
            .iter()
            .filter_map(|s| Some(s.flex_q_max_mvar? - s.flex_q_min_mvar?))
            .collect();
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let fold = |v: &[f64], f: fn(f64, f64) -> f64| v.iter().copied().reduce(f);
        let mut fallback_steps = BTreeMap::new();
        for s in &self.steps {
            for (n, m) in &s.modes {
                *fallback_steps.entry(n.clone()).or_insert(0) += usize::from(*m == Mode::Fallback);
            }
        }
        Summary {
            steps: self.steps.len(),
            seed: self.seed,
            violation_count: self.violation_count(),
            violation_steps: self.steps.iter().filter(|s| !s.violations.is_empty()).count(),
            nonconverged_steps: self.steps.iter().filter(|s| !s.converged).count(),
            max_abs_deviation_mvar: fold(&devs, f64::max),
            mean_abs_deviation_mvar: mean(&devs),
            flex: FlexStats {
                reports: self.steps.iter().filter(|s| s.flex_feasible.is_some()).count(),
                infeasible: self.steps.iter().filter(|s| s.flex_feasible == Some(false)).count(),
                min_width_mvar: fold(&widths, f64::min),
                max_width_mvar: fold(&widths, f64::max),
                mean_width_mvar: mean(&widths),
            },
            fallback_steps,
            messages_sent: self.comms.len(),
            messages_dropped: self.comms.iter().filter(|r| r.t_delivered.is_none()).count(),
        }
    }
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

fn expand_nodes(names: &[String], edges: &[String]) -> Vec<String> {
    let mut out = BTreeSet::new();
    for n in names {
        match n.as_str() {
            "edges" => out.extend(edges.iter().cloned()),
            "field" => {
                out.extend(edges.iter().cloned());
                out.insert(MV_GATEWAY.to_string());
            }
            other => {
                out.insert(other.to_string());
            }
        }
    }
    out.into_iter().collect()
}

fn links_for(sc: &Scenario, net: &Network) -> Result<Vec<LinkModel>, ScenarioError> {
    let mut links = default_links(net, &sc.interface, sc.comms.latency_steps);
    for l in &mut links {
        l.drop_probability = sc.comms.drop_probability;
    }
    for o in &sc.comms.links {
        let l = links
            .iter_mut()
            .find(|l| l.from == o.from && l.to == o.to)
            .ok_or_else(|| ScenarioError::Invalid(format!("no link {} -> {}", o.from, o.to)))?;
        l.latency_steps = o.latency_steps;
        l.drop_probability = o.drop_probability;
    }
    Ok(links)
}

fn fallback_policy(s: FallbackSetting, s_base: f64) -> FallbackPolicy {
    match s {
        FallbackSetting::AssetProfile => FallbackPolicy::AssetProfile,
        FallbackSetting::DefaultQOfV => FallbackPolicy::DefaultQofV,
        FallbackSetting::Constant { q_mvar } => FallbackPolicy::Constant(q_mvar / s_base),
    }
}

/// Runs the scenario; `seed` overrides the scenario's own.
pub fn run_scenario(sc: &LoadedScenario, seed: Option<u64>) -> Result<ResultLog, ScenarioError> {
    let s = &sc.scenario;
    let seed = seed.unwrap_or(s.seed);
    let mut physical = sc.net.clone();
    s.constraints.apply(&mut physical)?;
    let s_base = physical.s_base;
    let coordinated: BTreeSet<String> = match &s.coordination.coordinated_taps {
        Some(ids) => ids.iter().cloned().collect(),
        None => physical.transformers.iter().filter(|t| t.tap.is_some()).map(|t| t.id.clone()).collect(),
    };
    let policy = fallback_policy(s.coordination.fallback, s_base);
    let config = CoordinationConfig {
        cycle_steps: s.coordination.cycle_steps,
        validity_cycles: s.coordination.validity_cycles,
        staleness_bound: s.coordination.staleness_bound,
        fallback_policy: policy,
    };
    let mut system = System::new(&physical, &s.interface, &coordinated, config, links_for(s, &physical)?, seed)?;
    let edges: Vec<String> = system.agents.keys().filter(|n| n.as_str() != MV_GATEWAY).cloned().collect();
    let ifc = interface_of(&physical, &s.interface)?;

    let mut last: Option<PowerFlowSolution> = None;
    let mut oltc: BTreeMap<usize, OltcState> = BTreeMap::new();
    let mut steps = Vec::with_capacity(s.horizon);
    let mut events = Vec::new();
    let scenario_event = |t: usize, kind: &str, detail: String| ProtocolEvent {
        t: t as Step,
        node: "scenario".into(),
        kind: kind.into(),
        detail,
    };

    for t in 0..s.horizon {
        let now = t as Step;
        for e in s.events.iter().filter(|e| e.at == t) {
            match &e.kind {
                EventKind::TsoQRequest { q_mvar } => {
                    system.set_tso_request(q_mvar.map(|q| q / s_base));
                    events.push(scenario_event(t, "tso_q_request", format!("{q_mvar:?}")));
                }
                EventKind::CommPartition { a, b, duration } => {
                    let (a, b) = (expand_nodes(a, &edges), expand_nodes(b, &edges));
                    let ar: Vec<&str> = a.iter().map(String::as_str).collect();
                    let br: Vec<&str> = b.iter().map(String::as_str).collect();
                    system.bus.partition(&ar, &br, now, now + *duration as Step)?;
                    events.push(scenario_event(t, "comm_partition", format!("{a:?} | {b:?} for {duration}")));
                }
                EventKind::AssetLimitChange {
                    asset,
                    q_min_mvar,
                    q_max_mvar,
                } => {
                    let i = physical.asset_idx(asset).expect("checked");
                    let a = &mut physical.assets[i];
                    a.q_min = q_min_mvar.map_or(a.q_min, |q| q / s_base);
                    a.q_max = q_max_mvar.map_or(a.q_max, |q| q / s_base);
                    events.push(scenario_event(t, "asset_limit_change", asset.clone()));
                }
                EventKind::TapModeChange { transformer, mode } => {
                    system.set_tap_mode(transformer, *mode == TapMode::Coordinated);
                    events.push(scenario_event(t, "tap_mode_change", format!("{transformer} {mode:?}")));
                }
            }
        }
        if let Some(rows) = sc.profiles.0.get(&t) {
            for (id, &(p, q)) in rows {
                let i = physical.asset_idx(id).expect("checked");
                let a = &mut physical.assets[i];
                a.p = p / s_base;
                if let (Some(q), false) = (q, a.directly_controllable) {
                    a.control = ControlCharacteristic::DirectSetpoint { q: q / s_base };
                }
            }
        }

        let report = system.step(now, &physical, last.as_ref())?;
        events.extend(report.events.iter().cloned());

        let mut state = physical.clone();
        let automatic = system.actuation().apply(&mut state, policy);
        let taps = TapVector::from_network(&state);
        let settled = settle_taps(&state, &QOverrides::new(), &taps, &automatic, &oltc);
        let to_mvar = |q: f64| q * s_base;
        let mut rec = StepRecord {
            step: t,
            converged: false,
            voltages: BTreeMap::new(),
            interface_q_mvar: None,
            flex_q_min_mvar: report.flex.as_ref().map(|f| to_mvar(f.q_min)),
            flex_q_max_mvar: report.flex.as_ref().map(|f| to_mvar(f.q_max)),
            flex_feasible: report.flex.as_ref().map(|f| f.feasible),
            target_mvar: report.target.as_ref().map(|q| to_mvar(q.q_target)),
            deviation_mvar: None,
            taps: taps.0.clone(),
            dispatch: BTreeMap::new(),
            modes: system.modes(),
            violations: Vec::new(),
            oltc_iterations: 0,
            oltc_quiescent: true,
        };
        match settled {
            Ok(out) => {
                for (id, &p) in &out.taps.0 {
                    if let Some(tc) = physical.transformer_idx(id).and_then(|i| physical.transformers[i].tap.as_mut()) {
                        tc.position = p;
                    }
                }
                oltc = out.states;
                let sol = out.coupled.solution;
                let q = interface_q(&sol, &ifc);
                rec.converged = true;
                rec.voltages = state.buses.iter().zip(&sol.vm).map(|(b, &v)| (b.id.clone(), v)).collect();
                rec.interface_q_mvar = Some(to_mvar(q));
                rec.deviation_mvar = report.target.as_ref().map(|tg| to_mvar(tg.q_target - q));
                rec.taps = out.taps.0;
                rec.dispatch = out
                    .coupled
                    .dispatch
                    .to_map(&state)
                    .into_iter()
                    .map(|(id, (p, q))| (id, (to_mvar(p), to_mvar(q))))
                    .collect();
                rec.violations = check_constraints(&state, &sol, &ConstraintSet::from_network(&state));
                rec.oltc_iterations = out.iterations;
                rec.oltc_quiescent = out.quiescent;
                last = Some(sol);
            }
            Err(e) => events.push(scenario_event(t, "power_flow_failed", e.to_string())),
        }
        steps.push(rec);
    }
    Ok(ResultLog {
        s_base,
        seed,
        steps,
        events,
        comms: system.bus.log().to_vec(),
    })
}

// ---------------------------------------------------------------------------
// Output
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    JsonLines,
}

impl std::str::FromStr for OutputFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "jsonl" | "json-lines" => Ok(OutputFormat::JsonLines),
            other => Err(format!("unknown format {other}")),
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, ScenarioError> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> ScenarioError + '_ {
    move |e| ScenarioError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

/// Writes `timeseries`, `events`, `comms.csv` and `summary.json` into
/// `out_dir`. CSV timeseries are long-form `step,group,id,value`.
pub fn emit_results(log: &ResultLog, format: OutputFormat, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, ScenarioError> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    match format {
        OutputFormat::Csv => {
            let p = dir.join("timeseries.csv");
            write_timeseries_csv(log, create(&p)?).map_err(csv_err(&p))?;
            written.push(p);
            let p = dir.join("events.csv");
            let mut w = csv::Writer::from_writer(create(&p)?);
            w.write_record(["t", "node", "kind", "detail"]).map_err(csv_err(&p))?;
            for e in &log.events {
                w.write_record([e.t.to_string(), e.node.clone(), e.kind.clone(), e.detail.clone()])
                    .map_err(csv_err(&p))?;
            }
            w.flush().map_err(io_err(&p))?;
            written.push(p);
        }
        OutputFormat::JsonLines => {
            let p = dir.join("timeseries.jsonl");
            write_jsonl(&log.steps, &p)?;
            written.push(p);
            let p = dir.join("events.jsonl");
            write_jsonl(&log.events, &p)?;
            written.push(p);
        }
    }
    let p = dir.join("comms.csv");
    write_log_csv(&log.comms, create(&p)?).map_err(csv_err(&p))?;
    written.push(p);
    let p = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&log.summary()).expect("summary serialises");
    fs::write(&p, text + "\n").map_err(io_err(&p))?;
    written.push(p);
    Ok(written)
}

fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<(), ScenarioError> {
    let mut w = create(path)?;
    for it in items {
        let line = serde_json::to_string(it).expect("records serialise");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, ScenarioError> {
    let path = path.as_ref();
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(io_err(path))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| ScenarioError::Parse(e.to_string()))?);
        }
    }
    Ok(out)
}

fn write_timeseries_csv<W: Write>(log: &ResultLog, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "group", "id", "value"])?;
    let mut row = |step: usize, group: &str, id: &str, value: String| {
        w.write_record([step.to_string(), group.to_string(), id.to_string(), value])
    };
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for s in &log.steps {
        row(s.step, "status", "converged", s.converged.to_string())?;
        row(s.step, "interface", "q_mvar", opt(s.interface_q_mvar))?;
        row(s.step, "interface", "target_mvar", opt(s.target_mvar))?;
        row(s.step, "interface", "deviation_mvar", opt(s.deviation_mvar))?;
        row(s.step, "flex", "q_min_mvar", opt(s.flex_q_min_mvar))?;
        row(s.step, "flex", "q_max_mvar", opt(s.flex_q_max_mvar))?;
        for (b, v) in &s.voltages {
            row(s.step, "voltage", b, v.to_string())?;
        }
        for (t, p) in &s.taps {
            row(s.step, "tap", t, p.to_string())?;
        }
        for (a, (p, q)) in &s.dispatch {
            row(s.step, "asset_p_mw", a, p.to_string())?;
            row(s.step, "asset_q_mvar", a, q.to_string())?;
        }
        for (n, m) in &s.modes {
            let m = match m {
                Mode::Coordinated => "coordinated",
                Mode::Fallback => "fallback",
            };
            row(s.step, "mode", n, m.to_string())?;
        }
        row(s.step, "violations", "count", s.violations.len().to_string())?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Fixtures
// ---------------------------------------------------------------------------

/// The 15-substation MV feeder.
pub fn build_fixture_feeder() -> GridFile {
    crate::fixture::feeder15_file()
}

/// One-day profile for the feeder at quarter-hour resolution.
pub fn feeder15_day_profiles(steps: usize) -> Profiles {
    day_profiles(&crate::fixture::feeder15_file(), steps)
}

/// Active-power day profile for every asset of `file`.
pub fn day_profiles(file: &GridFile, steps: usize) -> Profiles {
    let mut out: BTreeMap<usize, BTreeMap<String, (f64, Option<f64>)>> = BTreeMap::new();
    for (step, id, p) in crate::fixture::day_profile(file, steps) {
        out.entry(step).or_default().insert(id, (p, None));
    }
    Profiles(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::{self, FEEDER15_INTERFACE};

    fn scenario(horizon: usize) -> Scenario {
        serde_json::from_value(serde_json::json!({
            "grid": "feeder15.json",
            "interface": FEEDER15_INTERFACE,
            "horizon": horizon,
        }))
        .unwrap()
    }

    fn loaded(horizon: usize) -> LoadedScenario {
        LoadedScenario {
            scenario: scenario(horizon),
            net: fixture::feeder15(),
            profiles: Profiles::default(),
        }
    }

    #[test]
    fn profiles_parse_optional_q() {
        let p = Profiles::parse("step,asset_id,p_mw,q_mvar\n0,a,1.5,\n0,b,-0.2,0.1\n1,a,1.0,\n").unwrap();
        assert_eq!(p.0[&0]["a"], (1.5, None));
        assert_eq!(p.0[&0]["b"], (-0.2, Some(0.1)));
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        assert_eq!(Profiles::parse(std::str::from_utf8(&buf).unwrap()).unwrap(), p);
    }

    #[test]
    fn check_rejects_bad_scenarios() {
        let mut sc = loaded(4);
        sc.profiles = feeder15_day_profiles(3);
        assert!(matches!(sc.check(), Err(ScenarioError::Invalid(m)) if m.contains("step 3")));

        let mut sc = loaded(4);
        sc.scenario.events.push(ScenarioEvent {
            at: 4,
            kind: EventKind::TsoQRequest { q_mvar: Some(0.0) },
        });
        assert!(matches!(sc.check(), Err(ScenarioError::Invalid(m)) if m.contains("horizon")));

        let mut sc = loaded(4);
        sc.scenario.events.push(ScenarioEvent {
            at: 1,
            kind: EventKind::AssetLimitChange {
                asset: "nope".into(),
                q_min_mvar: None,
                q_max_mvar: None,
            },
        });
        assert!(sc.check().is_err());

        let mut sc = loaded(4);
        sc.scenario.interface = "nope".into();
        assert!(sc.check().is_err());
        assert!(loaded(4).check().is_ok());
    }

    #[test]
    fn events_use_tagged_form() {
        let e: ScenarioEvent =
            serde_json::from_str(r#"{"at":3,"kind":"comm_partition","a":["central"],"b":["edges"],"duration":5}"#).unwrap();
        assert_eq!(e.at, 3);
        assert!(matches!(e.kind, EventKind::CommPartition { duration: 5, .. }));
        let e: ScenarioEvent = serde_json::from_str(r#"{"at":0,"kind":"tso_q_request","q_mvar":null}"#).unwrap();
        assert_eq!(e.kind, EventKind::TsoQRequest { q_mvar: None });
    }

    #[test]
    fn empty_horizon_writes_headers_only() {
        let log = run_scenario(&loaded(0), None).unwrap();
        assert!(log.steps.is_empty());
        let dir = tempfile::tempdir().unwrap();
        emit_results(&log, OutputFormat::Csv, dir.path()).unwrap();
        let ts = fs::read_to_string(dir.path().join("timeseries.csv")).unwrap();
        assert_eq!(ts.trim(), "step,group,id,value");
        let ev = fs::read_to_string(dir.path().join("events.csv")).unwrap();
        assert_eq!(ev.trim(), "t,node,kind,detail");
        assert_eq!(log.summary().violation_count, 0);
    }

    #[test]
    fn constant_inputs_give_flat_run() {
        let log = run_scenario(&loaded(6), None).unwrap();
        assert_eq!(log.steps.len(), 6);
        let q0 = log.steps[1].interface_q_mvar.unwrap();
        for r in &log.steps[1..] {
            assert!(r.converged);
            assert!((r.interface_q_mvar.unwrap() - q0).abs() < 1e-6);
            assert_eq!(r.taps, log.steps[1].taps);
            for (a, b) in r.voltages.values().zip(log.steps[1].voltages.values()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn jsonl_round_trips() {
        let log = run_scenario(&loaded(3), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_results(&log, OutputFormat::JsonLines, dir.path()).unwrap();
        let back: Vec<StepRecord> = read_jsonl(dir.path().join("timeseries.jsonl")).unwrap();
        assert_eq!(back, log.steps);
        let s: Summary = serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(s, log.summary());
    }

    #[test]
    fn output_format_names() {
        assert_eq!("csv".parse::<OutputFormat>().unwrap(), OutputFormat::Csv);
        assert_eq!("jsonl".parse::<OutputFormat>().unwrap(), OutputFormat::JsonLines);
        assert!("xml".parse::<OutputFormat>().is_err());
    }
}
