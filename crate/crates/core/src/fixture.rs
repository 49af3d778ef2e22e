//! Synthetic networks: tiny analytic cases, the 15-substation feeder, and
//! seeded random instances small enough for exhaustive enumeration.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::control::{ControlCharacteristic, Curve, Excitation, FallbackLaw};
use crate::grid::{
    Asset, AssetKind, AssetRecord, Bus, BusKind, GridFile, Line, LineRecord, LineUnits, Network, TapChanger,
    Transformer, TransformerRecord, VoltageLevel, DEFAULT_S_BASE_MVA,
};

fn bus(id: &str, kind: BusKind, base_kv: f64, level: VoltageLevel) -> Bus {
    Bus {
        id: id.into(),
        kind,
        base_kv,
        v_min: 0.9,
        v_max: 1.1,
        level,
        v_set: 1.0,
    }
}

fn fixed_q_asset(id: &str, bus: &str, kind: AssetKind, p: f64, q: f64) -> Asset {
    Asset {
        id: id.into(),
        bus: bus.into(),
        kind,
        p,
        q_min: f64::NEG_INFINITY,
        q_max: f64::INFINITY,
        s_max: None,
        control: ControlCharacteristic::DirectSetpoint { q },
        directly_controllable: false,
        q_setpoint: None,
    }
}

fn fallback_q_of_v() -> ControlCharacteristic {
    ControlCharacteristic::FallbackProfile {
        profile: FallbackLaw::QOfV {
            points: Curve::default_q_of_v(),
        },
    }
}

/// Slack `b1` and load bus `b2` joined by one line; a single fixed-q
/// asset at `b2` injects `(p, q)` per-unit.
pub fn two_bus(r: f64, x: f64, p: f64, q: f64) -> Network {
    Network::new(
        DEFAULT_S_BASE_MVA,
        vec![
            bus("b1", BusKind::Slack, 20.0, VoltageLevel::MV),
            bus("b2", BusKind::Load, 20.0, VoltageLevel::MV),
        ],
        vec![Line {
            id: "l1".into(),
            from_bus: "b1".into(),
            to_bus: "b2".into(),
            r,
            x,
            b_shunt: 0.0,
            i_max: 10.0,
        }],
        vec![],
        vec![fixed_q_asset("load", "b2", AssetKind::Commercial, p, q)],
    )
}

/// [`two_bus`] with one directly controllable DER at `b2` and the line
/// side marked by an interface transformer between slack and `b1`.
pub fn two_bus_der(q_lim: f64) -> Network {
    let mut net = two_bus(0.01, 0.1, -0.5, -0.2);
    let mut buses = net.buses.clone();
    buses[0].kind = BusKind::Load;
    buses.insert(0, bus("hv", BusKind::Slack, 110.0, VoltageLevel::HV));
    net.assets.push(Asset {
        id: "der".into(),
        bus: "b2".into(),
        kind: AssetKind::Pv,
        p: 0.0,
        q_min: -q_lim,
        q_max: q_lim,
        s_max: None,
        control: fallback_q_of_v(),
        directly_controllable: true,
        q_setpoint: None,
    });
    let trafo = Transformer {
        id: "t1".into(),
        hv_bus: "hv".into(),
        lv_bus: "b1".into(),
        s_rated: 4.0,
        r: 0.0005,
        x: 0.003,
        tap: None,
        is_interface: true,
    };
    Network::new(net.s_base, buses, net.lines, vec![trafo], net.assets)
}

/// HV slack and MV bus joined by a tap-changing transformer at neutral.
pub fn two_bus_transformer(step_size: f64) -> Network {
    Network::new(
        DEFAULT_S_BASE_MVA,
        vec![
            bus("hv", BusKind::Slack, 110.0, VoltageLevel::HV),
            bus("mv", BusKind::Load, 20.0, VoltageLevel::MV),
        ],
        vec![],
        vec![Transformer {
            id: "t1".into(),
            hv_bus: "hv".into(),
            lv_bus: "mv".into(),
            s_rated: 4.0,
            r: 0.001,
            x: 0.03,
            tap: Some(TapChanger {
                pos_min: -5,
                pos_max: 5,
                neutral: 0,
                step_size,
                position: 0,
                v_setpoint: 1.0,
                deadband: step_size,
                delay_steps: 1,
            }),
            is_interface: true,
        }],
        vec![],
    )
}

// ---------------------------------------------------------------------------
// 15-substation feeder
// ---------------------------------------------------------------------------

pub const FEEDER15_INTERFACE: &str = "T_HVMV";
pub const FEEDER15_SUBSTATIONS: usize = 15;
/// Substations with an OLTC-equipped MV/LV transformer.
pub const FEEDER15_OLTC_SUBSTATIONS: [usize; 3] = [5, 10, 15];

fn households_at(k: usize) -> usize {
    if k % 2 == 1 {
        11
    } else {
        10
    }
}

fn record_bus(id: String, kind: BusKind, base_kv: f64, level: VoltageLevel) -> Bus {
    bus(&id, kind, base_kv, level)
}

fn ohm_line(id: String, from: &str, to: &str, r: f64, x: f64, b: f64, i_max: f64) -> LineRecord {
    LineRecord {
        id,
        from_bus: from.into(),
        to_bus: to.into(),
        r,
        x,
        b_shunt: b,
        i_max,
        units: LineUnits::Ohm,
    }
}

#[allow(clippy::too_many_arguments)]
fn record_asset(
    id: String,
    bus: &str,
    kind: AssetKind,
    p: f64,
    q_range: Option<f64>,
    s_max: Option<f64>,
    control: ControlCharacteristic,
    direct: bool,
) -> AssetRecord {
    AssetRecord {
        id,
        bus: bus.into(),
        kind,
        p,
        q_min: q_range.map(|q| -q),
        q_max: q_range,
        s_max,
        control,
        directly_controllable: direct,
    }
}

/// Synthetic 115/20 kV feeder: one 40 MVA HV/MV OLTC transformer, three MV
/// cable feeders of five nodes, a 0.63 MVA MV/LV substation at every MV node
/// and a two-segment LV feeder behind each one.
pub fn feeder15_file() -> GridFile {
    let mut buses = vec![
        record_bus("hv".into(), BusKind::Slack, 115.0, VoltageLevel::HV),
        record_bus("mv0".into(), BusKind::Load, 20.0, VoltageLevel::MV),
    ];
    let mut lines = Vec::new();
    let mut transformers = vec![TransformerRecord {
        id: FEEDER15_INTERFACE.into(),
        hv_bus: "hv".into(),
        lv_bus: "mv0".into(),
        s_rated: 40.0,
        r: 0.004,
        x: 0.12,
        tap: Some(TapChanger {
            pos_min: -9,
            pos_max: 9,
            neutral: 0,
            step_size: 0.015,
            position: 0,
            v_setpoint: 1.02,
            deadband: 0.012,
            delay_steps: 1,
        }),
        is_interface: true,
    }];
    let mut assets = Vec::new();
    let underexcited = |cos_phi: f64| ControlCharacteristic::FixedCosPhi {
        cos_phi,
        excitation: Excitation::Underexcited,
    };
    let q_of_v = || ControlCharacteristic::QOfV {
        points: Curve::default_q_of_v(),
    };

    // NA2XS2Y 1x185 per 1.5 km segment.
    let (r_mv, x_mv, b_mv) = (0.24, 0.165, 1.9e-4);
    for f in 1..=3 {
        let mut prev = "mv0".to_string();
        for j in 1..=5 {
            let id = format!("mv{f}_{j}");
            buses.push(record_bus(id.clone(), BusKind::Load, 20.0, VoltageLevel::MV));
            lines.push(ohm_line(format!("L{f}_{j}"), &prev, &id, r_mv, x_mv, b_mv, 360.0));
            prev = id;
        }
    }

    let mut household = 0;
    for k in 1..=FEEDER15_SUBSTATIONS {
        let (f, j) = ((k - 1) / 5 + 1, (k - 1) % 5 + 1);
        let mv = format!("mv{f}_{j}");
        let lv = format!("lv{k}");
        let n1 = format!("lv{k}_1");
        let n2 = format!("lv{k}_2");
        for id in [&lv, &n1, &n2] {
            buses.push(record_bus(id.clone(), BusKind::Load, 0.4, VoltageLevel::LV));
        }
        let tap = FEEDER15_OLTC_SUBSTATIONS.contains(&k).then_some(TapChanger {
            pos_min: -4,
            pos_max: 4,
            neutral: 0,
            step_size: 0.025,
            position: 0,
            v_setpoint: 1.0,
            deadband: 0.02,
            delay_steps: 1,
        });
        transformers.push(TransformerRecord {
            id: format!("ss{k}"),
            hv_bus: mv,
            lv_bus: lv.clone(),
            s_rated: 0.63,
            r: 0.011,
            x: 0.04,
            tap,
            is_interface: true,
        });
        // NAYY 4x150 per 150 m segment.
        lines.push(ohm_line(format!("lv{k}_s1"), &lv, &n1, 0.031, 0.012, 0.0, 270.0));
        lines.push(ohm_line(format!("lv{k}_s2"), &n1, &n2, 0.031, 0.012, 0.0, 270.0));

        for h in 0..households_at(k) {
            household += 1;
            let at = if h % 2 == 0 { &n1 } else { &n2 };
            let p = -(0.0025 + 0.0005 * (household % 4) as f64);
            assets.push(record_asset(
                format!("hh{household}"),
                at,
                AssetKind::Household,
                p,
                None,
                None,
                underexcited(0.97),
                false,
            ));
        }
        let pv_p = 0.025 + 0.005 * (k % 3) as f64;
        assets.push(record_asset(
            format!("pv{k}"),
            &n2,
            AssetKind::Pv,
            pv_p,
            Some(0.45 * pv_p * 1.1),
            Some(pv_p * 1.1),
            q_of_v(),
            false,
        ));
        if k % 2 == 1 {
            let kind = if k % 4 == 1 { AssetKind::Storage } else { AssetKind::Pv };
            let p = if kind == AssetKind::Storage { 0.0 } else { 0.02 };
            assets.push(record_asset(
                format!("der{k}"),
                &n1,
                kind,
                p,
                Some(0.015),
                Some(0.025),
                fallback_q_of_v(),
                true,
            ));
        }
    }

    assets.push(record_asset(
        "wind1".into(),
        "mv1_5",
        AssetKind::Wind,
        3.0,
        Some(1.4),
        Some(3.3),
        fallback_q_of_v(),
        true,
    ));
    assets.push(record_asset(
        "pvpark".into(),
        "mv2_5",
        AssetKind::Pv,
        2.0,
        Some(0.9),
        Some(2.2),
        fallback_q_of_v(),
        true,
    ));
    assets.push(record_asset(
        "storage1".into(),
        "mv3_3",
        AssetKind::Storage,
        0.0,
        Some(0.8),
        Some(1.0),
        fallback_q_of_v(),
        true,
    ));
    assets.push(record_asset(
        "charging".into(),
        "mv3_5",
        AssetKind::EvCharging,
        -1.2,
        None,
        None,
        underexcited(1.0),
        false,
    ));
    assets.push(record_asset(
        "comm1".into(),
        "mv1_3",
        AssetKind::Commercial,
        -1.5,
        None,
        None,
        underexcited(0.95),
        false,
    ));
    assets.push(record_asset(
        "comm2".into(),
        "mv2_2",
        AssetKind::Commercial,
        -0.8,
        None,
        None,
        underexcited(0.95),
        false,
    ));

    GridFile {
        s_base_mva: DEFAULT_S_BASE_MVA,
        buses,
        lines,
        transformers,
        assets,
    }
}

pub fn feeder15() -> Network {
    feeder15_file().to_network()
}

/// Relative active-power shape of each asset class over one day of
/// `steps` quarter-hours, in `[0, 1]`.
pub fn daily_shape(kind: AssetKind, step: usize, steps: usize) -> f64 {
    let hour = 24.0 * step as f64 / steps as f64;
    let bump = |centre: f64, width: f64| (-((hour - centre) / width).powi(2)).exp();
    match kind {
        AssetKind::Pv => {
            if (6.0..=20.0).contains(&hour) {
                (std::f64::consts::PI * (hour - 6.0) / 14.0).sin().powi(2)
            } else {
                0.0
            }
        }
        AssetKind::Wind => 0.55 + 0.3 * (std::f64::consts::PI * hour / 12.0).cos(),
        AssetKind::Household => 0.35 + 0.35 * bump(7.5, 1.5) + 0.65 * bump(19.0, 2.5),
        AssetKind::Commercial => 0.3 + 0.7 * bump(12.5, 4.0),
        AssetKind::EvCharging => 0.15 + 0.85 * bump(18.5, 2.0),
        AssetKind::Storage | AssetKind::SubstationAggregate => 0.0,
    }
}

/// Day profile for the feeder: `(step, asset_id, p_mw)` for every asset.
pub fn feeder15_day_profile(steps: usize) -> Vec<(usize, String, f64)> {
    day_profile(&feeder15_file(), steps)
}

/// Every asset of `file` on its class shape from [`daily_shape`].
pub fn day_profile(file: &GridFile, steps: usize) -> Vec<(usize, String, f64)> {
    let mut rows = Vec::new();
    for step in 0..steps {
        for a in &file.assets {
            let p = match a.kind {
                AssetKind::Storage => 0.0,
                _ => a.p * daily_shape(a.kind, step, steps),
            };
            rows.push((step, a.id.clone(), (p * 1e6).round() / 1e6));
        }
    }
    rows
}

/// The feeder with every LV PV system (rating, active power and reactive
/// range) scaled by `scale`.
pub fn feeder15_high_pv(scale: f64) -> GridFile {
    let mut file = feeder15_file();
    for a in &mut file.assets {
        let lv = file.buses.iter().any(|b| b.id == a.bus && b.level == VoltageLevel::LV);
        if a.kind == AssetKind::Pv && lv {
            a.p *= scale;
            a.q_min = a.q_min.map(|q| q * scale);
            a.q_max = a.q_max.map(|q| q * scale);
            a.s_max = a.s_max.map(|s| s * scale);
        }
    }
    file
}

// ---------------------------------------------------------------------------
// Random instances
// ---------------------------------------------------------------------------

/// Seeded instance for oracle comparisons: an HV slack, an HV/MV interface
/// transformer, a short MV feeder and up to two MV/LV substations.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub net: Network,
    pub interface: String,
    /// Tap-changer transformers, all optimiser-controlled.
    pub taps: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct RandomSpec {
    pub max_buses: usize,
    pub max_taps: usize,
    pub max_assets: usize,
    /// Include a non-controllable Q(V) PV.
    pub q_of_v: bool,
    /// Probability of tightening voltage bounds toward the base case.
    pub tight_bounds: f64,
    /// Upper bound on enumeration points (tap combinations times
    /// `21^assets`).
    pub max_points: usize,
}

impl Default for RandomSpec {
    fn default() -> Self {
        RandomSpec {
            max_buses: 10,
            max_taps: 3,
            max_assets: 4,
            q_of_v: true,
            tight_bounds: 0.5,
            max_points: 30_000,
        }
    }
}

pub fn random_instance(seed: u64, spec: &RandomSpec) -> RandomInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buses = vec![bus("hv", BusKind::Slack, 110.0, VoltageLevel::HV)];
    buses[0].v_set = rng.random_range(0.98..1.03);
    buses.push(bus("mv0", BusKind::Load, 20.0, VoltageLevel::MV));
    let mut lines = Vec::new();
    let mut transformers = Vec::new();
    let mut assets = Vec::new();

    // Budget the enumeration: each optimiser tap contributes its position
    // count, each controllable asset 21 points.
    let n_assets = rng.random_range(1..=spec.max_assets);
    let mut points = 21usize.pow(n_assets as u32);
    let mut tap_budget = spec.max_taps;
    let mut new_tap = |rng: &mut ChaCha8Rng, step: f64, max_span: i32| -> Option<TapChanger> {
        if tap_budget == 0 || !rng.random_bool(0.6) {
            return None;
        }
        let span = rng.random_range(1..=max_span);
        let count = (2 * span + 1) as usize;
        if points * count > spec.max_points {
            return None;
        }
        points *= count;
        tap_budget -= 1;
        Some(TapChanger {
            pos_min: -span,
            pos_max: span,
            neutral: 0,
            step_size: step,
            position: rng.random_range(-span..=span),
            v_setpoint: 1.0,
            deadband: step,
            delay_steps: 1,
        })
    };

    transformers.push(Transformer {
        id: "T0".into(),
        hv_bus: "hv".into(),
        lv_bus: "mv0".into(),
        s_rated: rng.random_range(2.0..4.0),
        r: 0.0015,
        x: rng.random_range(0.03..0.06),
        tap: new_tap(&mut rng, 0.0125, 3),
        is_interface: true,
    });

    let n_mv = rng.random_range(1..=3usize);
    let mut mv_ids = vec!["mv0".to_string()];
    for i in 1..=n_mv {
        let id = format!("mv{i}");
        let parent = mv_ids[rng.random_range(0..mv_ids.len())].clone();
        buses.push(bus(&id, BusKind::Load, 20.0, VoltageLevel::MV));
        let len = rng.random_range(1.0..4.0);
        lines.push(Line {
            id: format!("l_{id}"),
            from_bus: parent,
            to_bus: id.clone(),
            r: 0.004 * len,
            x: 0.003 * len,
            b_shunt: 0.0,
            i_max: rng.random_range(0.3..0.8),
        });
        mv_ids.push(id);
    }

    let room = spec.max_buses.saturating_sub(buses.len());
    let n_sub = rng.random_range(0..=2usize.min(room / 2));
    let mut lv_ids = Vec::new();
    let mut budget = room;
    for s in 1..=n_sub {
        let lv = format!("lv{s}");
        let at = mv_ids[rng.random_range(1..mv_ids.len())].clone();
        buses.push(bus(&lv, BusKind::Load, 0.4, VoltageLevel::LV));
        budget -= 1;
        let s_rated = rng.random_range(0.04..0.063);
        transformers.push(Transformer {
            id: format!("ss{s}"),
            hv_bus: at,
            lv_bus: lv.clone(),
            s_rated,
            r: 0.011 / s_rated,
            x: 0.04 / s_rated,
            tap: new_tap(&mut rng, 0.025, 2),
            is_interface: true,
        });
        lv_ids.push(lv.clone());
        let extra = rng.random_range(0..=2usize.min(budget.saturating_sub(2 * (n_sub - s))));
        let mut prev = lv;
        for e in 1..=extra {
            let id = format!("lv{s}_{e}");
            buses.push(bus(&id, BusKind::Load, 0.4, VoltageLevel::LV));
            budget -= 1;
            lines.push(Line {
                id: format!("l_{id}"),
                from_bus: prev.clone(),
                to_bus: id.clone(),
                r: rng.random_range(0.8..2.0),
                x: rng.random_range(0.3..0.8),
                b_shunt: 0.0,
                i_max: rng.random_range(0.004..0.01),
            });
            lv_ids.push(id.clone());
            prev = id;
        }
    }

    let load_buses: Vec<String> = buses.iter().skip(1).map(|b| b.id.clone()).collect();
    for (i, b) in load_buses.iter().enumerate() {
        let lv = b.starts_with("lv");
        let p = if lv {
            -rng.random_range(0.001..0.004)
        } else {
            -rng.random_range(0.02..0.15)
        };
        assets.push(Asset {
            id: format!("load{i}"),
            bus: b.clone(),
            kind: if lv { AssetKind::Household } else { AssetKind::Commercial },
            p,
            q_min: f64::NEG_INFINITY,
            q_max: f64::INFINITY,
            s_max: None,
            control: ControlCharacteristic::FixedCosPhi {
                cos_phi: rng.random_range(0.9..1.0),
                excitation: Excitation::Underexcited,
            },
            directly_controllable: false,
            q_setpoint: None,
        });
    }
    if spec.q_of_v && rng.random_bool(0.6) {
        let pool = if lv_ids.is_empty() { &mv_ids[1..] } else { &lv_ids[..] };
        let at = pool[rng.random_range(0..pool.len())].clone();
        let scale = if at.starts_with("lv") { 0.01 } else { 0.2 };
        let p = scale * rng.random_range(0.5..1.0);
        assets.push(Asset {
            id: "pv_qv".into(),
            bus: at,
            kind: AssetKind::Pv,
            p,
            q_min: -0.45 * p,
            q_max: 0.45 * p,
            s_max: Some(1.1 * p),
            control: ControlCharacteristic::QOfV {
                points: Curve::default_q_of_v(),
            },
            directly_controllable: false,
            q_setpoint: None,
        });
    }
    for d in 0..n_assets {
        let lv = !lv_ids.is_empty() && rng.random_bool(0.5);
        let at = if lv {
            lv_ids[rng.random_range(0..lv_ids.len())].clone()
        } else {
            mv_ids[rng.random_range(1..mv_ids.len())].clone()
        };
        let q = if lv {
            rng.random_range(0.002..0.008)
        } else {
            rng.random_range(0.05..0.25)
        };
        assets.push(Asset {
            id: format!("der{d}"),
            bus: at,
            kind: [AssetKind::Pv, AssetKind::Wind, AssetKind::Storage][d % 3],
            p: rng.random_range(0.0..1.0) * q,
            q_min: -q,
            q_max: q,
            s_max: None,
            control: fallback_q_of_v(),
            directly_controllable: true,
            q_setpoint: None,
        });
    }

    if rng.random_bool(spec.tight_bounds) {
        for b in buses.iter_mut().skip(1) {
            b.v_min = rng.random_range(0.93..0.97);
            b.v_max = rng.random_range(1.02..1.05);
        }
    }

    let taps = transformers
        .iter()
        .filter(|t| t.tap.is_some())
        .map(|t| t.id.clone())
        .collect();
    RandomInstance {
        net: Network::new(DEFAULT_S_BASE_MVA, buses, lines, transformers, assets),
        interface: "T0".into(),
        taps,
        seed,
    }
}

/// Radial 20-bus MV network for timing the solver.
pub fn radial(n_buses: usize) -> Network {
    let mut buses = vec![bus("b0", BusKind::Slack, 20.0, VoltageLevel::MV)];
    let mut lines = Vec::new();
    let mut assets = Vec::new();
    for i in 1..n_buses {
        let id = format!("b{i}");
        buses.push(bus(&id, BusKind::Load, 20.0, VoltageLevel::MV));
        let parent = if i % 5 == 1 { 0 } else { i - 1 };
        lines.push(Line {
            id: format!("l{i}"),
            from_bus: format!("b{parent}"),
            to_bus: id.clone(),
            r: 0.006,
            x: 0.004,
            b_shunt: 1e-4,
            i_max: 1.0,
        });
        assets.push(fixed_q_asset(&format!("a{i}"), &id, AssetKind::Commercial, -0.03, -0.01));
    }
    Network::new(DEFAULT_S_BASE_MVA, buses, lines, vec![], assets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{interface_of, validate};

    #[test]
    fn feeder15_validates() {
        let net = feeder15();
        let rep = validate(&net);
        assert!(rep.is_valid(), "{rep}");
        assert!(rep.warnings.is_empty(), "{rep}");
    }

    #[test]
    fn feeder15_descriptors() {
        let file = feeder15_file();
        let hvmv = file.transformers.iter().find(|t| t.id == FEEDER15_INTERFACE).unwrap();
        assert_eq!(hvmv.s_rated, 40.0);
        let kv = |id: &str| file.buses.iter().find(|b| b.id == id).unwrap().base_kv;
        assert_eq!((kv(&hvmv.hv_bus), kv(&hvmv.lv_bus)), (115.0, 20.0));
        let households = file.assets.iter().filter(|a| a.kind == AssetKind::Household).count();
        assert!((150..=170).contains(&households), "{households}");
        for kind in [
            AssetKind::Pv,
            AssetKind::Wind,
            AssetKind::Storage,
            AssetKind::EvCharging,
            AssetKind::Commercial,
        ] {
            assert!(file.assets.iter().any(|a| a.kind == kind), "{kind:?}");
        }
        let net = feeder15();
        let ifc = interface_of(&net, FEEDER15_INTERFACE).unwrap();
        let subs = net
            .transformers
            .iter()
            .enumerate()
            .filter(|(i, t)| t.is_interface && *i != ifc.transformer)
            .count();
        assert_eq!(subs, 15);
    }

    #[test]
    fn random_instances_validate() {
        let spec = RandomSpec::default();
        for seed in 0..200 {
            let inst = random_instance(seed, &spec);
            let rep = validate(&inst.net);
            assert!(rep.is_valid(), "seed {seed}: {rep}");
            assert!(inst.net.buses.len() <= spec.max_buses);
            assert!(inst.taps.len() <= spec.max_taps);
            let controllable = inst.net.assets.iter().filter(|a| a.directly_controllable).count();
            assert!(controllable <= spec.max_assets);
        }
    }
}
