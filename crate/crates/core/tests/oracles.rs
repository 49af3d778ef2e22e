//! Independent reference computations checked against the library.

mod common;

use common::{fixed_dispatch, max_mismatch, two_bus_closed_form, SMALL};
use num_complex::Complex64;
use proptest::prelude::*;
use voltcoord::comms::{Bus, LinkModel, MessageKind, Step};
use voltcoord::control::{coupled_power_flow, coupled_power_flow_with, local_q_slopes, CoupledOptions, QOverrides};
use voltcoord::fixture;
use voltcoord::flex::{check_constraints, ConstraintSet, Violation};
use voltcoord::grid::{interface_of, GridFile, Network, VoltageLevel};
use voltcoord::powerflow::{interface_q, jacobian_sensitivities, solve_power_flow, Dispatch, PfOptions, TapVector};

#[test]
fn two_bus_matches_quadratic() {
    let net = fixture::two_bus(0.0, 0.1, -0.5, -0.2);
    let sol = solve_power_flow(&net, &fixed_dispatch(&net), &TapVector::from_network(&net), &PfOptions::default())
        .unwrap();
    let expected = two_bus_closed_form(0.0, 0.1, 0.5, 0.2).unwrap();
    assert!((expected - 0.97825).abs() < 1e-5);
    assert!((sol.vm[1] - expected).abs() < 1e-6, "{} vs {expected}", sol.vm[1]);
}

#[test]
fn checked_in_fixtures_match_generators() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures");
    let two: GridFile = serde_json::from_str(&std::fs::read_to_string(format!("{dir}/two_bus.json")).unwrap()).unwrap();
    assert_eq!(two, GridFile::from_network(&fixture::two_bus(0.0, 0.1, -0.5, -0.2)));
    let feeder: GridFile = serde_json::from_str(&std::fs::read_to_string(format!("{dir}/feeder15.json")).unwrap()).unwrap();
    assert_eq!(feeder, fixture::feeder15_file());
    let high: GridFile = serde_json::from_str(&std::fs::read_to_string(format!("{dir}/feeder15_highpv.json")).unwrap()).unwrap();
    assert_eq!(high, fixture::feeder15_high_pv(3.5));
}

#[test]
fn feeder_descriptors() {
    let net = fixture::feeder15();
    let ifc = &net.transformers[net.transformer_idx(fixture::FEEDER15_INTERFACE).unwrap()];
    let base = |id: &str| net.buses[net.bus_idx(id).unwrap()].base_kv;
    assert_eq!(base(&ifc.hv_bus), 115.0);
    assert_eq!(base(&ifc.lv_bus), 20.0);
    assert!((ifc.s_rated * net.s_base - 40.0).abs() < 1e-9);
    let level = |id: &str| net.buses[net.bus_idx(id).unwrap()].level;
    let substations = net
        .transformers
        .iter()
        .filter(|t| level(&t.hv_bus) == VoltageLevel::MV && level(&t.lv_bus) == VoltageLevel::LV)
        .collect::<Vec<_>>();
    assert_eq!(substations.len(), 15);
    assert!(substations.iter().any(|t| t.tap.is_some()));
    let households = net.assets.iter().filter(|a| a.kind == voltcoord::grid::AssetKind::Household).count();
    assert!((150..=170).contains(&households), "{households}");
}

#[test]
fn converged_solutions_balance_at_every_bus() {
    for seed in 0..20 {
        let inst = fixture::random_instance(seed, &SMALL);
        let taps = TapVector::from_network(&inst.net);
        let c = coupled_power_flow(&inst.net, &QOverrides::new(), &taps).unwrap();
        let m = max_mismatch(&inst.net, &c.solution, &c.dispatch, &taps);
        assert!(m <= 1e-8, "seed {seed}: mismatch {m}");
    }
    let net = fixture::feeder15();
    let taps = TapVector::from_network(&net);
    let c = coupled_power_flow(&net, &QOverrides::new(), &taps).unwrap();
    assert!(max_mismatch(&net, &c.solution, &c.dispatch, &taps) <= 1e-8);
}

#[test]
fn raising_tap_raises_lv_voltage() {
    let mut net = fixture::two_bus_transformer(0.0125);
    let t = net.transformers[0].clone();
    let tc = t.tap.clone().unwrap();
    let mut taps = TapVector::from_network(&net);
    let solve = |net: &Network, taps: &TapVector, d: &Dispatch| solve_power_flow(net, d, taps, &PfOptions::default()).unwrap().vm[1];
    let loaded = fixed_dispatch(&net);
    let v0 = solve(&net, &taps, &loaded);
    taps.set(&t.id, tc.position + 1);
    assert!(solve(&net, &taps, &loaded) > v0);

    for a in &mut net.assets {
        a.p = 0.0;
    }
    let idle = Dispatch::active_only(&net);
    let hv = net.buses[net.slack_idx().unwrap()].v_set;
    for pos in [tc.pos_min, tc.neutral, tc.pos_max] {
        taps.set(&t.id, pos);
        let expected = hv * (1.0 + (pos - tc.neutral) as f64 * 0.0125);
        assert!((solve(&net, &taps, &idle) - expected).abs() < 1e-9, "position {pos}");
    }
}

/// Brute-force fixed point of a Q(V) inverter: scan its reactive power on a
/// 1e-4 grid and keep the point where the curve output agrees best.
#[test]
fn q_of_v_fixed_point_matches_scan() {
    let mut net = fixture::two_bus_der(0.3);
    let load = net.asset_idx("load").unwrap();
    net.assets[load].control = voltcoord::ControlCharacteristic::DirectSetpoint { q: -0.5 };
    net.assets[load].p = -1.2;
    let der = net.asset_idx("der").unwrap();
    let bus = net.bus_idx(&net.assets[der].bus).unwrap();
    let taps = TapVector::from_network(&net);
    let solve_at = |q: f64| {
        let mut ov = QOverrides::new();
        ov.insert(der, q);
        coupled_power_flow(&net, &ov, &taps).unwrap().solution.vm[bus]
    };
    let curve = |v: f64| -> f64 {
        let pts = [(0.93, 1.0), (0.97, 0.0), (1.03, 0.0), (1.07, -1.0)];
        if v <= pts[0].0 {
            return pts[0].1;
        }
        if v >= pts[3].0 {
            return pts[3].1;
        }
        let k = pts.iter().rposition(|p| p.0 <= v).unwrap();
        let (a, b) = (pts[k], pts[k + 1]);
        a.1 + (b.1 - a.1) * (v - a.0) / (b.0 - a.0)
    };
    let v_open = solve_at(0.0);
    assert!(v_open < 0.965, "droop inactive: {v_open}");
    let q_max = 0.3;
    let (mut best_q, mut best_r) = (0.0, f64::INFINITY);
    for k in 0..=6000 {
        let q = -0.3 + k as f64 * 1e-4;
        let r = (q - (q_max * curve(solve_at(q))).clamp(-0.3, 0.3)).abs();
        if r < best_r {
            best_r = r;
            best_q = q;
        }
    }
    let c = coupled_power_flow(&net, &QOverrides::new(), &taps).unwrap();
    assert!((c.dispatch.q[der] - best_q).abs() <= 1.5e-4, "{} vs {best_q}", c.dispatch.q[der]);
}

fn fd_relative_error(approx: &[f64], fd: &[f64]) -> f64 {
    let scale = fd.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let err = approx.iter().zip(fd).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if scale < 1e-9 {
        err
    } else {
        err / scale
    }
}

#[test]
fn jacobian_sensitivities_match_finite_differences() {
    let h = 1e-5;
    let mut checked = 0;
    for seed in 0..20 {
        let inst = fixture::random_instance(seed, &SMALL);
        let net = &inst.net;
        let ifc = interface_of(net, &inst.interface).unwrap();
        let taps = TapVector::from_network(net);
        let base = coupled_power_flow(net, &QOverrides::new(), &taps).unwrap();
        let assets = ifc.controllable_assets.clone();
        let (dv, dq) = jacobian_sensitivities(net, &base.solution, &ifc, &taps, &assets, None).unwrap();
        for (col, &a) in assets.iter().enumerate() {
            let at = |delta: f64| {
                let mut d = base.dispatch.clone();
                d.q[a] += delta;
                solve_power_flow(net, &d, &taps, &PfOptions::default()).unwrap()
            };
            let (up, dn) = (at(h), at(-h));
            let fd_v: Vec<f64> = up.vm.iter().zip(&dn.vm).map(|(u, d)| (u - d) / (2.0 * h)).collect();
            let jv: Vec<f64> = (0..net.buses.len()).map(|r| dv[(r, col)]).collect();
            let e = fd_relative_error(&jv, &fd_v);
            assert!(e <= 1e-3, "seed {seed} asset {a}: dV/dQ rel err {e}");
            let fd_q = (interface_q(&up, &ifc) - interface_q(&dn, &ifc)) / (2.0 * h);
            let e = (dq[col] - fd_q).abs() / fd_q.abs().max(1e-9);
            assert!(e <= 1e-3, "seed {seed} asset {a}: dQif/dQ rel err {e}");
            checked += 1;
        }
    }
    assert!(checked >= 20, "only {checked} columns checked");
}

#[test]
fn closed_loop_sensitivities_match_finite_differences() {
    let h = 1e-5;
    let tight = CoupledOptions {
        picard_tol: 1e-13,
        pf_tol: 1e-12,
        secant: true,
    };
    let breakpoints = [0.93, 0.97, 1.03, 1.07];
    let mut checked = 0;
    for seed in 0..20 {
        let inst = fixture::random_instance(seed, &SMALL);
        let net = &inst.net;
        let ifc = interface_of(net, &inst.interface).unwrap();
        let taps = TapVector::from_network(net);
        let base = coupled_power_flow_with(net, &QOverrides::new(), &taps, None, &tight).unwrap();
        let near_kink = net.assets.iter().any(|a| {
            a.is_voltage_dependent() && {
                let v = base.solution.vm[net.bus_idx(&a.bus).unwrap()];
                breakpoints.iter().any(|b| (v - b).abs() < 2e-3)
            }
        });
        if near_kink {
            continue;
        }
        let assets = ifc.controllable_assets.clone();
        let held: QOverrides = assets.iter().map(|&a| (a, base.dispatch.q[a])).collect();
        let slopes = local_q_slopes(net, &held, &base.solution);
        let (_, dq) = jacobian_sensitivities(net, &base.solution, &ifc, &taps, &assets, Some(&slopes)).unwrap();
        for (col, &a) in assets.iter().enumerate() {
            let at = |delta: f64| {
                let mut ov = held.clone();
                ov.insert(a, base.dispatch.q[a] + delta);
                let c = coupled_power_flow_with(net, &ov, &taps, Some(&base.solution), &tight).unwrap();
                interface_q(&c.solution, &ifc)
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            let e = (dq[col] - fd).abs() / fd.abs().max(1e-9);
            assert!(e <= 1e-3, "seed {seed} asset {a}: closed-loop dQif/dQ rel err {e}");
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn twenty_bus_solve_is_fast() {
    let net = fixture::radial(20);
    let d = fixed_dispatch(&net);
    let taps = TapVector::from_network(&net);
    let opts = PfOptions::default();
    solve_power_flow(&net, &d, &taps, &opts).unwrap();
    let n = 200;
    let t0 = std::time::Instant::now();
    for _ in 0..n {
        std::hint::black_box(solve_power_flow(&net, &d, &taps, &opts).unwrap());
    }
    let per = t0.elapsed().as_secs_f64() / n as f64;
    assert!(per < 1e-3, "{:.3} ms per solve", per * 1e3);
}

#[derive(Debug, Clone, PartialEq)]
struct Note(u32);

impl MessageKind for Note {
    fn kind(&self) -> &'static str {
        "note"
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn two_bus_any_load(r in 0.0f64..0.2, x in 0.02f64..0.2, p in 0.0f64..0.8, q in -0.3f64..0.4) {
        let load_flow = two_bus_closed_form(r, x, p, q);
        prop_assume!(load_flow.is_some_and(|v| v > 0.8));
        let net = fixture::two_bus(r, x, -p, -q);
        let sol = solve_power_flow(&net, &fixed_dispatch(&net), &TapVector::from_network(&net), &PfOptions::default()).unwrap();
        prop_assert!((sol.vm[1] - load_flow.unwrap()).abs() < 1e-6);
    }

    #[test]
    fn recorded_violations_match_voltages(seed in 0u64..500, shift in -0.06f64..0.06) {
        let inst = fixture::random_instance(seed, &SMALL);
        let mut net = inst.net.clone();
        let s = net.slack_idx().unwrap();
        net.buses[s].v_set += shift;
        let taps = TapVector::from_network(&net);
        let Ok(c) = coupled_power_flow(&net, &QOverrides::new(), &taps) else { return Ok(()) };
        let cs = ConstraintSet::from_network(&net);
        let viol = check_constraints(&net, &c.solution, &cs);
        for (b, bus) in net.buses.iter().enumerate() {
            let v = c.solution.vm[b];
            let outside = v < cs.v_min[b] - 1e-9 || v > cs.v_max[b] + 1e-9;
            let listed = viol.iter().any(|x| matches!(x, Violation::Voltage { bus: id, .. } if *id == bus.id));
            prop_assert_eq!(outside, listed, "bus {} at {}", bus.id, v);
        }
        for x in &viol {
            if let Violation::Voltage { bus, value, .. } = x {
                let b = net.bus_idx(bus).unwrap();
                prop_assert_eq!(*value, c.solution.vm[b]);
            }
        }
    }

    #[test]
    fn interface_flow_is_transformer_flow(seed in 0u64..500) {
        let inst = fixture::random_instance(seed, &SMALL);
        let net = &inst.net;
        let ifc = interface_of(net, &inst.interface).unwrap();
        let taps = TapVector::from_network(net);
        let c = coupled_power_flow(net, &QOverrides::new(), &taps).unwrap();
        let tr = &net.transformers[ifc.transformer];
        let t = tr.tap.as_ref().map_or(1.0, |tc| tc.ratio_at(taps.position(net, ifc.transformer).unwrap() as f64));
        let (vh, vl) = (c.solution.voltage(ifc.hv_bus), c.solution.voltage(ifc.lv_bus));
        let ys = Complex64::new(1.0, 0.0) / Complex64::new(tr.r, tr.x);
        let s_hv = vh * (ys * (vh * t - vl) * t).conj();
        prop_assert!((s_hv.im - interface_q(&c.solution, &ifc)).abs() < 1e-8);
        let (_, loss_q) = c.solution.total_losses();
        let injected: f64 = c.dispatch.q.iter().sum::<f64>() + c.solution.slack_injection.1;
        prop_assert!((injected - loss_q).abs() <= net.buses.len() as f64 * 1e-8);
    }

    #[test]
    fn bus_delivers_once_in_order(
        latency in 0u64..4,
        sends in proptest::collection::vec((0u64..20, any::<bool>()), 1..40),
        cut in 0u64..20,
        len in 0u64..6,
    ) {
        let links = [LinkModel::new("a", "b", latency), LinkModel::new("b", "a", latency)];
        let mut bus: Bus<Note> = Bus::new(3, links).unwrap();
        bus.partition(&["a"], &["b"], cut, cut + len).unwrap();
        let mut sends = sends;
        sends.sort_by_key(|s| s.0);
        let mut delivered = Vec::new();
        let mut k = 0;
        for now in 0..30 as Step {
            while k < sends.len() && sends[k].0 == now {
                let (from, to) = if sends[k].1 { ("a", "b") } else { ("b", "a") };
                bus.send(from, to, Note(k as u32), now).unwrap();
                k += 1;
            }
            for e in bus.deliver_due(now) {
                prop_assert_eq!(e.deliver_at, now);
                prop_assert_eq!(e.t_sent + latency, now);
                delivered.push((now, e.seq));
            }
        }
        let mut seqs: Vec<u64> = delivered.iter().map(|d| d.1).collect();
        let n = seqs.len();
        seqs.sort();
        seqs.dedup();
        prop_assert_eq!(seqs.len(), n);
        prop_assert!(delivered.windows(2).all(|w| w[0] <= w[1]));
        for r in bus.log() {
            let cut_off = r.t_sent >= cut && r.t_sent < cut + len;
            prop_assert_eq!(r.t_delivered.is_none(), cut_off);
        }
        prop_assert_eq!(bus.in_flight(), 0);
    }
}
