//! Reference computations shared by the integration tests.
#![allow(dead_code)]

use num_complex::Complex64;
use voltcoord::control::{coupled_power_flow, QOverrides};
use voltcoord::fixture::RandomSpec;
use voltcoord::grid::Network;
use voltcoord::powerflow::{Dispatch, PowerFlowSolution, TapVector};

pub const SMALL: RandomSpec = RandomSpec {
    max_buses: 10,
    max_taps: 3,
    max_assets: 4,
    q_of_v: true,
    tight_bounds: 0.5,
    max_points: 30_000,
};

/// Receiving-end voltage of a lossy line feeding a load `(p, q)` from a
/// unit slack: the larger root of
/// `u^2 + (2(rp + xq) - 1) u + (r^2 + x^2)(p^2 + q^2) = 0` with `u = |V2|^2`.
pub fn two_bus_closed_form(r: f64, x: f64, p_load: f64, q_load: f64) -> Option<f64> {
    let b = 2.0 * (r * p_load + x * q_load) - 1.0;
    let c = (r * r + x * x) * (p_load * p_load + q_load * q_load);
    let disc = b * b - 4.0 * c;
    (disc >= 0.0).then(|| ((-b + disc.sqrt()) / 2.0).sqrt())
}

/// Bus injections recomputed from the branch equations: pi-model lines and
/// an ideal 1:t transformer at the HV terminal ahead of the leakage
/// impedance.
pub fn injections_from_branches(net: &Network, sol: &PowerFlowSolution, taps: &TapVector) -> Vec<Complex64> {
    let v = |id: &str| sol.voltage(net.bus_idx(id).unwrap());
    let mut s = vec![Complex64::new(0.0, 0.0); net.buses.len()];
    for l in &net.lines {
        let (vf, vt) = (v(&l.from_bus), v(&l.to_bus));
        let ys = Complex64::new(1.0, 0.0) / Complex64::new(l.r, l.x);
        let ysh = Complex64::new(0.0, l.b_shunt / 2.0);
        let i_f = ys * (vf - vt) + ysh * vf;
        let i_t = ys * (vt - vf) + ysh * vt;
        s[net.bus_idx(&l.from_bus).unwrap()] += vf * i_f.conj();
        s[net.bus_idx(&l.to_bus).unwrap()] += vt * i_t.conj();
    }
    for (k, tr) in net.transformers.iter().enumerate() {
        let t = match &tr.tap {
            Some(tc) => tc.ratio_at(taps.position(net, k).unwrap() as f64),
            None => 1.0,
        };
        let (vh, vl) = (v(&tr.hv_bus), v(&tr.lv_bus));
        let ys = Complex64::new(1.0, 0.0) / Complex64::new(tr.r, tr.x);
        let i_series = ys * (vh * t - vl);
        s[net.bus_idx(&tr.hv_bus).unwrap()] += vh * (i_series * t).conj();
        s[net.bus_idx(&tr.lv_bus).unwrap()] += vl * (-i_series).conj();
    }
    s
}

pub fn max_mismatch(net: &Network, sol: &PowerFlowSolution, dispatch: &Dispatch, taps: &TapVector) -> f64 {
    let s = injections_from_branches(net, sol, taps);
    let slack = net.slack_idx().unwrap();
    let mut spec = vec![Complex64::new(0.0, 0.0); net.buses.len()];
    for (i, a) in net.assets.iter().enumerate() {
        spec[net.bus_idx(&a.bus).unwrap()] += Complex64::new(dispatch.p[i], dispatch.q[i]);
    }
    (0..net.buses.len())
        .filter(|&b| b != slack)
        .map(|b| (s[b] - spec[b]).norm())
        .fold(0.0, f64::max)
}

/// Injections of a network whose assets all have fixed reactive power.
pub fn fixed_dispatch(net: &Network) -> Dispatch {
    coupled_power_flow(net, &QOverrides::new(), &TapVector::from_network(net)).unwrap().dispatch
}

