//! Steady-state AC power flow (Newton-Raphson, polar form) with
//! tap-dependent transformer models, plus first-order sensitivities.
//!
//! All DER and loads are PQ injections; the single slack bus holds its
//! voltage magnitude `v_set` at angle zero.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::grid::{InterfaceSpec, Network};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 50;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PowerFlowError {
    #[error("power flow did not converge after {iterations} iterations (residual {residual:.3e} pu)")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("singular Jacobian at iteration {iteration}")]
    SingularJacobian { iteration: usize },
    #[error("invalid tap vector: {0}")]
    InvalidTaps(String),
    #[error("network has no slack bus")]
    NoSlack,
}

/// Tap positions by transformer id. Transformers missing from the map use
/// the position stored in the network.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TapVector(pub BTreeMap<String, i32>);

impl TapVector {
    /// Current positions of every tap changer in `net`.
    pub fn from_network(net: &Network) -> Self {
        TapVector(
            net.transformers
                .iter()
                .filter_map(|t| t.tap.as_ref().map(|tc| (t.id.clone(), tc.position)))
                .collect(),
        )
    }

    pub fn get(&self, id: &str) -> Option<i32> {
        self.0.get(id).copied()
    }

    pub fn set(&mut self, id: &str, position: i32) {
        self.0.insert(id.to_string(), position);
    }

    /// Position of transformer `t`, falling back to the network's value.
    pub fn position(&self, net: &Network, t: usize) -> Option<i32> {
        let tr = &net.transformers[t];
        let tc = tr.tap.as_ref()?;
        Some(self.get(&tr.id).unwrap_or(tc.position))
    }

    pub fn validate(&self, net: &Network) -> Result<(), PowerFlowError> {
        for (id, &pos) in &self.0 {
            let t = net
                .transformer_idx(id)
                .ok_or_else(|| PowerFlowError::InvalidTaps(format!("unknown transformer `{id}`")))?;
            let tc = net.transformers[t]
                .tap
                .as_ref()
                .ok_or_else(|| PowerFlowError::InvalidTaps(format!("`{id}` has no tap changer")))?;
            if !tc.contains(pos) {
                return Err(PowerFlowError::InvalidTaps(format!(
                    "`{id}` position {pos} outside [{}, {}]",
                    tc.pos_min, tc.pos_max
                )));
            }
        }
        Ok(())
    }

    /// Voltage ratio per transformer (1.0 for fixed-ratio units).
    pub fn ratios(&self, net: &Network) -> Result<Vec<f64>, PowerFlowError> {
        self.validate(net)?;
        Ok(net
            .transformers
            .iter()
            .enumerate()
            .map(|(i, t)| match &t.tap {
                Some(tc) => tc.ratio_at(self.position(net, i).unwrap_or(tc.position) as f64),
                None => 1.0,
            })
            .collect())
    }
}

/// Asset injections in per-unit, aligned with `Network::assets`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dispatch {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl Dispatch {
    /// Active power from the network, zero reactive power.
    pub fn active_only(net: &Network) -> Self {
        Dispatch {
            p: net.assets.iter().map(|a| a.p).collect(),
            q: vec![0.0; net.assets.len()],
        }
    }

    pub fn to_map(&self, net: &Network) -> BTreeMap<String, (f64, f64)> {
        net.assets
            .iter()
            .enumerate()
            .map(|(i, a)| (a.id.clone(), (self.p[i], self.q[i])))
            .collect()
    }

    fn bus_injections(&self, net: &Network) -> Vec<Complex64> {
        let mut s = vec![Complex64::new(0.0, 0.0); net.buses.len()];
        for (i, a) in net.assets.iter().enumerate() {
            if let Some(b) = net.bus_idx(&a.bus) {
                s[b] += Complex64::new(self.p[i], self.q[i]);
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PfOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Ignore any supplied starting point and begin from the flat profile.
    pub flat_start: bool,
}

impl Default for PfOptions {
    fn default() -> Self {
        PfOptions {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            flat_start: true,
        }
    }
}

/// Flow through one branch, both ends, injected into the branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchFlow {
    pub p_from: f64,
    pub q_from: f64,
    pub p_to: f64,
    pub q_to: f64,
    /// Current magnitudes in per-unit of the respective end's base.
    pub i_from: f64,
    pub i_to: f64,
}

impl BranchFlow {
    pub fn loss_p(&self) -> f64 {
        self.p_from + self.p_to
    }
    pub fn loss_q(&self) -> f64 {
        self.q_from + self.q_to
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    pub vm: Vec<f64>,
    pub va: Vec<f64>,
    /// Net specified asset injection per bus.
    pub injection: Vec<(f64, f64)>,
    pub lines: Vec<BranchFlow>,
    pub transformers: Vec<BranchFlow>,
    /// Power delivered by the slack source into the grid.
    pub slack_injection: (f64, f64),
    pub iterations: usize,
    pub max_residual: f64,
}

impl PowerFlowSolution {
    pub fn voltage(&self, bus: usize) -> Complex64 {
        Complex64::from_polar(self.vm[bus], self.va[bus])
    }

    pub fn total_losses(&self) -> (f64, f64) {
        self.lines
            .iter()
            .chain(&self.transformers)
            .fold((0.0, 0.0), |(p, q), f| (p + f.loss_p(), q + f.loss_q()))
    }
}

/// 2x2 nodal admittance block of a branch.
#[derive(Debug, Clone, Copy)]
struct BranchModel {
    from: usize,
    to: usize,
    yff: Complex64,
    yft: Complex64,
    ytf: Complex64,
    ytt: Complex64,
}

struct Model {
    y: DMatrix<Complex64>,
    lines: Vec<BranchModel>,
    transformers: Vec<BranchModel>,
}

fn series(r: f64, x: f64) -> Complex64 {
    Complex64::new(1.0, 0.0) / Complex64::new(r, x)
}

fn build_model(net: &Network, ratios: &[f64]) -> Model {
    let n = net.buses.len();
    let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    let idx = |id: &str| net.bus_idx(id).expect("branch endpoints resolve on a validated network");
    let stamp = |m: &BranchModel| {
        y[(m.from, m.from)] += m.yff;
        y[(m.from, m.to)] += m.yft;
        y[(m.to, m.from)] += m.ytf;
        y[(m.to, m.to)] += m.ytt;
    };
    let lines: Vec<BranchModel> = net
        .lines
        .iter()
        .map(|l| {
            let ys = series(l.r, l.x);
            let ysh = Complex64::new(0.0, l.b_shunt / 2.0);
            BranchModel {
                from: idx(&l.from_bus),
                to: idx(&l.to_bus),
                yff: ys + ysh,
                yft: -ys,
                ytf: -ys,
                ytt: ys + ysh,
            }
        })
        .collect();
    // Ideal 1:t transformer at the HV terminal in series with the leakage
    // impedance referred to the LV side.
    let transformers: Vec<BranchModel> = net
        .transformers
        .iter()
        .zip(ratios)
        .map(|(t, &ratio)| {
            let ys = series(t.r, t.x);
            BranchModel {
                from: idx(&t.hv_bus),
                to: idx(&t.lv_bus),
                yff: ys * ratio * ratio,
                yft: -ys * ratio,
                ytf: -ys * ratio,
                ytt: ys,
            }
        })
        .collect();
    lines.iter().chain(&transformers).for_each(stamp);
    Model { y, lines, transformers }
}

/// Nodal admittance matrix for the given tap positions.
pub fn build_admittance(net: &Network, taps: &TapVector) -> Result<DMatrix<Complex64>, PowerFlowError> {
    let ratios = taps.ratios(net)?;
    Ok(build_model(net, &ratios).y)
}

/// Nodal admittance matrix for explicit (possibly fractional-tap) ratios.
pub fn build_admittance_with_ratios(net: &Network, ratios: &[f64]) -> DMatrix<Complex64> {
    build_model(net, ratios).y
}

pub fn solve_power_flow(
    net: &Network,
    dispatch: &Dispatch,
    taps: &TapVector,
    opts: &PfOptions,
) -> Result<PowerFlowSolution, PowerFlowError> {
    solve_power_flow_from(net, dispatch, taps, opts, None)
}

/// Like [`solve_power_flow`], starting from `start` unless `opts.flat_start`.
pub fn solve_power_flow_from(
    net: &Network,
    dispatch: &Dispatch,
    taps: &TapVector,
    opts: &PfOptions,
    start: Option<&PowerFlowSolution>,
) -> Result<PowerFlowSolution, PowerFlowError> {
    let ratios = taps.ratios(net)?;
    solve_with_ratios(net, dispatch, &ratios, opts, start)
}

pub(crate) fn solve_with_ratios(
    net: &Network,
    dispatch: &Dispatch,
    ratios: &[f64],
    opts: &PfOptions,
    start: Option<&PowerFlowSolution>,
) -> Result<PowerFlowSolution, PowerFlowError> {
    let slack = net.slack_idx().ok_or(PowerFlowError::NoSlack)?;
    let model = build_model(net, ratios);
    let s_spec = dispatch.bus_injections(net);
    let n = net.buses.len();
    let (mut vm, mut va) = match start {
        Some(s) if !opts.flat_start && s.vm.len() == n => (s.vm.clone(), s.va.clone()),
        _ => (vec![1.0; n], vec![0.0; n]),
    };
    vm[slack] = net.buses[slack].v_set;
    va[slack] = 0.0;
    let pq: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let m = pq.len();

    let mut iteration = 0;
    loop {
        iteration += 1;
        let v: Vec<Complex64> = (0..n).map(|i| Complex64::from_polar(vm[i], va[i])).collect();
        let current = mat_vec(&model.y, &v);
        let mut f = DVector::zeros(2 * m);
        let mut residual: f64 = 0.0;
        for (k, &i) in pq.iter().enumerate() {
            let mis = v[i] * current[i].conj() - s_spec[i];
            f[k] = mis.re;
            f[m + k] = mis.im;
            residual = residual.max(mis.re.abs()).max(mis.im.abs());
        }
        if !residual.is_finite() {
            return Err(PowerFlowError::NonConvergence { iterations: iteration, residual });
        }
        if residual <= opts.tol {
            return Ok(finish(&model, &v, &s_spec, slack, iteration, residual));
        }
        if iteration >= opts.max_iter {
            return Err(PowerFlowError::NonConvergence { iterations: iteration, residual });
        }
        let jac = jacobian(&model.y, &v, &current, &pq, None);
        let Some(dx) = jac.lu().solve(&f) else {
            return Err(if iteration == 1 {
                PowerFlowError::SingularJacobian { iteration }
            } else {
                PowerFlowError::NonConvergence { iterations: iteration, residual }
            });
        };
        for (k, &i) in pq.iter().enumerate() {
            va[i] -= dx[k];
            vm[i] -= dx[m + k];
        }
        if pq.iter().any(|&i| !(vm[i] > 0.05 && vm[i] < 5.0)) {
            return Err(PowerFlowError::NonConvergence { iterations: iteration, residual });
        }
    }
}

fn mat_vec(y: &DMatrix<Complex64>, v: &[Complex64]) -> Vec<Complex64> {
    let n = v.len();
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    for j in 0..n {
        let vj = v[j];
        for i in 0..n {
            let yij = y[(i, j)];
            if yij.re != 0.0 || yij.im != 0.0 {
                out[i] += yij * vj;
            }
        }
    }
    out
}

/// Reduced Jacobian of `S_calc - S_spec` with respect to `[va_pq, vm_pq]`.
/// `q_slope` adds `-dQ_spec/dVm` on the diagonal for voltage-dependent
/// injections.
fn jacobian(
    y: &DMatrix<Complex64>,
    v: &[Complex64],
    current: &[Complex64],
    pq: &[usize],
    q_slope: Option<&[f64]>,
) -> DMatrix<f64> {
    let m = pq.len();
    let j_unit = Complex64::new(0.0, 1.0);
    let mut jac = DMatrix::zeros(2 * m, 2 * m);
    for (kc, &c) in pq.iter().enumerate() {
        let vn_c = v[c] / v[c].norm();
        for (kr, &r) in pq.iter().enumerate() {
            let yrc = y[(r, c)];
            let diag = r == c;
            if yrc.re == 0.0 && yrc.im == 0.0 && !diag {
                continue;
            }
            let mut ds_dva = -(yrc * v[c]).conj();
            let mut ds_dvm = (yrc * vn_c).conj();
            if diag {
                ds_dva += current[r].conj();
            }
            ds_dva = j_unit * v[r] * ds_dva;
            ds_dvm = v[r] * ds_dvm;
            if diag {
                ds_dvm += current[r].conj() * vn_c;
            }
            jac[(kr, kc)] = ds_dva.re;
            jac[(m + kr, kc)] = ds_dva.im;
            jac[(kr, m + kc)] = ds_dvm.re;
            jac[(m + kr, m + kc)] = ds_dvm.im;
        }
        if let Some(slopes) = q_slope {
            jac[(m + kc, m + kc)] -= slopes[c];
        }
    }
    jac
}

fn branch_flow(m: &BranchModel, v: &[Complex64]) -> BranchFlow {
    let i_f = m.yff * v[m.from] + m.yft * v[m.to];
    let i_t = m.ytf * v[m.from] + m.ytt * v[m.to];
    let s_f = v[m.from] * i_f.conj();
    let s_t = v[m.to] * i_t.conj();
    BranchFlow {
        p_from: s_f.re,
        q_from: s_f.im,
        p_to: s_t.re,
        q_to: s_t.im,
        i_from: i_f.norm(),
        i_to: i_t.norm(),
    }
}

fn finish(
    model: &Model,
    v: &[Complex64],
    s_spec: &[Complex64],
    slack: usize,
    iterations: usize,
    max_residual: f64,
) -> PowerFlowSolution {
    let current = mat_vec(&model.y, v);
    let s_slack = v[slack] * current[slack].conj() - s_spec[slack];
    PowerFlowSolution {
        vm: v.iter().map(|x| x.norm()).collect(),
        va: v.iter().map(|x| x.arg()).collect(),
        injection: s_spec.iter().map(|s| (s.re, s.im)).collect(),
        lines: model.lines.iter().map(|m| branch_flow(m, v)).collect(),
        transformers: model.transformers.iter().map(|m| branch_flow(m, v)).collect(),
        slack_injection: (s_slack.re, s_slack.im),
        iterations,
        max_residual,
    }
}

/// Reactive flow across the interface, measured at the HV terminal and
/// positive from HV to LV.
pub fn interface_q(sol: &PowerFlowSolution, ifc: &InterfaceSpec) -> f64 {
    sol.transformers[ifc.transformer].q_from
}

/// Secant response to moving one tap changer by a single step.
#[derive(Debug, Clone, PartialEq)]
pub struct TapSecant {
    /// Change of every bus voltage magnitude.
    pub dv: Vec<f64>,
    pub dq_if: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMatrices {
    /// Asset indices, one column each.
    pub assets: Vec<usize>,
    /// `dV/dQ`: bus voltage magnitude (rows) against asset reactive
    /// injection (columns). Slack row is zero.
    pub dv_dq: DMatrix<f64>,
    /// `dQif/dQ`, one entry per asset.
    pub dqif_dq: Vec<f64>,
    /// Transformer indices, one secant pair each.
    pub taps: Vec<usize>,
    pub tap_up: Vec<Option<TapSecant>>,
    pub tap_down: Vec<Option<TapSecant>>,
}

/// Jacobian-based `dV/dQ` and `dQif/dQ` at a converged solution.
///
/// `q_slope`, when given, is the per-bus derivative of voltage-dependent
/// reactive injection with respect to the local voltage magnitude, so the
/// result describes the closed loop with local controls.
pub fn jacobian_sensitivities(
    net: &Network,
    sol: &PowerFlowSolution,
    ifc: &InterfaceSpec,
    taps: &TapVector,
    assets: &[usize],
    q_slope: Option<&[f64]>,
) -> Result<(DMatrix<f64>, Vec<f64>), PowerFlowError> {
    let slack = net.slack_idx().ok_or(PowerFlowError::NoSlack)?;
    let ratios = taps.ratios(net)?;
    let model = build_model(net, &ratios);
    let n = net.buses.len();
    let v: Vec<Complex64> = (0..n).map(|i| sol.voltage(i)).collect();
    let current = mat_vec(&model.y, &v);
    let pq: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let m = pq.len();
    let mut pos = vec![usize::MAX; n];
    for (k, &i) in pq.iter().enumerate() {
        pos[i] = k;
    }
    let jac = jacobian(&model.y, &v, &current, &pq, q_slope);
    let lu = jac.clone().lu();
    let lu_t = jac.transpose().lu();

    // Gradient of the HV-terminal reactive flow with respect to the state.
    let b = &model.transformers[ifc.transformer];
    let mut grad = DVector::zeros(2 * m);
    {
        let (h, l) = (b.from, b.to);
        let (vh, vl) = (sol.vm[h], sol.vm[l]);
        let th = sol.va[h] - sol.va[l];
        let (g, bb) = (b.yft.re, b.yft.im);
        let bhh = b.yff.im;
        let (s, c) = th.sin_cos();
        let d_vh = -2.0 * bhh * vh + vl * (g * s - bb * c);
        let d_vl = vh * (g * s - bb * c);
        let d_th = vh * vl * (g * c + bb * s);
        if h != slack {
            grad[pos[h]] += d_th;
            grad[m + pos[h]] += d_vh;
        }
        if l != slack {
            grad[pos[l]] -= d_th;
            grad[m + pos[l]] += d_vl;
        }
    }
    let w = lu_t
        .solve(&grad)
        .ok_or(PowerFlowError::SingularJacobian { iteration: sol.iterations })?;

    let mut dv_dq = DMatrix::zeros(n, assets.len());
    let mut dqif_dq = Vec::with_capacity(assets.len());
    for (col, &a) in assets.iter().enumerate() {
        let bus = net.bus_idx(&net.assets[a].bus).expect("asset bus resolves");
        if bus == slack {
            dqif_dq.push(0.0);
            continue;
        }
        // J dx = dS_spec for a unit reactive injection at the asset's bus.
        let mut rhs = DVector::zeros(2 * m);
        rhs[m + pos[bus]] = 1.0;
        let dx = lu
            .solve(&rhs)
            .ok_or(PowerFlowError::SingularJacobian { iteration: sol.iterations })?;
        for (k, &i) in pq.iter().enumerate() {
            dv_dq[(i, col)] = dx[m + k];
        }
        dqif_dq.push(w[m + pos[bus]]);
    }
    Ok((dv_dq, dqif_dq))
}

/// Linearised branch flow: the ruling phasor (current for lines, apparent
/// power for transformers, at the more loaded end) divided by the branch
/// rating, and its derivative per unit of reactive injection.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchLinearization {
    pub value: Complex64,
    pub grad: Vec<Complex64>,
}

impl BranchLinearization {
    pub fn loading(&self) -> f64 {
        self.value.norm()
    }
}

/// [`BranchLinearization`] for every line, then every transformer, with
/// respect to the reactive injection of `assets`.
#[allow(clippy::too_many_arguments)]
pub fn branch_sensitivities(
    net: &Network,
    sol: &PowerFlowSolution,
    taps: &TapVector,
    assets: &[usize],
    q_slope: Option<&[f64]>,
    line_rating: &[f64],
    transformer_rating: &[f64],
) -> Result<Vec<BranchLinearization>, PowerFlowError> {
    let slack = net.slack_idx().ok_or(PowerFlowError::NoSlack)?;
    let ratios = taps.ratios(net)?;
    let model = build_model(net, &ratios);
    let n = net.buses.len();
    let v: Vec<Complex64> = (0..n).map(|i| sol.voltage(i)).collect();
    let current = mat_vec(&model.y, &v);
    let pq: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let m = pq.len();
    let mut pos = vec![usize::MAX; n];
    for (k, &i) in pq.iter().enumerate() {
        pos[i] = k;
    }
    let lu = jacobian(&model.y, &v, &current, &pq, q_slope).lu();
    let branches: Vec<(&BranchModel, f64, bool)> = model
        .lines
        .iter()
        .zip(line_rating)
        .map(|(b, &r)| (b, r, false))
        .chain(model.transformers.iter().zip(transformer_rating).map(|(b, &r)| (b, r, true)))
        .collect();
    // Ruling end and its phasor per branch.
    let ends: Vec<(bool, Complex64)> = branches
        .iter()
        .map(|(b, rating, is_trafo)| {
            let i_f = b.yff * v[b.from] + b.yft * v[b.to];
            let i_t = b.ytf * v[b.from] + b.ytt * v[b.to];
            let (x_f, x_t) = if *is_trafo {
                (v[b.from] * i_f.conj(), v[b.to] * i_t.conj())
            } else {
                (i_f, i_t)
            };
            if x_f.norm() >= x_t.norm() {
                (true, x_f / rating)
            } else {
                (false, x_t / rating)
            }
        })
        .collect();
    let mut out: Vec<BranchLinearization> = ends
        .iter()
        .map(|&(_, value)| BranchLinearization {
            value,
            grad: vec![Complex64::new(0.0, 0.0); assets.len()],
        })
        .collect();
    for (col, &a) in assets.iter().enumerate() {
        let bus = net.bus_idx(&net.assets[a].bus).expect("asset bus resolves");
        if bus == slack {
            continue;
        }
        let mut rhs = DVector::zeros(2 * m);
        rhs[m + pos[bus]] = 1.0;
        let dx = lu
            .solve(&rhs)
            .ok_or(PowerFlowError::SingularJacobian { iteration: sol.iterations })?;
        let dv: Vec<Complex64> = (0..n)
            .map(|i| {
                if i == slack {
                    return Complex64::new(0.0, 0.0);
                }
                let (dva, dvm) = (dx[pos[i]], dx[m + pos[i]]);
                Complex64::from_polar(1.0, sol.va[i]) * Complex64::new(dvm, sol.vm[i] * dva)
            })
            .collect();
        for (r, (b, rating, is_trafo)) in branches.iter().enumerate() {
            let from_end = ends[r].0;
            let (yd, yo, here, other) = if from_end {
                (b.yff, b.yft, b.from, b.to)
            } else {
                (b.ytt, b.ytf, b.to, b.from)
            };
            let i = yd * v[here] + yo * v[other];
            let di = yd * dv[here] + yo * dv[other];
            let dx = if *is_trafo { dv[here] * i.conj() + v[here] * di.conj() } else { di };
            out[r].grad[col] = dx / rating;
        }
    }
    Ok(out)
}

/// Full sensitivity set: Jacobian columns for `assets` plus one-step tap
/// secants obtained by re-solving with `resolve` at position ±1.
#[allow(clippy::too_many_arguments)]
pub fn sensitivities<F>(
    net: &Network,
    sol: &PowerFlowSolution,
    ifc: &InterfaceSpec,
    taps: &TapVector,
    assets: &[usize],
    tap_changers: &[usize],
    q_slope: Option<&[f64]>,
    mut resolve: F,
) -> Result<SensitivityMatrices, PowerFlowError>
where
    F: FnMut(&TapVector) -> Option<PowerFlowSolution>,
{
    let (dv_dq, dqif_dq) = jacobian_sensitivities(net, sol, ifc, taps, assets, q_slope)?;
    let q0 = interface_q(sol, ifc);
    let mut secant = |t: usize, delta: i32| -> Option<TapSecant> {
        let id = &net.transformers[t].id;
        let tc = net.transformers[t].tap.as_ref()?;
        let pos = taps.position(net, t)? + delta;
        if !tc.contains(pos) {
            return None;
        }
        let mut moved = taps.clone();
        moved.set(id, pos);
        let s = resolve(&moved)?;
        let sign = delta as f64;
        Some(TapSecant {
            dv: s.vm.iter().zip(&sol.vm).map(|(a, b)| sign * (a - b)).collect(),
            dq_if: sign * (interface_q(&s, ifc) - q0),
        })
    };
    let tap_up = tap_changers.iter().map(|&t| secant(t, 1)).collect();
    let tap_down = tap_changers.iter().map(|&t| secant(t, -1)).collect();
    Ok(SensitivityMatrices {
        assets: assets.to_vec(),
        dv_dq,
        dqif_dq,
        taps: tap_changers.to_vec(),
        tap_up,
        tap_down,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture;

    #[test]
    fn two_bus_admittance() {
        let net = fixture::two_bus(0.0, 0.1, 0.0, 0.0);
        let y = build_admittance(&net, &TapVector::default()).unwrap();
        assert!((y[(0, 1)] - Complex64::new(0.0, 10.0)).norm() < 1e-12);
        assert!((y[(0, 0)] - Complex64::new(0.0, -10.0)).norm() < 1e-12);
    }

    #[test]
    fn neutral_tap_equals_fixed_ratio() {
        let mut net = fixture::two_bus_transformer(0.0125);
        let with_tap = build_admittance(&net, &TapVector::from_network(&net)).unwrap();
        net.transformers[0].tap = None;
        let fixed = build_admittance(&net, &TapVector::default()).unwrap();
        assert_eq!(with_tap, fixed);
    }

    #[test]
    fn off_nominal_tap_ratio() {
        let net = fixture::two_bus_transformer(0.025);
        let t = &net.transformers[0];
        let ys = series(t.r, t.x);
        let mut taps = TapVector::from_network(&net);
        taps.set(&t.id, t.tap.as_ref().unwrap().neutral + 1);
        let y = build_admittance(&net, &taps).unwrap();
        assert!((y[(0, 0)] - ys * 1.025 * 1.025).norm() < 1e-12);
        assert!((y[(0, 1)] + ys * 1.025).norm() < 1e-12);
        assert!((y[(1, 1)] - ys).norm() < 1e-12);
    }

    #[test]
    fn flat_no_load() {
        let net = fixture::two_bus(0.01, 0.1, 0.0, 0.0);
        let sol = solve_power_flow(&net, &Dispatch::active_only(&net), &TapVector::default(), &PfOptions::default())
            .unwrap();
        assert_eq!(sol.iterations, 1);
        assert!(sol.vm.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(sol.va.iter().all(|&a| a.abs() < 1e-15));
    }

    #[test]
    fn beyond_loadability() {
        let net = fixture::two_bus(0.0, 0.1, -50.0, 0.0);
        let mut d = Dispatch::active_only(&net);
        d.q[0] = 0.0;
        let err = solve_power_flow(&net, &d, &TapVector::default(), &PfOptions::default()).unwrap_err();
        assert!(matches!(err, PowerFlowError::NonConvergence { .. }), "{err:?}");
    }

    #[test]
    fn invalid_tap_rejected() {
        let net = fixture::two_bus_transformer(0.025);
        let mut taps = TapVector::default();
        taps.set(&net.transformers[0].id, 99);
        assert!(matches!(
            build_admittance(&net, &taps),
            Err(PowerFlowError::InvalidTaps(_))
        ));
    }
}
