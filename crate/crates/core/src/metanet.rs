//! Lane-level discretized macroscopic traffic-flow prediction.
//!
//! Density follows the per-lane conservation update; speed relaxes toward a
//! desired speed that is the minimum of the fundamental diagram, the active
//! guidance (with slack), and the rainy-weather speed-density cap, with a
//! damped convection term and a density-anticipation term whose sensitivity
//! is re-derived from the guidance speed when guidance is active.
//!
//! Stepping is pure: multiple trajectories can be evaluated concurrently.

use crate::safety::SafetyEnvelope;
use crate::scenario::{MetanetParams, RainSpeedDensityParams, ScenarioConfig};
use crate::units::{m_to_km, s_to_h};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetanetError {
    #[error("non-finite {term} at segment {segment} lane {lane} (step {step})")]
    NonFinite {
        term: &'static str,
        segment: usize,
        lane: usize,
        step: u64,
    },
}

/// Per-(segment, lane) state at one prediction step. Flow is maintained as
/// q = k·v after every update.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneSegmentState {
    /// Density, veh/km, indexed `[segment][lane]`.
    pub density: Vec<Vec<f64>>,
    /// Space-mean speed, km/h.
    pub speed: Vec<Vec<f64>>,
    /// Flow, veh/h.
    pub flow: Vec<Vec<f64>>,
    /// Prediction-step index.
    pub step: u64,
}

impl LaneSegmentState {
    pub fn new(density: Vec<Vec<f64>>, speed: Vec<Vec<f64>>) -> Self {
        let flow = density
            .iter()
            .zip(&speed)
            .map(|(ks, vs)| ks.iter().zip(vs).map(|(&k, &v)| flow(k, v)).collect())
            .collect();
        Self { density, speed, flow, step: 0 }
    }

    pub fn segments(&self) -> usize {
        self.density.len()
    }

    pub fn lanes(&self) -> usize {
        self.density.first().map_or(0, Vec::len)
    }

    /// Total vehicles on the main line given per-segment lengths in m.
    pub fn total_vehicles(&self, lengths_m: &[f64]) -> f64 {
        self.density
            .iter()
            .zip(lengths_m)
            .map(|(ks, &x)| ks.iter().sum::<f64>() * m_to_km(x))
            .sum()
    }
}

/// Boundary conditions for one prediction step.
#[derive(Debug, Clone)]
pub struct BoundaryConditions {
    /// Upstream inflow per lane, veh/h.
    pub inflow_veh_h: Vec<f64>,
    /// Speed carried by the upstream inflow, km/h, per lane.
    pub inflow_speed_kmh: Vec<f64>,
    /// Ramp flow per (segment, lane), veh/h; negative extracts vehicles.
    pub ramp_veh_h: Vec<Vec<f64>>,
}

impl BoundaryConditions {
    /// No-ramp-flow boundary with the given inflow.
    pub fn new(inflow_veh_h: Vec<f64>, inflow_speed_kmh: Vec<f64>, segments: usize) -> Self {
        let lanes = inflow_veh_h.len();
        Self {
            inflow_veh_h,
            inflow_speed_kmh,
            ramp_veh_h: vec![vec![0.0; lanes]; segments],
        }
    }

    /// Boundary for the reference coupling: demand inflow at free-flow
    /// speeds and off-ramp extraction proportional to the ramp segment's
    /// exit-lane flow.
    pub fn from_scenario(cfg: &ScenarioConfig, state: &LaneSegmentState) -> Self {
        let lanes = cfg.lane_count();
        let mut bc = Self::new(
            cfg.demand.inflow_veh_h.clone(),
            cfg.segments[0].free_flow_kmh.clone(),
            cfg.segment_count(),
        );
        let ramp_seg = cfg.ramp_segment();
        let exit_lane = lanes - 1;
        bc.ramp_veh_h[ramp_seg][exit_lane] =
            -cfg.demand.exit_fraction * state.flow[ramp_seg][exit_lane];
        bc
    }

    /// Net ramp flow, veh/h.
    pub fn net_ramp_flow(&self) -> f64 {
        self.ramp_veh_h.iter().flatten().sum()
    }
}

/// Rain context for the desired-speed relation: per-segment rainfall and
/// effective visibility, normally taken from the safety envelope.
#[derive(Debug, Clone)]
pub struct RainContext {
    pub rain_mm_h: Vec<f64>,
    pub visibility_m: Vec<f64>,
}

impl RainContext {
    pub fn dry(segments: usize, clear_m: f64) -> Self {
        Self {
            rain_mm_h: vec![0.0; segments],
            visibility_m: vec![clear_m; segments],
        }
    }

    pub fn from_envelope(env: &SafetyEnvelope) -> Self {
        Self {
            rain_mm_h: env.rain_mm_h.clone(),
            visibility_m: env.visibility_m.clone(),
        }
    }
}

/// q = k·v.
#[inline]
pub fn flow(k_veh_km: f64, v_kmh: f64) -> f64 {
    k_veh_km * v_kmh
}

/// Rainy-weather speed-density cap v = A·exp(B·k + C·L_v), km/h, capped
/// above so the min in the desired-speed relation stays well defined when
/// the calibrated exponent blows up.
pub fn rain_speed_cap(k_veh_km: f64, l_v_m: f64, p: &RainSpeedDensityParams, cap_kmh: f64) -> f64 {
    (p.a * (p.b * k_veh_km + p.c * l_v_m).exp()).min(cap_kmh)
}

/// Fundamental-diagram speed v_f·exp(−(1/h)·(k/k_c)^h), km/h.
pub fn fd_speed(k_veh_km: f64, v_free_kmh: f64, k_crit_veh_km: f64, exponent: f64) -> f64 {
    v_free_kmh * (-(k_veh_km / k_crit_veh_km).powf(exponent) / exponent).exp()
}

/// Desired speed: the fundamental diagram, the guidance term (1+γ)·v_g when
/// guidance is active, and the rain cap when rainfall is nonzero.
#[allow(clippy::too_many_arguments)]
pub fn desired_speed(
    k_veh_km: f64,
    v_free_kmh: f64,
    k_crit_veh_km: f64,
    guidance_kmh: Option<f64>,
    rain_mm_h: f64,
    l_v_m: f64,
    mp: &MetanetParams,
    rp: &RainSpeedDensityParams,
    v_cap_max_kmh: f64,
) -> f64 {
    desired_speed_detailed(
        k_veh_km,
        v_free_kmh,
        k_crit_veh_km,
        guidance_kmh,
        rain_mm_h,
        l_v_m,
        mp,
        rp,
        v_cap_max_kmh,
    )
    .0
}

/// As [`desired_speed`], also reporting whether the guidance term is the
/// binding minimum. Guidance that sits above the diagram constrains nobody
/// and must not alter the speed-density sensitivity.
#[allow(clippy::too_many_arguments)]
pub fn desired_speed_detailed(
    k_veh_km: f64,
    v_free_kmh: f64,
    k_crit_veh_km: f64,
    guidance_kmh: Option<f64>,
    rain_mm_h: f64,
    l_v_m: f64,
    mp: &MetanetParams,
    rp: &RainSpeedDensityParams,
    v_cap_max_kmh: f64,
) -> (f64, bool) {
    let mut v = fd_speed(k_veh_km, v_free_kmh, k_crit_veh_km, mp.h_rain);
    let mut guidance_binds = false;
    if let Some(vg) = guidance_kmh {
        let bound = (1.0 + mp.gamma_margin) * vg;
        if bound < v {
            v = bound;
            guidance_binds = true;
        }
    }
    if rain_mm_h > 0.0 {
        let cap = rain_speed_cap(k_veh_km, l_v_m, rp, v_cap_max_kmh);
        if cap < v {
            v = cap;
            guidance_binds = false;
        }
    }
    (v, guidance_binds)
}

/// Speed-density sensitivity under guidance,
/// η = −v_g · k^(a−1)/(k_cr)^a · exp(−k^a/(a·k_cr)), evaluated verbatim
/// (the exponential denominator is a·k_cr, not (k_cr)^a).
pub fn eta_correction(guidance_kmh: f64, k_veh_km: f64, mp: &MetanetParams) -> f64 {
    if k_veh_km <= 0.0 {
        return 0.0;
    }
    let a = mp.a_fd;
    let kcr = mp.k_cr_guided_veh_km;
    -guidance_kmh * k_veh_km.powf(a - 1.0) / kcr.powf(a)
        * (-(k_veh_km.powf(a)) / (a * kcr)).exp()
}

/// Per-(segment, lane) guidance grid, km/h.
pub type SpeedGrid = Vec<Vec<f64>>;

/// One prediction step of length `cfg.time.prediction_step_s`.
///
/// Unit reconciliation happens here and only here: the step is converted to
/// hours and segment lengths to km, so densities stay in veh/km.
pub fn step(
    state: &LaneSegmentState,
    guidance: Option<&SpeedGrid>,
    bc: &BoundaryConditions,
    rain: &RainContext,
    cfg: &ScenarioConfig,
) -> Result<LaneSegmentState, MetanetError> {
    let mp = &cfg.metanet;
    let rp = &cfg.rain_speed_density;
    let dt_h = s_to_h(cfg.time.prediction_step_s);
    let dt_s = cfg.time.prediction_step_s;
    let n = state.segments();
    let lanes = state.lanes();

    let mut density = vec![vec![0.0; lanes]; n];
    let mut speed = vec![vec![0.0; lanes]; n];

    for i in 0..n {
        let seg = &cfg.segments[i];
        let x_km = m_to_km(seg.length_m);
        for j in 0..lanes {
            let k = state.density[i][j];
            let v = state.speed[i][j];
            // Upstream neighbors: the boundary supplies inflow and its speed.
            let (q_up, v_up) = if i == 0 {
                (bc.inflow_veh_h[j], bc.inflow_speed_kmh[j])
            } else {
                (state.flow[i - 1][j], state.speed[i - 1][j])
            };
            // Downstream density: zero-gradient at the outflow boundary.
            let k_down = if i + 1 < n { state.density[i + 1][j] } else { k };

            let k_next = k + dt_h / x_km * (q_up - state.flow[i][j] + bc.ramp_veh_h[i][j]);

            let vg = guidance.map(|g| g[i][j]);
            let (v_des, guidance_binds) = desired_speed_detailed(
                k,
                seg.free_flow_kmh[j],
                seg.critical_density_veh_km[j],
                vg,
                rain.rain_mm_h[i],
                rain.visibility_m[i],
                mp,
                rp,
                cfg.safety.v_cap_max_kmh,
            );
            // Sensitivity: the guidance speed while it binds, the lane
            // free-flow speed otherwise.
            let eta_speed = match vg {
                Some(v) if guidance_binds => v,
                _ => seg.free_flow_kmh[j],
            };
            let eta = eta_correction(eta_speed, k, mp);

            let relaxation = dt_s / mp.tau_s * (v_des - v);
            let convection = mp.omega * dt_h / x_km * v * (v_up - v);
            let anticipation =
                eta * dt_h / s_to_h(mp.tau_s) / x_km * (k_down - k) / (k + mp.kappa_veh_km);

            let v_next = v + relaxation + convection - anticipation;

            for (term, value) in [
                ("density", k_next),
                ("relaxation", relaxation),
                ("convection", convection),
                ("anticipation", anticipation),
                ("speed", v_next),
            ] {
                if !value.is_finite() {
                    return Err(MetanetError::NonFinite {
                        term,
                        segment: i,
                        lane: j,
                        step: state.step,
                    });
                }
            }

            if k_next < 0.0 || v_next < 0.0 {
                log::debug!(
                    "negativity clamp at ({i},{j}) step {}: k {k_next:.3}, v {v_next:.3}",
                    state.step
                );
            }
            density[i][j] = k_next.max(0.0);
            speed[i][j] = v_next.max(0.0);
        }
    }

    let mut next = LaneSegmentState::new(density, speed);
    next.step = state.step + 1;
    Ok(next)
}

/// Rolls the model forward `n_steps` under a fixed plan, returning every
/// intermediate state. Ramp extraction follows the evolving exit-lane flow.
pub fn predict_horizon(
    state: &LaneSegmentState,
    guidance: Option<&SpeedGrid>,
    rain: &RainContext,
    cfg: &ScenarioConfig,
    n_steps: usize,
) -> Result<Vec<LaneSegmentState>, MetanetError> {
    let mut out = Vec::with_capacity(n_steps);
    let mut cur = state.clone();
    for _ in 0..n_steps {
        let bc = BoundaryConditions::from_scenario(cfg, &cur);
        cur = step(&cur, guidance, &bc, rain, cfg)?;
        out.push(cur.clone());
    }
    Ok(out)
}

/// Uniform state with every (segment, lane) at density `k` and its lane's
/// dry fundamental-diagram speed. A fixed point of the stepping when the
/// geometry is uniform, boundary inflow matches and no ramp flow applies.
pub fn equilibrium_state(cfg: &ScenarioConfig, k_veh_km: f64) -> LaneSegmentState {
    let lanes = cfg.lane_count();
    let density = vec![vec![k_veh_km; lanes]; cfg.segment_count()];
    let speed = cfg
        .segments
        .iter()
        .map(|seg| {
            (0..lanes)
                .map(|j| {
                    fd_speed(
                        k_veh_km,
                        seg.free_flow_kmh[j],
                        seg.critical_density_veh_km[j],
                        cfg.metanet.h_rain,
                    )
                })
                .collect()
        })
        .collect();
    LaneSegmentState::new(density, speed)
}
