//! Rolling-horizon joint speed-guidance optimizer and the control loop.
//!
//! Each control cycle: read the plant state, build the safety envelope for
//! the cycle start, search a feasible guidance plan minimizing the weighted
//! travel-time / travel-distance / speed-dispersion objective over the
//! predicted horizon, then hold the plan constant for the cycle.
//!
//! The search is projected coordinate descent on a fixed speed lattice,
//! initialized at the feasibility projection of the previous plan (or of the
//! envelope caps on the first cycle). Only strict improvements are accepted,
//! so where the objective is flat the initialization's higher speeds win.

use crate::metanet::{predict_horizon, LaneSegmentState, RainContext, SpeedGrid};
use crate::pds::{size_pds, PdsProfile};
use crate::safety::{build_envelope, SafetyEnvelope};
use crate::scenario::{ObjectiveWeights, ScenarioConfig};
use crate::units::{m_to_km, s_to_h};
use thiserror::Error;

/// Largest admissible guidance-speed difference between adjacent segments
/// and between consecutive cycles, km/h.
pub const BAND_KMH: f64 = 20.0;

/// Numerical slack for inclusive constraint bounds.
const EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("cycle {cycle}: {source}")]
    Cycle {
        cycle: usize,
        source: crate::metanet::MetanetError,
    },
    #[error(transparent)]
    Scenario(#[from] crate::scenario::ScenarioError),
}

/// One cycle's released guidance.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidancePlan {
    pub cycle: usize,
    /// Guidance speed per (segment, lane), km/h.
    pub v_g: SpeedGrid,
    /// Design deceleration for the deceleration segment, m/s².
    pub a_o_ms2: f64,
    /// Deceleration profile on the exit lane, anchored at the gore.
    pub profile: PdsProfile,
}

/// A constraint violation: which rule, where, by how much.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// 15 = envelope/legal cap, 16 = adjacent-segment band,
    /// 17 = cycle-to-cycle band, 18 = deceleration bound.
    pub constraint: u8,
    pub segment: usize,
    pub lane: usize,
    pub lhs: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConstraintReport {
    pub violations: Vec<Violation>,
}

impl ConstraintReport {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Speed-dispersion summary. `empty_cells` counts (segment, lane) cells
/// that had no records and were skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedDispersion {
    pub per_lane: Vec<f64>,
    pub aggregate: f64,
    pub empty_cells: usize,
}

/// Dispersion from measured spot speeds: per lane, the root of the mean
/// over segments of the per-cell speed variance about the cell mean.
/// `records[i][j]` holds the spot speeds collected in that cell.
pub fn speed_dispersion(records: &[Vec<Vec<f64>>]) -> SpeedDispersion {
    let lanes = records.first().map_or(0, Vec::len);
    let mut per_lane = Vec::with_capacity(lanes);
    let mut empty = 0;
    for j in 0..lanes {
        let mut sum_var = 0.0;
        let mut counted = 0usize;
        for row in records {
            let cell = &row[j];
            if cell.is_empty() {
                empty += 1;
                continue;
            }
            let mean = cell.iter().sum::<f64>() / cell.len() as f64;
            let var = cell.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cell.len() as f64;
            sum_var += var;
            counted += 1;
        }
        per_lane.push(if counted == 0 {
            0.0
        } else {
            (sum_var / counted as f64).sqrt()
        });
    }
    let aggregate = if per_lane.is_empty() {
        0.0
    } else {
        per_lane.iter().sum::<f64>() / per_lane.len() as f64
    };
    SpeedDispersion {
        per_lane,
        aggregate,
        empty_cells: empty,
    }
}

/// Predictive dispersion proxy for the optimizer: no vehicles exist in the
/// prediction, so the per-cell variance is replaced by the squared deviation
/// of the cell speed from its lane's cross-segment mean, averaged over the
/// horizon.
pub fn predicted_dispersion(trajectory: &[LaneSegmentState]) -> SpeedDispersion {
    if trajectory.is_empty() {
        return SpeedDispersion {
            per_lane: Vec::new(),
            aggregate: 0.0,
            empty_cells: 0,
        };
    }
    let segments = trajectory[0].segments();
    let lanes = trajectory[0].lanes();
    let mut per_lane = vec![0.0; lanes];
    for state in trajectory {
        for j in 0..lanes {
            let mean = (0..segments).map(|i| state.speed[i][j]).sum::<f64>() / segments as f64;
            let var = (0..segments)
                .map(|i| (state.speed[i][j] - mean).powi(2))
                .sum::<f64>()
                / segments as f64;
            per_lane[j] += var.sqrt();
        }
    }
    for sd in &mut per_lane {
        *sd /= trajectory.len() as f64;
    }
    let aggregate = per_lane.iter().sum::<f64>() / lanes as f64;
    SpeedDispersion {
        per_lane,
        aggregate,
        empty_cells: 0,
    }
}

/// The cycle objective
/// J = Δt·Σ_λ Σ_i Σ_j x_i·(α_TTT·k − α_TTD·k·v) + α_SD·SD,
/// with Δt in hours and x_i in km (travel time in veh·h, distance veh·km).
pub fn objective(
    trajectory: &[LaneSegmentState],
    weights: &ObjectiveWeights,
    sd: f64,
    lengths_m: &[f64],
    dt_s: f64,
) -> f64 {
    let dt_h = s_to_h(dt_s);
    let mut sum = 0.0;
    for state in trajectory {
        for (i, &x_m) in lengths_m.iter().enumerate() {
            let x_km = m_to_km(x_m);
            for j in 0..state.lanes() {
                let k = state.density[i][j];
                let v = state.speed[i][j];
                sum += x_km * (weights.alpha_ttt * k - weights.alpha_ttd * k * v);
            }
        }
    }
    dt_h * sum + weights.alpha_sd * sd
}

/// Checks a plan against the envelope cap, the adjacent-segment band, the
/// cycle-to-cycle band (skipped without a previous plan) and the
/// deceleration bound. Bounds are inclusive.
pub fn check_constraints(
    plan: &GuidancePlan,
    prev: Option<&GuidancePlan>,
    env: &SafetyEnvelope,
    cfg: &ScenarioConfig,
) -> ConstraintReport {
    let mut report = ConstraintReport::default();
    let lanes = cfg.lane_count();
    for (i, seg) in cfg.segments.iter().enumerate() {
        let cap = env.v_max_kmh[i].min(seg.legal_limit_kmh);
        for j in 0..lanes {
            let v = plan.v_g[i][j];
            if v > cap + EPS {
                report.violations.push(Violation {
                    constraint: 15,
                    segment: i,
                    lane: j,
                    lhs: v,
                    bound: cap,
                });
            }
            if i + 1 < cfg.segment_count() {
                let diff = (plan.v_g[i + 1][j] - v).abs();
                if diff > BAND_KMH + EPS {
                    report.violations.push(Violation {
                        constraint: 16,
                        segment: i,
                        lane: j,
                        lhs: diff,
                        bound: BAND_KMH,
                    });
                }
            }
            if let Some(p) = prev {
                let diff = (v - p.v_g[i][j]).abs();
                if diff > BAND_KMH + EPS {
                    report.violations.push(Violation {
                        constraint: 17,
                        segment: i,
                        lane: j,
                        lhs: diff,
                        bound: BAND_KMH,
                    });
                }
            }
        }
    }
    if plan.a_o_ms2 > env.a_max_ms2 + EPS {
        report.violations.push(Violation {
            constraint: 18,
            segment: cfg.ramp_segment(),
            lane: lanes - 1,
            lhs: plan.a_o_ms2,
            bound: env.a_max_ms2,
        });
    }
    report
}

/// Weather-scaled design deceleration, snapped down to the deceleration
/// lattice. Scaling the dry design value by the squared safe-speed ratio
/// keeps the same fractional friction/visibility reserve in degraded
/// weather; rounding down always picks the gentler lattice point.
pub fn choose_deceleration(env: &SafetyEnvelope, cfg: &ScenarioConfig) -> f64 {
    let ramp_seg = cfg.ramp_segment();
    let legal = cfg.segments[ramp_seg].legal_limit_kmh;
    let ratio = (env.v_max_kmh[ramp_seg].min(legal) / legal).clamp(0.0, 1.0);
    let raw = cfg.control.a_design_ms2 * ratio * ratio;
    let grid = cfg.control.decel_grid_ms2;
    let snapped = (raw / grid).floor() * grid;
    snapped.clamp(grid, env.a_max_ms2.max(grid))
}

/// Entry speed for the deceleration profile: the exit-lane guidance at the
/// ramp segment, bounded by that lane's free-flow speed (guidance above it
/// accelerates nobody).
pub fn pds_entry_speed(v_g: &SpeedGrid, cfg: &ScenarioConfig) -> f64 {
    let ramp_seg = cfg.ramp_segment();
    let lane = cfg.lane_count() - 1;
    v_g[ramp_seg][lane].min(cfg.segments[ramp_seg].free_flow_kmh[lane])
}

fn snap_down(v: f64, grid: f64) -> f64 {
    ((v + EPS) / grid).floor() * grid
}

/// Feasibility projection: caps from the envelope and legal limits, the
/// previous plan's cycle band, and the adjacent-segment band, all on the
/// speed lattice. Returns the projected grid and whether the full set was
/// satisfiable (a cap plunging more than the cycle band in one period makes
/// it not; the cap then wins and the cycle reports infeasibility).
fn project(
    prev: Option<&SpeedGrid>,
    env: &SafetyEnvelope,
    cfg: &ScenarioConfig,
) -> (SpeedGrid, bool) {
    let grid = cfg.control.speed_grid_kmh;
    let lanes = cfg.lane_count();
    let n = cfg.segment_count();
    let mut feasible = true;
    let mut p: SpeedGrid = (0..n)
        .map(|i| {
            let cap = env.v_max_kmh[i].min(cfg.segments[i].legal_limit_kmh);
            (0..lanes)
                .map(|j| {
                    let mut v = snap_down(cap, grid);
                    if let Some(prev) = prev {
                        v = v.min(prev[i][j] + BAND_KMH);
                        if v < prev[i][j] - BAND_KMH - EPS {
                            // Cap fell faster than the cycle band allows;
                            // safety wins, smoothness is reported broken.
                            feasible = false;
                        }
                    }
                    v.max(grid)
                })
                .collect()
        })
        .collect();
    // Adjacent-segment band: pulling values down only, alternating sweeps
    // until stable (a chain needs at most n passes).
    for _ in 0..n {
        let mut changed = false;
        for j in 0..lanes {
            for i in (1..n).rev() {
                let limit = p[i][j] + BAND_KMH;
                if p[i - 1][j] > limit + EPS {
                    p[i - 1][j] = snap_down(limit, grid);
                    changed = true;
                }
            }
            for i in 0..n - 1 {
                let limit = p[i][j] + BAND_KMH;
                if p[i + 1][j] > limit + EPS {
                    p[i + 1][j] = snap_down(limit, grid);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    if let Some(prev) = prev {
        for i in 0..n {
            for j in 0..lanes {
                if p[i][j] < prev[i][j] - BAND_KMH - EPS {
                    feasible = false;
                }
            }
        }
    }
    (p, feasible)
}

/// Diagnostics for one optimized cycle.
#[derive(Debug, Clone)]
pub struct CycleDiag {
    pub cycle: usize,
    pub j_init: f64,
    pub j_final: f64,
    pub j_cap_plan: f64,
    pub feasible_projection: bool,
    pub descent_passes: usize,
}

fn evaluate(
    v_g: &SpeedGrid,
    state: &LaneSegmentState,
    rain: &RainContext,
    cfg: &ScenarioConfig,
    lengths_m: &[f64],
) -> f64 {
    let n_steps = cfg.time.steps_per_cycle();
    let traj = match predict_horizon(state, Some(v_g), rain, cfg, n_steps) {
        Ok(t) => t,
        Err(_) => return f64::INFINITY,
    };
    let sd = predicted_dispersion(&traj);
    objective(
        &traj,
        &cfg.weights,
        sd.aggregate,
        lengths_m,
        cfg.time.prediction_step_s,
    )
}

/// One cycle of projected coordinate descent on the speed lattice.
///
/// Starts from the feasibility projection of the previous plan (envelope
/// caps on the first cycle), then sweeps the (segment, lane) cells trying
/// single-lattice moves in both directions, keeping strict improvements,
/// until a full pass improves nothing. The deceleration is set by the
/// weather-scaled rule; it sits below the prediction model's granularity,
/// so the objective cannot rank it.
pub fn optimize_cycle(
    state: &LaneSegmentState,
    env: &SafetyEnvelope,
    prev: Option<&GuidancePlan>,
    cfg: &ScenarioConfig,
    cycle: usize,
) -> (GuidancePlan, CycleDiag) {
    let grid = cfg.control.speed_grid_kmh;
    let lanes = cfg.lane_count();
    let n = cfg.segment_count();
    let lengths: Vec<f64> = cfg.segments.iter().map(|s| s.length_m).collect();
    let rain = RainContext::from_envelope(env);

    let (mut v_g, feasible) = project(prev.map(|p| &p.v_g), env, cfg);
    let (cap_plan, _) = project(None, env, cfg);
    let j_cap_plan = evaluate(&cap_plan, state, &rain, cfg, &lengths);
    let j_init = evaluate(&v_g, state, &rain, cfg, &lengths);

    let caps: Vec<f64> = (0..n)
        .map(|i| env.v_max_kmh[i].min(cfg.segments[i].legal_limit_kmh))
        .collect();
    let admissible = |v: f64, i: usize, j: usize, v_g: &SpeedGrid| -> bool {
        if v < grid - EPS || v > caps[i] + EPS {
            return false;
        }
        if i > 0 && (v - v_g[i - 1][j]).abs() > BAND_KMH + EPS {
            return false;
        }
        if i + 1 < n && (v - v_g[i + 1][j]).abs() > BAND_KMH + EPS {
            return false;
        }
        if let Some(p) = prev {
            if (v - p.v_g[i][j]).abs() > BAND_KMH + EPS {
                return false;
            }
        }
        true
    };

    // Coordinate descent with exact line minimization: each (segment, lane)
    // in turn scans every admissible lattice value, highest first, keeping
    // the best objective (so exact ties resolve toward higher speeds).
    let mut j_best = j_init;
    let mut passes = 0;
    loop {
        passes += 1;
        let mut improved = false;
        for i in 0..n {
            for j in 0..lanes {
                let old = v_g[i][j];
                let mut best_v = old;
                let mut candidate = snap_down(caps[i], grid);
                while candidate >= grid - EPS {
                    if (candidate - old).abs() > EPS && admissible(candidate, i, j, &v_g) {
                        v_g[i][j] = candidate;
                        let j_new = evaluate(&v_g, state, &rain, cfg, &lengths);
                        if j_new < j_best - EPS {
                            j_best = j_new;
                            best_v = candidate;
                        }
                    }
                    candidate -= grid;
                }
                v_g[i][j] = best_v;
                if best_v != old {
                    improved = true;
                }
            }
        }
        if !improved || passes > 50 {
            break;
        }
    }

    let a_o = choose_deceleration(env, cfg);
    let v_j3 = pds_entry_speed(&v_g, cfg);
    let profile = size_pds(env, v_j3, a_o);
    let plan = GuidancePlan {
        cycle,
        v_g,
        a_o_ms2: a_o,
        profile,
    };
    let diag = CycleDiag {
        cycle,
        j_init,
        j_final: j_best,
        j_cap_plan,
        feasible_projection: feasible,
        descent_passes: passes,
    };
    (plan, diag)
}

/// Anything the control loop can steer: the prediction model itself or the
/// cellular-automaton plant.
pub trait Plant {
    /// Current traffic state as the detectors see it.
    fn measure(&self) -> LaneSegmentState;
    /// Advance one control period under the given plan.
    fn apply_cycle(&mut self, plan: &GuidancePlan, cycle_start_s: f64);
}

/// Closed-loop prediction-model plant (useful for controller self-tests).
pub struct ModelPlant<'a> {
    cfg: &'a ScenarioConfig,
    pub state: LaneSegmentState,
}

impl<'a> ModelPlant<'a> {
    pub fn new(cfg: &'a ScenarioConfig, state: LaneSegmentState) -> Self {
        Self { cfg, state }
    }
}

impl Plant for ModelPlant<'_> {
    fn measure(&self) -> LaneSegmentState {
        self.state.clone()
    }

    fn apply_cycle(&mut self, plan: &GuidancePlan, cycle_start_s: f64) {
        let env = build_envelope(self.cfg, cycle_start_s).expect("time within horizon");
        let rain = RainContext::from_envelope(&env);
        let n = self.cfg.time.steps_per_cycle();
        let traj = predict_horizon(&self.state, Some(&plan.v_g), &rain, self.cfg, n)
            .expect("finite model step");
        if let Some(last) = traj.into_iter().last() {
            self.state = last;
        }
    }
}

/// Output of one closed-loop run.
#[derive(Debug, Clone)]
pub struct ControlRun {
    pub plans: Vec<GuidancePlan>,
    pub diags: Vec<CycleDiag>,
    /// Plant state measured at the start of each cycle.
    pub states: Vec<LaneSegmentState>,
}

/// Runs the full rolling horizon: every `control_period_s`, measure, build
/// the envelope, optimize, release the plan to the plant.
pub fn run_control_loop(cfg: &ScenarioConfig, plant: &mut dyn Plant) -> Result<ControlRun, ControlError> {
    let cycles = cfg.time.cycle_count();
    let mut plans: Vec<GuidancePlan> = Vec::with_capacity(cycles);
    let mut diags = Vec::with_capacity(cycles);
    let mut states = Vec::with_capacity(cycles);
    for cycle in 0..cycles {
        let t0 = cycle as f64 * cfg.time.control_period_s;
        let state = plant.measure();
        let env = build_envelope(cfg, t0)?;
        let (plan, diag) = optimize_cycle(&state, &env, plans.last(), cfg, cycle);
        plant.apply_cycle(&plan, t0);
        plans.push(plan);
        diags.push(diag);
        states.push(state);
    }
    Ok(ControlRun { plans, diags, states })
}

/// The static legal-limit plan used by the fixed-limit baseline.
pub fn legal_limit_plan(cfg: &ScenarioConfig) -> GuidancePlan {
    let lanes = cfg.lane_count();
    let v_g: SpeedGrid = cfg
        .segments
        .iter()
        .map(|s| vec![s.legal_limit_kmh; lanes])
        .collect();
    let ramp_seg = cfg.ramp_segment();
    let lane = lanes - 1;
    let v_j3 = v_g[ramp_seg][lane].min(cfg.segments[ramp_seg].free_flow_kmh[lane]);
    GuidancePlan {
        cycle: 0,
        v_g,
        a_o_ms2: cfg.control.a_design_ms2,
        profile: PdsProfile {
            length_m: 0.0,
            decel_ms2: cfg.control.a_design_ms2,
            v_exit_kmh: v_j3,
            v_entry_kmh: v_j3,
        },
    }
}
