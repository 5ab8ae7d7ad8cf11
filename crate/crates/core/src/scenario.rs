//! Scenario configuration: road geometry, rainfall schedule, demand, model
//! parameters and time discretization. Everything here is immutable after
//! [`load_scenario`] and safe to share across threads.
//!
//! The on-disk format is TOML; the full schema is documented in the project
//! README. Unknown keys are rejected.

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario file: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("invalid scenario: {field}: {message}")]
    Validation { field: String, message: String },
    #[error("time {t_s} s outside the simulation horizon [0, {horizon_s}) s")]
    OutOfHorizon { t_s: f64, horizon_s: f64 },
}

fn invalid(field: &str, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Geometry of the ramp attached to the off-ramp segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RampGeometry {
    /// Curve radius of the off-ramp, m.
    pub curve_radius_m: f64,
    /// Slope (drainage) length, m.
    pub slope_length_m: f64,
    /// Longitudinal gradient, percent. Must be positive: the water-film
    /// relation is singular at zero gradient.
    pub gradient_pct: f64,
    /// Pavement texture depth, mm.
    pub texture_depth_mm: f64,
    /// Superelevation, degrees. Recorded for provenance; the fitted curve
    /// speed surface does not use it.
    pub superelevation_deg: f64,
    /// Posted ramp speed limit, km/h.
    pub legal_limit_kmh: f64,
}

/// One main-line segment with per-lane fundamental-diagram parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentGeometry {
    pub id: u32,
    /// Segment length, m.
    pub length_m: f64,
    /// Per-lane free-flow speed, km/h (lane 1 = leftmost).
    pub free_flow_kmh: Vec<f64>,
    /// Per-lane critical density, veh/km. Loaded verbatim from survey data.
    pub critical_density_veh_km: Vec<f64>,
    /// Per-lane capacity, veh/h. Loaded verbatim from survey data.
    pub capacity_veh_h: Vec<f64>,
    /// Posted limit for the segment, km/h.
    pub legal_limit_kmh: f64,
    #[serde(default)]
    pub has_off_ramp: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ramp: Option<RampGeometry>,
}

impl SegmentGeometry {
    pub fn lane_count(&self) -> usize {
        self.free_flow_kmh.len()
    }
}

/// Unit the rainfall intensities were recorded in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RainfallUnit {
    #[serde(rename = "mm/h")]
    MmPerHour,
    #[serde(rename = "mm/min")]
    MmPerMinute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RainfallInterval {
    pub start_s: f64,
    pub end_s: f64,
    /// One intensity per segment, in the schedule's declared unit.
    pub intensity: Vec<f64>,
}

/// Piecewise-constant rainfall intensity per (segment, time interval).
/// Intervals are half-open `[start, end)`; together they must cover the
/// whole horizon. Canonical unit after loading is mm/h.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RainfallSchedule {
    pub unit: RainfallUnit,
    pub intervals: Vec<RainfallInterval>,
}

impl RainfallSchedule {
    /// Converts all intensities to the canonical mm/h in place.
    fn canonicalize(&mut self) {
        if self.unit == RainfallUnit::MmPerMinute {
            for iv in &mut self.intervals {
                for d in &mut iv.intensity {
                    *d *= 60.0;
                }
            }
            self.unit = RainfallUnit::MmPerHour;
        }
    }
}

/// Rainfall intensity (mm/h) at `(segment, t)`. Total on the horizon thanks
/// to the half-open interval convention.
pub fn rainfall_at(
    schedule: &RainfallSchedule,
    segment: usize,
    t_s: f64,
    horizon_s: f64,
) -> Result<f64, ScenarioError> {
    if !(0.0..horizon_s).contains(&t_s) {
        return Err(ScenarioError::OutOfHorizon { t_s, horizon_s });
    }
    for iv in &schedule.intervals {
        if t_s >= iv.start_s && t_s < iv.end_s {
            return iv.intensity.get(segment).copied().ok_or_else(|| {
                invalid("rainfall.intervals.intensity", format!("no segment {segment}"))
            });
        }
    }
    // Unreachable on a validated scenario (coverage invariant).
    Err(ScenarioError::OutOfHorizon { t_s, horizon_s })
}

/// Time discretization. The control period is a multiple of the prediction
/// step, which in turn is a multiple of the microsimulation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub sim_step_s: f64,
    pub prediction_step_s: f64,
    pub control_period_s: f64,
    pub horizon_s: f64,
}

impl TimeGrid {
    /// Prediction steps per control cycle (n_T).
    pub fn steps_per_cycle(&self) -> usize {
        (self.control_period_s / self.prediction_step_s).round() as usize
    }

    pub fn cycle_count(&self) -> usize {
        (self.horizon_s / self.control_period_s).round() as usize
    }

    fn is_multiple(big: f64, small: f64) -> bool {
        if small <= 0.0 {
            return false;
        }
        let r = big / small;
        (r - r.round()).abs() < 1e-9 && r >= 1.0 - 1e-9
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Demand {
    /// Upstream inflow per lane, veh/h.
    pub inflow_veh_h: Vec<f64>,
    /// Fraction of lane-3 entrants that leave at the off-ramp.
    pub exit_fraction: f64,
}

/// Prediction-model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetanetParams {
    /// Relaxation time τ, s.
    pub tau_s: f64,
    /// Anticipation elasticity κ, veh/km.
    pub kappa_veh_km: f64,
    /// Upstream-speed damping ω.
    pub omega: f64,
    /// Fundamental-diagram exponent a.
    pub a_fd: f64,
    /// Rain exponent h of the speed-density relation (1.3..=2).
    pub h_rain: f64,
    /// Critical density under active guidance, veh/km.
    pub k_cr_guided_veh_km: f64,
    /// Prediction slack γ on guidance speeds in the desired-speed relation.
    pub gamma_margin: f64,
}

/// Calibrated rainy-weather speed-density surface v = A·exp(B·k + C·L_v).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RainSpeedDensityParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveWeights {
    pub alpha_ttt: f64,
    pub alpha_ttd: f64,
    pub alpha_sd: f64,
}

/// Parameters of the safety physics and the envelope construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafetyParams {
    /// Driver reaction time, s.
    pub reaction_time_s: f64,
    /// Standstill safety gap, m.
    pub safety_gap_m: f64,
    /// Configured ceiling on safe deceleration, m/s².
    pub a_max_ms2: f64,
    /// Floor for the adhesion coefficient.
    pub phi_min: f64,
    /// Clear-weather visibility cap, m.
    pub visibility_clear_m: f64,
    /// Effective-visibility floor credited to guided traffic, m. Models the
    /// over-the-horizon perception the roadside system and high-precision
    /// maps provide; unguided drivers see only the optical visibility.
    pub visibility_floor_m: f64,
    /// Ceiling for the rain speed-density cap, km/h.
    pub v_cap_max_kmh: f64,
}

/// Controller search grids and the deceleration design value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlParams {
    /// Guidance speed grid pitch, km/h.
    pub speed_grid_kmh: f64,
    /// Deceleration grid pitch, m/s².
    pub decel_grid_ms2: f64,
    /// Dry-weather design deceleration for the deceleration segment, m/s².
    pub a_design_ms2: f64,
}

/// Cellular-automaton parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaParams {
    /// Cell edge, m.
    pub cell_m: f64,
    /// Vehicle length, m; must be an integer number of cells.
    pub vehicle_length_m: f64,
    /// Random slowdown probability.
    pub p_slow: f64,
    /// Comfortable deceleration for cap-following, m/s². Gap safety may
    /// exceed it.
    pub comfort_decel_ms2: f64,
    /// Natural deceleration unguided exiting drivers use ahead of the gore,
    /// m/s².
    pub natural_exit_decel_ms2: f64,
    /// Speed tolerance for a safe ramp exit, km/h; faster arrivals are
    /// logged as overspeed exits.
    pub exit_speed_tolerance_kmh: f64,
}

impl CaParams {
    /// Cells a vehicle occupies (rounded up: a 4.3 m car on a 0.5 m lattice
    /// takes 9 cells).
    pub fn occupancy_cells(&self) -> usize {
        (self.vehicle_length_m / self.cell_m).ceil() as usize
    }

    /// One speed unit in km/h (cells/step on the lattice).
    pub fn speed_unit_kmh(&self, sim_step_s: f64) -> f64 {
        crate::units::ms_to_kmh(self.cell_m / sim_step_s)
    }
}

/// A fully validated scenario. Immutable after load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub segments: Vec<SegmentGeometry>,
    pub rainfall: RainfallSchedule,
    pub time: TimeGrid,
    pub demand: Demand,
    pub metanet: MetanetParams,
    pub rain_speed_density: RainSpeedDensityParams,
    pub weights: ObjectiveWeights,
    pub safety: SafetyParams,
    pub control: ControlParams,
    pub ca: CaParams,
    /// Probability a driver complies with broadcast guidance.
    pub gamma_comply: f64,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    pub fn lane_count(&self) -> usize {
        self.segments.first().map_or(0, SegmentGeometry::lane_count)
    }

    /// Index of the (unique) off-ramp segment.
    pub fn ramp_segment(&self) -> usize {
        self.segments
            .iter()
            .position(|s| s.has_off_ramp)
            .expect("validated scenario has an off-ramp segment")
    }

    pub fn ramp(&self) -> &RampGeometry {
        self.segments[self.ramp_segment()]
            .ramp
            .as_ref()
            .expect("validated scenario has ramp geometry")
    }

    /// Total main-line length, m.
    pub fn total_length_m(&self) -> f64 {
        self.segments.iter().map(|s| s.length_m).sum()
    }

    pub fn rainfall_at(&self, segment: usize, t_s: f64) -> Result<f64, ScenarioError> {
        rainfall_at(&self.rainfall, segment, t_s, self.time.horizon_s)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.segments.is_empty() {
            return Err(invalid("segments", "at least one segment is required"));
        }
        let lanes = self.lane_count();
        if lanes == 0 {
            return Err(invalid("segments[0].free_flow_kmh", "lane_count must be >= 1"));
        }
        for (i, seg) in self.segments.iter().enumerate() {
            let f = |name: &str| format!("segments[{i}].{name}");
            if seg.length_m <= 0.0 {
                return Err(invalid(&f("length_m"), "must be > 0"));
            }
            if seg.lane_count() != lanes
                || seg.critical_density_veh_km.len() != lanes
                || seg.capacity_veh_h.len() != lanes
            {
                return Err(invalid(
                    &f("free_flow_kmh"),
                    format!("per-lane arrays must all have {lanes} entries"),
                ));
            }
            if seg.free_flow_kmh.iter().any(|&v| !v.is_finite() || v <= 0.0) {
                return Err(invalid(&f("free_flow_kmh"), "must be > 0"));
            }
            if seg.critical_density_veh_km.iter().any(|&k| !k.is_finite() || k <= 0.0) {
                return Err(invalid(&f("critical_density_veh_km"), "must be > 0"));
            }
            if seg.legal_limit_kmh <= 0.0 {
                return Err(invalid(&f("legal_limit_kmh"), "must be > 0"));
            }
            if seg.has_off_ramp != seg.ramp.is_some() {
                return Err(invalid(
                    &f("ramp"),
                    "ramp geometry must be present exactly when has_off_ramp",
                ));
            }
            if let Some(ramp) = &seg.ramp {
                if ramp.curve_radius_m <= 0.0 {
                    return Err(invalid(&f("ramp.curve_radius_m"), "must be > 0"));
                }
                if ramp.slope_length_m <= 0.0 {
                    return Err(invalid(&f("ramp.slope_length_m"), "must be > 0"));
                }
                if ramp.gradient_pct <= 0.0 {
                    return Err(invalid(
                        &f("ramp.gradient_pct"),
                        "must be > 0 (water-film relation is singular at 0)",
                    ));
                }
                if ramp.texture_depth_mm <= 0.0 {
                    return Err(invalid(&f("ramp.texture_depth_mm"), "must be > 0"));
                }
                if ramp.legal_limit_kmh <= 0.0 {
                    return Err(invalid(&f("ramp.legal_limit_kmh"), "must be > 0"));
                }
            }
        }
        let ramps: Vec<usize> = self
            .segments
            .iter()
            .enumerate()
            .filter(|(_, s)| s.has_off_ramp)
            .map(|(i, _)| i)
            .collect();
        if ramps.len() != 1 {
            return Err(invalid(
                "segments.has_off_ramp",
                format!("exactly one off-ramp segment required, found {}", ramps.len()),
            ));
        }
        if ramps[0] != self.segments.len() - 1 {
            return Err(invalid(
                "segments.has_off_ramp",
                "the off-ramp segment must be the most downstream one",
            ));
        }

        self.validate_time()?;
        self.validate_rainfall()?;

        if self.demand.inflow_veh_h.len() != lanes {
            return Err(invalid("demand.inflow_veh_h", format!("need {lanes} lanes")));
        }
        if self.demand.inflow_veh_h.iter().any(|&q| q < 0.0) {
            return Err(invalid("demand.inflow_veh_h", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.demand.exit_fraction) {
            return Err(invalid("demand.exit_fraction", "must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.gamma_comply) {
            return Err(invalid("gamma_comply", "must be in [0, 1]"));
        }
        if self.seed > i64::MAX as u64 {
            return Err(invalid("seed", "must fit a TOML integer (<= 2^63 - 1)"));
        }

        let m = &self.metanet;
        if m.tau_s <= 0.0 {
            return Err(invalid("metanet.tau_s", "must be > 0"));
        }
        if m.kappa_veh_km <= 0.0 {
            return Err(invalid("metanet.kappa_veh_km", "must be > 0"));
        }
        if !(m.omega > 0.0 && m.omega <= 1.0) {
            return Err(invalid("metanet.omega", "must be in (0, 1]"));
        }
        if !(1.3..=2.0).contains(&m.h_rain) {
            return Err(invalid("metanet.h_rain", "must be in [1.3, 2.0]"));
        }
        if m.k_cr_guided_veh_km <= 0.0 {
            return Err(invalid("metanet.k_cr_guided_veh_km", "must be > 0"));
        }
        if m.a_fd <= 0.0 {
            return Err(invalid("metanet.a_fd", "must be > 0"));
        }
        if m.gamma_margin < 0.0 {
            return Err(invalid("metanet.gamma_margin", "must be >= 0"));
        }

        let w = &self.weights;
        if w.alpha_ttt < 0.0 || w.alpha_ttd < 0.0 || w.alpha_sd < 0.0 {
            return Err(invalid("weights", "must be >= 0"));
        }

        let s = &self.safety;
        if s.reaction_time_s < 0.0 {
            return Err(invalid("safety.reaction_time_s", "must be >= 0"));
        }
        if s.safety_gap_m < 0.0 {
            return Err(invalid("safety.safety_gap_m", "must be >= 0"));
        }
        if s.a_max_ms2 <= 0.0 {
            return Err(invalid("safety.a_max_ms2", "must be > 0"));
        }
        if !(s.phi_min > 0.0 && s.phi_min < 0.8256) {
            return Err(invalid("safety.phi_min", "must be in (0, 0.8256)"));
        }
        if s.visibility_clear_m <= 0.0 || s.visibility_floor_m < 0.0 {
            return Err(invalid("safety.visibility_clear_m", "must be > 0"));
        }
        if s.v_cap_max_kmh <= 0.0 {
            return Err(invalid("safety.v_cap_max_kmh", "must be > 0"));
        }

        let c = &self.control;
        if c.speed_grid_kmh <= 0.0 || c.decel_grid_ms2 <= 0.0 || c.a_design_ms2 <= 0.0 {
            return Err(invalid("control", "grid pitches and a_design must be > 0"));
        }

        let ca = &self.ca;
        if ca.cell_m <= 0.0 {
            return Err(invalid("ca.cell_m", "must be > 0"));
        }
        if ca.vehicle_length_m < ca.cell_m {
            return Err(invalid(
                "ca.vehicle_length_m",
                "must occupy at least one cell",
            ));
        }
        if !(0.0..=1.0).contains(&ca.p_slow) {
            return Err(invalid("ca.p_slow", "must be in [0, 1]"));
        }
        if ca.comfort_decel_ms2 <= 0.0 || ca.natural_exit_decel_ms2 <= 0.0 {
            return Err(invalid("ca.comfort_decel_ms2", "must be > 0"));
        }
        Ok(())
    }

    fn validate_time(&self) -> Result<(), ScenarioError> {
        let t = &self.time;
        if t.sim_step_s <= 0.0 {
            return Err(invalid("time.sim_step_s", "must be > 0"));
        }
        if !TimeGrid::is_multiple(t.prediction_step_s, t.sim_step_s) {
            return Err(invalid(
                "time.prediction_step_s",
                "must be an integer multiple of sim_step_s",
            ));
        }
        if !TimeGrid::is_multiple(t.control_period_s, t.prediction_step_s) {
            return Err(invalid(
                "time.control_period_s",
                "must be an integer multiple of prediction_step_s",
            ));
        }
        if !TimeGrid::is_multiple(t.horizon_s, t.control_period_s) {
            return Err(invalid(
                "time.horizon_s",
                "must be an integer multiple of control_period_s",
            ));
        }
        Ok(())
    }

    fn validate_rainfall(&self) -> Result<(), ScenarioError> {
        let n = self.segment_count();
        let mut intervals: Vec<&RainfallInterval> = self.rainfall.intervals.iter().collect();
        if intervals.is_empty() {
            return Err(invalid("rainfall.intervals", "must not be empty"));
        }
        for (i, iv) in intervals.iter().enumerate() {
            if iv.end_s <= iv.start_s {
                return Err(invalid(
                    &format!("rainfall.intervals[{i}]"),
                    "end_s must be > start_s",
                ));
            }
            if iv.intensity.len() != n {
                return Err(invalid(
                    &format!("rainfall.intervals[{i}].intensity"),
                    format!("need one value per segment ({n})"),
                ));
            }
            if iv.intensity.iter().any(|&d| d < 0.0) {
                return Err(invalid(
                    &format!("rainfall.intervals[{i}].intensity"),
                    "must be >= 0",
                ));
            }
        }
        intervals.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        let mut cursor = 0.0;
        for iv in &intervals {
            if iv.start_s > cursor + 1e-9 {
                return Err(invalid(
                    "rainfall.intervals",
                    format!("uncovered interval [{cursor}, {}) s", iv.start_s),
                ));
            }
            if iv.start_s < cursor - 1e-9 {
                return Err(invalid(
                    "rainfall.intervals",
                    format!("overlapping interval at {} s", iv.start_s),
                ));
            }
            cursor = iv.end_s;
        }
        if cursor < self.time.horizon_s - 1e-9 {
            return Err(invalid(
                "rainfall.intervals",
                format!("uncovered interval [{cursor}, {}) s", self.time.horizon_s),
            ));
        }
        Ok(())
    }
}

/// Parses and validates a scenario from TOML text. Rainfall is converted to
/// the canonical mm/h.
pub fn parse_scenario(text: &str) -> Result<ScenarioConfig, ScenarioError> {
    let mut cfg: ScenarioConfig =
        toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    cfg.rainfall.canonicalize();
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioConfig, ScenarioError> {
    let text = std::fs::read_to_string(path)?;
    parse_scenario(&text)
}

/// Serializes a scenario back to TOML. `parse_scenario(serialize(cfg))`
/// reproduces `cfg` exactly.
pub fn serialize_scenario(cfg: &ScenarioConfig) -> String {
    toml::to_string_pretty(cfg).expect("scenario serializes")
}

/// The bundled reference scenario (4 segments, survey parameters, staged
/// rainfall).
pub fn reference_scenario() -> ScenarioConfig {
    parse_scenario(include_str!("../fixtures/paper_table_1_3.cfg"))
        .expect("bundled fixture is valid")
}
