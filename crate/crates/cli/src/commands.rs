//! Subcommand implementations and the run manifest.

use rainlane_core::calibration::{
    fit_fundamental_diagram, fit_rain_speed_density, read_detector_file, CalibrationError,
};
use rainlane_core::controller::ControlError;
use rainlane_core::microsim::{run_simulation, RunMode, SimOutput};
use rainlane_core::safety::{
    build_envelope, mainline_safe_speed_eq26, water_film_depth, SafetyError,
};
use rainlane_core::scenario::{load_scenario, RainfallInterval, ScenarioError};
use rainlane_core::units::mm_h_to_mm_min;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Command error with the process exit code it maps to.
#[derive(Debug, thiserror::Error)]
pub enum CmdError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Io(String),
}

impl CmdError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CmdError::Validation(_) => 1,
            CmdError::Runtime(_) => 2,
            CmdError::Io(_) => 3,
        }
    }
}

impl From<std::io::Error> for CmdError {
    fn from(e: std::io::Error) -> Self {
        CmdError::Io(e.to_string())
    }
}

impl From<ScenarioError> for CmdError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Io(io) => CmdError::Io(io.to_string()),
            other => CmdError::Validation(other.to_string()),
        }
    }
}

impl From<ControlError> for CmdError {
    fn from(e: ControlError) -> Self {
        CmdError::Runtime(e.to_string())
    }
}

impl From<SafetyError> for CmdError {
    fn from(e: SafetyError) -> Self {
        CmdError::Runtime(e.to_string())
    }
}

impl From<CalibrationError> for CmdError {
    fn from(e: CalibrationError) -> Self {
        match e {
            CalibrationError::Io(io) => CmdError::Io(io.to_string()),
            CalibrationError::Csv(msg) | CalibrationError::BadRow { reason: msg, .. } => {
                CmdError::Validation(msg)
            }
            other => CmdError::Runtime(other.to_string()),
        }
    }
}

#[derive(Serialize)]
struct RunManifest {
    scenario: String,
    mode: RunMode,
    seed: u64,
    out_dir: String,
    artifacts: Vec<String>,
    tool_version: &'static str,
    config_sha256: String,
}

fn out_dir(cli_out: Option<PathBuf>, default: &str) -> PathBuf {
    if let Ok(env) = std::env::var("RAINLANE_OUT") {
        return PathBuf::from(env);
    }
    cli_out.unwrap_or_else(|| PathBuf::from(default))
}

fn config_hash(path: &Path) -> Result<String, CmdError> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn write_artifact(dir: &Path, name: &str, contents: &str) -> Result<String, CmdError> {
    fs::write(dir.join(name), contents)?;
    Ok(name.to_string())
}

pub fn run(
    scenario_path: &Path,
    mode: RunMode,
    seed: u64,
    out: Option<PathBuf>,
    csv_metrics: bool,
) -> Result<(), CmdError> {
    let cfg = load_scenario(scenario_path)?;
    let dir = out_dir(out, "rainlane-out");
    fs::create_dir_all(&dir)?;
    let output = run_simulation(&cfg, mode, seed)?;
    let mut artifacts = Vec::new();

    // Metrics.
    if csv_metrics {
        artifacts.push(write_artifact(&dir, "metrics.csv", &metrics_csv(&output))?);
    } else {
        let json = serde_json::to_string_pretty(&output.metrics)
            .map_err(|e| CmdError::Runtime(e.to_string()))?;
        artifacts.push(write_artifact(&dir, "metrics.json", &json)?);
    }

    // Plan log: cycle, segment, lane, guidance, deceleration, objective,
    // feasibility.
    let mut plan_log = String::from("cycle,segment,lane,v_g_kmh,a_o_ms2,j,feasible\n");
    for plan in &output.plans {
        let diag = output.diags.iter().find(|d| d.cycle == plan.cycle);
        let (j, feasible) = diag.map_or((f64::NAN, true), |d| (d.j_final, d.feasible_projection));
        for (i, row) in plan.v_g.iter().enumerate() {
            for (lane, v) in row.iter().enumerate() {
                let _ = writeln!(
                    plan_log,
                    "{},{},{},{},{},{},{}",
                    plan.cycle, i, lane, v, plan.a_o_ms2, j, feasible
                );
            }
        }
    }
    artifacts.push(write_artifact(&dir, "plan_log.csv", &plan_log)?);

    // Measured trajectory: cycle-start detector states.
    let mut traj = String::from("lambda,segment,lane,k_veh_km,v_kmh,q_veh_h\n");
    for (lambda, state) in output.states.iter().enumerate() {
        for i in 0..state.segments() {
            for j in 0..state.lanes() {
                let _ = writeln!(
                    traj,
                    "{},{},{},{},{},{}",
                    lambda, i, j, state.density[i][j], state.speed[i][j], state.flow[i][j]
                );
            }
        }
    }
    artifacts.push(write_artifact(&dir, "trajectory.csv", &traj)?);

    // Deceleration profiles, sampled every 10 m for plotting.
    let mut profiles = String::from("cycle,s_m,v_g_kmh\n");
    for plan in &output.plans {
        let p = &plan.profile;
        let mut s = 0.0;
        while s <= p.length_m + 10.0 {
            let _ = writeln!(
                profiles,
                "{},{s},{}",
                plan.cycle,
                rainlane_core::pds::pds_guidance_speed(s, p)
            );
            s += 10.0;
        }
    }
    artifacts.push(write_artifact(&dir, "pds_profiles.csv", &profiles)?);

    // Station samples.
    let mut stations = String::from("station_m,t_s,v_kmh,v_g_kmh,compliant,exiting\n");
    for s in &output.metrics.station_samples {
        let _ = writeln!(
            stations,
            "{},{},{},{},{},{}",
            s.station_m,
            s.t_s,
            s.v_kmh,
            s.guidance_kmh.map_or(String::new(), |v| v.to_string()),
            s.compliant,
            s.exiting
        );
    }
    artifacts.push(write_artifact(&dir, "station_samples.csv", &stations)?);

    // Event log, line oriented.
    let mut events = String::new();
    for e in &output.events {
        let _ = writeln!(
            events,
            "{}\t{}\t{}\t{:.1}\t{:.1}\t{:?}",
            e.t_s, e.vehicle, e.lane, e.position_m, e.speed_kmh, e.kind
        );
    }
    artifacts.push(write_artifact(&dir, "events.log", &events)?);

    let manifest = RunManifest {
        scenario: scenario_path.display().to_string(),
        mode,
        seed,
        out_dir: dir.display().to_string(),
        artifacts: artifacts.clone(),
        tool_version: env!("CARGO_PKG_VERSION"),
        config_sha256: config_hash(scenario_path)?,
    };
    let manifest_json =
        serde_json::to_string_pretty(&manifest).map_err(|e| CmdError::Runtime(e.to_string()))?;
    write_artifact(&dir, "manifest.json", &manifest_json)?;

    eprintln!(
        "run complete: mode {:?}, seed {seed}, {} artifacts in {}",
        mode,
        artifacts.len() + 1,
        dir.display()
    );
    Ok(())
}

fn metrics_csv(output: &SimOutput) -> String {
    let m = &output.metrics;
    let mut s = String::from(
        "ttt_veh_h,ttd_veh_km,sd_lane1,sd_lane2,sd_lane3,adherence,spawned,exited_ramp,exited_through,overspeed_exits\n",
    );
    let _ = writeln!(
        s,
        "{},{},{},{},{},{},{},{},{},{}",
        m.ttt_veh_h,
        m.ttd_veh_km,
        m.sd_per_lane.first().copied().unwrap_or(0.0),
        m.sd_per_lane.get(1).copied().unwrap_or(0.0),
        m.sd_per_lane.get(2).copied().unwrap_or(0.0),
        m.adherence_fraction,
        m.spawned,
        m.exited_ramp,
        m.exited_through,
        m.overspeed_exits
    );
    s
}

pub fn sweep(
    scenario_path: &Path,
    param: &str,
    values_arg: &str,
    seeds: u64,
    out: Option<PathBuf>,
    jobs: usize,
) -> Result<(), CmdError> {
    if param != "gamma" {
        return Err(CmdError::Validation(format!(
            "unsupported sweep parameter {param:?} (only \"gamma\")"
        )));
    }
    let values: Vec<f64> = values_arg
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|e| CmdError::Validation(format!("bad gamma value {s:?}: {e}")))
        })
        .collect::<Result<_, _>>()?;
    let values = &values[..];
    if values.is_empty() {
        return Err(CmdError::Validation("empty value list".into()));
    }
    if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(CmdError::Validation("gamma values must lie in [0, 1]".into()));
    }
    if seeds == 0 {
        return Err(CmdError::Validation("need at least one seed".into()));
    }
    let cfg = load_scenario(scenario_path)?;
    let dir = out_dir(out, "rainlane-sweep");
    fs::create_dir_all(&dir)?;

    let jobs = std::env::var("RAINLANE_JOBS")
        .ok()
        .and_then(|j| j.parse().ok())
        .unwrap_or(jobs)
        .max(1);

    let mut points: Vec<(f64, u64)> = Vec::new();
    for &gamma in values {
        for seed in 1..=seeds {
            points.push((gamma, seed));
        }
    }

    let results: Vec<(f64, u64, f64, f64, Vec<f64>)> = std::thread::scope(|scope| {
        let chunk = points.len().div_ceil(jobs);
        let mut handles = Vec::new();
        for slice in points.chunks(chunk.max(1)) {
            let cfg = &cfg;
            handles.push(scope.spawn(move || {
                let mut rows = Vec::new();
                for &(gamma, seed) in slice {
                    let mut cfg = cfg.clone();
                    cfg.gamma_comply = gamma;
                    let out = run_simulation(&cfg, RunMode::Control, seed)
                        .map_err(|e| e.to_string())?;
                    rows.push((
                        gamma,
                        seed,
                        out.metrics.ttt_veh_h,
                        out.metrics.ttd_veh_km,
                        out.metrics.sd_per_lane.clone(),
                    ));
                }
                Ok::<_, String>(rows)
            }));
        }
        let mut all = Vec::new();
        for h in handles {
            match h.join() {
                Ok(Ok(rows)) => all.extend(rows),
                Ok(Err(msg)) => return Err(CmdError::Runtime(msg)),
                Err(_) => return Err(CmdError::Runtime("worker panicked".into())),
            }
        }
        Ok(all)
    })?;

    let mut tidy = String::from("gamma,seed,ttt_veh_h,ttd_veh_km,sd_lane1,sd_lane2,sd_lane3\n");
    for (gamma, seed, ttt, ttd, sd) in &results {
        let _ = writeln!(
            tidy,
            "{gamma},{seed},{ttt},{ttd},{},{},{}",
            sd.first().copied().unwrap_or(0.0),
            sd.get(1).copied().unwrap_or(0.0),
            sd.get(2).copied().unwrap_or(0.0)
        );
    }
    fs::write(dir.join("sweep.csv"), &tidy)?;

    let mut summary = String::from("gamma,mean_ttt_veh_h,mean_ttd_veh_km,mean_sd_lane1,mean_sd_lane2,mean_sd_lane3\n");
    for &gamma in values {
        let rows: Vec<_> = results.iter().filter(|r| r.0 == gamma).collect();
        let n = rows.len() as f64;
        let ttt: f64 = rows.iter().map(|r| r.2).sum::<f64>() / n;
        let ttd: f64 = rows.iter().map(|r| r.3).sum::<f64>() / n;
        let sd: Vec<f64> = (0..3)
            .map(|j| rows.iter().map(|r| r.4[j]).sum::<f64>() / n)
            .collect();
        let _ = writeln!(summary, "{gamma},{ttt},{ttd},{},{},{}", sd[0], sd[1], sd[2]);
    }
    fs::write(dir.join("summary.csv"), &summary)?;
    eprintln!(
        "sweep complete: {} runs over {} values in {}",
        results.len(),
        values.len(),
        dir.display()
    );
    Ok(())
}

pub fn safety_table(
    scenario_path: &Path,
    rain_min: f64,
    rain_max: f64,
    steps: usize,
    out: Option<PathBuf>,
) -> Result<(), CmdError> {
    if steps == 0 {
        return Err(CmdError::Validation("steps must be >= 1".into()));
    }
    if rain_min < 0.0 || rain_max < rain_min {
        return Err(CmdError::Validation("need 0 <= rain-min <= rain-max".into()));
    }
    let cfg = load_scenario(scenario_path)?;
    let ramp_seg = cfg.ramp_segment();
    let ramp = cfg.ramp().clone();

    let mut table =
        String::from("d_mm_h,h_mm,phi,l_v_m,v_max_kmh,v_ramp_kmh,a_max_ms2,eq26_kmh,eq26_abs_diff_kmh\n");
    for i in 0..steps {
        let d = if steps == 1 {
            rain_min
        } else {
            rain_min + (rain_max - rain_min) * i as f64 / (steps - 1) as f64
        };
        // Same instant, uniform rain everywhere.
        let mut uniform = cfg.clone();
        uniform.rainfall.intervals = vec![RainfallInterval {
            start_s: 0.0,
            end_s: cfg.time.horizon_s,
            intensity: vec![d; cfg.segment_count()],
        }];
        let env = build_envelope(&uniform, 0.0)?;
        let h = water_film_depth(
            ramp.slope_length_m,
            ramp.gradient_pct,
            mm_h_to_mm_min(d),
            ramp.texture_depth_mm,
        )?;
        let (eq26, diff) = if d > 0.0 {
            match mainline_safe_speed_eq26(h, mm_h_to_mm_min(d)) {
                Ok(v) => (v.to_string(), (v - env.v_max_kmh[ramp_seg]).abs().to_string()),
                Err(_) => (String::new(), String::new()),
            }
        } else {
            (String::new(), String::new())
        };
        let _ = writeln!(
            table,
            "{d},{h},{},{},{},{},{},{eq26},{diff}",
            env.phi[ramp_seg],
            env.visibility_m[ramp_seg],
            env.v_max_kmh[ramp_seg],
            env.v_ramp_kmh,
            env.a_max_ms2
        );
    }
    match out {
        Some(path) => fs::write(path, table)?,
        None => print!("{table}"),
    }
    Ok(())
}

pub fn calibrate(data: &Path, rain_target: bool, out: Option<PathBuf>) -> Result<(), CmdError> {
    let dataset = read_detector_file(data)?;
    if !dataset.flagged.is_empty() {
        eprintln!(
            "excluded {} rows failing the q = k*v consistency screen",
            dataset.flagged.len()
        );
    }
    let clean: Vec<_> = dataset.clean_rows().into_iter().cloned().collect();
    let mut fragment = String::new();
    if rain_target {
        let fit = fit_rain_speed_density(&clean)?;
        eprintln!(
            "rain speed-density fit: A = {:.6}, B = {:.6}, C = {:.6} (rms log {:.3e})",
            fit.a, fit.b, fit.c, fit.rms_log
        );
        let _ = writeln!(fragment, "[rain_speed_density]");
        let _ = writeln!(fragment, "a = {}", fit.a);
        let _ = writeln!(fragment, "b = {}", fit.b);
        let _ = writeln!(fragment, "c = {}", fit.c);
    } else {
        // Fundamental diagram per (segment, lane) cell.
        let mut cells: Vec<(u32, u32)> = clean.iter().map(|r| (r.segment, r.lane)).collect();
        cells.sort_unstable();
        cells.dedup();
        let mut any = false;
        for (segment, lane) in cells {
            let rows: Vec<(f64, f64)> = clean
                .iter()
                .filter(|r| r.segment == segment && r.lane == lane)
                .map(|r| (r.k_veh_km, r.v_kmh))
                .collect();
            match fit_fundamental_diagram(&rows) {
                Ok(fit) => {
                    any = true;
                    eprintln!(
                        "segment {segment} lane {lane}: v_f = {:.3} km/h, k_c = {:.3} veh/km, a = {:.4} (rms {:.4} km/h)",
                        fit.v_free_kmh, fit.k_crit_veh_km, fit.exponent, fit.rms_kmh
                    );
                    let _ = writeln!(fragment, "[[fd_fit]]");
                    let _ = writeln!(fragment, "segment = {segment}");
                    let _ = writeln!(fragment, "lane = {lane}");
                    let _ = writeln!(fragment, "free_flow_kmh = {}", fit.v_free_kmh);
                    let _ = writeln!(fragment, "critical_density_veh_km = {}", fit.k_crit_veh_km);
                    let _ = writeln!(fragment, "a_fd = {}", fit.exponent);
                    let _ = writeln!(fragment, "rms_kmh = {}", fit.rms_kmh);
                }
                Err(CalibrationError::InsufficientData { got, need }) => {
                    eprintln!("segment {segment} lane {lane}: skipped ({got} rows < {need})");
                }
                Err(e) => return Err(e.into()),
            }
        }
        if !any {
            return Err(CmdError::Runtime(
                "no (segment, lane) cell had enough rows to fit".into(),
            ));
        }
    }
    let path = out.unwrap_or_else(|| {
        PathBuf::from(if rain_target { "rain_fit.toml" } else { "fd_fit.toml" })
    });
    fs::write(&path, fragment)?;
    eprintln!("wrote config fragment to {}", path.display());
    Ok(())
}
