//! Least-squares calibration of the speed-density models from detector
//! records.
//!
//! The fundamental diagram v = v_f·exp(−(1/a)(k/k_c)^a) is fitted per
//! (segment, lane) by multi-start log-linear initialization over the shape
//! exponent followed by damped Gauss-Newton on the speed residuals. The
//! rainy-weather surface v = A·exp(B·k + C·L_v) is log-linearized, which is
//! exact in the noise-free case.

use std::io::Read;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("cannot read detector data: {0}")]
    Io(#[from] std::io::Error),
    #[error("detector CSV: {0}")]
    Csv(String),
    #[error("row {row}: {reason}")]
    BadRow { row: usize, reason: String },
    #[error("insufficient data: need at least {need} rows, got {got}")]
    InsufficientData { need: usize, got: usize },
    #[error("degenerate data: {0}")]
    Degenerate(String),
}

/// One detector observation.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorRow {
    pub timestamp_s: f64,
    pub segment: u32,
    pub lane: u32,
    pub q_veh_h: f64,
    pub k_veh_km: f64,
    pub v_kmh: f64,
    pub visibility_m: Option<f64>,
}

/// Parsed dataset. Rows whose flow disagrees with k·v by more than 20% are
/// kept but flagged (sensor glitches); fits exclude them.
#[derive(Debug, Clone)]
pub struct DetectorDataset {
    pub rows: Vec<DetectorRow>,
    pub flagged: Vec<usize>,
}

impl DetectorDataset {
    pub fn from_rows(rows: Vec<DetectorRow>) -> Self {
        let flagged = rows
            .iter()
            .enumerate()
            .filter(|(_, r)| {
                let implied = r.k_veh_km * r.v_kmh;
                let scale = implied.abs().max(1.0);
                (r.q_veh_h - implied).abs() > 0.2 * scale
            })
            .map(|(i, _)| i)
            .collect();
        Self { rows, flagged }
    }

    /// Rows that pass the flow-consistency screen.
    pub fn clean_rows(&self) -> Vec<&DetectorRow> {
        self.rows
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.flagged.contains(i))
            .map(|(_, r)| r)
            .collect()
    }
}

/// Reads the detector CSV (`timestamp,segment,lane,q,k,v,visibility`;
/// visibility may be empty).
pub fn read_detector_csv(reader: impl Read) -> Result<DetectorDataset, CalibrationError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    {
        let headers = rdr.headers().map_err(|e| CalibrationError::Csv(e.to_string()))?;
        let expected = ["timestamp", "segment", "lane", "q", "k", "v", "visibility"];
        let got: Vec<&str> = headers.iter().collect();
        if got != expected {
            return Err(CalibrationError::Csv(format!(
                "expected header {expected:?}, got {got:?}"
            )));
        }
    }
    let mut rows = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| CalibrationError::Csv(e.to_string()))?;
        let field = |i: usize| -> Result<f64, CalibrationError> {
            record
                .get(i)
                .ok_or_else(|| CalibrationError::BadRow {
                    row: idx + 2,
                    reason: format!("missing column {i}"),
                })?
                .parse()
                .map_err(|e| CalibrationError::BadRow {
                    row: idx + 2,
                    reason: format!("{e}"),
                })
        };
        let visibility = match record.get(6) {
            None | Some("") => None,
            Some(s) => Some(s.parse().map_err(|e| CalibrationError::BadRow {
                row: idx + 2,
                reason: format!("{e}"),
            })?),
        };
        let row = DetectorRow {
            timestamp_s: field(0)?,
            segment: field(1)? as u32,
            lane: field(2)? as u32,
            q_veh_h: field(3)?,
            k_veh_km: field(4)?,
            v_kmh: field(5)?,
            visibility_m: visibility,
        };
        if row.q_veh_h < 0.0 || row.k_veh_km < 0.0 || row.v_kmh < 0.0 {
            return Err(CalibrationError::BadRow {
                row: idx + 2,
                reason: "negative value".into(),
            });
        }
        rows.push(row);
    }
    Ok(DetectorDataset::from_rows(rows))
}

pub fn read_detector_file(path: impl AsRef<Path>) -> Result<DetectorDataset, CalibrationError> {
    let file = std::fs::File::open(path)?;
    read_detector_csv(file)
}

/// Fitted fundamental diagram for one (segment, lane) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FdFit {
    pub v_free_kmh: f64,
    pub k_crit_veh_km: f64,
    pub exponent: f64,
    /// Root-mean-square speed residual, km/h.
    pub rms_kmh: f64,
}

const FD_MIN_ROWS: usize = 30;
const FD_MULTI_START: [f64; 4] = [1.2, 1.6, 2.0, 2.4];

fn fd_model(k: f64, v_f: f64, k_c: f64, a: f64) -> f64 {
    v_f * (-(k / k_c).powf(a) / a).exp()
}

fn rms(residuals: impl Iterator<Item = f64>) -> f64 {
    let mut n = 0usize;
    let mut ss = 0.0;
    for r in residuals {
        ss += r * r;
        n += 1;
    }
    (ss / n.max(1) as f64).sqrt()
}

/// Log-linear solve for (v_f, k_c) at a fixed exponent:
/// ln v = ln v_f − (1/a)·k_c^(−a)·k^a is linear in (ln v_f, k_c^(−a)).
fn fd_loglinear(rows: &[(f64, f64)], a: f64) -> Option<(f64, f64)> {
    let n = rows.len() as f64;
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for &(k, v) in rows {
        let x = k.powf(a);
        let y = v.ln();
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let det = n * sxx - sx * sx;
    if det.abs() < 1e-12 * n * sxx.max(1.0) {
        return None;
    }
    let slope = (n * sxy - sx * sy) / det;
    let intercept = (sy - slope * sx) / n;
    if slope >= 0.0 {
        return None; // speed must fall with density
    }
    let v_f = intercept.exp();
    let k_c = (-1.0 / (a * slope)).powf(1.0 / a);
    Some((v_f, k_c))
}

/// Solves a small symmetric linear system in place; `None` when singular.
fn solve_linear(mut m: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for c in col..n {
                m[row][c] -= f * m[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for c in row + 1..n {
            acc -= m[row][c] * x[c];
        }
        x[row] = acc / m[row][row];
    }
    Some(x)
}

/// Nonlinear least squares of the fundamental diagram on (k, v) pairs.
pub fn fit_fundamental_diagram(rows: &[(f64, f64)]) -> Result<FdFit, CalibrationError> {
    let usable: Vec<(f64, f64)> = rows
        .iter()
        .copied()
        .filter(|&(k, v)| k > 0.0 && v > 0.0)
        .collect();
    if usable.len() < FD_MIN_ROWS {
        return Err(CalibrationError::InsufficientData {
            need: FD_MIN_ROWS,
            got: usable.len(),
        });
    }
    let k_min = usable.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
    let k_max = usable.iter().map(|r| r.0).fold(0.0, f64::max);
    if k_max - k_min < 0.05 * k_max {
        return Err(CalibrationError::Degenerate(
            "densities span a narrow band; the diagram is unidentifiable".into(),
        ));
    }

    let sse = |v_f: f64, k_c: f64, a: f64| -> f64 {
        usable
            .iter()
            .map(|&(k, v)| {
                let r = v - fd_model(k, v_f, k_c, a);
                r * r
            })
            .sum()
    };

    // Multi-start over the shape exponent, log-linear solve at each start.
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for &a in &FD_MULTI_START {
        if let Some((v_f, k_c)) = fd_loglinear(&usable, a) {
            let s = sse(v_f, k_c, a);
            if best.is_none_or(|b| s < b.3) {
                best = Some((v_f, k_c, a, s));
            }
        }
    }
    let (mut v_f, mut k_c, mut a, mut s_best) = best.ok_or_else(|| {
        CalibrationError::Degenerate("no admissible log-linear initialization".into())
    })?;

    // Damped Gauss-Newton on (v_f, k_c, a).
    for _ in 0..60 {
        let mut jtj = vec![vec![0.0; 3]; 3];
        let mut jtr = vec![0.0; 3];
        for &(k, v) in &usable {
            let e = -(k / k_c).powf(a) / a;
            let m = v_f * e.exp();
            let r = v - m;
            let pow = (k / k_c).powf(a);
            let d_vf = m / v_f;
            let d_kc = m * pow / k_c;
            let d_a = m * (pow / (a * a) - (pow / a) * (k / k_c).ln());
            let grad = [d_vf, d_kc, d_a];
            for i in 0..3 {
                for j in 0..3 {
                    jtj[i][j] += grad[i] * grad[j];
                }
                jtr[i] += grad[i] * r;
            }
        }
        let Some(delta) = solve_linear(jtj, jtr) else { break };
        let mut step = 1.0;
        let mut accepted = false;
        while step > 1e-4 {
            let cand = (
                v_f + step * delta[0],
                k_c + step * delta[1],
                a + step * delta[2],
            );
            if cand.0 > 0.0 && cand.1 > 0.0 && cand.2 > 0.1 {
                let s = sse(cand.0, cand.1, cand.2);
                if s < s_best {
                    v_f = cand.0;
                    k_c = cand.1;
                    a = cand.2;
                    s_best = s;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    Ok(FdFit {
        v_free_kmh: v_f,
        k_crit_veh_km: k_c,
        exponent: a,
        rms_kmh: (s_best / usable.len() as f64).sqrt(),
    })
}

/// Fitted rainy-weather speed-density surface.
#[derive(Debug, Clone, PartialEq)]
pub struct RainFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Root-mean-square residual of ln v.
    pub rms_log: f64,
}

/// Log-linear least squares of v = A·exp(B·k + C·L_v) on rows carrying
/// visibility. Rows with non-positive speed are rejected by index.
pub fn fit_rain_speed_density(rows: &[DetectorRow]) -> Result<RainFit, CalibrationError> {
    let mut data = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let Some(l_v) = r.visibility_m else { continue };
        if r.v_kmh <= 0.0 {
            return Err(CalibrationError::BadRow {
                row: i,
                reason: "non-positive speed cannot be log-linearized".into(),
            });
        }
        data.push((r.k_veh_km, l_v, r.v_kmh.ln()));
    }
    if data.len() < 3 {
        return Err(CalibrationError::InsufficientData {
            need: 3,
            got: data.len(),
        });
    }
    let spread = |f: &dyn Fn(&(f64, f64, f64)) -> f64| -> f64 {
        let lo = data.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = data.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    };
    if spread(&|r| r.0) < 1e-9 || spread(&|r| r.1) < 1e-9 {
        return Err(CalibrationError::Degenerate(
            "density and visibility must each span a nondegenerate range".into(),
        ));
    }

    // Normal equations for y = ln A + B·k + C·L_v.
    let mut m = vec![vec![0.0; 3]; 3];
    let mut b = vec![0.0; 3];
    for &(k, l, y) in &data {
        let x = [1.0, k, l];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += x[i] * x[j];
            }
            b[i] += x[i] * y;
        }
    }
    let coef = solve_linear(m, b)
        .ok_or_else(|| CalibrationError::Degenerate("rank-deficient design".into()))?;
    let rms_log = rms(
        data.iter()
            .map(|&(k, l, y)| y - (coef[0] + coef[1] * k + coef[2] * l)),
    );
    Ok(RainFit {
        a: coef[0].exp(),
        b: coef[1],
        c: coef[2],
        rms_log,
    })
}
