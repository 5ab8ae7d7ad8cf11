//! Progressive deceleration segment: the stretch of the exit lane ahead of
//! the gore where guidance ramps smoothly from the lane approach speed down
//! to the ramp safe speed at a constant design deceleration.
//!
//! Coordinates are distance-to-gore `s` (m): the profile reads
//! v(s) = sqrt(V_r² + 2·a_o·s), so v(0) = V_r and v(l_d) = V_j3 with
//! l_d = (V_j3² − V_r²)/(2·a_o). All internal arithmetic is SI.

use crate::safety::SafetyEnvelope;
use crate::units::{kmh_to_ms, ms_to_kmh};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PdsError {
    #[error("no deceleration needed: target {v_r_kmh} km/h above entry {v_j3_kmh} km/h")]
    NoDecelerationNeeded { v_j3_kmh: f64, v_r_kmh: f64 },
    #[error("design deceleration must be > 0, got {0}")]
    NonPositiveDeceleration(f64),
}

/// One cycle's deceleration profile, anchored at the gore.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdsProfile {
    /// Profile length, m.
    pub length_m: f64,
    /// Design deceleration, m/s².
    pub decel_ms2: f64,
    /// Speed at the gore (ramp safe speed), km/h.
    pub v_exit_kmh: f64,
    /// Entry speed at the upstream end, km/h.
    pub v_entry_kmh: f64,
}

/// Deceleration length from entry speed to exit speed at deceleration `a_o`.
pub fn pds_length(v_j3_kmh: f64, v_r_kmh: f64, a_o_ms2: f64) -> Result<f64, PdsError> {
    if a_o_ms2 <= 0.0 {
        return Err(PdsError::NonPositiveDeceleration(a_o_ms2));
    }
    if v_r_kmh > v_j3_kmh {
        return Err(PdsError::NoDecelerationNeeded {
            v_j3_kmh,
            v_r_kmh,
        });
    }
    let v1 = kmh_to_ms(v_j3_kmh);
    let v0 = kmh_to_ms(v_r_kmh);
    Ok((v1 * v1 - v0 * v0) / (2.0 * a_o_ms2))
}

/// Guidance speed at distance-to-gore `s`, km/h. Capped at the entry speed;
/// any `s` at or beyond the profile length returns exactly the entry speed.
pub fn pds_guidance_speed(s_m: f64, profile: &PdsProfile) -> f64 {
    if s_m >= profile.length_m {
        return profile.v_entry_kmh;
    }
    let v0 = kmh_to_ms(profile.v_exit_kmh);
    ms_to_kmh((v0 * v0 + 2.0 * profile.decel_ms2 * s_m.max(0.0)).sqrt())
        .min(profile.v_entry_kmh)
}

/// Builds the profile for entry speed `v_j3` against the envelope's ramp
/// speed. An entry at or below the ramp speed needs no deceleration and
/// yields the zero-length identity profile.
pub fn size_pds(env: &SafetyEnvelope, v_j3_kmh: f64, a_o_ms2: f64) -> PdsProfile {
    let v_r = env.v_ramp_kmh;
    if v_j3_kmh <= v_r {
        return PdsProfile {
            length_m: 0.0,
            decel_ms2: a_o_ms2,
            v_exit_kmh: v_j3_kmh,
            v_entry_kmh: v_j3_kmh,
        };
    }
    let length = pds_length(v_j3_kmh, v_r, a_o_ms2).expect("v_j3 > v_r and a_o > 0");
    PdsProfile {
        length_m: length,
        decel_ms2: a_o_ms2,
        v_exit_kmh: v_r,
        v_entry_kmh: v_j3_kmh,
    }
}
