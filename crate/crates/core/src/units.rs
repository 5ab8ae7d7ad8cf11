//! Unit conventions and the boundary conversions between them.
//!
//! Macroscopic state (densities, flows, speeds in the prediction model and
//! the controller) lives in km, h, km/h, veh/km, veh/h. The microsimulation
//! and the safety physics live in SI (m, s, m/s²). Every conversion in the
//! crate goes through the functions here.

/// km/h per m/s.
pub const KMH_PER_MS: f64 = 3.6;

/// Standard gravity as used by the braking-distance relation (9.8, not 9.81).
pub const GRAVITY_MS2: f64 = 9.8;

#[inline]
pub fn kmh_to_ms(v_kmh: f64) -> f64 {
    v_kmh / KMH_PER_MS
}

#[inline]
pub fn ms_to_kmh(v_ms: f64) -> f64 {
    v_ms * KMH_PER_MS
}

#[inline]
pub fn m_to_km(x_m: f64) -> f64 {
    x_m / 1000.0
}

#[inline]
pub fn s_to_h(t_s: f64) -> f64 {
    t_s / 3600.0
}

/// mm/h to mm/min (the water-film relation is calibrated per minute).
#[inline]
pub fn mm_h_to_mm_min(d_mm_h: f64) -> f64 {
    d_mm_h / 60.0
}
