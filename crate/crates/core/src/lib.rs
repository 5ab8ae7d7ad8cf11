//! Closed-loop simulator and control library for lane-level variable speed
//! guidance on an expressway main line and off-ramp under rainfall.
//!
//! The crate is organised around one control cycle:
//!
//! 1. [`scenario`] loads and validates the road geometry, rainfall schedule,
//!    demand and model parameters.
//! 2. [`safety`] turns the current rainfall into a [`safety::SafetyEnvelope`]
//!    (water film, adhesion, visibility, safe main-line and ramp speeds,
//!    maximum safe deceleration).
//! 3. [`metanet`] predicts lane-level traffic evolution under a candidate
//!    guidance plan.
//! 4. [`pds`] sizes the progressive deceleration segment that brings exiting
//!    vehicles from the lane-3 approach speed down to the ramp safe speed.
//! 5. [`controller`] searches guidance plans under the safety envelope and
//!    the smoothness constraints, one plan per control cycle.
//! 6. [`microsim`] is the stochastic cellular-automaton plant that consumes
//!    the plans and produces the evaluation metrics.
//! 7. [`calibration`] fits the speed-density models from detector records.
//!
//! Macroscopic quantities are km/h, veh/km, veh/h; microsimulation and the
//! safety physics are SI (m, s, m/s²). All conversions go through [`units`].

pub mod calibration;
pub mod controller;
pub mod metanet;
pub mod microsim;
pub mod pds;
pub mod safety;
pub mod scenario;
pub mod units;
