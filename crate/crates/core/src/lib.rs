//! Control-oriented modelling toolkit for urban drainage networks.
//!
//! The crate combines four layers:
//!
//! - [`hydraulics`]: conceptual primitives (junction balance, tank dynamics
//!   with overflow, capacity splits) shared by every model.
//! - [`lm`]: the simplified discrete-time model of the Manzanares left-margin
//!   interceptor pilot, usable both as a prediction model and as the
//!   closed-loop plant.
//! - [`datafit`]: linear and damped Gauss-Newton least squares plus the
//!   RMSE/MAE/R² metrics used to calibrate the data-based equations.
//! - [`actuation`]: per-opening flow-setpoint conversion families for the
//!   tank actuators and the setpoint selection rule.
//!
//! On top of those, [`control`] implements the receding-horizon optimizer
//! and a rule-based baseline, and [`closedloop`] runs either controller
//! against the plant over a rain scenario, producing KPI and
//! conversion-accuracy reports. [`config`] ties the parameter tables
//! together into one JSON-loadable document.

pub mod actuation;
pub mod closedloop;
pub mod config;
pub mod control;
pub mod datafit;
pub mod hydraulics;
pub mod lm;
pub mod scenario;
