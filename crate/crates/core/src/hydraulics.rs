//! Conceptual hydraulic primitives: junction mass balance, storage tank
//! dynamics with overflow, and capacity-limited flow splitting.
//!
//! These are the building blocks shared by every network model in this crate.
//! All flows are in m³/s, volumes in m³, time in seconds.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance used when *reporting* flows; state updates never round.
pub const FLOW_REPORT_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum HydraulicsError {
    #[error("flow must be finite and nonnegative, got {0}")]
    InvalidFlow(f64),
    #[error("sampling interval must be positive and finite, got {0}")]
    InvalidInterval(f64),
    #[error("tank parameter `{name}` must be strictly positive, got {value}")]
    InvalidTankParam { name: &'static str, value: f64 },
    #[error("tank volume {volume} outside [0, {v_max}]")]
    VolumeOutOfRange { volume: f64, v_max: f64 },
    #[error("tank inflow {inflow} exceeds inflow capacity {q_in_max}")]
    InflowAboveCapacity { inflow: f64, q_in_max: f64 },
    #[error("tank outflow {outflow} exceeds limit {limit} (min of outflow capacity and available water / dt)")]
    OutflowAboveLimit { outflow: f64, limit: f64 },
}

/// A validated nonnegative finite flow rate (m³/s).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Flow(f64);

impl TryFrom<f64> for Flow {
    type Error = HydraulicsError;

    fn try_from(value: f64) -> Result<Self, Self::Error> {
        Flow::new(value)
    }
}

impl From<Flow> for f64 {
    fn from(flow: Flow) -> f64 {
        flow.0
    }
}

impl Flow {
    pub const ZERO: Flow = Flow(0.0);

    pub fn new(value: f64) -> Result<Self, HydraulicsError> {
        if !value.is_finite() || value < 0.0 {
            return Err(HydraulicsError::InvalidFlow(value));
        }
        Ok(Flow(value))
    }

    /// Builds a flow by clamping negatives to zero. Non-finite input still fails.
    pub fn clamped(value: f64) -> Result<Self, HydraulicsError> {
        if !value.is_finite() {
            return Err(HydraulicsError::InvalidFlow(value));
        }
        Ok(Flow(value.max(0.0)))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Fixed sampling interval Δt (seconds).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct StepInterval(f64);

impl TryFrom<f64> for StepInterval {
    type Error = HydraulicsError;

    fn try_from(dt: f64) -> Result<Self, Self::Error> {
        StepInterval::from_secs(dt)
    }
}

impl From<StepInterval> for f64 {
    fn from(dt: StepInterval) -> f64 {
        dt.0
    }
}

impl StepInterval {
    pub fn from_secs(dt: f64) -> Result<Self, HydraulicsError> {
        if !dt.is_finite() || dt <= 0.0 {
            return Err(HydraulicsError::InvalidInterval(dt));
        }
        Ok(StepInterval(dt))
    }

    pub fn secs(self) -> f64 {
        self.0
    }
}

/// Storage tank limits: maximum volume and inflow/outflow capacities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TankParams {
    /// Maximum storage volume (m³); overflow spills beyond this.
    pub v_max: f64,
    /// Inflow capacity (m³/s).
    pub q_in_max: f64,
    /// Outflow capacity (m³/s).
    pub q_out_max: f64,
}

impl TankParams {
    pub fn new(v_max: f64, q_in_max: f64, q_out_max: f64) -> Result<Self, HydraulicsError> {
        for (name, value) in [
            ("v_max", v_max),
            ("q_in_max", q_in_max),
            ("q_out_max", q_out_max),
        ] {
            if !value.is_finite() || value <= 0.0 {
                return Err(HydraulicsError::InvalidTankParam { name, value });
            }
        }
        Ok(TankParams {
            v_max,
            q_in_max,
            q_out_max,
        })
    }

    pub fn validate(&self) -> Result<(), HydraulicsError> {
        Self::new(self.v_max, self.q_in_max, self.q_out_max).map(|_| ())
    }
}

/// Committed tank state; volume stays within [0, v_max] across steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TankState {
    pub volume: f64,
}

impl TankState {
    pub fn new(volume: f64, params: &TankParams) -> Result<Self, HydraulicsError> {
        if !volume.is_finite() || volume < 0.0 || volume > params.v_max {
            return Err(HydraulicsError::VolumeOutOfRange {
                volume,
                v_max: params.v_max,
            });
        }
        Ok(TankState { volume })
    }
}

/// Sums junction inflows into the single outflow.
pub fn junction_balance(inflows: &[Flow]) -> Flow {
    // Flow construction already rejects negatives and non-finite values,
    // so the sum of a validated slice is itself valid.
    Flow(inflows.iter().map(|f| f.0).sum())
}

/// Advances a storage tank one step and returns the committed state plus the
/// overflow spilled when the update would exceed the maximum volume.
///
/// Inflow must respect the inflow capacity and outflow must respect both the
/// outflow capacity and the water available this step (stored volume plus
/// what arrives); violations are hard errors at this layer (callers that
/// prefer clamping do it before calling).
pub fn tank_step(
    state: TankState,
    inflow: Flow,
    outflow: Flow,
    dt: StepInterval,
    params: &TankParams,
) -> Result<(TankState, Flow), HydraulicsError> {
    if inflow.value() > params.q_in_max {
        return Err(HydraulicsError::InflowAboveCapacity {
            inflow: inflow.value(),
            q_in_max: params.q_in_max,
        });
    }
    let out_limit = params
        .q_out_max
        .min(state.volume / dt.secs() + inflow.value());
    if outflow.value() > out_limit {
        return Err(HydraulicsError::OutflowAboveLimit {
            outflow: outflow.value(),
            limit: out_limit,
        });
    }

    let raw = state.volume + dt.secs() * (inflow.value() - outflow.value());
    let spill_rate = (raw - params.v_max).max(0.0) / dt.secs();
    let committed = raw.clamp(0.0, params.v_max);
    Ok((TankState { volume: committed }, Flow(spill_rate)))
}

/// Splits an arriving flow at a capacity-limited element into the flow passed
/// downstream and the overflow. The two parts always sum to the input exactly.
pub fn capacity_split(inflow: Flow, q_max: Flow) -> (Flow, Flow) {
    let passed = inflow.value().min(q_max.value());
    let spilled = inflow.value() - passed;
    // Recompute the passed flow from the spill: one of the two subtractions
    // is exact (Sterbenz), so the pair sums back to the input bit-for-bit.
    // The passed flow can land one rounding ulp above the capacity in deep
    // spill regimes, which is far below any physical tolerance used here.
    let passed = inflow.value() - spilled;
    (Flow(passed), Flow(spilled))
}
