//! Discrete-time simplified model of the Manzanares left-margin (LM)
//! interceptor pilot: the Abroñigales storage tank and its bypass, the
//! La Gavia WWTP area with its data-fitted diversion and pump loop, and the
//! capacity-limited Sur WWTP at the downstream end.
//!
//! The same step function serves two roles: as the internal prediction model
//! of the optimizer (actuator flows applied directly as inputs) and as the
//! closed-loop plant (actuator flows produced from setpoints by the
//! `actuation` module). Controls are therefore clamped to their feasible box
//! rather than rejected, with every adjustment recorded in the step
//! diagnostics so that mass accounting can be reconciled exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hydraulics::{
    capacity_split, tank_step, Flow, HydraulicsError, StepInterval, TankParams, TankState,
};

#[derive(Debug, Error)]
pub enum LmError {
    #[error("non-finite value while evaluating `{equation}`")]
    NonFinite { equation: &'static str },
    #[error("inputs and controls series differ in length: {inputs} vs {controls}")]
    SeriesLengthMismatch { inputs: usize, controls: usize },
    #[error("series must contain at least one step")]
    EmptySeries,
    #[error("volume {volume} outside [0, {v_max}]")]
    VolumeOutOfRange { volume: f64, v_max: f64 },
    #[error(transparent)]
    Hydraulics(#[from] HydraulicsError),
}

/// Quadratic `a·x² + b·x + c`, clamped at zero from below on evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticCoeffs {
    pub quad: f64,
    pub lin: f64,
    pub constant: f64,
}

impl QuadraticCoeffs {
    pub fn eval_clamped(&self, x: f64) -> f64 {
        (self.quad * x * x + self.lin * x + self.constant).max(0.0)
    }
}

/// Two-input quadratic used for the N12 node outputs:
/// `a1·q1216² + a2·qmi² + b1·q1216 + b2·qmi`, clamped at zero from below.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeQuadCoeffs {
    pub q1216_sq: f64,
    pub qmi_sq: f64,
    pub q1216_lin: f64,
    pub qmi_lin: f64,
}

impl NodeQuadCoeffs {
    fn eval_raw(&self, q1216: f64, qmi: f64) -> f64 {
        self.q1216_sq * q1216 * q1216
            + self.qmi_sq * qmi * qmi
            + self.q1216_lin * q1216
            + self.qmi_lin * qmi
    }
}

/// Linear map from the four N12-related flows to the virtual node level L7.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelCoeffs {
    pub qmi2: f64,
    pub qcso5: f64,
    pub q1216: f64,
    pub qmi: f64,
    pub bias: f64,
}

impl LevelCoeffs {
    fn eval(&self, qmi2: f64, qcso5: f64, q1216: f64, qmi: f64) -> f64 {
        self.qmi2 * qmi2 + self.qcso5 * qcso5 + self.q1216 * q1216 + self.qmi * qmi + self.bias
    }
}

/// Pump level-to-flow curve `amplitude / (denom + exp(slope·L + intercept)) + floor`.
///
/// The exponential saturates cleanly at both ends: the curve tends to `floor`
/// for low levels and to `amplitude/denom + floor` for high levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PumpCurve {
    pub amplitude: f64,
    pub denom: f64,
    pub slope: f64,
    pub intercept: f64,
    pub floor: f64,
}

impl PumpCurve {
    pub fn eval(&self, level: f64) -> f64 {
        self.amplitude / (self.denom + (self.slope * level + self.intercept).exp()) + self.floor
    }
}

/// Full parameter set of the LM pilot model. `Default` carries the calibrated
/// coefficients and the published network capacities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmParams {
    /// Abroñigales tank limits (maximum volume 2·10⁵ m³).
    pub tank: TankParams,
    /// La Gavia WWTP intake capacity (m³/s).
    pub la_gavia_cap: f64,
    /// La Gavia biological treatment capacity (m³/s).
    pub la_gavia_biol_cap: f64,
    /// Sur WWTP intake capacity (m³/s).
    pub sur_cap: f64,
    /// Tank depth at maximum volume (m); the level conversion assumes a
    /// constant cross-section of area `tank.v_max / tank_depth_max`.
    pub tank_depth_max: f64,
    /// Passive diversion at the Q_in6 inlet: quadratic giving Q_1216 from Q_in6.
    pub q1216: QuadraticCoeffs,
    /// N12 downstream flow Q_mi2 from (Q_1216, Q_mi).
    pub qmi2: NodeQuadCoeffs,
    /// N12 spill flow Q_CSO5.1 from (Q_1216, Q_mi).
    pub qcso5_1: NodeQuadCoeffs,
    /// Virtual level L7 at N12 from the surrounding flows.
    pub level: LevelCoeffs,
    /// Pump P7 curve converting L7 into the flow lifted toward La Gavia.
    pub pump: PumpCurve,
}

impl Default for LmParams {
    fn default() -> Self {
        LmParams {
            tank: TankParams {
                v_max: 2e5,
                q_in_max: 50.0,
                q_out_max: 5.0,
            },
            la_gavia_cap: 1.5,
            la_gavia_biol_cap: 1.25,
            sur_cap: 6.0,
            tank_depth_max: 10.0,
            q1216: QuadraticCoeffs {
                quad: 0.003,
                lin: 0.921,
                constant: -0.538,
            },
            qmi2: NodeQuadCoeffs {
                q1216_sq: -0.003,
                qmi_sq: -0.041,
                q1216_lin: 0.167,
                qmi_lin: 0.874,
            },
            qcso5_1: NodeQuadCoeffs {
                q1216_sq: 0.006,
                qmi_sq: 0.042,
                q1216_lin: 0.707,
                qmi_lin: 0.155,
            },
            level: LevelCoeffs {
                qmi2: -0.254,
                qcso5: -0.6,
                q1216: 0.583,
                qmi: 0.77,
                bias: 0.868,
            },
            pump: PumpCurve {
                amplitude: 0.455,
                denom: 0.883,
                slope: -65.998,
                intercept: 77.339,
                floor: 0.132,
            },
        }
    }
}

impl LmParams {
    /// Quiescent fixed point of the level map (its bias term): the default
    /// initial value for the delayed level state.
    pub fn quiescent_level(&self) -> f64 {
        self.level.bias
    }

    /// Constant tank cross-section area (m²).
    pub fn tank_area(&self) -> f64 {
        self.tank.v_max / self.tank_depth_max
    }

    pub fn validate(&self) -> Result<(), LmError> {
        self.tank.validate()?;
        for (name, v) in [
            ("la_gavia_cap", self.la_gavia_cap),
            ("la_gavia_biol_cap", self.la_gavia_biol_cap),
            ("sur_cap", self.sur_cap),
            ("tank_depth_max", self.tank_depth_max),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(HydraulicsError::InvalidTankParam { name, value: v }.into());
            }
        }
        Ok(())
    }
}

/// Model state carried between steps.
///
/// `l7_prev` is the previous-step virtual level: the pump loop
/// (level → pump flow → La Gavia → spill → level) is algebraic within one
/// step, so it is broken with a unit delay on the level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmState {
    /// Abroñigales tank volume (m³).
    pub v_abro: f64,
    /// Virtual level L7 from the previous step.
    pub l7_prev: f64,
    /// Actuator flows applied at the previous step `(bypass, emptying)`.
    pub u_prev: (f64, f64),
}

impl Default for LmState {
    fn default() -> Self {
        LmState {
            v_abro: 0.0,
            l7_prev: LmParams::default().quiescent_level(),
            u_prev: (0.0, 0.0),
        }
    }
}

impl LmState {
    pub fn validate(&self, params: &LmParams) -> Result<(), LmError> {
        if !self.v_abro.is_finite() || self.v_abro < 0.0 || self.v_abro > params.tank.v_max {
            return Err(LmError::VolumeOutOfRange {
                volume: self.v_abro,
                v_max: params.tank.v_max,
            });
        }
        if !self.l7_prev.is_finite() {
            return Err(LmError::NonFinite { equation: "l7" });
        }
        Ok(())
    }
}

/// Exogenous inlet flows for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmInputs {
    pub q_in4: Flow,
    pub q_in5: Flow,
    pub q_in6: Flow,
    /// Boundary inflow from the right margin joining upstream of Sur.
    pub q_md_mi: Flow,
}

impl LmInputs {
    pub const ZERO: LmInputs = LmInputs {
        q_in4: Flow::ZERO,
        q_in5: Flow::ZERO,
        q_in6: Flow::ZERO,
        q_md_mi: Flow::ZERO,
    };

    pub fn new(q_in4: f64, q_in5: f64, q_in6: f64, q_md_mi: f64) -> Result<Self, HydraulicsError> {
        Ok(LmInputs {
            q_in4: Flow::new(q_in4)?,
            q_in5: Flow::new(q_in5)?,
            q_in6: Flow::new(q_in6)?,
            q_md_mi: Flow::new(q_md_mi)?,
        })
    }
}

/// Requested actuator flows: tank bypass `g_out_a` (what does *not* enter the
/// tank from the Q_in5 inlet) and tank emptying `g_empt_a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmControls {
    pub g_out_a: Flow,
    pub g_empt_a: Flow,
}

impl LmControls {
    pub const ZERO: LmControls = LmControls {
        g_out_a: Flow::ZERO,
        g_empt_a: Flow::ZERO,
    };

    pub fn new(g_out_a: f64, g_empt_a: f64) -> Result<Self, HydraulicsError> {
        Ok(LmControls {
            g_out_a: Flow::new(g_out_a)?,
            g_empt_a: Flow::new(g_empt_a)?,
        })
    }
}

/// Per-step record of every clamp applied inside the step, in flow units
/// (m³/s), plus the mass-balance residuals of the data-fitted node equations.
/// These let the closed-loop mass accounting reconcile exactly even though
/// the fitted polynomials do not conserve mass by construction.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// Adjustment applied to the requested bypass flow (signed, effective − requested).
    pub bypass_adjust: f64,
    /// Adjustment applied to the requested emptying flow (signed).
    pub empty_adjust: f64,
    /// Flow created at the Q_in6 diversion when the fitted Q_1216 exceeds
    /// Q_in6 (the diverted remainder is clamped at zero).
    pub diversion_created: f64,
    /// Flow arriving at the La Gavia intake above its capacity; not routed
    /// anywhere by the model, so it leaves the balance here.
    pub la_gavia_excess: f64,
    /// Magnitude of the clamp applied to the La Gavia outfall when the
    /// secondary-minus-biological difference goes negative.
    pub la_gavia_outfall_clamp: f64,
    /// Magnitude of the zero clamps applied to the fitted N12 outputs.
    pub qmi2_clamp: f64,
    pub qcso5_1_clamp: f64,
    /// Net mass residual of the N12 node equations after clamping:
    /// `(q_mi + q_1216) − (q_mi2 + q_cso5_1 + p7)`. Positive means the fitted
    /// node destroys flow, negative means it creates flow.
    pub n12_residual: f64,
}

impl StepDiagnostics {
    /// Net flow removed from the balance this step (m³/s). Multiplying by dt
    /// and summing over a run closes the mass balance exactly.
    pub fn net_loss(&self) -> f64 {
        self.la_gavia_excess + self.n12_residual - self.diversion_created
    }
}

/// Every flow of the LM model for one step, after clamping, plus the
/// effective (committed) actuator flows and the step diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmOutputs {
    /// Interceptor flow leaving node N11 (inlet 4 + tank emptying + bypass).
    pub q_mi: f64,
    /// Flow entering the Abroñigales tank.
    pub g_in_a: f64,
    /// Tank overflow spill.
    pub q_cso4: f64,
    /// Passive diversion at the Q_in6 inlet continuing downstream.
    pub q_1216: f64,
    /// Flow entering the La Gavia WWTP (capacity-limited).
    pub q_la_gavia: f64,
    /// La Gavia biological treatment flow.
    pub q_biol: f64,
    /// La Gavia secondary treatment flow.
    pub q_sec: f64,
    /// La Gavia outfall joining the CSO5 spill point.
    pub q_out_la_gavia: f64,
    /// Interceptor flow continuing downstream of N12.
    pub q_mi2: f64,
    /// Spill generated at N12.
    pub q_cso5_1: f64,
    /// Total CSO5 spill (N12 spill + La Gavia outfall).
    pub q_cso5: f64,
    /// Virtual water level at N12 (regressor for the pump curve).
    pub l7: f64,
    /// Pump P7 flow lifted toward La Gavia (from the previous-step level).
    pub p7: f64,
    /// Flow arriving at Sur (LM downstream + right-margin boundary inflow).
    pub q_mi3: f64,
    /// Flow entering the Sur WWTP (capacity-limited).
    pub q_wwtp_sur: f64,
    /// Overflow at the Sur WWTP.
    pub q_cso_sur: f64,
    /// Effective bypass flow after clamping.
    pub g_out_a_eff: f64,
    /// Effective emptying flow after clamping.
    pub g_empt_a_eff: f64,
    pub diagnostics: StepDiagnostics,
}

impl LmOutputs {
    /// Water treated at La Gavia (what enters the plant and does not leave
    /// through its outfall).
    pub fn la_gavia_treated(&self) -> f64 {
        self.q_la_gavia - self.q_out_la_gavia
    }
}

fn ensure_finite(value: f64, equation: &'static str) -> Result<f64, LmError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(LmError::NonFinite { equation })
    }
}

/// Advances the LM model one step.
///
/// Evaluation order follows the flow of water down the margin, with the pump
/// level taken from the previous step: pump flow, Q_in6 diversion, La Gavia
/// area, tank bypass balance, N11 junction, N12 fitted outputs, level update,
/// tank update, Sur split. Controls are clamped to their feasible box; the
/// adjustments and all node residuals are recorded in the diagnostics.
pub fn lm_step(
    state: &LmState,
    inputs: &LmInputs,
    controls: &LmControls,
    dt: StepInterval,
    params: &LmParams,
) -> Result<(LmState, LmOutputs), LmError> {
    state.validate(params)?;
    let mut diag = StepDiagnostics::default();

    // Pump flow from the delayed level.
    let p7 = ensure_finite(params.pump.eval(state.l7_prev), "p7 pump curve")?;

    // Passive diversion at the Q_in6 inlet.
    let q_in6 = inputs.q_in6.value();
    let q_1216 = ensure_finite(params.q1216.eval_clamped(q_in6), "q_1216 diversion")?;
    let to_gavia_raw = q_in6 - q_1216;
    let to_gavia = to_gavia_raw.max(0.0);
    diag.diversion_created = (-to_gavia_raw).max(0.0);

    // La Gavia intake, treatment split and outfall.
    let gavia_arriving = p7 + to_gavia;
    let q_la_gavia = gavia_arriving.min(params.la_gavia_cap);
    diag.la_gavia_excess = gavia_arriving - q_la_gavia;
    let q_biol = q_la_gavia.min(params.la_gavia_biol_cap);
    let q_sec = q_la_gavia - q_biol;
    let outfall_raw = q_sec - q_biol;
    let q_out_la_gavia = outfall_raw.max(0.0);
    diag.la_gavia_outfall_clamp = (-outfall_raw).max(0.0);

    // Feasible box for the controls: the bypass cannot exceed what arrives at
    // the diversion, must leave the tank inflow within its capacity, and the
    // emptying flow is limited by capacity and by the stored volume.
    let q_in5 = inputs.q_in5.value();
    let bypass_lo = (q_in5 - params.tank.q_in_max).max(0.0);
    let g_out_a = controls.g_out_a.value().clamp(bypass_lo, q_in5);
    let empty_hi = params.tank.q_out_max.min(state.v_abro / dt.secs());
    let g_empt_a = controls.g_empt_a.value().clamp(0.0, empty_hi);
    diag.empty_adjust = g_empt_a - controls.g_empt_a.value();

    // Recompute the bypass from the tank share so the diversion partitions
    // the arriving flow bit-for-bit (one of the two subtractions is exact).
    let g_in_a = q_in5 - g_out_a;
    let g_out_a = q_in5 - g_in_a;
    diag.bypass_adjust = g_out_a - controls.g_out_a.value();

    // N11 junction.
    let q_mi = inputs.q_in4.value() + g_empt_a + g_out_a;

    // Fitted N12 outputs.
    let qmi2_raw = params.qmi2.eval_raw(q_1216, q_mi);
    let q_mi2 = ensure_finite(qmi2_raw.max(0.0), "q_mi2 node fit")?;
    diag.qmi2_clamp = (-qmi2_raw).max(0.0);
    let qcso5_1_raw = params.qcso5_1.eval_raw(q_1216, q_mi);
    let q_cso5_1 = ensure_finite(qcso5_1_raw.max(0.0), "q_cso5_1 node fit")?;
    diag.qcso5_1_clamp = (-qcso5_1_raw).max(0.0);

    let q_cso5 = q_cso5_1 + q_out_la_gavia;

    // Level update feeding the next step's pump flow.
    let l7 = ensure_finite(
        params.level.eval(q_mi2, q_cso5, q_1216, q_mi),
        "l7 level fit",
    )?;

    diag.n12_residual = (q_mi + q_1216) - (q_mi2 + q_cso5_1 + p7);

    // Tank update; the clamps above guarantee the preconditions.
    let tank_state = TankState {
        volume: state.v_abro,
    };
    let (tank_next, q_cso4) = tank_step(
        tank_state,
        Flow::new(g_in_a).map_err(LmError::Hydraulics)?,
        Flow::new(g_empt_a).map_err(LmError::Hydraulics)?,
        dt,
        &params.tank,
    )?;

    // Sur WWTP split.
    let q_mi3 = q_mi2 + inputs.q_md_mi.value();
    let (q_wwtp_sur, q_cso_sur) = capacity_split(
        Flow::new(q_mi3).map_err(LmError::Hydraulics)?,
        Flow::new(params.sur_cap).map_err(LmError::Hydraulics)?,
    );

    let outputs = LmOutputs {
        q_mi,
        g_in_a,
        q_cso4: q_cso4.value(),
        q_1216,
        q_la_gavia,
        q_biol,
        q_sec,
        q_out_la_gavia,
        q_mi2,
        q_cso5_1,
        q_cso5,
        l7,
        p7,
        q_mi3,
        q_wwtp_sur: q_wwtp_sur.value(),
        q_cso_sur: q_cso_sur.value(),
        g_out_a_eff: g_out_a,
        g_empt_a_eff: g_empt_a,
        diagnostics: diag,
    };

    let next = LmState {
        v_abro: tank_next.volume,
        l7_prev: l7,
        u_prev: (g_out_a, g_empt_a),
    };
    Ok((next, outputs))
}

/// Runs `lm_step` over aligned input and control series.
pub fn lm_simulate(
    initial: &LmState,
    inputs: &[LmInputs],
    controls: &[LmControls],
    dt: StepInterval,
    params: &LmParams,
) -> Result<(LmState, Vec<LmOutputs>), LmError> {
    if inputs.len() != controls.len() {
        return Err(LmError::SeriesLengthMismatch {
            inputs: inputs.len(),
            controls: controls.len(),
        });
    }
    if inputs.is_empty() {
        return Err(LmError::EmptySeries);
    }
    let mut state = *initial;
    let mut outputs = Vec::with_capacity(inputs.len());
    for (input, control) in inputs.iter().zip(controls) {
        let (next, out) = lm_step(&state, input, control, dt, params)?;
        outputs.push(out);
        state = next;
    }
    Ok((state, outputs))
}

/// Tank water level for a stored volume, assuming a constant cross-section.
pub fn level_from_volume(volume: f64, params: &LmParams) -> f64 {
    volume / params.tank_area()
}
