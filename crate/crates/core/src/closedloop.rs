//! Plant-in-the-loop simulation: a controller (receding-horizon, rule-based
//! or fixed openings) commands actuator setpoints, the plant realizes them
//! through the flow-setpoint conversion families and advances the pilot
//! model, and the run is summarized as cumulative spill/treatment volumes
//! plus conversion-accuracy diagnostics.
//!
//! The plant here is the pilot model itself with the conversion functions as
//! actuator truth, optionally perturbed multiplicatively to emulate
//! plant-model mismatch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuation::ActuationError;
use crate::config::AppConfig;
use crate::control::{
    rbc_step, ControlError, MpcController, RbcObservation, SetpointPair, SolveInfo,
};
use crate::datafit::{metrics, FitError};
use crate::hydraulics::HydraulicsError;
use crate::lm::{level_from_volume, lm_step, LmControls, LmError, LmInputs, LmOutputs};
use crate::scenario::Scenario;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Model(#[from] LmError),
    #[error(transparent)]
    Actuation(#[from] ActuationError),
    #[error(transparent)]
    Hydraulics(#[from] HydraulicsError),
    #[error("fixed controller openings must lie in [0, 100], got {0}")]
    BadFixedOpening(f64),
    #[error(transparent)]
    Metrics(#[from] FitError),
}

/// Which controller drives the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Mpc,
    Rbc,
    /// Constant openings, mostly a reference case.
    Fixed {
        fill_pct: f64,
        empty_pct: f64,
    },
}

impl ControllerKind {
    pub fn label(&self) -> &'static str {
        match self {
            ControllerKind::Mpc => "mpc",
            ControllerKind::Rbc => "rbc",
            ControllerKind::Fixed { .. } => "fixed",
        }
    }
}

/// Everything logged for one plant step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub time_s: f64,
    pub inputs: LmInputs,
    /// Openings applied this step (percent).
    pub fill_pct: f64,
    pub empty_pct: f64,
    /// Tank level the conversion saw at application time (m).
    pub d_abro: f64,
    pub outputs: LmOutputs,
    /// Committed tank volume after the step (m³).
    pub v_abro: f64,
}

/// Cumulative event volumes in 10³ m³.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KpiReport {
    pub q_cso4: f64,
    pub q_cso5: f64,
    pub q_cso_sur: f64,
    pub q_wwtp_sur: f64,
    pub q_la_gavia: f64,
}

impl KpiReport {
    /// Integrates the logged trajectory: each KPI is `Σ dt·flow / 1000`.
    pub fn from_records(records: &[StepRecord], dt_s: f64) -> KpiReport {
        let mut sums = [0.0f64; 5];
        for r in records {
            sums[0] += dt_s * r.outputs.q_cso4;
            sums[1] += dt_s * r.outputs.q_cso5;
            sums[2] += dt_s * r.outputs.q_cso_sur;
            sums[3] += dt_s * r.outputs.q_wwtp_sur;
            sums[4] += dt_s * r.outputs.q_la_gavia;
        }
        KpiReport {
            q_cso4: sums[0] / 1000.0,
            q_cso5: sums[1] / 1000.0,
            q_cso_sur: sums[2] / 1000.0,
            q_wwtp_sur: sums[3] / 1000.0,
            q_la_gavia: sums[4] / 1000.0,
        }
    }

    /// Total spill volume across the margin (10³ m³).
    pub fn total_cso(&self) -> f64 {
        self.q_cso4 + self.q_cso5 + self.q_cso_sur
    }
}

/// Predicted-vs-realized actuator flows across a run, one pair per step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConversionDiagnostics {
    pub fill_predicted: Vec<f64>,
    pub fill_realized: Vec<f64>,
    pub empty_predicted: Vec<f64>,
    pub empty_realized: Vec<f64>,
    pub fill_r2: Option<f64>,
    pub empty_r2: Option<f64>,
}

impl ConversionDiagnostics {
    fn finalize(&mut self) -> Result<(), FitError> {
        if !self.fill_predicted.is_empty() {
            self.fill_r2 = metrics(&self.fill_realized, &self.fill_predicted)?.r2;
            self.empty_r2 = metrics(&self.empty_realized, &self.empty_predicted)?.r2;
        }
        Ok(())
    }
}

/// Optimizer telemetry for one control step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveRecord {
    pub step: usize,
    pub cost_total: f64,
    pub info: SolveInfo,
}

/// Complete result of one closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub controller: ControllerKind,
    pub scenario_name: String,
    pub dt_s: f64,
    pub initial_volume: f64,
    pub records: Vec<StepRecord>,
    pub kpi: KpiReport,
    pub conversion: Option<ConversionDiagnostics>,
    pub solves: Vec<SolveRecord>,
}

/// Volume accounting over a full run (m³). The clamp corrections are the
/// integrated residuals of the data-fitted node equations, logged step by
/// step inside the model, so the balance closes exactly up to float
/// rounding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MassClosure {
    pub inflow: f64,
    pub delta_storage: f64,
    pub wwtp: f64,
    pub cso: f64,
    pub clamp_corrections: f64,
    pub residual: f64,
    pub relative_residual: f64,
}

impl RunOutcome {
    pub fn mass_closure(&self) -> MassClosure {
        let dt = self.dt_s;
        let mut inflow = 0.0;
        let mut wwtp = 0.0;
        let mut cso = 0.0;
        let mut corrections = 0.0;
        for r in &self.records {
            inflow += dt
                * (r.inputs.q_in4.value()
                    + r.inputs.q_in5.value()
                    + r.inputs.q_in6.value()
                    + r.inputs.q_md_mi.value());
            wwtp += dt * (r.outputs.q_wwtp_sur + r.outputs.la_gavia_treated());
            cso += dt * (r.outputs.q_cso4 + r.outputs.q_cso5 + r.outputs.q_cso_sur);
            corrections += dt * r.outputs.diagnostics.net_loss();
        }
        let final_volume = self.records.last().map(|r| r.v_abro).unwrap_or(0.0);
        let delta_storage = final_volume - self.initial_volume;
        let residual = inflow - delta_storage - wwtp - cso - corrections;
        MassClosure {
            inflow,
            delta_storage,
            wwtp,
            cso,
            clamp_corrections: corrections,
            residual,
            relative_residual: residual / inflow.abs().max(1.0),
        }
    }
}

/// Runs one controller against the plant over a scenario.
///
/// The loop per step: the controller picks the openings to apply (the
/// receding-horizon controller converted them from the flows it optimized
/// at the previous step, targeting this one), the conversion families
/// realize the openings under the actual plant conditions, the model
/// advances, and everything is logged. Deterministic end to end.
pub fn run_closed_loop(
    scenario: &Scenario,
    kind: ControllerKind,
    config: &AppConfig,
) -> Result<RunOutcome, RunError> {
    config.validate()?;
    if let ControllerKind::Fixed {
        fill_pct,
        empty_pct,
    } = kind
    {
        for pct in [fill_pct, empty_pct] {
            if !(0.0..=100.0).contains(&pct) {
                return Err(RunError::BadFixedOpening(pct));
            }
        }
    }

    let params = &config.model;
    let dt = scenario.dt;
    let dt_s = dt.secs();
    // The controller runs at the plant's sampling interval.
    let ocp = crate::control::OcpConfig { dt_s, ..config.ocp };
    let mut mpc = match kind {
        ControllerKind::Mpc => Some(MpcController::new(ocp)?),
        _ => None,
    };

    let amp = config.plant.perturbation_amplitude;
    let mut perturb_rng = ChaCha8Rng::seed_from_u64(config.plant.perturbation_seed);

    let mut state = config.initial;
    let mut records: Vec<StepRecord> = Vec::with_capacity(scenario.len());
    let mut conversion = ConversionDiagnostics::default();
    let mut solves = Vec::new();
    let mut pending: Option<SetpointPair> = None;

    for (j, inputs) in scenario.steps.iter().enumerate() {
        let (fill_pct, empty_pct, predicted) = match kind {
            ControllerKind::Fixed {
                fill_pct,
                empty_pct,
            } => (fill_pct, empty_pct, None),
            ControllerKind::Rbc => {
                let observation = RbcObservation {
                    previous: records.last().map(|r| &r.outputs),
                    state: &state,
                };
                let (f, e) = rbc_step(
                    &observation,
                    &config.rbc,
                    params,
                    &config.fill_table,
                    &config.empty_table,
                    &config.grid,
                );
                (f, e, None)
            }
            ControllerKind::Mpc => {
                let controller = mpc.as_mut().expect("mpc controller exists");
                let window: Vec<LmInputs> = match controller.config.forecast {
                    crate::control::ForecastMode::Perfect => scenario.steps[j..].to_vec(),
                    crate::control::ForecastMode::Persistence => vec![*inputs],
                };
                let decision = controller.decide(
                    &state,
                    &window,
                    params,
                    &config.fill_table,
                    &config.empty_table,
                    &config.grid,
                )?;
                solves.push(SolveRecord {
                    step: j,
                    cost_total: decision.cost.total,
                    info: decision.info.clone(),
                });
                // The setpoint for this step was committed at the previous
                // one; the fresh solve provides the next step's setpoint.
                let apply = pending.take().unwrap_or(decision.now);
                pending = Some(decision.next);
                (
                    apply.fill.opening_pct,
                    apply.empty.opening_pct,
                    Some(apply.target),
                )
            }
        };

        // Plant truth: the conversion families evaluated under the actual
        // conditions at application time.
        let q_in5 = inputs.q_in5.value();
        let q_in4 = inputs.q_in4.value();
        let d_abro = level_from_volume(state.v_abro, params);
        let mut g_out = config
            .fill_table
            .flow_at_opening(fill_pct, q_in5, &config.grid)?;
        let mut g_empt =
            config
                .empty_table
                .flow_at_opening(empty_pct, d_abro, g_out, q_in4, &config.grid)?;
        if amp > 0.0 {
            let u1: f64 = perturb_rng.random_range(-1.0..1.0);
            let u2: f64 = perturb_rng.random_range(-1.0..1.0);
            g_out = (g_out * (1.0 + amp * u1)).clamp(0.0, q_in5);
            g_empt = (g_empt * (1.0 + amp * u2)).max(0.0);
        }

        let controls = LmControls::new(g_out, g_empt).map_err(RunError::Hydraulics)?;
        let (next, outputs) = lm_step(&state, inputs, &controls, dt, params)?;

        if let Some((target_fill, target_empty)) = predicted {
            conversion.fill_predicted.push(target_fill);
            conversion.fill_realized.push(outputs.g_out_a_eff);
            conversion.empty_predicted.push(target_empty);
            conversion.empty_realized.push(outputs.g_empt_a_eff);
        }

        records.push(StepRecord {
            time_s: j as f64 * dt_s,
            inputs: *inputs,
            fill_pct,
            empty_pct,
            d_abro,
            outputs,
            v_abro: next.v_abro,
        });
        state = next;
    }

    conversion.finalize()?;
    let kpi = KpiReport::from_records(&records, dt_s);
    Ok(RunOutcome {
        controller: kind,
        scenario_name: scenario.name.clone(),
        dt_s,
        initial_volume: config.initial.v_abro,
        records,
        kpi,
        conversion: matches!(kind, ControllerKind::Mpc).then_some(conversion),
        solves,
    })
}

/// One row of the controller comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpiRow {
    pub label: &'static str,
    pub rbc: f64,
    pub mpc: f64,
    /// Relative change of the receding-horizon controller against the
    /// baseline; `None` when the baseline volume is zero and the other is
    /// not.
    pub delta_pct: Option<f64>,
}

pub fn relative_delta_pct(rbc: f64, mpc: f64) -> Option<f64> {
    if rbc == 0.0 {
        if mpc == 0.0 {
            Some(0.0)
        } else {
            None
        }
    } else {
        Some((mpc - rbc) / rbc * 100.0)
    }
}

/// Side-by-side benchmark of the two controllers on one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub scenario_name: String,
    pub rbc: RunOutcome,
    pub mpc: RunOutcome,
    pub rows: Vec<KpiRow>,
}

/// Runs both controllers on the scenario and tabulates the event volumes.
pub fn compare_controllers(
    scenario: &Scenario,
    config: &AppConfig,
) -> Result<Comparison, RunError> {
    let rbc = run_closed_loop(scenario, ControllerKind::Rbc, config)?;
    let mpc = run_closed_loop(scenario, ControllerKind::Mpc, config)?;
    let rows = kpi_rows(&rbc.kpi, &mpc.kpi);
    Ok(Comparison {
        scenario_name: scenario.name.clone(),
        rbc,
        mpc,
        rows,
    })
}

pub fn kpi_rows(rbc: &KpiReport, mpc: &KpiReport) -> Vec<KpiRow> {
    let pairs: [(&'static str, f64, f64); 6] = [
        ("Q_CSO4", rbc.q_cso4, mpc.q_cso4),
        ("Q_CSO5", rbc.q_cso5, mpc.q_cso5),
        ("Q_CSOSur", rbc.q_cso_sur, mpc.q_cso_sur),
        ("Q_CSO total", rbc.total_cso(), mpc.total_cso()),
        ("Q_WWTPSur", rbc.q_wwtp_sur, mpc.q_wwtp_sur),
        ("Q_LaGavia", rbc.q_la_gavia, mpc.q_la_gavia),
    ];
    pairs
        .into_iter()
        .map(|(label, r, m)| KpiRow {
            label,
            rbc: r,
            mpc: m,
            delta_pct: relative_delta_pct(r, m),
        })
        .collect()
}

impl Comparison {
    /// Deterministic markdown report with one row per event volume.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "# Controller comparison: {}\n\n",
            self.scenario_name
        ));
        out.push_str("| KPI | RBC (10³ m³) | MPC (10³ m³) | Δ |\n");
        out.push_str("|---|---:|---:|---:|\n");
        for row in &self.rows {
            let delta = match row.delta_pct {
                Some(d) => format!("{d:+.1}%"),
                None => "n/a".to_string(),
            };
            out.push_str(&format!(
                "| {} | {:.2} | {:.2} | {} |\n",
                row.label, row.rbc, row.mpc, delta
            ));
        }
        if let Some(conv) = &self.mpc.conversion {
            out.push_str("\nConversion accuracy (predicted vs realized actuator flows): ");
            out.push_str(&format!(
                "bypass R² = {}, emptying R² = {}\n",
                fmt_r2(conv.fill_r2),
                fmt_r2(conv.empty_r2)
            ));
        }
        out
    }
}

fn fmt_r2(r2: Option<f64>) -> String {
    match r2 {
        Some(v) => format!("{v:.4}"),
        None => "undefined".to_string(),
    }
}
