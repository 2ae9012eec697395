//! Receding-horizon control of the pilot model, plus the rule-based baseline.
//!
//! The optimal control problem is reduced by direct single shooting: the
//! decision vector is the sequence of actuator flow pairs over the horizon,
//! states come from forward simulation of the model, and the cost combines
//! spill volume, treatment-capacity shortfall and control smoothness. The
//! optimizer is a deterministic projected coordinate search; any optimizer
//! satisfying the feasibility, determinism and improvement-over-warm-start
//! contracts would do, since the min/max network elements make the problem
//! nonconvex and no global guarantee is available.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuation::{
    select_setpoint, ConversionContext, EmptyTable, FillTable, SetpointDecision, SetpointGrid,
};
use crate::hydraulics::StepInterval;
use crate::lm::{level_from_volume, lm_step, LmControls, LmError, LmInputs, LmParams, LmState};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("forecast has {actual} steps, horizon needs {expected}")]
    ForecastTooShort { expected: usize, actual: usize },
    #[error("forecast must not be empty")]
    EmptyForecast,
    #[error("invalid control configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] LmError),
}

/// Disturbance forecast handed to the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastMode {
    /// Replay the scenario inside the horizon (the scenario is the forecast).
    #[default]
    Perfect,
    /// Hold the currently observed inlets constant over the horizon.
    Persistence,
}

/// Optimal-control-problem configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcpConfig {
    /// Horizon length in steps.
    pub horizon: usize,
    /// Sampling interval (s).
    pub dt_s: f64,
    /// Weight on the spill volume term.
    pub w_cso: f64,
    /// Weight on the treatment-capacity shortfall term.
    pub w_wwtp: f64,
    /// Weight on the control smoothness term.
    pub w_smooth: f64,
    /// Upper bound on the bypass flow target; the arriving flow always
    /// bounds it as well.
    pub u_fill_max: Option<f64>,
    /// Upper bound on the emptying flow target; the tank outflow capacity
    /// always bounds it as well.
    pub u_empty_max: f64,
    /// Optimizer budget: maximum cost evaluations per solve.
    pub max_evaluations: usize,
    /// Stop when a full coordinate cycle improves the cost by less than
    /// this, relative to the cost's magnitude.
    pub tolerance: f64,
    pub forecast: ForecastMode,
}

impl Default for OcpConfig {
    fn default() -> Self {
        OcpConfig {
            horizon: 12,
            dt_s: 300.0,
            w_cso: 1.0,
            w_wwtp: 1.0,
            w_smooth: 0.01,
            u_fill_max: None,
            u_empty_max: 2.0,
            max_evaluations: 20_000,
            tolerance: 1e-9,
            forecast: ForecastMode::Perfect,
        }
    }
}

impl OcpConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        if self.horizon == 0 {
            return Err(ControlError::BadConfig("horizon must be at least 1".into()));
        }
        if !(self.dt_s.is_finite() && self.dt_s > 0.0) {
            return Err(ControlError::BadConfig(format!(
                "dt_s must be positive, got {}",
                self.dt_s
            )));
        }
        for (name, w) in [
            ("w_cso", self.w_cso),
            ("w_wwtp", self.w_wwtp),
            ("w_smooth", self.w_smooth),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(ControlError::BadConfig(format!(
                    "{name} must be nonnegative, got {w}"
                )));
            }
        }
        if let Some(m) = self.u_fill_max {
            if !(m.is_finite() && m >= 0.0) {
                return Err(ControlError::BadConfig(format!(
                    "u_fill_max must be nonnegative, got {m}"
                )));
            }
        }
        if !(self.u_empty_max.is_finite() && self.u_empty_max >= 0.0) {
            return Err(ControlError::BadConfig(format!(
                "u_empty_max must be nonnegative, got {}",
                self.u_empty_max
            )));
        }
        if self.max_evaluations == 0 {
            return Err(ControlError::BadConfig(
                "max_evaluations must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn dt(&self) -> StepInterval {
        StepInterval::from_secs(self.dt_s).expect("validated dt")
    }

    /// Per-step box bounds `(fill_hi, empty_hi)` for the decision variables.
    pub fn bounds(&self, forecast: &[LmInputs], params: &LmParams) -> Vec<(f64, f64)> {
        let empty_hi = self.u_empty_max.min(params.tank.q_out_max);
        forecast
            .iter()
            .map(|inp| {
                let fill_hi = match self.u_fill_max {
                    Some(m) => m.min(inp.q_in5.value()),
                    None => inp.q_in5.value(),
                };
                (fill_hi, empty_hi)
            })
            .collect()
    }
}

/// Actuator flow targets over the horizon: `(bypass, emptying)` per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ControlPlan {
    pub steps: Vec<(f64, f64)>,
}

impl ControlPlan {
    pub fn zeros(horizon: usize) -> Self {
        ControlPlan {
            steps: vec![(0.0, 0.0); horizon],
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Projects every entry into its box bounds, adjusting the length to the
    /// bounds vector (truncating or repeating the last entry).
    pub fn clamped_to(&self, bounds: &[(f64, f64)]) -> ControlPlan {
        let last = self.steps.last().copied().unwrap_or((0.0, 0.0));
        let steps = bounds
            .iter()
            .enumerate()
            .map(|(k, (fill_hi, empty_hi))| {
                let (f, e) = self.steps.get(k).copied().unwrap_or(last);
                (f.clamp(0.0, *fill_hi), e.clamp(0.0, *empty_hi))
            })
            .collect();
        ControlPlan { steps }
    }

    /// One-step receding shift: drop the first entry, duplicate the last.
    pub fn shifted(&self) -> ControlPlan {
        let mut steps: Vec<(f64, f64)> = self.steps.iter().skip(1).copied().collect();
        if let Some(last) = self.steps.last() {
            steps.push(*last);
        }
        ControlPlan { steps }
    }

    pub fn within_bounds(&self, bounds: &[(f64, f64)]) -> bool {
        self.steps.len() == bounds.len()
            && self
                .steps
                .iter()
                .zip(bounds)
                .all(|((f, e), (fh, eh))| (0.0..=*fh).contains(f) && (0.0..=*eh).contains(e))
    }
}

/// Cost decomposition of a plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub total: f64,
    /// Spill volume over the horizon (m³).
    pub cso: f64,
    /// Treatment-capacity shortfall volume over the horizon (m³).
    pub wwtp: f64,
    /// Sum of squared control changes ((m³/s)²).
    pub smooth: f64,
}

impl CostBreakdown {
    /// The weighted parts recompose into the total within 1e-9 relative.
    pub fn recomposes(&self, config: &OcpConfig) -> bool {
        let total =
            config.w_cso * self.cso + config.w_wwtp * self.wwtp + config.w_smooth * self.smooth;
        (total - self.total).abs() <= 1e-9 * self.total.abs().max(1.0)
    }
}

/// Forward-simulates a plan from a state and returns the per-step outputs
/// plus the state trajectory (`states[0]` is the initial state).
pub fn rollout(
    plan: &ControlPlan,
    state: &LmState,
    forecast: &[LmInputs],
    config: &OcpConfig,
    params: &LmParams,
) -> Result<(Vec<crate::lm::LmOutputs>, Vec<LmState>), ControlError> {
    if forecast.len() != plan.len() {
        return Err(ControlError::ForecastTooShort {
            expected: plan.len(),
            actual: forecast.len(),
        });
    }
    let dt = config.dt();
    let mut states = Vec::with_capacity(plan.len() + 1);
    let mut outputs = Vec::with_capacity(plan.len());
    let mut current = *state;
    states.push(current);
    for (inputs, &(fill, empty)) in forecast.iter().zip(&plan.steps) {
        let controls = LmControls::new(fill.max(0.0), empty.max(0.0)).map_err(LmError::from)?;
        let (next, out) = lm_step(&current, inputs, &controls, dt, params)?;
        outputs.push(out);
        states.push(next);
        current = next;
    }
    Ok((outputs, states))
}

/// Evaluates the three-part cost of a plan by forward simulation.
///
/// - spill: volume discharged at the tank, the N12 spill point and the Sur
///   WWTP over the horizon;
/// - treatment shortfall: unused Sur and La Gavia intake capacity, expressed
///   as a volume so that minimizing it maximizes plant utilization;
/// - smoothness: squared change of the control pair between consecutive
///   steps, seeded with the previously applied controls.
pub fn evaluate_cost(
    plan: &ControlPlan,
    state: &LmState,
    forecast: &[LmInputs],
    config: &OcpConfig,
    params: &LmParams,
) -> Result<CostBreakdown, ControlError> {
    let (outputs, _) = rollout(plan, state, forecast, config, params)?;
    let dt = config.dt_s;
    let mut cso = 0.0;
    let mut wwtp = 0.0;
    for out in &outputs {
        cso += dt * (out.q_cso4 + out.q_cso5 + out.q_cso_sur);
        wwtp += dt * ((params.sur_cap - out.q_wwtp_sur) + (params.la_gavia_cap - out.q_la_gavia));
    }
    let mut smooth = 0.0;
    let mut prev = state.u_prev;
    for &(fill, empty) in &plan.steps {
        let df = fill - prev.0;
        let de = empty - prev.1;
        smooth += df * df + de * de;
        prev = (fill, empty);
    }
    let total = config.w_cso * cso + config.w_wwtp * wwtp + config.w_smooth * smooth;
    Ok(CostBreakdown {
        total,
        cso,
        wwtp,
        smooth,
    })
}

/// Optimizer telemetry for one solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveInfo {
    pub evaluations: usize,
    pub accepted_moves: usize,
    pub cycles: usize,
    pub budget_exhausted: bool,
    /// Cost after each accepted move, as `(evaluation index, total cost)`.
    pub cost_trace: Vec<(usize, f64)>,
}

const LINE_SCAN_POINTS: usize = 13;
const GOLDEN_ITERS: usize = 24;
const MAX_CYCLES: usize = 60;
const INVPHI: f64 = 0.618_033_988_749_894_8;

struct ShootingProblem<'a> {
    state: &'a LmState,
    forecast: &'a [LmInputs],
    config: &'a OcpConfig,
    params: &'a LmParams,
    evaluations: usize,
    budget: usize,
}

impl ShootingProblem<'_> {
    fn cost(&mut self, plan: &ControlPlan) -> f64 {
        self.evaluations += 1;
        match evaluate_cost(plan, self.state, self.forecast, self.config, self.params) {
            Ok(c) => c.total,
            Err(_) => f64::INFINITY,
        }
    }

    fn budget_left(&self) -> bool {
        self.evaluations < self.budget
    }
}

/// Solves the horizon problem by projected coordinate search from a set of
/// structured starting plans.
///
/// Contracts: the returned plan satisfies the box bounds exactly, the solve
/// is deterministic, and the returned cost never exceeds the (clamped) warm
/// start's cost. When the evaluation budget runs out the best plan so far is
/// returned with `budget_exhausted` set, never an error.
pub fn solve_mpc(
    state: &LmState,
    forecast: &[LmInputs],
    warm_start: &ControlPlan,
    config: &OcpConfig,
    params: &LmParams,
) -> Result<(ControlPlan, CostBreakdown, SolveInfo), ControlError> {
    config.validate()?;
    if forecast.len() < config.horizon {
        return Err(ControlError::ForecastTooShort {
            expected: config.horizon,
            actual: forecast.len(),
        });
    }
    let forecast = &forecast[..config.horizon];
    let bounds = config.bounds(forecast, params);

    let mut problem = ShootingProblem {
        state,
        forecast,
        config,
        params,
        evaluations: 0,
        budget: config.max_evaluations,
    };

    // Structured starting candidates: the warm start plus the corner plans
    // (pass everything, divert everything, each with and without emptying).
    let warm = warm_start.clamped_to(&bounds);
    let corner = |fill_frac: f64, empty_frac: f64| ControlPlan {
        steps: bounds
            .iter()
            .map(|(fh, eh)| (fill_frac * fh, empty_frac * eh))
            .collect(),
    };
    let candidates = [
        ControlPlan::zeros(config.horizon),
        corner(1.0, 0.0),
        corner(1.0, 1.0),
        corner(0.0, 1.0),
        corner(0.5, 0.5),
    ];

    let mut best = warm.clone();
    let mut best_cost = problem.cost(&best);
    let mut info = SolveInfo {
        evaluations: 0,
        accepted_moves: 0,
        cycles: 0,
        budget_exhausted: false,
        cost_trace: vec![(1, best_cost)],
    };
    for cand in &candidates {
        let c = problem.cost(cand);
        if c < best_cost {
            best = cand.clone();
            best_cost = c;
            info.accepted_moves += 1;
            info.cost_trace.push((problem.evaluations, best_cost));
        }
    }

    // Cyclic projected coordinate search with a scan plus golden-section
    // refinement per coordinate.
    'cycles: for _ in 0..MAX_CYCLES {
        let cost_at_cycle_start = best_cost;
        for (k, &(fill_hi, empty_hi)) in bounds.iter().enumerate() {
            for actuator in 0..2 {
                if !problem.budget_left() {
                    info.budget_exhausted = true;
                    break 'cycles;
                }
                let hi = if actuator == 0 { fill_hi } else { empty_hi };
                if hi <= 0.0 {
                    continue;
                }
                let current = if actuator == 0 {
                    best.steps[k].0
                } else {
                    best.steps[k].1
                };
                let mut trial = best.clone();
                let mut eval_at = |problem: &mut ShootingProblem, v: f64| {
                    if actuator == 0 {
                        trial.steps[k].0 = v;
                    } else {
                        trial.steps[k].1 = v;
                    }
                    problem.cost(&trial)
                };

                // Coarse scan over the box, keeping the incumbent value.
                let mut scan_best_v = current;
                let mut scan_best_c = best_cost;
                for s in 0..LINE_SCAN_POINTS {
                    let v = hi * s as f64 / (LINE_SCAN_POINTS - 1) as f64;
                    let c = eval_at(&mut problem, v);
                    if c < scan_best_c {
                        scan_best_v = v;
                        scan_best_c = c;
                    }
                }

                // Golden-section refinement around the scan winner.
                let span = hi / (LINE_SCAN_POINTS - 1) as f64;
                let mut lo_v = (scan_best_v - span).max(0.0);
                let mut hi_v = (scan_best_v + span).min(hi);
                let mut x1 = hi_v - INVPHI * (hi_v - lo_v);
                let mut x2 = lo_v + INVPHI * (hi_v - lo_v);
                let mut c1 = eval_at(&mut problem, x1);
                let mut c2 = eval_at(&mut problem, x2);
                for _ in 0..GOLDEN_ITERS {
                    if !problem.budget_left() {
                        break;
                    }
                    if c1 <= c2 {
                        hi_v = x2;
                        x2 = x1;
                        c2 = c1;
                        x1 = hi_v - INVPHI * (hi_v - lo_v);
                        c1 = eval_at(&mut problem, x1);
                    } else {
                        lo_v = x1;
                        x1 = x2;
                        c1 = c2;
                        x2 = lo_v + INVPHI * (hi_v - lo_v);
                        c2 = eval_at(&mut problem, x2);
                    }
                }
                let (cand_v, cand_c) = if c1 < scan_best_c && c1 <= c2 {
                    (x1, c1)
                } else if c2 < scan_best_c {
                    (x2, c2)
                } else {
                    (scan_best_v, scan_best_c)
                };

                if cand_c < best_cost {
                    if actuator == 0 {
                        best.steps[k].0 = cand_v;
                    } else {
                        best.steps[k].1 = cand_v;
                    }
                    best_cost = cand_c;
                    info.accepted_moves += 1;
                    info.cost_trace.push((problem.evaluations, best_cost));
                }
            }
        }
        info.cycles += 1;
        if cost_at_cycle_start - best_cost <= config.tolerance * cost_at_cycle_start.abs().max(1.0)
        {
            break;
        }
    }

    info.evaluations = problem.evaluations;
    let breakdown = evaluate_cost(&best, state, forecast, config, params)?;
    Ok((best, breakdown, info))
}

/// One threshold band of the rule-based bypass policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FillBand {
    /// The band applies while the observed arriving flow stays at or below
    /// this value.
    pub q_in5_upper: f64,
    /// Grid opening commanded inside the band.
    pub opening_pct: f64,
}

/// Rule-based baseline: threshold bands on the arriving flow pick the bypass
/// opening; the tank empties, tracking the spare downstream capacity, only
/// in calm conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RbcRuleSet {
    /// Ascending bands; the first band whose threshold covers the observed
    /// flow fires.
    pub fill_bands: Vec<FillBand>,
    /// Bypass opening above every band (storm conditions).
    pub fill_fallback_pct: f64,
    /// Emptying is enabled only while the observed arriving flow stays
    /// below this.
    pub empty_enable_below_q_in5: f64,
}

impl Default for RbcRuleSet {
    fn default() -> Self {
        RbcRuleSet {
            fill_bands: vec![
                FillBand {
                    q_in5_upper: 2.0,
                    opening_pct: 100.0,
                },
                FillBand {
                    q_in5_upper: 4.0,
                    opening_pct: 50.0,
                },
            ],
            fill_fallback_pct: 0.0,
            empty_enable_below_q_in5: 1.0,
        }
    }
}

impl RbcRuleSet {
    pub fn validate(&self, grid: &SetpointGrid) -> Result<(), ControlError> {
        let mut prev = f64::NEG_INFINITY;
        for band in &self.fill_bands {
            if !(band.q_in5_upper.is_finite() && band.q_in5_upper > prev) {
                return Err(ControlError::BadConfig(
                    "rule thresholds must be finite and strictly increasing".into(),
                ));
            }
            prev = band.q_in5_upper;
            if grid.index_of(band.opening_pct).is_none() {
                return Err(ControlError::BadConfig(format!(
                    "rule opening {}% is not on the setpoint grid",
                    band.opening_pct
                )));
            }
        }
        if grid.index_of(self.fill_fallback_pct).is_none() {
            return Err(ControlError::BadConfig(format!(
                "fallback opening {}% is not on the setpoint grid",
                self.fill_fallback_pct
            )));
        }
        if !self.empty_enable_below_q_in5.is_finite() {
            return Err(ControlError::BadConfig(
                "empty_enable_below_q_in5 must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// What the rule-based controller sees: the committed outputs of the
/// previous step (none on the first) and the current model state.
#[derive(Debug, Clone, Copy)]
pub struct RbcObservation<'a> {
    pub previous: Option<&'a crate::lm::LmOutputs>,
    pub state: &'a LmState,
}

impl RbcObservation<'_> {
    fn q_in5(&self) -> f64 {
        self.previous
            .map(|o| o.g_in_a + o.g_out_a_eff)
            .unwrap_or(0.0)
    }

    fn q_in4(&self) -> f64 {
        self.previous
            .map(|o| (o.q_mi - o.g_empt_a_eff - o.g_out_a_eff).max(0.0))
            .unwrap_or(0.0)
    }

    fn q_mi3(&self) -> f64 {
        self.previous.map(|o| o.q_mi3).unwrap_or(0.0)
    }
}

/// Applies the rule set to one observation, returning the commanded
/// `(bypass, emptying)` grid openings. Deterministic: the first matching
/// band fires and ties in the emptying tracking resolve to the lower
/// opening.
pub fn rbc_step(
    observation: &RbcObservation,
    rules: &RbcRuleSet,
    params: &LmParams,
    fill: &FillTable,
    empty: &EmptyTable,
    grid: &SetpointGrid,
) -> (f64, f64) {
    let q_in5 = observation.q_in5();
    let fill_pct = rules
        .fill_bands
        .iter()
        .find(|band| q_in5 <= band.q_in5_upper)
        .map(|band| band.opening_pct)
        .unwrap_or(rules.fill_fallback_pct);

    let v_abro = observation.state.v_abro;
    let empty_pct = if q_in5 < rules.empty_enable_below_q_in5 && v_abro > 0.0 {
        let spare_sur = (params.sur_cap - observation.q_mi3()).max(0.0);
        let target = params.tank.q_out_max.min(spare_sur);
        let d_abro = level_from_volume(v_abro, params);
        let g_out_est = fill.flow_at_opening(fill_pct, q_in5, grid).unwrap_or(0.0);
        let q_in4 = observation.q_in4();
        let mut best = 0usize;
        let mut best_err = f64::INFINITY;
        for i in 0..grid.len() {
            let err = (empty.flow_at(i, d_abro, g_out_est, q_in4) - target).abs();
            if err < best_err {
                best = i;
                best_err = err;
            }
        }
        grid.opening(best)
    } else {
        0.0
    };

    (fill_pct, empty_pct)
}

/// One receding-horizon decision: the setpoints to apply now (first step
/// only) and at the next step, with the flow targets they came from.
#[derive(Debug, Clone)]
pub struct MpcDecision {
    /// Decision for the current step, converted with current-step context.
    /// Used once, to bootstrap the loop before any pending setpoint exists.
    pub now: SetpointPair,
    /// Decision for the next step, converted with the optimization results
    /// at the next prediction step. This is what the plant applies next.
    pub next: SetpointPair,
    pub cost: CostBreakdown,
    pub info: SolveInfo,
}

/// Converted openings plus the optimized flow pair they target.
#[derive(Debug, Clone, Copy)]
pub struct SetpointPair {
    pub fill: SetpointDecision,
    pub empty: SetpointDecision,
    /// Optimized `(bypass, emptying)` flow targets behind the decisions.
    pub target: (f64, f64),
}

/// Receding-horizon controller: solves the horizon problem, converts the
/// optimized flows into actuator setpoints and keeps the one-step-shifted
/// plan as the next warm start.
#[derive(Debug, Clone)]
pub struct MpcController {
    pub config: OcpConfig,
    warm: ControlPlan,
}

impl MpcController {
    pub fn new(config: OcpConfig) -> Result<Self, ControlError> {
        config.validate()?;
        Ok(MpcController {
            warm: ControlPlan::zeros(config.horizon),
            config,
        })
    }

    /// Pads a forecast window to the horizon by repeating the last entry.
    pub fn padded_window(&self, window: &[LmInputs]) -> Result<Vec<LmInputs>, ControlError> {
        let last = *window.last().ok_or(ControlError::EmptyForecast)?;
        let mut padded = window.to_vec();
        padded.truncate(self.config.horizon);
        while padded.len() < self.config.horizon {
            padded.push(last);
        }
        Ok(padded)
    }

    pub fn decide(
        &mut self,
        state: &LmState,
        window: &[LmInputs],
        params: &LmParams,
        fill: &FillTable,
        empty: &EmptyTable,
        grid: &SetpointGrid,
    ) -> Result<MpcDecision, ControlError> {
        let forecast = self.padded_window(window)?;
        let (plan, cost, info) = solve_mpc(state, &forecast, &self.warm, &self.config, params)?;

        // States along the optimized plan give the conversion inputs at the
        // next prediction step.
        let (_, states) = rollout(&plan, state, &forecast, &self.config, params)?;
        let next_idx = if self.config.horizon >= 2 { 1 } else { 0 };

        let convert = |idx: usize| -> SetpointPair {
            let target = plan.steps[idx];
            let q_in5 = forecast[idx].q_in5.value();
            let q_in4 = forecast[idx].q_in4.value();
            let d_abro = level_from_volume(states[idx].v_abro, params);
            let fill_dec = select_setpoint(
                target.0,
                &ConversionContext::Fill { q_in5 },
                fill,
                empty,
                grid,
            );
            let empty_dec = select_setpoint(
                target.1,
                &ConversionContext::Empty {
                    d_abro,
                    g_out_a: target.0,
                    q_in4,
                },
                fill,
                empty,
                grid,
            );
            SetpointPair {
                fill: fill_dec,
                empty: empty_dec,
                target,
            }
        };

        let decision = MpcDecision {
            now: convert(0),
            next: convert(next_idx),
            cost,
            info,
        };
        self.warm = plan.shifted();
        Ok(decision)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn quiet_state() -> LmState {
        LmState::default()
    }

    fn small_config() -> OcpConfig {
        OcpConfig {
            horizon: 4,
            max_evaluations: 6_000,
            ..OcpConfig::default()
        }
    }

    fn constant_forecast(q4: f64, q5: f64, q6: f64, qmd: f64, n: usize) -> Vec<LmInputs> {
        vec![LmInputs::new(q4, q5, q6, qmd).unwrap(); n]
    }

    #[test]
    fn zero_plan_quiescent_cost() {
        let params = LmParams::default();
        let config = small_config();
        let forecast = constant_forecast(0.0, 0.0, 0.0, 0.0, 4);
        let plan = ControlPlan::zeros(4);
        let cost = evaluate_cost(&plan, &quiet_state(), &forecast, &config, &params).unwrap();
        assert_eq!(cost.cso, 0.0);
        assert_eq!(cost.smooth, 0.0);
        // Idle plants leave their whole intake capacity unused.
        assert!(cost.wwtp > 0.0);
        assert!(cost.recomposes(&config));
    }

    #[test]
    fn constant_plan_has_zero_smoothness() {
        let params = LmParams::default();
        let config = small_config();
        let forecast = constant_forecast(0.5, 1.0, 1.0, 1.0, 4);
        let mut state = quiet_state();
        state.u_prev = (0.8, 0.3);
        let plan = ControlPlan {
            steps: vec![(0.8, 0.3); 4],
        };
        let cost = evaluate_cost(&plan, &state, &forecast, &config, &params).unwrap();
        assert_eq!(cost.smooth, 0.0);
    }

    #[test]
    fn sur_spill_enters_cost() {
        let params = LmParams::default();
        let config = OcpConfig {
            horizon: 1,
            ..OcpConfig::default()
        };
        // Boundary inflow alone pushes the Sur split above capacity.
        let forecast = constant_forecast(0.0, 0.0, 0.0, 8.3, 1);
        let state = LmState {
            l7_prev: -100.0,
            ..LmState::default()
        };
        let plan = ControlPlan::zeros(1);
        let cost = evaluate_cost(&plan, &state, &forecast, &config, &params).unwrap();
        assert_relative_eq!(cost.cso, 300.0 * (8.3 - 6.0), epsilon = 1e-9);
    }

    #[test]
    fn cost_rejects_short_forecast() {
        let params = LmParams::default();
        let config = small_config();
        let forecast = constant_forecast(0.0, 0.0, 0.0, 0.0, 2);
        let plan = ControlPlan::zeros(4);
        let err = evaluate_cost(&plan, &quiet_state(), &forecast, &config, &params).unwrap_err();
        assert!(matches!(err, ControlError::ForecastTooShort { .. }));
    }

    #[test]
    fn solve_zero_inflow_stays_near_zero_plan() {
        let params = LmParams::default();
        let config = small_config();
        let forecast = constant_forecast(0.0, 0.0, 0.0, 0.0, 4);
        let warm = ControlPlan::zeros(4);
        let (plan, cost, info) =
            solve_mpc(&quiet_state(), &forecast, &warm, &config, &params).unwrap();
        let zero_cost = evaluate_cost(&warm, &quiet_state(), &forecast, &config, &params)
            .unwrap()
            .total;
        assert!(cost.total <= zero_cost + 1e-12);
        assert!(plan.within_bounds(&config.bounds(&forecast, &params)));
        assert!(!info.budget_exhausted);
    }

    #[test]
    fn solve_never_worse_than_warm_start() {
        let params = LmParams::default();
        let config = small_config();
        let forecast = constant_forecast(1.0, 3.0, 8.0, 2.0, 4);
        let mut state = quiet_state();
        state.v_abro = 4e4;
        for warm_steps in [
            vec![(0.0, 0.0); 4],
            vec![(3.0, 2.0); 4],
            vec![(1.0, 0.5), (2.0, 0.0), (0.0, 1.5), (3.0, 2.0)],
        ] {
            let warm = ControlPlan { steps: warm_steps };
            let clamped = warm.clamped_to(&config.bounds(&forecast, &params));
            let warm_cost = evaluate_cost(&clamped, &state, &forecast, &config, &params)
                .unwrap()
                .total;
            let (_, cost, _) = solve_mpc(&state, &forecast, &warm, &config, &params).unwrap();
            assert!(
                cost.total <= warm_cost + 1e-12,
                "{} > {warm_cost}",
                cost.total
            );
        }
    }

    #[test]
    fn solve_is_deterministic() {
        let params = LmParams::default();
        let config = small_config();
        let forecast = constant_forecast(1.0, 4.0, 10.0, 3.0, 4);
        let warm = ControlPlan::zeros(4);
        let state = LmState {
            v_abro: 2e4,
            ..quiet_state()
        };
        let (p1, c1, i1) = solve_mpc(&state, &forecast, &warm, &config, &params).unwrap();
        let (p2, c2, i2) = solve_mpc(&state, &forecast, &warm, &config, &params).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(c1.total, c2.total);
        assert_eq!(i1.evaluations, i2.evaluations);
    }

    #[test]
    fn storm_pulse_diverts_then_empties() {
        let params = LmParams::default();
        let config = OcpConfig {
            horizon: 8,
            max_evaluations: 20_000,
            ..OcpConfig::default()
        };
        // A pulse exceeding the downstream comfort arrives mid-horizon,
        // then calm: the optimizer should divert into the tank during the
        // pulse (bypass below the arriving flow).
        let mut forecast = Vec::new();
        for k in 0..8 {
            let q5 = if (2..5).contains(&k) { 6.0 } else { 0.5 };
            let qmd = if (2..5).contains(&k) { 5.0 } else { 1.0 };
            forecast.push(LmInputs::new(1.0, q5, 12.0, qmd).unwrap());
        }
        let warm = ControlPlan {
            steps: forecast.iter().map(|f| (f.q_in5.value(), 0.0)).collect(),
        };
        let all_bypass_cost = evaluate_cost(
            &warm.clamped_to(&config.bounds(&forecast, &params)),
            &quiet_state(),
            &forecast,
            &config,
            &params,
        )
        .unwrap()
        .total;
        let (plan, cost, _) =
            solve_mpc(&quiet_state(), &forecast, &warm, &config, &params).unwrap();
        assert!(
            cost.total < all_bypass_cost,
            "optimizer should beat all-bypass: {} vs {all_bypass_cost}",
            cost.total
        );
        let diverted: f64 = (2..5)
            .map(|k| forecast[k].q_in5.value() - plan.steps[k].0)
            .sum();
        assert!(diverted > 1.0, "pulse not diverted: {plan:?}");
    }

    #[test]
    fn rbc_default_rules() {
        let params = LmParams::default();
        let rules = RbcRuleSet::default();
        let (fill, empty, grid) = (
            FillTable::default(),
            EmptyTable::default(),
            SetpointGrid::default(),
        );
        rules.validate(&grid).unwrap();

        // Dry weather, empty tank: bypass wide open, no emptying possible.
        let state = LmState::default();
        let obs = RbcObservation {
            previous: None,
            state: &state,
        };
        let (f_pct, e_pct) = rbc_step(&obs, &rules, &params, &fill, &empty, &grid);
        assert_eq!(f_pct, 100.0);
        assert_eq!(e_pct, 0.0);

        // Storm observation: bypass forced shut.
        let storm_inputs = LmInputs::new(1.0, 5.0, 2.0, 1.0).unwrap();
        let controls = LmControls::new(5.0, 0.0).unwrap();
        let (next, out) = lm_step(
            &state,
            &storm_inputs,
            &controls,
            StepInterval::from_secs(300.0).unwrap(),
            &params,
        )
        .unwrap();
        let obs = RbcObservation {
            previous: Some(&out),
            state: &next,
        };
        let (f_pct, _) = rbc_step(&obs, &rules, &params, &fill, &empty, &grid);
        assert_eq!(f_pct, 0.0);

        // Calm with a filled tank: emptying tracks the spare capacity at a
        // grid opening.
        let full_state = LmState {
            v_abro: 1e5,
            ..LmState::default()
        };
        let calm_inputs = LmInputs::new(0.3, 0.5, 1.0, 1.0).unwrap();
        let controls = LmControls::new(0.5, 0.0).unwrap();
        let (_, calm_out) = lm_step(
            &full_state,
            &calm_inputs,
            &controls,
            StepInterval::from_secs(300.0).unwrap(),
            &params,
        )
        .unwrap();
        let obs = RbcObservation {
            previous: Some(&calm_out),
            state: &full_state,
        };
        let (f_pct, e_pct) = rbc_step(&obs, &rules, &params, &fill, &empty, &grid);
        assert_eq!(f_pct, 100.0);
        assert!(e_pct > 0.0, "filled tank should empty in calm weather");
        assert!(grid.index_of(e_pct).is_some(), "opening must be on grid");

        // Determinism.
        let again = rbc_step(&obs, &rules, &params, &fill, &empty, &grid);
        assert_eq!(again, (f_pct, e_pct));
    }

    #[test]
    fn rbc_empty_tank_never_empties() {
        let params = LmParams::default();
        let rules = RbcRuleSet::default();
        let (fill, empty, grid) = (
            FillTable::default(),
            EmptyTable::default(),
            SetpointGrid::default(),
        );
        let state = LmState {
            v_abro: 0.0,
            ..LmState::default()
        };
        let obs = RbcObservation {
            previous: None,
            state: &state,
        };
        let (_, e_pct) = rbc_step(&obs, &rules, &params, &fill, &empty, &grid);
        assert_eq!(e_pct, 0.0);
    }

    #[test]
    fn controller_steady_state_setpoints_stable() {
        let params = LmParams::default();
        let config = OcpConfig {
            horizon: 4,
            max_evaluations: 4_000,
            ..OcpConfig::default()
        };
        let (fill, empty, grid) = (
            FillTable::default(),
            EmptyTable::default(),
            SetpointGrid::default(),
        );
        let mut controller = MpcController::new(config).unwrap();
        let window = constant_forecast(0.0, 0.0, 0.0, 0.0, 4);
        let state = quiet_state();
        let first = controller
            .decide(&state, &window, &params, &fill, &empty, &grid)
            .unwrap();
        let second = controller
            .decide(&state, &window, &params, &fill, &empty, &grid)
            .unwrap();
        assert_relative_eq!(
            first.next.fill.opening_pct,
            second.next.fill.opening_pct,
            epsilon = 1e-9
        );
        assert_relative_eq!(
            first.next.empty.opening_pct,
            second.next.empty.opening_pct,
            epsilon = 1e-9
        );
    }

    #[test]
    fn controller_pads_short_windows() {
        let params = LmParams::default();
        let config = small_config();
        let (fill, empty, grid) = (
            FillTable::default(),
            EmptyTable::default(),
            SetpointGrid::default(),
        );
        let mut controller = MpcController::new(config).unwrap();
        let window = constant_forecast(0.5, 1.0, 2.0, 1.0, 2);
        let decision = controller
            .decide(&quiet_state(), &window, &params, &fill, &empty, &grid)
            .unwrap();
        assert!(decision.cost.total.is_finite());
    }
}
