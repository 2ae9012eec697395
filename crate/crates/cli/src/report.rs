//! Run-directory writers: trajectories, KPI summaries, conversion
//! diagnostics, optimizer traces and the controller comparison report.
//! All output is deterministic for identical inputs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use drainctl_core::closedloop::{Comparison, RunOutcome};
use drainctl_core::hydraulics::FLOW_REPORT_EPS;

use crate::CliError;

/// Flows below the reporting tolerance print as zero; state updates and KPI
/// integration always use the raw values.
fn report_flow(v: f64) -> f64 {
    if v.abs() < FLOW_REPORT_EPS {
        0.0
    } else {
        v
    }
}

pub const TRAJECTORY_HEADER: &str = "time_s,q_in4,q_in5,q_in6,q_md_mi,fill_pct,empty_pct,\
d_abro,v_abro,q_mi,g_in_a,q_cso4,q_1216,q_la_gavia,q_biol,q_sec,q_out_la_gavia,q_mi2,\
q_cso5_1,q_cso5,l7,p7,q_mi3,q_wwtp_sur,q_cso_sur,g_out_a_eff,g_empt_a_eff,\
loss_diversion_created,loss_la_gavia_excess,loss_n12_residual";

pub fn trajectories_csv(outcome: &RunOutcome) -> String {
    let mut out = String::new();
    out.push_str(TRAJECTORY_HEADER);
    out.push('\n');
    for r in &outcome.records {
        let o = &r.outputs;
        let d = &o.diagnostics;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.time_s,
            report_flow(r.inputs.q_in4.value()),
            report_flow(r.inputs.q_in5.value()),
            report_flow(r.inputs.q_in6.value()),
            report_flow(r.inputs.q_md_mi.value()),
            r.fill_pct,
            r.empty_pct,
            r.d_abro,
            r.v_abro,
            report_flow(o.q_mi),
            report_flow(o.g_in_a),
            report_flow(o.q_cso4),
            report_flow(o.q_1216),
            report_flow(o.q_la_gavia),
            report_flow(o.q_biol),
            report_flow(o.q_sec),
            report_flow(o.q_out_la_gavia),
            report_flow(o.q_mi2),
            report_flow(o.q_cso5_1),
            report_flow(o.q_cso5),
            o.l7,
            report_flow(o.p7),
            report_flow(o.q_mi3),
            report_flow(o.q_wwtp_sur),
            report_flow(o.q_cso_sur),
            report_flow(o.g_out_a_eff),
            report_flow(o.g_empt_a_eff),
            report_flow(d.diversion_created),
            report_flow(d.la_gavia_excess),
            report_flow(d.n12_residual),
        )
        .expect("write to string");
    }
    out
}

pub fn kpi_json(outcome: &RunOutcome) -> String {
    let closure = outcome.mass_closure();
    let conversion = outcome.conversion.as_ref().map(|c| {
        serde_json::json!({
            "fill_r2": c.fill_r2,
            "empty_r2": c.empty_r2,
        })
    });
    let doc = serde_json::json!({
        "scenario": outcome.scenario_name,
        "controller": outcome.controller.label(),
        "dt_s": outcome.dt_s,
        "steps": outcome.records.len(),
        "kpi_1e3_m3": outcome.kpi,
        "total_cso_1e3_m3": outcome.kpi.total_cso(),
        "mass_closure_m3": closure,
        "conversion": conversion,
    });
    serde_json::to_string_pretty(&doc).expect("kpi serializes")
}

pub fn conversion_csv(outcome: &RunOutcome) -> Option<String> {
    let conv = outcome.conversion.as_ref()?;
    let mut out =
        String::from("step,time_s,fill_predicted,fill_realized,empty_predicted,empty_realized\n");
    for (i, (((fp, fr), ep), er)) in conv
        .fill_predicted
        .iter()
        .zip(&conv.fill_realized)
        .zip(&conv.empty_predicted)
        .zip(&conv.empty_realized)
        .enumerate()
    {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            i,
            i as f64 * outcome.dt_s,
            fp,
            fr,
            ep,
            er
        )
        .expect("write to string");
    }
    Some(out)
}

pub fn trace_csv(outcome: &RunOutcome) -> String {
    let mut out = String::from("step,evaluation,cost_total\n");
    for solve in &outcome.solves {
        for (eval, cost) in &solve.info.cost_trace {
            writeln!(out, "{},{},{}", solve.step, eval, cost).expect("write to string");
        }
    }
    out
}

/// Writes the standard run files for one outcome into `dir`.
pub fn write_run_dir(outcome: &RunOutcome, dir: &Path, trace: bool) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("trajectories.csv"), trajectories_csv(outcome))?;
    fs::write(dir.join("kpi.json"), kpi_json(outcome))?;
    if let Some(conv) = conversion_csv(outcome) {
        fs::write(dir.join("conversion.csv"), conv)?;
    }
    if trace && !outcome.solves.is_empty() {
        fs::write(dir.join("trace.csv"), trace_csv(outcome))?;
    }
    Ok(())
}

/// Writes the side-by-side benchmark: the markdown table at the top level
/// and the two full run directories underneath.
pub fn write_comparison_dir(
    comparison: &Comparison,
    dir: &Path,
    trace: bool,
) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("comparison.md"), comparison.to_markdown())?;
    write_run_dir(&comparison.rbc, &dir.join("rbc"), trace)?;
    write_run_dir(&comparison.mpc, &dir.join("mpc"), trace)?;
    Ok(())
}
