//! Rain scenarios: inlet flow series at a fixed sampling interval, with
//! optional event metadata, read from and written to CSV.
//!
//! A scenario file carries the four pilot inlets in the header
//! `time_s,q_in4,q_in5,q_in6,q_md_mi`, one row per step, strictly increasing
//! uniform `time_s`, flows in m³/s, `.` decimal separator. Metadata
//! (precipitation, peak intensity, date, duration) lives in a JSON sidecar
//! next to the CSV.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hydraulics::{HydraulicsError, StepInterval};
use crate::lm::LmInputs;

pub const SCENARIO_COLUMNS: [&str; 5] = ["time_s", "q_in4", "q_in5", "q_in6", "q_md_mi"];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario CSV is missing column `{0}`")]
    MissingColumn(&'static str),
    #[error("invalid number `{value}` in column `{column}` at data row {row}")]
    BadNumber {
        column: String,
        row: usize,
        value: String,
    },
    #[error("time column must increase by a constant step; row {row} breaks it")]
    NonUniformTime { row: usize },
    #[error("scenario needs at least 2 rows, got {0}")]
    TooShort(usize),
    #[error("invalid flow at data row {row}: {source}")]
    BadFlow { row: usize, source: HydraulicsError },
    #[error("failed to read CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid metadata sidecar: {0}")]
    Meta(#[from] serde_json::Error),
}

/// Event metadata in the style of the calibration-rain catalogue.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioMeta {
    pub precipitation_mm: Option<f64>,
    pub max_intensity_mm_h: Option<f64>,
    pub date: Option<String>,
    pub duration: Option<String>,
}

/// A named inflow scenario over a uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub meta: ScenarioMeta,
    pub dt: StepInterval,
    pub steps: Vec<LmInputs>,
}

impl Scenario {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.dt.secs() * self.steps.len() as f64
    }

    /// Reads a scenario from CSV, picking up a `.json` metadata sidecar with
    /// the same stem when present.
    pub fn from_csv_path<P: AsRef<Path>>(path: P) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scenario".to_string());
        let file = std::fs::File::open(path)?;
        let mut scenario = Self::from_csv_reader(file, &name)?;
        let sidecar = path.with_extension("json");
        if sidecar.exists() {
            let raw = std::fs::read_to_string(sidecar)?;
            scenario.meta = serde_json::from_str(&raw)?;
        }
        Ok(scenario)
    }

    pub fn from_csv_reader<R: Read>(reader: R, name: &str) -> Result<Self, ScenarioError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let headers: Vec<String> = rdr
            .headers()?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let mut indices = [0usize; 5];
        for (slot, column) in SCENARIO_COLUMNS.iter().enumerate() {
            indices[slot] = headers
                .iter()
                .position(|h| h == column)
                .ok_or(ScenarioError::MissingColumn(column))?;
        }

        let mut times = Vec::new();
        let mut steps = Vec::new();
        for (row_no, record) in rdr.records().enumerate() {
            let record = record?;
            let mut values = [0.0f64; 5];
            for (slot, &idx) in indices.iter().enumerate() {
                let field = record.get(idx).unwrap_or("");
                values[slot] = field.trim().parse().map_err(|_| ScenarioError::BadNumber {
                    column: SCENARIO_COLUMNS[slot].to_string(),
                    row: row_no + 1,
                    value: field.to_string(),
                })?;
            }
            times.push(values[0]);
            steps.push(
                LmInputs::new(values[1], values[2], values[3], values[4]).map_err(|source| {
                    ScenarioError::BadFlow {
                        row: row_no + 1,
                        source,
                    }
                })?,
            );
        }
        if steps.len() < 2 {
            return Err(ScenarioError::TooShort(steps.len()));
        }

        let dt = times[1] - times[0];
        if !dt.is_finite() || dt <= 0.0 {
            return Err(ScenarioError::NonUniformTime { row: 2 });
        }
        for (i, w) in times.windows(2).enumerate() {
            let step = w[1] - w[0];
            if (step - dt).abs() > 1e-6 * dt {
                return Err(ScenarioError::NonUniformTime { row: i + 2 });
            }
        }

        Ok(Scenario {
            name: name.to_string(),
            meta: ScenarioMeta::default(),
            dt: StepInterval::from_secs(dt).expect("positive dt checked above"),
            steps,
        })
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), ScenarioError> {
        writeln!(out, "{}", SCENARIO_COLUMNS.join(","))?;
        for (i, s) in self.steps.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{}",
                i as f64 * self.dt.secs(),
                s.q_in4.value(),
                s.q_in5.value(),
                s.q_in6.value(),
                s.q_md_mi.value()
            )?;
        }
        Ok(())
    }

    /// Writes the scenario CSV plus its metadata sidecar next to it.
    pub fn write_to_dir<P: AsRef<Path>>(
        &self,
        dir: P,
    ) -> Result<std::path::PathBuf, ScenarioError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{}.csv", self.name));
        let file = std::fs::File::create(&csv_path)?;
        self.write_csv(file)?;
        let meta_path = dir.join(format!("{}.json", self.name));
        std::fs::write(&meta_path, serde_json::to_string_pretty(&self.meta)?)?;
        Ok(csv_path)
    }

    /// The bundled storm fixture: an 11-hour event at 300 s sampling with
    /// staggered triangular pulses on the four inlets, scaled to the
    /// magnitudes of the calibration-rain catalogue, plus a small seeded
    /// jitter. Fully deterministic.
    pub fn synthetic_storm() -> Scenario {
        const DT_S: f64 = 300.0;
        const STEPS: usize = 132;
        // (base, ramp start, peak, ramp end, peak height), times in hours
        const SHAPES: [(f64, f64, f64, f64, f64); 4] = [
            (0.3, 1.0, 2.8, 5.5, 2.2),  // q_in4
            (0.5, 0.8, 2.5, 4.5, 5.5),  // q_in5
            (1.0, 1.2, 3.0, 6.0, 18.0), // q_in6
            (1.5, 1.5, 3.2, 6.5, 6.5),  // q_md_mi
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0x2024_1012);
        let mut steps = Vec::with_capacity(STEPS);
        for k in 0..STEPS {
            let t_h = (k as f64 + 0.5) * DT_S / 3600.0;
            let mut q = [0.0f64; 4];
            for (slot, (base, start, peak, end, height)) in SHAPES.iter().enumerate() {
                let pulse = if t_h <= *start || t_h >= *end {
                    0.0
                } else if t_h <= *peak {
                    height * (t_h - start) / (peak - start)
                } else {
                    height * (end - t_h) / (end - peak)
                };
                let jitter: f64 = rng.random_range(-1.0..1.0);
                q[slot] = ((base + pulse) * (1.0 + 0.04 * jitter)).max(0.0);
            }
            steps.push(LmInputs::new(q[0], q[1], q[2], q[3]).expect("fixture flows are valid"));
        }
        Scenario {
            name: "storm-fixture".to_string(),
            meta: ScenarioMeta {
                precipitation_mm: Some(21.9),
                max_intensity_mm_h: Some(42.0),
                date: Some("2024-10-12".to_string()),
                duration: Some("11h 0min".to_string()),
            },
            dt: StepInterval::from_secs(DT_S).unwrap(),
            steps,
        }
    }

    /// A flat dry-weather scenario, mostly useful in tests.
    pub fn dry(steps: usize, dt_s: f64) -> Scenario {
        Scenario {
            name: "dry".to_string(),
            meta: ScenarioMeta::default(),
            dt: StepInterval::from_secs(dt_s).unwrap(),
            steps: vec![LmInputs::ZERO; steps],
        }
    }
}
