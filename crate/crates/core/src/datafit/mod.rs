//! Least-squares data fitting and goodness-of-fit metrics.
//!
//! Two fitting routes are provided: a closed-form linear least squares for
//! templates linear in their parameters, and a damped Gauss-Newton iteration
//! for the nonlinear ones. Both report the same `FitResult` with RMSE, MAE
//! and R² computed over the fitted data.

mod template;

pub use template::ExpressionTemplate;

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Singular values below this fraction of the largest one count as zero when
/// deciding the rank of a design matrix.
pub const RANK_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("unknown template `{name}`")]
    UnknownTemplate { name: String },
    #[error("dataset needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("duplicate feature name `{0}`")]
    DuplicateFeature(String),
    #[error("non-finite value in column `{column}` at data row {row}")]
    NonFiniteValue { column: String, row: usize },
    #[error("column `{0}` not found in CSV header")]
    MissingColumn(String),
    #[error("CSV needs a target column and at least one feature column")]
    NoFeatures,
    #[error("invalid number `{value}` in column `{column}` at data row {row}")]
    BadNumber {
        column: String,
        row: usize,
        value: String,
    },
    #[error("failed to read CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("template requires {expected} feature(s), dataset has {actual}")]
    FeatureCountMismatch { expected: usize, actual: usize },
    #[error("template is not linear in its parameters; use the nonlinear fit")]
    NotLinearInParams,
    #[error("design matrix is rank deficient; collinear columns: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },
    #[error("initial parameters give a non-finite {what}")]
    BadInitialization { what: &'static str },
    #[error("expected {expected} initial parameters, got {actual}")]
    InitialParamCount { expected: usize, actual: usize },
    #[error("series length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("series must not be empty")]
    Empty,
}

/// Input-output samples with named features.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    feature_names: Vec<String>,
    rows: Vec<Vec<f64>>,
    targets: Vec<f64>,
}

impl Dataset {
    pub fn new(
        feature_names: Vec<String>,
        rows: Vec<Vec<f64>>,
        targets: Vec<f64>,
    ) -> Result<Self, FitError> {
        if rows.len() < 2 {
            return Err(FitError::TooFewSamples(rows.len()));
        }
        if rows.len() != targets.len() {
            return Err(FitError::LengthMismatch {
                left: rows.len(),
                right: targets.len(),
            });
        }
        for (i, name) in feature_names.iter().enumerate() {
            if feature_names[..i].contains(name) {
                return Err(FitError::DuplicateFeature(name.clone()));
            }
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != feature_names.len() {
                return Err(FitError::LengthMismatch {
                    left: row.len(),
                    right: feature_names.len(),
                });
            }
            for (j, v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(FitError::NonFiniteValue {
                        column: feature_names[j].clone(),
                        row: i + 1,
                    });
                }
            }
            if !targets[i].is_finite() {
                return Err(FitError::NonFiniteValue {
                    column: "<target>".to_string(),
                    row: i + 1,
                });
            }
        }
        Ok(Dataset {
            feature_names,
            rows,
            targets,
        })
    }

    /// Reads a comma-separated dataset with a header row; the named target
    /// column becomes the fit target and every other column a feature, in
    /// header order.
    pub fn from_csv_reader<R: Read>(reader: R, target: &str) -> Result<Self, FitError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let headers: Vec<String> = rdr
            .headers()?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let target_idx = headers
            .iter()
            .position(|h| h == target)
            .ok_or_else(|| FitError::MissingColumn(target.to_string()))?;
        let feature_names: Vec<String> = headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != target_idx)
            .map(|(_, h)| h.clone())
            .collect();
        if feature_names.is_empty() {
            return Err(FitError::NoFeatures);
        }

        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (row_no, record) in rdr.records().enumerate() {
            let record = record?;
            let mut row = Vec::with_capacity(feature_names.len());
            for (i, field) in record.iter().enumerate() {
                let column = headers
                    .get(i)
                    .cloned()
                    .unwrap_or_else(|| format!("<column {}>", i + 1));
                let value: f64 = field.trim().parse().map_err(|_| FitError::BadNumber {
                    column: column.clone(),
                    row: row_no + 1,
                    value: field.to_string(),
                })?;
                if i == target_idx {
                    targets.push(value);
                } else {
                    row.push(value);
                }
            }
            if row.len() != feature_names.len() || targets.len() != rows.len() + 1 {
                return Err(FitError::LengthMismatch {
                    left: record.len(),
                    right: headers.len(),
                });
            }
            rows.push(row);
        }
        Dataset::new(feature_names, rows, targets)
    }

    pub fn from_csv_path<P: AsRef<Path>>(path: P, target: &str) -> Result<Self, FitError> {
        let file = std::fs::File::open(path)?;
        Dataset::from_csv_reader(file, target)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Splits off the trailing `fraction` of the samples as a holdout set.
    pub fn split_holdout(&self, fraction: f64) -> (Dataset, Dataset) {
        let n = self.rows.len();
        let n_train = ((1.0 - fraction.clamp(0.0, 1.0)) * n as f64).round() as usize;
        let n_train = n_train.clamp(2, n.saturating_sub(2).max(2)).min(n);
        let train = Dataset {
            feature_names: self.feature_names.clone(),
            rows: self.rows[..n_train].to_vec(),
            targets: self.targets[..n_train].to_vec(),
        };
        let test = Dataset {
            feature_names: self.feature_names.clone(),
            rows: self.rows[n_train..].to_vec(),
            targets: self.targets[n_train..].to_vec(),
        };
        (train, test)
    }

    fn check_template(&self, template: &ExpressionTemplate) -> Result<(), FitError> {
        if let Some(required) = template.required_features() {
            if self.feature_names.len() != required {
                return Err(FitError::FeatureCountMismatch {
                    expected: required,
                    actual: self.feature_names.len(),
                });
            }
        }
        Ok(())
    }
}

/// Goodness-of-fit summary. `r2` is `None` when the targets have zero
/// variance, where the coefficient of determination is undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    pub r2: Option<f64>,
}

/// Root-mean-square error, mean absolute error and R² of predictions
/// against observations.
pub fn metrics(y_true: &[f64], y_pred: &[f64]) -> Result<Metrics, FitError> {
    if y_true.len() != y_pred.len() {
        return Err(FitError::LengthMismatch {
            left: y_true.len(),
            right: y_pred.len(),
        });
    }
    if y_true.is_empty() {
        return Err(FitError::Empty);
    }
    let n = y_true.len() as f64;
    let mut sse = 0.0;
    let mut abs = 0.0;
    for (t, p) in y_true.iter().zip(y_pred) {
        let e = t - p;
        sse += e * e;
        abs += e.abs();
    }
    let rmse = (sse / n).sqrt();
    let mae = abs / n;
    let mean = y_true.iter().sum::<f64>() / n;
    let sst: f64 = y_true.iter().map(|t| (t - mean) * (t - mean)).sum();
    let r2 = if sst > 0.0 {
        Some(1.0 - sse / sst)
    } else {
        None
    };
    Ok(Metrics { rmse, mae, r2 })
}

/// Fitted parameters plus diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: Vec<f64>,
    pub rmse: f64,
    pub mae: f64,
    pub r2: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl FitResult {
    fn new(
        params: Vec<f64>,
        m: Metrics,
        iterations: usize,
        converged: bool,
    ) -> Result<Self, FitError> {
        // Power-mean inequality: the RMS of the absolute errors dominates
        // their mean. Violations would mean the metrics are miscomputed.
        debug_assert!(m.rmse >= m.mae - 1e-12 * m.mae.abs().max(1.0));
        Ok(FitResult {
            params,
            rmse: m.rmse,
            mae: m.mae,
            r2: m.r2,
            iterations,
            converged,
        })
    }
}

/// Closed-form linear least squares for templates linear in the parameters.
///
/// The design matrix must have full column rank; near-singular designs are
/// rejected with the collinear columns named rather than silently
/// pseudo-inverted.
pub fn fit_lls(dataset: &Dataset, template: &ExpressionTemplate) -> Result<FitResult, FitError> {
    if !template.is_linear_in_params() {
        return Err(FitError::NotLinearInParams);
    }
    dataset.check_template(template)?;

    let n = dataset.len();
    let p = template.arity(dataset.feature_names.len());
    let mut flat = Vec::with_capacity(n * p);
    for row in &dataset.rows {
        flat.extend(template.design_row(row).expect("linear template"));
    }
    let design = DMatrix::from_row_slice(n, p, &flat);
    let y = DVector::from_column_slice(&dataset.targets);

    let svd = design.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let threshold = RANK_THRESHOLD * sigma_max;
    let deficient: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, s)| **s <= threshold)
        .map(|(i, _)| i)
        .collect();
    if !deficient.is_empty() {
        let v_t = svd.v_t.as_ref().expect("svd computed with v_t");
        let names = template.basis_names(&dataset.feature_names);
        let mut columns = Vec::new();
        for &k in &deficient {
            let null_vec = v_t.row(k);
            let max_w = null_vec.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (j, w) in null_vec.iter().enumerate() {
                if w.abs() > 0.1 * max_w && !columns.contains(&names[j]) {
                    columns.push(names[j].clone());
                }
            }
        }
        return Err(FitError::RankDeficient { columns });
    }

    let beta = svd
        .solve(&y, threshold)
        .expect("full-rank solve cannot fail");
    let predictions: Vec<f64> = (&design * &beta).iter().copied().collect();
    let m = metrics(&dataset.targets, &predictions)?;
    FitResult::new(beta.iter().copied().collect(), m, 1, true)
}

/// Options for the damped Gauss-Newton iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NllsOptions {
    /// Relative decrease of the squared-error sum that counts as converged.
    pub tol: f64,
    /// Maximum accepted iterations.
    pub max_iter: usize,
    /// Relative step for the central-difference Jacobian.
    pub fd_step: f64,
}

impl Default for NllsOptions {
    fn default() -> Self {
        NllsOptions {
            tol: 1e-10,
            max_iter: 200,
            fd_step: 1e-6,
        }
    }
}

const DAMPING_INITIAL: f64 = 1e-3;
const DAMPING_GROWTH: f64 = 10.0;
const DAMPING_MAX: f64 = 1e12;

/// Damped Gauss-Newton fit for any template.
///
/// The squared-error sum is non-increasing over accepted iterations: a step
/// is only taken when it improves the fit, otherwise the damping grows and
/// the step is retried. Jacobians are central finite differences.
pub fn fit_nlls(
    dataset: &Dataset,
    template: &ExpressionTemplate,
    initial_params: &[f64],
    options: &NllsOptions,
) -> Result<FitResult, FitError> {
    dataset.check_template(template)?;
    let p = template.arity(dataset.feature_names.len());
    if initial_params.len() != p {
        return Err(FitError::InitialParamCount {
            expected: p,
            actual: initial_params.len(),
        });
    }

    let predict = |params: &[f64]| -> Vec<f64> {
        dataset
            .rows
            .iter()
            .map(|x| template.eval(params, x))
            .collect()
    };
    let sse_of = |pred: &[f64]| -> f64 {
        pred.iter()
            .zip(&dataset.targets)
            .map(|(p, t)| (t - p) * (t - p))
            .sum()
    };

    let mut params = initial_params.to_vec();
    let mut pred = predict(&params);
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(FitError::BadInitialization { what: "residual" });
    }
    let mut sse = sse_of(&pred);

    // An exact fit leaves only rounding noise in the residuals; below this
    // floor further iterations just grind machine epsilon.
    let signal: f64 = dataset.targets.iter().map(|t| t * t).sum();
    let sse_floor = f64::EPSILON * f64::EPSILON * signal.max(f64::MIN_POSITIVE);

    let jacobian = |params: &[f64]| -> Option<DMatrix<f64>> {
        let n = dataset.len();
        let mut j = DMatrix::zeros(n, p);
        let mut probe = params.to_vec();
        for k in 0..p {
            let h = options.fd_step * params[k].abs().max(1.0);
            probe[k] = params[k] + h;
            let plus = predict(&probe);
            probe[k] = params[k] - h;
            let minus = predict(&probe);
            probe[k] = params[k];
            for i in 0..n {
                let d = (plus[i] - minus[i]) / (2.0 * h);
                if !d.is_finite() {
                    return None;
                }
                j[(i, k)] = d;
            }
        }
        Some(j)
    };

    let mut damping = DAMPING_INITIAL;
    let mut iterations = 0;
    let mut converged = false;

    'outer: while iterations < options.max_iter {
        let j = match jacobian(&params) {
            Some(j) => j,
            None if iterations == 0 => {
                return Err(FitError::BadInitialization { what: "Jacobian" })
            }
            None => break,
        };
        let residual = DVector::from_iterator(
            dataset.len(),
            dataset.targets.iter().zip(&pred).map(|(t, p)| t - p),
        );
        let jtj = j.transpose() * &j;
        let gradient = j.transpose() * residual;

        // Inner damping loop: grow the damping until a step improves.
        loop {
            let mut system = jtj.clone();
            for k in 0..p {
                let d = jtj[(k, k)];
                system[(k, k)] = d + damping * d.max(1e-12);
            }
            let step = system
                .clone()
                .cholesky()
                .map(|c| c.solve(&gradient))
                .or_else(|| system.lu().solve(&gradient));

            let improved = step.and_then(|delta| {
                let candidate: Vec<f64> = params
                    .iter()
                    .zip(delta.iter())
                    .map(|(p, d)| p + d)
                    .collect();
                let cand_pred = predict(&candidate);
                if cand_pred.iter().any(|v| !v.is_finite()) {
                    return None;
                }
                let cand_sse = sse_of(&cand_pred);
                (cand_sse <= sse).then_some((candidate, cand_pred, cand_sse))
            });

            match improved {
                Some((candidate, cand_pred, cand_sse)) => {
                    let rel_change = (sse - cand_sse) / sse.max(f64::MIN_POSITIVE);
                    params = candidate;
                    pred = cand_pred;
                    sse = cand_sse;
                    iterations += 1;
                    damping = (damping / DAMPING_GROWTH).max(1e-12);
                    if rel_change < options.tol || sse <= sse_floor {
                        converged = true;
                        break 'outer;
                    }
                    break;
                }
                None => {
                    damping *= DAMPING_GROWTH;
                    if damping > DAMPING_MAX {
                        // No improving step exists at any damping level;
                        // treat the current point as a stationary point.
                        converged = true;
                        break 'outer;
                    }
                }
            }
        }
    }

    let m = metrics(&dataset.targets, &pred)?;
    FitResult::new(params, m, iterations, converged)
}
