//! Parametrized expression templates fitted to input-output data.
//!
//! An expert picks the template after inspecting the data; the fitting
//! routines only need evaluation plus, for the linear kinds, the design-row
//! expansion.

use serde::{Deserialize, Serialize};

use super::FitError;

/// Supported expression shapes.
///
/// Parameter order per kind:
/// - `Linear` over n features: `[slope_1, ..., slope_n, intercept]`
/// - `Polynomial { degree: d }` (single feature): descending powers
///   `[c_d, ..., c_1, c_0]`
/// - `MultivariateQuadratic` over n features: squares, then linears, then
///   intercept: `[s_1..s_n, l_1..l_n, intercept]`
/// - `QuadPlusLog` (single feature): `a·x² + b·x + c + d·ln(e·x)` as
///   `[a, b, c, d, e]`; the log term is dropped when `e ≤ 0` or `x ≤ 0`
/// - `Logistic` (single feature): `A / (B + exp(C·x + D)) + E` as
///   `[A, B, C, D, E]`
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExpressionTemplate {
    Linear,
    Polynomial { degree: usize },
    MultivariateQuadratic,
    QuadPlusLog,
    Logistic,
}

impl ExpressionTemplate {
    /// Parses a CLI-facing template name.
    pub fn parse(name: &str) -> Result<Self, FitError> {
        let lower = name.to_ascii_lowercase();
        match lower.as_str() {
            "linear" => Ok(Self::Linear),
            "quadratic" => Ok(Self::Polynomial { degree: 2 }),
            "cubic" => Ok(Self::Polynomial { degree: 3 }),
            "mvquad" => Ok(Self::MultivariateQuadratic),
            "quadlog" => Ok(Self::QuadPlusLog),
            "logistic" => Ok(Self::Logistic),
            _ => {
                if let Some(deg) = lower.strip_prefix("poly") {
                    if let Ok(degree) = deg.parse::<usize>() {
                        if degree >= 1 {
                            return Ok(Self::Polynomial { degree });
                        }
                    }
                }
                Err(FitError::UnknownTemplate {
                    name: name.to_string(),
                })
            }
        }
    }

    /// Number of parameters for a dataset with `n_features` inputs.
    pub fn arity(&self, n_features: usize) -> usize {
        match self {
            Self::Linear => n_features + 1,
            Self::Polynomial { degree } => degree + 1,
            Self::MultivariateQuadratic => 2 * n_features + 1,
            Self::QuadPlusLog | Self::Logistic => 5,
        }
    }

    /// Feature-count constraint, if the template fixes one.
    pub fn required_features(&self) -> Option<usize> {
        match self {
            Self::Linear | Self::MultivariateQuadratic => None,
            Self::Polynomial { .. } | Self::QuadPlusLog | Self::Logistic => Some(1),
        }
    }

    pub fn is_linear_in_params(&self) -> bool {
        matches!(
            self,
            Self::Linear | Self::Polynomial { .. } | Self::MultivariateQuadratic
        )
    }

    /// Basis-function names aligned with the parameter vector, used to name
    /// collinear columns in rank errors.
    pub fn basis_names(&self, feature_names: &[String]) -> Vec<String> {
        match self {
            Self::Linear => {
                let mut names: Vec<String> = feature_names.to_vec();
                names.push("intercept".to_string());
                names
            }
            Self::Polynomial { degree } => {
                let x = feature_names.first().map(String::as_str).unwrap_or("x");
                (0..=*degree)
                    .rev()
                    .map(|p| match p {
                        0 => "intercept".to_string(),
                        1 => x.to_string(),
                        _ => format!("{x}^{p}"),
                    })
                    .collect()
            }
            Self::MultivariateQuadratic => {
                let mut names: Vec<String> =
                    feature_names.iter().map(|f| format!("{f}^2")).collect();
                names.extend(feature_names.iter().cloned());
                names.push("intercept".to_string());
                names
            }
            Self::QuadPlusLog => ["a", "b", "c", "d", "e"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            Self::Logistic => ["amplitude", "denom", "slope", "intercept", "floor"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }

    /// Expands one sample into its design row, for templates linear in the
    /// parameters.
    pub fn design_row(&self, x: &[f64]) -> Option<Vec<f64>> {
        match self {
            Self::Linear => {
                let mut row = x.to_vec();
                row.push(1.0);
                Some(row)
            }
            Self::Polynomial { degree } => {
                let v = x[0];
                Some((0..=*degree).rev().map(|p| v.powi(p as i32)).collect())
            }
            Self::MultivariateQuadratic => {
                let mut row: Vec<f64> = x.iter().map(|v| v * v).collect();
                row.extend_from_slice(x);
                row.push(1.0);
                Some(row)
            }
            Self::QuadPlusLog | Self::Logistic => None,
        }
    }

    /// Evaluates the template at one sample.
    pub fn eval(&self, params: &[f64], x: &[f64]) -> f64 {
        match self {
            Self::Linear | Self::Polynomial { .. } | Self::MultivariateQuadratic => {
                let row = self.design_row(x).expect("linear template");
                row.iter().zip(params).map(|(b, p)| b * p).sum()
            }
            Self::QuadPlusLog => {
                let [a, b, c, d, e] = params else {
                    panic!("quad-plus-log takes 5 parameters");
                };
                let v = x[0];
                let log_term = if *e > 0.0 && v > 0.0 {
                    d * (e * v).ln()
                } else {
                    0.0
                };
                a * v * v + b * v + c + log_term
            }
            Self::Logistic => {
                let [amplitude, denom, slope, intercept, floor] = params else {
                    panic!("logistic takes 5 parameters");
                };
                let v = x[0];
                amplitude / (denom + (slope * v + intercept).exp()) + floor
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn parse_names() {
        assert_eq!(
            ExpressionTemplate::parse("quadratic").unwrap(),
            ExpressionTemplate::Polynomial { degree: 2 }
        );
        assert_eq!(
            ExpressionTemplate::parse("poly4").unwrap(),
            ExpressionTemplate::Polynomial { degree: 4 }
        );
        assert_eq!(
            ExpressionTemplate::parse("LOGISTIC").unwrap(),
            ExpressionTemplate::Logistic
        );
        assert!(ExpressionTemplate::parse("spline").is_err());
        assert!(ExpressionTemplate::parse("poly0").is_err());
    }

    #[test]
    fn quadratic_eval_matches_hand_value() {
        let t = ExpressionTemplate::Polynomial { degree: 2 };
        let y = t.eval(&[0.003, 0.921, -0.538], &[10.0]);
        assert_relative_eq!(y, 8.972, epsilon = 1e-12);
    }

    #[test]
    fn quadlog_drops_degenerate_log() {
        let t = ExpressionTemplate::QuadPlusLog;
        // e = 0 would make the log undefined; the term is dropped instead.
        let y = t.eval(&[1.0, 2.0, 3.0, 4.0, 0.0], &[2.0]);
        assert_relative_eq!(y, 4.0 + 4.0 + 3.0);
        let y = t.eval(&[0.0, 0.0, 0.0, 2.0, 1.0], &[f64::exp(1.0)]);
        assert_relative_eq!(y, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn logistic_eval_saturates() {
        let t = ExpressionTemplate::Logistic;
        let p = [0.455, 0.883, -65.998, 77.339, 0.132];
        assert_relative_eq!(t.eval(&p, &[-50.0]), 0.132, epsilon = 1e-12);
        assert_relative_eq!(t.eval(&p, &[50.0]), 0.455 / 0.883 + 0.132, epsilon = 1e-12);
    }

    #[test]
    fn basis_names_follow_features() {
        let t = ExpressionTemplate::Polynomial { degree: 2 };
        let names = t.basis_names(&["q_in6".to_string()]);
        assert_eq!(names, vec!["q_in6^2", "q_in6", "intercept"]);
    }
}
