//! Correlation and squared-error metrics, per-split evaluation and
//! multi-run aggregation.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{svr_predict, SvrParams};
use crate::data::{pot_from_sequence, Dataset, GradPooling, VolumeSequence};
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig, ModelParams, Prediction};
use crate::scalar::Scalar;

fn check_lengths<T>(y: &[T], y_hat: &[T], min: usize) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(Error::dim("metric", format!("{} targets vs {} predictions", y.len(), y_hat.len())));
    }
    if y.len() < min {
        return Err(Error::InvalidArgument(format!("metric needs at least {min} values, got {}", y.len())));
    }
    Ok(())
}

/// Pearson correlation of mean-centred vectors. Constant inputs are an error.
pub fn pearson<T: Scalar>(y: &[T], y_hat: &[T]) -> Result<T> {
    check_lengths(y, y_hat, 2)?;
    if y.iter().all(|&v| v == y[0]) {
        return Err(Error::UndefinedCorrelation("targets are constant"));
    }
    if y_hat.iter().all(|&v| v == y_hat[0]) {
        return Err(Error::UndefinedCorrelation("predictions are constant"));
    }
    let n = T::lit(y.len() as f64);
    let my = y.iter().copied().sum::<T>() / n;
    let mp = y_hat.iter().copied().sum::<T>() / n;
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in y.iter().zip(y_hat) {
        let (da, db) = (a - my, b - mp);
        sxy = sxy + da * db;
        sxx = sxx + da * da;
        syy = syy + db * db;
    }
    let denom = (sxx * syy).sqrt();
    if !(denom > T::zero()) {
        return Err(Error::UndefinedCorrelation("zero variance"));
    }
    // rounding can push |r| a hair past 1
    Ok((sxy / denom).max(-T::one()).min(T::one()))
}

pub fn mse_metric<T: Scalar>(y: &[T], y_hat: &[T]) -> Result<T> {
    check_lengths(y, y_hat, 1)?;
    let n = T::lit(y.len() as f64);
    Ok(y.iter().zip(y_hat).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n)
}

/// Anything that maps a volume sequence to a score.
pub trait Regressor<T: Scalar>: Sync {
    fn predict(&self, seq: &VolumeSequence<T>) -> Result<T>;
}

/// LSTM regressor of any fusion mode.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmModel<T: Scalar> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Scalar> LstmModel<T> {
    pub fn predict_full(&self, seq: &VolumeSequence<T>) -> Result<Prediction<T>> {
        forward(seq, &self.params, &self.config)
    }
}

impl<T: Scalar> Regressor<T> for LstmModel<T> {
    fn predict(&self, seq: &VolumeSequence<T>) -> Result<T> {
        Ok(self.predict_full(seq)?.y_hat)
    }
}

/// Linear SVR applied to the PoT descriptor of the volume sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SvrModel<T: Scalar> {
    pub params: SvrParams<T>,
    pub levels: usize,
    pub grad: GradPooling,
}

impl<T: Scalar> Regressor<T> for SvrModel<T> {
    fn predict(&self, seq: &VolumeSequence<T>) -> Result<T> {
        let pot = pot_from_sequence(seq, self.levels, self.grad)?;
        svr_predict(&self.params, &pot.values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub n: usize,
    /// `None` when the correlation is undefined; see `rho_error`.
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_error: Option<String>,
    pub mse: f64,
    pub model_id: String,
    pub seed: u64,
}

/// Scores every sequence of `split`.
///
/// Metrics are computed over predictions sorted by sequence id, so the
/// report does not depend on the order of the split.
pub fn evaluate<T: Scalar, R: Regressor<T>>(
    model: &R,
    split: &Dataset<T>,
    split_name: &str,
    model_id: &str,
    seed: u64,
) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::InvalidArgument(format!("split {split_name} is empty")));
    }
    let preds: Vec<T> = split
        .sequences
        .par_iter()
        .map(|s| model.predict(s))
        .collect::<Result<_>>()?;
    let mut rows: Vec<(&str, T, T)> = split
        .sequences
        .iter()
        .zip(preds)
        .map(|(s, p)| (s.id.as_str(), s.label, p))
        .collect();
    rows.sort_by(|a, b| a.0.cmp(b.0));
    let y: Vec<T> = rows.iter().map(|r| r.1).collect();
    let y_hat: Vec<T> = rows.iter().map(|r| r.2).collect();
    let mse = mse_metric(&y, &y_hat)?.as_f64();
    let (rho, rho_error) = if y.len() < 2 {
        (None, Some("fewer than two sequences".to_string()))
    } else {
        match pearson(&y, &y_hat) {
            Ok(r) => (Some(r.as_f64()), None),
            Err(e @ Error::UndefinedCorrelation(_)) => (None, Some(e.to_string())),
            Err(e) => return Err(e),
        }
    };
    Ok(EvalReport {
        split: split_name.to_string(),
        n: y.len(),
        rho,
        rho_error,
        mse,
        model_id: model_id.to_string(),
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub reports: Vec<EvalReport>,
    /// Unweighted mean over runs; `None` if any run lacks a correlation.
    pub mean_rho: Option<f64>,
    pub mean_mse: f64,
}

pub fn aggregate(reports: Vec<EvalReport>) -> Result<RunAggregate> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("nothing to aggregate".into()));
    }
    let k = reports.len() as f64;
    let mean_mse = reports.iter().map(|r| r.mse).sum::<f64>() / k;
    let mean_rho = reports
        .iter()
        .map(|r| r.rho)
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / k);
    Ok(RunAggregate {
        reports,
        mean_rho,
        mean_mse,
    })
}

pub fn write_reports_jsonl<W: Write>(mut w: W, reports: &[EvalReport]) -> Result<()> {
    for r in reports {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Plain-text table with one row per run and a mean row.
pub fn summary_table(agg: &RunAggregate) -> String {
    let fmt_rho = |r: Option<f64>| r.map_or_else(|| "undef".to_string(), |v| format!("{v:.4}"));
    let mut out = format!("{:<24} {:<6} {:>6} {:>8} {:>8}\n", "model", "split", "n", "rho", "mse");
    for r in &agg.reports {
        out.push_str(&format!(
            "{:<24} {:<6} {:>6} {:>8} {:>8.4}\n",
            r.model_id,
            r.split,
            r.n,
            fmt_rho(r.rho),
            r.mse
        ));
    }
    out.push_str(&format!(
        "{:<24} {:<6} {:>6} {:>8} {:>8.4}\n",
        "mean",
        "",
        agg.reports.len(),
        fmt_rho(agg.mean_rho),
        agg.mean_mse
    ));
    out
}
