//! Linear epsilon-insensitive support vector regression.
//!
//! Minimizes `(lambda / 2) |w|^2 + (1 / N) sum max(0, |y - w.x - b| - epsilon)`
//! by subgradient descent with step `lr / sqrt(k + 1)` and returns the
//! running average of the iterates.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const SVR_MAGIC: &str = "MACHAN-SVR1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvrConfig {
    pub epsilon: f64,
    pub lambda: f64,
    pub steps: usize,
    pub learning_rate: f64,
    /// Samples per subgradient step; `None` uses the full set.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for SvrConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            lambda: 1e-4,
            steps: 2000,
            learning_rate: 0.1,
            batch_size: None,
            seed: 0,
        }
    }
}

impl SvrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !(self.lambda > 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid SVR config {self:?}")));
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidArgument("SVR batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SvrParams<T: Scalar> {
    pub w: Vec<T>,
    pub b: T,
}

fn check_rows<T: Scalar>(xs: &[Vec<T>], ys: &[T]) -> Result<usize> {
    if xs.len() != ys.len() {
        return Err(Error::dim("svr", format!("{} feature rows vs {} targets", xs.len(), ys.len())));
    }
    let d = xs.first().map(Vec::len).ok_or_else(|| Error::InvalidArgument("no training rows".into()))?;
    if let Some(bad) = xs.iter().find(|x| x.len() != d) {
        return Err(Error::dim("svr", format!("row of length {} vs {d}", bad.len())));
    }
    Ok(d)
}

pub fn svr_predict<T: Scalar>(params: &SvrParams<T>, x: &[T]) -> Result<T> {
    if x.len() != params.w.len() {
        return Err(Error::dim("svr_predict", format!("{} features vs {} weights", x.len(), params.w.len())));
    }
    Ok(params.w.iter().zip(x).map(|(&w, &v)| w * v).sum::<T>() + params.b)
}

/// Regularized epsilon-insensitive objective.
pub fn svr_objective<T: Scalar>(params: &SvrParams<T>, xs: &[Vec<T>], ys: &[T], config: &SvrConfig) -> Result<f64> {
    check_rows(xs, ys)?;
    let reg = 0.5 * config.lambda * params.w.iter().map(|w| w.as_f64().powi(2)).sum::<f64>();
    let mut loss = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let r = y.as_f64() - svr_predict(params, x)?.as_f64();
        loss += (r.abs() - config.epsilon).max(0.0);
    }
    Ok(reg + loss / xs.len() as f64)
}

/// Trains on feature rows `xs` and targets `ys`.
pub fn svr_train<T: Scalar>(xs: &[Vec<T>], ys: &[T], config: &SvrConfig) -> Result<SvrParams<T>> {
    svr_train_traced(xs, ys, config, 0).map(|(p, _)| p)
}

/// As [`svr_train`], also returning the averaged iterate every `every` steps
/// (never when `every` is zero).
pub fn svr_train_traced<T: Scalar>(
    xs: &[Vec<T>],
    ys: &[T],
    config: &SvrConfig,
    every: usize,
) -> Result<(SvrParams<T>, Vec<SvrParams<T>>)> {
    config.validate()?;
    let d = check_rows(xs, ys)?;
    let n = xs.len();
    let x64: Vec<Vec<f64>> = xs.iter().map(|x| x.iter().map(|v| v.as_f64()).collect()).collect();
    let y64: Vec<f64> = ys.iter().map(|v| v.as_f64()).collect();
    let batch = config.batch_size.unwrap_or(n).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut w_avg = vec![0.0; d];
    let mut b_avg = 0.0;
    let mut snapshots = Vec::new();
    let all: Vec<usize> = (0..n).collect();
    for k in 0..config.steps {
        let rows = if batch == n { all.clone() } else { sample(&mut rng, n, batch).into_vec() };
        let mut gw: Vec<f64> = w.iter().map(|v| config.lambda * v).collect();
        let mut gb = 0.0;
        let scale = 1.0 / rows.len() as f64;
        for &i in &rows {
            let pred: f64 = w.iter().zip(&x64[i]).map(|(a, c)| a * c).sum::<f64>() + b;
            let r = y64[i] - pred;
            if r.abs() > config.epsilon {
                let s = r.signum() * scale;
                gw.iter_mut().zip(&x64[i]).for_each(|(g, x)| *g -= s * x);
                gb -= s;
            }
        }
        let step = config.learning_rate / ((k + 1) as f64).sqrt();
        w.iter_mut().zip(&gw).for_each(|(v, g)| *v -= step * g);
        b -= step * gb;
        let inv = 1.0 / (k + 1) as f64;
        w_avg.iter_mut().zip(&w).for_each(|(a, v)| *a += (v - *a) * inv);
        b_avg += (b - b_avg) * inv;
        if every > 0 && (k + 1) % every == 0 {
            snapshots.push(to_params(&w_avg, b_avg));
        }
    }
    if w_avg.iter().any(|v| !v.is_finite()) || !b_avg.is_finite() {
        return Err(Error::NonFinite("svr_train"));
    }
    Ok((to_params(&w_avg, b_avg), snapshots))
}

fn to_params<T: Scalar>(w: &[f64], b: f64) -> SvrParams<T> {
    SvrParams {
        w: w.iter().map(|&v| T::lit(v)).collect(),
        b: T::lit(b),
    }
}

/// Standardizes each feature with training statistics, trains, then folds
/// the standardization back into `w` and `b` so the result applies to raw
/// features. Constant features get zero weight.
pub fn svr_train_standardized<T: Scalar>(xs: &[Vec<T>], ys: &[T], config: &SvrConfig) -> Result<SvrParams<T>> {
    let d = check_rows(xs, ys)?;
    let n = xs.len() as f64;
    let mut mean = vec![0.0; d];
    for x in xs {
        mean.iter_mut().zip(x).for_each(|(m, v)| *m += v.as_f64() / n);
    }
    let mut std = vec![0.0; d];
    for x in xs {
        std.iter_mut()
            .zip(x.iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v.as_f64() - m).powi(2) / n);
    }
    std.iter_mut().for_each(|s| *s = s.sqrt());
    let scaled: Vec<Vec<T>> = xs
        .iter()
        .map(|x| {
            x.iter()
                .enumerate()
                .map(|(j, v)| if std[j] > 0.0 { T::lit((v.as_f64() - mean[j]) / std[j]) } else { T::zero() })
                .collect()
        })
        .collect();
    let fit = svr_train(&scaled, ys, config)?;
    let mut w = vec![0.0; d];
    let mut b = fit.b.as_f64();
    for j in 0..d {
        if std[j] > 0.0 {
            w[j] = fit.w[j].as_f64() / std[j];
            b -= w[j] * mean[j];
        }
    }
    Ok(to_params(&w, b))
}

/// Text model file: magic line, weight count, one weight per line, bias.
pub fn save_svr<T: Scalar>(path: impl AsRef<Path>, params: &SvrParams<T>) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{SVR_MAGIC}")?;
    writeln!(f, "{}", params.w.len())?;
    for w in &params.w {
        writeln!(f, "{:?}", w.as_f64())?;
    }
    writeln!(f, "{:?}", params.b.as_f64())?;
    f.flush()?;
    Ok(())
}

pub fn load_svr<T: Scalar>(path: impl AsRef<Path>) -> Result<SvrParams<T>> {
    let lines: Vec<String> = BufReader::new(fs::File::open(path)?).lines().collect::<std::io::Result<_>>()?;
    let bad = |m: String| Error::Checkpoint(format!("svr model: {m}"));
    if lines.first().map(String::as_str) != Some(SVR_MAGIC) {
        return Err(bad("missing header".into()));
    }
    let n: usize = lines
        .get(1)
        .and_then(|l| l.trim().parse().ok())
        .ok_or_else(|| bad("missing weight count".into()))?;
    if lines.len() != n + 3 {
        return Err(bad(format!("expected {} lines, found {}", n + 3, lines.len())));
    }
    let parse = |s: &str| -> Result<T> {
        let v: f64 = s.trim().parse().map_err(|_| bad(format!("bad number {s:?}")))?;
        if !v.is_finite() {
            return Err(Error::NonFinite("svr model"));
        }
        Ok(T::lit(v))
    };
    let w = lines[2..2 + n].iter().map(|l| parse(l)).collect::<Result<Vec<T>>>()?;
    let b = parse(&lines[2 + n])?;
    Ok(SvrParams { w, b })
}
