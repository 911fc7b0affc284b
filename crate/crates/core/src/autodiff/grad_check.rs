//! Central finite-difference verification of [`Tape::backward`].

use serde::Serialize;

use super::tape::{ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A collection of named trainable tensors with a fixed order.
///
/// The position of a tensor in [`ParamTensors::named`] is its [`ParamId`].
pub trait ParamTensors<T: Scalar> {
    fn named(&self) -> Vec<(&'static str, &Tensor<T>)>;
    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)>;

    fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Per-parameter outcome of a gradient check.
#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Magnitude below which errors are measured in absolute terms.
///
/// Central differences on an O(1) loss carry about `eps_machine / h` of
/// rounding noise, so a pure relative error is meaningless for gradients
/// near zero.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares reverse-mode gradients of `loss` against central differences
/// with step `h` for every element of every parameter in `params`.
///
/// `loss` records a forward pass on the given tape and returns its scalar
/// output node; it must be deterministic.
pub fn grad_check<T, P, F>(params: &mut P, loss: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    P: ParamTensors<T>,
    F: for<'a> Fn(&mut Tape<'a, T>, &'a P) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let out = loss(&mut tape, &*params)?;
        tape.backward(out)?
    };
    let eval = |p: &P| -> Result<f64> {
        let mut tape = Tape::new();
        let out = loss(&mut tape, p)?;
        Ok(tape.value(out).item().as_f64())
    };

    let names: Vec<&'static str> = params.named().iter().map(|(n, _)| *n).collect();
    let mut checks = Vec::with_capacity(names.len());
    for (idx, name) in names.iter().enumerate() {
        let grad = analytic
            .get(ParamId(idx))
            .ok_or_else(|| Error::InvalidArgument(format!("parameter {name} not registered on tape")))?
            .clone();
        let n = grad.len();
        let mut max_abs = 0.0f64;
        let mut max_rel = 0.0f64;
        for e in 0..n {
            let orig = params.named()[idx].1.as_slice()[e];
            params.named_mut()[idx].1.as_mut_slice()[e] = orig + T::lit(h);
            let plus = eval(params)?;
            params.named_mut()[idx].1.as_mut_slice()[e] = orig - T::lit(h);
            let minus = eval(params)?;
            params.named_mut()[idx].1.as_mut_slice()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.as_slice()[e].as_f64();
            max_abs = max_abs.max((a - numeric).abs());
            max_rel = max_rel.max(relative_error(a, numeric));
        }
        checks.push(ParamCheck {
            name: (*name).to_string(),
            elements: n,
            max_abs_err: max_abs,
            max_rel_err: max_rel,
        });
    }
    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        step: h,
        tolerance: tol,
        params: checks,
        max_rel_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic {
        a: Tensor<f64>,
        b: Tensor<f64>,
    }

    impl ParamTensors<f64> for Quadratic {
        fn named(&self) -> Vec<(&'static str, &Tensor<f64>)> {
            vec![("a", &self.a), ("b", &self.b)]
        }
        fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<f64>)> {
            vec![("a", &mut self.a), ("b", &mut self.b)]
        }
    }

    #[test]
    fn quadratic_toy_model() {
        let mut q = Quadratic {
            a: Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.1, 0.7, -0.3]).unwrap(),
            b: Tensor::vector(vec![0.2, -0.4]).unwrap(),
        };
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap();
        let y = Tensor::vector(vec![0.3, 0.9]).unwrap();
        let report = grad_check(
            &mut q,
            |tape, p| {
                let a = tape.param(ParamId(0), &p.a);
                let b = tape.param(ParamId(1), &p.b);
                let xv = tape.input(x.clone());
                let yv = tape.input(y.clone());
                let ax = tape.matmul(a, xv)?;
                let pred = tape.add(ax, b)?;
                tape.mse(pred, yv)
            },
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.params.len(), 2);
        assert_eq!(report.params[0].elements, 6);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 2e-9) - 1e-3).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
