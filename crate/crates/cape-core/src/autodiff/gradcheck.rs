//! Finite-difference verification of analytic gradients.
//!
//! Central differences (f(x+h) − f(x−h)) / 2h per coordinate, compared with
//! the tape's reverse-mode gradient. Relative error uses
//! |a − n| / max(|a|, |n|, 1) so near-zero gradients are judged absolutely.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{CoreError, Result};

#[derive(Debug)]
pub struct InputCheck {
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Coordinates whose relative error exceeded the tolerance.
    pub flagged: Vec<usize>,
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub inputs: Vec<InputCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs
            .iter()
            .map(|i| i.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn ok(&self) -> bool {
        self.inputs.iter().all(|i| i.flagged.is_empty())
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Check the gradient of a scalar-valued tensor function at `point`.
pub fn grad_check<F>(f: F, point: &[Tensor], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(CoreError::contract("grad_check step must be positive"));
    }

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| {
                let mut frozen = t.clone();
                frozen.requires_grad = false;
                tape.leaf(&frozen)
            })
            .collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(CoreError::contract(format!(
                "grad_check requires a scalar-valued function, got shape {:?}",
                tape.shape(out)
            )));
        }
        Ok(tape.value(out)[0])
    };

    // Analytic gradients in one reverse sweep.
    let mut tape = Tape::new();
    let vars: Vec<Var> = point
        .iter()
        .map(|t| {
            let mut tracked = t.clone();
            tracked.requires_grad = true;
            tape.leaf(&tracked)
        })
        .collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(CoreError::contract(format!(
            "grad_check requires a scalar-valued function, got shape {:?}",
            tape.shape(out)
        )));
    }
    let seed = Tensor::new(tape.shape(out).to_vec(), vec![1.0]).expect("scalar seed");
    tape.backward(out, &seed)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(point)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut inputs = Vec::with_capacity(point.len());
    let mut work: Vec<Tensor> = point.to_vec();
    for (i, a) in analytic.into_iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for j in 0..a.len() {
            let orig = work[i].values()[j];
            work[i].values_mut()[j] = orig + step;
            let fp = eval(&work)?;
            work[i].values_mut()[j] = orig - step;
            let fm = eval(&work)?;
            work[i].values_mut()[j] = orig;
            numeric[j] = (fp - fm) / (2.0 * step);
        }
        let mut max_rel = 0.0;
        let mut worst = 0;
        let mut flagged = Vec::new();
        for (j, (&av, &nv)) in a.iter().zip(&numeric).enumerate() {
            let e = rel_err(av, nv);
            if e > max_rel {
                max_rel = e;
                worst = j;
            }
            if e > tolerance {
                flagged.push(j);
            }
        }
        inputs.push(InputCheck {
            max_rel_err: max_rel,
            worst_coord: worst,
            analytic: a,
            numeric,
            flagged,
        });
    }

    Ok(GradCheckReport { tolerance, inputs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    #[test]
    fn sum_has_exact_gradient() {
        // dyadic point values and a power-of-two step keep the central
        // difference of a linear map exact in floating point
        let point = vec![Tensor::new(vec![2, 3], vec![0.25, -1.5, 4.0, 0.0, 2.5, -0.75]).unwrap()];
        let report = grad_check(
            |tape, vars| tape.sum_all(vars[0]),
            &point,
            2f64.powi(-16),
            1e-12,
        )
        .unwrap();
        assert_eq!(report.max_rel_err(), 0.0);
        assert!(report.inputs[0].analytic.iter().all(|&g| g == 1.0));
    }

    #[test]
    fn sum_of_sigmoid_matches_finite_differences() {
        let mut rng = stream(3, &[0]);
        let values: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let point = vec![Tensor::new(vec![1, 8], values).unwrap()];
        let report = grad_check(
            |tape, vars| {
                let s = tape.sigmoid(vars[0])?;
                tape.sum_all(s)
            },
            &point,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.ok(), "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn non_scalar_function_is_rejected() {
        let point = vec![Tensor::zeros(vec![2, 2])];
        let err = grad_check(|tape, vars| tape.relu(vars[0]), &point, 1e-5, 1e-6).unwrap_err();
        assert!(matches!(err, CoreError::Contract(_)));
    }
}
