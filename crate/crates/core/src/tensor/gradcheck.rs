//! Central finite-difference gradient checks in 64-bit shadow mode.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest per-input relative error
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, floor)` in the
    /// Euclidean norm over each input tensor. `floor` is a small fraction of
    /// the largest gradient norm over all inputs, so inputs whose true
    /// gradient vanishes (a bias feeding a normalization) are judged on
    /// absolute error against the overall gradient scale.
    pub max_rel_error: f64,
    /// Index of the input attaining `max_rel_error`.
    pub worst_input: usize,
    pub coordinates: usize,
}

const FLOOR_FRACTION: f64 = 1e-6;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(floor).max(f64::MIN_POSITIVE)
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences with the given `step`, perturbing every coordinate of every input.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(Error::contract("gradient check needs a scalar function"));
        }
        Ok(v.data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut coords = 0;
    let mut probe = inputs.to_vec();
    let mut pairs = Vec::with_capacity(vars.len());
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad_or_zero(*v);
        let mut numeric = vec![0.0; analytic.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + step;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - step;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        coords += numeric.len();
        pairs.push((analytic.into_data(), numeric));
    }
    let scale = pairs
        .iter()
        .map(|(a, n)| norm(a).max(norm(n)))
        .fold(0.0, f64::max);
    let mut worst: f64 = 0.0;
    let mut worst_input = 0;
    for (i, (a, n)) in pairs.iter().enumerate() {
        let err = rel_error(a, n, FLOOR_FRACTION * scale);
        if err > worst {
            worst = err;
            worst_input = i;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        worst_input,
        coordinates: coords,
    })
}
