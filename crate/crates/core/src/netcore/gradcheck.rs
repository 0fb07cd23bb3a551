use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::loss::{cross_entropy, smooth_l1, smooth_l1_grad};
use super::network::{Act, DropoutMode, Network, Tape};

/// Scalar loss applied to the network output during a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub enum GradLoss {
    /// `0.5 * sum (y - t)^2`.
    SumSquares(Vec<f64>),
    /// Sum of smooth-L1 terms against `target`.
    SmoothL1 { target: Vec<f64>, alpha: f64 },
    /// Cross entropy against a class index.
    CrossEntropy(usize),
}

impl GradLoss {
    pub fn value_and_grad(&self, y: &[f64]) -> Result<(f64, Vec<f64>)> {
        let check = |t: &[f64]| {
            if t.len() == y.len() {
                Ok(())
            } else {
                Err(Error::DimMismatch(format!("target has {} values, output {}", t.len(), y.len())))
            }
        };
        match self {
            GradLoss::SumSquares(t) => {
                check(t)?;
                let d: Vec<f64> = y.iter().zip(t).map(|(a, b)| a - b).collect();
                Ok((0.5 * d.iter().map(|v| v * v).sum::<f64>(), d))
            }
            GradLoss::SmoothL1 { target, alpha } => {
                check(target)?;
                let mut loss = 0.0;
                let mut grad = Vec::with_capacity(y.len());
                for (&a, &b) in y.iter().zip(target) {
                    loss += smooth_l1(a, b, *alpha)?;
                    grad.push(smooth_l1_grad(a, b, *alpha)?);
                }
                Ok((loss, grad))
            }
            GradLoss::CrossEntropy(class) => cross_entropy(y, *class),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// Same measure restricted to the input gradient.
    pub input_rel_error: f64,
    /// Number of scalar derivatives compared, input included.
    pub n_checked: usize,
    /// `(parameter index, element)` of the worst parameter derivative.
    pub worst: Option<(usize, usize)>,
}

/// Step of the central differences.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-6;

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients with central differences over every
/// parameter and every input element. With `dropout_seed` set, one train-
/// mode pass draws dropout masks which are then frozen for all evaluations;
/// otherwise dropout runs in eval mode.
pub fn grad_check(
    net: &mut Network,
    input: &Act,
    loss: &GradLoss,
    dropout_seed: Option<u64>,
) -> Result<GradCheckReport> {
    let base = match dropout_seed {
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            net.forward(input.clone(), DropoutMode::Train(&mut rng))?
        }
        None => net.forward(input.clone(), DropoutMode::Eval)?,
    };
    let masks: Vec<Option<Vec<f64>>> = base.masks().to_vec();
    let (_, g_out) = loss.value_and_grad(base.output())?;
    net.zero_grad();
    let grad_input = net.backward(&base, &g_out)?;
    let analytic: Vec<Vec<f64>> = net.params().iter().map(|p| p.grad.clone()).collect();
    net.zero_grad();

    let owners = net.param_layers();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        input_rel_error: 0.0,
        n_checked: 0,
        worst: None,
    };
    for (pi, grads) in analytic.iter().enumerate() {
        let layer = owners[pi];
        // Layers before `layer` never see this parameter.
        let mut tape: Tape = base.clone();
        for (j, &a) in grads.iter().enumerate() {
            let orig = net.params()[pi].value[j];
            let mut eval_at = |v: f64, net: &mut Network| -> Result<f64> {
                net.params_mut()[pi].value[j] = v;
                net.forward_from(layer, &mut tape, DropoutMode::Replay(&masks))?;
                Ok(loss.value_and_grad(tape.output())?.0)
            };
            let plus = eval_at(orig + FD_STEP, net)?;
            let minus = eval_at(orig - FD_STEP, net)?;
            net.params_mut()[pi].value[j] = orig;
            let e = rel_error(a, (plus - minus) / (2.0 * FD_STEP));
            report.n_checked += 1;
            if e > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(e);
                report.worst = Some((pi, j));
            }
        }
    }

    let x0 = input.data().to_vec();
    for (j, &a) in grad_input.iter().enumerate() {
        let at = |v: f64| -> Result<f64> {
            let mut x = x0.clone();
            x[j] = v;
            let act = match input {
                Act::Spatial(d, _) => Act::Spatial(*d, x),
                Act::Flat(_) => Act::Flat(x),
            };
            let t = net.forward(act, DropoutMode::Replay(&masks))?;
            Ok(loss.value_and_grad(t.output())?.0)
        };
        let n = (at(x0[j] + FD_STEP)? - at(x0[j] - FD_STEP)?) / (2.0 * FD_STEP);
        report.input_rel_error = report.input_rel_error.max(rel_error(a, n));
        report.n_checked += 1;
    }
    report.max_rel_error = report.max_rel_error.max(report.input_rel_error);
    Ok(report)
}
