//! Central finite-difference check of the distillation-loss gradient.
//!
//! The numerical side evaluates the loss through the value-only forward
//! pass and never touches the tape.

use serde::{Deserialize, Serialize};

use crate::distill::kd_loss;
use crate::error::Result;
use crate::nets::{NetSpec, Student};
use crate::numcore::{Rng, Tensor};

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// zero up to round-off compare in absolute terms.
    pub floor: f64,
    /// Test hook: added to every analytic gradient entry before comparison.
    pub fault: Option<f64>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-5,
            floor: 1e-4,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub n_params: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Analytic gradient of the distillation loss of `student` on `images`
/// against `targets`, in parameter-tensor order.
pub fn analytic_gradients(student: &Student<f64>, images: &Tensor<f64>, targets: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
    let mut fwd = student.embed_taped(images)?;
    let loss = kd_loss(&mut fwd.tape, targets, fwd.output)?;
    let mut grads = fwd.tape.backward(loss)?;
    Ok(fwd
        .params
        .iter()
        .zip(student.params().tensors())
        .map(|(&v, t)| grads.take_or_zeros(v, t.shape()))
        .collect())
}

/// `L(plus) − L(minus)` for the distillation loss, summed as
/// `(p − m)(p + m − 2t)` per entry so the two large losses never cancel.
pub fn loss_difference(plus: &Tensor<f64>, minus: &Tensor<f64>, targets: &Tensor<f64>) -> f64 {
    let total: f64 = plus
        .data()
        .iter()
        .zip(minus.data())
        .zip(targets.data())
        .map(|((p, m), t)| (p - m) * (p + m - 2.0 * t))
        .sum();
    total / plus.rows() as f64
}

/// Compares analytic and central-difference gradients on every parameter.
pub fn check_student(
    student: &Student<f64>,
    images: &Tensor<f64>,
    targets: &Tensor<f64>,
    opts: &GradcheckOptions,
) -> Result<Vec<TensorCheck>> {
    let analytic = analytic_gradients(student, images, targets)?;
    let mut probe = student.clone();
    let mut out = Vec::with_capacity(analytic.len());

    for (ti, grad) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for j in 0..grad.len() {
            let original = probe.params().tensors()[ti].data()[j];
            let mut embed_at = |v: f64| -> Result<Tensor<f64>> {
                probe.params_mut().tensors_mut()[ti].data_mut()[j] = v;
                probe.forward(images)
            };
            let plus = embed_at(original + opts.step)?;
            let minus = embed_at(original - opts.step)?;
            probe.params_mut().tensors_mut()[ti].data_mut()[j] = original;
            let numeric = loss_difference(&plus, &minus, targets) / (2.0 * opts.step);
            let a = grad.data()[j] + opts.fault.unwrap_or(0.0);
            worst = worst.max(relative_error(a, numeric, opts.floor));
        }
        let kind = if ti % 2 == 0 { "weight" } else { "bias" };
        out.push(TensorCheck {
            name: format!("layer{}.{kind}", ti / 2),
            n_params: grad.len(),
            max_rel_error: worst,
            passed: worst < opts.tolerance,
        });
    }
    Ok(out)
}

/// Layer widths of the default toy student.
pub const TOY_WIDTHS: [usize; 4] = [16, 12, 10, 8];
pub const TOY_BATCH: usize = 8;

pub fn toy_spec(activation: crate::numcore::Activation) -> Result<NetSpec> {
    NetSpec::uniform(TOY_WIDTHS.to_vec(), activation, crate::nets::OutputActivation::None)
}

/// Seeded toy problem: student from `seed`, Gaussian images and targets.
pub fn check_seeded(spec: &NetSpec, seed: u64, batch: usize, opts: &GradcheckOptions) -> Result<Vec<TensorCheck>> {
    let student = Student::init(spec, seed);
    let mut rng = Rng::new(seed).derive(0x4743);
    let images = rng.sample_normal::<f64>(&[batch, spec.input_dim()]);
    let targets = rng.sample_normal::<f64>(&[batch, spec.output_dim()]);
    check_student(&student, &images, &targets, opts)
}
