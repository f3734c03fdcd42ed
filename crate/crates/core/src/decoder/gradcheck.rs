use super::model::{Decoder, Sample};
use super::params::{Gradients, TrainMode};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::schedule::PruneSchedule;

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub checked: usize,
}

/// Relative error with a floor on the denominator so near-zero entries do
/// not dominate.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compares analytic gradients of the response loss to central differences
/// with step `eps` for every trainable entry under `mode`.
pub fn grad_check<T: Scalar>(
    decoder: &Decoder<T>,
    sample: &Sample<T>,
    schedule: &PruneSchedule,
    mode: TrainMode,
    eps: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = decoder.loss_and_gradients(sample, schedule, mode)?;
    compare(decoder, sample, schedule, &grads, eps)
}

/// Same as [`grad_check`] but with `perturb` applied to the analytic
/// gradients first, to confirm the check can fail.
pub fn grad_check_with_fault<T: Scalar>(
    decoder: &Decoder<T>,
    sample: &Sample<T>,
    schedule: &PruneSchedule,
    mode: TrainMode,
    eps: f64,
    perturb: impl FnOnce(&mut Gradients<T>),
) -> Result<GradCheckReport> {
    let (_, mut grads) = decoder.loss_and_gradients(sample, schedule, mode)?;
    perturb(&mut grads);
    compare(decoder, sample, schedule, &grads, eps)
}

fn compare<T: Scalar>(
    decoder: &Decoder<T>,
    sample: &Sample<T>,
    schedule: &PruneSchedule,
    grads: &Gradients<T>,
    eps: f64,
) -> Result<GradCheckReport> {
    let mut probe = decoder.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_tensor: String::new(), checked: 0 };
    for (slot, g) in grads.iter() {
        for i in 0..g.len() {
            let orig = probe.params().tensor(slot).as_slice()[i];
            probe.params_mut().tensor_mut(slot).as_mut_slice()[i] = orig + T::of(eps);
            let plus = probe.loss(sample, schedule)?.as_f64();
            probe.params_mut().tensor_mut(slot).as_mut_slice()[i] = orig - T::of(eps);
            let minus = probe.loss(sample, schedule)?.as_f64();
            probe.params_mut().tensor_mut(slot).as_mut_slice()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = relative_error(g.as_slice()[i].as_f64(), numeric);
            report.checked += 1;
            if rel > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = rel;
                report.worst_tensor = decoder.params().name(slot).to_string();
            }
        }
    }
    Ok(report)
}
