use super::task::{gen_indexed, TaskSpec};
use crate::decoder::{Decoder, ForwardOptions, Sample, ScheduleReducer, TokenReducer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::PruneSchedule;

/// Stream offset separating held-out samples from training samples of the same seed.
pub const EVAL_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

/// Seed of the held-out stream for a given run seed.
pub fn eval_seed(seed: u64) -> u64 {
    seed ^ EVAL_STREAM
}

/// Exact-match accuracy of greedy responses on `n` samples of stream `seed`,
/// with a fresh reducer per sample from `make_reducer(index)`.
///
/// Decoding is restricted to the task's answer tokens, so a model that has
/// learned nothing scores about `1 / labels`.
pub fn evaluate_with<T: Scalar, R: TokenReducer<T>>(
    decoder: &Decoder<T>,
    task: &TaskSpec,
    n: usize,
    seed: u64,
    opts: ForwardOptions,
    mut make_reducer: impl FnMut(u64) -> R,
) -> Result<f64> {
    task.validate(decoder.config().vocab, decoder.config().vision_width)?;
    if n == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one sample".into()));
    }
    let labels = task.answer_tokens();
    let mut correct = 0usize;
    for i in 0..n as u64 {
        let s = gen_indexed::<T>(seed, i, task);
        let mut reducer = make_reducer(i);
        let mut text = s.sample.prompt.clone();
        for _ in 0..s.sample.response.len() {
            let query = Sample { vision: s.sample.vision.clone(), prompt: text.clone(), response: Vec::new() };
            let pass = decoder.forward(&query, &mut reducer, opts)?;
            let row = pass.logits().row(0);
            let best = labels.iter().copied().reduce(|a, b| if row[b] > row[a] { b } else { a }).expect("labels");
            text.push(best);
        }
        correct += usize::from(text[s.sample.prompt.len()..] == s.sample.response[..]);
    }
    Ok(correct as f64 / n as f64)
}

/// Accuracy under position-based pruning with `schedule`.
pub fn evaluate<T: Scalar>(
    decoder: &Decoder<T>,
    schedule: &PruneSchedule,
    task: &TaskSpec,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if schedule.depth() != decoder.config().depth || schedule.n0() != task.cells() {
        return Err(Error::Config(format!(
            "schedule (n0 {}, depth {}) does not fit the decoder depth {} and {} task cells",
            schedule.n0(),
            schedule.depth(),
            decoder.config().depth,
            task.cells()
        )));
    }
    evaluate_with(decoder, task, n, seed, ForwardOptions::default(), |_| ScheduleReducer::new(schedule))
}
