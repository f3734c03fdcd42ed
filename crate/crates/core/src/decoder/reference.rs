use super::model::{Decoder, Sample};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::schedule::PruneSchedule;
use crate::tensor::{Matrix, Tape};

/// Result of the masked full-sequence forward.
#[derive(Clone, Debug)]
pub struct ReferenceOutput<T> {
    /// Logits at the output rows, `rows x vocab`.
    pub logits: Matrix<T>,
    /// Per layer, the output hidden rows of the tokens resident at that layer's input.
    pub resident_hidden: Vec<Matrix<T>>,
}

/// Runs every token through every layer and removes pruned vision tokens as
/// attention keys instead of dropping their rows.
///
/// Pruned rows keep being computed but nothing resident ever reads them, so
/// resident rows must match the pruned forward exactly up to rounding.
pub fn masked_reference<T: Scalar>(
    decoder: &Decoder<T>,
    sample: &Sample<T>,
    schedule: &PruneSchedule,
) -> Result<ReferenceOutput<T>> {
    decoder.validate_sample(sample)?;
    decoder.check_schedule(sample, schedule)?;
    let layout = sample.layout();
    let total = layout.total();
    let nv = layout.n_vision();
    let positions = layout.positions();

    let mut alive = vec![true; total];
    let mut resident: Vec<usize> = (0..nv).collect();
    let stages = schedule.stages();

    let mut tape = Tape::new();
    let mut x = decoder.embed_on(&mut tape, sample, &positions, None);
    let mut resident_hidden = Vec::with_capacity(schedule.depth());
    for l in 1..=schedule.depth() {
        let (out, _) = decoder.block_on(&mut tape, x, l - 1, &positions, Some(&alive), None)?;
        x = out;
        let rows: Vec<usize> = resident.iter().copied().chain(nv..total).collect();
        resident_hidden.push(tape.value(x).select_rows(&rows));
        if let Some((_, kept)) = stages.iter().find(|(layer, _)| *layer == l) {
            resident = kept.iter().map(|&i| resident[i]).collect();
            alive[..nv].iter_mut().for_each(|a| *a = false);
            for &r in &resident {
                alive[r] = true;
            }
        }
    }
    let out_rows = layout.output_rows();
    let logits_var = decoder.head_on(&mut tape, x, out_rows, None);
    Ok(ReferenceOutput { logits: tape.value(logits_var).clone(), resident_hidden })
}
