use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Which tokens are resident at some layer, in residence order: vision tokens
/// first, then prompt text, then response text.
///
/// Position ids are those of the unpruned sequence and never change.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SequenceLayout {
    vision_positions: Vec<usize>,
    text_start: usize,
    prompt_len: usize,
    response_len: usize,
}

impl SequenceLayout {
    pub fn initial(n_vision: usize, prompt_len: usize, response_len: usize) -> Self {
        Self { vision_positions: (0..n_vision).collect(), text_start: n_vision, prompt_len, response_len }
    }

    pub fn vision_positions(&self) -> &[usize] {
        &self.vision_positions
    }

    pub fn n_vision(&self) -> usize {
        self.vision_positions.len()
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn response_len(&self) -> usize {
        self.response_len
    }

    pub fn text_len(&self) -> usize {
        self.prompt_len + self.response_len
    }

    pub fn total(&self) -> usize {
        self.n_vision() + self.text_len()
    }

    /// Position id of every resident row.
    pub fn positions(&self) -> Vec<usize> {
        let text = self.text_start..self.text_start + self.text_len();
        self.vision_positions.iter().copied().chain(text).collect()
    }

    /// Residence rows whose logits predict the response tokens (next-token
    /// shifted), or the final row when there is no response.
    pub fn output_rows(&self) -> Vec<usize> {
        if self.response_len == 0 {
            return vec![self.total() - 1];
        }
        let first = self.n_vision() + self.prompt_len - 1;
        (first..first + self.response_len).collect()
    }

    /// Rows that survive keeping `keep` (indices into the vision span), and the new layout.
    pub fn keep(&self, keep: &[usize]) -> Result<(Vec<usize>, SequenceLayout)> {
        if keep.is_empty() {
            return Err(Error::ScheduleDegenerate("pruning would remove every vision token".into()));
        }
        if keep.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("kept indices must be strictly increasing");
        }
        if let Some(&i) = keep.iter().find(|&&i| i >= self.n_vision()) {
            return invalid(format!("kept index {i} lies outside the vision span of {}", self.n_vision()));
        }
        let rows: Vec<usize> = keep.iter().copied().chain(self.n_vision()..self.total()).collect();
        let layout = SequenceLayout {
            vision_positions: keep.iter().map(|&i| self.vision_positions[i]).collect(),
            ..self.clone()
        };
        Ok((rows, layout))
    }

    /// Replaces the vision span with tokens at the given position ids.
    pub(crate) fn with_vision_positions(&self, positions: Vec<usize>) -> Result<SequenceLayout> {
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("vision positions must be strictly increasing");
        }
        if positions.is_empty() {
            return Err(Error::ScheduleDegenerate("no vision tokens left".into()));
        }
        Ok(SequenceLayout { vision_positions: positions, ..self.clone() })
    }
}

/// Drops vision rows not listed in `keep`; text rows and survivor position ids are untouched.
pub fn prune_states<T: Scalar>(
    hidden: &Matrix<T>,
    layout: &SequenceLayout,
    keep: &[usize],
) -> Result<(Matrix<T>, SequenceLayout)> {
    if hidden.rows() != layout.total() {
        return invalid(format!("{} hidden rows for a layout of {}", hidden.rows(), layout.total()));
    }
    let (rows, next) = layout.keep(keep)?;
    Ok((hidden.select_rows(&rows), next))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keep_all_is_identity() {
        let layout = SequenceLayout::initial(4, 2, 1);
        let hidden = Matrix::<f64>::from_fn(7, 3, |i, j| (i * 3 + j) as f64);
        let (h, l) = prune_states(&hidden, &layout, &[0, 1, 2, 3]).unwrap();
        assert_eq!(h, hidden);
        assert_eq!(l, layout);
    }

    #[test]
    fn keep_odd_rows_of_eight() {
        let layout = SequenceLayout::initial(8, 2, 1);
        let hidden = Matrix::<f64>::from_fn(11, 2, |i, _| i as f64);
        let (h, l) = prune_states(&hidden, &layout, &[1, 3, 5, 7]).unwrap();
        assert_eq!(h.rows(), 7);
        assert_eq!(l.vision_positions(), &[1, 3, 5, 7]);
        assert_eq!(h.row(4), &[8.0, 8.0]);
        assert_eq!(l.positions(), vec![1, 3, 5, 7, 8, 9, 10]);

        // A second stage keeps original ids, not residence indices.
        let (_, l2) = prune_states(&h, &l, &[1, 3]).unwrap();
        assert_eq!(l2.vision_positions(), &[3, 7]);
    }

    #[test]
    fn rejected_keeps() {
        let layout = SequenceLayout::initial(4, 2, 0);
        let hidden = Matrix::<f64>::zeros(6, 2);
        assert!(matches!(prune_states(&hidden, &layout, &[]), Err(Error::ScheduleDegenerate(_))));
        assert!(matches!(prune_states(&hidden, &layout, &[1, 4]), Err(Error::InvalidArgument(_))));
        assert!(prune_states(&hidden, &layout, &[2, 1]).is_err());
    }

    #[test]
    fn output_rows() {
        assert_eq!(SequenceLayout::initial(3, 2, 2).output_rows(), vec![4, 5]);
        assert_eq!(SequenceLayout::initial(3, 2, 0).output_rows(), vec![4]);
    }
}
