use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::decoder::Sample;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// What the question asks about the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// One cell carries a marker; answer its quadrant.
    MarkerQuadrant,
    /// One cell carries a marker; answer its cell label.
    MarkerCell,
    /// Every cell has a color and a shape; the prompt names a pair that
    /// exactly one cell has, and the answer is that cell's label.
    Conjunction,
    /// Every cell has two attributes `a, b`; the prompt names a key and the
    /// answer is the one cell with `(a + b) mod colors == key`.
    ModularKey,
}

/// Procedural grid scenes. One vision token per cell, in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub grid: usize,
    #[serde(default = "default_attrs")]
    pub colors: usize,
    #[serde(default = "default_attrs")]
    pub shapes: usize,
    /// Standard deviation of distractor noise.
    #[serde(default)]
    pub noise: f64,
    /// Width of each vision feature row; at least [`TaskSpec::feature_dims`].
    pub vision_width: usize,
}

fn default_attrs() -> usize {
    4
}

/// Quadrant labels in token order.
pub const QUADRANTS: [&str; 4] = ["top-left", "top-right", "bottom-left", "bottom-right"];

impl TaskSpec {
    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    /// Row one-hot, column one-hot, marker flag, color one-hot, shape one-hot.
    pub fn feature_dims(&self) -> usize {
        2 * self.grid + 1 + self.colors + self.shapes
    }

    pub fn cell_token(&self, cell: usize) -> usize {
        cell
    }

    pub fn quadrant_token(&self, q: usize) -> usize {
        self.cells() + q
    }

    pub fn color_token(&self, c: usize) -> usize {
        self.cells() + 4 + c
    }

    pub fn shape_token(&self, s: usize) -> usize {
        self.cells() + 4 + self.colors + s
    }

    pub fn question_token(&self) -> usize {
        self.cells() + 4 + self.colors + self.shapes
    }

    pub fn required_vocab(&self) -> usize {
        self.question_token() + 1
    }

    /// Number of distinct answers.
    pub fn num_labels(&self) -> usize {
        match self.kind {
            TaskKind::MarkerQuadrant => 4,
            _ => self.cells(),
        }
    }

    /// Token ids a response may take, ascending.
    pub fn answer_tokens(&self) -> Vec<usize> {
        match self.kind {
            TaskKind::MarkerQuadrant => (0..4).map(|q| self.quadrant_token(q)).collect(),
            _ => (0..self.cells()).map(|c| self.cell_token(c)).collect(),
        }
    }

    pub fn prompt_len(&self) -> usize {
        match self.kind {
            TaskKind::MarkerQuadrant | TaskKind::MarkerCell => 1,
            TaskKind::Conjunction => 3,
            TaskKind::ModularKey => 2,
        }
    }

    pub fn quadrant_of(&self, cell: usize) -> usize {
        let (r, c) = (cell / self.grid, cell % self.grid);
        2 * usize::from(2 * r >= self.grid) + usize::from(2 * c >= self.grid)
    }

    /// Checks the spec against a model vocabulary and vision width.
    pub fn validate(&self, vocab: usize, vision_width: usize) -> Result<()> {
        if self.grid == 0 || self.colors == 0 || self.shapes == 0 {
            return Err(Error::Config("grid, colors and shapes must be positive".into()));
        }
        if self.kind == TaskKind::MarkerQuadrant && self.grid % 2 != 0 {
            return Err(Error::Config("quadrant answers need an even grid".into()));
        }
        if self.kind == TaskKind::Conjunction && self.colors * self.shapes < 2 {
            return Err(Error::Config("conjunction needs at least two color/shape pairs".into()));
        }
        if self.kind == TaskKind::ModularKey && (self.colors < 2 || self.shapes < self.colors) {
            return Err(Error::Config("modular keys need at least two values and shapes >= colors".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise {} must be finite and non-negative", self.noise)));
        }
        if vocab < self.required_vocab() {
            return Err(Error::Config(format!(
                "vocab {vocab} too small for {} task labels (needs {})",
                self.num_labels(),
                self.required_vocab()
            )));
        }
        if self.vision_width != vision_width || vision_width < self.feature_dims() {
            return Err(Error::Config(format!(
                "vision width {vision_width} must equal the task's {} and hold {} feature dims",
                self.vision_width,
                self.feature_dims()
            )));
        }
        Ok(())
    }
}

/// A generated scene with its answer.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample<T> {
    pub sample: Sample<T>,
    /// Cell the answer refers to.
    pub cell: usize,
    /// Index in the generating stream; `sample_rng(seed, index)` regenerates it.
    pub index: u64,
}

impl<T> SyntheticSample<T> {
    pub fn answer(&self) -> &[usize] {
        &self.sample.response
    }
}

/// Independent, reproducible generator for sample `index` of stream `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Sample `index` of stream `seed`.
pub fn gen_indexed<T: Scalar>(seed: u64, index: u64, spec: &TaskSpec) -> SyntheticSample<T> {
    let mut s = gen_sample(&mut sample_rng(seed, index), spec);
    s.index = index;
    s
}

/// Draws one scene. The answer cell is uniform over the grid.
pub fn gen_sample<T: Scalar>(rng: &mut impl Rng, spec: &TaskSpec) -> SyntheticSample<T> {
    let n = spec.cells();
    let g = spec.grid;
    let cell = rng.random_range(0..n);
    let mut feats = Matrix::<f64>::zeros(n, spec.vision_width);
    let marker_dim = 2 * g;
    let color_off = marker_dim + 1;
    let shape_off = color_off + spec.colors;
    for i in 0..n {
        let row = feats.row_mut(i);
        row[i / g] = 1.0;
        row[g + i % g] = 1.0;
    }

    let (prompt, response) = match spec.kind {
        TaskKind::MarkerQuadrant | TaskKind::MarkerCell => {
            feats.row_mut(cell)[marker_dim] = 1.0;
            let answer = match spec.kind {
                TaskKind::MarkerQuadrant => spec.quadrant_token(spec.quadrant_of(cell)),
                _ => spec.cell_token(cell),
            };
            (vec![spec.question_token()], vec![answer])
        }
        TaskKind::Conjunction => {
            let (qc, qs) = (rng.random_range(0..spec.colors), rng.random_range(0..spec.shapes));
            for i in 0..n {
                let (c, s) = if i == cell {
                    (qc, qs)
                } else {
                    loop {
                        let pair = (rng.random_range(0..spec.colors), rng.random_range(0..spec.shapes));
                        if pair != (qc, qs) {
                            break pair;
                        }
                    }
                };
                feats.row_mut(i)[color_off + c] = 1.0;
                feats.row_mut(i)[shape_off + s] = 1.0;
            }
            (vec![spec.color_token(qc), spec.shape_token(qs), spec.question_token()], vec![spec.cell_token(cell)])
        }
        TaskKind::ModularKey => {
            let m = spec.colors;
            let key = rng.random_range(0..m);
            for i in 0..n {
                let a = rng.random_range(0..m);
                let b = if i == cell {
                    (key + m - a) % m
                } else {
                    let mut b = rng.random_range(0..m - 1);
                    if (a + b) % m == key {
                        b = m - 1;
                    }
                    b
                };
                feats.row_mut(i)[color_off + a] = 1.0;
                feats.row_mut(i)[shape_off + b] = 1.0;
            }
            (vec![spec.color_token(key), spec.question_token()], vec![spec.cell_token(cell)])
        }
    };

    if spec.noise > 0.0 {
        for i in 0..n {
            let row = feats.row_mut(i);
            if i != cell {
                let z: f64 = StandardNormal.sample(rng);
                row[marker_dim] += spec.noise * z;
            }
            for v in &mut row[spec.feature_dims()..] {
                let z: f64 = StandardNormal.sample(rng);
                *v = spec.noise * z;
            }
        }
    }

    SyntheticSample { sample: Sample { vision: feats.cast(), prompt, response }, cell, index: 0 }
}
