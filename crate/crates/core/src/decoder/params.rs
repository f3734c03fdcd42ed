use rand::{Rng, SeedableRng};

use super::config::{ModelConfig, PositionEncoding};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Role of a parameter tensor, which decides whether it trains under a frozen backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Backbone,
    Projector,
    Adapter,
}

/// Which tensors receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Every tensor.
    Full,
    /// Only adapters and the vision projector.
    FrozenBackbone,
}

impl TrainMode {
    pub fn trains(self, kind: TensorKind) -> bool {
        match self {
            TrainMode::Full => true,
            TrainMode::FrozenBackbone => kind != TensorKind::Backbone,
        }
    }
}

/// Adapted projections in attention, in slot order.
pub const ADAPTED: [&str; 4] = ["wq", "wk", "wv", "wo"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoraSlots {
    pub down: usize,
    pub up: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSlots {
    pub attn_norm: usize,
    /// `wq, wk, wv, wo`.
    pub proj: [usize; 4],
    pub ffn_norm: usize,
    pub w_gate: usize,
    pub w_up: Option<usize>,
    pub w_down: usize,
    pub lora: Option<[LoraSlots; 4]>,
}

/// Slot numbers of every named tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamIndex {
    pub embedding: usize,
    pub projector: usize,
    pub projector_bias: usize,
    pub position_table: Option<usize>,
    pub layers: Vec<LayerSlots>,
    pub final_norm: usize,
    pub head: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: TensorKind,
    pub tensor: Matrix<T>,
}

/// Flat, ordered store of named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T> {
    index: ParamIndex,
    entries: Vec<ParamEntry<T>>,
}

struct Builder<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> Builder<T> {
    fn add(&mut self, name: impl Into<String>, kind: TensorKind, tensor: Matrix<T>) -> usize {
        self.entries.push(ParamEntry { name: name.into(), kind, tensor });
        self.entries.len() - 1
    }
}

impl<T: Scalar> Parameters<T> {
    /// Random initialization. Adapter up-matrices start at zero so a fresh
    /// adapter leaves the decoder unchanged.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let f = config.ffn_width;
        let std_d = 1.0 / (d as f64).sqrt();
        let std_f = 1.0 / (f as f64).sqrt();
        let mut b = Builder { entries: Vec::new() };
        use TensorKind::*;

        let embedding = b.add("embedding", Backbone, Matrix::randn(config.vocab, d, 1.0, rng));
        let projector = b.add(
            "projector",
            Projector,
            Matrix::randn(config.vision_width, d, 1.0 / (config.vision_width as f64).sqrt(), rng),
        );
        let projector_bias = b.add("projector_bias", Projector, Matrix::zeros(1, d));
        let position_table = (config.positions == PositionEncoding::Learned)
            .then(|| b.add("position_table", Backbone, Matrix::randn(config.max_positions, d, 0.5, rng)));

        let mut layers = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let p = |s: &str| format!("layers.{l}.{s}");
            let attn_norm = b.add(p("attn_norm"), Backbone, Matrix::filled(1, d, T::one()));
            let proj = ADAPTED.map(|name| b.add(p(name), Backbone, Matrix::randn(d, d, std_d, rng)));
            let ffn_norm = b.add(p("ffn_norm"), Backbone, Matrix::filled(1, d, T::one()));
            let w_gate = b.add(p("w_gate"), Backbone, Matrix::randn(d, f, std_d, rng));
            let w_up = config.gated_ffn.then(|| b.add(p("w_up"), Backbone, Matrix::randn(d, f, std_d, rng)));
            let w_down = b.add(p("w_down"), Backbone, Matrix::randn(f, d, std_f, rng));
            layers.push(LayerSlots { attn_norm, proj, ffn_norm, w_gate, w_up, w_down, lora: None });
        }
        let final_norm = b.add("final_norm", Backbone, Matrix::filled(1, d, T::one()));
        let head = b.add("head", Backbone, Matrix::randn(d, config.vocab, std_d, rng));

        let index = ParamIndex { embedding, projector, projector_bias, position_table, layers, final_norm, head };
        let mut params = Self { index, entries: b.entries };
        if config.lora_rank > 0 {
            params.attach_adapters(config.lora_rank, d, rng);
        }
        Ok(params)
    }

    /// Correctly shaped and named store whose values are meant to be overwritten.
    pub(crate) fn skeleton(config: &ModelConfig) -> Result<Self> {
        Self::init(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))
    }

    /// Appends adapter pairs to every attention projection (down random, up zero).
    pub(crate) fn attach_adapters(&mut self, rank: usize, width: usize, rng: &mut impl Rng) {
        let std = 1.0 / (width as f64).sqrt();
        for l in 0..self.index.layers.len() {
            let mut slots = [LoraSlots { down: 0, up: 0 }; 4];
            for (s, name) in slots.iter_mut().zip(ADAPTED) {
                s.down = self.push(format!("layers.{l}.lora.{name}.down"), TensorKind::Adapter, Matrix::randn(width, rank, std, rng));
                s.up = self.push(format!("layers.{l}.lora.{name}.up"), TensorKind::Adapter, Matrix::zeros(rank, width));
            }
            self.index.layers[l].lora = Some(slots);
        }
    }

    /// Removes adapter tensors; slots of the remaining tensors are unchanged
    /// because adapters are always stored last.
    pub(crate) fn detach_adapters(&mut self) {
        self.entries.retain(|e| e.kind != TensorKind::Adapter);
        for layer in &mut self.index.layers {
            layer.lora = None;
        }
    }

    fn push(&mut self, name: String, kind: TensorKind, tensor: Matrix<T>) -> usize {
        self.entries.push(ParamEntry { name, kind, tensor });
        self.entries.len() - 1
    }

    pub fn index(&self) -> &ParamIndex {
        &self.index
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn tensor(&self, slot: usize) -> &Matrix<T> {
        &self.entries[slot].tensor
    }

    pub fn tensor_mut(&mut self, slot: usize) -> &mut Matrix<T> {
        &mut self.entries[slot].tensor
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.entries[slot].name
    }

    pub fn kind(&self, slot: usize) -> TensorKind {
        self.entries[slot].kind
    }

    pub fn slot_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.is_finite())
    }

    /// Replaces tensor values by name, checking that names and shapes line up
    /// exactly with this store.
    pub fn load_named(&mut self, named: Vec<(String, Matrix<T>)>) -> Result<()> {
        if named.len() != self.entries.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                self.entries.len(),
                named.len()
            )));
        }
        for (entry, (name, tensor)) in self.entries.iter_mut().zip(named) {
            if entry.name != name || entry.tensor.shape() != tensor.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} {:?} does not match {} {:?}",
                    tensor.shape(),
                    entry.name,
                    entry.tensor.shape()
                )));
            }
            entry.tensor = tensor;
        }
        Ok(())
    }
}

/// Per-slot gradients; `None` for tensors that do not train.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    slots: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Zero buffers for every tensor `mode` trains.
    pub fn zeros_like(params: &Parameters<T>, mode: TrainMode) -> Self {
        let slots = params
            .entries()
            .iter()
            .map(|e| mode.trains(e.kind).then(|| Matrix::zeros(e.tensor.rows(), e.tensor.cols())))
            .collect();
        Self { slots }
    }

    pub(crate) fn from_tape(params: &Parameters<T>, mode: TrainMode, found: Vec<(usize, Matrix<T>)>) -> Self {
        let mut g = Self::zeros_like(params, mode);
        for (slot, m) in found {
            if let Some(buf) = g.slots[slot].as_mut() {
                buf.add_assign(&m);
            }
        }
        g
    }

    pub fn get(&self, slot: usize) -> Option<&Matrix<T>> {
        self.slots[slot].as_ref()
    }

    pub fn get_mut(&mut self, slot: usize) -> Option<&mut Matrix<T>> {
        self.slots[slot].as_mut()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Matrix<T>)> {
        self.slots.iter().enumerate().filter_map(|(i, m)| m.as_ref().map(|m| (i, m)))
    }

    /// `self += alpha * other`, slot by slot.
    pub fn accumulate(&mut self, other: &Self, alpha: T) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                a.axpy(alpha, b);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_and_adapters() {
        let mut cfg = ModelConfig::toy();
        cfg.lora_rank = 2;
        let p = Parameters::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.name(p.index().head), "head");
        let lora = p.index().layers[1].lora.unwrap();
        assert_eq!(p.name(lora[2].up), "layers.1.lora.wv.up");
        assert_eq!(p.tensor(lora[2].up).max_abs(), 0.0);
        assert_eq!(p.tensor(lora[0].down).shape(), (16, 2));

        let g = Gradients::zeros_like(&p, TrainMode::FrozenBackbone);
        assert!(g.get(p.index().head).is_none());
        assert!(g.get(p.index().projector).is_some());
        assert!(g.get(lora[0].down).is_some());
    }

    #[test]
    fn detach_keeps_backbone_slots() {
        let mut cfg = ModelConfig::toy();
        cfg.lora_rank = 2;
        let mut p = Parameters::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let head = p.index().head;
        p.detach_adapters();
        assert_eq!(p.name(head), "head");
        assert!(p.entries().iter().all(|e| e.kind != TensorKind::Adapter));
    }
}
