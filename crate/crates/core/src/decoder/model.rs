use rand::Rng;

use super::config::{ModelConfig, PositionEncoding};
use super::layout::SequenceLayout;
use super::params::{Gradients, Parameters, TrainMode};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::schedule::{retained_indices, PruneSchedule};
use crate::tensor::{FlopTag, MacCounter, Matrix, Tape, Var};

/// One multimodal example: vision features then prompt and response token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    /// `n_vision x vision_width`.
    pub vision: Matrix<T>,
    pub prompt: Vec<usize>,
    pub response: Vec<usize>,
}

impl<T: Scalar> Sample<T> {
    pub fn layout(&self) -> SequenceLayout {
        SequenceLayout::initial(self.vision.rows(), self.prompt.len(), self.response.len())
    }
}

/// What a reducer sees after a layer has run.
pub struct LayerContext<'a, T> {
    /// 1-based layer index whose output is about to be reduced.
    pub layer: usize,
    pub layout: &'a SequenceLayout,
    pub hidden: &'a Matrix<T>,
    /// Per-head attention probabilities of this layer; present only when the
    /// forward pass was asked to capture them.
    pub attention: Option<&'a [Matrix<T>]>,
}

/// Change to the vision span between two layers.
#[derive(Clone, Debug, PartialEq)]
pub enum Reduction<T> {
    /// Keep these indices of the vision span.
    Keep(Vec<usize>),
    /// Replace the vision span: each new token is a weighted sum of current
    /// vision rows and carries the given position id.
    Merge { rows: Vec<Vec<(usize, T)>>, positions: Vec<usize> },
}

/// Hook deciding how the vision span shrinks after each layer.
pub trait TokenReducer<T: Scalar> {
    fn reduce(&mut self, ctx: &LayerContext<'_, T>) -> Result<Option<Reduction<T>>>;
}

/// Never reduces.
pub struct NoReduction;

impl<T: Scalar> TokenReducer<T> for NoReduction {
    fn reduce(&mut self, _: &LayerContext<'_, T>) -> Result<Option<Reduction<T>>> {
        Ok(None)
    }
}

/// Position-based pruning from a schedule. Reads only the resident count.
pub struct ScheduleReducer<'s> {
    schedule: &'s PruneSchedule,
}

impl<'s> ScheduleReducer<'s> {
    pub fn new(schedule: &'s PruneSchedule) -> Self {
        Self { schedule }
    }
}

impl<T: Scalar> TokenReducer<T> for ScheduleReducer<'_> {
    fn reduce(&mut self, ctx: &LayerContext<'_, T>) -> Result<Option<Reduction<T>>> {
        if !self.schedule.is_pruning_layer(ctx.layer) {
            return Ok(None);
        }
        let n = ctx.layout.n_vision();
        let k = self.schedule.kept_after(n);
        if k == 0 {
            return Err(Error::ScheduleDegenerate(format!("layer {} would keep 0 of {n}", ctx.layer)));
        }
        Ok(Some(Reduction::Keep(retained_indices(n, k)?)))
    }
}

/// Per-layer record of a forward pass.
#[derive(Clone, Debug)]
pub struct LayerTrace<T> {
    pub layer: usize,
    /// Layout at the input of this layer.
    pub layout: SequenceLayout,
    /// Sum of this layer's output hidden state.
    pub checksum: T,
    /// Only with [`ForwardOptions::capture_attention`].
    pub attention: Option<Vec<Matrix<T>>>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub layers: Vec<LayerTrace<T>>,
    pub final_layout: SequenceLayout,
    pub logits: Matrix<T>,
}

impl<T> ForwardTrace<T> {
    pub fn resident_vision_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.layout.n_vision()).collect()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Copy attention probabilities into the trace (debug only).
    pub capture_attention: bool,
    /// Record for backward with this trainability mask.
    pub train: Option<TrainMode>,
}

/// A recorded forward pass.
pub struct ForwardPass<'a, T: Scalar> {
    tape: Tape<'a, T>,
    logits: Var,
    trace: ForwardTrace<T>,
    targets: Vec<usize>,
    mode: Option<TrainMode>,
    params: &'a Parameters<T>,
}

impl<'a, T: Scalar> ForwardPass<'a, T> {
    /// Logits at [`SequenceLayout::output_rows`], `rows x vocab`.
    pub fn logits(&self) -> &Matrix<T> {
        self.tape.value(self.logits)
    }

    pub fn trace(&self) -> &ForwardTrace<T> {
        &self.trace
    }

    pub fn into_trace(self) -> ForwardTrace<T> {
        self.trace
    }

    pub fn macs(&self) -> &MacCounter {
        self.tape.macs()
    }

    /// Records mean response cross-entropy and returns its value and node.
    pub fn response_loss(&mut self) -> Result<(T, Var)> {
        if self.targets.is_empty() {
            return invalid("sample has no response tokens");
        }
        let loss = self.tape.cross_entropy(self.logits, &self.targets)?;
        Ok((self.tape.value(loss)[(0, 0)], loss))
    }

    /// Gradients of `loss` for every tensor the recording mode trains.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let mode = self
            .mode
            .ok_or_else(|| Error::State("forward was not recorded in differentiable mode".into()))?;
        let found = self.tape.backward(loss)?;
        Ok(Gradients::from_tape(self.params, mode, found))
    }
}

/// Multimodal causal decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    config: ModelConfig,
    params: Parameters<T>,
}

/// Tensor handles of one layer, as tape leaves.
struct LayerVars {
    attn_norm: Var,
    proj: [Var; 4],
    lora: Option<[(Var, Var); 4]>,
    ffn_norm: Var,
    w_gate: Var,
    w_up: Option<Var>,
    w_down: Var,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let params = Parameters::init(&config, rng)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: Parameters<T>) -> Result<Self> {
        config.validate()?;
        let has_lora = params.index().layers.iter().any(|l| l.lora.is_some());
        if params.index().layers.len() != config.depth || has_lora != (config.lora_rank > 0) {
            return Err(Error::Config("parameters do not match the model config".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Parameters<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters<T> {
        &mut self.params
    }

    /// Adds fresh adapters of the given rank (replacing any existing ones).
    pub fn with_adapters(mut self, rank: usize, scale: f64, rng: &mut impl Rng) -> Self {
        self.params.detach_adapters();
        if rank > 0 {
            self.params.attach_adapters(rank, self.config.width, rng);
        }
        self.config.lora_rank = rank;
        self.config.lora_scale = scale;
        self
    }

    pub(crate) fn into_parts(self) -> (ModelConfig, Parameters<T>) {
        (self.config, self.params)
    }

    pub fn validate_sample(&self, sample: &Sample<T>) -> Result<()> {
        let cfg = &self.config;
        if sample.vision.rows() > 0 && sample.vision.cols() != cfg.vision_width {
            return Err(Error::InvalidInput(format!(
                "vision features have width {}, expected {}",
                sample.vision.cols(),
                cfg.vision_width
            )));
        }
        if let Some(&t) = sample.prompt.iter().chain(&sample.response).find(|&&t| t >= cfg.vocab) {
            return Err(Error::InvalidInput(format!("token id {t} outside vocabulary of {}", cfg.vocab)));
        }
        let total = sample.vision.rows() + sample.prompt.len() + sample.response.len();
        if total == 0 {
            return Err(Error::InvalidInput("empty sequence".into()));
        }
        if total > cfg.max_positions {
            return Err(Error::InvalidInput(format!("sequence of {total} exceeds max_positions {}", cfg.max_positions)));
        }
        if !sample.response.is_empty() && sample.prompt.is_empty() {
            return Err(Error::InvalidInput("a response needs at least one prompt token".into()));
        }
        if !sample.vision.is_finite() {
            return Err(Error::Numeric("non-finite vision features".into()));
        }
        Ok(())
    }

    fn leaf<'a>(&'a self, tape: &mut Tape<'a, T>, slot: usize, mode: Option<TrainMode>) -> Var {
        let rg = mode.is_some_and(|m| m.trains(self.params.kind(slot)));
        tape.param(self.params.tensor(slot), slot, rg)
    }

    fn layer_vars<'a>(&'a self, tape: &mut Tape<'a, T>, l: usize, mode: Option<TrainMode>) -> LayerVars {
        let s = &self.params.index().layers[l];
        LayerVars {
            attn_norm: self.leaf(tape, s.attn_norm, mode),
            proj: s.proj.map(|slot| self.leaf(tape, slot, mode)),
            lora: s.lora.map(|pairs| pairs.map(|p| (self.leaf(tape, p.down, mode), self.leaf(tape, p.up, mode)))),
            ffn_norm: self.leaf(tape, s.ffn_norm, mode),
            w_gate: self.leaf(tape, s.w_gate, mode),
            w_up: s.w_up.map(|slot| self.leaf(tape, slot, mode)),
            w_down: self.leaf(tape, s.w_down, mode),
        }
    }

    /// Input rows: projected vision features, then token embeddings, plus
    /// learned positions when configured.
    pub(crate) fn embed_on<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        sample: &Sample<T>,
        positions: &[usize],
        mode: Option<TrainMode>,
    ) -> Var {
        let idx = self.params.index();
        let mut parts = Vec::with_capacity(2);
        if sample.vision.rows() > 0 {
            let feats = tape.input(sample.vision.clone());
            let proj = self.leaf(tape, idx.projector, mode);
            let bias = self.leaf(tape, idx.projector_bias, mode);
            let v = tape.matmul(feats, proj, FlopTag::Projector);
            parts.push(tape.add_row(v, bias));
        }
        let text: Vec<usize> = sample.prompt.iter().chain(&sample.response).copied().collect();
        if !text.is_empty() {
            let table = self.leaf(tape, idx.embedding, mode);
            parts.push(tape.gather_rows(table, text));
        }
        let x = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts) };
        match idx.position_table {
            Some(slot) => {
                let table = self.leaf(tape, slot, mode);
                let pos = tape.gather_rows(table, positions.to_vec());
                tape.add(x, pos)
            }
            None => x,
        }
    }

    /// Input hidden states of the full sequence, `total x width`.
    pub fn embed(&self, sample: &Sample<T>) -> Result<Matrix<T>> {
        self.validate_sample(sample)?;
        let mut tape = Tape::new();
        let x = self.embed_on(&mut tape, sample, &sample.layout().positions(), None);
        Ok(tape.value(x).clone())
    }

    fn project(&self, tape: &mut Tape<'_, T>, h: Var, w: Var, lora: Option<(Var, Var)>) -> Var {
        let base = tape.matmul(h, w, FlopTag::Linear);
        match lora {
            Some((down, up)) => {
                let hd = tape.matmul(h, down, FlopTag::Adapter);
                let delta = tape.matmul(hd, up, FlopTag::Adapter);
                let s = T::of(self.config.lora_scale / self.config.lora_rank as f64);
                let delta = tape.scale(delta, s);
                tape.add(base, delta)
            }
            None => base,
        }
    }

    /// One pre-normalized block; returns the output and the attention node.
    pub(crate) fn block_on<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        x: Var,
        layer: usize,
        positions: &[usize],
        key_mask: Option<&[bool]>,
        mode: Option<TrainMode>,
    ) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let eps = T::of(cfg.norm_eps);
        let w = self.layer_vars(tape, layer, mode);
        let lora = |i: usize| w.lora.map(|pairs| pairs[i]);

        let h = tape.rms_norm(x, w.attn_norm, eps);
        let mut q = self.project(tape, h, w.proj[0], lora(0));
        let mut k = self.project(tape, h, w.proj[1], lora(1));
        let v = self.project(tape, h, w.proj[2], lora(2));
        if cfg.positions == PositionEncoding::Rotary {
            q = tape.rope(q, positions, cfg.heads, cfg.rope_base);
            k = tape.rope(k, positions, cfg.heads, cfg.rope_base);
        }
        let attn = tape.attention(q, k, v, cfg.heads, key_mask)?;
        let o = self.project(tape, attn, w.proj[3], lora(3));
        let x = tape.add(x, o);

        let h = tape.rms_norm(x, w.ffn_norm, eps);
        let gate = tape.matmul(h, w.w_gate, FlopTag::Linear);
        let mut act = tape.silu(gate);
        if let Some(w_up) = w.w_up {
            let up = tape.matmul(h, w_up, FlopTag::Linear);
            act = tape.mul(act, up);
        }
        let down = tape.matmul(act, w.w_down, FlopTag::Linear);
        Ok((tape.add(x, down), attn))
    }

    pub(crate) fn head_on<'a>(&'a self, tape: &mut Tape<'a, T>, x: Var, rows: Vec<usize>, mode: Option<TrainMode>) -> Var {
        let idx = self.params.index();
        let sel = tape.gather_rows(x, rows);
        let norm = self.leaf(tape, idx.final_norm, mode);
        let h = tape.rms_norm(sel, norm, T::of(self.config.norm_eps));
        let head = self.leaf(tape, idx.head, mode);
        tape.matmul(h, head, FlopTag::Head)
    }

    /// Runs the decoder, letting `reducer` shrink the vision span after every layer.
    pub fn forward<'a>(
        &'a self,
        sample: &Sample<T>,
        reducer: &mut dyn TokenReducer<T>,
        opts: ForwardOptions,
    ) -> Result<ForwardPass<'a, T>> {
        self.validate_sample(sample)?;
        let mut tape = Tape::new();
        let mut layout = sample.layout();
        let mut x = self.embed_on(&mut tape, sample, &layout.positions(), opts.train);
        let mut layers = Vec::with_capacity(self.config.depth);

        for l in 1..=self.config.depth {
            let positions = layout.positions();
            let (out, attn) = self.block_on(&mut tape, x, l - 1, &positions, None, opts.train)?;
            x = out;
            let hidden = tape.value(x);
            if !hidden.is_finite() {
                return Err(Error::Numeric(format!("non-finite hidden state after layer {l}")));
            }
            let captured = opts.capture_attention.then(|| tape.attention_probs(attn).expect("attention node").to_vec());
            let ctx = LayerContext { layer: l, layout: &layout, hidden, attention: captured.as_deref() };
            let reduction = reducer.reduce(&ctx)?;
            layers.push(LayerTrace { layer: l, layout: layout.clone(), checksum: hidden.sum(), attention: captured });
            match reduction {
                None => {}
                Some(Reduction::Keep(keep)) => {
                    let (rows, next) = layout.keep(&keep)?;
                    x = tape.gather_rows(x, rows);
                    layout = next;
                }
                Some(Reduction::Merge { rows, positions }) => {
                    if rows.len() != positions.len() {
                        return invalid("merge rows and positions differ in length");
                    }
                    let nv = layout.n_vision();
                    if rows.iter().flatten().any(|&(src, _)| src >= nv) {
                        return invalid("merge reads outside the vision span");
                    }
                    let next = layout.with_vision_positions(positions)?;
                    let mut spec = rows;
                    spec.extend((nv..layout.total()).map(|r| vec![(r, T::one())]));
                    x = tape.combine_rows(x, spec);
                    layout = next;
                }
            }
        }

        let logits = self.head_on(&mut tape, x, layout.output_rows(), opts.train);
        let trace = ForwardTrace { layers, final_layout: layout, logits: tape.value(logits).clone() };
        Ok(ForwardPass {
            tape,
            logits,
            trace,
            targets: sample.response.clone(),
            mode: opts.train,
            params: &self.params,
        })
    }

    /// Forward pass with position-based pruning from `schedule`.
    pub fn forward_scheduled<'a>(
        &'a self,
        sample: &Sample<T>,
        schedule: &PruneSchedule,
        opts: ForwardOptions,
    ) -> Result<ForwardPass<'a, T>> {
        self.check_schedule(sample, schedule)?;
        self.forward(sample, &mut ScheduleReducer::new(schedule), opts)
    }

    pub(crate) fn check_schedule(&self, sample: &Sample<T>, schedule: &PruneSchedule) -> Result<()> {
        if schedule.depth() != self.config.depth {
            return Err(Error::Config(format!(
                "schedule depth {} does not match decoder depth {}",
                schedule.depth(),
                self.config.depth
            )));
        }
        if schedule.n0() != sample.vision.rows() {
            return Err(Error::Config(format!(
                "schedule expects {} vision tokens, sample has {}",
                schedule.n0(),
                sample.vision.rows()
            )));
        }
        Ok(())
    }

    /// Mean response cross-entropy and its gradients under `mode`.
    pub fn loss_and_gradients(
        &self,
        sample: &Sample<T>,
        schedule: &PruneSchedule,
        mode: TrainMode,
    ) -> Result<(T, Gradients<T>)> {
        let mut pass = self.forward_scheduled(sample, schedule, ForwardOptions { train: Some(mode), ..Default::default() })?;
        let (loss, node) = pass.response_loss()?;
        Ok((loss, pass.backward(node)?))
    }

    /// Mean response cross-entropy without recording gradients.
    pub fn loss(&self, sample: &Sample<T>, schedule: &PruneSchedule) -> Result<T> {
        let mut pass = self.forward_scheduled(sample, schedule, ForwardOptions::default())?;
        Ok(pass.response_loss()?.0)
    }

    /// Greedy decoding of `steps` tokens after the prompt; the reducer is
    /// re-applied on every step's forward pass.
    pub fn generate(
        &self,
        vision: &Matrix<T>,
        prompt: &[usize],
        steps: usize,
        reducer: &mut dyn TokenReducer<T>,
        opts: ForwardOptions,
    ) -> Result<Vec<usize>> {
        let mut text = prompt.to_vec();
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let sample = Sample { vision: vision.clone(), prompt: text.clone(), response: Vec::new() };
            let pass = self.forward(&sample, reducer, opts)?;
            let next = pass.logits().row_argmax(0);
            out.push(next);
            text.push(next);
        }
        Ok(out)
    }
}

/// Mean next-token cross-entropy of `logits` rows against `targets`.
pub fn response_loss<T: Scalar>(logits: &Matrix<T>, targets: &[usize]) -> Result<T> {
    if targets.is_empty() {
        return invalid("empty response span");
    }
    let mut tape = Tape::new();
    let l = tape.input(logits.clone());
    let ce = tape.cross_entropy(l, targets)?;
    Ok(tape.value(ce)[(0, 0)])
}
