use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::{eval_seed, evaluate};
use super::metrics::MetricsRow;
use super::optim::{cosine_lr, Adam, AdamConfig};
use super::task::{gen_indexed, TaskSpec};
use crate::decoder::{Decoder, Gradients, ModelConfig, TrainMode};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::{curriculum_schedules, CurriculumPlan, PhaseSchedule};

/// Everything a training run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    /// Budget phases ending at the target schedule.
    pub curriculum: CurriculumPlan,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    pub seed: u64,
    /// Train only adapters and the projector.
    #[serde(default)]
    pub frozen_backbone: bool,
    /// Held-out evaluation every this many steps (0 disables); the last step is always evaluated when enabled.
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    /// Put real timings in the metrics log (breaks byte reproducibility).
    #[serde(default)]
    pub record_wall_clock: bool,
}

fn default_eval_samples() -> usize {
    200
}

impl TrainConfig {
    pub fn mode(&self) -> TrainMode {
        if self.frozen_backbone {
            TrainMode::FrozenBackbone
        } else {
            TrainMode::Full
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate(self.model.vocab, self.model.vision_width)?;
        self.curriculum.validate()?;
        let target = &self.curriculum.target;
        if target.depth() != self.model.depth || target.n0() != self.task.cells() {
            return Err(Error::Config(format!(
                "target schedule (n0 {}, depth {}) does not fit depth {} and {} task cells",
                target.n0(),
                target.depth(),
                self.model.depth,
                self.task.cells()
            )));
        }
        if self.steps < self.curriculum.phases.len() {
            return Err(Error::Config(format!("{} steps for {} phases", self.steps, self.curriculum.phases.len())));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.learning_rate)));
        }
        if self.frozen_backbone && self.model.lora_rank == 0 {
            return Err(Error::Config("a frozen backbone needs lora_rank > 0".into()));
        }
        Ok(())
    }
}

/// A finished run.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub decoder: Decoder<T>,
    pub metrics: Vec<MetricsRow>,
    pub phases: Vec<PhaseSchedule>,
    /// First step of each phase.
    pub phase_starts: Vec<usize>,
}

/// Adam training through every curriculum phase on one parameter state.
///
/// `init` continues from an existing model; adapters of the configured rank
/// are attached when it has none. Training samples come from stream
/// `seed`; held-out evaluation uses [`eval_seed`].
pub fn train<T: Scalar>(config: &TrainConfig, init: Option<Decoder<T>>) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut decoder = match init {
        None => Decoder::new(config.model.clone(), &mut rng)?,
        Some(d) => adopt(d, &config.model, &mut rng)?,
    };
    let mode = config.mode();
    let phases = curriculum_schedules(&config.curriculum)?;
    let ranges = config.curriculum.phase_steps(config.steps)?;
    let mut adam = Adam::new(config.adam, decoder.params());
    let mut metrics = Vec::with_capacity(config.steps);
    let start = Instant::now();
    let inv_batch = T::of(1.0 / config.batch_size as f64);

    for (p, (phase, range)) in phases.iter().zip(&ranges).enumerate() {
        for step in range.clone() {
            let mut grads = Gradients::zeros_like(decoder.params(), mode);
            let mut loss = 0.0;
            for b in 0..config.batch_size {
                let index = (step * config.batch_size + b) as u64;
                let s = gen_indexed::<T>(config.seed, index, &config.task);
                let (l, g) = decoder
                    .loss_and_gradients(&s.sample, &phase.schedule, mode)
                    .map_err(|e| diverged(step, e))?;
                loss += l.as_f64();
                grads.accumulate(&g, inv_batch);
            }
            loss /= config.batch_size as f64;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, detail: format!("loss {loss} in phase {p}") });
            }
            let lr = cosine_lr(config.learning_rate, step, config.steps, config.warmup_steps);
            adam.step(decoder.params_mut(), &grads, lr);
            if !decoder.params().is_finite() {
                return Err(Error::Diverged { step, detail: "non-finite parameters after update".into() });
            }
            let last = step + 1 == config.steps;
            let eval_acc = if config.eval_every > 0 && ((step + 1) % config.eval_every == 0 || last) {
                Some(evaluate(&decoder, &phase.schedule, &config.task, config.eval_samples, eval_seed(config.seed))?)
            } else {
                None
            };
            metrics.push(MetricsRow {
                step,
                phase: p,
                budget: phase.schedule.average_vision_tokens(),
                loss,
                eval_acc,
                wall_ms: config.record_wall_clock.then(|| start.elapsed().as_millis() as u64),
            });
        }
    }
    Ok(TrainOutcome { decoder, metrics, phases, phase_starts: ranges.iter().map(|r| r.start).collect() })
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::Numeric(detail) => Error::Diverged { step, detail },
        other => other,
    }
}

/// Brings an existing model in line with `model`: same dimensions, adapters
/// attached at the configured rank when missing.
fn adopt<T: Scalar>(d: Decoder<T>, model: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Decoder<T>> {
    let have = d.config();
    let same_dims = ModelConfig { lora_rank: 0, lora_scale: 1.0, ..have.clone() }
        == ModelConfig { lora_rank: 0, lora_scale: 1.0, ..model.clone() };
    if !same_dims {
        return Err(Error::Config("initial checkpoint does not match the model config".into()));
    }
    if have.lora_rank == model.lora_rank && have.lora_scale == model.lora_scale {
        return Ok(d);
    }
    if have.lora_rank != 0 {
        return Err(Error::Config("initial checkpoint already carries adapters of another rank".into()));
    }
    Ok(d.with_adapters(model.lora_rank, model.lora_scale, rng))
}
