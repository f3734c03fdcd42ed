//! Cross-module properties through the public API: schedules driving the
//! decoder, the cost formulas, checkpoints across scalar types and the
//! synthetic task stream.

use adsc_core::costmodel::{instrumented_flop_count, kv_bytes_series, kv_peak_bytes, prefill_flops, CostScenario};
use adsc_core::decoder::{checkpoint, ForwardOptions, ModelConfig, Sample};
use adsc_core::schedule::PruneSchedule;
use adsc_core::trainer::{gen_indexed, TaskKind, TaskSpec};
use adsc_core::{Decoder32, Decoder64, Matrix64};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy(seed: u64) -> Decoder64 {
    Decoder64::new(ModelConfig::toy(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn random_sample(seed: u64, n_vision: usize, prompt: usize, cfg: &ModelConfig) -> Sample<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Sample {
        vision: Matrix64::randn(n_vision, cfg.vision_width, 1.0, &mut r),
        prompt: (0..prompt).map(|_| r.random_range(0..cfg.vocab)).collect(),
        response: Vec::new(),
    }
}

fn layers_from_mask(mask: u64, depth: usize) -> Vec<usize> {
    (1..depth).filter(|l| mask >> l & 1 == 1).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn decoder_residency_follows_the_schedule(
        seed in 0u64..500,
        n_vision in 1usize..20,
        ratio in 0.05f64..0.9,
        mask in any::<u64>(),
    ) {
        let dec = toy(seed);
        let s = random_sample(seed + 7, n_vision, 3, dec.config());
        let Ok(sched) = PruneSchedule::new(n_vision, dec.config().depth, ratio, layers_from_mask(mask, dec.config().depth)) else {
            return Ok(());
        };
        let pass = dec.forward_scheduled(&s, &sched, ForwardOptions::default()).unwrap();
        prop_assert_eq!(pass.trace().resident_vision_counts(), sched.layer_token_counts());
    }

    #[test]
    fn instrumented_flops_match_the_formula(seed in 0u64..500, n_vision in 1usize..16, ratio in 0.1f64..0.8, mask in any::<u64>()) {
        let dec = toy(seed);
        let depth = dec.config().depth;
        let s = random_sample(seed, n_vision, 2, dec.config());
        let Ok(sched) = PruneSchedule::new(n_vision, depth, ratio, layers_from_mask(mask, depth)) else { return Ok(()) };
        let scenario = CostScenario::new(dec.config().clone(), &sched, 2, 0, 2).unwrap();
        prop_assert_eq!(instrumented_flop_count(&dec, &s, Some(&sched)).unwrap(), prefill_flops(&scenario));
    }

    #[test]
    fn pruning_never_costs_more(n0 in 1usize..800, depth in 2usize..40, ratio in 0.01f64..0.95, mask in any::<u64>(), text in 0usize..64, steps in 0usize..64) {
        let cfg = ModelConfig { depth, ..adsc_core::costmodel::preset_7b() };
        let Ok(sched) = PruneSchedule::new(n0, depth, ratio, layers_from_mask(mask, depth)) else { return Ok(()) };
        let pruned = CostScenario::new(cfg.clone(), &sched, text, steps, 2).unwrap();
        let full = CostScenario::new(cfg, &PruneSchedule::unpruned(n0, depth).unwrap(), text, steps, 2).unwrap();
        prop_assert!(prefill_flops(&pruned) <= prefill_flops(&full));
        prop_assert!(kv_peak_bytes(&pruned) <= kv_peak_bytes(&full));
        let series = kv_bytes_series(&pruned);
        prop_assert_eq!(series.len(), steps + 1);
        prop_assert!(series.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(*series.last().unwrap(), kv_peak_bytes(&pruned));
    }

    #[test]
    fn schedules_survive_json(n0 in 1usize..800, depth in 1usize..40, ratio in 0.01f64..0.95, mask in any::<u64>()) {
        let Ok(sched) = PruneSchedule::new(n0, depth, ratio, layers_from_mask(mask, depth)) else { return Ok(()) };
        let text = serde_json::to_string(&sched).unwrap();
        let back: PruneSchedule = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back.layer_token_counts(), sched.layer_token_counts());
        prop_assert_eq!(back, sched);
    }

    #[test]
    fn task_stream_is_indexed_and_well_formed(seed in any::<u64>(), index in 0u64..10_000, grid in 2usize..7) {
        let mut spec = TaskSpec { kind: TaskKind::MarkerCell, grid, colors: 4, shapes: 4, noise: 0.0, vision_width: 0 };
        spec.vision_width = spec.feature_dims();
        let a = gen_indexed::<f64>(seed, index, &spec);
        prop_assert_eq!(&a, &gen_indexed::<f64>(seed, index, &spec));
        prop_assert_eq!(a.sample.vision.rows(), grid * grid);
        prop_assert!(a.cell < grid * grid);
        prop_assert_eq!(a.answer(), &[spec.cell_token(a.cell)][..]);
        prop_assert!(spec.answer_tokens().contains(&a.answer()[0]));
    }
}

#[test]
fn single_precision_tracks_double() {
    let dec = toy(3);
    let single: Decoder32 = checkpoint::decode(&checkpoint::encode(&dec).unwrap()).unwrap();
    let s = random_sample(11, 9, 4, dec.config());
    let s32 = Sample { vision: s.vision.cast::<f32>(), prompt: s.prompt.clone(), response: Vec::new() };
    let sched = PruneSchedule::new(9, 4, 0.5, vec![1, 3]).unwrap();
    let l64 = dec.forward_scheduled(&s, &sched, ForwardOptions::default()).unwrap().logits().clone();
    let l32 = single.forward_scheduled(&s32, &sched, ForwardOptions::default()).unwrap().logits().cast::<f64>();
    assert!(l64.max_abs_diff(&l32) < 1e-3, "{}", l64.max_abs_diff(&l32));

    let again: Decoder32 = checkpoint::decode(&checkpoint::encode(&single).unwrap()).unwrap();
    assert_eq!(again.params(), single.params());
}
