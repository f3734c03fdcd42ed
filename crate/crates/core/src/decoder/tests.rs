use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::schedule::{PruneSchedule, MIN_RATIO};
use crate::tensor::Matrix;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn toy_decoder(seed: u64) -> Decoder<f64> {
    Decoder::new(ModelConfig::toy(), &mut rng(seed)).unwrap()
}

fn sample(seed: u64, n_vision: usize, prompt: usize, response: usize, cfg: &ModelConfig) -> Sample<f64> {
    let mut r = rng(seed ^ 0x5eed);
    Sample {
        vision: Matrix::randn(n_vision, cfg.vision_width, 1.0, &mut r),
        prompt: (0..prompt).map(|_| r.random_range(0..cfg.vocab)).collect(),
        response: (0..response).map(|_| r.random_range(0..cfg.vocab)).collect(),
    }
}

fn logits(dec: &Decoder<f64>, s: &Sample<f64>, sched: &PruneSchedule) -> Matrix<f64> {
    dec.forward_scheduled(s, sched, ForwardOptions::default()).unwrap().logits().clone()
}

/// Nonzero adapter up-matrices so adapter paths carry signal.
fn randomize_adapters(dec: &mut Decoder<f64>, seed: u64) {
    let mut r = rng(seed);
    let slots: Vec<usize> = (0..dec.params().len()).filter(|&s| dec.params().kind(s) == TensorKind::Adapter).collect();
    for s in slots {
        let (rows, cols) = dec.params().tensor(s).shape();
        *dec.params_mut().tensor_mut(s) = Matrix::randn(rows, cols, 0.3, &mut r);
    }
}

#[test]
fn zero_features_give_zero_vision_rows() {
    let dec = toy_decoder(1);
    let s = Sample { vision: Matrix::zeros(5, 8), prompt: vec![1, 2], response: vec![] };
    let x = dec.embed(&s).unwrap();
    assert_eq!(x.shape(), (7, 16));
    assert!((0..5).all(|i| x.row(i).iter().all(|&v| v == 0.0)));
}

#[test]
fn text_only_embedding() {
    let dec = toy_decoder(1);
    let s = Sample { vision: Matrix::zeros(0, 8), prompt: vec![3, 4], response: vec![5] };
    assert!(s.layout().vision_positions().is_empty());
    let x = dec.embed(&s).unwrap();
    let table = dec.params().tensor(dec.params().index().embedding);
    assert_eq!(x.row(0), table.row(3));
    assert_eq!(x.row(2), table.row(5));
    assert!(dec.forward(&s, &mut NoReduction, ForwardOptions::default()).is_ok());
}

#[test]
fn identity_projector_pads_features() {
    let mut dec = toy_decoder(1);
    let slot = dec.params().index().projector;
    *dec.params_mut().tensor_mut(slot) = Matrix::from_fn(8, 16, |i, j| if i == j { 1.0 } else { 0.0 });
    let s = sample(2, 3, 1, 0, dec.config());
    let x = dec.embed(&s).unwrap();
    for i in 0..3 {
        let expect: Vec<f64> = s.vision.row(i).iter().copied().chain([0.0; 8]).collect();
        assert_eq!(x.row(i), &expect[..]);
    }
}

#[test]
fn invalid_samples_rejected() {
    let dec = toy_decoder(1);
    let bad_token = Sample { vision: Matrix::zeros(2, 8), prompt: vec![24], response: vec![] };
    assert!(matches!(dec.embed(&bad_token), Err(Error::InvalidInput(_))));
    let bad_width = Sample { vision: Matrix::zeros(2, 7), prompt: vec![1], response: vec![] };
    assert!(matches!(dec.embed(&bad_width), Err(Error::InvalidInput(_))));
    let too_long = Sample { vision: Matrix::zeros(60, 8), prompt: vec![1; 5], response: vec![] };
    assert!(matches!(dec.embed(&too_long), Err(Error::InvalidInput(_))));
    let s = sample(0, 8, 2, 1, dec.config());
    let wrong_depth = PruneSchedule::new(8, 6, 0.5, vec![2]).unwrap();
    assert!(matches!(dec.forward_scheduled(&s, &wrong_depth, ForwardOptions::default()), Err(Error::Config(_))));
}

#[test]
fn pruned_forward_matches_masked_reference() {
    let dec = toy_decoder(7);
    let s = sample(3, 8, 3, 2, dec.config());
    let sched = PruneSchedule::new(8, 4, 0.5, vec![2]).unwrap();
    let pass = dec.forward_scheduled(&s, &sched, ForwardOptions::default()).unwrap();
    let reference = masked_reference(&dec, &s, &sched).unwrap();
    assert!(pass.logits().max_abs_diff(&reference.logits) <= 1e-8);
    for (t, h) in pass.trace().layers.iter().zip(&reference.resident_hidden) {
        assert!((t.checksum - h.sum()).abs() <= 1e-8);
    }
    assert_eq!(pass.trace().resident_vision_counts(), vec![8, 8, 4, 4]);
    assert_eq!(pass.trace().final_layout.vision_positions(), &[1, 3, 5, 7]);
}

#[test]
fn trace_counts_follow_schedule() {
    let dec = toy_decoder(7);
    let s = sample(3, 16, 2, 1, dec.config());
    let sched = PruneSchedule::new(16, 4, 0.3, vec![1, 2, 3]).unwrap();
    let pass = dec.forward_scheduled(&s, &sched, ForwardOptions::default()).unwrap();
    assert_eq!(pass.trace().resident_vision_counts(), sched.layer_token_counts());
}

#[test]
fn no_op_schedule_is_bit_identical() {
    let dec = toy_decoder(7);
    let s = sample(4, 8, 2, 2, dec.config());
    let plain = logits(&dec, &s, &PruneSchedule::unpruned(8, 4).unwrap());
    let noop = logits(&dec, &s, &PruneSchedule::new(8, 4, MIN_RATIO, vec![1, 2, 3]).unwrap());
    let free = dec.forward(&s, &mut NoReduction, ForwardOptions::default()).unwrap();
    assert_eq!(plain, noop);
    assert_eq!(&plain, free.logits());
}

#[test]
fn attention_capture_does_not_change_outputs() {
    let dec = toy_decoder(9);
    let s = sample(5, 8, 2, 2, dec.config());
    let sched = PruneSchedule::new(8, 4, 0.5, vec![1, 3]).unwrap();
    let off = dec.forward_scheduled(&s, &sched, ForwardOptions::default()).unwrap();
    let on = dec.forward_scheduled(&s, &sched, ForwardOptions { capture_attention: true, train: None }).unwrap();
    assert_eq!(off.logits(), on.logits());
    assert!(off.trace().layers.iter().all(|l| l.attention.is_none()));
    let probs = on.trace().layers[0].attention.as_ref().unwrap();
    assert_eq!(probs.len(), 2);
    for row in 0..probs[0].rows() {
        assert!((probs[0].row(row).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn determinism() {
    let a = toy_decoder(11);
    let b = toy_decoder(11);
    let s = sample(6, 8, 2, 2, a.config());
    let sched = PruneSchedule::new(8, 4, 0.5, vec![2]).unwrap();
    assert_eq!(logits(&a, &s, &sched), logits(&b, &s, &sched));
    assert_eq!(logits(&a, &s, &sched), logits(&a, &s, &sched));
}

#[test]
fn causality_under_pruning() {
    let dec = toy_decoder(12);
    let mut s = sample(7, 8, 2, 4, dec.config());
    let sched = PruneSchedule::new(8, 4, 0.5, vec![2]).unwrap();
    let before = logits(&dec, &s, &sched);
    // Response token m sits on the row after output row m.
    s.response[2] = (s.response[2] + 1) % 24;
    let after = logits(&dec, &s, &sched);
    for r in 0..3 {
        assert_eq!(before.row(r), after.row(r));
    }
    assert_ne!(before.row(3), after.row(3));
}

#[test]
fn response_loss_examples() {
    let uniform = Matrix::<f64>::zeros(3, 10);
    assert!((response_loss(&uniform, &[1, 2, 3]).unwrap() - 10f64.ln()).abs() < 1e-12);

    let confident = Matrix::from_fn(2, 5, |i, j| if j == i { 100.0 } else { 0.0 });
    assert!(response_loss(&confident, &[0, 1]).unwrap() < 1e-40);

    let mut r = rng(1);
    let l = Matrix::<f64>::randn(3, 6, 2.0, &mut r);
    let targets = [4, 0, 5];
    let mut expect = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let z: f64 = l.row(i).iter().map(|v| v.exp()).sum();
        expect += z.ln() - l[(i, t)];
    }
    expect /= 3.0;
    assert!((response_loss(&l, &targets).unwrap() - expect).abs() < 1e-12);
    assert!(response_loss(&l, &[]).is_err());
}

#[test]
fn backward_requires_differentiable_forward() {
    let dec = toy_decoder(1);
    let s = sample(1, 8, 2, 2, dec.config());
    let mut pass = dec.forward(&s, &mut NoReduction, ForwardOptions::default()).unwrap();
    let (_, node) = pass.response_loss().unwrap();
    assert!(matches!(pass.backward(node), Err(Error::State(_))));
}

#[test]
fn unused_parameters_get_zero_gradient() {
    let dec = toy_decoder(2);
    let s = Sample { vision: Matrix::randn(4, 8, 1.0, &mut rng(0)), prompt: vec![1, 2], response: vec![3] };
    let sched = PruneSchedule::unpruned(4, 4).unwrap();
    let (_, g) = dec.loss_and_gradients(&s, &sched, TrainMode::Full).unwrap();
    let emb = g.get(dec.params().index().embedding).unwrap();
    // Token 3 is only a target, never an input.
    assert!(emb.row(3).iter().all(|&v| v == 0.0));
    assert!(emb.row(1).iter().any(|&v| v != 0.0));
}

#[test]
fn frozen_backbone_grads() {
    let mut cfg = ModelConfig::toy();
    cfg.lora_rank = 2;
    let dec = Decoder::<f64>::new(cfg, &mut rng(3)).unwrap();
    let s = sample(2, 8, 2, 2, dec.config());
    let sched = PruneSchedule::new(8, 4, 0.5, vec![2]).unwrap();
    let (_, g) = dec.loss_and_gradients(&s, &sched, TrainMode::FrozenBackbone).unwrap();
    for (slot, e) in dec.params().entries().iter().enumerate() {
        assert_eq!(g.get(slot).is_some(), e.kind != TensorKind::Backbone, "{}", e.name);
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut cfg = ModelConfig::toy();
    cfg.lora_rank = 2;
    let mut dec = Decoder::<f64>::new(cfg, &mut rng(4)).unwrap();
    randomize_adapters(&mut dec, 5);
    let s = sample(8, 8, 2, 2, dec.config());
    for sched in [PruneSchedule::unpruned(8, 4).unwrap(), PruneSchedule::new(8, 4, 0.5, vec![1, 3]).unwrap()] {
        let report = grad_check(&dec, &s, &sched, TrainMode::Full, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        assert_eq!(report.checked, dec.params().num_scalars());
    }
}

#[test]
fn two_matrix_ffn_and_learned_positions_pass_grad_check() {
    let mut cfg = ModelConfig::toy();
    cfg.gated_ffn = false;
    cfg.positions = PositionEncoding::Learned;
    cfg.depth = 2;
    let dec = Decoder::<f64>::new(cfg, &mut rng(6)).unwrap();
    let s = sample(9, 6, 2, 2, dec.config());
    let sched = PruneSchedule::new(6, 2, 0.5, vec![1]).unwrap();
    let report = grad_check(&dec, &s, &sched, TrainMode::Full, 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
    let reference = masked_reference(&dec, &s, &sched).unwrap();
    assert!(logits(&dec, &s, &sched).max_abs_diff(&reference.logits) <= 1e-8);
}

#[test]
fn corrupted_gradient_is_reported() {
    let mut cfg = ModelConfig::toy();
    cfg.depth = 2;
    let dec = Decoder::<f64>::new(cfg, &mut rng(4)).unwrap();
    let s = sample(8, 6, 2, 2, dec.config());
    let sched = PruneSchedule::new(6, 2, 0.5, vec![1]).unwrap();
    let target = dec.params().slot_of("layers.1.wv").unwrap();
    let report = grad_check_with_fault(&dec, &s, &sched, TrainMode::Full, 1e-5, |g| {
        let m = g.get_mut(target).unwrap();
        *m = m.scale(1.5);
    })
    .unwrap();
    assert!(report.max_rel_error > 1e-2);
    assert_eq!(report.worst_tensor, "layers.1.wv");
}

#[test]
fn fresh_adapters_leave_logits_unchanged() {
    let base = toy_decoder(13);
    let s = sample(10, 8, 2, 2, base.config());
    let sched = PruneSchedule::new(8, 4, 0.5, vec![2]).unwrap();
    let before = logits(&base, &s, &sched);
    let adapted = base.with_adapters(4, 8.0, &mut rng(14));
    assert!(logits(&adapted, &s, &sched).max_abs_diff(&before) <= 1e-12);
}

#[test]
fn merge_with_zero_up_is_identity() {
    let base = toy_decoder(13);
    let adapted = base.clone().with_adapters(2, 1.0, &mut rng(1));
    let merged = lora_merge(adapted).unwrap();
    assert_eq!(merged.config().lora_rank, 0);
    assert_eq!(merged.params(), base.params());
}

#[test]
fn rank_one_merge_is_outer_product() {
    let base = toy_decoder(13);
    let mut adapted = base.clone().with_adapters(1, 0.5, &mut rng(1));
    randomize_adapters(&mut adapted, 2);
    let lora = adapted.params().index().layers[0].lora.unwrap();
    let down = adapted.params().tensor(lora[1].down).clone();
    let up = adapted.params().tensor(lora[1].up).clone();
    let merged = lora_merge(adapted).unwrap();
    let wk = base.params().tensor(base.params().index().layers[0].proj[1]);
    let expect = Matrix::from_fn(16, 16, |i, j| wk[(i, j)] + 0.5 * (down[(i, 0)] * up[(0, j)]));
    assert_eq!(merged.params().tensor(merged.params().index().layers[0].proj[1]), &expect);
}

#[test]
fn merged_matches_unmerged() {
    let mut adapted = toy_decoder(15).with_adapters(3, 2.0, &mut rng(1));
    randomize_adapters(&mut adapted, 3);
    let s = sample(11, 8, 3, 2, adapted.config());
    let sched = PruneSchedule::new(8, 4, 0.5, vec![2]).unwrap();
    let before = logits(&adapted, &s, &sched);
    let merged = lora_merge(adapted).unwrap();
    assert!(logits(&merged, &s, &sched).max_abs_diff(&before) <= 1e-9);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut cfg = ModelConfig::toy();
    cfg.lora_rank = 2;
    let mut dec = Decoder::<f64>::new(cfg, &mut rng(16)).unwrap();
    randomize_adapters(&mut dec, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.adsc");
    checkpoint::save(&dec, &path).unwrap();
    let back: Decoder<f64> = checkpoint::load(&path).unwrap();
    assert_eq!(back, dec);
    assert_eq!(checkpoint::encode(&back).unwrap(), std::fs::read(&path).unwrap());

    let single = Decoder::<f32>::new(ModelConfig::toy(), &mut rng(17)).unwrap();
    let bytes = checkpoint::encode(&single).unwrap();
    assert_eq!(checkpoint::decode::<f32>(&bytes).unwrap(), single);
}

#[test]
fn corrupt_checkpoints_rejected() {
    let dec = toy_decoder(1);
    let mut bytes = checkpoint::encode(&dec).unwrap();
    assert!(matches!(checkpoint::decode::<f64>(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    bytes[0] = b'X';
    assert!(matches!(checkpoint::decode::<f64>(&bytes), Err(Error::Format(_))));
}

#[test]
fn greedy_generation_is_deterministic() {
    let dec = toy_decoder(18);
    let s = sample(12, 8, 2, 0, dec.config());
    let sched = PruneSchedule::new(8, 4, 0.5, vec![2]).unwrap();
    let a = dec.generate(&s.vision, &s.prompt, 3, &mut ScheduleReducer::new(&sched), ForwardOptions::default()).unwrap();
    let b = dec.generate(&s.vision, &s.prompt, 3, &mut ScheduleReducer::new(&sched), ForwardOptions::default()).unwrap();
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);
    let first = logits(&dec, &s, &sched).row_argmax(0);
    assert_eq!(a[0], first);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn equivalence_on_random_instances(
        seed in 0u64..1_000,
        n_vision in 2usize..12,
        prompt in 1usize..4,
        response in 0usize..3,
        ratio in 0.1f64..0.7,
        layers in proptest::sample::subsequence(vec![1usize, 2, 3], 0..=3),
    ) {
        let dec = toy_decoder(seed);
        let s = sample(seed + 1, n_vision, prompt, response, dec.config());
        let Ok(sched) = PruneSchedule::new(n_vision, 4, ratio, layers) else { return Ok(()) };
        let pruned = logits(&dec, &s, &sched);
        let reference = masked_reference(&dec, &s, &sched).unwrap();
        prop_assert!(pruned.max_abs_diff(&reference.logits) <= 1e-8);
    }
}
