use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{generate_toy_corpus, Vocabulary};
use crate::model::{ModelConfig, THREE_WAY_LABELS};

fn labels() -> Vec<String> {
    THREE_WAY_LABELS.iter().map(|s| s.to_string()).collect()
}

struct Toy {
    vocab: Vocabulary,
    train: Vec<Encoded>,
    valid: Vec<Encoded>,
}

fn toy(size: usize) -> Toy {
    let c = generate_toy_corpus(4, size).unwrap();
    let vocab = Vocabulary::build(c.train.iter().chain(&c.valid).chain(&c.test));
    let enc = |xs: &[crate::data::Example]| xs.iter().map(|e| e.encode(&vocab)).collect();
    Toy {
        train: enc(&c.train),
        valid: enc(&c.valid),
        vocab,
    }
}

fn model(vocab: &Vocabulary, variant: Variant, seed: u64) -> Mimn<f32> {
    init_model(ModelConfig::tiny(variant), vocab, None, seed).unwrap().0
}

fn quick(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        max_epochs: epochs,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn all_correct_is_one() {
    let e = Evaluation::from_predictions(&labels(), &[0, 2, 1, 1], &[0, 2, 1, 1]).unwrap();
    assert_eq!(e.accuracy, 1.0);
    assert_eq!(e.per_label[1].total, 2);
    assert!(Evaluation::from_predictions(&labels(), &[], &[]).is_err());
    assert!(Evaluation::from_predictions(&labels(), &[0], &[3]).is_err());
}

#[test]
fn uniform_random_predictor_near_a_third() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 30_000;
    let gold: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
    let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
    let e = Evaluation::from_predictions(&labels(), &pred, &gold).unwrap();
    // 4 standard deviations of a binomial proportion
    let sd = (1.0f64 / 3.0 * 2.0 / 3.0 / n as f64).sqrt();
    assert!((e.accuracy - 1.0 / 3.0).abs() < 4.0 * sd, "{}", e.accuracy);
}

proptest! {
    #[test]
    fn per_label_recombines(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..200)) {
        let (pred, gold): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let e = Evaluation::from_predictions(&labels(), &pred, &gold).unwrap();
        let recombined: f64 = e
            .per_label
            .iter()
            .filter_map(|l| l.accuracy.map(|a| a * l.total as f64))
            .sum::<f64>()
            / gold.len() as f64;
        prop_assert!((recombined - e.accuracy).abs() < 1e-12);
    }
}

#[test]
fn averaging_two_members() {
    let avg = average(&[vec![0.6f64, 0.4, 0.0], vec![0.2, 0.8, 0.0]]);
    let expect = [0.4, 0.6, 0.0];
    for (a, b) in avg.iter().zip(expect) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(argmax(&avg), 1);
}

#[test]
fn ensemble_of_copies_matches_single() {
    let t = toy(60);
    let m = model(&t.vocab, Variant::Full, 1);
    let single = evaluate(&m, &t.valid).unwrap();
    assert_eq!(ensemble_eval(std::slice::from_ref(&m), &t.valid).unwrap(), single);
    let copies = vec![m.clone(), m.clone(), m.clone()];
    assert_eq!(ensemble_eval(&copies, &t.valid).unwrap(), single);
    let other = model(&t.vocab, Variant::NoMemory, 1);
    assert!(ensemble_eval(&[m, other], &t.valid).is_err());
    assert!(ensemble_eval::<f32>(&[], &t.valid).is_err());
}

#[test]
fn loss_decreases_on_fixed_batch() {
    let t = toy(60);
    let mut m: Mimn<f64> = init_model(ModelConfig::tiny(Variant::Full), &t.vocab, None, 2)
        .unwrap()
        .0;
    let refs: Vec<&Encoded> = t.train.iter().take(8).collect();
    let batch = Batch::from_examples(&refs);
    let mut adam = Adam::new(AdamConfig::default());
    let mut losses = Vec::new();
    for _ in 0..6 {
        let (loss, _) = train_batch(&mut m, &mut adam, &batch, 0.0, 0).unwrap();
        losses.push(loss);
    }
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn patience_one_stops_after_flat_epoch() {
    let t = toy(60);
    let mut cfg = quick(0, 20);
    cfg.patience = 1;
    cfg.adam.lr = 0.0;
    let out = train(model(&t.vocab, Variant::Full, 0), &t.train, &t.valid, &cfg).unwrap();
    assert_eq!(out.history.epochs.len(), 2);
    assert!(out.history.stopped_early);
    assert_eq!(out.history.best_epoch, 1);
}

#[test]
fn identical_seeds_identical_history_and_frozen_embeddings() {
    let t = toy(60);
    let start = model(&t.vocab, Variant::Full, 3);
    let emb = start.store().get(start.layout().embedding).data().to_vec();
    let run = || train(start.clone(), &t.train, &t.valid, &quick(5, 3)).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    let bits = |m: &Mimn<f32>| -> Vec<u32> {
        m.store()
            .iter()
            .flat_map(|(_, _, t)| t.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    assert_eq!(bits(&a.model), bits(&b.model));
    let after = a.model.store().get(a.model.layout().embedding).data();
    assert_eq!(
        emb.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        after.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn best_checkpoint_is_returned() {
    let t = toy(90);
    let out = train(model(&t.vocab, Variant::Full, 4), &t.train, &t.valid, &quick(1, 4)).unwrap();
    let h = &out.history;
    let max = h.epochs.iter().map(|e| e.valid_accuracy).fold(f64::MIN, f64::max);
    assert_eq!(h.best_valid_accuracy, max);
    assert_eq!(evaluate(&out.model, &t.valid).unwrap().accuracy, max);
    assert_eq!(h.variant, Variant::Full);
}

#[test]
fn non_finite_parameters_abort_with_batch_index() {
    let t = toy(60);
    let mut m = model(&t.vocab, Variant::Full, 0);
    let id = m.store().id("mlp.out.b").unwrap();
    m.store_mut().get_mut(id).data_mut()[0] = f32::NAN;
    let err = train(m, &t.train, &t.valid, &quick(0, 2)).err().unwrap();
    assert!(matches!(err, Error::Divergence { epoch: 1, batch: 0 }), "{err}");
}

#[test]
fn config_checks() {
    let t = toy(60);
    let mut cfg = quick(0, 1);
    cfg.patience = 0;
    assert!(matches!(
        train(model(&t.vocab, Variant::Full, 0), &t.train, &t.valid, &cfg),
        Err(Error::Config(_))
    ));
    assert!(train(model(&t.vocab, Variant::Full, 0), &t.train, &[], &quick(0, 1)).is_err());
    let parsed: TrainConfig = serde_json::from_str(r#"{"batch_size": 4}"#).unwrap();
    assert_eq!(parsed.batch_size, 4);
    assert_eq!(parsed.l2_coeff, 3e-4);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"batchsize": 4}"#).is_err());
}

#[test]
fn checkpoint_round_trip_preserves_evaluation() {
    let t = toy(60);
    let out = train(model(&t.vocab, Variant::GateRelu, 2), &t.train, &t.valid, &quick(2, 2)).unwrap();
    let before = evaluate(&out.model, &t.valid).unwrap();
    let bytes = Checkpoint::from_model(&out.model, &t.vocab).to_bytes().unwrap();
    let back: Mimn<f32> = Checkpoint::from_bytes(&bytes).unwrap().model().unwrap();
    assert_eq!(evaluate(&back, &t.valid).unwrap(), before);
    for e in &t.valid {
        assert_eq!(predict(&back, e).unwrap(), predict(&out.model, e).unwrap());
    }
}
