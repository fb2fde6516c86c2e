use dialogem::corpus::{make_instances, split, synthesize_corpus, Instance, SynthConfig};
use dialogem::em::{
    calibrate_alpha, candidate_scores, e_step, e_step_posterior, finetune, gold_assignments,
    hard_assign, initial_labels, m_step, posterior_from_scores, run_em, select_top_alpha,
    Assignment, EmConfig, InitStrategy, IterationLog, TrainConfig,
};
use dialogem::model::{AdamConfig, GeneratorParams, ModelConfig};
use dialogem::text::Vocabulary;
use proptest::prelude::*;

struct Planted {
    vocab: Vocabulary,
    train: Vec<Instance>,
    valid: Vec<Instance>,
}

fn planted(n_dialogues: usize, seed: u64) -> Planted {
    let ds = synthesize_corpus(&SynthConfig {
        n_dialogues,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let s = split(&ds, [0.8, 0.1, 0.1], seed).unwrap();
    Planted {
        vocab: Vocabulary::build(&s.train, 1, 10_000),
        train: make_instances(&s.train),
        valid: make_instances(&s.valid),
    }
}

fn small_model(vocab: &Vocabulary, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_len: 72,
        init_scale: 0.1,
        seed,
    }
}

fn quick_train(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        adam: AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-200.0f64..0.0, 1..8)
}

proptest! {
    #[test]
    fn posterior_is_normalized(s in scores()) {
        let p = posterior_from_scores(&s);
        prop_assert_eq!(p.probs.len(), s.len());
        prop_assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.probs.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn posterior_is_shift_invariant(s in scores(), c in -1e4f64..1e4) {
        let a = posterior_from_scores(&s);
        let shifted: Vec<f64> = s.iter().map(|x| x + c).collect();
        let b = posterior_from_scores(&shifted);
        for (x, y) in a.probs.iter().zip(&b.probs) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn posterior_ratios_follow_likelihoods(s in prop::collection::vec(-30.0f64..0.0, 2..8)) {
        let p = posterior_from_scores(&s);
        for i in 0..s.len() {
            for j in 0..s.len() {
                let want = (s[i] - s[j]).exp();
                prop_assert!((p.probs[i] / p.probs[j] - want).abs() <= 1e-6 * want.max(1.0));
            }
        }
    }

    #[test]
    fn top_alpha_selections_are_nested(
        conf in prop::collection::vec(0.0f64..1.0, 1..40),
        a1 in 0.01f64..1.0,
        a2 in 0.01f64..1.0,
    ) {
        let assignments: Vec<Assignment> = conf
            .iter()
            .enumerate()
            .map(|(i, &c)| Assignment { index: i, dialogue_id: "d".into(), t: 3, z: 1, confidence: c })
            .collect();
        let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        let small: Vec<usize> = select_top_alpha(&assignments, lo).iter().map(|a| a.index).collect();
        let large: Vec<usize> = select_top_alpha(&assignments, hi).iter().map(|a| a.index).collect();
        prop_assert!(small.iter().all(|i| large.contains(i)));
        let min_large = large.iter().map(|&i| conf[i]).fold(f64::INFINITY, f64::min);
        let excluded_max = (0..conf.len()).filter(|i| !large.contains(i)).map(|i| conf[i]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(excluded_max <= min_large);
    }

    #[test]
    fn calibrated_alpha_meets_target_or_floors(
        flags in prop::collection::vec(any::<bool>(), 1..40),
    ) {
        let cfg = EmConfig::default();
        let assignments: Vec<Assignment> = flags
            .iter()
            .enumerate()
            .map(|(i, &ok)| Assignment {
                index: i,
                dialogue_id: "d".into(),
                t: 4,
                z: if ok { 1 } else { 2 },
                confidence: 1.0 - i as f64 / 100.0,
            })
            .collect();
        let gold = vec![Some(1); flags.len()];
        let alpha = calibrate_alpha(&assignments, &gold, &cfg).unwrap();
        let take = select_top_alpha(&assignments, alpha).len();
        let acc = flags[..take].iter().filter(|&&f| f).count() as f64 / take as f64;
        prop_assert!(acc >= cfg.alpha_target_accuracy || (alpha - cfg.alpha_floor).abs() < 1e-12);
    }
}

#[test]
fn model_posteriors_agree_with_raw_scores() {
    let data = planted(60, 4);
    let params = GeneratorParams::<f32>::init(&ModelConfig {
        init_scale: 0.5,
        ..small_model(&data.vocab, 9)
    })
    .unwrap();
    for inst in data.train.iter().take(40) {
        let s = candidate_scores(&params, inst, &data.vocab, 64).unwrap();
        let post = e_step_posterior(&params, inst, &data.vocab, 64).unwrap();
        assert_eq!(post.probs.len(), inst.t - 1);
        assert!((post.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let raw_argmax = (0..s.len()).fold(0, |b, i| if s[i] >= s[b] { i } else { b });
        assert_eq!(hard_assign(&post).z, raw_argmax + 1);
        if inst.t == 2 {
            assert_eq!(post.probs, vec![1.0]);
        }
    }
    let batch = e_step(&params, &data.train[..10], &data.vocab, 64).unwrap();
    for (i, p) in batch.iter().enumerate() {
        assert_eq!(p.index, i);
        let single = e_step_posterior(&params, &data.train[i], &data.vocab, 64).unwrap();
        assert_eq!(p.probs, single.probs);
    }
}

#[test]
fn noisy_oracle_accuracy_is_binomial() {
    let data = planted(400, 5);
    let multi: Vec<Instance> = data
        .train
        .iter()
        .filter(|i| i.t >= 3)
        .take(1000)
        .cloned()
        .collect();
    assert_eq!(multi.len(), 1000);
    let labels = initial_labels(&multi, InitStrategy::NoisyOracle(0.5), 17).unwrap();
    let acc = labels
        .iter()
        .zip(&multi)
        .filter(|(a, i)| Some(a.z) == i.gold_addressee)
        .count() as f64
        / 1000.0;
    assert!((0.45..=0.55).contains(&acc), "{acc}");
    assert!(labels.iter().zip(&multi).all(|(a, i)| (1..i.t).contains(&a.z)));

    // single-candidate instances have no wrong label to draw
    let all = initial_labels(&data.train, InitStrategy::NoisyOracle(0.5), 17).unwrap();
    let t2 = data.train.iter().filter(|i| i.t == 2).count() as f64 / data.train.len() as f64;
    let acc_all = all
        .iter()
        .zip(&data.train)
        .filter(|(a, i)| Some(a.z) == i.gold_addressee)
        .count() as f64
        / data.train.len() as f64;
    let want = 0.5 + 0.5 * t2;
    let sigma = (0.25 / data.train.len() as f64).sqrt();
    assert!((acc_all - want).abs() < 4.0 * sigma, "{acc_all} vs {want}");
}

#[test]
fn m_step_with_zero_lr_keeps_params() {
    let data = planted(30, 6);
    let mut params = GeneratorParams::<f32>::init(&small_model(&data.vocab, 2)).unwrap();
    let before = params.clone();
    let gold = gold_assignments(&data.train).unwrap();
    let losses = m_step(&mut params, &data.train, &gold, &data.vocab, &quick_train(1, 0.0), 0).unwrap();
    assert_eq!(losses.len(), 1);
    assert_eq!(params, before);
    assert!(m_step(&mut params, &data.train, &[], &data.vocab, &quick_train(1, 0.0), 0).is_err());
}

#[test]
fn full_batch_m_step_descends_and_duplicates_match() {
    let data = planted(4, 7);
    let toy: Vec<Instance> = data.train.iter().take(8).cloned().collect();
    let gold = gold_assignments(&toy).unwrap();
    let mut cfg = quick_train(50, 1e-2);
    cfg.batch_size = 64;
    let init = GeneratorParams::<f32>::init(&small_model(&data.vocab, 3)).unwrap();

    let mut p = init.clone();
    let losses = m_step(&mut p, &toy, &gold, &data.vocab, &cfg, 0).unwrap();
    assert!(losses[49] < losses[0], "{} !< {}", losses[49], losses[0]);

    let doubled: Vec<Instance> = toy.iter().chain(&toy).cloned().collect();
    let gold2 = gold_assignments(&doubled).unwrap();
    let mut q = init.clone();
    let losses2 = m_step(&mut q, &doubled, &gold2, &data.vocab, &cfg, 0).unwrap();
    for (a, b) in losses.iter().zip(&losses2) {
        assert!((a - b).abs() < 1e-4 * a.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn finetune_is_m_step_on_gold() {
    let data = planted(20, 8);
    let cfg = quick_train(1, 1e-3);
    let init = GeneratorParams::<f32>::init(&small_model(&data.vocab, 4)).unwrap();
    let mut a = init.clone();
    finetune(&mut a, &data.train, &data.vocab, &cfg).unwrap();
    let mut b = init.clone();
    let gold = gold_assignments(&data.train).unwrap();
    m_step(&mut b, &data.train, &gold, &data.vocab, &cfg, 0).unwrap();
    assert_eq!(a, b);

    let mut c = init.clone();
    assert!(finetune(&mut c, &[], &data.vocab, &cfg).is_err());
    let mut unlabeled = data.train.clone();
    unlabeled[0].gold_addressee = None;
    assert!(finetune(&mut c, &unlabeled, &data.vocab, &cfg).is_err());
}

fn tiny_em(n_iterations: usize) -> EmConfig {
    let mut cfg = EmConfig {
        n_iterations,
        train: quick_train(1, 1e-3),
        init_strategy: InitStrategy::KeywordOverlap,
        record_timing: false,
        seed: 5,
        ..EmConfig::default()
    };
    cfg.decode.limit = Some(20);
    cfg
}

#[test]
fn zero_iterations_is_the_initializer_model() {
    let data = planted(40, 9);
    let mc = small_model(&data.vocab, 6);
    let cfg = tiny_em(0);
    let out = run_em(&data.train, &data.valid, &data.vocab, &mc, &cfg).unwrap();
    assert_eq!(out.log.records.len(), 1);
    assert_eq!(out.best_iteration, 0);
    assert_eq!(out.log.records[0].alpha, 1.0);

    let mut manual = GeneratorParams::<f32>::init(&mc).unwrap();
    let labels = initial_labels(&data.train, cfg.init_strategy, cfg.seed).unwrap();
    m_step(&mut manual, &data.train, &labels, &data.vocab, &cfg.train, 0).unwrap();
    assert_eq!(out.best_params, manual);
}

#[test]
fn identical_seeds_give_identical_logs() {
    let data = planted(40, 10);
    let mc = small_model(&data.vocab, 7);
    let cfg = tiny_em(2);
    let a = run_em(&data.train, &data.valid, &data.vocab, &mc, &cfg).unwrap();
    let b = run_em(&data.train, &data.valid, &data.vocab, &mc, &cfg).unwrap();
    assert_eq!(a.log.records.len(), 3);
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    assert_eq!(a.best_params, b.best_params);
    let parsed = IterationLog::from_csv(&a.log.to_csv()).unwrap();
    assert_eq!(parsed.to_csv(), a.log.to_csv());
    assert!(a.log.records.iter().all(|r| r.seconds == 0.0));
}

#[test]
fn validation_without_labels_is_rejected() {
    let data = planted(20, 11);
    let mut valid = data.valid.clone();
    valid[0].gold_addressee = None;
    let mc = small_model(&data.vocab, 8);
    assert!(run_em(&data.train, &valid, &data.vocab, &mc, &tiny_em(0)).is_err());
}

#[test]
fn gold_trained_model_beats_keyword_overlap_on_held_out() {
    let data = planted(500, 12);
    let mc = ModelConfig {
        d_model: 32,
        n_layers: 2,
        d_ff: 64,
        ..small_model(&data.vocab, 10)
    };
    let mut params = GeneratorParams::<f32>::init(&mc).unwrap();
    finetune(&mut params, &data.train, &data.vocab, &quick_train(4, 1e-3)).unwrap();

    let gold: Vec<Option<usize>> = data.valid.iter().map(|i| i.gold_addressee).collect();
    let acc = |a: &[Assignment]| {
        a.iter().zip(&gold).filter(|(x, g)| Some(x.z) == **g).count() as f64 / a.len() as f64
    };
    let model: Vec<Assignment> = e_step(&params, &data.valid, &data.vocab, 64)
        .unwrap()
        .iter()
        .map(hard_assign)
        .collect();
    let overlap = initial_labels(&data.valid, InitStrategy::KeywordOverlap, 0).unwrap();
    let (m, o) = (acc(&model), acc(&overlap));
    assert!(m > o, "model {m} vs keyword overlap {o}");
}
