use dialogem::corpus::{make_instances, split, synthesize_corpus, Instance, SynthConfig};
use dialogem::em::{e_step_posterior, finetune, TrainConfig};
use dialogem::eval::{elbo_diagnostics, evaluate_generation, generate_response, DecodeConfig};
use dialogem::model::{response_loglik, AdamConfig, GeneratorParams, ModelConfig};
use dialogem::text::{encode_instance, Vocabulary};

fn corpus(n: usize, seed: u64) -> (Vocabulary, Vec<Instance>, Vec<Instance>) {
    let ds = synthesize_corpus(&SynthConfig {
        n_dialogues: n,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let s = split(&ds, [0.8, 0.1, 0.1], seed).unwrap();
    (
        Vocabulary::build(&s.train, 1, 10_000),
        make_instances(&s.train),
        make_instances(&s.test),
    )
}

fn model(vocab: &Vocabulary, d: usize, layers: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        d_model: d,
        n_layers: layers,
        n_heads: 2,
        d_ff: 2 * d,
        max_len: 72,
        init_scale: 0.1,
        seed,
    }
}

fn train_cfg(epochs: usize, lr: f64, batch_size: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size,
        adam: AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn trained_model_copies_the_addressee_keyword() {
    let (vocab, train, test) = corpus(500, 21);
    let mut params = GeneratorParams::<f32>::init(&model(&vocab, 32, 2, 1)).unwrap();
    finetune(&mut params, &train, &vocab, &train_cfg(4, 1e-3, 16)).unwrap();

    let cfg = DecodeConfig::default();
    let sample: Vec<&Instance> = test.iter().filter(|i| i.t >= 3).take(50).collect();
    assert_eq!(sample.len(), 50);
    let hits = sample
        .iter()
        .filter(|inst| {
            let z = inst.gold_addressee.unwrap();
            let keyword = vocab.id(&inst.context[z - 1].tokens[0]);
            generate_response(&params, inst, &vocab, &cfg)
                .unwrap()
                .contains(&keyword)
        })
        .count();
    assert!(hits >= 40, "{hits}/50 responses contain the addressee keyword");

    // changing z moves the likelihood once the model has learned to copy
    let inst = sample[0];
    let lls: Vec<f64> = (1..inst.t)
        .map(|z| response_loglik(&params, &encode_instance(inst, Some(z), &vocab, 64).unwrap()).unwrap())
        .collect();
    assert!(lls.iter().any(|&l| (l - lls[0]).abs() > 1e-3), "{lls:?}");
}

#[test]
fn memorized_corpus_scores_near_perfect_bleu() {
    let (vocab, train, _) = corpus(20, 22);
    let five: Vec<Instance> = train.iter().filter(|i| i.t >= 3).take(5).cloned().collect();
    let mut params = GeneratorParams::<f32>::init(&model(&vocab, 32, 2, 2)).unwrap();
    let losses = finetune(&mut params, &five, &vocab, &train_cfg(300, 1e-2, 5)).unwrap();
    assert!(*losses.last().unwrap() < 0.05, "{:?}", losses.last());
    let report = evaluate_generation(&params, &five, &vocab, &DecodeConfig::default()).unwrap();
    assert!(report.bleu[3] > 0.9, "{report:?}");
}

#[test]
fn uniform_model_scores_near_zero_bleu() {
    let (vocab, _, test) = corpus(200, 23);
    let params = GeneratorParams::<f32>::init(&ModelConfig {
        init_scale: 0.0,
        ..model(&vocab, 16, 1, 3)
    })
    .unwrap();
    let report = evaluate_generation(&params, &test, &vocab, &DecodeConfig::default()).unwrap();
    assert!(report.bleu[3] < 0.05, "{report:?}");
    for x in report.bleu.iter().chain([&report.rouge_l]) {
        assert!((0.0..=1.0).contains(x));
    }
    assert_eq!(report.n_examples, test.len());
}

#[test]
fn lower_bound_is_tight_only_at_the_posterior() {
    let (vocab, train, _) = corpus(30, 24);
    let params = GeneratorParams::<f32>::init(&ModelConfig {
        init_scale: 0.6,
        ..model(&vocab, 16, 1, 4)
    })
    .unwrap();
    let inst = train.iter().find(|i| i.t == 4).unwrap();
    let exact = elbo_diagnostics(&params, inst, &vocab, 64, None).unwrap();
    assert!(exact.gap.abs() < 1e-9, "{exact:?}");
    let post = e_step_posterior(&params, inst, &vocab, 64).unwrap();
    let given = elbo_diagnostics(&params, inst, &vocab, 64, Some(&post.probs)).unwrap();
    assert!(given.gap.abs() < 1e-9);

    let uniform = elbo_diagnostics(&params, inst, &vocab, 64, Some(&[1.0 / 3.0; 3])).unwrap();
    assert!(uniform.gap > 0.0, "{uniform:?}");
    assert!((uniform.marginal - exact.marginal).abs() < 1e-12);
    assert!(uniform.entropy > 0.0);

    let single = train.iter().find(|i| i.t == 2).unwrap();
    let r = elbo_diagnostics(&params, single, &vocab, 64, None).unwrap();
    assert_eq!(r.entropy, 0.0);
    assert!((r.marginal - r.expected_complete).abs() < 1e-12);
}
