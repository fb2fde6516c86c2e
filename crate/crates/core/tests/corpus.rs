use std::collections::HashSet;

use dialogem::corpus::{
    filter_dialogues, keyword_token, make_instances, split, synthesize_corpus, Instance,
    SynthConfig,
};

/// Count-based addressee oracle: the candidate whose tokens occur most often
/// in the response, ties to the most recent turn.
fn overlap_oracle(inst: &Instance) -> usize {
    let mut best = (0usize, 1usize);
    for (i, u) in inst.context.iter().enumerate() {
        let vocab: HashSet<&String> = u.tokens.iter().collect();
        let hits = inst.response.iter().filter(|w| vocab.contains(w)).count();
        if hits >= best.0 {
            best = (hits, i + 1);
        }
    }
    best.1
}

/// Variant that only credits the token each candidate introduced: its
/// leading keyword. Replies that quote an earlier keyword do not compete
/// with the turn that first said it.
fn first_mention_oracle(inst: &Instance) -> usize {
    let mut best = (0usize, inst.t - 1);
    for (i, u) in inst.context.iter().enumerate() {
        let hits = inst.response[1..].iter().filter(|w| Some(*w) == u.tokens.first()).count();
        if hits >= best.0 && hits > 0 {
            best = (hits, i + 1);
        }
    }
    best.1
}

fn accuracy(instances: &[Instance], oracle: fn(&Instance) -> usize) -> f64 {
    let hits = instances
        .iter()
        .filter(|i| Some(oracle(i)) == i.gold_addressee)
        .count();
    hits as f64 / instances.len() as f64
}

#[test]
fn scan_of_small_corpus_respects_ranges() {
    let cfg = SynthConfig {
        n_dialogues: 100,
        ..SynthConfig::default()
    };
    let ds = synthesize_corpus(&cfg).unwrap();
    assert_eq!(ds.len(), 100);
    let mut expected_instances = 0;
    for d in &ds {
        assert!((4..=8).contains(&d.len()));
        d.validate().unwrap();
        for (i, u) in d.utterances.iter().enumerate() {
            let t = i + 1;
            match u.addressee {
                None => assert_eq!(t, 1),
                Some(z) => assert!((1..t).contains(&z)),
            }
            assert!(u.tokens[0].starts_with('k'));
        }
        expected_instances += d.len() - 1;
    }
    assert_eq!(make_instances(&ds).len(), expected_instances);
}

#[test]
fn gold_addressees_are_roughly_uniform() {
    let ds = synthesize_corpus(&SynthConfig {
        n_dialogues: 3000,
        turns_range: (4, 4),
        ..SynthConfig::default()
    })
    .unwrap();
    // turn 4 picks among 3 candidates; each share should be 1/3 within 4 sigma
    let mut counts = [0usize; 3];
    for d in &ds {
        counts[d.utterances[3].addressee.unwrap() - 1] += 1;
    }
    let sigma = (3000.0f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
    for c in counts {
        assert!((c as f64 - 1000.0).abs() < 4.0 * sigma, "{counts:?}");
    }
}

#[test]
fn planted_signal_is_visible_to_count_oracles() {
    let ds = synthesize_corpus(&SynthConfig {
        n_dialogues: 500,
        copy_strength: 0.9,
        ..SynthConfig::default()
    })
    .unwrap();
    let inst = make_instances(&ds);
    let plain = accuracy(&inst, overlap_oracle);
    let first = accuracy(&inst, first_mention_oracle);
    eprintln!("overlap oracle {plain:.3}, first-mention oracle {first:.3}");
    assert!(first > 0.8, "first-mention oracle accuracy {first}");
    assert!(first >= plain, "{first} < {plain}");
}

#[test]
fn zero_copy_strength_leaves_oracle_at_chance() {
    let ds = synthesize_corpus(&SynthConfig {
        n_dialogues: 1000,
        copy_strength: 0.0,
        ..SynthConfig::default()
    })
    .unwrap();
    let inst = make_instances(&ds);
    let chance: f64 =
        inst.iter().map(|i| 1.0 / i.n_candidates() as f64).sum::<f64>() / inst.len() as f64;
    let acc = accuracy(&inst, first_mention_oracle);
    let sigma = (chance * (1.0 - chance) / inst.len() as f64).sqrt();
    assert!((acc - chance).abs() < 4.0 * sigma, "acc {acc} chance {chance}");
    let keywords: HashSet<String> = (0..40).map(keyword_token).collect();
    for i in &inst {
        assert!(i.response[1..].iter().all(|w| !keywords.contains(w)));
    }
}

#[test]
fn filter_then_split_keeps_dialogues_whole() {
    let ds = synthesize_corpus(&SynthConfig {
        n_dialogues: 50,
        turns_range: (4, 6),
        ..SynthConfig::default()
    })
    .unwrap();
    let long = filter_dialogues(ds.clone(), 5);
    assert!(long.iter().all(|d| d.len() >= 5));
    let s = split(&long, [0.8, 0.1, 0.1], 3).unwrap();
    let mut ids: Vec<&str> = s
        .train
        .iter()
        .chain(&s.valid)
        .chain(&s.test)
        .map(|d| d.id.as_str())
        .collect();
    ids.sort();
    let mut want: Vec<&str> = long.iter().map(|d| d.id.as_str()).collect();
    want.sort();
    assert_eq!(ids, want);
    assert_eq!(s, split(&long, [0.8, 0.1, 0.1], 3).unwrap());
}
