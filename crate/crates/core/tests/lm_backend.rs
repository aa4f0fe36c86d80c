use dln::lm::{GenerationRequest, LanguageModel, LmError, ToyLm, ToyLmConfig};
use proptest::prelude::*;

fn toy(seed: u64) -> ToyLm {
    ToyLm::new(ToyLmConfig {
        seed,
        ..ToyLmConfig::default()
    })
    .unwrap()
}

#[test]
fn greedy_samples_are_identical() {
    let lm = toy(1);
    let out = lm.generate(&GenerationRequest { n_samples: 3, ..GenerationRequest::greedy("Q", 4) }).unwrap();
    assert_eq!(out.len(), 3);
    assert!(out.iter().all(|o| o == &out[0]));
}

#[test]
fn seeded_sampling_reproduces() {
    let req = GenerationRequest::sampled("ab", 0.7, 2, 4, 7);
    let a = toy(7).generate(&req).unwrap();
    let b = toy(7).generate(&req).unwrap();
    assert_eq!(a.len(), 2);
    assert_eq!(a, b);
}

#[test]
fn twenty_proposal_samples() {
    let out = toy(2).generate(&GenerationRequest::sampled("c", 0.7, 20, 4, 1)).unwrap();
    assert_eq!(out.len(), 20);
}

#[test]
fn uniform_conditional_logprob() {
    let lm = ToyLm::new(ToyLmConfig {
        vocab: vec!["x".into(), "y".into(), "z".into()],
        sharpness: 0.0,
        min_len: 2,
        max_len: 2,
        ..ToyLmConfig::default()
    })
    .unwrap();
    // Two steps over three symbols with the end marker masked, then a forced end.
    let expected = 2.0 * (1.0f64 / 3.0).ln();
    let s = lm.logprob("anything", "x z").unwrap();
    assert!((s.total_logprob - expected).abs() < 1e-12);
    assert_eq!(s.unit_count, 2);
    assert!((s.normalized_logprob - expected / 2.0).abs() < 1e-12);
}

#[test]
fn batch_logprob_matches_singletons_and_order() {
    let lm = toy(3);
    let pairs: Vec<(String, String)> = vec![
        ("c1".into(), "alpha".into()),
        ("c2".into(), "bravo charlie".into()),
        ("c3".into(), "echo echo echo".into()),
    ];
    let single = lm.batch_logprob(&pairs[..1]).unwrap();
    assert_eq!(single[0], lm.logprob("c1", "alpha").unwrap());
    let forward = lm.batch_logprob(&pairs).unwrap();
    let mut rev = pairs.clone();
    rev.reverse();
    let mut backward = lm.batch_logprob(&rev).unwrap();
    backward.reverse();
    assert_eq!(forward, backward);
}

#[test]
fn batch_of_posterior_samples_gives_one_beta_each() {
    let lm = toy(4);
    let pairs: Vec<(String, String)> = ["alpha", "bravo", "alpha", "delta", "echo"]
        .iter()
        .map(|h| (format!("x\n{h}\nAnswer:"), "foxtrot".to_string()))
        .collect();
    let betas = lm.batch_logprob(&pairs).unwrap();
    assert_eq!(betas.len(), 5);
    assert_eq!(betas[0], betas[2]);
}

#[test]
fn errors() {
    let lm = toy(5);
    assert!(matches!(lm.batch_logprob(&[]), Err(LmError::InvalidRequest(_))));
    assert!(matches!(lm.logprob("c", ""), Err(LmError::InvalidRequest(_))));
    assert!(matches!(lm.logprob("c", "zulu"), Err(LmError::Unscoreable(_))));
    let req = GenerationRequest { n_samples: 0, ..GenerationRequest::greedy("c", 3) };
    assert!(matches!(lm.generate(&req), Err(LmError::InvalidRequest(_))));
    let small = ToyLm::new(ToyLmConfig {
        context_limit: 2,
        ..ToyLmConfig::default()
    })
    .unwrap();
    assert!(matches!(
        small.generate(&GenerationRequest::greedy("one two three", 3)),
        Err(LmError::ContextTooLong { units: 3, limit: 2, .. })
    ));
}

#[test]
fn ledger_counts_units_sent_and_received() {
    let lm = toy(6);
    let before = lm.ledger();
    let out = lm.generate(&GenerationRequest::sampled("one two", 0.7, 2, 3, 1)).unwrap();
    let received: u64 = out.iter().map(|o| o.split_whitespace().count() as u64).sum();
    lm.logprob("one two three", "alpha bravo").unwrap();
    let d = lm.ledger().since(&before);
    assert_eq!(d.call_count, 2);
    assert_eq!(d.prompt_units, 2 + 3 + 2);
    assert_eq!(d.completion_units, received);
}

#[test]
fn enumerated_mass_approaches_one() {
    let mut masses = Vec::new();
    for max_len in 1..=3 {
        let lm = ToyLm::new(ToyLmConfig {
            vocab: vec!["a".into(), "b".into(), "c".into()],
            seed: 9,
            max_len,
            ..ToyLmConfig::default()
        })
        .unwrap();
        let outs = lm.enumerate_outputs(1000).unwrap();
        let mass: f64 = outs.iter().map(|o| lm.logprob("ctx", o).unwrap().total_logprob.exp()).sum();
        masses.push(mass);
    }
    // Lengths are bounded, so the end marker is forced and every bound is a
    // proper distribution.
    for m in masses {
        assert!((m - 1.0).abs() < 1e-9, "{m}");
    }
}

proptest! {
    #[test]
    fn conditionals_sum_to_one(seed in any::<u64>(), ctx in ".{0,40}", hist in proptest::collection::vec(0usize..6, 0..3)) {
        let lm = toy(seed);
        let words: Vec<&str> = hist.iter().map(|&i| lm.vocab()[i].as_str()).collect();
        let p = lm.next_distribution(&ctx, &words).unwrap();
        let s: f64 = p.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn greedy_and_scoring_are_pure(seed in any::<u64>(), ctx in "[a-z ]{1,30}") {
        let lm = toy(seed);
        let a = lm.generate(&GenerationRequest::greedy(ctx.clone(), 3)).unwrap();
        let b = toy(seed).generate(&GenerationRequest::greedy(ctx.clone(), 3)).unwrap();
        prop_assert_eq!(&a, &b);
        if !a[0].is_empty() {
            prop_assert_eq!(lm.logprob(&ctx, &a[0]).unwrap(), lm.logprob(&ctx, &a[0]).unwrap());
        }
    }
}
