use std::collections::HashSet;
use std::io::Write;

use dln::eval::{
    accuracy, evaluate, normalize, parse_jsonl, write_jsonl, DataError, Example, SplitDataset, SplitSpec,
};
use dln::init;
use dln::layer::GenerationLimits;
use dln::lm::{ToyLm, ToyLmConfig};
use dln::LayerStack;
use proptest::prelude::*;

fn examples(n: usize) -> Vec<Example> {
    (0..n).map(|i| Example::new(format!("input number {i}"), ["yes", "no"][i % 2])).collect()
}

#[test]
fn leopard_split_sizes_and_partition() {
    let data = SplitDataset::from_examples("t", examples(1000), SplitSpec::LEOPARD, 3).unwrap();
    assert_eq!((data.train.len(), data.valid.len(), data.test.len()), (400, 250, 250));
    let ids: Vec<&str> = data.train.iter().chain(&data.valid).chain(&data.test).map(|e| e.id.as_str()).collect();
    assert_eq!(ids.iter().collect::<HashSet<_>>().len(), ids.len());
    assert_eq!(data.class_labels, vec!["no".to_string(), "yes".to_string()]);
}

#[test]
fn tiny_date_style_split() {
    let spec = init::task("Date.").unwrap().split;
    assert_eq!(spec, SplitSpec::new(59, 60, 250));
    let data = SplitDataset::from_examples("date", examples(369), spec, 1).unwrap();
    assert_eq!(data.test.len(), 250);
}

#[test]
fn load_is_deterministic_and_reports_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("task.jsonl");
    write_jsonl(&path, &examples(30)).unwrap();
    let a = SplitDataset::load(&path, SplitSpec::new(10, 10, 10), 5).unwrap();
    let b = SplitDataset::load(&path, SplitSpec::new(10, 10, 10), 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.task_name, "task");
    assert!(matches!(
        SplitDataset::load(&path, SplitSpec::new(20, 10, 10), 5),
        Err(DataError::SplitTooLarge { requested: 40, available: 30 })
    ));
    let bad = dir.path().join("bad.jsonl");
    let mut f = std::fs::File::create(&bad).unwrap();
    writeln!(f, "{{\"input\": \"a\", \"target\": \"b\"}}").unwrap();
    writeln!(f).unwrap();
    writeln!(f, "{{\"input\": \"a\"").unwrap();
    assert!(matches!(SplitDataset::load(&bad, SplitSpec::new(1, 0, 0), 0), Err(DataError::Malformed { line: 3, .. })));
    assert!(matches!(
        SplitDataset::load(dir.path().join("missing.jsonl"), SplitSpec::new(1, 0, 0), 0),
        Err(DataError::Io { .. })
    ));
}

#[test]
fn records_with_ids_and_empty_fields() {
    let src = "{\"id\": \"r1\", \"input\": \"x\", \"target\": \"y\"}\n{\"input\": \"x2\", \"target\": \"y\"}\n";
    let ex = parse_jsonl(src.as_bytes()).unwrap();
    assert_eq!(ex[0].id, "r1");
    assert_eq!(ex[1].id, Example::new("x2", "y").id);
    assert!(matches!(
        parse_jsonl("{\"input\": \"\", \"target\": \"y\"}".as_bytes()),
        Err(DataError::Malformed { line: 1, .. })
    ));
    let dup = "{\"id\": \"a\", \"input\": \"x\", \"target\": \"y\"}\n{\"id\": \"a\", \"input\": \"z\", \"target\": \"y\"}\n";
    let ex = parse_jsonl(dup.as_bytes()).unwrap();
    assert!(matches!(
        SplitDataset::from_examples("d", ex, SplitSpec::new(1, 1, 0), 0),
        Err(DataError::DuplicateId(_))
    ));
}

#[test]
fn normalize_examples() {
    assert_eq!(normalize(" Yes."), "yes");
    assert_eq!(normalize("POSITIVE"), "positive");
    assert_eq!(normalize("negative"), "negative");
    assert_eq!(normalize("- No"), "no");
    assert_eq!(normalize("  (A)   first\toption!? "), "(a) first option");
}

#[test]
fn accuracy_examples() {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    assert_eq!(accuracy(&s(&["a", "b"]), &s(&["a", "b"])).unwrap(), 1.0);
    assert_eq!(accuracy(&s(&["a", "b"]), &s(&["c", "d"])).unwrap(), 0.0);
    assert_eq!(accuracy(&s(&["yes", "No.", "", "x"]), &s(&["Yes", "no", "yes", "x"])).unwrap(), 0.75);
    assert!(matches!(accuracy(&s(&["a"]), &s(&[])), Err(DataError::LengthMismatch { .. })));
}

#[test]
fn evaluation_is_deterministic_and_empty_outputs_count_as_wrong() {
    let lm = ToyLm::new(ToyLmConfig { seed: 4, ..ToyLmConfig::default() }).unwrap();
    let stack = LayerStack::single(init::task("mpqa").unwrap().init_prompt);
    let ex = examples(12);
    let limits = GenerationLimits::default();
    let a = evaluate(&stack, &ex, &lm, &limits).unwrap();
    assert_eq!(a, evaluate(&stack, &ex, &lm, &limits).unwrap());
    // Targets the toy vocabulary cannot produce: every prediction is wrong.
    assert_eq!(a, 0.0);
    assert!(evaluate(&stack, &[], &lm, &limits).is_err());
}

proptest! {
    #[test]
    fn normalize_is_idempotent(s in "\\PC{0,40}") {
        let once = normalize(&s);
        prop_assert_eq!(normalize(&once), once);
    }

    #[test]
    fn accuracy_is_permutation_invariant(
        pairs in proptest::collection::vec(("[ab]{1,2}", "[ab]{1,2}"), 1..20),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let (p, g): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
        let a = accuracy(&p, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let (p2, g2): (Vec<String>, Vec<String>) = shuffled.into_iter().unzip();
        prop_assert!((accuracy(&p2, &g2).unwrap() - a).abs() < 1e-12);
    }
}
