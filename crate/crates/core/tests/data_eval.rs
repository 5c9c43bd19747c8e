use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use qamatch::data::{generate_synthetic, load_dataset, save_dataset, Answer, DataError, Dataset, Split, SyntheticSpec, Splits};
use qamatch::eval::{acc_at_k, build_pools, rank_pool, read_pools_csv, write_pools_csv, EvalPool};
use proptest::prelude::*;

fn write_dir(dir: &Path, questions: &str, answers: &str, train: &str) {
    fs::write(dir.join("questions.csv"), questions).unwrap();
    fs::write(dir.join("answers.csv"), answers).unwrap();
    fs::write(dir.join("train.txt"), train).unwrap();
    fs::write(dir.join("dev.txt"), "").unwrap();
    fs::write(dir.join("test.txt"), "").unwrap();
}

const QUESTIONS: &str = "question_id,content\n1,腹痛怎么办\n2,头晕\n";
const ANSWERS: &str = "ans_id,question_id,content\n10,1,多喝水\n11,1,\"去医院, 查一下\"\n12,2,休息\n";

#[test]
fn loads_a_small_directory() {
    let dir = tempfile::tempdir().unwrap();
    write_dir(dir.path(), QUESTIONS, ANSWERS, "1\n2\n");
    let ds = load_dataset(dir.path()).unwrap();
    assert_eq!(ds.question_text(1), Some("腹痛怎么办"));
    assert_eq!(ds.answer_text(11), Some("去医院, 查一下"));
    assert_eq!(ds.answers_of(1), &[10, 11]);
    let s = ds.summary(Split::Train);
    assert_eq!((s.questions, s.answers), (2, 3));
    assert!((s.mean_question_chars - 3.5).abs() < 1e-12);
    assert!((s.mean_answer_chars - 13.0 / 3.0).abs() < 1e-12);
    let empty = ds.summary(Split::Dev);
    assert_eq!((empty.questions, empty.answers), (0, 0));
    assert_eq!(empty.mean_answer_chars, 0.0);
}

fn load_err(questions: &str, answers: &str, train: &str) -> DataError {
    let dir = tempfile::tempdir().unwrap();
    write_dir(dir.path(), questions, answers, train);
    load_dataset(dir.path()).unwrap_err()
}

#[test]
fn malformed_rows_report_their_position() {
    match load_err("question_id,content\n1,a\nx,b\n", ANSWERS, "") {
        DataError::Malformed { file, row, .. } => assert_eq!((file.as_str(), row), ("questions.csv", 3)),
        e => panic!("{e}"),
    }
    match load_err(QUESTIONS, "ans_id,question_id,content\n10,1\n", "") {
        DataError::Malformed { file, row, .. } => assert_eq!((file.as_str(), row), ("answers.csv", 2)),
        e => panic!("{e}"),
    }
    match load_err("id,content\n1,a\n", ANSWERS, "") {
        DataError::Malformed { row, .. } => assert_eq!(row, 1),
        e => panic!("{e}"),
    }
}

#[test]
fn dangling_and_duplicate_ids_are_rejected() {
    match load_err(QUESTIONS, "ans_id,question_id,content\n10,1,a\n11,9,b\n", "") {
        DataError::DanglingReference { row, question, .. } => assert_eq!((row, question), (3, 9)),
        e => panic!("{e}"),
    }
    match load_err("question_id,content\n1,a\n1,b\n", ANSWERS, "") {
        DataError::DuplicateId { row, id, .. } => assert_eq!((row, id), (3, 1)),
        e => panic!("{e}"),
    }
    match load_err(QUESTIONS, ANSWERS, "1\n1\n") {
        DataError::DuplicateId { file, row, .. } => assert_eq!((file.as_str(), row), ("train.txt", 2)),
        e => panic!("{e}"),
    }
    assert!(matches!(load_err(QUESTIONS, ANSWERS, "7\n"), DataError::DanglingReference { .. }));
}

#[test]
fn missing_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    write_dir(dir.path(), QUESTIONS, ANSWERS, "1\n");
    fs::remove_file(dir.path().join("dev.txt")).unwrap();
    match load_dataset(dir.path()).unwrap_err() {
        DataError::MissingFile(p) => assert!(p.ends_with("dev.txt")),
        e => panic!("{e}"),
    }
}

#[test]
fn save_then_load_is_identity() {
    let ds = generate_synthetic(&SyntheticSpec::new(12, 3, 25, 8)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), ds);

    // awkward text survives quoting
    let questions = BTreeMap::from([(5, "a,\"b\"\nc".to_string())]);
    let answers = BTreeMap::from([(6, Answer { text: " 前后空格 ".into(), question: 5 })]);
    let odd = Dataset::new(questions, answers, Splits { test: vec![5], ..Splits::default() }).unwrap();
    save_dataset(&odd, dir.path()).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), odd);
}

fn overlap(a: &str, b: &str) -> f64 {
    let count = |s: &str| {
        let mut m: BTreeMap<char, f64> = BTreeMap::new();
        s.chars().for_each(|c| *m.entry(c).or_default() += 1.0);
        m
    };
    let (x, y) = (count(a), count(b));
    x.iter().map(|(c, n)| n.min(*y.get(c).unwrap_or(&0.0))).sum()
}

#[test]
fn lexical_overlap_ranks_synthetic_answers_well() {
    let ds = generate_synthetic(&SyntheticSpec::new(30, 2, 40, 7)).unwrap();
    let qs: Vec<u64> = ds.questions().keys().copied().collect();
    let pools = build_pools(&ds, &qs, 10, 3).unwrap();
    let rankings: Vec<Vec<u64>> = pools
        .iter()
        .map(|p| {
            let q = ds.question_text(p.question).unwrap();
            rank_pool(p, |a| Ok(overlap(q, ds.answer_text(a).unwrap()))).unwrap()
        })
        .collect();
    let acc = acc_at_k(&pools, &rankings, 1).unwrap();
    assert!(acc > 0.5, "overlap baseline ACC@1 {acc}");
    assert_eq!(acc_at_k(&pools, &rankings, 10).unwrap(), 1.0);
}

#[test]
fn pools_hold_every_linked_answer_and_distinct_distractors() {
    let ds = generate_synthetic(&SyntheticSpec::new(20, 3, 30, 1)).unwrap();
    let qs = ds.splits().test.clone();
    let pools = build_pools(&ds, &qs, 8, 4).unwrap();
    assert_eq!(pools, build_pools(&ds, &qs, 8, 4).unwrap());
    for p in &pools {
        let set: BTreeSet<u64> = p.candidates.iter().copied().collect();
        assert_eq!(set.len(), 8);
        assert_eq!(p.relevant, ds.answers_of(p.question).iter().copied().collect());
        assert!(p.relevant.is_subset(&set));
    }
    assert!(build_pools(&ds, &qs, 2, 4).is_err());
    assert!(build_pools(&ds, &qs, 0, 4).is_err());
}

#[test]
fn pools_csv_round_trip() {
    let ds = generate_synthetic(&SyntheticSpec::new(15, 2, 30, 5)).unwrap();
    let pools = build_pools(&ds, &ds.splits().dev, 6, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pools.csv");
    write_pools_csv(&pools, &path).unwrap();
    assert_eq!(read_pools_csv(&path).unwrap(), pools);

    fs::write(&path, "question_id,candidate_id,label\n1,2,5\n").unwrap();
    assert!(read_pools_csv(&path).unwrap_err().to_string().contains("row 2"));
}

proptest! {
    #[test]
    fn acc_is_monotone_in_k(
        scores in prop::collection::vec(prop::collection::vec(0u8..4, 6), 1..12),
        relevant in prop::collection::vec(0usize..6, 1..12),
    ) {
        let pools: Vec<EvalPool> = scores
            .iter()
            .enumerate()
            .map(|(i, _)| EvalPool::new(i as u64, (0..6).collect(), BTreeSet::from([relevant[i % relevant.len()] as u64])).unwrap())
            .collect();
        let rankings: Vec<Vec<u64>> = pools
            .iter()
            .zip(&scores)
            .map(|(p, s)| rank_pool(p, |id| Ok(s[id as usize] as f64)).unwrap())
            .collect();
        let mut prev = 0.0;
        for k in 1..=6 {
            let acc = acc_at_k(&pools, &rankings, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&acc));
            prop_assert!(acc >= prev);
            prev = acc;
        }
        prop_assert_eq!(prev, 1.0);
    }
}
