use std::fs;
use std::path::Path;

use proptest::prelude::*;
use qamatch::checkpoint::{load_checkpoint, load_with_vocab, save_checkpoint, vocab_path, Checkpoint};
use qamatch::cli::run;
use qamatch::config::RunConfig;
use qamatch::data::{generate_synthetic, SyntheticSpec};
use qamatch::encoder::{CrossWiring, Pooling};
use qamatch::gradcheck::tiny_config;
use qamatch::text::encode;
use qamatch::{Model, Variant, Vocabulary};

fn cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("qamatch").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn saved_model(dir: &Path) -> (std::path::PathBuf, Model, Vocabulary) {
    let ds = generate_synthetic(&SyntheticSpec::new(6, 2, 20, 1)).unwrap();
    let vocab = Vocabulary::build(&ds.texts()).unwrap();
    let model = Model::new(tiny_config(Variant::CrossedBertBiGru, vocab.len()), 3).unwrap();
    let path = dir.join("m.ckpt");
    save_checkpoint(&path, &Checkpoint::new(&model, &vocab, None, 3, 0), &vocab).unwrap();
    (path, model, vocab)
}

#[test]
fn reloaded_model_scores_match() {
    let dir = tempfile::tempdir().unwrap();
    let (path, model, _) = saved_model(dir.path());
    let (ckpt, vocab) = load_with_vocab(&path).unwrap();
    let loaded = ckpt.model().unwrap();
    assert_eq!(loaded.config, model.config);
    for (a, b) in [("甲乙丙", "丙乙"), ("丁", "甲丁丁")] {
        let qa = encode(a, &vocab, model.config.seq_len).unwrap();
        let qb = encode(b, &vocab, model.config.seq_len).unwrap();
        let want = model.score(&qa, &qb).unwrap();
        let got = loaded.score(&qa, &qb).unwrap();
        assert!((got - want).abs() <= 1e-6 * want.abs().max(1e-3), "{got} vs {want}");
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _, _) = saved_model(dir.path());
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_checkpoint(&path).is_err());

    fs::write(&path, &bytes).unwrap();
    fs::write(vocab_path(&path), "[PAD]\n[UNK]\n[CLS]\n[SEP]\n另\n").unwrap();
    let err = load_with_vocab(&path).unwrap_err().to_string();
    assert!(err.contains("vocab"), "{err}");

    let (code, _, err) = cli(&["score", "--checkpoint", p(&path), "--question", "甲", "--answer", "乙"]);
    assert_eq!(code, 1);
    assert!(!err.is_empty());
}

#[test]
fn score_of_identical_texts_prints_one() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _, _) = saved_model(dir.path());
    let (code, out, _) = cli(&["score", "--checkpoint", p(&path), "--question", "腹痛", "--answer", "腹痛"]);
    assert_eq!(code, 0);
    assert_eq!(out, "1.000000\n");
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(cli(&["frobnicate"]).0, 1);
    assert_eq!(cli(&["train", "--no-such-flag", "3"]).0, 1);
    assert_eq!(cli(&["eval"]).0, 1);
    assert_eq!(cli(&["gradcheck", "--arch", "lstm"]).0, 1);
    let (code, _, err) = cli(&["train", "--epochs", "1"]);
    assert_eq!(code, 1);
    assert!(err.contains("--data-dir"), "{err}");
}

#[test]
fn gradcheck_command_passes_for_bigru() {
    let (code, out, _) = cli(&["gradcheck", "--arch", "crossed-bigru"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("max_rel_error"));
}

#[test]
fn gen_data_train_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("run.ckpt");
    let metrics = dir.path().join("log.txt");
    let (code, out, err) = cli(&["gen-data", "--n-questions", "12", "--seed", "3", "--out", p(&data)]);
    assert_eq!(code, 0, "{err}");
    assert!(out.starts_with("split\tquestions"));
    assert!(data.join("questions.csv").is_file());

    let config = dir.path().join("run.cfg");
    fs::write(
        &config,
        format!(
            "# small run\narch=siamese-bert\nhidden=16\nlayers=1\nheads=2\nmax_len=16\nepochs=3\nlr=0.002\nmargin=0.1\ndata_dir={}\n",
            data.display()
        ),
    )
    .unwrap();
    let (code, out, err) = cli(&[
        "train",
        "--config",
        p(&config),
        "--arch",
        "crossed-bert",
        "--epochs",
        "40",
        "--checkpoint-out",
        p(&ckpt),
        "--metrics-out",
        p(&metrics),
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.lines().count(), 40);
    assert_eq!(fs::read_to_string(&metrics).unwrap(), out);

    let (ck, _) = load_with_vocab(&ckpt).unwrap();
    let model = ck.model().unwrap();
    assert_eq!(model.config.variant, Variant::CrossedBert);
    assert_eq!(model.config.encoder.dim, 16);
    assert!(ck.optimizer.is_some());

    let pools = dir.path().join("pools.csv");
    let (code, out, err) = cli(&[
        "eval", "--checkpoint", p(&ckpt), "--data-dir", p(&data), "--split", "train", "--pool-size", "10", "--k", "1,3",
        "--write-pools", p(&pools),
    ]);
    assert_eq!(code, 0, "{err}");
    let acc1: f64 = out.lines().next().unwrap().split('\t').nth(1).unwrap().parse().unwrap();
    assert!(acc1 >= 0.9, "train ACC@1 {acc1}\n{out}");
    assert!(out.lines().any(|l| l.starts_with("3\t")));

    let (code, again, _) = cli(&["eval", "--checkpoint", p(&ckpt), "--data-dir", p(&data), "--pools-file", p(&pools), "--k", "1,3"]);
    assert_eq!(code, 0);
    assert_eq!(again, out);
}

#[test]
fn config_text_round_trips() {
    let mut cfg = RunConfig::default();
    cfg.set("arch", "crossed-cnn").unwrap();
    cfg.set("kernel_sizes", "1,2,4").unwrap();
    cfg.set("lr", "0.0003").unwrap();
    assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    assert!(cfg.set("colour", "blue").is_err());
    assert!(RunConfig::from_text("hidden=8\nhidden=9\n").is_err());
}

fn arb_config() -> impl Strategy<Value = RunConfig> {
    (
        prop::sample::select(Variant::ALL.to_vec()),
        1usize..=2,
        1usize..=3,
        1usize..=2,
        4usize..=10,
        prop::sample::select(vec![Pooling::FirstToken, Pooling::MeanToken, Pooling::MeanUsefulToken]),
        prop::sample::select(vec![CrossWiring::EveryLayer, CrossWiring::LastLayer]),
        any::<bool>(),
        prop::collection::btree_set(1usize..=3, 1..=3),
        1usize..=4,
        1usize..=4,
    )
        .prop_map(|(arch, heads, head_dim, layers, max_len, pooling, cross, segs, ks, maps, gru)| RunConfig {
            arch,
            hidden: heads * head_dim * 2,
            heads,
            layers,
            ffn: Some(head_dim * 3),
            max_len,
            pooling,
            cross,
            branch_segments: segs,
            kernel_sizes: ks.into_iter().collect(),
            feature_maps: maps,
            gru_hidden: gru,
            ..RunConfig::default()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]
    #[test]
    fn valid_configs_run_forward(cfg in arb_config(), seed in 0u64..1000, q in "[甲乙丙丁]{0,12}", a in "[甲乙丙丁]{0,12}") {
        cfg.validate().unwrap();
        let vocab = Vocabulary::build(&["甲乙丙丁"]).unwrap();
        let model = Model::new(cfg.model_config(vocab.len()), seed).unwrap();
        let len = model.config.seq_len;
        let s = model.score(&encode(&q, &vocab, len).unwrap(), &encode(&a, &vocab, len).unwrap()).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }
}
