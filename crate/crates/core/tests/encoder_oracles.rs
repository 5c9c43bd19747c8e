use qamatch::data::{generate_synthetic, SyntheticSpec};
use qamatch::encoder::{encode_crossed, encode_single, init_params, pool, CrossWiring, EncoderConfig, EncoderMode, Pooling, TokenStates};
use qamatch::gradcheck::{check_triplet_gradients, tiny_config, TripletInputs};
use qamatch::heads::{cnn_head, CnnHeadConfig};
use qamatch::model::{LossConfig, Model, Variant};
use qamatch::params::ParamStore;
use qamatch::text::{encode, EmbeddingTables, Vocabulary, PAD};
use qamatch::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).unwrap()
}

fn to_mat(t: &Tensor) -> Mat {
    let (r, _) = t.dims2().unwrap();
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

fn linear(x: &Mat, w: &Tensor, b: &Tensor) -> Mat {
    let (inp, out) = w.dims2().unwrap();
    x.iter()
        .map(|row| {
            (0..out)
                .map(|j| b.data()[j] + (0..inp).map(|k| row[k] * w.get2(k, j)).sum::<f64>())
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Mat, g: &Tensor, b: &Tensor) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-12).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| g.data()[j] * (v - mu) * inv + b.data()[j])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

/// One post-norm layer, single head, queries from `x`, keys/values from `kv`.
fn oracle_layer(p: &ParamStore, x: &Mat, kv: &Mat, key_mask: &[u8]) -> Mat {
    let g = |n: &str| p.get(&format!("encoder.0.{n}")).unwrap();
    let q = linear(x, g("attn.query.weight"), g("attn.query.bias"));
    let k = linear(kv, g("attn.key.weight"), g("attn.key.bias"));
    let v = linear(kv, g("attn.value.weight"), g("attn.value.bias"));
    let d = x[0].len() as f64;
    let ctx: Mat = q
        .iter()
        .map(|qi| {
            let scores: Vec<f64> = k
                .iter()
                .zip(key_mask)
                .map(|(kj, &m)| {
                    let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt();
                    if m == 1 { s } else { s - 1e9 }
                })
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len()).map(|c| e.iter().zip(&v).map(|(w, vr)| w / z * vr[c]).sum()).collect()
        })
        .collect();
    let attn = linear(&ctx, g("attn.output.weight"), g("attn.output.bias"));
    let x1 = layer_norm(&add(x, &attn), g("attn_norm.gamma"), g("attn_norm.beta"));
    let inner: Mat = linear(&x1, g("ffn.inner.weight"), g("ffn.inner.bias"))
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    let outer = linear(&inner, g("ffn.outer.weight"), g("ffn.outer.bias"));
    layer_norm(&add(&x1, &outer), g("ffn_norm.gamma"), g("ffn_norm.beta"))
}

fn small_encoder(mode: EncoderMode, seed: u64) -> (EncoderConfig, ParamStore) {
    let cfg = EncoderConfig {
        dim: 4,
        layers: 1,
        heads: 1,
        ffn_dim: 6,
        mode,
        cross: CrossWiring::EveryLayer,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_params(&mut store, &cfg, 8, 3, &mut rng);
    // non-trivial biases and norm parameters so every term is exercised
    let names: Vec<String> = store.iter().map(|(k, _)| k.to_string()).collect();
    for name in names {
        let shape = store.get(&name).unwrap().shape().to_vec();
        if name.ends_with("bias") || name.ends_with("beta") {
            store.insert(name, rand_tensor(&mut rng, &shape, 0.3));
        } else if name.ends_with("gamma") {
            let mut t = rand_tensor(&mut rng, &shape, 0.3);
            t.data_mut().iter_mut().for_each(|v| *v += 1.0);
            store.insert(name, t);
        }
    }
    (cfg, store)
}

fn assert_close(got: &Tensor, want: &Mat, tol: f64) {
    for (i, row) in want.iter().enumerate() {
        for (j, &w) in row.iter().enumerate() {
            let g = got.get2(i, j);
            assert!((g - w).abs() < tol, "({i},{j}): {g} vs {w}");
        }
    }
}

#[test]
fn self_attention_layer_matches_straight_line_evaluation() {
    for (seed, mask) in [(1, vec![1, 1, 1]), (2, vec![1, 1, 0])] {
        let (cfg, store) = small_encoder(EncoderMode::Siamese, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 10);
        let x = rand_tensor(&mut rng, &[3, 4], 1.0);
        let mut tape = Tape::new();
        let params = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = encode_single(&mut tape, &cfg, &params, xv, &mask).unwrap();
        let want = oracle_layer(&store, &to_mat(&x), &to_mat(&x), &mask);
        assert_close(tape.value(out.states), &want, 1e-12);
    }
}

#[test]
fn crossed_layer_matches_evaluation_over_six_keys() {
    let (cfg, store) = small_encoder(EncoderMode::Crossed, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let xq = rand_tensor(&mut rng, &[3, 4], 1.0);
    let xa = rand_tensor(&mut rng, &[3, 4], 1.0);
    let (mq, ma) = (vec![1, 1, 0], vec![1, 1, 1]);
    let mut tape = Tape::new();
    let params = store.bind(&mut tape, false);
    let (vq, va) = (tape.constant(xq.clone()), tape.constant(xa.clone()));
    let (sq, sa) = encode_crossed(&mut tape, &cfg, &params, (vq, &mq), (va, &ma)).unwrap();
    let (q, a) = (to_mat(&xq), to_mat(&xa));
    let kv_q: Mat = q.iter().chain(&a).cloned().collect();
    let kv_a: Mat = a.iter().chain(&q).cloned().collect();
    let mask_q: Vec<u8> = mq.iter().chain(&ma).copied().collect();
    let mask_a: Vec<u8> = ma.iter().chain(&mq).copied().collect();
    assert_close(tape.value(sq.states), &oracle_layer(&store, &q, &kv_q, &mask_q), 1e-12);
    assert_close(tape.value(sa.states), &oracle_layer(&store, &a, &kv_a, &mask_a), 1e-12);
    assert_eq!(tape.shape(sq.states), &[3, 4]);
}

fn corpus() -> (qamatch::data::Dataset, Vocabulary) {
    let ds = generate_synthetic(&SyntheticSpec::new(6, 2, 20, 4)).unwrap();
    let vocab = Vocabulary::build(&ds.texts()).unwrap();
    (ds, vocab)
}

#[test]
fn identical_branches_give_identical_vectors() {
    let (ds, vocab) = corpus();
    for variant in Variant::ALL {
        let model = Model::new(tiny_config(variant, vocab.len()), 5).unwrap();
        for text in ds.texts().iter().take(5) {
            let seq = encode(text, &vocab, 8).unwrap();
            let (q, a) = model.represent_pair(&seq, &seq).unwrap();
            assert_eq!(q, a, "{variant}");
            assert!((model.score(&seq, &seq).unwrap() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn swapping_crossed_inputs_swaps_outputs() {
    let (ds, vocab) = corpus();
    let texts = ds.texts();
    let model = Model::new(tiny_config(Variant::CrossedBert, vocab.len()), 6).unwrap();
    let q = encode(texts[0], &vocab, 8).unwrap();
    let a = encode(texts[1], &vocab, 8).unwrap();
    let (q1, a1) = model.represent_pair(&q, &a).unwrap();
    let (a2, q2) = model.represent_pair(&a, &q).unwrap();
    assert_eq!(q1, q2);
    assert_eq!(a1, a2);
}

#[test]
fn crossed_question_depends_on_answer_and_siamese_does_not() {
    let (ds, vocab) = corpus();
    let texts = ds.texts();
    let q = encode(texts[0], &vocab, 8).unwrap();
    let a = encode(texts[1], &vocab, 8).unwrap();
    let mut b = a.clone();
    b.token_ids[1] = if b.token_ids[1] == 4 { 5 } else { 4 };
    for variant in Variant::ALL {
        let model = Model::new(tiny_config(variant, vocab.len()), 7).unwrap();
        let (qa, _) = model.represent_pair(&q, &a).unwrap();
        let (qb, _) = model.represent_pair(&q, &b).unwrap();
        if variant == Variant::SiameseBert {
            assert_eq!(qa, qb);
        } else {
            assert_ne!(qa, qb, "{variant}");
        }
    }
}

#[test]
fn useful_rows_ignore_pad_token_ids_in_siamese_mode() {
    let (cfg, _) = small_encoder(EncoderMode::Siamese, 1);
    let vocab = Vocabulary::build(&["甲乙丙丁"]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    init_params(&mut store, &cfg, vocab.len(), 6, &mut rng);
    let tables = EmbeddingTables {
        token: store.get("embed.token").unwrap().clone(),
        segment: store.get("embed.segment").unwrap().clone(),
        position: store.get("embed.position").unwrap().clone(),
    };
    let seq = encode("甲乙", &vocab, 6).unwrap();
    let mut other = seq.clone();
    other.token_ids[5] = 6;
    let run = |s: &qamatch::EncodedSequence| {
        let mut tape = Tape::new();
        let params = store.bind(&mut tape, false);
        let x = tape.constant(tables.embed(s).unwrap());
        let out = encode_single(&mut tape, &cfg, &params, x, &s.useful_mask).unwrap();
        tape.value(out.states).clone()
    };
    let (a, b) = (run(&seq), run(&other));
    for i in 0..4 {
        assert_eq!(a.row(i), b.row(i));
    }
    assert_ne!(a.row(5), b.row(5));
}

#[test]
fn pooling_modes_agree_on_full_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(&mut rng, &[5, 3], 2.0);
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let states = TokenStates { states: v, mask: vec![1; 5] };
    let mean = pool(&mut tape, &states, Pooling::MeanToken).unwrap();
    let useful = pool(&mut tape, &states, Pooling::MeanUsefulToken).unwrap();
    for (a, b) in tape.value(mean).data().iter().zip(tape.value(useful).data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn cnn_max_equals_best_enumerated_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let (l, d, n) = (rng.gen_range(3..=7), rng.gen_range(1..=3), rng.gen_range(1..=4));
        let x = rand_tensor(&mut rng, &[l, d], 1.0);
        let cfg = CnnHeadConfig {
            kernel_sizes: vec![1, 2, 3],
            feature_maps: n,
        };
        let mut store = ParamStore::new();
        for &k in &cfg.kernel_sizes {
            store.insert(format!("cnn.k{k}.weight"), rand_tensor(&mut rng, &[k * d, n], 1.0));
            store.insert(format!("cnn.k{k}.bias"), rand_tensor(&mut rng, &[n], 0.2));
        }
        let mut tape = Tape::new();
        let params = store.bind(&mut tape, false);
        let v = tape.constant(x.clone());
        let out = cnn_head(&mut tape, &cfg, &params, &TokenStates { states: v, mask: vec![1; l] }).unwrap();
        let got = tape.value(out).data().to_vec();
        assert_eq!(got.len(), cfg.output_dim());
        let mut slot = 0;
        for &k in &cfg.kernel_sizes {
            let w = store.get(&format!("cnn.k{k}.weight")).unwrap();
            let b = store.get(&format!("cnn.k{k}.bias")).unwrap();
            for j in 0..n {
                let responses: Vec<f64> = (0..=l - k)
                    .map(|start| {
                        let mut acc = b.data()[j];
                        for o in 0..k {
                            for c in 0..d {
                                acc += x.get2(start + o, c) * w.get2(o * d + c, j);
                            }
                        }
                        acc.max(0.0)
                    })
                    .collect();
                assert!(responses.iter().all(|&r| got[slot] >= r - 1e-12), "k={k} j={j}");
                let best = responses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                assert!((got[slot] - best).abs() < 1e-12);
                slot += 1;
            }
        }
    }
}

#[test]
fn head_output_dimensions() {
    let (ds, vocab) = corpus();
    let seq = encode(ds.texts()[0], &vocab, 8).unwrap();
    for variant in Variant::ALL {
        let cfg = tiny_config(variant, vocab.len());
        let want = cfg.output_dim();
        let model = Model::new(cfg, 1).unwrap();
        let (q, a) = model.represent_pair(&seq, &seq).unwrap();
        assert_eq!(q.shape(), &[want]);
        assert_eq!(a.shape(), &[want]);
    }
    assert_eq!(tiny_config(Variant::CrossedBertMultiScaleCnn, 10).output_dim(), 3);
    assert_eq!(tiny_config(Variant::CrossedBertBiGru, 10).output_dim(), 8);
}

#[test]
fn embedding_rows_are_table_sums() {
    let vocab = Vocabulary::build(&["腹痛", "痛"]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let tables = EmbeddingTables {
        token: rand_tensor(&mut rng, &[vocab.len(), 3], 1.0),
        segment: rand_tensor(&mut rng, &[2, 3], 1.0),
        position: rand_tensor(&mut rng, &[6, 3], 1.0),
    };
    let seq = encode("腹痛", &vocab, 6).unwrap().with_segment(1);
    let out = tables.embed(&seq).unwrap();
    for i in 0..6 {
        for c in 0..3 {
            let want = tables.token.get2(seq.token_ids[i], c) + tables.segment.get2(1, c) + tables.position.get2(i, c);
            assert_eq!(out.get2(i, c), want);
        }
    }
    let zeros = EmbeddingTables {
        token: Tensor::zeros(&[vocab.len(), 3]),
        segment: Tensor::zeros(&[2, 3]),
        position: Tensor::zeros(&[6, 3]),
    };
    assert_eq!(zeros.embed(&seq).unwrap(), Tensor::zeros(&[6, 3]));

    // PAD rows move only with the PAD table row
    let mut changed = tables.clone();
    changed.token.data_mut()[PAD * 3] += 1.0;
    let moved = changed.embed(&seq).unwrap();
    for i in 0..6 {
        assert_eq!(moved.row(i) == out.row(i), seq.useful_mask[i] == 1);
    }

    let mut bad = seq.clone();
    bad.token_ids[1] = vocab.len();
    assert!(tables.embed(&bad).is_err());
}

#[test]
fn permuted_content_changes_embedding() {
    let vocab = Vocabulary::build(&["甲乙"]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let tables = EmbeddingTables {
        token: rand_tensor(&mut rng, &[vocab.len(), 2], 1.0),
        segment: rand_tensor(&mut rng, &[2, 2], 1.0),
        position: rand_tensor(&mut rng, &[5, 2], 1.0),
    };
    let a = tables.embed(&encode("甲乙", &vocab, 5).unwrap()).unwrap();
    let b = tables.embed(&encode("乙甲", &vocab, 5).unwrap()).unwrap();
    let sum = |t: &Tensor| t.data().iter().sum::<f64>();
    assert!((sum(&a) - sum(&b)).abs() < 1e-12);
    assert_ne!(a, b);
}

#[test]
fn two_layer_model_gradients_match_differences() {
    let (ds, vocab) = corpus();
    let texts = ds.texts();
    let mut cfg = tiny_config(Variant::CrossedBert, vocab.len());
    cfg.encoder.layers = 2;
    let model = Model::new(cfg, 16).unwrap();
    let enc = |i: usize| encode(texts[i], &vocab, 8).unwrap();
    let (q, p, n) = (enc(0), enc(6), enc(9));
    let inputs = TripletInputs {
        question: &q,
        positive: &p,
        negative: &n,
    };
    let report = check_triplet_gradients(&model, &inputs, &LossConfig { margin: 1.0 }, 1e-4).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn last_layer_wiring_only_crosses_at_the_top() {
    let (ds, vocab) = corpus();
    let texts = ds.texts();
    let q = encode(texts[0], &vocab, 8).unwrap();
    let a = encode(texts[1], &vocab, 8).unwrap();
    let mut cfg = tiny_config(Variant::CrossedBert, vocab.len());
    cfg.encoder.layers = 2;
    let every = Model::new(cfg.clone(), 2).unwrap();
    cfg.encoder.cross = CrossWiring::LastLayer;
    let last = Model::from_parts(cfg, every.params.clone()).unwrap();
    assert_ne!(every.represent_pair(&q, &a).unwrap(), last.represent_pair(&q, &a).unwrap());
}
