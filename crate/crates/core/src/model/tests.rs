use super::*;
use crate::tensor::CeItem;
use crate::vocab::{TaskKind, Vocab, VocabSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vocab() -> Vocab {
    Vocab::new(VocabSpec { num_bins: 16, num_classes: 3, words: vec!["a".into(), "red".into(), "box".into()] }).unwrap()
}

fn tiny(vocab: &Vocab, dim: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        embed_dim: dim,
        num_heads: 2,
        ffn_dim: 2 * dim,
        enc_layers: layers,
        dec_layers: layers,
        max_seq_len: 32,
        vocab_size: vocab.total_size(),
        image_size: (64, 64),
        stem_channels: (4, 8),
        residual: true,
    }
}

fn model<T: Float>(cfg: ModelConfig, seed: u64) -> Model<T> {
    Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn noise_image(h: usize, w: usize, seed: u64) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Raster::new(h, w, (0..h * w * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

fn close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) -> bool {
    a.dim() == b.dim() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab_size: usize) -> Vec<TokenId> {
    (0..n).map(|_| rng.gen_range(0..vocab_size as u32)).collect()
}

/// Logits of every layer at every position for one sequence.
fn all_logits(m: &Model<f64>, mem: &ImageMemory<f64>, tokens: &[TokenId], mode: DecoderMode) -> Vec<Array2<f64>> {
    let mut g = Graph::inference(m.params());
    let memory = mem.to_graph(&mut g);
    let rows: Vec<usize> = (0..tokens.len()).collect();
    let input = DecoderInput { tokens, seq_len: tokens.len(), mem_index: &[0] };
    let out = m.decoder_forward(&mut g, &memory, input, mode, &rows, Heads::All).unwrap();
    out.into_iter().map(|v| g.value(v).clone()).collect()
}

#[test]
fn stem_strides_by_32() {
    let v = vocab();
    let m: Model<f32> = model(tiny(&v, 16, 1), 0);
    for ((h, w), grid) in [((256, 256), (8, 8)), ((224, 256), (7, 8))] {
        let img = noise_image(h, w, 1);
        let mut g = Graph::inference(m.params());
        let (feats, got) = m.stem_forward(&mut g, &[&img]).unwrap();
        assert_eq!(got, grid);
        assert_eq!(g.value(feats).dim(), (grid.0 * grid.1, 16));
    }
    let zero = Raster::filled(64, 64, 0.0);
    let mut g = Graph::inference(m.params());
    let (feats, _) = m.stem_forward(&mut g, &[&zero]).unwrap();
    assert!(g.value(feats).iter().all(|x| x.is_finite()));
    assert!(Raster::filled(40, 64, 0.0).grid().is_err());
}

#[test]
fn encoder_shapes_and_identity_case() {
    let v = vocab();
    let m: Model<f64> = model(tiny(&v, 16, 2), 0);
    let img = noise_image(256, 256, 2);
    let mem = m.image_memory(&img).unwrap();
    assert_eq!(mem.tokens.dim(), (64, 16));

    let mut cfg = tiny(&v, 16, 1);
    cfg.enc_layers = 0;
    let m0: Model<f64> = model(cfg, 0);
    let mut g = Graph::inference(m0.params());
    let (feats, grid) = m0.stem_forward(&mut g, &[&img]).unwrap();
    let expected = g.value(feats) + &position_encoding_2d::<f64>(grid.0, grid.1, 16);
    let mem = m0.image_memory(&img).unwrap();
    assert!(close(&mem.tokens, &expected, 0.0));
}

#[test]
fn encoder_is_permutation_equivariant() {
    let v = vocab();
    let m: Model<f64> = model(tiny(&v, 16, 2), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Array2::from_shape_simple_fn((12, 16), || rng.gen_range(-1.0..1.0));
    let mut perm: Vec<usize> = (0..12).collect();
    perm.reverse();
    perm.swap(0, 5);
    let run = |x: Array2<f64>| {
        let mut g = Graph::inference(m.params());
        let xv = g.constant(x);
        let out = m.encoder_forward(&mut g, xv, 1, 12);
        g.value(out).clone()
    };
    let base = run(x.clone());
    let permuted = run(x.select(Axis(0), &perm));
    assert!(close(&permuted, &base.select(Axis(0), &perm), 1e-12));
}

#[test]
fn decoder_shapes_and_length_limit() {
    let v = vocab();
    let m: Model<f64> = model(tiny(&v, 16, 2), 5);
    let mem = m.image_memory(&noise_image(64, 64, 5)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let tokens = random_tokens(&mut rng, 32, v.total_size());
    let logits = all_logits(&m, &mem, &tokens, DecoderMode::Bidirectional);
    assert_eq!(logits.len(), 2);
    assert!(logits.iter().all(|l| l.dim() == (32, v.total_size())));

    let long = random_tokens(&mut rng, 33, v.total_size());
    let mut g = Graph::inference(m.params());
    let memory = mem.to_graph(&mut g);
    let input = DecoderInput { tokens: &long, seq_len: 33, mem_index: &[0] };
    let err = m.decoder_forward(&mut g, &memory, input, DecoderMode::Bidirectional, &[0], Heads::Last);
    assert!(matches!(err, Err(Error::SequenceTooLong { len: 33, max: 32 })));
}

#[test]
fn bidirectional_and_causal_witnesses() {
    let v = vocab();
    let m: Model<f64> = model(tiny(&v, 16, 2), 7);
    let mem = m.image_memory(&noise_image(64, 64, 7)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let len = rng.gen_range(2..20);
        let tokens = random_tokens(&mut rng, len, v.total_size());
        let mut changed = tokens.clone();
        let j = rng.gen_range(1..len);
        changed[j] = (tokens[j] + 1) % v.total_size() as u32;

        let a = all_logits(&m, &mem, &tokens, DecoderMode::Causal);
        let b = all_logits(&m, &mem, &changed, DecoderMode::Causal);
        for (la, lb) in a.iter().zip(&b) {
            for i in 0..j {
                assert_eq!(la.row(i), lb.row(i), "causal leak from {j} to {i}");
            }
        }

        let mut last = tokens.clone();
        last[len - 1] = (tokens[len - 1] + 1) % v.total_size() as u32;
        let a = all_logits(&m, &mem, &tokens, DecoderMode::Bidirectional);
        let b = all_logits(&m, &mem, &last, DecoderMode::Bidirectional);
        assert_ne!(a[1].row(0), b[1].row(0));
    }
    let two = [v.prompt(TaskKind::Detection), v.coord(3)];
    let c = all_logits(&m, &mem, &two, DecoderMode::Causal);
    let d = all_logits(&m, &mem, &two, DecoderMode::Bidirectional);
    assert_ne!(c[1].row(0), d[1].row(0));
    let one = all_logits(&m, &mem, &two[..1], DecoderMode::Causal);
    assert_eq!(one[1].nrows(), 1);
}

#[test]
fn without_positions_body_permutation_permutes_logits() {
    let v = vocab();
    let mut m: Model<f64> = model(tiny(&v, 16, 2), 9);
    let id = m.params().id("dec.pos_embed").unwrap();
    m.params_mut().get_mut(id).fill(0.0);
    let mem = m.image_memory(&noise_image(64, 64, 9)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let tokens = random_tokens(&mut rng, 10, v.total_size());
    let perm = [0, 1, 5, 3, 9, 2, 8, 7, 4, 6];
    let shuffled: Vec<TokenId> = perm.iter().map(|&i| tokens[i]).collect();
    let a = all_logits(&m, &mem, &tokens, DecoderMode::Bidirectional);
    let b = all_logits(&m, &mem, &shuffled, DecoderMode::Bidirectional);
    assert!(close(&b[1], &a[1].select(Axis(0), &perm), 1e-10));
}

#[test]
fn position_table_and_head_are_shared() {
    let v = vocab();
    let m: Model<f32> = model(tiny(&v, 16, 3), 11);
    let img = noise_image(64, 64, 11);
    let mut g = Graph::new(m.params());
    let memory = m.encode(&mut g, &[&img]).unwrap();
    let det = [v.prompt(TaskKind::Detection), v.mask(), v.mask()];
    let cap = [v.prompt(TaskKind::Captioning), v.mask(), v.mask(), v.mask()];
    for tokens in [&det[..], &cap[..]] {
        let input = DecoderInput { tokens, seq_len: tokens.len(), mem_index: &[0] };
        let outs = m.decoder_forward(&mut g, &memory, input, DecoderMode::Bidirectional, &[1], Heads::All).unwrap();
        assert_eq!(outs.len(), 3);
    }
    for name in ["dec.pos_embed", "dec.head.weight", "dec.head.bias", "dec.out_norm.gamma"] {
        assert_eq!(g.param_node_count(m.params().id(name).unwrap()), 1, "{name}");
    }
    assert_eq!(m.counters().decoder_passes(), 2);
    assert_eq!(m.counters().encoder_images(), 1);
}

#[test]
fn ar_generation_counts_and_cache_equivalence() {
    let v = vocab();
    let m: Model<f32> = model(tiny(&v, 16, 2), 12);
    let mem = m.image_memory(&noise_image(64, 64, 12)).unwrap();
    let filter = v.ar_filter(TaskKind::Detection);
    let prompt = [v.prompt(TaskKind::Detection)];
    m.counters().reset();
    let cached = m.ar_generate(&mem, &prompt, 25, &filter).unwrap();
    assert_eq!(m.counters().decoder_passes(), 25);
    assert_eq!(cached.tokens.len(), 25);
    assert!(cached.tokens.iter().all(|&t| filter.contains(t)));
    let uncached = m.ar_generate_uncached(&mem, &prompt, 25, &filter).unwrap();
    assert_eq!(cached.tokens, uncached.tokens);
    let again = m.ar_generate(&mem, &prompt, 25, &filter).unwrap();
    assert_eq!(cached.tokens, again.tokens);

    let six = [v.prompt(TaskKind::Segmentation), v.coord(1), v.coord(2), v.coord(9), v.coord(12), v.class(1)];
    let seg = v.ar_filter(TaskKind::Segmentation);
    let a = m.ar_generate(&mem, &six, 12, &seg).unwrap();
    let b = m.ar_generate_uncached(&mem, &six, 12, &seg).unwrap();
    assert_eq!(a.tokens, b.tokens);
    assert!(m.ar_generate(&mem, &prompt, 33, &filter).is_err());
}

#[test]
fn kv_cache_grows_one_position_per_step() {
    let v = vocab();
    let m: Model<f32> = model(tiny(&v, 16, 1), 13);
    let mem = m.image_memory(&noise_image(64, 64, 13)).unwrap();
    let mut cache = m.kv_cache(&mem);
    m.ar_step(&mut cache, &[v.prompt(TaskKind::Keypoint), v.coord(0)]).unwrap();
    assert_eq!(cache.len(), 2);
    for step in 0..5 {
        m.ar_step(&mut cache, &[v.coord(step)]).unwrap();
        assert_eq!(cache.len(), 3 + step);
    }
}

#[test]
fn checkpoint_round_trip() {
    let v = vocab();
    let m: Model<f32> = model(tiny(&v, 16, 1), 14);
    let bytes = checkpoint::to_bytes(&m, &v).unwrap();
    let back = checkpoint::from_bytes::<f32>(&bytes).unwrap();
    assert_eq!(back.model.config(), m.config());
    assert_eq!(back.vocab.fingerprint(), v.fingerprint());
    for (id, name, value) in m.params().iter() {
        assert_eq!(back.model.params().get(id), value, "{name}");
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &m, &v).unwrap();
    assert!(checkpoint::load_for::<f32>(&path, &v).is_ok());
    let other = Vocab::new(VocabSpec { num_bins: 16, num_classes: 3, words: vec!["a".into(), "red".into(), "cat".into()] }).unwrap();
    assert!(matches!(checkpoint::load_for::<f32>(&path, &other), Err(Error::Checkpoint(_))));
    assert!(checkpoint::from_bytes::<f32>(&bytes[..bytes.len() - 3]).is_err());
    assert!(checkpoint::from_bytes::<f32>(b"hello\n").is_err());
}

fn tiny_loss<'a>(
    m: &'a Model<f64>,
    v: &'a Vocab,
    img: &'a Raster,
    tokens: &'a [TokenId],
    items: &'a [CeItem],
) -> impl Fn(&mut Graph<'_, f64>) -> Result<Var> + 'a {
    move |g| {
        let memory = m.encode(g, &[img])?;
        let rows: Vec<usize> = (1..tokens.len()).collect();
        let input = DecoderInput { tokens, seq_len: tokens.len(), mem_index: &[0] };
        let logits = m.decoder_forward(g, &memory, input, DecoderMode::Bidirectional, &rows, Heads::All)?;
        let filter = v.task_filter(TaskKind::Detection);
        let mut terms = Vec::new();
        for l in logits {
            let ce = g.cross_entropy(l, &filter, items)?;
            terms.push(g.scale(ce, 0.5));
        }
        Ok(g.sum(&terms))
    }
}

#[test]
fn gradient_check_every_layer_type() {
    let v = vocab();
    let cfg = ModelConfig { embed_dim: 8, num_heads: 2, ffn_dim: 16, enc_layers: 1, dec_layers: 1, ..tiny(&v, 8, 1) };
    let mut m: Model<f64> = model(cfg, 15);
    // Larger weights than the default init so every path carries signal.
    for id in m.params().ids().collect::<Vec<_>>() {
        m.params_mut().get_mut(id).mapv_inplace(|x| x * 20.0);
    }
    let img = noise_image(64, 64, 15);
    let tokens = [v.prompt(TaskKind::Detection), v.mask(), v.coord(3), v.mask(), v.class(0), v.mask()];
    let items = [
        CeItem { row: 0, target: v.coord(5), weight: 1.0 },
        CeItem { row: 2, target: v.coord(9), weight: 1.0 },
        CeItem { row: 4, target: v.noise_class(), weight: 0.5 },
    ];
    let mut params = m.params().clone();
    let report = grad_check(&mut params, tiny_loss(&m, &v, &img, &tokens, &items), 1e-4, 6, &mut ChaCha8Rng::seed_from_u64(16)).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert_eq!(report.per_tensor.len(), m.params().len());
}

#[test]
fn unsupervised_loss_has_zero_gradient_and_absent_tokens_get_none() {
    let v = vocab();
    let m: Model<f64> = model(tiny(&v, 8, 1), 17);
    let img = noise_image(64, 64, 17);
    let tokens = [v.prompt(TaskKind::Detection), v.mask(), v.coord(3)];
    let grads = {
        let mut g = Graph::new(m.params());
        let l = tiny_loss(&m, &v, &img, &tokens, &[])(&mut g).unwrap();
        g.backward(l)
    };
    for id in m.params().ids() {
        if let Some(gr) = grads.get(id) {
            assert!(gr.iter().all(|&x| x == 0.0), "{}", m.params().name(id));
        }
    }
    let items = [CeItem { row: 0, target: v.coord(5), weight: 1.0 }];
    let grads = {
        let mut g = Graph::new(m.params());
        let l = tiny_loss(&m, &v, &img, &tokens, &items)(&mut g).unwrap();
        g.backward(l)
    };
    let emb = grads.get(m.params().id("dec.tok_embed").unwrap()).unwrap();
    let absent = v.word(0) as usize;
    assert!(emb.row(absent).iter().all(|&x| x == 0.0));
    assert!(emb.row(v.mask() as usize).iter().any(|&x| x != 0.0));
}
