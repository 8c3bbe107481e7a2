use groupvit::checkpoint::Container;
use groupvit::config::{AssignMode, GroupingStageConfig, ModelConfig};
use groupvit::encoders::layers::{
    mixer_connect, transformer_layer, LinearParams, MixerParams, MlpParams, NormParams, TransformerLayerParams,
};
use groupvit::encoders::tokenizer::{TokenizedText, Vocab};
use groupvit::encoders::vision::{interpolate_positional, patch_embed, patchify, VisionParams};
use groupvit::encoders::{encode_image, encode_image_segments, encode_text, ForwardMode, GroupVit, TEMPERATURE_PARAM};
use groupvit::gradcheck::{check_gradients, GradCheckOptions};
use groupvit::params::{Bound, ParamStore};
use groupvit::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Perturbs every parameter so that norms, biases and projections are all
/// non-trivial.
fn jitter(store: &mut ParamStore<f64>, std: f64, r: &mut ChaCha8Rng) {
    let names: Vec<String> = store.names().cloned().collect();
    for n in names {
        let t = store.get(&n).unwrap();
        let noise = Tensor::randn(t.shape(), std, r);
        let v = t.add(&noise).unwrap();
        store.set(&n, v).unwrap();
    }
}

/// Same architecture shape as the full-size preset with a thin width, so the
/// token and assignment bookkeeping is exercised at 224 / 16.
fn thin_full(mut cfg: ModelConfig) -> ModelConfig {
    cfg.hidden_width = 12;
    cfg.num_heads = 3;
    cfg.mlp_ratio = 1;
    cfg.text_width = 8;
    cfg.text_heads = 2;
    cfg.text_layers = 1;
    cfg.vocab_size = 16;
    cfg.projection_width = 8;
    cfg
}

fn image(cfg: &ModelConfig, batch: usize, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(&[batch, cfg.image_size, cfg.image_size, cfg.channels], 0.0, 1.0, r)
}

fn row_norms(t: &Tensor<f64>) -> Vec<f64> {
    let d = *t.shape().last().unwrap();
    t.data().chunks(d).map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect()
}

#[test]
fn patch_counts() {
    let mut r = rng(0);
    for (size, patch, tokens) in [(224, 16, 196), (32, 16, 4)] {
        let img = Tensor::<f64>::zeros(&[size, size, 3]);
        assert_eq!(patchify(&img, patch).unwrap().shape(), &[1, tokens, patch * patch * 3]);
    }
    let mut cfg = ModelConfig::mini();
    cfg.image_size = 32;
    cfg.patch_size = 16;
    let mut store = ParamStore::<f64>::new();
    VisionParams::register(&mut store, &cfg, &mut r);
    let mut g = Graph::new();
    let p = VisionParams::bind(&store.bind(&mut g, false), &cfg);
    let x = patch_embed(&mut g, &Tensor::zeros(&[1, 32, 32, 3]), &p, &cfg).unwrap();
    assert_eq!(g.shape(x), &[1, 4, cfg.hidden_width]);
}

#[test]
fn zero_image_and_zero_projection_give_positional_embedding() {
    let mut r = rng(1);
    let cfg = ModelConfig::mini();
    let mut store = ParamStore::<f64>::new();
    VisionParams::register(&mut store, &cfg, &mut r);
    let w = store.get("vision.patch.w").unwrap().shape().to_vec();
    store.set("vision.patch.w", Tensor::zeros(&w)).unwrap();
    let mut g = Graph::new();
    let p = VisionParams::bind(&store.bind(&mut g, false), &cfg);
    let x = patch_embed(&mut g, &image(&cfg, 1, &mut r), &p, &cfg).unwrap();
    let pos = store.get("vision.pos").unwrap();
    assert_eq!(g.value(x).data(), pos.data());
    let zero = patch_embed(&mut g, &Tensor::zeros(&[1, 4, 4, 3]), &p, &cfg).unwrap();
    assert_eq!(g.value(zero).data(), pos.data());
}

#[test]
fn other_resolutions_use_resampled_positions() {
    let mut r = rng(2);
    let cfg = ModelConfig::mini();
    let mut store = ParamStore::<f64>::new();
    VisionParams::register(&mut store, &cfg, &mut r);
    let w = store.get("vision.patch.w").unwrap().shape().to_vec();
    store.set("vision.patch.w", Tensor::zeros(&w)).unwrap();
    let mut g = Graph::new();
    let p = VisionParams::bind(&store.bind(&mut g, false), &cfg);
    let x = patch_embed(&mut g, &Tensor::zeros(&[1, 8, 8, 3]), &p, &cfg).unwrap();
    let expect = interpolate_positional(store.get("vision.pos").unwrap(), 2, 4).unwrap();
    assert_eq!(g.value(x).data(), expect.data());
}

fn layer_store(width: usize, r: &mut ChaCha8Rng) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    TransformerLayerParams::register(&mut store, "layer", width, 2, r);
    jitter(&mut store, 0.3, r);
    store
}

#[test]
fn transformer_layer_shapes_and_single_token() {
    let mut r = rng(3);
    let store = layer_store(6, &mut r);
    let mut g = Graph::new();
    let p = TransformerLayerParams::bind(&store.bind(&mut g, false), "layer");
    for t in [1, 2, 7] {
        let x = g.constant(Tensor::randn(&[2, t, 6], 1.0, &mut r));
        let y = transformer_layer(&mut g, x, &p, 3, None).unwrap();
        assert_eq!(g.shape(y), &[2, t, 6]);
        assert!(g.value(y).is_finite());
    }
    // One token attends only to itself: the attention output is the value
    // projection of the normed token.
    let x = Tensor::randn(&[1, 6], 1.0, &mut r);
    let xv = g.constant(x.clone());
    let y = transformer_layer(&mut g, xv, &p, 3, None).unwrap();
    let b = store.bind(&mut g, false);
    let pn = NormParams::bind(&b, "layer.norm1");
    let xv = g.constant(x);
    let h = pn.apply(&mut g, xv).unwrap();
    let v = LinearParams::bind(&b, "layer.attn.v").apply(&mut g, h).unwrap();
    let o = LinearParams::bind(&b, "layer.attn.out").apply(&mut g, v).unwrap();
    let x1 = g.add(xv, o).unwrap();
    let h = NormParams::bind(&b, "layer.norm2").apply(&mut g, x1).unwrap();
    let m = MlpParams::bind(&b, "layer.mlp").apply(&mut g, h).unwrap();
    let expect = g.add(x1, m).unwrap();
    assert!(g.value(y).max_abs_diff(g.value(expect)) < 1e-12);
}

fn store_inputs(store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    store.iter().map(|(_, t)| t.clone()).collect()
}

#[test]
fn transformer_layer_matches_finite_differences() {
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let store = layer_store(4, &mut r);
        let mut inputs = store_inputs(&store);
        inputs.push(Tensor::randn(&[3, 4], 1.0, &mut r));
        inputs.push(Tensor::randn(&[3, 4], 1.0, &mut r));
        let n = store.len();
        let report = check_gradients(
            &inputs,
            |g, v| {
                let p = TransformerLayerParams::bind(&Bound::from_vars(&store, &v[..n]), "layer");
                let y = transformer_layer(g, v[n], &p, 2, None)?;
                let y = g.mul(y, v[n + 1])?;
                g.sum_all(y)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "seed {seed}: {report:?}");
    }
}

fn mixer_store(prev: usize, next: usize, width: usize, r: &mut ChaCha8Rng) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    MixerParams::register(&mut store, "mixer", prev, next, width, 2, r);
    store
}

#[test]
fn mixer_maps_64_to_8_tokens() {
    let mut r = rng(4);
    let store = mixer_store(64, 8, 16, &mut r);
    let mut g = Graph::new();
    let p = MixerParams::bind(&store.bind(&mut g, false), "mixer");
    let x = g.constant(Tensor::randn(&[2, 64, 16], 1.0, &mut r));
    let y = mixer_connect(&mut g, x, &p).unwrap();
    assert_eq!(g.shape(y), &[2, 8, 16]);
    let x = g.constant(Tensor::randn(&[64, 16], 1.0, &mut r));
    let y = mixer_connect(&mut g, x, &p).unwrap();
    assert_eq!(g.shape(y), &[8, 16]);
}

#[test]
fn mixer_with_identity_weights_is_identity() {
    let mut r = rng(5);
    let mut store = mixer_store(5, 5, 4, &mut r);
    store.set("mixer.tokens.w", Tensor::eye(5)).unwrap();
    store.set("mixer.channels.fc2.w", Tensor::zeros(&[8, 4])).unwrap();
    let mut g = Graph::new();
    let p = MixerParams::bind(&store.bind(&mut g, false), "mixer");
    let x = Tensor::randn(&[5, 4], 1.0, &mut r);
    let xv = g.constant(x.clone());
    let y = mixer_connect(&mut g, xv, &p).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn mixer_matches_finite_differences() {
    for seed in 0..10 {
        let mut r = rng(200 + seed);
        let mut store = mixer_store(4, 2, 3, &mut r);
        jitter(&mut store, 0.4, &mut r);
        let mut inputs = store_inputs(&store);
        inputs.push(Tensor::randn(&[2, 4, 3], 1.0, &mut r));
        inputs.push(Tensor::randn(&[2, 2, 3], 1.0, &mut r));
        let n = store.len();
        let report = check_gradients(
            &inputs,
            |g, v| {
                let p = MixerParams::bind(&Bound::from_vars(&store, &v[..n]), "mixer");
                let y = mixer_connect(g, v[n], &p)?;
                let y = g.mul(y, v[n + 1])?;
                g.sum_all(y)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "seed {seed}: {report:?}");
    }
}

fn model(cfg: ModelConfig, seed: u64) -> GroupVit<f64> {
    GroupVit::new(cfg, 0.07, &mut rng(seed)).unwrap()
}

#[test]
fn full_size_two_stage_bookkeeping() {
    let cfg = thin_full(ModelConfig::full());
    let m = model(cfg.clone(), 6);
    let mut g = Graph::new();
    let b = m.bind(&mut g, false);
    let img = image(&cfg, 1, &mut rng(7));
    let (z, state) = encode_image(&mut g, &img, &b.vision, &cfg, ForwardMode::inference(), None).unwrap();
    assert_eq!(g.shape(state.segment_tokens), &[1, 8, 12]);
    let shapes: Vec<&[usize]> = state.assignments.iter().map(|a| g.shape(a.var)).collect();
    assert_eq!(shapes, vec![&[1, 64, 196][..], &[1, 8, 64][..]]);
    let mats = state.assignment_matrices(&g, 0).unwrap();
    assert!(mats.iter().all(|a| a.is_one_hot()));
    assert!((row_norms(g.value(z))[0] - 1.0).abs() < 1e-9);
}

#[test]
fn full_size_one_stage_bookkeeping() {
    let cfg = thin_full(ModelConfig::full_one_stage());
    let m = model(cfg.clone(), 8);
    assert_eq!(m.params.get("vision.stage0.group_tokens").unwrap().shape(), &[64, 12]);
    let mut g = Graph::new();
    let b = m.bind(&mut g, false);
    let img = image(&cfg, 1, &mut rng(9));
    let (_, state) = encode_image(&mut g, &img, &b.vision, &cfg, ForwardMode::inference(), None).unwrap();
    assert_eq!(state.assignments.len(), 1);
    assert_eq!(g.shape(state.assignments[0].var), &[1, 8, 196]);
}

#[test]
fn segment_count_chain_and_unit_norms() {
    let mut cfg = ModelConfig::mini();
    cfg.image_size = 8;
    cfg.num_layers = 4;
    cfg.stages = vec![
        GroupingStageConfig::new(6, 1),
        GroupingStageConfig::new(3, 2),
        GroupingStageConfig::new(2, 3),
    ];
    let m = model(cfg.clone(), 10);
    let mut g = Graph::new();
    let b = m.bind(&mut g, false);
    let img = image(&cfg, 3, &mut rng(11));
    for mode in [AssignMode::Soft, AssignMode::Hard] {
        let mut noise_rng = rng(12);
        let (z, state) =
            encode_image(&mut g, &img, &b.vision, &cfg, ForwardMode::train(mode), Some(&mut noise_rng)).unwrap();
        let mut prev = cfg.num_patches();
        for (a, st) in state.assignments.iter().zip(&cfg.stages) {
            assert_eq!(g.shape(a.var), &[3, st.num_group_tokens, prev]);
            prev = st.num_group_tokens;
        }
        assert_eq!(g.shape(state.segment_tokens), &[3, 2, cfg.hidden_width]);
        for n in row_norms(g.value(z)) {
            assert!((n - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn inference_is_deterministic_and_batch_independent() {
    let cfg = ModelConfig::mini();
    let m = model(cfg.clone(), 13);
    let imgs = image(&cfg, 3, &mut rng(14));
    let run = |imgs: &Tensor<f64>| {
        let mut g = Graph::new();
        let b = m.bind(&mut g, false);
        let (z, _) = encode_image_segments(&mut g, imgs, &b.vision, &cfg).unwrap();
        g.value(z).clone()
    };
    let a = run(&imgs);
    assert_eq!(a, run(&imgs));
    let single = run(&imgs.slice(0, 1, 2).unwrap());
    assert!(a.slice(0, 1, 2).unwrap().max_abs_diff(&single) < 1e-12);
}

#[test]
fn segment_embeddings_are_unit_rows_and_pooling_order_matters() {
    let cfg = ModelConfig::desk();
    let mut m = model(cfg.clone(), 15);
    jitter(&mut m.params, 0.05, &mut rng(16));
    let img = image(&cfg, 1, &mut rng(17));
    let mut g = Graph::new();
    let b = m.bind(&mut g, false);
    let (zs, state) = encode_image_segments(&mut g, &img, &b.vision, &cfg).unwrap();
    assert_eq!(g.shape(zs), &[1, cfg.final_groups(), cfg.projection_width]);
    for n in row_norms(g.value(zs)) {
        assert!((n - 1.0).abs() < 1e-9);
    }
    // The image embedding pools before the projection MLP; the segment path
    // projects each token. Averaging projected tokens differs from projecting
    // the average by the MLP's nonlinearity, and agrees once the MLP's input
    // is a single repeated token.
    let per_token = b.vision.proj.apply(&mut g, state.segment_tokens).unwrap();
    let avg_after = g.mean(per_token, 1).unwrap();
    let pooled = g.mean(state.segment_tokens, 1).unwrap();
    let avg_before = b.vision.proj.apply(&mut g, pooled).unwrap();
    let gap = g.value(avg_after).max_abs_diff(g.value(avg_before));
    assert!(gap > 0.0 && gap.is_finite());
    let (z, _) = encode_image(&mut g, &img, &b.vision, &cfg, ForwardMode::inference(), None).unwrap();
    let z_again = g.l2_normalize(avg_before).unwrap();
    let z_again = g.reshape(z_again, &[1, cfg.projection_width]).unwrap();
    assert!(g.value(z).max_abs_diff(g.value(z_again)) < 1e-12);
}

fn vocab() -> Vocab {
    Vocab::new(&["a photo of red blue circle square"])
}

#[test]
fn text_embeddings_are_unit_deterministic_and_padding_free() {
    let cfg = ModelConfig::mini();
    let m = model(cfg.clone(), 18);
    let v = vocab();
    let short = v.tokenize("red circle", cfg.max_text_length);
    let long = v.tokenize("a photo of a blue square", cfg.max_text_length);
    let mut g = Graph::new();
    let b = m.bind(&mut g, false);
    let z = encode_text(&mut g, &[short.clone(), long.clone(), short.clone()], &b.text, &cfg).unwrap();
    let z_alone = encode_text(&mut g, &[short], &b.text, &cfg).unwrap();
    let zv = g.value(z);
    for n in row_norms(zv) {
        assert!((n - 1.0).abs() < 1e-9);
    }
    let p = cfg.projection_width;
    assert_eq!(zv.data()[..p], zv.data()[2 * p..]);
    let alone = g.value(z_alone).data();
    for (a, b) in zv.data()[..p].iter().zip(alone) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn text_rejects_out_of_range_ids() {
    let cfg = ModelConfig::mini();
    let m = model(cfg.clone(), 19);
    let mut g = Graph::new();
    let b = m.bind(&mut g, false);
    let bad = TokenizedText {
        ids: vec![cfg.vocab_size, 2, 0, 0, 0, 0],
        end_position: 1,
    };
    assert!(encode_text(&mut g, &[bad], &b.text, &cfg).is_err());
}

#[test]
fn text_encoder_matches_finite_differences() {
    let cfg = ModelConfig::mini();
    let v = vocab();
    let texts = [
        v.tokenize("red circle", cfg.max_text_length),
        v.tokenize("a photo of blue", cfg.max_text_length),
    ];
    for seed in 0..10 {
        let mut m = model(cfg.clone(), 300 + seed);
        jitter(&mut m.params, 0.3, &mut rng(400 + seed));
        let mut inputs = store_inputs(&m.params);
        inputs.push(Tensor::randn(&[2, cfg.projection_width], 1.0, &mut rng(500 + seed)));
        let n = m.params.len();
        let report = check_gradients(
            &inputs,
            |g, vars| {
                let b = m.bind_from(Bound::from_vars(&m.params, &vars[..n]));
                let z = encode_text(g, &texts, &b.text, &cfg)?;
                let y = g.mul(z, vars[n])?;
                g.sum_all(y)
            },
            &GradCheckOptions {
                max_coords: 12,
                ..GradCheckOptions::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "seed {seed}: {report:?}");
    }
}

/// Mini image encoder, soft assignment, with and without fixed Gumbel draws.
#[test]
fn mini_image_encoder_matches_finite_differences() {
    let cfg = ModelConfig::mini();
    for seed in 0..10 {
        let mut m = model(cfg.clone(), 600 + seed);
        jitter(&mut m.params, 0.3, &mut rng(700 + seed));
        let mut inputs = store_inputs(&m.params);
        let img = image(&cfg, 2, &mut rng(800 + seed));
        inputs.push(Tensor::randn(&[2, cfg.projection_width], 1.0, &mut rng(900 + seed)));
        let n = m.params.len();
        let gumbel = seed % 2 == 1;
        let report = check_gradients(
            &inputs,
            |g, vars| {
                let b = m.bind_from(Bound::from_vars(&m.params, &vars[..n]));
                let mode = ForwardMode {
                    assign: AssignMode::Soft,
                    gumbel,
                };
                let mut noise = rng(1000 + seed);
                let (z, _) = encode_image(g, &img, &b.vision, &cfg, mode, Some(&mut noise))?;
                let y = g.mul(z, vars[n])?;
                g.sum_all(y)
            },
            &GradCheckOptions {
                max_coords: 12,
                ..GradCheckOptions::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "seed {seed}: {report:?}");
    }
}

#[test]
fn every_parameter_is_stored_once_and_round_trips() {
    let m = model(ModelConfig::desk(), 20);
    let mut c = Container::new();
    m.to_container(&mut c);
    assert_eq!(c.records.len(), m.params.len());
    assert!(c.records.contains_key(&format!("param.{TEMPERATURE_PARAM}")));
    let bytes = c.to_bytes();
    let mut fresh = model(ModelConfig::desk(), 21);
    assert_ne!(fresh, m);
    fresh.load_from(&Container::from_bytes(&bytes, std::path::Path::new("mem")).unwrap()).unwrap();
    assert_eq!(fresh, m);
    let mut again = Container::new();
    fresh.to_container(&mut again);
    assert_eq!(again.to_bytes(), bytes);
    assert!((m.temperature() - 0.07).abs() < 1e-12);
}
