use ssd_engine::bundle::random_init;
use ssd_engine::cache::{
    argmax, cache_bytes, cache_init, decode_step, generate, roll_and_insert, DecodeMode, GenerateOptions, Mamba2Cache,
};
use ssd_engine::config::ModelConfig;
use ssd_engine::model::{prefill, ModelParams};
use ssd_engine::rng::SplitMix64;
use ssd_engine::Tensor;

fn scaled(cfg: &ModelConfig, seed: u64) -> ModelParams<f32> {
    let mut p = random_init(cfg, seed);
    for l in &mut p.layers {
        l.w_in = l.w_in.map(|v| v * 10.0);
        l.w_out = l.w_out.map(|v| v * 10.0);
    }
    p
}

fn max_abs<T: ssd_engine::Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.max_abs_diff(b).unwrap()
}

#[test]
fn init_is_zero_with_expected_shapes_and_size() {
    let cfg = ModelConfig { n_groups: 2, ..ModelConfig::tiny() };
    for batch in [1, 3] {
        let cache = cache_init::<f32>(&cfg, batch);
        assert_eq!(cache.layers.len(), cfg.n_layers);
        for l in &cache.layers {
            assert_eq!(l.ssm_state.shape(), &[batch, cfg.n_heads(), cfg.head_dim, cfg.d_state]);
            assert_eq!(l.conv_state.shape(), &[batch, cfg.conv_dim(), cfg.conv_kernel - 1]);
            assert!(l.ssm_state.data().iter().chain(l.conv_state.data()).all(|&v| v == 0.0));
        }
        let per_layer = batch * (cfg.n_heads() * cfg.head_dim * cfg.d_state + cfg.conv_dim() * (cfg.conv_kernel - 1)) * 4;
        assert_eq!(cache.byte_size(), cfg.n_layers * per_layer);
        assert_eq!(cache_bytes(&cfg, batch, 4), cfg.n_layers * per_layer);
        assert_eq!(cache.to_bytes().len(), cache.byte_size());
        assert_eq!(cache.to_bytes(), cache_init::<f32>(&cfg, batch).to_bytes());
    }
    assert_eq!(cache_init::<f64>(&cfg, 1).byte_size(), 2 * cache_init::<f32>(&cfg, 1).byte_size());
}

#[test]
fn roll_and_insert_examples() {
    let state = Tensor::<f64>::from_f64(vec![1, 1, 1], &[1.0]).unwrap();
    let col = Tensor::<f64>::from_f64(vec![1, 1], &[2.0]).unwrap();
    assert_eq!(roll_and_insert(&state, &col).unwrap().data(), &[2.0]);

    let state = Tensor::<f64>::from_f64(vec![1, 2, 3], &[1.0, 2.0, 3.0, 10.0, 20.0, 30.0]).unwrap();
    let col = Tensor::<f64>::from_f64(vec![1, 2], &[4.0, 40.0]).unwrap();
    assert_eq!(roll_and_insert(&state, &col).unwrap().data(), &[2.0, 3.0, 4.0, 20.0, 30.0, 40.0]);

    let empty = Tensor::<f64>::zeros(vec![2, 3, 0]);
    let col = Tensor::<f64>::zeros(vec![2, 3]);
    assert_eq!(roll_and_insert(&empty, &col).unwrap().shape(), &[2, 3, 0]);

    assert!(roll_and_insert(&state, &Tensor::<f64>::zeros(vec![1, 3])).is_err());
}

#[test]
fn repeated_inserts_keep_the_last_window() {
    let mut rng = SplitMix64::new(1);
    let (b, c, w) = (2, 3, 3);
    let mut state = Tensor::<f64>::zeros(vec![b, c, w]);
    let mut history = Vec::new();
    for _ in 0..10 {
        let col = Tensor::new(vec![b, c], (0..b * c).map(|_| rng.normal()).collect()).unwrap();
        state = roll_and_insert(&state, &col).unwrap();
        history.push(col);
    }
    for bi in 0..b {
        for ch in 0..c {
            for j in 0..w {
                let col = &history[history.len() - w + j];
                assert_eq!(state.data()[(bi * c + ch) * w + j], col.data()[bi * c + ch]);
            }
        }
    }
}

#[test]
fn stepped_conv_state_matches_prefill_tail() {
    let cfg = ModelConfig::tiny();
    let params = scaled(&cfg, 2).cast::<f64>();
    let tokens: Vec<u32> = (0..10).map(|i| (i * 11 % 64) as u32).collect();
    for t in [1, 2, 3, 10] {
        let pre = prefill(&params, &[tokens[..t].to_vec()], &cfg).unwrap().cache;
        let mut cache = cache_init(&cfg, 1);
        for &tok in &tokens[..t] {
            cache = decode_step(&params, &cache, &[tok], &cfg).unwrap().1;
        }
        for (a, b) in pre.layers.iter().zip(&cache.layers) {
            assert!(max_abs(&a.conv_state, &b.conv_state) <= 1e-10, "t={t}");
            assert!(max_abs(&a.ssm_state, &b.ssm_state) <= 1e-10, "t={t}");
        }
    }
}

#[test]
fn single_step_matches_longer_prefill() {
    let cfg = ModelConfig { n_groups: 4, ..ModelConfig::tiny() };
    let p32 = scaled(&cfg, 3);
    let p64 = p32.cast::<f64>();
    let tokens: Vec<u32> = (0..20).map(|i| (i * 13 % 64) as u32).collect();
    let v = cfg.vocab_size;
    for p in [1, 7, 8, 9, 19] {
        let prompt = [tokens[..p].to_vec()];
        let full = [tokens[..=p].to_vec()];

        let cache = prefill(&p32, &prompt, &cfg).unwrap().cache;
        let (stepped, _) = decode_step(&p32, &cache, &[tokens[p]], &cfg).unwrap();
        let want = prefill(&p32, &full, &cfg).unwrap().logits;
        let want = Tensor::new(vec![1, v], want.data()[want.len() - v..].to_vec()).unwrap();
        assert!(max_abs(&stepped, &want) <= 1.3e-4);

        let cache = prefill(&p64, &prompt, &cfg).unwrap().cache;
        let (stepped, _) = decode_step(&p64, &cache, &[tokens[p]], &cfg).unwrap();
        let want = prefill(&p64, &full, &cfg).unwrap().logits;
        let want = Tensor::new(vec![1, v], want.data()[want.len() - v..].to_vec()).unwrap();
        assert!(max_abs(&stepped, &want) <= 1e-10);
    }
}

#[test]
fn zero_step_size_freezes_the_state() {
    let cfg = ModelConfig::tiny();
    let mut params = scaled(&cfg, 4);
    for l in &mut params.layers {
        // softplus underflows to exactly 0.
        l.dt_bias = l.dt_bias.map(|_| -1e4);
    }
    let mut rng = SplitMix64::new(4);
    let mut cache = cache_init::<f32>(&cfg, 2);
    for l in &mut cache.layers {
        let shape = l.ssm_state.shape().to_vec();
        let n = l.ssm_state.len();
        l.ssm_state = Tensor::new(shape, (0..n).map(|_| rng.normal() as f32).collect()).unwrap();
    }
    let (_, next) = decode_step(&params, &cache, &[3, 60], &cfg).unwrap();
    for (a, b) in cache.layers.iter().zip(&next.layers) {
        assert!(a.ssm_state.bitwise_eq(&b.ssm_state));
        assert!(!a.conv_state.bitwise_eq(&b.conv_state));
    }
}

#[test]
fn cache_size_is_independent_of_tokens_seen() {
    let cfg = ModelConfig::tiny();
    let params = random_init(&cfg, 5);
    let mut cache = cache_init::<f32>(&cfg, 2);
    let mut sizes = Vec::new();
    for step in 0..300u32 {
        cache = decode_step(&params, &cache, &[step % 64, (step * 7) % 64], &cfg).unwrap().1;
        if step == 0 || step == 299 {
            sizes.push(cache.to_bytes().len());
        }
    }
    assert_eq!(sizes[0], sizes[1]);
    let long = prefill(&params, &[vec![1; 100], vec![2; 100]], &cfg).unwrap().cache;
    assert_eq!(long.to_bytes().len(), sizes[0]);
}

#[test]
fn generation_is_deterministic_and_cache_copies_are_independent() {
    let cfg = ModelConfig::tiny();
    let params = scaled(&cfg, 6);
    let prompt = [vec![1u32, 2, 3, 4, 5]];
    let opts = GenerateOptions { keep_logits: true };
    let a = generate(&params, &prompt, 20, DecodeMode::Cached, &cfg, opts).unwrap();
    let b = generate(&params, &prompt, 20, DecodeMode::Cached, &cfg, opts).unwrap();
    assert_eq!(a.tokens, b.tokens);
    assert!(a.per_step_logits.unwrap().bitwise_eq(&b.per_step_logits.unwrap()));
    assert_eq!(a.final_cache.unwrap().to_bytes(), b.final_cache.unwrap().to_bytes());

    let base: Mamba2Cache<f32> = prefill(&params, &prompt, &cfg).unwrap().cache;
    let copy = base.clone();
    let (l1, _) = decode_step(&params, &base, &[9], &cfg).unwrap();
    let _ = decode_step(&params, &base, &[33], &cfg).unwrap();
    let (l2, _) = decode_step(&params, &copy, &[9], &cfg).unwrap();
    assert!(l1.bitwise_eq(&l2));
}

#[test]
fn final_cache_covers_prompt_and_every_generated_token() {
    let cfg = ModelConfig::tiny();
    let params = scaled(&cfg, 10).cast::<f64>();
    let prompt = vec![4u32, 8, 15];
    let out = generate(&params, std::slice::from_ref(&prompt), 6, DecodeMode::Cached, &cfg, GenerateOptions::default()).unwrap();
    let all: Vec<u32> = prompt.iter().chain(&out.tokens[0]).copied().collect();
    let want = prefill(&params, &[all], &cfg).unwrap().cache;
    let got = out.final_cache.unwrap();
    for (a, b) in got.layers.iter().zip(&want.layers) {
        assert!(max_abs(&a.ssm_state, &b.ssm_state) <= 1e-10);
        assert!(max_abs(&a.conv_state, &b.conv_state) <= 1e-10);
    }
    let non_cached = generate(&params, &[prompt], 6, DecodeMode::NonCached, &cfg, GenerateOptions::default()).unwrap();
    assert!(non_cached.final_cache.is_none());
    assert!(non_cached.per_step_logits.is_none());
}

#[test]
fn one_step_generation_is_prefill_argmax() {
    let cfg = ModelConfig::tiny();
    let params = scaled(&cfg, 7);
    let prompt = [vec![10u32, 20, 30], vec![5, 5, 5]];
    let logits = prefill(&params, &prompt, &cfg).unwrap().logits;
    let v = cfg.vocab_size;
    for mode in [DecodeMode::Cached, DecodeMode::NonCached] {
        let out = generate(&params, &prompt, 1, mode, &cfg, GenerateOptions::default()).unwrap();
        assert_eq!(out.steps, 1);
        for (bi, row) in out.tokens.iter().enumerate() {
            let last = &logits.data()[(bi * 3 + 2) * v..][..v];
            assert_eq!(row, &vec![argmax(last)]);
        }
    }
}

#[test]
fn modes_agree_on_tokens_and_logits() {
    let cfg = ModelConfig { n_layers: 3, ..ModelConfig::tiny() };
    let params = scaled(&cfg, 8);
    let prompt = [vec![7u32, 3, 9, 1], vec![0, 0, 63, 2]];
    let opts = GenerateOptions { keep_logits: true };
    let cached = generate(&params, &prompt, 24, DecodeMode::Cached, &cfg, opts).unwrap();
    let full = generate(&params, &prompt, 24, DecodeMode::NonCached, &cfg, opts).unwrap();
    assert_eq!(cached.tokens, full.tokens);
    assert!(cached.tokens.iter().all(|r| r.len() == 24));
    let (lc, lf) = (cached.per_step_logits.unwrap(), full.per_step_logits.unwrap());
    assert_eq!(lc.shape(), &[2, 24, cfg.vocab_size]);
    assert!(max_abs(&lc, &lf) <= 1.3e-4);
    assert!(generate(&params, &prompt, 0, DecodeMode::Cached, &cfg, opts).is_err());
}

#[test]
fn argmax_prefers_lowest_index_and_ignores_nan() {
    assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
    assert_eq!(argmax(&[5.0f64, 5.0]), 0);
    assert_eq!(argmax(&[f32::NAN, 1.0, 0.5]), 1);
    assert_eq!(argmax(&[0.0f32, f32::NAN, 2.0]), 2);
    assert_eq!(argmax(&[f32::NEG_INFINITY, f32::NEG_INFINITY]), 0);
}

#[test]
fn decode_step_rejects_bad_inputs() {
    let cfg = ModelConfig::tiny();
    let params = random_init(&cfg, 9);
    let cache = cache_init::<f32>(&cfg, 2);
    assert!(decode_step(&params, &cache, &[1], &cfg).is_err());
    assert!(decode_step(&params, &cache, &[1, 64], &cfg).is_err());
    let wrong = ModelConfig { d_state: 4, ..cfg.clone() };
    assert!(decode_step(&params, &cache_init::<f32>(&wrong, 2), &[1, 2], &cfg).is_err());
}
