use super::*;

fn small(d: usize, heads: usize) -> Model {
    let cfg = ModelConfig {
        vocab_size: 16,
        hidden_dim: d,
        num_layers: 2,
        num_heads: heads,
        mlp_inner_dim: 2 * d,
        max_seq_len: 8,
        seed: 5,
        attn_lora_rank: 2,
        attn_lora_alpha: 4.0,
        ..ModelConfig::default()
    };
    let moe = MoeConfig {
        rank: 2,
        lora_alpha: 4.0,
        ..MoeConfig::default()
    };
    let cc = ContrastiveConfig {
        proj_dim: 4,
        ..ContrastiveConfig::default()
    };
    Model::new(cfg, moe, cc).unwrap()
}

fn set(model: &mut Model, id: ParamId, data: Vec<f64>) {
    model.store.get_mut(id).data_mut().copy_from_slice(&data);
}

fn attention(model: &Model, x: &Tensor, adapters: bool) -> Tensor {
    let mut tape = Tape::new();
    let bind = model.store.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let y = attention_forward(
        &mut tape,
        &bind,
        &model.layers[0].attn,
        model.config.num_heads,
        xv,
        adapters,
    )
    .unwrap();
    tape.take_value(y)
}

#[test]
fn zero_up_attention_equals_base() {
    let model = small(8, 2);
    let mut rng = crate::params::param_rng(1, "x");
    let x = Tensor::randn(&[2, 5, 8], 1.0, &mut rng);
    assert!(attention(&model, &x, true).max_abs_diff(&attention(&model, &x, false)) < 1e-12);

    let mut live = model.clone();
    live.perturb_adapters(0.1, 3);
    assert!(attention(&live, &x, true).max_abs_diff(&attention(&live, &x, false)) > 1e-6);
}

#[test]
fn single_token_identity_attention_returns_input() {
    let mut model = small(4, 1);
    let eye: Vec<f64> = (0..16)
        .map(|i| if i % 5 == 0 { 1.0 } else { 0.0 })
        .collect();
    let attn = model.layers[0].attn.clone();
    for p in [&attn.q, &attn.k, &attn.v, &attn.o] {
        set(&mut model, p.base, eye.clone());
    }
    let x = Tensor::new(&[1, 1, 4], vec![0.3, -1.2, 2.0, 0.5]).unwrap();
    assert!(attention(&model, &x, true).max_abs_diff(&x) < 1e-15);
}

#[test]
fn base_mlp_examples() {
    let mut model = small(1, 1);
    let mlp = model.layers[0].mlp.clone();
    set(&mut model, mlp.w_up, vec![2.0, 0.0]);
    set(&mut model, mlp.w_down, vec![3.0, 0.0]);
    let mut tape = Tape::new();
    let bind = model.store.bind_frozen(&mut tape);
    let x = tape.constant(Tensor::new(&[1, 1, 1], vec![1.0]).unwrap());
    let y = base_mlp_forward(&mut tape, &bind, &mlp, x).unwrap();
    let sigma2 = 1.0 / (1.0 + (-2.0f64).exp());
    assert!((tape.value(y).item() - 3.0 * 2.0 * sigma2).abs() < 1e-12);
    assert!((tape.value(y).item() - 5.2848).abs() < 1e-4);

    set(&mut model, mlp.w_up, vec![0.0, 0.0]);
    let mut tape = Tape::new();
    let bind = model.store.bind_frozen(&mut tape);
    let x = tape.constant(Tensor::new(&[1, 2, 1], vec![1.0, -4.0]).unwrap());
    let y = base_mlp_forward(&mut tape, &bind, &mlp, x).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

fn batch(ids: &[usize], b: usize) -> TokenBatch {
    TokenBatch::new(ids.to_vec(), b, ids.len() / b).unwrap()
}

#[test]
fn logits_shape_and_determinism() {
    let mut model = small(8, 2);
    model.perturb_adapters(0.1, 1);
    let tokens = batch(&[1, 2, 3, 4, 5, 6, 7, 8, 9, 10], 2);
    let a = predict_logits(&model, &tokens, ForwardOptions::default()).unwrap();
    assert_eq!(a.shape(), &[2, 5, 16]);
    assert!(a.all_finite());
    let b = predict_logits(&model, &tokens, ForwardOptions::default()).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn zero_adapters_match_base_model() {
    let mut model = small(8, 2);
    model.perturb_adapters(0.2, 2);
    let tokens = batch(&[3, 1, 4, 1, 5, 9, 2, 6], 2);
    let full = predict_logits(&model, &tokens, ForwardOptions::default()).unwrap();
    let base = predict_logits(&model, &tokens, ForwardOptions::base_only()).unwrap();
    assert!(full.max_abs_diff(&base) > 1e-6);
    model.zero_adapters();
    let full = predict_logits(&model, &tokens, ForwardOptions::default()).unwrap();
    assert!(full.max_abs_diff(&base) < 1e-10);
}

#[test]
fn future_tokens_do_not_leak() {
    let mut model = small(8, 2);
    model.perturb_adapters(0.2, 4);
    let a = predict_logits(
        &model,
        &batch(&[1, 2, 3, 4, 5, 6], 1),
        ForwardOptions::default(),
    )
    .unwrap();
    let b = predict_logits(
        &model,
        &batch(&[1, 2, 3, 4, 15, 0], 1),
        ForwardOptions::default(),
    )
    .unwrap();
    let v = 16;
    assert_eq!(&a.data()[..4 * v], &b.data()[..4 * v]);
    assert_ne!(&a.data()[4 * v..], &b.data()[4 * v..]);
}

#[test]
fn input_contracts() {
    let model = small(8, 2);
    let long = batch(&[1; 9], 1);
    assert!(matches!(
        predict_logits(&model, &long, ForwardOptions::default()),
        Err(Error::Config(_))
    ));
    let bad = batch(&[1, 16], 1);
    assert!(matches!(
        predict_logits(&model, &bad, ForwardOptions::default()),
        Err(Error::Input(_))
    ));
    let bad_cfg = ModelConfig {
        hidden_dim: 10,
        num_heads: 4,
        ..ModelConfig::default()
    };
    assert!(matches!(bad_cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn trainable_partition() {
    let model = small(8, 2);
    let trainable = |name: &str| {
        name.contains("lora_")
            || name.contains(".expert")
            || name.ends_with(".router")
            || name.contains(".head_")
    };
    for (_, p) in model.store.iter() {
        assert_eq!(p.trainable(), trainable(&p.name), "{}", p.name);
    }
    let n_train = model.store.trainable_ids().len();
    // per layer: 4 projections × 2 adapter matrices, 4 experts × 2, router, 2 heads × 2
    assert_eq!(n_train, 2 * (8 + 8 + 1 + 4));
}

#[test]
fn attention_lora_mask() {
    let cfg = ModelConfig {
        attn_lora_layers: vec![true, false, true, false],
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, MoeConfig::default(), ContrastiveConfig::default()).unwrap();
    assert!(model.layers[0].attn.q.adapter.is_some());
    assert!(model.layers[1].attn.q.adapter.is_none());
    let wrong = ModelConfig {
        attn_lora_layers: vec![true],
        ..ModelConfig::default()
    };
    assert!(wrong.validate().is_err());
}
