use lora_moe::model::{Model, ModelConfig};
use lora_moe::contrastive::ContrastiveConfig;
use lora_moe::moe::{gates_from_logits, moe_layer_forward, MoeConfig, RouterNoise};
use lora_moe::tensor::{CounterRng, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model(noise: RouterNoise) -> Model {
    let cfg = ModelConfig {
        vocab_size: 16,
        hidden_dim: 8,
        num_layers: 1,
        num_heads: 2,
        mlp_inner_dim: 16,
        max_seq_len: 8,
        ..ModelConfig::default()
    };
    let moe = MoeConfig {
        router_noise: noise,
        router_init_std: 0.5,
        ..MoeConfig::default()
    };
    let mut m = Model::new(cfg, moe, ContrastiveConfig { proj_dim: 4, ..ContrastiveConfig::default() }).unwrap();
    m.perturb_adapters(0.3, 1);
    m
}

proptest! {
    #[test]
    fn gates_are_k_sparse_and_normalized(
        rows in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 6), 1..20),
        k in 1usize..=6,
    ) {
        let n = 6;
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let out = gates_from_logits(&Tensor::new(&[rows.len(), n], flat).unwrap(), k).unwrap();
        for (t, row) in out.gate_rows().enumerate() {
            let selected = out.selected_for(t);
            prop_assert_eq!(selected.len(), k);
            for (i, &g) in row.iter().enumerate() {
                prop_assert_eq!(g > 0.0, selected.contains(&i));
            }
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn gates_ignore_a_shared_logit_shift(
        row in prop::collection::vec(-5.0f64..5.0, 4),
        shift in -100.0f64..100.0,
    ) {
        let a = gates_from_logits(&Tensor::new(&[1, 4], row.clone()).unwrap(), 2).unwrap();
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let b = gates_from_logits(&Tensor::new(&[1, 4], shifted).unwrap(), 2).unwrap();
        prop_assert_eq!(&a.selected, &b.selected);
        prop_assert!(a.gates.max_abs_diff(&b.gates) < 1e-12);
    }
}

#[test]
fn identical_experts_reduce_to_one_expert() {
    let mut m = model(RouterNoise::None);
    let block = m.layers[0].moe.clone();
    let (down, up) = (m.store.get(block.experts[0].down).clone(), m.store.get(block.experts[0].up).clone());
    for e in &block.experts[1..] {
        m.store.get_mut(e.down).data_mut().copy_from_slice(down.data());
        m.store.get_mut(e.up).data_mut().copy_from_slice(up.data());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::randn(&[3, 5, 8], 1.0, &mut rng);
    let mut tape = Tape::new();
    let bind = m.store.bind_frozen(&mut tape);
    let xv = tape.constant(x);
    let out = moe_layer_forward(&mut tape, &bind, &block, &m.layers[0].mlp, xv, None).unwrap();
    let single = lora_moe::moe::lora_expert_forward(&mut tape, &bind, &block.experts[0], xv).unwrap();
    assert!(tape.value(out.h_route).max_abs_diff(tape.value(single)) < 1e-12);
}

#[test]
fn router_gradient_only_flows_through_selected_logits() {
    let m = model(RouterNoise::None);
    let block = m.layers[0].moe.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(&[1, 1, 8], 1.0, &mut rng);
    let mut tape = Tape::new();
    let bind = m.store.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let out = moe_layer_forward(&mut tape, &bind, &block, &m.layers[0].mlp, xv, None).unwrap();
    let loss = tape.sum(out.h_route);
    tape.backward(loss).unwrap();
    let grad = tape.grad(bind.var(block.router.weight)).unwrap().to_vec();
    let selected = &out.routing.selected;
    for e in 0..block.experts.len() {
        let row = &grad[e * 8..(e + 1) * 8];
        assert_eq!(row.iter().any(|&g| g != 0.0), selected.contains(&e), "expert {e}");
    }
}

#[test]
fn router_noise_is_seeded_and_off_without_a_generator() {
    let m = model(RouterNoise::Gaussian(1.0));
    let block = m.layers[0].moe.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::randn(&[4, 6, 8], 1.0, &mut rng);
    let logits = |noise: Option<CounterRng>| {
        let mut tape = Tape::new();
        let bind = m.store.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let out = moe_layer_forward(&mut tape, &bind, &block, &m.layers[0].mlp, xv, noise).unwrap();
        tape.value(out.routing.logits).clone()
    };
    let clean = logits(None);
    let a = logits(Some(CounterRng::keyed(1, 2, 3)));
    let b = logits(Some(CounterRng::keyed(1, 2, 3)));
    let c = logits(Some(CounterRng::keyed(1, 2, 4)));
    assert_eq!(a, b);
    assert!(a.max_abs_diff(&clean) > 0.1);
    assert!(a.max_abs_diff(&c) > 0.1);
}
