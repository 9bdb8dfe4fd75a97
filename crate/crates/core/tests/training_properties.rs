use lora_moe::checkpoint::{decode, encode, trainer_from_records, trainer_records};
use lora_moe::config::RunConfig;
use lora_moe::error::Error;
use lora_moe::tensor::Tape;
use lora_moe::training::{Example, MetricsRecord, Trainer};

fn small() -> RunConfig {
    let mut cfg = RunConfig::gradcheck();
    cfg.train.total_steps = 12;
    cfg.train.warmup_steps = 2;
    cfg.train.base_lr = 1e-2;
    cfg.train.eval_every = 4;
    cfg.train.eval_batches = 1;
    cfg
}

fn run(trainer: &mut Trainer, steps: usize) -> Vec<MetricsRecord> {
    (0..steps).map(|_| trainer.train_step().unwrap()).collect()
}

#[test]
fn frozen_parameters_never_change() {
    let mut t = Trainer::from_run_config(&small()).unwrap();
    let before = t.model.store.clone();
    run(&mut t, 12);
    let mut trainable_moved = false;
    for ((_, a), (_, b)) in before.iter().zip(t.model.store.iter()) {
        if a.trainable() {
            trainable_moved |= a.tensor.data() != b.tensor.data();
        } else {
            let bits = |p: &lora_moe::params::Param| p.tensor.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b), "{} changed", a.name);
        }
    }
    assert!(trainable_moved);
}

#[test]
fn metrics_total_reconstructs_from_components() {
    let mut cfg = small();
    cfg.train.loss_weights.balance_weight = 0.3;
    cfg.train.loss_weights.contrastive_weight = 0.7;
    let mut t = Trainer::from_run_config(&cfg).unwrap();
    for r in run(&mut t, 12) {
        let want = r.lm + 0.3 * r.balance + 0.7 * r.contrastive;
        assert!((r.total - want).abs() <= 1e-12 * want.abs().max(1.0), "step {}", r.step);
        assert_eq!(r.conf_per_layer.len(), 2);
        assert!(r.conf_per_layer.iter().all(|&c| (0.5..=1.0).contains(&c)));
        assert!(r.p_bar.iter().all(|p| (p.iter().sum::<f64>() - 1.0).abs() < 1e-9));
        assert_eq!(r.eval_lm.is_some(), (r.step + 1) % 4 == 0);
    }
}

#[test]
fn contrastive_term_is_live_once_queues_fill() {
    let mut t = Trainer::from_run_config(&small()).unwrap();
    let recs = run(&mut t, 3);
    assert_eq!(recs[0].contrastive, 0.0, "no negatives before the first enqueue");
    assert!(recs[2].contrastive > 0.0);
}

#[test]
fn identical_seeds_give_identical_runs() {
    let mut a = Trainer::from_run_config(&small()).unwrap();
    let mut b = Trainer::from_run_config(&small()).unwrap();
    assert_eq!(run(&mut a, 12), run(&mut b, 12));
    assert_eq!(a.model.store, b.model.store);

    let mut other = small();
    other.train.seed = 1;
    let mut c = Trainer::from_run_config(&other).unwrap();
    let mut d = Trainer::from_run_config(&small()).unwrap();
    assert_ne!(run(&mut c, 3), run(&mut d, 3));
}

#[test]
fn resume_matches_uninterrupted_training() {
    let mut full = Trainer::from_run_config(&small()).unwrap();
    let all = run(&mut full, 12);

    let mut first = Trainer::from_run_config(&small()).unwrap();
    let mut head = run(&mut first, 5);
    let bytes = encode(&trainer_records(&first));
    let mut resumed = trainer_from_records(decode(&bytes).unwrap()).unwrap();
    assert_eq!(resumed.queues, first.queues);
    assert_eq!(resumed.optimizer, first.optimizer);
    head.extend(run(&mut resumed, 7));
    assert_eq!(head, all);
    assert_eq!(resumed.model.store, full.model.store);
    assert_eq!(encode(&trainer_records(&resumed)), encode(&trainer_records(&full)));
}

#[test]
fn checkpoint_detects_missing_and_misshapen_records() {
    let t = Trainer::from_run_config(&small()).unwrap();
    let mut recs = trainer_records(&t);
    recs.retain(|r| r.name != "queue/1/2");
    match trainer_from_records(recs) {
        Err(Error::Integrity { record, .. }) => assert_eq!(record, "queue/1/2"),
        other => panic!("{other:?}"),
    }
    let mut recs = trainer_records(&t);
    let target = recs.iter_mut().find(|r| r.name.starts_with("param/")).unwrap();
    let name = target.name.clone();
    target.payload = lora_moe::checkpoint::Payload::Tensor(lora_moe::tensor::Tensor::zeros(&[1, 1]));
    match trainer_from_records(recs) {
        Err(Error::Integrity { record, .. }) => assert_eq!(record, name),
        other => panic!("{other:?}"),
    }
}

/// `grad_accum = 2` with micro-batch `b` equals one batch of `2b` when every
/// example has the same number of supervised tokens, dropout is off and the
/// (batch-nonlinear) balance term is disabled.
#[test]
fn gradient_accumulation_equivalence() {
    let mut cfg = small();
    cfg.corpus.probe_fraction = 0.0;
    cfg.contrastive.dropout = 0.0;
    cfg.train.loss_weights.balance_weight = 0.0;
    cfg.train.loss_weights.contrastive_weight = 0.5;
    cfg.train.batch_size = 2;
    cfg.train.grad_accum = 2;
    let mut big = cfg.clone();
    big.train.batch_size = 4;
    big.train.grad_accum = 1;

    let mut a = Trainer::from_run_config(&cfg).unwrap();
    let mut b = Trainer::from_run_config(&big).unwrap();
    assert_eq!(a.batch_indices(0), b.batch_indices(0));
    for _ in 0..6 {
        let (ra, rb) = (a.train_step().unwrap(), b.train_step().unwrap());
        assert!((ra.lm - rb.lm).abs() < 1e-10);
        assert!((ra.contrastive - rb.contrastive).abs() < 1e-10);
    }
    let mut worst: f64 = 0.0;
    for ((_, pa), (_, pb)) in a.model.store.iter().zip(b.model.store.iter()) {
        worst = worst.max(pa.tensor.max_abs_diff(&pb.tensor));
    }
    assert!(worst < 1e-10, "max parameter difference {worst:e}");
    for (qa, qb) in a.queues.iter().zip(&b.queues) {
        for (x, y) in qa.queues.iter().zip(&qb.queues) {
            assert_eq!((x.write_ptr, x.filled), (y.write_ptr, y.filled));
            assert!(x.buffer.max_abs_diff(&y.buffer) < 1e-10);
        }
    }
}

/// Replays each step's enqueue from the pre-step state: the queues after
/// step `s` are exactly the queues after step `s - 1` plus the view-B
/// projections of step `s`'s own batches, computed with pre-update weights.
#[test]
fn enqueue_has_no_lookahead() {
    let mut t = Trainer::from_run_config(&small()).unwrap();
    for s in 0..8 {
        let before = t.clone();
        let negatives = before.negatives(s);
        let indices = before.batch_indices(s);
        let bs = before.config.batch_size;
        let accum = before.config.grad_accum;
        let mut replay = before.queues.clone();
        for m in 0..accum {
            let examples: Vec<&Example> = indices[m * bs..(m + 1) * bs].iter().map(|&i| &before.corpus.examples[i]).collect();
            let mut tape = Tape::new();
            let bind = before.model.store.bind(&mut tape);
            let (_, _, views) = before
                .objective(&mut tape, &bind, &examples, &negatives, (s * accum + m) as u64)
                .unwrap();
            for (bank, (zb, routing)) in replay.iter_mut().zip(&views) {
                bank.enqueue(tape.value(*zb), routing).unwrap();
            }
        }
        t.train_step().unwrap();
        assert_eq!(t.queues, replay, "step {s}");
    }
}

#[test]
fn non_finite_loss_aborts_and_keeps_state() {
    let mut t = Trainer::from_run_config(&small()).unwrap();
    run(&mut t, 3);
    let id = t.model.store.trainable_ids()[0];
    t.model.store.get_mut(id).data_mut()[0] = f64::NAN;
    let before = t.clone();
    match t.train_step() {
        Err(Error::NonFinite { term, .. }) => assert!(term.contains("loss") || term.contains("gradient"), "{term}"),
        other => panic!("{other:?}"),
    }
    assert_eq!(t.step, before.step);
    assert_eq!(t.optimizer, before.optimizer);
    assert_eq!(t.queues, before.queues);
}

#[test]
fn training_past_the_end_is_rejected() {
    let mut t = Trainer::from_run_config(&small()).unwrap();
    run(&mut t, 12);
    assert!(t.finished());
    assert!(matches!(t.train_step(), Err(Error::Contract(_))));
}
