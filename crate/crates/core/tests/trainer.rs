mod common;

use headpurify_core::dig::GateConfig;
use headpurify_core::domainsynth::{lodo_split, make_dataset, DomainDataset, DomainSpec, Split};
use headpurify_core::encoder::{EncoderConfig, ForwardCtx};
use headpurify_core::halora::LoraConfig;
use headpurify_core::losses::{self, ClassAnchors};
use headpurify_core::param::{self, GradMap, ParamGroup, ParamSet};
use headpurify_core::trainer::{
    routed_gradients, train_run, MmdUpdates, ModelSpec, Record, RouteCtx, Routed, Strategy,
    TrainConfig, Trainer,
};
use headpurify_core::{Tape, Tensor};

fn encoder() -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        num_heads: 2,
        head_dim: 4,
        num_tokens: 5,
        ..EncoderConfig::default()
    }
}

fn data_spec() -> DomainSpec {
    DomainSpec {
        num_domains: 3,
        num_classes: 3,
        samples_per_domain_class: 10,
        dim: 8,
        content_tokens: 4,
        task_tokens: 2,
        confounder_tokens: 2,
        ..DomainSpec::default()
    }
}

fn both() -> ModelSpec {
    ModelSpec {
        encoder: encoder(),
        lora: Some(LoraConfig {
            rank_per_layer: vec![2, 2],
            ..LoraConfig::default()
        }),
        gates: Some(GateConfig::default()),
    }
}

fn config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 12,
        epochs: 4,
        lr_halora: 2e-2,
        lr_gate: 1e-1,
        seed,
        ..TrainConfig::default()
    }
}

fn setup(seed: u64) -> (DomainDataset, Split) {
    let ds = make_dataset(&data_spec(), seed).unwrap();
    let split = lodo_split(&ds, 0, true).unwrap();
    (ds, split)
}

fn trainer(spec: &ModelSpec, cfg: TrainConfig) -> Trainer {
    let model = spec.build(cfg.seed).unwrap();
    let anchors = ClassAnchors::random(3, 8, cfg.temperature, cfg.seed).unwrap();
    Trainer::new(model, anchors, cfg).unwrap()
}

/// A trainer whose LoRA factors and gates are already away from init, so
/// every gradient path is live.
fn warmed(seed: u64, cfg: TrainConfig) -> Trainer {
    let mut t = trainer(&both(), cfg);
    common::randomize(&mut t.model.params, ParamGroup::Halora, 0.3, seed);
    common::randomize(&mut t.model.params, ParamGroup::Gate, 1.0, seed + 1);
    t
}

fn first_batch(ds: &DomainDataset, split: &Split) -> (Tensor, Vec<usize>, Vec<usize>) {
    // Two samples from each source domain.
    let mut idx = Vec::new();
    for d in ds.domains_of(&split.train) {
        idx.extend(
            split
                .train
                .iter()
                .copied()
                .filter(|&i| ds.samples[i].domain == d)
                .take(2),
        );
    }
    ds.batch(&idx).unwrap()
}

fn routed(t: &Trainer, cfg: &TrainConfig, batch: &(Tensor, Vec<usize>, Vec<usize>)) -> Routed {
    let ctx = RouteCtx {
        halora: true,
        gates: true,
        gumbel: None,
    };
    routed_gradients(&t.model, &t.anchors, cfg, &batch.0, &batch.1, &batch.2, ctx).unwrap()
}

fn group(ps: &ParamSet, g: ParamGroup) -> Vec<(String, Tensor)> {
    ps.iter()
        .filter(|p| p.group == g)
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect()
}

#[test]
fn zero_alpha_equals_pure_classification() {
    let (ds, split) = setup(1);
    let t = warmed(1, config(1));
    let b = first_batch(&ds, &split);
    let a0 = routed(
        &t,
        &TrainConfig {
            alpha: 0.0,
            ..config(1)
        },
        &b,
    );
    let none = routed(
        &t,
        &TrainConfig {
            mmd_updates: MmdUpdates::Neither,
            ..config(1)
        },
        &b,
    );
    assert_eq!(a0.grads, none.grads);
    assert!(a0.l_mmd.is_none());
}

#[test]
fn mmd_alone_never_moves_lora_under_dig_routing() {
    let (ds, split) = setup(2);
    let b = first_batch(&ds, &split);
    for (routing, lora_moves) in [(MmdUpdates::Dig, false), (MmdUpdates::Halora, true)] {
        let cfg = TrainConfig {
            alpha: 5.0,
            mmd_updates: routing,
            weight_decay: 0.0,
            ..config(2)
        };
        let mut t = warmed(2, cfg.clone());
        let with = routed(&t, &cfg, &b);
        let without = routed(
            &t,
            &TrainConfig {
                alpha: 0.0,
                ..cfg.clone()
            },
            &b,
        );
        // The MMD-only update: what the MMD term adds on top of L_cls.
        let mmd_only: GradMap = with
            .grads
            .iter()
            .map(|(n, g)| {
                let base = &without.grads[n];
                (
                    n.clone(),
                    Tensor::from_fn(g.shape(), |i| g.data()[i] - base.data()[i]),
                )
            })
            .collect();
        let before = group(&t.model.params, ParamGroup::Halora);
        t.optim
            .apply(&mut t.model.params, &mmd_only, 0.1, 0.0)
            .unwrap();
        let after = group(&t.model.params, ParamGroup::Halora);
        assert_eq!(before != after, lora_moves, "{routing:?}");
        if !lora_moves {
            assert_ne!(
                group(&t.model.params, ParamGroup::Gate),
                group(&warmed(2, cfg).model.params, ParamGroup::Gate)
            );
        }
    }
}

#[test]
fn summed_routing_matches_two_independent_backward_passes() {
    let (ds, split) = setup(3);
    let cfg = TrainConfig {
        mmd_updates: MmdUpdates::HaloraAndDig,
        alpha: 0.7,
        ..config(3)
    };
    let t = warmed(3, cfg.clone());
    let b = first_batch(&ds, &split);
    let got = routed(&t, &cfg, &b);
    let names: Vec<String> = t
        .model
        .params
        .iter()
        .filter(|p| p.group != ParamGroup::Frozen)
        .map(|p| p.name.clone())
        .collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let pass = |use_mmd: bool| -> GradMap {
        let mut tape = Tape::new();
        let bind = t.model.params.bind(&mut tape);
        let out = t
            .model
            .forward(&mut tape, &bind, &b.0, &mut ForwardCtx::default())
            .unwrap();
        let loss = if use_mmd {
            let taps: Vec<_> = out.taps.iter().map(|x| x.pooled).collect();
            losses::mmd_layered(&mut tape, &taps, &b.2, &cfg.bandwidth).unwrap()
        } else {
            losses::cls_loss(&mut tape, out.feature, &b.1, &t.anchors).unwrap()
        };
        param::reverse_grad(&tape, loss, &t.model.params, &bind, &refs).unwrap()
    };
    let (cls, mmd) = (pass(false), pass(true));
    for n in &names {
        let want = Tensor::from_fn(cls[n].shape(), |i| {
            cls[n].data()[i] + cfg.alpha * mmd[n].data()[i]
        });
        assert!(got.grads[n].max_abs_diff(&want) < 1e-14, "{n}");
    }
}

#[test]
fn single_domain_batch_is_rejected_when_mmd_is_on() {
    let (ds, split) = setup(4);
    let t = warmed(4, config(4));
    let idx: Vec<usize> = split
        .train
        .iter()
        .copied()
        .filter(|&i| ds.samples[i].domain == 1)
        .take(4)
        .collect();
    let (x, y, d) = ds.batch(&idx).unwrap();
    let ctx = RouteCtx {
        halora: true,
        gates: true,
        gumbel: None,
    };
    assert!(routed_gradients(&t.model, &t.anchors, &config(4), &x, &y, &d, ctx).is_err());
}

#[test]
fn adamw_step_matches_the_update_formula() {
    let (ds, split) = setup(5);
    let cfg = config(5);
    let mut t = warmed(5, cfg.clone());
    let b = first_batch(&ds, &split);
    let grads = routed(&t, &cfg, &b).grads;
    let before = t.model.params.clone();
    let (lr_h, lr_g) = (0.013, 0.07);
    let (mut g1, mut g2) = (GradMap::new(), GradMap::new());
    for (n, g) in &grads {
        if before.get(n).unwrap().group == ParamGroup::Halora {
            g1.insert(n.clone(), g.clone())
        } else {
            g2.insert(n.clone(), g.clone())
        };
    }
    t.optim
        .apply(&mut t.model.params, &g1, lr_h, cfg.weight_decay)
        .unwrap();
    t.optim
        .apply(&mut t.model.params, &g2, lr_g, cfg.gate_weight_decay)
        .unwrap();
    for (n, g) in &grads {
        let (lr, wd) = if g1.contains_key(n) {
            (lr_h, cfg.weight_decay)
        } else {
            (lr_g, cfg.gate_weight_decay)
        };
        let (p0, p1) = (before.value(n).unwrap(), t.model.params.value(n).unwrap());
        for i in 0..g.len() {
            // First step: bias-corrected moments are g and g².
            let gi = g.data()[i];
            let (m, v) = (0.1 * gi / (1.0 - 0.9), 0.001 * gi * gi / (1.0 - 0.999));
            let want = p0.data()[i] * (1.0 - lr * wd) - lr * m / (v.sqrt() + 1e-8);
            assert!(
                (p1.data()[i] - want).abs() < 1e-15 * want.abs().max(1.0),
                "{n}[{i}]"
            );
        }
    }
}

#[test]
fn zero_learning_rates_change_nothing() {
    let (ds, split) = setup(6);
    let cfg = TrainConfig {
        lr_halora: 0.0,
        lr_gate: 0.0,
        epochs: 1,
        ..config(6)
    };
    let mut t = warmed(6, cfg);
    let before = t.model.params.clone();
    let mut records = Vec::new();
    t.run(&ds, &split, &mut |r| records.push(r.clone()))
        .unwrap();
    assert_eq!(t.model.params, before);
    assert!(records
        .iter()
        .any(|r| matches!(r, Record::Step(s) if s.l_cls.is_finite() && s.grad_norm_gate > 0.0)));
}

#[test]
fn same_seed_runs_are_bit_identical() {
    let (ds, split) = setup(7);
    let run = || {
        let mut hist = Vec::new();
        let mut t = trainer(
            &both(),
            TrainConfig {
                epochs: 2,
                ..config(7)
            },
        );
        t.run(&ds, &split, &mut |r| hist.push(r.clone())).unwrap();
        (t.model.params, t.optim, hist)
    };
    assert_eq!(run(), run());
}

#[test]
fn two_stage_freezes_gates_for_the_first_half() {
    let (ds, split) = setup(8);
    let cfg = TrainConfig {
        strategy: Strategy::TwoStageTaskThenDomain,
        ..config(8)
    };
    let mut t = trainer(&both(), cfg);
    let gates0 = group(&t.model.params, ParamGroup::Gate);
    let lora0 = group(&t.model.params, ParamGroup::Halora);
    for _ in 0..2 {
        t.run_epoch(&ds, &split, &mut |_| {}).unwrap();
        assert_eq!(group(&t.model.params, ParamGroup::Gate), gates0);
    }
    let lora_mid = group(&t.model.params, ParamGroup::Halora);
    assert_ne!(lora_mid, lora0);
    t.run_epoch(&ds, &split, &mut |_| {}).unwrap();
    assert_ne!(group(&t.model.params, ParamGroup::Gate), gates0);
    assert_eq!(group(&t.model.params, ParamGroup::Halora), lora_mid);
}

#[test]
fn alternative_switches_groups_every_epoch() {
    let (ds, split) = setup(9);
    let mut t = trainer(
        &both(),
        TrainConfig {
            strategy: Strategy::Alternative,
            ..config(9)
        },
    );
    for epoch in 0..4 {
        let (l0, g0) = (
            group(&t.model.params, ParamGroup::Halora),
            group(&t.model.params, ParamGroup::Gate),
        );
        t.run_epoch(&ds, &split, &mut |_| {}).unwrap();
        let lora_moved = group(&t.model.params, ParamGroup::Halora) != l0;
        let gates_moved = group(&t.model.params, ParamGroup::Gate) != g0;
        assert_eq!(
            (lora_moved, gates_moved),
            (epoch % 2 == 0, epoch % 2 == 1),
            "epoch {epoch}"
        );
    }
}

#[test]
fn gate_learning_rate_does_not_touch_the_first_stage() {
    let (ds, split) = setup(10);
    let first_stage = |lr_gate: f64| {
        let cfg = TrainConfig {
            strategy: Strategy::TwoStageTaskThenDomain,
            lr_gate,
            ..config(10)
        };
        let mut t = trainer(&both(), cfg);
        let mut traj = Vec::new();
        for _ in 0..2 {
            t.run_epoch(&ds, &split, &mut |_| {}).unwrap();
            traj.push(group(&t.model.params, ParamGroup::Halora));
        }
        traj
    };
    assert_eq!(first_stage(0.1), first_stage(3.0));
}

#[test]
fn untrained_uniform_gates_match_a_gateless_run() {
    let (ds, split) = setup(11);
    let cfg = TrainConfig {
        alpha: 0.0,
        lr_gate: 0.0,
        epochs: 2,
        ..config(11)
    };
    let no_gates = ModelSpec {
        gates: None,
        ..both()
    };
    let a = train_run(&ds, &split, &both(), &cfg).unwrap();
    let b = train_run(&ds, &split, &no_gates, &cfg).unwrap();
    for (n, v) in group(&b.model.params, ParamGroup::Halora) {
        assert!(
            a.model.params.value(&n).unwrap().max_abs_diff(&v) < 1e-12,
            "{n}"
        );
    }
    assert_eq!(a.accuracy, b.accuracy);
}

#[test]
fn resuming_from_an_epoch_boundary_reproduces_the_run() {
    let (ds, split) = setup(12);
    let cfg = TrainConfig {
        epochs: 3,
        ..config(12)
    };
    let mut full = trainer(&both(), cfg.clone());
    full.run(&ds, &split, &mut |_| {}).unwrap();
    let mut first = trainer(&both(), cfg);
    first.run_epoch(&ds, &split, &mut |_| {}).unwrap();
    let mut resumed = first.clone();
    resumed.run(&ds, &split, &mut |_| {}).unwrap();
    assert_eq!(resumed.model.params, full.model.params);
    assert_eq!(resumed.optim, full.optim);
}

#[test]
fn classification_loss_trends_down() {
    let mut down = 0;
    for seed in 0..10 {
        let spec = DomainSpec {
            confound_strength: 0.0,
            ..data_spec()
        };
        let ds = make_dataset(&spec, seed).unwrap();
        let split = lodo_split(&ds, 0, false).unwrap();
        let cfg = TrainConfig {
            alpha: 0.0,
            epochs: 6,
            ..config(seed)
        };
        let out = train_run(
            &ds,
            &split,
            &ModelSpec {
                gates: None,
                ..both()
            },
            &cfg,
        )
        .unwrap();
        let per_epoch: Vec<f64> = out
            .history
            .iter()
            .filter_map(|r| {
                if let Record::Epoch(e) = r {
                    Some(e.l_cls)
                } else {
                    None
                }
            })
            .collect();
        let head = (per_epoch[0] + per_epoch[1]) / 2.0;
        let tail = (per_epoch[4] + per_epoch[5]) / 2.0;
        down += usize::from(tail < head);
    }
    assert!(down >= 9, "{down}/10");
}
