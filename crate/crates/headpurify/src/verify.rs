//! Oracle and invariant checks runnable from the command line.

use headpurify_core::dig::{gate_name, GateConfig};
use headpurify_core::domainsynth::{lodo_split, make_dataset, DomainSpec};
use headpurify_core::encoder::{EncoderConfig, Model};
use headpurify_core::halora::{factor_name, LoraConfig, LoraLayout, LoraMode, Target};
use headpurify_core::losses::{
    gaussian_kernel_matrix, mmd_layered, mmd_pair_value, BandwidthRule, ClassAnchors, KernelSpec,
};
use headpurify_core::optim::OptimizerState;
use headpurify_core::param::{GradMap, ParamGroup, ParamSet};
use headpurify_core::rng::{self, SeededRng};
use headpurify_core::trainer::{
    routed_gradients, MmdUpdates, ModelSpec, RouteCtx, TrainConfig, Trainer,
};
use headpurify_core::{Tape, Tensor};

use crate::checkpoint::Checkpoint;

pub type Outcome = std::result::Result<String, String>;

pub struct Check {
    pub name: &'static str,
    pub run: fn() -> Outcome,
}

pub const GRAD_SEEDS: u64 = 20;
const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-5;
const FLOOR: f64 = 1e-3;

pub fn suite() -> Vec<Check> {
    vec![
        Check {
            name: "gradients",
            run: gradients,
        },
        Check {
            name: "merge",
            run: merge,
        },
        Check {
            name: "block-isolation",
            run: block_isolation,
        },
        Check {
            name: "uniform-gates",
            run: uniform_gates,
        },
        Check {
            name: "mmd-oracle",
            run: mmd_oracle,
        },
        Check {
            name: "routing",
            run: routing,
        },
        Check {
            name: "checkpoint-resume",
            run: checkpoint_resume,
        },
    ]
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn uniform(r: &mut SeededRng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| 2.0 * rng::uniform(r) - 1.0)
}

fn randomize(ps: &mut ParamSet, group: ParamGroup, scale: f64, r: &mut SeededRng) {
    let names: Vec<String> = ps
        .iter()
        .filter(|p| p.group == group)
        .map(|p| p.name.clone())
        .collect();
    for n in names {
        let shape = ps.value(&n).expect("listed").shape().to_vec();
        ps.set(&n, uniform(r, &shape).scale(scale))
            .expect("same shape");
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        num_heads: 2,
        head_dim: 4,
        num_tokens: 5,
        ..EncoderConfig::default()
    }
}

fn small_lora(mode: LoraMode) -> LoraConfig {
    LoraConfig {
        mode,
        rank_per_layer: vec![2, 2],
        ..LoraConfig::default()
    }
}

/// Worst relative error between routed gradients of `L_cls + α·L_MMD` and
/// central differences, over every trainable coordinate.
fn composite_error(seed: u64) -> std::result::Result<f64, String> {
    let mode = if seed % 2 == 0 {
        LoraMode::HeadAware
    } else {
        LoraMode::Conventional
    };
    let encoder = EncoderConfig {
        positional: seed % 3 == 0,
        ..small_encoder()
    };
    let spec = ModelSpec {
        encoder,
        lora: Some(small_lora(mode)),
        gates: Some(GateConfig::default()),
    };
    let mut model = spec.build(seed).map_err(err)?;
    let mut r = rng::stream(seed, "verify/gradients");
    randomize(&mut model.params, ParamGroup::Halora, 0.3, &mut r);
    randomize(&mut model.params, ParamGroup::Gate, 1.0, &mut r);
    let (n, t, d) = (6, 4, 8);
    let x = uniform(&mut r, &[n, t, d]);
    let labels: Vec<usize> = (0..n).map(|i| (i + seed as usize) % 3).collect();
    let domains: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let anchors = ClassAnchors::random(3, d, 0.1, seed).map_err(err)?;
    let cfg = TrainConfig {
        alpha: 0.7,
        mmd_updates: MmdUpdates::HaloraAndDig,
        bandwidth: BandwidthRule::Fixed(KernelSpec::new(vec![0.5, 1.0, 2.0]).map_err(err)?),
        ..TrainConfig::default()
    };
    let eval = |m: &Model| -> std::result::Result<(GradMap, f64), String> {
        let ctx = RouteCtx {
            halora: true,
            gates: true,
            gumbel: None,
        };
        let out = routed_gradients(m, &anchors, &cfg, &x, &labels, &domains, ctx).map_err(err)?;
        let loss = out.l_cls + cfg.alpha * out.l_mmd.ok_or("MMD term missing")?;
        Ok((out.grads, loss))
    };
    let (grads, _) = eval(&model)?;
    let mut worst: f64 = 0.0;
    for (name, g) in &grads {
        for j in 0..g.len() {
            let probe = |delta: f64| -> std::result::Result<f64, String> {
                let mut m = model.clone();
                let mut v = m.params.value(name).map_err(err)?.clone();
                v.data_mut()[j] += delta;
                m.params.set(name, v).map_err(err)?;
                Ok(eval(&m)?.1)
            };
            let num = (probe(STEP)? - probe(-STEP)?) / (2.0 * STEP);
            let a = g.data()[j];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(FLOOR));
        }
    }
    Ok(worst)
}

fn gradients() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..GRAD_SEEDS {
        let e = composite_error(seed)?;
        ensure(e < REL_TOL, || format!("seed {seed}: relative error {e:e}"))?;
        worst = worst.max(e);
    }
    Ok(format!(
        "{GRAD_SEEDS} seeds, worst relative error {worst:.1e}"
    ))
}

fn merge() -> Outcome {
    let spec = ModelSpec {
        lora: Some(LoraConfig::default()),
        gates: Some(GateConfig::default()),
        ..Default::default()
    };
    let mut model = spec.build(1).map_err(err)?;
    let mut r = rng::stream(1, "verify/merge");
    randomize(&mut model.params, ParamGroup::Halora, 0.2, &mut r);
    randomize(&mut model.params, ParamGroup::Gate, 1.0, &mut r);
    let c = &model.config;
    let x = uniform(&mut r, &[100, c.content_tokens(), c.model_dim()]);
    let merged = model.merged().map_err(err)?;
    ensure(
        merged.params.iter().all(|p| p.group != ParamGroup::Halora),
        || "merged model kept factors".into(),
    )?;
    let gap = model
        .features(&x, None)
        .map_err(err)?
        .max_abs_diff(&merged.features(&x, None).map_err(err)?);
    ensure(gap <= 1e-12, || format!("max abs difference {gap:e}"))?;
    Ok(format!("100 inputs, max abs difference {gap:.1e}"))
}

fn block_isolation() -> Outcome {
    let (layers, heads, n) = (2, 4, 8);
    let d = heads * n;
    for mode in [LoraMode::HeadAware, LoraMode::Conventional] {
        let layout = LoraLayout::new(small_lora(mode), layers, heads, n).map_err(err)?;
        let mut ps = layout.init(3).map_err(err)?;
        let mut r = rng::stream(3, "verify/isolation");
        randomize(&mut ps, ParamGroup::Halora, 1.0, &mut r);
        let before = layout.delta_weight(&ps, 1, Target::V).map_err(err)?;
        let name = match mode {
            LoraMode::HeadAware => factor_name(1, Target::V, Some(2), "B"),
            LoraMode::Conventional => factor_name(1, Target::V, None, "B"),
        };
        let b = ps.value(&name).map_err(err)?;
        ps.set(&name, Tensor::from_fn(b.shape(), |i| b.data()[i] + 0.5))
            .map_err(err)?;
        let after = layout.delta_weight(&ps, 1, Target::V).map_err(err)?;
        let changed: Vec<usize> = (0..heads)
            .filter(|&h| (h * n * d..(h + 1) * n * d).any(|i| before.data()[i] != after.data()[i]))
            .collect();
        match mode {
            LoraMode::HeadAware => ensure(changed == [2], || {
                format!("head-aware B perturbation moved heads {changed:?}")
            })?,
            LoraMode::Conventional => ensure(changed.len() == heads, || {
                format!("shared B perturbation moved only heads {changed:?}")
            })?,
        }
    }
    Ok("head-aware touches one head, shared B touches all".into())
}

fn uniform_gates() -> Outcome {
    let mut worst: f64 = 0.0;
    for (seed, level) in [(0u64, 0.0), (1, 1.7), (2, -3.2)] {
        let base = ModelSpec {
            lora: Some(LoraConfig::default()),
            ..Default::default()
        };
        let mut plain = base.build(seed).map_err(err)?;
        let mut r = rng::stream(seed, "verify/gates");
        randomize(&mut plain.params, ParamGroup::Halora, 0.2, &mut r);
        let mut gated = plain
            .clone()
            .with_gates(GateConfig::default())
            .map_err(err)?;
        for l in 0..gated.config.num_layers {
            gated
                .params
                .set(
                    &gate_name(l),
                    Tensor::full(&[gated.config.num_heads], level),
                )
                .map_err(err)?;
        }
        let c = &plain.config;
        let x = uniform(&mut r, &[16, c.content_tokens(), c.model_dim()]);
        let gap = plain
            .features(&x, None)
            .map_err(err)?
            .max_abs_diff(&gated.features(&x, None).map_err(err)?);
        ensure(gap <= 1e-12, || {
            format!("logits {level}: max abs difference {gap:e}")
        })?;
        worst = worst.max(gap);
    }
    Ok(format!("max abs difference {worst:.1e}"))
}

fn direct_mmd(p: &[&[f64]], q: &[&[f64]], bw: &[f64]) -> f64 {
    let k = |x: &[f64], y: &[f64]| {
        let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        bw.iter().map(|s| (-d2 / (2.0 * s * s)).exp()).sum::<f64>() / bw.len() as f64
    };
    let mean = |a: &[&[f64]], b: &[&[f64]]| {
        a.iter()
            .flat_map(|x| b.iter().map(move |y| k(x, y)))
            .sum::<f64>()
            / (a.len() * b.len()) as f64
    };
    mean(p, p) + mean(q, q) - 2.0 * mean(p, q)
}

fn rows(t: &Tensor) -> Vec<&[f64]> {
    (0..t.rows()).map(|i| t.row(i)).collect()
}

fn mmd_oracle() -> Outcome {
    let mut r = rng::stream(5, "verify/mmd");
    let mut worst: f64 = 0.0;
    for i in 0..200usize {
        let (n, m, d) = (1 + i % 16, 1 + (i * 7) % 16, 1 + i % 4);
        let bw: Vec<f64> = (0..1 + i % 3)
            .map(|_| 0.2 + 2.0 * rng::uniform(&mut r))
            .collect();
        let spec = KernelSpec::new(bw.clone()).map_err(err)?;
        let (p, q) = (uniform(&mut r, &[n, d]), uniform(&mut r, &[m, d]));
        let got = mmd_pair_value(&p, &q, &spec).map_err(err)?;
        worst = worst.max((got - direct_mmd(&rows(&p), &rows(&q), &bw)).abs());
        let km = gaussian_kernel_matrix(&p, &q, &spec).map_err(err)?;
        ensure(km.shape() == [n, m], || "kernel matrix shape".into())?;

        let (layers, doms, per) = (1 + i % 4, 2 + i % 3, 1 + i % 5);
        let tags: Vec<usize> = (0..doms * per).map(|j| j % doms).collect();
        let taps: Vec<Tensor> = (0..layers)
            .map(|_| uniform(&mut r, &[doms * per, d]))
            .collect();
        let mut tape = Tape::new();
        let vars: Vec<_> = taps.iter().map(|t| tape.constant(t.clone())).collect();
        let v = mmd_layered(&mut tape, &vars, &tags, &BandwidthRule::Fixed(spec.clone()))
            .map_err(err)?;
        let got = tape.value(v).item();
        let mut want = 0.0;
        for t in &taps {
            let group = |g: usize| -> Vec<&[f64]> {
                (0..tags.len())
                    .filter(|&j| tags[j] == g)
                    .map(|j| t.row(j))
                    .collect()
            };
            let mut s = 0.0;
            for a in 0..doms {
                for b in a + 1..doms {
                    s += direct_mmd(&group(a), &group(b), &bw);
                }
            }
            want += s / (doms * (doms - 1) / 2) as f64;
        }
        worst = worst.max((got - want / layers as f64).abs());
    }
    ensure(worst <= 1e-12, || {
        format!("direct-sum disagreement {worst:e}")
    })?;
    for i in 0..1000usize {
        let (n, m, d) = (1 + i % 7, 1 + (i / 7) % 5, 1 + i % 4);
        let (p, q) = (uniform(&mut r, &[n, d]), uniform(&mut r, &[m, d]));
        let spec = KernelSpec::median_heuristic(&[&p, &q], &[0.5, 1.0, 2.0]).map_err(err)?;
        let pp = mmd_pair_value(&p, &p, &spec).map_err(err)?;
        let pq = mmd_pair_value(&p, &q, &spec).map_err(err)?;
        let qp = mmd_pair_value(&q, &p, &spec).map_err(err)?;
        ensure(
            pp.abs() < 1e-12 && (pq - qp).abs() < 1e-12 && pq >= -1e-12,
            || {
                format!(
                    "instance {i}: self {pp:e}, asymmetry {:e}, value {pq:e}",
                    pq - qp
                )
            },
        )?;
    }
    Ok(format!(
        "200 direct-sum cases within {worst:.1e}; 1000 property instances"
    ))
}

struct Fixture {
    ds: headpurify_core::domainsynth::DomainDataset,
    split: headpurify_core::domainsynth::Split,
    spec: ModelSpec,
}

fn fixture(seed: u64) -> std::result::Result<Fixture, String> {
    let data = DomainSpec {
        num_domains: 3,
        num_classes: 3,
        samples_per_domain_class: 10,
        dim: 8,
        content_tokens: 4,
        task_tokens: 2,
        confounder_tokens: 2,
        ..DomainSpec::default()
    };
    let ds = make_dataset(&data, seed).map_err(err)?;
    let split = lodo_split(&ds, 2, true).map_err(err)?;
    let spec = ModelSpec {
        encoder: small_encoder(),
        lora: Some(small_lora(LoraMode::HeadAware)),
        gates: Some(GateConfig::default()),
    };
    Ok(Fixture { ds, split, spec })
}

fn trainer(f: &Fixture, cfg: TrainConfig) -> std::result::Result<Trainer, String> {
    let anchors = ClassAnchors::random(3, 8, cfg.temperature, cfg.seed).map_err(err)?;
    Trainer::new(f.spec.build(cfg.seed).map_err(err)?, anchors, cfg).map_err(err)
}

fn small_train(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 12,
        epochs: 2,
        lr_halora: 1e-2,
        lr_gate: 5e-2,
        seed,
        ..TrainConfig::default()
    }
}

fn routing() -> Outcome {
    let f = fixture(6)?;
    let cfg = TrainConfig {
        alpha: 5.0,
        mmd_updates: MmdUpdates::Dig,
        weight_decay: 0.0,
        ..small_train(6)
    };
    let mut t = trainer(&f, cfg.clone())?;
    t.run_epoch(&f.ds, &f.split, &mut |_| {}).map_err(err)?;
    let batch: Vec<usize> =
        f.ds.domains_of(&f.split.train)
            .into_iter()
            .flat_map(|d| {
                f.split
                    .train
                    .iter()
                    .copied()
                    .filter(|&i| f.ds.samples[i].domain == d)
                    .take(4)
                    .collect::<Vec<_>>()
            })
            .collect();
    let (x, labels, domains) = f.ds.batch(&batch).map_err(err)?;
    let route = |c: &TrainConfig| {
        let ctx = RouteCtx {
            halora: true,
            gates: true,
            gumbel: None,
        };
        routed_gradients(&t.model, &t.anchors, c, &x, &labels, &domains, ctx).map_err(err)
    };
    let with = route(&cfg)?;
    let without = route(&TrainConfig {
        alpha: 0.0,
        ..cfg.clone()
    })?;
    let mmd_only: GradMap = with
        .grads
        .iter()
        .map(|(n, g)| {
            (
                n.clone(),
                Tensor::from_fn(g.shape(), |i| g.data()[i] - without.grads[n].data()[i]),
            )
        })
        .collect();
    let theta1 = |ps: &ParamSet| -> Vec<Tensor> {
        ps.iter()
            .filter(|p| p.group == ParamGroup::Halora)
            .map(|p| p.value.clone())
            .collect()
    };
    let gates = |ps: &ParamSet| -> Vec<Tensor> {
        ps.iter()
            .filter(|p| p.group == ParamGroup::Gate)
            .map(|p| p.value.clone())
            .collect()
    };
    let (h0, g0) = (theta1(&t.model.params), gates(&t.model.params));
    // Fresh moments: momentum from the warm-up epoch would move θ1 regardless.
    let mut optim = OptimizerState::new(cfg.adam);
    optim
        .apply(&mut t.model.params, &mmd_only, 0.1, 0.0)
        .map_err(err)?;
    ensure(theta1(&t.model.params) == h0, || {
        "a pure-MMD step moved HA-LoRA parameters".into()
    })?;
    ensure(gates(&t.model.params) != g0, || {
        "a pure-MMD step left the gates in place".into()
    })?;
    Ok("pure-MMD step leaves θ1 bit-unchanged and moves the gates".into())
}

fn checkpoint_resume() -> Outcome {
    let f = fixture(7)?;
    let mut full = trainer(&f, small_train(7))?;
    full.run_epoch(&f.ds, &f.split, &mut |_| {}).map_err(err)?;
    let saved = Checkpoint::from_trainer(&full).to_bytes();
    full.run(&f.ds, &f.split, &mut |_| {}).map_err(err)?;
    let loaded = Checkpoint::from_bytes(&saved)?;
    ensure(loaded.to_bytes() == saved, || {
        "save/load changed the checkpoint".into()
    })?;
    let mut resumed = loaded.into_trainer().map_err(err)?;
    resumed.run(&f.ds, &f.split, &mut |_| {}).map_err(err)?;
    let (a, b) = (
        Checkpoint::from_trainer(&full).to_bytes(),
        Checkpoint::from_trainer(&resumed).to_bytes(),
    );
    ensure(a == b, || {
        "resumed run diverged from the unbroken one".into()
    })?;
    Ok(format!(
        "{} byte checkpoint, resumed run identical",
        a.len()
    ))
}

/// Run every check, reporting each through `report`; returns the failures.
pub fn run_all(report: &mut dyn FnMut(&str, &Outcome)) -> usize {
    let mut failed = 0;
    for c in suite() {
        let out = (c.run)();
        failed += usize::from(out.is_err());
        report(c.name, &out);
    }
    failed
}
