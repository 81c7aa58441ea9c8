mod common;

use common::{randomize, seeded, uniform};
use headpurify_core::dig::{self, GateConfig};
use headpurify_core::encoder::{EncoderConfig, ForwardCtx, Model};
use headpurify_core::halora::LoraConfig;
use headpurify_core::param::ParamGroup;
use headpurify_core::{Tape, Tensor};
use proptest::prelude::*;

fn small() -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        num_heads: 3,
        head_dim: 2,
        num_tokens: 5,
        ..EncoderConfig::default()
    }
}

fn input(cfg: &EncoderConfig, batch: usize, seed: u64) -> Tensor {
    uniform(
        &mut seeded(seed),
        &[batch, cfg.content_tokens(), cfg.model_dim()],
    )
}

// Plain re-implementation of the encoder on nested vectors.

fn val(m: &Model, name: &str) -> Vec<f64> {
    m.params.value(name).unwrap().data().to_vec()
}

fn linear(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (out, inp) = (b.len(), x.len());
    (0..out)
        .map(|o| b[o] + (0..inp).map(|i| w[o * inp + i] * x[i]).sum::<f64>())
        .collect()
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn reexecute(m: &Model, sample: &[f64]) -> Vec<Vec<f64>> {
    let c = &m.config;
    let (d, h, n, t) = (c.model_dim(), c.num_heads, c.head_dim, c.num_tokens);
    let mut x: Vec<Vec<f64>> = vec![val(m, "embed.cls")];
    x.extend(sample.chunks(d).map(|r| r.to_vec()));
    let mut taps = Vec::new();
    for l in 0..c.num_layers {
        let p = |s: &str| val(m, &format!("layer{l}.{s}"));
        let hn: Vec<Vec<f64>> = x
            .iter()
            .map(|r| layer_norm(r, &p("ln1.gamma"), &p("ln1.beta")))
            .collect();
        let proj = |k: &str| -> Vec<Vec<f64>> {
            hn.iter()
                .map(|r| {
                    linear(
                        r,
                        &p(&format!("attn.{k}.weight")),
                        &p(&format!("attn.{k}.bias")),
                    )
                })
                .collect()
        };
        let (q, k, v) = (proj("q"), proj("k"), proj("v"));
        let weights: Vec<f64> = match &m.gates {
            Some(_) => {
                let g = val(m, &dig::gate_name(l));
                let mx = g.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = g.iter().map(|v| (v - mx).exp()).sum();
                g.iter().map(|v| h as f64 * (v - mx).exp() / z).collect()
            }
            None => vec![1.0; h],
        };
        let mut f = vec![vec![0.0; d]; t];
        for head in 0..h {
            let cols = head * n..(head + 1) * n;
            for i in 0..t {
                let s: Vec<f64> = (0..t)
                    .map(|j| {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (n as f64).sqrt()
                    })
                    .collect();
                let mx = s.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
                for c in cols.clone() {
                    let o: f64 = (0..t).map(|j| (s[j] - mx).exp() / z * v[j][c]).sum();
                    f[i][c] = weights[head] * o;
                }
            }
        }
        for i in 0..t {
            let o = linear(&f[i], &p("attn.o.weight"), &p("attn.o.bias"));
            for c in 0..d {
                x[i][c] += o[c];
            }
            let h2 = layer_norm(&x[i], &p("ln2.gamma"), &p("ln2.beta"));
            let a: Vec<f64> = linear(&h2, &p("mlp.fc1.weight"), &p("mlp.fc1.bias"))
                .into_iter()
                .map(gelu)
                .collect();
            let o = linear(&a, &p("mlp.fc2.weight"), &p("mlp.fc2.bias"));
            for c in 0..d {
                x[i][c] += o[c];
            }
        }
        taps.push(x[0].clone());
    }
    taps
}

#[test]
fn taps_match_step_by_step_reexecution() {
    for seed in 0..5 {
        let cfg = small();
        let mut m = Model::new(cfg.clone(), seed)
            .unwrap()
            .with_gates(GateConfig::default())
            .unwrap();
        randomize(&mut m.params, ParamGroup::Gate, 2.0, seed);
        let x = input(&cfg, 3, seed);
        let (feat, taps) = m.features_and_taps(&x).unwrap();
        let per = cfg.content_tokens() * cfg.model_dim();
        for b in 0..3 {
            let want = reexecute(&m, &x.data()[b * per..(b + 1) * per]);
            for l in 0..cfg.num_layers {
                for c in 0..cfg.model_dim() {
                    let got = taps[l].data()[b * cfg.model_dim() + c];
                    assert!((got - want[l][c]).abs() < 1e-12, "seed {seed} layer {l}");
                }
            }
            assert_eq!(feat.row(b), taps[cfg.num_layers - 1].row(b));
        }
    }
}

#[test]
fn single_token_attention_passes_values_through() {
    let cfg = EncoderConfig {
        num_layers: 1,
        num_heads: 2,
        head_dim: 2,
        num_tokens: 2,
        ..EncoderConfig::default()
    };
    for seed in 0..5 {
        let m = Model::new(cfg.clone(), seed).unwrap();
        let x = uniform(&mut seeded(seed), &[1, 4]);
        let mut tape = Tape::new();
        let b = m.params.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = m
            .msa_block(&mut tape, &b, 0, xv, 1, &mut ForwardCtx::default())
            .unwrap();
        // One key means every head's softmax weight is 1: the block is W_o(W_v x + b_v) + b_o.
        let v = linear(
            x.data(),
            &val(&m, "layer0.attn.v.weight"),
            &val(&m, "layer0.attn.v.bias"),
        );
        let want = linear(
            &v,
            &val(&m, "layer0.attn.o.weight"),
            &val(&m, "layer0.attn.o.bias"),
        );
        for (g, w) in tape.value(out).data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}

#[test]
fn uniform_gates_reproduce_the_ungated_model() {
    let cfg = EncoderConfig::default();
    for seed in 0..5 {
        let plain = Model::new(cfg.clone(), seed).unwrap();
        let mut gated = plain.clone().with_gates(GateConfig::default()).unwrap();
        let x = input(&cfg, 8, seed);
        let base = plain.features(&x, None).unwrap();
        assert!(gated.features(&x, None).unwrap().max_abs_diff(&base) <= 1e-12);
        for l in 0..cfg.num_layers {
            gated
                .params
                .set(&dig::gate_name(l), Tensor::full(&[cfg.num_heads], 1.7))
                .unwrap();
        }
        assert!(gated.features(&x, None).unwrap().max_abs_diff(&base) <= 1e-12);
    }
}

#[test]
fn zero_lora_factors_reproduce_the_plain_model() {
    let cfg = EncoderConfig::default();
    let plain = Model::new(cfg.clone(), 4).unwrap();
    let adapted = plain.clone().with_lora(LoraConfig::default(), 4).unwrap();
    let x = input(&cfg, 8, 4);
    assert!(
        adapted
            .features(&x, None)
            .unwrap()
            .max_abs_diff(&plain.features(&x, None).unwrap())
            <= 1e-12
    );
}

#[test]
fn content_token_permutation_leaves_the_feature_unchanged() {
    let cfg = EncoderConfig::default();
    let m = Model::new(cfg.clone(), 5).unwrap();
    let x = input(&cfg, 4, 5);
    let (t, d) = (cfg.content_tokens(), cfg.model_dim());
    let perm: Vec<usize> = (0..t).rev().collect();
    let shuffled = Tensor::from_fn(x.shape(), |i| {
        let (b, tok, c) = (i / (t * d), (i / d) % t, i % d);
        x.data()[b * t * d + perm[tok] * d + c]
    });
    let diff = m
        .features(&x, None)
        .unwrap()
        .max_abs_diff(&m.features(&shuffled, None).unwrap());
    assert!(diff < 1e-10, "{diff:e}");
}

#[test]
fn positional_encodings_break_permutation_invariance() {
    let cfg = EncoderConfig {
        positional: true,
        ..EncoderConfig::default()
    };
    let m = Model::new(cfg.clone(), 5).unwrap();
    let x = input(&cfg, 2, 5);
    let (t, d) = (cfg.content_tokens(), cfg.model_dim());
    let shuffled = Tensor::from_fn(x.shape(), |i| {
        let (b, tok, c) = (i / (t * d), (i / d) % t, i % d);
        x.data()[b * t * d + (t - 1 - tok) * d + c]
    });
    assert!(
        m.features(&x, None)
            .unwrap()
            .max_abs_diff(&m.features(&shuffled, None).unwrap())
            > 1e-6
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn batch_order_is_equivariant(seed in 0u64..1000, batch in 1usize..6) {
        let cfg = small();
        let mut m = Model::new(cfg.clone(), seed).unwrap()
            .with_lora(LoraConfig { rank_per_layer: vec![1, 2], ..LoraConfig::default() }, seed).unwrap()
            .with_gates(GateConfig::default()).unwrap();
        randomize(&mut m.params, ParamGroup::Halora, 0.3, seed);
        randomize(&mut m.params, ParamGroup::Gate, 1.0, seed + 1);
        let x = input(&cfg, batch, seed);
        let per = cfg.content_tokens() * cfg.model_dim();
        let rev = Tensor::from_fn(x.shape(), |i| x.data()[(batch - 1 - i / per) * per + i % per]);
        let a = m.features(&x, None).unwrap();
        let b = m.features(&rev, None).unwrap();
        for i in 0..batch {
            prop_assert_eq!(a.row(i), b.row(batch - 1 - i));
        }
        prop_assert_eq!(a, m.features(&x, None).unwrap());
    }
}
