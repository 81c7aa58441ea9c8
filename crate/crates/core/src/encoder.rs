//! Toy pre-norm transformer encoder with hooks for LoRA on Q/V, head gating
//! between attention and output projection, and per-layer feature taps.
//!
//! Inputs are `[batch × (num_tokens − 1) × d]` content tokens; the encoder
//! prepends its frozen class embedding to every sample. The classifying
//! feature is the class-token row after the last block.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dig::{self, GateConfig, GateVariant};
use crate::error::{Error, Result};
use crate::halora::{LoraConfig, LoraLayout, Target};
use crate::param::{Binding, ParamGroup, ParamSet};
use crate::rng::{self, SeededRng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapKind {
    ClassToken,
    MeanPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    /// Sequence length including the class token.
    pub num_tokens: usize,
    pub mlp_ratio: f64,
    /// Add frozen learned positional encodings.
    pub positional: bool,
    /// Which per-layer feature the MMD taps read.
    pub tap: TapKind,
    /// In `[0, 1]`. Each head's Q/K/V rows read mostly from one `head_dim`-wide
    /// block of input coordinates; weights outside the block are scaled by
    /// `1 − head_focus`. Blocks are dealt to heads by a per-layer permutation.
    pub head_focus: f64,
    /// Multiplier on the frozen MLP branch at init.
    pub mlp_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            head_dim: 8,
            num_tokens: 9,
            mlp_ratio: 2.0,
            positional: false,
            tap: TapKind::ClassToken,
            head_focus: 0.9,
            mlp_scale: 0.5,
        }
    }
}

impl EncoderConfig {
    pub fn model_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn content_tokens(&self) -> usize {
        self.num_tokens - 1
    }

    pub fn mlp_dim(&self) -> usize {
        (libm::round(self.model_dim() as f64 * self.mlp_ratio) as usize).max(1)
    }

    pub fn total_heads(&self) -> usize {
        self.num_layers * self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.head_dim == 0 {
            return Err(Error::invalid(
                "layers, heads and head_dim must be positive",
            ));
        }
        if self.num_tokens < 2 {
            return Err(Error::invalid(
                "num_tokens must be at least 2 (class token + content)",
            ));
        }
        if !(self.mlp_ratio > 0.0)
            || !(0.0..=1.0).contains(&self.head_focus)
            || !(self.mlp_scale >= 0.0)
        {
            return Err(Error::invalid(
                "mlp_ratio must be positive, head_focus in [0,1], mlp_scale >= 0",
            ));
        }
        Ok(())
    }
}

/// Set of `(layer, head)` pairs.
pub type HeadSet = BTreeSet<(usize, usize)>;

/// Class-token (or mean-pooled) representation after one block.
#[derive(Debug, Clone, Copy)]
pub struct LayerTap {
    pub layer_index: usize,
    pub pooled: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub feature: Var,
    pub taps: Vec<LayerTap>,
}

/// Per-call knobs that are not part of the model itself.
#[derive(Default)]
pub struct ForwardCtx<'a> {
    /// Sample binary gates with this stream and temperature (training).
    pub gumbel: Option<(&'a mut SeededRng, f64)>,
    /// Heads whose outputs are zeroed before concatenation.
    pub dropped: Option<&'a HeadSet>,
    /// Override the binary-variant gate mask with fixed values per layer.
    pub fixed_binary: Option<&'a [Vec<f64>]>,
    /// Receives each layer's gated head outputs `[batch·T × d]` before the
    /// output projection.
    pub capture: Option<&'a mut Vec<Tensor>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: EncoderConfig,
    pub params: ParamSet,
    pub lora: Option<LoraLayout>,
    pub gates: Option<GateConfig>,
}

pub(crate) fn pname(layer: usize, rest: &str) -> String {
    alloc::format!("layer{layer}.{rest}")
}

impl Model {
    /// Randomly initialized frozen backbone.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim();
        let m = config.mlp_dim();
        let (h, n) = (config.num_heads, config.head_dim);
        let mut rng = rng::stream(seed, "backbone");
        let mut ps = ParamSet::new();
        let frozen = ParamGroup::Frozen;
        ps.insert("embed.cls", rng::gaussian(&mut rng, &[d], 0.02), frozen)?;
        if config.positional {
            ps.insert(
                "embed.pos",
                rng::gaussian(&mut rng, &[config.num_tokens, d], 0.02),
                frozen,
            )?;
        }
        let std_d = 1.0 / libm::sqrt(d as f64);
        for l in 0..config.num_layers {
            ps.insert(pname(l, "ln1.gamma"), Tensor::full(&[d], 1.0), frozen)?;
            ps.insert(pname(l, "ln1.beta"), Tensor::zeros(&[d]), frozen)?;
            let blocks = rng::permutation(&mut rng, h);
            for proj in ["q", "k", "v"] {
                let mut w = rng::gaussian(&mut rng, &[d, d], 1.0);
                for head in 0..h {
                    let focus = blocks[head];
                    for row in head * n..(head + 1) * n {
                        for col in 0..d {
                            let inside = col / n == focus;
                            // Focused weights keep unit variance over an n-wide fan-in.
                            let s = if inside {
                                libm::sqrt(
                                    config.head_focus / n as f64
                                        + (1.0 - config.head_focus) / d as f64,
                                )
                            } else {
                                (1.0 - config.head_focus) * std_d
                            };
                            w.data_mut()[row * d + col] *= s;
                        }
                    }
                }
                ps.insert(pname(l, &alloc::format!("attn.{proj}.weight")), w, frozen)?;
                ps.insert(
                    pname(l, &alloc::format!("attn.{proj}.bias")),
                    Tensor::zeros(&[d]),
                    frozen,
                )?;
            }
            ps.insert(
                pname(l, "attn.o.weight"),
                rng::gaussian(&mut rng, &[d, d], std_d),
                frozen,
            )?;
            ps.insert(pname(l, "attn.o.bias"), Tensor::zeros(&[d]), frozen)?;
            ps.insert(pname(l, "ln2.gamma"), Tensor::full(&[d], 1.0), frozen)?;
            ps.insert(pname(l, "ln2.beta"), Tensor::zeros(&[d]), frozen)?;
            let s1 = 1.0 / libm::sqrt(d as f64);
            let s2 = config.mlp_scale / libm::sqrt(m as f64);
            ps.insert(
                pname(l, "mlp.fc1.weight"),
                rng::gaussian(&mut rng, &[m, d], s1),
                frozen,
            )?;
            ps.insert(pname(l, "mlp.fc1.bias"), Tensor::zeros(&[m]), frozen)?;
            ps.insert(
                pname(l, "mlp.fc2.weight"),
                rng::gaussian(&mut rng, &[d, m], s2),
                frozen,
            )?;
            ps.insert(pname(l, "mlp.fc2.bias"), Tensor::zeros(&[d]), frozen)?;
        }
        Ok(Self {
            config,
            params: ps,
            lora: None,
            gates: None,
        })
    }

    /// Attach fresh LoRA factors on the configured targets of every layer.
    pub fn with_lora(mut self, cfg: LoraConfig, seed: u64) -> Result<Self> {
        if self.lora.is_some() {
            return Err(Error::invalid("model already has LoRA factors"));
        }
        let c = &self.config;
        let layout = LoraLayout::new(cfg, c.num_layers, c.num_heads, c.head_dim)?;
        self.params.merge_from(&layout.init(seed)?)?;
        self.lora = Some(layout);
        Ok(self)
    }

    /// Attach zero-initialized gate logits to every layer.
    pub fn with_gates(mut self, cfg: GateConfig) -> Result<Self> {
        if self.gates.is_some() {
            return Err(Error::invalid("model already has gates"));
        }
        cfg.validate()?;
        self.params.merge_from(&dig::init_gates(
            self.config.num_layers,
            self.config.num_heads,
        )?)?;
        self.gates = Some(cfg);
        Ok(self)
    }

    /// Plain model whose Q/V weights absorb the LoRA deltas.
    pub fn merged(&self) -> Result<Model> {
        let Some(layout) = &self.lora else {
            return Ok(self.clone());
        };
        let mut ps = ParamSet::new();
        for p in self.params.iter().filter(|p| p.group != ParamGroup::Halora) {
            ps.insert(p.name.clone(), p.value.clone(), p.group)?;
        }
        for l in 0..self.config.num_layers {
            for &t in &layout.config.targets {
                let name = pname(l, &alloc::format!("attn.{}.weight", proj_key(t)));
                let merged = layout.merge(self.params.value(&name)?, &self.params, l, t)?;
                ps.set(&name, merged)?;
            }
        }
        Ok(Model {
            config: self.config.clone(),
            params: ps,
            lora: None,
            gates: self.gates.clone(),
        })
    }

    /// Names of the parameters in `group`, in insertion order.
    pub fn trainable_names(&self, group: ParamGroup) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.name.clone())
            .collect()
    }

    fn w(&self, b: &Binding, name: &str) -> Result<Var> {
        Ok(b.var(self.params.id(name)?))
    }

    /// Build the `[batch·T × d]` token matrix with the class token in front.
    fn embed(&self, x: &Tensor) -> Result<(Tensor, usize)> {
        let c = &self.config;
        let d = c.model_dim();
        let t_in = c.content_tokens();
        let sh = x.shape();
        let ok = match sh {
            [_, t, dd] => *t == t_in && *dd == d,
            _ => false,
        };
        if !ok {
            return Err(Error::shape(alloc::format!(
                "encoder expects [batch × {t_in} × {d}] content tokens, got {sh:?}"
            )));
        }
        let batch = sh[0];
        let cls = self.params.value("embed.cls")?.data();
        let pos = if c.positional {
            Some(self.params.value("embed.pos")?.data())
        } else {
            None
        };
        let mut data = Vec::with_capacity(batch * c.num_tokens * d);
        for b in 0..batch {
            data.extend_from_slice(cls);
            data.extend_from_slice(&x.data()[b * t_in * d..(b + 1) * t_in * d]);
        }
        if let Some(pos) = pos {
            for row in data.chunks_exact_mut(c.num_tokens * d) {
                for (v, p) in row.iter_mut().zip(pos) {
                    *v += p;
                }
            }
        }
        Ok((Tensor::new(&[batch * c.num_tokens, d], data)?, batch))
    }

    fn projection(
        &self,
        tape: &mut Tape,
        b: &Binding,
        layer: usize,
        h: Var,
        proj: &str,
        target: Option<Target>,
    ) -> Result<Var> {
        let w = self.w(b, &pname(layer, &alloc::format!("attn.{proj}.weight")))?;
        let bias = self.w(b, &pname(layer, &alloc::format!("attn.{proj}.bias")))?;
        let mut out = tape.linear(h, w)?;
        if let (Some(t), Some(layout)) = (target, &self.lora) {
            if layout.config.targets.contains(&t) {
                let br = layout.branch(tape, &self.params, b, layer, t, h)?;
                out = tape.add(out, br)?;
            }
        }
        tape.add_row(out, bias)
    }

    /// One gated multi-head self-attention sub-block (without residual).
    /// `x` is the normalized `[batch·T × d]` input.
    pub fn msa_block(
        &self,
        tape: &mut Tape,
        b: &Binding,
        layer: usize,
        x: Var,
        batch: usize,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let c = &self.config;
        let q = self.projection(tape, b, layer, x, "q", Some(Target::Q))?;
        let k = self.projection(tape, b, layer, x, "k", None)?;
        let v = self.projection(tape, b, layer, x, "v", Some(Target::V))?;
        let mut f = tape.attention(q, k, v, batch, c.num_heads)?;
        if let Some(gcfg) = &self.gates {
            let logits = self.w(b, &dig::gate_name(layer))?;
            if tape.value(logits).len() != c.num_heads {
                return Err(Error::shape("gate count differs from head count"));
            }
            f = match gcfg.variant {
                GateVariant::Soft => dig::soft_gate(tape, f, logits)?,
                GateVariant::GumbelBinary => {
                    let mask = if let Some(fixed) = ctx.fixed_binary {
                        tape.constant(dig::mask_tensor(&fixed[layer]))
                    } else if let Some((rng, temp)) = ctx.gumbel.as_mut() {
                        dig::gumbel_binary_gates(tape, logits, *temp, rng)?
                    } else {
                        tape.constant(dig::mask_tensor(&dig::binary_eval_mask(
                            tape.value(logits).data(),
                        )))
                    };
                    tape.head_scale(f, mask)?
                }
            };
        }
        if let Some(dropped) = ctx.dropped {
            if dropped.iter().any(|&(l, _)| l == layer) {
                let mask: Vec<f64> = (0..c.num_heads)
                    .map(|h| {
                        if dropped.contains(&(layer, h)) {
                            0.0
                        } else {
                            1.0
                        }
                    })
                    .collect();
                let m = tape.constant(dig::mask_tensor(&mask));
                f = tape.head_scale(f, m)?;
            }
        }
        if let Some(c) = ctx.capture.as_mut() {
            c.push(tape.value(f).clone());
        }
        let wo = self.w(b, &pname(layer, "attn.o.weight"))?;
        let bo = self.w(b, &pname(layer, "attn.o.bias"))?;
        let o = tape.linear(f, wo)?;
        tape.add_row(o, bo)
    }

    fn mlp(&self, tape: &mut Tape, b: &Binding, layer: usize, x: Var) -> Result<Var> {
        let w1 = self.w(b, &pname(layer, "mlp.fc1.weight"))?;
        let b1 = self.w(b, &pname(layer, "mlp.fc1.bias"))?;
        let w2 = self.w(b, &pname(layer, "mlp.fc2.weight"))?;
        let b2 = self.w(b, &pname(layer, "mlp.fc2.bias"))?;
        let h = tape.linear(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.gelu(h);
        let o = tape.linear(h, w2)?;
        tape.add_row(o, b2)
    }

    /// One full pre-norm block: `x + MSA(LN(x))`, then `x + MLP(LN(x))`.
    pub fn block(
        &self,
        tape: &mut Tape,
        b: &Binding,
        layer: usize,
        x: Var,
        batch: usize,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let g1 = self.w(b, &pname(layer, "ln1.gamma"))?;
        let b1 = self.w(b, &pname(layer, "ln1.beta"))?;
        let h = tape.layer_norm(x, g1, b1)?;
        let a = self.msa_block(tape, b, layer, h, batch, ctx)?;
        let x = tape.add(x, a)?;
        let g2 = self.w(b, &pname(layer, "ln2.gamma"))?;
        let b2 = self.w(b, &pname(layer, "ln2.beta"))?;
        let h = tape.layer_norm(x, g2, b2)?;
        let m = self.mlp(tape, b, layer, h)?;
        tape.add(x, m)
    }

    pub(crate) fn class_rows(&self, batch: usize) -> Vec<usize> {
        (0..batch).map(|i| i * self.config.num_tokens).collect()
    }

    fn pool(&self, tape: &mut Tape, x: Var, batch: usize) -> Result<Var> {
        match self.config.tap {
            TapKind::ClassToken => tape.select_rows(x, &self.class_rows(batch)),
            TapKind::MeanPool => {
                let t = self.config.num_tokens;
                let pool = Tensor::from_fn(&[batch, batch * t], |i| {
                    let (r, c) = (i / (batch * t), i % (batch * t));
                    if c / t == r {
                        1.0 / t as f64
                    } else {
                        0.0
                    }
                });
                let p = tape.constant(pool);
                tape.matmul(p, x)
            }
        }
    }

    /// Full forward. Returns the class-token feature and one tap per layer.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Binding,
        x: &Tensor,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<ForwardOutput> {
        let (tokens, batch) = self.embed(x)?;
        let mut h = tape.constant(tokens);
        let mut taps = Vec::with_capacity(self.config.num_layers);
        for l in 0..self.config.num_layers {
            h = self.block(tape, b, l, h, batch, ctx)?;
            taps.push(LayerTap {
                layer_index: l,
                pooled: self.pool(tape, h, batch)?,
            });
        }
        let feature = match self.config.tap {
            TapKind::ClassToken => taps.last().expect("at least one layer").pooled,
            TapKind::MeanPool => tape.select_rows(h, &self.class_rows(batch))?,
        };
        Ok(ForwardOutput { feature, taps })
    }

    /// Value-level features `[batch × d]` with deterministic gates.
    pub fn features(&self, x: &Tensor, dropped: Option<&HeadSet>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let mut ctx = ForwardCtx {
            dropped,
            ..Default::default()
        };
        let out = self.forward(&mut tape, &b, x, &mut ctx)?;
        Ok(tape.value(out.feature).clone())
    }

    /// Value-level features and taps.
    pub fn features_and_taps(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let out = self.forward(&mut tape, &b, x, &mut ForwardCtx::default())?;
        let taps = out
            .taps
            .iter()
            .map(|t| tape.value(t.pooled).clone())
            .collect();
        Ok((tape.value(out.feature).clone(), taps))
    }
}

pub(crate) fn proj_key(t: Target) -> &'static str {
    match t {
        Target::Q => "q",
        Target::V => "v",
    }
}

/// Gather samples into a `[batch × T × d]` tensor.
pub fn stack_samples(tokens: &[&Tensor]) -> Result<Tensor> {
    let first = tokens
        .first()
        .ok_or_else(|| Error::invalid("empty batch"))?;
    let sh = first.shape().to_vec();
    let mut data = Vec::with_capacity(tokens.len() * first.len());
    for t in tokens {
        if t.shape() != sh.as_slice() {
            return Err(Error::shape("samples in a batch differ in shape"));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![tokens.len()];
    shape.extend_from_slice(&sh);
    Tensor::new(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            num_heads: 2,
            head_dim: 3,
            num_tokens: 4,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn wrong_token_count_rejected() {
        let m = Model::new(small(), 0).unwrap();
        let x = Tensor::zeros(&[2, 4, 6]);
        assert!(matches!(m.features(&x, None), Err(Error::Shape(_))));
        let x = Tensor::zeros(&[2, 3, 5]);
        assert!(m.features(&x, None).is_err());
    }

    #[test]
    fn zero_everything_is_finite() {
        let mut m = Model::new(small(), 0).unwrap();
        let names: Vec<String> = m.params.iter().map(|p| p.name.clone()).collect();
        for n in names {
            if n.contains("gamma") {
                continue;
            }
            let shape = m.params.value(&n).unwrap().shape().to_vec();
            m.params.set(&n, Tensor::zeros(&shape)).unwrap();
        }
        let f = m.features(&Tensor::zeros(&[3, 3, 6]), None).unwrap();
        assert!(f.is_finite());
    }

    #[test]
    fn taps_cover_every_layer_in_order() {
        let m = Model::new(small(), 1).unwrap();
        let mut tape = Tape::new();
        let b = m.params.bind(&mut tape);
        let mut r = rng::stream(0, "x");
        let x = rng::gaussian(&mut r, &[2, 3, 6], 1.0);
        let out = m
            .forward(&mut tape, &b, &x, &mut ForwardCtx::default())
            .unwrap();
        assert_eq!(out.taps.len(), 2);
        assert!(out.taps.iter().enumerate().all(|(i, t)| t.layer_index == i));
        assert_eq!(tape.shape(out.feature), &[2, 6]);
    }

    #[test]
    fn double_attach_rejected() {
        let m = Model::new(small(), 0)
            .unwrap()
            .with_gates(GateConfig::default())
            .unwrap();
        assert!(m.with_gates(GateConfig::default()).is_err());
    }
}
