//! Low-rank adaptation of the query and value projections.
//!
//! For a projection `W[d_out × d_in]` split into per-head row blocks
//! `W_h[n × d_in]`, the conventional form adds `A B` with a single shared
//! down-projection `B[r × d_in]`, so block `h` of the delta is `A_h B`. The
//! head-aware form gives every head its own `B_h`, making block `h` equal to
//! `A_h B_h` and nothing else. Updating one head's factors therefore cannot
//! move another head's rows.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{Binding, ParamGroup, ParamSet};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraMode {
    Conventional,
    HeadAware,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Target {
    Q,
    V,
}

impl Target {
    pub fn as_str(self) -> &'static str {
        match self {
            Target::Q => "Q",
            Target::V => "V",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub mode: LoraMode,
    pub targets: Vec<Target>,
    /// One rank per encoder layer. Empty means the default schedule:
    /// rank 2 everywhere except rank 8 on the last two layers.
    pub rank_per_layer: Vec<usize>,
    /// Std of the up-projection `A` at init. Zero keeps the delta at exactly 0.
    pub a_init_std: f64,
    /// Std of the down-projection `B` at init.
    pub b_init_std: f64,
    /// Multiplier on the branch output. 1.0 means plain `We + ABe`.
    pub scale: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            mode: LoraMode::HeadAware,
            targets: vec![Target::Q, Target::V],
            rank_per_layer: Vec::new(),
            a_init_std: 0.0,
            b_init_std: 0.02,
            scale: 1.0,
        }
    }
}

impl LoraConfig {
    pub fn conventional() -> Self {
        Self {
            mode: LoraMode::Conventional,
            ..Self::default()
        }
    }

    pub fn rank(&self, layer: usize, num_layers: usize) -> usize {
        if let Some(&r) = self.rank_per_layer.get(layer) {
            return r;
        }
        if layer + 2 >= num_layers {
            8
        } else {
            2
        }
    }

    pub fn validate(&self, num_layers: usize, heads: usize, head_dim: usize) -> Result<()> {
        let d = heads * head_dim;
        if !self.rank_per_layer.is_empty() && self.rank_per_layer.len() != num_layers {
            return Err(Error::invalid(alloc::format!(
                "rank_per_layer has {} entries for {num_layers} layers",
                self.rank_per_layer.len()
            )));
        }
        if self.targets.is_empty() {
            return Err(Error::invalid("LoRA needs at least one target"));
        }
        let cap = match self.mode {
            LoraMode::HeadAware => head_dim.min(d),
            LoraMode::Conventional => d,
        };
        for l in 0..num_layers {
            let r = self.rank(l, num_layers);
            if r == 0 || r > cap {
                return Err(Error::invalid(alloc::format!(
                    "layer {l}: rank {r} outside [1, {cap}] for {:?} mode",
                    self.mode
                )));
            }
        }
        if !(self.scale.is_finite() && self.a_init_std >= 0.0 && self.b_init_std >= 0.0) {
            return Err(Error::invalid(
                "LoRA init/scale must be finite and nonnegative",
            ));
        }
        Ok(())
    }
}

/// Shapes and names of the factors for one encoder geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayout {
    pub config: LoraConfig,
    pub num_layers: usize,
    pub heads: usize,
    pub head_dim: usize,
}

pub fn factor_name(layer: usize, target: Target, head: Option<usize>, which: &str) -> String {
    match head {
        Some(h) => alloc::format!("layer{layer}.{}.head{h}.{which}", target.as_str()),
        None => alloc::format!("layer{layer}.{}.{which}", target.as_str()),
    }
}

impl LoraLayout {
    pub fn new(
        config: LoraConfig,
        num_layers: usize,
        heads: usize,
        head_dim: usize,
    ) -> Result<Self> {
        config.validate(num_layers, heads, head_dim)?;
        Ok(Self {
            config,
            num_layers,
            heads,
            head_dim,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn targets(&self, layer: usize, target: Target) -> Result<()> {
        if layer >= self.num_layers || !self.config.targets.contains(&target) {
            return Err(Error::Unknown(alloc::format!(
                "LoRA slot layer {layer} target {target:?}"
            )));
        }
        Ok(())
    }

    /// Fresh factors: `A` from `a_init_std` (zero by default), `B` Gaussian.
    pub fn init(&self, seed: u64) -> Result<ParamSet> {
        let mut ps = ParamSet::new();
        let d = self.model_dim();
        let mut rng = rng::stream(seed, "lora-init");
        for l in 0..self.num_layers {
            let r = self.config.rank(l, self.num_layers);
            for &t in &self.config.targets {
                match self.config.mode {
                    LoraMode::HeadAware => {
                        for h in 0..self.heads {
                            let a = rng::gaussian(
                                &mut rng,
                                &[self.head_dim, r],
                                self.config.a_init_std,
                            );
                            let b = rng::gaussian(&mut rng, &[r, d], self.config.b_init_std);
                            ps.insert(factor_name(l, t, Some(h), "A"), a, ParamGroup::Halora)?;
                            ps.insert(factor_name(l, t, Some(h), "B"), b, ParamGroup::Halora)?;
                        }
                    }
                    LoraMode::Conventional => {
                        let a = rng::gaussian(&mut rng, &[d, r], self.config.a_init_std);
                        let b = rng::gaussian(&mut rng, &[r, d], self.config.b_init_std);
                        ps.insert(factor_name(l, t, None, "A"), a, ParamGroup::Halora)?;
                        ps.insert(factor_name(l, t, None, "B"), b, ParamGroup::Halora)?;
                    }
                }
            }
        }
        Ok(ps)
    }

    /// Trainable value count for one (layer, target) slot.
    pub fn slot_param_count(&self, layer: usize) -> usize {
        let r = self.config.rank(layer, self.num_layers);
        let d = self.model_dim();
        match self.config.mode {
            LoraMode::HeadAware => self.heads * r * (self.head_dim + d),
            LoraMode::Conventional => r * (d + d),
        }
    }

    /// `ΔW[d × d]` for a slot. Head-aware: row block `h` is `A_h B_h`.
    /// Conventional: `A B`.
    pub fn delta_weight(&self, params: &ParamSet, layer: usize, target: Target) -> Result<Tensor> {
        self.targets(layer, target)?;
        let d = self.model_dim();
        let delta = match self.config.mode {
            LoraMode::HeadAware => {
                let mut data = Vec::with_capacity(d * d);
                for h in 0..self.heads {
                    let a = params.value(&factor_name(layer, target, Some(h), "A"))?;
                    let b = params.value(&factor_name(layer, target, Some(h), "B"))?;
                    data.extend_from_slice(a.matmul(b)?.data());
                }
                Tensor::new(&[d, d], data)?
            }
            LoraMode::Conventional => {
                let a = params.value(&factor_name(layer, target, None, "A"))?;
                let b = params.value(&factor_name(layer, target, None, "B"))?;
                a.matmul(b)?
            }
        };
        Ok(delta.scale(self.config.scale))
    }

    /// `W + ΔW`: the plain projection that replaces the branch at inference.
    pub fn merge(
        &self,
        w: &Tensor,
        params: &ParamSet,
        layer: usize,
        target: Target,
    ) -> Result<Tensor> {
        w.add(&self.delta_weight(params, layer, target)?)
    }

    /// Branch output `ΔW e` on the tape, computed factor by factor as
    /// `A_h (B_h e)` without materializing `ΔW`. Input `x` is `[R × d]`.
    pub fn branch(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        binding: &Binding,
        layer: usize,
        target: Target,
        x: Var,
    ) -> Result<Var> {
        self.targets(layer, target)?;
        let out = match self.config.mode {
            LoraMode::HeadAware => {
                let mut parts = Vec::with_capacity(self.heads);
                for h in 0..self.heads {
                    let a = binding.var(params.id(&factor_name(layer, target, Some(h), "A"))?);
                    let b = binding.var(params.id(&factor_name(layer, target, Some(h), "B"))?);
                    let down = tape.linear(x, b)?; // [R × r]
                    let up = tape.linear(down, a)?; // [R × n]
                    parts.push(up);
                }
                tape.concat_cols(&parts)?
            }
            LoraMode::Conventional => {
                let a = binding.var(params.id(&factor_name(layer, target, None, "A"))?);
                let b = binding.var(params.id(&factor_name(layer, target, None, "B"))?);
                let down = tape.linear(x, b)?;
                tape.linear(down, a)?
            }
        };
        if self.config.scale == 1.0 {
            Ok(out)
        } else {
            Ok(tape.scale(out, self.config.scale))
        }
    }

    /// Branch-form projection `o = W e + A B e` for row-stacked inputs
    /// `e[R × d]` (value level).
    pub fn adapted_forward(
        &self,
        w: &Tensor,
        params: &ParamSet,
        layer: usize,
        target: Target,
        e: &Tensor,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape);
        let x = tape.constant(e.clone());
        let wv = tape.constant(w.clone());
        let base = tape.linear(x, wv)?;
        let br = self.branch(&mut tape, params, &binding, layer, target, x)?;
        let o = tape.add(base, br)?;
        Ok(tape.value(o).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(mode: LoraMode, heads: usize, n: usize, r: usize) -> LoraLayout {
        let cfg = LoraConfig {
            mode,
            rank_per_layer: vec![r],
            ..LoraConfig::default()
        };
        LoraLayout::new(cfg, 1, heads, n).unwrap()
    }

    #[test]
    fn zero_init_delta_is_zero() {
        let lay = LoraLayout::new(LoraConfig::default(), 4, 4, 8).unwrap();
        let ps = lay.init(3).unwrap();
        for l in 0..4 {
            for t in [Target::Q, Target::V] {
                assert!(lay
                    .delta_weight(&ps, l, t)
                    .unwrap()
                    .data()
                    .iter()
                    .all(|&v| v == 0.0));
            }
        }
        assert!(ps.iter().all(|p| p.group == ParamGroup::Halora));
    }

    #[test]
    fn hand_block_delta() {
        let lay = layout(LoraMode::HeadAware, 2, 1, 1);
        let mut ps = lay.init(0).unwrap();
        ps.set("layer0.Q.head0.A", Tensor::new(&[1, 1], vec![2.0]).unwrap())
            .unwrap();
        ps.set(
            "layer0.Q.head0.B",
            Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap(),
        )
        .unwrap();
        ps.set("layer0.Q.head1.A", Tensor::new(&[1, 1], vec![3.0]).unwrap())
            .unwrap();
        ps.set(
            "layer0.Q.head1.B",
            Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap(),
        )
        .unwrap();
        let dw = lay.delta_weight(&ps, 0, Target::Q).unwrap();
        assert_eq!(dw.data(), &[2.0, 0.0, 0.0, 3.0]);
    }

    #[test]
    fn hand_branch_forward() {
        // d=2, r=1, W=I, A=[[1],[0]], B=[[0,1]], e=[3,4] -> o=[7,4]
        let lay = layout(LoraMode::Conventional, 1, 2, 1);
        let mut ps = lay.init(0).unwrap();
        ps.set("layer0.V.A", Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap())
            .unwrap();
        ps.set("layer0.V.B", Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap())
            .unwrap();
        let e = Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap();
        let o = lay
            .adapted_forward(&Tensor::eye(2), &ps, 0, Target::V, &e)
            .unwrap();
        assert_eq!(o.data(), &[7.0, 4.0]);
    }

    #[test]
    fn zeroed_factors_give_plain_projection() {
        let lay = layout(LoraMode::HeadAware, 2, 2, 1);
        let ps = lay.init(9).unwrap();
        let mut r = rng::stream(1, "t");
        let w = rng::gaussian(&mut r, &[4, 4], 1.0);
        let e = rng::gaussian(&mut r, &[3, 4], 1.0);
        let o = lay.adapted_forward(&w, &ps, 0, Target::Q, &e).unwrap();
        let plain = e.matmul(&w.transpose().unwrap()).unwrap();
        assert_eq!(o, plain);
        assert_eq!(lay.merge(&w, &ps, 0, Target::Q).unwrap(), w);
    }

    #[test]
    fn unknown_slot_rejected() {
        let cfg = LoraConfig {
            targets: vec![Target::V],
            rank_per_layer: vec![1],
            ..LoraConfig::default()
        };
        let lay = LoraLayout::new(cfg, 1, 2, 2).unwrap();
        let ps = lay.init(0).unwrap();
        assert!(matches!(
            lay.delta_weight(&ps, 0, Target::Q),
            Err(Error::Unknown(_))
        ));
        assert!(matches!(
            lay.delta_weight(&ps, 3, Target::V),
            Err(Error::Unknown(_))
        ));
    }

    #[test]
    fn rank_validation() {
        let bad = LoraConfig {
            rank_per_layer: vec![9],
            ..LoraConfig::default()
        };
        assert!(LoraLayout::new(bad, 1, 4, 8).is_err());
        let default_ranks: Vec<usize> = (0..4).map(|l| LoraConfig::default().rank(l, 4)).collect();
        assert_eq!(default_ranks, vec![2, 2, 8, 8]);
    }

    #[test]
    fn parameter_counts() {
        let ha = LoraLayout::new(LoraConfig::default(), 4, 4, 8).unwrap();
        let ps = ha.init(0).unwrap();
        let per_target: usize = (0..4).map(|l| ha.slot_param_count(l)).sum();
        assert_eq!(ps.total_values(ParamGroup::Halora), 2 * per_target);
        assert_eq!(ha.slot_param_count(0), 4 * 2 * (8 + 32));
        let conv = LoraLayout::new(LoraConfig::conventional(), 4, 4, 8).unwrap();
        assert_eq!(conv.slot_param_count(3), 8 * (32 + 32));
        let cps = conv.init(0).unwrap();
        let per_target: usize = (0..4).map(|l| conv.slot_param_count(l)).sum();
        assert_eq!(cps.total_values(ParamGroup::Halora), 2 * per_target);
    }
}
