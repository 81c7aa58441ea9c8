//! Domain-invariant gating of attention-head outputs.
//!
//! Soft variant: per-layer logits `g_1..g_H` are softmax-normalized and the
//! head features are scaled by `γ·ĝ_h` with `γ = H`, so equal logits reproduce
//! the ungated block exactly. Binary variant: each head keeps or drops its
//! whole output according to a Bernoulli(σ(g_h)) draw made differentiable
//! with a straight-through Gumbel-Softmax relaxation; no `γ`, no softmax.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{ParamGroup, ParamSet};
use crate::rng::{self, SeededRng};
use crate::tape::{sigmoid, Tape, Var};
use crate::tensor::{softmax_lastdim_values, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateVariant {
    Soft,
    GumbelBinary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub variant: GateVariant,
    /// Gumbel-Softmax temperature at the start of training.
    pub temperature: f64,
    /// Linear anneal target for the temperature; `None` keeps it fixed.
    pub anneal_to: Option<f64>,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            variant: GateVariant::Soft,
            temperature: 1.0,
            anneal_to: None,
        }
    }
}

impl GateConfig {
    pub fn binary() -> Self {
        Self {
            variant: GateVariant::GumbelBinary,
            ..Self::default()
        }
    }

    pub fn binary_variant(&self) -> bool {
        self.variant == GateVariant::GumbelBinary
    }

    /// Temperature after `progress ∈ [0, 1]` of training.
    pub fn temperature_at(&self, progress: f64) -> f64 {
        match self.anneal_to {
            Some(end) => self.temperature + (end - self.temperature) * progress.clamp(0.0, 1.0),
            None => self.temperature,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let end = self.anneal_to.unwrap_or(self.temperature);
        if !(self.temperature > 0.0 && end > 0.0) {
            return Err(Error::invalid("gate temperature must be positive"));
        }
        Ok(())
    }
}

pub fn gate_name(layer: usize) -> String {
    alloc::format!("layer{layer}.gate")
}

/// Zero-initialized logits for every layer.
pub fn init_gates(num_layers: usize, heads: usize) -> Result<ParamSet> {
    let mut ps = ParamSet::new();
    for l in 0..num_layers {
        ps.insert(gate_name(l), Tensor::zeros(&[heads]), ParamGroup::Gate)?;
    }
    Ok(ps)
}

/// `γ = H`.
pub fn gamma(heads: usize) -> f64 {
    heads as f64
}

/// `ĝ = softmax(g)`.
pub fn normalize_gates(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("need at least one gate"));
    }
    let t = Tensor::new(&[logits.len()], logits.to_vec())?;
    Ok(softmax_lastdim_values(&t).into_data())
}

/// `f^g = γ [ĝ_1 f_1, …, ĝ_H f_H]` on the tape. `features` is the
/// side-by-side head layout `[R × H·n]`, `logits` a `[H]` node.
pub fn soft_gate(tape: &mut Tape, features: Var, logits: Var) -> Result<Var> {
    let heads = tape.value(logits).len();
    if tape.value(features).cols() % heads != 0 {
        return Err(Error::shape(alloc::format!(
            "{heads} gates for {} feature columns",
            tape.value(features).cols()
        )));
    }
    let g = tape.softmax(logits);
    let w = tape.scale(g, gamma(heads));
    tape.head_scale(features, w)
}

/// Value-level gating of separately held head features `f_h[R × n]`.
pub fn apply_gates(features: &[Tensor], logits: &[f64]) -> Result<Tensor> {
    if features.len() != logits.len() {
        return Err(Error::invalid(alloc::format!(
            "{} head features for {} gates",
            features.len(),
            logits.len()
        )));
    }
    let mut tape = Tape::new();
    let parts: Vec<Var> = features.iter().map(|f| tape.constant(f.clone())).collect();
    let cat = tape.concat_cols(&parts)?;
    let g = tape.constant(Tensor::new(&[logits.len()], logits.to_vec())?);
    let out = soft_gate(&mut tape, cat, g)?;
    Ok(tape.value(out).clone())
}

/// One logistic draw `ln u − ln(1−u)`, the difference of two Gumbel samples.
fn logistic_noise(rng: &mut SeededRng) -> f64 {
    let u = rng::uniform(rng).clamp(1e-300, 1.0 - 1e-16);
    libm::log(u) - libm::log(1.0 - u)
}

/// Straight-through Bernoulli mask. Forward emits hard 0/1 per head (keep iff
/// `g + noise > 0`, i.e. with probability σ(g)); backward flows through the
/// relaxed sample `σ((g + noise)/t)`.
pub fn gumbel_binary_gates(
    tape: &mut Tape,
    logits: Var,
    temperature: f64,
    rng: &mut SeededRng,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(alloc::format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let h = tape.value(logits).len();
    let noise: Vec<f64> = (0..h).map(|_| logistic_noise(rng)).collect();
    let nv = tape.constant(Tensor::new(&[h], noise)?);
    let z = tape.add(logits, nv)?;
    let hard = Tensor::from_fn(&[h], |i| {
        if tape.value(z).data()[i] > 0.0 {
            1.0
        } else {
            0.0
        }
    });
    let zt = tape.scale(z, 1.0 / temperature);
    let soft = tape.sigmoid(zt);
    tape.straight_through(hard, soft)
}

/// Deterministic inference mask of the binary variant: keep iff σ(g) ≥ 1/2,
/// so untrained gates keep every head.
pub fn binary_eval_mask(logits: &[f64]) -> Vec<f64> {
    logits
        .iter()
        .map(|&g| if g >= 0.0 { 1.0 } else { 0.0 })
        .collect()
}

/// Retention probabilities σ(g) of the binary variant.
pub fn retention_probabilities(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&g| sigmoid(g)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRow {
    pub layer: usize,
    pub head: usize,
    pub raw_logit: f64,
    pub normalized_weight: f64,
    pub gamma_scaled_weight: f64,
}

/// Per-(layer, head) gate values for export.
pub fn gate_report(params: &ParamSet, num_layers: usize) -> Result<Vec<GateRow>> {
    let mut rows = Vec::new();
    for l in 0..num_layers {
        let logits = params.value(&gate_name(l))?.data();
        let norm = normalize_gates(logits)?;
        let gam = gamma(logits.len());
        for (h, (&g, &w)) in logits.iter().zip(&norm).enumerate() {
            rows.push(GateRow {
                layer: l,
                head: h,
                raw_logit: g,
                normalized_weight: w,
                gamma_scaled_weight: gam * w,
            });
        }
    }
    Ok(rows)
}

/// Largest max-minus-min of the γ-scaled weights over layers.
pub fn max_gate_gap(rows: &[GateRow]) -> f64 {
    let layers = rows.iter().map(|r| r.layer + 1).max().unwrap_or(0);
    (0..layers)
        .map(|l| {
            let w = rows
                .iter()
                .filter(|r| r.layer == l)
                .map(|r| r.gamma_scaled_weight);
            let (lo, hi) = w.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            });
            hi - lo
        })
        .fold(0.0, f64::max)
}

/// Constant 0/1 per-head mask as a `[H]` tensor.
pub fn mask_tensor(mask: &[f64]) -> Tensor {
    Tensor::new(&[mask.len()], mask.to_vec()).unwrap_or_else(|_| Tensor::zeros(&[1]))
}
