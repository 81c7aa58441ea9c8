//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use alloc::collections::BTreeMap;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{GradMap, ParamGroup, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

/// Per-parameter moment accumulators. Frozen parameters never get an entry.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub moments: BTreeMap<String, Moments>,
}

/// One AdamW update of a single value. Public so tests can replay it.
pub fn adamw_scalar(
    p: f64,
    g: f64,
    m: f64,
    v: f64,
    step: u64,
    lr: f64,
    weight_decay: f64,
    c: &AdamWConfig,
) -> (f64, f64, f64) {
    let m = c.beta1 * m + (1.0 - c.beta1) * g;
    let v = c.beta2 * v + (1.0 - c.beta2) * g * g;
    let t = step as f64;
    let mhat = m / (1.0 - libm::pow(c.beta1, t));
    let vhat = v / (1.0 - libm::pow(c.beta2, t));
    let p = p - lr * weight_decay * p;
    let p = p - lr * mhat / (libm::sqrt(vhat) + c.eps);
    (p, m, v)
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            moments: BTreeMap::new(),
        }
    }

    /// Apply `grads` to the parameters named in it. Every name must belong to
    /// a trainable group; its moments are created on first use.
    pub fn apply(
        &mut self,
        params: &mut ParamSet,
        grads: &GradMap,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            let id = params.id(name)?;
            if params.by_id(id).group == ParamGroup::Frozen {
                return Err(Error::invalid(alloc::format!(
                    "refusing to update frozen parameter {name}"
                )));
            }
            let value = params.value_mut_by_id(id);
            if value.shape() != g.shape() {
                return Err(Error::shape(alloc::format!(
                    "gradient for {name} has the wrong shape"
                )));
            }
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
                step: 0,
            });
            mom.step += 1;
            let step = mom.step;
            let (pd, md, vd) = (value.data_mut(), mom.m.data_mut(), mom.v.data_mut());
            for i in 0..pd.len() {
                let (p, m, v) = adamw_scalar(
                    pd[i],
                    g.data()[i],
                    md[i],
                    vd[i],
                    step,
                    lr,
                    weight_decay,
                    &self.config,
                );
                pd[i] = p;
                md[i] = m;
                vd[i] = v;
            }
        }
        Ok(())
    }
}

/// `base · ½(1 + cos(π·step/total))` for `step` in `[0, total)`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = step.min(total) as f64 / total as f64;
    base * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * frac))
}
