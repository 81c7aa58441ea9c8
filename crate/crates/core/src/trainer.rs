//! Routed training of LoRA factors (θ1) and head gates (θ2).
//!
//! The classification loss always reaches both groups. The α-weighted MMD
//! term reaches only the groups selected by [`MmdUpdates`]; both losses are
//! differentiated separately from one forward pass and summed per group.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dig::GateConfig;
use crate::domainsynth::{stratified_batches, DomainDataset, Split};
use crate::encoder::{EncoderConfig, ForwardCtx, Model};
use crate::error::{Error, Result};
use crate::halora::LoraConfig;
use crate::losses::{self, BandwidthRule, ClassAnchors};
use crate::optim::{cosine_lr, AdamWConfig, OptimizerState};
use crate::param::{GradMap, ParamGroup};
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Joint,
    Alternative,
    TwoStageTaskThenDomain,
    TwoStageDomainThenTask,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Joint,
        Strategy::Alternative,
        Strategy::TwoStageTaskThenDomain,
        Strategy::TwoStageDomainThenTask,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Joint => "joint",
            Strategy::Alternative => "alternative",
            Strategy::TwoStageTaskThenDomain => "two_stage_task_then_domain",
            Strategy::TwoStageDomainThenTask => "two_stage_domain_then_task",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Unknown(alloc::format!("training strategy {s:?}")))
    }

    /// Whether (θ1, θ2) train during `epoch` of `epochs`. Alternative starts
    /// with θ1; two-stage modes switch after `epochs / 2`.
    pub fn active(self, epoch: usize, epochs: usize) -> (bool, bool) {
        let first_half = epoch < epochs / 2;
        match self {
            Strategy::Joint => (true, true),
            Strategy::Alternative => (epoch % 2 == 0, epoch % 2 == 1),
            Strategy::TwoStageTaskThenDomain => (first_half, !first_half),
            Strategy::TwoStageDomainThenTask => (!first_half, first_half),
        }
    }
}

/// Which groups receive the α·L_MMD gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmdUpdates {
    Neither,
    Halora,
    HaloraAndDig,
    Dig,
}

impl MmdUpdates {
    pub const ALL: [MmdUpdates; 4] = [
        MmdUpdates::Neither,
        MmdUpdates::Halora,
        MmdUpdates::HaloraAndDig,
        MmdUpdates::Dig,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MmdUpdates::Neither => "neither",
            MmdUpdates::Halora => "halora",
            MmdUpdates::HaloraAndDig => "halora_and_dig",
            MmdUpdates::Dig => "dig",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Unknown(alloc::format!("MMD routing {s:?}")))
    }

    pub fn to_halora(self) -> bool {
        matches!(self, MmdUpdates::Halora | MmdUpdates::HaloraAndDig)
    }

    pub fn to_gates(self) -> bool {
        matches!(self, MmdUpdates::Dig | MmdUpdates::HaloraAndDig)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lr_halora: f64,
    pub lr_gate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: Schedule,
    pub strategy: Strategy,
    pub mmd_updates: MmdUpdates,
    pub seed: u64,
    /// Decoupled weight decay on θ1.
    pub weight_decay: f64,
    /// Decoupled weight decay on θ2.
    pub gate_weight_decay: f64,
    pub adam: AdamWConfig,
    pub temperature: f64,
    pub bandwidth: BandwidthRule,
    /// Evaluate on the held-out domain every this many epochs (0: only at the end).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            lr_halora: 5e-5,
            lr_gate: 1e-3,
            batch_size: 36,
            epochs: 40,
            schedule: Schedule::Cosine,
            strategy: Strategy::Joint,
            mmd_updates: MmdUpdates::Dig,
            seed: 0,
            weight_decay: 0.01,
            gate_weight_decay: 0.0,
            adam: AdamWConfig::default(),
            temperature: 0.01,
            bandwidth: BandwidthRule::default(),
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    /// Settings that make a few epochs on the synthetic benchmark move the
    /// adapters and gates far enough to compare configurations.
    pub fn desk_scale() -> Self {
        Self {
            lr_halora: 2e-2,
            lr_gate: 1e-1,
            epochs: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid("alpha must be a nonnegative real"));
        }
        if !(self.lr_halora >= 0.0 && self.lr_gate >= 0.0) {
            return Err(Error::invalid("learning rates must be nonnegative"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch_size and epochs must be positive"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid(
                "classification temperature must be positive",
            ));
        }
        Ok(())
    }

    pub fn mmd_active(&self) -> bool {
        self.alpha > 0.0 && self.mmd_updates != MmdUpdates::Neither
    }

    fn lr(&self, base: f64, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Cosine => cosine_lr(base, step, total),
            Schedule::Constant => base,
        }
    }
}

/// Backbone plus which adaptation modules are attached.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub encoder: EncoderConfig,
    pub lora: Option<LoraConfig>,
    pub gates: Option<GateConfig>,
}

impl ModelSpec {
    pub fn build(&self, seed: u64) -> Result<Model> {
        let mut m = Model::new(self.encoder.clone(), seed)?;
        if let Some(l) = &self.lora {
            m = m.with_lora(l.clone(), seed)?;
        }
        if let Some(g) = &self.gates {
            m = m.with_gates(g.clone())?;
        }
        Ok(m)
    }
}

/// Gradients for one batch plus the loss values that produced them.
#[derive(Debug, Clone)]
pub struct Routed {
    pub grads: GradMap,
    pub l_cls: f64,
    pub l_mmd: Option<f64>,
}

/// Per-call routing inputs.
pub struct RouteCtx<'a> {
    pub halora: bool,
    pub gates: bool,
    pub gumbel: Option<(&'a mut rng::SeededRng, f64)>,
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(alloc::format!("{what} evaluated to {v}")))
    }
}

/// One forward pass, then ∂L_cls over every active group and ∂(α·L_MMD) over
/// the active groups that the routing admits, summed per parameter.
#[allow(clippy::too_many_arguments)]
pub fn routed_gradients(
    model: &Model,
    anchors: &ClassAnchors,
    cfg: &TrainConfig,
    x: &Tensor,
    labels: &[usize],
    domains: &[usize],
    ctx: RouteCtx<'_>,
) -> Result<Routed> {
    let names = |g: ParamGroup| -> Vec<String> { model.trainable_names(g) };
    let theta1 = if ctx.halora {
        names(ParamGroup::Halora)
    } else {
        Vec::new()
    };
    let theta2 = if ctx.gates {
        names(ParamGroup::Gate)
    } else {
        Vec::new()
    };
    let mut routed: Vec<&str> = Vec::new();
    if cfg.mmd_updates.to_halora() {
        routed.extend(theta1.iter().map(String::as_str));
    }
    if cfg.mmd_updates.to_gates() {
        routed.extend(theta2.iter().map(String::as_str));
    }
    // With nothing to receive its gradient the MMD term is skipped entirely.
    let mmd_on = cfg.mmd_active() && !routed.is_empty();
    if mmd_on && losses::partition_by_domain(domains).len() < 2 {
        return Err(Error::invalid(
            "MMD term is active but the batch holds a single domain",
        ));
    }

    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape);
    let mut fctx = ForwardCtx {
        gumbel: ctx.gumbel,
        ..Default::default()
    };
    let out = model.forward(&mut tape, &b, x, &mut fctx)?;
    let cls = losses::cls_loss(&mut tape, out.feature, labels, anchors)?;
    let l_cls = finite(tape.value(cls).item(), "L_cls")?;

    let all: Vec<&str> = theta1.iter().chain(&theta2).map(String::as_str).collect();
    let mut grads = crate::param::reverse_grad(&tape, cls, &model.params, &b, &all)?;

    let mut l_mmd = None;
    if mmd_on {
        let taps: Vec<_> = out.taps.iter().map(|t| t.pooled).collect();
        let mmd = losses::mmd_layered(&mut tape, &taps, domains, &cfg.bandwidth)?;
        l_mmd = Some(finite(tape.value(mmd).item(), "L_MMD")?);
        let gm = crate::param::reverse_grad(&tape, mmd, &model.params, &b, &routed)?;
        for (name, g) in gm {
            let acc = grads.get_mut(&name).expect("routed names are a subset");
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += cfg.alpha * v;
            }
        }
    }
    for (name, g) in &grads {
        if !g.is_finite() {
            return Err(Error::NonFinite(alloc::format!("gradient of {name}")));
        }
    }
    Ok(Routed {
        grads,
        l_cls,
        l_mmd,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_cls: f64,
    pub l_mmd: Option<f64>,
    pub lr_halora: f64,
    pub lr_gate: f64,
    pub grad_norm_halora: f64,
    pub grad_norm_gate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_mmd: Option<f64>,
    pub eval_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Step(StepRecord),
    Epoch(EpochRecord),
}

/// Counters that, with the parameters and optimizer moments, fully determine
/// how training continues.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub step: usize,
    pub halora_steps: usize,
    pub gate_steps: usize,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub anchors: ClassAnchors,
    pub config: TrainConfig,
    pub optim: OptimizerState,
    pub progress: Progress,
}

/// Accuracy of zero-shot prediction over `idx`, in chunks.
pub fn evaluate(
    model: &Model,
    anchors: &ClassAnchors,
    ds: &DomainDataset,
    idx: &[usize],
) -> Result<f64> {
    evaluate_dropped(model, anchors, ds, idx, None)
}

pub fn evaluate_dropped(
    model: &Model,
    anchors: &ClassAnchors,
    ds: &DomainDataset,
    idx: &[usize],
    dropped: Option<&crate::encoder::HeadSet>,
) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let mut hits = 0usize;
    for chunk in idx.chunks(256) {
        let (x, labels, _) = ds.batch(chunk)?;
        let f = model.features(&x, dropped)?;
        let pred = losses::predict_batch(&f, anchors)?;
        hits += pred.iter().zip(&labels).filter(|(p, y)| p == y).count();
    }
    Ok(hits as f64 / idx.len() as f64)
}

fn group_norm(grads: &GradMap, model: &Model, group: ParamGroup) -> f64 {
    let s: f64 = grads
        .iter()
        .filter(|(n, _)| {
            model
                .params
                .get(n)
                .map(|p| p.group == group)
                .unwrap_or(false)
        })
        .flat_map(|(_, g)| g.data().iter().map(|v| v * v))
        .sum();
    libm::sqrt(s)
}

impl Trainer {
    pub fn new(model: Model, anchors: ClassAnchors, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if anchors.dim() != model.config.model_dim() {
            return Err(Error::shape("class anchors and model width differ"));
        }
        let optim = OptimizerState::new(config.adam);
        Ok(Self {
            model,
            anchors,
            config,
            optim,
            progress: Progress::default(),
        })
    }

    fn has_group(&self, g: ParamGroup) -> bool {
        self.model.params.iter().any(|p| p.group == g)
    }

    /// Active steps each group will take over the whole run.
    fn group_totals(&self, per_epoch: usize) -> (usize, usize) {
        let e = self.config.epochs;
        let (mut a, mut b) = (0, 0);
        for ep in 0..e {
            let (x, y) = self.config.strategy.active(ep, e);
            a += usize::from(x) * per_epoch;
            b += usize::from(y) * per_epoch;
        }
        (a, b)
    }

    /// One routed update on a prepared batch.
    pub fn train_step(
        &mut self,
        x: &Tensor,
        labels: &[usize],
        domains: &[usize],
        active: (bool, bool),
        totals: (usize, usize),
    ) -> Result<StepRecord> {
        let cfg = &self.config;
        let halora = active.0 && self.has_group(ParamGroup::Halora);
        let gates = active.1 && self.has_group(ParamGroup::Gate);
        let binary = self.model.gates.as_ref().filter(|g| g.binary_variant());
        let mut grng = rng::stream(cfg.seed, &alloc::format!("gumbel/{}", self.progress.step));
        let gumbel = binary.map(|g| {
            let prog = self.progress.step as f64 / (totals.0.max(totals.1).max(1)) as f64;
            (&mut grng, g.temperature_at(prog))
        });
        let routed = routed_gradients(
            &self.model,
            &self.anchors,
            cfg,
            x,
            labels,
            domains,
            RouteCtx {
                halora,
                gates,
                gumbel,
            },
        )?;
        let lr_h = cfg.lr(cfg.lr_halora, self.progress.halora_steps, totals.0);
        let lr_g = cfg.lr(cfg.lr_gate, self.progress.gate_steps, totals.1);
        let rec = StepRecord {
            step: self.progress.step,
            epoch: self.progress.epoch,
            l_cls: routed.l_cls,
            l_mmd: routed.l_mmd,
            lr_halora: if halora { lr_h } else { 0.0 },
            lr_gate: if gates { lr_g } else { 0.0 },
            grad_norm_halora: group_norm(&routed.grads, &self.model, ParamGroup::Halora),
            grad_norm_gate: group_norm(&routed.grads, &self.model, ParamGroup::Gate),
        };
        let (mut g1, mut g2) = (GradMap::new(), GradMap::new());
        for (name, g) in routed.grads {
            match self.model.params.get(&name)?.group {
                ParamGroup::Halora => g1.insert(name, g),
                _ => g2.insert(name, g),
            };
        }
        self.optim
            .apply(&mut self.model.params, &g1, lr_h, cfg.weight_decay)?;
        self.optim
            .apply(&mut self.model.params, &g2, lr_g, cfg.gate_weight_decay)?;
        self.progress.step += 1;
        self.progress.halora_steps += usize::from(halora);
        self.progress.gate_steps += usize::from(gates);
        Ok(rec)
    }

    /// One epoch of stratified batches from `split.train`. Calls `sink` for
    /// every step record and the closing epoch record.
    pub fn run_epoch(
        &mut self,
        ds: &DomainDataset,
        split: &Split,
        sink: &mut dyn FnMut(&Record),
    ) -> Result<EpochRecord> {
        let epoch = self.progress.epoch;
        let mut brng = rng::stream(self.config.seed, &alloc::format!("batches/{epoch}"));
        let batches = stratified_batches(ds, &split.train, self.config.batch_size, &mut brng)?;
        let totals = self.group_totals(batches.len());
        let active = self.config.strategy.active(epoch, self.config.epochs);
        let trainable = (active.0 && self.has_group(ParamGroup::Halora))
            || (active.1 && self.has_group(ParamGroup::Gate));
        let (mut cls_sum, mut mmd_sum, mut n) = (0.0, 0.0, 0usize);
        let mut any_mmd = false;
        if trainable {
            for batch in &batches {
                let (x, labels, domains) = ds.batch(batch)?;
                let rec = self.train_step(&x, &labels, &domains, active, totals)?;
                cls_sum += rec.l_cls;
                if let Some(m) = rec.l_mmd {
                    mmd_sum += m;
                    any_mmd = true;
                }
                n += 1;
                sink(&Record::Step(rec));
            }
        }
        self.progress.epoch += 1;
        let last = self.progress.epoch == self.config.epochs;
        let scheduled =
            self.config.eval_every > 0 && self.progress.epoch % self.config.eval_every == 0;
        let eval_accuracy = if (last || scheduled) && !split.test.is_empty() {
            Some(evaluate(&self.model, &self.anchors, ds, &split.test)?)
        } else {
            None
        };
        let rec = EpochRecord {
            epoch,
            l_cls: if n > 0 { cls_sum / n as f64 } else { 0.0 },
            l_mmd: any_mmd.then(|| mmd_sum / n as f64),
            eval_accuracy,
        };
        sink(&Record::Epoch(rec.clone()));
        Ok(rec)
    }

    /// Train the remaining epochs.
    pub fn run(
        &mut self,
        ds: &DomainDataset,
        split: &Split,
        sink: &mut dyn FnMut(&Record),
    ) -> Result<()> {
        while self.progress.epoch < self.config.epochs {
            self.run_epoch(ds, split, sink)?;
        }
        Ok(())
    }
}

/// Outcome of one leave-one-domain-out run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub target: usize,
    pub accuracy: f64,
    pub model: Model,
    pub history: Vec<Record>,
}

/// Build the model and anchors from `seed`, train on the sources of `split`,
/// and score the held-out target.
pub fn train_run(
    ds: &DomainDataset,
    split: &Split,
    spec: &ModelSpec,
    config: &TrainConfig,
) -> Result<RunOutcome> {
    let model = spec.build(config.seed)?;
    let anchors = ClassAnchors::random(
        ds.spec.num_classes,
        spec.encoder.model_dim(),
        config.temperature,
        config.seed,
    )?;
    let mut t = Trainer::new(model, anchors, config.clone())?;
    let mut history = Vec::new();
    t.run(ds, split, &mut |r| history.push(r.clone()))?;
    let accuracy = evaluate(&t.model, &t.anchors, ds, &split.test)?;
    Ok(RunOutcome {
        target: split.target,
        accuracy,
        model: t.model,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_schedule() {
        assert_eq!(Strategy::TwoStageTaskThenDomain.active(0, 4), (true, false));
        assert_eq!(Strategy::TwoStageTaskThenDomain.active(2, 4), (false, true));
        assert_eq!(Strategy::TwoStageDomainThenTask.active(1, 4), (false, true));
        assert_eq!(Strategy::Alternative.active(3, 4), (false, true));
        assert!(Strategy::parse("sideways").is_err());
        assert_eq!(
            MmdUpdates::parse("halora_and_dig").unwrap(),
            MmdUpdates::HaloraAndDig
        );
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.alpha, c.lr_halora, c.lr_gate, c.batch_size, c.epochs),
            (0.2, 5e-5, 1e-3, 36, 40)
        );
        assert_eq!(c.mmd_updates, MmdUpdates::Dig);
    }
}
