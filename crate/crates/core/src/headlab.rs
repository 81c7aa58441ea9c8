//! Head-importance rankings and accuracy-versus-heads-dropped curves.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dig::{self, GateConfig};
use crate::domainsynth::{stratified_batches, DomainDataset};
use crate::encoder::{ForwardCtx, HeadSet, Model};
use crate::error::{Error, Result};
use crate::halora::LoraConfig;
use crate::losses::{self, ClassAnchors, KernelSpec};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::param::{GradMap, ParamGroup, ParamSet};
use crate::rng::{self, SeededRng};
use crate::tape::Tape;
use crate::trainer::{evaluate_dropped, routed_gradients, MmdUpdates, RouteCtx, TrainConfig};

pub type Head = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropStrategy {
    Random,
    MmdRank,
    CvBernoulli,
    AdaptAndDrop,
}

impl DropStrategy {
    pub const ALL: [DropStrategy; 4] = [
        DropStrategy::Random,
        DropStrategy::MmdRank,
        DropStrategy::CvBernoulli,
        DropStrategy::AdaptAndDrop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DropStrategy::Random => "random",
            DropStrategy::MmdRank => "mmd_rank",
            DropStrategy::CvBernoulli => "cv_bernoulli",
            DropStrategy::AdaptAndDrop => "adapt_and_drop",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Unknown(alloc::format!("drop strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DropPlan {
    pub strategy: DropStrategy,
    pub drop_counts: Vec<usize>,
    pub repeats: usize,
}

impl Default for DropPlan {
    fn default() -> Self {
        Self {
            strategy: DropStrategy::Random,
            drop_counts: alloc::vec![0, 2, 4, 6, 8, 10, 12],
            repeats: 3,
        }
    }
}

impl DropPlan {
    pub fn validate(&self, total_heads: usize) -> Result<()> {
        if self.drop_counts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("drop counts must be strictly increasing"));
        }
        if self.drop_counts.iter().any(|&k| k >= total_heads) {
            return Err(Error::invalid(alloc::format!(
                "drop counts must stay below {total_heads} heads"
            )));
        }
        if self.repeats == 0 {
            return Err(Error::invalid("repeats must be positive"));
        }
        Ok(())
    }
}

/// A model evaluated with some heads zeroed before the output projection.
#[derive(Debug, Clone, Copy)]
pub struct DroppedView<'a> {
    pub model: &'a Model,
    pub heads: &'a HeadSet,
}

/// Check `heads` against the model and wrap it. Emptying a whole layer is
/// rejected.
pub fn drop_heads<'a>(model: &'a Model, heads: &'a HeadSet) -> Result<DroppedView<'a>> {
    let (l, h) = (model.config.num_layers, model.config.num_heads);
    for &(layer, head) in heads {
        if layer >= l || head >= h {
            return Err(Error::invalid(alloc::format!(
                "head ({layer}, {head}) outside a {l}×{h} model"
            )));
        }
    }
    for layer in 0..l {
        if heads.iter().filter(|(x, _)| *x == layer).count() == h {
            return Err(Error::invalid(alloc::format!(
                "dropping every head of layer {layer}"
            )));
        }
    }
    Ok(DroppedView { model, heads })
}

impl DroppedView<'_> {
    pub fn features(&self, x: &crate::tensor::Tensor) -> Result<crate::tensor::Tensor> {
        self.model.features(x, Some(self.heads))
    }

    pub fn accuracy(
        &self,
        anchors: &ClassAnchors,
        ds: &DomainDataset,
        idx: &[usize],
    ) -> Result<f64> {
        evaluate_dropped(self.model, anchors, ds, idx, Some(self.heads))
    }
}

fn all_heads(model: &Model) -> Vec<Head> {
    let c = &model.config;
    (0..c.num_layers)
        .flat_map(|l| (0..c.num_heads).map(move |h| (l, h)))
        .collect()
}

/// Uniformly random order over every `(layer, head)`.
pub fn rank_random(model: &Model, rng: &mut SeededRng) -> Vec<Head> {
    let heads = all_heads(model);
    rng::permutation(rng, heads.len())
        .into_iter()
        .map(|i| heads[i])
        .collect()
}

/// Heads sorted by `score` (descending when `descending`), ties by index.
fn order_by(scores: &[(Head, f64)], descending: bool) -> Vec<Head> {
    let mut v = scores.to_vec();
    v.sort_by(|a, b| {
        let c = if descending {
            b.1.total_cmp(&a.1)
        } else {
            a.1.total_cmp(&b.1)
        };
        c.then(a.0.cmp(&b.0))
    });
    v.into_iter().map(|(h, _)| h).collect()
}

/// Class-token output of every head, `[layer][head] → [N × n]`, before the
/// output projection.
pub fn head_features(
    model: &Model,
    ds: &DomainDataset,
    idx: &[usize],
) -> Result<Vec<Vec<crate::tensor::Tensor>>> {
    let c = &model.config;
    let (l, h, n) = (c.num_layers, c.num_heads, c.head_dim);
    let mut cols: Vec<Vec<Vec<f64>>> = (0..l)
        .map(|_| (0..h).map(|_| Vec::new()).collect())
        .collect();
    for chunk in idx.chunks(256) {
        let (x, _, _) = ds.batch(chunk)?;
        let mut cap = Vec::new();
        let mut tape = Tape::new();
        let b = model.params.bind(&mut tape);
        let mut ctx = ForwardCtx {
            capture: Some(&mut cap),
            ..Default::default()
        };
        model.forward(&mut tape, &b, &x, &mut ctx)?;
        for (layer, f) in cap.iter().enumerate() {
            for &row in &model.class_rows(chunk.len()) {
                let r = f.row(row);
                for head in 0..h {
                    cols[layer][head].extend_from_slice(&r[head * n..(head + 1) * n]);
                }
            }
        }
    }
    cols.into_iter()
        .map(|layer| {
            layer
                .into_iter()
                .map(|data| crate::tensor::Tensor::new(&[data.len() / n, n], data))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

/// Per-head cross-domain MMD: the pairwise-averaged `mmd_pair` over source
/// domains of that head's class-token output, with median-heuristic
/// bandwidths per head.
pub fn head_mmd_scores(
    model: &Model,
    ds: &DomainDataset,
    idx: &[usize],
) -> Result<Vec<(Head, f64)>> {
    let parts = losses::partition_by_domain(
        &idx.iter()
            .map(|&i| ds.samples[i].domain)
            .collect::<Vec<_>>(),
    );
    if parts.len() < 2 {
        return Err(Error::invalid(
            "MMD ranking needs data from at least two domains",
        ));
    }
    let feats = head_features(model, ds, idx)?;
    let mut out = Vec::new();
    for (l, layer) in feats.iter().enumerate() {
        for (h, f) in layer.iter().enumerate() {
            let spec = KernelSpec::median_heuristic(&[f], &losses::DEFAULT_MULTIPLIERS)?;
            let groups: Vec<crate::tensor::Tensor> = parts
                .iter()
                .map(|(_, rows)| {
                    let data: Vec<f64> = rows
                        .iter()
                        .flat_map(|&r| f.row(r).iter().copied())
                        .collect();
                    crate::tensor::Tensor::new(&[rows.len(), f.cols()], data)
                })
                .collect::<Result<_>>()?;
            let mut s = 0.0;
            let mut pairs = 0usize;
            for p in 0..groups.len() {
                for q in p + 1..groups.len() {
                    s += losses::mmd_pair_value(&groups[p], &groups[q], &spec)?;
                    pairs += 1;
                }
            }
            out.push(((l, h), s / pairs as f64));
        }
    }
    Ok(out)
}

/// Highest per-head cross-domain MMD first.
pub fn rank_mmd(model: &Model, ds: &DomainDataset, idx: &[usize]) -> Result<Vec<Head>> {
    Ok(order_by(&head_mmd_scores(model, ds, idx)?, true))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BernoulliConfig {
    pub steps: usize,
    pub lr_gate: f64,
    /// LoRA learning rate for adapt-and-drop; cross-validation ignores it.
    pub lr_lora: f64,
    pub temperature: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BernoulliConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr_gate: 0.05,
            lr_lora: 5e-3,
            temperature: 1.0,
            batch_size: 36,
            seed: 0,
        }
    }
}

/// Copy of `model` whose soft gates (if any) are replaced by fresh
/// Bernoulli gates, with LoRA attached when `ensure_lora` and missing.
fn bernoulli_model(model: &Model, ensure_lora: bool, temperature: f64, seed: u64) -> Result<Model> {
    let mut ps = ParamSet::new();
    for p in model.params.iter().filter(|p| p.group != ParamGroup::Gate) {
        ps.insert(p.name.clone(), p.value.clone(), p.group)?;
    }
    let mut m = Model {
        config: model.config.clone(),
        params: ps,
        lora: model.lora.clone(),
        gates: None,
    };
    if ensure_lora && m.lora.is_none() {
        m = m.with_lora(LoraConfig::default(), seed)?;
    }
    m.with_gates(GateConfig {
        temperature,
        ..GateConfig::binary()
    })
}

/// Train Bernoulli gates (and LoRA when `lr_lora > 0`) with L_cls only on the
/// given sample indices. Returns retention probabilities per head.
fn train_bernoulli(
    model: &Model,
    anchors: &ClassAnchors,
    ds: &DomainDataset,
    idx: &[usize],
    cfg: &BernoulliConfig,
    lr_lora: f64,
    stream: &str,
) -> Result<Vec<(Head, f64)>> {
    let mut m = bernoulli_model(
        model,
        lr_lora > 0.0 || model.lora.is_some(),
        cfg.temperature,
        cfg.seed,
    )?;
    let tcfg = TrainConfig {
        alpha: 0.0,
        mmd_updates: MmdUpdates::Neither,
        temperature: anchors.temperature(),
        ..TrainConfig::default()
    };
    let mut opt = OptimizerState::new(AdamWConfig::default());
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut epoch = 0usize;
    for step in 0..cfg.steps {
        if batches.is_empty() {
            let mut r = rng::stream(cfg.seed, &alloc::format!("{stream}/batches/{epoch}"));
            batches = stratified_batches(ds, idx, cfg.batch_size, &mut r)?;
            batches.reverse();
            epoch += 1;
        }
        let batch = batches.pop().expect("refilled above");
        let (x, labels, domains) = ds.batch(&batch)?;
        let mut g = rng::stream(cfg.seed, &alloc::format!("{stream}/gumbel/{step}"));
        let train_lora = lr_lora > 0.0;
        let routed = routed_gradients(
            &m,
            anchors,
            &tcfg,
            &x,
            &labels,
            &domains,
            RouteCtx {
                halora: train_lora,
                gates: true,
                gumbel: Some((&mut g, cfg.temperature)),
            },
        )?;
        let (mut g1, mut g2) = (GradMap::new(), GradMap::new());
        for (name, grad) in routed.grads {
            if m.params.get(&name)?.group == ParamGroup::Halora {
                g1.insert(name, grad);
            } else {
                g2.insert(name, grad);
            }
        }
        opt.apply(&mut m.params, &g1, lr_lora, 0.0)?;
        opt.apply(&mut m.params, &g2, cfg.lr_gate, 0.0)?;
    }
    let mut out = Vec::new();
    for l in 0..m.config.num_layers {
        let p = dig::retention_probabilities(m.params.value(&dig::gate_name(l))?.data());
        out.extend(p.into_iter().enumerate().map(|(h, v)| ((l, h), v)));
    }
    Ok(out)
}

fn rank_bernoulli(
    model: &Model,
    anchors: &ClassAnchors,
    ds: &DomainDataset,
    source_idx: &[usize],
    cfg: &BernoulliConfig,
    lr_lora: f64,
) -> Result<Vec<(Head, f64)>> {
    let domains = ds.domains_of(source_idx);
    if domains.len() < 3 {
        return Err(Error::invalid(
            "head ranking by cross-validation needs at least 3 source domains",
        ));
    }
    let mut acc: Vec<(Head, f64)> = Vec::new();
    for &held in &domains {
        let fit: Vec<usize> = source_idx
            .iter()
            .copied()
            .filter(|&i| ds.samples[i].domain != held)
            .collect();
        let probs = train_bernoulli(
            model,
            anchors,
            ds,
            &fit,
            cfg,
            lr_lora,
            &alloc::format!("cv/{held}"),
        )?;
        if acc.is_empty() {
            acc = probs;
        } else {
            for (a, p) in acc.iter_mut().zip(probs) {
                a.1 += p.1;
            }
        }
    }
    for a in acc.iter_mut() {
        a.1 /= domains.len() as f64;
    }
    Ok(acc)
}

/// Mean retention probability per head over held-out-source folds, with the
/// backbone and any LoRA frozen.
pub fn bernoulli_scores(
    model: &Model,
    anchors: &ClassAnchors,
    ds: &DomainDataset,
    source_idx: &[usize],
    cfg: &BernoulliConfig,
) -> Result<Vec<(Head, f64)>> {
    rank_bernoulli(model, anchors, ds, source_idx, cfg, 0.0)
}

/// Lowest retention probability first; LoRA frozen.
pub fn rank_cv_bernoulli(
    model: &Model,
    anchors: &ClassAnchors,
    ds: &DomainDataset,
    source_idx: &[usize],
    cfg: &BernoulliConfig,
) -> Result<Vec<Head>> {
    Ok(order_by(
        &bernoulli_scores(model, anchors, ds, source_idx, cfg)?,
        false,
    ))
}

/// As [`bernoulli_scores`] but LoRA factors train with the gates.
pub fn adapt_and_drop_scores(
    model: &Model,
    anchors: &ClassAnchors,
    ds: &DomainDataset,
    source_idx: &[usize],
    cfg: &BernoulliConfig,
) -> Result<Vec<(Head, f64)>> {
    rank_bernoulli(model, anchors, ds, source_idx, cfg, cfg.lr_lora)
}

/// As [`rank_cv_bernoulli`] but LoRA factors train with the gates.
pub fn rank_adapt_and_drop(
    model: &Model,
    anchors: &ClassAnchors,
    ds: &DomainDataset,
    source_idx: &[usize],
    cfg: &BernoulliConfig,
) -> Result<Vec<Head>> {
    Ok(order_by(
        &adapt_and_drop_scores(model, anchors, ds, source_idx, cfg)?,
        false,
    ))
}

/// The first `k` heads of `ordering`, skipping any head whose removal would
/// empty its layer.
pub fn drop_prefix(model: &Model, ordering: &[Head], k: usize) -> HeadSet {
    let h = model.config.num_heads;
    let mut set = HeadSet::new();
    for &(l, head) in ordering {
        if set.len() == k {
            break;
        }
        if set.iter().filter(|(x, _)| *x == l).count() + 1 < h {
            set.insert((l, head));
        }
    }
    set
}

pub fn validate_ordering(model: &Model, ordering: &[Head]) -> Result<()> {
    let mut want = all_heads(model);
    let mut got = ordering.to_vec();
    want.sort_unstable();
    got.sort_unstable();
    if want != got {
        return Err(Error::invalid(
            "ordering is not a permutation of the model's heads",
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub drop_count: usize,
    pub accuracy: f64,
}

/// Accuracy on `eval_idx` after dropping the first `k` heads for each `k`.
pub fn drop_curve(
    model: &Model,
    anchors: &ClassAnchors,
    ordering: &[Head],
    drop_counts: &[usize],
    ds: &DomainDataset,
    eval_idx: &[usize],
) -> Result<Vec<CurvePoint>> {
    validate_ordering(model, ordering)?;
    drop_counts
        .iter()
        .map(|&k| {
            let set = drop_prefix(model, ordering, k);
            let acc = drop_heads(model, &set)?.accuracy(anchors, ds, eval_idx)?;
            Ok(CurvePoint {
                drop_count: k,
                accuracy: acc,
            })
        })
        .collect()
}

/// Pointwise mean of several curves over the same drop counts.
pub fn mean_curve(curves: &[Vec<CurvePoint>]) -> Result<Vec<CurvePoint>> {
    let first = curves
        .first()
        .ok_or_else(|| Error::invalid("no curves to average"))?;
    let mut out = first.clone();
    for c in &curves[1..] {
        if c.len() != out.len()
            || c.iter()
                .zip(&out)
                .any(|(a, b)| a.drop_count != b.drop_count)
        {
            return Err(Error::invalid("curves differ in drop counts"));
        }
        for (o, p) in out.iter_mut().zip(c) {
            o.accuracy += p.accuracy;
        }
    }
    for o in out.iter_mut() {
        o.accuracy /= curves.len() as f64;
    }
    Ok(out)
}

/// Ranking for one strategy; `Random` consumes the rng.
#[allow(clippy::too_many_arguments)]
pub fn rank(
    strategy: DropStrategy,
    model: &Model,
    anchors: &ClassAnchors,
    ds: &DomainDataset,
    source_idx: &[usize],
    cfg: &BernoulliConfig,
    rng: &mut SeededRng,
) -> Result<Vec<Head>> {
    Ok(
        rank_scored(strategy, model, anchors, ds, source_idx, cfg, rng)?
            .into_iter()
            .map(|(h, _)| h)
            .collect(),
    )
}

/// Ordering for one strategy, each head paired with the score that placed
/// it. Random orderings score heads by draw position.
#[allow(clippy::too_many_arguments)]
pub fn rank_scored(
    strategy: DropStrategy,
    model: &Model,
    anchors: &ClassAnchors,
    ds: &DomainDataset,
    source_idx: &[usize],
    cfg: &BernoulliConfig,
    rng: &mut SeededRng,
) -> Result<Vec<(Head, f64)>> {
    let (scores, descending) = match strategy {
        DropStrategy::Random => {
            return Ok(rank_random(model, rng)
                .into_iter()
                .enumerate()
                .map(|(i, h)| (h, i as f64))
                .collect())
        }
        DropStrategy::MmdRank => (head_mmd_scores(model, ds, source_idx)?, true),
        DropStrategy::CvBernoulli => (
            bernoulli_scores(model, anchors, ds, source_idx, cfg)?,
            false,
        ),
        DropStrategy::AdaptAndDrop => (
            adapt_and_drop_scores(model, anchors, ds, source_idx, cfg)?,
            false,
        ),
    };
    let order = order_by(&scores, descending);
    Ok(order
        .into_iter()
        .map(|h| (h, scores.iter().find(|(x, _)| *x == h).map_or(0.0, |s| s.1)))
        .collect())
}

/// Curve for `plan`: random averages `repeats` permutations.
#[allow(clippy::too_many_arguments)]
pub fn plan_curve(
    plan: &DropPlan,
    model: &Model,
    anchors: &ClassAnchors,
    ds: &DomainDataset,
    source_idx: &[usize],
    eval_idx: &[usize],
    cfg: &BernoulliConfig,
) -> Result<Vec<CurvePoint>> {
    plan.validate(model.config.total_heads())?;
    let mut r = rng::stream(cfg.seed, "headlab/random");
    let reps = if plan.strategy == DropStrategy::Random {
        plan.repeats
    } else {
        1
    };
    let mut curves = Vec::with_capacity(reps);
    for _ in 0..reps {
        let ord = rank(plan.strategy, model, anchors, ds, source_idx, cfg, &mut r)?;
        curves.push(drop_curve(
            model,
            anchors,
            &ord,
            &plan.drop_counts,
            ds,
            eval_idx,
        )?);
    }
    mean_curve(&curves)
}

/// Human-readable label for a head.
pub fn head_label(h: Head) -> String {
    alloc::format!("layer{}.head{}", h.0, h.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn model() -> Model {
        Model::new(
            EncoderConfig {
                num_layers: 2,
                num_heads: 3,
                head_dim: 2,
                num_tokens: 3,
                ..Default::default()
            },
            0,
        )
        .unwrap()
    }

    #[test]
    fn prefix_skips_layer_emptying_heads() {
        let m = model();
        let ord = [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)];
        let s = drop_prefix(&m, &ord, 3);
        assert_eq!(
            s.into_iter().collect::<Vec<_>>(),
            alloc::vec![(0, 0), (0, 1), (1, 0)]
        );
    }

    #[test]
    fn whole_layer_rejected() {
        let m = model();
        let s: HeadSet = [(1, 0), (1, 1), (1, 2)].into_iter().collect();
        assert!(drop_heads(&m, &s).is_err());
        let s: HeadSet = [(2, 0)].into_iter().collect();
        assert!(drop_heads(&m, &s).is_err());
    }

    #[test]
    fn ties_broken_by_index() {
        let s = [((1, 0), 0.5), ((0, 1), 0.5), ((0, 0), 0.7)];
        assert_eq!(order_by(&s, false), alloc::vec![(0, 1), (1, 0), (0, 0)]);
        assert_eq!(order_by(&s, true), alloc::vec![(0, 0), (0, 1), (1, 0)]);
    }

    #[test]
    fn plan_validation() {
        let p = DropPlan {
            drop_counts: alloc::vec![0, 3, 3],
            ..Default::default()
        };
        assert!(p.validate(16).is_err());
        assert!(DropPlan::default().validate(12).is_err());
        assert!(DropPlan::default().validate(16).is_ok());
    }
}
