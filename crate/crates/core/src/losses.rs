//! Cosine classification against fixed class anchors, and Gaussian-kernel
//! MMD between source domains, per layer.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{sq_dist, Tape, Var};
use crate::tensor::Tensor;

/// Frozen unit-norm class embeddings `T[C × d]` and the logit temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAnchors {
    anchors: Tensor,
    temperature: f64,
}

impl ClassAnchors {
    pub fn new(anchors: Tensor, temperature: f64) -> Result<Self> {
        let (c, _) = anchors.matrix_dims()?;
        if c == 0 {
            return Err(Error::invalid("need at least one class anchor"));
        }
        if !(temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        for i in 0..c {
            let n = libm::sqrt(anchors.row(i).iter().map(|v| v * v).sum());
            if (n - 1.0).abs() > 1e-12 {
                return Err(Error::invalid(alloc::format!(
                    "anchor {i} has norm {n}, expected 1"
                )));
            }
        }
        Ok(Self {
            anchors,
            temperature,
        })
    }

    /// Gaussian rows, each scaled to unit norm.
    pub fn random(classes: usize, dim: usize, temperature: f64, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, "class-anchors");
        let mut t = rng::gaussian(&mut r, &[classes, dim], 1.0);
        for row in t.data_mut().chunks_exact_mut(dim) {
            let n = libm::sqrt(row.iter().map(|v| v * v).sum());
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        Self::new(t, temperature)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.anchors
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn num_classes(&self) -> usize {
        self.anchors.rows()
    }

    pub fn dim(&self) -> usize {
        self.anchors.cols()
    }

    fn cosines(&self, s: &[f64]) -> Result<Vec<f64>> {
        if s.len() != self.dim() {
            return Err(Error::shape(alloc::format!(
                "feature dim {} vs anchor dim {}",
                s.len(),
                self.dim()
            )));
        }
        let n = libm::sqrt(s.iter().map(|v| v * v).sum());
        if !n.is_finite() {
            return Err(Error::NonFinite(alloc::format!("feature norm {n}")));
        }
        if n == 0.0 {
            return Err(Error::invalid(
                "cosine similarity undefined for a zero-norm feature",
            ));
        }
        Ok((0..self.num_classes())
            .map(|c| {
                self.anchors
                    .row(c)
                    .iter()
                    .zip(s)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / n
            })
            .collect())
    }
}

/// `argmax_c cos(s, T_c)`, lowest index on ties.
pub fn zero_shot_predict(s: &[f64], anchors: &ClassAnchors) -> Result<usize> {
    let cos = anchors.cosines(s)?;
    let mut best = 0;
    for (c, &v) in cos.iter().enumerate() {
        if v > cos[best] {
            best = c;
        }
    }
    Ok(best)
}

pub fn predict_batch(features: &Tensor, anchors: &ClassAnchors) -> Result<Vec<usize>> {
    (0..features.rows())
        .map(|i| zero_shot_predict(features.row(i), anchors))
        .collect()
}

/// Fraction of rows whose prediction matches the label.
pub fn accuracy(features: &Tensor, labels: &[usize], anchors: &ClassAnchors) -> Result<f64> {
    if labels.len() != features.rows() || labels.is_empty() {
        return Err(Error::shape(
            "one label per feature row, and at least one row",
        ));
    }
    let pred = predict_batch(features, anchors)?;
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `-(1/N) Σ_i log softmax_c(cos(s_i, T_c) / τ)[y_i]`.
pub fn cls_loss(
    tape: &mut Tape,
    features: Var,
    labels: &[usize],
    anchors: &ClassAnchors,
) -> Result<Var> {
    if tape.value(features).cols() != anchors.dim() {
        return Err(Error::shape("feature and anchor dimensions differ"));
    }
    let s = tape.normalize_rows(features)?;
    let t = tape.constant(anchors.anchors.transpose()?);
    let cos = tape.matmul(s, t)?;
    let logits = tape.scale(cos, 1.0 / anchors.temperature);
    tape.cross_entropy(logits, labels)
}

/// Gaussian bandwidths; the kernel is the mean over them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub bandwidths: Vec<f64>,
}

pub const DEFAULT_MULTIPLIERS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

impl KernelSpec {
    pub fn new(bandwidths: Vec<f64>) -> Result<Self> {
        let k = Self { bandwidths };
        k.validate()?;
        Ok(k)
    }

    pub fn single(sigma: f64) -> Result<Self> {
        Self::new(alloc::vec![sigma])
    }

    pub fn validate(&self) -> Result<()> {
        if self.bandwidths.is_empty()
            || self
                .bandwidths
                .iter()
                .any(|&s| !(s > 0.0) || !s.is_finite())
        {
            return Err(Error::invalid(
                "kernel needs at least one positive, finite bandwidth",
            ));
        }
        Ok(())
    }

    /// Base σ with `σ² = median` of pairwise squared distances over all
    /// distinct row pairs of the pooled sets, times each multiplier. Falls
    /// back to σ = 1 when every pair coincides.
    pub fn median_heuristic(sets: &[&Tensor], multipliers: &[f64]) -> Result<Self> {
        let rows: Vec<&[f64]> = sets
            .iter()
            .flat_map(|t| (0..t.rows()).map(move |i| t.row(i)))
            .collect();
        let mut d2 = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                d2.push(sq_dist(rows[i], rows[j]));
            }
        }
        let base = if d2.is_empty() {
            1.0
        } else {
            d2.sort_by(f64::total_cmp);
            let mid = d2.len() / 2;
            let med = if d2.len() % 2 == 1 {
                d2[mid]
            } else {
                0.5 * (d2[mid - 1] + d2[mid])
            };
            if med > 0.0 && med.is_finite() {
                libm::sqrt(med)
            } else {
                1.0
            }
        };
        Self::new(multipliers.iter().map(|m| m * base).collect())
    }
}

/// How each MMD evaluation picks its bandwidths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    Fixed(KernelSpec),
    MedianHeuristic { multipliers: Vec<f64> },
}

impl Default for BandwidthRule {
    fn default() -> Self {
        BandwidthRule::MedianHeuristic {
            multipliers: DEFAULT_MULTIPLIERS.to_vec(),
        }
    }
}

impl BandwidthRule {
    pub fn resolve(&self, sets: &[&Tensor]) -> Result<KernelSpec> {
        match self {
            BandwidthRule::Fixed(k) => {
                k.validate()?;
                Ok(k.clone())
            }
            BandwidthRule::MedianHeuristic { multipliers } => {
                KernelSpec::median_heuristic(sets, multipliers)
            }
        }
    }
}

pub fn gaussian_kernel_matrix(x: &Tensor, y: &Tensor, spec: &KernelSpec) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let k = tape.gaussian_kernel(a, b, &spec.bandwidths)?;
    Ok(tape.value(k).clone())
}

/// Biased V-statistic MMD² between two feature sets.
pub fn mmd_pair(tape: &mut Tape, p: Var, q: Var, spec: &KernelSpec) -> Result<Var> {
    if tape.value(p).rows() == 0 || tape.value(q).rows() == 0 {
        return Err(Error::invalid(
            "mmd_pair needs at least one sample on each side",
        ));
    }
    let kpp = tape.gaussian_kernel(p, p, &spec.bandwidths)?;
    let kqq = tape.gaussian_kernel(q, q, &spec.bandwidths)?;
    let kpq = tape.gaussian_kernel(p, q, &spec.bandwidths)?;
    let (a, b, c) = (tape.mean(kpp), tape.mean(kqq), tape.mean(kpq));
    let ab = tape.add(a, b)?;
    let c2 = tape.scale(c, 2.0);
    tape.sub(ab, c2)
}

pub fn mmd_pair_value(p: &Tensor, q: &Tensor, spec: &KernelSpec) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(p.clone()), tape.constant(q.clone()));
    let v = mmd_pair(&mut tape, a, b, spec)?;
    Ok(tape.value(v).item())
}

/// Distinct domain ids in ascending order with the rows of each.
pub fn partition_by_domain(domains: &[usize]) -> Vec<(usize, Vec<usize>)> {
    let mut out: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut ids: Vec<usize> = domains.to_vec();
    ids.sort_unstable();
    ids.dedup();
    for id in ids {
        out.push((
            id,
            domains
                .iter()
                .enumerate()
                .filter(|(_, &d)| d == id)
                .map(|(i, _)| i)
                .collect(),
        ));
    }
    out
}

/// Mean over layers of `2/(D(D−1)) Σ_{p<q} MMD(S^p, S^q)`. `taps[l]` holds one
/// row per sample and `domains[i]` tags row `i`. Bandwidths are resolved per
/// layer from the current values and carry no gradient.
pub fn mmd_layered(
    tape: &mut Tape,
    taps: &[Var],
    domains: &[usize],
    rule: &BandwidthRule,
) -> Result<Var> {
    if taps.is_empty() {
        return Err(Error::invalid("mmd_layered needs at least one layer"));
    }
    let parts = partition_by_domain(domains);
    let dcount = parts.len();
    if dcount < 2 {
        return Err(Error::invalid(
            "MMD needs at least two domains in the batch",
        ));
    }
    let pair_coef = 2.0 / (dcount * (dcount - 1)) as f64;
    let mut layer_terms = Vec::with_capacity(taps.len());
    for &tap in taps {
        if tape.value(tap).rows() != domains.len() {
            return Err(Error::shape("one domain tag per tap row"));
        }
        let spec = rule.resolve(&[tape.value(tap)])?;
        let groups: Vec<Var> = parts
            .iter()
            .map(|(_, rows)| tape.select_rows(tap, rows))
            .collect::<Result<_>>()?;
        let mut acc: Option<Var> = None;
        for p in 0..dcount {
            for q in p + 1..dcount {
                let m = mmd_pair(tape, groups[p], groups[q], &spec)?;
                acc = Some(match acc {
                    None => m,
                    Some(a) => tape.add(a, m)?,
                });
            }
        }
        layer_terms.push(tape.scale(acc.expect("at least one pair"), pair_coef));
    }
    let mut total = layer_terms[0];
    for &t in &layer_terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(tape.scale(total, 1.0 / taps.len() as f64))
}
