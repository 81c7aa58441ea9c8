//! Synthetic multi-domain token data.
//!
//! Coordinates `[0, d/2)` form the task subspace and `[d/2, d)` the style
//! subspace. Each class has a unit prototype μ_y in the first, each domain a
//! unit style ν_d in the second. Within a sample, the first `task_tokens`
//! content tokens carry μ_y, the next `confounder_tokens` carry
//! `confound_strength · ν_d`, and every token gets isotropic Gaussian noise.
//!
//! Class priors are skewed per domain: domain `d` over-represents class
//! `d mod C`, so style is spuriously predictive of the label on the sources.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, SeededRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainSpec {
    pub num_domains: usize,
    pub num_classes: usize,
    pub confound_strength: f64,
    pub label_noise: f64,
    pub samples_per_domain_class: usize,
    /// Share of extra samples given to each domain's favored class; 0 means
    /// balanced classes.
    pub label_domain_correlation: f64,
    pub noise_std: f64,
    pub dim: usize,
    /// Content tokens per sample (the encoder adds its class token).
    pub content_tokens: usize,
    pub task_tokens: usize,
    pub confounder_tokens: usize,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            num_domains: 4,
            num_classes: 5,
            confound_strength: 2.0,
            label_noise: 0.0,
            samples_per_domain_class: 40,
            label_domain_correlation: 0.6,
            noise_std: 0.3,
            dim: 32,
            content_tokens: 8,
            task_tokens: 3,
            confounder_tokens: 3,
        }
    }
}

impl DomainSpec {
    pub fn task_subspace(&self) -> core::ops::Range<usize> {
        0..self.dim / 2
    }

    pub fn style_subspace(&self) -> core::ops::Range<usize> {
        self.dim / 2..self.dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_domains == 0 || self.num_classes == 0 || self.samples_per_domain_class == 0 {
            return Err(Error::invalid(
                "domains, classes and samples per cell must be positive",
            ));
        }
        if self.num_classes > self.task_subspace().len() {
            return Err(Error::invalid(alloc::format!(
                "{} classes do not fit orthonormally in a {}-dimensional task subspace",
                self.num_classes,
                self.task_subspace().len()
            )));
        }
        if self.num_domains > self.style_subspace().len() {
            return Err(Error::invalid(
                "more domains than style-subspace dimensions",
            ));
        }
        if self.task_tokens + self.confounder_tokens > self.content_tokens || self.task_tokens == 0
        {
            return Err(Error::invalid(
                "need 1..=content_tokens task tokens, plus confounders that fit",
            ));
        }
        if !(0.0..=1.0).contains(&self.label_noise)
            || !(self.confound_strength >= 0.0)
            || !(self.noise_std >= 0.0)
        {
            return Err(Error::invalid(
                "label_noise in [0,1]; confound_strength and noise_std nonnegative",
            ));
        }
        if !(0.0..=1.0).contains(&self.label_domain_correlation) {
            return Err(Error::invalid(
                "label_domain_correlation must lie in [0, 1]",
            ));
        }
        self.cell_counts().map(|_| ())
    }

    /// `[domain][class]` sample counts. Each domain holds `S·C` samples.
    pub fn cell_counts(&self) -> Result<Vec<Vec<usize>>> {
        let (c, s) = (self.num_classes, self.samples_per_domain_class);
        let total = s * c;
        let mut out = Vec::with_capacity(self.num_domains);
        for d in 0..self.num_domains {
            let mut row = vec![s; c];
            if c > 1 && self.label_domain_correlation > 0.0 {
                let fav = libm::round(s as f64 * (1.0 + self.label_domain_correlation)) as usize;
                let fav = fav.min(total - (c - 1));
                let rest = total - fav;
                for (k, v) in row.iter_mut().enumerate() {
                    *v = rest / (c - 1);
                    let others_before = if k < d % c { k } else { k.saturating_sub(1) };
                    if k != d % c && others_before < rest % (c - 1) {
                        *v += 1;
                    }
                }
                row[d % c] = fav;
            }
            if row.iter().any(|&v| v == 0) {
                return Err(Error::invalid(
                    "label-domain skew leaves an empty (domain, class) cell",
                ));
            }
            out.push(row);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// `[content_tokens × d]`.
    pub tokens: Tensor,
    pub label: usize,
    pub domain: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub spec: DomainSpec,
    pub seed: u64,
    /// Class prototypes μ, `[C × d]`.
    pub prototypes: Tensor,
    /// Domain styles ν, `[D × d]`.
    pub styles: Tensor,
    pub samples: Vec<Sample>,
}

/// `count` orthonormal vectors of length `dim` supported on `range`.
fn orthonormal_in(
    rng: &mut SeededRng,
    count: usize,
    dim: usize,
    range: core::ops::Range<usize>,
) -> Tensor {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    while rows.len() < count {
        let mut v = vec![0.0; dim];
        for i in range.clone() {
            v[i] = rng::normal(rng);
        }
        // Two Gram-Schmidt passes for numerical orthogonality.
        for _ in 0..2 {
            for r in &rows {
                let dot: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (x, a) in v.iter_mut().zip(r) {
                    *x -= dot * a;
                }
            }
        }
        let n = libm::sqrt(v.iter().map(|x| x * x).sum());
        if n > 1e-6 {
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Tensor::new(&[count, dim], rows.concat()).expect("consistent shape")
}

pub fn make_dataset(spec: &DomainSpec, seed: u64) -> Result<DomainDataset> {
    spec.validate()?;
    let d = spec.dim;
    let mut geo = rng::stream(seed, "domainsynth-geometry");
    let prototypes = orthonormal_in(&mut geo, spec.num_classes, d, spec.task_subspace());
    let styles = orthonormal_in(&mut geo, spec.num_domains, d, spec.style_subspace());
    let mut r = rng::stream(seed, "domainsynth-samples");
    let counts = spec.cell_counts()?;
    let mut samples = Vec::new();
    for (dom, row) in counts.iter().enumerate() {
        for (class, &n) in row.iter().enumerate() {
            for _ in 0..n {
                let mut tokens = rng::gaussian(&mut r, &[spec.content_tokens, d], spec.noise_std);
                let data = tokens.data_mut();
                for t in 0..spec.task_tokens {
                    for (x, m) in data[t * d..(t + 1) * d]
                        .iter_mut()
                        .zip(prototypes.row(class))
                    {
                        *x += m;
                    }
                }
                for t in spec.task_tokens..spec.task_tokens + spec.confounder_tokens {
                    for (x, s) in data[t * d..(t + 1) * d].iter_mut().zip(styles.row(dom)) {
                        *x += spec.confound_strength * s;
                    }
                }
                let mut label = class;
                if spec.label_noise > 0.0
                    && spec.num_classes > 1
                    && rng::uniform(&mut r) < spec.label_noise
                {
                    let shift = 1 + (rng::uniform(&mut r) * (spec.num_classes - 1) as f64) as usize;
                    label = (class + shift.min(spec.num_classes - 1)) % spec.num_classes;
                }
                samples.push(Sample {
                    tokens,
                    label,
                    domain: dom,
                });
            }
        }
    }
    Ok(DomainDataset {
        spec: spec.clone(),
        seed,
        prototypes,
        styles,
        samples,
    })
}

/// Train/test sample indices for one held-out target domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub target: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn domains_of(&self, idx: &[usize]) -> Vec<usize> {
        let mut d: Vec<usize> = idx.iter().map(|&i| self.samples[i].domain).collect();
        d.sort_unstable();
        d.dedup();
        d
    }

    /// Stack samples into `[B × content_tokens × d]` with labels and domains.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>, Vec<usize>)> {
        if idx.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let (t, d) = (self.spec.content_tokens, self.spec.dim);
        let mut data = Vec::with_capacity(idx.len() * t * d);
        let mut labels = Vec::with_capacity(idx.len());
        let mut domains = Vec::with_capacity(idx.len());
        for &i in idx {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::invalid("sample index out of range"))?;
            data.extend_from_slice(s.tokens.data());
            labels.push(s.label);
            domains.push(s.domain);
        }
        Ok((Tensor::new(&[idx.len(), t, d], data)?, labels, domains))
    }
}

/// Hold out `target`; train on the rest. With MMD active the sources must
/// contain at least two domains.
pub fn lodo_split(ds: &DomainDataset, target: usize, mmd_active: bool) -> Result<Split> {
    let dcount = ds.spec.num_domains;
    if target >= dcount {
        return Err(Error::invalid(alloc::format!(
            "target domain {target} outside [0, {dcount})"
        )));
    }
    if mmd_active && dcount < 3 {
        return Err(Error::invalid(
            "leave-one-domain-out with MMD needs at least 3 domains so two remain for training; \
             raise num_domains or set alpha = 0",
        ));
    }
    let (test, train): (Vec<usize>, Vec<usize>) =
        (0..ds.len()).partition(|&i| ds.samples[i].domain == target);
    if train.is_empty() {
        return Err(Error::invalid("no training domains remain"));
    }
    Ok(Split {
        target,
        train,
        test,
    })
}

/// One epoch of batches where every batch draws an equal share from each
/// domain present in `idx` (the first `batch_size mod D` domains get one
/// extra). The epoch ends when any domain runs out.
pub fn stratified_batches(
    ds: &DomainDataset,
    idx: &[usize],
    batch_size: usize,
    rng: &mut SeededRng,
) -> Result<Vec<Vec<usize>>> {
    let domains = ds.domains_of(idx);
    if domains.is_empty() || batch_size < domains.len() {
        return Err(Error::invalid(
            "batch size must cover at least one sample from every source domain",
        ));
    }
    let mut pools: Vec<Vec<usize>> = domains
        .iter()
        .map(|&d| {
            idx.iter()
                .copied()
                .filter(|&i| ds.samples[i].domain == d)
                .collect()
        })
        .collect();
    for pool in pools.iter_mut() {
        let perm = rng::permutation(rng, pool.len());
        *pool = perm.into_iter().map(|p| pool[p]).collect();
    }
    let base = batch_size / domains.len();
    let extra = batch_size % domains.len();
    let share = |k: usize| base + usize::from(k < extra);
    let nbatches = pools
        .iter()
        .enumerate()
        .map(|(k, p)| p.len() / share(k))
        .min()
        .unwrap_or(0);
    if nbatches == 0 {
        return Err(Error::invalid(
            "a source domain has fewer samples than its per-batch share",
        ));
    }
    let mut out = Vec::with_capacity(nbatches);
    for b in 0..nbatches {
        let mut batch = Vec::with_capacity(batch_size);
        for (k, pool) in pools.iter().enumerate() {
            let s = share(k);
            batch.extend_from_slice(&pool[b * s..(b + 1) * s]);
        }
        out.push(batch);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_counts() {
        let c = DomainSpec::default().cell_counts().unwrap();
        assert_eq!(c[1], vec![34, 64, 34, 34, 34]);
        assert!(c.iter().all(|r| r.iter().sum::<usize>() == 200));
        let flat = DomainSpec {
            label_domain_correlation: 0.0,
            ..DomainSpec::default()
        };
        assert!(flat
            .cell_counts()
            .unwrap()
            .iter()
            .flatten()
            .all(|&v| v == 40));
    }

    #[test]
    fn uneven_remainder_spread() {
        let s = DomainSpec {
            num_classes: 3,
            samples_per_domain_class: 5,
            label_domain_correlation: 0.5,
            ..Default::default()
        };
        let c = s.cell_counts().unwrap();
        // 15 per domain, favored round(7.5) = 8, remaining 7 split 4/3.
        assert_eq!(c[0], vec![8, 4, 3]);
        assert_eq!(c[2], vec![4, 3, 8]);
    }

    #[test]
    fn too_many_classes_rejected() {
        let s = DomainSpec {
            num_classes: 17,
            ..Default::default()
        };
        assert!(make_dataset(&s, 0).is_err());
    }

    #[test]
    fn batches_are_stratified() {
        let ds = make_dataset(&DomainSpec::default(), 1).unwrap();
        let split = lodo_split(&ds, 2, true).unwrap();
        let mut r = rng::stream(0, "batches");
        let b = stratified_batches(&ds, &split.train, 36, &mut r).unwrap();
        assert_eq!(b.len(), 16);
        for batch in &b {
            for d in [0, 1, 3] {
                assert_eq!(
                    batch.iter().filter(|&&i| ds.samples[i].domain == d).count(),
                    12
                );
            }
        }
    }

    #[test]
    fn two_domain_lodo_with_mmd_rejected() {
        let ds = make_dataset(
            &DomainSpec {
                num_domains: 2,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        assert!(lodo_split(&ds, 0, true).is_err());
        assert!(lodo_split(&ds, 0, false).is_ok());
    }
}
