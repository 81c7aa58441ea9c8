use headpurify_core::domainsynth::{
    lodo_split, make_dataset, stratified_batches, DomainDataset, DomainSpec,
};
use headpurify_core::rng;
use nalgebra::DMatrix;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean over the given token positions of each sample, `[N × d]`.
fn token_means(ds: &DomainDataset, tokens: std::ops::Range<usize>, idx: &[usize]) -> Vec<Vec<f64>> {
    let d = ds.spec.dim;
    idx.iter()
        .map(|&i| {
            let t = &ds.samples[i].tokens;
            (0..d)
                .map(|c| {
                    tokens.clone().map(|k| t.data()[k * d + c]).sum::<f64>() / tokens.len() as f64
                })
                .collect()
        })
        .collect()
}

#[test]
fn prototypes_and_styles_are_orthonormal_and_disjoint() {
    for seed in 0..5 {
        let ds = make_dataset(&DomainSpec::default(), seed).unwrap();
        let (p, s) = (&ds.prototypes, &ds.styles);
        for a in 0..p.rows() {
            assert!((dot(p.row(a), p.row(a)) - 1.0).abs() < 1e-12);
            for b in 0..s.rows() {
                assert!(dot(p.row(a), s.row(b)).abs() < 1e-12);
            }
        }
        for a in 0..s.rows() {
            for b in 0..s.rows() {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot(s.row(a), s.row(b)) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn same_seed_same_dataset() {
    let spec = DomainSpec {
        label_noise: 0.1,
        ..DomainSpec::default()
    };
    assert_eq!(
        make_dataset(&spec, 3).unwrap(),
        make_dataset(&spec, 3).unwrap()
    );
    assert_ne!(
        make_dataset(&spec, 3).unwrap(),
        make_dataset(&spec, 4).unwrap()
    );
}

#[test]
fn cell_counts_are_exact() {
    let spec = DomainSpec::default();
    let ds = make_dataset(&spec, 0).unwrap();
    let counts = spec.cell_counts().unwrap();
    for (d, row) in counts.iter().enumerate() {
        for (c, &n) in row.iter().enumerate() {
            assert!(n > 0);
            assert_eq!(
                ds.samples
                    .iter()
                    .filter(|s| s.domain == d && s.label == c)
                    .count(),
                n
            );
        }
    }
}

#[test]
fn without_confounders_domains_share_a_distribution() {
    let spec = DomainSpec {
        confound_strength: 0.0,
        label_domain_correlation: 0.0,
        ..DomainSpec::default()
    };
    let ds = make_dataset(&spec, 1).unwrap();
    let d = spec.dim;
    let all_tokens = 0..spec.content_tokens;
    let per_domain: Vec<Vec<f64>> = (0..spec.num_domains)
        .map(|dom| {
            let idx: Vec<usize> = (0..ds.len())
                .filter(|&i| ds.samples[i].domain == dom)
                .collect();
            let m = token_means(&ds, all_tokens.clone(), &idx);
            (0..d)
                .map(|c| m.iter().map(|r| r[c]).sum::<f64>() / m.len() as f64)
                .collect()
        })
        .collect();
    // Class mix is identical, so only token noise separates the means.
    let n = (spec.samples_per_domain_class * spec.num_classes) as f64;
    let sigma = spec.noise_std / (n * spec.content_tokens as f64).sqrt() * 2f64.sqrt();
    for a in 0..spec.num_domains {
        for b in a + 1..spec.num_domains {
            for c in 0..d {
                assert!(
                    (per_domain[a][c] - per_domain[b][c]).abs() < 4.0 * sigma,
                    "domains {a},{b} coord {c}"
                );
            }
        }
    }
}

#[test]
fn task_tokens_are_linearly_separable() {
    let spec = DomainSpec::default();
    let ds = make_dataset(&spec, 2).unwrap();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let feats = token_means(&ds, 0..spec.task_tokens, &idx);
    let cols = spec.task_subspace().len() + 1;
    let x = DMatrix::from_fn(ds.len(), cols, |i, j| {
        if j + 1 == cols {
            1.0
        } else {
            feats[i][j]
        }
    });
    let y = DMatrix::from_fn(ds.len(), spec.num_classes, |i, c| {
        if ds.samples[i].label == c {
            1.0
        } else {
            0.0
        }
    });
    let w = x.clone().svd(true, true).solve(&y, 1e-12).unwrap();
    let scores = x * w;
    let hits = (0..ds.len())
        .filter(|&i| {
            let row = scores.row(i);
            let best = (0..spec.num_classes)
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap();
            best == ds.samples[i].label
        })
        .count();
    assert_eq!(hits, ds.len());
}

#[test]
fn lodo_partitions_the_dataset() {
    let ds = make_dataset(&DomainSpec::default(), 3).unwrap();
    for target in 0..4 {
        let s = lodo_split(&ds, target, true).unwrap();
        assert_eq!(ds.domains_of(&s.train).len(), 3);
        assert!(!ds.domains_of(&s.train).contains(&target));
        assert_eq!(ds.domains_of(&s.test), vec![target]);
        let mut all = [s.train.clone(), s.test.clone()].concat();
        all.sort_unstable();
        assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
    }
    assert!(lodo_split(&ds, 4, true).is_err());
}

#[test]
fn every_batch_holds_every_source_domain() {
    let ds = make_dataset(&DomainSpec::default(), 4).unwrap();
    let split = lodo_split(&ds, 2, true).unwrap();
    let mut r = rng::stream(4, "batches/0");
    let batches = stratified_batches(&ds, &split.train, 36, &mut r).unwrap();
    assert!(!batches.is_empty());
    let mut seen = std::collections::BTreeSet::new();
    for b in &batches {
        assert_eq!(b.len(), 36);
        for d in ds.domains_of(&split.train) {
            assert!(b.iter().filter(|&&i| ds.samples[i].domain == d).count() >= 36 / (2 * 3));
        }
        for &i in b {
            assert!(seen.insert(i), "sample {i} drawn twice in one epoch");
        }
    }
}

#[test]
fn too_many_classes_for_the_task_subspace() {
    let spec = DomainSpec {
        num_classes: 17,
        ..DomainSpec::default()
    };
    assert!(make_dataset(&spec, 0).is_err());
}
