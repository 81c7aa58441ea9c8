mod common;

use common::{seeded, uniform};
use headpurify_core::losses::{
    cls_loss, gaussian_kernel_matrix, mmd_layered, mmd_pair_value, zero_shot_predict,
    BandwidthRule, ClassAnchors, KernelSpec,
};
use headpurify_core::rng;
use headpurify_core::{Tape, Tensor};
use proptest::prelude::*;

fn k(x: &[f64], y: &[f64], bw: &[f64]) -> f64 {
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    bw.iter().map(|s| (-d2 / (2.0 * s * s)).exp()).sum::<f64>() / bw.len() as f64
}

fn rows(t: &Tensor) -> Vec<&[f64]> {
    (0..t.rows()).map(|i| t.row(i)).collect()
}

fn mmd_direct(p: &Tensor, q: &Tensor, bw: &[f64]) -> f64 {
    let (p, q) = (rows(p), rows(q));
    let (n, m) = (p.len() as f64, q.len() as f64);
    let mut pp = 0.0;
    for a in &p {
        for b in &p {
            pp += k(a, b, bw);
        }
    }
    let mut qq = 0.0;
    for a in &q {
        for b in &q {
            qq += k(a, b, bw);
        }
    }
    let mut pq = 0.0;
    for a in &p {
        for b in &q {
            pq += k(a, b, bw);
        }
    }
    pp / (n * n) + qq / (m * m) - 2.0 * pq / (n * m)
}

fn bandwidths() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.2f64..3.0, 1..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn kernel_matches_double_loop(seed in 0u64..100_000, n in 1usize..8, m in 1usize..8, d in 1usize..5, bw in bandwidths()) {
        let mut r = seeded(seed);
        let (x, y) = (uniform(&mut r, &[n, d]), uniform(&mut r, &[m, d]));
        let km = gaussian_kernel_matrix(&x, &y, &KernelSpec::new(bw.clone()).unwrap()).unwrap();
        for i in 0..n {
            for j in 0..m {
                prop_assert!((km.data()[i * m + j] - k(x.row(i), y.row(j), &bw)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mmd_pair_matches_direct_sums(seed in 0u64..100_000, n in 1usize..17, m in 1usize..17, d in 1usize..5, bw in bandwidths()) {
        let mut r = seeded(seed);
        let (p, q) = (uniform(&mut r, &[n, d]), uniform(&mut r, &[m, d]));
        let v = mmd_pair_value(&p, &q, &KernelSpec::new(bw.clone()).unwrap()).unwrap();
        prop_assert!((v - mmd_direct(&p, &q, &bw)).abs() < 1e-12);
    }

    #[test]
    fn layered_mmd_matches_all_pairs(
        seed in 0u64..100_000, layers in 1usize..5, domains in 2usize..5, per in 1usize..5, d in 1usize..5,
        bw in bandwidths(),
    ) {
        let mut r = seeded(seed);
        let rows_total = domains * per;
        // Interleaved tags so partitioning actually gathers rows.
        let tags: Vec<usize> = (0..rows_total).map(|i| i % domains).collect();
        let taps: Vec<Tensor> = (0..layers).map(|_| uniform(&mut r, &[rows_total, d])).collect();
        let mut tape = Tape::new();
        let vars: Vec<_> = taps.iter().map(|t| tape.constant(t.clone())).collect();
        let rule = BandwidthRule::Fixed(KernelSpec::new(bw.clone()).unwrap());
        let got = mmd_layered(&mut tape, &vars, &tags, &rule).unwrap();
        let got = tape.value(got).item();
        let mut want = 0.0;
        for t in &taps {
            let group = |dom: usize| {
                let data: Vec<f64> = (0..rows_total).filter(|i| tags[*i] == dom).flat_map(|i| t.row(i).to_vec()).collect();
                Tensor::new(&[per, d], data).unwrap()
            };
            let mut s = 0.0;
            for p in 0..domains {
                for q in p + 1..domains {
                    s += mmd_direct(&group(p), &group(q), &bw);
                }
            }
            want += s * 2.0 / (domains * (domains - 1)) as f64;
        }
        want /= layers as f64;
        prop_assert!((got - want).abs() < 1e-12, "{} vs {}", got, want);
    }

    #[test]
    fn cls_loss_matches_log_sum_exp(seed in 0u64..100_000, n in 1usize..6, c in 1usize..6, d in 2usize..6, tau in 0.01f64..2.0) {
        let mut r = seeded(seed);
        let anchors = ClassAnchors::random(c, d, tau, seed).unwrap();
        let s = uniform(&mut r, &[n, d]);
        prop_assume!((0..n).all(|i| s.row(i).iter().any(|v| v.abs() > 1e-3)));
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % c).collect();
        let mut tape = Tape::new();
        let f = tape.constant(s.clone());
        let got = cls_loss(&mut tape, f, &labels, &anchors).unwrap();
        let got = tape.value(got).item();
        let mut want = 0.0;
        for i in 0..n {
            let row = s.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let z: Vec<f64> = (0..c)
                .map(|k| anchors.tensor().row(k).iter().zip(row).map(|(a, b)| a * b).sum::<f64>() / norm / tau)
                .collect();
            let mx = z.iter().cloned().fold(f64::MIN, f64::max);
            let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            want += lse - z[labels[i]];
        }
        want /= n as f64;
        prop_assert!((got - want).abs() < 1e-12 * want.abs().max(1.0));
        prop_assert!(got >= 0.0);
    }

    #[test]
    fn prediction_matches_a_scan(seed in 0u64..100_000) {
        let mut r = seeded(seed);
        let anchors = ClassAnchors::random(10, 6, 0.01, seed).unwrap();
        let s = uniform(&mut r, &[6]);
        let mut best = (0, f64::MIN);
        for c in 0..10 {
            let dot: f64 = anchors.tensor().row(c).iter().zip(s.data()).map(|(a, b)| a * b).sum();
            if dot > best.1 {
                best = (c, dot);
            }
        }
        prop_assert_eq!(zero_shot_predict(s.data(), &anchors).unwrap(), best.0);
    }
}

#[test]
fn mmd_basic_properties_on_1000_instances() {
    let mut r = rng::stream(11, "mmd-props");
    for i in 0..1000 {
        let (n, m, d) = (1 + i % 7, 1 + (i / 7) % 5, 1 + i % 4);
        let p = uniform(&mut r, &[n, d]);
        let q = uniform(&mut r, &[m, d]);
        let spec = KernelSpec::median_heuristic(&[&p, &q], &[0.5, 1.0, 2.0]).unwrap();
        assert!(mmd_pair_value(&p, &p, &spec).unwrap().abs() < 1e-12);
        let (pq, qp) = (
            mmd_pair_value(&p, &q, &spec).unwrap(),
            mmd_pair_value(&q, &p, &spec).unwrap(),
        );
        assert!((pq - qp).abs() < 1e-12);
        assert!(pq >= -1e-12, "instance {i}: {pq:e}");
    }
}

#[test]
fn shifting_a_copy_raises_mmd_from_zero() {
    let mut r = seeded(4);
    let p = uniform(&mut r, &[6, 3]);
    let spec = KernelSpec::single(1.0).unwrap();
    let mut last = mmd_pair_value(&p, &p, &spec).unwrap();
    assert!(last.abs() < 1e-15);
    for step in 1..6 {
        let shifted = Tensor::from_fn(&[6, 3], |i| p.data()[i] + 0.2 * step as f64);
        let v = mmd_pair_value(&p, &shifted, &spec).unwrap();
        assert!(v > last);
        last = v;
    }
}

#[test]
fn two_domains_one_layer_reduce_to_the_pair() {
    let mut r = seeded(5);
    let x = uniform(&mut r, &[7, 3]);
    let tags = [0, 1, 0, 1, 1, 0, 1];
    let spec = KernelSpec::new(vec![0.5, 1.5]).unwrap();
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let layered = mmd_layered(&mut tape, &[v], &tags, &BandwidthRule::Fixed(spec.clone())).unwrap();
    let layered = tape.value(layered).item();
    let pick = |dom: usize| {
        let data: Vec<f64> = (0..7)
            .filter(|&i| tags[i] == dom)
            .flat_map(|i| x.row(i).to_vec())
            .collect();
        Tensor::new(&[data.len() / 3, 3], data).unwrap()
    };
    assert_eq!(layered, mmd_pair_value(&pick(0), &pick(1), &spec).unwrap());
}

#[test]
fn identical_domains_give_zero_layered_mmd() {
    let row = [0.3, -0.2, 0.9];
    let x = Tensor::from_fn(&[6, 3], |i| row[i % 3]);
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let m = mmd_layered(
        &mut tape,
        &[v, v],
        &[0, 1, 2, 0, 1, 2],
        &BandwidthRule::default(),
    )
    .unwrap();
    assert!(tape.value(m).item().abs() < 1e-15);
}

#[test]
fn raising_the_true_cosine_lowers_the_loss() {
    let anchors = ClassAnchors::new(Tensor::eye(3), 0.5).unwrap();
    let mut last = f64::MAX;
    for step in 0..8 {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::new(&[1, 3], vec![0.1 * step as f64, 0.5, 0.5]).unwrap());
        let v = cls_loss(&mut tape, f, &[0], &anchors).unwrap();
        let v = tape.value(v).item();
        assert!(v < last);
        last = v;
    }
}
