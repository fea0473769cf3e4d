//! Code lookup against a brute-force scan over unit-normalized vectors.

use duin_core::params::normal;
use duin_core::quantizer::nearest_codes;
use duin_core::{rng, Tensor};
use proptest::prelude::*;

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// argmin of the squared distance between unit vectors, scanned naively.
fn brute_force(codex: &[f64], d: usize, q: &[f64]) -> usize {
    let q = unit(q);
    let mut best = (usize::MAX, f64::INFINITY);
    for (j, c) in codex.chunks(d).enumerate() {
        let c = unit(c);
        let dist: f64 = q.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best.0
}

#[test]
fn thousand_queries_match_brute_force() {
    let d = 16;
    let codex: Tensor<f64> = normal(&[64, d], 1.0, &mut rng::seeded(1));
    let queries: Tensor<f64> = normal(&[1000, d], 3.0, &mut rng::seeded(2));
    let got = nearest_codes(codex.data(), d, queries.data());
    assert_eq!(got.len(), 1000);
    let mismatches = queries.data().chunks(d).zip(&got).filter(|(q, &i)| brute_force(codex.data(), d, q) != i).count();
    assert_eq!(mismatches, 0);
    // Every query picks a real code, and a random codex spreads them out.
    let distinct: std::collections::BTreeSet<_> = got.iter().collect();
    assert!(distinct.len() > 32, "only {} codes used", distinct.len());
}

#[test]
fn f32_agrees_with_f64() {
    let d = 8;
    let codex: Tensor<f64> = normal(&[32, d], 1.0, &mut rng::seeded(3));
    let queries: Tensor<f64> = normal(&[500, d], 1.0, &mut rng::seeded(4));
    let c32: Vec<f32> = codex.data().iter().map(|&v| v as f32).collect();
    let q32: Vec<f32> = queries.data().iter().map(|&v| v as f32).collect();
    let a = nearest_codes(codex.data(), d, queries.data());
    let b = nearest_codes(&c32, d, &q32);
    let same = a.iter().zip(&b).filter(|(x, y)| x == y).count();
    assert!(same >= 498, "{same}/500");
}

#[test]
fn codex_row_is_its_own_nearest() {
    let d = 6;
    let codex: Tensor<f64> = normal(&[20, d], 1.0, &mut rng::seeded(5));
    let got = nearest_codes(codex.data(), d, codex.data());
    assert_eq!(got, (0..20).collect::<Vec<_>>());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn positive_rescaling_keeps_assignments(seed in any::<u64>(), q_scale in 1e-3f64..1e3, c_scale in 1e-3f64..1e3) {
        let d = 8;
        let codex: Tensor<f64> = normal(&[16, d], 1.0, &mut rng::seeded(seed));
        let queries: Tensor<f64> = normal(&[40, d], 1.0, &mut rng::seeded(seed ^ 0x9e37));
        let base = nearest_codes(codex.data(), d, queries.data());
        let cs: Vec<f64> = codex.data().iter().map(|v| v * c_scale).collect();
        let qs: Vec<f64> = queries.data().iter().map(|v| v * q_scale).collect();
        prop_assert_eq!(nearest_codes(&cs, d, &qs), base);
    }

    #[test]
    fn per_row_rescaling_keeps_assignments(seed in any::<u64>(), scales in prop::collection::vec(1e-2f64..1e2, 40)) {
        let d = 4;
        let codex: Tensor<f64> = normal(&[10, d], 1.0, &mut rng::seeded(seed));
        let queries: Tensor<f64> = normal(&[40, d], 1.0, &mut rng::seeded(!seed));
        let base = nearest_codes(codex.data(), d, queries.data());
        let qs: Vec<f64> = queries.data().chunks(d).zip(&scales).flat_map(|(q, s)| q.iter().map(move |v| v * s)).collect();
        prop_assert_eq!(nearest_codes(codex.data(), d, &qs), base);
    }
}
