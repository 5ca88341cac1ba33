//! Metric spot values and the edit-distance fuzz.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spatial_lm::metrics::{anls, exact_accuracy, kie_f1, lev, ANLS_THRESHOLD};

use super::edit_distance::dp_lev;

fn random_string(rng: &mut ChaCha8Rng) -> String {
    let alphabet = ['a', 'b', 'c', 'd', ' ', 'é', 'Z'];
    let n = rng.gen_range(0..=64);
    (0..n).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
}

/// `lev` against the quadratic DP on `n` random pairs.
pub fn lev_fuzz(n: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..n {
        let a = random_string(&mut rng);
        let b = random_string(&mut rng);
        assert_eq!(lev(&a, &b), dp_lev(&a, &b), "{a:?} {b:?}");
    }
}

pub fn spot_values() {
    let g = |s: &str| vec![s.to_string()];
    assert_eq!(anls("hello", &g("hello"), ANLS_THRESHOLD).unwrap(), 1.0);
    assert!((anls("hallo", &g("hello"), ANLS_THRESHOLD).unwrap() - 0.8).abs() < 1e-12);
    assert_eq!(anls("xyz", &g("hello"), ANLS_THRESHOLD).unwrap(), 0.0);
    // Best of several golds.
    assert_eq!(anls("b", &[String::from("a"), String::from("b")], ANLS_THRESHOLD).unwrap(), 1.0);
    assert!(anls("a", &[], ANLS_THRESHOLD).is_err());

    let m = |pairs: &[(&str, &str)]| pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect::<BTreeMap<_, _>>();
    let gold = m(&[("a", "1"), ("b", "2"), ("c", "3")]);
    assert_eq!(kie_f1(&gold, &gold).f1, 1.0);
    let two = kie_f1(&m(&[("a", "1"), ("b", "2")]), &gold);
    assert!((two.f1 - 0.8).abs() < 1e-12);
    assert!((two.precision - 1.0).abs() < 1e-12 && (two.recall - 2.0 / 3.0).abs() < 1e-12);
    let mixed = kie_f1(&m(&[("a", "1"), ("b", "2"), ("c", "x")]), &gold);
    assert!((mixed.f1 - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(kie_f1(&m(&[("a", "9")]), &gold).f1, 0.0);

    assert_eq!(exact_accuracy(&["a", "b"], &["a", "b"]).unwrap(), 1.0);
    assert_eq!(exact_accuracy(&["a", "x"], &["a", "b"]).unwrap(), 0.5);
    assert!(exact_accuracy::<&str>(&[], &[]).is_err());
}
