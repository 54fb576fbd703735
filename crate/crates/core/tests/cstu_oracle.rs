//! Memory bank against a naive reference of the admission algorithm.

mod common;

use std::time::Instant;

use ptta_core::cstu::{heuristic_score, uncertainty, Admission, MemoryBank};

#[test]
fn matches_reference_over_100k_operations() {
    let started = Instant::now();
    common::cstu_reference::run_grid().unwrap();
    assert!(started.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn minority_sample_evicts_from_a_full_majority() {
    // N=4, C=3: classes 0 and 1 reach the cap of 2 and fill the bank
    let mut bank = MemoryBank::new(4, 3, 1.0, 1.0).unwrap();
    for p in [[0.9, 0.05, 0.05], [0.6, 0.2, 0.2], [0.1, 0.8, 0.1], [0.1, 0.85, 0.05]] {
        assert_eq!(bank.admit(&[0.0], &p).unwrap(), Admission::Inserted);
    }
    assert_eq!(bank.occupancy(), &[2, 2, 0]);
    // a confident class-2 sample replaces the highest-scoring entry among the
    // tied majority classes: the uncertain class-0 entry
    let before: Vec<f64> = bank.entries().iter().map(|e| bank.score(e)).collect();
    let d = bank.admit(&[9.0], &[0.0, 0.0, 1.0]).unwrap();
    assert_eq!(d, Admission::Replaced { evicted_class: 0, evicted_age: 2 });
    assert_eq!(bank.occupancy(), &[1, 2, 1]);
    assert!(before.iter().enumerate().all(|(i, s)| i == 1 || before[1] > *s));
}

#[test]
fn high_score_sample_is_discarded_and_bank_only_ages() {
    let mut bank = MemoryBank::new(4, 2, 1.0, 1.0).unwrap();
    for p in [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]] {
        bank.admit(&[1.0], &p).unwrap();
    }
    let before = bank.clone();
    // maximal uncertainty: ℋ = 0.5 + 1 exceeds every stored σ(𝒜/𝒩) < 1
    assert_eq!(bank.admit(&[2.0], &[0.5, 0.5]).unwrap(), Admission::Discarded);
    for (a, b) in before.entries().iter().zip(bank.entries()) {
        assert_eq!((a.x.clone(), a.pseudo_label, a.age + 1), (b.x.clone(), b.pseudo_label, b.age));
    }
}

#[test]
fn score_is_monotone_and_json_dump_is_complete() {
    for a in 0..200 {
        assert!(heuristic_score(a + 1, 0.3, 64, 10, 1.0, 1.0) > heuristic_score(a, 0.3, 64, 10, 1.0, 1.0));
    }
    for k in 0..20 {
        let u = k as f64 * 0.1;
        assert!(heuristic_score(5, u + 0.05, 64, 10, 1.0, 1.0) > heuristic_score(5, u, 64, 10, 1.0, 1.0));
    }
    assert!((heuristic_score(0, 10f64.ln(), 64, 10, 1.0, 1.0) - 1.5).abs() < 1e-15);
    assert!(uncertainty(&[0.7, 0.3]).unwrap() > 0.0);

    let mut bank = MemoryBank::new(4, 2, 1.0, 1.0).unwrap();
    bank.admit(&[0.25, -1.0], &[0.7, 0.3]).unwrap();
    let v: serde_json::Value = serde_json::from_str(&bank.to_json().unwrap()).unwrap();
    let e = &v["entries"][0];
    assert_eq!(e["x"], serde_json::json!([0.25, -1.0]));
    assert_eq!(e["pseudo_label"], 0);
    assert_eq!(e["age"], 0);
    assert!(e["uncertainty"].as_f64().unwrap() > 0.0);
}
