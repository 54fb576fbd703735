//! Naive linear-scan model of the memory bank admission rule.

use rand::Rng;

use ptta_core::cstu::{Admission, MemoryBank};
use ptta_core::seed;

/// Linear-scan reference. Entries: (id, class, age, uncertainty), insertion
/// order.
pub struct Reference {
    pub n: usize,
    pub c: usize,
    pub lt: f64,
    pub lu: f64,
    pub entries: Vec<(u64, usize, u64, f64)>,
}

impl Reference {
    fn score(&self, age: u64, u: f64) -> f64 {
        self.lt / (1.0 + (-(age as f64) / self.n as f64).exp()) + self.lu * u / (self.c as f64).ln()
    }

    pub fn count(&self, class: usize) -> usize {
        let mut k = 0;
        for e in &self.entries {
            if e.1 == class {
                k += 1;
            }
        }
        k
    }

    pub fn admit(&mut self, id: u64, probs: &[f64]) -> Admission {
        let mut label = 0;
        for j in 1..probs.len() {
            if probs[j] > probs[label] {
                label = j;
            }
        }
        let mut u = 0.0;
        for &p in probs {
            if p > 0.0 {
                u -= p * p.ln();
            }
        }
        let h = self.score(0, u);

        let mut targets: Vec<usize> = Vec::new();
        let mut insert = false;
        if (self.count(label) as f64) < self.n as f64 / self.c as f64 {
            if self.entries.len() < self.n {
                insert = true;
            } else {
                let mut max = 0;
                for k in 0..self.c {
                    max = max.max(self.count(k));
                }
                for k in 0..self.c {
                    if self.count(k) == max {
                        targets.push(k);
                    }
                }
            }
        } else {
            targets.push(label);
        }

        let mut decision = Admission::Discarded;
        let mut inserted_id = None;
        if insert {
            self.entries.push((id, label, 0, u));
            inserted_id = Some(id);
            decision = Admission::Inserted;
        } else {
            let mut best: Option<usize> = None;
            for (i, e) in self.entries.iter().enumerate() {
                if !targets.contains(&e.1) {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some(b) => {
                        let be = self.entries[b];
                        let (hs, hb) = (self.score(e.2, e.3), self.score(be.2, be.3));
                        hs > hb || (hs == hb && (e.2 > be.2 || (e.2 == be.2 && e.1 < be.1)))
                    }
                };
                if better {
                    best = Some(i);
                }
            }
            if let Some(b) = best {
                let old = self.entries[b];
                if h < self.score(old.2, old.3) {
                    self.entries.remove(b);
                    self.entries.push((id, label, 0, u));
                    inserted_id = Some(id);
                    decision = Admission::Replaced { evicted_class: old.1, evicted_age: old.2 };
                }
            }
        }
        for e in &mut self.entries {
            if Some(e.0) != inserted_id {
                e.2 += 1;
            }
        }
        decision
    }
}

/// Random teacher output. A third of the draws are exact one-hots or exact
/// uniforms so that score ties occur.
pub fn random_probs(c: usize, rng: &mut impl Rng) -> Vec<f64> {
    match rng.random_range(0..6) {
        0 => {
            let mut p = vec![0.0; c];
            p[rng.random_range(0..c)] = 1.0;
            p
        }
        1 => vec![1.0 / c as f64; c],
        _ => {
            let t: f64 = rng.random_range(0.2..4.0);
            let z: Vec<f64> = (0..c).map(|_| rng.random::<f64>() * t).collect();
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        }
    }
}

pub fn run_equivalence(n: usize, c: usize, ops: usize, seed: u64) -> Result<(), String> {
    let (lt, lu) = (1.0, 1.0);
    let mut bank = MemoryBank::new(n, c, lt, lu).unwrap();
    let mut reference = Reference { n, c, lt, lu, entries: Vec::new() };
    let mut rng = seed::rng(seed, &[n as u64, c as u64]);
    let cap = n.div_ceil(c);
    for id in 0..ops as u64 {
        let fail = |what: &str| Err(format!("N={n} C={c} op {id}: {what}"));
        let p = random_probs(c, &mut rng);
        let got = bank.admit(&[id as f64], &p).unwrap();
        let want = reference.admit(id, &p);
        if got != want {
            return fail(&format!("decision {got:?} vs {want:?}"));
        }
        if bank.len() != reference.entries.len() || bank.len() > n {
            return fail("bank size");
        }
        for (e, r) in bank.entries().iter().zip(&reference.entries) {
            if e.x[0] as u64 != r.0 || e.pseudo_label != r.1 || e.age != r.2 || e.uncertainty.to_bits() != r.3.to_bits()
            {
                return fail(&format!("entry {} differs", r.0));
            }
        }
        for k in 0..c {
            if bank.occupancy()[k] != reference.count(k) || bank.occupancy()[k] > cap {
                return fail(&format!("occupancy of class {k}"));
            }
        }
    }
    Ok(())
}

/// 10⁵ operations spread over the capacity and class grid.
pub fn run_grid() -> Result<(), String> {
    let configs = [(8, 2), (8, 10), (64, 2), (64, 10), (65, 2), (65, 10)];
    let per = 100_000usize.div_ceil(configs.len());
    for (i, &(n, c)) in configs.iter().enumerate() {
        run_equivalence(n, c, per, i as u64)?;
    }
    Ok(())
}
