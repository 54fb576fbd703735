//! Category-balanced memory bank with timeliness and uncertainty.
//!
//! Each entry carries a pseudo-label, an age (test samples seen since it was
//! stored) and an uncertainty (prediction entropy). The score
//! `H = λ_t·σ(A/N) + λ_u·U/log C` ranks entries for eviction: old or
//! uncertain entries go first, and only from the incoming sample's own class
//! when that class already holds its share of the capacity, otherwise from
//! the currently most frequent class(es).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Timeliness/uncertainty score of one entry.
pub fn heuristic_score(
    age: u64,
    uncertainty: f64,
    capacity: usize,
    num_classes: usize,
    lambda_t: f64,
    lambda_u: f64,
) -> f64 {
    let timeliness = 1.0 / (1.0 + (-(age as f64) / capacity as f64).exp());
    lambda_t * timeliness + lambda_u * uncertainty / (num_classes as f64).ln()
}

/// Shannon entropy in nats, with `0·log 0 = 0`.
pub fn uncertainty(p: &[f64]) -> Result<f64> {
    if let Some(i) = p.iter().position(|&v| !(v >= 0.0)) {
        return Err(invalid(format!("probability {} at index {i} is negative or NaN", p[i])));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(invalid(format!("probabilities sum to {sum}")));
    }
    Ok(p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum::<f64>().max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub x: Vec<f64>,
    pub pseudo_label: usize,
    pub age: u64,
    pub uncertainty: f64,
    /// Monotone insertion counter; defines snapshot order.
    pub seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Admission {
    Inserted,
    Replaced { evicted_class: usize, evicted_age: u64 },
    Discarded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    capacity: usize,
    num_classes: usize,
    lambda_t: f64,
    lambda_u: f64,
    entries: Vec<BankEntry>,
    occupancy: Vec<usize>,
    next_seq: u64,
}

impl MemoryBank {
    pub fn new(capacity: usize, num_classes: usize, lambda_t: f64, lambda_u: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(invalid("bank capacity must be positive"));
        }
        if num_classes < 2 {
            return Err(invalid("the uncertainty normaliser needs at least 2 classes"));
        }
        if !(lambda_t >= 0.0 && lambda_u >= 0.0) {
            return Err(invalid("score weights must be non-negative"));
        }
        Ok(Self {
            capacity,
            num_classes,
            lambda_t,
            lambda_u,
            entries: Vec::with_capacity(capacity),
            occupancy: vec![0; num_classes],
            next_seq: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn occupancy(&self) -> &[usize] {
        &self.occupancy
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn score(&self, e: &BankEntry) -> f64 {
        heuristic_score(e.age, e.uncertainty, self.capacity, self.num_classes, self.lambda_t, self.lambda_u)
    }

    /// Offers one test sample with its teacher probabilities.
    pub fn admit(&mut self, x: &[f64], probs: &[f64]) -> Result<Admission> {
        if probs.len() != self.num_classes {
            return Err(invalid(format!("{} probabilities for {} classes", probs.len(), self.num_classes)));
        }
        let u = uncertainty(probs)?;
        let label = crate::nn::loss::argmax(probs);
        let incoming = heuristic_score(0, u, self.capacity, self.num_classes, self.lambda_t, self.lambda_u);

        // exact form of O_ŷ < N / C
        let under_share = self.occupancy[label] * self.num_classes < self.capacity;
        let candidates: Option<Vec<usize>> = if under_share {
            if self.entries.len() < self.capacity {
                None
            } else {
                let max = *self.occupancy.iter().max().expect("at least two classes");
                Some((0..self.num_classes).filter(|&c| self.occupancy[c] == max).collect())
            }
        } else {
            Some(vec![label])
        };

        let decision = match candidates {
            None => {
                self.push(x, label, u);
                Admission::Inserted
            }
            Some(classes) => match self.worst_among(&classes) {
                Some((idx, worst)) if incoming < worst => {
                    let old = self.entries.remove(idx);
                    self.occupancy[old.pseudo_label] -= 1;
                    self.push(x, label, u);
                    Admission::Replaced { evicted_class: old.pseudo_label, evicted_age: old.age }
                }
                _ => Admission::Discarded,
            },
        };
        // the sample just stored has seen no later test samples yet
        let fresh = self.next_seq.checked_sub(1).filter(|_| decision != Admission::Discarded);
        for e in self.entries.iter_mut().filter(|e| Some(e.seq) != fresh) {
            e.age += 1;
        }
        Ok(decision)
    }

    fn push(&mut self, x: &[f64], label: usize, u: f64) {
        self.entries.push(BankEntry { x: x.to_vec(), pseudo_label: label, age: 0, uncertainty: u, seq: self.next_seq });
        self.next_seq += 1;
        self.occupancy[label] += 1;
    }

    /// Highest-scoring entry among `classes`; ties go to the older entry,
    /// then the smaller class index, then the earlier insertion.
    fn worst_among(&self, classes: &[usize]) -> Option<(usize, f64)> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| classes.contains(&e.pseudo_label))
            .map(|(i, e)| (i, e, self.score(e)))
            .max_by(|(_, a, sa), (_, b, sb)| {
                sa.total_cmp(sb)
                    .then(a.age.cmp(&b.age))
                    .then(b.pseudo_label.cmp(&a.pseudo_label))
                    .then(b.seq.cmp(&a.seq))
            })
            .map(|(i, _, s)| (i, s))
    }

    /// Entries with their ages, in insertion order.
    pub fn snapshot(&self) -> Vec<(&[f64], u64)> {
        self.entries.iter().map(|e| (e.x.as_slice(), e.age)).collect()
    }

    pub fn mean_age(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.iter().map(|e| e.age as f64).sum::<f64>() / self.entries.len() as f64
    }

    pub fn mean_uncertainty(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.iter().map(|e| e.uncertainty).sum::<f64>() / self.entries.len() as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}
