//! Histogram distances and chi-square tests used by the privacy audits.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Counts per outcome.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram<K: Ord> {
    counts: BTreeMap<K, u64>,
    total: u64,
}

impl<K: Ord> Default for Histogram<K> {
    fn default() -> Self {
        Histogram { counts: BTreeMap::new(), total: 0 }
    }
}

impl<K: Ord + Clone> Histogram<K> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, key: K) {
        *self.counts.entry(key).or_insert(0) += 1;
        self.total += 1;
    }

    pub fn merge(&mut self, other: &Histogram<K>) {
        for (k, &c) in &other.counts {
            *self.counts.entry(k.clone()).or_insert(0) += c;
        }
        self.total += other.total;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn count(&self, key: &K) -> u64 {
        self.counts.get(key).copied().unwrap_or(0)
    }

    pub fn support(&self) -> usize {
        self.counts.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&K, u64)> {
        self.counts.iter().map(|(k, &c)| (k, c))
    }

    /// Aligned counts of both histograms over the union of their supports.
    pub fn aligned(&self, other: &Histogram<K>) -> (Vec<u64>, Vec<u64>) {
        let keys: BTreeSet<&K> = self.counts.keys().chain(other.counts.keys()).collect();
        keys.into_iter().map(|k| (self.count(k), other.count(k))).unzip()
    }
}

impl<K: Ord + Clone> FromIterator<K> for Histogram<K> {
    fn from_iter<I: IntoIterator<Item = K>>(iter: I) -> Self {
        let mut h = Histogram::new();
        for k in iter {
            h.add(k);
        }
        h
    }
}

/// Total variation distance between the empirical distributions.
pub fn tv_distance<K: Ord + Clone>(a: &Histogram<K>, b: &Histogram<K>) -> f64 {
    if a.total == 0 || b.total == 0 {
        return if a.total == b.total { 0.0 } else { 1.0 };
    }
    let (ca, cb) = a.aligned(b);
    let (na, nb) = (a.total as f64, b.total as f64);
    0.5 * ca.iter().zip(&cb).map(|(&x, &y)| (x as f64 / na - y as f64 / nb).abs()).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

fn chi_square_sf(statistic: f64, dof: usize) -> f64 {
    if dof == 0 {
        return 1.0;
    }
    ChiSquared::new(dof as f64).expect("positive dof").sf(statistic)
}

/// Goodness of fit of `counts` against the uniform distribution over all bins.
pub fn chi_square_uniform(counts: &[u64]) -> ChiSquare {
    let n: u64 = counts.iter().sum();
    let dof = counts.len().saturating_sub(1);
    if n == 0 {
        return ChiSquare { statistic: 0.0, dof, p_value: 1.0 };
    }
    let expected = n as f64 / counts.len() as f64;
    let statistic = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    ChiSquare { statistic, dof, p_value: chi_square_sf(statistic, dof) }
}

/// Two-sample homogeneity test on aligned counts; bins empty in both are dropped.
pub fn chi_square_two_sample(a: &[u64], b: &[u64]) -> ChiSquare {
    assert_eq!(a.len(), b.len(), "aligned histograms");
    let na: u64 = a.iter().sum();
    let nb: u64 = b.iter().sum();
    if na == 0 || nb == 0 {
        return ChiSquare { statistic: 0.0, dof: 0, p_value: 1.0 };
    }
    let (ka, kb) = ((nb as f64 / na as f64).sqrt(), (na as f64 / nb as f64).sqrt());
    let mut statistic = 0.0;
    let mut bins = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        if x + y == 0 {
            continue;
        }
        bins += 1;
        statistic += (ka * x as f64 - kb * y as f64).powi(2) / (x + y) as f64;
    }
    let dof = bins.saturating_sub(1);
    ChiSquare { statistic, dof, p_value: chi_square_sf(statistic, dof) }
}
