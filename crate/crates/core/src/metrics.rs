//! External clustering metrics: ACC (dominating-label and optimal one-to-one
//! mapping), NMI (arithmetic-mean normaliser, natural log) and ARI.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{DcdcError, Result};

/// Counts of (predicted cluster, true class) pairs over the distinct labels seen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Contingency {
    table: Vec<Vec<u64>>,
    n: u64,
}

impl Contingency {
    pub fn new(pred: &[usize], truth: &[usize]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(DcdcError::shape(format!(
                "{} predictions vs {} labels",
                pred.len(),
                truth.len()
            )));
        }
        if pred.is_empty() {
            return Err(DcdcError::shape("cannot score an empty labelling"));
        }
        // Distinct labels numbered in sorted order.
        let index = |labels: &[usize]| {
            labels
                .iter()
                .copied()
                .collect::<BTreeSet<usize>>()
                .into_iter()
                .enumerate()
                .map(|(i, k)| (k, i))
                .collect::<BTreeMap<usize, usize>>()
        };
        let (pi, ti) = (index(pred), index(truth));
        let mut table = vec![vec![0u64; ti.len()]; pi.len()];
        for (p, t) in pred.iter().zip(truth) {
            table[pi[p]][ti[t]] += 1;
        }
        Ok(Contingency {
            table,
            n: pred.len() as u64,
        })
    }

    pub fn table(&self) -> &[Vec<u64>] {
        &self.table
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn num_pred(&self) -> usize {
        self.table.len()
    }

    pub fn num_true(&self) -> usize {
        self.table.first().map_or(0, Vec::len)
    }

    fn row_sums(&self) -> Vec<u64> {
        self.table.iter().map(|r| r.iter().sum()).collect()
    }

    fn col_sums(&self) -> Vec<u64> {
        (0..self.num_true())
            .map(|j| self.table.iter().map(|r| r[j]).sum())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mapping {
    /// Each cluster takes its majority class (many-to-one allowed).
    Dominating,
    /// Best one-to-one cluster/class assignment.
    Optimal,
}

pub fn accuracy(pred: &[usize], truth: &[usize], mapping: Mapping) -> Result<f64> {
    let c = Contingency::new(pred, truth)?;
    let correct: u64 = match mapping {
        Mapping::Dominating => c
            .table
            .iter()
            .map(|row| row.iter().copied().max().unwrap_or(0))
            .sum(),
        Mapping::Optimal => {
            let weights: Vec<Vec<i64>> = c
                .table
                .iter()
                .map(|r| r.iter().map(|&v| v as i64).collect())
                .collect();
            max_weight_assignment(&weights).1 as u64
        }
    };
    Ok(correct as f64 / c.n as f64)
}

/// Maximum-weight assignment on a (possibly rectangular) non-negative weight matrix.
/// Returns the column chosen for each row (`None` when the row is left unmatched)
/// and the total weight.
pub fn max_weight_assignment(weights: &[Vec<i64>]) -> (Vec<Option<usize>>, i64) {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    let n = rows.max(cols);
    if n == 0 {
        return (Vec::new(), 0);
    }
    let max_w = weights.iter().flatten().copied().max().unwrap_or(0);
    // Square cost matrix; padding cells cost as much as a zero-weight match.
    let cost = |i: usize, j: usize| -> i64 {
        let w = if i < rows && j < cols { weights[i][j] } else { 0 };
        max_w - w
    };

    // Shortest augmenting path Hungarian with potentials, 1-based with a sentinel column 0.
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut min_to = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![None; rows];
    let mut total = 0;
    for j in 1..=n {
        let i = matched_row[j] - 1;
        if i < rows && j - 1 < cols {
            assignment[i] = Some(j - 1);
            total += weights[i][j - 1];
        }
    }
    (assignment, total)
}

fn entropy(counts: &[u64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information of the empirical joint, in nats.
pub fn mutual_information(c: &Contingency) -> f64 {
    let n = c.n as f64;
    let (a, b) = (c.row_sums(), c.col_sums());
    let mut mi = 0.0;
    for (i, row) in c.table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij == 0 {
                continue;
            }
            let nij = nij as f64;
            mi += nij / n * (n * nij / (a[i] as f64 * b[j] as f64)).ln();
        }
    }
    mi.max(0.0)
}

/// `I(pred; truth) / ((H(pred) + H(truth)) / 2)`.
///
/// Two single-cluster labellings score 1; otherwise a zero-entropy side scores 0.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let c = Contingency::new(pred, truth)?;
    let n = c.n as f64;
    let hp = entropy(&c.row_sums(), n);
    let ht = entropy(&c.col_sums(), n);
    if c.num_pred() == 1 && c.num_true() == 1 {
        return Ok(1.0);
    }
    if hp == 0.0 || ht == 0.0 {
        return Ok(0.0);
    }
    let mi = mutual_information(&c);
    Ok((mi / (0.5 * (hp + ht))).clamp(0.0, 1.0))
}

fn comb2(x: u64) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index from pair counts. Identical degenerate labellings score 1.
pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let c = Contingency::new(pred, truth)?;
    if c.n < 2 {
        return Err(DcdcError::shape("ARI needs at least two samples"));
    }
    let index: f64 = c.table.iter().flatten().map(|&v| comb2(v)).sum();
    let a: f64 = c.row_sums().into_iter().map(comb2).sum();
    let b: f64 = c.col_sums().into_iter().map(comb2).sum();
    let expected = a * b / comb2(c.n);
    let max = 0.5 * (a + b);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// All four numbers reported per evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRecord {
    pub acc_dominating: f64,
    pub acc_optimal: f64,
    pub nmi: f64,
    pub ari: f64,
}

impl MetricRecord {
    pub fn compute(pred: &[usize], truth: &[usize]) -> Result<Self> {
        Ok(MetricRecord {
            acc_dominating: accuracy(pred, truth, Mapping::Dominating)?,
            acc_optimal: accuracy(pred, truth, Mapping::Optimal)?,
            nmi: nmi(pred, truth)?,
            ari: if pred.len() >= 2 { ari(pred, truth)? } else { 1.0 },
        })
    }
}
