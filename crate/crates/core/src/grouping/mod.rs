//! Source-subject grouping by Pearson correlation of label-free feature
//! signatures.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::features::{DeFeatureSet, FEATURE_DIM};

/// Pearson correlation of two equal-length vectors, clamped to `[-1, 1]`.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(arg_err!("pearson: lengths {} and {} differ", a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(arg_err!("pearson needs at least 2 points, got {}", a.len()));
    }
    let m = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / m, b.iter().sum::<f64>() / m);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("pearson: constant input vector".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Mean DE vector of one subject, electrode-major and band-minor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectSignature {
    pub subject_id: String,
    pub vector: Vec<f64>,
}

pub fn signature(features: &DeFeatureSet) -> Result<SubjectSignature> {
    if features.entries.is_empty() {
        return Err(arg_err!("subject {} has no feature entries", features.subject_id));
    }
    let mut sum = vec![0.0; FEATURE_DIM];
    for e in &features.entries {
        if e.de.len() != FEATURE_DIM {
            return Err(Error::Dimension(format!("entry has {} features, expected {FEATURE_DIM}", e.de.len())));
        }
        for (s, v) in sum.iter_mut().zip(&e.de) {
            *s += v;
        }
    }
    let n = features.entries.len() as f64;
    Ok(SubjectSignature { subject_id: features.subject_id.clone(), vector: sum.into_iter().map(|s| s / n).collect() })
}

/// `k` group sizes summing to `n`, as equal as possible, largest first.
pub fn near_equal_sizes(n: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(arg_err!("cannot split {n} subjects into {k} non-empty groups"));
    }
    Ok((0..k).map(|i| n / k + usize::from(i < n % k)).collect())
}

/// Source subjects split into `k` groups, with the correlation matrix that
/// produced the split. `subjects` (ascending id) indexes the rows of `corr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainPartition {
    pub groups: Vec<Vec<String>>,
    pub subjects: Vec<String>,
    pub corr: Vec<Vec<f64>>,
    pub k: usize,
}

impl DomainPartition {
    /// Group index of `subject_id`, if it is one of the grouped sources.
    pub fn group_of(&self, subject_id: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.iter().any(|s| s == subject_id))
    }
}

/// Can clusters of these sizes still grow into groups of exactly `budgets`?
/// Singletons are free; multi-member clusters each need their own budget.
fn feasible(cluster_sizes: impl Iterator<Item = usize>, budgets: &[usize]) -> bool {
    let mut sizes: Vec<usize> = cluster_sizes.filter(|&s| s > 1).collect();
    if sizes.len() > budgets.len() {
        return false;
    }
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    sizes.iter().zip(budgets).all(|(s, b)| s <= b)
}

/// Greedy average-linkage agglomeration under fixed group sizes.
///
/// Starting from singletons, repeatedly merge the two clusters with the
/// highest mean pairwise correlation among merges that keep the requested
/// sizes reachable; ties go to the lexicographically smallest sorted member
/// ids. The result does not depend on the order of `signatures`.
pub fn partition(signatures: &[SubjectSignature], sizes: &[usize]) -> Result<DomainPartition> {
    let n = signatures.len();
    if sizes.is_empty() || sizes.contains(&0) || sizes.iter().sum::<usize>() != n {
        return Err(arg_err!("group sizes {sizes:?} infeasible for {n} subjects"));
    }
    let mut sorted: Vec<&SubjectSignature> = signatures.iter().collect();
    sorted.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    if let Some(w) = sorted.windows(2).find(|w| w[0].subject_id == w[1].subject_id) {
        return Err(arg_err!("duplicate subject id {}", w[0].subject_id));
    }
    let mut corr = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let r = pearson(&sorted[i].vector, &sorted[j].vector)?;
            corr[i][j] = r;
            corr[j][i] = r;
        }
    }
    let mut budgets = sizes.to_vec();
    budgets.sort_unstable_by(|a, b| b.cmp(a));

    // Clusters hold ascending subject indices; index order equals id order.
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let linkage = |a: &[usize], b: &[usize]| -> f64 {
        let sum: f64 = a.iter().flat_map(|&i| b.iter().map(move |&j| (i, j))).map(|(i, j)| corr[i][j]).sum();
        sum / (a.len() * b.len()) as f64
    };
    let done = |clusters: &Vec<Vec<usize>>| {
        let mut s: Vec<usize> = clusters.iter().map(Vec::len).collect();
        s.sort_unstable_by(|a, b| b.cmp(a));
        s == budgets
    };
    while !done(&clusters) {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let merged = clusters[a].len() + clusters[b].len();
                let rest = clusters.iter().enumerate().filter(|&(i, _)| i != a && i != b).map(|(_, c)| c.len());
                if !feasible(rest.chain(std::iter::once(merged)), &budgets) {
                    continue;
                }
                let aff = linkage(&clusters[a], &clusters[b]);
                let better = match best {
                    None => true,
                    Some((ba, x, y)) => match aff.total_cmp(&ba) {
                        Ordering::Greater => true,
                        Ordering::Less => false,
                        Ordering::Equal => (&clusters[a], &clusters[b]) < (&clusters[x], &clusters[y]),
                    },
                };
                if better {
                    best = Some((aff, a, b));
                }
            }
        }
        let (_, a, b) = best.ok_or_else(|| arg_err!("no feasible merge towards sizes {budgets:?}"))?;
        let taken = clusters.remove(b);
        clusters[a].extend(taken);
        clusters[a].sort_unstable();
        // Keep clusters ordered by their smallest member for the tie-break.
        clusters.sort();
    }
    clusters.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    let ids: Vec<String> = sorted.iter().map(|s| s.subject_id.clone()).collect();
    Ok(DomainPartition {
        groups: clusters.iter().map(|c| c.iter().map(|&i| ids[i].clone()).collect()).collect(),
        subjects: ids,
        corr,
        k: sizes.len(),
    })
}
