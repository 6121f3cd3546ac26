use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::{cosine_similarity_matrix, CosineBasis, ExpertLibrary};
use crate::numerics::Matrix;

/// One agglomeration step: the two clusters (named by their lowest member) and
/// their average-linkage distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkStep {
    pub left: usize,
    pub right: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// `assignment[i]` is the cluster of expert `i`; clusters are numbered by their
    /// lowest member index.
    pub assignment: Vec<usize>,
    pub k: usize,
    pub trace: Vec<LinkStep>,
}

impl ClusterAssignment {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == cluster).collect()
    }

    /// All clusters in label order.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        (0..self.k).map(|c| self.members(c)).collect()
    }

    /// Singleton clusters in expert order.
    pub fn singletons(n: usize) -> Self {
        Self {
            assignment: (0..n).collect(),
            k: n,
            trace: Vec::new(),
        }
    }
}

/// Average-linkage agglomerative clustering of experts on `1 − cosine`.
pub fn mbc_cluster(library: &ExpertLibrary, k: usize, basis: CosineBasis) -> Result<ClusterAssignment> {
    let sim = cosine_similarity_matrix(library, basis)?;
    cluster_similarity(&sim, k)
}

/// Same procedure on a precomputed similarity matrix.
pub fn cluster_similarity(sim: &Matrix, k: usize) -> Result<ClusterAssignment> {
    let n = sim.rows();
    if k == 0 || k > n {
        return Err(Error::Invalid(format!("cluster count {k} outside 1..={n}")));
    }
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut trace = Vec::new();
    while clusters.len() > k {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..clusters.len() {
            for b in (a + 1)..clusters.len() {
                let mut total = 0.0;
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        total += 1.0 - sim[(i, j)];
                    }
                }
                let d = total / (clusters[a].len() * clusters[b].len()) as f64;
                // clusters stay sorted by lowest member, so strict < keeps the
                // lexicographically smallest pair on ties
                if best.is_none_or(|(_, _, bd)| d < bd) {
                    best = Some((a, b, d));
                }
            }
        }
        let (a, b, d) = best.expect("at least two clusters");
        trace.push(LinkStep {
            left: clusters[a][0],
            right: clusters[b][0],
            distance: d,
        });
        let moved = clusters.remove(b);
        clusters[a].extend(moved);
        clusters[a].sort_unstable();
    }
    let mut assignment = vec![0; n];
    for (c, members) in clusters.iter().enumerate() {
        for &i in members {
            assignment[i] = c;
        }
    }
    Ok(ClusterAssignment { assignment, k, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert::LoraAdapter;
    use crate::lm::{BaseLm, LmConfig};
    use crate::numerics::{Params, Rng};
    use std::collections::BTreeSet;

    fn partition(c: &ClusterAssignment) -> BTreeSet<BTreeSet<usize>> {
        c.clusters().into_iter().map(|m| m.into_iter().collect()).collect()
    }

    fn grouped_library(perm: &[usize]) -> ExpertLibrary {
        let base = BaseLm::build(LmConfig::default(), &mut Rng::new(0)).unwrap();
        let mut rng = Rng::new(11);
        let centers: Vec<LoraAdapter> = (0..2)
            .map(|_| {
                let mut a = LoraAdapter::zeros(&base, 4, 16.0).unwrap();
                for v in a.blocks_mut().into_iter().flatten() {
                    *v = rng.normal();
                }
                a
            })
            .collect();
        // experts 0..3 near center 0, 3..6 near center 1
        let experts: Vec<LoraAdapter> = (0..6)
            .map(|i| {
                let mut a = centers[i / 3].clone();
                for v in a.blocks_mut().into_iter().flatten() {
                    *v += 0.01 * rng.normal();
                }
                a
            })
            .collect();
        ExpertLibrary::new(perm.iter().map(|&i| (format!("e{i}"), experts[i].clone())).collect()).unwrap()
    }

    #[test]
    fn extremes() {
        let lib = grouped_library(&[0, 1, 2, 3, 4, 5]);
        let c = mbc_cluster(&lib, 6, CosineBasis::Factors).unwrap();
        assert_eq!(c.assignment, vec![0, 1, 2, 3, 4, 5]);
        let c = mbc_cluster(&lib, 1, CosineBasis::Factors).unwrap();
        assert_eq!(c.assignment, vec![0; 6]);
        assert_eq!(c.trace.len(), 5);
        assert!(mbc_cluster(&lib, 0, CosineBasis::Factors).is_err());
        assert!(mbc_cluster(&lib, 7, CosineBasis::Factors).is_err());
    }

    #[test]
    fn recovers_near_duplicate_groups() {
        let lib = grouped_library(&[0, 1, 2, 3, 4, 5]);
        let c = mbc_cluster(&lib, 2, CosineBasis::Factors).unwrap();
        assert_eq!(c.assignment, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn invariant_under_relabeling() {
        let perm = [4, 0, 5, 2, 1, 3];
        let lib = grouped_library(&[0, 1, 2, 3, 4, 5]);
        let plib = grouped_library(&perm);
        for k in 1..=6 {
            let c = mbc_cluster(&lib, k, CosineBasis::Factors).unwrap();
            let pc = mbc_cluster(&plib, k, CosineBasis::Factors).unwrap();
            let mapped: BTreeSet<BTreeSet<usize>> = partition(&pc)
                .into_iter()
                .map(|s| s.into_iter().map(|i| perm[i]).collect())
                .collect();
            assert_eq!(mapped, partition(&c));
        }
    }

    #[test]
    fn ties_merge_lowest_pair() {
        let sim = Matrix::from_fn(4, 4, |i, j| if i == j { 1.0 } else { 0.5 });
        let c = cluster_similarity(&sim, 3).unwrap();
        assert_eq!(c.assignment, vec![0, 0, 1, 2]);
    }
}
