//! Stage 2c: average-linkage agglomeration, medoids, weights, and the
//! per-disease knowledge built from them.

use thiserror::Error;

use crate::model::{CausalNetwork, ClusterResult, DiseaseKnowledge, KnowledgeEntry, SimilarityMatrix};
use crate::providers::Embedder;
use crate::similarity::{similarity_matrix, EmbedOptions, SimilarityError};

pub const DEFAULT_CUTOFF: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("cutoff {0} is outside [0, 2]")]
    InvalidCutoff(f64),
    #[error("similarity matrix is empty")]
    EmptyMatrix,
    #[error("similarity matrix is not square, symmetric and finite")]
    InvalidMatrix,
    #[error("cluster has no members")]
    EmptyCluster,
    #[error("no network with at least one edge for disease {0:?}")]
    NoUsableNetworks(String),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

/// Mean of `1 - sim` over all cross pairs, summed in ascending member order.
fn average_linkage(matrix: &SimilarityMatrix, a: &[usize], b: &[usize]) -> f64 {
    let mut sum = 0.0;
    for &i in a {
        for &j in b {
            sum += matrix.distance(i, j);
        }
    }
    sum / (a.len() * b.len()) as f64
}

/// Agglomerates singletons by repeatedly merging the closest pair of
/// clusters under average linkage, stopping once the closest pair is
/// farther apart than `cutoff`.
///
/// Ties go to the pair whose smallest members are lexicographically
/// smallest. Clusters are numbered by their smallest member.
pub fn cluster_networks(matrix: &SimilarityMatrix, cutoff: f64) -> Result<ClusterResult, ClusterError> {
    if !(0.0..=2.0).contains(&cutoff) {
        return Err(ClusterError::InvalidCutoff(cutoff));
    }
    let k = matrix.len();
    if k == 0 {
        return Err(ClusterError::EmptyMatrix);
    }
    if !matrix.is_symmetric() || !matrix.all_finite() {
        return Err(ClusterError::InvalidMatrix);
    }

    // Kept sorted by smallest member; each member list is ascending.
    let mut clusters: Vec<Vec<usize>> = (0..k).map(|i| vec![i]).collect();
    while clusters.len() > 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let d = average_linkage(matrix, &clusters[i], &clusters[j]);
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, i, j));
                }
            }
        }
        let (d, i, j) = best.expect("at least two clusters");
        if d > cutoff {
            break;
        }
        let absorbed = clusters.remove(j);
        clusters[i].extend(absorbed);
        clusters[i].sort_unstable();
    }

    let mut assignments = vec![0; k];
    for (c, members) in clusters.iter().enumerate() {
        for &m in members {
            assignments[m] = c;
        }
    }
    Ok(ClusterResult {
        assignments,
        network_ids: matrix.network_ids.clone(),
        cluster_count: clusters.len(),
        cutoff,
    })
}

/// Sum of distances from `member` to the other members of its cluster.
pub fn exclusive_distance_sum(member: usize, members: &[usize], matrix: &SimilarityMatrix) -> f64 {
    members
        .iter()
        .filter(|&&j| j != member)
        .map(|&j| matrix.distance(member, j))
        .sum()
}

/// Member minimizing the summed distance to the other members. The lowest
/// index wins ties.
pub fn medoid(members: &[usize], matrix: &SimilarityMatrix) -> Result<usize, ClusterError> {
    let mut sorted = members.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut best: Option<(f64, usize)> = None;
    for &m in &sorted {
        let s = exclusive_distance_sum(m, &sorted, matrix);
        if best.is_none_or(|(bs, _)| s < bs) {
            best = Some((s, m));
        }
    }
    best.map(|(_, m)| m).ok_or(ClusterError::EmptyCluster)
}

/// Fraction of all networks that fall in each cluster.
pub fn cluster_weights(result: &ClusterResult) -> Vec<f64> {
    let sizes = result.sizes();
    let total: usize = sizes.iter().sum();
    sizes.iter().map(|&s| s as f64 / total as f64).collect()
}

/// Clusters one disease's networks and keeps each cluster's medoid with its
/// weight. Networks without edges are skipped.
pub fn build_disease_knowledge<E: Embedder + ?Sized>(
    disease_code: &str,
    nets: &[CausalNetwork],
    embedder: &E,
    opts: &EmbedOptions,
    cutoff: f64,
) -> Result<DiseaseKnowledge, ClusterError> {
    if !(0.0..=2.0).contains(&cutoff) {
        return Err(ClusterError::InvalidCutoff(cutoff));
    }
    let usable: Vec<&CausalNetwork> = nets
        .iter()
        .filter(|n| {
            if !n.has_edges() {
                log::warn!("{disease_code}: skipping network {:?} with no edges", n.emr_id);
            }
            n.has_edges()
        })
        .collect();
    if usable.is_empty() {
        return Err(ClusterError::NoUsableNetworks(disease_code.to_string()));
    }
    let owned: Vec<CausalNetwork> = usable.iter().map(|n| (*n).clone()).collect();
    let matrix = similarity_matrix(&owned, embedder, opts)?;
    knowledge_from_matrix(disease_code, &owned, &matrix, cutoff)
}

/// Same as [`build_disease_knowledge`] over a precomputed matrix whose rows
/// align with `nets`.
pub fn knowledge_from_matrix(
    disease_code: &str,
    nets: &[CausalNetwork],
    matrix: &SimilarityMatrix,
    cutoff: f64,
) -> Result<DiseaseKnowledge, ClusterError> {
    let result = cluster_networks(matrix, cutoff)?;
    let weights = cluster_weights(&result);
    let mut entries = Vec::with_capacity(result.cluster_count);
    for (members, weight) in result.members().into_iter().zip(weights) {
        let center = medoid(&members, matrix)?;
        let network = nets[center].clone();
        entries.push(KnowledgeEntry {
            weight,
            member_count: members.len(),
            medoid_emr_id: network.emr_id.clone(),
            network,
        });
    }
    entries.sort_by(|a, b| {
        b.weight
            .total_cmp(&a.weight)
            .then_with(|| a.medoid_emr_id.cmp(&b.medoid_emr_id))
    });
    Ok(DiseaseKnowledge {
        disease_code: disease_code.to_string(),
        cutoff,
        entries,
    })
}
