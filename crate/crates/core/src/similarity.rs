//! Edge embeddings, network-to-network similarity, and the pairwise matrix.
//!
//! An edge `a -> b` is embedded as `concat(embed(a), embed(b))`. Two networks
//! are compared by the mean cosine over all cross pairs of their edges.

use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AtomicAssertion, CausalNetwork, SimilarityMatrix};
use crate::providers::{Embedder, ProviderError};

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("vector lengths differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("cosine is undefined for a zero vector")]
    ZeroVector,
    #[error("network {0:?} has no edges")]
    EmptyEdgeSet(String),
    #[error("edge ({src},{dst}) is not valid in network {emr_id:?}")]
    InvalidEdge { emr_id: String, src: usize, dst: usize },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Node-embedding choices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedOptions {
    /// Append `", <relative time>"` to the statement before embedding.
    pub embed_timing: bool,
    /// Scale each node embedding to unit length before concatenation, so
    /// both halves of an edge vector carry equal weight.
    pub normalize_nodes: bool,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        Self {
            embed_timing: true,
            normalize_nodes: true,
        }
    }
}

pub fn node_text(a: &AtomicAssertion, opts: &EmbedOptions) -> String {
    if opts.embed_timing {
        a.text_with_timing()
    } else {
        a.assert.clone()
    }
}

/// Concatenated embedding of an edge's source and target nodes (length `2d`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeEmbedding {
    pub vector: Vec<f64>,
}

impl EdgeEmbedding {
    pub fn concat(src: &[f64], dst: &[f64]) -> Self {
        let mut vector = Vec::with_capacity(src.len() + dst.len());
        vector.extend_from_slice(src);
        vector.extend_from_slice(dst);
        Self { vector }
    }

    pub fn len(&self) -> usize {
        self.vector.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vector.is_empty()
    }
}

fn node_vector<E: Embedder + ?Sized>(
    embedder: &E,
    text: &str,
    opts: &EmbedOptions,
) -> Result<Vec<f64>, SimilarityError> {
    let v = embedder.embed(text)?;
    Ok(if opts.normalize_nodes { v.normalized() } else { v }.into_values())
}

pub fn edge_embedding<E: Embedder + ?Sized>(
    net: &CausalNetwork,
    edge: (usize, usize),
    embedder: &E,
    opts: &EmbedOptions,
) -> Result<EdgeEmbedding, SimilarityError> {
    let (src, dst) = edge;
    let invalid = || SimilarityError::InvalidEdge {
        emr_id: net.emr_id.clone(),
        src,
        dst,
    };
    let a = net.nodes.get(src).ok_or_else(invalid)?;
    let b = net.nodes.get(dst).ok_or_else(invalid)?;
    let va = node_vector(embedder, &node_text(a, opts), opts)?;
    let vb = node_vector(embedder, &node_text(b, opts), opts)?;
    Ok(EdgeEmbedding::concat(&va, &vb))
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Cosine similarity, clamped to `[-1, 1]`.
///
/// Computed as `u.v / sqrt(|u|^2 |v|^2)`, which is symmetric in its
/// arguments bit for bit and returns exactly 1 for `cosine(u, u)`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, SimilarityError> {
    if u.len() != v.len() {
        return Err(SimilarityError::DimensionMismatch(u.len(), v.len()));
    }
    let uu = dot(u, u);
    let vv = dot(v, v);
    if uu == 0.0 || vv == 0.0 {
        return Err(SimilarityError::ZeroVector);
    }
    let denom_sq = uu * vv;
    let denom = if denom_sq.is_finite() && denom_sq > 0.0 {
        denom_sq.sqrt()
    } else {
        uu.sqrt() * vv.sqrt()
    };
    Ok((dot(u, v) / denom).clamp(-1.0, 1.0))
}

/// Edge embeddings of one network, computed once and reused for every pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkEmbedding {
    pub emr_id: String,
    pub edges: Vec<EdgeEmbedding>,
}

/// Embeds every edge of `net`, looking up each distinct node text once.
pub fn embed_network<E: Embedder + ?Sized>(
    net: &CausalNetwork,
    embedder: &E,
    opts: &EmbedOptions,
) -> Result<NetworkEmbedding, SimilarityError> {
    let mut cache: HashMap<String, Vec<f64>> = HashMap::new();
    embed_network_with(net, embedder, opts, &mut cache)
}

fn embed_network_with<E: Embedder + ?Sized>(
    net: &CausalNetwork,
    embedder: &E,
    opts: &EmbedOptions,
    cache: &mut HashMap<String, Vec<f64>>,
) -> Result<NetworkEmbedding, SimilarityError> {
    let mut edges = Vec::with_capacity(net.edges.len());
    for &(src, dst) in &net.edges {
        let mut half = |idx: usize| -> Result<Vec<f64>, SimilarityError> {
            let node = net.nodes.get(idx).ok_or_else(|| SimilarityError::InvalidEdge {
                emr_id: net.emr_id.clone(),
                src,
                dst,
            })?;
            let text = node_text(node, opts);
            if let Some(v) = cache.get(&text) {
                return Ok(v.clone());
            }
            let v = node_vector(embedder, &text, opts)?;
            cache.insert(text, v.clone());
            Ok(v)
        };
        let a = half(src)?;
        let b = half(dst)?;
        edges.push(EdgeEmbedding::concat(&a, &b));
    }
    Ok(NetworkEmbedding {
        emr_id: net.emr_id.clone(),
        edges,
    })
}

fn total_cmp_edges(a: &[EdgeEmbedding], b: &[EdgeEmbedding]) -> Ordering {
    let flat =
        |x: &[EdgeEmbedding]| -> Vec<u64> { x.iter().flat_map(|e| e.vector.iter().map(|v| v.to_bits())).collect() };
    a.len().cmp(&b.len()).then_with(|| flat(a).cmp(&flat(b)))
}

/// Mean cosine over all `|E_k| * |E_l|` edge pairs.
///
/// The two arguments are put in a canonical order before summing, so the
/// result is the same `f64` whichever way round they are passed.
pub fn network_similarity(a: &NetworkEmbedding, b: &NetworkEmbedding) -> Result<f64, SimilarityError> {
    if a.edges.is_empty() {
        return Err(SimilarityError::EmptyEdgeSet(a.emr_id.clone()));
    }
    if b.edges.is_empty() {
        return Err(SimilarityError::EmptyEdgeSet(b.emr_id.clone()));
    }
    let (x, y) = match total_cmp_edges(&a.edges, &b.edges) {
        Ordering::Greater => (b, a),
        _ => (a, b),
    };
    let mut sum = 0.0;
    for e in &x.edges {
        for f in &y.edges {
            sum += cosine(&e.vector, &f.vector)?;
        }
    }
    let pairs = (x.edges.len() * y.edges.len()) as f64;
    Ok((sum / pairs).clamp(-1.0, 1.0))
}

/// Convenience wrapper embedding both networks first.
pub fn network_similarity_of<E: Embedder + ?Sized>(
    a: &CausalNetwork,
    b: &CausalNetwork,
    embedder: &E,
    opts: &EmbedOptions,
) -> Result<f64, SimilarityError> {
    let mut cache = HashMap::new();
    let ea = embed_network_with(a, embedder, opts, &mut cache)?;
    let eb = embed_network_with(b, embedder, opts, &mut cache)?;
    network_similarity(&ea, &eb)
}

/// Full pairwise matrix. Each unordered pair is computed once and mirrored;
/// the diagonal holds each network's self-similarity.
pub fn similarity_matrix<E: Embedder + ?Sized>(
    nets: &[CausalNetwork],
    embedder: &E,
    opts: &EmbedOptions,
) -> Result<SimilarityMatrix, SimilarityError> {
    if let Some(empty) = nets.iter().find(|n| !n.has_edges()) {
        return Err(SimilarityError::EmptyEdgeSet(empty.emr_id.clone()));
    }
    let mut cache = HashMap::new();
    let embedded = nets
        .iter()
        .map(|n| embed_network_with(n, embedder, opts, &mut cache))
        .collect::<Result<Vec<_>, _>>()?;
    matrix_from_embeddings(&embedded)
}

pub fn matrix_from_embeddings(embedded: &[NetworkEmbedding]) -> Result<SimilarityMatrix, SimilarityError> {
    let k = embedded.len();
    let rows: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|i| {
            (i..k)
                .map(|j| network_similarity(&embedded[i], &embedded[j]))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let ids = embedded.iter().map(|e| e.emr_id.clone()).collect();
    Ok(SimilarityMatrix::from_upper(ids, |i, j| rows[i][j - i]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::{CachedEmbedder, MockEmbedder};
    use proptest::prelude::*;

    fn net(id: &str, texts: &[&str], edges: Vec<(usize, usize)>) -> CausalNetwork {
        let nodes = texts
            .iter()
            .enumerate()
            .map(|(i, t)| AtomicAssertion::new(i, *t, ""))
            .collect();
        CausalNetwork::new(id, nodes, edges)
    }

    /// Independent reference: embeds each node directly and runs the double
    /// loop with its own cosine.
    fn oracle(a: &CausalNetwork, b: &CausalNetwork, m: &MockEmbedder) -> f64 {
        let edge_vec = |n: &CausalNetwork, (s, d): (usize, usize)| {
            let mut v = m.embed(&n.nodes[s].text_with_timing()).unwrap().into_values();
            v.extend(m.embed(&n.nodes[d].text_with_timing()).unwrap().into_values());
            v
        };
        let mut total = 0.0;
        for &e in &a.edges {
            for &f in &b.edges {
                let (u, v) = (edge_vec(a, e), edge_vec(b, f));
                let d: f64 = u.iter().zip(&v).map(|(x, y)| x * y).sum();
                let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                total += d / (nu * nv);
            }
        }
        total / (a.edges.len() * b.edges.len()) as f64
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[0.3, -2.0, 5.0], &[0.3, -2.0, 5.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert!(matches!(
            cosine(&[1.0], &[1.0, 2.0]),
            Err(SimilarityError::DimensionMismatch(1, 2))
        ));
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 2.0]),
            Err(SimilarityError::ZeroVector)
        ));
    }

    #[test]
    fn edge_embedding_is_concatenation() {
        let m = MockEmbedder::new(1);
        let n = net("a", &["dust exposure", "pneumoconiosis"], vec![(0, 1), (1, 0)]);
        let opts = EmbedOptions::default();
        let fwd = edge_embedding(&n, (0, 1), &m, &opts).unwrap();
        assert_eq!(fwd.len(), 16);
        assert_eq!(
            &fwd.vector[..8],
            m.embed("dust exposure").unwrap().normalized().values()
        );
        let back = edge_embedding(&n, (1, 0), &m, &opts).unwrap();
        assert_ne!(fwd, back);
        assert_eq!(&fwd.vector[..8], &back.vector[8..]);
        assert_eq!(&fwd.vector[8..], &back.vector[..8]);

        let twin = net("b", &["dust exposure", "pneumoconiosis"], vec![(0, 1)]);
        assert_eq!(edge_embedding(&twin, (0, 1), &m, &opts).unwrap(), fwd);
        assert!(edge_embedding(&twin, (0, 5), &m, &opts).is_err());
    }

    #[test]
    fn timing_participates_when_enabled() {
        let m = MockEmbedder::new(1);
        let mut n = net("a", &["cough", "fever"], vec![(0, 1)]);
        n.nodes[0].relative_time = "3 days ago".into();
        let with = edge_embedding(&n, (0, 1), &m, &EmbedOptions::default()).unwrap();
        let without = edge_embedding(
            &n,
            (0, 1),
            &m,
            &EmbedOptions {
                embed_timing: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(
            &with.vector[..8],
            m.embed("cough, 3 days ago").unwrap().normalized().values()
        );
        assert_eq!(&without.vector[..8], m.embed("cough").unwrap().normalized().values());
    }

    #[test]
    fn single_edge_similarities() {
        let m = MockEmbedder::new(5);
        let opts = EmbedOptions::default();
        let a = net("a", &["x", "y"], vec![(0, 1)]);
        assert_eq!(network_similarity_of(&a, &a, &m, &opts).unwrap(), 1.0);
        let b = net("b", &["p", "q"], vec![(0, 1)]);
        let c = cosine(
            &edge_embedding(&a, (0, 1), &m, &opts).unwrap().vector,
            &edge_embedding(&b, (0, 1), &m, &opts).unwrap().vector,
        )
        .unwrap();
        assert_eq!(network_similarity_of(&a, &b, &m, &opts).unwrap(), c);
    }

    #[test]
    fn two_by_three_matches_brute_force() {
        let m = MockEmbedder::new(11);
        let a = net(
            "a",
            &["welding fume exposure", "pneumoconiosis", "cough"],
            vec![(0, 1), (1, 2)],
        );
        let b = net(
            "b",
            &["smoking", "copd", "dyspnea", "cough"],
            vec![(0, 1), (1, 2), (1, 3)],
        );
        let got = network_similarity_of(&a, &b, &m, &EmbedOptions::default()).unwrap();
        assert!((got - oracle(&a, &b, &m)).abs() < 1e-12);
    }

    #[test]
    fn zero_edge_networks_are_rejected() {
        let m = MockEmbedder::new(0);
        let a = net("a", &["x", "y"], vec![(0, 1)]);
        let e = net("empty", &["x"], vec![]);
        assert!(matches!(
            network_similarity_of(&a, &e, &m, &EmbedOptions::default()),
            Err(SimilarityError::EmptyEdgeSet(id)) if id == "empty"
        ));
        assert!(matches!(
            similarity_matrix(&[a, e], &m, &EmbedOptions::default()),
            Err(SimilarityError::EmptyEdgeSet(id)) if id == "empty"
        ));
    }

    #[test]
    fn matrix_examples() {
        let m = MockEmbedder::new(2);
        let opts = EmbedOptions::default();
        let one = similarity_matrix(&[net("a", &["x", "y"], vec![(0, 1)])], &m, &opts).unwrap();
        assert_eq!(one.values, vec![vec![1.0]]);

        let nets = vec![
            net("a", &["x", "y"], vec![(0, 1)]),
            net("b", &["y", "z"], vec![(0, 1)]),
            net("c", &["x", "z"], vec![(0, 1)]),
        ];
        let mat = similarity_matrix(&nets, &m, &opts).unwrap();
        assert!(mat.is_symmetric());
        for i in 0..3 {
            for j in 0..3 {
                assert!((mat.get(i, j) - oracle(&nets[i], &nets[j], &m)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn multi_edge_self_similarity_below_one() {
        let m = MockEmbedder::new(4);
        let a = net("a", &["x", "y", "z"], vec![(0, 1), (1, 2)]);
        let s = network_similarity_of(&a, &a, &m, &EmbedOptions::default()).unwrap();
        assert!(s < 1.0);
    }

    #[test]
    fn cache_is_transparent() {
        let nets = vec![
            net("a", &["x", "y", "z"], vec![(0, 1), (2, 1)]),
            net("b", &["y", "z"], vec![(0, 1)]),
        ];
        let raw = similarity_matrix(&nets, &MockEmbedder::new(3), &EmbedOptions::default()).unwrap();
        let cached = similarity_matrix(
            &nets,
            &CachedEmbedder::new(MockEmbedder::new(3)),
            &EmbedOptions::default(),
        )
        .unwrap();
        assert_eq!(raw, cached);
    }

    fn arb_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0f64..10.0, len)
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_bounded(u in arb_vec(6), v in arb_vec(6)) {
            if let (Ok(a), Ok(b)) = (cosine(&u, &v), cosine(&v, &u)) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
                prop_assert!((-1.0..=1.0).contains(&a));
            }
        }

        #[test]
        fn cosine_self_is_exactly_one(u in arb_vec(16)) {
            if u.iter().any(|x| *x != 0.0) {
                prop_assert_eq!(cosine(&u, &u).unwrap(), 1.0);
            }
        }
    }
}
