use std::collections::VecDeque;

use rand_chacha::ChaCha8Rng;

use super::{Activation, EncoderConfig, EncoderError, Pooling};
use crate::diffmath::{Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};

/// Directed multigraph with typed edges `(src, relation, dst)`.
///
/// Relation 0 is the self relation and never appears on an edge, so edge
/// relation ids live in `1..num_relations`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelGraph {
    num_nodes: usize,
    num_relations: usize,
    edges: Vec<(usize, usize, usize)>,
    node_init: Tensor,
}

impl RelGraph {
    /// Validates the edge list and derives `node_dim` structural features per node.
    pub fn new(
        num_nodes: usize,
        num_relations: usize,
        edges: Vec<(usize, usize, usize)>,
        node_dim: usize,
    ) -> Result<Self, EncoderError> {
        validate(num_nodes, num_relations, &edges)?;
        let mut g = Self {
            num_nodes,
            num_relations,
            edges,
            node_init: Tensor::zeros(&[num_nodes, node_dim.max(1)]),
        };
        g.node_init = structural_init(&g, node_dim);
        Ok(g)
    }

    /// Uses caller-supplied node features instead of structural ones.
    pub fn with_features(
        num_nodes: usize,
        num_relations: usize,
        edges: Vec<(usize, usize, usize)>,
        node_init: Tensor,
    ) -> Result<Self, EncoderError> {
        validate(num_nodes, num_relations, &edges)?;
        if node_init.rank() != 2 || node_init.rows() != num_nodes {
            return Err(EncoderError::FeatureWidth {
                expected: num_nodes,
                found: node_init.rows(),
            });
        }
        Ok(Self {
            num_nodes,
            num_relations,
            edges,
            node_init,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn edges(&self) -> &[(usize, usize, usize)] {
        &self.edges
    }

    pub fn node_init(&self) -> &Tensor {
        &self.node_init
    }

    /// Renumbers node `i` as `perm[i]`, moving feature rows along with it.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.num_nodes);
        let edges = self
            .edges
            .iter()
            .map(|&(s, r, d)| (perm[s], r, perm[d]))
            .collect();
        let d = self.node_init.cols();
        let mut data = vec![0.0; self.num_nodes * d];
        for (i, &p) in perm.iter().enumerate() {
            data[p * d..(p + 1) * d].copy_from_slice(self.node_init.row(i));
        }
        Self {
            num_nodes: self.num_nodes,
            num_relations: self.num_relations,
            edges,
            node_init: Tensor::from_parts(vec![self.num_nodes, d], data),
        }
    }
}

fn validate(
    num_nodes: usize,
    num_relations: usize,
    edges: &[(usize, usize, usize)],
) -> Result<(), EncoderError> {
    if num_nodes == 0 {
        return Err(EncoderError::EmptyGraph);
    }
    for &(src, rel, dst) in edges {
        if src >= num_nodes || dst >= num_nodes {
            return Err(EncoderError::DanglingEdge {
                src,
                rel,
                dst,
                num_nodes,
            });
        }
        if rel == 0 || rel >= num_relations {
            return Err(EncoderError::RelationOutOfRange { rel, num_relations });
        }
    }
    Ok(())
}

/// Deterministic per-node features:
/// `[in-degree, out-degree, BFS depth from node 0 / max depth, count of incident
/// edges per relation 1..R]`, zero-padded or truncated to `d_in` columns.
///
/// Depth is measured on the undirected graph. Nodes unreachable from node 0
/// get depth 1.0. Only the depth column depends on node numbering.
pub fn structural_init(g: &RelGraph, d_in: usize) -> Tensor {
    let n = g.num_nodes;
    let width = d_in.max(1);
    let mut in_deg = vec![0.0; n];
    let mut out_deg = vec![0.0; n];
    let hist_len = g.num_relations.saturating_sub(1);
    let mut hist = vec![vec![0.0; hist_len]; n];
    let mut adj = vec![Vec::new(); n];
    for &(s, r, d) in &g.edges {
        out_deg[s] += 1.0;
        in_deg[d] += 1.0;
        hist[s][r - 1] += 1.0;
        hist[d][r - 1] += 1.0;
        adj[s].push(d);
        adj[d].push(s);
    }

    let mut depth: Vec<Option<usize>> = vec![None; n];
    depth[0] = Some(0);
    let mut queue = VecDeque::from([0]);
    while let Some(u) = queue.pop_front() {
        let du = depth[u].unwrap_or(0);
        for &v in &adj[u] {
            if depth[v].is_none() {
                depth[v] = Some(du + 1);
                queue.push_back(v);
            }
        }
    }
    let max_depth = depth.iter().flatten().copied().max().unwrap_or(0);

    let mut data = Vec::with_capacity(n * width);
    for i in 0..n {
        let norm_depth = match depth[i] {
            Some(d) if max_depth > 0 => d as f64 / max_depth as f64,
            Some(_) => 0.0,
            None => 1.0,
        };
        let mut row = vec![in_deg[i], out_deg[i], norm_depth];
        row.extend_from_slice(&hist[i]);
        row.resize(width, 0.0);
        data.extend(row);
    }
    Tensor::from_parts(vec![n, width], data)
}

#[derive(Clone, Debug)]
struct GnnLayer {
    self_w: ParamId,
    forward: Vec<ParamId>,
    inverse: Vec<ParamId>,
}

/// Relational graph convolution:
/// `h_i' = σ(W_0 h_i + Σ_r Σ_{j∈N_r(i)} W_r h_j / |N_r(i)|)`.
///
/// Each edge type contributes two relations, one per direction, so
/// information flows both ways along an edge.
#[derive(Clone, Debug)]
pub struct GraphEncoder {
    layers: Vec<GnnLayer>,
    num_relations: usize,
    node_dim: usize,
    activation: Activation,
    pooling: Pooling,
}

impl GraphEncoder {
    pub fn new(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        num_relations: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(cfg.gnn_layers);
        for l in 0..cfg.gnn_layers {
            let fan_in = if l == 0 { cfg.node_dim } else { cfg.d_model };
            let self_w = store.add_uniform(format!("graph.l{l}.self"), fan_in, cfg.d_model, rng);
            let mut forward = Vec::new();
            let mut inverse = Vec::new();
            for r in 1..num_relations {
                forward.push(store.add_uniform(
                    format!("graph.l{l}.rel{r}"),
                    fan_in,
                    cfg.d_model,
                    rng,
                ));
                inverse.push(store.add_uniform(
                    format!("graph.l{l}.rel{r}.inv"),
                    fan_in,
                    cfg.d_model,
                    rng,
                ));
            }
            layers.push(GnnLayer {
                self_w,
                forward,
                inverse,
            });
        }
        Self {
            layers,
            num_relations,
            node_dim: cfg.node_dim,
            activation: cfg.activation,
            pooling: cfg.pooling,
        }
    }

    pub fn with_pooling(mut self, pooling: Pooling) -> Self {
        self.pooling = pooling;
        self
    }

    /// Returns `(per-node [N × d], pooled)`. Pooled is `[d]` for mean/cls
    /// pooling and the per-node matrix itself for per-entity pooling.
    pub fn encode(
        &self,
        tape: &mut Tape,
        params: &Bound,
        g: &RelGraph,
    ) -> Result<(Var, Var), EncoderError> {
        if g.node_init.cols() != self.node_dim {
            return Err(EncoderError::FeatureWidth {
                expected: self.node_dim,
                found: g.node_init.cols(),
            });
        }
        if g.num_relations > self.num_relations {
            return Err(EncoderError::RelationCount {
                expected: self.num_relations,
                found: g.num_relations,
            });
        }
        let adjacency = normalized_adjacency(g);
        let mut h = tape.constant(g.node_init.clone());
        for layer in &self.layers {
            let mut acc = tape.matmul(h, params.var(layer.self_w))?;
            for (r, fwd, inv) in &adjacency {
                for (a, w) in [(fwd, &layer.forward), (inv, &layer.inverse)] {
                    if let Some(a) = a {
                        let a = tape.constant(a.clone());
                        let msg = tape.matmul(a, h)?;
                        let msg = tape.matmul(msg, params.var(w[r - 1]))?;
                        acc = tape.add(acc, msg)?;
                    }
                }
            }
            h = self.activation.apply(tape, acc);
        }
        let pooled = match self.pooling {
            Pooling::Mean => tape.mean_rows(h)?,
            Pooling::Cls => {
                let row = tape.gather_rows(h, &[0])?;
                let d = tape.value(row).cols();
                tape.reshape(row, vec![d])?
            }
            Pooling::PerEntity => h,
        };
        Ok((h, pooled))
    }
}

type RelationAdjacency = (usize, Option<Tensor>, Option<Tensor>);

/// Per relation present in `g`: row-normalized incoming adjacency
/// (`A[i][j] = 1/|N_r(i)|` for edges `j → i`) and the same for the reversed
/// direction.
fn normalized_adjacency(g: &RelGraph) -> Vec<RelationAdjacency> {
    let n = g.num_nodes;
    let mut out = Vec::new();
    for r in 1..g.num_relations {
        let build = |reverse: bool| {
            let mut a = vec![0.0; n * n];
            let mut any = false;
            for &(s, rel, d) in &g.edges {
                if rel == r {
                    let (to, from) = if reverse { (s, d) } else { (d, s) };
                    a[to * n + from] += 1.0;
                    any = true;
                }
            }
            if !any {
                return None;
            }
            for row in a.chunks_mut(n) {
                let deg: f64 = row.iter().sum();
                if deg > 0.0 {
                    row.iter_mut().for_each(|x| *x /= deg);
                }
            }
            Some(Tensor::from_parts(vec![n, n], a))
        };
        let (fwd, inv) = (build(false), build(true));
        if fwd.is_some() {
            out.push((r, fwd, inv));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cfg(layers: usize, act: Activation, d: usize, node_dim: usize) -> EncoderConfig {
        EncoderConfig {
            d_model: d,
            gnn_layers: layers,
            node_dim,
            activation: act,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn structural_isolated_node() {
        let g = RelGraph::new(1, 2, vec![], 4).unwrap();
        assert_eq!(g.node_init().row(0)[..2], [0.0, 0.0]);
    }

    #[test]
    fn structural_path_depths() {
        let g = RelGraph::new(3, 2, vec![(0, 1, 1), (1, 1, 2)], 6).unwrap();
        let depths: Vec<f64> = (0..3).map(|i| g.node_init().row(i)[2]).collect();
        assert_eq!(depths, vec![0.0, 0.5, 1.0]);
        assert_eq!(g.node_init().row(1)[..2], [1.0, 1.0]);
        // relation histogram: node 1 touches two relation-1 edges
        assert_eq!(g.node_init().row(1)[3], 2.0);
    }

    #[test]
    fn structural_unreachable_gets_full_depth() {
        let g = RelGraph::new(3, 2, vec![(0, 1, 1)], 4).unwrap();
        assert_eq!(g.node_init().row(2)[2], 1.0);
    }

    #[test]
    fn structural_rows_follow_permutation_off_root() {
        let edges = vec![(0, 1, 1), (1, 2, 2), (3, 1, 1), (2, 1, 3)];
        let g = RelGraph::new(4, 3, edges.clone(), 8).unwrap();
        // keep node 0 fixed so the BFS root is unchanged
        let perm = [0, 3, 1, 2];
        let pe: Vec<_> = edges
            .iter()
            .map(|&(s, r, d)| (perm[s], r, perm[d]))
            .collect();
        let gp = RelGraph::new(4, 3, pe, 8).unwrap();
        for i in 0..4 {
            assert_eq!(g.node_init().row(i), gp.node_init().row(perm[i]));
        }
    }

    #[test]
    fn rejects_dangling_and_reserved_relation() {
        assert!(matches!(
            RelGraph::new(2, 2, vec![(0, 1, 2)], 4),
            Err(EncoderError::DanglingEdge { .. })
        ));
        assert!(matches!(
            RelGraph::new(2, 2, vec![(0, 0, 1)], 4),
            Err(EncoderError::RelationOutOfRange { .. })
        ));
    }

    #[test]
    fn single_node_identity_layer_passes_through() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = GraphEncoder::new(&mut store, &cfg(1, Activation::Identity, 4, 4), 2, &mut rng);
        let id = store.ids().next().unwrap();
        *store.get_mut(id) = Tensor::identity(4);
        let feats = Tensor::matrix(1, 4, vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let g = RelGraph::with_features(1, 2, vec![], feats.clone()).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let (nodes, pooled) = enc.encode(&mut tape, &b, &g).unwrap();
        assert_eq!(tape.value(nodes).data(), feats.data());
        assert_eq!(tape.value(pooled).data(), feats.data());
    }

    #[test]
    fn star_graph_all_ones_matches_hand_messages() {
        // K_{1,3}: leaves 1..3 point at hub 0 with relation 1.
        let d = 2;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = GraphEncoder::new(&mut store, &cfg(1, Activation::Identity, d, d), 2, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            *store.get_mut(id) = Tensor::matrix(d, d, vec![1.0; d * d]).unwrap();
        }
        let feats = Tensor::matrix(4, 2, vec![1., 0., 0., 1., 2., 0., 3., 3.]).unwrap();
        let edges = vec![(1, 1, 0), (2, 1, 0), (3, 1, 0)];
        let g = RelGraph::with_features(4, 2, edges.clone(), feats.clone()).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let (nodes, _) = enc.encode(&mut tape, &b, &g).unwrap();

        // brute force: every W is all-ones, so W·h = (Σh)·1
        let sum = |i: usize| feats.row(i).iter().sum::<f64>();
        let mut expected = vec![0.0; 4];
        for i in 0..4 {
            let mut v = sum(i);
            let incoming: Vec<usize> = edges.iter().filter(|e| e.2 == i).map(|e| e.0).collect();
            if !incoming.is_empty() {
                v += incoming.iter().map(|&j| sum(j)).sum::<f64>() / incoming.len() as f64;
            }
            let outgoing: Vec<usize> = edges.iter().filter(|e| e.0 == i).map(|e| e.2).collect();
            if !outgoing.is_empty() {
                v += outgoing.iter().map(|&j| sum(j)).sum::<f64>() / outgoing.len() as f64;
            }
            expected[i] = v;
        }
        for i in 0..4 {
            for j in 0..d {
                assert!((tape.value(nodes).get2(i, j) - expected[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tanh_outputs_bounded() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = GraphEncoder::new(&mut store, &cfg(2, Activation::Tanh, 8, 8), 3, &mut rng);
        let g = RelGraph::new(5, 3, vec![(0, 1, 1), (1, 2, 2), (3, 1, 4), (4, 2, 0)], 8).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let (_, pooled) = enc.encode(&mut tape, &b, &g).unwrap();
        assert!(tape.value(pooled).data().iter().all(|x| x.abs() <= 1.0));
    }
}
