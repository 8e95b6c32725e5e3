//! Fusion, task losses, projection heads and the contrastive co-distillation
//! (CoD) objective.
//!
//! For a batch of paired projections `z_text`, `z_graph` the CoD loss is
//!
//! ```text
//! L_CoD = ½ Σ_i [ l_cl(z_i^text, sg(z_i^graph)) + l_cl(z_i^graph, sg(z_i^text)) ]
//! l_cl(t, s) = −sim(t, s)/τ + log Σ_{u ∈ pool(t)} exp(sim(t, u)/τ)
//! ```
//!
//! where `sg` is stop-gradient, `sim` is cosine similarity and the pool
//! always contains the positive `s`. With [`NegativePool::BothModalities`]
//! the pool is every projection in the batch except the anchor itself.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::{DiffError, Tape, Tensor, Var};
use crate::encoders::Activation;
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObjectiveError {
    #[error("residual fusion needs equal widths, got {text} and {graph}")]
    DimMismatch { text: usize, graph: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("text batch has {text} rows, graph batch has {graph}")]
    BatchLenMismatch { text: usize, graph: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("contrastive pool is empty")]
    EmptyPool,
    #[error("contrastive pool must contain the positive and exclude the anchor")]
    PoolMembership,
    #[error("target count {targets} does not match {rows} prediction rows")]
    TargetLen { targets: usize, rows: usize },
    #[error("invalid CoD config: {0}")]
    Config(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativePool {
    /// All 2N−1 batch projections other than the anchor.
    BothModalities,
    /// Only the opposite modality's N projections (positive included).
    OppositeOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodConfig {
    pub tau: f64,
    pub lambda: f64,
    pub negative_pool: NegativePool,
    /// `½·mean` over pairs instead of `½·Σ`.
    pub batch_mean: bool,
    pub shared_dim: usize,
    /// Stop-gradient on every opposite-modality pool member, not only the positive.
    pub stop_grad_negatives: bool,
}

impl Default for CodConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda: 1.0,
            negative_pool: NegativePool::BothModalities,
            batch_mean: false,
            shared_dim: 64,
            stop_grad_negatives: true,
        }
    }
}

impl CodConfig {
    /// Temperature presets for sharp, default and soft contrast.
    pub const TAU_SHARP: f64 = 0.04;
    pub const TAU_DEFAULT: f64 = 0.1;
    pub const TAU_SOFT: f64 = 0.9;

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(ObjectiveError::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(ObjectiveError::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.shared_dim == 0 {
            return Err(ObjectiveError::Config("shared_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    Concat,
    Residual,
    TextOnly,
    GraphOnly,
}

impl FusionMode {
    pub fn output_dim(self, d_text: usize, d_graph: usize) -> usize {
        match self {
            FusionMode::Concat => d_text + d_graph,
            FusionMode::Residual | FusionMode::TextOnly => d_text,
            FusionMode::GraphOnly => d_graph,
        }
    }
}

/// Combines text and graph representations (vectors or row batches).
///
/// `residual_weight` is the `[d × d]` map applied to `h_g` in residual mode,
/// giving `h_t + h_g·W`; it is ignored by the other modes.
pub fn fuse(
    tape: &mut Tape,
    h_t: Var,
    h_g: Var,
    mode: FusionMode,
    residual_weight: Option<Var>,
) -> Result<Var, ObjectiveError> {
    match mode {
        FusionMode::Concat => Ok(tape.concat(&[h_t, h_g])?),
        FusionMode::TextOnly => Ok(h_t),
        FusionMode::GraphOnly => Ok(h_g),
        FusionMode::Residual => {
            let (dt, dg) = (tape.value(h_t).cols(), tape.value(h_g).cols());
            if dt != dg {
                return Err(ObjectiveError::DimMismatch {
                    text: dt,
                    graph: dg,
                });
            }
            let w = residual_weight
                .ok_or_else(|| ObjectiveError::Config("residual fusion needs a weight".into()))?;
            let vector = tape.value(h_g).rank() == 1;
            let g = if vector {
                tape.reshape(h_g, vec![1, dg])?
            } else {
                h_g
            };
            let mut mapped = tape.matmul(g, w)?;
            if vector {
                mapped = tape.reshape(mapped, vec![dt])?;
            }
            Ok(tape.add(h_t, mapped)?)
        }
    }
}

/// Two-layer perceptron `x ↦ σ(x·W1 + b1)·W2 + b2` on a row batch.
#[derive(Clone, Debug)]
pub struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    activation: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            w1: store.add_uniform(format!("{name}.w1"), d_in, d_hidden, rng),
            b1: store.add_zeros(format!("{name}.b1"), d_hidden),
            w2: store.add_uniform(format!("{name}.w2"), d_hidden, d_out, rng),
            b2: store.add_zeros(format!("{name}.b2"), d_out),
            activation,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var, DiffError> {
        let h = tape.matmul(x, params.var(self.w1))?;
        let h = tape.add_row(h, params.var(self.b1))?;
        let h = self.activation.apply(tape, h);
        let o = tape.matmul(h, params.var(self.w2))?;
        tape.add_row(o, params.var(self.b2))
    }
}

/// Per-modality maps into the shared comparison space; both emit `shared_dim` columns.
#[derive(Clone, Debug)]
pub struct ProjectionHeads {
    pub text: Mlp,
    pub graph: Mlp,
    shared_dim: usize,
}

impl ProjectionHeads {
    pub fn new(
        store: &mut ParamStore,
        d_model: usize,
        shared_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            text: Mlp::new(
                store,
                "proj.text",
                d_model,
                shared_dim,
                shared_dim,
                Activation::Tanh,
                rng,
            ),
            graph: Mlp::new(
                store,
                "proj.graph",
                d_model,
                shared_dim,
                shared_dim,
                Activation::Tanh,
                rng,
            ),
            shared_dim,
        }
    }

    pub fn shared_dim(&self) -> usize {
        self.shared_dim
    }

    pub fn project(
        &self,
        tape: &mut Tape,
        params: &Bound,
        h_text: Var,
        h_graph: Var,
    ) -> Result<(Var, Var), DiffError> {
        let zt = self.text.forward(tape, params, h_text)?;
        let zg = self.graph.forward(tape, params, h_graph)?;
        Ok((zt, zg))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Classification,
    Ranking,
}

/// Supervision for one batch: a class per row, or a gold flag per candidate
/// row grouped by instance.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskTargets {
    Classes {
        labels: Vec<usize>,
        num_classes: usize,
    },
    Candidates {
        gold: Vec<Vec<bool>>,
    },
}

/// Mean softmax cross-entropy of `[B × C]` logits against class labels.
pub fn cross_entropy(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
) -> Result<Var, ObjectiveError> {
    let lv = tape.value(logits);
    let (rows, classes) = (lv.rows(), lv.cols());
    if labels.len() != rows {
        return Err(ObjectiveError::TargetLen {
            targets: labels.len(),
            rows,
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(ObjectiveError::LabelOutOfRange {
            label: bad,
            classes,
        });
    }
    let logits = if lv.rank() == 1 {
        tape.reshape(logits, vec![1, classes])?
    } else {
        logits
    };
    let lse = tape.logsumexp_rows(logits, None)?;
    let idx: Vec<usize> = labels
        .iter()
        .enumerate()
        .map(|(r, &y)| r * classes + y)
        .collect();
    let picked = tape.pick(logits, &idx)?;
    let nll = tape.sub(lse, picked)?;
    Ok(tape.mean(nll))
}

/// Binary cross-entropy on raw scores, averaged within each instance's
/// candidate group and then across groups.
pub fn binary_cross_entropy(
    tape: &mut Tape,
    scores: Var,
    gold: &[Vec<bool>],
) -> Result<Var, ObjectiveError> {
    let n: usize = gold.iter().map(Vec::len).sum();
    let len = tape.value(scores).len();
    if n != len || gold.iter().any(Vec::is_empty) {
        return Err(ObjectiveError::TargetLen {
            targets: n,
            rows: len,
        });
    }
    let scores = tape.reshape(scores, vec![len])?;
    let mut targets = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for group in gold {
        let w = 1.0 / (group.len() * gold.len()) as f64;
        for &g in group {
            targets.push(if g { 1.0 } else { 0.0 });
            weights.push(w);
        }
    }
    // BCE(s, y) = softplus(s) − y·s
    let sp = tape.softplus(scores);
    let y = tape.constant(Tensor::vector(targets));
    let ys = tape.mul(y, scores)?;
    let per = tape.sub(sp, ys)?;
    let w = tape.constant(Tensor::vector(weights));
    let weighted = tape.mul(per, w)?;
    Ok(tape.sum(weighted))
}

/// Prediction head on the fused representation. A hidden layer precedes the
/// final affine map so that interactions between the two modalities are
/// representable. The hidden layer uses relu: with tanh and zero biases the
/// head starts as an odd function, and even targets such as XOR then sit on a
/// symmetric saddle.
#[derive(Clone, Debug)]
pub struct TaskHead {
    mlp: Mlp,
    kind: TaskKind,
}

impl TaskHead {
    pub fn new(
        store: &mut ParamStore,
        d_in: usize,
        d_hidden: usize,
        kind: TaskKind,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let out = match kind {
            TaskKind::Classification => num_classes,
            TaskKind::Ranking => 1,
        };
        Self {
            mlp: Mlp::new(store, "task", d_in, d_hidden, out, Activation::Relu, rng),
            kind,
        }
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    /// `[B × C]` class logits or `[n × 1]` candidate scores.
    pub fn logits(&self, tape: &mut Tape, params: &Bound, h: Var) -> Result<Var, DiffError> {
        self.mlp.forward(tape, params, h)
    }

    pub fn loss(
        &self,
        tape: &mut Tape,
        params: &Bound,
        h_hybrid: Var,
        targets: &TaskTargets,
    ) -> Result<Var, ObjectiveError> {
        let logits = self.logits(tape, params, h_hybrid)?;
        task_loss(tape, logits, targets)
    }
}

/// Cross-entropy for class targets, grouped binary cross-entropy for ranking.
pub fn task_loss(
    tape: &mut Tape,
    logits: Var,
    targets: &TaskTargets,
) -> Result<Var, ObjectiveError> {
    match targets {
        TaskTargets::Classes {
            labels,
            num_classes,
        } => {
            let c = tape.value(logits).cols();
            if c != *num_classes {
                return Err(ObjectiveError::TargetLen {
                    targets: *num_classes,
                    rows: c,
                });
            }
            cross_entropy(tape, logits, labels)
        }
        TaskTargets::Candidates { gold } => binary_cross_entropy(tape, logits, gold),
    }
}

/// Single contrastive term `l_cl(t, s)` over an explicit pool.
///
/// The pool must contain `s` and must not contain `t`; both are checked by
/// node identity.
pub fn contrastive_term(
    tape: &mut Tape,
    anchor: Var,
    positive: Var,
    pool: &[Var],
    tau: f64,
) -> Result<Var, ObjectiveError> {
    if pool.is_empty() {
        return Err(ObjectiveError::EmptyPool);
    }
    if pool.contains(&anchor) {
        return Err(ObjectiveError::PoolMembership);
    }
    let pos_idx = pool
        .iter()
        .position(|&u| u == positive)
        .ok_or(ObjectiveError::PoolMembership)?;
    let sims = pool
        .iter()
        .map(|&u| tape.cosine_sim(anchor, u))
        .collect::<Result<Vec<_>, _>>()?;
    let sims = tape.concat(&sims)?;
    let logits = tape.scale(sims, 1.0 / tau);
    let lse = tape.logsumexp(logits)?;
    let pos = tape.index(logits, pos_idx)?;
    Ok(tape.sub(lse, pos)?)
}

/// Bidirectional CoD loss for `[N × p]` text and graph projections.
pub fn cod_loss(
    tape: &mut Tape,
    z_text: Var,
    z_graph: Var,
    cfg: &CodConfig,
) -> Result<Var, ObjectiveError> {
    let (tv, gv) = (tape.value(z_text), tape.value(z_graph));
    if tv.rank() != 2 || gv.rank() != 2 {
        return Err(ObjectiveError::EmptyBatch);
    }
    if tv.rows() != gv.rows() {
        return Err(ObjectiveError::BatchLenMismatch {
            text: tv.rows(),
            graph: gv.rows(),
        });
    }
    if tv.cols() != gv.cols() {
        return Err(ObjectiveError::DimMismatch {
            text: tv.cols(),
            graph: gv.cols(),
        });
    }
    let n = tv.rows();
    let nt = tape.normalize_rows(z_text)?;
    let ng = tape.normalize_rows(z_graph)?;
    let text_anchor = directional(tape, nt, ng, n, cfg)?;
    let graph_anchor = directional(tape, ng, nt, n, cfg)?;
    let both = tape.add(text_anchor, graph_anchor)?;
    let total = tape.sum(both);
    let scale = if cfg.batch_mean { 0.5 / n as f64 } else { 0.5 };
    Ok(tape.scale(total, scale))
}

/// Per-anchor `l_cl` values `[N]` with `anchor` rows as anchors and the
/// matching `other` rows as stop-gradient positives. Both inputs are already
/// row-normalized.
fn directional(
    tape: &mut Tape,
    anchor: Var,
    other: Var,
    n: usize,
    cfg: &CodConfig,
) -> Result<Var, ObjectiveError> {
    let inv_tau = 1.0 / cfg.tau;
    let other_sg = tape.stop_gradient(other);
    let other_t = tape.transpose(other_sg)?;
    let s_pos = tape.matmul(anchor, other_t)?;
    let s_pos = tape.scale(s_pos, inv_tau);
    let s_opp = if cfg.stop_grad_negatives {
        s_pos
    } else {
        // positive entries from the stop-gradient copy, the rest live
        let live_t = tape.transpose(other)?;
        let live = tape.matmul(anchor, live_t)?;
        let live = tape.scale(live, inv_tau);
        let eye = tape.constant(Tensor::identity(n));
        let off = tape.constant(off_diagonal(n));
        let a = tape.mul(live, off)?;
        let b = tape.mul(s_pos, eye)?;
        tape.add(a, b)?
    };

    let (pool, mask, width, offset) = match cfg.negative_pool {
        NegativePool::OppositeOnly => (s_opp, None, n, 0),
        NegativePool::BothModalities => {
            let anchor_t = tape.transpose(anchor)?;
            let s_same = tape.matmul(anchor, anchor_t)?;
            let s_same = tape.scale(s_same, inv_tau);
            let pool = tape.concat(&[s_same, s_opp])?;
            let mut mask = vec![true; n * 2 * n];
            for i in 0..n {
                mask[i * 2 * n + i] = false;
            }
            (pool, Some(mask), 2 * n, n)
        }
    };
    let lse = tape.logsumexp_rows(pool, mask)?;
    let diag: Vec<usize> = (0..n).map(|i| i * width + offset + i).collect();
    let pos = tape.pick(pool, &diag)?;
    Ok(tape.sub(lse, pos)?)
}

fn off_diagonal(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                t.data_mut()[i * n + j] = 1.0;
            }
        }
    }
    t
}

/// `L_task + λ·L_CoD`. With `λ = 0` (or no CoD term) the task node itself is
/// returned, so the objective is exactly the task loss.
pub fn total_loss(
    tape: &mut Tape,
    l_task: Var,
    l_cod: Option<Var>,
    lambda: f64,
) -> Result<Var, ObjectiveError> {
    match l_cod {
        Some(c) if lambda != 0.0 => {
            let scaled = tape.scale(c, lambda);
            Ok(tape.add(l_task, scaled)?)
        }
        _ => Ok(l_task),
    }
}

/// CoD loss value for plain matrices, with no gradient bookkeeping.
pub fn cod_loss_value(
    z_text: &Tensor,
    z_graph: &Tensor,
    cfg: &CodConfig,
) -> Result<f64, ObjectiveError> {
    let mut tape = Tape::new();
    let t = tape.constant(z_text.clone());
    let g = tape.constant(z_graph.clone());
    let l = cod_loss(&mut tape, t, g, cfg)?;
    Ok(tape.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    fn orthogonal_pairs() -> (Tensor, Tensor) {
        let t = m(2, 2, &[1., 0., 0., 1.]);
        (t.clone(), t)
    }

    #[test]
    fn concat_and_bypass_modes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1., 2.]));
        let b = tape.constant(Tensor::vector(vec![3., 4.]));
        let c = fuse(&mut tape, a, b, FusionMode::Concat, None).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 2., 3., 4.]);
        let t = fuse(&mut tape, a, b, FusionMode::TextOnly, None).unwrap();
        assert_eq!(t, a);
        let b2 = tape.constant(Tensor::vector(vec![-30., 9.]));
        let t2 = fuse(&mut tape, a, b2, FusionMode::TextOnly, None).unwrap();
        assert_eq!(tape.value(t2), tape.value(t));
        let g = fuse(&mut tape, a, b, FusionMode::GraphOnly, None).unwrap();
        assert_eq!(g, b);
    }

    #[test]
    fn residual_identity_zero_graph() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![0.5, -1.5]));
        let z = tape.constant(Tensor::vector(vec![0., 0.]));
        let w = tape.constant(Tensor::identity(2));
        let r = fuse(&mut tape, a, z, FusionMode::Residual, Some(w)).unwrap();
        assert_eq!(tape.value(r).data(), &[0.5, -1.5]);
        let b = tape.constant(Tensor::vector(vec![1., 1., 1.]));
        assert!(matches!(
            fuse(&mut tape, a, b, FusionMode::Residual, Some(w)),
            Err(ObjectiveError::DimMismatch { .. })
        ));
    }

    #[test]
    fn uniform_logits_give_ln3() {
        let mut tape = Tape::new();
        let l = tape.constant(m(1, 3, &[0., 0., 0.]));
        for y in 0..3 {
            let loss = cross_entropy(&mut tape, l, &[y]).unwrap();
            assert!((tape.value(loss).item() - 3f64.ln()).abs() < 1e-12);
        }
        assert!(matches!(
            cross_entropy(&mut tape, l, &[3]),
            Err(ObjectiveError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn confident_logits_vanish() {
        let mut tape = Tape::new();
        let l = tape.constant(m(1, 3, &[50., 0., 0.]));
        let loss = cross_entropy(&mut tape, l, &[0]).unwrap();
        assert!(tape.value(loss).item() < 1e-10);
    }

    #[test]
    fn ranking_bce_two_candidates() {
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let mut tape = Tape::new();
        let s = tape.constant(m(2, 1, &[logit(0.9), logit(0.1)]));
        let loss = binary_cross_entropy(&mut tape, s, &[vec![true, false]]).unwrap();
        let expected = -(0.9f64.ln() + 0.9f64.ln()) / 2.0;
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);
        assert!((expected - 0.1054).abs() < 1e-4);
    }

    #[test]
    fn contrastive_orthogonal_batch() {
        let mut tape = Tape::new();
        let t1 = tape.constant(Tensor::vector(vec![1., 0.]));
        let s1 = tape.constant(Tensor::vector(vec![1., 0.]));
        let t2 = tape.constant(Tensor::vector(vec![0., 1.]));
        let s2 = tape.constant(Tensor::vector(vec![0., 1.]));
        let l = contrastive_term(&mut tape, t1, s1, &[s1, t2, s2], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((tape.value(l).item() - ((e + 2.0) / e).ln()).abs() < 1e-12);
    }

    #[test]
    fn contrastive_singleton_pool_is_zero() {
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::vector(vec![0.3, -2.0, 1.0]));
        let s = tape.constant(Tensor::vector(vec![-1.0, 0.5, 0.25]));
        let l = contrastive_term(&mut tape, t, s, &[s], 0.1).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);
    }

    #[test]
    fn contrastive_hot_temperature_is_uniform() {
        let mut tape = Tape::new();
        let vs: Vec<Var> = [[1., 0.], [0.2, 0.9], [-1., 0.3], [0.4, -0.4]]
            .iter()
            .map(|v| tape.constant(Tensor::vector(v.to_vec())))
            .collect();
        let l = contrastive_term(&mut tape, vs[0], vs[1], &vs[1..], 1e6).unwrap();
        assert!((tape.value(l).item() - 3f64.ln()).abs() < 1e-3);
    }

    #[test]
    fn contrastive_pool_rules() {
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::vector(vec![1., 0.]));
        let s = tape.constant(Tensor::vector(vec![0., 1.]));
        assert_eq!(
            contrastive_term(&mut tape, t, s, &[], 1.0).unwrap_err(),
            ObjectiveError::EmptyPool
        );
        assert_eq!(
            contrastive_term(&mut tape, t, s, &[s, t], 1.0).unwrap_err(),
            ObjectiveError::PoolMembership
        );
        let z = tape.constant(Tensor::vector(vec![0., 0.]));
        assert!(matches!(
            contrastive_term(&mut tape, t, z, &[z], 1.0),
            Err(ObjectiveError::Diff(DiffError::ZeroNorm))
        ));
    }

    #[test]
    fn cod_orthogonal_batch_sum_form() {
        let (t, g) = orthogonal_pairs();
        let cfg = CodConfig {
            tau: 1.0,
            ..CodConfig::default()
        };
        let v = cod_loss_value(&t, &g, &cfg).unwrap();
        let e = std::f64::consts::E;
        assert!((v - 2.0 * ((e + 2.0) / e).ln()).abs() < 1e-12);
        assert!((v - 1.1028).abs() < 1e-4);
    }

    #[test]
    fn cod_single_pair_opposite_only_is_zero() {
        let t = m(1, 3, &[0.2, -0.4, 1.0]);
        let g = m(1, 3, &[-3.0, 0.1, 0.5]);
        let cfg = CodConfig {
            negative_pool: NegativePool::OppositeOnly,
            ..CodConfig::default()
        };
        assert!(cod_loss_value(&t, &g, &cfg).unwrap().abs() < 1e-12);
    }

    #[test]
    fn cod_batch_mismatch_rejected() {
        let t = m(2, 2, &[1., 0., 0., 1.]);
        let g = m(1, 2, &[1., 0.]);
        assert!(matches!(
            cod_loss_value(&t, &g, &CodConfig::default()),
            Err(ObjectiveError::BatchLenMismatch { .. })
        ));
    }

    #[test]
    fn cod_batch_mean_scales_by_n() {
        let t = m(3, 2, &[1., 0.2, -0.3, 1., 0.5, 0.5]);
        let g = m(3, 2, &[0.9, 0.1, 0.1, 1., -0.5, 0.7]);
        let sum = cod_loss_value(&t, &g, &CodConfig::default()).unwrap();
        let mean = cod_loss_value(
            &t,
            &g,
            &CodConfig {
                batch_mean: true,
                ..CodConfig::default()
            },
        )
        .unwrap();
        assert!((sum / 3.0 - mean).abs() < 1e-12);
    }

    #[test]
    fn total_loss_lambda_zero_is_task() {
        let mut tape = Tape::new();
        let task = tape.param(Tensor::scalar(0.5));
        let cod = tape.param(Tensor::scalar(1.1028));
        assert_eq!(total_loss(&mut tape, task, Some(cod), 0.0).unwrap(), task);
        let tot = total_loss(&mut tape, task, Some(cod), 1.0).unwrap();
        assert!((tape.value(tot).item() - 1.6028).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut c = CodConfig::default();
        assert!(c.validate().is_ok());
        c.tau = 0.0;
        assert!(c.validate().is_err());
        c.tau = 0.1;
        c.lambda = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn projection_heads_share_width() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let heads = ProjectionHeads::new(&mut store, 8, 6, &mut rng);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let ht = tape.constant(Tensor::matrix(3, 8, vec![0.1; 24]).unwrap());
        let hg = tape.constant(Tensor::matrix(3, 8, vec![-0.2; 24]).unwrap());
        let (zt, zg) = heads.project(&mut tape, &b, ht, hg).unwrap();
        assert_eq!(tape.value(zt).shape(), &[3, 6]);
        assert_eq!(tape.value(zg).shape(), tape.value(zt).shape());
    }
}
