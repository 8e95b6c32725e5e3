//! Synthetic paired text/graph tasks spanning the range from complementary
//! to redundant modalities.
//!
//! * `complementary-xor`: the text carries one bit, the graph another, and
//!   the label is their XOR, so neither modality alone beats chance.
//! * `aligned-rank`: the text is a linearization of a small query graph with
//!   one placeholder token per node; the target is the answer node.
//! * `pattern-predict`: the same kind of pair, labeled with the query's
//!   reasoning pattern (a whole-graph property).

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{EncoderError, RelGraph, Vocab};
use crate::objective::TaskKind;
use crate::sexpr::{
    classify_pattern, linearize, sample_expr, Pattern, QueryGraph, SExpr, SexprError, SymbolPool,
    SEP,
};

/// Upper bound on graph size for every generator.
pub const MAX_NODES: usize = 8;
const XOR_TEXT_LEN: usize = 8;
const XOR_DISTRACTORS: usize = 16;
const XOR_MARKER: &str = "cue";
const QUERY_RELATIONS: usize = 12;
const QUERY_ENTITIES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TaskgenError {
    #[error("unknown task family `{0}`")]
    UnknownFamily(String),
    #[error("invalid knobs for {family}: {reason}")]
    InvalidKnobs { family: Family, reason: String },
    #[error(transparent)]
    Sexpr(#[from] SexprError),
    #[error(transparent)]
    Graph(#[from] EncoderError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    ComplementaryXor,
    AlignedRank,
    PatternPredict,
}

impl Family {
    pub const ALL: [Family; 3] = [
        Family::ComplementaryXor,
        Family::AlignedRank,
        Family::PatternPredict,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::ComplementaryXor => "complementary-xor",
            Family::AlignedRank => "aligned-rank",
            Family::PatternPredict => "pattern-predict",
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = TaskgenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| TaskgenError::UnknownFamily(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    /// One prediction per instance.
    Global,
    /// One prediction per entity.
    Local,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Knobs {
    /// Emit token spans tying each graph node to its placeholder token.
    pub correspondence: bool,
    /// When false the graph is replaced by a random tree of the same size.
    pub graph_encodes_target: bool,
    pub scope: Scope,
}

impl Knobs {
    pub fn default_for(family: Family) -> Self {
        match family {
            Family::ComplementaryXor => Self {
                correspondence: false,
                graph_encodes_target: true,
                scope: Scope::Global,
            },
            Family::AlignedRank => Self {
                correspondence: true,
                graph_encodes_target: true,
                scope: Scope::Local,
            },
            Family::PatternPredict => Self {
                correspondence: false,
                graph_encodes_target: true,
                scope: Scope::Global,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub family: Family,
    pub n_instances: usize,
    pub seed: u64,
    pub knobs: Knobs,
}

impl GeneratorSpec {
    pub fn new(family: Family, n_instances: usize, seed: u64) -> Self {
        Self {
            family,
            n_instances,
            seed,
            knobs: Knobs::default_for(family),
        }
    }

    pub fn validate(&self) -> Result<(), TaskgenError> {
        let bad = |reason: &str| {
            Err(TaskgenError::InvalidKnobs {
                family: self.family,
                reason: reason.to_string(),
            })
        };
        match self.family {
            Family::ComplementaryXor => {
                if self.knobs.correspondence {
                    return bad("the text has no entity placeholders to align");
                }
                if self.knobs.scope != Scope::Global {
                    return bad("labels are per instance");
                }
            }
            Family::AlignedRank => {
                if !self.knobs.correspondence {
                    return bad("ranking entities needs token-node correspondence");
                }
                if self.knobs.scope != Scope::Local {
                    return bad("labels are per entity");
                }
            }
            Family::PatternPredict => {
                if self.knobs.scope != Scope::Global {
                    return bad("labels are per instance");
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    /// Gold node ids among all nodes of the graph.
    Gold(Vec<usize>),
}

/// One text/graph pair in the on-disk JSONL layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub tokens: Vec<usize>,
    pub edges: Vec<[usize; 3]>,
    pub num_nodes: usize,
    /// Node id → `[start, end)` token range of its placeholder.
    pub spans: BTreeMap<usize, [usize; 2]>,
    pub label: Label,
    pub task_kind: TaskKind,
    /// Source query, for generators built from S-expressions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sexpr: Option<String>,
}

impl Instance {
    pub fn graph(&self, num_relations: usize, node_dim: usize) -> Result<RelGraph, EncoderError> {
        let edges = self.edges.iter().map(|e| (e[0], e[1], e[2])).collect();
        RelGraph::new(self.num_nodes, num_relations, edges, node_dim)
    }

    /// Spans in node order; `None` unless every node has one.
    pub fn span_list(&self) -> Option<Vec<(usize, usize)>> {
        if self.spans.len() != self.num_nodes || self.num_nodes == 0 {
            return None;
        }
        (0..self.num_nodes)
            .map(|n| self.spans.get(&n).map(|s| (s[0], s[1])))
            .collect()
    }

    pub fn class(&self) -> Option<usize> {
        match self.label {
            Label::Class(c) => Some(c),
            Label::Gold(_) => None,
        }
    }

    /// Per-node gold flags for ranking instances.
    pub fn gold_mask(&self) -> Option<Vec<bool>> {
        match &self.label {
            Label::Gold(g) => Some((0..self.num_nodes).map(|n| g.contains(&n)).collect()),
            Label::Class(_) => None,
        }
    }
}

/// Vocabulary and output space shared by every instance of a family.
#[derive(Clone, Debug)]
pub struct TaskLayout {
    pub family: Family,
    pub vocab: Vocab,
    /// Including the reserved self relation 0.
    pub num_relations: usize,
    pub num_classes: usize,
    pub task_kind: TaskKind,
}

impl TaskLayout {
    pub fn for_family(family: Family) -> Self {
        let mut vocab = Vocab::new(MAX_NODES);
        match family {
            Family::ComplementaryXor => {
                vocab.push(XOR_MARKER);
                for i in 0..XOR_DISTRACTORS {
                    vocab.push(&format!("w{i}"));
                }
            }
            Family::AlignedRank | Family::PatternPredict => {
                vocab.push(SEP);
                for name in query_relations() {
                    vocab.push(&name);
                }
            }
        }
        let (num_relations, num_classes, task_kind) = match family {
            Family::ComplementaryXor => (4, 2, TaskKind::Classification),
            Family::AlignedRank => (QUERY_RELATIONS + 1, 0, TaskKind::Ranking),
            Family::PatternPredict => (QUERY_RELATIONS + 1, 5, TaskKind::Classification),
        };
        Self {
            family,
            vocab,
            num_relations,
            num_classes,
            task_kind,
        }
    }
}

fn query_relations() -> Vec<String> {
    (0..QUERY_RELATIONS).map(|i| format!("rel{i}")).collect()
}

pub fn generate(spec: &GeneratorSpec) -> Result<Vec<Instance>, TaskgenError> {
    match spec.family {
        Family::ComplementaryXor => gen_complementary_xor(spec),
        Family::AlignedRank => gen_aligned_rank(spec),
        Family::PatternPredict => gen_pattern_predict(spec),
    }
}

/// Random tree on `n` nodes with random edge directions and relations drawn
/// from `relations`.
fn random_tree(n: usize, relations: &[usize], rng: &mut ChaCha8Rng) -> Vec<[usize; 3]> {
    (1..n)
        .map(|child| {
            let parent = rng.gen_range(0..child);
            let rel = *relations.choose(rng).expect("non-empty relation set");
            if rng.gen_bool(0.5) {
                [parent, rel, child]
            } else {
                [child, rel, parent]
            }
        })
        .collect()
}

pub fn gen_complementary_xor(spec: &GeneratorSpec) -> Result<Vec<Instance>, TaskgenError> {
    spec.validate()?;
    let layout = TaskLayout::for_family(Family::ComplementaryXor);
    let marker = layout.vocab.id(XOR_MARKER).expect("marker in vocab");
    let distractors: Vec<usize> = (0..XOR_DISTRACTORS)
        .map(|i| {
            layout
                .vocab
                .id(&format!("w{i}"))
                .expect("distractor in vocab")
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n_instances);
    for i in 0..spec.n_instances {
        let a = rng.gen_bool(0.5);
        let b = rng.gen_bool(0.5);

        let mut tokens: Vec<usize> = (0..XOR_TEXT_LEN)
            .map(|_| *distractors.choose(&mut rng).expect("non-empty"))
            .collect();
        if a {
            let pos = rng.gen_range(0..XOR_TEXT_LEN);
            tokens[pos] = marker;
        }

        let n = rng.gen_range(4..=MAX_NODES);
        let mut edges = random_tree(n, &[1, 2], &mut rng);
        // relation 3 appears exactly when b is set
        let motif = rng.gen_range(0..edges.len());
        if b {
            edges[motif][1] = 3;
        }
        if !spec.knobs.graph_encodes_target {
            edges = random_tree(n, &[1, 2, 3], &mut rng);
        }
        out.push(Instance {
            id: format!("xor-{i:06}"),
            tokens,
            edges,
            num_nodes: n,
            spans: BTreeMap::new(),
            label: Label::Class(usize::from(a ^ b)),
            task_kind: TaskKind::Classification,
            sexpr: None,
        });
    }
    Ok(out)
}

/// Shared construction for the query-based families.
fn query_instance(
    id: String,
    expr: &SExpr,
    layout: &TaskLayout,
    permute: bool,
    knobs: &Knobs,
    rng: &mut ChaCha8Rng,
) -> Result<(Instance, usize), TaskgenError> {
    let q = QueryGraph::from_sexpr(expr);
    let n = q.num_nodes();
    let rel_id = |name: &str| {
        name.strip_prefix("rel")
            .and_then(|k| k.parse::<usize>().ok())
            .map(|k| k + 1)
            .expect("generated relation symbol")
    };
    let mut g = q.to_relgraph_with(rel_id, layout.num_relations, 4)?;
    // the answer is node 0 before renumbering
    let mut answer = 0;
    if permute {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        answer = perm[0];
        g = g.permuted(&perm);
    }
    let lin = linearize(&g, |r| format!("rel{}", r - 1), layout.vocab.max_entities())?;
    let tokens = layout.vocab.encode(&lin.tokens);
    let spans = if knobs.correspondence {
        lin.spans
            .iter()
            .enumerate()
            .map(|(node, &(s, e))| (node, [s, e]))
            .collect()
    } else {
        BTreeMap::new()
    };
    let mut edges: Vec<[usize; 3]> = g.edges().iter().map(|&(s, r, d)| [s, r, d]).collect();
    if !knobs.graph_encodes_target {
        let rels: Vec<usize> = (1..layout.num_relations).collect();
        edges = random_tree(n, &rels, rng);
    }
    let inst = Instance {
        id,
        tokens,
        edges,
        num_nodes: n,
        spans,
        label: Label::Class(0),
        task_kind: layout.task_kind,
        sexpr: Some(expr.to_string()),
    };
    Ok((inst, answer))
}

pub fn gen_aligned_rank(spec: &GeneratorSpec) -> Result<Vec<Instance>, TaskgenError> {
    spec.validate()?;
    let layout = TaskLayout::for_family(Family::AlignedRank);
    // Every relation reads in its forward direction, which makes the answer
    // the unique node without incoming edges in every pattern used here.
    let pool = SymbolPool {
        relations: query_relations(),
        reversed: Some(vec![false; QUERY_RELATIONS]),
        num_entities: QUERY_ENTITIES,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n_instances);
    for i in 0..spec.n_instances {
        let pattern = [Pattern::T0, Pattern::T1, Pattern::T2][rng.gen_range(0..3)];
        let expr = sample_expr(pattern, &pool, &mut rng);
        let (mut inst, answer) = query_instance(
            format!("rank-{i:06}"),
            &expr,
            &layout,
            true,
            &spec.knobs,
            &mut rng,
        )?;
        inst.label = Label::Gold(vec![answer]);
        out.push(inst);
    }
    Ok(out)
}

pub fn gen_pattern_predict(spec: &GeneratorSpec) -> Result<Vec<Instance>, TaskgenError> {
    spec.validate()?;
    let layout = TaskLayout::for_family(Family::PatternPredict);
    let pool = SymbolPool {
        relations: query_relations(),
        reversed: None,
        num_entities: QUERY_ENTITIES,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n_instances);
    for i in 0..spec.n_instances {
        let pattern = Pattern::ALL[rng.gen_range(0..Pattern::ALL.len())];
        let expr = sample_expr(pattern, &pool, &mut rng);
        debug_assert_eq!(classify_pattern(&expr), pattern);
        let (mut inst, _) = query_instance(
            format!("pattern-{i:06}"),
            &expr,
            &layout,
            false,
            &spec.knobs,
            &mut rng,
        )?;
        inst.label = Label::Class(pattern.index());
        out.push(inst);
    }
    Ok(out)
}
