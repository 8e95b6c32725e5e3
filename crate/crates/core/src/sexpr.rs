//! Knowledge-base query S-expressions (`JOIN`, `AND`, `R`): parsing,
//! reasoning-pattern classification, conversion to relational graphs,
//! placeholder linearization and generalization-split labeling.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{placeholder_token, EncoderError, RelGraph};

/// Token separating triples in a linearized graph.
pub const SEP: &str = "|";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SexprError {
    #[error("empty expression")]
    Empty,
    #[error("unbalanced parentheses at offset {offset}")]
    UnbalancedParens { offset: usize },
    #[error("unknown operator `{op}` at offset {offset}")]
    UnknownOperator { op: String, offset: usize },
    #[error("`{op}` at offset {offset} takes {expected} argument(s), found {found}")]
    ArityError {
        op: String,
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("unexpected `{token}` at offset {offset}")]
    UnexpectedToken { token: String, offset: usize },
    #[error("{count} entities exceed the {max} available placeholders")]
    TooManyEntities { count: usize, max: usize },
    #[error("malformed linearization at token {position}: {reason}")]
    BadLinearization { position: usize, reason: String },
    #[error(transparent)]
    Graph(#[from] EncoderError),
}

/// Query AST. `Join`'s first child is always `Relation` or `Reverse`; every
/// other child position holds an entity-denoting expression.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum SExpr {
    Entity(String),
    Relation(String),
    Reverse(String),
    Join(Box<SExpr>, Box<SExpr>),
    And(Box<SExpr>, Box<SExpr>),
}

impl SExpr {
    pub fn join(rel: SExpr, arg: SExpr) -> Self {
        SExpr::Join(Box::new(rel), Box::new(arg))
    }

    pub fn and(a: SExpr, b: SExpr) -> Self {
        SExpr::And(Box::new(a), Box::new(b))
    }

    /// Relation symbols in left-to-right order, repeats kept.
    pub fn relations(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.walk(&mut |e| {
            if let SExpr::Relation(r) | SExpr::Reverse(r) = e {
                out.push(r.as_str());
            }
        });
        out
    }

    pub fn entities(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.walk(&mut |e| {
            if let SExpr::Entity(s) = e {
                out.push(s.as_str());
            }
        });
        out
    }

    fn walk<'a>(&'a self, f: &mut impl FnMut(&'a SExpr)) {
        f(self);
        if let SExpr::Join(a, b) | SExpr::And(a, b) = self {
            a.walk(f);
            b.walk(f);
        }
    }
}

impl fmt::Display for SExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SExpr::Entity(s) | SExpr::Relation(s) => f.write_str(s),
            SExpr::Reverse(r) => write!(f, "(R {r})"),
            SExpr::Join(a, b) => write!(f, "(JOIN {a} {b})"),
            SExpr::And(a, b) => write!(f, "(AND {a} {b})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Open,
    Close,
    Atom(String),
}

fn tokenize(text: &str) -> Vec<(Tok, usize)> {
    let mut out = Vec::new();
    let mut atom_start = None;
    for (i, c) in text.char_indices() {
        if c == '(' || c == ')' || c.is_whitespace() {
            if let Some(s) = atom_start.take() {
                out.push((Tok::Atom(text[s..i].to_string()), s));
            }
            match c {
                '(' => out.push((Tok::Open, i)),
                ')' => out.push((Tok::Close, i)),
                _ => {}
            }
        } else if atom_start.is_none() {
            atom_start = Some(i);
        }
    }
    if let Some(s) = atom_start {
        out.push((Tok::Atom(text[s..].to_string()), s));
    }
    out
}

/// Untyped nested list produced before operator checks.
enum Node {
    Atom(String, usize),
    List(Vec<Node>, usize),
}

impl Node {
    fn offset(&self) -> usize {
        match self {
            Node::Atom(_, o) | Node::List(_, o) => *o,
        }
    }

    fn describe(&self) -> String {
        match self {
            Node::Atom(s, _) => s.clone(),
            Node::List(..) => "(".into(),
        }
    }
}

fn read_node(toks: &[(Tok, usize)], pos: &mut usize, end: usize) -> Result<Node, SexprError> {
    let Some((tok, off)) = toks.get(*pos) else {
        return Err(SexprError::UnbalancedParens { offset: end });
    };
    *pos += 1;
    match tok {
        Tok::Atom(s) => Ok(Node::Atom(s.clone(), *off)),
        Tok::Close => Err(SexprError::UnbalancedParens { offset: *off }),
        Tok::Open => {
            let mut items = Vec::new();
            loop {
                match toks.get(*pos) {
                    None => return Err(SexprError::UnbalancedParens { offset: end }),
                    Some((Tok::Close, _)) => {
                        *pos += 1;
                        return Ok(Node::List(items, *off));
                    }
                    Some(_) => items.push(read_node(toks, pos, end)?),
                }
            }
        }
    }
}

/// Parses one S-expression. Byte offsets in errors point into `text`.
pub fn parse_sexpr(text: &str) -> Result<SExpr, SexprError> {
    let toks = tokenize(text);
    if toks.is_empty() {
        return Err(SexprError::Empty);
    }
    let mut pos = 0;
    let node = read_node(&toks, &mut pos, text.len())?;
    if let Some((tok, offset)) = toks.get(pos) {
        return Err(match tok {
            Tok::Close => SexprError::UnbalancedParens { offset: *offset },
            Tok::Open => SexprError::UnexpectedToken {
                token: "(".into(),
                offset: *offset,
            },
            Tok::Atom(s) => SexprError::UnexpectedToken {
                token: s.clone(),
                offset: *offset,
            },
        });
    }
    entity_expr(node)
}

fn operator(items: &[Node], offset: usize) -> Result<&str, SexprError> {
    match items.first() {
        None => Err(SexprError::UnexpectedToken {
            token: ")".into(),
            offset,
        }),
        Some(Node::List(_, o)) => Err(SexprError::UnexpectedToken {
            token: "(".into(),
            offset: *o,
        }),
        Some(Node::Atom(op, o)) => match op.as_str() {
            "JOIN" | "AND" | "R" => Ok(op.as_str()),
            _ => Err(SexprError::UnknownOperator {
                op: op.clone(),
                offset: *o,
            }),
        },
    }
}

fn check_arity(op: &str, items: &[Node], offset: usize, expected: usize) -> Result<(), SexprError> {
    if items.len() - 1 != expected {
        return Err(SexprError::ArityError {
            op: op.to_string(),
            offset,
            expected,
            found: items.len() - 1,
        });
    }
    Ok(())
}

fn entity_expr(node: Node) -> Result<SExpr, SexprError> {
    match node {
        Node::Atom(s, _) => Ok(SExpr::Entity(s)),
        Node::List(items, offset) => {
            let op = operator(&items, offset)?.to_string();
            match op.as_str() {
                "JOIN" => {
                    check_arity(&op, &items, offset, 2)?;
                    let mut it = items.into_iter().skip(1);
                    let rel = relation_expr(it.next().expect("arity checked"))?;
                    let arg = entity_expr(it.next().expect("arity checked"))?;
                    Ok(SExpr::join(rel, arg))
                }
                "AND" => {
                    check_arity(&op, &items, offset, 2)?;
                    let mut it = items.into_iter().skip(1);
                    let a = entity_expr(it.next().expect("arity checked"))?;
                    let b = entity_expr(it.next().expect("arity checked"))?;
                    Ok(SExpr::and(a, b))
                }
                _ => Err(SexprError::UnexpectedToken {
                    token: op,
                    offset: items[0].offset(),
                }),
            }
        }
    }
}

fn relation_expr(node: Node) -> Result<SExpr, SexprError> {
    match node {
        Node::Atom(s, _) => Ok(SExpr::Relation(s)),
        Node::List(items, offset) => {
            let op = operator(&items, offset)?;
            if op != "R" {
                return Err(SexprError::UnexpectedToken {
                    token: op.to_string(),
                    offset: items[0].offset(),
                });
            }
            check_arity("R", &items, offset, 1)?;
            match &items[1] {
                Node::Atom(r, _) => Ok(SExpr::Reverse(r.clone())),
                other => Err(SexprError::UnexpectedToken {
                    token: other.describe(),
                    offset: other.offset(),
                }),
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pattern {
    T0,
    T1,
    T2,
    T3,
    T4,
    #[serde(rename = "OTHER")]
    Other,
}

impl Pattern {
    pub const ALL: [Pattern; 5] = [
        Pattern::T0,
        Pattern::T1,
        Pattern::T2,
        Pattern::T3,
        Pattern::T4,
    ];

    pub fn index(self) -> usize {
        match self {
            Pattern::T0 => 0,
            Pattern::T1 => 1,
            Pattern::T2 => 2,
            Pattern::T3 => 3,
            Pattern::T4 => 4,
            Pattern::Other => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Pattern::T0 => "T0",
            Pattern::T1 => "T1",
            Pattern::T2 => "T2",
            Pattern::T3 => "T3",
            Pattern::T4 => "T4",
            Pattern::Other => "OTHER",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Path structure from constraint entities to the node an expression denotes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Shape {
    /// A constraint entity.
    Entity,
    /// One relation hop away from the inner shape.
    Hop(Box<Shape>),
    /// Two branches converging on the same node.
    Meet(Box<Shape>, Box<Shape>),
}

pub fn shape(e: &SExpr) -> Shape {
    match e {
        SExpr::Join(_, arg) => Shape::Hop(Box::new(shape(arg))),
        SExpr::And(a, b) => Shape::Meet(Box::new(shape(a)), Box::new(shape(b))),
        SExpr::Entity(_) | SExpr::Relation(_) | SExpr::Reverse(_) => Shape::Entity,
    }
}

/// Hop count of a simple constraint chain, `None` if it branches.
fn chain_len(s: &Shape) -> Option<usize> {
    match s {
        Shape::Entity => Some(0),
        Shape::Hop(inner) => chain_len(inner).map(|n| n + 1),
        Shape::Meet(..) => None,
    }
}

pub fn classify_pattern(e: &SExpr) -> Pattern {
    match shape(e) {
        s @ Shape::Hop(_) => match chain_len(&s) {
            Some(1) => Pattern::T0,
            Some(2) => Pattern::T1,
            Some(_) => Pattern::Other,
            None => match &s {
                Shape::Hop(inner) => match inner.as_ref() {
                    Shape::Meet(a, b) if chain_len(a) == Some(1) && chain_len(b) == Some(1) => {
                        Pattern::T4
                    }
                    _ => Pattern::Other,
                },
                _ => unreachable!(),
            },
        },
        Shape::Meet(a, b) => match (chain_len(&a), chain_len(&b)) {
            (Some(1), Some(1)) => Pattern::T2,
            (Some(1), Some(2)) | (Some(2), Some(1)) => Pattern::T3,
            _ => Pattern::Other,
        },
        Shape::Entity => Pattern::Other,
    }
}

/// Symbol tables for a query graph: relation `r` (1-based) is
/// `relations[r - 1]`; node `i` is `entities[i]` or a variable (`None`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Symbols {
    pub relations: Vec<String>,
    pub entities: Vec<Option<String>>,
}

impl Symbols {
    pub fn relation_name(&self, rel: usize) -> &str {
        &self.relations[rel - 1]
    }
}

/// Query graph with symbolic relation labels. Node 0 is the answer; other
/// nodes are numbered in left-to-right order of appearance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryGraph {
    pub entities: Vec<Option<String>>,
    pub edges: Vec<(usize, String, usize)>,
}

impl QueryGraph {
    pub fn from_sexpr(e: &SExpr) -> Self {
        let mut g = QueryGraph {
            entities: vec![None],
            edges: Vec::new(),
        };
        g.build(e, 0);
        g
    }

    fn build(&mut self, e: &SExpr, target: usize) {
        match e {
            SExpr::Join(rel, arg) => {
                let node = self.entities.len();
                self.entities.push(match arg.as_ref() {
                    SExpr::Entity(s) => Some(s.clone()),
                    _ => None,
                });
                match rel.as_ref() {
                    // (JOIN r e) = { x | r(x, e) }
                    SExpr::Relation(r) => self.edges.push((target, r.clone(), node)),
                    // (JOIN (R r) e) = { x | r(e, x) }
                    SExpr::Reverse(r) => self.edges.push((node, r.clone(), target)),
                    _ => unreachable!("parser guarantees a relation"),
                }
                self.build(arg, node);
            }
            SExpr::And(a, b) => {
                self.build(a, target);
                self.build(b, target);
            }
            SExpr::Entity(_) | SExpr::Relation(_) | SExpr::Reverse(_) => {}
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.entities.len()
    }

    /// Converts to a [`RelGraph`] using a caller-supplied relation numbering.
    pub fn to_relgraph_with(
        &self,
        relation_id: impl Fn(&str) -> usize,
        num_relations: usize,
        node_dim: usize,
    ) -> Result<RelGraph, SexprError> {
        let edges = self
            .edges
            .iter()
            .map(|(s, r, d)| (*s, relation_id(r), *d))
            .collect();
        Ok(RelGraph::new(
            self.num_nodes(),
            num_relations,
            edges,
            node_dim,
        )?)
    }
}

/// Query graph with relations numbered by first appearance.
pub fn to_relgraph(e: &SExpr, node_dim: usize) -> Result<(RelGraph, Symbols), SexprError> {
    let q = QueryGraph::from_sexpr(e);
    let mut relations: Vec<String> = Vec::new();
    for (_, r, _) in &q.edges {
        if !relations.contains(r) {
            relations.push(r.clone());
        }
    }
    let index: HashMap<&str, usize> = relations
        .iter()
        .enumerate()
        .map(|(i, r)| (r.as_str(), i + 1))
        .collect();
    let g = q.to_relgraph_with(|r| index[r], relations.len() + 1, node_dim)?;
    Ok((
        g,
        Symbols {
            relations,
            entities: q.entities,
        },
    ))
}

/// Token sequence for a graph plus the token span of each node's first
/// placeholder occurrence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Linearized {
    pub tokens: Vec<String>,
    pub spans: Vec<(usize, usize)>,
}

/// Writes `<Es> relation <Ed>` per edge, triples separated by [`SEP`].
/// Nodes on no edge are appended as lone placeholders.
pub fn linearize(
    g: &RelGraph,
    relation_name: impl Fn(usize) -> String,
    max_placeholders: usize,
) -> Result<Linearized, SexprError> {
    let n = g.num_nodes();
    if n > max_placeholders {
        return Err(SexprError::TooManyEntities {
            count: n,
            max: max_placeholders,
        });
    }
    fn mention(tokens: &mut Vec<String>, spans: &mut [Option<(usize, usize)>], node: usize) {
        spans[node].get_or_insert((tokens.len(), tokens.len() + 1));
        tokens.push(placeholder_token(node));
    }
    let mut tokens = Vec::new();
    let mut spans: Vec<Option<(usize, usize)>> = vec![None; n];
    for (i, &(s, r, d)) in g.edges().iter().enumerate() {
        if i > 0 {
            tokens.push(SEP.to_string());
        }
        mention(&mut tokens, &mut spans, s);
        tokens.push(relation_name(r));
        mention(&mut tokens, &mut spans, d);
    }
    for node in 0..n {
        if spans[node].is_none() {
            if !tokens.is_empty() {
                tokens.push(SEP.to_string());
            }
            mention(&mut tokens, &mut spans, node);
        }
    }
    Ok(Linearized {
        tokens,
        spans: spans
            .into_iter()
            .map(|s| s.expect("every node mentioned"))
            .collect(),
    })
}

/// Reads a linearization back into nodes and symbolic edges.
pub fn delinearize(tokens: &[String]) -> Result<QueryGraph, SexprError> {
    let node_of = |pos: usize| -> Result<usize, SexprError> {
        let t = &tokens[pos];
        t.strip_prefix("<E")
            .and_then(|r| r.strip_suffix('>'))
            .and_then(|k| k.parse::<usize>().ok())
            .filter(|&k| k >= 1)
            .map(|k| k - 1)
            .ok_or_else(|| SexprError::BadLinearization {
                position: pos,
                reason: format!("expected a placeholder, found `{t}`"),
            })
    };
    let mut edges = Vec::new();
    let mut max_node = None;
    let mut start = 0;
    while start < tokens.len() {
        let end = tokens[start..]
            .iter()
            .position(|t| t == SEP)
            .map_or(tokens.len(), |p| start + p);
        match end - start {
            1 => {
                let a = node_of(start)?;
                max_node = max_node.max(Some(a));
            }
            3 => {
                let (s, d) = (node_of(start)?, node_of(start + 2)?);
                max_node = max_node.max(Some(s.max(d)));
                edges.push((s, tokens[start + 1].clone(), d));
            }
            _ => {
                return Err(SexprError::BadLinearization {
                    position: start,
                    reason: "segment is neither a triple nor a lone placeholder".into(),
                })
            }
        }
        start = end + 1;
    }
    let n = max_node.map_or(0, |m| m + 1);
    Ok(QueryGraph {
        entities: vec![None; n],
        edges,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitLabel {
    Iid,
    Compositional,
    Zeroshot,
}

impl SplitLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitLabel::Iid => "iid",
            SplitLabel::Compositional => "compositional",
            SplitLabel::Zeroshot => "zeroshot",
        }
    }
}

/// Logical template: the reasoning pattern with the sorted multiset of
/// relations it uses. Entities are abstracted away.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Template {
    pub pattern: Pattern,
    pub relations: Vec<String>,
}

impl Template {
    pub fn of(e: &SExpr) -> Self {
        let mut relations: Vec<String> = e.relations().into_iter().map(String::from).collect();
        relations.sort();
        Self {
            pattern: classify_pattern(e),
            relations,
        }
    }
}

/// Relations and templates seen in a training corpus.
#[derive(Clone, Debug, Default)]
pub struct SplitIndex {
    relations: BTreeSet<String>,
    templates: HashSet<Template>,
}

impl SplitIndex {
    pub fn new<'a>(train: impl IntoIterator<Item = &'a SExpr>) -> Self {
        let mut idx = Self::default();
        for e in train {
            idx.relations
                .extend(e.relations().into_iter().map(String::from));
            idx.templates.insert(Template::of(e));
        }
        idx
    }

    pub fn label(&self, test: &SExpr) -> SplitLabel {
        if test
            .relations()
            .iter()
            .any(|r| !self.relations.contains(*r))
        {
            SplitLabel::Zeroshot
        } else if !self.templates.contains(&Template::of(test)) {
            SplitLabel::Compositional
        } else {
            SplitLabel::Iid
        }
    }
}

pub fn label_split(test: &SExpr, train: &[SExpr]) -> SplitLabel {
    SplitIndex::new(train).label(test)
}

/// Symbol supply for random query generation.
#[derive(Clone, Debug)]
pub struct SymbolPool {
    pub relations: Vec<String>,
    /// Fixed reading direction per relation (`true` = wrapped in `R`);
    /// directions are drawn per use when absent.
    pub reversed: Option<Vec<bool>>,
    pub num_entities: usize,
}

/// Random query of the given pattern with distinct relations and entities
/// where the pool allows. `Other` yields a three-hop chain.
pub fn sample_expr(pattern: Pattern, pool: &SymbolPool, rng: &mut impl Rng) -> SExpr {
    let hops = match pattern {
        Pattern::T0 => 1,
        Pattern::T1 | Pattern::T2 => 2,
        Pattern::T3 | Pattern::T4 | Pattern::Other => 3,
    };
    let mut rel_ids: Vec<usize> = (0..pool.relations.len()).collect();
    rel_ids.shuffle(rng);
    if rel_ids.len() < hops {
        rel_ids = (0..hops)
            .map(|_| rng.gen_range(0..pool.relations.len()))
            .collect();
    }
    let mut rels: Vec<SExpr> = rel_ids
        .into_iter()
        .take(hops)
        .map(|i| {
            let name = pool.relations[i].clone();
            let rev = match &pool.reversed {
                Some(dirs) => dirs[i],
                None => rng.gen_bool(0.5),
            };
            if rev {
                SExpr::Reverse(name)
            } else {
                SExpr::Relation(name)
            }
        })
        .collect();
    let mut ent_ids: Vec<usize> = (0..pool.num_entities).collect();
    ent_ids.shuffle(rng);
    let mut ents = ent_ids.into_iter().map(|k| SExpr::Entity(format!("m.{k}")));
    let mut rel = || rels.remove(0);
    let mut ent = || ents.next().unwrap_or_else(|| SExpr::Entity("m.0".into()));

    match pattern {
        Pattern::T0 => SExpr::join(rel(), ent()),
        Pattern::T1 => {
            let inner = SExpr::join(rel(), ent());
            SExpr::join(rel(), inner)
        }
        Pattern::T2 => {
            let a = SExpr::join(rel(), ent());
            SExpr::and(a, SExpr::join(rel(), ent()))
        }
        Pattern::T3 => {
            let a = SExpr::join(rel(), ent());
            let outer = rel();
            let inner = SExpr::join(rel(), ent());
            SExpr::and(a, SExpr::join(outer, inner))
        }
        Pattern::T4 => {
            let top = rel();
            let a = SExpr::join(rel(), ent());
            let b = SExpr::join(rel(), ent());
            SExpr::join(top, SExpr::and(a, b))
        }
        Pattern::Other => {
            let top = rel();
            let mid = rel();
            let inner = SExpr::join(rel(), ent());
            SExpr::join(top, SExpr::join(mid, inner))
        }
    }
}
