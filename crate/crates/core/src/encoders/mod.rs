//! The two modality encoders: a single-head self-attention text encoder and
//! a relational graph convolution encoder, plus entity span pooling.

mod graph;
mod text;

pub use graph::{structural_init, GraphEncoder, RelGraph};
pub use text::{entity_span_pool, sinusoidal_positions, TextEncoder};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::{DiffError, Var};

pub const PAD: usize = 0;
pub const UNK: usize = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EncoderError {
    #[error("empty token sequence")]
    EmptySequence,
    #[error("sequence length {len} exceeds max_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("edge ({src}, {rel}, {dst}) references a node outside 0..{num_nodes}")]
    DanglingEdge {
        src: usize,
        rel: usize,
        dst: usize,
        num_nodes: usize,
    },
    #[error("relation id {rel} not in 1..{num_relations} (0 is the reserved self relation)")]
    RelationOutOfRange { rel: usize, num_relations: usize },
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("span {start}..{end} for entity {entity} is outside 0..{len} or empty")]
    SpanOutOfRange {
        entity: usize,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("node features have width {found}, encoder expects {expected}")]
    FeatureWidth { expected: usize, found: usize },
    #[error("graph uses {found} relations, encoder was built for {expected}")]
    RelationCount { expected: usize, found: usize },
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    Mean,
    Cls,
    PerEntity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub(crate) fn apply(self, tape: &mut crate::diffmath::Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Identity => x,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub text_layers: usize,
    pub gnn_layers: usize,
    pub ff_dim: usize,
    pub node_dim: usize,
    pub max_len: usize,
    pub pooling: Pooling,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            text_layers: 1,
            gnn_layers: 2,
            ff_dim: 64,
            node_dim: 16,
            max_len: 128,
            pooling: Pooling::Mean,
            activation: Activation::Tanh,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.d_model == 0 || self.ff_dim == 0 || self.max_len == 0 {
            return Err(EncoderError::Config("dimensions must be positive".into()));
        }
        if !(1..=3).contains(&self.gnn_layers) {
            return Err(EncoderError::Config(format!(
                "gnn_layers must be 1, 2 or 3 (got {})",
                self.gnn_layers
            )));
        }
        if self.text_layers == 0 {
            return Err(EncoderError::Config(
                "text_layers must be at least 1".into(),
            ));
        }
        if self.node_dim < 4 {
            return Err(EncoderError::Config("node_dim must be at least 4".into()));
        }
        Ok(())
    }
}

/// Encoder outputs for one instance. `pooled_*` are `[d]` (mean/cls) or
/// `[E × d]` (per-entity, row `i` is entity `i` in both modalities).
#[derive(Clone, Copy, Debug)]
pub struct EncodedPair {
    pub text_tokens: Var,
    pub text_pooled: Var,
    pub graph_nodes: Var,
    pub graph_pooled: Var,
}

/// Token table with `PAD = 0`, `UNK = 1` and a contiguous block of entity
/// placeholders `<E1>…<E{max}>` starting at index 2.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    max_entities: usize,
}

impl Vocab {
    pub fn new(max_entities: usize) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
            max_entities,
        };
        v.push("<PAD>");
        v.push("<UNK>");
        for i in 1..=max_entities {
            v.push(&placeholder_token(i - 1));
        }
        v
    }

    /// Adds `token` if absent and returns its index.
    pub fn push(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Index of the placeholder for zero-based entity `i`.
    pub fn placeholder(&self, i: usize) -> Option<usize> {
        (i < self.max_entities).then_some(2 + i)
    }

    /// Zero-based entity for a placeholder index.
    pub fn entity_of(&self, id: usize) -> Option<usize> {
        (2..2 + self.max_entities).contains(&id).then(|| id - 2)
    }

    pub fn max_entities(&self) -> usize {
        self.max_entities
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id_or_unk(t)).collect()
    }
}

/// `<E{i+1}>` for zero-based entity `i`.
pub fn placeholder_token(i: usize) -> String {
    format!("<E{}>", i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_reserved_layout() {
        let mut v = Vocab::new(4);
        assert_eq!(v.id("<PAD>"), Some(PAD));
        assert_eq!(v.id("<UNK>"), Some(UNK));
        assert_eq!(v.id("<E1>"), Some(2));
        assert_eq!(v.id("<E4>"), Some(5));
        assert_eq!(v.placeholder(3), Some(5));
        assert_eq!(v.placeholder(4), None);
        let r = v.push("rel");
        assert_eq!(r, 6);
        assert_eq!(v.push("rel"), 6);
        assert_eq!(v.entity_of(4), Some(2));
        assert_eq!(v.entity_of(6), None);
        assert_eq!(v.id_or_unk("missing"), UNK);
    }

    #[test]
    fn config_rejects_bad_layer_counts() {
        let mut c = EncoderConfig::default();
        assert!(c.validate().is_ok());
        c.gnn_layers = 4;
        assert!(c.validate().is_err());
        c.gnn_layers = 0;
        assert!(c.validate().is_err());
    }
}
