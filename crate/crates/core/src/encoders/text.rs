use rand_chacha::ChaCha8Rng;

use super::{Activation, EncoderConfig, EncoderError, Pooling, UNK};
use crate::diffmath::{Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Debug)]
struct AttentionLayer {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ff1: ParamId,
    ff1_b: ParamId,
    ff2: ParamId,
    ff2_b: ParamId,
}

/// Token embedding + sinusoidal positions + single-head self-attention blocks.
///
/// Each block computes `x ← x + Attn(x)` then `x ← σ(x + FF(x))`, so with
/// `σ = tanh` every output coordinate lies in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    embed: ParamId,
    layers: Vec<AttentionLayer>,
    vocab_size: usize,
    d_model: usize,
    max_len: usize,
    activation: Activation,
    pooling: Pooling,
    positions: Tensor,
}

impl TextEncoder {
    pub fn new(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        vocab_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = cfg.d_model;
        let bound = 1.0 / (d as f64).sqrt();
        let embed = store.add_uniform_bounded("text.embed", vocab_size, d, bound, rng);

        let layers = (0..cfg.text_layers)
            .map(|l| AttentionLayer {
                wq: store.add_uniform(format!("text.l{l}.wq"), d, d, rng),
                wk: store.add_uniform(format!("text.l{l}.wk"), d, d, rng),
                wv: store.add_uniform(format!("text.l{l}.wv"), d, d, rng),
                wo: store.add_uniform(format!("text.l{l}.wo"), d, d, rng),
                ff1: store.add_uniform(format!("text.l{l}.ff1"), d, cfg.ff_dim, rng),
                ff1_b: store.add_zeros(format!("text.l{l}.ff1.b"), cfg.ff_dim),
                ff2: store.add_uniform(format!("text.l{l}.ff2"), cfg.ff_dim, d, rng),
                ff2_b: store.add_zeros(format!("text.l{l}.ff2.b"), d),
            })
            .collect();
        Self {
            embed,
            layers,
            vocab_size,
            d_model: d,
            max_len: cfg.max_len,
            activation: cfg.activation,
            pooling: cfg.pooling,
            positions: sinusoidal_positions(cfg.max_len, d),
        }
    }

    pub fn with_pooling(mut self, pooling: Pooling) -> Self {
        self.pooling = pooling;
        self
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Returns `(per-token [L × d], pooled)`. Out-of-vocabulary ids are read
    /// as `UNK`. Per-entity pooling needs `spans` and yields `[E × d]`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        params: &Bound,
        tokens: &[usize],
        spans: Option<&[(usize, usize)]>,
    ) -> Result<(Var, Var), EncoderError> {
        if tokens.is_empty() {
            return Err(EncoderError::EmptySequence);
        }
        if tokens.len() > self.max_len {
            return Err(EncoderError::SequenceTooLong {
                len: tokens.len(),
                max: self.max_len,
            });
        }
        let ids: Vec<usize> = tokens
            .iter()
            .map(|&t| {
                if t < self.vocab_size {
                    t
                } else {
                    log::warn!(
                        "token id {t} outside vocabulary of {}, using UNK",
                        self.vocab_size
                    );
                    UNK
                }
            })
            .collect();
        let len = ids.len();
        let d = self.d_model;

        let emb = tape.gather_rows(params.var(self.embed), &ids)?;
        let pos = Tensor::from_parts(vec![len, d], self.positions.data()[..len * d].to_vec());
        let pos = tape.constant(pos);
        let mut x = tape.add(emb, pos)?;

        let scale = 1.0 / (d as f64).sqrt();
        for layer in &self.layers {
            let q = tape.matmul(x, params.var(layer.wq))?;
            let k = tape.matmul(x, params.var(layer.wk))?;
            let v = tape.matmul(x, params.var(layer.wv))?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores)?;
            let ctx = tape.matmul(attn, v)?;
            let out = tape.matmul(ctx, params.var(layer.wo))?;
            x = tape.add(x, out)?;

            let f = tape.matmul(x, params.var(layer.ff1))?;
            let f = tape.add_row(f, params.var(layer.ff1_b))?;
            let f = self.activation.apply(tape, f);
            let f = tape.matmul(f, params.var(layer.ff2))?;
            let f = tape.add_row(f, params.var(layer.ff2_b))?;
            let y = tape.add(x, f)?;
            x = self.activation.apply(tape, y);
        }

        let pooled = match self.pooling {
            Pooling::Mean => tape.mean_rows(x)?,
            Pooling::Cls => {
                let row = tape.gather_rows(x, &[0])?;
                tape.reshape(row, vec![d])?
            }
            Pooling::PerEntity => {
                let spans = spans.ok_or_else(|| {
                    EncoderError::Config("per-entity pooling needs entity spans".into())
                })?;
                entity_span_pool(tape, x, spans)?
            }
        };
        Ok((x, pooled))
    }
}

/// Mean of token rows `start..end` for each entity, stacked in entity order.
pub fn entity_span_pool(
    tape: &mut Tape,
    per_token: Var,
    spans: &[(usize, usize)],
) -> Result<Var, EncoderError> {
    let len = tape.value(per_token).rows();
    if spans.is_empty() {
        return Err(EncoderError::Diff(crate::diffmath::DiffError::EmptyInput {
            op: "entity_span_pool",
        }));
    }
    let mut pool = vec![0.0; spans.len() * len];
    for (e, &(start, end)) in spans.iter().enumerate() {
        if start >= end || end > len {
            return Err(EncoderError::SpanOutOfRange {
                entity: e,
                start,
                end,
                len,
            });
        }
        let w = 1.0 / (end - start) as f64;
        for t in start..end {
            pool[e * len + t] = w;
        }
    }
    let p = tape.constant(Tensor::from_parts(vec![spans.len(), len], pool));
    Ok(tape.matmul(p, per_token)?)
}

/// Standard sin/cos table `[max_len × d]`, scaled by `1/√d` so it is on the
/// same scale as freshly initialized embeddings.
pub fn sinusoidal_positions(max_len: usize, d: usize) -> Tensor {
    let scale = 1.0 / (d as f64).sqrt();
    let mut data = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            data[pos * d + i] = scale * if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_parts(vec![max_len, d], data)
}
