use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Arm, TrainConfig, TrainError};
use crate::diffmath::{Tape, Tensor, Var};
use crate::encoders::{EncoderConfig, GraphEncoder, Pooling, RelGraph, TextEncoder};
use crate::objective::{fuse, FusionMode, ProjectionHeads, TaskHead, TaskKind, TaskTargets};
use crate::params::{Bound, ParamId, ParamStore};
use crate::taskgen::{Instance, TaskLayout};

/// An instance with its graph features computed once up front.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    pub tokens: Vec<usize>,
    pub spans: Option<Vec<(usize, usize)>>,
    pub graph: RelGraph,
    pub class: Option<usize>,
    pub gold: Option<Vec<bool>>,
}

impl Prepared {
    pub fn new(
        inst: &Instance,
        layout: &TaskLayout,
        enc: &EncoderConfig,
    ) -> Result<Self, TrainError> {
        let graph = inst.graph(layout.num_relations, enc.node_dim)?;
        let p = Self {
            id: inst.id.clone(),
            tokens: inst.tokens.clone(),
            spans: inst.span_list(),
            graph,
            class: inst.class(),
            gold: inst.gold_mask(),
        };
        let ok = match layout.task_kind {
            TaskKind::Classification => p.class.is_some_and(|c| c < layout.num_classes),
            TaskKind::Ranking => p.gold.is_some() && p.spans.is_some(),
        };
        if !ok {
            return Err(TrainError::DataMismatch {
                id: inst.id.clone(),
                reason: format!("instance does not fit a {} task", layout.family),
            });
        }
        Ok(p)
    }

    /// Rows this instance contributes to a batch.
    pub fn rows(&self, kind: TaskKind) -> usize {
        match kind {
            TaskKind::Classification => 1,
            TaskKind::Ranking => self.graph.num_nodes(),
        }
    }
}

/// Encoders, projection heads and task head sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    text: TextEncoder,
    graph: GraphEncoder,
    heads: ProjectionHeads,
    task: TaskHead,
    residual: Option<ParamId>,
    fusion: FusionMode,
    kind: TaskKind,
    num_classes: usize,
}

/// Encoder outputs for a batch: pooled text and graph rows (`None` when the
/// arm does not run that encoder).
#[derive(Clone, Copy, Debug)]
pub struct BatchReps {
    pub text: Option<Var>,
    pub graph: Option<Var>,
}

impl Model {
    pub fn new(layout: &TaskLayout, cfg: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let enc = &cfg.encoder;
        let pooling = match layout.task_kind {
            TaskKind::Classification => enc.pooling,
            TaskKind::Ranking => Pooling::PerEntity,
        };
        let mut store = ParamStore::new();
        let text =
            TextEncoder::new(&mut store, enc, layout.vocab.len(), &mut rng).with_pooling(pooling);
        let graph = GraphEncoder::new(&mut store, enc, layout.num_relations, &mut rng)
            .with_pooling(pooling);
        let heads = ProjectionHeads::new(&mut store, enc.d_model, cfg.cod.shared_dim, &mut rng);
        let fusion = cfg.arm.fusion(cfg.fusion);
        let residual = (fusion == FusionMode::Residual)
            .then(|| store.add_uniform("fusion.residual", enc.d_model, enc.d_model, &mut rng));
        let d_in = fusion.output_dim(enc.d_model, enc.d_model);
        let task = TaskHead::new(
            &mut store,
            d_in,
            cfg.task_hidden,
            layout.task_kind,
            layout.num_classes,
            &mut rng,
        );
        Self {
            store,
            text,
            graph,
            heads,
            task,
            residual,
            fusion,
            kind: layout.task_kind,
            num_classes: layout.num_classes,
        }
    }

    pub fn task_kind(&self) -> TaskKind {
        self.kind
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        params: &Bound,
        batch: &[&Prepared],
        text: bool,
        graph: bool,
    ) -> Result<BatchReps, TrainError> {
        let mut tp = Vec::with_capacity(batch.len());
        let mut gp = Vec::with_capacity(batch.len());
        for inst in batch {
            if text {
                let (_, p) = self
                    .text
                    .encode(tape, params, &inst.tokens, inst.spans.as_deref())?;
                tp.push(p);
            }
            if graph {
                let (_, p) = self.graph.encode(tape, params, &inst.graph)?;
                gp.push(p);
            }
        }
        Ok(BatchReps {
            text: if text {
                Some(tape.stack_rows(&tp)?)
            } else {
                None
            },
            graph: if graph {
                Some(tape.stack_rows(&gp)?)
            } else {
                None
            },
        })
    }

    /// Task logits (`[B × C]`) or candidate scores (`[rows × 1]`).
    pub fn logits(
        &self,
        tape: &mut Tape,
        params: &Bound,
        reps: BatchReps,
    ) -> Result<Var, TrainError> {
        let h = match (reps.text, reps.graph) {
            (Some(t), Some(g)) => {
                let w = self.residual.map(|id| params.var(id));
                fuse(tape, t, g, self.fusion, w)?
            }
            (Some(t), None) => t,
            (None, Some(g)) => g,
            (None, None) => unreachable!("at least one encoder runs"),
        };
        Ok(self.task.logits(tape, params, h)?)
    }

    pub fn project(
        &self,
        tape: &mut Tape,
        params: &Bound,
        h_text: Var,
        h_graph: Var,
    ) -> Result<(Var, Var), TrainError> {
        Ok(self.heads.project(tape, params, h_text, h_graph)?)
    }

    pub fn targets(&self, batch: &[&Prepared]) -> TaskTargets {
        match self.kind {
            TaskKind::Classification => TaskTargets::Classes {
                labels: batch
                    .iter()
                    .map(|p| p.class.expect("checked on load"))
                    .collect(),
                num_classes: self.num_classes,
            },
            TaskKind::Ranking => TaskTargets::Candidates {
                gold: batch
                    .iter()
                    .map(|p| p.gold.clone().expect("checked on load"))
                    .collect(),
            },
        }
    }

    /// Gradient-free forward returning per-instance logits or scores.
    pub fn predict(&self, batch: &[&Prepared], arm: Arm) -> Result<Vec<Vec<f64>>, TrainError> {
        let mut tape = Tape::new();
        let params = self.store.bind_frozen(&mut tape);
        let reps = self.encode(&mut tape, &params, batch, arm.uses_text(), arm.uses_graph())?;
        let logits = self.logits(&mut tape, &params, reps)?;
        let v = tape.value(logits);
        Ok(match self.kind {
            TaskKind::Classification => v.to_rows(),
            TaskKind::Ranking => {
                let mut at = 0;
                batch
                    .iter()
                    .map(|p| {
                        let n = p.graph.num_nodes();
                        let s = v.data()[at..at + n].to_vec();
                        at += n;
                        s
                    })
                    .collect()
            }
        })
    }

    /// Gradient-free projections of both modalities for a probe batch.
    pub fn probe(&self, batch: &[&Prepared]) -> Result<(Tensor, Tensor), TrainError> {
        let mut tape = Tape::new();
        let params = self.store.bind_frozen(&mut tape);
        let reps = self.encode(&mut tape, &params, batch, true, true)?;
        let (zt, zg) = self.project(
            &mut tape,
            &params,
            reps.text.expect("text encoded"),
            reps.graph.expect("graph encoded"),
        )?;
        Ok((tape.value(zt).clone(), tape.value(zg).clone()))
    }
}
