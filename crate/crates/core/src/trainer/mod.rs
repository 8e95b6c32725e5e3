//! End-to-end training of the four comparison arms (text only, graph only,
//! hybrid, hybrid with CoD), per-epoch probing of the shared projection
//! space, and multi-seed comparison tables.

mod metrics;
mod model;
mod optim;

pub use metrics::{accuracy, argmax, hits_at_k, macro_f1, mean_sd, EvalMetrics};
pub use model::{BatchReps, Model, Prepared};
pub use optim::{Optimizer, OptimizerKind};

use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    alignment_metrics, regime_verdict, AlignmentMetrics, AnalysisError, RegimeThresholds,
    RegimeVerdict, RepresentationSnapshot,
};
use crate::diffmath::{DiffError, Tape};
use crate::encoders::{EncoderConfig, EncoderError};
use crate::objective::{
    cod_loss, cod_loss_value, total_loss, CodConfig, FusionMode, ObjectiveError, TaskKind,
};
use crate::params::ParamStore;
use crate::taskgen::{Instance, TaskLayout};

/// Environment variable capping worker threads in [`run_matrix`].
pub const THREADS_ENV: &str = "COD_LAB_THREADS";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("no training or evaluation instances")]
    EmptyData,
    #[error("non-finite loss at epoch {epoch}, batch {batch} (instances {ids:?})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        ids: Vec<String>,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("instance {id}: {reason}")]
    DataMismatch { id: String, reason: String },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

impl From<DiffError> for TrainError {
    fn from(e: DiffError) -> Self {
        TrainError::Objective(ObjectiveError::Diff(e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arm {
    #[serde(rename = "text")]
    Text,
    #[serde(rename = "graph")]
    Graph,
    #[serde(rename = "hybrid")]
    Hybrid,
    #[serde(rename = "hybrid+cod")]
    HybridCod,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Text, Arm::Graph, Arm::Hybrid, Arm::HybridCod];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Text => "text",
            Arm::Graph => "graph",
            Arm::Hybrid => "hybrid",
            Arm::HybridCod => "hybrid+cod",
        }
    }

    pub fn uses_text(self) -> bool {
        self != Arm::Graph
    }

    pub fn uses_graph(self) -> bool {
        self != Arm::Text
    }

    /// Fusion used for the task head; single-modality arms bypass fusion.
    pub fn fusion(self, hybrid: FusionMode) -> FusionMode {
        match self {
            Arm::Text => FusionMode::TextOnly,
            Arm::Graph => FusionMode::GraphOnly,
            Arm::Hybrid | Arm::HybridCod => hybrid,
        }
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arm {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Arm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| TrainError::Config(format!("unknown arm `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arm: Arm,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub cod: CodConfig,
    pub encoder: EncoderConfig,
    /// Store probe projections every this many epochs (0 = never). Metrics
    /// are computed every epoch regardless.
    pub snapshot_every: usize,
    pub probe_size: usize,
    pub task_hidden: usize,
    pub fusion: FusionMode,
    pub thresholds: RegimeThresholds,
    /// Leave the contrastive term out of the program entirely, including
    /// the detached value logged by the other arms.
    pub omit_cod: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arm: Arm::HybridCod,
            lr: 3e-3,
            batch_size: 32,
            epochs: 30,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            cod: CodConfig::default(),
            encoder: EncoderConfig::default(),
            snapshot_every: 1,
            probe_size: 128,
            task_hidden: 64,
            fusion: FusionMode::Concat,
            thresholds: RegimeThresholds::default(),
            omit_cod: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.arm == Arm::HybridCod && !(self.cod.lambda > 0.0) {
            return Err(TrainError::Config(
                "the hybrid+cod arm needs lambda > 0; use the hybrid arm for lambda = 0".into(),
            ));
        }
        if self.arm == Arm::HybridCod && self.omit_cod {
            return Err(TrainError::Config(
                "the hybrid+cod arm cannot omit the CoD term".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!(
                "lr must be non-negative, got {}",
                self.lr
            )));
        }
        if self.probe_size < 2 {
            return Err(TrainError::Config("probe_size must be at least 2".into()));
        }
        if self.task_hidden == 0 {
            return Err(TrainError::Config("task_hidden must be positive".into()));
        }
        self.cod.validate()?;
        self.encoder.validate()?;
        Ok(())
    }

    /// CoD weight actually applied: zero for every arm but hybrid+cod.
    pub fn effective_lambda(&self) -> f64 {
        if self.arm == Arm::HybridCod {
            self.cod.lambda
        } else {
            0.0
        }
    }

    pub fn run_id(&self) -> String {
        format!("{}-s{}", self.arm, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean task loss over the epoch's training batches.
    pub task_loss: f64,
    /// Mean CoD loss over training batches; `None` when not computed.
    pub train_cod_loss: Option<f64>,
    /// CoD loss of the probe batch (never part of the gradient).
    pub probe_cod_loss: Option<f64>,
    pub eval: EvalMetrics,
    pub alignment: AlignmentMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub verdict: Option<RegimeVerdict>,
    /// Excluded from serialized output so records are reproducible byte for byte.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl RunRecord {
    pub fn final_metric(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.eval.primary())
    }

    pub fn alignment_trajectory(&self) -> Vec<AlignmentMetrics> {
        self.epochs.iter().map(|e| e.alignment).collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub record: RunRecord,
    pub snapshots: Vec<RepresentationSnapshot>,
    pub model: Model,
}

pub fn prepare(
    data: &[Instance],
    layout: &TaskLayout,
    enc: &EncoderConfig,
) -> Result<Vec<Prepared>, TrainError> {
    data.iter().map(|i| Prepared::new(i, layout, enc)).collect()
}

pub fn train(
    train_data: &[Instance],
    eval_data: &[Instance],
    layout: &TaskLayout,
    cfg: &TrainConfig,
) -> Result<TrainOutput, TrainError> {
    train_with(train_data, eval_data, layout, cfg, |_, _| {})
}

/// [`train`] with a callback receiving the parameters after every epoch.
pub fn train_with(
    train_data: &[Instance],
    eval_data: &[Instance],
    layout: &TaskLayout,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &ParamStore),
) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    if train_data.is_empty() || eval_data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let started = Instant::now();
    let train_set = prepare(train_data, layout, &cfg.encoder)?;
    let eval_set = prepare(eval_data, layout, &cfg.encoder)?;
    let probe: Vec<&Prepared> = eval_set.iter().take(cfg.probe_size).collect();

    let mut model = Model::new(layout, cfg);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &model.store);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let lambda = cfg.effective_lambda();
    let log_cod = cfg.arm == Arm::Hybrid && !cfg.omit_cod;
    let run_id = cfg.run_id();

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut snapshots = Vec::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut task_sum = 0.0;
        let mut cod_sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mut tape = Tape::new();
            let params = model.store.bind(&mut tape);
            let reps = model.encode(
                &mut tape,
                &params,
                &batch,
                cfg.arm.uses_text(),
                cfg.arm.uses_graph(),
            )?;
            let logits = model.logits(&mut tape, &params, reps)?;
            let l_task = crate::objective::task_loss(&mut tape, logits, &model.targets(&batch))?;

            let mut l_cod = None;
            if cfg.arm == Arm::HybridCod {
                let (t, g) = (reps.text.expect("hybrid"), reps.graph.expect("hybrid"));
                let (zt, zg) = model.project(&mut tape, &params, t, g)?;
                l_cod = Some(cod_loss(&mut tape, zt, zg, &cfg.cod)?);
            }
            let total = total_loss(&mut tape, l_task, l_cod, lambda)?;
            let task_value = tape.value(l_task).item();
            let total_value = tape.value(total).item();
            if !total_value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    ids: batch.iter().map(|p| p.id.clone()).collect(),
                });
            }
            let mut cod_value = l_cod.map(|c| tape.value(c).item());
            if log_cod {
                // detached copy: built after the loss, never reached by backward
                let t = tape.stop_gradient(reps.text.expect("hybrid"));
                let g = tape.stop_gradient(reps.graph.expect("hybrid"));
                let (zt, zg) = model.project(&mut tape, &params, t, g)?;
                let c = cod_loss(&mut tape, zt, zg, &cfg.cod)?;
                cod_value = Some(tape.value(c).item());
            }
            tape.backward(total)?;
            let grads = params.grads(&tape);
            opt.step(&mut model.store, &grads);

            task_sum += task_value;
            cod_sum += cod_value.unwrap_or(0.0);
            batches += 1;
        }

        let eval = evaluate(&model, &eval_set, cfg.arm)?;
        let (zt, zg) = model.probe(&probe)?;
        let snapshot = RepresentationSnapshot {
            epoch,
            run_id: run_id.clone(),
            z_text: zt,
            z_graph: zg,
        };
        let alignment = alignment_metrics(&snapshot)?;
        let probe_cod_loss = if cfg.omit_cod {
            None
        } else {
            Some(cod_loss_value(
                &snapshot.z_text,
                &snapshot.z_graph,
                &cfg.cod,
            )?)
        };
        let record = EpochRecord {
            epoch,
            task_loss: task_sum / batches as f64,
            train_cod_loss: (cfg.arm == Arm::HybridCod || log_cod)
                .then(|| cod_sum / batches as f64),
            probe_cod_loss,
            eval,
            alignment,
        };
        log::info!(
            "{run_id} epoch {epoch}: task {:.4} metric {:.4} paired_cos {:.3} ratio {:.3}",
            record.task_loss,
            eval.primary(),
            alignment.paired_cos,
            alignment.ratio()
        );
        epochs.push(record);
        if cfg.snapshot_every > 0 && epoch % cfg.snapshot_every == 0 {
            snapshots.push(snapshot);
        }
        on_epoch(epoch, &model.store);
    }

    let trajectory: Vec<AlignmentMetrics> = epochs.iter().map(|e| e.alignment).collect();
    let verdict = if trajectory.len() >= 3 {
        Some(regime_verdict(&trajectory, &cfg.thresholds)?)
    } else {
        None
    };
    Ok(TrainOutput {
        record: RunRecord {
            run_id,
            config: cfg.clone(),
            epochs,
            verdict,
            wall_time_secs: started.elapsed().as_secs_f64(),
        },
        snapshots,
        model,
    })
}

/// Accuracy and macro-F1 for classification, Hits@K for ranking.
pub fn evaluate(model: &Model, data: &[Prepared], arm: Arm) -> Result<EvalMetrics, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    const CHUNK: usize = 64;
    let mut outputs = Vec::with_capacity(data.len());
    for chunk in data.chunks(CHUNK) {
        let batch: Vec<&Prepared> = chunk.iter().collect();
        outputs.extend(model.predict(&batch, arm)?);
    }
    Ok(match model.task_kind() {
        TaskKind::Classification => {
            let pred: Vec<usize> = outputs.iter().map(|o| argmax(o)).collect();
            let gold: Vec<usize> = data
                .iter()
                .map(|p| p.class.expect("checked on load"))
                .collect();
            EvalMetrics {
                accuracy: Some(accuracy(&pred, &gold)),
                macro_f1: Some(macro_f1(&pred, &gold)),
                hits_at_k: None,
            }
        }
        TaskKind::Ranking => {
            let total: f64 = outputs
                .iter()
                .zip(data)
                .map(|(s, p)| hits_at_k(s, p.gold.as_ref().expect("checked on load")))
                .sum();
            EvalMetrics {
                accuracy: None,
                macro_f1: None,
                hits_at_k: Some(total / data.len() as f64),
            }
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub arm: Arm,
    pub mean: f64,
    pub sd: f64,
    pub runs: Vec<f64>,
    /// `best`, `second` or empty.
    pub marker: String,
}

#[derive(Clone, Debug)]
pub struct MatrixReport {
    pub rows: Vec<MatrixRow>,
    pub records: Vec<RunRecord>,
}

/// Worker count: `COD_LAB_THREADS` if set, else the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Trains every arm under every seed and summarizes the final task metric.
/// Arms sharing a seed see the same data order.
pub fn run_matrix(
    train_data: &[Instance],
    eval_data: &[Instance],
    layout: &TaskLayout,
    base: &TrainConfig,
    seeds: &[u64],
) -> Result<MatrixReport, TrainError> {
    if seeds.is_empty() {
        return Err(TrainError::Config(
            "run_matrix needs at least one seed".into(),
        ));
    }
    let jobs: Vec<TrainConfig> = Arm::ALL
        .iter()
        .flat_map(|&arm| {
            seeds.iter().map(move |&seed| TrainConfig {
                arm,
                seed,
                snapshot_every: 0,
                ..base.clone()
            })
        })
        .collect();
    for job in &jobs {
        job.validate()?;
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunRecord, TrainError>>>> =
        Mutex::new(vec![None; jobs.len()]);
    let threads = worker_threads().min(jobs.len());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let out = train(train_data, eval_data, layout, &jobs[i]).map(|o| o.record);
                results.lock().expect("no poisoned workers")[i] = Some(out);
            });
        }
    });
    let records: Vec<RunRecord> = results
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<_, _>>()?;

    let mut rows: Vec<MatrixRow> = Arm::ALL
        .iter()
        .map(|&arm| {
            let runs: Vec<f64> = records
                .iter()
                .filter(|r| r.config.arm == arm)
                .map(RunRecord::final_metric)
                .collect();
            let (mean, sd) = mean_sd(&runs);
            MatrixRow {
                arm,
                mean,
                sd,
                runs,
                marker: String::new(),
            }
        })
        .collect();
    let mut ranked: Vec<usize> = (0..rows.len()).collect();
    ranked.sort_by(|&a, &b| rows[b].mean.total_cmp(&rows[a].mean));
    rows[ranked[0]].marker = "best".into();
    rows[ranked[1]].marker = "second".into();
    Ok(MatrixReport { rows, records })
}
