//! Flat `key = value` files for generator specs and training configs.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! errors so typos do not silently fall back to defaults.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use cod_lab::taskgen::{Family, GeneratorSpec, Knobs};
use cod_lab::trainer::TrainConfig;
use serde::de::DeserializeOwned;

use crate::error::CliError;

pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn read_entries(path: &Path) -> Result<Vec<Entry>, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    parse_entries(path, &text)
}

pub fn parse_entries(path: &Path, text: &str) -> Result<Vec<Entry>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::BadSpec {
                path: path.to_path_buf(),
                line: i + 1,
                field: line.to_string(),
                reason: "expected `key = value`".into(),
            });
        };
        out.push(Entry {
            line: i + 1,
            key: key.trim().to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(out)
}

struct Ctx<'a> {
    path: &'a Path,
    entry: &'a Entry,
}

impl Ctx<'_> {
    fn bad(&self, reason: impl Into<String>) -> CliError {
        CliError::BadSpec {
            path: self.path.to_path_buf(),
            line: self.entry.line,
            field: self.entry.key.clone(),
            reason: reason.into(),
        }
    }

    fn num<T: FromStr>(&self) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.entry
            .value
            .parse()
            .map_err(|e: T::Err| self.bad(e.to_string()))
    }

    /// Enum values by their serialized (kebab-case) names.
    fn named<T: DeserializeOwned>(&self) -> Result<T, CliError> {
        serde_json::from_value(serde_json::Value::String(self.entry.value.clone()))
            .map_err(|_| self.bad(format!("unknown value `{}`", self.entry.value)))
    }
}

/// A generator spec plus the size and seed of the held-out split.
#[derive(Debug)]
pub struct DatasetSpec {
    pub train: GeneratorSpec,
    pub n_eval: usize,
    /// Defaults to the training seed plus one.
    pub eval_seed: Option<u64>,
}

impl DatasetSpec {
    pub fn eval(&self) -> GeneratorSpec {
        GeneratorSpec {
            n_instances: self.n_eval,
            seed: self.eval_seed.unwrap_or(self.train.seed.wrapping_add(1)),
            ..self.train.clone()
        }
    }
}

pub fn dataset_spec(path: &Path) -> Result<DatasetSpec, CliError> {
    let entries = read_entries(path)?;
    let mut family = None;
    for e in &entries {
        if e.key == "family" {
            let ctx = Ctx { path, entry: e };
            family = Some(Family::from_str(&e.value).map_err(|err| ctx.bad(err.to_string()))?);
        }
    }
    let family = family.ok_or_else(|| CliError::BadSpec {
        path: path.to_path_buf(),
        line: 0,
        field: "family".into(),
        reason: "missing".into(),
    })?;
    let mut spec = GeneratorSpec::new(family, 0, 0);
    let mut have_n = false;
    let mut n_eval = None;
    let mut eval_seed = None;
    for e in &entries {
        let ctx = Ctx { path, entry: e };
        let knobs: &mut Knobs = &mut spec.knobs;
        match e.key.as_str() {
            "family" => {}
            "n" | "n_instances" => {
                spec.n_instances = ctx.num()?;
                have_n = true;
            }
            "seed" => spec.seed = ctx.num()?,
            "n_eval" => n_eval = Some(ctx.num()?),
            "eval_seed" => eval_seed = Some(ctx.num()?),
            "correspondence" => knobs.correspondence = ctx.num()?,
            "graph_encodes_target" => knobs.graph_encodes_target = ctx.num()?,
            "scope" => knobs.scope = ctx.named()?,
            _ => return Err(ctx.bad("unknown key")),
        }
    }
    if !have_n {
        return Err(CliError::BadSpec {
            path: path.to_path_buf(),
            line: 0,
            field: "n".into(),
            reason: "missing".into(),
        });
    }
    Ok(DatasetSpec {
        n_eval: n_eval.unwrap_or((spec.n_instances / 4).max(1)),
        eval_seed,
        train: spec,
    })
}

pub fn train_config(path: Option<&PathBuf>) -> Result<TrainConfig, CliError> {
    let mut cfg = TrainConfig::default();
    let Some(path) = path else {
        return Ok(cfg);
    };
    for e in &read_entries(path)? {
        let ctx = Ctx { path, entry: e };
        match e.key.as_str() {
            "arm" => cfg.arm = ctx.named()?,
            "lr" => cfg.lr = ctx.num()?,
            "batch_size" => cfg.batch_size = ctx.num()?,
            "epochs" => cfg.epochs = ctx.num()?,
            "optimizer" => cfg.optimizer = ctx.named()?,
            "seed" => cfg.seed = ctx.num()?,
            "snapshot_every" => cfg.snapshot_every = ctx.num()?,
            "probe_size" => cfg.probe_size = ctx.num()?,
            "task_hidden" => cfg.task_hidden = ctx.num()?,
            "fusion" => cfg.fusion = ctx.named()?,
            "omit_cod" => cfg.omit_cod = ctx.num()?,
            "tau" => cfg.cod.tau = ctx.num()?,
            "lambda" => cfg.cod.lambda = ctx.num()?,
            "negative_pool" => cfg.cod.negative_pool = ctx.named()?,
            "batch_mean" => cfg.cod.batch_mean = ctx.num()?,
            "shared_dim" => cfg.cod.shared_dim = ctx.num()?,
            "stop_grad_negatives" => cfg.cod.stop_grad_negatives = ctx.num()?,
            "d_model" => cfg.encoder.d_model = ctx.num()?,
            "text_layers" => cfg.encoder.text_layers = ctx.num()?,
            "gnn_layers" => cfg.encoder.gnn_layers = ctx.num()?,
            "ff_dim" => cfg.encoder.ff_dim = ctx.num()?,
            "node_dim" => cfg.encoder.node_dim = ctx.num()?,
            "max_len" => cfg.encoder.max_len = ctx.num()?,
            "pooling" => cfg.encoder.pooling = ctx.named()?,
            "activation" => cfg.encoder.activation = ctx.named()?,
            "encoder_seed" => cfg.encoder.seed = ctx.num()?,
            "eps_align" => cfg.thresholds.eps_align = ctx.num()?,
            "eps_comp" => cfg.thresholds.eps_comp = ctx.num()?,
            "eps_trend" => cfg.thresholds.eps_trend = ctx.num()?,
            _ => return Err(ctx.bad("unknown key")),
        }
    }
    Ok(cfg)
}
