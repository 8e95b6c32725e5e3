use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use cod_lab::analysis::{
    alignment_metrics, pca_snapshot, regime_verdict, RegimeThresholds, RepresentationSnapshot,
};
use cod_lab::sexpr::{classify_pattern, parse_sexpr, SExpr, SplitIndex};
use cod_lab::taskgen::{generate, Family, Instance, Knobs, TaskLayout};
use cod_lab::trainer::{run_matrix, train, Arm, RunRecord, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{dataset_spec, train_config};
use crate::error::CliError;
use crate::report;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct SplitInfo {
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub family: Family,
    pub knobs: Knobs,
    pub train: SplitInfo,
    pub eval: SplitInfo,
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub arm: Option<Arm>,
    pub tau: Option<f64>,
    pub lambda: Option<f64>,
    pub epochs: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(a) = self.arm {
            cfg.arm = a;
        }
        if let Some(t) = self.tau {
            cfg.cod.tau = t;
        }
        if let Some(l) = self.lambda {
            cfg.cod.lambda = l;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    std::fs::write(path, contents).map_err(CliError::io(path))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|x| serde_json::to_string(x).expect("plain data serializes") + "\n")
        .collect()
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let file = std::fs::File::open(path).map_err(CliError::io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(CliError::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CliError::BadData {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::BadData {
        path: path.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })
}

/// Output goes to `out` when given, else stdout.
fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => write_file(p, text),
        None => std::io::stdout()
            .lock()
            .write_all(text.as_bytes())
            .map_err(CliError::io("<stdout>")),
    }
}

pub fn cmd_generate(spec_path: &Path, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let mut spec = dataset_spec(spec_path)?;
    if let Some(s) = seed {
        spec.train.seed = s;
    }
    let eval_spec = spec.eval();
    let train = generate(&spec.train)?;
    let eval = generate(&eval_spec)?;
    write_file(&out.join(TRAIN_FILE), jsonl(&train))?;
    write_file(&out.join(EVAL_FILE), jsonl(&eval))?;
    let manifest = Manifest {
        family: spec.train.family,
        knobs: spec.train.knobs,
        train: SplitInfo {
            n: train.len(),
            seed: spec.train.seed,
        },
        eval: SplitInfo {
            n: eval.len(),
            seed: eval_spec.seed,
        },
    };
    write_file(&out.join(MANIFEST_FILE), to_json(&manifest))?;
    log::info!(
        "wrote {} + {} instances to {}",
        train.len(),
        eval.len(),
        out.display()
    );
    Ok(())
}

pub struct Dataset {
    pub layout: TaskLayout,
    pub train: Vec<Instance>,
    pub eval: Vec<Instance>,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    Ok(Dataset {
        layout: TaskLayout::for_family(manifest.family),
        train: read_jsonl(&dir.join(TRAIN_FILE))?,
        eval: read_jsonl(&dir.join(EVAL_FILE))?,
    })
}

fn resolved_config(
    config: Option<&PathBuf>,
    overrides: &Overrides,
) -> Result<TrainConfig, CliError> {
    let mut cfg = train_config(config)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(
    data: &Path,
    config: Option<&PathBuf>,
    overrides: &Overrides,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = resolved_config(config, overrides)?;
    let ds = load_dataset(data)?;
    let result = train(&ds.train, &ds.eval, &ds.layout, &cfg)?;
    write_file(&out.join("record.json"), to_json(&result.record))?;
    write_file(&out.join("snapshots.jsonl"), jsonl(&result.snapshots))?;
    write_file(
        &out.join("metrics.csv"),
        report::metrics_csv(&result.record.epochs),
    )?;
    log::info!(
        "{}: final metric {:.4} in {:.1}s",
        result.record.run_id,
        result.record.final_metric(),
        result.record.wall_time_secs
    );
    Ok(())
}

pub fn cmd_analyze(run: &Path, out: Option<&Path>, svg: bool) -> Result<(), CliError> {
    let snap_path = run.join("snapshots.jsonl");
    if !snap_path.exists() {
        return Err(CliError::MissingSnapshots(run.to_path_buf()));
    }
    let snapshots: Vec<RepresentationSnapshot> = read_jsonl(&snap_path)?;
    if snapshots.is_empty() {
        return Err(CliError::MissingSnapshots(run.to_path_buf()));
    }
    let record_path = run.join("record.json");
    let thresholds = if record_path.exists() {
        read_json::<RunRecord>(&record_path)?.config.thresholds
    } else {
        RegimeThresholds::default()
    };
    let out = out.map_or_else(|| run.join("report"), Path::to_path_buf);

    let mut curves = Vec::with_capacity(snapshots.len());
    for s in &snapshots {
        curves.push((s.epoch, alignment_metrics(s)?));
        let pca = pca_snapshot(s)?;
        write_file(
            &out.join(format!("pca_epoch_{}.csv", s.epoch)),
            report::pca_csv(s, &pca),
        )?;
        if svg {
            write_file(
                &out.join(format!("pca_epoch_{}.svg", s.epoch)),
                report::pca_svg(s, &pca),
            )?;
        }
    }
    write_file(&out.join("curves.csv"), report::curves_csv(&curves))?;
    let trajectory: Vec<_> = curves.iter().map(|c| c.1).collect();
    let verdict = regime_verdict(&trajectory, &thresholds)?;
    write_file(&out.join("verdict.json"), to_json(&verdict))?;
    log::info!("regime: {}", verdict.regime.as_str());
    Ok(())
}

pub fn cmd_matrix(
    data: &Path,
    config: Option<&PathBuf>,
    overrides: &Overrides,
    seeds: usize,
    out: &Path,
) -> Result<(), CliError> {
    let mut base = train_config(config)?;
    overrides.apply(&mut base);
    let ds = load_dataset(data)?;
    let seeds: Vec<u64> = (0..seeds as u64).map(|k| base.seed + k).collect();
    let report = run_matrix(&ds.train, &ds.eval, &ds.layout, &base, &seeds)?;
    write_file(
        &out.join("ablation.csv"),
        report::ablation_csv(&report.rows),
    )?;
    write_file(
        &out.join("ablation.txt"),
        report::ablation_text(&report.rows),
    )?;
    write_file(&out.join("records.jsonl"), jsonl(&report.records))?;
    Ok(())
}

/// One S-expression per line; blank lines are skipped.
pub fn cmd_classify_pattern(input: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let text = std::fs::read_to_string(input).map_err(CliError::io(input))?;
    let mut tsv = String::from("pattern\tsexpr\n");
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let e = parse_sexpr(line).map_err(|err| CliError::BadData {
            path: input.to_path_buf(),
            line: i + 1,
            reason: err.to_string(),
        })?;
        tsv.push_str(&format!("{}\t{e}\n", classify_pattern(&e)));
    }
    emit(out, &tsv)
}

#[derive(Deserialize)]
struct Query {
    id: String,
    sexpr: String,
}

fn read_queries(path: &Path) -> Result<Vec<(String, SExpr)>, CliError> {
    read_jsonl::<Query>(path)?
        .into_iter()
        .enumerate()
        .map(|(i, q)| {
            parse_sexpr(&q.sexpr)
                .map(|e| (q.id, e))
                .map_err(|err| CliError::BadData {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: err.to_string(),
                })
        })
        .collect()
}

pub fn cmd_label_splits(train: &Path, test: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let train = read_queries(train)?;
    let index = SplitIndex::new(train.iter().map(|(_, e)| e));
    let mut tsv = String::from("id\tsplit\n");
    for (id, e) in read_queries(test)? {
        tsv.push_str(&format!("{id}\t{}\n", index.label(&e).as_str()));
    }
    emit(out, &tsv)
}
