//! Command-line front end: `gen`, `train`, `eval`, `match`, `sweep`.
//!
//! Every command writes `manifest.json` into the output directory before
//! doing any work. JSON outputs carry the manifest digest under
//! `manifest_digest`; CSV outputs start with a `# manifest <digest>` line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graphs::{GraphMode, KnowledgeBase};
use crate::pipeline::{
    evaluate, generate_benchmark, log_to_csv, train, OntologySpec, SceneSet, SyntheticOntology,
    TrainConfig, TrainedModel,
};
use crate::sinkhorn::{argmax_match, sinkhorn_normalize, MarginalSpec, SinkhornParams};
use crate::tensor::Matrix;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ONTOLOGY_FILE: &str = "ontology.json";
pub const SCENES_FILE: &str = "scenes.json";
pub const KB_FILE: &str = "knowledge_base.json";
pub const MODEL_FILE: &str = "model.json";
pub const LOG_FILE: &str = "train_log.csv";
pub const REPORT_FILE: &str = "report.json";
pub const MATCH_FILE: &str = "match.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_HEADER: &str = "value,seen,unseen,harmonic";

#[derive(Debug, Parser)]
#[command(
    name = "vlmatch",
    version,
    about = "Vision-language graph matching experiments"
)]
pub struct Cli {
    /// Seed for generation; overrides the config seed for train and sweep.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Only print errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic benchmark and its knowledge base.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 200)]
        scenes: usize,
    },
    /// Train on the training split of a generated benchmark.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a trained model on the test split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mode: String,
    },
    /// Sinkhorn-normalize an affinity matrix (JSON array of rows).
    Match {
        #[arg(long)]
        affinity: PathBuf,
        /// JSON file `{"rows": [...], "cols": [...]}`; defaults to unit
        /// column mass spread evenly over the rows.
        #[arg(long)]
        marginals: Option<PathBuf>,
        #[arg(long, default_value_t = crate::sinkhorn::DEFAULT_EPSILON)]
        epsilon: f64,
    },
    /// Train and evaluate once per value of one hyperparameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    K,
    #[value(name = "R")]
    R,
    Alpha,
    Beta,
    Epsilon,
}

/// Provenance record written before any computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub config: Value,
    /// Input path to SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    /// File names inside the output directory, so reruns elsewhere match.
    pub outputs: Vec<String>,
}

impl RunManifest {
    fn new(command: &str, seed: Option<u64>, config: Value) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    /// Writes the manifest and returns the digest of its bytes.
    fn write(&self, out: &Path) -> Result<String> {
        let text = to_json(self)?;
        write_file(&out.join(MANIFEST_FILE), &text)?;
        Ok(sha256_hex(text.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads an input and records its digest.
fn read_input(path: &Path, manifest: &mut RunManifest) -> Result<String> {
    let bytes = read_file(path)?;
    manifest
        .inputs
        .insert(path.display().to_string(), sha256_hex(&bytes));
    String::from_utf8(bytes).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Validation(format!("serialization failed: {e}")))?;
    text.push('\n');
    Ok(text)
}

/// Serializes `value` as a JSON object with the manifest digest added.
fn stamped<T: Serialize>(value: &T, digest: &str) -> Result<String> {
    let mut v = serde_json::to_value(value).map_err(|e| Error::Validation(e.to_string()))?;
    match &mut v {
        Value::Object(map) => {
            map.insert("manifest_digest".into(), Value::String(digest.to_string()));
        }
        _ => {
            return Err(Error::Validation(
                "only JSON objects can carry a manifest digest".into(),
            ))
        }
    }
    to_json(&v)
}

/// Parses a stamped file, dropping the digest before decoding.
fn parse_stamped<T: for<'de> Deserialize<'de>>(text: &str, path: &Path) -> Result<T> {
    let mut v: Value = serde_json::from_str(text).map_err(|e| Error::parse(path, &e))?;
    if let Value::Object(map) = &mut v {
        map.remove("manifest_digest");
    }
    serde_json::from_value(v).map_err(|e| Error::parse(path, &e))
}

fn names(files: &[&str]) -> Vec<String> {
    files.iter().map(|f| f.to_string()).collect()
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

struct Data {
    scenes: SceneSet,
    kb: KnowledgeBase,
}

fn load_data(dir: &Path, manifest: &mut RunManifest) -> Result<Data> {
    let scenes_path = dir.join(SCENES_FILE);
    let kb_path = dir.join(KB_FILE);
    let scenes = parse_stamped(&read_input(&scenes_path, manifest)?, &scenes_path)?;
    let kb_file = parse_stamped(&read_input(&kb_path, manifest)?, &kb_path)?;
    let kb = KnowledgeBase::from_file_repr(kb_file)?;
    Ok(Data { scenes, kb })
}

fn load_config(path: &Path, seed: Option<u64>, manifest: &mut RunManifest) -> Result<TrainConfig> {
    let mut config = TrainConfig::from_json(&read_input(path, manifest)?, path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

pub fn cmd_gen(spec_path: &Path, scenes: usize, out: &Path, seed: u64) -> Result<()> {
    let mut manifest = RunManifest::new("gen", Some(seed), Value::Null);
    let text = read_input(spec_path, &mut manifest)?;
    let spec: OntologySpec =
        serde_json::from_str(&text).map_err(|e| Error::parse(spec_path, &e))?;
    manifest.config = serde_json::json!({ "spec": spec, "scenes": scenes });
    manifest.outputs = names(&[ONTOLOGY_FILE, SCENES_FILE, KB_FILE]);
    prepare_out(out)?;
    let digest = manifest.write(out)?;

    let bench = generate_benchmark(&spec, scenes, seed)?;
    write_file(
        &out.join(ONTOLOGY_FILE),
        &stamped(&bench.ontology, &digest)?,
    )?;
    write_file(&out.join(SCENES_FILE), &stamped(&bench.scenes, &digest)?)?;
    write_file(
        &out.join(KB_FILE),
        &stamped(&bench.knowledge_base.to_file_repr(), &digest)?,
    )?;
    log::info!(
        "generated {} training and {} test scenes into {}",
        bench.scenes.train.len(),
        bench.scenes.test.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_train(config_path: &Path, data_dir: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut manifest = RunManifest::new("train", seed, Value::Null);
    let config = load_config(config_path, seed, &mut manifest)?;
    let data = load_data(data_dir, &mut manifest)?;
    config.validate(&data.kb)?;
    manifest.seed = Some(config.seed);
    manifest.config =
        serde_json::to_value(&config).map_err(|e| Error::Validation(e.to_string()))?;
    manifest.outputs = names(&[MODEL_FILE, LOG_FILE]);
    prepare_out(out)?;
    let digest = manifest.write(out)?;

    let model = train(&config, &data.scenes.train, &data.kb)?;
    write_file(&out.join(MODEL_FILE), &stamped(&model, &digest)?)?;
    write_file(
        &out.join(LOG_FILE),
        &format!("# manifest {digest}\n{}", log_to_csv(&model.log)),
    )?;
    if let Some(last) = model.log.last() {
        log::info!(
            "trained {} steps, final total loss {:.4}",
            model.log.len(),
            last.total
        );
    }
    Ok(())
}

fn parse_mode(mode: &str) -> Result<GraphMode> {
    match mode {
        "inductive" => Ok(GraphMode::Inductive),
        "transductive" => Ok(GraphMode::Transductive),
        other => Err(Error::Validation(format!(
            "mode must be `inductive` or `transductive`, got {other:?}"
        ))),
    }
}

/// Returns the report table for printing.
pub fn cmd_eval(model_path: &Path, data_dir: &Path, mode: &str, out: &Path) -> Result<String> {
    let mode = parse_mode(mode)?;
    let mut manifest = RunManifest::new("eval", None, serde_json::json!({ "mode": mode }));
    let model: TrainedModel = parse_stamped(&read_input(model_path, &mut manifest)?, model_path)?;
    let data = load_data(data_dir, &mut manifest)?;
    manifest.seed = Some(model.config.seed);
    manifest.outputs = names(&[REPORT_FILE]);
    prepare_out(out)?;
    let digest = manifest.write(out)?;

    if model.config.mode != mode {
        log::warn!(
            "model was trained in {:?} mode but is evaluated as {:?}",
            model.config.mode,
            mode
        );
    }
    let mut report = evaluate(
        &model.params,
        &data.scenes.test,
        &data.kb,
        mode,
        &model.diagnostics,
    )?;
    report.manifest_digest = Some(digest);
    write_file(&out.join(REPORT_FILE), &to_json(&report)?)?;
    Ok(report.table())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginalsFile {
    pub rows: Vec<f64>,
    pub cols: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchOutput {
    pub plan: Matrix,
    pub marginal_error: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Column of the largest plan entry in every row.
    pub matches: Vec<usize>,
}

pub fn cmd_match(
    affinity_path: &Path,
    marginals_path: Option<&Path>,
    epsilon: f64,
    out: &Path,
) -> Result<MatchOutput> {
    let mut manifest = RunManifest::new("match", None, serde_json::json!({ "epsilon": epsilon }));
    let text = read_input(affinity_path, &mut manifest)?;
    let affinity: Matrix =
        serde_json::from_str(&text).map_err(|e| Error::parse(affinity_path, &e))?;
    let marginals = match marginals_path {
        Some(p) => {
            let m: MarginalsFile = serde_json::from_str(&read_input(p, &mut manifest)?)
                .map_err(|e| Error::parse(p, &e))?;
            MarginalSpec::new(m.rows, m.cols)?
        }
        None => MarginalSpec::for_subgraphs(affinity.rows(), affinity.cols())?,
    };
    manifest.config["row_targets"] = serde_json::json!(marginals.row_targets());
    manifest.config["col_targets"] = serde_json::json!(marginals.col_targets());
    manifest.outputs = names(&[MATCH_FILE]);
    prepare_out(out)?;
    let digest = manifest.write(out)?;

    let params = SinkhornParams {
        epsilon,
        ..SinkhornParams::default()
    };
    let plan = sinkhorn_normalize(&affinity, &marginals, &params)?;
    if !plan.converged {
        log::warn!(
            "Sinkhorn stopped after {} iterations with marginal error {:.3e}",
            plan.iterations,
            plan.marginal_error
        );
    }
    let output = MatchOutput {
        matches: argmax_match(&plan),
        plan: plan.plan,
        marginal_error: plan.marginal_error,
        converged: plan.converged,
        iterations: plan.iterations,
    };
    write_file(&out.join(MATCH_FILE), &stamped(&output, &digest)?)?;
    Ok(output)
}

fn apply_sweep(config: &TrainConfig, param: SweepParam, value: f64) -> Result<TrainConfig> {
    let integer = || {
        if value >= 0.0 && value.fract() == 0.0 {
            Ok(value as usize)
        } else {
            Err(Error::Validation(format!(
                "{param:?} takes non-negative integers, got {value}"
            )))
        }
    };
    let mut c = config.clone();
    match param {
        SweepParam::K => c.k = integer()?,
        SweepParam::R => c.r = integer()?,
        SweepParam::Alpha => c.alpha = value,
        SweepParam::Beta => c.beta = value,
        SweepParam::Epsilon => c.epsilon = value,
    }
    Ok(c)
}

/// Every value is validated before the first training run.
pub fn cmd_sweep(
    config_path: &Path,
    data_dir: &Path,
    param: SweepParam,
    values: &[f64],
    out: &Path,
    seed: Option<u64>,
) -> Result<String> {
    let mut manifest = RunManifest::new("sweep", seed, Value::Null);
    let config = load_config(config_path, seed, &mut manifest)?;
    let data = load_data(data_dir, &mut manifest)?;
    let configs = values
        .iter()
        .map(|&v| {
            let c = apply_sweep(&config, param, v)?;
            c.validate(&data.kb).map_err(|e| match e {
                Error::Validation(m) => Error::Validation(format!("sweep value {v}: {m}")),
                other => other,
            })?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    manifest.seed = Some(config.seed);
    manifest.config = serde_json::json!({
        "base": config,
        "param": format!("{param:?}"),
        "values": values,
    });
    manifest.outputs = names(&[SWEEP_FILE]);
    prepare_out(out)?;
    let digest = manifest.write(out)?;

    let mut csv = format!("# manifest {digest}\n{SWEEP_HEADER}\n");
    for (value, c) in values.iter().zip(&configs) {
        let model = train(c, &data.scenes.train, &data.kb)?;
        let r = evaluate(
            &model.params,
            &data.scenes.test,
            &data.kb,
            c.mode,
            &model.diagnostics,
        )?;
        log::info!(
            "{param:?} = {value}: seen {:.1} unseen {:.1} hIoU {:.1}",
            r.seen_miou,
            r.unseen_miou,
            r.harmonic
        );
        csv.push_str(&format!(
            "{value},{},{},{}\n",
            r.seen_miou, r.unseen_miou, r.harmonic
        ));
    }
    write_file(&out.join(SWEEP_FILE), &csv)?;
    Ok(csv)
}

/// Loads a generated ontology file (used by tests and tooling).
pub fn load_ontology(path: &Path) -> Result<SyntheticOntology> {
    let text = String::from_utf8(read_file(path)?).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_stamped(&text, path)
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let out = cli.out.as_path();
    match cli.command {
        Command::Gen { spec, scenes } => cmd_gen(&spec, scenes, out, cli.seed.unwrap_or(0)),
        Command::Train { config, data } => cmd_train(&config, &data, out, cli.seed),
        Command::Eval { model, data, mode } => {
            let table = cmd_eval(&model, &data, &mode, out)?;
            if !cli.quiet {
                print!("{table}");
            }
            Ok(())
        }
        Command::Match {
            affinity,
            marginals,
            epsilon,
        } => {
            let m = cmd_match(&affinity, marginals.as_deref(), epsilon, out)?;
            if !cli.quiet {
                println!(
                    "marginal_error {:.3e}  matches {:?}",
                    m.marginal_error, m.matches
                );
            }
            Ok(())
        }
        Command::Sweep {
            config,
            data,
            param,
            values,
        } => {
            let csv = cmd_sweep(&config, &data, param, &values, out, cli.seed)?;
            if !cli.quiet {
                print!(
                    "{}",
                    csv.lines().skip(1).collect::<Vec<_>>().join("\n") + "\n"
                );
            }
            Ok(())
        }
    }
}
