//! Command implementations behind the `univpm` binary.
//!
//! Every command writes a `run_manifest.json` into its output directory and
//! is a pure function of its flags, config file and seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::{array, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::{BankConfig, ClusterBank, ResampleStrategy};
use crate::corpus::{self, CorpusConfig, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::eval::{self, CoverageReport};
use crate::rng;
use crate::trainer::{self, TrainerConfig, TrainerState, Variant};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

const CORPUS_KEYS: [&str; 8] = [
    "phonemes",
    "visemes",
    "dim",
    "frames",
    "zipf_exponent",
    "spread",
    "prototype_scale",
    "noise_snr_db",
];

const CONFIG_HELP: &str = "\
Config file (TOML, flat, every key optional):

  seed = 0                  shared seed for corpus and training
  sequences = 100           training sequences written by gen-data
  held_out = 20             held-out sequences written by gen-data

  corpus keys:
  phonemes = 10             phoneme count P
  visemes = 6               viseme groups V (must be <= P)
  dim = 16                  feature dimension D
  frames = 50               frames per sequence T
  zipf_exponent = 1.0       long-tail exponent of phoneme frequencies
  spread = 0.25             per-dimension noise around each prototype
  prototype_scale = 1.0     standard deviation of prototype coordinates
  noise_snr_db = 5.0        also write noisy audio at this SNR (unset: none)

  trainer keys:
  variant = \"univpm\"        univpm | no-amie | pruning-baseline | noisy
  epochs = 30
  batch_size = 4            sequences per batch
  lambda_gan = 0.1
  lambda_rec = 0.2
  lambda_var = 0.5
  bank_update_interval_epochs = 10
  lr_discriminator = 0.001
  lr_generator = 0.001
  clusters = 10             clusters per bank
  max_cluster_size = 20
  temperature = 0.1         addressing softmax temperature
  statistic_hidden = [64, 64]
  statistic_output_bound = 5.0   soft clip on the statistic output, 0 disables
  encoder_hidden = []
  encoder_init = \"identity\" identity | random
  var_sign = \"dispersive\"   dispersive | literal
  freeze_banks = false";

#[derive(Parser, Debug)]
#[command(name = "univpm", version, about = "Balanced clustering, adversarial MI mapping and modality transfer on synthetic paired streams", after_help = CONFIG_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic paired corpus (train/ and test/ splits).
    #[command(after_help = CONFIG_HELP)]
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write metrics.csv plus a checkpoint.
    #[command(after_help = CONFIG_HELP)]
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus directory, or a gen-data output (its train/ split is used).
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's `variant`.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Evaluate a checkpoint: report.json plus CSV exports.
    Eval {
        /// Checkpoint directory, or a train output directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus directory, or a gen-data output (its test/ split is used).
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stream an imbalanced two-component mixture into a 2-cluster bank and
    /// report coverage.
    DemoCluster {
        /// Fraction of frames drawn from the majority component.
        #[arg(long, default_value_t = 0.9)]
        imbalance: f64,
        #[arg(long, value_enum, default_value_t = DemoVariant::Balanced)]
        variant: DemoVariant,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "demo_cluster")]
        out: PathBuf,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum DemoVariant {
    Balanced,
    Pruning,
}

impl DemoVariant {
    pub fn strategy(self) -> ResampleStrategy {
        match self {
            DemoVariant::Balanced => ResampleStrategy::Balanced,
            DemoVariant::Pruning => ResampleStrategy::RandomPruning,
        }
    }
}

/// All keys of a run config, resolved against the defaults.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub sequences: usize,
    pub held_out: usize,
    pub corpus: CorpusConfig,
    pub trainer: TrainerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sequences: 100,
            held_out: 20,
            corpus: CorpusConfig::default(),
            trainer: TrainerConfig::default(),
        }
    }
}

fn toml_error(e: toml::de::Error) -> Error {
    Error::config("config", e.message().to_string())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(toml_error)?;
        let mut cfg = RunConfig::default();
        let take_usize = |table: &mut toml::Table, key: &str, into: &mut usize| -> Result<()> {
            if let Some(v) = table.remove(key) {
                *into = v
                    .as_integer()
                    .and_then(|i| usize::try_from(i).ok())
                    .ok_or_else(|| Error::config(key, "must be a non-negative integer"))?;
            }
            Ok(())
        };
        if let Some(v) = table.remove("seed") {
            cfg.seed = v
                .as_integer()
                .and_then(|i| u64::try_from(i).ok())
                .ok_or_else(|| Error::config("seed", "must be a non-negative integer"))?;
        }
        take_usize(&mut table, "sequences", &mut cfg.sequences)?;
        take_usize(&mut table, "held_out", &mut cfg.held_out)?;

        let mut corpus_table = toml::Table::try_from(&cfg.corpus).expect("corpus config serializes");
        for key in CORPUS_KEYS {
            if let Some(v) = table.remove(key) {
                corpus_table.insert(key.into(), v);
            }
        }
        cfg.corpus = corpus_table.try_into().map_err(toml_error)?;
        cfg.trainer = toml::Value::Table(table).try_into().map_err(toml_error)?;
        cfg.corpus.seed = cfg.seed;
        cfg.trainer.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml_str(&text)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sequences == 0 {
            return Err(Error::config("sequences", "must be at least 1"));
        }
        if self.held_out == 0 {
            return Err(Error::config("held_out", "must be at least 1"));
        }
        self.corpus.validate()?;
        self.trainer.validate()
    }
}

/// What a command consumed and produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// SHA-256 over the input files and the config snapshot.
    pub input_hash: String,
    /// Output files relative to the output directory, with their SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_MANIFEST_FILE);
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_slice(&text)?)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Relative paths of all regular files below `dir`, sorted.
fn list_files(dir: &Path) -> Result<Vec<String>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let path = entry.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("below root");
                out.push(rel.to_string_lossy().replace('\\', "/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

/// Content hash of a directory tree: paths and bytes of every file.
pub fn hash_dir(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for rel in list_files(dir)? {
        if rel == RUN_MANIFEST_FILE {
            continue;
        }
        let path = dir.join(&rel);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        h.update((rel.len() as u64).to_le_bytes());
        h.update(rel.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}

fn write_manifest(
    out: &Path,
    command: &str,
    seed: u64,
    config: serde_json::Value,
    input_parts: &[&str],
) -> Result<RunManifest> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&config)?);
    for part in input_parts {
        h.update(part.as_bytes());
    }
    let input_hash = hex(&h.finalize());
    let mut artifacts = BTreeMap::new();
    for rel in list_files(out)? {
        if rel == RUN_MANIFEST_FILE {
            continue;
        }
        let path = out.join(&rel);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        artifacts.insert(rel, sha256_hex(&bytes));
    }
    let run_id = sha256_hex(format!("{command}\n{input_hash}").as_bytes())[..16].to_string();
    let manifest = RunManifest {
        run_id,
        command: command.into(),
        seed,
        config,
        input_hash,
        artifacts,
    };
    let path = out.join(RUN_MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// `dir/part` when `dir` is a gen-data output, else `dir` itself.
pub fn resolve_corpus(dir: &Path, part: &str) -> PathBuf {
    let nested = dir.join(part);
    if nested.join(MANIFEST_FILE).is_file() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn resolve_checkpoint(dir: &Path) -> PathBuf {
    let nested = dir.join(CHECKPOINT_DIR);
    if nested.join("trainer.json").is_file() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

pub fn cmd_gen_data(config: &RunConfig, out: &Path) -> Result<(RunManifest, String)> {
    config.validate()?;
    let all = corpus::sample_corpus(&config.corpus, config.sequences + config.held_out)?;
    let (train, test) = all.split_tail(config.held_out);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    corpus::export_corpus(&train, &out.join("train"))?;
    corpus::export_corpus(&test, &out.join("test"))?;
    let manifest = write_manifest(out, "gen-data", config.seed, to_json(config)?, &[])?;
    let c = &config.corpus;
    let msg = format!(
        "corpus P={} V={} D={} T={}: {} train + {} held-out sequences in {} (run {})",
        c.phonemes,
        c.visemes,
        c.dim,
        c.frames,
        train.sequences.len(),
        test.sequences.len(),
        out.display(),
        manifest.run_id
    );
    Ok((manifest, msg))
}

pub fn cmd_train(config: &RunConfig, corpus_dir: &Path, out: &Path, variant: Option<&str>) -> Result<(RunManifest, String)> {
    let mut cfg = config.trainer.clone();
    if let Some(v) = variant {
        cfg.variant = Variant::parse(v)?;
    }
    cfg.validate()?;
    let dir = resolve_corpus(corpus_dir, "train");
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(Error::io(
            dir.join(MANIFEST_FILE),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no corpus manifest"),
        ));
    }
    let data = corpus::import_corpus(&dir)?;
    let corpus_hash = hash_dir(&dir)?;
    let state = trainer::train(&cfg, &data)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    trainer::write_metrics(&out.join(METRICS_FILE), &state.log)?;
    state.save(&out.join(CHECKPOINT_DIR))?;
    let manifest = write_manifest(out, "train", cfg.seed, to_json(&cfg)?, &[&corpus_hash])?;
    let last = state
        .log
        .last()
        .map(|m| format!("final phoneme match accuracy {:.2}%", m.phoneme_match_acc))
        .unwrap_or_else(|| "no epochs run".into());
    let msg = format!(
        "trained {} for {} epochs on {} sequences: {last} (run {})",
        cfg.variant.name(),
        cfg.epochs,
        data.sequences.len(),
        manifest.run_id
    );
    Ok((manifest, msg))
}

pub fn cmd_eval(checkpoint: &Path, corpus_dir: &Path, out: &Path) -> Result<(RunManifest, eval::EvalReport)> {
    let ckpt = resolve_checkpoint(checkpoint);
    let state = TrainerState::load(&ckpt)?;
    let dir = resolve_corpus(corpus_dir, "test");
    let data = corpus::import_corpus(&dir)?;
    let ckpt_hash = hash_dir(&ckpt)?;
    let corpus_hash = hash_dir(&dir)?;
    let config = serde_json::json!({
        "checkpoint_hash": ckpt_hash,
        "corpus_hash": corpus_hash,
    });
    let run_id = sha256_hex(format!("eval\n{ckpt_hash}\n{corpus_hash}").as_bytes())[..16].to_string();
    let report = eval::evaluate(&state, &data, &run_id)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(REPORT_FILE);
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(&path, e))?;
    let enc = eval::encode_corpus(&state, &data)?;
    let (vbank, pbank) = eval::seeded_banks(&state, &enc)?;
    eval::export_embeddings(out, &vbank, &pbank, enc.f_v.view(), enc.f_a.view(), &enc.labels)?;
    let manifest = write_manifest(out, "eval", state.config.seed, config, &[])?;
    Ok((manifest, report))
}

pub const DEMO_SEPARATION: f64 = 6.0;
pub const DEMO_SPREAD: f64 = 1.0;
pub const DEMO_BATCHES: usize = 50;
pub const DEMO_BATCH_SIZE: usize = 20;

/// Result of one two-component stream.
#[derive(Clone, Debug)]
pub struct DemoOutcome {
    pub bank: ClusterBank,
    pub prototypes: Array2<f64>,
    pub coverage: CoverageReport,
    /// Components covered by distinct centers.
    pub covered: usize,
}

/// Streams `DEMO_BATCHES` batches from a 2-D mixture of two isotropic
/// Gaussians (`imbalance` of the frames from the first) into a 2-cluster
/// bank with `S_max = 20`.
pub fn two_component_stream(imbalance: f64, strategy: ResampleStrategy, seed: u64) -> Result<DemoOutcome> {
    if !(imbalance > 0.0 && imbalance < 1.0) {
        return Err(Error::config("imbalance", format!("must lie in (0, 1), got {imbalance}")));
    }
    let prototypes = array![[0.0, 0.0], [DEMO_SEPARATION, 0.0]];
    let mut bank = ClusterBank::new(
        BankConfig {
            seed,
            max_cluster_size: 20,
            ..BankConfig::with_clusters(2)
        },
        2,
    )?;
    let mut data_rng = rng::stream(seed, 300);
    let mut bank_rng = rng::stream(seed, 301);
    for _ in 0..DEMO_BATCHES {
        let mut frames = Array2::zeros((DEMO_BATCH_SIZE, 2));
        for mut row in frames.rows_mut() {
            let c = usize::from(data_rng.random::<f64>() >= imbalance);
            for d in 0..2 {
                row[d] = prototypes[[c, d]] + DEMO_SPREAD * data_rng.sample::<f64, _>(StandardNormal);
            }
        }
        bank.ingest_with(strategy, frames.view(), &mut bank_rng)?;
    }
    let coverage = eval::coverage_report(
        bank.centers_matrix().view(),
        prototypes.view(),
        DEMO_SPREAD,
        &bank.cluster_sizes(),
    )?;
    let mut used: Vec<usize> = coverage.classes.iter().filter(|c| c.covered).map(|c| c.nearest_center).collect();
    used.sort_unstable();
    used.dedup();
    let covered = used.len();
    Ok(DemoOutcome {
        bank,
        prototypes,
        coverage,
        covered,
    })
}

pub fn cmd_demo_cluster(imbalance: f64, variant: DemoVariant, seed: u64, out: &Path) -> Result<(RunManifest, String)> {
    let outcome = two_component_stream(imbalance, variant.strategy(), seed)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("centers.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
    w.write_record(["cluster", "size", "x0", "x1"])?;
    let sizes = outcome.bank.cluster_sizes();
    for (i, c) in outcome.bank.centers().iter().enumerate() {
        w.write_record([i.to_string(), sizes[i].to_string(), (c[0] as f32).to_string(), (c[1] as f32).to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let config = serde_json::json!({
        "imbalance": imbalance,
        "variant": format!("{variant:?}").to_lowercase(),
        "separation": DEMO_SEPARATION,
        "spread": DEMO_SPREAD,
        "batches": DEMO_BATCHES,
        "batch_size": DEMO_BATCH_SIZE,
    });
    let manifest = write_manifest(out, "demo-cluster", seed, config, &[])?;
    let msg = format!(
        "covered {}/{} classes, size ratio {:.3}",
        outcome.covered,
        outcome.prototypes.nrows(),
        outcome.coverage.size_ratio
    );
    Ok((manifest, msg))
}

/// Runs one parsed command and returns the text for stdout.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = RunConfig::load(config.as_deref())?;
            Ok(cmd_gen_data(&cfg, &out)?.1)
        }
        Command::Train {
            config,
            corpus,
            out,
            variant,
        } => {
            let cfg = RunConfig::load(config.as_deref())?;
            Ok(cmd_train(&cfg, &corpus, &out, variant.as_deref())?.1)
        }
        Command::Eval { checkpoint, corpus, out } => {
            let (manifest, r) = cmd_eval(&checkpoint, &corpus, &out)?;
            Ok(format!(
                "phoneme match accuracy {:.2}%, mapping accuracy {:.1}% (rows) / {:.1}% (frames), coverage {}/{} phonemes, {}/{} visemes (run {})",
                r.phoneme_match_acc,
                r.mapping_row_acc,
                r.mapping_frame_acc,
                r.coverage_phoneme.covered,
                r.coverage_phoneme.classes.len(),
                r.coverage_viseme.covered,
                r.coverage_viseme.classes.len(),
                manifest.run_id
            ))
        }
        Command::DemoCluster {
            imbalance,
            variant,
            seed,
            out,
        } => Ok(cmd_demo_cluster(imbalance, variant, seed, &out)?.1),
    }
}
