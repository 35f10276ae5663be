//! Command line entry points: run configuration, argument parsing and the
//! five batch commands.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{generate_synthetic_corpus, write_features, Corpus, GeneratorConfig, Split, Utterance};
use crate::frontend::{encode_transcription, Transcription};
use crate::metrics::{evaluate, EvalMode};
use crate::model::{dump_encodings, load_checkpoint, Model, ModelConfig, Stream};
use crate::training::{train, TrainConfig};

/// Width preset used when no explicit model configuration is given.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    #[default]
    Desk,
    Toy,
}

/// Model settings of a run. Vocabulary, language and speaker counts always
/// come from the corpus.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub size: ModelSize,
    pub single_stream_ablation: bool,
    /// Full configuration; replaces `size` when present.
    pub custom: Option<ModelConfig>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Corpus directory read by train, eval and dump-encodings.
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// One JSON document configuring every command. Missing keys take their
/// defaults; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Corpus generator, including the frontend inventory.
    pub generator: GeneratorConfig,
    pub model: ModelSettings,
    /// `train.seed` is replaced by the run seed.
    pub train: TrainConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The default configuration, or the one in `path`.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(RunConfig::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate()?;
        if let Some(m) = &self.model.custom {
            m.validate()?;
        }
        Ok(())
    }

    /// Model configuration for `corpus`.
    pub fn model_config(&self, corpus: &Corpus) -> Result<ModelConfig> {
        let n = corpus.num_speakers();
        let mut m = match (&self.model.custom, self.model.size) {
            (Some(m), _) => m.clone(),
            (None, ModelSize::Desk) => ModelConfig::desk(&corpus.frontend, n),
            (None, ModelSize::Toy) => ModelConfig::toy(&corpus.frontend, n),
        };
        m.single_stream_ablation |= self.model.single_stream_ablation;
        m.check_frontend(&corpus.frontend)?;
        if m.num_speakers != n {
            return Err(Error::Config(format!("model has {} speakers, corpus has {n}", m.num_speakers)));
        }
        m.validate()?;
        Ok(m)
    }

    /// Training configuration with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "twostream", version, about = "Two-stream multilingual acoustic model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on a corpus.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Synthesize features for a JSON-lines transcription file.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        /// Frame budget per utterance; defaults to 8 per token plus 10.
        #[arg(long)]
        max_frames: Option<usize>,
    },
    /// Objective evaluation on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value = "teacher-forced")]
        mode: EvalMode,
    },
    /// Write encoder outputs with phoneme and prosody labels.
    DumpEncodings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        stream: Stream,
        #[arg(long, default_value = "train")]
        split: Split,
    },
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| Error::Config(format!("--{name} is required (or set paths.{name})")))
}

fn require_file(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingFile(path.to_path_buf()))
    }
}

/// Refuse to reuse `path` unless `force`; create it otherwise.
fn prepare_out(path: &Path, marker: &str, force: bool) -> Result<()> {
    let target = path.join(marker);
    if target.exists() && !force {
        return Err(Error::Exists(target));
    }
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn load_model(path: &Path) -> Result<(Model, crate::model::Checkpoint)> {
    require_file(path)?;
    load_checkpoint(path)
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    require_file(path)?;
    Corpus::load(path)
}

/// The checkpoint must describe the corpus it is applied to.
fn check_compatible(meta: &crate::model::Checkpoint, corpus: &Corpus) -> Result<()> {
    if meta.frontend != corpus.frontend || meta.speakers != corpus.speakers {
        return Err(Error::Config("checkpoint frontend or speakers differ from the corpus".into()));
    }
    Ok(())
}

/// Execute one command. Outputs a short summary on stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, seed } => {
            let cfg = RunConfig::load_or_default(common.config.as_deref())?;
            let out = required(common.out, &cfg.paths.out, "out")?;
            let seed = seed.unwrap_or(cfg.seed);
            prepare_out(&out, crate::features::MANIFEST_FILE, common.force)?;
            let corpus = generate_synthetic_corpus(&cfg.generator, seed)?;
            corpus.save(&out, common.force)?;
            println!("wrote {} utterances to {}", corpus.utterances.len(), out.display());
        }
        Command::Train {
            common,
            data,
            steps,
            seed,
        } => {
            let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = steps {
                cfg.train.max_steps = s;
            }
            cfg.validate()?;
            let data = required(data, &cfg.paths.data, "data")?;
            let out = required(common.out, &cfg.paths.out, "out")?;
            let corpus = load_corpus(&data)?;
            let model_cfg = cfg.model_config(&corpus)?;
            prepare_out(&out, crate::training::LOG_FILE, common.force)?;
            let resolved = out.join("config.json");
            fs::write(&resolved, serde_json::to_string_pretty(&cfg)? + "\n").map_err(|e| Error::io(&resolved, e))?;
            let mut model = Model::new(model_cfg, cfg.seed)?;
            let outcome = train(&mut model, &corpus, &cfg.train_config(), Some(&out), common.force)?;
            println!(
                "trained {} steps, loss_rec {:.6}, checkpoint {}",
                outcome.steps,
                outcome.last.loss_rec,
                out.join(crate::training::FINAL_CHECKPOINT).display()
            );
        }
        Command::Synth {
            common,
            checkpoint,
            input,
            max_frames,
        } => {
            let cfg = RunConfig::load_or_default(common.config.as_deref())?;
            let ckpt = required(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
            let out = required(common.out, &cfg.paths.out, "out")?;
            let (model, meta) = load_model(&ckpt)?;
            require_file(&input)?;
            let text = fs::read_to_string(&input).map_err(|e| Error::io(&input, e))?;
            let speakers = meta.speakers.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
            let mut items = Vec::new();
            for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let t: Transcription = serde_json::from_str(line).map_err(|e| Error::Malformed {
                    path: input.clone(),
                    line: n + 1,
                    msg: e.to_string(),
                })?;
                let seq = encode_transcription(&t, &meta.frontend, &speakers)?;
                items.push((t.id, seq));
            }
            if items.is_empty() {
                return Err(Error::NoUtterances);
            }
            prepare_out(&out, "synth.jsonl", common.force)?;
            let mut summary = String::new();
            for (id, seq) in &items {
                let budget = max_frames.unwrap_or(8 * seq.len() + 10);
                let s = model.synthesize(seq, &meta.stats, budget)?;
                let rel = format!("{id}.feat");
                write_features(&out.join(&rel), &s.track)?;
                summary.push_str(&serde_json::to_string(&serde_json::json!({
                    "id": id,
                    "features": rel,
                    "frames": s.track.num_frames(),
                    "truncated": s.truncated,
                }))?);
                summary.push('\n');
            }
            let path = out.join("synth.jsonl");
            fs::write(&path, summary).map_err(|e| Error::io(&path, e))?;
            println!("synthesized {} utterances into {}", items.len(), out.display());
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
            mode,
        } => {
            let cfg = RunConfig::load_or_default(common.config.as_deref())?;
            let ckpt = required(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
            let data = required(data, &cfg.paths.data, "data")?;
            let out = required(common.out, &cfg.paths.out, "out")?;
            let (model, meta) = load_model(&ckpt)?;
            let corpus = load_corpus(&data)?;
            check_compatible(&meta, &corpus)?;
            let stem = format!("eval_{}_{}", split.name(), mode.name());
            prepare_out(&out, &format!("{stem}.csv"), common.force)?;
            let report = evaluate(&model, &corpus, split, mode)?;
            report.write_csv(&out.join(format!("{stem}.csv")))?;
            report.write_utterance_csv(&out.join(format!("{stem}_utterances.csv")))?;
            print!("{}", report.to_table());
        }
        Command::DumpEncodings {
            common,
            checkpoint,
            data,
            stream,
            split,
        } => {
            let cfg = RunConfig::load_or_default(common.config.as_deref())?;
            let ckpt = required(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
            let data = required(data, &cfg.paths.data, "data")?;
            let out = required(common.out, &cfg.paths.out, "out")?;
            let (model, meta) = load_model(&ckpt)?;
            let corpus = load_corpus(&data)?;
            check_compatible(&meta, &corpus)?;
            if !model.streams().contains(&stream) {
                return Err(Error::Config(format!("model has no {} stream", stream.name())));
            }
            let utts: Vec<&Utterance> = corpus.split_indices(split).into_iter().map(|i| &corpus.utterances[i]).collect();
            if utts.is_empty() {
                return Err(Error::EmptySplit(split.name().into()));
            }
            let file = format!("encodings_{}_{}.tsv", stream.name(), split.name());
            prepare_out(&out, &file, common.force)?;
            let rows = dump_encodings(&model, &corpus.frontend, &utts, stream, Some(&out.join(&file)))?;
            println!("wrote {} encodings to {}", rows.len(), out.join(file).display());
        }
    }
    Ok(())
}

/// Single-line JSON error report.
pub fn error_line(e: &Error) -> String {
    serde_json::json!({ "error": e.to_string(), "exit_code": e.exit_code() }).to_string()
}
