//! Run configuration: one TOML file describing the whole pipeline, with a
//! desk-scale preset filling anything left out and command-line flags
//! winning over both.

use anyhow::{bail, Context};
use semtok_core::encoder::{EncoderConfig, ModelConfig, TextConfig};
use semtok_core::synth::{CaptionGrammar, SceneSpec, MAX_SCENE_OBJECTS, MAX_SCENE_TRIPLETS};
use semtok_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Longest caption the generator can emit, in encoder rows (EOS included).
pub fn max_caption_rows() -> usize {
    MAX_SCENE_TRIPLETS * 5 + (MAX_SCENE_TRIPLETS - 1) + 1
}

/// Widest packed scene the generator can emit: image row, objects,
/// per-triplet predicate instances.
pub fn max_scene_rows(spec: &SceneSpec) -> usize {
    1 + MAX_SCENE_OBJECTS.min(spec.n_objects) + MAX_SCENE_TRIPLETS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Scenes in the training corpus.
    pub train_scenes: usize,
    /// Scenes in the held-out evaluation corpus.
    pub val_scenes: usize,
    /// Generator seed; the validation corpus derives a distinct stream
    /// from it.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Every artifact lands under this directory.
    pub out_dir: PathBuf,
    /// Explicit input locations; anything unset resolves under `out_dir`
    /// with the standard names.
    pub train_corpus: Option<PathBuf>,
    pub val_corpus: Option<PathBuf>,
    pub train_truth: Option<PathBuf>,
    pub val_truth: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out_dir: PathBuf::from("runs/desk"),
            train_corpus: None,
            val_corpus: None,
            train_truth: None,
            val_truth: None,
            checkpoint: None,
        }
    }
}

impl PathsConfig {
    pub fn train_corpus(&self) -> PathBuf {
        self.train_corpus.clone().unwrap_or_else(|| self.out_dir.join("train-corpus.jsonl"))
    }
    pub fn val_corpus(&self) -> PathBuf {
        self.val_corpus.clone().unwrap_or_else(|| self.out_dir.join("val-corpus.jsonl"))
    }
    pub fn train_truth(&self) -> PathBuf {
        self.train_truth.clone().unwrap_or_else(|| self.out_dir.join("train-truth.jsonl"))
    }
    pub fn val_truth(&self) -> PathBuf {
        self.val_truth.clone().unwrap_or_else(|| self.out_dir.join("val-truth.jsonl"))
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("checkpoint.bin"))
    }
    pub fn metrics(&self) -> PathBuf {
        self.out_dir.join("metrics.jsonl")
    }
    pub fn eval_report(&self) -> PathBuf {
        self.out_dir.join("eval-report.json")
    }
    pub fn cache_dir(&self) -> PathBuf {
        self.out_dir.join("cache")
    }
    pub fn manifest(&self, command: &str) -> PathBuf {
        self.out_dir.join(format!("manifest-{command}.json"))
    }
}

/// The whole pipeline in one struct. Sections omitted from the file take
/// the desk-scale preset; within a present section every field is spelled
/// out and unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub scene: SceneSpec,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    /// Desk-scale preset: trains and evaluates on a laptop CPU in minutes.
    fn default() -> Self {
        let scene = SceneSpec::default();
        let grammar = CaptionGrammar::new(&scene);
        RunConfig {
            model: ModelConfig {
                d: scene.d,
                encoder: EncoderConfig {
                    d_model: 64,
                    n_layers: 2,
                    n_heads: 4,
                    d_ff: 256,
                    context_length: 24,
                    d_l: scene.d,
                    embed_dim: 32,
                },
                text: TextConfig {
                    vocab_size: grammar.vocab_size(),
                    d_model: 64,
                    n_layers: 2,
                    n_heads: 4,
                    d_ff: 256,
                    context_length: 24,
                },
            },
            scene,
            data: DataConfig { train_scenes: 2000, val_scenes: 200, seed: 7 },
            train: TrainConfig {
                batch_size: 64,
                epochs: 50,
                lr: 1e-3,
                warmup_epochs: 2,
                weight_decay: 0.01,
                seed: 42,
                additive_attention: true,
                grad_clip: Some(1.0),
            },
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    /// Every section plus the couplings between them: the corpus the scene
    /// section generates must fit the model section's capacities.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate()?;
        self.scene.validate()?;
        self.train.validate()?;
        if self.data.train_scenes < 2 {
            bail!("data.train_scenes: contrastive training needs at least 2 scenes, got {}", self.data.train_scenes);
        }
        if self.data.train_scenes % 2 != 0 {
            bail!(
                "data.train_scenes must be even: direction twins pair adjacent scenes, and the train/val split has to fall on a pair boundary"
            );
        }
        if self.data.val_scenes < 1 {
            bail!("data.val_scenes: evaluation needs at least 1 scene");
        }
        if self.model.d != self.scene.d {
            bail!("model.d is {} but scene.d is {}; the encoder consumes the generated tokens directly", self.model.d, self.scene.d);
        }
        if self.model.encoder.d_l != self.scene.d {
            bail!("model.encoder.d_l is {} but scene.d is {}; the generator emits an image row of scene width", self.model.encoder.d_l, self.scene.d);
        }
        let grammar = CaptionGrammar::new(&self.scene);
        if self.model.text.vocab_size < grammar.vocab_size() {
            bail!(
                "model.text.vocab_size is {} but the caption grammar for {} objects and {} predicates needs {}",
                self.model.text.vocab_size,
                self.scene.n_objects,
                self.scene.n_predicates,
                grammar.vocab_size()
            );
        }
        if self.model.text.context_length < max_caption_rows() {
            bail!(
                "model.text.context_length is {} but captions can reach {} rows",
                self.model.text.context_length,
                max_caption_rows()
            );
        }
        if self.model.encoder.context_length < max_scene_rows(&self.scene) {
            bail!(
                "model.encoder.context_length is {} but packed scenes can reach {} rows",
                self.model.encoder.context_length,
                max_scene_rows(&self.scene)
            );
        }
        Ok(())
    }
}

/// Flag overrides shared by the pipeline subcommands; flags win over the
/// config file which wins over the preset.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Output directory for all artifacts of this run.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Training seed (parameter init, shuffling, caption choice).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Corpus generator seed.
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Number of training scenes to generate.
    #[arg(long)]
    pub train_scenes: Option<usize>,
    /// Number of held-out scenes to generate.
    #[arg(long)]
    pub val_scenes: Option<usize>,
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Epochs of linear learning-rate warmup.
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    /// Contrastive batch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Rank-bias pathway on or off (ablation switch).
    #[arg(long)]
    pub additive: Option<bool>,
    /// Direction-twin probability in the generator.
    #[arg(long)]
    pub twin_rate: Option<f64>,
    /// Instance noise stddev in the generator.
    #[arg(long)]
    pub sigma: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = &self.out_dir {
            cfg.paths.out_dir = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.train.seed = v;
        }
        if let Some(v) = self.data_seed {
            cfg.data.seed = v;
        }
        if let Some(v) = self.train_scenes {
            cfg.data.train_scenes = v;
        }
        if let Some(v) = self.val_scenes {
            cfg.data.val_scenes = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
            // A short run keeps a sane schedule without demanding a second
            // flag; an explicit --warmup-epochs still wins.
            cfg.train.warmup_epochs = cfg.train.warmup_epochs.min(v);
        }
        if let Some(v) = self.warmup_epochs {
            cfg.train.warmup_epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = self.additive {
            cfg.train.additive_attention = v;
        }
        if let Some(v) = self.twin_rate {
            cfg.scene.twin_rate = v;
        }
        if let Some(v) = self.sigma {
            cfg.scene.sigma = v;
        }
    }
}

/// Loads the file, applies flags, validates, in that order.
pub fn effective_config(path: Option<&Path>, overrides: &Overrides) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}
