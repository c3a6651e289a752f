//! Symmetric contrastive training of the two encoders.
//!
//! One optimizer step encodes a batch of scenes and one caption per scene,
//! forms the temperature-scaled similarity matrix, and averages the
//! cross-entropy of matching pairs over both reading directions. The
//! learning rate warms up linearly over the first epochs and then follows a
//! cosine decay to zero; parameters move under AdamW with decoupled decay.
//!
//! Determinism is epoch-keyed: the shuffle order and the caption choice for
//! epoch `e` depend only on (run seed, e), never on accumulated RNG state.
//! Resuming from a checkpoint taken after epoch `e` therefore replays epochs
//! `e+1..` bit-identically, and two runs with the same seed and config
//! produce byte-identical metric logs.


use crate::checkpoint::{Checkpoint, OptimMoments};
use crate::encoder::{
    encode_caption_on_tape, encode_image_with_ranks, ModelConfig, ModelParams, TAU_CEILING,
};
use crate::rank::{build_ranks, RankMatrix};
use crate::tensor::{Tape, TensorId};
use crate::tokens::{layout, TokenSet};
use crate::{Error, Result};
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Row-norm slack tolerated by `contrastive_loss` before it rejects its
/// inputs as un-normalized.
pub const NORM_TOL: f64 = 1e-6;

/// Knobs for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// When false the image encoder runs as a plain transformer and no rank
    /// grids are ever built.
    pub additive_attention: bool,
    /// Global gradient-norm ceiling; None disables clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config {
                field: "batch_size".into(),
                message: format!("must be at least 2, got {}", self.batch_size),
            });
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config {
                field: "warmup_epochs".into(),
                message: format!("{} exceeds epochs {}", self.warmup_epochs, self.epochs),
            });
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config {
                field: "lr".into(),
                message: format!("must be a positive finite number, got {}", self.lr),
            });
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config {
                field: "weight_decay".into(),
                message: format!("must be non-negative and finite, got {}", self.weight_decay),
            });
        }
        if let Some(c) = self.grad_clip {
            if !c.is_finite() || c <= 0.0 {
                return Err(Error::Config {
                    field: "grad_clip".into(),
                    message: format!("must be a positive finite number, got {c}"),
                });
            }
        }
        Ok(())
    }
}

/// Stable per-purpose, per-epoch seed. Mixing through a hash keeps the
/// shuffle stream and the caption stream independent of each other and of
/// how many draws earlier epochs consumed.
pub fn derive_seed(seed: u64, purpose: &str, epoch: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([0u8]);
    h.update(purpose.as_bytes());
    h.update([0u8]);
    h.update(epoch.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is wide enough"))
}

/// Symmetric InfoNCE over a matched batch.
///
/// `s` and `t` are [n, e] with unit-norm rows (checked, tolerance
/// [`NORM_TOL`]); `tau` is the scalar temperature logit. The similarity
/// logits are `min(exp(tau), 100) * S * T^T` and the loss averages the
/// cross-entropy of the diagonal targets over rows and columns. With a
/// single pair the loss is exactly zero.
pub fn contrastive_loss(tape: &mut Tape, s: TensorId, t: TensorId, tau: TensorId) -> Result<TensorId> {
    let (ss, ts) = (tape.shape(s).to_vec(), tape.shape(t).to_vec());
    if ss.len() != 2 || ss != ts {
        return Err(Error::Dimension { op: "contrastive_loss", lhs: ss, rhs: ts });
    }
    let (n, e) = (ss[0], ss[1]);
    if n == 0 {
        return Err(Error::Contract { op: "contrastive_loss", message: "empty batch".into() });
    }
    for (name, id) in [("S", s), ("T", t)] {
        let data = tape.data(id);
        for r in 0..n {
            let norm = data[r * e..(r + 1) * e].iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > NORM_TOL {
                return Err(Error::Contract {
                    op: "contrastive_loss",
                    message: format!("row {r} of {name} has norm {norm}, want 1 within {NORM_TOL}"),
                });
            }
        }
    }
    let scale = tape.exp(tau);
    let scale = tape.clamp_max(scale, TAU_CEILING);
    let tt = tape.transpose(t)?;
    let sims = tape.matmul(s, tt)?;
    let logits = tape.mul_scalar(sims, scale)?;
    let targets: Vec<usize> = (0..n).collect();
    let i2t = tape.cross_entropy_rows(logits, &targets)?;
    let logits_t = tape.transpose(logits)?;
    let t2i = tape.cross_entropy_rows(logits_t, &targets)?;
    let both = tape.add(i2t, t2i)?;
    Ok(tape.scale(both, 0.5))
}

/// Learning rate for optimizer step `step` (0-based): linear 0 -> `base_lr`
/// over the warmup steps, then cosine from `base_lr` to 0 at `total_steps`.
pub fn lr_at(step: u64, warmup_steps: u64, total_steps: u64, base_lr: f64) -> f64 {
    if step >= total_steps {
        return 0.0;
    }
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = (total_steps - warmup_steps) as f64;
    let progress = (step - warmup_steps) as f64 / span;
    0.5 * (1.0 + (std::f64::consts::PI * progress).cos()) * base_lr
}

/// Scales all gradients by `max_norm / norm` when their joint L2 norm
/// exceeds `max_norm`.
pub fn clip_global_norm(grads: &mut IndexMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// AdamW with decoupled weight decay.
///
/// Decay multiplies each decayed parameter by (1 - lr * weight_decay) before
/// the moment update is applied, so a tensor that never receives gradient
/// still shrinks. Parameters flagged `no_decay` and the pinned first rank
/// weight logit are left alone by decay and update respectively; a missing
/// gradient is treated as zero (moments keep decaying).
#[derive(Debug, Clone)]
pub struct AdamW {
    pub weight_decay: f64,
    t: u64,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ModelParams, weight_decay: f64) -> Self {
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for (path, p) in params.iter() {
            m.insert(path.clone(), vec![0.0; p.data.len()]);
            v.insert(path.clone(), vec![0.0; p.data.len()]);
        }
        AdamW { weight_decay, t: 0, m, v }
    }

    /// Completed optimizer steps.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> OptimMoments {
        OptimMoments {
            m: self.m.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            v: self.v.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        }
    }

    /// Replaces the moment state, e.g. from a checkpoint. Unknown names and
    /// length mismatches are checkpoint errors.
    pub fn restore(&mut self, moments: &OptimMoments, steps: u64) -> Result<()> {
        for (stash, store) in [(&moments.m, &mut self.m), (&moments.v, &mut self.v)] {
            for (path, data) in stash {
                let slot = store.get_mut(path).ok_or_else(|| {
                    Error::Checkpoint(format!("moment tensor {path} does not match any parameter"))
                })?;
                if slot.len() != data.len() {
                    return Err(Error::Checkpoint(format!(
                        "moment tensor {path} has {} values, parameter has {}",
                        data.len(),
                        slot.len()
                    )));
                }
                slot.copy_from_slice(data);
            }
        }
        self.t = steps;
        Ok(())
    }

    /// One update over every parameter. `grads` may omit paths (zero
    /// gradient); any non-finite gradient aborts before touching state.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &IndexMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        for (path, g) in grads {
            if let Some(bad) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    context: "adamw step".into(),
                    detail: format!("gradient of {path}[{bad}] is {}", g[bad]),
                });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (path, param) in params.iter_mut() {
            let m = self.m.get_mut(path).expect("moments cover every parameter");
            let v = self.v.get_mut(path).expect("moments cover every parameter");
            let zeros;
            let g = match grads.get(path) {
                Some(g) => {
                    debug_assert_eq!(g.len(), param.data.len());
                    g.as_slice()
                }
                None => {
                    zeros = vec![0.0; param.data.len()];
                    zeros.as_slice()
                }
            };
            let decay = if param.no_decay { 1.0 } else { 1.0 - lr * self.weight_decay };
            let frozen_first = path == "rank.a";
            for i in 0..param.data.len() {
                if frozen_first && i == 0 {
                    continue;
                }
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                param.data[i] = param.data[i] * decay - lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// One sample with everything derivable ahead of time: its validated token
/// set and, when structure biasing is on, its rank grid. Grids depend only
/// on the graph, so building them once per run amortizes the scan.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub ts: TokenSet,
    pub ranks: Option<RankMatrix>,
}

/// Validates every sample against the model widths and pre-builds rank
/// grids when `additive` is set. With `additive` false this never touches
/// the rank machinery.
pub fn prepare_corpus(
    corpus: Vec<TokenSet>,
    cfg: &ModelConfig,
    additive: bool,
) -> Result<Vec<PreparedSample>> {
    let ctx = cfg.encoder.context_length;
    let mut out = Vec::with_capacity(corpus.len());
    for ts in corpus {
        ts.validate()?;
        if ts.d != cfg.d {
            return Err(Error::Validation {
                sample_id: ts.sample_id.clone(),
                field: "d".into(),
                message: format!("sample width {} does not match model width {}", ts.d, cfg.d),
            });
        }
        if ts.valid_len() > ctx {
            return Err(Error::Capacity {
                sample_id: ts.sample_id.clone(),
                needed: ts.valid_len(),
                context_length: ctx,
            });
        }
        let ranks = if additive {
            let (positions, _) = layout(ts.tangible.len(), ts.intangible.len(), ctx);
            Some(build_ranks(&ts, &positions, ctx)?)
        } else {
            None
        };
        out.push(PreparedSample { ts, ranks });
    }
    Ok(out)
}

/// Index-aligned view of one optimizer step's samples.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Positions into the prepared corpus.
    pub indices: Vec<usize>,
    /// Caption chosen for each sample this epoch, aligned with `indices`.
    pub captions: Vec<usize>,
    /// Aligned sample ids, carried for diagnostics.
    pub sample_ids: Vec<String>,
}

/// One metrics-log event. Step records leave `eval` empty; epoch records
/// carry the evaluation metrics computed after that epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval: Option<IndexMap<String, f64>>,
}

/// Live training state: parameters, optimizer, schedule position, and the
/// in-memory metrics log (one serialized record per event).
pub struct TrainSession {
    pub model_cfg: ModelConfig,
    pub cfg: TrainConfig,
    pub params: ModelParams,
    pub optim: AdamW,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Fully completed epochs.
    pub epoch: u64,
    pub log: Vec<String>,
    prepared: Vec<PreparedSample>,
    steps_per_epoch: u64,
    last_lr: f64,
    last_epoch_mean: f64,
}

impl TrainSession {
    /// Fresh run: initializes parameters from the model seedable init and
    /// zero optimizer moments.
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig, corpus: Vec<TokenSet>) -> Result<Self> {
        cfg.validate()?;
        model_cfg.validate()?;
        let params = ModelParams::init(&model_cfg, cfg.seed)?;
        let optim = AdamW::new(&params, cfg.weight_decay);
        Self::assemble(model_cfg, cfg, params, optim, 0, 0, corpus)
    }

    /// Continues a run from checkpoint state. The training config must car-
    /// ry the same seed the run started with, otherwise the replayed epochs
    /// would diverge from the uninterrupted run.
    pub fn resume(ckpt: Checkpoint, cfg: TrainConfig, corpus: Vec<TokenSet>) -> Result<Self> {
        cfg.validate()?;
        if cfg.seed != ckpt.seed {
            return Err(Error::Config {
                field: "seed".into(),
                message: format!("checkpoint was created with seed {}, got {}", ckpt.seed, cfg.seed),
            });
        }
        let mut optim = AdamW::new(&ckpt.params, cfg.weight_decay);
        if let Some(moments) = &ckpt.optim {
            optim.restore(moments, ckpt.step)?;
        }
        Self::assemble(ckpt.config, cfg, ckpt.params, optim, ckpt.step, ckpt.epoch, corpus)
    }

    fn assemble(
        model_cfg: ModelConfig,
        cfg: TrainConfig,
        params: ModelParams,
        optim: AdamW,
        step: u64,
        epoch: u64,
        corpus: Vec<TokenSet>,
    ) -> Result<Self> {
        if corpus.len() < 2 {
            return Err(Error::Config {
                field: "corpus".into(),
                message: format!("contrastive training needs at least 2 samples, got {}", corpus.len()),
            });
        }
        let prepared = prepare_corpus(corpus, &model_cfg, cfg.additive_attention)?;
        let n = prepared.len();
        let full = n / cfg.batch_size;
        let tail = n % cfg.batch_size;
        // Batches of one cannot contrast and are dropped, so they contribute
        // no optimizer step.
        let steps_per_epoch = (full + usize::from(tail >= 2)) as u64;
        Ok(TrainSession {
            model_cfg,
            cfg,
            params,
            optim,
            step,
            epoch,
            log: Vec::new(),
            prepared,
            steps_per_epoch,
            last_lr: 0.0,
            last_epoch_mean: f64::NAN,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        self.cfg.epochs as u64 * self.steps_per_epoch
    }

    pub fn warmup_steps(&self) -> u64 {
        self.cfg.warmup_epochs as u64 * self.steps_per_epoch
    }

    /// Mean loss over the most recently completed epoch.
    pub fn last_epoch_mean(&self) -> f64 {
        self.last_epoch_mean
    }

    /// Snapshot of everything needed to resume after the last completed
    /// epoch.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model_cfg.clone(),
            seed: self.cfg.seed,
            step: self.step,
            epoch: self.epoch,
            params: self.params.clone(),
            optim: Some(self.optim.moments()),
        }
    }

    /// The batches of one epoch: shuffle order and this epoch's caption
    /// choices, both keyed by (seed, epoch) alone.
    fn plan_epoch(&self, epoch: u64) -> Vec<Batch> {
        let mut cap_rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, "captions", epoch));
        let choices: Vec<usize> = self
            .prepared
            .iter()
            .map(|p| cap_rng.gen_range(0..p.ts.captions.len()))
            .collect();
        let mut order: Vec<usize> = (0..self.prepared.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, "shuffle", epoch));
        order.shuffle(&mut rng);
        order
            .chunks(self.cfg.batch_size)
            .filter(|c| c.len() >= 2)
            .map(|c| Batch {
                indices: c.to_vec(),
                captions: c.iter().map(|&i| choices[i]).collect(),
                sample_ids: c.iter().map(|&i| self.prepared[i].ts.sample_id.clone()).collect(),
            })
            .collect()
    }

    /// Runs one epoch and returns its mean step loss.
    pub fn run_epoch(&mut self) -> Result<f64> {
        let batches = self.plan_epoch(self.epoch);
        let mut total = 0.0;
        for batch in &batches {
            total += self.train_step(batch)?;
        }
        self.epoch += 1;
        let mean = total / batches.len() as f64;
        self.last_epoch_mean = mean;
        Ok(mean)
    }

    /// Runs all remaining epochs without evaluation hooks and returns the
    /// final epoch's mean loss.
    pub fn train_to_end(&mut self) -> Result<f64> {
        let mut mean = self.last_epoch_mean;
        while self.epoch < self.cfg.epochs as u64 {
            mean = self.run_epoch()?;
        }
        Ok(mean)
    }

    /// One forward/backward/update over a batch. Appends a step record to
    /// the log and returns the batch loss.
    pub fn train_step(&mut self, batch: &Batch) -> Result<f64> {
        let lr = lr_at(self.step, self.warmup_steps(), self.total_steps(), self.cfg.lr);
        let mut tape = Tape::new();
        let staged = self.params.stage(&mut tape, true)?;
        let mut s_rows = Vec::with_capacity(batch.indices.len());
        let mut t_rows = Vec::with_capacity(batch.indices.len());
        for (k, &idx) in batch.indices.iter().enumerate() {
            let p = &self.prepared[idx];
            s_rows.push(encode_image_with_ranks(
                &mut tape,
                &staged,
                &self.model_cfg,
                &p.ts,
                p.ranks.as_ref(),
            )?);
            let caption = &p.ts.captions[batch.captions[k]];
            t_rows.push(encode_caption_on_tape(&mut tape, &staged, &self.model_cfg, caption)?);
        }
        let s = tape.concat_rows(&s_rows)?;
        let t = tape.concat_rows(&t_rows)?;
        let loss_id = contrastive_loss(&mut tape, s, t, staged.id("temp.tau"))?;
        let loss = tape.item(loss_id);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: "train step".into(),
                detail: format!(
                    "loss {loss} at step {} epoch {}; batch sample_ids {:?}",
                    self.step, self.epoch, batch.sample_ids
                ),
            });
        }
        tape.backward(loss_id)?;
        let mut grads: IndexMap<String, Vec<f64>> = IndexMap::new();
        for (path, &id) in staged.iter() {
            if let Some(g) = tape.grad(id) {
                grads.insert(path.clone(), g.to_vec());
            }
        }
        if let Some(max_norm) = self.cfg.grad_clip {
            clip_global_norm(&mut grads, max_norm);
        }
        self.optim.step(&mut self.params, &grads, lr)?;
        self.push_record(MetricRecord { step: self.step, epoch: self.epoch, lr, loss, eval: None });
        self.step += 1;
        self.last_lr = lr;
        Ok(loss)
    }

    /// Appends an epoch evaluation record. Call after `run_epoch`.
    pub fn log_epoch(&mut self, eval: IndexMap<String, f64>) {
        self.push_record(MetricRecord {
            step: self.step,
            epoch: self.epoch,
            lr: self.last_lr,
            loss: self.last_epoch_mean,
            eval: Some(eval),
        });
    }

    fn push_record(&mut self, record: MetricRecord) {
        self.log
            .push(serde_json::to_string(&record).expect("metric records always serialize"));
    }
}
