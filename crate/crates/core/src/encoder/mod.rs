//! Dual encoders over a shared transformer block.
//!
//! The image side consumes a [`TokenSet`]: the image-feature row goes
//! through a 3-layer ReLU MLP, tangible and intangible rows through one
//! shared linear projection, each row then receives its type embedding
//! (p_l, p_v, or p_u). Attention layers add the rank-derived bias matrix to
//! every head's scores. The embedding s is read out at position 0, the only
//! global token, projected to `embed_dim`, and L2-normalized.
//!
//! The text side is a plain transformer over learned token and absolute
//! position embeddings with an end-of-sequence readout token appended; it
//! shares the block implementation but never sees an additive bias.
//!
//! Sequences are built over the valid prefix only: PAD rows are never
//! materialized on the tape, which makes padding invariance exact rather
//! than a masking promise (a full-context path with key-side masks computes
//! the same numbers for every valid row).


use crate::rank::{bias_on_tape, build_ranks, RankMatrix, N_RANKS};
use crate::tensor::{Tape, TensorId};
use crate::tokens::{layout, TokenSet};
use crate::{Error, Result};
use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const LN_EPS: f64 = 1e-5;
/// Temperature logit clamp: exp(tau) never exceeds this.
pub const TAU_CEILING: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_length: usize,
    /// Width of the raw image-feature vector l (may differ from d).
    pub d_l: usize,
    /// Output width of the embedding s.
    pub embed_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_length: usize,
}

/// Everything needed to size both encoders. `d` is the corpus token width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub encoder: EncoderConfig,
    pub text: TextConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |field: &str, ok: bool, message: String| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config { field: field.to_string(), message })
            }
        };
        let e = &self.encoder;
        let t = &self.text;
        check("d", self.d >= 1, "token width must be positive".into())?;
        check("encoder.d_model", e.n_heads >= 1 && e.d_model % e.n_heads == 0,
            format!("d_model {} not divisible by n_heads {}", e.d_model, e.n_heads))?;
        check("encoder.context_length", e.context_length >= 1, "context must hold the image row".into())?;
        check("encoder.d_ff", e.d_ff >= 1, "feed-forward width must be positive".into())?;
        check("encoder.embed_dim", e.embed_dim >= 1, "embedding width must be positive".into())?;
        check("encoder.d_l", e.d_l >= 1, "image-feature width must be positive".into())?;
        check("encoder.n_layers", e.n_layers >= 1, "need at least one layer".into())?;
        check("text.d_model", t.n_heads >= 1 && t.d_model % t.n_heads == 0,
            format!("d_model {} not divisible by n_heads {}", t.d_model, t.n_heads))?;
        check("text.context_length", t.context_length >= 2, "context must hold one token plus EOS".into())?;
        check("text.vocab_size", t.vocab_size >= 1, "vocabulary must be non-empty".into())?;
        check("text.n_layers", t.n_layers >= 1, "need at least one layer".into())?;
        check("text.d_ff", t.d_ff >= 1, "feed-forward width must be positive".into())?;
        Ok(())
    }

    /// The end-of-sequence readout token sits one past the caption ids.
    pub fn eos_id(&self) -> usize {
        self.text.vocab_size
    }
}

/// One named parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Excluded from weight decay (positional embeddings, temperature).
    pub no_decay: bool,
}

impl Param {
    fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Param { shape, data, no_decay: false }
    }

    fn no_decay(mut self) -> Self {
        self.no_decay = true;
        self
    }
}

/// All trainable state, keyed by a stable path. Insertion order is the
/// canonical enumeration order everywhere (staging, checkpoints, updates).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    entries: IndexMap<String, Param>,
}

struct InitRng {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl InitRng {
    fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal.sample(&mut self.rng)).collect()
    }
}

impl ModelParams {
    /// Deterministic initialization: weight matrices and embeddings are
    /// N(0, 0.02), biases and layer-norm offsets zero, gains one, the rank
    /// encoding zero (weight table [1..8]), and the temperature logit
    /// ln(1/0.07).
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = InitRng { rng: ChaCha8Rng::seed_from_u64(seed), normal: Normal::new(0.0, 0.02).unwrap() };
        let mut p = ModelParams::default();

        let e = &cfg.encoder;
        let widths = [(e.d_l, e.d_model), (e.d_model, e.d_model), (e.d_model, e.d_model)];
        for (i, (win, wout)) in widths.iter().enumerate() {
            p.insert(format!("img.l_mlp.{i}.w"), Param::new(vec![*win, *wout], r.normal_vec(win * wout)));
            p.insert(format!("img.l_mlp.{i}.b"), Param::new(vec![*wout], vec![0.0; *wout]));
        }
        p.insert("img.in_proj.w", Param::new(vec![cfg.d, e.d_model], r.normal_vec(cfg.d * e.d_model)));
        p.insert("img.in_proj.b", Param::new(vec![e.d_model], vec![0.0; e.d_model]));
        for name in ["l", "v", "u"] {
            p.insert(format!("img.pos.{name}"), Param::new(vec![e.d_model], r.normal_vec(e.d_model)).no_decay());
        }
        for i in 0..e.n_layers {
            Self::insert_block(&mut p, &format!("img.layers.{i}"), e.d_model, e.d_ff, &mut r);
        }
        p.insert("img.out_proj.w", Param::new(vec![e.d_model, e.embed_dim], r.normal_vec(e.d_model * e.embed_dim)));

        let t = &cfg.text;
        let vocab_rows = t.vocab_size + 1; // one extra row for the EOS readout token
        p.insert("txt.tok_embed", Param::new(vec![vocab_rows, t.d_model], r.normal_vec(vocab_rows * t.d_model)));
        p.insert("txt.pos_embed", Param::new(vec![t.context_length, t.d_model], r.normal_vec(t.context_length * t.d_model)).no_decay());
        for i in 0..t.n_layers {
            Self::insert_block(&mut p, &format!("txt.layers.{i}"), t.d_model, t.d_ff, &mut r);
        }
        p.insert("txt.out_proj.w", Param::new(vec![t.d_model, cfg.encoder.embed_dim], r.normal_vec(t.d_model * e.embed_dim)));

        p.insert("rank.a", Param::new(vec![1, N_RANKS], vec![0.0; N_RANKS]));
        p.insert("temp.tau", Param::new(vec![1], vec![(1.0f64 / 0.07).ln()]).no_decay());
        Ok(p)
    }

    fn insert_block(p: &mut ModelParams, prefix: &str, d_model: usize, d_ff: usize, r: &mut InitRng) {
        let dm = d_model;
        p.insert(format!("{prefix}.ln1.g"), Param::new(vec![dm], vec![1.0; dm]));
        p.insert(format!("{prefix}.ln1.b"), Param::new(vec![dm], vec![0.0; dm]));
        for name in ["wq", "wk", "wv", "wo"] {
            p.insert(format!("{prefix}.attn.{name}"), Param::new(vec![dm, dm], r.normal_vec(dm * dm)));
        }
        for name in ["bq", "bk", "bv", "bo"] {
            p.insert(format!("{prefix}.attn.{name}"), Param::new(vec![dm], vec![0.0; dm]));
        }
        p.insert(format!("{prefix}.ln2.g"), Param::new(vec![dm], vec![1.0; dm]));
        p.insert(format!("{prefix}.ln2.b"), Param::new(vec![dm], vec![0.0; dm]));
        p.insert(format!("{prefix}.ffn.w1"), Param::new(vec![dm, d_ff], r.normal_vec(dm * d_ff)));
        p.insert(format!("{prefix}.ffn.b1"), Param::new(vec![d_ff], vec![0.0; d_ff]));
        p.insert(format!("{prefix}.ffn.w2"), Param::new(vec![d_ff, dm], r.normal_vec(d_ff * dm)));
        p.insert(format!("{prefix}.ffn.b2"), Param::new(vec![dm], vec![0.0; dm]));
    }

    /// Adds a block under a new path. Model parameters come from `init`;
    /// this is for synthetic parameter sets in tests and tools.
    pub fn insert(&mut self, path: impl Into<String>, param: Param) {
        let prior = self.entries.insert(path.into(), param);
        debug_assert!(prior.is_none());
    }

    pub fn get(&self, path: &str) -> Option<&Param> {
        self.entries.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Param> {
        self.entries.get_mut(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.values().map(|p| p.data.len()).sum()
    }

    /// Replaces a block's values; shape must match exactly.
    pub fn set(&mut self, path: &str, data: Vec<f64>) -> Result<()> {
        let param = self.entries.get_mut(path).ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{path}`")))?;
        if data.len() != param.data.len() {
            return Err(Error::Checkpoint(format!(
                "parameter `{path}`: {} values for shape {:?}",
                data.len(),
                param.shape
            )));
        }
        param.data = data;
        Ok(())
    }

    /// Puts every block on a tape as a leaf, in enumeration order.
    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> Result<Staged> {
        let mut ids = IndexMap::with_capacity(self.entries.len());
        for (path, param) in &self.entries {
            let id = tape.leaf(param.data.clone(), param.shape.clone(), trainable)?;
            ids.insert(path.clone(), id);
        }
        Ok(Staged { ids })
    }
}

/// Tape handles for every parameter block of one staging.
pub struct Staged {
    ids: IndexMap<String, TensorId>,
}

impl Staged {
    /// Assembles handles for leaves staged by someone else (the gradient
    /// checker puts its own perturbed copies on the tape).
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, TensorId)>) -> Self {
        Staged { ids: pairs.into_iter().collect() }
    }

    /// Panics on an unknown path: parameter naming is internal and fixed.
    pub fn id(&self, path: &str) -> TensorId {
        *self.ids.get(path).unwrap_or_else(|| panic!("no parameter `{path}` staged"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorId)> {
        self.ids.iter()
    }
}

fn all_rows(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// x·w + b broadcast over rows.
fn linear(tape: &mut Tape, x: TensorId, w: TensorId, b: Option<TensorId>) -> Result<TensorId> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => {
            let rows = all_rows(tape.shape(y)[0]);
            tape.add_to_rows(y, b, &rows)
        }
        None => Ok(y),
    }
}

/// Adds p_l to the image row, p_v to every tangible row, p_u to every
/// intangible row. Type-based: all rows of one kind share one vector.
pub fn add_type_embeddings(
    tape: &mut Tape,
    x: TensorId,
    n_tangible: usize,
    n_intangible: usize,
    p_l: TensorId,
    p_v: TensorId,
    p_u: TensorId,
) -> Result<TensorId> {
    let mut x = tape.add_to_rows(x, p_l, &[0])?;
    if n_tangible > 0 {
        let rows: Vec<usize> = (1..1 + n_tangible).collect();
        x = tape.add_to_rows(x, p_v, &rows)?;
    }
    if n_intangible > 0 {
        let rows: Vec<usize> = (1 + n_tangible..1 + n_tangible + n_intangible).collect();
        x = tape.add_to_rows(x, p_u, &rows)?;
    }
    Ok(x)
}

/// One pre-norm transformer block: x + Attn(LN(x)), then x + FFN(LN(x)).
/// `bias` is added to every head's scaled scores; `key_valid` masks keys out
/// of the softmax (the prefix-only callers pass `None`).
pub fn attention_layer(
    tape: &mut Tape,
    x: TensorId,
    bias: Option<TensorId>,
    key_valid: Option<&[bool]>,
    staged: &Staged,
    prefix: &str,
    n_heads: usize,
) -> Result<TensorId> {
    let d_model = tape.shape(x)[1];
    if d_model % n_heads != 0 {
        return Err(Error::Contract { op: "attention_layer", message: format!("d_model {d_model} not divisible by {n_heads} heads") });
    }
    let d_head = d_model / n_heads;
    let inv_sqrt = 1.0 / (d_head as f64).sqrt();

    let ln1_g = staged.id(&format!("{prefix}.ln1.g"));
    let ln1_b = staged.id(&format!("{prefix}.ln1.b"));
    let h = tape.layer_norm(x, ln1_g, ln1_b, LN_EPS)?;

    let q = linear(tape, h, staged.id(&format!("{prefix}.attn.wq")), Some(staged.id(&format!("{prefix}.attn.bq"))))?;
    let k = linear(tape, h, staged.id(&format!("{prefix}.attn.wk")), Some(staged.id(&format!("{prefix}.attn.bk"))))?;
    let v = linear(tape, h, staged.id(&format!("{prefix}.attn.wv")), Some(staged.id(&format!("{prefix}.attn.bv"))))?;

    let mut heads = Vec::with_capacity(n_heads);
    for hd in 0..n_heads {
        let c0 = hd * d_head;
        let c1 = c0 + d_head;
        let qh = tape.slice_cols(q, c0, c1)?;
        let kh = tape.slice_cols(k, c0, c1)?;
        let vh = tape.slice_cols(v, c0, c1)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let mut scaled = tape.scale(scores, inv_sqrt);
        if let Some(b) = bias {
            // The same bias for every head, applied after scaling and
            // before the softmax.
            scaled = tape.add(scaled, b)?;
        }
        let probs = tape.softmax_lastdim(scaled, key_valid)?;
        heads.push(tape.matmul(probs, vh)?);
    }
    let mixed = tape.concat_cols(&heads)?;
    let attn_out = linear(tape, mixed, staged.id(&format!("{prefix}.attn.wo")), Some(staged.id(&format!("{prefix}.attn.bo"))))?;
    let x = tape.add(x, attn_out)?;

    let ln2_g = staged.id(&format!("{prefix}.ln2.g"));
    let ln2_b = staged.id(&format!("{prefix}.ln2.b"));
    let h2 = tape.layer_norm(x, ln2_g, ln2_b, LN_EPS)?;
    let f1 = linear(tape, h2, staged.id(&format!("{prefix}.ffn.w1")), Some(staged.id(&format!("{prefix}.ffn.b1"))))?;
    let f1 = tape.relu(f1);
    let f2 = linear(tape, f1, staged.id(&format!("{prefix}.ffn.w2")), Some(staged.id(&format!("{prefix}.ffn.b2"))))?;
    tape.add(x, f2)
}

fn mlp3(tape: &mut Tape, x: TensorId, staged: &Staged) -> Result<TensorId> {
    let mut y = x;
    for i in 0..3 {
        let w = staged.id(&format!("img.l_mlp.{i}.w"));
        let b = staged.id(&format!("img.l_mlp.{i}.b"));
        y = linear(tape, y, w, Some(b))?;
        if i < 2 {
            y = tape.relu(y);
        }
    }
    Ok(y)
}

/// Builds the image-side graph for one sample and returns the normalized
/// embedding row [1, embed_dim]. With `additive_attention` off no rank grid
/// is ever constructed and the blocks run as a plain transformer.
pub fn encode_image_on_tape(
    tape: &mut Tape,
    staged: &Staged,
    cfg: &ModelConfig,
    ts: &TokenSet,
    additive_attention: bool,
) -> Result<TensorId> {
    let rm = if additive_attention {
        let (positions, _) = layout(ts.tangible.len(), ts.intangible.len(), cfg.encoder.context_length);
        Some(build_ranks(ts, &positions, cfg.encoder.context_length)?)
    } else {
        None
    };
    encode_image_with_ranks(tape, staged, cfg, ts, rm.as_ref())
}

/// Same pipeline with a caller-supplied rank grid, so batch loops can build
/// each sample's grid once and reuse it every epoch. `None` runs the
/// bias-free ablation.
pub fn encode_image_with_ranks(
    tape: &mut Tape,
    staged: &Staged,
    cfg: &ModelConfig,
    ts: &TokenSet,
    ranks: Option<&RankMatrix>,
) -> Result<TensorId> {
    ts.validate()?;
    let e = &cfg.encoder;
    let len = ts.valid_len();
    if len > e.context_length {
        return Err(Error::Capacity { sample_id: ts.sample_id.clone(), needed: len, context_length: e.context_length });
    }
    if ts.l.len() != e.d_l {
        return Err(Error::Validation {
            sample_id: ts.sample_id.clone(),
            field: "l".to_string(),
            message: format!("width {} != configured d_l {}", ts.l.len(), e.d_l),
        });
    }
    if ts.d != cfg.d {
        return Err(Error::Validation {
            sample_id: ts.sample_id.clone(),
            field: "d".to_string(),
            message: format!("width {} != configured d {}", ts.d, cfg.d),
        });
    }

    let l_leaf = tape.leaf(ts.l.clone(), vec![1, e.d_l], false)?;
    let l_row = mlp3(tape, l_leaf, staged)?;

    let n_vu = ts.tangible.len() + ts.intangible.len();
    let mut x = if n_vu > 0 {
        let mut data = Vec::with_capacity(n_vu * cfg.d);
        for row in ts.tangible.iter().chain(ts.intangible.iter()) {
            data.extend_from_slice(row);
        }
        let vu_leaf = tape.leaf(data, vec![n_vu, cfg.d], false)?;
        let vu = linear(tape, vu_leaf, staged.id("img.in_proj.w"), Some(staged.id("img.in_proj.b")))?;
        tape.concat_rows(&[l_row, vu])?
    } else {
        l_row
    };

    x = add_type_embeddings(
        tape,
        x,
        ts.tangible.len(),
        ts.intangible.len(),
        staged.id("img.pos.l"),
        staged.id("img.pos.v"),
        staged.id("img.pos.u"),
    )?;

    let bias = match ranks {
        Some(rm) => Some(bias_on_tape(tape, staged.id("rank.a"), rm, len)?),
        None => None,
    };

    for i in 0..e.n_layers {
        x = attention_layer(tape, x, bias, None, staged, &format!("img.layers.{i}"), e.n_heads)?;
    }

    let readout = tape.slice_rows(x, 0, 1)?;
    let s = tape.matmul(readout, staged.id("img.out_proj.w"))?;
    tape.normalize_rows(s)
}

/// Builds the text-side graph for one caption and returns the normalized
/// embedding row [1, embed_dim]. The readout happens at an EOS token
/// appended after the ids.
pub fn encode_caption_on_tape(tape: &mut Tape, staged: &Staged, cfg: &ModelConfig, ids: &[u32]) -> Result<TensorId> {
    let t = &cfg.text;
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= t.vocab_size) {
        return Err(Error::Vocabulary { id: bad, vocab_size: t.vocab_size });
    }
    let len = ids.len() + 1; // EOS appended
    if len > t.context_length {
        return Err(Error::Capacity {
            sample_id: format!("caption[{} ids]", ids.len()),
            needed: len,
            context_length: t.context_length,
        });
    }

    let mut rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    rows.push(cfg.eos_id());
    let tok = tape.gather_rows(staged.id("txt.tok_embed"), &rows)?;
    let pos = tape.gather_rows(staged.id("txt.pos_embed"), &all_rows(len))?;
    let mut x = tape.add(tok, pos)?;

    for i in 0..t.n_layers {
        x = attention_layer(tape, x, None, None, staged, &format!("txt.layers.{i}"), t.n_heads)?;
    }

    let readout = tape.slice_rows(x, len - 1, len)?;
    let t_emb = tape.matmul(readout, staged.id("txt.out_proj.w"))?;
    tape.normalize_rows(t_emb)
}

/// Frozen single-sample image embedding.
pub fn encode_image(params: &ModelParams, cfg: &ModelConfig, ts: &TokenSet, additive_attention: bool) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let staged = params.stage(&mut tape, false)?;
    let s = encode_image_on_tape(&mut tape, &staged, cfg, ts, additive_attention)?;
    Ok(tape.data(s).to_vec())
}

/// Frozen single-caption text embedding.
pub fn encode_caption(params: &ModelParams, cfg: &ModelConfig, ids: &[u32]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let staged = params.stage(&mut tape, false)?;
    let t = encode_caption_on_tape(&mut tape, &staged, cfg, ids)?;
    Ok(tape.data(t).to_vec())
}
