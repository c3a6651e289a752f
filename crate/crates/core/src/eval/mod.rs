//! Retrieval metrics, similarity statistics, and compositional probes.
//!
//! Everything reduces to cosine similarities between unit-norm embeddings,
//! so the scoring core is pure: `report_from_embeddings` for matched-batch
//! retrieval, `score_quad` for the two-image/two-caption group protocol,
//! and strict-inequality winner picks everywhere. Ties count as failures
//! and argmax breaks ties toward the lowest index, which keeps every meter
//! deterministic.
//!
//! Corpus embeddings can be cached on disk keyed by digests of the exact
//! parameter values and the exact corpus content, so re-running evaluation
//! after an interrupted sweep costs one file read per side.


use crate::encoder::{encode_caption, encode_image, ModelConfig, ModelParams};
use crate::synth::SceneTruth;
use crate::tokens::TokenSet;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

/// Cosine similarities of a matched image/caption batch plus the summary
/// statistics read off them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityReport {
    /// Row-major [n, n]; entry (i, j) is cos(image i, caption j).
    pub matrix: Vec<f64>,
    pub n: usize,
    /// Fraction of captions whose best image is their own.
    pub t2i_top1: f64,
    /// Fraction of images whose best caption is their own.
    pub i2t_top1: f64,
    /// Mean over the matched cells i == j.
    pub diag_mean: f64,
    /// Mean over all other cells; 0 when a single pair leaves none.
    pub offdiag_mean: f64,
}

/// Dot products of every pair of rows; unit-norm rows make these cosines.
pub fn similarity_matrix(s: &[Vec<f64>], t: &[Vec<f64>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(s.len() * t.len());
    for si in s {
        for tj in t {
            out.push(si.iter().zip(tj).map(|(a, b)| a * b).sum());
        }
    }
    out
}

/// Builds the retrieval report from matched embedding lists. Both sides
/// must be equally long, non-empty, and of one width.
pub fn report_from_embeddings(s: &[Vec<f64>], t: &[Vec<f64>]) -> Result<SimilarityReport> {
    if s.is_empty() || s.len() != t.len() {
        return Err(Error::Contract {
            op: "report_from_embeddings",
            message: format!("need equal non-empty sides, got {} images, {} captions", s.len(), t.len()),
        });
    }
    let n = s.len();
    let width = s[0].len();
    if s.iter().chain(t.iter()).any(|row| row.len() != width) {
        return Err(Error::Contract {
            op: "report_from_embeddings",
            message: "embedding widths differ across rows".into(),
        });
    }
    let matrix = similarity_matrix(s, t);
    let mut i2t_hits = 0usize;
    let mut t2i_hits = 0usize;
    for i in 0..n {
        // First strictly-greater wins: ties resolve to the lowest index.
        let best_j = (0..n).fold(0, |best, j| if matrix[i * n + j] > matrix[i * n + best] { j } else { best });
        if best_j == i {
            i2t_hits += 1;
        }
        let best_i = (0..n).fold(0, |best, k| if matrix[k * n + i] > matrix[best * n + i] { k } else { best });
        if best_i == i {
            t2i_hits += 1;
        }
    }
    let diag_mean = (0..n).map(|i| matrix[i * n + i]).sum::<f64>() / n as f64;
    let offdiag_mean = if n > 1 {
        let total: f64 = matrix.iter().sum();
        let diag: f64 = (0..n).map(|i| matrix[i * n + i]).sum();
        (total - diag) / (n * n - n) as f64
    } else {
        0.0
    };
    Ok(SimilarityReport {
        matrix,
        n,
        t2i_top1: t2i_hits as f64 / n as f64,
        i2t_top1: i2t_hits as f64 / n as f64,
        diag_mean,
        offdiag_mean,
    })
}

fn check_widths(cfg: &ModelConfig, sets: &[TokenSet]) -> Result<()> {
    for ts in sets {
        if ts.d != cfg.d {
            return Err(Error::Config {
                field: "d".into(),
                message: format!(
                    "sample {} has width {}, model expects {}",
                    ts.sample_id, ts.d, cfg.d
                ),
            });
        }
    }
    Ok(())
}

/// Embeds every scene, in corpus order.
pub fn embed_images(
    params: &ModelParams,
    cfg: &ModelConfig,
    sets: &[TokenSet],
    additive_attention: bool,
) -> Result<Vec<Vec<f64>>> {
    check_widths(cfg, sets)?;
    sets.iter().map(|ts| encode_image(params, cfg, ts, additive_attention)).collect()
}

/// Embeds each scene's first caption, in corpus order. Evaluation is
/// deterministic, so unlike training it never samples among captions.
pub fn embed_captions(params: &ModelParams, cfg: &ModelConfig, sets: &[TokenSet]) -> Result<Vec<Vec<f64>>> {
    sets.iter().map(|ts| encode_caption(params, cfg, &ts.captions[0])).collect()
}

/// Zero-shot retrieval over a matched corpus: every caption searches all
/// images and vice versa.
pub fn retrieval_eval(
    params: &ModelParams,
    cfg: &ModelConfig,
    sets: &[TokenSet],
    additive_attention: bool,
    cache_dir: Option<&Path>,
) -> Result<SimilarityReport> {
    let s = cached_or_compute(cache_dir, params, cfg, sets, ImageSide(additive_attention))?;
    let t = cached_or_compute(cache_dir, params, cfg, sets, TextSide)?;
    report_from_embeddings(&s, &t)
}

/// One two-alternative probe: a scene, its true caption, and a distractor.
#[derive(Debug, Clone)]
pub struct ChoiceProbe {
    pub ts: TokenSet,
    pub correct: Vec<u32>,
    pub distractor: Vec<u32>,
}

/// Builds choice probes from generated ground truth (correct caption vs
/// its subject/object-swapped rewrite).
pub fn swap_probes(sets: &[TokenSet], truths: &[SceneTruth]) -> Result<Vec<ChoiceProbe>> {
    if sets.len() != truths.len() {
        return Err(Error::Contract {
            op: "swap_probes",
            message: format!("{} scenes but {} truth records", sets.len(), truths.len()),
        });
    }
    Ok(sets
        .iter()
        .zip(truths)
        .filter_map(|(ts, truth)| {
            truth.swap.as_ref().map(|pair| ChoiceProbe {
                ts: ts.clone(),
                correct: pair.correct.clone(),
                distractor: pair.swapped.clone(),
            })
        })
        .collect())
}

/// Marks every scene that belongs to a direction-twin pair: twins carry
/// the link, and the bases they mirror are looked up by id. Such scenes
/// are exactly the ones where token content alone cannot settle caption
/// direction.
pub fn ambiguous_mask(truths: &[SceneTruth]) -> Vec<bool> {
    let index: std::collections::HashMap<&str, usize> =
        truths.iter().enumerate().map(|(i, t)| (t.sample_id.as_str(), i)).collect();
    let mut mask = vec![false; truths.len()];
    for (i, truth) in truths.iter().enumerate() {
        if let Some(base) = &truth.twin_of {
            mask[i] = true;
            if let Some(&j) = index.get(base.as_str()) {
                mask[j] = true;
            }
        }
    }
    mask
}

/// Fraction of (correct, distractor) score pairs won strictly by the
/// correct side. Ties lose; an empty list scores 0.
pub fn choice_accuracy(scores: &[(f64, f64)]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let hits = scores.iter().filter(|(c, d)| c > d).count();
    hits as f64 / scores.len() as f64
}

/// Fraction of probes whose correct caption is strictly closer to the image
/// than the distractor. Equal scores count as failures.
pub fn pairwise_choice_eval(
    params: &ModelParams,
    cfg: &ModelConfig,
    probes: &[ChoiceProbe],
    additive_attention: bool,
) -> Result<f64> {
    let mut scores = Vec::with_capacity(probes.len());
    for probe in probes {
        let s = encode_image(params, cfg, &probe.ts, additive_attention)?;
        let tc = encode_caption(params, cfg, &probe.correct)?;
        let td = encode_caption(params, cfg, &probe.distractor)?;
        scores.push((dot(&s, &tc), dot(&s, &td)));
    }
    Ok(choice_accuracy(&scores))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Two images with two captions that cross-describe them.
#[derive(Debug, Clone)]
pub struct GroupQuad {
    pub image_a: TokenSet,
    pub image_b: TokenSet,
    pub caption_a: Vec<u32>,
    pub caption_b: Vec<u32>,
}

/// Pairs direction twins into group probes: the twin halves share all
/// token content and differ only in one edge direction, so only relational
/// structure can tell their captions apart.
pub fn twin_quads(sets: &[TokenSet], truths: &[SceneTruth]) -> Result<Vec<GroupQuad>> {
    if sets.len() != truths.len() {
        return Err(Error::Contract {
            op: "twin_quads",
            message: format!("{} scenes but {} truth records", sets.len(), truths.len()),
        });
    }
    let mut quads = Vec::new();
    for (i, truth) in truths.iter().enumerate() {
        let Some(base_id) = &truth.twin_of else { continue };
        let Some(base) = sets.iter().position(|ts| &ts.sample_id == base_id) else {
            return Err(Error::Contract {
                op: "twin_quads",
                message: format!("twin {} references missing scene {base_id}", truth.sample_id),
            });
        };
        quads.push(GroupQuad {
            image_a: sets[base].clone(),
            image_b: sets[i].clone(),
            caption_a: sets[base].captions[0].clone(),
            caption_b: sets[i].captions[0].clone(),
        });
    }
    Ok(quads)
}

/// Group scoring of one quad from its four cosine scores. Returns (text
/// correct, image correct, group correct): captions must pick their own
/// image, images their own caption, and the group needs both.
pub fn score_quad(aa: f64, ab: f64, ba: f64, bb: f64) -> (bool, bool, bool) {
    let text = aa > ab && bb > ba;
    let image = aa > ba && bb > ab;
    (text, image, text && image)
}

/// Group accuracies over a quad list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub text_correct: f64,
    pub image_correct: f64,
    pub group_correct: f64,
}

/// Group accuracies from per-quad cosine 4-tuples [aa, ab, ba, bb]. An
/// empty list scores 0 across the board.
pub fn group_score_from_cosines(scores: &[[f64; 4]]) -> GroupScore {
    if scores.is_empty() {
        return GroupScore { text_correct: 0.0, image_correct: 0.0, group_correct: 0.0 };
    }
    let (mut text, mut image, mut group) = (0usize, 0usize, 0usize);
    for &[aa, ab, ba, bb] in scores {
        let (t, i, g) = score_quad(aa, ab, ba, bb);
        text += usize::from(t);
        image += usize::from(i);
        group += usize::from(g);
    }
    let n = scores.len() as f64;
    GroupScore {
        text_correct: text as f64 / n,
        image_correct: image as f64 / n,
        group_correct: group as f64 / n,
    }
}

pub fn group_eval(
    params: &ModelParams,
    cfg: &ModelConfig,
    quads: &[GroupQuad],
    additive_attention: bool,
) -> Result<GroupScore> {
    let mut scores = Vec::with_capacity(quads.len());
    for quad in quads {
        let sa = encode_image(params, cfg, &quad.image_a, additive_attention)?;
        let sb = encode_image(params, cfg, &quad.image_b, additive_attention)?;
        let ta = encode_caption(params, cfg, &quad.caption_a)?;
        let tb = encode_caption(params, cfg, &quad.caption_b)?;
        scores.push([dot(&sa, &ta), dot(&sa, &tb), dot(&sb, &ta), dot(&sb, &tb)]);
    }
    Ok(group_score_from_cosines(&scores))
}

// ── Embedding cache ──────────────────────────────────────────────────

/// Digest of the exact parameter values and model shape.
pub fn params_digest(params: &ModelParams, cfg: &ModelConfig) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_string(cfg).expect("config serializes").as_bytes());
    for (path, p) in params.iter() {
        h.update(path.as_bytes());
        h.update([0u8]);
        for &dim in &p.shape {
            h.update((dim as u64).to_le_bytes());
        }
        for &x in &p.data {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Digest of the exact corpus content, order included.
pub fn corpus_digest(sets: &[TokenSet]) -> String {
    let mut h = Sha256::new();
    let f64s = |row: &[f64]| {
        let mut bytes = Vec::with_capacity(row.len() * 8);
        for &x in row {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        bytes
    };
    for ts in sets {
        h.update(ts.sample_id.as_bytes());
        h.update([0u8]);
        h.update((ts.d as u64).to_le_bytes());
        h.update(f64s(&ts.l));
        for group in [&ts.tangible, &ts.intangible] {
            h.update((group.len() as u64).to_le_bytes());
            for row in group.iter() {
                h.update(f64s(row));
            }
        }
        h.update((ts.triplets.len() as u64).to_le_bytes());
        for t in &ts.triplets {
            for v in [t.subject, t.object, t.predicate] {
                h.update((v as u64).to_le_bytes());
            }
        }
        h.update((ts.neighbors.len() as u64).to_le_bytes());
        for list in &ts.neighbors {
            h.update((list.len() as u64).to_le_bytes());
            for &b in list {
                h.update((b as u64).to_le_bytes());
            }
        }
        h.update((ts.captions.len() as u64).to_le_bytes());
        for caption in &ts.captions {
            h.update((caption.len() as u64).to_le_bytes());
            for &w in caption {
                h.update(w.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

trait EmbedSide {
    fn label(&self) -> String;
    fn compute(&self, params: &ModelParams, cfg: &ModelConfig, sets: &[TokenSet]) -> Result<Vec<Vec<f64>>>;
}

struct ImageSide(bool);
struct TextSide;

impl EmbedSide for ImageSide {
    fn label(&self) -> String {
        if self.0 { "img-biased".into() } else { "img-plain".into() }
    }
    fn compute(&self, params: &ModelParams, cfg: &ModelConfig, sets: &[TokenSet]) -> Result<Vec<Vec<f64>>> {
        embed_images(params, cfg, sets, self.0)
    }
}

impl EmbedSide for TextSide {
    fn label(&self) -> String {
        "txt".into()
    }
    fn compute(&self, params: &ModelParams, cfg: &ModelConfig, sets: &[TokenSet]) -> Result<Vec<Vec<f64>>> {
        embed_captions(params, cfg, sets)
    }
}

const CACHE_FORMAT: &str = "semtok-embed-cache";

#[derive(Serialize, Deserialize, PartialEq)]
struct CacheHeader {
    format: String,
    version: u32,
    side: String,
    params: String,
    corpus: String,
    rows: u64,
    dim: u64,
}

fn cache_path(dir: &Path, side: &str, params: &str, corpus: &str) -> PathBuf {
    dir.join(format!("emb-{side}-{}-{}.bin", &params[..16], &corpus[..16]))
}

fn cached_or_compute(
    cache_dir: Option<&Path>,
    params: &ModelParams,
    cfg: &ModelConfig,
    sets: &[TokenSet],
    side: impl EmbedSide,
) -> Result<Vec<Vec<f64>>> {
    let Some(dir) = cache_dir else {
        return side.compute(params, cfg, sets);
    };
    let pd = params_digest(params, cfg);
    let cd = corpus_digest(sets);
    let path = cache_path(dir, &side.label(), &pd, &cd);
    if let Some(rows) = read_cache(&path, &side.label(), &pd, &cd)? {
        return Ok(rows);
    }
    let rows = side.compute(params, cfg, sets)?;
    write_cache(&path, &side.label(), &pd, &cd, &rows)?;
    Ok(rows)
}

/// None on a miss (absent file or stale header); the caller recomputes.
fn read_cache(path: &Path, side: &str, pd: &str, cd: &str) -> Result<Option<Vec<Vec<f64>>>> {
    let file = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let mut r = BufReader::new(file);
    let mut len_bytes = [0u8; 8];
    if r.read_exact(&mut len_bytes).is_err() {
        return Ok(None);
    }
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    if header_len > (1 << 20) {
        return Ok(None);
    }
    let mut header_bytes = vec![0u8; header_len];
    if r.read_exact(&mut header_bytes).is_err() {
        return Ok(None);
    }
    let Ok(header) = serde_json::from_slice::<CacheHeader>(&header_bytes) else {
        return Ok(None);
    };
    let expected = CacheHeader {
        format: CACHE_FORMAT.into(),
        version: 1,
        side: side.into(),
        params: pd.into(),
        corpus: cd.into(),
        rows: header.rows,
        dim: header.dim,
    };
    if header != expected {
        return Ok(None);
    }
    let mut rows = Vec::with_capacity(header.rows as usize);
    let mut buf = vec![0u8; header.dim as usize * 8];
    for _ in 0..header.rows {
        if r.read_exact(&mut buf).is_err() {
            return Ok(None);
        }
        rows.push(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect());
    }
    Ok(Some(rows))
}

fn write_cache(path: &Path, side: &str, pd: &str, cd: &str, rows: &[Vec<f64>]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let dim = rows.first().map_or(0, Vec::len);
    let header = CacheHeader {
        format: CACHE_FORMAT.into(),
        version: 1,
        side: side.into(),
        params: pd.into(),
        corpus: cd.into(),
        rows: rows.len() as u64,
        dim: dim as u64,
    };
    let header_bytes = serde_json::to_vec(&header).expect("cache header serializes");
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(std::fs::File::create(&tmp)?);
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for row in rows {
            for &x in row {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
