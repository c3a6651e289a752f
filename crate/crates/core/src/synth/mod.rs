//! Deterministic paired scene/caption generator.
//!
//! Real extraction pipelines produce object and relation embeddings from
//! pixels; here every object class and predicate class instead owns a fixed
//! unit-norm prototype vector, and instances are prototypes plus Gaussian
//! noise. That keeps the mapping between vectors and caption words exact, so
//! evaluation can rely on ground truth rather than another model.
//!
//! Scenes hold 2..=8 objects of distinct classes placed in the unit square,
//! 1..=4 directed triplets each owning its own relation instance, and the
//! true 4-nearest-neighbor lists by Euclidean distance between positions.
//! Captions follow the fixed grammar "the <subject> <predicate> the
//! <object>", clauses joined by "and", which a scene's caption decodes back
//! into its exact triplet multiset.
//!
//! A configurable share of consecutive scene pairs (2p, 2p+1) are direction
//! twins: identical vectors, positions, and neighbors, with one triplet's
//! direction reversed. Any model that separates twins must read edge
//! direction, not token content.
//!
//! Everything is keyed by (run seed, purpose, index), so generation is
//! reproducible and order-independent.

#[cfg(test)]
mod tests;

use crate::tokens::{TokenSet, Triplet, MAX_NEIGHBORS};
use crate::trainer::derive_seed;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MIN_SCENE_OBJECTS: usize = 2;
pub const MAX_SCENE_OBJECTS: usize = 8;
pub const MAX_SCENE_TRIPLETS: usize = 4;

/// Prototype cosine ceiling; class vectors are rejection-sampled under it.
pub const BASE_COS_LIMIT: f64 = 0.5;

/// Generator knobs. Scene size and triplet count ranges are fixed; what
/// varies per corpus is the vocabulary, vector width, noise, and how often
/// direction twins appear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    /// Object vocabulary size.
    pub n_objects: usize,
    /// Predicate vocabulary size.
    pub n_predicates: usize,
    /// Vector width of every token.
    pub d: usize,
    /// Stddev of the additive Gaussian noise on every instance vector.
    pub sigma: f64,
    /// Probability that a scene pair (2p, 2p+1) becomes direction twins.
    pub twin_rate: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec { n_objects: 12, n_predicates: 6, d: 32, sigma: 0.05, twin_rate: 0.3 }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_objects < MIN_SCENE_OBJECTS {
            return Err(Error::Config {
                field: "n_objects".into(),
                message: format!("need at least {MIN_SCENE_OBJECTS}, got {}", self.n_objects),
            });
        }
        if self.n_predicates < 2 {
            return Err(Error::Config {
                field: "n_predicates".into(),
                message: format!("need at least 2, got {}", self.n_predicates),
            });
        }
        if self.d == 0 {
            return Err(Error::Config { field: "d".into(), message: "width must be positive".into() });
        }
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(Error::Config {
                field: "sigma".into(),
                message: format!("must be non-negative and finite, got {}", self.sigma),
            });
        }
        if !(0.0..=1.0).contains(&self.twin_rate) {
            return Err(Error::Config {
                field: "twin_rate".into(),
                message: format!("must lie in [0, 1], got {}", self.twin_rate),
            });
        }
        Ok(())
    }
}

/// Caption vocabulary: object words first, then predicate words, then the
/// two function words. The text encoder's EOS sits one past `vocab_size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptionGrammar {
    pub n_objects: usize,
    pub n_predicates: usize,
}

impl CaptionGrammar {
    pub fn new(spec: &SceneSpec) -> Self {
        CaptionGrammar { n_objects: spec.n_objects, n_predicates: spec.n_predicates }
    }

    pub fn vocab_size(&self) -> usize {
        self.n_objects + self.n_predicates + 2
    }

    pub fn object_word(&self, class: usize) -> u32 {
        debug_assert!(class < self.n_objects);
        class as u32
    }

    pub fn predicate_word(&self, class: usize) -> u32 {
        debug_assert!(class < self.n_predicates);
        (self.n_objects + class) as u32
    }

    pub fn the(&self) -> u32 {
        (self.n_objects + self.n_predicates) as u32
    }

    pub fn and(&self) -> u32 {
        (self.n_objects + self.n_predicates + 1) as u32
    }

    /// Human-readable word, for inspection output.
    pub fn word_name(&self, id: u32) -> String {
        let id = id as usize;
        if id < self.n_objects {
            format!("obj{id}")
        } else if id < self.n_objects + self.n_predicates {
            format!("rel{}", id - self.n_objects)
        } else if id == self.n_objects + self.n_predicates {
            "the".into()
        } else if id == self.n_objects + self.n_predicates + 1 {
            "and".into()
        } else {
            format!("?{id}")
        }
    }

    /// Caption ids for class-level triples (subject class, object class,
    /// predicate class), one clause per triple in order.
    pub fn caption(&self, triples: &[(usize, usize, usize)]) -> Vec<u32> {
        let mut ids = Vec::with_capacity(triples.len() * 6);
        for (k, &(s, o, p)) in triples.iter().enumerate() {
            if k > 0 {
                ids.push(self.and());
            }
            ids.extend([
                self.the(),
                self.object_word(s),
                self.predicate_word(p),
                self.the(),
                self.object_word(o),
            ]);
        }
        ids
    }

    /// Inverse of `caption`: recovers the class-level triples in clause
    /// order. Anything off-grammar is a parse error.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<(usize, usize, usize)>> {
        let bad = |message: String| Error::Parse { line: 0, message };
        if ids.is_empty() {
            return Err(bad("empty caption".into()));
        }
        let mut triples = Vec::new();
        let mut rest = ids;
        loop {
            if rest.len() < 5 {
                return Err(bad(format!("truncated clause: {rest:?}")));
            }
            let (clause, tail) = rest.split_at(5);
            if clause[0] != self.the() || clause[3] != self.the() {
                return Err(bad(format!("clause lacks its function words: {clause:?}")));
            }
            let s = clause[1] as usize;
            let p = clause[2] as usize;
            let o = clause[4] as usize;
            if s >= self.n_objects || o >= self.n_objects {
                return Err(bad(format!("object word out of range in clause {clause:?}")));
            }
            if p < self.n_objects || p >= self.n_objects + self.n_predicates {
                return Err(bad(format!("predicate word out of range in clause {clause:?}")));
            }
            triples.push((s, o, p - self.n_objects));
            rest = tail;
            match rest.split_first() {
                None => return Ok(triples),
                Some((&w, tail)) if w == self.and() => rest = tail,
                Some((&w, _)) => return Err(bad(format!("expected joiner, got word {w}"))),
            }
        }
    }
}

/// Fixed class prototypes, all unit-norm, pairwise cosine below
/// [`BASE_COS_LIMIT`] across both vocabularies.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseVectors {
    pub objects: Vec<Vec<f64>>,
    pub predicates: Vec<Vec<f64>>,
}

/// Rejection-samples the prototype sets. Errors when the width cannot host
/// that many mutually separated directions.
pub fn base_vectors(spec: &SceneSpec, seed: u64) -> Result<BaseVectors> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "bases", 0));
    let mut all: Vec<Vec<f64>> = Vec::with_capacity(spec.n_objects + spec.n_predicates);
    let mut attempts = 0usize;
    while all.len() < spec.n_objects + spec.n_predicates {
        attempts += 1;
        if attempts > 20_000 {
            return Err(Error::Config {
                field: "d".into(),
                message: format!(
                    "could not place {} prototypes with pairwise cosine < {BASE_COS_LIMIT} in {} dims",
                    spec.n_objects + spec.n_predicates,
                    spec.d
                ),
            });
        }
        let mut v: Vec<f64> = (0..spec.d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            continue;
        }
        for x in v.iter_mut() {
            *x /= norm;
        }
        let separated = all
            .iter()
            .all(|u| u.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>().abs() < BASE_COS_LIMIT);
        if separated {
            all.push(v);
        }
    }
    let predicates = all.split_off(spec.n_objects);
    Ok(BaseVectors { objects: all, predicates })
}

/// True k-nearest-neighbor lists (k = 4, fewer in small scenes) by
/// Euclidean distance, nearest first, index-ordered on exact ties.
pub fn neighbors_from_positions(positions: &[[f64; 2]]) -> Vec<Vec<usize>> {
    let n = positions.len();
    (0..n)
        .map(|a| {
            let mut others: Vec<usize> = (0..n).filter(|&b| b != a).collect();
            others.sort_by(|&b, &c| {
                let db = dist2(positions[a], positions[b]);
                let dc = dist2(positions[a], positions[c]);
                db.partial_cmp(&dc).expect("distances are finite").then(b.cmp(&c))
            });
            others.truncate(MAX_NEIGHBORS);
            others
        })
        .collect()
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// The correct caption of a scene next to the same caption with one
/// clause's subject and object words exchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapPair {
    pub correct: Vec<u32>,
    pub swapped: Vec<u32>,
    /// Which triplet the swap reversed.
    pub triplet_index: usize,
}

/// Generation-time facts about one scene, for evaluation joins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneTruth {
    pub sample_id: String,
    /// Object class of each tangible token.
    pub object_classes: Vec<usize>,
    /// Predicate class of each intangible token.
    pub predicate_classes: Vec<usize>,
    /// Unit-square center of each tangible token.
    pub positions: Vec<[f64; 2]>,
    /// Instance-level (subject, object, predicate) triplets.
    pub triplets: Vec<[usize; 3]>,
    /// For the reversed half of a twin pair: the base scene's sample id.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub twin_of: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub swap: Option<SwapPair>,
}

/// Swapped-caption probe pair for one scene: the full caption, and the same
/// caption with subject and object exchanged in the clause `pick` selects.
/// None when no triplet can be reversed.
pub fn make_swapped_pair(
    grammar: &CaptionGrammar,
    object_classes: &[usize],
    predicate_classes: &[usize],
    triplets: &[Triplet],
    pick: u64,
) -> Option<SwapPair> {
    let swappable: Vec<usize> = (0..triplets.len())
        .filter(|&k| triplets[k].subject != triplets[k].object)
        .collect();
    let &chosen = swappable.get(pick as usize % swappable.len().max(1))?;
    let classes = |flip: Option<usize>| -> Vec<(usize, usize, usize)> {
        triplets
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let (s, o) = if flip == Some(k) { (t.object, t.subject) } else { (t.subject, t.object) };
                (object_classes[s], object_classes[o], predicate_classes[t.predicate])
            })
            .collect()
    };
    Some(SwapPair {
        correct: grammar.caption(&classes(None)),
        swapped: grammar.caption(&classes(Some(chosen))),
        triplet_index: chosen,
    })
}

struct SceneDraw {
    object_classes: Vec<usize>,
    predicate_classes: Vec<usize>,
    positions: Vec<[f64; 2]>,
    triplets: Vec<Triplet>,
    tangible: Vec<Vec<f64>>,
    intangible: Vec<Vec<f64>>,
    l: Vec<f64>,
}

fn draw_scene(spec: &SceneSpec, bases: &BaseVectors, rng: &mut ChaCha8Rng) -> SceneDraw {
    let n_obj = rng.gen_range(MIN_SCENE_OBJECTS..=MAX_SCENE_OBJECTS.min(spec.n_objects));
    let object_classes = sample_distinct(rng, spec.n_objects, n_obj);
    let mut positions: Vec<[f64; 2]> = Vec::with_capacity(n_obj);
    while positions.len() < n_obj {
        let p = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        if !positions.contains(&p) {
            positions.push(p);
        }
    }
    let n_trip = rng.gen_range(1..=MAX_SCENE_TRIPLETS);
    let mut triplets = Vec::with_capacity(n_trip);
    let mut predicate_classes = Vec::with_capacity(n_trip);
    for c in 0..n_trip {
        let s = rng.gen_range(0..n_obj);
        let mut o = rng.gen_range(0..n_obj - 1);
        if o >= s {
            o += 1;
        }
        predicate_classes.push(rng.gen_range(0..spec.n_predicates));
        triplets.push(Triplet { subject: s, object: o, predicate: c });
    }
    let noise = Normal::new(0.0, spec.sigma).expect("sigma validated non-negative");
    let mut noisy = |base: &[f64]| -> Vec<f64> {
        base.iter().map(|&x| x + noise.sample(rng)).collect()
    };
    let tangible: Vec<Vec<f64>> =
        object_classes.iter().map(|&c| noisy(&bases.objects[c])).collect();
    let intangible: Vec<Vec<f64>> =
        predicate_classes.iter().map(|&c| noisy(&bases.predicates[c])).collect();
    let mean: Vec<f64> = (0..spec.d)
        .map(|j| tangible.iter().map(|row| row[j]).sum::<f64>() / n_obj as f64)
        .collect();
    let l = noisy(&mean);
    SceneDraw { object_classes, predicate_classes, positions, triplets, tangible, intangible, l }
}

fn sample_distinct(rng: &mut ChaCha8Rng, universe: usize, k: usize) -> Vec<usize> {
    // Partial Fisher-Yates over the class universe.
    let mut pool: Vec<usize> = (0..universe).collect();
    for i in 0..k {
        let j = rng.gen_range(i..universe);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

fn assemble(
    spec: &SceneSpec,
    grammar: &CaptionGrammar,
    draw: &SceneDraw,
    flip: Option<usize>,
    sample_id: String,
    twin_of: Option<String>,
    swap_pick: u64,
) -> (TokenSet, SceneTruth) {
    let triplets: Vec<Triplet> = draw
        .triplets
        .iter()
        .enumerate()
        .map(|(k, t)| {
            if flip == Some(k) {
                Triplet { subject: t.object, object: t.subject, predicate: t.predicate }
            } else {
                *t
            }
        })
        .collect();
    let class_triples: Vec<(usize, usize, usize)> = triplets
        .iter()
        .map(|t| {
            (
                draw.object_classes[t.subject],
                draw.object_classes[t.object],
                draw.predicate_classes[t.predicate],
            )
        })
        .collect();
    let caption = grammar.caption(&class_triples);
    let ts = TokenSet {
        sample_id: sample_id.clone(),
        d: spec.d,
        l: draw.l.clone(),
        tangible: draw.tangible.clone(),
        intangible: draw.intangible.clone(),
        triplets: triplets.clone(),
        neighbors: neighbors_from_positions(&draw.positions),
        captions: vec![caption],
    };
    let swap = make_swapped_pair(
        grammar,
        &draw.object_classes,
        &draw.predicate_classes,
        &triplets,
        swap_pick,
    );
    let truth = SceneTruth {
        sample_id,
        object_classes: draw.object_classes.clone(),
        predicate_classes: draw.predicate_classes.clone(),
        positions: draw.positions.clone(),
        triplets: triplets.iter().map(|t| [t.subject, t.object, t.predicate]).collect(),
        twin_of,
        swap,
    };
    (ts, truth)
}

/// Generates `n_scenes` paired samples and their ground truth. Scene `i`
/// depends only on (seed, i) and the pair decision for i/2, so any slice of
/// the corpus can be regenerated independently.
pub fn generate(n_scenes: usize, spec: &SceneSpec, seed: u64) -> Result<(Vec<TokenSet>, Vec<SceneTruth>)> {
    spec.validate()?;
    let bases = base_vectors(spec, seed)?;
    let grammar = CaptionGrammar::new(spec);
    let mut sets = Vec::with_capacity(n_scenes);
    let mut truths = Vec::with_capacity(n_scenes);
    for i in 0..n_scenes {
        let pair = (i / 2) as u64;
        let mut pair_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "twin", pair));
        let twins = pair_rng.gen_bool(spec.twin_rate);
        let flip_pick: u64 = pair_rng.gen();
        let sample_id = format!("synth-{i:06}");
        let swap_pick = derive_seed(seed, "swap", i as u64);
        let (ts, truth) = if twins && i % 2 == 1 {
            // Reversed half of a twin pair: same draw as the even sibling,
            // one triplet direction flipped.
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "scene", (i - 1) as u64));
            let draw = draw_scene(spec, &bases, &mut rng);
            let reversible: Vec<usize> = (0..draw.triplets.len())
                .filter(|&k| draw.triplets[k].subject != draw.triplets[k].object)
                .collect();
            let flip = reversible[flip_pick as usize % reversible.len()];
            let twin_of = Some(format!("synth-{:06}", i - 1));
            assemble(spec, &grammar, &draw, Some(flip), sample_id, twin_of, swap_pick)
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "scene", i as u64));
            let draw = draw_scene(spec, &bases, &mut rng);
            assemble(spec, &grammar, &draw, None, sample_id, None, swap_pick)
        };
        debug_assert!(ts.validate().is_ok());
        sets.push(ts);
        truths.push(truth);
    }
    Ok((sets, truths))
}

const TRUTH_FORMAT: &str = "semtok-truth";

#[derive(Serialize, Deserialize)]
struct TruthHeader {
    format: String,
    version: u32,
}

/// Writes the ground-truth sidecar: one header line, then one record per
/// scene in corpus order.
pub fn write_truth(path: impl AsRef<Path>, truths: &[SceneTruth]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let header = TruthHeader { format: TRUTH_FORMAT.into(), version: 1 };
    serde_json::to_writer(&mut w, &header).map_err(io_err)?;
    w.write_all(b"\n")?;
    for t in truths {
        serde_json::to_writer(&mut w, t).map_err(io_err)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a ground-truth sidecar written by [`write_truth`].
pub fn read_truth(path: impl AsRef<Path>) -> Result<Vec<SceneTruth>> {
    let file = std::fs::File::open(&path)?;
    let reader: Box<dyn Read> = if path.as_ref().extension().is_some_and(|e| e == "gz") {
        Box::new(flate2::read::GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    let mut lines = BufReader::new(reader).lines();
    let first = match lines.next() {
        None => return Ok(Vec::new()),
        Some(line) => line?,
    };
    let header: TruthHeader = serde_json::from_str(&first)
        .map_err(|e| Error::Parse { line: 1, message: format!("bad truth header: {e}") })?;
    if header.format != TRUTH_FORMAT {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected format {TRUTH_FORMAT:?}, got {:?}", header.format),
        });
    }
    let mut out = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let truth: SceneTruth = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: idx + 2, message: e.to_string() })?;
        out.push(truth);
    }
    Ok(out)
}

fn io_err(e: serde_json::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
