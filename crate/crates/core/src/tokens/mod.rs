//! Per-image semantic token sets and their fixed-context packing.
//!
//! A [`TokenSet`] carries everything an upstream extractor would hand us for
//! one image: global image features `l`, tangible object vectors `V`,
//! intangible relation vectors `U`, the relation triplets `E` over those
//! indices, per-object nearest-neighbor lists `N`, and one or more tokenized
//! captions. [`pack`] lays a validated set out as a fixed-height matrix:
//! row 0 is `l`, then `V` in order, then `U`, then exact-zero PAD rows.

mod io;

pub use io::{read_corpus, write_corpus, CorpusHeader, CorpusReader};

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MAX_NEIGHBORS: usize = 4;

/// One relation edge: `subject` and `object` index tangible tokens,
/// `predicate` indexes intangible tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: usize,
    pub object: usize,
    pub predicate: usize,
}

/// The full token record for one image.
///
/// `d` is carried explicitly so records with empty `V` and `U` stay
/// well-typed; `l` may have a different width (`l.len()` is authoritative).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    pub sample_id: String,
    pub d: usize,
    pub l: Vec<f64>,
    pub tangible: Vec<Vec<f64>>,
    pub intangible: Vec<Vec<f64>>,
    pub triplets: Vec<Triplet>,
    /// neighbors[a] lists tangible indices nearest to a, closest first.
    pub neighbors: Vec<Vec<usize>>,
    /// One or more tokenized captions; training samples uniformly when
    /// several are present.
    pub captions: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Image,
    Tangible,
    Intangible,
    Pad,
}

/// Where a packed row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenPosition {
    pub kind: TokenKind,
    /// Index into `tangible` or `intangible` for those kinds; `None` for
    /// the image row and PAD.
    pub source_index: Option<usize>,
}

/// A token set laid out in the fixed context window.
#[derive(Debug, Clone)]
pub struct PackedTokens {
    pub context_length: usize,
    pub d: usize,
    /// Row-major [context_length x d]; PAD rows are exact zeros.
    pub tokens: Vec<f64>,
    pub positions: Vec<TokenPosition>,
    pub valid: Vec<bool>,
}

/// The canonical row order shared by packing, rank construction, and the
/// encoder: image, tangibles, intangibles, padding.
pub fn layout(n_tangible: usize, n_intangible: usize, context_length: usize) -> (Vec<TokenPosition>, Vec<bool>) {
    let mut positions = Vec::with_capacity(context_length);
    positions.push(TokenPosition { kind: TokenKind::Image, source_index: None });
    for i in 0..n_tangible {
        positions.push(TokenPosition { kind: TokenKind::Tangible, source_index: Some(i) });
    }
    for i in 0..n_intangible {
        positions.push(TokenPosition { kind: TokenKind::Intangible, source_index: Some(i) });
    }
    let used = positions.len();
    for _ in used..context_length {
        positions.push(TokenPosition { kind: TokenKind::Pad, source_index: None });
    }
    let valid = (0..context_length).map(|i| i < used).collect();
    (positions, valid)
}

impl TokenSet {
    pub fn n_tangible(&self) -> usize {
        self.tangible.len()
    }

    pub fn n_intangible(&self) -> usize {
        self.intangible.len()
    }

    /// Rows occupied once packed: 1 + |V| + |U|.
    pub fn valid_len(&self) -> usize {
        1 + self.tangible.len() + self.intangible.len()
    }

    /// Checks every structural invariant, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, message: String| {
            Err(Error::Validation { sample_id: self.sample_id.clone(), field: field.to_string(), message })
        };

        for (i, &x) in self.l.iter().enumerate() {
            if !x.is_finite() {
                return fail(&format!("l[{i}]"), format!("non-finite value {x}"));
            }
        }
        for (name, rows) in [("V", &self.tangible), ("U", &self.intangible)] {
            for (i, row) in rows.iter().enumerate() {
                if row.len() != self.d {
                    return fail(&format!("{name}[{i}]"), format!("width {} != d {}", row.len(), self.d));
                }
                if let Some(x) = row.iter().find(|x| !x.is_finite()) {
                    return fail(&format!("{name}[{i}]"), format!("non-finite value {x}"));
                }
            }
        }

        let nv = self.tangible.len();
        let nu = self.intangible.len();
        let mut predicate_used = vec![false; nu];
        for (i, t) in self.triplets.iter().enumerate() {
            if t.subject >= nv {
                return fail(&format!("triplets[{i}].subject"), format!("index {} out of range for |V|={nv}", t.subject));
            }
            if t.object >= nv {
                return fail(&format!("triplets[{i}].object"), format!("index {} out of range for |V|={nv}", t.object));
            }
            if t.subject == t.object {
                return fail(&format!("triplets[{i}].object"), format!("subject and object both {}", t.subject));
            }
            if t.predicate >= nu {
                return fail(&format!("triplets[{i}].predicate"), format!("index {} out of range for |U|={nu}", t.predicate));
            }
            if predicate_used[t.predicate] {
                return fail(&format!("triplets[{i}].predicate"), format!("predicate {} used by more than one triplet", t.predicate));
            }
            predicate_used[t.predicate] = true;
        }
        if let Some(unused) = predicate_used.iter().position(|&u| !u) {
            // Real extractors threshold predicates separately from objects,
            // so dangling relation tokens are tolerated. Debug level: this
            // fires on every validation of such a scene, which is every
            // pack and every rank build.
            log::debug!("{}: intangible token {unused} not referenced by any triplet", self.sample_id);
        }

        if self.neighbors.len() != nv {
            return fail("N", format!("{} neighbor lists for |V|={nv}", self.neighbors.len()));
        }
        for (a, list) in self.neighbors.iter().enumerate() {
            if list.len() > MAX_NEIGHBORS {
                return fail(&format!("N.{a}"), format!("{} neighbors, max {MAX_NEIGHBORS}", list.len()));
            }
            let mut seen = vec![false; nv];
            for &b in list {
                if b >= nv {
                    return fail(&format!("N.{a}"), format!("neighbor {b} out of range for |V|={nv}"));
                }
                if b == a {
                    return fail(&format!("N.{a}"), "list contains the anchor itself".to_string());
                }
                if seen[b] {
                    return fail(&format!("N.{a}"), format!("duplicate neighbor {b}"));
                }
                seen[b] = true;
            }
        }

        if self.captions.is_empty() {
            return fail("caption", "record carries no caption".to_string());
        }
        Ok(())
    }
}

/// Lays out a validated token set in the fixed context window.
///
/// Requires `l` to share the token width `d` so the result is rectangular;
/// corpora with a wider image-feature row are consumed by the encoder
/// directly and cannot be packed.
pub fn pack(ts: &TokenSet, context_length: usize) -> Result<PackedTokens> {
    ts.validate()?;
    if ts.l.len() != ts.d {
        return Err(Error::Validation {
            sample_id: ts.sample_id.clone(),
            field: "l".to_string(),
            message: format!("pack needs l width {} == d {}", ts.l.len(), ts.d),
        });
    }
    let needed = ts.valid_len();
    if needed > context_length {
        return Err(Error::Capacity { sample_id: ts.sample_id.clone(), needed, context_length });
    }

    let d = ts.d;
    let mut tokens = vec![0.0; context_length * d];
    tokens[..d].copy_from_slice(&ts.l);
    let mut row = 1;
    for v in ts.tangible.iter().chain(ts.intangible.iter()) {
        tokens[row * d..(row + 1) * d].copy_from_slice(v);
        row += 1;
    }
    let (positions, valid) = layout(ts.tangible.len(), ts.intangible.len(), context_length);
    Ok(PackedTokens { context_length, d, tokens, positions, valid })
}

/// Inverse of [`pack`] up to dropping PAD rows: regroups rows by kind.
pub fn unpack(packed: &PackedTokens) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = packed.d;
    let mut l = Vec::new();
    let mut tangible = Vec::new();
    let mut intangible = Vec::new();
    for (i, pos) in packed.positions.iter().enumerate() {
        let row = packed.tokens[i * d..(i + 1) * d].to_vec();
        match pos.kind {
            TokenKind::Image => l = row,
            TokenKind::Tangible => tangible.push(row),
            TokenKind::Intangible => intangible.push(row),
            TokenKind::Pad => {}
        }
    }
    (l, tangible, intangible)
}
