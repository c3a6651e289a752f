//! The pairwise rank grid and its learned additive weights.
//!
//! Scene structure is summarized per image as an integer matrix over packed
//! token positions. With P(v_j) = 1+j and P(u_c) = 1+|V|+c:
//!
//! * each triplet (s, o, p) contributes rank 7 at [P(v_s)][P(v_o)] (the
//!   directed subject-to-object connection), rank 6 at both node-to-edge
//!   cells [P(v_s)][P(u_p)] and [P(v_o)][P(u_p)], and rank 5 at the
//!   edge-to-node cells [P(u_p)][P(v_s)] and [P(u_p)][P(v_o)];
//! * the k-th nearest neighbor of a tangible token (k = 1..4) contributes
//!   rank 5−k at [P(v_a)][P(v_b)].
//!
//! Colliding contributions keep the maximum. Self cells, PAD cells, and
//! everything else stay 0. Ranks become attention biases through the weight
//! table w = cumsum(exp(a)): a cell of rank r > 0 receives w[r], rank 0
//! receives exactly 0, so unrelated pairs see standard attention. w is
//! strictly increasing no matter what a is, which keeps higher ranks more
//! important throughout training. a[0] is pinned to 0 and w[0] is unused;
//! the length-8 table simply aligns indices with ranks 1..7.

#[cfg(test)]
mod tests;

use crate::tensor::{Tape, TensorId};
use crate::tokens::{layout, TokenKind, TokenPosition, TokenSet};
use crate::{Error, Result};
use std::sync::atomic::{AtomicUsize, Ordering};

pub const N_RANKS: usize = 8;

/// Process-wide invocation counter for [`build_ranks`]. Exists so tests can
/// prove the ablated (bias-off) training path never constructs rank grids.
static BUILD_RANKS_CALLS: AtomicUsize = AtomicUsize::new(0);

pub fn build_ranks_call_count() -> usize {
    BUILD_RANKS_CALLS.load(Ordering::Relaxed)
}

/// Integer rank grid over packed positions, entries in 0..=7.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankMatrix {
    pub context_length: usize,
    /// Row-major [context_length x context_length].
    pub ranks: Vec<u8>,
    pub valid: Vec<bool>,
}

impl RankMatrix {
    pub fn rank(&self, p: usize, q: usize) -> u8 {
        self.ranks[p * self.context_length + q]
    }

    /// Top-left n x n block; the whole grid is zero outside the valid
    /// prefix, so this loses nothing when n covers it.
    pub fn prefix_block(&self, n: usize) -> Vec<u8> {
        let c = self.context_length;
        debug_assert!(n <= c);
        let mut out = Vec::with_capacity(n * n);
        for p in 0..n {
            out.extend_from_slice(&self.ranks[p * c..p * c + n]);
        }
        out
    }

    /// Aligned integer grid with position labels, zeros as dots.
    pub fn render_grid(&self, positions: &[TokenPosition]) -> String {
        let c = self.context_length;
        let labels: Vec<String> = positions
            .iter()
            .map(|p| match (p.kind, p.source_index) {
                (TokenKind::Image, _) => "l".to_string(),
                (TokenKind::Tangible, Some(i)) => format!("v{i}"),
                (TokenKind::Intangible, Some(i)) => format!("u{i}"),
                _ => "-".to_string(),
            })
            .collect();
        let mut out = String::new();
        out.push_str("      ");
        for label in labels.iter().take(c) {
            out.push_str(&format!("{label:>4}"));
        }
        out.push('\n');
        for p in 0..c {
            out.push_str(&format!("{:>5} ", labels[p]));
            for q in 0..c {
                let r = self.rank(p, q);
                if r == 0 {
                    out.push_str("   .");
                } else {
                    out.push_str(&format!("{r:>4}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// The learnable attention weight encoding a (length 8, a[0] pinned to 0).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightEncoding {
    pub a: Vec<f64>,
}

impl Default for WeightEncoding {
    fn default() -> Self {
        Self::new()
    }
}

impl WeightEncoding {
    pub fn new() -> Self {
        WeightEncoding { a: vec![0.0; N_RANKS] }
    }

    pub fn from_a(a: Vec<f64>) -> Result<Self> {
        if a.len() != N_RANKS {
            return Err(Error::Config { field: "weight_encoding.a".to_string(), message: format!("length {} != {N_RANKS}", a.len()) });
        }
        if a[0] != 0.0 {
            return Err(Error::Config { field: "weight_encoding.a".to_string(), message: format!("a[0] must stay 0, got {}", a[0]) });
        }
        Ok(WeightEncoding { a })
    }

    /// w = cumsum(exp(a)), strictly increasing for any a.
    pub fn weights(&self) -> [f64; N_RANKS] {
        let mut w = [0.0; N_RANKS];
        let mut acc = 0.0;
        for (i, &ai) in self.a.iter().enumerate() {
            acc += ai.exp();
            w[i] = acc;
        }
        w
    }
}

fn check_positions(ts: &TokenSet, positions: &[TokenPosition], context_length: usize) -> Result<()> {
    if positions.len() != context_length {
        return Err(Error::Contract {
            op: "build_ranks",
            message: format!("{} positions for context length {context_length}", positions.len()),
        });
    }
    let (expected, _) = layout(ts.tangible.len(), ts.intangible.len(), context_length);
    if positions != expected {
        return Err(Error::Contract { op: "build_ranks", message: "positions do not match the canonical layout".to_string() });
    }
    Ok(())
}

/// Builds the rank grid for one token set by writing each structural case
/// into its cell, keeping the maximum on collisions.
pub fn build_ranks(ts: &TokenSet, positions: &[TokenPosition], context_length: usize) -> Result<RankMatrix> {
    BUILD_RANKS_CALLS.fetch_add(1, Ordering::Relaxed);
    ts.validate()?;
    if ts.valid_len() > context_length {
        return Err(Error::Capacity { sample_id: ts.sample_id.clone(), needed: ts.valid_len(), context_length });
    }
    check_positions(ts, positions, context_length)?;

    let c = context_length;
    let nv = ts.tangible.len();
    let mut ranks = vec![0u8; c * c];
    let mut raise = |p: usize, q: usize, r: u8| {
        let cell = &mut ranks[p * c + q];
        if r > *cell {
            *cell = r;
        }
    };

    for t in &ts.triplets {
        let pv_s = 1 + t.subject;
        let pv_o = 1 + t.object;
        let pu = 1 + nv + t.predicate;
        raise(pv_s, pv_o, 7);
        raise(pv_s, pu, 6);
        raise(pv_o, pu, 6);
        raise(pu, pv_s, 5);
        raise(pu, pv_o, 5);
    }
    for (a, list) in ts.neighbors.iter().enumerate() {
        for (k0, &b) in list.iter().enumerate() {
            // k0 is zero-based; the k-th neighbor gets rank 5-k.
            raise(1 + a, 1 + b, (4 - k0) as u8);
        }
    }

    let (_, valid) = layout(nv, ts.intangible.len(), c);
    Ok(RankMatrix { context_length: c, ranks, valid })
}

/// Independent per-cell oracle: for every (p, q) it scans all of E and N for
/// applicable cases and takes the maximum. Quadratic and test-only by
/// design; agreement with [`build_ranks`] is the correctness argument.
pub fn oracle_ranks(ts: &TokenSet, context_length: usize) -> Result<RankMatrix> {
    ts.validate()?;
    if ts.valid_len() > context_length {
        return Err(Error::Capacity { sample_id: ts.sample_id.clone(), needed: ts.valid_len(), context_length });
    }
    let c = context_length;
    let nv = ts.tangible.len();
    let (positions, valid) = layout(nv, ts.intangible.len(), c);

    let mut ranks = vec![0u8; c * c];
    for p in 0..c {
        for q in 0..c {
            if p == q || !valid[p] || !valid[q] {
                continue;
            }
            let mut best = 0u8;
            for t in &ts.triplets {
                let pv_s = 1 + t.subject;
                let pv_o = 1 + t.object;
                let pu = 1 + nv + t.predicate;
                if p == pv_s && q == pv_o {
                    best = best.max(7);
                }
                if (p == pv_s || p == pv_o) && q == pu {
                    best = best.max(6);
                }
                if p == pu && (q == pv_s || q == pv_o) {
                    best = best.max(5);
                }
            }
            if positions[p].kind == TokenKind::Tangible && positions[q].kind == TokenKind::Tangible {
                let a = p - 1;
                let b = q - 1;
                for (k0, &nb) in ts.neighbors[a].iter().enumerate() {
                    if nb == b {
                        best = best.max((4 - k0) as u8);
                    }
                }
            }
            ranks[p * c + q] = best;
        }
    }
    Ok(RankMatrix { context_length: c, ranks, valid })
}

/// Dense bias matrix for inspection: rank r > 0 becomes w[r], rank 0 stays 0.
pub fn weights_from_ranks(rm: &RankMatrix, enc: &WeightEncoding) -> Vec<f64> {
    let w = enc.weights();
    rm.ranks.iter().map(|&r| if r > 0 { w[r as usize] } else { 0.0 }).collect()
}

/// Differentiable path from the encoding leaf to an [n, n] bias block:
/// exp, prefix-sum, then substitution into the rank grid's top-left block.
pub fn bias_on_tape(tape: &mut Tape, a_leaf: TensorId, rm: &RankMatrix, n: usize) -> Result<TensorId> {
    let e = tape.exp(a_leaf);
    let w = tape.cumsum_lastdim(e);
    tape.rank_bias(w, &rm.prefix_block(n), n)
}
