//! Runnable correctness suite.
//!
//! The same properties the test suite enforces, packaged so a deployed
//! binary can re-check itself: rank grids against an independent oracle,
//! the weight-table monotonicity law, reverse-mode gradients against
//! central differences on a full forward+loss, and the structural
//! invariances of the image encoder. Each check returns a [`CheckOutcome`]
//! instead of panicking, so callers can print a report and pick an exit
//! code.

use crate::encoder::{
    encode_caption_on_tape, encode_image, encode_image_with_ranks, EncoderConfig, ModelConfig,
    ModelParams, Staged, TextConfig,
};
use crate::rank::{build_ranks, oracle_ranks, WeightEncoding, N_RANKS};
use crate::synth::{generate, CaptionGrammar, SceneSpec};
use crate::tensor::{grad_check, ParamSpec};
use crate::tokens::{layout, TokenSet, Triplet, MAX_NEIGHBORS};
use crate::trainer::contrastive_loss;
use crate::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    /// One line of evidence: worst error, counts, timings.
    pub detail: String,
    pub seconds: f64,
}

impl CheckOutcome {
    fn finish(name: &'static str, started: Instant, passed: bool, detail: String) -> Self {
        CheckOutcome { name, passed, detail, seconds: started.elapsed().as_secs_f64() }
    }
}

/// Runs every check with its default workload. Deterministic for one seed.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    vec![
        rank_oracle_agreement(1000, seed),
        weight_table_law(100, seed),
        gradient_fidelity(seed),
        structural_invariances(seed),
    ]
}

pub fn all_passed(outcomes: &[CheckOutcome]) -> bool {
    outcomes.iter().all(|o| o.passed)
}

/// A structurally valid random token set: up to 10 tangibles, up to 6
/// intangibles, random triplets over distinct predicates, random neighbor
/// lists. Content vectors are tiny since only structure matters here.
fn random_token_set(rng: &mut ChaCha8Rng, case: usize) -> TokenSet {
    let d = 3;
    let nv = rng.gen_range(1..=10);
    let nu = rng.gen_range(0..=6usize);
    let mut triplets = Vec::new();
    if nv >= 2 {
        let mut predicates: Vec<usize> = (0..nu).collect();
        predicates.shuffle(rng);
        let n_trip = rng.gen_range(0..=nu);
        for &p in predicates.iter().take(n_trip) {
            let s = rng.gen_range(0..nv);
            let mut o = rng.gen_range(0..nv - 1);
            if o >= s {
                o += 1;
            }
            triplets.push(Triplet { subject: s, object: o, predicate: p });
        }
    }
    let neighbors = (0..nv)
        .map(|a| {
            let mut others: Vec<usize> = (0..nv).filter(|&b| b != a).collect();
            others.shuffle(rng);
            let k = rng.gen_range(0..=others.len().min(MAX_NEIGHBORS));
            others.truncate(k);
            others
        })
        .collect();
    TokenSet {
        sample_id: format!("verify-{case}"),
        d,
        l: vec![0.0; d],
        tangible: vec![vec![0.0; d]; nv],
        intangible: vec![vec![0.0; d]; nu],
        triplets,
        neighbors,
        captions: vec![vec![0]],
    }
}

/// Rank grids from the incremental builder and the quadratic per-cell
/// oracle must agree exactly on every random scene.
pub fn rank_oracle_agreement(cases: usize, seed: u64) -> CheckOutcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let ts = random_token_set(&mut rng, case);
        let context = ts.valid_len() + rng.gen_range(0..4);
        let (positions, _) = layout(ts.tangible.len(), ts.intangible.len(), context);
        let built = match build_ranks(&ts, &positions, context) {
            Ok(rm) => rm,
            Err(e) => {
                return CheckOutcome::finish(
                    "rank-oracle-agreement",
                    started,
                    false,
                    format!("builder failed on case {case}: {e}"),
                )
            }
        };
        let oracle = match oracle_ranks(&ts, context) {
            Ok(rm) => rm,
            Err(e) => {
                return CheckOutcome::finish(
                    "rank-oracle-agreement",
                    started,
                    false,
                    format!("oracle failed on case {case}: {e}"),
                )
            }
        };
        if built != oracle {
            return CheckOutcome::finish(
                "rank-oracle-agreement",
                started,
                false,
                format!("grids differ on case {case} ({} tokens)", ts.valid_len()),
            );
        }
    }
    CheckOutcome::finish(
        "rank-oracle-agreement",
        started,
        true,
        format!("{cases} random scenes, builder == oracle"),
    )
}

/// w = cumsum(exp(a)) must be strictly increasing for any a, and the zero
/// vector must produce exactly [1, 2, .., 8].
pub fn weight_table_law(cases: usize, seed: u64) -> CheckOutcome {
    let started = Instant::now();
    let name = "weight-table-law";
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for case in 0..cases {
        let mut a: Vec<f64> = (0..N_RANKS).map(|_| rng.gen_range(-6.0..6.0)).collect();
        a[0] = 0.0;
        let w = WeightEncoding::from_a(a).expect("valid encoding").weights();
        for r in 1..N_RANKS {
            if w[r] <= w[r - 1] {
                return CheckOutcome::finish(
                    name,
                    started,
                    false,
                    format!("case {case}: w[{r}] = {} <= w[{}] = {}", w[r], r - 1, w[r - 1]),
                );
            }
        }
    }
    let w0 = WeightEncoding::new().weights();
    for (i, &w) in w0.iter().enumerate() {
        if w != (i + 1) as f64 {
            return CheckOutcome::finish(
                name,
                started,
                false,
                format!("zero encoding: w[{i}] = {w}, want {}", i + 1),
            );
        }
    }
    CheckOutcome::finish(name, started, true, format!("{cases} random tables strictly increasing; zero table is [1..8]"))
}

/// A scene spec and model sized so a finite-difference sweep over a full
/// forward+loss finishes in seconds.
fn check_scale() -> (SceneSpec, ModelConfig) {
    let spec = SceneSpec { n_objects: 6, n_predicates: 3, d: 6, sigma: 0.1, twin_rate: 0.0 };
    let grammar = CaptionGrammar::new(&spec);
    let cfg = ModelConfig {
        d: spec.d,
        encoder: EncoderConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            context_length: 14,
            d_l: spec.d,
            embed_dim: 8,
        },
        text: TextConfig {
            vocab_size: grammar.vocab_size(),
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            context_length: 26,
        },
    };
    (spec, cfg)
}

/// Reverse-mode gradients of the full contrastive loss against central
/// differences, a handful of coordinates from every parameter block. The
/// rank encoding and the three type embeddings are covered like everything
/// else because they are ordinary blocks of the parameter set.
pub fn gradient_fidelity(seed: u64) -> CheckOutcome {
    let started = Instant::now();
    let name = "gradient-fidelity";
    match gradient_fidelity_inner(seed) {
        Ok(report) => {
            let passed = report.max_rel_err < 1e-4;
            CheckOutcome::finish(
                name,
                started,
                passed,
                format!(
                    "max rel err {:.3e} at {}[{}] over {} coordinates ({} blocks, {} refined)",
                    report.max_rel_err,
                    report.worst_param,
                    report.worst_coord,
                    report.coords_checked,
                    report.per_param.len(),
                    report.refined_coords
                ),
            )
        }
        Err(e) => CheckOutcome::finish(name, started, false, format!("harness error: {e}")),
    }
}

fn gradient_fidelity_inner(seed: u64) -> Result<crate::tensor::GradCheckReport> {
    let (spec, cfg) = check_scale();
    let (sets, _) = generate(3, &spec, seed.wrapping_add(2))?;
    let params = ModelParams::init(&cfg, seed.wrapping_add(3))?;

    let specs: Vec<ParamSpec> = params
        .iter()
        .map(|(path, p)| ParamSpec::new(path.clone(), p.shape.clone(), p.data.clone()))
        .collect();
    let names: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();

    // Rank grids are pure functions of scene structure; build once.
    let prepared: Vec<_> = sets
        .iter()
        .map(|ts| {
            let (positions, _) = layout(ts.tangible.len(), ts.intangible.len(), cfg.encoder.context_length);
            build_ranks(ts, &positions, cfg.encoder.context_length)
        })
        .collect::<Result<_>>()?;

    grad_check(&specs, 1e-5, 1e-4, Some(4), |tape, ids| {
        let staged = Staged::from_pairs(names.iter().cloned().zip(ids.iter().copied()));
        let mut s_rows = Vec::with_capacity(sets.len());
        let mut t_rows = Vec::with_capacity(sets.len());
        for (ts, rm) in sets.iter().zip(&prepared) {
            s_rows.push(encode_image_with_ranks(tape, &staged, &cfg, ts, Some(rm))?);
            t_rows.push(encode_caption_on_tape(tape, &staged, &cfg, &ts.captions[0])?);
        }
        let s = tape.concat_rows(&s_rows)?;
        let t = tape.concat_rows(&t_rows)?;
        contrastive_loss(tape, s, t, staged.id("temp.tau"))
    })
}

/// The three structural invariances of the image encoder: relabeling
/// token order must not move the embedding, context slack must be
/// invisible bit for bit, and an empty rank grid must coincide with the
/// bias-free path bit for bit.
pub fn structural_invariances(seed: u64) -> CheckOutcome {
    let started = Instant::now();
    let name = "structural-invariances";
    match structural_invariances_inner(seed) {
        Ok((perm_err, slack_exact, ablation_exact)) => {
            let passed = perm_err <= 1e-9 && slack_exact && ablation_exact;
            CheckOutcome::finish(
                name,
                started,
                passed,
                format!(
                    "permutation err {perm_err:.3e} (<= 1e-9), pad slack bit-exact: {slack_exact}, empty-grid == bias-free: {ablation_exact}"
                ),
            )
        }
        Err(e) => CheckOutcome::finish(name, started, false, format!("harness error: {e}")),
    }
}

fn structural_invariances_inner(seed: u64) -> Result<(f64, bool, bool)> {
    let (spec, cfg) = check_scale();
    let (sets, _) = generate(6, &spec, seed.wrapping_add(4))?;
    let params = ModelParams::init(&cfg, seed.wrapping_add(5))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(6));

    let mut perm_err: f64 = 0.0;
    let mut slack_exact = true;
    let mut ablation_exact = true;
    for ts in &sets {
        let base = encode_image(&params, &cfg, ts, true)?;

        // Jointly permute tangibles and intangibles, relabeling triplets
        // and neighbor lists to match.
        let nv = ts.tangible.len();
        let nu = ts.intangible.len();
        let mut vperm: Vec<usize> = (0..nv).collect();
        vperm.shuffle(&mut rng);
        let mut uperm: Vec<usize> = (0..nu).collect();
        uperm.shuffle(&mut rng);
        let mut tangible = vec![Vec::new(); nv];
        let mut neighbors = vec![Vec::new(); nv];
        for j in 0..nv {
            tangible[vperm[j]] = ts.tangible[j].clone();
            neighbors[vperm[j]] = ts.neighbors[j].iter().map(|&b| vperm[b]).collect();
        }
        let mut intangible = vec![Vec::new(); nu];
        for c in 0..nu {
            intangible[uperm[c]] = ts.intangible[c].clone();
        }
        let permuted = TokenSet {
            tangible,
            intangible,
            neighbors,
            triplets: ts
                .triplets
                .iter()
                .map(|t| Triplet {
                    subject: vperm[t.subject],
                    object: vperm[t.object],
                    predicate: uperm[t.predicate],
                })
                .collect(),
            ..ts.clone()
        };
        let s_perm = encode_image(&params, &cfg, &permuted, true)?;
        for (a, b) in base.iter().zip(&s_perm) {
            perm_err = perm_err.max((a - b).abs());
        }

        // Wider context means more PAD rows and nothing else.
        let mut wide = cfg.clone();
        wide.encoder.context_length += 9;
        slack_exact &= encode_image(&params, &wide, ts, true)? == base;

        // With structure stripped the rank grid is empty, so the additive
        // path must equal plain attention exactly.
        let mut bare = ts.clone();
        bare.triplets.clear();
        bare.intangible.clear();
        bare.neighbors = vec![Vec::new(); nv];
        let on = encode_image(&params, &cfg, &bare, true)?;
        let off = encode_image(&params, &cfg, &bare, false)?;
        ablation_exact &= on == off;
    }
    Ok((perm_err, slack_exact, ablation_exact))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn the_full_suite_passes() {
        let outcomes = run_all(17);
        for o in &outcomes {
            assert!(o.passed, "{}: {}", o.name, o.detail);
        }
        assert_eq!(outcomes.len(), 4);
        assert!(all_passed(&outcomes));
    }

    #[test]
    fn random_structures_are_valid_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for case in 0..200 {
            random_token_set(&mut rng, case).validate().unwrap();
        }
    }
}
