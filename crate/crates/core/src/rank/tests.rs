use super::*;
use crate::tensor::{grad_check, ParamSpec, Tape};
use crate::tokens::{layout, Triplet};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn set_with(nv: usize, nu: usize, triplets: Vec<Triplet>, neighbors: Vec<Vec<usize>>) -> TokenSet {
    let d = 2;
    TokenSet {
        sample_id: "rk".to_string(),
        d,
        l: vec![0.0; d],
        tangible: vec![vec![0.0; d]; nv],
        intangible: vec![vec![0.0; d]; nu],
        triplets,
        neighbors,
        captions: vec![vec![0]],
    }
}

/// Arbitrary-structure generator: neighbor lists are random directed lists,
/// not true nearest neighbors, to stress every collision path.
fn random_structured_set(seed: u64) -> TokenSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nv = rng.gen_range(0..=10);
    let nu = if nv >= 2 { rng.gen_range(0..=6) } else { 0 };
    let mut triplets = Vec::new();
    for p in 0..nu {
        if !rng.gen_bool(0.8) {
            continue;
        }
        let s = rng.gen_range(0..nv);
        let mut o = rng.gen_range(0..nv);
        while o == s {
            o = rng.gen_range(0..nv);
        }
        triplets.push(Triplet { subject: s, object: o, predicate: p });
    }
    let neighbors = (0..nv)
        .map(|a| {
            let mut others: Vec<usize> = (0..nv).filter(|&b| b != a).collect();
            others.shuffle(&mut rng);
            let k = rng.gen_range(0..=others.len().min(MAX_NEIGHBORS_FOR_TEST));
            others.truncate(k);
            others
        })
        .collect();
    set_with(nv, nu, triplets, neighbors)
}

const MAX_NEIGHBORS_FOR_TEST: usize = 4;

#[test]
fn worked_example_from_first_principles() {
    // Two mutually-nearest tangibles joined by one triplet through u0.
    let ts = set_with(
        2,
        1,
        vec![Triplet { subject: 0, object: 1, predicate: 0 }],
        vec![vec![1], vec![0]],
    );
    let (positions, _) = layout(2, 1, 5);
    let rm = build_ranks(&ts, &positions, 5).unwrap();

    let mut expected = vec![0u8; 25];
    expected[1 * 5 + 2] = 7; // subject->object beats the rank-4 neighbor case
    expected[2 * 5 + 1] = 4; // object->subject only has the 1-NN case
    expected[1 * 5 + 3] = 6;
    expected[2 * 5 + 3] = 6;
    expected[3 * 5 + 1] = 5;
    expected[3 * 5 + 2] = 5;
    assert_eq!(rm.ranks, expected);
}

#[test]
fn empty_graph_is_all_zeros() {
    let ts = set_with(3, 0, vec![], vec![vec![], vec![], vec![]]);
    let (positions, _) = layout(3, 0, 6);
    let rm = build_ranks(&ts, &positions, 6).unwrap();
    assert!(rm.ranks.iter().all(|&r| r == 0));
}

#[test]
fn node_edge_ranks_for_a_single_relation() {
    // person (v0) beside (u0) tree (v1): both node-to-edge cells get 6, both
    // edge-to-node cells get 5, and the directed node-to-node cell gets 7.
    let ts = set_with(2, 1, vec![Triplet { subject: 0, object: 1, predicate: 0 }], vec![vec![], vec![]]);
    let (positions, _) = layout(2, 1, 4);
    let rm = build_ranks(&ts, &positions, 4).unwrap();
    assert_eq!(rm.rank(1, 3), 6); // person -> beside
    assert_eq!(rm.rank(2, 3), 6); // tree -> beside
    assert_eq!(rm.rank(3, 1), 5); // beside -> person
    assert_eq!(rm.rank(3, 2), 5); // beside -> tree
    assert_eq!(rm.rank(1, 2), 7); // person -> tree
    assert_eq!(rm.rank(2, 1), 0); // reverse node direction stays unranked
}

#[test]
fn construction_agrees_with_per_cell_oracle_on_1000_random_sets() {
    for seed in 0..1000 {
        let ts = random_structured_set(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let context = ts.valid_len() + rng.gen_range(0..4);
        let (positions, _) = layout(ts.tangible.len(), ts.intangible.len(), context);
        let built = build_ranks(&ts, &positions, context).unwrap();
        let oracle = oracle_ranks(&ts, context).unwrap();
        assert_eq!(built, oracle, "seed {seed}");
    }
}

#[test]
fn rank_matrix_invariants_hold_on_random_sets() {
    for seed in 0..200 {
        let ts = random_structured_set(seed);
        let context = ts.valid_len() + 2;
        let (positions, valid) = layout(ts.tangible.len(), ts.intangible.len(), context);
        let rm = build_ranks(&ts, &positions, context).unwrap();
        for p in 0..context {
            for q in 0..context {
                let r = rm.rank(p, q);
                assert!(r <= 7);
                if p == q || !valid[p] || !valid[q] {
                    assert_eq!(r, 0, "seed {seed} cell ({p},{q})");
                }
            }
        }
    }
}

#[test]
fn relabeling_tangibles_permutes_the_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(5150);
    for seed in 0..100 {
        let ts = random_structured_set(seed);
        let nv = ts.tangible.len();
        if nv < 2 {
            continue;
        }
        let mut perm: Vec<usize> = (0..nv).collect();
        perm.shuffle(&mut rng);

        let mut tangible = vec![Vec::new(); nv];
        let mut neighbors = vec![Vec::new(); nv];
        for j in 0..nv {
            tangible[perm[j]] = ts.tangible[j].clone();
            neighbors[perm[j]] = ts.neighbors[j].iter().map(|&b| perm[b]).collect();
        }
        let relabeled = TokenSet {
            tangible,
            neighbors,
            triplets: ts
                .triplets
                .iter()
                .map(|t| Triplet { subject: perm[t.subject], object: perm[t.object], predicate: t.predicate })
                .collect(),
            ..ts.clone()
        };

        let context = ts.valid_len() + 1;
        let (positions, _) = layout(nv, ts.intangible.len(), context);
        let base = build_ranks(&ts, &positions, context).unwrap();
        let moved = build_ranks(&relabeled, &positions, context).unwrap();

        // Induced position map: image and intangibles fixed, v_j -> v_perm[j].
        let sigma = |p: usize| -> usize {
            if p >= 1 && p < 1 + nv {
                1 + perm[p - 1]
            } else {
                p
            }
        };
        for p in 0..context {
            for q in 0..context {
                assert_eq!(moved.rank(sigma(p), sigma(q)), base.rank(p, q), "seed {seed} cell ({p},{q})");
            }
        }
    }
}

#[test]
fn default_encoding_yields_integer_weights() {
    let enc = WeightEncoding::new();
    assert_eq!(enc.weights(), [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
}

#[test]
fn log2_encoding_yields_odd_weights() {
    let ln2 = 2.0f64.ln();
    let enc = WeightEncoding::from_a(vec![0.0, ln2, ln2, ln2, ln2, ln2, ln2, ln2]).unwrap();
    let w = enc.weights();
    let expected = [1.0, 3.0, 5.0, 7.0, 9.0, 11.0, 13.0, 15.0];
    for (got, want) in w.iter().zip(expected) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn weight_table_is_strictly_increasing_for_any_encoding() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100 {
        let mut a: Vec<f64> = (0..N_RANKS).map(|_| rng.gen_range(-5.0..5.0)).collect();
        a[0] = 0.0;
        let enc = WeightEncoding::from_a(a.clone()).unwrap();
        let w = enc.weights();
        for r in 0..N_RANKS - 1 {
            assert!(w[r + 1] > w[r]);
            // Running-sum construction makes the recurrence bit-exact.
            assert_eq!(w[r + 1], w[r] + a[r + 1].exp());
        }
    }
}

#[test]
fn encoding_rejects_nonzero_first_entry() {
    assert!(WeightEncoding::from_a(vec![0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
    assert!(WeightEncoding::from_a(vec![0.0; 7]).is_err());
}

#[test]
fn bias_is_zero_exactly_where_rank_is_zero() {
    for seed in 0..50 {
        let ts = random_structured_set(seed);
        let context = ts.valid_len() + 2;
        let (positions, _) = layout(ts.tangible.len(), ts.intangible.len(), context);
        let rm = build_ranks(&ts, &positions, context).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a: Vec<f64> = (0..N_RANKS).map(|_| rng.gen_range(-2.0..2.0)).collect();
        a[0] = 0.0;
        let bias = weights_from_ranks(&rm, &WeightEncoding::from_a(a).unwrap());
        for (r, b) in rm.ranks.iter().zip(&bias) {
            if *r == 0 {
                assert_eq!(*b, 0.0);
            } else {
                assert!(*b > 0.0);
            }
        }
    }
}

#[test]
fn bias_gradient_counts_cells_at_or_above_the_rank() {
    let ts = random_structured_set(3);
    let context = ts.valid_len();
    let (positions, _) = layout(ts.tangible.len(), ts.intangible.len(), context);
    let rm = build_ranks(&ts, &positions, context).unwrap();
    let count_ge_3 = rm.ranks.iter().filter(|&&r| r >= 3).count();
    assert!(count_ge_3 > 0, "fixture must exercise ranks >= 3");

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut a: Vec<f64> = (0..N_RANKS).map(|_| rng.gen_range(-1.0..1.0)).collect();
    a[0] = 0.0;

    // d sum(bias) / d a[3] = |{cells with rank >= 3}| * exp(a[3]): every
    // w[r] with r >= 3 contains the exp(a[3]) term exactly once.
    let mut tape = Tape::new();
    let a_leaf = tape.leaf(a.clone(), vec![1, N_RANKS], true).unwrap();
    let bias = bias_on_tape(&mut tape, a_leaf, &rm, context).unwrap();
    let total = tape.sum(bias);
    tape.backward(total).unwrap();
    let analytic = tape.grad(a_leaf).unwrap()[3];
    let expected = count_ge_3 as f64 * a[3].exp();
    assert!((analytic - expected).abs() / expected.abs() < 1e-12, "{analytic} vs {expected}");

    // And the whole path checks out against finite differences.
    let spec = vec![ParamSpec::new("a", vec![1, N_RANKS], a)];
    let rm2 = rm.clone();
    let report = grad_check(&spec, 1e-6, 1e-7, None, move |t, ids| {
        let b = bias_on_tape(t, ids[0], &rm2, context)?;
        Ok(t.sum(b))
    })
    .unwrap();
    assert!(report.passed(), "rel err {}", report.max_rel_err);
}

#[test]
fn prefix_block_preserves_all_nonzero_cells() {
    let ts = random_structured_set(9);
    let used = ts.valid_len();
    let context = used + 3;
    let (positions, _) = layout(ts.tangible.len(), ts.intangible.len(), context);
    let rm = build_ranks(&ts, &positions, context).unwrap();
    let block = rm.prefix_block(used);
    for p in 0..used {
        for q in 0..used {
            assert_eq!(block[p * used + q], rm.rank(p, q));
        }
    }
    let full_nonzero = rm.ranks.iter().filter(|&&r| r > 0).count();
    let block_nonzero = block.iter().filter(|&&r| r > 0).count();
    assert_eq!(full_nonzero, block_nonzero);
}

#[test]
fn grid_rendering_labels_positions() {
    let ts = set_with(2, 1, vec![Triplet { subject: 0, object: 1, predicate: 0 }], vec![vec![1], vec![0]]);
    let (positions, _) = layout(2, 1, 5);
    let rm = build_ranks(&ts, &positions, 5).unwrap();
    let grid = rm.render_grid(&positions);
    assert!(grid.contains("v0"));
    assert!(grid.contains("u0"));
    assert!(grid.contains('7'));
    assert!(grid.contains('.'));
}
