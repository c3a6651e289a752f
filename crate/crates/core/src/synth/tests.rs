use super::*;
use proptest::prelude::*;

fn small_spec() -> SceneSpec {
    SceneSpec { n_objects: 10, n_predicates: 5, d: 16, sigma: 0.05, twin_rate: 0.3 }
}

#[test]
fn generation_is_deterministic() {
    let spec = small_spec();
    let (a_sets, a_truths) = generate(20, &spec, 7).unwrap();
    let (b_sets, b_truths) = generate(20, &spec, 7).unwrap();
    assert_eq!(a_sets, b_sets);
    assert_eq!(a_truths, b_truths);
    let (c_sets, _) = generate(20, &spec, 8).unwrap();
    assert_ne!(a_sets, c_sets);
}

#[test]
fn a_prefix_regenerates_identically() {
    let spec = small_spec();
    let (long, _) = generate(30, &spec, 3).unwrap();
    let (short, _) = generate(12, &spec, 3).unwrap();
    assert_eq!(&long[..12], &short[..]);
}

#[test]
fn zero_noise_pins_vectors_to_the_prototypes() {
    let mut spec = small_spec();
    spec.sigma = 0.0;
    let bases = base_vectors(&spec, 5).unwrap();
    let (sets, truths) = generate(10, &spec, 5).unwrap();
    for (ts, truth) in sets.iter().zip(&truths) {
        for (row, &class) in ts.tangible.iter().zip(&truth.object_classes) {
            assert_eq!(row, &bases.objects[class]);
        }
        for (row, &class) in ts.intangible.iter().zip(&truth.predicate_classes) {
            assert_eq!(row, &bases.predicates[class]);
        }
        let n = ts.tangible.len() as f64;
        for (j, &lj) in ts.l.iter().enumerate() {
            let mean = ts.tangible.iter().map(|r| r[j]).sum::<f64>() / n;
            assert!((lj - mean).abs() < 1e-15);
        }
    }
}

#[test]
fn generated_corpora_validate_and_use_every_predicate() {
    let (sets, _) = generate(40, &small_spec(), 11).unwrap();
    assert_eq!(sets.len(), 40);
    for ts in &sets {
        ts.validate().unwrap();
        // Every intangible token is referenced, so validation cannot even
        // warn about orphaned predicates.
        for c in 0..ts.intangible.len() {
            assert!(ts.triplets.iter().any(|t| t.predicate == c), "{} orphans {c}", ts.sample_id);
        }
        let n_obj = ts.tangible.len();
        assert!((MIN_SCENE_OBJECTS..=MAX_SCENE_OBJECTS).contains(&n_obj));
        assert!((1..=MAX_SCENE_TRIPLETS).contains(&ts.triplets.len()));
        assert_eq!(ts.captions.len(), 1);
    }
}

#[test]
fn object_classes_within_a_scene_are_distinct() {
    let (_, truths) = generate(40, &small_spec(), 13).unwrap();
    for truth in &truths {
        let mut classes = truth.object_classes.clone();
        classes.sort_unstable();
        classes.dedup();
        assert_eq!(classes.len(), truth.object_classes.len(), "{}", truth.sample_id);
    }
}

#[test]
fn positions_are_distinct_and_in_the_unit_square() {
    let (_, truths) = generate(40, &small_spec(), 17).unwrap();
    for truth in &truths {
        for (i, p) in truth.positions.iter().enumerate() {
            assert!((0.0..1.0).contains(&p[0]) && (0.0..1.0).contains(&p[1]));
            for q in &truth.positions[i + 1..] {
                assert_ne!(p, q);
            }
        }
    }
}

#[test]
fn neighbors_on_a_line_follow_distance_order() {
    let positions = [[0.0, 0.5], [0.1, 0.5], [0.3, 0.5], [0.7, 0.5]];
    let n = neighbors_from_positions(&positions);
    assert_eq!(n[0], vec![1, 2, 3]);
    assert_eq!(n[1], vec![0, 2, 3]);
    assert_eq!(n[2], vec![1, 0, 3]);
    assert_eq!(n[3], vec![2, 1, 0]);
}

#[test]
fn neighbor_lists_cap_at_four() {
    let positions: Vec<[f64; 2]> = (0..7).map(|i| [f64::from(i) * 0.1, 0.0]).collect();
    let n = neighbors_from_positions(&positions);
    assert_eq!(n[0], vec![1, 2, 3, 4]);
    assert_eq!(n[6], vec![5, 4, 3, 2]);
}

#[test]
fn exact_distance_ties_break_by_index() {
    // Offsets of exactly 0.25 so all four squared distances are bit-equal.
    let positions = [[0.5, 0.5], [0.5, 0.75], [0.5, 0.25], [0.75, 0.5], [0.25, 0.5]];
    let n = neighbors_from_positions(&positions);
    assert_eq!(n[0], vec![1, 2, 3, 4]);
}

#[test]
fn caption_of_a_single_triplet_matches_the_grammar() {
    let g = CaptionGrammar { n_objects: 10, n_predicates: 5 };
    // "the <obj 3> <rel 2> the <obj 7>"
    let ids = g.caption(&[(3, 7, 2)]);
    assert_eq!(ids, vec![g.the(), 3, g.predicate_word(2), g.the(), 7]);
    assert_eq!(
        ids.iter().map(|&w| g.word_name(w)).collect::<Vec<_>>(),
        vec!["the", "obj3", "rel2", "the", "obj7"]
    );
}

#[test]
fn multi_clause_captions_join_with_and() {
    let g = CaptionGrammar { n_objects: 4, n_predicates: 2 };
    let ids = g.caption(&[(0, 1, 0), (2, 3, 1)]);
    let and_count = ids.iter().filter(|&&w| w == g.and()).count();
    assert_eq!(and_count, 1);
    assert_eq!(ids.len(), 11);
    assert_eq!(g.decode(&ids).unwrap(), vec![(0, 1, 0), (2, 3, 1)]);
}

#[test]
fn off_grammar_captions_fail_to_decode() {
    let g = CaptionGrammar { n_objects: 4, n_predicates: 2 };
    assert!(g.decode(&[]).is_err());
    assert!(g.decode(&[g.the(), 0, g.predicate_word(0), g.the()]).is_err());
    // Predicate word where an object word belongs.
    assert!(g.decode(&[g.the(), g.predicate_word(0), g.predicate_word(0), g.the(), 1]).is_err());
    // Clause joined by something other than "and".
    let mut ids = g.caption(&[(0, 1, 0), (2, 3, 1)]);
    let and_pos = ids.iter().position(|&w| w == g.and()).unwrap();
    ids[and_pos] = g.the();
    assert!(g.decode(&ids).is_err());
}

#[test]
fn captions_round_trip_through_the_decoder() {
    let spec = small_spec();
    let g = CaptionGrammar::new(&spec);
    let (sets, truths) = generate(60, &spec, 23).unwrap();
    for (ts, truth) in sets.iter().zip(&truths) {
        let decoded = g.decode(&ts.captions[0]).unwrap();
        let expected: Vec<(usize, usize, usize)> = truth
            .triplets
            .iter()
            .map(|&[s, o, p]| {
                (truth.object_classes[s], truth.object_classes[o], truth.predicate_classes[p])
            })
            .collect();
        assert_eq!(decoded, expected, "{}", ts.sample_id);
    }
}

#[test]
fn base_vectors_are_unit_norm_and_separated() {
    let spec = small_spec();
    let b = base_vectors(&spec, 31).unwrap();
    let all: Vec<&Vec<f64>> = b.objects.iter().chain(b.predicates.iter()).collect();
    assert_eq!(all.len(), spec.n_objects + spec.n_predicates);
    for (i, u) in all.iter().enumerate() {
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        for v in &all[i + 1..] {
            let cos: f64 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            assert!(cos.abs() < BASE_COS_LIMIT, "prototypes {i} too close: {cos}");
        }
    }
}

#[test]
fn impossible_prototype_packing_is_a_config_error() {
    let spec = SceneSpec { n_objects: 40, n_predicates: 40, d: 2, sigma: 0.0, twin_rate: 0.0 };
    match base_vectors(&spec, 1) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "d"),
        other => panic!("expected packing failure, got {other:?}"),
    }
}

#[test]
fn twin_pairs_share_everything_but_one_direction() {
    let mut spec = small_spec();
    spec.twin_rate = 1.0;
    let (sets, truths) = generate(20, &spec, 41).unwrap();
    for p in 0..10 {
        let (a, b) = (&sets[2 * p], &sets[2 * p + 1]);
        let tb = &truths[2 * p + 1];
        assert_eq!(tb.twin_of.as_deref(), Some(a.sample_id.as_str()));
        assert_eq!(a.tangible, b.tangible);
        assert_eq!(a.intangible, b.intangible);
        assert_eq!(a.l, b.l);
        assert_eq!(a.neighbors, b.neighbors);
        assert_ne!(a.triplets, b.triplets);
        let flipped: Vec<usize> = a
            .triplets
            .iter()
            .zip(&b.triplets)
            .enumerate()
            .filter(|(_, (x, y))| x != y)
            .map(|(k, _)| k)
            .collect();
        assert_eq!(flipped.len(), 1, "exactly one triplet should flip");
        let k = flipped[0];
        assert_eq!(a.triplets[k].subject, b.triplets[k].object);
        assert_eq!(a.triplets[k].object, b.triplets[k].subject);
        assert_eq!(a.triplets[k].predicate, b.triplets[k].predicate);
        assert_ne!(a.captions[0], b.captions[0]);
    }
}

#[test]
fn zero_twin_rate_marks_nothing() {
    let mut spec = small_spec();
    spec.twin_rate = 0.0;
    let (_, truths) = generate(20, &spec, 43).unwrap();
    assert!(truths.iter().all(|t| t.twin_of.is_none()));
}

#[test]
fn swapped_pairs_differ_in_exactly_one_clause() {
    let g = CaptionGrammar { n_objects: 10, n_predicates: 5 };
    let object_classes = vec![4, 9, 2];
    let predicate_classes = vec![1, 3];
    let triplets = vec![
        Triplet { subject: 0, object: 1, predicate: 0 },
        Triplet { subject: 2, object: 0, predicate: 1 },
    ];
    for pick in 0..4u64 {
        let pair = make_swapped_pair(&g, &object_classes, &predicate_classes, &triplets, pick).unwrap();
        assert_ne!(pair.correct, pair.swapped);
        assert_eq!(pair.correct.len(), pair.swapped.len());
        let correct = g.decode(&pair.correct).unwrap();
        let swapped = g.decode(&pair.swapped).unwrap();
        let diffs: Vec<usize> =
            (0..2).filter(|&k| correct[k] != swapped[k]).collect();
        assert_eq!(diffs, vec![pair.triplet_index]);
        let k = pair.triplet_index;
        assert_eq!(correct[k].0, swapped[k].1);
        assert_eq!(correct[k].1, swapped[k].0);
        assert_eq!(correct[k].2, swapped[k].2);
    }
}

#[test]
fn single_triplet_swap_matches_the_worked_example() {
    // "the dog sits_on the rock" -> "the rock sits_on the dog" with
    // dog = obj 0, rock = obj 1, sits_on = rel 0.
    let g = CaptionGrammar { n_objects: 2, n_predicates: 2 };
    let pair = make_swapped_pair(
        &g,
        &[0, 1],
        &[0],
        &[Triplet { subject: 0, object: 1, predicate: 0 }],
        0,
    )
    .unwrap();
    assert_eq!(pair.correct, vec![g.the(), 0, g.predicate_word(0), g.the(), 1]);
    assert_eq!(pair.swapped, vec![g.the(), 1, g.predicate_word(0), g.the(), 0]);
}

#[test]
fn no_swappable_triplet_yields_none() {
    let g = CaptionGrammar { n_objects: 2, n_predicates: 2 };
    assert!(make_swapped_pair(&g, &[0, 1], &[], &[], 0).is_none());
}

#[test]
fn every_generated_scene_carries_a_swap_pair() {
    let (sets, truths) = generate(30, &small_spec(), 47).unwrap();
    for (ts, truth) in sets.iter().zip(&truths) {
        let pair = truth.swap.as_ref().expect("generated scenes always have a reversible triplet");
        assert_eq!(pair.correct, ts.captions[0]);
        assert_ne!(pair.swapped, ts.captions[0]);
    }
}

#[test]
fn truth_sidecar_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("truth.jsonl");
    let (_, truths) = generate(15, &small_spec(), 53).unwrap();
    write_truth(&path, &truths).unwrap();
    let back = read_truth(&path).unwrap();
    assert_eq!(truths, back);
}

#[test]
fn truth_reader_rejects_foreign_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bogus.jsonl");
    std::fs::write(&path, "{\"format\":\"something-else\",\"version\":1}\n").unwrap();
    match read_truth(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn caption_word_ids_fit_the_grammar_vocabulary() {
    let spec = small_spec();
    let g = CaptionGrammar::new(&spec);
    let (sets, _) = generate(25, &spec, 59).unwrap();
    for ts in &sets {
        for &w in &ts.captions[0] {
            assert!((w as usize) < g.vocab_size());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn decode_inverts_caption_for_any_class_triples(
        n_obj in 2usize..12,
        n_pred in 1usize..6,
        picks in proptest::collection::vec((0usize..12, 0usize..12, 0usize..6), 1..5),
    ) {
        let g = CaptionGrammar { n_objects: n_obj, n_predicates: n_pred };
        let triples: Vec<(usize, usize, usize)> = picks
            .into_iter()
            .map(|(s, o, p)| (s % n_obj, o % n_obj, p % n_pred))
            .collect();
        let ids = g.caption(&triples);
        prop_assert_eq!(g.decode(&ids).unwrap(), triples);
    }

    #[test]
    fn neighbor_lists_are_mutually_consistent(seed in 0u64..500, n in 2usize..9) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let positions: Vec<[f64; 2]> =
            (0..n).map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).collect();
        let lists = neighbors_from_positions(&positions);
        for (a, list) in lists.iter().enumerate() {
            prop_assert_eq!(list.len(), (n - 1).min(MAX_NEIGHBORS));
            // Nearest-first ordering.
            for w in list.windows(2) {
                prop_assert!(
                    dist2(positions[a], positions[w[0]]) <= dist2(positions[a], positions[w[1]])
                );
            }
            // No listed neighbor is farther than an unlisted candidate.
            if let Some(&last) = list.last() {
                for b in 0..n {
                    if b != a && !list.contains(&b) {
                        prop_assert!(
                            dist2(positions[a], positions[b]) >= dist2(positions[a], positions[last])
                        );
                    }
                }
            }
        }
    }
}
