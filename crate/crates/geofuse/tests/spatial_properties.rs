//! Property suite for the spatial core: exact-kNN equivalence with a
//! brute-force oracle, integer-translation invariance, filter hygiene, and
//! block-split determinism.

use std::collections::HashSet;

use proptest::prelude::*;

use geofuse::geo::{block_split, build_index, GeoPoint, Split};

/// Brute-force oracle: all other eligible points sorted by (d², id).
fn brute_knn(
    points: &[(usize, GeoPoint)],
    origin: usize,
    k: usize,
    eligible: impl Fn(usize) -> bool,
) -> Vec<(usize, f64)> {
    let query = points.iter().find(|(id, _)| *id == origin).unwrap().1;
    let mut cands: Vec<(f64, usize)> = points
        .iter()
        .filter(|(id, _)| *id != origin && eligible(*id))
        .map(|(id, p)| (query.distance_sq(p), *id))
        .collect();
    cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cands
        .into_iter()
        .take(k)
        .map(|(d2, id)| (id, d2.sqrt()))
        .collect()
}

/// Unique integer lattice points (ids are assigned 0..n in set order).
fn point_set(max_len: usize) -> impl Strategy<Value = Vec<(usize, GeoPoint)>> {
    prop::collection::hash_set((-500i64..500, -500i64..500), 2..max_len).prop_map(|set| {
        let mut coords: Vec<(i64, i64)> = set.into_iter().collect();
        coords.sort_unstable();
        coords
            .into_iter()
            .enumerate()
            .map(|(i, (e, n))| (i, GeoPoint::new(e as f64 * 7.0, n as f64 * 7.0)))
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn knn_equals_brute_force_everywhere(points in point_set(90), k in 1usize..24) {
        let index = build_index(&points).unwrap();
        for (origin, _) in &points {
            let got = index.query_knn(*origin, k).unwrap();
            let want = brute_knn(&points, *origin, k, |_| true);
            prop_assert_eq!(&got.neighbors, &want, "origin {}", origin);
            prop_assert_eq!(got.truncated, want.len() < k);
        }
    }

    #[test]
    fn knn_is_invariant_under_integer_translation(
        points in point_set(70),
        k in 1usize..12,
        shift in (-4000i64..4000, -4000i64..4000),
    ) {
        let moved: Vec<(usize, GeoPoint)> = points
            .iter()
            .map(|(id, p)| {
                (*id, GeoPoint::new(p.east + shift.0 as f64, p.north + shift.1 as f64))
            })
            .collect();
        let a = build_index(&points).unwrap();
        let b = build_index(&moved).unwrap();
        for (origin, _) in &points {
            let na = a.query_knn(*origin, k).unwrap();
            let nb = b.query_knn(*origin, k).unwrap();
            // Integer offsets keep every squared distance bit-identical, so
            // ids, order, and distances must all agree exactly.
            prop_assert_eq!(na.neighbors, nb.neighbors);
        }
    }

    #[test]
    fn filtered_knn_respects_the_predicate(points in point_set(80), k in 1usize..16) {
        let index = build_index(&points).unwrap();
        let eligible = |id: usize| id % 2 == 0;
        for (origin, _) in &points {
            let got = index.query_knn_filtered(*origin, k, eligible).unwrap();
            for (id, _) in &got.neighbors {
                prop_assert!(eligible(*id), "id {} leaked through the filter", id);
            }
            let want = brute_knn(&points, *origin, k, eligible);
            prop_assert_eq!(got.neighbors, want);
        }
    }

    #[test]
    fn neighbor_distances_are_non_decreasing(points in point_set(90), k in 2usize..24) {
        let index = build_index(&points).unwrap();
        for (origin, _) in &points {
            let got = index.query_knn(*origin, k).unwrap();
            for w in got.neighbors.windows(2) {
                prop_assert!(w[0].1 <= w[1].1);
            }
        }
    }

    #[test]
    fn block_split_is_deterministic_and_total(
        points in point_set(90),
        block in 20f64..400.0,
        seed in 0u64..1000,
    ) {
        let a = block_split(&points, block, (0.6, 0.2, 0.2), seed).unwrap();
        let b = block_split(&points, block, (0.6, 0.2, 0.2), seed).unwrap();
        let mut seen = HashSet::new();
        for (id, p) in &points {
            let sa = a.split_of(*id);
            prop_assert!(sa.is_some(), "id {} unassigned", id);
            prop_assert_eq!(sa, b.split_of(*id));
            // Same block ⇒ same split: record the pairing for this point.
            seen.insert((a.block_of(p), sa.unwrap()));
        }
        let blocks: HashSet<_> = seen.iter().map(|(b, _)| *b).collect();
        prop_assert_eq!(blocks.len(), seen.len(), "a block fell in two splits");
    }

    #[test]
    fn every_split_class_is_populated_when_blocks_allow(
        points in point_set(90),
        seed in 0u64..1000,
    ) {
        // Small blocks on a spread lattice: at least 3 non-empty blocks is
        // near-certain, and then apportionment must hit every class.
        let split = block_split(&points, 40.0, (0.34, 0.33, 0.33), seed).unwrap();
        let blocks: HashSet<(i64, i64)> = points.iter().map(|(_, p)| split.block_of(p)).collect();
        if blocks.len() >= 3 {
            for class in Split::ALL {
                prop_assert!(
                    !split.ids_in(class).is_empty(),
                    "split {:?} empty over {} blocks",
                    class,
                    blocks.len()
                );
            }
        }
    }
}
