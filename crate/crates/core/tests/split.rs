mod support;

use std::collections::{BTreeMap, BTreeSet};

use crisp_core::geo::DEFAULT_CELL_DEG;
use crisp_core::split::{
    assign_blocks, occupied_blocks, round_half_up, sample_lambda_subset, SplitFractions, DEFAULT_PROXIMITY_M,
};
use crisp_core::{
    bin_by_frequency, block_of, build_split, generate, haversine_m, BlockId, FrequencyBin, GeoPoint,
    ObservationRecord, Split, SplitManifest, SynthConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::oracles;

fn corpus_split(n: usize, seed: u64) -> (Vec<ObservationRecord>, BTreeMap<BlockId, Split>, SplitManifest) {
    let corpus = generate(&SynthConfig {
        n_observations: n,
        n_classes: 12,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let obs = corpus.observations;
    let blocks = occupied_blocks(&obs, DEFAULT_CELL_DEG).unwrap();
    let assignment =
        assign_blocks(&blocks, SplitFractions::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let manifest = build_split(&obs, &assignment, DEFAULT_CELL_DEG, DEFAULT_PROXIMITY_M).unwrap();
    (obs, assignment, manifest)
}

fn block_index(x: f64) -> i64 {
    (x / DEFAULT_CELL_DEG).floor() as i64
}

#[test]
fn manifest_matches_brute_force_filters() {
    let (obs, assignment, m) = corpus_split(1000, 3);
    let split_of = |o: &ObservationRecord| {
        assignment[&BlockId {
            lat_index: block_index(o.lat),
            lon_index: block_index(o.lon),
        }]
    };
    let train: Vec<&ObservationRecord> = obs.iter().filter(|o| split_of(o) == Split::Train).collect();
    let quality = |o: &ObservationRecord| o.research_grade && o.species_level && o.class_id.is_some();
    let near_train =
        |o: &ObservationRecord| train.iter().any(|t| oracles::haversine_m(o.lat, o.lon, t.lat, t.lon) <= 256.0);

    let mut classes: BTreeMap<Split, BTreeSet<u32>> = BTreeMap::new();
    for o in &obs {
        let s = split_of(o);
        if quality(o) && (s == Split::Train || !near_train(o)) {
            classes.entry(s).or_default().insert(o.class_id.unwrap());
        }
    }
    let universe: BTreeSet<u32> = classes[&Split::Train]
        .iter()
        .filter(|c| classes[&Split::Val].contains(c) && classes[&Split::Test].contains(c))
        .copied()
        .collect();
    assert_eq!(m.class_universe, universe);
    assert!(!universe.is_empty());

    for o in &obs {
        let s = split_of(o);
        let in_universe = o.class_id.is_some_and(|c| universe.contains(&c));
        let expect = match s {
            Split::Train => Some(Split::Train),
            _ if quality(o) && in_universe && !near_train(o) => Some(s),
            _ => None,
        };
        assert_eq!(m.obs_assignment.get(&o.obs_id).copied(), expect, "{}", o.obs_id);
        assert_eq!(
            m.labeled_train.contains(&o.obs_id),
            s == Split::Train && quality(o) && in_universe,
            "{}",
            o.obs_id
        );
    }
}

#[test]
fn built_manifest_invariants() {
    let (obs, assignment, m) = corpus_split(2000, 8);
    let by_id: BTreeMap<&str, &ObservationRecord> = obs.iter().map(|o| (o.obs_id.as_str(), o)).collect();
    let train: Vec<&ObservationRecord> = m.ids_in(Split::Train).map(|id| by_id[id.as_str()]).collect();
    for split in [Split::Val, Split::Test] {
        let mut seen = BTreeSet::new();
        for id in m.ids_in(split) {
            let o = by_id[id.as_str()];
            for t in &train {
                assert!(oracles::haversine_m(o.lat, o.lon, t.lat, t.lon) > 256.0);
            }
            seen.insert(m.labels[id]);
            let b = block_of(o.lat, o.lon, DEFAULT_CELL_DEG).unwrap();
            assert_eq!(m.block_assignment[&b], split);
        }
        assert!(m.class_universe.is_subset(&seen));
    }
    let train_classes: BTreeSet<u32> = m.labeled_train.iter().map(|id| m.labels[id]).collect();
    assert_eq!(train_classes, m.class_universe);
    assert_eq!(m.block_assignment, assignment);
}

#[test]
fn held_out_observation_near_train_is_dropped() {
    let rec = |id: &str, lat: f64, lon: f64| ObservationRecord {
        obs_id: id.into(),
        lat,
        lon,
        class_id: Some(1),
        research_grade: true,
        species_level: true,
        group_id: 0,
        n_ground_views: 1,
    };
    // blocks (0, 0) and (1, 0) meet at latitude 0.1
    let train = rec("train", 0.0995, 0.05);
    let close = rec("close", 0.0995 + 200.0 / 111_195.0, 0.05);
    let far = rec("far", 0.15, 0.05);
    let val = rec("val", 0.35, 0.05);
    let assignment: BTreeMap<BlockId, Split> = [
        (BlockId { lat_index: 0, lon_index: 0 }, Split::Train),
        (BlockId { lat_index: 1, lon_index: 0 }, Split::Test),
        (BlockId { lat_index: 3, lon_index: 0 }, Split::Val),
    ]
    .into();
    let d = oracles::haversine_m(train.lat, train.lon, close.lat, close.lon);
    assert!((d - 200.0).abs() < 1.0);
    let m = build_split(&[train, close, far, val], &assignment, DEFAULT_CELL_DEG, 256.0).unwrap();
    assert_eq!(m.obs_assignment.get("close"), None);
    assert_eq!(m.obs_assignment.get("far"), Some(&Split::Test));
    assert_eq!(m.summary.dropped_proximity, 1);
}

#[test]
fn lambda_subsets_keep_size_and_vary_membership() {
    let pool: BTreeSet<String> = (0..1000).map(|i| format!("o{i:04}")).collect();
    let draws: Vec<BTreeSet<String>> = (0..20)
        .map(|s| sample_lambda_subset(&pool, 0.05, &mut ChaCha8Rng::seed_from_u64(s)).unwrap())
        .collect();
    assert!(draws.iter().all(|d| d.len() == 50 && d.is_subset(&pool)));
    let distinct: BTreeSet<&BTreeSet<String>> = draws.iter().collect();
    assert_eq!(distinct.len(), draws.len());
    // every member appears at about the sampling rate over many seeds
    let mut hits: BTreeMap<&String, usize> = BTreeMap::new();
    for s in 0..400 {
        for id in sample_lambda_subset(&pool, 0.05, &mut ChaCha8Rng::seed_from_u64(1000 + s)).unwrap() {
            *hits.entry(pool.get(&id).unwrap()).or_default() += 1;
        }
    }
    let mean = 400.0 * 0.05;
    assert!(hits.len() > 990);
    assert!(hits.values().all(|&h| (h as f64) < mean * 3.0));
    let exact = sample_lambda_subset(&(0..100_000).map(|i| i.to_string()).collect(), 0.0025, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(exact.unwrap().len(), 250);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn block_counts_follow_rounding(seed in any::<u64>(), n in 1usize..3000) {
        let blocks: BTreeSet<BlockId> = (0..n as i64).map(|i| BlockId { lat_index: i % 97, lon_index: i / 97 }).collect();
        let a = assign_blocks(&blocks, SplitFractions::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(a.keys().eq(blocks.iter()));
        let count = |s| a.values().filter(|x| **x == s).count();
        let (t, v) = (count(Split::Test), count(Split::Val));
        prop_assert_eq!(t, (0.125 * n as f64 + 0.5).floor() as usize);
        prop_assert_eq!(v, ((0.125 * n as f64 + 0.5).floor() as usize).min(n - t));
        prop_assert_eq!(count(Split::Train), n - t - v);
        let again = assign_blocks(&blocks, SplitFractions::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a, again);
    }

    #[test]
    fn lambda_sizes_are_ordered(seed in any::<u64>(), n in 1usize..2000, l1 in 0.001f64..1.0, l2 in 0.001f64..1.0) {
        let pool: BTreeSet<String> = (0..n).map(|i| i.to_string()).collect();
        let (lo, hi) = if l1 < l2 { (l1, l2) } else { (l2, l1) };
        let s1 = sample_lambda_subset(&pool, lo, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let s2 = sample_lambda_subset(&pool, hi, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(s1.len(), round_half_up(lo * n as f64));
        prop_assert!(s1.len() <= s2.len());
        if round_half_up(lo * n as f64) < round_half_up(hi * n as f64) {
            prop_assert!(s1.len() < s2.len());
        }
    }

    #[test]
    fn bins_match_recount(counts in proptest::collection::btree_map(0u32..500, 1usize..1500, 0..80)) {
        let bins = bin_by_frequency(&counts);
        let (mut f, mut c, mut r) = (0, 0, 0);
        for &n in counts.values() {
            if n > 700 { f += 1 } else if n < 200 { r += 1 } else { c += 1 }
        }
        prop_assert_eq!(bins.count(FrequencyBin::Frequent), f);
        prop_assert_eq!(bins.count(FrequencyBin::Common), c);
        prop_assert_eq!(bins.count(FrequencyBin::Rare), r);
        prop_assert_eq!(bins.bin_of.len(), counts.len());
    }

    #[test]
    fn haversine_matches_formula(lat1 in -90.0f64..90.0, lon1 in -180.0f64..180.0, lat2 in -90.0f64..90.0, lon2 in -180.0f64..180.0) {
        let (p, q) = (GeoPoint::new(lat1, lon1).unwrap(), GeoPoint::new(lat2, lon2).unwrap());
        let d = haversine_m(p, q).unwrap();
        prop_assert!((d - oracles::haversine_m(lat1, lon1, lat2, lon2)).abs() < 1e-6);
        prop_assert_eq!(d, haversine_m(q, p).unwrap());
        prop_assert!(d >= 0.0);
    }

    #[test]
    fn blocks_are_half_open_cells(lat in -89.9f64..89.9, lon in -179.9f64..179.9) {
        let b = block_of(lat, lon, DEFAULT_CELL_DEG).unwrap();
        prop_assert_eq!(b, BlockId { lat_index: block_index(lat), lon_index: block_index(lon) });
        let (lo, hi) = (b.lat_index as f64 * DEFAULT_CELL_DEG, (b.lat_index + 1) as f64 * DEFAULT_CELL_DEG);
        prop_assert!(lo <= lat + 1e-9 && lat < hi + 1e-9);
    }
}

#[test]
fn random_block_draws_cover_all_splits() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let blocks: BTreeSet<BlockId> = (0..200)
        .map(|_| BlockId {
            lat_index: rng.random_range(-900..900),
            lon_index: rng.random_range(-1800..1800),
        })
        .collect();
    let a = assign_blocks(&blocks, SplitFractions::default(), &mut rng).unwrap();
    let splits: BTreeSet<Split> = a.values().copied().collect();
    assert_eq!(splits.len(), 3);
}
