mod support;

use crisp_core::augment::{apply_augmentation, AugmentDraw};
use crisp_core::embed::softmax_nll_rows;
use crisp_core::loss::{many_to_one_crisp_loss_with, ManyToOneOptions};
use crisp_core::{
    build_positive_mask, cosine_similarity_matrix, l2_normalize, many_to_one_crisp_loss, parameterized_crisp_loss,
    standard_crisp_loss, EmbeddingBatch, GeoPoint, LossWeight, PairedBatch,
};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use support::oracles;

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

fn rows_of(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

fn batch(gl: Array2<f64>, a: Array2<f64>, pair: Vec<usize>, coords: Option<Vec<GeoPoint>>) -> PairedBatch {
    PairedBatch::new(
        EmbeddingBatch::from_vectors(gl).unwrap(),
        EmbeddingBatch::from_vectors(a).unwrap(),
        pair,
        coords,
    )
    .unwrap()
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

fn latlon(c: &[GeoPoint]) -> Vec<(f64, f64)> {
    c.iter().map(|p| (p.lat, p.lon)).collect()
}

#[test]
fn normalized_rows_have_unit_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = gaussian(&mut rng, 8, 16);
    let u = l2_normalize(&EmbeddingBatch::from_vectors(x.clone()).unwrap()).unwrap();
    for (i, row) in u.vectors().outer_iter().enumerate() {
        let mut sq = 0.0;
        for v in row.iter() {
            sq += v * v;
        }
        assert!((sq.sqrt() - 1.0).abs() < 1e-9);
        // direction preserved
        let scale = x[[i, 0]] / row[0];
        assert!(scale > 0.0);
        for j in 0..16 {
            assert!((row[j] * scale - x[[i, j]]).abs() < 1e-9);
        }
    }
}

#[test]
fn similarity_matches_dot_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (g, a) = (gaussian(&mut rng, 5, 7), gaussian(&mut rng, 6, 7));
    let s = cosine_similarity_matrix(
        &EmbeddingBatch::from_vectors(g.clone()).unwrap(),
        &EmbeddingBatch::from_vectors(a.clone()).unwrap(),
    )
    .unwrap();
    let oracle = oracles::scaled_cosines(&rows_of(&g), &rows_of(&a), 1.0);
    for i in 0..5 {
        for k in 0..6 {
            assert!((s.values[[i, k]] - oracle[i][k]).abs() < 1e-12);
        }
    }
}

#[test]
fn multi_positive_softmax_matches_double_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let s = gaussian(&mut rng, 6, 6);
        let mut mask = Array2::from_shape_fn((6, 6), |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
        for i in 0..6 {
            mask[[i, rng.random_range(0..6)]] = 1.0;
        }
        let (loss, _) = softmax_nll_rows(s.view(), mask.view()).unwrap();
        let mut total = 0.0;
        for i in 0..6 {
            let mut z = 0.0;
            for j in 0..6 {
                z += s[[i, j]].exp();
            }
            let (mut row, mut npos) = (0.0, 0.0);
            for k in 0..6 {
                if mask[[i, k]] > 0.0 {
                    row += -(s[[i, k]].exp() / z).ln();
                    npos += 1.0;
                }
            }
            total += row / npos;
        }
        assert!((loss - total / 6.0).abs() < 1e-12, "{loss} vs {}", total / 6.0);
    }
}

#[test]
fn standard_loss_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let (g, a) = (gaussian(&mut rng, 8, 16), gaussian(&mut rng, 8, 16));
        let pair = shuffled(8, &mut rng);
        let oracle = oracles::standard_loss(&rows_of(&g), &rows_of(&a), &pair, 0.07);
        let r = standard_crisp_loss(&batch(g, a, pair, None), 0.07).unwrap();
        assert!((r.loss - oracle).abs() < 1e-12, "{} vs {oracle}", r.loss);
        assert!((r.loss - 0.5 * (r.l_gl + r.l_a)).abs() < 1e-12);
    }
}

#[test]
fn positive_mask_matches_pairwise_haversine() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // roughly 1 km on a side at 45 degrees north
    let coords: Vec<GeoPoint> = (0..20)
        .map(|_| GeoPoint::new(45.0 + rng.random_range(0.0..0.009), 7.0 + rng.random_range(0.0..0.0127)).unwrap())
        .collect();
    let pair = shuffled(20, &mut rng);
    for radius in [100.0, 250.0, 500.0] {
        let mask = build_positive_mask(Some(&coords), &pair, radius).unwrap();
        let mut positives = 0;
        for i in 0..20 {
            let p = coords[pair[i]];
            for k in 0..20 {
                let d = oracles::haversine_m(p.lat, p.lon, coords[k].lat, coords[k].lon);
                assert_eq!(mask[[i, k]], k == pair[i] || d <= radius, "({i},{k}) at {d} m");
                positives += usize::from(mask[[i, k]]);
            }
        }
        assert!(positives > 20, "radius {radius} should add co-located positives");
    }
}

#[test]
fn co_located_identical_items_cost_log_of_link_count() {
    // three aerial items at one spot, five ground items sharing them
    let v = Array2::from_shape_fn((5, 4), |(_, j)| [1.0, -2.0, 0.5, 3.0][j]);
    let a = Array2::from_shape_fn((3, 4), |(_, j)| [1.0, -2.0, 0.5, 3.0][j]);
    let pair = vec![0, 1, 2, 0, 1];
    let coords = vec![GeoPoint::new(10.0, 20.0).unwrap(); 3];
    let b = batch(v.clone(), a.clone(), pair.clone(), Some(coords.clone()));
    let r = many_to_one_crisp_loss(&b, 0.1, 250.0).unwrap();
    // every link is positive: 15 links enter each partition function
    let d = 15.0_f64;
    assert!((r.l_gl - d.ln()).abs() < 1e-12);
    assert!((r.l_a - d.ln()).abs() < 1e-12);
    let oracle = oracles::many_to_one_loss(&rows_of(&v), &rows_of(&a), &pair, &latlon(&coords), 0.1, 250.0);
    assert!((r.loss - oracle).abs() < 1e-12);
}

#[test]
fn two_co_located_clusters_match_quadruple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..20 {
        let (g, a) = (gaussian(&mut rng, 6, 5), gaussian(&mut rng, 6, 5));
        let pair = shuffled(6, &mut rng);
        // two clusters about 2 km apart, members within 60 m
        let coords: Vec<GeoPoint> = (0..6)
            .map(|k| {
                let base = if k % 2 == 0 { 0.0 } else { 0.02 };
                GeoPoint::new(30.0 + base + rng.random_range(0.0..0.0004), -90.0 + rng.random_range(0.0..0.0004))
                    .unwrap()
            })
            .collect();
        let oracle = oracles::many_to_one_loss(&rows_of(&g), &rows_of(&a), &pair, &latlon(&coords), 0.07, 250.0);
        let r = many_to_one_crisp_loss(&batch(g, a, pair, Some(coords)), 0.07, 250.0).unwrap();
        assert!((r.loss - oracle).abs() < 1e-12, "trial {trial}: {} vs {oracle}", r.loss);
    }
}

#[test]
fn deduplicated_denominator_counts_each_item_once() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (g, a) = (gaussian(&mut rng, 4, 3), gaussian(&mut rng, 2, 3));
    let pair = vec![0, 0, 1, 1];
    let coords = vec![GeoPoint::new(0.0, 0.0).unwrap(), GeoPoint::new(0.0, 0.001).unwrap()];
    let r = many_to_one_crisp_loss_with(
        &batch(g.clone(), a.clone(), pair.clone(), Some(coords)),
        1.0,
        ManyToOneOptions {
            radius_m: 250.0,
            dedupe_denominator: true,
        },
    )
    .unwrap();
    let s = oracles::scaled_cosines(&rows_of(&g), &rows_of(&a), 1.0);
    let mut l_gl = 0.0;
    for row in &s {
        let z = row[0].exp() + row[1].exp();
        l_gl += 0.5 * ((z.ln() - row[0]) + (z.ln() - row[1]));
    }
    let mut l_a = 0.0;
    for k in 0..2 {
        let z: f64 = s.iter().map(|row| row[k].exp()).sum();
        l_a += s.iter().map(|row| z.ln() - row[k]).sum::<f64>() / 4.0;
    }
    assert!((r.l_gl - l_gl / 4.0).abs() < 1e-12);
    assert!((r.l_a - l_a / 2.0).abs() < 1e-12);
}

#[test]
fn parameterized_weight_gradient_matches_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..10 {
        let (g, a) = (gaussian(&mut rng, 7, 9), gaussian(&mut rng, 7, 9));
        let pair = shuffled(7, &mut rng);
        let b = batch(g, a, pair, None);
        let at = |w: f64| parameterized_crisp_loss(&b, 0.2, LossWeight { w }).unwrap();
        let h = 1e-5;
        let fd = (at(0.3 + h).loss - at(0.3 - h).loss) / (2.0 * h);
        assert!((at(0.3).grad_w.unwrap() - fd).abs() < 1e-7);
    }
}

fn random_batch(seed: u64, n: usize, dim: usize) -> (Array2<f64>, Array2<f64>, Vec<usize>, Vec<GeoPoint>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = gaussian(&mut rng, n, dim);
    let a = gaussian(&mut rng, n, dim);
    let pair = shuffled(n, &mut rng);
    let coords = (0..n)
        .map(|_| GeoPoint::new(12.0 + rng.random_range(0.0..0.01), 40.0 + rng.random_range(0.0..0.01)).unwrap())
        .collect();
    (g, a, pair, coords)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_nonnegative(seed in any::<u64>(), n in 1usize..10, dim in 1usize..8, tau in 0.05f64..2.0, w in -4.0f64..4.0) {
        let (g, a, pair, coords) = random_batch(seed, n, dim);
        let b = batch(g, a, pair, Some(coords));
        prop_assert!(standard_crisp_loss(&b, tau).unwrap().loss >= 0.0);
        let par = parameterized_crisp_loss(&b, tau, LossWeight { w }).unwrap();
        prop_assert!(par.loss >= 0.0);
        prop_assert!(many_to_one_crisp_loss(&b, tau, 250.0).unwrap().loss >= 0.0);
    }

    #[test]
    fn zero_radius_reduces_to_standard(seed in any::<u64>(), n in 1usize..10, dim in 1usize..8) {
        let (g, a, pair, coords) = random_batch(seed, n, dim);
        let b = batch(g, a, pair, Some(coords));
        let s = standard_crisp_loss(&b, 0.1).unwrap();
        let m = many_to_one_crisp_loss(&b, 0.1, 0.0).unwrap();
        prop_assert!((s.loss - m.loss).abs() < 1e-12);
    }

    #[test]
    fn unit_weight_is_standard_bitwise(seed in any::<u64>(), n in 1usize..10, dim in 1usize..8) {
        let (g, a, pair, _) = random_batch(seed, n, dim);
        let b = batch(g, a, pair, None);
        let s = standard_crisp_loss(&b, 0.07).unwrap();
        let p = parameterized_crisp_loss(&b, 0.07, LossWeight { w: 0.0 }).unwrap();
        prop_assert_eq!(s.loss.to_bits(), p.loss.to_bits());
        prop_assert_eq!(s.grad_gl, p.grad_gl);
        prop_assert_eq!(s.grad_a, p.grad_a);
    }

    #[test]
    fn objectives_match_loop_oracles(seed in any::<u64>(), n in 1usize..9, dim in 1usize..8, w in -3.0f64..3.0) {
        let (g, a, pair, coords) = random_batch(seed, n, dim);
        let (rg, ra) = (rows_of(&g), rows_of(&a));
        let ll = latlon(&coords);
        let b = batch(g, a, pair.clone(), Some(coords));
        let par = parameterized_crisp_loss(&b, 0.3, LossWeight { w }).unwrap().loss;
        prop_assert!((par - oracles::parameterized_loss(&rg, &ra, &pair, 0.3, w)).abs() < 1e-12);
        let m2o = many_to_one_crisp_loss(&b, 0.3, 400.0).unwrap().loss;
        prop_assert!((m2o - oracles::many_to_one_loss(&rg, &ra, &pair, &ll, 0.3, 400.0)).abs() < 1e-12);
    }

    #[test]
    fn batch_order_does_not_matter(seed in any::<u64>(), n in 2usize..9, dim in 1usize..6) {
        let (g, a, pair, coords) = random_batch(seed, n, dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let pg = shuffled(n, &mut rng);
        let pa = shuffled(n, &mut rng);
        // inverse of the aerial permutation: old index -> new index
        let mut where_a = vec![0; n];
        for (new, &old) in pa.iter().enumerate() {
            where_a[old] = new;
        }
        let g2 = g.select(ndarray::Axis(0), &pg);
        let a2 = a.select(ndarray::Axis(0), &pa);
        let pair2: Vec<usize> = pg.iter().map(|&old| where_a[pair[old]]).collect();
        let coords2: Vec<GeoPoint> = pa.iter().map(|&old| coords[old]).collect();
        let b1 = batch(g, a, pair, Some(coords));
        let b2 = batch(g2, a2, pair2, Some(coords2));
        let d = |x: f64, y: f64| (x - y).abs();
        prop_assert!(d(standard_crisp_loss(&b1, 0.1).unwrap().loss, standard_crisp_loss(&b2, 0.1).unwrap().loss) < 1e-12);
        let w = LossWeight { w: 0.7 };
        prop_assert!(d(parameterized_crisp_loss(&b1, 0.1, w).unwrap().loss, parameterized_crisp_loss(&b2, 0.1, w).unwrap().loss) < 1e-12);
        prop_assert!(d(many_to_one_crisp_loss(&b1, 0.1, 300.0).unwrap().loss, many_to_one_crisp_loss(&b2, 0.1, 300.0).unwrap().loss) < 1e-12);
    }

    #[test]
    fn swapping_views_is_symmetric(seed in any::<u64>(), n in 1usize..9, dim in 1usize..6) {
        let (g, a, pair, _) = random_batch(seed, n, dim);
        let mut inverse = vec![0; n];
        for (i, &k) in pair.iter().enumerate() {
            inverse[k] = i;
        }
        let fwd = standard_crisp_loss(&batch(g.clone(), a.clone(), pair, None), 0.2).unwrap();
        let back = standard_crisp_loss(&batch(a, g, inverse, None), 0.2).unwrap();
        prop_assert!((fwd.loss - back.loss).abs() < 1e-12);
    }

    #[test]
    fn similarity_transpose_and_scale(seed in any::<u64>(), n in 1usize..7, m in 1usize..7, dim in 1usize..6, c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (g, a) = (gaussian(&mut rng, n, dim), gaussian(&mut rng, m, dim));
        let eb = |x: &Array2<f64>| EmbeddingBatch::from_vectors(x.clone()).unwrap();
        let s = cosine_similarity_matrix(&eb(&g), &eb(&a)).unwrap().values;
        let t = cosine_similarity_matrix(&eb(&a), &eb(&g)).unwrap().values;
        for i in 0..n {
            for k in 0..m {
                prop_assert!((s[[i, k]] - t[[k, i]]).abs() < 1e-12);
                prop_assert!(s[[i, k]].abs() <= 1.0 + 1e-9);
            }
        }
        let row = rng.random_range(0..n);
        let mut g2 = g.clone();
        g2.row_mut(row).mapv_inplace(|v| v * c);
        let s2 = cosine_similarity_matrix(&eb(&g2), &eb(&a)).unwrap().values;
        for (x, y) in s.iter().zip(s2.iter()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_gradient_matches_central_differences(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = gaussian(&mut rng, rows, cols) * 2.0;
        let mut mask = Array2::from_shape_fn((rows, cols), |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
        for i in 0..rows {
            mask[[i, rng.random_range(0..cols)]] = 1.0;
        }
        let (_, grad) = softmax_nll_rows(s.view(), mask.view()).unwrap();
        let h = 1e-5;
        let mut fd = Array2::zeros((rows, cols));
        for idx in 0..s.len() {
            let f = |delta: f64| {
                let mut x = s.clone();
                x.as_slice_mut().unwrap()[idx] += delta;
                softmax_nll_rows(x.view(), mask.view()).unwrap().0
            };
            fd.as_slice_mut().unwrap()[idx] = (f(h) - f(-h)) / (2.0 * h);
        }
        let err = (&grad - &fd).mapv(|v| v * v).sum().sqrt();
        let scale = grad.mapv(|v| v * v).sum().sqrt().max(fd.mapv(|v| v * v).sum().sqrt()).max(1e-12);
        prop_assert!(err / scale < 1e-5 || err < 1e-9, "relative error {}", err / scale);
    }

    #[test]
    fn augmentation_preserves_crop_pixel_sum(seed in any::<u64>(), side in 2usize..9, crop_frac in 0.1f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let crop = ((side as f64 * crop_frac).ceil() as usize).clamp(1, side);
        // integer-valued pixels keep sums exact under reordering
        let img = Array3::from_shape_fn((3, side, side), |_| rng.random_range(0..100) as f64);
        let draw = AugmentDraw::sample(&mut rng, side, side, crop).unwrap();
        let out = apply_augmentation(img.view(), crop, draw).unwrap();
        prop_assert_eq!(out.dim(), (3, crop, crop));
        for c in 0..3 {
            let mut window = 0.0;
            for y in draw.top..draw.top + crop {
                for x in draw.left..draw.left + crop {
                    window += img[[c, y, x]];
                }
            }
            prop_assert_eq!(out.index_axis(ndarray::Axis(0), c).sum(), window);
        }
    }
}
