use std::collections::BTreeMap;

use crisp_core::{corpus_stats, generate, SynthConfig, SynthCorpus};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use proptest::prelude::*;

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

fn first_views(c: &SynthCorpus) -> Vec<usize> {
    c.ground_rows_by_obs().iter().map(|rows| rows[0]).collect()
}

#[test]
fn independent_views_without_shared_signal() {
    let c = generate(&SynthConfig {
        n_observations: 10_000,
        shared_signal: 0.0,
        ..SynthConfig::default()
    })
    .unwrap();
    let rows = first_views(&c);
    let dims = c.ground.dim().min(c.aerial.dim());
    for d in 0..dims {
        let g: Vec<f64> = rows.iter().map(|&r| c.ground.data[[r, d]]).collect();
        let a: Vec<f64> = c.aerial.data.column(d).to_vec();
        let rho = pearson(&g, &a);
        assert!(rho.abs() < 0.05, "channel {d}: rho {rho}");
    }
    // and the same measurement picks up shared structure when it exists
    let c = generate(&SynthConfig {
        n_observations: 10_000,
        shared_signal: 1.0,
        noise_sigma: 0.1,
        ..SynthConfig::default()
    })
    .unwrap();
    let rows = first_views(&c);
    let strongest = (0..dims)
        .map(|d| {
            let g: Vec<f64> = rows.iter().map(|&r| c.ground.data[[r, d]]).collect();
            pearson(&g, &c.aerial.data.column(d).to_vec()).abs()
        })
        .fold(0.0, f64::max);
    assert!(strongest > 0.2, "strongest {strongest}");
}

#[test]
fn long_tail_head_dominates_tail() {
    let c = generate(&SynthConfig {
        n_classes: 50,
        n_observations: 5000,
        tail_exponent: 1.1,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut hist = vec![0usize; 50];
    for &y in &c.latents.as_ref().unwrap().true_class {
        hist[y] += 1;
    }
    let head = *hist.iter().max().unwrap();
    let tail = *hist.iter().min().unwrap();
    assert!(head >= 20 * tail.max(1), "head {head}, tail {tail}");
    assert_eq!(hist.iter().sum::<usize>(), 5000);
}

/// Least-squares decode `argmin_s |M s - v|` through the normal equations.
fn decode(m: ArrayView2<'_, f64>, v: ArrayView1<'_, f64>) -> Array1<f64> {
    let l = m.ncols();
    let mut a = m.t().dot(&m);
    let mut b = m.t().dot(&v);
    for col in 0..l {
        let piv = (col..l).max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs())).unwrap();
        for k in 0..l {
            a.swap([col, k], [piv, k]);
        }
        b.swap(col, piv);
        for r in col + 1..l {
            let f = a[[r, col]] / a[[col, col]];
            for k in col..l {
                a[[r, k]] -= f * a[[col, k]];
            }
            b[r] -= f * b[col];
        }
    }
    let mut s = Array1::zeros(l);
    for r in (0..l).rev() {
        let mut acc = b[r];
        for k in r + 1..l {
            acc -= a[[r, k]] * s[k];
        }
        s[r] = acc / a[[r, r]];
    }
    s
}

fn cosine(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> f64 {
    x.dot(&y) / (x.dot(&x) * y.dot(&y)).sqrt()
}

#[test]
fn paired_views_are_closest_without_noise() {
    let c = generate(&SynthConfig {
        n_observations: 200,
        shared_signal: 1.0,
        noise_sigma: 1e-12,
        ..SynthConfig::default()
    })
    .unwrap();
    let l = c.latents.as_ref().unwrap();
    let rows = first_views(&c);
    let n = rows.len();
    let mut zg = Array2::zeros((n, l.shared_gl.ncols()));
    let mut za = Array2::zeros((n, l.shared_a.ncols()));
    for o in 0..n {
        zg.row_mut(o).assign(&decode(l.shared_gl.view(), c.ground.data.row(rows[o])));
        za.row_mut(o).assign(&decode(l.shared_a.view(), c.aerial.data.row(o)));
    }
    let mut margin = f64::INFINITY;
    for i in 0..n {
        let own = cosine(zg.row(i), za.row(i));
        for j in (0..n).filter(|&j| j != i) {
            margin = margin.min(own - cosine(zg.row(i), za.row(j)));
        }
    }
    assert!(margin > 0.0, "margin {margin}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stats_equal_recount(seed in any::<u64>(), n in 1usize..400, classes in 1usize..20, views in 1.0f64..4.0) {
        let c = generate(&SynthConfig {
            n_observations: n,
            n_classes: classes,
            mean_views_per_obs: views,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let s = corpus_stats(&c).unwrap();

        let mut class_hist: BTreeMap<u32, usize> = BTreeMap::new();
        let mut views_hist: BTreeMap<u32, usize> = BTreeMap::new();
        let (mut lat_lo, mut lat_hi, mut lon_lo, mut lon_hi) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        let mut unlabeled = 0;
        for o in &c.observations {
            match o.class_id {
                Some(k) => *class_hist.entry(k).or_default() += 1,
                None => unlabeled += 1,
            }
            *views_hist.entry(o.n_ground_views).or_default() += 1;
            lat_lo = lat_lo.min(o.lat);
            lat_hi = lat_hi.max(o.lat);
            lon_lo = lon_lo.min(o.lon);
            lon_hi = lon_hi.max(o.lon);
        }
        let images = c.ground.data.nrows();
        prop_assert_eq!(s.observations, n);
        prop_assert_eq!(s.images, images);
        prop_assert_eq!(&s.class_histogram, &class_hist);
        prop_assert_eq!(s.classes, class_hist.len());
        prop_assert_eq!(s.unlabeled_observations, unlabeled);
        prop_assert_eq!(&s.views_histogram, &views_hist);
        prop_assert_eq!(views_hist.values().sum::<usize>(), n);
        prop_assert!((s.mean_views_per_obs - images as f64 / n as f64).abs() < 1e-9);
        prop_assert_eq!(s.lat_range, (lat_lo, lat_hi));
        prop_assert_eq!(s.lon_range, (lon_lo, lon_hi));

        // structural invariants and bitwise regeneration
        prop_assert_eq!(c.aerial.data.nrows(), n);
        for (o, rows) in c.ground_rows_by_obs().iter().enumerate() {
            prop_assert_eq!(rows.len(), c.observations[o].n_ground_views as usize);
        }
        let prior = SynthConfig { n_classes: classes, ..SynthConfig::default() }.class_prior();
        prop_assert!(prior.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(generate(c.config.as_ref().unwrap()).unwrap() == c);
    }
}
