//! Slow, literal reference implementations used as test oracles. Nothing
//! here calls into the library under test.
#![allow(dead_code)]

use std::collections::BTreeMap;

pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

pub fn haversine_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// `s[i][j] = cos(gl_i, a_j) / tau`.
pub fn scaled_cosines(gl: &[Vec<f64>], a: &[Vec<f64>], tau: f64) -> Vec<Vec<f64>> {
    let ug: Vec<Vec<f64>> = gl.iter().map(|v| unit(v)).collect();
    let ua: Vec<Vec<f64>> = a.iter().map(|v| unit(v)).collect();
    let mut s = vec![vec![0.0; a.len()]; gl.len()];
    for i in 0..gl.len() {
        for j in 0..a.len() {
            let mut d = 0.0;
            for t in 0..ug[i].len() {
                d += ug[i][t] * ua[j][t];
            }
            s[i][j] = d / tau;
        }
    }
    s
}

/// Directional losses `(l_gl, l_a)` of the one-to-one objective where ground
/// row `i` is paired with aerial row `pair[i]`.
pub fn standard_directions(gl: &[Vec<f64>], a: &[Vec<f64>], pair: &[usize], tau: f64) -> (f64, f64) {
    let s = scaled_cosines(gl, a, tau);
    let n = gl.len();
    let mut l_gl = 0.0;
    for i in 0..n {
        let mut z = 0.0;
        for j in 0..n {
            z += s[i][j].exp();
        }
        l_gl += z.ln() - s[i][pair[i]];
    }
    let mut l_a = 0.0;
    for i in 0..n {
        let k = pair[i];
        let mut z = 0.0;
        for r in 0..n {
            z += s[r][k].exp();
        }
        l_a += z.ln() - s[i][k];
    }
    (l_gl / n as f64, l_a / n as f64)
}

pub fn standard_loss(gl: &[Vec<f64>], a: &[Vec<f64>], pair: &[usize], tau: f64) -> f64 {
    let (g, x) = standard_directions(gl, a, pair, tau);
    0.5 * g + 0.5 * x
}

pub fn parameterized_loss(gl: &[Vec<f64>], a: &[Vec<f64>], pair: &[usize], tau: f64, w: f64) -> f64 {
    let (g, x) = standard_directions(gl, a, pair, tau);
    let sigma = 1.0 / (1.0 + (-w).exp());
    sigma * g + (1.0 - sigma) * x
}

/// Multi-positive objective. Ground row `i` sits at `coords[pair[i]]`; an
/// aerial item is positive for it when it is the pair or lies within
/// `radius_m`. Each item appears in a partition function once per positive
/// link it has.
pub fn many_to_one_loss(
    gl: &[Vec<f64>],
    a: &[Vec<f64>],
    pair: &[usize],
    coords: &[(f64, f64)],
    tau: f64,
    radius_m: f64,
) -> f64 {
    let s = scaled_cosines(gl, a, tau);
    let (n_gl, n_a) = (gl.len(), a.len());
    let mut pos = vec![vec![false; n_a]; n_gl];
    for i in 0..n_gl {
        let (la, lo) = coords[pair[i]];
        for k in 0..n_a {
            pos[i][k] = k == pair[i] || haversine_m(la, lo, coords[k].0, coords[k].1) <= radius_m;
        }
    }
    let links_of_aerial: Vec<f64> = (0..n_a)
        .map(|k| (0..n_gl).filter(|&i| pos[i][k]).count() as f64)
        .collect();
    let links_of_ground: Vec<f64> = (0..n_gl)
        .map(|i| (0..n_a).filter(|&k| pos[i][k]).count() as f64)
        .collect();

    let mut l_gl = 0.0;
    for i in 0..n_gl {
        let mut z = 0.0;
        for j in 0..n_a {
            z += links_of_aerial[j] * s[i][j].exp();
        }
        let mut row = 0.0;
        for k in 0..n_a {
            if pos[i][k] {
                row += z.ln() - s[i][k];
            }
        }
        l_gl += row / links_of_ground[i];
    }
    let mut l_a = 0.0;
    for k in 0..n_a {
        let mut z = 0.0;
        for r in 0..n_gl {
            z += links_of_ground[r] * s[r][k].exp();
        }
        let mut col = 0.0;
        for i in 0..n_gl {
            if pos[i][k] {
                col += z.ln() - s[i][k];
            }
        }
        l_a += col / links_of_aerial[k];
    }
    0.5 * l_gl / n_gl as f64 + 0.5 * l_a / n_a as f64
}

/// Whether the true class is among the `k` best scores, ties going to the
/// lower class index.
pub fn topk_hit(scores: &[f64], truth: usize, k: usize) -> bool {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&x, &y| scores[y].partial_cmp(&scores[x]).unwrap().then(x.cmp(&y)));
    order.iter().take(k).any(|&c| c == truth)
}

pub fn topk(scores: &[Vec<f64>], truth: &[usize], k: usize) -> f64 {
    let hits = (0..truth.len()).filter(|&i| topk_hit(&scores[i], truth[i], k)).count();
    hits as f64 / truth.len() as f64
}

fn mean_by_key<K: Ord + Copy>(scores: &[Vec<f64>], truth: &[usize], keys: &[K], k: usize) -> BTreeMap<K, f64> {
    let mut acc: BTreeMap<K, (f64, f64)> = BTreeMap::new();
    for i in 0..truth.len() {
        let e = acc.entry(keys[i]).or_insert((0.0, 0.0));
        if topk_hit(&scores[i], truth[i], k) {
            e.0 += 1.0;
        }
        e.1 += 1.0;
    }
    acc.into_iter().map(|(key, (h, n))| (key, h / n)).collect()
}

pub fn per_class(scores: &[Vec<f64>], truth: &[usize], k: usize) -> BTreeMap<usize, f64> {
    mean_by_key(scores, truth, truth, k)
}

pub fn macro_topk(scores: &[Vec<f64>], truth: &[usize], k: usize) -> f64 {
    let m = per_class(scores, truth, k);
    m.values().sum::<f64>() / m.len() as f64
}

pub fn eco_topk(scores: &[Vec<f64>], truth: &[usize], groups: &[i64], k: usize) -> f64 {
    let m = mean_by_key(scores, truth, groups, k);
    m.values().sum::<f64>() / m.len() as f64
}

fn choose2(n: f64) -> f64 {
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index from explicit pair counting.
pub fn ari(truth: &[usize], pred: &[usize]) -> f64 {
    let n = truth.len();
    let (mut same_both, mut same_t, mut same_p) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let st = truth[i] == truth[j];
            let sp = pred[i] == pred[j];
            same_t += f64::from(u8::from(st));
            same_p += f64::from(u8::from(sp));
            same_both += f64::from(u8::from(st && sp));
        }
    }
    let total = choose2(n as f64);
    if same_t == same_both && same_p == same_both {
        // the two partitions agree on every pair
        return 1.0;
    }
    let expected = same_t * same_p / total;
    let max = 0.5 * (same_t + same_p);
    if max == expected {
        return 1.0;
    }
    (same_both - expected) / (max - expected)
}

fn table(truth: &[usize], pred: &[usize]) -> (Vec<f64>, Vec<f64>, BTreeMap<(usize, usize), f64>) {
    let mut a: BTreeMap<usize, f64> = BTreeMap::new();
    let mut b: BTreeMap<usize, f64> = BTreeMap::new();
    let mut nij = BTreeMap::new();
    for (&t, &p) in truth.iter().zip(pred) {
        *a.entry(t).or_insert(0.0) += 1.0;
        *b.entry(p).or_insert(0.0) += 1.0;
        *nij.entry((t, p)).or_insert(0.0) += 1.0;
    }
    (a.into_values().collect(), b.into_values().collect(), nij)
}

fn entropy(counts: &[f64], n: f64) -> f64 {
    counts.iter().filter(|&&c| c > 0.0).map(|&c| -(c / n) * (c / n).ln()).sum()
}

fn mutual_info(truth: &[usize], pred: &[usize]) -> f64 {
    let n = truth.len() as f64;
    let mut ta: BTreeMap<usize, f64> = BTreeMap::new();
    let mut tb: BTreeMap<usize, f64> = BTreeMap::new();
    for (&t, &p) in truth.iter().zip(pred) {
        *ta.entry(t).or_insert(0.0) += 1.0;
        *tb.entry(p).or_insert(0.0) += 1.0;
    }
    let (_, _, nij) = table(truth, pred);
    nij.iter()
        .map(|(&(t, p), &c)| (c / n) * (n * c / (ta[&t] * tb[&p])).ln())
        .sum()
}

pub fn homogeneity(truth: &[usize], pred: &[usize]) -> f64 {
    let n = truth.len() as f64;
    let (a, _, _) = table(truth, pred);
    let h = entropy(&a, n);
    if h == 0.0 {
        1.0
    } else {
        mutual_info(truth, pred) / h
    }
}

pub fn completeness(truth: &[usize], pred: &[usize]) -> f64 {
    let n = truth.len() as f64;
    let (_, b, _) = table(truth, pred);
    let h = entropy(&b, n);
    if h == 0.0 {
        1.0
    } else {
        mutual_info(truth, pred) / h
    }
}

fn ln_factorial(n: u64) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Expected mutual information under the hypergeometric model, summed term
/// by term.
pub fn expected_mutual_info(truth: &[usize], pred: &[usize]) -> f64 {
    let n = truth.len() as u64;
    let (a, b, _) = table(truth, pred);
    let nf = n as f64;
    let mut emi = 0.0;
    for &ai in &a {
        for &bj in &b {
            let (ai, bj) = (ai as u64, bj as u64);
            let lo = (ai + bj).saturating_sub(n).max(1);
            for nij in lo..=ai.min(bj) {
                let x = nij as f64;
                let term = (x / nf) * (nf * x / (ai as f64 * bj as f64)).ln();
                let log_p = ln_factorial(ai) + ln_factorial(bj) + ln_factorial(n - ai) + ln_factorial(n - bj)
                    - ln_factorial(n)
                    - ln_factorial(nij)
                    - ln_factorial(ai - nij)
                    - ln_factorial(bj - nij)
                    - ln_factorial(n + nij - ai - bj);
                emi += term * log_p.exp();
            }
        }
    }
    emi
}

/// Adjusted mutual information with the arithmetic-mean normalizer.
pub fn ami(truth: &[usize], pred: &[usize]) -> f64 {
    let n = truth.len() as f64;
    let (a, b, _) = table(truth, pred);
    if (a.len() == 1 && b.len() == 1) || (a.len() == truth.len() && b.len() == truth.len()) {
        return 1.0;
    }
    let mi = mutual_info(truth, pred);
    let emi = expected_mutual_info(truth, pred);
    let norm = 0.5 * (entropy(&a, n) + entropy(&b, n));
    let denom = norm - emi;
    let denom = if denom < 0.0 {
        denom.min(-f64::EPSILON)
    } else {
        denom.max(f64::EPSILON)
    };
    (mi - emi) / denom
}
