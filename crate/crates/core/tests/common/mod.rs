//! Independent reference implementations used by the integration tests.
//!
//! Everything here is written from the metric definitions with plain loops
//! and a Jacobi eigenvalue solver, sharing no code with the library.

#![allow(dead_code)]

pub mod fd;

use kqkit::{LayerMetrics, RepresentationSet};
use rand::Rng;
use rand_distr::StandardNormal;

pub const EPS: f64 = 1e-12;
pub const THRESHOLD: f64 = 0.95;

/// Random set with every class populated by at least two rows.
pub fn random_set(rng: &mut impl Rng, n: usize, d: usize, c: u32) -> RepresentationSet {
    let labels: Vec<u32> = (0..n).map(|i| (i as u32) % c).collect();
    let offset: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            (0..d)
                .map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let mut data = Vec::with_capacity(n * d);
    for &y in &labels {
        for k in 0..d {
            data.push((offset[y as usize][k] + rng.sample::<f64, _>(StandardNormal)) as f32);
        }
    }
    RepresentationSet::new(1, d, c, labels, data).unwrap()
}

/// Random set with `N <= 200`, `d <= 16`, `C in 2..=5`.
pub fn random_small_set(rng: &mut impl Rng) -> RepresentationSet {
    let c = rng.random_range(2..=5u32);
    let n = rng.random_range((2 * c as usize).max(10)..=200);
    let d = rng.random_range(2..=16);
    random_set(rng, n, d, c)
}

pub fn rows(set: &RepresentationSet) -> Vec<Vec<f64>> {
    set.rows()
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect()
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (norm(a) * norm(b) + EPS)).clamp(-1.0, 1.0)
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy)]
pub struct OraclePairs {
    pub avg_dpw: f64,
    pub avg_dpb: f64,
    pub min_dpw: f64,
    pub min_dist_b: f64,
    pub avg_norm: f64,
}

/// Direct double loop over all sample pairs.
pub fn naive_pairs(set: &RepresentationSet) -> OraclePairs {
    let x = rows(set);
    let y = set.labels();
    let c = set.classes() as usize;

    let mut w_sum = vec![0.0; c];
    let mut w_cnt = vec![0usize; c];
    let mut w_min = vec![f64::INFINITY; c];
    let mut b_sum = vec![vec![0.0; c]; c];
    let mut b_cnt = vec![vec![0usize; c]; c];
    let mut b_min = vec![vec![f64::INFINITY; c]; c];
    for i in 0..x.len() {
        for j in (i + 1)..x.len() {
            let cs = cosine(&x[i], &x[j]);
            let (a, b) = (y[i] as usize, y[j] as usize);
            if a == b {
                w_sum[a] += cs;
                w_cnt[a] += 1;
                w_min[a] = w_min[a].min(cs.abs());
            } else {
                let (lo, hi) = (a.min(b), a.max(b));
                b_sum[lo][hi] += cs;
                b_cnt[lo][hi] += 1;
                b_min[lo][hi] = b_min[lo][hi].min(dist(&x[i], &x[j]));
            }
        }
    }
    let within: Vec<usize> = (0..c).filter(|&k| w_cnt[k] > 0).collect();
    let mut between = Vec::new();
    for a in 0..c {
        for b in (a + 1)..c {
            if b_cnt[a][b] > 0 {
                between.push((a, b));
            }
        }
    }
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    OraclePairs {
        avg_dpw: mean(within.iter().map(|&k| w_sum[k] / w_cnt[k] as f64).collect()),
        min_dpw: mean(within.iter().map(|&k| w_min[k]).collect()),
        avg_dpb: mean(
            between
                .iter()
                .map(|&(a, b)| b_sum[a][b] / b_cnt[a][b] as f64)
                .collect(),
        ),
        min_dist_b: mean(between.iter().map(|&(a, b)| b_min[a][b]).collect()),
        avg_norm: mean(x.iter().map(|r| norm(r)).collect()),
    }
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = cs * akp - sn * akq;
                    a[k][q] = sn * akp + cs * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = cs * apk - sn * aqk;
                    a[q][k] = sn * apk + cs * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i].max(0.0)).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// Variance spectrum of mean-centred rows, descending.
pub fn spectrum(x: &[Vec<f64>]) -> Vec<f64> {
    let (n, d) = (x.len(), x[0].len());
    let mean: Vec<f64> = (0..d)
        .map(|k| x.iter().map(|r| r[k]).sum::<f64>() / n as f64)
        .collect();
    let centred: Vec<Vec<f64>> = x
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let cov: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| centred.iter().map(|r| r[i] * r[j]).sum())
                .collect()
        })
        .collect();
    jacobi_eigenvalues(cov)
}

pub fn components(spec: &[f64], threshold: f64) -> usize {
    let total: f64 = spec.iter().sum();
    let mut acc = 0.0;
    for (k, v) in spec.iter().enumerate() {
        acc += v;
        if acc / total >= threshold - 1e-12 {
            return k + 1;
        }
    }
    spec.len()
}

pub fn global_dim(set: &RepresentationSet) -> usize {
    components(&spectrum(&rows(set)), THRESHOLD)
}

/// Mean over all classes of the normalized entropy of the leading
/// components of each class's variance spectrum.
pub fn avg_svde(set: &RepresentationSet) -> f64 {
    let x = rows(set);
    let c = set.classes() as usize;
    let mut total = 0.0;
    for k in 0..c {
        let members: Vec<Vec<f64>> = x
            .iter()
            .zip(set.labels())
            .filter(|(_, &y)| y as usize == k)
            .map(|(r, _)| r.clone())
            .collect();
        if members.len() < 2 {
            continue;
        }
        let spec = spectrum(&members);
        let sum: f64 = spec.iter().sum();
        if sum <= 0.0 {
            continue;
        }
        let top = components(&spec, THRESHOLD);
        let h: f64 = spec[..top]
            .iter()
            .map(|v| v / sum)
            .filter(|&p| p > 0.0)
            .map(|p| -p * p.ln())
            .sum();
        total += (h / (members.len() as f64).ln()).clamp(0.0, 1.0);
    }
    total / c as f64
}

#[derive(Debug, Clone, Copy)]
pub struct OracleMetrics {
    pub pairs: OraclePairs,
    pub s: f64,
    pub i: f64,
    pub e: f64,
    pub q: f64,
    pub avg_svde: f64,
    pub global_dim: usize,
}

pub fn oracle_metrics(set: &RepresentationSet) -> OracleMetrics {
    let pairs = naive_pairs(set);
    let svde = avg_svde(set);
    let dim = global_dim(set);
    let s = pairs.avg_dpw - pairs.avg_dpb;
    let i = (1.0 - pairs.min_dpw) * svde;
    let e = if dim < 2 || pairs.min_dist_b <= 0.0 {
        0.0
    } else {
        let k = (set.len() as f64 / std::f64::consts::PI).powf(1.0 / (dim as f64 - 1.0));
        2.0 * k * pairs.min_dist_b / pairs.avg_norm
    };
    OracleMetrics {
        pairs,
        s,
        i,
        e,
        q: s + (i * e).sqrt(),
        avg_svde: svde,
        global_dim: dim,
    }
}

/// Panics naming the first field of `a` and `b` that differs by more than
/// `tol` relative.
pub fn check_fields(a: &LayerMetrics, b: &LayerMetrics, tol: f64) {
    let pairs = [
        ("S", a.s, b.s),
        ("I", a.i, b.i),
        ("E", a.e, b.e),
        ("Q", a.q, b.q),
        ("avgDPW", a.pair.avg_dpw, b.pair.avg_dpw),
        ("avgDPB", a.pair.avg_dpb, b.pair.avg_dpb),
        ("minDPW", a.pair.min_dpw, b.pair.min_dpw),
        ("minDistB", a.pair.min_dist_b, b.pair.min_dist_b),
        ("avgNorm", a.pair.avg_norm, b.pair.avg_norm),
        ("avgSVDE", a.avg_svde, b.avg_svde),
    ];
    for (name, x, y) in pairs {
        assert!(rel_close(x, y, tol), "{name}: {x} vs {y}");
    }
    assert_eq!(a.global_embed_dim, b.global_embed_dim);
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Applies `f` to every row of `set`, keeping labels.
pub fn map_rows(set: &RepresentationSet, f: impl Fn(&[f64]) -> Vec<f64>) -> RepresentationSet {
    let data: Vec<f64> = rows(set).iter().flat_map(|r| f(r)).collect();
    let d = data.len() / set.len();
    RepresentationSet::new(
        set.layer_index(),
        d,
        set.classes(),
        set.labels().to_vec(),
        data.into_iter().map(|v| v as f32).collect(),
    )
    .unwrap()
}

/// Random orthogonal `d x d` matrix via Gram-Schmidt.
pub fn random_rotation(rng: &mut impl Rng, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = norm(&v);
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

pub fn apply(m: &[Vec<f64>], r: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(r).map(|(a, b)| a * b).sum())
        .collect()
}

/// Integer-valued set whose coordinates stay exact under dyadic transforms.
pub fn integer_set(rng: &mut impl Rng, n: usize, d: usize, c: u32) -> RepresentationSet {
    let labels: Vec<u32> = (0..n).map(|i| (i as u32) % c).collect();
    let centres: Vec<Vec<i32>> = (0..c)
        .map(|_| (0..d).map(|_| rng.random_range(-20..=20)).collect())
        .collect();
    let data: Vec<f32> = labels
        .iter()
        .flat_map(|&y| {
            let centre = centres[y as usize].clone();
            centre
                .into_iter()
                .map(|m| (m + rng.random_range(-6..=6)) as f32)
                .collect::<Vec<_>>()
        })
        .collect();
    RepresentationSet::new(1, d, c, labels, data).unwrap()
}

/// Orthogonal `d x d` matrix (`d` a multiple of 4) whose entries are 0 or
/// +-1/2: a signed permutation, then half-Hadamard blocks, then another
/// signed permutation. Applied to integers it is exact in `f32`.
pub fn dyadic_rotation(rng: &mut impl Rng, d: usize) -> Vec<Vec<f64>> {
    assert_eq!(d % 4, 0);
    let signed_perm = |rng: &mut dyn rand::RngCore| {
        let mut idx: Vec<usize> = (0..d).collect();
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), rng);
        let mut m = vec![vec![0.0; d]; d];
        for (r, &c) in idx.iter().enumerate() {
            m[r][c] = if rng.next_u32() % 2 == 0 { 1.0 } else { -1.0 };
        }
        m
    };
    const H: [[f64; 4]; 4] = [
        [0.5, 0.5, 0.5, 0.5],
        [0.5, -0.5, 0.5, -0.5],
        [0.5, 0.5, -0.5, -0.5],
        [0.5, -0.5, -0.5, 0.5],
    ];
    let mut h = vec![vec![0.0; d]; d];
    for b in 0..d / 4 {
        for i in 0..4 {
            for j in 0..4 {
                h[4 * b + i][4 * b + j] = H[i][j];
            }
        }
    }
    let matmul = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
        (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| (0..d).map(|k| a[i][k] * b[k][j]).sum())
                    .collect()
            })
            .collect()
    };
    let p1 = signed_perm(rng);
    let p2 = signed_perm(rng);
    matmul(&p1, &matmul(&h, &p2))
}
