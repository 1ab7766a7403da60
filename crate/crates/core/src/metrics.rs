//! Geometric statistics of one layer's representations and the composite
//! knowledge-quality score `Q = S + sqrt(I * E)`.
//!
//! * `S` (separation): mean within-class cosine minus mean between-class cosine.
//! * `I` (information): `(1 - minDPW) * avgSVDE`, within-class spread times the
//!   class-averaged normalized SVD entropy.
//! * `E` (efficiency): packing-bound radius `2 K minDistB` over the average
//!   norm, with `K = (N / pi)^(1 / (D - 1))` and `D` the global PCA embedding
//!   dimension.
//!
//! All arithmetic is done in `f64` regardless of storage precision.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::repr::RepresentationSet;

/// Added to cosine denominators so zero vectors give cosine 0.
pub const COSINE_EPS: f64 = 1e-12;
pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 0.95;
/// Slack on the cumulative-variance comparison so exact-rank inputs land on
/// the intended count despite rounding.
const VARIANCE_SLACK: f64 = 1e-12;
/// A spectrum whose total variance is below this fraction of the uncentered
/// energy is rounding noise around identical points.
const DEGENERATE_ENERGY_RATIO: f64 = 1e-20;

pub mod diag {
    pub const SINGLETON_CLASS: &str = "singleton class excluded";
    pub const EMPTY_CLASS: &str = "empty class excluded";
    pub const ZERO_VECTOR: &str = "zero vector present";
    pub const SUBSAMPLED: &str = "subsampled";
    pub const DEGENERATE_SPECTRUM: &str = "degenerate dimension";
    pub const DEGENERATE_EFFICIENCY: &str = "degenerate efficiency";
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    #[serde(rename = "avgDPW")]
    pub avg_dpw: f64,
    #[serde(rename = "avgDPB")]
    pub avg_dpb: f64,
    #[serde(rename = "minDPW")]
    pub min_dpw: f64,
    #[serde(rename = "minDistB")]
    pub min_dist_b: f64,
    #[serde(rename = "avgNorm")]
    pub avg_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub layer: u32,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "I")]
    pub i: f64,
    #[serde(rename = "E")]
    pub e: f64,
    #[serde(rename = "Q")]
    pub q: f64,
    #[serde(flatten)]
    pub pair: PairStats,
    #[serde(rename = "avgSVDE")]
    pub avg_svde: f64,
    #[serde(rename = "globalEmbedDim")]
    pub global_embed_dim: usize,
    #[serde(default)]
    pub diagnostics: Vec<String>,
}

impl LayerMetrics {
    /// `sqrt(I * E)`, the combined information-efficiency term.
    pub fn ie(&self) -> f64 {
        (self.i * self.e).sqrt()
    }
}

/// Compensated (Neumaier) running sum.
#[derive(Debug, Default, Clone, Copy)]
struct Sum {
    total: f64,
    carry: f64,
}

impl Sum {
    fn add(&mut self, v: f64) {
        let t = self.total + v;
        if self.total.abs() >= v.abs() {
            self.carry += (self.total - t) + v;
        } else {
            self.carry += (v - t) + self.total;
        }
        self.total = t;
    }

    fn value(self) -> f64 {
        self.total + self.carry
    }
}

/// Rows upcast to f64 together with their L2 norms.
struct Rows {
    dim: usize,
    data: Vec<f64>,
    norms: Vec<f64>,
}

impl Rows {
    fn new(set: &RepresentationSet) -> Self {
        let data: Vec<f64> = set.data().iter().map(|&v| v as f64).collect();
        let norms = data
            .chunks_exact(set.dim())
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        Self {
            dim: set.dim(),
            data,
            norms,
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Cosine (guarded) and Euclidean distance between rows `i` and `j`.
    fn cos_dist(&self, i: usize, j: usize) -> (f64, f64) {
        let (a, b) = (self.row(i), self.row(j));
        let (mut dot, mut sq) = (0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            dot += x * y;
            let d = x - y;
            sq += d * d;
        }
        let cos = (dot / (self.norms[i] * self.norms[j] + COSINE_EPS)).clamp(-1.0, 1.0);
        (cos, sq.sqrt())
    }

    fn cos(&self, i: usize, j: usize) -> f64 {
        let dot: f64 = self
            .row(i)
            .iter()
            .zip(self.row(j))
            .map(|(x, y)| x * y)
            .sum();
        (dot / (self.norms[i] * self.norms[j] + COSINE_EPS)).clamp(-1.0, 1.0)
    }
}

fn push_diag(diags: &mut Vec<String>, msg: String) {
    if !diags.contains(&msg) {
        diags.push(msg);
    }
}

fn pair_stats_inner(
    set: &RepresentationSet,
    cap: Option<usize>,
    seed: u64,
    diags: &mut Vec<String>,
) -> Result<PairStats> {
    let rows = Rows::new(set);
    let mut members = set.class_members();

    if rows.norms.iter().any(|&n| n == 0.0) {
        push_diag(diags, diag::ZERO_VECTOR.into());
    }

    if let Some(cap) = cap {
        let cap = cap.max(2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut any = false;
        for m in members.iter_mut().filter(|m| m.len() > cap) {
            let mut picked: Vec<usize> = index::sample(&mut rng, m.len(), cap)
                .into_iter()
                .map(|k| m[k])
                .collect();
            picked.sort_unstable();
            *m = picked;
            any = true;
        }
        if any {
            push_diag(
                diags,
                format!(
                    "{} to {cap} per class (minima are upper-biased)",
                    diag::SUBSAMPLED
                ),
            );
        }
    }

    for (c, m) in members.iter().enumerate() {
        match m.len() {
            0 => push_diag(diags, format!("{}: class {c}", diag::EMPTY_CLASS)),
            1 => push_diag(diags, format!("{}: class {c}", diag::SINGLETON_CLASS)),
            _ => {}
        }
    }

    let populated: Vec<usize> = (0..members.len())
        .filter(|&c| !members[c].is_empty())
        .collect();
    if populated.len() < 2 {
        return Err(Error::TooFewClasses(populated.len()));
    }

    // Per-class (mean cosine, min |cosine|); results are collected in class
    // order so the reduction below is independent of scheduling.
    let within: Vec<(f64, f64)> = members
        .par_iter()
        .filter(|m| m.len() >= 2)
        .map(|m| {
            let mut sum = Sum::default();
            let mut min_abs = f64::INFINITY;
            for (a, &i) in m.iter().enumerate() {
                for &j in &m[a + 1..] {
                    let c = rows.cos(i, j);
                    sum.add(c);
                    min_abs = min_abs.min(c.abs());
                }
            }
            let pairs = (m.len() * (m.len() - 1) / 2) as f64;
            (sum.value() / pairs, min_abs)
        })
        .collect();
    if within.is_empty() {
        return Err(Error::NoWithinClassPairs);
    }

    let class_pairs: Vec<(usize, usize)> = populated
        .iter()
        .enumerate()
        .flat_map(|(a, &c)| populated[a + 1..].iter().map(move |&c2| (c, c2)))
        .collect();
    let between: Vec<(f64, f64)> = class_pairs
        .par_iter()
        .map(|&(c, c2)| {
            let mut sum = Sum::default();
            let mut min_dist = f64::INFINITY;
            for &i in &members[c] {
                for &j in &members[c2] {
                    let (cos, dist) = rows.cos_dist(i, j);
                    sum.add(cos);
                    min_dist = min_dist.min(dist);
                }
            }
            let pairs = (members[c].len() * members[c2].len()) as f64;
            (sum.value() / pairs, min_dist)
        })
        .collect();

    let mean = |it: &mut dyn Iterator<Item = f64>, n: usize| {
        let mut s = Sum::default();
        it.for_each(|v| s.add(v));
        s.value() / n as f64
    };
    let avg_dpw = mean(&mut within.iter().map(|w| w.0), within.len());
    let min_dpw = mean(&mut within.iter().map(|w| w.1), within.len());
    let avg_dpb = mean(&mut between.iter().map(|b| b.0), between.len());
    let min_dist_b = mean(&mut between.iter().map(|b| b.1), between.len());
    let avg_norm = mean(&mut rows.norms.iter().copied(), rows.norms.len());

    Ok(PairStats {
        avg_dpw,
        avg_dpb,
        min_dpw,
        min_dist_b,
        avg_norm,
    })
}

/// The five pairwise statistics. With `cap`, classes larger than `cap` are
/// replaced by a seeded uniform subsample of that size for the pair terms;
/// `avgNorm` always uses every row.
pub fn pairwise_stats(set: &RepresentationSet, cap: Option<usize>, seed: u64) -> Result<PairStats> {
    pair_stats_inner(set, cap, seed, &mut Vec::new())
}

/// Spectrum summary of one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassEntropy {
    /// Shannon entropy of the normalized variance spectrum over the leading
    /// `embed_dim` components, divided by `ln(N_c)` and clamped to `[0, 1]`.
    pub entropy: f64,
    pub embed_dim: usize,
    pub degenerate: bool,
}

/// Variance spectrum (squared singular values of the mean-centered rows),
/// sorted descending. Returns `None` when the rows are identical up to
/// rounding.
fn centered_spectrum(mut x: DMatrix<f64>) -> Option<Vec<f64>> {
    let (n, d) = x.shape();
    if n < 2 {
        return None;
    }
    let energy = x.norm_squared();
    for mut col in x.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let total = x.norm_squared();
    if total == 0.0 || total <= DEGENERATE_ENERGY_RATIO * energy {
        return None;
    }
    let gram = if n <= d {
        &x * x.transpose()
    } else {
        x.tr_mul(&x)
    };
    let mut spectrum: Vec<f64> = SymmetricEigen::new(gram)
        .eigenvalues
        .iter()
        .map(|&v| v.max(0.0))
        .collect();
    spectrum.sort_unstable_by(|a, b| b.total_cmp(a));
    Some(spectrum)
}

/// Smallest `k` whose leading `k` components explain at least `threshold` of
/// the variance.
fn components_for(spectrum: &[f64], threshold: f64) -> usize {
    let total: f64 = spectrum.iter().sum();
    if total <= 0.0 {
        return 0;
    }
    let mut acc = 0.0;
    for (k, &v) in spectrum.iter().enumerate() {
        acc += v;
        if acc / total >= threshold - VARIANCE_SLACK {
            return k + 1;
        }
    }
    spectrum.len()
}

/// Normalized SVD entropy and PCA embedding dimension of one class.
pub fn class_svd_entropy(class_data: &DMatrix<f64>, variance_threshold: f64) -> ClassEntropy {
    let n = class_data.nrows();
    let degenerate = ClassEntropy {
        entropy: 0.0,
        embed_dim: 0,
        degenerate: true,
    };
    let Some(spectrum) = centered_spectrum(class_data.clone()) else {
        return degenerate;
    };
    let embed_dim = components_for(&spectrum, variance_threshold);
    let total: f64 = spectrum.iter().sum();
    let h: f64 = spectrum[..embed_dim]
        .iter()
        .map(|&v| v / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    ClassEntropy {
        entropy: (h / (n as f64).ln()).clamp(0.0, 1.0),
        embed_dim,
        degenerate: false,
    }
}

fn class_matrix(set: &RepresentationSet, members: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(members.len(), set.dim(), |r, c| {
        set.row(members[r])[c] as f64
    })
}

fn avg_svd_entropy_inner(set: &RepresentationSet, threshold: f64, diags: &mut Vec<String>) -> f64 {
    let members = set.class_members();
    let per_class: Vec<ClassEntropy> = members
        .par_iter()
        .map(|m| class_svd_entropy(&class_matrix(set, m), threshold))
        .collect();
    for (c, (m, e)) in members.iter().zip(&per_class).enumerate() {
        if m.len() >= 2 && e.degenerate {
            push_diag(
                diags,
                format!("{}: class {c} spectrum", diag::DEGENERATE_SPECTRUM),
            );
        }
    }
    let mut sum = Sum::default();
    per_class.iter().for_each(|e| sum.add(e.entropy));
    sum.value() / per_class.len() as f64
}

/// Mean of the per-class normalized SVD entropies over all `C` classes;
/// singleton and empty classes contribute 0.
pub fn avg_svd_entropy(set: &RepresentationSet) -> f64 {
    avg_svd_entropy_inner(set, DEFAULT_VARIANCE_THRESHOLD, &mut Vec::new())
}

/// PCA embedding dimension of all rows pooled together.
pub fn global_embedding_dim(set: &RepresentationSet, variance_threshold: f64) -> usize {
    let all: Vec<usize> = (0..set.len()).collect();
    centered_spectrum(class_matrix(set, &all)).map_or(0, |s| components_for(&s, variance_threshold))
}

pub fn separation(p: &PairStats) -> f64 {
    p.avg_dpw - p.avg_dpb
}

pub fn information(p: &PairStats, avg_svde: f64) -> f64 {
    (1.0 - p.min_dpw) * avg_svde
}

/// Radius of the smallest origin-centred hypersphere whose non-negative
/// orthant fits `n` points at mutual distance `dmin`:
/// `2 dmin (n / pi)^(1 / (D - 1))`.
pub fn packing_radius(n: usize, dmin: f64, dim: usize) -> Result<f64> {
    if dim < 2 {
        return Err(Error::DimensionTooSmall(dim));
    }
    if n == 0 {
        return Err(Error::InvalidArgument(
            "packing needs at least one point".into(),
        ));
    }
    if !(dmin > 0.0 && dmin.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "minimum distance must be positive, got {dmin}"
        )));
    }
    Ok(2.0 * dmin * packing_factor(n, dim))
}

/// `K = (n / pi)^(1 / (D - 1))`.
fn packing_factor(n: usize, dim: usize) -> f64 {
    (n as f64 / std::f64::consts::PI).powf(1.0 / (dim as f64 - 1.0))
}

pub fn efficiency_is_degenerate(p: &PairStats, global_dim: usize) -> bool {
    global_dim < 2 || p.min_dist_b <= 0.0
}

/// `E = 2 K minDistB / avgNorm`; 0 when `D < 2` or `minDistB = 0`.
pub fn efficiency(p: &PairStats, global_dim: usize, n: usize) -> Result<f64> {
    if p.avg_norm <= 0.0 {
        return Err(Error::AllZeroRepresentations);
    }
    if efficiency_is_degenerate(p, global_dim) {
        return Ok(0.0);
    }
    Ok(2.0 * packing_factor(n, global_dim) * p.min_dist_b / p.avg_norm)
}

pub fn knowledge_quality(s: f64, i: f64, e: f64) -> f64 {
    s + (i * e).sqrt()
}

/// Computes every statistic and the composite score for one layer.
/// Deterministic for a fixed `seed`.
pub fn analyze_layer(
    set: &RepresentationSet,
    cap: Option<usize>,
    seed: u64,
) -> Result<LayerMetrics> {
    let mut diagnostics = Vec::new();
    let pair = pair_stats_inner(set, cap, seed, &mut diagnostics)?;
    let avg_svde = avg_svd_entropy_inner(set, DEFAULT_VARIANCE_THRESHOLD, &mut diagnostics);
    let global_embed_dim = global_embedding_dim(set, DEFAULT_VARIANCE_THRESHOLD);
    let e = efficiency(&pair, global_embed_dim, set.len())?;
    if efficiency_is_degenerate(&pair, global_embed_dim) {
        push_diag(&mut diagnostics, diag::DEGENERATE_EFFICIENCY.into());
    }
    let s = separation(&pair);
    let i = information(&pair, avg_svde);
    let q = knowledge_quality(s, i, e);
    Ok(LayerMetrics {
        layer: set.layer_index(),
        s,
        i,
        e,
        q,
        pair,
        avg_svde,
        global_embed_dim,
        diagnostics,
    })
}

/// Metrics for several layers, analyzed concurrently; the output keeps the
/// input order.
pub fn analyze_layers(
    sets: &[RepresentationSet],
    cap: Option<usize>,
    seed: u64,
) -> Result<Vec<LayerMetrics>> {
    sets.par_iter()
        .map(|s| analyze_layer(s, cap, seed))
        .collect()
}
