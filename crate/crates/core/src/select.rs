//! Teacher layer selection: top-k by knowledge quality (or one of its
//! components), the conventional stage-end baseline, and the one-to-one
//! teacher/student mapping matrix.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::LayerMetrics;
use crate::repr::LayerManifest;

/// Relative depths of the stage ends in common convolutional backbones.
/// Used for models without stage annotations.
pub const STAGELESS_RELATIVE_DEPTHS: [f64; 4] = [0.17, 0.40, 0.69, 0.89];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Kq,
    StageEnd,
    Manual,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Kq => "kq",
            Method::StageEnd => "stage_end",
            Method::Manual => "manual",
        })
    }
}

/// Ranking key for [`variant_select`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Criterion {
    S,
    I,
    E,
    #[serde(rename = "IE")]
    Ie,
    #[default]
    Q,
}

impl Criterion {
    pub fn key(self, m: &LayerMetrics) -> f64 {
        match self {
            Criterion::S => m.s,
            Criterion::I => m.i,
            Criterion::E => m.e,
            Criterion::Ie => m.ie(),
            Criterion::Q => m.q,
        }
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "S" => Criterion::S,
            "I" => Criterion::I,
            "E" => Criterion::E,
            "IE" => Criterion::Ie,
            "Q" => Criterion::Q,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown criterion {other:?} (expected S, I, E, IE or Q)"
                )))
            }
        })
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::S => "S",
            Criterion::I => "I",
            Criterion::E => "E",
            Criterion::Ie => "IE",
            Criterion::Q => "Q",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub method: Method,
    pub k: usize,
    /// `(layer, score)` sorted by score descending; empty for non-ranking methods.
    pub ranking: Vec<(u32, f64)>,
    /// Selected teacher layers, ascending.
    pub selected: Vec<u32>,
    /// `|L^T| x |L^S|` loss weights.
    pub mapping: Vec<Vec<f64>>,
}

/// `k x k` identity with unit weights.
pub fn identity_mapping(k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn rank_by(metrics: &[LayerMetrics], criterion: Criterion) -> Vec<(u32, f64)> {
    let mut ranking: Vec<(u32, f64)> = metrics
        .iter()
        .map(|m| (m.layer, criterion.key(m)))
        .collect();
    ranking.sort_by(|a, b| match b.1.total_cmp(&a.1) {
        Ordering::Equal => b.0.cmp(&a.0),
        other => other,
    });
    ranking
}

/// Layers sorted by `Q` descending; ties go to the deeper layer.
pub fn rank_layers(metrics: &[LayerMetrics]) -> Vec<(u32, f64)> {
    rank_by(metrics, Criterion::Q)
}

pub fn select_topk(metrics: &[LayerMetrics], k: usize) -> Result<SelectionResult> {
    variant_select(metrics, Criterion::Q, k)
}

/// Top-`k` layers by the chosen component, returned in ascending depth.
pub fn variant_select(
    metrics: &[LayerMetrics],
    criterion: Criterion,
    k: usize,
) -> Result<SelectionResult> {
    if k == 0 {
        return Err(Error::Selection("k must be >= 1".into()));
    }
    if k > metrics.len() {
        return Err(Error::Selection(format!(
            "k = {k} exceeds the {} analyzed layers",
            metrics.len()
        )));
    }
    let ranking = rank_by(metrics, criterion);
    let mut selected: Vec<u32> = ranking[..k].iter().map(|r| r.0).collect();
    selected.sort_unstable();
    selected.dedup();
    if selected.len() != k {
        return Err(Error::Selection(
            "duplicate layer indices in metrics".into(),
        ));
    }
    Ok(SelectionResult {
        method: Method::Kq,
        k,
        ranking,
        selected,
        mapping: identity_mapping(k),
    })
}

/// Conventional baseline: the last layer of each of the deepest `k` stages.
///
/// When the manifest has more than `k` stages, the terminal stage (which
/// ends at the classifier input rather than at a pooling step) is skipped.
/// Manifests without stage annotations fall back to
/// [`STAGELESS_RELATIVE_DEPTHS`].
pub fn stage_end_selection(manifest: &LayerManifest, k: usize) -> Result<SelectionResult> {
    let layers = manifest.layer_indices();
    if k == 0 || layers.len() < k {
        return Err(Error::Selection(format!(
            "need at least k = {k} layers, manifest has {}",
            layers.len()
        )));
    }
    let staged = manifest.entries.iter().all(|e| e.stage.is_some());
    let selected = if staged {
        let mut stage_ends: BTreeMap<u32, u32> = BTreeMap::new();
        for e in &manifest.entries {
            let end = stage_ends.entry(e.stage.unwrap()).or_insert(e.layer);
            *end = (*end).max(e.layer);
        }
        let mut ends: Vec<u32> = stage_ends.into_values().collect();
        if ends.len() < k {
            return Err(Error::Selection(format!(
                "manifest has {} stages, need k = {k}",
                ends.len()
            )));
        }
        if ends.len() > k {
            ends.pop();
        }
        ends.split_off(ends.len() - k)
    } else {
        relative_depth_selection(&layers, k)
    };
    Ok(SelectionResult {
        method: Method::StageEnd,
        k,
        ranking: Vec::new(),
        selected,
        mapping: identity_mapping(k),
    })
}

/// Depth fractions for `k` picks, interpolating the stage-end curve.
fn relative_depths(k: usize) -> Vec<f64> {
    if k == STAGELESS_RELATIVE_DEPTHS.len() {
        return STAGELESS_RELATIVE_DEPTHS.to_vec();
    }
    let knots: Vec<(f64, f64)> = std::iter::once((0.0, 0.0))
        .chain(
            STAGELESS_RELATIVE_DEPTHS
                .iter()
                .enumerate()
                .map(|(i, &f)| ((i + 1) as f64 / 4.0, f)),
        )
        .collect();
    (1..=k)
        .map(|j| {
            let x = j as f64 / k as f64;
            let w = knots.windows(2).find(|w| x <= w[1].0).unwrap();
            let t = (x - w[0].0) / (w[1].0 - w[0].0);
            w[0].1 + t * (w[1].1 - w[0].1)
        })
        .collect()
}

fn relative_depth_selection(layers: &[u32], k: usize) -> Vec<u32> {
    let deepest = *layers.last().unwrap() as f64;
    let mut taken = vec![false; layers.len()];
    let mut selected = Vec::with_capacity(k);
    for f in relative_depths(k) {
        let target = (f * deepest).floor();
        // Nearest untaken layer; ties go to the shallower one.
        let pos = (0..layers.len())
            .filter(|&p| !taken[p])
            .min_by(|&a, &b| {
                let da = (layers[a] as f64 - target).abs();
                let db = (layers[b] as f64 - target).abs();
                da.total_cmp(&db).then(a.cmp(&b))
            })
            .unwrap();
        taken[pos] = true;
        selected.push(layers[pos]);
    }
    selected.sort_unstable();
    selected
}

/// A user-chosen layer set.
pub fn manual_selection(layers: &[u32]) -> Result<SelectionResult> {
    let mut selected = layers.to_vec();
    selected.sort_unstable();
    selected.dedup();
    if selected.is_empty() || selected.len() != layers.len() {
        return Err(Error::Selection(
            "manual layers must be non-empty and distinct".into(),
        ));
    }
    let k = selected.len();
    Ok(SelectionResult {
        method: Method::Manual,
        k,
        ranking: Vec::new(),
        selected,
        mapping: identity_mapping(k),
    })
}
