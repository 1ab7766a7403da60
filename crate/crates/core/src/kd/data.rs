//! Desk-scale datasets: Gaussian blobs, RDMP-backed inputs, and synthetic
//! teacher traces with controllable label mixing.

use std::path::PathBuf;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::repr::{self, RepresentationSet};

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train_x: DMatrix<f64>,
    pub train_y: Vec<usize>,
    pub test_x: DMatrix<f64>,
    pub test_y: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn input_dim(&self) -> usize {
        self.train_x.ncols()
    }

    pub fn train_len(&self) -> usize {
        self.train_y.len()
    }

    /// The training inputs as a layer-0 representation set.
    pub fn train_inputs(&self) -> Result<RepresentationSet> {
        matrix_to_set(0, &self.train_x, &self.train_y, self.classes)
    }
}

pub fn matrix_to_set(
    layer: u32,
    x: &DMatrix<f64>,
    labels: &[usize],
    classes: usize,
) -> Result<RepresentationSet> {
    let mut data = Vec::with_capacity(x.len());
    for r in 0..x.nrows() {
        data.extend(x.row(r).iter().map(|&v| v as f32));
    }
    RepresentationSet::new(
        layer,
        x.ncols(),
        classes as u32,
        labels.iter().map(|&l| l as u32).collect(),
        data,
    )
}

pub fn set_to_matrix(set: &RepresentationSet) -> DMatrix<f64> {
    DMatrix::from_row_iterator(set.len(), set.dim(), set.data().iter().map(|&v| v as f64))
}

/// Isotropic Gaussian clusters; each class owns `clusters_per_class`
/// cluster centres drawn from `N(0, center_scale^2 I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    pub samples: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "one")]
    pub clusters_per_class: usize,
    #[serde(default = "one_f")]
    pub center_scale: f64,
    #[serde(default = "one_f")]
    pub cluster_std: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_test_fraction() -> f64 {
    0.2
}
fn one() -> usize {
    1
}
fn one_f() -> f64 {
    1.0
}

impl BlobSpec {
    pub fn generate(&self) -> Result<Dataset> {
        if self.classes < 2 || self.dim == 0 || self.clusters_per_class == 0 {
            return Err(Error::Config(
                "blobs need >= 2 classes, dim >= 1, >= 1 cluster".into(),
            ));
        }
        if !(0.0 < self.test_fraction && self.test_fraction < 1.0) {
            return Err(Error::Config("test_fraction must be in (0, 1)".into()));
        }
        let n_test = (self.samples as f64 * self.test_fraction).round() as usize;
        if self.samples < 2 * self.classes || n_test < 1 || self.samples - n_test < 2 {
            return Err(Error::Config(format!("too few samples ({})", self.samples)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let centers: Vec<Vec<f64>> = (0..self.classes * self.clusters_per_class)
            .map(|_| {
                (0..self.dim)
                    .map(|_| self.center_scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let noise = Normal::new(0.0, self.cluster_std)
            .map_err(|e| Error::Config(format!("cluster_std: {e}")))?;
        let mut rows = Vec::with_capacity(self.samples);
        for i in 0..self.samples {
            let class = i % self.classes;
            let cluster = rng.random_range(0..self.clusters_per_class);
            let center = &centers[class * self.clusters_per_class + cluster];
            let x: Vec<f64> = center.iter().map(|c| c + noise.sample(&mut rng)).collect();
            rows.push((x, class));
        }
        rows.shuffle(&mut rng);
        let (test, train) = rows.split_at(n_test);
        let to_matrix = |part: &[(Vec<f64>, usize)]| {
            DMatrix::from_row_iterator(
                part.len(),
                self.dim,
                part.iter().flat_map(|r| r.0.iter().copied()),
            )
        };
        Ok(Dataset {
            train_x: to_matrix(train),
            train_y: train.iter().map(|r| r.1).collect(),
            test_x: to_matrix(test),
            test_y: test.iter().map(|r| r.1).collect(),
            classes: self.classes,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    Blobs(BlobSpec),
    /// Inputs stored as layer-0 RDMP files.
    Rdmp {
        train: PathBuf,
        test: PathBuf,
    },
}

impl DataSpec {
    pub fn load(&self, base_dir: &std::path::Path) -> Result<Dataset> {
        match self {
            DataSpec::Blobs(spec) => spec.generate(),
            DataSpec::Rdmp { train, test } => {
                let train = repr::read_dump(base_dir.join(train))?;
                let test = repr::read_dump(base_dir.join(test))?;
                if train.dim() != test.dim() || train.classes() != test.classes() {
                    return Err(Error::Config(
                        "train and test inputs differ in shape".into(),
                    ));
                }
                Ok(Dataset {
                    train_x: set_to_matrix(&train),
                    train_y: train.labels().iter().map(|&l| l as usize).collect(),
                    test_x: set_to_matrix(&test),
                    test_y: test.labels().iter().map(|&l| l as usize).collect(),
                    classes: train.classes() as usize,
                })
            }
        }
    }
}

/// One layer of a synthetic teacher trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceLayer {
    /// Probability that a sample is represented at its partner class's centre.
    pub mixing: f64,
    /// Standard deviation of the isotropic jitter around the centre.
    pub noise: f64,
}

/// Per-sample features for a made-up teacher: every layer places sample `i`
/// near a non-negative class centre, except that with probability `mixing`
/// it uses the centre of the partner class (`c ^ 1`). Features pass through a
/// ReLU so they live in activated space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSpec {
    pub width: usize,
    pub layers: Vec<TraceLayer>,
    #[serde(default)]
    pub seed: u64,
}

impl TraceSpec {
    /// Layer sets indexed `1..=layers.len()`, aligned with `labels`.
    pub fn generate(&self, labels: &[usize], classes: usize) -> Result<Vec<RepresentationSet>> {
        if self.width == 0 || self.layers.is_empty() {
            return Err(Error::Config(
                "trace needs width >= 1 and at least one layer".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let partner = |c: usize| if (c ^ 1) < classes { c ^ 1 } else { c };
        self.layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let centers: Vec<Vec<f64>> = (0..classes)
                    .map(|_| {
                        (0..self.width)
                            .map(|_| rng.sample::<f64, _>(StandardNormal).abs())
                            .collect()
                    })
                    .collect();
                let mut data = Vec::with_capacity(labels.len() * self.width);
                for &y in labels {
                    let c = if rng.random::<f64>() < layer.mixing {
                        partner(y)
                    } else {
                        y
                    };
                    for &mu in &centers[c] {
                        let v = mu + layer.noise * rng.sample::<f64, _>(StandardNormal);
                        data.push(v.max(0.0) as f32);
                    }
                }
                RepresentationSet::new(
                    l as u32 + 1,
                    self.width,
                    classes as u32,
                    labels.iter().map(|&y| y as u32).collect(),
                    data,
                )
            })
            .collect()
    }
}
