//! Experiment grid: train (or synthesize) a teacher per seed, score and
//! select its layers, distill students under each cell's recipe and
//! selection, and summarize accuracies and ARI.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::{DataSpec, Dataset, TraceSpec};
use super::loss::{KlDirection, ProjectorDirection, Recipe, RecipeKind};
use super::net::Network;
use super::train::{
    ari, pairs_from_mapping, train, train_classifier, RunRecord, RunSpec, TeacherFeatures,
    TrainOptions,
};
use crate::error::{Error, Result};
use crate::metrics::{analyze_layer, LayerMetrics};
use crate::repr::{LayerManifest, ManifestEntry};
use crate::select::{
    manual_selection, stage_end_selection, variant_select, Criterion, SelectionResult,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TeacherSpec {
    /// An MLP trained with cross-entropy for every seed.
    Mlp {
        hidden: Vec<usize>,
        /// Stage id of every hidden layer, for stage-end selection.
        #[serde(default)]
        stages: Option<Vec<u32>>,
        #[serde(default)]
        epochs: Option<usize>,
        #[serde(default)]
        max_lr: Option<f64>,
    },
    /// Synthetic per-sample features with no logits; the trace seed is
    /// offset by the run seed.
    Trace(TraceSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentSpec {
    pub hidden: Vec<usize>,
    /// Student layers receiving feature hints (activated-layer indices).
    pub layers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum SelectionSpec {
    Kq {
        #[serde(default = "default_criterion")]
        criterion: Criterion,
    },
    StageEnd,
    Manual {
        layers: Vec<u32>,
    },
}

fn default_criterion() -> Criterion {
    Criterion::Q
}

impl SelectionSpec {
    fn default_for(kind: RecipeKind) -> Self {
        if kind.default_selection_is_kq() {
            SelectionSpec::Kq {
                criterion: Criterion::Q,
            }
        } else {
            SelectionSpec::StageEnd
        }
    }

    fn label(&self) -> String {
        match self {
            SelectionSpec::Kq { criterion } => format!("kq:{criterion}"),
            SelectionSpec::StageEnd => "stage_end".into(),
            SelectionSpec::Manual { layers } => format!("manual:{layers:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub name: String,
    pub recipe: RecipeKind,
    /// Defaults to KQ selection for the `ours` family and stage ends
    /// otherwise.
    #[serde(default)]
    pub selection: Option<SelectionSpec>,
}

impl CellSpec {
    pub fn selection(&self) -> SelectionSpec {
        self.selection
            .clone()
            .unwrap_or_else(|| SelectionSpec::default_for(self.recipe))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub dataset: DataSpec,
    pub teacher: TeacherSpec,
    pub student: StudentSpec,
    pub cells: Vec<CellSpec>,
    /// Cell that ARI values are measured against.
    #[serde(default)]
    pub reference: Option<String>,
    /// Cell used as the no-distillation baseline for ARI.
    #[serde(default)]
    pub baseline: Option<String>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub max_lr: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_feature_weight")]
    pub feature_weight: f64,
    #[serde(default)]
    pub kl_direction: KlDirection,
    #[serde(default)]
    pub projector: ProjectorDirection,
    #[serde(default)]
    pub teacher_pooling: bool,
    /// Per-class cap for the pairwise metric terms.
    #[serde(default)]
    pub metric_cap: Option<usize>,
    /// Run cells and seeds concurrently.
    #[serde(default)]
    pub parallel: bool,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_epochs() -> usize {
    50
}
fn default_batch() -> usize {
    128
}
fn default_lr() -> f64 {
    0.01
}
fn default_temperature() -> f64 {
    4.0
}
fn default_feature_weight() -> f64 {
    1.0
}

impl DistillConfig {
    /// Parses JSON, or TOML when `ext` is `toml`.
    pub fn parse(text: &str, ext: Option<&str>) -> Result<Self> {
        let cfg: Self = if ext == Some("toml") {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            serde_json::from_str(text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.extension().and_then(|e| e.to_str()))
    }

    /// SHA-256 of the canonical (sorted-key, compact) JSON form.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn k(&self) -> usize {
        self.student.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.cells.is_empty() {
            return bad("at least one cell is required".into());
        }
        if self.epochs == 0 || self.batch_size == 0 || !(self.max_lr > 0.0) {
            return bad("epochs, batch_size and max_lr must be positive".into());
        }
        let mut names: Vec<&str> = self.cells.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("cell names must be unique".into());
        }
        for name in [&self.reference, &self.baseline].into_iter().flatten() {
            if !names.contains(&name.as_str()) {
                return bad(format!("no cell named {name:?}"));
            }
        }
        let s = &self.student;
        if s.layers.is_empty() {
            return bad("student.layers must name at least one layer".into());
        }
        if s.layers.windows(2).any(|w| w[0] >= w[1]) {
            return bad("student.layers must be strictly increasing".into());
        }
        if s.layers.iter().any(|&l| l == 0 || l > s.hidden.len()) {
            return bad(format!("student.layers must lie in 1..={}", s.hidden.len()));
        }
        let teacher_layers = match &self.teacher {
            TeacherSpec::Mlp { hidden, stages, .. } => {
                if let Some(st) = stages {
                    if st.len() != hidden.len() {
                        return bad("teacher.stages needs one entry per hidden layer".into());
                    }
                }
                hidden.len()
            }
            TeacherSpec::Trace(t) => {
                if let Some(c) = self.cells.iter().find(|c| c.recipe.uses_kl()) {
                    return bad(format!(
                        "cell {:?} uses KL but a trace teacher has no logits",
                        c.name
                    ));
                }
                t.layers.len()
            }
        };
        if self.k() > teacher_layers {
            return bad(format!(
                "{} student layers but the teacher has {teacher_layers}",
                self.k()
            ));
        }
        for cell in &self.cells {
            let mut r = self.recipe(cell.recipe);
            r.kind = cell.recipe;
            r.validate()?;
            if let SelectionSpec::Manual { layers } = cell.selection() {
                if layers.len() != self.k() {
                    return bad(format!(
                        "cell {:?}: manual selection needs {} layers",
                        cell.name,
                        self.k()
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn recipe(&self, kind: RecipeKind) -> Recipe {
        let mut r = Recipe::new(kind);
        r.temperature = self.temperature;
        if kind.uses_features() {
            r.feature_weight = self.feature_weight;
        }
        r.kl_direction = self.kl_direction;
        r.projector = self.projector;
        r.teacher_pooling = self.teacher_pooling;
        r
    }

    fn options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            max_lr: self.max_lr,
            seed,
            ..Default::default()
        }
    }
}

/// Per-seed teacher: its training record (for trained teachers), the
/// metrics of every layer and the selections used by the cells.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherRecord {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<RunRecord>,
    pub metrics: Vec<LayerMetrics>,
    /// Layers that could not be scored (for example all-zero activations)
    /// and are left out of metric-based selection.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded: Vec<(u32, String)>,
    pub selections: Vec<(String, SelectionResult)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellRun {
    pub seed: u64,
    pub selected: Vec<u32>,
    pub record: RunRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub name: String,
    pub recipe: RecipeKind,
    pub selection: String,
    pub runs: Vec<CellRun>,
    /// Mean final test accuracy; absent when any run failed to converge.
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub failed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AriEntry {
    pub cell: String,
    pub reference: String,
    pub baseline: String,
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub teachers: Vec<TeacherRecord>,
    pub cells: Vec<CellResult>,
    pub ari: Vec<AriEntry>,
}

impl ExperimentResult {
    pub fn cell(&self, name: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.name == name)
    }

    pub fn any_failed(&self) -> bool {
        self.cells.iter().any(|c| c.failed)
    }
}

/// Mean and sample standard deviation; the deviation of one value is 0.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

struct Teacher {
    record: TeacherRecord,
    features: TeacherFeatures,
}

fn build_teacher(cfg: &DistillConfig, data: &Dataset, seed: u64) -> Result<Teacher> {
    let (features, training, test_acc, stages) = match &cfg.teacher {
        TeacherSpec::Mlp {
            hidden,
            stages,
            epochs,
            max_lr,
        } => {
            let mut opts = cfg.options(seed);
            opts.epochs = epochs.unwrap_or(cfg.epochs);
            opts.max_lr = max_lr.unwrap_or(cfg.max_lr);
            let (net, record): (Network, RunRecord) = train_classifier(data, hidden, opts)?;
            let features = TeacherFeatures::from_network(&net, &data.train_x)?;
            let acc = record.final_test_acc;
            (features, Some(record), Some(acc), stages.clone())
        }
        TeacherSpec::Trace(spec) => {
            let mut spec = spec.clone();
            spec.seed = spec.seed.wrapping_add(seed);
            let sets = spec.generate(&data.train_y, data.classes)?;
            (TeacherFeatures::from_sets(&sets), None, None, None)
        }
    };
    let sets = features.to_sets(&data.train_y, data.classes)?;
    let analyzed: Vec<Result<LayerMetrics>> = sets
        .par_iter()
        .map(|s| analyze_layer(s, cfg.metric_cap, seed))
        .collect();
    let mut metrics = Vec::with_capacity(analyzed.len());
    let mut excluded = Vec::new();
    for (set, m) in sets.iter().zip(analyzed) {
        match m {
            Ok(m) => metrics.push(m),
            Err(e) => excluded.push((set.layer_index(), e.to_string())),
        }
    }

    let manifest = LayerManifest::new(
        sets.iter()
            .enumerate()
            .map(|(i, s)| ManifestEntry {
                layer: s.layer_index(),
                file: String::new(),
                stage: stages.as_ref().map(|st| st[i]),
                desc: None,
            })
            .collect(),
        ".",
    );
    let mut selections: Vec<(String, SelectionResult)> = Vec::new();
    for cell in &cfg.cells {
        let spec = cell.selection();
        let label = spec.label();
        if !cell.recipe.uses_features() || selections.iter().any(|(l, _)| *l == label) {
            continue;
        }
        let sel = match &spec {
            SelectionSpec::Kq { criterion } => variant_select(&metrics, *criterion, cfg.k())?,
            SelectionSpec::StageEnd => stage_end_selection(&manifest, cfg.k())?,
            SelectionSpec::Manual { layers } => manual_selection(layers)?,
        };
        selections.push((label, sel));
    }
    Ok(Teacher {
        record: TeacherRecord {
            seed,
            test_acc,
            training,
            metrics,
            excluded,
            selections,
        },
        features,
    })
}

fn run_cell(
    cfg: &DistillConfig,
    data: &Dataset,
    teacher: &Teacher,
    cell: &CellSpec,
) -> Result<CellRun> {
    let seed = teacher.record.seed;
    let recipe = cfg.recipe(cell.recipe);
    let (selected, pairs) = if cell.recipe.uses_features() {
        let label = cell.selection().label();
        let sel = &teacher
            .record
            .selections
            .iter()
            .find(|(l, _)| *l == label)
            .expect("selection computed for every feature cell")
            .1;
        let pairs = pairs_from_mapping(&sel.selected, &cfg.student.layers, &sel.mapping)?;
        (sel.selected.clone(), pairs)
    } else {
        (Vec::new(), Vec::new())
    };
    let spec = RunSpec {
        recipe,
        student_hidden: cfg.student.hidden.clone(),
        pairs,
        teacher: Some(&teacher.features),
        options: cfg.options(seed),
    };
    let (_, record) = train(data, &spec)?;
    Ok(CellRun {
        seed,
        selected,
        record,
    })
}

/// Runs the whole grid. Cells that fail to converge are reported, not
/// raised; configuration and data errors are raised.
pub fn run_experiment(cfg: &DistillConfig, base_dir: &Path) -> Result<ExperimentResult> {
    cfg.validate()?;
    let data = cfg.dataset.load(base_dir)?;
    let teachers: Vec<Teacher> = if cfg.parallel {
        cfg.seeds
            .par_iter()
            .map(|&s| build_teacher(cfg, &data, s))
            .collect::<Result<_>>()?
    } else {
        cfg.seeds
            .iter()
            .map(|&s| build_teacher(cfg, &data, s))
            .collect::<Result<_>>()?
    };

    let jobs: Vec<(usize, usize)> = (0..cfg.cells.len())
        .flat_map(|c| (0..teachers.len()).map(move |t| (c, t)))
        .collect();
    let run = |&(c, t): &(usize, usize)| run_cell(cfg, &data, &teachers[t], &cfg.cells[c]);
    let runs: Vec<CellRun> = if cfg.parallel {
        jobs.par_iter().map(run).collect::<Result<_>>()?
    } else {
        jobs.iter().map(run).collect::<Result<_>>()?
    };

    let mut runs = runs.into_iter();
    let cells: Vec<CellResult> = cfg
        .cells
        .iter()
        .map(|cell| {
            let runs: Vec<CellRun> = runs.by_ref().take(teachers.len()).collect();
            let failed = runs.iter().any(|r| r.record.failed_to_converge);
            let accs: Vec<f64> = runs.iter().map(|r| r.record.final_test_acc).collect();
            let (mean, sd) = if failed {
                (None, None)
            } else {
                let (m, s) = mean_sd(&accs);
                (Some(m), Some(s))
            };
            CellResult {
                name: cell.name.clone(),
                recipe: cell.recipe,
                selection: if cell.recipe.uses_features() {
                    cell.selection().label()
                } else {
                    "none".into()
                },
                runs,
                mean,
                sd,
                failed,
            }
        })
        .collect();

    let mut ari_table = Vec::new();
    if let (Some(reference), Some(baseline)) = (&cfg.reference, &cfg.baseline) {
        let find = |n: &str| {
            cells
                .iter()
                .find(|c| c.name == n)
                .expect("validated cell name")
        };
        let (r, b) = (find(reference), find(baseline));
        for cell in cells
            .iter()
            .filter(|c| c.name != *reference && c.name != *baseline)
        {
            let (value, flag) = match (cell.mean, r.mean, b.mean) {
                (Some(a1), Some(a2), Some(a0)) => match ari(a1, a2, a0) {
                    Ok(v) => (Some(v), None),
                    Err(e) => (None, Some(e.to_string())),
                },
                _ => (None, Some("failed to converge".to_string())),
            };
            ari_table.push(AriEntry {
                cell: cell.name.clone(),
                reference: reference.clone(),
                baseline: baseline.clone(),
                value,
                flag,
            });
        }
    }

    Ok(ExperimentResult {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.hash(),
        seeds: cfg.seeds.clone(),
        teachers: teachers.into_iter().map(|t| t.record).collect(),
        cells,
        ari: ari_table,
    })
}
