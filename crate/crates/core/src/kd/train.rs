//! Single training runs: plain cross-entropy training and feature
//! distillation from precomputed teacher features.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{set_to_matrix, Dataset};
use super::loss::{
    ce_loss, feature_loss, kl_vkd_loss, total_loss, LogitRouting, Projector, Recipe, RecipeKind,
};
use super::net::{backward, forward_capture, predict, GradientPlan, Network};
use super::optim::{adam_step, AdamConfig, AdamState, OneCycle};
use crate::error::{Error, Result};
use crate::repr::RepresentationSet;

/// Consecutive below-chance epochs that mark a run as failed.
pub const STALL_EPOCHS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Let the one-cycle momentum drive Adam's `beta1`.
    pub cycle_momentum: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            max_lr: 0.01,
            seed: 0,
            adam: AdamConfig::default(),
            cycle_momentum: true,
        }
    }
}

/// Teacher activations over the training split, by activated-layer index,
/// plus the teacher logits when available. The teacher itself is never
/// touched during distillation.
#[derive(Debug, Clone, Default)]
pub struct TeacherFeatures {
    pub layers: BTreeMap<u32, DMatrix<f64>>,
    pub logits: Option<DMatrix<f64>>,
}

impl TeacherFeatures {
    pub fn from_network(net: &Network, x: &DMatrix<f64>) -> Result<Self> {
        let cache = forward_capture(net, x)?;
        let layers = (1..=net.hidden_layers())
            .map(|i| (i as u32, cache.activation(i).clone()))
            .collect();
        Ok(Self {
            layers,
            logits: Some(cache.logits().clone()),
        })
    }

    pub fn from_sets(sets: &[RepresentationSet]) -> Self {
        Self {
            layers: sets
                .iter()
                .map(|s| (s.layer_index(), set_to_matrix(s)))
                .collect(),
            logits: None,
        }
    }

    pub fn rows(&self) -> Option<usize> {
        self.layers.values().next().map(DMatrix::nrows)
    }

    /// Representation sets of every layer, labelled with the training labels.
    pub fn to_sets(&self, labels: &[usize], classes: usize) -> Result<Vec<RepresentationSet>> {
        self.layers
            .iter()
            .map(|(&l, m)| super::data::matrix_to_set(l, m, labels, classes))
            .collect()
    }
}

/// One teacher/student layer pair and its loss weight `A_ij`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeaturePair {
    pub teacher_layer: u32,
    pub student_layer: usize,
    pub weight: f64,
}

/// Pairs from a mapping matrix between `teacher_layers` (rows) and
/// `student_layers` (columns); zero weights are dropped.
pub fn pairs_from_mapping(
    teacher_layers: &[u32],
    student_layers: &[usize],
    mapping: &[Vec<f64>],
) -> Result<Vec<FeaturePair>> {
    if mapping.len() != teacher_layers.len()
        || mapping.iter().any(|row| row.len() != student_layers.len())
    {
        return Err(Error::Config(format!(
            "mapping must be {} x {}",
            teacher_layers.len(),
            student_layers.len()
        )));
    }
    let mut pairs = Vec::new();
    for (i, row) in mapping.iter().enumerate() {
        for (j, &w) in row.iter().enumerate() {
            if w < 0.0 {
                return Err(Error::Config("mapping weights must be non-negative".into()));
            }
            if w != 0.0 {
                pairs.push(FeaturePair {
                    teacher_layer: teacher_layers[i],
                    student_layer: student_layers[j],
                    weight: w,
                });
            }
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub ce: Vec<f64>,
    pub kl: Vec<f64>,
    pub feature: Vec<f64>,
    pub total: Vec<f64>,
}

/// Outcome of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub recipe: RecipeKind,
    pub train_acc: Vec<f64>,
    pub test_acc: Vec<f64>,
    pub loss: LossTrace,
    pub final_test_acc: f64,
    pub failed_to_converge: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

pub fn accuracy(net: &Network, x: &DMatrix<f64>, y: &[usize]) -> Result<f64> {
    let logits = predict(net, x)?;
    let correct = logits
        .row_iter()
        .zip(y)
        .filter(|(row, &label)| row.transpose().argmax().0 == label)
        .count();
    Ok(correct as f64 / y.len() as f64)
}

fn gather(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |r, c| m[(idx[r], c)])
}

/// Everything a single run needs besides the data.
#[derive(Debug, Clone)]
pub struct RunSpec<'a> {
    pub recipe: Recipe,
    pub student_hidden: Vec<usize>,
    pub pairs: Vec<FeaturePair>,
    pub teacher: Option<&'a TeacherFeatures>,
    pub options: TrainOptions,
}

struct Optimizer {
    weights: Vec<AdamState>,
    biases: Vec<AdamState>,
    projectors: Vec<AdamState>,
}

/// Trains a fresh student under `spec.recipe`. Deterministic for a fixed
/// seed. Non-finite losses or a stall below chance accuracy end the run
/// with `failed_to_converge` set.
pub fn train(data: &Dataset, spec: &RunSpec<'_>) -> Result<(Network, RunRecord)> {
    let recipe = &spec.recipe;
    recipe.validate()?;
    let opts = &spec.options;
    if opts.epochs == 0 || opts.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be >= 1".into()));
    }
    let kind = recipe.kind;
    let needs_teacher = kind.uses_features() || kind.uses_kl();
    let teacher = match (needs_teacher, spec.teacher) {
        (true, None) => {
            return Err(Error::Config(format!("recipe {kind} needs a teacher")));
        }
        (true, Some(t)) => Some(t),
        (false, _) => None,
    };
    if let Some(t) = teacher {
        if t.rows() != Some(data.train_len()) {
            return Err(Error::Config(format!(
                "teacher features cover {:?} rows, training split has {}",
                t.rows(),
                data.train_len()
            )));
        }
        if kind.uses_kl() && recipe.kl_weight > 0.0 && t.logits.is_none() {
            return Err(Error::Config(format!(
                "recipe {kind} needs teacher logits, but the teacher provides only features"
            )));
        }
    }
    let pairs: Vec<FeaturePair> = if kind.uses_features() {
        spec.pairs.clone()
    } else {
        Vec::new()
    };
    if kind.uses_features() && pairs.is_empty() {
        return Err(Error::Config(format!(
            "recipe {kind} needs at least one layer pair"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut net = Network::mlp(
        data.input_dim(),
        &spec.student_hidden,
        data.classes,
        &mut rng,
    );
    if let Some(l_final) = pairs.iter().map(|p| p.student_layer).max() {
        if l_final == 0 || l_final > net.hidden_layers() {
            return Err(Error::Config(format!(
                "student layer {l_final} is not a hidden layer (1..={})",
                net.hidden_layers()
            )));
        }
        net.set_classifier_boundary(l_final)?;
    }
    let mut projectors = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let t = teacher
            .unwrap()
            .layers
            .get(&p.teacher_layer)
            .ok_or_else(|| Error::Config(format!("teacher has no layer {}", p.teacher_layer)))?;
        projectors.push(Projector::new(
            t.ncols(),
            net.width(p.student_layer),
            recipe.projector,
            recipe.teacher_pooling,
            &mut rng,
        ));
    }
    let mut opt = Optimizer {
        weights: net
            .layers()
            .iter()
            .map(|l| AdamState::new(l.weights.len()))
            .collect(),
        biases: net
            .layers()
            .iter()
            .map(|l| AdamState::new(l.bias.as_ref().map_or(0, |b| b.len())))
            .collect(),
        projectors: projectors
            .iter()
            .map(|p| AdamState::new(p.weights.len()))
            .collect(),
    };
    let mapping_rows: Vec<Vec<f64>> = pairs.iter().map(|p| vec![p.weight]).collect();

    let n = data.train_len();
    let steps_per_epoch = n.div_ceil(opts.batch_size);
    let schedule = OneCycle::new(opts.max_lr, opts.epochs * steps_per_epoch);
    let mut order: Vec<usize> = (0..n).collect();
    let mut record = RunRecord {
        seed: opts.seed,
        recipe: kind,
        train_acc: Vec::new(),
        test_acc: Vec::new(),
        loss: LossTrace {
            ce: Vec::new(),
            kl: Vec::new(),
            feature: Vec::new(),
            total: Vec::new(),
        },
        final_test_acc: 0.0,
        failed_to_converge: false,
        failure: None,
    };
    let chance = 1.0 / data.classes as f64;
    let mut stalled = 0;
    let mut step = 0;

    'epochs: for _epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let (mut ce_sum, mut kl_sum, mut f_sum, mut tot_sum) = (0.0, 0.0, 0.0, 0.0);
        for idx in order.chunks(opts.batch_size) {
            let x = gather(&data.train_x, idx);
            let y: Vec<usize> = idx.iter().map(|&i| data.train_y[i]).collect();
            let cache = forward_capture(&net, &x)?;

            let (ce, ce_grad) = ce_loss(cache.logits(), &y)?;
            let (kl, kl_grad) = if recipe.kl_weight > 0.0 {
                let t_logits = gather(teacher.unwrap().logits.as_ref().unwrap(), idx);
                kl_vkd_loss(
                    cache.logits(),
                    &t_logits,
                    recipe.temperature,
                    recipe.kl_direction,
                )?
            } else {
                (0.0, DMatrix::zeros(0, 0))
            };

            let mut f_values = Vec::with_capacity(pairs.len());
            let mut activation_grads = Vec::with_capacity(pairs.len());
            let mut projector_grads = Vec::with_capacity(pairs.len());
            for (p, proj) in pairs.iter().zip(&projectors) {
                let t = gather(&teacher.unwrap().layers[&p.teacher_layer], idx);
                let fl = feature_loss(cache.activation(p.student_layer), &t, proj)?;
                let w = p.weight * recipe.feature_weight;
                f_values.push(vec![fl.value]);
                activation_grads.push((p.student_layer, fl.grad_student * w));
                projector_grads.push(fl.grad_projector * w);
            }

            let total = total_loss(recipe, &f_values, ce, kl, &mapping_rows)?;
            if !total.value.is_finite() {
                record.failed_to_converge = true;
                record.failure = Some("non-finite loss".into());
                break 'epochs;
            }
            ce_sum += ce * idx.len() as f64;
            kl_sum += kl * idx.len() as f64;
            f_sum += total.feature * idx.len() as f64;
            tot_sum += total.value * idx.len() as f64;

            let mut logit_grad = ce_grad * recipe.ce_weight;
            if recipe.kl_weight > 0.0 {
                logit_grad += kl_grad * recipe.kl_weight;
            }
            let mut plan = GradientPlan {
                activations: activation_grads,
                ..Default::default()
            };
            match total.logit_routing {
                LogitRouting::HeadOnly => plan.logits_head_only = Some(logit_grad),
                LogitRouting::Through => plan.logits_through = Some(logit_grad),
                LogitRouting::None => {}
            }
            let grads = backward(&net, &cache, &plan)?;

            let (lr, momentum) = schedule.at(step);
            let beta1 = opts.cycle_momentum.then_some(momentum);
            for (li, (layer, g)) in net.layers_mut().iter_mut().zip(&grads.layers).enumerate() {
                adam_step(
                    layer.weights.as_mut_slice(),
                    g.weights.as_slice(),
                    &mut opt.weights[li],
                    lr,
                    &opts.adam,
                    beta1,
                    true,
                );
                if let (Some(b), Some(gb)) = (layer.bias.as_mut(), g.bias.as_ref()) {
                    adam_step(
                        b.as_mut_slice(),
                        gb.as_slice(),
                        &mut opt.biases[li],
                        lr,
                        &opts.adam,
                        beta1,
                        false,
                    );
                }
            }
            for ((proj, g), st) in projectors
                .iter_mut()
                .zip(&projector_grads)
                .zip(&mut opt.projectors)
            {
                adam_step(
                    proj.weights.as_mut_slice(),
                    g.as_slice(),
                    st,
                    lr,
                    &opts.adam,
                    beta1,
                    true,
                );
            }
            step += 1;
        }

        let nf = n as f64;
        record.loss.ce.push(ce_sum / nf);
        record.loss.kl.push(kl_sum / nf);
        record.loss.feature.push(f_sum / nf);
        record.loss.total.push(tot_sum / nf);
        let train_acc = accuracy(&net, &data.train_x, &data.train_y)?;
        record.train_acc.push(train_acc);
        record
            .test_acc
            .push(accuracy(&net, &data.test_x, &data.test_y)?);

        stalled = if train_acc < chance { stalled + 1 } else { 0 };
        if stalled >= STALL_EPOCHS {
            record.failed_to_converge = true;
            record.failure = Some(format!(
                "train accuracy below chance for {STALL_EPOCHS} consecutive epochs"
            ));
            break;
        }
    }
    record.final_test_acc = record.test_acc.last().copied().unwrap_or(0.0);
    Ok((net, record))
}

/// Trains a classifier with cross-entropy only.
pub fn train_classifier(
    data: &Dataset,
    hidden: &[usize],
    options: TrainOptions,
) -> Result<(Network, RunRecord)> {
    train(
        data,
        &RunSpec {
            recipe: Recipe::new(RecipeKind::CeOnly),
            student_hidden: hidden.to_vec(),
            pairs: Vec::new(),
            teacher: None,
            options,
        },
    )
}

/// ARI could not be computed because the reference equals the baseline.
#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("unstable ARI: reference accuracy {reference} equals baseline accuracy")]
pub struct UnstableAri {
    pub reference: f64,
}

/// Grid that accuracies are snapped to before differencing, so decimal
/// inputs such as `0.7 - 0.6` difference exactly.
const ARI_GRID: f64 = 1e12;

/// Absolute relative improvement of `acc_kd1` over `acc_kd2`, relative to
/// the gap between `acc_kd2` and the baseline.
pub fn ari(acc_kd1: f64, acc_kd2: f64, acc_baseline: f64) -> Result<f64, UnstableAri> {
    let snap = |a: f64| (a * ARI_GRID).round();
    let denom = snap(acc_kd2) - snap(acc_baseline);
    let value = (snap(acc_kd1) - snap(acc_kd2)) / denom;
    if denom == 0.0 || !value.is_finite() {
        return Err(UnstableAri { reference: acc_kd2 });
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ari_spot_values() {
        assert_eq!(ari(0.8, 0.8, 0.6).unwrap(), 0.0);
        assert_eq!(ari(0.6, 0.8, 0.6).unwrap(), -1.0);
        assert_eq!(ari(0.8, 0.7, 0.6).unwrap(), 1.0);
        assert_eq!(ari(0.9, 0.8, 0.5).unwrap(), 1.0 / 3.0);
        assert!(ari(0.9, 0.6, 0.6).is_err());
    }

    #[test]
    fn pairs_from_identity_mapping() {
        let eye = crate::select::identity_mapping(2);
        let pairs = pairs_from_mapping(&[3, 5], &[1, 2], &eye).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!((pairs[1].teacher_layer, pairs[1].student_layer), (5, 2));
        assert!(pairs_from_mapping(&[3], &[1, 2], &eye).is_err());
    }
}
