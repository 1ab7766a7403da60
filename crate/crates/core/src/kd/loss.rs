//! Loss terms, the width-aligning projector and loss recipes.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn log_softmax_rows(logits: &DMatrix<f64>, scale: f64) -> DMatrix<f64> {
    let mut out = logits / scale;
    for mut row in out.row_iter_mut() {
        let max = row.max();
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.add_scalar_mut(-lse);
    }
    out
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn ce_loss(logits: &DMatrix<f64>, labels: &[usize]) -> Result<(f64, DMatrix<f64>)> {
    let (batch, classes) = logits.shape();
    if labels.len() != batch {
        return Err(Error::Shape(format!(
            "{batch} logit rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Shape(format!("label {bad} >= {classes} classes")));
    }
    let logp = log_softmax_rows(logits, 1.0);
    let n = batch as f64;
    let loss = -labels
        .iter()
        .enumerate()
        .map(|(r, &y)| logp[(r, y)])
        .sum::<f64>()
        / n;
    let mut grad = logp.map(f64::exp);
    for (r, &y) in labels.iter().enumerate() {
        grad[(r, y)] -= 1.0;
    }
    grad /= n;
    Ok((loss, grad))
}

/// Argument order of the KL divergence between softened distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(softmax(s/t) || softmax(T/t))`.
    #[default]
    StudentTeacher,
    /// `KL(softmax(T/t) || softmax(s/t))`, the usual Hinton form.
    TeacherStudent,
}

/// `t^2 * KL` between temperature-softened student and teacher logits,
/// averaged over the batch, with its gradient w.r.t. the student logits.
pub fn kl_vkd_loss(
    student: &DMatrix<f64>,
    teacher: &DMatrix<f64>,
    t: f64,
    direction: KlDirection,
) -> Result<(f64, DMatrix<f64>)> {
    if student.shape() != teacher.shape() {
        return Err(Error::Shape(format!(
            "student logits {:?} vs teacher logits {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be > 0, got {t}"
        )));
    }
    let batch = student.nrows() as f64;
    let log_p = log_softmax_rows(student, t);
    let log_q = log_softmax_rows(teacher, t);
    let p = log_p.map(f64::exp);
    let q = log_q.map(f64::exp);
    let mut grad = DMatrix::zeros(student.nrows(), student.ncols());
    let mut total = 0.0;
    for r in 0..student.nrows() {
        match direction {
            KlDirection::StudentTeacher => {
                let kl: f64 = (0..student.ncols())
                    .map(|c| p[(r, c)] * (log_p[(r, c)] - log_q[(r, c)]))
                    .sum();
                total += kl;
                for c in 0..student.ncols() {
                    grad[(r, c)] = p[(r, c)] * ((log_p[(r, c)] - log_q[(r, c)]) - kl);
                }
            }
            KlDirection::TeacherStudent => {
                total += (0..student.ncols())
                    .map(|c| q[(r, c)] * (log_q[(r, c)] - log_p[(r, c)]))
                    .sum::<f64>();
                for c in 0..student.ncols() {
                    grad[(r, c)] = p[(r, c)] - q[(r, c)];
                }
            }
        }
    }
    // d/ds = (1/t) d/dz; times t^2, averaged over the batch.
    grad *= t / batch;
    Ok((t * t * total.max(0.0) / batch, grad))
}

/// Which side of a feature pair the projector transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorDirection {
    /// The student activation is mapped onto the pooled teacher activation.
    #[default]
    StudentToTeacher,
    /// The pooled teacher activation is mapped onto the student activation.
    TeacherToStudent,
}

/// Single-layer, bias-free linear map between a teacher layer and a student
/// layer. With pooling enabled, the teacher side is first mean-pooled over
/// equal-width groups of adjacent units when its width is a multiple of the
/// student width.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub teacher_width: usize,
    pub student_width: usize,
    pub pool_group: usize,
    pub direction: ProjectorDirection,
    /// `student_width x pooled` for student-to-teacher maps and
    /// `pooled x student_width` for teacher-to-student maps.
    pub weights: DMatrix<f64>,
}

impl Projector {
    pub fn new(
        teacher_width: usize,
        student_width: usize,
        direction: ProjectorDirection,
        pooling: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let pool_group =
            if pooling && teacher_width > student_width && teacher_width % student_width == 0 {
                teacher_width / student_width
            } else {
                1
            };
        let pooled = teacher_width / pool_group;
        let (rows, cols) = match direction {
            ProjectorDirection::StudentToTeacher => (student_width, pooled),
            ProjectorDirection::TeacherToStudent => (pooled, student_width),
        };
        let bound = 1.0 / (rows as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).unwrap();
        Self {
            teacher_width,
            student_width,
            pool_group,
            direction,
            weights: DMatrix::from_fn(rows, cols, |_, _| dist.sample(rng)),
        }
    }

    pub fn pooled_width(&self) -> usize {
        self.teacher_width / self.pool_group
    }

    pub fn pool(&self, teacher: &DMatrix<f64>) -> DMatrix<f64> {
        if self.pool_group == 1 {
            return teacher.clone();
        }
        let g = self.pool_group;
        DMatrix::from_fn(teacher.nrows(), self.pooled_width(), |r, c| {
            (0..g).map(|k| teacher[(r, c * g + k)]).sum::<f64>() / g as f64
        })
    }

    /// `(prediction, target)` whose mean squared difference is the feature
    /// loss.
    pub fn align(
        &self,
        student: &DMatrix<f64>,
        teacher: &DMatrix<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let pooled = self.pool(teacher);
        match self.direction {
            ProjectorDirection::StudentToTeacher => (student * &self.weights, pooled),
            ProjectorDirection::TeacherToStudent => (student.clone(), pooled * &self.weights),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeatureLoss {
    pub value: f64,
    pub grad_student: DMatrix<f64>,
    pub grad_projector: DMatrix<f64>,
}

/// Mean squared error between the aligned student and teacher activations.
/// The teacher side is a constant.
pub fn feature_loss(
    student: &DMatrix<f64>,
    teacher: &DMatrix<f64>,
    projector: &Projector,
) -> Result<FeatureLoss> {
    if teacher.ncols() != projector.teacher_width {
        return Err(Error::Shape(format!(
            "teacher width {} but projector expects {}",
            teacher.ncols(),
            projector.teacher_width
        )));
    }
    if student.ncols() != projector.student_width || student.nrows() != teacher.nrows() {
        return Err(Error::Shape(format!(
            "student activation {:?} vs projector student width {} and {} teacher rows",
            student.shape(),
            projector.student_width,
            teacher.nrows()
        )));
    }
    let (prediction, target) = projector.align(student, teacher);
    let diff = prediction - &target;
    let count = diff.len() as f64;
    let value = diff.norm_squared() / count;
    let grad_diff = &diff * (2.0 / count);
    let (grad_student, grad_projector) = match projector.direction {
        ProjectorDirection::StudentToTeacher => (
            &grad_diff * projector.weights.transpose(),
            student.tr_mul(&grad_diff),
        ),
        ProjectorDirection::TeacherToStudent => {
            let pooled = projector.pool(teacher);
            let gp = -pooled.tr_mul(&grad_diff);
            (grad_diff, gp)
        }
    };
    Ok(FeatureLoss {
        value,
        grad_student,
        grad_projector,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecipeKind {
    /// Feature loss only in the backbone; CE trains the head only; no KL.
    Ours,
    /// CE + KL + feature loss, all reaching the backbone.
    BaseFkd,
    BaseFkdMinusKl,
    /// Feature loss plus CE reaching the backbone.
    OursPlusCe,
    /// Feature loss plus CE and KL reaching the backbone.
    OursPlusLl,
    /// CE + KL, no feature loss.
    VkdOnly,
    CeOnly,
}

impl RecipeKind {
    pub const ALL: [RecipeKind; 7] = [
        RecipeKind::Ours,
        RecipeKind::BaseFkd,
        RecipeKind::BaseFkdMinusKl,
        RecipeKind::OursPlusCe,
        RecipeKind::OursPlusLl,
        RecipeKind::VkdOnly,
        RecipeKind::CeOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RecipeKind::Ours => "ours",
            RecipeKind::BaseFkd => "base_fkd",
            RecipeKind::BaseFkdMinusKl => "base_fkd_minus_kl",
            RecipeKind::OursPlusCe => "ours_plus_ce",
            RecipeKind::OursPlusLl => "ours_plus_ll",
            RecipeKind::VkdOnly => "vkd_only",
            RecipeKind::CeOnly => "ce_only",
        }
    }

    pub fn uses_features(self) -> bool {
        !matches!(self, RecipeKind::VkdOnly | RecipeKind::CeOnly)
    }

    pub fn uses_kl(self) -> bool {
        matches!(
            self,
            RecipeKind::BaseFkd | RecipeKind::OursPlusLl | RecipeKind::VkdOnly
        )
    }

    /// Whether CE gradients are stopped at the classifier boundary.
    pub fn blocks_ce(self) -> bool {
        self == RecipeKind::Ours
    }

    /// The layer-selection method the recipe is normally paired with.
    pub fn default_selection_is_kq(self) -> bool {
        matches!(
            self,
            RecipeKind::Ours | RecipeKind::OursPlusCe | RecipeKind::OursPlusLl
        )
    }
}

impl fmt::Display for RecipeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RecipeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RecipeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown recipe {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub kind: RecipeKind,
    pub temperature: f64,
    pub feature_weight: f64,
    pub kl_weight: f64,
    pub ce_weight: f64,
    pub kl_direction: KlDirection,
    #[serde(default)]
    pub projector: ProjectorDirection,
    /// Mean-pool teacher units before projecting.
    #[serde(default)]
    pub teacher_pooling: bool,
}

impl Recipe {
    /// Default weights for `kind`: `t = 4`, `beta = 1`, unit CE weight and a
    /// unit KL weight for recipes that use KL.
    pub fn new(kind: RecipeKind) -> Self {
        Self {
            kind,
            temperature: 4.0,
            feature_weight: if kind.uses_features() { 1.0 } else { 0.0 },
            kl_weight: if kind.uses_kl() { 1.0 } else { 0.0 },
            ce_weight: 1.0,
            kl_direction: KlDirection::default(),
            projector: ProjectorDirection::default(),
            teacher_pooling: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == RecipeKind::Ours && self.kl_weight != 0.0 {
            return Err(Error::Config(
                "recipe \"ours\" must have kl_weight = 0".into(),
            ));
        }
        if !self.kind.uses_kl() && self.kl_weight != 0.0 {
            return Err(Error::Config(format!(
                "recipe {} has no KL term",
                self.kind
            )));
        }
        if !self.kind.uses_features() && self.feature_weight != 0.0 {
            return Err(Error::Config(format!(
                "recipe {} has no feature term",
                self.kind
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        for (name, w) in [
            ("feature_weight", self.feature_weight),
            ("kl_weight", self.kl_weight),
            ("ce_weight", self.ce_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// How the logit-loss gradient is routed through the student.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitRouting {
    /// No logit loss.
    None,
    /// Trains the head only; stopped at `l_final`.
    HeadOnly,
    /// Reaches every layer.
    Through,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    /// Loss seen by backbone parameters.
    pub backbone: f64,
    /// Loss seen by head parameters.
    pub head: f64,
    pub ce: f64,
    pub kl: f64,
    pub feature: f64,
    pub logit_routing: LogitRouting,
    /// Weight applied to each `(teacher, student)` feature pair.
    pub pair_weights: Vec<Vec<f64>>,
}

/// `ce_w * CE + kl_w * KL + beta * sum_ij A_ij * L_F(i, j)`.
///
/// `feature_losses[i][j]` is the loss between teacher layer `i` and student
/// layer `j`; entries with zero mapping weight may be anything.
pub fn total_loss(
    recipe: &Recipe,
    feature_losses: &[Vec<f64>],
    ce: f64,
    kl: f64,
    mapping: &[Vec<f64>],
) -> Result<TotalLoss> {
    recipe.validate()?;
    if feature_losses.len() != mapping.len()
        || feature_losses
            .iter()
            .zip(mapping)
            .any(|(f, a)| f.len() != a.len())
    {
        return Err(Error::Shape(
            "feature losses and mapping differ in shape".into(),
        ));
    }
    let pair_weights: Vec<Vec<f64>> = mapping
        .iter()
        .map(|row| row.iter().map(|a| a * recipe.feature_weight).collect())
        .collect();
    let feature: f64 = pair_weights
        .iter()
        .zip(feature_losses)
        .flat_map(|(w, f)| {
            w.iter()
                .zip(f)
                .filter(|(w, _)| **w != 0.0)
                .map(|(w, f)| w * f)
        })
        .sum();
    let ce_term = recipe.ce_weight * ce;
    let kl_term = recipe.kl_weight * kl;
    let logit_routing = if recipe.ce_weight == 0.0 && recipe.kl_weight == 0.0 {
        LogitRouting::None
    } else if recipe.kind.blocks_ce() {
        LogitRouting::HeadOnly
    } else {
        LogitRouting::Through
    };
    let (backbone, head) = match logit_routing {
        LogitRouting::HeadOnly => (feature, ce_term + kl_term),
        _ => (ce_term + kl_term + feature, ce_term + kl_term),
    };
    Ok(TotalLoss {
        value: ce_term + kl_term + feature,
        backbone,
        head,
        ce,
        kl,
        feature,
        logit_routing,
        pair_weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ce_uniform_logits_is_ln_classes() {
        let (loss, _) = ce_loss(&DMatrix::zeros(3, 10), &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_vanishes_with_margin() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 10.0, 100.0] {
            let logits = DMatrix::from_row_slice(1, 3, &[margin, 0.0, 0.0]);
            let (loss, _) = ce_loss(&logits, &[0]).unwrap();
            assert!(loss < prev && loss >= 0.0);
            prev = loss;
        }
        assert!(prev < 1e-40);
    }

    #[test]
    fn kl_zero_for_equal_logits_and_nonnegative() {
        let s = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 3.0, 3.0, -1.0]);
        for dir in [KlDirection::StudentTeacher, KlDirection::TeacherStudent] {
            let (v, g) = kl_vkd_loss(&s, &s, 4.0, dir).unwrap();
            assert!(v.abs() < 1e-15);
            assert!(g.iter().all(|x| x.abs() < 1e-15));
            let t = DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 2.0, -1.0, 0.0, 5.0]);
            assert!(kl_vkd_loss(&s, &t, 4.0, dir).unwrap().0 > 0.0);
        }
    }

    #[test]
    fn feature_loss_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let teacher = DMatrix::from_fn(4, 6, |r, c| (r as f64 - c as f64) * 0.3);
        let mut proj = Projector::new(6, 3, ProjectorDirection::TeacherToStudent, true, &mut rng);
        assert_eq!(proj.pool_group, 2);
        let student = proj.pool(&teacher) * &proj.weights;
        assert!(feature_loss(&student, &teacher, &proj).unwrap().value < 1e-30);

        proj.weights.fill(0.0);
        let fl = feature_loss(&student, &teacher, &proj).unwrap();
        let expected = student.norm_squared() / student.len() as f64;
        assert!((fl.value - expected).abs() < 1e-15);

        assert!(feature_loss(&DMatrix::zeros(4, 2), &teacher, &proj).is_err());
    }

    #[test]
    fn student_to_teacher_targets_pooled_teacher() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let teacher = DMatrix::from_fn(3, 4, |r, c| (r * 4 + c) as f64);
        let mut proj = Projector::new(4, 2, ProjectorDirection::StudentToTeacher, true, &mut rng);
        assert_eq!(proj.weights.shape(), (2, 2));
        proj.weights = DMatrix::identity(2, 2);
        let pooled = proj.pool(&teacher);
        assert_eq!(pooled[(1, 1)], 6.5);
        assert!(feature_loss(&pooled, &teacher, &proj).unwrap().value < 1e-30);

        proj.weights.fill(0.0);
        let fl = feature_loss(&DMatrix::from_element(3, 2, 1.0), &teacher, &proj).unwrap();
        assert!((fl.value - pooled.norm_squared() / 6.0).abs() < 1e-12);
        assert!(fl.grad_student.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn projector_without_integer_ratio_skips_pooling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Projector::new(5, 3, ProjectorDirection::TeacherToStudent, true, &mut rng);
        assert_eq!(p.pool_group, 1);
        assert_eq!(p.weights.shape(), (5, 3));
        let up = Projector::new(3, 6, ProjectorDirection::StudentToTeacher, true, &mut rng);
        assert_eq!((up.pool_group, up.weights.shape()), (1, (6, 3)));
    }

    #[test]
    fn total_loss_decompositions() {
        let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let f = vec![vec![0.5, 9.0], vec![9.0, 0.25]];

        let ce_only = total_loss(
            &Recipe::new(RecipeKind::CeOnly),
            &[vec![0.0; 2], vec![0.0; 2]],
            1.5,
            0.7,
            &eye,
        )
        .unwrap();
        assert_eq!(ce_only.value, 1.5);

        let ours = total_loss(&Recipe::new(RecipeKind::Ours), &f, 1.5, 0.7, &eye).unwrap();
        assert_eq!(ours.backbone, 0.75);
        assert_eq!(ours.head, 1.5);
        assert_eq!(ours.logit_routing, LogitRouting::HeadOnly);

        let base = total_loss(&Recipe::new(RecipeKind::BaseFkd), &f, 1.5, 0.7, &eye).unwrap();
        assert_eq!(base.value, 1.5 + 0.7 + 0.75);
        assert_eq!(base.backbone, base.value);
    }

    #[test]
    fn ours_rejects_kl_weight() {
        let mut r = Recipe::new(RecipeKind::Ours);
        r.kl_weight = 0.5;
        assert!(r.validate().is_err());
    }

    #[test]
    fn recipe_names_round_trip() {
        for k in RecipeKind::ALL {
            assert_eq!(k.name().parse::<RecipeKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
    }
}
