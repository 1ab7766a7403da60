//! Feed-forward ReLU classifiers with activation capture and explicit
//! reverse-mode gradients.
//!
//! Layer indices follow the activated-layer convention: index 0 is the input,
//! index `i >= 1` is the output of the `i`-th dense layer after its
//! nonlinearity, and the last layer produces logits.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

/// `y = act(x W + b)` for row-major batches `x` (batch x in).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `in x out`.
    pub weights: DMatrix<f64>,
    pub bias: Option<DVector<f64>>,
    pub activation: Activation,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Dense>,
    /// Deepest backbone layer (`l_final`); layers above it form the head.
    classifier_boundary: usize,
}

impl Network {
    /// Validates shapes: consecutive widths agree and exactly the last layer
    /// is linear (logits).
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer {} outputs {} but layer {} expects {}",
                    i + 1,
                    pair[0].out_dim(),
                    i + 2,
                    pair[1].in_dim()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if let Some(b) = &l.bias {
                if b.len() != l.out_dim() {
                    return Err(Error::Shape(format!(
                        "bias of layer {} has wrong length",
                        i + 1
                    )));
                }
            }
            let last = i + 1 == layers.len();
            if last != (l.activation == Activation::None) {
                return Err(Error::Shape(
                    "only the output layer may (and must) be linear".into(),
                ));
            }
        }
        let boundary = layers.len() - 1;
        Ok(Self {
            layers,
            classifier_boundary: boundary,
        })
    }

    /// ReLU MLP `input -> hidden... -> classes` with He-uniform hidden
    /// weights, default-uniform output weights and zero biases.
    pub fn mlp(input: usize, hidden: &[usize], classes: usize, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input;
        for (i, &width) in hidden.iter().chain(std::iter::once(&classes)).enumerate() {
            let is_output = i == hidden.len();
            let bound = if is_output {
                1.0 / (prev as f64).sqrt()
            } else {
                (6.0 / prev as f64).sqrt()
            };
            let dist = Uniform::new_inclusive(-bound, bound).unwrap();
            layers.push(Dense {
                weights: DMatrix::from_fn(prev, width, |_, _| dist.sample(rng)),
                bias: Some(DVector::zeros(width)),
                activation: if is_output {
                    Activation::None
                } else {
                    Activation::Relu
                },
            });
            prev = width;
        }
        Self::new(layers).expect("mlp shapes are consistent")
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Number of hidden (activated) layers, i.e. valid feature indices `1..=n`.
    pub fn hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    /// Width of activated layer `index` (0 = input).
    pub fn width(&self, index: usize) -> usize {
        if index == 0 {
            self.input_dim()
        } else {
            self.layers[index - 1].out_dim()
        }
    }

    pub fn classifier_boundary(&self) -> usize {
        self.classifier_boundary
    }

    /// Sets `l_final`; must name a hidden layer or the input.
    pub fn set_classifier_boundary(&mut self, boundary: usize) -> Result<()> {
        if boundary >= self.layers.len() {
            return Err(Error::Shape(format!(
                "boundary {boundary} is not below the output layer {}",
                self.layers.len()
            )));
        }
        self.classifier_boundary = boundary;
        Ok(())
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: DMatrix<f64>,
    /// Pre-activation of each layer.
    pub pre: Vec<DMatrix<f64>>,
    /// Post-activation of each layer; the last entry is the logits.
    pub post: Vec<DMatrix<f64>>,
}

impl ForwardCache {
    pub fn logits(&self) -> &DMatrix<f64> {
        self.post.last().unwrap()
    }

    /// Activated layer `index` (0 = input).
    pub fn activation(&self, index: usize) -> &DMatrix<f64> {
        if index == 0 {
            &self.input
        } else {
            &self.post[index - 1]
        }
    }
}

fn affine(layer: &Dense, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut z = x * &layer.weights;
    if let Some(b) = &layer.bias {
        for mut row in z.row_iter_mut() {
            row += b.transpose();
        }
    }
    z
}

/// Runs `batch` (rows = samples) through `net`, keeping every activation.
pub fn forward_capture(net: &Network, batch: &DMatrix<f64>) -> Result<ForwardCache> {
    if batch.ncols() != net.input_dim() {
        return Err(Error::Shape(format!(
            "batch width {} does not match input dimension {}",
            batch.ncols(),
            net.input_dim()
        )));
    }
    let mut pre = Vec::with_capacity(net.depth());
    let mut post: Vec<DMatrix<f64>> = Vec::with_capacity(net.depth());
    for layer in net.layers() {
        let z = affine(layer, post.last().unwrap_or(batch));
        let a = match layer.activation {
            Activation::Relu => z.map(|v| v.max(0.0)),
            Activation::None => z.clone(),
        };
        pre.push(z);
        post.push(a);
    }
    Ok(ForwardCache {
        input: batch.clone(),
        pre,
        post,
    })
}

/// Logits only.
pub fn predict(net: &Network, batch: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut x = batch.clone();
    if x.ncols() != net.input_dim() {
        return Err(Error::Shape(
            "batch width does not match input dimension".into(),
        ));
    }
    for layer in net.layers() {
        x = affine(layer, &x);
        if layer.activation == Activation::Relu {
            x.apply(|v| *v = v.max(0.0));
        }
    }
    Ok(x)
}

/// Where loss gradients enter the network and where they stop.
#[derive(Debug, Clone, Default)]
pub struct GradientPlan {
    /// Logit gradient that flows through the whole network.
    pub logits_through: Option<DMatrix<f64>>,
    /// Logit gradient that trains only the head: it is dropped on reaching
    /// the output of the classifier boundary layer.
    pub logits_head_only: Option<DMatrix<f64>>,
    /// Extra gradients on activated hidden layers, keyed by layer index.
    pub activations: Vec<(usize, DMatrix<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: DMatrix<f64>,
    pub bias: Option<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers()
                .iter()
                .map(|l| LayerGrad {
                    weights: DMatrix::zeros(l.in_dim(), l.out_dim()),
                    bias: l.bias.as_ref().map(|b| DVector::zeros(b.len())),
                })
                .collect(),
        }
    }
}

fn accumulate(slot: &mut Option<DMatrix<f64>>, g: &DMatrix<f64>) {
    match slot {
        Some(acc) => *acc += g,
        None => *slot = Some(g.clone()),
    }
}

/// Exact reverse-mode gradients for every parameter under `plan`.
pub fn backward(net: &Network, cache: &ForwardCache, plan: &GradientPlan) -> Result<Gradients> {
    let depth = net.depth();
    let boundary = net.classifier_boundary();
    let batch = cache.input.nrows();
    let check = |g: &DMatrix<f64>, width: usize, what: &str| {
        if g.shape() != (batch, width) {
            Err(Error::Shape(format!(
                "{what} gradient is {:?}, expected ({batch}, {width})",
                g.shape()
            )))
        } else {
            Ok(())
        }
    };

    let mut injected: Vec<Option<DMatrix<f64>>> = vec![None; depth + 1];
    for (index, g) in &plan.activations {
        if *index == 0 || *index > depth {
            return Err(Error::Shape(format!("no activated layer {index}")));
        }
        check(g, net.width(*index), "activation")?;
        accumulate(&mut injected[*index], g);
    }

    // Gradient w.r.t. the output of layer `i` (1-based), split into the
    // part that may cross the boundary and the head-only part.
    let mut through = plan.logits_through.clone();
    let mut head = plan.logits_head_only.clone();
    for g in through.iter().chain(head.iter()) {
        check(g, net.classes(), "logit")?;
    }
    if let Some(g) = injected[depth].take() {
        accumulate(&mut through, &g);
    }

    let mut grads = Gradients::zeros_like(net);
    for i in (1..=depth).rev() {
        if i == boundary {
            head = None;
        }
        if i < depth {
            if let Some(g) = injected[i].take() {
                accumulate(&mut through, &g);
            }
        }
        let upstream = match (&through, &head) {
            (Some(t), Some(h)) => Some(t + h),
            (Some(t), None) => Some(t.clone()),
            (None, Some(h)) => Some(h.clone()),
            (None, None) => None,
        };
        let Some(upstream) = upstream else {
            continue;
        };
        let layer = &net.layers()[i - 1];
        let relu_mask = |g: &DMatrix<f64>| match layer.activation {
            Activation::Relu => g.zip_map(&cache.pre[i - 1], |g, z| if z > 0.0 { g } else { 0.0 }),
            Activation::None => g.clone(),
        };
        let delta = relu_mask(&upstream);
        let x = cache.activation(i - 1);
        let slot = &mut grads.layers[i - 1];
        slot.weights = x.tr_mul(&delta);
        if let Some(b) = slot.bias.as_mut() {
            *b = delta.row_sum().transpose();
        }
        if i > 1 {
            let wt = layer.weights.transpose();
            through = through.as_ref().map(|t| relu_mask(t) * &wt);
            head = head.as_ref().map(|h| relu_mask(h) * &wt);
        }
    }
    Ok(grads)
}
