//! Small feedforward binary classifiers, per-sample gradients and the
//! cross-sample dependency check that gates private training.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{GradientSet, Tensor};

/// Variance stabilizer used by every group-norm layer.
pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Version tag written into model checkpoints.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NormKind {
    None,
    Group { groups: usize },
}

/// One layer; parameter fields are indices into the model's parameter store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
        weight: usize,
        bias: usize,
    },
    GroupNorm {
        channels: usize,
        groups: usize,
        scale: usize,
        shift: usize,
    },
    Relu,
    /// Normalizes each channel with statistics taken across the batch.
    /// Mixes samples, so it is never privacy compatible; exists to
    /// exercise [`validate_model`].
    BatchCoupledNorm {
        channels: usize,
    },
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::GroupNorm { .. } => "group_norm",
            Layer::Relu => "relu",
            Layer::BatchCoupledNorm { .. } => "batch_coupled_norm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub layer_index: usize,
    pub layer: String,
    pub reason: String,
}

/// Layers whose forward pass for one sample reads another sample's data.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    widths: Vec<usize>,
    norm: NormKind,
    seed: u64,
    freeze_prefix: usize,
    layers: Vec<Layer>,
    params: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    #[serde(flatten)]
    model: Model,
}

/// Builds an MLP with the given layer widths (input first, final width 1).
///
/// Dense weights are drawn uniformly from `±sqrt(6 / (fan_in + fan_out))`
/// and biases start at zero. With `NormKind::Group` a group-norm layer
/// (scale 1, shift 0) follows every hidden dense layer, before its ReLU.
pub fn build_mlp(widths: &[usize], norm: NormKind, seed: u64) -> Result<Model> {
    if widths.len() < 2 {
        return Err(Error::InvalidWidths(format!(
            "need at least 2 widths, got {}",
            widths.len()
        )));
    }
    if widths.contains(&0) {
        return Err(Error::InvalidWidths("widths must be positive".into()));
    }
    if *widths.last().unwrap() != 1 {
        return Err(Error::InvalidWidths(format!(
            "final width must be 1, got {}",
            widths.last().unwrap()
        )));
    }
    if let NormKind::Group { groups } = norm {
        for &w in &widths[1..widths.len() - 1] {
            if groups == 0 || w % groups != 0 {
                return Err(Error::GroupsIndivisible { groups, width: w });
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut params = Vec::new();
    let last = widths.len() - 2;
    for (i, pair) in widths.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        params.push(Tensor::new(vec![fan_in, fan_out], w)?);
        params.push(Tensor::zeros(&[fan_out]));
        layers.push(Layer::Dense {
            inputs: fan_in,
            outputs: fan_out,
            weight: params.len() - 2,
            bias: params.len() - 1,
        });
        if i == last {
            break;
        }
        if let NormKind::Group { groups } = norm {
            params.push(Tensor::full(&[fan_out], 1.0));
            params.push(Tensor::zeros(&[fan_out]));
            layers.push(Layer::GroupNorm {
                channels: fan_out,
                groups,
                scale: params.len() - 2,
                shift: params.len() - 1,
            });
        }
        layers.push(Layer::Relu);
    }

    Ok(Model {
        widths: widths.to_vec(),
        norm,
        seed,
        freeze_prefix: 0,
        layers,
        params,
    })
}

/// Flags every layer that couples samples within a batch.
pub fn validate_model(model: &Model) -> ValidationReport {
    let violations = model
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, layer)| match layer {
            Layer::BatchCoupledNorm { .. } => Some(Violation {
                layer_index: i,
                layer: layer.name().to_string(),
                reason: "normalizes with statistics computed across the batch".into(),
            }),
            _ => None,
        })
        .collect();
    ValidationReport { violations }
}

fn check_label(y: u8) -> Result<f64> {
    match y {
        0 => Ok(0.0),
        1 => Ok(1.0),
        _ => Err(Error::InvalidArgument(format!(
            "label must be 0 or 1, got {y}"
        ))),
    }
}

impl Model {
    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn norm(&self) -> NormKind {
        self.norm
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params.iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn dense_layer_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Dense { .. }))
            .count()
    }

    pub fn freeze_prefix(&self) -> usize {
        self.freeze_prefix
    }

    /// Freezes the first `k` dense layers; their parameters are excluded
    /// from training.
    pub fn set_freeze_prefix(&mut self, k: usize) -> Result<()> {
        if k > self.dense_layer_count() {
            return Err(Error::InvalidArgument(format!(
                "cannot freeze {k} of {} dense layers",
                self.dense_layer_count()
            )));
        }
        self.freeze_prefix = k;
        Ok(())
    }

    /// `true` for each parameter tensor that training may update.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.params.len()];
        for layer in self
            .layers
            .iter()
            .filter(|l| matches!(l, Layer::Dense { .. }))
            .take(self.freeze_prefix)
        {
            if let Layer::Dense { weight, bias, .. } = layer {
                mask[*weight] = false;
                mask[*bias] = false;
            }
        }
        mask
    }

    /// Zeroes the entries of `g` that belong to frozen parameters.
    pub fn mask_frozen(&self, g: &mut GradientSet) {
        for (t, trainable) in g.tensors_mut().iter_mut().zip(self.trainable_mask()) {
            if !trainable {
                t.data_mut().fill(0.0);
            }
        }
    }

    /// Inserts a batch-coupled normalization layer before `position`.
    /// Test fixture for the privacy validation path.
    pub fn insert_batch_coupled_norm(&mut self, position: usize) -> Result<()> {
        if position == 0 || position > self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot insert at layer position {position}"
            )));
        }
        let channels = self.layers[..position]
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Dense { outputs, .. } => Some(*outputs),
                _ => None,
            })
            .ok_or_else(|| Error::InvalidArgument("no dense layer before position".into()))?;
        self.layers
            .insert(position, Layer::BatchCoupledNorm { channels });
        Ok(())
    }

    pub fn validate(&self) -> ValidationReport {
        validate_model(self)
    }

    /// Records the forward pass of `x` (`[batch, input_dim]`) and returns the
    /// `[batch, 1]` logits.
    fn forward_on(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::Dense { weight, bias, .. } => {
                    let z = tape.matmul(h, params[*weight])?;
                    tape.add(z, params[*bias])?
                }
                Layer::GroupNorm {
                    groups,
                    scale,
                    shift,
                    ..
                } => {
                    let n = tape.group_norm(h, *groups, GROUP_NORM_EPS)?;
                    let s = tape.mul(n, params[*scale])?;
                    tape.add(s, params[*shift])?
                }
                Layer::Relu => tape.relu(h)?,
                Layer::BatchCoupledNorm { .. } => {
                    let t = tape.transpose(h)?;
                    let n = tape.group_norm(t, 1, GROUP_NORM_EPS)?;
                    tape.transpose(n)?
                }
            };
        }
        Ok(h)
    }

    fn check_input(&self, xs: &Tensor) -> Result<usize> {
        match xs.shape() {
            [b, d] if *d == self.input_dim() => Ok(*b),
            other => Err(Error::ShapeMismatch {
                op: "model_input",
                lhs: other.to_vec(),
                rhs: vec![self.input_dim()],
            }),
        }
    }

    /// Per-sample BCE losses `[batch, 1]` on a fresh tape, using `params`
    /// in place of the model's own.
    fn losses_on(&self, tape: &mut Tape, params: &[Tensor], xs: &Tensor, ys: &[u8]) -> Result<Var> {
        let b = self.check_input(xs)?;
        if ys.len() != b {
            return Err(Error::ShapeMismatch {
                op: "labels",
                lhs: vec![b],
                rhs: vec![ys.len()],
            });
        }
        let targets = ys
            .iter()
            .map(|&y| check_label(y))
            .collect::<Result<Vec<_>>>()?;
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let x = tape.constant(xs.clone());
        let logits = self.forward_on(tape, &vars, x)?;
        let probs = tape.sigmoid(logits)?;
        let y = tape.constant(Tensor::new(vec![b, 1], targets)?);
        tape.bce(probs, y)
    }

    /// Loss and exact gradient for a single sample.
    pub fn per_sample_gradient(&self, x: &[f64], y: u8) -> Result<(f64, GradientSet)> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "model_input",
                lhs: vec![x.len()],
                rhs: vec![self.input_dim()],
            });
        }
        let xs = Tensor::new(vec![1, x.len()], x.to_vec())?;
        self.batch_gradient(&xs, &[y])
    }

    /// Mean BCE loss over the batch and its gradient.
    pub fn batch_gradient(&self, xs: &Tensor, ys: &[u8]) -> Result<(f64, GradientSet)> {
        let mut tape = Tape::new();
        let losses = self.losses_on(&mut tape, &self.params, xs, ys)?;
        let loss = tape.mean(losses)?;
        let value = tape.value(loss).data()[0];
        Ok((value, tape.backward(loss)?))
    }

    /// Gradient of sample `i`'s loss computed from a forward pass over the
    /// whole batch.
    pub fn sample_gradient_in_batch(
        &self,
        xs: &Tensor,
        ys: &[u8],
        i: usize,
    ) -> Result<(f64, GradientSet)> {
        if i >= ys.len() {
            return Err(Error::InvalidArgument(format!("sample {i} out of range")));
        }
        let mut tape = Tape::new();
        let losses = self.losses_on(&mut tape, &self.params, xs, ys)?;
        let mut mask = vec![0.0; ys.len()];
        mask[i] = ys.len() as f64;
        let m = tape.constant(Tensor::new(vec![ys.len(), 1], mask)?);
        let picked = tape.mul(losses, m)?;
        let loss = tape.mean(picked)?;
        let value = tape.value(loss).data()[0];
        Ok((value, tape.backward(loss)?))
    }

    /// Mean loss with substituted parameters; the finite-difference oracle
    /// drives this.
    pub fn loss_with_params(&self, params: &[Tensor], xs: &Tensor, ys: &[u8]) -> Result<f64> {
        if params.len() != self.params.len() {
            return Err(Error::InvalidArgument("parameter count mismatch".into()));
        }
        let mut tape = Tape::new();
        let losses = self.losses_on(&mut tape, params, xs, ys)?;
        let loss = tape.mean(losses)?;
        Ok(tape.value(loss).data()[0])
    }

    /// Predicted probability of label 1 for each row of `xs`.
    pub fn predict_proba(&self, xs: &Tensor) -> Result<Vec<f64>> {
        self.check_input(xs)?;
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.constant(p.clone()))
            .collect();
        let x = tape.constant(xs.clone());
        let logits = self.forward_on(&mut tape, &vars, x)?;
        let probs = tape.sigmoid(logits)?;
        Ok(tape.value(probs).data().to_vec())
    }

    /// Fraction of rows whose thresholded prediction matches the label.
    pub fn accuracy(&self, xs: &Tensor, ys: &[u8]) -> Result<f64> {
        let probs = self.predict_proba(xs)?;
        if probs.len() != ys.len() {
            return Err(Error::InvalidArgument("label count mismatch".into()));
        }
        if ys.is_empty() {
            return Ok(0.0);
        }
        let hits = probs
            .iter()
            .zip(ys)
            .filter(|(p, &y)| (**p >= 0.5) == (y == 1))
            .count();
        Ok(hits as f64 / ys.len() as f64)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&Checkpoint {
            format_version: CHECKPOINT_VERSION,
            model: self.clone(),
        })
        .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ck.format_version
            )));
        }
        ck.model.check_consistency()?;
        Ok(ck.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn check_consistency(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Checkpoint(msg));
        let shape_of = |i: usize| self.params.get(i).map(|t| t.shape().to_vec());
        for layer in &self.layers {
            match layer {
                Layer::Dense {
                    inputs,
                    outputs,
                    weight,
                    bias,
                } => {
                    if shape_of(*weight) != Some(vec![*inputs, *outputs])
                        || shape_of(*bias) != Some(vec![*outputs])
                    {
                        return bad("dense layer parameter shapes".into());
                    }
                }
                Layer::GroupNorm {
                    channels,
                    groups,
                    scale,
                    shift,
                } => {
                    if *groups == 0 || channels % groups != 0 {
                        return bad("group-norm groups".into());
                    }
                    if shape_of(*scale) != Some(vec![*channels])
                        || shape_of(*shift) != Some(vec![*channels])
                    {
                        return bad("group-norm parameter shapes".into());
                    }
                }
                Layer::Relu | Layer::BatchCoupledNorm { .. } => {}
            }
        }
        if self.widths.len() < 2 || self.freeze_prefix > self.dense_layer_count() {
            return bad("widths or freeze prefix".into());
        }
        Ok(())
    }
}
