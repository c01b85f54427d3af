//! Fully connected mask/variance estimator.
//!
//! Hidden layers use ReLU. Two heads read the last hidden layer: a sigmoid
//! mask head and an exponential variance head offset by `c_sigma`. Both heads
//! emit one value per mel band; linear-frequency views come from the
//! filterbank's pseudo-inverse with clamping.
//!
//! Everything works on batches of frames: inputs are `frames x input_dim`
//! matrices and weights are stored `out x in`.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, MAGIC};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{clamp_range, FeatureFrame, MelFilterbank};
use crate::error::{Error, Result};

/// Layer sizes of a network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetDims {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
}

impl NetDims {
    pub fn new(input: usize, hidden: Vec<usize>, output: usize) -> Self {
        Self {
            input,
            hidden,
            output,
        }
    }

    /// Input width of the heads.
    pub fn last_hidden(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input)
    }

    fn validate(&self) -> Result<()> {
        if self.input == 0 || self.output == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidArgument(format!("zero-sized layer in {self:?}")));
        }
        Ok(())
    }
}

/// Affine layer `y = W x + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    fn glorot(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            weight: Array2::from_shape_simple_fn((outputs, inputs), || {
                rng.random_range(-limit..=limit)
            }),
            bias: Array1::zeros(outputs),
        }
    }
}

/// All trainable parameters. The same shape doubles as a gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub hidden: Vec<Dense>,
    pub mask_head: Dense,
    pub var_head: Dense,
}

/// Gradients share the parameter layout.
pub type Gradients = NetworkParams;

impl NetworkParams {
    pub fn zeros(dims: &NetDims) -> Result<Self> {
        dims.validate()?;
        let mut prev = dims.input;
        let hidden = dims
            .hidden
            .iter()
            .map(|&h| {
                let d = Dense::zeros(prev, h);
                prev = h;
                d
            })
            .collect();
        Ok(Self {
            hidden,
            mask_head: Dense::zeros(prev, dims.output),
            var_head: Dense::zeros(prev, dims.output),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.dims()).expect("existing params have valid dims")
    }

    pub fn dims(&self) -> NetDims {
        NetDims {
            input: self
                .hidden
                .first()
                .map_or(self.mask_head.inputs(), Dense::inputs),
            hidden: self.hidden.iter().map(Dense::outputs).collect(),
            output: self.mask_head.outputs(),
        }
    }

    /// Hidden layers, then the mask head, then the variance head.
    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.hidden
            .iter()
            .chain(std::iter::once(&self.mask_head))
            .chain(std::iter::once(&self.var_head))
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.hidden
            .iter_mut()
            .chain(std::iter::once(&mut self.mask_head))
            .chain(std::iter::once(&mut self.var_head))
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.hidden.len() == other.hidden.len()
            && self
                .layers()
                .zip(other.layers())
                .all(|(a, b)| a.weight.dim() == b.weight.dim() && a.bias.dim() == b.bias.dim())
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// All values in layer order, weights row-major then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in self.layers() {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    /// Inverse of [`to_flat`](Self::to_flat).
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                values.len(),
                self.num_params()
            )));
        }
        let mut it = values.iter();
        for l in self.layers_mut() {
            for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *w = *it.next().unwrap();
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|x| x.is_finite()))
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, other: &Self, c: f64) {
        for (a, b) in self.layers_mut().zip(other.layers()) {
            a.weight.scaled_add(c, &b.weight);
            a.bias.scaled_add(c, &b.bias);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for l in self.layers_mut() {
            l.weight *= c;
            l.bias *= c;
        }
    }
}

/// Glorot-uniform weights and zero biases, deterministic in `seed`.
pub fn init_params(dims: &NetDims, seed: u64) -> Result<NetworkParams> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prev = dims.input;
    let mut hidden = Vec::with_capacity(dims.hidden.len());
    for &h in &dims.hidden {
        hidden.push(Dense::glorot(prev, h, &mut rng));
        prev = h;
    }
    let mask_head = Dense::glorot(prev, dims.output, &mut rng);
    let var_head = Dense::glorot(prev, dims.output, &mut rng);
    Ok(NetworkParams {
        hidden,
        mask_head,
        var_head,
    })
}

/// Training hyperparameters shared by every objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainHyper {
    pub c_sigma: f64,
    pub dropout_in: f64,
    pub dropout_hidden: f64,
    pub l2: f64,
    pub step_size: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            c_sigma: 1e-4,
            dropout_in: 0.2,
            dropout_hidden: 0.5,
            l2: 1e-4,
            step_size: 1e-4,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        let p_ok = |p: f64| (0.0..1.0).contains(&p);
        if !(self.c_sigma > 0.0) || !p_ok(self.dropout_in) || !p_ok(self.dropout_hidden) {
            return Err(Error::InvalidArgument(format!("invalid hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// Raw head outputs in the mel domain, `frames x bands`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub mask_mel: Array2<f64>,
    pub var_mel: Array2<f64>,
}

/// Activations kept for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of each hidden layer after dropout; the last entry feeds the heads.
    layer_inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    pub pre_activations: Vec<Array2<f64>>,
    /// Scaled dropout keep-masks for the input and each hidden output.
    dropout: Vec<Option<Array2<f64>>>,
    heads: HeadOutputs,
    c_sigma: f64,
}

impl ForwardCache {
    pub fn heads(&self) -> &HeadOutputs {
        &self.heads
    }

    pub fn n_frames(&self) -> usize {
        self.heads.mask_mel.nrows()
    }
}

fn dropout_mask(shape: (usize, usize), p: f64, rng: &mut dyn RngCore) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { 0.0 } else { keep })
}

/// Logistic function kept strictly inside `(0, 1)`.
fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(1e-12, 1.0 - 1e-12)
}

/// Batched forward pass. Dropout (inverted scaling) runs only when a
/// generator is supplied.
pub fn forward_batch(
    params: &NetworkParams,
    x: ArrayView2<f64>,
    hyper: &TrainHyper,
    mut dropout_rng: Option<&mut dyn RngCore>,
) -> Result<(HeadOutputs, ForwardCache)> {
    let dims = params.dims();
    if x.ncols() != dims.input {
        return Err(Error::Shape(format!(
            "input of width {} for a network expecting {}",
            x.ncols(),
            dims.input
        )));
    }
    let frames = x.nrows();
    let mut dropout = Vec::with_capacity(params.hidden.len() + 1);
    let mut current = x.to_owned();
    let apply_dropout = |a: &mut Array2<f64>, p: f64, rng: &mut Option<&mut dyn RngCore>| {
        match rng.as_deref_mut() {
            Some(r) if p > 0.0 => {
                let m = dropout_mask(a.dim(), p, r);
                *a *= &m;
                Some(m)
            }
            _ => None,
        }
    };
    dropout.push(apply_dropout(&mut current, hyper.dropout_in, &mut dropout_rng));

    let mut layer_inputs = Vec::with_capacity(params.hidden.len() + 1);
    let mut pre_activations = Vec::with_capacity(params.hidden.len());
    for layer in &params.hidden {
        let pre = layer.apply(current.view());
        let mut out = pre.mapv(|v| v.max(0.0));
        dropout.push(apply_dropout(&mut out, hyper.dropout_hidden, &mut dropout_rng));
        layer_inputs.push(std::mem::replace(&mut current, out));
        pre_activations.push(pre);
    }
    let mask_mel = params.mask_head.apply(current.view()).mapv(sigmoid);
    let var_mel = params
        .var_head
        .apply(current.view())
        .mapv(|v| v.exp() + hyper.c_sigma);
    layer_inputs.push(current);
    debug_assert_eq!(mask_mel.nrows(), frames);

    let heads = HeadOutputs { mask_mel, var_mel };
    Ok((
        heads.clone(),
        ForwardCache {
            layer_inputs,
            pre_activations,
            dropout,
            heads,
            c_sigma: hyper.c_sigma,
        },
    ))
}

/// Reverse-mode gradients of a scalar objective whose partial derivatives
/// with respect to the mel-domain head outputs are `grad_mask_mel` and
/// `grad_var_mel` (`frames x bands`). Adds `2 * l2 * W` to every weight
/// gradient; biases are not regularized.
pub fn backward(
    params: &NetworkParams,
    cache: &ForwardCache,
    grad_mask_mel: ArrayView2<f64>,
    grad_var_mel: ArrayView2<f64>,
    hyper: &TrainHyper,
) -> Result<Gradients> {
    let heads = &cache.heads;
    if grad_mask_mel.dim() != heads.mask_mel.dim() || grad_var_mel.dim() != heads.var_mel.dim() {
        return Err(Error::Shape("head gradients do not match cached outputs".into()));
    }
    if cache.layer_inputs.len() != params.hidden.len() + 1
        || cache.layer_inputs.last().map(|a| a.ncols()) != Some(params.mask_head.inputs())
    {
        return Err(Error::Shape("forward cache does not match parameters".into()));
    }

    let mut grads = params.zeros_like();
    let mut d_mu = grad_mask_mel.to_owned();
    Zip::from(&mut d_mu)
        .and(&heads.mask_mel)
        .for_each(|d, &m| *d *= m * (1.0 - m));
    let mut d_sig = grad_var_mel.to_owned();
    Zip::from(&mut d_sig)
        .and(&heads.var_mel)
        .for_each(|d, &v| *d *= v - cache.c_sigma);

    let head_in = cache.layer_inputs.last().unwrap();
    grads.mask_head.weight = d_mu.t().dot(head_in);
    grads.mask_head.bias = d_mu.sum_axis(Axis(0));
    grads.var_head.weight = d_sig.t().dot(head_in);
    grads.var_head.bias = d_sig.sum_axis(Axis(0));

    let mut d = d_mu.dot(&params.mask_head.weight) + d_sig.dot(&params.var_head.weight);
    for l in (0..params.hidden.len()).rev() {
        if let Some(m) = &cache.dropout[l + 1] {
            d *= m;
        }
        Zip::from(&mut d)
            .and(&cache.pre_activations[l])
            .for_each(|d, &p| {
                if p <= 0.0 {
                    *d = 0.0
                }
            });
        grads.hidden[l].weight = d.t().dot(&cache.layer_inputs[l]);
        grads.hidden[l].bias = d.sum_axis(Axis(0));
        if l > 0 {
            d = d.dot(&params.hidden[l].weight);
        }
    }

    if hyper.l2 != 0.0 {
        for (g, p) in grads.layers_mut().zip(params.layers()) {
            g.weight.scaled_add(2.0 * hyper.l2, &p.weight);
        }
    }
    Ok(grads)
}

/// Mask and variance estimates for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPosterior {
    pub mask_mel: Vec<f64>,
    pub var_mel: Vec<f64>,
    pub mask_lin: Vec<f64>,
    pub var_lin: Vec<f64>,
}

/// Mask and variance estimates for every frame of an utterance,
/// `frames x bins` in the linear domain. The unclamped expansions are kept
/// so gradients can be gated by the clamps.
#[derive(Debug, Clone, PartialEq)]
pub struct UtterancePosterior {
    pub mask_mel: Array2<f64>,
    pub var_mel: Array2<f64>,
    pub mask_lin: Array2<f64>,
    pub var_lin: Array2<f64>,
    mask_lin_raw: Array2<f64>,
    var_lin_raw: Array2<f64>,
    c_sigma: f64,
}

impl UtterancePosterior {
    /// Expands mel head outputs to linear frequency: masks clamped to
    /// `[0, 1]`, variances floored at `c_sigma`.
    pub fn from_heads(fb: &MelFilterbank, heads: &HeadOutputs, c_sigma: f64) -> Result<Self> {
        if heads.mask_mel.ncols() != fb.bands() {
            return Err(Error::Shape(format!(
                "{} head outputs for {} bands",
                heads.mask_mel.ncols(),
                fb.bands()
            )));
        }
        let mask_lin_raw = fb.expand_frames(heads.mask_mel.view());
        let var_lin_raw = fb.expand_frames(heads.var_mel.view());
        Ok(Self {
            mask_lin: mask_lin_raw.mapv(|x| clamp_range(x, 0.0, Some(1.0))),
            var_lin: var_lin_raw.mapv(|x| clamp_range(x, c_sigma, None)),
            mask_mel: heads.mask_mel.clone(),
            var_mel: heads.var_mel.clone(),
            mask_lin_raw,
            var_lin_raw,
            c_sigma,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.mask_lin.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.mask_lin.ncols()
    }

    pub fn frame(&self, t: usize) -> MaskPosterior {
        MaskPosterior {
            mask_mel: self.mask_mel.row(t).to_vec(),
            var_mel: self.var_mel.row(t).to_vec(),
            mask_lin: self.mask_lin.row(t).to_vec(),
            var_lin: self.var_lin.row(t).to_vec(),
        }
    }

    /// Chains linear-domain partials (`frames x bins`) back to the mel head
    /// outputs. Bins held at a clamp contribute nothing.
    pub fn grads_to_mel(
        &self,
        fb: &MelFilterbank,
        d_mask_lin: ArrayView2<f64>,
        d_var_lin: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        if d_mask_lin.dim() != self.mask_lin.dim() || d_var_lin.dim() != self.var_lin.dim() {
            return Err(Error::Shape("linear-domain gradient shape".into()));
        }
        let mut dm = d_mask_lin.to_owned();
        Zip::from(&mut dm).and(&self.mask_lin_raw).for_each(|d, &r| {
            if !(0.0..=1.0).contains(&r) {
                *d = 0.0
            }
        });
        let mut dv = d_var_lin.to_owned();
        let c = self.c_sigma;
        Zip::from(&mut dv).and(&self.var_lin_raw).for_each(|d, &r| {
            if r < c {
                *d = 0.0
            }
        });
        Ok((dm.dot(&fb.inverse), dv.dot(&fb.inverse)))
    }
}

/// Single-frame forward pass with linear-domain views.
pub fn forward(
    params: &NetworkParams,
    fb: &MelFilterbank,
    x: &FeatureFrame,
    hyper: &TrainHyper,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<(MaskPosterior, ForwardCache)> {
    let input = ArrayView2::from_shape((1, x.values.len()), &x.values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    let (heads, cache) = forward_batch(params, input, hyper, dropout_rng)?;
    let post = UtterancePosterior::from_heads(fb, &heads, hyper.c_sigma)?;
    Ok((post.frame(0), cache))
}
