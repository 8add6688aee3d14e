//! Feed-forward network stack with hand-derived gradients.
//!
//! Layers: linear, batch-norm, relu, sigmoid, flatten, and sparse-coding
//! layers (SCL) whose forward pass is an `lca_solve`. Any layer can carry a
//! tap label; `forward` returns the activations at every labeled layer, and
//! `forward_hooked` lets a caller transform the activation at a tap before
//! it continues downstream (that is how leak-time noise defenses are wired
//! in without this module knowing about them).
//!
//! Gradients through an SCL use the implicit gradient of the sparse coding
//! problem restricted to the converged code's support: on the active set S
//! the code satisfies D_Sᵀ(D_S·r − x) + λ = 0, so ∂r_S/∂x = (D_SᵀD_S)⁻¹D_Sᵀ
//! and the backward pass solves one masked conjugate-gradient system per
//! sample. Inactive coordinates are locally constant and get zero gradient.
//!
//! Training follows a two-rule scheme: backprop updates all non-sparse
//! parameters each batch, then every SCL dictionary takes a reconstruction
//! ("fast") update on the same batch. Task gradients additionally flow into
//! dictionaries of SCLs after the first when `lca_backprop` is set; the
//! input-layer SCL's dictionary never receives task gradients.

use std::collections::HashMap;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lca::{self, Dictionary, LcaConfig, SparseState};
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Linear { inputs: usize, outputs: usize },
    BatchNorm { features: usize },
    /// Sparse-coding layer: `features` atoms of size kernel×kernel over the
    /// incoming channels, codes solved with `lca`.
    Scl {
        features: usize,
        kernel: usize,
        stride: (usize, usize),
        lca: LcaConfig,
    },
    Relu,
    Sigmoid,
    Flatten,
}

#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub tap: Option<String>,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        LayerSpec { kind, tap: None }
    }

    pub fn tapped(kind: LayerKind, label: &str) -> Self {
        LayerSpec {
            kind,
            tap: Some(label.to_string()),
        }
    }
}

/// Declarative model description. `input_shape` is [C,H,W] for image inputs
/// or [D] for flat vector inputs; `classes` is the width of the final layer
/// output (class logits for classifiers, pixels for image-valued decoders).
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
    pub seed: u64,
}

/// Shape of a per-sample activation as it flows through the stack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActShape {
    Image(usize, usize, usize),
    Flat(usize),
}

impl ActShape {
    fn describe(&self) -> Vec<usize> {
        match *self {
            ActShape::Image(c, h, w) => vec![c, h, w],
            ActShape::Flat(d) => vec![d],
        }
    }
}

impl ModelSpec {
    /// Walk the layer list checking shape compatibility; returns the
    /// activation shape before each layer plus the final output shape
    /// (length = layers + 1).
    pub fn validate(&self) -> Result<Vec<ActShape>> {
        let mut shape = match self.input_shape.as_slice() {
            &[c, h, w] => ActShape::Image(c, h, w),
            &[d] => ActShape::Flat(d),
            other => {
                return Err(Error::dims("ModelSpec input", other, &[3]));
            }
        };
        if self.classes == 0 {
            return Err(Error::Parameter("classes must be >= 1".into()));
        }
        let mut shapes = vec![shape];
        let mut seen_taps: Vec<&str> = Vec::new();
        for (i, ls) in self.layers.iter().enumerate() {
            if let Some(t) = &ls.tap {
                if seen_taps.contains(&t.as_str()) {
                    return Err(Error::Parameter(format!("duplicate tap label `{t}`")));
                }
                seen_taps.push(t);
            }
            shape = match (&ls.kind, shape) {
                (LayerKind::Linear { inputs, outputs }, ActShape::Flat(d)) => {
                    if *inputs != d {
                        return Err(Error::dims(
                            &format!("layer {i} linear input"),
                            &[d],
                            &[*inputs],
                        ));
                    }
                    ActShape::Flat(*outputs)
                }
                (LayerKind::BatchNorm { features }, ActShape::Flat(d)) => {
                    if *features != d {
                        return Err(Error::dims(
                            &format!("layer {i} batch_norm features"),
                            &[d],
                            &[*features],
                        ));
                    }
                    shape
                }
                (LayerKind::BatchNorm { features }, ActShape::Image(c, _, _)) => {
                    if *features != c {
                        return Err(Error::dims(
                            &format!("layer {i} batch_norm channels"),
                            &[c],
                            &[*features],
                        ));
                    }
                    shape
                }
                (
                    LayerKind::Scl {
                        features,
                        kernel,
                        stride,
                        lca,
                    },
                    ActShape::Image(_, h, w),
                ) => {
                    lca.validate()?;
                    if *kernel == 0 || stride.0 == 0 || stride.1 == 0 {
                        return Err(Error::Parameter(format!(
                            "layer {i} scl kernel/stride must be >= 1"
                        )));
                    }
                    if h < stride.0 || w < stride.1 {
                        return Err(Error::Parameter(format!(
                            "layer {i} scl stride {stride:?} larger than input {h}x{w}"
                        )));
                    }
                    let (oh, ow) = tensor::conv2d_out_hw((h, w), *stride);
                    ActShape::Image(*features, oh, ow)
                }
                (LayerKind::Relu, s) | (LayerKind::Sigmoid, s) => s,
                (LayerKind::Flatten, ActShape::Image(c, h, w)) => ActShape::Flat(c * h * w),
                (kind, s) => {
                    return Err(Error::Parameter(format!(
                        "layer {i} ({kind:?}) cannot follow activation shape {:?}",
                        s.describe()
                    )));
                }
            };
            shapes.push(shape);
        }
        match shape {
            ActShape::Flat(d) if d == self.classes => Ok(shapes),
            other => Err(Error::dims(
                "model output",
                &other.describe(),
                &[self.classes],
            )),
        }
    }

    pub fn tap_index(&self, label: &str) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| l.tap.as_deref() == Some(label))
    }
}

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

/// A layer together with its parameters.
#[derive(Debug, Clone)]
pub enum Layer {
    Linear {
        w: Tensor, // [out, in]
        b: Tensor, // [out]
    },
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
    },
    Scl {
        dict: Dictionary,
        lca: LcaConfig,
    },
    Relu,
    Sigmoid,
    Flatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-layer extras captured during a cached forward pass.
#[derive(Debug, Clone)]
enum Aux {
    None,
    Bn {
        mean: Vec<f64>,
        var: Vec<f64>,
        xhat: Tensor,
        count: usize,
    },
    Scl {
        codes: Vec<Tensor>, // per-sample [F, Hc, Wc]
    },
}

/// Activations and layer extras from one forward pass, enough to run the
/// backward pass without recomputing anything.
pub struct ForwardCache {
    acts: Vec<Tensor>, // acts[i] = input to layer i; acts[L] = output
    aux: Vec<Aux>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Tensor {
        self.acts.last().unwrap()
    }
}

/// Parameter gradients aligned with `Model::param_tensors` per layer, plus
/// optional task gradients for SCL dictionaries.
pub struct Grads {
    params: Vec<Vec<Tensor>>,
    scl_atoms: Vec<Option<Tensor>>,
}

impl Grads {
    fn zeros_like(model: &Model) -> Grads {
        Grads {
            params: model
                .layers
                .iter()
                .map(|l| {
                    Model::layer_params(l)
                        .iter()
                        .map(|t| Tensor::zeros(t.shape()))
                        .collect()
                })
                .collect(),
            scl_atoms: model.layers.iter().map(|_| None).collect(),
        }
    }

    fn global_norm(&self) -> f64 {
        let mut sq = 0.0;
        for layer in &self.params {
            for t in layer {
                sq += t.data().iter().map(|v| v * v).sum::<f64>();
            }
        }
        sq.sqrt()
    }

    fn scale(&mut self, s: f64) {
        for layer in &mut self.params {
            for t in layer {
                for v in t.data_mut() {
                    *v *= s;
                }
            }
        }
    }

    fn accumulate(&mut self, other: &Grads, weight: f64) -> Result<()> {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            for (t, u) in a.iter_mut().zip(b) {
                t.axpy(weight, u)?;
            }
        }
        Ok(())
    }
}

/// Differential-privacy knobs: per-sample gradients are clipped to L2 norm
/// `clip_norm`, and Gaussian noise with standard deviation
/// `noise_sigma · clip_norm` is added to the summed gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpConfig {
    pub clip_norm: f64,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Step size for the per-batch reconstruction updates of SCL
    /// dictionaries. Decoupled from `learning_rate`: the atoms should track
    /// the input distribution slowly while the classifier trains fast —
    /// chasing every batch at the task rate makes the codes a moving target
    /// and the loss oscillate.
    pub dict_eta: f64,
    pub lca_backprop: bool,
    pub dp: Option<DpConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.01,
            dict_eta: 0.01,
            lca_backprop: false,
            dp: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Parameter(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Parameter(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.dict_eta >= 0.0) {
            return Err(Error::Parameter(format!(
                "dict_eta must be >= 0, got {}",
                self.dict_eta
            )));
        }
        if let Some(dp) = &self.dp {
            if !(dp.clip_norm > 0.0) || !(dp.noise_sigma >= 0.0) {
                return Err(Error::Parameter(
                    "dp clip_norm must be > 0 and noise_sigma >= 0".into(),
                ));
            }
        }
        Ok(())
    }
}

pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<Layer>,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            spec: self.spec.clone(),
            layers: self.layers.clone(),
        }
    }
}

impl Model {
    /// Build a model with seeded random parameters. Layer `i` draws from the
    /// stream `spec.seed → split(i)`, so adding a layer never reshuffles the
    /// others' initial weights.
    pub fn init(spec: ModelSpec) -> Result<Model> {
        let shapes = spec.validate()?;
        let root = Rng::new(spec.seed);
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, ls) in spec.layers.iter().enumerate() {
            let mut lrng = root.split(i as u64);
            let layer = match &ls.kind {
                LayerKind::Linear { inputs, outputs } => {
                    let mut w = Tensor::zeros(&[*outputs, *inputs]);
                    let sd = 1.0 / (*inputs as f64).sqrt();
                    lrng.fill_normal(w.data_mut(), sd);
                    Layer::Linear {
                        w,
                        b: Tensor::zeros(&[*outputs]),
                    }
                }
                LayerKind::BatchNorm { features } => Layer::BatchNorm {
                    gamma: Tensor::filled(&[*features], 1.0),
                    beta: Tensor::zeros(&[*features]),
                    running_mean: Tensor::zeros(&[*features]),
                    running_var: Tensor::filled(&[*features], 1.0),
                },
                LayerKind::Scl {
                    features,
                    kernel,
                    stride,
                    lca,
                } => {
                    let in_c = match shapes[i] {
                        ActShape::Image(c, _, _) => c,
                        ActShape::Flat(_) => unreachable!("validated"),
                    };
                    Layer::Scl {
                        dict: Dictionary::random(
                            *features, in_c, *kernel, *kernel, *stride, &mut lrng,
                        )?,
                        lca: *lca,
                    }
                }
                LayerKind::Relu => Layer::Relu,
                LayerKind::Sigmoid => Layer::Sigmoid,
                LayerKind::Flatten => Layer::Flatten,
            };
            layers.push(layer);
        }
        Ok(Model { spec, layers })
    }

    /// Trainable parameter tensors of a layer, excluding SCL dictionaries
    /// (those learn through the dictionary rules, not plain SGD) and
    /// batch-norm running statistics (not trained at all).
    fn layer_params(layer: &Layer) -> Vec<&Tensor> {
        match layer {
            Layer::Linear { w, b } => vec![w, b],
            Layer::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => Vec::new(),
        }
    }

    fn layer_params_mut(layer: &mut Layer) -> Vec<&mut Tensor> {
        match layer {
            Layer::Linear { w, b } => vec![w, b],
            Layer::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => Vec::new(),
        }
    }

    pub fn first_scl_index(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| matches!(l, Layer::Scl { .. }))
    }

    pub fn has_batch_stats_or_scl(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, Layer::BatchNorm { .. } | Layer::Scl { .. }))
    }

    fn check_batch_shape(&self, batch: &Tensor) -> Result<()> {
        let want: Vec<usize> = self.spec.input_shape.clone();
        let got = batch.shape();
        if got.len() != want.len() + 1 || got[1..] != want[..] {
            return Err(Error::dims("forward batch", got, &want));
        }
        Ok(())
    }

    /// Forward pass. Train mode normalizes with batch statistics (without
    /// touching the running ones — updating those is a training-loop side
    /// effect); eval mode uses the stored running statistics.
    pub fn forward(
        &self,
        batch: &Tensor,
        mode: Mode,
    ) -> Result<(Tensor, HashMap<String, Tensor>)> {
        let (cache, taps) = self.walk(batch, mode, &mut None, false)?;
        Ok((cache.acts.into_iter().last().unwrap(), taps))
    }

    /// Forward pass that lets `hook(label, activation)` transform the
    /// activation at every tapped layer before it continues downstream. The
    /// returned taps hold the transformed values — what an observer at that
    /// point would actually see.
    pub fn forward_hooked(
        &self,
        batch: &Tensor,
        mode: Mode,
        hook: &mut dyn FnMut(&str, Tensor) -> Result<Tensor>,
    ) -> Result<(Tensor, HashMap<String, Tensor>)> {
        let mut h: Option<&mut dyn FnMut(&str, Tensor) -> Result<Tensor>> = Some(hook);
        let (cache, taps) = self.walk(batch, mode, &mut h, false)?;
        Ok((cache.acts.into_iter().last().unwrap(), taps))
    }

    /// Train-mode forward keeping everything the backward pass needs.
    pub fn forward_cached(&self, batch: &Tensor) -> Result<ForwardCache> {
        let (cache, _) = self.walk(batch, Mode::Train, &mut None, true)?;
        Ok(cache)
    }

    fn walk(
        &self,
        batch: &Tensor,
        mode: Mode,
        hook: &mut Option<&mut dyn FnMut(&str, Tensor) -> Result<Tensor>>,
        want_cache: bool,
    ) -> Result<(ForwardCache, HashMap<String, Tensor>)> {
        self.check_batch_shape(batch)?;
        let n = batch.shape()[0];
        if n == 0 {
            return Err(Error::Parameter("empty batch".into()));
        }
        let mut taps = HashMap::new();
        let mut acts: Vec<Tensor> = vec![batch.clone()];
        let mut aux: Vec<Aux> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let x = acts.last().unwrap();
            let (mut y, a) = match layer {
                Layer::Linear { w, b } => {
                    let mut y = tensor::matmul_bt(x, w)?;
                    let out = w.shape()[0];
                    for row in 0..n {
                        let r = &mut y.data_mut()[row * out..(row + 1) * out];
                        for (v, bv) in r.iter_mut().zip(b.data()) {
                            *v += bv;
                        }
                    }
                    (y, Aux::None)
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => bn_forward(x, gamma, beta, running_mean, running_var, mode)?,
                Layer::Scl { dict, lca } => {
                    let samples = split_batch(x);
                    let states = lca::lca_solve_batch(&samples, dict, lca)?;
                    let codes: Vec<Tensor> = states.into_iter().map(|s| s.code).collect();
                    let y = stack_batch(&codes)?;
                    let a = if want_cache {
                        Aux::Scl { codes }
                    } else {
                        Aux::None
                    };
                    (y, a)
                }
                Layer::Relu => (x.map(|v| v.max(0.0)), Aux::None),
                Layer::Sigmoid => (x.map(sigmoid), Aux::None),
                Layer::Flatten => {
                    let d: usize = x.shape()[1..].iter().product();
                    (x.reshape(&[n, d])?, Aux::None)
                }
            };
            if let Some(label) = &self.spec.layers[i].tap {
                if let Some(h) = hook.as_deref_mut() {
                    y = h(label, y)?;
                }
                taps.insert(label.clone(), y.clone());
            }
            acts.push(y);
            aux.push(a);
        }
        Ok((ForwardCache { acts, aux }, taps))
    }

    /// Backward pass from `dout` (gradient of the loss w.r.t. the final
    /// output). Returns gradients for all SGD-trained parameters, plus task
    /// gradients for SCL dictionaries after the first when `lca_backprop`
    /// is set. The input-layer SCL never receives a dictionary task
    /// gradient, but gradients always flow through SCL codes to whatever
    /// sits upstream.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        dout: &Tensor,
        lca_backprop: bool,
    ) -> Result<Grads> {
        let mut grads = Grads::zeros_like(self);
        let first_scl = self.first_scl_index();
        let mut g = dout.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.acts[i];
            let y = &cache.acts[i + 1];
            g = match layer {
                Layer::Linear { w, .. } => {
                    let dw = tensor::matmul_at(&g, x)?;
                    let out = w.shape()[0];
                    let n = g.shape()[0];
                    let mut db = Tensor::zeros(&[out]);
                    for row in 0..n {
                        for (dbv, gv) in db
                            .data_mut()
                            .iter_mut()
                            .zip(&g.data()[row * out..(row + 1) * out])
                        {
                            *dbv += gv;
                        }
                    }
                    grads.params[i] = vec![dw, db];
                    tensor::matmul(&g, w)?
                }
                Layer::BatchNorm { gamma, .. } => {
                    let Aux::Bn {
                        var, xhat, count, ..
                    } = &cache.aux[i]
                    else {
                        return Err(Error::Parameter(
                            "backward requires a cache from forward_cached".into(),
                        ));
                    };
                    let (dgamma, dbeta, dx) = bn_backward(&g, gamma, var, xhat, *count)?;
                    grads.params[i] = vec![dgamma, dbeta];
                    dx
                }
                Layer::Scl { dict, .. } => {
                    let Aux::Scl { codes } = &cache.aux[i] else {
                        return Err(Error::Parameter(
                            "backward requires a cache from forward_cached".into(),
                        ));
                    };
                    let want_atoms = lca_backprop && first_scl != Some(i);
                    let (dx, datoms) = scl_backward(dict, x, codes, &g, want_atoms)?;
                    if let Some(da) = datoms {
                        grads.scl_atoms[i] = Some(da);
                    }
                    dx
                }
                Layer::Relu => {
                    let mut dx = g.clone();
                    for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                        if xv <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    dx
                }
                Layer::Sigmoid => {
                    let mut dx = g.clone();
                    for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                        *d *= yv * (1.0 - yv);
                    }
                    dx
                }
                Layer::Flatten => g.reshape(x.shape())?,
            };
        }
        Ok(grads)
    }

    /// SGD step on the plain (non-dictionary) parameters.
    fn apply_sgd(&mut self, grads: &Grads, lr: f64) -> Result<()> {
        for (layer, g) in self.layers.iter_mut().zip(&grads.params) {
            for (p, gt) in Model::layer_params_mut(layer).into_iter().zip(g) {
                p.axpy(-lr, gt)?;
            }
        }
        Ok(())
    }

    /// Apply task gradients to SCL dictionaries (collected only for
    /// non-first SCLs), renormalizing atoms afterwards.
    fn apply_scl_task_grads(&mut self, grads: &Grads, lr: f64, rng: &mut Rng) -> Result<()> {
        for (layer, da) in self.layers.iter_mut().zip(&grads.scl_atoms) {
            if let (Layer::Scl { dict, .. }, Some(da)) = (layer, da) {
                let mut atoms = dict.atoms().clone();
                atoms.axpy(-lr, da)?;
                // Going through the constructor re-normalizes; a zero atom
                // after a task step is pathological enough to surface.
                let mut refreshed = Dictionary::new(atoms, dict.stride());
                if refreshed.is_err() {
                    log::warn!("task gradient zeroed an atom; reinitializing");
                    let mut atoms = dict.atoms().clone();
                    atoms.axpy(-lr, da)?;
                    // Replace dead atoms at random and retry.
                    let n = atoms.len() / dict.num_atoms();
                    for f in 0..dict.num_atoms() {
                        let s = &mut atoms.data_mut()[f * n..(f + 1) * n];
                        if s.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-12 {
                            for v in s.iter_mut() {
                                *v = rng.normal();
                            }
                        }
                    }
                    refreshed = Dictionary::new(atoms, dict.stride());
                }
                *dict = refreshed?;
            }
        }
        Ok(())
    }

    /// Reconstruction ("fast") updates for every SCL on the cached batch.
    fn fast_dict_updates(&mut self, cache: &ForwardCache, lr: f64, rng: &mut Rng) -> Result<()> {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if let Layer::Scl { dict, .. } = layer {
                let Aux::Scl { codes } = &cache.aux[i] else {
                    continue;
                };
                let inputs = split_batch(&cache.acts[i]);
                let states: Vec<SparseState> = codes
                    .iter()
                    .map(|c| SparseState {
                        potentials: c.clone(),
                        code: c.clone(),
                    })
                    .collect();
                let pairs: Vec<(&Tensor, &SparseState)> =
                    inputs.iter().zip(states.iter()).map(|(x, s)| (x, s)).collect();
                *dict = lca::dict_update_batch(dict, &pairs, lr, rng)?;
            }
        }
        Ok(())
    }

    /// Re-seed every SCL dictionary from patches of the layer's actual
    /// input, walking the stack in order so later sparse layers see the
    /// output of the re-seeded earlier ones. Random unit atoms correlate
    /// weakly with real data, so at practical λ almost nothing clears the
    /// threshold, and the reconstruction gradient — which scales with the
    /// code — cannot pull the atoms anywhere. Seeding from data patches
    /// starts the solver in its active regime; it is the usual dictionary-
    /// learning initialization.
    pub fn warm_start_dictionaries(&mut self, batch: &Tensor, rng: &mut Rng) -> Result<()> {
        self.check_batch_shape(batch)?;
        let scls: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, Layer::Scl { .. }).then_some(i))
            .collect();
        for i in scls {
            let cache = self.forward_cached(batch)?;
            let x = &cache.acts[i];
            let Layer::Scl { dict, .. } = &mut self.layers[i] else {
                unreachable!("index came from the Scl filter above");
            };
            let (kh, kw) = (dict.atoms().shape()[2], dict.atoms().shape()[3]);
            let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            if h < kh || w < kw {
                log::warn!(
                    "layer {i}: {h}×{w} input is smaller than the {kh}×{kw} atoms, keeping random init"
                );
                continue;
            }
            let alen = c * kh * kw;
            let plane = h * w;
            let mut atoms = dict.atoms().clone();
            // Raw patches from nonnegative images share a dominant mean
            // component, so independent draws come out nearly collinear —
            // and the lateral Gram's top eigenvalue grows with that
            // coherence, which is what bounds the stable integration rate.
            // Mean-centering the patches would fix the conditioning but
            // starves the code: atoms negatively correlated with the (all
            // nonnegative) inputs never clear the threshold, and half the
            // dictionary plays dead. So keep the means, skim off the worst
            // collinearity by preferring the least-correlated of several
            // draws, and let the integration clock absorb the rest.
            const COHERENCE_CAP: f64 = 0.5;
            let mut accepted: Vec<Vec<f64>> = Vec::new();
            for f in 0..dict.num_atoms() {
                // Track the least-correlated candidate so we still make
                // progress when every draw exceeds the cap (an all-flat
                // input keeps the existing random atom).
                let mut best: Option<(f64, Vec<f64>)> = None;
                for _ in 0..24 {
                    let s = rng.below(n);
                    let y0 = rng.below(h - kh + 1);
                    let x0 = rng.below(w - kw + 1);
                    let mut patch = vec![0.0; alen];
                    for ch in 0..c {
                        for py in 0..kh {
                            for px in 0..kw {
                                patch[(ch * kh + py) * kw + px] =
                                    x.data()[(s * c + ch) * plane + (y0 + py) * w + (x0 + px)];
                            }
                        }
                    }
                    let norm: f64 = patch.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm <= 1e-6 {
                        continue;
                    }
                    for v in &mut patch {
                        *v /= norm;
                    }
                    let worst = accepted
                        .iter()
                        .map(|a| a.iter().zip(&patch).map(|(p, q)| p * q).sum::<f64>().abs())
                        .fold(0.0f64, f64::max);
                    if best.as_ref().is_none_or(|(bw, _)| worst < *bw) {
                        best = Some((worst, patch));
                    }
                    if worst <= COHERENCE_CAP {
                        break;
                    }
                }
                if let Some((_, patch)) = best {
                    atoms.data_mut()[f * alen..(f + 1) * alen].copy_from_slice(&patch);
                    accepted.push(patch);
                }
            }
            *dict = lca::Dictionary::new(atoms, dict.stride())?;
        }
        Ok(())
    }

    /// Fold the cached batch statistics into the running ones
    /// (running ← (1−m)·running + m·batch, variance unbiased).
    fn update_bn_running(&mut self, cache: &ForwardCache) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if let Layer::BatchNorm {
                running_mean,
                running_var,
                ..
            } = layer
            {
                if let Aux::Bn {
                    mean, var, count, ..
                } = &cache.aux[i]
                {
                    let unbias = if *count > 1 {
                        *count as f64 / (*count as f64 - 1.0)
                    } else {
                        1.0
                    };
                    for (rm, &m) in running_mean.data_mut().iter_mut().zip(mean) {
                        *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * m;
                    }
                    for (rv, &v) in running_var.data_mut().iter_mut().zip(var) {
                        *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * v * unbias;
                    }
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Split a batch tensor [N, rest...] into per-sample tensors [rest...].
fn split_batch(batch: &Tensor) -> Vec<Tensor> {
    let n = batch.shape()[0];
    let rest: Vec<usize> = batch.shape()[1..].to_vec();
    let len: usize = rest.iter().product();
    (0..n)
        .map(|i| Tensor::from_vec(&rest, batch.data()[i * len..(i + 1) * len].to_vec()).unwrap())
        .collect()
}

/// Stack per-sample tensors (all same shape) into [N, rest...].
fn stack_batch(samples: &[Tensor]) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Parameter("empty batch".into()))?;
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.len() * samples.len());
    for s in samples {
        data.extend_from_slice(s.data());
    }
    Tensor::from_vec(&shape, data)
}

/// Feature geometry of a batch-norm input: (features, inner spatial size).
/// Rank-2 inputs normalize per column; rank-4 per channel over N·H·W.
fn bn_geometry(x: &Tensor) -> Result<(usize, usize)> {
    match *x.shape() {
        [_, d] => Ok((d, 1)),
        [_, c, h, w] => Ok((c, h * w)),
        _ => Err(Error::dims("batch_norm input", x.shape(), &[2])),
    }
}

fn bn_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    mode: Mode,
) -> Result<(Tensor, Aux)> {
    let (f, inner) = bn_geometry(x)?;
    if gamma.len() != f {
        return Err(Error::dims("batch_norm features", x.shape(), gamma.shape()));
    }
    let n = x.shape()[0];
    let count = n * inner;
    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; f];
            let mut var = vec![0.0; f];
            for ni in 0..n {
                for fi in 0..f {
                    let base = (ni * f + fi) * inner;
                    for v in &x.data()[base..base + inner] {
                        mean[fi] += v;
                    }
                }
            }
            for m in mean.iter_mut() {
                *m /= count as f64;
            }
            for ni in 0..n {
                for fi in 0..f {
                    let base = (ni * f + fi) * inner;
                    for v in &x.data()[base..base + inner] {
                        let d = v - mean[fi];
                        var[fi] += d * d;
                    }
                }
            }
            for v in var.iter_mut() {
                *v /= count as f64;
            }
            (mean, var)
        }
        Mode::Eval => (running_mean.data().to_vec(), running_var.data().to_vec()),
    };
    let mut xhat = x.clone();
    let mut y = Tensor::zeros(x.shape());
    {
        let xh = xhat.data_mut();
        let yd = y.data_mut();
        for ni in 0..n {
            for fi in 0..f {
                let denom = (var[fi] + BN_EPS).sqrt();
                let base = (ni * f + fi) * inner;
                for k in base..base + inner {
                    xh[k] = (xh[k] - mean[fi]) / denom;
                    yd[k] = gamma.data()[fi] * xh[k] + beta.data()[fi];
                }
            }
        }
    }
    Ok((
        y,
        Aux::Bn {
            mean,
            var,
            xhat,
            count,
        },
    ))
}

/// Gradient through train-mode batch normalization (the batch statistics are
/// functions of the input, so their derivatives appear):
///   dx = γ/√(σ²+ε) · (g − mean(g) − x̂ · mean(g·x̂))
fn bn_backward(
    g: &Tensor,
    gamma: &Tensor,
    var: &[f64],
    xhat: &Tensor,
    count: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (f, inner) = bn_geometry(g)?;
    let n = g.shape()[0];
    let mut dgamma = Tensor::zeros(&[f]);
    let mut dbeta = Tensor::zeros(&[f]);
    let mut g_mean = vec![0.0; f];
    let mut gx_mean = vec![0.0; f];
    for ni in 0..n {
        for fi in 0..f {
            let base = (ni * f + fi) * inner;
            for k in base..base + inner {
                let gv = g.data()[k];
                let xv = xhat.data()[k];
                dgamma.data_mut()[fi] += gv * xv;
                dbeta.data_mut()[fi] += gv;
            }
        }
    }
    for fi in 0..f {
        g_mean[fi] = dbeta.data()[fi] / count as f64;
        gx_mean[fi] = dgamma.data()[fi] / count as f64;
    }
    let mut dx = Tensor::zeros(g.shape());
    for ni in 0..n {
        for fi in 0..f {
            let scale = gamma.data()[fi] / (var[fi] + BN_EPS).sqrt();
            let base = (ni * f + fi) * inner;
            for k in base..base + inner {
                dx.data_mut()[k] =
                    scale * (g.data()[k] - g_mean[fi] - xhat.data()[k] * gx_mean[fi]);
            }
        }
    }
    Ok((dgamma, dbeta, dx))
}

const CG_TOL: f64 = 1e-11;
const CG_MAX_ITERS: usize = 400;

/// Implicit gradient through one SCL, per sample. Given the upstream code
/// gradient δr, solve (D_SᵀD_S)·z = δr|_S on the support S by conjugate
/// gradients (the operator is applied as mask∘conv∘convT∘mask, so nothing
/// quadratic in the code size is ever materialized), then:
///   δx = convT(z),
///   δΩ = kgrad(residual, z) − kgrad(convT(z), r)   (optional task gradient).
fn scl_backward(
    dict: &Dictionary,
    x_batch: &Tensor,
    codes: &[Tensor],
    g_batch: &Tensor,
    want_atoms: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    let xs = split_batch(x_batch);
    let gs = split_batch(g_batch);
    let kh = dict.atoms().shape()[2];
    let kw = dict.atoms().shape()[3];

    let per_sample = |idx: usize| -> Result<(Tensor, Option<Tensor>)> {
        let x = &xs[idx];
        let code = &codes[idx];
        let g = &gs[idx];
        let out_hw = (x.shape()[1], x.shape()[2]);
        let mask: Vec<bool> = code.data().iter().map(|&v| v > 0.0).collect();
        if !mask.iter().any(|&m| m) {
            // Nothing active: the code is locally constant at zero.
            return Ok((
                Tensor::zeros(x.shape()),
                want_atoms.then(|| Tensor::zeros(dict.atoms().shape())),
            ));
        }
        let apply = |v: &Tensor| -> Result<Tensor> {
            let masked = mask_tensor(v, &mask);
            let img = dict.reconstruct(&masked, out_hw)?;
            let back = tensor::conv2d(&img, dict.atoms(), dict.stride())?;
            Ok(mask_tensor(&back, &mask))
        };
        let b = mask_tensor(g, &mask);
        let z = conjugate_gradient(&apply, &b)?;
        let z = mask_tensor(&z, &mask);
        let dx = dict.reconstruct(&z, out_hw)?;
        let datoms = if want_atoms {
            let recon = dict.reconstruct(code, out_hw)?;
            let resid = x.sub(&recon)?;
            let dz_img = dict.reconstruct(&z, out_hw)?;
            let a = tensor::conv2d_kernel_grad(&resid, &z, dict.stride(), (kh, kw))?;
            let b = tensor::conv2d_kernel_grad(&dz_img, code, dict.stride(), (kh, kw))?;
            Some(a.sub(&b)?)
        } else {
            None
        };
        Ok((dx, datoms))
    };

    #[cfg(feature = "parallel")]
    let results: Vec<Result<(Tensor, Option<Tensor>)>> = {
        use rayon::prelude::*;
        (0..xs.len()).into_par_iter().map(per_sample).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<(Tensor, Option<Tensor>)>> = (0..xs.len()).map(per_sample).collect();

    let mut dxs = Vec::with_capacity(xs.len());
    let mut datoms_sum: Option<Tensor> = want_atoms.then(|| Tensor::zeros(dict.atoms().shape()));
    for r in results {
        let (dx, da) = r?;
        dxs.push(dx);
        if let (Some(sum), Some(da)) = (datoms_sum.as_mut(), da) {
            sum.axpy(1.0, &da)?;
        }
    }
    let dx = stack_batch(&dxs)?;
    // No batch averaging here: the incoming gradient already carries the
    // loss's 1/N, so the per-sample sum is the batch gradient.
    Ok((dx, datoms_sum))
}

fn mask_tensor(t: &Tensor, mask: &[bool]) -> Tensor {
    let mut out = t.clone();
    for (v, &m) in out.data_mut().iter_mut().zip(mask) {
        if !m {
            *v = 0.0;
        }
    }
    out
}

/// Plain conjugate gradients for a symmetric positive (semi-)definite
/// operator. Deterministic; stops on relative residual or the iteration cap
/// (an interrupted solve is still a usable descent direction).
fn conjugate_gradient(
    apply: &dyn Fn(&Tensor) -> Result<Tensor>,
    b: &Tensor,
) -> Result<Tensor> {
    let mut x = Tensor::zeros(b.shape());
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs = r.dot(&r)?;
    let b_norm_sq = rs.max(1e-300);
    for _ in 0..CG_MAX_ITERS {
        if rs <= CG_TOL * CG_TOL * b_norm_sq {
            break;
        }
        let ap = apply(&p)?;
        let pap = p.dot(&ap)?;
        if pap <= 0.0 {
            // Semi-definite stall (support not independent); stop here.
            break;
        }
        let alpha = rs / pap;
        x.axpy(alpha, &p)?;
        r.axpy(-alpha, &ap)?;
        let rs_new = r.dot(&r)?;
        let beta = rs_new / rs;
        rs = rs_new;
        let mut p_next = r.clone();
        p_next.axpy(beta, &p)?;
        p = p_next;
    }
    Ok(x)
}

/// Stable softmax cross-entropy with mean reduction. Returns the scalar loss
/// and the gradient w.r.t. the logits (already divided by the batch size).
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::dims("cross_entropy", logits.shape(), &[labels.len()]));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut dlogits = Tensor::zeros(&[n, k]);
    let mut loss = 0.0;
    for i in 0..n {
        if labels[i] >= k {
            return Err(Error::Parameter(format!(
                "label {} out of range for {k} logits",
                labels[i]
            )));
        }
        let row = &logits.data()[i * k..(i + 1) * k];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        loss += z.ln() + m - row[labels[i]];
        let drow = &mut dlogits.data_mut()[i * k..(i + 1) * k];
        for (j, d) in drow.iter_mut().enumerate() {
            let p = (row[j] - m).exp() / z;
            *d = (p - if j == labels[i] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, dlogits))
}

/// Squared error summed per sample and averaged over the batch, with its
/// gradient. Summing over features (rather than averaging) keeps the
/// gradient scale independent of the output dimension, so regression and
/// classification train at comparable learning rates.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::dims("mse", pred.shape(), target.shape()));
    }
    let n = pred.shape()[0] as f64;
    let diff = pred.sub(target)?;
    let loss = diff.dot(&diff)? / n;
    Ok((loss, diff.scale(2.0 / n)))
}

enum LossTarget<'a> {
    Classes(&'a [usize]),
    Regression(&'a Tensor),
}

impl LossTarget<'_> {
    fn eval(&self, logits: &Tensor, rows: &[usize]) -> Result<(f64, Tensor)> {
        match self {
            LossTarget::Classes(all) => {
                let labels: Vec<usize> = rows.iter().map(|&i| all[i]).collect();
                softmax_cross_entropy(logits, &labels)
            }
            LossTarget::Regression(all) => {
                let d = all.len() / all.shape()[0];
                let mut data = Vec::with_capacity(rows.len() * d);
                for &i in rows {
                    data.extend_from_slice(&all.data()[i * d..(i + 1) * d]);
                }
                let target = Tensor::from_vec(&[rows.len(), d], data)?;
                mse_loss(logits, &target)
            }
        }
    }
}

fn train_batch(
    model: &mut Model,
    inputs: &Tensor,
    rows: &[usize],
    target: &LossTarget,
    cfg: &TrainConfig,
    rng: &mut Rng,
    batch_idx: usize,
) -> Result<f64> {
    let d: usize = inputs.shape()[1..].iter().product();
    let mut bx_data = Vec::with_capacity(rows.len() * d);
    for &i in rows {
        bx_data.extend_from_slice(&inputs.data()[i * d..(i + 1) * d]);
    }
    let mut bx_shape = vec![rows.len()];
    bx_shape.extend_from_slice(&inputs.shape()[1..]);
    let bx = Tensor::from_vec(&bx_shape, bx_data)?;

    let cache = model.forward_cached(&bx)?;
    let (loss, dout) = target.eval(cache.logits(), rows)?;
    if !loss.is_finite() {
        return Err(Error::Divergence {
            iteration: batch_idx,
            context: "training loss went non-finite".into(),
        });
    }

    if let Some(dp) = cfg.dp.clone() {
        // Per-sample gradients: clip each sample's global norm to C, sum,
        // add N(0, (σC)²) noise per coordinate, average, apply.
        let mut total = Grads::zeros_like(model);
        for (j, &row) in rows.iter().enumerate() {
            let sx = Tensor::from_vec(
                &bx_shape
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| if k == 0 { 1 } else { v })
                    .collect::<Vec<_>>(),
                bx.data()[j * d..(j + 1) * d].to_vec(),
            )?;
            let scache = model.forward_cached(&sx)?;
            let (_, sdout) = target.eval(scache.logits(), &[row])?;
            let mut g = model.backward(&scache, &sdout, false)?;
            let norm = g.global_norm();
            if norm > dp.clip_norm {
                g.scale(dp.clip_norm / norm);
            }
            total.accumulate(&g, 1.0)?;
        }
        for layer in &mut total.params {
            for t in layer {
                for v in t.data_mut() {
                    *v += dp.noise_sigma * dp.clip_norm * rng.normal();
                }
            }
        }
        total.scale(1.0 / rows.len() as f64);
        model.apply_sgd(&total, cfg.learning_rate)?;
    } else {
        let grads = model.backward(&cache, &dout, cfg.lca_backprop)?;
        model.apply_sgd(&grads, cfg.learning_rate)?;
        model.fast_dict_updates(&cache, cfg.dict_eta, rng)?;
        model.apply_scl_task_grads(&grads, cfg.learning_rate, rng)?;
    }
    model.update_bn_running(&cache);
    Ok(loss)
}

fn run_epoch(
    model: &mut Model,
    inputs: &Tensor,
    n: usize,
    target: LossTarget,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<f64> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Parameter("cannot train on an empty dataset".into()));
    }
    if cfg.dp.is_some() && model.has_batch_stats_or_scl() {
        return Err(Error::Parameter(
            "per-sample DP gradients are only defined for models without \
             batch-norm or sparse-coding layers"
                .into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut loss_sum = 0.0;
    let mut seen = 0usize;
    for (batch_idx, rows) in order.chunks(cfg.batch_size).enumerate() {
        let loss = train_batch(model, inputs, rows, &target, cfg, rng, batch_idx)?;
        loss_sum += loss * rows.len() as f64;
        seen += rows.len();
    }
    Ok(loss_sum / seen as f64)
}

/// One epoch of classification training (softmax cross-entropy). Shuffles
/// with `rng`, so epoch-to-epoch order is deterministic given the caller's
/// stream. Returns the mean per-sample loss.
pub fn train_epoch(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<f64> {
    run_epoch(
        model,
        data.images(),
        data.len(),
        LossTarget::Classes(data.labels()),
        cfg,
        rng,
    )
}

/// One epoch of regression training (MSE), for models that map activations
/// to images. `inputs` is [N, ...] matching the model input; `targets` is
/// [N, P] matching its output width.
pub fn train_epoch_mse(
    model: &mut Model,
    inputs: &Tensor,
    targets: &Tensor,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<f64> {
    if targets.rank() != 2 || targets.shape()[0] != inputs.shape()[0] {
        return Err(Error::dims("train targets", targets.shape(), inputs.shape()));
    }
    run_epoch(
        model,
        inputs,
        inputs.shape()[0],
        LossTarget::Regression(targets),
        cfg,
        rng,
    )
}

/// Top-1 accuracy in eval mode.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Parameter("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(256) {
        let (bx, by) = data.batch(chunk);
        let (logits, _) = model.forward(&bx, Mode::Eval)?;
        let k = logits.shape()[1];
        for (i, &label) in by.iter().enumerate() {
            let row = &logits.data()[i * k..(i + 1) * k];
            let pred = row
                .iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |best, (j, &v)| {
                    if v > best.1 {
                        (j, v)
                    } else {
                        best
                    }
                })
                .0;
            if pred == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Compare analytic gradients of every SGD-trained parameter against central
/// finite differences of the train-mode loss; returns the worst relative
/// error. SCL dictionaries are excluded (they are trained by the dictionary
/// rules), but gradients flowing *through* SCL layers are exercised whenever
/// parameters sit upstream of one.
pub fn backward_check(model: &Model, batch: &Tensor, labels: &[usize]) -> Result<f64> {
    backward_check_sampled(model, batch, labels, usize::MAX)
}

/// `backward_check`, but tensors wider than `max_probes` are spot-checked at
/// evenly spaced coordinates — for models where a forward pass is expensive.
pub fn backward_check_sampled(
    model: &Model,
    batch: &Tensor,
    labels: &[usize],
    max_probes: usize,
) -> Result<f64> {
    let cache = model.forward_cached(batch)?;
    let (_, dout) = softmax_cross_entropy(cache.logits(), labels)?;
    let grads = model.backward(&cache, &dout, false)?;

    let loss_of = |m: &Model| -> Result<f64> {
        let c = m.forward_cached(batch)?;
        Ok(softmax_cross_entropy(c.logits(), labels)?.0)
    };

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (li, layer) in model.layers.iter().enumerate() {
        let tensors = Model::layer_params(layer);
        for (ti, t) in tensors.iter().enumerate() {
            let len = t.len();
            let stride = len.div_ceil(max_probes).max(1);
            for coord in (0..len).step_by(stride) {
                let mut plus = model.clone();
                Model::layer_params_mut(&mut plus.layers[li])[ti].data_mut()[coord] += h;
                let mut minus = model.clone();
                Model::layer_params_mut(&mut minus.layers[li])[ti].data_mut()[coord] -= h;
                let fd = (loss_of(&plus)? - loss_of(&minus)?) / (2.0 * h);
                let an = grads.params[li][ti].data()[coord];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
    }
    Ok(worst)
}
