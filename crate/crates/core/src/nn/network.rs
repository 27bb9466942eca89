use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{self, ConvCache, Mode, ParamGrads, PoolCache, KERNEL};
use super::tensor::{Scalar, Tensor4};
use super::NnError;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    /// 3x3 same-padded convolution.
    Conv2d { filters: usize },
    /// 2x2 max pooling, stride 2.
    Maxpool,
    Dropout { rate: f64 },
    Flatten,
    Dense { units: usize },
    Relu,
    Softmax,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Maxpool => "maxpool",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::Softmax => "softmax",
        }
    }
}

/// `[conv3x3 -> relu -> pool2x2 -> dropout] x len(filters) -> flatten ->
/// dense(hidden) -> relu -> dense(classes) -> softmax`.
pub fn classifier_specs(conv_filters: &[usize], dense_hidden: usize, dropout: f64, classes: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    for &filters in conv_filters {
        specs.extend([
            LayerSpec::Conv2d { filters },
            LayerSpec::Relu,
            LayerSpec::Maxpool,
            LayerSpec::Dropout { rate: dropout },
        ]);
    }
    specs.extend([
        LayerSpec::Flatten,
        LayerSpec::Dense { units: dense_hidden },
        LayerSpec::Relu,
        LayerSpec::Dense { units: classes },
        LayerSpec::Softmax,
    ]);
    specs
}

/// `(height, width, channels)` of one sample.
pub type Shape = [usize; 3];

/// Output shape of every layer, starting from `input`.
pub fn shape_walk(specs: &[LayerSpec], input: Shape) -> Result<Vec<Shape>, NnError> {
    let mut shapes = Vec::with_capacity(specs.len());
    let mut cur = input;
    for (i, spec) in specs.iter().enumerate() {
        cur = match *spec {
            LayerSpec::Conv2d { filters } => {
                if filters == 0 {
                    return Err(NnError::Shape(format!("layer {i}: conv2d with zero filters")));
                }
                [cur[0], cur[1], filters]
            }
            LayerSpec::Maxpool => {
                if cur[0] % 2 != 0 || cur[1] % 2 != 0 {
                    return Err(NnError::Shape(format!(
                        "layer {i}: maxpool needs even dimensions, got {}x{}",
                        cur[0], cur[1]
                    )));
                }
                [cur[0] / 2, cur[1] / 2, cur[2]]
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(NnError::Shape(format!("layer {i}: dropout rate {rate} outside [0, 1)")));
                }
                cur
            }
            LayerSpec::Flatten => [1, 1, cur.iter().product()],
            LayerSpec::Dense { units } => {
                if units == 0 {
                    return Err(NnError::Shape(format!("layer {i}: dense with zero units")));
                }
                [1, 1, units]
            }
            LayerSpec::Relu => cur,
            LayerSpec::Softmax => {
                if i + 1 != specs.len() {
                    return Err(NnError::Shape(format!("layer {i}: softmax must be the last layer")));
                }
                cur
            }
        };
        shapes.push(cur);
    }
    if specs.last() != Some(&LayerSpec::Softmax) {
        return Err(NnError::Shape("network must end with softmax".into()));
    }
    Ok(shapes)
}

/// Weights and bias of one conv or dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<S> {
    pub weights: Vec<S>,
    pub bias: Vec<S>,
    pub weight_shape: Vec<usize>,
}

impl<S: Scalar> LayerParams<S> {
    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Expected `(weight_shape, bias_len)` for each layer, `None` for layers
/// without parameters.
pub fn param_shapes(specs: &[LayerSpec], input: Shape) -> Result<Vec<Option<(Vec<usize>, usize)>>, NnError> {
    let shapes = shape_walk(specs, input)?;
    Ok(specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let prev = if i == 0 { input } else { shapes[i - 1] };
            match *spec {
                LayerSpec::Conv2d { filters } => Some((vec![KERNEL, KERNEL, prev[2], filters], filters)),
                LayerSpec::Dense { units } => Some((vec![prev.iter().product(), units], units)),
                _ => None,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<S> {
    pub specs: Vec<LayerSpec>,
    pub input_shape: Shape,
    pub params: Vec<Option<LayerParams<S>>>,
}

/// What each layer kept from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub enum LayerCache<S> {
    Conv(ConvCache<S>),
    Pool(PoolCache),
    Relu(Vec<bool>),
    Dropout(Option<Vec<S>>),
    Flatten([usize; 4]),
    /// Input of a dense layer.
    Dense(Tensor4<S>),
    Softmax,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<S> {
    pub layers: Vec<LayerCache<S>>,
    pub probs: Tensor4<S>,
}

pub type Grads<S> = Vec<Option<ParamGrads<S>>>;

impl<S: Scalar> Network<S> {
    /// Fresh network with He-normal weights (`std = sqrt(2 / fan_in)`) and
    /// zero biases, drawn from the `init` stream of `seed`.
    pub fn init(specs: Vec<LayerSpec>, input_shape: Shape, seed: u64) -> Result<Self, NnError> {
        let shapes = param_shapes(&specs, input_shape)?;
        let params = shapes
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                shape.map(|(weight_shape, bias_len)| {
                    let fan_in: usize = weight_shape[..weight_shape.len() - 1].iter().product();
                    let count: usize = weight_shape.iter().product();
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    let mut r = rng::stream(seed, rng::INIT, &[i as u64]);
                    LayerParams {
                        weights: (0..count).map(|_| S::of(normal.sample(&mut r))).collect(),
                        bias: vec![S::zero(); bias_len],
                        weight_shape,
                    }
                })
            })
            .collect();
        Ok(Self {
            specs,
            input_shape,
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().flatten().map(LayerParams::len).sum()
    }

    pub fn num_classes(&self) -> usize {
        shape_walk(&self.specs, self.input_shape)
            .ok()
            .and_then(|s| s.last().map(|s| s[2]))
            .unwrap_or(0)
    }

    /// Name used in diagnostics, e.g. `conv2d_0` for the first layer.
    pub fn layer_name(&self, i: usize) -> String {
        format!("{}_{i}", self.specs[i].kind())
    }

    pub fn cast<T: Scalar>(&self) -> Network<T> {
        let conv = |v: &[S]| v.iter().map(|x| T::of(x.as_f64())).collect();
        Network {
            specs: self.specs.clone(),
            input_shape: self.input_shape,
            params: self
                .params
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| LayerParams {
                        weights: conv(&p.weights),
                        bias: conv(&p.bias),
                        weight_shape: p.weight_shape.clone(),
                    })
                })
                .collect(),
        }
    }

    fn check_input(&self, batch: &Tensor4<S>) -> Result<(), NnError> {
        let [_, h, w, c] = batch.shape();
        if [h, w, c] != self.input_shape {
            return Err(NnError::Shape(format!(
                "model expects {}x{}x{} inputs, got {h}x{w}x{c}",
                self.input_shape[0], self.input_shape[1], self.input_shape[2]
            )));
        }
        if batch.n == 0 {
            return Err(NnError::Shape("empty batch".into()));
        }
        Ok(())
    }

    fn params_of(&self, i: usize) -> Result<&LayerParams<S>, NnError> {
        self.params[i]
            .as_ref()
            .ok_or_else(|| NnError::State(format!("{} has no parameters", self.layer_name(i))))
    }

    fn run<R: Rng + ?Sized>(
        &self,
        batch: &Tensor4<S>,
        mode: Mode,
        rng: &mut R,
        keep: bool,
    ) -> Result<(Tensor4<S>, Vec<LayerCache<S>>), NnError> {
        self.check_input(batch)?;
        let mut caches = Vec::with_capacity(if keep { self.specs.len() } else { 0 });
        let mut x = batch.clone();
        for (i, spec) in self.specs.iter().enumerate() {
            let (next, cache) = match *spec {
                LayerSpec::Conv2d { .. } => {
                    let p = self.params_of(i)?;
                    let (out, cache) = layers::conv2d_forward(&x, &p.weights, &p.bias)?;
                    (out, LayerCache::Conv(cache))
                }
                LayerSpec::Maxpool => {
                    let (out, cache) = layers::maxpool_forward(&x)?;
                    (out, LayerCache::Pool(cache))
                }
                LayerSpec::Relu => {
                    let (out, mask) = layers::relu_forward(&x);
                    (out, LayerCache::Relu(mask))
                }
                LayerSpec::Dropout { rate } => {
                    let (out, mask) = layers::dropout_forward(&x, rate, mode, rng);
                    (out, LayerCache::Dropout(mask))
                }
                LayerSpec::Flatten => {
                    let shape = x.shape();
                    let len = x.sample_len();
                    (Tensor4::from_vec(x.n, 1, 1, len, x.data), LayerCache::Flatten(shape))
                }
                LayerSpec::Dense { .. } => {
                    let p = self.params_of(i)?;
                    let out = layers::dense_forward(&x, &p.weights, &p.bias)?;
                    (out, LayerCache::Dense(x))
                }
                LayerSpec::Softmax => {
                    let k = x.sample_len();
                    let mut probs = Vec::with_capacity(x.data.len());
                    for row in x.data.chunks_exact(k) {
                        probs.extend(layers::softmax(row));
                    }
                    (Tensor4::from_vec(x.n, 1, 1, k, probs), LayerCache::Softmax)
                }
            };
            if keep {
                caches.push(cache);
            }
            x = next;
        }
        Ok((x, caches))
    }

    /// Forward pass keeping per-layer caches for [`Network::backward`].
    /// `rng` drives dropout in train mode and is not touched in eval mode.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        batch: &Tensor4<S>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardCache<S>, NnError> {
        let (probs, layers) = self.run(batch, mode, rng, true)?;
        Ok(ForwardCache { layers, probs })
    }

    /// Eval-mode class probabilities, one row per sample.
    pub fn predict(&self, batch: &Tensor4<S>) -> Result<Tensor4<S>, NnError> {
        let mut unused = rng::stream(0, "eval", &[]);
        Ok(self.run(batch, Mode::Eval, &mut unused, false)?.0)
    }

    /// Gradients of the mean cross-entropy of `cache.probs` against `labels`.
    pub fn backward(&self, cache: &ForwardCache<S>, labels: &[usize]) -> Result<Grads<S>, NnError> {
        if cache.layers.len() != self.specs.len() {
            return Err(NnError::State(format!(
                "forward cache has {} layers, network has {}",
                cache.layers.len(),
                self.specs.len()
            )));
        }
        if labels.len() != cache.probs.n {
            return Err(NnError::Shape(format!(
                "{} labels for a batch of {}",
                labels.len(),
                cache.probs.n
            )));
        }
        let classes = cache.probs.sample_len();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(NnError::Shape(format!("label {bad} outside {classes} classes")));
        }
        let mut grads: Grads<S> = vec![None; self.specs.len()];
        let mut g = layers::softmax_cross_entropy_grad(&cache.probs, labels);
        let mismatch = |i: usize| NnError::State(format!("missing forward cache for {}", self.layer_name(i)));
        for i in (0..self.specs.len()).rev() {
            let need_input = i > 0;
            g = match (&self.specs[i], &cache.layers[i]) {
                (LayerSpec::Softmax, LayerCache::Softmax) => g,
                (LayerSpec::Dense { .. }, LayerCache::Dense(input)) => {
                    let p = self.params_of(i)?;
                    let (gin, pg) = layers::dense_backward(&g, input, &p.weights, need_input)?;
                    grads[i] = Some(pg);
                    match gin {
                        Some(gin) => gin,
                        None => break,
                    }
                }
                (LayerSpec::Relu, LayerCache::Relu(mask)) => layers::relu_backward(&g, mask),
                (LayerSpec::Flatten, LayerCache::Flatten([n, h, w, c])) => Tensor4::from_vec(*n, *h, *w, *c, g.data),
                (LayerSpec::Dropout { .. }, LayerCache::Dropout(mask)) => layers::dropout_backward(&g, mask.as_deref()),
                (LayerSpec::Maxpool, LayerCache::Pool(pc)) => layers::maxpool_backward(&g, pc)?,
                (LayerSpec::Conv2d { .. }, LayerCache::Conv(cc)) => {
                    let p = self.params_of(i)?;
                    let (gin, pg) = layers::conv2d_backward(&g, cc, &p.weights, need_input)?;
                    grads[i] = Some(pg);
                    match gin {
                        Some(gin) => gin,
                        None => break,
                    }
                }
                _ => return Err(mismatch(i)),
            };
        }
        Ok(grads)
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<S> {
    pub m: Vec<S>,
    pub v: Vec<S>,
}

impl<S: Scalar> Moments<S> {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![S::zero(); len],
            v: vec![S::zero(); len],
        }
    }
}

/// Adam state for a whole network: per layer, moments for weights and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub step: u64,
    pub moments: Vec<Option<(Moments<S>, Moments<S>)>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn for_network(net: &Network<S>) -> Self {
        Self {
            step: 0,
            moments: net
                .params
                .iter()
                .map(|p| p.as_ref().map(|p| (Moments::zeros(p.weights.len()), Moments::zeros(p.bias.len()))))
                .collect(),
        }
    }
}

/// One bias-corrected Adam update of `params` at step `t` (1-based).
pub fn adam_update<S: Scalar>(params: &mut [S], grads: &[S], state: &mut Moments<S>, t: u64, cfg: &AdamConfig) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let g = g.as_f64();
        let m_new = cfg.beta1 * m.as_f64() + (1.0 - cfg.beta1) * g;
        let v_new = cfg.beta2 * v.as_f64() + (1.0 - cfg.beta2) * g * g;
        *m = S::of(m_new);
        *v = S::of(v_new);
        let m_hat = m_new / c1;
        let v_hat = v_new / c2;
        *p = S::of(p.as_f64() - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps));
    }
}

fn max_abs<S: Scalar>(v: &[S]) -> f64 {
    v.iter().map(|x| x.as_f64().abs()).fold(0.0, |a, b| if b.is_nan() || a.is_nan() { f64::NAN } else { a.max(b) })
}

/// Applies one Adam step to every parameterized layer. Non-finite gradients
/// abort before anything is modified; non-finite weights after the update
/// are reported as well.
pub fn adam_step<S: Scalar>(
    net: &mut Network<S>,
    grads: &Grads<S>,
    state: &mut AdamState<S>,
    cfg: &AdamConfig,
) -> Result<(), NnError> {
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.weights.iter().chain(&g.bias).any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite {
                    layer: net.layer_name(i),
                    what: "gradient",
                    max_abs: max_abs(&g.weights).max(max_abs(&g.bias)),
                });
            }
        }
    }
    state.step += 1;
    let t = state.step;
    for i in 0..net.specs.len() {
        let name = net.layer_name(i);
        match (&mut net.params[i], &grads[i], &mut state.moments[i]) {
            (Some(p), Some(g), Some((mw, mb))) => {
                adam_update(&mut p.weights, &g.weights, mw, t, cfg);
                adam_update(&mut p.bias, &g.bias, mb, t, cfg);
                if p.weights.iter().chain(&p.bias).any(|v| !v.is_finite()) {
                    return Err(NnError::NonFinite {
                        layer: name,
                        what: "weight",
                        max_abs: max_abs(&p.weights),
                    });
                }
            }
            (None, None, None) => {}
            _ => return Err(NnError::State(format!("gradient/optimizer state mismatch at {name}"))),
        }
    }
    Ok(())
}
