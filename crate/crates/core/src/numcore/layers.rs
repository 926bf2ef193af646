//! Sequential networks built from [`LayerSpec`]s with exact reverse-mode gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::ops::{self, Switches};
use crate::numcore::{Rng, Scalar, Tensor};

/// One layer in `Nc k` / `Np` / `Nf` notation terms, plus activations and dropout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// `filters` valid convolutions of size `kernel x kernel`.
    Conv { filters: usize, kernel: usize },
    MaxPool { pool: usize },
    /// Reuses the switches of the most recent unmatched `MaxPool`.
    Unpool { pool: usize },
    /// Transposed convolution producing `channels` output channels.
    Deconv { channels: usize, kernel: usize },
    /// Fully connected layer; the output is reshaped to `reshape` when given.
    Dense {
        units: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reshape: Option<Vec<usize>>,
    },
    Elu { alpha: f64 },
    Dropout { rate: f64 },
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::Conv { filters, kernel } | LayerSpec::Deconv { channels: filters, kernel } => {
                if *kernel < 1 || *filters < 1 {
                    return Err(Error::param(format!("{self:?}: sizes must be >= 1")));
                }
            }
            LayerSpec::MaxPool { pool } | LayerSpec::Unpool { pool } => {
                if *pool < 1 {
                    return Err(Error::param("pool size must be >= 1"));
                }
            }
            LayerSpec::Dense { units, reshape } => {
                if *units < 1 {
                    return Err(Error::param("dense unit count must be >= 1"));
                }
                if let Some(r) = reshape {
                    if r.iter().product::<usize>() != *units {
                        return Err(Error::param(format!(
                            "dense reshape {r:?} does not hold {units} units"
                        )));
                    }
                }
            }
            LayerSpec::Elu { alpha } => {
                if !(*alpha > 0.0) {
                    return Err(Error::param("elu alpha must be > 0"));
                }
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::param(format!("dropout rate {rate} outside [0, 1)")));
                }
            }
        }
        Ok(())
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv { .. } | LayerSpec::Deconv { .. } | LayerSpec::Dense { .. }
        )
    }
}

#[derive(Clone, Debug)]
struct Layer<T> {
    spec: LayerSpec,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    params: Vec<Tensor<T>>,
    pool_source: Option<usize>,
}

/// Feed-forward network over a fixed input shape.
#[derive(Clone, Debug)]
pub struct Network<T> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
    version: u64,
}

/// Activations, pooling switches and dropout masks of one forward pass.
#[derive(Clone, Debug)]
pub struct GradTape<T> {
    version: u64,
    inputs: Vec<Tensor<T>>,
    switches: Vec<Option<Switches>>,
    masks: Vec<Option<Vec<T>>>,
}

/// Parameter gradients laid out like the network's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T> {
    pub per_layer: Vec<Vec<Tensor<T>>>,
}

pub enum Mode<'a> {
    Train(&'a mut Rng),
    Infer,
}

fn glorot<T: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.uniform_in(-limit, limit)))
}

impl<T: Scalar> Network<T> {
    /// Infers every layer's shape and initializes parameters uniformly in
    /// `±sqrt(6 / (fan_in + fan_out))`, biases at zero.
    pub fn build(input_shape: &[usize], specs: &[LayerSpec], rng: &mut Rng) -> Result<Self> {
        let mut layers: Vec<Layer<T>> = Vec::with_capacity(specs.len());
        let mut pools: Vec<usize> = Vec::new();
        let mut shape = input_shape.to_vec();
        for (idx, spec) in specs.iter().enumerate() {
            spec.validate()?;
            let mut pool_source = None;
            let (out_shape, params) = match spec {
                LayerSpec::Conv { filters, kernel } => {
                    let (h, w, c) = hwc(&shape)?;
                    if h < *kernel || w < *kernel {
                        return Err(Error::dim(format!("layer {idx}: input {shape:?} smaller than kernel")));
                    }
                    let k = glorot(&[*kernel, *kernel, c, *filters], kernel * kernel * c, kernel * kernel * filters, rng);
                    (
                        vec![h - kernel + 1, w - kernel + 1, *filters],
                        vec![k, Tensor::zeros(&[*filters])],
                    )
                }
                LayerSpec::Deconv { channels, kernel } => {
                    let (h, w, c) = hwc(&shape)?;
                    let k = glorot(&[*kernel, *kernel, *channels, c], kernel * kernel * c, kernel * kernel * channels, rng);
                    (
                        vec![h + kernel - 1, w + kernel - 1, *channels],
                        vec![k, Tensor::zeros(&[*channels])],
                    )
                }
                LayerSpec::MaxPool { pool } => {
                    let (h, w, c) = hwc(&shape)?;
                    if h < *pool || w < *pool {
                        return Err(Error::dim(format!("layer {idx}: input {shape:?} smaller than pool")));
                    }
                    pools.push(idx);
                    (vec![h / pool, w / pool, c], vec![])
                }
                LayerSpec::Unpool { pool } => {
                    let src = pools.pop().ok_or_else(|| {
                        Error::param(format!("layer {idx}: unpool without a preceding maxpool"))
                    })?;
                    if !matches!(layers[src].spec, LayerSpec::MaxPool { pool: p } if p == *pool) {
                        return Err(Error::param(format!("layer {idx}: unpool size differs from its maxpool")));
                    }
                    if shape != layers[src].out_shape {
                        return Err(Error::dim(format!(
                            "layer {idx}: unpool input {shape:?} does not match pooled shape {:?}",
                            layers[src].out_shape
                        )));
                    }
                    pool_source = Some(src);
                    (layers[src].in_shape.clone(), vec![])
                }
                LayerSpec::Dense { units, reshape } => {
                    let fan_in: usize = shape.iter().product();
                    let w = glorot(&[*units, fan_in], fan_in, *units, rng);
                    let out = reshape.clone().unwrap_or_else(|| vec![*units]);
                    (out, vec![w, Tensor::zeros(&[*units])])
                }
                LayerSpec::Elu { .. } | LayerSpec::Dropout { .. } => (shape.clone(), vec![]),
            };
            layers.push(Layer {
                spec: spec.clone(),
                in_shape: shape.clone(),
                out_shape: out_shape.clone(),
                params,
                pool_source,
            });
            shape = out_shape;
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            layers,
            version: 0,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layers
            .last()
            .map(|l| l.out_shape.as_slice())
            .unwrap_or(&self.input_shape)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn specs(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().map(|l| &l.spec)
    }

    /// Output shape of every layer, in order.
    pub fn shape_trace(&self) -> Vec<Vec<usize>> {
        self.layers.iter().map(|l| l.out_shape.clone()).collect()
    }

    pub fn output_shape_at(&self, layer: usize) -> &[usize] {
        &self.layers[layer].out_shape
    }

    pub fn param_count(&self) -> usize {
        self.params().map(|p| p.len()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    /// Parameters of layer `layer` (kernels/weights first, then bias).
    pub fn layer_params(&self, layer: usize) -> &[Tensor<T>] {
        &self.layers[layer].params
    }

    /// Mutable parameter access. Invalidates outstanding tapes.
    pub fn layer_params_mut(&mut self, layer: usize) -> &mut [Tensor<T>] {
        self.version += 1;
        &mut self.layers[layer].params
    }

    /// Replaces all parameters, in [`Network::params`] order.
    pub fn set_params(&mut self, params: Vec<Tensor<T>>) -> Result<()> {
        let expected = self.params().count();
        if params.len() != expected {
            return Err(Error::dim(format!("expected {expected} parameter tensors, got {}", params.len())));
        }
        let mut it = params.into_iter();
        for layer in &mut self.layers {
            for p in &mut layer.params {
                let new = it.next().expect("counted above");
                new.expect_shape(p.shape())?;
                *p = new;
            }
        }
        self.version += 1;
        Ok(())
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            per_layer: self
                .layers
                .iter()
                .map(|l| l.params.iter().map(|p| Tensor::zeros(p.shape())).collect())
                .collect(),
        }
    }

    /// Inference through layers `0..end` (dropout disabled).
    pub fn predict_prefix(&self, input: &Tensor<T>, end: usize) -> Result<Tensor<T>> {
        input.expect_shape(&self.input_shape)?;
        let mut switches: Vec<Option<Switches>> = vec![None; end];
        let mut x = input.clone();
        for idx in 0..end {
            let (y, sw, _) = self.layer_forward(idx, &x, &switches, &mut Mode::Infer)?;
            switches[idx] = sw;
            x = y;
        }
        Ok(x)
    }

    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.predict_prefix(input, self.layers.len())
    }

    /// Forward pass that records what [`Network::backward`] needs.
    pub fn forward(&self, input: &Tensor<T>, mode: &mut Mode<'_>) -> Result<(Tensor<T>, GradTape<T>)> {
        input.expect_shape(&self.input_shape)?;
        let n = self.layers.len();
        let mut tape = GradTape {
            version: self.version,
            inputs: Vec::with_capacity(n),
            switches: Vec::with_capacity(n),
            masks: Vec::with_capacity(n),
        };
        let mut x = input.clone();
        for idx in 0..n {
            let (y, sw, mask) = self.layer_forward(idx, &x, &tape.switches, mode)?;
            tape.inputs.push(x);
            tape.switches.push(sw);
            tape.masks.push(mask);
            x = y;
        }
        Ok((x, tape))
    }

    #[allow(clippy::type_complexity)]
    fn layer_forward(
        &self,
        idx: usize,
        x: &Tensor<T>,
        switches: &[Option<Switches>],
        mode: &mut Mode<'_>,
    ) -> Result<(Tensor<T>, Option<Switches>, Option<Vec<T>>)> {
        let layer = &self.layers[idx];
        Ok(match &layer.spec {
            LayerSpec::Conv { .. } => (ops::conv2d_valid(x, &layer.params[0], &layer.params[1])?, None, None),
            LayerSpec::Deconv { .. } => {
                let mut y = ops::deconv2d(x, &layer.params[0])?;
                add_channel_bias(&mut y, &layer.params[1]);
                (y, None, None)
            }
            LayerSpec::MaxPool { pool } => {
                let (y, sw) = ops::maxpool(x, *pool)?;
                (y, Some(sw), None)
            }
            LayerSpec::Unpool { .. } => {
                let src = layer.pool_source.expect("resolved at build");
                let sw = switches[src]
                    .as_ref()
                    .ok_or_else(|| Error::Usage("unpool switches missing".into()))?;
                (ops::unpool(x, sw, &layer.out_shape)?, None, None)
            }
            LayerSpec::Dense { .. } => {
                let w = layer.params[0].data();
                let b = layer.params[1].data();
                let xin = x.data();
                let n_in = xin.len();
                let y: Vec<T> = b
                    .iter()
                    .enumerate()
                    .map(|(o, &bo)| {
                        let row = &w[o * n_in..(o + 1) * n_in];
                        bo + row.iter().zip(xin).fold(T::zero(), |s, (&a, &v)| s + a * v)
                    })
                    .collect();
                (Tensor::new(layer.out_shape.clone(), y)?, None, None)
            }
            LayerSpec::Elu { alpha } => (ops::elu(x, T::of(*alpha)), None, None),
            LayerSpec::Dropout { rate } => match mode {
                Mode::Train(rng) => {
                    let (y, mask) = ops::dropout(x, *rate, rng, true)?;
                    (y, None, mask)
                }
                Mode::Infer => (x.clone(), None, None),
            },
        })
    }

    pub fn backward(&self, tape: &GradTape<T>, loss_grad: &Tensor<T>) -> Result<Grads<T>> {
        let mut grads = self.zero_grads();
        self.backward_into(tape, loss_grad, &mut grads)?;
        Ok(grads)
    }

    /// Reverse pass; parameter gradients are added into `grads`.
    pub fn backward_into(&self, tape: &GradTape<T>, loss_grad: &Tensor<T>, grads: &mut Grads<T>) -> Result<()> {
        if tape.version != self.version || tape.inputs.len() != self.layers.len() {
            return Err(Error::Usage(
                "stale gradient tape: backward must follow the matching forward".into(),
            ));
        }
        loss_grad.expect_shape(self.output_shape())?;
        let mut g = loss_grad.clone();
        for idx in (0..self.layers.len()).rev() {
            let layer = &self.layers[idx];
            let x = &tape.inputs[idx];
            let need_input_grad = idx > 0;
            let gl = &mut grads.per_layer[idx];
            g = match &layer.spec {
                LayerSpec::Conv { kernel, .. } => {
                    let mut dk = vec![0f64; layer.params[0].len()];
                    let mut db = vec![0f64; layer.params[1].len()];
                    ops::conv2d_kernel_grad(x, &g, *kernel, &mut dk, &mut db)?;
                    accumulate(&mut gl[0], &dk);
                    accumulate(&mut gl[1], &db);
                    if need_input_grad {
                        ops::deconv2d(&g, &layer.params[0])?
                    } else {
                        g
                    }
                }
                LayerSpec::Deconv { kernel, .. } => {
                    let mut dk = vec![0f64; layer.params[0].len()];
                    ops::deconv2d_kernel_grad(x, &g, *kernel, &mut dk)?;
                    accumulate(&mut gl[0], &dk);
                    let (_, _, c) = g.hwc()?;
                    let mut db = vec![0f64; c];
                    for (i, v) in g.data().iter().enumerate() {
                        db[i % c] += v.f64();
                    }
                    accumulate(&mut gl[1], &db);
                    if need_input_grad {
                        ops::conv2d_valid(&g, &layer.params[0], &Tensor::zeros(&[layer.in_shape[2]]))?
                    } else {
                        g
                    }
                }
                LayerSpec::MaxPool { .. } => {
                    let sw = tape.switches[idx].as_ref().expect("recorded in forward");
                    ops::unpool(&g, sw, &layer.in_shape)?
                }
                LayerSpec::Unpool { .. } => {
                    let src = layer.pool_source.expect("resolved at build");
                    let sw = tape.switches[src].as_ref().expect("recorded in forward");
                    ops::unpool_backward(&g, sw)?
                }
                LayerSpec::Dense { .. } => {
                    let w = layer.params[0].data();
                    let xin = x.data();
                    let n_in = xin.len();
                    let gd = g.data();
                    {
                        let dw = gl[0].data_mut();
                        for (o, &go) in gd.iter().enumerate() {
                            if go == T::zero() {
                                continue;
                            }
                            let row = &mut dw[o * n_in..(o + 1) * n_in];
                            for (r, &v) in row.iter_mut().zip(xin) {
                                *r += go * v;
                            }
                        }
                    }
                    for (d, &go) in gl[1].data_mut().iter_mut().zip(gd) {
                        *d += go;
                    }
                    if need_input_grad {
                        let mut dx = vec![T::zero(); n_in];
                        for (o, &go) in gd.iter().enumerate() {
                            if go == T::zero() {
                                continue;
                            }
                            let row = &w[o * n_in..(o + 1) * n_in];
                            for (d, &a) in dx.iter_mut().zip(row) {
                                *d += go * a;
                            }
                        }
                        Tensor::new(layer.in_shape.clone(), dx)?
                    } else {
                        g
                    }
                }
                LayerSpec::Elu { alpha } => {
                    let a = T::of(*alpha);
                    let mut out = g;
                    for (d, &v) in out.data_mut().iter_mut().zip(x.data()) {
                        *d *= ops::elu_derivative(v, a);
                    }
                    out
                }
                LayerSpec::Dropout { .. } => {
                    let mut out = g;
                    if let Some(mask) = &tape.masks[idx] {
                        for (d, &m) in out.data_mut().iter_mut().zip(mask) {
                            *d *= m;
                        }
                    }
                    out
                }
            };
        }
        Ok(())
    }
}

fn hwc(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::dim(format!("expected [H, W, C] input, got {shape:?}"))),
    }
}

fn add_channel_bias<T: Scalar>(y: &mut Tensor<T>, bias: &Tensor<T>) {
    let b = bias.data();
    let c = b.len();
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        *v += b[i % c];
    }
}

fn accumulate<T: Scalar>(dst: &mut Tensor<T>, src: &[f64]) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src) {
        *d += T::of(s);
    }
}

impl<T: Scalar> Grads<T> {
    pub fn add(&mut self, other: &Grads<T>) -> Result<()> {
        for (a, b) in self.per_layer.iter_mut().zip(&other.per_layer) {
            for (x, y) in a.iter_mut().zip(b) {
                x.add_assign(y)?;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        self.per_layer
            .iter_mut()
            .flatten()
            .for_each(|t| t.scale(factor));
    }

    pub fn is_finite(&self) -> bool {
        self.per_layer.iter().flatten().all(|t| t.is_finite())
    }

    pub fn flat(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.per_layer.iter().flatten()
    }
}
