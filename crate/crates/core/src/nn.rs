//! A minimal feed-forward network with exact reverse-mode gradients.
//!
//! Tensors are flat slices with a shape: `[features]` or `[channels, height, width]`.
//! Convolution uses the cross-correlation convention.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Valid,
    Same,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        in_features: usize,
        out_features: usize,
        #[serde(default)]
        quantize: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: Padding,
        #[serde(default)]
        quantize: bool,
    },
    Relu,
    Flatten,
}

impl LayerSpec {
    pub fn has_weights(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    pub fn quantize(&self) -> bool {
        match self {
            LayerSpec::Dense { quantize, .. } | LayerSpec::Conv2d { quantize, .. } => *quantize,
            _ => false,
        }
    }

    pub fn set_quantize(&mut self, flag: bool) {
        if let LayerSpec::Dense { quantize, .. } | LayerSpec::Conv2d { quantize, .. } = self {
            *quantize = flag;
        }
    }
}

/// Architecture: input shape plus layer list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Conv(1 -> 4, 9x9, stride 3) -> relu -> flatten -> dense(196 -> 10): 2298 parameters.
    pub fn mnist_small_cnn() -> Self {
        Self {
            input_shape: vec![1, 28, 28],
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 4,
                    kernel: 9,
                    stride: 3,
                    padding: Padding::Valid,
                    quantize: true,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_features: 196,
                    out_features: 10,
                    quantize: true,
                },
            ],
        }
    }

    /// dense(dim -> hidden) -> relu -> dense(hidden -> classes).
    pub fn mlp(dim: usize, hidden: usize, classes: usize) -> Self {
        Self {
            input_shape: vec![dim],
            layers: vec![
                LayerSpec::Dense {
                    in_features: dim,
                    out_features: hidden,
                    quantize: true,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    in_features: hidden,
                    out_features: classes,
                    quantize: true,
                },
            ],
        }
    }
}

/// Weight and bias of one parameterised layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weight: Vec<T>,
    pub weight_shape: Vec<usize>,
    pub bias: Vec<T>,
}

/// Parameters for every layer, `None` for parameter-free layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub layers: Vec<Option<LayerParams<T>>>,
}

impl<T: Real> Params<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.as_ref().map(|p| LayerParams {
                        weight: vec![T::zero(); p.weight.len()],
                        weight_shape: p.weight_shape.clone(),
                        bias: vec![T::zero(); p.bias.len()],
                    })
                })
                .collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.layers.iter().flatten().map(|p| p.weight.len() + p.bias.len()).sum()
    }

    /// Named tensors in layer order: `layers.{i}.weight`, `layers.{i}.bias`.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out = Vec::new();
        for (i, p) in self.layers.iter().enumerate() {
            if let Some(p) = p {
                out.push((format!("layers.{i}.weight"), p.weight_shape.clone(), p.weight.as_slice()));
                out.push((format!("layers.{i}.bias"), vec![p.bias.len()], p.bias.as_slice()));
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .flatten()
            .all(|p| p.weight.iter().chain(&p.bias).all(|x| x.is_finite()))
    }

    /// `self -= lr * grad`.
    pub fn sgd_step(&mut self, grad: &Params<T>, lr: T) {
        for (p, g) in self.layers.iter_mut().zip(&grad.layers) {
            if let (Some(p), Some(g)) = (p, g) {
                for (w, &gw) in p.weight.iter_mut().zip(&g.weight) {
                    *w -= lr * gw;
                }
                for (b, &gb) in p.bias.iter_mut().zip(&g.bias) {
                    *b -= lr * gb;
                }
            }
        }
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.as_ref().map(|p| LayerParams {
                        weight: p.weight.iter().map(|&x| U::lit(x.as_f64())).collect(),
                        weight_shape: p.weight_shape.clone(),
                        bias: p.bias.iter().map(|&x| U::lit(x.as_f64())).collect(),
                    })
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SquaredError,
    #[default]
    CrossEntropy,
}

/// Training targets: class labels, or dense target vectors (`count x outputs`).
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a, T> {
    Labels(&'a [usize]),
    Values(&'a [T]),
}

/// Compiled network: validated spec with per-layer shapes.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    /// `shapes[i]` is the input shape of layer `i`; the last entry is the output shape.
    shapes: Vec<Vec<usize>>,
}

struct ConvGeom {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    pad_top: usize,
    pad_left: usize,
}

fn conv_out(size: usize, k: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Valid => (size >= k).then(|| ((size - k) / stride + 1, 0)),
        Padding::Same => {
            let out = size.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(size);
            Some((out, total / 2))
        }
    }
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        let mut shapes = vec![spec.input_shape.clone()];
        if spec.input_shape.is_empty() || spec.input_shape.contains(&0) {
            return Err(Error::shape("input shape must be non-empty and positive"));
        }
        for (i, layer) in spec.layers.iter().enumerate() {
            let cur = shapes.last().unwrap().clone();
            let next = match *layer {
                LayerSpec::Dense {
                    in_features,
                    out_features,
                    ..
                } => {
                    if cur != [in_features] {
                        return Err(Error::shape(format!(
                            "layer {i}: dense expects input [{in_features}], got {cur:?}"
                        )));
                    }
                    if out_features == 0 {
                        return Err(Error::shape(format!("layer {i}: zero output features")));
                    }
                    vec![out_features]
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    if cur.len() != 3 || cur[0] != in_channels {
                        return Err(Error::shape(format!(
                            "layer {i}: conv2d expects [{in_channels}, H, W], got {cur:?}"
                        )));
                    }
                    if kernel == 0 || stride == 0 || out_channels == 0 {
                        return Err(Error::shape(format!("layer {i}: kernel, stride and channels must be positive")));
                    }
                    let (ho, _) = conv_out(cur[1], kernel, stride, padding)
                        .ok_or_else(|| Error::shape(format!("layer {i}: kernel larger than input")))?;
                    let (wo, _) = conv_out(cur[2], kernel, stride, padding)
                        .ok_or_else(|| Error::shape(format!("layer {i}: kernel larger than input")))?;
                    vec![out_channels, ho, wo]
                }
                LayerSpec::Relu => cur,
                LayerSpec::Flatten => vec![cur.iter().product()],
            };
            shapes.push(next);
        }
        Ok(Self { spec, shapes })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_len(&self) -> usize {
        self.shapes[0].iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.shapes.last().unwrap().iter().product()
    }

    /// Indices of layers whose weights are clustered.
    pub fn quantized_layers(&self) -> Vec<usize> {
        self.spec
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.quantize())
            .map(|(i, _)| i)
            .collect()
    }

    fn geom(&self, i: usize) -> ConvGeom {
        let LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } = self.spec.layers[i]
        else {
            unreachable!("geometry of a non-conv layer")
        };
        let inp = &self.shapes[i];
        let (ho, pad_top) = conv_out(inp[1], kernel, stride, padding).unwrap();
        let (wo, pad_left) = conv_out(inp[2], kernel, stride, padding).unwrap();
        ConvGeom {
            cin: in_channels,
            cout: out_channels,
            k: kernel,
            stride,
            h: inp[1],
            w: inp[2],
            ho,
            wo,
            pad_top,
            pad_left,
        }
    }

    /// He-uniform weights, zero biases.
    pub fn init_params<T: Real>(&self, seed: u64) -> Params<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = self
            .spec
            .layers
            .iter()
            .map(|layer| {
                let (shape, fan_in, nb) = match *layer {
                    LayerSpec::Dense {
                        in_features,
                        out_features,
                        ..
                    } => (vec![out_features, in_features], in_features, out_features),
                    LayerSpec::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        ..
                    } => (
                        vec![out_channels, in_channels, kernel, kernel],
                        in_channels * kernel * kernel,
                        out_channels,
                    ),
                    _ => return None,
                };
                let bound = (6.0 / fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                Some(LayerParams {
                    weight: (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect(),
                    weight_shape: shape,
                    bias: vec![T::zero(); nb],
                })
            })
            .collect();
        Params { layers }
    }

    /// Checks that `params` matches this architecture.
    pub fn check_params<T: Real>(&self, params: &Params<T>) -> Result<()> {
        let fresh = self.init_params::<T>(0);
        if fresh.layers.len() != params.layers.len() {
            return Err(Error::shape("parameter list length does not match the architecture"));
        }
        for (i, (a, b)) in fresh.layers.iter().zip(&params.layers).enumerate() {
            match (a, b) {
                (None, None) => {}
                (Some(a), Some(b)) if a.weight_shape == b.weight_shape && a.bias.len() == b.bias.len() && b.weight.len() == a.weight.len() => {}
                _ => return Err(Error::shape(format!("layer {i}: parameter shapes do not match the architecture"))),
            }
        }
        Ok(())
    }

    fn layer_forward<T: Real>(&self, i: usize, params: &Params<T>, x: &[T]) -> Vec<T> {
        match self.spec.layers[i] {
            LayerSpec::Dense {
                in_features,
                out_features,
                ..
            } => {
                let p = params.layers[i].as_ref().unwrap();
                (0..out_features)
                    .map(|o| {
                        let row = &p.weight[o * in_features..(o + 1) * in_features];
                        p.bias[o] + row.iter().zip(x).map(|(&w, &v)| w * v).sum::<T>()
                    })
                    .collect()
            }
            LayerSpec::Conv2d { .. } => {
                let g = self.geom(i);
                let p = params.layers[i].as_ref().unwrap();
                let mut out = vec![T::zero(); g.cout * g.ho * g.wo];
                for o in 0..g.cout {
                    for py in 0..g.ho {
                        for px in 0..g.wo {
                            let mut acc = p.bias[o];
                            for c in 0..g.cin {
                                for u in 0..g.k {
                                    let y = (py * g.stride + u) as isize - g.pad_top as isize;
                                    if y < 0 || y as usize >= g.h {
                                        continue;
                                    }
                                    let xrow = &x[(c * g.h + y as usize) * g.w..];
                                    let wrow = &p.weight[((o * g.cin + c) * g.k + u) * g.k..];
                                    for v in 0..g.k {
                                        let xx = (px * g.stride + v) as isize - g.pad_left as isize;
                                        if xx < 0 || xx as usize >= g.w {
                                            continue;
                                        }
                                        acc += wrow[v] * xrow[xx as usize];
                                    }
                                }
                            }
                            out[(o * g.ho + py) * g.wo + px] = acc;
                        }
                    }
                }
                out
            }
            LayerSpec::Relu => x.iter().map(|&v| v.max(T::zero())).collect(),
            LayerSpec::Flatten => x.to_vec(),
        }
    }

    /// Returns the gradient with respect to the layer input, accumulating parameter gradients.
    fn layer_backward<T: Real>(
        &self,
        i: usize,
        params: &Params<T>,
        x: &[T],
        gy: &[T],
        grads: &mut Params<T>,
        need_input_grad: bool,
    ) -> Vec<T> {
        match self.spec.layers[i] {
            LayerSpec::Dense {
                in_features,
                out_features,
                ..
            } => {
                let p = params.layers[i].as_ref().unwrap();
                let g = grads.layers[i].as_mut().unwrap();
                let mut gx = vec![T::zero(); if need_input_grad { in_features } else { 0 }];
                for o in 0..out_features {
                    let go = gy[o];
                    g.bias[o] += go;
                    if go == T::zero() {
                        continue;
                    }
                    let grow = &mut g.weight[o * in_features..(o + 1) * in_features];
                    for (gw, &v) in grow.iter_mut().zip(x) {
                        *gw += go * v;
                    }
                    if need_input_grad {
                        let row = &p.weight[o * in_features..(o + 1) * in_features];
                        for (gv, &w) in gx.iter_mut().zip(row) {
                            *gv += go * w;
                        }
                    }
                }
                gx
            }
            LayerSpec::Conv2d { .. } => {
                let geo = self.geom(i);
                let p = params.layers[i].as_ref().unwrap();
                let g = grads.layers[i].as_mut().unwrap();
                let mut gx = vec![T::zero(); if need_input_grad { x.len() } else { 0 }];
                for o in 0..geo.cout {
                    for py in 0..geo.ho {
                        for px in 0..geo.wo {
                            let go = gy[(o * geo.ho + py) * geo.wo + px];
                            g.bias[o] += go;
                            if go == T::zero() {
                                continue;
                            }
                            for c in 0..geo.cin {
                                for u in 0..geo.k {
                                    let y = (py * geo.stride + u) as isize - geo.pad_top as isize;
                                    if y < 0 || y as usize >= geo.h {
                                        continue;
                                    }
                                    let base_x = (c * geo.h + y as usize) * geo.w;
                                    let base_w = ((o * geo.cin + c) * geo.k + u) * geo.k;
                                    for v in 0..geo.k {
                                        let xx = (px * geo.stride + v) as isize - geo.pad_left as isize;
                                        if xx < 0 || xx as usize >= geo.w {
                                            continue;
                                        }
                                        g.weight[base_w + v] += go * x[base_x + xx as usize];
                                        if need_input_grad {
                                            gx[base_x + xx as usize] += go * p.weight[base_w + v];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                gx
            }
            LayerSpec::Relu => x
                .iter()
                .zip(gy)
                .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                .collect(),
            LayerSpec::Flatten => gy.to_vec(),
        }
    }

    /// Output vector for one input sample.
    pub fn forward<T: Real>(&self, params: &Params<T>, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.input_len() {
            return Err(Error::shape(format!(
                "input has {} values, network expects {}",
                x.len(),
                self.input_len()
            )));
        }
        self.check_params(params)?;
        let mut act = x.to_vec();
        for i in 0..self.spec.layers.len() {
            act = self.layer_forward(i, params, &act);
        }
        Ok(act)
    }

    /// Arg-max predictions for `count` samples stored back to back.
    pub fn predict<T: Real>(&self, params: &Params<T>, inputs: &[T]) -> Result<Vec<usize>> {
        let n = self.input_len();
        if !inputs.len().is_multiple_of(n) {
            return Err(Error::shape("input buffer is not a whole number of samples"));
        }
        self.check_params(params)?;
        Ok(inputs
            .chunks_exact(n)
            .map(|x| {
                let mut act = x.to_vec();
                for i in 0..self.spec.layers.len() {
                    act = self.layer_forward(i, params, &act);
                }
                argmax(&act)
            })
            .collect())
    }

    /// Mean loss over the batch and its exact gradient with respect to every parameter.
    pub fn loss_and_grad<T: Real>(
        &self,
        params: &Params<T>,
        inputs: &[T],
        targets: Targets<'_, T>,
        loss: LossKind,
    ) -> Result<(T, Params<T>)> {
        let n_in = self.input_len();
        let n_out = self.output_len();
        if inputs.is_empty() || !inputs.len().is_multiple_of(n_in) {
            return Err(Error::shape("batch must hold at least one whole sample"));
        }
        let count = inputs.len() / n_in;
        match targets {
            Targets::Labels(l) if l.len() != count => return Err(Error::shape("label count differs from sample count")),
            Targets::Labels(l) if l.iter().any(|&y| y >= n_out) => {
                return Err(Error::shape("label out of range for network output"))
            }
            Targets::Values(v) if v.len() != count * n_out => {
                return Err(Error::shape("target values do not match output size"))
            }
            _ => {}
        }
        self.check_params(params)?;
        let mut grads = params.zeros_like();
        let mut total = T::zero();
        let layers = self.spec.layers.len();
        let first_weighted = self.spec.layers.iter().position(|l| l.has_weights()).unwrap_or(layers);
        for s in 0..count {
            let mut acts = Vec::with_capacity(layers + 1);
            acts.push(inputs[s * n_in..(s + 1) * n_in].to_vec());
            for i in 0..layers {
                let next = self.layer_forward(i, params, &acts[i]);
                acts.push(next);
            }
            let out = &acts[layers];
            let (l, mut g) = match (loss, targets) {
                (LossKind::CrossEntropy, Targets::Labels(labels)) => {
                    let y = labels[s];
                    let max = out.iter().copied().fold(T::neg_infinity(), T::max);
                    let exps: Vec<T> = out.iter().map(|&v| (v - max).exp()).collect();
                    let z: T = exps.iter().copied().sum();
                    let l = z.ln() - (out[y] - max);
                    let mut g: Vec<T> = exps.iter().map(|&e| e / z).collect();
                    g[y] -= T::one();
                    (l, g)
                }
                (LossKind::CrossEntropy, Targets::Values(_)) => {
                    return Err(Error::param("cross-entropy needs class labels"));
                }
                (LossKind::SquaredError, t) => {
                    let target: Vec<T> = match t {
                        Targets::Labels(labels) => {
                            let mut v = vec![T::zero(); n_out];
                            v[labels[s]] = T::one();
                            v
                        }
                        Targets::Values(v) => v[s * n_out..(s + 1) * n_out].to_vec(),
                    };
                    let two = T::lit(2.0);
                    let l = out.iter().zip(&target).map(|(&o, &t)| (o - t) * (o - t)).sum();
                    let g = out.iter().zip(&target).map(|(&o, &t)| two * (o - t)).collect();
                    (l, g)
                }
            };
            total += l;
            for i in (0..layers).rev() {
                if i < first_weighted {
                    break;
                }
                g = self.layer_backward(i, params, &acts[i], &g, &mut grads, i > first_weighted);
            }
        }
        let inv = T::one() / T::from_usize_lossy(count);
        for p in grads.layers.iter_mut().flatten() {
            p.weight.iter_mut().chain(p.bias.iter_mut()).for_each(|v| *v *= inv);
        }
        let mean = total * inv;
        if !mean.is_finite() || !grads.is_finite() {
            return Err(Error::numerics("non-finite loss or gradient"));
        }
        Ok((mean, grads))
    }
}

pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
