use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init::he_uniform_init;
use super::loss::{logloss, logloss_grad};
use super::ops::{
    conv_backward_raw, conv_forward_pointwise, conv_forward_raw, dense_backward_raw, dense_forward_raw,
    maxpool_backward_raw, maxpool_forward_raw, relu_scalar, sigmoid_scalar, Dims,
};
use super::{Real, Tensor};
use crate::{Error, Result};

/// One layer of a sequential network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// 3×3 convolution, stride 1, zero "same" padding.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
    },
    /// 2×2 window, stride 2, ceil mode.
    Maxpool2d,
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Relu,
    Sigmoid,
    Flatten,
}

impl LayerSpec {
    pub(crate) fn output_dims(&self, d: Dims) -> Result<Dims> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
            } => {
                if in_channels != d.c || d.h == 0 || d.w == 0 {
                    return Err(Error::shape(
                        alloc::format!("{in_channels} input channels"),
                        (d.c, d.h, d.w),
                    ));
                }
                Ok(Dims { c: out_channels, ..d })
            }
            LayerSpec::Maxpool2d => Ok(d.pooled()),
            LayerSpec::Dense { inputs, outputs } => {
                if d.h != 1 || d.w != 1 || d.c != inputs {
                    return Err(Error::shape(
                        alloc::format!("flat input of {inputs} features"),
                        (d.c, d.h, d.w),
                    ));
                }
                Ok(Dims { c: outputs, ..d })
            }
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(d),
            LayerSpec::Flatten => Ok(Dims {
                c: d.c * d.h * d.w,
                h: 1,
                w: 1,
                ..d
            }),
        }
    }

    /// Weight and bias tensor shapes of a parametric layer.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
            } => Some((vec![out_channels, in_channels, 3, 3], vec![out_channels])),
            LayerSpec::Dense { inputs, outputs } => Some((vec![outputs, inputs], vec![outputs])),
            _ => None,
        }
    }
}

/// Weight and bias of a parametric layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Per-parameter-tensor gradients, ordered like [`Network::param_slices`].
pub type Gradients<T> = Vec<Vec<T>>;

#[derive(Debug, Clone)]
enum Saved<T> {
    /// im2col matrix of the conv input.
    Col(Vec<T>),
    Argmax(Vec<usize>),
    Input(Vec<T>),
    Output(Vec<T>),
    None,
}

/// Activations retained by a training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// Input extents of every layer, plus the final output extents.
    dims: Vec<Dims>,
    saved: Vec<Saved<T>>,
    /// Outputs of every layer, kept only when requested.
    outputs: Option<Vec<Vec<T>>>,
    output: Vec<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn output(&self) -> &[T] {
        &self.output
    }

    /// Output of layer `index` and its extents, if outputs were kept.
    pub fn layer_output(&self, index: usize) -> Option<(&[T], Dims)> {
        self.outputs
            .as_ref()
            .map(|o| (o[index].as_slice(), self.dims[index + 1]))
    }

    pub(crate) fn conv_col(&self, index: usize) -> Option<&[T]> {
        match &self.saved[index] {
            Saved::Col(c) => Some(c),
            _ => None,
        }
    }

    pub(crate) fn dense_input(&self, index: usize) -> Option<&[T]> {
        match &self.saved[index] {
            Saved::Input(x) => Some(x),
            _ => None,
        }
    }
}

/// Sequential network over `[C, B, H, W]` batches.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    input: (usize, usize, usize),
    specs: Vec<LayerSpec>,
    params: Vec<Option<LayerParams<T>>>,
}

/// Lays `samples` (each `[C, H, W]`) out as a `[C, B, H, W]` batch.
pub fn stack_batch<T: Copy>(samples: &[&[T]], channels: usize) -> Vec<T> {
    let b = samples.len();
    if b == 0 {
        return Vec::new();
    }
    let plane = samples[0].len() / channels;
    let mut out = Vec::with_capacity(samples[0].len() * b);
    for c in 0..channels {
        for s in samples {
            out.extend_from_slice(&s[c * plane..(c + 1) * plane]);
        }
    }
    out
}

impl<T: Real> Network<T> {
    /// Builds the network, He-initializing weights and zeroing biases.
    pub fn new<R: Rng + ?Sized>(input: (usize, usize, usize), specs: Vec<LayerSpec>, rng: &mut R) -> Result<Self> {
        Self::validate(input, &specs)?;
        let params = specs
            .iter()
            .map(|s| {
                s.param_shapes().map(|(w, b)| LayerParams {
                    weight: he_uniform_init(&w, rng),
                    bias: Tensor::zeros(&b),
                })
            })
            .collect();
        Ok(Network { input, specs, params })
    }

    /// Builds the network from explicit parameters, in layer order.
    pub fn from_params(
        input: (usize, usize, usize),
        specs: Vec<LayerSpec>,
        params: Vec<LayerParams<T>>,
    ) -> Result<Self> {
        Self::validate(input, &specs)?;
        let mut it = params.into_iter();
        let mut slots = Vec::with_capacity(specs.len());
        for s in &specs {
            match s.param_shapes() {
                Some((w, b)) => {
                    let p = it
                        .next()
                        .ok_or_else(|| Error::shape("more parameter tensors", "fewer"))?;
                    if p.weight.shape() != w.as_slice() || p.bias.shape() != b.as_slice() {
                        return Err(Error::shape((w, b), (p.weight.shape(), p.bias.shape())));
                    }
                    slots.push(Some(p));
                }
                None => slots.push(None),
            }
        }
        if it.next().is_some() {
            return Err(Error::shape("fewer parameter tensors", "more"));
        }
        Ok(Network {
            input,
            specs,
            params: slots,
        })
    }

    fn validate(input: (usize, usize, usize), specs: &[LayerSpec]) -> Result<Vec<Dims>> {
        let mut d = Dims {
            c: input.0,
            b: 1,
            h: input.1,
            w: input.2,
        };
        let mut all = vec![d];
        for s in specs {
            d = s.output_dims(d)?;
            all.push(d);
        }
        Ok(all)
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    /// Extents after each layer for a single sample.
    pub fn layer_dims(&self) -> Vec<Dims> {
        Self::validate(self.input, &self.specs).unwrap_or_default()
    }

    pub fn layer_params(&self) -> impl Iterator<Item = &LayerParams<T>> {
        self.params.iter().flatten()
    }

    pub fn param_slices(&self) -> Vec<&[T]> {
        self.params
            .iter()
            .flatten()
            .flat_map(|p| [p.weight.data(), p.bias.data()])
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        self.params
            .iter_mut()
            .flatten()
            .flat_map(|p| [p.weight.data_mut(), p.bias.data_mut()])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            input: self.input,
            specs: self.specs.clone(),
            params: self
                .params
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| LayerParams {
                        weight: p.weight.cast(),
                        bias: p.bias.cast(),
                    })
                })
                .collect(),
        }
    }

    fn batch_dims(&self, data_len: usize) -> Result<Dims> {
        let (c, h, w) = self.input;
        let per = c * h * w;
        if per == 0 || !data_len.is_multiple_of(per) || data_len == 0 {
            return Err(Error::shape(alloc::format!("multiple of {per}"), data_len));
        }
        Ok(Dims {
            c,
            b: data_len / per,
            h,
            w,
        })
    }

    fn layer_forward(&self, index: usize, x: Vec<T>, d: Dims, save: bool) -> (Vec<T>, Saved<T>) {
        match self.specs[index] {
            LayerSpec::Conv2d { .. } => {
                let p = self.params[index].as_ref().expect("conv params");
                if !save && d.h == 1 && d.w == 1 {
                    return (
                        conv_forward_pointwise(&x, d, p.weight.data(), p.bias.data()),
                        Saved::None,
                    );
                }
                let mut col = Vec::new();
                let y = conv_forward_raw(&x, d, p.weight.data(), p.bias.data(), &mut col);
                (y, if save { Saved::Col(col) } else { Saved::None })
            }
            LayerSpec::Maxpool2d => {
                let (y, arg) = maxpool_forward_raw(&x, d);
                (y, if save { Saved::Argmax(arg) } else { Saved::None })
            }
            LayerSpec::Dense { .. } => {
                let p = self.params[index].as_ref().expect("dense params");
                let y = dense_forward_raw(&x, d.b, p.weight.data(), p.bias.data());
                (y, if save { Saved::Input(x) } else { Saved::None })
            }
            LayerSpec::Relu => {
                let y: Vec<T> = x.iter().map(|&v| relu_scalar(v)).collect();
                (y, if save { Saved::Input(x) } else { Saved::None })
            }
            LayerSpec::Sigmoid => {
                let y: Vec<T> = x.iter().map(|&v| sigmoid_scalar(v)).collect();
                let saved = if save { Saved::Output(y.clone()) } else { Saved::None };
                (y, saved)
            }
            LayerSpec::Flatten => {
                // [C, B, H*W] -> [(C, H*W), B]
                let plane = d.plane();
                if plane == 1 {
                    return (x, Saved::None);
                }
                let mut y = vec![T::ZERO; x.len()];
                for c in 0..d.c {
                    for b in 0..d.b {
                        for p in 0..plane {
                            y[(c * plane + p) * d.b + b] = x[(c * d.b + b) * plane + p];
                        }
                    }
                }
                (y, Saved::None)
            }
        }
    }

    /// Runs layers `from..` on an activation entering layer `from`.
    pub fn forward_from(&self, from: usize, x: Vec<T>, d: Dims) -> Result<Vec<T>> {
        self.forward_range(from, self.specs.len(), x, d)
    }

    /// Runs layers `from..to` on an activation entering layer `from`.
    pub fn forward_range(&self, from: usize, to: usize, x: Vec<T>, d: Dims) -> Result<Vec<T>> {
        if from > to || to > self.specs.len() {
            return Err(Error::invalid("bad forward range"));
        }
        let mut d = d;
        let mut x = x;
        for i in from..to {
            let next = self.specs[i].output_dims(d)?;
            x = self.layer_forward(i, x, d, false).0;
            d = next;
        }
        Ok(x)
    }

    /// Inference on a `[C, B, H, W]` batch; returns the final layer output,
    /// feature-major.
    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        let d = self.batch_dims(x.len())?;
        self.forward_from(0, x.to_vec(), d)
    }

    /// Training forward pass; `keep_outputs` also retains every layer output.
    pub fn forward_cached(&self, x: &[T], keep_outputs: bool) -> Result<ForwardCache<T>> {
        let mut d = self.batch_dims(x.len())?;
        let mut dims = vec![d];
        let mut saved = Vec::with_capacity(self.specs.len());
        let mut outputs = keep_outputs.then(Vec::new);
        let mut act = x.to_vec();
        for i in 0..self.specs.len() {
            let next = self.specs[i].output_dims(d)?;
            let (y, s) = self.layer_forward(i, act, d, true);
            saved.push(s);
            if let Some(o) = outputs.as_mut() {
                o.push(y.clone());
            }
            act = y;
            d = next;
            dims.push(d);
        }
        Ok(ForwardCache {
            dims,
            saved,
            outputs,
            output: act,
        })
    }

    /// Backpropagates `grad` (gradient at the output of layer `top - 1`)
    /// down to the input of layer `bottom`. Parameter gradients of the
    /// traversed layers are added into `grads` when given.
    pub fn backward_range(
        &self,
        cache: &ForwardCache<T>,
        grad: Vec<T>,
        top: usize,
        bottom: usize,
        mut grads: Option<&mut Gradients<T>>,
    ) -> Result<Vec<T>> {
        if top > self.specs.len() || bottom > top {
            return Err(Error::invalid("bad backward range"));
        }
        if grad.len() != cache.dims[top].len() {
            return Err(Error::shape(cache.dims[top].len(), grad.len()));
        }
        // index of the first gradient buffer of every parametric layer
        let mut slot = vec![0usize; self.specs.len()];
        let mut next = 0;
        for (i, p) in self.params.iter().enumerate() {
            slot[i] = next;
            if p.is_some() {
                next += 2;
            }
        }
        let mut g = grad;
        for i in (bottom..top).rev() {
            let d = cache.dims[i];
            // the gradient at the network input itself is never needed
            let need_input = i > 0;
            g = match (&self.specs[i], &cache.saved[i]) {
                (LayerSpec::Conv2d { out_channels, .. }, Saved::Col(col)) => {
                    let p = self.params[i].as_ref().expect("conv params");
                    let (gx, gk, gb) = conv_backward_raw(col, d, p.weight.data(), *out_channels, &g, need_input);
                    if let Some(acc) = grads.as_deref_mut() {
                        add_into(&mut acc[slot[i]], &gk);
                        add_into(&mut acc[slot[i] + 1], &gb);
                    }
                    gx.unwrap_or_default()
                }
                (LayerSpec::Maxpool2d, Saved::Argmax(arg)) => maxpool_backward_raw(d.len(), arg, &g),
                (LayerSpec::Dense { .. }, Saved::Input(x)) => {
                    let p = self.params[i].as_ref().expect("dense params");
                    let (gx, gw, gb) = dense_backward_raw(x, d.b, p.weight.data(), &g, need_input);
                    if let Some(acc) = grads.as_deref_mut() {
                        add_into(&mut acc[slot[i]], &gw);
                        add_into(&mut acc[slot[i] + 1], &gb);
                    }
                    gx.unwrap_or_default()
                }
                (LayerSpec::Relu, Saved::Input(x)) => x
                    .iter()
                    .zip(&g)
                    .map(|(&v, &gv)| if v > T::ZERO { gv } else { T::ZERO })
                    .collect(),
                (LayerSpec::Sigmoid, Saved::Output(y)) => {
                    y.iter().zip(&g).map(|(&s, &gv)| gv * s * (T::ONE - s)).collect()
                }
                (LayerSpec::Flatten, _) => {
                    let plane = d.plane();
                    if plane == 1 {
                        g
                    } else {
                        let mut gx = vec![T::ZERO; g.len()];
                        for c in 0..d.c {
                            for b in 0..d.b {
                                for p in 0..plane {
                                    gx[(c * d.b + b) * plane + p] = g[(c * plane + p) * d.b + b];
                                }
                            }
                        }
                        gx
                    }
                }
                _ => return Err(Error::invalid("forward cache does not match network")),
            };
        }
        Ok(g)
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        self.param_slices().iter().map(|s| vec![T::ZERO; s.len()]).collect()
    }

    /// Mean log-loss over a batch and its parameter gradients.
    ///
    /// The network must end in a single output unit. When that unit is a
    /// sigmoid, the gradient enters at the logit as `p - y`, which is the
    /// exact derivative of the loss and stays well-conditioned when `p`
    /// saturates.
    pub fn loss_and_grad(&self, x: &[T], labels: &[u8]) -> Result<(f64, Vec<f64>, Gradients<T>)> {
        let cache = self.forward_cached(x, false)?;
        let out = cache.output();
        if out.len() != labels.len() {
            return Err(Error::shape(labels.len(), out.len()));
        }
        let b = labels.len();
        let probs: Vec<f64> = out.iter().map(|v| v.to_f64()).collect();
        let loss = probs.iter().zip(labels).map(|(&p, &y)| logloss(p, y)).sum::<f64>() / b as f64;
        let inv_b = 1.0 / b as f64;
        let fused = matches!(self.specs.last(), Some(LayerSpec::Sigmoid));
        let grad: Vec<T> = probs
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let g = if fused { p - y as f64 } else { logloss_grad(p, y) };
                T::from_f64(g * inv_b)
            })
            .collect();
        let top = if fused { self.specs.len() - 1 } else { self.specs.len() };
        let mut grads = self.zero_gradients();
        self.backward_range(&cache, grad, top, 0, Some(&mut grads))?;
        Ok((loss, probs, grads))
    }

    /// Mean log-loss of a batch, computed from a plain forward pass.
    pub fn loss(&self, x: &[T], labels: &[u8]) -> Result<f64> {
        let out = self.forward(x)?;
        if out.len() != labels.len() {
            return Err(Error::shape(labels.len(), out.len()));
        }
        Ok(out
            .iter()
            .zip(labels)
            .map(|(v, &y)| logloss(v.to_f64(), y))
            .sum::<f64>()
            / labels.len() as f64)
    }
}

fn add_into<T: Real>(acc: &mut [T], g: &[T]) {
    for (a, &v) in acc.iter_mut().zip(g) {
        *a += v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn small_net(seed: u64) -> Network<f64> {
        let specs = vec![
            LayerSpec::Conv2d {
                in_channels: 2,
                out_channels: 3,
            },
            LayerSpec::Relu,
            LayerSpec::Maxpool2d,
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 27, outputs: 1 },
            LayerSpec::Sigmoid,
        ];
        Network::new((2, 5, 5), specs, &mut stream(seed, 0)).unwrap()
    }

    #[test]
    fn shape_validation() {
        let bad = vec![
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 3,
            },
            LayerSpec::Flatten,
        ];
        assert!(Network::<f64>::new((2, 5, 5), bad, &mut stream(0, 0)).is_err());
        let bad = vec![LayerSpec::Dense { inputs: 50, outputs: 1 }];
        assert!(Network::<f64>::new((2, 5, 5), bad, &mut stream(0, 0)).is_err());
        let net = small_net(0);
        assert_eq!(net.param_count(), 2 * 3 * 9 + 3 + 27 + 1);
        assert!(net.forward(&[0.0; 49]).is_err());
    }

    #[test]
    fn batched_forward_equals_single_forward() {
        let net = small_net(1);
        let mut rng = stream(2, 0);
        let samples: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..50).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let refs: Vec<&[f64]> = samples.iter().map(|s| s.as_slice()).collect();
        let batch = net.forward(&stack_batch(&refs, 2)).unwrap();
        for (b, s) in samples.iter().enumerate() {
            let single = net.forward(s).unwrap();
            assert!((single[0] - batch[b]).abs() < 1e-14);
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_sample_gradients() {
        let net = small_net(3);
        let mut rng = stream(4, 0);
        let samples: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..50).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let labels = [0u8, 1, 1];
        let refs: Vec<&[f64]> = samples.iter().map(|s| s.as_slice()).collect();
        let (_, _, gb) = net.loss_and_grad(&stack_batch(&refs, 2), &labels).unwrap();
        let mut mean = net.zero_gradients();
        for (s, &y) in samples.iter().zip(&labels) {
            let (_, _, g) = net.loss_and_grad(s, &[y]).unwrap();
            for (m, g) in mean.iter_mut().zip(&g) {
                for (a, v) in m.iter_mut().zip(g) {
                    *a += v / 3.0;
                }
            }
        }
        for (a, b) in gb.iter().flatten().zip(mean.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn output_is_a_probability_for_extreme_inputs() {
        let net = small_net(5).cast::<f32>();
        for scale in [0.0f32, 1.0, 1e3, -1e3] {
            let x: Vec<f32> = (0..50).map(|i| scale * ((i % 7) as f32 - 3.0)).collect();
            let p = net.forward(&x).unwrap()[0];
            assert!(p.is_finite() && (0.0..=1.0).contains(&p));
        }
    }
}
