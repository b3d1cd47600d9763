//! Finite-difference verification of analytic gradients.
//!
//! The loss is the mean log-loss of a batch; every parameter is perturbed by
//! ±1e-5 and the central difference is compared to the backward pass.

use alloc::vec;
use alloc::vec::Vec;

use super::loss::logloss;
use super::network::{ForwardCache, Gradients, LayerSpec, Network};
use super::ops::Dims;
use crate::Result;

pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// `loss(z1) - loss(z2)` for the log-loss of `sigmoid(z)`, accurate to the
/// rounding of `z1 - z2` rather than of the losses.
fn logit_loss_diff(z1: f64, z2: f64, label: u8) -> f64 {
    logit_loss_step(z2, z1 - z2, label)
}

/// `loss(z + dz) - loss(z)` for the log-loss of `sigmoid(z)`.
fn logit_loss_step(z: f64, dz: f64, label: u8) -> f64 {
    // loss = softplus(-s z) with s = ±1 for label 1 / 0
    let s = if label == 1 { -1.0 } else { 1.0 };
    let b = s * z;
    let sig_b = 1.0 / (1.0 + libm::exp(-b));
    libm::log1p(sig_b * libm::expm1(s * dz))
}

/// Max relative error of `analytic` against central differences, obtained
/// by perturbing each parameter and re-running the full forward pass.
pub fn grad_check_with(net: &Network<f64>, x: &[f64], labels: &[u8], analytic: &Gradients<f64>) -> Result<f64> {
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    let sizes: Vec<usize> = net.param_slices().iter().map(|s| s.len()).collect();
    for (t, &len) in sizes.iter().enumerate() {
        for i in 0..len {
            let orig = probe.param_slices_mut()[t][i];
            probe.param_slices_mut()[t][i] = orig + FD_STEP;
            let plus = probe.loss(x, labels)?;
            probe.param_slices_mut()[t][i] = orig - FD_STEP;
            let minus = probe.loss(x, labels)?;
            probe.param_slices_mut()[t][i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[t][i], numeric));
        }
    }
    Ok(worst)
}

/// Max relative error of the network's own backward pass.
pub fn grad_check(net: &Network<f64>, x: &[f64], labels: &[u8]) -> Result<f64> {
    let (_, _, analytic) = net.loss_and_grad(x, labels)?;
    grad_check_with(net, x, labels, &analytic)
}

/// Where the largest relative error of a gradient check occurred.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WorstParam {
    pub rel: f64,
    /// Parameter tensor (weight and bias of each layer, in layer order).
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Same check as [`grad_check`] for a single sample, organized for large
/// networks.
///
/// Conv and dense outputs are affine in their own parameters, so the output
/// of layer `L` with one parameter moved by `±h` is the cached output plus
/// `±h` times that parameter's input column. Many such perturbed activations
/// are stacked into one batch and only the layers above `L` are re-run.
pub fn grad_check_batched(net: &Network<f64>, x: &[f64], label: u8, chunk: usize) -> Result<f64> {
    Ok(grad_check_batched_worst(net, x, label, chunk)?.rel)
}

/// [`grad_check_batched`] reporting the offending parameter.
pub fn grad_check_batched_worst(net: &Network<f64>, x: &[f64], label: u8, chunk: usize) -> Result<WorstParam> {
    let (_, _, analytic) = net.loss_and_grad(x, &[label])?;
    let cache = net.forward_cached(x, true)?;
    let chunk = chunk.max(1);
    // with a sigmoid head, differences are taken on the logit, where they
    // do not drown in the rounding of a loss of order one
    let fused = matches!(net.specs().last(), Some(LayerSpec::Sigmoid));
    let top = net.specs().len() - usize::from(fused);
    let mut linear = net.clone();
    for bias in linear.param_slices_mut().into_iter().skip(1).step_by(2) {
        bias.fill(0.0);
    }
    let mut worst = WorstParam::default();
    let mut tensor = 0;
    for (layer, spec) in net.specs().iter().enumerate() {
        let (base, d) = match cache.layer_output(layer) {
            Some(o) => o,
            None => unreachable!("outputs were kept"),
        };
        // (output channel touched, per-position delta) for each parameter
        let deltas: Vec<(usize, Vec<f64>)> = match *spec {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
            } => {
                let col = cache.conv_col(layer).expect("conv col");
                let k = in_channels * 9;
                let p = d.plane();
                let mut v = Vec::with_capacity(out_channels * (k + 1));
                for co in 0..out_channels {
                    for r in 0..k {
                        v.push((co, col[r * p..(r + 1) * p].to_vec()));
                    }
                }
                for co in 0..out_channels {
                    v.push((co, vec![1.0; p]));
                }
                v
            }
            LayerSpec::Dense { inputs, outputs } => {
                let input = cache.dense_input(layer).expect("dense input");
                let mut v = Vec::with_capacity(outputs * (inputs + 1));
                for m in 0..outputs {
                    for &xj in input.iter().take(inputs) {
                        v.push((m, vec![xj]));
                    }
                }
                for m in 0..outputs {
                    v.push((m, vec![1.0]));
                }
                v
            }
            _ => continue,
        };
        let n_weights = deltas.len() - d.c;
        let mut numeric = Vec::with_capacity(deltas.len());
        for group in deltas.chunks(chunk) {
            let b = group.len();
            let plane = d.plane();
            let mut diff = vec![0.0; d.c * b * plane];
            for (g, (co, delta)) in group.iter().enumerate() {
                let row = &mut diff[(co * b + g) * plane..][..plane];
                for (r, dv) in row.iter_mut().zip(delta) {
                    *r = 2.0 * FD_STEP * dv;
                }
            }
            let steps = match carry_difference(net, &linear, &cache, layer + 1, top, diff, Dims { b, ..d })? {
                Some(dz) => {
                    let (mid, _) = cache.layer_output(top - 1).expect("outputs were kept");
                    let z = mid[0];
                    dz.iter()
                        .map(|&dz| {
                            if fused {
                                logit_loss_step(z - 0.5 * dz, dz, label)
                            } else {
                                logloss(z + 0.5 * dz, label) - logloss(z - 0.5 * dz, label)
                            }
                        })
                        .collect()
                }
                None => plain_differences(net, base, d, group, layer + 1, top, fused, label)?,
            };
            numeric.extend(steps.iter().map(|v| v / (2.0 * FD_STEP)));
        }
        let (wa, ba) = (&analytic[tensor], &analytic[tensor + 1]);
        for (k, (a, n)) in wa.iter().chain(ba).zip(&numeric).enumerate() {
            let rel = relative_error(*a, *n);
            if rel > worst.rel {
                let (t, index) = if k < wa.len() {
                    (tensor, k)
                } else {
                    (tensor + 1, k - wa.len())
                };
                worst = WorstParam {
                    rel,
                    tensor: t,
                    index,
                    analytic: *a,
                    numeric: *n,
                };
            }
        }
        debug_assert_eq!(wa.len(), n_weights);
        tensor += 2;
    }
    Ok(worst)
}

/// Carries the difference `a+ - a-` of perturbed activations entering layer
/// `from` up to the output of layer `to - 1`. `None` when some side crosses
/// a ReLU or pooling kink.
fn carry_difference(
    net: &Network<f64>,
    linear: &Network<f64>,
    cache: &ForwardCache<f64>,
    from: usize,
    to: usize,
    diff: Vec<f64>,
    d: Dims,
) -> Result<Option<Vec<f64>>> {
    let (mut diff, mut d) = (diff, d);
    for i in from..to {
        let spec = &net.specs()[i];
        let next = spec.output_dims(d)?;
        let (mid, md) = cache.layer_output(i - 1).expect("outputs were kept");
        let plane = md.plane();
        let b = d.b;
        diff = match spec {
            LayerSpec::Relu => {
                for c in 0..d.c {
                    for v in 0..b {
                        let row = &mut diff[(c * b + v) * plane..][..plane];
                        for (r, &m) in row.iter_mut().zip(&mid[c * plane..][..plane]) {
                            let half = 0.5 * *r;
                            let (up, down) = (m + half > 0.0, m - half > 0.0);
                            if up != down {
                                return Ok(None);
                            }
                            if !up {
                                *r = 0.0;
                            }
                        }
                    }
                }
                diff
            }
            LayerSpec::Maxpool2d => {
                let out_plane = next.plane();
                let mut y = vec![0.0; d.c * b * out_plane];
                for c in 0..d.c {
                    let m = &mid[c * plane..][..plane];
                    for v in 0..b {
                        let r = &diff[(c * b + v) * plane..][..plane];
                        for oy in 0..next.h {
                            for ox in 0..next.w {
                                let mut best = [None::<(usize, f64)>; 2];
                                for y0 in 2 * oy..(2 * oy + 2).min(md.h) {
                                    for x0 in 2 * ox..(2 * ox + 2).min(md.w) {
                                        let k = y0 * md.w + x0;
                                        for (side, sign) in best.iter_mut().zip([0.5, -0.5]) {
                                            let val = m[k] + sign * r[k];
                                            if side.is_none_or(|(_, top)| val > top) {
                                                *side = Some((k, val));
                                            }
                                        }
                                    }
                                }
                                let (up, down) = (best[0].expect("window").0, best[1].expect("window").0);
                                if up != down {
                                    return Ok(None);
                                }
                                y[(c * b + v) * out_plane + oy * next.w + ox] = r[up];
                            }
                        }
                    }
                }
                y
            }
            LayerSpec::Sigmoid => return Err(crate::Error::invalid("sigmoid below the top")),
            _ => linear.forward_range(i, i + 1, diff, d)?,
        };
        d = next;
    }
    Ok(Some(diff))
}

/// Loss differences for a group from two full perturbed forward passes.
#[allow(clippy::too_many_arguments)]
fn plain_differences(
    net: &Network<f64>,
    base: &[f64],
    d: Dims,
    group: &[(usize, Vec<f64>)],
    from: usize,
    top: usize,
    fused: bool,
    label: u8,
) -> Result<Vec<f64>> {
    let b = 2 * group.len();
    let plane = d.plane();
    let mut batch = vec![0.0; d.c * b * plane];
    for c in 0..d.c {
        for v in 0..b {
            batch[(c * b + v) * plane..][..plane].copy_from_slice(&base[c * plane..][..plane]);
        }
    }
    for (g, (co, delta)) in group.iter().enumerate() {
        for (v, sign) in [(2 * g, 1.0), (2 * g + 1, -1.0)] {
            let row = &mut batch[(co * b + v) * plane..][..plane];
            for (r, dv) in row.iter_mut().zip(delta) {
                *r += sign * FD_STEP * dv;
            }
        }
    }
    let out = net.forward_range(from, top, batch, Dims { b, ..d })?;
    Ok((0..group.len())
        .map(|g| {
            if fused {
                logit_loss_diff(out[2 * g], out[2 * g + 1], label)
            } else {
                logloss(out[2 * g], label) - logloss(out[2 * g + 1], label)
            }
        })
        .collect())
}

/// Distance of a forward pass from the nearest non-differentiable point:
/// the smallest |ReLU input| and the smallest gap between the largest and
/// second-largest entry of a pooling window. Central differences are only
/// meaningful when this margin is well above the perturbation they cause.
pub fn kink_margin(net: &Network<f64>, x: &[f64]) -> Result<f64> {
    let cache = net.forward_cached(x, true)?;
    let mut margin = f64::INFINITY;
    for (layer, spec) in net.specs().iter().enumerate().skip(1) {
        let (input, d) = cache.layer_output(layer - 1).expect("outputs were kept");
        match spec {
            LayerSpec::Relu => {
                margin = input.iter().fold(margin, |m, v| m.min(v.abs()));
            }
            LayerSpec::Maxpool2d => {
                for plane in input.chunks_exact(d.plane()) {
                    for oy in (0..d.h).step_by(2) {
                        for ox in (0..d.w).step_by(2) {
                            let mut window = Vec::with_capacity(4);
                            for y in oy..(oy + 2).min(d.h) {
                                for x in ox..(ox + 2).min(d.w) {
                                    window.push(plane[y * d.w + x]);
                                }
                            }
                            window.sort_by(|a, b| b.total_cmp(a));
                            // ties among ReLU zeros only move through a ReLU kink
                            if window.len() > 1 && window[0] != 0.0 {
                                margin = margin.min(window[0] - window[1]);
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    Ok(margin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::network::stack_batch;
    use crate::rng::stream;
    use rand::Rng;

    fn two_conv_dense(seed: u64) -> Network<f64> {
        let specs = vec![
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 4,
            },
            LayerSpec::Relu,
            LayerSpec::Maxpool2d,
            LayerSpec::Conv2d {
                in_channels: 4,
                out_channels: 4,
            },
            LayerSpec::Relu,
            LayerSpec::Maxpool2d,
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 16, outputs: 1 },
            LayerSpec::Sigmoid,
        ];
        Network::new((1, 8, 8), specs, &mut stream(seed, 0)).unwrap()
    }

    fn input(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, 1);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn conv_network_gradients_match() {
        let net = two_conv_dense(1);
        let x = input(64, 2);
        assert!(grad_check(&net, &x, &[1]).unwrap() < 1e-4);
        assert!(grad_check_batched(&net, &x, 0, 17).unwrap() < 1e-4);
    }

    #[test]
    fn batched_and_plain_checks_agree() {
        let net = two_conv_dense(5);
        let x = input(64, 6);
        let a = grad_check(&net, &x, &[0]).unwrap();
        let b = grad_check_batched(&net, &x, 0, 64).unwrap();
        assert!(a < 1e-4 && b < 1e-4);
    }

    #[test]
    fn batched_check_falls_back_at_kinks() {
        let mut net = two_conv_dense(11);
        for bias in net.param_slices_mut().into_iter().skip(1).step_by(2) {
            bias.fill(0.0);
        }
        // a blank input sits on every ReLU kink at once
        let x = vec![0.0; 64];
        assert_eq!(kink_margin(&net, &x).unwrap(), 0.0);
        let a = grad_check(&net, &x, &[1]).unwrap();
        let b = grad_check_batched(&net, &x, 1, 64).unwrap();
        assert!((a - b).abs() <= 1e-9 + 1e-6 * a, "{a} vs {b}");
    }

    #[test]
    fn corrupted_conv_backward_is_caught() {
        let net = two_conv_dense(3);
        let x = input(64, 4);
        let (_, _, mut g) = net.loss_and_grad(&x, &[1]).unwrap();
        // rotate each first-layer kernel gradient by 180°, the classic
        // convolution-vs-correlation mixup
        for kernel in g[0].chunks_exact_mut(9) {
            kernel.reverse();
        }
        assert!(grad_check_with(&net, &x, &[1], &g).unwrap() > 1e-2);
    }

    #[test]
    fn logit_difference_matches_plain_losses() {
        for (z1, z2) in [(0.3, 0.1), (-2.0, -2.5), (5.0, 4.0)] {
            for y in [0, 1] {
                let p = |z: f64| 1.0 / (1.0 + libm::exp(-z));
                let plain = logloss(p(z1), y) - logloss(p(z2), y);
                assert!((logit_loss_diff(z1, z2, y) - plain).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_network_is_exact() {
        let specs = vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 12, outputs: 5 },
            LayerSpec::Dense { inputs: 5, outputs: 1 },
            LayerSpec::Sigmoid,
        ];
        let net = Network::<f64>::new((3, 2, 2), specs, &mut stream(7, 0)).unwrap();
        let x = input(12, 8);
        assert!(grad_check(&net, &x, &[1]).unwrap() < 1e-7);
    }

    #[test]
    fn batch_loss_gradients_match() {
        let net = two_conv_dense(9);
        let samples: Vec<Vec<f64>> = (0..3).map(|s| input(64, 20 + s)).collect();
        let refs: Vec<&[f64]> = samples.iter().map(|s| s.as_slice()).collect();
        let x = stack_batch(&refs, 1);
        assert!(grad_check(&net, &x, &[0, 1, 1]).unwrap() < 1e-4);
    }
}
