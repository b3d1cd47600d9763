//! MultipathCNN: four VGG-style blocks of two 3×3 convolutions (16, 32, 64
//! and 128 channels) each followed by a ceil-mode 2×2 max pool, then a
//! 256-unit ReLU dense layer and a single sigmoid output.
//!
//! A block's pool is dropped once the feature map is already 1 pixel wide,
//! so one trunk serves every grid size from 4×4 to 40×40.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Snapshot};
use crate::nn::network::{stack_batch, LayerParams};
use crate::nn::{AdamConfig, AdamState, LayerSpec, LrSchedule, Network, Real, Tensor};
use crate::rng::{derive_seed, stream};
use crate::{Error, Result};

pub const INPUT_CHANNELS: usize = 2;
pub const BLOCK_CHANNELS: [usize; 4] = [16, 32, 64, 128];
pub const CONVS_PER_BLOCK: usize = 2;
pub const HIDDEN_UNITS: usize = 256;

const INIT_STREAM: u64 = 0x1417;
const SHUFFLE_STREAM: u64 = 0x5487;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub convs: usize,
    pub channels: usize,
    /// Whether the block ends in a max pool.
    pub pool: bool,
}

/// Layer plan of a MultipathCNN for an `n × n` grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n: usize,
    pub blocks: Vec<BlockSpec>,
    pub flatten_width: usize,
    pub hidden: usize,
}

impl ModelSpec {
    pub fn for_grid(n: usize) -> Result<Self> {
        if n < 4 {
            return Err(Error::invalid("MultipathCNN needs a grid of at least 4×4"));
        }
        let mut side = n;
        let blocks: Vec<BlockSpec> = BLOCK_CHANNELS
            .iter()
            .map(|&channels| {
                let pool = side >= 2;
                if pool {
                    side = side.div_ceil(2);
                }
                BlockSpec {
                    convs: CONVS_PER_BLOCK,
                    channels,
                    pool,
                }
            })
            .collect();
        Ok(ModelSpec {
            n,
            flatten_width: side * side * BLOCK_CHANNELS[3],
            blocks,
            hidden: HIDDEN_UNITS,
        })
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let mut cin = INPUT_CHANNELS;
        for b in &self.blocks {
            for _ in 0..b.convs {
                layers.push(LayerSpec::Conv2d {
                    in_channels: cin,
                    out_channels: b.channels,
                });
                layers.push(LayerSpec::Relu);
                cin = b.channels;
            }
            if b.pool {
                layers.push(LayerSpec::Maxpool2d);
            }
        }
        layers.extend([
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: self.flatten_width,
                outputs: self.hidden,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                inputs: self.hidden,
                outputs: 1,
            },
            LayerSpec::Sigmoid,
        ]);
        layers
    }

    /// Names of the parameter tensors in layer order (`conv1_1.weight`, ...).
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (bi, b) in self.blocks.iter().enumerate() {
            for ci in 0..b.convs {
                names.push(format!("conv{}_{}.weight", bi + 1, ci + 1));
                names.push(format!("conv{}_{}.bias", bi + 1, ci + 1));
            }
        }
        for name in ["fc1", "fc2"] {
            names.push(format!("{name}.weight"));
            names.push(format!("{name}.bias"));
        }
        names
    }

    /// Index of the ReLU closing the last convolution; its output is the
    /// feature map used for class activation maps.
    pub fn last_conv_activation(&self) -> usize {
        let layers = self.layers();
        let last_conv = layers
            .iter()
            .rposition(|l| matches!(l, LayerSpec::Conv2d { .. }))
            .expect("at least one conv");
        last_conv + 1
    }
}

/// Builds an initialized network for `spec` at the requested precision.
pub fn build_network<T: Real>(spec: &ModelSpec, seed: u64) -> Result<Network<T>> {
    let mut rng = stream(derive_seed(seed, INIT_STREAM), 0);
    Network::new((INPUT_CHANNELS, spec.n, spec.n), spec.layers(), &mut rng)
}

/// Divides a sample by its largest absolute value (all-zero samples pass
/// through unchanged).
pub fn normalize(sample: &[f32]) -> Vec<f32> {
    let m = sample.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if m > 0.0 {
        sample.iter().map(|v| v / m).collect()
    } else {
        sample.to_vec()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultipathCnn {
    pub spec: ModelSpec,
    pub net: Network<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub adam: AdamConfig,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr_start: 1e-3,
            lr_end: 1e-4,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.batch_size)
    }

    pub fn schedule(&self, n_samples: usize) -> LrSchedule {
        LrSchedule {
            start: self.lr_start,
            end: self.lr_end,
            total_steps: self.epochs * self.steps_per_epoch(n_samples),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub lr_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub steps: usize,
    /// Filled in by callers that can read a clock.
    pub wall_clock_s: Option<f64>,
    pub checkpoint: Option<String>,
}

/// Fraction of predictions on the right side of 0.5; exactly 0.5 counts as
/// class 1.
pub fn accuracy(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::EmptyDataset);
    }
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| u8::from(p >= 0.5) == y)
        .count();
    Ok(hits as f64 / probs.len() as f64)
}

/// Class activation map on the `n × n` input grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub n: usize,
    /// Row-major, rows along doppler error, columns along code delay.
    pub values: Vec<f64>,
}

impl Heatmap {
    /// Activation-weighted mean (row, column), `None` for an all-zero map.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let total: f64 = self.values.iter().sum();
        if total <= 0.0 {
            return None;
        }
        let (mut r, mut c) = (0.0, 0.0);
        for (i, &v) in self.values.iter().enumerate() {
            r += v * (i / self.n) as f64;
            c += v * (i % self.n) as f64;
        }
        Some((r / total, c / total))
    }
}

/// ReLU of the gradient-weighted channel sum of a `[C, h, w]` feature map,
/// nearest-neighbor upsampled to `n × n` and scaled to a maximum of 1.
pub fn class_activation_map(features: &[f64], grads: &[f64], c: usize, h: usize, w: usize, n: usize) -> Heatmap {
    let plane = h * w;
    let mut cam = vec![0.0; plane];
    for ch in 0..c {
        let g = &grads[ch * plane..][..plane];
        let weight = g.iter().sum::<f64>() / plane as f64;
        for (acc, &a) in cam.iter_mut().zip(&features[ch * plane..][..plane]) {
            *acc += weight * a;
        }
    }
    let mut values = vec![0.0; n * n];
    for r in 0..n {
        for col in 0..n {
            let v = cam[(r * h / n) * w + col * w / n];
            values[r * n + col] = v.max(0.0);
        }
    }
    let max = values.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    }
    Heatmap { n, values }
}

impl MultipathCnn {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        let spec = ModelSpec::for_grid(n)?;
        let net = build_network(&spec, seed)?;
        Ok(MultipathCnn { spec, net })
    }

    pub fn from_params(spec: ModelSpec, params: Vec<LayerParams<f32>>) -> Result<Self> {
        let net = Network::from_params((INPUT_CHANNELS, spec.n, spec.n), spec.layers(), params)?;
        Ok(MultipathCnn { spec, net })
    }

    /// Parameter tensors paired with their names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let tensors = self.net.layer_params().flat_map(|p| [&p.weight, &p.bias]);
        self.spec.param_names().into_iter().zip(tensors).collect()
    }

    fn check_sample(&self, s: &Snapshot) -> Result<()> {
        if s.n != self.spec.n || s.tensor.len() != INPUT_CHANNELS * s.n * s.n {
            return Err(Error::shape(
                [INPUT_CHANNELS, self.spec.n, self.spec.n],
                [s.tensor.len() / (s.n * s.n).max(1), s.n, s.n],
            ));
        }
        Ok(())
    }

    /// Multipath probabilities of the given snapshots.
    pub fn predict(&self, samples: &[Snapshot]) -> Result<Vec<f64>> {
        let mut probs = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(64) {
            let normed = chunk
                .iter()
                .map(|s| self.check_sample(s).map(|_| normalize(&s.tensor)))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&[f32]> = normed.iter().map(|v| v.as_slice()).collect();
            let out = self.net.forward(&stack_batch(&refs, INPUT_CHANNELS))?;
            probs.extend(out.iter().map(|&p| p as f64));
        }
        Ok(probs)
    }

    pub fn evaluate(&self, ds: &Dataset) -> Result<f64> {
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let probs = self.predict(&ds.samples)?;
        let labels: Vec<u8> = ds.labels().collect();
        accuracy(&probs, &labels)
    }

    pub fn train(&mut self, train: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainReport> {
        self.train_with(train, val, cfg, |_| {})
    }

    /// Mini-batch Adam training with a seeded shuffle per epoch; the last
    /// partial batch of each epoch is kept. `on_epoch` sees every epoch's
    /// statistics as soon as they are known.
    pub fn train_with(
        &mut self,
        train: &Dataset,
        val: Option<&Dataset>,
        cfg: &TrainConfig,
        mut on_epoch: impl FnMut(&EpochStats),
    ) -> Result<TrainReport> {
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if cfg.batch_size == 0 || cfg.epochs == 0 {
            return Err(Error::invalid("batch size and epoch count must be positive"));
        }
        let inputs = train
            .samples
            .iter()
            .map(|s| self.check_sample(s).map(|_| normalize(&s.tensor)))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<u8> = train.labels().collect();
        let schedule = cfg.schedule(inputs.len());
        let sizes: Vec<usize> = self.net.param_slices().iter().map(|s| s.len()).collect();
        let mut adam = AdamState::new(cfg.adam, sizes);
        let shuffle_seed = derive_seed(cfg.seed, SHUFFLE_STREAM);
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        let mut report = TrainReport {
            epochs: Vec::with_capacity(cfg.epochs),
            steps: 0,
            wall_clock_s: None,
            checkpoint: None,
        };
        for epoch in 0..cfg.epochs {
            order.sort_unstable();
            order.shuffle(&mut stream(shuffle_seed, epoch as u64));
            let (mut loss_sum, mut hits) = (0.0, 0usize);
            let mut lr = cfg.lr_start;
            for batch in order.chunks(cfg.batch_size) {
                let refs: Vec<&[f32]> = batch.iter().map(|&i| inputs[i].as_slice()).collect();
                let ys: Vec<u8> = batch.iter().map(|&i| labels[i]).collect();
                let (loss, probs, grads) = self.net.loss_and_grad(&stack_batch(&refs, INPUT_CHANNELS), &ys)?;
                loss_sum += loss * batch.len() as f64;
                hits += probs.iter().zip(&ys).filter(|(&p, &y)| u8::from(p >= 0.5) == y).count();
                lr = schedule.at(report.steps);
                adam.step(self.net.param_slices_mut(), &grads, lr)?;
                report.steps += 1;
            }
            let stats = EpochStats {
                epoch: epoch + 1,
                train_loss: loss_sum / inputs.len() as f64,
                train_acc: hits as f64 / inputs.len() as f64,
                val_acc: match val {
                    Some(v) if !v.is_empty() => Some(self.evaluate(v)?),
                    _ => None,
                },
                lr_end: lr,
            };
            if !stats.train_loss.is_finite() {
                return Err(Error::invalid("training diverged (non-finite loss)"));
            }
            on_epoch(&stats);
            report.epochs.push(stats);
        }
        Ok(report)
    }

    /// Grad-CAM of the predicted class at the last convolutional feature
    /// map.
    pub fn grad_cam(&self, snapshot: &Snapshot) -> Result<Heatmap> {
        self.cam(snapshot, None)
    }

    /// Grad-CAM of a given class. The class score is the logit for class 1
    /// and its negation for class 0.
    pub fn grad_cam_for(&self, snapshot: &Snapshot, class: u8) -> Result<Heatmap> {
        if class > 1 {
            return Err(Error::invalid("class must be 0 or 1"));
        }
        self.cam(snapshot, Some(class))
    }

    fn cam(&self, snapshot: &Snapshot, class: Option<u8>) -> Result<Heatmap> {
        self.check_sample(snapshot)?;
        let net = self.net.cast::<f64>();
        let x: Vec<f64> = normalize(&snapshot.tensor).iter().map(|&v| v as f64).collect();
        let cache = net.forward_cached(&x, true)?;
        let layer = self.spec.last_conv_activation();
        let (features, d) = cache.layer_output(layer).expect("outputs kept");
        let top = net.specs().len() - 1;
        let logit = cache.layer_output(top - 1).expect("outputs kept").0[0];
        let class = class.unwrap_or(u8::from(logit >= 0.0));
        let seed = if class == 1 { 1.0 } else { -1.0 };
        let grads = net.backward_range(&cache, vec![seed], top, layer + 1, None)?;
        Ok(class_activation_map(features, &grads, d.c, d.h, d.w, self.spec.n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, PhaseRule, ScenarioConfig};
    use crate::nn::{grad_check_batched, kink_margin};
    use rand::Rng;

    #[test]
    fn flatten_widths_follow_the_pool_cascade() {
        // side after each applied pool, pools only while the side is >= 2
        for (n, width) in [
            (40, 1152),
            (30, 512),
            (20, 512),
            (10, 128),
            (8, 128),
            (6, 128),
            (4, 128),
        ] {
            let spec = ModelSpec::for_grid(n).unwrap();
            assert_eq!(spec.flatten_width, width, "n = {n}");
            let net: Network<f32> = build_network(&spec, 0).unwrap();
            let dims = net.layer_dims();
            let flat = dims[spec.layers().iter().position(|l| *l == LayerSpec::Flatten).unwrap() + 1];
            assert_eq!(flat.c, width);
        }
        let spec = ModelSpec::for_grid(4).unwrap();
        assert_eq!(spec.blocks.iter().filter(|b| b.pool).count(), 2);
        assert!(ModelSpec::for_grid(3).is_err());
    }

    #[test]
    fn first_block_map_is_n_by_n_by_16() {
        let spec = ModelSpec::for_grid(40).unwrap();
        let net: Network<f32> = build_network(&spec, 0).unwrap();
        let d = net.layer_dims()[1];
        assert_eq!((d.c, d.h, d.w), (16, 40, 40));
        assert_eq!(spec.param_names().len(), net.param_slices().len());
    }

    #[test]
    fn accuracy_conventions() {
        assert_eq!(accuracy(&[0.9; 4], &[1; 4]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0.5, 0.49], &[1, 0]).unwrap(), 1.0);
        assert!(accuracy(&[], &[]).is_err());
        let mut rng = stream(1, 0);
        let probs: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let labels: Vec<u8> = (0..10_000).map(|i| (i % 2) as u8).collect();
        assert!((accuracy(&probs, &labels).unwrap() - 0.5).abs() < 0.02);
    }

    #[test]
    fn step_count_and_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.steps_per_epoch(2000), 63);
        let s = cfg.schedule(2000);
        assert_eq!(s.total_steps, 1890);
        assert_eq!(s.at(0), 1e-3);
        assert!((s.at(1889) - 1e-4).abs() < 1e-18);
    }

    /// First seeded random input whose forward pass keeps every ReLU input
    /// and pooling gap at least `margin` away from a kink.
    fn smooth_input(net: &Network<f64>, len: usize, margin: f64) -> Vec<f64> {
        (0..100)
            .map(|s| {
                let mut rng = stream(s, 7);
                (0..len).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>()
            })
            .find(|x| kink_margin(net, x).unwrap() >= margin)
            .expect("a smooth input within 100 draws")
    }

    #[test]
    fn full_model_gradient_check_small_grids() {
        for n in [4, 8] {
            let spec = ModelSpec::for_grid(n).unwrap();
            let net: Network<f64> = build_network(&spec, 3).unwrap();
            let x = smooth_input(&net, 2 * n * n, 1e-4);
            for label in [0, 1] {
                let err = grad_check_batched(&net, &x, label, 64).unwrap();
                assert!(err < 1e-4, "n = {n}: {err:e}");
            }
        }
    }

    #[test]
    fn overfits_ten_samples() {
        let cfg = ScenarioConfig::new(1e-3, 45.0, PhaseRule::Fixed(0.0));
        let ds = build_dataset(&cfg, 6, 5, 2).unwrap();
        let mut model = MultipathCnn::new(6, 1).unwrap();
        let tc = TrainConfig {
            epochs: 200,
            ..TrainConfig::default()
        };
        let report = model.train(&ds, None, &tc).unwrap();
        assert_eq!(report.steps, 200);
        assert_eq!(report.epochs.last().unwrap().train_acc, 1.0);
        assert_eq!(model.evaluate(&ds).unwrap(), 1.0);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let cfg = ScenarioConfig::new(1e-3, 45.0, PhaseRule::Fixed(0.0));
        let ds = build_dataset(&cfg, 4, 4, 2).unwrap();
        let mut model = MultipathCnn::new(4, 1).unwrap();
        let before = model.clone();
        let tc = TrainConfig {
            epochs: 2,
            lr_start: 0.0,
            lr_end: 0.0,
            ..TrainConfig::default()
        };
        model.train(&ds, Some(&ds), &tc).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = ScenarioConfig::new(1e-3, 40.0, PhaseRule::Fixed(45.0));
        let ds = build_dataset(&cfg, 4, 20, 3).unwrap();
        let tc = TrainConfig {
            epochs: 3,
            seed: 5,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = MultipathCnn::new(4, 9).unwrap();
            let r = m.train(&ds, Some(&ds), &tc).unwrap();
            (m, r)
        };
        let (m1, r1) = run();
        let (m2, r2) = run();
        assert_eq!(r1, r2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let mut m = MultipathCnn::new(4, 0).unwrap();
        let empty = Dataset { n: 4, samples: vec![] };
        assert_eq!(m.evaluate(&empty), Err(Error::EmptyDataset));
        assert_eq!(
            m.train(&empty, None, &TrainConfig::default()).unwrap_err(),
            Error::EmptyDataset
        );
    }

    #[test]
    fn heatmap_contract() {
        let cfg = ScenarioConfig::new(1e-3, 45.0, PhaseRule::Fixed(0.0));
        let ds = build_dataset(&cfg, 8, 3, 1).unwrap();
        let model = MultipathCnn::new(8, 2).unwrap();
        for s in &ds.samples {
            let h = model.grad_cam(s).unwrap();
            assert_eq!(h.values.len(), 64);
            assert!(h.values.iter().all(|v| (0.0..=1.0).contains(v)));
            let max = h.values.iter().cloned().fold(0.0, f64::max);
            assert!(max == 0.0 || max == 1.0);
        }
    }

    #[test]
    fn class_maps_are_complementary() {
        let cfg = ScenarioConfig::new(1e-3, 45.0, PhaseRule::Fixed(90.0));
        let ds = build_dataset(&cfg, 8, 2, 6).unwrap();
        let model = MultipathCnn::new(8, 9).unwrap();
        let probs = model.predict(&ds.samples).unwrap();
        for (s, p) in ds.samples.iter().zip(probs) {
            let (h0, h1) = (model.grad_cam_for(s, 0).unwrap(), model.grad_cam_for(s, 1).unwrap());
            // the two class scores are negatives, so their ReLU maps never overlap
            assert!(h0.values.iter().zip(&h1.values).all(|(a, b)| *a == 0.0 || *b == 0.0));
            let predicted = if p >= 0.5 { &h1 } else { &h0 };
            assert_eq!(&model.grad_cam(s).unwrap(), predicted);
        }
        assert!(model.grad_cam_for(&ds.samples[0], 2).is_err());
    }

    #[test]
    fn zero_gradients_give_zero_heatmap() {
        let features = vec![1.0; 2 * 4];
        let h = class_activation_map(&features, &[0.0; 8], 2, 2, 2, 4);
        assert!(h.values.iter().all(|&v| v == 0.0));
        assert_eq!(h.centroid(), None);
        let h = class_activation_map(&features, &[1.0; 8], 2, 2, 2, 4);
        assert!(h.values.iter().all(|&v| v == 1.0));
        assert_eq!(h.centroid(), Some((1.5, 1.5)));
    }

    #[test]
    fn normalization_bounds_samples() {
        let v = normalize(&[0.5, -2.0, 1.0]);
        assert_eq!(v, vec![0.25, -1.0, 0.5]);
        assert_eq!(normalize(&[0.0, 0.0]), vec![0.0, 0.0]);
    }
}
