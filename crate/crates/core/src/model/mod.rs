//! Fully-convolutional grid classifier, domain head and gradient reversal.

pub mod checkpoint;
pub mod layers;
pub mod optim;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridShape, ProbGrid};
use crate::sample::Image;
use layers::{
    maxpool2, maxpool2_backward, relu_backward_inplace, relu_inplace, sigmoid, BatchNorm, BnCache,
    Conv2d, ConvCache, Tensor,
};

pub use checkpoint::{CheckpointMeta, ModelCheckpoint};

/// Architecture of the classifier and its optional domain head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub in_channels: usize,
    /// `(height, width)` of input images.
    pub image_size: (usize, usize),
    /// Output channels of each 3x3 convolution stage.
    pub widths: Vec<usize>,
    /// Whether each stage ends with 2x2 max pooling.
    pub pools: Vec<bool>,
    pub num_classes: usize,
    /// Filters of the first domain-head layer.
    pub domain_hidden: usize,
    /// Initial bias of the class logits (rare-defect prior).
    pub head_bias_init: f32,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            image_size: (32, 32),
            widths: vec![8, 16, 32, 32],
            pools: vec![true, true, false, false],
            num_classes: 3,
            domain_hidden: 64,
            head_bias_init: -3.0,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.pools.len() {
            return Err(Error::Config("widths and pools must be non-empty and equal length".into()));
        }
        let down = 1usize << self.pools.iter().filter(|&&p| p).count();
        if self.image_size.0 % down != 0 || self.image_size.1 % down != 0 {
            return Err(Error::Config(format!(
                "image size {:?} not divisible by total stride {down}",
                self.image_size
            )));
        }
        if self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::Config("classes and channels must be positive".into()));
        }
        Ok(())
    }

    pub fn grid_size(&self) -> (usize, usize) {
        let down = 1usize << self.pools.iter().filter(|&&p| p).count();
        (self.image_size.0 / down, self.image_size.1 / down)
    }

    pub fn grid_shape(&self) -> GridShape {
        let (r, c) = self.grid_size();
        GridShape::new(r, c, self.num_classes)
    }

    /// Channel count `D` of the feature tap.
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }
}

/// Penultimate feature maps in `(batch, H_f, W_f, D)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn vector(&self, b: usize, row: usize, col: usize) -> &[f32] {
        let start = ((b * self.height + row) * self.width + col) * self.dim;
        &self.data[start..start + self.dim]
    }

    fn from_nchw(t: &Tensor) -> Self {
        let mut data = vec![0.0; t.data.len()];
        let hw = t.plane();
        for b in 0..t.n {
            for ch in 0..t.c {
                for p in 0..hw {
                    data[(b * hw + p) * t.c + ch] = t.data[(b * t.c + ch) * hw + p];
                }
            }
        }
        Self {
            batch: t.n,
            height: t.h,
            width: t.w,
            dim: t.c,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub arch: ArchConfig,
    pub stages: Vec<Conv2d>,
    pub head: Conv2d,
}

/// Activations kept for the backward pass.
pub struct Trace {
    conv: Vec<ConvCache>,
    activations: Vec<Tensor>,
    pool_args: Vec<Option<Vec<u32>>>,
    head: ConvCache,
    /// Feature tap, NCHW.
    pub features: Tensor,
    /// Class logits, NCHW with `C` channels.
    pub logits: Tensor,
}

impl Classifier {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(arch.widths.len());
        let mut cin = arch.in_channels;
        for &w in &arch.widths {
            stages.push(Conv2d::new(cin, w, 3, &mut rng));
            cin = w;
        }
        let mut head = Conv2d::new(cin, arch.num_classes, 1, &mut rng);
        head.bias.fill(arch.head_bias_init);
        Ok(Self { arch, stages, head })
    }

    pub fn grid_shape(&self) -> GridShape {
        self.arch.grid_shape()
    }

    /// Packs images into an NCHW tensor, checking their size.
    pub fn batch_tensor(&self, images: &[&Image]) -> Result<Tensor> {
        let (h, w) = self.arch.image_size;
        let c = self.arch.in_channels;
        let mut t = Tensor::zeros(images.len(), c, h, w);
        for (b, img) in images.iter().enumerate() {
            if img.height != h || img.width != w || img.channels != c {
                return Err(Error::InvalidInput(format!(
                    "image is {}x{}x{}, model expects {h}x{w}x{c}",
                    img.height, img.width, img.channels
                )));
            }
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        t.data[((b * c + ch) * h + y) * w + x] = img.get(y, x, ch);
                    }
                }
            }
        }
        Ok(t)
    }

    fn run(&self, x: &Tensor, keep: bool) -> (Tensor, Tensor, Option<Trace>) {
        let mut conv = Vec::new();
        let mut activations = Vec::new();
        let mut pool_args = Vec::new();
        let mut cur = x.clone();
        for (stage, &pool) in self.stages.iter().zip(&self.arch.pools) {
            let (mut a, cache) = stage.forward(&cur, keep);
            relu_inplace(&mut a);
            let next = if pool {
                let (p, arg) = maxpool2(&a);
                if keep {
                    pool_args.push(Some(arg));
                }
                p
            } else {
                if keep {
                    pool_args.push(None);
                }
                a.clone()
            };
            if keep {
                conv.push(cache.expect("kept"));
                activations.push(a);
            }
            cur = next;
        }
        let (logits, head) = self.head.forward(&cur, keep);
        let trace = head.map(|head| Trace {
            conv,
            activations,
            pool_args,
            head,
            features: cur.clone(),
            logits: logits.clone(),
        });
        (cur, logits, trace)
    }

    /// Forward pass that keeps everything needed by [`Classifier::backward`].
    pub fn forward_train(&self, x: &Tensor) -> Trace {
        self.run(x, true).2.expect("trace kept")
    }

    /// Per-class cell probabilities. Inference has no stochastic layers.
    pub fn forward(&self, images: &[&Image]) -> Result<Vec<ProbGrid>> {
        let x = self.batch_tensor(images)?;
        let (_, logits, _) = self.run(&x, false);
        Ok(probs_from_logits(&logits))
    }

    pub fn extract_features(&self, images: &[&Image]) -> Result<FeatureMap> {
        let x = self.batch_tensor(images)?;
        let (feats, _, _) = self.run(&x, false);
        Ok(FeatureMap::from_nchw(&feats))
    }

    /// Backpropagates logit gradients plus an optional extra gradient arriving
    /// at the feature tap. Returns one gradient buffer per parameter, in
    /// [`Classifier::params_mut`] order.
    pub fn backward(&self, trace: &Trace, d_logits: &Tensor, d_features: Option<&Tensor>) -> Vec<Vec<f32>> {
        let mut grads = self.zero_grads();
        let nstages = self.stages.len();
        let (head_w, head_b) = grads.split_at_mut(2 * nstages + 1);
        let mut d = self
            .head
            .backward(&trace.head, d_logits, &mut head_w[2 * nstages], &mut head_b[0], true)
            .expect("input grad requested");
        if let Some(extra) = d_features {
            for (a, b) in d.data.iter_mut().zip(&extra.data) {
                *a += *b;
            }
        }
        for i in (0..nstages).rev() {
            let act = &trace.activations[i];
            if let Some(arg) = &trace.pool_args[i] {
                d = maxpool2_backward(&d, arg, act.h, act.w);
            }
            relu_backward_inplace(act, &mut d);
            let (w, rest) = grads[2 * i..].split_at_mut(1);
            let next = self.stages[i].backward(&trace.conv[i], &d, &mut w[0], &mut rest[0], i > 0);
            if let Some(next) = next {
                d = next;
            }
        }
        grads
    }

    pub fn zero_grads(&self) -> Vec<Vec<f32>> {
        self.params().iter().map(|p| vec![0.0; p.len()]).collect()
    }

    pub fn params(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = Vec::new();
        for s in &self.stages {
            out.push(&s.weight);
            out.push(&s.bias);
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = Vec::new();
        for s in self.stages.iter_mut() {
            out.push(&mut s.weight);
            out.push(&mut s.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }
}

/// Converts NCHW logits into per-image probability grids.
pub fn probs_from_logits(logits: &Tensor) -> Vec<ProbGrid> {
    let shape = GridShape::new(logits.h, logits.w, logits.c);
    let hw = logits.plane();
    (0..logits.n)
        .map(|b| {
            let mut values = vec![0.0; shape.entries()];
            for k in 0..logits.c {
                for p in 0..hw {
                    values[p * logits.c + k] = sigmoid(logits.data[(b * logits.c + k) * hw + p]);
                }
            }
            ProbGrid { shape, values }
        })
        .collect()
}

/// Gradient reversal: identity forward, scaled sign flip backward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReverse<T> {
    pub lambda: T,
}

impl<T> GradReverse<T>
where
    T: Copy + std::ops::Mul<Output = T> + std::ops::Neg<Output = T>,
{
    pub fn new(lambda: T) -> Self {
        Self { lambda }
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        x.to_vec()
    }

    /// Maps an upstream gradient `g` to `-lambda * g`.
    pub fn backward(&self, upstream: &[T]) -> Vec<T> {
        upstream.iter().map(|&g| -(self.lambda * g)).collect()
    }
}

/// Per-pixel domain segmenter on top of the feature tap: 1x1 convolution with
/// `domain_hidden` filters, rectifier, batch normalization, then a 1x1
/// convolution to one logistic unit.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainHead {
    pub hidden: Conv2d,
    pub norm: BatchNorm,
    pub out: Conv2d,
}

pub struct DomainTrace {
    hidden: ConvCache,
    activation: Tensor,
    norm: BnCache,
    out: ConvCache,
    /// Domain logits, `(batch, 1, H_f, W_f)`.
    pub logits: Tensor,
}

impl DomainHead {
    pub fn new(feature_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            hidden: Conv2d::new(feature_dim, hidden, 1, &mut rng),
            norm: BatchNorm::new(hidden),
            out: Conv2d::new(hidden, 1, 1, &mut rng),
        }
    }

    pub fn forward_train(&mut self, features: &Tensor) -> DomainTrace {
        let (mut a, hidden) = self.hidden.forward(features, true);
        relu_inplace(&mut a);
        let (n, norm) = self.norm.forward(&a, true);
        let (logits, out) = self.out.forward(&n, true);
        DomainTrace {
            hidden: hidden.expect("kept"),
            activation: a,
            norm: norm.expect("training mode"),
            out: out.expect("kept"),
            logits,
        }
    }

    /// Evaluation-mode probabilities `(batch, H_f, W_f)` flattened row-major.
    pub fn predict(&self, features: &Tensor) -> Vec<f64> {
        let (mut a, _) = self.hidden.forward(features, false);
        relu_inplace(&mut a);
        let n = self.norm.infer(&a);
        let (logits, _) = self.out.forward(&n, false);
        logits.data.iter().map(|&z| sigmoid(z)).collect()
    }

    /// Predicts from an NHWC feature map.
    pub fn predict_map(&self, feats: &FeatureMap) -> Vec<f64> {
        self.predict(&nchw_from_features(feats))
    }

    /// Returns parameter gradients (in [`DomainHead::params_mut`] order) and
    /// the gradient with respect to the input features.
    pub fn backward(&self, trace: &DomainTrace, d_logits: &Tensor) -> (Vec<Vec<f32>>, Tensor) {
        let mut grads = self.zero_grads();
        let (g_hidden, rest) = grads.split_at_mut(2);
        let (g_norm, g_out) = rest.split_at_mut(2);
        let (ow, ob) = g_out.split_at_mut(1);
        let d_norm = self
            .out
            .backward(&trace.out, d_logits, &mut ow[0], &mut ob[0], true)
            .expect("input grad");
        let (gg, gb) = g_norm.split_at_mut(1);
        let mut d_act = self.norm.backward(&trace.norm, &d_norm, &mut gg[0], &mut gb[0]);
        relu_backward_inplace(&trace.activation, &mut d_act);
        let (hw, hb) = g_hidden.split_at_mut(1);
        let d_feat = self
            .hidden
            .backward(&trace.hidden, &d_act, &mut hw[0], &mut hb[0], true)
            .expect("input grad");
        (grads, d_feat)
    }

    pub fn zero_grads(&self) -> Vec<Vec<f32>> {
        self.params().iter().map(|p| vec![0.0; p.len()]).collect()
    }

    pub fn params(&self) -> Vec<&[f32]> {
        vec![
            &self.hidden.weight,
            &self.hidden.bias,
            &self.norm.gamma,
            &self.norm.beta,
            &self.out.weight,
            &self.out.bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        vec![
            &mut self.hidden.weight,
            &mut self.hidden.bias,
            &mut self.norm.gamma,
            &mut self.norm.beta,
            &mut self.out.weight,
            &mut self.out.bias,
        ]
    }
}

pub fn nchw_from_features(feats: &FeatureMap) -> Tensor {
    let mut t = Tensor::zeros(feats.batch, feats.dim, feats.height, feats.width);
    let hw = feats.height * feats.width;
    for b in 0..feats.batch {
        for p in 0..hw {
            for ch in 0..feats.dim {
                t.data[(b * feats.dim + ch) * hw + p] = feats.data[(b * hw + p) * feats.dim + ch];
            }
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64) -> Image {
        let data = (0..32 * 32)
            .map(|i| (((i as u64 * 2654435761 + seed * 97) % 1000) as f32) / 1000.0)
            .collect();
        Image::new(32, 32, 1, data).unwrap()
    }

    #[test]
    fn forward_shape_and_range() {
        let model = Classifier::new(ArchConfig::default(), 1).unwrap();
        let imgs = [image(1), image(2)];
        let out = model.forward(&[&imgs[0], &imgs[1]]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].shape, GridShape::new(8, 8, 3));
        assert!(out.iter().flat_map(|g| &g.values).all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn duplicated_images_give_identical_rows() {
        let model = Classifier::new(ArchConfig::default(), 1).unwrap();
        let img = image(3);
        let out = model.forward(&[&img, &img]).unwrap();
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let model = Classifier::new(ArchConfig::default(), 1).unwrap();
        let img = Image::filled(16, 16, 1, 0.5);
        assert!(matches!(model.forward(&[&img]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn feature_tap_shape() {
        let model = Classifier::new(ArchConfig::default(), 1).unwrap();
        let img = image(4);
        let f = model.extract_features(&[&img, &img]).unwrap();
        assert_eq!((f.batch, f.height, f.width, f.dim), (2, 8, 8, 32));
        assert_eq!(f.vector(0, 3, 3), f.vector(1, 3, 3));
    }

    #[test]
    fn grad_reverse_examples() {
        let x = [0.5, -2.0, 3.25];
        for lambda in [0.0, 0.5, 1.0] {
            let grl = GradReverse::new(lambda);
            assert_eq!(grl.forward(&x), x.to_vec());
            let g = grl.backward(&x);
            for (a, b) in g.iter().zip(&x) {
                assert_eq!(*a, -lambda * b);
            }
        }
        assert_eq!(GradReverse::new(1.0).backward(&[2.0]), vec![-2.0]);
        assert_eq!(GradReverse::new(0.0f64).backward(&[2.0])[0], 0.0);
    }

    #[test]
    fn domain_head_shape_and_determinism() {
        let model = Classifier::new(ArchConfig::default(), 1).unwrap();
        let img = image(5);
        let feats = model.extract_features(&[&img]).unwrap();
        let a = DomainHead::new(32, 64, 9).predict_map(&feats);
        let b = DomainHead::new(32, 64, 9).predict_map(&feats);
        assert_eq!(a.len(), 64);
        assert_eq!(a, b);
        assert!(a.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn translation_by_one_cell_shifts_output_grid() {
        let model = Classifier::new(ArchConfig::default(), 2).unwrap();
        let base = image(6);
        let cell = 4;
        let mut shifted = Image::filled(32, 32, 1, 0.0);
        for y in 0..32 {
            for x in cell..32 {
                shifted.set(y, x, 0, base.get(y, x - cell, 0));
            }
        }
        let out = model.forward(&[&base, &shifted]).unwrap();
        // The 26-pixel receptive field of shifted column 4 stays inside the
        // copied content, so no border effect reaches it.
        for r in 0..8 {
            for c in [4] {
                for k in 0..3 {
                    let a = out[0].get(r, c - 1, k);
                    let b = out[1].get(r, c, k);
                    assert!((a - b).abs() < 1e-6, "{a} {b}");
                }
            }
        }
    }
}
