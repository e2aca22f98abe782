//! Domain separability of the feature tap: accuracy of a domain segmenter,
//! and a probe trained on frozen features.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::layers::sigmoid;
use crate::model::optim::{Adam, AdamConfig};
use crate::model::{nchw_from_features, Classifier, DomainHead};
use crate::sample::{Domain, ImageSample};

/// Per-pixel accuracy of `head` at 0.5 (targets original = 0, new = 1).
pub fn domain_accuracy(model: &Classifier, head: &DomainHead, samples: &[ImageSample]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for chunk in samples.chunks(64) {
        let images: Vec<_> = chunk.iter().map(|s| &s.pixels).collect();
        let feats = model.extract_features(&images)?;
        let probs = head.predict_map(&feats);
        let per = feats.height * feats.width;
        for (b, s) in chunk.iter().enumerate() {
            let target = s.domain == Domain::New;
            for &p in &probs[b * per..(b + 1) * per] {
                correct += usize::from((p >= 0.5) == target);
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::InvalidInput("no samples for domain accuracy".into()));
    }
    Ok(correct as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
            hidden: 64,
            seed: 11,
            optimizer: AdamConfig::default(),
        }
    }
}

/// Trains a fresh domain segmenter on frozen features of `samples`.
pub fn train_domain_probe(model: &Classifier, samples: &[ImageSample], cfg: &ProbeConfig) -> Result<DomainHead> {
    if samples.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Config("probe needs samples and a positive batch size".into()));
    }
    let mut head = DomainHead::new(model.arch.feature_dim(), cfg.hidden, cfg.seed);
    let mut adam = Adam::new(cfg.optimizer, &head.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<_> = chunk.iter().map(|&i| &samples[i].pixels).collect();
            let feats = nchw_from_features(&model.extract_features(&images)?);
            let trace = head.forward_train(&feats);
            let per = trace.logits.plane();
            let n = (trace.logits.n * per) as f64;
            let mut d = trace.logits.same_shape();
            for (b, &i) in chunk.iter().enumerate() {
                let target = samples[i].domain.target();
                for p in 0..per {
                    let idx = b * per + p;
                    d.data[idx] = ((sigmoid(trace.logits.data[idx]) - target) / n) as f32;
                }
            }
            let (grads, _) = head.backward(&trace, &d);
            adam.step(head.params_mut(), &grads);
        }
    }
    Ok(head)
}
