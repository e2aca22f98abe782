//! Training orchestration: baseline training, balanced mixed-batch retraining
//! with the masked loss, transfer initialization and domain-adversarial
//! training.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::mentorflow::{expand, ExpansionOptions};
use crate::model::layers::{sigmoid, Tensor};
use crate::model::optim::{Adam, AdamConfig};
use crate::model::{ArchConfig, Classifier, DomainHead, GradReverse, ModelCheckpoint};
use crate::sample::{ImageSample, PartialLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    FromScratch,
    /// Start from the baseline classifier weights.
    Transfer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    pub init: InitMode,
    pub omnia: bool,
    pub omnia_epsilon: f64,
    pub healthy: bool,
    pub dann: bool,
    /// Gradient reversal factor.
    pub lambda_d: f64,
    pub loss: LossConfig,
    /// Diagnostic: train on mentored data only (no original half).
    pub mentored_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            optimizer: AdamConfig::default(),
            seed: 1,
            init: InitMode::FromScratch,
            omnia: false,
            omnia_epsilon: 0.01,
            healthy: false,
            dann: false,
            lambda_d: 1.0,
            loss: LossConfig::default(),
            mentored_only: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, mixed: bool) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if mixed && self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch_size {} must be even for balanced batches",
                self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.omnia_epsilon) {
            return Err(Error::Config("omnia_epsilon must lie in [0, 1)".into()));
        }
        if !(self.lambda_d >= 0.0 && self.lambda_d.is_finite()) {
            return Err(Error::Config("lambda_d must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Provenance tag such as `new_data`, `transfer` or `omnia+dann`.
    pub fn recipe_tag(&self) -> String {
        let mut parts = Vec::new();
        if self.mentored_only {
            parts.push("mentored_only");
        }
        if self.init == InitMode::Transfer {
            parts.push("transfer");
        }
        if self.omnia {
            parts.push("omnia");
        }
        if self.healthy {
            parts.push("healthy");
        }
        if self.dann {
            parts.push("dann");
        }
        if parts.is_empty() {
            "new_data".into()
        } else {
            parts.join("+")
        }
    }

    fn expansion(&self) -> ExpansionOptions {
        ExpansionOptions {
            healthy: self.healthy,
            omnia_epsilon: self.omnia.then_some(self.omnia_epsilon),
        }
    }
}

fn derive_seed(seed: u64, name: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Indices of one mixed batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixedBatch {
    pub original: Vec<usize>,
    pub mentored: Vec<usize>,
}

/// Endless reshuffled passes over `0..len`.
struct Resampler {
    len: usize,
    order: Vec<usize>,
    pos: usize,
}

impl Resampler {
    fn new(len: usize) -> Self {
        Self {
            len,
            order: Vec::new(),
            pos: 0,
        }
    }

    fn take(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order = (0..self.len).collect();
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// One epoch of 1:1 batches. The larger set is traversed once (the final
/// batch tops up from a fresh permutation); the smaller set is resampled with
/// reshuffled repetition.
pub fn make_balanced_batches(
    n_original: usize,
    n_mentored: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MixedBatch>> {
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(Error::Config(format!("batch_size {batch_size} must be even and positive")));
    }
    if n_mentored == 0 {
        return Err(Error::Config(
            "mentored set is empty; use plain supervised training".into(),
        ));
    }
    if n_original == 0 {
        return Err(Error::Config("original set is empty".into()));
    }
    let half = batch_size / 2;
    let batches = n_original.max(n_mentored).div_ceil(half);
    let mut orig = Resampler::new(n_original);
    let mut ment = Resampler::new(n_mentored);
    let mut out = Vec::with_capacity(batches);
    for _ in 0..batches {
        out.push(MixedBatch {
            original: orig.take(half, rng),
            mentored: ment.take(half, rng),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    #[serde(rename = "L_S")]
    pub supervised: f64,
    #[serde(rename = "L_W")]
    pub masked: f64,
    #[serde(rename = "L_domain")]
    pub domain: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub mean: StepLosses,
}

/// Mutable training state: the single writer of the model weights.
pub struct Trainer {
    pub classifier: Classifier,
    pub domain_head: Option<DomainHead>,
    cfg: TrainConfig,
    adam: Adam,
    domain_adam: Option<Adam>,
    grl: GradReverse<f32>,
    steps: usize,
}

impl Trainer {
    pub fn new(classifier: Classifier, cfg: TrainConfig) -> Self {
        let adam = Adam::new(cfg.optimizer, &classifier.params());
        let (domain_head, domain_adam) = if cfg.dann {
            let arch = &classifier.arch;
            let head = DomainHead::new(
                arch.feature_dim(),
                arch.domain_hidden,
                derive_seed(cfg.seed, "domain-head", 0),
            );
            let adam = Adam::new(cfg.optimizer, &head.params());
            (Some(head), Some(adam))
        } else {
            (None, None)
        };
        let grl = GradReverse::new(cfg.lambda_d as f32);
        Self {
            classifier,
            domain_head,
            cfg,
            adam,
            domain_adam,
            grl,
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One optimizer step on a batch made of fully labeled `original` samples
    /// and partially labeled `mentored` samples (either half may be empty).
    pub fn step(&mut self, original: &[&ImageSample], mentored: &[&ImageSample]) -> Result<StepLosses> {
        let shape = self.classifier.grid_shape();
        let images: Vec<_> = original.iter().chain(mentored).map(|s| &s.pixels).collect();
        let x = self.classifier.batch_tensor(&images)?;
        let trace = self.classifier.forward_train(&x);
        let logits = &trace.logits;
        let hw = logits.plane();
        let c = logits.c;
        let mut d_logits = logits.same_shape();

        let n_sup = original.len() * shape.entries();
        let mut sup_sum = 0.0;
        let eps = self.cfg.loss.epsilon_num;
        for (b, s) in original.iter().enumerate() {
            let label = s
                .full_label
                .as_ref()
                .ok_or_else(|| Error::InvalidInput(format!("original sample {} has no full label", s.id)))?;
            check_grid(label.shape() == shape, &s.id)?;
            for k in 0..c {
                for p in 0..hw {
                    let idx = (b * c + k) * hw + p;
                    let prob = sigmoid(logits.data[idx]);
                    let y = label.values()[p * c + k] as f64;
                    sup_sum += bce(prob, y, eps);
                    d_logits.data[idx] = ((prob - y) / n_sup as f64) as f32;
                }
            }
        }

        let mut n_ann = 0usize;
        for s in mentored {
            let pl = partial(s)?;
            check_grid(pl.label.shape() == shape, &s.id)?;
            n_ann += pl.mask.count() * c;
        }
        let mut masked_sum = 0.0;
        let lambda_w = self.cfg.loss.lambda_w;
        for (j, s) in mentored.iter().enumerate() {
            let b = original.len() + j;
            let pl = partial(s)?;
            for p in 0..hw {
                if !pl.mask.as_slice()[p] {
                    continue;
                }
                for k in 0..c {
                    let idx = (b * c + k) * hw + p;
                    let prob = sigmoid(logits.data[idx]);
                    let y = pl.label.values()[p * c + k] as f64;
                    masked_sum += bce(prob, y, eps);
                    d_logits.data[idx] = (lambda_w * (prob - y) / n_ann as f64) as f32;
                }
            }
        }
        let supervised = if n_sup == 0 { 0.0 } else { sup_sum / n_sup as f64 };
        let masked = if n_ann == 0 { 0.0 } else { masked_sum / n_ann as f64 };
        let mut total = crate::losses::combined_loss(supervised, masked, &self.cfg.loss)?;

        let mut domain = 0.0;
        let mut d_features: Option<Tensor> = None;
        if let (Some(head), Some(adam)) = (self.domain_head.as_mut(), self.domain_adam.as_mut()) {
            let feats = &trace.features;
            let dtrace = head.forward_train(feats);
            let pix = dtrace.logits.plane();
            let n_pix = (dtrace.logits.n * pix) as f64;
            let mut d_dom = dtrace.logits.same_shape();
            let mut sum = 0.0;
            let lambda_domain = self.cfg.loss.lambda_domain;
            for b in 0..dtrace.logits.n {
                let target = if b < original.len() { 0.0 } else { 1.0 };
                for p in 0..pix {
                    let idx = b * pix + p;
                    let prob = sigmoid(dtrace.logits.data[idx]);
                    sum += bce(prob, target, eps);
                    d_dom.data[idx] = (lambda_domain * (prob - target) / n_pix) as f32;
                }
            }
            domain = sum / n_pix;
            if !domain.is_finite() {
                return Err(Error::Divergence(format!("domain loss is {domain}")));
            }
            total += lambda_domain * domain;
            let (head_grads, d_feat) = head.backward(&dtrace, &d_dom);
            adam.step(head.params_mut(), &head_grads);
            let reversed = self.grl.backward(&d_feat.data);
            d_features = Some(Tensor {
                data: reversed,
                ..d_feat
            });
        }

        let grads = self.classifier.backward(&trace, &d_logits, d_features.as_ref());
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Divergence("non-finite gradient".into()));
        }
        self.adam.step(self.classifier.params_mut(), &grads);
        self.steps += 1;
        Ok(StepLosses {
            supervised,
            masked,
            domain,
            total,
        })
    }
}

fn check_grid(ok: bool, id: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("label of {id} does not match the model grid")))
    }
}

fn partial(s: &ImageSample) -> Result<&PartialLabel> {
    s.partial_label
        .as_ref()
        .ok_or_else(|| Error::InvalidInput(format!("mentored sample {} has no partial label", s.id)))
}

#[inline]
fn bce(p: f64, y: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Hooks invoked during training.
pub trait TrainObserver {
    fn on_step(&mut self, _step: usize, _losses: &StepLosses) {}
    fn on_batch(&mut self, _batch: &MixedBatch) {}
    fn on_epoch(&mut self, _stats: &EpochStats, _classifier: &Classifier) {}
}

/// No-op observer.
pub struct Silent;
impl TrainObserver for Silent {}

/// Writes one JSON line per step: `{step, L_S, L_W, L_domain, total}`.
pub struct JsonLinesLog<W: Write> {
    pub out: W,
}

impl<W: Write> TrainObserver for JsonLinesLog<W> {
    fn on_step(&mut self, step: usize, l: &StepLosses) {
        let line = serde_json::json!({
            "step": step,
            "L_S": l.supervised,
            "L_W": l.masked,
            "L_domain": l.domain,
            "total": l.total,
        });
        let _ = writeln!(self.out, "{line}");
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub history: Vec<EpochStats>,
}

fn mean_losses(acc: &[StepLosses]) -> StepLosses {
    let n = acc.len().max(1) as f64;
    StepLosses {
        supervised: acc.iter().map(|l| l.supervised).sum::<f64>() / n,
        masked: acc.iter().map(|l| l.masked).sum::<f64>() / n,
        domain: acc.iter().map(|l| l.domain).sum::<f64>() / n,
        total: acc.iter().map(|l| l.total).sum::<f64>() / n,
    }
}

/// Fully supervised training on the original domain.
pub fn train_baseline(
    arch: &ArchConfig,
    train_original: &[ImageSample],
    cfg: &TrainConfig,
    data_hash: &str,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate(false)?;
    if train_original.is_empty() && cfg.epochs > 0 {
        return Err(Error::Config("no training samples".into()));
    }
    let classifier = Classifier::new(arch.clone(), derive_seed(cfg.seed, "classifier", 0))?;
    let base_cfg = TrainConfig {
        dann: false,
        ..cfg.clone()
    };
    let mut trainer = Trainer::new(classifier, base_cfg);
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "batches", epoch as u64));
        let mut order: Vec<usize> = (0..train_original.len()).collect();
        order.shuffle(&mut rng);
        let mut acc = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&ImageSample> = chunk.iter().map(|&i| &train_original[i]).collect();
            let l = trainer.step(&batch, &[])?;
            observer.on_step(trainer.steps(), &l);
            acc.push(l);
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            steps: acc.len(),
            mean: mean_losses(&acc),
        };
        observer.on_epoch(&stats, &trainer.classifier);
        history.push(stats);
    }
    let checkpoint = ModelCheckpoint::new(
        trainer.classifier,
        None,
        data_hash.to_string(),
        None,
        "baseline",
        cfg.epochs,
        cfg.seed,
    );
    Ok(TrainOutcome { checkpoint, history })
}

/// Applies the configured expansion rules to mentored samples, using the
/// baseline's predictions for the confidence rule.
pub fn prepare_mentored(
    baseline: &Classifier,
    mentored: &[ImageSample],
    cfg: &TrainConfig,
) -> Result<Vec<ImageSample>> {
    let opts = cfg.expansion();
    let mut out = Vec::with_capacity(mentored.len());
    for chunk in mentored.chunks(64) {
        let probs = if opts.omnia_epsilon.is_some() {
            let images: Vec<_> = chunk.iter().map(|s| &s.pixels).collect();
            Some(baseline.forward(&images)?)
        } else {
            None
        };
        for (i, s) in chunk.iter().enumerate() {
            let pl = partial(s)?;
            let expanded = expand(s, pl, probs.as_ref().map(|p| &p[i]), opts)?;
            let mut next = s.clone();
            next.partial_label = Some(expanded);
            out.push(next);
        }
    }
    Ok(out)
}

/// Retrains with original data and mentored data in 1:1 batches, minimizing
/// `L_S + lambda_w * L_W` (plus the reversed domain loss when enabled).
pub fn retrain(
    baseline: &ModelCheckpoint,
    train_original: &[ImageSample],
    mentored: &[ImageSample],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate(!cfg.mentored_only)?;
    let mentored = prepare_mentored(&baseline.classifier, mentored, cfg)?;
    if mentored.is_empty() {
        return Err(Error::Config(
            "mentored set is empty; use plain supervised training".into(),
        ));
    }
    let classifier = match cfg.init {
        InitMode::Transfer => baseline.classifier.clone(),
        InitMode::FromScratch => Classifier::new(
            baseline.classifier.arch.clone(),
            derive_seed(cfg.seed, "classifier", 0),
        )?,
    };
    let mut trainer = Trainer::new(classifier, cfg.clone());
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "batches", epoch as u64));
        let mut acc = Vec::new();
        if cfg.mentored_only {
            let mut order: Vec<usize> = (0..mentored.len()).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&ImageSample> = chunk.iter().map(|&i| &mentored[i]).collect();
                let l = trainer.step(&[], &batch)?;
                observer.on_step(trainer.steps(), &l);
                acc.push(l);
            }
        } else {
            let batches = make_balanced_batches(train_original.len(), mentored.len(), cfg.batch_size, &mut rng)?;
            for batch in &batches {
                observer.on_batch(batch);
                let orig: Vec<&ImageSample> = batch.original.iter().map(|&i| &train_original[i]).collect();
                let ment: Vec<&ImageSample> = batch.mentored.iter().map(|&i| &mentored[i]).collect();
                let l = trainer.step(&orig, &ment)?;
                observer.on_step(trainer.steps(), &l);
                acc.push(l);
            }
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            steps: acc.len(),
            mean: mean_losses(&acc),
        };
        observer.on_epoch(&stats, &trainer.classifier);
        history.push(stats);
    }
    let checkpoint = ModelCheckpoint::new(
        trainer.classifier,
        trainer.domain_head,
        baseline.meta.config_hash.clone(),
        Some(baseline.meta.id.clone()),
        cfg.recipe_tag(),
        cfg.epochs,
        cfg.seed,
    );
    Ok(TrainOutcome { checkpoint, history })
}
