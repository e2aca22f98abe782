mod common;

use chrono::DateTime;
use mentorloop::pipeline::{mentor_with_oracle, mentored_set, Recipe};
use mentorloop::syndata::generate_dataset;
use mentorloop::trainer::{self, InitMode, Silent, StepLosses, TrainObserver};
use mentorloop::{ImageSample, ModelCheckpoint};

struct Setup {
    cfg: mentorloop::config::PipelineConfig,
    data: mentorloop::syndata::Dataset,
    baseline: ModelCheckpoint,
    mentored: Vec<ImageSample>,
}

fn setup() -> Setup {
    let cfg = common::tiny_config();
    let data = generate_dataset(&cfg.dataset).unwrap();
    let baseline = trainer::train_baseline(&cfg.arch, &data.train_original, &cfg.baseline, &cfg.hash(), &mut Silent)
        .unwrap()
        .checkpoint;
    let at = DateTime::from_timestamp(0, 0).unwrap();
    let sessions = mentor_with_oracle(&baseline.classifier, &data.pool_new, &cfg, at).unwrap();
    assert!(!sessions.is_empty(), "tiny config should mine something");
    let mentored = mentored_set(&data.pool_new, &sessions, cfg.arch.grid_shape(), false).unwrap();
    Setup {
        cfg,
        data,
        baseline,
        mentored,
    }
}

fn weights(c: &mentorloop::Classifier) -> Vec<u32> {
    c.params().iter().flat_map(|p| p.iter().map(|v| v.to_bits())).collect()
}

#[test]
fn transfer_at_zero_epochs_is_the_baseline() {
    let s = setup();
    let mut cfg = Recipe::Transfer.configure(&s.cfg.retrain);
    cfg.epochs = 0;
    let out = trainer::retrain(&s.baseline, &s.data.train_original, &s.mentored, &cfg, &mut Silent).unwrap();
    assert_eq!(cfg.init, InitMode::Transfer);
    assert_eq!(weights(&out.checkpoint.classifier), weights(&s.baseline.classifier));
    assert_eq!(out.checkpoint.meta.parent.as_deref(), Some(s.baseline.meta.id.as_str()));
}

#[test]
fn dann_without_reversal_matches_plain_retraining() {
    let s = setup();
    let plain = Recipe::NewData.configure(&s.cfg.retrain);
    let mut dann = Recipe::Dann.configure(&s.cfg.retrain);
    dann.lambda_d = 0.0;
    let a = trainer::retrain(&s.baseline, &s.data.train_original, &s.mentored, &plain, &mut Silent).unwrap();
    let b = trainer::retrain(&s.baseline, &s.data.train_original, &s.mentored, &dann, &mut Silent).unwrap();
    assert_eq!(weights(&a.checkpoint.classifier), weights(&b.checkpoint.classifier));
    assert!(b.checkpoint.domain_head.is_some());
}

#[test]
fn retraining_is_deterministic() {
    let s = setup();
    let cfg = Recipe::Omnia.configure(&s.cfg.retrain);
    let a = trainer::retrain(&s.baseline, &s.data.train_original, &s.mentored, &cfg, &mut Silent).unwrap();
    let b = trainer::retrain(&s.baseline, &s.data.train_original, &s.mentored, &cfg, &mut Silent).unwrap();
    assert_eq!(a.checkpoint.meta.id, b.checkpoint.meta.id);
    assert_eq!(a.checkpoint.meta.recipe, "omnia");
}

#[derive(Default)]
struct Collect(Vec<(usize, StepLosses)>);

impl TrainObserver for Collect {
    fn on_step(&mut self, step: usize, l: &StepLosses) {
        self.0.push((step, l.clone()));
    }
}

#[test]
fn step_log_covers_every_batch() {
    let s = setup();
    let cfg = Recipe::Dann.configure(&s.cfg.retrain);
    let mut log = Collect::default();
    trainer::retrain(&s.baseline, &s.data.train_original, &s.mentored, &cfg, &mut log).unwrap();
    let per_epoch = s.data.train_original.len().max(s.mentored.len()).div_ceil(cfg.batch_size / 2);
    assert_eq!(log.0.len(), per_epoch * cfg.epochs);
    assert!(log.0.iter().enumerate().all(|(i, (step, _))| *step == i + 1));
    assert!(log.0.iter().all(|(_, l)| l.total.is_finite() && l.domain > 0.0));
}

#[test]
fn json_lines_log_has_the_loss_fields() {
    let s = setup();
    let cfg = Recipe::NewData.configure(&s.cfg.retrain);
    let mut log = trainer::JsonLinesLog { out: Vec::new() };
    trainer::retrain(&s.baseline, &s.data.train_original, &s.mentored, &cfg, &mut log).unwrap();
    let text = String::from_utf8(log.out).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["step", "L_S", "L_W", "L_domain", "total"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn checkpoint_round_trips() {
    let s = setup();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.ckpt");
    s.baseline.save(&path).unwrap();
    let back = ModelCheckpoint::load(&path).unwrap();
    assert_eq!(back, s.baseline);
    assert_eq!(back.meta.config_hash, s.cfg.hash());
    let images: Vec<_> = s.data.eval_new.iter().map(|x| &x.pixels).collect();
    assert_eq!(
        back.classifier.forward(&images).unwrap(),
        s.baseline.classifier.forward(&images).unwrap()
    );
}

#[test]
fn mentored_samples_hide_full_labels() {
    let s = setup();
    assert!(s.mentored.iter().all(|m| m.full_label.is_none() && m.partial_label.is_some()));
}
