#![allow(dead_code)]

use mentorloop::config::PipelineConfig;
use mentorloop::syndata::SplitCounts;

/// A pipeline small enough to train in seconds.
pub fn tiny_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.dataset.counts = SplitCounts {
        train_original: 48,
        eval_original: 24,
        pool_new: 40,
        eval_new: 24,
    };
    cfg.baseline.epochs = 2;
    cfg.retrain.epochs = 2;
    cfg.mining.class_thresholds = vec![0.01; 3];
    cfg
}
