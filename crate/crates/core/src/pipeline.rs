//! End-to-end workflow: baseline, mining, scripted mentoring, mentored-set
//! assembly, retraining recipes and evaluation.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, DomainReport, EvalConfig, EvalReport};
use crate::grid::GridShape;
use crate::mentorflow::{build_partial_ground_truth, mine_images, oracle_annotate, MentoringSession};
use crate::model::{Classifier, ModelCheckpoint};
use crate::sample::{Domain, ImageSample, PartialLabel};
use crate::syndata::Dataset;
use crate::trainer::{self, InitMode, TrainConfig, TrainObserver};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    NewData,
    Transfer,
    Omnia,
    Healthy,
    Dann,
}

impl Recipe {
    pub const ALL: [Recipe; 5] = [Recipe::NewData, Recipe::Transfer, Recipe::Omnia, Recipe::Healthy, Recipe::Dann];
    pub const MITIGATIONS: [Recipe; 4] = [Recipe::Transfer, Recipe::Omnia, Recipe::Healthy, Recipe::Dann];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::NewData => "new_data",
            Recipe::Transfer => "transfer",
            Recipe::Omnia => "omnia",
            Recipe::Healthy => "healthy",
            Recipe::Dann => "dann",
        }
    }

    /// Turns the shared retraining settings into this recipe's settings.
    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = TrainConfig {
            init: InitMode::FromScratch,
            omnia: false,
            healthy: false,
            dann: false,
            mentored_only: false,
            ..base.clone()
        };
        match self {
            Recipe::NewData => {}
            Recipe::Transfer => cfg.init = InitMode::Transfer,
            Recipe::Omnia => cfg.omnia = true,
            Recipe::Healthy => cfg.healthy = true,
            Recipe::Dann => cfg.dann = true,
        }
        cfg
    }
}

/// Mining plus a scripted operator: every mined image becomes a completed
/// session whose verdicts come from the true labels.
pub fn mentor_with_oracle(
    baseline: &Classifier,
    pool: &[ImageSample],
    cfg: &PipelineConfig,
    at: DateTime<Utc>,
) -> Result<Vec<MentoringSession>> {
    let mined = mine_images(baseline, pool, &cfg.mining)?;
    mined
        .iter()
        .map(|m| {
            let truth = m
                .sample
                .full_label
                .as_ref()
                .ok_or_else(|| Error::Precondition(format!("pool image {} has no hidden label", m.sample.id)))?;
            let session = MentoringSession::new(&m.sample.id, m.detections.clone(), at);
            oracle_annotate(&session, truth, cfg.oracle_iou, at)
        })
        .collect()
}

/// Fraction of truly defective pool images that mining selected.
pub fn mining_recall(pool: &[ImageSample], sessions: &[MentoringSession]) -> f64 {
    let mined: std::collections::BTreeSet<&str> = sessions.iter().map(|s| s.image_id.as_str()).collect();
    let defective: Vec<&ImageSample> = pool
        .iter()
        .filter(|s| s.full_label.as_ref().is_some_and(|l| !l.is_all_zero()))
        .collect();
    if defective.is_empty() {
        return 1.0;
    }
    defective.iter().filter(|s| mined.contains(s.id.as_str())).count() as f64 / defective.len() as f64
}

/// Mentored training samples: each completed session's partial ground truth
/// attached to its image, plus (optionally) the unmined healthy-flagged pool
/// images with an empty mask. Hidden full labels are stripped.
pub fn mentored_set(
    pool: &[ImageSample],
    sessions: &[MentoringSession],
    shape: GridShape,
    include_flagged_healthy: bool,
) -> Result<Vec<ImageSample>> {
    let by_id: BTreeMap<&str, &ImageSample> = pool.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut out = Vec::new();
    let mut mined = std::collections::BTreeSet::new();
    for session in sessions {
        let sample = by_id
            .get(session.image_id.as_str())
            .ok_or_else(|| Error::NotFound(format!("image {} not in pool", session.image_id)))?;
        let partial = build_partial_ground_truth(session, shape)?;
        out.push(strip(sample, partial));
        mined.insert(session.image_id.as_str());
    }
    if include_flagged_healthy {
        for s in pool {
            if s.healthy_flag == Some(true) && !mined.contains(s.id.as_str()) {
                out.push(strip(s, PartialLabel::empty(shape)));
            }
        }
    }
    Ok(out)
}

fn strip(sample: &ImageSample, partial: PartialLabel) -> ImageSample {
    let mut s = sample.with_partial(partial);
    s.full_label = None;
    s
}

pub fn evaluate_domains(model: &Classifier, dataset: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    let mut domains = BTreeMap::new();
    domains.insert(Domain::Original, evaluate(model, &dataset.eval_original, cfg)?);
    domains.insert(Domain::New, evaluate(model, &dataset.eval_new, cfg)?);
    Ok(EvalReport { domains })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecipeResult {
    pub recipe: String,
    pub checkpoint_id: String,
    pub report: EvalReport,
}

impl RecipeResult {
    pub fn domain(&self, d: Domain) -> &DomainReport {
        &self.report.domains[&d]
    }
}

/// Everything produced by a full run.
pub struct Experiment {
    pub dataset: Dataset,
    pub baseline: ModelCheckpoint,
    pub baseline_report: EvalReport,
    pub sessions: Vec<MentoringSession>,
    pub mentored: Vec<ImageSample>,
    pub models: BTreeMap<Recipe, ModelCheckpoint>,
    pub results: BTreeMap<Recipe, RecipeResult>,
}

/// Runs baseline training, oracle mentoring and the given recipes.
pub fn run_experiment(cfg: &PipelineConfig, recipes: &[Recipe], observer: &mut dyn TrainObserver) -> Result<Experiment> {
    cfg.validate()?;
    let dataset = crate::syndata::generate_dataset(&cfg.dataset)?;
    let hash = cfg.hash();
    let baseline = trainer::train_baseline(
        &cfg.arch,
        &dataset.train_original,
        &cfg.baseline,
        &hash,
        &mut trainer::Silent,
    )?
    .checkpoint;
    let baseline_report = evaluate_domains(&baseline.classifier, &dataset, &cfg.eval)?;
    let at = DateTime::from_timestamp(0, 0).expect("epoch");
    let sessions = mentor_with_oracle(&baseline.classifier, &dataset.pool_new, cfg, at)?;
    let shape = cfg.arch.grid_shape();
    let mentored = mentored_set(&dataset.pool_new, &sessions, shape, false)?;
    let mut models = BTreeMap::new();
    let mut results = BTreeMap::new();
    for &recipe in recipes {
        let set = if recipe == Recipe::Healthy && cfg.healthy_pool {
            mentored_set(&dataset.pool_new, &sessions, shape, true)?
        } else {
            mentored.clone()
        };
        let model = retrain_recipe(&baseline, &dataset, &set, &recipe.configure(&cfg.retrain), observer)?;
        let report = evaluate_domains(&model.classifier, &dataset, &cfg.eval)?;
        results.insert(
            recipe,
            RecipeResult {
                recipe: recipe.name().into(),
                checkpoint_id: model.meta.id.clone(),
                report,
            },
        );
        models.insert(recipe, model);
    }
    Ok(Experiment {
        dataset,
        baseline,
        baseline_report,
        sessions,
        mentored,
        models,
        results,
    })
}

pub fn retrain_recipe(
    baseline: &ModelCheckpoint,
    dataset: &Dataset,
    mentored: &[ImageSample],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<ModelCheckpoint> {
    Ok(trainer::retrain(baseline, &dataset.train_original, mentored, cfg, observer)?.checkpoint)
}
