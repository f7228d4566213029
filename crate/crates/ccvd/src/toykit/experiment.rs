//! Paired forgetting experiment: per-task learners with aggregation versus
//! naive sequential finetuning of shared adapters.

use std::collections::BTreeMap;

use crate::adapters::{
    init_task_learner, ConceptSpec, Placement, TaskConceptLearner, TaskKind,
};
use crate::aggregator::generate_with_adapters;
use crate::backbone::{BaseModel, MaterializedAdapters};
use crate::error::Result;
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::trainer::{train_task, TrainConfig};

use super::concepts::{generate_task_data, ColorName, ShapeKind, ToyConcept, Trajectory};
use super::metrics::{
    evaluate, evaluate_with, forgetting_curve, EvalSettings, ForgettingReport, MetricReport,
};

/// One task of a fixture sequence.
#[derive(Debug, Clone)]
pub struct FixtureTask {
    pub task_id: String,
    pub concept: ToyConcept,
}

/// The standard 3-task sequence: red circle, blue square, orbit motion.
/// The optional distractor appends a crimson circle, semantically close to
/// the red one, to stress subspace separation.
pub fn standard_fixture(with_distractor: bool) -> Vec<FixtureTask> {
    let mut tasks = vec![
        FixtureTask {
            task_id: "task_red_circle".into(),
            concept: ToyConcept::subject("V1", ShapeKind::Circle, ColorName::Red),
        },
        FixtureTask {
            task_id: "task_blue_square".into(),
            concept: ToyConcept::subject("V2", ShapeKind::Square, ColorName::Blue),
        },
        FixtureTask {
            task_id: "task_orbit".into(),
            concept: ToyConcept::motion("M1", Trajectory::Orbit),
        },
    ];
    if with_distractor {
        tasks.push(FixtureTask {
            task_id: "task_crimson_circle".into(),
            concept: ToyConcept::subject("V3", ShapeKind::Circle, ColorName::Crimson),
        });
    }
    tasks
}

#[derive(Debug, Clone)]
pub struct ExperimentSettings {
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

/// Checkpointed metric history for one training path.
#[derive(Debug, Clone)]
pub struct PathForgetting {
    pub checkpoints: Vec<MetricReport>,
    pub forgetting: ForgettingReport,
    pub learners: Vec<TaskConceptLearner>,
}

fn concept_spec(c: &ToyConcept) -> ConceptSpec {
    ConceptSpec {
        name: c.token.clone(),
        init_word: Some(c.init_word().to_string()),
    }
}

fn train_seeds(master_seed: u64, u: usize) -> (u64, u64, u64) {
    (
        rng::mix(master_seed, 10 + u as u64),  // data
        rng::mix(master_seed, 100 + u as u64), // learner init
        rng::mix(master_seed, 200 + u as u64), // training
    )
}

/// Sequential learning with per-task learners, the orthogonality penalty,
/// and task-aware aggregation at evaluation time.
pub fn run_ccvd_path(
    model: &BaseModel,
    sched: &NoiseSchedule,
    fixture: &[FixtureTask],
    settings: &ExperimentSettings,
    master_seed: u64,
) -> Result<PathForgetting> {
    let dims = model.config().video_shape();
    let mut learners: Vec<TaskConceptLearner> = Vec::new();
    let mut checkpoints = Vec::new();
    let mut learned_at = BTreeMap::new();

    for (u, task) in fixture.iter().enumerate() {
        let (data_seed, init_seed, train_seed) = train_seeds(master_seed, u);
        let data = generate_task_data(&task.concept, dims, data_seed)?;
        let fresh = init_task_learner(
            model.config(),
            &model.encoder,
            &task.task_id,
            task.concept.kind(),
            &[concept_spec(&task.concept)],
            init_seed,
        )?;
        let prev: Vec<&TaskConceptLearner> = learners.iter().collect();
        let cfg = TrainConfig {
            seed: train_seed,
            ..settings.train
        };
        let outcome = train_task(model, sched, &prev, fresh, &data, &cfg)?;
        learners.push(outcome.learner);
        learned_at.insert(task.concept.token.clone(), u);

        let refs: Vec<&TaskConceptLearner> = learners.iter().collect();
        let concepts: Vec<&ToyConcept> =
            fixture[..=u].iter().map(|t| &t.concept).collect();
        checkpoints.push(evaluate(model, sched, &refs, &concepts, &settings.eval)?);
    }

    let forgetting = forgetting_curve(&checkpoints, &learned_at)?;
    Ok(PathForgetting {
        checkpoints,
        forgetting,
        learners,
    })
}

/// Naive sequential finetuning baseline: one shared subject-adapter stack and
/// one shared motion-adapter stack, each re-trained in place by every task of
/// its kind. No penalty, no aggregation; generation always uses the latest
/// shared stacks.
pub fn run_finetune_baseline(
    model: &BaseModel,
    sched: &NoiseSchedule,
    fixture: &[FixtureTask],
    settings: &ExperimentSettings,
    master_seed: u64,
) -> Result<PathForgetting> {
    let dims = model.config().video_shape();
    let mut token_pool: Vec<TaskConceptLearner> = Vec::new();
    let mut shared_subject: Option<Vec<crate::adapters::LowRankAdapter>> = None;
    let mut shared_motion: Option<Vec<crate::adapters::LowRankAdapter>> = None;
    let mut checkpoints = Vec::new();
    let mut learned_at = BTreeMap::new();

    for (u, task) in fixture.iter().enumerate() {
        let (data_seed, init_seed, train_seed) = train_seeds(master_seed, u);
        let data = generate_task_data(&task.concept, dims, data_seed)?;
        let mut fresh = init_task_learner(
            model.config(),
            &model.encoder,
            &task.task_id,
            task.concept.kind(),
            &[concept_spec(&task.concept)],
            init_seed,
        )?;
        // continue from the shared stack of this kind
        let shared = match task.concept.kind() {
            TaskKind::Subject => &mut shared_subject,
            TaskKind::Motion => &mut shared_motion,
        };
        if let Some(adapters) = shared.as_ref() {
            fresh.adapters = adapters.clone();
        }
        let cfg = TrainConfig {
            lambda: 0.0,
            seed: train_seed,
            ..settings.train
        };
        let outcome = train_task(model, sched, &[], fresh, &data, &cfg)?;
        *shared = Some(outcome.learner.adapters.clone());
        token_pool.push(outcome.learner);
        learned_at.insert(task.concept.token.clone(), u);

        // evaluation: shared adapters, stored tokens, no aggregation
        let mut adapters = MaterializedAdapters::none(model.config().layers);
        if let Some(s) = &shared_subject {
            for a in s {
                debug_assert_eq!(a.placement, Placement::Stb);
                adapters.stb[a.layer] = Some(a.delta());
            }
        }
        if let Some(m) = &shared_motion {
            for a in m {
                adapters.ttb[a.layer] = Some(a.delta());
            }
        }
        let pool_refs: Vec<&TaskConceptLearner> = token_pool.iter().collect();
        let concepts: Vec<&ToyConcept> =
            fixture[..=u].iter().map(|t| &t.concept).collect();
        let guidance = settings.eval.guidance;
        let report = evaluate_with(
            &mut |prompt, seed| {
                generate_with_adapters(
                    model, sched, &adapters, &pool_refs, prompt, &guidance, seed,
                )
            },
            &concepts,
            dims,
            &settings.eval,
        )?;
        checkpoints.push(report);
    }

    let forgetting = forgetting_curve(&checkpoints, &learned_at)?;
    Ok(PathForgetting {
        checkpoints,
        forgetting,
        learners: token_pool,
    })
}

/// Paired comparison over several master seeds.
#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub per_seed: Vec<SeedOutcome>,
    pub mean_ccvd_visual_forgetting: f64,
    pub mean_baseline_visual_forgetting: f64,
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub ccvd_visual_forgetting: f64,
    pub baseline_visual_forgetting: f64,
}

pub fn run_forgetting_comparison(
    model: &BaseModel,
    sched: &NoiseSchedule,
    fixture: &[FixtureTask],
    settings: &ExperimentSettings,
    seeds: &[u64],
) -> Result<ComparisonReport> {
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let ccvd = run_ccvd_path(model, sched, fixture, settings, seed)?;
        let base = run_finetune_baseline(model, sched, fixture, settings, seed)?;
        per_seed.push(SeedOutcome {
            seed,
            ccvd_visual_forgetting: ccvd.forgetting.mean.visual_alignment,
            baseline_visual_forgetting: base.forgetting.mean.visual_alignment,
        });
    }
    let n = per_seed.len().max(1) as f64;
    Ok(ComparisonReport {
        mean_ccvd_visual_forgetting: per_seed
            .iter()
            .map(|s| s.ccvd_visual_forgetting)
            .sum::<f64>()
            / n,
        mean_baseline_visual_forgetting: per_seed
            .iter()
            .map(|s| s.baseline_visual_forgetting)
            .sum::<f64>()
            / n,
        per_seed,
    })
}
