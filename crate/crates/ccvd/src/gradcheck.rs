//! Finite-difference verification of the training gradients.
//!
//! Central differences with step `h` are compared against the tape gradients
//! for every trainable scalar of a learner. Relative error uses an absolute
//! floor so near-zero gradient pairs compare sanely.

use ndarray::Array2;

use crate::adapters::{init_task_learner, ConceptSpec, TaskConceptLearner, TaskKind};
use crate::backbone::BaseModel;
use crate::error::Result;
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::trainer::{col_loss, col_loss_value, TrainSample};
use crate::video::LatentVideo;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckSettings {
    pub fd_step: f64,
    pub rel_floor: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            fd_step: 1e-5,
            rel_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub tensor: String,
    pub params: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub label: String,
    pub checks: Vec<TensorCheck>,
    pub params: usize,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Move every trainable tensor to a generic position (zero `up` factors get
/// zero `down` gradients, which would make the check vacuous).
pub fn randomize_learner(learner: &mut TaskConceptLearner, seed: u64, scale: f64) {
    for (l, a) in learner.adapters.iter_mut().enumerate() {
        let mut r = rng::named_rng(seed, &format!("gc:down:{l}"));
        a.down = rng::normal_array2(&mut r, a.down.nrows(), a.down.ncols(), scale);
        let mut r = rng::named_rng(seed, &format!("gc:up:{l}"));
        a.up = rng::normal_array2(&mut r, a.up.nrows(), a.up.ncols(), scale);
    }
    for (i, t) in learner.tokens.iter_mut().enumerate() {
        let mut r = rng::named_rng(seed, &format!("gc:tok:{i}"));
        t.embedding = rng::normal_array1(&mut r, t.embedding.len(), scale);
    }
}

/// Check every trainable scalar of `learner` under the full objective.
pub fn gradcheck_learner(
    model: &BaseModel,
    sched: &NoiseSchedule,
    learner: &TaskConceptLearner,
    prev: &[&TaskConceptLearner],
    batch: &[&TrainSample],
    lambda: f64,
    seed: u64,
    settings: &GradCheckSettings,
    label: &str,
) -> Result<GradCheckReport> {
    let (_, grads) = col_loss(model, sched, learner, prev, batch, lambda, seed)?;
    let h = settings.fd_step;
    let mut checks = Vec::new();

    let loss_at = |l: &TaskConceptLearner| -> Result<f64> {
        Ok(col_loss_value(model, sched, l, prev, batch, lambda, seed)?.total)
    };

    // adapter factors
    for l in 0..learner.adapters.len() {
        for (field, analytic) in [("down", &grads.adapter_down[l]), ("up", &grads.adapter_up[l])] {
            let mut max_err = 0.0f64;
            let dims = analytic.dim();
            for r in 0..dims.0 {
                for c in 0..dims.1 {
                    let mut probe = learner.clone();
                    {
                        let m = pick(&mut probe, l, field);
                        m[[r, c]] += h;
                    }
                    let fp = loss_at(&probe)?;
                    {
                        let m = pick(&mut probe, l, field);
                        m[[r, c]] -= 2.0 * h;
                    }
                    let fm = loss_at(&probe)?;
                    let numeric = (fp - fm) / (2.0 * h);
                    max_err = max_err.max(rel_err(analytic[[r, c]], numeric, settings.rel_floor));
                }
            }
            checks.push(TensorCheck {
                tensor: format!("layer{l}.{field}"),
                params: dims.0 * dims.1,
                max_rel_err: max_err,
            });
        }
    }

    // token rows
    for idx in 0..learner.tokens.len() {
        let key = (
            learner.tokens[idx].concept.clone(),
            learner.tokens[idx].layer,
        );
        let analytic = &grads.token_rows[&key];
        let mut max_err = 0.0f64;
        for c in 0..analytic.len() {
            let mut probe = learner.clone();
            probe.tokens[idx].embedding[c] += h;
            let fp = loss_at(&probe)?;
            probe.tokens[idx].embedding[c] -= 2.0 * h;
            let fm = loss_at(&probe)?;
            let numeric = (fp - fm) / (2.0 * h);
            max_err = max_err.max(rel_err(analytic[c], numeric, settings.rel_floor));
        }
        checks.push(TensorCheck {
            tensor: format!("token.{}.l{}", key.0, key.1 + 1),
            params: analytic.len(),
            max_rel_err: max_err,
        });
    }

    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let params = checks.iter().map(|c| c.params).sum();
    Ok(GradCheckReport {
        label: label.to_string(),
        checks,
        params,
        max_rel_err,
    })
}

fn pick<'a>(learner: &'a mut TaskConceptLearner, layer: usize, field: &str) -> &'a mut Array2<f64> {
    match field {
        "down" => &mut learner.adapters[layer].down,
        _ => &mut learner.adapters[layer].up,
    }
}

/// The model configuration the gradient suite targets: two layers of width 8,
/// rank-2 adapters, 4x4 latents over 4 frames.
pub fn suite_config() -> crate::backbone::DenoiserConfig {
    crate::backbone::DenoiserConfig {
        layers: 2,
        d: 8,
        r: 8,
        s: 8,
        rank: 2,
        heads: 2,
        frames: 4,
        height: 4,
        width: 4,
        channels: 3,
        max_tokens: 8,
        seed: 1234,
    }
}

/// The standard gradient suite: subject and motion learners, with and without
/// a previous task in the penalty, all at generic parameter positions.
pub fn run_suite(
    model: &BaseModel,
    sched: &NoiseSchedule,
    lambda: f64,
    seed: u64,
    settings: &GradCheckSettings,
) -> Result<Vec<GradCheckReport>> {
    let cfg = model.config();
    let mk_batch = |prompt: &str, s: u64| TrainSample {
        clip: LatentVideo::standard_normal(cfg.video_shape(), s, 17),
        prompt: prompt.to_string(),
    };

    let mut subject = init_task_learner(
        cfg,
        &model.encoder,
        "gc_subject",
        TaskKind::Subject,
        &[ConceptSpec {
            name: "G1".into(),
            init_word: Some("circle".into()),
        }],
        seed,
    )?;
    randomize_learner(&mut subject, rng::mix(seed, 1), 0.05);

    let mut motion = init_task_learner(
        cfg,
        &model.encoder,
        "gc_motion",
        TaskKind::Motion,
        &[ConceptSpec {
            name: "G2".into(),
            init_word: Some("orbit".into()),
        }],
        rng::mix(seed, 2),
    )?;
    randomize_learner(&mut motion, rng::mix(seed, 3), 0.05);

    let mut prev = init_task_learner(
        cfg,
        &model.encoder,
        "gc_prev",
        TaskKind::Subject,
        &[ConceptSpec {
            name: "G0".into(),
            init_word: Some("square".into()),
        }],
        rng::mix(seed, 4),
    )?;
    randomize_learner(&mut prev, rng::mix(seed, 5), 0.05);

    let s_batch = mk_batch("a [G1] photo", rng::mix(seed, 6));
    let m_batch = mk_batch("a [G2] video", rng::mix(seed, 7));

    Ok(vec![
        gradcheck_learner(
            model,
            sched,
            &subject,
            &[],
            &[&s_batch],
            0.0,
            seed,
            settings,
            "reconstruction/subject",
        )?,
        gradcheck_learner(
            model,
            sched,
            &motion,
            &[],
            &[&m_batch],
            0.0,
            seed,
            settings,
            "reconstruction/motion",
        )?,
        gradcheck_learner(
            model,
            sched,
            &subject,
            &[&prev],
            &[&s_batch],
            lambda,
            seed,
            settings,
            "orthogonality/subject",
        )?,
    ])
}
