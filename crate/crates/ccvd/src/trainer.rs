//! Sequential task training: the denoising objective, the concept orthogonal
//! penalty over adapter subspaces, and the update loop.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};

use crate::adapters::TaskConceptLearner;
use crate::backbone::{AdapterDeltas, BaseModel, NoHook};
use crate::engine::{Engine, TapeEngine, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::{forward_noise, NoiseSchedule};
use crate::text::tokenize;
use crate::video::LatentVideo;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl Optimizer {
    pub fn as_str(&self) -> &'static str {
        match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Training hyperparameters. Defaults carry the reference settings
/// (`lambda = 0.1`, token lr `1e-4`, adapter lr `1e-5`, 3000/1000 steps);
/// desk-scale fixtures override them through config files.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr_tokens: f64,
    pub lr_adapters: f64,
    pub steps_tokens: usize,
    pub steps_adapters: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Tokens-first then adapters, instead of the default interleaved loop.
    pub two_phase: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            lr_tokens: 1e-4,
            lr_adapters: 1e-5,
            steps_tokens: 3000,
            steps_adapters: 1000,
            batch_size: 1,
            seed: 0,
            optimizer: Optimizer::Sgd,
            two_phase: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0: {}", self.lambda)));
        }
        if self.lr_tokens <= 0.0 || self.lr_adapters <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.steps_tokens == 0 && self.steps_adapters == 0 {
            return Err(Error::Config("no training steps configured".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// One training example: a clip plus its prompt. Subject samples broadcast a
/// single image over the frame axis; motion samples are genuine clips.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub clip: LatentVideo,
    pub prompt: String,
}

/// Loss value split into its two terms.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    pub penalty: f64,
}

/// Gradients for every trainable tensor of one learner.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub adapter_down: Vec<Array2<f64>>,
    pub adapter_up: Vec<Array2<f64>>,
    pub token_rows: BTreeMap<(String, usize), Array1<f64>>,
}

/// Mean squared error between a noise estimate and the true noise.
pub fn noise_mse(eps_hat: &LatentVideo, eps: &LatentVideo) -> Result<f64> {
    if eps_hat.shape() != eps.shape() {
        return Err(Error::shape(
            "noise_mse",
            format!("{:?}", eps.shape()),
            format!("{:?}", eps_hat.shape()),
        ));
    }
    let n = eps.data().len() as f64;
    let sum: f64 = eps_hat
        .data()
        .iter()
        .zip(eps.data().iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n)
}

/// Concept orthogonal penalty over raw subspace bases:
/// `sum_j sum_l | tr(prev[j][l] . cur[l]^T) |`.
///
/// `tr(A B^T)` is the elementwise product sum, i.e. the sum of columnwise
/// inner products between matched basis vectors.
pub fn col_penalty(prev_bases: &[Vec<Array2<f64>>], cur_bases: &[Array2<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for (j, prev) in prev_bases.iter().enumerate() {
        if prev.len() != cur_bases.len() {
            return Err(Error::shape(
                format!("col_penalty task {j} layer count"),
                cur_bases.len(),
                prev.len(),
            ));
        }
        for (l, (p, c)) in prev.iter().zip(cur_bases.iter()).enumerate() {
            if p.dim() != c.dim() {
                return Err(Error::shape(
                    format!("col_penalty (task {j}, layer {l})"),
                    format!("{:?}", c.dim()),
                    format!("{:?}", p.dim()),
                ));
            }
            let tr: f64 = p.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
            total += tr.abs();
        }
    }
    Ok(total)
}

/// Per-learner trainable leaves on a tape.
struct LearnerLeaves {
    down: Vec<Var>,
    up: Vec<Var>,
    tokens: BTreeMap<(String, usize), Var>,
}

fn plant_leaves(tape: &TapeEngine, learner: &TaskConceptLearner) -> LearnerLeaves {
    let down = learner
        .adapters
        .iter()
        .map(|a| tape.leaf(a.down.clone()))
        .collect();
    let up = learner
        .adapters
        .iter()
        .map(|a| tape.leaf(a.up.clone()))
        .collect();
    let mut tokens = BTreeMap::new();
    for t in &learner.tokens {
        let row = t.embedding.clone().insert_axis(ndarray::Axis(0));
        tokens.insert((t.concept.clone(), t.layer), tape.leaf(row));
    }
    LearnerLeaves { down, up, tokens }
}

/// Build the full loss graph for one batch and return (loss node, breakdown
/// pieces, leaves). Shared by the gradient path and the value-only path.
fn build_loss(
    tape: &TapeEngine,
    model: &BaseModel,
    sched: &NoiseSchedule,
    learner: &TaskConceptLearner,
    prev: &[&TaskConceptLearner],
    batch: &[&TrainSample],
    lambda: f64,
    seed: u64,
) -> Result<(Var, Var, Var, LearnerLeaves)> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let cfg = model.config();
    let leaves = plant_leaves(tape, learner);
    let placement = learner.kind.placement();

    // materialized per-layer deltas from the factored leaves
    let mut deltas: AdapterDeltas<Var> = AdapterDeltas::none(cfg.layers);
    for l in 0..cfg.layers {
        let dw = tape.matmul(&leaves.down[l], &leaves.up[l]);
        match placement {
            crate::adapters::Placement::Stb => deltas.stb[l] = Some(dw),
            crate::adapters::Placement::Ttb => deltas.ttb[l] = Some(dw),
        }
    }

    let mut rec_terms: Vec<Var> = Vec::with_capacity(batch.len());
    for (i, sample) in batch.iter().enumerate() {
        if sample.clip.shape() != cfg.video_shape() {
            return Err(Error::shape(
                format!("training sample {i}"),
                format!("{:?}", cfg.video_shape()),
                format!("{:?}", sample.clip.shape()),
            ));
        }
        // per-sample timestep and noise, keyed by (seed, sample index)
        let mut tr = rng::stream_rng(seed, rng::stream_id("loss:t") ^ i as u64);
        let t = rand::Rng::gen_range(&mut tr, 0..sched.len());
        let eps = LatentVideo::standard_normal(
            cfg.video_shape(),
            rng::mix(seed, 0x6e6f697365 ^ i as u64),
            0,
        );
        let z_t = forward_noise(&sample.clip, t, &eps, sched)?;

        let tokens = tokenize(&sample.prompt);
        let cond: Vec<Var> = (0..cfg.layers)
            .map(|l| {
                model.encoder.encode(tape, &tokens, l, &|name, layer| {
                    leaves.tokens.get(&(name.to_string(), layer)).copied()
                })
            })
            .collect::<Result<_>>()?;

        let z_flat = tape.constant(z_t.to_matrix());
        let rec = model.denoiser.forward(
            tape,
            &z_flat,
            Some(&cond),
            t,
            Some(&deltas),
            &mut NoHook,
            false,
        )?;
        let eps_const = tape.constant(eps.to_matrix());
        let mse = tape.mean_sq_diff(&rec.output, &eps_const);
        if !tape.scalar(&mse).is_finite() {
            return Err(Error::Diverged {
                step: i,
                loss: tape.scalar(&mse),
            });
        }
        rec_terms.push(mse);
    }
    let mut rec_sum = rec_terms[0];
    for term in &rec_terms[1..] {
        rec_sum = tape.add(&rec_sum, term);
    }
    let reconstruction = tape.scale(&rec_sum, 1.0 / batch.len() as f64);

    // orthogonality penalty: previous bases are constants
    let mut penalty = tape.constant(Array2::zeros((1, 1)));
    for (j, p) in prev.iter().enumerate() {
        if p.adapters.len() != cfg.layers {
            return Err(Error::shape(
                format!("previous task {j} layer count"),
                cfg.layers,
                p.adapters.len(),
            ));
        }
        for l in 0..cfg.layers {
            let pj = &p.adapters[l].down;
            if pj.dim() != learner.adapters[l].down.dim() {
                return Err(Error::shape(
                    format!("col penalty (task {j}, layer {l})"),
                    format!("{:?}", learner.adapters[l].down.dim()),
                    format!("{:?}", pj.dim()),
                ));
            }
            let prev_const = tape.constant(pj.clone());
            let prod = tape.mul(&prev_const, &leaves.down[l]);
            let tr = tape.sum_all(&prod);
            penalty = tape.add(&penalty, &tape.abs(&tr));
        }
    }

    let total = tape.add(&reconstruction, &tape.scale(&penalty, lambda));
    Ok((total, reconstruction, penalty, leaves))
}

fn extract_grads(
    tape: &TapeEngine,
    root: Var,
    leaves: &LearnerLeaves,
    learner: &TaskConceptLearner,
) -> LossGrads {
    let g = tape.backward(root);
    let zero_like = |a: &Array2<f64>| Array2::zeros(a.dim());
    let adapter_down = leaves
        .down
        .iter()
        .zip(&learner.adapters)
        .map(|(v, a)| g.get(*v).cloned().unwrap_or_else(|| zero_like(&a.down)))
        .collect();
    let adapter_up = leaves
        .up
        .iter()
        .zip(&learner.adapters)
        .map(|(v, a)| g.get(*v).cloned().unwrap_or_else(|| zero_like(&a.up)))
        .collect();
    let mut token_rows = BTreeMap::new();
    for (key, v) in &leaves.tokens {
        let d = tape.dims(v).1;
        let row = g
            .get(*v)
            .map(|m| m.row(0).to_owned())
            .unwrap_or_else(|| Array1::zeros(d));
        token_rows.insert(key.clone(), row);
    }
    LossGrads {
        adapter_down,
        adapter_up,
        token_rows,
    }
}

/// Denoising loss (no orthogonality term) with gradients.
pub fn ctvg_loss(
    model: &BaseModel,
    sched: &NoiseSchedule,
    learner: &TaskConceptLearner,
    batch: &[&TrainSample],
    seed: u64,
) -> Result<(LossBreakdown, LossGrads)> {
    col_loss(model, sched, learner, &[], batch, 0.0, seed)
}

/// Full objective: reconstruction plus `lambda` times the orthogonality
/// penalty against all previous tasks' bases. Returns loss and gradients for
/// the current learner only.
pub fn col_loss(
    model: &BaseModel,
    sched: &NoiseSchedule,
    learner: &TaskConceptLearner,
    prev: &[&TaskConceptLearner],
    batch: &[&TrainSample],
    lambda: f64,
    seed: u64,
) -> Result<(LossBreakdown, LossGrads)> {
    let tape = TapeEngine::new();
    let (total, rec, pen, leaves) =
        build_loss(&tape, model, sched, learner, prev, batch, lambda, seed)?;
    let breakdown = LossBreakdown {
        total: tape.scalar(&total),
        reconstruction: tape.scalar(&rec),
        penalty: tape.scalar(&pen),
    };
    let grads = extract_grads(&tape, total, &leaves, learner);
    Ok((breakdown, grads))
}

/// Loss value only (used by finite-difference checks).
pub fn col_loss_value(
    model: &BaseModel,
    sched: &NoiseSchedule,
    learner: &TaskConceptLearner,
    prev: &[&TaskConceptLearner],
    batch: &[&TrainSample],
    lambda: f64,
    seed: u64,
) -> Result<LossBreakdown> {
    let tape = TapeEngine::new();
    let (total, rec, pen, _) =
        build_loss(&tape, model, sched, learner, prev, batch, lambda, seed)?;
    Ok(LossBreakdown {
        total: tape.scalar(&total),
        reconstruction: tape.scalar(&rec),
        penalty: tape.scalar(&pen),
    })
}

/// Adam state for one tensor.
#[derive(Clone)]
struct AdamState {
    m: Array2<f64>,
    v: Array2<f64>,
}

struct ParamUpdater {
    optimizer: Optimizer,
    states: BTreeMap<String, AdamState>,
    step: usize,
}

impl ParamUpdater {
    fn new(optimizer: Optimizer) -> Self {
        Self {
            optimizer,
            states: BTreeMap::new(),
            step: 0,
        }
    }

    fn begin_step(&mut self) {
        self.step += 1;
    }

    fn apply(&mut self, key: &str, param: &mut Array2<f64>, grad: &Array2<f64>, lr: f64) {
        match self.optimizer {
            Optimizer::Sgd => {
                param.zip_mut_with(grad, |p, &g| *p -= lr * g);
            }
            Optimizer::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                let st = self.states.entry(key.to_string()).or_insert_with(|| AdamState {
                    m: Array2::zeros(param.dim()),
                    v: Array2::zeros(param.dim()),
                });
                let t = self.step as f64;
                let bc1 = 1.0 - B1.powf(t);
                let bc2 = 1.0 - B2.powf(t);
                for ((p, g), (m, v)) in param
                    .iter_mut()
                    .zip(grad.iter())
                    .zip(st.m.iter_mut().zip(st.v.iter_mut()))
                {
                    *m = B1 * *m + (1.0 - B1) * g;
                    *v = B2 * *v + (1.0 - B2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + EPS);
                }
            }
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy)]
pub struct TrainLogRecord {
    pub step: usize,
    pub loss: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub learner: TaskConceptLearner,
    pub log: Vec<TrainLogRecord>,
}

const DIVERGENCE_LIMIT: f64 = 1e6;

/// Train one task. Only previously learned *learners* are visible; previous
/// tasks' data is never passed in.
///
/// The default loop interleaves token and adapter updates with their own
/// learning rates and step counts; `two_phase` runs all token steps first.
pub fn train_task(
    model: &BaseModel,
    sched: &NoiseSchedule,
    prev: &[&TaskConceptLearner],
    mut learner: TaskConceptLearner,
    data: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    learner.validate(model.config())?;
    if data.is_empty() {
        return Err(Error::Config(format!(
            "task `{}` has no training samples",
            learner.task_id
        )));
    }

    let mut updater = ParamUpdater::new(cfg.optimizer);
    let mut log = Vec::new();
    let total_steps = if cfg.two_phase {
        cfg.steps_tokens + cfg.steps_adapters
    } else {
        cfg.steps_tokens.max(cfg.steps_adapters)
    };

    for step in 0..total_steps {
        let (update_tokens, update_adapters) = if cfg.two_phase {
            (step < cfg.steps_tokens, step >= cfg.steps_tokens)
        } else {
            (step < cfg.steps_tokens, step < cfg.steps_adapters)
        };

        // deterministic batch pick
        let mut br = rng::stream_rng(cfg.seed, rng::stream_id("batch") ^ step as u64);
        let batch: Vec<&TrainSample> = (0..cfg.batch_size)
            .map(|_| &data[rand::Rng::gen_range(&mut br, 0..data.len())])
            .collect();

        let step_seed = rng::mix(cfg.seed, step as u64);
        let (loss, grads) = col_loss(model, sched, &learner, prev, &batch, cfg.lambda, step_seed)?;
        if !loss.total.is_finite() || loss.total > DIVERGENCE_LIMIT {
            return Err(Error::Diverged {
                step,
                loss: loss.total,
            });
        }
        log.push(TrainLogRecord {
            step,
            loss: loss.total,
            penalty: loss.penalty,
        });

        updater.begin_step();
        if update_adapters {
            for l in 0..learner.adapters.len() {
                updater.apply(
                    &format!("down{l}"),
                    &mut learner.adapters[l].down,
                    &grads.adapter_down[l],
                    cfg.lr_adapters,
                );
                updater.apply(
                    &format!("up{l}"),
                    &mut learner.adapters[l].up,
                    &grads.adapter_up[l],
                    cfg.lr_adapters,
                );
            }
        }
        if update_tokens {
            for tok in &mut learner.tokens {
                let key = (tok.concept.clone(), tok.layer);
                if let Some(g) = grads.token_rows.get(&key) {
                    let g2 = g.clone().insert_axis(ndarray::Axis(0));
                    let mut p2 = tok.embedding.clone().insert_axis(ndarray::Axis(0));
                    updater.apply(
                        &format!("tok:{}:{}", key.0, key.1),
                        &mut p2,
                        &g2,
                        cfg.lr_tokens,
                    );
                    tok.embedding = p2.remove_axis(ndarray::Axis(0));
                }
            }
        }
    }

    Ok(TrainOutcome { learner, log })
}
