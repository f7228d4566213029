//! Low-rank concept adapters, layer-specific concept tokens, and the
//! per-task learner bundle.

use ndarray::{Array1, Array2};

use crate::backbone::{DenoiserConfig, MaterializedAdapters};
use crate::error::{Error, Result};
use crate::rng;
use crate::text::{TextEncoder, Token};

/// Which transformer block a task's adapters patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    Stb,
    Ttb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Subject,
    Motion,
}

impl TaskKind {
    /// Subjects adapt the spatial block; motions adapt the temporal block.
    pub fn placement(&self) -> Placement {
        match self {
            TaskKind::Subject => Placement::Stb,
            TaskKind::Motion => Placement::Ttb,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Subject => "subject",
            TaskKind::Motion => "motion",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "subject" => Ok(TaskKind::Subject),
            "motion" => Ok(TaskKind::Motion),
            other => Err(Error::Config(format!("unknown task kind `{other}`"))),
        }
    }
}

/// Per-layer factored weight delta `delta = down . up` with shape `r x s`.
///
/// `down` spans the task's concept subspace; `up` carries the coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    pub layer: usize,
    pub placement: Placement,
    pub down: Array2<f64>,
    pub up: Array2<f64>,
}

impl LowRankAdapter {
    /// Materialize the site delta. Always recomputed from the factors so a
    /// mutation of either factor is reflected immediately.
    pub fn delta(&self) -> Array2<f64> {
        self.down.dot(&self.up)
    }

    pub fn rank(&self) -> usize {
        self.down.ncols()
    }

    pub fn validate(&self, r: usize, s: usize) -> Result<()> {
        let b = self.rank();
        if self.down.dim() != (r, b) || self.up.dim() != (b, s) {
            return Err(Error::shape(
                format!("layer {} adapter factors", self.layer),
                format!("({r}, b) x (b, {s})"),
                format!("{:?} x {:?}", self.down.dim(), self.up.dim()),
            ));
        }
        if b > r.min(s) {
            return Err(Error::Config(format!(
                "adapter rank {b} exceeds min(r, s) = {}",
                r.min(s)
            )));
        }
        Ok(())
    }
}

/// Trainable embedding row for one (concept, layer) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerConceptToken {
    pub concept: String,
    pub layer: usize,
    pub embedding: Array1<f64>,
}

impl LayerConceptToken {
    /// User-visible token name, 1-based layer suffix: `V1_l3`.
    pub fn token_name(&self) -> String {
        layer_token_name(&self.concept, self.layer)
    }
}

pub fn layer_token_name(concept: &str, layer: usize) -> String {
    format!("{}_l{}", concept, layer + 1)
}

/// Everything learned for one customization task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskConceptLearner {
    pub task_id: String,
    pub kind: TaskKind,
    pub concepts: Vec<String>,
    pub adapters: Vec<LowRankAdapter>,
    pub tokens: Vec<LayerConceptToken>,
}

impl TaskConceptLearner {
    pub fn concept_count(&self) -> usize {
        self.concepts.len()
    }

    pub fn token(&self, concept: &str, layer: usize) -> Option<&LayerConceptToken> {
        self.tokens
            .iter()
            .find(|t| t.concept == concept && t.layer == layer)
    }

    pub fn token_mut(&mut self, concept: &str, layer: usize) -> Option<&mut LayerConceptToken> {
        self.tokens
            .iter_mut()
            .find(|t| t.concept == concept && t.layer == layer)
    }

    /// Kind/placement coherence, adapter and token counts, factor shapes.
    pub fn validate(&self, config: &DenoiserConfig) -> Result<()> {
        if self.adapters.len() != config.layers {
            return Err(Error::shape(
                format!("task `{}` adapter count", self.task_id),
                config.layers,
                self.adapters.len(),
            ));
        }
        let want = self.kind.placement();
        for (l, a) in self.adapters.iter().enumerate() {
            if a.layer != l {
                return Err(Error::Config(format!(
                    "task `{}`: adapter {l} has layer index {}",
                    self.task_id, a.layer
                )));
            }
            if a.placement != want {
                return Err(Error::Config(format!(
                    "task `{}` is {} but layer {l} adapter is placed in {:?}",
                    self.task_id,
                    self.kind.as_str(),
                    a.placement
                )));
            }
            a.validate(config.r, config.s)?;
        }
        let expect_tokens = config.layers * self.concepts.len();
        if self.tokens.len() != expect_tokens {
            return Err(Error::shape(
                format!("task `{}` token count", self.task_id),
                expect_tokens,
                self.tokens.len(),
            ));
        }
        for t in &self.tokens {
            if t.embedding.len() != config.d {
                return Err(Error::shape(
                    format!("token {}", t.token_name()),
                    config.d,
                    t.embedding.len(),
                ));
            }
            if !self.concepts.iter().any(|c| c == &t.concept) {
                return Err(Error::Config(format!(
                    "token {} does not match any declared concept",
                    t.token_name()
                )));
            }
        }
        Ok(())
    }

    /// Materialize per-layer site deltas at this task's placement.
    pub fn materialize(&self, config: &DenoiserConfig) -> MaterializedAdapters {
        let mut out = MaterializedAdapters::none(config.layers);
        for a in &self.adapters {
            let slot = match a.placement {
                Placement::Stb => &mut out.stb[a.layer],
                Placement::Ttb => &mut out.ttb[a.layer],
            };
            *slot = Some(a.delta());
        }
        out
    }
}

/// Specification of one concept inside a task: its token name and the
/// ordinary word whose frozen embedding warm-starts the token rows.
#[derive(Debug, Clone)]
pub struct ConceptSpec {
    pub name: String,
    pub init_word: Option<String>,
}

/// Fresh learner: `down` factors are small random (seeded), `up` factors are
/// zero so the materialized delta starts at exactly zero, and token rows are
/// warm-started from the init word's frozen embedding (null row otherwise).
pub fn init_task_learner(
    config: &DenoiserConfig,
    encoder: &TextEncoder,
    task_id: &str,
    kind: TaskKind,
    concepts: &[ConceptSpec],
    seed: u64,
) -> Result<TaskConceptLearner> {
    if concepts.is_empty() {
        return Err(Error::Config(format!("task `{task_id}` declares no concepts")));
    }
    for (i, c) in concepts.iter().enumerate() {
        if concepts[..i].iter().any(|p| p.name == c.name) {
            return Err(Error::DuplicateConcept(c.name.clone()));
        }
    }
    let placement = kind.placement();
    let init_std = 0.02;
    let adapters = (0..config.layers)
        .map(|l| {
            let mut r = rng::named_rng(seed, &format!("task:{task_id}:adapter:{l}"));
            LowRankAdapter {
                layer: l,
                placement,
                down: rng::normal_array2(&mut r, config.r, config.rank, init_std),
                up: Array2::zeros((config.rank, config.s)),
            }
        })
        .collect();
    let mut tokens = Vec::with_capacity(config.layers * concepts.len());
    for c in concepts {
        let base = match &c.init_word {
            Some(w) => encoder.frozen_row(w),
            None => encoder.null_row(),
        };
        for l in 0..config.layers {
            tokens.push(LayerConceptToken {
                concept: c.name.clone(),
                layer: l,
                embedding: base.clone(),
            });
        }
    }
    let learner = TaskConceptLearner {
        task_id: task_id.to_string(),
        kind,
        concepts: concepts.iter().map(|c| c.name.clone()).collect(),
        adapters,
        tokens,
    };
    learner.validate(config)?;
    Ok(learner)
}

/// Replace each registered placeholder with its layer-specific token name,
/// producing one token-string sequence per layer.
pub fn expand_prompt(
    prompt: &str,
    is_registered: &dyn Fn(&str) -> bool,
    layers: usize,
) -> Result<Vec<Vec<String>>> {
    let tokens = crate::text::tokenize(prompt);
    for t in &tokens {
        if let Token::Concept(name) = t {
            if !is_registered(name) {
                return Err(Error::UnknownPlaceholder(name.clone()));
            }
        }
    }
    Ok((0..layers)
        .map(|l| {
            tokens
                .iter()
                .map(|t| match t {
                    Token::Word(w) => w.clone(),
                    Token::Concept(name) => layer_token_name(name, l),
                })
                .collect()
        })
        .collect())
}

/// Inverse of [`expand_prompt`] for a single layer's sequence: strips layer
/// suffixes and restores placeholder brackets.
pub fn collapse_prompt(layer_seq: &[String]) -> String {
    layer_seq
        .iter()
        .map(|tok| match split_layer_suffix(tok) {
            Some((base, _)) => format!("[{base}]"),
            None => tok.clone(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn split_layer_suffix(tok: &str) -> Option<(&str, usize)> {
    let at = tok.rfind("_l")?;
    let digits = &tok[at + 2..];
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((&tok[..at], digits.parse().ok()?))
}
