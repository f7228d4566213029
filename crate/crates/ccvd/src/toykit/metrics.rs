//! Alignment metrics, evaluation sweeps, and forgetting curves.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapters::TaskConceptLearner;
use crate::aggregator::{generate, KindHint};
use crate::backbone::BaseModel;
use crate::error::{Error, Result};
use crate::rng;
use crate::sampler::GuidanceConfig;
use crate::schedule::NoiseSchedule;
use crate::video::LatentVideo;

use super::concepts::{eval_prompts, render_reference_clips, ToyConcept};
use super::embed::{cosine, embed_text, embed_video, structure_cosine};

/// Sweep settings. The default keeps the reference protocol's shape
/// (prompts x videos per prompt) at desk scale: 3 x 2.
#[derive(Debug, Clone, Copy)]
pub struct EvalSettings {
    pub prompts_per_concept: usize,
    pub videos_per_prompt: usize,
    pub guidance: GuidanceConfig,
    pub base_seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            prompts_per_concept: 3,
            videos_per_prompt: 2,
            guidance: GuidanceConfig::new(3.0, 10),
            base_seed: 7,
        }
    }
}

/// Alignment scores for one concept (cosines in [-1, 1]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConceptScores {
    /// Generated video vs prompt text (CLIPT analogue).
    pub text_alignment: f64,
    /// Generated video vs reference renders (CLIPI analogue).
    pub visual_alignment: f64,
    /// Structure-only video alignment (DINOI analogue).
    pub structure_alignment: f64,
    /// Mean adjacent-frame embedding cosine (TCons analogue).
    pub temporal_consistency: f64,
}

impl ConceptScores {
    fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            text_alignment: f(self.text_alignment, other.text_alignment),
            visual_alignment: f(self.visual_alignment, other.visual_alignment),
            structure_alignment: f(self.structure_alignment, other.structure_alignment),
            temporal_consistency: f(self.temporal_consistency, other.temporal_consistency),
        }
    }

    fn scale(&self, k: f64) -> Self {
        self.zip(self, |a, _| a * k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalFailure {
    pub concept: String,
    pub prompt: String,
    pub seed: u64,
    pub message: String,
}

/// Scores per concept plus any per-(prompt, seed) generation failures.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_concept: BTreeMap<String, ConceptScores>,
    pub failures: Vec<EvalFailure>,
}

impl MetricReport {
    /// Line-delimited records: one JSON object per concept, then one per
    /// failure.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (concept, scores) in &self.per_concept {
            let rec = serde_json::json!({ "concept": concept, "scores": scores });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        for f in &self.failures {
            let rec = serde_json::json!({ "failure": f });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut report = MetricReport::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let v: serde_json::Value =
                serde_json::from_str(line).map_err(|e| Error::Parse {
                    path: format!("jsonl line {}", i + 1),
                    reason: e.to_string(),
                })?;
            if let Some(c) = v.get("concept") {
                let name = c.as_str().unwrap_or_default().to_string();
                let scores: ConceptScores = serde_json::from_value(
                    v.get("scores").cloned().unwrap_or_default(),
                )
                .map_err(|e| Error::Parse {
                    path: format!("jsonl line {}", i + 1),
                    reason: e.to_string(),
                })?;
                report.per_concept.insert(name, scores);
            } else if let Some(f) = v.get("failure") {
                let f: EvalFailure =
                    serde_json::from_value(f.clone()).map_err(|e| Error::Parse {
                        path: format!("jsonl line {}", i + 1),
                        reason: e.to_string(),
                    })?;
                report.failures.push(f);
            }
        }
        Ok(report)
    }

    pub fn summary_table(&self) -> String {
        let mut out = String::from(
            "concept          text    visual  struct  tcons\n",
        );
        for (c, s) in &self.per_concept {
            out.push_str(&format!(
                "{:<16} {:>6.3}  {:>6.3}  {:>6.3}  {:>6.3}\n",
                c,
                s.text_alignment,
                s.visual_alignment,
                s.structure_alignment,
                s.temporal_consistency
            ));
        }
        if !self.failures.is_empty() {
            out.push_str(&format!("failures: {}\n", self.failures.len()));
        }
        out
    }
}

/// Resolve concept placeholders to descriptor words for the text-side
/// embedding ("a photo of [V1]" -> "a photo of red circle").
fn resolve_prompt_text(prompt: &str, concepts: &[&ToyConcept]) -> String {
    let mut out = prompt.to_string();
    for c in concepts {
        out = out.replace(
            &format!("[{}]", c.token),
            &c.descriptor_words().join(" "),
        );
    }
    out
}

fn temporal_consistency(video: &LatentVideo) -> f64 {
    let (n_v, h, w, c) = video.shape();
    if n_v < 2 {
        return 1.0;
    }
    let frames: Vec<_> = (0..n_v)
        .map(|f| {
            let fr = video
                .data()
                .index_axis(ndarray::Axis(0), f)
                .to_owned()
                .insert_axis(ndarray::Axis(0));
            embed_video(&LatentVideo::from_array_unchecked(
                fr.into_shape_with_order((1, h, w, c)).expect("frame shape"),
            ))
        })
        .collect();
    let mut acc = 0.0;
    for p in frames.windows(2) {
        acc += cosine(&p[0], &p[1]);
    }
    acc / (n_v - 1) as f64
}

/// Evaluate a generation strategy over the given concepts. Failures are
/// recorded per (prompt, seed) without aborting the sweep.
pub fn evaluate_with(
    gen: &mut dyn FnMut(&str, u64) -> Result<LatentVideo>,
    concepts: &[&ToyConcept],
    dims: (usize, usize, usize, usize),
    settings: &EvalSettings,
) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for concept in concepts {
        let refs: Vec<_> = render_reference_clips(concept, dims)?
            .iter()
            .map(embed_video)
            .collect();
        let prompts = eval_prompts(concept, settings.prompts_per_concept);
        let mut scores = Vec::new();
        for (pi, prompt) in prompts.iter().enumerate() {
            let text = embed_text(&resolve_prompt_text(prompt, &[concept]));
            for vi in 0..settings.videos_per_prompt {
                let seed = rng::mix(settings.base_seed, (pi * 1000 + vi) as u64);
                match gen(prompt, seed) {
                    Ok(video) => {
                        let v = embed_video(&video);
                        // best match over the reference set, so a perfect
                        // render of any reference scores 1
                        let visual = refs
                            .iter()
                            .map(|r| cosine(&v, r))
                            .fold(f64::NEG_INFINITY, f64::max);
                        let structure = refs
                            .iter()
                            .map(|r| structure_cosine(&v, r))
                            .fold(f64::NEG_INFINITY, f64::max);
                        scores.push(ConceptScores {
                            text_alignment: cosine(&v, &text),
                            visual_alignment: visual,
                            structure_alignment: structure,
                            temporal_consistency: temporal_consistency(&video),
                        });
                    }
                    Err(e) => report.failures.push(EvalFailure {
                        concept: concept.token.clone(),
                        prompt: prompt.clone(),
                        seed,
                        message: e.to_string(),
                    }),
                }
            }
        }
        if !scores.is_empty() {
            let n = scores.len() as f64;
            let sum = scores
                .iter()
                .skip(1)
                .fold(scores[0], |acc, s| acc.zip(s, |a, b| a + b));
            report
                .per_concept
                .insert(concept.token.clone(), sum.scale(1.0 / n));
        }
    }
    Ok(report)
}

/// Evaluate the stored learners through the aggregation path.
pub fn evaluate(
    model: &BaseModel,
    sched: &NoiseSchedule,
    learners: &[&TaskConceptLearner],
    concepts: &[&ToyConcept],
    settings: &EvalSettings,
) -> Result<MetricReport> {
    if learners.is_empty() {
        return Err(Error::EmptyRegistry("evaluate needs trained tasks".into()));
    }
    let dims = model.config().video_shape();
    let guidance = settings.guidance;
    evaluate_with(
        &mut |prompt, seed| {
            generate(model, sched, learners, prompt, KindHint::Auto, &guidance, seed)
                .map(|(_, v)| v)
        },
        concepts,
        dims,
        settings,
    )
}

/// Forgetting deltas: score at the checkpoint where a concept was learned
/// minus the score at the final checkpoint. Signs are reported as-is.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub per_concept: BTreeMap<String, ConceptScores>,
    pub mean: ConceptScores,
}

pub fn forgetting_curve(
    history: &[MetricReport],
    learned_at: &BTreeMap<String, usize>,
) -> Result<ForgettingReport> {
    let last = history.last().ok_or_else(|| {
        Error::Config("forgetting_curve needs at least one checkpoint".into())
    })?;
    let mut per_concept = BTreeMap::new();
    for (concept, &at) in learned_at {
        let at_report = history.get(at).ok_or_else(|| {
            Error::Config(format!(
                "missing checkpoint {at} for concept `{concept}` (history has {})",
                history.len()
            ))
        })?;
        let start = at_report.per_concept.get(concept).ok_or_else(|| {
            Error::Config(format!(
                "checkpoint {at} has no evaluation for concept `{concept}`"
            ))
        })?;
        let end = last.per_concept.get(concept).ok_or_else(|| {
            Error::Config(format!(
                "final checkpoint has no evaluation for concept `{concept}`"
            ))
        })?;
        per_concept.insert(concept.clone(), start.zip(end, |a, b| a - b));
    }
    let n = per_concept.len().max(1) as f64;
    let zero = ConceptScores {
        text_alignment: 0.0,
        visual_alignment: 0.0,
        structure_alignment: 0.0,
        temporal_consistency: 0.0,
    };
    let mean = per_concept
        .values()
        .fold(zero, |acc, s| acc.zip(s, |a, b| a + b))
        .scale(1.0 / n);
    Ok(ForgettingReport { per_concept, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toykit::concepts::{ColorName, ShapeKind};

    fn scores(v: f64) -> ConceptScores {
        ConceptScores {
            text_alignment: v,
            visual_alignment: v,
            structure_alignment: v,
            temporal_consistency: v,
        }
    }

    #[test]
    fn reference_self_evaluation_scores_one() {
        let concept = ToyConcept::subject("V1", ShapeKind::Circle, ColorName::Red);
        let dims = (4, 12, 12, 3);
        let refs = render_reference_clips(&concept, dims).unwrap();
        let mut i = 0usize;
        let report = evaluate_with(
            &mut |_, _| {
                let v = refs[i % refs.len()].clone();
                i += 1;
                Ok(v)
            },
            &[&concept],
            dims,
            &EvalSettings {
                prompts_per_concept: 2,
                videos_per_prompt: 2,
                ..EvalSettings::default()
            },
        )
        .unwrap();
        let s = &report.per_concept["V1"];
        assert!(s.visual_alignment > 0.995, "{s:?}");
        assert!(s.temporal_consistency > 0.999);
        assert!(report.failures.is_empty());
    }

    /// Monte-Carlo baseline oracle: noise alignment is bounded well below the
    /// self-alignment of references.
    #[test]
    fn noise_videos_score_low() {
        let concept = ToyConcept::subject("V1", ShapeKind::Circle, ColorName::Red);
        let dims = (4, 12, 12, 3);
        let reference = embed_video(&render_reference_clips(&concept, dims).unwrap()[0]);
        let mut worst = f64::NEG_INFINITY;
        for s in 0..100u64 {
            let noise = LatentVideo::standard_normal(dims, s, 0)
                .zip_with(&LatentVideo::zeros(dims), |a, _| a.clamp(0.0, 1.0))
                .unwrap();
            worst = worst.max(cosine(&embed_video(&noise), &reference));
        }
        assert!(
            worst < 0.6,
            "noise should stay away from the reference, worst {worst:.3}"
        );
    }

    #[test]
    fn failures_are_recorded_not_fatal() {
        let concept = ToyConcept::subject("V1", ShapeKind::Circle, ColorName::Red);
        let dims = (2, 8, 8, 3);
        let mut calls = 0usize;
        let report = evaluate_with(
            &mut |_, _| {
                calls += 1;
                if calls % 2 == 0 {
                    Err(Error::Config("synthetic failure".into()))
                } else {
                    Ok(LatentVideo::zeros(dims))
                }
            },
            &[&concept],
            dims,
            &EvalSettings {
                prompts_per_concept: 2,
                videos_per_prompt: 2,
                ..EvalSettings::default()
            },
        )
        .unwrap();
        assert_eq!(report.failures.len(), 2);
        assert!(report.per_concept.contains_key("V1"));
    }

    #[test]
    fn report_round_trips_through_jsonl() {
        let mut report = MetricReport::default();
        report.per_concept.insert("V1".into(), scores(0.75));
        report.per_concept.insert("M1".into(), scores(-0.125));
        report.failures.push(EvalFailure {
            concept: "V1".into(),
            prompt: "a [V1]".into(),
            seed: 42,
            message: "boom".into(),
        });
        let text = report.to_jsonl();
        let back = MetricReport::from_jsonl(&text).unwrap();
        assert_eq!(report, back);
    }

    #[test]
    fn forgetting_single_checkpoint_is_zero() {
        let mut r = MetricReport::default();
        r.per_concept.insert("V1".into(), scores(0.8));
        let mut learned = BTreeMap::new();
        learned.insert("V1".to_string(), 0usize);
        let f = forgetting_curve(&[r], &learned).unwrap();
        assert_eq!(f.per_concept["V1"], scores(0.0));
    }

    #[test]
    fn forgetting_constant_scores_is_zero() {
        let mut r = MetricReport::default();
        r.per_concept.insert("V1".into(), scores(0.8));
        let history = vec![r.clone(), r.clone(), r];
        let mut learned = BTreeMap::new();
        learned.insert("V1".to_string(), 0usize);
        let f = forgetting_curve(&history, &learned).unwrap();
        assert_eq!(f.per_concept["V1"], scores(0.0));
    }

    #[test]
    fn forgetting_drop_is_positive_delta() {
        let mut early = MetricReport::default();
        early.per_concept.insert("V1".into(), scores(0.8));
        let mut late = MetricReport::default();
        late.per_concept.insert("V1".into(), scores(0.6));
        let mut learned = BTreeMap::new();
        learned.insert("V1".to_string(), 0usize);
        let f = forgetting_curve(&[early, late], &learned).unwrap();
        assert!((f.per_concept["V1"].visual_alignment - 0.2).abs() < 1e-12);
        assert!((f.mean.visual_alignment - 0.2).abs() < 1e-12);
    }

    #[test]
    fn forgetting_names_missing_checkpoint() {
        let mut learned = BTreeMap::new();
        learned.insert("V1".to_string(), 3usize);
        let err = forgetting_curve(&[MetricReport::default()], &learned).unwrap_err();
        assert!(err.to_string().contains("checkpoint 3"));
    }
}
