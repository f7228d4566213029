//! Shape/color/trajectory concepts and their deterministic renderer.

use ndarray::{Array3, Array4};

use crate::adapters::TaskKind;
use crate::error::{Error, Result};
use crate::rng;
use crate::trainer::TrainSample;
use crate::video::LatentVideo;

pub const BACKGROUND: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub fn word(&self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "circle" => Ok(ShapeKind::Circle),
            "square" => Ok(ShapeKind::Square),
            "triangle" => Ok(ShapeKind::Triangle),
            other => Err(Error::Config(format!("unknown shape `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorName {
    Red,
    Crimson,
    Blue,
    Green,
    Yellow,
    White,
}

impl ColorName {
    pub fn rgb(&self) -> [f64; 3] {
        match self {
            ColorName::Red => [0.90, 0.10, 0.10],
            ColorName::Crimson => [0.86, 0.08, 0.24],
            ColorName::Blue => [0.10, 0.20, 0.90],
            ColorName::Green => [0.10, 0.80, 0.20],
            ColorName::Yellow => [0.90, 0.85, 0.10],
            ColorName::White => [0.95, 0.95, 0.95],
        }
    }

    pub fn word(&self) -> &'static str {
        match self {
            ColorName::Red => "red",
            ColorName::Crimson => "crimson",
            ColorName::Blue => "blue",
            ColorName::Green => "green",
            ColorName::Yellow => "yellow",
            ColorName::White => "white",
        }
    }

    pub fn all() -> [ColorName; 6] {
        [
            ColorName::Red,
            ColorName::Crimson,
            ColorName::Blue,
            ColorName::Green,
            ColorName::Yellow,
            ColorName::White,
        ]
    }

    pub fn parse(s: &str) -> Result<Self> {
        ColorName::all()
            .into_iter()
            .find(|c| c.word() == s)
            .ok_or_else(|| Error::Config(format!("unknown color `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trajectory {
    Still,
    Sweep,
    Orbit,
    Bounce,
}

impl Trajectory {
    pub fn word(&self) -> &'static str {
        match self {
            Trajectory::Still => "still",
            Trajectory::Sweep => "sweep",
            Trajectory::Orbit => "orbit",
            Trajectory::Bounce => "bounce",
        }
    }

    pub fn all() -> [Trajectory; 4] {
        [
            Trajectory::Still,
            Trajectory::Sweep,
            Trajectory::Orbit,
            Trajectory::Bounce,
        ]
    }

    pub fn parse(s: &str) -> Result<Self> {
        Trajectory::all()
            .into_iter()
            .find(|t| t.word() == s)
            .ok_or_else(|| Error::Config(format!("unknown trajectory `{s}`")))
    }

    /// Normalized center of the moving shape at frame `f` of `n_v`.
    pub fn center(&self, f: usize, n_v: usize) -> (f64, f64) {
        let phase = if n_v > 1 {
            f as f64 / (n_v - 1) as f64
        } else {
            0.0
        };
        match self {
            Trajectory::Still => (0.5, 0.5),
            Trajectory::Sweep => (0.2 + 0.6 * phase, 0.5),
            Trajectory::Orbit => {
                let ang = 2.0 * std::f64::consts::PI * f as f64 / n_v.max(1) as f64;
                (0.5 + 0.25 * ang.cos(), 0.5 + 0.25 * ang.sin())
            }
            Trajectory::Bounce => {
                // triangle wave in y
                let t = 2.0 * phase;
                let y = if t <= 1.0 { 0.28 + 0.44 * t } else { 0.72 - 0.44 * (t - 1.0) };
                (0.5, y)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConceptAppearance {
    Subject { shape: ShapeKind, color: ColorName },
    Motion { trajectory: Trajectory },
}

/// One personalizable concept bound to a prompt token.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyConcept {
    pub token: String,
    pub appearance: ConceptAppearance,
}

impl ToyConcept {
    pub fn subject(token: &str, shape: ShapeKind, color: ColorName) -> Self {
        Self {
            token: token.into(),
            appearance: ConceptAppearance::Subject { shape, color },
        }
    }

    pub fn motion(token: &str, trajectory: Trajectory) -> Self {
        Self {
            token: token.into(),
            appearance: ConceptAppearance::Motion { trajectory },
        }
    }

    pub fn kind(&self) -> TaskKind {
        match self.appearance {
            ConceptAppearance::Subject { .. } => TaskKind::Subject,
            ConceptAppearance::Motion { .. } => TaskKind::Motion,
        }
    }

    /// Ordinary words describing the concept, used for token warm-starts and
    /// text-side metric embeddings.
    pub fn descriptor_words(&self) -> Vec<&'static str> {
        match self.appearance {
            ConceptAppearance::Subject { shape, color } => vec![color.word(), shape.word()],
            ConceptAppearance::Motion { trajectory } => vec![trajectory.word()],
        }
    }

    pub fn init_word(&self) -> &'static str {
        match self.appearance {
            ConceptAppearance::Subject { shape, .. } => shape.word(),
            ConceptAppearance::Motion { trajectory } => trajectory.word(),
        }
    }
}

/// Paint one shape over the background.
pub fn render_frame(
    shape: ShapeKind,
    color: [f64; 3],
    cx: f64,
    cy: f64,
    radius: f64,
    h: usize,
    w: usize,
) -> Array3<f64> {
    let mut img = Array3::from_elem((h, w, 3), BACKGROUND);
    for i in 0..h {
        let py = (i as f64 + 0.5) / h as f64;
        for j in 0..w {
            let px = (j as f64 + 0.5) / w as f64;
            let dx = px - cx;
            let dy = py - cy;
            let inside = match shape {
                ShapeKind::Circle => dx * dx + dy * dy <= radius * radius,
                ShapeKind::Square => dx.abs() <= radius && dy.abs() <= radius,
                ShapeKind::Triangle => {
                    // upward triangle: widest at the base
                    let rel = (dy + radius) / (2.0 * radius);
                    dy.abs() <= radius && rel >= 0.0 && dx.abs() <= radius * rel
                }
            };
            if inside {
                for c in 0..3 {
                    img[[i, j, c]] = color[c];
                }
            }
        }
    }
    img
}

fn broadcast_frames(frame: &Array3<f64>, n_v: usize) -> Array4<f64> {
    let (h, w, c) = frame.dim();
    let mut out = Array4::zeros((n_v, h, w, c));
    for f in 0..n_v {
        out.index_axis_mut(ndarray::Axis(0), f).assign(frame);
    }
    out
}

/// Render a motion clip: a neutral white shape following the trajectory.
pub fn render_motion_clip(
    trajectory: Trajectory,
    n_v: usize,
    h: usize,
    w: usize,
    radius: f64,
) -> Array4<f64> {
    let mut out = Array4::zeros((n_v, h, w, 3));
    for f in 0..n_v {
        let (cx, cy) = trajectory.center(f, n_v);
        let frame = render_frame(ShapeKind::Circle, ColorName::White.rgb(), cx, cy, radius, h, w);
        out.index_axis_mut(ndarray::Axis(0), f).assign(&frame);
    }
    out
}

const SUBJECT_PROMPTS: [&str; 4] = [
    "a photo of [{}]",
    "a [{}] in the scene",
    "a small [{}]",
    "a [{}] on a dark background",
];

const MOTION_PROMPTS: [&str; 1] = ["a shape [{}] in the scene"];

fn fill(template: &str, token: &str) -> String {
    template.replace("{}", token)
}

/// Training data for one concept: four varied renders for subjects, a single
/// trajectory clip for motions. Deterministic in (concept, seed).
pub fn generate_task_data(
    concept: &ToyConcept,
    dims: (usize, usize, usize, usize),
    seed: u64,
) -> Result<Vec<TrainSample>> {
    let (n_v, h, w, _c) = dims;
    match concept.appearance {
        ConceptAppearance::Subject { shape, color } => {
            let mut r = rng::named_rng(seed, &format!("task_data:{}", concept.token));
            let mut samples = Vec::with_capacity(SUBJECT_PROMPTS.len());
            for template in SUBJECT_PROMPTS {
                let cx = 0.38 + 0.24 * rand::Rng::gen_range(&mut r, 0.0f64..1.0);
                let cy = 0.38 + 0.24 * rand::Rng::gen_range(&mut r, 0.0f64..1.0);
                let radius = 0.20 + 0.10 * rand::Rng::gen_range(&mut r, 0.0f64..1.0);
                let frame = render_frame(shape, color.rgb(), cx, cy, radius, h, w);
                samples.push(TrainSample {
                    clip: LatentVideo::from_array(broadcast_frames(&frame, n_v))?,
                    prompt: fill(template, &concept.token),
                });
            }
            Ok(samples)
        }
        ConceptAppearance::Motion { trajectory } => Ok(vec![TrainSample {
            clip: LatentVideo::from_array(render_motion_clip(trajectory, n_v, h, w, 0.16))?,
            prompt: fill(MOTION_PROMPTS[0], &concept.token),
        }]),
    }
}

/// Canonical reference renders used as the visual-alignment ground truth.
pub fn render_reference_clips(
    concept: &ToyConcept,
    dims: (usize, usize, usize, usize),
) -> Result<Vec<LatentVideo>> {
    let (n_v, h, w, _c) = dims;
    match concept.appearance {
        ConceptAppearance::Subject { shape, color } => {
            let a = render_frame(shape, color.rgb(), 0.5, 0.5, 0.27, h, w);
            let b = render_frame(shape, color.rgb(), 0.42, 0.55, 0.22, h, w);
            Ok(vec![
                LatentVideo::from_array(broadcast_frames(&a, n_v))?,
                LatentVideo::from_array(broadcast_frames(&b, n_v))?,
            ])
        }
        ConceptAppearance::Motion { trajectory } => Ok(vec![LatentVideo::from_array(
            render_motion_clip(trajectory, n_v, h, w, 0.16),
        )?]),
    }
}

/// Evaluation prompt set for a concept.
pub fn eval_prompts(concept: &ToyConcept, count: usize) -> Vec<String> {
    let templates: &[&str] = match concept.appearance {
        ConceptAppearance::Subject { .. } => &SUBJECT_PROMPTS,
        ConceptAppearance::Motion { .. } => &MOTION_PROMPTS,
    };
    (0..count)
        .map(|i| fill(templates[i % templates.len()], &concept.token))
        .collect()
}

/// Foreground mask and centroid of one frame (used by tests and the
/// embedder): a pixel is foreground when it deviates from the background.
pub fn foreground_centroid(frame: &ndarray::ArrayView3<f64>) -> Option<(f64, f64, usize)> {
    let (h, w, _) = frame.dim();
    let mut count = 0usize;
    let (mut sy, mut sx) = (0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            let dev = (0..3)
                .map(|c| (frame[[i, j, c]] - BACKGROUND).abs())
                .fold(0.0, f64::max);
            if dev > 0.15 {
                count += 1;
                sy += (i as f64 + 0.5) / h as f64;
                sx += (j as f64 + 0.5) / w as f64;
            }
        }
    }
    if count == 0 {
        None
    } else {
        Some((sx / count as f64, sy / count as f64, count))
    }
}
