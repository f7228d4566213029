//! Deterministic toy embedder shared by videos, images, and text.
//!
//! The feature vector has named slots so that matching text and pixels land
//! on the same axes: color fractions, shape scores, trajectory scores, then a
//! few raw statistics that only videos populate. All embeddings are
//! L2-normalized.

use ndarray::Array1;

use crate::video::LatentVideo;

use super::concepts::{ColorName, ShapeKind, Trajectory, BACKGROUND};

const N_COLORS: usize = 6;
const N_SHAPES: usize = 3;
// sweep, orbit, bounce; a static input leaves the block empty
const N_MOTIONS: usize = 3;
const N_STATS: usize = 6;
// raw statistics help video-video comparisons but must not drown the slots
const STATS_WEIGHT: f64 = 0.3;

pub const EMBED_DIM: usize = N_COLORS + N_SHAPES + N_MOTIONS + N_STATS;

const SHAPE_BASE: usize = N_COLORS;
const MOTION_BASE: usize = N_COLORS + N_SHAPES;
const STATS_BASE: usize = N_COLORS + N_SHAPES + N_MOTIONS;

/// Slice covering the structure-sensitive dims (shapes + motions), used by
/// the structural-alignment metric.
pub const STRUCTURE_RANGE: std::ops::Range<usize> = SHAPE_BASE..STATS_BASE;

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Cosine over the shape/motion block only.
pub fn structure_cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let sa = a.slice(ndarray::s![STRUCTURE_RANGE]).to_owned();
    let sb = b.slice(ndarray::s![STRUCTURE_RANGE]).to_owned();
    cosine(&sa, &sb)
}

fn normalize(mut v: Array1<f64>) -> Array1<f64> {
    let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v /= n;
    }
    v
}

fn bump(x: f64, center: f64, width: f64) -> f64 {
    let z = (x - center) / width;
    (-z * z).exp()
}

fn clampf(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

struct FrameStats {
    color_fractions: [f64; N_COLORS],
    fill_ratio: Option<f64>,
    fg_fraction: f64,
    centroid: Option<(f64, f64)>,
    mean_rgb: [f64; 3],
}

fn frame_stats(frame: &ndarray::ArrayView3<f64>) -> FrameStats {
    let (h, w, _) = frame.dim();
    let mut color_counts = [0usize; N_COLORS];
    let mut fg = 0usize;
    let (mut sy, mut sx) = (0.0, 0.0);
    let (mut r0, mut r1, mut c0, mut c1) = (h, 0usize, w, 0usize);
    let mut mean_rgb = [0.0; 3];
    let palette = ColorName::all();
    for i in 0..h {
        for j in 0..w {
            let px = [frame[[i, j, 0]], frame[[i, j, 1]], frame[[i, j, 2]]];
            for c in 0..3 {
                mean_rgb[c] += px[c];
            }
            let dev = px.iter().map(|v| (v - BACKGROUND).abs()).fold(0.0, f64::max);
            if dev > 0.15 {
                fg += 1;
                sy += i as f64 + 0.5;
                sx += j as f64 + 0.5;
                r0 = r0.min(i);
                r1 = r1.max(i + 1);
                c0 = c0.min(j);
                c1 = c1.max(j + 1);
                // nearest palette color
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (k, col) in palette.iter().enumerate() {
                    let p = col.rgb();
                    let d: f64 = (0..3).map(|c| (px[c] - p[c]).powi(2)).sum();
                    if d < best_d {
                        best_d = d;
                        best = k;
                    }
                }
                color_counts[best] += 1;
            }
        }
    }
    let total = (h * w) as f64;
    for c in 0..3 {
        mean_rgb[c] /= total;
    }
    let mut color_fractions = [0.0; N_COLORS];
    if fg > 0 {
        for k in 0..N_COLORS {
            color_fractions[k] = color_counts[k] as f64 / fg as f64;
        }
    }
    let fill_ratio = if fg > 0 {
        let bbox = ((r1 - r0) * (c1 - c0)) as f64;
        Some(fg as f64 / bbox.max(1.0))
    } else {
        None
    };
    let centroid = if fg > 0 {
        Some((
            sx / fg as f64 / w as f64,
            sy / fg as f64 / h as f64,
        ))
    } else {
        None
    };
    FrameStats {
        color_fractions,
        fill_ratio,
        fg_fraction: fg as f64 / total,
        centroid,
        mean_rgb,
    }
}

fn motion_scores(centers: &[(f64, f64)]) -> [f64; N_MOTIONS] {
    if centers.len() < 2 {
        return [0.0; N_MOTIONS];
    }
    let xs: Vec<f64> = centers.iter().map(|c| c.0).collect();
    let ys: Vec<f64> = centers.iter().map(|c| c.1).collect();
    let range = |v: &[f64]| {
        v.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - v.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    let rx = range(&xs);
    let ry = range(&ys);

    let increasing = xs.windows(2).filter(|p| p[1] > p[0]).count() as f64
        / (xs.len() - 1) as f64;
    let sweep = increasing * clampf(rx / 0.4) * (1.0 - clampf(ry / 0.2));

    // orbit: both axes move and the radius from the path centroid is steady
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let radii: Vec<f64> = centers
        .iter()
        .map(|(x, y)| ((x - mx).powi(2) + (y - my).powi(2)).sqrt())
        .collect();
    let mean_r = radii.iter().sum::<f64>() / radii.len() as f64;
    let var_r = radii.iter().map(|r| (r - mean_r).powi(2)).sum::<f64>() / radii.len() as f64;
    let steadiness = if mean_r > 1e-6 {
        clampf(1.0 - var_r.sqrt() / mean_r)
    } else {
        0.0
    };
    let orbit = clampf(rx / 0.25) * clampf(ry / 0.25) * steadiness;

    // bounce: vertical travel with at least one direction reversal
    let mut reversals = 0;
    let mut last_dir = 0.0f64;
    for p in ys.windows(2) {
        let d = p[1] - p[0];
        if d.abs() > 1e-9 {
            if last_dir != 0.0 && d.signum() != last_dir {
                reversals += 1;
            }
            last_dir = d.signum();
        }
    }
    let bounce = clampf(ry / 0.3)
        * (1.0 - clampf(rx / 0.2))
        * if reversals >= 1 { 1.0 } else { 0.0 };

    [sweep, orbit, bounce]
}

/// Embed a latent video (an image is a single-frame video).
pub fn embed_video(video: &LatentVideo) -> Array1<f64> {
    let (n_v, _, _, _) = video.shape();
    let mut colors = [0.0; N_COLORS];
    let mut fill_acc = 0.0;
    let mut fill_frames = 0usize;
    let mut fg_acc = 0.0;
    let mut mean_rgb = [0.0; 3];
    let mut centers = Vec::new();
    for f in 0..n_v {
        let frame3 = video.data().index_axis(ndarray::Axis(0), f);
        let st = frame_stats(&frame3);
        for k in 0..N_COLORS {
            colors[k] += st.color_fractions[k];
        }
        if let Some(fr) = st.fill_ratio {
            fill_acc += fr;
            fill_frames += 1;
        }
        fg_acc += st.fg_fraction;
        for c in 0..3 {
            mean_rgb[c] += st.mean_rgb[c];
        }
        if let Some(c) = st.centroid {
            centers.push(c);
        }
    }
    let nf = n_v as f64;
    for k in 0..N_COLORS {
        colors[k] /= nf;
    }
    let fg_fraction = fg_acc / nf;
    for c in 0..3 {
        mean_rgb[c] /= nf;
    }

    // shape scores from the mean fill ratio, damped when the foreground is
    // scattered over most of the frame (noise-like inputs)
    let coherence = clampf(1.0 - (fg_fraction - 0.35).max(0.0) / 0.4);
    let mut shapes = [0.0; N_SHAPES];
    if fill_frames > 0 {
        let fill = fill_acc / fill_frames as f64;
        shapes[0] = bump(fill, std::f64::consts::FRAC_PI_4, 0.10) * coherence; // circle
        shapes[1] = bump(fill, 1.0, 0.10) * coherence; // square
        shapes[2] = bump(fill, 0.5, 0.10) * coherence; // triangle
    }

    let motions = motion_scores(&centers);

    let mut v = Array1::zeros(EMBED_DIM);
    for k in 0..N_COLORS {
        v[k] = colors[k];
    }
    for k in 0..N_SHAPES {
        v[SHAPE_BASE + k] = shapes[k];
    }
    for k in 0..N_MOTIONS {
        v[MOTION_BASE + k] = motions[k];
    }
    let spread = if centers.len() > 1 {
        let rx = centers.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max)
            - centers.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
        let ry = centers.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max)
            - centers.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
        rx + ry
    } else {
        0.0
    };
    v[STATS_BASE] = mean_rgb[0] * STATS_WEIGHT;
    v[STATS_BASE + 1] = mean_rgb[1] * STATS_WEIGHT;
    v[STATS_BASE + 2] = mean_rgb[2] * STATS_WEIGHT;
    v[STATS_BASE + 3] = fg_fraction * STATS_WEIGHT;
    v[STATS_BASE + 4] = coherence * 0.25 * STATS_WEIGHT;
    v[STATS_BASE + 5] = spread * 0.5 * STATS_WEIGHT;
    normalize(v)
}

/// Embed free text: descriptor words activate their slots; any other word
/// hashes into the stats block with a small weight so distinct prompts stay
/// distinct.
pub fn embed_text(text: &str) -> Array1<f64> {
    let mut v = Array1::zeros(EMBED_DIM);
    for raw in text.split_whitespace() {
        let word = raw
            .trim_matches(|c| c == '[' || c == ']')
            .to_lowercase();
        let mut known = false;
        for (k, col) in ColorName::all().iter().enumerate() {
            if word == col.word() {
                v[k] += 1.0;
                known = true;
            }
        }
        for (k, sh) in [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle]
            .iter()
            .enumerate()
        {
            if word == sh.word() {
                v[SHAPE_BASE + k] += 1.0;
                known = true;
            }
        }
        for (k, tr) in [Trajectory::Sweep, Trajectory::Orbit, Trajectory::Bounce]
            .iter()
            .enumerate()
        {
            let w = tr.word();
            if word == w || word == format!("{w}ing") {
                v[MOTION_BASE + k] += 1.0;
                known = true;
            }
        }
        if !known {
            let slot = (crate::rng::stream_id(&word) % N_STATS as u64) as usize;
            v[STATS_BASE + slot] += 0.05;
        }
    }
    normalize(v)
}
