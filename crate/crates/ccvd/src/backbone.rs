//! Toy layered video denoiser.
//!
//! Each layer runs a spatial transformer block (frame-local self-attention
//! followed by cross-attention to that layer's text embedding) and then a
//! temporal transformer block (attention across frames at each spatial
//! position). The cross-attention output projection is the subject-adapter
//! site; the temporal output projection is the motion-adapter site.
//!
//! The temporal block applies only the *mixing* part of attention,
//! `(A - I) V`, so a single-frame video passes through it unchanged and the
//! block carries exclusively inter-frame information.

use ndarray::{Array2, Array4};
use sha2::{Digest, Sha256};

use crate::engine::{EagerEngine, Engine};
use crate::error::{Error, Result};
use crate::rng;
use crate::text::TextEncoder;
use crate::video::LatentVideo;

/// Denoiser hyperparameters. `r` and `s` are the adapter-site dimensions;
/// both sites are `d x d` output projections, so `r == s == d` is required.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub d: usize,
    pub r: usize,
    pub s: usize,
    pub rank: usize,
    pub heads: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub max_tokens: usize,
    pub seed: u64,
}

impl DenoiserConfig {
    /// Default desk-scale model: 16x16 latents, 8 frames.
    pub fn toy() -> Self {
        Self {
            layers: 2,
            d: 16,
            r: 16,
            s: 16,
            rank: 4,
            heads: 2,
            frames: 8,
            height: 16,
            width: 16,
            channels: 3,
            max_tokens: 12,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = |m: String| Err(Error::Config(m));
        if self.layers < 2 {
            return e(format!("layers must be >= 2, got {}", self.layers));
        }
        if self.d < 4 || self.r < 4 || self.s < 4 {
            return e(format!(
                "r, s, d must be >= 4, got r={} s={} d={}",
                self.r, self.s, self.d
            ));
        }
        if self.r != self.d || self.s != self.d {
            return e(format!(
                "adapter sites are d x d output projections; need r == s == d, got r={} s={} d={}",
                self.r, self.s, self.d
            ));
        }
        if self.rank == 0 || self.rank > self.r.min(self.s) {
            return e(format!(
                "rank must satisfy 1 <= b <= min(r, s), got {}",
                self.rank
            ));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return e(format!(
                "heads must divide d, got heads={} d={}",
                self.heads, self.d
            ));
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return e("frames, height, width, channels must be positive".into());
        }
        if self.max_tokens == 0 {
            return e("max_tokens must be positive".into());
        }
        Ok(())
    }

    pub fn video_shape(&self) -> (usize, usize, usize, usize) {
        (self.frames, self.height, self.width, self.channels)
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }
}

/// Frozen weights of one denoiser layer.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub sa_q: Array2<f64>,
    pub sa_k: Array2<f64>,
    pub sa_v: Array2<f64>,
    pub sa_o: Array2<f64>,
    pub ca_q: Array2<f64>,
    pub ca_k: Array2<f64>,
    pub ca_v: Array2<f64>,
    pub ca_o: Array2<f64>,
    pub ta_q: Array2<f64>,
    pub ta_k: Array2<f64>,
    pub ta_v: Array2<f64>,
    pub ta_o: Array2<f64>,
}

/// Frozen base-model parameters, reproducible from (config, seed).
#[derive(Debug, Clone)]
pub struct BaseWeights {
    pub input_proj: Array2<f64>,
    pub output_proj: Array2<f64>,
    pub layers: Vec<LayerWeights>,
}

impl BaseWeights {
    pub fn init(config: &DenoiserConfig) -> Self {
        let d = config.d;
        let c = config.channels;
        let proj_std = 1.0 / (d as f64).sqrt();
        let out_std = 0.5 / (d as f64).sqrt();
        let mat = |name: String, rows: usize, cols: usize, std: f64| {
            rng::normal_array2(&mut rng::named_rng(config.seed, &name), rows, cols, std)
        };
        let layers = (0..config.layers)
            .map(|l| LayerWeights {
                sa_q: mat(format!("l{l}.sa_q"), d, d, proj_std),
                sa_k: mat(format!("l{l}.sa_k"), d, d, proj_std),
                sa_v: mat(format!("l{l}.sa_v"), d, d, proj_std),
                sa_o: mat(format!("l{l}.sa_o"), d, d, out_std),
                ca_q: mat(format!("l{l}.ca_q"), d, d, proj_std),
                ca_k: mat(format!("l{l}.ca_k"), d, d, proj_std),
                ca_v: mat(format!("l{l}.ca_v"), d, d, proj_std),
                ca_o: mat(format!("l{l}.ca_o"), d, d, out_std),
                ta_q: mat(format!("l{l}.ta_q"), d, d, proj_std),
                ta_k: mat(format!("l{l}.ta_k"), d, d, proj_std),
                ta_v: mat(format!("l{l}.ta_v"), d, d, proj_std),
                ta_o: mat(format!("l{l}.ta_o"), d, d, out_std),
            })
            .collect();
        Self {
            input_proj: mat("input_proj".into(), c, d, 1.0 / (c as f64).sqrt()),
            output_proj: mat("output_proj".into(), d, c, out_std),
            layers,
        }
    }

    /// Hex digest over all weight bytes in a fixed order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |a: &Array2<f64>| {
            for v in a.iter() {
                h.update(v.to_le_bytes());
            }
        };
        feed(&self.input_proj);
        feed(&self.output_proj);
        for lw in &self.layers {
            for a in [
                &lw.sa_q, &lw.sa_k, &lw.sa_v, &lw.sa_o, &lw.ca_q, &lw.ca_k, &lw.ca_v, &lw.ca_o,
                &lw.ta_q, &lw.ta_k, &lw.ta_v, &lw.ta_o,
            ] {
                feed(a);
            }
        }
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-layer adapter deltas (already materialized to the site shape `d x d`)
/// for the spatial and temporal sites.
#[derive(Debug, Clone)]
pub struct AdapterDeltas<T> {
    pub stb: Vec<Option<T>>,
    pub ttb: Vec<Option<T>>,
}

impl<T> AdapterDeltas<T> {
    pub fn none(layers: usize) -> Self {
        Self {
            stb: (0..layers).map(|_| None).collect(),
            ttb: (0..layers).map(|_| None).collect(),
        }
    }
}

/// Eager deltas used by inference paths.
pub type MaterializedAdapters = AdapterDeltas<Array2<f64>>;

/// Mid-forward access to post-STB features, used by region conditioning.
/// Returning `Some` replaces the feature map for the remainder of the layer.
pub trait FeatureHook<E: Engine> {
    fn post_stb(&mut self, eng: &E, layer: usize, features: &E::T) -> Result<Option<E::T>>;
}

/// No-op hook.
pub struct NoHook;

impl<E: Engine> FeatureHook<E> for NoHook {
    fn post_stb(&mut self, _: &E, _: usize, _: &E::T) -> Result<Option<E::T>> {
        Ok(None)
    }
}

/// Forward products: the noise estimate plus optionally recorded per-layer
/// post-STB feature maps.
pub struct ForwardRecord<T> {
    pub output: T,
    pub features: Vec<T>,
}

/// Multi-head softmax attention context: rows of `q_src` attend over rows of
/// `kv_src`. Returns the pre-output-projection context `[n_q, d]`.
pub fn attention_context<E: Engine>(
    eng: &E,
    q_src: &E::T,
    kv_src: &E::T,
    wq: &E::T,
    wk: &E::T,
    wv: &E::T,
    heads: usize,
) -> E::T {
    let (_, d) = eng.dims(q_src);
    let q = eng.matmul(q_src, wq);
    let k = eng.matmul(kv_src, wk);
    let v = eng.matmul(kv_src, wv);
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let qt = eng.transpose(&q);
    let kt = eng.transpose(&k);
    let vt = eng.transpose(&v);
    let mut ctx_t: Vec<E::T> = Vec::with_capacity(heads);
    for h in 0..heads {
        let rows: Vec<usize> = (h * hd..(h + 1) * hd).collect();
        let qh = eng.transpose(&eng.select_rows(&qt, &rows));
        let kh = eng.transpose(&eng.select_rows(&kt, &rows));
        let vh = eng.transpose(&eng.select_rows(&vt, &rows));
        let scores = eng.scale(&eng.matmul(&qh, &eng.transpose(&kh)), scale);
        let a = eng.softmax_rows(&scores);
        let ctx_h = eng.matmul(&a, &vh);
        ctx_t.push(eng.transpose(&ctx_h));
    }
    let refs: Vec<E::T> = ctx_t;
    eng.transpose(&eng.concat_rows(&refs))
}

/// Sinusoidal embedding of a timestep, one row of width `d`.
pub fn timestep_embedding(t: usize, d: usize) -> Array2<f64> {
    let mut row = Array2::zeros((1, d));
    let half = d / 2;
    for k in 0..half {
        let freq = 1.0 / 10000f64.powf(k as f64 / half as f64);
        row[[0, 2 * k]] = (t as f64 * freq).sin();
        row[[0, 2 * k + 1]] = (t as f64 * freq).cos();
    }
    row
}

/// The frozen denoiser.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub weights: BaseWeights,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            weights: BaseWeights::init(&config),
            config,
        })
    }

    /// Row permutation mapping the frame-major flat layout to itself after a
    /// position-major detour (used to reassemble temporal-attention output).
    fn frame_major_perm(&self, n_v: usize) -> Vec<usize> {
        let hw = self.config.positions();
        let mut perm = Vec::with_capacity(n_v * hw);
        for f in 0..n_v {
            for p in 0..hw {
                perm.push(p * n_v + f);
            }
        }
        perm
    }

    fn check_deltas<E: Engine>(
        &self,
        eng: &E,
        deltas: Option<&AdapterDeltas<E::T>>,
    ) -> Result<()> {
        let d = self.config.d;
        if let Some(ds) = deltas {
            for (name, site) in [("STB", &ds.stb), ("TTB", &ds.ttb)] {
                if site.len() != self.config.layers {
                    return Err(Error::shape(
                        format!("{name} adapter list"),
                        self.config.layers,
                        site.len(),
                    ));
                }
                for (l, slot) in site.iter().enumerate() {
                    if let Some(t) = slot {
                        if eng.dims(t) != (d, d) {
                            return Err(Error::shape(
                                format!("layer {l} {name} adapter"),
                                format!("({d}, {d})"),
                                format!("{:?}", eng.dims(t)),
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Full forward pass over a flattened latent `[n_v*h*w, channels]`.
    ///
    /// `cond` carries one `[n_e, d]` text embedding per layer; `None` is the
    /// unconditional pass and bypasses cross-attention entirely.
    pub fn forward<E: Engine>(
        &self,
        eng: &E,
        z_flat: &E::T,
        cond: Option<&[E::T]>,
        t: usize,
        deltas: Option<&AdapterDeltas<E::T>>,
        hook: &mut dyn FeatureHook<E>,
        record_features: bool,
    ) -> Result<ForwardRecord<E::T>> {
        let cfg = &self.config;
        let (n_rows, n_cols) = eng.dims(z_flat);
        let hw = cfg.positions();
        if n_rows % hw != 0 || n_cols != cfg.channels {
            return Err(Error::shape(
                "denoiser input",
                format!("(k*{hw}, {})", cfg.channels),
                format!("({n_rows}, {n_cols})"),
            ));
        }
        let n_v = n_rows / hw;
        if let Some(c) = cond {
            if c.len() != cfg.layers {
                return Err(Error::shape("cond layers", cfg.layers, c.len()));
            }
            for (l, m) in c.iter().enumerate() {
                if eng.dims(m) != (cfg.max_tokens, cfg.d) {
                    return Err(Error::shape(
                        format!("layer {l} text embedding"),
                        format!("({}, {})", cfg.max_tokens, cfg.d),
                        format!("{:?}", eng.dims(m)),
                    ));
                }
            }
        }
        self.check_deltas(eng, deltas)?;

        let w = &self.weights;
        let mut x = eng.matmul(z_flat, &eng.constant(w.input_proj.clone()));
        let temb_row = timestep_embedding(t, cfg.d);
        let mut temb_full = Array2::zeros((n_rows, cfg.d));
        for mut row in temb_full.rows_mut() {
            row.assign(&temb_row.row(0));
        }
        let temb = eng.constant(temb_full);
        let perm = self.frame_major_perm(n_v);
        let mut features = Vec::new();

        for l in 0..cfg.layers {
            let lw = &w.layers[l];
            x = eng.add(&x, &temb);

            // spatial self-attention, one frame at a time
            let sa_q = eng.constant(lw.sa_q.clone());
            let sa_k = eng.constant(lw.sa_k.clone());
            let sa_v = eng.constant(lw.sa_v.clone());
            let sa_o = eng.constant(lw.sa_o.clone());
            let mut frames_out: Vec<E::T> = Vec::with_capacity(n_v);
            for f in 0..n_v {
                let idx: Vec<usize> = (f * hw..(f + 1) * hw).collect();
                let xf = eng.select_rows(&x, &idx);
                let ctx = attention_context(eng, &xf, &xf, &sa_q, &sa_k, &sa_v, cfg.heads);
                let delta = eng.matmul(&ctx, &sa_o);
                frames_out.push(eng.add(&xf, &delta));
            }
            x = eng.concat_rows(&frames_out);

            // cross-attention to this layer's text embedding
            if let Some(c) = cond {
                let ca_q = eng.constant(lw.ca_q.clone());
                let ca_k = eng.constant(lw.ca_k.clone());
                let ca_v = eng.constant(lw.ca_v.clone());
                let ctx = attention_context(eng, &x, &c[l], &ca_q, &ca_k, &ca_v, cfg.heads);
                let mut w_o = eng.constant(lw.ca_o.clone());
                if let Some(ds) = deltas {
                    if let Some(dw) = &ds.stb[l] {
                        w_o = eng.add(&w_o, dw);
                    }
                }
                x = eng.add(&x, &eng.matmul(&ctx, &w_o));
            }

            // post-STB feature map: recorded and overridable
            if record_features {
                features.push(x.clone());
            }
            if let Some(replacement) = hook.post_stb(eng, l, &x)? {
                if eng.dims(&replacement) != eng.dims(&x) {
                    return Err(Error::shape(
                        format!("layer {l} feature replacement"),
                        format!("{:?}", eng.dims(&x)),
                        format!("{:?}", eng.dims(&replacement)),
                    ));
                }
                x = replacement;
            }

            // temporal mixing across frames at each position
            let ta_q = eng.constant(lw.ta_q.clone());
            let ta_k = eng.constant(lw.ta_k.clone());
            let ta_v = eng.constant(lw.ta_v.clone());
            let mut w_o = eng.constant(lw.ta_o.clone());
            if let Some(ds) = deltas {
                if let Some(dw) = &ds.ttb[l] {
                    w_o = eng.add(&w_o, dw);
                }
            }
            let mut pos_out: Vec<E::T> = Vec::with_capacity(hw);
            for p in 0..hw {
                let idx: Vec<usize> = (0..n_v).map(|f| f * hw + p).collect();
                let xt = eng.select_rows(&x, &idx);
                let ctx = attention_context(eng, &xt, &xt, &ta_q, &ta_k, &ta_v, cfg.heads);
                let mixed = eng.sub(&ctx, &eng.matmul(&xt, &ta_v));
                let delta = eng.matmul(&mixed, &w_o);
                pos_out.push(eng.add(&xt, &delta));
            }
            let pos_major = eng.concat_rows(&pos_out);
            x = eng.select_rows(&pos_major, &perm);
        }

        let output = eng.matmul(&x, &eng.constant(w.output_proj.clone()));
        Ok(ForwardRecord { output, features })
    }

    /// Eager noise estimation over a latent video.
    pub fn denoise(
        &self,
        z_t: &LatentVideo,
        cond: Option<&[Array2<f64>]>,
        t: usize,
        adapters: Option<&MaterializedAdapters>,
    ) -> Result<LatentVideo> {
        let eng = EagerEngine;
        let rec = self.forward(
            &eng,
            &z_t.to_matrix(),
            cond,
            t,
            adapters,
            &mut NoHook,
            false,
        )?;
        LatentVideo::from_matrix(&rec.output, z_t.shape())
    }

    /// Eager pass that also returns per-layer post-STB feature maps shaped
    /// `[n_v, h, w, d]`.
    pub fn layer_features(
        &self,
        z_t: &LatentVideo,
        cond: Option<&[Array2<f64>]>,
        t: usize,
        adapters: Option<&MaterializedAdapters>,
    ) -> Result<(LatentVideo, Vec<Array4<f64>>)> {
        let eng = EagerEngine;
        let rec = self.forward(
            &eng,
            &z_t.to_matrix(),
            cond,
            t,
            adapters,
            &mut NoHook,
            true,
        )?;
        let (n_v, h, wd, _) = z_t.shape();
        let maps = rec
            .features
            .iter()
            .map(|m| flat_to_feature_map(m, n_v, h, wd, self.config.d))
            .collect();
        Ok((
            LatentVideo::from_matrix(&rec.output, z_t.shape())?,
            maps,
        ))
    }
}

/// Reshape a `[n_v*h*w, d]` matrix into `[n_v, h, w, d]`.
pub fn flat_to_feature_map(m: &Array2<f64>, n_v: usize, h: usize, w: usize, d: usize) -> Array4<f64> {
    let flat: Vec<f64> = m.iter().cloned().collect();
    Array4::from_shape_vec((n_v, h, w, d), flat).expect("feature layout")
}

/// Flatten a `[n_v, h, w, d]` map back to `[n_v*h*w, d]`.
pub fn feature_map_to_flat(m: &Array4<f64>) -> Array2<f64> {
    let (n_v, h, w, d) = m.dim();
    let flat: Vec<f64> = m.iter().cloned().collect();
    Array2::from_shape_vec((n_v * h * w, d), flat).expect("feature layout")
}

/// Base model bundle: frozen denoiser plus its matching text encoder.
#[derive(Debug, Clone)]
pub struct BaseModel {
    pub denoiser: Denoiser,
    pub encoder: TextEncoder,
}

impl BaseModel {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        let denoiser = Denoiser::new(config)?;
        let encoder = TextEncoder::new(config.d, config.max_tokens, config.seed);
        Ok(Self { denoiser, encoder })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.denoiser.config
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::TapeEngine;

    fn small_config() -> DenoiserConfig {
        DenoiserConfig {
            layers: 2,
            d: 8,
            r: 8,
            s: 8,
            rank: 2,
            heads: 2,
            frames: 3,
            height: 4,
            width: 4,
            channels: 3,
            max_tokens: 6,
            seed: 11,
        }
    }

    fn null_cond(model: &BaseModel) -> Vec<Array2<f64>> {
        let toks = crate::text::tokenize("");
        (0..model.config().layers)
            .map(|l| {
                model
                    .encoder
                    .encode_plain(&toks, l, &|_, _| None)
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_adapters_match_no_adapters_exactly() {
        let model = BaseModel::new(small_config()).unwrap();
        let z = LatentVideo::standard_normal(model.config().video_shape(), 3, 0);
        let cond = null_cond(&model);
        let mut zero = MaterializedAdapters::none(2);
        zero.stb[0] = Some(Array2::zeros((8, 8)));
        zero.stb[1] = Some(Array2::zeros((8, 8)));
        zero.ttb[0] = Some(Array2::zeros((8, 8)));
        let a = model.denoiser.denoise(&z, Some(&cond), 5, None).unwrap();
        let b = model
            .denoiser
            .denoise(&z, Some(&cond), 5, Some(&zero))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unconditional_differs_from_null_token_conditional() {
        let model = BaseModel::new(small_config()).unwrap();
        let z = LatentVideo::standard_normal(model.config().video_shape(), 3, 0);
        let cond = null_cond(&model);
        let u = model.denoiser.denoise(&z, None, 5, None).unwrap();
        let c = model.denoiser.denoise(&z, Some(&cond), 5, None).unwrap();
        assert_ne!(u, c);
    }

    #[test]
    fn deterministic_forward() {
        let model = BaseModel::new(small_config()).unwrap();
        let z = LatentVideo::standard_normal(model.config().video_shape(), 9, 0);
        let a = model.denoiser.denoise(&z, None, 3, None).unwrap();
        let b = model.denoiser.denoise(&z, None, 3, None).unwrap();
        assert_eq!(a, b);
    }

    /// Shape-propagation oracle over random configs.
    #[test]
    fn output_shape_equals_input_shape() {
        for (i, (layers, d, heads, frames, h, w, c)) in [
            (2usize, 8usize, 1usize, 1usize, 2usize, 3usize, 2usize),
            (3, 12, 3, 4, 3, 2, 5),
            (2, 8, 4, 2, 5, 5, 1),
        ]
        .into_iter()
        .enumerate()
        {
            let cfg = DenoiserConfig {
                layers,
                d,
                r: d,
                s: d,
                rank: 2,
                heads,
                frames,
                height: h,
                width: w,
                channels: c,
                max_tokens: 5,
                seed: i as u64,
            };
            let model = BaseModel::new(cfg).unwrap();
            let z = LatentVideo::standard_normal(cfg.video_shape(), 100 + i as u64, 0);
            let out = model.denoiser.denoise(&z, None, 1, None).unwrap();
            assert_eq!(out.shape(), z.shape(), "case {i}");
        }
    }

    /// Layer-causality oracle: an STB adapter at layer k perturbs post-STB
    /// features only from layer k onward.
    #[test]
    fn adapter_at_layer_k_changes_features_from_k_on() {
        let cfg = DenoiserConfig {
            layers: 3,
            d: 8,
            r: 8,
            s: 8,
            rank: 2,
            heads: 2,
            frames: 2,
            height: 3,
            width: 3,
            channels: 2,
            max_tokens: 5,
            seed: 4,
        };
        let model = BaseModel::new(cfg).unwrap();
        let z = LatentVideo::standard_normal(cfg.video_shape(), 5, 0);
        let cond = null_cond(&model);
        let (_, base_feats) = model
            .denoiser
            .layer_features(&z, Some(&cond), 2, None)
            .unwrap();
        let k = 1;
        let mut pert = MaterializedAdapters::none(3);
        pert.stb[k] = Some(Array2::from_elem((8, 8), 0.05));
        let (_, pert_feats) = model
            .denoiser
            .layer_features(&z, Some(&cond), 2, Some(&pert))
            .unwrap();
        for l in 0..3 {
            let same = base_feats[l] == pert_feats[l];
            if l < k {
                assert!(same, "layer {l} should be untouched");
            } else {
                assert!(!same, "layer {l} should differ");
            }
        }
    }

    /// Single-frame videos pass through the temporal block unchanged, so TTB
    /// perturbations cannot affect them.
    #[test]
    fn ttb_perturbation_invisible_for_single_frame() {
        let mut cfg = small_config();
        cfg.frames = 1;
        let model = BaseModel::new(cfg).unwrap();
        let z = LatentVideo::standard_normal(cfg.video_shape(), 6, 0);
        let mut pert = MaterializedAdapters::none(2);
        pert.ttb[0] = Some(Array2::from_elem((8, 8), 0.7));
        pert.ttb[1] = Some(Array2::from_elem((8, 8), -0.4));
        let a = model.denoiser.denoise(&z, None, 1, None).unwrap();
        let b = model.denoiser.denoise(&z, None, 1, Some(&pert)).unwrap();
        assert_eq!(a, b);
    }

    /// The tape engine must reproduce the eager forward bitwise.
    #[test]
    fn tape_and_eager_forwards_agree() {
        let model = BaseModel::new(small_config()).unwrap();
        let z = LatentVideo::standard_normal(model.config().video_shape(), 8, 0);
        let cond = null_cond(&model);
        let mut ad = MaterializedAdapters::none(2);
        ad.stb[1] = Some(Array2::from_elem((8, 8), 0.01));
        let eager_out = model
            .denoiser
            .denoise(&z, Some(&cond), 4, Some(&ad))
            .unwrap();

        let tp = TapeEngine::new();
        let zt = tp.constant(z.to_matrix());
        let cond_t: Vec<_> = cond.iter().map(|c| tp.constant(c.clone())).collect();
        let mut ad_t = AdapterDeltas::none(2);
        ad_t.stb[1] = Some(tp.leaf(Array2::from_elem((8, 8), 0.01)));
        let rec = model
            .denoiser
            .forward(&tp, &zt, Some(&cond_t), 4, Some(&ad_t), &mut NoHook, false)
            .unwrap();
        let tape_out = tp.value(&rec.output);
        assert_eq!(
            eager_out.to_matrix().as_slice().unwrap(),
            tape_out.as_slice().unwrap()
        );
    }

    #[test]
    fn adapter_shape_error_names_layer_and_site() {
        let model = BaseModel::new(small_config()).unwrap();
        let z = LatentVideo::standard_normal(model.config().video_shape(), 8, 0);
        let mut bad = MaterializedAdapters::none(2);
        bad.ttb[1] = Some(Array2::zeros((4, 8)));
        let err = model.denoiser.denoise(&z, None, 1, Some(&bad)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("layer 1") && msg.contains("TTB"), "{msg}");
    }

    #[test]
    fn checksum_is_stable_and_seed_sensitive() {
        let a = BaseWeights::init(&small_config());
        let b = BaseWeights::init(&small_config());
        assert_eq!(a.checksum(), b.checksum());
        let mut cfg2 = small_config();
        cfg2.seed = 12;
        let c = BaseWeights::init(&cfg2);
        assert_ne!(a.checksum(), c.checksum());
    }
}
