//! Flat key-value configuration files (a TOML subset) with canonical writing,
//! plus the task-spec and regions file formats.

use std::collections::BTreeMap;
use std::path::Path;

use crate::adapters::{ConceptSpec, TaskKind};
use crate::backbone::DenoiserConfig;
use crate::error::{Error, Result};
use crate::regions::RegionCondition;
use crate::toykit::{ColorName, ShapeKind, ToyConcept, Trajectory};
use crate::trainer::{Optimizer, TrainConfig};

pub const FORMAT_VERSION: i64 = 1;

/// Everything a run needs: model, schedule, sampling, and training defaults.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AppConfig {
    pub model: DenoiserConfig,
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub ddim_steps: usize,
    pub cfg_scale: f64,
    pub train: TrainConfig,
}

impl Default for AppConfig {
    /// Desk-scale defaults: 16x16 latents, 8 frames, 100 training timesteps,
    /// and a training budget sized so the toy model actually binds concepts
    /// in seconds rather than hours.
    fn default() -> Self {
        Self {
            model: DenoiserConfig::toy(),
            timesteps: 100,
            beta_min: 1e-3,
            beta_max: 0.05,
            ddim_steps: 15,
            cfg_scale: 3.0,
            train: TrainConfig {
                lambda: 0.1,
                lr_tokens: 1e-2,
                lr_adapters: 1e-2,
                steps_tokens: 300,
                steps_adapters: 150,
                batch_size: 2,
                seed: 0,
                optimizer: Optimizer::Adam,
                two_phase: false,
            },
        }
    }
}

impl AppConfig {
    /// Canonical file form: fixed key order, one `key = value` per line.
    pub fn to_file_string(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let kv = |s: &mut String, k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv(&mut s, "version", FORMAT_VERSION.to_string());
        kv(&mut s, "layers", m.layers.to_string());
        kv(&mut s, "d", m.d.to_string());
        kv(&mut s, "r", m.r.to_string());
        kv(&mut s, "s", m.s.to_string());
        kv(&mut s, "rank", m.rank.to_string());
        kv(&mut s, "heads", m.heads.to_string());
        kv(&mut s, "frames", m.frames.to_string());
        kv(&mut s, "height", m.height.to_string());
        kv(&mut s, "width", m.width.to_string());
        kv(&mut s, "channels", m.channels.to_string());
        kv(&mut s, "max_tokens", m.max_tokens.to_string());
        kv(&mut s, "model_seed", m.seed.to_string());
        kv(&mut s, "timesteps", self.timesteps.to_string());
        kv(&mut s, "beta_min", fmt_f64(self.beta_min));
        kv(&mut s, "beta_max", fmt_f64(self.beta_max));
        kv(&mut s, "ddim_steps", self.ddim_steps.to_string());
        kv(&mut s, "cfg_scale", fmt_f64(self.cfg_scale));
        kv(&mut s, "lambda", fmt_f64(t.lambda));
        kv(&mut s, "lr_tokens", fmt_f64(t.lr_tokens));
        kv(&mut s, "lr_adapters", fmt_f64(t.lr_adapters));
        kv(&mut s, "steps_tokens", t.steps_tokens.to_string());
        kv(&mut s, "steps_adapters", t.steps_adapters.to_string());
        kv(&mut s, "batch_size", t.batch_size.to_string());
        kv(&mut s, "train_seed", t.seed.to_string());
        kv(&mut s, "optimizer", format!("\"{}\"", t.optimizer.as_str()));
        kv(&mut s, "two_phase", t.two_phase.to_string());
        s
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let table = parse_table(text, origin)?;
        let mut cfg = AppConfig::default();
        let version = get_int(&table, "version", origin)?;
        if version != FORMAT_VERSION {
            return Err(Error::Parse {
                path: origin.into(),
                reason: format!("unsupported version {version}"),
            });
        }
        let m = &mut cfg.model;
        m.layers = get_usize(&table, "layers", origin)?;
        m.d = get_usize(&table, "d", origin)?;
        m.r = get_usize(&table, "r", origin)?;
        m.s = get_usize(&table, "s", origin)?;
        m.rank = get_usize(&table, "rank", origin)?;
        m.heads = get_usize(&table, "heads", origin)?;
        m.frames = get_usize(&table, "frames", origin)?;
        m.height = get_usize(&table, "height", origin)?;
        m.width = get_usize(&table, "width", origin)?;
        m.channels = get_usize(&table, "channels", origin)?;
        m.max_tokens = get_usize(&table, "max_tokens", origin)?;
        m.seed = get_int(&table, "model_seed", origin)? as u64;
        cfg.timesteps = get_usize(&table, "timesteps", origin)?;
        cfg.beta_min = get_f64(&table, "beta_min", origin)?;
        cfg.beta_max = get_f64(&table, "beta_max", origin)?;
        cfg.ddim_steps = get_usize(&table, "ddim_steps", origin)?;
        cfg.cfg_scale = get_f64(&table, "cfg_scale", origin)?;
        let t = &mut cfg.train;
        t.lambda = get_f64(&table, "lambda", origin)?;
        t.lr_tokens = get_f64(&table, "lr_tokens", origin)?;
        t.lr_adapters = get_f64(&table, "lr_adapters", origin)?;
        t.steps_tokens = get_usize(&table, "steps_tokens", origin)?;
        t.steps_adapters = get_usize(&table, "steps_adapters", origin)?;
        t.batch_size = get_usize(&table, "batch_size", origin)?;
        t.seed = get_int(&table, "train_seed", origin)? as u64;
        t.optimizer = Optimizer::parse(&get_str(&table, "optimizer", origin)?)?;
        t.two_phase = get_bool(&table, "two_phase", origin)?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Shortest-roundtrip float form that the parser maps back to the same bits.
fn fmt_f64(v: f64) -> String {
    let s = format!("{v}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

fn parse_table(text: &str, origin: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| Error::Parse {
        path: origin.into(),
        reason: e.to_string(),
    })
}

fn missing(key: &str, origin: &str) -> Error {
    Error::Parse {
        path: origin.into(),
        reason: format!("missing key `{key}`"),
    }
}

fn get_int(t: &toml::Table, key: &str, origin: &str) -> Result<i64> {
    t.get(key)
        .and_then(|v| v.as_integer())
        .ok_or_else(|| missing(key, origin))
}

fn get_usize(t: &toml::Table, key: &str, origin: &str) -> Result<usize> {
    let v = get_int(t, key, origin)?;
    usize::try_from(v).map_err(|_| Error::Parse {
        path: origin.into(),
        reason: format!("`{key}` must be non-negative"),
    })
}

fn get_f64(t: &toml::Table, key: &str, origin: &str) -> Result<f64> {
    t.get(key)
        .and_then(|v| v.as_float().or_else(|| v.as_integer().map(|i| i as f64)))
        .ok_or_else(|| missing(key, origin))
}

fn get_str(t: &toml::Table, key: &str, origin: &str) -> Result<String> {
    t.get(key)
        .and_then(|v| v.as_str())
        .map(|s| s.to_string())
        .ok_or_else(|| missing(key, origin))
}

fn get_bool(t: &toml::Table, key: &str, origin: &str) -> Result<bool> {
    t.get(key)
        .and_then(|v| v.as_bool())
        .ok_or_else(|| missing(key, origin))
}

/// Parsed task specification: identity, kind, and the toy concepts to learn.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub task_id: String,
    pub kind: TaskKind,
    pub concepts: Vec<ToyConcept>,
}

impl TaskSpec {
    pub fn concept_specs(&self) -> Vec<ConceptSpec> {
        self.concepts
            .iter()
            .map(|c| ConceptSpec {
                name: c.token.clone(),
                init_word: Some(c.init_word().to_string()),
            })
            .collect()
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let table = parse_table(text, origin)?;
        let version = get_int(&table, "version", origin)?;
        if version != FORMAT_VERSION {
            return Err(Error::Parse {
                path: origin.into(),
                reason: format!("unsupported version {version}"),
            });
        }
        let task_id = get_str(&table, "task_id", origin)?;
        let kind = TaskKind::parse(&get_str(&table, "kind", origin)?)?;
        let list = table
            .get("concept")
            .and_then(|v| v.as_array())
            .ok_or_else(|| missing("[[concept]]", origin))?;
        let mut concepts = Vec::new();
        for (i, item) in list.iter().enumerate() {
            let t = item.as_table().ok_or_else(|| Error::Parse {
                path: origin.into(),
                reason: format!("concept {i} is not a table"),
            })?;
            let token = get_str(t, "token", origin)?;
            let concept = match kind {
                TaskKind::Subject => ToyConcept::subject(
                    &token,
                    ShapeKind::parse(&get_str(t, "shape", origin)?)?,
                    ColorName::parse(&get_str(t, "color", origin)?)?,
                ),
                TaskKind::Motion => ToyConcept::motion(
                    &token,
                    Trajectory::parse(&get_str(t, "trajectory", origin)?)?,
                ),
            };
            concepts.push(concept);
        }
        if concepts.is_empty() {
            return Err(Error::Parse {
                path: origin.into(),
                reason: "task declares no concepts".into(),
            });
        }
        Ok(Self {
            task_id,
            kind,
            concepts,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_file_string(&self) -> String {
        let mut s = format!(
            "version = {FORMAT_VERSION}\ntask_id = \"{}\"\nkind = \"{}\"\n",
            self.task_id,
            self.kind.as_str()
        );
        for c in &self.concepts {
            s.push_str("\n[[concept]]\n");
            s.push_str(&format!("token = \"{}\"\n", c.token));
            match c.appearance {
                crate::toykit::ConceptAppearance::Subject { shape, color } => {
                    s.push_str(&format!("shape = \"{}\"\n", shape.word()));
                    s.push_str(&format!("color = \"{}\"\n", color.word()));
                }
                crate::toykit::ConceptAppearance::Motion { trajectory } => {
                    s.push_str(&format!("trajectory = \"{}\"\n", trajectory.word()));
                }
            }
        }
        s
    }
}

/// Regions file: a list of region prompts with a static box or per-frame
/// boxes.
pub fn parse_regions(text: &str, origin: &str, frames: usize) -> Result<Vec<RegionCondition>> {
    let table = parse_table(text, origin)?;
    let version = get_int(&table, "version", origin)?;
    if version != FORMAT_VERSION {
        return Err(Error::Parse {
            path: origin.into(),
            reason: format!("unsupported version {version}"),
        });
    }
    let list = table
        .get("region")
        .and_then(|v| v.as_array())
        .ok_or_else(|| missing("[[region]]", origin))?;
    let parse_box = |v: &toml::Value, what: &str| -> Result<[f64; 4]> {
        let arr = v.as_array().ok_or_else(|| Error::Parse {
            path: origin.into(),
            reason: format!("{what} is not an array"),
        })?;
        if arr.len() != 4 {
            return Err(Error::Parse {
                path: origin.into(),
                reason: format!("{what} needs 4 coordinates"),
            });
        }
        let mut out = [0.0; 4];
        for (i, x) in arr.iter().enumerate() {
            out[i] = x
                .as_float()
                .or_else(|| x.as_integer().map(|n| n as f64))
                .ok_or_else(|| Error::Parse {
                    path: origin.into(),
                    reason: format!("{what}[{i}] is not a number"),
                })?;
        }
        Ok(out)
    };
    let mut regions = Vec::new();
    for (i, item) in list.iter().enumerate() {
        let t = item.as_table().ok_or_else(|| Error::Parse {
            path: origin.into(),
            reason: format!("region {i} is not a table"),
        })?;
        let prompt = get_str(t, "prompt", origin)?;
        let boxes = if let Some(b) = t.get("box") {
            vec![parse_box(b, &format!("region {i} box"))?; frames]
        } else if let Some(bs) = t.get("boxes") {
            let arr = bs.as_array().ok_or_else(|| Error::Parse {
                path: origin.into(),
                reason: format!("region {i} boxes is not an array"),
            })?;
            arr.iter()
                .enumerate()
                .map(|(f, b)| parse_box(b, &format!("region {i} frame {f} box")))
                .collect::<Result<Vec<_>>>()?
        } else {
            return Err(Error::Parse {
                path: origin.into(),
                reason: format!("region {i} needs `box` or `boxes`"),
            });
        };
        let rc = RegionCondition { prompt, boxes };
        rc.validate(i, frames)?;
        regions.push(rc);
    }
    Ok(regions)
}

/// Simple string map file used for small manifests (same flat format).
pub fn write_kv_file(path: &Path, pairs: &[(&str, String)]) -> Result<()> {
    let mut s = String::new();
    for (k, v) in pairs {
        s.push_str(&format!("{k} = {v}\n"));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_kv_file(path: &Path) -> Result<BTreeMap<String, toml::Value>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let table = parse_table(&text, &path.display().to_string())?;
    Ok(table.into_iter().collect())
}
