//! Persistent, versioned task registry.
//!
//! Directory layout:
//!
//! ```text
//! <root>/
//!   registry.cfg        manifest: version, base checksum, ordered task ids
//!   base.cfg            the run configuration (model, schedule, training)
//!   lock                advisory writer lock (present only while writing)
//!   tasks/<task_id>/
//!     manifest.cfg      task id, kind, concepts and their render parameters
//!     adapter_<l>_down.bin, adapter_<l>_up.bin
//!     token_<concept>_<l>.bin
//! ```
//!
//! Writes are atomic: task directories and the manifest are staged under a
//! temporary name and renamed into place, the manifest last, so an
//! interrupted save leaves the previous state loadable.

use std::fs;
use std::path::{Path, PathBuf};

use crate::adapters::{
    LayerConceptToken, LowRankAdapter, Placement, TaskConceptLearner, TaskKind,
};
use crate::backbone::{BaseModel, BaseWeights};
use crate::config::{read_kv_file, write_kv_file, AppConfig, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::schedule::{make_schedule, NoiseSchedule};
use crate::toykit::{ColorName, ConceptAppearance, ShapeKind, ToyConcept, Trajectory};
use crate::tensorio;

/// One stored task: the learner plus the toy-concept metadata needed to
/// regenerate references and resolve descriptor words.
#[derive(Debug, Clone)]
pub struct TaskEntry {
    pub learner: TaskConceptLearner,
    pub concepts: Vec<ToyConcept>,
}

#[derive(Debug)]
pub struct TaskRegistry {
    root: PathBuf,
    pub config: AppConfig,
    pub base_checksum: String,
    pub tasks: Vec<TaskEntry>,
}

/// Advisory writer lock; removed on drop.
pub struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path.display().to_string(), e)
}

impl TaskRegistry {
    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Create a fresh registry with the given configuration.
    pub fn init(root: &Path, config: AppConfig) -> Result<Self> {
        config.model.validate()?;
        if root.join("registry.cfg").exists() {
            return Err(Error::Registry(format!(
                "registry already exists at {}",
                root.display()
            )));
        }
        fs::create_dir_all(root.join("tasks")).map_err(io_err(root))?;
        config.save(&root.join("base.cfg"))?;
        let checksum = BaseWeights::init(&config.model).checksum();
        let reg = Self {
            root: root.to_path_buf(),
            config,
            base_checksum: checksum,
            tasks: Vec::new(),
        };
        reg.write_manifest()?;
        Ok(reg)
    }

    /// Load an existing registry, verifying the base-model checksum.
    pub fn open(root: &Path) -> Result<Self> {
        let manifest_path = root.join("registry.cfg");
        let manifest = read_kv_file(&manifest_path)?;
        let version = manifest
            .get("version")
            .and_then(|v| v.as_integer())
            .ok_or_else(|| Error::Registry("manifest missing version".into()))?;
        if version != FORMAT_VERSION {
            return Err(Error::Registry(format!(
                "unsupported registry version {version}"
            )));
        }
        let config = AppConfig::load(&root.join("base.cfg"))?;
        let stored_checksum = manifest
            .get("base_checksum")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Registry("manifest missing base_checksum".into()))?
            .to_string();
        let actual = BaseWeights::init(&config.model).checksum();
        if actual != stored_checksum {
            return Err(Error::Registry(format!(
                "base checksum mismatch: manifest {stored_checksum}, rebuilt {actual}"
            )));
        }
        let task_ids: Vec<String> = manifest
            .get("tasks")
            .and_then(|v| v.as_str())
            .map(|s| {
                s.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            })
            .unwrap_or_default();
        let mut tasks = Vec::with_capacity(task_ids.len());
        for id in &task_ids {
            tasks.push(Self::load_task(root, &config, id)?);
        }
        Ok(Self {
            root: root.to_path_buf(),
            config,
            base_checksum: stored_checksum,
            tasks,
        })
    }

    pub fn learner_refs(&self) -> Vec<&TaskConceptLearner> {
        self.tasks.iter().map(|t| &t.learner).collect()
    }

    pub fn all_concepts(&self) -> Vec<&ToyConcept> {
        self.tasks.iter().flat_map(|t| t.concepts.iter()).collect()
    }

    pub fn build_model(&self) -> Result<BaseModel> {
        BaseModel::new(self.config.model)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.config.timesteps, self.config.beta_min, self.config.beta_max)
    }

    /// Take the advisory writer lock.
    pub fn lock(&self) -> Result<LockGuard> {
        let path = self.root.join("lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(LockGuard { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Registry(
                format!("registry is locked by another writer ({})", path.display()),
            )),
            Err(e) => Err(Error::io(path.display().to_string(), e)),
        }
    }

    /// Append a finished learner. Validates uniqueness and dimensional
    /// compatibility, then persists atomically.
    pub fn save_learner(
        &mut self,
        learner: TaskConceptLearner,
        concepts: Vec<ToyConcept>,
    ) -> Result<()> {
        let _lock = self.lock()?;
        if self.tasks.iter().any(|t| t.learner.task_id == learner.task_id) {
            return Err(Error::DuplicateTask(learner.task_id));
        }
        for c in &learner.concepts {
            for t in &self.tasks {
                if t.learner.concepts.iter().any(|e| e == c) {
                    return Err(Error::DuplicateConcept(c.clone()));
                }
            }
        }
        if learner.adapters.len() != self.config.model.layers {
            return Err(Error::shape(
                format!("task `{}` layer count", learner.task_id),
                self.config.model.layers,
                learner.adapters.len(),
            ));
        }
        learner.validate(&self.config.model)?;
        if concepts.len() != learner.concepts.len()
            || concepts
                .iter()
                .zip(&learner.concepts)
                .any(|(meta, name)| &meta.token != name)
        {
            return Err(Error::Registry(format!(
                "concept metadata does not match learner `{}`",
                learner.task_id
            )));
        }

        // stage the task directory, then rename, then commit the manifest
        let final_dir = self.root.join("tasks").join(&learner.task_id);
        let tmp_dir = self.root.join("tasks").join(format!(".tmp_{}", learner.task_id));
        if tmp_dir.exists() {
            fs::remove_dir_all(&tmp_dir).map_err(io_err(&tmp_dir))?;
        }
        fs::create_dir_all(&tmp_dir).map_err(io_err(&tmp_dir))?;
        Self::write_task_files(&tmp_dir, &learner, &concepts)?;
        if final_dir.exists() {
            fs::remove_dir_all(&final_dir).map_err(io_err(&final_dir))?;
        }
        fs::rename(&tmp_dir, &final_dir).map_err(io_err(&final_dir))?;

        self.tasks.push(TaskEntry { learner, concepts });
        self.write_manifest()
    }

    /// Rewrite every file from in-memory state (canonical serialization).
    pub fn resave(&self) -> Result<()> {
        self.config.save(&self.root.join("base.cfg"))?;
        for t in &self.tasks {
            let dir = self.root.join("tasks").join(&t.learner.task_id);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            Self::write_task_files(&dir, &t.learner, &t.concepts)?;
        }
        self.write_manifest()
    }

    fn write_manifest(&self) -> Result<()> {
        let ids: Vec<&str> = self.tasks.iter().map(|t| t.learner.task_id.as_str()).collect();
        let tmp = self.root.join("registry.cfg.tmp");
        write_kv_file(
            &tmp,
            &[
                ("version", FORMAT_VERSION.to_string()),
                ("base_checksum", format!("\"{}\"", self.base_checksum)),
                ("tasks", format!("\"{}\"", ids.join(","))),
            ],
        )?;
        let final_path = self.root.join("registry.cfg");
        fs::rename(&tmp, &final_path).map_err(io_err(&final_path))
    }

    fn write_task_files(
        dir: &Path,
        learner: &TaskConceptLearner,
        concepts: &[ToyConcept],
    ) -> Result<()> {
        let mut pairs: Vec<(&str, String)> = vec![];
        let id_line = format!("\"{}\"", learner.task_id);
        let kind_line = format!("\"{}\"", learner.kind.as_str());
        let concepts_line = format!("\"{}\"", learner.concepts.join(","));
        pairs.push(("version", FORMAT_VERSION.to_string()));
        pairs.push(("task_id", id_line));
        pairs.push(("kind", kind_line));
        pairs.push(("concepts", concepts_line));
        pairs.push(("layers", learner.adapters.len().to_string()));
        let meta: Vec<String> = concepts
            .iter()
            .map(|c| match c.appearance {
                ConceptAppearance::Subject { shape, color } => {
                    format!("\"subject:{}:{}\"", shape.word(), color.word())
                }
                ConceptAppearance::Motion { trajectory } => {
                    format!("\"motion:{}\"", trajectory.word())
                }
            })
            .collect();
        let owned: Vec<(String, String)> = meta
            .into_iter()
            .enumerate()
            .map(|(i, m)| (format!("concept_meta_{i}"), m))
            .collect();
        let mut all: Vec<(&str, String)> = pairs;
        for (k, v) in &owned {
            all.push((k.as_str(), v.clone()));
        }
        write_kv_file(&dir.join("manifest.cfg"), &all)?;

        for a in &learner.adapters {
            tensorio::write_array2(&dir.join(format!("adapter_{}_down.bin", a.layer)), &a.down)?;
            tensorio::write_array2(&dir.join(format!("adapter_{}_up.bin", a.layer)), &a.up)?;
        }
        for t in &learner.tokens {
            tensorio::write_array1(
                &dir.join(format!("token_{}_{}.bin", t.concept, t.layer)),
                &t.embedding,
            )?;
        }
        Ok(())
    }

    fn load_task(root: &Path, config: &AppConfig, id: &str) -> Result<TaskEntry> {
        let dir = root.join("tasks").join(id);
        let manifest = read_kv_file(&dir.join("manifest.cfg"))?;
        let get_str = |k: &str| -> Result<String> {
            manifest
                .get(k)
                .and_then(|v| v.as_str())
                .map(String::from)
                .ok_or_else(|| Error::Registry(format!("task `{id}`: missing `{k}`")))
        };
        let task_id = get_str("task_id")?;
        if task_id != id {
            return Err(Error::Registry(format!(
                "task directory `{id}` contains manifest for `{task_id}`"
            )));
        }
        let kind = TaskKind::parse(&get_str("kind")?)?;
        let concept_names: Vec<String> = get_str("concepts")?
            .split(',')
            .map(String::from)
            .collect();
        let layers = manifest
            .get("layers")
            .and_then(|v| v.as_integer())
            .ok_or_else(|| Error::Registry(format!("task `{id}`: missing `layers`")))?
            as usize;
        if layers != config.model.layers {
            return Err(Error::shape(
                format!("stored task `{id}` layer count"),
                config.model.layers,
                layers,
            ));
        }

        let placement = match kind {
            TaskKind::Subject => Placement::Stb,
            TaskKind::Motion => Placement::Ttb,
        };
        let mut adapters = Vec::with_capacity(layers);
        for l in 0..layers {
            adapters.push(LowRankAdapter {
                layer: l,
                placement,
                down: tensorio::read_array2(&dir.join(format!("adapter_{l}_down.bin")))?,
                up: tensorio::read_array2(&dir.join(format!("adapter_{l}_up.bin")))?,
            });
        }
        let mut tokens = Vec::new();
        for name in &concept_names {
            for l in 0..layers {
                tokens.push(LayerConceptToken {
                    concept: name.clone(),
                    layer: l,
                    embedding: tensorio::read_array1(
                        &dir.join(format!("token_{name}_{l}.bin")),
                    )?,
                });
            }
        }
        let learner = TaskConceptLearner {
            task_id,
            kind,
            concepts: concept_names.clone(),
            adapters,
            tokens,
        };
        learner.validate(&config.model)?;

        let mut concepts = Vec::with_capacity(concept_names.len());
        for (i, name) in concept_names.iter().enumerate() {
            let meta = get_str(&format!("concept_meta_{i}"))?;
            let parts: Vec<&str> = meta.split(':').collect();
            let concept = match parts.as_slice() {
                ["subject", shape, color] => ToyConcept::subject(
                    name,
                    ShapeKind::parse(shape)?,
                    ColorName::parse(color)?,
                ),
                ["motion", trajectory] => {
                    ToyConcept::motion(name, Trajectory::parse(trajectory)?)
                }
                _ => {
                    return Err(Error::Registry(format!(
                        "task `{id}`: bad concept meta `{meta}`"
                    )))
                }
            };
            concepts.push(concept);
        }
        Ok(TaskEntry { learner, concepts })
    }
}

/// Collect all registry files with their bytes, for byte-stability checks.
pub fn snapshot_tree(root: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    fn walk(dir: &Path, root: &Path, out: &mut Vec<(String, Vec<u8>)>) -> std::io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            let path = entry.path();
            if path.is_dir() {
                walk(&path, root, out)?;
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&path)?));
            }
        }
        Ok(())
    }
    walk(root, root, &mut files).map_err(|e| Error::io(root.display().to_string(), e))?;
    files.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::init_task_learner;

    fn small_app_config() -> AppConfig {
        let mut cfg = AppConfig::default();
        cfg.model.layers = 2;
        cfg.model.d = 8;
        cfg.model.r = 8;
        cfg.model.s = 8;
        cfg.model.rank = 2;
        cfg.model.heads = 2;
        cfg.model.frames = 2;
        cfg.model.height = 4;
        cfg.model.width = 4;
        cfg.model.seed = 77;
        cfg
    }

    fn trained_learner(cfg: &AppConfig, id: &str, token: &str, seed: u64) -> (TaskConceptLearner, Vec<ToyConcept>) {
        let model = BaseModel::new(cfg.model).unwrap();
        let mut learner = init_task_learner(
            &cfg.model,
            &model.encoder,
            id,
            TaskKind::Subject,
            &[crate::adapters::ConceptSpec {
                name: token.into(),
                init_word: Some("circle".into()),
            }],
            seed,
        )
        .unwrap();
        let mut r = crate::rng::named_rng(seed, "fake_train");
        for a in &mut learner.adapters {
            a.up = crate::rng::normal_array2(&mut r, a.up.nrows(), a.up.ncols(), 0.1);
        }
        let concepts = vec![ToyConcept::subject(token, ShapeKind::Circle, ColorName::Red)];
        (learner, concepts)
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_app_config();
        let mut reg = TaskRegistry::init(dir.path(), cfg).unwrap();
        let (learner, concepts) = trained_learner(&cfg, "t1", "V1", 5);
        reg.save_learner(learner.clone(), concepts).unwrap();

        let loaded = TaskRegistry::open(dir.path()).unwrap();
        assert_eq!(loaded.tasks.len(), 1);
        assert_eq!(loaded.tasks[0].learner, learner);
    }

    #[test]
    fn resave_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_app_config();
        let mut reg = TaskRegistry::init(dir.path(), cfg).unwrap();
        let (l1, c1) = trained_learner(&cfg, "t1", "V1", 5);
        let (l2, c2) = trained_learner(&cfg, "t2", "V2", 6);
        reg.save_learner(l1, c1).unwrap();
        reg.save_learner(l2, c2).unwrap();

        let before = snapshot_tree(dir.path()).unwrap();
        let loaded = TaskRegistry::open(dir.path()).unwrap();
        loaded.resave().unwrap();
        let after = snapshot_tree(dir.path()).unwrap();
        assert_eq!(before.len(), after.len());
        for ((an, ab), (bn, bb)) in before.iter().zip(after.iter()) {
            assert_eq!(an, bn);
            assert_eq!(ab, bb, "file {an} changed bytes");
        }
    }

    #[test]
    fn interrupted_save_keeps_previous_state() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_app_config();
        let mut reg = TaskRegistry::init(dir.path(), cfg).unwrap();
        let (l1, c1) = trained_learner(&cfg, "t1", "V1", 5);
        reg.save_learner(l1, c1).unwrap();

        // simulate a crash after the task dir was staged but before the
        // manifest was committed: a fully-written but unreferenced dir
        let (l2, c2) = trained_learner(&cfg, "t2", "V2", 6);
        let orphan = dir.path().join("tasks").join("t2");
        std::fs::create_dir_all(&orphan).unwrap();
        TaskRegistry::write_task_files(&orphan, &l2, &c2).unwrap();

        let loaded = TaskRegistry::open(dir.path()).unwrap();
        assert_eq!(loaded.tasks.len(), 1);
        assert_eq!(loaded.tasks[0].learner.task_id, "t1");
    }

    #[test]
    fn duplicate_ids_and_concepts_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_app_config();
        let mut reg = TaskRegistry::init(dir.path(), cfg).unwrap();
        let (l1, c1) = trained_learner(&cfg, "t1", "V1", 5);
        reg.save_learner(l1.clone(), c1.clone()).unwrap();
        assert!(matches!(
            reg.save_learner(l1.clone(), c1.clone()),
            Err(Error::DuplicateTask(_))
        ));
        let (mut l3, c3) = trained_learner(&cfg, "t3", "V1", 7);
        l3.task_id = "t3".into();
        assert!(matches!(
            reg.save_learner(l3, c3),
            Err(Error::DuplicateConcept(_))
        ));
    }

    #[test]
    fn wrong_layer_count_rejected_with_both_values() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_app_config();
        let mut reg = TaskRegistry::init(dir.path(), cfg).unwrap();
        let (mut learner, concepts) = trained_learner(&cfg, "t1", "V1", 5);
        learner.adapters.pop();
        let err = reg.save_learner(learner, concepts).unwrap_err().to_string();
        assert!(err.contains('2') && err.contains('1'), "{err}");
    }

    #[test]
    fn checksum_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_app_config();
        TaskRegistry::init(dir.path(), cfg).unwrap();
        // tamper with the stored config seed: weights no longer match
        let base = dir.path().join("base.cfg");
        let text = std::fs::read_to_string(&base)
            .unwrap()
            .replace("model_seed = 77", "model_seed = 78");
        std::fs::write(&base, text).unwrap();
        let err = TaskRegistry::open(dir.path()).unwrap_err();
        assert!(err.to_string().contains("checksum"));
    }

    #[test]
    fn lock_excludes_second_writer() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_app_config();
        let reg = TaskRegistry::init(dir.path(), cfg).unwrap();
        let guard = reg.lock().unwrap();
        assert!(reg.lock().is_err());
        drop(guard);
        assert!(reg.lock().is_ok());
    }
}
