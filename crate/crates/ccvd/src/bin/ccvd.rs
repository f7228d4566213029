use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use ccvd::adapters::init_task_learner;
use ccvd::aggregator::{build_test_model, generate_with_adapters, KindHint};
use ccvd::config::{parse_regions, AppConfig, TaskSpec};
use ccvd::export;
use ccvd::gradcheck;
use ccvd::registry::TaskRegistry;
use ccvd::sampler::GuidanceConfig;
use ccvd::toykit::{self, EvalSettings};
use ccvd::trainer::train_task;

#[derive(Parser)]
#[command(
    name = "ccvd",
    version,
    about = "Continual customized video diffusion at desk scale"
)]
struct Cli {
    /// Registry root; falls back to $CCVD_HOME, then ./ccvd-registry
    #[arg(long, global = true)]
    registry: Option<PathBuf>,
    /// Seed override for the subcommand's randomness
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Configuration file (used by `init` and `gradcheck`)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create a registry with a frozen base model
    Init {
        /// Training-process timestep count override
        #[arg(long)]
        timesteps: Option<usize>,
    },
    /// Train one customization task and append it to the registry
    TrainTask {
        /// Task specification file
        #[arg(long)]
        task: PathBuf,
        /// Orthogonality penalty weight override
        #[arg(long)]
        lambda: Option<f64>,
        /// Token phase first, then adapters (instead of interleaved)
        #[arg(long)]
        two_phase: bool,
        /// Where to write the loss log (default: <registry>/logs/<task>.log)
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// List stored tasks
    ListTasks,
    /// Generate a video from a prompt via task-aware adapter aggregation
    Generate {
        #[arg(long)]
        prompt: String,
        /// subject | motion | both | auto
        #[arg(long, default_value = "auto")]
        kind: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        ddim_steps: Option<usize>,
        #[arg(long)]
        cfg_scale: Option<f64>,
    },
    /// Multi-concept generation with region conditions
    GenerateMulti {
        #[arg(long)]
        prompt: String,
        /// Regions file
        #[arg(long)]
        regions: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write per-region attention heatmap grids
        #[arg(long)]
        dump_attention: bool,
        #[arg(long)]
        ddim_steps: Option<usize>,
        #[arg(long)]
        cfg_scale: Option<f64>,
    },
    /// Evaluate stored tasks and write metric records
    Evaluate {
        /// Report path prefix (writes <report>.jsonl)
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        prompts_per_concept: Option<usize>,
        #[arg(long)]
        videos_per_prompt: Option<usize>,
    },
    /// Finite-difference verification of training gradients
    Gradcheck,
    /// Convert a generated video directory into per-frame PNG files
    ExportFrames {
        /// Directory containing video.bin
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn registry_root(cli: &Cli) -> PathBuf {
    cli.registry
        .clone()
        .or_else(|| std::env::var_os("CCVD_HOME").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("./ccvd-registry"))
}

fn guidance(reg: &TaskRegistry, steps: Option<usize>, scale: Option<f64>) -> GuidanceConfig {
    GuidanceConfig::new(
        scale.unwrap_or(reg.config.cfg_scale),
        steps.unwrap_or(reg.config.ddim_steps),
    )
}

fn print_zeta_table(tm: &ccvd::aggregator::TestModel) {
    for pool in &tm.pools {
        println!(
            "pool {:?}: tasks [{}]",
            pool.placement,
            pool.task_ids.join(", ")
        );
        for (l, z) in pool.zeta.iter().enumerate() {
            let weights: Vec<String> = z.iter().map(|v| format!("{v:.4}")).collect();
            let degenerate = if pool.degenerate_layers.contains(&l) {
                "  (degenerate: uniform)"
            } else {
                ""
            };
            println!("  layer {l}: zeta = [{}]{degenerate}", weights.join(", "));
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let root = registry_root(&cli);
    match cli.cmd {
        Cmd::Init { timesteps } => {
            let mut cfg = match &cli.config {
                Some(p) => AppConfig::load(p)?,
                None => AppConfig::default(),
            };
            if let Some(seed) = cli.seed {
                cfg.model.seed = seed;
            }
            if let Some(t) = timesteps {
                cfg.timesteps = t;
            }
            let reg = TaskRegistry::init(&root, cfg)?;
            println!(
                "initialized registry at {} (layers={}, d={}, {}x{}x{} frames, T={})",
                reg.root().display(),
                cfg.model.layers,
                cfg.model.d,
                cfg.model.height,
                cfg.model.width,
                cfg.model.frames,
                cfg.timesteps
            );
            println!("base checksum {}", reg.base_checksum);
        }
        Cmd::TrainTask {
            task,
            lambda,
            two_phase,
            log,
        } => {
            let mut reg = TaskRegistry::open(&root)?;
            let spec = TaskSpec::load(&task)?;
            let model = reg.build_model()?;
            let sched = reg.schedule()?;
            let mut train_cfg = reg.config.train;
            if let Some(l) = lambda {
                train_cfg.lambda = l;
            }
            if two_phase {
                train_cfg.two_phase = true;
            }
            if let Some(seed) = cli.seed {
                train_cfg.seed = seed;
            }

            let mut data = Vec::new();
            for c in &spec.concepts {
                data.extend(toykit::generate_task_data(
                    c,
                    reg.config.model.video_shape(),
                    ccvd::rng::mix(train_cfg.seed, ccvd::rng::stream_id(&c.token)),
                )?);
            }
            let fresh = init_task_learner(
                &reg.config.model,
                &model.encoder,
                &spec.task_id,
                spec.kind,
                &spec.concept_specs(),
                train_cfg.seed,
            )?;
            let outcome = {
                let prev = reg.learner_refs();
                train_task(&model, &sched, &prev, fresh, &data, &train_cfg)?
            };

            let log_path = log.unwrap_or_else(|| {
                reg.root().join("logs").join(format!("{}.log", spec.task_id))
            });
            if let Some(parent) = log_path.parent() {
                std::fs::create_dir_all(parent)
                    .with_context(|| format!("creating {}", parent.display()))?;
            }
            let mut lines = String::new();
            for r in &outcome.log {
                lines.push_str(&format!("{} {} {}\n", r.step, r.loss, r.penalty));
            }
            std::fs::write(&log_path, lines)
                .with_context(|| format!("writing {}", log_path.display()))?;

            let first = outcome.log.first().map(|r| r.loss).unwrap_or(f64::NAN);
            let last = outcome.log.last().map(|r| r.loss).unwrap_or(f64::NAN);
            let steps = outcome.log.len();
            reg.save_learner(outcome.learner, spec.concepts.clone())?;
            println!(
                "task `{}` trained ({steps} steps, loss {first:.4} -> {last:.4}); log at {}",
                spec.task_id,
                log_path.display()
            );
            println!("registry now holds {} task(s)", reg.tasks.len());
        }
        Cmd::ListTasks => {
            let reg = TaskRegistry::open(&root)?;
            println!("{:<4} {:<24} {:<8} concepts", "#", "task", "kind");
            for (i, t) in reg.tasks.iter().enumerate() {
                println!(
                    "{:<4} {:<24} {:<8} {}",
                    i,
                    t.learner.task_id,
                    t.learner.kind.as_str(),
                    t.learner.concepts.join(", ")
                );
            }
            if reg.tasks.is_empty() {
                println!("(no tasks)");
            }
        }
        Cmd::Generate {
            prompt,
            kind,
            out,
            ddim_steps,
            cfg_scale,
        } => {
            let reg = TaskRegistry::open(&root)?;
            let model = reg.build_model()?;
            let sched = reg.schedule()?;
            let hint = KindHint::parse(&kind)?;
            let learners = reg.learner_refs();
            let gcfg = guidance(&reg, ddim_steps, cfg_scale);
            let seed = cli.seed.unwrap_or(0);

            let tm = build_test_model(&model, &learners, &prompt, hint)?;
            print_zeta_table(&tm);
            let video = generate_with_adapters(
                &model,
                &sched,
                &tm.adapters,
                &learners,
                &prompt,
                &gcfg,
                seed,
            )?;
            let out = out.unwrap_or_else(|| PathBuf::from("./out/generate"));
            export::save_video_dir(
                &out,
                &video,
                &[
                    ("prompt", prompt.clone()),
                    ("seed", seed.to_string()),
                    ("kind", kind.clone()),
                ],
            )?;
            println!("video written to {}", out.display());
        }
        Cmd::GenerateMulti {
            prompt,
            regions,
            out,
            dump_attention,
            ddim_steps,
            cfg_scale,
        } => {
            let reg = TaskRegistry::open(&root)?;
            let model = reg.build_model()?;
            let sched = reg.schedule()?;
            let learners = reg.learner_refs();
            let gcfg = guidance(&reg, ddim_steps, cfg_scale);
            let seed = cli.seed.unwrap_or(0);

            let text = std::fs::read_to_string(&regions)
                .with_context(|| format!("reading {}", regions.display()))?;
            let region_list = parse_regions(
                &text,
                &regions.display().to_string(),
                reg.config.model.frames,
            )?;

            // relevance reflects the full user intent: base + region prompts
            let combined = std::iter::once(prompt.clone())
                .chain(region_list.iter().map(|r| r.prompt.clone()))
                .collect::<Vec<_>>()
                .join(" ");
            let tm = build_test_model(&model, &learners, &combined, KindHint::Auto)?;
            print_zeta_table(&tm);

            let result = ccvd::regions::multi_concept_sample(
                &model,
                &sched,
                &tm.adapters,
                &learners,
                &prompt,
                &region_list,
                &gcfg,
                seed,
            )?;
            let out = out.unwrap_or_else(|| PathBuf::from("./out/generate-multi"));
            export::save_video_dir(
                &out,
                &result.video,
                &[
                    ("prompt", prompt.clone()),
                    ("seed", seed.to_string()),
                    ("regions", region_list.len().to_string()),
                ],
            )?;
            if let Some(wts) = &result.final_weights {
                println!("final per-frame aggregation weights:");
                for f in 0..wts.nrows() {
                    let row: Vec<String> = (0..wts.ncols())
                        .map(|k| format!("{:.4}", wts[[f, k]]))
                        .collect();
                    println!("  frame {f}: [{}]", row.join(", "));
                }
            }
            if dump_attention {
                for (k, map) in result.final_attention.iter().enumerate() {
                    let p = out.join(format!("attention_region{k}.png"));
                    export::export_attention_grid(map, &p)?;
                    println!("attention heatmap for region {k} at {}", p.display());
                }
            }
            println!("video written to {}", out.display());
        }
        Cmd::Evaluate {
            report,
            prompts_per_concept,
            videos_per_prompt,
        } => {
            let reg = TaskRegistry::open(&root)?;
            let model = reg.build_model()?;
            let sched = reg.schedule()?;
            let learners = reg.learner_refs();
            let concepts = reg.all_concepts();
            let settings = EvalSettings {
                prompts_per_concept: prompts_per_concept.unwrap_or(3),
                videos_per_prompt: videos_per_prompt.unwrap_or(2),
                guidance: GuidanceConfig::new(reg.config.cfg_scale, reg.config.ddim_steps),
                base_seed: cli.seed.unwrap_or(7),
            };
            let rep = toykit::evaluate(&model, &sched, &learners, &concepts, &settings)?;
            let path = report.with_extension("jsonl");
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)
                        .with_context(|| format!("creating {}", parent.display()))?;
                }
            }
            std::fs::write(&path, rep.to_jsonl())
                .with_context(|| format!("writing {}", path.display()))?;
            print!("{}", rep.summary_table());
            println!("records written to {}", path.display());
        }
        Cmd::Gradcheck => {
            let model_cfg = match &cli.config {
                Some(p) => AppConfig::load(p)?.model,
                None => gradcheck::suite_config(),
            };
            let model = ccvd::backbone::BaseModel::new(model_cfg)?;
            let sched = ccvd::schedule::make_schedule(20, 1e-3, 0.05)?;
            let seed = cli.seed.unwrap_or(5);
            let reports = gradcheck::run_suite(
                &model,
                &sched,
                0.1,
                seed,
                &gradcheck::GradCheckSettings::default(),
            )?;
            let mut max = 0.0f64;
            for r in &reports {
                println!(
                    "{:<28} {:>5} params  max rel err {:.3e}",
                    r.label, r.params, r.max_rel_err
                );
                max = max.max(r.max_rel_err);
            }
            println!("max rel. error {max:.3e}");
            if max >= 1e-4 {
                bail!("gradient check failed: {max:.3e} >= 1e-4");
            }
        }
        Cmd::ExportFrames { video, out } => {
            let (v, meta) = export::load_video_dir(&video)?;
            let names = export::export_frames(&v, &out)?;
            let prompt = meta
                .get("prompt")
                .and_then(|p| p.as_str())
                .unwrap_or("<unknown>");
            println!(
                "{} frames for prompt \"{}\" written to {}",
                names.len(),
                prompt,
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
