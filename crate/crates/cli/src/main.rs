//! Command-line driver: world/dataset generation, training, editing,
//! evaluation, and ablations. One root seed fans out to per-stage seeds, a
//! JSON config overlays the built-in defaults, and every command writes a
//! run-log with config and artifact fingerprints under --out.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use editkit_core::dataset::{build_dataset, Dataset};
use editkit_core::diffusion::{
    make_schedule, sample_edit, DdimPlan, GuidanceScales, TextPipeline, DEFAULT_BETA_MAX,
    DEFAULT_BETA_MIN,
};
use editkit_core::error::EditError;
use editkit_core::evalkit::{
    ablation_run, evaluate, AblationVariant, EvalConfig,
};
use editkit_core::io;
use editkit_core::model::ModelConfig;
use editkit_core::seed::{child_seed, rng_from};
use editkit_core::textcond::{concat_instructions, tokenize, InstructionTemplateSet};
use editkit_core::trainer::{
    load_checkpoint, save_checkpoint, text_stack, train, TrainConfig,
};
use editkit_core::world::{build_world, World, WorldConfig};
use editkit_core::Result;

type F = f32;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
struct DataSection {
    n_examples: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { n_examples: 20_000 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
struct SampleSection {
    scale_image: f64,
    scale_text: f64,
    steps: usize,
    t_start: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { scale_image: 1.0, scale_text: 2.0, steps: 15, t_start: 600 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
struct AblateSection {
    /// Known variant names: baseline, no_tpr, no_id_loss, no_id_module.
    variants: Vec<String>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self { variants: vec!["baseline".into(), "no_tpr".into()] }
    }
}

/// Full-defaults overlay config. Flags override the file; the file overrides
/// the defaults. The root seed fans out per stage.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    seed: u64,
    world: WorldConfig,
    data: DataSection,
    model: ModelConfig,
    train: TrainConfig,
    sample: SampleSection,
    eval: EvalConfig,
    ablate: AblateSection,
}

impl RunConfig {
    fn load(path: Option<&Path>, seed_flag: Option<u64>) -> Result<Self> {
        let mut cfg: RunConfig = match path {
            Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = seed_flag {
            cfg.seed = seed;
        }
        // Stage seeds derive from the root unless the file pinned them.
        if cfg.world.seed == 0 {
            cfg.world.seed = child_seed(cfg.seed, "world");
        }
        if cfg.train.seed == 0 {
            cfg.train.seed = child_seed(cfg.seed, "train");
        }
        if cfg.eval.seed == 0 {
            cfg.eval.seed = child_seed(cfg.seed, "eval");
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.k != self.world.k || self.model.d != self.world.d {
            return Err(EditError::InvalidConfig(format!(
                "model latent {}x{} does not match world {}x{}",
                self.model.k, self.model.d, self.world.k, self.world.d
            )));
        }
        if self.model.id_dim != self.world.id_dim {
            return Err(EditError::InvalidConfig(format!(
                "model id_dim {} does not match world id_dim {}",
                self.model.id_dim, self.world.id_dim
            )));
        }
        GuidanceScales::new(self.sample.scale_image, self.sample.scale_text)?;
        DdimPlan::new(self.sample.t_start, self.sample.steps, self.model.t_max)?;
        self.eval.validate(self.model.t_max)?;
        for name in &self.ablate.variants {
            variant_config(&self.train, name)?;
        }
        Ok(())
    }

    fn fingerprint(&self) -> Result<String> {
        Ok(io::sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }
}

fn variant_config(base: &TrainConfig, name: &str) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    match name {
        "baseline" => {}
        "no_tpr" => cfg.tpr_enabled = false,
        "no_id_loss" => cfg.id_loss_enabled = false,
        "no_id_module" => {
            cfg.id_module_enabled = false;
            cfg.id_loss_enabled = false;
        }
        other => {
            return Err(EditError::InvalidConfig(format!(
                "unknown ablation variant {other:?}"
            )))
        }
    }
    Ok(cfg)
}

#[derive(Parser)]
#[command(name = "editkit", about = "Instructed latent diffusion editing on a synthetic world")]
struct Cli {
    /// JSON config overlaying the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts and the run-log.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and persist the frozen synthetic world.
    GenWorld,
    /// Generate a triplet dataset from an existing world.
    GenData {
        #[arg(long)]
        world: PathBuf,
    },
    /// Train the denoiser on an existing dataset.
    Train {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run an instructed edit with a trained checkpoint.
    Edit {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Instruction text; repeat for composites.
        #[arg(long = "instruction", required = true)]
        instructions: Vec<String>,
        #[arg(long, default_value_t = 1.0)]
        scale_image: f64,
        #[arg(long, default_value_t = 2.0)]
        scale_text: f64,
        #[arg(long, default_value_t = 15)]
        steps: usize,
        #[arg(long, default_value_t = 600)]
        t_start: usize,
        /// f32 little-endian k x d blob to edit; defaults to a prior sample.
        #[arg(long)]
        latent_file: Option<PathBuf>,
    },
    /// Evaluate a trained checkpoint.
    Eval {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and compare ablation variants.
    Ablate {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Serialize)]
struct RunLog {
    command: String,
    config_fingerprint: String,
    seed: u64,
    wall_time_s: f64,
    outputs: Vec<String>,
}

fn write_run_log(out: &Path, command: &str, cfg: &RunConfig, start: Instant, outputs: Vec<PathBuf>) -> Result<()> {
    let log = RunLog {
        command: command.to_string(),
        config_fingerprint: cfg.fingerprint()?,
        seed: cfg.seed,
        wall_time_s: start.elapsed().as_secs_f64(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    fs::write(out.join("run-log.json"), serde_json::to_string_pretty(&log)?)?;
    Ok(())
}

fn out_dir(out: &Option<PathBuf>) -> Result<PathBuf> {
    let out = out
        .clone()
        .ok_or_else(|| EditError::InvalidConfig("--out is required".into()))?;
    fs::create_dir_all(&out)?;
    Ok(out)
}

fn load_world(path: &Path) -> Result<World<F>> {
    if !path.join("manifest.json").exists() {
        return Err(EditError::InvalidConfig(format!(
            "world not found at {}",
            path.display()
        )));
    }
    World::load(path)
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), cli.seed)?;
    let start = Instant::now();
    match cli.command {
        Command::GenWorld => {
            let out = out_dir(&cli.out)?;
            let world: World<F> = build_world(&cfg.world)?;
            let world_dir = out.join("world");
            world.save(&world_dir)?;
            println!("world seed_used = {}", world.seed_used);
            for attr in 0..world.n_attr() {
                println!("probe sigma[{attr}] = {:.6}", world.probe_std(attr)?);
            }
            write_run_log(&out, "gen-world", &cfg, start, vec![world_dir])?;
        }
        Command::GenData { world } => {
            let out = out_dir(&cli.out)?;
            let world = load_world(&world)?;
            let templates = InstructionTemplateSet::builtin(world.n_attr());
            let dataset = build_dataset(
                &world,
                &templates,
                cfg.data.n_examples,
                child_seed(cfg.seed, "data"),
            )?;
            let data_dir = out.join("dataset");
            dataset.save(&data_dir)?;
            println!("wrote {} triplets", dataset.len());
            write_run_log(&out, "gen-data", &cfg, start, vec![data_dir])?;
        }
        Command::Train { world, data } => {
            let out = out_dir(&cli.out)?;
            let world = load_world(&world)?;
            let dataset = Dataset::<F>::load(&data, &world)?;
            let sched = make_schedule(cfg.model.t_max, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)?;
            let (vocab, embedder) = text_stack(world.seed_used, world.n_attr(), cfg.model.d_txt);
            let result = train(
                &world,
                &dataset,
                &sched,
                &cfg.model,
                &cfg.train,
                &vocab,
                &embedder,
                |p| println!("step {:6}  loss {:.6}  (mse {:.6}, id {:.6})", p.step, p.total, p.mse, p.id),
            )?;
            let ckpt_dir = out.join("checkpoint");
            let last = result.history.last().map(|p| p.total).unwrap_or(f64::NAN);
            save_checkpoint(&ckpt_dir, &result.model, &cfg.train, &world, cfg.train.steps, last)?;
            fs::write(
                out.join("loss-history.json"),
                serde_json::to_string_pretty(&result.history)?,
            )?;
            write_run_log(&out, "train", &cfg, start, vec![ckpt_dir])?;
        }
        Command::Edit {
            world,
            checkpoint,
            instructions,
            scale_image,
            scale_text,
            steps,
            t_start,
            latent_file,
        } => {
            let out = out_dir(&cli.out)?;
            let world = load_world(&world)?;
            let (model, _) = load_checkpoint::<F>(&checkpoint, &world)?;
            let sched = make_schedule(model.config.t_max, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)?;
            let scales = GuidanceScales::new(scale_image, scale_text)?;
            let plan = DdimPlan::new(t_start, steps, sched.t_max)?;
            let (vocab, embedder) = text_stack(world.seed_used, world.n_attr(), model.config.d_txt);
            let instruction = concat_instructions(&vocab, &instructions)?;
            tokenize(&vocab, &instruction)?;

            let (k, d) = (world.k(), world.d());
            let w_o = match latent_file {
                Some(path) => io::mat_from_f32(&io::read_blob(&path, k * d)?, k, d)?,
                None => {
                    let mut rng = rng_from(child_seed(cfg.seed, "edit-latent"));
                    world.sample_prior_with(&mut rng)
                }
            };
            let mut rng = rng_from(child_seed(cfg.seed, "edit-noise"));
            let text = TextPipeline { vocab: &vocab, embedder: &embedder };
            let w_edit = sample_edit(
                &model, &world, &sched, &text, &w_o, &instruction, scales, &plan, &mut rng,
            )?;

            let edited_path = out.join("edited.bin");
            io::write_blob(&edited_path, &io::mat_to_f32(&w_edit))?;
            let eval_cfg = cfg.eval.clone();
            let poses = eval_cfg.poses();
            let mut views = Vec::new();
            for &pose in &poses {
                views.extend(io::vec_to_f32(&world.generate(&w_edit, pose)?.0));
            }
            let views_path = out.join("views.bin");
            io::write_blob(&views_path, &views)?;

            let report = edit_report(&world, &w_o, &w_edit, &instructions, &poses)?;
            let report_path = out.join("edit-report.json");
            fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
            println!("id_score = {:.4}", report.id_score);
            for (attr, shift) in report.probe_shift_sigma.iter().enumerate() {
                println!("probe shift[{attr}] = {shift:+.4} sigma");
            }
            write_run_log(&out, "edit", &cfg, start, vec![edited_path, views_path, report_path])?;
        }
        Command::Eval { world, checkpoint } => {
            let out = out_dir(&cli.out)?;
            let world = load_world(&world)?;
            let (model, _) = load_checkpoint::<F>(&checkpoint, &world)?;
            let sched = make_schedule(model.config.t_max, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)?;
            let (vocab, embedder) = text_stack(world.seed_used, world.n_attr(), model.config.d_txt);
            let report = evaluate(&model, &world, &sched, &vocab, &embedder, &cfg.eval)?;
            let path = out.join("report.json");
            report.save(&path)?;
            println!(
                "aa {:.4}  ad {:.4}  id {:.4}  dir {:.4}",
                report.aa, report.ad, report.id, report.dir
            );
            write_run_log(&out, "eval", &cfg, start, vec![path])?;
        }
        Command::Ablate { world, data } => {
            let out = out_dir(&cli.out)?;
            let world = load_world(&world)?;
            let dataset = Dataset::<F>::load(&data, &world)?;
            let sched = make_schedule(cfg.model.t_max, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)?;
            let (vocab, embedder) = text_stack(world.seed_used, world.n_attr(), cfg.model.d_txt);
            let variants = cfg
                .ablate
                .variants
                .iter()
                .map(|name| {
                    Ok(AblationVariant {
                        name: name.clone(),
                        train: variant_config(&cfg.train, name)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let pair = (cfg.ablate.variants.iter().any(|v| v == "baseline")
                && cfg.ablate.variants.iter().any(|v| v == "no_tpr"))
            .then_some(("baseline", "no_tpr"));
            let reports = ablation_run(
                &world, &dataset, &sched, &cfg.model, &variants, &cfg.eval, &vocab, &embedder,
                &out, pair,
            )?;
            for (name, report) in &reports {
                println!(
                    "{name}: aa {:.4}  ad {:.4}  id {:.4}  dir {:.4}",
                    report.aa, report.ad, report.id, report.dir
                );
            }
            write_run_log(&out, "ablate", &cfg, start, vec![out.join("comparison.csv")])?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct EditReport {
    instructions: Vec<String>,
    /// Signed probe shift per attribute in sigma units.
    probe_shift_sigma: Vec<f64>,
    id_score: f64,
    n_views: usize,
}

fn edit_report(
    world: &World<F>,
    w_o: &ndarray::Array2<F>,
    w_edit: &ndarray::Array2<F>,
    instructions: &[String],
    poses: &[editkit_core::world::CameraPose],
) -> Result<EditReport> {
    let before = world.attribute_logits(w_o)?;
    let after = world.attribute_logits(w_edit)?;
    let mut probe_shift_sigma = Vec::with_capacity(world.n_attr());
    for attr in 0..world.n_attr() {
        let sigma = world.probe_std(attr)? as f64;
        probe_shift_sigma.push((after[attr] - before[attr]) as f64 / sigma);
    }
    Ok(EditReport {
        instructions: instructions.to_vec(),
        probe_shift_sigma,
        id_score: editkit_core::evalkit::id_score(world, w_o, w_edit, poses)?,
        n_views: poses.len(),
    })
}
