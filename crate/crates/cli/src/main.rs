//! `shapelift` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use shapelift::datagen::PoseFamily;
use shapelift_cli::commands::{self, load_config, EvalConfig, FitConfig, PredictConfig, RenderConfig, TrainConfig};
use shapelift_cli::experiments::{AblationConfig, DataConfig, ModelConfig};
use shapelift_cli::{Error, Result};
use shapelift_nn::train::LossVariant;

#[derive(Parser)]
#[command(name = "shapelift", version, about = "Synthetic body-model data, prior training and model fitting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options every subcommand takes. Flags override the config file, which
/// overrides built-in defaults.
#[derive(Args)]
struct Common {
    /// JSON config file; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a procedural toy body model.
    MakeModel {
        #[command(flatten)]
        common: Common,
        /// Non-root joints.
        #[arg(long)]
        joints: Option<usize>,
        #[arg(long)]
        vertices: Option<usize>,
        #[arg(long)]
        shape_dims: Option<usize>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        family: Option<Family>,
        /// Comma-separated yaw angles in degrees.
        #[arg(long, value_delimiter = ',')]
        viewpoints: Option<Vec<f64>>,
        #[arg(long)]
        yaw_jitter: Option<f64>,
        #[arg(long)]
        keypoint_sigma: Option<f64>,
        #[arg(long)]
        dropout: Option<f64>,
        #[arg(long)]
        silhouette_radius: Option<i32>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train the pose and shape priors.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        phase1_steps: Option<usize>,
        #[arg(long)]
        phase2_steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        shape_steps: Option<usize>,
        /// Checkpoint directory.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Predict (θ, β) for every record of a dataset.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        priors: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Fit the body model to each record's keypoints.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Predictions used as initialization and anchor.
        #[arg(long)]
        anchor: Option<PathBuf>,
        /// Also fit from the mean pose and report the iteration ratio.
        #[arg(long)]
        compare: bool,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        anchor_weight: Option<f64>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Score predictions against a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Write OBJ meshes and PGM silhouettes of records or predictions.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Render these estimates instead of the records' own parameters.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        indices: Option<Vec<usize>>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train every loss variant under several seeds and compare held-out error.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated training seeds; `--seed` gives the dataset seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        records: Option<usize>,
        #[arg(long)]
        phase1_steps: Option<usize>,
        #[arg(long)]
        phase2_steps: Option<usize>,
        #[arg(long, short)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Standard,
    Overhead,
}

impl From<Family> for PoseFamily {
    fn from(f: Family) -> Self {
        match f {
            Family::Standard => PoseFamily::Standard,
            Family::Overhead => PoseFamily::Overhead,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    AxisAngle,
    RotMat,
    RotMatVertex,
    RotMatJoint,
}

impl From<Variant> for LossVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::AxisAngle => LossVariant::AxisAngle,
            Variant::RotMat => LossVariant::RotMat,
            Variant::RotMatVertex => LossVariant::RotMatVertex,
            Variant::RotMatJoint => LossVariant::RotMatJoint,
        }
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::MakeModel { common, joints, vertices, shape_dims, out } => {
            let mut cfg: ModelConfig = load_config(common.config.as_deref())?;
            set(&mut cfg.seed, common.seed);
            set(&mut cfg.joints, joints);
            set(&mut cfg.vertices, vertices);
            set(&mut cfg.shape_dims, shape_dims);
            commands::make_model(&cfg, &out)
        }
        Command::Gen { common, model, count, family, viewpoints, yaw_jitter, keypoint_sigma, dropout, silhouette_radius, out } => {
            let mut cfg: DataConfig = load_config(common.config.as_deref())?;
            set(&mut cfg.seed, common.seed);
            set(&mut cfg.count, count);
            set(&mut cfg.family, family.map(Into::into));
            set(&mut cfg.viewpoints, viewpoints);
            set(&mut cfg.yaw_jitter, yaw_jitter);
            set(&mut cfg.noise.keypoint_sigma, keypoint_sigma);
            set(&mut cfg.noise.dropout, dropout);
            set(&mut cfg.noise.silhouette_radius, silhouette_radius);
            commands::generate(&model, &cfg, &out)
        }
        Command::Train { common, model, data, variant, phase1_steps, phase2_steps, batch_size, lr, shape_steps, out } => {
            let mut cfg: TrainConfig = load_config(common.config.as_deref())?;
            set(&mut cfg.seed, common.seed);
            set(&mut cfg.plan.variant, variant.map(Into::into));
            set(&mut cfg.plan.phase1_steps, phase1_steps);
            set(&mut cfg.plan.phase2_steps, phase2_steps);
            set(&mut cfg.plan.batch_size, batch_size);
            set(&mut cfg.plan.lr, lr);
            set(&mut cfg.shape_steps, shape_steps);
            commands::train(&model, &data, &cfg, &out)
        }
        Command::Predict { common, model, priors, data, out } => {
            let mut cfg: PredictConfig = load_config(common.config.as_deref())?;
            set(&mut cfg.seed, common.seed);
            commands::predict(&model, &priors, &data, &cfg, &out)
        }
        Command::Fit { common, model, data, anchor, compare, limit, max_iters, anchor_weight, out } => {
            let mut cfg: FitConfig = load_config(common.config.as_deref())?;
            set(&mut cfg.seed, common.seed);
            if limit.is_some() {
                cfg.limit = limit;
            }
            cfg.compare |= compare;
            set(&mut cfg.settings.max_iters, max_iters);
            set(&mut cfg.settings.weights.anchor, anchor_weight);
            commands::fit_command(&model, &data, anchor.as_deref(), &cfg, &out)
        }
        Command::Eval { common, model, data, predictions, out } => {
            let mut cfg: EvalConfig = load_config(common.config.as_deref())?;
            set(&mut cfg.seed, common.seed);
            commands::eval_command(&model, &data, &predictions, &cfg, &out)
        }
        Command::Render { common, model, data, predictions, indices, out } => {
            let mut cfg: RenderConfig = load_config(common.config.as_deref())?;
            set(&mut cfg.seed, common.seed);
            set(&mut cfg.indices, indices);
            commands::render_command(&model, &data, predictions.as_deref(), &cfg, &out)
        }
        Command::Ablate { common, seeds, records, phase1_steps, phase2_steps, out } => {
            let mut cfg: AblationConfig = load_config(common.config.as_deref())?;
            set(&mut cfg.data.seed, common.seed);
            set(&mut cfg.seeds, seeds);
            set(&mut cfg.data.count, records);
            set(&mut cfg.plan.phase1_steps, phase1_steps);
            set(&mut cfg.plan.phase2_steps, phase2_steps);
            commands::ablate_command(&cfg, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error [{}]: {e}", e.class());
            ExitCode::from(exit_byte(&e))
        }
    }
}

fn exit_byte(e: &Error) -> u8 {
    e.exit_code() as u8
}
