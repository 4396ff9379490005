//! Experiment runners shared by the `ablate` command and the acceptance
//! suite. Every runner is a pure function of its config.

use serde::{Deserialize, Serialize};
use shapelift::body_model::{build_toy_model, ToyModelSpec};
use shapelift::datagen::{generate_dataset, DatasetRecord, GenConfig, NoiseSpec, PoseFamily, PoseSampler, ShapeSampler};
use shapelift::datagen::apply_viewpoint;
use shapelift::fitter::{camera_from_keypoints, fit, FitProblem, FitResult, FitSettings, FitWeights};
use shapelift::{BodyModel, PoseParams, ShapeParams};
use shapelift_nn::finetune::{finetune_reprojection, FinetunePlan, Observation2D};
use shapelift_nn::train::{evaluate_mpve, train_priors, LossVariant, TrainPlan};
use shapelift_nn::{PriorConfig, Priors};

use crate::Result;

/// Toy model spec in serializable form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vertices: usize,
    pub joints: usize,
    pub shape_dims: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let s = ToyModelSpec::default();
        Self { vertices: s.n_vertices, joints: s.n_body_joints, shape_dims: s.n_shape, seed: s.seed }
    }
}

impl ModelConfig {
    pub fn spec(&self) -> ToyModelSpec {
        ToyModelSpec { n_vertices: self.vertices, n_body_joints: self.joints, n_shape: self.shape_dims, seed: self.seed }
    }

    pub fn build(&self) -> Result<BodyModel> {
        Ok(build_toy_model(&self.spec())?.model)
    }
}

/// Sampler and rendering settings of one synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub count: usize,
    pub family: PoseFamily,
    pub shape_sigma: f64,
    /// Yaw angles in degrees.
    pub viewpoints: Vec<f64>,
    /// Uniform yaw jitter in degrees.
    pub yaw_jitter: f64,
    pub noise: NoiseSpec,
    pub fill: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 1000,
            family: PoseFamily::Standard,
            shape_sigma: 1.0,
            viewpoints: vec![0.0],
            yaw_jitter: 180.0,
            noise: NoiseSpec::default(),
            fill: 0.8,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            count: self.count,
            viewpoints: self.viewpoints.iter().map(|d| d.to_radians()).collect(),
            yaw_jitter: self.yaw_jitter.to_radians(),
            noise: self.noise.clone(),
            fill: self.fill,
            seed: self.seed,
            ..GenConfig::default()
        }
    }

    pub fn generate(&self, model: &BodyModel) -> Result<Vec<DatasetRecord>> {
        let poses = PoseSampler::procedural(model, self.family, self.seed);
        let shapes = ShapeSampler { sigma: self.shape_sigma, seed: self.seed };
        Ok(generate_dataset(model, &poses, &shapes, &self.gen_config())?)
    }

    /// Same sampler settings under another seed and size.
    pub fn with(&self, count: usize, seed: u64) -> Self {
        Self { count, seed, ..self.clone() }
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Loss-variant sweep: every variant trained from the same initialization
/// under each seed and scored on a held-out split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub test_records: usize,
    pub seeds: Vec<u64>,
    pub variants: Vec<LossVariant>,
    pub prior: PriorConfig,
    /// Pose-prior plan; seed and variant are overwritten per run.
    pub plan: TrainPlan,
    /// Steps of the shape prior shared by all variants of a seed. With 0 the
    /// held-out error is measured on the true shape.
    pub shape_steps: usize,
    pub shape_batch: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            data: DataConfig { count: 5000, seed: 7, ..DataConfig::default() },
            test_records: 500,
            seeds: vec![0, 1, 2],
            variants: vec![LossVariant::AxisAngle, LossVariant::RotMat, LossVariant::RotMatVertex],
            prior: PriorConfig::desk(),
            plan: TrainPlan {
                phase1_steps: 3000,
                phase2_steps: 3000,
                batch_size: 32,
                final_lr_fraction: 0.05,
                train_shape: false,
                ..TrainPlan::default()
            },
            shape_steps: 1000,
            shape_batch: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    pub variant: LossVariant,
    pub mpve: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: LossVariant,
    pub median_mpve: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    pub summary: Vec<VariantSummary>,
}

impl AblationReport {
    pub fn median_of(&self, variant: LossVariant) -> Option<f64> {
        self.summary.iter().find(|s| s.variant == variant).map(|s| s.median_mpve)
    }

    /// Plain-text comparison table.
    pub fn table(&self) -> String {
        let mut out = format!("{:<16} {:>14}\n", "variant", "median_mpve");
        for s in &self.summary {
            out.push_str(&format!("{:<16} {:>14.6}\n", s.variant.name(), s.median_mpve));
        }
        out
    }
}

pub fn run_ablation(cfg: &AblationConfig) -> Result<AblationReport> {
    let model = cfg.model.build()?;
    let train = cfg.data.generate(&model)?;
    let test = cfg.data.with(cfg.test_records, cfg.data.seed ^ HELD_OUT_SALT).generate(&model)?;
    ablation_on(&model, &train, &test, cfg)
}

/// Seed offset separating held-out data from its training split.
pub const HELD_OUT_SALT: u64 = 0x5eed_0ff5;

pub fn ablation_on(model: &BodyModel, train: &[DatasetRecord], test: &[DatasetRecord], cfg: &AblationConfig) -> Result<AblationReport> {
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let mut base = new_priors(model, &cfg.prior, seed)?;
        if cfg.shape_steps > 0 {
            train_shape_prior(&mut base, train, model, &cfg.plan, cfg.shape_steps, cfg.shape_batch, seed)?;
        }
        for &variant in &cfg.variants {
            let mut priors = base.clone();
            let plan = TrainPlan { seed, variant, train_pose: true, train_shape: false, ..cfg.plan.clone() };
            train_priors(&mut priors, train, model, &plan)?;
            let mpve = evaluate_mpve(&priors, test, model, cfg.shape_steps == 0)?;
            log::info!("ablation seed {seed} {}: {mpve:.5}", variant.name());
            runs.push(AblationRun { seed, variant, mpve });
        }
    }
    let summary = cfg
        .variants
        .iter()
        .map(|&variant| {
            let v: Vec<f64> = runs.iter().filter(|r| r.variant == variant).map(|r| r.mpve).collect();
            VariantSummary { variant, median_mpve: median(&v) }
        })
        .collect();
    Ok(AblationReport { runs, summary })
}

pub fn new_priors(model: &BodyModel, prior: &PriorConfig, seed: u64) -> Result<Priors> {
    Ok(Priors::new(model.n_joints(), model.pose_dim(), model.shape_dim(), shapelift::renderer::IMAGE_SIZE, prior, seed)?)
}

/// Trains only the shape prior with the parameter loss, leaving the pose
/// prior untouched.
pub fn train_shape_prior(
    priors: &mut Priors,
    records: &[DatasetRecord],
    model: &BodyModel,
    template: &TrainPlan,
    steps: usize,
    batch_size: usize,
    seed: u64,
) -> Result<()> {
    let plan = TrainPlan {
        phase1_steps: steps,
        phase2_steps: 0,
        batch_size,
        variant: LossVariant::RotMat,
        seed,
        train_pose: false,
        train_shape: true,
        ..template.clone()
    };
    train_priors(priors, records, model, &plan)?;
    Ok(())
}

/// Reprojection finetuning on 2D-only data from an unseen pose family,
/// compared against finetuning on 2D data from the training family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShiftConfig {
    pub model: ModelConfig,
    /// Supervised training data; its family is the in-distribution one.
    pub data: DataConfig,
    pub shifted_family: PoseFamily,
    /// 2D-only records per finetuning set.
    pub observations: usize,
    pub test_records: usize,
    pub seeds: Vec<u64>,
    pub prior: PriorConfig,
    pub plan: TrainPlan,
    pub shape_steps: usize,
    pub shape_batch: usize,
    pub finetune: FinetunePlan,
}

impl Default for DomainShiftConfig {
    fn default() -> Self {
        let ab = AblationConfig::default();
        Self {
            model: ab.model,
            data: ab.data,
            shifted_family: PoseFamily::Overhead,
            observations: 1000,
            test_records: 300,
            seeds: ab.seeds,
            prior: ab.prior,
            plan: TrainPlan { variant: LossVariant::RotMatVertex, ..ab.plan },
            shape_steps: ab.shape_steps,
            shape_batch: ab.shape_batch,
            finetune: FinetunePlan { steps: 600, batch_size: 16, train_shape: false, ..FinetunePlan::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftRun {
    pub seed: u64,
    pub shifted_before: f64,
    pub shifted_after: f64,
    pub in_dist_before: f64,
    pub in_dist_after: f64,
}

impl ShiftRun {
    /// Relative error reduction on the shifted family.
    pub fn shifted_gain(&self) -> f64 {
        1.0 - self.shifted_after / self.shifted_before
    }

    /// Relative error change on the training family.
    pub fn in_dist_change(&self) -> f64 {
        self.in_dist_after / self.in_dist_before - 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShiftReport {
    pub runs: Vec<ShiftRun>,
    pub median_shifted_gain: f64,
    pub median_in_dist_change: f64,
}

const OBSERVATION_SALT: u64 = 0x0b5e_2d00;

pub fn run_domain_shift(cfg: &DomainShiftConfig) -> Result<DomainShiftReport> {
    let model = cfg.model.build()?;
    let train = cfg.data.generate(&model)?;
    let split = |family, count, salt: u64| DataConfig { family, ..cfg.data.with(count, cfg.data.seed ^ salt) }.generate(&model);
    let in_test = split(cfg.data.family, cfg.test_records, HELD_OUT_SALT)?;
    let shift_test = split(cfg.shifted_family, cfg.test_records, HELD_OUT_SALT)?;
    let in_obs = split(cfg.data.family, cfg.observations, OBSERVATION_SALT)?;
    let shift_obs = split(cfg.shifted_family, cfg.observations, OBSERVATION_SALT)?;
    let in_obs: Vec<Observation2D> = in_obs.iter().map(Observation2D::from).collect();
    let shift_obs: Vec<Observation2D> = shift_obs.iter().map(Observation2D::from).collect();
    let true_shape = cfg.shape_steps == 0;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let mut base = new_priors(&model, &cfg.prior, seed)?;
        if cfg.shape_steps > 0 {
            train_shape_prior(&mut base, &train, &model, &cfg.plan, cfg.shape_steps, cfg.shape_batch, seed)?;
        }
        let plan = TrainPlan { seed, train_pose: true, train_shape: false, ..cfg.plan.clone() };
        train_priors(&mut base, &train, &model, &plan)?;
        let ft = FinetunePlan { seed, ..cfg.finetune.clone() };
        let mut shifted = base.clone();
        finetune_reprojection(&mut shifted, &shift_obs, &train, &model, &ft)?;
        let mut in_dist = base.clone();
        finetune_reprojection(&mut in_dist, &in_obs, &train, &model, &ft)?;
        let run = ShiftRun {
            seed,
            shifted_before: evaluate_mpve(&base, &shift_test, &model, true_shape)?,
            shifted_after: evaluate_mpve(&shifted, &shift_test, &model, true_shape)?,
            in_dist_before: evaluate_mpve(&base, &in_test, &model, true_shape)?,
            in_dist_after: evaluate_mpve(&in_dist, &in_test, &model, true_shape)?,
        };
        log::info!("domain shift seed {seed}: {run:?}");
        runs.push(run);
    }
    let gains: Vec<f64> = runs.iter().map(ShiftRun::shifted_gain).collect();
    let changes: Vec<f64> = runs.iter().map(ShiftRun::in_dist_change).collect();
    Ok(DomainShiftReport { median_shifted_gain: median(&gains), median_in_dist_change: median(&changes), runs })
}

/// Fitting from prior predictions with an anchor versus fitting from the
/// mean pose without one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchoredFitConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub problems: usize,
    pub seed: u64,
    pub prior: PriorConfig,
    pub plan: TrainPlan,
    pub shape_steps: usize,
    pub shape_batch: usize,
    /// Settings of both fits; the anchor weight only acts on the anchored one.
    pub fit: FitSettings,
}

impl Default for AnchoredFitConfig {
    fn default() -> Self {
        let ab = AblationConfig::default();
        Self {
            model: ab.model,
            data: ab.data,
            problems: 50,
            seed: 0,
            prior: ab.prior,
            plan: TrainPlan { variant: LossVariant::RotMatVertex, ..ab.plan },
            shape_steps: ab.shape_steps,
            shape_batch: ab.shape_batch,
            fit: FitSettings {
                weights: FitWeights { anchor: 1e-3, ..FitWeights::default() },
                sigma_keypoint: 10.0,
                use_confidence: true,
                ..FitSettings::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitComparison {
    pub anchored_iterations: usize,
    pub mean_pose_iterations: usize,
    pub anchored_final: f64,
    pub mean_pose_final: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchoredFitReport {
    pub problems: Vec<FitComparison>,
    pub median_anchored_iterations: f64,
    pub median_mean_pose_iterations: f64,
    /// Anchored median over mean-pose median.
    pub iteration_ratio: f64,
    /// Share of problems where the anchored fit ends at a data objective no
    /// worse than the mean-pose fit.
    pub anchored_no_worse: f64,
}

/// Mean pose seen from the default viewpoint, zero shape.
pub fn mean_pose_init(model: &BodyModel) -> Result<(PoseParams, ShapeParams)> {
    Ok((apply_viewpoint(&PoseParams::zeros(model.n_joints()), 0.0)?, ShapeParams::zeros(model.shape_dim())))
}

/// First iteration whose data objective is at or below `threshold`; the
/// trace length when it never gets there.
pub fn iterations_to(trace: &[f64], threshold: f64) -> usize {
    trace.iter().position(|&v| v <= threshold).unwrap_or(trace.len())
}

pub fn initial_problem(
    model: &BodyModel,
    record: &DatasetRecord,
    theta: &PoseParams,
    beta: &ShapeParams,
    settings: &FitSettings,
    anchored: bool,
) -> Result<FitProblem> {
    let (_, joints) = model.forward(beta, theta)?;
    let camera = camera_from_keypoints(&joints.joints, &record.keypoints, settings.use_confidence)?;
    Ok(FitProblem {
        keypoints: record.keypoints.clone(),
        silhouette: None,
        init_theta: theta.theta.clone(),
        init_beta: beta.beta.clone(),
        init_camera: camera,
        anchor: anchored.then(|| theta.theta.clone()),
        settings: settings.clone(),
    })
}

/// Both fits are timed to the data objective the mean-pose fit ends at.
pub fn compare_fits(anchored: &FitResult, mean_pose: &FitResult) -> FitComparison {
    let a_final = *anchored.data_trace.last().unwrap_or(&f64::INFINITY);
    let m_final = *mean_pose.data_trace.last().unwrap_or(&f64::INFINITY);
    FitComparison {
        anchored_iterations: iterations_to(&anchored.data_trace, m_final),
        mean_pose_iterations: iterations_to(&mean_pose.data_trace, m_final),
        anchored_final: a_final,
        mean_pose_final: m_final,
    }
}

pub fn run_anchored_fit(cfg: &AnchoredFitConfig) -> Result<AnchoredFitReport> {
    let model = cfg.model.build()?;
    let train = cfg.data.generate(&model)?;
    let test = cfg.data.with(cfg.problems, cfg.data.seed ^ HELD_OUT_SALT).generate(&model)?;
    let mut priors = new_priors(&model, &cfg.prior, cfg.seed)?;
    if cfg.shape_steps > 0 {
        train_shape_prior(&mut priors, &train, &model, &cfg.plan, cfg.shape_steps, cfg.shape_batch, cfg.seed)?;
    }
    let plan = TrainPlan { seed: cfg.seed, train_pose: true, train_shape: false, ..cfg.plan.clone() };
    train_priors(&mut priors, &train, &model, &plan)?;
    anchored_fit_on(&model, &priors, &test, cfg)
}

pub fn anchored_fit_on(model: &BodyModel, priors: &Priors, problems: &[DatasetRecord], cfg: &AnchoredFitConfig) -> Result<AnchoredFitReport> {
    let (mean_theta, mean_beta) = mean_pose_init(model)?;
    let mut rows = Vec::with_capacity(problems.len());
    for (i, r) in problems.iter().enumerate() {
        let (theta, beta) = if cfg.shape_steps > 0 {
            priors.predict(&r.keypoints, &shapelift::Silhouette::from_mask(&r.silhouette))?
        } else {
            (priors.pose.predict(&r.keypoints)?, ShapeParams::new(r.beta.clone()))
        };
        let anchored = fit(model, &initial_problem(model, r, &theta, &beta, &cfg.fit, true)?)?;
        let mean = fit(model, &initial_problem(model, r, &mean_theta, &mean_beta, &cfg.fit, false)?)?;
        let row = compare_fits(&anchored, &mean);
        log::debug!("fit problem {i}: {row:?}");
        rows.push(row);
    }
    Ok(summarize_fits(rows))
}

pub fn summarize_fits(rows: Vec<FitComparison>) -> AnchoredFitReport {
    let a: Vec<f64> = rows.iter().map(|r| r.anchored_iterations as f64).collect();
    let m: Vec<f64> = rows.iter().map(|r| r.mean_pose_iterations as f64).collect();
    let no_worse = rows.iter().filter(|r| r.anchored_final <= r.mean_pose_final).count() as f64 / rows.len().max(1) as f64;
    let (ma, mm) = (median(&a), median(&m));
    AnchoredFitReport {
        problems: rows,
        median_anchored_iterations: ma,
        median_mean_pose_iterations: mm,
        iteration_ratio: if mm > 0.0 { ma / mm } else { f64::INFINITY },
        anchored_no_worse: no_worse,
    }
}
