//! File-backed pipeline commands. Each takes its effective config, reads its
//! inputs, writes its artifacts plus a `*.config.json` sidecar, and returns
//! a one-line summary for the terminal.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use shapelift::body_model::{load_model, save_model};
use shapelift::datagen::{load_dataset, save_dataset, DatasetRecord, RecordLayout};
use shapelift::fitter::{fit, FitResult, FitSettings};
use shapelift::metrics::{mean_per_vertex_error, reconstruction_error, segmentation_scores, EvalReport, SampleMetrics};
use shapelift::renderer::{render_silhouette, DEFAULT_TEMPERATURE};
use shapelift::{BodyModel, Mesh, PoseParams, ShapeParams, Silhouette};
use shapelift_nn::train::{train_priors, write_loss_csv, LossRow, TrainPlan};
use shapelift_nn::{PriorConfig, Priors};

use crate::experiments::{
    compare_fits, initial_problem, mean_pose_init, median, new_priors, run_ablation, AblationConfig, AnchoredFitReport,
    DataConfig, ModelConfig,
};
use crate::{Error, Result};

/// Defaults overlaid by an optional JSON config file. Keys the file leaves
/// out keep their defaults; unknown keys are rejected.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|source| Error::Config { path: p.display().to_string(), source })
        }
    }
}

/// Sidecar path next to an output file, or inside an output directory.
pub fn sidecar_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        return out.join("config.json");
    }
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".config.json");
    out.with_file_name(name)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Validation(e.to_string()))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Model(shapelift::Error::Format(format!("{}: {e}", path.display()))))
}

fn write_sidecar<T: Serialize>(out: &Path, cfg: &T) -> Result<()> {
    write_json(&sidecar_path(out), cfg)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_records(model: &BodyModel, path: &Path) -> Result<Vec<DatasetRecord>> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
    }
    Ok(load_dataset(path, &RecordLayout::for_model(model))?)
}

fn load_body_model(path: &Path) -> Result<BodyModel> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
    }
    Ok(load_model(path)?)
}

/// Decimal with 9 significant digits.
pub fn sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{}", if x == 0.0 { 0.0 } else { x });
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (8 - magnitude).max(0) as usize;
    let s = format!("{x:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Wavefront OBJ: `v x y z` lines then 1-based triangular `f` lines.
pub fn write_obj(mesh: &Mesh, mut out: impl Write) -> std::io::Result<()> {
    for v in &mesh.vertices {
        writeln!(out, "v {} {} {}", sig9(v.x), sig9(v.y), sig9(v.z))?;
    }
    for f in mesh.faces.iter() {
        writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}

/// `(θ, β)` estimate for one record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
}

// ---------------------------------------------------------------- make-model

pub fn make_model(cfg: &ModelConfig, out: &Path) -> Result<String> {
    let model = cfg.build()?;
    save_model(&model, out).map_err(|e| match e {
        shapelift::Error::Io(io) => Error::io(out, io),
        e => e.into(),
    })?;
    write_sidecar(out, cfg)?;
    Ok(model_summary(&model))
}

pub fn model_summary(model: &BodyModel) -> String {
    let weights_ok = model.skinning_weights().iter().all(|w| (w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let closed = shapelift::body_model::is_closed_orientable(model.faces());
    format!(
        "model: {} vertices, {} faces, {} joints, {} pose parameters, {} shape coefficients; skinning weights sum to 1: {}; closed orientable surface: {}",
        model.n_vertices(),
        model.faces().len(),
        model.n_joints(),
        model.pose_dim(),
        model.shape_dim(),
        if weights_ok { "ok" } else { "FAILED" },
        if closed { "ok" } else { "no" },
    )
}

// ----------------------------------------------------------------------- gen

pub fn generate(model_path: &Path, cfg: &DataConfig, out: &Path) -> Result<String> {
    let model = load_body_model(model_path)?;
    let records = cfg.generate(&model)?;
    save_dataset(out, &records, &RecordLayout::for_model(&model)).map_err(|e| match e {
        shapelift::Error::Io(io) => Error::io(out, io),
        e => e.into(),
    })?;
    write_sidecar(out, cfg)?;
    Ok(format!("wrote {} records to {}", records.len(), out.display()))
}

// --------------------------------------------------------------------- train

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub prior: PriorConfig,
    /// Pose-prior plan (its seed is replaced by `seed`). When `shape_steps`
    /// is 0 the plan also trains the shape prior.
    pub plan: TrainPlan,
    /// Separate shape-prior steps run before the pose prior is trained.
    pub shape_steps: usize,
    pub shape_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let ab = AblationConfig::default();
        Self { seed: 0, prior: ab.prior, plan: TrainPlan { train_shape: false, ..ab.plan }, shape_steps: ab.shape_steps, shape_batch: ab.shape_batch }
    }
}

pub fn train(model_path: &Path, data_path: &Path, cfg: &TrainConfig, out_dir: &Path) -> Result<String> {
    let model = load_body_model(model_path)?;
    let records = load_records(&model, data_path)?;
    let mut priors = new_priors(&model, &cfg.prior, cfg.seed)?;
    let mut log: Vec<LossRow> = Vec::new();
    let pose_plan = if cfg.shape_steps > 0 {
        let shape_plan = TrainPlan {
            phase1_steps: cfg.shape_steps,
            phase2_steps: 0,
            batch_size: cfg.shape_batch,
            variant: shapelift_nn::train::LossVariant::RotMat,
            seed: cfg.seed,
            train_pose: false,
            train_shape: true,
            ..cfg.plan.clone()
        };
        log.extend(train_priors(&mut priors, &records, &model, &shape_plan)?);
        TrainPlan { seed: cfg.seed, train_pose: true, train_shape: false, ..cfg.plan.clone() }
    } else {
        TrainPlan { seed: cfg.seed, ..cfg.plan.clone() }
    };
    let offset = log.len();
    log.extend(train_priors(&mut priors, &records, &model, &pose_plan)?.into_iter().map(|r| LossRow { step: r.step + offset, ..r }));
    ensure_dir(out_dir)?;
    priors.save(out_dir)?;
    let csv = out_dir.join("loss.csv");
    let file = fs::File::create(&csv).map_err(|e| Error::io(&csv, e))?;
    write_loss_csv(std::io::BufWriter::new(file), &log).map_err(|e| Error::io(&csv, e))?;
    write_sidecar(out_dir, cfg)?;
    let last = log.last().map_or(f64::NAN, |r| r.total);
    Ok(format!("trained {} steps, final batch loss {last:.6}; checkpoints in {}", log.len(), out_dir.display()))
}

// ------------------------------------------------------------------- predict

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    pub seed: u64,
}

pub fn predict_all(priors: &Priors, records: &[DatasetRecord]) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(64) {
        let kps: Vec<_> = chunk.iter().map(|r| &r.keypoints).collect();
        let sils: Vec<Silhouette> = chunk.iter().map(|r| Silhouette::from_mask(&r.silhouette)).collect();
        let thetas = priors.pose.predict_batch(&kps)?;
        let betas = priors.shape.predict_batch(&sils.iter().collect::<Vec<_>>())?;
        out.extend(thetas.into_iter().zip(betas).map(|(t, b)| Prediction { theta: t.theta, beta: b.beta }));
    }
    Ok(out)
}

pub fn predict(model_path: &Path, priors_dir: &Path, data_path: &Path, cfg: &PredictConfig, out: &Path) -> Result<String> {
    let model = load_body_model(model_path)?;
    let records = load_records(&model, data_path)?;
    let priors = Priors::load(priors_dir)?;
    if priors.pose.pose_dim() != model.pose_dim() || priors.shape.shape_dim() != model.shape_dim() {
        return Err(Error::Validation("priors do not match the body model".into()));
    }
    let preds = predict_all(&priors, &records)?;
    write_json(out, &preds)?;
    write_sidecar(out, cfg)?;
    Ok(format!("wrote {} predictions to {}", preds.len(), out.display()))
}

fn check_predictions(model: &BodyModel, preds: &[Prediction], n: usize) -> Result<()> {
    if preds.len() < n {
        return Err(Error::Validation(format!("{} predictions for {n} records", preds.len())));
    }
    for p in preds {
        model.check_params(&ShapeParams::new(p.beta.clone()), &PoseParams::new(p.theta.clone()))?;
    }
    Ok(())
}

// ----------------------------------------------------------------------- fit

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub seed: u64,
    /// Fit only the first `limit` records.
    pub limit: Option<usize>,
    pub settings: FitSettings,
    /// With an anchor file, also fit from the mean pose and report the
    /// iteration ratio.
    pub compare: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { seed: 0, limit: None, settings: crate::experiments::AnchoredFitConfig::default().fit, compare: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOutput {
    pub results: Vec<FitResult>,
    pub median_iterations: f64,
    pub comparison: Option<AnchoredFitReport>,
}

pub fn fit_records(model: &BodyModel, records: &[DatasetRecord], anchors: Option<&[Prediction]>, cfg: &FitConfig) -> Result<FitOutput> {
    let (mean_theta, mean_beta) = mean_pose_init(model)?;
    let mut results = Vec::with_capacity(records.len());
    let mut comparisons = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let result = match anchors {
            Some(p) => {
                let (theta, beta) = (PoseParams::new(p[i].theta.clone()), ShapeParams::new(p[i].beta.clone()));
                let anchored = fit(model, &initial_problem(model, r, &theta, &beta, &cfg.settings, true)?)?;
                if cfg.compare {
                    let mean = fit(model, &initial_problem(model, r, &mean_theta, &mean_beta, &cfg.settings, false)?)?;
                    comparisons.push(compare_fits(&anchored, &mean));
                }
                anchored
            }
            None => fit(model, &initial_problem(model, r, &mean_theta, &mean_beta, &cfg.settings, false)?)?,
        };
        results.push(result);
    }
    let iters: Vec<f64> = results.iter().map(|r| r.iterations as f64).collect();
    let comparison = (!comparisons.is_empty()).then(|| crate::experiments::summarize_fits(comparisons));
    Ok(FitOutput { median_iterations: median(&iters), results, comparison })
}

pub fn fit_command(model_path: &Path, data_path: &Path, anchor: Option<&Path>, cfg: &FitConfig, out: &Path) -> Result<String> {
    let model = load_body_model(model_path)?;
    let mut records = load_records(&model, data_path)?;
    if let Some(n) = cfg.limit {
        records.truncate(n);
    }
    let anchors: Option<Vec<Prediction>> = anchor.map(read_json).transpose()?;
    if let Some(a) = &anchors {
        check_predictions(&model, a, records.len())?;
    }
    if cfg.compare && anchors.is_none() {
        return Err(Error::Validation("--compare needs --anchor".into()));
    }
    let output = fit_records(&model, &records, anchors.as_deref(), cfg)?;
    write_json(out, &output)?;
    write_sidecar(out, cfg)?;
    let mut msg = format!("fitted {} problems, median iterations {}", output.results.len(), output.median_iterations);
    if let Some(c) = &output.comparison {
        msg.push_str(&format!(
            "; anchored/mean-pose iteration ratio {:.3} ({} vs {}), anchored no worse on {:.0}%",
            c.iteration_ratio,
            c.median_anchored_iterations,
            c.median_mean_pose_iterations,
            100.0 * c.anchored_no_worse
        ));
    }
    Ok(msg)
}

// ---------------------------------------------------------------------- eval

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seed: u64,
}

/// Metrics of one estimate against its record; the silhouette is rendered
/// with the record's camera.
pub fn sample_metrics(model: &BodyModel, record: &DatasetRecord, pred: &Prediction) -> Result<SampleMetrics> {
    let (mesh_hat, joints_hat) = model.forward(&ShapeParams::new(pred.beta.clone()), &PoseParams::new(pred.theta.clone()))?;
    let (mesh, joints) = model.forward(&ShapeParams::new(record.beta.clone()), &PoseParams::new(record.theta.clone()))?;
    let (sil, _) = render_silhouette(&mesh_hat, &record.camera, DEFAULT_TEMPERATURE)?;
    let (seg_accuracy, seg_f1) = segmentation_scores(&sil.binarized(), &record.silhouette)?;
    Ok(SampleMetrics {
        mean_per_vertex_error: mean_per_vertex_error(&mesh_hat, &mesh)?,
        reconstruction_error: reconstruction_error(&joints_hat, &joints)?,
        seg_accuracy,
        seg_f1,
    })
}

pub fn evaluate(model: &BodyModel, records: &[DatasetRecord], preds: &[Prediction]) -> Result<EvalReport> {
    check_predictions(model, preds, records.len())?;
    let samples = records.iter().zip(preds).map(|(r, p)| sample_metrics(model, r, p)).collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::aggregate(&samples)?)
}

pub fn eval_command(model_path: &Path, data_path: &Path, preds_path: &Path, cfg: &EvalConfig, out: &Path) -> Result<String> {
    let model = load_body_model(model_path)?;
    let records = load_records(&model, data_path)?;
    let preds: Vec<Prediction> = read_json(preds_path)?;
    let report = evaluate(&model, &records, &preds)?;
    write_json(out, &report)?;
    write_sidecar(out, cfg)?;
    Ok(format!(
        "mean per-vertex error {:.6}, reconstruction error {:.6}, segmentation accuracy {:.4}, F1 {:.4} over {} samples",
        report.mean_per_vertex_error, report.reconstruction_error, report.seg_accuracy, report.seg_f1, report.samples
    ))
}

// -------------------------------------------------------------------- render

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub seed: u64,
    /// Record indices to render; all records when empty.
    pub indices: Vec<usize>,
    pub temperature: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { seed: 0, indices: Vec::new(), temperature: DEFAULT_TEMPERATURE }
    }
}

/// Mesh and binarized silhouette of `(θ, β)` under the record's camera.
pub fn render_record(model: &BodyModel, record: &DatasetRecord, pred: Option<&Prediction>, temperature: f64) -> Result<(Mesh, Silhouette)> {
    let (theta, beta) = match pred {
        Some(p) => (p.theta.clone(), p.beta.clone()),
        None => (record.theta.clone(), record.beta.clone()),
    };
    let (mesh, _) = model.forward(&ShapeParams::new(beta), &PoseParams::new(theta))?;
    let (sil, _) = render_silhouette(&mesh, &record.camera, temperature)?;
    Ok((mesh, Silhouette::from_mask(&sil.binarized())))
}

pub fn render_command(model_path: &Path, data_path: &Path, preds_path: Option<&Path>, cfg: &RenderConfig, out_dir: &Path) -> Result<String> {
    let model = load_body_model(model_path)?;
    let records = load_records(&model, data_path)?;
    let preds: Option<Vec<Prediction>> = preds_path.map(read_json).transpose()?;
    if let Some(p) = &preds {
        check_predictions(&model, p, records.len())?;
    }
    let indices: Vec<usize> = if cfg.indices.is_empty() { (0..records.len()).collect() } else { cfg.indices.clone() };
    if let Some(&bad) = indices.iter().find(|&&i| i >= records.len()) {
        return Err(Error::Validation(format!("record index {bad} out of range ({} records)", records.len())));
    }
    ensure_dir(out_dir)?;
    for &i in &indices {
        let (mesh, sil) = render_record(&model, &records[i], preds.as_ref().map(|p| &p[i]), cfg.temperature)?;
        let obj = out_dir.join(format!("record_{i:05}.obj"));
        let f = fs::File::create(&obj).map_err(|e| Error::io(&obj, e))?;
        write_obj(&mesh, std::io::BufWriter::new(f)).map_err(|e| Error::io(&obj, e))?;
        let pgm = out_dir.join(format!("record_{i:05}.pgm"));
        let f = fs::File::create(&pgm).map_err(|e| Error::io(&pgm, e))?;
        sil.write_pgm(std::io::BufWriter::new(f))?;
    }
    write_sidecar(out_dir, cfg)?;
    Ok(format!("rendered {} records into {}", indices.len(), out_dir.display()))
}

// -------------------------------------------------------------------- ablate

pub fn ablate_command(cfg: &AblationConfig, out_dir: &Path) -> Result<String> {
    let report = run_ablation(cfg)?;
    ensure_dir(out_dir)?;
    write_json(&out_dir.join("ablation.json"), &report)?;
    let table = report.table();
    let path = out_dir.join("ablation.txt");
    fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    write_sidecar(out_dir, cfg)?;
    Ok(table)
}
