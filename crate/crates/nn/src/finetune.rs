//! End-to-end refinement of the priors from 2D evidence only.
//!
//! Predictions go through the body model, the camera and the soft
//! rasterizer; the reprojection loss is backpropagated into both nets. Steps
//! alternate with ordinary supervised updates on 3D-labelled data when that
//! data is supplied. Each objective keeps its own optimizer state so the
//! scale of one does not shrink the steps of the other.

use serde::{Deserialize, Serialize};
use shapelift::datagen::DatasetRecord;
use shapelift::losses::{reprojection_loss, LossConfig};
use shapelift::renderer::{project_joints, Raster, DEFAULT_TEMPERATURE};
use shapelift::{BodyModel, Camera, Keypoints2D, PoseParams, ShapeParams, Silhouette, Vec3};

use crate::optim::{DEFAULT_DECAY, DEFAULT_EPS, DEFAULT_LR};
use crate::train::{batch_forward, batch_update, check_records, draw_batch, supervised_step, LossRow, LossVariant, Optimizers, TrainPlan};
use crate::{Error, Priors, Result};

/// 2D-only training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation2D {
    pub keypoints: Keypoints2D,
    pub silhouette: Silhouette,
    pub camera: Option<Camera>,
}

impl From<&DatasetRecord> for Observation2D {
    fn from(r: &DatasetRecord) -> Self {
        Self { keypoints: r.keypoints.clone(), silhouette: Silhouette::from_mask(&r.silhouette), camera: Some(r.camera) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetunePlan {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    pub loss: LossConfig,
    /// Scale of the reprojection loss.
    pub weight: f64,
    pub temperature: f64,
    /// Interleave supervised updates (odd steps) when 3D data is given.
    pub alternate: bool,
    /// Variant and mix of the interleaved supervised updates.
    pub variant: LossVariant,
    pub mix: f64,
    pub train_shape: bool,
    /// Joint index of each observed keypoint; all joints when absent.
    pub keypoint_subset: Option<Vec<usize>>,
}

impl Default for FinetunePlan {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            seed: 0,
            lr: DEFAULT_LR,
            decay: DEFAULT_DECAY,
            eps: DEFAULT_EPS,
            loss: LossConfig { use_confidence: true, ..LossConfig::default() },
            weight: 1.0,
            temperature: DEFAULT_TEMPERATURE,
            alternate: true,
            variant: LossVariant::RotMatVertex,
            mix: 1.0,
            train_shape: true,
            keypoint_subset: None,
        }
    }
}

// Batch streams of the reprojection steps live above the supervised ones.
const REPROJECTION_STREAM: u64 = 1 << 40;

/// Reprojection loss of one prediction and its gradients on `(θ, β)`.
pub fn reprojection_sample(
    model: &BodyModel,
    theta_hat: &[f64],
    beta_hat: &[f64],
    obs: &Observation2D,
    plan: &FinetunePlan,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let camera = obs.camera.ok_or_else(|| Error::InvalidArgument("observation has no camera initialization".into()))?;
    let pass = model.forward_pass(&ShapeParams::new(beta_hat.to_vec()), &PoseParams::new(theta_hat.to_vec()))?;
    let kp_hat = project_joints(&pass.joints, &camera, plan.keypoint_subset.as_deref())?;
    let raster = Raster::new(&pass.mesh, &camera, plan.temperature)?;
    let loss = reprojection_loss(&kp_hat, &obs.keypoints, raster.silhouette(), &obs.silhouette, &plan.loss)?;
    let (g_verts, _) = raster.vjp(&pass.mesh, &loss.d_silhouette)?;
    let mut g_joints = vec![Vec3::zeros(); model.n_joints()];
    let mut cam_grad = [0.0; 3];
    for (i, g) in loss.d_keypoints.iter().enumerate() {
        let j = plan.keypoint_subset.as_ref().map_or(i, |s| s[i]);
        g_joints[j] += camera.project_vjp(&pass.joints.joints[j], g, &mut cam_grad);
    }
    let grads = pass.vjp(model, &g_verts, Some(&g_joints))?;
    Ok((loss.value, grads.theta, grads.beta))
}

/// Refines `priors` in place; returns the loss log (phase 3 rows are
/// reprojection steps, phase 2 rows interleaved supervised steps).
pub fn finetune_reprojection(
    priors: &mut Priors,
    observations: &[Observation2D],
    supervised: &[DatasetRecord],
    model: &BodyModel,
    plan: &FinetunePlan,
) -> Result<Vec<LossRow>> {
    if plan.steps == 0 {
        return Ok(Vec::new());
    }
    if observations.is_empty() || plan.batch_size == 0 || !(plan.weight > 0.0) {
        return Err(Error::InvalidArgument("finetuning needs observations, batch > 0 and weight > 0".into()));
    }
    if observations.iter().any(|o| o.camera.is_none()) {
        return Err(Error::InvalidArgument("observation has no camera initialization".into()));
    }
    plan.loss.validate()?;
    let alternate = plan.alternate && !supervised.is_empty();
    if alternate {
        check_records(model, priors, supervised)?;
    }
    let sup_plan = TrainPlan {
        batch_size: plan.batch_size,
        variant: plan.variant,
        mix: plan.mix,
        lr: plan.lr,
        decay: plan.decay,
        eps: plan.eps,
        seed: plan.seed,
        flip_augment: false,
        train_shape: plan.train_shape,
        ..TrainPlan::default()
    };
    let mut reproj_opt = Optimizers::new(plan.lr, plan.decay, plan.eps)?;
    let mut sup_opt = Optimizers::new(plan.lr, plan.decay, plan.eps)?;
    let mut log = Vec::with_capacity(plan.steps);
    for step in 0..plan.steps {
        if alternate && step % 2 == 1 {
            let batch = draw_batch(plan.seed, step as u64, supervised.len(), plan.batch_size);
            let (param, mesh) = supervised_step(priors, &mut sup_opt, model, supervised, &batch, &sup_plan, 2, step as u64)?;
            log.push(LossRow { step, phase: 2, param, mesh, reprojection: 0.0, total: param + mesh });
            continue;
        }
        let stream = REPROJECTION_STREAM + step as u64;
        let batch = draw_batch(plan.seed, stream, observations.len(), plan.batch_size);
        let kps: Vec<&Keypoints2D> = batch.iter().map(|&i| &observations[i].keypoints).collect();
        let sils: Vec<Silhouette> = batch.iter().map(|&i| observations[i].silhouette.clone()).collect();
        let mut pass = batch_forward(priors, &kps, &sils, &[], (true, true), (&[], &[]), stream)?;
        if !plan.train_shape {
            pass.shape_tape = None;
        }
        let n = batch.len() as f64;
        let mut value = 0.0;
        let mut d_thetas = Vec::with_capacity(batch.len());
        let mut d_betas = Vec::with_capacity(batch.len());
        for (k, &i) in batch.iter().enumerate() {
            let (v, dt, db) = reprojection_sample(model, &pass.thetas[k], &pass.betas[k], &observations[i], plan)?;
            value += plan.weight * v / n;
            d_thetas.push(dt.into_iter().map(|g| g * plan.weight / n).collect());
            d_betas.push(db.into_iter().map(|g| g * plan.weight / n).collect());
        }
        if !value.is_finite() {
            return Err(Error::Model(shapelift::Error::NonFinite("reprojection loss".into())));
        }
        batch_update(priors, &mut reproj_opt, &pass, &d_thetas, &d_betas)?;
        log.push(LossRow { step, phase: 3, param: 0.0, mesh: 0.0, reprojection: value, total: value });
    }
    Ok(log)
}
