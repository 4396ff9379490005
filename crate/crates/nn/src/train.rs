//! Two-phase supervised training of the priors.
//!
//! Phase 1 minimizes a parameter loss on `(θ, β)`. Phase 2 keeps it and,
//! for the vertex or joint variants, adds the mesh (or joint) loss of the
//! body model evaluated at the prediction, weighted by `mix`. Batch losses
//! are averages of per-sample sums.

use std::io::Write;

use serde::{Deserialize, Serialize};
use shapelift::datagen::DatasetRecord;
use shapelift::losses::{joint_loss_grad, param_loss_axis_angle, param_loss_rotmat, per_vertex_loss_grad, ParamLoss};
use shapelift::metrics::mean_per_vertex_error;
use shapelift::rng::{purpose, StreamRng};
use shapelift::{BodyModel, Keypoints2D, PoseParams, ShapeParams, Silhouette, Vec3};

use crate::optim::{DEFAULT_DECAY, DEFAULT_EPS, DEFAULT_LR};
use crate::{Error, Mode, Priors, Result, Rmsprop, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    AxisAngle,
    RotMat,
    RotMatVertex,
    RotMatJoint,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [Self::AxisAngle, Self::RotMat, Self::RotMatVertex, Self::RotMatJoint];

    pub fn name(self) -> &'static str {
        match self {
            Self::AxisAngle => "axis_angle",
            Self::RotMat => "rot_mat",
            Self::RotMatVertex => "rot_mat_vertex",
            Self::RotMatJoint => "rot_mat_joint",
        }
    }
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown loss variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub batch_size: usize,
    pub variant: LossVariant,
    /// Weight of the mesh loss relative to the parameter loss in phase 2.
    pub mix: f64,
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    /// Learning rate at the last step as a fraction of `lr`, reached
    /// linearly; 1 keeps it constant.
    pub final_lr_fraction: f64,
    pub seed: u64,
    /// Mirror half of the silhouettes seen by the shape prior.
    pub flip_augment: bool,
    /// Train the pose prior; when off, losses use the true `θ`.
    pub train_pose: bool,
    /// Train the shape prior; when off, losses use the true `β`.
    pub train_shape: bool,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            phase1_steps: 4000,
            phase2_steps: 6000,
            batch_size: 256,
            variant: LossVariant::RotMatVertex,
            mix: 1.0,
            lr: DEFAULT_LR,
            decay: DEFAULT_DECAY,
            eps: DEFAULT_EPS,
            final_lr_fraction: 1.0,
            seed: 0,
            flip_augment: true,
            train_pose: true,
            train_shape: true,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.phase1_steps + self.phase2_steps == 0 || self.batch_size == 0 || !(self.mix >= 0.0) {
            return Err(Error::InvalidArgument("train plan needs steps > 0, batch > 0 and mix >= 0".into()));
        }
        if !self.train_pose && !self.train_shape {
            return Err(Error::InvalidArgument("train plan trains neither prior".into()));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::InvalidArgument("final_lr_fraction must be in (0, 1]".into()));
        }
        Rmsprop::new(self.lr, self.decay, self.eps).map(|_| ())
    }
}

/// One row of the training loss log (batch means).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub phase: u8,
    pub param: f64,
    pub mesh: f64,
    pub reprojection: f64,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,phase,param,mesh,reprojection,total";

pub fn write_loss_csv(mut out: impl Write, rows: &[LossRow]) -> std::io::Result<()> {
    writeln!(out, "{LOSS_CSV_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{},{:e},{:e},{:e},{:e}", r.step, r.phase, r.param, r.mesh, r.reprojection, r.total)?;
    }
    Ok(())
}

/// Optimizer state for both nets.
#[derive(Clone, Debug)]
pub struct Optimizers {
    pub pose: Rmsprop,
    pub shape: Rmsprop,
}

impl Optimizers {
    pub fn new(lr: f64, decay: f64, eps: f64) -> Result<Self> {
        Ok(Self { pose: Rmsprop::new(lr, decay, eps)?, shape: Rmsprop::new(lr, decay, eps)? })
    }
}

pub(crate) fn check_records(model: &BodyModel, priors: &Priors, records: &[DatasetRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    if priors.pose.pose_dim() != model.pose_dim() || priors.shape.shape_dim() != model.shape_dim() {
        return Err(Error::Shape("prior outputs do not match the body model".into()));
    }
    for r in records {
        if r.theta.len() != model.pose_dim() || r.beta.len() != model.shape_dim() || r.keypoints.len() != priors.pose.n_keypoints() {
            return Err(Error::Shape("dataset record does not match the model or the priors".into()));
        }
        if r.silhouette.size != priors.shape.image_size() {
            return Err(Error::Shape("dataset silhouettes do not match the shape prior".into()));
        }
    }
    Ok(())
}

pub(crate) fn draw_batch(seed: u64, stream: u64, n: usize, size: usize) -> Vec<usize> {
    let mut rng = StreamRng::new(seed, purpose::BATCH, stream);
    (0..size).map(|_| rng.below(n)).collect()
}

/// Forward activations and per-sample outputs of both nets for one batch.
pub(crate) struct BatchPass {
    pub pose_tape: Option<crate::Tape>,
    pub shape_tape: Option<crate::Tape>,
    pub thetas: Vec<Vec<f64>>,
    pub betas: Vec<Vec<f64>>,
}

pub(crate) fn batch_forward(
    priors: &Priors,
    keypoints: &[&Keypoints2D],
    silhouettes: &[Silhouette],
    mirror: &[bool],
    train: (bool, bool),
    fallback: (&[&[f64]], &[&[f64]]),
    stream: u64,
) -> Result<BatchPass> {
    let (train_pose, train_shape) = train;
    let (fallback_thetas, fallback_betas) = fallback;
    let (thetas, pose_tape) = if train_pose {
        let (out, tape) = priors.pose.net.forward(&priors.pose.encode(keypoints)?, Mode::Train { stream })?;
        ((0..keypoints.len()).map(|i| out.item(i).to_vec()).collect(), Some(tape))
    } else {
        (fallback_thetas.iter().map(|t| t.to_vec()).collect(), None)
    };
    let (betas, shape_tape) = if train_shape {
        let refs: Vec<&Silhouette> = silhouettes.iter().collect();
        let (out, tape) = priors.shape.net.forward(&priors.shape.encode(&refs, mirror)?, Mode::Train { stream })?;
        ((0..refs.len()).map(|i| out.item(i).to_vec()).collect(), Some(tape))
    } else {
        (fallback_betas.iter().map(|b| b.to_vec()).collect(), None)
    };
    Ok(BatchPass { pose_tape, shape_tape, thetas, betas })
}

/// Backpropagates per-sample output gradients and takes one optimizer step.
pub(crate) fn batch_update(
    priors: &mut Priors,
    opt: &mut Optimizers,
    pass: &BatchPass,
    d_thetas: &[Vec<f64>],
    d_betas: &[Vec<f64>],
) -> Result<()> {
    let n = d_thetas.len();
    if let Some(tape) = &pass.pose_tape {
        let up = Tensor::new(vec![n, priors.pose.pose_dim()], d_thetas.concat())?;
        let g = priors.pose.net.backward_params(tape, &up)?;
        opt.pose.step(priors.pose.net.params_mut(), &g)?;
        priors.pose.net.step += 1;
    }
    if let Some(tape) = &pass.shape_tape {
        let up = Tensor::new(vec![n, priors.shape.shape_dim()], d_betas.concat())?;
        let g = priors.shape.net.backward_params(tape, &up)?;
        opt.shape.step(priors.shape.net.params_mut(), &g)?;
        priors.shape.net.step += 1;
    }
    Ok(())
}

/// Per-sample supervised loss for the given phase; returns
/// `(param, mesh, dθ, dβ)` with gradients already divided by `scale`.
pub(crate) fn supervised_sample(
    model: &BodyModel,
    variant: LossVariant,
    phase: u8,
    mix: f64,
    theta_hat: &[f64],
    beta_hat: &[f64],
    record: &DatasetRecord,
    scale: f64,
) -> Result<(f64, f64, Vec<f64>, Vec<f64>)> {
    let ParamLoss { value, mut d_theta, mut d_beta } = match variant {
        LossVariant::AxisAngle => param_loss_axis_angle(theta_hat, &record.theta, beta_hat, &record.beta)?,
        _ => param_loss_rotmat(theta_hat, &record.theta, beta_hat, &record.beta)?,
    };
    let mut mesh = 0.0;
    let uses_mesh = matches!(variant, LossVariant::RotMatVertex | LossVariant::RotMatJoint);
    if phase == 2 && uses_mesh && mix > 0.0 {
        let bh = ShapeParams::new(beta_hat.to_vec());
        let th = PoseParams::new(theta_hat.to_vec());
        let pass = model.forward_pass(&bh, &th)?;
        let (truth_mesh, truth_joints) = model.forward(&ShapeParams::new(record.beta.clone()), &PoseParams::new(record.theta.clone()))?;
        let grads = if variant == LossVariant::RotMatVertex {
            let (v, g) = per_vertex_loss_grad(&pass.mesh, &truth_mesh)?;
            mesh = v;
            pass.vjp(model, &g, None)?
        } else {
            let (v, g) = joint_loss_grad(&pass.joints, &truth_joints)?;
            mesh = v;
            let zeros = vec![Vec3::zeros(); model.n_vertices()];
            pass.vjp(model, &zeros, Some(&g))?
        };
        for (d, g) in d_theta.iter_mut().zip(&grads.theta) {
            *d += mix * g;
        }
        for (d, g) in d_beta.iter_mut().zip(&grads.beta) {
            *d += mix * g;
        }
        mesh *= mix;
    }
    for d in d_theta.iter_mut().chain(d_beta.iter_mut()) {
        *d /= scale;
    }
    Ok((value, mesh, d_theta, d_beta))
}

/// One supervised step on `batch`; returns the batch-mean losses.
pub(crate) fn supervised_step(
    priors: &mut Priors,
    opt: &mut Optimizers,
    model: &BodyModel,
    records: &[DatasetRecord],
    batch: &[usize],
    plan: &TrainPlan,
    phase: u8,
    stream: u64,
) -> Result<(f64, f64)> {
    let n = batch.len() as f64;
    let kps: Vec<&Keypoints2D> = batch.iter().map(|&i| &records[i].keypoints).collect();
    let sils: Vec<Silhouette> = if plan.train_shape {
        batch.iter().map(|&i| Silhouette::from_mask(&records[i].silhouette)).collect()
    } else {
        Vec::new()
    };
    let mut mrng = StreamRng::new(plan.seed, purpose::EXPERIMENT, stream);
    let mirror: Vec<bool> = batch.iter().map(|_| plan.flip_augment && mrng.bernoulli(0.5)).collect();
    let thetas: Vec<&[f64]> = batch.iter().map(|&i| records[i].theta.as_slice()).collect();
    let betas: Vec<&[f64]> = batch.iter().map(|&i| records[i].beta.as_slice()).collect();
    let pass = batch_forward(priors, &kps, &sils, &mirror, (plan.train_pose, plan.train_shape), (&thetas, &betas), stream)?;
    let (mut param, mut mesh) = (0.0, 0.0);
    let mut d_thetas = Vec::with_capacity(batch.len());
    let mut d_betas = Vec::with_capacity(batch.len());
    for (k, &i) in batch.iter().enumerate() {
        let (p, m, dt, db) =
            supervised_sample(model, plan.variant, phase, plan.mix, &pass.thetas[k], &pass.betas[k], &records[i], n)?;
        param += p / n;
        mesh += m / n;
        d_thetas.push(dt);
        d_betas.push(db);
    }
    if !(param + mesh).is_finite() {
        return Err(Error::Model(shapelift::Error::NonFinite("training loss".into())));
    }
    batch_update(priors, opt, &pass, &d_thetas, &d_betas)?;
    Ok((param, mesh))
}

pub(crate) fn annealed(lr: f64, fraction: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr;
    }
    lr * (1.0 - (1.0 - fraction) * step as f64 / (total - 1) as f64)
}

/// Trains both priors in place from their current weights; returns the
/// per-step loss log.
pub fn train_priors(priors: &mut Priors, records: &[DatasetRecord], model: &BodyModel, plan: &TrainPlan) -> Result<Vec<LossRow>> {
    plan.validate()?;
    check_records(model, priors, records)?;
    let mut opt = Optimizers::new(plan.lr, plan.decay, plan.eps)?;
    let total = plan.phase1_steps + plan.phase2_steps;
    let mut log = Vec::with_capacity(total);
    for step in 0..total {
        let phase = if step < plan.phase1_steps { 1 } else { 2 };
        let lr = annealed(plan.lr, plan.final_lr_fraction, step, total);
        opt.pose.lr = lr;
        opt.shape.lr = lr;
        let batch = draw_batch(plan.seed, step as u64, records.len(), plan.batch_size);
        let (param, mesh) = supervised_step(priors, &mut opt, model, records, &batch, plan, phase, step as u64)?;
        log.push(LossRow { step, phase, param, mesh, reprojection: 0.0, total: param + mesh });
        if step % 500 == 0 {
            log::debug!("step {step} phase {phase} param {param:.4} mesh {mesh:.4}");
        }
    }
    Ok(log)
}

/// Mean per-vertex error of the priors' predictions over `records`. With
/// `true_shape` the pose is evaluated on the true `β`.
pub fn evaluate_mpve(priors: &Priors, records: &[DatasetRecord], model: &BodyModel, true_shape: bool) -> Result<f64> {
    check_records(model, priors, records)?;
    let mut total = 0.0;
    for chunk in records.chunks(64) {
        let kps: Vec<&Keypoints2D> = chunk.iter().map(|r| &r.keypoints).collect();
        let thetas = priors.pose.predict_batch(&kps)?;
        let betas = if true_shape {
            chunk.iter().map(|r| ShapeParams::new(r.beta.clone())).collect()
        } else {
            let sils: Vec<Silhouette> = chunk.iter().map(|r| Silhouette::from_mask(&r.silhouette)).collect();
            priors.shape.predict_batch(&sils.iter().collect::<Vec<_>>())?
        };
        for ((r, th), bh) in chunk.iter().zip(&thetas).zip(&betas) {
            let (est, _) = model.forward(bh, th)?;
            let (truth, _) = model.forward(&ShapeParams::new(r.beta.clone()), &PoseParams::new(r.theta.clone()))?;
            total += mean_per_vertex_error(&est, &truth)?;
        }
    }
    Ok(total / records.len() as f64)
}
