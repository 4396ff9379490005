//! Supervision losses with gradients with respect to the predicted input.
//!
//! All losses are plain sums unless [`LossConfig::normalize`] is set.

use serde::{Deserialize, Serialize};

use crate::body_model::{JointSet, Mesh};
use crate::error::check_dim;
use crate::renderer::{Keypoints2D, Silhouette};
use crate::rotation::{pullback, rodrigues_with_jacobian};
use crate::{Error, Mat3, Result, Vec2, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Keypoint weight in the reprojection loss.
    pub mu: f64,
    /// Weight of the vertex (or joint) loss relative to the parameter loss.
    pub param_vertex_mix: f64,
    /// Geman-McClure scale for image-space residuals (pixels).
    pub gm_sigma: f64,
    /// Weight keypoint residuals by the annotation confidences.
    pub use_confidence: bool,
    /// Divide each sum by its number of terms.
    pub normalize: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { mu: 10.0, param_vertex_mix: 1.0, gm_sigma: 100.0, use_confidence: false, normalize: false }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.gm_sigma > 0.0 && self.param_vertex_mix >= 0.0) {
            return Err(Error::InvalidArgument("loss config needs mu > 0, gm_sigma > 0, mix >= 0".into()));
        }
        Ok(())
    }
}

/// Loss value with gradients on the predicted pose and shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLoss {
    pub value: f64,
    pub d_theta: Vec<f64>,
    pub d_beta: Vec<f64>,
}

fn check_params(theta_hat: &[f64], theta: &[f64], beta_hat: &[f64], beta: &[f64]) -> Result<()> {
    check_dim("theta", theta_hat.len(), theta.len())?;
    check_dim("beta", beta_hat.len(), beta.len())?;
    if theta.len() % 3 != 0 {
        return Err(Error::InvalidArgument(format!("theta length {} is not a multiple of 3", theta.len())));
    }
    Ok(())
}

fn beta_term(beta_hat: &[f64], beta: &[f64]) -> (f64, Vec<f64>) {
    let d: Vec<f64> = beta_hat.iter().zip(beta).map(|(a, b)| a - b).collect();
    (d.iter().map(|x| x * x).sum(), d.iter().map(|x| 2.0 * x).collect())
}

/// Squared L2 distance over the concatenated `(θ, β)` residual.
pub fn param_loss_axis_angle(theta_hat: &[f64], theta: &[f64], beta_hat: &[f64], beta: &[f64]) -> Result<ParamLoss> {
    check_params(theta_hat, theta, beta_hat, beta)?;
    let (bv, d_beta) = beta_term(beta_hat, beta);
    let dt: Vec<f64> = theta_hat.iter().zip(theta).map(|(a, b)| a - b).collect();
    Ok(ParamLoss {
        value: dt.iter().map(|x| x * x).sum::<f64>() + bv,
        d_theta: dt.iter().map(|x| 2.0 * x).collect(),
        d_beta,
    })
}

/// Squared Frobenius distance between per-joint rotation matrices plus
/// squared L2 on β.
pub fn param_loss_rotmat(theta_hat: &[f64], theta: &[f64], beta_hat: &[f64], beta: &[f64]) -> Result<ParamLoss> {
    check_params(theta_hat, theta, beta_hat, beta)?;
    let (mut value, d_beta) = beta_term(beta_hat, beta);
    let mut d_theta = vec![0.0; theta.len()];
    for j in 0..theta.len() / 3 {
        let wh = Vec3::new(theta_hat[3 * j], theta_hat[3 * j + 1], theta_hat[3 * j + 2]);
        let w = Vec3::new(theta[3 * j], theta[3 * j + 1], theta[3 * j + 2]);
        if !(wh.iter().all(|x| x.is_finite()) && w.iter().all(|x| x.is_finite())) {
            return Err(Error::InvalidArgument("non-finite axis-angle".into()));
        }
        let (rh, jac) = rodrigues_with_jacobian(&wh);
        let (r, _) = rodrigues_with_jacobian(&w);
        let diff: Mat3 = rh - r;
        value += diff.norm_squared();
        let g = pullback(&jac, &(diff * 2.0));
        d_theta[3 * j..3 * j + 3].copy_from_slice(g.as_slice());
    }
    Ok(ParamLoss { value, d_theta, d_beta })
}

/// `Σ_i ‖a_i − b_i‖²` and its gradient with respect to `a`.
fn point_loss(what: &'static str, a: &[Vec3], b: &[Vec3]) -> Result<(f64, Vec<Vec3>)> {
    check_dim(what, b.len(), a.len())?;
    let grad: Vec<Vec3> = a.iter().zip(b).map(|(x, y)| (x - y) * 2.0).collect();
    let value = a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum();
    Ok((value, grad))
}

pub fn per_vertex_loss(mesh_hat: &Mesh, mesh: &Mesh) -> Result<f64> {
    Ok(per_vertex_loss_grad(mesh_hat, mesh)?.0)
}

pub fn per_vertex_loss_grad(mesh_hat: &Mesh, mesh: &Mesh) -> Result<(f64, Vec<Vec3>)> {
    point_loss("mesh vertices", &mesh_hat.vertices, &mesh.vertices)
}

pub fn joint_loss(joints_hat: &JointSet, joints: &JointSet) -> Result<f64> {
    Ok(joint_loss_grad(joints_hat, joints)?.0)
}

pub fn joint_loss_grad(joints_hat: &JointSet, joints: &JointSet) -> Result<(f64, Vec<Vec3>)> {
    point_loss("joints", &joints_hat.joints, &joints.joints)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReprojectionLoss {
    pub value: f64,
    pub keypoint_term: f64,
    pub silhouette_term: f64,
    pub d_keypoints: Vec<Vec2>,
    pub d_silhouette: Vec<f64>,
}

/// `μ Σ c_i ‖Ŵ_i − W_i‖² + Σ_p (Ŝ_p − S_p)²`, with `c_i = 1` unless
/// confidence weighting is enabled.
pub fn reprojection_loss(
    kp_hat: &Keypoints2D,
    kp: &Keypoints2D,
    sil_hat: &Silhouette,
    sil: &Silhouette,
    cfg: &LossConfig,
) -> Result<ReprojectionLoss> {
    cfg.validate()?;
    check_dim("keypoints", kp.len(), kp_hat.len())?;
    check_dim("silhouette pixels", sil.pixels.len(), sil_hat.pixels.len())?;
    let kn = if cfg.normalize { kp.len().max(1) as f64 } else { 1.0 };
    let sn = if cfg.normalize { sil.pixels.len().max(1) as f64 } else { 1.0 };
    let mut keypoint_term = 0.0;
    let mut d_keypoints = Vec::with_capacity(kp.len());
    for ((ph, p), &c) in kp_hat.points.iter().zip(&kp.points).zip(&kp.confidences) {
        let w = cfg.mu * if cfg.use_confidence { c } else { 1.0 } / kn;
        let d = ph - p;
        keypoint_term += w * d.norm_squared();
        d_keypoints.push(d * (2.0 * w));
    }
    let mut silhouette_term = 0.0;
    let mut d_silhouette = Vec::with_capacity(sil.pixels.len());
    for (a, b) in sil_hat.pixels.iter().zip(&sil.pixels) {
        let d = a - b;
        silhouette_term += d * d / sn;
        d_silhouette.push(2.0 * d / sn);
    }
    Ok(ReprojectionLoss { value: keypoint_term + silhouette_term, keypoint_term, silhouette_term, d_keypoints, d_silhouette })
}

/// `ρ(e) = e² / (e² + σ²)`.
pub fn geman_mcclure(residual: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("Geman-McClure sigma must be positive, got {sigma}")));
    }
    let e2 = residual * residual;
    Ok(e2 / (e2 + sigma * sigma))
}

/// `ρ(e)` and `dρ/de`. The caller guarantees `sigma > 0`.
pub(crate) fn geman_mcclure_grad(residual: f64, sigma: f64) -> (f64, f64) {
    let s2 = sigma * sigma;
    let e2 = residual * residual;
    let den = e2 + s2;
    (e2 / den, 2.0 * residual * s2 / (den * den))
}
