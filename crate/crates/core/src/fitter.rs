//! Single-stage robust fitting of `(θ, β, camera)` to 2D evidence.
//!
//! The energy is
//! `w_k Σ ρ(‖Π(J_i) − W_i‖; σ_k) + w_s ‖Ŝ − S‖² + w_a Σ ρ(θ_i − θ̄_i; σ_a) + w_β ‖β‖²`
//! with `ρ` the Geman-McClure penalty and `θ̄` an optional anchor pose.
//! It is minimized by gradient descent with Armijo backtracking. Each
//! step is scaled by the inverse diagonal of a Gauss-Newton approximation,
//! recomputed every iteration, so pose, shape and camera move at comparable
//! rates.

use serde::{Deserialize, Serialize};

use crate::body_model::{BodyModel, PoseParams, ShapeParams};
use crate::error::check_dim;
use crate::losses::geman_mcclure_grad;
use crate::renderer::{Camera, Keypoints2D, Raster, Silhouette, DEFAULT_TEMPERATURE};
use crate::{Error, Result, Vec2, Vec3};

const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitWeights {
    pub keypoint: f64,
    pub silhouette: f64,
    pub anchor: f64,
    pub beta_prior: f64,
}

impl Default for FitWeights {
    fn default() -> Self {
        Self { keypoint: 1.0, silhouette: 1e-2, anchor: 1.0, beta_prior: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSettings {
    pub weights: FitWeights,
    /// Geman-McClure scale of keypoint residuals (pixels).
    pub sigma_keypoint: f64,
    /// Geman-McClure scale of the anchor term (radians).
    pub sigma_anchor: f64,
    pub max_iters: usize,
    /// Stop when the relative decrease of one step falls below this.
    pub tolerance: f64,
    pub temperature: f64,
    /// Weight keypoint terms by the observed confidences.
    pub use_confidence: bool,
    pub optimize_camera: bool,
    /// Joint index of each observed keypoint; all joints when absent.
    pub keypoint_subset: Option<Vec<usize>>,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            weights: FitWeights::default(),
            sigma_keypoint: 100.0,
            sigma_anchor: 0.5,
            max_iters: 200,
            tolerance: 1e-7,
            temperature: DEFAULT_TEMPERATURE,
            use_confidence: false,
            optimize_camera: true,
            keypoint_subset: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitProblem {
    pub keypoints: Keypoints2D,
    #[serde(default)]
    pub silhouette: Option<Silhouette>,
    pub init_theta: Vec<f64>,
    pub init_beta: Vec<f64>,
    pub init_camera: Camera,
    #[serde(default)]
    pub anchor: Option<Vec<f64>>,
    #[serde(default)]
    pub settings: FitSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    pub camera: Camera,
    /// Total energy at the start and after each accepted step.
    pub objective_trace: Vec<f64>,
    /// Energy without the anchor term, aligned with `objective_trace`.
    pub data_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Energy broken into its terms (weights applied).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Terms {
    pub keypoint: f64,
    pub silhouette: f64,
    pub anchor: f64,
    pub beta: f64,
}

impl Terms {
    pub fn total(&self) -> f64 {
        self.keypoint + self.silhouette + self.anchor + self.beta
    }

    /// Everything except the anchor term.
    pub fn data(&self) -> f64 {
        self.keypoint + self.silhouette + self.beta
    }
}

/// `Σ_i ρ(θ_i − θ̄_i; σ)`.
pub fn anchor_term(theta: &[f64], theta_init: &[f64], sigma: f64) -> Result<f64> {
    check_dim("anchor pose", theta.len(), theta_init.len())?;
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("anchor sigma must be positive, got {sigma}")));
    }
    Ok(theta.iter().zip(theta_init).map(|(a, b)| geman_mcclure_grad(a - b, sigma).0).sum())
}

/// The energy as a function of the packed vector `[θ, β, (s, tx, ty)]`.
pub struct FitObjective<'a> {
    model: &'a BodyModel,
    problem: &'a FitProblem,
}

impl<'a> FitObjective<'a> {
    pub fn new(model: &'a BodyModel, problem: &'a FitProblem) -> Result<Self> {
        let s = &problem.settings;
        let w = &s.weights;
        if [w.keypoint, w.silhouette, w.anchor, w.beta_prior].iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::InvalidArgument("fit weights must be nonnegative".into()));
        }
        if s.max_iters == 0 || !(s.sigma_keypoint > 0.0 && s.sigma_anchor > 0.0 && s.temperature > 0.0) {
            return Err(Error::InvalidArgument("fit needs max_iters > 0 and positive sigmas and temperature".into()));
        }
        model.check_params(&ShapeParams::new(problem.init_beta.clone()), &PoseParams::new(problem.init_theta.clone()))?;
        problem.init_camera.validate()?;
        let m = s.keypoint_subset.as_ref().map_or(model.n_joints(), |v| v.len());
        check_dim("observed keypoints", m, problem.keypoints.len())?;
        if let Some(sub) = &s.keypoint_subset {
            if sub.iter().any(|&j| j >= model.n_joints()) {
                return Err(Error::InvalidArgument("keypoint map references a missing joint".into()));
            }
        }
        if let Some(a) = &problem.anchor {
            check_dim("anchor pose", model.pose_dim(), a.len())?;
        }
        if let Some(sil) = &problem.silhouette {
            check_dim("observed silhouette", problem.init_camera.image_size.pow(2), sil.pixels.len())?;
        }
        Ok(Self { model, problem })
    }

    pub fn dim(&self) -> usize {
        self.model.pose_dim() + self.model.shape_dim() + if self.problem.settings.optimize_camera { 3 } else { 0 }
    }

    pub fn pack(&self, theta: &[f64], beta: &[f64], camera: &Camera) -> Vec<f64> {
        let mut x = theta.to_vec();
        x.extend_from_slice(beta);
        if self.problem.settings.optimize_camera {
            x.extend_from_slice(&camera.params());
        }
        x
    }

    pub fn unpack(&self, x: &[f64]) -> (PoseParams, ShapeParams, Camera) {
        let p = self.model.pose_dim();
        let b = self.model.shape_dim();
        let camera = if self.problem.settings.optimize_camera {
            self.problem.init_camera.with_params([x[p + b], x[p + b + 1], x[p + b + 2]])
        } else {
            self.problem.init_camera
        };
        (PoseParams::new(x[..p].to_vec()), ShapeParams::new(x[p..p + b].to_vec()), camera)
    }

    fn joint_of(&self, i: usize) -> usize {
        self.problem.settings.keypoint_subset.as_ref().map_or(i, |s| s[i])
    }

    fn confidence(&self, i: usize) -> f64 {
        if self.problem.settings.use_confidence {
            self.problem.keypoints.confidences[i]
        } else {
            1.0
        }
    }

    /// Terms and, when `want_grad`, the gradient. A non-positive camera scale
    /// yields infinite energy.
    fn eval(&self, x: &[f64], want_grad: bool) -> Result<(Terms, Vec<f64>)> {
        let s = &self.problem.settings;
        let w = &s.weights;
        let (theta, beta, camera) = self.unpack(x);
        let mut grad = vec![0.0; if want_grad { x.len() } else { 0 }];
        if camera.validate().is_err() || x.iter().any(|v| !v.is_finite()) {
            return Ok((Terms { keypoint: f64::INFINITY, ..Default::default() }, grad));
        }
        let pass = self.model.forward_pass(&beta, &theta)?;
        let mut terms = Terms::default();
        let mut g_joints = vec![Vec3::zeros(); self.model.n_joints()];
        let mut g_verts = vec![Vec3::zeros(); self.model.n_vertices()];
        let mut g_cam = [0.0; 3];

        if w.keypoint > 0.0 {
            for (i, obs) in self.problem.keypoints.points.iter().enumerate() {
                let c = self.confidence(i) * w.keypoint;
                if c == 0.0 {
                    continue;
                }
                let j = self.joint_of(i);
                let d: Vec2 = camera.project(&pass.joints.joints[j]) - obs;
                let r = d.norm();
                let (rho, drho) = geman_mcclure_grad(r, s.sigma_keypoint);
                terms.keypoint += c * rho;
                if want_grad && r > 0.0 {
                    let g2 = d * (c * drho / r);
                    g_joints[j] += camera.project_vjp(&pass.joints.joints[j], &g2, &mut g_cam);
                }
            }
        }
        if let (Some(target), true) = (&self.problem.silhouette, w.silhouette > 0.0) {
            let raster = Raster::new(&pass.mesh, &camera, s.temperature)?;
            let sil = raster.silhouette();
            let mut upstream = vec![0.0; sil.pixels.len()];
            for ((u, a), b) in upstream.iter_mut().zip(&sil.pixels).zip(&target.pixels) {
                terms.silhouette += w.silhouette * (a - b) * (a - b);
                *u = 2.0 * w.silhouette * (a - b);
            }
            if want_grad {
                let (gv, gc) = raster.vjp(&pass.mesh, &upstream)?;
                g_verts = gv;
                for k in 0..3 {
                    g_cam[k] += gc[k];
                }
            }
        }
        terms.beta = w.beta_prior * beta.beta.iter().map(|b| b * b).sum::<f64>();

        if want_grad {
            let pg = pass.vjp(self.model, &g_verts, Some(&g_joints))?;
            let p = self.model.pose_dim();
            grad[..p].copy_from_slice(&pg.theta);
            for (k, (g, b)) in pg.beta.iter().zip(&beta.beta).enumerate() {
                grad[p + k] = g + 2.0 * w.beta_prior * b;
            }
            if s.optimize_camera {
                let o = p + self.model.shape_dim();
                grad[o..o + 3].copy_from_slice(&g_cam);
            }
        }
        if let (Some(anchor), true) = (&self.problem.anchor, w.anchor > 0.0) {
            for (k, (t, a)) in theta.theta.iter().zip(anchor).enumerate() {
                let (rho, drho) = geman_mcclure_grad(t - a, s.sigma_anchor);
                terms.anchor += w.anchor * rho;
                if want_grad {
                    grad[k] += w.anchor * drho;
                }
            }
        }
        Ok((terms, grad))
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<Terms> {
        Ok(self.eval(x, false)?.0)
    }

    pub fn gradient(&self, x: &[f64]) -> Result<(Terms, Vec<f64>)> {
        self.eval(x, true)
    }

    /// Diagonal of the Gauss-Newton curvature of the quadratic part of each
    /// term (keypoint residuals taken at small residual), with a floor.
    fn curvature(&self, x: &[f64]) -> Result<Vec<f64>> {
        let s = &self.problem.settings;
        let w = &s.weights;
        let (theta, beta, camera) = self.unpack(x);
        let pass = self.model.forward_pass(&beta, &theta)?;
        let p = self.model.pose_dim();
        let b = self.model.shape_dim();
        let mut h = vec![0.0; x.len()];
        let kw = 2.0 * w.keypoint / (s.sigma_keypoint * s.sigma_keypoint);
        if kw > 0.0 {
            let conf: Vec<f64> = (0..self.problem.keypoints.len()).map(|i| self.confidence(i)).collect();
            let mut tangent_theta = vec![0.0; p];
            let mut tangent_beta = vec![0.0; b];
            for k in 0..p + b {
                if k < p {
                    tangent_theta[k] = 1.0;
                } else {
                    tangent_beta[k - p] = 1.0;
                }
                let dv = pass.jvp(self.model, &tangent_theta, &tangent_beta);
                let dj = self.model.joint_regressor().apply(&dv);
                h[k] = kw
                    * conf
                        .iter()
                        .enumerate()
                        .map(|(i, c)| {
                            let t = dj[self.joint_of(i)];
                            c * camera.scale * camera.scale * (t.x * t.x + t.y * t.y)
                        })
                        .sum::<f64>();
                if k < p {
                    tangent_theta[k] = 0.0;
                } else {
                    tangent_beta[k - p] = 0.0;
                }
            }
            if s.optimize_camera {
                let o = p + b;
                for (i, c) in conf.iter().enumerate() {
                    let j = pass.joints.joints[self.joint_of(i)];
                    h[o] += kw * c * (j.x * j.x + j.y * j.y);
                    h[o + 1] += kw * c;
                    h[o + 2] += kw * c;
                }
            }
        }
        for v in h.iter_mut().skip(p).take(b) {
            *v += 2.0 * w.beta_prior;
        }
        if self.problem.anchor.is_some() {
            for v in h.iter_mut().take(p) {
                *v += 2.0 * w.anchor / (s.sigma_anchor * s.sigma_anchor);
            }
        }
        let floor = h.iter().cloned().fold(0.0, f64::max) * 1e-6;
        for v in h.iter_mut() {
            *v = v.max(floor).max(1e-12);
        }
        Ok(h)
    }
}

pub fn fit(model: &BodyModel, problem: &FitProblem) -> Result<FitResult> {
    let obj = FitObjective::new(model, problem)?;
    let s = &problem.settings;
    let mut x = obj.pack(&problem.init_theta, &problem.init_beta, &problem.init_camera);
    let (mut terms, mut grad) = obj.gradient(&x)?;
    if !terms.total().is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("objective at the initial point".into()));
    }
    let mut objective_trace = vec![terms.total()];
    let mut data_trace = vec![terms.data()];
    let mut iterations = 0;
    let mut converged = false;
    let mut alpha: f64 = 1.0;
    while iterations < s.max_iters {
        let h = obj.curvature(&x)?;
        let dir: Vec<f64> = grad.iter().zip(&h).map(|(g, h)| -g / h).collect();
        let slope: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        if !(slope < 0.0) {
            converged = true;
            break;
        }
        let e0 = terms.total();
        let mut a = (2.0 * alpha).min(1.0);
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(x, d)| x + a * d).collect();
            let t = obj.evaluate(&trial)?;
            if t.total().is_finite() && t.total() <= e0 + ARMIJO_C * a * slope && t.total() < e0 {
                accepted = Some(trial);
                break;
            }
            a *= 0.5;
        }
        let Some(next) = accepted else {
            converged = true;
            break;
        };
        alpha = a;
        x = next;
        let (t, g) = obj.gradient(&x)?;
        if !t.total().is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("objective during descent".into()));
        }
        iterations += 1;
        let decrease = (e0 - t.total()) / e0.abs().max(f64::MIN_POSITIVE);
        terms = t;
        grad = g;
        objective_trace.push(terms.total());
        data_trace.push(terms.data());
        if decrease < s.tolerance {
            converged = true;
            break;
        }
    }
    let (theta, beta, camera) = obj.unpack(&x);
    Ok(FitResult { theta: theta.theta, beta: beta.beta, camera, objective_trace, data_trace, iterations, converged })
}

/// Least-squares weak-perspective camera mapping `points` onto `keypoints`
/// (optionally confidence-weighted). Falls back to a bounding-box ratio
/// when the fitted scale is not positive.
pub fn camera_from_keypoints(points: &[Vec3], keypoints: &Keypoints2D, weighted: bool) -> Result<Camera> {
    check_dim("camera init points", keypoints.len(), points.len())?;
    let w: Vec<f64> = keypoints.confidences.iter().map(|&c| if weighted { c } else { 1.0 }).collect();
    let sw: f64 = w.iter().sum();
    if !(sw > 0.0) {
        return Err(Error::Degenerate("no keypoint carries weight".into()));
    }
    let mean3 = points.iter().zip(&w).map(|(p, w)| Vec2::new(p.x, p.y) * *w).sum::<Vec2>() / sw;
    let mean2 = keypoints.points.iter().zip(&w).map(|(p, w)| p * *w).sum::<Vec2>() / sw;
    let (mut num, mut den) = (0.0, 0.0);
    for ((p, q), w) in points.iter().zip(&keypoints.points).zip(&w) {
        let a = Vec2::new(p.x, p.y) - mean3;
        num += w * a.dot(&(q - mean2));
        den += w * a.norm_squared();
    }
    if !(den > 0.0) {
        return Err(Error::Degenerate("camera init points coincide".into()));
    }
    let mut scale = num / den;
    if !(scale > 0.0) {
        let spread = |v: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(x), h.max(x)));
            hi - lo
        };
        scale = spread(&mut keypoints.points.iter().map(|p| p.y)) / spread(&mut points.iter().map(|p| p.y)).max(1e-9);
        if !(scale > 0.0) {
            scale = 1.0;
        }
    }
    Camera::new(scale, mean2.x - scale * mean3.x, mean2.y - scale * mean3.y)
}
