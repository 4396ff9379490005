//! The articulated body model `M(β, θ; Φ)`.
//!
//! Pipeline: rest shape = template + shape blendshapes; rest joints come from
//! the sparse joint regressor; per-joint rotations from Rodrigues feed forward
//! kinematics over the kinematic tree; optional pose blendshapes are added in
//! the rest pose; linear blend skinning poses the surface; posed joints are
//! regressed again from the posed vertices.
//!
//! Derivatives are written out by hand: [`ForwardPass::jvp`] pushes a tangent
//! of `(θ, β)` forward, [`ForwardPass::vjp`] pulls a vertex/joint gradient
//! back. [`BodyModel::jacobians`] assembles dense Jacobians from the JVP.

mod io;
mod toy;

use std::sync::Arc;

use nalgebra::DMatrix;

pub use io::{load_model, save_model, ModelFile};
pub use toy::{build_toy_model, PartKind, ToyModelSpec, ToyRig};

use crate::error::check_dim;
use crate::rotation::{pullback, rodrigues_with_jacobian, RotationJacobian};
use crate::{Error, Mat3, Result, Vec3};

/// Maximum number of vertices a regressor row may reference.
pub const MAX_REGRESSOR_NNZ: usize = 16;

const STOCHASTIC_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeParams {
    pub beta: Vec<f64>,
}

impl ShapeParams {
    pub fn new(beta: Vec<f64>) -> Self {
        Self { beta }
    }

    pub fn zeros(n: usize) -> Self {
        Self { beta: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }
}

/// Axis-angle per joint; entries `0..3` are the global rotation.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseParams {
    pub theta: Vec<f64>,
}

impl PoseParams {
    pub fn new(theta: Vec<f64>) -> Self {
        Self { theta }
    }

    pub fn zeros(n_joints: usize) -> Self {
        Self { theta: vec![0.0; 3 * n_joints] }
    }

    pub fn n_joints(&self) -> usize {
        self.theta.len() / 3
    }

    pub fn joint(&self, j: usize) -> Vec3 {
        Vec3::new(self.theta[3 * j], self.theta[3 * j + 1], self.theta[3 * j + 2])
    }

    pub fn set_joint(&mut self, j: usize, w: &Vec3) {
        self.theta[3 * j..3 * j + 3].copy_from_slice(w.as_slice());
    }

    /// Same rotations with every per-joint angle wrapped into `[0, π]`.
    pub fn canonicalized(&self) -> Self {
        let mut out = self.clone();
        for j in 0..self.n_joints() {
            out.set_joint(j, &crate::rotation::canonicalize(&self.joint(j)));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Arc<[[usize; 3]]>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, faces: Arc<[[usize; 3]]>) -> Self {
        Self { vertices, faces }
    }

    pub fn height(&self) -> f64 {
        let (lo, hi) = self
            .vertices
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.y), hi.max(v.y)));
        hi - lo
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointSet {
    pub joints: Vec<Vec3>,
}

/// Row-major sparse matrix stored as per-row `(column, value)` lists.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRows {
    pub n_cols: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn apply(&self, x: &[Vec3]) -> Vec<Vec3> {
        self.rows
            .iter()
            .map(|row| row.iter().fold(Vec3::zeros(), |acc, &(c, w)| acc + x[c] * w))
            .collect()
    }

    /// `out += Aᵀ y`.
    pub fn apply_transpose_add(&self, y: &[Vec3], out: &mut [Vec3]) {
        for (row, yr) in self.rows.iter().zip(y) {
            for &(c, w) in row {
                out[c] += yr * w;
            }
        }
    }
}

/// Everything needed to assemble a [`BodyModel`].
#[derive(Clone, Debug)]
pub struct BodyModelParts {
    pub template: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    /// B × N displacement fields.
    pub shape_blendshapes: Vec<Vec<Vec3>>,
    /// 9K × N fields driven by `vec(R_j − I)` of the non-root joints.
    pub pose_blendshapes: Option<Vec<Vec<Vec3>>>,
    /// `None` marks the root (entry 0).
    pub parents: Vec<Option<usize>>,
    pub joint_regressor: SparseRows,
    /// N × (K+1), dense.
    pub skinning_weights: Vec<Vec<f64>>,
    /// Optional human-readable joint labels (used to pick pose limits).
    pub joint_names: Option<Vec<String>>,
}

/// Immutable model parameters Φ. Cheap to share across threads.
#[derive(Clone, Debug)]
pub struct BodyModel {
    parts: BodyModelParts,
    faces: Arc<[[usize; 3]]>,
    skin: Vec<Vec<(usize, f64)>>,
}

impl PartialEq for BodyModel {
    fn eq(&self, other: &Self) -> bool {
        self.parts.template == other.parts.template
            && self.parts.faces == other.parts.faces
            && self.parts.shape_blendshapes == other.parts.shape_blendshapes
            && self.parts.pose_blendshapes == other.parts.pose_blendshapes
            && self.parts.parents == other.parts.parents
            && self.parts.joint_regressor == other.parts.joint_regressor
            && self.parts.skinning_weights == other.parts.skinning_weights
    }
}

impl BodyModel {
    /// Validates the model invariants and builds the skinning cache.
    pub fn new(parts: BodyModelParts) -> Result<Self> {
        validate(&parts)?;
        let skin = parts
            .skinning_weights
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &w)| w != 0.0)
                    .map(|(j, &w)| (j, w))
                    .collect()
            })
            .collect();
        let faces: Arc<[[usize; 3]]> = parts.faces.clone().into();
        Ok(Self { parts, faces, skin })
    }

    pub fn parts(&self) -> &BodyModelParts {
        &self.parts
    }

    pub fn n_vertices(&self) -> usize {
        self.parts.template.len()
    }

    /// Number of joint nodes including the root (K + 1).
    pub fn n_joints(&self) -> usize {
        self.parts.parents.len()
    }

    pub fn pose_dim(&self) -> usize {
        3 * self.n_joints()
    }

    pub fn shape_dim(&self) -> usize {
        self.parts.shape_blendshapes.len()
    }

    pub fn faces(&self) -> &Arc<[[usize; 3]]> {
        &self.faces
    }

    pub fn template(&self) -> &[Vec3] {
        &self.parts.template
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parts.parents
    }

    pub fn joint_regressor(&self) -> &SparseRows {
        &self.parts.joint_regressor
    }

    pub fn skinning_weights(&self) -> &[Vec<f64>] {
        &self.parts.skinning_weights
    }

    pub fn shape_blendshapes(&self) -> &[Vec<Vec3>] {
        &self.parts.shape_blendshapes
    }

    pub fn joint_names(&self) -> Option<&[String]> {
        self.parts.joint_names.as_deref()
    }

    pub fn pose_blendshapes(&self) -> Option<&[Vec<Vec3>]> {
        self.parts.pose_blendshapes.as_deref()
    }

    /// Copy of the model with pose blendshapes replaced.
    pub fn with_pose_blendshapes(&self, pose: Option<Vec<Vec<Vec3>>>) -> Result<Self> {
        let mut parts = self.parts.clone();
        parts.pose_blendshapes = pose;
        Self::new(parts)
    }

    pub fn check_params(&self, beta: &ShapeParams, theta: &PoseParams) -> Result<()> {
        check_dim("shape parameters", self.shape_dim(), beta.len())?;
        check_dim("pose parameters", self.pose_dim(), theta.theta.len())?;
        if !beta.beta.iter().chain(&theta.theta).all(|x| x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite model parameters".into()));
        }
        Ok(())
    }

    /// Template plus shape blendshapes.
    pub fn shaped_rest(&self, beta: &ShapeParams) -> Result<Vec<Vec3>> {
        check_dim("shape parameters", self.shape_dim(), beta.len())?;
        let mut v = self.parts.template.clone();
        for (b, dirs) in beta.beta.iter().zip(&self.parts.shape_blendshapes) {
            if *b != 0.0 {
                for (vi, d) in v.iter_mut().zip(dirs) {
                    *vi += d * *b;
                }
            }
        }
        Ok(v)
    }

    pub fn forward(&self, beta: &ShapeParams, theta: &PoseParams) -> Result<(Mesh, JointSet)> {
        let pass = self.forward_pass(beta, theta)?;
        Ok((pass.mesh, pass.joints))
    }

    /// Forward evaluation keeping the intermediates needed for derivatives.
    pub fn forward_pass(&self, beta: &ShapeParams, theta: &PoseParams) -> Result<ForwardPass> {
        self.check_params(beta, theta)?;
        let nj = self.n_joints();
        let shaped = self.shaped_rest(beta)?;
        let rest_joints = self.parts.joint_regressor.apply(&shaped);

        let mut rot = Vec::with_capacity(nj);
        let mut rot_jac = Vec::with_capacity(nj);
        for j in 0..nj {
            let (r, jac) = rodrigues_with_jacobian(&theta.joint(j));
            rot.push(r);
            rot_jac.push(jac);
        }

        let mut posed_rest = shaped.clone();
        if let Some(pose_dirs) = &self.parts.pose_blendshapes {
            for (j, r) in rot.iter().enumerate().skip(1) {
                let delta = r - Mat3::identity();
                for e in 0..9 {
                    let coeff = delta[(e / 3, e % 3)];
                    if coeff != 0.0 {
                        for (v, d) in posed_rest.iter_mut().zip(&pose_dirs[9 * (j - 1) + e]) {
                            *v += d * coeff;
                        }
                    }
                }
            }
        }

        let mut global_rot = Vec::with_capacity(nj);
        let mut global_trans = Vec::with_capacity(nj);
        for j in 0..nj {
            match self.parts.parents[j] {
                None => {
                    global_rot.push(rot[j]);
                    global_trans.push(rest_joints[j]);
                }
                Some(p) => {
                    let a = global_rot[p] * rot[j];
                    let t = global_rot[p] * (rest_joints[j] - rest_joints[p]) + global_trans[p];
                    global_rot.push(a);
                    global_trans.push(t);
                }
            }
        }

        let vertices: Vec<Vec3> = posed_rest
            .iter()
            .zip(&self.skin)
            .map(|(v, weights)| {
                weights.iter().fold(Vec3::zeros(), |acc, &(j, w)| {
                    acc + (global_rot[j] * (v - rest_joints[j]) + global_trans[j]) * w
                })
            })
            .collect();
        let joints = self.parts.joint_regressor.apply(&vertices);

        Ok(ForwardPass {
            mesh: Mesh::new(vertices, self.faces.clone()),
            joints: JointSet { joints },
            rest_joints,
            posed_rest,
            rot,
            rot_jac,
            global_rot,
            global_trans,
        })
    }

    /// Dense Jacobians of the flattened vertices (`3N` rows, `x, y, z` per
    /// vertex) with respect to θ and β.
    pub fn jacobians(&self, beta: &ShapeParams, theta: &PoseParams) -> Result<ModelJacobians> {
        let pass = self.forward_pass(beta, theta)?;
        let n = self.n_vertices();
        let p = self.pose_dim();
        let b = self.shape_dim();
        let mut d_theta = DMatrix::zeros(3 * n, p);
        let mut d_beta = DMatrix::zeros(3 * n, b);
        let zero_theta = vec![0.0; p];
        let zero_beta = vec![0.0; b];
        let mut tangent = zero_theta.clone();
        for k in 0..p {
            tangent[k] = 1.0;
            let dv = pass.jvp(self, &tangent, &zero_beta);
            tangent[k] = 0.0;
            for (i, d) in dv.iter().enumerate() {
                d_theta[(3 * i, k)] = d.x;
                d_theta[(3 * i + 1, k)] = d.y;
                d_theta[(3 * i + 2, k)] = d.z;
            }
        }
        let mut tangent = zero_beta;
        for k in 0..b {
            tangent[k] = 1.0;
            let dv = pass.jvp(self, &zero_theta, &tangent);
            tangent[k] = 0.0;
            for (i, d) in dv.iter().enumerate() {
                d_beta[(3 * i, k)] = d.x;
                d_beta[(3 * i + 1, k)] = d.y;
                d_beta[(3 * i + 2, k)] = d.z;
            }
        }
        Ok(ModelJacobians { d_theta, d_beta })
    }
}

#[derive(Clone, Debug)]
pub struct ModelJacobians {
    /// `3N × 3(K+1)`.
    pub d_theta: DMatrix<f64>,
    /// `3N × B`.
    pub d_beta: DMatrix<f64>,
}

/// Output of [`BodyModel::forward_pass`] with cached intermediates.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub mesh: Mesh,
    pub joints: JointSet,
    rest_joints: Vec<Vec3>,
    posed_rest: Vec<Vec3>,
    rot: Vec<Mat3>,
    rot_jac: Vec<RotationJacobian>,
    global_rot: Vec<Mat3>,
    global_trans: Vec<Vec3>,
}

/// Gradient of a scalar with respect to the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad {
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
}

impl ForwardPass {
    pub fn rest_joints(&self) -> &[Vec3] {
        &self.rest_joints
    }

    /// Per-joint world rotations and translations of the kinematic chain.
    pub fn global_transforms(&self) -> (&[Mat3], &[Vec3]) {
        (&self.global_rot, &self.global_trans)
    }

    /// Directional derivative of the posed vertices.
    pub fn jvp(&self, model: &BodyModel, d_theta: &[f64], d_beta: &[f64]) -> Vec<Vec3> {
        let parts = &model.parts;
        let n = model.n_vertices();
        let nj = model.n_joints();

        let mut d_shaped = vec![Vec3::zeros(); n];
        for (db, dirs) in d_beta.iter().zip(&parts.shape_blendshapes) {
            if *db != 0.0 {
                for (out, d) in d_shaped.iter_mut().zip(dirs) {
                    *out += d * *db;
                }
            }
        }
        let d_joints = parts.joint_regressor.apply(&d_shaped);

        let d_rot: Vec<Mat3> = (0..nj)
            .map(|j| {
                let mut m = Mat3::zeros();
                for axis in 0..3 {
                    let t = d_theta[3 * j + axis];
                    if t != 0.0 {
                        for e in 0..9 {
                            m[(e / 3, e % 3)] += self.rot_jac[j][(e, axis)] * t;
                        }
                    }
                }
                m
            })
            .collect();

        let mut d_posed = d_shaped;
        if let Some(pose_dirs) = &parts.pose_blendshapes {
            for (j, dr) in d_rot.iter().enumerate().skip(1) {
                for e in 0..9 {
                    let coeff = dr[(e / 3, e % 3)];
                    if coeff != 0.0 {
                        for (v, d) in d_posed.iter_mut().zip(&pose_dirs[9 * (j - 1) + e]) {
                            *v += d * coeff;
                        }
                    }
                }
            }
        }

        let mut d_a: Vec<Mat3> = Vec::with_capacity(nj);
        let mut d_t: Vec<Vec3> = Vec::with_capacity(nj);
        for j in 0..nj {
            match parts.parents[j] {
                None => {
                    d_a.push(d_rot[j]);
                    d_t.push(d_joints[j]);
                }
                Some(p) => {
                    let a_p = &self.global_rot[p];
                    d_a.push(d_a[p] * self.rot[j] + a_p * d_rot[j]);
                    let offset = self.rest_joints[j] - self.rest_joints[p];
                    d_t.push(d_a[p] * offset + a_p * (d_joints[j] - d_joints[p]) + d_t[p]);
                }
            }
        }

        self.posed_rest
            .iter()
            .zip(&d_posed)
            .zip(&model.skin)
            .map(|((v, dv), weights)| {
                weights.iter().fold(Vec3::zeros(), |acc, &(j, w)| {
                    let local = v - self.rest_joints[j];
                    acc + (d_a[j] * local + self.global_rot[j] * (dv - d_joints[j]) + d_t[j]) * w
                })
            })
            .collect()
    }

    /// Pulls gradients on posed vertices (and optionally posed joints) back
    /// to `(θ, β)`.
    pub fn vjp(
        &self,
        model: &BodyModel,
        grad_vertices: &[Vec3],
        grad_joints: Option<&[Vec3]>,
    ) -> Result<ParamGrad> {
        let parts = &model.parts;
        let n = model.n_vertices();
        let nj = model.n_joints();
        check_dim("vertex gradient", n, grad_vertices.len())?;

        let mut g = grad_vertices.to_vec();
        if let Some(gj) = grad_joints {
            check_dim("joint gradient", nj, gj.len())?;
            parts.joint_regressor.apply_transpose_add(gj, &mut g);
        }

        let mut d_a = vec![Mat3::zeros(); nj];
        let mut d_t = vec![Vec3::zeros(); nj];
        let mut d_posed = vec![Vec3::zeros(); n];
        for i in 0..n {
            let gi = g[i];
            if gi == Vec3::zeros() {
                continue;
            }
            for &(j, w) in &model.skin[i] {
                let wg = gi * w;
                d_a[j] += wg * (self.posed_rest[i] - self.rest_joints[j]).transpose();
                d_t[j] += wg;
                d_posed[i] += self.global_rot[j].tr_mul(&wg);
            }
        }
        let mut d_joints: Vec<Vec3> = (0..nj).map(|j| -self.global_rot[j].tr_mul(&d_t[j])).collect();

        let mut d_rot = vec![Mat3::zeros(); nj];
        for j in (0..nj).rev() {
            match parts.parents[j] {
                None => {
                    d_rot[j] += d_a[j];
                    d_joints[j] += d_t[j];
                }
                Some(p) => {
                    let a_p = self.global_rot[p];
                    d_rot[j] += a_p.tr_mul(&d_a[j]);
                    let back_a = d_a[j] * self.rot[j].transpose();
                    let offset = self.rest_joints[j] - self.rest_joints[p];
                    let back_t = d_t[j] * offset.transpose();
                    d_a[p] += back_a + back_t;
                    let at = a_p.tr_mul(&d_t[j]);
                    d_joints[j] += at;
                    d_joints[p] -= at;
                    let dt = d_t[j];
                    d_t[p] += dt;
                }
            }
        }

        if let Some(pose_dirs) = &parts.pose_blendshapes {
            for (j, dr) in d_rot.iter_mut().enumerate().skip(1) {
                for e in 0..9 {
                    let s: f64 = pose_dirs[9 * (j - 1) + e]
                        .iter()
                        .zip(&d_posed)
                        .map(|(d, gp)| d.dot(gp))
                        .sum();
                    dr[(e / 3, e % 3)] += s;
                }
            }
        }

        let mut d_shaped = d_posed;
        parts.joint_regressor.apply_transpose_add(&d_joints, &mut d_shaped);

        let beta = parts
            .shape_blendshapes
            .iter()
            .map(|dirs| dirs.iter().zip(&d_shaped).map(|(d, g)| d.dot(g)).sum())
            .collect();
        let mut theta = vec![0.0; 3 * nj];
        for j in 0..nj {
            let w = pullback(&self.rot_jac[j], &d_rot[j]);
            theta[3 * j..3 * j + 3].copy_from_slice(w.as_slice());
        }
        Ok(ParamGrad { theta, beta })
    }
}

fn validate(parts: &BodyModelParts) -> Result<()> {
    let n = parts.template.len();
    let nj = parts.parents.len();
    if n == 0 {
        return Err(Error::InvalidArgument("model has no vertices".into()));
    }
    if nj == 0 {
        return Err(Error::InvalidArgument("model has no joints".into()));
    }
    if !parts.template.iter().all(|v| v.iter().all(|x| x.is_finite())) {
        return Err(Error::InvalidArgument("non-finite template vertex".into()));
    }
    for (fi, f) in parts.faces.iter().enumerate() {
        if f.iter().any(|&i| i >= n) {
            return Err(Error::InvalidArgument(format!("face {fi} references a missing vertex")));
        }
    }
    for (b, dirs) in parts.shape_blendshapes.iter().enumerate() {
        if dirs.len() != n {
            return Err(Error::InvalidArgument(format!("shape blendshape {b} has wrong length")));
        }
    }
    if let Some(pose) = &parts.pose_blendshapes {
        check_dim("pose blendshape count", 9 * (nj - 1), pose.len())?;
        if pose.iter().any(|d| d.len() != n) {
            return Err(Error::InvalidArgument("pose blendshape has wrong length".into()));
        }
    }
    if parts.parents[0].is_some() {
        return Err(Error::InvalidArgument("joint 0 must be the root".into()));
    }
    for (i, p) in parts.parents.iter().enumerate().skip(1) {
        match p {
            Some(p) if *p < i => {}
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "joint {i} must have a parent with a smaller index"
                )))
            }
        }
    }
    let reg = &parts.joint_regressor;
    check_dim("joint regressor rows", nj, reg.rows.len())?;
    check_dim("joint regressor columns", n, reg.n_cols)?;
    for (j, row) in reg.rows.iter().enumerate() {
        if row.len() > MAX_REGRESSOR_NNZ {
            return Err(Error::InvalidArgument(format!(
                "regressor row {j} has {} nonzeros (max {MAX_REGRESSOR_NNZ})",
                row.len()
            )));
        }
        if row.iter().any(|&(c, w)| c >= n || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!("regressor row {j} is malformed")));
        }
        let sum: f64 = row.iter().map(|&(_, w)| w).sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::InvalidArgument(format!("regressor row {j} sums to {sum}")));
        }
    }
    if let Some(names) = &parts.joint_names {
        check_dim("joint names", nj, names.len())?;
    }
    check_dim("skinning weight rows", n, parts.skinning_weights.len())?;
    for (i, row) in parts.skinning_weights.iter().enumerate() {
        check_dim("skinning weight columns", nj, row.len())?;
        if row.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument(format!("negative skinning weight at vertex {i}")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::InvalidArgument(format!("skinning weights of vertex {i} sum to {sum}")));
        }
    }
    Ok(())
}

/// Every undirected edge is shared by exactly two faces that traverse it in
/// opposite directions.
pub fn is_closed_orientable(faces: &[[usize; 3]]) -> bool {
    use std::collections::HashMap;
    let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
    for f in faces {
        for k in 0..3 {
            *directed.entry((f[k], f[(k + 1) % 3])).or_default() += 1;
        }
    }
    directed
        .iter()
        .all(|(&(a, b), &count)| count == 1 && directed.get(&(b, a)) == Some(&1))
}
