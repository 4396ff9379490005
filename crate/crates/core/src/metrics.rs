//! Evaluation measures: per-vertex error, aligned joint error and mask scores.

use nalgebra::{Matrix3, Matrix4, Quaternion, SymmetricEigen, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::body_model::{JointSet, Mesh};
use crate::error::check_dim;
use crate::renderer::Mask;
use crate::{Error, Result, Vec3};

/// `(1/N) Σ ‖P̂_i − P_i‖`. No alignment is applied.
pub fn mean_per_vertex_error(mesh_hat: &Mesh, mesh: &Mesh) -> Result<f64> {
    check_dim("mesh vertices", mesh.vertices.len(), mesh_hat.vertices.len())?;
    if mesh.vertices.is_empty() {
        return Err(Error::InvalidArgument("empty mesh".into()));
    }
    let sum: f64 = mesh_hat.vertices.iter().zip(&mesh.vertices).map(|(a, b)| (a - b).norm()).sum();
    Ok(sum / mesh.vertices.len() as f64)
}

fn centered(points: &[Vec3]) -> (Vec3, Vec<Vec3>) {
    let mean = points.iter().sum::<Vec3>() / points.len() as f64;
    (mean, points.iter().map(|p| p - mean).collect())
}

fn is_rank_deficient(centered: &[Vec3]) -> bool {
    let scatter: Matrix3<f64> = centered.iter().map(|p| p * p.transpose()).sum();
    let mut ev: Vec<f64> = SymmetricEigen::new(scatter).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0]
}

/// Similarity transform `(s, R, t)` minimizing `Σ ‖s R x_i + t − y_i‖²`,
/// with the rotation from the eigenvector of Horn's 4×4 quaternion matrix.
pub fn similarity_align(x: &[Vec3], y: &[Vec3]) -> Result<(f64, Matrix3<f64>, Vec3)> {
    check_dim("aligned point sets", y.len(), x.len())?;
    if x.len() < 3 {
        return Err(Error::Degenerate(format!("alignment needs at least 3 points, got {}", x.len())));
    }
    let (mx, xc) = centered(x);
    let (my, yc) = centered(y);
    if is_rank_deficient(&xc) || is_rank_deficient(&yc) {
        return Err(Error::Degenerate("point set is collinear or coincident".into()));
    }
    let s: Matrix3<f64> = xc.iter().zip(&yc).map(|(a, b)| a * b.transpose()).sum();
    let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
    let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
    let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
    #[rustfmt::skip]
    let n = Matrix4::new(
        sxx + syy + szz, syz - szy,        szx - sxz,        sxy - syx,
        syz - szy,       sxx - syy - szz,  sxy + syx,        szx + sxz,
        szx - sxz,       sxy + syx,        -sxx + syy - szz, syz + szy,
        sxy - syx,       szx + sxz,        syz + szy,        -sxx - syy + szz,
    );
    let eig = SymmetricEigen::new(n);
    let best = eig.eigenvalues.imax();
    let q = eig.eigenvectors.column(best);
    let rot = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3])).to_rotation_matrix().into_inner();
    let num: f64 = xc.iter().zip(&yc).map(|(a, b)| b.dot(&(rot * a))).sum();
    let den: f64 = xc.iter().map(|a| a.norm_squared()).sum();
    let scale = num / den;
    let t = my - rot * mx * scale;
    Ok((scale, rot, t))
}

/// Mean joint distance after similarity alignment of `joints_hat` onto `joints`.
pub fn reconstruction_error(joints_hat: &JointSet, joints: &JointSet) -> Result<f64> {
    let (s, r, t) = similarity_align(&joints_hat.joints, &joints.joints)?;
    let sum: f64 = joints_hat.joints.iter().zip(&joints.joints).map(|(a, b)| (r * a * s + t - b).norm()).sum();
    Ok(sum / joints.joints.len() as f64)
}

/// Pixel accuracy and foreground F1. F1 is 1 when both masks are empty.
pub fn segmentation_scores(mask_hat: &Mask, mask: &Mask) -> Result<(f64, f64)> {
    check_dim("mask pixels", mask.bits.len(), mask_hat.bits.len())?;
    if mask.bits.is_empty() {
        return Err(Error::InvalidArgument("empty mask".into()));
    }
    let (mut tp, mut fp, mut fn_, mut agree) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &g) in mask_hat.bits.iter().zip(&mask.bits) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
        agree += (p == g) as usize;
    }
    let accuracy = agree as f64 / mask.bits.len() as f64;
    let f1 = if tp + fp + fn_ == 0 { 1.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
    Ok((accuracy, f1))
}

/// Errors are in model units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub mean_per_vertex_error: f64,
    pub reconstruction_error: f64,
    pub seg_accuracy: f64,
    pub seg_f1: f64,
    pub samples: usize,
}

/// Metrics of one prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleMetrics {
    pub mean_per_vertex_error: f64,
    pub reconstruction_error: f64,
    pub seg_accuracy: f64,
    pub seg_f1: f64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "mean_per_vertex_error,reconstruction_error,seg_accuracy,seg_f1,samples";

    /// Averages per-sample metrics in order.
    pub fn aggregate(samples: &[SampleMetrics]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no samples to aggregate".into()));
        }
        let n = samples.len() as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / n;
        let report = Self {
            mean_per_vertex_error: mean(|s| s.mean_per_vertex_error),
            reconstruction_error: mean(|s| s.reconstruction_error),
            seg_accuracy: mean(|s| s.seg_accuracy),
            seg_f1: mean(|s| s.seg_f1),
            samples: samples.len(),
        };
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.mean_per_vertex_error, self.reconstruction_error, self.seg_accuracy, self.seg_f1]
            .iter()
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFinite("evaluation report".into()));
        }
        if !(0.0..=1.0).contains(&self.seg_accuracy) || !(0.0..=1.0).contains(&self.seg_f1) {
            return Err(Error::InvalidArgument("segmentation scores out of range".into()));
        }
        Ok(())
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{:?},{:?},{:?},{:?},{}",
            self.mean_per_vertex_error, self.reconstruction_error, self.seg_accuracy, self.seg_f1, self.samples
        )
    }
}
