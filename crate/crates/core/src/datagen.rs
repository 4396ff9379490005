//! Synthetic training pairs: sample `(θ, β)`, pose the model, project it
//! from a viewpoint and record keypoints plus a binary silhouette.
//!
//! Record `i` draws its base pose and shape from streams indexed by
//! `i / viewpoints.len()` and its viewpoint jitter and noise from streams
//! indexed by `i`, so any record can be regenerated on its own.
//!
//! The model is y-up and the image is y-down. Every record's global rotation
//! is `R_x(π) · R_y(yaw) · R_root`, stored back as an axis-angle through the
//! log map.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::body_model::{BodyModel, PoseParams, ShapeParams};
use crate::error::check_dim;
use crate::renderer::{project_joints, Camera, Keypoints2D, Mask, Raster, DEFAULT_TEMPERATURE, IMAGE_SIZE};
use crate::rng::{purpose, StreamRng};
use crate::rotation::{log_map, rodrigues};
use crate::{Error, Result, Vec2, Vec3};

pub const MAGIC: &[u8; 4] = b"BFD1";

/// Joint-limit class used by the procedural sampler.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum JointLimit {
    /// Each axis-angle component within `±limit`.
    Ball(f64),
    /// Rotation about a fixed unit axis by an angle in `[0, max]`.
    Hinge { axis: Vec3, max: f64 },
}

/// Pose family of the procedural sampler.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseFamily {
    /// Default limits for every joint.
    Standard,
    /// Both arms raised: the shoulder rotation about the viewing axis has
    /// magnitude in `[1.5, 2.4]`, outside the standard shoulder range.
    Overhead,
}

pub const SPINE_LIMIT: f64 = 0.3;
pub const BALL_LIMIT: f64 = 1.2;
pub const HINGE_MAX: f64 = 2.3;
pub const OTHER_LIMIT: f64 = 0.3;
pub const ROOT_LIMIT: f64 = 0.3;
pub const OVERHEAD_RANGE: (f64, f64) = (1.5, 2.4);

#[derive(Clone, Debug)]
pub enum PoseSampler {
    /// Rows of a theta matrix; running past the end is an error.
    File { thetas: Vec<Vec<f64>> },
    Procedural { limits: Vec<JointLimit>, shoulders: Vec<(usize, f64)>, family: PoseFamily, seed: u64 },
}

impl PoseSampler {
    /// Limits derived from the model's joint names; models without names get
    /// `±0.3` everywhere.
    pub fn procedural(model: &BodyModel, family: PoseFamily, seed: u64) -> Self {
        let nj = model.n_joints();
        let rest = model.joint_regressor().apply(model.template());
        let child = |j: usize| (0..nj).find(|&c| model.parents()[c] == Some(j));
        let mut limits = vec![JointLimit::Ball(OTHER_LIMIT); nj];
        let mut shoulders = Vec::new();
        limits[0] = JointLimit::Ball(ROOT_LIMIT);
        if let Some(names) = model.joint_names() {
            for (j, name) in names.iter().enumerate().skip(1) {
                let base = name.trim_start_matches("l_").trim_start_matches("r_");
                limits[j] = match base {
                    "spine" | "neck" | "head" => JointLimit::Ball(SPINE_LIMIT),
                    "shoulder" | "hip" => JointLimit::Ball(BALL_LIMIT),
                    "knee" => JointLimit::Hinge { axis: Vec3::x(), max: HINGE_MAX },
                    "elbow" => {
                        let u = match child(j) {
                            Some(c) => rest[c] - rest[j],
                            None => rest[j] - rest[model.parents()[j].unwrap_or(0)],
                        };
                        let axis = u.cross(&Vec3::z());
                        let axis = if axis.norm() > 1e-9 { axis.normalize() } else { Vec3::x() };
                        JointLimit::Hinge { axis, max: HINGE_MAX }
                    }
                    _ => JointLimit::Ball(OTHER_LIMIT),
                };
                if base == "shoulder" {
                    // Raising an arm means rotating it away from the body about +z.
                    shoulders.push((j, if rest[j].x >= 0.0 { 1.0 } else { -1.0 }));
                }
            }
        }
        PoseSampler::Procedural { limits, shoulders, family, seed }
    }

    /// Whitespace-separated reals, one pose per non-empty line.
    pub fn from_text(text: &str, pose_dim: usize) -> Result<Self> {
        let mut thetas = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| Error::Format(format!("line {}: bad real '{t}'", n + 1))))
                .collect::<Result<_>>()?;
            if row.len() != pose_dim || row.iter().any(|x| !x.is_finite()) {
                return Err(Error::Format(format!("line {}: expected {pose_dim} finite reals", n + 1)));
            }
            thetas.push(row);
        }
        Ok(PoseSampler::File { thetas })
    }

    /// Pose number `index` before the viewpoint is applied.
    pub fn sample(&self, index: u64) -> Result<PoseParams> {
        match self {
            PoseSampler::File { thetas } => thetas
                .get(index as usize)
                .map(|t| PoseParams::new(t.clone()))
                .ok_or_else(|| Error::EndOfData(format!("pose library has {} entries, asked for #{index}", thetas.len()))),
            PoseSampler::Procedural { limits, shoulders, family, seed } => {
                let mut rng = StreamRng::new(*seed, purpose::POSE, index);
                let mut theta = PoseParams::zeros(limits.len());
                for (j, limit) in limits.iter().enumerate() {
                    let w = match *limit {
                        JointLimit::Ball(l) => {
                            Vec3::new(rng.truncated_normal(0.0, l / 2.0, 2.0), rng.truncated_normal(0.0, l / 2.0, 2.0), rng.truncated_normal(0.0, l / 2.0, 2.0))
                        }
                        JointLimit::Hinge { axis, max } => axis * rng.truncated_normal(0.0, max / 2.0, 2.0).abs(),
                    };
                    theta.set_joint(j, &w);
                }
                if *family == PoseFamily::Overhead {
                    for &(j, sign) in shoulders {
                        let mut w = theta.joint(j);
                        w.x = rng.truncated_normal(0.0, SPINE_LIMIT / 2.0, 2.0);
                        w.y = rng.truncated_normal(0.0, SPINE_LIMIT / 2.0, 2.0);
                        w.z = sign * rng.uniform_range(OVERHEAD_RANGE.0, OVERHEAD_RANGE.1);
                        theta.set_joint(j, &w);
                    }
                }
                Ok(theta)
            }
        }
    }
}

/// `β ~ N(0, σ²)` per component, truncated at `±3σ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSampler {
    pub sigma: f64,
    pub seed: u64,
}

impl ShapeSampler {
    pub fn sample(&self, dim: usize, index: u64) -> ShapeParams {
        let mut rng = StreamRng::new(self.seed, purpose::SHAPE, index);
        ShapeParams::new((0..dim).map(|_| rng.truncated_normal(0.0, self.sigma, 3.0)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// Keypoint Gaussian jitter (pixels).
    pub keypoint_sigma: f64,
    pub dropout: f64,
    /// Disk radius in pixels; positive dilates, negative erodes.
    pub silhouette_radius: i32,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { keypoint_sigma: 1.5, dropout: 0.05, silhouette_radius: 0 }
    }
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self { keypoint_sigma: 0.0, dropout: 0.0, silhouette_radius: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.keypoint_sigma >= 0.0 && (0.0..=1.0).contains(&self.dropout)) {
            return Err(Error::InvalidArgument("noise needs sigma >= 0 and dropout in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    pub camera: Camera,
    pub keypoints: Keypoints2D,
    pub silhouette: Mask,
}

/// Record sizes implied by a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecordLayout {
    pub pose_dim: usize,
    pub shape_dim: usize,
    pub n_keypoints: usize,
    pub image_size: usize,
}

impl RecordLayout {
    pub fn for_model(model: &BodyModel) -> Self {
        Self { pose_dim: model.pose_dim(), shape_dim: model.shape_dim(), n_keypoints: model.n_joints(), image_size: IMAGE_SIZE }
    }

    pub fn record_bytes(&self) -> usize {
        8 * (self.pose_dim + self.shape_dim + 3 + 3 * self.n_keypoints) + (self.image_size * self.image_size).div_ceil(8)
    }
}

#[derive(Clone, Debug)]
pub struct GenConfig {
    pub count: usize,
    /// Yaw angles (radians) applied to each base pose in turn.
    pub viewpoints: Vec<f64>,
    /// Uniform yaw jitter in `±yaw_jitter` added per record.
    pub yaw_jitter: f64,
    pub noise: NoiseSpec,
    /// Target fraction of the image height covered by the rest-pose body.
    pub fill: f64,
    pub temperature: f64,
    pub seed: u64,
    pub keypoint_subset: Option<Vec<usize>>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            count: 1000,
            viewpoints: vec![0.0],
            yaw_jitter: std::f64::consts::PI,
            noise: NoiseSpec::default(),
            fill: 0.8,
            temperature: DEFAULT_TEMPERATURE,
            seed: 0,
            keypoint_subset: None,
        }
    }
}

/// Composes the image flip and a yaw into the sampled root rotation.
pub fn apply_viewpoint(theta: &PoseParams, yaw: f64) -> Result<PoseParams> {
    let flip = rodrigues(&Vec3::new(std::f64::consts::PI, 0.0, 0.0))?;
    let view = rodrigues(&Vec3::new(0.0, yaw, 0.0))?;
    let root = rodrigues(&theta.joint(0))?;
    let mut out = theta.clone();
    out.set_joint(0, &log_map(&(flip * view * root)));
    Ok(out)
}

/// Scale from the shaped rest height, clamped so the posed body spans 70-90%
/// of the image height; translation centers the posed bounding box.
pub fn fit_camera(rest_height: f64, posed: &[Vec3], fill: f64, image_size: usize) -> Result<Camera> {
    let (mut lo, mut hi) = (Vec2::repeat(f64::INFINITY), Vec2::repeat(f64::NEG_INFINITY));
    for v in posed {
        lo = lo.inf(&Vec2::new(v.x, v.y));
        hi = hi.sup(&Vec2::new(v.x, v.y));
    }
    let extent = hi.y - lo.y;
    if !(rest_height > 0.0 && extent > 0.0) {
        return Err(Error::Degenerate("mesh has no vertical extent".into()));
    }
    let size = image_size as f64;
    let scale = (fill * size / rest_height).clamp(0.7 * size / extent, 0.9 * size / extent);
    let c = (lo + hi) * 0.5;
    let mut cam = Camera::new(scale, size / 2.0 - scale * c.x, size / 2.0 - scale * c.y)?;
    cam.image_size = image_size;
    Ok(cam)
}

/// Builds the noise-free record for `(θ, β)` with an auto-fitted camera.
pub fn make_record(
    model: &BodyModel,
    beta: &ShapeParams,
    theta: &PoseParams,
    cfg: &GenConfig,
) -> Result<DatasetRecord> {
    let (mesh, joints) = model.forward(beta, theta)?;
    let rest_height = crate::Mesh::new(model.shaped_rest(beta)?, model.faces().clone()).height();
    let camera = fit_camera(rest_height, &mesh.vertices, cfg.fill, IMAGE_SIZE)?;
    let keypoints = project_joints(&joints, &camera, cfg.keypoint_subset.as_deref())?;
    let silhouette = Raster::new(&mesh, &camera, cfg.temperature)?.silhouette().binarized();
    Ok(DatasetRecord { theta: theta.theta.clone(), beta: beta.beta.clone(), camera, keypoints, silhouette })
}

/// Record `index` of the dataset described by the samplers and config.
pub fn generate_record(
    model: &BodyModel,
    poses: &PoseSampler,
    shapes: &ShapeSampler,
    cfg: &GenConfig,
    index: u64,
) -> Result<DatasetRecord> {
    let nv = cfg.viewpoints.len() as u64;
    let base = index / nv;
    let body = poses.sample(base)?;
    check_dim("sampled pose", model.pose_dim(), body.theta.len())?;
    let beta = shapes.sample(model.shape_dim(), base);
    let mut view_rng = StreamRng::new(cfg.seed, purpose::VIEW, index);
    let yaw = cfg.viewpoints[(index % nv) as usize] + view_rng.uniform_range(-cfg.yaw_jitter, cfg.yaw_jitter);
    let theta = apply_viewpoint(&body, yaw)?;
    let record = make_record(model, &beta, &theta, cfg)?;
    apply_noise(&record, &cfg.noise, cfg.seed, index)
}

/// Generates `cfg.count` records, in index order, using all available cores.
pub fn generate_dataset(
    model: &BodyModel,
    poses: &PoseSampler,
    shapes: &ShapeSampler,
    cfg: &GenConfig,
) -> Result<Vec<DatasetRecord>> {
    if cfg.count == 0 {
        return Err(Error::InvalidArgument("record count must be positive".into()));
    }
    if cfg.viewpoints.is_empty() {
        return Err(Error::InvalidArgument("at least one viewpoint is required".into()));
    }
    cfg.noise.validate()?;
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(cfg.count);
    let chunk = cfg.count.div_ceil(threads);
    let parts: Vec<Result<Vec<DatasetRecord>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                s.spawn(move || {
                    let lo = t * chunk;
                    let hi = ((t + 1) * chunk).min(cfg.count);
                    (lo..hi).map(|i| generate_record(model, poses, shapes, cfg, i as u64)).collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("generator thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(cfg.count);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Keypoint jitter and dropout, then silhouette dilation or erosion.
pub fn apply_noise(record: &DatasetRecord, spec: &NoiseSpec, seed: u64, index: u64) -> Result<DatasetRecord> {
    spec.validate()?;
    let mut out = record.clone();
    let mut rng = StreamRng::new(seed, purpose::NOISE, index);
    let center = record.camera.image_size as f64 / 2.0;
    for (p, c) in out.keypoints.points.iter_mut().zip(out.keypoints.confidences.iter_mut()) {
        // Both draws happen for every keypoint so streams stay aligned.
        let offset = Vec2::new(rng.standard_normal(), rng.standard_normal()) * spec.keypoint_sigma;
        let dropped = rng.uniform() < spec.dropout;
        if dropped {
            *p = Vec2::new(center, center);
            *c = 0.0;
        } else if spec.keypoint_sigma > 0.0 {
            *p += offset;
            *c = (-offset.norm_squared() / (2.0 * spec.keypoint_sigma * spec.keypoint_sigma)).exp();
        }
    }
    if spec.silhouette_radius != 0 {
        out.silhouette = morph(&out.silhouette, spec.silhouette_radius);
    }
    Ok(out)
}

/// Disk dilation for positive radii, erosion for negative ones.
fn morph(mask: &Mask, radius: i32) -> Mask {
    let n = mask.size as i32;
    let r = radius.abs();
    let grow = radius > 0;
    let mut bits = mask.bits.clone();
    for row in 0..n {
        for col in 0..n {
            let mut hit = false;
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    if dx * dx + dy * dy > r * r {
                        continue;
                    }
                    let (y, x) = (row + dy, col + dx);
                    let v = if (0..n).contains(&y) && (0..n).contains(&x) { mask.bits[(y * n + x) as usize] } else { false };
                    if v == grow {
                        hit = true;
                        break 'scan;
                    }
                }
            }
            bits[(row * n + col) as usize] = if grow { hit } else { !hit };
        }
    }
    Mask { size: mask.size, bits }
}

pub fn write_dataset(mut out: impl Write, records: &[DatasetRecord], layout: &RecordLayout) -> Result<()> {
    out.write_all(MAGIC)?;
    let count = u32::try_from(records.len()).map_err(|_| Error::InvalidArgument("too many records".into()))?;
    out.write_all(&count.to_le_bytes())?;
    let mut buf = Vec::with_capacity(layout.record_bytes());
    for r in records {
        check_dim("record theta", layout.pose_dim, r.theta.len())?;
        check_dim("record beta", layout.shape_dim, r.beta.len())?;
        check_dim("record keypoints", layout.n_keypoints, r.keypoints.len())?;
        check_dim("record silhouette", layout.image_size * layout.image_size, r.silhouette.bits.len())?;
        buf.clear();
        let reals = r
            .theta
            .iter()
            .chain(&r.beta)
            .copied()
            .chain(r.camera.params())
            .chain(r.keypoints.points.iter().zip(&r.keypoints.confidences).flat_map(|(p, &c)| [p.x, p.y, c]));
        for x in reals {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        buf.extend_from_slice(&r.silhouette.pack());
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_dataset(mut input: impl Read, layout: &RecordLayout) -> Result<Vec<DatasetRecord>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing BFD1 header".into()));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let rb = layout.record_bytes();
    if bytes.len() != 8 + count * rb {
        return Err(Error::Format(format!(
            "dataset holds {} payload bytes, expected {count} records of {rb}",
            bytes.len() - 8
        )));
    }
    let n_reals = layout.pose_dim + layout.shape_dim + 3 + 3 * layout.n_keypoints;
    let mut records = Vec::with_capacity(count);
    for chunk in bytes[8..].chunks_exact(rb) {
        let reals: Vec<f64> = chunk[..8 * n_reals].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        if reals.iter().any(|x| !x.is_finite()) {
            return Err(Error::Format("non-finite value in dataset record".into()));
        }
        let (theta, rest) = reals.split_at(layout.pose_dim);
        let (beta, rest) = rest.split_at(layout.shape_dim);
        let (cam, kp) = rest.split_at(3);
        let mut camera = Camera::new(cam[0], cam[1], cam[2]).map_err(|e| Error::Format(format!("bad camera: {e}")))?;
        camera.image_size = layout.image_size;
        let points = kp.chunks_exact(3).map(|c| Vec2::new(c[0], c[1])).collect();
        let conf = kp.chunks_exact(3).map(|c| c[2]).collect();
        records.push(DatasetRecord {
            theta: theta.to_vec(),
            beta: beta.to_vec(),
            camera,
            keypoints: Keypoints2D::new(points, conf).map_err(|e| Error::Format(format!("bad keypoints: {e}")))?,
            silhouette: Mask::unpack(layout.image_size, &chunk[8 * n_reals..])?,
        });
    }
    Ok(records)
}

pub fn save_dataset(path: impl AsRef<Path>, records: &[DatasetRecord], layout: &RecordLayout) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(&mut buf, records, layout)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>, layout: &RecordLayout) -> Result<Vec<DatasetRecord>> {
    read_dataset(std::fs::File::open(path)?, layout)
}

/// JSON mirror of a record for debugging.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordJson {
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    pub camera: Camera,
    /// `[x, y, confidence]` per keypoint.
    pub keypoints: Vec<[f64; 3]>,
    /// One string of `0`/`1` per image row.
    pub silhouette: Vec<String>,
}

impl From<&DatasetRecord> for RecordJson {
    fn from(r: &DatasetRecord) -> Self {
        Self {
            theta: r.theta.clone(),
            beta: r.beta.clone(),
            camera: r.camera,
            keypoints: r.keypoints.points.iter().zip(&r.keypoints.confidences).map(|(p, &c)| [p.x, p.y, c]).collect(),
            silhouette: r
                .silhouette
                .bits
                .chunks(r.silhouette.size.max(1))
                .map(|row| row.iter().map(|&b| if b { '1' } else { '0' }).collect())
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::{build_toy_model, ToyModelSpec};
    use crate::losses::joint_loss;
    use crate::renderer::render_silhouette;

    fn model() -> BodyModel {
        build_toy_model(&ToyModelSpec { n_vertices: 300, ..Default::default() }).unwrap().model
    }

    fn cfg(count: usize) -> GenConfig {
        GenConfig { count, noise: NoiseSpec::none(), seed: 7, ..Default::default() }
    }

    fn samplers(m: &BodyModel, family: PoseFamily) -> (PoseSampler, ShapeSampler) {
        (PoseSampler::procedural(m, family, 7), ShapeSampler { sigma: 1.0, seed: 7 })
    }

    #[test]
    fn record_round_trips_through_renderer() {
        let m = model();
        let (p, s) = samplers(&m, PoseFamily::Standard);
        let data = generate_dataset(&m, &p, &s, &cfg(4)).unwrap();
        for r in &data {
            let (mesh, joints) = m.forward(&ShapeParams::new(r.beta.clone()), &PoseParams::new(r.theta.clone())).unwrap();
            let (sil, _) = render_silhouette(&mesh, &r.camera, DEFAULT_TEMPERATURE).unwrap();
            assert_eq!(sil.binarized(), r.silhouette);
            let kp = project_joints(&joints, &r.camera, None).unwrap();
            assert_eq!(kp, r.keypoints);
            assert_eq!(joint_loss(&joints, &m.forward(&ShapeParams::new(r.beta.clone()), &PoseParams::new(r.theta.clone())).unwrap().1).unwrap(), 0.0);
        }
    }

    #[test]
    fn camera_fit_spans_most_of_the_image() {
        let m = model();
        for family in [PoseFamily::Standard, PoseFamily::Overhead] {
            let (p, s) = samplers(&m, family);
            for r in generate_dataset(&m, &p, &s, &cfg(20)).unwrap() {
                let (mesh, _) = m.forward(&ShapeParams::new(r.beta.clone()), &PoseParams::new(r.theta.clone())).unwrap();
                let ys: Vec<f64> = mesh.vertices.iter().map(|v| r.camera.project(v).y).collect();
                let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let frac = (hi - lo) / 64.0;
                assert!((0.7 - 1e-9..=0.9 + 1e-9).contains(&frac), "{frac}");
                assert!(((hi + lo) / 2.0 - 32.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn body_is_upright_in_the_image() {
        let m = model();
        let (p, s) = samplers(&m, PoseFamily::Standard);
        let r = &generate_dataset(&m, &p, &s, &cfg(1)).unwrap()[0];
        let head = m.joint_names().unwrap().iter().position(|n| n == "head").unwrap();
        let ankle = m.joint_names().unwrap().iter().position(|n| n == "l_ankle").unwrap();
        assert!(r.keypoints.points[head].y < r.keypoints.points[ankle].y);
    }

    #[test]
    fn viewpoints_change_only_global_rotation() {
        let m = model();
        let (p, s) = samplers(&m, PoseFamily::Standard);
        let c = GenConfig { viewpoints: vec![0.0, std::f64::consts::FRAC_PI_2], yaw_jitter: 0.0, ..cfg(2) };
        let data = generate_dataset(&m, &p, &s, &c).unwrap();
        assert_eq!(data[0].theta[3..], data[1].theta[3..]);
        assert_eq!(data[0].beta, data[1].beta);
        assert_ne!(data[0].theta[..3], data[1].theta[..3]);
    }

    #[test]
    fn samples_respect_limits() {
        let m = model();
        for family in [PoseFamily::Standard, PoseFamily::Overhead] {
            let (p, s) = samplers(&m, family);
            let PoseSampler::Procedural { limits, shoulders, .. } = &p else { unreachable!() };
            assert_eq!(shoulders.len(), 2);
            for i in 0..200 {
                let t = p.sample(i).unwrap();
                for (j, l) in limits.iter().enumerate() {
                    let w = t.joint(j);
                    match *l {
                        JointLimit::Ball(lim) => {
                            if family == PoseFamily::Standard || shoulders.iter().all(|x| x.0 != j) {
                                assert!(w.iter().all(|x| x.abs() <= lim));
                            }
                        }
                        JointLimit::Hinge { axis, max } => {
                            assert!(w.norm() <= max + 1e-12);
                            assert!((w - axis * w.dot(&axis)).norm() < 1e-12);
                            assert!(w.dot(&axis) >= 0.0);
                        }
                    }
                }
                for &(j, sign) in shoulders {
                    let z = t.joint(j).z * sign;
                    if family == PoseFamily::Overhead {
                        assert!((OVERHEAD_RANGE.0..=OVERHEAD_RANGE.1).contains(&z));
                    } else {
                        assert!(z.abs() <= BALL_LIMIT);
                    }
                }
                let b = s.sample(10, i);
                assert!(b.beta.iter().all(|x| x.abs() <= 3.0));
            }
        }
    }

    #[test]
    fn dataset_bytes_are_deterministic() {
        let m = model();
        let (p, s) = samplers(&m, PoseFamily::Standard);
        let c = GenConfig { noise: NoiseSpec::default(), ..cfg(40) };
        let layout = RecordLayout::for_model(&m);
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_dataset(&mut a, &generate_dataset(&m, &p, &s, &c).unwrap(), &layout).unwrap();
        write_dataset(&mut b, &generate_dataset(&m, &p, &s, &c).unwrap(), &layout).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8 + 40 * layout.record_bytes());
        // Any record regenerates on its own.
        let lone = generate_record(&m, &p, &s, &c, 17).unwrap();
        assert_eq!(read_dataset(&a[..], &layout).unwrap()[17], lone);
    }

    #[test]
    fn file_round_trip_and_errors() {
        let m = model();
        let (p, s) = samplers(&m, PoseFamily::Standard);
        let data = generate_dataset(&m, &p, &s, &GenConfig { noise: NoiseSpec::default(), ..cfg(5) }).unwrap();
        let layout = RecordLayout::for_model(&m);
        let mut buf = Vec::new();
        write_dataset(&mut buf, &data, &layout).unwrap();
        assert_eq!(&buf[..4], b"BFD1");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 5);
        assert_eq!(read_dataset(&buf[..], &layout).unwrap(), data);
        assert!(read_dataset(&buf[..buf.len() - 1], &layout).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_dataset(&bad[..], &layout).is_err());
        let json = serde_json::to_string(&RecordJson::from(&data[0])).unwrap();
        assert!(json.contains("\"silhouette\""));
    }

    #[test]
    fn file_sampler_runs_out() {
        let m = model();
        let text = format!("{}\n\n{}\n", vec!["0.0"; 48].join(" "), vec!["0.1"; 48].join(" "));
        let p = PoseSampler::from_text(&text, m.pose_dim()).unwrap();
        let s = ShapeSampler { sigma: 1.0, seed: 1 };
        assert!(generate_dataset(&m, &p, &s, &cfg(2)).is_ok());
        assert!(matches!(generate_dataset(&m, &p, &s, &cfg(3)), Err(Error::EndOfData(_))));
        assert!(PoseSampler::from_text("1 2 3", m.pose_dim()).is_err());
    }

    #[test]
    fn noise_semantics() {
        let m = model();
        let (p, s) = samplers(&m, PoseFamily::Standard);
        let clean = generate_dataset(&m, &p, &s, &cfg(1)).unwrap().remove(0);
        assert_eq!(apply_noise(&clean, &NoiseSpec::none(), 1, 0).unwrap(), clean);
        let all = NoiseSpec { dropout: 1.0, ..NoiseSpec::none() };
        let dropped = apply_noise(&clean, &all, 1, 0).unwrap();
        assert!(dropped.keypoints.confidences.iter().all(|&c| c == 0.0));
        assert!(dropped.keypoints.points.iter().all(|p| *p == Vec2::new(32.0, 32.0)));

        let spec = NoiseSpec { keypoint_sigma: 2.0, dropout: 0.0, silhouette_radius: 0 };
        let mut sq = 0.0;
        let mut n = 0.0;
        for i in 0..700 {
            let noisy = apply_noise(&clean, &spec, 3, i).unwrap();
            for ((a, b), c) in noisy.keypoints.points.iter().zip(&clean.keypoints.points).zip(&noisy.keypoints.confidences) {
                let d = a - b;
                sq += d.x * d.x + d.y * d.y;
                n += 2.0;
                assert!((c - (-d.norm_squared() / 8.0).exp()).abs() < 1e-12);
            }
        }
        let std = (sq / n).sqrt();
        assert!((std - 2.0).abs() < 0.1, "{std}");
    }

    #[test]
    fn silhouette_morphology() {
        let m = model();
        let (p, s) = samplers(&m, PoseFamily::Standard);
        let clean = generate_dataset(&m, &p, &s, &cfg(1)).unwrap().remove(0);
        let grown = apply_noise(&clean, &NoiseSpec { silhouette_radius: 1, ..NoiseSpec::none() }, 0, 0).unwrap();
        let shrunk = apply_noise(&clean, &NoiseSpec { silhouette_radius: -1, ..NoiseSpec::none() }, 0, 0).unwrap();
        let (c, g, k) = (clean.silhouette.count(), grown.silhouette.count(), shrunk.silhouette.count());
        assert!(g > c && c > k);
        for i in 0..4096 {
            assert!(!shrunk.silhouette.bits[i] || clean.silhouette.bits[i]);
            assert!(!clean.silhouette.bits[i] || grown.silhouette.bits[i]);
        }
    }
}
