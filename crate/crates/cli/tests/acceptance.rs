//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use sha2::{Digest, Sha256};
use shapelift::body_model::{build_toy_model, ToyModelSpec};
use shapelift::datagen::{apply_viewpoint, fit_camera, make_record, GenConfig, NoiseSpec, PoseFamily, PoseSampler, ShapeSampler};
use shapelift::fitter::{fit, FitObjective, FitProblem, FitSettings};
use shapelift::losses::{joint_loss, per_vertex_loss, reprojection_loss, LossConfig};
use shapelift::metrics::{mean_per_vertex_error, reconstruction_error, segmentation_scores};
use shapelift::renderer::{render_silhouette, render_silhouette_grad, Mask, IMAGE_SIZE};
use shapelift::rng::{purpose, StreamRng};
use shapelift::rotation::{rodrigues, rodrigues_jacobian};
use shapelift::{BodyModel, JointSet, Keypoints2D, Mesh, PoseParams, ShapeParams, Silhouette, Vec2, Vec3};
use shapelift_cli::experiments::{
    run_ablation, run_anchored_fit, run_domain_shift, AblationConfig, AnchoredFitConfig, DomainShiftConfig,
};
use shapelift_nn::train::LossVariant;
use shapelift_nn::{LayerSpec, Mode, Network, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

type Criterion = fn() -> Outcome;

fn main() {
    let criteria: [(&str, Criterion); 7] = [
        ("gradient suite", c1_gradients),
        ("loss-variant ordering", c2_ablation),
        ("finetuning under domain shift", c3_domain_shift),
        ("anchored-fit speedup", c4_anchored_fit),
        ("synthetic recovery", c5_recovery),
        ("oracle equivalences", c6_oracles),
        ("determinism", c7_determinism),
    ];
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let out = run();
        let secs = t.elapsed().as_secs_f64();
        println!("criterion {id} {}: {name}: {} ({secs:.1} s)", if out.pass { "PASS" } else { "FAIL" }, out.detail);
        failed += (!out.pass) as usize;
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn rng(stream: u64) -> StreamRng {
    StreamRng::new(2024, purpose::EXPERIMENT, stream)
}

fn small_model() -> BodyModel {
    build_toy_model(&ToyModelSpec { n_vertices: 300, ..Default::default() }).unwrap().model
}

fn random_params(model: &BodyModel, r: &mut StreamRng, index: u64) -> (PoseParams, ShapeParams) {
    let poses = PoseSampler::procedural(model, PoseFamily::Standard, 5);
    let theta = apply_viewpoint(&poses.sample(index).unwrap(), r.uniform_range(-3.0, 3.0)).unwrap();
    let beta = ShapeSampler { sigma: 1.0, seed: 5 }.sample(model.shape_dim(), index);
    (theta, beta)
}

// ------------------------------------------------------------------------ 1

/// Worst error over a suite of cases plus the number of cases run.
struct Suite {
    cases: usize,
    worst: f64,
    tol: f64,
}

impl Suite {
    fn new(tol: f64) -> Self {
        Self { cases: 0, worst: 0.0, tol }
    }

    fn ok(&self) -> bool {
        self.worst < self.tol
    }
}

fn rodrigues_suite() -> Suite {
    let mut s = Suite::new(1e-5);
    let mut r = rng(1);
    let h = 1e-5;
    for i in 0..150 {
        let dir = Vec3::new(r.standard_normal(), r.standard_normal(), r.standard_normal()).normalize();
        let angle = match i % 3 {
            0 => r.uniform_range(1e-4, 0.1),
            1 => r.uniform_range(0.1, 3.0),
            _ => r.uniform_range(3.0, 3.14),
        };
        let w = dir * angle;
        let jac = rodrigues_jacobian(&w).unwrap();
        for axis in 0..3 {
            let (mut wp, mut wm) = (w, w);
            wp[axis] += h;
            wm[axis] -= h;
            let d = (rodrigues(&wp).unwrap() - rodrigues(&wm).unwrap()) / (2.0 * h);
            let mut num = 0.0;
            let mut den = 0.0;
            for row in 0..3 {
                for col in 0..3 {
                    num += (jac[(3 * row + col, axis)] - d[(row, col)]).powi(2);
                    den += d[(row, col)].powi(2);
                }
            }
            s.worst = s.worst.max(num.sqrt() / den.sqrt());
        }
        s.cases += 1;
    }
    s
}

fn flat(v: &[Vec3]) -> Vec<f64> {
    v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

fn forward_suite(model: &BodyModel) -> Suite {
    let mut s = Suite::new(1e-4);
    let mut r = rng(2);
    let h = 1e-5;
    for i in 0..40 {
        let (theta, beta) = random_params(model, &mut r, i);
        let jac = model.jacobians(&beta, &theta).unwrap();
        let mut check = |an: &dyn Fn(usize) -> f64, fd: &[f64]| {
            for (row, &f) in fd.iter().enumerate() {
                let a = an(row);
                let m = a.abs().max(f.abs());
                if m > 1e-6 {
                    s.worst = s.worst.max((a - f).abs() / m);
                }
            }
        };
        for k in 0..model.pose_dim() {
            let (mut tp, mut tm) = (theta.clone(), theta.clone());
            tp.theta[k] += h;
            tm.theta[k] -= h;
            let vp = flat(&model.forward(&beta, &tp).unwrap().0.vertices);
            let vm = flat(&model.forward(&beta, &tm).unwrap().0.vertices);
            let fd: Vec<f64> = vp.iter().zip(&vm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            check(&|row| jac.d_theta[(row, k)], &fd);
        }
        for k in 0..model.shape_dim() {
            let (mut bp, mut bm) = (beta.clone(), beta.clone());
            bp.beta[k] += h;
            bm.beta[k] -= h;
            let vp = flat(&model.forward(&bp, &theta).unwrap().0.vertices);
            let vm = flat(&model.forward(&bm, &theta).unwrap().0.vertices);
            let fd: Vec<f64> = vp.iter().zip(&vm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            check(&|row| jac.d_beta[(row, k)], &fd);
        }
        s.cases += 1;
    }
    s
}

fn posed_scene(model: &BodyModel, r: &mut StreamRng, index: u64) -> (Mesh, shapelift::Camera) {
    let (theta, beta) = random_params(model, r, index);
    let (mesh, _) = model.forward(&beta, &theta).unwrap();
    let rest = Mesh::new(model.shaped_rest(&beta).unwrap(), model.faces().clone()).height();
    let cam = fit_camera(rest, &mesh.vertices, 0.8, IMAGE_SIZE).unwrap();
    (mesh, cam)
}

fn renderer_suite(model: &BodyModel) -> Suite {
    let mut s = Suite::new(1e-3);
    let mut r = rng(3);
    let h = 1e-6;
    for i in 0..60 {
        let (mesh, cam) = posed_scene(model, &mut r, 100 + i);
        let temp = r.uniform_range(0.5, 1.5);
        let upstream: Vec<f64> = (0..IMAGE_SIZE * IMAGE_SIZE).map(|_| r.standard_normal()).collect();
        let grad = render_silhouette_grad(&mesh, &cam, temp, &upstream).unwrap();
        let loss = |m: &Mesh| -> f64 {
            let (sil, _) = render_silhouette(m, &cam, temp).unwrap();
            sil.pixels.iter().zip(&upstream).map(|(a, b)| a * b).sum()
        };
        for _ in 0..6 {
            let (v, c) = (r.below(mesh.vertices.len()), r.below(3));
            let (mut mp, mut mm) = (mesh.clone(), mesh.clone());
            mp.vertices[v][c] += h;
            mm.vertices[v][c] -= h;
            let fd = (loss(&mp) - loss(&mm)) / (2.0 * h);
            let an = grad[v][c];
            s.worst = s.worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-4));
        }
        s.cases += 1;
    }
    s
}

fn random_tensor(shape: &[usize], r: &mut StreamRng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.standard_normal()).collect()).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Parameter and input gradients of `<u, f(x)>` on sampled coordinates.
fn layer_case(net: &mut Network, x: &Tensor, mode: Mode, r: &mut StreamRng) -> f64 {
    let (y, tape) = net.forward(x, mode).unwrap();
    let u = random_tensor(y.shape(), r);
    let (grads, dx) = net.backward(&tape, &u).unwrap();
    let h = 1e-6;
    let err = |fd: f64, an: f64| (fd - an).abs() / (fd.abs().max(an.abs()) + 1e-5);
    let mut worst: f64 = 0.0;
    for p in 0..net.params().len() {
        for _ in 0..3 {
            let k = r.below(net.params()[p].len());
            let orig = net.params()[p].data()[k];
            net.params_mut()[p].data_mut()[k] = orig + h;
            let lp = dot(&u, &net.forward(x, mode).unwrap().0);
            net.params_mut()[p].data_mut()[k] = orig - h;
            let lm = dot(&u, &net.forward(x, mode).unwrap().0);
            net.params_mut()[p].data_mut()[k] = orig;
            worst = worst.max(err((lp - lm) / (2.0 * h), grads[p].data()[k]));
        }
    }
    for _ in 0..4 {
        let k = r.below(x.len());
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.data_mut()[k] += h;
        xm.data_mut()[k] -= h;
        let fd = (dot(&u, &net.forward(&xp, mode).unwrap().0) - dot(&u, &net.forward(&xm, mode).unwrap().0)) / (2.0 * h);
        worst = worst.max(err(fd, dx.data()[k]));
    }
    worst
}

fn layer_suite() -> Suite {
    let mut s = Suite::new(1e-4);
    let mut r = rng(4);
    let kinds: [(&[usize], Vec<LayerSpec>); 6] = [
        (&[7], vec![LayerSpec::Dense { units: 5 }]),
        (&[2, 5, 6], vec![LayerSpec::Conv3x3 { channels: 3 }]),
        (&[2, 4, 6], vec![LayerSpec::MaxPool2, LayerSpec::Dense { units: 3 }]),
        (&[6], vec![LayerSpec::Dense { units: 6 }, LayerSpec::Relu]),
        (&[6], vec![LayerSpec::Dense { units: 6 }, LayerSpec::Dropout { rate: 0.3 }]),
        (
            &[5],
            vec![LayerSpec::Residual { body: vec![LayerSpec::Dense { units: 5 }, LayerSpec::Relu, LayerSpec::Dense { units: 5 }] }],
        ),
    ];
    for i in 0..120u64 {
        let (shape, specs) = &kinds[i as usize % kinds.len()];
        let mut net = Network::new(shape, specs.clone(), i).unwrap();
        let mut batch = vec![3];
        batch.extend_from_slice(shape);
        let x = random_tensor(&batch, &mut r);
        s.worst = s.worst.max(layer_case(&mut net, &x, Mode::Train { stream: i }, &mut r));
        s.cases += 1;
    }
    s
}

fn objective_suite(model: &BodyModel) -> Suite {
    let mut s = Suite::new(1e-3);
    let mut r = rng(5);
    let h = 1e-6;
    for i in 0..130 {
        let (theta, beta) = random_params(model, &mut r, 200 + i);
        let cfg = GenConfig { noise: NoiseSpec::none(), ..Default::default() };
        let rec = make_record(model, &beta, &theta, &cfg).unwrap();
        let start: Vec<f64> = theta.theta.iter().map(|t| t + r.normal(0.0, 0.1)).collect();
        let with_sil = i % 2 == 0;
        let mut settings = FitSettings { sigma_keypoint: r.uniform_range(2.0, 50.0), ..Default::default() };
        settings.temperature = r.uniform_range(0.5, 1.5);
        settings.weights.silhouette = if with_sil { 0.05 } else { 0.0 };
        let prob = FitProblem {
            keypoints: rec.keypoints.clone(),
            silhouette: with_sil.then(|| Silhouette::from_mask(&rec.silhouette)),
            init_theta: start,
            init_beta: beta.beta.iter().map(|b| b * 0.7).collect(),
            init_camera: rec.camera.with_params([rec.camera.scale * 1.03, rec.camera.tx + 0.4, rec.camera.ty - 0.3]),
            anchor: Some(theta.theta.iter().map(|t| t + r.normal(0.0, 0.3)).collect()),
            settings,
        };
        let obj = FitObjective::new(model, &prob).unwrap();
        let x = obj.pack(&prob.init_theta, &prob.init_beta, &prob.init_camera);
        let (_, g) = obj.gradient(&x).unwrap();
        for _ in 0..8 {
            let k = r.below(x.len());
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[k] += h;
            xm[k] -= h;
            let fd = (obj.evaluate(&xp).unwrap().total() - obj.evaluate(&xm).unwrap().total()) / (2.0 * h);
            s.worst = s.worst.max((fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-4));
        }
        s.cases += 1;
    }
    s
}

fn c1_gradients() -> Outcome {
    let model = small_model();
    let suites = [
        ("rodrigues", rodrigues_suite()),
        ("forward", forward_suite(&model)),
        ("rasterizer", renderer_suite(&model)),
        ("layers", layer_suite()),
        ("fit objective", objective_suite(&model)),
    ];
    let total: usize = suites.iter().map(|(_, s)| s.cases).sum();
    let pass = total >= 500 && suites.iter().all(|(_, s)| s.ok());
    let parts: Vec<String> =
        suites.iter().map(|(n, s)| format!("{n} {} cases worst {:.1e} (tol {:.0e})", s.cases, s.worst, s.tol)).collect();
    Outcome { pass, detail: format!("{total} cases; {}", parts.join(", ")) }
}

// ------------------------------------------------------------------------ 2

fn c2_ablation() -> Outcome {
    let cfg = AblationConfig::default();
    let report = run_ablation(&cfg).unwrap();
    let aa = report.median_of(LossVariant::AxisAngle).unwrap();
    let rm = report.median_of(LossVariant::RotMat).unwrap();
    let rmv = report.median_of(LossVariant::RotMatVertex).unwrap();
    let ratio = rm / aa;
    Outcome {
        pass: aa > rm && rm > rmv && ratio <= 0.5,
        detail: format!(
            "median held-out error axis-angle {aa:.4} > rot-mat {rm:.4} > rot-mat+vertex {rmv:.4}; rot-mat/axis-angle {ratio:.3} (bound 0.5); {} records, seeds {:?}",
            cfg.data.count, cfg.seeds
        ),
    }
}

// ------------------------------------------------------------------------ 3

fn c3_domain_shift() -> Outcome {
    let cfg = DomainShiftConfig::default();
    let report = run_domain_shift(&cfg).unwrap();
    let gain = report.median_shifted_gain;
    let change = report.median_in_dist_change;
    let runs: Vec<String> =
        report.runs.iter().map(|r| format!("{:+.1}%/{:+.1}%", -100.0 * r.shifted_gain(), 100.0 * r.in_dist_change())).collect();
    Outcome {
        pass: gain >= 0.05 && change.abs() < 0.05,
        detail: format!(
            "shifted family error reduced {:.1}% (need >= 5%), in-distribution change {:+.1}% (need |.| < 5%); per seed shifted/in-dist {}",
            100.0 * gain,
            100.0 * change,
            runs.join(" ")
        ),
    }
}

// ------------------------------------------------------------------------ 4

fn c4_anchored_fit() -> Outcome {
    let cfg = AnchoredFitConfig::default();
    let report = run_anchored_fit(&cfg).unwrap();
    Outcome {
        pass: report.problems.len() == 50 && report.iteration_ratio <= 1.0 / 3.0 && report.anchored_no_worse >= 0.6,
        detail: format!(
            "{} problems; median iterations to the mean-pose final objective {} (anchored) vs {} (mean pose), ratio {:.3} (bound 0.333); anchored no worse on {:.0}% (need 60%)",
            report.problems.len(),
            report.median_anchored_iterations,
            report.median_mean_pose_iterations,
            report.iteration_ratio,
            100.0 * report.anchored_no_worse
        ),
    }
}

// ------------------------------------------------------------------------ 5

fn c5_recovery() -> Outcome {
    let model = build_toy_model(&ToyModelSpec::default()).unwrap().model;
    let mut r = rng(6);
    let mut good = 0;
    let mut worst: f64 = 0.0;
    let n = 100;
    for i in 0..n {
        let (theta, beta) = random_params(&model, &mut r, 1000 + i);
        let cfg = GenConfig { noise: NoiseSpec::none(), ..Default::default() };
        let rec = make_record(&model, &beta, &theta, &cfg).unwrap();
        let mut settings = FitSettings::default();
        settings.weights.beta_prior = 0.0;
        let prob = FitProblem {
            keypoints: rec.keypoints.clone(),
            silhouette: None,
            init_theta: theta.theta.iter().map(|t| t + r.normal(0.0, 0.05)).collect(),
            init_beta: beta.beta.iter().map(|b| b + r.normal(0.0, 0.1)).collect(),
            init_camera: rec.camera,
            anchor: None,
            settings,
        };
        let res = fit(&model, &prob).unwrap();
        let (truth, _) = model.forward(&beta, &theta).unwrap();
        let (est, _) = model.forward(&ShapeParams::new(res.beta), &PoseParams::new(res.theta)).unwrap();
        let rel = mean_per_vertex_error(&est, &truth).unwrap() / truth.height();
        worst = worst.max(rel);
        good += (rel < 0.05) as usize;
    }
    let share = good as f64 / n as f64;
    Outcome {
        pass: share >= 0.95,
        detail: format!("{good}/{n} problems under 5% of body height (need 95%); worst {:.2}%", 100.0 * worst),
    }
}

// ------------------------------------------------------------------------ 6

fn rel_close(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn random_points(r: &mut StreamRng, n: usize) -> Vec<Vec3> {
    (0..n).map(|_| Vec3::new(r.standard_normal(), r.standard_normal(), r.standard_normal())).collect()
}

fn sum_sq_oracle(a: &[Vec3], b: &[Vec3]) -> f64 {
    let mut total = 0.0;
    for i in 0..a.len() {
        for c in 0..3 {
            let d = a[i][c] - b[i][c];
            total += d * d;
        }
    }
    total
}

fn reprojection_oracle(kh: &Keypoints2D, k: &Keypoints2D, sh: &Silhouette, s: &Silhouette, cfg: &LossConfig) -> f64 {
    let mut kp = 0.0;
    for i in 0..k.points.len() {
        let c = if cfg.use_confidence { k.confidences[i] } else { 1.0 };
        let dx = kh.points[i].x - k.points[i].x;
        let dy = kh.points[i].y - k.points[i].y;
        kp += c * (dx * dx + dy * dy);
    }
    let mut sil = 0.0;
    for p in 0..s.pixels.len() {
        sil += (sh.pixels[p] - s.pixels[p]).powi(2);
    }
    if cfg.normalize {
        kp /= k.points.len() as f64;
        sil /= s.pixels.len() as f64;
    }
    cfg.mu * kp + sil
}

fn segmentation_oracle(a: &Mask, b: &Mask) -> (f64, f64) {
    let n = a.bits.len() as f64;
    let xor = a.bits.iter().zip(&b.bits).filter(|(x, y)| x != y).count() as f64;
    let inter = a.bits.iter().zip(&b.bits).filter(|(x, y)| **x && **y).count() as f64;
    let sizes = (a.count() + b.count()) as f64;
    (1.0 - xor / n, if sizes == 0.0 { 1.0 } else { 2.0 * inter / sizes })
}

/// Umeyama's SVD solution of the similarity alignment.
fn reconstruction_oracle(x: &[Vec3], y: &[Vec3]) -> f64 {
    let n = x.len() as f64;
    let mx: Vector3<f64> = x.iter().sum::<Vec3>() / n;
    let my: Vector3<f64> = y.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (a, b) in x.iter().zip(y) {
        cov += (b - my) * (a - mx).transpose();
        var_x += (a - mx).norm_squared();
    }
    cov /= n;
    var_x /= n;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rot = u * d * vt;
    let scale = (Matrix3::from_diagonal(&svd.singular_values) * d).trace() / var_x;
    let t = my - rot * mx * scale;
    x.iter().zip(y).map(|(a, b)| (rot * a * scale + t - b).norm()).sum::<f64>() / n
}

fn c6_oracles() -> Outcome {
    let mut r = rng(7);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |k: &'static str, e: f64| {
        let w = worst.entry(k).or_insert(0.0);
        *w = w.max(e);
    };
    let no_faces: Arc<[[usize; 3]]> = Arc::from(Vec::<[usize; 3]>::new());
    for _ in 0..100 {
        let n = 5 + r.below(50);
        let (a, b) = (random_points(&mut r, n), random_points(&mut r, n));
        let ma = Mesh::new(a.clone(), no_faces.clone());
        let mb = Mesh::new(b.clone(), no_faces.clone());
        note("per-vertex loss", rel_close(per_vertex_loss(&ma, &mb).unwrap(), sum_sq_oracle(&a, &b)));
        let ja = JointSet { joints: a.clone() };
        let jb = JointSet { joints: b.clone() };
        note("joint loss", rel_close(joint_loss(&ja, &jb).unwrap(), sum_sq_oracle(&a, &b)));

        let m = 3 + r.below(20);
        let pts = |r: &mut StreamRng| (0..m).map(|_| Vec2::new(r.uniform_range(0.0, 64.0), r.uniform_range(0.0, 64.0))).collect();
        let kh = Keypoints2D::certain(pts(&mut r));
        let mut k = Keypoints2D::certain(pts(&mut r));
        k.confidences = (0..m).map(|_| r.uniform()).collect();
        let size = 8 + r.below(24);
        let sil = |r: &mut StreamRng| Silhouette { size, pixels: (0..size * size).map(|_| r.uniform()).collect() };
        let (sh, s) = (sil(&mut r), sil(&mut r));
        let cfg = LossConfig { mu: r.uniform_range(0.1, 20.0), use_confidence: r.bernoulli(0.5), normalize: r.bernoulli(0.5), ..LossConfig::default() };
        let got = reprojection_loss(&kh, &k, &sh, &s, &cfg).unwrap().value;
        note("reprojection loss", rel_close(got, reprojection_oracle(&kh, &k, &sh, &s, &cfg)));

        let p = r.uniform();
        let mask = |r: &mut StreamRng| Mask { size, bits: (0..size * size).map(|_| r.bernoulli(p)).collect() };
        let (ma, mb) = (mask(&mut r), mask(&mut r));
        let (acc, f1) = segmentation_scores(&ma, &mb).unwrap();
        let (oacc, of1) = segmentation_oracle(&ma, &mb);
        note("segmentation scores", rel_close(acc, oacc).max(rel_close(f1, of1)));

        let nj = 4 + r.below(20);
        let truth = random_points(&mut r, nj);
        let est: Vec<Vec3> = truth.iter().map(|t| t * 1.3 + Vec3::new(r.normal(0.0, 0.3), r.normal(0.0, 0.3), r.normal(0.0, 0.3))).collect();
        let re = reconstruction_error(&JointSet { joints: est.clone() }, &JointSet { joints: truth.clone() }).unwrap();
        note("reconstruction error", rel_close(re, reconstruction_oracle(&est, &truth)));

        // A random similarity applied to the estimate leaves the error unchanged.
        let axis = Vec3::new(r.standard_normal(), r.standard_normal(), r.standard_normal()).normalize() * r.uniform_range(0.0, 3.1);
        let rot = rodrigues(&axis).unwrap();
        let scale = r.uniform_range(0.2, 5.0);
        let shift = Vec3::new(r.normal(0.0, 10.0), r.normal(0.0, 10.0), r.normal(0.0, 10.0));
        let moved: Vec<Vec3> = est.iter().map(|p| rot * p * scale + shift).collect();
        let re2 = reconstruction_error(&JointSet { joints: moved }, &JointSet { joints: truth }).unwrap();
        note("similarity invariance", rel_close(re, re2));
    }
    let pass = worst.values().all(|&e| e < 1e-9);
    let detail: Vec<String> = worst.iter().map(|(k, e)| format!("{k} {e:.1e}")).collect();
    Outcome { pass, detail: format!("100 instances each, worst relative error (tol 1e-9): {}", detail.join(", ")) }
}

// ------------------------------------------------------------------------ 7

fn pipeline(dir: &Path) {
    let run = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_shapelift")).current_dir(dir).args(args).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    std::fs::write(
        dir.join("train.json"),
        r#"{"plan": {"phase1_steps": 150, "phase2_steps": 150, "batch_size": 16}, "shape_steps": 40, "shape_batch": 8}"#,
    )
    .unwrap();
    std::fs::write(
        dir.join("ablate.json"),
        r#"{"data": {"count": 200}, "test_records": 20, "seeds": [0, 1], "plan": {"phase1_steps": 60, "phase2_steps": 60, "batch_size": 8, "train_shape": false}, "shape_steps": 10, "shape_batch": 4}"#,
    )
    .unwrap();
    run(&["make-model", "--seed", "3", "-o", "model.json"]);
    run(&["gen", "--model", "model.json", "--seed", "3", "--count", "600", "-o", "train.bin"]);
    run(&["gen", "--model", "model.json", "--seed", "4", "--count", "20", "-o", "test.bin"]);
    run(&["train", "--model", "model.json", "--data", "train.bin", "--config", "train.json", "--seed", "3", "-o", "priors"]);
    run(&["predict", "--model", "model.json", "--priors", "priors", "--data", "test.bin", "-o", "pred.json"]);
    run(&["eval", "--model", "model.json", "--data", "test.bin", "--predictions", "pred.json", "-o", "eval.json"]);
    run(&["fit", "--model", "model.json", "--data", "test.bin", "--anchor", "pred.json", "--compare", "--limit", "6", "-o", "fit.json"]);
    run(&["render", "--model", "model.json", "--data", "test.bin", "--predictions", "pred.json", "--indices", "0,5", "-o", "render"]);
    run(&["ablate", "--config", "ablate.json", "--seed", "3", "-o", "ablation"]);
}

fn digests(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, Sha256::digest(std::fs::read(&p).unwrap()).to_vec());
            }
        }
    }
    out
}

fn c7_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let (da, db) = (digests(a.path()), digests(b.path()));
    let differing: Vec<&String> = da.keys().filter(|k| da.get(*k) != db.get(*k)).collect();
    let pass = da.len() == db.len() && differing.is_empty() && da.len() > 20;
    Outcome {
        pass,
        detail: format!(
            "{} artifacts (dataset, checkpoints, loss log, predictions, reports, renders) compared byte for byte; {} differ {:?}",
            da.len(),
            differing.len(),
            differing
        ),
    }
}
