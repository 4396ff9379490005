//! Procedural capsule-limb humanoid.
//!
//! Ten capsules (torso, head, two-segment arms and legs) in an A-pose, y up,
//! facing +z, pelvis at the origin. Joints are spread over five chains
//! (spine, arms, legs) hanging off the pelvis root; the joint count is a
//! free parameter. Capsule rings may hold different vertex counts so any
//! vertex budget above the minimum is met exactly.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use super::{BodyModel, BodyModelParts, SparseRows, MAX_REGRESSOR_NNZ};
use crate::rng::{purpose, StreamRng};
use crate::{Error, Result, Vec3};

/// Minimum vertices per capsule: two poles and three rings of three.
const MIN_CAPSULE_VERTICES: usize = 11;
/// Per-vertex RMS displacement of one unit of a shape coefficient.
const SHAPE_UNIT_RMS: f64 = 0.03;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToyModelSpec {
    pub n_vertices: usize,
    /// Non-root joints (K).
    pub n_body_joints: usize,
    pub n_shape: usize,
    pub seed: u64,
}

impl Default for ToyModelSpec {
    fn default() -> Self {
        Self { n_vertices: 600, n_body_joints: 15, n_shape: 10, seed: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PartKind {
    Torso,
    Head,
    UpperArm(Side),
    Forearm(Side),
    Thigh(Side),
    Shin(Side),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Chain {
    Spine,
    Arm(Side),
    Leg(Side),
}

impl Chain {
    fn prefix(self) -> &'static str {
        match self {
            Chain::Spine => "spine",
            Chain::Arm(Side::Left) => "l_arm",
            Chain::Arm(Side::Right) => "r_arm",
            Chain::Leg(Side::Left) => "l_leg",
            Chain::Leg(Side::Right) => "r_leg",
        }
    }
}

/// A built toy model plus the builder's bookkeeping.
#[derive(Clone, Debug)]
pub struct ToyRig {
    pub model: BodyModel,
    pub vertex_parts: Vec<PartKind>,
}

struct Capsule {
    kind: PartKind,
    a: Vec3,
    b: Vec3,
    /// Radii along the two frame axes perpendicular to the capsule axis.
    radii: (f64, f64),
}

impl Capsule {
    fn axis(&self) -> Vec3 {
        (self.b - self.a).normalize()
    }

    fn mean_radius(&self) -> f64 {
        0.5 * (self.radii.0 + self.radii.1)
    }

    fn profile_length(&self) -> f64 {
        (self.b - self.a).norm() + PI * self.mean_radius()
    }

    fn circumference(&self) -> f64 {
        PI * (self.radii.0 + self.radii.1)
    }

    /// Frame `(e1, e2)` with `e1 × e2 = axis`.
    fn frame(&self) -> (Vec3, Vec3) {
        let u = self.axis();
        let z = Vec3::z();
        let e1 = if u.cross(&z).norm() > 1e-6 { u.cross(&z).normalize() } else { u.cross(&Vec3::x()).normalize() };
        let e1 = if e1.x < 0.0 || (e1.x == 0.0 && e1.y < 0.0) { -e1 } else { e1 };
        (e1, u.cross(&e1))
    }
}

struct Ring {
    part: usize,
    center: Vec3,
    vertices: Vec<usize>,
}

struct Tessellation {
    vertices: Vec<Vec3>,
    /// Closest point on the owning capsule's axis segment.
    anchors: Vec<Vec3>,
    vertex_part: Vec<usize>,
    faces: Vec<[usize; 3]>,
    rings: Vec<Ring>,
}

struct Landmarks {
    /// Anatomical pivots per chain followed by the chain tip.
    spine: [Vec3; 4],
    arm: [Vec3; 4],
    leg: [Vec3; 4],
}

fn mirror(v: Vec3, side: Side) -> Vec3 {
    match side {
        Side::Left => v,
        Side::Right => Vec3::new(-v.x, v.y, v.z),
    }
}

fn landmarks() -> Landmarks {
    let (s, c) = (40f64.to_radians().sin(), 40f64.to_radians().cos());
    let shoulder = Vec3::new(0.19, 0.45, 0.0);
    let elbow = shoulder + Vec3::new(c, -s, 0.0) * 0.28;
    let wrist = elbow + Vec3::new(c, -s, 0.0) * 0.25;
    let hand = wrist + Vec3::new(c, -s, 0.0) * 0.08;
    Landmarks {
        spine: [Vec3::new(0.0, 0.2, 0.0), Vec3::new(0.0, 0.5, 0.0), Vec3::new(0.0, 0.62, 0.0), Vec3::new(0.0, 0.8, 0.0)],
        arm: [shoulder, elbow, wrist, hand],
        leg: [
            Vec3::new(0.09, -0.06, 0.0),
            Vec3::new(0.09, -0.48, 0.0),
            Vec3::new(0.09, -0.87, 0.0),
            Vec3::new(0.09, -0.95, 0.0),
        ],
    }
}

fn capsules(lm: &Landmarks) -> Vec<Capsule> {
    let mut out = vec![
        Capsule { kind: PartKind::Torso, a: Vec3::new(0.0, -0.08, 0.0), b: Vec3::new(0.0, 0.42, 0.0), radii: (0.16, 0.10) },
        Capsule { kind: PartKind::Head, a: Vec3::new(0.0, 0.56, 0.0), b: Vec3::new(0.0, 0.71, 0.0), radii: (0.085, 0.085) },
    ];
    for side in [Side::Left, Side::Right] {
        let arm = lm.arm.map(|v| mirror(v, side));
        let leg = lm.leg.map(|v| mirror(v, side));
        out.push(Capsule { kind: PartKind::UpperArm(side), a: arm[0], b: arm[1], radii: (0.045, 0.045) });
        out.push(Capsule { kind: PartKind::Forearm(side), a: arm[1], b: arm[3], radii: (0.038, 0.038) });
        out.push(Capsule { kind: PartKind::Thigh(side), a: leg[0], b: leg[1], radii: (0.07, 0.07) });
        out.push(Capsule { kind: PartKind::Shin(side), a: leg[1], b: leg[3], radii: (0.05, 0.05) });
    }
    out
}

/// Distributes `n_vertices` over capsules proportionally to surface area.
fn vertex_budget(caps: &[Capsule], n_vertices: usize) -> Vec<usize> {
    let spare = n_vertices - MIN_CAPSULE_VERTICES * caps.len();
    let areas: Vec<f64> = caps.iter().map(|c| c.circumference() * c.profile_length()).collect();
    let total: f64 = areas.iter().sum();
    let exact: Vec<f64> = areas.iter().map(|a| a / total * spare as f64).collect();
    let mut alloc: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = spare - alloc.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..caps.len()).collect();
    // Largest remainder first; ties broken by index for determinism.
    order.sort_by(|&i, &j| {
        let ri = exact[i] - exact[i].floor();
        let rj = exact[j] - exact[j].floor();
        rj.partial_cmp(&ri).unwrap().then(i.cmp(&j))
    });
    for &i in &order {
        if left == 0 {
            break;
        }
        alloc[i] += 1;
        left -= 1;
    }
    alloc.iter().map(|a| a + MIN_CAPSULE_VERTICES).collect()
}

fn tessellate(caps: &[Capsule], budget: &[usize]) -> Tessellation {
    let mut t = Tessellation {
        vertices: Vec::new(),
        anchors: Vec::new(),
        vertex_part: Vec::new(),
        faces: Vec::new(),
        rings: Vec::new(),
    };
    for (pi, (cap, &nv)) in caps.iter().zip(budget).enumerate() {
        let inner = nv - 2;
        let ratio = cap.profile_length() / cap.circumference();
        let n_rings = ((inner as f64 * ratio).sqrt().round() as usize).clamp(3, inner / 3);
        let counts: Vec<usize> =
            (0..n_rings).map(|k| inner / n_rings + usize::from(k < inner % n_rings)).collect();

        let u = cap.axis();
        let (e1, e2) = cap.frame();
        let r = cap.mean_radius();
        let len = (cap.b - cap.a).norm();
        let cap_arc = FRAC_PI_2 * r;
        let total = 2.0 * cap_arc + len;
        // (axial offset from `a`, radius factor) at profile arc length s.
        let profile = |s: f64| -> (f64, f64) {
            if s < cap_arc {
                let phi = s / r - FRAC_PI_2;
                (r * phi.sin(), phi.cos())
            } else if s <= cap_arc + len {
                (s - cap_arc, 1.0)
            } else {
                let phi = (s - cap_arc - len) / r;
                (len + r * phi.sin(), phi.cos())
            }
        };
        let push = |t: &mut Tessellation, p: Vec3, axial: f64| -> usize {
            t.vertices.push(p);
            t.anchors.push(cap.a + u * axial.clamp(0.0, len));
            t.vertex_part.push(pi);
            t.vertices.len() - 1
        };

        let bottom = push(&mut t, cap.a - u * r, -r);
        let mut ring_ids: Vec<Vec<usize>> = Vec::with_capacity(n_rings);
        let mut ring_angles: Vec<Vec<f64>> = Vec::with_capacity(n_rings);
        for (k, &count) in counts.iter().enumerate() {
            let s = total * (k + 1) as f64 / (n_rings + 1) as f64;
            let (axial, rho) = profile(s);
            let center = cap.a + u * axial;
            let offset = if k % 2 == 1 { 0.5 } else { 0.0 };
            let mut ids = Vec::with_capacity(count);
            let mut angles = Vec::with_capacity(count);
            for m in 0..count {
                let alpha = TAU * (m as f64 + offset) / count as f64;
                let p = center + (e1 * (cap.radii.0 * alpha.cos()) + e2 * (cap.radii.1 * alpha.sin())) * rho;
                ids.push(push(&mut t, p, axial));
                angles.push(alpha);
            }
            t.rings.push(Ring { part: pi, center, vertices: ids.clone() });
            ring_ids.push(ids);
            ring_angles.push(angles);
        }
        let top = push(&mut t, cap.b + u * r, len + r);

        let first = &ring_ids[0];
        for m in 0..first.len() {
            t.faces.push([bottom, first[(m + 1) % first.len()], first[m]]);
        }
        for k in 0..n_rings - 1 {
            zip_rings(&ring_ids[k], &ring_angles[k], &ring_ids[k + 1], &ring_angles[k + 1], &mut t.faces);
        }
        let last = &ring_ids[n_rings - 1];
        for m in 0..last.len() {
            t.faces.push([top, last[m], last[(m + 1) % last.len()]]);
        }
    }
    t
}

/// Triangulates the band between two rings with possibly different counts,
/// advancing whichever ring has the smaller next angle.
fn zip_rings(lower: &[usize], lower_ang: &[f64], upper: &[usize], upper_ang: &[f64], faces: &mut Vec<[usize; 3]>) {
    let (a, b) = (lower.len(), upper.len());
    let angle = |ang: &[f64], i: usize| ang[i % ang.len()] + TAU * (i / ang.len()) as f64;
    let (mut i, mut j) = (0usize, 0usize);
    while i < a || j < b {
        let advance_lower = if i == a {
            false
        } else if j == b {
            true
        } else {
            angle(lower_ang, i + 1) <= angle(upper_ang, j + 1)
        };
        if advance_lower {
            faces.push([lower[i % a], lower[(i + 1) % a], upper[j % b]]);
            i += 1;
        } else {
            faces.push([lower[i % a], upper[(j + 1) % b], upper[j % b]]);
            j += 1;
        }
    }
}

/// Splits `k` body joints over the chains: spine first, then arm and leg pairs.
fn allocate_joints(k: usize) -> [usize; 3] {
    let mut counts = [0usize; 3]; // spine, per-arm, per-leg
    let mut left = k;
    let mut unit = 0;
    while left > 0 {
        let cost = if unit == 0 { 1 } else { 2 };
        if cost <= left {
            counts[unit] += 1;
            left -= cost;
        }
        unit = (unit + 1) % 3;
    }
    counts
}

/// Joint positions along a chain: the first anatomical pivots, then
/// midpoints of the longest remaining segment (tip included as an end).
fn chain_positions(pivots: &[Vec3; 4], n: usize) -> Vec<(Vec3, Option<&'static str>)> {
    const NAMES: [&str; 3] = ["a", "b", "c"];
    let mut pts: Vec<(Vec3, Option<&'static str>)> =
        pivots[..3].iter().zip(NAMES).take(n).map(|(p, name)| (*p, Some(name))).collect();
    while pts.len() < n {
        let mut chain: Vec<Vec3> = pts.iter().map(|p| p.0).collect();
        chain.push(pivots[3]);
        let (seg, _) = chain
            .windows(2)
            .enumerate()
            .map(|(i, w)| (i, (w[1] - w[0]).norm()))
            .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        let mid = (chain[seg] + chain[seg + 1]) * 0.5;
        pts.insert(seg + 1, (mid, None));
    }
    pts
}

fn joint_name(chain: Chain, tag: Option<&str>, extra: usize) -> String {
    let anatomical = match (chain, tag) {
        (Chain::Spine, Some("a")) => Some("spine".to_string()),
        (Chain::Spine, Some("b")) => Some("neck".to_string()),
        (Chain::Spine, Some("c")) => Some("head".to_string()),
        (Chain::Arm(s), Some(t)) => Some(format!(
            "{}_{}",
            if s == Side::Left { "l" } else { "r" },
            match t {
                "a" => "shoulder",
                "b" => "elbow",
                _ => "wrist",
            }
        )),
        (Chain::Leg(s), Some(t)) => Some(format!(
            "{}_{}",
            if s == Side::Left { "l" } else { "r" },
            match t {
                "a" => "hip",
                "b" => "knee",
                _ => "ankle",
            }
        )),
        _ => None,
    };
    anatomical.unwrap_or_else(|| format!("{}_extra{extra}", chain.prefix()))
}

struct Skeleton {
    names: Vec<String>,
    parents: Vec<Option<usize>>,
    positions: Vec<Vec3>,
    /// End point of each joint's bone.
    bone_ends: Vec<Vec3>,
    /// Joints belonging to each chain, in order.
    chains: Vec<(Chain, Vec<usize>)>,
}

fn skeleton(lm: &Landmarks, k: usize) -> Skeleton {
    let [n_spine, n_arm, n_leg] = allocate_joints(k);
    let mut sk = Skeleton {
        names: vec!["pelvis".into()],
        parents: vec![None],
        positions: vec![Vec3::zeros()],
        bone_ends: vec![Vec3::zeros()],
        chains: Vec::new(),
    };
    let chain_defs = [
        (Chain::Spine, lm.spine, n_spine),
        (Chain::Arm(Side::Left), lm.arm, n_arm),
        (Chain::Arm(Side::Right), lm.arm.map(|v| mirror(v, Side::Right)), n_arm),
        (Chain::Leg(Side::Left), lm.leg, n_leg),
        (Chain::Leg(Side::Right), lm.leg.map(|v| mirror(v, Side::Right)), n_leg),
    ];
    for (chain, pivots, n) in chain_defs {
        let pts = chain_positions(&pivots, n);
        let parent = match chain {
            Chain::Arm(_) => {
                // Highest spine joint below the shoulder.
                let spine = sk.chains.iter().find(|(c, _)| *c == Chain::Spine).map(|(_, j)| j.clone()).unwrap_or_default();
                spine.iter().copied().filter(|&j| sk.positions[j].y < pivots[0].y).last().unwrap_or(0)
            }
            _ => 0,
        };
        let mut ids = Vec::with_capacity(pts.len());
        let mut extra = 0;
        for (idx, (p, tag)) in pts.iter().enumerate() {
            if tag.is_none() {
                extra += 1;
            }
            sk.names.push(joint_name(chain, *tag, extra));
            sk.parents.push(Some(if idx == 0 { parent } else { *ids.last().unwrap() }));
            sk.positions.push(*p);
            let end = pts.get(idx + 1).map(|q| q.0).unwrap_or(pivots[3]);
            sk.bone_ends.push(end);
            ids.push(sk.positions.len() - 1);
        }
        sk.chains.push((chain, ids));
    }
    let spine_ids = &sk.chains[0].1;
    sk.bone_ends[0] = spine_ids.first().map(|&j| sk.positions[j]).unwrap_or(lm.spine[1]);
    sk
}

fn segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + ab * t)).norm()
}

fn chain_joints(sk: &Skeleton, chain: Chain) -> &[usize] {
    sk.chains.iter().find(|(c, _)| *c == chain).map(|(_, j)| j.as_slice()).unwrap_or(&[])
}

/// Joints whose bones may influence a part.
fn skin_candidates(sk: &Skeleton, kind: PartKind) -> Vec<usize> {
    let spine = chain_joints(sk, Chain::Spine);
    let mut out = match kind {
        PartKind::Torso => {
            let mut v = vec![0];
            v.extend(spine.iter().copied().filter(|&j| sk.names[j] != "head"));
            v
        }
        PartKind::Head => spine.iter().copied().filter(|&j| sk.positions[j].y > 0.45).collect(),
        PartKind::UpperArm(s) | PartKind::Forearm(s) => {
            let joints = chain_joints(sk, Chain::Arm(s));
            let mut v = joints.to_vec();
            if let Some(&first) = joints.first() {
                v.push(sk.parents[first].unwrap());
            }
            v
        }
        PartKind::Thigh(s) | PartKind::Shin(s) => {
            let mut v = chain_joints(sk, Chain::Leg(s)).to_vec();
            v.push(0);
            v
        }
    };
    if out.is_empty() {
        out = spine.last().copied().into_iter().collect();
        if out.is_empty() {
            out.push(0);
        }
    }
    out
}

fn skinning_weights(sk: &Skeleton, tess: &Tessellation, caps: &[Capsule]) -> Vec<Vec<f64>> {
    let nj = sk.positions.len();
    tess.vertices
        .iter()
        .zip(&tess.vertex_part)
        .map(|(v, &part)| {
            let cands = skin_candidates(sk, caps[part].kind);
            let mut dists: Vec<(usize, f64)> = cands
                .iter()
                .map(|&j| (j, segment_distance(v, &sk.positions[j], &sk.bone_ends[j])))
                .collect();
            dists.sort_by(|x, y| x.1.partial_cmp(&y.1).unwrap().then(x.0.cmp(&y.0)));
            dists.truncate(2);
            let raw: Vec<(usize, f64)> = dists.iter().map(|&(j, d)| (j, 1.0 / (d * d + 1e-4).powi(2))).collect();
            let total: f64 = raw.iter().map(|x| x.1).sum();
            let mut row = vec![0.0; nj];
            for (j, w) in raw {
                row[j] += w / total;
            }
            row
        })
        .collect()
}

fn joint_regressor(sk: &Skeleton, tess: &Tessellation, caps: &[Capsule], n: usize) -> SparseRows {
    let rows = sk
        .positions
        .iter()
        .enumerate()
        .map(|(j, pos)| {
            let allowed = regressor_parts(sk, j);
            let ring = tess
                .rings
                .iter()
                .filter(|r| allowed.contains(&caps[r.part].kind))
                .min_by(|x, y| (x.center - pos).norm().partial_cmp(&(y.center - pos).norm()).unwrap())
                .expect("every joint has a candidate ring");
            let count = ring.vertices.len().min(MAX_REGRESSOR_NNZ);
            let w = 1.0 / count as f64;
            let mut cols: Vec<usize> = (0..count).map(|m| ring.vertices[m * ring.vertices.len() / count]).collect();
            cols.sort_unstable();
            cols.into_iter().map(|c| (c, w)).collect()
        })
        .collect();
    SparseRows { n_cols: n, rows }
}

fn regressor_parts(sk: &Skeleton, j: usize) -> Vec<PartKind> {
    if j == 0 {
        return vec![PartKind::Torso];
    }
    let chain = sk.chains.iter().find(|(_, ids)| ids.contains(&j)).map(|(c, _)| *c).unwrap();
    match chain {
        Chain::Spine => vec![PartKind::Torso, PartKind::Head],
        Chain::Arm(s) => vec![PartKind::UpperArm(s), PartKind::Forearm(s)],
        Chain::Leg(s) => vec![PartKind::Thigh(s), PartKind::Shin(s)],
    }
}

/// Symmetry group of a part for shape fields.
fn part_group(kind: PartKind) -> usize {
    match kind {
        PartKind::Torso => 0,
        PartKind::Head => 1,
        PartKind::UpperArm(_) => 2,
        PartKind::Forearm(_) => 3,
        PartKind::Thigh(_) => 4,
        PartKind::Shin(_) => 5,
    }
}

fn shape_field(tess: &Tessellation, caps: &[Capsule], b: usize, rng: &mut StreamRng) -> Vec<Vec3> {
    let (radial, cx, cy, cz): ([f64; 6], [f64; 3], [f64; 2], [f64; 2]) = match b {
        0 => ([0.0; 6], [0.0; 3], [1.0, 0.0], [0.0; 2]),
        1 => ([1.0; 6], [0.0; 3], [0.0; 2], [0.0; 2]),
        _ => {
            let mut draw = || rng.standard_normal();
            (
                [draw(), draw(), draw(), draw(), draw(), draw()],
                [draw(), draw(), draw()],
                [draw(), draw()],
                [draw(), draw()],
            )
        }
    };
    tess.vertices
        .iter()
        .zip(&tess.anchors)
        .zip(&tess.vertex_part)
        .map(|((v, anchor), &part)| {
            let g = part_group(caps[part].kind);
            let y = v.y;
            Vec3::new(
                v.x * (cx[0] + cx[1] * y + cx[2] * y * y),
                y * (cy[0] + cy[1] * y),
                v.z * (cz[0] + cz[1] * y),
            ) + (v - anchor) * radial[g]
        })
        .collect()
}

fn dot_fields(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum::<f64>() / a.len() as f64
}

/// Gram-Schmidt under the per-vertex mean inner product; each field ends
/// with RMS per-vertex displacement [`SHAPE_UNIT_RMS`].
fn shape_blendshapes(tess: &Tessellation, caps: &[Capsule], n_shape: usize, seed: u64) -> Vec<Vec<Vec3>> {
    let mut rng = StreamRng::new(seed, purpose::MODEL, 1);
    let mut basis: Vec<Vec<Vec3>> = Vec::with_capacity(n_shape);
    let mut b = 0;
    while basis.len() < n_shape {
        let mut field = shape_field(tess, caps, b, &mut rng);
        b += 1;
        let norm0 = dot_fields(&field, &field).sqrt();
        for q in &basis {
            let c = dot_fields(&field, q);
            for (f, qi) in field.iter_mut().zip(q) {
                *f -= qi * c;
            }
        }
        let norm = dot_fields(&field, &field).sqrt();
        if norm <= 1e-6 * norm0.max(1e-12) {
            continue;
        }
        for f in field.iter_mut() {
            *f /= norm;
        }
        basis.push(field);
        if b > 64 * n_shape + 64 {
            break;
        }
    }
    basis.into_iter().map(|f| f.into_iter().map(|v| v * SHAPE_UNIT_RMS).collect()).collect()
}

/// Builds the toy humanoid. Deterministic per `spec`.
pub fn build_toy_model(spec: &ToyModelSpec) -> Result<ToyRig> {
    if spec.n_body_joints < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 body joints, got {}", spec.n_body_joints)));
    }
    if spec.n_shape < 1 {
        return Err(Error::InvalidArgument("need at least one shape coefficient".into()));
    }
    let lm = landmarks();
    let caps = capsules(&lm);
    let min_vertices = (MIN_CAPSULE_VERTICES * caps.len()).max(4 * (spec.n_body_joints + 1));
    if spec.n_vertices < min_vertices {
        return Err(Error::InvalidArgument(format!(
            "{} vertices cannot cover {} parts and {} joints (need at least {min_vertices})",
            spec.n_vertices,
            caps.len(),
            spec.n_body_joints + 1
        )));
    }
    let budget = vertex_budget(&caps, spec.n_vertices);
    let tess = tessellate(&caps, &budget);
    debug_assert_eq!(tess.vertices.len(), spec.n_vertices);
    let sk = skeleton(&lm, spec.n_body_joints);
    let weights = skinning_weights(&sk, &tess, &caps);
    let regressor = joint_regressor(&sk, &tess, &caps, tess.vertices.len());
    let shapes = shape_blendshapes(&tess, &caps, spec.n_shape, spec.seed);
    if shapes.len() < spec.n_shape {
        return Err(Error::InvalidArgument(format!(
            "could only build {} independent shape fields",
            shapes.len()
        )));
    }
    let model = BodyModel::new(BodyModelParts {
        template: tess.vertices.clone(),
        faces: tess.faces.clone(),
        shape_blendshapes: shapes,
        pose_blendshapes: None,
        parents: sk.parents.clone(),
        joint_regressor: regressor,
        skinning_weights: weights,
        joint_names: Some(sk.names.clone()),
    })?;
    Ok(ToyRig { model, vertex_parts: tess.vertex_part.iter().map(|&p| caps[p].kind).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::is_closed_orientable;

    #[test]
    fn joint_allocation_is_symmetric() {
        assert_eq!(allocate_joints(15), [3, 3, 3]);
        assert_eq!(allocate_joints(23), [5, 5, 4]);
        assert_eq!(allocate_joints(3), [1, 1, 0]);
        assert_eq!(allocate_joints(4), [2, 1, 0]);
    }

    #[test]
    fn exact_vertex_count_and_closed_surface() {
        for n in [110, 257, 600, 1203] {
            let rig = build_toy_model(&ToyModelSpec { n_vertices: n, ..Default::default() }).unwrap();
            assert_eq!(rig.model.n_vertices(), n);
            assert!(is_closed_orientable(rig.model.faces()));
        }
    }

    #[test]
    fn faces_point_outward() {
        let rig = build_toy_model(&ToyModelSpec::default()).unwrap();
        let v = rig.model.template();
        // Signed volume of each closed capsule is positive; summed it is too.
        let vol: f64 = rig
            .model
            .faces()
            .iter()
            .map(|f| v[f[0]].dot(&v[f[1]].cross(&v[f[2]])) / 6.0)
            .sum();
        assert!(vol > 0.0);
    }

    #[test]
    fn default_skeleton_names() {
        let rig = build_toy_model(&ToyModelSpec::default()).unwrap();
        let names = rig.model.joint_names().unwrap();
        assert_eq!(names.len(), 16);
        assert_eq!(names[0], "pelvis");
        assert!(names.iter().any(|n| n == "l_elbow"));
        assert!(names.iter().any(|n| n == "r_knee"));
    }

    #[test]
    fn shape_fields_orthogonal_with_equal_norm() {
        let rig = build_toy_model(&ToyModelSpec::default()).unwrap();
        let s = rig.model.shape_blendshapes();
        for i in 0..s.len() {
            for j in 0..s.len() {
                let d = dot_fields(&s[i], &s[j]);
                let expected = if i == j { SHAPE_UNIT_RMS * SHAPE_UNIT_RMS } else { 0.0 };
                assert!((d - expected).abs() < 1e-12, "({i},{j}) -> {d}");
            }
        }
    }

    #[test]
    fn too_few_vertices_rejected() {
        let err = build_toy_model(&ToyModelSpec { n_vertices: 50, ..Default::default() });
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
        let err = build_toy_model(&ToyModelSpec { n_body_joints: 2, ..Default::default() });
        assert!(err.is_err());
    }
}
