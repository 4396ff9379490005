//! Weak-perspective projection and a soft silhouette rasterizer.
//!
//! A pixel's occupancy is `sigmoid(-d / tau)`, where `d` is the signed
//! distance from the pixel center to the boundary of the union of projected
//! triangles (negative inside). Faces are not depth-tested, so the result
//! only depends on the 2D union.
//!
//! The union boundary is built explicitly: every projected edge that can lie
//! on the outline (a fold edge, a border edge, or one next to a degenerate
//! face) is clipped against the open interior of every other triangle. Each
//! surviving piece remembers where its endpoints came from, either a mesh
//! vertex or the crossing of two mesh edges, so the distance can be
//! differentiated with respect to the projected vertices.
//!
//! Image convention: pixel `(row, col)` has its center at
//! `(col + 0.5, row + 0.5)`, x to the right, y downward.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::body_model::{JointSet, Mesh};
use crate::{Error, Result, Vec2, Vec3};

pub const IMAGE_SIZE: usize = 64;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

/// Projected triangles with twice-area below this are skipped.
const DEGENERATE_AREA: f64 = 1e-12;
/// Edge parameter slack when deciding whether a clipped interval is empty.
const PIECE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    /// Pixels per model unit.
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
}

fn default_image_size() -> usize {
    IMAGE_SIZE
}

impl Camera {
    pub fn new(scale: f64, tx: f64, ty: f64) -> Result<Self> {
        let cam = Self { scale, tx, ty, image_size: IMAGE_SIZE };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.tx.is_finite() && self.ty.is_finite()) {
            return Err(Error::InvalidArgument("camera parameters must be finite".into()));
        }
        if self.scale <= 0.0 {
            return Err(Error::InvalidArgument(format!("camera scale must be positive, got {}", self.scale)));
        }
        if self.image_size == 0 {
            return Err(Error::InvalidArgument("image size must be nonzero".into()));
        }
        Ok(())
    }

    /// `(scale, tx, ty)`.
    pub fn params(&self) -> [f64; 3] {
        [self.scale, self.tx, self.ty]
    }

    pub fn with_params(&self, p: [f64; 3]) -> Self {
        Self { scale: p[0], tx: p[1], ty: p[2], image_size: self.image_size }
    }

    pub fn project(&self, p: &Vec3) -> Vec2 {
        Vec2::new(self.scale * p.x + self.tx, self.scale * p.y + self.ty)
    }

    /// Pulls a gradient on a projected point back to the 3D point and
    /// accumulates the camera part into `cam_grad`.
    pub fn project_vjp(&self, p: &Vec3, g: &Vec2, cam_grad: &mut [f64; 3]) -> Vec3 {
        cam_grad[0] += g.x * p.x + g.y * p.y;
        cam_grad[1] += g.x;
        cam_grad[2] += g.y;
        Vec3::new(self.scale * g.x, self.scale * g.y, 0.0)
    }
}

pub fn project_points(points: &[Vec3], camera: &Camera) -> Vec<Vec2> {
    points.iter().map(|p| camera.project(p)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<[f64; 3]>", try_from = "Vec<[f64; 3]>")]
pub struct Keypoints2D {
    pub points: Vec<Vec2>,
    pub confidences: Vec<f64>,
}

impl Keypoints2D {
    pub fn new(points: Vec<Vec2>, confidences: Vec<f64>) -> Result<Self> {
        if points.len() != confidences.len() {
            return Err(Error::DimensionMismatch { what: "keypoint confidences", expected: points.len(), got: confidences.len() });
        }
        if points.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
            return Err(Error::InvalidArgument("keypoints must be finite".into()));
        }
        if confidences.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidArgument("keypoint confidences must lie in [0, 1]".into()));
        }
        Ok(Self { points, confidences })
    }

    /// All confidences set to one.
    pub fn certain(points: Vec<Vec2>) -> Self {
        let confidences = vec![1.0; points.len()];
        Self { points, confidences }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

impl From<Keypoints2D> for Vec<[f64; 3]> {
    fn from(k: Keypoints2D) -> Self {
        k.points.iter().zip(&k.confidences).map(|(p, &c)| [p.x, p.y, c]).collect()
    }
}

impl TryFrom<Vec<[f64; 3]>> for Keypoints2D {
    type Error = Error;

    fn try_from(rows: Vec<[f64; 3]>) -> Result<Self> {
        Keypoints2D::new(rows.iter().map(|r| Vec2::new(r[0], r[1])).collect(), rows.iter().map(|r| r[2]).collect())
    }
}

/// Projects joints to keypoints, optionally keeping only `subset` (in that order).
pub fn project_joints(joints: &JointSet, camera: &Camera, subset: Option<&[usize]>) -> Result<Keypoints2D> {
    let points = match subset {
        None => project_points(&joints.joints, camera),
        Some(idx) => idx
            .iter()
            .map(|&j| {
                joints
                    .joints
                    .get(j)
                    .map(|p| camera.project(p))
                    .ok_or_else(|| Error::InvalidArgument(format!("keypoint map references joint {j}")))
            })
            .collect::<Result<_>>()?,
    };
    Ok(Keypoints2D::certain(points))
}

/// Square soft-occupancy image, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Silhouette {
    pub size: usize,
    pub pixels: Vec<f64>,
}

impl Silhouette {
    pub fn zeros(size: usize) -> Self {
        Self { size, pixels: vec![0.0; size * size] }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.size + col]
    }

    pub fn binarized(&self) -> Mask {
        Mask { size: self.size, bits: self.pixels.iter().map(|&v| v >= 0.5).collect() }
    }

    pub fn from_mask(mask: &Mask) -> Self {
        Self { size: mask.size, pixels: mask.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect() }
    }

    /// Binary PGM (P5, maxval 255).
    pub fn write_pgm(&self, mut out: impl Write) -> Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.size, self.size)?;
        let bytes: Vec<u8> = self.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        out.write_all(&bytes)?;
        Ok(())
    }
}

/// Square binary mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub size: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(size: usize) -> Self {
        Self { size, bits: vec![false; size * size] }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Row-major, most significant bit first, zero-padded to whole bytes.
    pub fn pack(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            out[i / 8] |= 0x80 >> (i % 8);
        }
        out
    }

    pub fn unpack(size: usize, bytes: &[u8]) -> Result<Self> {
        let n = size * size;
        if bytes.len() != n.div_ceil(8) {
            return Err(Error::Format(format!("packed mask of {} bytes for a {size}x{size} image", bytes.len())));
        }
        Ok(Self { size, bits: (0..n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderStatus {
    Ok,
    /// The mesh has no faces.
    Empty,
    /// Every projected face has zero area; the image is blank.
    DegenerateProjection,
}

/// Where a boundary-piece endpoint comes from.
#[derive(Clone, Copy, Debug)]
enum EndKind {
    Vertex(usize),
    /// Crossing of the carrier edge (at parameter `s`) with edge `other`
    /// (at parameter `r`).
    Cross { carrier: [usize; 2], s: f64, other: [usize; 2], r: f64 },
}

#[derive(Clone, Copy, Debug)]
struct Piece {
    edge: [usize; 2],
    t0: f64,
    t1: f64,
    k0: EndKind,
    k1: EndKind,
    a: Vec2,
    b: Vec2,
}

#[derive(Clone, Copy, Debug)]
enum Feature {
    None,
    /// Interior of the carrier edge at parameter `t`.
    Line { edge: [usize; 2], t: f64 },
    Point(EndKind),
}

#[derive(Clone, Copy, Debug)]
struct PixelHit {
    inside: bool,
    dist: f64,
    /// Unit vector from the closest boundary point to the pixel center.
    dir: Vec2,
    feature: Feature,
}

#[derive(Clone, Debug)]
struct Tri {
    v: [usize; 3],
    lo: Vec2,
    hi: Vec2,
    /// Sign of the projected area.
    orient: f64,
}

fn cross(a: &Vec2, b: &Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

fn perp(v: &Vec2) -> Vec2 {
    Vec2::new(-v.y, v.x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Soft rasterization of one mesh with everything cached for the backward pass.
#[derive(Clone, Debug)]
pub struct Raster {
    camera: Camera,
    temperature: f64,
    projected: Vec<Vec2>,
    pieces: Vec<Piece>,
    hits: Vec<PixelHit>,
    silhouette: Silhouette,
    status: RenderStatus,
}

impl Raster {
    pub fn new(mesh: &Mesh, camera: &Camera, temperature: f64) -> Result<Self> {
        camera.validate()?;
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
        }
        if mesh.vertices.iter().any(|v| !v.iter().all(|x| x.is_finite())) {
            return Err(Error::NonFinite("mesh vertices".into()));
        }
        let size = camera.image_size;
        let projected = project_points(&mesh.vertices, camera);
        let mut raster = Self {
            camera: *camera,
            temperature,
            projected,
            pieces: Vec::new(),
            hits: Vec::new(),
            silhouette: Silhouette::zeros(size),
            status: RenderStatus::Ok,
        };
        if mesh.faces.is_empty() {
            raster.status = RenderStatus::Empty;
            return Ok(raster);
        }
        let tris = raster.triangles(&mesh.faces);
        if tris.is_empty() {
            log::warn!("projected mesh has zero area; silhouette left blank");
            raster.status = RenderStatus::DegenerateProjection;
            return Ok(raster);
        }
        raster.pieces = raster.boundary(&mesh.faces, &tris);
        let coverage = raster.coverage(&tris);
        raster.hits = coverage
            .iter()
            .enumerate()
            .map(|(i, &inside)| {
                let p = Vec2::new((i % size) as f64 + 0.5, (i / size) as f64 + 0.5);
                raster.closest(&p, inside)
            })
            .collect();
        for (px, hit) in raster.silhouette.pixels.iter_mut().zip(&raster.hits) {
            let sd = if hit.inside { -hit.dist } else { hit.dist };
            *px = sigmoid(-sd / temperature);
        }
        Ok(raster)
    }

    pub fn silhouette(&self) -> &Silhouette {
        &self.silhouette
    }

    pub fn into_silhouette(self) -> Silhouette {
        self.silhouette
    }

    pub fn status(&self) -> RenderStatus {
        self.status
    }

    /// Signed distance of pixel `(row, col)` to the union boundary.
    pub fn signed_distance(&self, row: usize, col: usize) -> f64 {
        match self.hits.get(row * self.camera.image_size + col) {
            Some(h) if h.inside => -h.dist,
            Some(h) => h.dist,
            None => f64::INFINITY,
        }
    }

    fn triangles(&self, faces: &[[usize; 3]]) -> Vec<Tri> {
        let p = &self.projected;
        faces
            .iter()
            .filter_map(|f| {
                let (a, b, c) = (p[f[0]], p[f[1]], p[f[2]]);
                let area2 = cross(&(b - a), &(c - a));
                (area2.abs() > DEGENERATE_AREA).then(|| Tri {
                    v: *f,
                    lo: Vec2::new(a.x.min(b.x).min(c.x), a.y.min(b.y).min(c.y)),
                    hi: Vec2::new(a.x.max(b.x).max(c.x), a.y.max(b.y).max(c.y)),
                    orient: area2.signum(),
                })
            })
            .collect()
    }

    /// Closed point-in-triangle test at every pixel center.
    fn coverage(&self, tris: &[Tri]) -> Vec<bool> {
        let size = self.camera.image_size;
        let p = &self.projected;
        let mut inside = vec![false; size * size];
        let range = |lo: f64, hi: f64| {
            let a = (lo - 0.5).ceil().max(0.0);
            let b = (hi - 0.5).floor().min(size as f64 - 1.0);
            (a as usize, b)
        };
        for t in tris {
            let (c0, c1) = range(t.lo.x, t.hi.x);
            let (r0, r1) = range(t.lo.y, t.hi.y);
            if c1 < 0.0 || r1 < 0.0 {
                continue;
            }
            let (a, b, c) = (p[t.v[0]], p[t.v[1]], p[t.v[2]]);
            for row in r0..=r1 as usize {
                for col in c0..=c1 as usize {
                    let q = Vec2::new(col as f64 + 0.5, row as f64 + 0.5);
                    let e0 = t.orient * cross(&(b - a), &(q - a));
                    let e1 = t.orient * cross(&(c - b), &(q - b));
                    let e2 = t.orient * cross(&(a - c), &(q - c));
                    if e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0 {
                        inside[row * size + col] = true;
                    }
                }
            }
        }
        inside
    }

    fn boundary(&self, faces: &[[usize; 3]], tris: &[Tri]) -> Vec<Piece> {
        let p = &self.projected;
        // Undirected edge -> opposite vertices of the adjacent faces, in face order.
        let mut adjacency: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        let mut order = Vec::new();
        for f in faces {
            for k in 0..3 {
                let (u, v, w) = (f[k], f[(k + 1) % 3], f[(k + 2) % 3]);
                let key = (u.min(v), u.max(v));
                let entry = adjacency.entry(key).or_insert_with(|| {
                    order.push(key);
                    Vec::new()
                });
                entry.push(w);
            }
        }
        let mut pieces = Vec::new();
        for key in order {
            let opposite = &adjacency[&key];
            let (u, v) = key;
            let d = p[v] - p[u];
            if d.norm_squared() == 0.0 {
                continue;
            }
            if let [w0, w1] = opposite[..] {
                let s0 = cross(&d, &(p[w0] - p[u]));
                let s1 = cross(&d, &(p[w1] - p[u]));
                if s0 * s1 < 0.0 {
                    continue; // the two faces cover both sides
                }
            }
            self.clip_edge([u, v], tris, &mut pieces);
        }
        pieces
    }

    /// Removes the parts of edge `e` inside any triangle's open interior.
    fn clip_edge(&self, e: [usize; 2], tris: &[Tri], out: &mut Vec<Piece>) {
        let p = &self.projected;
        let (a, b) = (p[e[0]], p[e[1]]);
        let d = b - a;
        let lo = Vec2::new(a.x.min(b.x), a.y.min(b.y));
        let hi = Vec2::new(a.x.max(b.x), a.y.max(b.y));
        let mut removed: Vec<(f64, EndKind, f64, EndKind)> = Vec::new();
        for t in tris {
            if t.hi.x < lo.x || t.lo.x > hi.x || t.hi.y < lo.y || t.lo.y > hi.y {
                continue;
            }
            if t.v.contains(&e[0]) && t.v.contains(&e[1]) {
                continue;
            }
            let (mut t_lo, mut k_lo) = (0.0, EndKind::Vertex(e[0]));
            let (mut t_hi, mut k_hi) = (1.0, EndKind::Vertex(e[1]));
            let mut empty = false;
            for k in 0..3 {
                let (c, dd) = (t.v[k], t.v[(k + 1) % 3]);
                let ec = p[dd] - p[c];
                let f0 = t.orient * cross(&ec, &(a - p[c]));
                let fd = t.orient * cross(&ec, &d);
                if fd == 0.0 {
                    if f0 <= 0.0 {
                        empty = true;
                        break;
                    }
                    continue;
                }
                // An edge through an endpoint of `e` meets its line exactly there.
                let (ts, kind) = if c == e[0] || dd == e[0] {
                    (0.0, EndKind::Vertex(e[0]))
                } else if c == e[1] || dd == e[1] {
                    (1.0, EndKind::Vertex(e[1]))
                } else {
                    let ts = -f0 / fd;
                    let r = cross(&(a - p[c]), &d) / cross(&ec, &d);
                    (ts, EndKind::Cross { carrier: e, s: ts, other: [c, dd], r })
                };
                if fd > 0.0 {
                    if ts > t_lo {
                        t_lo = ts;
                        k_lo = kind;
                    }
                } else if ts < t_hi {
                    t_hi = ts;
                    k_hi = kind;
                }
            }
            if !empty && t_hi - t_lo > PIECE_EPS {
                removed.push((t_lo, k_lo, t_hi, k_hi));
            }
        }
        removed.sort_by(|x, y| x.0.total_cmp(&y.0));
        let (mut cur_t, mut cur_k) = (0.0, EndKind::Vertex(e[0]));
        let mut push = |t0: f64, k0: EndKind, t1: f64, k1: EndKind| {
            if t1 - t0 > PIECE_EPS {
                out.push(Piece { edge: e, t0, t1, k0, k1, a: a + d * t0, b: a + d * t1 });
            }
        };
        for (r0, k0, r1, k1) in removed {
            if r0 > cur_t {
                push(cur_t, cur_k, r0, k0);
            }
            if r1 > cur_t {
                cur_t = r1;
                cur_k = k1;
            }
        }
        if cur_t < 1.0 {
            push(cur_t, cur_k, 1.0, EndKind::Vertex(e[1]));
        }
    }

    fn closest(&self, q: &Vec2, inside: bool) -> PixelHit {
        let mut best = PixelHit { inside, dist: f64::INFINITY, dir: Vec2::zeros(), feature: Feature::None };
        let mut best_sq = f64::INFINITY;
        for piece in &self.pieces {
            let ab = piece.b - piece.a;
            let len_sq = ab.norm_squared();
            let u = ((q - piece.a).dot(&ab) / len_sq).clamp(0.0, 1.0);
            let c = piece.a + ab * u;
            let dsq = (q - c).norm_squared();
            if dsq < best_sq {
                best_sq = dsq;
                let feature = if u == 0.0 {
                    Feature::Point(piece.k0)
                } else if u == 1.0 {
                    Feature::Point(piece.k1)
                } else {
                    Feature::Line { edge: piece.edge, t: piece.t0 + u * (piece.t1 - piece.t0) }
                };
                best.feature = feature;
                best.dir = q - c;
            }
        }
        best.dist = best_sq.sqrt();
        if best.dist > 0.0 && best.dist.is_finite() {
            best.dir /= best.dist;
        } else {
            best.dir = Vec2::zeros();
        }
        best
    }

    /// Gradient of `Σ upstream · silhouette` with respect to the projected
    /// vertices.
    pub fn vjp_projected(&self, upstream: &[f64]) -> Result<Vec<Vec2>> {
        let size = self.camera.image_size;
        if upstream.len() != size * size {
            return Err(Error::DimensionMismatch { what: "silhouette upstream", expected: size * size, got: upstream.len() });
        }
        let p = &self.projected;
        let mut g = vec![Vec2::zeros(); p.len()];
        for ((hit, &u), &occ) in self.hits.iter().zip(upstream).zip(&self.silhouette.pixels) {
            if u == 0.0 || hit.dist == 0.0 || !hit.dist.is_finite() {
                continue;
            }
            let sign = if hit.inside { -1.0 } else { 1.0 };
            // d occ / d dist
            let scale = u * sign * (-occ * (1.0 - occ) / self.temperature);
            if scale == 0.0 {
                continue;
            }
            let w = hit.dir;
            match hit.feature {
                Feature::None => {}
                Feature::Line { edge, t } => {
                    g[edge[0]] -= w * (scale * (1.0 - t));
                    g[edge[1]] -= w * (scale * t);
                }
                Feature::Point(kind) => accumulate_point(&mut g, p, kind, -w * scale),
            }
        }
        Ok(g)
    }

    /// Gradient of `Σ upstream · silhouette` with respect to 3D vertices and
    /// the camera `(scale, tx, ty)`.
    pub fn vjp(&self, mesh: &Mesh, upstream: &[f64]) -> Result<(Vec<Vec3>, [f64; 3])> {
        let g2 = self.vjp_projected(upstream)?;
        let mut cam = [0.0; 3];
        let g3 = mesh.vertices.iter().zip(&g2).map(|(v, g)| self.camera.project_vjp(v, g, &mut cam)).collect();
        Ok((g3, cam))
    }
}

/// Adds `g` (gradient on an endpoint position) to the vertices it depends on.
fn accumulate_point(out: &mut [Vec2], p: &[Vec2], kind: EndKind, g: Vec2) {
    match kind {
        EndKind::Vertex(i) => out[i] += g,
        EndKind::Cross { carrier, s, other, r } => {
            let n1 = perp(&(p[carrier[1]] - p[carrier[0]]));
            let n2 = perp(&(p[other[1]] - p[other[0]]));
            // Rows n1, n2 map dx to the right-hand side; solve Nᵀ λ = g.
            let det = n1.x * n2.y - n1.y * n2.x;
            if det == 0.0 {
                return;
            }
            let l1 = (g.x * n2.y - g.y * n2.x) / det;
            let l2 = (n1.x * g.y - n1.y * g.x) / det;
            out[carrier[0]] += n1 * (l1 * (1.0 - s));
            out[carrier[1]] += n1 * (l1 * s);
            out[other[0]] += n2 * (l2 * (1.0 - r));
            out[other[1]] += n2 * (l2 * r);
        }
    }
}

pub fn render_silhouette(mesh: &Mesh, camera: &Camera, temperature: f64) -> Result<(Silhouette, RenderStatus)> {
    let raster = Raster::new(mesh, camera, temperature)?;
    let status = raster.status();
    Ok((raster.into_silhouette(), status))
}

/// Gradient of `Σ upstream · silhouette` with respect to the mesh vertices.
pub fn render_silhouette_grad(mesh: &Mesh, camera: &Camera, temperature: f64, upstream: &[f64]) -> Result<Vec<Vec3>> {
    Ok(Raster::new(mesh, camera, temperature)?.vjp(mesh, upstream)?.0)
}
