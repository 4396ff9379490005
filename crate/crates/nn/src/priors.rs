//! The pose prior (keypoints to `θ`) and the shape prior (silhouette to `β`).
//!
//! The pose prior lifts `3M` inputs (pixel coordinates mapped to `[−1, 1]`
//! plus the raw confidence) to a hidden width, runs residual units of two
//! dense/relu/dropout stages each, and regresses axis-angle `θ` linearly.
//! The shape prior runs five conv3x3/relu/maxpool blocks over the 64x64
//! silhouette followed by the same kind of residual head regressing `β`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use shapelift::{Keypoints2D, PoseParams, ShapeParams, Silhouette};

use crate::{checkpoint, Error, LayerSpec, Mode, Network, Result, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub pose_width: usize,
    pub shape_width: usize,
    /// Residual units in each head.
    pub units: usize,
    pub conv_channels: Vec<usize>,
    /// Dropout inside the residual units (the conv stack has none).
    pub dropout: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { pose_width: 1024, shape_width: 1024, units: 2, conv_channels: vec![8, 16, 32, 64, 128], dropout: 0.5 }
    }
}

impl PriorConfig {
    /// Narrow heads for CPU-sized runs.
    pub fn desk() -> Self {
        Self { pose_width: 128, shape_width: 128, dropout: 0.1, ..Self::default() }
    }
}

fn head(width: usize, units: usize, dropout: f64, out: usize) -> Vec<LayerSpec> {
    let mut layers = vec![LayerSpec::Dense { units: width }, LayerSpec::Relu];
    for _ in 0..units {
        layers.push(LayerSpec::Residual {
            body: vec![
                LayerSpec::Dense { units: width },
                LayerSpec::Relu,
                LayerSpec::Dropout { rate: dropout },
                LayerSpec::Dense { units: width },
                LayerSpec::Relu,
                LayerSpec::Dropout { rate: dropout },
            ],
        });
    }
    layers.push(LayerSpec::Dense { units: out });
    layers
}

#[derive(Clone, Debug)]
pub struct PosePrior {
    pub net: Network,
    image_size: usize,
}

impl PosePrior {
    pub fn new(n_keypoints: usize, pose_dim: usize, image_size: usize, cfg: &PriorConfig, seed: u64) -> Result<Self> {
        let net = Network::new(&[3 * n_keypoints], head(cfg.pose_width, cfg.units, cfg.dropout, pose_dim), seed)?;
        Self::from_network(net, image_size)
    }

    pub fn from_network(net: Network, image_size: usize) -> Result<Self> {
        if net.input_shape().len() != 1 || net.input_shape()[0] % 3 != 0 || net.output_shape().len() != 1 || image_size == 0 {
            return Err(Error::Shape(format!("not a pose prior: {:?} -> {:?}", net.input_shape(), net.output_shape())));
        }
        Ok(Self { net, image_size })
    }

    pub fn n_keypoints(&self) -> usize {
        self.net.input_shape()[0] / 3
    }

    pub fn pose_dim(&self) -> usize {
        self.net.output_shape()[0]
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// Network input rows `(2x/S − 1, 2y/S − 1, c)` per keypoint.
    pub fn encode(&self, batch: &[&Keypoints2D]) -> Result<Tensor> {
        let m = self.n_keypoints();
        let s = self.image_size as f64;
        let mut data = Vec::with_capacity(batch.len() * 3 * m);
        for kp in batch {
            if kp.len() != m {
                return Err(Error::Shape(format!("pose prior expects {m} keypoints, got {}", kp.len())));
            }
            for (p, c) in kp.points.iter().zip(&kp.confidences) {
                data.extend_from_slice(&[2.0 * p.x / s - 1.0, 2.0 * p.y / s - 1.0, *c]);
            }
        }
        Tensor::new(vec![batch.len(), 3 * m], data)
    }

    pub fn predict_batch(&self, batch: &[&Keypoints2D]) -> Result<Vec<PoseParams>> {
        let out = self.net.forward(&self.encode(batch)?, Mode::Eval)?.0;
        (0..batch.len()).map(|i| finite(out.item(i)).map(PoseParams::new)).collect()
    }

    pub fn predict(&self, kp: &Keypoints2D) -> Result<PoseParams> {
        Ok(self.predict_batch(&[kp])?.remove(0))
    }
}

#[derive(Clone, Debug)]
pub struct ShapePrior {
    pub net: Network,
}

impl ShapePrior {
    pub fn new(shape_dim: usize, image_size: usize, cfg: &PriorConfig, seed: u64) -> Result<Self> {
        let mut layers = Vec::new();
        for &c in &cfg.conv_channels {
            layers.extend([LayerSpec::Conv3x3 { channels: c }, LayerSpec::Relu, LayerSpec::MaxPool2]);
        }
        layers.extend(head(cfg.shape_width, cfg.units, cfg.dropout, shape_dim));
        Self::from_network(Network::new(&[1, image_size, image_size], layers, seed)?)
    }

    pub fn from_network(net: Network) -> Result<Self> {
        let s = net.input_shape();
        if s.len() != 3 || s[0] != 1 || s[1] != s[2] || net.output_shape().len() != 1 {
            return Err(Error::Shape(format!("not a shape prior: {:?} -> {:?}", s, net.output_shape())));
        }
        Ok(Self { net })
    }

    pub fn image_size(&self) -> usize {
        self.net.input_shape()[1]
    }

    pub fn shape_dim(&self) -> usize {
        self.net.output_shape()[0]
    }

    /// Stacks silhouettes into `[N, 1, S, S]`, mirroring the flagged ones
    /// left to right.
    pub fn encode(&self, batch: &[&Silhouette], mirror: &[bool]) -> Result<Tensor> {
        let s = self.image_size();
        let mut data = Vec::with_capacity(batch.len() * s * s);
        for (k, sil) in batch.iter().enumerate() {
            if sil.size != s {
                return Err(Error::Shape(format!("shape prior expects {s}x{s} silhouettes, got {}", sil.size)));
            }
            if mirror.get(k).copied().unwrap_or(false) {
                for row in sil.pixels.chunks_exact(s) {
                    data.extend(row.iter().rev());
                }
            } else {
                data.extend_from_slice(&sil.pixels);
            }
        }
        Tensor::new(vec![batch.len(), 1, s, s], data)
    }

    pub fn predict_batch(&self, batch: &[&Silhouette]) -> Result<Vec<ShapeParams>> {
        let out = self.net.forward(&self.encode(batch, &[])?, Mode::Eval)?.0;
        (0..batch.len()).map(|i| finite(out.item(i)).map(ShapeParams::new)).collect()
    }

    pub fn predict(&self, sil: &Silhouette) -> Result<ShapeParams> {
        Ok(self.predict_batch(&[sil])?.remove(0))
    }
}

fn finite(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v.to_vec())
    } else {
        Err(Error::Model(shapelift::Error::NonFinite("network output".into())))
    }
}

/// Both priors; their inputs are disjoint, so pose never sees the
/// silhouette and shape never sees the keypoints.
#[derive(Clone, Debug)]
pub struct Priors {
    pub pose: PosePrior,
    pub shape: ShapePrior,
}

impl Priors {
    pub fn new(n_keypoints: usize, pose_dim: usize, shape_dim: usize, image_size: usize, cfg: &PriorConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            pose: PosePrior::new(n_keypoints, pose_dim, image_size, cfg, seed)?,
            shape: ShapePrior::new(shape_dim, image_size, cfg, seed.wrapping_add(1))?,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(&self.pose.net, dir, "pose")?;
        checkpoint::save(&self.shape.net, dir, "shape")
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let shape = ShapePrior::from_network(checkpoint::load(dir, "shape")?)?;
        let pose = PosePrior::from_network(checkpoint::load(dir, "pose")?, shape.image_size())?;
        Ok(Self { pose, shape })
    }

    pub fn predict(&self, kp: &Keypoints2D, sil: &Silhouette) -> Result<(PoseParams, ShapeParams)> {
        Ok((self.pose.predict(kp)?, self.shape.predict(sil)?))
    }
}
