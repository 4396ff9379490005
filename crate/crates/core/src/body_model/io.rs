//! JSON model files.
//!
//! Reals are written as decimal strings using the shortest representation
//! that parses back to the identical `f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BodyModel, BodyModelParts, SparseRows};
use crate::{Error, Result, Vec3};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub n_vertices: usize,
    /// Joint nodes including the root.
    pub n_joints: usize,
    pub n_shape: usize,
    pub template: Vec<String>,
    pub faces: Vec<[usize; 3]>,
    pub shape_blendshapes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_blendshapes: Option<Vec<String>>,
    pub parents: Vec<i64>,
    /// `(row, column, value)` triplets.
    pub joint_regressor: Vec<(usize, usize, String)>,
    pub skinning_weights: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_names: Option<Vec<String>>,
}

fn enc(x: f64) -> String {
    format!("{x:?}")
}

fn dec(s: &str) -> Result<f64> {
    let x: f64 = s.trim().parse().map_err(|_| Error::Format(format!("bad real '{s}'")))?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Format(format!("non-finite real '{s}'")))
    }
}

fn enc_fields(fields: &[Vec<Vec3>]) -> Vec<String> {
    fields.iter().flat_map(|f| f.iter().flat_map(|v| v.iter().map(|&x| enc(x)))).collect()
}

fn dec_vec3s(flat: &[String], what: &str) -> Result<Vec<Vec3>> {
    if flat.len() % 3 != 0 {
        return Err(Error::Format(format!("{what}: length {} is not a multiple of 3", flat.len())));
    }
    flat.chunks(3).map(|c| Ok(Vec3::new(dec(&c[0])?, dec(&c[1])?, dec(&c[2])?))).collect()
}

fn dec_fields(flat: &[String], count: usize, n: usize, what: &str) -> Result<Vec<Vec<Vec3>>> {
    if flat.len() != count * n * 3 {
        return Err(Error::Format(format!("{what}: expected {} values, found {}", count * n * 3, flat.len())));
    }
    let all = dec_vec3s(flat, what)?;
    Ok(all.chunks(n.max(1)).take(count).map(|c| c.to_vec()).collect())
}

impl ModelFile {
    pub fn from_model(model: &BodyModel) -> Self {
        let p = model.parts();
        Self {
            n_vertices: model.n_vertices(),
            n_joints: model.n_joints(),
            n_shape: model.shape_dim(),
            template: p.template.iter().flat_map(|v| v.iter().map(|&x| enc(x))).collect(),
            faces: p.faces.clone(),
            shape_blendshapes: enc_fields(&p.shape_blendshapes),
            pose_blendshapes: p.pose_blendshapes.as_ref().map(|f| enc_fields(f)),
            parents: p.parents.iter().map(|q| q.map_or(-1, |x| x as i64)).collect(),
            joint_regressor: p
                .joint_regressor
                .rows
                .iter()
                .enumerate()
                .flat_map(|(r, row)| row.iter().map(move |&(c, w)| (r, c, enc(w))))
                .collect(),
            skinning_weights: p.skinning_weights.iter().flat_map(|row| row.iter().map(|&x| enc(x))).collect(),
            joint_names: p.joint_names.clone(),
        }
    }

    pub fn into_model(self) -> Result<BodyModel> {
        let n = self.n_vertices;
        let nj = self.n_joints;
        let template = dec_vec3s(&self.template, "template")?;
        if template.len() != n {
            return Err(Error::Format(format!("template has {} vertices, header says {n}", template.len())));
        }
        let shape_blendshapes = dec_fields(&self.shape_blendshapes, self.n_shape, n, "shape_blendshapes")?;
        let pose_blendshapes = match &self.pose_blendshapes {
            Some(flat) => Some(dec_fields(flat, 9 * nj.saturating_sub(1), n, "pose_blendshapes")?),
            None => None,
        };
        if self.parents.len() != nj {
            return Err(Error::Format(format!("parents has {} entries, header says {nj}", self.parents.len())));
        }
        let parents = self
            .parents
            .iter()
            .map(|&p| match p {
                -1 => Ok(None),
                p if p >= 0 => Ok(Some(p as usize)),
                p => Err(Error::Format(format!("bad parent index {p}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rows = vec![Vec::new(); nj];
        for (r, c, w) in &self.joint_regressor {
            let row = rows
                .get_mut(*r)
                .ok_or_else(|| Error::Format(format!("regressor row {r} out of range")))?;
            row.push((*c, dec(w)?));
        }
        if self.skinning_weights.len() != n * nj {
            return Err(Error::Format("skinning_weights has the wrong length".into()));
        }
        let flat: Vec<f64> = self.skinning_weights.iter().map(|s| dec(s)).collect::<Result<_>>()?;
        let skinning_weights = flat.chunks(nj.max(1)).map(|c| c.to_vec()).collect();
        BodyModel::new(BodyModelParts {
            template,
            faces: self.faces,
            shape_blendshapes,
            pose_blendshapes,
            parents,
            joint_regressor: SparseRows { n_cols: n, rows },
            skinning_weights,
            joint_names: self.joint_names,
        })
    }
}

pub fn save_model(model: &BodyModel, path: impl AsRef<Path>) -> Result<()> {
    let file = ModelFile::from_model(model);
    std::fs::write(path, serde_json::to_vec(&file)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<BodyModel> {
    let bytes = std::fs::read(path)?;
    let file: ModelFile = serde_json::from_slice(&bytes)?;
    file.into_model()
}
