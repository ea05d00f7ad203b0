//! Named parameter storage and the manifest + blob checkpoint layout.
//!
//! A checkpoint is a directory holding `manifest.json` and `params.bin`. The
//! manifest records the format tag, the model config, and for every tensor
//! its name, shape, byte offset, and element count. The blob is the
//! concatenation of all tensors as little-endian `f32`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{AtlasError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const GENERATOR_FORMAT: &str = "latent-atlas/ckpt-v1";
pub const ENCODER_FORMAT: &str = "latent-atlas/enc-v1";

const MANIFEST: &str = "manifest.json";
const BLOB: &str = "params.bin";

/// Ordered, named model parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    lookup: HashMap<String, usize>,
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    /// Registers every parameter on `g`, returning vars indexed by [`ParamId`].
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        BoundParams {
            vars: self
                .values
                .iter()
                .map(|v| g.leaf_shared(Arc::clone(v), trainable))
                .collect(),
        }
    }

    /// Rounds every value through `f32`, matching what a save/load cycle yields.
    pub fn round_f32(&mut self) {
        for v in &mut self.values {
            *v = Arc::new(v.round_f32());
        }
    }

    /// Replaces values from `other`, which must have identical names and shapes.
    fn assign_from(&mut self, other: ParamStore) -> std::result::Result<(), String> {
        if other.names != self.names {
            return Err("parameter names differ from the model layout".into());
        }
        for (i, v) in other.values.into_iter().enumerate() {
            if v.shape() != self.values[i].shape() {
                return Err(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    self.names[i],
                    v.shape(),
                    self.values[i].shape()
                ));
            }
            self.values[i] = v;
        }
        Ok(())
    }
}

/// Parameter vars registered on one graph.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest<C> {
    format: String,
    dtype: String,
    blob: String,
    config: C,
    tensors: Vec<TensorEntry>,
}

pub fn save<C: Serialize>(dir: &Path, format: &str, config: &C, params: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| AtlasError::io(dir, e))?;
    let mut blob = Vec::with_capacity(params.num_scalars() * 4);
    let mut tensors = Vec::with_capacity(params.len());
    for id in params.ids() {
        let t = params.get(id);
        tensors.push(TensorEntry {
            name: params.name(id).to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
            len: t.len(),
        });
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: format.to_string(),
        dtype: "float32".to_string(),
        blob: BLOB.to_string(),
        config,
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, json).map_err(|e| AtlasError::io(&mpath, e))?;
    let bpath = dir.join(BLOB);
    fs::write(&bpath, blob).map_err(|e| AtlasError::io(&bpath, e))?;
    Ok(())
}

/// Reads a checkpoint's config and raw parameters, checking the format tag.
pub fn load<C: DeserializeOwned>(dir: &Path, format: &str) -> Result<(C, ParamStore)> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| AtlasError::io(&mpath, e))?;
    let manifest: Manifest<C> =
        serde_json::from_str(&text).map_err(|e| AtlasError::format(&mpath, e.to_string()))?;
    if manifest.format != format {
        return Err(AtlasError::format(
            &mpath,
            format!("format tag {:?}, expected {format:?}", manifest.format),
        ));
    }
    if manifest.dtype != "float32" {
        return Err(AtlasError::format(&mpath, format!("unsupported dtype {}", manifest.dtype)));
    }
    let bpath = dir.join(&manifest.blob);
    let blob = fs::read(&bpath).map_err(|e| AtlasError::io(&bpath, e))?;
    let mut params = ParamStore::new();
    for entry in manifest.tensors {
        let start = entry.offset as usize;
        let end = start + entry.len * 4;
        if end > blob.len() || entry.shape.iter().product::<usize>() != entry.len {
            return Err(AtlasError::format(&bpath, format!("bad extent for {}", entry.name)));
        }
        let data = blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        params.insert(entry.name, Tensor::new(&entry.shape, data)?);
    }
    Ok((manifest.config, params))
}

/// Overwrites `target` with checkpoint values after a layout check.
pub fn restore_into(dir: &Path, target: &mut ParamStore, loaded: ParamStore) -> Result<()> {
    target
        .assign_from(loaded)
        .map_err(|m| AtlasError::format(dir.join(MANIFEST), m))
}
