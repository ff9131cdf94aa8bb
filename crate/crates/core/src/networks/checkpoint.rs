//! Self-describing parameter container backed by the safetensors format.
//!
//! All metadata is kept as one JSON object under a single header key so the
//! serialized bytes are deterministic.

use std::collections::BTreeMap;
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, ParamSet, Shape, Tensor};
use crate::scalar::Scalar;

const META_KEY: &str = "stainkit";

/// Named tensors plus string metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    meta: BTreeMap<String, String>,
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for Checkpoint<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new() -> Self {
        let mut meta = BTreeMap::new();
        meta.insert("format".into(), "stainkit-checkpoint/1".into());
        Self {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::Missing(format!("checkpoint metadata {key:?}")))
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    /// Stores every parameter as `{prefix}/{name}`.
    pub fn insert_params(&mut self, prefix: &str, params: &ParamSet<T>) {
        for (name, t) in params.iter() {
            self.tensors.insert(format!("{prefix}/{name}"), t.clone());
        }
    }

    /// Overwrites `params` from `{prefix}/{name}` entries; all must be present.
    pub fn restore_params(&self, prefix: &str, params: &mut ParamSet<T>) -> Result<()> {
        let names: Vec<String> = params.names().to_vec();
        for (name, dst) in names.iter().zip(params.tensors_mut()) {
            let key = format!("{prefix}/{name}");
            let src = self
                .tensors
                .get(&key)
                .ok_or_else(|| Error::Missing(format!("tensor {key}")))?;
            if src.shape() != dst.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "{key}: checkpoint {} vs network {}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.clone_from(src);
        }
        Ok(())
    }

    pub fn insert_adam(&mut self, prefix: &str, params: &ParamSet<T>, opt: &Adam<T>) {
        for ((name, m), v) in params.names().iter().zip(&opt.m).zip(&opt.v) {
            self.tensors.insert(format!("{prefix}.adam_m/{name}"), m.clone());
            self.tensors.insert(format!("{prefix}.adam_v/{name}"), v.clone());
        }
        self.set_meta(&format!("{prefix}.adam_step"), opt.step);
        self.set_meta(
            &format!("{prefix}.adam_config"),
            serde_json::to_string(&opt.config).expect("plain struct"),
        );
    }

    pub fn restore_adam(&self, prefix: &str, params: &ParamSet<T>) -> Result<Adam<T>> {
        let config: AdamConfig = serde_json::from_str(self.require_meta(&format!("{prefix}.adam_config"))?)
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut opt = Adam::new(params, config);
        opt.step = self
            .require_meta(&format!("{prefix}.adam_step"))?
            .parse()
            .map_err(|_| Error::Config("bad adam step".into()))?;
        for ((name, m), v) in params.names().iter().zip(opt.m.iter_mut()).zip(opt.v.iter_mut()) {
            let get = |kind: &str| {
                let key = format!("{prefix}.adam_{kind}/{name}");
                self.tensors
                    .get(&key)
                    .cloned()
                    .ok_or_else(|| Error::Missing(format!("tensor {key}")))
            };
            *m = get("m")?;
            *v = get("v")?;
        }
        Ok(opt)
    }

    /// SHA-256 over metadata and tensors in name order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.meta {
            h.update(k.as_bytes());
            h.update([0]);
            h.update(v.as_bytes());
            h.update([0]);
        }
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            h.update([0]);
            for d in t.shape().dims() {
                h.update((d as u64).to_le_bytes());
            }
            h.update(T::to_le_bytes_vec(t.data()));
        }
        hex::encode(h.finalize())
    }

    /// Hash of the tensors alone (no metadata).
    pub fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            h.update(T::to_le_bytes_vec(t.data()));
        }
        hex::encode(h.finalize())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), T::to_le_bytes_vec(t.data()), t.shape().dims().to_vec()))
            .collect();
        let views = bytes
            .iter()
            .map(|(n, b, s)| {
                TensorView::new(T::DTYPE, s.clone(), b)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::InvalidArgument(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta_json = serde_json::to_string(&self.meta).expect("string map");
        let info = Some([(META_KEY.to_string(), meta_json)].into_iter().collect());
        safetensors::serialize(views, &info).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let (_, header) =
            SafeTensors::read_metadata(bytes).map_err(|e| Error::format(origin, e.to_string()))?;
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::format(origin, e.to_string()))?;
        let meta: BTreeMap<String, String> = match header.metadata().as_ref().and_then(|m| m.get(META_KEY)) {
            Some(json) => serde_json::from_str(json).map_err(|e| Error::format(origin, e.to_string()))?,
            None => BTreeMap::new(),
        };
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            let dims = view.shape();
            if dims.len() != 4 {
                return Err(Error::format(origin, format!("{name}: expected 4 dims, got {dims:?}")));
            }
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            let data: Vec<T> = match view.dtype() {
                Dtype::F32 => f32::from_le_bytes_slice(view.data()).into_iter().map(|v| T::lit(v as f64)).collect(),
                Dtype::F64 => f64::from_le_bytes_slice(view.data()).into_iter().map(T::lit).collect(),
                other => return Err(Error::format(origin, format!("{name}: unsupported dtype {other:?}"))),
            };
            tensors.insert(name, Tensor::from_vec(shape, data)?);
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::Missing(format!("checkpoint {}", path.display())));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
