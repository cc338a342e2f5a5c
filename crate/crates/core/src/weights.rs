//! The `FDWT` weight container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "FDWT" | u16 version | u16 flags | u32 entry count
//! per entry: u16 name length | name | u8 dtype | u8 rank | rank x u32 dims | payload
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! dtype 0 is f32, 1 is f64 and 255 is raw bytes. The first entry is always
//! `__config__`, a JSON document describing the network. Shapes are stored
//! with leading unit axes dropped (a pointwise kernel is `(cin, cout)`, a
//! scalar is `(1)`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::model::{BackboneConfig, DetectorModel, ToyBackbone, BACKBONE_PREFIX};
use crate::tensor::{Float, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"FDWT";
pub const VERSION: u16 = 1;
pub const CONFIG_NAME: &str = "__config__";
pub const DTYPE_RAW: u8 = 255;
/// Flag bit set on files holding only backbone tensors.
pub const FLAG_BACKBONE_ONLY: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsHeader {
    pub kind: String,
    pub model: Option<crate::model::ModelConfig>,
    pub backbone: BackboneConfig,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub backbone_frozen: bool,
    /// Learnable tensors that were not trainable when saved.
    pub frozen: Vec<String>,
}

/// A decoded file: header flags, the config document and named tensors in
/// file order.
#[derive(Debug, Clone)]
pub struct WeightFile<T> {
    pub flags: u16,
    pub config: String,
    pub tensors: Vec<(String, Tensor<T>)>,
}

fn stored_dims(s: Shape) -> Vec<usize> {
    let first = s.0.iter().position(|&d| d != 1).unwrap_or(3);
    s.0[first..].to_vec()
}

fn put_entry_head(out: &mut Vec<u8>, name: &str, dtype: u8, dims: &[usize]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

pub fn encode<T: Float>(flags: u16, config: &str, tensors: &[(&str, &Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&((tensors.len() + 1) as u32).to_le_bytes());
    put_entry_head(&mut out, CONFIG_NAME, DTYPE_RAW, &[config.len()]);
    out.extend_from_slice(config.as_bytes());
    for (name, t) in tensors {
        put_entry_head(&mut out, name, T::DTYPE, &stored_dims(t.shape()));
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn read_values<T: Float, S: Float>(raw: &[u8]) -> Vec<T> {
    raw.chunks_exact(S::BYTES)
        .map(|c| T::from(S::read_le(c)).expect("float conversion"))
        .collect()
}

pub fn decode<T: Float>(bytes: &[u8]) -> Result<WeightFile<T>> {
    if bytes.len() < 16 {
        return Err(Error::format(bytes.len(), "file too short for header and checksum"));
    }
    let body_len = bytes.len() - 4;
    let mut r = Reader {
        bytes: &bytes[..body_len],
        pos: 0,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected FDWT"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}, expected {VERSION}")));
    }
    let flags = r.u16("flags")?;
    let count = r.u32("entry count")? as usize;

    let mut config = None;
    let mut tensors: Vec<(String, Tensor<T>)> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for i in 0..count {
        let start = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(start + 2, "name is not UTF-8"))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::format(start, format!("duplicate tensor name {name:?}")));
        }
        let dtype_at = r.pos;
        let dtype = r.u8("dtype")?;
        let rank = r.u8("rank")? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::format(dtype_at + 1, format!("tensor {name:?} has unsupported rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dims")? as usize);
        }
        let numel: usize = dims.iter().product();
        if i == 0 {
            if name != CONFIG_NAME || dtype != DTYPE_RAW || rank != 1 {
                return Err(Error::format(start, "first entry must be the raw __config__ document"));
            }
            let at = r.pos;
            let raw = r.take(numel, "config payload")?;
            config = Some(
                std::str::from_utf8(raw)
                    .map_err(|_| Error::format(at, "config is not UTF-8"))?
                    .to_string(),
            );
            continue;
        }
        let data = match dtype {
            0 => read_values::<T, f32>(r.take(numel * 4, &format!("tensor {name:?}"))?),
            1 => read_values::<T, f64>(r.take(numel * 8, &format!("tensor {name:?}"))?),
            other => return Err(Error::format(dtype_at, format!("tensor {name:?} has unknown dtype {other}"))),
        };
        let mut shape = [1usize; 4];
        shape[4 - rank..].copy_from_slice(&dims);
        tensors.push((name, Tensor::from_vec(Shape(shape), data)?));
    }
    if r.pos != body_len {
        return Err(Error::format(r.pos, format!("{} unexpected bytes after the last entry", body_len - r.pos)));
    }
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(&bytes[..body_len]);
    if stored != actual {
        return Err(Error::format(
            body_len,
            format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
        ));
    }
    let config = config.ok_or_else(|| Error::format(12, "file has no entries"))?;
    Ok(WeightFile { flags, config, tensors })
}

fn header_json(h: &WeightsHeader) -> String {
    serde_json::to_string(h).expect("header serializes")
}

fn parse_header(config: &str) -> Result<WeightsHeader> {
    serde_json::from_str(config).map_err(|e| Error::Config(format!("bad weights config: {e}")))
}

fn fill_store<T: Float>(store: &mut ParamStore<T>, tensors: Vec<(String, Tensor<T>)>, prefix: &str) -> Result<()> {
    let expected = store.iter().filter(|(_, p)| p.name.starts_with(prefix)).count();
    if tensors.len() != expected {
        return Err(Error::Config(format!(
            "weights file holds {} tensors, network expects {expected}",
            tensors.len()
        )));
    }
    for (name, t) in tensors {
        let id = store
            .id(&name)
            .filter(|_| name.starts_with(prefix))
            .ok_or_else(|| Error::Config(format!("weights file has unknown tensor {name:?}")))?;
        if store.value(id).shape() != t.shape() {
            return Err(Error::Dimension(format!(
                "tensor {name}: file shape {}, network shape {}",
                t.shape(),
                store.value(id).shape()
            )));
        }
        store.get_mut(id).value = t;
    }
    Ok(())
}

pub fn model_bytes<T: Float>(model: &DetectorModel<T>) -> Vec<u8> {
    let header = WeightsHeader {
        kind: "detector".into(),
        model: Some(model.cfg.clone()),
        backbone: model.cfg.backbone.clone(),
        bn_eps: model.cfg.bn_eps,
        bn_momentum: model.cfg.bn_momentum,
        backbone_frozen: model.backbone_frozen(),
        frozen: model
            .store
            .iter()
            .filter(|(_, p)| !p.trainable && !p.role.is_statistic())
            .map(|(_, p)| p.name.clone())
            .collect(),
    };
    let tensors: Vec<(&str, &Tensor<T>)> = model.store.iter().map(|(_, p)| (p.name.as_str(), &p.value)).collect();
    encode(0, &header_json(&header), &tensors)
}

pub fn model_from_bytes<T: Float>(bytes: &[u8]) -> Result<DetectorModel<T>> {
    let file = decode::<T>(bytes)?;
    if file.flags & FLAG_BACKBONE_ONLY != 0 {
        return Err(Error::Config("file holds backbone weights only, not a detector".into()));
    }
    let header = parse_header(&file.config)?;
    let cfg = header
        .model
        .ok_or_else(|| Error::Config("weights config lacks the model section".into()))?;
    let mut model = DetectorModel::build(cfg)?;
    fill_store(&mut model.store, file.tensors, "")?;
    model.freeze_backbone(header.backbone_frozen);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let p = model.store.get_mut(id);
        if !p.role.is_statistic() {
            p.trainable = !header.frozen.contains(&p.name);
        }
    }
    Ok(model)
}

pub fn save_model<T: Float>(model: &DetectorModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model<T: Float>(path: impl AsRef<Path>) -> Result<DetectorModel<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}

/// Backbone tensors of `store` (names under `backbone.`) as a flagged file.
pub fn backbone_bytes<T: Float>(store: &ParamStore<T>, cfg: &BackboneConfig, bn_eps: f64, bn_momentum: f64) -> Vec<u8> {
    let header = WeightsHeader {
        kind: "backbone".into(),
        model: None,
        backbone: cfg.clone(),
        bn_eps,
        bn_momentum,
        backbone_frozen: true,
        frozen: Vec::new(),
    };
    let tensors: Vec<(&str, &Tensor<T>)> = store
        .iter()
        .filter(|(_, p)| p.name.starts_with(BACKBONE_PREFIX))
        .map(|(_, p)| (p.name.as_str(), &p.value))
        .collect();
    encode(FLAG_BACKBONE_ONLY, &header_json(&header), &tensors)
}

pub fn save_backbone<T: Float>(
    store: &ParamStore<T>,
    cfg: &BackboneConfig,
    bn_eps: f64,
    bn_momentum: f64,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, backbone_bytes(store, cfg, bn_eps, bn_momentum)).map_err(|e| Error::io(path, e))
}

/// A validated backbone: its config and a store holding exactly its tensors.
pub fn load_backbone<T: Float>(path: impl AsRef<Path>) -> Result<(BackboneConfig, ParamStore<T>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    backbone_from_bytes(&bytes)
}

pub fn backbone_from_bytes<T: Float>(bytes: &[u8]) -> Result<(BackboneConfig, ParamStore<T>)> {
    let file = decode::<T>(bytes)?;
    let header = parse_header(&file.config)?;
    let mut store = ParamStore::new();
    ToyBackbone::register(&mut store, header.backbone.clone())?;
    let tensors = file
        .tensors
        .into_iter()
        .filter(|(n, _)| n.starts_with(BACKBONE_PREFIX))
        .collect();
    fill_store(&mut store, tensors, BACKBONE_PREFIX)?;
    Ok((header.backbone, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small() -> DetectorModel<f32> {
        let mut cfg = ModelConfig::new(1, 1);
        cfg.expand_width = 16;
        cfg.se_width = 4;
        DetectorModel::assemble(cfg, 3).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = small();
        let a = model_bytes(&m);
        let back = model_from_bytes::<f32>(&a).unwrap();
        assert_eq!(model_bytes(&back), a);
        assert_eq!(back.cfg, m.cfg);
        for ((_, p), (_, q)) in m.store.iter().zip(back.store.iter()) {
            assert_eq!(p, q);
        }
    }

    #[test]
    fn gamma_is_stored_with_unit_shape() {
        let m = small();
        let f = decode::<f32>(&model_bytes(&m)).unwrap();
        let (_, g) = f.tensors.iter().find(|(n, _)| n == "ftt.stage1.attn.gamma").unwrap();
        assert_eq!(g.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(stored_dims(g.shape()), vec![1]);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = model_bytes(&small());
        let mut bad = bytes.clone();
        let i = bad.len() - 20;
        bad[i] ^= 0x40;
        assert!(matches!(decode::<f32>(&bad), Err(Error::Format { message, .. }) if message.contains("checksum")));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode::<f32>(&bad), Err(Error::Format { offset: 0, .. })));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode::<f32>(&bad), Err(Error::Format { offset: 4, .. })));

        let cut = &bytes[..bytes.len() / 2];
        assert!(matches!(decode::<f32>(cut), Err(Error::Format { message, .. }) if message.contains("truncated")));
    }

    #[test]
    fn duplicate_names_rejected() {
        let t = Tensor::<f32>::zeros(Shape::new(1, 1, 1, 2));
        let bytes = encode(0, "{}", &[("a", &t), ("a", &t)]);
        let err = decode::<f32>(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { message, .. } if message.contains("duplicate")));
    }

    #[test]
    fn backbone_file_round_trip() {
        let m = small();
        let bytes = backbone_bytes(&m.store, &m.cfg.backbone, 1e-3, 0.99);
        assert!(model_from_bytes::<f32>(&bytes).is_err());
        let (cfg, store) = backbone_from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(cfg, m.cfg.backbone);
        assert_eq!(store.checksum(BACKBONE_PREFIX), m.backbone_checksum());
    }
}
