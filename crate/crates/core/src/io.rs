//! Model persistence.
//!
//! A model is a binary tensor file plus a text sidecar holding the
//! configuration that produced it. The binary layout, all integers
//! little-endian:
//!
//! ```text
//! b"CRNNMDL\0"  u32 version  u32 tensor_count
//! per tensor:   u32 name_len  name (utf-8)  u32 rows  u32 cols  rows*cols f64
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::framing::WindowSpec;
use crate::kv::{KvFile, KvWriter};
use crate::layers::{Aggregation, CrnnLayerConfig};
use crate::model::{ClassifierKind, Model, ModelConfig, ModelParams};
use crate::{Error, Parameters, Result, Rng};

pub const MAGIC: &[u8; 8] = b"CRNNMDL\0";
pub const FORMAT_VERSION: u32 = 1;

/// Reads the model keys out of `kv`. `layers` and the per-layer `kind`,
/// `window` and `features` are required; the rest have defaults.
pub fn model_config_from_kv(kv: &mut KvFile) -> Result<ModelConfig> {
    let input_dim = kv.require("input_dim")?;
    let classes = kv.require("classes")?;
    let n_layers: usize = kv.require("layers")?;
    let mut layers = Vec::with_capacity(n_layers);
    for i in 1..=n_layers {
        let key = |name: &str| format!("layer{i}.{name}");
        let width = kv.require(&key("window"))?;
        let shift = kv.take_or(&key("shift"), 1)?;
        let pool: String = kv.take_or(&key("pool"), "none".to_string())?;
        let pool = match pool.as_str() {
            "none" => None,
            w => {
                let width: usize = w
                    .parse()
                    .map_err(|_| Error::Config(format!("`{}` must be a width or `none`, got `{w}`", key("pool"))))?;
                let shift = kv.take_or(&key("pool_shift"), width)?;
                Some(WindowSpec::new(width, shift)?)
            }
        };
        if pool.is_none() && kv.contains(&key("pool_shift")) {
            return Err(Error::Config(format!(
                "line {}: `{}` set without `{}`",
                kv.line_of(&key("pool_shift")).unwrap_or(0),
                key("pool_shift"),
                key("pool")
            )));
        }
        let features = kv.require(&key("features"))?;
        let mut layer = CrnnLayerConfig::new(
            kv.require(&key("kind"))?,
            WindowSpec::new(width, shift)?,
            pool,
            features,
            kv.take_or(&key("source"), crate::layers::StateSource::Hidden)?,
            kv.take_or(&key("reduction"), crate::layers::Reduction::Last)?,
        );
        layer.hidden = kv.take_or(&key("hidden"), features)?;
        layer.activation = kv.take_or(&key("activation"), layer.activation)?;
        layers.push(layer);
    }
    let cfg = ModelConfig {
        input_dim,
        layers,
        classifier: kv.take_or("classifier", ClassifierKind::Lstm)?,
        classifier_hidden: kv.take_or("classifier_hidden", 256)?,
        dense: kv.take_or("dense", 400)?,
        classes,
        aggregation: kv.take_or("aggregation", Aggregation::All)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Writes every model key, defaults included.
pub fn model_config_to_kv(cfg: &ModelConfig, out: &mut KvWriter) {
    out.set("input_dim", cfg.input_dim)
        .set("classes", cfg.classes)
        .set("layers", cfg.layers.len());
    for (i, l) in cfg.layers.iter().enumerate() {
        let key = |name: &str| format!("layer{}.{name}", i + 1);
        out.set(&key("kind"), l.kind)
            .set(&key("window"), l.window.width)
            .set(&key("shift"), l.window.shift);
        match l.pool {
            Some(p) => out.set(&key("pool"), p.width).set(&key("pool_shift"), p.shift),
            None => out.set(&key("pool"), "none"),
        };
        out.set(&key("features"), l.features)
            .set(&key("hidden"), l.hidden)
            .set(&key("source"), l.source)
            .set(&key("reduction"), l.reduction)
            .set(&key("activation"), l.activation.name());
    }
    out.set("classifier", cfg.classifier)
        .set("classifier_hidden", cfg.classifier_hidden)
        .set("dense", cfg.dense)
        .set("aggregation", cfg.aggregation);
}

pub fn model_config_text(cfg: &ModelConfig) -> String {
    let mut w = KvWriter::new();
    model_config_to_kv(cfg, &mut w);
    w.finish()
}

pub fn parse_model_config(text: &str) -> Result<ModelConfig> {
    let mut kv = KvFile::parse(text)?;
    let cfg = model_config_from_kv(&mut kv)?;
    kv.finish()?;
    Ok(cfg)
}

pub fn encode_params<P: Parameters>(params: &P) -> Vec<u8> {
    let tensors = params.named_tensors();
    let mut out = Vec::with_capacity(16 + params.num_params() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, m) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::ModelFormat(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Overwrites `params` from an encoded file. Every tensor must match by
/// position, name and shape.
pub fn decode_params_into<P: Parameters>(bytes: &[u8], params: &mut P) -> Result<()> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::ModelFormat("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::ModelFormat(format!(
            "unsupported version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let count = r.u32()? as usize;
    let mut targets = params.named_tensors_mut();
    if count != targets.len() {
        return Err(Error::ModelFormat(format!(
            "file holds {count} tensors, configuration needs {}",
            targets.len()
        )));
    }
    for (want, m) in targets.iter_mut() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::ModelFormat("tensor name is not utf-8".into()))?;
        if name != want {
            return Err(Error::ModelFormat(format!("expected tensor `{want}`, found `{name}`")));
        }
        let shape = (r.u32()? as usize, r.u32()? as usize);
        if shape != m.shape() {
            return Err(Error::ModelFormat(format!(
                "tensor `{name}` is {shape:?}, configuration needs {:?}",
                m.shape()
            )));
        }
        let raw = r.take(shape.0 * shape.1 * 8)?;
        for (dst, chunk) in m.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::ModelFormat(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(())
}

/// `model.bin` -> `model.conf`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("conf")
}

pub fn save_model(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_params(&model.params)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, model_config_text(&model.config)).map_err(|e| Error::io(&side, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let cfg = parse_model_config(&text)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut params = ModelParams::new(&cfg, &mut Rng::new(0));
    decode_params_into(&bytes, &mut params)?;
    Ok(Model::with_params(cfg, params))
}
