//! On-disk container for adapter checkpoints and base models.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! [8]  magic            "ADPTFRG1" for adapters, "ADPTBASE" for base models
//! [4]  version          u32, currently 1
//! [8]  metadata length  u64
//! [n]  metadata         UTF-8 "key: value" lines
//! [..] payload          row-major values, concatenated
//! ```
//!
//! Adapter payloads list sites in sorted order and each site's factors in
//! storage order ((down, up), (a, b) or the dense delta). Adapter values are
//! stored as 32-bit floats rounded to nearest-even; computation happens in 64
//! bits. Base models keep 64-bit weights so that folding an adapter into a
//! base file is lossless.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::adapter::{
    AdapterCheckpoint, AdapterKind, AdapterModule, CheckpointMeta, Objective, OperandRef, Provenance, SiteId,
};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ADPTFRG1";
pub const BASE_MODEL_MAGIC: &[u8; 8] = b"ADPTBASE";
pub const FORMAT_VERSION: u32 = 1;

/// Lowercase hex SHA-256.
pub fn fingerprint(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Converts to storage precision, refusing anything that is or becomes non-finite.
pub fn quantize(values: &[f64], what: &str) -> Result<Vec<f32>> {
    values
        .iter()
        .map(|&v| {
            let q = v as f32;
            if q.is_finite() {
                Ok(q)
            } else {
                Err(Error::NonFinite(format!("{what} holds {v}, not storable as f32")))
            }
        })
        .collect()
}

pub fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Stored payload bytes of a checkpoint; the fingerprint of a checkpoint is the
/// SHA-256 of exactly these bytes.
pub fn payload_bytes(ckpt: &AdapterCheckpoint) -> Result<Vec<u8>> {
    Ok(f32_bytes(&quantize(&ckpt.flat_parameters(), "checkpoint payload")?))
}

pub fn checkpoint_fingerprint(ckpt: &AdapterCheckpoint) -> Result<String> {
    Ok(fingerprint(&payload_bytes(ckpt)?))
}

pub(crate) fn encode_container(magic: &[u8; 8], metadata: &str, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + metadata.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(metadata.len() as u64).to_le_bytes());
    out.extend_from_slice(metadata.as_bytes());
    out.extend_from_slice(payload);
    out
}

/// Splits a container into its metadata text and raw payload bytes.
pub(crate) fn decode_container<'a>(magic: &[u8; 8], bytes: &'a [u8]) -> Result<(String, &'a [u8])> {
    let found = bytes.get(..8).ok_or(Error::Truncated("magic bytes"))?;
    if found != magic {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    let version = bytes.get(8..12).ok_or(Error::Truncated("format version"))?;
    let version = u32::from_le_bytes(version.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let len = bytes.get(12..20).ok_or(Error::Truncated("metadata length"))?;
    let len = u64::from_le_bytes(len.try_into().expect("8 bytes"));
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(20))
        .ok_or(Error::Truncated("metadata block"))?;
    let meta = bytes.get(20..end).ok_or(Error::Truncated("metadata block"))?;
    let meta = String::from_utf8(meta.to_vec()).map_err(|_| Error::Parse("metadata is not UTF-8".into()))?;
    Ok((meta, &bytes[end..]))
}

fn f32_values(payload: &[u8]) -> Result<Vec<f32>> {
    if payload.len() % 4 != 0 {
        return Err(Error::Truncated("tensor payload (partial value)"));
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

pub(crate) fn f64_values(payload: &[u8]) -> Result<Vec<f64>> {
    if payload.len() % 8 != 0 {
        return Err(Error::Truncated("tensor payload (partial value)"));
    }
    Ok(payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Writes via a temporary sibling file and a rename so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Ordered `key: value` metadata lines. Keys may repeat.
#[derive(Debug, Default, Clone)]
pub(crate) struct MetaLines(Vec<(String, String)>);

impl MetaLines {
    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.0.push((key.to_string(), value.to_string()));
    }

    pub fn render(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}: {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(": ")
                .ok_or_else(|| Error::Parse(format!("metadata line without 'key: value': {line:?}")))?;
            lines.push((k.to_string(), v.to_string()));
        }
        Ok(Self(lines))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Consistency(format!("metadata key {key:?} missing")))
    }

    pub fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.0.iter().filter(move |(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Parse(format!("bad value for {key}: {raw:?}")))
    }
}

fn shape_text((r, c): (usize, usize)) -> String {
    format!("{r}x{c}")
}

fn parse_shape(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Parse(format!("bad shape {s:?}"));
    let (r, c) = s.split_once('x').ok_or_else(bad)?;
    let r: usize = r.parse().map_err(|_| bad())?;
    let c: usize = c.parse().map_err(|_| bad())?;
    if r == 0 || c == 0 {
        return Err(bad());
    }
    Ok((r, c))
}

fn checkpoint_metadata(ckpt: &AdapterCheckpoint) -> String {
    let mut m = MetaLines::default();
    let meta = &ckpt.meta;
    m.push("kind", ckpt.kind());
    m.push("language_tag", &meta.language_tag);
    m.push("objective", meta.objective.as_str());
    m.push("base_model_fingerprint", &meta.base_model_fingerprint);
    m.push("training_steps", meta.training_steps);
    if let Some(p) = &meta.provenance {
        m.push("recipe_mode", &p.mode);
        m.push("recipe_lambda", p.lambda.map_or("none".to_string(), |l| l.to_string()));
        m.push("recipe_space", &p.space);
        for op in &p.operands {
            m.push("recipe_operand", format!("{} {}", op.role, op.fingerprint));
        }
    }
    for (site, module) in ckpt.modules() {
        let shapes: Vec<String> = module.factor_shapes().into_iter().map(shape_text).collect();
        m.push("site", format!("{site} {}", shapes.join(" ")));
    }
    m.render()
}

pub fn encode_checkpoint(ckpt: &AdapterCheckpoint) -> Result<Vec<u8>> {
    let payload = quantize(&ckpt.flat_parameters(), "checkpoint payload")?;
    Ok(encode_container(CHECKPOINT_MAGIC, &checkpoint_metadata(ckpt), &f32_bytes(&payload)))
}

pub fn write_checkpoint(ckpt: &AdapterCheckpoint, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ckpt)?)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<AdapterCheckpoint> {
    let (text, payload) = decode_container(CHECKPOINT_MAGIC, bytes)?;
    let payload = f32_values(payload)?;
    let m = MetaLines::parse(&text)?;
    let kind: AdapterKind = m.require("kind")?.parse()?;
    let mut meta = CheckpointMeta::new(
        m.require("language_tag")?,
        m.require("objective")?.parse::<Objective>()?,
        m.require("base_model_fingerprint")?,
    );
    meta.training_steps = m.parse_value("training_steps")?;
    if let Some(mode) = m.get("recipe_mode") {
        let lambda = match m.require("recipe_lambda")? {
            "none" => None,
            raw => Some(raw.parse().map_err(|_| Error::Parse(format!("bad recipe_lambda {raw:?}")))?),
        };
        let operands = m
            .all("recipe_operand")
            .map(|line| {
                let (role, fp) = line
                    .split_once(' ')
                    .ok_or_else(|| Error::Parse(format!("bad recipe_operand {line:?}")))?;
                Ok(OperandRef {
                    role: role.to_string(),
                    fingerprint: fp.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        meta.provenance = Some(Provenance {
            mode: mode.to_string(),
            lambda,
            space: m.require("recipe_space")?.to_string(),
            operands,
        });
    }

    let mut layout = Vec::new();
    for line in m.all("site") {
        let mut parts = line.split(' ');
        let site: SiteId = parts
            .next()
            .ok_or_else(|| Error::Parse("empty site line".into()))?
            .parse()?;
        let shapes = parts.map(parse_shape).collect::<Result<Vec<_>>>()?;
        layout.push((site, shapes));
    }
    let expected: usize = layout
        .iter()
        .flat_map(|(_, s)| s.iter().map(|(r, c)| r * c))
        .sum();
    if expected != payload.len() {
        return Err(Error::Consistency(format!(
            "metadata site list describes {expected} values, payload holds {}",
            payload.len()
        )));
    }
    if let Some(bad) = payload.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("payload contains {bad}")));
    }
    if layout.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::Consistency("site list is not in sorted order".into()));
    }

    let mut offset = 0;
    let mut modules = BTreeMap::new();
    for (site, shapes) in layout {
        let factors = shapes
            .into_iter()
            .map(|(r, c)| {
                let data = payload[offset..offset + r * c].iter().map(|&v| v as f64).collect();
                offset += r * c;
                Matrix::from_vec(r, c, data)
            })
            .collect::<Result<Vec<_>>>()?;
        let module = AdapterModule::from_factors(kind, factors)
            .map_err(|e| Error::Consistency(format!("site {site}: {e}")))?;
        modules.insert(site, module);
    }
    AdapterCheckpoint::new(kind, modules, meta)
}

pub fn read_checkpoint(path: &Path) -> Result<AdapterCheckpoint> {
    decode_checkpoint(&fs::read(path)?)
}
