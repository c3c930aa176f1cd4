//! Single-file model checkpoints: a text manifest followed by a raw
//! little-endian `f32` payload.
//!
//! ```text
//! SSLCHRONO-CKPT 1
//! config n_blocks=4 d_model=64 n_heads=1 seq_len=10 n_channels=6 dropout_p=0.1 head_kind=regression residual=true
//! meta objective=rhr
//! param input_projection.weight backbone 6,64 0
//! ...
//! payload_bytes 123456
//! sha256 <hex over every line above plus the payload>
//! end
//! <payload>
//! ```

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::ndgrad::Tensor;
use crate::transformer::{HeadKind, ModelConfig, ModelParams, ParamGroup, Parameter};

pub const MAGIC: &str = "SSLCHRONO-CKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (missing {MAGIC} header)")]
    NotACheckpoint,
    #[error("unsupported checkpoint version {0}")]
    Version(String),
    #[error("malformed checkpoint header: {0}")]
    Malformed(String),
    #[error("checksum mismatch: header says {expected}, content hashes to {actual}")]
    Checksum { expected: String, actual: String },
    #[error("manifest does not match the model config: {0}")]
    Layout(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Free-form `key=value` tags, e.g. the pretraining objective.
    pub meta: BTreeMap<String, String>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn config_line(c: &ModelConfig) -> String {
    format!(
        "config n_blocks={} d_model={} n_heads={} seq_len={} n_channels={} dropout_p={} head_kind={} residual={}",
        c.n_blocks,
        c.d_model,
        c.n_heads,
        c.seq_len,
        c.n_channels,
        c.dropout_p,
        c.head_kind.as_str(),
        c.residual
    )
}

fn parse_config(line: &str) -> Result<ModelConfig, CheckpointError> {
    let bad = |what: &str| CheckpointError::Malformed(format!("config line: {what}"));
    let fields: BTreeMap<&str, &str> = line
        .strip_prefix("config ")
        .ok_or_else(|| bad("missing"))?
        .split_whitespace()
        .map(|kv| kv.split_once('=').ok_or_else(|| bad(kv)))
        .collect::<Result<_, _>>()?;
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(k));
    let num = |k: &str| get(k)?.parse::<usize>().map_err(|_| bad(k));
    Ok(ModelConfig {
        n_blocks: num("n_blocks")?,
        d_model: num("d_model")?,
        n_heads: num("n_heads")?,
        seq_len: num("seq_len")?,
        n_channels: num("n_channels")?,
        dropout_p: get("dropout_p")?.parse().map_err(|_| bad("dropout_p"))?,
        head_kind: HeadKind::parse(get("head_kind")?).ok_or_else(|| bad("head_kind"))?,
        residual: get("residual")?.parse().map_err(|_| bad("residual"))?,
    })
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Self {
            params,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: &str) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC} {VERSION}\n{}\n", config_line(self.params.config()));
        for (k, v) in &self.meta {
            header.push_str(&format!("meta {k}={v}\n"));
        }
        let mut payload = Vec::with_capacity(self.params.num_scalars() * 4);
        for p in self.params.params() {
            let dims: Vec<String> = p.tensor.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("param {} {} {} {}\n", p.name, p.group.as_str(), dims.join(","), payload.len()));
            for x in p.tensor.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        header.push_str(&format!("payload_bytes {}\n", payload.len()));
        let mut hasher = Sha256::new();
        hasher.update(header.as_bytes());
        hasher.update(&payload);
        header.push_str(&format!("sha256 {}\nend\n", hex(&hasher.finalize())));
        let mut out = header.into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let malformed = |m: String| CheckpointError::Malformed(m);
        let mut pos = 0;
        let mut next_line = || -> Result<(&str, usize), CheckpointError> {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| malformed("truncated header".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| malformed("header is not UTF-8".into()))?;
            let start = pos;
            pos += end + 1;
            Ok((line, start))
        };

        let (first, _) = next_line().map_err(|_| CheckpointError::NotACheckpoint)?;
        let version = first.strip_prefix(MAGIC).ok_or(CheckpointError::NotACheckpoint)?.trim();
        if version != VERSION.to_string() {
            return Err(CheckpointError::Version(version.into()));
        }
        let (line, _) = next_line()?;
        let config = parse_config(line)?;

        let mut meta = BTreeMap::new();
        let mut manifest = Vec::new();
        let (payload_len, hashed_end) = loop {
            let (line, start) = next_line()?;
            if let Some(kv) = line.strip_prefix("meta ") {
                let (k, v) = kv.split_once('=').ok_or_else(|| malformed(format!("meta line {kv:?}")))?;
                meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("param ") {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 4 {
                    return Err(malformed(format!("param line {rest:?}")));
                }
                let group = ParamGroup::parse(f[1]).ok_or_else(|| malformed(format!("group {:?}", f[1])))?;
                let shape = f[2]
                    .split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| malformed(format!("shape {:?}", f[2])))?;
                let offset: usize = f[3].parse().map_err(|_| malformed(format!("offset {:?}", f[3])))?;
                manifest.push((f[0].to_string(), group, shape, offset));
            } else if let Some(n) = line.strip_prefix("payload_bytes ") {
                let n: usize = n.parse().map_err(|_| malformed("payload_bytes".into()))?;
                break (n, start + line.len() + 1);
            } else {
                return Err(malformed(format!("unexpected line {line:?}")));
            }
        };
        let (line, _) = next_line()?;
        let expected = line.strip_prefix("sha256 ").ok_or_else(|| malformed("missing sha256".into()))?.to_string();
        let (line, _) = next_line()?;
        if line != "end" {
            return Err(malformed("missing end marker".into()));
        }
        let payload = &bytes[pos..];
        let mut hasher = Sha256::new();
        hasher.update(&bytes[..hashed_end]);
        hasher.update(payload);
        let actual = hex(&hasher.finalize());
        if actual != expected {
            return Err(CheckpointError::Checksum { expected, actual });
        }
        if payload.len() != payload_len {
            return Err(malformed(format!("payload has {} bytes, header says {payload_len}", payload.len())));
        }

        let mut params = Vec::with_capacity(manifest.len());
        let mut cursor = 0;
        for (name, group, shape, offset) in manifest {
            if offset != cursor {
                return Err(malformed(format!("{name} at offset {offset}, expected {cursor}")));
            }
            let n: usize = shape.iter().product();
            let end = cursor + 4 * n;
            let chunk = payload.get(cursor..end).ok_or_else(|| malformed(format!("{name} runs past the payload")))?;
            let data = chunk.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            let tensor = Tensor::new(&shape, data).map_err(|e| malformed(format!("{name}: {e}")))?;
            params.push(Parameter { name, group, tensor });
            cursor = end;
        }
        if cursor != payload.len() {
            return Err(malformed("payload has trailing bytes".into()));
        }
        let params = ModelParams::from_parts(config, params).map_err(|e| CheckpointError::Layout(e.to_string()))?;
        Ok(Self { params, meta })
    }
}
