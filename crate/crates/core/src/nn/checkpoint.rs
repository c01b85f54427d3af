//! Binary checkpoint format.
//!
//! ```text
//! "OSQAPG01"                      8 bytes
//! header length                   u32, little-endian
//! header                          UTF-8, one `key=value` per line
//! payload                         f64 little-endian arrays:
//!   for each hidden layer: weight (out x in, row-major), bias
//!   mask head weight, bias
//!   variance head weight, bias
//!   feature mean, feature std     (input_dim each)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::{NetDims, NetworkParams};
use crate::dsp::FeatureStats;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"OSQAPG01";

/// Everything besides the weights needed to run a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub context: usize,
    pub bands: usize,
    pub frame_len: usize,
    pub hop: usize,
    pub sample_rate: u32,
    pub c_sigma: f64,
    /// Free-form provenance (single line).
    pub created: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParams,
    pub stats: FeatureStats,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        save_checkpoint(&self.params, &self.stats, &self.meta)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (params, stats, meta) = load_checkpoint(bytes)?;
        Ok(Self {
            params,
            stats,
            meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn check_consistency(dims: &NetDims, meta: &CheckpointMeta, stats_dim: usize) -> Result<()> {
    let expected_input = (2 * meta.context + 1) * meta.bands;
    if dims.input != expected_input {
        return Err(Error::CheckpointDims(format!(
            "input width {} but context {} with {} bands needs {expected_input}",
            dims.input, meta.context, meta.bands
        )));
    }
    if dims.output != meta.bands {
        return Err(Error::CheckpointDims(format!(
            "{} outputs for {} bands",
            dims.output, meta.bands
        )));
    }
    if stats_dim != dims.input {
        return Err(Error::CheckpointDims(format!(
            "feature statistics of dimension {stats_dim} for input width {}",
            dims.input
        )));
    }
    Ok(())
}

pub fn save_checkpoint(params: &NetworkParams, stats: &FeatureStats, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let dims = params.dims();
    if stats.mean.len() != stats.std.len() {
        return Err(Error::CheckpointDims("feature mean and std lengths differ".into()));
    }
    check_consistency(&dims, meta, stats.mean.len())?;
    if meta.created.contains('\n') {
        return Err(Error::CheckpointHeader("creation note spans lines".into()));
    }
    let hidden = dims
        .hidden
        .iter()
        .map(|h| h.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let header = format!(
        "input_dim={}\nhidden={}\noutput_dim={}\ncontext={}\nbands={}\nbins={}\nframe_len={}\nhop={}\nsample_rate={}\nc_sigma={}\ncreated={}\n",
        dims.input,
        hidden,
        dims.output,
        meta.context,
        meta.bands,
        meta.frame_len / 2 + 1,
        meta.frame_len,
        meta.hop,
        meta.sample_rate,
        meta.c_sigma,
        meta.created
    );
    let n_values = params.num_params() + 2 * stats.mean.len();
    let mut out = Vec::with_capacity(12 + header.len() + 8 * n_values);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in params.to_flat().into_iter().chain(stats.mean.iter().copied()).chain(stats.std.iter().copied()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn field<'a>(map: &'a BTreeMap<&str, &str>, key: &str) -> Result<&'a str> {
    map.get(key)
        .copied()
        .ok_or_else(|| Error::CheckpointHeader(format!("missing key {key:?}")))
}

fn parse<T: std::str::FromStr>(map: &BTreeMap<&str, &str>, key: &str) -> Result<T> {
    let raw = field(map, key)?;
    raw.parse()
        .map_err(|_| Error::CheckpointHeader(format!("bad value {raw:?} for {key}")))
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<(NetworkParams, FeatureStats, CheckpointMeta)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 4 {
        return Err(Error::TruncatedPayload {
            expected: 4,
            found: rest.len(),
        });
    }
    let header_len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
    let rest = &rest[4..];
    if rest.len() < header_len {
        return Err(Error::TruncatedPayload {
            expected: header_len,
            found: rest.len(),
        });
    }
    let header = std::str::from_utf8(&rest[..header_len])
        .map_err(|_| Error::CheckpointHeader("header is not UTF-8".into()))?;
    let mut map = BTreeMap::new();
    for line in header.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::CheckpointHeader(format!("line without '=': {line:?}")))?;
        map.insert(k, v);
    }
    let hidden_raw = field(&map, "hidden")?;
    let hidden = if hidden_raw.is_empty() {
        Vec::new()
    } else {
        hidden_raw
            .split(',')
            .map(|h| {
                h.parse()
                    .map_err(|_| Error::CheckpointHeader(format!("bad hidden size {h:?}")))
            })
            .collect::<Result<Vec<usize>>>()?
    };
    let dims = NetDims::new(parse(&map, "input_dim")?, hidden, parse(&map, "output_dim")?);
    let meta = CheckpointMeta {
        context: parse(&map, "context")?,
        bands: parse(&map, "bands")?,
        frame_len: parse(&map, "frame_len")?,
        hop: parse(&map, "hop")?,
        sample_rate: parse(&map, "sample_rate")?,
        c_sigma: parse(&map, "c_sigma")?,
        created: field(&map, "created")?.to_string(),
    };
    let bins: usize = parse(&map, "bins")?;
    if bins != meta.frame_len / 2 + 1 {
        return Err(Error::CheckpointDims(format!(
            "{bins} bins for frame length {}",
            meta.frame_len
        )));
    }
    check_consistency(&dims, &meta, dims.input)?;
    let mut params = NetworkParams::zeros(&dims)
        .map_err(|e| Error::CheckpointDims(e.to_string()))?;

    let payload = &rest[header_len..];
    let n_values = params.num_params() + 2 * dims.input;
    let expected = n_values * 8;
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::CheckpointDims(format!(
            "{} trailing bytes after payload",
            payload.len() - expected
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let np = params.num_params();
    params.set_flat(&values[..np])?;
    let stats = FeatureStats {
        mean: values[np..np + dims.input].to_vec(),
        std: values[np + dims.input..].to_vec(),
    };
    Ok((params, stats, meta))
}
