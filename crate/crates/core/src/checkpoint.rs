//! Checkpoint files: a JSON manifest followed by little-endian `f32` tensors.
//!
//! Layout: the line `idkm-checkpoint <manifest bytes>\n`, the manifest, then
//! the payload. Tensor offsets in the manifest are relative to the payload start.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerParams, NetworkSpec, Network, Params};
use crate::pq::{bits_per_weight, Codebook};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "idkm-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    /// Byte length.
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookEntry {
    pub layer: usize,
    pub k: usize,
    pub d: usize,
    pub bits_per_weight: f64,
    pub tensor: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub architecture: NetworkSpec,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub codebooks: Vec<CodebookEntry>,
    #[serde(default)]
    pub config: serde_json::Value,
}

/// Weights as stored on disk, plus optional per-layer codebooks.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub architecture: NetworkSpec,
    pub params: Params<f32>,
    /// `(layer index, codebook)` for quantized layers.
    pub codebooks: Vec<(usize, Codebook<f32>)>,
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn bits_per_weight(&self, layer: usize) -> Option<f64> {
        self.codebooks
            .iter()
            .find(|(l, _)| *l == layer)
            .map(|(_, c)| bits_per_weight(c.k(), c.dim()))
    }

    pub fn params_f64(&self) -> Params<f64> {
        self.params.cast()
    }

    /// Codebooks indexed by layer, `None` where a layer has none.
    pub fn codebooks_f64(&self) -> Vec<Option<Codebook<f64>>> {
        let mut out = vec![None; self.architecture.layers.len()];
        for (l, c) in &self.codebooks {
            if let Some(slot) = out.get_mut(*l) {
                let data = c.as_slice().iter().map(|&x| x as f64).collect();
                *slot = Codebook::new(data, c.k(), c.dim()).ok();
            }
        }
        out
    }

    /// Builds a checkpoint from in-memory `f64` state, narrowing to `f32`.
    pub fn from_f64(
        architecture: NetworkSpec,
        params: &Params<f64>,
        codebooks: &[Option<Codebook<f64>>],
        config: serde_json::Value,
    ) -> Result<Self> {
        let codebooks = codebooks
            .iter()
            .enumerate()
            .filter_map(|(l, c)| c.as_ref().map(|c| (l, c)))
            .map(|(l, c)| {
                let data = c.as_slice().iter().map(|&x| x as f32).collect();
                Codebook::new(data, c.k(), c.dim()).map(|c| (l, c))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            architecture,
            params: params.cast(),
            codebooks,
            config,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let net = Network::new(self.architecture.clone())?;
        net.check_params(&self.params)?;
        let mut payload: Vec<u8> = Vec::new();
        let mut tensors = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &[f32], payload: &mut Vec<u8>| {
            let offset = payload.len() as u64;
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name,
                shape,
                offset,
                len: data.len() as u64 * 4,
            });
        };
        for (name, shape, data) in self.params.named_tensors() {
            push(name, shape, data, &mut payload);
        }
        let mut codebooks = Vec::new();
        for (layer, c) in &self.codebooks {
            let name = format!("codebooks.{layer}");
            push(name.clone(), vec![c.k(), c.dim()], c.as_slice(), &mut payload);
            codebooks.push(CodebookEntry {
                layer: *layer,
                k: c.k(),
                d: c.dim(),
                bits_per_weight: bits_per_weight(c.k(), c.dim()),
                tensor: name,
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            architecture: self.architecture.clone(),
            tensors,
            codebooks,
            config: self.config.clone(),
        };
        let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::param(e.to_string()))?;
        let mut out = format!("{MAGIC} {}\n", json.len()).into_bytes();
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .take(64)
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(0, "missing checkpoint header line"))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::format(0, "header is not UTF-8"))?;
        let len: usize = header
            .strip_prefix(MAGIC)
            .and_then(|rest| rest.trim().parse().ok())
            .ok_or_else(|| Error::format(0, format!("bad checkpoint header {header:?}")))?;
        let start = nl + 1;
        let json = bytes
            .get(start..start + len)
            .ok_or_else(|| Error::format(bytes.len() as u64, "file truncated inside manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| Error::format(start as u64, format!("bad manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::format(
                start as u64,
                format!("format version {} not supported (expected {FORMAT_VERSION})", manifest.format_version),
            ));
        }
        let base = (start + len) as u64;
        let payload = &bytes[start + len..];

        let mut expected = 0u64;
        for t in &manifest.tensors {
            let want = t.shape.iter().product::<usize>() as u64 * 4;
            if t.len != want {
                return Err(Error::format(
                    base + t.offset,
                    format!("tensor {} has {} bytes but shape {:?} needs {want}", t.name, t.len, t.shape),
                ));
            }
            if t.offset != expected {
                return Err(Error::format(base + t.offset, format!("tensor {} is not contiguous", t.name)));
            }
            expected += t.len;
        }
        if payload.len() as u64 != expected {
            return Err(Error::format(
                base + payload.len().min(expected as usize) as u64,
                format!("payload has {} bytes, manifest describes {expected}", payload.len()),
            ));
        }
        let read = |name: &str| -> Result<(&TensorEntry, Vec<f32>)> {
            let t = manifest
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::format(base, format!("missing tensor {name}")))?;
            let raw = &payload[t.offset as usize..(t.offset + t.len) as usize];
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Ok((t, data))
        };

        let net = Network::new(manifest.architecture.clone())?;
        let template = net.init_params::<f32>(0);
        let mut layers = Vec::with_capacity(template.layers.len());
        for (i, tl) in template.layers.iter().enumerate() {
            let Some(tl) = tl else {
                layers.push(None);
                continue;
            };
            let (wt, weight) = read(&format!("layers.{i}.weight"))?;
            let (bt, bias) = read(&format!("layers.{i}.bias"))?;
            if wt.shape != tl.weight_shape || bias.len() != tl.bias.len() {
                return Err(Error::format(
                    base + wt.offset.min(bt.offset),
                    format!("layer {i}: tensor shapes disagree with the architecture"),
                ));
            }
            layers.push(Some(LayerParams {
                weight,
                weight_shape: wt.shape.clone(),
                bias,
            }));
        }
        let mut codebooks = Vec::new();
        for e in &manifest.codebooks {
            let (t, data) = read(&e.tensor)?;
            if t.shape != [e.k, e.d] {
                return Err(Error::format(base + t.offset, format!("codebook {} shape mismatch", e.layer)));
            }
            codebooks.push((e.layer, Codebook::new(data, e.k, e.d)?));
        }
        Ok(Self {
            architecture: manifest.architecture,
            params: Params { layers },
            codebooks,
            config: manifest.config,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
