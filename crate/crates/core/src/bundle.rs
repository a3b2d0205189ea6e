//! Two-file checkpoint bundle and seeded random initialisation.
//!
//! A bundle is a directory holding:
//!
//! * `manifest.json`: `{ format_version, config, tensors: [{ name, dtype, shape, offset, length }] }`
//! * `data.bin`: raw little-endian f32 payload. Each tensor starts at a
//!   64-byte-aligned offset; gaps are zero-filled.
//!
//! Tensor names, in canonical order:
//!
//! ```text
//! embedding                       (vocab, d_model)
//! layers.{i}.input_norm.weight    (d_model)
//! layers.{i}.in_proj.weight       (d_model, d_inner + conv_dim + H)   [z | xBC | dt]
//! layers.{i}.conv1d.weight        (conv_dim, k)
//! layers.{i}.conv1d.bias          (conv_dim)
//! layers.{i}.dt_bias              (H)
//! layers.{i}.A_log                (H)
//! layers.{i}.D                    (H)
//! layers.{i}.norm.weight          (d_inner)
//! layers.{i}.out_proj.weight      (d_inner, d_model)
//! final_norm.weight               (d_model)
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::model::{param_shapes, LayerParams, ModelParams};
use crate::rng::SplitMix64;
use crate::tensor::{numel, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const ALIGN: u64 = 64;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "data.bin";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed manifest: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("unsupported bundle format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("bundle config is invalid: {0}")]
    Config(String),

    #[error("missing tensor {name}")]
    MissingTensor { name: String },

    #[error("tensor {name} is listed more than once")]
    DuplicateTensor { name: String },

    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("tensor {name}: unsupported dtype {dtype:?}")]
    Dtype { name: String, dtype: String },

    #[error("tensor {name}: {detail}")]
    Layout { name: String, detail: String },

    #[error("tensor {name}: bytes {start}..{end} run past the {payload} byte payload")]
    Truncated {
        name: String,
        start: u64,
        end: u64,
        payload: u64,
    },

    #[error("tensor {name} contains non-finite values")]
    NonFinite { name: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct LoadedBundle {
    pub params: ModelParams<f32>,
    pub config: ModelConfig,
    /// Non-fatal findings, such as unrecognised tensors.
    pub warnings: Vec<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BundleError + '_ {
    move |source| BundleError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn align_up(v: u64) -> u64 {
    v.div_ceil(ALIGN) * ALIGN
}

/// Manifest and payload bytes for `params`, without touching the filesystem.
pub fn encode_bundle(params: &ModelParams<f32>, cfg: &ModelConfig) -> Result<(BundleManifest, Vec<u8>)> {
    params.validate(cfg)?;
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in params.named_tensors() {
        let offset = align_up(payload.len() as u64);
        payload.resize(offset as usize, 0);
        payload.extend(t.to_le_bytes());
        tensors.push(TensorEntry {
            name,
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset,
            length: (t.len() * 4) as u64,
        });
    }
    Ok((
        BundleManifest {
            format_version: FORMAT_VERSION,
            config: cfg.clone(),
            tensors,
        },
        payload,
    ))
}

/// Write `manifest.json` and `data.bin` into `dir`, creating it if needed.
pub fn save_bundle(params: &ModelParams<f32>, cfg: &ModelConfig, dir: &Path) -> Result<BundleManifest> {
    let (manifest, payload) = encode_bundle(params, cfg)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, json + "\n").map_err(io_err(&mpath))?;
    let ppath = dir.join(PAYLOAD_FILE);
    fs::write(&ppath, payload).map_err(io_err(&ppath))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<BundleManifest, BundleError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|source| BundleError::Json { path, source })
}

/// Check the manifest against its own config and the payload length.
/// Returns the entries for canonical names in canonical order, plus warnings.
fn check_layout(manifest: &BundleManifest, payload_len: u64) -> Result<(Vec<&TensorEntry>, Vec<String>), BundleError> {
    if manifest.format_version != FORMAT_VERSION {
        return Err(BundleError::Version {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    manifest
        .config
        .validate()
        .map_err(|e| BundleError::Config(e.to_string()))?;

    let mut by_name: HashMap<&str, &TensorEntry> = HashMap::new();
    let mut prev_end = 0u64;
    for e in &manifest.tensors {
        if by_name.insert(&e.name, e).is_some() {
            return Err(BundleError::DuplicateTensor { name: e.name.clone() });
        }
        let layout = |detail: String| BundleError::Layout {
            name: e.name.clone(),
            detail,
        };
        if e.dtype != "f32" {
            return Err(BundleError::Dtype {
                name: e.name.clone(),
                dtype: e.dtype.clone(),
            });
        }
        if e.offset % ALIGN != 0 {
            return Err(layout(format!("offset {} is not {ALIGN}-byte aligned", e.offset)));
        }
        if e.offset < prev_end {
            return Err(layout(format!(
                "offset {} overlaps or precedes the previous tensor ending at {prev_end}",
                e.offset
            )));
        }
        let expect_len = 4 * numel(&e.shape) as u64;
        if e.length != expect_len {
            return Err(layout(format!(
                "length {} does not match 4 x {:?} = {expect_len}",
                e.length, e.shape
            )));
        }
        let end = e.offset + e.length;
        if end > payload_len {
            return Err(BundleError::Truncated {
                name: e.name.clone(),
                start: e.offset,
                end,
                payload: payload_len,
            });
        }
        prev_end = end;
    }

    let mut ordered = Vec::new();
    for (name, shape) in param_shapes(&manifest.config) {
        let e = by_name
            .remove(name.as_str())
            .ok_or_else(|| BundleError::MissingTensor { name: name.clone() })?;
        if e.shape != shape {
            return Err(BundleError::Shape {
                name,
                expected: shape,
                found: e.shape.clone(),
            });
        }
        ordered.push(e);
    }
    let mut extra: Vec<&str> = by_name.into_keys().collect();
    extra.sort_unstable();
    let warnings = extra
        .into_iter()
        .map(|name| format!("ignoring unknown tensor {name}"))
        .collect();
    Ok((ordered, warnings))
}

/// Decode a bundle from its manifest and payload bytes.
pub fn decode_bundle(manifest: &BundleManifest, payload: &[u8]) -> Result<LoadedBundle, BundleError> {
    let (entries, warnings) = check_layout(manifest, payload.len() as u64)?;
    let mut tensors = Vec::with_capacity(entries.len());
    for e in entries {
        let bytes = &payload[e.offset as usize..(e.offset + e.length) as usize];
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(BundleError::NonFinite { name: e.name.clone() });
        }
        tensors.push(Tensor::new(e.shape.clone(), data).expect("length checked"));
    }
    let cfg = manifest.config.clone();
    let params = assemble(&cfg, tensors);
    Ok(LoadedBundle {
        params,
        config: cfg,
        warnings,
    })
}

pub fn load_bundle(dir: &Path) -> Result<LoadedBundle, BundleError> {
    let manifest = read_manifest(dir)?;
    let ppath = dir.join(PAYLOAD_FILE);
    let payload = fs::read(&ppath).map_err(io_err(&ppath))?;
    decode_bundle(&manifest, &payload)
}

/// Build params from tensors in canonical order.
fn assemble<T: crate::tensor::Scalar>(cfg: &ModelConfig, tensors: Vec<Tensor<T>>) -> ModelParams<T> {
    let mut it = tensors.into_iter();
    let mut next = || it.next().expect("one tensor per canonical name");
    let embedding = next();
    let layers = (0..cfg.n_layers)
        .map(|_| LayerParams {
            input_norm_w: next(),
            w_in: next(),
            conv_w: next(),
            conv_b: next(),
            dt_bias: next(),
            a_log: next(),
            d: next(),
            norm_w: next(),
            w_out: next(),
        })
        .collect();
    let final_norm_w = next();
    ModelParams {
        embedding,
        layers,
        final_norm_w,
    }
}

/// `softplus⁻¹(d) = d + ln(1 - e^{-d})`, stable for small `d`.
pub fn inverse_softplus(d: f64) -> f64 {
    d + (-(-d).exp_m1()).ln()
}

pub const INIT_STD: f64 = 0.02;
pub const A_INIT_RANGE: (f64, f64) = (1.0, 16.0);
pub const DT_INIT_RANGE: (f64, f64) = (1e-3, 1e-1);

/// Deterministic parameters for `cfg` from a single SplitMix64 stream.
///
/// Tensors are drawn in canonical order, elements row-major:
///
/// | tensor                         | distribution                         |
/// |--------------------------------|--------------------------------------|
/// | embedding, in_proj, out_proj   | N(0, 0.02²)                          |
/// | conv1d weight and bias         | U(-1/√k, 1/√k)                       |
/// | dt_bias                        | softplus⁻¹(d), d ~ U[1e-3, 1e-1]     |
/// | A_log                          | ln(u), u ~ U[1, 16]                  |
/// | D                              | N(0, 1)                              |
/// | norm weights                   | 1 (no draws)                         |
///
/// Normals use two uniforms each (see [`SplitMix64::normal`]); values are
/// drawn in f64 and rounded to f32.
pub fn random_init(cfg: &ModelConfig, seed: u64) -> ModelParams<f32> {
    let mut rng = SplitMix64::new(seed);
    let conv_bound = 1.0 / (cfg.conv_kernel as f64).sqrt();
    let tensors = param_shapes(cfg)
        .into_iter()
        .map(|(name, shape)| {
            let len = numel(&shape);
            let suffix = name.rsplit_once("layers.").map_or(name.as_str(), |(_, s)| {
                s.split_once('.').map_or(s, |(_, rest)| rest)
            });
            let mut draw = |f: &mut dyn FnMut(&mut SplitMix64) -> f64| -> Vec<f32> {
                (0..len).map(|_| f(&mut rng) as f32).collect()
            };
            let data = match suffix {
                "embedding" | "in_proj.weight" | "out_proj.weight" => {
                    draw(&mut |r| INIT_STD * r.normal())
                }
                "conv1d.weight" | "conv1d.bias" => draw(&mut |r| r.uniform_in(-conv_bound, conv_bound)),
                "dt_bias" => draw(&mut |r| inverse_softplus(r.uniform_in(DT_INIT_RANGE.0, DT_INIT_RANGE.1))),
                "A_log" => draw(&mut |r| r.uniform_in(A_INIT_RANGE.0, A_INIT_RANGE.1).ln()),
                "D" => draw(&mut |r| r.normal()),
                _ => vec![1.0; len],
            };
            Tensor::new(shape, data).expect("sized")
        })
        .collect();
    assemble(cfg, tensors)
}
