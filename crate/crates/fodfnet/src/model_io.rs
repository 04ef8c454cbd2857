//! Model files: a JSON manifest next to a raw little-endian parameter payload.

use std::path::{Path, PathBuf};

use fodfnet_core::models::{Architecture, LossWeights, Model, TrainConfig, ORDER};
use fodfnet_core::nn::{ParameterStore, Tensor};
use fodfnet_core::sh::BASIS_CONVENTION;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::files::{f32le_bytes, f64le_bytes, from_f32le, from_f64le, read_bytes, read_text, sha256_hex, to_json, write_bytes, Dtype};

pub const MODEL_FORMAT: &str = "fodfnet-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "model.json";
pub const PAYLOAD_FILE: &str = "model.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the payload.
    pub offset: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub format: String,
    pub format_version: u32,
    pub tool_version: String,
    pub architecture: Architecture,
    pub input_shape: Vec<usize>,
    pub output_shapes: OutputShapes,
    pub sh_order: usize,
    pub sh_convention: String,
    pub dtype: Dtype,
    pub byte_order: String,
    pub payload: String,
    pub payload_sha256: String,
    pub parameters: Vec<ParameterEntry>,
    pub seed: Option<u64>,
    pub loss_weights: Option<LossWeights>,
    pub train_config: Option<TrainConfig>,
    /// SHA-256 of the compact JSON encoding of `train_config`.
    pub train_config_sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputShapes {
    pub fodf_sh: usize,
    pub fractions: usize,
}

pub fn input_shape(arch: Architecture) -> Vec<usize> {
    match arch {
        Architecture::ResDnn => vec![45],
        Architecture::ResCnn => vec![3, 3, 3, 45],
    }
}

pub fn config_sha256(config: &TrainConfig) -> String {
    sha256_hex(serde_json::to_string(config).expect("serializable config").as_bytes())
}

/// Manifest text and payload bytes for `model`.
pub fn encode_model(model: &Model, config: Option<&TrainConfig>, dtype: Dtype) -> (String, Vec<u8>) {
    let params = model.params();
    let mut entries = Vec::with_capacity(params.len());
    let mut flat = Vec::with_capacity(params.n_coordinates());
    for slot in 0..params.len() {
        let t = params.value(slot);
        entries.push(ParameterEntry {
            name: params.name(slot).to_string(),
            shape: t.shape().to_vec(),
            offset: flat.len(),
            count: t.len(),
        });
        flat.extend_from_slice(t.data());
    }
    let payload = match dtype {
        Dtype::Float32 => f32le_bytes(&flat),
        Dtype::Float64 => f64le_bytes(&flat),
    };
    let manifest = ModelManifest {
        format: MODEL_FORMAT.into(),
        format_version: MODEL_FORMAT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        architecture: model.architecture(),
        input_shape: input_shape(model.architecture()),
        output_shapes: OutputShapes { fodf_sh: 45, fractions: 3 },
        sh_order: ORDER,
        sh_convention: BASIS_CONVENTION.into(),
        dtype,
        byte_order: "little".into(),
        payload: PAYLOAD_FILE.into(),
        payload_sha256: sha256_hex(&payload),
        parameters: entries,
        seed: config.map(|c| c.seed),
        loss_weights: config.map(|c| c.loss_weights),
        train_config: config.cloned(),
        train_config_sha256: config.map(config_sha256),
    };
    (to_json(&manifest), payload)
}

fn bad(detail: impl Into<String>) -> CliError {
    CliError::input("model_format", detail)
}

pub fn decode_model(manifest_text: &str, payload: &[u8]) -> CliResult<(Model, ModelManifest)> {
    let m: ModelManifest =
        serde_json::from_str(manifest_text).map_err(|e| bad(format!("manifest is not valid: {e}")))?;
    if m.format != MODEL_FORMAT {
        return Err(bad(format!("format is {:?}, expected {MODEL_FORMAT:?}", m.format)));
    }
    if m.format_version != MODEL_FORMAT_VERSION {
        return Err(bad(format!("format_version {} is not supported", m.format_version)));
    }
    if m.sh_convention != BASIS_CONVENTION || m.sh_order != ORDER {
        return Err(bad(format!(
            "model uses SH order {} convention {:?}; this build uses order {ORDER} {BASIS_CONVENTION:?}",
            m.sh_order, m.sh_convention
        )));
    }
    if m.byte_order != "little" {
        return Err(bad(format!("byte_order {:?} is not supported", m.byte_order)));
    }
    let digest = sha256_hex(payload);
    if digest != m.payload_sha256 {
        return Err(bad(format!("payload sha256 is {digest}, manifest says {}", m.payload_sha256)));
    }
    let n = payload.len() / m.dtype.size();
    if !payload.len().is_multiple_of(m.dtype.size()) {
        return Err(bad(format!("payload length {} is not a multiple of {}", payload.len(), m.dtype.size())));
    }
    let flat = match m.dtype {
        Dtype::Float32 => from_f32le(payload),
        Dtype::Float64 => from_f64le(payload),
    };
    let layout = m.architecture.layout();
    if layout.len() != m.parameters.len() {
        return Err(bad(format!(
            "{} parameter tensors listed, {} expected for {}",
            m.parameters.len(),
            layout.len(),
            m.architecture.name()
        )));
    }
    let mut store = ParameterStore::new();
    for (entry, (name, shape)) in m.parameters.iter().zip(&layout) {
        if &entry.name != name || &entry.shape != shape {
            return Err(bad(format!(
                "parameter `{}` {:?} does not match `{name}` {shape:?}",
                entry.name, entry.shape
            )));
        }
        let end = entry.offset + entry.count;
        if entry.count != shape.iter().product::<usize>() || end > n {
            return Err(bad(format!(
                "parameter `{}` spans elements {}..{end} of {n}",
                entry.name, entry.offset
            )));
        }
        let t = Tensor::new(shape.clone(), flat[entry.offset..end].to_vec()).map_err(CliError::from)?;
        store.add(name, t);
    }
    let model = Model::from_parameters(m.architecture, store).map_err(|e| bad(e.to_string()))?;
    Ok((model, m))
}

/// Writes `model.json` and `model.bin` into `dir`; returns their paths.
pub fn save_model(dir: &Path, model: &Model, config: Option<&TrainConfig>, dtype: Dtype) -> CliResult<Vec<PathBuf>> {
    let (manifest, payload) = encode_model(model, config, dtype);
    let (mp, pp) = (dir.join(MANIFEST_FILE), dir.join(PAYLOAD_FILE));
    write_bytes(&pp, &payload)?;
    write_bytes(&mp, manifest.as_bytes())?;
    Ok(vec![mp, pp])
}

/// Accepts either the model directory or its `model.json`.
pub fn load_model(path: &Path) -> CliResult<(Model, ModelManifest)> {
    let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let text = read_text(&manifest_path)?;
    let name: String = serde_json::from_str::<serde_json::Value>(&text)
        .ok()
        .and_then(|v| v.get("payload").and_then(|p| p.as_str()).map(String::from))
        .unwrap_or_else(|| PAYLOAD_FILE.into());
    if name.contains('/') || name.contains('\\') {
        return Err(bad(format!("payload name {name:?} must be a bare file name")));
    }
    let payload_path = manifest_path.parent().unwrap_or(Path::new(".")).join(name);
    let payload = read_bytes(&payload_path)?;
    decode_model(&text, &payload).map_err(|e| e.at(&manifest_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_is_exact_in_double_precision() {
        for arch in [Architecture::ResDnn, Architecture::ResCnn] {
            let model = Model::new(arch, 3);
            let cfg = TrainConfig::new(arch, 3);
            let (text, payload) = encode_model(&model, Some(&cfg), Dtype::Float64);
            let (back, manifest) = decode_model(&text, &payload).unwrap();
            assert_eq!(back.params().n_coordinates(), model.params().n_coordinates());
            for slot in 0..model.params().len() {
                assert_eq!(back.params().value(slot), model.params().value(slot));
            }
            assert_eq!(manifest.train_config.as_ref(), Some(&cfg));
            assert_eq!(manifest.input_shape, input_shape(arch));
        }
    }

    #[test]
    fn single_precision_payload_is_half_size() {
        let model = Model::new(Architecture::ResDnn, 1);
        let (text, payload) = encode_model(&model, None, Dtype::Float32);
        assert_eq!(payload.len(), 4 * model.params().n_coordinates());
        let (back, _) = decode_model(&text, &payload).unwrap();
        let a = model.params().value(0).data()[0];
        assert_eq!(back.params().value(0).data()[0], a as f32 as f64);
    }

    #[test]
    fn corrupted_payload_is_rejected() {
        let model = Model::new(Architecture::ResDnn, 1);
        let (text, mut payload) = encode_model(&model, None, Dtype::Float64);
        payload[10] ^= 1;
        let e = decode_model(&text, &payload).unwrap_err();
        assert_eq!(e.kind, "model_format");
        assert!(e.detail.contains("sha256"));
        let (_, payload) = encode_model(&model, None, Dtype::Float64);
        let wrong = text.replace("\"resdnn\"", "\"rescnn\"");
        assert!(decode_model(&wrong, &payload).is_err());
    }
}
