//! `FOLL1` model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"FOLL1" | version: u16 | header_len: u32 | header: JSON (header_len bytes)
//! | for each parameterized layer in spec order: weights f32[], bias f32[]
//! ```
//!
//! The header holds the layer specs, input shape, per-layer parameter
//! shapes, the training config, the seed and free-form metadata. Optimizer
//! moments are not stored; a loaded model starts with fresh Adam state.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{param_shapes, AdamState, LayerParams, LayerSpec, ModelParams, Network, Shape, TrainConfig};

pub const MAGIC: &[u8; 5] = b"FOLL1";
pub const MODEL_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("not a model file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported model file version {0}")]
    Version(u16),
    #[error("model file truncated in {0}")]
    Truncated(&'static str),
    #[error("model header: {0}")]
    Header(String),
    #[error("layer {layer}: {message}")]
    Shape { layer: String, message: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerShape {
    layer: String,
    weights: Vec<usize>,
    bias: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    specs: Vec<LayerSpec>,
    input_shape: Shape,
    shapes: Vec<LayerShape>,
    config: TrainConfig,
    seed: u64,
    #[serde(default)]
    metadata: serde_json::Value,
}

pub fn write_model<W: Write>(model: &ModelParams, mut out: W) -> Result<(), ModelFileError> {
    let net = &model.network;
    let shapes = net
        .params
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            p.as_ref().map(|p| LayerShape {
                layer: net.layer_name(i),
                weights: p.weight_shape.clone(),
                bias: p.bias.len(),
            })
        })
        .collect();
    let header = Header {
        specs: net.specs.clone(),
        input_shape: net.input_shape,
        shapes,
        config: model.config.clone(),
        seed: model.config.seed,
        metadata: model.metadata.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelFileError::Header(e.to_string()))?;
    out.write_all(MAGIC)?;
    out.write_all(&MODEL_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    for p in net.params.iter().flatten() {
        let mut buf = Vec::with_capacity(4 * p.len());
        for v in p.weights.iter().chain(&p.bias) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn save_model(model: &ModelParams, path: &Path) -> Result<(), ModelFileError> {
    let mut buf = Vec::new();
    write_model(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &'static str) -> Result<&'a [u8], ModelFileError> {
    if bytes.len() < n {
        return Err(ModelFileError::Truncated(what));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

/// Parses a complete model file. Nothing is returned unless every check
/// passes.
pub fn read_model<R: Read>(mut input: R) -> Result<ModelParams, ModelFileError> {
    let mut all = Vec::new();
    input.read_to_end(&mut all)?;
    let mut bytes = all.as_slice();
    if take(&mut bytes, MAGIC.len(), "magic").map_err(|_| ModelFileError::BadMagic)? != MAGIC {
        return Err(ModelFileError::BadMagic);
    }
    let version = u16::from_le_bytes(take(&mut bytes, 2, "version")?.try_into().expect("2 bytes"));
    if version != MODEL_VERSION {
        return Err(ModelFileError::Version(version));
    }
    let len = u32::from_le_bytes(take(&mut bytes, 4, "header length")?.try_into().expect("4 bytes")) as usize;
    let header: Header = serde_json::from_slice(take(&mut bytes, len, "header")?)
        .map_err(|e| ModelFileError::Header(e.to_string()))?;

    let expected = param_shapes(&header.specs, header.input_shape).map_err(|e| ModelFileError::Shape {
        layer: "specs".into(),
        message: e.to_string(),
    })?;
    let mut declared = header.shapes.iter();
    let mut params = Vec::with_capacity(header.specs.len());
    for (i, exp) in expected.into_iter().enumerate() {
        let name = format!("{}_{i}", header.specs[i].kind());
        let Some((weight_shape, bias_len)) = exp else {
            params.push(None);
            continue;
        };
        let shape_err = |message: String| ModelFileError::Shape {
            layer: name.clone(),
            message,
        };
        let decl = declared
            .next()
            .ok_or_else(|| shape_err("missing from header shape list".into()))?;
        if decl.layer != name || decl.weights != weight_shape || decl.bias != bias_len {
            return Err(shape_err(format!(
                "header declares {} {:?} + {}, specs imply {:?} + {bias_len}",
                decl.layer, decl.weights, decl.bias, weight_shape
            )));
        }
        let count: usize = weight_shape.iter().product();
        let need = 4 * (count + bias_len);
        if bytes.len() < need {
            return Err(shape_err(format!("needs {need} bytes of parameters, {} remain", bytes.len())));
        }
        let (blob, rest) = bytes.split_at(need);
        bytes = rest;
        let values: Vec<f32> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(shape_err("non-finite parameter".into()));
        }
        let (w, b) = values.split_at(count);
        params.push(Some(LayerParams {
            weights: w.to_vec(),
            bias: b.to_vec(),
            weight_shape,
        }));
    }
    if declared.next().is_some() {
        return Err(ModelFileError::Shape {
            layer: "header".into(),
            message: "more shape entries than parameterized layers".into(),
        });
    }
    if !bytes.is_empty() {
        return Err(ModelFileError::Shape {
            layer: "trailer".into(),
            message: format!("{} unexpected bytes after the last layer", bytes.len()),
        });
    }
    let mut config = header.config;
    config.seed = header.seed;
    let network = Network {
        specs: header.specs,
        input_shape: header.input_shape,
        params,
    };
    let adam = AdamState::for_network(&network);
    Ok(ModelParams {
        network,
        adam,
        config,
        metadata: header.metadata,
    })
}

pub fn load_model(path: &Path) -> Result<ModelParams, ModelFileError> {
    read_model(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model() -> ModelParams {
        let cfg = TrainConfig {
            input_size: 8,
            conv_filters: vec![2, 3],
            dense_hidden: 5,
            ..TrainConfig::default()
        };
        ModelParams::init(&cfg).unwrap()
    }

    fn bytes_of(m: &ModelParams) -> Vec<u8> {
        let mut buf = Vec::new();
        write_model(m, &mut buf).unwrap();
        buf
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut m = small_model();
        m.metadata = serde_json::json!({"denoiser": "nlm"});
        let first = bytes_of(&m);
        assert_eq!(&first[..5], b"FOLL1");
        assert_eq!(u16::from_le_bytes([first[5], first[6]]), 1);
        let loaded = read_model(first.as_slice()).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(bytes_of(&loaded), first);
    }

    #[test]
    fn truncated_files_fail_cleanly() {
        let full = bytes_of(&small_model());
        for cut in [0, 3, 6, 9, 40, full.len() - 1] {
            assert!(read_model(&full[..cut]).is_err(), "cut at {cut}");
        }
        let err = read_model(&full[..full.len() - 4]).unwrap_err();
        assert!(err.to_string().contains("dense_"), "{err}");
    }

    #[test]
    fn bad_magic_and_version() {
        let mut full = bytes_of(&small_model());
        full[0] = b'X';
        assert!(matches!(read_model(full.as_slice()), Err(ModelFileError::BadMagic)));
        full[0] = b'F';
        full[5] = 9;
        assert!(matches!(read_model(full.as_slice()), Err(ModelFileError::Version(9))));
    }

    #[test]
    fn header_shape_mismatch_names_the_layer() {
        let m = small_model();
        let full = bytes_of(&m);
        let len = u32::from_le_bytes(full[7..11].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&full[11..11 + len]).unwrap();
        let tampered = header.replacen("\"weights\":[3,3,3,2]", "\"weights\":[3,3,3,4]", 1);
        assert_ne!(tampered, header);
        let mut out = full[..7].to_vec();
        out.extend_from_slice(&(tampered.len() as u32).to_le_bytes());
        out.extend_from_slice(tampered.as_bytes());
        out.extend_from_slice(&full[11 + len..]);
        let err = read_model(out.as_slice()).unwrap_err();
        assert!(matches!(&err, ModelFileError::Shape { layer, .. } if layer == "conv2d_0"), "{err}");

        let mut extra = full.clone();
        extra.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(read_model(extra.as_slice()), Err(ModelFileError::Shape { .. })));
    }
}
