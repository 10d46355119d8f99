//! Model file format.
//!
//! ```text
//! magic      5 bytes   "CXRM1"
//! header_len u32 LE
//! header     header_len bytes of UTF-8 JSON (ModelHeader)
//! payload    f32 LE values, tensors concatenated in header order
//! ```
//!
//! The header carries the architecture, the preprocessing fingerprint, the
//! class table and the name/shape of every stored tensor (parameters and
//! batch-norm running statistics, in layer order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{class_names, ModelError, ModelSpec, Result};
use crate::data::Preprocessing;
use crate::nn::{LayerSpec, Network};

pub const MODEL_MAGIC: &[u8; 5] = b"CXRM1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub format_version: u32,
    pub model: ModelSpec,
    pub preprocessing: Preprocessing,
    pub classes: Vec<String>,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: usize,
}

fn entries(net: &Network<f32>) -> Vec<(TensorEntry, &[f32])> {
    net.layers()
        .iter()
        .enumerate()
        .flat_map(|(i, layer)| {
            let tag = net.specs()[i].tag();
            layer.state().into_iter().map(move |(suffix, t)| {
                (
                    TensorEntry {
                        name: format!("{i}.{tag}.{suffix}"),
                        shape: t.shape().to_vec(),
                    },
                    t.data(),
                )
            })
        })
        .collect()
}

/// Serializes a network built from `spec`.
pub fn encode_model(spec: &ModelSpec, net: &Network<f32>) -> Result<Vec<u8>> {
    if net.specs() != spec.layers.as_slice() || net.input_shape() != spec.input_shape() {
        return Err(ModelError::Header("network does not match its model spec".into()));
    }
    let tensors = entries(net);
    let payload_bytes = tensors.iter().map(|(_, d)| d.len() * 4).sum();
    let header = ModelHeader {
        format_version: FORMAT_VERSION,
        model: spec.clone(),
        preprocessing: spec.preprocessing(),
        classes: class_names(),
        tensors: tensors.iter().map(|(e, _)| e.clone()).collect(),
        payload_bytes,
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| ModelError::Header(e.to_string()))?;
    let mut out = Vec::with_capacity(9 + header_json.len() + payload_bytes);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, data) in &tensors {
        for v in *data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Checks that every layer object in the raw header names a known tag, so an
/// unknown layer is reported as such rather than as a generic parse failure.
fn check_layer_tags(raw: &serde_json::Value) -> Result<()> {
    let layers = raw
        .pointer("/model/layers")
        .and_then(|v| v.as_array())
        .ok_or_else(|| ModelError::Header("missing model.layers".into()))?;
    for layer in layers {
        let tag = layer.get("type").and_then(|t| t.as_str()).unwrap_or("<missing>");
        if !LayerSpec::TAGS.contains(&tag) {
            return Err(ModelError::UnknownLayer(tag.to_string()));
        }
    }
    Ok(())
}

/// Parses a model file image into its header and a ready network.
pub fn decode_model(bytes: &[u8]) -> Result<(ModelHeader, Network<f32>)> {
    if bytes.len() < MODEL_MAGIC.len() || &bytes[..4] != b"CXRM" {
        return Err(ModelError::BadMagic);
    }
    if bytes[4] != MODEL_MAGIC[4] {
        return Err(ModelError::Version {
            found: String::from_utf8_lossy(&bytes[4..5]).into_owned(),
            expected: FORMAT_VERSION,
        });
    }
    if bytes.len() < 9 {
        return Err(ModelError::Truncated {
            expected: 9,
            actual: bytes.len(),
        });
    }
    let header_len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let header_end = 9 + header_len;
    if bytes.len() < header_end {
        return Err(ModelError::Truncated {
            expected: header_end,
            actual: bytes.len(),
        });
    }
    let raw: serde_json::Value =
        serde_json::from_slice(&bytes[9..header_end]).map_err(|e| ModelError::Header(e.to_string()))?;
    check_layer_tags(&raw)?;
    let header: ModelHeader = serde_json::from_value(raw).map_err(|e| ModelError::Header(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(ModelError::Version {
            found: header.format_version.to_string(),
            expected: FORMAT_VERSION,
        });
    }
    if header.classes != class_names() {
        return Err(ModelError::Header(format!("unexpected class table {:?}", header.classes)));
    }
    let spec = &header.model;
    if header.preprocessing != spec.preprocessing() {
        return Err(ModelError::Fingerprint {
            expected: spec.preprocessing().describe(),
            found: header.preprocessing.describe(),
        });
    }
    let computed: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>() * 4).sum();
    if computed != header.payload_bytes {
        return Err(ModelError::LengthMismatch {
            declared: header.payload_bytes,
            computed,
        });
    }
    let expected_total = header_end + header.payload_bytes;
    if bytes.len() != expected_total {
        return Err(ModelError::Truncated {
            expected: expected_total,
            actual: bytes.len(),
        });
    }

    let mut net = Network::<f32>::new(&spec.layers, &spec.input_shape())?;
    let wanted: Vec<TensorEntry> = entries(&net).into_iter().map(|(e, _)| e).collect();
    if wanted != header.tensors {
        return Err(ModelError::Header(
            "tensor table does not match the declared architecture".into(),
        ));
    }
    let mut cursor = header_end;
    for layer in net.layers_mut() {
        for tensor in layer.state_mut() {
            for v in tensor.data_mut() {
                *v = f32::from_le_bytes(bytes[cursor..cursor + 4].try_into().expect("4 bytes"));
                cursor += 4;
            }
        }
    }
    Ok((header, net))
}

pub fn save_model(spec: &ModelSpec, net: &Network<f32>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_model(spec, net)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(ModelHeader, Network<f32>)> {
    decode_model(&fs::read(path)?)
}

/// Loads a model and refuses it unless its preprocessing fingerprint equals
/// `expected`.
pub fn load_model_expecting(
    path: impl AsRef<Path>,
    expected: &Preprocessing,
) -> Result<(ModelHeader, Network<f32>)> {
    let (header, net) = load_model(path)?;
    if &header.preprocessing != expected {
        return Err(ModelError::Fingerprint {
            expected: expected.describe(),
            found: header.preprocessing.describe(),
        });
    }
    Ok((header, net))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_custom_cnn;
    use crate::nn::Mode;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trained_like() -> (ModelSpec, Network<f32>) {
        let spec = crate::models::ModelSpec::with_side(crate::models::Arch::CustomCnn, 1, 0.25, 30).unwrap();
        let mut net = spec.network(4).unwrap();
        // Move the running statistics away from their defaults.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::from_fn(&[4, 1, 30, 30], |_| rng.random_range(0.0..1.0)).unwrap();
        net.forward(&x, Mode::Train).unwrap();
        (spec, net)
    }

    #[test]
    fn roundtrip_predictions_are_bit_identical() {
        let (spec, net) = trained_like();
        let bytes = encode_model(&spec, &net).unwrap();
        let (header, loaded) = decode_model(&bytes).unwrap();
        assert_eq!(header.model, spec);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_fn(&[3, 1, 30, 30], |_| rng.random_range(0.0..1.0)).unwrap();
        let a = net.predict(&x).unwrap();
        let b = loaded.predict(&x).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(encode_model(&spec, &loaded).unwrap(), bytes);
    }

    #[test]
    fn truncation_reports_byte_counts() {
        let (spec, net) = trained_like();
        let bytes = encode_model(&spec, &net).unwrap();
        let cut = &bytes[..bytes.len() - 10];
        match decode_model(cut) {
            Err(ModelError::Truncated { expected, actual }) => {
                assert_eq!(expected, bytes.len());
                assert_eq!(actual, bytes.len() - 10);
                let msg = ModelError::Truncated { expected, actual }.to_string();
                assert!(msg.contains(&expected.to_string()) && msg.contains(&actual.to_string()));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn rewrite_header(bytes: &[u8], edit: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
        let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[9..9 + len]).unwrap();
        edit(&mut header);
        let new = serde_json::to_vec(&header).unwrap();
        let mut out = bytes[..5].to_vec();
        out.extend_from_slice(&(new.len() as u32).to_le_bytes());
        out.extend_from_slice(&new);
        out.extend_from_slice(&bytes[9 + len..]);
        out
    }

    #[test]
    fn format_violations() {
        let (spec, net) = trained_like();
        let bytes = encode_model(&spec, &net).unwrap();
        assert!(matches!(decode_model(b"PNG\x89 garbage"), Err(ModelError::BadMagic)));
        let mut v2 = bytes.clone();
        v2[4] = b'2';
        assert!(matches!(decode_model(&v2), Err(ModelError::Version { .. })));

        let bad_len = rewrite_header(&bytes, |h| h["payload_bytes"] = serde_json::json!(12));
        assert!(matches!(decode_model(&bad_len), Err(ModelError::LengthMismatch { .. })));

        let unknown = rewrite_header(&bytes, |h| h["model"]["layers"][1]["type"] = serde_json::json!("dropout"));
        match decode_model(&unknown) {
            Err(ModelError::UnknownLayer(tag)) => assert_eq!(tag, "dropout"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fingerprint_mismatch_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let spec = build_custom_cnn(1, 0.125).unwrap();
        let net = spec.network(1).unwrap();
        let path = dir.path().join("m.cxrm");
        save_model(&spec, &net, &path).unwrap();
        assert!(load_model_expecting(&path, &Preprocessing::new(1)).is_ok());
        assert!(matches!(
            load_model_expecting(&path, &Preprocessing::new(3)),
            Err(ModelError::Fingerprint { .. })
        ));

        let bytes = fs::read(&path).unwrap();
        let altered = rewrite_header(&bytes, |h| h["preprocessing"]["scale"] = serde_json::json!("1/65535"));
        assert!(matches!(decode_model(&altered), Err(ModelError::Fingerprint { .. })));
    }
}
