use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numkit::Matrix;

use super::mlp::{Activation, HeadLoss, Layer, Mlp};

pub const CHECKPOINT_VERSION: u64 = 1;

/// Provenance stored next to the parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
}

#[derive(Deserialize)]
struct RawLayer {
    rows: usize,
    cols: usize,
    activation: Activation,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Deserialize)]
struct RawCheckpoint {
    layers: Vec<RawLayer>,
    head_loss: HeadLoss,
    #[serde(default)]
    meta: CheckpointMeta,
}

fn push_numbers(out: &mut String, xs: &[f64]) {
    out.push('[');
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{x:.16e}").expect("write to string");
    }
    out.push(']');
}

/// Serialize a model. Every parameter is written with 17 significant digits,
/// which round-trips `f64` exactly.
pub fn checkpoint_to_string(model: &Mlp, meta: &CheckpointMeta) -> String {
    let mut out = String::new();
    write!(out, "{{\"version\":{CHECKPOINT_VERSION},\"layers\":[").expect("write to string");
    for (k, layer) in model.layers().iter().enumerate() {
        if k > 0 {
            out.push(',');
        }
        let act = serde_json::to_string(&layer.activation).expect("activation serializes");
        write!(
            out,
            "\n{{\"rows\":{},\"cols\":{},\"activation\":{act},\"weights\":",
            layer.weights.rows(),
            layer.weights.cols()
        )
        .expect("write to string");
        push_numbers(&mut out, layer.weights.as_slice());
        out.push_str(",\"bias\":");
        push_numbers(&mut out, &layer.bias);
        out.push('}');
    }
    let head = serde_json::to_string(&model.head_loss()).expect("head loss serializes");
    let meta = serde_json::to_string(meta).expect("meta serializes");
    write!(out, "],\n\"head_loss\":{head},\"meta\":{meta}}}\n").expect("write to string");
    out
}

/// Parse a checkpoint. The version is checked before anything else is read.
pub fn checkpoint_from_str(text: &str) -> Result<(Mlp, CheckpointMeta)> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let version = value
        .get("version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Parse {
            line: 1,
            column: 1,
            message: "missing integer field \"version\"".into(),
        })?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let raw: RawCheckpoint = serde_json::from_value(value).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let layers = raw
        .layers
        .into_iter()
        .map(|l| {
            let w = Matrix::new(l.rows, l.cols, l.weights)?;
            Layer::new(w, l.bias, l.activation)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((Mlp::new(layers, raw.head_loss)?, raw.meta))
}

pub fn save_checkpoint(model: &Mlp, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_to_string(model, meta)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Mlp, CheckpointMeta)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;

    fn model() -> Mlp {
        let mut rng = Rng::new(21, 0);
        let mut m = Mlp::glorot(
            &[3, 5, 2],
            &[Activation::Relu, Activation::Identity],
            HeadLoss::SoftmaxCrossEntropy,
            &mut rng,
        )
        .unwrap();
        for l in m.layers_mut() {
            for b in l.bias.iter_mut() {
                *b = rng.normal() / 3.0;
            }
        }
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let meta = CheckpointMeta {
            seed: Some(3),
            optimizer: Some("adam".into()),
            learning_rate: Some(0.02),
            ..Default::default()
        };
        let (back, meta2) = checkpoint_from_str(&checkpoint_to_string(&m, &meta)).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta2, meta);
        for (a, b) in back.parameters().iter().zip(m.parameters()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn awkward_values_round_trip() {
        let w = Matrix::new(1, 4, vec![0.1, 1.0 / 3.0, -2.2250738585072014e-308, 1.7e308]).unwrap();
        let m = Mlp::new(
            vec![Layer::new(w, vec![5e-324], Activation::Tanh).unwrap()],
            HeadLoss::Mse,
        )
        .unwrap();
        let (back, _) =
            checkpoint_from_str(&checkpoint_to_string(&m, &CheckpointMeta::default())).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let s = checkpoint_to_string(&model(), &CheckpointMeta::default());
        let cut = &s[..s.len() / 2];
        assert!(matches!(checkpoint_from_str(cut), Err(Error::Parse { .. })));
    }

    #[test]
    fn other_version_is_rejected() {
        let s = checkpoint_to_string(&model(), &CheckpointMeta::default())
            .replacen("\"version\":1", "\"version\":0", 1);
        assert!(matches!(
            checkpoint_from_str(&s),
            Err(Error::Version { found: 0, expected: 1 })
        ));
    }

    #[test]
    fn layout_fields_present() {
        let s = checkpoint_to_string(&model(), &CheckpointMeta::default());
        let v: Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["layers"][0]["rows"], 5);
        assert_eq!(v["layers"][0]["activation"], "relu");
        assert_eq!(v["head_loss"], "softmax-cross-entropy");
    }
}
