//! JSON checkpoint format for a single network.
//!
//! Weights and biases are written as decimal strings with 17 significant
//! digits, which is enough to round-trip every `f64` exactly.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::mlp::{HiddenActivation, Mlp, OutputActivation};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpDocument {
    pub layer_dims: Vec<usize>,
    pub hidden_act: HiddenActivation,
    pub out_act: OutputActivation,
    pub weights: Vec<Vec<String>>,
    pub biases: Vec<Vec<String>>,
}

pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn parse_f64(s: &str) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| Error::Parse(format!("not a decimal number: {s:?}")))?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("checkpoint entry {s:?}")));
    }
    Ok(v)
}

impl MlpDocument {
    pub fn from_params(params: &Mlp) -> Self {
        let fmt = |v: &[f64]| v.iter().map(|&x| format_f64(x)).collect::<Vec<_>>();
        MlpDocument {
            layer_dims: params.layer_dims().to_vec(),
            hidden_act: params.hidden_act(),
            out_act: params.out_act(),
            weights: params.weights().iter().map(|w| fmt(w.as_slice())).collect(),
            biases: params.biases().iter().map(|b| fmt(b)).collect(),
        }
    }

    pub fn to_params(&self) -> Result<Mlp> {
        let dims = &self.layer_dims;
        if dims.len() < 2 {
            return Err(Error::Shape(format!("layer_dims {dims:?} too short")));
        }
        if self.weights.len() != dims.len() - 1 {
            return Err(Error::Shape(format!(
                "{} weight blocks for layer_dims {dims:?}",
                self.weights.len()
            )));
        }
        let parse_all = |v: &[String]| v.iter().map(|s| parse_f64(s)).collect::<Result<Vec<_>>>();
        let mut weights = Vec::with_capacity(self.weights.len());
        for (i, w) in self.weights.iter().enumerate() {
            let values = parse_all(w)?;
            weights.push(
                Matrix::from_vec(dims[i + 1], dims[i], values)
                    .map_err(|e| Error::Shape(format!("layer {i}: {e}")))?,
            );
        }
        let biases = self
            .biases
            .iter()
            .map(|b| parse_all(b))
            .collect::<Result<Vec<_>>>()?;
        Mlp::from_parts(dims.clone(), weights, biases, self.hidden_act, self.out_act)
    }
}

pub fn save_params(params: &Mlp) -> String {
    serde_json::to_string(&MlpDocument::from_params(params)).expect("plain data serializes")
}

pub fn load_params(document: &str) -> Result<Mlp> {
    let doc: MlpDocument =
        serde_json::from_str(document).map_err(|e| Error::Parse(e.to_string()))?;
    doc.to_params()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> Mlp {
        Mlp::new(&[4, 8, 1], HiddenActivation::Tanh, OutputActivation::Sigmoid, 11).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = net();
        let doc = save_params(&p);
        let q = load_params(&doc).unwrap();
        let bits = |m: &Mlp| m.flat_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p), bits(&q));
        assert_eq!(save_params(&q), doc);
    }

    #[test]
    fn declares_layer_dims() {
        let doc = save_params(&net());
        assert!(doc.contains(r#""layer_dims":[4,8,1]"#));
        assert!(doc.contains(r#""out_act":"sigmoid""#));
    }

    #[test]
    fn truncated_document_fails() {
        let doc = save_params(&net());
        assert!(matches!(
            load_params(&doc[..doc.len() / 2]),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn shape_mismatch_fails() {
        let mut doc = MlpDocument::from_params(&net());
        doc.layer_dims = vec![4, 7, 1];
        assert!(doc.to_params().is_err());
        let mut doc = MlpDocument::from_params(&net());
        doc.biases[0].pop();
        assert!(doc.to_params().is_err());
    }

    #[test]
    fn awkward_values_round_trip() {
        for v in [f64::MIN_POSITIVE, 1.0 / 3.0, -0.0, 5e-324, 1.7976931348623157e308, 0.1] {
            assert_eq!(parse_f64(&format_f64(v)).unwrap().to_bits(), v.to_bits());
        }
    }
}
