//! The frozen quantized backbone and its checkpoint file.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic "DCBB" | version u32 = 1
//! manifest: u32 length + UTF-8 JSON {"model": ModelSpec, "quant": QuantScheme}
//! layer count u32, then per weight layer:
//!   name (u16 length + UTF-8) | ndim u8 | dims u32 × ndim | bits u8
//!   scales (u32 count + f64 × count) | codes (u32 count + i8 × count)
//!   bias (u32 count + f64 × count)
//! SHA-256 of all preceding bytes (32 bytes)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bytes::{ByteReader, ByteWriter};
use crate::drift::{inject_drift, ConductanceMap, DriftModel, DriftedWeights};
use crate::error::{Error, Result};
use crate::model::{LayerParams, LayerSpec, ModelSpec, ModelWeights};
use crate::quant::{dequantize, quantize_tensor, QuantScheme, QuantizedTensor};

const MAGIC: &[u8; 4] = b"DCBB";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub name: String,
    pub weight: QuantizedTensor,
    /// Digital, kept in full precision and never drifted.
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub spec: ModelSpec,
    pub scheme: QuantScheme,
    pub layers: Vec<QuantizedLayer>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    model: ModelSpec,
    quant: QuantScheme,
}

fn layer_name(index: usize, layer: &LayerSpec) -> String {
    match layer {
        LayerSpec::Conv2d { .. } => format!("conv{index}"),
        _ => format!("linear{index}"),
    }
}

impl Backbone {
    /// Post-training quantization of full-precision weights.
    pub fn quantize(spec: &ModelSpec, weights: &ModelWeights, scheme: QuantScheme) -> Result<Self> {
        scheme.validate()?;
        weights.check(spec)?;
        let layers = spec
            .weight_layers()
            .into_iter()
            .zip(&weights.layers)
            .map(|(i, p)| {
                let (o, k) = spec.layers[i].weight_dims().unwrap();
                Ok(QuantizedLayer {
                    name: layer_name(i, &spec.layers[i]),
                    weight: quantize_tensor(&p.weight, &[o, k], &scheme)?,
                    bias: p.bias.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: spec.clone(),
            scheme,
            layers,
        })
    }

    pub fn tensors(&self) -> Vec<&QuantizedTensor> {
        self.layers.iter().map(|l| &l.weight).collect()
    }

    /// Drift-free weights as programmed.
    pub fn dequantized(&self) -> ModelWeights {
        ModelWeights {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weight: dequantize(&l.weight),
                    bias: l.bias.clone(),
                })
                .collect(),
        }
    }

    pub fn inject(&self, t: f64, model: &DriftModel, map: &ConductanceMap, seed: u64) -> Result<DriftedWeights> {
        inject_drift(&self.tensors(), t, model, map, seed)
    }

    /// Drifted weights combined with the backbone's biases.
    pub fn with_drift(&self, d: &DriftedWeights) -> ModelWeights {
        ModelWeights {
            layers: self
                .layers
                .iter()
                .zip(&d.values)
                .map(|(l, w)| LayerParams {
                    weight: w.clone(),
                    bias: l.bias.clone(),
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.scheme.validate()?;
        let wl = self.spec.weight_layers();
        if wl.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "{} quantized layers for {} weight layers",
                self.layers.len(),
                wl.len()
            )));
        }
        for (i, l) in wl.iter().zip(&self.layers) {
            l.weight.validate()?;
            let (o, k) = self.spec.layers[*i].weight_dims().unwrap();
            if l.weight.shape != [o, k] || l.bias.len() != o {
                return Err(Error::Shape(format!(
                    "layer {}: shape {:?} / bias {} do not match {o}×{k}",
                    l.name,
                    l.weight.shape,
                    l.bias.len()
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        let manifest = serde_json::to_vec(&Manifest {
            model: self.spec.clone(),
            quant: self.scheme,
        })?;
        w.len_u32(manifest.len());
        w.bytes(&manifest);
        w.len_u32(self.layers.len());
        for l in &self.layers {
            w.str(&l.name);
            w.u8(l.weight.shape.len() as u8);
            for &d in &l.weight.shape {
                w.len_u32(d);
            }
            w.u8(l.weight.bits);
            w.f64s(&l.weight.scales);
            w.len_u32(l.weight.codes.len());
            w.bytes(&l.weight.codes.iter().map(|c| *c as u8).collect::<Vec<_>>());
            w.f64s(&l.bias);
        }
        Ok(w.finish())
    }

    pub fn from_bytes(data: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::open(data, path, MAGIC, VERSION)?;
        let n = r.len()?;
        let manifest: Manifest = serde_json::from_slice(r.take(n)?).map_err(|e| r.err(format!("manifest: {e}")))?;
        let count = r.len()?;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.str()?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let bits = r.u8()?;
            let scales = r.f64s()?;
            let nc = r.len()?;
            let codes = r.take(nc)?.iter().map(|b| *b as i8).collect();
            let bias = r.f64s()?;
            layers.push(QuantizedLayer {
                name,
                weight: QuantizedTensor {
                    codes,
                    scales,
                    bits,
                    shape,
                },
                bias,
            });
        }
        r.finish()?;
        let b = Self {
            spec: manifest.model,
            scheme: manifest.quant,
            layers,
        };
        b.validate().map_err(|e| Error::format(path, None, e.to_string()))?;
        Ok(b)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&data, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_toy_resnet, Shape};

    fn backbone() -> Backbone {
        let spec = build_toy_resnet(4, 1, 3, Shape::new(2, 8, 8)).unwrap();
        let w = ModelWeights::init(&spec, 3);
        Backbone::quantize(&spec, &w, QuantScheme::default()).unwrap()
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let b = backbone();
        let bytes = b.to_bytes().unwrap();
        let back = Backbone::from_bytes(&bytes, Path::new("m")).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupted_byte_is_detected() {
        let mut bytes = backbone().to_bytes().unwrap();
        bytes[100] ^= 1;
        let err = Backbone::from_bytes(&bytes, Path::new("model.ckpt")).unwrap_err();
        assert!(err.to_string().contains("model.ckpt"), "{err}");
        assert!(err.to_string().contains("checksum"));
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let bytes = backbone().to_bytes().unwrap();
        assert!(matches!(
            Backbone::from_bytes(&bytes[..20], Path::new("m")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn codes_live_on_the_grid() {
        let b = backbone();
        for l in &b.layers {
            assert!(l.weight.codes.iter().all(|c| c.abs() <= 7));
            assert!(l.weight.codes.iter().any(|c| c.abs() == 7));
        }
    }
}
