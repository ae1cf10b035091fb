//! Symmetric low-bit quantization.
//!
//! Weights are stored as integer codes on the zero-inclusive grid
//! `-(2^(bits-1)-1) ..= 2^(bits-1)-1` with an affine scale, so code 0 is
//! exactly weight 0. Activations use per-tensor quantize-dequantize with the
//! tensor's own absolute maximum as clip range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    #[default]
    Tensor,
    OutputChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantScheme {
    pub weight_bits: u8,
    /// `None` disables activation fake-quantization.
    pub act_bits: Option<u8>,
    pub symmetric: bool,
    pub per: Granularity,
}

impl Default for QuantScheme {
    fn default() -> Self {
        Self {
            weight_bits: 4,
            act_bits: Some(4),
            symmetric: true,
            per: Granularity::Tensor,
        }
    }
}

impl QuantScheme {
    pub fn validate(&self) -> Result<()> {
        check_bits(self.weight_bits)?;
        if let Some(b) = self.act_bits {
            check_bits(b)?;
        }
        if !self.symmetric {
            return Err(Error::Config("only symmetric quantization is supported".into()));
        }
        Ok(())
    }
}

pub fn check_bits(bits: u8) -> Result<()> {
    if (2..=8).contains(&bits) {
        Ok(())
    } else {
        Err(Error::Config(format!("bit width {bits} outside 2..=8")))
    }
}

/// Largest code magnitude for `bits`, e.g. 7 for 4-bit.
pub fn max_level(bits: u8) -> i32 {
    (1i32 << (bits - 1)) - 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub codes: Vec<i8>,
    /// One entry for per-tensor scaling, `shape[0]` entries for per-channel.
    pub scales: Vec<f64>,
    pub bits: u8,
    pub shape: Vec<usize>,
}

impl QuantizedTensor {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    fn scale_for(&self, idx: usize) -> f64 {
        if self.scales.len() == 1 {
            self.scales[0]
        } else {
            let per = self.shape.iter().product::<usize>() / self.scales.len();
            self.scales[idx / per]
        }
    }

    /// Largest representable magnitude; used as the full-scale weight when
    /// mapping to conductance.
    pub fn abs_max(&self) -> f64 {
        let top = self.scales.iter().cloned().fold(0.0, f64::max);
        top * max_level(self.bits) as f64
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        let n: usize = self.shape.iter().product();
        if n != self.codes.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {n} codes, found {}",
                self.shape,
                self.codes.len()
            )));
        }
        let channels = self.shape.first().copied().unwrap_or(1);
        if self.scales.len() != 1 && self.scales.len() != channels {
            return Err(Error::Shape(format!(
                "{} scales for {channels} output channels",
                self.scales.len()
            )));
        }
        if self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Range("quantization scales must be positive and finite".into()));
        }
        let q = max_level(self.bits);
        if let Some(c) = self.codes.iter().find(|c| (**c as i32).abs() > q) {
            return Err(Error::Range(format!("code {c} outside ±{q} for {}-bit", self.bits)));
        }
        Ok(())
    }
}

/// `max|w| / (2^(bits-1)-1)`, or 1 for an all-zero tensor.
pub fn calibrate_scale(w: &[f64], bits: u8) -> f64 {
    let m = w.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if m == 0.0 {
        1.0
    } else {
        m / max_level(bits) as f64
    }
}

/// Scales for each granularity unit; `shape[0]` is the output-channel axis.
pub fn calibrate_scales(w: &[f64], shape: &[usize], scheme: &QuantScheme) -> Vec<f64> {
    match scheme.per {
        Granularity::Tensor => vec![calibrate_scale(w, scheme.weight_bits)],
        Granularity::OutputChannel => {
            let channels = shape.first().copied().unwrap_or(1).max(1);
            let per = w.len() / channels;
            w.chunks(per.max(1))
                .map(|c| calibrate_scale(c, scheme.weight_bits))
                .collect()
        }
    }
}

/// Round half away from zero, then saturate.
pub fn quantize_value(w: f64, scale: f64, bits: u8) -> i8 {
    let q = max_level(bits) as f64;
    (w / scale).round().clamp(-q, q) as i8
}

pub fn quantize(w: &[f64], shape: &[usize], scales: &[f64], bits: u8) -> Result<QuantizedTensor> {
    check_bits(bits)?;
    if scales.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Domain("quantization scale must be > 0".into()));
    }
    let mut t = QuantizedTensor {
        codes: Vec::with_capacity(w.len()),
        scales: scales.to_vec(),
        bits,
        shape: shape.to_vec(),
    };
    t.validate_shape_only()?;
    for (i, &v) in w.iter().enumerate() {
        let s = t.scale_for(i);
        t.codes.push(quantize_value(v, s, bits));
    }
    Ok(t)
}

impl QuantizedTensor {
    fn validate_shape_only(&self) -> Result<()> {
        let channels = self.shape.first().copied().unwrap_or(1);
        if self.scales.len() != 1 && self.scales.len() != channels {
            return Err(Error::Shape(format!(
                "{} scales for {channels} output channels",
                self.scales.len()
            )));
        }
        Ok(())
    }
}

/// Calibrate and quantize in one step.
pub fn quantize_tensor(w: &[f64], shape: &[usize], scheme: &QuantScheme) -> Result<QuantizedTensor> {
    let scales = calibrate_scales(w, shape, scheme);
    quantize(w, shape, &scales, scheme.weight_bits)
}

pub fn dequantize(q: &QuantizedTensor) -> Vec<f64> {
    q.codes
        .iter()
        .enumerate()
        .map(|(i, &c)| c as f64 * q.scale_for(i))
        .collect()
}

/// Per-tensor symmetric quantize-dequantize of an activation tensor, in place.
pub fn fake_quant_in_place<T: Scalar>(x: &mut [T], bits: u8) {
    let m = x.iter().fold(T::zero(), |acc, v| acc.max(v.abs()));
    if m == T::zero() {
        return;
    }
    let q = T::from_f64(max_level(bits) as f64);
    let scale = m / q;
    for v in x.iter_mut() {
        *v = ((*v / scale).round().max(-q).min(q)) * scale;
    }
}

pub fn fake_quant_activation(x: &[f64], bits: u8) -> Vec<f64> {
    let mut out = x.to_vec();
    fake_quant_in_place(&mut out, bits);
    out
}
