//! Low-rank compensation branches.
//!
//! VeRA+ keeps two random matrices `A_max (r × d_max_in)` and
//! `B_max (d_max_out × r)` frozen for the whole network and every drift level.
//! Layer `i` uses the first `C_in` columns of `A_max` and the first `C_out`
//! rows of `B_max`; the only drift-specific parameters are a pair of scaling
//! vectors per layer:
//!
//! ```text
//! Δy = b ⊙ (B_R (d ⊙ (A_R x)))
//! ```
//!
//! Convolutions get this correction in 1×1 form, evaluated at the centre tap of
//! every output window. LoRA and VeRA are implemented in their K×K forms for
//! comparison.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedProjections {
    pub rank: usize,
    pub d_max_in: usize,
    pub d_max_out: usize,
    pub seed: u64,
    /// Row-major `rank × d_max_in`.
    pub a_max: Vec<f64>,
    /// Row-major `d_max_out × rank`.
    pub b_max: Vec<f64>,
}

/// Uniform entries with variance `1/d_max_in` for `A_max` and `1/r` for `B_max`.
pub fn init_shared_projections(rank: usize, d_max_in: usize, d_max_out: usize, seed: u64) -> Result<SharedProjections> {
    if rank == 0 || d_max_in == 0 || d_max_out == 0 {
        return Err(Error::Config(format!(
            "projection dims must be positive (r={rank}, d_in={d_max_in}, d_out={d_max_out})"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let a_lim = (3.0 / d_max_in as f64).sqrt();
    let b_lim = (3.0 / rank as f64).sqrt();
    let a_max = (0..rank * d_max_in).map(|_| rng.random_range(-a_lim..a_lim)).collect();
    let b_max = (0..d_max_out * rank).map(|_| rng.random_range(-b_lim..b_lim)).collect();
    Ok(SharedProjections {
        rank,
        d_max_in,
        d_max_out,
        seed,
        a_max,
        b_max,
    })
}

/// Borrowed prefix slices `A_R^(i)`, `B_R^(i)` for one layer.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionSlice<'a> {
    pub rank: usize,
    pub c_in: usize,
    pub c_out: usize,
    /// `A_max` storage; row `k` of the slice is `a[k*a_stride .. k*a_stride + c_in]`.
    pub a: &'a [f64],
    pub a_stride: usize,
    /// Contiguous `c_out × rank`.
    pub b: &'a [f64],
}

impl ProjectionSlice<'_> {
    pub fn a_at(&self, row: usize, col: usize) -> f64 {
        self.a[row * self.a_stride + col]
    }

    pub fn b_at(&self, row: usize, col: usize) -> f64 {
        self.b[row * self.rank + col]
    }

    /// Dense copy of `A_R^(i)` as `rank × c_in`.
    pub fn a_dense(&self) -> Vec<f64> {
        (0..self.rank)
            .flat_map(|k| self.a[k * self.a_stride..k * self.a_stride + self.c_in].iter().copied())
            .collect()
    }
}

impl SharedProjections {
    pub fn slice(&self, c_in: usize, c_out: usize) -> Result<ProjectionSlice<'_>> {
        if c_in > self.d_max_in || c_out > self.d_max_out || c_in == 0 || c_out == 0 {
            return Err(Error::Config(format!(
                "layer dims ({c_in} → {c_out}) exceed shared projections ({} → {})",
                self.d_max_in, self.d_max_out
            )));
        }
        Ok(ProjectionSlice {
            rank: self.rank,
            c_in,
            c_out,
            a: &self.a_max,
            a_stride: self.d_max_in,
            b: &self.b_max[..c_out * self.rank],
        })
    }
}

/// Per-layer scaling vectors: `d_vec` has length `r`, `b_vec` length `C_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerVectors {
    pub d_vec: Vec<f64>,
    pub b_vec: Vec<f64>,
}

pub const D_INIT: f64 = 0.1;

impl LayerVectors {
    /// `d = 0.1`, `b = 0`: the branch starts as the zero function.
    pub fn initial(rank: usize, c_out: usize) -> Self {
        Self {
            d_vec: vec![D_INIT; rank],
            b_vec: vec![0.0; c_out],
        }
    }

    fn check(&self, slice: &ProjectionSlice<'_>) -> Result<()> {
        if self.d_vec.len() != slice.rank || self.b_vec.len() != slice.c_out {
            return Err(Error::Shape(format!(
                "vectors (d: {}, b: {}) do not fit rank {} / C_out {}",
                self.d_vec.len(),
                self.b_vec.len(),
                slice.rank,
                slice.c_out
            )));
        }
        Ok(())
    }
}

/// One drift level: the vectors for every compensated layer, in layer order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingVectorSet {
    pub set_id: u32,
    pub drift_time: f64,
    pub layers: Vec<LayerVectors>,
}

impl ScalingVectorSet {
    /// Zero-function set for layers with the given output widths.
    pub fn initial(set_id: u32, drift_time: f64, rank: usize, c_outs: &[usize]) -> Self {
        Self {
            set_id,
            drift_time,
            layers: c_outs.iter().map(|&c| LayerVectors::initial(rank, c)).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.d_vec.len() + l.b_vec.len()).sum()
    }
}

/// `Δy = b ⊙ (B_R (d ⊙ (A_R x)))` for one input vector.
pub fn vera_plus_forward(x: &[f64], slice: &ProjectionSlice<'_>, v: &LayerVectors) -> Result<Vec<f64>> {
    v.check(slice)?;
    if x.len() != slice.c_in {
        return Err(Error::Shape(format!("input length {} != C_in {}", x.len(), slice.c_in)));
    }
    let u: Vec<f64> = (0..slice.rank)
        .map(|k| {
            let row = &slice.a[k * slice.a_stride..k * slice.a_stride + slice.c_in];
            row.iter().zip(x).map(|(a, x)| a * x).sum::<f64>() * v.d_vec[k]
        })
        .collect();
    Ok((0..slice.c_out)
        .map(|o| {
            let w: f64 = (0..slice.rank).map(|k| slice.b_at(o, k) * u[k]).sum();
            v.b_vec[o] * w
        })
        .collect())
}

/// Geometry of the convolution a 1×1 compensation is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_dim(&self, n: usize) -> Option<usize> {
        (n + 2 * self.padding)
            .checked_sub(self.kernel)
            .map(|v| v / self.stride + 1)
    }

    /// Input coordinate of the centre tap for output coordinate `o`.
    pub fn centre(&self, o: usize) -> Option<usize> {
        (o * self.stride + self.kernel / 2).checked_sub(self.padding)
    }
}

/// Applies [`vera_plus_forward`] at the centre tap of every output window of a
/// `C_in × H × W` map, returning `C_out × H' × W'` with the backbone's spatial size.
pub fn pointwise_conv_compensation(
    x: &[f64],
    (h, w): (usize, usize),
    geom: ConvGeometry,
    slice: &ProjectionSlice<'_>,
    v: &LayerVectors,
) -> Result<(Vec<f64>, (usize, usize))> {
    if x.len() != slice.c_in * h * w {
        return Err(Error::Shape(format!(
            "feature map has {} values, expected {}×{h}×{w}",
            x.len(),
            slice.c_in
        )));
    }
    let (ho, wo) = match (geom.out_dim(h), geom.out_dim(w)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Shape(format!("kernel {} larger than padded input {h}×{w}", geom.kernel))),
    };
    let mut out = vec![0.0; slice.c_out * ho * wo];
    let mut col = vec![0.0; slice.c_in];
    for i in 0..ho {
        for j in 0..wo {
            let (ci, cj) = match (geom.centre(i), geom.centre(j)) {
                (Some(a), Some(b)) if a < h && b < w => (a, b),
                _ => return Err(Error::Shape(format!("centre tap of output ({i},{j}) falls outside the input"))),
            };
            for (c, slot) in col.iter_mut().enumerate() {
                *slot = x[(c * h + ci) * w + cj];
            }
            let dy = vera_plus_forward(&col, slice, v)?;
            for (o, val) in dy.into_iter().enumerate() {
                out[(o * ho + i) * wo + j] = val;
            }
        }
    }
    Ok((out, (ho, wo)))
}

/// LoRA matrices in the K×K convolutional layout:
/// `A: (r·K) × (C_in·K)` and `B: (C_out·K) × (r·K)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoRAPair {
    pub rank: usize,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl LoRAPair {
    pub fn zeros(rank: usize, kernel: usize, c_in: usize, c_out: usize) -> Self {
        let rk = rank * kernel;
        Self {
            rank,
            kernel,
            c_in,
            c_out,
            a: vec![0.0; rk * c_in * kernel],
            b: vec![0.0; c_out * kernel * rk],
        }
    }

    fn dims(&self) -> (usize, usize, usize) {
        (self.rank * self.kernel, self.c_in * self.kernel, self.c_out * self.kernel)
    }

    pub fn check(&self) -> Result<()> {
        let (rk, ink, outk) = self.dims();
        if self.a.len() != rk * ink || self.b.len() != outk * rk {
            return Err(Error::Shape(format!(
                "LoRA pair storage (A {}, B {}) does not match r={} K={} C_in={} C_out={}",
                self.a.len(),
                self.b.len(),
                self.rank,
                self.kernel,
                self.c_in,
                self.c_out
            )));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// `B·A` reshaped row-major into a `C_out × C_in × K × K` kernel.
    pub fn delta_kernel(&self) -> Result<Vec<f64>> {
        self.check()?;
        let (rk, ink, outk) = self.dims();
        let mut ba = vec![0.0; outk * ink];
        for i in 0..outk {
            for p in 0..rk {
                let bv = self.b[i * rk + p];
                if bv == 0.0 {
                    continue;
                }
                for j in 0..ink {
                    ba[i * ink + j] += bv * self.a[p * ink + j];
                }
            }
        }
        Ok(ba)
    }
}

/// `Δy = B (A x)` for an input of length `C_in·K`.
pub fn lora_forward(x: &[f64], pair: &LoRAPair) -> Result<Vec<f64>> {
    pair.check()?;
    let (rk, ink, outk) = pair.dims();
    if x.len() != ink {
        return Err(Error::Shape(format!("LoRA input length {} != C_in·K {ink}", x.len())));
    }
    let ax: Vec<f64> = (0..rk)
        .map(|p| pair.a[p * ink..(p + 1) * ink].iter().zip(x).map(|(a, x)| a * x).sum())
        .collect();
    Ok((0..outk)
        .map(|i| pair.b[i * rk..(i + 1) * rk].iter().zip(&ax).map(|(b, v)| b * v).sum())
        .collect())
}

/// Index of the entry with the largest `t_k <= t`.
pub fn select_active_set(t: f64, times: &[f64]) -> Result<usize> {
    if times.is_empty() {
        return Err(Error::Config("schedule has no entries".into()));
    }
    if t.is_nan() || t < times[0] {
        return Err(Error::Domain(format!("time {t} precedes the first drift point {}", times[0])));
    }
    Ok(times.partition_point(|&tk| tk <= t) - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, Hash, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    None,
    Lora,
    Vera,
    #[default]
    VeraPlus,
}

impl Variant {
    pub const COMPARED: [Variant; 3] = [Variant::Lora, Variant::Vera, Variant::VeraPlus];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::Lora => "lora",
            Variant::Vera => "vera",
            Variant::VeraPlus => "vera_plus",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "none" => Ok(Variant::None),
            "lora" => Ok(Variant::Lora),
            "vera" => Ok(Variant::Vera),
            "vera_plus" | "veraplus" => Ok(Variant::VeraPlus),
            other => Err(Error::Config(format!("unknown compensation variant {other:?}"))),
        }
    }
}

/// Which layers carry a compensation branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LayerSelector {
    /// Every convolution plus the classifier head.
    #[default]
    ConvAndHead,
    ConvOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompensationConfig {
    pub variant: Variant,
    pub rank: usize,
    pub layers: LayerSelector,
}

impl Default for CompensationConfig {
    fn default() -> Self {
        Self {
            variant: Variant::VeraPlus,
            rank: 1,
            layers: LayerSelector::ConvAndHead,
        }
    }
}

impl CompensationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("compensation rank must be >= 1".into()));
        }
        Ok(())
    }
}

/// Channel and kernel sizes of one compensated layer (`kernel = 1` for linear).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ParamCount {
    /// Stored once, shared by every set.
    pub shared: u64,
    /// Parameters of one drift-level set.
    pub per_set: u64,
    pub total: u64,
}

/// Compensation parameters for `num_sets` drift levels.
///
/// * `lora`: `num_sets · Σ r·K²·(C_in + C_out)`
/// * `vera`: shared `r·K_max²·(d_max_in + d_max_out)` plus `num_sets · Σ (r·K + C_out·K)`
/// * `vera_plus`: shared `r·(d_max_in + d_max_out)` plus `num_sets · Σ (r + C_out)`
pub fn count_compensation_params(variant: Variant, layers: &[LayerDims], rank: usize, num_sets: usize) -> ParamCount {
    let r = rank as u64;
    let sets = num_sets as u64;
    let d_in = layers.iter().map(|l| l.c_in).max().unwrap_or(0) as u64;
    let d_out = layers.iter().map(|l| l.c_out).max().unwrap_or(0) as u64;
    let k_max = layers.iter().map(|l| l.kernel).max().unwrap_or(0) as u64;
    let (shared, per_set) = match variant {
        Variant::None => (0, 0),
        Variant::Lora => (
            0,
            layers
                .iter()
                .map(|l| {
                    let k = l.kernel as u64;
                    r * k * k * (l.c_in + l.c_out) as u64
                })
                .sum(),
        ),
        Variant::Vera => (
            r * k_max * k_max * (d_in + d_out),
            layers
                .iter()
                .map(|l| {
                    let k = l.kernel as u64;
                    r * k + l.c_out as u64 * k
                })
                .sum(),
        ),
        Variant::VeraPlus => (
            r * (d_in + d_out),
            layers.iter().map(|l| r + l.c_out as u64).sum(),
        ),
    };
    ParamCount {
        shared,
        per_set,
        total: shared + sets * per_set,
    }
}

/// Per-layer low-rank matrix parameters: K×K LoRA shapes versus VeRA+ 1×1 shapes.
pub fn projection_params_per_layer(variant: Variant, dims: LayerDims, rank: usize) -> u64 {
    let k = dims.kernel as u64;
    let r = rank as u64;
    let c = (dims.c_in + dims.c_out) as u64;
    match variant {
        Variant::Lora | Variant::Vera => r * k * k * c,
        Variant::VeraPlus => r * c,
        Variant::None => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn hand_projections() -> SharedProjections {
        SharedProjections {
            rank: 1,
            d_max_in: 2,
            d_max_out: 2,
            seed: 0,
            a_max: vec![1.0, 2.0],
            b_max: vec![3.0, 4.0],
        }
    }

    #[test]
    fn hand_evaluated_instance() {
        let p = hand_projections();
        let s = p.slice(2, 2).unwrap();
        let v = LayerVectors {
            d_vec: vec![2.0],
            b_vec: vec![1.0, -1.0],
        };
        assert_eq!(vera_plus_forward(&[1.0, 1.0], &s, &v).unwrap(), vec![18.0, -24.0]);
    }

    #[test]
    fn zero_b_annihilates_and_unit_vectors_reduce_to_plain_product() {
        let p = init_shared_projections(3, 6, 5, 4).unwrap();
        let s = p.slice(4, 5).unwrap();
        let x = [0.3, -1.2, 0.8, 2.0];
        let zero = LayerVectors::initial(3, 5);
        assert!(vera_plus_forward(&x, &s, &zero).unwrap().iter().all(|v| *v == 0.0));

        let ones = LayerVectors {
            d_vec: vec![1.0; 3],
            b_vec: vec![1.0; 5],
        };
        let got = vera_plus_forward(&x, &s, &ones).unwrap();
        let a = s.a_dense();
        for (o, g) in got.iter().enumerate() {
            let want: f64 = (0..3)
                .map(|k| s.b_at(o, k) * (0..4).map(|c| a[k * 4 + c] * x[c]).sum::<f64>())
                .sum();
            assert!((g - want).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_init_contract() {
        let a = init_shared_projections(2, 16, 8, 42).unwrap();
        let b = init_shared_projections(2, 16, 8, 42).unwrap();
        assert_eq!(a, b);
        let small = init_shared_projections(1, 4, 3, 0).unwrap();
        assert_eq!(small.a_max.len(), 4);
        assert_eq!(small.b_max.len(), 3);
        assert!(init_shared_projections(0, 4, 4, 0).is_err());
    }

    #[test]
    fn projection_rows_have_unit_norm_at_scale() {
        let p = init_shared_projections(4, 10_000, 4, 9).unwrap();
        for k in 0..4 {
            let row = &p.a_max[k * 10_000..(k + 1) * 10_000];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 0.02, "row {k} norm {norm}");
        }
    }

    #[test]
    fn slicing_takes_prefixes() {
        let p = init_shared_projections(2, 5, 4, 1).unwrap();
        let full = p.slice(5, 4).unwrap();
        assert_eq!(full.a_dense(), p.a_max);
        assert_eq!(full.b, &p.b_max[..]);
        let first = p.slice(1, 4).unwrap();
        assert_eq!(first.a_dense(), vec![p.a_max[0], p.a_max[5]]);
        let again = p.slice(1, 2).unwrap();
        assert_eq!(first.a_dense(), again.a_dense());
        assert!(matches!(p.slice(6, 4), Err(Error::Config(_))));
        assert!(matches!(p.slice(5, 5), Err(Error::Config(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let p = init_shared_projections(2, 4, 4, 1).unwrap();
        let s = p.slice(4, 3).unwrap();
        let v = LayerVectors::initial(2, 4);
        assert!(matches!(vera_plus_forward(&[0.0; 4], &s, &v), Err(Error::Shape(_))));
        let v = LayerVectors::initial(2, 3);
        assert!(matches!(vera_plus_forward(&[0.0; 3], &s, &v), Err(Error::Shape(_))));
    }

    #[test]
    fn pointwise_cases() {
        let p = init_shared_projections(2, 3, 4, 8).unwrap();
        let s = p.slice(3, 4).unwrap();
        let v = LayerVectors {
            d_vec: vec![0.7, -1.1],
            b_vec: vec![1.0, 0.5, -2.0, 0.3],
        };
        let geom = ConvGeometry {
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let chan = [0.4, -0.2, 1.5];
        let (h, w) = (5, 4);
        let x: Vec<f64> = chan.iter().flat_map(|&c| std::iter::repeat_n(c, h * w)).collect();
        let (y, (ho, wo)) = pointwise_conv_compensation(&x, (h, w), geom, &s, &v).unwrap();
        assert_eq!((ho, wo), (3, 2));
        let vec_case = vera_plus_forward(&chan, &s, &v).unwrap();
        for o in 0..4 {
            for pix in 0..ho * wo {
                assert_eq!(y[o * ho * wo + pix], vec_case[o]);
            }
        }

        let zero = LayerVectors {
            b_vec: vec![0.0; 4],
            ..v.clone()
        };
        let (y0, _) = pointwise_conv_compensation(&x, (h, w), geom, &s, &zero).unwrap();
        assert!(y0.iter().all(|v| *v == 0.0));

        let unit = ConvGeometry {
            kernel: 1,
            stride: 1,
            padding: 0,
        };
        let (y1, dims) = pointwise_conv_compensation(&chan, (1, 1), unit, &s, &v).unwrap();
        assert_eq!(dims, (1, 1));
        assert_eq!(y1, vec_case);

        assert!(pointwise_conv_compensation(&chan, (2, 2), geom, &s, &v).is_err());
    }

    #[test]
    fn lora_cases() {
        let zero = LoRAPair::zeros(2, 1, 3, 3);
        assert_eq!(lora_forward(&[1.0, 2.0, 3.0], &zero).unwrap(), vec![0.0; 3]);

        // full rank with A = I recovers B
        let mut pair = LoRAPair::zeros(3, 1, 3, 3);
        for i in 0..3 {
            pair.a[i * 3 + i] = 1.0;
        }
        pair.b = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
        assert_eq!(lora_forward(&[1.0, 0.0, -1.0], &pair).unwrap(), vec![-2.0, -2.0, -2.0]);

        assert!(lora_forward(&[1.0], &pair).is_err());
        let bad = LoRAPair {
            a: vec![0.0],
            ..pair
        };
        assert!(bad.check().is_err());
    }

    #[test]
    fn lora_matches_dense_product() {
        let mut rng = rng_from_seed(77);
        let mut pair = LoRAPair::zeros(2, 3, 4, 5);
        pair.a.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        pair.b.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = lora_forward(&x, &pair).unwrap();
        // independent dense (BA) x
        let ba = pair.delta_kernel().unwrap();
        for i in 0..15 {
            let want: f64 = (0..12).map(|j| ba[i * 12 + j] * x[j]).sum();
            assert!((got[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn active_set_selection() {
        let times = [1.0, 1.5, 2.25];
        assert_eq!(select_active_set(1.5, &times).unwrap(), 1);
        assert_eq!(select_active_set(2.0, &times).unwrap(), 1);
        assert_eq!(select_active_set(1e9, &times).unwrap(), 2);
        assert_eq!(select_active_set(1.0, &times).unwrap(), 0);
        assert!(matches!(select_active_set(0.5, &times), Err(Error::Domain(_))));
        assert!(select_active_set(1.0, &[]).is_err());
    }

    #[test]
    fn parameter_count_examples() {
        let layer = [LayerDims {
            c_in: 16,
            c_out: 16,
            kernel: 3,
        }];
        assert_eq!(count_compensation_params(Variant::Lora, &layer, 1, 1).total, 288);
        assert_eq!(count_compensation_params(Variant::VeraPlus, &layer, 1, 1).per_set, 17);
        let lora = projection_params_per_layer(Variant::Lora, layer[0], 1);
        let vp = projection_params_per_layer(Variant::VeraPlus, layer[0], 1);
        assert_eq!(lora, 9 * vp);
        assert_eq!(count_compensation_params(Variant::None, &layer, 1, 5).total, 0);
    }

    fn arb_layers() -> impl Strategy<Value = Vec<LayerDims>> {
        prop::collection::vec(
            (1usize..128, 1usize..128, 1usize..6).prop_map(|(c_in, c_out, kernel)| LayerDims { c_in, c_out, kernel }),
            1..12,
        )
    }

    proptest! {
        #[test]
        fn counts_are_strictly_ordered_for_kxk_layers(layers in arb_layers(), r in 1usize..9, sets in 2usize..20) {
            let layers: Vec<LayerDims> = layers.into_iter().map(|l| LayerDims { kernel: 3, ..l }).collect();
            let lora = count_compensation_params(Variant::Lora, &layers, r, sets).total;
            let vera = count_compensation_params(Variant::Vera, &layers, r, sets).total;
            let vp = count_compensation_params(Variant::VeraPlus, &layers, r, sets).total;
            prop_assert!(vp < vera, "vera_plus {vp} vera {vera}");
            prop_assert!(vera < lora, "vera {vera} lora {lora}");
        }

        #[test]
        fn vera_plus_is_below_vera_once_any_kernel_exceeds_one(layers in arb_layers(), r in 1usize..9, sets in 1usize..20) {
            prop_assume!(layers.iter().any(|l| l.kernel >= 2));
            let vera = count_compensation_params(Variant::Vera, &layers, r, sets).total;
            let vp = count_compensation_params(Variant::VeraPlus, &layers, r, sets).total;
            prop_assert!(vp < vera);
        }

        #[test]
        fn active_set_is_monotone(a in 1.0f64..100.0, b in 1.0f64..100.0) {
            let times = [1.0, 1.5, 2.25, 3.375, 10.0, 50.0];
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(select_active_set(lo, &times).unwrap() <= select_active_set(hi, &times).unwrap());
        }

        #[test]
        fn forward_is_linear(x1 in prop::collection::vec(-2.0f64..2.0, 5), x2 in prop::collection::vec(-2.0f64..2.0, 5),
                             alpha in -3.0f64..3.0, beta in -3.0f64..3.0, seed in 0u64..1000) {
            let p = init_shared_projections(2, 5, 3, seed).unwrap();
            let s = p.slice(5, 3).unwrap();
            let v = LayerVectors { d_vec: vec![0.5, -1.5], b_vec: vec![1.0, 2.0, -0.5] };
            let mix: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| alpha * a + beta * b).collect();
            let y = vera_plus_forward(&mix, &s, &v).unwrap();
            let y1 = vera_plus_forward(&x1, &s, &v).unwrap();
            let y2 = vera_plus_forward(&x2, &s, &v).unwrap();
            for i in 0..3 {
                prop_assert!((y[i] - (alpha * y1[i] + beta * y2[i])).abs() < 1e-10);
            }
        }
    }
}
