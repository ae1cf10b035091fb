//! Network topologies.
//!
//! A model is a flat list of layers. Activation `0` is the network input and
//! activation `i + 1` is the output of layer `i`; a residual join adds an
//! earlier activation to the current one through a parameter-free shortcut
//! (strided subsampling plus zero channel padding when shapes differ).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::compensation::{ConvGeometry, LayerDims, LayerSelector};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn spatial(&self) -> usize {
        self.h * self.w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}×{}×{}", self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv2d {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        compensated: bool,
    },
    Linear {
        c_in: usize,
        c_out: usize,
        compensated: bool,
    },
    /// Adds activation `source` (see module docs) to the running activation.
    ResidualAdd {
        source: usize,
    },
    Relu,
    GlobalAvgPool,
}

impl LayerSpec {
    pub fn has_weights(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Linear { .. })
    }

    pub fn is_compensated(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv2d { compensated: true, .. } | LayerSpec::Linear { compensated: true, .. }
        )
    }

    /// `(C_out, C_in·K·K)` for weight layers.
    pub fn weight_dims(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Conv2d { c_in, c_out, kernel, .. } => Some((c_out, c_in * kernel * kernel)),
            LayerSpec::Linear { c_in, c_out, .. } => Some((c_out, c_in)),
            _ => None,
        }
    }

    pub fn dims(&self) -> Option<LayerDims> {
        match *self {
            LayerSpec::Conv2d { c_in, c_out, kernel, .. } => Some(LayerDims { c_in, c_out, kernel }),
            LayerSpec::Linear { c_in, c_out, .. } => Some(LayerDims { c_in, c_out, kernel: 1 }),
            _ => None,
        }
    }

    pub fn geometry(&self) -> Option<ConvGeometry> {
        match *self {
            LayerSpec::Conv2d { kernel, stride, padding, .. } => Some(ConvGeometry { kernel, stride, padding }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input: Shape,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

/// Stride of the option-A shortcut mapping `from` onto `to`.
pub(crate) fn shortcut_stride(from: Shape, to: Shape) -> Option<usize> {
    if to.c < from.c || to.h == 0 || to.w == 0 {
        return None;
    }
    let s = from.h.div_ceil(to.h).max(1);
    if from.h.div_ceil(s) == to.h && from.w.div_ceil(s) == to.w {
        Some(s)
    } else {
        None
    }
}

impl ModelSpec {
    /// Activation shapes, `len = layers.len() + 1`; errors on any inconsistency.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        if self.input.numel() == 0 || self.classes == 0 {
            return Err(Error::Config("input shape and class count must be positive".into()));
        }
        let mut shapes = vec![self.input];
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = shapes[i];
            let next = match *layer {
                LayerSpec::Conv2d {
                    c_in,
                    c_out,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    if c_in != cur.c || c_out == 0 || kernel == 0 || stride == 0 {
                        return Err(Error::Shape(format!(
                            "layer {i}: conv expects {c_in} input channels, activation is {cur}"
                        )));
                    }
                    let geom = ConvGeometry { kernel, stride, padding };
                    match (geom.out_dim(cur.h), geom.out_dim(cur.w)) {
                        (Some(h), Some(w)) if h > 0 && w > 0 => Shape::new(c_out, h, w),
                        _ => return Err(Error::Shape(format!("layer {i}: kernel {kernel} too large for {cur}"))),
                    }
                }
                LayerSpec::Linear { c_in, c_out, .. } => {
                    if c_in != cur.numel() || c_out == 0 {
                        return Err(Error::Shape(format!(
                            "layer {i}: linear expects {c_in} features, activation is {cur}"
                        )));
                    }
                    Shape::new(c_out, 1, 1)
                }
                LayerSpec::ResidualAdd { source } => {
                    if source > i {
                        return Err(Error::Shape(format!("layer {i}: residual source {source} is not earlier")));
                    }
                    if shortcut_stride(shapes[source], cur).is_none() {
                        return Err(Error::Shape(format!(
                            "layer {i}: residual {} cannot join {cur}",
                            shapes[source]
                        )));
                    }
                    cur
                }
                LayerSpec::Relu => cur,
                LayerSpec::GlobalAvgPool => Shape::new(cur.c, 1, 1),
            };
            shapes.push(next);
        }
        let out = shapes[shapes.len() - 1];
        if out.numel() != self.classes {
            return Err(Error::Shape(format!(
                "network output {out} does not match {} classes",
                self.classes
            )));
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    /// Indices (into `layers`) of layers that own weights.
    pub fn weight_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].has_weights()).collect()
    }

    pub fn compensated_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].is_compensated()).collect()
    }

    pub fn compensated_dims(&self) -> Vec<LayerDims> {
        self.compensated_layers()
            .into_iter()
            .filter_map(|i| self.layers[i].dims())
            .collect()
    }

    /// `(d_max_in, d_max_out)` over compensated layers.
    pub fn max_comp_dims(&self) -> (usize, usize) {
        let dims = self.compensated_dims();
        (
            dims.iter().map(|d| d.c_in).max().unwrap_or(0),
            dims.iter().map(|d| d.c_out).max().unwrap_or(0),
        )
    }

    /// Marks compensated layers according to `selector`.
    pub fn select_compensated(&mut self, selector: LayerSelector) {
        let last_linear = self
            .layers
            .iter()
            .rposition(|l| matches!(l, LayerSpec::Linear { .. }));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                LayerSpec::Conv2d { compensated, .. } => *compensated = true,
                LayerSpec::Linear { compensated, .. } => {
                    *compensated = selector == LayerSelector::ConvAndHead && Some(i) == last_linear
                }
                _ => {}
            }
        }
    }

    /// Weights plus biases of all weight layers.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.weight_dims())
            .map(|(o, k)| o * k + o)
            .sum()
    }

    /// Weights only (the part programmed into the array).
    pub fn weight_count(&self) -> usize {
        self.layers.iter().filter_map(|l| l.weight_dims()).map(|(o, k)| o * k).sum()
    }
}

/// Stem conv, three stages of residual blocks with channel doubling and
/// stride-2 transitions, global average pooling and a linear head.
pub fn build_toy_resnet(width: usize, blocks: usize, classes: usize, input: Shape) -> Result<ModelSpec> {
    if width < 4 || blocks == 0 || classes == 0 {
        return Err(Error::Config(format!(
            "toy resnet needs width >= 4 and blocks >= 1 (got width {width}, blocks {blocks})"
        )));
    }
    let conv = |c_in, c_out, stride| LayerSpec::Conv2d {
        c_in,
        c_out,
        kernel: 3,
        stride,
        padding: 1,
        compensated: true,
    };
    let mut layers = vec![conv(input.c, width, 1), LayerSpec::Relu];
    let mut c = width;
    for stage in 0..3 {
        let c_out = width << stage;
        for b in 0..blocks {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            let source = layers.len();
            layers.push(conv(c, c_out, stride));
            layers.push(LayerSpec::Relu);
            layers.push(conv(c_out, c_out, 1));
            layers.push(LayerSpec::ResidualAdd { source });
            layers.push(LayerSpec::Relu);
            c = c_out;
        }
    }
    layers.push(LayerSpec::GlobalAvgPool);
    layers.push(LayerSpec::Linear {
        c_in: c,
        c_out: classes,
        compensated: true,
    });
    let spec = ModelSpec {
        name: format!("toy-resnet-w{width}-b{blocks}"),
        input,
        classes,
        layers,
    };
    spec.validate()?;
    Ok(spec)
}

/// Fully connected ReLU network; every linear layer is compensated.
pub fn build_mlp(input: Shape, hidden: &[usize], classes: usize) -> Result<ModelSpec> {
    let mut layers = Vec::new();
    let mut c = input.numel();
    for &h in hidden {
        layers.push(LayerSpec::Linear {
            c_in: c,
            c_out: h,
            compensated: true,
        });
        layers.push(LayerSpec::Relu);
        c = h;
    }
    layers.push(LayerSpec::Linear {
        c_in: c,
        c_out: classes,
        compensated: true,
    });
    let spec = ModelSpec {
        name: format!("mlp-{}", hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join("-")),
        input,
        classes,
        layers,
    };
    spec.validate()?;
    Ok(spec)
}

/// Layer dimensions of the CIFAR ResNet-20 (3 stages × 3 basic blocks,
/// 16/32/64 channels, parameter-free shortcuts), used for cost accounting only.
pub fn resnet20_cifar(classes: usize) -> ModelSpec {
    ModelSpec {
        name: "resnet20-cifar".into(),
        ..build_resnet_cifar(16, 3, classes)
    }
}

fn build_resnet_cifar(width: usize, blocks: usize, classes: usize) -> ModelSpec {
    build_toy_resnet(width, blocks, classes, Shape::new(3, 32, 32)).expect("static topology is valid")
}

/// Trainable parameters of one weight layer; `weight` is `C_out × (C_in·K·K)` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<T = f64> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights<T = f64> {
    /// One entry per weight layer, in layer order.
    pub layers: Vec<LayerParams<T>>,
}

impl ModelWeights<f64> {
    /// He-normal weights, zero biases. The second conv of each residual branch
    /// is scaled down so the un-normalized residual stack starts near identity.
    pub fn init(spec: &ModelSpec, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut layers = Vec::new();
        for (i, layer) in spec.layers.iter().enumerate() {
            let Some((c_out, fan_in)) = layer.weight_dims() else { continue };
            let feeds_residual = matches!(spec.layers.get(i + 1), Some(LayerSpec::ResidualAdd { .. }));
            let gain = match layer {
                LayerSpec::Linear { .. } if i + 1 == spec.layers.len() => 1.0,
                _ if feeds_residual => 0.5 * 2f64.sqrt(),
                _ => 2f64.sqrt(),
            };
            let std = gain / (fan_in as f64).sqrt();
            let weight = (0..c_out * fan_in)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            layers.push(LayerParams {
                weight,
                bias: vec![0.0; c_out],
            });
        }
        Self { layers }
    }

    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        let dims: Vec<(usize, usize)> = spec.layers.iter().filter_map(|l| l.weight_dims()).collect();
        if dims.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "{} weight tensors for {} weight layers",
                self.layers.len(),
                dims.len()
            )));
        }
        for (i, ((o, k), p)) in dims.iter().zip(&self.layers).enumerate() {
            if p.weight.len() != o * k || p.bias.len() != *o {
                return Err(Error::Shape(format!(
                    "weight layer {i}: expected {o}×{k} weights and {o} biases, found {} and {}",
                    p.weight.len(),
                    p.bias.len()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_resnet_channel_progression() {
        let spec = build_toy_resnet(8, 1, 4, Shape::new(3, 16, 16)).unwrap();
        let convs: Vec<usize> = spec
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv2d { c_out, .. } => Some(*c_out),
                _ => None,
            })
            .collect();
        assert_eq!(convs, vec![8, 8, 8, 16, 16, 32, 32]);
        let shapes = spec.shapes().unwrap();
        assert_eq!(*shapes.last().unwrap(), Shape::new(4, 1, 1));
        assert!(spec.layers.iter().filter(|l| l.has_weights()).all(|l| l.is_compensated()));
    }

    #[test]
    fn toy_resnet_parameter_closed_form() {
        let (w, blocks, classes) = (8usize, 2usize, 10usize);
        let spec = build_toy_resnet(w, blocks, classes, Shape::new(3, 16, 16)).unwrap();
        // stem + per stage: first conv (c_prev → c) + (2·blocks − 1) convs (c → c), plus head
        let mut want = 9 * 3 * w + w;
        let mut c_prev = w;
        for stage in 0..3 {
            let c = w << stage;
            want += 9 * c_prev * c + c;
            want += (2 * blocks - 1) * (9 * c * c + c);
            c_prev = c;
        }
        want += c_prev * classes + classes;
        assert_eq!(spec.param_count(), want);
    }

    #[test]
    fn resnet20_dimensions() {
        let spec = resnet20_cifar(10);
        assert_eq!(spec.weight_layers().len(), 20);
        assert_eq!(spec.weight_count(), 268_336);
        assert_eq!(spec.max_comp_dims(), (64, 64));
    }

    #[test]
    fn invalid_topologies_are_rejected() {
        assert!(build_toy_resnet(3, 1, 10, Shape::new(3, 16, 16)).is_err());
        assert!(build_toy_resnet(8, 0, 10, Shape::new(3, 16, 16)).is_err());
        let bad = ModelSpec {
            name: "bad".into(),
            input: Shape::new(2, 4, 4),
            classes: 2,
            layers: vec![
                LayerSpec::Conv2d { c_in: 2, c_out: 4, kernel: 3, stride: 1, padding: 1, compensated: false },
                LayerSpec::Conv2d { c_in: 4, c_out: 1, kernel: 3, stride: 1, padding: 1, compensated: false },
                LayerSpec::ResidualAdd { source: 1 },
            ],
        };
        assert!(matches!(bad.validate(), Err(Error::Shape(_))));
    }

    #[test]
    fn head_selection() {
        let mut spec = build_toy_resnet(4, 1, 3, Shape::new(1, 8, 8)).unwrap();
        spec.select_compensated(LayerSelector::ConvOnly);
        assert!(!spec.layers.last().unwrap().is_compensated());
        spec.select_compensated(LayerSelector::ConvAndHead);
        assert!(spec.layers.last().unwrap().is_compensated());
    }
}
