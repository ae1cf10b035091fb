//! Batched forward and backward passes.
//!
//! Activations are stored channel-major (`C × N × H × W`) so that every
//! convolution, linear layer and compensation branch is a single matrix
//! product over the whole batch. Weight layers see their input fake-quantized
//! per sample when activation quantization is enabled (except the network
//! input); gradients pass through the quantizer unchanged, which is the
//! straight-through estimator with the sample's own range as clip range.
//!
//! Compensation is added to a weight layer's output before the following
//! nonlinearity or residual join.

use crate::compensation::{ConvGeometry, ScalingVectorSet, SharedProjections};
use crate::error::{Error, Result};
use crate::linalg::{convert, gemm, gemm_nt, gemm_tn, Scalar};
use crate::model::{shortcut_stride, LayerParams, LayerSpec, ModelSpec, ModelWeights, Shape};
use crate::quant::fake_quant_in_place;

struct PreparedComp<T> {
    rank: usize,
    c_in: usize,
    c_out: usize,
    /// Dense `rank × c_in`.
    a: Vec<T>,
    /// Dense `c_out × rank`.
    b: Vec<T>,
    d_vec: Vec<T>,
    b_vec: Vec<T>,
}

/// A model bound to concrete weights, an optional compensation set and an
/// activation quantization setting.
pub struct Network<'a, T: Scalar> {
    spec: &'a ModelSpec,
    shapes: Vec<Shape>,
    params: Vec<LayerParams<T>>,
    /// Per layer: index into `params` for weight layers.
    weight_slot: Vec<Option<usize>>,
    /// Per weight layer.
    comp: Vec<Option<PreparedComp<T>>>,
    act_bits: Option<u8>,
}

/// Compensation attached to a forward pass.
#[derive(Clone, Copy)]
pub struct CompContext<'a> {
    pub projections: &'a SharedProjections,
    pub set: &'a ScalingVectorSet,
}

/// Cached intermediates of a forward pass, consumed by [`Network::backward`].
pub struct Trace<T> {
    n: usize,
    acts: Vec<Vec<T>>,
    /// Quantized input of weight layers (only when it differs from `acts[i]`).
    qin: Vec<Option<Vec<T>>>,
    /// `A_R x` at centre taps, `rank × NP`.
    comp_u: Vec<Option<Vec<T>>>,
    /// `B_R (d ⊙ u)`, `C_out × NP`.
    comp_w: Vec<Option<Vec<T>>>,
}

impl<T> Trace<T> {
    /// Logits as `classes × N`.
    pub fn logits(&self) -> &[T] {
        self.acts.last().expect("trace has at least the input")
    }

    pub fn batch(&self) -> usize {
        self.n
    }
}

/// Gradients of one compensated layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub grad_d_vec: Vec<f64>,
    pub grad_b_vec: Vec<f64>,
}

/// Gradients with respect to every scaling vector of a set, in compensated-layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
}

impl GradientSet {
    pub fn norms(&self) -> (f64, f64) {
        let b: f64 = self.layers.iter().flat_map(|l| &l.grad_b_vec).map(|v| v * v).sum();
        let d: f64 = self.layers.iter().flat_map(|l| &l.grad_d_vec).map(|v| v * v).sum();
        (b.sqrt(), d.sqrt())
    }

    pub fn add_scaled(&mut self, other: &GradientSet, s: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.grad_b_vec.iter_mut().zip(&b.grad_b_vec).for_each(|(x, y)| *x += s * y);
            a.grad_d_vec.iter_mut().zip(&b.grad_d_vec).for_each(|(x, y)| *x += s * y);
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradRequest {
    pub weights: bool,
    pub compensation: bool,
}

pub struct Gradients<T> {
    pub weights: Option<Vec<LayerParams<T>>>,
    pub compensation: Option<GradientSet>,
}

impl<'a, T: Scalar> Network<'a, T> {
    pub fn new(
        spec: &'a ModelSpec,
        weights: &ModelWeights<f64>,
        comp: Option<CompContext<'_>>,
        act_bits: Option<u8>,
    ) -> Result<Self> {
        let shapes = spec.shapes()?;
        weights.check(spec)?;
        let params: Vec<LayerParams<T>> = weights
            .layers
            .iter()
            .map(|p| LayerParams {
                weight: convert(&p.weight),
                bias: convert(&p.bias),
            })
            .collect();
        let mut weight_slot = vec![None; spec.layers.len()];
        let mut slot = 0;
        for (i, l) in spec.layers.iter().enumerate() {
            if l.has_weights() {
                weight_slot[i] = Some(slot);
                slot += 1;
            }
        }
        let mut prepared: Vec<Option<PreparedComp<T>>> = (0..params.len()).map(|_| None).collect();
        if let Some(ctx) = comp {
            let comp_layers = spec.compensated_layers();
            if ctx.set.layers.len() != comp_layers.len() {
                return Err(Error::Shape(format!(
                    "set {} has {} layer vectors, model has {} compensated layers",
                    ctx.set.set_id,
                    ctx.set.layers.len(),
                    comp_layers.len()
                )));
            }
            for (li, vecs) in comp_layers.iter().zip(&ctx.set.layers) {
                let dims = spec.layers[*li].dims().expect("compensated layers have weights");
                let c_in = match spec.layers[*li] {
                    LayerSpec::Linear { c_in, .. } => c_in,
                    _ => dims.c_in,
                };
                let slice = ctx.projections.slice(c_in, dims.c_out)?;
                if vecs.d_vec.len() != slice.rank || vecs.b_vec.len() != dims.c_out {
                    return Err(Error::Shape(format!(
                        "layer {li}: vectors (d {}, b {}) do not fit rank {} / C_out {}",
                        vecs.d_vec.len(),
                        vecs.b_vec.len(),
                        slice.rank,
                        dims.c_out
                    )));
                }
                prepared[weight_slot[*li].unwrap()] = Some(PreparedComp {
                    rank: slice.rank,
                    c_in,
                    c_out: dims.c_out,
                    a: convert(&slice.a_dense()),
                    b: convert(slice.b),
                    d_vec: convert(&vecs.d_vec),
                    b_vec: convert(&vecs.b_vec),
                });
            }
        }
        Ok(Self {
            spec,
            shapes,
            params,
            weight_slot,
            comp: prepared,
            act_bits,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        self.spec
    }

    pub fn input_shape(&self) -> Shape {
        self.shapes[0]
    }

    /// Forward pass over `n` samples laid out `C × N × H × W`.
    pub fn forward(&self, x: Vec<T>, n: usize) -> Trace<T> {
        let layers = &self.spec.layers;
        assert_eq!(x.len(), self.shapes[0].numel() * n, "input batch has the wrong size");
        let mut trace = Trace {
            n,
            acts: Vec::with_capacity(layers.len() + 1),
            qin: (0..layers.len()).map(|_| None).collect(),
            comp_u: (0..layers.len()).map(|_| None).collect(),
            comp_w: (0..layers.len()).map(|_| None).collect(),
        };
        trace.acts.push(x);
        for (i, layer) in layers.iter().enumerate() {
            let s_in = self.shapes[i];
            let s_out = self.shapes[i + 1];
            let out = match *layer {
                LayerSpec::Relu => trace.acts[i].iter().map(|&v| v.max(T::zero())).collect(),
                LayerSpec::GlobalAvgPool => global_avg_pool(&trace.acts[i], s_in, n),
                LayerSpec::ResidualAdd { source } => {
                    let mut out = trace.acts[i].clone();
                    shortcut_add(&trace.acts[source], self.shapes[source], &mut out, s_out, n);
                    out
                }
                LayerSpec::Conv2d { .. } | LayerSpec::Linear { .. } => self.weight_forward(i, &mut trace),
            };
            trace.acts.push(out);
        }
        trace
    }

    fn weight_forward(&self, i: usize, trace: &mut Trace<T>) -> Vec<T> {
        let layer = &self.spec.layers[i];
        let n = trace.n;
        let s_in = self.shapes[i];
        let s_out = self.shapes[i + 1];
        let slot = self.weight_slot[i].unwrap();
        let p = &self.params[slot];

        if let (Some(bits), true) = (self.act_bits, i > 0) {
            let mut q = trace.acts[i].clone();
            fake_quant_per_sample(&mut q, s_in, n, bits);
            trace.qin[i] = Some(q);
        }
        let x = trace.qin[i].as_deref().unwrap_or(&trace.acts[i]);

        let (rows, np, y) = match *layer {
            LayerSpec::Conv2d { c_in, c_out, .. } => {
                let geom = layer.geometry().unwrap();
                let np = n * s_out.spatial();
                let kk = c_in * geom.kernel * geom.kernel;
                let mut y = vec![T::zero(); c_out * np];
                if is_pointwise(geom) {
                    gemm(c_out, kk, np, &p.weight, x, T::zero(), &mut y);
                } else {
                    let mut cols = vec![T::zero(); kk * np];
                    im2col(x, s_in, n, geom, s_out, &mut cols);
                    gemm(c_out, kk, np, &p.weight, &cols, T::zero(), &mut y);
                }
                (c_out, np, y)
            }
            LayerSpec::Linear { c_in, c_out, .. } => {
                let flat;
                let xm: &[T] = if s_in.spatial() == 1 {
                    x
                } else {
                    flat = flatten(x, s_in, n);
                    &flat
                };
                let mut y = vec![T::zero(); c_out * n];
                gemm(c_out, c_in, n, &p.weight, xm, T::zero(), &mut y);
                (c_out, n, y)
            }
            _ => unreachable!(),
        };
        let mut y = y;
        for (o, row) in y.chunks_mut(np).enumerate() {
            let b = p.bias[o];
            row.iter_mut().for_each(|v| *v = *v + b);
        }
        debug_assert_eq!(rows * np, y.len());

        if let Some(c) = &self.comp[slot] {
            let xc = self.centre_taps(i, x, n);
            let mut u = vec![T::zero(); c.rank * np];
            gemm(c.rank, c.c_in, np, &c.a, &xc, T::zero(), &mut u);
            let mut v = u.clone();
            for (k, row) in v.chunks_mut(np).enumerate() {
                let d = c.d_vec[k];
                row.iter_mut().for_each(|e| *e = *e * d);
            }
            let mut w = vec![T::zero(); c.c_out * np];
            gemm(c.c_out, c.rank, np, &c.b, &v, T::zero(), &mut w);
            for (o, (yrow, wrow)) in y.chunks_mut(np).zip(w.chunks(np)).enumerate() {
                let b = c.b_vec[o];
                yrow.iter_mut().zip(wrow).for_each(|(yv, wv)| *yv = *yv + b * *wv);
            }
            trace.comp_u[i] = Some(u);
            trace.comp_w[i] = Some(w);
        }
        y
    }

    /// Compensation input `C_in × NP`: the layer input sampled at each output
    /// window's centre tap (the flattened features for linear layers).
    fn centre_taps(&self, i: usize, x: &[T], n: usize) -> Vec<T> {
        let s_in = self.shapes[i];
        let s_out = self.shapes[i + 1];
        match self.spec.layers[i] {
            LayerSpec::Linear { .. } => {
                if s_in.spatial() == 1 {
                    x.to_vec()
                } else {
                    flatten(x, s_in, n)
                }
            }
            LayerSpec::Conv2d { .. } => {
                let geom = self.spec.layers[i].geometry().unwrap();
                if is_pointwise(geom) {
                    return x.to_vec();
                }
                let mut out = vec![T::zero(); s_in.c * n * s_out.spatial()];
                for_each_centre(s_in, s_out, n, geom, |c, src, dst| out[c * n * s_out.spatial() + dst] = x[src]);
                out
            }
            _ => unreachable!(),
        }
    }

    /// Logits (`classes × N`) without keeping intermediates beyond the pass.
    pub fn logits(&self, x: Vec<T>, n: usize) -> Vec<T> {
        let mut t = self.forward(x, n);
        t.acts.pop().unwrap()
    }

    pub fn predict(&self, x: Vec<T>, n: usize) -> Vec<usize> {
        let classes = self.spec.classes;
        let logits = self.logits(x, n);
        (0..n)
            .map(|s| {
                let mut best = 0;
                for k in 1..classes {
                    if logits[k * n + s] > logits[best * n + s] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    /// Backpropagates `dlogits` (`classes × N`) through a recorded pass.
    pub fn backward(&self, trace: &Trace<T>, dlogits: Vec<T>, req: GradRequest) -> Gradients<T> {
        let layers = &self.spec.layers;
        let n = trace.n;
        let mut grads: Vec<Option<Vec<T>>> = (0..=layers.len()).map(|_| None).collect();
        grads[layers.len()] = Some(dlogits);
        let mut wgrads: Vec<Option<LayerParams<T>>> = (0..self.params.len()).map(|_| None).collect();
        let mut cgrads: Vec<Option<LayerGrad>> = (0..self.params.len()).map(|_| None).collect();

        for i in (0..layers.len()).rev() {
            let Some(g) = grads[i + 1].take() else { continue };
            let s_in = self.shapes[i];
            let s_out = self.shapes[i + 1];
            let need_input = i > 0;
            match layers[i] {
                LayerSpec::Relu => {
                    let mut g = g;
                    for (gv, &a) in g.iter_mut().zip(&trace.acts[i + 1]) {
                        if a <= T::zero() {
                            *gv = T::zero();
                        }
                    }
                    accumulate(&mut grads[i], g);
                }
                LayerSpec::GlobalAvgPool => {
                    let p = s_in.spatial();
                    let inv = T::one() / T::from_f64(p as f64);
                    let mut gi = vec![T::zero(); s_in.numel() * n];
                    for (idx, chunk) in gi.chunks_mut(p).enumerate() {
                        let v = g[idx] * inv;
                        chunk.iter_mut().for_each(|e| *e = v);
                    }
                    accumulate(&mut grads[i], gi);
                }
                LayerSpec::ResidualAdd { source } => {
                    let s_src = self.shapes[source];
                    let mut gs = vec![T::zero(); s_src.numel() * n];
                    shortcut_backward(&g, s_out, &mut gs, s_src, n);
                    accumulate(&mut grads[i], g);
                    if source > 0 {
                        accumulate(&mut grads[source], gs);
                    }
                }
                LayerSpec::Conv2d { .. } | LayerSpec::Linear { .. } => {
                    let slot = self.weight_slot[i].unwrap();
                    let (gi, wg, cg) = self.weight_backward(i, trace, &g, req, need_input);
                    if let Some(gi) = gi {
                        accumulate(&mut grads[i], gi);
                    }
                    wgrads[slot] = wg;
                    cgrads[slot] = cg;
                }
            }
        }

        Gradients {
            weights: req.weights.then(|| wgrads.into_iter().map(|g| g.expect("every weight layer visited")).collect()),
            compensation: req.compensation.then(|| GradientSet {
                layers: cgrads.into_iter().flatten().collect(),
            }),
        }
    }

    #[allow(clippy::type_complexity)]
    fn weight_backward(
        &self,
        i: usize,
        trace: &Trace<T>,
        g: &[T],
        req: GradRequest,
        need_input: bool,
    ) -> (Option<Vec<T>>, Option<LayerParams<T>>, Option<LayerGrad>) {
        let layer = &self.spec.layers[i];
        let n = trace.n;
        let s_in = self.shapes[i];
        let s_out = self.shapes[i + 1];
        let slot = self.weight_slot[i].unwrap();
        let p = &self.params[slot];
        let x = trace.qin[i].as_deref().unwrap_or(&trace.acts[i]);
        let (c_out, kk, np) = match *layer {
            LayerSpec::Conv2d { c_in, c_out, kernel, .. } => (c_out, c_in * kernel * kernel, n * s_out.spatial()),
            LayerSpec::Linear { c_in, c_out, .. } => (c_out, c_in, n),
            _ => unreachable!(),
        };
        let geom = layer.geometry();
        let pointwise = geom.map(is_pointwise).unwrap_or(true);
        // Input matrix `kk × np` of the layer's product.
        let cols: Option<Vec<T>> = match *layer {
            LayerSpec::Conv2d { .. } if !pointwise && req.weights => {
                let mut cols = vec![T::zero(); kk * np];
                im2col(x, s_in, n, geom.unwrap(), s_out, &mut cols);
                Some(cols)
            }
            LayerSpec::Linear { .. } if s_in.spatial() != 1 && req.weights => Some(flatten(x, s_in, n)),
            _ => None,
        };

        let wgrad = req.weights.then(|| {
            let xm: &[T] = cols.as_deref().unwrap_or(x);
            let mut dw = vec![T::zero(); c_out * kk];
            gemm_nt(c_out, np, kk, g, xm, T::zero(), &mut dw);
            let db = g.chunks(np).map(|row| row.iter().copied().sum()).collect();
            LayerParams { weight: dw, bias: db }
        });

        let mut gin: Option<Vec<T>> = None;
        if need_input {
            let mut dcols = vec![T::zero(); kk * np];
            gemm_tn(kk, c_out, np, &p.weight, g, T::zero(), &mut dcols);
            gin = Some(match *layer {
                LayerSpec::Conv2d { .. } if !pointwise => {
                    let mut gx = vec![T::zero(); s_in.numel() * n];
                    col2im(&dcols, s_in, n, geom.unwrap(), s_out, &mut gx);
                    gx
                }
                LayerSpec::Linear { .. } if s_in.spatial() != 1 => unflatten(&dcols, s_in, n),
                _ => dcols,
            });
        }

        let mut cgrad = None;
        if let Some(c) = &self.comp[slot] {
            let u = trace.comp_u[i].as_ref().expect("compensation intermediates recorded");
            let w = trace.comp_w[i].as_ref().expect("compensation intermediates recorded");
            // g ⊙ b, then back through B_R
            let mut gb = g.to_vec();
            for (o, row) in gb.chunks_mut(np).enumerate() {
                let b = c.b_vec[o];
                row.iter_mut().for_each(|e| *e = *e * b);
            }
            let mut gv = vec![T::zero(); c.rank * np];
            gemm_tn(c.rank, c.c_out, np, &c.b, &gb, T::zero(), &mut gv);

            if req.compensation {
                let grad_b_vec = g
                    .chunks(np)
                    .zip(w.chunks(np))
                    .map(|(gr, wr)| dot(gr, wr).as_f64())
                    .collect();
                let grad_d_vec = gv.chunks(np).zip(u.chunks(np)).map(|(a, b)| dot(a, b).as_f64()).collect();
                cgrad = Some(LayerGrad { grad_d_vec, grad_b_vec });
            }

            if let Some(gx) = gin.as_mut() {
                let mut gu = gv;
                for (k, row) in gu.chunks_mut(np).enumerate() {
                    let d = c.d_vec[k];
                    row.iter_mut().for_each(|e| *e = *e * d);
                }
                let mut gxc = vec![T::zero(); c.c_in * np];
                gemm_tn(c.c_in, c.rank, np, &c.a, &gu, T::zero(), &mut gxc);
                match *layer {
                    LayerSpec::Conv2d { .. } if !pointwise => {
                        let geom = geom.unwrap();
                        let spatial = s_out.spatial();
                        for_each_centre(s_in, s_out, n, geom, |ch, src, dst| {
                            gx[src] = gx[src] + gxc[ch * n * spatial + dst];
                        });
                    }
                    LayerSpec::Linear { .. } if s_in.spatial() != 1 => {
                        let back = unflatten(&gxc, s_in, n);
                        gx.iter_mut().zip(back).for_each(|(a, b)| *a = *a + b);
                    }
                    _ => gx.iter_mut().zip(gxc).for_each(|(a, b)| *a = *a + b),
                }
            }
        }
        (gin, wgrad, cgrad)
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
        None => *slot = Some(g),
    }
}

fn is_pointwise(g: ConvGeometry) -> bool {
    g.kernel == 1 && g.stride == 1 && g.padding == 0
}

/// Per-sample symmetric fake quantization of a `C × N × H × W` tensor.
pub fn fake_quant_per_sample<T: Scalar>(x: &mut [T], s: Shape, n: usize, bits: u8) {
    let p = s.spatial();
    if n == 1 {
        fake_quant_in_place(x, bits);
        return;
    }
    let mut maxes = vec![T::zero(); n];
    for c in 0..s.c {
        for (sample, m) in maxes.iter_mut().enumerate() {
            let base = (c * n + sample) * p;
            for v in &x[base..base + p] {
                *m = m.max(v.abs());
            }
        }
    }
    let q = T::from_f64(crate::quant::max_level(bits) as f64);
    for c in 0..s.c {
        for (sample, &m) in maxes.iter().enumerate() {
            if m == T::zero() {
                continue;
            }
            let scale = m / q;
            let base = (c * n + sample) * p;
            for v in &mut x[base..base + p] {
                *v = (*v / scale).round().max(-q).min(q) * scale;
            }
        }
    }
}

fn im2col<T: Scalar>(x: &[T], s_in: Shape, n: usize, g: ConvGeometry, s_out: Shape, cols: &mut [T]) {
    let (h, w) = (s_in.h as isize, s_in.w as isize);
    let (ho, wo) = (s_out.h, s_out.w);
    let np = n * ho * wo;
    let k = g.kernel;
    for c in 0..s_in.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * np..][..np];
                for sample in 0..n {
                    let src = &x[(c * n + sample) * s_in.spatial()..][..s_in.spatial()];
                    for i in 0..ho {
                        let dst = &mut row[(sample * ho + i) * wo..][..wo];
                        let yy = (i * g.stride + ky) as isize - g.padding as isize;
                        if yy < 0 || yy >= h {
                            dst.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src_row = &src[yy as usize * s_in.w..][..s_in.w];
                        for (j, d) in dst.iter_mut().enumerate() {
                            let xx = (j * g.stride + kx) as isize - g.padding as isize;
                            *d = if xx < 0 || xx >= w { T::zero() } else { src_row[xx as usize] };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], s_in: Shape, n: usize, g: ConvGeometry, s_out: Shape, x: &mut [T]) {
    let (h, w) = (s_in.h as isize, s_in.w as isize);
    let (ho, wo) = (s_out.h, s_out.w);
    let np = n * ho * wo;
    let k = g.kernel;
    for c in 0..s_in.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * np..][..np];
                for sample in 0..n {
                    let dst = &mut x[(c * n + sample) * s_in.spatial()..][..s_in.spatial()];
                    for i in 0..ho {
                        let yy = (i * g.stride + ky) as isize - g.padding as isize;
                        if yy < 0 || yy >= h {
                            continue;
                        }
                        let src = &row[(sample * ho + i) * wo..][..wo];
                        let dst_row = &mut dst[yy as usize * s_in.w..][..s_in.w];
                        for (j, v) in src.iter().enumerate() {
                            let xx = (j * g.stride + kx) as isize - g.padding as isize;
                            if xx >= 0 && xx < w {
                                dst_row[xx as usize] = dst_row[xx as usize] + *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Calls `f(channel, src_index, dst_offset)` for every centre tap, where
/// `src_index` indexes the full input tensor and `dst_offset` is the
/// position within one channel row of the `C × (N·H'·W')` tap matrix.
fn for_each_centre(s_in: Shape, s_out: Shape, n: usize, g: ConvGeometry, mut f: impl FnMut(usize, usize, usize)) {
    let centre = |o: usize| (o * g.stride + g.kernel / 2) as isize - g.padding as isize;
    for c in 0..s_in.c {
        for sample in 0..n {
            for i in 0..s_out.h {
                let ci = centre(i);
                for j in 0..s_out.w {
                    let cj = centre(j);
                    if ci < 0 || cj < 0 || ci as usize >= s_in.h || cj as usize >= s_in.w {
                        continue;
                    }
                    let src = ((c * n + sample) * s_in.h + ci as usize) * s_in.w + cj as usize;
                    let dst = (sample * s_out.h + i) * s_out.w + j;
                    f(c, src, dst);
                }
            }
        }
    }
}

fn global_avg_pool<T: Scalar>(x: &[T], s: Shape, n: usize) -> Vec<T> {
    let p = s.spatial();
    let inv = T::one() / T::from_f64(p as f64);
    x.chunks(p).take(s.c * n).map(|ch| ch.iter().copied().sum::<T>() * inv).collect()
}

/// `C × N × H × W` → `(C·H·W) × N`.
fn flatten<T: Scalar>(x: &[T], s: Shape, n: usize) -> Vec<T> {
    let p = s.spatial();
    let mut out = vec![T::zero(); x.len()];
    for c in 0..s.c {
        for sample in 0..n {
            for q in 0..p {
                out[(c * p + q) * n + sample] = x[(c * n + sample) * p + q];
            }
        }
    }
    out
}

fn unflatten<T: Scalar>(m: &[T], s: Shape, n: usize) -> Vec<T> {
    let p = s.spatial();
    let mut out = vec![T::zero(); m.len()];
    for c in 0..s.c {
        for sample in 0..n {
            for q in 0..p {
                out[(c * n + sample) * p + q] = m[(c * p + q) * n + sample];
            }
        }
    }
    out
}

fn shortcut_add<T: Scalar>(src: &[T], s_src: Shape, out: &mut [T], s_out: Shape, n: usize) {
    let st = shortcut_stride(s_src, s_out).expect("validated by ModelSpec::shapes");
    for c in 0..s_src.c {
        for sample in 0..n {
            let sb = (c * n + sample) * s_src.spatial();
            let ob = (c * n + sample) * s_out.spatial();
            for i in 0..s_out.h {
                for j in 0..s_out.w {
                    let o = &mut out[ob + i * s_out.w + j];
                    *o = *o + src[sb + i * st * s_src.w + j * st];
                }
            }
        }
    }
}

fn shortcut_backward<T: Scalar>(g: &[T], s_out: Shape, gs: &mut [T], s_src: Shape, n: usize) {
    let st = shortcut_stride(s_src, s_out).expect("validated by ModelSpec::shapes");
    for c in 0..s_src.c {
        for sample in 0..n {
            let sb = (c * n + sample) * s_src.spatial();
            let ob = (c * n + sample) * s_out.spatial();
            for i in 0..s_out.h {
                for j in 0..s_out.w {
                    let d = &mut gs[sb + i * st * s_src.w + j * st];
                    *d = *d + g[ob + i * s_out.w + j];
                }
            }
        }
    }
}

/// Mean softmax cross-entropy over the batch and its gradient with respect to
/// the logits (`classes × N`).
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], labels: &[usize], classes: usize) -> (f64, Vec<T>) {
    let n = labels.len();
    let mut grad = vec![T::zero(); logits.len()];
    let mut total = 0.0;
    let inv_n = 1.0 / n as f64;
    for (s, &label) in labels.iter().enumerate() {
        let col: Vec<f64> = (0..classes).map(|k| logits[k * n + s].as_f64()).collect();
        let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = col.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        total += z.ln() + m - col[label];
        for k in 0..classes {
            let p = exps[k] / z - if k == label { 1.0 } else { 0.0 };
            grad[k * n + s] = T::from_f64(p * inv_n);
        }
    }
    (total * inv_n, grad)
}

/// Softmax cross-entropy of one logit vector.
pub fn loss_cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
    // ln(1 + Σ_{k≠label} e^{l_k - l_label}) keeps precision when the true class dominates
    if logits[label] == m {
        let rest: f64 = logits
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != label)
            .map(|(_, v)| (v - m).exp())
            .sum();
        return rest.ln_1p();
    }
    z.ln() + m - logits[label]
}

/// `N` samples of shape `s`, sample-major, → `C × N × H × W`.
pub fn to_channel_major<T: Scalar>(samples: &[f32], s: Shape, n: usize) -> Vec<T> {
    let p = s.spatial();
    let mut out = vec![T::zero(); samples.len()];
    for sample in 0..n {
        for c in 0..s.c {
            let src = &samples[(sample * s.c + c) * p..][..p];
            let dst = &mut out[(c * n + sample) * p..][..p];
            for (d, v) in dst.iter_mut().zip(src) {
                *d = T::from_f64(*v as f64);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compensation::{init_shared_projections, pointwise_conv_compensation, vera_plus_forward, LayerVectors};
    use crate::model::{build_mlp, build_toy_resnet};
    use rand::Rng;

    fn direct_conv(x: &[f64], s: Shape, w: &[f64], c_out: usize, g: ConvGeometry) -> (Vec<f64>, Shape) {
        let ho = g.out_dim(s.h).unwrap();
        let wo = g.out_dim(s.w).unwrap();
        let mut y = vec![0.0; c_out * ho * wo];
        for o in 0..c_out {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..s.c {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let yy = (i * g.stride + ky) as isize - g.padding as isize;
                                let xx = (j * g.stride + kx) as isize - g.padding as isize;
                                if yy >= 0 && xx >= 0 && (yy as usize) < s.h && (xx as usize) < s.w {
                                    acc += w[((o * s.c + c) * g.kernel + ky) * g.kernel + kx]
                                        * x[(c * s.h + yy as usize) * s.w + xx as usize];
                                }
                            }
                        }
                    }
                    y[(o * ho + i) * wo + j] = acc;
                }
            }
        }
        (y, Shape::new(c_out, ho, wo))
    }

    fn conv_model(c_in: usize, c_out: usize, stride: usize, hw: usize) -> ModelSpec {
        let s = Shape::new(c_in, hw, hw);
        let g = ConvGeometry { kernel: 3, stride, padding: 1 };
        let ho = g.out_dim(hw).unwrap();
        ModelSpec {
            name: "conv".into(),
            input: s,
            classes: c_out * ho * ho,
            layers: vec![LayerSpec::Conv2d {
                c_in,
                c_out,
                kernel: 3,
                stride,
                padding: 1,
                compensated: true,
            }],
        }
    }

    #[test]
    fn conv_matches_direct_dense_construction() {
        let mut rng = crate::rng::rng_from_seed(5);
        for stride in [1, 2] {
            let spec = conv_model(2, 3, stride, 4);
            let mut weights = ModelWeights::init(&spec, 1);
            weights.layers[0].bias = vec![0.0; 3];
            let x: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
            let net: Network<f64> = Network::new(&spec, &weights, None, None).unwrap();
            let got = net.logits(x.clone(), 1);
            let g = ConvGeometry { kernel: 3, stride, padding: 1 };
            let (want, _) = direct_conv(&x, spec.input, &weights.layers[0].weight, 3, g);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
            // linearity in the input
            let x2: Vec<f64> = x.iter().map(|v| 2.5 * v).collect();
            let got2 = net.logits(x2, 1);
            for (a, b) in got2.iter().zip(&got) {
                assert!((a - 2.5 * b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batched_compensation_matches_reference_per_sample() {
        let spec = conv_model(3, 4, 2, 5);
        let weights = ModelWeights::init(&spec, 2);
        let proj = init_shared_projections(2, 3, 4, 9).unwrap();
        let set = ScalingVectorSet {
            set_id: 1,
            drift_time: 1.0,
            layers: vec![LayerVectors {
                d_vec: vec![0.5, -2.0],
                b_vec: vec![1.0, -1.0, 0.25, 3.0],
            }],
        };
        let mut rng = crate::rng::rng_from_seed(3);
        let n = 3;
        let samples: Vec<f32> = (0..n * 75).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let ctx = CompContext { projections: &proj, set: &set };
        let with: Network<f64> = Network::new(&spec, &weights, Some(ctx), None).unwrap();
        let without: Network<f64> = Network::new(&spec, &weights, None, None).unwrap();
        let x: Vec<f64> = to_channel_major(&samples, spec.input, n);
        let a = with.logits(x.clone(), n);
        let b = without.logits(x, n);
        let g = ConvGeometry { kernel: 3, stride: 2, padding: 1 };
        let slice = proj.slice(3, 4).unwrap();
        let per = 9;
        for s in 0..n {
            let xs: Vec<f64> = samples[s * 75..(s + 1) * 75].iter().map(|v| *v as f64).collect();
            let (dy, _) = pointwise_conv_compensation(&xs, (5, 5), g, &slice, &set.layers[0]).unwrap();
            for o in 0..4 {
                for q in 0..per {
                    let idx = (o * n + s) * per + q;
                    assert!((a[idx] - b[idx] - dy[o * per + q]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_b_is_exactly_uncompensated() {
        let spec = build_toy_resnet(4, 1, 3, Shape::new(2, 8, 8)).unwrap();
        let weights = ModelWeights::init(&spec, 4);
        let (din, dout) = spec.max_comp_dims();
        let proj = init_shared_projections(1, din, dout, 1).unwrap();
        let outs: Vec<usize> = spec.compensated_dims().iter().map(|d| d.c_out).collect();
        let set = ScalingVectorSet::initial(0, 1.0, 1, &outs);
        let samples: Vec<f32> = (0..2 * 128).map(|i| ((i * 37) % 11) as f32 / 11.0).collect();
        let x: Vec<f64> = to_channel_major(&samples, spec.input, 2);
        let a = Network::<f64>::new(&spec, &weights, Some(CompContext { projections: &proj, set: &set }), Some(4))
            .unwrap()
            .logits(x.clone(), 2);
        let b = Network::<f64>::new(&spec, &weights, None, Some(4)).unwrap().logits(x, 2);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_input_gives_head_bias() {
        let spec = build_toy_resnet(4, 1, 3, Shape::new(2, 8, 8)).unwrap();
        let mut weights = ModelWeights::init(&spec, 4);
        let last = weights.layers.len() - 1;
        weights.layers[last].bias = vec![0.5, -1.0, 2.0];
        let net: Network<f64> = Network::new(&spec, &weights, None, Some(4)).unwrap();
        assert_eq!(net.logits(vec![0.0; 128], 1), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn linear_compensation_matches_vector_form() {
        let spec = build_mlp(Shape::new(3, 1, 1), &[], 2).unwrap();
        let mut weights = ModelWeights::init(&spec, 0);
        weights.layers[0].weight = vec![1.0, 0.0, -1.0, 2.0, 1.0, 0.0];
        weights.layers[0].bias = vec![0.0, 0.0];
        let proj = init_shared_projections(1, 3, 2, 3).unwrap();
        let vecs = LayerVectors {
            d_vec: vec![1.5],
            b_vec: vec![2.0, -0.5],
        };
        let set = ScalingVectorSet {
            set_id: 0,
            drift_time: 1.0,
            layers: vec![vecs.clone()],
        };
        let x = vec![0.2, -0.7, 1.1];
        let net: Network<f64> =
            Network::new(&spec, &weights, Some(CompContext { projections: &proj, set: &set }), None).unwrap();
        let got = net.logits(x.clone(), 1);
        let dy = vera_plus_forward(&x, &proj.slice(3, 2).unwrap(), &vecs).unwrap();
        let base = [0.2 - 1.1, 0.4 - 0.7];
        for k in 0..2 {
            assert!((got[k] - base[k] - dy[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((loss_cross_entropy(&[0.0; 5], 2) - 5f64.ln()).abs() < 1e-15);
        assert!(loss_cross_entropy(&[50.0, 0.0, 0.0], 0) < 1e-20);
        let l = loss_cross_entropy(&[1.0, 2.0, 3.0], 2);
        assert!((l - 0.407_605_964_444_380_8).abs() < 1e-12, "{l}");
        let (batch, _) = softmax_cross_entropy(&[1.0, 2.0, 3.0], &[2], 3);
        assert!((batch - l).abs() < 1e-12);
    }

    #[test]
    fn f32_and_f64_paths_agree() {
        let spec = build_toy_resnet(4, 1, 3, Shape::new(2, 8, 8)).unwrap();
        let weights = ModelWeights::init(&spec, 8);
        let samples: Vec<f32> = (0..3 * 128).map(|i| ((i * 13) % 7) as f32 / 7.0).collect();
        let a = Network::<f64>::new(&spec, &weights, None, None)
            .unwrap()
            .logits(to_channel_major(&samples, spec.input, 3), 3);
        let b = Network::<f32>::new(&spec, &weights, None, None)
            .unwrap()
            .logits(to_channel_major(&samples, spec.input, 3), 3);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - *y as f64).abs() < 1e-4 * x.abs().max(1.0));
        }
    }

    fn loss_of(spec: &ModelSpec, w: &ModelWeights<f64>, x: &[f64], labels: &[usize]) -> f64 {
        let net: Network<f64> = Network::new(spec, w, None, None).unwrap();
        softmax_cross_entropy(&net.logits(x.to_vec(), labels.len()), labels, spec.classes).0
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let spec = build_toy_resnet(4, 1, 3, Shape::new(2, 6, 6)).unwrap();
        let mut weights = ModelWeights::init(&spec, 11);
        let mut rng = crate::rng::rng_from_seed(12);
        for l in &mut weights.layers {
            l.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
        }
        let n = 3;
        let x: Vec<f64> = (0..n * 72).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels = [0, 2, 1];
        let net: Network<f64> = Network::new(&spec, &weights, None, None).unwrap();
        let trace = net.forward(x.clone(), n);
        let (_, dl) = softmax_cross_entropy(trace.logits(), &labels, 3);
        let g = net
            .backward(&trace, dl, GradRequest { weights: true, compensation: false })
            .weights
            .unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        #[allow(clippy::needless_range_loop)]
        for li in 0..weights.layers.len() {
            for (which, len) in [(0, weights.layers[li].weight.len()), (1, weights.layers[li].bias.len())] {
                for k in (0..len).step_by(7) {
                    let mut w = weights.clone();
                    let p = if which == 0 { &mut w.layers[li].weight } else { &mut w.layers[li].bias };
                    let base = p[k];
                    p[k] = base + h;
                    let up = loss_of(&spec, &w, &x, &labels);
                    let p = if which == 0 { &mut w.layers[li].weight } else { &mut w.layers[li].bias };
                    p[k] = base - h;
                    let down = loss_of(&spec, &w, &x, &labels);
                    let fd = (up - down) / (2.0 * h);
                    let a = if which == 0 { g[li].weight[k] } else { g[li].bias[k] };
                    worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-4));
                }
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
