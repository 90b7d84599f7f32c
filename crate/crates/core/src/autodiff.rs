//! Reverse-mode differentiation over a static chain of layers.
//!
//! A [`Network`] is a fixed sequence of [`LayerSpec`]s whose per-sample
//! shapes are checked once at build time. [`Tape`] runs a batched forward
//! pass and keeps what the backward pass needs. The backward pass can return
//! batch-summed parameter gradients (training) and, for chosen layers, the
//! per-sample layer inputs `h` and pre-activation gradients `δ` from which
//! per-sample weight gradients are contracted (scoring, curvature fitting).
//!
//! Convolutions are lowered to im2col: every output position contributes one
//! patch row to `h` and one row to `δ`, and the layer is treated as dense over
//! patches. Weights are stored `[out, fan_in]`, so a per-sample gradient is the
//! `q×p` matrix `Σ_pos δ_pos h_posᵀ`.

use thiserror::Error;

use crate::tensor::{gemm, MatRef, Rng, Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("layer {layer} ({kind}): {reason}")]
    Shape {
        layer: usize,
        kind: &'static str,
        reason: String,
    },
    #[error("input shape {actual:?} does not match network input {expected:?} (batch dimension first)")]
    Input { expected: Vec<usize>, actual: Vec<usize> },
    #[error("backward called before forward")]
    NoForward,
    #[error("layer {0} is not parameterized")]
    NotParameterized(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    pub bias: bool,
}

impl ConvSpec {
    /// Spec with the output size derived from the usual floor formula.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        in_hw: (usize, usize),
        bias: bool,
    ) -> Self {
        let out = |x: usize| (x + 2 * padding).saturating_sub(kernel) / stride + 1;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            in_hw,
            out_hw: (out(in_hw.0), out(in_hw.1)),
            bias,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_hw.0 * self.out_hw.1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize, bias: bool },
    Conv2d(ConvSpec),
    Activation(Activation),
    Reshape { shape: Vec<usize> },
    /// Nearest-neighbour upsampling of a `[C, H, W]` map by an integer factor.
    Upsample { factor: usize },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d(_) => "conv2d",
            LayerSpec::Activation(_) => "activation",
            LayerSpec::Reshape { .. } => "reshape",
            LayerSpec::Upsample { .. } => "upsample",
        }
    }

    /// `(out, fan_in, has_bias)` for parameterized layers.
    pub fn param_dims(&self) -> Option<(usize, usize, bool)> {
        match self {
            LayerSpec::Dense { inputs, outputs, bias } => Some((*outputs, *inputs, *bias)),
            LayerSpec::Conv2d(c) => Some((c.out_channels, c.patch_len(), c.bias)),
            _ => None,
        }
    }

    fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let err = |reason: String| AutodiffError::Shape { layer: index, kind: self.kind(), reason };
        match self {
            LayerSpec::Dense { inputs, outputs, .. } => {
                if input != [*inputs] {
                    return Err(err(format!("expects [{inputs}], got {input:?}")));
                }
                Ok(vec![*outputs])
            }
            LayerSpec::Conv2d(c) => {
                let expect = [c.in_channels, c.in_hw.0, c.in_hw.1];
                if input != expect {
                    return Err(err(format!("expects {expect:?}, got {input:?}")));
                }
                if c.kernel == 0 || c.stride == 0 {
                    return Err(err("kernel and stride must be positive".into()));
                }
                let derive = |x: usize| -> Option<usize> {
                    let padded = x + 2 * c.padding;
                    (padded >= c.kernel).then(|| (padded - c.kernel) / c.stride + 1)
                };
                let derived = (derive(c.in_hw.0), derive(c.in_hw.1));
                if derived != (Some(c.out_hw.0), Some(c.out_hw.1)) {
                    return Err(err(format!(
                        "declared output {:?} but kernel/stride/padding give {:?}",
                        c.out_hw, derived
                    )));
                }
                Ok(vec![c.out_channels, c.out_hw.0, c.out_hw.1])
            }
            LayerSpec::Activation(_) => Ok(input.to_vec()),
            LayerSpec::Reshape { shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return Err(err(format!("cannot reshape {input:?} to {shape:?}")));
                }
                Ok(shape.clone())
            }
            LayerSpec::Upsample { factor } => match input {
                &[c, h, w] if *factor > 0 => Ok(vec![c, h * factor, w * factor]),
                _ => Err(err(format!("expects [C, H, W] and a positive factor, got {input:?}"))),
            },
        }
    }
}

/// Weights `[out, fan_in]` and optional bias `[out]` of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Param<T> {
    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Static layer chain with its parameters.
#[derive(Debug, Clone)]
pub struct Network<T: Scalar> {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    shapes: Vec<Vec<usize>>,
    params: Vec<Option<Param<T>>>,
}

impl<T: Scalar> Network<T> {
    /// Validates the shape algebra and allocates zero parameters.
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        let mut shapes = vec![input_shape.clone()];
        for (i, layer) in layers.iter().enumerate() {
            let next = layer.output_shape(i, shapes.last().unwrap())?;
            shapes.push(next);
        }
        let params = layers
            .iter()
            .map(|l| {
                l.param_dims().map(|(out, fan_in, bias)| Param {
                    weight: Tensor::zeros(&[out, fan_in]),
                    bias: bias.then(|| Tensor::zeros(&[out])),
                })
            })
            .collect();
        Ok(Self { input_shape, layers, shapes, params })
    }

    /// Uniform `±1/sqrt(fan_in)` initialisation for weights and biases.
    pub fn init(&mut self, rng: &mut Rng) {
        for p in self.params.iter_mut().flatten() {
            let fan_in = p.weight.shape()[1];
            let bound = 1.0 / (fan_in as f64).sqrt();
            p.weight = Tensor::uniform(p.weight.shape(), -bound, bound, rng);
            if let Some(b) = p.bias.as_mut() {
                *b = Tensor::uniform(b.shape(), -bound, bound, rng);
            }
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Option<Param<T>>] {
        &self.params
    }

    pub fn param(&self, layer: usize) -> Result<&Param<T>> {
        self.params
            .get(layer)
            .and_then(Option::as_ref)
            .ok_or(AutodiffError::NotParameterized(layer))
    }

    pub fn param_mut(&mut self, layer: usize) -> Result<&mut Param<T>> {
        self.params
            .get_mut(layer)
            .and_then(Option::as_mut)
            .ok_or(AutodiffError::NotParameterized(layer))
    }

    pub fn parameterized_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.params[i].is_some()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().flatten().map(Param::len).sum()
    }

    /// Visits every scalar parameter slice in layer order (weight, then bias).
    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        for p in self.params.iter_mut().flatten() {
            out.push(p.weight.data_mut());
            if let Some(b) = p.bias.as_mut() {
                out.push(b.data_mut());
            }
        }
        out
    }

    pub fn param_slices(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for p in self.params.iter().flatten() {
            out.push(p.weight.data());
            if let Some(b) = p.bias.as_ref() {
                out.push(b.data());
            }
        }
        out
    }

    pub fn tape(&self) -> Tape<'_, T> {
        Tape { net: self, cache: None }
    }

    /// Forward pass without keeping intermediate state.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = self.tape();
        tape.forward(x)?;
        Ok(tape.cache.unwrap().output)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let shape = x.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            let mut expected = vec![0];
            expected.extend_from_slice(&self.input_shape);
            return Err(AutodiffError::Input { expected, actual: shape.to_vec() });
        }
        Ok(shape[0])
    }
}

/// What a layer kept from the forward pass.
#[derive(Debug, Clone)]
enum Saved<T: Scalar> {
    None,
    /// Layer input; for conv, the im2col matrix `[N·P, fan_in]`.
    Input(Tensor<T>),
}

#[derive(Debug, Clone)]
struct ForwardCache<T: Scalar> {
    batch: usize,
    saved: Vec<Saved<T>>,
    output: Tensor<T>,
}

/// Forward/backward driver for one batch.
pub struct Tape<'n, T: Scalar> {
    net: &'n Network<T>,
    cache: Option<ForwardCache<T>>,
}

/// Batch-summed parameter gradient, shaped like [`Param`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Per-sample statistics of one layer captured during backward.
#[derive(Debug, Clone)]
pub struct LayerCapture<T: Scalar> {
    pub layer: usize,
    /// `[N·P, fan_in (+1 when the layer has a bias)]`
    pub h: Tensor<T>,
    /// `[N·P, out]`
    pub delta: Tensor<T>,
    pub positions: usize,
}

#[derive(Debug, Clone, Default)]
pub struct BackwardOptions {
    pub param_grads: bool,
    /// Layers whose `h`/`δ` should be captured.
    pub capture: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Backward<T: Scalar> {
    pub input_grad: Tensor<T>,
    pub param_grads: Vec<Option<ParamGrad<T>>>,
    pub captures: Vec<LayerCapture<T>>,
}

/// Per-sample gradient of one parameterized layer with the statistics used
/// to build it.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient<T: Scalar> {
    pub layer: usize,
    /// `[out, fan_in(+1)]`, bias in the last column when present.
    pub grad: Tensor<T>,
    /// `[P, fan_in(+1)]`
    pub h: Tensor<T>,
    /// `[P, out]`
    pub delta: Tensor<T>,
}

/// All selected-layer gradients for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradientSet<T: Scalar> {
    pub layers: Vec<LayerGradient<T>>,
}

impl<T: Scalar> LayerGradientSet<T> {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> LayerGradientSet<U> {
        LayerGradientSet {
            layers: self
                .layers
                .iter()
                .map(|l| LayerGradient {
                    layer: l.layer,
                    grad: l.grad.cast(),
                    h: l.h.cast(),
                    delta: l.delta.cast(),
                })
                .collect(),
        }
    }
}

impl<T: Scalar> Tape<'_, T> {
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<&Tensor<T>> {
        let net = self.net;
        let batch = net.check_input(x)?;
        let mut saved = Vec::with_capacity(net.layers.len());
        let mut current = x.clone();
        for (i, layer) in net.layers.iter().enumerate() {
            let out_shape = batched(batch, &net.shapes[i + 1]);
            let (next, keep) = match layer {
                LayerSpec::Dense { inputs, outputs, .. } => {
                    let p = net.params[i].as_ref().unwrap();
                    let mut y = vec![T::zero(); batch * outputs];
                    gemm(
                        T::one(),
                        MatRef::new(current.data(), batch, *inputs),
                        p.weight.as_mat()?.t(),
                        T::zero(),
                        &mut y,
                    );
                    if let Some(b) = &p.bias {
                        for row in y.chunks_mut(*outputs) {
                            for (v, &bv) in row.iter_mut().zip(b.data()) {
                                *v = *v + bv;
                            }
                        }
                    }
                    (Tensor::from_parts(out_shape, y), Saved::Input(current))
                }
                LayerSpec::Conv2d(c) => {
                    let p = net.params[i].as_ref().unwrap();
                    let cols = im2col(current.data(), batch, c);
                    let positions = c.positions();
                    let rows = batch * positions;
                    let mut y = vec![T::zero(); rows * c.out_channels];
                    gemm(
                        T::one(),
                        MatRef::new(&cols, rows, c.patch_len()),
                        p.weight.as_mat()?.t(),
                        T::zero(),
                        &mut y,
                    );
                    let mut out = vec![T::zero(); rows * c.out_channels];
                    for n in 0..batch {
                        for pos in 0..positions {
                            let src = &y[(n * positions + pos) * c.out_channels..][..c.out_channels];
                            for (o, &v) in src.iter().enumerate() {
                                out[(n * c.out_channels + o) * positions + pos] = v;
                            }
                        }
                    }
                    if let Some(b) = &p.bias {
                        for n in 0..batch {
                            for (o, &bv) in b.data().iter().enumerate() {
                                let base = (n * c.out_channels + o) * positions;
                                for v in &mut out[base..base + positions] {
                                    *v = *v + bv;
                                }
                            }
                        }
                    }
                    let cols = Tensor::from_parts(vec![rows, c.patch_len()], cols);
                    (Tensor::from_parts(out_shape, out), Saved::Input(cols))
                }
                LayerSpec::Activation(Activation::Relu) => {
                    let y = current.data().iter().map(|&v| v.max(T::zero())).collect();
                    (Tensor::from_parts(out_shape, y), Saved::Input(current))
                }
                LayerSpec::Reshape { .. } => (current.reshape(&out_shape)?, Saved::None),
                LayerSpec::Upsample { factor } => {
                    let y = upsample(current.data(), batch, &net.shapes[i], *factor);
                    (Tensor::from_parts(out_shape, y), Saved::None)
                }
            };
            saved.push(keep);
            current = next;
        }
        current.check_finite("forward")?;
        self.cache = Some(ForwardCache { batch, saved, output: current });
        Ok(&self.cache.as_ref().unwrap().output)
    }

    pub fn output(&self) -> Option<&Tensor<T>> {
        self.cache.as_ref().map(|c| &c.output)
    }

    /// Backpropagates `grad_output` (∂loss/∂output, batched). Does not modify
    /// the cached forward state, so repeated calls return identical results.
    pub fn backward(&self, grad_output: &Tensor<T>, opts: &BackwardOptions) -> Result<Backward<T>> {
        let cache = self.cache.as_ref().ok_or(AutodiffError::NoForward)?;
        let net = self.net;
        let batch = cache.batch;
        if grad_output.shape() != cache.output.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                left: cache.output.shape().to_vec(),
                right: grad_output.shape().to_vec(),
            }
            .into());
        }
        let mut param_grads: Vec<Option<ParamGrad<T>>> = vec![None; net.layers.len()];
        let mut captures = Vec::new();
        let mut grad = grad_output.data().to_vec();

        for (i, layer) in net.layers.iter().enumerate().rev() {
            let in_len = batch * net.shapes[i].iter().product::<usize>();
            grad = match layer {
                LayerSpec::Dense { inputs, outputs, bias } => {
                    let Saved::Input(x) = &cache.saved[i] else { unreachable!() };
                    let p = net.params[i].as_ref().unwrap();
                    let dy = MatRef::new(&grad, batch, *outputs);
                    let xm = MatRef::new(x.data(), batch, *inputs);
                    if opts.param_grads {
                        param_grads[i] = Some(weight_grads(dy, xm, *outputs, *inputs, *bias));
                    }
                    if opts.capture.contains(&i) {
                        captures.push(LayerCapture {
                            layer: i,
                            h: augment(x.data(), batch, *inputs, *bias),
                            delta: Tensor::from_parts(vec![batch, *outputs], grad.clone()),
                            positions: 1,
                        });
                    }
                    let mut dx = vec![T::zero(); in_len];
                    gemm(T::one(), dy, p.weight.as_mat()?, T::zero(), &mut dx);
                    dx
                }
                LayerSpec::Conv2d(c) => {
                    let Saved::Input(cols) = &cache.saved[i] else { unreachable!() };
                    let p = net.params[i].as_ref().unwrap();
                    let positions = c.positions();
                    let rows = batch * positions;
                    let q = c.out_channels;
                    let mut dy = vec![T::zero(); rows * q];
                    for n in 0..batch {
                        for o in 0..q {
                            let src = &grad[(n * q + o) * positions..][..positions];
                            for (pos, &v) in src.iter().enumerate() {
                                dy[(n * positions + pos) * q + o] = v;
                            }
                        }
                    }
                    let dym = MatRef::new(&dy, rows, q);
                    let colm = MatRef::new(cols.data(), rows, c.patch_len());
                    if opts.param_grads {
                        param_grads[i] = Some(weight_grads(dym, colm, q, c.patch_len(), c.bias));
                    }
                    let mut dcols = vec![T::zero(); rows * c.patch_len()];
                    gemm(T::one(), dym, p.weight.as_mat()?, T::zero(), &mut dcols);
                    if opts.capture.contains(&i) {
                        captures.push(LayerCapture {
                            layer: i,
                            h: augment(cols.data(), rows, c.patch_len(), c.bias),
                            delta: Tensor::from_parts(vec![rows, q], dy),
                            positions,
                        });
                    }
                    col2im(&dcols, batch, c)
                }
                LayerSpec::Activation(Activation::Relu) => {
                    let Saved::Input(x) = &cache.saved[i] else { unreachable!() };
                    grad.iter()
                        .zip(x.data())
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect()
                }
                LayerSpec::Reshape { .. } => grad,
                LayerSpec::Upsample { factor } => upsample_backward(&grad, batch, &net.shapes[i], *factor),
            };
        }
        captures.reverse();
        let input_grad = Tensor::from_parts(batched(batch, &net.input_shape), grad);
        input_grad.check_finite("backward")?;
        Ok(Backward { input_grad, param_grads, captures })
    }
}

impl<T: Scalar> LayerCapture<T> {
    /// Splits the batched capture into per-sample gradients `δ_nᵀ h_n`.
    pub fn per_sample(&self) -> Vec<LayerGradient<T>> {
        let (rows, p) = self.h.dims2().unwrap();
        let q = self.delta.shape()[1];
        let batch = rows / self.positions;
        (0..batch)
            .map(|n| {
                let h = self.h.data()[n * self.positions * p..][..self.positions * p].to_vec();
                let delta = self.delta.data()[n * self.positions * q..][..self.positions * q].to_vec();
                let mut grad = vec![T::zero(); q * p];
                gemm(
                    T::one(),
                    MatRef::new(&delta, self.positions, q).t(),
                    MatRef::new(&h, self.positions, p),
                    T::zero(),
                    &mut grad,
                );
                LayerGradient {
                    layer: self.layer,
                    grad: Tensor::from_parts(vec![q, p], grad),
                    h: Tensor::from_parts(vec![self.positions, p], h),
                    delta: Tensor::from_parts(vec![self.positions, q], delta),
                }
            })
            .collect()
    }
}

/// Regroups layer captures into one [`LayerGradientSet`] per sample, layers in
/// the order of `captures`.
pub fn per_sample_gradients<T: Scalar>(captures: &[LayerCapture<T>]) -> Vec<LayerGradientSet<T>> {
    let split: Vec<Vec<LayerGradient<T>>> = captures.iter().map(LayerCapture::per_sample).collect();
    let batch = split.first().map_or(0, Vec::len);
    let mut iters: Vec<_> = split.into_iter().map(Vec::into_iter).collect();
    (0..batch)
        .map(|_| LayerGradientSet { layers: iters.iter_mut().map(|it| it.next().unwrap()).collect() })
        .collect()
}

fn batched(batch: usize, shape: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(shape.len() + 1);
    s.push(batch);
    s.extend_from_slice(shape);
    s
}

fn weight_grads<T: Scalar>(
    dy: MatRef<'_, T>,
    x: MatRef<'_, T>,
    out: usize,
    fan_in: usize,
    bias: bool,
) -> ParamGrad<T> {
    let mut w = vec![T::zero(); out * fan_in];
    gemm(T::one(), dy.t(), x, T::zero(), &mut w);
    let bias = bias.then(|| {
        let mut b = vec![T::zero(); out];
        for row in dy.data.chunks(out) {
            for (acc, &v) in b.iter_mut().zip(row) {
                *acc = *acc + v;
            }
        }
        Tensor::from_parts(vec![out], b)
    });
    ParamGrad { weight: Tensor::from_parts(vec![out, fan_in], w), bias }
}

/// Appends a constant-one column when the layer has a bias, so the bias
/// gradient is the last column of `δᵀ h`.
fn augment<T: Scalar>(data: &[T], rows: usize, cols: usize, bias: bool) -> Tensor<T> {
    if !bias {
        return Tensor::from_parts(vec![rows, cols], data.to_vec());
    }
    let mut out = Vec::with_capacity(rows * (cols + 1));
    for row in data.chunks(cols) {
        out.extend_from_slice(row);
        out.push(T::one());
    }
    Tensor::from_parts(vec![rows, cols + 1], out)
}

/// `[N, C, H, W]` -> `[N·P, C·k·k]`, patch index `c·k·k + ki·k + kj`.
fn im2col<T: Scalar>(x: &[T], batch: usize, c: &ConvSpec) -> Vec<T> {
    let (h, w) = c.in_hw;
    let (oh, ow) = c.out_hw;
    let k = c.kernel;
    let patch = c.patch_len();
    let mut cols = vec![T::zero(); batch * oh * ow * patch];
    for n in 0..batch {
        let img = &x[n * c.in_channels * h * w..][..c.in_channels * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut cols[((n * oh + oy) * ow + ox) * patch..][..patch];
                for ch in 0..c.in_channels {
                    for ki in 0..k {
                        let iy = (oy * c.stride + ki) as isize - c.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let ix = (ox * c.stride + kj) as isize - c.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            row[(ch * k + ki) * k + kj] = img[(ch * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], batch: usize, c: &ConvSpec) -> Vec<T> {
    let (h, w) = c.in_hw;
    let (oh, ow) = c.out_hw;
    let k = c.kernel;
    let patch = c.patch_len();
    let mut x = vec![T::zero(); batch * c.in_channels * h * w];
    for n in 0..batch {
        let img = &mut x[n * c.in_channels * h * w..][..c.in_channels * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &cols[((n * oh + oy) * ow + ox) * patch..][..patch];
                for ch in 0..c.in_channels {
                    for ki in 0..k {
                        let iy = (oy * c.stride + ki) as isize - c.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let ix = (ox * c.stride + kj) as isize - c.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let dst = &mut img[(ch * h + iy as usize) * w + ix as usize];
                            *dst = *dst + row[(ch * k + ki) * k + kj];
                        }
                    }
                }
            }
        }
    }
    x
}

fn upsample<T: Scalar>(x: &[T], batch: usize, shape: &[usize], f: usize) -> Vec<T> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![T::zero(); batch * c * oh * ow];
    for plane in 0..batch * c {
        let src = &x[plane * h * w..][..h * w];
        let dst = &mut out[plane * oh * ow..][..oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / f) * w + xx / f];
            }
        }
    }
    out
}

fn upsample_backward<T: Scalar>(g: &[T], batch: usize, shape: &[usize], f: usize) -> Vec<T> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![T::zero(); batch * c * h * w];
    for plane in 0..batch * c {
        let src = &g[plane * oh * ow..][..oh * ow];
        let dst = &mut out[plane * h * w..][..h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let d = &mut dst[(y / f) * w + xx / f];
                *d = *d + src[y * ow + xx];
            }
        }
    }
    out
}

/// Result of comparing backprop gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(layer, flat index within weight then bias)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Central-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;
/// Floor on the relative-error denominator, so entries that are zero up to
/// rounding do not dominate the report.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Scalar probe loss used by [`grad_check`]: `½‖y‖² + ⟨r, y⟩`, `r` seeded.
fn probe_loss(y: &Tensor<f64>, r: &[f64]) -> (f64, Tensor<f64>) {
    let loss = y.data().iter().zip(r).map(|(&v, &w)| 0.5 * v * v + w * v).sum();
    let grad = y.data().iter().zip(r).map(|(&v, &w)| v + w).collect();
    (loss, Tensor::from_parts(y.shape().to_vec(), grad))
}

/// Finite-difference check of every parameter of `net` on `input`.
pub fn grad_check(net: &Network<f64>, input: &Tensor<f64>, tolerance: f64) -> Result<GradCheckReport> {
    let mut tape = net.tape();
    let y = tape.forward(input)?.clone();
    let r: Vec<f64> = {
        let mut rng = Rng::new(0x9e37);
        (0..y.len()).map(|_| rng.gaussian()).collect()
    };
    let (_, dy) = probe_loss(&y, &r);
    let back = tape.backward(&dy, &BackwardOptions { param_grads: true, capture: vec![] })?;
    grad_check_against(net, input, &back.param_grads, tolerance, |y| probe_loss(y, &r).0)
}

/// Compares supplied analytic gradients with central differences of `loss`.
pub fn grad_check_against(
    net: &Network<f64>,
    input: &Tensor<f64>,
    analytic: &[Option<ParamGrad<f64>>],
    tolerance: f64,
    loss: impl Fn(&Tensor<f64>) -> f64,
) -> Result<GradCheckReport> {
    let mut probe = net.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, tolerance };
    for layer in net.parameterized_layers() {
        let g = analytic
            .get(layer)
            .and_then(Option::as_ref)
            .ok_or(AutodiffError::NotParameterized(layer))?;
        let mut flat: Vec<f64> = g.weight.data().to_vec();
        if let Some(b) = &g.bias {
            flat.extend_from_slice(b.data());
        }
        let wlen = g.weight.len();
        for (idx, &a) in flat.iter().enumerate() {
            let eval = |probe: &mut Network<f64>, delta: f64| -> Result<f64> {
                let p = probe.param_mut(layer)?;
                let slot = if idx < wlen {
                    &mut p.weight.data_mut()[idx]
                } else {
                    &mut p.bias.as_mut().unwrap().data_mut()[idx - wlen]
                };
                let orig = *slot;
                *slot = orig + delta;
                let out = probe.predict(input);
                let p = probe.param_mut(layer)?;
                let slot = if idx < wlen {
                    &mut p.weight.data_mut()[idx]
                } else {
                    &mut p.bias.as_mut().unwrap().data_mut()[idx - wlen]
                };
                *slot = orig;
                Ok(loss(&out?))
            };
            let plus = eval(&mut probe, GRAD_CHECK_STEP)?;
            let minus = eval(&mut probe, -GRAD_CHECK_STEP)?;
            let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((layer, idx));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_encoder(seed: u64) -> Network<f64> {
        let c1 = ConvSpec::new(1, 3, 4, 2, 1, (8, 8), false);
        let c2 = ConvSpec::new(3, 4, 4, 2, 1, c1.out_hw, false);
        let flat = c2.out_channels * c2.positions();
        let mut net = Network::new(
            vec![1, 8, 8],
            vec![
                LayerSpec::Conv2d(c1),
                LayerSpec::Activation(Activation::Relu),
                LayerSpec::Conv2d(c2),
                LayerSpec::Activation(Activation::Relu),
                LayerSpec::Reshape { shape: vec![flat] },
                LayerSpec::Dense { inputs: flat, outputs: 5, bias: true },
            ],
        )
        .unwrap();
        net.init(&mut Rng::new(seed));
        net
    }

    fn sliding_window(x: &[f64], h: usize, w: usize, k: &[f64], ks: usize, stride: usize, pad: usize) -> Vec<f64> {
        let oh = (h + 2 * pad - ks) / stride + 1;
        let ow = (w + 2 * pad - ks) / stride + 1;
        let mut out = vec![0.0; oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ki in 0..ks {
                    for kj in 0..ks {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += x[iy as usize * w + ix as usize] * k[ki * ks + kj];
                        }
                    }
                }
                out[oy * ow + ox] = acc;
            }
        }
        out
    }

    #[test]
    fn zero_weights_give_zero_preactivations() {
        let net =
            Network::<f32>::new(vec![3], vec![LayerSpec::Dense { inputs: 3, outputs: 2, bias: false }]).unwrap();
        let x = Tensor::gaussian(&[4, 3], &mut Rng::new(1));
        assert!(net.predict(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let mut net =
            Network::<f32>::new(vec![3], vec![LayerSpec::Dense { inputs: 3, outputs: 3, bias: false }]).unwrap();
        net.param_mut(0).unwrap().weight = Tensor::eye(3);
        let x = Tensor::gaussian(&[2, 3], &mut Rng::new(1));
        assert_eq!(net.predict(&x).unwrap(), x);
    }

    #[test]
    fn conv_matches_sliding_window() {
        for (stride, pad) in [(1, 0), (2, 1), (2, 0)] {
            let c = ConvSpec::new(1, 1, 3, stride, pad, (6, 6), false);
            let mut net = Network::<f64>::new(vec![1, 6, 6], vec![LayerSpec::Conv2d(c)]).unwrap();
            net.init(&mut Rng::new(5));
            let x = Tensor::gaussian(&[1, 1, 6, 6], &mut Rng::new(6));
            let y = net.predict(&x).unwrap();
            let expect = sliding_window(x.data(), 6, 6, net.param(0).unwrap().weight.data(), 3, stride, pad);
            assert_eq!(y.len(), expect.len());
            for (a, b) in y.data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn multi_channel_conv_matches_per_channel_sum() {
        let c = ConvSpec::new(2, 3, 4, 2, 1, (6, 6), true);
        let mut net = Network::<f64>::new(vec![2, 6, 6], vec![LayerSpec::Conv2d(c.clone())]).unwrap();
        net.init(&mut Rng::new(2));
        let x = Tensor::gaussian(&[1, 2, 6, 6], &mut Rng::new(3));
        let y = net.predict(&x).unwrap();
        let p = net.param(0).unwrap();
        let positions = c.positions();
        for o in 0..3 {
            let mut expect = vec![p.bias.as_ref().unwrap().data()[o]; positions];
            for ch in 0..2 {
                let k = &p.weight.data()[o * 32 + ch * 16..][..16];
                let plane = &x.data()[ch * 36..][..36];
                for (e, v) in expect.iter_mut().zip(sliding_window(plane, 6, 6, k, 4, 2, 1)) {
                    *e += v;
                }
            }
            for (a, b) in y.data()[o * positions..][..positions].iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_algebra_checked_at_build() {
        let mut c = ConvSpec::new(1, 2, 4, 2, 1, (28, 28), false);
        c.out_hw = (13, 14);
        let err = Network::<f32>::new(vec![1, 28, 28], vec![LayerSpec::Conv2d(c)]).unwrap_err();
        assert!(matches!(err, AutodiffError::Shape { layer: 0, .. }));
        let err = Network::<f32>::new(vec![4], vec![LayerSpec::Dense { inputs: 5, outputs: 1, bias: false }]);
        assert!(err.is_err());
        let err = Network::<f32>::new(vec![4], vec![LayerSpec::Reshape { shape: vec![3] }]);
        assert!(err.is_err());
    }

    #[test]
    fn backward_before_forward_is_an_error() {
        let net = toy_encoder(1);
        let tape = net.tape();
        let g = Tensor::zeros(&[1, 5]);
        assert!(matches!(tape.backward(&g, &BackwardOptions::default()), Err(AutodiffError::NoForward)));
    }

    #[test]
    fn zero_loss_gives_zero_gradients() {
        let net = toy_encoder(2);
        let mut tape = net.tape();
        tape.forward(&Tensor::gaussian(&[3, 1, 8, 8], &mut Rng::new(1))).unwrap();
        let back = tape
            .backward(&Tensor::zeros(&[3, 5]), &BackwardOptions { param_grads: true, capture: vec![0, 2, 5] })
            .unwrap();
        for g in back.param_grads.iter().flatten() {
            assert_eq!(g.weight.max_abs(), 0.0);
        }
        for s in per_sample_gradients(&back.captures) {
            assert!(s.layers.iter().all(|l| l.grad.max_abs() == 0.0));
        }
    }

    #[test]
    fn dense_sum_loss_gradient_is_input_outer_ones() {
        // y = Wx, loss = Σy  =>  ∂loss/∂W[o, i] = x[i] for every o.
        let mut net =
            Network::<f64>::new(vec![3], vec![LayerSpec::Dense { inputs: 3, outputs: 2, bias: false }]).unwrap();
        net.init(&mut Rng::new(4));
        let x = Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut tape = net.tape();
        tape.forward(&x).unwrap();
        let back = tape
            .backward(&Tensor::full(&[1, 2], 1.0), &BackwardOptions { param_grads: true, capture: vec![0] })
            .unwrap();
        let g = back.param_grads[0].as_ref().unwrap();
        assert_eq!(g.weight.data(), &[1.0, -2.0, 0.5, 1.0, -2.0, 0.5]);
        let set = per_sample_gradients(&back.captures);
        assert_eq!(set[0].layers[0].grad, g.weight);
    }

    #[test]
    fn finite_differences_on_toy_encoder() {
        let net = toy_encoder(3);
        let x = Tensor::gaussian(&[2, 1, 8, 8], &mut Rng::new(9));
        let report = grad_check(&net, &x, 1e-4).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.checked, net.num_params());
    }

    #[test]
    fn linear_model_check_is_near_machine_precision() {
        let mut net =
            Network::<f64>::new(vec![4], vec![LayerSpec::Dense { inputs: 4, outputs: 3, bias: true }]).unwrap();
        net.init(&mut Rng::new(8));
        let x = Tensor::gaussian(&[5, 4], &mut Rng::new(2));
        let report = grad_check(&net, &x, 1e-4).unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let net = toy_encoder(4);
        let x = Tensor::gaussian(&[1, 1, 8, 8], &mut Rng::new(3));
        let mut tape = net.tape();
        let y = tape.forward(&x).unwrap().clone();
        let back = tape.backward(&y, &BackwardOptions { param_grads: true, capture: vec![] }).unwrap();
        let mut grads = back.param_grads.clone();
        let w = grads[0].as_mut().unwrap().weight.data_mut();
        w[3] = w[3] * 1.5 + 0.1;
        let report =
            grad_check_against(&net, &x, &grads, 1e-4, |y| 0.5 * y.data().iter().map(|v| v * v).sum::<f64>())
                .unwrap();
        assert!(!report.passed());
        assert_eq!(report.worst, Some((0, 3)));
    }

    #[test]
    fn per_sample_gradients_sum_to_batch_gradient() {
        let net = toy_encoder(5);
        let x = Tensor::gaussian(&[6, 1, 8, 8], &mut Rng::new(4));
        let mut tape = net.tape();
        let y = tape.forward(&x).unwrap().clone();
        let opts = BackwardOptions { param_grads: true, capture: net.parameterized_layers() };
        let back = tape.backward(&y, &opts).unwrap();
        let sets = per_sample_gradients(&back.captures);
        assert_eq!(sets.len(), 6);
        for (k, &layer) in opts.capture.iter().enumerate() {
            let batch = back.param_grads[layer].as_ref().unwrap();
            let mut sum = Tensor::zeros(sets[0].layers[k].grad.shape());
            for s in &sets {
                sum = sum.add(&s.layers[k].grad).unwrap();
            }
            let (q, p) = sum.dims2().unwrap();
            let has_bias = batch.bias.is_some();
            for o in 0..q {
                let wcols = if has_bias { p - 1 } else { p };
                for i in 0..wcols {
                    let a = sum.at2(o, i);
                    let b = batch.weight.at2(o, i);
                    assert!((a - b).abs() <= 1e-10 * b.abs().max(1e-12), "{a} vs {b}");
                }
                if has_bias {
                    let b = batch.bias.as_ref().unwrap().data()[o];
                    assert!((sum.at2(o, p - 1) - b).abs() <= 1e-10 * b.abs().max(1e-12));
                }
            }
        }
    }

    #[test]
    fn conv_gradient_is_patch_contraction() {
        let net = toy_encoder(6);
        let x = Tensor::gaussian(&[1, 1, 8, 8], &mut Rng::new(5));
        let mut tape = net.tape();
        let y = tape.forward(&x).unwrap().clone();
        let back = tape.backward(&y, &BackwardOptions { param_grads: false, capture: vec![0] }).unwrap();
        let g = &per_sample_gradients(&back.captures)[0].layers[0];
        let (positions, p) = g.h.dims2().unwrap();
        let q = g.delta.shape()[1];
        for o in 0..q {
            for i in 0..p {
                let expect: f64 = (0..positions).map(|pos| g.delta.at2(pos, o) * g.h.at2(pos, i)).sum();
                assert!((g.grad.at2(o, i) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_repeatable() {
        let net = toy_encoder(7);
        let mut tape = net.tape();
        let y = tape.forward(&Tensor::gaussian(&[2, 1, 8, 8], &mut Rng::new(6))).unwrap().clone();
        let opts = BackwardOptions { param_grads: true, capture: vec![0, 2] };
        let a = tape.backward(&y, &opts).unwrap();
        let b = tape.backward(&y, &opts).unwrap();
        assert_eq!(a.param_grads, b.param_grads);
        assert_eq!(a.input_grad, b.input_grad);
    }

    #[test]
    fn upsample_and_its_adjoint() {
        let net = Network::<f64>::new(vec![1, 2, 2], vec![LayerSpec::Upsample { factor: 2 }]).unwrap();
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut tape = net.tape();
        let y = tape.forward(&x).unwrap().clone();
        assert_eq!(&y.data()[..4], &[1.0, 1.0, 2.0, 2.0]);
        let back = tape.backward(&Tensor::full(&[1, 1, 4, 4], 1.0), &BackwardOptions::default()).unwrap();
        assert_eq!(back.input_grad.data(), &[4.0, 4.0, 4.0, 4.0]);
    }
}
