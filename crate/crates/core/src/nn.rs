//! Parameter storage and the small set of differentiable layers the model is
//! built from.
//!
//! Layers run in either 32-bit (training) or 64-bit (gradient checks)
//! precision. Weights are initialised from a seeded ChaCha stream
//! owned by [`ParamStore`], which makes model construction reproducible.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Shape, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{config_err, shape_err, Error, Result};

/// Multiply-accumulate instrumentation. Counters are per thread so that
/// concurrent forward passes do not interfere.
pub mod counter {
    use std::cell::Cell;

    thread_local! {
        static MACS: Cell<u64> = const { Cell::new(0) };
        static SCORE_MACS: Cell<u64> = const { Cell::new(0) };
        static CONV_MACS: Cell<u64> = const { Cell::new(0) };
    }

    pub fn reset() {
        MACS.with(|c| c.set(0));
        SCORE_MACS.with(|c| c.set(0));
        CONV_MACS.with(|c| c.set(0));
    }

    pub fn add_macs(n: u64) {
        MACS.with(|c| c.set(c.get() + n));
    }

    /// Records the multiply-accumulates spent on attention score matrices
    /// (query-key products). These are also added to the total.
    pub fn add_score_macs(n: u64) {
        SCORE_MACS.with(|c| c.set(c.get() + n));
        add_macs(n);
    }

    /// Records convolution multiply-accumulates (dense and depthwise), also
    /// added to the total.
    pub fn add_conv_macs(n: u64) {
        CONV_MACS.with(|c| c.set(c.get() + n));
        add_macs(n);
    }

    pub fn macs() -> u64 {
        MACS.with(|c| c.get())
    }

    pub fn score_macs() -> u64 {
        SCORE_MACS.with(|c| c.get())
    }

    pub fn conv_macs() -> u64 {
        CONV_MACS.with(|c| c.get())
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
}

struct StoreInner {
    vars: BTreeMap<String, Var>,
    buffers: BTreeSet<String>,
    rng: ChaCha8Rng,
}

/// Owner of every named parameter of a model.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<StoreInner>>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("tensors", &self.len())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(StoreInner {
                vars: BTreeMap::new(),
                buffers: BTreeSet::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            dtype,
            device: Device::Cpu,
        }
    }

    /// Number of named tensors, buffers included.
    pub fn len(&self) -> usize {
        self.lock().vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lock(&self) -> MutexGuard<'_, StoreInner> {
        self.inner.lock().expect("parameter store poisoned")
    }

    pub fn root(&self) -> Params {
        Params {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// All variables (trainable and buffers) keyed by dotted name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.lock()
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn is_buffer(&self, name: &str) -> bool {
        self.lock().buffers.contains(name)
    }

    /// Trainable variables whose name satisfies `keep`.
    pub fn trainable(&self, keep: impl Fn(&str) -> bool) -> Vec<(String, Var)> {
        let inner = self.lock();
        inner
            .vars
            .iter()
            .filter(|(k, _)| !inner.buffers.contains(*k) && keep(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.lock().vars.get(name).cloned()
    }

    /// Deep copy of every stored tensor.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        let inner = self.lock();
        let mut out = BTreeMap::new();
        for (k, v) in inner.vars.iter() {
            out.insert(k.clone(), v.as_tensor().detach().copy()?);
        }
        Ok(out)
    }

    /// Overwrites stored values. Every stored name must be present in `tensors`
    /// with a matching shape; values are converted to the store's dtype.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let inner = self.lock();
        for (name, var) in inner.vars.iter() {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    fn create(&self, name: String, shape: Shape, init: Init, buffer: bool) -> Result<Var> {
        let mut inner = self.lock();
        if inner.vars.contains_key(&name) {
            return Err(shape_err!("parameter `{name}` declared twice"));
        }
        let n = shape.elem_count();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(bound) => (0..n)
                .map(|_| inner.rng.random_range(-bound..=bound))
                .collect(),
            Init::Normal(std) => (0..n)
                .map(|_| std * inner.rng.sample::<f64, _>(StandardNormal))
                .collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        inner.vars.insert(name.clone(), var.clone());
        if buffer {
            inner.buffers.insert(name);
        }
        Ok(var)
    }
}

/// A prefixed view into a [`ParamStore`].
#[derive(Clone)]
pub struct Params {
    store: ParamStore,
    prefix: String,
}

impl Params {
    pub fn pp(&self, name: impl std::fmt::Display) -> Params {
        Params {
            store: self.store.clone(),
            prefix: self.path(&name.to_string()),
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    pub fn weight(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        let var = self.store.create(self.path(name), shape.into(), init, false)?;
        Ok(var.as_tensor().clone())
    }

    /// A non-trainable stored value, such as a running statistic.
    pub fn buffer(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Var> {
        self.store.create(self.path(name), shape.into(), init, true)
    }
}

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// 2-D convolution. Pointwise kernels are lowered to a matrix product.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        p: &Params,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = fan_in_bound(in_channels * kernel * kernel);
        let weight = p.weight(
            "weight",
            (out_channels, in_channels, kernel, kernel),
            Init::Uniform(bound),
        )?;
        let bias = if bias {
            Some(p.weight("bias", out_channels, Init::Uniform(bound))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(shape_err!(
                "convolution expects {} input channels, got {c}",
                self.in_channels
            ));
        }
        let y = if self.kernel == 1 && self.stride == 1 {
            let wmat = self.weight.reshape((self.out_channels, c))?;
            wmat.broadcast_matmul(&x.reshape((b, c, h * w))?)?
                .reshape((b, self.out_channels, h, w))?
        } else {
            x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?
        };
        let (_, _, oh, ow) = y.dims4()?;
        counter::add_conv_macs(
            (b * oh * ow * self.out_channels * c * self.kernel * self.kernel) as u64,
        );
        match &self.bias {
            Some(bias) => Ok(y.broadcast_add(&bias.reshape((1, self.out_channels, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Depthwise 3x3 convolution with zero padding.
#[derive(Debug, Clone)]
pub struct DepthwiseConv3x3 {
    weight: Tensor,
    channels: usize,
}

impl DepthwiseConv3x3 {
    pub fn new(p: &Params, channels: usize) -> Result<Self> {
        let weight = p.weight("weight", (channels, 9), Init::Uniform(fan_in_bound(9)))?;
        Ok(Self { weight, channels })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_strided(x, 1)
    }

    /// Stride 1 or 2. Stride 2 equals stride 1 followed by keeping every
    /// second row and column, without computing the discarded outputs.
    pub fn forward_strided(&self, x: &Tensor, stride: usize) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(shape_err!(
                "depthwise convolution expects {} channels, got {c}",
                self.channels
            ));
        }
        if stride != 1 && stride != 2 {
            return Err(config_err!("depthwise stride must be 1 or 2, got {stride}"));
        }
        if stride == 2 && (h % 2 != 0 || w % 2 != 0) {
            return Err(shape_err!("{h}x{w} cannot be subsampled by 2"));
        }
        let y = crate::kernels::depthwise3x3(x, &self.weight, stride)?;
        counter::add_conv_macs((b * c * (h / stride) * (w / stride) * 9) as u64);
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
    in_features: usize,
    out_features: usize,
}

impl Linear {
    pub fn new(p: &Params, in_features: usize, out_features: usize, bias: bool) -> Result<Self> {
        let bound = fan_in_bound(in_features);
        let weight = p.weight("weight", (out_features, in_features), Init::Uniform(bound))?;
        let bias = if bias {
            Some(p.weight("bias", out_features, Init::Uniform(bound))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    /// Applies the map to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or_else(|| shape_err!("linear on a scalar"))?;
        if last != self.in_features {
            return Err(shape_err!(
                "linear expects {} input features, got {last}",
                self.in_features
            ));
        }
        let rows = x.elem_count() / last;
        let y = x.reshape((rows, last))?.matmul(&self.weight.t()?)?;
        counter::add_macs((rows * self.in_features * self.out_features) as u64);
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_features;
        Ok(y.reshape(out_dims)?)
    }
}

/// Layer normalisation over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(p: &Params, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: p.weight("weight", dim, Init::Ones)?,
            bias: p.weight("bias", dim, Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)?)
    }
}

/// Batch normalisation over NCHW tensors with running statistics kept as
/// non-trainable buffers.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    channels: usize,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(p: &Params, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: p.weight("weight", channels, Init::Ones)?,
            bias: p.weight("bias", channels, Init::Zeros)?,
            running_mean: p.buffer("running_mean", channels, Init::Zeros)?,
            running_var: p.buffer("running_var", channels, Init::Ones)?,
            channels,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(shape_err!(
                "batch norm expects {} channels, got {c}",
                self.channels
            ));
        }
        if !train {
            let mean = self.running_mean.as_tensor().to_dtype(DType::F64)?.to_vec1::<f64>()?;
            let var = self.running_var.as_tensor().to_dtype(DType::F64)?.to_vec1::<f64>()?;
            return Ok(crate::kernels::batch_norm(x, &self.weight, &self.bias, &mean, &var, self.eps, false)?);
        }
        let (mean, var) = crate::kernels::channel_stats(x)?;
        let n = (b * h * w) as f64;
        let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        let m = self.momentum;
        let dev = x.device();
        let batch_mean = Tensor::from_slice(&mean, c, dev)?.to_dtype(x.dtype())?;
        let batch_var = Tensor::from_slice(&var, c, dev)?.to_dtype(x.dtype())?;
        self.running_mean
            .set(&((self.running_mean.as_tensor() * (1.0 - m))? + (batch_mean * m)?)?)?;
        self.running_var
            .set(&((self.running_var.as_tensor() * (1.0 - m))? + (batch_var * (m * unbiased))?)?)?;
        Ok(crate::kernels::batch_norm(x, &self.weight, &self.bias, &mean, &var, self.eps, true)?)
    }
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(crate::kernels::gelu(x)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok((x * sigmoid(x)?)?)
}

pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Row-stochastic matrix (out x in) implementing 1-D linear interpolation with
/// half-pixel centres and edge clamping.
pub fn interp_matrix(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[o * input + i0] += 1.0 - frac;
        m[o * input + i1] += frac;
    }
    m
}

/// Row-stochastic matrix (out x in) implementing 1-D adaptive average pooling.
pub fn adaptive_pool_matrix(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    for o in 0..output {
        let start = (o * input) / output;
        let end = ((o + 1) * input).div_ceil(output);
        let w = 1.0 / (end - start) as f64;
        for i in start..end {
            m[o * input + i] = w;
        }
    }
    m
}

fn separable(x: &Tensor, rows: Vec<f64>, cols: Vec<f64>, out: (usize, usize)) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (oh, ow) = out;
    let dev = x.device();
    let rows = Tensor::from_vec(rows, (oh, h), dev)?.to_dtype(x.dtype())?;
    let cols_t = Tensor::from_vec(cols, (ow, w), dev)?
        .to_dtype(x.dtype())?
        .t()?
        .contiguous()?;
    // (b*c*h, w) x (w, ow)
    let y = x.reshape((b * c * h, w))?.matmul(&cols_t)?;
    let y = y.reshape((b * c, h, ow))?;
    let y = rows.broadcast_matmul(&y)?;
    counter::add_macs((b * c * (h * w * ow + oh * h * ow)) as u64);
    Ok(y.reshape((b, c, oh, ow))?)
}

/// Bilinear resampling of an NCHW tensor.
pub fn resize_bilinear(x: &Tensor, out: (usize, usize)) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == out {
        return Ok(x.clone());
    }
    separable(x, interp_matrix(h, out.0), interp_matrix(w, out.1), out)
}

/// Adaptive average pooling of an NCHW tensor to `out` spatial size.
pub fn adaptive_avg_pool(x: &Tensor, out: (usize, usize)) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    separable(
        x,
        adaptive_pool_matrix(h, out.0),
        adaptive_pool_matrix(w, out.1),
        out,
    )
}

/// Non-overlapping `factor` x `factor` average pooling.
pub fn avg_pool(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % factor != 0 || w % factor != 0 {
        return Err(shape_err!("{h}x{w} is not divisible by pooling factor {factor}"));
    }
    Ok(x
        .reshape((b, c, h / factor, factor, w / factor, factor))?
        .mean(5)?
        .mean(3)?)
}

/// Keeps every second row and column, starting at index 0.
pub fn subsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("{h}x{w} cannot be subsampled by 2"));
    }
    Ok(x
        .reshape((b, c, h / 2, 2, w / 2, 2))?
        .narrow(3, 0, 1)?
        .narrow(5, 0, 1)?
        .reshape((b, c, h / 2, w / 2))?)
}
