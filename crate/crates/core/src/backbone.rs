//! MaxViT encoder: grayscale projection, convolutional stem and four stages of
//! MBConv + block attention + grid attention.

use std::sync::Mutex;

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::nn::{
    self, counter, BatchNorm2d, Conv2d, DepthwiseConv3x3, Init, LayerNorm, Linear, Params,
};

/// A batch of feature maps, `[batch, channels, height, width]`, together with
/// its downsampling factor relative to the network input.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Tensor,
    pub stride: usize,
}

impl FeatureMap {
    pub fn new(data: Tensor, stride: usize) -> Result<Self> {
        if data.rank() != 4 {
            return Err(shape_err!("feature map must be rank 4, got {:?}", data.dims()));
        }
        Ok(Self { data, stride })
    }

    pub fn batch(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn height(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[3]
    }

    /// `(channels, height, width)`
    pub fn chw(&self) -> (usize, usize, usize) {
        (self.channels(), self.height(), self.width())
    }
}

/// The four encoder outputs at strides 4, 8, 16 and 32.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub e1: FeatureMap,
    pub e2: FeatureMap,
    pub e3: FeatureMap,
    pub e4: FeatureMap,
}

impl FeaturePyramid {
    /// Channel width of the deepest stage.
    pub fn d_e4(&self) -> usize {
        self.e4.channels()
    }

    pub fn levels(&self) -> [&FeatureMap; 4] {
        [&self.e1, &self.e2, &self.e3, &self.e4]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub base_channels: usize,
    /// MaxViT blocks per stage.
    pub depths: [usize; 4],
    pub window_size: usize,
    pub grid_size: usize,
    pub head_dim: usize,
    pub mlp_ratio: usize,
    /// Square input side.
    pub input_size: usize,
    /// Stochastic depth rate; 0 disables it.
    pub drop_path: f64,
}

impl BackboneConfig {
    /// Width 96 with depths [2, 2, 5, 2]; window and grid are `input_size / 32`.
    pub fn standard(input_size: usize) -> Self {
        Self {
            base_channels: 96,
            depths: [2, 2, 5, 2],
            window_size: (input_size / 32).max(1),
            grid_size: (input_size / 32).max(1),
            head_dim: 32,
            mlp_ratio: 4,
            input_size,
            drop_path: 0.0,
        }
    }

    pub fn stage_channels(&self) -> [usize; 4] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, 8 * c]
    }

    pub fn d_e4(&self) -> usize {
        8 * self.base_channels
    }

    /// Number of attention heads for a token width, one head per `head_dim`
    /// channels.
    pub fn heads_for(&self, channels: usize) -> usize {
        (channels / self.head_dim).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(config_err!("base_channels must be positive"));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(config_err!(
                "input size {} is not divisible by 32",
                self.input_size
            ));
        }
        if self.depths.iter().any(|&d| d == 0) {
            return Err(config_err!("every stage needs at least one block"));
        }
        if self.window_size == 0 || self.grid_size == 0 {
            return Err(config_err!("window and grid sizes must be positive"));
        }
        for i in 0..4 {
            let side = self.input_size >> (2 + i);
            if side % self.window_size != 0 || side % self.grid_size != 0 {
                return Err(config_err!(
                    "stage {} side {side} is not divisible by window {} and grid {}",
                    i + 1,
                    self.window_size,
                    self.grid_size
                ));
            }
        }
        for c in self.stage_channels() {
            if c % self.heads_for(c) != 0 {
                return Err(config_err!("{c} channels cannot be split into heads"));
            }
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(config_err!("drop_path must be in [0, 1)"));
        }
        Ok(())
    }

    /// Expected `(channels, height, width)` of each encoder stage.
    pub fn stage_shapes(&self) -> [(usize, usize, usize); 4] {
        let ch = self.stage_channels();
        std::array::from_fn(|i| {
            let side = self.input_size >> (2 + i);
            (ch[i], side, side)
        })
    }
}

/// Per-sample stochastic depth.
pub(crate) struct DropPath {
    rate: f64,
    rng: Mutex<ChaCha8Rng>,
}

impl DropPath {
    pub(crate) fn new(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub(crate) fn apply(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        if !train || self.rate == 0.0 {
            return Ok(x.clone());
        }
        let b = x.dims()[0];
        let keep = 1.0 - self.rate;
        let mask: Vec<f64> = {
            let mut rng = self.rng.lock().expect("drop-path rng poisoned");
            (0..b)
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect()
        };
        let mut shape = vec![1usize; x.rank()];
        shape[0] = b;
        let mask = Tensor::from_vec(mask, shape, x.device())?.to_dtype(x.dtype())?;
        Ok(x.broadcast_mul(&mask)?)
    }
}

impl std::fmt::Debug for DropPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DropPath").field("rate", &self.rate).finish()
    }
}

/// Convolution + batch norm + ReLU projecting one grayscale channel to three.
#[derive(Debug, Clone)]
pub struct GrayProjection {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl GrayProjection {
    pub fn new(p: &Params, bias: bool) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&p.pp("conv"), 1, 3, 3, 1, bias)?,
            bn: BatchNorm2d::new(&p.pp("bn"), 3)?,
        })
    }

    pub fn forward(&self, image: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, _, _) = image.dims4()?;
        if c != 1 {
            return Err(shape_err!("grayscale projection expects 1 channel, got {c}"));
        }
        Ok(self.bn.forward(&self.conv.forward(image)?, train)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    reduce: Linear,
    expand: Linear,
}

impl SqueezeExcite {
    pub fn new(p: &Params, channels: usize, squeezed: usize) -> Result<Self> {
        Ok(Self {
            reduce: Linear::new(&p.pp("reduce"), channels, squeezed, true)?,
            expand: Linear::new(&p.pp("expand"), squeezed, channels, true)?,
        })
    }

    /// Channel gate in (0, 1), shaped `[batch, channels, 1, 1]`.
    pub fn gate(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        let pooled = x.mean(3)?.mean(2)?;
        let g = nn::sigmoid(&self.expand.forward(&nn::silu(&self.reduce.forward(&pooled)?)?)?)?;
        Ok(g.reshape((b, c, 1, 1))?)
    }
}

/// Pre-norm inverted bottleneck with depthwise 3x3 convolution and
/// squeeze-and-excitation gating.
#[derive(Debug, Clone)]
pub struct MbConv {
    pre_norm: BatchNorm2d,
    expand: Conv2d,
    bn1: BatchNorm2d,
    depthwise: DepthwiseConv3x3,
    bn2: BatchNorm2d,
    se: SqueezeExcite,
    project: Conv2d,
    shortcut: Option<Conv2d>,
    downsample: bool,
    in_channels: usize,
    out_channels: usize,
}

/// How the squeeze-and-excitation gate is applied in [`MbConv::forward_with`].
#[derive(Debug, Clone)]
pub enum SeGate {
    Learned,
    /// Skip the SE branch entirely.
    Disabled,
    /// Use a caller-provided gate of shape `[batch, hidden, 1, 1]`.
    Fixed(Tensor),
}

impl MbConv {
    pub fn new(p: &Params, in_channels: usize, out_channels: usize, downsample: bool) -> Result<Self> {
        let hidden = 4 * out_channels;
        let shortcut = if in_channels != out_channels {
            Some(Conv2d::new(&p.pp("shortcut"), in_channels, out_channels, 1, 1, true)?)
        } else {
            None
        };
        Ok(Self {
            pre_norm: BatchNorm2d::new(&p.pp("pre_norm"), in_channels)?,
            expand: Conv2d::new(&p.pp("expand"), in_channels, hidden, 1, 1, false)?,
            bn1: BatchNorm2d::new(&p.pp("bn1"), hidden)?,
            depthwise: DepthwiseConv3x3::new(&p.pp("depthwise"), hidden)?,
            bn2: BatchNorm2d::new(&p.pp("bn2"), hidden)?,
            se: SqueezeExcite::new(&p.pp("se"), hidden, (in_channels / 4).max(1))?,
            project: Conv2d::new(&p.pp("project"), hidden, out_channels, 1, 1, true)?,
            shortcut,
            downsample,
            in_channels,
            out_channels,
        })
    }

    pub fn hidden_channels(&self) -> usize {
        4 * self.out_channels
    }

    /// True when the identity residual path is used.
    pub fn has_identity_residual(&self) -> bool {
        self.shortcut.is_none() && !self.downsample
    }

    pub fn forward(&self, x: &FeatureMap, train: bool) -> Result<FeatureMap> {
        self.forward_with(x, train, &SeGate::Learned)
    }

    pub fn forward_with(&self, x: &FeatureMap, train: bool, gate: &SeGate) -> Result<FeatureMap> {
        if x.channels() != self.in_channels {
            return Err(shape_err!(
                "MBConv expects {} channels, got {}",
                self.in_channels,
                x.channels()
            ));
        }
        let mut shortcut = x.data.clone();
        if self.downsample {
            shortcut = nn::avg_pool(&shortcut, 2)?;
        }
        if let Some(conv) = &self.shortcut {
            shortcut = conv.forward(&shortcut)?;
        }
        let h = self.pre_norm.forward(&x.data, train)?;
        let h = nn::gelu(&self.bn1.forward(&self.expand.forward(&h)?, train)?)?;
        let h = self.depthwise.forward_strided(&h, if self.downsample { 2 } else { 1 })?;
        let h = nn::gelu(&self.bn2.forward(&h, train)?)?;
        let h = match gate {
            SeGate::Learned => h.broadcast_mul(&self.se.gate(&h)?)?,
            SeGate::Disabled => h,
            SeGate::Fixed(g) => h.broadcast_mul(g)?,
        };
        let h = self.project.forward(&h)?;
        let stride = if self.downsample { x.stride * 2 } else { x.stride };
        FeatureMap::new((shortcut + h)?, stride)
    }
}

/// Which spatial partition an attention layer mixes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Partition {
    /// Non-overlapping `size x size` windows.
    Block,
    /// `size x size` tokens spaced `side / size` apart.
    Grid,
}

/// Multi-head self-attention with a relative position bias, applied within the
/// groups of a block or grid partition.
#[derive(Debug, Clone)]
pub struct PartitionAttention {
    norm: LayerNorm,
    qkv: Linear,
    proj: Linear,
    bias_table: Tensor,
    bias_index: Vec<u32>,
    partition: Partition,
    size: usize,
    heads: usize,
    channels: usize,
}

impl PartitionAttention {
    pub fn new(p: &Params, channels: usize, heads: usize, partition: Partition, size: usize) -> Result<Self> {
        if channels % heads != 0 {
            return Err(config_err!("{channels} channels not divisible by {heads} heads"));
        }
        let span = 2 * size - 1;
        let bias_table = p.weight("rel_bias", (span * span, heads), Init::Normal(0.02))?;
        let mut bias_index = Vec::with_capacity(size.pow(4));
        for qy in 0..size {
            for qx in 0..size {
                for ky in 0..size {
                    for kx in 0..size {
                        let dy = qy + size - 1 - ky;
                        let dx = qx + size - 1 - kx;
                        bias_index.push((dy * span + dx) as u32);
                    }
                }
            }
        }
        Ok(Self {
            norm: LayerNorm::new(&p.pp("norm"), channels)?,
            qkv: Linear::new(&p.pp("qkv"), channels, 3 * channels, true)?,
            proj: Linear::new(&p.pp("proj"), channels, channels, true)?,
            bias_table,
            bias_index,
            partition,
            size,
            heads,
            channels,
        })
    }

    pub fn partition(&self) -> Partition {
        self.partition
    }

    fn partition_tokens(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let s = self.size;
        if h % s != 0 || w % s != 0 {
            return Err(config_err!(
                "{h}x{w} feature map cannot be tiled by {:?} partition of size {s}",
                self.partition
            ));
        }
        let t = match self.partition {
            Partition::Block => x
                .reshape(vec![b, h / s, s, w / s, s, c])?
                .permute(vec![0, 1, 3, 2, 4, 5])?,
            Partition::Grid => x
                .reshape(vec![b, s, h / s, s, w / s, c])?
                .permute(vec![0, 2, 4, 1, 3, 5])?,
        };
        Ok(t.contiguous()?.reshape((b * (h / s) * (w / s), s * s, c))?)
    }

    fn merge_tokens(&self, t: &Tensor, b: usize, h: usize, w: usize) -> Result<Tensor> {
        let s = self.size;
        let c = self.channels;
        let x = match self.partition {
            Partition::Block => t
                .reshape(vec![b, h / s, w / s, s, s, c])?
                .permute(vec![0, 1, 3, 2, 4, 5])?,
            Partition::Grid => t
                .reshape(vec![b, h / s, w / s, s, s, c])?
                .permute(vec![0, 3, 1, 4, 2, 5])?,
        };
        Ok(x.contiguous()?.reshape((b, h, w, c))?)
    }

    /// Attention alone (no norm, no residual) on a channels-last tensor
    /// `[batch, height, width, channels]`.
    pub fn attend(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        if c != self.channels {
            return Err(shape_err!("attention expects {} channels, got {c}", self.channels));
        }
        let tokens = self.partition_tokens(x)?;
        let n = self.size * self.size;
        let idx = Tensor::from_vec(self.bias_index.clone(), n * n, x.device())?;
        let bias = self
            .bias_table
            .index_select(&idx, 0)?
            .reshape((n, n, self.heads))?
            .permute((2, 0, 1))?
            .unsqueeze(0)?;
        let out = multi_head_attention(&tokens, &self.qkv, self.heads, Some(&bias))?;
        let out = self.proj.forward(&out)?;
        self.merge_tokens(&out, b, h, w)
    }

    /// `x + attend(norm(x))` on a channels-last tensor.
    pub fn residual(&self, x: &Tensor) -> Result<Tensor> {
        Ok((x + self.attend(&self.norm.forward(x)?)?)?)
    }

    /// Residual attention sublayer on an NCHW feature map.
    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let nhwc = x.data.permute((0, 2, 3, 1))?;
        let y = self.residual(&nhwc)?.permute((0, 3, 1, 2))?.contiguous()?;
        FeatureMap::new(y, x.stride)
    }
}

/// Scaled dot-product self-attention over `[groups, tokens, channels]` with a
/// fused qkv projection. Records score multiply-accumulates.
fn multi_head_attention(tokens: &Tensor, qkv: &Linear, heads: usize, bias: Option<&Tensor>) -> Result<Tensor> {
    let (g, n, c) = tokens.dims3()?;
    let hd = c / heads;
    let qkv = qkv
        .forward(tokens)?
        .reshape((g, n, 3, heads, hd))?
        .permute((2, 0, 3, 1, 4))?;
    let q = (qkv.get(0)?.contiguous()? * (1.0 / (hd as f64).sqrt()))?;
    let k = qkv.get(1)?.contiguous()?;
    let v = qkv.get(2)?.contiguous()?;
    let mut scores = q.matmul(&k.t()?)?;
    counter::add_score_macs((g * heads * n * n * hd) as u64);
    if let Some(bias) = bias {
        scores = scores.broadcast_add(bias)?;
    }
    let attn = nn::softmax(&scores, 3)?;
    let out = attn.matmul(&v)?;
    counter::add_macs((g * heads * n * n * hd) as u64);
    Ok(out.transpose(1, 2)?.reshape((g, n, c))?)
}

/// Global self-attention over every token of the map. Used as a cost
/// reference for the partitioned layers.
#[derive(Debug, Clone)]
pub struct FullAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl FullAttention {
    pub fn new(p: &Params, channels: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            qkv: Linear::new(&p.pp("qkv"), channels, 3 * channels, true)?,
            proj: Linear::new(&p.pp("proj"), channels, channels, true)?,
            heads,
        })
    }

    /// Attention on a channels-last tensor `[batch, height, width, channels]`.
    pub fn attend(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let tokens = x.reshape((b, h * w, c))?;
        let out = multi_head_attention(&tokens, &self.qkv, self.heads, None)?;
        Ok(self.proj.forward(&out)?.reshape((b, h, w, c))?)
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    norm: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    fn new(p: &Params, channels: usize, ratio: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&p.pp("norm"), channels)?,
            fc1: Linear::new(&p.pp("fc1"), channels, ratio * channels, true)?,
            fc2: Linear::new(&p.pp("fc2"), ratio * channels, channels, true)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&nn::gelu(&self.fc1.forward(&self.norm.forward(x)?)?)?)
    }
}

/// MBConv followed by block attention and grid attention, each attention
/// sublayer followed by an MLP.
#[derive(Debug)]
pub struct MaxVitBlock {
    pub mbconv: MbConv,
    pub block_attn: PartitionAttention,
    block_mlp: Mlp,
    pub grid_attn: PartitionAttention,
    grid_mlp: Mlp,
    drop_path: DropPath,
}

impl MaxVitBlock {
    pub fn new(
        p: &Params,
        cfg: &BackboneConfig,
        in_channels: usize,
        out_channels: usize,
        downsample: bool,
        seed: u64,
    ) -> Result<Self> {
        let heads = cfg.heads_for(out_channels);
        Ok(Self {
            mbconv: MbConv::new(&p.pp("mbconv"), in_channels, out_channels, downsample)?,
            block_attn: PartitionAttention::new(
                &p.pp("block_attn"),
                out_channels,
                heads,
                Partition::Block,
                cfg.window_size,
            )?,
            block_mlp: Mlp::new(&p.pp("block_mlp"), out_channels, cfg.mlp_ratio)?,
            grid_attn: PartitionAttention::new(
                &p.pp("grid_attn"),
                out_channels,
                heads,
                Partition::Grid,
                cfg.grid_size,
            )?,
            grid_mlp: Mlp::new(&p.pp("grid_mlp"), out_channels, cfg.mlp_ratio)?,
            drop_path: DropPath::new(cfg.drop_path, seed),
        })
    }

    pub fn forward(&self, x: &FeatureMap, train: bool) -> Result<FeatureMap> {
        let y = self.mbconv.forward(x, train)?;
        let stride = y.stride;
        let mut t = y.data.permute((0, 2, 3, 1))?;
        for (attn, mlp) in [(&self.block_attn, &self.block_mlp), (&self.grid_attn, &self.grid_mlp)] {
            let a = attn.attend(&attn.norm.forward(&t)?)?;
            t = (&t + self.drop_path.apply(&a, train)?)?;
            let m = mlp.forward(&t)?;
            t = (&t + self.drop_path.apply(&m, train)?)?;
        }
        FeatureMap::new(t.permute((0, 3, 1, 2))?.contiguous()?, stride)
    }
}

/// A sequence of MaxViT blocks; the first one changes width and optionally
/// halves the resolution.
#[derive(Debug)]
pub struct MaxVitStage {
    blocks: Vec<MaxVitBlock>,
}

impl MaxVitStage {
    pub fn new(
        p: &Params,
        cfg: &BackboneConfig,
        in_channels: usize,
        out_channels: usize,
        depth: usize,
        downsample: bool,
        seed: u64,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(config_err!("a MaxViT stage needs at least one block"));
        }
        let blocks = (0..depth)
            .map(|i| {
                let (cin, ds) = if i == 0 {
                    (in_channels, downsample)
                } else {
                    (out_channels, false)
                };
                MaxVitBlock::new(&p.pp(i), cfg, cin, out_channels, ds, seed.wrapping_add(i as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[MaxVitBlock] {
        &self.blocks
    }

    pub fn forward(&self, x: &FeatureMap, train: bool) -> Result<FeatureMap> {
        let mut y = self.blocks[0].forward(x, train)?;
        for block in &self.blocks[1..] {
            y = block.forward(&y, train)?;
        }
        Ok(y)
    }
}

/// Stem (3x3 stride-2 conv, 3x3 conv) followed by four downsampling stages.
#[derive(Debug)]
pub struct Encoder {
    cfg: BackboneConfig,
    stem1: Conv2d,
    stem_bn: BatchNorm2d,
    stem2: Conv2d,
    stages: Vec<MaxVitStage>,
}

impl Encoder {
    pub fn new(p: &Params, cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.base_channels;
        let widths = cfg.stage_channels();
        let mut stages = Vec::with_capacity(4);
        let mut cin = c;
        for (i, &cout) in widths.iter().enumerate() {
            stages.push(MaxVitStage::new(
                &p.pp(format!("stages.{i}")),
                cfg,
                cin,
                cout,
                cfg.depths[i],
                true,
                seed.wrapping_add(1000 * (i as u64 + 1)),
            )?);
            cin = cout;
        }
        Ok(Self {
            cfg: cfg.clone(),
            stem1: Conv2d::new(&p.pp("stem.conv1"), 3, c, 3, 2, true)?,
            stem_bn: BatchNorm2d::new(&p.pp("stem.bn"), c)?,
            stem2: Conv2d::new(&p.pp("stem.conv2"), c, c, 3, 1, true)?,
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn stages(&self) -> &[MaxVitStage] {
        &self.stages
    }

    /// Runs the encoder on a `[batch, 3, size, size]` image batch.
    pub fn encode(&self, image: &Tensor, train: bool) -> Result<FeaturePyramid> {
        let (_, c, h, w) = image.dims4()?;
        let s = self.cfg.input_size;
        if c != 3 || h != s || w != s {
            return Err(shape_err!(
                "encoder expects [_, 3, {s}, {s}] input, got {:?}",
                image.dims()
            ));
        }
        let x = nn::gelu(&self.stem_bn.forward(&self.stem1.forward(image)?, train)?)?;
        let x = FeatureMap::new(self.stem2.forward(&x)?, 2)?;
        let e1 = self.stages[0].forward(&x, train)?;
        let e2 = self.stages[1].forward(&e1, train)?;
        let e3 = self.stages[2].forward(&e2, train)?;
        let e4 = self.stages[3].forward(&e3, train)?;
        Ok(FeaturePyramid { e1, e2, e3, e4 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn small_cfg(size: usize) -> BackboneConfig {
        BackboneConfig {
            base_channels: 8,
            depths: [1, 1, 1, 1],
            window_size: size / 32,
            grid_size: size / 32,
            head_dim: 8,
            mlp_ratio: 2,
            input_size: size,
            drop_path: 0.0,
        }
    }

    #[test]
    fn rejects_size_not_divisible_by_32() {
        let mut cfg = BackboneConfig::standard(256);
        cfg.input_size = 100;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn standard_config_is_valid_at_desk_and_full_size() {
        for s in [64, 128, 256] {
            BackboneConfig::standard(s).validate().unwrap();
        }
    }

    #[test]
    fn gray_projection_shapes_and_errors() {
        let store = ParamStore::new(DType::F32, 1);
        let proj = GrayProjection::new(&store.root().pp("gray"), false).unwrap();
        let x = Tensor::zeros((1, 1, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let y = proj.forward(&x, true).unwrap();
        assert_eq!(y.dims(), &[1, 3, 64, 64]);
        let flat = y.squeeze(0).unwrap().to_vec3::<f32>().unwrap();
        for ch in flat {
            let first = ch[1][1];
            for row in &ch[1..63] {
                for &px in &row[1..63] {
                    assert_eq!(px, first);
                }
            }
        }
        let bad = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(proj.forward(&bad, true).is_err());
    }

    #[test]
    fn mbconv_shapes() {
        let store = ParamStore::new(DType::F32, 2);
        let p = store.root();
        let down = MbConv::new(&p.pp("a"), 8, 16, true).unwrap();
        let x = FeatureMap::new(Tensor::randn(0f32, 1.0, (1, 8, 16, 16), &Device::Cpu).unwrap(), 4).unwrap();
        let y = down.forward(&x, true).unwrap();
        assert_eq!(y.chw(), (16, 8, 8));
        assert_eq!(y.stride, 8);
        let same = MbConv::new(&p.pp("b"), 8, 8, false).unwrap();
        assert!(same.has_identity_residual());
        assert_eq!(same.forward(&x, true).unwrap().chw(), (8, 16, 16));
    }

    #[test]
    fn se_gate_of_ones_equals_se_free_branch() {
        let store = ParamStore::new(DType::F64, 4);
        let m = MbConv::new(&store.root().pp("m"), 8, 8, false).unwrap();
        let x = FeatureMap::new(Tensor::randn(0f64, 1.0, (2, 8, 8, 8), &Device::Cpu).unwrap(), 4).unwrap();
        let ones = Tensor::ones((2, m.hidden_channels(), 1, 1), DType::F64, &Device::Cpu).unwrap();
        let a = m.forward_with(&x, false, &SeGate::Fixed(ones)).unwrap();
        let b = m.forward_with(&x, false, &SeGate::Disabled).unwrap();
        let d = (a.data - b.data).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn partition_round_trip_is_identity() {
        let store = ParamStore::new(DType::F64, 5);
        let x = Tensor::randn(0f64, 1.0, (2, 8, 8, 4), &Device::Cpu).unwrap();
        for part in [Partition::Block, Partition::Grid] {
            let a = PartitionAttention::new(&store.root().pp(format!("{part:?}")), 4, 2, part, 4).unwrap();
            let t = a.partition_tokens(&x).unwrap();
            assert_eq!(t.dims(), &[8, 16, 4]);
            let back = a.merge_tokens(&t, 2, 8, 8).unwrap();
            let d = (back - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert_eq!(d, 0.0);
        }
    }

    #[test]
    fn grid_groups_are_strided() {
        let store = ParamStore::new(DType::F64, 6);
        let a = PartitionAttention::new(&store.root(), 1, 1, Partition::Grid, 2).unwrap();
        // value = y*8 + x on an 8x8 map
        let vals: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let x = Tensor::from_vec(vals, (1, 8, 8, 1), &Device::Cpu).unwrap();
        let t = a.partition_tokens(&x).unwrap().squeeze(2).unwrap().to_vec2::<f64>().unwrap();
        // first group holds (0,0), (0,4), (4,0), (4,4)
        assert_eq!(t[0], vec![0.0, 4.0, 32.0, 36.0]);
    }

    #[test]
    fn indivisible_partition_is_a_config_error() {
        let store = ParamStore::new(DType::F32, 7);
        let a = PartitionAttention::new(&store.root(), 4, 1, Partition::Block, 3).unwrap();
        let x = Tensor::zeros((1, 8, 8, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(a.attend(&x), Err(crate::Error::Config(_))));
    }

    #[test]
    fn encoder_schedule_small() {
        let cfg = small_cfg(64);
        let store = ParamStore::new(DType::F32, 8);
        let enc = Encoder::new(&store.root(), &cfg, 0).unwrap();
        let x = Tensor::randn(0f32, 1.0, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let pyr = enc.encode(&x, false).unwrap();
        let got: Vec<_> = pyr.levels().iter().map(|f| f.chw()).collect();
        assert_eq!(got, cfg.stage_shapes().to_vec());
        assert_eq!(pyr.levels().map(|f| f.stride), [4, 8, 16, 32]);
        let wrong = Tensor::randn(0f32, 1.0, (1, 3, 32, 32), &Device::Cpu).unwrap();
        assert!(enc.encode(&wrong, false).is_err());
    }
}
