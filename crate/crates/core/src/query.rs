//! Query-guided two-way transformer over the bottleneck, the PPM-FPN
//! multi-scale fusion, and the auxiliary mask heads.

use candle_core::Tensor;

use crate::backbone::FeatureMap;
use crate::edge::QuerySet;
use crate::error::{config_err, shape_err, Result};
use crate::nn::{self, counter, Conv2d, LayerNorm, Linear, Params};

/// Bottleneck after query refinement.
#[derive(Debug, Clone)]
pub struct RefinedBottleneck {
    pub features: FeatureMap,
    pub updated_queries: QuerySet,
}

/// Output of [`PpmFpn`] at stride 8.
#[derive(Debug, Clone)]
pub struct FusedFeatures {
    pub data: Tensor,
}

#[derive(Debug, Clone)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    fn new(p: &Params, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(&p.pp("q"), dim, dim, true)?,
            k: Linear::new(&p.pp("k"), dim, dim, true)?,
            v: Linear::new(&p.pp("v"), dim, dim, true)?,
            out: Linear::new(&p.pp("out"), dim, dim, true)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        Ok(x
            .reshape((b, n, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (b, nq, d) = q.dims3()?;
        let nk = k.dims()[1];
        let hd = d / self.heads;
        let q = (self.split(&self.q.forward(q)?)? * (1.0 / (hd as f64).sqrt()))?;
        let k = self.split(&self.k.forward(k)?)?;
        let v = self.split(&self.v.forward(v)?)?;
        let scores = q.matmul(&k.t()?)?;
        counter::add_score_macs((b * self.heads * nq * nk * hd) as u64);
        let attn = nn::softmax(&scores, 3)?;
        let out = attn.matmul(&v)?;
        counter::add_macs((b * self.heads * nq * nk * hd) as u64);
        self.out.forward(&out.transpose(1, 2)?.reshape((b, nq, d))?)
    }
}

#[derive(Debug, Clone)]
struct TwoWayBlock {
    self_attn: Attention,
    norm1: LayerNorm,
    token_to_image: Attention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    norm3: LayerNorm,
    image_to_token: Attention,
    norm4: LayerNorm,
}

impl TwoWayBlock {
    fn new(p: &Params, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            self_attn: Attention::new(&p.pp("self_attn"), dim, heads)?,
            norm1: LayerNorm::new(&p.pp("norm1"), dim)?,
            token_to_image: Attention::new(&p.pp("token_to_image"), dim, heads)?,
            norm2: LayerNorm::new(&p.pp("norm2"), dim)?,
            fc1: Linear::new(&p.pp("fc1"), dim, mlp_ratio * dim, true)?,
            fc2: Linear::new(&p.pp("fc2"), mlp_ratio * dim, dim, true)?,
            norm3: LayerNorm::new(&p.pp("norm3"), dim)?,
            image_to_token: Attention::new(&p.pp("image_to_token"), dim, heads)?,
            norm4: LayerNorm::new(&p.pp("norm4"), dim)?,
        })
    }

    fn forward(&self, queries: &Tensor, keys: &Tensor, query_pe: &Tensor, key_pe: &Tensor) -> Result<(Tensor, Tensor)> {
        let q = (queries + query_pe)?;
        let queries = self.norm1.forward(&(queries + self.self_attn.forward(&q, &q, queries)?)?)?;

        let q = (&queries + query_pe)?;
        let k = keys.broadcast_add(key_pe)?;
        let queries = self
            .norm2
            .forward(&(&queries + self.token_to_image.forward(&q, &k, keys)?)?)?;

        let mlp = self.fc2.forward(&self.fc1.forward(&queries)?.relu()?)?;
        let queries = self.norm3.forward(&(&queries + mlp)?)?;

        let q = (&queries + query_pe)?;
        let keys = self
            .norm4
            .forward(&(keys + self.image_to_token.forward(&k, &q, &queries)?)?)?;
        Ok((queries, keys))
    }
}

/// Fixed 2-D sine/cosine embedding, `[h*w, dim]`; the first half of the
/// channels encodes the row, the second half the column.
pub fn sinusoidal_embedding(h: usize, w: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let pairs = half / 2;
    let mut out = vec![0.0; h * w * dim];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * dim;
            for i in 0..pairs {
                let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
                out[base + 2 * i] = (y as f64 * freq).sin();
                out[base + 2 * i + 1] = (y as f64 * freq).cos();
                out[base + half + 2 * i] = (x as f64 * freq).sin();
                out[base + half + 2 * i + 1] = (x as f64 * freq).cos();
            }
        }
    }
    out
}

/// Two-way attention between per-class queries and bottleneck tokens. Each
/// layer runs query self-attention, query-to-feature cross-attention, a query
/// MLP and feature-to-query cross-attention. The initial queries serve as
/// their own positional encoding, so no per-row embedding is learned.
#[derive(Debug, Clone)]
pub struct TwoWayTransformer {
    blocks: Vec<TwoWayBlock>,
    dim: usize,
}

impl TwoWayTransformer {
    pub fn new(p: &Params, dim: usize, layers: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(config_err!("width {dim} is not divisible by {heads} heads"));
        }
        if dim % 4 != 0 {
            return Err(config_err!("width {dim} must be divisible by 4 for 2-D embeddings"));
        }
        let blocks = (0..layers)
            .map(|i| TwoWayBlock::new(&p.pp(format!("layers.{i}")), dim, heads, mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks, dim })
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn refine(&self, bottleneck: &FeatureMap, queries: &QuerySet) -> Result<RefinedBottleneck> {
        let (c, h, w) = bottleneck.chw();
        if queries.width() != c || c != self.dim {
            return Err(shape_err!(
                "query width {} must equal bottleneck channels {c} (transformer width {})",
                queries.width(),
                self.dim
            ));
        }
        if self.blocks.is_empty() {
            return Ok(RefinedBottleneck {
                features: bottleneck.clone(),
                updated_queries: queries.clone(),
            });
        }
        let b = bottleneck.batch();
        let mut keys = bottleneck
            .data
            .reshape((b, c, h * w))?
            .transpose(1, 2)?
            .contiguous()?;
        let key_pe = Tensor::from_vec(sinusoidal_embedding(h, w, c), (1, h * w, c), keys.device())?
            .to_dtype(keys.dtype())?;
        let query_pe = queries.queries.clone();
        let mut q = queries.queries.clone();
        for block in &self.blocks {
            let (nq, nk) = block.forward(&q, &keys, &query_pe, &key_pe)?;
            q = nq;
            keys = nk;
        }
        let features = keys.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?;
        Ok(RefinedBottleneck {
            features: FeatureMap::new(features, bottleneck.stride)?,
            updated_queries: QuerySet { queries: q },
        })
    }
}

pub const PPM_BINS: [usize; 4] = [1, 2, 3, 6];

/// Pyramid pooling on the deepest level followed by a top-down feature
/// pyramid onto E3 and E2.
#[derive(Debug, Clone)]
pub struct PpmFpn {
    ppm: Vec<Conv2d>,
    ppm_fuse: Conv2d,
    lateral3: Conv2d,
    lateral2: Conv2d,
    smooth3: Conv2d,
    smooth2: Conv2d,
    out_channels: usize,
}

impl PpmFpn {
    pub fn new(p: &Params, stage_channels: [usize; 4], out_channels: usize) -> Result<Self> {
        let [_, c2, c3, c4] = stage_channels;
        let branch = (c4 / 4).max(1);
        let ppm = PPM_BINS
            .iter()
            .map(|bin| Conv2d::new(&p.pp(format!("ppm.{bin}")), c4, branch, 1, 1, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ppm,
            ppm_fuse: Conv2d::new(&p.pp("ppm_fuse"), c4 + PPM_BINS.len() * branch, out_channels, 3, 1, true)?,
            lateral3: Conv2d::new(&p.pp("lateral3"), c3, out_channels, 1, 1, false)?,
            lateral2: Conv2d::new(&p.pp("lateral2"), c2, out_channels, 1, 1, false)?,
            smooth3: Conv2d::new(&p.pp("smooth3"), out_channels, out_channels, 3, 1, true)?,
            smooth2: Conv2d::new(&p.pp("smooth2"), out_channels, out_channels, 3, 1, true)?,
            out_channels,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// The pooled `bin x bin` maps of E4, before projection.
    pub fn pyramid_pool(e4: &Tensor) -> Result<Vec<Tensor>> {
        PPM_BINS
            .iter()
            .map(|&bin| nn::adaptive_avg_pool(e4, (bin, bin)))
            .collect()
    }

    pub fn forward(&self, e2: &FeatureMap, e3: &FeatureMap, e4: &FeatureMap) -> Result<FusedFeatures> {
        if e3.stride != 2 * e2.stride || e4.stride != 2 * e3.stride {
            return Err(shape_err!(
                "PPM-FPN needs consecutive strides, got {}, {}, {}",
                e2.stride,
                e3.stride,
                e4.stride
            ));
        }
        let size4 = (e4.height(), e4.width());
        let mut parts = vec![e4.data.clone()];
        for (conv, pooled) in self.ppm.iter().zip(Self::pyramid_pool(&e4.data)?) {
            let y = conv.forward(&pooled)?.relu()?;
            parts.push(nn::resize_bilinear(&y, size4)?);
        }
        let p4 = self.ppm_fuse.forward(&Tensor::cat(&parts, 1)?)?.relu()?;
        let size3 = (e3.height(), e3.width());
        let p3 = (self.lateral3.forward(&e3.data)? + nn::resize_bilinear(&p4, size3)?)?;
        let p3 = self.smooth3.forward(&p3)?.relu()?;
        let size2 = (e2.height(), e2.width());
        let p2 = (self.lateral2.forward(&e2.data)? + nn::resize_bilinear(&p3, size2)?)?;
        let p2 = self.smooth2.forward(&p2)?.relu()?;
        Ok(FusedFeatures { data: p2 })
    }
}

/// Auxiliary mask from per-pixel dot products between projected queries and
/// fused features.
#[derive(Debug, Clone)]
pub struct AuxMaskHead {
    query_proj: Linear,
}

impl AuxMaskHead {
    pub fn new(p: &Params, d_e4: usize, fpn_channels: usize) -> Result<Self> {
        Ok(Self {
            query_proj: Linear::new(&p.pp("query_proj"), d_e4, fpn_channels, false)?,
        })
    }

    pub fn forward(&self, queries: &QuerySet, fused: &FusedFeatures, out_size: usize) -> Result<Tensor> {
        let (b, d, h, w) = fused.data.dims4()?;
        let q = self.query_proj.forward(&queries.queries)?;
        let k = q.dims()[1];
        let logits = q.matmul(&fused.data.reshape((b, d, h * w))?)?;
        counter::add_macs((b * k * d * h * w) as u64);
        nn::resize_bilinear(&logits.reshape((b, k, h, w))?, (out_size, out_size))
    }
}

/// Auxiliary mask from a 1x1 classifier on fused features, used when the
/// query path is disabled.
#[derive(Debug, Clone)]
pub struct AuxConvHead {
    conv: Conv2d,
}

impl AuxConvHead {
    pub fn new(p: &Params, fpn_channels: usize, num_classes: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&p.pp("conv"), fpn_channels, num_classes, 1, 1, true)?,
        })
    }

    pub fn forward(&self, fused: &FusedFeatures, out_size: usize) -> Result<Tensor> {
        nn::resize_bilinear(&self.conv.forward(&fused.data)?, (out_size, out_size))
    }
}
