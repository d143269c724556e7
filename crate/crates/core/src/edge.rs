//! Edge enhancement: edge-map prediction from the two shallowest encoder
//! stages, an attention stage over the fused edge features, and the query
//! enhancer that seeds per-class queries from those features.

use candle_core::Tensor;

use crate::backbone::{BackboneConfig, FeatureMap, MaxVitStage};
use crate::error::{config_err, shape_err, Result};
use crate::nn::{self, BatchNorm2d, Conv2d, Init, Linear, Params};

#[derive(Debug, Clone)]
pub struct EdgeOutputs {
    /// `[batch, 1, H/4, W/4]`, unbounded regression output.
    pub edge_pred: Tensor,
    /// MaxViT stage output at stride 4.
    pub edge_attention: FeatureMap,
    /// `edge_attention` resampled to strides 8 and 4, for the decoder.
    pub d_block_injections: Vec<FeatureMap>,
}

/// Per-class query vectors, `[batch, num_classes, d_e4]`.
#[derive(Debug, Clone)]
pub struct QuerySet {
    pub queries: Tensor,
}

impl QuerySet {
    pub fn num_classes(&self) -> usize {
        self.queries.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.queries.dims()[2]
    }
}

/// 1x1 conv, 3x3 conv, batch norm, ReLU.
#[derive(Debug, Clone)]
struct ConvBranch {
    pointwise: Conv2d,
    spatial: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBranch {
    fn new(p: &Params, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            pointwise: Conv2d::new(&p.pp("pointwise"), cin, cout, 1, 1, true)?,
            spatial: Conv2d::new(&p.pp("spatial"), cout, cout, 3, 1, false)?,
            bn: BatchNorm2d::new(&p.pp("bn"), cout)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.spatial.forward(&self.pointwise.forward(x)?)?;
        Ok(self.bn.forward(&y, train)?.relu()?)
    }
}

#[derive(Debug)]
pub struct EdgeModule {
    e1_branch: ConvBranch,
    e2_branch: ConvBranch,
    edge_head: Conv2d,
    stage: MaxVitStage,
    attention_channels: usize,
}

impl EdgeModule {
    pub fn new(p: &Params, backbone: &BackboneConfig, seed: u64) -> Result<Self> {
        let [c1, c2, _, _] = backbone.stage_channels();
        let branch = c1;
        Ok(Self {
            e1_branch: ConvBranch::new(&p.pp("e1_branch"), c1, branch)?,
            e2_branch: ConvBranch::new(&p.pp("e2_branch"), c2, branch)?,
            edge_head: Conv2d::new(&p.pp("edge_head"), 2 * branch, 1, 1, 1, true)?,
            stage: MaxVitStage::new(&p.pp("stage"), backbone, 2 * branch, c1, 1, false, seed)?,
            attention_channels: c1,
        })
    }

    pub fn attention_channels(&self) -> usize {
        self.attention_channels
    }

    pub fn forward(&self, e1: &FeatureMap, e2: &FeatureMap, train: bool) -> Result<EdgeOutputs> {
        if e2.stride != 2 * e1.stride || e2.height() * 2 != e1.height() || e2.width() * 2 != e1.width() {
            return Err(shape_err!(
                "edge module needs E2 at twice the stride of E1, got strides {} and {}",
                e1.stride,
                e2.stride
            ));
        }
        let size = (e1.height(), e1.width());
        let up = nn::resize_bilinear(&e2.data, size)?;
        let a = self.e1_branch.forward(&e1.data, train)?;
        let b = self.e2_branch.forward(&up, train)?;
        let merged = Tensor::cat(&[&a, &b], 1)?;
        let edge_pred = self.edge_head.forward(&merged)?;
        let edge_attention = self.stage.forward(&FeatureMap::new(merged, e1.stride)?, train)?;
        let half = (size.0 / 2, size.1 / 2);
        let d_block_injections = vec![
            FeatureMap::new(nn::resize_bilinear(&edge_attention.data, half)?, e1.stride * 2)?,
            edge_attention.clone(),
        ];
        Ok(EdgeOutputs {
            edge_pred,
            edge_attention,
            d_block_injections,
        })
    }
}

/// Builds `[learnable | edge-conditioned]` queries: a zero-initialised
/// trainable half and a half obtained by pooling the edge attention map into
/// one token per class and mapping it linearly.
#[derive(Debug, Clone)]
pub struct QueryEnhancer {
    learnable: Tensor,
    linear: Linear,
    num_classes: usize,
    d_e4: usize,
}

impl QueryEnhancer {
    pub fn new(p: &Params, attention_channels: usize, num_classes: usize, d_e4: usize) -> Result<Self> {
        if d_e4 % 2 != 0 {
            return Err(config_err!("query width {d_e4} must be even"));
        }
        Ok(Self {
            learnable: p.weight("learnable", (num_classes, d_e4 / 2), Init::Zeros)?,
            linear: Linear::new(&p.pp("linear"), attention_channels, d_e4 / 2, true)?,
            num_classes,
            d_e4,
        })
    }

    pub fn enhance(&self, edge_attention: &FeatureMap) -> Result<QuerySet> {
        let b = edge_attention.batch();
        let k = self.num_classes;
        let pooled = nn::adaptive_avg_pool(&edge_attention.data, (k, 1))?
            .squeeze(3)?
            .transpose(1, 2)?
            .contiguous()?;
        let conditioned = self.linear.forward(&pooled)?;
        let learnable = self
            .learnable
            .unsqueeze(0)?
            .broadcast_as((b, k, self.d_e4 / 2))?
            .contiguous()?;
        Ok(QuerySet {
            queries: Tensor::cat(&[&learnable, &conditioned], 2)?,
        })
    }
}

/// Plain zero-initialised trainable queries of full width, used when the
/// edge module is disabled.
#[derive(Debug, Clone)]
pub struct ZeroQueries {
    queries: Tensor,
}

impl ZeroQueries {
    pub fn new(p: &Params, num_classes: usize, d_e4: usize) -> Result<Self> {
        Ok(Self {
            queries: p.weight("queries", (num_classes, d_e4), Init::Zeros)?,
        })
    }

    pub fn expand(&self, batch: usize) -> Result<QuerySet> {
        let (k, d) = self.queries.dims2()?;
        Ok(QuerySet {
            queries: self.queries.unsqueeze(0)?.broadcast_as((batch, k, d))?.contiguous()?,
        })
    }
}
