//! Mirrored MaxViT decoder with skip connections and edge-feature fusion.

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, FeatureMap, FeaturePyramid, MaxVitStage};
use crate::error::{config_err, shape_err, Result};
use crate::nn::{self, Conv2d, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub num_classes: usize,
    /// MaxViT blocks in each of the three D-blocks (strides 16, 8, 4).
    pub d_block_depths: [usize; 3],
    pub fuse_edge: bool,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(config_err!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.d_block_depths.iter().any(|&d| d == 0) {
            return Err(config_err!("every D-block needs at least one MaxViT block"));
        }
        Ok(())
    }
}

/// Additive fusion of an edge feature into a decoder feature through a
/// bias-free 1x1 projection.
#[derive(Debug, Clone)]
pub struct EdgeFuse {
    proj: Conv2d,
}

impl EdgeFuse {
    pub fn new(p: &Params, edge_channels: usize, decoder_channels: usize) -> Result<Self> {
        Ok(Self {
            proj: Conv2d::new(&p.pp("proj"), edge_channels, decoder_channels, 1, 1, false)?,
        })
    }

    /// The projected (and, if allowed, resampled) edge feature alone.
    pub fn project(&self, edge_feat: &FeatureMap, size: (usize, usize), resample: bool) -> Result<FeatureMap> {
        let spatial = (edge_feat.height(), edge_feat.width());
        let data = if spatial == size {
            edge_feat.data.clone()
        } else if resample {
            nn::resize_bilinear(&edge_feat.data, size)?
        } else {
            return Err(shape_err!(
                "edge feature is {}x{} but decoder feature is {}x{}",
                spatial.0,
                spatial.1,
                size.0,
                size.1
            ));
        };
        let stride = edge_feat.stride * spatial.0 / size.0.max(1);
        FeatureMap::new(self.proj.forward(&data)?, stride)
    }

    pub fn fuse(&self, decoder_feat: &FeatureMap, edge_feat: &FeatureMap, resample: bool) -> Result<FeatureMap> {
        let e = self.project(edge_feat, (decoder_feat.height(), decoder_feat.width()), resample)?;
        FeatureMap::new((&decoder_feat.data + e.data)?, decoder_feat.stride)
    }
}

/// Upsample 2x, merge the matching skip, optionally add edge features, then
/// run a MaxViT stage.
#[derive(Debug)]
struct DBlock {
    up: Conv2d,
    reduce: Conv2d,
    edge: Option<EdgeFuse>,
    stage: MaxVitStage,
    out_channels: usize,
}

impl DBlock {
    fn forward(&self, x: &FeatureMap, skip: &FeatureMap, edge: Option<&FeatureMap>, train: bool) -> Result<FeatureMap> {
        let size = (skip.height(), skip.width());
        if (x.height() * 2, x.width() * 2) != size {
            return Err(shape_err!(
                "decoder input {}x{} does not match skip {}x{}",
                x.height(),
                x.width(),
                size.0,
                size.1
            ));
        }
        let up = self.up.forward(&nn::resize_bilinear(&x.data, size)?)?;
        let merged = candle_core::Tensor::cat(&[&up, &skip.data], 1)?;
        let mut y = FeatureMap::new(self.reduce.forward(&merged)?, skip.stride)?;
        if let (Some(fuse), Some(e)) = (&self.edge, edge) {
            y = fuse.fuse(&y, e, true)?;
        }
        self.stage.forward(&y, train)
    }
}

/// Three D-blocks (strides 16, 8, 4) and a 1x1 classification head whose
/// output is bilinearly upsampled 4x to the input resolution.
#[derive(Debug)]
pub struct Decoder {
    cfg: DecoderConfig,
    blocks: Vec<DBlock>,
    head: Conv2d,
}

impl Decoder {
    /// `edge_channels` is the width of the edge attention map that the two
    /// highest-resolution D-blocks receive.
    pub fn new(p: &Params, cfg: &DecoderConfig, backbone: &BackboneConfig, edge_channels: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let widths = backbone.stage_channels();
        let mut blocks = Vec::with_capacity(3);
        for i in 0..3 {
            let cin = widths[3 - i];
            let cout = widths[2 - i];
            let bp = p.pp(format!("blocks.{i}"));
            let edge = if i >= 1 {
                Some(EdgeFuse::new(&bp.pp("edge"), edge_channels, cout)?)
            } else {
                None
            };
            blocks.push(DBlock {
                up: Conv2d::new(&bp.pp("up"), cin, cout, 1, 1, true)?,
                reduce: Conv2d::new(&bp.pp("reduce"), 2 * cout, cout, 1, 1, true)?,
                edge,
                stage: MaxVitStage::new(
                    &bp.pp("stage"),
                    backbone,
                    cout,
                    cout,
                    cfg.d_block_depths[i],
                    false,
                    seed.wrapping_add(i as u64 * 97),
                )?,
                out_channels: cout,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            head: Conv2d::new(&p.pp("head"), widths[0], cfg.num_classes, 1, 1, true)?,
            blocks,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// Edge fusion modules for the stride-8 and stride-4 D-blocks.
    pub fn edge_fusers(&self) -> Vec<&EdgeFuse> {
        self.blocks.iter().filter_map(|b| b.edge.as_ref()).collect()
    }

    /// Produces `[batch, num_classes, H, W]` logits. `edge_feats`, when fusion
    /// is enabled, holds the features injected at strides 8 and 4.
    pub fn decode(
        &self,
        bottleneck: &FeatureMap,
        skips: &FeaturePyramid,
        edge_feats: Option<&[FeatureMap]>,
        train: bool,
    ) -> Result<candle_core::Tensor> {
        if bottleneck.chw() != skips.e4.chw() {
            return Err(shape_err!(
                "bottleneck {:?} does not match E4 {:?}",
                bottleneck.chw(),
                skips.e4.chw()
            ));
        }
        let edges = if self.cfg.fuse_edge { edge_feats } else { None };
        if let Some(e) = edges {
            if e.len() != 2 {
                return Err(shape_err!("expected 2 edge injections, got {}", e.len()));
            }
        }
        let skip_maps = [&skips.e3, &skips.e2, &skips.e1];
        let mut x = bottleneck.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            let e = match (i, edges) {
                (1, Some(e)) => Some(&e[0]),
                (2, Some(e)) => Some(&e[1]),
                _ => None,
            };
            x = block.forward(&x, skip_maps[i], e, train)?;
            debug_assert_eq!(x.channels(), block.out_channels);
        }
        let logits = self.head.forward(&x.data)?;
        let full = (x.height() * x.stride, x.width() * x.stride);
        nn::resize_bilinear(&logits, full)
    }
}
