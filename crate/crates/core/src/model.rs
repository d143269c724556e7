//! The full network: encoder, edge enhancement, query refinement, main
//! decoder (y1) and auxiliary PPM-FPN head (y2), with component toggles.

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, Encoder, FeaturePyramid, GrayProjection};
use crate::decoder::{Decoder, DecoderConfig};
use crate::edge::{EdgeModule, EdgeOutputs, QueryEnhancer, QuerySet, ZeroQueries};
use crate::error::{config_err, shape_err, Result};
use crate::nn::{ParamStore, Params};
use crate::query::{AuxConvHead, AuxMaskHead, PpmFpn, RefinedBottleneck, TwoWayTransformer};

/// Ablation switches for the three optional components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Toggles {
    /// Auxiliary head y2 through PPM-FPN, and the pseudo-label loss.
    pub dual_decoder: bool,
    /// Query-guided transformer refinement of the bottleneck.
    pub query: bool,
    /// Edge enhancement module, edge fusion and the edge loss.
    pub edge: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::all()
    }
}

impl Toggles {
    pub fn all() -> Self {
        Self {
            dual_decoder: true,
            query: true,
            edge: true,
        }
    }

    pub fn none() -> Self {
        Self {
            dual_decoder: false,
            query: false,
            edge: false,
        }
    }

    /// All eight combinations, ordered (y2, query, edge) from all-off to
    /// all-on with edge varying fastest.
    pub fn grid() -> [Toggles; 8] {
        std::array::from_fn(|i| Toggles {
            dual_decoder: i & 4 != 0,
            query: i & 2 != 0,
            edge: i & 1 != 0,
        })
    }

    pub fn label(&self) -> String {
        let f = |b: bool| if b { "on" } else { "off" };
        format!("y2={} query={} edge={}", f(self.dual_decoder), f(self.query), f(self.edge))
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Core,
    Edge,
    Query,
    Dual,
    /// Needs both the query path and the edge module.
    QueryEdge,
    /// Query path with edge module disabled.
    QueryNoEdge,
    /// Query-based auxiliary head.
    DualQuery,
    /// Convolutional auxiliary head used without the query path.
    DualNoQuery,
}

impl Component {
    pub fn of(name: &str) -> Component {
        let first = name.split('.').next().unwrap_or("");
        match first {
            "edge" => Component::Edge,
            "enhancer" => Component::QueryEdge,
            "zero_queries" => Component::QueryNoEdge,
            "transformer" => Component::Query,
            "ppm_fpn" => Component::Dual,
            "aux_mask" => Component::DualQuery,
            "aux_conv" => Component::DualNoQuery,
            "decoder" if name.contains(".edge.") => Component::Edge,
            _ => Component::Core,
        }
    }

    pub fn is_active(self, t: Toggles) -> bool {
        match self {
            Component::Core => true,
            Component::Edge => t.edge,
            Component::Query => t.query,
            Component::Dual => t.dual_decoder,
            Component::QueryEdge => t.query && t.edge,
            Component::QueryNoEdge => t.query && !t.edge,
            Component::DualQuery => t.dual_decoder && t.query,
            Component::DualNoQuery => t.dual_decoder && !t.query,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    /// 1 for grayscale input (projected to 3 channels), or 3.
    pub in_channels: usize,
    pub decoder_depths: [usize; 3],
    pub fpn_channels: usize,
    pub transformer_layers: usize,
    pub transformer_heads: usize,
    pub transformer_mlp_ratio: usize,
    pub toggles: Toggles,
}

impl ModelConfig {
    /// Base width 96 (D_E4 = 768), FPN width 256, two transformer layers
    /// with eight heads.
    pub fn standard(num_classes: usize, input_size: usize) -> Self {
        Self {
            backbone: BackboneConfig::standard(input_size),
            num_classes,
            in_channels: 1,
            decoder_depths: [1, 1, 1],
            fpn_channels: 256,
            transformer_layers: 2,
            transformer_heads: 8,
            transformer_mlp_ratio: 4,
            toggles: Toggles::all(),
        }
    }

    /// Reduced widths sized for single-core CPU training.
    pub fn desk(num_classes: usize, input_size: usize) -> Self {
        let mut backbone = BackboneConfig::standard(input_size);
        backbone.base_channels = 16;
        backbone.depths = [1, 1, 1, 1];
        backbone.head_dim = 16;
        backbone.mlp_ratio = 2;
        Self {
            backbone,
            num_classes,
            in_channels: 1,
            decoder_depths: [1, 1, 1],
            fpn_channels: 32,
            transformer_layers: 2,
            transformer_heads: 8,
            transformer_mlp_ratio: 2,
            toggles: Toggles::all(),
        }
    }

    pub fn input_size(&self) -> usize {
        self.backbone.input_size
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            num_classes: self.num_classes,
            d_block_depths: self.decoder_depths,
            fuse_edge: self.toggles.edge,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.decoder_config().validate()?;
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(config_err!("input must have 1 or 3 channels, got {}", self.in_channels));
        }
        if self.fpn_channels == 0 {
            return Err(config_err!("fpn_channels must be positive"));
        }
        let d = self.backbone.d_e4();
        if d % 4 != 0 {
            return Err(config_err!("bottleneck width {d} must be divisible by 4"));
        }
        if self.transformer_heads == 0 || d % self.transformer_heads != 0 {
            return Err(config_err!(
                "bottleneck width {d} not divisible by {} heads",
                self.transformer_heads
            ));
        }
        Ok(())
    }
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// Main decoder logits `[batch, classes, H, W]`.
    pub y1: Tensor,
    /// Auxiliary logits, present when the dual decoder is enabled.
    pub y2: Option<Tensor>,
    /// Edge regression `[batch, 1, H/4, W/4]`, present when the edge module is
    /// enabled.
    pub edge_pred: Option<Tensor>,
    pub pyramid: FeaturePyramid,
    pub queries: Option<QuerySet>,
    pub refined: Option<RefinedBottleneck>,
    pub edge: Option<EdgeOutputs>,
}

/// Query-based MaxViT U-Net with edge enhancement.
#[derive(Debug)]
pub struct QMaxVitUnet {
    cfg: ModelConfig,
    store: ParamStore,
    gray: GrayProjection,
    encoder: Encoder,
    edge: EdgeModule,
    enhancer: QueryEnhancer,
    zero_queries: ZeroQueries,
    transformer: TwoWayTransformer,
    decoder: Decoder,
    ppm_fpn: PpmFpn,
    aux_mask: AuxMaskHead,
    aux_conv: AuxConvHead,
}

impl QMaxVitUnet {
    /// Builds every component (disabled ones stay idle) with weights drawn
    /// from `seed`.
    pub fn new(cfg: &ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(dtype, seed);
        let root: Params = store.root();
        let b = &cfg.backbone;
        let d_e4 = b.d_e4();
        let encoder = Encoder::new(&root.pp("encoder"), b, seed.wrapping_add(1))?;
        let edge = EdgeModule::new(&root.pp("edge"), b, seed.wrapping_add(2))?;
        let attention_channels = edge.attention_channels();
        Ok(Self {
            gray: GrayProjection::new(&root.pp("gray"), true)?,
            enhancer: QueryEnhancer::new(&root.pp("enhancer"), attention_channels, cfg.num_classes, d_e4)?,
            zero_queries: ZeroQueries::new(&root.pp("zero_queries"), cfg.num_classes, d_e4)?,
            transformer: TwoWayTransformer::new(
                &root.pp("transformer"),
                d_e4,
                cfg.transformer_layers,
                cfg.transformer_heads,
                cfg.transformer_mlp_ratio,
            )?,
            decoder: Decoder::new(
                &root.pp("decoder"),
                &cfg.decoder_config(),
                b,
                attention_channels,
                seed.wrapping_add(3),
            )?,
            ppm_fpn: PpmFpn::new(&root.pp("ppm_fpn"), b.stage_channels(), cfg.fpn_channels)?,
            aux_mask: AuxMaskHead::new(&root.pp("aux_mask"), d_e4, cfg.fpn_channels)?,
            aux_conv: AuxConvHead::new(&root.pp("aux_conv"), cfg.fpn_channels, cfg.num_classes)?,
            encoder,
            edge,
            cfg: cfg.clone(),
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn edge_module(&self) -> &EdgeModule {
        &self.edge
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn transformer(&self) -> &TwoWayTransformer {
        &self.transformer
    }

    pub fn ppm_fpn(&self) -> &PpmFpn {
        &self.ppm_fpn
    }

    pub fn aux_mask(&self) -> &AuxMaskHead {
        &self.aux_mask
    }

    pub fn query_enhancer(&self) -> &QueryEnhancer {
        &self.enhancer
    }

    /// Trainable variables of the enabled components.
    pub fn active_vars(&self) -> Vec<(String, Var)> {
        let t = self.cfg.toggles;
        self.store.trainable(|name| Component::of(name).is_active(t))
    }

    /// Number of trainable scalars in enabled components.
    pub fn active_param_count(&self) -> usize {
        self.active_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Runs the network on `[batch, in_channels, size, size]` images.
    pub fn forward(&self, image: &Tensor, train: bool) -> Result<ModelOutput> {
        let (batch, c, h, w) = image.dims4()?;
        let size = self.cfg.input_size();
        if c != self.cfg.in_channels || h != size || w != size {
            return Err(shape_err!(
                "model expects [_, {}, {size}, {size}] input, got {:?}",
                self.cfg.in_channels,
                image.dims()
            ));
        }
        let image = image.to_dtype(self.dtype())?;
        let x = if c == 1 {
            self.gray.forward(&image, train)?
        } else {
            image
        };
        let t = self.cfg.toggles;
        let pyramid = self.encoder.encode(&x, train)?;

        let edge = if t.edge {
            Some(self.edge.forward(&pyramid.e1, &pyramid.e2, train)?)
        } else {
            None
        };
        let queries = match (t.query, &edge) {
            (false, _) => None,
            (true, Some(e)) => Some(self.enhancer.enhance(&e.edge_attention)?),
            (true, None) => Some(self.zero_queries.expand(batch)?),
        };
        let refined = match &queries {
            Some(q) => Some(self.transformer.refine(&pyramid.e4, q)?),
            None => None,
        };
        let bottleneck = refined.as_ref().map(|r| &r.features).unwrap_or(&pyramid.e4);
        let injections = edge.as_ref().map(|e| e.d_block_injections.as_slice());
        let y1 = self.decoder.decode(bottleneck, &pyramid, injections, train)?;

        let y2 = if t.dual_decoder {
            let fused = self.ppm_fpn.forward(&pyramid.e2, &pyramid.e3, &pyramid.e4)?;
            Some(match &refined {
                Some(r) => self.aux_mask.forward(&r.updated_queries, &fused, size)?,
                None => self.aux_conv.forward(&fused, size)?,
            })
        } else {
            None
        };
        Ok(ModelOutput {
            y1,
            y2,
            edge_pred: edge.as_ref().map(|e| e.edge_pred.clone()),
            pyramid,
            queries,
            refined,
            edge,
        })
    }

    /// Per-pixel argmax of y1, `[batch, H, W]` as u32.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let out = self.forward(image, false)?;
        Ok(out.y1.argmax(1)?)
    }
}
