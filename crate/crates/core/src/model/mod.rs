//! The dual-branch tracker network.

pub mod config;
pub mod head;
pub mod loss;
pub mod params;
pub mod train;
pub mod vit;

use crate::bbox::BBox;
use crate::error::Result;
use crate::image::{Image, Pair};
use crate::tracking::crop::CropGeometry;

pub use config::{AblationFlags, ModelConfig, Size2};
pub use head::{decode_box, head_forward, HeadMaps, HeadOutput};
pub use loss::{compute_loss, Loss};
pub use params::{Ctx, Init, ParamSpec, ParamStore};
pub use vit::{
    concat_tokens, dual_forward, embed_pair, encoder_layer, fuse_reduce, patch_embed, single_forward, DualOutput, Modality,
    Segment, TokenSeq,
};

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

/// Graph handles produced by one full forward pass.
pub struct Forward {
    pub dual: DualOutput,
    pub fused: TokenSeq,
    pub head: HeadOutput,
}

impl Model {
    /// Every parameter the configuration uses, in canonical order.
    pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
        let mut v = Vec::new();
        for m in ["rgb", "tir"] {
            v.extend(params::linear_specs(&format!("patch_embed.{m}"), cfg.patch_dim(), cfg.embed_dim, false));
        }
        v.extend(vit::backbone_specs(cfg));
        v.extend(vit::prompt_specs(cfg));
        v.extend(vit::fuse_specs(cfg));
        v.extend(head::head_specs(cfg));
        v
    }

    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::init(&Self::param_specs(&config), seed)?;
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking them against `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        params.check_against(&Self::param_specs(&config))?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Changes inference-time switches that do not alter the parameter set.
    pub fn set_runtime_flags(&mut self, hanning: bool, template_update: bool, kalman: bool) {
        self.config.hanning_window = hanning;
        self.config.flags.use_template_update = template_update;
        self.config.flags.use_kalman = kalman;
    }

    /// Full forward on standardized template and search crops.
    pub fn forward(&self, ctx: &mut Ctx<'_>, template: Pair<&Image>, search: Pair<&Image>, capture: Option<usize>) -> Result<Forward> {
        let cfg = &self.config;
        let rgb = embed_pair(ctx, cfg, Modality::Rgb, template.rgb, search.rgb)?;
        let tir = embed_pair(ctx, cfg, Modality::Tir, template.tir, search.tir)?;
        let dual = dual_forward(ctx, cfg, &rgb, &tir, capture)?;
        let fused = fuse_reduce(ctx, &dual.rgb, &dual.tir)?;
        let head = head_forward(ctx, &fused)?;
        Ok(Forward { dual, fused, head })
    }

    /// Head maps for one frame without gradient tracking.
    pub fn head_maps(&self, template: Pair<&Image>, search: Pair<&Image>) -> Result<HeadMaps> {
        let mut ctx = Ctx::new(&self.params, false);
        let f = self.forward(&mut ctx, template, search, None)?;
        Ok(f.head.maps(&ctx.g))
    }

    /// Decoded box in frame coordinates through `geom`.
    pub fn predict(&self, template: Pair<&Image>, search: Pair<&Image>, geom: &CropGeometry) -> Result<BBox> {
        let maps = self.head_maps(template, search)?;
        Ok(decode_box(&maps, &self.config, geom, self.config.hanning_window))
    }
}
