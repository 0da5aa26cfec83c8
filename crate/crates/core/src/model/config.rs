use crate::error::{Error, Result};

/// Height × width in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Size2 {
    pub h: usize,
    pub w: usize,
}

impl Size2 {
    pub const fn square(s: usize) -> Self {
        Self { h: s, w: s }
    }

    pub const fn new(h: usize, w: usize) -> Self {
        Self { h, w }
    }

    pub fn is_square(&self) -> bool {
        self.h == self.w
    }
}

/// Component switches mirroring the ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationFlags {
    pub use_mvip: bool,
    pub use_spatial_attn: bool,
    pub use_token_attn: bool,
    pub use_template_update: bool,
    pub use_kalman: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_mvip: true,
            use_spatial_attn: true,
            use_token_attn: true,
            use_template_update: true,
            use_kalman: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub template_size: Size2,
    pub search_size: Size2,
    /// Bottleneck ratio of the token-attention projections (`N → N/r → N`).
    pub reduction_ratio: usize,
    /// Initial fovea sharpness λ.
    pub fovea_init: f64,
    /// Width of the first head convolution; later layers halve it.
    pub head_channels: usize,
    /// Both modality branches run the same encoder weights.
    pub share_backbone: bool,
    pub hanning_window: bool,
    /// Apply the fovea to the other-modality branch instead of the current one.
    pub fovea_on_other: bool,
    /// Squash attention weights with a sigmoid (CBAM style). Off by default.
    pub attn_sigmoid: bool,
    pub flags: AblationFlags,
}

impl Default for ModelConfig {
    /// ViT-B/16 with a 128² template and 256² search region.
    fn default() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 768,
            num_layers: 12,
            num_heads: 12,
            mlp_ratio: 4,
            template_size: Size2::square(128),
            search_size: Size2::square(256),
            reduction_ratio: 16,
            fovea_init: 10.0,
            head_channels: 256,
            share_backbone: true,
            hanning_window: true,
            fovea_on_other: false,
            attn_sigmoid: false,
            flags: AblationFlags::default(),
        }
    }
}

impl ModelConfig {
    /// Smallest useful configuration (D=16, L=2, N=12) for gradient checks.
    pub fn gradcheck_toy() -> Self {
        Self {
            patch_size: 4,
            embed_dim: 16,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2,
            template_size: Size2::new(8, 16),
            search_size: Size2::square(8),
            reduction_ratio: 4,
            fovea_init: 2.0,
            head_channels: 8,
            ..Self::default()
        }
    }

    /// Desk-scale tracking configuration: 32² template, 64² search, 8-pixel
    /// patches (N = 16 + 64 = 80).
    pub fn tracking_toy(embed_dim: usize, num_layers: usize) -> Self {
        Self {
            patch_size: 8,
            embed_dim,
            num_layers,
            num_heads: 4,
            mlp_ratio: 2,
            template_size: Size2::square(32),
            search_size: Size2::square(64),
            reduction_ratio: 16,
            head_channels: 32,
            ..Self::default()
        }
    }

    pub fn n_template(&self) -> usize {
        (self.template_size.h / self.patch_size) * (self.template_size.w / self.patch_size)
    }

    pub fn n_search(&self) -> usize {
        (self.search_size.h / self.patch_size) * (self.search_size.w / self.patch_size)
    }

    pub fn n_tokens(&self) -> usize {
        self.n_template() + self.n_search()
    }

    /// Side of the square search feature grid.
    pub fn grid(&self) -> usize {
        self.search_size.w / self.patch_size
    }

    /// Flattened patch length `P²·3`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * crate::image::CHANNELS
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Channel widths of the four head convolutions.
    pub fn head_widths(&self) -> [usize; 4] {
        let c = self.head_channels;
        [c, c / 2, c / 4, c / 8]
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        let err = |m: String| Err(Error::config(m));
        if p == 0 || self.embed_dim == 0 || self.num_layers == 0 || self.num_heads == 0 {
            return err("patch_size, embed_dim, num_layers and num_heads must be positive".into());
        }
        for (name, s) in [("template", self.template_size), ("search", self.search_size)] {
            if s.h == 0 || s.w == 0 || s.h % p != 0 || s.w % p != 0 {
                return err(format!("{name} size {}x{} not divisible by patch size {p}", s.h, s.w));
            }
        }
        if !self.search_size.is_square() {
            return err(format!(
                "search region must be square, got {}x{}",
                self.search_size.h, self.search_size.w
            ));
        }
        if self.embed_dim % self.num_heads != 0 {
            return err(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        let n = self.n_tokens();
        if self.reduction_ratio == 0 || n % self.reduction_ratio != 0 {
            return err(format!(
                "reduction ratio {} does not divide token count {n}",
                self.reduction_ratio
            ));
        }
        if self.mlp_ratio == 0 {
            return err("mlp_ratio must be positive".into());
        }
        if self.head_channels < 8 || self.head_channels % 8 != 0 {
            return err(format!(
                "head_channels must be a positive multiple of 8, got {}",
                self.head_channels
            ));
        }
        if !(self.fovea_init > 0.0 && self.fovea_init.is_finite()) {
            return err(format!("fovea_init must be positive, got {}", self.fovea_init));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_token_counts() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.n_search(), 256);
        assert_eq!(c.n_template(), 64);
        assert_eq!(c.n_tokens(), 320);
        assert_eq!(c.grid(), 16);
    }

    #[test]
    fn presets_are_valid() {
        let g = ModelConfig::gradcheck_toy();
        g.validate().unwrap();
        assert_eq!((g.embed_dim, g.num_layers, g.n_tokens()), (16, 2, 12));
        let t = ModelConfig::tracking_toy(64, 3);
        t.validate().unwrap();
        assert_eq!(t.n_tokens(), 80);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let c = ModelConfig {
            patch_size: 15,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            num_heads: 7,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            reduction_ratio: 7,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
