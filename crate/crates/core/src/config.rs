//! Architecture hyperparameters and ablation switches.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Which parts of the network are active. All on is the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Switches {
    pub use_local: bool,
    pub use_global: bool,
    pub use_lgff: bool,
    pub use_pmi: bool,
    pub use_pga: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Self::FULL
    }
}

impl Switches {
    pub const FULL: Self = Self {
        use_local: true,
        use_global: true,
        use_lgff: true,
        use_pmi: true,
        use_pga: true,
    };

    /// The six switch rows of the ablation table, in order.
    pub fn ablation_rows() -> [Self; 6] {
        let row = |l, g, f, p, a| Self {
            use_local: l,
            use_global: g,
            use_lgff: f,
            use_pmi: p,
            use_pga: a,
        };
        [
            row(true, false, false, true, true),
            row(false, true, false, true, true),
            row(true, true, true, false, false),
            row(true, true, true, false, true),
            row(true, true, true, true, false),
            Self::FULL,
        ]
    }

    /// Compact `TFTTT`-style label.
    pub fn label(&self) -> String {
        [
            self.use_local,
            self.use_global,
            self.use_lgff,
            self.use_pmi,
            self.use_pga,
        ]
        .iter()
        .map(|&b| if b { 'T' } else { 'F' })
        .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Square input extent; must be divisible by 32.
    pub input_size: usize,
    pub stem_channels: usize,
    pub widths: [usize; 4],
    /// Swin blocks per global stage; each must be even.
    pub depths: [usize; 4],
    pub window: usize,
    /// Attention heads per stage; empty means `max(width / 16, 1)`.
    pub heads: Vec<usize>,
    pub dilation: usize,
    pub spe_reduction: usize,
    pub mlp_ratio: usize,
    pub irmlp_expansion: usize,
    pub patch_size: usize,
    pub rel_pos_bias: bool,
    pub qkv_bias: bool,
    pub eag_groups: usize,
    pub psa_kernels: [usize; 4],
    pub psa_groups: [usize; 4],
    pub psa_se_reduction: usize,
    pub switches: Switches,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 64×64 input, four classes, small widths; trains on one CPU.
    pub fn desk() -> Self {
        Self {
            in_channels: 3,
            num_classes: 4,
            input_size: 64,
            stem_channels: 8,
            widths: [8, 16, 32, 64],
            depths: [2, 2, 2, 2],
            window: 4,
            heads: Vec::new(),
            dilation: 2,
            spe_reduction: 4,
            mlp_ratio: 4,
            irmlp_expansion: 4,
            patch_size: 4,
            rel_pos_bias: true,
            qkv_bias: true,
            eag_groups: 4,
            psa_kernels: [3, 5, 7, 9],
            psa_groups: [1, 4, 8, 16],
            psa_se_reduction: 4,
            switches: Switches::FULL,
        }
    }

    /// Full-size layout: 224 input, window 7, depths 2/2/18/2.
    pub fn paper() -> Self {
        Self {
            num_classes: 9,
            input_size: 224,
            stem_channels: 96,
            widths: [96, 192, 384, 768],
            depths: [2, 2, 18, 2],
            window: 7,
            heads: vec![3, 6, 12, 24],
            psa_se_reduction: 16,
            ..Self::desk()
        }
    }

    pub fn with_switches(mut self, switches: Switches) -> Self {
        self.switches = switches;
        self
    }

    pub fn heads_at(&self, stage: usize) -> usize {
        match self.heads.get(stage) {
            Some(&h) => h,
            None => (self.widths[stage] / 16).max(1),
        }
    }

    /// Token-grid extent of global stage `stage` (0-based).
    pub fn stage_resolution(&self, stage: usize) -> usize {
        self.input_size / (4 << stage)
    }

    /// Effective window at a stage: the largest divisor of the grid extent
    /// that does not exceed the configured size.
    pub fn window_at(&self, stage: usize) -> usize {
        let res = self.stage_resolution(stage);
        (1..=self.window.min(res))
            .rev()
            .find(|m| res % m == 0)
            .unwrap_or(1)
    }

    /// Cyclic shift for the odd blocks of a stage; zero when one window covers the grid.
    pub fn shift_at(&self, stage: usize) -> usize {
        let m = self.window_at(stage);
        if self.stage_resolution(stage) <= m {
            0
        } else {
            m / 2
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.switches;
        if !s.use_local && !s.use_global {
            return config_err("at least one encoder branch must be enabled");
        }
        if s.use_lgff && !(s.use_local && s.use_global) {
            return config_err("LGFF requires both encoder branches");
        }
        if self.in_channels == 0 || self.num_classes < 2 {
            return config_err("need at least one input channel and two classes");
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return config_err(format!(
                "input size {} is not a positive multiple of 32",
                self.input_size
            ));
        }
        if self.stem_channels == 0 || self.widths.contains(&0) {
            return config_err("channel widths must be positive");
        }
        if self.widths.windows(2).any(|w| w[1] < w[0]) {
            return config_err("widths must be non-decreasing");
        }
        if self.patch_size != 4 {
            return config_err("patch size must be 4 so global stages align with local stages");
        }
        if self.depths.iter().any(|&d| d == 0 || d % 2 != 0) {
            return config_err(format!(
                "stage depths {:?} must be positive and even",
                self.depths
            ));
        }
        if self.window == 0
            || self.dilation == 0
            || self.mlp_ratio == 0
            || self.irmlp_expansion == 0
        {
            return config_err("window, dilation and expansion ratios must be positive");
        }
        if !self.heads.is_empty() && self.heads.len() != 4 {
            return config_err("heads must list one value per stage");
        }
        for stage in 0..4 {
            let h = self.heads_at(stage);
            if h == 0 || self.widths[stage] % h != 0 {
                return config_err(format!(
                    "{h} heads do not divide width {}",
                    self.widths[stage]
                ));
            }
        }
        if self.spe_reduction == 0 || self.widths.iter().any(|w| w % self.spe_reduction != 0) {
            return config_err("SPE reduction must divide every width");
        }
        if self.eag_groups == 0 || self.widths.iter().any(|w| w % self.eag_groups != 0) {
            return config_err("EAG group count must divide every width");
        }
        if self.widths.iter().any(|w| w % 4 != 0) {
            return config_err("PSA needs widths divisible by 4");
        }
        if self.psa_kernels.iter().any(|k| k % 2 == 0) || self.psa_se_reduction == 0 {
            return config_err("PSA kernels must be odd and the SE reduction positive");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
