use crate::dihedral::ORDER;
use crate::error::{Error, Result};
use crate::glayers::{DownsampleMethod, SkipMode, UpsampleMode};
use crate::kv;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupMode {
    /// D4 group layers; features carry 8 orientation planes per channel.
    Group,
    /// The plain-CNN twin: identical topology with a trivial orientation axis.
    Regular,
}

impl GroupMode {
    pub fn group_size(self) -> usize {
        match self {
            GroupMode::Group => ORDER,
            GroupMode::Regular => 1,
        }
    }
}

crate::glayers::text_enum!(GroupMode { Group => "group", Regular => "regular" });

/// Width factor that matches a group network's parameter count to a regular one.
pub const INV_SQRT8: f64 = 0.353_553_390_593_273_8;

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub base_width: usize,
    /// Resolution levels including the bottleneck; `stages - 1` downsamples.
    pub stages: usize,
    pub blocks_per_stage: usize,
    pub skip_mode: SkipMode,
    pub downsample: DownsampleMethod,
    pub upsample_mode: UpsampleMode,
    pub group_mode: GroupMode,
    pub n_classes: usize,
    pub width_scale: f64,
    pub in_channels: usize,
    pub init_seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            base_width: 8,
            stages: 4,
            blocks_per_stage: 2,
            skip_mode: SkipMode::Add,
            downsample: DownsampleMethod::ConvThenAvgpool,
            upsample_mode: UpsampleMode::Nearest,
            group_mode: GroupMode::Group,
            n_classes: 2,
            width_scale: 1.0,
            in_channels: 1,
            init_seed: 0,
        }
    }
}

impl NetConfig {
    pub const KEYS: [&'static str; 11] = [
        "base_width",
        "stages",
        "blocks_per_stage",
        "skip_mode",
        "downsample",
        "upsample_mode",
        "group_mode",
        "n_classes",
        "width_scale",
        "in_channels",
        "init_seed",
    ];

    /// The regular twin of this config, at full width.
    pub fn regular_twin(&self) -> NetConfig {
        NetConfig {
            group_mode: GroupMode::Regular,
            width_scale: 1.0,
            ..self.clone()
        }
    }

    /// The parameter-matched group counterpart (widths scaled by 1/√8).
    pub fn group_twin(&self) -> NetConfig {
        NetConfig {
            group_mode: GroupMode::Group,
            width_scale: INV_SQRT8,
            ..self.clone()
        }
    }

    pub fn group_size(&self) -> usize {
        self.group_mode.group_size()
    }

    /// Channel count per resolution level: `round(base_width · 2^s · width_scale)`.
    pub fn widths(&self) -> Result<Vec<usize>> {
        self.validate()?;
        (0..self.stages)
            .map(|s| {
                let w = (self.base_width as f64 * (1u64 << s) as f64 * self.width_scale).round();
                if w < 1.0 {
                    Err(Error::Config(format!(
                        "stage {s} width rounds to {w}; increase base_width or width_scale"
                    )))
                } else {
                    Ok(w as usize)
                }
            })
            .collect()
    }

    /// Input side lengths must be multiples of this.
    pub fn stride_product(&self) -> usize {
        1 << self.stages.saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_width", self.base_width),
            ("stages", self.stages),
            ("blocks_per_stage", self.blocks_per_stage),
            ("n_classes", self.n_classes),
            ("in_channels", self.in_channels),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.stages > 16 {
            return Err(Error::Config("stages must be at most 16".into()));
        }
        if !(self.width_scale.is_finite() && self.width_scale > 0.0) {
            return Err(Error::Config("width_scale must be a positive number".into()));
        }
        Ok(())
    }

    /// Sets one key. Returns `false` for keys this config does not own.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "base_width" => self.base_width = kv::value(key, v)?,
            "stages" => self.stages = kv::value(key, v)?,
            "blocks_per_stage" => self.blocks_per_stage = kv::value(key, v)?,
            "skip_mode" => self.skip_mode = v.parse()?,
            "downsample" => self.downsample = v.parse()?,
            "upsample_mode" => self.upsample_mode = v.parse()?,
            "group_mode" => self.group_mode = v.parse()?,
            "n_classes" => self.n_classes = kv::value(key, v)?,
            "width_scale" => {
                self.width_scale = match v {
                    "inv_sqrt8" => INV_SQRT8,
                    _ => kv::value(key, v)?,
                }
            }
            "in_channels" => self.in_channels = kv::value(key, v)?,
            "init_seed" => self.init_seed = kv::value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("base_width", self.base_width.to_string()),
            ("stages", self.stages.to_string()),
            ("blocks_per_stage", self.blocks_per_stage.to_string()),
            ("skip_mode", self.skip_mode.to_string()),
            ("downsample", self.downsample.to_string()),
            ("upsample_mode", self.upsample_mode.to_string()),
            ("group_mode", self.group_mode.to_string()),
            ("n_classes", self.n_classes.to_string()),
            ("width_scale", self.width_scale.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("init_seed", self.init_seed.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        kv::render(&self.pairs())
    }

    /// Parses config text; keys under `state.` are skipped, anything else unknown is an error.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = NetConfig::default();
        for (k, v) in kv::parse(text)? {
            if k.starts_with("state.") {
                continue;
            }
            if !cfg.set(&k, &v)? {
                return Err(Error::Config(format!("unknown network key `{k}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
