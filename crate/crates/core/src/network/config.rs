use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureConfig, GRID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 256×256 input, 32/64/128/256 encoder, 64/16 decoder.
    #[default]
    Full,
    /// 128×128 input with narrow layers; same topology, CPU-sized.
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Profile::Full),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::arg(format!("unknown profile `{other}` (full | desk)"))),
        }
    }
}

impl std::fmt::Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Profile::Full => "full",
            Profile::Desk => "desk",
        })
    }
}

/// Every dimension of the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_side: usize,
    pub patch_grid: usize,
    /// Hidden width `N_h`.
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub timesteps: usize,
    /// Width `N_f` of the per-patch projection.
    pub projection_width: usize,
    pub encoder_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    pub decoder_upsample_factors: Vec<usize>,
    pub features: FeatureConfig,
}

impl NetworkConfig {
    pub fn full() -> Self {
        NetworkConfig {
            input_side: 256,
            patch_grid: GRID,
            lstm_hidden: 128,
            lstm_layers: 2,
            timesteps: GRID * GRID,
            projection_width: 64,
            encoder_channels: vec![32, 64, 128, 256],
            decoder_channels: vec![64, 16],
            decoder_upsample_factors: vec![4, 4],
            features: FeatureConfig::FULL,
        }
    }

    pub fn desk() -> Self {
        NetworkConfig {
            input_side: 128,
            patch_grid: GRID,
            lstm_hidden: 32,
            lstm_layers: 2,
            timesteps: GRID * GRID,
            projection_width: 16,
            encoder_channels: vec![8, 16, 32, 64],
            decoder_channels: vec![16, 4],
            decoder_upsample_factors: vec![4, 4],
            features: FeatureConfig::DESK,
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Full => Self::full(),
            Profile::Desk => Self::desk(),
        }
    }

    /// Side of the encoder output, where the two branches meet.
    pub fn fusion_side(&self) -> usize {
        self.input_side >> self.encoder_channels.len()
    }

    /// Nearest-neighbour factor taking the 8×8 LSTM map to the fusion side.
    pub fn lstm_upsample(&self) -> usize {
        self.fusion_side() / self.patch_grid
    }

    pub fn feature_dim(&self) -> usize {
        self.features.dim()
    }

    pub fn patch_side(&self) -> usize {
        self.input_side / self.patch_grid
    }

    pub fn fused_channels(&self) -> usize {
        self.encoder_channels.last().copied().unwrap_or(0) + self.projection_width
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::arg(format!("network config: {m}")));
        if self.patch_grid != GRID {
            return bad(format!("patch grid must be {GRID}, got {}", self.patch_grid));
        }
        if self.timesteps != self.patch_grid * self.patch_grid {
            return bad(format!(
                "timesteps {} must equal patch_grid² = {}",
                self.timesteps,
                self.patch_grid * self.patch_grid
            ));
        }
        if self.lstm_layers == 0 || self.lstm_hidden == 0 || self.projection_width == 0 {
            return bad("LSTM layers, hidden width and projection width must be positive".into());
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return bad("encoder needs at least one stage with positive width".into());
        }
        if self.decoder_channels.is_empty() || self.decoder_channels.contains(&0) {
            return bad("decoder needs at least one stage with positive width".into());
        }
        if self.decoder_channels.len() != self.decoder_upsample_factors.len() {
            return bad("one upsampling factor per decoder stage".into());
        }
        if self.decoder_upsample_factors.contains(&0) {
            return bad("upsampling factors must be at least 1".into());
        }
        let stride = 1usize << self.encoder_channels.len();
        if self.input_side % stride != 0 || self.input_side % self.patch_grid != 0 {
            return bad(format!(
                "input side {} must be divisible by {stride} and {}",
                self.input_side, self.patch_grid
            ));
        }
        let fusion = self.fusion_side();
        if fusion < self.patch_grid || fusion % self.patch_grid != 0 {
            return bad(format!(
                "fusion side {fusion} must be a multiple of {}",
                self.patch_grid
            ));
        }
        let decoded: usize = fusion * self.decoder_upsample_factors.iter().product::<usize>();
        if decoded != self.input_side {
            return bad(format!(
                "decoder upsampling reaches {decoded}, input side is {}",
                self.input_side
            ));
        }
        self.features.validate()
    }

    /// Expected shape of every intermediate activation, in forward order.
    pub fn stage_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut side = self.input_side;
        out.push(("input".to_string(), vec![side, side, 3]));
        for (i, &c) in self.encoder_channels.iter().enumerate() {
            side /= 2;
            out.push((format!("encoder.{i}"), vec![side, side, c]));
        }
        out.push((
            "lstm_map".to_string(),
            vec![self.patch_grid, self.patch_grid, self.projection_width],
        ));
        out.push(("fused".to_string(), vec![side, side, self.fused_channels()]));
        for (i, (&c, &f)) in self
            .decoder_channels
            .iter()
            .zip(&self.decoder_upsample_factors)
            .enumerate()
        {
            side *= f;
            out.push((format!("decoder.{i}"), vec![side, side, c]));
        }
        out.push(("logits".to_string(), vec![side, side, 2]));
        out
    }
}
