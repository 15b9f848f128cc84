use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which subnetwork is built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Image and tendon streams fused through the spatial attention gate.
    Full,
    /// Tendon history only: TFE then the point predictor.
    TfeOnly,
    /// Image only: SFE then the point predictor.
    SfeOnly,
    /// Both streams, concatenated without the attention gate.
    FfNoattn,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Self::TfeOnly, Self::SfeOnly, Self::FfNoattn, Self::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::TfeOnly => "tfe_only",
            Self::SfeOnly => "sfe_only",
            Self::FfNoattn => "ff_noattn",
        }
    }

    /// Column heading used in comparison tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Self::Full => "Proposed",
            Self::TfeOnly => "TFE-Net",
            Self::SfeOnly => "SFE-Net",
            Self::FfNoattn => "FF-Net",
        }
    }

    pub fn uses_image(self) -> bool {
        !matches!(self, Self::TfeOnly)
    }

    pub fn uses_tendons(self) -> bool {
        !matches!(self, Self::SfeOnly)
    }

    pub fn uses_attention(self) -> bool {
        matches!(self, Self::Full)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (expected full, tfe_only, sfe_only or ff_noattn)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub profile: String,
    pub image_height: usize,
    pub image_width: usize,
    pub image_channels: usize,
    /// Output channels of each encoder block; one 2×2 pool per block.
    pub ladder: Vec<usize>,
    pub tendon_dim: usize,
    pub lstm_layers: usize,
    pub hidden: usize,
    pub attention_kernel: usize,
    pub dropout: f64,
    /// Number of predicted backbone points.
    pub points: usize,
    /// Tendon history length fed to the LSTM.
    pub window: usize,
}

impl NetConfig {
    /// 64×64 images, ladder 3→8→16→32→64, hidden size 16.
    pub fn desk() -> Self {
        Self {
            profile: "desk".into(),
            image_height: 64,
            image_width: 64,
            image_channels: 3,
            ladder: vec![8, 16, 32, 64],
            tendon_dim: 4,
            lstm_layers: 2,
            hidden: 16,
            attention_kernel: 7,
            dropout: 0.5,
            points: 5,
            window: 10,
        }
    }

    /// 640×480 images, four blocks ending at 1024 channels, two-layer LSTM
    /// with hidden size 100.
    pub fn paper() -> Self {
        Self {
            profile: "paper".into(),
            image_height: 480,
            image_width: 640,
            ladder: vec![128, 256, 512, 1024],
            hidden: 100,
            ..Self::desk()
        }
    }

    /// 8×8 images, one block 3→4, hidden 4, two points. Small enough for
    /// exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            profile: "tiny".into(),
            image_height: 8,
            image_width: 8,
            ladder: vec![4],
            hidden: 4,
            points: 2,
            window: 3,
            ..Self::desk()
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ladder.is_empty() {
            return Err(Error::Config("encoder ladder is empty".into()));
        }
        let div = 1usize << self.ladder.len();
        if !self.image_height.is_multiple_of(div) || !self.image_width.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible by 2^{} = {div}",
                self.image_height,
                self.image_width,
                self.ladder.len()
            )));
        }
        if self.attention_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("attention kernel {} must be odd", self.attention_kernel)));
        }
        if self.points < 2 {
            return Err(Error::Config("at least two output points are required".into()));
        }
        if self.window == 0 || self.lstm_layers == 0 || self.hidden == 0 {
            return Err(Error::Config("window, LSTM layers and hidden size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Shape `[h, w, C]` of the encoder output.
    pub fn bottleneck_shape(&self) -> [usize; 3] {
        let div = 1usize << self.ladder.len();
        [
            self.image_height / div,
            self.image_width / div,
            *self.ladder.last().expect("validated ladder"),
        ]
    }

    /// Length of the flattened vector entering the point predictor.
    pub fn predictor_inputs(&self, variant: Variant) -> usize {
        let [h, w, c] = self.bottleneck_shape();
        match variant {
            Variant::TfeOnly => self.hidden,
            Variant::SfeOnly => h * w * c,
            Variant::Full | Variant::FfNoattn => h * w * (c + self.hidden),
        }
    }

    pub fn outputs(&self) -> usize {
        3 * self.points
    }
}
