//! Modality embedders, local and global encoders, distribution heads and the
//! multi-proposal decoder.

mod decoder;
mod embed;
mod frames;
mod global;
mod heads;
mod local;
mod model;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use decoder::{DecodedVars, Decoder, ForecastSet};
pub use embed::{
    Embedder, FrozenText, LearnedText, ModalityEmbeddings, TextEncoder, TextEncoderKind,
};
pub use frames::{rotate_to_heading, Frames};
pub use global::{GlobalGraph, GlobalPlain};
pub use heads::{DistributionHead, LOGVAR_CLAMP};
pub use local::{LocalGraph, LocalHolistic};
pub use model::{LatentPacket, LatentVars, Model, ModelOutput};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    X,
    P,
    S,
}

/// A subset of {trajectory `X`, pose `P`, text `S`}; always contains `X`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Modality>", into = "Vec<Modality>")]
pub struct ModalitySet {
    pub pose: bool,
    pub text: bool,
}

impl ModalitySet {
    pub const X: ModalitySet = ModalitySet {
        pose: false,
        text: false,
    };
    pub const XP: ModalitySet = ModalitySet {
        pose: true,
        text: false,
    };
    pub const XS: ModalitySet = ModalitySet {
        pose: false,
        text: true,
    };
    pub const XPS: ModalitySet = ModalitySet {
        pose: true,
        text: true,
    };

    pub fn trajectory_only(self) -> bool {
        !self.pose && !self.text
    }

    pub fn is_subset_of(self, other: ModalitySet) -> bool {
        (!self.pose || other.pose) && (!self.text || other.text)
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut out = Vec::new();
        for ch in s
            .chars()
            .filter(|c| !matches!(c, '+' | ',' | ' ' | '{' | '}'))
        {
            out.push(match ch.to_ascii_uppercase() {
                'X' => Modality::X,
                'P' => Modality::P,
                'S' => Modality::S,
                other => return Err(Error::Config(format!("unknown modality '{other}'"))),
            });
        }
        Self::try_from(out)
    }
}

impl TryFrom<Vec<Modality>> for ModalitySet {
    type Error = Error;

    fn try_from(v: Vec<Modality>) -> Result<Self> {
        if !v.contains(&Modality::X) {
            return Err(Error::Config(
                "modality set must include the trajectory X".into(),
            ));
        }
        Ok(Self {
            pose: v.contains(&Modality::P),
            text: v.contains(&Modality::S),
        })
    }
}

impl From<ModalitySet> for Vec<Modality> {
    fn from(m: ModalitySet) -> Self {
        let mut v = vec![Modality::X];
        if m.pose {
            v.push(Modality::P);
        }
        if m.text {
            v.push(Modality::S);
        }
        v
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("X")?;
        if self.pose {
            f.write_str("+P")?;
        }
        if self.text {
            f.write_str("+S")?;
        }
        Ok(())
    }
}

/// `Holistic` fuses modalities and time in one attention pass per agent and
/// attends globally over agents; `Graph` works in per-agent heading frames
/// with neighbourhood graphs at both stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    Holistic,
    Graph,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalPooling {
    #[default]
    ClassToken,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: EncoderVariant,
    pub modalities: ModalitySet,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub modes: usize,
    pub obs_frames: usize,
    pub future_frames: usize,
    pub pose_dim: usize,
    /// Neighbourhood radius of the graph local encoder, meters.
    pub neighbor_radius: f64,
    pub use_relation_text: bool,
    pub temporal_pooling: TemporalPooling,
    pub text_encoder: TextEncoderKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: EncoderVariant::Graph,
            modalities: ModalitySet::XPS,
            dim: 64,
            heads: 4,
            layers: 2,
            modes: 6,
            obs_frames: crate::scene::DEFAULT_OBS_FRAMES,
            future_frames: crate::scene::DEFAULT_FUTURE_FRAMES,
            pose_dim: crate::scene::POSE_DIM,
            neighbor_radius: 5.0,
            use_relation_text: true,
            temporal_pooling: TemporalPooling::ClassToken,
            text_encoder: TextEncoderKind::Learned,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.modes == 0 {
            return Err(Error::Config(
                "at least one forecast mode is required".into(),
            ));
        }
        if self.obs_frames == 0 || self.future_frames == 0 {
            return Err(Error::Config(
                "observation and forecast horizons must be positive".into(),
            ));
        }
        if !(self.neighbor_radius > 0.0) {
            return Err(Error::Config(format!(
                "neighbor radius must be positive, got {}",
                self.neighbor_radius
            )));
        }
        if self.pose_dim <= crate::scene::POSE_YAW {
            return Err(Error::Config(format!(
                "pose_dim {} too small",
                self.pose_dim
            )));
        }
        Ok(())
    }
}
