//! Emotion and intensity label domains shared across the whole crate.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Happy,
    Sad,
    Surprise,
    Angry,
    Fear,
    Disgust,
    Neutral,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intensity {
    Weak,
    Medium,
    Strong,
}

pub const EMOTIONS: [Emotion; 7] = [
    Emotion::Happy,
    Emotion::Sad,
    Emotion::Surprise,
    Emotion::Angry,
    Emotion::Fear,
    Emotion::Disgust,
    Emotion::Neutral,
];

pub const INTENSITIES: [Intensity; 3] = [Intensity::Weak, Intensity::Medium, Intensity::Strong];

impl Emotion {
    pub fn as_str(self) -> &'static str {
        match self {
            Emotion::Happy => "happy",
            Emotion::Sad => "sad",
            Emotion::Surprise => "surprise",
            Emotion::Angry => "angry",
            Emotion::Fear => "fear",
            Emotion::Disgust => "disgust",
            Emotion::Neutral => "neutral",
        }
    }

    pub fn from_str(s: &str) -> Option<Emotion> {
        EMOTIONS.iter().copied().find(|e| e.as_str() == s)
    }

    /// Stable index into 7-way tables (confusion matrices, embeddings).
    pub fn index(self) -> usize {
        EMOTIONS.iter().position(|&e| e == self).unwrap()
    }
}

impl Intensity {
    pub fn as_str(self) -> &'static str {
        match self {
            Intensity::Weak => "weak",
            Intensity::Medium => "medium",
            Intensity::Strong => "strong",
        }
    }

    pub fn from_str(s: &str) -> Option<Intensity> {
        INTENSITIES.iter().copied().find(|i| i.as_str() == s)
    }

    pub fn index(self) -> usize {
        INTENSITIES.iter().position(|&i| i == self).unwrap()
    }

    /// Multiplicative gain applied to emotion patterns in synthetic features.
    pub fn gain(self) -> f64 {
        match self {
            Intensity::Weak => 0.5,
            Intensity::Medium => 1.0,
            Intensity::Strong => 1.5,
        }
    }
}
