//! Synthetic emotional-dialogue corpus with recoverable ground truth.
//!
//! Speech stand-in features are built so that (emotion, intensity) is exactly
//! decodable from the noiseless signal, while transcripts alone are provably
//! insufficient: the generator plants twin dialogues with identical text and
//! different targets. The current turn's labels follow a fixed, published
//! context rule over the dialogue history, so "emotional context reasoning"
//! has an exact oracle.
//!
//! Feature layout, for feature_dim D (D >= 8):
//! - channels 0..2 carry a sine/cosine carrier scaled by the intensity gain
//!   (weak 0.5, medium 1.0, strong 1.5), so intensity is decodable for every
//!   emotion including neutral;
//! - channels 2.. are split into six equal groups, one per non-neutral
//!   emotion; the active group carries a sign-alternating (++--) unit pattern
//!   scaled by the same gain. Neutral is the all-zero pattern.
//!
//! The alternation means a plain time average of the pattern channels is
//! near zero: pooling strategies that discard time structure lose the
//! emotion, which is what makes encoder ablations measurably worse.
//!
//! Context rule (also in README): the target emotion is a table lookup on
//! (emotion of the last history turn, presence of the cue word in the current
//! transcript); the target intensity is the shared value of the last two
//! history intensities, or medium when they disagree.

use crate::io::{self, MatrixFileError};
use crate::labels::{Emotion, Intensity, EMOTIONS, INTENSITIES};
use crate::params::seeded_rng;
use crate::tokenizer::{TokenId, Tokenizer, ADJECTIVES, ADVERBS, NOUNS, PRONOUNS, VERBS};
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub const CORPUS_FORMAT_VERSION: u32 = 1;

/// Carrier occupies the first two channels.
pub const CARRIER_CHANNELS: usize = 2;
const CARRIER_AMP: f32 = 0.6;
const CARRIER_PERIOD: f32 = 16.0;

/// Matched-filter score below this reads as the all-zero (neutral) pattern.
/// The weakest real pattern scores its gain, 0.5.
pub const NEUTRAL_THRESHOLD: f32 = 0.25;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("feature shape too small: frames {frames} (min 4), feature_dim {feature_dim} (min 8)")]
    FeatureShape { frames: usize, feature_dim: usize },
    #[error("cannot split {num_dialogues} dialogues into nonempty train/val/test at {ratios:?}")]
    SplitSizing { num_dialogues: usize, ratios: [f64; 3] },
    #[error("invalid corpus spec: {0}")]
    BadSpec(String),
    #[error("record {record}: unknown emotion label {label:?}")]
    UnknownEmotion { record: String, label: String },
    #[error("record {record}: unknown intensity label {label:?}")]
    UnknownIntensity { record: String, label: String },
    #[error("corpus format version {found} unsupported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checksum mismatch for {path}")]
    Checksum { path: String },
    #[error("malformed corpus manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Matrix(#[from] MatrixFileError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub speaker_id: usize,
    pub transcript_tokens: Vec<TokenId>,
    pub emotion: Emotion,
    pub intensity: Intensity,
    pub features: Array2<f32>,
    pub duration_frames: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub utterances: Vec<Utterance>,
    /// Index of the current turn; history is utterances[..current_turn].
    pub current_turn: usize,
}

impl Dialogue {
    pub fn current(&self) -> &Utterance {
        &self.utterances[self.current_turn]
    }

    pub fn history(&self) -> &[Utterance] {
        &self.utterances[..self.current_turn]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub num_dialogues: usize,
    /// Utterances per dialogue, inclusive range. A dialogue with T turns has
    /// indices 0..=N with N = T-1 and current turn in [2, N].
    pub turns_min: usize,
    pub turns_max: usize,
    pub feature_dim: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub vocab_size: usize,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    /// Gaussian noise added to features, as a fraction of unit pattern
    /// amplitude.
    pub noise_scale: f64,
    /// Probability that the current transcript carries the cue word.
    pub cue_rate: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            num_dialogues: 120,
            turns_min: 4,
            turns_max: 8,
            feature_dim: 32,
            frames_min: 24,
            frames_max: 48,
            vocab_size: Tokenizer::new().vocab_size(),
            split_train: 0.8,
            split_val: 0.1,
            split_test: 0.1,
            noise_scale: 0.05,
            cue_rate: 0.5,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |msg: String| Err(CorpusError::BadSpec(msg));
        if self.num_dialogues == 0 {
            return bad("num_dialogues: must be positive".into());
        }
        if self.turns_min < 3 {
            return bad(format!("turns_min: {} < 3 (need history of 2 plus a current turn)", self.turns_min));
        }
        if self.turns_max < self.turns_min {
            return bad(format!("turns_max: {} < turns_min {}", self.turns_max, self.turns_min));
        }
        if self.turns_max > 16 {
            return bad(format!("turns_max: {} exceeds the 16 turn-number words", self.turns_max));
        }
        if self.feature_dim < 8 {
            return bad(format!("feature_dim: {} < 8", self.feature_dim));
        }
        if self.frames_min < 4 {
            return bad(format!("frames_min: {} < 4", self.frames_min));
        }
        if self.frames_max < self.frames_min {
            return bad(format!("frames_max: {} < frames_min {}", self.frames_max, self.frames_min));
        }
        let expected_vocab = Tokenizer::new().vocab_size();
        if self.vocab_size != expected_vocab {
            return bad(format!("vocab_size: {} does not match the built-in vocabulary ({expected_vocab})", self.vocab_size));
        }
        let ratios = [self.split_train, self.split_val, self.split_test];
        if ratios.iter().any(|r| *r <= 0.0) {
            return bad(format!("split ratios: all must be positive, got {ratios:?}"));
        }
        let sum: f64 = ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("split ratios: sum {sum} != 1.0"));
        }
        if self.noise_scale < 0.0 {
            return bad(format!("noise_scale: {} < 0", self.noise_scale));
        }
        if !(0.0..=1.0).contains(&self.cue_rate) {
            return bad(format!("cue_rate: {} outside [0, 1]", self.cue_rate));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub train: Vec<Dialogue>,
    pub val: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl Corpus {
    pub fn split(&self, which: Split) -> &[Dialogue] {
        match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn all_dialogues(&self) -> impl Iterator<Item = &Dialogue> {
        self.train.iter().chain(self.val.iter()).chain(self.test.iter())
    }
}

/// Sign alternation over frames with period 4 (+ + - -). Subsampling every
/// other frame still alternates, so no fixed stride hides the pattern.
pub fn alternation(frame: usize) -> f32 {
    if frame % 4 < 2 {
        1.0
    } else {
        -1.0
    }
}

/// Channel group carrying the pattern of a non-neutral emotion.
pub fn emotion_channel_group(emotion: Emotion, feature_dim: usize) -> Option<std::ops::Range<usize>> {
    let idx = emotion.index();
    if emotion == Emotion::Neutral {
        return None;
    }
    let group = (feature_dim - CARRIER_CHANNELS) / 6;
    let start = CARRIER_CHANNELS + idx * group;
    Some(start..start + group)
}

fn carrier_value(frame: usize, channel: usize, gain: f32) -> f32 {
    let phase = 2.0 * std::f32::consts::PI * frame as f32 / CARRIER_PERIOD;
    let wave = if channel == 0 { phase.sin() } else { phase.cos() };
    CARRIER_AMP * gain * wave
}

/// Frames x feature_dim speech stand-in for one utterance: intensity-scaled
/// carrier, the emotion's alternating channel pattern, and seeded noise.
pub fn emotion_signature(
    emotion: Emotion,
    intensity: Intensity,
    frames: usize,
    feature_dim: usize,
    noise_scale: f64,
    seed: u64,
) -> Result<Array2<f32>, CorpusError> {
    if frames < 4 || feature_dim < 8 {
        return Err(CorpusError::FeatureShape { frames, feature_dim });
    }
    let gain = intensity.gain() as f32;
    let mut x = Array2::<f32>::zeros((frames, feature_dim));
    for f in 0..frames {
        x[[f, 0]] = carrier_value(f, 0, gain);
        x[[f, 1]] = carrier_value(f, 1, gain);
    }
    if let Some(group) = emotion_channel_group(emotion, feature_dim) {
        for f in 0..frames {
            let v = gain * alternation(f);
            for ch in group.clone() {
                x[[f, ch]] = v;
            }
        }
    }
    if noise_scale > 0.0 {
        let mut rng = seeded_rng(seed, "utterance-noise");
        let normal = rand_distr::Normal::new(0.0f64, noise_scale).expect("positive std");
        for v in x.iter_mut() {
            *v += rng.sample(normal) as f32;
        }
    }
    Ok(x)
}

/// Nearest-pattern oracle: matched filter per emotion group plus a
/// least-squares carrier gain. Exact on noiseless features.
pub fn decode_features(features: &ArrayView2<f32>) -> (Emotion, Intensity) {
    let frames = features.nrows();
    let dim = features.ncols();
    let mut best: Option<(Emotion, f32)> = None;
    for &e in EMOTIONS.iter() {
        let Some(group) = emotion_channel_group(e, dim) else { continue };
        let mut score = 0.0f32;
        for f in 0..frames {
            let a = alternation(f);
            for ch in group.clone() {
                score += features[[f, ch]] * a;
            }
        }
        score /= (group.len() * frames) as f32;
        if best.map_or(true, |(_, s)| score > s) {
            best = Some((e, score));
        }
    }
    let emotion = match best {
        Some((e, s)) if s >= NEUTRAL_THRESHOLD => e,
        _ => Emotion::Neutral,
    };

    // Carrier basis has sin^2 + cos^2 = 1 per frame, so the normalizer is
    // exact for any frame count.
    let mut num = 0.0f32;
    for f in 0..frames {
        num += features[[f, 0]] * carrier_value(f, 0, 1.0);
        num += features[[f, 1]] * carrier_value(f, 1, 1.0);
    }
    let gain = (num / (CARRIER_AMP * CARRIER_AMP * frames as f32)) as f64;
    let intensity = INTENSITIES
        .iter()
        .copied()
        .min_by(|a, b| (gain - a.gain()).abs().partial_cmp(&(gain - b.gain()).abs()).unwrap())
        .unwrap();
    (emotion, intensity)
}

/// Published response table: target emotion given the last history emotion,
/// without and with the cue word in the current transcript.
pub fn response_emotion(last_history: Emotion, cue_present: bool) -> Emotion {
    use Emotion::*;
    match (last_history, cue_present) {
        (Happy, false) => Happy,
        (Happy, true) => Surprise,
        (Sad, false) => Sad,
        (Sad, true) => Neutral,
        (Surprise, false) => Surprise,
        (Surprise, true) => Happy,
        (Angry, false) => Fear,
        (Angry, true) => Angry,
        (Fear, false) => Fear,
        (Fear, true) => Sad,
        (Disgust, false) => Disgust,
        (Disgust, true) => Angry,
        (Neutral, false) => Neutral,
        (Neutral, true) => Happy,
    }
}

/// Target intensity: the shared value of the last two history intensities,
/// or medium when they disagree.
pub fn response_intensity(prev: Intensity, last: Intensity) -> Intensity {
    if prev == last {
        last
    } else {
        Intensity::Medium
    }
}

/// Ground-truth labels for the current turn as a function of history and the
/// current transcript. Total over valid inputs; panics only on history
/// shorter than two turns, which Dialogue invariants exclude.
pub fn context_rule(
    history_emotions: &[Emotion],
    history_intensities: &[Intensity],
    current_transcript: &[TokenId],
    cue_token: TokenId,
) -> (Emotion, Intensity) {
    assert!(history_emotions.len() >= 2 && history_intensities.len() >= 2, "context rule needs history of at least 2 turns");
    let cue = current_transcript.contains(&cue_token);
    let n = history_intensities.len();
    (
        response_emotion(*history_emotions.last().unwrap(), cue),
        response_intensity(history_intensities[n - 2], history_intensities[n - 1]),
    )
}

const SENTENCE_SHAPES: usize = 6;

fn template_sentence<R: Rng>(rng: &mut R, tok: &Tokenizer) -> Vec<TokenId> {
    let pick = |rng: &mut R, list: &[&'static str]| list[rng.gen_range(0..list.len())];
    let shape = rng.gen_range(0..SENTENCE_SHAPES);
    let p = pick(rng, &PRONOUNS);
    let v = pick(rng, &VERBS);
    let adv = pick(rng, &ADVERBS);
    let adj = pick(rng, &ADJECTIVES);
    let n = pick(rng, &NOUNS);
    let words: Vec<&str> = match shape {
        0 => vec![p, v, adv, adj, "."],
        1 => vec![p, v, "about", "the", n, "."],
        2 => vec![p, v, "that", pick(rng, &PRONOUNS), pick(rng, &VERBS), adv, "."],
        3 => vec!["the", n, "was", adj, adv, "."],
        4 => vec![p, adv, v, "the", n, "."],
        _ => vec!["what", p, v, "was", "not", adj, "."],
    };
    words
        .into_iter()
        .map(|w| tok.known_id(w).unwrap_or_else(|| panic!("template word {w:?} missing from vocabulary")))
        .collect()
}

struct TurnDraft {
    speaker_id: usize,
    transcript: Vec<TokenId>,
    labels: Option<(Emotion, Intensity)>,
    frames: usize,
    feature_seed: u64,
}

fn draft_dialogue<R: Rng>(spec: &CorpusSpec, tok: &Tokenizer, rng: &mut R) -> (Vec<TurnDraft>, usize) {
    let turns = rng.gen_range(spec.turns_min..=spec.turns_max);
    let last = turns - 1;
    let current = rng.gen_range(2..=last);
    let first_speaker = rng.gen_range(0..2usize);
    let mut drafts = Vec::with_capacity(turns);
    for k in 0..turns {
        let mut transcript = template_sentence(rng, tok);
        if k == current && rng.gen_bool(spec.cue_rate) {
            transcript.insert(1, tok.cue_id());
        }
        let labels = if k == current {
            None
        } else {
            Some((
                EMOTIONS[rng.gen_range(0..EMOTIONS.len())],
                INTENSITIES[rng.gen_range(0..INTENSITIES.len())],
            ))
        };
        let frames = rng.gen_range(spec.frames_min..=spec.frames_max);
        drafts.push(TurnDraft {
            speaker_id: (first_speaker + k) % 2,
            transcript,
            labels,
            frames,
            feature_seed: rng.gen(),
        });
    }
    (drafts, current)
}

fn realize_dialogue(
    spec: &CorpusSpec,
    tok: &Tokenizer,
    mut drafts: Vec<TurnDraft>,
    current: usize,
    dialogue_id: String,
) -> Result<Dialogue, CorpusError> {
    let history_e: Vec<Emotion> = drafts[..current].iter().map(|d| d.labels.unwrap().0).collect();
    let history_i: Vec<Intensity> = drafts[..current].iter().map(|d| d.labels.unwrap().1).collect();
    let target = context_rule(&history_e, &history_i, &drafts[current].transcript, tok.cue_id());
    drafts[current].labels = Some(target);

    let mut utterances = Vec::with_capacity(drafts.len());
    for d in drafts {
        let (emotion, intensity) = d.labels.unwrap();
        let features = emotion_signature(
            emotion,
            intensity,
            d.frames,
            spec.feature_dim,
            spec.noise_scale,
            d.feature_seed,
        )?;
        utterances.push(Utterance {
            speaker_id: d.speaker_id,
            transcript_tokens: d.transcript,
            emotion,
            intensity,
            features,
            duration_frames: d.frames,
        });
    }
    Ok(Dialogue { dialogue_id, utterances, current_turn: current })
}

fn generate_single(spec: &CorpusSpec, tok: &Tokenizer, index: usize) -> Result<Dialogue, CorpusError> {
    let mut rng = seeded_rng(spec.seed, &format!("dialogue/{index}"));
    let (drafts, current) = draft_dialogue(spec, tok, &mut rng);
    realize_dialogue(spec, tok, drafts, current, format!("d{index:04}"))
}

/// Twin of `base` at `index`: identical transcripts, speakers, turn shapes,
/// and history intensities, but the last history emotion is re-rolled until
/// the context rule yields a different target. Text alone cannot separate a
/// dialogue from its twin.
fn generate_twin(
    spec: &CorpusSpec,
    tok: &Tokenizer,
    base: &Dialogue,
    index: usize,
) -> Result<Dialogue, CorpusError> {
    let mut rng = seeded_rng(spec.seed, &format!("dialogue/{index}/twin"));
    let current = base.current_turn;
    let cue_present = base.current().transcript_tokens.contains(&tok.cue_id());
    let base_target = base.current().emotion;

    let mut drafts: Vec<TurnDraft> = base
        .utterances
        .iter()
        .map(|u| TurnDraft {
            speaker_id: u.speaker_id,
            transcript: u.transcript_tokens.clone(),
            labels: Some((u.emotion, u.intensity)),
            frames: u.duration_frames,
            feature_seed: rng.gen(),
        })
        .collect();
    for draft in drafts.iter_mut().take(current) {
        let (_, intensity) = draft.labels.unwrap();
        draft.labels = Some((EMOTIONS[rng.gen_range(0..EMOTIONS.len())], intensity));
    }
    loop {
        let candidate = EMOTIONS[rng.gen_range(0..EMOTIONS.len())];
        if response_emotion(candidate, cue_present) != base_target {
            let (_, intensity) = drafts[current - 1].labels.unwrap();
            drafts[current - 1].labels = Some((candidate, intensity));
            break;
        }
    }
    drafts[current].labels = None;
    realize_dialogue(spec, tok, drafts, current, format!("d{index:04}"))
}

fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3], CorpusError> {
    let mut sizes = [0usize; 3];
    let mut fracs = [0.0f64; 3];
    for i in 0..3 {
        let exact = ratios[i] * n as f64;
        sizes[i] = exact.floor() as usize;
        fracs[i] = exact - exact.floor();
    }
    let mut rest = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| fracs[b].partial_cmp(&fracs[a]).unwrap().then(a.cmp(&b)));
    for i in order {
        if rest == 0 {
            break;
        }
        sizes[i] += 1;
        rest -= 1;
    }
    // Tiny corpora can round a split down to nothing; keep every split
    // nonempty by borrowing from the largest, or fail when n < 3.
    for i in 0..3 {
        if sizes[i] == 0 {
            let donor = (0..3).max_by_key(|&j| sizes[j]).unwrap();
            if sizes[donor] <= 1 {
                return Err(CorpusError::SplitSizing { num_dialogues: n, ratios });
            }
            sizes[donor] -= 1;
            sizes[i] += 1;
        }
    }
    Ok(sizes)
}

/// Deterministic function of the spec. Dialogues at indices 4m, 4m+1 form
/// twin pairs; the rest are independent draws.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus, CorpusError> {
    spec.validate()?;
    let sizes = split_sizes(spec.num_dialogues, [spec.split_train, spec.split_val, spec.split_test])?;
    let tok = Tokenizer::new();
    let mut dialogues = Vec::with_capacity(spec.num_dialogues);
    let mut i = 0;
    while i < spec.num_dialogues {
        let base = generate_single(spec, &tok, i)?;
        if i % 4 == 0 && i + 1 < spec.num_dialogues {
            let twin = generate_twin(spec, &tok, &base, i + 1)?;
            dialogues.push(base);
            dialogues.push(twin);
            i += 2;
        } else {
            dialogues.push(base);
            i += 1;
        }
    }
    let mut rest = dialogues.split_off(sizes[0]);
    let test = rest.split_off(sizes[1]);
    Ok(Corpus { spec: spec.clone(), train: dialogues, val: rest, test })
}

#[derive(Serialize, Deserialize)]
struct ManifestUtterance {
    speaker_id: usize,
    transcript: String,
    emotion: String,
    intensity: String,
    duration_frames: usize,
    feature_path: String,
    feature_sha256: String,
}

#[derive(Serialize, Deserialize)]
struct ManifestDialogue {
    dialogue_id: String,
    current_turn: usize,
    utterances: Vec<ManifestUtterance>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    vocab_version: u32,
    vocab_digest: String,
    spec: CorpusSpec,
    train: Vec<ManifestDialogue>,
    val: Vec<ManifestDialogue>,
    test: Vec<ManifestDialogue>,
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io { path: path.display().to_string(), source }
}

fn save_split(
    root: &Path,
    split: &str,
    dialogues: &[Dialogue],
    tok: &Tokenizer,
) -> Result<Vec<ManifestDialogue>, CorpusError> {
    let mut out = Vec::with_capacity(dialogues.len());
    for d in dialogues {
        let dir = root.join("features").join(split).join(&d.dialogue_id);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let mut utterances = Vec::with_capacity(d.utterances.len());
        for (k, u) in d.utterances.iter().enumerate() {
            let rel = format!("features/{split}/{}/u{k:02}.f32", d.dialogue_id);
            let bytes = io::matrix_bytes(&u.features);
            let path = root.join(&rel);
            fs::write(&path, &bytes).map_err(|e| io_err(&path, e))?;
            utterances.push(ManifestUtterance {
                speaker_id: u.speaker_id,
                transcript: tok.detokenize(&u.transcript_tokens),
                emotion: u.emotion.as_str().to_string(),
                intensity: u.intensity.as_str().to_string(),
                duration_frames: u.duration_frames,
                feature_path: rel,
                feature_sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        out.push(ManifestDialogue {
            dialogue_id: d.dialogue_id.clone(),
            current_turn: d.current_turn,
            utterances,
        });
    }
    Ok(out)
}

pub fn save_corpus(corpus: &Corpus, root: &Path) -> Result<(), CorpusError> {
    fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
    let tok = Tokenizer::new();
    let manifest = Manifest {
        format_version: CORPUS_FORMAT_VERSION,
        vocab_version: crate::tokenizer::VOCAB_VERSION,
        vocab_digest: tok.vocab_digest(),
        spec: corpus.spec.clone(),
        train: save_split(root, "train", &corpus.train, &tok)?,
        val: save_split(root, "val", &corpus.val, &tok)?,
        test: save_split(root, "test", &corpus.test, &tok)?,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CorpusError::Manifest(e.to_string()))?;
    let path = root.join("manifest.json");
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

fn load_split(
    root: &Path,
    records: Vec<ManifestDialogue>,
    spec: &CorpusSpec,
    tok: &Tokenizer,
) -> Result<Vec<Dialogue>, CorpusError> {
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let mut utterances = Vec::with_capacity(rec.utterances.len());
        for (k, u) in rec.utterances.into_iter().enumerate() {
            let mut record = rec.dialogue_id.clone();
            let _ = write!(record, "/u{k:02}");
            let emotion = Emotion::from_str(&u.emotion)
                .ok_or_else(|| CorpusError::UnknownEmotion { record: record.clone(), label: u.emotion.clone() })?;
            let intensity = Intensity::from_str(&u.intensity)
                .ok_or_else(|| CorpusError::UnknownIntensity { record: record.clone(), label: u.intensity.clone() })?;
            let path = root.join(&u.feature_path);
            let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
            if hex::encode(Sha256::digest(&bytes)) != u.feature_sha256 {
                return Err(CorpusError::Checksum { path: u.feature_path });
            }
            let features = io::parse_matrix(&bytes, &path)?;
            if features.nrows() != u.duration_frames || features.ncols() != spec.feature_dim {
                return Err(CorpusError::Manifest(format!(
                    "{record}: feature shape {}x{} does not match duration {} x feature_dim {}",
                    features.nrows(),
                    features.ncols(),
                    u.duration_frames,
                    spec.feature_dim
                )));
            }
            utterances.push(Utterance {
                speaker_id: u.speaker_id,
                transcript_tokens: tok.tokenize(&u.transcript),
                emotion,
                intensity,
                features,
                duration_frames: u.duration_frames,
            });
        }
        out.push(Dialogue {
            dialogue_id: rec.dialogue_id,
            utterances,
            current_turn: rec.current_turn,
        });
    }
    Ok(out)
}

pub fn load_corpus(root: &Path) -> Result<Corpus, CorpusError> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| CorpusError::Manifest(e.to_string()))?;
    if manifest.format_version != CORPUS_FORMAT_VERSION {
        return Err(CorpusError::Version {
            found: manifest.format_version,
            expected: CORPUS_FORMAT_VERSION,
        });
    }
    let tok = Tokenizer::new();
    if manifest.vocab_version != crate::tokenizer::VOCAB_VERSION
        || manifest.vocab_digest != tok.vocab_digest()
    {
        return Err(CorpusError::Manifest(
            "vocabulary version/digest does not match this build".into(),
        ));
    }
    manifest.spec.validate()?;
    Ok(Corpus {
        train: load_split(root, manifest.train, &manifest.spec, &tok)?,
        val: load_split(root, manifest.val, &manifest.spec, &tok)?,
        test: load_split(root, manifest.test, &manifest.spec, &tok)?,
        spec: manifest.spec,
    })
}

/// Deterministic stage-3 ground truth for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct AcousticTargets {
    /// Frames per token, each >= 1.
    pub durations: Vec<usize>,
    pub pitch: Vec<f32>,
    pub energy: Vec<f32>,
    pub mel: Array2<f32>,
}

/// Exact synthesis targets as a fixed function of (tokens, emotion,
/// intensity). Computed on demand rather than stored; both are equivalent
/// because the function is deterministic.
pub fn acoustic_targets(
    tokens: &[TokenId],
    emotion: Emotion,
    intensity: Intensity,
    mel_bins: usize,
) -> AcousticTargets {
    assert!(!tokens.is_empty(), "acoustic targets need at least one token");
    assert!(mel_bins >= 1);
    let gain = intensity.gain() as f32;
    let e = emotion.index() as f32;
    let durations: Vec<usize> = tokens
        .iter()
        .map(|t| 1 + t % 4 + usize::from(intensity == Intensity::Strong))
        .collect();
    let frames: usize = durations.iter().sum();
    let mut pitch = Vec::with_capacity(frames);
    let mut energy = Vec::with_capacity(frames);
    let mut mel = Array2::<f32>::zeros((frames, mel_bins));
    let mut f = 0usize;
    for (j, &d) in durations.iter().enumerate() {
        let t = tokens[j] as f32;
        for _ in 0..d {
            let wf = f as f32;
            pitch.push(0.6 + 0.08 * e + 0.25 * gain + 0.1 * (2.0 * std::f32::consts::PI * wf / 16.0).sin());
            energy.push(0.5 + 0.2 * gain + 0.1 * (2.0 * std::f32::consts::PI * wf / 16.0).cos() + 0.02 * (t % 5.0));
            for b in 0..mel_bins {
                let bb = b as f32;
                mel[[f, b]] = (0.2 + 0.05 * e)
                    * (std::f32::consts::PI * (bb + 1.0) * ((f % 8) as f32 + 1.0) / (mel_bins as f32 + 8.0)).sin()
                    + 0.15 * gain * (std::f32::consts::PI * bb / mel_bins as f32).cos()
                    + 0.03 * (t % 7.0);
            }
            f += 1;
        }
    }
    AcousticTargets { durations, pitch, energy, mel }
}
