//! Miniature mel synthesizer: token encoder, additive emotion, intensity
//! and speaker conditioning, a variance adaptor predicting durations,
//! pitch and energy, a length regulator, and a mel decoder. Durations,
//! pitch and energy are teacher-forced while training and self-predicted
//! at synthesis time.

use crate::config::RunConfig;
use crate::corpus::AcousticTargets;
use crate::labels::{Emotion, Intensity};
use crate::nn::{init_linear, init_self_block, sinusoid, Net};
use crate::params::{gaussian, ParamStore};
use crate::tape::{Elem, Graph, NodeId};
use crate::tokenizer::TokenId;
use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AcousticError {
    #[error("cannot synthesize an empty token sequence")]
    EmptyTokens,
    #[error("speaker id {id} outside the table of {table} speakers")]
    UnknownSpeaker { id: usize, table: usize },
    #[error("targets cover {got} tokens but the sequence has {expected}")]
    TargetMismatch { expected: usize, got: usize },
}

/// Graph handles for one teacher-forced training pass.
pub struct AcousticPrediction {
    pub mel: NodeId,
    pub log_dur: NodeId,
    pub pitch: NodeId,
    pub energy: NodeId,
}

/// Loss parts alongside the combined node, for per-term logging.
pub struct AcousticLoss {
    pub total: NodeId,
    pub mel: f64,
    pub duration: f64,
    pub pitch: f64,
    pub energy: f64,
}

/// Deterministic synthesis result; `mel` is frames x mel_bins and frames
/// always equals the duration sum.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisOutput<F: Elem> {
    pub mel: Array2<F>,
    pub durations: Vec<usize>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
}

pub fn init_acoustic_params<F: Elem>(store: &mut ParamStore<F>, cfg: &RunConfig, seed: u64) {
    let ac = &cfg.acoustic;
    let w = ac.width;
    store.insert("ac.tok", gaussian(seed, "ac.tok", cfg.lm.vocab_size, w, 0.02));
    store.insert("ac.emo", gaussian(seed, "ac.emo", ac.emotion_table, w, 0.02));
    store.insert("ac.int", gaussian(seed, "ac.int", ac.intensity_table, w, 0.02));
    store.insert("ac.spk", gaussian(seed, "ac.spk", ac.speaker_table, w, 0.02));
    for i in 0..ac.enc_blocks {
        init_self_block(store, &format!("ac.enc.block{i}"), w, seed);
    }
    for head in ["dur", "pitch", "energy"] {
        init_linear(store, &format!("ac.var.{head}.l1"), w, ac.variance_hidden, seed);
        init_linear(store, &format!("ac.var.{head}.l2"), ac.variance_hidden, 1, seed);
    }
    init_linear(store, "ac.var.pitch_embed", 1, w, seed);
    init_linear(store, "ac.var.energy_embed", 1, w, seed);
    for i in 0..ac.dec_blocks {
        init_self_block(store, &format!("ac.dec.block{i}"), w, seed);
    }
    init_linear(store, "ac.out", w, ac.mel_bins, seed);
}

fn column<F: Elem>(values: impl Iterator<Item = f64>) -> Array2<F> {
    let v: Vec<F> = values.map(F::from_f64).collect();
    Array2::from_shape_vec((v.len(), 1), v).expect("column construction")
}

/// Token encoder with additive conditioning rows.
fn encode_tokens<F: Elem>(
    net: &mut Net<F>,
    tokens: &[TokenId],
    speaker: usize,
    emotion: Emotion,
    intensity: Intensity,
    cfg: &RunConfig,
) -> Result<NodeId, AcousticError> {
    if tokens.is_empty() {
        return Err(AcousticError::EmptyTokens);
    }
    let ac = &cfg.acoustic;
    if speaker >= ac.speaker_table {
        return Err(AcousticError::UnknownSpeaker { id: speaker, table: ac.speaker_table });
    }
    let table = net.p("ac.tok");
    let x = net.g.gather_rows(table, tokens);
    let pos = net.leaf(sinusoid(tokens.len(), ac.width));
    let mut x = net.g.add(x, pos);
    for i in 0..ac.enc_blocks {
        x = net.self_block(x, ac.heads, &format!("ac.enc.block{i}"), None);
    }
    for (name, row) in [("ac.emo", emotion.index()), ("ac.int", intensity.index()), ("ac.spk", speaker)] {
        let t = net.p(name);
        let r = net.g.gather_rows(t, &[row]);
        x = net.g.add_row(x, r);
    }
    Ok(x)
}

fn predictor<F: Elem>(net: &mut Net<F>, x: NodeId, head: &str) -> NodeId {
    let h = net.linear(x, &format!("ac.var.{head}.l1"));
    let h = net.g.gelu(h);
    net.linear(h, &format!("ac.var.{head}.l2"))
}

/// Repeats encoded token rows by their durations; output frame count is
/// exactly the duration sum.
fn length_regulate<F: Elem>(net: &mut Net<F>, x: NodeId, durations: &[usize]) -> NodeId {
    let mut idx = Vec::with_capacity(durations.iter().sum());
    for (t, &d) in durations.iter().enumerate() {
        idx.extend(std::iter::repeat(t).take(d));
    }
    net.g.gather_rows(x, &idx)
}

/// Shared tail: per-frame pitch/energy prediction, injection of the
/// chosen (teacher or predicted) tracks, decoding, mel projection.
fn decode_frames<F: Elem>(
    net: &mut Net<F>,
    expanded: NodeId,
    pitch_pred: NodeId,
    energy_pred: NodeId,
    inject: Option<(&[f32], &[f32])>,
    cfg: &RunConfig,
) -> NodeId {
    let ac = &cfg.acoustic;
    let (pitch_in, energy_in) = match inject {
        Some((p, e)) => (
            net.leaf(column(p.iter().map(|&v| v as f64))),
            net.leaf(column(e.iter().map(|&v| v as f64))),
        ),
        None => (pitch_pred, energy_pred),
    };
    let p_emb = net.linear(pitch_in, "ac.var.pitch_embed");
    let e_emb = net.linear(energy_in, "ac.var.energy_embed");
    let x = net.g.add(expanded, p_emb);
    let frames = net.g.value(x).nrows();
    let mut x = net.g.add(x, e_emb);
    let pos = net.leaf(sinusoid(frames, ac.width));
    x = net.g.add(x, pos);
    for i in 0..ac.dec_blocks {
        x = net.self_block(x, ac.heads, &format!("ac.dec.block{i}"), None);
    }
    net.linear(x, "ac.out")
}

/// Training-mode forward pass: expansion and track injection use the
/// target values, predictions come back for their losses.
pub fn acoustic_forward_teacher<F: Elem>(
    net: &mut Net<F>,
    tokens: &[TokenId],
    speaker: usize,
    emotion: Emotion,
    intensity: Intensity,
    targets: &AcousticTargets,
    cfg: &RunConfig,
) -> Result<AcousticPrediction, AcousticError> {
    if targets.durations.len() != tokens.len() {
        return Err(AcousticError::TargetMismatch { expected: tokens.len(), got: targets.durations.len() });
    }
    let encoded = encode_tokens(net, tokens, speaker, emotion, intensity, cfg)?;
    let log_dur = predictor(net, encoded, "dur");
    let expanded = length_regulate(net, encoded, &targets.durations);
    let pitch = predictor(net, expanded, "pitch");
    let energy = predictor(net, expanded, "energy");
    let mel = decode_frames(net, expanded, pitch, energy, Some((&targets.pitch, &targets.energy)), cfg);
    Ok(AcousticPrediction { mel, log_dur, pitch, energy })
}

/// Mean-squared losses for the four prediction heads; durations are
/// compared in log space.
pub fn acoustic_loss<F: Elem>(g: &mut Graph<F>, pred: &AcousticPrediction, targets: &AcousticTargets) -> AcousticLoss {
    let frames = targets.pitch.len();
    let mel_t = targets.mel.mapv(|v| F::from_f64(v as f64));
    let ones_mel = Array2::from_elem(mel_t.dim(), F::one());
    let mel = g.mse_mean(pred.mel, mel_t, ones_mel);

    let dur_t = column(targets.durations.iter().map(|&d| (d as f64).ln()));
    let ones_d = Array2::from_elem((targets.durations.len(), 1), F::one());
    let dur = g.mse_mean(pred.log_dur, dur_t, ones_d);

    let ones_f = Array2::from_elem((frames, 1), F::one());
    let pitch_t = column(targets.pitch.iter().map(|&v| v as f64));
    let pitch = g.mse_mean(pred.pitch, pitch_t, ones_f.clone());
    let energy_t = column(targets.energy.iter().map(|&v| v as f64));
    let energy = g.mse_mean(pred.energy, energy_t, ones_f);

    let s = g.add(mel, dur);
    let s = g.add(s, pitch);
    let total = g.add(s, energy);
    AcousticLoss {
        total,
        mel: Elem::to_f64(g.scalar(mel)),
        duration: Elem::to_f64(g.scalar(dur)),
        pitch: Elem::to_f64(g.scalar(pitch)),
        energy: Elem::to_f64(g.scalar(energy)),
    }
}

/// Free-running synthesis: durations, pitch and energy all come from the
/// model's own predictions.
pub fn synthesize_mel<F: Elem>(
    store: &ParamStore<F>,
    cfg: &RunConfig,
    tokens: &[TokenId],
    speaker: usize,
    emotion: Emotion,
    intensity: Intensity,
) -> Result<SynthesisOutput<F>, AcousticError> {
    let mut g = Graph::new();
    let mut net = Net::new(&mut g, store);
    let encoded = encode_tokens(&mut net, tokens, speaker, emotion, intensity, cfg)?;
    let log_dur = predictor(&mut net, encoded, "dur");
    let durations: Vec<usize> = net
        .g
        .value(log_dur)
        .column(0)
        .iter()
        .map(|&v| Elem::to_f64(v).exp().round().max(1.0) as usize)
        .collect();
    let expanded = length_regulate(&mut net, encoded, &durations);
    let pitch = predictor(&mut net, expanded, "pitch");
    let energy = predictor(&mut net, expanded, "energy");
    let mel = decode_frames(&mut net, expanded, pitch, energy, None, cfg);
    Ok(SynthesisOutput {
        mel: g.value(mel).clone(),
        durations,
        pitch: g.value(pitch).column(0).iter().map(|&v| Elem::to_f64(v)).collect(),
        energy: g.value(energy).column(0).iter().map(|&v| Elem::to_f64(v)).collect(),
    })
}
