//! Context assembly: turns dialogues into model-input sequences. Each
//! history turn contributes a prefix, an emotion segment, and a
//! transcript; the current turn contributes prefix and transcript only,
//! so its emotional state can only be inferred, never read off.

use crate::config::RunConfig;
use crate::corpus::{Dialogue, Utterance};
use crate::encoder::{emotion_embedding, emotion_span_len, EncoderError};
use crate::lm::{Modality, ModalityMaskedSequence};
use crate::nn::Net;
use crate::tape::Elem;
use crate::tokenizer::{AnswerSchema, TokenId, Tokenizer, PAD};
use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AssemblyError {
    #[error("current turn index {current} leaves fewer than 2 history turns")]
    TooFewTurns { current: usize },
    #[error("assembled sequence is {length} positions, model maximum is {max_positions}")]
    Overflow { length: usize, max_positions: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AssemblyMode {
    Stage1Align,
    Stage2PretrainText,
    Stage2Finetune,
    InferSpeechOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TurnSpans {
    pub prefix: Span,
    pub emotion: Option<Span>,
    pub transcript: Span,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentMap {
    pub instruction: Span,
    pub turns: Vec<TurnSpans>,
    pub answer: Span,
}

/// A fully assembled model input plus the bookkeeping training needs:
/// per-position token ids (placeholder at emotion rows), the answer-only
/// loss mask, and the span map that locates every segment.
#[derive(Debug)]
pub struct AssembledContext {
    pub sequence: ModalityMaskedSequence,
    pub segments: SegmentMap,
    pub mode: AssemblyMode,
    pub tokens: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
    /// TLTR layer-weight distributions, one per speech-encoded utterance.
    pub layer_weights: Vec<Vec<f64>>,
}

/// Fixed instruction token sequence for a mode. The wording leans on the
/// answer-schema key tokens so the whole template stays in vocabulary.
pub fn render_instruction(mode: AssemblyMode, tok: &Tokenizer) -> Vec<TokenId> {
    let text = match mode {
        AssemblyMode::Stage1Align => "task : identify emotion: and intensity: of the given utterance .",
        AssemblyMode::Stage2PretrainText | AssemblyMode::Stage2Finetune | AssemblyMode::InferSpeechOnly => {
            "task : given the conversation predict emotion: and intensity: of the current utterance ."
        }
    };
    tok.tokenize(text)
}

/// "turn <k> speaker <s> :" rendered to token ids.
pub fn prefix_tokens(k: usize, speaker: usize, tok: &Tokenizer) -> Vec<TokenId> {
    vec![
        tok.id("turn"),
        tok.number_id(k),
        tok.id("speaker"),
        tok.number_id(speaker),
        tok.id(":"),
    ]
}

pub fn features_as<F: Elem>(features: &Array2<f32>) -> Array2<F> {
    features.mapv(|v| F::from_f64(v as f64))
}

/// Length an emotion segment will occupy under `mode`.
fn emotion_segment_len(mode: AssemblyMode, cfg: &RunConfig) -> usize {
    match mode {
        AssemblyMode::Stage2PretrainText => 1,
        _ => emotion_span_len(cfg),
    }
}

struct Builder<'a, 'g, 's, F: Elem> {
    net: &'a mut Net<'g, 's, F>,
    tok: &'a Tokenizer,
    parts: Vec<crate::tape::NodeId>,
    modality: Vec<Modality>,
    tokens: Vec<TokenId>,
    loss_mask: Vec<bool>,
    layer_weights: Vec<Vec<f64>>,
}

impl<'a, 'g, 's, F: Elem> Builder<'a, 'g, 's, F> {
    fn new(net: &'a mut Net<'g, 's, F>, tok: &'a Tokenizer) -> Self {
        Builder { net, tok, parts: Vec::new(), modality: Vec::new(), tokens: Vec::new(), loss_mask: Vec::new(), layer_weights: Vec::new() }
    }

    fn len(&self) -> usize {
        self.tokens.len()
    }

    fn push_tokens(&mut self, ids: &[TokenId], supervised: bool) -> Span {
        let span = Span { start: self.len(), len: ids.len() };
        if !ids.is_empty() {
            let table = self.net.p("lm.base.tok");
            let rows = self.net.g.gather_rows(table, ids);
            self.parts.push(rows);
            self.modality.extend(std::iter::repeat(Modality::Text).take(ids.len()));
            self.tokens.extend_from_slice(ids);
            self.loss_mask.extend(std::iter::repeat(supervised).take(ids.len()));
        }
        let _ = self.tok;
        span
    }

    fn push_speech_emotion(&mut self, u: &Utterance, cfg: &RunConfig) -> Result<Span, AssemblyError> {
        let features = features_as::<F>(&u.features);
        let mask = vec![true; features.nrows()];
        let emb = emotion_embedding(self.net, &features, &mask, cfg)?;
        let rows = self.net.g.value(emb.node).nrows();
        let span = Span { start: self.len(), len: rows };
        let pad = self.tok.id(PAD);
        self.parts.push(emb.node);
        self.modality.extend(std::iter::repeat(Modality::Emotion).take(rows));
        self.tokens.extend(std::iter::repeat(pad).take(rows));
        self.loss_mask.extend(std::iter::repeat(false).take(rows));
        if let Some(w) = emb.layer_weights {
            self.layer_weights.push(w);
        }
        Ok(span)
    }

    fn finish(self, segments: SegmentMap, mode: AssemblyMode) -> AssembledContext {
        let embeddings = self.net.g.concat_rows(&self.parts);
        AssembledContext {
            sequence: ModalityMaskedSequence { embeddings, modality: self.modality },
            segments,
            mode,
            tokens: self.tokens,
            loss_mask: self.loss_mask,
            layer_weights: self.layer_weights,
        }
    }
}

/// Single-utterance alignment context: instruction, the utterance's
/// speech-derived emotion segment, then the supervised answer. No
/// transcripts appear, so the labels can only flow through the segment.
pub fn build_stage1_context<F: Elem>(
    net: &mut Net<F>,
    utterance: &Utterance,
    cfg: &RunConfig,
    tok: &Tokenizer,
    schema: &AnswerSchema,
) -> Result<AssembledContext, AssemblyError> {
    let instruction = render_instruction(AssemblyMode::Stage1Align, tok);
    let answer = schema.render(utterance.emotion, utterance.intensity, tok);
    let total = instruction.len() + emotion_span_len(cfg) + answer.len();
    if total > cfg.lm.max_positions {
        return Err(AssemblyError::Overflow { length: total, max_positions: cfg.lm.max_positions });
    }

    let mut b = Builder::new(net, tok);
    let i_span = b.push_tokens(&instruction, false);
    let here = b.len();
    let e_span = b.push_speech_emotion(utterance, cfg)?;
    let t_span = Span { start: b.len(), len: 0 };
    let a_span = b.push_tokens(&answer, true);
    let segments = SegmentMap {
        instruction: i_span,
        turns: vec![TurnSpans { prefix: Span { start: here, len: 0 }, emotion: Some(e_span), transcript: t_span }],
        answer: a_span,
    };
    Ok(b.finish(segments, AssemblyMode::Stage1Align))
}

/// Full-dialogue context for the stage-2 modes and inference. History
/// turns carry emotion segments (speech-derived, or the text label during
/// pre-training); the current turn never does. Training modes append the
/// rendered answer with its loss mask; inference leaves the answer region
/// empty.
pub fn build_context<F: Elem>(
    net: &mut Net<F>,
    dialogue: &Dialogue,
    mode: AssemblyMode,
    cfg: &RunConfig,
    tok: &Tokenizer,
    schema: &AnswerSchema,
) -> Result<AssembledContext, AssemblyError> {
    let c = dialogue.current_turn;
    if c < 2 {
        return Err(AssemblyError::TooFewTurns { current: c });
    }
    if mode == AssemblyMode::Stage1Align {
        return build_stage1_context(net, dialogue.current(), cfg, tok, schema);
    }

    let instruction = render_instruction(mode, tok);
    let current = dialogue.current();
    let answer = match mode {
        AssemblyMode::InferSpeechOnly => Vec::new(),
        _ => schema.render(current.emotion, current.intensity, tok),
    };
    let e_len = emotion_segment_len(mode, cfg);
    let mut total = instruction.len() + answer.len();
    for (k, u) in dialogue.utterances[..=c].iter().enumerate() {
        total += prefix_tokens(k, u.speaker_id, tok).len() + u.transcript_tokens.len();
        if k < c {
            total += e_len;
        }
    }
    if total > cfg.lm.max_positions {
        return Err(AssemblyError::Overflow { length: total, max_positions: cfg.lm.max_positions });
    }

    let mut b = Builder::new(net, tok);
    let i_span = b.push_tokens(&instruction, false);
    let mut turns = Vec::with_capacity(c + 1);
    for (k, u) in dialogue.utterances[..=c].iter().enumerate() {
        let prefix = b.push_tokens(&prefix_tokens(k, u.speaker_id, tok), false);
        let emotion = if k < c {
            Some(match mode {
                AssemblyMode::Stage2PretrainText => b.push_tokens(&[tok.emotion_id(u.emotion)], false),
                _ => b.push_speech_emotion(u, cfg)?,
            })
        } else {
            None
        };
        let transcript = b.push_tokens(&u.transcript_tokens, false);
        turns.push(TurnSpans { prefix, emotion, transcript });
    }
    let a_span = b.push_tokens(&answer, true);
    let segments = SegmentMap { instruction: i_span, turns, answer: a_span };
    Ok(b.finish(segments, mode))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::toy_config;
    use crate::encoder::init_eq_params;
    use crate::labels::{Emotion, Intensity};
    use crate::lm::init_lm_params;
    use crate::params::{gaussian, ParamStore};
    use crate::tape::Graph;

    fn small_cfg() -> RunConfig {
        let mut cfg = toy_config();
        cfg.corpus.feature_dim = 8;
        cfg.encoder.layers = 2;
        cfg.encoder.d_enc = 8;
        cfg.encoder.heads = 2;
        cfg.eqformer.num_query_tokens = 3;
        cfg.eqformer.query_dim = 8;
        cfg.eqformer.num_qformer_blocks = 1;
        cfg.eqformer.tltr_heads = 2;
        cfg.eqformer.projection_out_dim = 8;
        cfg.lm.dim = 8;
        cfg.lm.blocks = 1;
        cfg.lm.heads = 2;
        cfg.lm.max_positions = 256;
        cfg
    }

    fn store_for(cfg: &RunConfig) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        init_eq_params(&mut store, cfg, 3);
        init_lm_params(&mut store, cfg, 3);
        store
    }

    fn utterance(tok: &Tokenizer, speaker: usize, text: &str, e: Emotion, i: Intensity, frames: usize, seed: u64) -> Utterance {
        let cfg = small_cfg();
        Utterance {
            speaker_id: speaker,
            transcript_tokens: tok.tokenize(text),
            emotion: e,
            intensity: i,
            features: gaussian::<f32>(seed, "feat", frames, cfg.corpus.feature_dim, 0.5),
            duration_frames: frames,
        }
    }

    fn dialogue(tok: &Tokenizer) -> Dialogue {
        Dialogue {
            dialogue_id: "t0000".into(),
            utterances: vec![
                utterance(tok, 0, "i felt so good about work", Emotion::Happy, Intensity::Medium, 10, 11),
                utterance(tok, 1, "that is nice", Emotion::Happy, Intensity::Weak, 8, 12),
                utterance(tok, 0, "we should talk about the weather", Emotion::Happy, Intensity::Medium, 12, 13),
            ],
            current_turn: 2,
        }
    }

    fn spans_tile(ctx: &AssembledContext) {
        let mut cursor = 0usize;
        let mut expect = |s: Span| {
            assert_eq!(s.start, cursor, "span starts at {} but cursor is {cursor}", s.start);
            cursor = s.end();
        };
        expect(ctx.segments.instruction);
        for t in &ctx.segments.turns {
            expect(t.prefix);
            if let Some(e) = t.emotion {
                expect(e);
            }
            expect(t.transcript);
        }
        expect(ctx.segments.answer);
        assert_eq!(cursor, ctx.tokens.len(), "spans must cover the whole sequence");
        assert_eq!(ctx.tokens.len(), ctx.sequence.modality.len());
        assert_eq!(ctx.tokens.len(), ctx.loss_mask.len());
    }

    #[test]
    fn instruction_templates_are_fixed_distinct_and_in_vocabulary() {
        let tok = Tokenizer::new();
        let s1 = render_instruction(AssemblyMode::Stage1Align, &tok);
        let s2 = render_instruction(AssemblyMode::Stage2Finetune, &tok);
        assert_eq!(s1, render_instruction(AssemblyMode::Stage1Align, &tok));
        assert_eq!(s2, render_instruction(AssemblyMode::Stage2PretrainText, &tok));
        assert_eq!(s2, render_instruction(AssemblyMode::InferSpeechOnly, &tok));
        assert_ne!(s1, s2);
        assert!(s1.len() <= 48 && s2.len() <= 48);
        assert!(!s1.contains(&tok.unk_id()) && !s2.contains(&tok.unk_id()), "template words must be in vocabulary");
    }

    #[test]
    fn prefixes_are_injective_over_turn_and_speaker() {
        let tok = Tokenizer::new();
        let mut seen = std::collections::HashSet::new();
        for k in 0..16 {
            for s in 0..2 {
                assert!(seen.insert(prefix_tokens(k, s, &tok)), "duplicate prefix for ({k},{s})");
            }
        }
    }

    #[test]
    fn finetune_context_has_the_documented_shape() {
        let cfg = small_cfg();
        let store = store_for(&cfg);
        let tok = Tokenizer::new();
        let schema = AnswerSchema::new(&tok);
        let d = dialogue(&tok);
        let mut g = Graph::new();
        let mut net = Net::new(&mut g, &store);
        let ctx = build_context(&mut net, &d, AssemblyMode::Stage2Finetune, &cfg, &tok, &schema).unwrap();

        spans_tile(&ctx);
        assert_eq!(ctx.segments.turns.len(), 3);
        let emotion_spans: Vec<_> = ctx.segments.turns.iter().filter_map(|t| t.emotion).collect();
        assert_eq!(emotion_spans.len(), 2, "history turns only");
        assert!(ctx.segments.turns[2].emotion.is_none(), "current turn must stay blind");
        for s in &emotion_spans {
            assert_eq!(s.len, cfg.eqformer.num_query_tokens);
            for p in s.start..s.end() {
                assert_eq!(ctx.sequence.modality[p], Modality::Emotion);
                assert!(!ctx.loss_mask[p], "emotion positions never carry loss");
            }
        }
        for (p, &m) in ctx.sequence.modality.iter().enumerate() {
            let in_emotion = emotion_spans.iter().any(|s| p >= s.start && p < s.end());
            assert_eq!(m == Modality::Emotion, in_emotion);
        }
        let answer = ctx.segments.answer;
        assert_eq!(answer.len, schema.render(d.current().emotion, d.current().intensity, &tok).len());
        assert_eq!(ctx.loss_mask.iter().filter(|&&m| m).count(), answer.len);
        for p in answer.start..answer.end() {
            assert!(ctx.loss_mask[p]);
        }
        assert_eq!(ctx.layer_weights.len(), 2);
    }

    #[test]
    fn stage1_context_contains_no_transcript_tokens() {
        let cfg = small_cfg();
        let store = store_for(&cfg);
        let tok = Tokenizer::new();
        let schema = AnswerSchema::new(&tok);
        let u = utterance(&tok, 0, "i felt so good about work", Emotion::Sad, Intensity::Strong, 9, 21);
        let mut g = Graph::new();
        let mut net = Net::new(&mut g, &store);
        let ctx = build_stage1_context(&mut net, &u, &cfg, &tok, &schema).unwrap();

        spans_tile(&ctx);
        assert_eq!(ctx.segments.turns.len(), 1);
        let turn = &ctx.segments.turns[0];
        assert_eq!(turn.prefix.len, 0);
        assert_eq!(turn.transcript.len, 0);
        assert_eq!(turn.emotion.unwrap().len, cfg.eqformer.num_query_tokens);
        for &id in &u.transcript_tokens {
            let in_answer_or_instruction = |p: usize| {
                p < ctx.segments.instruction.end() || p >= ctx.segments.answer.start
            };
            for (p, &t) in ctx.tokens.iter().enumerate() {
                if t == id {
                    assert!(in_answer_or_instruction(p), "transcript token leaked into the stage-1 context");
                }
            }
        }
        let want = schema.render(u.emotion, u.intensity, &tok);
        let a = ctx.segments.answer;
        assert_eq!(&ctx.tokens[a.start..a.end()], want.as_slice());
    }

    #[test]
    fn pretrain_swaps_speech_segments_for_label_tokens() {
        let cfg = small_cfg();
        let store = store_for(&cfg);
        let tok = Tokenizer::new();
        let schema = AnswerSchema::new(&tok);
        let d = dialogue(&tok);
        let mut g = Graph::new();
        let mut net = Net::new(&mut g, &store);
        let ctx = build_context(&mut net, &d, AssemblyMode::Stage2PretrainText, &cfg, &tok, &schema).unwrap();

        spans_tile(&ctx);
        for (k, t) in ctx.segments.turns.iter().enumerate() {
            if k < 2 {
                let e = t.emotion.unwrap();
                assert_eq!(e.len, 1);
                assert_eq!(ctx.tokens[e.start], tok.emotion_id(d.utterances[k].emotion));
                assert_eq!(ctx.sequence.modality[e.start], Modality::Text, "label text is text, not speech");
            }
        }
        assert!(ctx.layer_weights.is_empty(), "no speech was encoded");
    }

    #[test]
    fn pretrain_and_finetune_agree_outside_emotion_spans() {
        let cfg = small_cfg();
        let store = store_for(&cfg);
        let tok = Tokenizer::new();
        let schema = AnswerSchema::new(&tok);
        let d = dialogue(&tok);
        let mut g = Graph::new();
        let run = |g: &mut Graph<f64>, mode| {
            let mut net = Net::new(g, &store);
            let ctx = build_context(&mut net, &d, mode, &cfg, &tok, &schema).unwrap();
            let values = g.value(ctx.sequence.embeddings).clone();
            (ctx, values)
        };
        let (pt, pt_v) = run(&mut g, AssemblyMode::Stage2PretrainText);
        let (ft, ft_v) = run(&mut g, AssemblyMode::Stage2Finetune);

        let pairs = [
            (pt.segments.instruction, ft.segments.instruction),
            (pt.segments.answer, ft.segments.answer),
        ];
        let turn_pairs = pt.segments.turns.iter().zip(ft.segments.turns.iter()).flat_map(|(a, b)| {
            [(a.prefix, b.prefix), (a.transcript, b.transcript)]
        });
        for (sa, sb) in pairs.into_iter().chain(turn_pairs) {
            assert_eq!(sa.len, sb.len);
            for off in 0..sa.len {
                for col in 0..cfg.lm.dim {
                    assert_eq!(pt_v[[sa.start + off, col]], ft_v[[sb.start + off, col]]);
                }
            }
        }
    }

    #[test]
    fn context_is_blind_to_the_current_turn_labels() {
        let cfg = small_cfg();
        let store = store_for(&cfg);
        let tok = Tokenizer::new();
        let schema = AnswerSchema::new(&tok);
        let mut a = dialogue(&tok);
        let mut b = dialogue(&tok);
        b.utterances[2].emotion = Emotion::Angry;
        b.utterances[2].intensity = Intensity::Strong;
        b.utterances[2].features = gaussian::<f32>(99, "other", 12, cfg.corpus.feature_dim, 0.5);
        a.utterances[2].features = gaussian::<f32>(98, "one", 12, cfg.corpus.feature_dim, 0.5);

        let infer = |d: &Dialogue| {
            let mut g = Graph::new();
            let mut net = Net::new(&mut g, &store);
            let ctx = build_context(&mut net, d, AssemblyMode::InferSpeechOnly, &cfg, &tok, &schema).unwrap();
            (g.value(ctx.sequence.embeddings).clone(), ctx.tokens)
        };
        let (va, ta) = infer(&a);
        let (vb, tb) = infer(&b);
        assert_eq!(ta, tb);
        assert_eq!(va, vb, "inference context depended on the current turn's labels or audio");

        let train = |d: &Dialogue| {
            let mut g = Graph::new();
            let mut net = Net::new(&mut g, &store);
            let ctx = build_context(&mut net, d, AssemblyMode::Stage2Finetune, &cfg, &tok, &schema).unwrap();
            let cut = ctx.segments.answer.start;
            (g.value(ctx.sequence.embeddings).slice(ndarray::s![..cut, ..]).to_owned(), ctx.segments.answer)
        };
        let (ctx_a, ans_a) = train(&a);
        let (ctx_b, ans_b) = train(&b);
        assert_eq!(ans_a.start, ans_b.start);
        assert_eq!(ctx_a, ctx_b, "teacher-forced context leaked current labels before the answer");
    }

    #[test]
    fn inference_contexts_carry_no_targets() {
        let cfg = small_cfg();
        let store = store_for(&cfg);
        let tok = Tokenizer::new();
        let schema = AnswerSchema::new(&tok);
        let d = dialogue(&tok);
        let mut g = Graph::new();
        let mut net = Net::new(&mut g, &store);
        let ctx = build_context(&mut net, &d, AssemblyMode::InferSpeechOnly, &cfg, &tok, &schema).unwrap();
        spans_tile(&ctx);
        assert_eq!(ctx.segments.answer.len, 0);
        assert!(ctx.loss_mask.iter().all(|&m| !m));
        let t2 = &ctx.segments.turns[2];
        assert_eq!(
            &ctx.tokens[t2.transcript.start..t2.transcript.end()],
            d.utterances[2].transcript_tokens.as_slice(),
            "supplied transcripts must appear verbatim"
        );
    }

    #[test]
    fn too_few_history_turns_is_an_error() {
        let cfg = small_cfg();
        let store = store_for(&cfg);
        let tok = Tokenizer::new();
        let schema = AnswerSchema::new(&tok);
        let mut d = dialogue(&tok);
        d.current_turn = 1;
        let mut g = Graph::new();
        let mut net = Net::new(&mut g, &store);
        let err = build_context(&mut net, &d, AssemblyMode::Stage2Finetune, &cfg, &tok, &schema).unwrap_err();
        assert_eq!(err, AssemblyError::TooFewTurns { current: 1 });
    }

    #[test]
    fn oversized_contexts_report_their_measured_length() {
        let mut cfg = small_cfg();
        let store = store_for(&cfg);
        let tok = Tokenizer::new();
        let schema = AnswerSchema::new(&tok);
        let d = dialogue(&tok);

        // measure the real length once, then shrink the budget below it
        let mut g = Graph::new();
        let mut net = Net::new(&mut g, &store);
        let full = build_context(&mut net, &d, AssemblyMode::Stage2Finetune, &cfg, &tok, &schema).unwrap();
        let real_len = full.tokens.len();

        cfg.lm.max_positions = real_len - 1;
        let mut g = Graph::new();
        let mut net = Net::new(&mut g, &store);
        let err = build_context(&mut net, &d, AssemblyMode::Stage2Finetune, &cfg, &tok, &schema).unwrap_err();
        assert_eq!(err, AssemblyError::Overflow { length: real_len, max_positions: real_len - 1 });
    }
}
