//! Decoder-only language model with modality-routed partial low-rank
//! adapters: every block's query and value projections carry an adapter
//! pair, and each sequence position is served by the adapter matching its
//! modality tag (speech-derived emotion vectors or text embeddings).

use crate::config::{PloraMode, RunConfig};
use crate::nn::{causal_bias, Net};
use crate::params::{gaussian, zeros, ParamStore};
use crate::tape::{Elem, Graph, NodeId};
use crate::tokenizer::{Answer, AnswerSchema, TokenId};
use ndarray::Array2;
use thiserror::Error;

/// Longest answer the greedy decoder will emit, terminator included.
pub const MAX_ANSWER_TOKENS: usize = 12;

#[derive(Debug, Error, PartialEq)]
pub enum LmError {
    #[error("sequence of {length} positions exceeds the model maximum {max_positions}")]
    Overflow { length: usize, max_positions: usize },
    #[error("loss mask selects no positions")]
    EmptyLossMask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Text,
    Emotion,
}

/// An assembled input: one embedding row per position plus the modality
/// tag that routes it through the adapters.
#[derive(Debug)]
pub struct ModalityMaskedSequence {
    pub embeddings: NodeId,
    pub modality: Vec<Modality>,
}

/// Registers base-model tensors and, depending on the routing mode, the
/// adapter tensors. Down-projections start Gaussian, up-projections start
/// zero, so a fresh adapter is an exact no-op.
pub fn init_lm_params<F: Elem>(store: &mut ParamStore<F>, cfg: &RunConfig, seed: u64) {
    let dim = cfg.lm.dim;
    store.insert("lm.base.tok", gaussian(seed, "lm.base.tok", cfg.lm.vocab_size, dim, 0.02));
    store.insert("lm.base.pos", gaussian(seed, "lm.base.pos", cfg.lm.max_positions, dim, 0.02));
    for i in 0..cfg.lm.blocks {
        crate::nn::init_self_block(store, &format!("lm.base.block{i}"), dim, seed);
    }
    crate::nn::init_layer_norm(store, "lm.base.ln_f", dim);
    crate::nn::init_linear(store, "lm.base.head", dim, cfg.lm.vocab_size, seed);

    let infixes: &[&str] = match cfg.ablation.mode() {
        PloraMode::Multiple => &["e", "t"],
        PloraMode::SingleLora => &["s"],
        PloraMode::None => &[],
    };
    for infix in infixes {
        for i in 0..cfg.lm.blocks {
            for which in ["q", "v"] {
                let a_name = format!("lm.plora.{infix}.block{i}.{which}.a");
                store.insert(&a_name, gaussian(seed, &a_name, cfg.plora.rank, dim, 0.02));
                let b_name = format!("lm.plora.{infix}.block{i}.{which}.b");
                store.insert(&b_name, zeros(dim, cfg.plora.rank));
            }
        }
    }
}

/// Position-resolved adapter routing for one sequence: each entry is an
/// adapter name infix with the 0/1 row selector it applies under.
struct Routing {
    lanes: Vec<(&'static str, Option<Vec<bool>>)>,
    scale: f64,
}

impl Routing {
    fn new(modality: &[Modality], cfg: &RunConfig) -> Self {
        let lanes = match cfg.ablation.mode() {
            PloraMode::Multiple => vec![
                ("e", Some(modality.iter().map(|&m| m == Modality::Emotion).collect())),
                ("t", Some(modality.iter().map(|&m| m == Modality::Text).collect())),
            ],
            PloraMode::SingleLora => vec![("s", None)],
            PloraMode::None => vec![],
        };
        Routing { lanes, scale: cfg.plora.scale }
    }
}

/// Base linear plus routed low-rank deltas. Rows outside a lane's
/// selector are multiplied by an exact zero, so foreign-modality
/// parameters can never influence them, in value or in gradient.
fn plora_linear<F: Elem>(
    net: &mut Net<F>,
    x: NodeId,
    base_prefix: &str,
    adapter_slot: &str,
    block: usize,
    routing: &Routing,
) -> NodeId {
    let mut y = net.linear(x, base_prefix);
    let rows = net.g.value(x).nrows();
    for (infix, selector) in &routing.lanes {
        let prefix = format!("lm.plora.{infix}.block{block}.{adapter_slot}");
        let a = net.p(&format!("{prefix}.a"));
        let b = net.p(&format!("{prefix}.b"));
        let at = net.g.transpose(a);
        let xa = net.g.matmul(x, at);
        let bt = net.g.transpose(b);
        let xab = net.g.matmul(xa, bt);
        let mut delta = net.g.scale(xab, F::from_f64(routing.scale));
        if let Some(mask) = selector {
            let d_out = net.g.value(delta).ncols();
            let mut tile = Array2::zeros((rows, d_out));
            for (r, &on) in mask.iter().enumerate() {
                if on {
                    for c in 0..d_out {
                        tile[[r, c]] = F::one();
                    }
                }
            }
            let tile = net.leaf(tile);
            delta = net.g.mul(delta, tile);
        }
        y = net.g.add(y, delta);
    }
    y
}

fn lm_block<F: Elem>(net: &mut Net<F>, x: NodeId, i: usize, routing: &Routing, bias: NodeId, cfg: &RunConfig) -> NodeId {
    let p = format!("lm.base.block{i}");
    let n1 = net.layer_norm(x, &format!("{p}.ln1"));
    let q = plora_linear(net, n1, &format!("{p}.attn.q"), "q", i, routing);
    let k = net.linear(n1, &format!("{p}.attn.k"));
    let v = plora_linear(net, n1, &format!("{p}.attn.v"), "v", i, routing);
    let mixed = net.attend(q, k, v, cfg.lm.heads, Some(bias));
    let o = net.linear(mixed, &format!("{p}.attn.o"));
    let x = net.g.add(x, o);
    let n2 = net.layer_norm(x, &format!("{p}.ln2"));
    let f = net.ffn(n2, &format!("{p}.ffn"));
    net.g.add(x, f)
}

/// Causal forward pass over an assembled sequence; one logit row per
/// position.
pub fn lm_forward<F: Elem>(net: &mut Net<F>, seq: &ModalityMaskedSequence, cfg: &RunConfig) -> Result<NodeId, LmError> {
    let len = seq.modality.len();
    assert_eq!(net.g.value(seq.embeddings).nrows(), len, "modality tags must cover every row");
    if len > cfg.lm.max_positions {
        return Err(LmError::Overflow { length: len, max_positions: cfg.lm.max_positions });
    }
    let pos_table = net.p("lm.base.pos");
    let positions: Vec<usize> = (0..len).collect();
    let pos = net.g.gather_rows(pos_table, &positions);
    let mut x = net.g.add(seq.embeddings, pos);
    let bias = net.leaf(causal_bias(len));
    let routing = Routing::new(&seq.modality, cfg);
    for i in 0..cfg.lm.blocks {
        x = lm_block(net, x, i, &routing, bias, cfg);
    }
    let x = net.layer_norm(x, "lm.base.ln_f");
    Ok(net.linear(x, "lm.base.head"))
}

/// Next-token cross-entropy restricted to the positions `answer_mask`
/// marks: the logit row before each marked token must predict it. Returns
/// the loss node and how many positions were supervised.
pub fn lm_loss<F: Elem>(
    g: &mut Graph<F>,
    logits: NodeId,
    tokens: &[TokenId],
    answer_mask: &[bool],
) -> Result<(NodeId, usize), LmError> {
    assert_eq!(tokens.len(), answer_mask.len());
    assert_eq!(g.value(logits).nrows(), tokens.len());
    assert!(!answer_mask.first().copied().unwrap_or(false), "position 0 has no predecessor to predict it");
    let shifted_targets = &tokens[1..];
    let shifted_mask = &answer_mask[1..];
    let count = shifted_mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(LmError::EmptyLossMask);
    }
    let sliced = g.slice_rows(logits, 0, tokens.len() - 1);
    let loss = g.cross_entropy_mean(sliced, shifted_targets, shifted_mask);
    Ok((loss, count))
}

/// Outcome of greedy decoding: the parsed answer plus the raw token ids
/// that were emitted.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedAnswer {
    pub answer: Answer,
    pub token_ids: Vec<TokenId>,
}

/// Greedy decoding from the end of a fixed context. Stops at the answer
/// terminator or after `MAX_ANSWER_TOKENS` tokens, whichever comes first,
/// then parses the emission against the answer schema.
pub fn generate_answer<F: Elem>(
    store: &ParamStore<F>,
    cfg: &RunConfig,
    context_embeddings: &Array2<F>,
    context_modality: &[Modality],
    schema: &AnswerSchema,
) -> Result<GeneratedAnswer, LmError> {
    assert_eq!(context_embeddings.nrows(), context_modality.len());
    let mut generated: Vec<TokenId> = Vec::new();
    loop {
        let mut g = Graph::new();
        let mut net = Net::new(&mut g, store);
        let ctx = net.leaf(context_embeddings.clone());
        let embeddings = if generated.is_empty() {
            ctx
        } else {
            let tok = net.p("lm.base.tok");
            let gen_rows = net.g.gather_rows(tok, &generated);
            net.g.concat_rows(&[ctx, gen_rows])
        };
        let mut modality = context_modality.to_vec();
        modality.extend(std::iter::repeat(Modality::Text).take(generated.len()));
        let seq = ModalityMaskedSequence { embeddings, modality };
        let logits = lm_forward(&mut net, &seq, cfg)?;
        let lv = g.value(logits);
        let last = lv.row(lv.nrows() - 1);
        let mut best = 0usize;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        generated.push(best);
        if best == schema.terminator() || generated.len() >= MAX_ANSWER_TOKENS {
            break;
        }
    }
    Ok(GeneratedAnswer { answer: schema.parse(&generated), token_ids: generated })
}
