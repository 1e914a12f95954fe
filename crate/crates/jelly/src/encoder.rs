//! Emotion encoder stack: a frozen layered speech encoder stand-in, the
//! TLTR layer-fusion module, the Q-former that compresses variable-length
//! frames into a fixed set of query vectors, and the projection into the
//! language-model embedding space.

use crate::config::RunConfig;
use crate::nn::{
    init_cross_block, init_linear, init_self_block, key_mask_bias, sinusoid, Net,
};
use crate::params::{gaussian, ParamStore};
use crate::tape::{Elem, NodeId};
use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("every frame is masked out; cannot encode an empty utterance")]
    AllFramesMasked,
    #[error("feature matrix is {got} wide, encoder expects {expected}")]
    FeatureWidth { expected: usize, got: usize },
    #[error("feature matrix has {rows} frames but the mask covers {mask_len}")]
    MaskLength { rows: usize, mask_len: usize },
}

/// Per-block states of the frozen encoder. All layers share one shape:
/// the stride-2 downsample after the first block is already applied, and
/// `frame_mask` is the downsampled validity mask.
pub struct LayeredEncoding {
    pub layers: Vec<NodeId>,
    pub frame_mask: Vec<bool>,
}

/// Projected emotion representation, ready to splice into an LM context.
#[derive(Debug)]
pub struct EmotionEmbedding {
    pub node: NodeId,
    /// TLTR layer-attention distribution, absent when TLTR is disabled.
    pub layer_weights: Option<Vec<f64>>,
}

/// Rows an emotion segment occupies in an assembled context.
pub fn emotion_span_len(cfg: &RunConfig) -> usize {
    if cfg.ablation.use_qformer {
        cfg.eqformer.num_query_tokens
    } else {
        1
    }
}

/// Registers every encoder-side tensor. Ablations that remove a module
/// also remove its parameters, so trainable sets shrink accordingly.
pub fn init_eq_params<F: Elem>(store: &mut ParamStore<F>, cfg: &RunConfig, seed: u64) {
    let d_enc = cfg.encoder.d_enc;
    init_linear(store, "enc.in", cfg.corpus.feature_dim, d_enc, seed);
    for i in 0..cfg.encoder.layers {
        init_self_block(store, &format!("enc.block{i}"), d_enc, seed);
    }
    if cfg.ablation.use_tltr {
        init_self_block(store, "tltr.time", d_enc, seed);
        store.insert("tltr.query", gaussian(seed, "tltr.query", 1, d_enc, 0.02));
    }
    let proj_in = if cfg.ablation.use_qformer {
        let qd = cfg.eqformer.query_dim;
        store.insert(
            "qf.tokens",
            gaussian(seed, "qf.tokens", cfg.eqformer.num_query_tokens, qd, 0.02),
        );
        for i in 0..cfg.eqformer.num_qformer_blocks {
            init_cross_block(store, &format!("qf.block{i}"), qd, d_enc, seed);
        }
        qd
    } else {
        d_enc
    };
    init_linear(store, "proj", proj_in, cfg.eqformer.projection_out_dim, seed);
}

/// Runs the frozen encoder over one utterance's feature frames and
/// records the state after every block. Masked frames are hidden from
/// all attention, so padding never leaks into valid positions.
pub fn encode_layers<F: Elem>(
    net: &mut Net<F>,
    features: &Array2<F>,
    frame_mask: &[bool],
    cfg: &RunConfig,
) -> Result<LayeredEncoding, EncoderError> {
    if features.ncols() != cfg.corpus.feature_dim {
        return Err(EncoderError::FeatureWidth {
            expected: cfg.corpus.feature_dim,
            got: features.ncols(),
        });
    }
    if features.nrows() != frame_mask.len() {
        return Err(EncoderError::MaskLength {
            rows: features.nrows(),
            mask_len: frame_mask.len(),
        });
    }
    if !frame_mask.iter().any(|&m| m) {
        return Err(EncoderError::AllFramesMasked);
    }
    let frames = features.nrows();
    let d_enc = cfg.encoder.d_enc;

    let feats = net.leaf(features.clone());
    let x = net.linear(feats, "enc.in");
    let pos = net.leaf(sinusoid(frames, d_enc));
    let mut x = net.g.add(x, pos);
    let mut mask = frame_mask.to_vec();
    let mut layers = Vec::with_capacity(cfg.encoder.layers);
    for i in 0..cfg.encoder.layers {
        let bias = key_mask_bias(mask.len(), &mask).map(|b| net.leaf(b));
        x = net.self_block(x, cfg.encoder.heads, &format!("enc.block{i}"), bias);
        if i == 0 {
            // fixed stride-2 subsample; every recorded layer shares it
            let keep: Vec<usize> = (0..mask.len()).step_by(2).collect();
            x = net.g.gather_rows(x, &keep);
            mask = keep.iter().map(|&r| mask[r]).collect();
            if !mask.iter().any(|&m| m) {
                return Err(EncoderError::AllFramesMasked);
            }
        }
        layers.push(x);
    }
    Ok(LayeredEncoding { layers, frame_mask: mask })
}

/// Fuses the per-layer states: one shared time-transformer block runs
/// over each layer's frames, layer summaries (masked time means) feed a
/// single attention that produces one weight per layer, and the output
/// is the weight-blended time stream. Returns the blended node and the
/// layer-weight distribution.
pub fn tltr<F: Elem>(net: &mut Net<F>, enc: &LayeredEncoding, cfg: &RunConfig) -> (NodeId, Vec<f64>) {
    let valid = &enc.frame_mask;
    let heads = cfg.eqformer.tltr_heads;
    let bias = key_mask_bias(valid.len(), valid).map(|b| net.leaf(b));
    let transformed: Vec<NodeId> = enc
        .layers
        .iter()
        .map(|&layer| net.self_block(layer, heads, "tltr.time", bias))
        .collect();

    let summaries: Vec<NodeId> = transformed
        .iter()
        .map(|&t| net.masked_mean_rows(t, valid))
        .collect();
    let stacked = net.g.concat_rows(&summaries);
    let query = net.p("tltr.query");
    let qt = net.g.transpose(query);
    let scores = net.g.matmul(stacked, qt);
    let scores = net.g.transpose(scores);
    let inv = F::from_f64(1.0 / (cfg.encoder.d_enc as f64).sqrt());
    let scores = net.g.scale(scores, inv);
    let weights = net.g.softmax_rows(scores);

    let mut blended = None;
    for (l, &t) in transformed.iter().enumerate() {
        let wl = net.g.slice_cols(weights, l, 1);
        let term = net.g.mul_broadcast(t, wl);
        blended = Some(match blended {
            None => term,
            Some(acc) => net.g.add(acc, term),
        });
    }
    let weight_row = net.g.value(weights).row(0).iter().map(|&w| Elem::to_f64(w)).collect();
    (blended.expect("encoder produced no layers"), weight_row)
}

/// Compresses a variable-length frame stream into exactly
/// `num_query_tokens` vectors via learned queries and cross-attention.
pub fn qformer<F: Elem>(net: &mut Net<F>, features: NodeId, valid: &[bool], cfg: &RunConfig) -> NodeId {
    let num_q = cfg.eqformer.num_query_tokens;
    let bias = key_mask_bias(num_q, valid).map(|b| net.leaf(b));
    let mut q = net.p("qf.tokens");
    for i in 0..cfg.eqformer.num_qformer_blocks {
        q = net.cross_block(q, features, cfg.eqformer.tltr_heads, &format!("qf.block{i}"), bias);
    }
    q
}

/// Affine map into the language-model embedding space, applied per row.
pub fn project<F: Elem>(net: &mut Net<F>, x: NodeId) -> NodeId {
    net.linear(x, "proj")
}

/// Full encoder-side pass for one utterance: frozen encoder, TLTR fusion
/// (or last layer when disabled), Q-former compression (or masked mean
/// pooling when disabled), then projection.
pub fn emotion_embedding<F: Elem>(
    net: &mut Net<F>,
    features: &Array2<F>,
    frame_mask: &[bool],
    cfg: &RunConfig,
) -> Result<EmotionEmbedding, EncoderError> {
    let enc = encode_layers(net, features, frame_mask, cfg)?;
    let (stream, layer_weights) = if cfg.ablation.use_tltr {
        let (blended, w) = tltr(net, &enc, cfg);
        (blended, Some(w))
    } else {
        (*enc.layers.last().expect("encoder produced no layers"), None)
    };
    let pooled = if cfg.ablation.use_qformer {
        qformer(net, stream, &enc.frame_mask, cfg)
    } else {
        net.masked_mean_rows(stream, &enc.frame_mask)
    };
    let node = project(net, pooled);
    Ok(EmotionEmbedding { node, layer_weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::toy_config;
    use crate::nn::finite_difference_errors;
    use crate::params::{gaussian, zeros};
    use crate::tape::Graph;

    fn small_cfg() -> RunConfig {
        let mut cfg = toy_config();
        cfg.corpus.feature_dim = 8;
        cfg.encoder.layers = 2;
        cfg.encoder.d_enc = 8;
        cfg.encoder.heads = 2;
        cfg.eqformer.num_query_tokens = 2;
        cfg.eqformer.query_dim = 8;
        cfg.eqformer.num_qformer_blocks = 1;
        cfg.eqformer.tltr_heads = 2;
        cfg.eqformer.projection_out_dim = 8;
        cfg.lm.dim = 8;
        cfg
    }

    fn init_store(cfg: &RunConfig, seed: u64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        init_eq_params(&mut store, cfg, seed);
        store
    }

    fn embed(
        store: &ParamStore<f64>,
        cfg: &RunConfig,
        features: &Array2<f64>,
        mask: &[bool],
    ) -> (Array2<f64>, Option<Vec<f64>>) {
        let mut g = Graph::new();
        let mut net = Net::new(&mut g, store);
        let emb = emotion_embedding(&mut net, features, mask, cfg).unwrap();
        (g.value(emb.node).clone(), emb.layer_weights)
    }

    #[test]
    fn layer_states_share_the_downsampled_shape() {
        let cfg = toy_config();
        let store: ParamStore<f64> = {
            let mut s = ParamStore::new();
            init_eq_params(&mut s, &cfg, 3);
            s
        };
        let features = gaussian::<f64>(5, "feat", 40, cfg.corpus.feature_dim, 1.0);
        let mask = vec![true; 40];
        let mut g = Graph::new();
        let mut net = Net::new(&mut g, &store);
        let enc = encode_layers(&mut net, &features, &mask, &cfg).unwrap();
        assert_eq!(enc.layers.len(), cfg.encoder.layers);
        assert_eq!(enc.frame_mask.len(), 20);
        for &l in &enc.layers {
            assert_eq!(g.value(l).dim(), (20, cfg.encoder.d_enc));
        }
    }

    #[test]
    fn padding_with_masked_frames_changes_nothing_valid() {
        let cfg = toy_config();
        let store = init_store(&cfg, 7);
        let real = gaussian::<f64>(11, "feat", 40, cfg.corpus.feature_dim, 1.0);
        let mask = vec![true; 40];

        let mut padded = Array2::zeros((50, cfg.corpus.feature_dim));
        padded.slice_mut(ndarray::s![..40, ..]).assign(&real);
        for r in 40..50 {
            for c in 0..cfg.corpus.feature_dim {
                padded[[r, c]] = 1_000.0; // junk that must stay invisible
            }
        }
        let mut pad_mask = vec![true; 40];
        pad_mask.extend(std::iter::repeat(false).take(10));

        let run_layers = |feats: &Array2<f64>, m: &[bool]| {
            let mut g = Graph::new();
            let mut net = Net::new(&mut g, &store);
            let enc = encode_layers(&mut net, feats, m, &cfg).unwrap();
            let vals: Vec<Array2<f64>> = enc.layers.iter().map(|&l| g.value(l).clone()).collect();
            (vals, enc.frame_mask)
        };
        let (base, _) = run_layers(&real, &mask);
        let (pad, pad_valid) = run_layers(&padded, &pad_mask);
        assert_eq!(pad_valid.len(), 25);
        for (lb, lp) in base.iter().zip(pad.iter()) {
            for r in 0..20 {
                assert!(pad_valid[r]);
                for c in 0..cfg.encoder.d_enc {
                    assert!((lb[[r, c]] - lp[[r, c]]).abs() <= 1e-6, "layer row {r} drifted");
                }
            }
        }

        let (eb, _) = embed(&store, &cfg, &real, &mask);
        let (ep, _) = embed(&store, &cfg, &padded, &pad_mask);
        for (a, b) in eb.iter().zip(ep.iter()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn layer_weights_form_a_distribution() {
        let cfg = toy_config();
        let store = init_store(&cfg, 9);
        let features = gaussian::<f64>(13, "feat", 32, cfg.corpus.feature_dim, 1.0);
        let (_, weights) = embed(&store, &cfg, &features, &vec![true; 32]);
        let w = weights.expect("TLTR enabled");
        assert_eq!(w.len(), cfg.encoder.layers);
        assert!(w.iter().all(|&x| x >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn single_layer_fusion_degenerates_to_that_layer() {
        let mut cfg = small_cfg();
        cfg.encoder.layers = 2; // validation floor; fuse a 1-layer slice below
        let store = init_store(&cfg, 15);
        let features = gaussian::<f64>(17, "feat", 10, cfg.corpus.feature_dim, 1.0);
        let mask = vec![true; 10];

        let mut g = Graph::new();
        let mut net = Net::new(&mut g, &store);
        let enc = encode_layers(&mut net, &features, &mask, &cfg).unwrap();
        let solo = LayeredEncoding {
            layers: vec![enc.layers[1]],
            frame_mask: enc.frame_mask.clone(),
        };
        let (blended, weights) = tltr(&mut net, &solo, &cfg);
        assert_eq!(weights, vec![1.0]);
        let direct = net.self_block(
            enc.layers[1],
            cfg.eqformer.tltr_heads,
            "tltr.time",
            None,
        );
        assert_eq!(g.value(blended), g.value(direct));
    }

    #[test]
    fn query_count_fixes_the_output_rows() {
        let cfg = toy_config();
        let store = init_store(&cfg, 21);
        for frames in [24usize, 48] {
            let features = gaussian::<f64>(frames as u64, "feat", frames, cfg.corpus.feature_dim, 1.0);
            let (emb, _) = embed(&store, &cfg, &features, &vec![true; frames]);
            assert_eq!(emb.dim(), (cfg.eqformer.num_query_tokens, cfg.lm.dim));
        }
    }

    #[test]
    fn masked_frame_content_cannot_reach_the_embedding() {
        let cfg = toy_config();
        let store = init_store(&cfg, 23);
        let mut features = gaussian::<f64>(25, "feat", 30, cfg.corpus.feature_dim, 1.0);
        let mut mask = vec![true; 30];
        for r in 24..30 {
            mask[r] = false;
        }
        let (base, _) = embed(&store, &cfg, &features, &mask);
        for r in 24..30 {
            for c in 0..cfg.corpus.feature_dim {
                features[[r, c]] = -999.0;
            }
        }
        let (poked, _) = embed(&store, &cfg, &features, &mask);
        assert_eq!(base, poked, "masked frames leaked into the embedding");
    }

    #[test]
    fn fully_masked_input_is_rejected() {
        let cfg = toy_config();
        let store = init_store(&cfg, 25);
        let features = gaussian::<f64>(27, "feat", 12, cfg.corpus.feature_dim, 1.0);
        let mut g = Graph::new();
        let mut net = Net::new(&mut g, &store);
        let err = emotion_embedding(&mut net, &features, &vec![false; 12], &cfg).unwrap_err();
        assert_eq!(err, EncoderError::AllFramesMasked);
    }

    #[test]
    fn disabling_the_qformer_removes_its_parameters() {
        let mut cfg = toy_config();
        let full = init_store(&cfg, 27);
        cfg.ablation.use_qformer = false;
        let ablated = init_store(&cfg, 27);
        assert!(!full.names_with_prefix("qf.").is_empty());
        assert!(ablated.names_with_prefix("qf.").is_empty());
        assert!(ablated.value_count() < full.value_count());

        let features = gaussian::<f64>(29, "feat", 20, cfg.corpus.feature_dim, 1.0);
        let (emb, _) = embed(&ablated, &cfg, &features, &vec![true; 20]);
        assert_eq!(emb.dim(), (1, cfg.lm.dim));
        assert_eq!(emotion_span_len(&cfg), 1);
    }

    #[test]
    fn disabling_tltr_removes_its_parameters_and_weights() {
        let mut cfg = toy_config();
        cfg.ablation.use_tltr = false;
        let store = init_store(&cfg, 29);
        assert!(store.names_with_prefix("tltr.").is_empty());
        let features = gaussian::<f64>(31, "feat", 20, cfg.corpus.feature_dim, 1.0);
        let (emb, weights) = embed(&store, &cfg, &features, &vec![true; 20]);
        assert_eq!(emb.dim(), (cfg.eqformer.num_query_tokens, cfg.lm.dim));
        assert!(weights.is_none());
    }

    #[test]
    fn identity_projection_passes_rows_through() {
        let store = {
            let mut s = ParamStore::<f64>::new();
            let mut eye = zeros::<f64>(6, 6);
            for i in 0..6 {
                eye[[i, i]] = 1.0;
            }
            s.insert("proj.w", eye);
            s.insert("proj.b", zeros(1, 6));
            s
        };
        let x = gaussian::<f64>(33, "x", 4, 6, 1.0);
        let mut g = Graph::new();
        let xid = g.leaf(x.clone());
        let mut net = Net::new(&mut g, &store);
        let y = project(&mut net, xid);
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn every_parameter_passes_finite_difference_checks() {
        let cfg = small_cfg();
        let store = init_store(&cfg, 41);
        let features = gaussian::<f64>(43, "feat", 6, cfg.corpus.feature_dim, 0.8);
        let mask = vec![true, true, true, true, true, false];
        let errs = finite_difference_errors(&store, 1e-5, 2, |g, s| {
            let mut net = Net::new(g, s);
            let emb = emotion_embedding(&mut net, &features, &mask, &cfg).unwrap();
            let dim = net.g.value(emb.node).dim();
            let target = Array2::zeros(dim);
            let weight = Array2::from_elem(dim, 1.0);
            net.g.mse_mean(emb.node, target, weight)
        });
        for (name, err) in errs {
            assert!(err <= 1e-4, "{name} gradient off by {err}");
        }
    }
}
