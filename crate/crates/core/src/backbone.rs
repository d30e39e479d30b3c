//! Decoder-only transformer backbone: pre-norm blocks with causal multi-head
//! attention, learned positions, and an optional context adapter applied to
//! each block's output.
//!
//! Prompt layout for headline generation is `[BOS] body [SEP]`, after which
//! the model emits headline tokens until `[EOS]`.

use std::ops::Range;

use crate::adapter::{ContextPack, ContextValues};
use crate::data::{TokenId, BOS, EOS, PAD, SEP};
use crate::error::{Error, Result};
use crate::model::{AttentionParams, BlockParams, Model};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct HiddenStates {
    /// Output of every block, after adaptation when it applies.
    pub layers: Vec<Var>,
    /// Final-norm states, the input to the output head. `[seq, d_model]`.
    pub final_states: Var,
    pub logits: Option<Var>,
}

fn linear(g: &mut Graph, store: &ParamStore, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
    let (w, b) = (g.param(store, w), g.param(store, b));
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

fn layer_norm(g: &mut Graph, store: &ParamStore, x: Var, (gain, bias): (ParamId, ParamId)) -> Result<Var> {
    let (gain, bias) = (g.param(store, gain), g.param(store, bias));
    g.layer_norm(x, gain, bias)
}

/// Multi-head scaled dot-product attention over `x: [n, d]`. Returns the
/// output and each head's attention weights.
pub(crate) fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    p: &AttentionParams,
    n_heads: usize,
    causal: bool,
) -> Result<(Var, Vec<Var>)> {
    let d = g.value(x).shape()[1];
    let dh = d / n_heads;
    let q = linear(g, store, x, (p.wq, p.bq))?;
    let k = linear(g, store, x, (p.wk, p.bk))?;
    let v = linear(g, store, x, (p.wv, p.bv))?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, lo, hi)?,
                g.slice_cols(k, lo, hi)?,
                g.slice_cols(v, lo, hi)?,
            )
        };
        let scores = g.matmul_t(qh, kh)?;
        let scores = g.scale(scores, scale);
        let w = if causal {
            g.causal_softmax(scores)?
        } else {
            g.softmax(scores, 1)?
        };
        weights.push(w);
        heads.push(g.matmul(w, vh)?);
    }
    let cat = if n_heads == 1 { heads[0] } else { g.concat_cols(&heads)? };
    Ok((linear(g, store, cat, (p.wo, p.bo))?, weights))
}

/// One pre-norm transformer block. Returns the block output and attention weights.
pub fn transformer_block(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    p: &BlockParams,
    n_heads: usize,
    causal: bool,
) -> Result<(Var, Vec<Var>)> {
    let a = layer_norm(g, store, x, p.ln1)?;
    let (attn, weights) = multi_head_attention(g, store, a, &p.attn, n_heads, causal)?;
    let x = g.add(x, attn)?;
    let b = layer_norm(g, store, x, p.ln2)?;
    let h = linear(g, store, b, p.ff1)?;
    let h = g.relu(h);
    let f = linear(g, store, h, p.ff2)?;
    Ok((g.add(x, f)?, weights))
}

/// Mean of `states` rows over `positions`, as a `[d]` vector.
pub fn mean_over(g: &mut Graph, states: Var, positions: Range<usize>) -> Result<Var> {
    let rows = g.slice_rows(states, positions.start, positions.end)?;
    g.mean_rows(rows)
}

/// `[BOS] body [SEP] headline` as model input, plus next-token targets that
/// score only the headline and the closing `[EOS]` (everything else is `PAD`).
pub fn teacher_forced_sequence(body: &[TokenId], headline: &[TokenId]) -> (Vec<TokenId>, Vec<TokenId>) {
    let mut input = Vec::with_capacity(body.len() + headline.len() + 2);
    input.push(BOS);
    input.extend_from_slice(body);
    input.push(SEP);
    input.extend_from_slice(headline);
    let mut targets = vec![PAD; input.len()];
    let first = body.len() + 1;
    for (i, &t) in headline.iter().chain(std::iter::once(&EOS)).enumerate() {
        targets[first + i] = t;
    }
    (input, targets)
}

/// Input positions holding headline tokens in [`teacher_forced_sequence`].
pub fn headline_positions(body_len: usize, headline_len: usize) -> Range<usize> {
    body_len + 2..body_len + 2 + headline_len
}

/// Positions whose states emit the headline tokens: SEP through the
/// second-to-last headline token.
pub fn emission_positions(body_len: usize, headline_len: usize) -> Range<usize> {
    body_len + 1..body_len + 1 + headline_len
}

/// Input positions holding body tokens in [`teacher_forced_sequence`].
pub fn body_positions(body_len: usize) -> Range<usize> {
    1..body_len + 1
}

impl Model {
    /// Causal forward pass. When `ctx` is given and adapters are enabled,
    /// each selected block's output is passed through the context adapter.
    pub fn forward(
        &self,
        g: &mut Graph,
        tokens: &[TokenId],
        ctx: Option<&ContextPack>,
        with_logits: bool,
    ) -> Result<HiddenStates> {
        let cfg = &self.config.backbone;
        if tokens.is_empty() {
            return Err(Error::Degenerate("forward on an empty sequence"));
        }
        if tokens.len() > cfg.max_seq_len {
            return Err(Error::TooLong {
                len: tokens.len(),
                max: cfg.max_seq_len,
            });
        }
        let store = &self.store;
        let p = &self.backbone;
        let tok = g.param(store, p.tok_emb);
        let pos = g.param(store, p.pos_emb);
        let te = g.embedding(tok, tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pe = g.embedding(pos, &positions)?;
        let mut x = g.add(te, pe)?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (l, block) in p.blocks.iter().enumerate() {
            x = transformer_block(g, store, x, block, cfg.n_heads, true)?.0;
            if let Some(ctx) = ctx {
                if cfg.adapts_layer(l) {
                    x = self.adapt_hidden(g, x, ctx, l)?;
                }
            }
            layers.push(x);
        }
        let final_states = layer_norm(g, store, x, p.ln_f)?;
        let logits = if with_logits {
            let head = g.param(store, p.lm_head);
            Some(g.matmul_t(final_states, head)?)
        } else {
            None
        };
        Ok(HiddenStates {
            layers,
            final_states,
            logits,
        })
    }

    /// Article representation: mean of final states over non-pad positions
    /// of a context-free pass over the body.
    pub fn encode_article(&self, g: &mut Graph, body: &[TokenId]) -> Result<Var> {
        let keep: Vec<bool> = body.iter().map(|&t| t != PAD).collect();
        let n = keep.iter().filter(|&&k| k).count();
        if n == 0 {
            return Err(Error::Degenerate("encode_article on an empty body"));
        }
        let hs = self.forward(g, body, None, false)?;
        let w: Vec<f64> = keep.iter().map(|&k| if k { 1.0 / n as f64 } else { 0.0 }).collect();
        let w = g.constant(Tensor::matrix(1, body.len(), w)?);
        let pooled = g.matmul(w, hs.final_states)?;
        g.reshape(pooled, &[self.config.backbone.d_model])
    }

    /// Headline embedding: mean of final states over the headline positions
    /// of a teacher-forced pass.
    pub fn embed_headline(&self, g: &mut Graph, states: &HiddenStates, positions: Range<usize>) -> Result<Var> {
        if positions.is_empty() {
            return Err(Error::Degenerate("embed_headline on an empty headline"));
        }
        mean_over(g, states.final_states, positions)
    }

    /// Greedy decoding from `[BOS] body [SEP]`. Stops at `[EOS]` or after
    /// `max_len` tokens; never emits PAD, BOS or SEP.
    pub fn generate(&self, body: &[TokenId], ctx: Option<&ContextValues>, max_len: usize) -> Result<Vec<TokenId>> {
        let mut seq = Vec::with_capacity(body.len() + max_len + 2);
        seq.push(BOS);
        seq.extend(body.iter().copied().filter(|&t| t != PAD));
        seq.push(SEP);
        let mut out = Vec::new();
        while out.len() < max_len && seq.len() < self.config.backbone.max_seq_len {
            let mut g = Graph::new();
            let pack = ctx.map(|c| c.insert(&mut g));
            let hs = self.forward(&mut g, &seq, pack.as_ref(), true)?;
            let logits = g.value(hs.logits.expect("requested"));
            let last = logits.row(seq.len() - 1);
            let next = argmax_allowed(last);
            if next == EOS {
                break;
            }
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }
}

fn argmax_allowed(row: &[f64]) -> TokenId {
    let mut best = EOS;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if matches!(i, PAD | BOS | SEP) {
            continue;
        }
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn micro() -> Model {
        let mut c = ModelConfig::default();
        c.backbone.vocab_size = 40;
        c.backbone.d_model = 16;
        c.backbone.d_ff = 32;
        c.backbone.max_seq_len = 32;
        c.backbone.adapter_dim = 8;
        c.encoder.d_user = 16;
        c.encoder.d_ff = 32;
        c.init_std = 0.3;
        Model::new(c, 5).unwrap()
    }

    #[test]
    fn teacher_forced_layout() {
        let (input, targets) = teacher_forced_sequence(&[10, 11], &[20, 21, 22]);
        assert_eq!(input, vec![BOS, 10, 11, SEP, 20, 21, 22]);
        assert_eq!(targets, vec![PAD, PAD, PAD, 20, 21, 22, EOS]);
        assert_eq!(headline_positions(2, 3), 4..7);
        assert_eq!(emission_positions(2, 3), 3..6);
        assert_eq!(body_positions(2), 1..3);
    }

    #[test]
    fn shapes_per_layer() {
        let m = micro();
        let mut g = Graph::new();
        let hs = m.forward(&mut g, &[5, 6, 7, 8], None, true).unwrap();
        assert_eq!(hs.layers.len(), 2);
        for &h in &hs.layers {
            assert_eq!(g.value(h).shape(), &[4, 16]);
        }
        assert_eq!(g.value(hs.logits.unwrap()).shape(), &[4, 40]);
    }

    #[test]
    fn overlong_input_is_rejected() {
        let m = micro();
        let mut g = Graph::new();
        let toks = vec![5; 33];
        assert!(matches!(
            m.forward(&mut g, &toks, None, false),
            Err(Error::TooLong { len: 33, max: 32 })
        ));
    }

    #[test]
    fn causal_perturbation_leaves_earlier_logits_unchanged() {
        let m = micro();
        let base = [5, 9, 13, 17, 21, 25];
        let mut g = Graph::new();
        let a = m.forward(&mut g, &base, None, true).unwrap().logits.unwrap();
        for t in 0..base.len() {
            let mut edited = base;
            for tok in edited.iter_mut().skip(t + 1) {
                *tok = 30;
            }
            let mut g2 = Graph::new();
            let b = m.forward(&mut g2, &edited, None, true).unwrap().logits.unwrap();
            for r in 0..=t {
                assert_eq!(g.value(a).row(r), g2.value(b).row(r), "row {r} after edit at {t}");
            }
        }
    }

    #[test]
    fn encode_article_cases() {
        let m = micro();
        let mut g = Graph::new();
        let e = m.encode_article(&mut g, &[7]).unwrap();
        let hs = m.forward(&mut g, &[7], None, false).unwrap();
        assert_eq!(g.value(e).data(), g.value(hs.final_states).row(0));

        let body = [7, 8, 9, 10];
        let e1 = m.encode_article(&mut g, &body).unwrap();
        let padded = [7, 8, 9, 10, PAD, PAD];
        let e2 = m.encode_article(&mut g, &padded).unwrap();
        assert_eq!(g.value(e1).data(), g.value(e2).data());

        let reversed = [10, 9, 8, 7];
        let e3 = m.encode_article(&mut g, &reversed).unwrap();
        assert_ne!(g.value(e1).data(), g.value(e3).data());

        assert!(matches!(m.encode_article(&mut g, &[PAD]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn embed_headline_single_position_and_empty() {
        let m = micro();
        let mut g = Graph::new();
        let hs = m.forward(&mut g, &[5, 6, 7], None, false).unwrap();
        let e = m.embed_headline(&mut g, &hs, 2..3).unwrap();
        assert_eq!(g.value(e).data(), g.value(hs.final_states).row(2));
        assert!(m.embed_headline(&mut g, &hs, 2..2).is_err());
    }

    #[test]
    fn generate_respects_max_len_and_is_deterministic() {
        let m = micro();
        let one = m.generate(&[5, 6, 7], None, 1).unwrap();
        assert!(one.len() <= 1);
        let a = m.generate(&[5, 6, 7], None, 10).unwrap();
        let b = m.generate(&[5, 6, 7], None, 10).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&t| !matches!(t, PAD | BOS | SEP | EOS)));
    }
}
