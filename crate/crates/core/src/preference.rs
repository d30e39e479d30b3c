//! User preference encoder.
//!
//! Each clicked article is encoded by mean-pooling backbone states over its
//! headline and over its body, concatenating the two and projecting to the
//! user width. The stacked item vectors go through a small bidirectional
//! transformer encoder and are pooled into the user interest vector `v_u`.

use crate::backbone::transformer_block;
use crate::data::Article;
use crate::error::{Error, Result};
use crate::model::{Model, Pooling};
use crate::tensor::{Graph, Tensor, Var};

impl Model {
    /// `e_h = [enc(headline); enc(body)] · W + b`. An empty body contributes a zero half.
    pub fn encode_history_item(&self, g: &mut Graph, article: &Article) -> Result<Var> {
        if article.headline.is_empty() {
            return Err(Error::Degenerate("history item with an empty headline"));
        }
        let d = self.config.backbone.d_model;
        let h = self.encode_article(g, &article.headline)?;
        let b = if article.body.is_empty() {
            g.constant(Tensor::zeros(&[d]))
        } else {
            self.encode_article(g, &article.body)?
        };
        let cat = g.concat_cols(&[h, b])?;
        let row = g.reshape(cat, &[1, 2 * d])?;
        let (w, bias) = self.encoder.item_proj;
        let w = g.param(&self.store, w);
        let bias = g.param(&self.store, bias);
        let y = g.matmul(row, w)?;
        let y = g.add_bias(y, bias)?;
        g.reshape(y, &[self.config.encoder.d_user])
    }

    /// Stacks item encodings into `E_U: [N, d_u]`, adding recency positions
    /// when enabled (the most recent item gets position 0).
    pub fn history_embeddings(&self, g: &mut Graph, history: &[Article]) -> Result<Var> {
        if history.is_empty() {
            return Err(Error::Degenerate("history embeddings of an empty history"));
        }
        let items = history
            .iter()
            .map(|a| self.encode_history_item(g, a))
            .collect::<Result<Vec<_>>>()?;
        let mut e_u = g.concat_rows(&items)?;
        if let Some(pos) = self.encoder.pos_emb {
            let cap = self.store.get(pos).value.shape()[0];
            let n = history.len();
            let ids: Vec<usize> = (0..n).map(|i| (n - 1 - i).min(cap - 1)).collect();
            let table = g.param(&self.store, pos);
            let pe = g.embedding(table, &ids)?;
            e_u = g.add(e_u, pe)?;
        }
        Ok(e_u)
    }

    /// Self-attention encoder over history rows. Also returns the attention
    /// weights of every head in every layer.
    pub fn self_attend(&self, g: &mut Graph, e_u: Var) -> Result<(Var, Vec<Vec<Var>>)> {
        let cfg = &self.config.encoder;
        let mut x = e_u;
        let mut all = Vec::with_capacity(cfg.n_layers);
        for block in &self.encoder.blocks {
            let (y, w) = transformer_block(g, &self.store, x, block, cfg.n_heads, false)?;
            x = y;
            all.push(w);
        }
        let (gain, bias) = self.encoder.ln_f;
        let (gain, bias) = (g.param(&self.store, gain), g.param(&self.store, bias));
        Ok((g.layer_norm(x, gain, bias)?, all))
    }

    pub fn pool_user_vector(&self, g: &mut Graph, attended: Var) -> Result<Var> {
        match (self.config.encoder.pooling, self.encoder.pool_query) {
            (Pooling::Attention, Some(q)) => {
                let q = g.param(&self.store, q);
                let scores = g.matmul(attended, q)?;
                let w = g.softmax(scores, 0)?;
                let wt = g.transpose(w)?;
                let pooled = g.matmul(wt, attended)?;
                g.reshape(pooled, &[self.config.encoder.d_user])
            }
            _ => g.mean_rows(attended),
        }
    }

    /// `v_u` for a user. An empty history falls back to the learned cold-start vector.
    pub fn user_preference(&self, g: &mut Graph, history: &[Article]) -> Result<Var> {
        if history.is_empty() {
            return Ok(self.cold_start(g));
        }
        let e_u = self.history_embeddings(g, history)?;
        let (attended, _) = self.self_attend(g, e_u)?;
        self.pool_user_vector(g, attended)
    }

    pub fn cold_start(&self, g: &mut Graph) -> Var {
        g.param(&self.store, self.encoder.cold_start)
    }

    /// `v_u` mapped into backbone width for the personalization loss.
    pub fn user_in_backbone_space(&self, g: &mut Graph, v_u: Var) -> Result<Var> {
        match self.encoder.pers_proj {
            None => Ok(v_u),
            Some(w) => {
                let du = self.config.encoder.d_user;
                let row = g.reshape(v_u, &[1, du])?;
                let w = g.param(&self.store, w);
                let y = g.matmul(row, w)?;
                g.reshape(y, &[self.config.backbone.d_model])
            }
        }
    }
}
