//! Model configuration and parameter layout.
//!
//! Every trainable tensor lives in one [`ParamStore`] under a dotted name.
//! The prefix says which component owns it: `backbone.`, `upe.` (user
//! preference encoder) or `adapter.` (context injection). Checkpoints use
//! the same names, so a component can be stripped by prefix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub adapter_enabled: bool,
    pub adapter_rank: usize,
    pub adapter_dim: usize,
    /// Layers that receive context injection; `None` means every layer.
    pub adapter_layers: Option<Vec<usize>>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            vocab_size: 2048,
            max_seq_len: 560,
            adapter_enabled: true,
            adapter_rank: 4,
            adapter_dim: 32,
            adapter_layers: None,
        }
    }
}

impl BackboneConfig {
    pub fn adapts_layer(&self, layer: usize) -> bool {
        self.adapter_enabled && self.adapter_layers.as_ref().is_none_or(|ls| ls.contains(&layer))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Mean,
    Attention,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d_user: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Learned recency positions over history items.
    pub positions: bool,
    pub pooling: Pooling,
    pub history_cap: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_user: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            positions: false,
            pooling: Pooling::Mean,
            history_cap: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            encoder: EncoderConfig::default(),
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        let e = &self.encoder;
        let bad = |m: String| Err(Error::Config(m));
        if b.d_model == 0 || b.n_heads == 0 || !b.d_model.is_multiple_of(b.n_heads) {
            return bad(format!(
                "model.d_model ({}) must be a positive multiple of model.n_heads ({})",
                b.d_model, b.n_heads
            ));
        }
        if e.d_user == 0 || e.n_heads == 0 || !e.d_user.is_multiple_of(e.n_heads) {
            return bad(format!(
                "encoder.d_user ({}) must be a positive multiple of encoder.n_heads ({})",
                e.d_user, e.n_heads
            ));
        }
        if b.adapter_rank == 0 || b.adapter_dim == 0 {
            return bad("adapter.rank and adapter.dim must be >= 1".into());
        }
        if b.n_layers == 0 || b.d_ff == 0 || e.d_ff == 0 || b.max_seq_len == 0 {
            return bad("layer counts and widths must be >= 1".into());
        }
        if b.vocab_size <= crate::data::RESERVED.len() {
            return bad("model.vocab_size must exceed the reserved block".into());
        }
        if let Some(ls) = &b.adapter_layers {
            if let Some(l) = ls.iter().find(|&&l| l >= b.n_layers) {
                return bad(format!("adapter layer {l} out of range"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1: (ParamId, ParamId),
    pub attn: AttentionParams,
    pub ln2: (ParamId, ParamId),
    pub ff1: (ParamId, ParamId),
    pub ff2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct BackboneParams {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<BlockParams>,
    pub ln_f: (ParamId, ParamId),
    pub lm_head: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub item_proj: (ParamId, ParamId),
    pub pos_emb: Option<ParamId>,
    pub blocks: Vec<BlockParams>,
    pub ln_f: (ParamId, ParamId),
    pub pool_query: Option<ParamId>,
    pub cold_start: ParamId,
    /// Maps `v_u` into backbone width for the personalization loss; only
    /// present when the widths differ.
    pub pers_proj: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct AdapterParams {
    pub proj_v: (ParamId, ParamId),
    pub proj_d: (ParamId, ParamId),
    /// `(W1, W2)` per backbone layer.
    pub fuse: Vec<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: BackboneParams,
    pub encoder: EncoderParams,
    pub adapter: AdapterParams,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init<'_> {
    fn normal(&mut self, name: String, shape: &[usize]) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.normal.sample(&mut self.rng)).collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data).unwrap())
    }

    fn fill(&mut self, name: String, shape: &[usize], v: f64) -> ParamId {
        let n = shape.iter().product();
        self.store.add(name, Tensor::new(shape.to_vec(), vec![v; n]).unwrap())
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> (ParamId, ParamId) {
        (
            self.normal(format!("{prefix}.w"), &[fan_in, fan_out]),
            self.fill(format!("{prefix}.b"), &[fan_out], 0.0),
        )
    }

    fn layer_norm(&mut self, prefix: &str, d: usize) -> (ParamId, ParamId) {
        (
            self.fill(format!("{prefix}.g"), &[d], 1.0),
            self.fill(format!("{prefix}.b"), &[d], 0.0),
        )
    }

    fn block(&mut self, prefix: &str, d: usize, d_ff: usize) -> BlockParams {
        let ln1 = self.layer_norm(&format!("{prefix}.ln1"), d);
        let (wq, bq) = self.linear(&format!("{prefix}.attn.q"), d, d);
        let (wk, bk) = self.linear(&format!("{prefix}.attn.k"), d, d);
        let (wv, bv) = self.linear(&format!("{prefix}.attn.v"), d, d);
        let (wo, bo) = self.linear(&format!("{prefix}.attn.o"), d, d);
        let ln2 = self.layer_norm(&format!("{prefix}.ln2"), d);
        let ff1 = self.linear(&format!("{prefix}.ff1"), d, d_ff);
        let ff2 = self.linear(&format!("{prefix}.ff2"), d_ff, d);
        BlockParams {
            ln1,
            attn: AttentionParams {
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
            },
            ln2,
            ff1,
            ff2,
        }
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut store = ParamStore::new();
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(format!("model.init_std: {e}")))?;
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal,
        };
        let b = &config.backbone;
        let e = &config.encoder;
        let d = b.d_model;

        let backbone = BackboneParams {
            tok_emb: init.normal("backbone.tok_emb".into(), &[b.vocab_size, d]),
            pos_emb: init.normal("backbone.pos_emb".into(), &[b.max_seq_len, d]),
            blocks: (0..b.n_layers)
                .map(|l| init.block(&format!("backbone.layer{l}"), d, b.d_ff))
                .collect(),
            ln_f: init.layer_norm("backbone.ln_f", d),
            lm_head: init.normal("backbone.lm_head".into(), &[b.vocab_size, d]),
        };

        let du = e.d_user;
        let encoder = EncoderParams {
            item_proj: init.linear("upe.item_proj", 2 * d, du),
            pos_emb: e
                .positions
                .then(|| init.normal("upe.pos_emb".into(), &[e.history_cap.max(1), du])),
            blocks: (0..e.n_layers)
                .map(|l| init.block(&format!("upe.layer{l}"), du, e.d_ff))
                .collect(),
            ln_f: init.layer_norm("upe.ln_f", du),
            pool_query: (e.pooling == Pooling::Attention).then(|| init.normal("upe.pool_query".into(), &[du, 1])),
            cold_start: init.normal("upe.cold_start".into(), &[du]),
            pers_proj: (du != d).then(|| init.normal("upe.pers_proj.w".into(), &[du, d])),
        };

        let da = b.adapter_dim;
        let adapter = AdapterParams {
            proj_v: init.linear("adapter.proj_v", du, da),
            proj_d: init.linear("adapter.proj_d", d, da),
            fuse: (0..b.n_layers)
                .map(|l| {
                    let w1 = init.normal(format!("adapter.layer{l}.w1"), &[d + 2 * da, b.adapter_rank]);
                    let w2 = init.fill(format!("adapter.layer{l}.w2"), &[b.adapter_rank, d], 0.0);
                    (w1, w2)
                })
                .collect(),
        };

        Ok(Model {
            config,
            store,
            backbone,
            encoder,
            adapter,
        })
    }

    pub fn backbone_param_count(&self) -> usize {
        self.store.count_with_prefix("backbone.")
    }

    pub fn adapter_param_count(&self) -> usize {
        self.store.count_with_prefix("adapter.")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adapters_are_lightweight_at_default_config() {
        let m = Model::new(ModelConfig::default(), 0).unwrap();
        let (a, b) = (m.adapter_param_count(), m.backbone_param_count());
        assert!(a * 10 <= b, "adapter {a} vs backbone {b}");
    }

    #[test]
    fn adapter_output_weights_start_at_zero() {
        let m = Model::new(ModelConfig::default(), 3).unwrap();
        for &(w1, w2) in &m.adapter.fuse {
            assert!(m.store.get(w2).value.data().iter().all(|&x| x == 0.0));
            assert!(m.store.get(w1).value.data().iter().any(|&x| x != 0.0));
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = Model::new(ModelConfig::default(), 9).unwrap();
        let b = Model::new(ModelConfig::default(), 9).unwrap();
        let c = Model::new(ModelConfig::default(), 10).unwrap();
        let first = |m: &Model| m.store.get(m.backbone.tok_emb).value.data()[..8].to_vec();
        assert_eq!(first(&a), first(&b));
        assert_ne!(first(&a), first(&c));
    }

    #[test]
    fn validate_rejects_bad_head_split() {
        let mut c = ModelConfig::default();
        c.backbone.n_heads = 5;
        assert!(matches!(Model::new(c, 0), Err(Error::Config(_))));
    }
}
