//! Context injection: the user vector and the article vector are projected
//! to the adapter width, then fused into backbone hidden states through a
//! rank-`r` residual bottleneck:
//!
//! `H'[t] = H[t] + W2 · relu(W1 · [H[t]; P_v; P_d])`
//!
//! `W2` starts at zero, so an untrained adapter is an exact no-op.

use crate::error::Result;
use crate::model::Model;
use crate::tensor::{Graph, Tensor, Var};

/// Projected context vectors, built once per (user, article) and shared by
/// every adapted layer and decoding step.
#[derive(Clone, Copy, Debug)]
pub struct ContextPack {
    pub p_v: Var,
    pub p_d: Var,
}

/// Detached [`ContextPack`] values, for decoding outside the training graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextValues {
    pub p_v: Tensor,
    pub p_d: Tensor,
}

impl ContextValues {
    pub fn from_pack(g: &Graph, pack: &ContextPack) -> Self {
        ContextValues {
            p_v: g.value(pack.p_v).clone(),
            p_d: g.value(pack.p_d).clone(),
        }
    }

    pub fn insert(&self, g: &mut Graph) -> ContextPack {
        ContextPack {
            p_v: g.constant(self.p_v.clone()),
            p_d: g.constant(self.p_d.clone()),
        }
    }
}

impl Model {
    pub fn project_contexts(&self, g: &mut Graph, v_u: Var, e_dc: Var) -> Result<ContextPack> {
        let p = &self.adapter;
        let p_v = affine(g, self, v_u, p.proj_v)?;
        let p_d = affine(g, self, e_dc, p.proj_d)?;
        Ok(ContextPack { p_v, p_d })
    }

    /// Adapts one layer's hidden states. Layers outside the adapter mask pass through.
    pub fn adapt_hidden(&self, g: &mut Graph, h: Var, ctx: &ContextPack, layer: usize) -> Result<Var> {
        if !self.config.backbone.adapts_layer(layer) {
            return Ok(h);
        }
        let (w1, w2) = self.adapter.fuse[layer];
        let seq = g.value(h).shape()[0];
        let ctx_row = g.concat_cols(&[ctx.p_v, ctx.p_d])?;
        let ctx_rows = g.repeat_rows(ctx_row, seq)?;
        let joined = g.concat_cols(&[h, ctx_rows])?;
        let w1 = g.param(&self.store, w1);
        let w2 = g.param(&self.store, w2);
        let z = g.matmul(joined, w1)?;
        let z = g.relu(z);
        let delta = g.matmul(z, w2)?;
        g.add(h, delta)
    }
}

/// `x · W + b` for a rank-1 `x`.
fn affine(g: &mut Graph, m: &Model, x: Var, (w, b): (crate::tensor::ParamId, crate::tensor::ParamId)) -> Result<Var> {
    let n = g.value(x).len();
    let row = g.reshape(x, &[1, n])?;
    let w = g.param(&m.store, w);
    let b = g.param(&m.store, b);
    let y = g.matmul(row, w)?;
    let y = g.add_bias(y, b)?;
    let out = g.value(y).len();
    g.reshape(y, &[out])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny(d: usize, da: usize, r: usize) -> Model {
        let mut c = ModelConfig::default();
        c.backbone.vocab_size = 20;
        c.backbone.d_model = d;
        c.backbone.n_heads = 1;
        c.backbone.d_ff = 4;
        c.backbone.max_seq_len = 8;
        c.backbone.adapter_dim = da;
        c.backbone.adapter_rank = r;
        c.encoder.d_user = d;
        c.encoder.n_heads = 1;
        c.encoder.d_ff = 4;
        Model::new(c, 1).unwrap()
    }

    fn set(m: &mut Model, name: &str, data: &[f64]) {
        let p = m.store.by_name_mut(name).unwrap();
        p.value.data_mut().copy_from_slice(data);
    }

    #[test]
    fn zero_projection_gives_zero_pack() {
        let mut m = tiny(2, 2, 1);
        for n in ["adapter.proj_v.w", "adapter.proj_d.w"] {
            set(&mut m, n, &[0.0; 4]);
        }
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(vec![1.0, -2.0]));
        let e = g.constant(Tensor::vector(vec![3.0, 0.5]));
        let pack = m.project_contexts(&mut g, v, e).unwrap();
        assert_eq!(g.value(pack.p_v).data(), &[0.0, 0.0]);
        assert_eq!(g.value(pack.p_d).data(), &[0.0, 0.0]);
    }

    #[test]
    fn projection_matches_hand_computed_affine_map() {
        let mut m = tiny(2, 2, 1);
        // W = [[1, 2], [3, 4]], b = [0.5, -1]
        set(&mut m, "adapter.proj_v.w", &[1.0, 2.0, 3.0, 4.0]);
        set(&mut m, "adapter.proj_v.b", &[0.5, -1.0]);
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(vec![1.0, -1.0]));
        let e = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let pack = m.project_contexts(&mut g, v, e).unwrap();
        // [1, -1] · W = [1 - 3, 2 - 4] = [-2, -2]; + b
        assert_eq!(g.value(pack.p_v).data(), &[-1.5, -3.0]);

        // linear part scales with the input when the bias is zero
        set(&mut m, "adapter.proj_v.b", &[0.0, 0.0]);
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(vec![2.0, -2.0]));
        let pack = m.project_contexts(&mut g, v, e).unwrap();
        assert_eq!(g.value(pack.p_v).data(), &[-4.0, -4.0]);
    }

    #[test]
    fn zero_w2_is_exact_identity() {
        let m = tiny(2, 1, 2);
        let mut g = Graph::new();
        let h = g.constant(Tensor::matrix(2, 2, vec![0.3, -0.7, 1.1, 2.5]).unwrap());
        let ctx = ContextPack {
            p_v: g.constant(Tensor::vector(vec![4.0])),
            p_d: g.constant(Tensor::vector(vec![-3.0])),
        };
        let out = m.adapt_hidden(&mut g, h, &ctx, 0).unwrap();
        assert_eq!(g.value(out).data(), g.value(h).data());
    }

    #[test]
    fn layer_outside_mask_is_identity() {
        let mut m = tiny(2, 1, 1);
        m.config.backbone.adapter_layers = Some(vec![1]);
        set(&mut m, "adapter.layer0.w2", &[5.0, 5.0]);
        let mut g = Graph::new();
        let h = g.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let ctx = ContextPack {
            p_v: g.constant(Tensor::vector(vec![1.0])),
            p_d: g.constant(Tensor::vector(vec![1.0])),
        };
        let out = m.adapt_hidden(&mut g, h, &ctx, 0).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn rank_one_bottleneck_matches_scalar_gate_by_hand() {
        // d = 2, d_a = 1: input row [h0, h1, p_v, p_d] has 4 entries.
        let mut m = tiny(2, 1, 1);
        set(&mut m, "adapter.layer0.w1", &[1.0, -1.0, 0.5, 2.0]);
        set(&mut m, "adapter.layer0.w2", &[0.25, -2.0]);
        let mut g = Graph::new();
        let h = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 3.0]).unwrap());
        let ctx = ContextPack {
            p_v: g.constant(Tensor::vector(vec![2.0])),
            p_d: g.constant(Tensor::vector(vec![-0.5])),
        };
        let out = m.adapt_hidden(&mut g, h, &ctx, 0).unwrap();
        // row 0: gate = relu(1 - 0 + 1 - 1) = 1   -> [1 + 0.25, 0 - 2]
        // row 1: gate = relu(0 - 3 + 1 - 1) = 0   -> unchanged
        assert_eq!(g.value(out).data(), &[1.25, -2.0, 0.0, 3.0]);
    }
}
