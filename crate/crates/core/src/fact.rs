//! Segment-level contrastive objective for factual consistency.
//!
//! A headline segment (the anchor) is pulled towards the body segment that
//! supports it best and pushed away from segments of other articles and
//! from the body segments least related to it.

use std::ops::Range;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentSource {
    Generated,
    Body,
    Foreign,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    /// Token span within its source sequence.
    pub span: Range<usize>,
    pub source: SegmentSource,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FactConfig {
    pub window: usize,
    pub stride: usize,
    pub tau: f64,
    pub negatives: usize,
}

impl Default for FactConfig {
    fn default() -> Self {
        FactConfig {
            window: 10,
            stride: 5,
            tau: 0.1,
            negatives: 4,
        }
    }
}

/// Splits sentence spans longer than `window` into sliding windows.
pub fn window_spans(sentences: &[Range<usize>], window: usize, stride: usize) -> Vec<Range<usize>> {
    let window = window.max(1);
    let stride = stride.max(1);
    let mut out = Vec::new();
    for s in sentences.iter().filter(|s| !s.is_empty()) {
        if s.len() <= window {
            out.push(s.clone());
            continue;
        }
        let mut start = s.start;
        loop {
            let end = (start + window).min(s.end);
            out.push(start..end);
            if end == s.end {
                break;
            }
            start += stride;
        }
    }
    out
}

/// Word segments of raw text: split at `.`, `!`, `?`, then windowed.
pub fn segment_text(text: &str, window: usize, stride: usize) -> Vec<Vec<String>> {
    let words = crate::data::words(text);
    window_spans(&crate::data::sentence_spans(text), window, stride)
        .into_iter()
        .map(|r| words[r].to_vec())
        .collect()
}

/// Tagged segments over a token sequence with the given sentence spans.
pub fn segment(sentences: &[Range<usize>], source: SegmentSource, cfg: &FactConfig) -> Vec<Segment> {
    window_spans(sentences, cfg.window, cfg.stride)
        .into_iter()
        .map(|span| Segment { span, source })
        .collect()
}

pub fn cosine_values(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

/// Index of the body segment most similar to `anchor`; the earliest wins ties.
pub fn mine_positive(anchor: &[f64], body: &[Vec<f64>]) -> Result<usize> {
    if body.is_empty() {
        return Err(Error::Degenerate("positive mining over an empty body"));
    }
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (i, seg) in body.iter().enumerate() {
        let s = cosine_values(anchor, seg);
        if s > best_sim {
            best = i;
            best_sim = s;
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Negative {
    Foreign(usize),
    Body(usize),
}

/// `ceil(k/2)` foreign negatives drawn without replacement plus `floor(k/2)`
/// body segments least similar to the anchor. The positive is never chosen.
pub fn sample_negatives<R: Rng>(
    anchor: &[f64],
    body: &[Vec<f64>],
    positive: usize,
    foreign_pool: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Negative>> {
    if k == 0 {
        return Err(Error::Config("train.negatives must be >= 1".into()));
    }
    let needed_foreign = k.div_ceil(2);
    let needed_body = k / 2;
    let have_body = body.len().saturating_sub(usize::from(positive < body.len()));
    if foreign_pool < needed_foreign || have_body < needed_body {
        return Err(Error::Shortfall {
            needed_foreign,
            needed_body,
            have_foreign: foreign_pool,
            have_body,
        });
    }
    Ok(select_negatives(anchor, body, positive, foreign_pool, k, rng))
}

/// Like [`sample_negatives`], but shrinks either share to what is available
/// instead of failing. May return fewer than `k` negatives, or none.
pub fn select_negatives<R: Rng>(
    anchor: &[f64],
    body: &[Vec<f64>],
    positive: usize,
    foreign_pool: usize,
    k: usize,
    rng: &mut R,
) -> Vec<Negative> {
    let have_body = body.len().saturating_sub(usize::from(positive < body.len()));
    let n_foreign = k.div_ceil(2).min(foreign_pool);
    let n_body = (k / 2).min(have_body);
    if n_foreign < k.div_ceil(2) || n_body < k / 2 {
        log::debug!("negative shortfall: {n_foreign} foreign + {n_body} body of {k}");
    }
    let mut out: Vec<Negative> = index::sample(rng, foreign_pool, n_foreign)
        .into_iter()
        .map(Negative::Foreign)
        .collect();
    out.extend(
        least_similar(anchor, body, positive, n_body)
            .into_iter()
            .map(Negative::Body),
    );
    out
}

/// The `n` body segments least similar to `anchor`, skipping `exclude`.
/// Ties go to the earlier segment.
pub fn least_similar(anchor: &[f64], body: &[Vec<f64>], exclude: usize, n: usize) -> Vec<usize> {
    let mut ranked: Vec<(f64, usize)> = body
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != exclude)
        .map(|(i, s)| (cosine_values(anchor, s), i))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    ranked.into_iter().take(n).map(|(_, i)| i).collect()
}

/// InfoNCE over precomputed similarities, positive first.
pub fn info_nce(sims: &[f64], tau: f64) -> Result<f64> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Config(format!("train.tau must be positive, got {tau}")));
    }
    if sims.len() < 2 {
        return Err(Error::Degenerate("contrastive loss needs at least one negative"));
    }
    let scaled: Vec<f64> = sims.iter().map(|s| s / tau).collect();
    Ok(crate::tensor::log_sum_exp(&scaled) - scaled[0])
}

/// Graph form of [`info_nce`] over a rank-1 similarity vector whose first
/// entry is the positive.
pub fn info_nce_graph(g: &mut Graph, sims: Var, tau: f64) -> Result<Var> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Config(format!("train.tau must be positive, got {tau}")));
    }
    let n = g.value(sims).len();
    if n < 2 {
        return Err(Error::Degenerate("contrastive loss needs at least one negative"));
    }
    let row = g.reshape(sims, &[1, n])?;
    let logits = g.scale(row, 1.0 / tau);
    g.cross_entropy(logits, &[0], usize::MAX)
}

/// Differentiable contrastive loss for one anchor. Gradients flow through
/// the anchor, the positive and every negative.
pub fn contrastive_loss(g: &mut Graph, anchor: Var, positive: Var, negatives: &[Var], tau: f64) -> Result<Var> {
    if negatives.is_empty() {
        return Err(Error::Degenerate("contrastive loss needs at least one negative"));
    }
    let mut sims = Vec::with_capacity(negatives.len() + 1);
    for &other in std::iter::once(&positive).chain(negatives) {
        let c = g.cosine(anchor, other)?;
        sims.push(g.reshape(c, &[1])?);
    }
    let row = g.concat_cols(&sims)?;
    info_nce_graph(g, row, tau)
}
