//! Joint objective and training loop.
//!
//! `L_total = L_gen + λ_fact · L_fact + λ_pers · L_pers`, where `L_gen` is
//! teacher-forced cross-entropy on the reference headline, `L_fact` the
//! segment contrastive loss and `L_pers` the negative cosine between the
//! headline embedding and the user vector. Headline segments and the
//! headline embedding are read from the states that emit the headline
//! tokens, not from the states that consume them.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{ContextPack, ContextValues};
use crate::backbone::{body_positions, emission_positions, mean_over, teacher_forced_sequence};
use crate::data::{TokenId, UserRecord, EOS, PAD};
use crate::error::{Error, Result};
use crate::fact::{contrastive_loss, mine_positive, select_negatives, window_spans, FactConfig, Negative};
use crate::model::Model;
use crate::optim::{clip_grad_norm, AdamWConfig, OptimizerState};
use crate::tensor::{Graph, Tensor, Var};

/// Component switches for ablation runs. Everything is on by default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub upe: bool,
    pub cia: bool,
    pub fcrm: bool,
    pub pers: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            upe: true,
            cia: true,
            fcrm: true,
            pers: true,
        }
    }
}

pub const VARIANTS: [&str; 5] = ["full", "no-upe", "no-cia", "no-fcrm", "no-pers"];

impl Ablation {
    /// Parses a comma-separated list of components to switch off, e.g. `fcrm,pers`.
    pub fn disabling(list: &str) -> Result<Ablation> {
        let mut a = Ablation::default();
        for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "none" => {}
                "upe" => a.upe = false,
                "cia" => a.cia = false,
                "fcrm" => a.fcrm = false,
                "pers" => a.pers = false,
                other => return Err(Error::Config(format!("unknown ablation component `{other}`"))),
            }
        }
        Ok(a)
    }

    pub fn variant(name: &str) -> Result<Ablation> {
        match name {
            "full" => Ok(Ablation::default()),
            _ => match name.strip_prefix("no-") {
                Some(c) if c != "none" => Ablation::disabling(c),
                _ => Err(Error::Config(format!("unknown variant `{name}`"))),
            },
        }
    }

    /// Disabled components as a comma-separated list (`none` when all are on).
    pub fn describe(&self) -> String {
        let off: Vec<&str> = [
            ("upe", self.upe),
            ("cia", self.cia),
            ("fcrm", self.fcrm),
            ("pers", self.pers),
        ]
        .into_iter()
        .filter(|&(_, on)| !on)
        .map(|(n, _)| n)
        .collect();
        if off.is_empty() {
            "none".into()
        } else {
            off.join(",")
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub fact: f64,
    pub pers: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { fact: 0.5, pers: 0.2 }
    }
}

impl LossWeights {
    /// Weights after ablation: a switched-off term gets weight zero.
    pub fn effective(&self, ablation: &Ablation) -> LossWeights {
        LossWeights {
            fact: if ablation.fcrm { self.fact } else { 0.0 },
            pers: if ablation.pers { self.pers } else { 0.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fact >= 0.0 && self.pers >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got fact={} pers={}",
                self.fact, self.pers
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    #[serde(rename = "L_gen")]
    pub gen: f64,
    #[serde(rename = "L_fact")]
    pub fact: f64,
    #[serde(rename = "L_pers")]
    pub pers: f64,
    #[serde(rename = "L_total")]
    pub total: f64,
}

pub fn total_loss(gen: f64, fact: f64, pers: f64, w: &LossWeights) -> LossBundle {
    LossBundle {
        gen,
        fact,
        pers,
        total: gen + w.fact * fact + w.pers * pers,
    }
}

/// Token-mean cross-entropy over non-pad targets.
pub fn generation_loss(g: &mut Graph, logits: Var, targets: &[TokenId]) -> Result<Var> {
    g.cross_entropy(logits, targets, PAD)
}

pub fn personalization_loss(g: &mut Graph, emb: Var, user: Var) -> Result<Var> {
    let c = g.cosine(emb, user)?;
    Ok(g.scale(c, -1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub weights: LossWeights,
    pub ablation: Ablation,
    pub clip_norm: f64,
    pub fact: FactConfig,
    /// Language-model warm-up on bodies, then train with the backbone frozen.
    pub two_phase: bool,
    pub phase1_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            seed: 0,
            weights: LossWeights::default(),
            ablation: Ablation::default(),
            clip_norm: 1.0,
            fact: FactConfig::default(),
            two_phase: false,
            phase1_epochs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossBundle,
    pub lambda_fact: f64,
    pub lambda_pers: f64,
}

impl EpochLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log serializes")
    }
}

pub fn log_to_jsonl(log: &[EpochLog]) -> String {
    log.iter().map(|l| l.to_json() + "\n").collect()
}

/// SplitMix64 over a sequence of words, for deriving independent streams
/// from one seed.
pub fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in std::iter::once(&0).chain(parts) {
        z = z.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

impl Model {
    /// `v_u`, or the cold-start vector when the encoder is ablated or the history is empty.
    pub fn user_vector(&self, g: &mut Graph, record: &UserRecord, ablation: &Ablation) -> Result<Var> {
        if ablation.upe {
            self.user_preference(g, &record.history)
        } else {
            Ok(self.cold_start(g))
        }
    }

    /// User vector and, when adapters are on, the projected context pack.
    pub fn context_pack(
        &self,
        g: &mut Graph,
        record: &UserRecord,
        ablation: &Ablation,
    ) -> Result<(Var, Option<ContextPack>)> {
        let v_u = self.user_vector(g, record, ablation)?;
        if !ablation.cia || !self.config.backbone.adapter_enabled {
            return Ok((v_u, None));
        }
        let e_dc = self.encode_article(g, &record.current.body)?;
        Ok((v_u, Some(self.project_contexts(g, v_u, e_dc)?)))
    }

    pub fn context_values(&self, record: &UserRecord, ablation: &Ablation) -> Result<Option<ContextValues>> {
        let mut g = Graph::new();
        let (_, pack) = self.context_pack(&mut g, record, ablation)?;
        Ok(pack.map(|p| ContextValues::from_pack(&g, &p)))
    }

    /// Greedy headline for one record.
    pub fn generate_for(&self, record: &UserRecord, ablation: &Ablation, max_len: usize) -> Result<Vec<TokenId>> {
        let ctx = self.context_values(record, ablation)?;
        self.generate(&record.current.body, ctx.as_ref(), max_len)
    }
}

/// One example's teacher-forced pass, kept for the loss terms.
struct Pass {
    v_u: Var,
    states: Var,
    gen: Var,
    n_targets: usize,
    body_segments: Vec<Range<usize>>,
    headline_segments: Vec<Range<usize>>,
}

fn example_pass(model: &Model, g: &mut Graph, record: &UserRecord, cfg: &TrainConfig) -> Result<Pass> {
    let body = &record.current.body;
    let head = &record.reference;
    if head.is_empty() {
        return Err(Error::Degenerate("empty reference headline"));
    }
    let (v_u, pack) = model.context_pack(g, record, &cfg.ablation)?;
    let (input, targets) = teacher_forced_sequence(body, head);
    let hs = model.forward(g, &input, pack.as_ref(), true)?;
    let gen = generation_loss(g, hs.logits.expect("requested"), &targets)?;
    let offset = body_positions(body.len()).start;
    let body_segments = window_spans(&record.current.body_sentences, cfg.fact.window, cfg.fact.stride)
        .into_iter()
        .filter(|r| r.end <= body.len())
        .map(|r| r.start + offset..r.end + offset)
        .collect();
    let hp = emission_positions(body.len(), head.len());
    let headline_segments = window_spans(&[0..head.len()], cfg.fact.window, cfg.fact.stride)
        .into_iter()
        .map(|r| r.start + hp.start..r.end + hp.start)
        .collect();
    Ok(Pass {
        v_u,
        states: hs.final_states,
        gen,
        n_targets: head.len() + 1,
        body_segments,
        headline_segments,
    })
}

fn segment_embeddings(g: &mut Graph, states: Var, spans: &[Range<usize>]) -> Result<Vec<Var>> {
    spans.iter().map(|r| mean_over(g, states, r.clone())).collect()
}

/// Contrastive term for one example, or `None` when the body has no segment.
fn fact_term(
    g: &mut Graph,
    anchors: &[Var],
    body: &[Var],
    foreign: &[Var],
    cfg: &FactConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Var>> {
    if anchors.is_empty() || body.is_empty() {
        return Ok(None);
    }
    let body_vals: Vec<Vec<f64>> = body.iter().map(|&v| g.value(v).data().to_vec()).collect();
    // anchor whose best supporting segment is strongest
    let mut best: Option<(usize, usize, f64)> = None;
    for (a, &anchor) in anchors.iter().enumerate() {
        let av = g.value(anchor).data();
        let p = mine_positive(av, &body_vals)?;
        let s = crate::fact::cosine_values(av, &body_vals[p]);
        if best.is_none_or(|(_, _, bs)| s > bs) {
            best = Some((a, p, s));
        }
    }
    let (a, p, _) = best.expect("anchors non-empty");
    let anchor_vals = g.value(anchors[a]).data().to_vec();
    let negs = select_negatives(&anchor_vals, &body_vals, p, foreign.len(), cfg.negatives, rng);
    if negs.is_empty() {
        return Ok(None);
    }
    let neg_vars: Vec<Var> = negs
        .iter()
        .map(|n| match *n {
            Negative::Foreign(i) => foreign[i],
            Negative::Body(i) => body[i],
        })
        .collect();
    contrastive_loss(g, anchors[a], body[p], &neg_vars, cfg.tau).map(Some)
}

/// Loss terms for one batch. `gen`, `fact` and `pers` are graph nodes; terms
/// with zero effective weight are still evaluated so they can be logged.
struct BatchLosses {
    gen: Var,
    fact: Var,
    pers: Var,
    total: Var,
}

fn batch_losses(
    model: &Model,
    g: &mut Graph,
    records: &[&UserRecord],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<BatchLosses> {
    let passes = records
        .iter()
        .map(|r| example_pass(model, g, r, cfg))
        .collect::<Result<Vec<_>>>()?;
    let n_tokens: usize = passes.iter().map(|p| p.n_targets).sum();

    let mut gen_terms = Vec::with_capacity(passes.len());
    for p in &passes {
        gen_terms.push(g.scale(p.gen, p.n_targets as f64 / n_tokens as f64));
    }
    let gen = sum_vars(g, &gen_terms)?;

    let mut pers_terms = Vec::with_capacity(passes.len());
    for (p, r) in passes.iter().zip(records) {
        let hp = emission_positions(r.current.body.len(), r.reference.len());
        let emb = mean_over(g, p.states, hp)?;
        let user = model.user_in_backbone_space(g, p.v_u)?;
        match personalization_loss(g, emb, user) {
            Ok(l) => pers_terms.push(l),
            Err(Error::Degenerate(_)) => {
                log::warn!(
                    "zero-norm vector in personalization loss for user {}; term set to 0",
                    r.user_id
                );
            }
            Err(e) => return Err(e),
        }
    }
    let pers = mean_vars(g, &pers_terms)?;

    let body_embs = passes
        .iter()
        .map(|p| segment_embeddings(g, p.states, &p.body_segments))
        .collect::<Result<Vec<_>>>()?;
    let mut fact_terms = Vec::new();
    for (i, p) in passes.iter().enumerate() {
        let anchors = segment_embeddings(g, p.states, &p.headline_segments)?;
        let foreign: Vec<Var> = body_embs
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .flat_map(|(_, e)| e.iter().copied())
            .collect();
        if let Some(t) = fact_term(g, &anchors, &body_embs[i], &foreign, &cfg.fact, rng)? {
            fact_terms.push(t);
        }
    }
    let fact = mean_vars(g, &fact_terms)?;

    let w = cfg.weights.effective(&cfg.ablation);
    let mut total = gen;
    if w.fact != 0.0 {
        let t = g.scale(fact, w.fact);
        total = g.add(total, t)?;
    }
    if w.pers != 0.0 {
        let t = g.scale(pers, w.pers);
        total = g.add(total, t)?;
    }
    Ok(BatchLosses { gen, fact, pers, total })
}

fn sum_vars(g: &mut Graph, xs: &[Var]) -> Result<Var> {
    let mut acc = match xs.first() {
        Some(&x) => x,
        None => return Ok(g.constant(Tensor::scalar(0.0))),
    };
    for &x in &xs[1..] {
        acc = g.add(acc, x)?;
    }
    Ok(acc)
}

fn mean_vars(g: &mut Graph, xs: &[Var]) -> Result<Var> {
    let s = sum_vars(g, xs)?;
    Ok(if xs.len() > 1 {
        g.scale(s, 1.0 / xs.len() as f64)
    } else {
        s
    })
}

/// Loss bundle for a fixed batch without updating the model.
pub fn evaluate_batch_losses(model: &Model, records: &[&UserRecord], cfg: &TrainConfig) -> Result<LossBundle> {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[2]));
    let l = batch_losses(model, &mut g, records, cfg, &mut rng)?;
    Ok(LossBundle {
        gen: g.scalar(l.gen),
        fact: g.scalar(l.fact),
        pers: g.scalar(l.pers),
        total: g.scalar(l.total),
    })
}

/// Total-loss graph for one batch, for gradient checking.
pub fn batch_total_loss(model: &Model, g: &mut Graph, records: &[&UserRecord], cfg: &TrainConfig) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[2]));
    Ok(batch_losses(model, g, records, cfg, &mut rng)?.total)
}

fn check_finite(x: f64, epoch: usize, batch: usize) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Divergence { epoch, batch })
    }
}

fn as_divergence(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::Divergence { epoch, batch },
        other => other,
    }
}

/// Next-token pre-training on bodies, `[BOS] body [EOS]`.
fn language_model_phase(model: &mut Model, records: &[UserRecord], cfg: &TrainConfig) -> Result<()> {
    let mut opt = OptimizerState::new(cfg.optimizer.clone(), &model.store);
    let max = model.config.backbone.max_seq_len;
    for epoch in 0..cfg.phase1_epochs {
        let order = epoch_order(records.len(), cfg.seed, 1000 + epoch as u64);
        for (b, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let mut g = Graph::new();
            let mut terms = Vec::new();
            for &i in chunk {
                let body = &records[i].current.body;
                if body.is_empty() {
                    continue;
                }
                let mut input = vec![crate::data::BOS];
                input.extend(body.iter().take(max - 1));
                let mut targets = input[1..].to_vec();
                targets.push(EOS);
                let hs = model.forward(&mut g, &input, None, true)?;
                terms.push(generation_loss(&mut g, hs.logits.expect("requested"), &targets)?);
            }
            if terms.is_empty() {
                continue;
            }
            let loss = mean_vars(&mut g, &terms)?;
            check_finite(g.scalar(loss), epoch, b)?;
            model.store.zero_grad();
            g.backward(loss, &mut model.store)?;
            clip_grad_norm(&mut model.store, cfg.clip_norm);
            opt.step_available(&mut model.store);
        }
    }
    model.store.zero_grad();
    Ok(())
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[1, epoch]));
    order.shuffle(&mut rng);
    order
}

/// Trains `model` in place and returns the per-epoch log.
pub fn train(model: &mut Model, records: &[UserRecord], cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    train_with(model, records, cfg, |_, _| {})
}

/// [`train`] with a callback after every optimizer step, given the global step count.
pub fn train_with<F>(
    model: &mut Model,
    records: &[UserRecord],
    cfg: &TrainConfig,
    mut on_step: F,
) -> Result<Vec<EpochLog>>
where
    F: FnMut(&Model, usize),
{
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("train.batch_size must be >= 1".into()));
    }
    cfg.weights.validate()?;
    if cfg.fact.tau <= 0.0 {
        return Err(Error::Config(format!(
            "train.tau must be positive, got {}",
            cfg.fact.tau
        )));
    }
    if cfg.two_phase {
        language_model_phase(model, records, cfg)?;
        model.store.set_trainable_with_prefix("backbone.", false);
    }
    let weights = cfg.weights.effective(&cfg.ablation);
    let mut opt = OptimizerState::new(cfg.optimizer.clone(), &model.store);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(records.len(), cfg.seed, epoch as u64);
        let (mut sg, mut sf, mut sp) = (0.0, 0.0, 0.0);
        let mut n_batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&UserRecord> = chunk.iter().map(|&i| &records[i]).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[2, epoch as u64, b as u64]));
            let mut g = Graph::new();
            let l = batch_losses(model, &mut g, &batch, cfg, &mut rng).map_err(|e| as_divergence(e, epoch, b))?;
            check_finite(g.scalar(l.total), epoch, b)?;
            sg += g.scalar(l.gen);
            sf += g.scalar(l.fact);
            sp += g.scalar(l.pers);
            n_batches += 1;
            model.store.zero_grad();
            g.backward(l.total, &mut model.store)?;
            clip_grad_norm(&mut model.store, cfg.clip_norm);
            opt.step_available(&mut model.store);
            step += 1;
            on_step(model, step);
        }
        let n = n_batches as f64;
        let losses = total_loss(sg / n, sf / n, sp / n, &weights);
        log::info!(
            "epoch {epoch}: L_gen {:.4} L_fact {:.4} L_pers {:.4} L_total {:.4}",
            losses.gen,
            losses.fact,
            losses.pers,
            losses.total
        );
        log.push(EpochLog {
            epoch,
            losses,
            lambda_fact: weights.fact,
            lambda_pers: weights.pers,
        });
    }
    model.store.zero_grad();
    if cfg.two_phase {
        model.store.set_trainable_with_prefix("backbone.", true);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{encode_record, Caps, RawArticle, RawRecord, Vocab};
    use crate::model::ModelConfig;

    #[test]
    fn total_loss_identity() {
        let b = total_loss(2.0, 1.0, -0.5, &LossWeights::default());
        assert!((b.total - 2.4).abs() < 1e-12);
        let b = total_loss(1.7, 3.0, -0.9, &LossWeights { fact: 0.0, pers: 0.0 });
        assert_eq!(b.total, 1.7);
    }

    #[test]
    fn ablation_parsing() {
        assert_eq!(Ablation::disabling("").unwrap(), Ablation::default());
        let a = Ablation::disabling("fcrm, pers").unwrap();
        assert!(!a.fcrm && !a.pers && a.upe && a.cia);
        assert_eq!(a.describe(), "fcrm,pers");
        assert!(Ablation::disabling("bogus").is_err());
        for v in VARIANTS {
            let a = Ablation::variant(v).unwrap();
            assert_eq!(a.describe(), v.strip_prefix("no-").unwrap_or("none"));
        }
        assert!(Ablation::variant("no-none").is_err());
        let w = LossWeights::default().effective(&Ablation::variant("no-fcrm").unwrap());
        assert_eq!((w.fact, w.pers), (0.0, 0.2));
    }

    #[test]
    fn personalization_loss_cases() {
        let mut g = Graph::new();
        let mut v = |x: Vec<f64>| g.constant(Tensor::vector(x));
        let (a, b, c, d) = (
            v(vec![1.0, 0.0]),
            v(vec![1.0, 1.0]),
            v(vec![0.0, 2.0]),
            v(vec![0.0, 0.0]),
        );
        let same = personalization_loss(&mut g, b, b).unwrap();
        assert!((g.scalar(same) + 1.0).abs() < 1e-12);
        let orth = personalization_loss(&mut g, a, c).unwrap();
        assert_eq!(g.scalar(orth), 0.0);
        let diag = personalization_loss(&mut g, a, b).unwrap();
        assert!((g.scalar(diag) + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
        assert!(matches!(personalization_loss(&mut g, a, d), Err(Error::Degenerate(_))));
    }

    #[test]
    fn generation_loss_oracles() {
        let mut g = Graph::new();
        let uniform = g.constant(Tensor::zeros(&[3, 8]));
        let l = generation_loss(&mut g, uniform, &[5, PAD, 7]).unwrap();
        assert!((g.scalar(l) - 8f64.ln()).abs() < 1e-12);

        let mut peaked = vec![0.0; 16];
        peaked[5] = 60.0;
        peaked[8 + 6] = 60.0;
        let p = g.constant(Tensor::matrix(2, 8, peaked.clone()).unwrap());
        let l = generation_loss(&mut g, p, &[5, 6]).unwrap();
        assert!(g.scalar(l) < 1e-20);

        let logits: Vec<f64> = (0..24).map(|i| ((i * 5) % 7) as f64 * 0.3 - 0.4).collect();
        let t = g.constant(Tensor::matrix(3, 8, logits.clone()).unwrap());
        let targets = [1, 4, PAD];
        let l = generation_loss(&mut g, t, &targets).unwrap();
        let mut brute = 0.0;
        for (r, &tg) in targets.iter().enumerate().take(2) {
            let row = &logits[r * 8..(r + 1) * 8];
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            brute -= (row[tg].exp() / z).ln();
        }
        assert!((g.scalar(l) - brute / 2.0).abs() < 1e-12);
    }

    #[test]
    fn seed_mixing_separates_streams() {
        assert_eq!(mix_seed(3, &[1, 2]), mix_seed(3, &[1, 2]));
        assert_ne!(mix_seed(3, &[1, 2]), mix_seed(3, &[2, 1]));
        assert_ne!(mix_seed(3, &[]), mix_seed(4, &[]));
    }

    pub(crate) fn tiny_records() -> (Vec<UserRecord>, Vocab) {
        let raws: Vec<RawRecord> = (0..4)
            .map(|u| RawRecord {
                user_id: format!("u{u}"),
                history: (0..2)
                    .map(|h| RawArticle {
                        headline: format!("k{u} t{h} news"),
                        body: format!("w{h} w{u} report. more w{u}."),
                    })
                    .collect(),
                current: RawArticle {
                    headline: String::new(),
                    body: format!("w{u} a b c. d e w{u}. f g."),
                },
                reference_headline: format!("k{u} w{u} a b"),
            })
            .collect();
        let vocab = Vocab::build(raws.iter().flat_map(RawRecord::texts), 100).unwrap();
        let recs = raws.iter().map(|r| encode_record(r, &vocab, Caps::default())).collect();
        (recs, vocab)
    }

    fn tiny_model(vocab: &Vocab) -> Model {
        let mut c = ModelConfig::default();
        c.backbone.vocab_size = vocab.len();
        c.backbone.d_model = 8;
        c.backbone.n_heads = 2;
        c.backbone.d_ff = 16;
        c.backbone.max_seq_len = 32;
        c.backbone.adapter_dim = 4;
        c.backbone.adapter_rank = 2;
        c.encoder.d_user = 8;
        c.encoder.n_heads = 2;
        c.encoder.d_ff = 16;
        c.encoder.n_layers = 1;
        c.init_std = 0.2;
        Model::new(c, 1).unwrap()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 2,
            optimizer: AdamWConfig {
                lr: 1e-2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn logged_total_is_exact_identity() {
        let (recs, vocab) = tiny_records();
        let mut m = tiny_model(&vocab);
        let log = train(&mut m, &recs, &quick_cfg()).unwrap();
        assert_eq!(log.len(), 3);
        for e in &log {
            let back: EpochLog = serde_json::from_str(&e.to_json()).unwrap();
            let l = back.losses;
            assert_eq!(l.total, l.gen + back.lambda_fact * l.fact + back.lambda_pers * l.pers);
        }
    }

    #[test]
    fn ablation_off_equals_zero_weight() {
        let (recs, vocab) = tiny_records();
        let run = |cfg: TrainConfig| {
            let mut m = tiny_model(&vocab);
            let log = train(&mut m, &recs, &cfg).unwrap();
            (m.store.iter().map(|p| p.value.data().to_vec()).collect::<Vec<_>>(), log)
        };
        let mut off = quick_cfg();
        off.ablation.fcrm = false;
        let mut zero = quick_cfg();
        zero.weights.fact = 0.0;
        assert_eq!(run(off), run(zero));

        let mut off = quick_cfg();
        off.ablation.pers = false;
        let mut zero = quick_cfg();
        zero.weights.pers = 0.0;
        assert_eq!(run(off), run(zero));
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (recs, vocab) = tiny_records();
        let mut cfg = quick_cfg();
        cfg.epochs = 25;
        let mut a = tiny_model(&vocab);
        let la = train(&mut a, &recs, &cfg).unwrap();
        let mut b = tiny_model(&vocab);
        let lb = train(&mut b, &recs, &cfg).unwrap();
        assert_eq!(la, lb);
        assert!(la.last().unwrap().losses.gen < la[0].losses.gen);
    }

    #[test]
    fn every_component_gets_gradient() {
        let (mut recs, vocab) = tiny_records();
        recs[0].history.clear();
        let mut m = tiny_model(&vocab);
        let mut cfg = quick_cfg();
        cfg.epochs = 1;
        train(&mut m, &recs, &cfg).unwrap();
        let batch: Vec<&UserRecord> = recs.iter().collect();
        let mut g = Graph::new();
        let loss = batch_total_loss(&m, &mut g, &batch, &cfg).unwrap();
        m.store.zero_grad();
        g.backward(loss, &mut m.store).unwrap();
        for p in m.store.iter() {
            let nonzero = p.grad.as_ref().is_some_and(|gr| gr.iter().any(|&x| x != 0.0));
            assert!(nonzero, "{} received no gradient", p.name);
        }
    }

    #[test]
    fn two_phase_freezes_backbone() {
        let (recs, vocab) = tiny_records();
        let mut m = tiny_model(&vocab);
        let mut cfg = quick_cfg();
        cfg.two_phase = true;
        cfg.epochs = 1;
        let probe = |m: &Model| m.store.by_name("backbone.lm_head").unwrap().value.data().to_vec();
        let before = probe(&m);
        let mut after_phase1 = None;
        train_with(&mut m, &recs, &cfg, |m, _| {
            after_phase1.get_or_insert_with(|| probe(m));
        })
        .unwrap();
        let after_phase1 = after_phase1.unwrap();
        assert_ne!(before, after_phase1);
        assert_eq!(after_phase1, probe(&m));
        assert!(m.store.iter().all(|p| p.trainable));
    }

    #[test]
    fn empty_dataset_and_bad_weights_are_rejected() {
        let (recs, vocab) = tiny_records();
        let mut m = tiny_model(&vocab);
        assert!(matches!(train(&mut m, &[], &quick_cfg()), Err(Error::EmptyCorpus)));
        let mut cfg = quick_cfg();
        cfg.weights.fact = -1.0;
        assert!(matches!(train(&mut m, &recs, &cfg), Err(Error::Config(_))));
    }
}
