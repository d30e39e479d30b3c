//! End-to-end runs: vocabulary, model construction, training, generation
//! and scoring, plus the ablation and sweep harnesses built on them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::backbone::{emission_positions, teacher_forced_sequence, transformer_block};
use crate::config::RunConfig;
use crate::data::{encode_record, vocab_from_records, RawRecord, UserRecord, Vocab, RESERVED};
use crate::error::{Error, Result};
use crate::fact::contrastive_loss;
use crate::gradcheck::{uniform, GradCheck, GradCheckReport};
use crate::metrics::{evaluate_generations, MetricsReport};
use crate::model::{Model, Pooling};
use crate::synth::generate_synthetic_corpus;
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::train::{batch_total_loss, mix_seed, personalization_loss, train, Ablation, EpochLog};

#[derive(Clone, Debug)]
pub struct Prepared {
    pub vocab: Vocab,
    pub train: Vec<UserRecord>,
    pub eval: Vec<UserRecord>,
}

/// Builds the vocabulary from the training records and encodes both splits.
pub fn prepare(cfg: &RunConfig, train_raw: &[RawRecord], eval_raw: &[RawRecord]) -> Result<Prepared> {
    if train_raw.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let cap = cfg.model.backbone.vocab_size.saturating_sub(RESERVED.len());
    let vocab = vocab_from_records(train_raw, cap)?;
    let encode = |rs: &[RawRecord]| rs.iter().map(|r| encode_record(r, &vocab, cfg.caps)).collect();
    Ok(Prepared {
        train: encode(train_raw),
        eval: encode(eval_raw),
        vocab,
    })
}

/// Fresh model sized to `vocab`.
pub fn build_model(cfg: &RunConfig, vocab: &Vocab) -> Result<Model> {
    let mut mc = cfg.model.clone();
    mc.backbone.vocab_size = vocab.len();
    mc.encoder.history_cap = cfg.caps.history;
    Model::new(mc, cfg.seed)
}

pub fn generate_all(
    model: &Model,
    vocab: &Vocab,
    records: &[UserRecord],
    ablation: &Ablation,
    max_len: usize,
) -> Result<Vec<Vec<String>>> {
    records
        .iter()
        .map(|r| Ok(vocab.decode_words(&model.generate_for(r, ablation, max_len)?)))
        .collect()
}

pub fn evaluate(
    model: &Model,
    vocab: &Vocab,
    records: &[UserRecord],
    ablation: &Ablation,
    cfg: &RunConfig,
) -> Result<MetricsReport> {
    let gens = generate_all(model, vocab, records, ablation, cfg.gen_max_len)?;
    evaluate_generations(&gens, records, &cfg.proxy)
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub report: MetricsReport,
}

/// Trains on `data.train` and scores greedy generations on `data.eval`.
pub fn train_and_evaluate(cfg: &RunConfig, data: &Prepared) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut model = build_model(cfg, &data.vocab)?;
    let log = train(&mut model, &data.train, &cfg.train)?;
    let report = evaluate(&model, &data.vocab, &data.eval, &cfg.train.ablation, cfg)?;
    Ok(RunOutcome { model, log, report })
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    #[serde(flatten)]
    pub report: MetricsReport,
}

pub fn ablate<S: AsRef<str>>(cfg: &RunConfig, data: &Prepared, variants: &[S]) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(Error::Config("no ablation variants given".into()));
    }
    variants
        .iter()
        .map(|v| {
            let mut c = cfg.clone();
            c.train.ablation = Ablation::variant(v.as_ref())?;
            log::info!("ablation variant {}", v.as_ref());
            Ok(AblationRow {
                variant: v.as_ref().to_string(),
                report: train_and_evaluate(&c, data)?.report,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    LambdaFact,
    LambdaPers,
    HistoryCap,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<SweepAxis> {
        match s {
            "lambda_fact" | "train.lambda_fact" => Ok(SweepAxis::LambdaFact),
            "lambda_pers" | "train.lambda_pers" => Ok(SweepAxis::LambdaPers),
            "history_cap" | "data.history_cap" => Ok(SweepAxis::HistoryCap),
            _ => Err(Error::Config(format!(
                "unknown sweep axis `{s}` (expected lambda_fact, lambda_pers or history_cap)"
            ))),
        }
    }

    pub fn key(&self) -> &'static str {
        match self {
            SweepAxis::LambdaFact => "train.lambda_fact",
            SweepAxis::LambdaPers => "train.lambda_pers",
            SweepAxis::HistoryCap => "data.history_cap",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    #[serde(flatten)]
    pub report: MetricsReport,
}

/// One training run per value along `axis`.
pub fn sweep<S: AsRef<str>>(
    cfg: &RunConfig,
    train_raw: &[RawRecord],
    eval_raw: &[RawRecord],
    axis: SweepAxis,
    values: &[S],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let shared = prepare(cfg, train_raw, eval_raw)?;
    values
        .iter()
        .map(|v| {
            let mut c = cfg.clone();
            c.set(axis.key(), v.as_ref())?;
            // history caps change the encoded records, so re-prepare for that axis
            let data = if axis == SweepAxis::HistoryCap {
                prepare(&c, train_raw, eval_raw)?
            } else {
                shared.clone()
            };
            log::info!("sweep {} = {}", axis.key(), v.as_ref());
            Ok(SweepRow {
                axis: axis.key().to_string(),
                value: v.as_ref().to_string(),
                report: train_and_evaluate(&c, &data)?.report,
            })
        })
        .collect()
}

/// Seeded synthetic corpus split into training and held-out users.
pub fn synthetic_split(
    cfg: &RunConfig,
    n_records: usize,
    eval_fraction: f64,
) -> Result<(Vec<RawRecord>, Vec<RawRecord>)> {
    let mut s = cfg.synth.clone();
    s.n_users = n_records;
    s.seed = cfg.seed;
    let mut all = generate_synthetic_corpus(&s)?;
    let n_eval = ((n_records as f64) * eval_fraction).round() as usize;
    let eval = all.split_off(n_records - n_eval.min(n_records));
    Ok((all, eval))
}

/// Tiny all-components configuration used for finite-difference checks.
pub fn gradcheck_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::micro().with_seed(seed);
    let b = &mut c.model.backbone;
    b.d_model = 8;
    b.n_heads = 2;
    b.d_ff = 12;
    b.max_seq_len = 24;
    b.adapter_dim = 4;
    b.adapter_rank = 2;
    let e = &mut c.model.encoder;
    e.d_user = 6;
    e.d_ff = 8;
    c.caps.body = 14;
    c.caps.title = 6;
    c.caps.history = 3;
    c.train.fact.negatives = 2;
    c
}

fn restrict(model: &Model, prefixes: &[&str]) -> Model {
    let mut m = model.clone();
    m.store.set_trainable_with_prefix("", false);
    for p in prefixes {
        m.store.set_trainable_with_prefix(p, true);
    }
    m
}

fn contract(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

/// Finite-difference checks of the composite pieces of the objective on a
/// tiny model with perturbed weights: attention blocks, adapter fusion,
/// the contrastive loss, the personalization loss, the user vector and the
/// full training loss. One training example is a cold-start user so both
/// user paths are exercised.
pub fn gradient_suite(check: &GradCheck, seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut cfg = gradcheck_config(seed);
    cfg.model.encoder.positions = true;
    cfg.model.encoder.pooling = Pooling::Attention;
    let mut raw = generate_synthetic_corpus(&{
        let mut s = cfg.synth.clone();
        s.n_users = 3;
        s.history_min = 2;
        s.history_max = 3;
        s.sentences_min = 2;
        s.sentences_max = 2;
        s
    })?;
    raw[1].history.clear();
    let data = prepare(&cfg, &raw, &[])?;
    let mut model = build_model(&cfg, &data.vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[7]));
    // zero-initialized tensors would leave parts of the graph inactive
    let noise = Normal::new(0.0, 0.2).expect("valid std");
    for p in model.store.iter_mut() {
        for v in p.value.data_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    let d = cfg.model.backbone.d_model;
    let du = cfg.model.encoder.d_user;
    let mut reports = Vec::new();

    for (name, prefix, width, causal) in [
        ("attention block (causal)", "backbone.layer0.", d, true),
        ("attention block (encoder)", "upe.layer0.", du, false),
    ] {
        let x = uniform(&mut rng, &[5, width]);
        let w = uniform(&mut rng, &[5, width]);
        let mut m = restrict(&model, &[prefix]);
        let heads = if causal {
            cfg.model.backbone.n_heads
        } else {
            cfg.model.encoder.n_heads
        };
        reports.push(check.run_model(name, &mut m, |m, g| {
            let xv = g.constant(x.clone());
            let block = if causal {
                &m.backbone.blocks[0]
            } else {
                &m.encoder.blocks[0]
            };
            let (out, _) = transformer_block(g, &m.store, xv, block, heads, causal)?;
            contract(g, out, &w)
        })?);
    }

    let (h, v_u, e_dc, w) = (
        uniform(&mut rng, &[5, d]),
        uniform(&mut rng, &[du]),
        uniform(&mut rng, &[d]),
        uniform(&mut rng, &[5, d]),
    );
    let mut m = restrict(&model, &["adapter."]);
    reports.push(check.run_model("adapter fusion", &mut m, |m, g| {
        let (hv, uv, dv) = (g.constant(h.clone()), g.constant(v_u.clone()), g.constant(e_dc.clone()));
        let pack = m.project_contexts(g, uv, dv)?;
        let out = m.adapt_hidden(g, hv, &pack, 0)?;
        contract(g, out, &w)
    })?);

    let mut store = ParamStore::new();
    let ids: Vec<_> = ["anchor", "positive", "neg0", "neg1", "neg2"]
        .iter()
        .map(|n| store.add(*n, uniform(&mut rng, &[d])))
        .collect();
    let tau = cfg.train.fact.tau;
    reports.push(check.run("contrastive loss", &mut store, |g, s| {
        let v: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
        contrastive_loss(g, v[0], v[1], &v[2..], tau)
    })?);

    let record = &data.train[0];
    let (input, _) = teacher_forced_sequence(&record.current.body, &record.reference);
    let positions = emission_positions(record.current.body.len(), record.reference.len());
    reports.push(check.run_model("L_pers", &mut model, |m, g| {
        let hs = m.forward(g, &input, None, false)?;
        let emb = m.embed_headline(g, &hs, positions.clone())?;
        let v = m.user_preference(g, &record.history)?;
        let user = m.user_in_backbone_space(g, v)?;
        personalization_loss(g, emb, user)
    })?);

    let w = uniform(&mut rng, &[du]);
    let mut m = restrict(&model, &["upe."]);
    reports.push(check.run_model("user vector", &mut m, |m, g| {
        let v = m.user_preference(g, &record.history)?;
        contract(g, v, &w)
    })?);

    let batch: Vec<&UserRecord> = data.train.iter().collect();
    for variant in ["full", "no-cia"] {
        let mut tc = cfg.train.clone();
        tc.ablation = Ablation::variant(variant)?;
        let name = format!("L_total ({variant})");
        reports.push(check.run_model(&name, &mut model, |m, g| batch_total_loss(m, g, &batch, &tc))?);
    }
    Ok(reports)
}

pub fn rows_to_jsonl<T: Serialize>(rows: &[T]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> RunConfig {
        let mut c = RunConfig::micro().with_seed(3);
        c.model.backbone.d_model = 8;
        c.model.backbone.d_ff = 16;
        c.model.encoder.d_user = 8;
        c.model.encoder.d_ff = 16;
        c.train.epochs = 1;
        c
    }

    #[test]
    fn gradient_suite_passes() {
        let reports = gradient_suite(&GradCheck::default(), 1).unwrap();
        assert_eq!(reports.len(), 8);
        for r in reports {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn ablate_and_sweep_row_counts() {
        let cfg = small_cfg();
        let (tr, ev) = synthetic_split(&cfg, 6, 0.34).unwrap();
        assert_eq!((tr.len(), ev.len()), (4, 2));
        let data = prepare(&cfg, &tr, &ev).unwrap();
        let rows = ablate(&cfg, &data, &["full", "no-upe"]).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].variant, "no-upe");
        let one = sweep(&cfg, &tr, &ev, SweepAxis::LambdaFact, &["0.5"]).unwrap();
        assert_eq!(one.len(), 1);
        let caps = sweep(&cfg, &tr, &ev, SweepAxis::HistoryCap, &["1", "3"]).unwrap();
        assert_eq!(caps.len(), 2);
        let text = rows_to_jsonl(&caps);
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"axis\":\"data.history_cap\""));
        assert!(sweep(&cfg, &tr, &ev, SweepAxis::LambdaPers, &[] as &[&str]).is_err());
        assert!(SweepAxis::parse("tau").is_err());
    }
}
