//! Headline metrics: ROUGE-1/2/L, personalization consistency against the
//! user's clicked headlines, and a bag-of-words support ratio standing in
//! for a trained factual-consistency classifier.
//!
//! All scores are F1-style values scaled to `[0, 100]` and macro-averaged
//! over records.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::UserRecord;
use crate::error::{Error, Result};
use crate::fact::{cosine_values, window_spans};

fn f1(overlap: usize, n_gen: usize, n_ref: usize) -> f64 {
    if overlap == 0 || n_gen == 0 || n_ref == 0 {
        return 0.0;
    }
    let p = overlap as f64 / n_gen as f64;
    let r = overlap as f64 / n_ref as f64;
    100.0 * 2.0 * p * r / (p + r)
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    out
}

/// ROUGE-N F1 with clipped n-gram counts. `n = 0` scores 0.
pub fn rouge_n<S: AsRef<str>>(gen: &[S], reference: &[S], n: usize) -> f64 {
    let g = ngrams(gen, n);
    let r = ngrams(reference, n);
    let overlap = g.iter().map(|(k, &c)| c.min(r.get(k).copied().unwrap_or(0))).sum();
    f1(overlap, g.values().sum(), r.values().sum())
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<S: AsRef<str>>(gen: &[S], reference: &[S]) -> f64 {
    f1(lcs_len(gen, reference), gen.len(), reference.len())
}

/// `(pc_avg, pc_max)`: unigram F1 of the generation against each history headline.
pub fn pc_scores<S: AsRef<str>, H: AsRef<[S]>>(gen: &[S], history: &[H]) -> Result<(f64, f64)> {
    if history.is_empty() {
        return Err(Error::UndefinedMetric(
            "personalization consistency with an empty history",
        ));
    }
    let scores: Vec<f64> = history.iter().map(|h| rouge_n(gen, h.as_ref(), 1)).collect();
    let avg = scores.iter().sum::<f64>() / scores.len() as f64;
    let max = scores.iter().cloned().fold(0.0, f64::max);
    Ok((avg, max))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProxyConfig {
    pub threshold: f64,
    pub window: usize,
    pub stride: usize,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig {
            threshold: 0.5,
            window: 10,
            stride: 5,
        }
    }
}

fn bag(words: &[String], index: &mut HashMap<String, usize>) -> HashMap<usize, f64> {
    let mut out = HashMap::new();
    for w in words {
        let next = index.len();
        let id = *index.entry(w.clone()).or_insert(next);
        *out.entry(id).or_insert(0.0) += 1.0;
    }
    out
}

fn dense(b: &HashMap<usize, f64>, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for (&i, &c) in b {
        v[i] = c;
    }
    v
}

/// Share of generated segments whose best bag-of-words cosine against some
/// body segment reaches the threshold, times 100. Works on word lists with
/// sentence spans.
pub fn factcc_proxy_words(
    gen: &[String],
    gen_sentences: &[Range<usize>],
    body: &[String],
    body_sentences: &[Range<usize>],
    cfg: &ProxyConfig,
) -> f64 {
    let gen_segs = window_spans(gen_sentences, cfg.window, cfg.stride);
    if gen_segs.is_empty() {
        return 0.0;
    }
    let body_segs = window_spans(body_sentences, cfg.window, cfg.stride);
    let mut index = HashMap::new();
    let gb: Vec<_> = gen_segs.iter().map(|r| bag(&gen[r.clone()], &mut index)).collect();
    let bb: Vec<_> = body_segs.iter().map(|r| bag(&body[r.clone()], &mut index)).collect();
    let dim = index.len();
    let bodies: Vec<Vec<f64>> = bb.iter().map(|b| dense(b, dim)).collect();
    let supported = gb
        .iter()
        .filter(|g| {
            let g = dense(g, dim);
            bodies.iter().any(|b| cosine_values(&g, b) >= cfg.threshold)
        })
        .count();
    100.0 * supported as f64 / gen_segs.len() as f64
}

pub fn factcc_proxy(gen: &str, body: &str, cfg: &ProxyConfig) -> f64 {
    use crate::data::{sentence_spans, words};
    factcc_proxy_words(
        &words(gen),
        &sentence_spans(gen),
        &words(body),
        &sentence_spans(body),
        cfg,
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pc_avg: f64,
    pub pc_max: f64,
    pub factcc: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub n_examples: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    fn values(&self) -> [f64; 6] {
        [
            self.pc_avg,
            self.pc_max,
            self.factcc,
            self.rouge1,
            self.rouge2,
            self.rouge_l,
        ]
    }
}

pub const TABLE_COLUMNS: [&str; 6] = ["Pc(avg)", "Pc(max)", "FactCC*", "ROUGE-1", "ROUGE-2", "ROUGE-L"];

/// Aligned table rows, one per labelled report.
pub fn format_table(rows: &[(String, MetricsReport)]) -> String {
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<label_w$}", "method");
    for c in TABLE_COLUMNS {
        out.push_str(&format!(" {c:>8}"));
    }
    out.push('\n');
    for (label, r) in rows {
        out.push_str(&format!("{label:<label_w$}"));
        for v in r.values() {
            out.push_str(&format!(" {v:>8.2}"));
        }
        out.push('\n');
    }
    out
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", format_table(&[("model".into(), *self)]))
    }
}

/// Metrics for one generated headline against its record.
pub fn score_example(gen: &[String], record: &UserRecord, cfg: &ProxyConfig) -> Result<MetricsReport> {
    let history: Vec<&[String]> = record.history.iter().map(|a| a.headline_words.as_slice()).collect();
    let (pc_avg, pc_max) = pc_scores(gen, &history)?;
    let gen_sentences = if gen.is_empty() { vec![] } else { vec![0..gen.len()] };
    let body = &record.current;
    Ok(MetricsReport {
        pc_avg,
        pc_max,
        factcc: factcc_proxy_words(gen, &gen_sentences, &body.body_words, &body.body_sentences, cfg),
        rouge1: rouge_n(gen, &record.reference_words, 1),
        rouge2: rouge_n(gen, &record.reference_words, 2),
        rouge_l: rouge_l(gen, &record.reference_words),
        n_examples: 1,
    })
}

/// Macro average over per-example reports.
pub fn aggregate(reports: &[MetricsReport]) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(Error::EmptyBatch("metrics over an empty dataset"));
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        pc_avg: mean(|r| r.pc_avg),
        pc_max: mean(|r| r.pc_max),
        factcc: mean(|r| r.factcc),
        rouge1: mean(|r| r.rouge1),
        rouge2: mean(|r| r.rouge2),
        rouge_l: mean(|r| r.rouge_l),
        n_examples: reports.len(),
    })
}

/// Scores generated word sequences against their records.
pub fn evaluate_generations(gens: &[Vec<String>], records: &[UserRecord], cfg: &ProxyConfig) -> Result<MetricsReport> {
    if gens.len() != records.len() {
        return Err(Error::Shape {
            op: "evaluate_generations",
            lhs: vec![gens.len()],
            rhs: vec![records.len()],
        });
    }
    let per: Vec<MetricsReport> = gens
        .iter()
        .zip(records)
        .map(|(g, r)| score_example(g, r, cfg))
        .collect::<Result<_>>()?;
    aggregate(&per)
}
