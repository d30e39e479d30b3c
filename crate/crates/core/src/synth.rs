//! Seeded synthetic corpus with topical users.
//!
//! Each topic owns a pool of pseudo-words plus a few headline keywords.
//! A user leans on one primary topic and has a favourite keyword from it;
//! their clicked headlines carry that keyword. The current article is drawn
//! from any topic, and its reference headline is the user's keyword
//! followed by the article's first few words, so the reference is both
//! personalized and supported by the body.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{RawArticle, RawRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_users: usize,
    pub topics: usize,
    pub words_per_topic: usize,
    pub keywords_per_topic: usize,
    pub history_min: usize,
    pub history_max: usize,
    pub sentences_min: usize,
    pub sentences_max: usize,
    pub sentence_len: usize,
    /// Words copied from the lede into the reference headline.
    pub lede_words: usize,
    /// Zipf exponent for word choice inside a topic pool.
    pub zipf: f64,
    /// Probability that a clicked article comes from the user's primary topic.
    pub primary_weight: f64,
    /// Share of users with an empty click history.
    pub cold_start_rate: f64,
    /// Consecutive records that share one current article.
    pub readers_per_article: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_users: 16,
            topics: 4,
            words_per_topic: 24,
            keywords_per_topic: 4,
            history_min: 3,
            history_max: 6,
            sentences_min: 3,
            sentences_max: 4,
            sentence_len: 6,
            lede_words: 3,
            zipf: 1.0,
            primary_weight: 0.9,
            cold_start_rate: 0.0,
            readers_per_article: 1,
        }
    }
}

#[derive(Clone, Debug)]
struct Topic {
    words: Vec<String>,
    weights: Vec<f64>,
    keywords: Vec<String>,
}

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

fn pseudo_word(rng: &mut ChaCha8Rng, taken: &mut BTreeSet<String>) -> String {
    loop {
        let syllables = rng.gen_range(2..=3);
        let w: String = (0..syllables)
            .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
            .collect();
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

impl Topic {
    fn sample(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
        let idx: Vec<usize> = (0..self.words.len()).collect();
        idx.choose_multiple_weighted(rng, n.min(idx.len()), |&i| self.weights[i])
            .expect("positive weights")
            .map(|&i| self.words[i].clone())
            .collect()
    }

    fn sentence(&self, rng: &mut ChaCha8Rng, len: usize) -> String {
        let mut s = self.sample(rng, len).join(" ");
        s.push('.');
        s
    }
}

fn check(cfg: &SynthConfig) -> Result<()> {
    let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
    if cfg.topics < 2 {
        return bad("at least two topics are required");
    }
    if cfg.keywords_per_topic == 0 || cfg.words_per_topic < cfg.sentence_len.max(cfg.lede_words) {
        return bad("topic pools are too small for the sentence length");
    }
    if cfg.history_min > cfg.history_max || cfg.sentences_min == 0 || cfg.sentences_min > cfg.sentences_max {
        return bad("inconsistent length ranges");
    }
    if cfg.readers_per_article == 0 {
        return bad("readers_per_article must be >= 1");
    }
    if cfg.lede_words < 2 || cfg.lede_words > cfg.sentence_len {
        return bad("lede_words must lie in [2, sentence_len]");
    }
    if !(0.0..=1.0).contains(&cfg.primary_weight) || !(0.0..=1.0).contains(&cfg.cold_start_rate) {
        return bad("probabilities must lie in [0, 1]");
    }
    Ok(())
}

/// Topic pools: `(body words, keywords)` per topic, as generated for `cfg.seed`.
pub fn topic_pools(cfg: &SynthConfig) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    check(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(build_topics(cfg, &mut rng)
        .into_iter()
        .map(|t| (t.words, t.keywords))
        .collect())
}

fn build_topics(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Topic> {
    let mut taken = BTreeSet::new();
    (0..cfg.topics)
        .map(|_| {
            let words: Vec<String> = (0..cfg.words_per_topic).map(|_| pseudo_word(rng, &mut taken)).collect();
            let keywords = (0..cfg.keywords_per_topic)
                .map(|_| pseudo_word(rng, &mut taken))
                .collect();
            let weights = (1..=words.len()).map(|r| (r as f64).powf(-cfg.zipf)).collect();
            Topic {
                words,
                weights,
                keywords,
            }
        })
        .collect()
}

pub fn generate_synthetic_corpus(cfg: &SynthConfig) -> Result<Vec<RawRecord>> {
    check(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let topics = build_topics(cfg, &mut rng);
    let t = cfg.topics;
    let mut records = Vec::with_capacity(cfg.n_users);
    let mut sentences: Vec<String> = Vec::new();
    for u in 0..cfg.n_users {
        let primary = rng.gen_range(0..t);
        let keyword = topics[primary].keywords.choose(&mut rng).unwrap().clone();
        let n_hist = if rng.gen_bool(cfg.cold_start_rate) {
            0
        } else {
            rng.gen_range(cfg.history_min..=cfg.history_max)
        };
        let history = (0..n_hist)
            .map(|_| {
                let topic = if rng.gen_bool(cfg.primary_weight) {
                    primary
                } else {
                    (primary + rng.gen_range(1..t)) % t
                };
                let tp = &topics[topic];
                let kw = if topic == primary {
                    keyword.clone()
                } else {
                    tp.keywords.choose(&mut rng).unwrap().clone()
                };
                let mut headline = vec![kw];
                headline.extend(tp.sample(&mut rng, 2));
                RawArticle {
                    headline: headline.join(" "),
                    body: tp.sentence(&mut rng, cfg.sentence_len),
                }
            })
            .collect();

        if u % cfg.readers_per_article == 0 {
            let tp = &topics[rng.gen_range(0..t)];
            let n_sent = rng.gen_range(cfg.sentences_min..=cfg.sentences_max);
            sentences = (0..n_sent).map(|_| tp.sentence(&mut rng, cfg.sentence_len)).collect();
        }
        let lede: Vec<&str> = sentences[0]
            .trim_end_matches('.')
            .split(' ')
            .take(cfg.lede_words)
            .collect();
        let reference = format!("{keyword} {}", lede.join(" "));
        records.push(RawRecord {
            user_id: format!("u{u:04}"),
            history,
            current: RawArticle {
                headline: String::new(),
                body: sentences.join(" "),
            },
            reference_headline: reference,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{to_jsonl, words, Vocab};
    use std::collections::HashMap;

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SynthConfig {
            seed: 42,
            ..Default::default()
        };
        let a = to_jsonl(&generate_synthetic_corpus(&cfg).unwrap());
        let b = to_jsonl(&generate_synthetic_corpus(&cfg).unwrap());
        assert_eq!(a, b);
        let c = to_jsonl(&generate_synthetic_corpus(&SynthConfig { seed: 43, ..cfg }).unwrap());
        assert_ne!(a, c);
    }

    #[test]
    fn record_count_and_reference_support() {
        let cfg = SynthConfig {
            n_users: 4,
            ..Default::default()
        };
        let recs = generate_synthetic_corpus(&cfg).unwrap();
        assert_eq!(recs.len(), 4);
        for r in &recs {
            let body: Vec<String> = words(&r.current.body);
            let shared = words(&r.reference_headline).iter().filter(|w| body.contains(w)).count();
            assert!(shared >= 2);
        }
    }

    #[test]
    fn history_concentrates_on_primary_topic() {
        let cfg = SynthConfig {
            n_users: 40,
            seed: 5,
            ..Default::default()
        };
        let pools = topic_pools(&cfg).unwrap();
        let recs = generate_synthetic_corpus(&cfg).unwrap();
        let mut concentrated = 0;
        for r in &recs {
            let toks: Vec<String> = r
                .history
                .iter()
                .flat_map(|a| words(&a.headline).into_iter().chain(words(&a.body)))
                .collect();
            let best = pools
                .iter()
                .map(|(w, k)| toks.iter().filter(|t| w.contains(t) || k.contains(t)).count())
                .max()
                .unwrap();
            if best as f64 > 0.7 * toks.len() as f64 {
                concentrated += 1;
            }
        }
        // a short history can be unlucky; nearly every user should concentrate
        assert!(concentrated >= 36, "{concentrated}/40");
    }

    #[test]
    fn vocab_follows_true_frequency() {
        let cfg = SynthConfig {
            n_users: 30,
            seed: 9,
            ..Default::default()
        };
        let recs = generate_synthetic_corpus(&cfg).unwrap();
        let mut counts: HashMap<String, usize> = HashMap::new();
        for r in &recs {
            for t in r.texts() {
                for w in words(t) {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        let mut expected: Vec<(String, usize)> = counts.into_iter().collect();
        expected.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let vocab = Vocab::build(recs.iter().flat_map(RawRecord::texts), 20).unwrap();
        let got: Vec<&String> = vocab.regular_tokens().iter().collect();
        let want: Vec<&String> = expected.iter().take(20).map(|(w, _)| w).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn readers_share_articles_in_groups() {
        let cfg = SynthConfig {
            n_users: 6,
            readers_per_article: 3,
            ..Default::default()
        };
        let recs = generate_synthetic_corpus(&cfg).unwrap();
        assert_eq!(recs[0].current, recs[2].current);
        assert_eq!(recs[3].current, recs[5].current);
        assert_ne!(recs[2].current, recs[3].current);
    }

    #[test]
    fn cold_start_users_and_bad_configs() {
        let cfg = SynthConfig {
            n_users: 20,
            cold_start_rate: 1.0,
            ..Default::default()
        };
        assert!(generate_synthetic_corpus(&cfg)
            .unwrap()
            .iter()
            .all(|r| r.history.is_empty()));
        assert!(generate_synthetic_corpus(&SynthConfig {
            topics: 1,
            ..Default::default()
        })
        .is_err());
    }
}
