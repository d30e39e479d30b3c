//! Plain-text checkpoints.
//!
//! ```text
//! [config]
//! key = value
//! [vocab]
//! one regular token per line, in id order
//! [tensors]
//! name<TAB>dims<TAB>values
//! ```
//!
//! Dims are `x`-separated, values space-separated in shortest round-trip
//! form, so save followed by load reproduces every parameter bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::experiment::build_model;
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub model: Model,
}

pub fn to_text(config: &RunConfig, vocab: &Vocab, model: &Model) -> String {
    let mut cfg = config.clone();
    cfg.model.backbone.vocab_size = vocab.len();
    let mut out = String::from("[config]\n");
    out.push_str(&cfg.to_text());
    out.push_str("[vocab]\n");
    for t in vocab.regular_tokens() {
        out.push_str(t);
        out.push('\n');
    }
    out.push_str("[tensors]\n");
    for p in model.store.iter() {
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        let _ = write!(out, "{}\t{}\t", p.name, dims.join("x"));
        for (i, v) in p.value.data().iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

pub fn save(path: impl AsRef<Path>, config: &RunConfig, vocab: &Vocab, model: &Model) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_text(config, vocab, model)).map_err(|e| Error::io(path, e))
}

fn bad(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("line {line}: {msg}"))
}

pub fn from_text(text: &str) -> Result<Checkpoint> {
    #[derive(PartialEq)]
    enum Section {
        None,
        Config,
        Vocab,
        Tensors,
    }
    let mut section = Section::None;
    let mut config_text = String::new();
    let mut tokens = Vec::new();
    let mut tensors: Vec<(usize, String, Tensor)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        match line {
            "[config]" => section = Section::Config,
            "[vocab]" => section = Section::Vocab,
            "[tensors]" => section = Section::Tensors,
            _ => match section {
                Section::None if line.trim().is_empty() => {}
                Section::None => return Err(bad(n, "content before the first section")),
                Section::Config => {
                    config_text.push_str(line);
                    config_text.push('\n');
                }
                Section::Vocab => tokens.push(line.to_string()),
                Section::Tensors => {
                    let mut parts = line.splitn(3, '\t');
                    let (name, dims, values) = match (parts.next(), parts.next(), parts.next()) {
                        (Some(a), Some(b), Some(c)) => (a, b, c),
                        _ => return Err(bad(n, "expected name, dims and values")),
                    };
                    let shape = dims
                        .split('x')
                        .map(|d| d.parse::<usize>().map_err(|e| bad(n, e)))
                        .collect::<Result<Vec<_>>>()?;
                    let data = values
                        .split(' ')
                        .filter(|s| !s.is_empty())
                        .map(|v| v.parse::<f64>().map_err(|e| bad(n, e)))
                        .collect::<Result<Vec<_>>>()?;
                    let t = Tensor::new(shape, data).map_err(|e| bad(n, e))?;
                    tensors.push((n, name.to_string(), t));
                }
            },
        }
    }
    if section != Section::Tensors {
        return Err(Error::Checkpoint("missing [tensors] section".into()));
    }
    let mut config = RunConfig::default();
    config.apply_text(&config_text, "checkpoint [config]")?;
    let vocab = Vocab::from_tokens(tokens);
    if vocab.len() != config.model.backbone.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocab has {} entries but model.vocab_size is {}",
            vocab.len(),
            config.model.backbone.vocab_size
        )));
    }
    let mut model = build_model(&config, &vocab)?;
    if tensors.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            model.store.len(),
            tensors.len()
        )));
    }
    for (n, name, t) in tensors {
        let p = model
            .store
            .by_name_mut(&name)
            .ok_or_else(|| bad(n, format!("unknown tensor `{name}`")))?;
        if p.value.shape() != t.shape() {
            return Err(bad(
                n,
                format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.value.shape()
                ),
            ));
        }
        p.value = t;
    }
    Ok(Checkpoint { config, vocab, model })
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{prepare, synthetic_split};
    use crate::train::Ablation;

    fn setup() -> (RunConfig, Vocab, Model) {
        let mut cfg = RunConfig::micro().with_seed(4);
        cfg.model.backbone.d_model = 8;
        cfg.model.backbone.d_ff = 16;
        cfg.model.encoder.d_user = 8;
        cfg.model.encoder.d_ff = 16;
        cfg.train.ablation = Ablation::variant("no-cia").unwrap();
        let (tr, ev) = synthetic_split(&cfg, 4, 0.25).unwrap();
        let data = prepare(&cfg, &tr, &ev).unwrap();
        let mut model = build_model(&cfg, &data.vocab).unwrap();
        // perturb so the values differ from a fresh init
        for p in model.store.iter_mut() {
            for v in p.value.data_mut() {
                *v = *v * 1.37 + 1e-3 / 3.0;
            }
        }
        (cfg, data.vocab, model)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (cfg, vocab, model) = setup();
        let text = to_text(&cfg, &vocab, &model);
        let back = from_text(&text).unwrap();
        assert_eq!(back.vocab.regular_tokens(), vocab.regular_tokens());
        assert_eq!(back.config.train.ablation, cfg.train.ablation);
        assert_eq!(back.config.seed, cfg.seed);
        for (a, b) in model.store.iter().zip(back.model.store.iter()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
        }
        assert_eq!(to_text(&back.config, &back.vocab, &back.model), text);
    }

    #[test]
    fn file_round_trip() {
        let (cfg, vocab, model) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &cfg, &vocab, &model).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.model.store.len(), model.store.len());
        assert!(load(dir.path().join("missing")).is_err());
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let (cfg, vocab, model) = setup();
        let text = to_text(&cfg, &vocab, &model);
        let cut = text.find("[tensors]").unwrap();
        assert!(from_text(&text[..cut]).is_err());
        let (head, tail) = text.split_at(cut);
        let bad_value = format!("{head}{}", tail.replacen(' ', " nope", 1));
        assert!(from_text(&bad_value).is_err());
        let mut lines: Vec<&str> = text.lines().collect();
        lines.pop();
        assert!(matches!(from_text(&lines.join("\n")), Err(Error::Checkpoint(_))));
        let renamed = text.replacen("tok_emb\t", "tok_embedding\t", 1);
        assert!(from_text(&renamed).is_err());
        assert!(from_text("stray\n[tensors]\n").is_err());
    }
}
