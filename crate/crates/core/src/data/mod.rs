//! Vocabulary, corpus readers, embeddings, batching and the synthetic toy task.

mod batch;
mod embeddings;
mod toy;

pub use batch::{make_batches, Batch};
pub use embeddings::{load_embeddings, read_embeddings, save_embeddings, write_embeddings, EmbeddingStats};
pub use toy::{generate_toy_corpus, toy_embeddings, toy_label, ToyCorpus, NEGATION, TOY_WORDS};

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{THREE_WAY_LABELS, TWO_WAY_LABELS};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token ↔ index map with `<pad>` at 0 and `<unk>` at 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.add(PAD_TOKEN);
        v.add(UNK_TOKEN);
        v
    }

    /// Every token of `examples` in order of first appearance.
    pub fn build<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Self {
        let mut v = Self::new();
        for ex in examples {
            for t in ex.premises.iter().flatten().chain(&ex.hypothesis) {
                v.add(t);
            }
        }
        v
    }

    /// Index of `token`, inserting it if new.
    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        let i = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), i);
        i
    }

    /// Index of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(PAD_TOKEN) || tokens.get(1).map(String::as_str) != Some(UNK_TOKEN)
        {
            return Err(Error::Format("vocabulary must start with <pad>, <unk>".into()));
        }
        let mut v = Vocabulary::new();
        for t in &tokens[2..] {
            if v.get(t).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry `{t}`")));
            }
            v.add(t);
        }
        Ok(v)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Whitespace split and lowercase.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// One labelled pair. `premises` holds a single sentence, or the four
/// premises of a multi-premise record in file order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub premises: Vec<Vec<String>>,
    pub hypothesis: Vec<String>,
    pub label: usize,
}

impl Example {
    pub fn new(premise: Vec<String>, hypothesis: Vec<String>, label: usize) -> Self {
        Example {
            premises: vec![premise],
            hypothesis,
            label,
        }
    }

    /// All premises joined into one token sequence.
    pub fn premise(&self) -> Vec<String> {
        self.premises.concat()
    }

    pub fn encode(&self, vocab: &Vocabulary) -> Encoded {
        Encoded {
            premise: vocab.encode(&self.premise()),
            hypothesis: vocab.encode(&self.hypothesis),
            label: self.label,
        }
    }
}

/// An example as token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub premise: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    SnliJsonl,
    ScitailTsv,
    MpeTsv,
    UnifiedJsonl,
}

impl DataFormat {
    pub const ALL: [DataFormat; 4] = [
        DataFormat::SnliJsonl,
        DataFormat::ScitailTsv,
        DataFormat::MpeTsv,
        DataFormat::UnifiedJsonl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DataFormat::SnliJsonl => "snli_jsonl",
            DataFormat::ScitailTsv => "scitail_tsv",
            DataFormat::MpeTsv => "mpe_tsv",
            DataFormat::UnifiedJsonl => "unified_jsonl",
        }
    }
}

impl fmt::Display for DataFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DataFormat::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown dataset format `{s}`")))
    }
}

/// Records dropped while loading, by reason.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SkipCounts {
    /// Gold label `-`.
    pub unlabeled: usize,
    pub unknown_label: usize,
    pub missing_field: usize,
    pub empty_sentence: usize,
}

impl SkipCounts {
    pub fn total(&self) -> usize {
        self.unlabeled + self.unknown_label + self.missing_field + self.empty_sentence
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub labels: Vec<String>,
    pub examples: Vec<Example>,
    pub skipped: SkipCounts,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn encode(&self, vocab: &Vocabulary) -> Vec<Encoded> {
        self.examples.iter().map(|e| e.encode(vocab)).collect()
    }

    /// Write as unified JSONL. Multi-premise examples keep their premises.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for ex in &self.examples {
            let label = &self.labels[ex.label];
            let hyp = ex.hypothesis.join(" ");
            let record = if ex.premises.len() == 1 {
                serde_json::json!({"premise": ex.premises[0].join(" "), "hypothesis": hyp, "label": label})
            } else {
                let ps: Vec<String> = ex.premises.iter().map(|p| p.join(" ")).collect();
                serde_json::json!({"premises": ps, "hypothesis": hyp, "label": label})
            };
            serde_json::to_writer(&mut w, &record)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

fn owned(labels: &[&str]) -> Vec<String> {
    labels.iter().map(|s| s.to_string()).collect()
}

/// Parsed record before label resolution.
struct Raw {
    premises: Vec<String>,
    hypothesis: String,
    label: String,
}

pub fn load_dataset(path: impl AsRef<Path>, format: DataFormat) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let dataset = read_dataset(BufReader::new(file), format).map_err(|e| match e {
        Error::Parse { line, message, .. } => Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        },
        other => other,
    })?;
    log::info!(
        "{}: {} examples, {} skipped",
        path.display(),
        dataset.len(),
        dataset.skipped.total()
    );
    Ok(dataset)
}

pub fn read_dataset(reader: impl BufRead, format: DataFormat) -> Result<Dataset> {
    let mut skipped = SkipCounts::default();
    let mut raws = Vec::new();
    let mut header: Option<Vec<String>> = None;
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw = match format {
            DataFormat::SnliJsonl => parse_snli(&line, n + 1)?,
            DataFormat::UnifiedJsonl => parse_unified(&line, n + 1)?,
            DataFormat::ScitailTsv => parse_scitail(&line),
            DataFormat::MpeTsv => match &header {
                None => {
                    header = Some(line.split('\t').map(|s| s.trim().to_string()).collect());
                    continue;
                }
                Some(h) => parse_mpe(h, &line),
            },
        };
        match raw {
            Some(r) => raws.push(r),
            None => skipped.missing_field += 1,
        }
    }
    let labels = match format {
        DataFormat::ScitailTsv => owned(&TWO_WAY_LABELS),
        DataFormat::SnliJsonl | DataFormat::MpeTsv => owned(&THREE_WAY_LABELS),
        DataFormat::UnifiedJsonl => {
            if raws.iter().any(|r| r.label == TWO_WAY_LABELS[1]) {
                owned(&TWO_WAY_LABELS)
            } else {
                owned(&THREE_WAY_LABELS)
            }
        }
    };
    let mut examples = Vec::with_capacity(raws.len());
    for r in raws {
        if r.label == "-" {
            skipped.unlabeled += 1;
            continue;
        }
        let Some(label) = labels.iter().position(|l| *l == r.label) else {
            log::warn!("unknown label `{}`", r.label);
            skipped.unknown_label += 1;
            continue;
        };
        let premises: Vec<Vec<String>> = r.premises.iter().map(|p| tokenize(p)).collect();
        let hypothesis = tokenize(&r.hypothesis);
        if hypothesis.is_empty() || premises.iter().all(Vec::is_empty) {
            skipped.empty_sentence += 1;
            continue;
        }
        examples.push(Example {
            premises,
            hypothesis,
            label,
        });
    }
    if skipped.total() > 0 {
        log::warn!("skipped records: {skipped:?}");
    }
    Ok(Dataset {
        labels,
        examples,
        skipped,
    })
}

fn json(line: &str, n: usize) -> Result<Value> {
    serde_json::from_str(line).map_err(|e| Error::Parse {
        path: Default::default(),
        line: n,
        message: e.to_string(),
    })
}

fn field(v: &Value, key: &str) -> Option<String> {
    v.get(key)?.as_str().map(str::to_string)
}

fn parse_snli(line: &str, n: usize) -> Result<Option<Raw>> {
    let v = json(line, n)?;
    Ok((|| {
        Some(Raw {
            premises: vec![field(&v, "sentence1")?],
            hypothesis: field(&v, "sentence2")?,
            label: field(&v, "gold_label")?,
        })
    })())
}

fn parse_unified(line: &str, n: usize) -> Result<Option<Raw>> {
    let v = json(line, n)?;
    let premises = match (v.get("premise"), v.get("premises")) {
        (Some(Value::String(p)), _) => Some(vec![p.clone()]),
        (_, Some(Value::Array(ps))) => ps.iter().map(|p| p.as_str().map(str::to_string)).collect(),
        _ => None,
    };
    Ok((|| {
        Some(Raw {
            premises: premises?,
            hypothesis: field(&v, "hypothesis")?,
            label: field(&v, "label")?,
        })
    })())
}

// premise <TAB> hypothesis <TAB> label
fn parse_scitail(line: &str) -> Option<Raw> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() < 3 {
        return None;
    }
    Some(Raw {
        premises: vec![cols[0].to_string()],
        hypothesis: cols[1].to_string(),
        label: cols[2].trim().to_string(),
    })
}

fn parse_mpe(header: &[String], line: &str) -> Option<Raw> {
    let cols: Vec<&str> = line.split('\t').collect();
    let col = |name: &str| -> Option<String> {
        let i = header.iter().position(|h| h == name)?;
        cols.get(i).map(|s| s.to_string())
    };
    let premises = (1..=4)
        .map(|k| col(&format!("premise{k}")))
        .collect::<Option<Vec<_>>>()?;
    Some(Raw {
        premises,
        hypothesis: col("hypothesis")?,
        label: col("gold_label")?.trim().to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(text: &str, format: DataFormat) -> Dataset {
        read_dataset(text.as_bytes(), format).unwrap()
    }

    #[test]
    fn snli_record() {
        let d = read(
            r#"{"sentence1": "A man sleeps.", "sentence2": "A PERSON rests", "gold_label": "entailment"}"#,
            DataFormat::SnliJsonl,
        );
        assert_eq!(d.labels, THREE_WAY_LABELS);
        assert_eq!(d.examples[0].label, 1);
        assert_eq!(d.examples[0].premise(), ["a", "man", "sleeps."]);
        assert_eq!(d.examples[0].hypothesis, ["a", "person", "rests"]);
    }

    #[test]
    fn snli_skips() {
        let text = [
            r#"{"sentence1": "a", "sentence2": "b", "gold_label": "-"}"#,
            r#"{"sentence1": "a", "sentence2": "b", "gold_label": "maybe"}"#,
            r#"{"sentence1": "a", "gold_label": "neutral"}"#,
            r#"{"sentence1": "  ", "sentence2": "b", "gold_label": "neutral"}"#,
            r#"{"sentence1": "a", "sentence2": "b", "gold_label": "contradiction"}"#,
        ]
        .join("\n");
        let d = read(&text, DataFormat::SnliJsonl);
        assert_eq!(d.len(), 1);
        assert_eq!(
            d.skipped,
            SkipCounts {
                unlabeled: 1,
                unknown_label: 1,
                missing_field: 1,
                empty_sentence: 1
            }
        );
    }

    #[test]
    fn bad_json_reports_line() {
        let err = read_dataset("\n{oops".as_bytes(), DataFormat::SnliJsonl).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn mpe_premises_concatenate_in_order() {
        let text = "ID\tpremise1\tpremise2\tpremise3\tpremise4\thypothesis\tgold_label\n\
                    7\ta\tb\tc\td\tsome hypothesis\tneutral\n";
        let d = read(text, DataFormat::MpeTsv);
        assert_eq!(d.examples[0].premise(), ["a", "b", "c", "d"]);
        assert_eq!(d.examples[0].premises.len(), 4);
        assert_eq!(d.examples[0].label, 0);
    }

    #[test]
    fn scitail_uses_two_labels() {
        let d = read(
            "p one\th one\tentails\np two\th two\tneutral\nbroken\n",
            DataFormat::ScitailTsv,
        );
        assert_eq!(d.labels, TWO_WAY_LABELS);
        assert_eq!(d.examples.iter().map(|e| e.label).collect::<Vec<_>>(), [1, 0]);
        assert_eq!(d.skipped.missing_field, 1);
        let contradiction = read("p\th\tcontradiction\n", DataFormat::ScitailTsv);
        assert_eq!(contradiction.skipped.unknown_label, 1);
    }

    #[test]
    fn unified_round_trip() {
        let text = r#"{"premise": "the cat sat", "hypothesis": "a cat", "label": "entailment"}
{"premises": ["one", "two words", "three", "four"], "hypothesis": "x", "label": "contradiction"}
"#;
        let d = read(text, DataFormat::UnifiedJsonl);
        assert_eq!(d.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        d.save(&path).unwrap();
        let back = load_dataset(&path, DataFormat::UnifiedJsonl).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn vocabulary_specials_and_serde() {
        let d = read(
            r#"{"premise": "b a", "hypothesis": "a c", "label": "neutral"}"#,
            DataFormat::UnifiedJsonl,
        );
        let v = Vocabulary::build(&d.examples);
        assert_eq!(v.tokens(), ["<pad>", "<unk>", "b", "a", "c"]);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(d.examples[0].encode(&v).hypothesis, [3, 4]);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocabulary>(&json).unwrap(), v);
        assert!(serde_json::from_str::<Vocabulary>(r#"["a","b"]"#).is_err());
        assert!(serde_json::from_str::<Vocabulary>(r#"["<pad>","<unk>","x","x"]"#).is_err());
    }

    #[test]
    fn format_names() {
        for f in DataFormat::ALL {
            assert_eq!(f.name().parse::<DataFormat>().unwrap(), f);
        }
        assert!("csv".parse::<DataFormat>().is_err());
    }
}
