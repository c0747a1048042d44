use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Half-width of the uniform range for rows missing from the file.
const OOV_RANGE: f64 = 0.05;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct EmbeddingStats {
    /// Vocabulary entries found in the file (specials excluded).
    pub matched: usize,
    /// Vocabulary entries given random rows.
    pub oov: usize,
}

/// Embedding table `[V×dim]` from a GloVe-style text file. Lookup is by
/// exact token first, then by the lowercased file token. PAD is all zeros.
pub fn load_embeddings<F: Scalar>(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<(Tensor<F>, EmbeddingStats)> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    read_embeddings(reader, vocab, dim, seed).map_err(|e| match e {
        Error::Parse { line, message, .. } => Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        },
        other => other,
    })
}

pub fn read_embeddings<F: Scalar>(
    reader: impl BufRead,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<(Tensor<F>, EmbeddingStats)> {
    if dim == 0 {
        return Err(Error::Config("embedding dimension must be positive".into()));
    }
    let mut exact: HashMap<usize, Vec<F>> = HashMap::new();
    let mut folded: HashMap<usize, Vec<F>> = HashMap::new();
    let mut first = true;
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let mut fields = line.split(' ').filter(|f| !f.is_empty());
        let Some(token) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        if values.len() != dim {
            if first {
                return Err(Error::EmbeddingDim {
                    expected: dim,
                    found: values.len(),
                });
            }
            return Err(parse_error(
                n + 1,
                format!("expected {} fields, found {}", dim + 1, values.len() + 1),
            ));
        }
        first = false;
        let (slot, id) = match vocab.get(token) {
            Some(id) => (&mut exact, id),
            None => match vocab.get(&token.to_lowercase()) {
                Some(id) => (&mut folded, id),
                None => continue,
            },
        };
        if id == PAD || slot.contains_key(&id) {
            continue;
        }
        let row = values
            .iter()
            .map(|v| v.parse::<f64>().map(F::of))
            .collect::<std::result::Result<Vec<F>, _>>()
            .map_err(|e| parse_error(n + 1, e.to_string()))?;
        slot.insert(id, row);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![F::zero(); vocab.len() * dim];
    let mut stats = EmbeddingStats::default();
    for id in 1..vocab.len() {
        let row = &mut data[id * dim..(id + 1) * dim];
        match exact.get(&id).or_else(|| folded.get(&id)) {
            Some(values) => {
                row.copy_from_slice(values);
                stats.matched += 1;
            }
            None => {
                row.iter_mut()
                    .for_each(|v| *v = F::of(rng.random_range(-OOV_RANGE..=OOV_RANGE)));
                stats.oov += 1;
            }
        }
    }
    // UNK is a special, not a vocabulary word
    if exact.contains_key(&1) || folded.contains_key(&1) {
        stats.matched -= 1;
    } else {
        stats.oov -= 1;
    }
    Ok((Tensor::from_vec(data, &[vocab.len(), dim])?, stats))
}

/// Writes `(token, vector)` rows in the text layout read by [`load_embeddings`].
/// Values are printed in shortest round-trip form, so reading them back is exact.
pub fn write_embeddings(writer: impl Write, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for (token, values) in rows {
        if token.is_empty() || token.contains(char::is_whitespace) {
            return Err(Error::Contract(format!(
                "embedding token `{token}` is empty or contains whitespace"
            )));
        }
        write!(w, "{token}")?;
        for v in values {
            write!(w, " {v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_embeddings(path: impl AsRef<Path>, rows: &[(String, Vec<f64>)]) -> Result<()> {
    write_embeddings(File::create(path)?, rows)
}

fn parse_error(line: usize, message: String) -> Error {
    Error::Parse {
        path: Default::default(),
        line,
        message,
    }
}
