//! Embedding matrices, vocabularies and supervised pair lexicons.
//!
//! Two text formats are understood: the word2vec text format (a `count dim`
//! header followed by space separated rows) and a header-less TSV format
//! with one `token<TAB>v1<TAB>...<TAB>vd` row per line. Tokens are matched
//! byte-exactly and may not contain whitespace.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered list of unique tokens with a reverse index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary, rejecting duplicates. The reported line of a
    /// duplicate is its 1-based position in `tokens`.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut vocab = Vocabulary::default();
        for (i, tok) in tokens.into_iter().enumerate() {
            vocab.push(tok, i + 1)?;
        }
        Ok(vocab)
    }

    /// Vocabulary of the tokens `"0"`, `"1"`, ... `"n-1"`.
    pub fn numbered(n: usize) -> Self {
        Self::new((0..n).map(|i| i.to_string()).collect()).expect("numbers are unique")
    }

    fn push(&mut self, token: String, line: usize) -> Result<()> {
        if self.index.contains_key(&token) {
            return Err(Error::DuplicateToken { line, token });
        }
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
        Ok(())
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
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
}

/// Free-function form of [`Vocabulary::lookup`].
pub fn lookup(vocab: &Vocabulary, token: &str) -> Option<usize> {
    vocab.lookup(token)
}

/// A dense `n x d` embedding manifold with its vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: Array2<f64>,
    vocab: Vocabulary,
}

impl EmbeddingMatrix {
    pub fn new(data: Array2<f64>, vocab: Vocabulary) -> Result<Self> {
        if data.nrows() != vocab.len() {
            return Err(Error::RowCount {
                expected: vocab.len(),
                found: data.nrows(),
            });
        }
        if let Some((row, _)) = data
            .outer_iter()
            .enumerate()
            .find(|(_, r)| r.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite { line: row + 1 });
        }
        Ok(EmbeddingMatrix { data, vocab })
    }

    /// Wraps a matrix with a numbered vocabulary.
    pub fn from_array(data: Array2<f64>) -> Result<Self> {
        let vocab = Vocabulary::numbered(data.nrows());
        Self::new(data, vocab)
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Copies out the given rows, keeping their tokens.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        for &r in rows {
            if r >= self.len() {
                return Err(Error::IndexOutOfBounds {
                    index: r,
                    len: self.len(),
                });
            }
        }
        let data = self.data.select(Axis(0), rows);
        let vocab = Vocabulary::new(rows.iter().map(|&r| self.vocab.token(r).to_owned()).collect())?;
        Self::new(data, vocab)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingFormat {
    #[default]
    #[serde(alias = "word2vec")]
    Word2vecText,
    Tsv,
}

impl FromStr for EmbeddingFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word2vec" | "word2vec-text" => Ok(EmbeddingFormat::Word2vecText),
            "tsv" => Ok(EmbeddingFormat::Tsv),
            other => Err(Error::Config(format!("unknown embedding format {other:?}"))),
        }
    }
}

pub fn load_embeddings(path: impl AsRef<Path>, format: EmbeddingFormat) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text, format)
}

/// Parses embeddings from an in-memory string.
pub fn parse_embeddings(text: &str, format: EmbeddingFormat) -> Result<EmbeddingMatrix> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let declared = match format {
        EmbeddingFormat::Word2vecText => {
            let (line, header) = lines.next().ok_or(Error::MalformedHeader {
                line: 1,
                msg: "missing header".into(),
            })?;
            let fields: Vec<&str> = header.split_whitespace().collect();
            let parse = |s: &str| {
                s.parse::<usize>().map_err(|_| Error::MalformedHeader {
                    line,
                    msg: format!("expected \"<count> <dim>\", got {header:?}"),
                })
            };
            if fields.len() != 2 {
                return Err(Error::MalformedHeader {
                    line,
                    msg: format!("expected \"<count> <dim>\", got {header:?}"),
                });
            }
            Some((parse(fields[0])?, parse(fields[1])?))
        }
        EmbeddingFormat::Tsv => None,
    };

    let mut dim = declared.map(|(_, d)| d);
    let mut vocab = Vocabulary::default();
    let mut values = Vec::new();
    for (line, raw) in lines {
        if raw.trim().is_empty() {
            continue;
        }
        let mut fields: Box<dyn Iterator<Item = &str>> = match format {
            EmbeddingFormat::Word2vecText => Box::new(raw.split_whitespace()),
            EmbeddingFormat::Tsv => Box::new(raw.trim_end_matches(['\r', '\n']).split('\t')),
        };
        let token = fields.next().unwrap_or_default();
        if token.is_empty() || token.chars().any(char::is_whitespace) {
            return Err(Error::Parse {
                line,
                msg: format!("invalid token {token:?}"),
            });
        }
        let start = values.len();
        for field in fields {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("not a number: {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite { line });
            }
            values.push(v);
        }
        let found = values.len() - start;
        let expected = *dim.get_or_insert(found);
        if found != expected {
            return Err(Error::DimensionMismatch {
                line,
                expected,
                found,
            });
        }
        vocab.push(token.to_owned(), line)?;
    }

    if let Some((count, _)) = declared {
        if vocab.len() != count {
            return Err(Error::RowCount {
                expected: count,
                found: vocab.len(),
            });
        }
    }
    let dim = dim.unwrap_or(0);
    let data = Array2::from_shape_vec((vocab.len(), dim), values).map_err(|e| Error::Shape(e.to_string()))?;
    EmbeddingMatrix::new(data, vocab)
}

/// Renders embeddings in the given text format. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn format_embeddings(m: &EmbeddingMatrix, format: EmbeddingFormat) -> String {
    let sep = match format {
        EmbeddingFormat::Word2vecText => ' ',
        EmbeddingFormat::Tsv => '\t',
    };
    let mut out = String::new();
    if format == EmbeddingFormat::Word2vecText {
        let _ = writeln!(out, "{} {}", m.len(), m.dim());
    }
    for (i, row) in m.data.outer_iter().enumerate() {
        out.push_str(m.vocab.token(i));
        for v in row {
            out.push(sep);
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

pub fn save_embeddings(m: &EmbeddingMatrix, path: impl AsRef<Path>, format: EmbeddingFormat) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_embeddings(m, format)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    Unit,
    Center,
    #[default]
    UnitCenterUnit,
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Normalization::None),
            "unit" => Ok(Normalization::Unit),
            "center" => Ok(Normalization::Center),
            "unit_center_unit" => Ok(Normalization::UnitCenterUnit),
            other => Err(Error::Config(format!("unknown normalization {other:?}"))),
        }
    }
}

fn unit_rows(data: &mut Array2<f64>) -> Result<()> {
    for (i, mut row) in data.outer_iter_mut().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNorm { row: i });
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(())
}

fn center_columns(data: &mut Array2<f64>) {
    if data.nrows() == 0 {
        return;
    }
    let mean = data.mean_axis(Axis(0)).expect("non-empty");
    *data -= &mean;
}

/// Applies a row/column normalization scheme, returning a new matrix.
pub fn normalize(m: &EmbeddingMatrix, scheme: Normalization) -> Result<EmbeddingMatrix> {
    let mut data = m.data.clone();
    match scheme {
        Normalization::None => {}
        Normalization::Unit => unit_rows(&mut data)?,
        Normalization::Center => center_columns(&mut data),
        Normalization::UnitCenterUnit => {
            unit_rows(&mut data)?;
            center_columns(&mut data);
            unit_rows(&mut data)?;
        }
    }
    Ok(EmbeddingMatrix {
        data,
        vocab: m.vocab.clone(),
    })
}

/// Optional per-pair label.
#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    Score(f64),
    Class(String),
}

impl Label {
    fn parse(s: &str) -> Label {
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Label::Score(v),
            _ => Label::Class(s.to_owned()),
        }
    }
}

/// Supervised set of (source row, target row) pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Lexicon {
    pub pairs: Vec<(usize, usize)>,
    pub labels: Option<Vec<Label>>,
}

impl Lexicon {
    pub fn new(pairs: Vec<(usize, usize)>) -> Self {
        Lexicon { pairs, labels: None }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Checks every index against the sizes of the source and target matrices.
    pub fn validate(&self, n_src: usize, n_tgt: usize) -> Result<()> {
        for &(s, t) in &self.pairs {
            if s >= n_src {
                return Err(Error::IndexOutOfBounds { index: s, len: n_src });
            }
            if t >= n_tgt {
                return Err(Error::IndexOutOfBounds { index: t, len: n_tgt });
            }
        }
        Ok(())
    }

    pub fn sources(&self) -> impl Iterator<Item = usize> + '_ {
        self.pairs.iter().map(|p| p.0)
    }
}

/// Reads a `source<TAB>target[<TAB>label]` lexicon, resolving tokens
/// against the two vocabularies.
pub fn load_lexicon(path: impl AsRef<Path>, src: &Vocabulary, tgt: &Vocabulary) -> Result<Lexicon> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_lexicon(&text, src, tgt)
}

pub fn parse_lexicon(text: &str, src: &Vocabulary, tgt: &Vocabulary) -> Result<Lexicon> {
    let mut pairs = Vec::new();
    let mut labels = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').map(str::trim).collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(Error::Parse {
                line,
                msg: format!("expected 2 or 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let resolve = |vocab: &Vocabulary, tok: &str| {
            vocab.lookup(tok).ok_or_else(|| Error::UnknownToken {
                line,
                token: tok.to_owned(),
            })
        };
        pairs.push((resolve(src, fields[0])?, resolve(tgt, fields[1])?));
        labels.push(fields.get(2).map(|s| Label::parse(s)));
    }
    let labels = if labels.iter().all(Option::is_some) && !labels.is_empty() {
        Some(labels.into_iter().map(Option::unwrap).collect())
    } else if labels.iter().all(Option::is_none) {
        None
    } else {
        return Err(Error::Parse {
            line: 0,
            msg: "either all or no lexicon rows must carry a label".into(),
        });
    };
    Ok(Lexicon { pairs, labels })
}

pub fn format_lexicon(lex: &Lexicon, src: &Vocabulary, tgt: &Vocabulary) -> String {
    let mut out = String::new();
    for (i, &(s, t)) in lex.pairs.iter().enumerate() {
        let _ = write!(out, "{}\t{}", src.token(s), tgt.token(t));
        match lex.labels.as_ref().map(|l| &l[i]) {
            Some(Label::Score(v)) => {
                let _ = write!(out, "\t{v}");
            }
            Some(Label::Class(c)) => {
                let _ = write!(out, "\t{c}");
            }
            None => {}
        }
        out.push('\n');
    }
    out
}
