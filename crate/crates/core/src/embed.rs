//! Pre-trained word embeddings: loading, normalization, the `<unk>` vector,
//! and exhaustive nearest-neighbour decoding.
//!
//! # Text format
//!
//! word2vec text format: a header line `V m`, then `V` lines of
//! `word v1 ... vm`, space separated, UTF-8. Tables are written back with
//! 17 significant digits (`{:.16e}`), which round-trips `f64` exactly.
//!
//! # Reserved tokens
//!
//! Every table starts with `<s>`, `</s>`, `<unk>`, `<pad>` at ids 0..4.
//! With [`ReservedLayout::Appended`] (the default) the file vectors are
//! padded with three zero dimensions and `<s>`, `</s>`, `<pad>` are the unit
//! vectors on those three trailing dimensions, so they are orthogonal to
//! every word and to each other. With [`ReservedLayout::Random`] the
//! dimension is kept and the three tokens get fixed-seed random unit vectors.
//! `<unk>` starts as the normalized mean of all word rows; see
//! [`build_unk_embedding`] and [`EmbeddingTable::with_unk`].
//!
//! # Binary cache
//!
//! Little-endian: magic `SEQCEMB1`, `u32` version (1), `u64` rows, `u64` dim,
//! then per row a `u32` byte length and the UTF-8 word, then `rows * dim`
//! `f64` values in row-major order.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use log::warn;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use thiserror::Error;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const PAD: &str = "<pad>";
pub const RESERVED: [&str; 4] = [BOS, EOS, UNK, PAD];

pub const BOS_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const PAD_ID: usize = 3;

const CACHE_MAGIC: &[u8; 8] = b"SEQCEMB1";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: expected {expected} values, found {found}")]
    DimensionMismatch { line: usize, expected: usize, found: usize },
    #[error("line {line}: zero vector for `{word}` cannot be normalized")]
    ZeroVector { line: usize, word: String },
    #[error("duplicate word `{0}`")]
    DuplicateWord(String),
    #[error("unknown word `{0}`")]
    UnknownWord(String),
    #[error("query vector has zero norm")]
    ZeroQuery,
    #[error("query has dimension {found}, table has {expected}")]
    QueryDimension { expected: usize, found: usize },
    #[error("embedding table is empty")]
    Empty,
    #[error("k = {k} out of range 1..={len}")]
    KOutOfRange { k: usize, len: usize },
    #[error("mean embedding has norm {0:e}; <unk> is not representable")]
    DegenerateMean(f64),
    #[error("bad cache file: {0}")]
    Cache(String),
}

pub type Result<T> = std::result::Result<T, EmbedError>;

/// Immutable word -> unit vector map.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    words: Vec<String>,
    vectors: Array2<f64>,
    index: HashMap<String, usize>,
}

/// Scales `row` to unit norm. Rows already unit to within rounding are left
/// untouched so that reloading a written table is bit-exact.
fn normalize_row(mut row: ndarray::ArrayViewMut1<f64>) -> bool {
    let norm = row.dot(&row).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    if (norm - 1.0).abs() > 1e-12 {
        row.mapv_inplace(|x| x / norm);
    }
    true
}

impl EmbeddingTable {
    /// Builds a table, normalizing every row. Words must be unique and rows
    /// nonzero.
    pub fn new(words: Vec<String>, mut vectors: Array2<f64>) -> Result<Self> {
        assert_eq!(words.len(), vectors.nrows(), "one row per word");
        let mut index = HashMap::with_capacity(words.len());
        for (i, (word, row)) in words.iter().zip(vectors.axis_iter_mut(Axis(0))).enumerate() {
            if index.insert(word.clone(), i).is_some() {
                return Err(EmbedError::DuplicateWord(word.clone()));
            }
            if !normalize_row(row) {
                return Err(EmbedError::ZeroVector { line: i + 1, word: word.clone() });
            }
        }
        Ok(Self { words, vectors, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn vector(&self, id: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(id)
    }

    pub fn vectors(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    /// Stacks the rows for `ids` into a `ids.len() x dim` matrix.
    pub fn gather(&self, ids: &[usize]) -> Array2<f64> {
        self.vectors.select(Axis(0), ids)
    }

    /// Replaces the `<unk>` row.
    pub fn with_unk(mut self, unk: &[f64]) -> Result<Self> {
        let id = self.id(UNK).ok_or_else(|| EmbedError::UnknownWord(UNK.into()))?;
        if unk.len() != self.dim() {
            return Err(EmbedError::QueryDimension { expected: self.dim(), found: unk.len() });
        }
        let mut row = self.vectors.row_mut(id);
        row.assign(&ArrayView1::from(unk));
        if !normalize_row(row) {
            return Err(EmbedError::ZeroVector { line: id + 1, word: UNK.into() });
        }
        Ok(self)
    }

    /// A table whose rows follow `words`. Words missing here take `fallback`
    /// and are returned in the second element.
    pub fn select(&self, words: &[String], fallback: &[f64]) -> Result<(EmbeddingTable, Vec<String>)> {
        let mut data = Array2::zeros((words.len(), self.dim()));
        let mut missing = Vec::new();
        for (word, mut row) in words.iter().zip(data.axis_iter_mut(Axis(0))) {
            match self.id(word) {
                Some(id) => row.assign(&self.vector(id)),
                None => {
                    missing.push(word.clone());
                    row.assign(&ArrayView1::from(fallback));
                }
            }
        }
        Ok((EmbeddingTable::new(words.to_vec(), data)?, missing))
    }
}

/// Where the `<s>`, `</s>`, `<pad>` vectors live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReservedLayout {
    /// Three extra trailing dimensions, one per token.
    #[default]
    Appended,
    /// Same dimension as the file; random unit vectors from this seed.
    Random { seed: u64 },
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions<'a> {
    pub restrict_vocab: Option<&'a HashSet<String>>,
    pub reserved: ReservedLayout,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EmbedError + '_ {
    move |source| EmbedError::Io { path: path.display().to_string(), source }
}

/// Loads a word2vec text file and adds the reserved tokens.
pub fn load_embedding_table(path: &Path, options: &LoadOptions<'_>) -> Result<EmbeddingTable> {
    let file = File::open(path).map_err(io_err(path))?;
    read_word2vec_text(BufReader::new(file), options)
}

/// Parses word2vec text from any reader; see [`load_embedding_table`].
pub fn read_word2vec_text<R: BufRead>(reader: R, options: &LoadOptions<'_>) -> Result<EmbeddingTable> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(line) => line.map_err(|e| EmbedError::Parse { line: 1, msg: e.to_string() })?,
        None => return Err(EmbedError::Parse { line: 1, msg: "missing header".into() }),
    };
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (rows, dim) = match fields.as_slice() {
        [v, m] => match (v.parse::<usize>(), m.parse::<usize>()) {
            (Ok(v), Ok(m)) if m > 0 => (v, m),
            _ => return Err(EmbedError::Parse { line: 1, msg: format!("malformed header `{header}`") }),
        },
        _ => return Err(EmbedError::Parse { line: 1, msg: format!("malformed header `{header}`") }),
    };

    let mut words: Vec<String> = Vec::new();
    let mut data: Vec<f64> = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    let mut reserved_rows: [Option<Vec<f64>>; 4] = Default::default();
    let mut count = 0;
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line.map_err(|e| EmbedError::Parse { line: line_no, msg: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        count += 1;
        let mut parts = line.split(' ').filter(|s| !s.is_empty());
        let word = parts.next().unwrap_or_default().to_string();
        let values: Vec<f64> = parts
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|e| EmbedError::Parse { line: line_no, msg: format!("`{p}`: {e}") })
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(EmbedError::DimensionMismatch { line: line_no, expected: dim, found: values.len() });
        }
        if values.iter().all(|&x| x == 0.0) {
            return Err(EmbedError::ZeroVector { line: line_no, word });
        }
        if let Some(r) = RESERVED.iter().position(|&t| t == word) {
            if reserved_rows[r].is_none() {
                reserved_rows[r] = Some(values);
            }
            continue;
        }
        if let Some(keep) = options.restrict_vocab {
            if !keep.contains(&word) {
                continue;
            }
        }
        if !seen.insert(word.clone()) {
            warn!("line {line_no}: duplicate word `{word}`, keeping first occurrence");
            continue;
        }
        words.push(word);
        data.extend(values);
    }
    if count != rows {
        return Err(EmbedError::Parse {
            line: 1,
            msg: format!("header declares {rows} rows, file has {count}"),
        });
    }
    if reserved_rows.iter().all(Option::is_some) {
        // a table written by this module: reserved rows are taken as stored
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut stored: Vec<f64> = reserved_rows.into_iter().flatten().flatten().collect();
        stored.extend(data);
        all.extend(words);
        let n = all.len();
        return EmbeddingTable::new(all, Array2::from_shape_vec((n, dim), stored).expect("row-major data"));
    }
    if reserved_rows.iter().any(Option::is_some) {
        warn!("embedding file holds some but not all reserved tokens; their rows are ignored");
    }
    let body = Array2::from_shape_vec((words.len(), dim), data).expect("row-major data");
    with_reserved(words, body, options.reserved)
}

/// Prepends the reserved tokens to normalized word rows.
fn with_reserved(words: Vec<String>, mut body: Array2<f64>, layout: ReservedLayout) -> Result<EmbeddingTable> {
    for (i, row) in body.axis_iter_mut(Axis(0)).enumerate() {
        if !normalize_row(row) {
            return Err(EmbedError::ZeroVector { line: i + 2, word: words[i].clone() });
        }
    }
    let file_dim = body.ncols();
    let dim = match layout {
        ReservedLayout::Appended => file_dim + 3,
        ReservedLayout::Random { .. } => file_dim,
    };
    let n = words.len();
    let mut vectors = Array2::zeros((n + RESERVED.len(), dim));
    vectors.slice_mut(ndarray::s![RESERVED.len().., ..file_dim]).assign(&body);

    let mean = body.mean_axis(Axis(0));
    let mut unk = Array1::zeros(dim);
    if let Some(mean) = mean {
        unk.slice_mut(ndarray::s![..file_dim]).assign(&mean);
    }
    match layout {
        ReservedLayout::Appended => {
            vectors[[BOS_ID, file_dim]] = 1.0;
            vectors[[EOS_ID, file_dim + 1]] = 1.0;
            vectors[[PAD_ID, file_dim + 2]] = 1.0;
        }
        ReservedLayout::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for id in [BOS_ID, EOS_ID, PAD_ID] {
                for x in vectors.row_mut(id).iter_mut() {
                    *x = rng.gen_range(-1.0..1.0);
                }
            }
        }
    }
    if unk.dot(&unk) < 1e-24 {
        // no words, or a perfectly symmetric table: park <unk> on <pad>'s axis
        unk = vectors.row(PAD_ID).to_owned();
    }
    vectors.row_mut(UNK_ID).assign(&unk);

    let mut all_words: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    all_words.extend(words);
    EmbeddingTable::new(all_words, vectors)
}

/// Writes word2vec text with 17 significant digits per value.
pub fn write_word2vec_text<W: Write>(table: &EmbeddingTable, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{} {}", table.len(), table.dim())?;
    for (word, row) in table.words.iter().zip(table.vectors.axis_iter(Axis(0))) {
        write!(out, "{word}")?;
        for x in row {
            write!(out, " {x:.16e}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn write_cache<W: Write>(table: &EmbeddingTable, out: W) -> std::io::Result<()> {
    let mut out = BufWriter::new(out);
    out.write_all(CACHE_MAGIC)?;
    out.write_all(&CACHE_VERSION.to_le_bytes())?;
    out.write_all(&(table.len() as u64).to_le_bytes())?;
    out.write_all(&(table.dim() as u64).to_le_bytes())?;
    for w in &table.words {
        out.write_all(&(w.len() as u32).to_le_bytes())?;
        out.write_all(w.as_bytes())?;
    }
    for x in table.vectors.iter() {
        out.write_all(&x.to_le_bytes())?;
    }
    out.flush()
}

pub fn read_cache<R: Read>(mut input: R) -> Result<EmbeddingTable> {
    let bad = |e: std::io::Error| EmbedError::Cache(e.to_string());
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(bad)?;
    if &magic != CACHE_MAGIC {
        return Err(EmbedError::Cache("wrong magic".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    input.read_exact(&mut b4).map_err(bad)?;
    let version = u32::from_le_bytes(b4);
    if version != CACHE_VERSION {
        return Err(EmbedError::Cache(format!("unsupported version {version}")));
    }
    input.read_exact(&mut b8).map_err(bad)?;
    let rows = u64::from_le_bytes(b8) as usize;
    input.read_exact(&mut b8).map_err(bad)?;
    let dim = u64::from_le_bytes(b8) as usize;
    let mut words = Vec::with_capacity(rows);
    for _ in 0..rows {
        input.read_exact(&mut b4).map_err(bad)?;
        let mut buf = vec![0u8; u32::from_le_bytes(b4) as usize];
        input.read_exact(&mut buf).map_err(bad)?;
        words.push(String::from_utf8(buf).map_err(|e| EmbedError::Cache(e.to_string()))?);
    }
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows * dim {
        input.read_exact(&mut b8).map_err(bad)?;
        data.push(f64::from_le_bytes(b8));
    }
    EmbeddingTable::new(words, Array2::from_shape_vec((rows, dim), data).expect("shape"))
}

/// Normalized mean of the rows of `full_table` whose words are not in
/// `train_vocab` (reserved tokens never count). Falls back to the mean of
/// all word rows when every word is in the training vocabulary.
pub fn build_unk_embedding(full_table: &EmbeddingTable, train_vocab: &HashSet<String>) -> Result<Vec<f64>> {
    let words: Vec<usize> = (0..full_table.len())
        .filter(|&i| !RESERVED.contains(&full_table.word(i)))
        .collect();
    if words.is_empty() {
        return Err(EmbedError::Empty);
    }
    let outside: Vec<usize> = words
        .iter()
        .copied()
        .filter(|&i| !train_vocab.contains(full_table.word(i)))
        .collect();
    let rows = if outside.is_empty() { &words } else { &outside };
    let mut mean = Array1::<f64>::zeros(full_table.dim());
    for &i in rows {
        mean += &full_table.vector(i);
    }
    mean /= rows.len() as f64;
    let norm = mean.dot(&mean).sqrt();
    if norm < 1e-12 {
        return Err(EmbedError::DegenerateMean(norm));
    }
    Ok(mean.iter().map(|x| x / norm).collect())
}

/// A decoded word and its score `e_hat^T e(w)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeResult {
    pub word_id: usize,
    pub score: f64,
}

fn scores(e_hat: &[f64], table: &EmbeddingTable) -> Result<Array1<f64>> {
    if table.is_empty() {
        return Err(EmbedError::Empty);
    }
    if e_hat.len() != table.dim() {
        return Err(EmbedError::QueryDimension { expected: table.dim(), found: e_hat.len() });
    }
    if e_hat.iter().all(|&x| x == 0.0) {
        return Err(EmbedError::ZeroQuery);
    }
    Ok(table.vectors.dot(&ArrayView1::from(e_hat)))
}

/// The word maximizing `e_hat^T e(w)`. Since every row is unit norm this is
/// also the cosine nearest neighbour and the vMF-density argmax. Ties go to
/// the lowest id.
pub fn nearest_word(e_hat: &[f64], table: &EmbeddingTable) -> Result<DecodeResult> {
    let s = scores(e_hat, table)?;
    let mut best = DecodeResult { word_id: 0, score: s[0] };
    for (i, &score) in s.iter().enumerate().skip(1) {
        if score > best.score {
            best = DecodeResult { word_id: i, score };
        }
    }
    Ok(best)
}

/// Top `k` words by score, descending, ties by id.
pub fn knn_words(e_hat: &[f64], table: &EmbeddingTable, k: usize) -> Result<Vec<DecodeResult>> {
    if k == 0 || k > table.len() {
        return Err(EmbedError::KOutOfRange { k, len: table.len() });
    }
    let s = scores(e_hat, table)?;
    let mut all: Vec<DecodeResult> =
        s.iter().enumerate().map(|(word_id, &score)| DecodeResult { word_id, score }).collect();
    all.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.word_id.cmp(&b.word_id)));
    all.truncate(k);
    Ok(all)
}
