//! Parallel corpora: vocabularies, padded batches, bilingual dictionaries,
//! and attention-based `<unk>` replacement.
//!
//! Text is UTF-8, one whitespace-tokenized sentence per line; the source and
//! target files of a corpus are line-aligned.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::embed::{BOS_ID, EOS_ID, PAD_ID, RESERVED, UNK, UNK_ID};

pub const DEFAULT_VOCAB_CAP: usize = 50_000;
pub const DEFAULT_MAX_LEN: usize = 100;
/// Batches per length-sorted bucket.
const BUCKET_BATCHES: usize = 20;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parallel files differ in length: {source_lines} source lines, {target_lines} target lines")]
    LineCountMismatch { source_lines: usize, target_lines: usize },
    #[error("no sentence pairs left after filtering")]
    Empty,
    #[error("batch size must be at least 1")]
    BatchSize,
    #[error("attention is {rows}x{cols}, expected {hyp}x{src}")]
    AttentionShape { rows: usize, cols: usize, hyp: usize, src: usize },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| CorpusError::Io { path: path.display().to_string(), source })
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    open(path)?
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|source| CorpusError::Io { path: path.display().to_string(), source })
}

pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_owned).collect()
}

/// Reads a tokenized corpus file.
pub fn read_sentences(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(read_lines(path)?.iter().map(|l| tokenize(l)).collect())
}

/// Reads line-aligned source and target files.
pub fn read_parallel(source: &Path, target: &Path) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let s = read_sentences(source)?;
    let t = read_sentences(target)?;
    if s.len() != t.len() {
        return Err(CorpusError::LineCountMismatch { source_lines: s.len(), target_lines: t.len() });
    }
    Ok(s.into_iter().zip(t).collect())
}

/// Word <-> id map with the reserved tokens at ids 0..4.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// The `cap` most frequent types of `sentences`; frequency ties go to the
    /// type seen first. Reserved tokens in the text are not counted.
    pub fn from_sentences<'a, I, S>(sentences: I, cap: usize) -> Self
    where
        I: IntoIterator<Item = &'a S>,
        S: AsRef<[String]> + 'a + ?Sized,
    {
        let mut order: Vec<String> = Vec::new();
        let mut freq: HashMap<String, (u64, usize)> = HashMap::new();
        for sentence in sentences {
            for w in sentence.as_ref() {
                if RESERVED.contains(&w.as_str()) {
                    continue;
                }
                let n = order.len();
                let entry = freq.entry(w.clone()).or_insert_with(|| {
                    order.push(w.clone());
                    (0, n)
                });
                entry.0 += 1;
            }
        }
        let mut ranked: Vec<(String, u64, usize)> =
            freq.into_iter().map(|(w, (count, first))| (w, count, first)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        ranked.truncate(cap);

        let mut words: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0; RESERVED.len()];
        for (w, c, _) in ranked {
            words.push(w);
            counts.push(c);
        }
        Self::with_counts(words, counts)
    }

    /// Rebuilds a vocabulary from its word list, which must start with the
    /// reserved tokens.
    pub fn from_words(words: Vec<String>) -> Option<Self> {
        if words.len() < RESERVED.len() || words.iter().zip(RESERVED).any(|(w, r)| w != r) {
            return None;
        }
        let counts = vec![0; words.len()];
        let v = Self::with_counts(words, counts);
        (v.index.len() == v.words.len()).then_some(v)
    }

    fn with_counts(words: Vec<String>, counts: Vec<u64>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, counts, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    /// Frequency in the training text; zero for reserved tokens.
    pub fn count(&self, id: usize) -> u64 {
        self.counts[id]
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// The id of `word`, or `<unk>`.
    pub fn id(&self, word: &str) -> usize {
        self.get(word).unwrap_or(UNK_ID)
    }

    pub fn encode<S: AsRef<str>>(&self, sentence: &[S]) -> Vec<usize> {
        sentence.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.words[i].clone()).collect()
    }
}

/// [`Vocabulary::from_sentences`] over a corpus file.
pub fn build_vocab(path: &Path, cap: usize) -> Result<Vocabulary> {
    let sentences = read_sentences(path)?;
    Ok(Vocabulary::from_sentences(&sentences, cap))
}

/// A sentence pair as token ids, without `<s>`/`</s>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

pub fn encode_pairs(pairs: &[(Vec<String>, Vec<String>)], src: &Vocabulary, tgt: &Vocabulary) -> Vec<SentencePair> {
    pairs.iter().map(|(s, t)| SentencePair { src: src.encode(s), tgt: tgt.encode(t) }).collect()
}

/// Padded id matrices for one batch. Masks are 1.0 on real tokens and 0.0
/// on padding. The decoder reads `tgt_in = <s> y` and predicts
/// `tgt_out = y </s>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Positions of these pairs in the input list.
    pub indices: Vec<usize>,
    pub src: Array2<usize>,
    pub src_mask: Array2<f64>,
    pub tgt_in: Array2<usize>,
    pub tgt_out: Array2<usize>,
    pub tgt_mask: Array2<f64>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&SentencePair], indices: Vec<usize>) -> Self {
        let b = pairs.len();
        let ls = pairs.iter().map(|p| p.src.len()).max().unwrap_or(0);
        let lt = pairs.iter().map(|p| p.tgt.len() + 1).max().unwrap_or(1);
        let mut src = Array2::from_elem((b, ls), PAD_ID);
        let mut src_mask = Array2::zeros((b, ls));
        let mut tgt_in = Array2::from_elem((b, lt), PAD_ID);
        let mut tgt_out = Array2::from_elem((b, lt), PAD_ID);
        let mut tgt_mask = Array2::zeros((b, lt));
        for (i, p) in pairs.iter().enumerate() {
            for (j, &w) in p.src.iter().enumerate() {
                src[[i, j]] = w;
                src_mask[[i, j]] = 1.0;
            }
            tgt_in[[i, 0]] = BOS_ID;
            for (j, &w) in p.tgt.iter().enumerate() {
                tgt_in[[i, j + 1]] = w;
                tgt_out[[i, j]] = w;
            }
            tgt_out[[i, p.tgt.len()]] = EOS_ID;
            for j in 0..=p.tgt.len() {
                tgt_mask[[i, j]] = 1.0;
            }
        }
        Self { indices, src, src_mask, tgt_in, tgt_out, tgt_mask }
    }

    pub fn size(&self) -> usize {
        self.indices.len()
    }

    /// Real source tokens.
    pub fn source_tokens(&self) -> usize {
        self.src_mask.sum() as usize
    }

    /// Real target tokens, not counting the appended `</s>`.
    pub fn target_tokens(&self) -> usize {
        self.tgt_mask.sum() as usize - self.size()
    }
}

/// Pairs dropped while batching; printed as JSON on standard error.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SkipReport {
    pub total: usize,
    pub kept: usize,
    pub too_long: usize,
    pub empty_source: usize,
    pub max_len: usize,
}

impl SkipReport {
    pub fn emit(&self) {
        eprintln!("{}", serde_json::json!({ "skip_report": self }));
    }
}

/// Drops pairs with either side longer than `max_len` (and pairs with an
/// empty source), then batches. Pairs are shuffled, cut into buckets of
/// `BUCKET_BATCHES` batches, sorted by source length inside each bucket, and
/// the resulting batches are shuffled again. The order depends only on `seed`.
pub fn make_batches(
    pairs: &[SentencePair],
    batch_size: usize,
    max_len: usize,
    seed: u64,
) -> Result<(Vec<Batch>, SkipReport)> {
    if batch_size == 0 {
        return Err(CorpusError::BatchSize);
    }
    let mut report = SkipReport { total: pairs.len(), max_len, ..Default::default() };
    let mut keep: Vec<usize> = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        if p.src.len() > max_len || p.tgt.len() > max_len {
            report.too_long += 1;
        } else if p.src.is_empty() {
            report.empty_source += 1;
        } else {
            keep.push(i);
        }
    }
    report.kept = keep.len();
    if keep.is_empty() {
        return Err(CorpusError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    keep.shuffle(&mut rng);
    let mut batches = Vec::with_capacity(keep.len().div_ceil(batch_size));
    for bucket in keep.chunks_mut(batch_size * BUCKET_BATCHES) {
        bucket.sort_by_key(|&i| pairs[i].src.len());
        for chunk in bucket.chunks(batch_size) {
            let members: Vec<&SentencePair> = chunk.iter().map(|&i| &pairs[i]).collect();
            batches.push(Batch::from_pairs(&members, chunk.to_vec()));
        }
    }
    batches.shuffle(&mut rng);
    Ok((batches, report))
}

/// Consecutive batches in input order, for evaluation.
pub fn sequential_batches(pairs: &[SentencePair], batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(CorpusError::BatchSize);
    }
    let idx: Vec<usize> = (0..pairs.len()).filter(|&i| !pairs[i].src.is_empty()).collect();
    Ok(idx
        .chunks(batch_size)
        .map(|c| Batch::from_pairs(&c.iter().map(|&i| &pairs[i]).collect::<Vec<_>>(), c.to_vec()))
        .collect())
}

/// Source word -> single best target word.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BilingualDictionary {
    map: HashMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DictionaryReport {
    pub entries: usize,
    pub duplicates: usize,
    pub malformed_lines: Vec<usize>,
}

impl BilingualDictionary {
    /// Parses `source<TAB>target` lines. Malformed lines are skipped and
    /// listed in the report; on duplicate keys the first entry wins.
    pub fn parse<R: BufRead>(reader: R) -> std::io::Result<(Self, DictionaryReport)> {
        let mut map = HashMap::new();
        let mut report = DictionaryReport::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
            match fields.as_slice() {
                [s, t] if !s.is_empty() && !t.is_empty() => {
                    if map.contains_key(*s) {
                        report.duplicates += 1;
                    } else {
                        map.insert(s.to_string(), t.to_string());
                    }
                }
                _ => report.malformed_lines.push(i + 1),
            }
        }
        report.entries = map.len();
        Ok((Self { map }, report))
    }

    pub fn lookup(&self, word: &str) -> Option<&str> {
        self.map.get(word).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl FromIterator<(String, String)> for BilingualDictionary {
    fn from_iter<I: IntoIterator<Item = (String, String)>>(iter: I) -> Self {
        let mut map = HashMap::new();
        for (k, v) in iter {
            map.entry(k).or_insert(v);
        }
        Self { map }
    }
}

/// Loads a TSV dictionary and prints its ingest report as JSON on standard
/// error.
pub fn load_dictionary(path: &Path) -> Result<BilingualDictionary> {
    let (dict, report) = BilingualDictionary::parse(open(path)?)
        .map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
    eprintln!("{}", serde_json::json!({ "dictionary_report": report }));
    Ok(dict)
}

/// Replaces every `<unk>` in `hyp` by the dictionary translation of the
/// source word it attends to most, or by that source word itself. Attention
/// ties go to the lowest source position.
pub fn replace_unks(
    hyp: &[String],
    src: &[String],
    attention: ArrayView2<'_, f64>,
    dict: &BilingualDictionary,
) -> Result<Vec<String>> {
    let (rows, cols) = attention.dim();
    if rows != hyp.len() || cols != src.len() {
        return Err(CorpusError::AttentionShape { rows, cols, hyp: hyp.len(), src: src.len() });
    }
    Ok(hyp
        .iter()
        .zip(attention.rows())
        .map(|(w, row)| {
            if w != UNK || src.is_empty() {
                return w.clone();
            }
            let mut best = 0;
            for (j, &a) in row.iter().enumerate() {
                if a > row[best] {
                    best = j;
                }
            }
            dict.lookup(&src[best]).unwrap_or(&src[best]).to_string()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sent(s: &str) -> Vec<String> {
        tokenize(s)
    }

    fn strings(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn vocab_frequency_and_ties() {
        let v = Vocabulary::from_sentences(&[sent("a a b")], 1);
        assert_eq!(&v.words()[4..], &["a"]);
        assert_eq!(v.len(), 5);
        let v = Vocabulary::from_sentences(&[sent("a b")], 2);
        assert_eq!(&v.words()[4..], &["a", "b"]);
        let v = Vocabulary::from_sentences(&[sent("c b"), sent("b a a c")], 10);
        assert_eq!(&v.words()[4..], &["c", "b", "a"]);
        assert_eq!(v.count(4), 2);
    }

    #[test]
    fn vocab_reserved_ids_and_unk() {
        let v = Vocabulary::from_sentences(&[sent("x <unk> y")], 10);
        assert_eq!(&v.words()[..4], &RESERVED.map(String::from));
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("zzz"), UNK_ID);
        assert_eq!(v.decode(&v.encode(&sent("x zzz y"))), sent("x <unk> y"));
        assert!(Vocabulary::from_words(strings(&["a"])).is_none());
        assert_eq!(Vocabulary::from_words(v.words().to_vec()).unwrap().words(), v.words());
    }

    fn pair(ls: usize, lt: usize) -> SentencePair {
        SentencePair { src: (10..10 + ls).collect(), tgt: (20..20 + lt).collect() }
    }

    #[test]
    fn padding_arithmetic() {
        let (batches, report) = make_batches(&[pair(3, 2), pair(5, 4)], 2, 100, 0).unwrap();
        assert_eq!(batches.len(), 1);
        let b = &batches[0];
        assert_eq!(b.src.dim(), (2, 5));
        assert_eq!(b.src_mask.len() - b.source_tokens(), 2);
        assert_eq!(report.kept, 2);
        let short = b.indices.iter().position(|&i| i == 0).unwrap();
        assert_eq!(b.tgt_in.row(short).to_vec(), vec![BOS_ID, 20, 21, PAD_ID, PAD_ID]);
        assert_eq!(b.tgt_out.row(short).to_vec(), vec![20, 21, EOS_ID, PAD_ID, PAD_ID]);
        assert_eq!(b.tgt_mask.row(short).to_vec(), vec![1.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn long_pairs_are_dropped_and_reported() {
        let (batches, report) = make_batches(&[pair(101, 3), pair(4, 4), pair(2, 101)], 8, 100, 0).unwrap();
        assert_eq!(report, SkipReport { total: 3, kept: 1, too_long: 2, empty_source: 0, max_len: 100 });
        assert_eq!(batches.len(), 1);
        assert!(matches!(make_batches(&[pair(101, 1)], 8, 100, 0), Err(CorpusError::Empty)));
        assert!(matches!(make_batches(&[pair(1, 1)], 0, 100, 0), Err(CorpusError::BatchSize)));
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"too_long\":2"));
    }

    #[test]
    fn batching_is_deterministic() {
        let pairs: Vec<SentencePair> = (0..300).map(|i| pair(1 + i % 17, 1 + i % 5)).collect();
        let a = make_batches(&pairs, 7, 100, 42).unwrap().0;
        let b = make_batches(&pairs, 7, 100, 42).unwrap().0;
        let c = make_batches(&pairs, 7, 100, 43).unwrap().0;
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn dictionary_parsing() {
        let (d, r) = BilingualDictionary::parse("chat\tcat\nchat\tkitty\nbad line\n\nchien\tdog\n".as_bytes()).unwrap();
        assert_eq!(d.lookup("chat"), Some("cat"));
        assert_eq!(d.lookup("chien"), Some("dog"));
        assert_eq!(r, DictionaryReport { entries: 2, duplicates: 1, malformed_lines: vec![3] });
        let (empty, _) = BilingualDictionary::parse("".as_bytes()).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn unk_replacement() {
        let dict: BilingualDictionary = [("chat".to_string(), "cat".to_string())].into_iter().collect();
        let hyp = strings(&["<unk>"]);
        let src = strings(&["chat"]);
        let att = array![[1.0]];
        assert_eq!(replace_unks(&hyp, &src, att.view(), &dict).unwrap(), strings(&["cat"]));
        let none = BilingualDictionary::default();
        assert_eq!(replace_unks(&hyp, &src, att.view(), &none).unwrap(), strings(&["chat"]));
        let plain = strings(&["the", "cat"]);
        let att2 = array![[0.5], [0.5]];
        assert_eq!(replace_unks(&plain, &src, att2.view(), &dict).unwrap(), plain);
        assert!(replace_unks(&plain, &src, att.view(), &dict).is_err());

        let src = strings(&["le", "chat", "noir"]);
        let hyp = strings(&["the", "<unk>", "<unk>"]);
        let att = array![[0.8, 0.1, 0.1], [0.2, 0.4, 0.4], [0.1, 0.2, 0.7]];
        assert_eq!(replace_unks(&hyp, &src, att.view(), &dict).unwrap(), strings(&["the", "cat", "noir"]));
    }
}
