//! Deterministic toy translation tasks.
//!
//! * copy: 200 pairs over 50 words, the target repeats the source.
//! * lexicon: a fixed random one-to-one word lexicon applied token by token;
//!   2,000 training and 200 dev pairs over 100 source and 100 target words,
//!   with Zipf-distributed word frequencies.
//!
//! Embeddings for the target words are random unit vectors, emitted in
//! word2vec text format.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::corpus::{encode_pairs, SentencePair, Vocabulary, DEFAULT_VOCAB_CAP};
use crate::embed::{read_word2vec_text, EmbedError, EmbeddingTable, LoadOptions, RESERVED};
use ndarray::Array2;

pub type Pair = (Vec<String>, Vec<String>);

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub train: Vec<Pair>,
    pub dev: Vec<Pair>,
    pub target_words: Vec<String>,
}

pub const COPY_PAIRS: usize = 200;
pub const COPY_VOCAB: usize = 50;
pub const LEXICON_TRAIN: usize = 2000;
pub const LEXICON_DEV: usize = 200;
pub const LEXICON_VOCAB: usize = 100;

fn words(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

pub fn copy_task(seed: u64) -> Task {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = words("w", COPY_VOCAB);
    let make = |rng: &mut ChaCha8Rng| -> Pair {
        let len = rng.gen_range(3..=8);
        let s: Vec<String> = (0..len).map(|_| vocab.choose(rng).unwrap().clone()).collect();
        (s.clone(), s)
    };
    let train = (0..COPY_PAIRS).map(|_| make(&mut rng)).collect();
    let dev = (0..COPY_PAIRS / 10).map(|_| make(&mut rng)).collect();
    Task { train, dev, target_words: vocab }
}

pub fn lexicon_task(seed: u64) -> Task {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src = words("s", LEXICON_VOCAB);
    let tgt = words("t", LEXICON_VOCAB);
    let mut lexicon: Vec<usize> = (0..LEXICON_VOCAB).collect();
    lexicon.shuffle(&mut rng);
    let zipf = WeightedIndex::new((1..=LEXICON_VOCAB).map(|r| 1.0 / r as f64)).expect("positive weights");
    let make = |rng: &mut ChaCha8Rng| -> Pair {
        let len = rng.gen_range(3..=10);
        let ids: Vec<usize> = (0..len).map(|_| zipf.sample(rng)).collect();
        (ids.iter().map(|&i| src[i].clone()).collect(), ids.iter().map(|&i| tgt[lexicon[i]].clone()).collect())
    };
    let train = (0..LEXICON_TRAIN).map(|_| make(&mut rng)).collect();
    let dev = (0..LEXICON_DEV).map(|_| make(&mut rng)).collect();
    Task { train, dev, target_words: tgt }
}

/// word2vec text for `words` with random unit vectors of dimension `dim`.
pub fn random_embeddings_text(words: &[String], dim: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = format!("{} {}\n", words.len(), dim);
    for w in words {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.push_str(w);
        for x in v {
            out.push_str(&format!(" {:.16e}", x / n));
        }
        out.push('\n');
    }
    out
}

/// `n` rows of random unit vectors named `<s>`, `</s>`, `<unk>`, `<pad>`,
/// `w4`, `w5`, ...
pub fn random_table(n: usize, dim: usize, seed: u64) -> Result<EmbeddingTable, EmbedError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = (0..n).map(|i| RESERVED.get(i).map_or_else(|| format!("w{i}"), |r| r.to_string())).collect();
    let data = Array2::from_shape_simple_fn((n, dim), || rng.sample::<f64, _>(StandardNormal));
    EmbeddingTable::new(words, data)
}

/// A task encoded against its vocabularies. The target vocabulary follows
/// the table order, so target ids index table rows.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub table: EmbeddingTable,
    pub train: Vec<SentencePair>,
    pub dev: Vec<SentencePair>,
}

/// Encodes `task` with a source vocabulary built from its training side and
/// a random target embedding table of dimension `dim` (plus the reserved
/// dimensions).
pub fn prepare(task: &Task, dim: usize, seed: u64) -> Result<Prepared, EmbedError> {
    let text = random_embeddings_text(&task.target_words, dim, seed);
    let table = read_word2vec_text(text.as_bytes(), &LoadOptions::default())?;
    let tgt_vocab = Vocabulary::from_words(table.words().to_vec()).expect("table starts with the reserved tokens");
    let src_vocab = Vocabulary::from_sentences(task.train.iter().map(|p| &p.0), DEFAULT_VOCAB_CAP);
    let train = encode_pairs(&task.train, &src_vocab, &tgt_vocab);
    let dev = encode_pairs(&task.dev, &src_vocab, &tgt_vocab);
    Ok(Prepared { src_vocab, tgt_vocab, table, train, dev })
}

/// One sentence per line, tokens separated by single spaces.
pub fn sentences_text<'a>(sentences: impl IntoIterator<Item = &'a Vec<String>>) -> String {
    let mut out = String::new();
    for s in sentences {
        out.push_str(&s.join(" "));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_targets_repeat_sources() {
        let t = copy_task(1);
        assert_eq!(t.train.len(), COPY_PAIRS);
        assert!(t.train.iter().all(|(s, d)| s == d && (3..=8).contains(&s.len())));
        assert_eq!(copy_task(1), t);
    }

    #[test]
    fn lexicon_is_a_consistent_bijection() {
        let t = lexicon_task(2);
        assert_eq!((t.train.len(), t.dev.len()), (LEXICON_TRAIN, LEXICON_DEV));
        let mut map = std::collections::HashMap::new();
        for (s, d) in t.train.iter().chain(&t.dev) {
            assert_eq!(s.len(), d.len());
            for (a, b) in s.iter().zip(d) {
                assert_eq!(map.entry(a.clone()).or_insert_with(|| b.clone()), b);
            }
        }
        let mut images: Vec<&String> = map.values().collect();
        images.sort();
        images.dedup();
        assert_eq!(images.len(), map.len());
    }

    #[test]
    fn random_table_shape() {
        let t = random_table(10, 3, 1).unwrap();
        assert_eq!((t.len(), t.dim()), (10, 3));
        assert_eq!(t.id("<pad>"), Some(3));
        assert_eq!(t.id("w9"), Some(9));
    }

    #[test]
    fn prepared_targets_index_the_table() {
        let p = prepare(&lexicon_task(3), 8, 4).unwrap();
        assert_eq!(p.table.words(), p.tgt_vocab.words());
        assert_eq!(p.table.dim(), 8 + 3);
        assert!(p.train.iter().flat_map(|s| &s.tgt).all(|&i| i >= 4));
    }
}
