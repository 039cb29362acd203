use std::collections::HashSet;
use std::io::Write;

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use seqcont::embed::{
    knn_words, load_embedding_table, nearest_word, read_word2vec_text, write_word2vec_text, EmbeddingTable,
    LoadOptions, RESERVED,
};
use seqcont::losses::{cosine_loss, nllvmf_loss, LossConfig, LossVariant};
use seqcont::specfun::{CmEvalMode, VmfParams};
use seqcont_oracle::brute;

fn gaussian(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    (0..m).map(|_| rng.sample(StandardNormal)).collect()
}

fn random_table(rng: &mut ChaCha8Rng, v: usize, m: usize) -> EmbeddingTable {
    let data: Vec<f64> = (0..v * m).map(|_| rng.sample(StandardNormal)).collect();
    let words = (0..v).map(|i| format!("w{i}")).collect();
    EmbeddingTable::new(words, Array2::from_shape_vec((v, m), data).unwrap()).unwrap()
}

#[test]
fn decoders_agree_on_large_random_table() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = 32;
    let table = random_table(&mut rng, 10_000, m);
    let cfg = LossConfig::new(LossVariant::NllVmf, m);
    for _ in 0..1000 {
        let q = gaussian(&mut rng, m);
        let best = nearest_word(&q, &table).unwrap().word_id;
        let mut cos_best = (f64::INFINITY, 0);
        let mut density_best = (f64::NEG_INFINITY, 0);
        let vmf = VmfParams::from_vector(&q).unwrap();
        for w in 0..table.len() {
            let e = table.vector(w);
            let e = e.as_slice().unwrap();
            let c = cosine_loss(&q, e).unwrap().value;
            if c < cos_best.0 {
                cos_best = (c, w);
            }
            let d = -nllvmf_loss(&q, e, &cfg).unwrap().value;
            if d > density_best.0 {
                density_best = (d, w);
            }
            if w % 997 == 0 {
                // the density helper agrees with the negated loss
                let ld = vmf.log_density(e, CmEvalMode::Exact).unwrap();
                assert!((ld - d).abs() < 1e-10 * d.abs().max(1.0));
            }
        }
        assert_eq!(best, cos_best.1);
        assert_eq!(best, density_best.1);
    }
}

#[test]
fn knn_matches_brute_force_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let table = random_table(&mut rng, 5, 3);
        let q = gaussian(&mut rng, 3);
        let scores: Vec<f64> = (0..5).map(|w| table.vector(w).dot(&ndarray::ArrayView1::from(&q))).collect();
        let want = brute::rank_desc(&scores);
        let got: Vec<usize> = knn_words(&q, &table, 5).unwrap().iter().map(|r| r.word_id).collect();
        assert_eq!(got, want);
        let k = rng.gen_range(1..=5);
        let top: Vec<usize> = knn_words(&q, &table, k).unwrap().iter().map(|r| r.word_id).collect();
        assert_eq!(top, want[..k]);
    }
}

#[test]
fn exact_match_query_scores_its_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let table = random_table(&mut rng, 300, 16);
    for w in [0, 17, 299] {
        let q: Vec<f64> = table.vector(w).iter().map(|x| 2.5 * x).collect();
        let r = nearest_word(&q, &table).unwrap();
        assert_eq!(r.word_id, w);
        assert!((r.score - 2.5).abs() < 1e-12);
    }
}

#[test]
fn loads_from_a_file_with_restriction() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, "3 2\nho 3 4\nhi 1 1\nhe -1 0").unwrap();
    let all = load_embedding_table(f.path(), &LoadOptions::default()).unwrap();
    assert_eq!(all.len(), 3 + RESERVED.len());
    assert_eq!(all.vector(all.id("ho").unwrap()).to_vec(), vec![0.6, 0.8, 0.0, 0.0, 0.0]);
    let keep: HashSet<String> = ["hi".to_string(), "absent".to_string()].into();
    let t = load_embedding_table(f.path(), &LoadOptions { restrict_vocab: Some(&keep), ..Default::default() }).unwrap();
    let mut words: Vec<&str> = t.words().iter().map(String::as_str).collect();
    words.sort();
    assert_eq!(words, vec!["</s>", "<pad>", "<s>", "<unk>", "hi"]);
    assert!(load_embedding_table(&f.path().with_extension("missing"), &LoadOptions::default()).is_err());
}

fn table_text(rows: &[Vec<f64>]) -> String {
    let mut s = format!("{} {}\n", rows.len(), rows[0].len());
    for (i, r) in rows.iter().enumerate() {
        s.push_str(&format!("w{i}"));
        for x in r {
            s.push_str(&format!(" {x}"));
        }
        s.push('\n');
    }
    s
}

fn rows_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..6, 1usize..8).prop_flat_map(|(m, v)| {
        prop::collection::vec(
            prop::collection::vec(-1e3f64..1e3, m).prop_filter("nonzero", |r| r.iter().any(|x| x.abs() > 1e-6)),
            v,
        )
    })
}

proptest! {
    #[test]
    fn text_round_trip_is_bit_exact(rows in rows_strategy()) {
        let loaded = read_word2vec_text(table_text(&rows).as_bytes(), &LoadOptions::default()).unwrap();
        let mut out = Vec::new();
        write_word2vec_text(&loaded, &mut out).unwrap();
        let again = read_word2vec_text(out.as_slice(), &LoadOptions::default()).unwrap();
        prop_assert_eq!(again.words(), loaded.words());
        for (a, b) in again.vectors().iter().zip(loaded.vectors().iter()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rows_are_unit_norm(rows in rows_strategy()) {
        let t = read_word2vec_text(table_text(&rows).as_bytes(), &LoadOptions::default()).unwrap();
        for i in 0..t.len() {
            let n = t.vector(i).dot(&t.vector(i)).sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn nearest_word_is_scale_invariant(seed in 0u64..500, c in 1e-6f64..1e6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_table(&mut rng, 50, 6);
        let q = gaussian(&mut rng, 6);
        let scaled: Vec<f64> = q.iter().map(|x| x * c).collect();
        let a = nearest_word(&q, &t).unwrap();
        let b = nearest_word(&scaled, &t).unwrap();
        prop_assert_eq!(a.word_id, b.word_id);
        let kappa = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(a.score.abs() <= kappa * (1.0 + 1e-12));
    }
}
