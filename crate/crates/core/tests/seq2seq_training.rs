use seqcont::corpus::{make_batches, Batch, SentencePair};
use seqcont::embed::{EOS_ID, PAD_ID, RESERVED};
use seqcont::losses::{LossConfig, LossVariant};
use seqcont::seq2seq::optim::Adam;
use seqcont::seq2seq::{init_model, train_batch, HeadKind, HeadOutput, ModelConfig, Objective, Seq2SeqModel};
use seqcont::synthetic::{self, Prepared};

const LR_CONTINUOUS: f64 = 0.0005;
const LR_SOFTMAX: f64 = 0.0002;

fn config(p: &Prepared, head: HeadKind, tied: bool, hidden: usize) -> ModelConfig {
    ModelConfig {
        hidden,
        input_emb: 16,
        output_dim: p.table.dim(),
        head,
        tied,
        src_vocab: p.src_vocab.len(),
        tgt_vocab: p.tgt_vocab.len(),
        ..ModelConfig::default()
    }
}

fn objective(head: HeadKind, m: usize) -> Objective {
    match head {
        HeadKind::Softmax => Objective::CrossEntropy,
        HeadKind::Continuous => Objective::Vector(LossConfig::new(LossVariant::NllVmfReg1Reg2, m)),
    }
}

fn batch_of(pairs: &[SentencePair]) -> Batch {
    Batch::from_pairs(&pairs.iter().collect::<Vec<_>>(), (0..pairs.len()).collect())
}

#[test]
fn hundred_updates_lower_the_loss_on_a_fixed_batch() {
    let p = synthetic::prepare(&synthetic::lexicon_task(1), 16, 2).unwrap();
    let batch = batch_of(&p.train[..32]);
    for (head, lr) in [(HeadKind::Softmax, LR_SOFTMAX), (HeadKind::Continuous, LR_CONTINUOUS)] {
        let mut model = init_model(config(&p, head, false, 32), 3, Some(p.table.clone())).unwrap();
        let obj = objective(head, p.table.dim());
        let mut opt = Adam::new(lr);
        let initial = model.batch_loss(&batch, &obj).unwrap();
        for i in 0..100 {
            train_batch(&mut model, &batch, &obj, &mut opt, i).unwrap();
        }
        let last = model.batch_loss(&batch, &obj).unwrap();
        assert!(last < initial, "{head}: {initial} -> {last}");
    }
}

#[test]
fn tied_table_is_bit_identical_after_updates() {
    let p = synthetic::prepare(&synthetic::lexicon_task(1), 8, 2).unwrap();
    let mut model = init_model(config(&p, HeadKind::Continuous, true, 16), 5, Some(p.table.clone())).unwrap();
    let before = model.table().unwrap().clone();
    let adapter = model.params().index("dec.adapter").unwrap();
    let adapter_before = model.params().value(adapter).clone();
    let obj = objective(HeadKind::Continuous, p.table.dim());
    let mut opt = Adam::new(0.01);
    for (i, chunk) in p.train.chunks(16).take(20).enumerate() {
        train_batch(&mut model, &batch_of(chunk), &obj, &mut opt, i).unwrap();
    }
    let after = model.table().unwrap();
    let bits = |t: &seqcont::embed::EmbeddingTable| t.vectors().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&before), bits(after));
    assert_ne!(model.params().value(adapter), &adapter_before);
}

/// Width-1 beam search over log-probabilities, the reference for greedy
/// decoding of the softmax head.
fn beam_one(model: &Seq2SeqModel, src: &[usize]) -> Vec<usize> {
    let (enc, mut state) = model.encode(src).unwrap();
    let mut beam: (f64, Vec<usize>) = (0.0, Vec::new());
    let mut prev = seqcont::embed::BOS_ID;
    while beam.1.len() < model.config().max_len {
        let (out, next) = model.decode_step(&enc, &state, prev).unwrap();
        let HeadOutput::Logits(logits) = out.output else { panic!("softmax head") };
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        let mut candidates: Vec<(f64, usize)> = logits.iter().enumerate().map(|(w, l)| (beam.0 + l - log_z, w)).collect();
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let (score, word) = candidates[0];
        beam.0 = score;
        beam.1.push(word);
        state = next;
        prev = word;
        if word == EOS_ID {
            break;
        }
    }
    beam.1
}

#[test]
fn greedy_matches_width_one_beam() {
    let p = synthetic::prepare(&synthetic::lexicon_task(4), 8, 2).unwrap();
    let mut model = init_model(ModelConfig { max_len: 12, ..config(&p, HeadKind::Softmax, false, 16) }, 9, None).unwrap();
    let mut opt = Adam::new(0.01);
    for (i, chunk) in p.train.chunks(32).take(30).enumerate() {
        train_batch(&mut model, &batch_of(chunk), &Objective::CrossEntropy, &mut opt, i).unwrap();
    }
    for pair in &p.dev[..40] {
        assert_eq!(model.greedy_translate(&pair.src).unwrap().tokens, beam_one(&model, &pair.src));
    }
}

#[test]
fn target_embedding_as_output_decodes_to_its_word() {
    let p = synthetic::prepare(&synthetic::lexicon_task(4), 8, 2).unwrap();
    let model = init_model(config(&p, HeadKind::Continuous, false, 8), 1, Some(p.table.clone())).unwrap();
    for w in 0..p.table.len() {
        let out = HeadOutput::Vector(p.table.vector(w).to_vec());
        assert_eq!(model.output_word(&out).unwrap(), w);
    }
}

#[test]
fn continuous_training_path_has_no_vocabulary_sized_product() {
    let batch = seqcont::evalbench::synthetic_batch(3, 5, 4, 40, 40, 1);
    let mut shapes = Vec::new();
    for tgt_vocab in [97, 211] {
        let cfg = ModelConfig {
            hidden: 12,
            input_emb: 10,
            output_dim: 6,
            src_vocab: 40,
            tgt_vocab,
            tied: true,
            head: HeadKind::Continuous,
            ..ModelConfig::default()
        };
        let table = seqcont::embed::EmbeddingTable::new(
            (0..tgt_vocab).map(|i| format!("w{i}")).collect(),
            ndarray::Array2::from_shape_fn((tgt_vocab, 6), |(i, j)| ((i * 7 + j * 3) % 11) as f64 + 1.0),
        )
        .unwrap();
        let model = init_model(cfg, 1, Some(table)).unwrap();
        let products = model.loss_products(&batch, &objective(HeadKind::Continuous, 6)).unwrap();
        assert!(products.iter().flatten().all(|&d| d != tgt_vocab), "{products:?}");
        shapes.push(products);
    }
    assert_eq!(shapes[0], shapes[1]);
}

#[test]
fn softmax_training_path_has_one_vocabulary_product_per_step() {
    let tgt_vocab = 97;
    let batch = seqcont::evalbench::synthetic_batch(3, 5, 4, 40, tgt_vocab, 1);
    let cfg = ModelConfig {
        hidden: 12,
        input_emb: 10,
        src_vocab: 40,
        tgt_vocab,
        head: HeadKind::Softmax,
        ..ModelConfig::default()
    };
    let model = init_model(cfg, 1, None).unwrap();
    let products = model.loss_products(&batch, &Objective::CrossEntropy).unwrap();
    let head: Vec<_> = products.iter().filter(|p| p.contains(&tgt_vocab)).collect();
    let steps = batch.tgt_mask.ncols();
    // one fused product covers every (sentence, step) row
    assert_eq!(head, vec![&[3 * steps, 12, tgt_vocab]]);
}

#[test]
fn empty_inputs() {
    let p = synthetic::prepare(&synthetic::copy_task(1), 4, 2).unwrap();
    let mut model = init_model(config(&p, HeadKind::Continuous, false, 8), 1, Some(p.table.clone())).unwrap();
    assert!(model.forward_teacher_forced(&p.train[0].src, &[]).unwrap().is_empty());
    let t = model.greedy_translate(&[]).unwrap();
    assert_eq!(t.tokens, vec![EOS_ID]);

    let padded = Batch::from_pairs(&[&SentencePair { src: vec![5, 6], tgt: vec![] }], vec![0]);
    let before = model.params().clone();
    let mut opt = Adam::new(0.1);
    let mut no_tokens = padded.clone();
    no_tokens.tgt_mask.fill(0.0);
    let loss = train_batch(&mut model, &no_tokens, &objective(HeadKind::Continuous, p.table.dim()), &mut opt, 0).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(model.params(), &before);
}

/// Fraction of non-padding target positions predicted correctly when the
/// decoder reads the gold prefix.
fn token_accuracy(model: &Seq2SeqModel, pairs: &[SentencePair]) -> f64 {
    let (mut right, mut total) = (0usize, 0usize);
    for chunk in pairs.chunks(64) {
        let b = batch_of(chunk);
        let pred = model.teacher_forced_predictions(&b).unwrap();
        for ((&p, &g), &m) in pred.iter().zip(&b.tgt_out).zip(&b.tgt_mask) {
            if m > 0.0 {
                assert_ne!(p, PAD_ID);
                total += 1;
                right += usize::from(p == g);
            }
        }
    }
    right as f64 / total as f64
}

#[test]
fn copy_task_overfits_to_exact_greedy_match() {
    let p = synthetic::prepare(&synthetic::copy_task(5), 16, 6).unwrap();
    let cfg = ModelConfig { max_len: 20, ..config(&p, HeadKind::Continuous, false, 64) };
    let mut model = init_model(cfg, 7, Some(p.table.clone())).unwrap();
    let obj = objective(HeadKind::Continuous, p.table.dim());
    let mut opt = Adam::new(10.0 * LR_CONTINUOUS);
    for epoch in 0..60 {
        let (batches, _) = make_batches(&p.train, 20, 100, epoch).unwrap();
        for (i, b) in batches.iter().enumerate() {
            train_batch(&mut model, b, &obj, &mut opt, i).unwrap();
        }
        if token_accuracy(&model, &p.train) == 1.0 {
            break;
        }
    }
    let exact = p.train.iter().filter(|pair| model.greedy_translate(&pair.src).unwrap().words() == pair.tgt.as_slice()).count();
    let rate = exact as f64 / p.train.len() as f64;
    eprintln!("copy task exact match {rate:.4}");
    assert!(rate >= 0.99, "exact match {rate}");
    assert!(p.train.iter().flat_map(|s| &s.tgt).all(|&w| w >= RESERVED.len()));
}
