use mta_core::alignment::{dca_loss, info_nce, Objective, TextEncoder, TEXT_ENCODER_SEED};
use mta_core::autograd::{Graph, Tensor};
use mta_core::scenegen::{enumerate_fields, render_words, Vocabulary, MAX_DISTANCE_WORD, NUM_CLASSES};

const A: [[f64; 4]; 3] = [[0.3, -1.2, 0.8, 0.05], [1.1, 0.4, -0.6, 0.9], [-0.7, 0.2, 0.5, -1.3]];
const B: [[f64; 4]; 3] = [[0.25, -1.0, 1.1, -0.2], [0.9, 0.7, -0.3, 1.2], [-0.4, -0.5, 0.6, -0.8]];

// 50-digit evaluation of the symmetric loss at tau = 0.07.
const INFO_NCE_ORACLE: f64 = 0.003042502711790223310537012;

fn rows(r: &[[f64; 4]]) -> Tensor {
    let v: Vec<&[f64]> = r.iter().map(|x| x.as_slice()).collect();
    Tensor::from_rows(&v).unwrap()
}

fn nce(a: &[[f64; 4]], b: &[[f64; 4]]) -> f64 {
    let mut g = Graph::new();
    let a = g.constant(rows(a));
    let b = g.constant(rows(b));
    let l = dca_loss(&mut g, a, b, Objective::Clip, 0.07).unwrap();
    g.value(l).item()
}

#[test]
fn three_pair_info_nce_matches_extended_precision() {
    let v = nce(&A, &B);
    assert!((v - INFO_NCE_ORACLE).abs() < 1e-12, "{v}");
    let mut g = Graph::new();
    let a = g.constant(rows(&A));
    let b = g.constant(rows(&B));
    let l = info_nce(&mut g, a, b, 0.07).unwrap();
    assert_eq!(g.value(l).item(), v);
}

#[test]
fn info_nce_is_symmetric_and_permutation_invariant() {
    let v = nce(&A, &B);
    assert_eq!(nce(&B, &A), v);
    let perm = [2, 0, 1];
    let pa: Vec<[f64; 4]> = perm.iter().map(|&i| A[i]).collect();
    let pb: Vec<[f64; 4]> = perm.iter().map(|&i| B[i]).collect();
    assert!((nce(&pa, &pb) - v).abs() < 1e-15);
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

// Recorded from the encoder at its default seed.
const SAME_CLASS_COSINE: f64 = 0.933538055926823;
const CROSS_CLASS_COSINE: f64 = 0.908511929728905;

#[test]
fn same_class_captions_embed_closer_than_cross_class() {
    let vocab = Vocabulary::standard();
    let enc = TextEncoder::new(vocab.len(), 64, TEXT_ENCODER_SEED).unwrap();
    let fields = enumerate_fields(MAX_DISTANCE_WORD);
    // Per class: sum of unit embeddings and count. Mean pairwise cosine
    // follows from the sums without visiting every pair.
    let mut sums = vec![vec![0.0; 64]; NUM_CLASSES];
    let mut counts = vec![0usize; NUM_CLASSES];
    let mut first: Option<Tensor> = None;
    for f in &fields {
        let ids = vocab.encode(&render_words(f)).unwrap();
        let e = enc.encode(&ids).unwrap();
        let n = e.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        for (s, x) in sums[f.class].iter_mut().zip(e.data()) {
            *s += x / n;
        }
        counts[f.class] += 1;
        if first.is_none() {
            assert_eq!(enc.encode(&ids).unwrap(), e);
            first = Some(e);
        }
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (mut same, mut same_pairs) = (0.0, 0.0);
    let (mut cross, mut cross_pairs) = (0.0, 0.0);
    for c in 0..NUM_CLASSES {
        let n = counts[c] as f64;
        same += dot(&sums[c], &sums[c]) - n;
        same_pairs += n * (n - 1.0);
        for d in 0..NUM_CLASSES {
            if d != c {
                cross += dot(&sums[c], &sums[d]);
                cross_pairs += n * counts[d] as f64;
            }
        }
    }
    let (same, cross) = (same / same_pairs, cross / cross_pairs);
    assert!(same > cross);
    assert!((same - SAME_CLASS_COSINE).abs() < 1e-9);
    assert!((cross - CROSS_CLASS_COSINE).abs() < 1e-9);

    let a = enc.encode(&vocab.encode(&render_words(&fields[0])).unwrap()).unwrap();
    let b = enc.encode(&vocab.encode(&render_words(&fields[1])).unwrap()).unwrap();
    assert!(cosine(a.data(), b.data()) < 1.0 - 1e-9);
}
