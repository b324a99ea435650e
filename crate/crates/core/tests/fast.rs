use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vla_core::fast::*;

const K: usize = 7;
const D: usize = 20;

fn smooth_chunk(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let params: Vec<(f64, f64, f64, f64)> = (0..D)
        .map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-0.1..0.1), rng.gen_range(0.0..0.8), rng.gen_range(0.0..6.3)))
        .collect();
    (0..K)
        .map(|t| {
            params
                .iter()
                .map(|&(base, slope, amp, phase)| base + slope * t as f64 + 0.2 * amp * (0.5 * t as f64 + phase).sin())
                .collect()
        })
        .collect()
}

fn corpus(n: usize, seed: u64) -> Vec<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| smooth_chunk(&mut rng)).collect()
}

#[test]
fn round_trip_error_within_quantisation_bound() {
    let train = corpus(2000, 1);
    let tok = FastTokenizer::fit(&train, 10.0, DEFAULT_VOCAB_SIZE).unwrap();
    let mut worst_ratio: f64 = 0.0;
    for mut chunk in corpus(1000, 2) {
        for row in &mut chunk {
            for (d, v) in row.iter_mut().enumerate() {
                *v = v.clamp(tok.stats.low[d], tok.stats.high[d]);
            }
        }
        let back = tok.decode(&tok.encode(&chunk).unwrap().ids).unwrap();
        for d in 0..D {
            let slope = (tok.stats.high[d] - tok.stats.low[d]) / 2.0;
            let bound = 0.5 / 10.0 * slope * (K as f64).sqrt();
            for t in 0..K {
                let err = (back[t][d] - chunk[t][d]).abs();
                worst_ratio = worst_ratio.max(err / bound);
            }
        }
    }
    assert!(worst_ratio <= 1.0, "worst error/bound {worst_ratio}");
}

#[test]
fn smooth_chunks_compress() {
    let train = corpus(2000, 3);
    let tok = FastTokenizer::fit(&train, 10.0, DEFAULT_VOCAB_SIZE).unwrap();
    let test = corpus(200, 4);
    let total: usize = test.iter().map(|c| tok.encode(c).unwrap().ids.len()).sum();
    let mean = total as f64 / test.len() as f64;
    assert!(mean < (K * D) as f64, "mean tokens {mean}");
}

#[test]
fn fitting_is_deterministic() {
    let train = corpus(300, 5);
    let a = FastTokenizer::fit(&train, 10.0, 200).unwrap();
    let b = FastTokenizer::fit(&train, 10.0, 200).unwrap();
    assert_eq!(a.to_text(), b.to_text());
}

#[test]
fn dct_round_trip_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let x: Vec<Vec<f64>> = (0..K).map(|_| (0..D).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
        let back = idct2(&dct2(&x));
        for (r, b) in x.iter().zip(&back) {
            for (u, v) in r.iter().zip(b) {
                assert!((u - v).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn constant_velocity_is_dc_only() {
    let chunk: Vec<Vec<f64>> = (0..K).map(|_| (0..D).map(|d| 0.01 * d as f64).collect()).collect();
    let c = dct2(&chunk);
    for (d, v) in c[0].iter().enumerate() {
        assert!((v - 0.01 * d as f64 * (K as f64).sqrt()).abs() < 1e-12);
    }
    assert!(c[1..].iter().flatten().all(|v| v.abs() < 1e-12));
}

#[test]
fn value_above_high_is_clipped() {
    let train: Vec<Vec<Vec<f64>>> = (0..101).map(|i| vec![vec![i as f64 / 100.0]]).collect();
    let stats = fit_norm(&train).unwrap();
    assert_eq!(stats.normalize(0, 5.0), 1.0);
    assert_eq!(stats.normalize(0, -5.0), -1.0);
}

#[test]
fn unknown_token_is_an_error() {
    let tok = FastTokenizer::fit(&corpus(50, 7), 10.0, 100).unwrap();
    let bad = tok.vocab.vocab_size() as TokenId + 5;
    assert!(matches!(tok.decode(&[bad]), Err(FastError::UnknownToken(_))));
}

#[test]
fn out_of_alphabet_integers_decode_to_zero() {
    let v = FastVocab::new(3, Vec::new()).unwrap();
    let ids = v.encode(&[1, 50, -2]);
    assert_eq!(ids[1], v.oov_id());
    assert_eq!(v.decode(&ids).unwrap(), vec![1, 0, -2]);
}

proptest! {
    #[test]
    fn flatten_is_a_bijection(k in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<i64>> = (0..k).map(|_| (0..D).map(|_| rng.gen_range(-40..40)).collect()).collect();
        let flat = flatten(&x);
        prop_assert_eq!(flat.len(), k * D);
        if k >= 2 {
            prop_assert_eq!(flat[20], x[1][0]);
        }
        prop_assert_eq!(unflatten(&flat, k, D).unwrap(), x);
    }

    #[test]
    fn bpe_round_trips_in_alphabet(seqs in prop::collection::vec(prop::collection::vec(-4i64..=4, 1..40), 1..12),
                                   probe in prop::collection::vec(-4i64..=4, 0..60)) {
        let vocab = bpe_train_with_bound(&seqs, 40, 4).unwrap();
        for s in seqs.iter().chain(std::iter::once(&probe)) {
            prop_assert_eq!(&vocab.decode(&vocab.encode(s)).unwrap(), s);
        }
    }

    #[test]
    fn rounding_error_is_half_step(c in -50.0f64..50.0, gamma in 0.5f64..40.0) {
        let q = quantize(&[vec![c]], gamma).unwrap();
        let back = dequantize(&q, gamma)[0][0];
        prop_assert!((back - c).abs() <= 0.5 / gamma + 1e-12);
    }
}
