use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use vla_core::data::{render, Color, Image, Object, Shape, WorldState};
use vla_core::grad::{grad_check_params, LrSchedule, Optimizer, OptimizerKind, Scope, Tensor};
use vla_core::lam::*;

fn randvec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn scene_with(x: f64) -> Image {
    let mut s = WorldState::empty();
    s.gripper = [0.9, 0.9];
    s.objects.push(Object { shape: Shape::Square, color: Color::Red, pos: [x, 0.5] });
    render(&s)
}

fn model(seed: u64) -> Lam {
    Lam::new(LamConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn nsvq_preserves_error_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let x = randvec(&mut rng, 64);
        let c = randvec(&mut rng, 64);
        let out = nsvq_substitute(&x, &c, &mut rng);
        let a: Vec<f64> = out.iter().zip(&x).map(|(o, x)| o - x).collect();
        let b: Vec<f64> = c.iter().zip(&x).map(|(c, x)| c - x).collect();
        assert!((norm(&a) / norm(&b) - 1.0).abs() <= 1e-10);
    }
}

#[test]
fn nearest_code_matches_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cb = Tensor::randn(&[32, 8], 1.0, &mut rng);
    for _ in 0..10_000 {
        let x = randvec(&mut rng, 8);
        let dists: Vec<f64> = (0..32)
            .map(|n| cb.row(n).iter().zip(&x).map(|(c, x)| (c - x).powi(2)).sum())
            .collect();
        let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        let oracle = dists.iter().position(|&d| d == min).unwrap();
        assert_eq!(nearest_code(&x, &cb), oracle);
    }
    let x5 = cb.row(5).to_vec();
    assert_eq!(nearest_code(&x5, &cb), 5);
}

#[test]
fn encoder_output_shape_and_finiteness() {
    let lam = model(0);
    let img = scene_with(0.5);
    let mut s = Scope::new(&lam.store);
    let c = s.graph.constant(patchify(&img));
    let f = s.graph.constant(patchify(&img));
    let x = Lam::encode(&mut s, c, f).unwrap();
    assert_eq!(s.graph.shape(x), &[NUM_SLOTS, 64]);
    assert!(s.graph.value(x).is_finite());
    let bad = s.graph.constant(Tensor::zeros(&[8, 192]));
    assert!(Lam::encode(&mut s, bad, f).is_err());
}

#[test]
fn slot_outputs_ignore_patch_order_without_positions() {
    let mut lam = model(1);
    for name in ["lam.enc.pos"] {
        lam.store.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let a = patchify(&scene_with(0.3));
    let b = patchify(&scene_with(0.6));
    let perm: Vec<usize> = (0..PATCHES).rev().collect();
    let permute = |t: &Tensor| {
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| t.row(p).to_vec()).collect();
        Tensor::from_rows(&rows).unwrap()
    };
    let run = |c: Tensor, f: Tensor| {
        let mut s = Scope::new(&lam.store);
        let c = s.graph.constant(c);
        let f = s.graph.constant(f);
        let x = Lam::encode(&mut s, c, f).unwrap();
        s.graph.value(x).clone()
    };
    let base = run(a.clone(), b.clone());
    let permuted = run(permute(&a), permute(&b));
    assert!(base.max_abs_diff(&permuted) < 1e-10);
}

#[test]
fn decoder_stops_gradient_to_current_frame() {
    let lam = model(2);
    let cur = patchify(&scene_with(0.3));
    let fut = patchify(&scene_with(0.5));
    let mut s = Scope::new(&lam.store);
    let c = s.graph.param(cur);
    let f = s.graph.constant(fut);
    let codes = s.graph.param(Tensor::randn(&[NUM_SLOTS, 64], 1.0, &mut ChaCha8Rng::seed_from_u64(4)));
    let pred = Lam::decode(&mut s, c, codes).unwrap();
    assert_eq!(s.graph.shape(pred), &[PATCHES, PATCH_DIM]);
    let loss = s.graph.mse(pred, f).unwrap();
    let g = s.graph.backward(loss).unwrap();
    assert!(g.wrt(&s.graph, c).data().iter().all(|&v| v == 0.0));
    assert!(g.wrt(&s.graph, codes).data().iter().any(|&v| v != 0.0));
}

#[test]
fn lam_loss_matches_finite_differences_with_frozen_noise() {
    let lam = model(5);
    let cur = patchify(&scene_with(0.3));
    let fut = patchify(&scene_with(0.5));
    let w = Tensor::randn(&[NUM_SLOTS, 64], 1.0, &mut ChaCha8Rng::seed_from_u64(6));
    let names = ["lam.enc.proj.w", "lam.codebook", "lam.dec.head.w", "lam.enc.slots", "lam.enc.spatial.q.w"];
    let err = grad_check_params(
        &lam.store,
        &names,
        |s| Ok(Lam::pair_loss::<ChaCha8Rng>(s, &cur, &fut, Noise::Frozen(&w))?.0),
        1e-5,
        Some(24),
    )
    .unwrap();
    assert!(err <= 1e-4, "rel err {err}");
}

#[test]
fn nsvq_graph_gradient_matches_finite_differences() {
    let lam = model(8);
    let w = Tensor::randn(&[NUM_SLOTS, 64], 1.0, &mut ChaCha8Rng::seed_from_u64(9));
    let x0 = Tensor::randn(&[NUM_SLOTS, 64], 1.0, &mut ChaCha8Rng::seed_from_u64(10));
    let err = vla_core::grad::grad_check(
        |g, l| {
            let mut s = Scope::new(&lam.store);
            std::mem::swap(&mut s.graph, g);
            let q = Lam::quantize::<ChaCha8Rng>(&mut s, l[0], Noise::Frozen(&w));
            std::mem::swap(&mut s.graph, g);
            let q = q?;
            let sq = g.mul(q.codes, q.codes)?;
            Ok(g.sum(sq))
        },
        &[x0],
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-5, "rel err {err}");
}

#[test]
fn unselected_codes_get_zero_gradient() {
    let lam = model(11);
    let cur = patchify(&scene_with(0.3));
    let fut = patchify(&scene_with(0.5));
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut s = Scope::new(&lam.store);
    let (loss, _, idx) = Lam::pair_loss(&mut s, &cur, &fut, Noise::Sampled(&mut rng)).unwrap();
    let g = s.backward(loss).unwrap();
    let cb = g.by_name(&lam.store, CODEBOOK).unwrap();
    for n in 0..CODEBOOK_SIZE {
        let row_nonzero = cb.row(n).iter().any(|&v| v != 0.0);
        assert_eq!(row_nonzero, idx.contains(&n), "code {n}");
    }
}

fn two_motion_pairs() -> Vec<FramePair> {
    let mut pairs = Vec::new();
    for i in 0..6 {
        let x = 0.35 + 0.05 * i as f64;
        for dx in [-0.2, 0.2] {
            pairs.push(FramePair { current: scene_with(x), future: scene_with(x + dx), gap_seconds: 1.0 });
        }
    }
    pairs
}

#[test]
fn training_halves_reconstruction_loss() {
    let mut lam = model(13);
    let pairs = two_motion_pairs();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut opt = Optimizer::new(OptimizerKind::Adam, LrSchedule::constant(2e-3));
    let mut losses = Vec::new();
    for step in 0..200 {
        let batch: Vec<FramePair> = (0..4).map(|j| pairs[(step * 4 + j) % pairs.len()].clone()).collect();
        let l = lam.train_step(&batch, &mut opt, &mut rng).unwrap();
        assert!(l >= 0.0);
        losses.push(l);
    }
    let early = losses[..5].iter().sum::<f64>() / 5.0;
    let late = losses[190..].iter().sum::<f64>() / 10.0;
    assert!(late <= 0.5 * early, "early {early} late {late}");
}

#[test]
fn frozen_parameters_give_repeatable_loss() {
    let lam = model(15);
    let cur = patchify(&scene_with(0.3));
    let fut = patchify(&scene_with(0.5));
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut s = Scope::new(&lam.store);
        let (l, _, _) = Lam::pair_loss(&mut s, &cur, &fut, Noise::Sampled(&mut rng)).unwrap();
        s.graph.value(l).item()
    };
    assert_eq!(run().to_bits(), run().to_bits());
}

#[test]
fn labelling_rules() {
    let lam = model(17);
    let ds = vla_core::data::generate_dataset(1, 2).unwrap();
    let mut ep = ds.episodes[0].clone();
    let labels = label_episode(&ep, &lam).unwrap();
    assert_eq!(labels.len(), ep.len());
    assert!(labels.iter().all(|l| l.indices.iter().all(|&i| i < CODEBOOK_SIZE)));
    assert_eq!(labels, label_episode(&ep, &lam).unwrap());

    let k = frame_gap(&ep);
    ep.frames.truncate(k + 1);
    ep.states.truncate(k + 1);
    ep.actions.truncate(k + 1);
    let short = label_episode(&ep, &lam).unwrap();
    assert!(short.iter().all(|l| l.indices == short[0].indices));

    let still = ep.frames[0].clone();
    ep.frames.iter_mut().for_each(|f| *f = still.clone());
    let frozen = label_episode(&ep, &lam).unwrap();
    assert!(frozen.iter().all(|l| l.indices == frozen[0].indices));

    ep.frames.truncate(k);
    assert!(matches!(label_episode(&ep, &lam), Err(LamError::EpisodeTooShort { .. })));
}

#[test]
fn checkpoint_round_trip() {
    let lam = model(18);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("lam.ckpt");
    lam.save(&p).unwrap();
    let back = Lam::load(&p).unwrap();
    assert_eq!(back.cfg, lam.cfg);
    assert_eq!(back.codebook(), lam.codebook());
}
