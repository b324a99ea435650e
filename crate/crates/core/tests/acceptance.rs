//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! The end-to-end trend run (criterion 8) trains six full pipelines and only
//! runs with `VLA_ACCEPT_TREND=1`.

mod common;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use vla_core::backbone::*;
use vla_core::data::{draw_scene, pad_to_20, unpad, Arm, NATIVE_DIMS};
use vla_core::expert::*;
use vla_core::fast::*;
use vla_core::grad::{grad_check_params, primitive_set, GradError, ParamStore, Scope, Tensor};
use vla_core::lam::*;
use vla_core::pipeline::*;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn randvec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn nsvq_norm() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let x = randvec(&mut rng, 64);
        let c = randvec(&mut rng, 64);
        let out = nsvq_substitute(&x, &c, &mut rng);
        let a: Vec<f64> = out.iter().zip(&x).map(|(o, x)| o - x).collect();
        let b: Vec<f64> = c.iter().zip(&x).map(|(c, x)| c - x).collect();
        worst = worst.max((norm(&a) / norm(&b) - 1.0).abs());
    }
    ensure(worst <= 1e-10, format!("worst ratio deviation {worst:e}"))?;
    Ok(format!("worst ratio deviation {worst:e}"))
}

fn nearest_code_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut cb = Tensor::randn(&[32, 8], 1.0, &mut rng);
    // duplicate rows force exact ties
    let dup = cb.row(4).to_vec();
    cb.data_mut()[9 * 8..10 * 8].copy_from_slice(&dup);
    cb.data_mut()[20 * 8..21 * 8].copy_from_slice(&dup);
    let mut ties = 0;
    for q in 0..10_000 {
        let x = if q % 100 == 0 { dup.clone() } else { randvec(&mut rng, 8) };
        let dists: Vec<f64> =
            (0..32).map(|n| cb.row(n).iter().zip(&x).map(|(c, x)| (c - x).powi(2)).sum()).collect();
        let mut best = 0;
        for (i, &d) in dists.iter().enumerate() {
            if d < dists[best] {
                best = i;
            }
        }
        if dists.iter().filter(|&&d| d == dists[best]).count() > 1 {
            ties += 1;
        }
        let got = nearest_code(&x, &cb);
        ensure(got == best, format!("query {q}: got {got}, scan {best}"))?;
    }
    Ok(format!("10000 queries agree, {ties} tied"))
}

fn smooth_chunk(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let params: Vec<(f64, f64, f64, f64)> = (0..20)
        .map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-0.1..0.1), rng.gen_range(0.0..0.8), rng.gen_range(0.0..6.3)))
        .collect();
    (0..7)
        .map(|t| {
            params
                .iter()
                .map(|&(base, slope, amp, phase)| base + slope * t as f64 + 0.2 * amp * (0.5 * t as f64 + phase).sin())
                .collect()
        })
        .collect()
}

fn fast_round_trip() -> Outcome {
    let (k, gamma) = (7usize, 10.0);
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let train: Vec<_> = (0..2000).map(|_| smooth_chunk(&mut rng)).collect();
    let tok = FastTokenizer::fit(&train, gamma, DEFAULT_VOCAB_SIZE).map_err(|e| e.to_string())?;
    let (mut worst_ratio, mut dct_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..1000 {
        let mut chunk = smooth_chunk(&mut rng);
        for row in &mut chunk {
            for (d, v) in row.iter_mut().enumerate() {
                *v = v.clamp(tok.stats.low[d], tok.stats.high[d]);
            }
        }
        let enc = tok.encode(&chunk).map_err(|e| e.to_string())?;
        let back = tok.decode(&enc.ids).map_err(|e| e.to_string())?;
        for d in 0..20 {
            // half a quantisation step per coefficient, spread over k samples by the orthonormal inverse
            let bound = 0.5 / gamma * (tok.stats.high[d] - tok.stats.low[d]) / 2.0 * (k as f64).sqrt();
            for t in 0..k {
                worst_ratio = worst_ratio.max((back[t][d] - chunk[t][d]).abs() / bound);
            }
        }
        let ints = chunk_integers(&chunk, &tok.stats, gamma).map_err(|e| e.to_string())?;
        ensure(tok.vocab.decode(&tok.vocab.encode(&ints)).map_err(|e| e.to_string())? == ints, "bpe round trip differs")?;
        let idct = idct2(&dct2(&chunk));
        for (r, b) in chunk.iter().zip(&idct) {
            for (u, v) in r.iter().zip(b) {
                dct_err = dct_err.max((u - v).abs());
            }
        }
    }
    ensure(worst_ratio <= 1.0, format!("error/bound {worst_ratio}"))?;
    ensure(dct_err <= 1e-12, format!("dct error {dct_err:e}"))?;
    Ok(format!("worst error/bound {worst_ratio:.3}, bpe exact, dct error {dct_err:.1e}"))
}

fn toy_backbone() -> (Backbone, ParamStore) {
    let cfg = BackboneConfig { d_model: 16, layers: 2, heads: 2, mlp: 32, max_len: 64, text_vocab: 40 };
    let bb = Backbone::new(cfg.clone(), VocabMap::new(cfg.text_vocab, 64));
    let mut store = ParamStore::new();
    bb.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
    (bb, store)
}

fn toy_input(bb: &Backbone, n_fast: usize) -> TokenInput {
    let mut state = [0.0; 20];
    state[0] = 0.3;
    state[1] = -0.7;
    TokenInput {
        patches: Some(Tensor::randn(&[PATCHES, PATCH_DIM], 0.5, &mut ChaCha8Rng::seed_from_u64(2))),
        text: vec![1, 2, 3, 4, 5],
        state: Some(state),
        lat: (0..8).map(|i| bb.vocab.latent_id((i * 5) % 32)).collect(),
        fast: (0..n_fast).map(|i| bb.vocab.fast_id((i * 7) % 64)).collect(),
        ..TokenInput::default()
    }
}

fn bb_grad<T>(r: Result<T, BackboneError>) -> Result<T, GradError> {
    r.map_err(|e| match e {
        BackboneError::Grad(g) => g,
        other => panic!("{other}"),
    })
}

fn ex_grad<T>(r: Result<T, ExpertError>) -> Result<T, GradError> {
    r.map_err(|e| match e {
        ExpertError::Grad(g) => g,
        other => panic!("{other}"),
    })
}

fn gradient_fidelity() -> Outcome {
    let mut prim_worst: f64 = 0.0;
    for (pi, prim) in primitive_set().iter().enumerate() {
        let mut r = common::rng(2000 + pi as u64);
        for trial in 0..5 {
            prim_worst = prim_worst.max(common::check_primitive(*prim, &mut r, trial));
        }
    }

    let lam = Lam::new(LamConfig::default(), &mut ChaCha8Rng::seed_from_u64(5));
    let frames = vla_core::data::generate_dataset(1, 3).map_err(|e| e.to_string())?;
    let ep = &frames.episodes[0];
    let cur = patchify(&ep.frames[0]);
    let fut = patchify(&ep.frames[frame_gap(ep).min(ep.frames.len() - 1)]);
    let w = Tensor::randn(&[NUM_SLOTS, 64], 1.0, &mut ChaCha8Rng::seed_from_u64(6));
    let lam_err = grad_check_params(
        &lam.store,
        &["lam.enc.proj.w", "lam.codebook", "lam.dec.head.w", "lam.enc.slots"],
        |s| Ok(Lam::pair_loss::<ChaCha8Rng>(s, &cur, &fut, Noise::Frozen(&w))?.0),
        1e-5,
        Some(24),
    )
    .map_err(|e| e.to_string())?;

    let (bb, mut store) = toy_backbone();
    let input = toy_input(&bb, 5);
    let bb_err = grad_check_params(
        &store,
        &["vlm.block0.q.w", "vlm.block1.v.w", "vlm.head.w", "vlm.state.w"],
        |s| {
            let (emb, layout) = bb_grad(bb.assemble_tokens(s, &input))?;
            let out = bb_grad(bb.backbone_forward(s, emb, &layout))?;
            let l = bb_grad(bb.vlm_loss(s, out.logits, &layout, &input))?;
            Ok(l.total(s, &[])?.unwrap())
        },
        1e-5,
        Some(24),
    )
    .map_err(|e| e.to_string())?;

    let ex = ActionExpert::new(ExpertConfig { d_model: 16, layers: 2, heads: 2, mlp: 32, k: 7, time_features: 8 });
    ex.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(3));
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = gaussian(&[7, 20], &mut rng);
    let samples: Vec<_> = (0..2).map(|_| make_flow_sample(&a, &mut rng, false)).collect();
    let state = input.state.unwrap();
    let flow_err = grad_check_params(
        &store,
        &["act.in.w", "act.block0.k.w", "act.time.w", "act.out.w", "vlm.block0.v.w"],
        |s| {
            let (emb, layout) = bb_grad(bb.assemble_tokens(s, &input))?;
            let out = bb_grad(bb.backbone_forward(s, emb, &layout))?;
            let ctx = route_kv(s, &out.cache, RouteOptions::default())?;
            ex_grad(ex.flow_loss(s, &samples, &state, &ctx))
        },
        1e-5,
        Some(24),
    )
    .map_err(|e| e.to_string())?;

    let msg = format!("primitives {prim_worst:.1e}, lam {lam_err:.1e}, backbone {bb_err:.1e}, flow {flow_err:.1e}");
    ensure([prim_worst, lam_err, bb_err, flow_err].iter().all(|&e| e <= 1e-4), msg.clone())?;
    Ok(msg)
}

fn euler_exact() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let a = gaussian(&[7, 20], &mut rng);
        let eps = gaussian(&[7, 20], &mut rng);
        let field: Vec<f64> = a.data().iter().zip(eps.data()).map(|(a, e)| a - e).collect();
        let field = Tensor::new(vec![7, 20], field).map_err(|e| e.to_string())?;
        let mut evals = 0;
        let out = euler_integrate::<_, ExpertError>(
            eps,
            |_, _| {
                evals += 1;
                Ok(field.clone())
            },
            0.2,
        )
        .map_err(|e| e.to_string())?;
        ensure(evals == 5, format!("{evals} field evaluations"))?;
        worst = worst.max(out.max_abs_diff(&a));
    }
    ensure(worst <= 1e-12, format!("max error {worst:e}"))?;
    Ok(format!("5 evaluations, max error {worst:.1e}"))
}

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.episodes = 6;
    cfg.data.qa_samples = 10;
    cfg.backbone = BackboneConfig { d_model: 16, layers: 2, heads: 2, mlp: 32, ..BackboneConfig::default() };
    cfg.expert = ExpertConfig { d_model: 16, layers: 2, heads: 2, mlp: 32, ..ExpertConfig::default() };
    cfg.lam_model = LamConfig { d_model: 16, d_code: 16, mlp: 32, decoder_layers: 1, ..LamConfig::default() };
    cfg.lam.steps = 4;
    cfg.lam.batch = 2;
    cfg
}

fn structural_routing() -> Outcome {
    let cfg = tiny_config();
    let (ds, qa) = generate_data(&cfg).map_err(|e| e.to_string())?;
    let (_, labels, _) = run_stage1_lam(&cfg, &ds, |_, _| {}).map_err(|e| e.to_string())?;
    let fast = fit_fast(&cfg, &ds).map_err(|e| e.to_string())?;
    let mut vla = Vla::new(&cfg, Some(fast), ActionNorm::fit(&ds), &mut ChaCha8Rng::seed_from_u64(1));
    let corpus = Corpus::new(&ds, &labels, &qa);

    let mut fast_entries = 0;
    let mut fast_tokens = 0;
    for (e, t) in [(0, 0), (1, 4), (2, 7), (3, 2)] {
        let ex = corpus.example(e, t, vla.k());
        let input = vla.robot_input(&ex).map_err(|e| e.to_string())?;
        fast_tokens += input.fast.len();
        let samples = vec![make_flow_sample(&vla.norm.normalize(&ex.chunk), &mut ChaCha8Rng::seed_from_u64(0), false)];
        let mut s = Scope::new(&vla.store);
        let g = vla.robot_graph(&mut s, &input, &samples, GradientBoundary::FlowThrough).map_err(|e| e.to_string())?;
        fast_entries += g.ctx_roles.iter().filter(|&&r| r == Role::Fast).count();
    }
    ensure(fast_tokens > 0, "no FAST tokens in the inputs")?;
    ensure(fast_entries == 0, format!("{fast_entries} FAST entries routed"))?;

    let ex = corpus.example(0, 3, vla.k());
    let input = vla.robot_input(&ex).map_err(|e| e.to_string())?;
    let samples = vec![make_flow_sample(&vla.norm.normalize(&ex.chunk), &mut ChaCha8Rng::seed_from_u64(0), false)];
    let mut s = Scope::new(&vla.store);
    let g = vla.robot_graph(&mut s, &input, &samples, GradientBoundary::Truncate).map_err(|e| e.to_string())?;
    let grads = s.backward(g.flow).map_err(|e| e.to_string())?;
    let vlm_grad = grads.max_abs_with_prefix(&vla.store, "vlm.");
    ensure(vlm_grad == 0.0, format!("backbone gradient {vlm_grad:e} under truncation"))?;

    let before = vla.store.with_prefix("act.");
    let mut opt = optimizer_for(&cfg, &cfg.pretrain);
    for q in &qa {
        let (g, _) = qa_step(&vla, q).map_err(|e| e.to_string())?;
        opt.step(&mut vla.store, &g);
    }
    let after = vla.store.with_prefix("act.");
    let identical = before
        .iter()
        .zip(after.iter())
        .all(|((_, a), (_, b))| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    ensure(identical, "QA updates changed expert parameters")?;
    Ok(format!("0 FAST entries of {fast_tokens} tokens, truncated grad 0, expert unchanged after {} QA steps", qa.len()))
}

fn forward(bb: &Backbone, store: &ParamStore, input: &TokenInput) -> Result<(Tensor, KvCacheSet), String> {
    let mut s = Scope::new(store);
    let (emb, layout) = bb.assemble_tokens(&mut s, input).map_err(|e| e.to_string())?;
    let out = bb.backbone_forward(&mut s, emb, &layout).map_err(|e| e.to_string())?;
    Ok((s.graph.value(out.logits).clone(), out.cache.snapshot(&s)))
}

fn causality_and_cache() -> Outcome {
    let (bb, store) = toy_backbone();
    let base = toy_input(&bb, 6);
    let layout = base.layout().map_err(|e| e.to_string())?;
    let (a, ca) = forward(&bb, &store, &base)?;
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let mut checked = 0;
    for _ in 0..20 {
        let mut changed = base.clone();
        let j = rng.gen_range(0..8);
        changed.lat[j] = bb.vocab.latent_id(rng.gen_range(0..32));
        for f in changed.fast.iter_mut() {
            *f = bb.vocab.fast_id(rng.gen_range(0..64));
        }
        let (b, _) = forward(&bb, &store, &changed)?;
        let first = layout.span(Role::Lat).ok_or("no LAT span")?.start + j;
        for i in 0..first {
            let same = a.row(i).iter().zip(b.row(i)).all(|(x, y)| x.to_bits() == y.to_bits());
            ensure(same, format!("row {i} changed by a later token"))?;
            checked += 1;
        }
    }
    let (la, cb) = forward(&bb, &store, &base)?;
    ensure(la == a && ca == cb, "recomputed cache differs")?;
    Ok(format!("{checked} earlier rows bit-exact, recomputed cache identical"))
}

fn end_to_end_trend() -> Outcome {
    let cfg = RunConfig::default();
    let start = Instant::now();
    let summary = run_ablation(&cfg, &[0, 1, 2], None, |m| eprintln!("{m}")).map_err(|e| e.to_string())?;
    let full = AblationSummary::mean(&summary.full);
    let ablated = AblationSummary::mean(&summary.ablated);
    let minutes_per_seed = start.elapsed().as_secs_f64() / 60.0 / 3.0;
    let msg = format!(
        "full {:.1}% vs no_fast_no_lam {:.1}% (per seed full {:?}, ablated {:?}), {minutes_per_seed:.1} min/seed",
        100.0 * full,
        100.0 * ablated,
        summary.full,
        summary.ablated
    );
    ensure(full - ablated >= 0.10 && full >= 0.60, msg.clone())?;
    Ok(msg)
}

fn padding_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    for _ in 0..10_000 {
        let v: [f64; NATIVE_DIMS] = std::array::from_fn(|_| rng.gen_range(-10.0..10.0));
        let arm = if rng.gen::<bool>() { Arm::Right } else { Arm::Left };
        let p = pad_to_20(&v, arm);
        ensure(unpad(&p, arm) == v, "pad/unpad is not the identity")?;
        let off = arm.offset();
        let stray = p.iter().enumerate().any(|(i, &x)| !(off..off + NATIVE_DIMS).contains(&i) && x != 0.0);
        ensure(!stray, "off-arm slot is non-zero")?;
    }
    let left = (0..10_000).filter(|&i| draw_scene(5, i).2 == Arm::Left).count();
    let frac = left as f64 / 10_000.0;
    ensure((frac - 0.5).abs() <= 0.03, format!("left fraction {frac}"))?;
    Ok(format!("identity holds, left-arm fraction {frac:.4}"))
}

fn main() {
    let skip_trend = std::env::var("VLA_ACCEPT_TREND").map_or(true, |v| v != "1");
    let criteria: Vec<(usize, &str, fn() -> Outcome)> = vec![
        (1, "nsvq norm preservation", nsvq_norm),
        (2, "nearest-code oracle", nearest_code_oracle),
        (3, "fast round trip", fast_round_trip),
        (4, "gradient fidelity", gradient_fidelity),
        (5, "flow-matching exactness", euler_exact),
        (6, "structural routing", structural_routing),
        (7, "causality and cache consistency", causality_and_cache),
        (8, "end-to-end trend", end_to_end_trend),
        (9, "padding and arm contract", padding_contract),
    ];
    let mut failed = 0;
    for (n, name, run) in criteria {
        if n == 8 && skip_trend {
            println!("criterion {n} [{name}]: SKIP (set VLA_ACCEPT_TREND=1 to run)");
            continue;
        }
        let t = Instant::now();
        let res = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(m) => println!("criterion {n} [{name}]: PASS ({m}; {secs:.2}s)"),
            Err(m) => {
                failed += 1;
                println!("criterion {n} [{name}]: FAIL ({m}; {secs:.2}s)");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
