//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Failures are reported but do not change the exit status unless
//! `ACCEPTANCE_STRICT=1` is set.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use simulmask::alibi::modified_alibi;
use simulmask::data::{gen_synthetic, CorpusSizes, SentencePair, SyntheticTask};
use simulmask::engine::{
    prefix_expand, replay_visibility, simul_generate, Decoder, GenerateOptions, GenerationMode,
};
use simulmask::experiment::{decode_corpus, flops_report, ExperimentConfig};
use simulmask::mask::{causal_mask, simul_mask, AttentionMask};
use simulmask::metrics::{laal, quality_proxy};
use simulmask::model::{
    fine_tune, forward_full, init_model, sentence_loss_and_grad, CacheBias, ModelConfig,
    ModelParams, Optimizer, TrainConfig,
};
use simulmask::policy::{DecisionPolicy, PromptLayout};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Duration);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn model(layers: usize, heads: usize, d: usize, vocab: usize, seed: u64) -> ModelParams<f32> {
    init_model(&ModelConfig {
        n_layers: layers,
        n_heads: heads,
        d_model: d,
        vocab_size: vocab,
        seed,
        max_seq_len: 256,
    })
    .expect("valid model config")
}

fn tokens(rng: &mut ChaCha8Rng, n: usize, vocab: u32) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(4..vocab)).collect()
}

fn max_abs(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn fig3_grid() -> Outcome {
    let layout = PromptLayout::new(1, 4, 1, 4).map_err(err)?;
    let policy = DecisionPolicy::wait_k(1, 4).map_err(err)?;
    let got = simul_mask(&layout, &policy).map_err(err)?;
    // Rows/cols: p1 s1 s2 s3 s4 p2 t1 t2 t3 t4.
    let hidden = [(5, 2), (5, 3), (5, 4), (6, 3), (6, 4), (7, 4)];
    let want = AttentionMask::from_fn(10, 10, |i, j| j <= i && !hidden.contains(&(i, j)));
    ensure(got == want, || format!("grid differs:\n{}", got.to_ascii("wait-1")))?;
    let extra = got.hidden_count() - causal_mask(10).map_err(err)?.hidden_count();
    ensure(extra == 6, || format!("{extra} entries hidden beyond causal"))?;
    Ok("6 entries hidden beyond causal".into())
}

fn fig4_biases() -> Outcome {
    let mut mask = causal_mask(4).map_err(err)?;
    mask.set(3, 1, false);
    mask.set(3, 2, false);
    let b = modified_alibi(&mask, 1.0).map_err(err)?;
    let k1: Option<f64> = b.value(3, 0);
    let k4: Option<f64> = b.value(3, 3);
    ensure(k1 == Some(-1.0) && k4 == Some(0.0), || format!("k1 {k1:?} k4 {k4:?}"))?;
    ensure(b.value::<f64>(3, 1).is_none() && b.value::<f64>(3, 2).is_none(), || {
        "hidden keys carry a bias".into()
    })?;
    Ok("k1 -1, k4 0".into())
}

fn cached_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f32;
    let cases = 100;
    for case in 0..cases {
        let p = model(2, 4, 64, 64, case);
        let (pre, s, mid, t) = (
            rng.random_range(1..=3),
            rng.random_range(1..=24),
            rng.random_range(1..=3),
            rng.random_range(1..=24),
        );
        let k = rng.random_range(1..=7);
        let (pre_t, src, mid_t, tgt) = (
            tokens(&mut rng, pre, 64),
            tokens(&mut rng, s, 64),
            tokens(&mut rng, mid, 64),
            tokens(&mut rng, t, 64),
        );
        let policy = DecisionPolicy::wait_k(k, s).map_err(err)?;
        let g = simul_generate(
            &p,
            &policy,
            &pre_t,
            &src,
            &mid_t,
            &GenerateOptions {
                decoder: Decoder::Forced(&tgt),
                max_target_len: t,
                ..Default::default()
            },
        )
        .map_err(err)?;
        let layout = PromptLayout::new(pre, s, mid, t).map_err(err)?;
        let mask = simul_mask(&layout, &policy).map_err(err)?;
        let biases = p
            .slopes()
            .as_slice()
            .iter()
            .map(|&m| modified_alibi(&mask, m))
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
        let seq = [pre_t, src, mid_t, tgt].concat();
        let full = forward_full(&p, &seq, &mask, &biases).map_err(err)?;
        ensure(g.logits.len() == t, || format!("case {case}: {} predictions", g.logits.len()))?;
        for (u, row) in g.logits.iter().enumerate() {
            worst = worst.max(max_abs(row, full.row(layout.predictor_row(u + 1))));
        }
    }
    ensure(worst < 1e-4, || format!("max |diff| {worst:.3e}"))?;
    Ok(format!("{cases} cases, max |diff| {worst:.2e}"))
}

fn stale_negative_control() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cases = 50;
    let mut diverged = 0;
    for case in 0..cases {
        let p = model(2, 4, 64, 64, 100 + case);
        let s = rng.random_range(12..=24);
        let t = rng.random_range(2..=s);
        let src = tokens(&mut rng, s, 64);
        let tgt = tokens(&mut rng, t, 64);
        let policy = DecisionPolicy::wait_k(1, s).map_err(err)?;
        let run = |mode, cache_bias| {
            simul_generate(
                &p,
                &policy,
                &[1],
                &src,
                &[2],
                &GenerateOptions {
                    mode,
                    decoder: Decoder::Forced(&tgt),
                    max_target_len: t,
                    cache_bias,
                },
            )
        };
        let stale = run(GenerationMode::Cached, CacheBias::StaleAbsolute).map_err(err)?;
        let fresh = run(GenerationMode::Recompute, CacheBias::CanonicalRank).map_err(err)?;
        let d = stale
            .logits
            .iter()
            .zip(&fresh.logits)
            .map(|(a, b)| max_abs(a, b))
            .fold(0.0, f32::max);
        if d > 1e-2 {
            diverged += 1;
        }
    }
    let frac = diverged as f64 / cases as f64;
    ensure(frac >= 0.9, || format!("{diverged}/{cases} cases diverge"))?;
    Ok(format!("{diverged}/{cases} cases diverge by > 1e-2"))
}

fn mask_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = model(1, 2, 8, 32, 0);
    let cases = 500;
    for case in 0..cases {
        let (pre, s, mid, t) = (
            rng.random_range(1..=3),
            rng.random_range(1..=16),
            rng.random_range(1..=3),
            rng.random_range(1..=16),
        );
        let policy = if rng.random_bool(0.5) {
            DecisionPolicy::wait_k(rng.random_range(1..=8), s)
        } else {
            let mut reads: Vec<usize> = (0..t).map(|_| rng.random_range(1..=s)).collect();
            reads.sort_unstable();
            DecisionPolicy::table(reads, s)
        }
        .map_err(err)?;
        let tgt = tokens(&mut rng, t, 32);
        let g = simul_generate(
            &p,
            &policy,
            &tokens(&mut rng, pre, 32),
            &tokens(&mut rng, s, 32),
            &tokens(&mut rng, mid, 32),
            &GenerateOptions {
                decoder: Decoder::Forced(&tgt),
                max_target_len: t,
                ..Default::default()
            },
        )
        .map_err(err)?;
        let layout = PromptLayout::new(pre, s, mid, t).map_err(err)?;
        let rows = replay_visibility(&g.trace, &layout).map_err(err)?;
        let mask = simul_mask(&layout, &policy).map_err(err)?;
        for (i, r) in rows.iter().enumerate() {
            let want: Vec<usize> = mask.visible_in_row(i).collect();
            ensure(*r == want, || format!("case {case} ({policy}) row {i}: {r:?} vs {want:?}"))?;
        }
    }
    Ok(format!("{cases} layouts"))
}

fn prefix_counting() -> Outcome {
    let mut checked = 0;
    for s in 1..=20usize {
        for t in 1..=20usize {
            let src: Vec<u32> = (0..s as u32).map(|i| 4 + i).collect();
            let tgt: Vec<u32> = (0..t as u32).map(|i| 30 + i).collect();
            for k in 1..=20usize {
                let pairs = prefix_expand(&src, &tgt, k).map_err(err)?;
                let want = (s as i64 - (k as i64 - 1)).max(t as i64) as usize;
                ensure(pairs.len() == want, || {
                    format!("S={s} T={t} k={k}: {} pairs, want {want}", pairs.len())
                })?;
                let distinct: HashSet<(usize, usize)> =
                    pairs.iter().map(|p| (p.source.len(), p.target.len())).collect();
                ensure(distinct.len() == pairs.len(), || format!("S={s} T={t} k={k}: repeated pair"))?;
                ensure(
                    pairs.iter().all(|p| src.starts_with(&p.source) && tgt.starts_with(&p.target)),
                    || format!("S={s} T={t} k={k}: pair is not a prefix"),
                )?;
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} combinations"))
}

fn compute_ordering() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut cfg = ExperimentConfig::default();
    for (k, v) in [
        ("task", "copy"),
        ("eval_sentences", "200"),
        ("min_len", "8"),
        ("max_len", "22"),
        ("train_k", "3"),
    ] {
        cfg.set(k, v).map_err(err)?;
    }
    cfg.out = dir.path().join("flops");
    let corpus = cfg.eval_corpus().map_err(err)?;
    let mean_len = corpus.iter().map(|p| p.source.len()).sum::<usize>() as f64 / corpus.len() as f64;
    let (r, _) = flops_report(&cfg).map_err(err)?;
    let ratio = r.prefix_steps as f64 / r.simulmask_steps as f64;
    let detail = format!(
        "recompute exp {:.2}, initial exp {:.2}, steps ratio {ratio:.1} at mean length {mean_len:.1}",
        r.recompute_exponent, r.initial_exponent
    );
    ensure(r.cached_below_recompute, || format!("cached not below recompute; {detail}"))?;
    ensure(r.recompute_exponent > 1.5 && r.initial_exponent < 1.2, || detail.clone())?;
    ensure(ratio >= 3.0 && (mean_len - 15.0).abs() < 1.0, || detail.clone())?;
    Ok(detail)
}

fn gradient_check() -> Outcome {
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 16,
        vocab_size: 24,
        seed: 8,
        max_seq_len: 64,
    };
    let p = init_model::<f64>(&cfg).map_err(err)?;
    let pair = SentencePair {
        source: vec![4, 5, 6, 7, 8, 9, 10],
        target: vec![11, 12, 13, 14, 15],
    };
    let tc = TrainConfig {
        train_k: 2,
        ..TrainConfig::default()
    };
    let (_, grads) = sentence_loss_and_grad(&p, &pair, &tc).map_err(err)?;
    let flat: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let samples = 300;
    for _ in 0..samples {
        let idx = rng.random_range(0..p.flat_len());
        let mut plus = p.clone();
        plus.set_flat(idx, p.get_flat(idx) + h);
        let mut minus = p.clone();
        minus.set_flat(idx, p.get_flat(idx) - h);
        let lp = sentence_loss_and_grad(&plus, &pair, &tc).map_err(err)?.0;
        let lm = sentence_loss_and_grad(&minus, &pair, &tc).map_err(err)?.0;
        let numeric = (lp - lm) / (2.0 * h);
        let rel = (numeric - flat[idx]).abs() / numeric.abs().max(flat[idx].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    ensure(worst < 1e-3, || format!("worst relative error {worst:.2e}"))?;
    Ok(format!("{samples} parameters, worst relative error {worst:.2e}"))
}

fn learning_smoke() -> Outcome {
    let task = SyntheticTask::Shift(2);
    let sizes = CorpusSizes {
        sentences: 500,
        min_len: 8,
        max_len: 16,
    };
    let mut accs = vec![];
    for seed in 0..5u64 {
        let train = gen_synthetic(task, sizes, 64, seed).map_err(err)?;
        let held_out = gen_synthetic(task, CorpusSizes { sentences: 100, ..sizes }, 64, seed + 1000)
            .map_err(err)?;
        let tc = TrainConfig {
            train_k: 5,
            epochs: 20,
            learning_rate: 0.003,
            optimizer: Optimizer::adam(),
            shuffle_seed: seed,
            ..TrainConfig::default()
        };
        let (params, _) = fine_tune(model(2, 4, 64, 64, seed), &train, &tc).map_err(err)?;
        let gens = decode_corpus(&params, &held_out, 3, GenerationMode::Cached, CacheBias::CanonicalRank)
            .map_err(err)?;
        let hyps: Vec<_> = gens.into_iter().map(|g| g.tokens).collect();
        let refs: Vec<_> = held_out.iter().map(|p| p.target.clone()).collect();
        accs.push(quality_proxy(&hyps, &refs).map_err(err)?.token_accuracy);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let per_seed: Vec<String> = accs.iter().map(|a| format!("{a:.3}")).collect();
    let detail = format!("mean held-out accuracy {mean:.3} (seeds {})", per_seed.join(" "));
    ensure(mean >= 0.9, || detail.clone())?;
    Ok(detail)
}

fn laal_sanity() -> Outcome {
    let p = model(1, 2, 8, 64, 0);
    let mut n = 0;
    for k in 1..=7usize {
        for s in 8..=32usize {
            let src: Vec<u32> = (0..s).map(|i| 4 + (i % 60) as u32).collect();
            let policy = DecisionPolicy::wait_k(k, s).map_err(err)?;
            let g = simul_generate(
                &p,
                &policy,
                &[1],
                &src,
                &[2],
                &GenerateOptions {
                    decoder: Decoder::Forced(&src),
                    max_target_len: s,
                    ..Default::default()
                },
            )
            .map_err(err)?;
            let l = laal(&g.trace, s).map_err(err)?;
            ensure(l == k as f64, || format!("k={k} S={s}: laal {l}"))?;
            let offline = DecisionPolicy::wait_k(s + k, s).map_err(err)?;
            let g = simul_generate(
                &p,
                &offline,
                &[1],
                &src,
                &[2],
                &GenerateOptions {
                    decoder: Decoder::Forced(&src),
                    max_target_len: s,
                    ..Default::default()
                },
            )
            .map_err(err)?;
            let l = laal(&g.trace, s).map_err(err)?;
            ensure(l == s as f64, || format!("offline S={s}: laal {l}"))?;
            n += 1;
        }
    }
    Ok(format!("{n} wait-k and offline traces"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("wait-1 mask grid", fig3_grid, Duration::from_millis(1)),
        ("modified bias on a gapped row", fig4_biases, Duration::from_millis(1)),
        ("cached logits equal full forward", cached_equivalence, Duration::from_secs(60)),
        ("stale cache positions diverge", stale_negative_control, Duration::from_secs(30)),
        ("replayed visibility equals mask", mask_oracle, Duration::from_secs(30)),
        ("prefix expansion counts", prefix_counting, Duration::from_secs(5)),
        ("compute ordering", compute_ordering, Duration::from_secs(60)),
        ("finite-difference gradients", gradient_check, Duration::from_secs(60)),
        ("learning smoke test", learning_smoke, Duration::from_secs(600)),
        ("latency sanity", laal_sanity, Duration::from_secs(1)),
    ];
    // ACCEPTANCE_ONLY=3,5 runs a subset.
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, f, limit)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = f();
        let took = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if took <= *limit => (true, d),
            Ok(d) => (false, format!("{d}; took longer than {limit:?}")),
            Err(e) => (false, e),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} {:>2} {name}: {detail} [{:.3?}]",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            took
        );
    }
    println!("{} of {ran} criteria passed", ran - failed);
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
