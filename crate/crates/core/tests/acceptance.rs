//! Acceptance criteria 1 to 8. Each test prints one `[PASS]` or `[FAIL]`
//! line straight to stderr, so the verdicts show up even when output is
//! captured.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spancl::autograd::{log_sum_exp, softplus, Graph, Tensor};
use spancl::corpus::{build_support_set, sample_episode, write_corpus, Sentence, SpanAnnotation, NON_ENTITY};
use spancl::embedkit::EmbeddingSource;
use spancl::evalkit::span_prf1;
use spancl::gradcheck::grad_check;
use spancl::model::{
    biaffine_raw, biaffine_scores, bind_frozen, forward_sentence, init_params, model_forward, BclConfig, Mode, ParamId,
};
use spancl::objective::{build_pairs, circle_loss, circle_loss_value, cosine_similarity, LossConfig};
use spancl::protocol::{
    finetune_support, raw_span_reps, train_source, FinetunePlan, InferenceConfig, Method, Prediction, Predictor,
};
use spancl::synth::{class_signals, label_names, separable_benchmark, synthetic_pool, PoolSpec};

fn verdict(n: u32, what: &str, ok: bool, elapsed: Duration, limit: Duration, detail: &str) {
    let ok = ok && elapsed < limit;
    let line = format!(
        "[{}] criterion {n}: {what} ({detail}; {:.2?} of {:.0?})\n",
        if ok { "PASS" } else { "FAIL" },
        elapsed,
        limit
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "{}", line.trim_end());
}

fn uniform(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn criterion_1_gradient_oracle() {
    let start = Instant::now();
    let report = grad_check(0).expect("grad check runs");
    let worst = report.max_relative_error();
    verdict(
        1,
        "full-pipeline gradient check",
        report.groups.len() == ParamId::ALL.len() && worst < 1e-4,
        start.elapsed(),
        Duration::from_secs(10),
        &format!("max relative error {worst:.2e} over {} groups", report.groups.len()),
    );
}

#[test]
fn criterion_2_biaffine_matches_triple_loop() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (n, h, r) = (rng.gen_range(1..=4), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let cfg = BclConfig::small(1, h, r);
        let mut params = init_params(&cfg, rng.gen()).unwrap();
        let u1 = uniform(&mut rng, h * r * h);
        let u2 = uniform(&mut rng, 2 * h * r);
        let b = uniform(&mut rng, r);
        *params.get_mut(ParamId::BiaffineBilinear) = Tensor::new(vec![h, r, h], u1.clone()).unwrap();
        *params.get_mut(ParamId::BiaffineLinear) = Tensor::new(vec![2 * h, r], u2.clone()).unwrap();
        *params.get_mut(ParamId::BiaffineBias) = Tensor::vector(b.clone());
        let hf = uniform(&mut rng, n * h);
        let hb = uniform(&mut rng, n * h);

        let mut oracle = vec![0.0; n * n * r];
        for i in 0..n {
            for j in 0..n {
                for k in 0..r {
                    let mut s = b[k];
                    for a in 0..h {
                        for c in 0..h {
                            s += hf[i * h + a] * u1[(a * r + k) * h + c] * hb[j * h + c];
                        }
                        s += hf[i * h + a] * u2[a * r + k];
                        s += hb[j * h + a] * u2[(h + a) * r + k];
                    }
                    oracle[(i * n + j) * r + k] = s;
                }
            }
        }
        let mut normed = oracle.clone();
        for row in normed.chunks_mut(r) {
            let mean = row.iter().sum::<f64>() / r as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / r as f64;
            row.iter_mut().for_each(|x| *x = (*x - mean) / (var + 1e-5).sqrt());
        }

        let mut g = Graph::new();
        let pv = bind_frozen(&mut g, &params);
        let hf_v = g.constant(Tensor::matrix(n, h, hf).unwrap());
        let hb_v = g.constant(Tensor::matrix(n, h, hb).unwrap());
        let raw = biaffine_raw(&mut g, hf_v, hb_v, &pv, &cfg).unwrap();
        let scores = biaffine_scores(&mut g, hf_v, hb_v, &pv, &cfg, Mode::Eval, "x").unwrap();
        assert_eq!(g.value(raw).shape(), &[n, n, r]);
        for (got, want) in [(g.value(raw).data(), &oracle), (g.value(scores).data(), &normed)] {
            for (a, b) in got.iter().zip(want.iter()) {
                worst = worst.max((a - b).abs() / b.abs().max(1e-6));
            }
        }
    }
    verdict(
        2,
        "biaffine scores equal the triple-loop oracle",
        worst < 1e-6,
        start.elapsed(),
        Duration::from_secs(5),
        &format!("50 instances, worst relative error {worst:.2e}"),
    );
}

#[test]
fn criterion_3_circle_loss_analytics() {
    let start = Instant::now();
    let cfg = |tau: f64, lambda: f64| LossConfig {
        tau,
        lambda,
        ..LossConfig::default()
    };
    let examples = [
        circle_loss_value(&[0.3], &[], &cfg(10.0, 30.0)),
        circle_loss_value(&[0.0], &[0.0], &cfg(1.0, 0.0)),
        circle_loss_value(&[1.0], &[-1.0], &cfg(2.0, 0.0)),
    ];
    let expected = [0.0, 2f64.ln(), (-4f64).exp().ln_1p()];
    let mut ok = examples.iter().zip(&expected).all(|(a, b)| (a - b).abs() < 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = 0;
    for _ in 0..100 {
        let np = rng.gen_range(1..=6);
        let nn = rng.gen_range(1..=6);
        let pos: Vec<f64> = (0..np).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let neg: Vec<f64> = (0..nn).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tau = rng.gen_range(0.5..10.0);
        let lambda = rng.gen_range(0.0..30.0);
        let c = cfg(tau, lambda);
        let base = circle_loss_value(&pos, &neg, &c);
        let lse_pos = log_sum_exp(&pos.iter().map(|x| -tau * x).collect::<Vec<_>>());
        let lse_neg = log_sum_exp(&neg.iter().map(|x| tau * x).collect::<Vec<_>>());
        let shift_ok = (base - softplus(lambda + lse_pos + lse_neg)).abs() < 1e-12 * base.max(1.0);
        let bump = rng.gen_range(0.01..0.5);
        let mut p2 = pos.clone();
        let i = rng.gen_range(0..np);
        p2[i] += bump;
        let mut n2 = neg.clone();
        let j = rng.gen_range(0..nn);
        n2[j] += bump;
        let pos_ok = circle_loss_value(&p2, &neg, &c) < base;
        let neg_ok = circle_loss_value(&pos, &n2, &c) > base;
        if !(shift_ok && pos_ok && neg_ok) {
            failures += 1;
        }
    }
    ok &= failures == 0;
    verdict(
        3,
        "circle loss examples, lambda shift and monotonicity",
        ok,
        start.elapsed(),
        Duration::from_secs(5),
        &format!("examples {examples:.10?}, {failures} of 100 random configurations failed"),
    );
}

#[test]
fn criterion_4_overfit_separable_pool() {
    let start = Instant::now();
    let bench = separable_benchmark(0).unwrap();
    let plan = &bench.plan;
    let episode = sample_episode(&bench.test, plan.way, plan.shot, 1000).unwrap();
    let f1_of = |params, model: &BclConfig| {
        let p = Predictor::fit(
            Method::Nn,
            params,
            &episode.support,
            &bench.source,
            model,
            &InferenceConfig::default(),
        )
        .unwrap();
        span_prf1(
            &p.predict_all(&episode.query, &bench.source, 1).unwrap(),
            &episode.query,
        )
        .unwrap()
        .f1
    };

    let init = init_params(&plan.model, plan.seed).unwrap();
    let trained = train_source(&init, &bench.train, None, plan, &bench.source).unwrap();
    let tuned = finetune_support(
        &trained.params,
        &episode.support,
        &FinetunePlan::for_shot(plan.shot, 0),
        &bench.source,
        &plan.model,
    )
    .unwrap();
    let bcl = f1_of(&tuned, &plan.model);

    let plain = BclConfig {
        use_biaffine: false,
        ..plan.model
    };
    let baseline = f1_of(&init_params(&plain, plan.seed).unwrap(), &plain);
    verdict(
        4,
        "overfit on a separable pool beats the untrained no-biaffine baseline",
        bcl == 1.0 && baseline < bcl,
        start.elapsed(),
        Duration::from_secs(300),
        &format!("held-out F1 {bcl:.4} vs baseline {baseline:.4}"),
    );
}

#[test]
fn criterion_5_ablation_switches() {
    let start = Instant::now();
    let labels = label_names(4);
    let pool = synthetic_pool(
        &PoolSpec {
            labels: labels.clone(),
            sentences: 20,
            max_entity_len: 3,
            min_tokens: 6,
            max_tokens: 10,
            nested_rate: 0.5,
            ..PoolSpec::default()
        },
        5,
    )
    .unwrap();
    let d = 12;
    let source = EmbeddingSource::synthetic(5, d, Some(class_signals(&labels, d, 2.0).unwrap())).unwrap();
    let full = BclConfig::small(d, 6, 5);
    let params = init_params(&full, 5).unwrap();
    let mut checks = Vec::new();

    for s in &pool {
        let e = source.lookup(s).unwrap();
        let raw = raw_span_reps(s, &e, full.max_len).unwrap();
        // without the biaffine layer, with or without residual, spans are max-pooled embeddings
        for use_residual in [true, false] {
            let cfg = BclConfig {
                use_biaffine: false,
                use_residual,
                ..full
            };
            let reps = model_forward(&params, s, &e, &cfg, Mode::Train { seed: 1 }).unwrap();
            checks.push(("no biaffine equals max-pooled embeddings", reps == raw));
        }
        // zero projection with the residual on leaves the embeddings untouched
        let mut zero_p = params.clone();
        let shape = zero_p.get(ParamId::Projection).shape().to_vec();
        *zero_p.get_mut(ParamId::Projection) = Tensor::zeros(&shape);
        let reps = model_forward(&zero_p, s, &e, &full, Mode::Eval).unwrap();
        checks.push(("P = 0 with residual equals embeddings", reps == raw));
        // dropping the residual removes exactly the embedding term
        for mode in [Mode::Eval, Mode::Train { seed: 7 }] {
            let words = |cfg: &BclConfig| {
                let mut g = Graph::new();
                let pv = bind_frozen(&mut g, &params);
                let out = forward_sentence(&mut g, &pv, s, &e, cfg, mode).unwrap();
                g.value(out.words).data().to_vec()
            };
            let with = words(&full);
            let without = words(&BclConfig {
                use_residual: false,
                ..full
            });
            let rebuilt: Vec<f64> = without.iter().zip(e.to_f64()).map(|(p, w)| p + w).collect();
            checks.push(("no residual drops only the embedding term", rebuilt == with));
        }
    }

    // the loss switch changes the loss value and nothing upstream of it
    let unbiased = LossConfig::default().without_bias();
    checks.push((
        "no loss bias sets lambda to zero only",
        unbiased
            == LossConfig {
                lambda: 0.0,
                ..LossConfig::default()
            },
    ));
    let with_pairs = pool.iter().find(|s| {
        let mut seen = HashSet::new();
        s.annotations.iter().any(|a| !seen.insert(a.label.as_str()))
    });
    let Some(s) = with_pairs else {
        panic!("pool has no sentence with a repeated label");
    };
    let e = source.lookup(s).unwrap();
    for loss in [LossConfig::default(), unbiased] {
        let mut g = Graph::new();
        let pv = bind_frozen(&mut g, &params);
        let out = forward_sentence(&mut g, &pv, s, &e, &full, Mode::Eval).unwrap();
        let reps = g.value(out.reps).clone();
        let labels: Vec<&str> = out
            .spans
            .iter()
            .map(|&sp| s.label_of(sp).unwrap_or(NON_ENTITY))
            .collect();
        let pairs = build_pairs(&labels, &loss, 0);
        let l = circle_loss(&mut g, out.reps, &pairs, &loss)
            .unwrap()
            .expect("sentence has pairs");
        let cos = |a: usize, b: usize| cosine_similarity(reps.row(a), reps.row(b)).value;
        let per_anchor: f64 = pairs
            .sets
            .iter()
            .map(|p| {
                let pos: Vec<f64> = p.positives.iter().map(|&j| cos(p.anchor, j)).collect();
                let neg: Vec<f64> = p.negatives.iter().map(|&j| cos(p.anchor, j)).collect();
                circle_loss_value(&pos, &neg, &loss)
            })
            .sum::<f64>()
            / pairs.sets.len() as f64;
        checks.push((
            "graph loss matches scalar loss",
            (g.value(l).item() - per_anchor).abs() < 1e-9,
        ));
    }

    let failed: HashSet<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    verdict(
        5,
        "ablation switches change only their own computation",
        failed.is_empty(),
        start.elapsed(),
        Duration::from_secs(30),
        &format!("{} checks, failing: {failed:?}", checks.len()),
    );
}

#[test]
fn criterion_6_protocol_invariants() {
    let start = Instant::now();
    let labels = label_names(8);
    let pool = synthetic_pool(
        &PoolSpec {
            labels: labels.clone(),
            sentences: 300,
            max_entity_len: 3,
            nested_rate: 0.3,
            ..PoolSpec::default()
        },
        6,
    )
    .unwrap();
    let d = 8;
    let source = EmbeddingSource::synthetic(6, d, Some(class_signals(&labels, d, 1.0).unwrap())).unwrap();
    let model = BclConfig::small(d, 3, 3);
    let params = init_params(&model, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut violations = Vec::new();
    for k in 0..1000u64 {
        let way = rng.gen_range(1..=5);
        let shot = rng.gen_range(1..=3);
        let e = sample_episode(&pool, way, shot, k).unwrap();
        let support_ids: HashSet<&str> = e.support.iter().map(|s| s.id.as_str()).collect();
        if e.query.iter().any(|q| support_ids.contains(q.id.as_str())) {
            violations.push(format!("episode {k}: support and query overlap"));
        }
        let counts = e.support_counts();
        if counts.len() != way || counts.values().any(|&c| c < shot || c > 2 * shot) {
            violations.push(format!("episode {k}: counts {counts:?} outside [{shot}, {}]", 2 * shot));
        }
        let method = [Method::Nn, Method::Proto, Method::NnShot][k as usize % 3];
        let p = Predictor::fit(
            method,
            &params,
            &e.support,
            &source,
            &model,
            &InferenceConfig::default(),
        )
        .unwrap();
        let preds = p.predict_all(&e.query, &source, 1).unwrap();
        if let Some(bad) = preds.iter().find(|p| !e.label_set.contains(&p.label)) {
            violations.push(format!("episode {k}: predicted label {} outside support", bad.label));
        }
    }
    verdict(
        6,
        "episode disjointness, support counts and prediction labels",
        violations.is_empty(),
        start.elapsed(),
        Duration::from_secs(60),
        &format!(
            "1000 episodes, {} violations{}",
            violations.len(),
            violations.first().map(|v| format!(", first: {v}")).unwrap_or_default()
        ),
    );
}

#[test]
fn criterion_7_end_to_end_determinism() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let bench = separable_benchmark(0).unwrap();
    let (support, query) = build_support_set(&bench.test, 5, 0).unwrap();
    for (name, sentences) in [("train", &bench.train), ("support", &support), ("query", &query)] {
        write_corpus(fs::File::create(root.join(format!("{name}.jsonl"))).unwrap(), sentences).unwrap();
    }
    let path = |name: &str| root.join(name).to_str().unwrap().to_string();
    let synth = [
        "--synthetic-dim",
        "32",
        "--synthetic-seed",
        "0",
        "--synthetic-labels",
        "L0,L1,L2,L3,L4,L5,L6,L7,L8,L9",
        "--synthetic-amplitude",
        "5",
    ];
    let run = |args: Vec<String>| {
        let out = Command::new(env!("CARGO_BIN_EXE_spancl"))
            .args(&args)
            .args(synth)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out.stdout
    };
    let mut outputs = Vec::new();
    for tag in ["a", "b"] {
        let argv = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
        run(argv(&format!(
            "train --corpus {} --out {} --episodes 200 --lr 0.01 --hidden 16 --biaffine-dim 16 --seed 0",
            path("train.jsonl"),
            path(&format!("src-{tag}"))
        )));
        run(argv(&format!(
            "finetune --checkpoint {} --support {} --out {} --seed 0",
            path(&format!("src-{tag}/model.ckpt")),
            path("support.jsonl"),
            path(&format!("ft-{tag}"))
        )));
        run(argv(&format!(
            "predict --checkpoint {} --support {} --query {} --out {} --workers 2 --seed 0",
            path(&format!("ft-{tag}/model.ckpt")),
            path("support.jsonl"),
            path("query.jsonl"),
            path(&format!("pred-{tag}.jsonl"))
        )));
        let report = Command::new(env!("CARGO_BIN_EXE_spancl"))
            .args([
                "evaluate",
                "--pred",
                &path(&format!("pred-{tag}.jsonl")),
                "--gold",
                &path("query.jsonl"),
            ])
            .output()
            .unwrap();
        assert!(report.status.success());
        outputs.push((fs::read(root.join(format!("pred-{tag}.jsonl"))).unwrap(), report.stdout));
    }
    let same = outputs[0] == outputs[1] && !outputs[0].0.is_empty();
    let report: serde_json::Value = serde_json::from_slice(&outputs[0].1).unwrap();
    verdict(
        7,
        "two seeded end-to-end runs agree byte for byte",
        same,
        start.elapsed(),
        Duration::from_secs(600),
        &format!("{} prediction bytes, query F1 {}", outputs[0].0.len(), report["f1"]),
    );
}

#[test]
fn criterion_8_metric_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let labels = ["A", "B", "C"];
    let mut mismatches = 0;
    for case in 0..1000 {
        let mut gold = Vec::new();
        let mut preds = Vec::new();
        let mut gold_set = HashSet::new();
        let mut pred_set = HashSet::new();
        for k in 0..rng.gen_range(1..=4) {
            let id = format!("c{case}-{k}");
            let n = rng.gen_range(1..=8);
            let mut spans = Vec::new();
            // nested structure: a random outer span plus spans drawn inside it
            for _ in 0..rng.gen_range(0..=4) {
                let (a, b) = (rng.gen_range(1..=n), rng.gen_range(1..=n));
                let (p, q) = (a.min(b), a.max(b));
                spans.push((p, q, labels[rng.gen_range(0..3)]));
                let ip = rng.gen_range(p..=q);
                spans.push((ip, rng.gen_range(ip..=q), labels[rng.gen_range(0..3)]));
            }
            spans.sort();
            spans.dedup();
            for &(p, q, l) in &spans {
                gold_set.insert((id.clone(), p, q, l.to_string()));
            }
            // predictions: gold spans kept, relabeled or shifted, plus random spans
            let mut guesses = HashSet::new();
            for &(p, q, l) in &spans {
                match rng.gen_range(0..4) {
                    0 => {}
                    1 => {
                        guesses.insert((p, q, l));
                    }
                    2 => {
                        guesses.insert((p, q, labels[rng.gen_range(0..3)]));
                    }
                    _ => {
                        guesses.insert((p, (q + 1).min(n), l));
                    }
                }
            }
            for _ in 0..rng.gen_range(0..=2) {
                let p = rng.gen_range(1..=n);
                guesses.insert((p, rng.gen_range(p..=n), labels[rng.gen_range(0..3)]));
            }
            for &(p, q, l) in &guesses {
                pred_set.insert((id.clone(), p, q, l.to_string()));
                preds.push(Prediction {
                    sentence_id: id.clone(),
                    start: p,
                    end: q,
                    label: l.to_string(),
                    score: 1.0,
                });
            }
            let ann = spans.iter().map(|&(p, q, l)| SpanAnnotation::new(p, q, l)).collect();
            gold.push(Sentence::new(id, vec!["t".to_string(); n], ann).unwrap());
        }
        let r = span_prf1(&preds, &gold).unwrap();
        let tp = gold_set.intersection(&pred_set).count();
        let (np, ng) = (pred_set.len(), gold_set.len());
        let p = if np == 0 { 0.0 } else { tp as f64 / np as f64 };
        let rc = if ng == 0 { 0.0 } else { tp as f64 / ng as f64 };
        let f1 = if p + rc == 0.0 { 0.0 } else { 2.0 * p * rc / (p + rc) };
        let same = r.tp == tp
            && r.fp == np - tp
            && r.fn_ == ng - tp
            && (r.precision - p).abs() < 1e-12
            && (r.recall - rc).abs() < 1e-12
            && (r.f1 - f1).abs() < 1e-12;
        if !same {
            mismatches += 1;
        }
    }
    verdict(
        8,
        "span P/R/F1 equals the set-intersection oracle",
        mismatches == 0,
        start.elapsed(),
        Duration::from_secs(10),
        &format!("1000 nested cases, {mismatches} mismatches"),
    );
}
