//! Acceptance suite: one test per shipping criterion, each printing a
//! single verdict line (run with `--nocapture` to see them on success).
//!
//! Criteria 1 and 6 need the Omniglot image tree on disk; point
//! `MATCHKIT_OMNIGLOT_DIR` at it (or place it at `data/omniglot` in the
//! workspace root). Without it those tests report SKIP. Criterion 6
//! additionally wants `MATCHKIT_RUN_LONG=1` since its training run takes
//! CPU-hours.

use std::path::{Path, PathBuf};
use std::time::Instant;

use matchkit::commands::{run_eval, EvalArgs, EvalMode, SplitPart};

use matchkit::metrics::format_line;
use matchkit_core::attention::{
    attend, attend_knn, attend_softmax_cosine, classify, predict, AttentionMode,
    AttentionWeights, SupportSet,
};
use matchkit_core::context::FceConfig;
use matchkit_core::encoder::{
    init_params, BoundParams, EncoderConfig, MlpEmbedConfig, ModelSpec, Phase,
};
use matchkit_core::episode::{
    augment_rotations, gen_synthetic, mix_seed, sample_episode, split_classes,
};
use matchkit_core::eval::{evaluate, EmbedStrategy, EvalConfig};
use matchkit_core::gradcheck::{episode_gradient_check, GRADCHECK_TOL};
use matchkit_core::graph::Graph;
use matchkit_core::train::{
    episode_nll, fine_tune, train_baseline_classifier, train_matching_net, FineTuneMode,
    OptimConfig, TrainConfig,
};
use matchkit_core::{Real, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn verdict(criterion: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {criterion}: {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn skip(criterion: &str, why: &str) {
    println!("ACCEPTANCE {criterion}: SKIP — {why}");
}

fn omniglot_dir() -> Option<PathBuf> {
    if let Ok(p) = std::env::var("MATCHKIT_OMNIGLOT_DIR") {
        let p = PathBuf::from(p);
        if p.is_dir() {
            return Some(p);
        }
    }
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/omniglot");
    p.is_dir().then_some(p)
}

fn mlp_model(input_dim: usize, fce: Option<usize>) -> ModelSpec {
    ModelSpec {
        encoder: EncoderConfig::Mlp(MlpEmbedConfig {
            input_dim,
            hidden_dims: vec![64],
            output_dim: 64,
        }),
        fce: fce.map(|steps| FceConfig { steps }),
    }
}

// ---------------------------------------------------------------------------
// 1. Training-free pixel baselines on Omniglot
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_pixel_baseline_reproduction() {
    let Some(dir) = omniglot_dir() else {
        skip(
            "1 pixel-baseline",
            "Omniglot not found (set MATCHKIT_OMNIGLOT_DIR or data/omniglot)",
        );
        return;
    };
    let start = Instant::now();
    let (base, _) = matchkit::data::load_image_class_tree(&dir).expect("load omniglot");
    assert!(
        base.n_classes() > 1200,
        "expected the full 1623-character tree, got {}",
        base.n_classes()
    );
    let split = split_classes(&base, 1200, 0).unwrap().expand_rotations();
    let dataset = augment_rotations(&base).unwrap();

    let mut results = Vec::new();
    for (ways, expected) in [(5usize, 0.417), (20usize, 0.267)] {
        let report = evaluate(
            &EmbedStrategy::RawInput,
            &dataset,
            &split.test,
            &EvalConfig {
                ways,
                shots: 1,
                batch_per_class: 2,
                episodes: 1000,
                seed: 1,
                attention: AttentionMode::SoftmaxCosine,
            },
        )
        .unwrap();
        results.push((ways, report.accuracy, expected));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let ok = results
        .iter()
        .all(|(_, acc, expected)| (acc - expected).abs() <= 0.04)
        && elapsed < 300.0;
    let detail = results
        .iter()
        .map(|(w, a, e)| format!("{w}-way 1-shot acc={a:.4} (target {e} ±0.04)"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        "1 pixel-baseline",
        ok,
        &format!("{detail}, {elapsed:.0}s"),
    );
    for (ways, acc, expected) in results {
        assert!(
            (acc - expected).abs() <= 0.04,
            "{ways}-way pixel accuracy {acc:.4} outside {expected} ±0.04"
        );
    }
    assert!(elapsed < 300.0, "took {elapsed:.0}s, budget 300s");
}

// ---------------------------------------------------------------------------
// 2. Chance calibration of untrained models
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_untrained_models_score_chance() {
    // Chance level is only observable when inputs carry no class signal;
    // with separable inputs even random projections inherit the geometry.
    // Noise far above the prototype scale removes the signal.
    let ds = gen_synthetic(60, 16, 10.0, 31).unwrap();
    let split = split_classes(&ds, 30, 3).unwrap();
    let model = mlp_model(16, None);
    let params = init_params(&model, 1234).unwrap();

    let mut lines = Vec::new();
    let mut ok = true;
    for ways in [5usize, 20] {
        let report = evaluate(
            &EmbedStrategy::Model {
                params: &params,
                model: &model,
            },
            &ds,
            &split.test,
            &EvalConfig {
                ways,
                shots: 1,
                batch_per_class: 2,
                episodes: 2000,
                seed: 2,
                attention: AttentionMode::SoftmaxCosine,
            },
        )
        .unwrap();
        let chance = 1.0 / ways as Real;
        ok &= (report.accuracy - chance).abs() <= 0.03;
        lines.push(format!(
            "{ways}-way acc={:.4} (chance {chance:.3} ±0.03)",
            report.accuracy
        ));
    }
    verdict("2 chance-calibration", ok, &lines.join(", "));
    assert!(ok, "{}", lines.join(", "));
}

// ---------------------------------------------------------------------------
// 3. Gradient correctness within its time budget
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_gradient_checks_within_budget() {
    let start = Instant::now();
    let mut worst: (String, Real) = (String::new(), 0.0);
    for fce in [None, Some(2)] {
        let model = ModelSpec {
            encoder: EncoderConfig::Mlp(MlpEmbedConfig {
                input_dim: 8,
                hidden_dims: vec![16],
                output_dim: 8,
            }),
            fce: fce.map(|steps| FceConfig { steps }),
        };
        let reports = episode_gradient_check(&model, 3, 2, 2024, false).unwrap();
        for r in reports {
            if r.max_rel_err > worst.1 {
                worst = (r.name.clone(), r.max_rel_err);
            }
            assert!(
                r.max_rel_err <= GRADCHECK_TOL,
                "{} err {} (fce={fce:?})",
                r.name,
                r.max_rel_err
            );
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let ok = elapsed < 30.0;
    verdict(
        "3 gradient-correctness",
        ok,
        &format!(
            "all groups ≤ {GRADCHECK_TOL:.0e} (worst {} at {:.2e}), {elapsed:.1}s",
            worst.0, worst.1
        ),
    );
    assert!(ok, "gradient checks took {elapsed:.1}s, budget 30s");
}

// ---------------------------------------------------------------------------
// 4. Oracle equivalences
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_oracle_equivalences() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);

    // (a) hard attention with one survivor == brute-force nearest neighbor
    for _ in 0..1000 {
        let k = rng.gen_range(2..10usize);
        let ways = rng.gen_range(2..=k.min(5));
        let ids: Vec<usize> = (0..k).map(|i| i % ways).collect();
        let data: Vec<Real> = (0..k * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = SupportSet::new(
            Tensor::from_vec(vec![k, 6], data.clone()).unwrap(),
            ids.clone(),
            ways,
        )
        .unwrap();
        let q: Vec<Real> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = predict(&classify(&attend_knn(&q, &s, k - 1).unwrap(), &s).unwrap());
        let cos = |i: usize| -> Real {
            let e = s.embedding(i);
            let dot: Real = q.iter().zip(e).map(|(a, b)| a * b).sum();
            let nq = q.iter().map(|x| x * x).sum::<Real>().sqrt().max(1e-8);
            let ne = e.iter().map(|x| x * x).sum::<Real>().sqrt().max(1e-8);
            dot / (nq * ne)
        };
        let mut best = 0;
        for i in 1..k {
            if cos(i) > cos(best) {
                best = i;
            }
        }
        assert_eq!(got, ids[best], "1-NN mismatch");
    }

    // (b) label combination equals direct summation
    for _ in 0..500 {
        let k = rng.gen_range(1..10usize);
        let ways = rng.gen_range(1..=k);
        let ids: Vec<usize> = (0..k).map(|i| i % ways).collect();
        let s = SupportSet::new(Tensor::zeros(vec![k, 2]), ids.clone(), ways).unwrap();
        let mut w: Vec<Real> = (0..k).map(|_| rng.gen_range(0.0..1.0)).collect();
        let z: Real = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= z);
        let dist = classify(
            &AttentionWeights {
                values: w.clone(),
                mode: AttentionMode::SoftmaxCosine,
            },
            &s,
        )
        .unwrap();
        let mut direct = vec![0.0; ways];
        for (i, &c) in ids.iter().enumerate() {
            direct[c] += w[i];
        }
        for (a, b) in dist.probs.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    // (c) zeroed context stage reduces to the plain pipeline
    let d = 16;
    let plain = mlp_model(d, None);
    let fce = mlp_model(d, Some(3));
    let mut params = init_params(&fce, 99).unwrap();
    let ctx_names: Vec<String> = params
        .names()
        .filter(|n| n.starts_with("ctx.") || n.starts_with("read."))
        .cloned()
        .collect();
    for n in &ctx_names {
        let shape: Vec<usize> = params.get(n).unwrap().shape().into();
        params.set(n, Tensor::zeros(shape)).unwrap();
    }
    let mut plain_params = params.clone();
    for n in &ctx_names {
        plain_params.remove(n);
    }
    let ds = gen_synthetic(8, d, 0.3, 8).unwrap();
    let ids = ds.class_ids();
    let mut max_diff: Real = 0.0;
    for t in 0..20u64 {
        let ep = sample_episode(&ds, &ids, 4, 1, 2, mix_seed(4000, t)).unwrap();
        let g1 = Graph::new();
        let out1 = episode_nll(
            &g1,
            &BoundParams::bind_frozen(&g1, &params),
            &params,
            &fce,
            &ep,
            Phase::Eval,
        )
        .unwrap();
        let g2 = Graph::new();
        let out2 = episode_nll(
            &g2,
            &BoundParams::bind_frozen(&g2, &plain_params),
            &plain_params,
            &plain,
            &ep,
            Phase::Eval,
        )
        .unwrap();
        for (a, b) in out1.per_query.iter().zip(&out2.per_query) {
            for (x, y) in a.value().data().iter().zip(b.value().data()) {
                max_diff = max_diff.max((x - y).abs());
            }
        }
    }
    assert!(max_diff < 1e-12, "reduction diff {max_diff}");

    // (d) zero read steps return the raw query embedding bit-exactly
    let params_d = init_params(&fce, 123).unwrap();
    let g = Graph::new();
    let bound = BoundParams::bind_frozen(&g, &params_d);
    let raw: Vec<_> = (0..3)
        .map(|i| {
            g.constant(
                &Tensor::from_vec(vec![d], (0..d).map(|j| (i + j) as Real * 0.1).collect())
                    .unwrap(),
            )
        })
        .collect();
    let q = g.constant(&Tensor::from_vec(vec![d], (0..d).map(|j| j as Real * 0.3).collect()).unwrap());
    let enc = matchkit_core::context::embed_support_fce(&g, &bound, &raw).unwrap();
    let out = matchkit_core::context::embed_query_fce(&g, &bound, &q, &enc, 0).unwrap();
    assert_eq!(out.value().data(), q.value().data());

    verdict(
        "4 oracle-equivalences",
        true,
        &format!("1-NN 1000/1000, summation ≤1e-12, reduction diff {max_diff:.1e}, zero-step read exact"),
    );
}

// ---------------------------------------------------------------------------
// 5. Synthetic end-to-end training
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_synthetic_end_to_end() {
    let start = Instant::now();
    let ds = gen_synthetic(40, 16, 0.1, 7).unwrap();
    let split = split_classes(&ds, 30, 1).unwrap();
    let config = TrainConfig {
        ways: 5,
        shots: 1,
        batch_per_class: 2,
        episodes_total: 2000,
        optim: OptimConfig::default(),
        eval_every: 0,
        eval_episodes: 0,
        seed: 42,
        model: mlp_model(16, None),
        eval_ways: None,
        eval_shots: None,
    };
    let (ckpt, _history) =
        train_matching_net(config.clone(), &ds, split.clone(), "acceptance-5".into(), 5).unwrap();

    let eval_cfg = EvalConfig {
        ways: 5,
        shots: 1,
        batch_per_class: 2,
        episodes: 2000,
        seed: 99,
        attention: AttentionMode::SoftmaxCosine,
    };
    let trained = evaluate(
        &EmbedStrategy::Model {
            params: &ckpt.params,
            model: &config.model,
        },
        &ds,
        &split.test,
        &eval_cfg,
    )
    .unwrap();
    let pixel = evaluate(&EmbedStrategy::RawInput, &ds, &split.test, &eval_cfg).unwrap();
    let elapsed = start.elapsed().as_secs_f64();

    let abs_ok = trained.accuracy >= 0.95;
    let margin = trained.accuracy - pixel.accuracy;
    let margin_ok = margin >= 0.10;
    let time_ok = elapsed < 300.0;
    verdict(
        "5 synthetic-end-to-end",
        abs_ok && margin_ok && time_ok,
        &format!(
            "trained acc={:.4} (need ≥0.95), pixel acc={:.4}, margin {:+.4} (need ≥ +0.10), {elapsed:.0}s",
            trained.accuracy, pixel.accuracy, margin
        ),
    );
    assert!(
        abs_ok,
        "trained held-out accuracy {:.4} below 0.95",
        trained.accuracy
    );
    assert!(time_ok, "took {elapsed:.0}s, budget 300s");
    // The margin requirement cannot be met on this generator: isotropic
    // noise around prototypes spread on the unit sphere leaves raw-input
    // cosine matching at ~100% on the held-out classes (measured above),
    // so no model can sit 10 points higher. Asserted as specified.
    assert!(
        margin_ok,
        "trained net exceeds the pixel baseline by {margin:+.4}, requirement is +0.10 \
         (pixel baseline is already at {:.4} on this dataset)",
        pixel.accuracy
    );
}

// ---------------------------------------------------------------------------
// 6. Omniglot orderings at a reduced training budget
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_omniglot_ordering_reduced_scale() {
    let Some(dir) = omniglot_dir() else {
        skip("6 omniglot-ordering", "Omniglot not found");
        return;
    };
    if std::env::var("MATCHKIT_RUN_LONG").as_deref() != Ok("1") {
        skip(
            "6 omniglot-ordering",
            "30k-episode CPU run; set MATCHKIT_RUN_LONG=1 to enable",
        );
        return;
    }
    let (base, _) = matchkit::data::load_image_class_tree(&dir).expect("load omniglot");
    let split = split_classes(&base, 1200, 0).unwrap().expand_rotations();
    let dataset = augment_rotations(&base).unwrap();
    drop(base);

    let conv_model = ModelSpec {
        encoder: EncoderConfig::Conv(Default::default()),
        fce: None,
    };
    let config = TrainConfig {
        ways: 5,
        shots: 1,
        batch_per_class: 2,
        episodes_total: 30_000,
        optim: OptimConfig::default(),
        eval_every: 0,
        eval_episodes: 0,
        seed: 7,
        model: conv_model.clone(),
        eval_ways: None,
        eval_shots: None,
    };
    let (ckpt, _) =
        train_matching_net(config, &dataset, split.clone(), "acceptance-6".into(), 6).unwrap();

    // equal-budget baseline: the same number of gradient steps
    let n_train_examples: usize = split
        .train
        .iter()
        .map(|&c| dataset.examples(c).unwrap().len())
        .sum();
    let steps_per_epoch = n_train_examples.div_ceil(64);
    let epochs = 30_000usize.div_ceil(steps_per_epoch);
    let baseline = train_baseline_classifier(
        &dataset,
        &split,
        &conv_model,
        &matchkit_core::train::BaselineConfig {
            epochs,
            minibatch: 64,
            optim: OptimConfig::default(),
            seed: 7,
        },
    )
    .unwrap();

    let eval = |params, shots| {
        evaluate(
            &EmbedStrategy::Model {
                params,
                model: &conv_model,
            },
            &dataset,
            &split.test,
            &EvalConfig {
                ways: 5,
                shots,
                batch_per_class: 2,
                episodes: 1000,
                seed: 11,
                attention: AttentionMode::SoftmaxCosine,
            },
        )
        .unwrap()
        .accuracy
    };
    let matching_1shot = eval(&ckpt.params, 1);
    let matching_5shot = eval(&ckpt.params, 5);
    let baseline_1shot = eval(&baseline, 1);

    let order_ok = matching_1shot >= baseline_1shot + 0.03;
    let shots_ok = matching_5shot >= matching_1shot - 0.01;
    verdict(
        "6 omniglot-ordering",
        order_ok && shots_ok,
        &format!(
            "matching 1-shot {matching_1shot:.4} vs baseline-cosine {baseline_1shot:.4} (need +0.03); \
             5-shot {matching_5shot:.4} (need ≥ 1-shot − 0.01)"
        ),
    );
    assert!(order_ok && shots_ok);
}

// ---------------------------------------------------------------------------
// 7. Property suites
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_property_suites() {
    let mut rng = ChaCha8Rng::seed_from_u64(70);

    // support/batch disjointness over 10k sampled episodes
    let ds = gen_synthetic(20, 4, 0.5, 19).unwrap();
    let ids = ds.class_ids();
    for i in 0..10_000u64 {
        let ways = rng.gen_range(2..=8usize);
        let shots = rng.gen_range(1..=3usize);
        let ep = sample_episode(&ds, &ids, ways, shots, 2, mix_seed(7000, i)).unwrap();
        for key in &ep.batch_keys {
            assert!(!ep.support_keys.contains(key), "episode {i} overlap");
        }
    }

    // attention normalization across modes
    for _ in 0..500 {
        let k = rng.gen_range(2..9usize);
        let ways = rng.gen_range(2..=k);
        let ids: Vec<usize> = (0..k).map(|i| i % ways).collect();
        let data: Vec<Real> = (0..k * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = SupportSet::new(Tensor::from_vec(vec![k, 5], data).unwrap(), ids, ways).unwrap();
        let q: Vec<Real> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for mode in [
            AttentionMode::SoftmaxCosine,
            AttentionMode::Knn { drop: k - 1 },
            AttentionMode::Kde { bandwidth: 1.3 },
        ] {
            let w = attend(&q, &s, mode).unwrap();
            assert!((w.values.iter().sum::<Real>() - 1.0).abs() < 1e-9);
        }
    }

    // permutation invariance of the plain pipeline
    for _ in 0..200 {
        let k = rng.gen_range(2..8usize);
        let ways = rng.gen_range(2..=k);
        let ids: Vec<usize> = (0..k).map(|i| i % ways).collect();
        let data: Vec<Real> = (0..k * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q: Vec<Real> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut perm: Vec<usize> = (0..k).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let s1 = SupportSet::new(
            Tensor::from_vec(vec![k, 4], data.clone()).unwrap(),
            ids.clone(),
            ways,
        )
        .unwrap();
        let s2 = SupportSet::new(
            Tensor::from_vec(
                vec![k, 4],
                perm.iter().flat_map(|&i| data[i * 4..(i + 1) * 4].to_vec()).collect(),
            )
            .unwrap(),
            perm.iter().map(|&i| ids[i]).collect(),
            ways,
        )
        .unwrap();
        let d1 = classify(&attend_softmax_cosine(&q, &s1).unwrap(), &s1).unwrap();
        let d2 = classify(&attend_softmax_cosine(&q, &s2).unwrap(), &s2).unwrap();
        for (a, b) in d1.probs.iter().zip(&d2.probs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    // determinism: identical seeded runs emit identical metrics logs
    let ds2 = gen_synthetic(12, 8, 0.2, 77).unwrap();
    let split = split_classes(&ds2, 9, 0).unwrap();
    let run = || {
        let config = TrainConfig {
            ways: 3,
            shots: 1,
            batch_per_class: 2,
            episodes_total: 50,
            optim: OptimConfig::default(),
            eval_every: 25,
            eval_episodes: 20,
            seed: 5,
            model: mlp_model(8, None),
            eval_ways: None,
            eval_shots: None,
        };
        let (_, history) =
            train_matching_net(config, &ds2, split.clone(), "acceptance-7".into(), 7).unwrap();
        history
            .iter()
            .map(|r| format_line(r.step, r.loss, r.eval.as_ref().map(|e| e.accuracy)))
            .collect::<String>()
    };
    let log1 = run();
    let log2 = run();
    assert_eq!(log1, log2, "metrics logs differ between identical runs");

    verdict(
        "7 property-suites",
        true,
        "disjointness 10k, normalization ≤1e-9, permutation ≤1e-12, identical logs",
    );
}

// ---------------------------------------------------------------------------
// 8. Fine-tuning overfits the support set
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_fine_tuning_overfits_support() {
    let ds = gen_synthetic(40, 16, 0.1, 7).unwrap();
    let split = split_classes(&ds, 30, 1).unwrap();
    let model = mlp_model(16, None);
    let params = init_params(&model, 55).unwrap();

    let episodes = 40u64;
    let mut perfect = 0usize;
    let mut before_sum = 0.0;
    let mut after_sum = 0.0;
    for i in 0..episodes {
        let ep = sample_episode(&ds, &split.test, 5, 1, 2, mix_seed(8000, i)).unwrap();
        let (tuned, report) = fine_tune(
            &params,
            &model,
            &ep.support,
            ep.ways,
            100,
            1e-2,
            FineTuneMode::SoftmaxHead,
            mix_seed(8800, i),
        )
        .unwrap();
        if report.first_perfect_step.is_some() {
            perfect += 1;
        }
        // held-out change, informational: batch accuracy before vs after
        let acc_of = |p: &matchkit_core::encoder::ModelParams| {
            let strategy = EmbedStrategy::Model { params: p, model: &model };
            let (sup, batch) = matchkit_core::eval::embed_episode(&strategy, &ep).unwrap();
            let dim = sup[0].len();
            let flat: Vec<Real> = sup.iter().flatten().copied().collect();
            let s = SupportSet::new(
                Tensor::from_vec(vec![sup.len(), dim], flat).unwrap(),
                ep.support.iter().map(|(_, l)| *l).collect(),
                ep.ways,
            )
            .unwrap();
            let correct = batch
                .iter()
                .zip(&ep.batch)
                .filter(|(q, (_, label))| {
                    let w = attend_softmax_cosine(q, &s).unwrap();
                    predict(&classify(&w, &s).unwrap()) == **label
                })
                .count();
            correct as Real / ep.batch.len() as Real
        };
        before_sum += acc_of(&params);
        after_sum += acc_of(&tuned);
    }
    let before = before_sum / episodes as Real;
    let after = after_sum / episodes as Real;
    let overfit_ok = perfect == episodes as usize;
    let floor_ok = after >= before - 0.05;
    verdict(
        "8 fine-tuning",
        overfit_ok && floor_ok,
        &format!(
            "support fit to 100% in {perfect}/{episodes} episodes within 100 steps; \
             held-out {before:.4} -> {after:.4} (soft floor −0.05)"
        ),
    );
    assert!(
        overfit_ok,
        "support set not perfectly fit within 100 steps in {}/{episodes} episodes",
        episodes as usize - perfect
    );
    if !floor_ok {
        println!(
            "note: held-out accuracy dropped more than the soft floor ({before:.4} -> {after:.4})"
        );
    }
}

// ---------------------------------------------------------------------------
// CLI-level spot check tying the pieces together
// ---------------------------------------------------------------------------

#[test]
fn eval_command_pipeline_matches_library_results() {
    // pixel mode through the command layer equals the library evaluator
    let dir = tempfile::tempdir().unwrap();
    let ds_path = dir.path().join("d.bin");
    let ds = gen_synthetic(12, 8, 0.4, 3).unwrap();
    matchkit::data::save_synthetic(&ds, &ds_path).unwrap();

    let args = EvalArgs {
        dataset: Some(ds_path),
        checkpoint: None,
        mode: EvalMode::Pixel,
        ways: 4,
        shots: 1,
        batch_per_class: 2,
        episodes: 200,
        seed: 17,
        attention: AttentionMode::SoftmaxCosine,
        split_train: Some(8),
        split_seed: 2,
        augment_rotations: false,
        split_part: SplitPart::Test,
        fine_tune_steps: 0,
        fine_tune_lr: 1e-2,
    };
    let via_cli = run_eval(&args).unwrap();

    let split = split_classes(&ds, 8, 2).unwrap();
    let via_lib = evaluate(
        &EmbedStrategy::RawInput,
        &ds,
        &split.test,
        &EvalConfig {
            ways: 4,
            shots: 1,
            batch_per_class: 2,
            episodes: 200,
            seed: 17,
            attention: AttentionMode::SoftmaxCosine,
        },
    )
    .unwrap();
    assert_eq!(via_cli.accuracy, via_lib.accuracy);
    assert_eq!(via_cli.ci95, via_lib.ci95);
}
