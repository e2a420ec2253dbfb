use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::testutil::{fd_error, random, tiny_config};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Every term of the moment distance written out explicitly.
fn md_brute_force(sources: &[Tensor], target: &Tensor, order: usize) -> f64 {
    let k = sources.len();
    let (n_t, d) = (target.shape()[0], target.shape()[1]);
    let mean_pow = |x: &Tensor, p: usize, c: usize| -> f64 {
        let n = x.shape()[0];
        let mut s = 0.0;
        for r in 0..n {
            let mut v = 1.0;
            for _ in 0..p {
                v *= x.get(&[r, c]);
            }
            s += v;
        }
        s / n as f64
    };
    let _ = n_t;
    let dist = |a: &Tensor, b: &Tensor, p: usize| -> f64 { (0..d).map(|c| (mean_pow(a, p, c) - mean_pow(b, p, c)).powi(2)).sum::<f64>().sqrt() };
    let coef = factorial(2) * factorial(k - 2) / factorial(k);
    let mut total = 0.0;
    for p in 1..=order {
        for s in sources {
            total += dist(s, target, p) / k as f64;
        }
        for i in 0..k {
            for j in i + 1..k {
                total += coef * dist(&sources[i], &sources[j], p);
            }
        }
    }
    total
}

fn batch(rng: &mut ChaCha8Rng, n: usize, labeled: bool) -> DomainData {
    let labels = labeled.then(|| (0..n).map(|i| i % 3).collect());
    DomainData::new(random(&[n, 2, 20, 8], rng), labels).unwrap()
}

fn toy_trainer(n_domains: usize, seed: u64, lr: f64) -> Trainer {
    let model = MsdaModel::new(tiny_config(), n_domains).unwrap();
    Trainer::new(model, &TrainConfig { seed, learning_rate: lr, ..TrainConfig::default() })
}

#[test]
fn moment_examples() {
    let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(moment(&x, 1).unwrap(), [2.0, 3.0]);
    assert_eq!(moment(&x, 2).unwrap(), [5.0, 10.0]);
    let centred = t(&[3, 2], &[-1.5, 2.0, 0.5, -4.0, 1.0, 2.0]);
    assert!(moment(&centred, 1).unwrap().iter().all(|m| m.abs() < 1e-12));
}

#[test]
fn moment_distance_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&[5, 3], &mut rng);
    assert_eq!(moment_distance(&[x.clone(), x.clone(), x.clone()], &x, 3).unwrap(), 0.0);

    let s0 = t(&[2, 1], &[-1.0, 1.0]);
    let s1 = t(&[2, 1], &[2.0, 2.0]);
    let tg = t(&[1, 1], &[1.0]);
    assert!((moment_distance(&[s0, s1], &tg, 1).unwrap() - 3.0).abs() < 1e-15);

    assert_eq!(pair_coefficient(4), 1.0 / 6.0);
    assert_eq!(pair_coefficient(4), factorial(2) * factorial(2) / factorial(4));
    assert!(matches!(moment_distance(std::slice::from_ref(&x), &x, 1), Err(Error::Argument(_))));
}

#[test]
fn moment_distance_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in 2..=5 {
        for order in 1..=3 {
            for _ in 0..3 {
                let d = rng.random_range(1..6);
                let sources: Vec<Tensor> = (0..k).map(|_| random(&[rng.random_range(1..7), d], &mut rng)).collect();
                let target = random(&[rng.random_range(1..7), d], &mut rng);
                let got = moment_distance(&sources, &target, order).unwrap();
                let want = md_brute_force(&sources, &target, order);
                assert!((got - want).abs() < 1e-12, "K={k} P={order}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn moment_distance_symmetric_in_sources() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sources: Vec<Tensor> = (0..4).map(|_| random(&[6, 3], &mut rng)).collect();
    let target = random(&[5, 3], &mut rng);
    let base = moment_distance(&sources, &target, 2).unwrap();
    assert!(base > 0.0);
    let perm = [sources[2].clone(), sources[0].clone(), sources[3].clone(), sources[1].clone()];
    assert!((moment_distance(&perm, &target, 2).unwrap() - base).abs() < 1e-12);
}

#[test]
fn md_single_source_keeps_only_target_term() {
    let mut tape = Tape::new();
    let s = tape.constant(t(&[2, 1], &[0.0, 2.0]));
    let tg = tape.constant(t(&[1, 1], &[4.0]));
    let md = md_loss(&mut tape, &[s], tg, 1).unwrap();
    assert_eq!(tape.value(md).item().unwrap(), 3.0);
}

#[test]
fn md_same_distribution_is_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[20000, 4], &mut rng);
    let b = random(&[20000, 4], &mut rng);
    let c = random(&[20000, 4], &mut rng);
    assert!(moment_distance(&[a, b], &c, 2).unwrap() < 0.05);
}

#[test]
fn discrepancy_examples() {
    let a = t(&[1, 3], &[1.0, 0.0, 0.0]);
    let b = t(&[1, 3], &[0.0, 1.0, 0.0]);
    assert_eq!(discrepancy_value(&a, &a).unwrap(), 0.0);
    assert!((discrepancy_value(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(discrepancy_value(&a, &b).unwrap(), discrepancy_value(&b, &a).unwrap());
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b));
    let d = discrepancy(&mut tape, va, vb).unwrap();
    assert!((tape.value(d).item().unwrap() - 2.0 / 3.0).abs() < 1e-15);
    let c = tape.constant(t(&[1, 2], &[0.5, 0.5]));
    assert!(matches!(discrepancy(&mut tape, va, c), Err(Error::Dimension(_))));
}

#[test]
fn head_averaging_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let raw = random(&[4, 3], &mut rng);
    let probs = Tensor::from_fn(&[4, 3], |i| (raw.data()[i]).exp());
    let probs = Tensor::from_fn(&[4, 3], |i| probs.data()[i] / probs.data()[i / 3 * 3..i / 3 * 3 + 3].iter().sum::<f64>());
    let (avg, _) = average_heads(&[probs.clone(), probs.clone(), probs.clone()]).unwrap();
    assert!(avg.data().iter().zip(probs.data()).all(|(a, b)| (a - b).abs() < 1e-15));

    let heads = [t(&[1, 3], &[1.0, 0.0, 0.0]), t(&[1, 3], &[1.0, 0.0, 0.0]), t(&[1, 3], &[0.0, 1.0, 0.0]), t(&[1, 3], &[0.0, 1.0, 0.0])];
    let (avg, labels) = average_heads(&heads).unwrap();
    assert_eq!(avg.data(), [0.5, 0.5, 0.0]);
    assert_eq!(labels, [0]);
}

#[test]
fn predictions_sum_to_one_and_ignore_head_order() {
    let model = MsdaModel::new(tiny_config(), 3).unwrap();
    let (params, mut state) = model.init(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[5, 2, 20, 8], &mut rng);
    // Initialize running statistics with one training pass.
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let xv = tape.constant(x.clone());
    model.generator().generate(&mut tape, &bound, &mut state, xv, Pass::Train).unwrap();

    let mut outs = model.head_outputs(&params, &mut state, &x).unwrap();
    let (avg, labels) = average_heads(&outs).unwrap();
    for row in avg.data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    outs.reverse();
    outs.swap(0, 3);
    let (avg2, labels2) = average_heads(&outs).unwrap();
    assert_eq!(labels, labels2);
    assert!(avg.data().iter().zip(avg2.data()).all(|(a, b)| (a - b).abs() < 1e-15));
    assert_eq!(model.predict(&params, &mut state, &x).unwrap().1, labels);
}

#[test]
fn heads_are_named_per_domain() {
    let m = MsdaModel::new(tiny_config(), 2).unwrap();
    assert_eq!(m.heads(), ["head.0.a", "head.0.b", "head.1.a", "head.1.b"]);
    let (p, _) = m.init(0);
    assert_eq!(p.get("head.1.b.weight").unwrap().shape(), &[8, 3]);
    assert_ne!(p.get("head.0.a.weight"), p.get("head.0.b.weight"));
    let single = MsdaModel::single_head(tiny_config()).unwrap();
    assert_eq!(single.heads(), ["head.0.a"]);
    // Same seed, same generator regardless of heads.
    let (ps, _) = single.init(0);
    for (name, v) in p.iter().filter(|(n, _)| !is_head_param(n)) {
        assert_eq!(ps.get(name), Some(v));
    }
}

#[test]
fn step1_without_moment_term_is_plain_supervised_training() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sources = [batch(&mut rng, 4, true), batch(&mut rng, 3, true)];
    let target = batch(&mut rng, 4, false);
    let mut trainer = toy_trainer(2, 8, 1e-3);
    trainer.lambda = 0.0;
    let state0 = trainer.state.clone();
    let (total, _, md, grads) = trainer.step1_gradients(&sources, &target).unwrap();
    assert!(md.is_none());
    assert!(total > 0.0);

    // Reference: multi-head cross-entropy on the sources alone.
    let model = trainer.model.clone();
    let mut state = state0;
    let mut tape = Tape::new();
    let bound = trainer.params.bind(&mut tape, |_| true);
    let all = DomainData::concat(&[&sources[0], &sources[1]]).unwrap();
    let x = tape.constant(all.inputs);
    let emb = model.generator().generate(&mut tape, &bound, &mut state, x, Pass::Train).unwrap();
    let mut loss = None;
    for (i, (start, len)) in [(0, 4), (4, 3)].into_iter().enumerate() {
        let e = tape.narrow(emb, 0, start, len).unwrap();
        for side in ["a", "b"] {
            let p = model.head_probs(&mut tape, &bound, e, &format!("head.{i}.{side}")).unwrap();
            let ce = tape.cross_entropy(p, sources[i].labels.as_ref().unwrap()).unwrap();
            loss = Some(match loss {
                None => ce,
                Some(l) => tape.add(l, ce).unwrap(),
            });
        }
    }
    let loss = loss.unwrap();
    assert_eq!(tape.value(loss).item().unwrap(), total);
    let reference = bound.collect_grads(&tape, &tape.backward(loss).unwrap());
    assert_eq!(grads, reference);
}

#[test]
fn step1_loss_positive_and_gradient_checked() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let sources = [batch(&mut rng, 2, true), batch(&mut rng, 2, true)];
    let target = batch(&mut rng, 2, false);
    let model = MsdaModel::new(tiny_config(), 2).unwrap();
    let (params, state) = model.init(10);
    let names: Vec<String> = params.names().cloned().collect();
    let inputs: Vec<Tensor> = names
        .iter()
        .map(|n| if n.ends_with("bias") || n.ends_with("beta") { random(params.get(n).unwrap().shape(), &mut rng) } else { params.get(n).unwrap().clone() })
        .collect();
    let mut value = 0.0;
    let err = fd_error(&inputs, |tape, vars| {
        let bound = Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()));
        let mut st = state.clone();
        let l = model.step1_loss(tape, &bound, &mut st, &sources, &target, 0.5, 2).unwrap();
        l.total
    });
    {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, |_| false);
        let l = model.step1_loss(&mut tape, &bound, &mut state.clone(), &sources, &target, 0.5, 2).unwrap();
        value += tape.value(l.total).item().unwrap();
    }
    assert!(value > 0.0);
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn steps_reject_bad_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let sources = [batch(&mut rng, 3, true), batch(&mut rng, 3, false)];
    let target = batch(&mut rng, 3, false);
    let mut trainer = toy_trainer(2, 0, 1e-3);
    assert!(matches!(trainer.step1(&sources, &target), Err(Error::Argument(_))));
    let sources = [batch(&mut rng, 3, true), batch(&mut rng, 3, true)];
    let empty = target.select(&[]);
    assert!(empty.is_err() || matches!(trainer.step2(&sources, &empty.unwrap()), Err(Error::Argument(_))));
    let empty = DomainData { inputs: target.inputs.clone(), labels: None }.select(&[]);
    assert!(empty.is_err());
    assert!(matches!(trainer.step3(&target, 0), Err(Error::Argument(_))));
    assert!(matches!(trainer.step1(&sources[..1], &target), Err(Error::Argument(_))));
}

fn split_params(p: &ParamStore) -> (Vec<(String, Tensor)>, Vec<(String, Tensor)>) {
    p.iter().map(|(n, t)| (n.clone(), t.clone())).partition(|(n, _)| !is_head_param(n))
}

/// Toy trainer whose heads have been fit to the sources by step-1 updates,
/// restarted with fresh small-learning-rate optimizer state so the checked
/// step follows its own objective rather than warm-up momentum.
fn warmed(seed: u64) -> (Trainer, [DomainData; 2], DomainData) {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let sources = [batch(&mut rng, 6, true), batch(&mut rng, 6, true)];
    let target = batch(&mut rng, 6, false);
    let mut trainer = toy_trainer(2, seed, 1e-2);
    for _ in 0..WARMUP {
        trainer.step1(&sources, &target).unwrap();
    }
    let config = TrainConfig { seed, learning_rate: 1e-4, ..TrainConfig::default() };
    let trainer = Trainer::from_parts(trainer.model, trainer.params, trainer.state, &config);
    (trainer, sources, target)
}

const WARMUP: usize = 20;

#[test]
fn step2_updates_heads_only_and_raises_discrepancy() {
    let mut raised = 0;
    for seed in 0..10 {
        let (mut tr, sources, target) = warmed(seed);
        let (gen_before, heads_before) = split_params(&tr.params);
        let before = tr.model.clone().target_discrepancy(&tr.params, &mut tr.state, &target.inputs).unwrap();
        tr.step2(&sources, &target).unwrap();
        let after = tr.model.clone().target_discrepancy(&tr.params, &mut tr.state, &target.inputs).unwrap();
        let (gen_after, heads_after) = split_params(&tr.params);
        assert_eq!(gen_before, gen_after, "seed {seed}: generator changed");
        assert_ne!(heads_before, heads_after);
        raised += usize::from(after >= before);
    }
    assert!(raised >= 9, "discrepancy rose in only {raised}/10 seeds");
}

#[test]
fn step3_updates_generator_only_and_lowers_discrepancy() {
    let mut lowered = 0;
    for seed in 0..10 {
        let (mut tr, _, target) = warmed(seed);
        let (gen_before, heads_before) = split_params(&tr.params);
        let before = tr.model.clone().target_discrepancy(&tr.params, &mut tr.state, &target.inputs).unwrap();
        tr.step3(&target, 1).unwrap();
        let after = tr.model.clone().target_discrepancy(&tr.params, &mut tr.state, &target.inputs).unwrap();
        let (gen_after, heads_after) = split_params(&tr.params);
        assert_eq!(heads_before, heads_after, "seed {seed}: heads changed");
        assert_ne!(gen_before, gen_after);
        lowered += usize::from(after <= before);
    }
    assert!(lowered >= 9, "discrepancy fell in only {lowered}/10 seeds");
}

#[test]
fn training_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let sources = [batch(&mut rng, 5, true), batch(&mut rng, 3, true)];
    let target = batch(&mut rng, 4, false);
    let labels = [0, 1, 2, 0];
    let config = TrainConfig { epochs: 2, batch_size: 2, step3_repeats: 2, learning_rate: 1e-3, seed: 3, ..TrainConfig::default() };
    let run = || train_msda(MsdaModel::new(tiny_config(), 2).unwrap(), &sources, &target, &config, Some(&labels)).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.trainer.params, b.trainer.params);
    assert_eq!(a.trainer.state, b.trainer.state);
    assert_eq!(a.history, b.history);
    assert_eq!(a.history.len(), 2);
    assert!(a.history.iter().all(|h| h.md.is_finite() && h.target_accuracy.is_some()));
    assert_eq!(a.history[0].csv_row().split(',').count(), EpochRecord::CSV_HEADER.split(',').count());
}

#[test]
fn supervised_training_runs_single_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let data = batch(&mut rng, 6, true);
    let config = TrainConfig { epochs: 2, batch_size: 4, learning_rate: 1e-3, ..TrainConfig::default() };
    let out = train_supervised(MsdaModel::single_head(tiny_config()).unwrap(), &data, &config, None).unwrap();
    assert_eq!(out.history.len(), 2);
    assert!(train_supervised(MsdaModel::new(tiny_config(), 1).unwrap(), &data, &config, None).is_err());
}

#[test]
fn train_config_validation() {
    TrainConfig::default().validate().unwrap();
    assert!(TrainConfig { k: 1, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { lambda: -0.1, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { moment_order: 0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { step3_repeats: 0, ..Default::default() }.validate().is_err());
    let d = TrainConfig::default();
    assert_eq!((d.lambda, d.moment_order, d.k, d.learning_rate, d.epochs, d.step3_repeats), (0.5, 2, 4, 1e-4, 350, 4));
}
