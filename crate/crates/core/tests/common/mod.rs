#![allow(dead_code)]

use cloodbench::config::ExperimentConfig;
use cloodbench::nn::{expand_head, ParamSet};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between `analytic` and central differences of `loss` over every
/// parameter.
pub fn param_fd_error(params: &ParamSet, analytic: &ParamSet, loss: &mut dyn FnMut(&ParamSet) -> f64) -> f64 {
    let flat = params.to_flat();
    let grad = analytic.to_flat();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..flat.len() {
        let mut v = flat.clone();
        v[i] = flat[i] + FD_STEP;
        probe.set_from_flat(&v).unwrap();
        let up = loss(&probe);
        v[i] = flat[i] - FD_STEP;
        probe.set_from_flat(&v).unwrap();
        let down = loss(&probe);
        worst = worst.max(rel_err(grad[i], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

pub fn input_fd_error(x: &[f64], analytic: &DVector<f64>, loss: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut xp = x.to_vec();
        xp[i] += FD_STEP;
        let mut xm = x.to_vec();
        xm[i] -= FD_STEP;
        let fd = (loss(&xp) - loss(&xm)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[i], fd));
    }
    worst
}

/// Small network with a randomized head so that every gradient path is active.
pub fn small_net(input_dim: usize, widths: &[usize], classes: usize, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::init(input_dim, widths, 0, &mut rng);
    expand_head(&mut p, classes).unwrap();
    p.head_weight
        .iter_mut()
        .for_each(|w| *w = rng.random_range(-1.0..1.0));
    p.head_bias
        .iter_mut()
        .for_each(|b| *b = rng.random_range(-0.5..0.5));
    for b in &mut p.branches {
        for l in &mut b.layers {
            l.bias.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
    p
}

pub fn random_inputs(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect()
}

/// Small, fast experiment on the synthetic stream.
pub fn quick_config(num_classes: usize, num_tasks: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.stream.num_classes = num_classes;
    cfg.stream.num_tasks = num_tasks;
    cfg.stream.per_class = 20;
    cfg.optimizer.epochs = 3;
    cfg.hidden = vec![16];
    cfg
}

/// `results.json` text with every wall-clock field removed.
pub fn without_wall_clock(json: &str) -> String {
    let mut v: serde_json::Value = serde_json::from_str(json).unwrap();
    if let Some(reps) = v.get_mut("repetitions").and_then(|r| r.as_array_mut()) {
        for r in reps {
            r.as_object_mut().unwrap().remove("wall_clock_s");
        }
    }
    serde_json::to_string(&v).unwrap()
}

pub mod grad_cases {
    use super::*;
    use cloodbench::data::Dataset;
    use cloodbench::model::{Model, Network};
    use cloodbench::nn::{backward, cross_entropy, cross_entropy_grad, forward, softmax};
    use cloodbench::ood_train::{oe_logit_grad, oe_loss};
    use cloodbench::strategies::{
        distillation_grad, dynamic_expand, ewc_grad_accumulate, ewc_penalty, fisher_update, strategy_hooks,
        BicLayer, BicStage, LossAccumulator, StrategyConfig, StrategyKind, TaskContext,
    };

    fn batch(seed: u64, n: usize, dim: usize, classes: usize) -> Dataset {
        let xs = random_inputs(n, dim, seed);
        let labels = (0..n).map(|i| i % classes).collect();
        Dataset::from_rows(dim, xs.concat(), labels).unwrap()
    }

    fn ce_case(params: &ParamSet, data: &Dataset, tau: Option<f64>) -> f64 {
        let mut acc = LossAccumulator::new(params, tau);
        acc.add_ce(params, data, 1.0).unwrap();
        param_fd_error(params, &acc.grads, &mut |p| {
            let mut a = LossAccumulator::new(p, tau);
            a.add_ce(p, data, 1.0).unwrap();
            a.loss
        })
    }

    /// `(case name, parameter count, worst relative error)` for every loss path.
    pub fn run() -> Vec<(&'static str, usize, f64)> {
        let mut out = Vec::new();
        let data = batch(11, 6, 3, 4);

        let one = small_net(3, &[6], 4, 1);
        out.push((
            "cross-entropy, one hidden layer",
            one.num_params(),
            ce_case(&one, &data, None),
        ));

        let deep = small_net(3, &[5, 4], 4, 2);
        out.push((
            "cross-entropy, two hidden layers",
            deep.num_params(),
            ce_case(&deep, &data, None),
        ));

        let mut wide = small_net(3, &[5], 4, 3);
        dynamic_expand(&mut wide, &[4], &mut ChaCha8Rng::seed_from_u64(9));
        wide.head_weight
            .iter_mut()
            .enumerate()
            .for_each(|(i, w)| *w = ((i * 7) % 11) as f64 / 11.0 - 0.5);
        out.push((
            "cross-entropy, expanded branches",
            wide.num_params(),
            ce_case(&wide, &data, None),
        ));

        out.push((
            "logitnorm cross-entropy",
            one.num_params(),
            ce_case(&one, &data, Some(0.5)),
        ));

        // outlier exposure toward the uniform distribution
        let xs = random_inputs(5, 3, 12);
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let oe = |p: &ParamSet| {
            let mut acc = LossAccumulator::new(p, None);
            acc.add_term(p, &refs, 0.5, |_, rec| {
                Ok((
                    oe_loss(std::slice::from_ref(&rec.probs)),
                    oe_logit_grad(&rec.logits),
                ))
            })
            .unwrap();
            acc
        };
        let err = param_fd_error(&one, &oe(&one).grads, &mut |p| oe(p).loss);
        out.push(("outlier exposure", one.num_params(), err));

        // distillation toward a fixed teacher over the first two classes
        let teacher = small_net(3, &[6], 4, 5);
        let kd = |p: &ParamSet| {
            let mut acc = LossAccumulator::new(p, None);
            acc.add_term(p, &refs, 1.0, |i, rec| {
                let t = forward(&teacher, refs[i])?.logits;
                Ok(distillation_grad(&rec.logits, &t, 2, 2.0))
            })
            .unwrap();
            acc
        };
        let err = param_fd_error(&one, &kd(&one).grads, &mut |p| kd(p).loss);
        out.push(("distillation", one.num_params(), err));

        // quadratic importance penalty
        let mut imp = fisher_update(&teacher, &data, 6).unwrap();
        imp.omega.scale(10.0);
        let mut g = one.zeros_like();
        ewc_grad_accumulate(&one, &imp, 3.0, &mut g);
        let err = param_fd_error(&one, &g, &mut |p| 3.0 * ewc_penalty(p, &imp));
        out.push(("importance penalty", one.num_params(), err));

        // full strategy losses after one task of training state
        for kind in [StrategyKind::Lwf, StrategyKind::Ewc] {
            let cfg = StrategyConfig {
                kind,
                reg_weight: 5.0,
                ..StrategyConfig::default()
            };
            let mut s = strategy_hooks(&cfg, 3, &[6], 0).unwrap();
            let mut p = small_net(3, &[6], 2, 6);
            let first = batch(13, 8, 3, 2);
            let ctx0 = TaskContext {
                index: 0,
                train: &first,
                classes: 0..2,
            };
            s.before_task(&mut p, &ctx0).unwrap();
            s.after_task(&mut p, &ctx0).unwrap();
            let ctx1 = TaskContext {
                index: 1,
                train: &data,
                classes: 2..4,
            };
            s.before_task(&mut p, &ctx1).unwrap();
            cloodbench::nn::expand_head(&mut p, 2).unwrap();
            p.head_weight
                .iter_mut()
                .enumerate()
                .for_each(|(i, w)| *w += 0.05 * (i % 5) as f64);
            let mut acc = LossAccumulator::new(&p, None);
            s.assemble_loss(&p, &data, &mut acc).unwrap();
            let err = param_fd_error(&p, &acc.grads, &mut |q| {
                let mut a = LossAccumulator::new(q, None);
                s.assemble_loss(q, &data, &mut a).unwrap();
                a.loss
            });
            out.push((
                if kind == StrategyKind::Lwf {
                    "lwf strategy loss"
                } else {
                    "ewc strategy loss"
                },
                p.num_params(),
                err,
            ));
        }

        // input gradients, plain and through a bias-correction layer
        let bic = BicLayer {
            stages: vec![
                BicStage::identity(0..2),
                BicStage {
                    classes: 2..4,
                    alpha: 0.7,
                    beta: 0.4,
                },
            ],
        };
        for (name, layer) in [
            ("input gradient", None),
            ("input gradient with bias correction", Some(&bic)),
        ] {
            let net = Network::with_bic(&deep, layer);
            let mut worst: f64 = 0.0;
            for (k, x) in xs.iter().enumerate() {
                let y = k % 4;
                let up = |z: &DVector<f64>| cross_entropy_grad(&softmax(z), y);
                let g = net.input_gradient(x, &up).unwrap().unwrap();
                worst = worst.max(input_fd_error(x, &g, &mut |x| {
                    cross_entropy(&softmax(&net.logits(x).unwrap()), y)
                }));
            }
            out.push((name, deep.num_params(), worst));
        }

        // raw backward on a single sample, parameters and input together
        let x = &xs[0];
        let rec = forward(&wide, x).unwrap();
        let g = backward(&wide, &rec, &cross_entropy_grad(&rec.probs, 1));
        let ce = |p: &ParamSet, x: &[f64]| cross_entropy(&forward(p, x).unwrap().probs, 1);
        let e1 = param_fd_error(&wide, &g.params, &mut |p| ce(p, x));
        let e2 = input_fd_error(x, &g.input, &mut |x| ce(&wide, x));
        out.push(("single-sample backward", wide.num_params(), e1.max(e2)));
        out
    }
}
