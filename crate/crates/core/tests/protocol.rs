mod common;

use cloodbench::config::{OutlierSource, StreamSource};
use cloodbench::data::Dataset;
use cloodbench::data::{DataRange, OutlierSet};
use cloodbench::detect::DetectorKind;
use cloodbench::nn::{expand_head, ParamSet};
use cloodbench::ood_train::{OodTrainConfig, OodTrainKind};
use cloodbench::rng::{stream_rng, Stream};
use cloodbench::runner::{
    build_stream, emit_results, gen_data, load_results, recompute_from_dir, run_experiment, run_repetition,
    train_task, OodStage, RepetitionRecord,
};
use cloodbench::strategies::{strategy_hooks, StrategyConfig, StrategyKind, TaskContext};

fn cl_view(r: &RepetitionRecord) -> (Vec<Vec<f64>>, Vec<Vec<Option<f64>>>) {
    (
        r.accuracy_matrix.clone(),
        r.ood
            .iter()
            .map(|d| d.per_task.iter().map(|p| p.auroc).collect())
            .collect(),
    )
}

#[test]
fn same_seed_gives_byte_identical_results() {
    let mut cfg = common::quick_config(8, 4);
    cfg.strategy.kind = StrategyKind::Replay;
    cfg.strategy.buffer_capacity = 40;
    cfg.ood_train.kind = OodTrainKind::Oe;
    cfg.detectors = vec![DetectorKind::Msp, DetectorKind::Mahalanobis, DetectorKind::Knn];
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let texts: Vec<String> = dirs
        .iter()
        .map(|d| {
            emit_results(&run_experiment(&cfg).unwrap(), d.path()).unwrap();
            std::fs::read_to_string(d.path().join("results.json")).unwrap()
        })
        .collect();
    assert_eq!(
        common::without_wall_clock(&texts[0]),
        common::without_wall_clock(&texts[1])
    );
    for name in ["acc_matrix.csv", "ood_scores/msp_2.csv", "ood_scores/knn_3.csv"] {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn protocol_shape_for_several_task_counts() {
    for b in [5, 10, 20] {
        let mut cfg = common::quick_config(40, b);
        cfg.strategy.kind = StrategyKind::Cumulative;
        cfg.optimizer.epochs = 1;
        let out = run_experiment(&cfg).unwrap();
        let r = &out.record.repetitions[0];
        assert!(r.error.is_none(), "B = {b}: {:?}", r.error);
        assert_eq!(r.accuracy_matrix.len(), b);
        for (i, row) in r.accuracy_matrix.iter().enumerate() {
            assert_eq!(row.len(), i + 1);
        }
        assert_eq!(r.aca_per_task.len(), b);
        assert_eq!(r.class_order.len(), 40);
        for d in &r.ood {
            let ts: Vec<usize> = d.per_task.iter().map(|p| p.t).collect();
            assert_eq!(ts, (1..b).collect::<Vec<_>>());
        }
        let (stream, _) = build_stream(&cfg, cfg.stream.seed).unwrap();
        for (i, task) in stream.tasks.iter().enumerate() {
            assert_eq!(task.classes, i * 40 / b..(i + 1) * 40 / b);
        }
    }
}

fn trace(ood: Option<&mut OodStage>) -> Vec<Vec<f64>> {
    let cfg = common::quick_config(4, 2);
    let (stream, _) = build_stream(&cfg, 0).unwrap();
    let task = &stream.tasks[0];
    let mut params = ParamSet::init(stream.dim(), &[8], 0, &mut stream_rng(0, Stream::Init));
    expand_head(&mut params, task.classes.len()).unwrap();
    let mut strategy = strategy_hooks(&StrategyConfig::default(), stream.dim(), &[8], 0).unwrap();
    let mut steps = Vec::new();
    train_task(
        &mut params,
        &task.train,
        Some(strategy.as_mut()),
        ood,
        &cfg.optimizer,
        &mut stream_rng(0, Stream::Shuffle),
        &mut |p| steps.push(p.to_flat()),
    )
    .unwrap();
    steps
}

#[test]
fn inactive_ood_stage_leaves_training_unchanged() {
    let mut stage = OodStage {
        cfg: OodTrainConfig::default(),
        outliers: OutlierSet::new(16, Vec::new()),
        range: DataRange::of(&Dataset::from_rows(1, vec![0.0], vec![0]).unwrap()),
        outlier_batch: None,
        rng: stream_rng(0, Stream::Augment),
    };
    assert_eq!(stage.cfg.kind, OodTrainKind::None);
    let plain = trace(None);
    assert!(!plain.is_empty());
    assert_eq!(plain, trace(Some(&mut stage)));
}

#[test]
fn zero_weight_regularizers_reduce_to_naive() {
    let base = common::quick_config(6, 3);
    let naive = run_experiment(&base).unwrap();
    for (kind, tweak) in [
        (
            StrategyKind::Lwf,
            (|c: &mut StrategyConfig| c.kd_weight = 0.0) as fn(&mut StrategyConfig),
        ),
        (StrategyKind::Ewc, |c: &mut StrategyConfig| c.reg_weight = 0.0),
    ] {
        let mut cfg = base.clone();
        cfg.strategy.kind = kind;
        tweak(&mut cfg.strategy);
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(
            cl_view(&out.record.repetitions[0]),
            cl_view(&naive.record.repetitions[0]),
            "{kind}"
        );
    }
}

#[test]
fn gdumb_buffer_ignores_arrival_order() {
    let cfg = common::quick_config(4, 2);
    let (stream, _) = build_stream(&cfg, 0).unwrap();
    let task = &stream.tasks[0];
    let mut reversed_idx: Vec<usize> = (0..task.train.len()).collect();
    reversed_idx.reverse();
    let reversed = task.train.subset(&reversed_idx);
    let sc = StrategyConfig {
        kind: StrategyKind::Gdumb,
        buffer_capacity: 12,
        ..StrategyConfig::default()
    };
    let retrain = |data: &Dataset| {
        let mut s = strategy_hooks(&sc, stream.dim(), &[8], 0).unwrap();
        let mut p = ParamSet::init(stream.dim(), &[8], 0, &mut stream_rng(0, Stream::Init));
        let ctx = TaskContext {
            index: 0,
            train: data,
            classes: task.classes.clone(),
        };
        s.before_task(&mut p, &ctx).unwrap();
        s.after_task(&mut p, &ctx).unwrap();
        s.retrain_set().unwrap()
    };
    let a = retrain(&task.train);
    assert_eq!(a.len(), 12);
    assert_eq!(a, retrain(&reversed));
}

#[test]
fn results_file_round_trips() {
    let mut cfg = common::quick_config(6, 3);
    cfg.detectors = vec![DetectorKind::Energy, DetectorKind::Vim];
    let out = run_experiment(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_results(&out, dir.path()).unwrap();
    let back = load_results(dir.path()).unwrap();
    assert_eq!(back, out.record);
    assert_eq!(back.config_hash, cfg.hash());
}

#[test]
fn repetitions_are_independent() {
    let mut cfg = common::quick_config(6, 3);
    cfg.repetitions = 3;
    cfg.strategy.kind = StrategyKind::Replay;
    cfg.strategy.buffer_capacity = 30;
    let all = run_experiment(&cfg).unwrap();
    let (alone, _) = run_repetition(&cfg, 2);
    assert_eq!(cl_view(&alone), cl_view(&all.record.repetitions[2]));

    let mut shifted = cfg.clone();
    shifted.repetitions = 1;
    shifted.stream.seed += 2;
    let first = &run_experiment(&shifted).unwrap().record.repetitions[0];
    assert_eq!(first.seed, all.record.repetitions[2].seed);
    assert_eq!(cl_view(first), cl_view(&all.record.repetitions[2]));
    assert_ne!(
        all.record.repetitions[0].class_order,
        all.record.repetitions[1].class_order
    );
}

#[test]
fn recomputed_metrics_match_the_record() {
    let mut cfg = common::quick_config(8, 4);
    cfg.repetitions = 2;
    cfg.detectors = vec![DetectorKind::Msp, DetectorKind::Odin];
    let out = run_experiment(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_results(&out, dir.path()).unwrap();
    let re = recompute_from_dir(dir.path()).unwrap();
    for r in &out.record.repetitions {
        let (aca, aia, af) = re.cl[&r.repetition];
        assert_eq!(Some(aca), r.aca);
        assert_eq!(Some(aia), r.aia);
        assert_eq!(af, r.af);
        for d in &r.ood {
            assert_eq!(re.ood[&(d.detector.to_string(), r.repetition)], d.per_task);
        }
    }
}

#[test]
fn generated_csv_reproduces_the_synthetic_stream() {
    let mut cfg = common::quick_config(6, 3);
    cfg.ood_train.kind = OodTrainKind::Oe;
    cfg.outliers.source = OutlierSource::HeldOutClasses;
    let dir = tempfile::tempdir().unwrap();
    gen_data(&cfg, dir.path()).unwrap();
    let synthetic = run_experiment(&cfg).unwrap();

    let mut csv = cfg.clone();
    csv.stream.source = StreamSource::Csv;
    csv.stream.train_path = Some(dir.path().join("train.csv"));
    csv.stream.test_path = Some(dir.path().join("test.csv"));
    csv.outliers.reserved_path = Some(dir.path().join("reserved.csv"));
    let loaded = run_experiment(&csv).unwrap();
    let (a, b) = (&synthetic.record.repetitions[0], &loaded.record.repetitions[0]);
    assert!(b.error.is_none(), "{:?}", b.error);
    assert_eq!(a.class_order, b.class_order);
    assert_eq!(cl_view(a), cl_view(b));
}
