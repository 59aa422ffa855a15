use sparse_lab::lab::config::{Experiment, ExperimentConfig};
use sparse_lab::lab::run_experiment;
use sparse_lab::lab::train::run_dst_train;
use sparse_lab::optim::OptimizerKind;

fn quick() -> ExperimentConfig {
    let mut c = ExperimentConfig::for_experiment(Experiment::DstTrain);
    c.epochs = 4;
    c.warmup_epochs = 1.0;
    c.samples = 512;
    c.update_every = 10;
    c
}

#[test]
fn dense_runs_match_across_optimizers() {
    let mut c = quick();
    c.sparsity = 0.0;
    c.optimizer.kind = OptimizerKind::Sgd;
    let a = run_dst_train(&c).unwrap();
    c.optimizer.kind = OptimizerKind::SparseOpt;
    let b = run_dst_train(&c).unwrap();
    let timeless = |r: &sparse_lab::lab::train::TrainRun| {
        r.records.iter().cloned().map(|mut e| {
            e.wall_time = 0.0;
            e
        }).collect::<Vec<_>>()
    };
    assert_eq!(timeless(&a), timeless(&b));
    assert_eq!(a.trace, b.trace);
    assert!(a.events.is_empty());
}

#[test]
fn record_schema_and_invariants() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = quick();
    c.out = dir.path().to_path_buf();
    c.wall_time = true;
    c.svg = true;
    c.optimizer = "sparseopt+ham".parse().unwrap();
    c.renormalize_grads = true;
    let files = run_experiment(&c).unwrap();
    assert!(files.iter().any(|f| f.extension().is_some_and(|e| e == "svg")));
    let mut r = csv::Reader::from_path(dir.path().join("dst_train.csv")).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(&header[..6], ["epoch", "train_loss", "train_acc", "test_acc", "lr", "itop_rate"]);
    assert_eq!(header.last().unwrap(), "wall_time");
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let mut prev_itop = 0.0;
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[0].parse::<usize>().unwrap(), i + 1);
        let itop: f64 = row[col("itop_rate")].parse().unwrap();
        assert!(itop >= prev_itop);
        prev_itop = itop;
        for l in 0..3 {
            for f in ["s_mean", "s_min", "s_max"] {
                let s: f64 = row[col(&format!("layer{l}_{f}"))].parse().unwrap();
                assert!((0.0..1.0).contains(&s));
            }
            assert_eq!(row[col(&format!("layer{l}_active"))], rows[0][col(&format!("layer{l}_active"))]);
        }
    }
}

#[test]
fn well_separated_clusters_are_learned() {
    let mut c = quick();
    c.sparsity = 0.0;
    c.class_std = 0.1;
    c.epochs = 10;
    let r = run_dst_train(&c).unwrap();
    assert!(r.records.last().unwrap().train_acc > 0.99, "{:?}", r.records.last());
}

#[test]
fn itop_report_divergence_column() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = ExperimentConfig::for_experiment(Experiment::ItopReport);
    c.epochs = 4;
    c.warmup_epochs = 1.0;
    c.samples = 512;
    c.update_every = 10;
    c.out = dir.path().to_path_buf();
    run_experiment(&c).unwrap();
    let text = std::fs::read_to_string(dir.path().join("itop_summary.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("rigl_corrected,"));
    assert!(!lines[3].ends_with(','), "{}", lines[3]);
}
