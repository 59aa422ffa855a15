use std::path::Path;
use std::process::{Command, Output};

fn lab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparse-lab"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn sparse-lab")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_config_exits_one_and_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(&["dst-train", "--config", "missing.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.cfg"), "{}", stderr(&o));
}

#[test]
fn bad_values_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["ham-sim", "--steps", "many"][..],
        &["ham-sim", "--no-such-key", "1"],
        &["grad-skew", "--sparsity-grid", "0.5,1.5"],
        &["frobnicate"],
    ] {
        let o = lab(args, dir.path());
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn runtime_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("blocker"), "a file, not a directory").unwrap();
    let o = lab(&["ham-sim", "--steps", "3", "--out", "blocker/sub"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn grad_skew_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let small = ["--batches", "4", "--input-dim", "64", "--sparsity-grid", "0,0.5,0.9"];
    for out in ["d1", "d2"] {
        let mut args = vec!["grad-skew", "--seed", "7", "--out", out];
        args.extend(small);
        let o = lab(&args, dir.path());
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for f in ["grad_skew.csv", "grad_skew_neurons.csv", "grad_skew_mixed.csv"] {
        let a = std::fs::read(dir.path().join("d1").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("d2").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn prints_resolved_config_that_parses_back() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), "# flows\nsteps = 20\nmulti_neuron = true\n").unwrap();
    let o = lab(&["ham-sim", "--config", "run.cfg", "--eta", "0.05", "--seed", "2"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let echo: String = stdout.lines().take_while(|l| !l.starts_with("wrote ")).map(|l| format!("{l}\n")).collect();
    let cfg = sparse_lab::lab::config::ExperimentConfig::parse(&echo, sparse_lab::lab::config::Experiment::GradSkew).unwrap();
    assert_eq!(cfg.steps, 20);
    assert!(cfg.multi_neuron);
    assert_eq!(cfg.eta, vec![0.05]);
    assert_eq!(cfg.seed, 2);
}

#[test]
fn ham_sim_files_match_schema() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(&["ham-sim", "--alpha", "4", "--eta", "0.01", "--steps", "50", "--out", "h"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let traj_dir = dir.path().join("h").join("ham_sim");
    let mut names: Vec<String> = std::fs::read_dir(&traj_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["gf_eta0.01_alpha4_plain.csv", "gf_eta0.01_alpha4_scaled.csv", "ham_eta0.01_alpha4_plain.csv", "ham_eta0.01_alpha4_scaled.csv"]
    );
    for n in &names {
        let mut r = csv::Reader::from_path(traj_dir.join(n)).unwrap();
        let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
        assert_eq!(header, ["step", "neuron", "loss", "a", "gamma", "beta", "gf_invariant", "ham_invariant"]);
        let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
        assert_eq!(rows.len(), 51);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row[0].parse::<usize>().unwrap(), i);
            for v in row.iter().skip(2) {
                assert!(v.parse::<f64>().unwrap().is_finite());
            }
        }
    }
    let mut r = csv::Reader::from_path(dir.path().join("h").join("ham_sim_summary.csv")).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, sparse_lab::lab::ham::SUMMARY_COLUMNS);
    assert_eq!(r.records().count(), 4);
}
