//! One-neuron student–teacher flows over an η × α × method × scaling grid.

use std::path::PathBuf;

use crate::error::Result;
use crate::flows::{run_flow_experiment, sign_flip_feasible, FlowConfig, FlowMethod, FlowTrajectory};
use crate::lab::config::ExperimentConfig;
use crate::lab::exec_of;
use crate::lab::output::{cell, line_chart, write_text, Series, Table};

pub const TRAJECTORY_COLUMNS: [&str; 8] = ["step", "neuron", "loss", "a", "gamma", "beta", "gf_invariant", "ham_invariant"];

pub const SUMMARY_COLUMNS: [&str; 14] = [
    "run",
    "method",
    "eta",
    "alpha",
    "scaling",
    "multi_neuron",
    "neuron",
    "final_loss",
    "initial_a",
    "final_a",
    "sign_changed",
    "flip_feasible",
    "max_gf_drift",
    "max_ham_drift",
];

#[derive(Clone, Debug, PartialEq)]
pub struct HamRun {
    pub name: String,
    pub config: FlowConfig,
    pub trajectory: FlowTrajectory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HamSimReport {
    pub runs: Vec<HamRun>,
    pub trace_every: usize,
    pub svg: bool,
}

fn method_name(m: FlowMethod) -> &'static str {
    match m {
        FlowMethod::Gf => "gf",
        FlowMethod::Ham { .. } => "ham",
    }
}

/// The flow configurations of the grid, in output order.
pub fn flow_grid(cfg: &ExperimentConfig) -> Vec<(String, FlowConfig)> {
    let mut out = Vec::new();
    for &eta in &cfg.eta {
        for &alpha in &cfg.alpha {
            for method in [FlowMethod::Gf, FlowMethod::Ham { alpha }] {
                for scaling in [false, true] {
                    let name = format!(
                        "{}_eta{eta}_alpha{alpha}_{}",
                        method_name(method),
                        if scaling { "scaled" } else { "plain" }
                    );
                    out.push((
                        name,
                        FlowConfig {
                            dim: cfg.flow_dim,
                            samples: cfg.flow_samples,
                            redundant: cfg.flow_redundant,
                            method,
                            alpha,
                            eta,
                            steps: cfg.steps,
                            scaling,
                            multi_neuron: cfg.multi_neuron,
                            opposite_sign: true,
                            eps: cfg.flow_eps,
                            seed: cfg.seed,
                        },
                    ));
                }
            }
        }
    }
    out
}

pub fn run_ham_sim(cfg: &ExperimentConfig) -> Result<HamSimReport> {
    let runs = exec_of(cfg).map(flow_grid(cfg), |(name, config)| -> Result<HamRun> {
        let trajectory = run_flow_experiment(&config)?;
        Ok(HamRun { name, config, trajectory })
    });
    Ok(HamSimReport {
        runs: runs.into_iter().collect::<Result<_>>()?,
        trace_every: cfg.trace_every,
        svg: cfg.svg,
    })
}

impl HamRun {
    /// Every `every`-th step plus the final one.
    pub fn trajectory_table(&self, every: usize) -> Table {
        let mut t = Table::new(&TRAJECTORY_COLUMNS);
        let last = self.config.steps;
        for r in &self.trajectory.records {
            if r.step % every.max(1) != 0 && r.step != last {
                continue;
            }
            t.push(vec![
                cell(r.step),
                cell(r.neuron),
                cell(r.loss),
                cell(r.a),
                cell(r.gamma),
                cell(r.beta),
                cell(r.gf_invariant),
                cell(r.ham_invariant),
            ]);
        }
        t
    }
}

impl HamSimReport {
    pub fn summary_table(&self) -> Table {
        let mut t = Table::new(&SUMMARY_COLUMNS);
        for run in &self.runs {
            let c = &run.config;
            let tr = &run.trajectory;
            for (k, (init, last)) in tr.initial.iter().zip(&tr.last).enumerate() {
                let (gf, ham) = tr.max_drift_of(k);
                t.push(vec![
                    cell(&run.name),
                    cell(method_name(c.method)),
                    cell(c.eta),
                    cell(c.alpha),
                    cell(c.scaling),
                    cell(c.multi_neuron),
                    cell(k),
                    cell(tr.final_loss),
                    cell(init.a),
                    cell(last.a),
                    cell(tr.sign_changed[k]),
                    cell(c.alpha > 0.0 && sign_flip_feasible(init.a, init.gamma, init.beta, c.alpha)),
                    cell(gf),
                    cell(ham),
                ]);
            }
        }
        t
    }

    pub fn write(&self, cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
        let dir = cfg.out.join("ham_sim");
        let mut files = Vec::new();
        for run in &self.runs {
            let p = dir.join(format!("{}.csv", run.name));
            run.trajectory_table(self.trace_every).write(&p)?;
            files.push(p);
        }
        let p = cfg.out.join("ham_sim_summary.csv");
        self.summary_table().write(&p)?;
        files.push(p);
        if self.svg {
            let series: Vec<Series<'_>> = self
                .runs
                .iter()
                .map(|r| Series {
                    name: &r.name,
                    points: r
                        .trajectory
                        .records
                        .iter()
                        .filter(|x| x.neuron + 1 == r.trajectory.last.len())
                        .map(|x| (x.step as f64, x.a))
                        .collect(),
                })
                .collect();
            let p = cfg.out.join("ham_sim_a.svg");
            write_text(&p, &line_chart("student output weight a", "step", "a", &series))?;
            files.push(p);
        }
        Ok(files)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lab::config::Experiment;

    #[test]
    fn grid_and_thinning() {
        let mut c = ExperimentConfig::for_experiment(Experiment::HamSim);
        c.eta = vec![0.01, 0.02];
        c.steps = 10;
        c.trace_every = 4;
        let r = run_ham_sim(&c).unwrap();
        assert_eq!(r.runs.len(), 8);
        let t = r.runs[0].trajectory_table(4);
        assert_eq!(t.column("step").unwrap(), vec![0.0, 4.0, 8.0, 10.0]);
        assert_eq!(r.summary_table().rows.len(), 8);
        assert!(r.runs.iter().all(|x| x.trajectory.sign_changed.len() == 1));
    }
}
