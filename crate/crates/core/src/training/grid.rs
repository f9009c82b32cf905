use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::{train_run, RunRecord, SplitFeatures, TrainConfig};
use crate::error::{Error, Result};
use crate::evaluation::{aggregate_runs, MetricsReport};
use crate::model::{build_model, Arch, BranchKind, ModelConfig, DROPOUT_GRID, FC_GRID};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridSpec {
    pub archs: Vec<Arch>,
    pub fc: Vec<usize>,
    pub dropout: Vec<f32>,
    pub runs_per_config: usize,
    pub branch: BranchKind,
    /// Seeds the branches of every model and, via the run index, each run.
    pub base_seed: u64,
    pub train: TrainConfig,
}

impl GridSpec {
    /// Five FC widths × three dropout rates per architecture, three runs each.
    pub fn full(branch: BranchKind, base_seed: u64, train: TrainConfig) -> Self {
        GridSpec {
            archs: Arch::ALL.to_vec(),
            fc: FC_GRID.to_vec(),
            dropout: DROPOUT_GRID.to_vec(),
            runs_per_config: 3,
            branch,
            base_seed,
            train,
        }
    }

    /// Every configuration, architecture-major, then FC width, then dropout.
    pub fn configs(&self) -> Result<Vec<ModelConfig>> {
        if self.runs_per_config == 0 {
            return Err(Error::usage(
                "runs",
                "at least one run per configuration is required",
            ));
        }
        self.train.validate()?;
        let mut out = Vec::new();
        for &arch in &self.archs {
            for &fc in &self.fc {
                for &dropout in &self.dropout {
                    out.push(ModelConfig::new(
                        arch,
                        fc,
                        dropout,
                        self.branch,
                        self.base_seed,
                    )?);
                }
            }
        }
        Ok(out)
    }

    pub fn run_seed(&self, run_index: usize) -> u64 {
        seed::derive(self.base_seed, &[run_index as u64])
    }
}

/// Executes every `(config, run)` pair through `runner`, in enumeration order.
pub fn run_grid_with<F>(spec: &GridSpec, mut runner: F) -> Result<(Vec<RunRecord>, GridSummary)>
where
    F: FnMut(&ModelConfig, usize, u64) -> Result<RunRecord>,
{
    let mut records = Vec::new();
    for config in spec.configs()? {
        for run in 0..spec.runs_per_config {
            records.push(runner(&config, run, spec.run_seed(run))?);
        }
    }
    let summary = summarize(&records)?;
    Ok((records, summary))
}

/// Trains the grid on per-architecture features computed with branches built
/// from `spec.base_seed`.
pub fn run_grid(
    spec: &GridSpec,
    features: &BTreeMap<Arch, SplitFeatures>,
) -> Result<(Vec<RunRecord>, GridSummary)> {
    run_grid_with(spec, |config, run, run_seed| {
        let data = features
            .get(&config.arch)
            .ok_or_else(|| Error::Input(format!("no features for {}", config.arch)))?;
        let mut model = build_model(config)?;
        train_run(&mut model, data, spec.train, run, run_seed)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConfigSummary {
    pub config: ModelConfig,
    pub runs: usize,
    pub val_macro_f1: f64,
    pub test: MetricsReport,
    /// Mean of per-run test macro F1 (equals `test.macro_f1_mean`).
    pub test_run_macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridSummary {
    pub configs: Vec<ConfigSummary>,
    /// Index into `configs` of the selected configuration per architecture.
    pub best: BTreeMap<Arch, usize>,
}

fn group_key(c: &ModelConfig) -> (Arch, usize, u32) {
    (c.arch, c.fc_neurons, (c.dropout * 1000.0).round() as u32)
}

fn sorted_mean(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Groups records by configuration (sorted by key, so the result is
/// independent of record order) and selects the best configuration per
/// architecture from validation scores.
pub fn summarize(records: &[RunRecord]) -> Result<GridSummary> {
    let mut groups: BTreeMap<(Arch, usize, u32), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(group_key(&r.config)).or_default().push(r);
    }
    let mut configs = Vec::new();
    for runs in groups.into_values() {
        let test_runs: Vec<_> = runs.iter().map(|r| r.test_metrics.clone()).collect();
        configs.push(ConfigSummary {
            config: runs[0].config,
            runs: runs.len(),
            val_macro_f1: sorted_mean(runs.iter().map(|r| r.val_metrics.macro_f1).collect()),
            test: aggregate_runs(&test_runs)?,
            test_run_macro_f1: sorted_mean(test_runs.iter().map(|m| m.macro_f1).collect()),
        });
    }
    let best = select_best(&configs);
    Ok(GridSummary { configs, best })
}

/// Highest mean validation macro F1 per architecture; ties keep the earlier
/// configuration. Test scores are never consulted.
pub fn select_best(configs: &[ConfigSummary]) -> BTreeMap<Arch, usize> {
    let mut best: BTreeMap<Arch, usize> = BTreeMap::new();
    for (i, c) in configs.iter().enumerate() {
        let slot = best.entry(c.config.arch).or_insert(i);
        if c.val_macro_f1 > configs[*slot].val_macro_f1 {
            *slot = i;
        }
    }
    best
}

impl GridSummary {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("arch,fc,dropout,runs,val_macro_f1,test_macro_f1,test_f1_std,test_run_macro_std,selected\n");
        for (i, c) in self.configs.iter().enumerate() {
            let selected = self.best.get(&c.config.arch) == Some(&i);
            writeln!(
                out,
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
                c.config.arch,
                c.config.fc_neurons,
                c.config.dropout,
                c.runs,
                c.val_macro_f1,
                c.test.macro_f1_mean,
                c.test.f1_std,
                c.test.run_macro_std,
                selected as u8
            )
            .unwrap();
        }
        out
    }

    pub fn selected(&self, arch: Arch) -> Option<&ConfigSummary> {
        self.best.get(&arch).map(|&i| &self.configs[i])
    }
}
