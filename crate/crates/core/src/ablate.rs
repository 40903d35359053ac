//! Ablation grids: component accumulation, prompt templates and prototype
//! subset sizes. Every cell is a full train + test evaluation.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::TrainConfig;
use crate::data::{Dataset, Split};
use crate::eval::evaluate;
use crate::train::{train, RunSetup, TrainResult};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub name: String,
    pub config: TrainConfig,
}

impl Cell {
    fn new(name: &str, config: TrainConfig) -> Self {
        Self {
            name: name.to_string(),
            config,
        }
    }
}

/// Baseline, then visual prompts, prototype alignment, soft-hard alignment
/// and local top-k alignment added one at a time.
pub fn component_cells(base: &TrainConfig) -> Vec<Cell> {
    let mut c = base.clone();
    c.visual_prompts = false;
    c.gamma = 0.0;
    c.beta = 0.0;
    c.local_alignment = false;
    let mut cells = vec![Cell::new("baseline", c.clone())];
    c.visual_prompts = true;
    cells.push(Cell::new("+visual_prompts", c.clone()));
    c.gamma = 1.0;
    cells.push(Cell::new("+prototype", c.clone()));
    c.beta = 1.0;
    cells.push(Cell::new("+soft_hard", c.clone()));
    c.local_alignment = true;
    cells.push(Cell::new("+local_topk", c));
    cells
}

/// Templates 1-3, each with and without soft-hard alignment.
pub fn template_cells(base: &TrainConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for template in 1..=3u8 {
        for (beta, tag) in [(0.0, "no_spa"), (1.0, "spa")] {
            let mut c = base.clone();
            c.template = template;
            c.beta = beta;
            cells.push(Cell::new(&format!("template{template}_{tag}"), c));
        }
    }
    cells
}

pub fn subset_cells(base: &TrainConfig, sizes: &[Option<usize>]) -> Vec<Cell> {
    sizes
        .iter()
        .map(|&s| {
            let mut c = base.clone();
            c.subset_size = s;
            let name = s.map_or("subset_full".to_string(), |n| format!("subset_{n}"));
            Cell::new(&name, c)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub name: String,
    pub seed: u64,
    pub accuracy: f64,
}

/// Trains with `config` and evaluates the final checkpoint on the test split.
pub fn train_and_test(
    config: &TrainConfig,
    dataset: &Dataset,
    out: Option<&Path>,
) -> Result<(f64, TrainResult)> {
    let setup = RunSetup::new(config, dataset)?;
    let result = train(config, dataset, setup, out)?;
    let report = evaluate(&result.last, dataset, Split::Test)?;
    Ok((report.accuracy, result))
}

/// Runs every cell for every seed (seed sets all four config seeds). With
/// `out`, each run writes into `out/<cell>/seed<s>/`.
pub fn run_grid(
    cells: &[Cell],
    seeds: &[u64],
    dataset: &Dataset,
    out: Option<&Path>,
) -> Result<Vec<CellResult>> {
    let mut results = Vec::new();
    for cell in cells {
        for &seed in seeds {
            let mut config = cell.config.clone();
            config.set("seed", &seed.to_string())?;
            let dir = out.map(|o| o.join(&cell.name).join(format!("seed{seed}")));
            if let Some(d) = &dir {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            let (accuracy, _) = train_and_test(&config, dataset, dir.as_deref())?;
            results.push(CellResult {
                name: cell.name.clone(),
                seed,
                accuracy,
            });
        }
    }
    Ok(results)
}

/// Mean accuracy per cell name, in first-appearance order.
pub fn mean_by_cell(results: &[CellResult]) -> Vec<(String, f64)> {
    let mut names: Vec<String> = Vec::new();
    for r in results {
        if !names.contains(&r.name) {
            names.push(r.name.clone());
        }
    }
    names
        .into_iter()
        .map(|n| {
            let accs: Vec<f64> = results.iter().filter(|r| r.name == n).map(|r| r.accuracy).collect();
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            (n, mean)
        })
        .collect()
}

pub fn results_csv(results: &[CellResult]) -> String {
    let mut s = String::from("cell,seed,test_acc\n");
    for r in results {
        let _ = writeln!(s, "{},{},{:.6}", r.name, r.seed, r.accuracy);
    }
    s
}

/// Table with one row per cell: per-seed accuracies, mean and the delta to
/// the previous row.
pub fn results_table(results: &[CellResult]) -> String {
    let means = mean_by_cell(results);
    let mut s = format!("{:<20} {:>28} {:>8} {:>8}\n", "cell", "per-seed acc (%)", "mean", "delta");
    let mut prev: Option<f64> = None;
    for (name, mean) in &means {
        let per: Vec<String> = results
            .iter()
            .filter(|r| &r.name == name)
            .map(|r| format!("{:.2}", 100.0 * r.accuracy))
            .collect();
        let delta = prev.map_or("-".to_string(), |p| format!("{:+.2}", 100.0 * (mean - p)));
        let _ = writeln!(s, "{name:<20} {:>28} {:>8.2} {delta:>8}", per.join(" "), 100.0 * mean);
        prev = Some(*mean);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn component_order() {
        let cells = component_cells(&TrainConfig::default());
        let names: Vec<&str> = cells.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(
            names,
            ["baseline", "+visual_prompts", "+prototype", "+soft_hard", "+local_topk"]
        );
        let full = &cells[4].config;
        assert!(full.visual_prompts && full.local_alignment && full.beta == 1.0 && full.gamma == 1.0);
        let base = &cells[0].config;
        assert!(!base.visual_prompts && !base.local_alignment && base.beta == 0.0 && base.gamma == 0.0);
    }

    #[test]
    fn means_and_table() {
        let r = vec![
            CellResult { name: "a".into(), seed: 0, accuracy: 0.5 },
            CellResult { name: "a".into(), seed: 1, accuracy: 0.7 },
            CellResult { name: "b".into(), seed: 0, accuracy: 0.9 },
        ];
        let m = mean_by_cell(&r);
        assert_eq!(m[0].0, "a");
        assert!((m[0].1 - 0.6).abs() < 1e-12);
        assert!(results_table(&r).contains("+30.00"));
        assert_eq!(results_csv(&r).lines().count(), 4);
    }
}
