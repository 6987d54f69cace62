//! Long-format CSV tables for plotting, plus the report bundle manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::composer::{difficulty_label, StrategyStack};
use crate::contamination::ReductionRow;
use crate::eval::{aggregate, mean_std, run_ratio, task_key, EvalRun, ScoreTable};
use crate::model::{sha256_hex, SWEEP_RATIOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Figure {
    DeltaHeatmap,
    Radar,
    ContaminationReduction,
    RatioSweep,
    StackCount,
}

impl Figure {
    pub const ALL: [Figure; 5] = [
        Figure::DeltaHeatmap,
        Figure::Radar,
        Figure::ContaminationReduction,
        Figure::RatioSweep,
        Figure::StackCount,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Figure::DeltaHeatmap => "delta_heatmap",
            Figure::Radar => "radar",
            Figure::ContaminationReduction => "contamination_reduction",
            Figure::RatioSweep => "ratio_sweep",
            Figure::StackCount => "stack_count",
        }
    }
}

impl fmt::Display for Figure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Figure {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Figure::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| format!("unknown figure `{s}`"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("missing runs for {}", fmt_cells(.0))]
    MissingRuns(Vec<(String, String)>),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn fmt_cells(cells: &[(String, String)]) -> String {
    cells
        .iter()
        .map(|(m, s)| format!("({m}, {s})"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Runs plus contamination rows a report is built from.
#[derive(Debug, Clone, Default)]
pub struct Bundle {
    pub runs: Vec<EvalRun>,
    pub reductions: Vec<VariantReduction>,
}

/// Reduction row for one variant set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReduction {
    pub variant: String,
    #[serde(flatten)]
    pub row: ReductionRow,
}

impl Bundle {
    pub fn table(&self) -> ScoreTable {
        aggregate(&self.runs)
    }

    fn models(&self) -> Vec<(String, String)> {
        let mut m: Vec<(String, String)> = self
            .runs
            .iter()
            .map(|r| (r.model.clone(), r.benchmark.clone()))
            .collect();
        m.sort();
        m.dedup();
        m
    }
}

fn to_csv<S: Serialize>(rows: &[S]) -> Result<Vec<u8>, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| ReportError::Csv(e.into_error().into()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatmapRow {
    pub model: String,
    pub benchmark: String,
    pub image_op: String,
    pub lang_op: String,
    pub stack: String,
    pub mean: f64,
    pub delta: f64,
}

/// One row per (model, grid cell); `grid` is the paired grid at the
/// configured outpaint ratio.
pub fn delta_heatmap(bundle: &Bundle, grid: &[StrategyStack]) -> Result<Vec<HeatmapRow>, ReportError> {
    let table = bundle.table();
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for (model, bench) in bundle.models() {
        if table.get(&model, &bench, "vanilla").is_none() {
            missing.push((model.clone(), "vanilla".to_string()));
        }
        for cell in grid {
            let label = cell.to_string();
            match table.get(&model, &bench, &label) {
                Some(r) => rows.push(HeatmapRow {
                    model: model.clone(),
                    benchmark: bench.clone(),
                    image_op: cell.image_ops.first().map(ToString::to_string).unwrap_or_default(),
                    lang_op: cell.lang_ops.first().map(ToString::to_string).unwrap_or_default(),
                    stack: label,
                    mean: r.mean,
                    delta: r.delta.unwrap_or(f64::NAN),
                }),
                None => missing.push((model.clone(), label)),
            }
        }
    }
    if bundle.runs.is_empty() {
        missing.push(("*".into(), "vanilla".into()));
    }
    if !missing.is_empty() {
        return Err(ReportError::MissingRuns(missing));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadarRow {
    pub model: String,
    pub benchmark: String,
    pub condition: String,
    pub task: String,
    pub samples: usize,
    pub accuracy: f64,
}

/// Accuracy per task per condition, pooled over seeds.
pub fn radar(bundle: &Bundle) -> Result<Vec<RadarRow>, ReportError> {
    if bundle.runs.is_empty() {
        return Err(ReportError::MissingRuns(vec![("*".into(), "*".into())]));
    }
    let mut tally: BTreeMap<(String, String, String, String), (usize, usize)> = BTreeMap::new();
    for run in &bundle.runs {
        for s in &run.per_sample {
            let e = tally
                .entry((run.model.clone(), run.benchmark.clone(), run.stack.clone(), task_key(&s.task_tag)))
                .or_default();
            e.0 += s.correct as usize;
            e.1 += 1;
        }
    }
    Ok(tally
        .into_iter()
        .map(|((model, benchmark, condition, task), (c, n))| RadarRow {
            model,
            benchmark,
            condition,
            task,
            samples: n,
            accuracy: 100.0 * c as f64 / n as f64,
        })
        .collect())
}

pub fn contamination_reduction(bundle: &Bundle) -> Result<Vec<FlatReduction>, ReportError> {
    if bundle.reductions.is_empty() {
        return Err(ReportError::MissingRuns(vec![("contamination".into(), "*".into())]));
    }
    let mut rows: Vec<FlatReduction> = bundle.reductions.iter().map(FlatReduction::from).collect();
    rows.sort_by(|a, b| (&a.variant, &a.metric).cmp(&(&b.variant, &b.metric)));
    Ok(rows)
}

/// Flat CSV form of a [`VariantReduction`].
#[derive(Debug, Serialize, Deserialize)]
pub struct FlatReduction {
    pub variant: String,
    pub benchmark: String,
    pub corpus: String,
    pub metric: String,
    pub static_rate: f64,
    pub dynamic_rate: f64,
    pub reduction: f64,
}

impl From<&VariantReduction> for FlatReduction {
    fn from(v: &VariantReduction) -> Self {
        Self {
            variant: v.variant.clone(),
            benchmark: v.row.benchmark.clone(),
            corpus: v.row.corpus.clone(),
            metric: v.row.metric.clone(),
            static_rate: v.row.static_rate,
            dynamic_rate: v.row.dynamic_rate,
            reduction: v.row.reduction,
        }
    }
}

impl From<FlatReduction> for VariantReduction {
    fn from(c: FlatReduction) -> Self {
        Self {
            variant: c.variant,
            row: ReductionRow {
                benchmark: c.benchmark,
                corpus: c.corpus,
                metric: c.metric,
                static_rate: c.static_rate,
                dynamic_rate: c.dynamic_rate,
                reduction: c.reduction,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioRow {
    pub model: String,
    pub benchmark: String,
    pub ratio: f64,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

/// Lone-V3 accuracy per ratio; every sweep ratio must be present.
pub fn ratio_sweep(bundle: &Bundle) -> Result<Vec<RatioRow>, ReportError> {
    let mut by: BTreeMap<(String, String, u64), Vec<f64>> = BTreeMap::new();
    for r in &bundle.runs {
        if let Some(ratio) = run_ratio(r) {
            by.entry((r.model.clone(), r.benchmark.clone(), ratio.to_bits()))
                .or_default()
                .push(r.accuracy * 100.0);
        }
    }
    let mut missing = Vec::new();
    for (model, bench) in bundle.models() {
        for r in SWEEP_RATIOS {
            if !by.contains_key(&(model.clone(), bench.clone(), r.to_bits())) {
                missing.push((model.clone(), crate::model::StrategyId::v3(r).to_string()));
            }
        }
    }
    if bundle.runs.is_empty() {
        missing.push(("*".into(), "V3".into()));
    }
    if !missing.is_empty() {
        return Err(ReportError::MissingRuns(missing));
    }
    let mut rows: Vec<RatioRow> = by
        .into_iter()
        .map(|((model, benchmark, bits), accs)| {
            let (mean, std) = mean_std(&accs);
            RatioRow {
                model,
                benchmark,
                ratio: f64::from_bits(bits),
                runs: accs.len(),
                mean,
                std,
            }
        })
        .collect();
    rows.sort_by(|a, b| (&a.model, &a.benchmark).cmp(&(&b.model, &b.benchmark)).then(a.ratio.total_cmp(&b.ratio)));
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StackCountRow {
    pub model: String,
    pub benchmark: String,
    pub hard_strategies: usize,
    pub stacks: usize,
    pub mean: f64,
    pub mean_delta: f64,
}

/// Mean accuracy grouped by the number of hard strategies in the stack;
/// vanilla counts as zero.
pub fn stack_count(bundle: &Bundle) -> Result<Vec<StackCountRow>, ReportError> {
    let table = bundle.table();
    let mut groups: BTreeMap<(String, String, usize), Vec<(f64, f64)>> = BTreeMap::new();
    let mut missing = Vec::new();
    for row in &table.rows {
        let Ok(stack) = row.stack.parse::<StrategyStack>() else {
            continue;
        };
        let Some(delta) = row.delta else {
            missing.push((row.model.clone(), "vanilla".to_string()));
            continue;
        };
        let hard = difficulty_label(&stack).0;
        groups
            .entry((row.model.clone(), row.benchmark.clone(), hard))
            .or_default()
            .push((row.mean, delta));
    }
    if table.rows.is_empty() {
        missing.push(("*".into(), "vanilla".into()));
    }
    if !missing.is_empty() {
        missing.dedup();
        return Err(ReportError::MissingRuns(missing));
    }
    Ok(groups
        .into_iter()
        .map(|((model, benchmark, hard), v)| {
            let n = v.len() as f64;
            StackCountRow {
                model,
                benchmark,
                hard_strategies: hard,
                stacks: v.len(),
                mean: v.iter().map(|x| x.0).sum::<f64>() / n,
                mean_delta: v.iter().map(|x| x.1).sum::<f64>() / n,
            }
        })
        .collect())
}

/// CSV bytes for one figure.
pub fn emit_figure_data(bundle: &Bundle, figure: Figure, grid: &[StrategyStack]) -> Result<Vec<u8>, ReportError> {
    match figure {
        Figure::DeltaHeatmap => to_csv(&delta_heatmap(bundle, grid)?),
        Figure::Radar => to_csv(&radar(bundle)?),
        Figure::ContaminationReduction => to_csv(&contamination_reduction(bundle)?),
        Figure::RatioSweep => to_csv(&ratio_sweep(bundle)?),
        Figure::StackCount => to_csv(&stack_count(bundle)?),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleFile {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub files: Vec<BundleFile>,
    /// sha256 over `path sha256\n` lines in path order.
    pub hash: String,
}

impl BundleManifest {
    pub fn new(mut files: Vec<BundleFile>) -> Self {
        files.sort_by(|a, b| a.path.cmp(&b.path));
        let lines: String = files.iter().map(|f| format!("{} {}\n", f.path, f.sha256)).collect();
        Self {
            hash: sha256_hex(lines),
            files,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composer::paired_grid;
    use crate::eval::SampleScore;

    fn run(model: &str, stack: &str, seed: u64, correct: &[bool]) -> EvalRun {
        let per = correct
            .iter()
            .enumerate()
            .map(|(i, &c)| SampleScore {
                id: format!("s{i}"),
                response: String::new(),
                correct: c,
                error: None,
                task_tag: format!("Task {}", i % 9),
            })
            .collect();
        EvalRun::new(model, "bench", stack, seed, per)
    }

    fn full_bundle() -> Bundle {
        let mut runs = vec![run("m", "vanilla", 0, &[true; 18])];
        for s in paired_grid() {
            runs.push(run("m", &s.to_string(), 0, &[true, false].repeat(9)));
        }
        Bundle { runs, reductions: vec![] }
    }

    #[test]
    fn heatmap_has_twelve_rows() {
        let rows = delta_heatmap(&full_bundle(), &paired_grid()).unwrap();
        assert_eq!(rows.len(), 12);
        assert!(rows.iter().all(|r| (r.delta + 50.0).abs() < 1e-9));
    }

    #[test]
    fn heatmap_names_missing_cells() {
        let mut b = full_bundle();
        b.runs.retain(|r| r.stack != "V2+L3");
        match delta_heatmap(&b, &paired_grid()) {
            Err(ReportError::MissingRuns(cells)) => assert_eq!(cells, vec![("m".to_string(), "V2+L3".to_string())]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn radar_rows_per_task() {
        let rows = radar(&full_bundle()).unwrap();
        let vanilla: Vec<_> = rows.iter().filter(|r| r.condition == "vanilla").collect();
        assert_eq!(vanilla.len(), 9);
    }

    #[test]
    fn stack_count_zero_to_three() {
        let mut b = full_bundle();
        b.runs.push(run("m", "V1+V3+L4", 0, &[false; 18]));
        let xs: Vec<usize> = stack_count(&b).unwrap().iter().map(|r| r.hard_strategies).collect();
        assert_eq!(xs, vec![0, 1, 2, 3]);
    }

    #[test]
    fn sweep_requires_all_ratios() {
        let mut b = full_bundle();
        assert!(matches!(ratio_sweep(&b), Err(ReportError::MissingRuns(c)) if c.len() == 4));
        for r in SWEEP_RATIOS {
            b.runs.push(run("m", &crate::model::StrategyId::v3(r).to_string(), 0, &[true; 18]));
        }
        assert_eq!(ratio_sweep(&b).unwrap().len(), 4);
    }

    #[test]
    fn manifest_hash_ignores_input_order() {
        let f = |p: &str| BundleFile {
            path: p.into(),
            sha256: sha256_hex(p),
            bytes: 1,
        };
        assert_eq!(
            BundleManifest::new(vec![f("a"), f("b")]),
            BundleManifest::new(vec![f("b"), f("a")])
        );
    }
}
