//! ε-ladder campaigns: simulate, classify exits against targets, attach the
//! predictor, and persist raw samples and summaries.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{ordered_map_slice, Execution};
use crate::flow::{self, FlowSettings};
use crate::model::{Domain, Model, Target, TargetSet};
use crate::predict::{self, PredictSettings, Prediction};
use crate::sde::{self, ExitSample, SimConfig};
use crate::stats::{self, CollapseFit, GoFReport, LadderPoint, PowerLawFit};

/// Largest tolerated fraction of trajectories still inside at the horizon.
pub const MAX_NON_EXIT_FRACTION: f64 = 1e-4;
/// Trajectories simulated per streaming chunk.
pub const CHUNK: u64 = 1 << 15;
/// Default cap on per-ε trials under [`BudgetRule::Hits`].
pub const DEFAULT_TRIAL_CAP: u64 = 100_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BudgetRule {
    /// The same number of trials at every ε.
    Fixed { n: u64 },
    /// One trial count per ladder entry.
    List { n: Vec<u64> },
    /// `n(ε) = ceil(hits / (μ ε^ρ))`, maximized over targets and capped.
    Hits { hits: f64, cap: u64 },
}

impl Default for BudgetRule {
    fn default() -> Self {
        BudgetRule::Hits {
            hits: 2000.0,
            cap: DEFAULT_TRIAL_CAP,
        }
    }
}

/// `ceil(hits / (μ ε^ρ))` capped at `cap`.
pub fn hits_budget(hits: f64, cap: u64, mu: f64, rho: f64, epsilon: f64) -> u64 {
    let n = (hits / (mu * epsilon.powf(rho))).ceil();
    if n.is_finite() && n < cap as f64 {
        n as u64
    } else {
        cap
    }
}

impl BudgetRule {
    pub fn trials(&self, k: usize, epsilon: f64, prediction: &Prediction) -> Result<u64> {
        match self {
            BudgetRule::Fixed { n } => Ok(*n),
            BudgetRule::List { n } => n
                .get(k)
                .copied()
                .ok_or_else(|| Error::invalid("budget list is shorter than the ε ladder")),
            BudgetRule::Hits { hits, cap } => prediction
                .targets
                .iter()
                .filter(|t| t.mu > 0.0)
                .map(|t| hits_budget(*hits, *cap, t.mu, t.rho, epsilon))
                .max()
                .ok_or_else(|| Error::invalid("hit-count budget needs a target with μ > 0")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub name: String,
    pub model: Model,
    pub targets: Vec<Target>,
    /// Strictly decreasing, inside (0, 1).
    pub epsilons: Vec<f64>,
    pub budget: BudgetRule,
    pub seed: u64,
    pub dt: Option<f64>,
    pub max_time: Option<f64>,
    pub predict: PredictSettings,
    pub config_hash: String,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        for (k, e) in self.epsilons.iter().enumerate() {
            if !(*e > 0.0 && *e < 1.0) {
                return Err(Error::invalid(format!("ε = {e} is not in (0, 1)")));
            }
            if k > 0 && *e >= self.epsilons[k - 1] {
                return Err(Error::invalid("the ε ladder must be strictly decreasing"));
            }
        }
        match &self.budget {
            BudgetRule::Fixed { n } if *n == 0 => return Err(Error::invalid("budget must be positive")),
            BudgetRule::List { n } => {
                if n.len() != self.epsilons.len() {
                    return Err(Error::invalid("budget list and ε ladder differ in length"));
                }
                if n.contains(&0) {
                    return Err(Error::invalid("budget must be positive"));
                }
            }
            BudgetRule::Hits { hits, cap } if !(*hits > 0.0) || *cap == 0 => {
                return Err(Error::invalid("hit-count budget needs hits > 0 and cap > 0"))
            }
            _ => {}
        }
        for (k, t) in self.targets.iter().enumerate() {
            if self.targets[..k].iter().any(|u| u.name == t.name) {
                return Err(Error::invalid(format!("duplicate target name {:?}", t.name)));
            }
            if matches!(t.set, TargetSet::Face(_)) && !matches!(self.model.domain(), Domain::Box { .. }) {
                return Err(Error::invalid(format!(
                    "target {:?}: face targets need a box domain",
                    t.name
                )));
            }
        }
        Ok(())
    }

    /// Seed of the `k`-th ladder cell; trajectory streams are keyed under it.
    pub fn cell_seed(&self, k: usize) -> u64 {
        self.seed ^ (k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }

    pub fn sim_config(&self, k: usize, trials: u64) -> SimConfig {
        SimConfig {
            dt: self.dt,
            max_time: self.max_time,
            ..SimConfig::new(self.epsilons[k], trials, self.cell_seed(k))
        }
    }
}

/// Whether an exit sample lies in a target.
///
/// Face targets test coordinate intervals on the box face. Preimage targets
/// map the location to `∂B_L` with `ζ_L` and test the rectangle there.
pub fn classify_exit(sample: &ExitSample, target: &TargetSet, model: &Model, flow: &FlowSettings) -> Result<bool> {
    let chart = match target {
        TargetSet::Preimage(_) => Some(flow::zeta_auto(&sample.location, model, flow)?),
        TargetSet::Face(_) => None,
    };
    classify_with(sample, target, model, chart.as_deref())
}

fn classify_with(sample: &ExitSample, target: &TargetSet, model: &Model, chart: Option<&[f64]>) -> Result<bool> {
    match target {
        TargetSet::Face(rect) => match model.domain() {
            Domain::Box { half_width } => Ok(rect.contains(&sample.location, *half_width, sample.face)),
            Domain::Ellipsoid { .. } => Err(Error::invalid("face targets need a box domain")),
        },
        TargetSet::Preimage(rect) => {
            let y = chart.ok_or_else(|| Error::invalid("preimage target without chart point"))?;
            Ok(rect.contains(y, model.chart_half_width(), None))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetCount {
    pub name: String,
    pub hits: u64,
    pub p_hat: f64,
    /// 95% Wilson interval.
    pub wilson: [f64; 2],
    /// Limit prediction `μ(A) ε^ρ`.
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Aborted { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub epsilon: f64,
    pub seed: u64,
    pub dt: f64,
    pub max_time: f64,
    /// Trials actually run (short of the plan when aborted).
    pub trials: u64,
    pub planned_trials: u64,
    pub exits: u64,
    pub non_exits: u64,
    #[serde(flatten)]
    pub status: CellStatus,
    pub targets: Vec<TargetCount>,
}

impl Cell {
    pub fn is_ok(&self) -> bool {
        self.status == CellStatus::Ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub prediction: Prediction,
    pub cells: Vec<Cell>,
    /// Exit locations inside each target, indexed `[cell][target][sample]`.
    /// Not serialized; the raw samples file carries them.
    #[serde(skip)]
    pub conditional: Vec<Vec<Vec<Vec<f64>>>>,
}

const WILSON_Z: f64 = 1.959963984540054;

struct CellAccumulator {
    hits: Vec<u64>,
    conditional: Vec<Vec<Vec<f64>>>,
}

impl CellAccumulator {
    fn new(n_targets: usize) -> Self {
        CellAccumulator {
            hits: vec![0; n_targets],
            conditional: vec![Vec::new(); n_targets],
        }
    }

    fn add_chunk(&mut self, samples: &[ExitSample], plan: &ExperimentPlan, exec: Execution) -> Result<()> {
        let needs_chart = plan.targets.iter().any(|t| matches!(t.set, TargetSet::Preimage(_)));
        let flags = ordered_map_slice(samples, exec, |s| -> Result<Vec<bool>> {
            let chart = if needs_chart {
                Some(flow::zeta_auto(&s.location, &plan.model, &plan.predict.flow)?)
            } else {
                None
            };
            plan.targets
                .iter()
                .map(|t| classify_with(s, &t.set, &plan.model, chart.as_deref()))
                .collect()
        });
        for (s, f) in samples.iter().zip(flags) {
            for (t, inside) in f?.into_iter().enumerate() {
                if inside {
                    self.hits[t] += 1;
                    self.conditional[t].push(s.location.clone());
                }
            }
        }
        Ok(())
    }

    fn finish(self, plan: &ExperimentPlan, trials: u64) -> (Vec<TargetCount>, Vec<Vec<Vec<f64>>>) {
        let counts = plan
            .targets
            .iter()
            .zip(&self.hits)
            .map(|(t, &hits)| TargetCount {
                name: t.name.clone(),
                hits,
                p_hat: if trials > 0 { hits as f64 / trials as f64 } else { 0.0 },
                wilson: {
                    let (lo, hi) = stats::wilson_interval(hits, trials, WILSON_Z);
                    [lo, hi]
                },
                predicted: 0.0,
            })
            .collect();
        (counts, self.conditional)
    }
}

fn attach_predictions(counts: &mut [TargetCount], prediction: &Prediction, epsilon: f64) {
    for (c, p) in counts.iter_mut().zip(&prediction.targets) {
        c.predicted = p.mu * epsilon.powf(p.rho);
    }
}

/// Runs the plan, handing every exit sample to `sink` in (cell, trajectory) order.
pub fn run_plan_streaming(
    plan: &ExperimentPlan,
    exec: Execution,
    sink: &mut dyn FnMut(&ExitSample) -> Result<()>,
) -> Result<ExperimentResult> {
    plan.validate()?;
    let prediction = predict::predict_all(&plan.model, &plan.targets, &plan.predict)?;
    let mut cells = Vec::new();
    let mut conditional = Vec::new();
    for k in 0..plan.epsilons.len() {
        let planned = plan.budget.trials(k, plan.epsilons[k], &prediction)?;
        let config = plan.sim_config(k, planned);
        let (dt, max_time) = config.resolve(plan.model.system())?;
        let limit = (MAX_NON_EXIT_FRACTION * planned as f64).floor() as u64;
        let mut acc = CellAccumulator::new(plan.targets.len());
        let mut done = 0;
        let mut exits = 0;
        let mut non_exits = 0;
        let mut status = CellStatus::Ok;
        while done < planned {
            let end = (done + CHUNK).min(planned);
            let out = sde::simulate_exit_range(&plan.model, &config, done..end, exec)?;
            for s in &out.samples {
                sink(s)?;
            }
            acc.add_chunk(&out.samples, plan, exec)?;
            exits += out.samples.len() as u64;
            non_exits += out.non_exits.len() as u64;
            done = end;
            if non_exits > limit {
                status = CellStatus::Aborted {
                    reason: format!(
                        "{non_exits} of {done} trajectories still inside at t = {max_time}; horizon too short"
                    ),
                };
                break;
            }
        }
        let (mut counts, cond) = acc.finish(plan, done);
        attach_predictions(&mut counts, &prediction, plan.epsilons[k]);
        cells.push(Cell {
            epsilon: plan.epsilons[k],
            seed: config.seed,
            dt,
            max_time,
            trials: done,
            planned_trials: planned,
            exits,
            non_exits,
            status,
            targets: counts,
        });
        conditional.push(cond);
    }
    Ok(ExperimentResult {
        name: plan.name.clone(),
        config_hash: plan.config_hash.clone(),
        seed: plan.seed,
        prediction,
        cells,
        conditional,
    })
}

pub fn run_plan(plan: &ExperimentPlan, exec: Execution) -> Result<ExperimentResult> {
    run_plan_streaming(plan, exec, &mut |_| Ok(()))
}

/// Rebuilds a result from stored cells and samples without re-simulating.
pub fn rebuild_result(
    plan: &ExperimentPlan,
    stored: &ExperimentResult,
    samples: &[ExitSample],
    exec: Execution,
) -> Result<ExperimentResult> {
    let mut cells = Vec::new();
    let mut conditional = Vec::new();
    let mut rest = samples;
    for cell in &stored.cells {
        let n = rest
            .iter()
            .take_while(|s| (s.epsilon - cell.epsilon).abs() <= 1e-12 * cell.epsilon)
            .count();
        let (mine, tail) = rest.split_at(n);
        rest = tail;
        if mine.len() as u64 != cell.exits {
            return Err(Error::invalid(format!(
                "stored samples hold {} exits at ε = {}, summary says {}",
                mine.len(),
                cell.epsilon,
                cell.exits
            )));
        }
        let mut acc = CellAccumulator::new(plan.targets.len());
        for chunk in mine.chunks(CHUNK as usize) {
            acc.add_chunk(chunk, plan, exec)?;
        }
        let (mut counts, cond) = acc.finish(plan, cell.trials);
        attach_predictions(&mut counts, &stored.prediction, cell.epsilon);
        cells.push(Cell {
            targets: counts,
            ..cell.clone()
        });
        conditional.push(cond);
    }
    if !rest.is_empty() {
        return Err(Error::invalid(format!("{} stored samples match no cell", rest.len())));
    }
    Ok(ExperimentResult {
        cells,
        conditional,
        ..stored.clone()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofCell {
    pub epsilon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<GoFReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseEntry {
    /// One-based coordinate.
    pub coordinate: usize,
    /// `1 - λ_j / λ_i`.
    pub expected_slope: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<CollapseFit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetAnalysis {
    pub name: String,
    pub index: usize,
    pub rho: f64,
    pub mu: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<PowerLawFit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit_error: Option<String>,
    /// `|slope - ρ| ≤ band`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exponent_in_band: Option<bool>,
    /// Fitted constant over predicted `μ`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub constant_ratio: Option<f64>,
    pub gof: Vec<GofCell>,
    pub collapse: Vec<CollapseEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub alpha: f64,
    pub exponent_band: f64,
    pub targets: Vec<TargetAnalysis>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSettings {
    /// Significance level of the goodness-of-fit tests.
    pub alpha: f64,
    /// Accepted absolute deviation of the fitted exponent from `ρ`.
    pub exponent_band: f64,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        AnalysisSettings {
            alpha: 0.01,
            exponent_band: 0.15,
        }
    }
}

/// Exponent fits, conditional-law tests and transverse collapse rates.
pub fn analyze(plan: &ExperimentPlan, result: &ExperimentResult, settings: &AnalysisSettings) -> Analysis {
    let lambdas = &plan.model.system().lambdas;
    let targets = plan
        .targets
        .iter()
        .zip(&result.prediction.targets)
        .enumerate()
        .map(|(t, (target, pred))| {
            let points: Vec<LadderPoint> = result
                .cells
                .iter()
                .filter(|c| c.is_ok())
                .map(|c| LadderPoint {
                    epsilon: c.epsilon,
                    hits: c.targets[t].hits,
                    trials: c.trials,
                })
                .collect();
            let (fit, fit_error) = match stats::fit_exponent(&points) {
                Ok(f) => (Some(f), None),
                Err(e) => (None, Some(e.to_string())),
            };
            let i = pred.index - 1;
            let law = predict::predicted_conditional_law(&target.set, &plan.model, &plan.predict);
            let mut gof = Vec::new();
            let mut mapped_per_cell: Vec<(f64, Vec<Vec<f64>>)> = Vec::new();
            for (c, cell) in result.cells.iter().enumerate() {
                let locations = &result.conditional[c][t];
                let entry = match &law {
                    Err(e) => Err(Error::invalid(e.to_string())),
                    Ok(law) => locations
                        .iter()
                        .map(|x| law.map_sample(x, &plan.model, &plan.predict.flow))
                        .collect::<Result<Vec<_>>>()
                        .and_then(|mapped| {
                            mapped_per_cell.push((cell.epsilon, mapped.iter().map(|m| m.0.clone()).collect()));
                            stats::test_conditional_law(&mapped, law, settings.alpha)
                        }),
                };
                gof.push(match entry {
                    Ok(r) => GofCell {
                        epsilon: cell.epsilon,
                        report: Some(r),
                        error: None,
                    },
                    Err(e) => GofCell {
                        epsilon: cell.epsilon,
                        report: None,
                        error: Some(e.to_string()),
                    },
                });
            }
            let collapse = (i + 1..lambdas.len())
                .map(|j| {
                    let per: Vec<(f64, Vec<f64>)> = mapped_per_cell
                        .iter()
                        .filter(|(_, v)| !v.is_empty())
                        .map(|(e, v)| (*e, v.iter().map(|x| x[j]).collect()))
                        .collect();
                    let r = stats::transverse_collapse_rate(&per);
                    CollapseEntry {
                        coordinate: j + 1,
                        expected_slope: 1.0 - lambdas[j] / lambdas[i],
                        error: r.as_ref().err().map(|e| e.to_string()),
                        fit: r.ok(),
                    }
                })
                .collect();
            TargetAnalysis {
                name: target.name.clone(),
                index: pred.index,
                rho: pred.rho,
                mu: pred.mu,
                exponent_in_band: fit.as_ref().map(|f| (f.slope - pred.rho).abs() <= settings.exponent_band),
                constant_ratio: fit
                    .as_ref()
                    .filter(|_| pred.mu > 0.0)
                    .map(|f| f.constant / pred.mu),
                fit,
                fit_error,
                gof,
                collapse,
            }
        })
        .collect();
    Analysis {
        alpha: settings.alpha,
        exponent_band: settings.exponent_band,
        targets,
    }
}

/// Campaign summary: the result without raw samples, plus its analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// File name of the raw samples, relative to the summary.
    pub samples_file: String,
    pub result: ExperimentResult,
    pub analysis: Analysis,
}

pub fn file_stem(name: &str, config_hash: &str) -> String {
    format!("{name}-{config_hash}")
}

pub fn samples_path(dir: &Path, name: &str, config_hash: &str, gzip: bool) -> PathBuf {
    let ext = if gzip { "jsonl.gz" } else { "jsonl" };
    dir.join(format!("{}.samples.{ext}", file_stem(name, config_hash)))
}

pub fn summary_path(dir: &Path, name: &str, config_hash: &str) -> PathBuf {
    dir.join(format!("{}.summary.json", file_stem(name, config_hash)))
}

/// JSONL writer for exit samples, optionally gzip-compressed.
pub struct SampleWriter {
    path: PathBuf,
    inner: Box<dyn Write>,
}

impl SampleWriter {
    pub fn create(path: &Path, gzip: bool) -> Result<Self> {
        let file = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        let inner: Box<dyn Write> = if gzip {
            Box::new(flate2::write::GzEncoder::new(file, flate2::Compression::default()))
        } else {
            Box::new(file)
        };
        Ok(SampleWriter {
            path: path.to_path_buf(),
            inner,
        })
    }

    pub fn write(&mut self, sample: &ExitSample) -> Result<()> {
        let line = serde_json::to_string(sample).map_err(|e| Error::Data {
            path: self.path.clone(),
            message: e.to_string(),
        })?;
        writeln!(self.inner, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))?;
        drop(self.inner);
        Ok(())
    }
}

pub fn read_samples(path: &Path) -> Result<Vec<ExitSample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(flate2::read::GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    let mut out = Vec::new();
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(out)
}

pub fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    let text = serde_json::to_string_pretty(summary).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Paths written by [`run_campaign`].
#[derive(Debug, Clone)]
pub struct CampaignFiles {
    pub samples: PathBuf,
    pub summary: PathBuf,
}

/// Runs a plan, streams samples to JSONL and writes the summary next to it.
pub fn run_campaign(
    plan: &ExperimentPlan,
    out_dir: &Path,
    gzip: bool,
    analysis: &AnalysisSettings,
    exec: Execution,
) -> Result<(Summary, CampaignFiles)> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let samples = samples_path(out_dir, &plan.name, &plan.config_hash, gzip);
    let summary_file = summary_path(out_dir, &plan.name, &plan.config_hash);
    let mut writer = SampleWriter::create(&samples, gzip)?;
    let result = run_plan_streaming(plan, exec, &mut |s| writer.write(s))?;
    writer.finish()?;
    let summary = Summary {
        samples_file: samples
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        analysis: analyze(plan, &result, analysis),
        result,
    };
    write_summary(&summary_file, &summary)?;
    Ok((
        summary,
        CampaignFiles {
            samples,
            summary: summary_file,
        },
    ))
}

/// Recomputes counts and statistics from a stored campaign.
pub fn refit(plan: &ExperimentPlan, summary_file: &Path, analysis: &AnalysisSettings, exec: Execution) -> Result<Summary> {
    let stored = read_summary(summary_file)?;
    let dir = summary_file.parent().unwrap_or(Path::new("."));
    let samples = read_samples(&dir.join(&stored.samples_file))?;
    let result = rebuild_result(plan, &stored.result, &samples, exec)?;
    Ok(Summary {
        samples_file: stored.samples_file,
        analysis: analyze(plan, &result, analysis),
        result,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FaceRect, FaceSide, Interval, SystemSpec};

    fn plan_2d(targets: Vec<Target>, n: u64) -> ExperimentPlan {
        let model = Model::new(SystemSpec::linear_identity(&[2.0, 1.0]), Domain::Box { half_width: 1.0 }, 1.0).unwrap();
        ExperimentPlan {
            name: "t".into(),
            model,
            targets,
            epsilons: vec![0.3, 0.2],
            budget: BudgetRule::Fixed { n },
            seed: 9,
            dt: None,
            max_time: None,
            predict: PredictSettings::default(),
            config_hash: "abc".into(),
        }
    }

    fn face(name: &str, axis: usize, side: FaceSide, other: Interval) -> Target {
        Target {
            name: name.into(),
            set: TargetSet::Face(FaceRect::new(axis, side, vec![other]).unwrap()),
        }
    }

    #[test]
    fn budget_rule_matches_ceiling() {
        assert_eq!(hits_budget(2000.0, 100, 0.5, 1.0, 0.1), 100);
        assert_eq!(hits_budget(2000.0, DEFAULT_TRIAL_CAP, 0.7978845608, 1.0, 0.1), 25067);
        assert_eq!(hits_budget(10.0, 1000, 1.0, 0.0, 0.3), 10);
    }

    #[test]
    fn partition_counts_sum_to_trials() {
        let full = Interval::closed(-1.0, 1.0);
        let plan = plan_2d(
            vec![
                face("sides", 0, FaceSide::Both, Interval::open(-1.0, 1.0)),
                face("top-bottom", 1, FaceSide::Both, full),
            ],
            2000,
        );
        let r = run_plan(&plan, Execution::Parallel).unwrap();
        for c in &r.cells {
            assert!(c.is_ok());
            assert_eq!(c.targets[0].hits + c.targets[1].hits, c.trials);
            for t in &c.targets {
                assert!(t.wilson[0] <= t.p_hat && t.p_hat <= t.wilson[1]);
            }
        }
    }

    #[test]
    fn refinement_and_determinism() {
        let parent = face("parent", 1, FaceSide::Plus, Interval::closed(-1.0, 1.0));
        let left = face("left", 1, FaceSide::Plus, Interval::closed(-1.0, 0.0));
        let right = face("right", 1, FaceSide::Plus, Interval::open(0.0, 1.0));
        let plan = plan_2d(vec![parent, left, right], 3000);
        let a = run_plan(&plan, Execution::Parallel).unwrap();
        let b = run_plan(&plan, Execution::Sequential).unwrap();
        assert_eq!(a, b);
        for c in &a.cells {
            assert_eq!(c.targets[0].hits, c.targets[1].hits + c.targets[2].hits);
        }
    }

    #[test]
    fn ladder_must_decrease() {
        let mut plan = plan_2d(vec![], 10);
        plan.epsilons = vec![0.1, 0.2];
        assert!(plan.validate().is_err());
        plan.epsilons = vec![0.1, 1.0];
        assert!(plan.validate().is_err());
    }

    #[test]
    fn short_horizon_aborts_cell() {
        let mut plan = plan_2d(vec![face("top", 1, FaceSide::Plus, Interval::closed(-1.0, 1.0))], 400);
        plan.epsilons = vec![0.9];
        plan.max_time = Some(0.4);
        assert!(run_plan(&plan, Execution::Parallel).is_err());
        // Just above the horizon guard most paths are still inside.
        plan.max_time = Some(0.45);
        let r = run_plan(&plan, Execution::Parallel).unwrap();
        assert!(matches!(r.cells[0].status, CellStatus::Aborted { .. }));
        assert!(analyze(&plan, &r, &AnalysisSettings::default()).targets[0].fit.is_none());
    }

    #[test]
    fn stored_campaign_refits_identically() {
        let dir = tempfile::tempdir().unwrap();
        let plan = plan_2d(vec![face("top-bottom", 1, FaceSide::Both, Interval::closed(-1.0, 1.0))], 1500);
        for gzip in [false, true] {
            let (summary, files) = run_campaign(&plan, dir.path(), gzip, &AnalysisSettings::default(), Execution::Parallel).unwrap();
            let again = refit(&plan, &files.summary, &AnalysisSettings::default(), Execution::Parallel).unwrap();
            assert_eq!(summary, again);
            assert_eq!(read_samples(&files.samples).unwrap().len() as u64, summary.result.cells.iter().map(|c| c.exits).sum::<u64>());
        }
    }
}
