//! TOML campaign files.
//!
//! ```toml
//! name = "planar"
//!
//! [system]
//! lambdas = [2.0, 1.0]
//! sigma = [[1.0, 0.0], [0.0, 1.0]]    # optional, identity by default
//! drift = "linear"                    # or { kind = "shear", c = 0.5 }
//! conjugacy = "exact"                 # the built-in closed-form chart
//! xi0 = [0.0, 0.0]                    # optional
//!
//! [domain]
//! kind = "box"                        # or "ellipsoid" with semi_axes = [...]
//! half_width = 1.0
//! chart_half_width = 1.0              # L; defaults to half_width for linear boxes
//!
//! [[targets]]
//! name = "top-bottom"
//! kind = "face"                       # or "preimage" (rectangle on the chart box)
//! axis = 2                            # one-based
//! side = "both"                       # plus | minus | both
//! bounds = [[-1.0, 1.0]]              # coordinates other than axis, in order;
//!                                     # or { lo, hi, lo_closed, hi_closed }
//!
//! [ladder]
//! epsilons = [0.3, 0.2, 0.1]
//! budget = { kind = "hits", hits = 2000, cap = 100000000 }
//!                                     # or { kind = "fixed", n = 10000 }
//!                                     # or { kind = "list", n = [..] }
//!
//! [simulation]
//! seed = 1
//! dt = 0.001                          # optional
//! horizon = 40.0                      # optional
//!
//! [output]
//! dir = "runs"
//! gzip = false
//!
//! [predict]
//! backend = "adaptive"                # or "half-range-hermite"
//!
//! [stats]
//! alpha = 0.01
//! exponent_band = 0.15
//! ```
//!
//! Problems are reported with the line of the offending block.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Spanned;

use crate::error::{Error, Result};
use crate::experiment::{AnalysisSettings, BudgetRule, ExperimentPlan};
use crate::model::{Domain, Drift, FaceRect, FaceSide, Interval, Model, SystemSpec, Target, TargetSet};
use crate::predict::{ChiBackend, PredictSettings};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub system: Spanned<SystemBlock>,
    pub domain: Spanned<DomainBlock>,
    #[serde(default)]
    pub targets: Vec<Spanned<TargetBlock>>,
    #[serde(default)]
    pub ladder: Option<Spanned<LadderBlock>>,
    #[serde(default)]
    pub simulation: Option<Spanned<SimulationBlock>>,
    #[serde(default)]
    pub output: Option<OutputBlock>,
    #[serde(default)]
    pub predict: Option<PredictBlock>,
    #[serde(default)]
    pub stats: Option<StatsBlock>,
    #[serde(skip)]
    source: String,
}

fn default_name() -> String {
    "campaign".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemBlock {
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub sigma: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub drift: Option<DriftSpec>,
    #[serde(default)]
    pub conjugacy: Option<String>,
    #[serde(default)]
    pub xi0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DriftSpec {
    Name(String),
    Table { kind: String, c: Option<f64> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainBlock {
    pub kind: String,
    #[serde(default)]
    pub half_width: Option<f64>,
    #[serde(default)]
    pub semi_axes: Option<Vec<f64>>,
    #[serde(default)]
    pub chart_half_width: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetBlock {
    pub name: String,
    #[serde(default = "default_target_kind")]
    pub kind: String,
    pub axis: usize,
    #[serde(default = "default_side")]
    pub side: FaceSide,
    #[serde(default)]
    pub bounds: Option<Vec<IntervalSpec>>,
}

fn default_target_kind() -> String {
    "face".into()
}

fn default_side() -> FaceSide {
    FaceSide::Both
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum IntervalSpec {
    Closed([f64; 2]),
    Full(Interval),
}

impl IntervalSpec {
    fn interval(&self) -> Interval {
        match self {
            IntervalSpec::Closed([a, b]) => Interval::closed(*a, *b),
            IntervalSpec::Full(iv) => *iv,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderBlock {
    pub epsilons: Vec<f64>,
    #[serde(default)]
    pub budget: Option<BudgetRule>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationBlock {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub horizon: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub gzip: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictBlock {
    #[serde(default)]
    pub backend: Option<ChiBackend>,
    #[serde(default)]
    pub grid_cells: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsBlock {
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub exponent_band: Option<f64>,
}

fn line_of(source: &str, offset: usize) -> usize {
    source[..offset.min(source.len())].matches('\n').count() + 1
}

impl CampaignConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: CampaignConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().trim().to_string();
            match e.span() {
                Some(span) => Error::Config(format!("line {}: {msg}", line_of(text, span.start))),
                None => Error::Config(msg),
            }
        })?;
        cfg.source = text.to_string();
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn at<T>(&self, block: &Spanned<T>, msg: impl std::fmt::Display) -> Error {
        Error::Config(format!("line {}: {msg}", line_of(&self.source, block.span().start)))
    }

    /// Effective seed: the override if given, else the `[simulation]` seed.
    pub fn seed(&self, seed_override: Option<u64>) -> u64 {
        seed_override.unwrap_or_else(|| self.simulation.as_ref().map_or(0, |s| s.get_ref().seed))
    }

    /// Short hex digest of the canonical form with the effective seed. The
    /// `[output]` block does not enter.
    pub fn hash(&self, seed_override: Option<u64>) -> String {
        let mut canonical = self.clone();
        canonical.output = None;
        let seed = self.seed(seed_override);
        let sim = canonical.simulation.get_or_insert_with(|| Spanned::new(0..0, SimulationBlock::default()));
        *sim.get_mut() = SimulationBlock {
            seed,
            ..sim.get_ref().clone()
        };
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..6])
    }

    pub fn system(&self) -> Result<SystemSpec> {
        let blk = &self.system;
        let s = blk.get_ref();
        let d = s.lambdas.len();
        if d == 0 {
            return Err(self.at(blk, "system.lambdas is empty"));
        }
        let sigma = match &s.sigma {
            None => DMatrix::identity(d, d),
            Some(rows) => {
                let n = rows.first().map_or(0, Vec::len);
                if rows.len() != d || n == 0 || rows.iter().any(|r| r.len() != n) {
                    return Err(self.at(blk, format!("system.sigma must be {d} rows of equal, nonzero length")));
                }
                DMatrix::from_row_iterator(d, n, rows.iter().flatten().copied())
            }
        };
        let drift = match &s.drift {
            None => Drift::Linear,
            Some(DriftSpec::Name(k)) if k == "linear" => Drift::Linear,
            Some(DriftSpec::Table { kind, c: None }) if kind == "linear" => Drift::Linear,
            Some(DriftSpec::Table { kind, c: Some(c) }) if kind == "shear" => Drift::Shear { c: *c },
            Some(DriftSpec::Name(k)) if k == "shear" => {
                return Err(self.at(blk, "shear drift needs a coefficient: drift = { kind = \"shear\", c = ... }"))
            }
            Some(other) => return Err(self.at(blk, format!("unknown drift {other:?}"))),
        };
        match s.conjugacy.as_deref() {
            None | Some("exact") => {}
            Some(other) => {
                return Err(self.at(
                    blk,
                    format!("conjugacy {other:?} is not available; only the exact built-in chart is"),
                ))
            }
        }
        let xi0 = s.xi0.clone().unwrap_or_else(|| vec![0.0; d]);
        if xi0.len() != d {
            return Err(self.at(blk, format!("system.xi0 must have {d} entries")));
        }
        Ok(SystemSpec {
            lambdas: s.lambdas.clone(),
            drift,
            sigma,
            xi0,
        })
    }

    pub fn model(&self) -> Result<Model> {
        let system = self.system()?;
        let blk = &self.domain;
        let b = blk.get_ref();
        let domain = match b.kind.as_str() {
            "box" => Domain::Box {
                half_width: b
                    .half_width
                    .ok_or_else(|| self.at(blk, "box domain needs half_width"))?,
            },
            "ellipsoid" => Domain::Ellipsoid {
                semi_axes: b
                    .semi_axes
                    .clone()
                    .ok_or_else(|| self.at(blk, "ellipsoid domain needs semi_axes"))?,
            },
            other => return Err(self.at(blk, format!("unknown domain kind {other:?}"))),
        };
        let l = match (b.chart_half_width, &domain) {
            (Some(l), _) => l,
            (None, Domain::Box { half_width }) if system.is_linear() => *half_width,
            _ => return Err(self.at(blk, "domain.chart_half_width (L) is required unless the system is linear on a box")),
        };
        Model::new(system, domain, l).map_err(|e| self.at(blk, e))
    }

    pub fn targets(&self, model: &Model) -> Result<Vec<Target>> {
        let d = model.dim();
        self.targets
            .iter()
            .map(|blk| {
                let t = blk.get_ref();
                if t.axis == 0 || t.axis > d {
                    return Err(self.at(blk, format!("target axis {} is outside 1..={d}", t.axis)));
                }
                let axis = t.axis - 1;
                let bounds: Vec<Interval> = match (&t.bounds, t.kind.as_str(), model.domain()) {
                    (Some(b), _, _) => b.iter().map(IntervalSpec::interval).collect(),
                    (None, "face", Domain::Box { half_width }) => vec![Interval::closed(-half_width, *half_width); d - 1],
                    _ => return Err(self.at(blk, "target needs explicit bounds")),
                };
                if bounds.len() != d - 1 {
                    return Err(self.at(blk, format!("target needs {} bounds, got {}", d - 1, bounds.len())));
                }
                let rect = FaceRect::new(axis, t.side, bounds).map_err(|e| self.at(blk, e))?;
                let set = match t.kind.as_str() {
                    "face" => TargetSet::Face(rect),
                    "preimage" => TargetSet::Preimage(rect),
                    other => return Err(self.at(blk, format!("unknown target kind {other:?}"))),
                };
                crate::model::index_of_target(&set, model).map_err(|e| self.at(blk, e))?;
                Ok(Target {
                    name: t.name.clone(),
                    set,
                })
            })
            .collect()
    }

    pub fn predict_settings(&self) -> PredictSettings {
        let mut s = PredictSettings::default();
        if let Some(p) = &self.predict {
            if let Some(b) = p.backend {
                s.quadrature.backend = b;
            }
            if let Some(g) = p.grid_cells {
                s.grid_cells = g;
            }
        }
        s
    }

    pub fn analysis_settings(&self) -> AnalysisSettings {
        let mut a = AnalysisSettings::default();
        if let Some(s) = &self.stats {
            a.alpha = s.alpha.unwrap_or(a.alpha);
            a.exponent_band = s.exponent_band.unwrap_or(a.exponent_band);
        }
        a
    }

    pub fn output_dir(&self) -> Option<&Path> {
        self.output.as_ref().and_then(|o| o.dir.as_deref())
    }

    pub fn gzip(&self) -> bool {
        self.output.as_ref().is_some_and(|o| o.gzip)
    }

    /// Builds and validates the campaign plan.
    pub fn plan(&self, seed_override: Option<u64>) -> Result<ExperimentPlan> {
        let model = self.model()?;
        let targets = self.targets(&model)?;
        let (epsilons, budget) = match &self.ladder {
            Some(l) => (l.get_ref().epsilons.clone(), l.get_ref().budget.clone().unwrap_or_default()),
            None => (Vec::new(), BudgetRule::default()),
        };
        let sim = self.simulation.as_ref().map(|s| s.get_ref().clone()).unwrap_or_default();
        let plan = ExperimentPlan {
            name: self.name.clone(),
            model,
            targets,
            epsilons,
            budget,
            seed: self.seed(seed_override),
            dt: sim.dt,
            max_time: sim.horizon,
            predict: self.predict_settings(),
            config_hash: self.hash(seed_override),
        };
        if let Err(e) = plan.validate() {
            return Err(match &self.ladder {
                Some(l) => self.at(l, e),
                None => Error::Config(e.to_string()),
            });
        }
        if let Some(s) = &self.simulation {
            for k in 0..plan.epsilons.len() {
                plan.sim_config(k, 1)
                    .resolve(plan.model.system())
                    .map_err(|e| self.at(s, e))?;
            }
        }
        Ok(plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PLANAR: &str = r#"
name = "planar"

[system]
lambdas = [2.0, 1.0]

[domain]
kind = "box"
half_width = 1.0

[[targets]]
name = "top-bottom"
axis = 2

[[targets]]
name = "upper-left"
axis = 2
side = "plus"
bounds = [{ lo = -1.0, hi = 0.0, hi_closed = false }]

[ladder]
epsilons = [0.3, 0.2]
budget = { kind = "fixed", n = 100 }

[simulation]
seed = 4
"#;

    #[test]
    fn parses_and_builds_plan() {
        let cfg = CampaignConfig::parse(PLANAR).unwrap();
        let plan = cfg.plan(None).unwrap();
        assert_eq!(plan.seed, 4);
        assert_eq!(plan.targets.len(), 2);
        assert_eq!(plan.targets[0].set.rect().axis, 1);
        assert_eq!(plan.targets[1].set.rect().bounds[0], Interval {
            lo: -1.0,
            hi: 0.0,
            lo_closed: true,
            hi_closed: false
        });
        assert_eq!(plan.model.chart_half_width(), 1.0);
        assert_eq!(plan.budget, BudgetRule::Fixed { n: 100 });
    }

    #[test]
    fn hash_tracks_content_and_seed() {
        let cfg = CampaignConfig::parse(PLANAR).unwrap();
        let reformatted = CampaignConfig::parse(&PLANAR.replace("lambdas = [2.0, 1.0]", "lambdas = [ 2.0,1.0 ] # same")).unwrap();
        assert_eq!(cfg.hash(None), reformatted.hash(None));
        assert_eq!(cfg.hash(None), cfg.hash(Some(4)));
        assert_ne!(cfg.hash(None), cfg.hash(Some(5)));
        assert_eq!(cfg.hash(None).len(), 12);
    }

    #[test]
    fn syntax_errors_carry_lines() {
        let bad = PLANAR.replace("axis = 2\nside", "axis = \nside");
        let e = CampaignConfig::parse(&bad).unwrap_err().to_string();
        assert!(e.contains("line 17"), "{e}");
    }

    #[test]
    fn semantic_errors_carry_block_lines() {
        let bad = PLANAR.replace("epsilons = [0.3, 0.2]", "epsilons = [0.2, 0.3]");
        let e = CampaignConfig::parse(&bad).unwrap().plan(None).unwrap_err().to_string();
        assert!(e.contains("line 21") && e.contains("decreasing"), "{e}");
        let bad = PLANAR.replace("axis = 2\nside", "axis = 3\nside");
        let e = CampaignConfig::parse(&bad).unwrap().plan(None).unwrap_err().to_string();
        assert!(e.contains("line 15"), "{e}");
        let bad = PLANAR.replace("kind = \"box\"", "kind = \"ellipsoid\"");
        let e = CampaignConfig::parse(&bad).unwrap().plan(None).unwrap_err().to_string();
        assert!(e.contains("line 7"), "{e}");
    }

    #[test]
    fn shear_requires_chart_half_width() {
        let shear = PLANAR.replace("lambdas = [2.0, 1.0]", "lambdas = [2.0, 1.0]\ndrift = { kind = \"shear\", c = 0.5 }");
        assert!(CampaignConfig::parse(&shear).unwrap().plan(None).is_err());
        let with_l = shear.replace("half_width = 1.0", "half_width = 1.0\nchart_half_width = 0.25");
        let plan = CampaignConfig::parse(&with_l).unwrap().plan(None).unwrap();
        assert_eq!(plan.model.system().drift, Drift::Shear { c: 0.5 });
    }
}
