//! Closed-form limit objects: the exponent ladder `ρ`, the limit covariance
//! `C`, the weights `χ^i_±`, the limit measure `μ^i_L` and the predicted
//! conditional exit law.
//!
//! `χ^i_±` has two independent evaluators. [`ChiBackend::Adaptive`] integrates
//! the Gaussian density literally, nesting adaptive Gauss–Kronrod over the
//! trailing coordinates. [`ChiBackend::HalfRangeHermite`] conditions the
//! Gaussian on the leading coordinates and applies a Gauss rule whose weight
//! `v^p e^{-v²}` absorbs the power factor.
//!
//! Indices are zero-based: `index = 0` is the leading direction.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{self, FlowSettings};
use crate::model::{halton, index_of_target, Domain, FaceRect, Interval, Model, Target, TargetSet};
use crate::quadrature::{self, half_range_hermite};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentLadder {
    pub rho: Vec<f64>,
}

impl ExponentLadder {
    pub fn get(&self, index: usize) -> f64 {
        self.rho[index]
    }
}

/// `ρ_i = Σ_{j<i} (λ_j/λ_i - 1)`.
pub fn compute_rho(lambdas: &[f64]) -> Result<ExponentLadder> {
    check_lambdas(lambdas)?;
    let rho = (0..lambdas.len())
        .map(|i| lambdas[..i].iter().fold(0.0, |acc, l| acc + l / lambdas[i] - 1.0))
        .collect();
    Ok(ExponentLadder { rho })
}

/// The power `Σ_{j<i} λ_j/λ_i` carried by `χ̃^i` and by `L` in `μ^i_L`.
pub fn weight_exponent(lambdas: &[f64], index: usize) -> f64 {
    lambdas[..index].iter().fold(0.0, |acc, l| acc + l / lambdas[index])
}

fn check_lambdas(lambdas: &[f64]) -> Result<()> {
    if lambdas.is_empty() || !lambdas.iter().all(|l| l.is_finite() && *l > 0.0) {
        return Err(Error::invalid("eigenvalues must be positive and finite"));
    }
    if !lambdas.windows(2).all(|w| w[0] > w[1]) {
        return Err(Error::invalid("eigenvalues not strictly decreasing"));
    }
    Ok(())
}

/// `C^{jk} = Σ_l σ^j_l σ^k_l / (λ_j + λ_k)` with its Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitCovariance {
    matrix: DMatrix<f64>,
    lower: DMatrix<f64>,
    inverse: DMatrix<f64>,
}

impl LimitCovariance {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Lower-triangular `L` with `C = L Lᵀ`.
    pub fn cholesky_lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ln_det(&self) -> f64 {
        2.0 * (0..self.dim()).map(|k| self.lower[(k, k)].ln()).sum::<f64>()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim())
            .map(|r| (0..self.dim()).map(|c| self.matrix[(r, c)]).collect())
            .collect()
    }

    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() || (&matrix - matrix.transpose()).abs().max() > 1e-14 * matrix.abs().max() {
            return Err(Error::invalid("covariance must be square and symmetric"));
        }
        let chol = matrix
            .clone()
            .cholesky()
            .ok_or_else(|| Error::invalid("limit covariance is numerically singular (σ(0) rank deficient)"))?;
        let lower = chol.l();
        let d = matrix.nrows();
        let min_pivot = (0..d).map(|k| lower[(k, k)]).fold(f64::INFINITY, f64::min);
        let max_pivot = (0..d).map(|k| lower[(k, k)]).fold(0.0, f64::max);
        if !(min_pivot > 1e-7 * max_pivot) {
            return Err(Error::invalid("limit covariance is numerically singular (σ(0) rank deficient)"));
        }
        let inverse = chol.inverse();
        Ok(LimitCovariance { matrix, lower, inverse })
    }
}

pub fn limit_covariance(sigma0: &DMatrix<f64>, lambdas: &[f64]) -> Result<LimitCovariance> {
    let d = lambdas.len();
    if sigma0.nrows() != d {
        return Err(Error::invalid(format!("σ(0) has {} rows, expected {d}", sigma0.nrows())));
    }
    let a = sigma0 * sigma0.transpose();
    let m = DMatrix::from_fn(d, d, |j, k| a[(j, k)] / (lambdas[j] + lambdas[k]));
    LimitCovariance::from_matrix(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChiBackend {
    #[default]
    Adaptive,
    HalfRangeHermite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadratureSettings {
    pub backend: ChiBackend,
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Inner Gaussian integrals are cut at this many conditional standard deviations.
    pub truncation_sds: f64,
    pub hermite_nodes: usize,
    pub max_pieces: usize,
}

impl Default for QuadratureSettings {
    fn default() -> Self {
        QuadratureSettings {
            backend: ChiBackend::Adaptive,
            abs_tol: 1e-14,
            rel_tol: 1e-11,
            truncation_sds: 8.5,
            hermite_nodes: 64,
            max_pieces: 4000,
        }
    }
}

impl QuadratureSettings {
    pub fn with_backend(backend: ChiBackend) -> Self {
        QuadratureSettings {
            backend,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiPair {
    pub plus: f64,
    pub minus: f64,
    /// Estimated absolute quadrature error (shared bound for both sides).
    pub error: f64,
}

impl ChiPair {
    pub fn side(&self, positive: bool) -> f64 {
        if positive {
            self.plus
        } else {
            self.minus
        }
    }
}

/// Evaluator of `χ^i_±(y)` for a fixed index and covariance.
#[derive(Debug, Clone)]
pub struct ChiEvaluator {
    index: usize,
    power: f64,
    cov: LimitCovariance,
    settings: QuadratureSettings,
}

struct Conditional {
    ln_density: f64,
    mean: f64,
    sd: f64,
}

impl ChiEvaluator {
    pub fn new(index: usize, cov: LimitCovariance, lambdas: &[f64], settings: QuadratureSettings) -> Result<Self> {
        check_lambdas(lambdas)?;
        if index >= lambdas.len() || cov.dim() != lambdas.len() {
            return Err(Error::invalid("index or covariance dimension out of range"));
        }
        if !(settings.abs_tol >= 0.0 && settings.rel_tol > 0.0 && settings.truncation_sds > 0.0) {
            return Err(Error::invalid("quadrature tolerances must be finite and positive"));
        }
        Ok(ChiEvaluator {
            index,
            power: weight_exponent(lambdas, index),
            cov,
            settings,
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn power(&self) -> f64 {
        self.power
    }

    /// Density of `x^{<i}` at `-y^{<i}` and the conditional law of `x^i`.
    fn conditional(&self, y: &[f64]) -> Conditional {
        let l = &self.cov.lower;
        let i = self.index;
        let mut z = vec![0.0; i];
        let mut ln_density = -0.5 * i as f64 * (2.0 * PI).ln();
        for k in 0..i {
            let acc: f64 = (0..k).map(|m| l[(k, m)] * z[m]).sum();
            z[k] = (-y[k] - acc) / l[(k, k)];
            ln_density -= l[(k, k)].ln() + 0.5 * z[k] * z[k];
        }
        let mean = (0..i).map(|m| l[(i, m)] * z[m]).sum();
        Conditional {
            ln_density,
            mean,
            sd: l[(i, i)],
        }
    }

    pub fn chi_pm(&self, y: &[f64]) -> Result<ChiPair> {
        if y.len() != self.cov.dim() || !y.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("χ argument must be a finite vector of dimension d"));
        }
        match self.settings.backend {
            ChiBackend::Adaptive => self.chi_adaptive(y),
            ChiBackend::HalfRangeHermite => self.chi_hermite(y),
        }
    }

    fn chi_hermite(&self, y: &[f64]) -> Result<ChiPair> {
        let i = self.index;
        let cond = self.conditional(y);
        let root2s = cond.sd * 2f64.sqrt();
        let c = (cond.mean + y[i]) / root2s;
        let pre = (cond.ln_density + self.power * root2s.ln()).exp() / PI.sqrt();
        let n = self.settings.hermite_nodes.max(8);
        let coarse_n = (3 * n) / 4;
        let eval = |rule: &quadrature::Rule, c: f64| rule.apply(|v| (2.0 * c * v - c * c).exp());
        let fine = half_range_hermite(n, self.power);
        let coarse = half_range_hermite(coarse_n, self.power);
        let (p_f, m_f) = (eval(&fine, c), eval(&fine, -c));
        let (p_c, m_c) = (eval(&coarse, c), eval(&coarse, -c));
        let plus = pre * p_f;
        let minus = pre * m_f;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Quadrature(format!("half-range Hermite overflow at y = {y:?}")));
        }
        Ok(ChiPair {
            plus,
            minus,
            error: pre * (p_f - p_c).abs().max((m_f - m_c).abs()),
        })
    }

    /// `χ̃^i(x^i, y)` by nested adaptive integration over `x^{>i}`.
    pub fn chi_tilde(&self, xi: f64, y: &[f64]) -> Result<f64> {
        let d = self.cov.dim();
        let i = self.index;
        let mut x = vec![0.0; d];
        for k in 0..i {
            x[k] = -y[k];
        }
        x[i] = xi;
        let norm = (-0.5 * d as f64 * (2.0 * PI).ln() - 0.5 * self.cov.ln_det()).exp();
        let status = std::cell::Cell::new(true);
        let inner = self.inner(&mut x, i + 1, &status);
        if !status.get() {
            return Err(Error::Quadrature("inner Gaussian integral did not converge".into()));
        }
        Ok(norm * (xi + y[i]).abs().powf(self.power) * inner)
    }

    /// `∫ exp(-½ xᵀC⁻¹x) dx^{≥m}` with `x^{<m}` fixed.
    fn inner(&self, x: &mut [f64], m: usize, ok: &std::cell::Cell<bool>) -> f64 {
        let d = self.cov.dim();
        if m == d {
            let q = &self.cov.inverse;
            let mut s = 0.0;
            for r in 0..d {
                for c in 0..d {
                    s += x[r] * q[(r, c)] * x[c];
                }
            }
            return (-0.5 * s).exp();
        }
        // Window from the conditional law of x^m given x^{<m}.
        let l = &self.cov.lower;
        let mut z = vec![0.0; m];
        for k in 0..m {
            let acc: f64 = (0..k).map(|j| l[(k, j)] * z[j]).sum();
            z[k] = (x[k] - acc) / l[(k, k)];
        }
        let mean: f64 = (0..m).map(|j| l[(m, j)] * z[j]).sum();
        let sd = l[(m, m)];
        let r = self.settings.truncation_sds;
        // Upper bound of the remaining integral, for a scale-aware absolute tolerance.
        let bound = (-0.5 * z.iter().map(|v| v * v).sum::<f64>()).exp()
            * (m..d).map(|k| l[(k, k)] * (2.0 * PI).sqrt()).product::<f64>();
        let mut buf = x.to_vec();
        let est = quadrature::integrate(
            |t| {
                buf[m] = t;
                self.inner(&mut buf, m + 1, ok)
            },
            mean - r * sd,
            mean + r * sd,
            self.settings.abs_tol * bound,
            self.settings.rel_tol * 0.1,
            self.settings.max_pieces,
        );
        match est {
            Ok(e) => {
                if !e.converged {
                    ok.set(false);
                }
                e.value
            }
            Err(_) => {
                ok.set(false);
                f64::NAN
            }
        }
    }

    fn chi_adaptive(&self, y: &[f64]) -> Result<ChiPair> {
        let d = self.cov.dim();
        let i = self.index;
        let cond = self.conditional(y);
        let norm = (-0.5 * d as f64 * (2.0 * PI).ln() - 0.5 * self.cov.ln_det()).exp();
        let ok = std::cell::Cell::new(true);
        let mut x = vec![0.0; d];
        for k in 0..i {
            x[k] = -y[k];
        }
        let kink = -y[i];
        // χ is of the order of the marginal density of x^{<i} times a moment.
        let scale = cond.ln_density.exp() * cond.sd.powf(self.power).max(1e-300);
        let side = |direction: f64| -> Result<quadrature::Estimate> {
            let mut buf = x.clone();
            quadrature::integrate_half_line(
                |xi| {
                    buf[i] = xi;
                    let w = (xi - kink).abs().powf(self.power);
                    if w == 0.0 {
                        return 0.0;
                    }
                    norm * w * self.inner(&mut buf, i + 1, &ok)
                },
                kink,
                direction,
                cond.sd,
                self.settings.abs_tol * scale,
                self.settings.rel_tol,
                self.settings.max_pieces,
            )
        };
        let plus = side(1.0)?;
        let minus = side(-1.0)?;
        if !ok.get() || !plus.converged || !minus.converged {
            return Err(Error::Quadrature(format!(
                "adaptive χ quadrature did not converge at y = {y:?} (budget {} pieces)",
                self.settings.max_pieces
            )));
        }
        Ok(ChiPair {
            plus: plus.value,
            minus: minus.value,
            error: plus.error.max(minus.error),
        })
    }
}

/// `χ^i_±(y)` with a one-off evaluator.
pub fn chi_pm(
    y: &[f64],
    index: usize,
    cov: &LimitCovariance,
    lambdas: &[f64],
    settings: &QuadratureSettings,
) -> Result<ChiPair> {
    ChiEvaluator::new(index, cov.clone(), lambdas, settings.clone())?.chi_pm(y)
}

/// `c_A = L^{-p} ∏_{j<i}(b^j - a^j) ∏_{j>i} 1{0 ∈ (a^j, b^j)}` with `i` the face axis.
pub fn c_a(rect: &FaceRect, lambdas: &[f64], l: f64) -> f64 {
    let i = rect.axis;
    let p = weight_exponent(lambdas, i);
    let lead: f64 = rect.bounds[..i].iter().map(Interval::length).product();
    let trail = rect.bounds[i + 1..].iter().all(|iv| iv.interior_contains(0.0));
    if trail {
        l.powf(-p) * lead
    } else {
        0.0
    }
}

/// `μ` of a rectangle on the faces of a box of half-width `h` for the linear
/// flow: `Σ_± χ^i_± c_A` over the admitted sides, with `i` the face axis.
pub fn mu_box_case(rect: &FaceRect, lambdas: &[f64], h: f64, chi: &ChiPair) -> f64 {
    let ca = c_a(rect, lambdas, h);
    [true, false]
        .iter()
        .filter(|s| rect.side.admits(**s))
        .map(|s| chi.side(*s) * ca)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasureRoute {
    /// Closed form whenever the pull-back is explicit, flow otherwise.
    #[default]
    Auto,
    /// Always pull back through the numerically integrated flow.
    Flow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictSettings {
    pub quadrature: QuadratureSettings,
    pub flow: FlowSettings,
    pub route: MeasureRoute,
    /// Grid cells per chart coordinate when locating pull-back edges.
    pub grid_cells: usize,
}

impl Default for PredictSettings {
    fn default() -> Self {
        PredictSettings {
            quadrature: QuadratureSettings::default(),
            flow: FlowSettings::default(),
            route: MeasureRoute::Auto,
            grid_cells: 256,
        }
    }
}

/// The limit measure `μ^i_L` restricted to one index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuMeasure {
    pub index: usize,
    pub chart_half_width: f64,
    pub power: f64,
    pub chi: ChiPair,
}

impl MuMeasure {
    pub fn new(model: &Model, index: usize, quad: &QuadratureSettings) -> Result<Self> {
        let sys = model.system();
        let cov = limit_covariance(sys.sigma0(), &sys.lambdas)?;
        let chi = ChiEvaluator::new(index, cov, &sys.lambdas, quad.clone())?.chi_pm(&sys.xi0)?;
        Ok(MuMeasure {
            index,
            chart_half_width: model.chart_half_width(),
            power: weight_exponent(&sys.lambdas, index),
            chi,
        })
    }

    /// `L^{-p} Σ_± χ_± H_±`, given the Hausdorff measures of the pull-back.
    pub fn evaluate(&self, h_plus: f64, h_minus: f64) -> f64 {
        self.chart_half_width.powf(-self.power) * (self.chi.plus * h_plus + self.chi.minus * h_minus)
    }
}

/// Pull-back of a target onto `F^i_{L±} ∩ Λ^i` for one side.
#[derive(Debug, Clone, PartialEq)]
struct SidePullback {
    measure: f64,
    /// The pull-back as a rectangle in chart coordinates `y^{<i}`, when it is one.
    rect: Option<Vec<Interval>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasureMethod {
    ClosedForm,
    Flow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuValue {
    pub index: usize,
    pub rho: f64,
    pub value: f64,
    pub chi: ChiPair,
    /// `H^{i-1}` of the pull-back on the `+` and `-` faces of `B_L`.
    pub hausdorff: [f64; 2],
    pub method: MeasureMethod,
}

fn box_half_width(model: &Model) -> Option<f64> {
    match model.domain() {
        Domain::Box { half_width } => Some(*half_width),
        Domain::Ellipsoid { .. } => None,
    }
}

fn pullback(
    target: &TargetSet,
    model: &Model,
    index: usize,
    settings: &PredictSettings,
) -> Result<([SidePullback; 2], MeasureMethod)> {
    let l = model.chart_half_width();
    let lambdas = &model.system().lambdas;
    let rect = target.rect();
    let trailing_zero = rect.bounds[index + 1..].iter().all(|iv| iv.contains(0.0));
    let empty = || SidePullback {
        measure: 0.0,
        rect: Some(vec![]),
    };
    match target {
        TargetSet::Preimage(r) => {
            if r.axis != index {
                return Err(Error::invalid(format!(
                    "preimage rectangle on face {} has index {}: ζ_L(A) meets a lower face, choose a smaller L",
                    r.axis + 1,
                    index + 1
                )));
            }
            let make = |positive: bool| {
                if !r.side.admits(positive) || !trailing_zero {
                    return empty();
                }
                let lead = r.bounds[..index].to_vec();
                SidePullback {
                    measure: lead.iter().map(Interval::length).product(),
                    rect: Some(lead),
                }
            };
            Ok(([make(true), make(false)], MeasureMethod::ClosedForm))
        }
        TargetSet::Face(r) => {
            let h = box_half_width(model).ok_or_else(|| Error::invalid("face targets need a box domain"))?;
            if settings.route == MeasureRoute::Auto && model.is_linear_box() && r.axis == index {
                let make = |positive: bool| {
                    if !r.side.admits(positive) || !trailing_zero {
                        return empty();
                    }
                    // y^j = x^j (L/h)^{λ_j/λ_i} on the face x^i = ±h.
                    let lead: Vec<Interval> = (0..index)
                        .map(|j| {
                            let s = (l / h).powf(lambdas[j] / lambdas[index]);
                            let iv = r.bounds[j];
                            Interval { lo: iv.lo * s, hi: iv.hi * s, ..iv }
                        })
                        .collect();
                    SidePullback {
                        measure: lead.iter().map(Interval::length).product(),
                        rect: Some(lead),
                    }
                };
                return Ok(([make(true), make(false)], MeasureMethod::ClosedForm));
            }
            check_chart_fits(r, model, index, h, settings)?;
            let make = |positive: bool| -> Result<SidePullback> {
                let sign = if positive { 1.0 } else { -1.0 };
                flow_pullback(r, model, index, sign, h, settings)
            };
            Ok(([make(true)?, make(false)?], MeasureMethod::Flow))
        }
    }
}

/// Rejects chart boxes for which `ζ_L(A)` reaches a face `F^j_L` with `j < i`.
fn check_chart_fits(r: &FaceRect, model: &Model, index: usize, h: f64, settings: &PredictSettings) -> Result<()> {
    if index == 0 {
        return Ok(());
    }
    let l = model.chart_half_width();
    let d = r.dim();
    let others: Vec<usize> = (0..d).filter(|j| *j != r.axis).collect();
    let mut points = Vec::new();
    for positive in [true, false] {
        if !r.side.admits(positive) {
            continue;
        }
        let base = |u: &[f64]| {
            let mut p = vec![0.0; d];
            p[r.axis] = if positive { h } else { -h };
            for (k, j) in others.iter().enumerate() {
                let iv = r.bounds[*j];
                p[*j] = iv.lo + u[k] * (iv.hi - iv.lo);
            }
            p
        };
        for mask in 0..(1usize << others.len()) {
            let u: Vec<f64> = (0..others.len()).map(|k| ((mask >> k) & 1) as f64).collect();
            points.push(base(&u));
        }
        for k in 1..=48 {
            points.push(base(&halton(k, others.len())));
        }
    }
    for p in points {
        let y = flow::zeta_auto(&p, model, &settings.flow)?;
        if let Some(j) = (0..index).find(|j| y[*j].abs() >= l * (1.0 - 1e-9)) {
            return Err(Error::invalid(format!(
                "chart half-width L = {l} is too large for this target: ζ_L(A) reaches face {} of B_L; choose a smaller L",
                j + 1
            )));
        }
    }
    Ok(())
}

/// Measure of `{u ∈ [-L, L]^i : ψ_L(f⁻¹(u, ±L, 0)) ∈ A}` through the flow.
fn flow_pullback(
    r: &FaceRect,
    model: &Model,
    index: usize,
    sign: f64,
    h: f64,
    settings: &PredictSettings,
) -> Result<SidePullback> {
    let l = model.chart_half_width();
    let d = model.dim();
    let sys = model.system();
    let member = |u: &[f64]| -> Result<bool> {
        let mut q = vec![0.0; d];
        q[..index].copy_from_slice(u);
        q[index] = sign * l;
        let p = flow::psi_auto(&sys.chart_inv(&q), model, &settings.flow)?;
        Ok(r.contains(&p, h, model.domain().face_of(&p)))
    };
    if index == 0 {
        let hit = member(&[])?;
        return Ok(SidePullback {
            measure: if hit { 1.0 } else { 0.0 },
            rect: Some(vec![]),
        });
    }
    let failure = std::cell::RefCell::new(None);
    let member_ok = |u: &[f64]| match member(u) {
        Ok(b) => b,
        Err(e) => {
            failure.borrow_mut().get_or_insert(e);
            false
        }
    };
    let (measure, rect) = if index == 1 {
        let (m, pieces) = measure_1d(|t| member_ok(&[t]), -l, l, settings.grid_cells);
        let rect = match pieces.as_slice() {
            [] => Some(vec![Interval::closed(0.0, 0.0)]),
            [(a, b)] => Some(vec![Interval::closed(*a, *b)]),
            _ => None,
        };
        (m, rect)
    } else {
        (nested_measure(&member_ok, &mut Vec::new(), index, l, settings)?, None)
    };
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    Ok(SidePullback { measure, rect })
}

fn nested_measure<F: Fn(&[f64]) -> bool>(
    member: &F,
    prefix: &mut [f64],
    index: usize,
    l: f64,
    settings: &PredictSettings,
) -> Result<f64> {
    if prefix.len() + 1 == index {
        let (m, _) = measure_1d(
            |t| {
                let mut u = prefix.to_vec();
                u.push(t);
                member(&u)
            },
            -l,
            l,
            settings.grid_cells,
        );
        return Ok(m);
    }
    let remaining = (index - prefix.len()) as i32;
    let tol = 1e-9 * (2.0 * l).powi(remaining);
    let mut inner_err = None;
    let est = quadrature::integrate(
        |t| {
            let mut p = prefix.to_vec();
            p.push(t);
            match nested_measure(member, &mut p, index, l, settings) {
                Ok(v) => v,
                Err(e) => {
                    inner_err.get_or_insert(e);
                    0.0
                }
            }
        },
        -l,
        l,
        tol,
        1e-8,
        200,
    )?;
    if let Some(e) = inner_err {
        return Err(e);
    }
    Ok(est.value)
}

/// Lebesgue measure of `{t ∈ [lo, hi] : f(t)}` for a finite union of
/// intervals, with edges located by bisection. Returns the measure and the
/// component intervals.
pub fn measure_1d<F: Fn(f64) -> bool>(f: F, lo: f64, hi: f64, cells: usize) -> (f64, Vec<(f64, f64)>) {
    let cells = cells.max(2);
    let width = hi - lo;
    let at = |k: usize| lo + width * k as f64 / cells as f64;
    let tol = 1e-15 * width.abs().max(1e-300);
    let edge = |mut a: f64, mut b: f64, fa: bool| {
        while b - a > tol {
            let m = 0.5 * (a + b);
            if m <= a || m >= b {
                break;
            }
            if f(m) == fa {
                a = m;
            } else {
                b = m;
            }
        }
        0.5 * (a + b)
    };
    let mut pieces = Vec::new();
    let mut prev = f(lo);
    let mut start = if prev { Some(lo) } else { None };
    for k in 1..=cells {
        let (a, b) = (at(k - 1), at(k));
        let cur = f(b);
        if cur != prev {
            let e = edge(a, b, prev);
            if prev {
                pieces.push((start.take().expect("open piece"), e));
            } else {
                start = Some(e);
            }
        }
        prev = cur;
    }
    if let Some(s) = start {
        pieces.push((s, hi));
    }
    let total = pieces.iter().map(|(a, b)| b - a).sum();
    (total, pieces)
}

/// `μ^i_L(A)` with `i = i(A)`.
pub fn limit_measure(target: &TargetSet, model: &Model, settings: &PredictSettings) -> Result<MuValue> {
    let index = index_of_target(target, model)?;
    let mu = MuMeasure::new(model, index, &settings.quadrature)?;
    let ([plus, minus], method) = pullback(target, model, index, settings)?;
    Ok(MuValue {
        index,
        rho: compute_rho(&model.system().lambdas)?.get(index),
        value: mu.evaluate(plus.measure, minus.measure),
        chi: mu.chi,
        hausdorff: [plus.measure, minus.measure],
        method,
    })
}

/// `μ` of a rectangle on a box face (the face-rectangle form of [`limit_measure`]).
pub fn mu_of_rectangle(rect: &FaceRect, model: &Model, settings: &PredictSettings) -> Result<f64> {
    Ok(limit_measure(&TargetSet::Face(rect.clone()), model, settings)?.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LawCoordinates {
    /// Exit locations as they are, on the face `x^i = ±h` of the domain box.
    Domain,
    /// Exit locations mapped to `∂B_L` by `ζ_L`.
    Chart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LawComponent {
    pub positive: bool,
    pub weight: f64,
    /// Support in the coordinates `j < i`; the law is uniform on it.
    pub region: Vec<Interval>,
}

/// The predicted limit of the exit law conditioned on the target.
///
/// Uniform on a rectangle in the coordinates `j < i` of each face, with face
/// weights proportional to `χ^i_± · H_±`, and all coordinates `j > i` equal to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalLaw {
    pub index: usize,
    pub coordinates: LawCoordinates,
    pub components: Vec<LawComponent>,
}

impl ConditionalLaw {
    /// Maps an exit location into the law's coordinates and reports its face sign.
    pub fn map_sample(&self, location: &[f64], model: &Model, flow: &FlowSettings) -> Result<(Vec<f64>, bool)> {
        let point = match self.coordinates {
            LawCoordinates::Domain => location.to_vec(),
            LawCoordinates::Chart => flow::zeta_auto(location, model, flow)?,
        };
        let positive = point[self.index] > 0.0;
        Ok((point, positive))
    }

    pub fn weight(&self, positive: bool) -> f64 {
        self.components
            .iter()
            .filter(|c| c.positive == positive)
            .map(|c| c.weight)
            .sum()
    }

    pub fn component(&self, positive: bool) -> Option<&LawComponent> {
        self.components.iter().find(|c| c.positive == positive)
    }
}

pub fn predicted_conditional_law(
    target: &TargetSet,
    model: &Model,
    settings: &PredictSettings,
) -> Result<ConditionalLaw> {
    let index = index_of_target(target, model)?;
    let mu = MuMeasure::new(model, index, &settings.quadrature)?;
    let (sides, method) = pullback(target, model, index, settings)?;
    let total = mu.evaluate(sides[0].measure, sides[1].measure);
    if !(total > 0.0) {
        return Err(Error::invalid("μ(A) = 0: conditioning on a null limit event"));
    }
    let domain_coords = matches!(target, TargetSet::Face(r) if r.axis == index) && method == MeasureMethod::ClosedForm;
    let mut components = Vec::new();
    for (side, positive) in sides.iter().zip([true, false]) {
        if side.measure <= 0.0 {
            continue;
        }
        let weight = mu.evaluate(
            if positive { side.measure } else { 0.0 },
            if positive { 0.0 } else { side.measure },
        ) / total;
        let region = if domain_coords {
            target.rect().bounds[..index].to_vec()
        } else {
            side.rect.clone().ok_or_else(|| {
                Error::invalid("the pulled-back target is not a single rectangle; no closed-form conditional law")
            })?
        };
        components.push(LawComponent {
            positive,
            weight,
            region,
        });
    }
    Ok(ConditionalLaw {
        index,
        coordinates: if domain_coords {
            LawCoordinates::Domain
        } else {
            LawCoordinates::Chart
        },
        components,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetPrediction {
    pub name: String,
    /// One-based index `i(A)`.
    pub index: usize,
    pub rho: f64,
    pub mu: f64,
    pub chi_plus: f64,
    pub chi_minus: f64,
    pub chi_error: f64,
    pub hausdorff: [f64; 2],
    pub method: MeasureMethod,
    /// Box-case constant, reported for face rectangles on a box domain whose
    /// axis is the index.
    pub c_a: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub lambdas: Vec<f64>,
    pub rho: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub chart_half_width: f64,
    /// `χ^i_±(ξ₀)` for every index `i`, in one-based order.
    pub chi_at_xi0: Vec<ChiPair>,
    pub targets: Vec<TargetPrediction>,
}

pub fn predict_all(model: &Model, targets: &[Target], settings: &PredictSettings) -> Result<Prediction> {
    let sys = model.system();
    let ladder = compute_rho(&sys.lambdas)?;
    let cov = limit_covariance(sys.sigma0(), &sys.lambdas)?;
    let chi_at_xi0 = (0..sys.dim())
        .map(|i| ChiEvaluator::new(i, cov.clone(), &sys.lambdas, settings.quadrature.clone())?.chi_pm(&sys.xi0))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for t in targets {
        let mu = limit_measure(&t.set, model, settings)?;
        let c = match (&t.set, box_half_width(model)) {
            (TargetSet::Face(r), Some(h)) if r.axis == mu.index => Some(c_a(r, &sys.lambdas, h)),
            _ => None,
        };
        out.push(TargetPrediction {
            name: t.name.clone(),
            index: mu.index + 1,
            rho: mu.rho,
            mu: mu.value,
            chi_plus: mu.chi.plus,
            chi_minus: mu.chi.minus,
            chi_error: mu.chi.error,
            hausdorff: mu.hausdorff,
            method: mu.method,
            c_a: c,
        });
    }
    Ok(Prediction {
        lambdas: sys.lambdas.clone(),
        rho: ladder.rho,
        covariance: cov.to_rows(),
        chart_half_width: model.chart_half_width(),
        chi_at_xi0,
        targets: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Drift, FaceSide, SystemSpec};

    const CHI2: f64 = 0.199_471_140_200_716_35; // (1/4)√(2/π)

    fn cov21() -> LimitCovariance {
        limit_covariance(&DMatrix::identity(2, 2), &[2.0, 1.0]).unwrap()
    }

    fn shear(l: f64) -> Model {
        let spec = SystemSpec {
            lambdas: vec![2.0, 1.0],
            drift: Drift::Shear { c: 0.5 },
            sigma: DMatrix::identity(2, 2),
            xi0: vec![0.0, 0.0],
        };
        Model::new(spec, Domain::Box { half_width: 1.0 }, l).unwrap()
    }

    #[test]
    fn rho_examples() {
        assert_eq!(compute_rho(&[2.0, 1.0]).unwrap().rho, vec![0.0, 1.0]);
        let r = compute_rho(&[1.2, 1.0, 0.8]).unwrap().rho;
        assert_eq!(r[0], 0.0);
        assert!((r[1] - 0.2).abs() < 1e-15 && (r[2] - 0.75).abs() < 1e-15);
        assert!(compute_rho(&[1.0, 1.0]).is_err());
    }

    #[test]
    fn covariance_examples() {
        let c = cov21();
        assert_eq!(c.to_rows(), vec![vec![0.25, 0.0], vec![0.0, 0.5]]);
        let mut padded = DMatrix::zeros(2, 4);
        padded[(0, 0)] = 1.0;
        padded[(1, 1)] = 1.0;
        assert_eq!(limit_covariance(&padded, &[2.0, 1.0]).unwrap().to_rows(), c.to_rows());
        let zero_row = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, 0.0]);
        assert!(limit_covariance(&zero_row, &[2.0, 1.0]).is_err());
    }

    #[test]
    fn chi_golden_value_both_backends() {
        for backend in [ChiBackend::Adaptive, ChiBackend::HalfRangeHermite] {
            let chi = chi_pm(&[0.0, 0.0], 1, &cov21(), &[2.0, 1.0], &QuadratureSettings::with_backend(backend)).unwrap();
            assert!((chi.plus - CHI2).abs() < 1e-10, "{backend:?}: {chi:?}");
            assert!((chi.minus - CHI2).abs() < 1e-10, "{backend:?}: {chi:?}");
        }
    }

    #[test]
    fn chi_tilde_matches_closed_form() {
        // φ_C(0, x) |x|² with C = diag(1/4, 1/2): (√2/π) e^{-x²} x².
        let ev = ChiEvaluator::new(1, cov21(), &[2.0, 1.0], QuadratureSettings::default()).unwrap();
        for x in [-1.3f64, 0.0, 0.4, 2.0] {
            let expect = 2f64.sqrt() / PI * (-x * x).exp() * x * x;
            assert!((ev.chi_tilde(x, &[0.0, 0.0]).unwrap() - expect).abs() < 1e-13);
        }
    }

    #[test]
    fn chi_tails_decrease() {
        let ev = ChiEvaluator::new(1, cov21(), &[2.0, 1.0], QuadratureSettings::default()).unwrap();
        let mut last = f64::INFINITY;
        for k in 0..10 {
            let y = -0.5 * k as f64;
            let c = ev.chi_pm(&[0.0, y]).unwrap();
            assert!(c.plus < last);
            last = c.plus;
        }
        assert!(last < 1e-8);
    }

    #[test]
    fn index_one_weights_sum_to_one() {
        let sigma = DMatrix::from_row_slice(2, 3, &[1.0, 0.3, -0.2, 0.4, 0.8, 0.5]);
        let cov = limit_covariance(&sigma, &[1.5, 0.5]).unwrap();
        for backend in [ChiBackend::Adaptive, ChiBackend::HalfRangeHermite] {
            let s = QuadratureSettings::with_backend(backend);
            for y in [[0.0, 0.0], [0.7, -1.0], [-1.4, 3.0]] {
                let c = chi_pm(&y, 0, &cov, &[1.5, 0.5], &s).unwrap();
                assert!((c.plus + c.minus - 1.0).abs() < 1e-10, "{backend:?} {y:?}: {c:?}");
            }
        }
    }

    #[test]
    fn backends_agree_in_three_dimensions() {
        let sigma = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.1, 0.9, 0.3, -0.2, 0.0, 1.1]);
        let lam = [1.2, 1.0, 0.8];
        let cov = limit_covariance(&sigma, &lam).unwrap();
        for i in 0..3 {
            for y in [[0.0, 0.0, 0.0], [0.3, -0.2, 0.5], [-0.4, 0.6, -0.1]] {
                let a = chi_pm(&y, i, &cov, &lam, &QuadratureSettings::default()).unwrap();
                let b = chi_pm(&y, i, &cov, &lam, &QuadratureSettings::with_backend(ChiBackend::HalfRangeHermite)).unwrap();
                assert!((a.plus - b.plus).abs() <= 1e-8 * a.plus, "i={i} {y:?}: {a:?} {b:?}");
                assert!((a.minus - b.minus).abs() <= 1e-8 * a.minus, "i={i} {y:?}: {a:?} {b:?}");
            }
        }
    }

    #[test]
    fn c_a_examples() {
        let r = FaceRect::new(0, FaceSide::Plus, vec![Interval::closed(-0.5, 0.5)]).unwrap();
        assert_eq!(c_a(&r, &[2.0, 1.0], 1.0), 1.0);
        let r = FaceRect::new(1, FaceSide::Plus, vec![Interval::closed(-0.3, 0.7)]).unwrap();
        assert!((c_a(&r, &[2.0, 1.0], 1.0) - 1.0).abs() < 1e-15);
        let r = FaceRect::new(1, FaceSide::Plus, vec![Interval::closed(-0.3, 0.7), Interval::closed(0.1, 0.2)]).unwrap();
        assert_eq!(c_a(&r, &[2.0, 1.0, 0.5], 1.0), 0.0);
    }

    #[test]
    fn mu_of_top_and_bottom_faces() {
        let m = Model::new(SystemSpec::linear_identity(&[2.0, 1.0]), Domain::Box { half_width: 1.0 }, 0.5).unwrap();
        let faces = FaceRect::full_face(2, 1, FaceSide::Both, 1.0);
        let mu = mu_of_rectangle(&faces, &m, &PredictSettings::default()).unwrap();
        assert!((mu - 4.0 * CHI2).abs() < 1e-9 && (mu - (2.0 / PI).sqrt()).abs() < 1e-9, "{mu}");
        let v = limit_measure(&TargetSet::Face(faces), &m, &PredictSettings {
            route: MeasureRoute::Flow,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(v.method, MeasureMethod::Flow);
        assert!((v.value - mu).abs() < 1e-8, "{} vs {mu}", v.value);
    }

    #[test]
    fn mu_is_zero_off_the_invariant_subspace() {
        let m = Model::new(SystemSpec::linear_identity(&[2.0, 1.0, 0.5]), Domain::Box { half_width: 1.0 }, 0.5).unwrap();
        let r = FaceRect::new(1, FaceSide::Both, vec![Interval::closed(-0.5, 0.5), Interval::closed(0.1, 0.2)]).unwrap();
        // Index is 3 here; the face-2 weight never sees it.
        assert_eq!(index_of_target(&TargetSet::Face(r.clone()), &m).unwrap(), 2);
        let chi = MuMeasure::new(&m, 1, &QuadratureSettings::default()).unwrap().chi;
        assert_eq!(mu_box_case(&r, &[2.0, 1.0, 0.5], 1.0, &chi), 0.0);
    }

    #[test]
    fn shear_measure_matches_derived_value() {
        // Top and bottom faces pull back to |u| ≤ L²/(1 ∓ κ)², κ = 1/6.
        let expect = 2.0 * CHI2 * ((6.0f64 / 5.0).powi(2) + (6.0f64 / 7.0).powi(2));
        let faces = TargetSet::Face(FaceRect::full_face(2, 1, FaceSide::Both, 1.0));
        for l in [0.1, 0.25] {
            let v = limit_measure(&faces, &shear(l), &PredictSettings::default()).unwrap();
            assert_eq!(v.index, 1);
            assert_eq!(v.method, MeasureMethod::Flow);
            assert!((v.value - expect).abs() < 1e-8 * expect, "L = {l}: {} vs {expect}", v.value);
        }
    }

    #[test]
    fn oversized_chart_box_is_rejected() {
        // Side window x² ∈ [0.1, 0.4] on x¹ = 1 for the linear system: ζ_L lands on
        // F¹_L unless L ≤ 0.01.
        let r = FaceRect::new(0, FaceSide::Plus, vec![Interval::closed(0.1, 0.4)]).unwrap();
        let lin = |l| Model::new(SystemSpec::linear_identity(&[2.0, 1.0]), Domain::Box { half_width: 1.0 }, l).unwrap();
        assert!(limit_measure(&TargetSet::Face(r.clone()), &lin(0.25), &PredictSettings::default()).is_err());
        let v = limit_measure(&TargetSet::Face(r), &lin(0.005), &PredictSettings::default()).unwrap();
        // u ∈ [L²/0.16, L²/0.01] on the + face, scaled by L^{-2}.
        let expect = CHI2 * (100.0 - 6.25);
        assert!((v.value - expect).abs() < 1e-7 * expect, "{} vs {expect}", v.value);
    }

    #[test]
    fn preimage_target_uses_chart_rectangle() {
        let m = shear(0.25);
        let r = FaceRect::new(1, FaceSide::Plus, vec![Interval::closed(-0.1, 0.1)]).unwrap();
        let v = limit_measure(&TargetSet::Preimage(r), &m, &PredictSettings::default()).unwrap();
        assert!((v.value - CHI2 * 0.2 / 0.0625).abs() < 1e-9);
    }

    #[test]
    fn conditional_law_examples() {
        let m = Model::new(SystemSpec::linear_identity(&[2.0, 1.0]), Domain::Box { half_width: 1.0 }, 0.5).unwrap();
        let law = predicted_conditional_law(
            &TargetSet::Face(FaceRect::full_face(2, 1, FaceSide::Both, 1.0)),
            &m,
            &PredictSettings::default(),
        )
        .unwrap();
        assert_eq!(law.coordinates, LawCoordinates::Domain);
        assert!((law.weight(true) - 0.5).abs() < 1e-12);
        assert_eq!(law.component(true).unwrap().region, vec![Interval::closed(-1.0, 1.0)]);

        let top = TargetSet::Face(FaceRect::full_face(2, 1, FaceSide::Plus, 1.0));
        let law = predicted_conditional_law(&top, &m, &PredictSettings::default()).unwrap();
        assert_eq!(law.components.len(), 1);
        assert!((law.weight(true) - 1.0).abs() < 1e-15);

        let m3 = Model::new(SystemSpec::linear_identity(&[2.0, 1.0, 0.5]), Domain::Box { half_width: 1.0 }, 0.5).unwrap();
        let law = predicted_conditional_law(
            &TargetSet::Face(FaceRect::full_face(3, 1, FaceSide::Both, 1.0)),
            &m3,
            &PredictSettings::default(),
        )
        .unwrap();
        assert_eq!(law.index, 1);
        assert_eq!(law.component(false).unwrap().region, vec![Interval::closed(-1.0, 1.0)]);

        // Trailing interval open at 0: the pull-back misses Λ² entirely.
        let null = TargetSet::Preimage(
            FaceRect::new(1, FaceSide::Plus, vec![Interval::closed(-0.1, 0.1), Interval::open(0.0, 0.2)]).unwrap(),
        );
        assert!(predicted_conditional_law(&null, &m3, &PredictSettings::default()).is_err());
    }

    #[test]
    fn shear_conditional_law_lives_in_chart_coordinates() {
        let m = shear(0.25);
        let faces = TargetSet::Face(FaceRect::full_face(2, 1, FaceSide::Both, 1.0));
        let law = predicted_conditional_law(&faces, &m, &PredictSettings::default()).unwrap();
        assert_eq!(law.coordinates, LawCoordinates::Chart);
        let plus = law.component(true).unwrap();
        let half = 0.0625 / (5.0f64 / 6.0).powi(2);
        assert!((plus.region[0].hi - half).abs() < 1e-9, "{:?}", plus.region);
        let ratio = law.weight(true) / law.weight(false);
        assert!((ratio - (7.0f64 / 5.0).powi(2)).abs() < 1e-7);
    }

    #[test]
    fn measure_1d_finds_edges() {
        let (m, pieces) = measure_1d(|t| (0.1..=0.35).contains(&t) || t > 0.8, 0.0, 1.0, 16);
        assert!((m - 0.45).abs() < 1e-13);
        assert_eq!(pieces.len(), 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn ladder_increases_from_zero(mut ls in prop::collection::vec(0.1f64..5.0, 1..6)) {
                ls.sort_by(|a, b| b.total_cmp(a));
                ls.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
                let r = compute_rho(&ls).unwrap().rho;
                prop_assert_eq!(r[0], 0.0);
                for w in r.windows(2) {
                    prop_assert!(w[1] > w[0]);
                }
            }

            #[test]
            fn chi_is_nonnegative_and_symmetric(y1 in -2.0f64..2.0, y2 in -2.0f64..2.0) {
                let ev = ChiEvaluator::new(1, cov21(), &[2.0, 1.0], QuadratureSettings::default()).unwrap();
                let a = ev.chi_pm(&[y1, y2]).unwrap();
                let b = ev.chi_pm(&[y1, -y2]).unwrap();
                prop_assert!(a.plus >= 0.0 && a.minus >= 0.0);
                prop_assert!((a.plus - b.minus).abs() <= 1e-9 * a.plus.max(1e-12));
            }

            #[test]
            fn box_case_is_additive(a in -0.9f64..0.0, cut in 0.0f64..1.0, b in 0.05f64..0.9) {
                let chi = ChiPair { plus: 0.3, minus: 0.1, error: 0.0 };
                let mid = a + cut * (b - a);
                let whole = FaceRect::new(1, FaceSide::Both, vec![Interval::closed(a, b)]).unwrap();
                let left = FaceRect::new(1, FaceSide::Both, vec![Interval::closed(a, mid)]).unwrap();
                let right = FaceRect::new(1, FaceSide::Both, vec![Interval::closed(mid, b)]).unwrap();
                let lam = [2.0, 1.0];
                let total = mu_box_case(&whole, &lam, 1.0, &chi);
                let parts = mu_box_case(&left, &lam, 1.0, &chi) + mu_box_case(&right, &lam, 1.0, &chi);
                prop_assert!((total - parts).abs() <= 1e-12);
            }
        }
    }
}
