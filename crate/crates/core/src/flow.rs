//! Deterministic dynamics: the flow of `ẋ = b(x)`, exit times, and the
//! Poincaré maps between the chart box `f⁻¹(∂B_L)` and the domain boundary.
//!
//! Integration uses an adaptive Dormand–Prince 5(4) pair. When a step crosses
//! the event surface the crossing is refined by bisection on the step
//! fraction, re-stepping from the accepted point each time, so the refined
//! point carries the same fifth-order accuracy as a full step.

use crate::error::{Error, Result};
use crate::model::{Domain, Model, SystemSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSettings {
    pub rtol: f64,
    pub atol: f64,
    pub initial_step: f64,
    pub max_step: f64,
    /// Defaults to `50 / λ_d` when `None`.
    pub horizon: Option<f64>,
    /// Bisection stops once the bracketing time interval is below this.
    pub event_time_tol: f64,
    pub record_path: bool,
}

impl Default for FlowSettings {
    fn default() -> Self {
        FlowSettings {
            rtol: 1e-12,
            atol: 1e-14,
            initial_step: 1e-3,
            max_step: 0.25,
            horizon: None,
            event_time_tol: 1e-14,
            record_path: false,
        }
    }
}

impl FlowSettings {
    pub fn horizon_for(&self, system: &SystemSpec) -> f64 {
        self.horizon
            .unwrap_or_else(|| 50.0 / system.lambdas.last().copied().unwrap_or(1.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowResult {
    pub exit_point: Vec<f64>,
    pub exit_time: f64,
    pub path: Option<Vec<(f64, Vec<f64>)>>,
}

/// `S̄_t x = (x^j e^{λ_j t})_j`.
pub fn linear_flow(x: &[f64], t: f64, lambdas: &[f64]) -> Vec<f64> {
    x.iter().zip(lambdas).map(|(v, l)| v * (l * t).exp()).collect()
}

/// Exit time of the linear flow from `D`, or `None` for the fixed point.
pub fn linear_exit_time(x: &[f64], lambdas: &[f64], domain: &Domain) -> Option<f64> {
    if x.iter().all(|v| *v == 0.0) {
        return None;
    }
    match domain {
        Domain::Box { half_width } => x
            .iter()
            .zip(lambdas)
            .filter(|(v, _)| **v != 0.0)
            .map(|(v, l)| ((half_width / v.abs()).ln() / l).max(0.0))
            .reduce(f64::min),
        Domain::Ellipsoid { semi_axes } => {
            let g = |t: f64| -> f64 {
                x.iter()
                    .zip(lambdas)
                    .zip(semi_axes)
                    .map(|((v, l), a)| (v * (l * t).exp() / a).powi(2))
                    .sum()
            };
            if g(0.0) >= 1.0 {
                return Some(0.0);
            }
            let mut hi = 1.0;
            while g(hi) < 1.0 {
                hi *= 2.0;
            }
            let mut lo = 0.0;
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if g(mid) < 1.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo < 1e-16 * hi.max(1.0) {
                    break;
                }
            }
            Some(0.5 * (lo + hi))
        }
    }
}

/// Closed-form exit of the linear flow, projected onto `∂D`.
pub fn linear_exit(x: &[f64], lambdas: &[f64], domain: &Domain) -> Option<FlowResult> {
    let t = linear_exit_time(x, lambdas, domain)?;
    let mut p = linear_flow(x, t, lambdas);
    domain.project(&mut p);
    Some(FlowResult {
        exit_point: p,
        exit_time: t,
        path: None,
    })
}

/// Closed-form `ζ_L` for the linear flow (the conjugacy is the identity).
pub fn linear_zeta(p: &[f64], lambdas: &[f64], chart_half_width: f64) -> Vec<f64> {
    let s = p
        .iter()
        .zip(lambdas)
        .filter(|(v, _)| **v != 0.0)
        .map(|(v, l)| (v.abs() / chart_half_width).ln() / l)
        .fold(0.0, f64::max);
    let mut y = linear_flow(p, -s, lambdas);
    snap_to_box(&mut y, chart_half_width);
    y
}

/// Snaps the binding coordinate of a point near `∂B_L` onto the face.
pub(crate) fn snap_to_box(y: &mut [f64], l: f64) {
    let axis = y
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(j, _)| j)
        .unwrap_or(0);
    y[axis] = if y[axis] >= 0.0 { l } else { -l };
    for v in y.iter_mut() {
        *v = v.clamp(-l, l);
    }
}

// Dormand–Prince 5(4) tableau.
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

struct Stepper {
    k: Vec<Vec<f64>>,
    stage: Vec<f64>,
}

impl Stepper {
    fn new(d: usize) -> Self {
        Stepper {
            k: vec![vec![0.0; d]; 7],
            stage: vec![0.0; d],
        }
    }

    /// One step of size `h` from `x`; writes the fifth-order solution and
    /// returns the scaled error norm of the embedded pair.
    fn step<F: Fn(&[f64], &mut [f64])>(
        &mut self,
        rhs: &F,
        x: &[f64],
        h: f64,
        out: &mut [f64],
        rtol: f64,
        atol: f64,
    ) -> f64 {
        let d = x.len();
        for s in 0..7 {
            for i in 0..d {
                let mut acc = x[i];
                for (r, a) in A[s].iter().enumerate().take(s) {
                    acc += h * a * self.k[r][i];
                }
                self.stage[i] = acc;
            }
            let (head, tail) = self.k.split_at_mut(s);
            let _ = head;
            rhs(&self.stage, &mut tail[0]);
        }
        let mut err2 = 0.0;
        for i in 0..d {
            let mut y5 = x[i];
            let mut e = 0.0;
            for s in 0..7 {
                y5 += h * B5[s] * self.k[s][i];
                e += h * (B5[s] - B4[s]) * self.k[s][i];
            }
            out[i] = y5;
            let sc = atol + rtol * x[i].abs().max(y5.abs());
            err2 += (e / sc).powi(2);
        }
        (err2 / d as f64).sqrt()
    }
}

/// Integrates `ẋ = rhs(x)` from `x0` until `event(x) ≥ 0`.
///
/// `event` must be negative at the start for the search to run; if it is
/// already non-negative the start point is returned with time 0.
pub fn integrate_until<F, G>(
    rhs: F,
    x0: &[f64],
    event: G,
    horizon: f64,
    settings: &FlowSettings,
) -> Result<FlowResult>
where
    F: Fn(&[f64], &mut [f64]),
    G: Fn(&[f64]) -> f64,
{
    let d = x0.len();
    let mut path = settings.record_path.then(|| vec![(0.0, x0.to_vec())]);
    if event(x0) >= 0.0 {
        return Ok(FlowResult {
            exit_point: x0.to_vec(),
            exit_time: 0.0,
            path,
        });
    }
    let mut stepper = Stepper::new(d);
    let mut x = x0.to_vec();
    let mut trial = vec![0.0; d];
    let mut t = 0.0;
    let mut h = settings.initial_step.min(settings.max_step);
    let max_steps = 50_000_000usize;
    for _ in 0..max_steps {
        if t >= horizon {
            break;
        }
        let err = stepper.step(&rhs, &x, h, &mut trial, settings.rtol, settings.atol);
        if !err.is_finite() {
            h *= 0.25;
            continue;
        }
        if err <= 1.0 {
            if event(&trial) >= 0.0 {
                // Bisection on the step fraction, re-stepping from `x`.
                let (mut lo, mut hi) = (0.0f64, 1.0f64);
                let mut hit = trial.clone();
                let mut probe = vec![0.0; d];
                while (hi - lo) * h > settings.event_time_tol {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    stepper.step(&rhs, &x, mid * h, &mut probe, settings.rtol, settings.atol);
                    if event(&probe) >= 0.0 {
                        hi = mid;
                        hit.copy_from_slice(&probe);
                    } else {
                        lo = mid;
                    }
                }
                let t_exit = t + hi * h;
                if let Some(p) = path.as_mut() {
                    p.push((t_exit, hit.clone()));
                }
                return Ok(FlowResult {
                    exit_point: hit,
                    exit_time: t_exit,
                    path,
                });
            }
            t += h;
            x.copy_from_slice(&trial);
            if let Some(p) = path.as_mut() {
                p.push((t, x.clone()));
            }
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h = (h * factor).min(settings.max_step);
    }
    Err(Error::NoExit {
        horizon,
        context: format!("orbit from {x0:?} did not reach the event surface"),
    })
}

/// First exit of the orbit of `x` from `D`: `t(x) = inf{t ≥ 0 : S_t x ∈ ∂D}`.
pub fn deterministic_exit(x: &[f64], model: &Model, settings: &FlowSettings) -> Result<FlowResult> {
    let system = model.system();
    let domain = model.domain();
    if x.len() != system.dim() {
        return Err(Error::invalid("point dimension does not match the system"));
    }
    if x.iter().all(|v| *v == 0.0) {
        return Err(Error::invalid("the equilibrium never exits"));
    }
    if domain.level(x) > 1e-12 {
        return Err(Error::invalid(format!("{x:?} is outside the domain")));
    }
    let mut res = integrate_until(
        |y, out| system.drift_into(y, out),
        x,
        |y| domain.level(y),
        settings.horizon_for(system),
        settings,
    )?;
    domain.project(&mut res.exit_point);
    Ok(res)
}

/// `ψ_L(x) = S_{t(x)} x` for `x ∈ f⁻¹(∂B_L)`.
pub fn poincare_psi(x: &[f64], model: &Model, settings: &FlowSettings) -> Result<Vec<f64>> {
    let l = model.chart_half_width();
    let y = model.system().chart(x);
    let sup = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if (sup - l).abs() > 1e-9 * (1.0 + l) {
        return Err(Error::invalid(format!(
            "point is not on f⁻¹(∂B_L): |f(x)|_∞ = {sup}, L = {l}"
        )));
    }
    Ok(deterministic_exit(x, model, settings)?.exit_point)
}

/// `ζ_L = f ∘ ψ_L⁻¹`: follows the orbit of a boundary point backward until it
/// reaches `f⁻¹(∂B_L)` and returns the chart coordinates of that point.
pub fn zeta(p: &[f64], model: &Model, settings: &FlowSettings) -> Result<Vec<f64>> {
    let system = model.system();
    let l = model.chart_half_width();
    if model.domain().level(p).abs() > 1e-8 {
        return Err(Error::invalid(format!("{p:?} is not on the domain boundary")));
    }
    let res = integrate_until(
        |y, out| {
            system.drift_into(y, out);
            out.iter_mut().for_each(|v| *v = -*v);
        },
        p,
        |y| l - system.chart(y).iter().fold(0.0f64, |m, v| m.max(v.abs())),
        settings.horizon_for(system),
        settings,
    )
    .map_err(|e| match e {
        Error::NoExit { horizon, .. } => Error::NoExit {
            horizon,
            context: format!("backward orbit of {p:?} did not enter f⁻¹(B_L)"),
        },
        other => other,
    })?;
    let mut y = system.chart(&res.exit_point);
    snap_to_box(&mut y, l);
    Ok(y)
}

/// `ζ_L` using the closed form when the model allows it.
pub fn zeta_auto(p: &[f64], model: &Model, settings: &FlowSettings) -> Result<Vec<f64>> {
    if model.is_linear_box() {
        Ok(linear_zeta(p, &model.system().lambdas, model.chart_half_width()))
    } else {
        zeta(p, model, settings)
    }
}

/// `ψ_L` using the closed form when the model allows it.
pub fn psi_auto(x: &[f64], model: &Model, settings: &FlowSettings) -> Result<Vec<f64>> {
    if model.is_linear_box() {
        linear_exit(x, &model.system().lambdas, model.domain())
            .map(|r| r.exit_point)
            .ok_or_else(|| Error::invalid("the equilibrium never exits"))
    } else {
        poincare_psi(x, model, settings)
    }
}
