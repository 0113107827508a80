//! Euler–Maruyama simulation of `dX = b(X) dt + ε σ dW` up to the first exit
//! from the domain.
//!
//! Every trajectory owns an independent ChaCha8 stream selected by its id, so
//! results do not depend on how trajectories are spread over threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{ordered_map, ordered_map_slice, Execution};
use crate::model::{Face, Model, SystemSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub epsilon: f64,
    /// Defaults to `min(1e-3, 0.02/λ₁, 0.1 ε^{2/3})`.
    #[serde(default)]
    pub dt: Option<f64>,
    /// Defaults to `(8/λ_d) log(1/ε)`.
    #[serde(default)]
    pub max_time: Option<f64>,
    pub seed: u64,
    pub n_trajectories: u64,
    #[serde(default)]
    pub record_paths: bool,
}

impl SimConfig {
    pub fn new(epsilon: f64, n_trajectories: u64, seed: u64) -> Self {
        SimConfig {
            epsilon,
            dt: None,
            max_time: None,
            seed,
            n_trajectories,
            record_paths: false,
        }
    }

    pub fn default_dt(epsilon: f64, lambda1: f64) -> f64 {
        1e-3f64.min(0.02 / lambda1).min(0.1 * epsilon.powf(2.0 / 3.0))
    }

    pub fn default_max_time(epsilon: f64, lambda_d: f64) -> f64 {
        8.0 / lambda_d * (1.0 / epsilon).ln()
    }

    /// Step size and horizon after defaults and guards.
    pub fn resolve(&self, system: &SystemSpec) -> Result<(f64, f64)> {
        let eps = self.epsilon;
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::invalid(format!("ε = {eps} must lie in (0, 1)")));
        }
        let l1 = system.lambdas[0];
        let ld = *system.lambdas.last().expect("non-empty eigenvalues");
        let dt = self.dt.unwrap_or_else(|| Self::default_dt(eps, l1));
        if !(dt > 0.0 && dt <= 0.1 / l1) {
            return Err(Error::invalid(format!("dt = {dt} must be in (0, 0.1/λ₁ = {}]", 0.1 / l1)));
        }
        let floor = 4.0 / ld * (1.0 / eps).ln();
        let max_time = self.max_time.unwrap_or_else(|| Self::default_max_time(eps, ld));
        if !(max_time >= floor) {
            return Err(Error::invalid(format!(
                "max_time = {max_time} is below the guard (4/λ_d) log(1/ε) = {floor}"
            )));
        }
        Ok((dt, max_time))
    }
}

/// One exited trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitSample {
    pub trajectory_id: u64,
    pub epsilon: f64,
    pub time: f64,
    pub location: Vec<f64>,
    /// Exit face for box domains.
    pub face: Option<Face>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub epsilon: f64,
    pub dt: f64,
    pub max_time: f64,
    pub n_trajectories: u64,
    /// Exited trajectories in id order.
    pub samples: Vec<ExitSample>,
    /// Ids of trajectories still inside at `max_time`.
    pub non_exits: Vec<u64>,
    /// Recorded `(t, x)` paths, indexed like `0..n_trajectories`.
    pub paths: Option<Vec<Vec<(f64, Vec<f64>)>>>,
}

impl SimOutput {
    pub fn non_exit_fraction(&self) -> f64 {
        if self.n_trajectories == 0 {
            0.0
        } else {
            self.non_exits.len() as f64 / self.n_trajectories as f64
        }
    }
}

/// Per-trajectory generator: the seed picks the key, the id picks the stream.
pub fn trajectory_rng(seed: u64, trajectory_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trajectory_id);
    rng
}

enum Outcome {
    Exit(ExitSample),
    Stuck,
}

struct Stepper<'a> {
    system: &'a SystemSpec,
    eps_sqrt_dt: f64,
    dt: f64,
    drift: Vec<f64>,
    eta: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(system: &'a SystemSpec, epsilon: f64, dt: f64) -> Self {
        Stepper {
            system,
            eps_sqrt_dt: epsilon * dt.sqrt(),
            dt,
            drift: vec![0.0; system.dim()],
            eta: vec![0.0; system.noise_dim()],
        }
    }

    /// `next = x + b(x) dt + ε √dt σ η`.
    fn step(&mut self, x: &[f64], next: &mut [f64], rng: &mut ChaCha8Rng) {
        self.system.drift_into(x, &mut self.drift);
        for e in self.eta.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        let sigma = &self.system.sigma;
        for j in 0..x.len() {
            let mut noise = 0.0;
            for (l, e) in self.eta.iter().enumerate() {
                noise += sigma[(j, l)] * e;
            }
            next[j] = x[j] + self.drift[j] * self.dt + self.eps_sqrt_dt * noise;
        }
    }
}

fn run_trajectory(
    model: &Model,
    epsilon: f64,
    dt: f64,
    max_time: f64,
    seed: u64,
    id: u64,
    path: Option<&mut Vec<(f64, Vec<f64>)>>,
) -> Outcome {
    let system = model.system();
    let domain = model.domain();
    let mut rng = trajectory_rng(seed, id);
    let mut stepper = Stepper::new(system, epsilon, dt);
    let mut x: Vec<f64> = system.xi0.iter().map(|v| epsilon * v).collect();
    let mut next = x.clone();
    let mut path = path;
    if let Some(p) = path.as_deref_mut() {
        p.push((0.0, x.clone()));
    }
    let steps = (max_time / dt).ceil() as u64;
    for k in 0..steps {
        stepper.step(&x, &mut next, &mut rng);
        if domain.level(&next) >= 0.0 {
            let (theta, location, face) = domain.segment_exit(&x, &next);
            let time = (k as f64 + theta) * dt;
            if let Some(p) = path.as_deref_mut() {
                p.push((time, location.clone()));
            }
            return Outcome::Exit(ExitSample {
                trajectory_id: id,
                epsilon,
                time,
                location,
                face,
            });
        }
        std::mem::swap(&mut x, &mut next);
        if let Some(p) = path.as_deref_mut() {
            p.push(((k + 1) as f64 * dt, x.clone()));
        }
    }
    Outcome::Stuck
}

/// Simulates `n_trajectories` independent paths until they leave the domain.
pub fn simulate_exits(model: &Model, config: &SimConfig, exec: Execution) -> Result<SimOutput> {
    simulate_exit_range(model, config, 0..config.n_trajectories, exec)
}

/// Simulates only the trajectories with ids in `ids`, so long campaigns can be
/// streamed in chunks. `config.n_trajectories` is ignored.
pub fn simulate_exit_range(
    model: &Model,
    config: &SimConfig,
    ids: std::ops::Range<u64>,
    exec: Execution,
) -> Result<SimOutput> {
    let system = model.system();
    let (dt, max_time) = config.resolve(system)?;
    let start: Vec<f64> = system.xi0.iter().map(|v| config.epsilon * v).collect();
    if !model.domain().contains(&start) {
        return Err(Error::invalid("initial point ε ξ₀ is not inside the domain"));
    }
    let first = ids.start;
    let count = ids.end.saturating_sub(ids.start);
    let results = ordered_map(count, exec, |k| {
        let id = first + k;
        if config.record_paths {
            let mut path = Vec::new();
            let out = run_trajectory(model, config.epsilon, dt, max_time, config.seed, id, Some(&mut path));
            (out, Some(path))
        } else {
            (
                run_trajectory(model, config.epsilon, dt, max_time, config.seed, id, None),
                None,
            )
        }
    });
    let mut samples = Vec::new();
    let mut non_exits = Vec::new();
    let mut paths = config.record_paths.then(Vec::new);
    for (k, (outcome, path)) in results.into_iter().enumerate() {
        match outcome {
            Outcome::Exit(s) => samples.push(s),
            Outcome::Stuck => non_exits.push(first + k as u64),
        }
        if let (Some(all), Some(p)) = (paths.as_mut(), path) {
            all.push(p);
        }
    }
    Ok(SimOutput {
        epsilon: config.epsilon,
        dt,
        max_time,
        n_trajectories: count,
        samples,
        non_exits,
        paths,
    })
}

/// Samples of `Z_T = ∫₀^T e^{-λ s} σ dW_s` built from `steps` exact Gaussian
/// increments, without any precondition on `T`.
pub fn simulate_stochastic_convolution(
    system: &SystemSpec,
    t_end: f64,
    steps: usize,
    n: u64,
    seed: u64,
    exec: Execution,
) -> Result<Vec<Vec<f64>>> {
    if !(t_end > 0.0) || steps == 0 {
        return Err(Error::invalid("need T > 0 and at least one step"));
    }
    let d = system.dim();
    let lam = &system.lambdas;
    let h = t_end / steps as f64;
    let a = &system.sigma * system.sigma.transpose();
    // Covariance of ∫₀^h e^{-λ s} σ dW_s.
    let m = nalgebra::DMatrix::from_fn(d, d, |j, k| {
        let s = lam[j] + lam[k];
        a[(j, k)] * (-(-s * h).exp_m1()) / s
    });
    let lower = m
        .cholesky()
        .ok_or_else(|| Error::invalid("increment covariance is not positive definite"))?
        .l();
    Ok(ordered_map(n, exec, |id| {
        let mut rng = trajectory_rng(seed, id);
        let mut z = vec![0.0; d];
        let mut eta = vec![0.0; d];
        for step in 0..steps {
            let t0 = step as f64 * h;
            for e in eta.iter_mut() {
                *e = rng.sample(StandardNormal);
            }
            for j in 0..d {
                let inc: f64 = (0..=j).map(|k| lower[(j, k)] * eta[k]).sum();
                z[j] += (-lam[j] * t0).exp() * inc;
            }
        }
        z
    }))
}

/// Samples of `Z_T` for a horizon with `e^{-λ_d T} < 1e-8`.
pub fn simulate_gaussian_limit(
    system: &SystemSpec,
    t_end: f64,
    steps: usize,
    n: u64,
    seed: u64,
    exec: Execution,
) -> Result<Vec<Vec<f64>>> {
    let ld = *system.lambdas.last().expect("non-empty eigenvalues");
    if !((-ld * t_end).exp() < 1e-8) {
        return Err(Error::invalid(format!(
            "T = {t_end} is too short: need e^(-λ_d T) < 1e-8, i.e. T > {}",
            8.0 * 10f64.ln() / ld
        )));
    }
    simulate_stochastic_convolution(system, t_end, steps, n, seed, exec)
}

/// Sample mean and covariance with the standard error of every covariance entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    /// `sqrt((C_jj C_kk + C_jk²) / n)` for Gaussian data.
    pub covariance_se: Vec<Vec<f64>>,
    pub n: usize,
}

pub fn sample_moments(samples: &[Vec<f64>]) -> Moments {
    let n = samples.len();
    let d = samples.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![vec![0.0; d]; d];
    for s in samples {
        for j in 0..d {
            for k in 0..d {
                cov[j][k] += (s[j] - mean[j]) * (s[k] - mean[k]);
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    cov.iter_mut().flatten().for_each(|c| *c /= denom);
    let se = (0..d)
        .map(|j| {
            (0..d)
                .map(|k| ((cov[j][j] * cov[k][k] + cov[j][k] * cov[j][k]) / n as f64).sqrt())
                .collect()
        })
        .collect();
    Moments {
        mean,
        covariance: cov,
        covariance_se: se,
        n,
    }
}

/// Quantiles of the sup-norm deviation between noisy and noiseless paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingSummary {
    pub epsilon: f64,
    pub n: usize,
    pub median: f64,
    pub q90: f64,
    pub q99: f64,
    pub max: f64,
}

impl TrackingSummary {
    pub fn from_deviations(epsilon: f64, mut dev: Vec<f64>) -> Self {
        dev.sort_by(f64::total_cmp);
        let q = |p: f64| {
            if dev.is_empty() {
                return f64::NAN;
            }
            let k = ((p * dev.len() as f64).ceil() as usize).clamp(1, dev.len());
            dev[k - 1]
        };
        TrackingSummary {
            epsilon,
            n: dev.len(),
            median: q(0.5),
            q90: q(0.9),
            q99: q(0.99),
            max: dev.last().copied().unwrap_or(f64::NAN),
        }
    }
}

/// Runs the noisy path from each start alongside the noiseless Euler path with
/// the same step, until the noisy path leaves the domain or `horizon` passes,
/// and returns `sup_t |X_t - x_t|_∞` per start.
pub fn flow_tracking_from(
    model: &Model,
    starts: &[Vec<f64>],
    epsilon: f64,
    dt: f64,
    horizon: f64,
    seed: u64,
    exec: Execution,
) -> Vec<f64> {
    let indexed: Vec<(u64, &Vec<f64>)> = starts.iter().enumerate().map(|(i, s)| (i as u64, s)).collect();
    ordered_map_slice(&indexed, exec, |(id, start)| {
        let system = model.system();
        let mut rng = trajectory_rng(seed, *id);
        let mut noisy = Stepper::new(system, epsilon, dt);
        let mut x = start.to_vec();
        let mut next = x.clone();
        let mut det = start.to_vec();
        let mut drift = vec![0.0; det.len()];
        let mut worst: f64 = 0.0;
        let steps = (horizon / dt).ceil() as u64;
        for _ in 0..steps {
            noisy.step(&x, &mut next, &mut rng);
            system.drift_into(&det, &mut drift);
            for (v, b) in det.iter_mut().zip(&drift) {
                *v += b * dt;
            }
            let dev = next.iter().zip(&det).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            worst = worst.max(dev);
            if model.domain().level(&next) >= 0.0 {
                break;
            }
            std::mem::swap(&mut x, &mut next);
        }
        worst
    })
}

/// Follow-the-flow diagnostic: simulates from `ε ξ₀` to the first exit from
/// `f⁻¹(B_L)`, then measures how far the rest of the noisy path strays from
/// the noiseless path started at that exit point.
pub fn flow_tracking_diagnostic(
    model: &Model,
    epsilon: f64,
    n: u64,
    seed: u64,
    exec: Execution,
) -> Result<TrackingSummary> {
    let system = model.system();
    let config = SimConfig::new(epsilon, n, seed);
    let (dt, max_time) = config.resolve(system)?;
    let l = model.chart_half_width();
    let starts: Vec<Option<Vec<f64>>> = ordered_map(n, exec, |id| {
        let mut rng = trajectory_rng(seed, id);
        let mut stepper = Stepper::new(system, epsilon, dt);
        let mut x: Vec<f64> = system.xi0.iter().map(|v| epsilon * v).collect();
        let mut next = x.clone();
        let sup = |y: &[f64]| system.chart(y).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for _ in 0..(max_time / dt).ceil() as u64 {
            stepper.step(&x, &mut next, &mut rng);
            if sup(&next) >= l {
                return Some(next);
            }
            std::mem::swap(&mut x, &mut next);
        }
        None
    });
    let starts: Vec<Vec<f64>> = starts.into_iter().flatten().collect();
    // Independent noise for the second phase.
    let dev = flow_tracking_from(model, &starts, epsilon, dt, max_time, seed ^ 0x9E37_79B9_7F4A_7C15, exec);
    Ok(TrackingSummary::from_deviations(epsilon, dev))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Domain;
    use nalgebra::DMatrix;

    fn linear(lambdas: &[f64]) -> Model {
        Model::new(SystemSpec::linear_identity(lambdas), Domain::Box { half_width: 1.0 }, 0.5).unwrap()
    }

    #[test]
    fn config_guards() {
        let sys = SystemSpec::linear_identity(&[2.0, 1.0]);
        let (dt, t) = SimConfig::new(0.1, 1, 0).resolve(&sys).unwrap();
        assert_eq!(dt, 1e-3);
        assert!((t - 8.0 * 10f64.ln()).abs() < 1e-12);
        let mut c = SimConfig::new(0.1, 1, 0);
        c.dt = Some(0.1);
        assert!(c.resolve(&sys).is_err());
        c.dt = None;
        c.max_time = Some(1.0);
        assert!(c.resolve(&sys).is_err());
        assert!(SimConfig::new(1.5, 1, 0).resolve(&sys).is_err());
    }

    #[test]
    fn exits_lie_on_the_boundary() {
        let m = linear(&[2.0, 1.0]);
        let out = simulate_exits(&m, &SimConfig::new(0.2, 500, 7), Execution::Parallel).unwrap();
        assert!(out.non_exits.is_empty());
        for s in &out.samples {
            assert!(m.domain().level(&s.location).abs() < 1e-9);
            let f = s.face.unwrap();
            assert_eq!(s.location[f.axis], f.sign());
            assert!(s.time > 0.0 && s.time <= out.max_time);
        }
    }

    #[test]
    fn ellipsoid_exits_lie_on_the_surface() {
        let m = Model::new(
            SystemSpec::linear_identity(&[2.0, 1.0]),
            Domain::Ellipsoid { semi_axes: vec![1.0, 0.7] },
            0.3,
        )
        .unwrap();
        let out = simulate_exits(&m, &SimConfig::new(0.2, 200, 1), Execution::Sequential).unwrap();
        assert!(out.samples.iter().all(|s| m.domain().level(&s.location).abs() < 1e-12 && s.face.is_none()));
    }

    #[test]
    fn one_dimensional_symmetry() {
        let m = linear(&[1.0]);
        let n = 4000;
        let out = simulate_exits(&m, &SimConfig::new(0.1, n, 11), Execution::Parallel).unwrap();
        let right = out.samples.iter().filter(|s| s.location[0] > 0.0).count() as f64;
        let se = (0.25 / n as f64).sqrt();
        assert!((right / n as f64 - 0.5).abs() < 3.0 * se);
    }

    #[test]
    fn small_noise_exits_near_leading_points() {
        let m = linear(&[2.0, 1.0]);
        let mut sys = m.system().clone();
        sys.xi0 = vec![1.0, 0.0];
        let m = Model::new(sys, Domain::Box { half_width: 1.0 }, 0.5).unwrap();
        let out = simulate_exits(&m, &SimConfig::new(1e-6, 200, 3), Execution::Parallel).unwrap();
        let mut dist: Vec<f64> = out
            .samples
            .iter()
            .map(|s| ((s.location[0] - 1.0).powi(2) + s.location[1].powi(2)).sqrt())
            .collect();
        dist.sort_by(f64::total_cmp);
        assert!(dist[dist.len() / 2] < 0.05);
    }

    #[test]
    fn thread_count_does_not_change_samples() {
        let m = linear(&[2.0, 1.0]);
        let cfg = SimConfig::new(0.15, 300, 99);
        let a = simulate_exits(&m, &cfg, Execution::Sequential).unwrap();
        let b = simulate_exits(&m, &cfg, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn recorded_paths_end_at_the_exit() {
        let m = linear(&[2.0, 1.0]);
        let mut cfg = SimConfig::new(0.3, 5, 2);
        cfg.record_paths = true;
        let out = simulate_exits(&m, &cfg, Execution::Sequential).unwrap();
        let paths = out.paths.unwrap();
        assert_eq!(paths.len(), 5);
        for (s, p) in out.samples.iter().zip(&paths) {
            assert_eq!(p.last().unwrap().1, s.location);
        }
    }

    #[test]
    fn gaussian_limit_moments() {
        let sys = SystemSpec::linear_identity(&[2.0, 1.0]);
        let z = simulate_gaussian_limit(&sys, 20.0, 16, 40_000, 5, Execution::Parallel).unwrap();
        let m = sample_moments(&z);
        let exact = [[0.25, 0.0], [0.0, 0.5]];
        for j in 0..2 {
            assert!(m.mean[j].abs() < 3.0 * (exact[j][j] / m.n as f64).sqrt());
            for k in 0..2 {
                assert!((m.covariance[j][k] - exact[j][k]).abs() < 3.5 * m.covariance_se[j][k]);
            }
        }
        assert!(simulate_gaussian_limit(&sys, 5.0, 16, 10, 5, Execution::Parallel).is_err());
    }

    #[test]
    fn convolution_variance_grows_with_horizon() {
        let sys = SystemSpec {
            sigma: DMatrix::from_row_slice(2, 3, &[1.0, 0.5, 0.0, -0.3, 0.8, 0.6]),
            ..SystemSpec::linear_identity(&[1.5, 0.5])
        };
        let mut last = 0.0;
        for t in [0.2, 0.5, 1.0, 3.0] {
            let z = simulate_stochastic_convolution(&sys, t, 8, 20_000, 9, Execution::Parallel).unwrap();
            let v = sample_moments(&z).covariance[0][0];
            assert!(v > last);
            last = v;
        }
    }

    #[test]
    fn tracking_without_noise_is_exact() {
        let m = linear(&[2.0, 1.0]);
        let starts = vec![vec![0.5, 0.1], vec![-0.2, 0.5]];
        let dev = flow_tracking_from(&m, &starts, 0.0, 1e-3, 10.0, 1, Execution::Sequential);
        assert_eq!(dev, vec![0.0, 0.0]);
    }

    #[test]
    fn tracking_improves_with_smaller_noise() {
        let m = linear(&[2.0, 1.0]);
        let a = flow_tracking_diagnostic(&m, 0.1, 400, 4, Execution::Parallel).unwrap();
        let b = flow_tracking_diagnostic(&m, 0.05, 400, 4, Execution::Parallel).unwrap();
        assert!(b.q99 < a.q99, "{a:?} {b:?}");
    }

    #[test]
    fn tracking_deviation_respects_gronwall_bound() {
        // Linear field: X - x = ε ∫ e^{λ(t-s)} dW, whose sd at t is below ε e^{λ₁ t}/√(2λ₂).
        let m = linear(&[2.0, 1.0]);
        let starts = vec![vec![0.01, 0.01]; 400];
        let mut prev = vec![0.0; starts.len()];
        for t in [0.25, 0.5, 1.0] {
            let dev = flow_tracking_from(&m, &starts, 0.01, 1e-3, t, 8, Execution::Parallel);
            for (p, d) in prev.iter().zip(&dev) {
                assert!(d >= p);
            }
            let s = TrackingSummary::from_deviations(0.01, dev.clone());
            assert!(s.q99 < 4.0 * 0.01 * (2.0 * t).exp() / 2f64.sqrt() * 2.0);
            prev = dev;
        }
    }
}
