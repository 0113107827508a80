//! System, domain and target-set descriptions shared by every other module.
//!
//! A [`SystemSpec`] is raw user input. [`validate_system`] checks the standing
//! assumptions (ordered positive eigenvalues, surjective σ(0), an exact
//! linearizing conjugacy, a transversal boundary) and reports residuals.
//! [`Model`] bundles a system, a domain and the half-width `L` of the chart box
//! `B_L = [-L, L]^d`; it can only be built from inputs that pass validation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{self, FlowSettings};

/// Relative tolerance for conjugacy and transversality residuals.
pub const VALIDATION_TOL: f64 = 1e-8;
/// Number of quasi-random points used by validation checks.
pub const VALIDATION_SAMPLES: usize = 100;
/// Distance from a target edge below which the closed-set convention applies.
pub const EDGE_TOL: f64 = 1e-9;

/// Drift vector fields with a closed-form linearizing conjugacy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Drift {
    /// `b(x) = diag(λ) x`, conjugacy `f = id`.
    Linear,
    /// `b(x) = diag(λ) x + c x₁² e₂`.
    ///
    /// Conjugated to the linear field by `f(x) = x - κ x₁² e₂` with
    /// `κ = c / (2λ₁ - λ₂)`.
    Shear { c: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    /// Linearization eigenvalues, expected strictly decreasing and positive.
    pub lambdas: Vec<f64>,
    pub drift: Drift,
    /// Constant `d × n` diffusion matrix.
    pub sigma: DMatrix<f64>,
    /// Deterministic rescaled initial point: `X₀ = ε ξ₀`.
    pub xi0: Vec<f64>,
}

impl SystemSpec {
    /// Linear drift with identity noise and `ξ₀ = 0`.
    pub fn linear_identity(lambdas: &[f64]) -> Self {
        let d = lambdas.len();
        SystemSpec {
            lambdas: lambdas.to_vec(),
            drift: Drift::Linear,
            sigma: DMatrix::identity(d, d),
            xi0: vec![0.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.lambdas.len()
    }

    pub fn noise_dim(&self) -> usize {
        self.sigma.ncols()
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.drift, Drift::Linear)
    }

    fn shear_kappa(&self, c: f64) -> f64 {
        c / (2.0 * self.lambdas[0] - self.lambdas[1])
    }

    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        for ((o, xi), l) in out.iter_mut().zip(x).zip(&self.lambdas) {
            *o = l * xi;
        }
        if let Drift::Shear { c } = self.drift {
            out[1] += c * x[0] * x[0];
        }
    }

    pub fn drift(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.drift_into(x, &mut out);
        out
    }

    /// The linearizing conjugacy `f`.
    pub fn chart(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        if let Drift::Shear { c } = self.drift {
            y[1] -= self.shear_kappa(c) * x[0] * x[0];
        }
        y
    }

    /// The inverse conjugacy `f⁻¹`.
    pub fn chart_inv(&self, y: &[f64]) -> Vec<f64> {
        let mut x = y.to_vec();
        if let Drift::Shear { c } = self.drift {
            x[1] += self.shear_kappa(c) * y[0] * y[0];
        }
        x
    }

    pub fn chart_jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.dim();
        let mut j = DMatrix::identity(d, d);
        if let Drift::Shear { c } = self.drift {
            j[(1, 0)] = -2.0 * self.shear_kappa(c) * x[0];
        }
        j
    }

    /// σ evaluated at the origin (the matrix is constant).
    pub fn sigma0(&self) -> &DMatrix<f64> {
        &self.sigma
    }
}

/// A face of a box: `x^axis = +h` or `x^axis = -h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Face {
    pub axis: usize,
    pub positive: bool,
}

impl Face {
    pub fn sign(&self) -> f64 {
        if self.positive {
            1.0
        } else {
            -1.0
        }
    }
}

#[derive(Serialize, Deserialize)]
struct FaceRepr {
    axis: usize,
    sign: i8,
}

impl Serialize for Face {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        FaceRepr {
            axis: self.axis + 1,
            sign: if self.positive { 1 } else { -1 },
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Face {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = FaceRepr::deserialize(d)?;
        if r.axis == 0 || !(r.sign == 1 || r.sign == -1) {
            return Err(serde::de::Error::custom("face needs axis >= 1 and sign +1/-1"));
        }
        Ok(Face {
            axis: r.axis - 1,
            positive: r.sign == 1,
        })
    }
}

/// The domain `D` containing the equilibrium.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Domain {
    /// The open cube `(-h, h)^d`.
    Box { half_width: f64 },
    /// `{ Σ (x_j / a_j)² < 1 }`, smooth with level function `g = Σ (x_j/a_j)² - 1`.
    Ellipsoid { semi_axes: Vec<f64> },
}

impl Domain {
    /// Negative inside, zero on the boundary, positive outside.
    pub fn level(&self, x: &[f64]) -> f64 {
        match self {
            Domain::Box { half_width } => {
                x.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.abs())) - half_width
            }
            Domain::Ellipsoid { semi_axes } => {
                x.iter().zip(semi_axes).map(|(v, a)| (v / a).powi(2)).sum::<f64>() - 1.0
            }
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.level(x) < 0.0
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            Domain::Box { .. } => None,
            Domain::Ellipsoid { semi_axes } => Some(semi_axes.len()),
        }
    }

    /// Face with the largest relative excess (boxes only).
    pub fn face_of(&self, x: &[f64]) -> Option<Face> {
        match self {
            Domain::Box { .. } => {
                let (axis, v) = x
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))?;
                Some(Face {
                    axis,
                    positive: *v >= 0.0,
                })
            }
            Domain::Ellipsoid { .. } => None,
        }
    }

    /// Moves a point lying (approximately) on the boundary exactly onto it.
    pub fn project(&self, x: &mut [f64]) -> Option<Face> {
        match self {
            Domain::Box { half_width } => {
                let face = self.face_of(x)?;
                x[face.axis] = face.sign() * half_width;
                for v in x.iter_mut() {
                    *v = v.clamp(-half_width, *half_width);
                }
                Some(face)
            }
            Domain::Ellipsoid { .. } => {
                let r = (self.level(x) + 1.0).sqrt();
                if r > 0.0 {
                    x.iter_mut().for_each(|v| *v /= r);
                }
                None
            }
        }
    }

    /// Outward unit normal at a boundary point (the binding face normal for boxes).
    pub fn outward_normal(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Domain::Box { .. } => {
                let mut n = vec![0.0; x.len()];
                if let Some(face) = self.face_of(x) {
                    n[face.axis] = face.sign();
                }
                n
            }
            Domain::Ellipsoid { semi_axes } => {
                let g: Vec<f64> = x.iter().zip(semi_axes).map(|(v, a)| 2.0 * v / (a * a)).collect();
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                g.into_iter().map(|v| v / norm).collect()
            }
        }
    }

    /// First crossing of the segment `inside → outside` with the boundary.
    ///
    /// Returns the segment parameter `θ ∈ [0, 1]`, the crossing point projected
    /// onto the boundary, and the face (boxes only).
    pub fn segment_exit(&self, inside: &[f64], outside: &[f64]) -> (f64, Vec<f64>, Option<Face>) {
        match self {
            Domain::Box { half_width } => {
                let h = *half_width;
                let mut best = (f64::INFINITY, 0usize, true);
                for (j, (&a, &b)) in inside.iter().zip(outside).enumerate() {
                    if b.abs() >= h {
                        let s = if b >= 0.0 { 1.0 } else { -1.0 };
                        let denom = b - a;
                        let theta = if denom == 0.0 { 0.0 } else { ((s * h - a) / denom).clamp(0.0, 1.0) };
                        if theta < best.0 {
                            best = (theta, j, s > 0.0);
                        }
                    }
                }
                let (theta, axis, positive) = best;
                let theta = if theta.is_finite() { theta } else { 1.0 };
                let mut p: Vec<f64> = inside.iter().zip(outside).map(|(a, b)| a + theta * (b - a)).collect();
                for v in p.iter_mut() {
                    *v = v.clamp(-h, h);
                }
                p[axis] = if positive { h } else { -h };
                (theta, p, Some(Face { axis, positive }))
            }
            Domain::Ellipsoid { semi_axes } => {
                // g along the segment is the quadratic A θ² + B θ + C.
                let (mut qa, mut qb, mut qc) = (0.0, 0.0, -1.0);
                for ((&a, &b), &s) in inside.iter().zip(outside).zip(semi_axes) {
                    let (u, du) = (a / s, (b - a) / s);
                    qa += du * du;
                    qb += 2.0 * u * du;
                    qc += u * u;
                }
                let theta = if qa == 0.0 {
                    1.0
                } else {
                    let disc = (qb * qb - 4.0 * qa * qc).max(0.0).sqrt();
                    // qc < 0 so the larger root is the one in (0, 1]; use the
                    // cancellation-free form.
                    let q = -0.5 * (qb - disc);
                    let r = if q != 0.0 { qc / q } else { (-qb + disc) / (2.0 * qa) };
                    r.clamp(0.0, 1.0)
                };
                let mut p: Vec<f64> = inside.iter().zip(outside).map(|(a, b)| a + theta * (b - a)).collect();
                self.project(&mut p);
                (theta, p, None)
            }
        }
    }

    /// Quasi-random boundary points.
    pub fn boundary_samples(&self, d: usize, n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|k| {
                let u = halton(k + 1, d);
                match self {
                    Domain::Box { half_width } => {
                        let axis = k % d;
                        let positive = (k / d).is_multiple_of(2);
                        let mut x: Vec<f64> = u.iter().map(|v| (2.0 * v - 1.0) * 0.999 * half_width).collect();
                        x[axis] = if positive { *half_width } else { -half_width };
                        x
                    }
                    Domain::Ellipsoid { .. } => {
                        let mut x: Vec<f64> = u.iter().map(|v| 2.0 * v - 1.0).collect();
                        if x.iter().all(|v| *v == 0.0) {
                            x[0] = 1.0;
                        }
                        self.project(&mut x);
                        x
                    }
                }
            })
            .collect()
    }

    /// Quasi-random interior points.
    pub fn interior_samples(&self, d: usize, n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|k| {
                let u = halton(k + 1, d);
                match self {
                    Domain::Box { half_width } => u.iter().map(|v| (2.0 * v - 1.0) * 0.99 * half_width).collect(),
                    Domain::Ellipsoid { semi_axes } => {
                        let x: Vec<f64> = u.iter().zip(semi_axes).map(|(v, a)| (2.0 * v - 1.0) * a).collect();
                        let lv = self.level(&x) + 1.0;
                        if lv < 0.98 {
                            x
                        } else {
                            x.iter().map(|v| v * 0.99 / lv.sqrt()).collect()
                        }
                    }
                }
            })
            .collect()
    }
}

/// Halton point with the first `d` prime bases.
pub fn halton(index: usize, d: usize) -> Vec<f64> {
    const PRIMES: [usize; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];
    (0..d)
        .map(|j| {
            let base = PRIMES[j % PRIMES.len()];
            let mut f = 1.0;
            let mut r = 0.0;
            let mut i = index;
            while i > 0 {
                f /= base as f64;
                r += f * (i % base) as f64;
                i /= base;
            }
            r
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    #[serde(default = "yes")]
    pub lo_closed: bool,
    #[serde(default = "yes")]
    pub hi_closed: bool,
}

fn yes() -> bool {
    true
}

impl Interval {
    pub fn closed(lo: f64, hi: f64) -> Self {
        Interval {
            lo,
            hi,
            lo_closed: true,
            hi_closed: true,
        }
    }

    pub fn open(lo: f64, hi: f64) -> Self {
        Interval {
            lo,
            hi,
            lo_closed: false,
            hi_closed: false,
        }
    }

    pub fn length(&self) -> f64 {
        (self.hi - self.lo).max(0.0)
    }

    /// Membership with the closed-set convention within [`EDGE_TOL`] of an edge.
    pub fn contains(&self, x: f64) -> bool {
        if (x - self.lo).abs() <= EDGE_TOL {
            return self.lo_closed;
        }
        if (x - self.hi).abs() <= EDGE_TOL {
            return self.hi_closed;
        }
        x > self.lo && x < self.hi
    }

    pub fn closure_contains(&self, x: f64) -> bool {
        x >= self.lo - EDGE_TOL && x <= self.hi + EDGE_TOL
    }

    pub fn interior_contains(&self, x: f64) -> bool {
        x > self.lo && x < self.hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaceSide {
    Plus,
    Minus,
    Both,
}

impl FaceSide {
    pub fn admits(&self, positive: bool) -> bool {
        match self {
            FaceSide::Plus => positive,
            FaceSide::Minus => !positive,
            FaceSide::Both => true,
        }
    }
}

/// A product of intervals on one or both faces `x^axis = ±h` of a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceRect {
    pub axis: usize,
    pub side: FaceSide,
    /// One interval per coordinate; the entry at `axis` is ignored.
    pub bounds: Vec<Interval>,
}

impl FaceRect {
    /// Builds a rectangle from the `d - 1` intervals of the coordinates `j ≠ axis`.
    pub fn new(axis: usize, side: FaceSide, others: Vec<Interval>) -> Result<Self> {
        let d = others.len() + 1;
        if axis >= d {
            return Err(Error::invalid(format!("face axis {} out of range for d = {d}", axis + 1)));
        }
        let mut bounds = others;
        bounds.insert(axis, Interval::closed(0.0, 0.0));
        for (j, iv) in bounds.iter().enumerate() {
            if j != axis && !(iv.lo <= iv.hi) {
                return Err(Error::invalid(format!("interval for coordinate {} is empty or NaN", j + 1)));
            }
        }
        Ok(FaceRect { axis, side, bounds })
    }

    /// The whole face (or pair of faces) of a box with half-width `h`.
    pub fn full_face(d: usize, axis: usize, side: FaceSide, h: f64) -> Self {
        FaceRect::new(axis, side, vec![Interval::closed(-h, h); d - 1]).expect("valid full face")
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    /// Checks `[a^j, b^j] ⊂ (-h, h)` for `j ≠ axis`.
    pub fn check_inside(&self, h: f64) -> Result<()> {
        for (j, iv) in self.bounds.iter().enumerate() {
            if j != self.axis && (iv.lo <= -h || iv.hi >= h) {
                return Err(Error::invalid(format!(
                    "interval [{}, {}] for coordinate {} is not inside (-{h}, {h})",
                    iv.lo,
                    iv.hi,
                    j + 1
                )));
            }
        }
        Ok(())
    }

    /// Membership of a point on a box of half-width `h`; `face` overrides the
    /// geometric face detection when supplied.
    pub fn contains(&self, x: &[f64], h: f64, face: Option<Face>) -> bool {
        let face = match face {
            Some(f) => f,
            None => {
                let v = x[self.axis];
                if (v.abs() - h).abs() > EDGE_TOL {
                    return false;
                }
                Face {
                    axis: self.axis,
                    positive: v > 0.0,
                }
            }
        };
        if face.axis != self.axis || !self.side.admits(face.positive) {
            return false;
        }
        self.bounds
            .iter()
            .enumerate()
            .all(|(j, iv)| j == self.axis || iv.contains(x[j]))
    }

    /// Smallest `k ≥ axis` with `0 ∈ [a^m, b^m]` for every `m > k` (zero-based).
    ///
    /// This is the first coordinate subspace `Λ^{k+1}` met by the closure.
    pub fn box_index(&self) -> usize {
        let d = self.dim();
        let mut k = d - 1;
        while k > self.axis && self.bounds[k].closure_contains(0.0) {
            k -= 1;
        }
        k
    }

    /// Whether `a^j, b^j ≠ 0` for every `j > index`.
    pub fn box_case_eligible(&self, index: usize) -> bool {
        self.bounds[index + 1..]
            .iter()
            .all(|iv| iv.lo != 0.0 && iv.hi != 0.0)
    }
}

/// Boundary subsets for which exit frequencies are measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TargetSet {
    /// A rectangle on the faces of a box domain, in domain coordinates.
    Face(FaceRect),
    /// The set `ζ_L⁻¹(R)` for a rectangle `R` on the chart box `∂B_L`.
    Preimage(FaceRect),
}

impl TargetSet {
    pub fn rect(&self) -> &FaceRect {
        match self {
            TargetSet::Face(r) | TargetSet::Preimage(r) => r,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub name: String,
    #[serde(flatten)]
    pub set: TargetSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Largest measured residual (0 for purely structural checks).
    pub residual: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    fn push(&mut self, name: &str, passed: bool, residual: f64, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.to_string(),
            passed,
            residual,
            detail: detail.into(),
        });
    }

    fn summary(&self) -> String {
        self.failures()
            .map(|c| format!("{}: {}", c.name, c.detail))
            .collect::<Vec<_>>()
            .join("; ")
    }
}

/// Checks every standing assumption and reports each with its residual.
///
/// Failures are collected, not raised; [`Model::new`] turns them into an error.
pub fn validate_system(spec: &SystemSpec, domain: &Domain) -> ValidationReport {
    let mut report = ValidationReport::default();
    let d = spec.dim();

    let shapes_ok = d >= 1
        && spec.sigma.nrows() == d
        && spec.sigma.ncols() >= d
        && spec.xi0.len() == d
        && domain.dim().is_none_or(|dd| dd == d)
        && (!matches!(spec.drift, Drift::Shear { .. }) || d >= 2);
    report.push(
        "dimensions",
        shapes_ok,
        0.0,
        if shapes_ok {
            format!("d = {d}, n = {}", spec.noise_dim())
        } else {
            format!(
                "inconsistent shapes: {} eigenvalues, sigma {}x{}, xi0 of length {}",
                d,
                spec.sigma.nrows(),
                spec.sigma.ncols(),
                spec.xi0.len()
            )
        },
    );
    if !shapes_ok {
        return report;
    }

    let positive = spec.lambdas.iter().all(|l| l.is_finite() && *l > 0.0);
    let decreasing = spec.lambdas.windows(2).all(|w| w[0] > w[1]);
    let gap = spec
        .lambdas
        .windows(2)
        .map(|w| w[0] - w[1])
        .fold(f64::INFINITY, f64::min);
    report.push(
        "eigenvalue ordering",
        positive && decreasing,
        if gap.is_finite() { gap } else { 0.0 },
        if !positive {
            "eigenvalues must be positive".to_string()
        } else if !decreasing {
            "eigenvalues not strictly decreasing".to_string()
        } else {
            "λ_1 > ... > λ_d > 0".to_string()
        },
    );

    let sv = spec.sigma.clone().svd(false, false).singular_values;
    let smax = sv.max();
    let smin = sv.iter().cloned().take(d).fold(f64::INFINITY, f64::min);
    let surjective = smin.is_finite() && smin > 1e-10 * smax.max(1.0);
    report.push(
        "sigma(0) surjective",
        surjective,
        smin,
        if surjective {
            format!("smallest singular value {smin:.3e}")
        } else {
            "σ(0) not surjective".to_string()
        },
    );

    if let Drift::Shear { c } = spec.drift {
        let nonres = (2.0 * spec.lambdas[0] - spec.lambdas[1]).abs() > 1e-12 && c.is_finite();
        report.push(
            "shear non-resonance",
            nonres,
            0.0,
            if nonres { "2λ_1 ≠ λ_2" } else { "shear requires 2λ_1 ≠ λ_2 and finite c" },
        );
    }

    // Conjugacy identities at the origin.
    let zero = vec![0.0; d];
    let f0 = spec.chart(&zero);
    let j0 = spec.chart_jacobian(&zero);
    let r0 = f0.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let rj = (j0 - DMatrix::<f64>::identity(d, d)).abs().max();
    report.push(
        "f(0) = 0, Df(0) = I",
        r0 <= VALIDATION_TOL && rj <= VALIDATION_TOL,
        r0.max(rj),
        format!("residual {:.3e}", r0.max(rj)),
    );

    let lam = DVector::from_column_slice(&spec.lambdas);
    let mut inv_res: f64 = 0.0;
    let mut push_res: f64 = 0.0;
    for x in domain.interior_samples(d, VALIDATION_SAMPLES) {
        let fx = spec.chart(&x);
        let back = spec.chart_inv(&fx);
        let scale = 1.0 + norm(&x);
        inv_res = inv_res.max(dist(&back, &x) / scale);

        let b = DVector::from_vec(spec.drift(&x));
        let lhs = spec.chart_jacobian(&x) * &b;
        let rhs = lam.component_mul(&DVector::from_vec(fx));
        push_res = push_res.max((lhs - rhs).norm() / (1.0 + b.norm()));
    }
    report.push(
        "conjugacy inverse",
        inv_res <= VALIDATION_TOL,
        inv_res,
        format!("max |f⁻¹(f(x)) - x| / (1 + |x|) = {inv_res:.3e}"),
    );
    report.push(
        "conjugacy pushforward",
        push_res <= VALIDATION_TOL,
        push_res,
        format!("max |Df·b - diag(λ) f| / (1 + |b|) = {push_res:.3e}"),
    );

    let domain_ok = match domain {
        Domain::Box { half_width } => half_width.is_finite() && *half_width > 0.0,
        Domain::Ellipsoid { semi_axes } => semi_axes.iter().all(|a| a.is_finite() && *a > 0.0),
    } && domain.contains(&zero);
    report.push(
        "domain",
        domain_ok,
        0.0,
        if domain_ok { "contains the origin" } else { "domain is degenerate or misses the origin" },
    );
    if !domain_ok {
        return report;
    }

    let mut worst = f64::INFINITY;
    for p in domain.boundary_samples(d, VALIDATION_SAMPLES) {
        let n = domain.outward_normal(&p);
        let b = spec.drift(&p);
        let dot: f64 = n.iter().zip(&b).map(|(a, c)| a * c).sum();
        worst = worst.min(dot / (1.0 + norm(&b)));
    }
    report.push(
        "transversality",
        worst > 0.0,
        worst,
        format!("min ⟨n, b⟩ / (1 + |b|) on sampled boundary points = {worst:.3e}"),
    );

    report
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// A validated system together with its domain and chart box half-width `L`.
#[derive(Debug, Clone)]
pub struct Model {
    system: SystemSpec,
    domain: Domain,
    chart_half_width: f64,
    report: ValidationReport,
}

impl Model {
    pub fn new(system: SystemSpec, domain: Domain, chart_half_width: f64) -> Result<Self> {
        let mut report = validate_system(&system, &domain);
        if report.passed() {
            let ok = chart_half_width.is_finite() && chart_half_width > 0.0;
            let d = system.dim();
            let inside = ok
                && Domain::Box {
                    half_width: chart_half_width,
                }
                .boundary_samples(d, VALIDATION_SAMPLES)
                .iter()
                .chain(std::iter::once(&vec![chart_half_width; d]))
                .all(|q| domain.level(&system.chart_inv(q)) <= EDGE_TOL);
            report.push(
                "chart box inside domain",
                inside,
                chart_half_width,
                if inside {
                    format!("f⁻¹(B_L) ⊂ cl(D) for L = {chart_half_width}")
                } else {
                    format!("f⁻¹(B_L) is not inside cl(D) for L = {chart_half_width}")
                },
            );
        }
        if !report.passed() {
            return Err(Error::Validation(report.summary()));
        }
        Ok(Model {
            system,
            domain,
            chart_half_width,
            report,
        })
    }

    pub fn system(&self) -> &SystemSpec {
        &self.system
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.system.dim()
    }

    /// Half-width `L` of the chart box `B_L`.
    pub fn chart_half_width(&self) -> f64 {
        self.chart_half_width
    }

    pub fn report(&self) -> &ValidationReport {
        &self.report
    }

    /// Same system and domain with a different chart box.
    pub fn with_chart_half_width(&self, l: f64) -> Result<Self> {
        Model::new(self.system.clone(), self.domain.clone(), l)
    }

    /// Whether the closed-form linear flow applies (linear drift, box domain).
    pub fn is_linear_box(&self) -> bool {
        self.system.is_linear() && matches!(self.domain, Domain::Box { .. })
    }

    /// The two points of `N¹`, where the leading invariant curve leaves `D`.
    pub fn leading_exit_points(&self, settings: &FlowSettings) -> Result<[Vec<f64>; 2]> {
        let d = self.dim();
        let mut out: [Vec<f64>; 2] = [vec![], vec![]];
        for (slot, s) in out.iter_mut().zip([1.0, -1.0]) {
            let mut q = vec![0.0; d];
            q[0] = s * self.chart_half_width;
            *slot = flow::poincare_psi(&self.system.chart_inv(&q), self, settings)?;
        }
        Ok(out)
    }
}

/// Zero-based index `i(A)` of a target: the first `k` with `cl(A) ∩ N^{k+1} ≠ ∅`.
///
/// For rectangles on box faces the index is read off the intervals. For the
/// built-in drifts the conjugacy preserves every `Λ^k` with `k ≥ 2`, so only
/// the leading trace `N¹` needs the flow.
pub fn index_of_target(target: &TargetSet, model: &Model) -> Result<usize> {
    let d = model.dim();
    let rect = target.rect();
    if rect.dim() != d {
        return Err(Error::invalid(format!(
            "target has {} coordinates, system has {d}",
            rect.dim()
        )));
    }
    match target {
        TargetSet::Preimage(r) => {
            r.check_inside(model.chart_half_width())?;
            Ok(r.box_index())
        }
        TargetSet::Face(r) => {
            let h = match model.domain() {
                Domain::Box { half_width } => *half_width,
                Domain::Ellipsoid { .. } => {
                    return Err(Error::invalid("face targets need a box domain; use a preimage target"))
                }
            };
            for (j, iv) in r.bounds.iter().enumerate() {
                if j != r.axis && (iv.lo < -h - EDGE_TOL || iv.hi > h + EDGE_TOL) {
                    return Err(Error::invalid(format!(
                        "interval for coordinate {} leaves the face [-{h}, {h}]",
                        j + 1
                    )));
                }
            }
            if model.system().is_linear() {
                return Ok(r.box_index());
            }
            let n1 = model.leading_exit_points(&FlowSettings::default())?;
            let hits_n1 = n1.iter().any(|p| {
                let face = model.domain().face_of(p).expect("box face");
                face.axis == r.axis
                    && r.side.admits(face.positive)
                    && r.bounds
                        .iter()
                        .enumerate()
                        .all(|(j, iv)| j == r.axis || iv.closure_contains(p[j]))
            });
            Ok(if hits_n1 { 0 } else { r.box_index().max(1) })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn box1() -> Domain {
        Domain::Box { half_width: 1.0 }
    }

    #[test]
    fn linear_identity_passes_everything() {
        let spec = SystemSpec::linear_identity(&[2.0, 1.0]);
        let report = validate_system(&spec, &box1());
        assert!(report.passed(), "{report:?}");
        for c in &report.checks {
            if c.name.starts_with("conjugacy") {
                assert_eq!(c.residual, 0.0);
            }
        }
    }

    #[test]
    fn equal_eigenvalues_fail() {
        let spec = SystemSpec::linear_identity(&[1.0, 1.0]);
        let report = validate_system(&spec, &box1());
        assert!(!report.passed());
        let bad: Vec<_> = report.failures().map(|c| c.detail.clone()).collect();
        assert!(bad.iter().any(|m| m.contains("not strictly decreasing")), "{bad:?}");
    }

    #[test]
    fn zero_row_sigma_fails() {
        let mut spec = SystemSpec::linear_identity(&[2.0, 1.0]);
        spec.sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 0.0]);
        let report = validate_system(&spec, &box1());
        assert!(report.failures().any(|c| c.detail.contains("not surjective")));
    }

    #[test]
    fn validation_is_pure() {
        let spec = SystemSpec {
            lambdas: vec![2.0, 1.0],
            drift: Drift::Shear { c: 0.5 },
            sigma: DMatrix::identity(2, 2),
            xi0: vec![0.0, 0.0],
        };
        assert_eq!(validate_system(&spec, &box1()), validate_system(&spec, &box1()));
    }

    #[test]
    fn shear_conjugacy_is_exact() {
        let spec = SystemSpec {
            lambdas: vec![2.0, 1.0],
            drift: Drift::Shear { c: 0.5 },
            sigma: DMatrix::identity(2, 2),
            xi0: vec![0.0, 0.0],
        };
        let report = validate_system(&spec, &box1());
        assert!(report.passed(), "{report:?}");
        let push = report.checks.iter().find(|c| c.name == "conjugacy pushforward").unwrap();
        assert!(push.residual < 1e-14);
    }

    #[test]
    fn strong_shear_breaks_transversality() {
        let spec = SystemSpec {
            lambdas: vec![2.0, 1.0],
            drift: Drift::Shear { c: 3.0 },
            sigma: DMatrix::identity(2, 2),
            xi0: vec![0.0, 0.0],
        };
        let report = validate_system(&spec, &box1());
        assert!(report.failures().any(|c| c.name == "transversality"));
    }

    #[test]
    fn model_refuses_invalid_systems() {
        let spec = SystemSpec::linear_identity(&[1.0, 2.0]);
        assert!(matches!(Model::new(spec, box1(), 0.5), Err(Error::Validation(_))));
        let spec = SystemSpec::linear_identity(&[2.0, 1.0]);
        assert!(Model::new(spec, box1(), 1.5).is_err());
    }

    fn model3() -> Model {
        Model::new(SystemSpec::linear_identity(&[2.0, 1.0, 0.5]), box1(), 0.5).unwrap()
    }

    #[test]
    fn index_examples() {
        let m = model3();
        let r = FaceRect::new(1, FaceSide::Both, vec![Interval::closed(-0.5, 0.5), Interval::closed(0.1, 0.4)]).unwrap();
        assert_eq!(index_of_target(&TargetSet::Face(r), &m).unwrap(), 2);
        let r = FaceRect::new(1, FaceSide::Both, vec![Interval::closed(-0.5, 0.5), Interval::closed(-0.4, 0.4)]).unwrap();
        assert_eq!(index_of_target(&TargetSet::Face(r), &m).unwrap(), 1);

        let m2 = Model::new(SystemSpec::linear_identity(&[2.0, 1.0]), box1(), 0.5).unwrap();
        let full = FaceRect::full_face(2, 0, FaceSide::Both, 1.0);
        assert_eq!(index_of_target(&TargetSet::Face(full), &m2).unwrap(), 0);
    }

    #[test]
    fn shear_index_uses_bent_leading_curve() {
        let spec = SystemSpec {
            lambdas: vec![2.0, 1.0],
            drift: Drift::Shear { c: 0.5 },
            sigma: DMatrix::identity(2, 2),
            xi0: vec![0.0, 0.0],
        };
        let m = Model::new(spec, box1(), 0.25).unwrap();
        let n1 = m.leading_exit_points(&FlowSettings::default()).unwrap();
        // The leading curve is x2 = κ x1² with κ = 0.5 / 3.
        assert!((n1[0][0] - 1.0).abs() < 1e-12 && (n1[0][1] - 1.0 / 6.0).abs() < 1e-8, "{n1:?}");
        // A side-face window that contains x2 = 1/6 but not x2 = 0.
        let r = FaceRect::new(0, FaceSide::Plus, vec![Interval::closed(0.1, 0.3)]).unwrap();
        assert_eq!(index_of_target(&TargetSet::Face(r.clone()), &m).unwrap(), 0);
        let lin = Model::new(SystemSpec::linear_identity(&[2.0, 1.0]), box1(), 0.25).unwrap();
        assert_eq!(index_of_target(&TargetSet::Face(r), &lin).unwrap(), 1);
    }

    #[test]
    fn box_segment_exit_lands_on_face() {
        let (theta, p, face) = box1().segment_exit(&[0.9, 0.0], &[1.1, 0.2]);
        assert!((theta - 0.5).abs() < 1e-15);
        assert_eq!(p[0], 1.0);
        assert!((p[1] - 0.1).abs() < 1e-15);
        assert_eq!(face, Some(Face { axis: 0, positive: true }));
    }

    #[test]
    fn ellipsoid_segment_exit_lands_on_surface() {
        let dom = Domain::Ellipsoid { semi_axes: vec![1.0, 2.0] };
        let (_, p, _) = dom.segment_exit(&[0.5, 0.5], &[1.2, 0.7]);
        assert!(dom.level(&p).abs() < 1e-12);
    }

    #[test]
    fn closed_set_convention_at_edges() {
        let iv = Interval {
            lo: 0.0,
            hi: 1.0,
            lo_closed: true,
            hi_closed: false,
        };
        assert!(iv.contains(5e-10));
        assert!(!iv.contains(1.0 - 5e-10));
        assert!(iv.contains(0.5));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn rect3(axis: usize, lo: [f64; 2], w: [f64; 2]) -> FaceRect {
            let others = (0..2)
                .map(|k| Interval::closed(lo[k], (lo[k] + w[k]).min(0.99)))
                .collect();
            FaceRect::new(axis, FaceSide::Both, others).unwrap()
        }

        proptest! {
            #[test]
            fn enlarging_never_increases_index(
                axis in 0usize..3,
                lo in prop::array::uniform2(-0.9f64..0.8),
                w in prop::array::uniform2(0.01f64..0.5),
                grow in prop::array::uniform2(0.0f64..0.5),
            ) {
                let small = rect3(axis, lo, w);
                let mut big = small.clone();
                let mut k = 0;
                for (j, iv) in big.bounds.iter_mut().enumerate() {
                    if j != axis {
                        iv.lo = (iv.lo - grow[k]).max(-0.99);
                        iv.hi = (iv.hi + grow[k]).min(0.99);
                        k += 1;
                    }
                }
                prop_assert!(big.box_index() <= small.box_index());
            }

            #[test]
            fn zero_containing_rectangles_index_is_axis(axis in 0usize..3, a in 0.01f64..0.9, b in 0.01f64..0.9) {
                let r = FaceRect::new(axis, FaceSide::Plus, vec![Interval::closed(-a, b); 2]).unwrap();
                prop_assert_eq!(r.box_index(), axis);
            }
        }
    }
}
