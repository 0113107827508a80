//! One-dimensional quadrature building blocks.
//!
//! * [`integrate`]: globally adaptive Gauss–Kronrod 7/15.
//! * [`golub_welsch`]: Gauss rules from three-term recurrence coefficients.
//! * [`half_range_hermite`]: Gauss rules for the weight `v^p e^{-v²}` on
//!   `[0, ∞)`, built once per `(n, p)` and cached.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
// Gauss weights at XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

/// Value and error estimate of an adaptive integral.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
    pub evaluations: usize,
    /// False when the subdivision budget ran out before the tolerance was met.
    pub converged: bool,
}

fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for (k, (&x, &w)) in XGK.iter().zip(&WGK).take(7).enumerate() {
        let f1 = f(c - h * x);
        let f2 = f(c + h * x);
        kronrod += w * (f1 + f2);
        if k % 2 == 1 {
            gauss += WG[k / 2] * (f1 + f2);
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

struct Piece {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Piece {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Piece {}
impl PartialOrd for Piece {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Piece {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// Globally adaptive GK15 on `[a, b]`: bisects the piece with the largest
/// error until `error ≤ max(abs_tol, rel_tol·|value|)`.
pub fn integrate<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
    max_pieces: usize,
) -> Result<Estimate> {
    if a == b {
        return Ok(Estimate {
            value: 0.0,
            error: 0.0,
            evaluations: 0,
            converged: true,
        });
    }
    let (value, error) = gk15(&mut f, a, b);
    let mut evaluations = 15;
    let mut heap = BinaryHeap::new();
    heap.push(Piece { a, b, value, error });
    let (mut total, mut total_err) = (value, error);
    let mut converged = false;
    while heap.len() < max_pieces {
        if !total.is_finite() || !total_err.is_finite() {
            return Err(Error::Quadrature(format!("non-finite integrand on [{a}, {b}]")));
        }
        if total_err <= abs_tol.max(rel_tol * total.abs()) {
            converged = true;
            break;
        }
        let worst = heap.pop().expect("non-empty heap");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            // Interval can no longer be split in floating point.
            heap.push(worst);
            break;
        }
        let (v1, e1) = gk15(&mut f, worst.a, mid);
        let (v2, e2) = gk15(&mut f, mid, worst.b);
        evaluations += 30;
        total += v1 + v2 - worst.value;
        total_err += e1 + e2 - worst.error;
        heap.push(Piece { a: worst.a, b: mid, value: v1, error: e1 });
        heap.push(Piece { a: mid, b: worst.b, value: v2, error: e2 });
    }
    // Re-sum to shed accumulated cancellation from the running updates.
    let value: f64 = heap.iter().map(|p| p.value).sum();
    let error: f64 = heap.iter().map(|p| p.error).sum();
    if !value.is_finite() {
        return Err(Error::Quadrature(format!("non-finite integrand on [{a}, {b}]")));
    }
    Ok(Estimate {
        value,
        error,
        evaluations,
        converged: converged || error <= abs_tol.max(rel_tol * value.abs()),
    })
}

/// `∫_a^∞ f` (direction `+1`) or `∫_{-∞}^a f` (direction `-1`) through the
/// map `x = a ± s·t/(1-t)`, `t ∈ [0, 1)`.
pub fn integrate_half_line<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    direction: f64,
    scale: f64,
    abs_tol: f64,
    rel_tol: f64,
    max_pieces: usize,
) -> Result<Estimate> {
    integrate(
        |t| {
            let u = scale * t / (1.0 - t);
            let jac = scale / ((1.0 - t) * (1.0 - t));
            let v = f(a + direction * u);
            if v == 0.0 {
                0.0
            } else {
                v * jac
            }
        },
        0.0,
        1.0,
        abs_tol,
        rel_tol,
        max_pieces,
    )
}

/// A quadrature rule `Σ w_k g(x_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    pub fn apply<F: FnMut(f64) -> f64>(&self, mut g: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(x, w)| w * g(*x)).sum()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Gauss rule from recurrence coefficients `α_k` (k < n), `β_k` (1 ≤ k < n)
/// and total mass `μ₀`.
pub fn golub_welsch(alpha: &[f64], beta: &[f64], mu0: f64) -> Rule {
    let n = alpha.len();
    let mut j = DMatrix::zeros(n, n);
    for k in 0..n {
        j[(k, k)] = alpha[k];
        if k + 1 < n {
            let off = beta[k + 1].sqrt();
            j[(k, k + 1)] = off;
            j[(k + 1, k)] = off;
        }
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], mu0 * eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Rule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    }
}

fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// Gauss–Jacobi rule on `[-1, 1]` for the weight `(1-x)^a (1+x)^b`.
pub fn gauss_jacobi(n: usize, a: f64, b: f64) -> Rule {
    assert!(n >= 1 && a > -1.0 && b > -1.0);
    let mut alpha = vec![0.0; n];
    let mut beta = vec![0.0; n];
    let ab = a + b;
    alpha[0] = (b - a) / (ab + 2.0);
    for k in 1..n {
        let kf = k as f64;
        let s = 2.0 * kf + ab;
        alpha[k] = (b * b - a * a) / (s * (s + 2.0));
        beta[k] = if k == 1 {
            4.0 * (1.0 + a) * (1.0 + b) / ((2.0 + ab).powi(2) * (3.0 + ab))
        } else {
            4.0 * kf * (kf + a) * (kf + b) * (kf + ab) / (s * s * (s + 1.0) * (s - 1.0))
        };
    }
    let mu0 = ((ab + 1.0) * std::f64::consts::LN_2 + ln_gamma(a + 1.0) + ln_gamma(b + 1.0) - ln_gamma(ab + 2.0)).exp();
    golub_welsch(&alpha, &beta, mu0)
}

/// Gauss–Legendre rule on `[lo, hi]`.
pub fn gauss_legendre(n: usize, lo: f64, hi: f64) -> Rule {
    let base = gauss_jacobi(n, 0.0, 0.0);
    let (c, h) = (0.5 * (lo + hi), 0.5 * (hi - lo));
    Rule {
        nodes: base.nodes.iter().map(|x| c + h * x).collect(),
        weights: base.weights.iter().map(|w| h * w).collect(),
    }
}

/// Recurrence coefficients of the orthogonal polynomials of a discrete
/// measure, by the Stieltjes procedure on normalized polynomials.
fn stieltjes(points: &[f64], masses: &[f64], n: usize) -> (Vec<f64>, Vec<f64>, f64) {
    let mu0: f64 = masses.iter().sum();
    let m = points.len();
    let mut p_prev = vec![0.0; m];
    let mut p_cur = vec![1.0 / mu0.sqrt(); m];
    let mut alpha = vec![0.0; n];
    let mut beta = vec![0.0f64; n];
    for k in 0..n {
        alpha[k] = (0..m).map(|i| masses[i] * points[i] * p_cur[i] * p_cur[i]).sum();
        if k + 1 == n {
            break;
        }
        let sb: f64 = if k == 0 { 0.0 } else { beta[k].sqrt() };
        let q: Vec<f64> = (0..m)
            .map(|i| (points[i] - alpha[k]) * p_cur[i] - sb * p_prev[i])
            .collect();
        let b: f64 = (0..m).map(|i| masses[i] * q[i] * q[i]).sum();
        beta[k + 1] = b;
        let nb = b.sqrt();
        p_prev = std::mem::replace(&mut p_cur, q.into_iter().map(|v| v / nb).collect());
    }
    (alpha, beta, mu0)
}

const HALF_RANGE_CUTOFF: f64 = 20.0;
const PANEL_NODES: usize = 48;

fn build_half_range_hermite(n: usize, p: f64) -> Rule {
    // Discretize v^p e^{-v²} dv on [0, 20]: Gauss–Jacobi on [0, 1] absorbs the
    // endpoint power, unit Gauss–Legendre panels cover the rest.
    let mut points = Vec::new();
    let mut masses = Vec::new();
    let gj = gauss_jacobi(PANEL_NODES, 0.0, p);
    for (x, w) in gj.nodes.iter().zip(&gj.weights) {
        // v = (1 + x) / 2, so v^p = 2^{-p} (1 + x)^p and dv = dx / 2.
        let v = 0.5 * (1.0 + x);
        points.push(v);
        masses.push(w * 0.5f64.powf(p + 1.0) * (-v * v).exp());
    }
    let gl = gauss_jacobi(PANEL_NODES, 0.0, 0.0);
    for panel in 1..HALF_RANGE_CUTOFF as usize {
        let lo = panel as f64;
        for (x, w) in gl.nodes.iter().zip(&gl.weights) {
            let v = lo + 0.5 * (1.0 + x);
            points.push(v);
            masses.push(0.5 * w * v.powf(p) * (-v * v).exp());
        }
    }
    let (alpha, beta, mu0) = stieltjes(&points, &masses, n);
    golub_welsch(&alpha, &beta, mu0)
}

/// Gauss rule for `∫₀^∞ v^p e^{-v²} g(v) dv` with `n` nodes (cached).
pub fn half_range_hermite(n: usize, p: f64) -> Arc<Rule> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, u64), Arc<Rule>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (n, p.to_bits());
    if let Some(rule) = cache.lock().expect("rule cache").get(&key) {
        return rule.clone();
    }
    let rule = Arc::new(build_half_range_hermite(n, p));
    cache.lock().expect("rule cache").insert(key, rule.clone());
    rule
}
