//! Exponent fits, binomial intervals and goodness-of-fit checks.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, Discrete};

use crate::error::{Error, Result};
use crate::predict::ConditionalLaw;

/// Minimum hits per ladder point for an exponent fit.
pub const MIN_HITS: u64 = 25;
/// Minimum conditioned samples for a goodness-of-fit test.
pub const MIN_GOF_SAMPLES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LadderPoint {
    pub epsilon: f64,
    pub hits: u64,
    pub trials: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub intercept_se: f64,
    /// `exp(intercept)`: the fitted constant in `p ≈ c ε^slope`.
    pub constant: f64,
    pub weights: Vec<f64>,
    pub r_squared: f64,
}

/// Weighted least squares of `log(k/n)` on `log ε` with delta-method weights
/// `1 / var(log p̂) = k / (1 - p̂)`.
pub fn fit_exponent(points: &[LadderPoint]) -> Result<PowerLawFit> {
    if points.len() < 3 {
        return Err(Error::UnderPowered(format!(
            "an exponent fit needs at least 3 ladder points, got {}",
            points.len()
        )));
    }
    for p in points {
        if p.hits == 0 {
            return Err(Error::UnderPowered(format!("no hits at ε = {}", p.epsilon)));
        }
        if p.hits < MIN_HITS {
            return Err(Error::UnderPowered(format!(
                "only {} hits at ε = {} (need {MIN_HITS})",
                p.hits, p.epsilon
            )));
        }
        if p.hits > p.trials || !(p.epsilon > 0.0) {
            return Err(Error::invalid(format!("inconsistent ladder point {p:?}")));
        }
    }
    let xs: Vec<f64> = points.iter().map(|p| p.epsilon.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| (p.hits as f64 / p.trials as f64).ln()).collect();
    let weights: Vec<f64> = points
        .iter()
        .map(|p| {
            let ph = p.hits as f64 / p.trials as f64;
            // Floor keeps p̂ = 1 cells finite.
            let var = ((1.0 - ph) / p.hits as f64).max(0.25 / (p.trials as f64 * p.hits as f64));
            1.0 / var
        })
        .collect();
    let sw: f64 = weights.iter().sum();
    let mx = weights.iter().zip(&xs).map(|(w, x)| w * x).sum::<f64>() / sw;
    let my = weights.iter().zip(&ys).map(|(w, y)| w * y).sum::<f64>() / sw;
    let sxx: f64 = weights.iter().zip(&xs).map(|(w, x)| w * (x - mx).powi(2)).sum();
    let sxy: f64 = weights
        .iter()
        .zip(xs.iter().zip(&ys))
        .map(|(w, (x, y))| w * (x - mx) * (y - my))
        .sum();
    if !(sxx > 0.0) {
        return Err(Error::invalid("ladder needs at least two distinct ε values"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    // Variances are known (not estimated), so the SEs come from (XᵀWX)⁻¹.
    let slope_se = (1.0 / sxx).sqrt();
    let intercept_se = (1.0 / sw + mx * mx / sxx).sqrt();
    let ss_res: f64 = weights
        .iter()
        .zip(xs.iter().zip(&ys))
        .map(|(w, (x, y))| w * (y - intercept - slope * x).powi(2))
        .sum();
    let ss_tot: f64 = weights.iter().zip(&ys).map(|(w, y)| w * (y - my).powi(2)).sum();
    Ok(PowerLawFit {
        slope,
        intercept,
        slope_se,
        intercept_se,
        constant: intercept.exp(),
        weights,
        r_squared: if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 },
    })
}

/// Wilson score interval for `k` successes out of `n` at normal quantile `z`.
pub fn wilson_interval(k: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let centre = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    ((centre - half).max(0.0).min(p), (centre + half).min(1.0).max(p))
}

/// Asymptotic Kolmogorov tail `P(K > x)`.
pub fn kolmogorov_p_value(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let p = if x < 1.18 {
        let c = -std::f64::consts::PI.powi(2) / (8.0 * x * x);
        let cdf: f64 = (1..=20)
            .map(|k| ((2 * k - 1) as f64).powi(2) * c)
            .map(f64::exp)
            .sum::<f64>()
            * (2.0 * std::f64::consts::PI).sqrt()
            / x;
        1.0 - cdf
    } else {
        2.0 * (1..=100)
            .map(|k| {
                let s = if k % 2 == 1 { 1.0 } else { -1.0 };
                s * (-2.0 * (k * k) as f64 * x * x).exp()
            })
            .sum::<f64>()
    };
    p.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub n: usize,
    pub statistic: f64,
    pub p_value: f64,
}

/// One-sample KS test of values already mapped to `[0, 1]` against U(0, 1).
pub fn ks_uniform(values: &[f64]) -> Result<KsResult> {
    let n = values.len();
    if n == 0 {
        return Err(Error::UnderPowered("KS test on an empty sample".into()));
    }
    let mut u: Vec<f64> = values.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    u.sort_by(f64::total_cmp);
    let nf = n as f64;
    let d = u
        .iter()
        .enumerate()
        .map(|(i, v)| ((i + 1) as f64 / nf - v).max(v - i as f64 / nf))
        .fold(0.0, f64::max);
    Ok(KsResult {
        n,
        statistic: d,
        p_value: kolmogorov_p_value(nf.sqrt() * d),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinomialResult {
    pub k: u64,
    pub n: u64,
    pub p: f64,
    pub p_value: f64,
}

/// Exact two-sided binomial test: total probability of outcomes no more likely than `k`.
pub fn binomial_test(k: u64, n: u64, p: f64) -> Result<BinomialResult> {
    if k > n || !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid("binomial test needs k ≤ n and p ∈ [0, 1]"));
    }
    let p_value = if p == 0.0 || p == 1.0 {
        let expected = if p == 0.0 { 0 } else { n };
        if k == expected {
            1.0
        } else {
            0.0
        }
    } else {
        let dist = Binomial::new(p, n).map_err(|e| Error::invalid(e.to_string()))?;
        let lk = dist.ln_pmf(k);
        let tol = 1e-7;
        (0..=n)
            .map(|i| dist.ln_pmf(i))
            .filter(|l| *l <= lk + tol)
            .map(f64::exp)
            .sum::<f64>()
            .min(1.0)
    };
    Ok(BinomialResult { k, n, p, p_value })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateKs {
    /// One-based coordinate.
    pub coordinate: usize,
    pub ks: KsResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransverseMedian {
    /// One-based coordinate.
    pub coordinate: usize,
    pub median_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoFReport {
    pub n: usize,
    pub alpha: f64,
    pub coordinates: Vec<CoordinateKs>,
    pub face_weight: Option<BinomialResult>,
    pub transverse: Vec<TransverseMedian>,
    pub passed: bool,
}

/// Tests conditioned exit points (in the law's coordinates, with face signs)
/// against the predicted limit law.
///
/// Every coordinate `j < i` is tested by KS against the uniform marginal,
/// pooled over faces after rescaling each face's interval to `[0, 1]`. Face
/// counts get an exact binomial test against the predicted weights.
/// Coordinates `j > i` only report `median |x^j|`.
pub fn test_conditional_law(samples: &[(Vec<f64>, bool)], law: &ConditionalLaw, alpha: f64) -> Result<GoFReport> {
    let n = samples.len();
    if n < MIN_GOF_SAMPLES {
        return Err(Error::UnderPowered(format!(
            "goodness of fit needs at least {MIN_GOF_SAMPLES} conditioned samples, got {n}"
        )));
    }
    let i = law.index;
    let d = samples[0].0.len();
    let mut coordinates = Vec::new();
    for j in 0..i {
        let u: Vec<f64> = samples
            .iter()
            .map(|(x, positive)| match law.component(*positive) {
                Some(c) => {
                    let iv = c.region[j];
                    if iv.hi > iv.lo {
                        (x[j] - iv.lo) / (iv.hi - iv.lo)
                    } else {
                        0.5
                    }
                }
                // Off-support face: count as an extreme value.
                None => 0.0,
            })
            .collect();
        coordinates.push(CoordinateKs {
            coordinate: j + 1,
            ks: ks_uniform(&u)?,
        });
    }
    let plus = samples.iter().filter(|s| s.1).count() as u64;
    let face_weight = Some(binomial_test(plus, n as u64, law.weight(true).clamp(0.0, 1.0))?);
    let transverse = (i + 1..d)
        .map(|j| TransverseMedian {
            coordinate: j + 1,
            median_abs: median(samples.iter().map(|s| s.0[j].abs()).collect()),
        })
        .collect();
    let passed = coordinates.iter().all(|c| c.ks.p_value >= alpha)
        && face_weight.as_ref().is_none_or(|b| b.p_value >= alpha);
    Ok(GoFReport {
        n,
        alpha,
        coordinates,
        face_weight,
        transverse,
        passed,
    })
}

pub fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseFit {
    /// Slope of `log median|x^j|` on `log ε`; `None` when every median is 0.
    pub slope: Option<f64>,
    pub slope_se: Option<f64>,
    pub medians: Vec<(f64, f64)>,
    /// All medians vanish: the coordinate is identically 0.
    pub exact: bool,
}

/// OLS of `log median|x^j|` on `log ε` across a ladder.
pub fn transverse_collapse_rate(per_epsilon: &[(f64, Vec<f64>)]) -> Result<CollapseFit> {
    if per_epsilon.len() < 2 {
        return Err(Error::UnderPowered("collapse rate needs at least 2 ε values".into()));
    }
    if per_epsilon.iter().any(|(_, v)| v.is_empty()) {
        return Err(Error::UnderPowered("collapse rate needs samples at every ε".into()));
    }
    let medians: Vec<(f64, f64)> = per_epsilon
        .iter()
        .map(|(e, v)| (*e, median(v.iter().map(|x| x.abs()).collect())))
        .collect();
    if medians.iter().all(|m| m.1 == 0.0) {
        return Ok(CollapseFit {
            slope: None,
            slope_se: None,
            medians,
            exact: true,
        });
    }
    if medians.iter().any(|m| m.1 == 0.0) {
        return Err(Error::UnderPowered("a median is 0 at some but not all ε".into()));
    }
    let xs: Vec<f64> = medians.iter().map(|m| m.0.ln()).collect();
    let ys: Vec<f64> = medians.iter().map(|m| m.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::invalid("collapse rate needs distinct ε values"));
    }
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / sxx;
    let slope_se = if xs.len() > 2 {
        let res: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (y - my - slope * (x - mx)).powi(2))
            .sum();
        Some((res / (n - 2.0) / sxx).sqrt())
    } else {
        None
    };
    Ok(CollapseFit {
        slope: Some(slope),
        slope_se,
        medians,
        exact: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Interval;
    use crate::predict::{LawComponent, LawCoordinates};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Binomial as BinomialDist, Distribution};

    fn uniform_law(weight_plus: f64) -> ConditionalLaw {
        ConditionalLaw {
            index: 1,
            coordinates: LawCoordinates::Domain,
            components: vec![
                LawComponent {
                    positive: true,
                    weight: weight_plus,
                    region: vec![Interval::closed(-1.0, 1.0)],
                },
                LawComponent {
                    positive: false,
                    weight: 1.0 - weight_plus,
                    region: vec![Interval::closed(-1.0, 1.0)],
                },
            ],
        }
    }

    #[test]
    fn noiseless_power_law_is_recovered() {
        let n = 1_000_000_000u64;
        let pts: Vec<LadderPoint> = [0.4, 0.2, 0.1, 0.05]
            .iter()
            .map(|e| LadderPoint {
                epsilon: *e,
                hits: (0.5 * e * n as f64) as u64,
                trials: n,
            })
            .collect();
        let fit = fit_exponent(&pts).unwrap();
        assert!((fit.slope - 1.0).abs() < 1e-12);
        assert!((fit.constant - 0.5).abs() < 1e-12);
    }

    #[test]
    fn binomial_power_law_within_two_se() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 1_000_000u64;
        let pts: Vec<LadderPoint> = [0.3, 0.2, 0.1, 0.05]
            .iter()
            .map(|e: &f64| LadderPoint {
                epsilon: *e,
                hits: BinomialDist::new(n, 0.3 * e.powf(0.75)).unwrap().sample(&mut rng),
                trials: n,
            })
            .collect();
        let fit = fit_exponent(&pts).unwrap();
        assert!((fit.slope - 0.75).abs() < 2.0 * fit.slope_se, "{fit:?}");
    }

    #[test]
    fn constant_probability_gives_zero_slope() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<LadderPoint> = [0.3, 0.2, 0.1, 0.05]
            .iter()
            .map(|e| LadderPoint {
                epsilon: *e,
                hits: BinomialDist::new(100_000, 0.4).unwrap().sample(&mut rng),
                trials: 100_000,
            })
            .collect();
        let fit = fit_exponent(&pts).unwrap();
        assert!(fit.slope.abs() < 2.0 * fit.slope_se, "{fit:?}");
    }

    #[test]
    fn fit_refuses_thin_data() {
        let p = |k| LadderPoint {
            epsilon: 0.1,
            hits: k,
            trials: 1000,
        };
        assert!(matches!(fit_exponent(&[p(100), p(100)]), Err(Error::UnderPowered(_))));
        assert!(matches!(fit_exponent(&[p(100), p(0), p(100)]), Err(Error::UnderPowered(_))));
    }

    #[test]
    fn kolmogorov_tail_values() {
        // Known quantiles of the Kolmogorov distribution.
        assert!((kolmogorov_p_value(1.358) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_p_value(1.628) - 0.01).abs() < 1e-3);
        assert!((kolmogorov_p_value(0.828) - 0.5).abs() < 2e-3);
        // The two series agree at the switch point.
        let a = 1.0 - kolmogorov_p_value(1.1799999);
        let b = 1.0 - kolmogorov_p_value(1.18);
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn binomial_test_examples() {
        assert!((binomial_test(5, 10, 0.5).unwrap().p_value - 1.0).abs() < 1e-12);
        // P(X ≤ 1) + P(X ≥ 9) for Bin(10, 1/2) = 22/1024.
        assert!((binomial_test(1, 10, 0.5).unwrap().p_value - 22.0 / 1024.0).abs() < 1e-12);
        assert_eq!(binomial_test(3, 3, 1.0).unwrap().p_value, 1.0);
        assert_eq!(binomial_test(2, 3, 1.0).unwrap().p_value, 0.0);
    }

    #[test]
    fn gof_null_calibration() {
        let law = uniform_law(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let reps = 200;
        let mut rejections = 0;
        for _ in 0..reps {
            let s: Vec<(Vec<f64>, bool)> = (0..300)
                .map(|_| (vec![rng.random_range(-1.0..1.0), 1.0], rng.random_bool(0.5)))
                .collect();
            let r = test_conditional_law(&s, &law, 0.05).unwrap();
            if r.coordinates[0].ks.p_value < 0.05 {
                rejections += 1;
            }
        }
        // Nominal 5%: 10 ± 3σ (σ ≈ 3.1).
        assert!(rejections <= 20, "{rejections} rejections");
    }

    #[test]
    fn gof_rejects_point_mass() {
        let law = uniform_law(0.5);
        let s: Vec<(Vec<f64>, bool)> = (0..400).map(|k| (vec![0.3, 1.0], k % 2 == 0)).collect();
        let r = test_conditional_law(&s, &law, 0.01).unwrap();
        assert!(!r.passed);
        assert!(r.coordinates[0].ks.statistic > 0.6);
        assert!(matches!(test_conditional_law(&s[..50], &law, 0.01), Err(Error::UnderPowered(_))));
    }

    #[test]
    fn collapse_rate_cases() {
        let per: Vec<(f64, Vec<f64>)> = [0.2, 0.1, 0.05]
            .iter()
            .map(|e: &f64| (*e, vec![e.sqrt(), -e.sqrt(), 2.0 * e.sqrt()]))
            .collect();
        let fit = transverse_collapse_rate(&per).unwrap();
        assert!((fit.slope.unwrap() - 0.5).abs() < 1e-12);
        let zero = vec![(0.2, vec![0.0; 5]), (0.1, vec![0.0; 5])];
        assert!(transverse_collapse_rate(&zero).unwrap().exact);
        assert!(transverse_collapse_rate(&per[..1]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn wilson_contains_estimate(n in 1u64..100_000, frac in 0.0f64..=1.0, z in 0.5f64..4.0) {
                let k = ((n as f64) * frac).floor() as u64;
                let (lo, hi) = wilson_interval(k, n, z);
                let p = k as f64 / n as f64;
                prop_assert!(0.0 <= lo && lo <= p && p <= hi && hi <= 1.0);
            }

            #[test]
            fn p_values_are_probabilities(x in 0.0f64..5.0, k in 0u64..50, p in 0.0f64..=1.0) {
                let q = kolmogorov_p_value(x);
                prop_assert!((0.0..=1.0).contains(&q));
                let b = binomial_test(k, 50, p).unwrap().p_value;
                prop_assert!((0.0..=1.0).contains(&b));
            }

            #[test]
            fn fit_slope_is_scale_equivariant(scale in 0.2f64..5.0, seed in 0u64..1000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let pts: Vec<LadderPoint> = [0.3, 0.2, 0.1]
                    .iter()
                    .map(|e| LadderPoint { epsilon: *e, hits: rng.random_range(200..2000), trials: 100_000 })
                    .collect();
                let scaled: Vec<LadderPoint> = pts.iter().map(|p| LadderPoint { epsilon: p.epsilon * scale, ..*p }).collect();
                let a = fit_exponent(&pts).unwrap();
                let b = fit_exponent(&scaled).unwrap();
                prop_assert!((a.slope - b.slope).abs() < 1e-9);
                prop_assert!((b.intercept - (a.intercept - a.slope * scale.ln())).abs() < 1e-9);
            }

            #[test]
            fn gof_ignores_sample_order(seed in 0u64..500) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut s: Vec<(Vec<f64>, bool)> = (0..250)
                    .map(|_| (vec![rng.random_range(-1.0..1.0), 1.0, rng.random_range(-0.1..0.1)], rng.random_bool(0.4)))
                    .collect();
                let law = ConditionalLaw { index: 1, ..uniform_law(0.4) };
                let a = test_conditional_law(&s, &law, 0.01).unwrap();
                s.reverse();
                let b = test_conditional_law(&s, &law, 0.01).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
