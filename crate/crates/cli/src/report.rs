use std::fmt::Write;

use repexit::experiment::Summary;

pub fn table(s: &Summary) -> String {
    let r = &s.result;
    let mut out = String::new();
    let _ = writeln!(out, "campaign {} (config {}, seed {})", r.name, r.config_hash, r.seed);
    if r.cells.is_empty() || r.prediction.targets.is_empty() {
        let _ = writeln!(out, "no cells");
        return out;
    }
    for (t, pred) in r.prediction.targets.iter().enumerate() {
        let _ = writeln!(
            out,
            "\ntarget {}  (index {}, rho = {}, mu = {:.6})",
            pred.name, pred.index, pred.rho, pred.mu
        );
        let _ = writeln!(
            out,
            "  {:>8}  {:>11}  {:>9}  {:>11}  {:>25}  {:>11}  status",
            "eps", "n", "k", "p_hat", "95% CI", "mu eps^rho"
        );
        for c in &r.cells {
            let tc = &c.targets[t];
            let _ = writeln!(
                out,
                "  {:>8}  {:>11}  {:>9}  {:>11.5e}  [{:>11.5e}, {:>11.5e}]  {:>11.5e}  {}",
                c.epsilon,
                c.trials,
                tc.hits,
                tc.p_hat,
                tc.wilson[0],
                tc.wilson[1],
                tc.predicted,
                if c.is_ok() { "ok" } else { "aborted" }
            );
        }
        let Some(a) = s.analysis.targets.get(t) else {
            continue;
        };
        match (&a.fit, &a.fit_error) {
            (Some(f), _) => {
                let _ = writeln!(
                    out,
                    "  slope     fitted {:.4} ± {:.4}   predicted {:.4}   {}",
                    f.slope,
                    f.slope_se,
                    a.rho,
                    match a.exponent_in_band {
                        Some(true) => format!("within ±{}", s.analysis.exponent_band),
                        _ => format!("outside ±{}", s.analysis.exponent_band),
                    }
                );
                let _ = writeln!(
                    out,
                    "  constant  fitted {:.4}   predicted {:.4}   ratio {}",
                    f.constant,
                    a.mu,
                    a.constant_ratio.map_or("-".into(), |q| format!("{q:.3}"))
                );
            }
            (None, Some(e)) => {
                let _ = writeln!(out, "  slope     no fit: {e}");
            }
            _ => {}
        }
        for g in &a.gof {
            if let Some(rep) = &g.report {
                let ks: Vec<String> = rep
                    .coordinates
                    .iter()
                    .map(|c| format!("x{} KS p = {:.3}", c.coordinate, c.ks.p_value))
                    .collect();
                let face = rep
                    .face_weight
                    .as_ref()
                    .map_or(String::new(), |b| format!("faces p = {:.3}", b.p_value));
                let _ = writeln!(
                    out,
                    "  law at eps = {}: n = {}, {} {}  {}",
                    g.epsilon,
                    rep.n,
                    ks.join(", "),
                    face,
                    if rep.passed { "pass" } else { "FAIL" }
                );
            }
        }
        for c in &a.collapse {
            match &c.fit {
                Some(f) if f.exact => {
                    let _ = writeln!(out, "  x{} collapse: exact (identically 0)", c.coordinate);
                }
                Some(f) => {
                    let _ = writeln!(
                        out,
                        "  x{} collapse slope {:.4} (expected {:.4})",
                        c.coordinate,
                        f.slope.unwrap_or(f64::NAN),
                        c.expected_slope
                    );
                }
                None => {}
            }
        }
    }
    out
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
const W: f64 = 640.0;
const H: f64 = 480.0;
const M: f64 = 60.0;

struct Axes {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Axes {
    fn px(&self, lx: f64) -> f64 {
        M + (lx - self.x0) / (self.x1 - self.x0) * (W - 2.0 * M)
    }

    fn py(&self, ly: f64) -> f64 {
        H - M - (ly - self.y0) / (self.y1 - self.y0) * (H - 2.0 * M)
    }
}

/// Log-log plot of `p̂` against ε with Wilson bars, the predicted `μ ε^ρ`
/// (dashed) and the fitted power law (solid).
pub fn svg(s: &Summary) -> String {
    let r = &s.result;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for c in &r.cells {
        xs.push(c.epsilon.log10());
        for t in &c.targets {
            for v in [t.wilson[0], t.wilson[1], t.predicted] {
                if v > 0.0 {
                    ys.push(v.log10());
                }
            }
        }
    }
    let range = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (-1.0, 0.0)
        } else if hi - lo < 1e-9 {
            (lo - 0.5, hi + 0.5)
        } else {
            let pad = 0.05 * (hi - lo);
            (lo - pad, hi + pad)
        }
    };
    let (x0, x1) = range(&xs);
    let (y0, y1) = range(&ys);
    let ax = Axes { x0, x1, y0, y1 };
    let mut o = String::new();
    let _ = writeln!(
        o,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(o, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        o,
        r#"<rect x="{M}" y="{M}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * M,
        H - 2.0 * M
    );
    for k in (x0.ceil() as i32)..=(x1.floor() as i32) {
        let x = ax.px(k as f64);
        let _ = writeln!(
            o,
            r##"<line x1="{x:.1}" y1="{}" x2="{x:.1}" y2="{M}" stroke="#ddd"/><text x="{x:.1}" y="{}" text-anchor="middle">1e{k}</text>"##,
            H - M,
            H - M + 16.0
        );
    }
    for k in (y0.ceil() as i32)..=(y1.floor() as i32) {
        let y = ax.py(k as f64);
        let _ = writeln!(
            o,
            r##"<line x1="{M}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">1e{k}</text>"##,
            W - M,
            M - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        o,
        r#"<text x="{}" y="{}" text-anchor="middle">epsilon</text>"#,
        W / 2.0,
        H - 20.0
    );
    let _ = writeln!(
        o,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">exit probability</text>"#,
        H / 2.0,
        H / 2.0
    );
    let _ = writeln!(
        o,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="13">{}</text>"#,
        W / 2.0,
        escape(&r.name)
    );
    for (t, pred) in r.prediction.targets.iter().enumerate() {
        let color = COLORS[t % COLORS.len()];
        // Predicted line across the plotted ε range.
        if pred.mu > 0.0 {
            let ly = |lx: f64| pred.mu.log10() + pred.rho * lx;
            let _ = writeln!(
                o,
                r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-dasharray="5,4" clip-path="url(#plot)"/>"#,
                ax.px(x0),
                ax.py(ly(x0)),
                ax.px(x1),
                ax.py(ly(x1))
            );
        }
        if let Some(f) = s.analysis.targets.get(t).and_then(|a| a.fit.as_ref()) {
            let ly = |lx: f64| (f.intercept + f.slope * lx * std::f64::consts::LN_10) / std::f64::consts::LN_10;
            let _ = writeln!(
                o,
                r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-width="1.5" clip-path="url(#plot)"/>"#,
                ax.px(x0),
                ax.py(ly(x0)),
                ax.px(x1),
                ax.py(ly(x1))
            );
        }
        for c in &r.cells {
            let tc = &c.targets[t];
            if tc.p_hat <= 0.0 {
                continue;
            }
            let x = ax.px(c.epsilon.log10());
            if tc.wilson[0] > 0.0 {
                let _ = writeln!(
                    o,
                    r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="{color}"/>"#,
                    ax.py(tc.wilson[0].log10()),
                    ax.py(tc.wilson[1].log10())
                );
            }
            let _ = writeln!(
                o,
                r#"<circle cx="{x:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                ax.py(tc.p_hat.log10())
            );
        }
        let ly = M + 16.0 + 16.0 * t as f64;
        let _ = writeln!(
            o,
            r#"<circle cx="{}" cy="{:.1}" r="3" fill="{color}"/><text x="{}" y="{:.1}">{} (rho = {})</text>"#,
            M + 12.0,
            ly - 4.0,
            M + 20.0,
            ly,
            escape(&pred.name),
            pred.rho
        );
    }
    let _ = writeln!(
        o,
        r#"<defs><clipPath id="plot"><rect x="{M}" y="{M}" width="{}" height="{}"/></clipPath></defs>"#,
        W - 2.0 * M,
        H - 2.0 * M
    );
    o.push_str("</svg>\n");
    o
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
