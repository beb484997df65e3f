//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use nbdnet::data::CalibrationSummary;

/// Adaptive Simpson quadrature of `f` over `[a, b]` to relative accuracy
/// `tol` of the running estimate.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, h: f64) -> f64 {
        h / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, m - a);
        let right = simpson(fm, frm, fb, b - m);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    if b <= a {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = simpson(fa, fm, fb, b - a);
    // absolute tolerance scaled by a crude magnitude estimate
    let scale = (fa.abs() + fb.abs() + fm.abs()).max(f64::MIN_POSITIVE) * (b - a);
    recurse(f, a, b, fa, fm, fb, whole, tol * scale, 60)
}

/// The likelihood as the dropout-time integral of
/// `lambda^x mu e^{-(lambda+mu) tau}` over `(t_x, T)` plus the survival mass
/// `lambda^x e^{-(lambda+mu) T}`; returned as `(ln total, ln survival)`.
///
/// `lambda^x e^{-theta t_x}` is factored out so the quadrature runs on an
/// O(1) integrand.
pub fn likelihood_by_quadrature(x: u32, t_x: f64, t_cal: f64, lambda: f64, mu: f64) -> (f64, f64) {
    let theta = lambda + mu;
    let gap = t_cal - t_x;
    let death = adaptive_simpson(&|u: f64| mu * (-theta * u).exp(), 0.0, gap, 1e-13);
    let survival = (-theta * gap).exp();
    let prefix = x as f64 * lambda.ln() - theta * t_x;
    let ln_surv = x as f64 * lambda.ln() - theta * t_cal;
    (prefix + (death + survival).ln(), ln_surv)
}

pub fn summary(x: u32, t_x: f64, t_cal: f64) -> CalibrationSummary {
    CalibrationSummary::new(x, t_x, t_cal)
}

/// Central difference of `f` at `x` with step `h`.
pub fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    let m = a.abs().max(b.abs());
    if m == 0.0 {
        0.0
    } else {
        d / m
    }
}

/// One-sample Kolmogorov-Smirnov statistic against a continuous CDF.
pub fn ks_statistic(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    d
}

/// Asymptotic 1% critical value of the one-sample KS statistic.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.6276 / (n as f64).sqrt()
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

/// z-score of a sample mean against `target` using the sample sd.
pub fn mean_z(xs: &[f64], target: f64) -> f64 {
    let (m, sd) = mean_sd(xs);
    (m - target) / (sd / (xs.len() as f64).sqrt())
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, _) = mean_sd(a);
    let (mb, _) = mean_sd(b);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// The public CDNOW master file, from `CDNOW_MASTER` or the workspace
/// `data/` directory.
pub fn cdnow_path() -> Option<PathBuf> {
    if let Ok(p) = std::env::var("CDNOW_MASTER") {
        let p = PathBuf::from(p);
        return p.exists().then_some(p);
    }
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/CDNOW_master.txt");
    p.exists().then_some(p)
}
