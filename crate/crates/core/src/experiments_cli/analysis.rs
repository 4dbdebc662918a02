//! Crossing detection and finite-size data collapse.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::observables::DiagnosticsFit;

/// One finite-size series y(x) at system size n; x need not be sorted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub n: usize,
    pub points: Vec<(f64, f64)>,
}

impl Curve {
    pub fn new(n: usize, mut points: Vec<(f64, f64)>) -> Self {
        points.retain(|(x, y)| x.is_finite() && y.is_finite());
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        Curve { n, points }
    }

    fn range(&self) -> Option<(f64, f64)> {
        Some((self.points.first()?.0, self.points.last()?.0))
    }

    /// Piecewise-linear interpolation; None outside the sampled range.
    pub fn interpolate(&self, x: f64) -> Option<f64> {
        interpolate(&self.points, x)
    }
}

fn interpolate(points: &[(f64, f64)], x: f64) -> Option<f64> {
    let (first, last) = (points.first()?, points.last()?);
    if x < first.0 || x > last.0 {
        return None;
    }
    let i = points.partition_point(|p| p.0 < x);
    if i < points.len() && points[i].0 == x {
        return Some(points[i].1);
    }
    let (a, b) = (points[i - 1], points[i]);
    Some(a.1 + (b.1 - a.1) * (x - a.0) / (b.0 - a.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub x: f64,
    /// Standard deviation of the pairwise crossings (0 for a single pair).
    pub spread: f64,
    /// (n_a, n_b, x) for every pair that crosses.
    pub pairs: Vec<(usize, usize, f64)>,
}

/// First sign change of y_a - y_b on the merged grid of the overlap region.
fn pair_crossing(a: &Curve, b: &Curve) -> Result<Option<f64>> {
    let (a0, a1) = a.range().ok_or_else(|| Error::InvalidParameter("empty curve".into()))?;
    let (b0, b1) = b.range().ok_or_else(|| Error::InvalidParameter("empty curve".into()))?;
    let (lo, hi) = (a0.max(b0), a1.min(b1));
    if lo > hi {
        return Err(Error::InvalidParameter(format!("curves for N={} and N={} do not overlap", a.n, b.n)));
    }
    let mut grid: Vec<f64> =
        a.points.iter().chain(&b.points).map(|p| p.0).filter(|&x| x >= lo && x <= hi).collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let diff: Vec<(f64, f64)> = grid
        .iter()
        .map(|&x| (x, a.interpolate(x).unwrap() - b.interpolate(x).unwrap()))
        .collect();
    // Skip exact touches: only a strict change of sign across zeros counts.
    let mut prev: Option<(f64, f64)> = None;
    for &(x, d) in &diff {
        if d == 0.0 {
            continue;
        }
        if let Some((px, pd)) = prev {
            if pd.signum() != d.signum() {
                let zeros: Vec<f64> = diff.iter().filter(|p| p.0 > px && p.0 < x && p.1 == 0.0).map(|p| p.0).collect();
                if let Some(&z) = zeros.first() {
                    return Ok(Some(z));
                }
                return Ok(Some(px - pd * (x - px) / (d - pd)));
            }
        }
        prev = Some((x, d));
    }
    Ok(None)
}

/// Mean and spread of the pairwise crossings of linearly interpolated curves.
pub fn find_crossing(curves: &[Curve]) -> Result<Crossing> {
    if curves.len() < 2 {
        return Err(Error::InvalidParameter("need at least two sizes".into()));
    }
    let mut pairs = Vec::new();
    for i in 0..curves.len() {
        for j in i + 1..curves.len() {
            if let Some(x) = pair_crossing(&curves[i], &curves[j])? {
                pairs.push((curves[i].n, curves[j].n, x));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::NoCrossing);
    }
    let m = pairs.len() as f64;
    let x = pairs.iter().map(|p| p.2).sum::<f64>() / m;
    let spread = (pairs.iter().map(|p| (p.2 - x).powi(2)).sum::<f64>() / m).sqrt();
    Ok(Crossing { x, spread, pairs })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Ansatz {
    /// x' = x - tau* ln N
    ShiftLog,
    /// x' = x - tau* N
    ShiftLinear,
    /// x' = (x - x*) N^{1/nu - 1}, with x = lambda N.
    FieldFirstOrder,
    /// x' = (x - tau* N) / sqrt(N)
    SqrtWidth,
}

impl Ansatz {
    fn dims(self) -> usize {
        match self {
            Ansatz::FieldFirstOrder => 2,
            _ => 1,
        }
    }

    /// Scaled abscissa; for the field ansatz the second parameter is 1/nu.
    pub fn scale(self, params: &[f64], x: f64, n: usize) -> f64 {
        let nf = n as f64;
        match self {
            Ansatz::ShiftLog => x - params[0] * nf.ln(),
            Ansatz::ShiftLinear => x - params[0] * nf,
            Ansatz::FieldFirstOrder => (x - params[0]) * nf.powf(params[1] - 1.0),
            Ansatz::SqrtWidth => (x - params[0] * nf) / nf.sqrt(),
        }
    }

    /// Parameters that leave x unscaled, for the uncollapsed reference.
    /// The width ansatz has no such point; its reference is the plain shift.
    fn identity(self) -> Vec<f64> {
        match self {
            Ansatz::FieldFirstOrder => vec![0.0, 1.0],
            _ => vec![0.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseResult {
    pub ansatz: Ansatz,
    pub params: Vec<f64>,
    pub fit: DiagnosticsFit,
    /// Spread at the optimum and with the raw abscissa.
    pub residual: f64,
    pub uncollapsed: f64,
    pub converged: bool,
}

impl CollapseResult {
    pub fn improvement(&self) -> f64 {
        self.uncollapsed / self.residual
    }
}

/// Mean squared distance of each curve's points from the pooled linear
/// interpolant of all other curves, over points inside the pooled range.
/// Infinite when fewer than half of the points overlap, which would
/// otherwise reward pushing curves apart.
pub fn collapse_spread(curves: &[Curve], ansatz: Ansatz, params: &[f64]) -> f64 {
    let scaled: Vec<Vec<(f64, f64)>> = curves
        .iter()
        .map(|c| {
            let mut p: Vec<(f64, f64)> = c.points.iter().map(|&(x, y)| (ansatz.scale(params, x, c.n), y)).collect();
            p.sort_by(|a, b| a.0.total_cmp(&b.0));
            p
        })
        .collect();
    let total: usize = scaled.iter().map(|c| c.len()).sum();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, c) in scaled.iter().enumerate() {
        let others: Vec<&Vec<(f64, f64)>> = scaled.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, o)| o).collect();
        for &(x, y) in c {
            let vals: Vec<f64> = others.iter().filter_map(|o| interpolate(o, x)).collect();
            if vals.is_empty() {
                continue;
            }
            let pooled = vals.iter().sum::<f64>() / vals.len() as f64;
            sum += (y - pooled).powi(2);
            count += 1;
        }
    }
    if count == 0 || 2 * count < total {
        return f64::INFINITY;
    }
    sum / count as f64
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Coordinate descent with golden-section line searches from eight starts
/// spread over `bounds`.
pub fn collapse_fit(curves: &[Curve], ansatz: Ansatz, bounds: &[(f64, f64)]) -> Result<CollapseResult> {
    if curves.len() < 3 {
        return Err(Error::InvalidParameter("a collapse needs at least three sizes".into()));
    }
    if bounds.len() != ansatz.dims() || bounds.iter().any(|(lo, hi)| !(lo < hi)) {
        return Err(Error::InvalidParameter(format!("{ansatz:?} needs {} ordered bounds", ansatz.dims())));
    }
    let objective = |p: &[f64]| collapse_spread(curves, ansatz, p);
    let starts = 8;
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut converged = false;
    for s in 0..starts {
        let frac = (s as f64 + 0.5) / starts as f64;
        // Interleave the fractions across coordinates so 2-d starts differ.
        let mut p: Vec<f64> = bounds
            .iter()
            .enumerate()
            .map(|(k, (lo, hi))| {
                let f = if k == 0 { frac } else { ((s * 3 + 1) % starts) as f64 / starts as f64 + 0.5 / starts as f64 };
                lo + f * (hi - lo)
            })
            .collect();
        let mut value = objective(&p);
        let mut done = false;
        for _sweep in 0..100 {
            let before = value;
            for k in 0..p.len() {
                let (lo, hi) = bounds[k];
                let (x, v) = golden_section(
                    |x| {
                        let mut q = p.clone();
                        q[k] = x;
                        objective(&q)
                    },
                    lo,
                    hi,
                    1e-7 * (hi - lo),
                );
                if v <= value {
                    p[k] = x;
                    value = v;
                }
            }
            if p.len() == 1 || (before - value).abs() <= 1e-12 * before.abs().max(1e-300) {
                done = true;
                break;
            }
        }
        if best.as_ref().is_none_or(|(_, b)| value < *b) {
            best = Some((p, value));
            converged = done;
        }
    }
    let (params, residual) = best.expect("at least one start");
    let uncollapsed = match ansatz {
        Ansatz::SqrtWidth => collapse_spread(curves, Ansatz::ShiftLinear, &[0.0]),
        _ => objective(&ansatz.identity()),
    };
    if !residual.is_finite() {
        log::warn!("{ansatz:?} collapse found no admissible parameters");
    }
    let mut fit = DiagnosticsFit { residual, ..Default::default() };
    match ansatz {
        Ansatz::FieldFirstOrder => {
            fit.tau_star = params[0];
            fit.nu = 1.0 / params[1];
        }
        _ => fit.tau_star = params[0],
    }
    fit.tau_star_ci = profile_interval(curves, ansatz, &params, residual, bounds[0]);
    Ok(CollapseResult { ansatz, params, fit, residual, uncollapsed, converged })
}

/// Range of the first parameter over which the spread stays within twice
/// its minimum, scanning outward on a grid of the search interval.
fn profile_interval(curves: &[Curve], ansatz: Ansatz, best: &[f64], minimum: f64, bound: (f64, f64)) -> (f64, f64) {
    if !minimum.is_finite() {
        return (f64::NAN, f64::NAN);
    }
    let step = (bound.1 - bound.0) / 400.0;
    let ok = |x: f64| {
        let mut q = best.to_vec();
        q[0] = x;
        collapse_spread(curves, ansatz, &q) <= 2.0 * minimum.max(1e-300)
    };
    let mut lo = best[0];
    while lo - step >= bound.0 && ok(lo - step) {
        lo -= step;
    }
    let mut hi = best[0];
    while hi + step <= bound.1 && ok(hi + step) {
        hi += step;
    }
    (lo, hi)
}

/// Least-squares line y = a + b x; returns (a, b).
pub fn linear_fit(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::InvalidParameter("a line needs two points".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidParameter("degenerate abscissa".into()));
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let b = sxy / sxx;
    Ok((my - b * mx, b))
}

/// First x at which the piecewise-linear series falls to `level` or below.
pub fn first_reaching(points: &[(f64, f64)], level: f64) -> Option<f64> {
    if points.first()?.1 <= level {
        return Some(points[0].0);
    }
    points.windows(2).find(|w| w[1].1 <= level).map(|w| {
        let (a, b) = (w[0], w[1]);
        a.0 + (level - a.1) * (b.0 - a.0) / (b.1 - a.1)
    })
}

/// First x at which a rising curve reaches `level`, interpolated.
pub fn first_exceeding(points: &[(f64, f64)], level: f64) -> Option<f64> {
    let flipped: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x, -y)).collect();
    first_reaching(&flipped, -level)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize, a: f64, x0: f64) -> Curve {
        Curve::new(n, (0..=20).map(|i| i as f64 * 0.1).map(|x| (x, a * (x - x0))).collect())
    }

    #[test]
    fn crossing_of_two_lines_is_exact() {
        let c = find_crossing(&[line(10, 1.0, 0.73), line(20, -2.5, 0.73)]).unwrap();
        assert!((c.x - 0.73).abs() < 1e-12);
        assert_eq!(c.spread, 0.0);
    }

    #[test]
    fn identical_curves_do_not_cross() {
        let r = find_crossing(&[line(10, 1.0, 0.5), line(20, 1.0, 0.5)]);
        assert!(matches!(r, Err(Error::NoCrossing)));
    }

    #[test]
    fn disjoint_ranges_are_rejected() {
        let a = Curve::new(1, vec![(0.0, 0.0), (1.0, 1.0)]);
        let b = Curve::new(2, vec![(2.0, 0.0), (3.0, 1.0)]);
        assert!(matches!(find_crossing(&[a, b]), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn synthetic_anticoncentration_collapse() {
        let (tau, c1, c2) = (1.5, 3.0, 0.7);
        let curves: Vec<Curve> = [16usize, 24, 32, 48, 64]
            .iter()
            .map(|&n| {
                let pts = (0..40)
                    .map(|t| {
                        let t = t as f64;
                        (t, (c1 * (-c2 * (t - tau * (n as f64).ln())).exp()).ln())
                    })
                    .collect();
                Curve::new(n, pts)
            })
            .collect();
        let r = collapse_fit(&curves, Ansatz::ShiftLog, &[(0.0, 4.0)]).unwrap();
        assert!((r.params[0] - tau).abs() < 0.02 * tau, "{:?}", r.params);
        assert!(r.improvement() > 5.0);
    }

    #[test]
    fn field_collapse_recovers_exponent() {
        let (xs, inv_nu) = (0.84, 2.0);
        let curves: Vec<Curve> = [20usize, 30, 40, 60]
            .iter()
            .map(|&n| {
                let pts = (0..=30)
                    .map(|i| {
                        let x = 0.4 + i as f64 * 0.03;
                        (x, 1.0 / (1.0 + ((x - xs) * (n as f64).powf(inv_nu - 1.0)).exp()))
                    })
                    .collect();
                Curve::new(n, pts)
            })
            .collect();
        let r = collapse_fit(&curves, Ansatz::FieldFirstOrder, &[(0.5, 1.2), (1.2, 3.0)]).unwrap();
        assert!((r.params[0] - xs).abs() < 0.02, "{:?}", r.params);
        assert!((r.params[1] - inv_nu).abs() < 0.1, "{:?}", r.params);
    }

    #[test]
    fn first_reaching_interpolates() {
        let pts = [(0.0, 10.0), (1.0, 4.0), (2.0, 2.0)];
        assert_eq!(first_reaching(&pts, 3.0), Some(1.5));
        assert_eq!(first_reaching(&pts, 1.0), None);
        let up = [(0.0, -8.0), (1.0, -2.0), (2.0, 0.0)];
        assert_eq!(first_exceeding(&up, -1.0), Some(1.5));
    }

    #[test]
    fn linear_fit_recovers_line() {
        let pts: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 2.0 - 0.5 * i as f64)).collect();
        let (a, b) = linear_fit(&pts).unwrap();
        assert!((a - 2.0).abs() < 1e-12 && (b + 0.5).abs() < 1e-12);
    }

    fn sampled(n: usize, step: f64, x0: f64) -> Curve {
        let k = (1.0 / step).round() as usize;
        let pts = (0..=k).map(|i| i as f64 * step).map(|x| (x, (n as f64 * 0.1 * (x - x0)).tanh())).collect();
        Curve::new(n, pts)
    }

    proptest::proptest! {
        #[test]
        fn crossing_survives_regridding(x0 in 0.2f64..0.8) {
            let coarse: Vec<Curve> = [10, 20, 40].iter().map(|&n| sampled(n, 0.02, x0)).collect();
            let fine: Vec<Curve> = [10, 20, 40].iter().map(|&n| sampled(n, 0.005, x0)).collect();
            let a = find_crossing(&coarse).unwrap().x;
            let b = find_crossing(&fine).unwrap().x;
            proptest::prop_assert!((a - b).abs() < 1e-3, "{} vs {}", a, b);
            proptest::prop_assert!((b - x0).abs() < 1e-3);
        }
    }
}
