//! Per-experiment analysis of the CSV rows, stored in the JSON summary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::analysis::{
    collapse_fit, collapse_spread, find_crossing, first_exceeding, first_reaching, linear_fit, Ansatz, Curve,
};
use super::config::{ExperimentConfig, ExperimentKind};
use super::records::Row;
use crate::error::{Error, Result};
use crate::observables::{haar_renyi2_cmi, DiagnosticsFit, EnvironmentConvention, Partition};

/// Reporting threshold for anticoncentration: 2^N Z <= 3.
pub const ANTICONCENTRATION_LEVEL: f64 = 3.0;

/// Per-N series (t, log2 value) of one observable, averaged in log space
/// over seeds and restricted to a single lambda when given.
pub fn series(rows: &[Row], observable: &str, lambda: Option<f64>) -> BTreeMap<usize, Vec<(f64, f64)>> {
    let mut acc: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for r in rows {
        if r.observable != observable || lambda.is_some_and(|l| (r.lambda - l).abs() > 1e-12) {
            continue;
        }
        let e = acc.entry((r.n, r.t)).or_insert((0.0, 0));
        e.0 += r.log2_value;
        e.1 += 1;
    }
    let mut out: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for ((n, t), (s, c)) in acc {
        out.entry(n).or_default().push((t as f64, s / c as f64));
    }
    out
}

fn lambdas(rows: &[Row]) -> Vec<f64> {
    let mut l: Vec<f64> = rows.iter().map(|r| r.lambda).collect();
    l.sort_by(f64::total_cmp);
    l.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    l
}

fn ps(rows: &[Row]) -> Vec<f64> {
    let mut p: Vec<f64> = rows.iter().filter_map(|r| r.base_observable().1).collect();
    p.sort_by(f64::total_cmp);
    p.dedup();
    p
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnticoncentrationReport {
    /// Per N: first time with 2^N Z <= 3, and that time over ln N.
    pub threshold_times: BTreeMap<usize, (f64, f64)>,
    /// Slope of the threshold time against ln N.
    pub threshold_slope: Option<f64>,
    pub fit: DiagnosticsFit,
    pub collapse_improvement: f64,
}

pub fn anticoncentration_report(rows: &[Row]) -> Result<AnticoncentrationReport> {
    let s = series(rows, "collision", None);
    let mut threshold_times = BTreeMap::new();
    let mut curves = Vec::new();
    for (&n, pts) in &s {
        let scaled: Vec<(f64, f64)> = pts.iter().map(|&(t, l)| (t, (l + n as f64).exp2())).collect();
        if let Some(t3) = first_reaching(&scaled, ANTICONCENTRATION_LEVEL) {
            threshold_times.insert(n, (t3, t3 / (n as f64).ln()));
        }
        // ln(2^N Z - 2) in the window where the single-excitation form applies.
        let window: Vec<(f64, f64)> =
            scaled.iter().filter(|p| p.1 - 2.0 > 1e-2 && p.1 - 2.0 < 10.0).map(|&(t, z)| (t, (z - 2.0).ln())).collect();
        curves.push(Curve::new(n, window));
    }
    let threshold_slope = if threshold_times.len() >= 2 {
        let pts: Vec<(f64, f64)> = threshold_times.iter().map(|(&n, &(t3, _))| ((n as f64).ln(), t3)).collect();
        Some(linear_fit(&pts)?.1)
    } else {
        None
    };
    let max_t = s.values().flat_map(|p| p.iter().map(|q| q.0)).fold(1.0, f64::max);
    let min_n = *s.keys().next().ok_or_else(|| Error::InvalidParameter("no collision rows".into()))?;
    let r = collapse_fit(&curves, Ansatz::ShiftLog, &[(0.0, max_t / (min_n as f64).ln())])?;
    let mut fit = r.fit;
    // ln(2^N Z - 2) = ln c1 - c2 (t - tau* ln N)
    let tau = r.params[0];
    let pooled: Vec<(f64, f64)> = curves
        .iter()
        .flat_map(|c| c.points.iter().map(move |&(t, y)| (Ansatz::ShiftLog.scale(&[tau], t, c.n), y)))
        .collect();
    if let Ok((a, b)) = linear_fit(&pooled) {
        fit.c1 = a.exp();
        fit.c2 = -b;
        fit.delta = -b;
    }
    Ok(AnticoncentrationReport { threshold_times, threshold_slope, fit, collapse_improvement: r.improvement() })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CmiReport {
    /// Per N: CMI (nats) at the last recorded time.
    pub late_values: BTreeMap<usize, f64>,
    /// Per N: the Haar value the late-time CMI should approach.
    pub haar_values: BTreeMap<usize, f64>,
    /// Per N: first time the CMI reaches ln(2)/2.
    pub half_times: BTreeMap<usize, f64>,
    /// Slope of the half-saturation time against ln N.
    pub half_time_slope: f64,
    pub fit: DiagnosticsFit,
    pub collapse_improvement: f64,
}

fn cmi_values(rows: &[Row], lambda: Option<f64>) -> BTreeMap<usize, Vec<(f64, f64)>> {
    let pos = series(rows, "cmi", lambda);
    let neg = series(rows, "cmi_neg", lambda);
    let mut out: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for (n, pts) in pos {
        out.entry(n).or_default().extend(pts.into_iter().map(|(t, l)| (t, l.exp2())));
    }
    for (n, pts) in neg {
        out.entry(n).or_default().extend(pts.into_iter().map(|(t, l)| (t, -l.exp2())));
    }
    for v in out.values_mut() {
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    out
}

pub fn cmi_report(rows: &[Row]) -> Result<CmiReport> {
    let s = cmi_values(rows, None);
    let late_values = s.iter().filter_map(|(&n, p)| Some((n, p.last()?.1))).collect();
    let haar_values = s
        .keys()
        .map(|&n| Ok((n, haar_renyi2_cmi(&Partition::equal(n)?, n)?)))
        .collect::<Result<_>>()?;
    let half = std::f64::consts::LN_2 / 2.0;
    let half_times: BTreeMap<usize, f64> =
        s.iter().filter_map(|(&n, p)| Some((n, first_exceeding(p, half)?))).collect();
    let half_time_slope = if half_times.len() >= 2 {
        let pts: Vec<(f64, f64)> = half_times.iter().map(|(&n, &t)| ((n as f64).ln(), t)).collect();
        linear_fit(&pts)?.1
    } else {
        f64::NAN
    };
    // The shift collapse uses the rise only; the plateaus differ by the
    // finite-size Haar correction and carry no information about the shift.
    let curves: Vec<Curve> = s
        .iter()
        .map(|(&n, p)| Curve::new(n, p.iter().cloned().filter(|q| q.1 > 0.01 && q.1 < 0.6).collect()))
        .collect();
    let max_t = s.values().flat_map(|p| p.iter().map(|q| q.0)).fold(1.0, f64::max);
    let min_n = *s.keys().next().ok_or_else(|| Error::InvalidParameter("no cmi rows".into()))?;
    let r = collapse_fit(&curves, Ansatz::ShiftLog, &[(0.0, max_t / (min_n as f64).ln())])?;
    Ok(CmiReport {
        late_values,
        haar_values,
        half_times,
        half_time_slope,
        fit: r.fit,
        collapse_improvement: r.improvement(),
    })
}

/// Noisy CMI values below this are not resolved: truncation at the default
/// discard tolerance and cancellation between the four marginals leave
/// errors of order 1e-12.
pub const NOISY_CMI_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoisyCmiReport {
    /// Per (N, mu): slope of ln I against t over the resolved late window.
    pub slopes: BTreeMap<String, f64>,
    /// Per mu: the mean late-time crossing of ln I(t) between sizes, if any
    /// pair crosses.
    pub crossings: BTreeMap<String, Option<f64>>,
}

/// ln I(t) for t >= 1 up to the first value below the resolution floor.
pub fn noisy_cmi_curves(rows: &[Row]) -> BTreeMap<String, Vec<Curve>> {
    let mut by_mu: BTreeMap<String, Vec<Curve>> = BTreeMap::new();
    for l in lambdas(rows) {
        for (n, pts) in cmi_values(rows, Some(l)) {
            let mu = format!("{:.4}", l * n as f64);
            let logs: Vec<(f64, f64)> = pts
                .iter()
                .filter(|p| p.0 >= 1.0)
                .take_while(|p| p.1 > NOISY_CMI_FLOOR)
                .map(|&(t, v)| (t, v.ln()))
                .collect();
            by_mu.entry(mu).or_default().push(Curve::new(n, logs));
        }
    }
    by_mu
}

pub fn noisy_cmi_report(rows: &[Row]) -> Result<NoisyCmiReport> {
    let mut slopes = BTreeMap::new();
    let mut crossings = BTreeMap::new();
    for (mu, curves) in noisy_cmi_curves(rows) {
        // Late time: the second half of each resolved window.
        let curves: Vec<Curve> =
            curves.iter().map(|c| Curve::new(c.n, c.points[c.points.len() / 2..].to_vec())).collect();
        for c in &curves {
            if c.points.len() >= 2 {
                slopes.insert(format!("N={} mu={mu}", c.n), linear_fit(&c.points)?.1);
            }
        }
        let mut xs = Vec::new();
        for i in 0..curves.len() {
            for j in i + 1..curves.len() {
                match find_crossing(&[curves[i].clone(), curves[j].clone()]) {
                    Ok(c) => xs.push(c.x),
                    Err(Error::NoCrossing) => {}
                    // Resolved windows that do not overlap cannot cross.
                    Err(Error::InvalidParameter(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        if curves.len() >= 2 {
            let c = (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
            crossings.insert(mu, c);
        }
    }
    Ok(NoisyCmiReport { slopes, crossings })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct XebFixedReport {
    /// Per (N, lambda): largest log2(chi / F) over t, i.e. the bump height.
    pub bump_log2: BTreeMap<String, f64>,
    /// Per (N, lambda): log2(chi / F) at the last recorded time.
    pub late_log2_ratio: BTreeMap<String, f64>,
}

pub fn xeb_fixed_report(rows: &[Row]) -> Result<XebFixedReport> {
    let mut bump_log2 = BTreeMap::new();
    let mut late_log2_ratio = BTreeMap::new();
    for l in lambdas(rows) {
        let chi = series(rows, "chi", Some(l));
        let f = series(rows, "fidelity", Some(l));
        for (n, c) in chi {
            let Some(fp) = f.get(&n) else { continue };
            let gaps: Vec<f64> = c
                .iter()
                .filter(|p| p.0 > 0.0)
                .filter_map(|&(t, lc)| fp.iter().find(|q| q.0 == t).map(|q| lc - q.1))
                .collect();
            let key = format!("N={n} lambda={l}");
            if let Some(m) = gaps.iter().cloned().reduce(f64::max) {
                bump_log2.insert(key.clone(), m);
            }
            if let Some(&last) = gaps.last() {
                late_log2_ratio.insert(key, last);
            }
        }
    }
    Ok(XebFixedReport { bump_log2, late_log2_ratio })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct XebScaledReport {
    /// Crossing of F/chi against mu = lambda N.
    pub crossing: Option<(f64, f64)>,
    pub fit: DiagnosticsFit,
    /// Spread of F/chi against (mu - mu*) N, relative to the raw spread.
    pub fixed_exponent_improvement: f64,
    pub free_fit_improvement: f64,
}

pub fn xeb_scaled_curves(rows: &[Row]) -> Vec<Curve> {
    let mut by_n: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.observable == "ratio" || r.observable == "ratio_neg") {
        let v = if r.observable == "ratio" { r.log2_value.exp2() } else { -r.log2_value.exp2() };
        by_n.entry(r.n).or_default().push((r.lambda * r.n as f64, v));
    }
    by_n.into_iter().map(|(n, p)| Curve::new(n, p)).collect()
}

pub fn xeb_scaled_report(rows: &[Row]) -> Result<XebScaledReport> {
    let curves = xeb_scaled_curves(rows);
    let crossing = match find_crossing(&curves) {
        Ok(c) => Some((c.x, c.spread)),
        Err(Error::NoCrossing) => None,
        Err(e) => return Err(e),
    };
    let (lo, hi) = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.0))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let mut fit = DiagnosticsFit::default();
    let mut fixed = f64::NAN;
    let mut free = f64::NAN;
    if curves.len() >= 3 && lo < hi {
        let r = collapse_fit(&curves, Ansatz::FieldFirstOrder, &[(lo, hi), (1.0, 3.0)])?;
        fit = r.fit;
        free = r.improvement();
        let star = crossing.map(|c| c.0).unwrap_or(r.params[0]);
        let raw = collapse_spread(&curves, Ansatz::FieldFirstOrder, &[0.0, 1.0]);
        fixed = raw / collapse_spread(&curves, Ansatz::FieldFirstOrder, &[star, 2.0]);
    }
    Ok(XebScaledReport { crossing, fit, fixed_exponent_improvement: fixed, free_fit_improvement: free })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PurityDepthReport {
    pub p: f64,
    pub lambda: f64,
    /// Per N: F / F_Haar at the last recorded time.
    pub late_ratio: BTreeMap<usize, f64>,
    /// Per N: first time with F <= 2 F_Haar (or F >= F_Haar / 2 when F
    /// rises from zero), and that time over N.
    pub transition_times: BTreeMap<usize, (f64, f64)>,
    pub linear: DiagnosticsFit,
    pub linear_improvement: f64,
    pub sqrt_width: DiagnosticsFit,
    pub sqrt_width_improvement: f64,
}

/// Per-N log2(F / F_Haar) against t for one (lambda, p).
pub fn purity_ratio_curves(rows: &[Row], lambda: f64, p: f64) -> Vec<Curve> {
    let f = series(rows, &super::records::tagged("mutual_purity", p), Some(lambda));
    let h = series(rows, &super::records::tagged("haar_mutual_purity", p), Some(lambda));
    f.into_iter()
        .filter_map(|(n, pts)| {
            let hv = h.get(&n)?.first()?.1;
            Some(Curve::new(n, pts.into_iter().map(|(t, l)| (t, l - hv)).collect()))
        })
        .collect()
}

/// `rising` selects the light-cone setup, where F starts near zero and
/// grows to the Haar value; otherwise F decays onto it from above.
pub fn purity_depth_report(rows: &[Row], lambda: f64, p: f64, rising: bool) -> Result<PurityDepthReport> {
    let curves = purity_ratio_curves(rows, lambda, p);
    let mut late_ratio = BTreeMap::new();
    let mut transition_times = BTreeMap::new();
    for c in &curves {
        if let Some(last) = c.points.last() {
            late_ratio.insert(c.n, last.1.exp2());
        }
        let t = if rising { first_exceeding(&c.points, -1.0) } else { first_reaching(&c.points, 1.0) };
        if let Some(t) = t {
            transition_times.insert(c.n, (t, t / c.n as f64));
        }
    }
    // The collapse uses the approach to saturation: log2(F/F_Haar) between
    // 1/64 and 16 from above, or between -6 and -1/64 from below.
    let (lo, hi) = if rising { (-6.0, -1.0 / 64.0) } else { (1.0 / 64.0, 16.0) };
    let window: Vec<Curve> = curves
        .iter()
        .map(|c| Curve::new(c.n, c.points.iter().cloned().filter(|p| p.1 > lo && p.1 < hi).collect()))
        .collect();
    let (mut linear, mut sqrt_width) = (DiagnosticsFit::default(), DiagnosticsFit::default());
    let (mut li, mut si) = (f64::NAN, f64::NAN);
    if window.len() >= 3 {
        let max_t = window.iter().flat_map(|c| c.points.iter().map(|p| p.0)).fold(1.0, f64::max);
        let min_n = window.iter().map(|c| c.n).min().unwrap_or(1) as f64;
        let r = collapse_fit(&window, Ansatz::ShiftLinear, &[(0.0, max_t / min_n)])?;
        linear = r.fit;
        li = r.improvement();
        let r = collapse_fit(&window, Ansatz::SqrtWidth, &[(0.0, max_t / min_n)])?;
        sqrt_width = r.fit;
        si = r.improvement();
    }
    Ok(PurityDepthReport {
        p,
        lambda,
        late_ratio,
        transition_times,
        linear,
        linear_improvement: li,
        sqrt_width,
        sqrt_width_improvement: si,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub lambda: f64,
    /// Crossing in the realized noisy fraction of the log2 bound curves,
    /// per d_E convention.
    pub crossings: BTreeMap<String, Option<(f64, f64)>>,
}

pub fn threshold_curves(rows: &[Row], lambda: f64, convention: EnvironmentConvention) -> Vec<Curve> {
    let label = match convention {
        EnvironmentConvention::NoisyOnly => "qec_bound_noisy_only",
        EnvironmentConvention::AllSites => "qec_bound_all_sites",
    };
    let mut by_n: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| (r.lambda - lambda).abs() < 1e-12) {
        if let (name, Some(p)) = r.base_observable() {
            if name == label {
                // Realized noisy fraction: the layout uses round(p N) sites,
                // so nominal p values sharing a site count collapse together.
                let f = (p * r.n as f64).round() / r.n as f64;
                by_n.entry(r.n).or_default().push((f, r.log2_value));
            }
        }
    }
    // Seeds and nominal p values with the same site count are averaged in
    // log space.
    by_n.into_iter()
        .map(|(n, pts)| {
            let mut acc: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
            for (p, v) in pts {
                let e = acc.entry(p.to_bits()).or_insert((p, 0.0, 0));
                e.1 += v;
                e.2 += 1;
            }
            Curve::new(n, acc.into_values().map(|(p, s, c)| (p, s / c as f64)).collect())
        })
        .collect()
}

pub fn threshold_report(rows: &[Row], lambda: f64) -> Result<ThresholdReport> {
    let mut crossings = BTreeMap::new();
    for (conv, name) in [(EnvironmentConvention::NoisyOnly, "noisy_only"), (EnvironmentConvention::AllSites, "all_sites")] {
        let c = match find_crossing(&threshold_curves(rows, lambda, conv)) {
            Ok(c) => Some((c.x, c.spread)),
            Err(Error::NoCrossing) => None,
            Err(e) => return Err(e),
        };
        crossings.insert(name.to_string(), c);
    }
    Ok(ThresholdReport { lambda, crossings })
}

pub fn analyze(cfg: &ExperimentConfig, rows: &[Row]) -> Result<Value> {
    let rows: Vec<Row> = rows.iter().filter(|r| r.observable != "error").cloned().collect();
    let rows = &rows[..];
    Ok(match cfg.experiment {
        ExperimentKind::Anticoncentration => json!(anticoncentration_report(rows)?),
        ExperimentKind::Cmi => json!(cmi_report(rows)?),
        ExperimentKind::NoisyCmi => json!(noisy_cmi_report(rows)?),
        ExperimentKind::XebFixedNoise => json!(xeb_fixed_report(rows)?),
        ExperimentKind::XebScaledNoise => json!(xeb_scaled_report(rows)?),
        ExperimentKind::MutualPurityDepth | ExperimentKind::LightconePurity => {
            let mut out = Vec::new();
            for l in lambdas(rows) {
                for p in ps(rows) {
                    let rising = cfg.experiment == ExperimentKind::LightconePurity;
                    out.push(purity_depth_report(rows, l, p, rising)?);
                }
            }
            json!(out)
        }
        ExperimentKind::MutualPurityThreshold => {
            let out: Vec<ThresholdReport> = lambdas(rows).into_iter().map(|l| threshold_report(rows, l)).collect::<Result<_>>()?;
            json!(out)
        }
        ExperimentKind::OracleCheck => json!(oracle_table(rows)),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OracleLine {
    pub n: usize,
    pub observable: String,
    pub lambda: f64,
    pub monte_carlo: f64,
    pub stderr: f64,
    pub replica: f64,
    pub mps: Option<f64>,
    /// |MC - replica| in units of the standard error.
    pub z_score: f64,
}

fn value_of(rows: &[Row], n: usize, lambda: f64, name: &str) -> Option<f64> {
    rows.iter().filter(|r| r.n == n && (r.lambda - lambda).abs() < 1e-12).find_map(|r| {
        if r.observable == name {
            Some(r.log2_value.exp2())
        } else if r.observable == format!("{name}_neg") {
            Some(-r.log2_value.exp2())
        } else {
            None
        }
    })
}

pub fn oracle_table(rows: &[Row]) -> Vec<OracleLine> {
    let mut keys: Vec<(usize, String, u64)> = rows
        .iter()
        .filter_map(|r| {
            let obs = r.observable.strip_prefix("oracle_mc:")?;
            Some((r.n, obs.trim_end_matches("_neg").to_string(), r.lambda.to_bits()))
        })
        .collect();
    keys.dedup();
    keys.into_iter()
        .filter_map(|(n, obs, lb)| {
            let lambda = f64::from_bits(lb);
            let mc = value_of(rows, n, lambda, &format!("oracle_mc:{obs}"))?;
            let se = value_of(rows, n, lambda, &format!("oracle_mc_stderr:{obs}"))?;
            let rep = value_of(rows, n, lambda, &format!("oracle_replica:{obs}"))?;
            let mps = value_of(rows, n, lambda, &format!("oracle_mps:{obs}"));
            Some(OracleLine { n, observable: obs, lambda, monte_carlo: mc, stderr: se, replica: rep, mps, z_score: (mc - rep).abs() / se })
        })
        .collect()
}
