//! Observables as boundary contractions of the evolved replica state.
//!
//! Every observable here is an annealed average: the circuit average is
//! taken inside the logarithm, as in the two-replica computation itself.

use std::ops::Range;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mps_engine::{
    label_vec, Amplitude, EvolutionParams, LogAmp, Propagator, SiteVec, SplitEvolution, StepReport,
    TruncationPolicy,
};
use crate::replica_algebra::{error_boundary_site, BoundaryLabel, NoiseSpec, ReplicaMask};
#[cfg(test)]
use crate::replica_algebra::error_site_coefficients;

const LN2: f64 = std::f64::consts::LN_2;

/// Contiguous tripartition A | B | C with B separating A and C.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub a: Range<usize>,
    pub b: Range<usize>,
    pub c: Range<usize>,
}

impl Partition {
    /// Thirds of the chain; any remainder goes to B.
    pub fn equal(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidParameter("a tripartition needs at least three sites".into()));
        }
        let third = n / 3;
        Ok(Partition { a: 0..third, b: third..n - third, c: n - third..n })
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let ok = self.a.start == 0
            && self.a.end == self.b.start
            && self.b.end == self.c.start
            && self.c.end == n
            && !self.a.is_empty()
            && !self.b.is_empty()
            && !self.c.is_empty();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("{self:?} is not a contiguous tripartition of {n} sites")))
        }
    }

    /// Reflection i -> n - 1 - i, which exchanges the roles of A and C.
    pub fn mirror(&self, n: usize) -> Partition {
        let flip = |r: &Range<usize>| n - r.end..n - r.start;
        Partition { a: flip(&self.c), b: flip(&self.b), c: flip(&self.a) }
    }

    fn mask(&self, n: usize, parts: &[&Range<usize>]) -> Vec<bool> {
        (0..n).map(|i| parts.iter().any(|r| r.contains(&i))).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Encoded qubits and noise both at the left end.
    LeftContiguous,
    /// Encoded qubit at the left end, noisy sites drawn uniformly.
    Random { seed: u64 },
    /// Encoded qubit at the right end, noise at the left end.
    RightEncoded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EnvironmentConvention {
    /// d_E counts only the noisy sites, 4 per site.
    #[default]
    NoisyOnly,
    /// d_E = 4^N regardless of where the noise acts.
    AllSites,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodingLayout {
    pub n: usize,
    pub a1: Vec<usize>,
    pub noisy: Vec<usize>,
    pub placement: Placement,
}

impl EncodingLayout {
    pub fn new(n: usize, p: f64, encoded: usize, placement: Placement) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidParameter(format!("noise fraction {p} not in [0, 1]")));
        }
        if encoded == 0 || encoded >= n {
            return Err(Error::InvalidParameter("need 1 <= |A1| < N".into()));
        }
        let k = (p * n as f64).round() as usize;
        let (a1, noisy): (Vec<usize>, Vec<usize>) = match placement {
            Placement::LeftContiguous => ((0..encoded).collect(), (0..k).collect()),
            Placement::RightEncoded => ((n - encoded..n).collect(), (0..k).collect()),
            Placement::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut picked: Vec<usize> = sample(&mut rng, n, k).into_vec();
                picked.sort_unstable();
                ((0..encoded).collect(), picked)
            }
        };
        Ok(EncodingLayout { n, a1, noisy, placement })
    }

    pub fn log2_d_r(&self) -> f64 {
        self.a1.len() as f64
    }

    pub fn log2_d_e(&self, convention: EnvironmentConvention) -> f64 {
        match convention {
            EnvironmentConvention::NoisyOnly => 2.0 * self.noisy.len() as f64,
            EnvironmentConvention::AllSites => 2.0 * self.n as f64,
        }
    }

    /// psi_in: swap^{A1} - 2^{-|A1|} id^{A1} on the encoded sites, |0000>
    /// elsewhere. For a single encoded qubit this is the product
    /// (swap - id/2) x zero4^{N-1}.
    pub fn input_terms(&self) -> Vec<(f64, Vec<SiteVec>)> {
        let zero = label_vec(BoundaryLabel::Zero4);
        if self.a1.len() == 1 {
            let mut sites = vec![zero; self.n];
            sites[self.a1[0]] = label_vec(BoundaryLabel::Encode);
            return vec![(1.0, sites)];
        }
        let mut with_swap = vec![zero; self.n];
        let mut with_id = vec![zero; self.n];
        for &i in &self.a1 {
            with_swap[i] = label_vec(BoundaryLabel::Swap);
            with_id[i] = label_vec(BoundaryLabel::Id);
        }
        vec![(1.0, with_swap), (-(0.5f64).powi(self.a1.len() as i32), with_id)]
    }

    /// psi_err: the Kraus-dressed error site on noisy sites, the noiseless
    /// dressing 2 id elsewhere.
    pub fn error_bra(&self, lambda: f64) -> Result<Vec<SiteVec>> {
        let noisy = error_boundary_site(lambda)?.to_sector()?;
        let clean = error_boundary_site(0.0)?.to_sector()?;
        Ok((0..self.n).map(|i| if self.noisy.contains(&i) { noisy } else { clean }).collect())
    }
}

/// Fitted scaling parameters; unset fields are NaN.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsFit {
    pub delta: f64,
    pub epsilon: f64,
    pub tau_star: f64,
    pub nu: f64,
    pub c1: f64,
    pub c2: f64,
    pub tau_star_ci: (f64, f64),
    pub residual: f64,
}

impl Default for DiagnosticsFit {
    fn default() -> Self {
        DiagnosticsFit {
            delta: f64::NAN,
            epsilon: f64::NAN,
            tau_star: f64::NAN,
            nu: f64::NAN,
            c1: f64::NAN,
            c2: f64::NAN,
            tau_star_ci: (f64::NAN, f64::NAN),
            residual: f64::NAN,
        }
    }
}

/// Incremental evolution of one boundary problem, reused across all
/// measurement times.
pub struct Tracker {
    ket: Vec<(f64, Vec<SiteVec>)>,
    evo: SplitEvolution,
    pub max_discarded: f64,
    pub tolerance_exceeded: bool,
}

impl Tracker {
    pub fn new(
        ket: Vec<(f64, Vec<SiteVec>)>,
        params: &EvolutionParams,
        noise: Option<&NoiseSpec>,
        policy: TruncationPolicy,
    ) -> Result<Self> {
        let n = ket.first().map(|(_, s)| s.len()).unwrap_or(0);
        let prop = Propagator::new(params, n, noise)?;
        let evo = SplitEvolution::new(&ket, prop, policy)?;
        Ok(Tracker { ket, evo, max_discarded: 0.0, tolerance_exceeded: false })
    }

    pub fn zero_state(n: usize, params: &EvolutionParams, noise: Option<&NoiseSpec>, policy: TruncationPolicy) -> Result<Self> {
        Self::new(vec![(1.0, vec![label_vec(BoundaryLabel::Zero4); n])], params, noise, policy)
    }

    pub fn n(&self) -> usize {
        self.evo.len()
    }

    pub fn t(&self) -> usize {
        self.evo.steps()
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let r = self.evo.step()?;
        self.max_discarded = self.max_discarded.max(r.max_discarded);
        if r.tolerance_exceeded {
            self.tolerance_exceeded = true;
        }
        Ok(r)
    }

    pub fn advance_to(&mut self, t: usize) -> Result<()> {
        while self.t() < t {
            self.step()?;
        }
        Ok(())
    }

    pub fn evolution(&self) -> &SplitEvolution {
        &self.evo
    }

    /// <bra|psi(t)>; at t = 0 evaluated as an exact product overlap.
    pub fn amplitude(&self, bra: &[SiteVec]) -> Result<Amplitude> {
        if self.t() == 0 {
            let mut v = 0.0;
            for (c, sites) in &self.ket {
                v += c * bra
                    .iter()
                    .zip(sites)
                    .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
                    .product::<f64>();
            }
            return Ok(Amplitude { stationary: LogAmp::new(v), transient: LogAmp::ZERO });
        }
        self.evo.amplitude(bra)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Collision {
    pub log2_z: f64,
    /// 2^N Z.
    pub scaled: f64,
}

pub fn measure_collision(tr: &Tracker) -> Result<Collision> {
    let n = tr.n();
    let amp = tr.amplitude(&vec![label_vec(BoundaryLabel::Coll); n])?.total();
    if amp.sign <= 0.0 {
        return Err(Error::Linalg("non-positive collision probability".into()));
    }
    Ok(Collision { log2_z: amp.log2_abs(), scaled: (amp.ln_abs + n as f64 * LN2).exp() })
}

fn marginal_bra(mask: &[bool]) -> Vec<SiteVec> {
    let coll = label_vec(BoundaryLabel::Coll);
    let id2 = label_vec(BoundaryLabel::Id).map(|x| 2.0 * x);
    mask.iter().map(|&m| if m { coll } else { id2 }).collect()
}

/// ln sum_{s_X} p(s_X)^2 split as ln(stationary) + ln1p(transient / stationary).
fn marginal_parts(tr: &Tracker, mask: &[bool]) -> Result<(f64, f64)> {
    let amp = tr.amplitude(&marginal_bra(mask))?;
    let stat = amp.stationary.value();
    if !(stat > 0.0) {
        return Err(Error::Linalg("marginal purity without a positive stationary part".into()));
    }
    let ratio = if amp.transient.is_zero() { 0.0 } else { amp.transient.sign * (amp.transient.ln_abs - stat.ln()).exp() };
    Ok((stat, ratio.ln_1p()))
}

/// ln sum_{s_X} p(s_X)^2 for the sites in `mask`.
pub fn measure_marginal_exponent(tr: &Tracker, mask: &[bool]) -> Result<f64> {
    if mask.len() != tr.n() {
        return Err(Error::InvalidParameter("mask length mismatch".into()));
    }
    let (stat, rest) = marginal_parts(tr, mask)?;
    Ok(stat.ln() + rest)
}

/// I2(A:C|B) = S2(AB) + S2(BC) - S2(B) - S2(ABC), with S2(X) = -ln P(X).
pub fn measure_cmi(tr: &Tracker, part: &Partition) -> Result<f64> {
    let n = tr.n();
    part.validate(n)?;
    let ab = marginal_parts(tr, &part.mask(n, &[&part.a, &part.b]))?;
    let bc = marginal_parts(tr, &part.mask(n, &[&part.b, &part.c]))?;
    let b = marginal_parts(tr, &part.mask(n, &[&part.b]))?;
    let abc = marginal_parts(tr, &part.mask(n, &[&part.a, &part.b, &part.c]))?;
    // The stationary parts combine as a ratio, which is exactly 1 whenever
    // they are pure powers of two (noisy evolution).
    let stat = ((b.0 * abc.0) / (ab.0 * bc.0)).ln();
    Ok(stat + (b.1 + abc.1) - (ab.1 + bc.1))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct XebValue {
    pub chi: LogAmp,
    pub fidelity: LogAmp,
}

impl XebValue {
    pub fn ratio(&self) -> f64 {
        if self.chi.is_zero() {
            return f64::NAN;
        }
        self.fidelity.sign * self.chi.sign * (self.fidelity.ln_abs - self.chi.ln_abs).exp()
    }
}

/// chi = 2^N <coll|psi> - 1 and F = 2^N <swap|psi>, from the same state.
pub fn measure_xeb(tr: &Tracker) -> Result<XebValue> {
    let n = tr.n();
    let shift = n as f64 * LN2;
    let up = |a: LogAmp| if a.is_zero() { a } else { LogAmp { ln_abs: a.ln_abs + shift, sign: a.sign } };
    let c = tr.amplitude(&vec![label_vec(BoundaryLabel::Coll); n])?;
    // 2^N * stationary - 1 cancels exactly for noisy evolution.
    let base = up(c.stationary).value() - 1.0;
    let chi = LogAmp::new(base).add(up(c.transient));
    let f = tr.amplitude(&vec![label_vec(BoundaryLabel::Swap); n])?.total();
    Ok(XebValue { chi, fidelity: up(f) })
}

/// F_RE = 2^{-|A1|} <psi_err|psi(t)>, with psi(t) evolved from psi_in.
pub fn measure_mutual_purity(tr: &Tracker, layout: &EncodingLayout, lambda: f64) -> Result<LogAmp> {
    let amp = tr.amplitude(&layout.error_bra(lambda)?)?.total();
    Ok(amp.scale((0.5f64).powi(layout.a1.len() as i32)))
}

pub fn collision_probability(n: usize, t: usize, params: &EvolutionParams, policy: TruncationPolicy) -> Result<Collision> {
    let mut tr = Tracker::zero_state(n, params, None, policy)?;
    tr.advance_to(t)?;
    measure_collision(&tr)
}

pub fn renyi2_marginal_exponent(
    mask: &[bool],
    t: usize,
    noise: Option<&NoiseSpec>,
    params: &EvolutionParams,
    policy: TruncationPolicy,
) -> Result<f64> {
    let mut tr = Tracker::zero_state(mask.len(), params, noise, policy)?;
    tr.advance_to(t)?;
    measure_marginal_exponent(&tr, mask)
}

pub fn renyi2_cmi(
    part: &Partition,
    n: usize,
    t: usize,
    noise: Option<&NoiseSpec>,
    params: &EvolutionParams,
    policy: TruncationPolicy,
) -> Result<f64> {
    let mut tr = Tracker::zero_state(n, params, noise, policy)?;
    tr.advance_to(t)?;
    measure_cmi(&tr, part)
}

pub fn xeb_and_fidelity(
    n: usize,
    t: usize,
    noise: &NoiseSpec,
    params: &EvolutionParams,
    policy: TruncationPolicy,
) -> Result<XebValue> {
    if noise.replica_mask != ReplicaMask::Replica1Only || noise.site_mask.iter().any(|&m| !m) {
        return Err(Error::InvalidParameter("XEB needs uniform noise on replica 1 only".into()));
    }
    let mut tr = Tracker::zero_state(n, params, Some(noise), policy)?;
    tr.advance_to(t)?;
    measure_xeb(&tr)
}

pub fn mutual_purity(
    layout: &EncodingLayout,
    t: usize,
    lambda: f64,
    params: &EvolutionParams,
    policy: TruncationPolicy,
) -> Result<LogAmp> {
    let mut tr = Tracker::new(layout.input_terms(), params, None, policy)?;
    tr.advance_to(t)?;
    measure_mutual_purity(&tr, layout, lambda)
}

pub fn purity_decay(lambda: f64) -> f64 {
    (1.0 - lambda).powi(2) + lambda * lambda / 3.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HaarValue {
    /// ln of d_A/(d_A^2-1) (1-1/d_R^2) (1-g^k).
    pub ln_exact: f64,
    /// ln of the leading large-N form (1-1/d_R^2) 2^{-N} (1-g^k).
    pub ln_large_n: f64,
}

/// Haar value of the mutual purity for an N-qubit system with `noisy_sites`
/// depolarized sites and d_R = 2^{log2_d_r}. Values are returned as natural
/// logs; a vanishing value is -inf.
pub fn haar_mutual_purity(log2_d_r: f64, n: usize, lambda: f64, noisy_sites: usize) -> Result<HaarValue> {
    if n == 0 {
        return Err(Error::InvalidParameter("d_A = 1 has no Haar mutual purity".into()));
    }
    if !(0.0..=0.75).contains(&lambda) {
        return Err(Error::NoiseOutOfRange(lambda));
    }
    let g = purity_decay(lambda);
    let noise_factor = 1.0 - g.powi(noisy_sites as i32);
    let ref_factor = 1.0 - (-2.0 * log2_d_r * LN2).exp();
    if noise_factor <= 0.0 || ref_factor <= 0.0 {
        return Ok(HaarValue { ln_exact: f64::NEG_INFINITY, ln_large_n: f64::NEG_INFINITY });
    }
    let ln_da = n as f64 * LN2;
    // d_A / (d_A^2 - 1) = d_A^{-1} / (1 - d_A^{-2})
    let ln_prefactor = -ln_da - (-(-2.0 * ln_da).exp()).ln_1p();
    let common = ref_factor.ln() + noise_factor.ln();
    Ok(HaarValue { ln_exact: ln_prefactor + common, ln_large_n: -ln_da + common })
}

/// ln of the Haar average of sum_{s_X} p(s_X)^2, which is
/// (2^{N-|X|} + 1) / (2^N + 1).
fn ln_haar_marginal(n: usize, x: usize) -> f64 {
    let ln_pow1p = |m: usize| m as f64 * LN2 + (-(m as f64) * LN2).exp().ln_1p();
    ln_pow1p(n - x) - ln_pow1p(n)
}

/// Annealed Renyi-2 CMI of a Haar-random state; the noise-free late-time
/// value at finite N. Tends to ln 2 with corrections of order 2^{-|A|}.
pub fn haar_renyi2_cmi(part: &Partition, n: usize) -> Result<f64> {
    part.validate(n)?;
    let (a, b, c) = (part.a.len(), part.b.len(), part.c.len());
    Ok(ln_haar_marginal(n, b) + ln_haar_marginal(n, n) - ln_haar_marginal(n, a + b) - ln_haar_marginal(n, b + c))
}

/// log2 of d_R^{5/2} d_E^{1/2} F^{1/4}. Negative F (truncation noise) is
/// clamped to zero, giving -inf.
pub fn qec_bound_log2(f_re: LogAmp, log2_d_r: f64, log2_d_e: f64) -> f64 {
    if f_re.sign < 0.0 {
        log::warn!("clamping negative mutual purity (|F| = {:e}) to zero", f_re.value().abs());
        return f64::NEG_INFINITY;
    }
    if f_re.is_zero() {
        return f64::NEG_INFINITY;
    }
    2.5 * log2_d_r + 0.5 * log2_d_e + 0.25 * f_re.log2_abs()
}

pub fn qec_bound(f_re: f64, d_r: f64, d_e: f64) -> f64 {
    let f = if f_re < 0.0 {
        log::warn!("clamping negative mutual purity {f_re:e} to zero");
        0.0
    } else {
        f_re
    };
    d_r.powf(2.5) * d_e.sqrt() * f.powf(0.25)
}
