//! Evolution split into the exactly conserved zero-mode part and a decaying
//! remainder.
//!
//! id^N is a zero mode of every generator used here, and swap^N is one as
//! well while no noise layer acts. Writing psi(t) = P psi0 + phi(t), with P
//! the orthogonal projector on the span of the zero modes, only
//! phi is evolved as an MPS. Amplitudes are then
//!
//!   <b|psi(t)> = <b|P psi0> + <b'|phi(t)>,   b' = b - P b,
//!
//! where the first term is exact and the second is insensitive to
//! truncation errors leaking into the zero modes. Without this split,
//! observables of order 2^-N (fidelity, mutual purity, late-time XEB) are
//! swamped by the O(1) conserved component.

use super::mps::{parallel_factor, product_overlap};
use super::{label_vec, trotter_step, LogAmp, Propagator, ReplicaMPS, SiteVec, StepReport, TruncationPolicy};
use crate::error::{Error, Result};
use crate::replica_algebra::BoundaryLabel;

/// Amplitude split into the conserved part and the decaying remainder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Amplitude {
    pub stationary: LogAmp,
    pub transient: LogAmp,
}

impl Amplitude {
    pub fn total(&self) -> LogAmp {
        self.stationary.add(self.transient)
    }
}

pub struct SplitEvolution {
    n: usize,
    modes: Vec<Vec<SiteVec>>,
    gram_inv: Vec<Vec<f64>>,
    /// Overlaps <v_i|psi0>, conserved in time.
    conserved: Vec<f64>,
    phi: ReplicaMPS,
    prop: Propagator,
    policy: TruncationPolicy,
    steps: usize,
}

fn invert(g: &[Vec<f64>]) -> Vec<Vec<f64>> {
    match g.len() {
        1 => vec![vec![1.0 / g[0][0]]],
        2 => {
            let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
            vec![vec![g[1][1] / det, -g[0][1] / det], vec![-g[1][0] / det, g[0][0] / det]]
        }
        _ => unreachable!("at most two zero modes"),
    }
}

impl SplitEvolution {
    /// `ket` is a sum of product states sum_k c_k prod_i v_{k,i}.
    pub fn new(ket: &[(f64, Vec<SiteVec>)], prop: Propagator, policy: TruncationPolicy) -> Result<Self> {
        policy.validate()?;
        let n = ket.first().map(|(_, s)| s.len()).unwrap_or(0);
        if n < 2 {
            return Err(Error::InvalidParameter("need at least two sites".into()));
        }
        if !prop.preserves_id {
            return Err(Error::InvalidParameter("propagator does not conserve id^N".into()));
        }
        let mut modes = vec![vec![label_vec(BoundaryLabel::Id); n]];
        if prop.preserves_swap {
            modes.push(vec![label_vec(BoundaryLabel::Swap); n]);
        }
        let gram: Vec<Vec<f64>> =
            modes.iter().map(|a| modes.iter().map(|b| product_overlap(a, b)).collect()).collect();
        let gram_inv = invert(&gram);

        let mut conserved = vec![0.0; modes.len()];
        for (c, sites) in ket {
            for (i, v) in modes.iter().enumerate() {
                conserved[i] += c * product_overlap(v, sites);
            }
        }
        // Expansion coefficients of P psi0 in the (non-orthogonal) mode basis.
        let coeffs: Vec<f64> = (0..modes.len())
            .map(|i| (0..modes.len()).map(|j| gram_inv[i][j] * conserved[j]).sum())
            .collect();

        // Terms of phi0 = psi0 - P psi0. A ket term that is itself a zero mode
        // is removed exactly instead of being cancelled numerically.
        let mut terms: Vec<(f64, Vec<SiteVec>)> = Vec::new();
        let mut absorbed = vec![0.0; modes.len()];
        for (c, sites) in ket {
            match Self::as_mode(&modes, sites) {
                Some((i, f)) => absorbed[i] += c * f,
                None => terms.push((*c, sites.clone())),
            }
        }
        for (i, v) in modes.iter().enumerate() {
            let rest = coeffs[i] - absorbed[i];
            if rest != 0.0 && !terms.is_empty() {
                terms.push((-rest, v.clone()));
            }
        }
        let phi = if terms.is_empty() {
            ReplicaMPS::from_terms(&[(0.0, modes[0].clone())])?
        } else {
            ReplicaMPS::from_terms(&terms)?
        };
        Ok(SplitEvolution { n, modes, gram_inv, conserved, phi, prop, policy, steps: 0 })
    }

    /// (mode index, factor) if `sites` equals factor * mode site-wise.
    fn as_mode(modes: &[Vec<SiteVec>], sites: &[SiteVec]) -> Option<(usize, f64)> {
        for (i, v) in modes.iter().enumerate() {
            let factors: Option<Vec<f64>> = sites.iter().zip(v).map(|(s, m)| parallel_factor(s, m)).collect();
            if let Some(f) = factors {
                return Some((i, f.iter().product()));
            }
        }
        None
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn transient_state(&self) -> &ReplicaMPS {
        &self.phi
    }

    pub fn step(&mut self) -> Result<StepReport> {
        self.steps += 1;
        let mut report = trotter_step(&mut self.phi, &self.prop, &self.policy)?;
        self.deflate(&mut report)?;
        Ok(report)
    }

    /// Removes the zero-mode content that truncation leaks into phi. It does
    /// not reach the amplitudes (the bras are projected), but left in place
    /// it stops decaying and eventually sets the truncation scale for the
    /// decaying part that carries the signal.
    fn deflate(&mut self, report: &mut StepReport) -> Result<()> {
        if self.phi.is_zero() {
            return Ok(());
        }
        let scale = self.phi.log_magnitude;
        let rel: Vec<f64> = self
            .modes
            .iter()
            .map(|v| self.phi.overlap_numeric(v).map(|a| if a.is_zero() { 0.0 } else { a.sign * (a.ln_abs - scale).exp() }))
            .collect::<Result<_>>()?;
        let k = self.modes.len();
        let coeffs: Vec<f64> = (0..k).map(|i| (0..k).map(|j| self.gram_inv[i][j] * rel[j]).sum()).collect();
        if coeffs.iter().all(|c| c.abs() < 1e-15) {
            return Ok(());
        }
        let terms: Vec<(f64, Vec<SiteVec>)> = coeffs.iter().zip(&self.modes).map(|(c, v)| (-c, v.clone())).collect();
        self.phi.add_relative_terms(&terms, &self.policy, report)
    }

    /// Split amplitude <bra|psi(t)> for a product bra.
    pub fn amplitude(&self, bra: &[SiteVec]) -> Result<Amplitude> {
        if bra.len() != self.n {
            return Err(Error::InvalidParameter("bra length mismatch".into()));
        }
        // <bra|v_j>, and b = G^{-1} <v|bra>.
        let bra_modes: Vec<f64> = self.modes.iter().map(|v| product_overlap(bra, v)).collect();
        if let Some((i, f)) = Self::as_mode(&self.modes, bra) {
            return Ok(Amplitude { stationary: LogAmp::new(self.conserved[i] * f), transient: LogAmp::ZERO });
        }
        let k = self.modes.len();
        // sum_ij <bra|v_i> Ginv_ij <v_j|psi0>
        let mut stationary = 0.0;
        for i in 0..k {
            for j in 0..k {
                stationary += bra_modes[i] * self.gram_inv[i][j] * self.conserved[j];
            }
        }
        let stationary = LogAmp::new(stationary);
        let proj: Vec<f64> = (0..k).map(|i| (0..k).map(|j| self.gram_inv[i][j] * bra_modes[j]).sum()).collect();
        let mut terms = vec![(1.0, bra.to_vec())];
        for (i, v) in self.modes.iter().enumerate() {
            if proj[i] != 0.0 {
                terms.push((-proj[i], v.clone()));
            }
        }
        let parts = self.phi.overlap_terms(&terms)?;
        let transient = parts.into_iter().fold(LogAmp::ZERO, |acc, x| acc.add(x));
        Ok(Amplitude { stationary, transient })
    }
}
