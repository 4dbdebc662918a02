use ndarray::{s, Array2, Array3, Axis as NdAxis};
use ndarray_linalg::{JobSvd, QR, SVDDC, SVD};

use super::{label_vec, LogAmp, Propagator, SiteVec, TrotterOrder, TruncationPolicy};
use crate::error::{Error, Result};
use crate::replica_algebra::{BoundaryLabel, SECTOR_DIM};

const D: usize = SECTOR_DIM;

/// Products of per-site overlaps (each within [2^-1, 2]) stay clear of
/// f64 underflow below this length.
pub const MAX_SITES: usize = 1000;

/// Overlaps with id^N and swap^N that the dynamics conserves exactly. They
/// are tracked so that bras proportional to a zero mode are answered without
/// truncation error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Invariants {
    pub id: Option<LogAmp>,
    pub swap: Option<LogAmp>,
}

#[derive(Clone, Debug)]
pub struct ReplicaMPS {
    pub(crate) tensors: Vec<Array3<f64>>,
    pub log_magnitude: f64,
    pub(crate) center: Option<usize>,
    pub(crate) invariants: Invariants,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepReport {
    /// Largest relative discarded weight of any single SVD in the step.
    pub max_discarded: f64,
    /// Sum of relative discarded weights over the step.
    pub total_discarded: f64,
    pub max_bond: usize,
    /// True when some SVD had to discard more than the tolerance because
    /// chi_max was binding.
    pub tolerance_exceeded: bool,
}

fn site_norm(v: &SiteVec) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scale c with v = c * w exactly (up to 1e-15 relative), if any.
pub(crate) fn parallel_factor(v: &SiteVec, w: &SiteVec) -> Option<f64> {
    let ww: f64 = w.iter().map(|x| x * x).sum();
    let c = v.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / ww;
    let resid: f64 = v.iter().zip(w).map(|(a, b)| (a - c * b).powi(2)).sum::<f64>().sqrt();
    if resid <= 1e-15 * site_norm(v).max(1e-300) {
        Some(c)
    } else {
        None
    }
}

/// Plain product of per-site overlaps. Kept in f64 (not log form) so that
/// dyadic overlaps and exact orthogonality survive without rounding; chain
/// lengths are capped well below the underflow range.
pub(crate) fn product_overlap(a: &[SiteVec], b: &[SiteVec]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>()).product()
}

impl ReplicaMPS {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.log_magnitude == f64::NEG_INFINITY
    }

    pub fn bond_dims(&self) -> Vec<usize> {
        self.tensors.iter().take(self.len().saturating_sub(1)).map(|t| t.dim().2).collect()
    }

    pub fn max_bond(&self) -> usize {
        self.tensors.iter().map(|t| t.dim().2).max().unwrap_or(1)
    }

    pub fn canonical_center(&self) -> Option<usize> {
        self.center
    }

    pub fn tensors(&self) -> &[Array3<f64>] {
        &self.tensors
    }

    /// Bond-dimension-one MPS of a product state.
    pub fn product(sites: &[SiteVec]) -> Result<Self> {
        Self::from_terms(&[(1.0, sites.to_vec())])
    }

    /// MPS of sum_k c_k * prod_i v_{k,i}, with bond dimension at most the
    /// number of terms, brought to canonical form with center at site 0.
    pub fn from_terms(terms: &[(f64, Vec<SiteVec>)]) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::InvalidParameter("no terms".into()));
        }
        let n = terms[0].1.len();
        if n < 2 {
            return Err(Error::InvalidParameter("an MPS needs at least two sites".into()));
        }
        if terms.iter().any(|(_, s)| s.len() != n) {
            return Err(Error::InvalidParameter("terms have different lengths".into()));
        }
        let id = label_vec(BoundaryLabel::Id);
        let swap = label_vec(BoundaryLabel::Swap);
        let id_n = vec![id; n];
        let swap_n = vec![swap; n];
        if n > MAX_SITES {
            return Err(Error::InvalidParameter(format!("at most {MAX_SITES} sites supported")));
        }
        let mut inv_id = 0.0;
        let mut inv_swap = 0.0;
        for (c, sites) in terms {
            inv_id += c * product_overlap(&id_n, sites);
            inv_swap += c * product_overlap(&swap_n, sites);
        }

        // Per-term log norms; weights are taken relative to the largest term.
        let mut lns = Vec::with_capacity(terms.len());
        for (c, sites) in terms {
            let mut ln = if *c == 0.0 { f64::NEG_INFINITY } else { c.abs().ln() };
            for v in sites {
                let nv = site_norm(v);
                ln += if nv == 0.0 { f64::NEG_INFINITY } else { nv.ln() };
            }
            lns.push(ln);
        }
        let top = lns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let k = terms.len();
        let mut tensors = Vec::with_capacity(n);
        for i in 0..n {
            let l = if i == 0 { 1 } else { k };
            let r = if i == n - 1 { 1 } else { k };
            let mut a = Array3::<f64>::zeros((l, D, r));
            for (t, (c, sites)) in terms.iter().enumerate() {
                if lns[t] == f64::NEG_INFINITY {
                    continue;
                }
                let v = &sites[i];
                let nv = site_norm(v);
                let w = if i == 0 { c.signum() * (lns[t] - top).exp() } else { 1.0 };
                let li = if i == 0 { 0 } else { t };
                let ri = if i == n - 1 { 0 } else { t };
                for p in 0..D {
                    a[[li, p, ri]] = w * v[p] / nv;
                }
            }
            tensors.push(a);
        }
        let mut m = ReplicaMPS {
            tensors,
            log_magnitude: top,
            center: None,
            invariants: Invariants { id: Some(LogAmp::new(inv_id)), swap: Some(LogAmp::new(inv_swap)) },
        };
        if top == f64::NEG_INFINITY {
            m.set_zero();
        } else {
            m.canonicalize_to(0)?;
        }
        Ok(m)
    }

    fn set_zero(&mut self) {
        for t in self.tensors.iter_mut() {
            *t = Array3::zeros((1, D, 1));
            t[[0, 0, 0]] = 1.0;
        }
        self.log_magnitude = f64::NEG_INFINITY;
        self.center = Some(0);
    }

    /// Full sweep bringing the orthogonality center to `target`.
    pub fn canonicalize_to(&mut self, target: usize) -> Result<()> {
        let n = self.len();
        for i in 0..target {
            self.shift_right(i)?;
        }
        for i in (target + 1..n).rev() {
            self.shift_left(i)?;
        }
        self.center = Some(target);
        self.normalize_center(target)
    }

    fn move_center(&mut self, target: usize) -> Result<()> {
        match self.center {
            None => self.canonicalize_to(target),
            Some(c) => {
                for i in c..target {
                    self.shift_right(i)?;
                }
                for i in (target + 1..=c).rev() {
                    self.shift_left(i)?;
                }
                self.center = Some(target);
                Ok(())
            }
        }
    }

    fn normalize_center(&mut self, c: usize) -> Result<()> {
        if self.is_zero() {
            return Ok(());
        }
        let nrm = self.tensors[c].iter().map(|x| x * x).sum::<f64>().sqrt();
        if !nrm.is_finite() {
            return Err(Error::NonFinite(c));
        }
        if nrm == 0.0 {
            self.set_zero();
            return Ok(());
        }
        self.tensors[c].mapv_inplace(|x| x / nrm);
        self.log_magnitude += nrm.ln();
        Ok(())
    }

    /// QR on site i, pushing R into site i + 1.
    fn shift_right(&mut self, i: usize) -> Result<()> {
        let (l, _, r) = self.tensors[i].dim();
        let mat = self.tensors[i].to_shape((l * D, r)).map_err(shape_err)?.to_owned();
        let (q, rr) = mat.qr()?;
        let k = q.ncols();
        self.tensors[i] = std_layout(q).into_shape_with_order((l, D, k)).map_err(shape_err)?;
        let (_, _, r2) = self.tensors[i + 1].dim();
        let next = self.tensors[i + 1].to_shape((r, D * r2)).map_err(shape_err)?.to_owned();
        self.tensors[i + 1] = std_layout(rr.dot(&next)).into_shape_with_order((k, D, r2)).map_err(shape_err)?;
        Ok(())
    }

    /// LQ on site i (via QR of the transpose), pushing L into site i - 1.
    fn shift_left(&mut self, i: usize) -> Result<()> {
        let (l, _, r) = self.tensors[i].dim();
        let mat = self.tensors[i].to_shape((l, D * r)).map_err(shape_err)?.to_owned();
        let (q, rr) = mat.t().to_owned().qr()?;
        let k = q.ncols();
        self.tensors[i] = std_layout(q.t().to_owned()).into_shape_with_order((k, D, r)).map_err(shape_err)?;
        let (l0, _, _) = self.tensors[i - 1].dim();
        let prev = self.tensors[i - 1].to_shape((l0 * D, l)).map_err(shape_err)?.to_owned();
        self.tensors[i - 1] = std_layout(prev.dot(&rr.t())).into_shape_with_order((l0, D, k)).map_err(shape_err)?;
        Ok(())
    }

    /// Applies a 36x36 gate on bond (i, i+1). The center must be at i or
    /// i + 1; afterwards it sits at i + 1 when `rightward`, else at i.
    fn apply_bond(
        &mut self,
        i: usize,
        gate: &Array2<f64>,
        policy: &TruncationPolicy,
        rightward: bool,
        report: &mut StepReport,
    ) -> Result<()> {
        let (l, _, m) = self.tensors[i].dim();
        let (_, _, r) = self.tensors[i + 1].dim();
        let a = self.tensors[i].to_shape((l * D, m)).map_err(shape_err)?.to_owned();
        let b = self.tensors[i + 1].to_shape((m, D * r)).map_err(shape_err)?.to_owned();
        // theta[l, p, q, r] -> [p q, l r] for the gate product.
        let theta = std_layout(a.dot(&b)).into_shape_with_order((l, D, D, r)).map_err(shape_err)?;
        let grouped = theta
            .permuted_axes([1, 2, 0, 3])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((D * D, l * r))
            .map_err(shape_err)?;
        let moved = std_layout(gate.dot(&grouped)).into_shape_with_order((D, D, l, r)).map_err(shape_err)?;
        let mat = moved
            .permuted_axes([2, 0, 1, 3])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((l * D, D * r))
            .map_err(shape_err)?;
        if mat.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        let (u, sv, vt) = svd(&mat)?;
        let total: f64 = sv.iter().map(|x| x * x).sum();
        if total == 0.0 {
            self.set_zero();
            return Ok(());
        }
        let k = truncation_rank(&sv, total, policy, report);
        let kept: f64 = sv.iter().take(k).map(|x| x * x).sum::<f64>().sqrt();
        self.log_magnitude += kept.ln();
        let u = u.slice(s![.., ..k]).to_owned();
        let vt = vt.slice(s![..k, ..]).to_owned();
        let svals: Vec<f64> = sv.iter().take(k).map(|x| x / kept).collect();
        let (left, right) = if rightward {
            let mut sv_vt = vt;
            for (mut row, sval) in sv_vt.axis_iter_mut(NdAxis(0)).zip(&svals) {
                row *= *sval;
            }
            (u, sv_vt)
        } else {
            let mut u_s = u;
            for (mut col, sval) in u_s.axis_iter_mut(NdAxis(1)).zip(&svals) {
                col *= *sval;
            }
            (u_s, vt)
        };
        self.tensors[i] = std_layout(left).into_shape_with_order((l, D, k)).map_err(shape_err)?;
        self.tensors[i + 1] = std_layout(right).into_shape_with_order((k, D, r)).map_err(shape_err)?;
        self.center = Some(if rightward { i + 1 } else { i });
        Ok(())
    }

    fn apply_layer(
        &mut self,
        parity: usize,
        gate: &Array2<f64>,
        policy: &TruncationPolicy,
        report: &mut StepReport,
    ) -> Result<()> {
        let n = self.len();
        let bonds: Vec<usize> = (parity..n.saturating_sub(1)).step_by(2).collect();
        if bonds.is_empty() || self.is_zero() {
            return Ok(());
        }
        let rightward = match self.center {
            Some(c) => c <= n / 2,
            None => true,
        };
        if rightward {
            for &b in &bonds {
                self.move_center(b)?;
                self.apply_bond(b, gate, policy, true, report)?;
                if self.is_zero() {
                    return Ok(());
                }
            }
        } else {
            for &b in bonds.iter().rev() {
                self.move_center(b + 1)?;
                self.apply_bond(b, gate, policy, false, report)?;
                if self.is_zero() {
                    return Ok(());
                }
            }
        }
        Ok(())
    }

    fn apply_site_gates(&mut self, gates: &[Option<Array2<f64>>]) -> Result<()> {
        if self.is_zero() || gates.iter().all(|g| g.is_none()) {
            return Ok(());
        }
        for (i, g) in gates.iter().enumerate() {
            if let Some(g) = g {
                let (l, _, r) = self.tensors[i].dim();
                let t = self.tensors[i].view().permuted_axes([1, 0, 2]);
                let t = t.as_standard_layout().into_owned().into_shape_with_order((D, l * r)).map_err(shape_err)?;
                let out = std_layout(g.dot(&t)).into_shape_with_order((D, l, r)).map_err(shape_err)?;
                self.tensors[i] = out.permuted_axes([1, 0, 2]).as_standard_layout().into_owned();
            }
        }
        // Only an isolated gate on the center keeps the canonical form.
        let touched: Vec<usize> = gates.iter().enumerate().filter(|(_, g)| g.is_some()).map(|(i, _)| i).collect();
        match (self.center, touched.as_slice()) {
            (Some(c), [only]) if *only == c => self.normalize_center(c),
            _ => {
                let target = self.center.unwrap_or(0);
                self.center = None;
                self.canonicalize_to(target)
            }
        }
    }

    /// Numerical <bra|psi> for a product bra, by left-to-right contraction.
    pub fn overlap_numeric(&self, bra: &[SiteVec]) -> Result<LogAmp> {
        Ok(self.overlap_terms(&[(1.0, bra.to_vec())])?[0])
    }

    /// <bra|psi>, answering bras proportional to a conserved zero mode from
    /// the tracked invariant. An exactly vanishing overlap is `LogAmp::ZERO`.
    pub fn overlap(&self, bra: &[SiteVec]) -> Result<LogAmp> {
        if bra.len() != self.len() {
            return Err(Error::InvalidParameter(format!(
                "bra has {} sites, state has {}",
                bra.len(),
                self.len()
            )));
        }
        let modes = [(BoundaryLabel::Id, self.invariants.id), (BoundaryLabel::Swap, self.invariants.swap)];
        for (label, inv) in modes {
            if let Some(value) = inv {
                let v = label_vec(label);
                let factors: Option<Vec<f64>> = bra.iter().map(|b| parallel_factor(b, &v)).collect();
                if let Some(f) = factors {
                    let mut acc = value;
                    for c in f {
                        acc = acc.scale(c);
                    }
                    return Ok(acc);
                }
            }
        }
        self.overlap_numeric(bra)
    }

    /// Each term's overlap, contracted with a shared running scale so that
    /// linear combinations of the results keep full relative precision.
    pub fn overlap_terms(&self, terms: &[(f64, Vec<SiteVec>)]) -> Result<Vec<LogAmp>> {
        let n = self.len();
        if terms.iter().any(|(_, b)| b.len() != n) {
            return Err(Error::InvalidParameter("bra length mismatch".into()));
        }
        if self.is_zero() {
            return Ok(vec![LogAmp::ZERO; terms.len()]);
        }
        let nt = terms.len();
        // env[t, x]: partial contraction of term t up to the current bond.
        let mut env = Array2::<f64>::ones((nt, 1));
        let mut ln_scale = self.log_magnitude;
        let mut term_ln: Vec<f64> = terms.iter().map(|(c, _)| if *c == 0.0 { f64::NEG_INFINITY } else { c.abs().ln() }).collect();
        let term_sign: Vec<f64> = terms.iter().map(|(c, _)| c.signum()).collect();
        for i in 0..n {
            let (l, _, r) = self.tensors[i].dim();
            let a = self.tensors[i].view();
            let mut next = Array2::<f64>::zeros((nt, r));
            for (t, (_, bra)) in terms.iter().enumerate() {
                let v = &bra[i];
                let nv = site_norm(v);
                if nv == 0.0 {
                    term_ln[t] = f64::NEG_INFINITY;
                    continue;
                }
                term_ln[t] += nv.ln();
                // m[x, y] = sum_p A[x, p, y] v[p] / |v|
                let mut m = Array2::<f64>::zeros((l, r));
                for p in 0..D {
                    let w = v[p] / nv;
                    if w != 0.0 {
                        m.scaled_add(w, &a.slice(s![.., p, ..]));
                    }
                }
                next.row_mut(t).assign(&env.row(t).dot(&m));
            }
            let mx = next.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
            if mx == 0.0 {
                return Ok(vec![LogAmp::ZERO; nt]);
            }
            next.mapv_inplace(|x| x / mx);
            ln_scale += mx.ln();
            env = next;
        }
        Ok((0..nt)
            .map(|t| {
                let x = env[[t, 0]];
                if x == 0.0 || term_ln[t] == f64::NEG_INFINITY {
                    LogAmp::ZERO
                } else {
                    LogAmp { ln_abs: ln_scale + term_ln[t] + x.abs().ln(), sign: term_sign[t] * x.signum() }
                }
            })
            .collect())
    }

    /// Adds exp(log_magnitude) * sum_t c_t prod_i v_{t,i} and recompresses.
    /// The tracked invariants are left as they are: this is used to remove
    /// numerical drift, not to change the state.
    pub(crate) fn add_relative_terms(
        &mut self,
        terms: &[(f64, Vec<SiteVec>)],
        policy: &TruncationPolicy,
        report: &mut StepReport,
    ) -> Result<()> {
        let n = self.len();
        let terms: Vec<&(f64, Vec<SiteVec>)> = terms.iter().filter(|(c, _)| *c != 0.0).collect();
        if terms.is_empty() || self.is_zero() {
            return Ok(());
        }
        if terms.iter().any(|(_, s)| s.len() != n) {
            return Err(Error::InvalidParameter("terms have different lengths".into()));
        }
        // Center normalization makes the current tensors a unit vector.
        self.move_center(0)?;
        self.normalize_center(0)?;
        let k = terms.len();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (l, _, r) = self.tensors[i].dim();
            let nl = if i == 0 { 1 } else { l + k };
            let nr = if i == n - 1 { 1 } else { r + k };
            let mut a = Array3::<f64>::zeros((nl, D, nr));
            a.slice_mut(s![..l, .., ..r]).assign(&self.tensors[i]);
            for (t, (c, sites)) in terms.iter().enumerate() {
                let li = if i == 0 { 0 } else { l + t };
                let ri = if i == n - 1 { 0 } else { r + t };
                let w = if i == 0 { *c } else { 1.0 };
                for p in 0..D {
                    a[[li, p, ri]] = w * sites[i][p];
                }
            }
            out.push(a);
        }
        self.tensors = out;
        self.center = None;
        self.compress(policy, report)
    }

    /// QR sweep to the right end, then an SVD sweep back with truncation.
    fn compress(&mut self, policy: &TruncationPolicy, report: &mut StepReport) -> Result<()> {
        let n = self.len();
        self.canonicalize_to(n - 1)?;
        if self.is_zero() {
            return Ok(());
        }
        for i in (1..n).rev() {
            let (l, _, r) = self.tensors[i].dim();
            let mat = self.tensors[i].to_shape((l, D * r)).map_err(shape_err)?.to_owned();
            let (u, sv, vt) = svd(&mat)?;
            let total: f64 = sv.iter().map(|x| x * x).sum();
            if total == 0.0 {
                self.set_zero();
                return Ok(());
            }
            let k = truncation_rank(&sv, total, policy, report);
            let kept: f64 = sv.iter().take(k).map(|x| x * x).sum::<f64>().sqrt();
            self.log_magnitude += kept.ln();
            let mut us = u.slice(s![.., ..k]).to_owned();
            for (mut col, sval) in us.axis_iter_mut(NdAxis(1)).zip(&sv) {
                col *= *sval / kept;
            }
            self.tensors[i] = std_layout(vt.slice(s![..k, ..]).to_owned()).into_shape_with_order((k, D, r)).map_err(shape_err)?;
            let (l0, _, _) = self.tensors[i - 1].dim();
            let prev = self.tensors[i - 1].to_shape((l0 * D, l)).map_err(shape_err)?.to_owned();
            self.tensors[i - 1] = std_layout(prev.dot(&us)).into_shape_with_order((l0, D, k)).map_err(shape_err)?;
        }
        self.center = Some(0);
        self.normalize_center(0)
    }

    /// <psi|psi> as a natural log, by explicit contraction.
    pub fn ln_norm_sq(&self) -> f64 {
        if self.is_zero() {
            return f64::NEG_INFINITY;
        }
        let mut env = Array2::<f64>::ones((1, 1));
        let mut ln = 2.0 * self.log_magnitude;
        for a in &self.tensors {
            env = transfer(&env, a, a);
            let mx = env.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
            env.mapv_inplace(|x| x / mx);
            ln += mx.ln();
        }
        ln + env[[0, 0]].ln()
    }

    /// Energy expectation sum_b <psi|h_b|psi> / <psi|psi> for a 36x36 bond term.
    pub fn energy(&self, h: &Array2<f64>) -> Result<f64> {
        let n = self.len();
        if self.is_zero() {
            return Ok(0.0);
        }
        // Left and right environments, each normalized to unit max.
        let mut left = vec![Array2::<f64>::ones((1, 1)); n + 1];
        for i in 0..n {
            let e = transfer(&left[i], &self.tensors[i], &self.tensors[i]);
            left[i + 1] = normalized(e);
        }
        let mut right = vec![Array2::<f64>::ones((1, 1)); n + 1];
        for i in (0..n).rev() {
            let e = transfer_right(&right[i + 1], &self.tensors[i], &self.tensors[i]);
            right[i] = normalized(e);
        }
        let mut total = 0.0;
        for i in 0..n - 1 {
            let (l, _, m) = self.tensors[i].dim();
            let (_, _, r) = self.tensors[i + 1].dim();
            let a = self.tensors[i].to_shape((l * D, m)).map_err(shape_err)?.to_owned();
            let b = self.tensors[i + 1].to_shape((m, D * r)).map_err(shape_err)?.to_owned();
            let theta = std_layout(a.dot(&b)).into_shape_with_order((l, D * D, r)).map_err(shape_err)?;
            let mut htheta = Array3::<f64>::zeros((l, D * D, r));
            for x in 0..l {
                for y in 0..r {
                    let col = theta.slice(s![x, .., y]);
                    htheta.slice_mut(s![x, .., y]).assign(&h.dot(&col));
                }
            }
            let num = sandwich(&left[i], &theta, &htheta, &right[i + 2]);
            let den = sandwich(&left[i], &theta, &theta, &right[i + 2]);
            total += num / den;
        }
        Ok(total)
    }

    /// Largest |entry| per tensor; used to audit that the exponential scale
    /// lives in `log_magnitude` rather than in the tensors.
    pub fn tensor_magnitudes(&self) -> Vec<f64> {
        self.tensors.iter().map(|t| t.iter().fold(0.0f64, |a, x| a.max(x.abs()))).collect()
    }

    /// Dense 6^N vector, for small-N checks.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut acc = Array2::<f64>::ones((1, 1));
        for a in &self.tensors {
            let (l, _, r) = a.dim();
            let rows = acc.nrows();
            let mat = a.to_shape((l, D * r)).unwrap().to_owned();
            acc = std_layout(acc.dot(&mat)).into_shape_with_order((rows * D, r)).unwrap();
        }
        let scale = if self.is_zero() { 0.0 } else { self.log_magnitude.exp() };
        acc.column(0).iter().map(|x| x * scale).collect()
    }

    pub(crate) fn from_parts(
        tensors: Vec<Array3<f64>>,
        log_magnitude: f64,
        center: Option<usize>,
        invariants: Invariants,
    ) -> Self {
        ReplicaMPS { tensors, log_magnitude, center, invariants }
    }

    pub(crate) fn invariants(&self) -> Invariants {
        self.invariants
    }
}

/// Row-major copy when needed; LAPACK and `dot` may hand back column-major
/// results, which cannot be reshaped in row-major order without copying.
fn std_layout(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn shape_err(e: ndarray::ShapeError) -> Error {
    Error::Linalg(format!("reshape: {e}"))
}

/// Smallest rank whose discarded weight is within tolerance, capped at
/// chi_max; records the discarded weight in `report`.
fn truncation_rank(sv: &[f64], total: f64, policy: &TruncationPolicy, report: &mut StepReport) -> usize {
    let mut tail = 0.0;
    let mut k_tol = sv.len();
    for idx in (0..sv.len()).rev() {
        let w = sv[idx] * sv[idx] / total;
        if tail + w > policy.discard_tolerance {
            break;
        }
        tail += w;
        k_tol = idx;
    }
    let k = k_tol.max(1).min(policy.chi_max);
    let discarded: f64 = sv.iter().skip(k).map(|x| x * x).sum::<f64>() / total;
    report.max_discarded = report.max_discarded.max(discarded);
    report.total_discarded += discarded;
    if discarded > policy.discard_tolerance {
        report.tolerance_exceeded = true;
    }
    report.max_bond = report.max_bond.max(k);
    k
}

fn svd(mat: &Array2<f64>) -> Result<(Array2<f64>, Vec<f64>, Array2<f64>)> {
    match mat.svddc(JobSvd::Some) {
        Ok((Some(u), s, Some(vt))) => Ok((u, s.to_vec(), vt)),
        _ => {
            // Divide-and-conquer occasionally fails to converge; QR-iteration
            // SVD is slower but more robust.
            let (u, s, vt) = mat.svd(true, true)?;
            let (u, vt) = (u.expect("requested"), vt.expect("requested"));
            let k = s.len();
            Ok((u.slice(s![.., ..k]).to_owned(), s.to_vec(), vt.slice(s![..k, ..]).to_owned()))
        }
    }
}

/// E'[y, y'] = sum_{x, x', p} E[x, x'] A[x, p, y] B[x', p, y'].
fn transfer(env: &Array2<f64>, a: &Array3<f64>, b: &Array3<f64>) -> Array2<f64> {
    let (_, _, ra) = a.dim();
    let (_, _, rb) = b.dim();
    let mut out = Array2::<f64>::zeros((ra, rb));
    for p in 0..D {
        let ap = a.slice(s![.., p, ..]);
        let bp = b.slice(s![.., p, ..]);
        out += &ap.t().dot(&env.dot(&bp));
    }
    out
}

fn transfer_right(env: &Array2<f64>, a: &Array3<f64>, b: &Array3<f64>) -> Array2<f64> {
    let (la, _, _) = a.dim();
    let (lb, _, _) = b.dim();
    let mut out = Array2::<f64>::zeros((la, lb));
    for p in 0..D {
        let ap = a.slice(s![.., p, ..]);
        let bp = b.slice(s![.., p, ..]);
        out += &ap.dot(&env.dot(&bp.t()));
    }
    out
}

fn normalized(mut e: Array2<f64>) -> Array2<f64> {
    let mx = e.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    if mx > 0.0 {
        e.mapv_inplace(|x| x / mx);
    }
    e
}

fn sandwich(left: &Array2<f64>, x: &Array3<f64>, y: &Array3<f64>, right: &Array2<f64>) -> f64 {
    let (_, pd, _) = x.dim();
    let mut total = 0.0;
    for p in 0..pd {
        let xp = x.slice(s![.., p, ..]);
        let yp = y.slice(s![.., p, ..]);
        total += (&xp * &left.dot(&yp).dot(&right.t())).sum();
    }
    total
}

/// One Trotter step: (half-even, odd, half-even) for second order or
/// (even, odd) for first order, then the single-site noise layer.
pub fn trotter_step(mps: &mut ReplicaMPS, prop: &Propagator, policy: &TruncationPolicy) -> Result<StepReport> {
    policy.validate()?;
    if prop.site_gates.len() != mps.len() && !prop.site_gates.is_empty() {
        return Err(Error::InvalidParameter("site gate count does not match the chain".into()));
    }
    let mut report = StepReport { max_bond: mps.max_bond(), ..Default::default() };
    match prop.order {
        TrotterOrder::Second => {
            mps.apply_layer(0, &prop.bond_half, policy, &mut report)?;
            mps.apply_layer(1, &prop.bond_full, policy, &mut report)?;
            mps.apply_layer(0, &prop.bond_half, policy, &mut report)?;
        }
        TrotterOrder::First => {
            mps.apply_layer(0, &prop.bond_full, policy, &mut report)?;
            mps.apply_layer(1, &prop.bond_full, policy, &mut report)?;
        }
    }
    mps.apply_site_gates(&prop.site_gates)?;
    if !prop.preserves_id {
        mps.invariants.id = None;
    }
    if !prop.preserves_swap {
        mps.invariants.swap = None;
    }
    report.max_bond = report.max_bond.max(mps.max_bond());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn svd_contract_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..3 {
            let m = Array2::from_shape_fn((256, 256), |_| rng.random_range(-1.0..1.0));
            let (u, s, vt) = svd(&m).unwrap();
            assert!(s.windows(2).all(|w| w[0] >= w[1]));
            let mut us = u.clone();
            for (mut col, x) in us.axis_iter_mut(NdAxis(1)).zip(&s) {
                col *= *x;
            }
            let err = (&us.dot(&vt) - &m).iter().fold(0.0f64, |a, x| a.max(x.abs()));
            assert!(err <= 1e-10, "{err}");
        }
    }

    #[test]
    fn truncation_rank_honours_both_limits() {
        let sv = [1.0, 0.1, 1e-4, 1e-7];
        let total: f64 = sv.iter().map(|x| x * x).sum();
        let mut r = StepReport::default();
        let k = truncation_rank(&sv, total, &TruncationPolicy { chi_max: 10, discard_tolerance: 1e-12 }, &mut r);
        assert_eq!(k, 3);
        assert!(!r.tolerance_exceeded);
        let mut r = StepReport::default();
        let k = truncation_rank(&sv, total, &TruncationPolicy { chi_max: 1, discard_tolerance: 1e-12 }, &mut r);
        assert_eq!(k, 1);
        assert!(r.tolerance_exceeded && r.max_discarded > 9e-3);
    }

    #[test]
    fn product_overlap_is_exact_for_dyadic_sites() {
        let id = label_vec(BoundaryLabel::Id);
        let swap = label_vec(BoundaryLabel::Swap);
        for n in [1usize, 10, 40, 200] {
            assert_eq!(product_overlap(&vec![id; n], &vec![swap; n]), 0.5f64.powi(n as i32));
        }
    }
}
