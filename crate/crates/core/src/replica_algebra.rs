//! Operators and boundary states of the two-replica effective theory.
//!
//! A replica site carries four contour qubits (forward/backward for each of
//! two replicas). Basis index bits are c1 c2 c3 c4 with c1 most significant.
//! Contours 1 and 3 carry the Pauli matrices, contours 2 and 4 their complex
//! conjugates.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::kron;

pub const SITE_DIM: usize = 16;
pub const BOND_DIM: usize = SITE_DIM * SITE_DIM;

/// Basis states of one site with zero U(1) charge s1 - s2 + s3 - s4.
/// Every boundary state, the bond Hamiltonian and the noise terms live in
/// (or preserve) this six-dimensional sector.
pub const SECTOR: [usize; 6] = [0b0000, 0b0011, 0b0110, 0b1001, 0b1100, 0b1111];
pub const SECTOR_DIM: usize = 6;

const C0: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const C1: Complex64 = Complex64 { re: 1.0, im: 0.0 };

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn pauli(self) -> Array2<Complex64> {
        let i = Complex64::new(0.0, 1.0);
        match self {
            Axis::X => ndarray::arr2(&[[C0, C1], [C1, C0]]),
            Axis::Y => ndarray::arr2(&[[C0, -i], [i, C0]]),
            Axis::Z => ndarray::arr2(&[[C1, C0], [C0, -C1]]),
        }
    }
}

fn eye2() -> Array2<Complex64> {
    Array2::eye(2)
}

/// Places 2x2 blocks on the four contours and returns their Kronecker product.
fn on_contours(blocks: [Array2<Complex64>; 4]) -> Array2<Complex64> {
    let [a, b, c, d] = blocks;
    kron(&kron(&kron(&a, &b), &c), &d)
}

#[derive(Clone, Debug)]
pub struct ContourPauli {
    pub contour: usize,
    pub axis: Axis,
    pub matrix: Array2<Complex64>,
}

impl ContourPauli {
    /// `contour` is 1-based.
    pub fn new(contour: usize, axis: Axis) -> Result<Self> {
        if !(1..=4).contains(&contour) {
            return Err(Error::InvalidParameter(format!("contour index {contour} not in 1..=4")));
        }
        let mut sigma = axis.pauli();
        if contour % 2 == 0 {
            sigma.mapv_inplace(|z| z.conj());
        }
        let mut blocks = [eye2(), eye2(), eye2(), eye2()];
        blocks[contour - 1] = sigma;
        Ok(ContourPauli { contour, axis, matrix: on_contours(blocks) })
    }
}

fn tau(contour: usize, axis: Axis) -> Array2<Complex64> {
    ContourPauli::new(contour, axis).expect("contour in range").matrix
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SiteLabel {
    Id,
    Swap,
    Zero4,
    Coll,
    Err(f64),
    Encode,
    Custom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryLabel {
    Id,
    Swap,
    Zero4,
    Coll,
    Encode,
}

impl FromStr for BoundaryLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "id" => Ok(BoundaryLabel::Id),
            "swap" => Ok(BoundaryLabel::Swap),
            "zero4" => Ok(BoundaryLabel::Zero4),
            "coll" => Ok(BoundaryLabel::Coll),
            "encode" => Ok(BoundaryLabel::Encode),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }
}

/// One replica site: 16 amplitudes in contour-bit order.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteState {
    pub amplitudes: [Complex64; SITE_DIM],
    pub label: SiteLabel,
}

impl SiteState {
    pub fn from_bits(bits: &[usize], weight: f64, label: SiteLabel) -> Self {
        let mut amplitudes = [C0; SITE_DIM];
        for &b in bits {
            amplitudes[b] += Complex64::new(weight, 0.0);
        }
        SiteState { amplitudes, label }
    }

    pub fn custom(amplitudes: [Complex64; SITE_DIM]) -> Self {
        SiteState { amplitudes, label: SiteLabel::Custom }
    }

    /// <self|other>, antilinear in self.
    pub fn inner(&self, other: &SiteState) -> Complex64 {
        self.amplitudes.iter().zip(other.amplitudes.iter()).map(|(a, b)| a.conj() * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, s: f64) -> SiteState {
        let mut amplitudes = self.amplitudes;
        amplitudes.iter_mut().for_each(|a| *a *= s);
        SiteState { amplitudes, label: SiteLabel::Custom }
    }

    pub fn combine(&self, a: f64, other: &SiteState, b: f64) -> SiteState {
        let mut amplitudes = [C0; SITE_DIM];
        for k in 0..SITE_DIM {
            amplitudes[k] = self.amplitudes[k] * a + other.amplitudes[k] * b;
        }
        SiteState { amplitudes, label: SiteLabel::Custom }
    }

    pub fn apply(&self, op: &Array2<Complex64>) -> SiteState {
        let mut amplitudes = [C0; SITE_DIM];
        for (i, out) in amplitudes.iter_mut().enumerate() {
            *out = (0..SITE_DIM).map(|j| op[[i, j]] * self.amplitudes[j]).sum();
        }
        SiteState { amplitudes, label: SiteLabel::Custom }
    }

    /// Real amplitudes on the charge-neutral sector. Fails if any weight
    /// lies outside the sector or any amplitude has an imaginary part.
    pub fn to_sector(&self) -> Result<[f64; SECTOR_DIM]> {
        let mut out = [0.0; SECTOR_DIM];
        for (k, a) in self.amplitudes.iter().enumerate() {
            match SECTOR.iter().position(|&s| s == k) {
                Some(pos) => {
                    if a.im.abs() > 1e-14 {
                        return Err(Error::OutsideSector);
                    }
                    out[pos] = a.re;
                }
                None => {
                    if a.norm() > 1e-14 {
                        return Err(Error::OutsideSector);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_sector(v: &[f64; SECTOR_DIM]) -> SiteState {
        let mut amplitudes = [C0; SITE_DIM];
        for (pos, &k) in SECTOR.iter().enumerate() {
            amplitudes[k] = Complex64::new(v[pos], 0.0);
        }
        SiteState { amplitudes, label: SiteLabel::Custom }
    }
}

pub fn boundary_state(label: BoundaryLabel) -> SiteState {
    match label {
        BoundaryLabel::Id => SiteState::from_bits(&[0b0000, 0b0011, 0b1100, 0b1111], 0.5, SiteLabel::Id),
        BoundaryLabel::Swap => SiteState::from_bits(&[0b0000, 0b0110, 0b1001, 0b1111], 0.5, SiteLabel::Swap),
        BoundaryLabel::Zero4 => SiteState::from_bits(&[0b0000], 1.0, SiteLabel::Zero4),
        BoundaryLabel::Coll => SiteState::from_bits(&[0b0000, 0b1111], 1.0, SiteLabel::Coll),
        BoundaryLabel::Encode => {
            let id = boundary_state(BoundaryLabel::Id);
            let swap = boundary_state(BoundaryLabel::Swap);
            SiteState { label: SiteLabel::Encode, ..swap.combine(1.0, &id, -0.5) }
        }
    }
}

/// Depolarizing Kraus set {sqrt(1-l) 1, sqrt(l/3) sigma}.
fn depolarizing_kraus(lambda: f64) -> Vec<Array2<Complex64>> {
    let mut out = vec![eye2() * Complex64::new((1.0 - lambda).sqrt(), 0.0)];
    for ax in Axis::ALL {
        out.push(ax.pauli() * Complex64::new((lambda / 3.0).sqrt(), 0.0));
    }
    out
}

/// Per-site factor of the error boundary state for mutual purity:
/// 2 * sum_{m,n} (E_m x E_n^* x E_n x E_m^*) |id>>. The factor 2 is the
/// per-site share of the global 2^N prefactor.
pub fn error_boundary_site(lambda: f64) -> Result<SiteState> {
    if !(0.0..=0.75).contains(&lambda) || lambda.is_nan() {
        return Err(Error::NoiseOutOfRange(lambda));
    }
    let id = boundary_state(BoundaryLabel::Id);
    let kraus = depolarizing_kraus(lambda);
    let mut acc = [C0; SITE_DIM];
    for em in &kraus {
        for en in &kraus {
            let op = on_contours([em.clone(), en.mapv(|z| z.conj()), en.clone(), em.mapv(|z| z.conj())]);
            let v = id.apply(&op);
            for k in 0..SITE_DIM {
                acc[k] += v.amplitudes[k] * 2.0;
            }
        }
    }
    Ok(SiteState { amplitudes: acc, label: SiteLabel::Err(lambda) })
}

/// Closed-form id/swap coefficients of `error_boundary_site` (without the
/// factor 2): ((1 - 4l/3)^2, (4l/3)(1 - 2l/3)).
pub fn error_site_coefficients(lambda: f64) -> (f64, f64) {
    let a = 1.0 - 4.0 * lambda / 3.0;
    (a * a, (4.0 * lambda / 3.0) * (1.0 - 2.0 * lambda / 3.0))
}

#[derive(Clone, Debug)]
pub struct BondOperator {
    pub matrix: Array2<Complex64>,
    pub j: f64,
}

#[derive(Clone, Debug)]
pub struct SiteOperator {
    pub matrix: Array2<Complex64>,
}

/// (J/2) sum_{alpha,beta} (sum_a (-1)^a tau_{i,a}^alpha tau_{j,a}^beta)^2 on two sites.
pub fn build_bond_hamiltonian(j: f64) -> Result<BondOperator> {
    if !(j > 0.0) || !j.is_finite() {
        return Err(Error::InvalidParameter(format!("coupling J must be positive, got {j}")));
    }
    static UNIT: OnceLock<Array2<Complex64>> = OnceLock::new();
    let unit = UNIT.get_or_init(|| {
        // S = sum_a s_a tau_a^alpha (x) tau_a^beta, so
        // S^2 = sum_{a,b} s_a s_b (tau_a^alpha tau_b^alpha) (x) (tau_a^beta tau_b^beta).
        let mut h = Array2::<Complex64>::zeros((BOND_DIM, BOND_DIM));
        let sign = |a: usize| if a % 2 == 0 { 1.0 } else { -1.0 };
        for alpha in Axis::ALL {
            for beta in Axis::ALL {
                for a in 1..=4 {
                    for b in 1..=4 {
                        let left = tau(a, alpha).dot(&tau(b, alpha));
                        let right = tau(a, beta).dot(&tau(b, beta));
                        h.scaled_add(Complex64::new(0.5 * sign(a) * sign(b), 0.0), &kron(&left, &right));
                    }
                }
            }
        }
        h
    });
    Ok(BondOperator { matrix: unit.mapv(|z| z * j), j })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Depolarizing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicaMask {
    Replica1Only,
    BothReplicas,
    KrausDressing,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScaling {
    Constant,
    OneOverN { mu: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub lambda: f64,
    pub site_mask: Vec<bool>,
    pub replica_mask: ReplicaMask,
    pub scaling: NoiseScaling,
}

impl NoiseSpec {
    pub fn uniform(n: usize, lambda: f64, replica_mask: ReplicaMask) -> Self {
        NoiseSpec {
            kind: NoiseKind::Depolarizing,
            lambda,
            site_mask: vec![true; n],
            replica_mask,
            scaling: NoiseScaling::Constant,
        }
    }

    pub fn scaled(n: usize, mu: f64, replica_mask: ReplicaMask) -> Self {
        NoiseSpec { scaling: NoiseScaling::OneOverN { mu }, ..Self::uniform(n, mu / n as f64, replica_mask) }
    }

    /// Effective lambda, resolving mu/N scaling against the mask length.
    pub fn resolved_lambda(&self) -> f64 {
        match self.scaling {
            NoiseScaling::Constant => self.lambda,
            NoiseScaling::OneOverN { mu } => mu / self.site_mask.len() as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.resolved_lambda();
        if !(0.0..0.75).contains(&l) {
            return Err(Error::NoiseOutOfRange(l));
        }
        Ok(())
    }

    pub fn is_trivial(&self) -> bool {
        self.resolved_lambda() == 0.0 || !self.site_mask.iter().any(|&m| m)
    }
}

/// Single-site noise generator. With delta_t the time over which the channel
/// of strength lambda acts, exp(-delta_t * H) is exactly that channel on the
/// affected contour pair.
pub fn build_noise_perturbation(spec: &NoiseSpec, delta_t: f64) -> Result<SiteOperator> {
    spec.validate()?;
    if !(delta_t > 0.0) {
        return Err(Error::InvalidParameter(format!("delta_t must be positive, got {delta_t}")));
    }
    let lambda = spec.resolved_lambda();
    let eye16: Array2<Complex64> = Array2::eye(SITE_DIM);
    if lambda == 0.0 {
        return Ok(SiteOperator { matrix: Array2::zeros((SITE_DIM, SITE_DIM)) });
    }
    let rate = 3.0 / (4.0 * delta_t) * (1.0 / (1.0 - 4.0 * lambda / 3.0)).ln();
    let pair_term = |a: usize, b: usize| {
        let mut s = eye16.clone();
        for ax in Axis::ALL {
            s = s - tau(a, ax).dot(&tau(b, ax)) * Complex64::new(1.0 / 3.0, 0.0);
        }
        s
    };
    let m = match spec.replica_mask {
        ReplicaMask::Replica1Only => pair_term(1, 2),
        ReplicaMask::BothReplicas => pair_term(1, 2) + pair_term(3, 4),
        ReplicaMask::KrausDressing => {
            return Err(Error::InvalidParameter(
                "kraus dressing enters through the boundary state, not the evolution".into(),
            ))
        }
    };
    Ok(SiteOperator { matrix: m * Complex64::new(rate, 0.0) })
}

/// Swaps contours 2 and 4 on one site.
pub fn contour_24_exchange() -> Array2<Complex64> {
    let mut p = Array2::<Complex64>::zeros((SITE_DIM, SITE_DIM));
    for k in 0..SITE_DIM {
        let c2 = (k >> 2) & 1;
        let c4 = k & 1;
        let image = (k & 0b1010) | (c4 << 2) | c2;
        p[[image, k]] = C1;
    }
    p
}

/// Restricts a two-site operator to the sector x sector block (36 x 36, real).
pub fn bond_to_sector(op: &Array2<Complex64>) -> Result<Array2<f64>> {
    restrict(op, 2)
}

pub fn site_to_sector(op: &Array2<Complex64>) -> Result<Array2<f64>> {
    restrict(op, 1)
}

fn restrict(op: &Array2<Complex64>, sites: u32) -> Result<Array2<f64>> {
    let dim = SECTOR_DIM.pow(sites);
    let full_index = |mut r: usize| {
        let mut digits = Vec::with_capacity(sites as usize);
        for _ in 0..sites {
            digits.push(SECTOR[r % SECTOR_DIM]);
            r /= SECTOR_DIM;
        }
        digits.iter().rev().fold(0, |acc, &d| acc * SITE_DIM + d)
    };
    let map: Vec<usize> = (0..dim).map(full_index).collect();
    // The sector must be invariant: no matrix element may connect it to the rest.
    let inside: std::collections::HashSet<usize> = map.iter().copied().collect();
    for &c in &map {
        for r in 0..op.nrows() {
            if !inside.contains(&r) && op[[r, c]].norm() > 1e-12 {
                return Err(Error::OutsideSector);
            }
        }
    }
    let mut out = Array2::<f64>::zeros((dim, dim));
    for (i, &ri) in map.iter().enumerate() {
        for (j, &cj) in map.iter().enumerate() {
            let z = op[[ri, cj]];
            if z.im.abs() > 1e-12 {
                return Err(Error::OutsideSector);
            }
            out[[i, j]] = z.re;
        }
    }
    Ok(out)
}

impl fmt::Display for BoundaryLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BoundaryLabel::Id => "id",
            BoundaryLabel::Swap => "swap",
            BoundaryLabel::Zero4 => "zero4",
            BoundaryLabel::Coll => "coll",
            BoundaryLabel::Encode => "encode",
        };
        f.write_str(s)
    }
}
