//! Matrix-product states over replica sites and imaginary-time TEBD.
//!
//! Tensors are stored on the six-dimensional charge-neutral sector of each
//! site (see [`crate::replica_algebra::SECTOR`]). In that basis the bond
//! Hamiltonian, the noise generators and every boundary state are real, so
//! all tensor data is `f64`.

mod checkpoint;
mod mps;
mod split;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use mps::{trotter_step, ReplicaMPS, StepReport};
pub use split::{Amplitude, SplitEvolution};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::expm_neg_sym;
use crate::replica_algebra::{
    boundary_state, bond_to_sector, build_bond_hamiltonian, build_noise_perturbation, site_to_sector,
    BoundaryLabel, NoiseSpec, SiteState, SECTOR_DIM,
};

pub type SiteVec = [f64; SECTOR_DIM];

pub fn sector_vec(s: &SiteState) -> Result<SiteVec> {
    s.to_sector()
}

pub fn label_vec(label: BoundaryLabel) -> SiteVec {
    boundary_state(label).to_sector().expect("boundary states lie in the sector")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationPolicy {
    pub chi_max: usize,
    pub discard_tolerance: f64,
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        TruncationPolicy { chi_max: 64, discard_tolerance: 1e-12 }
    }
}

impl TruncationPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.chi_max < 1 {
            return Err(Error::InvalidParameter("chi_max must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.discard_tolerance) {
            return Err(Error::InvalidParameter(format!(
                "discard tolerance {} not in [0, 1)",
                self.discard_tolerance
            )));
        }
        Ok(())
    }
}

/// Real amplitude stored as sign and natural log of the magnitude.
/// Exact zero has sign 0 and ln_abs = -inf.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogAmp {
    pub ln_abs: f64,
    pub sign: f64,
}

impl LogAmp {
    pub const ZERO: LogAmp = LogAmp { ln_abs: f64::NEG_INFINITY, sign: 0.0 };
    pub const ONE: LogAmp = LogAmp { ln_abs: 0.0, sign: 1.0 };

    pub fn new(x: f64) -> LogAmp {
        if x == 0.0 {
            LogAmp::ZERO
        } else {
            LogAmp { ln_abs: x.abs().ln(), sign: x.signum() }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.sign == 0.0
    }

    pub fn value(&self) -> f64 {
        if self.is_zero() {
            0.0
        } else {
            self.sign * self.ln_abs.exp()
        }
    }

    pub fn log2_abs(&self) -> f64 {
        self.ln_abs / std::f64::consts::LN_2
    }

    pub fn mul(self, other: LogAmp) -> LogAmp {
        if self.is_zero() || other.is_zero() {
            return LogAmp::ZERO;
        }
        LogAmp { ln_abs: self.ln_abs + other.ln_abs, sign: self.sign * other.sign }
    }

    pub fn scale(self, x: f64) -> LogAmp {
        self.mul(LogAmp::new(x))
    }

    pub fn add(self, other: LogAmp) -> LogAmp {
        if self.is_zero() {
            return other;
        }
        if other.is_zero() {
            return self;
        }
        let (big, small) = if self.ln_abs >= other.ln_abs { (self, other) } else { (other, self) };
        let r = small.sign * big.sign * (small.ln_abs - big.ln_abs).exp();
        let s = 1.0 + r;
        if s == 0.0 {
            return LogAmp::ZERO;
        }
        LogAmp { ln_abs: big.ln_abs + s.abs().ln(), sign: big.sign * s.signum() }
    }

    pub fn neg(self) -> LogAmp {
        LogAmp { ln_abs: self.ln_abs, sign: -self.sign }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrotterOrder {
    First,
    #[default]
    Second,
}

/// Time discretization. With the default `j = 1 / delta_t` convention each
/// Trotter step is one Brownian correlation step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionParams {
    pub j: f64,
    pub delta_t: f64,
    #[serde(default)]
    pub order: TrotterOrder,
    /// Time over which a noise channel of strength lambda acts. Defaults to
    /// `delta_t`, i.e. one channel per step.
    #[serde(default)]
    pub noise_period: Option<f64>,
}

impl Default for EvolutionParams {
    fn default() -> Self {
        EvolutionParams { j: 1.0, delta_t: 1.0, order: TrotterOrder::Second, noise_period: None }
    }
}

impl EvolutionParams {
    pub fn noise_period(&self) -> f64 {
        self.noise_period.unwrap_or(self.delta_t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.j > 0.0 && self.j.is_finite()) {
            return Err(Error::InvalidParameter(format!("J must be positive, got {}", self.j)));
        }
        if !(self.delta_t > 0.0 && self.delta_t.is_finite()) {
            return Err(Error::InvalidParameter(format!("delta_t must be positive, got {}", self.delta_t)));
        }
        if let Some(p) = self.noise_period {
            if !(p > 0.0) {
                return Err(Error::InvalidParameter(format!("noise period must be positive, got {p}")));
            }
        }
        Ok(())
    }
}

/// Gates for one Trotter step, restricted to the sector.
#[derive(Clone, Debug)]
pub struct Propagator {
    pub bond_full: Array2<f64>,
    pub bond_half: Array2<f64>,
    pub site_gates: Vec<Option<Array2<f64>>>,
    pub order: TrotterOrder,
    pub preserves_id: bool,
    pub preserves_swap: bool,
}

pub fn bond_hamiltonian_sector(j: f64) -> Result<Array2<f64>> {
    bond_to_sector(&build_bond_hamiltonian(j)?.matrix)
}

impl Propagator {
    pub fn new(params: &EvolutionParams, n: usize, noise: Option<&NoiseSpec>) -> Result<Self> {
        params.validate()?;
        let h = bond_hamiltonian_sector(params.j)?;
        let bond_full = expm_neg_sym(&h, params.delta_t)?;
        let bond_half = expm_neg_sym(&h, params.delta_t / 2.0)?;
        let mut site_gates = vec![None; n];
        if let Some(spec) = noise {
            if spec.site_mask.len() != n {
                return Err(Error::InvalidParameter(format!(
                    "noise mask has {} entries for {} sites",
                    spec.site_mask.len(),
                    n
                )));
            }
            if !spec.is_trivial() {
                let gen = site_to_sector(&build_noise_perturbation(spec, params.noise_period())?.matrix)?;
                let gate = expm_neg_sym(&gen, params.delta_t)?;
                for (k, &on) in spec.site_mask.iter().enumerate() {
                    if on {
                        site_gates[k] = Some(gate.clone());
                    }
                }
            } else {
                spec.validate()?;
            }
        }
        Self::from_gates(bond_full, bond_half, site_gates, params.order)
    }

    pub fn from_gates(
        bond_full: Array2<f64>,
        bond_half: Array2<f64>,
        site_gates: Vec<Option<Array2<f64>>>,
        order: TrotterOrder,
    ) -> Result<Self> {
        let d = SECTOR_DIM;
        for g in [&bond_full, &bond_half] {
            if g.dim() != (d * d, d * d) || g.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidParameter("bond gate must be a finite 36x36 matrix".into()));
            }
        }
        for g in site_gates.iter().flatten() {
            if g.dim() != (d, d) || g.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidParameter("site gate must be a finite 6x6 matrix".into()));
            }
        }
        let id = label_vec(BoundaryLabel::Id);
        let swap = label_vec(BoundaryLabel::Swap);
        let fixes = |v: &SiteVec, gates: &[&Array2<f64>], sites: &[&Array2<f64>]| {
            let pair: Vec<f64> = (0..d * d).map(|k| v[k / d] * v[k % d]).collect();
            let bond_ok = gates.iter().all(|g| {
                (0..d * d).all(|c| ((0..d * d).map(|r| pair[r] * g[[r, c]]).sum::<f64>() - pair[c]).abs() < 1e-12)
            });
            let site_ok = sites
                .iter()
                .all(|g| (0..d).all(|c| ((0..d).map(|r| v[r] * g[[r, c]]).sum::<f64>() - v[c]).abs() < 1e-12));
            bond_ok && site_ok
        };
        let bonds = [&bond_full, &bond_half];
        let sites: Vec<&Array2<f64>> = site_gates.iter().flatten().collect();
        let preserves_id = fixes(&id, &bonds, &sites);
        let preserves_swap = fixes(&swap, &bonds, &sites);
        Ok(Propagator { bond_full, bond_half, site_gates, order, preserves_id, preserves_swap })
    }

    pub fn has_noise(&self) -> bool {
        self.site_gates.iter().any(|g| g.is_some())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::replica_algebra::ReplicaMask;
    use proptest::prelude::*;

    fn site_vec() -> impl Strategy<Value = SiteVec> {
        prop::array::uniform6(-1.0f64..1.0).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 0.1))
    }

    fn chain(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<SiteVec>> {
        prop::collection::vec(site_vec(), n)
    }

    /// Dense 6^N vector of a sum of product states, site 0 most significant.
    fn dense_terms(terms: &[(f64, Vec<SiteVec>)]) -> Vec<f64> {
        let n = terms[0].1.len();
        let mut out = vec![0.0; SECTOR_DIM.pow(n as u32)];
        for (c, sites) in terms {
            for (idx, slot) in out.iter_mut().enumerate() {
                let mut rest = idx;
                let mut v = *c;
                for i in (0..n).rev() {
                    v *= sites[i][rest % SECTOR_DIM];
                    rest /= SECTOR_DIM;
                }
                *slot += v;
            }
        }
        out
    }

    fn dense_overlap(bra: &[SiteVec], psi: &[f64]) -> f64 {
        dense_terms(&[(1.0, bra.to_vec())]).iter().zip(psi).map(|(a, b)| a * b).sum()
    }

    fn exact() -> TruncationPolicy {
        TruncationPolicy { chi_max: 4096, discard_tolerance: 0.0 }
    }

    #[test]
    fn log_amp_arithmetic() {
        let a = LogAmp::new(3.0);
        let b = LogAmp::new(-3.0);
        assert!(a.add(b).is_zero());
        assert_eq!(LogAmp::new(0.0), LogAmp::ZERO);
        assert!((LogAmp::new(2.0).add(LogAmp::new(-0.5)).value() - 1.5).abs() < 1e-15);
        assert!((LogAmp::new(-2.0).mul(LogAmp::new(0.25)).value() + 0.5).abs() < 1e-15);
        assert_eq!(LogAmp::ZERO.log2_abs(), f64::NEG_INFINITY);
        assert_eq!(LogAmp::new(0.125).log2_abs(), -3.0);
        assert!((a.neg().value() + 3.0).abs() < 1e-15);
        // Values far below f64 range keep their relative precision.
        let tiny = LogAmp { ln_abs: -5000.0, sign: 1.0 };
        let sum = tiny.add(tiny.scale(-0.25));
        assert!((sum.ln_abs - (-5000.0 + 0.75f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn truncation_policy_validation() {
        assert!(TruncationPolicy::default().validate().is_ok());
        assert_eq!(TruncationPolicy::default(), TruncationPolicy { chi_max: 64, discard_tolerance: 1e-12 });
        assert!(TruncationPolicy { chi_max: 0, discard_tolerance: 0.0 }.validate().is_err());
        assert!(TruncationPolicy { chi_max: 4, discard_tolerance: 1.0 }.validate().is_err());
        assert!(TruncationPolicy { chi_max: 4, discard_tolerance: -1e-3 }.validate().is_err());
    }

    #[test]
    fn propagator_zero_modes() {
        let p = EvolutionParams::default();
        let clean = Propagator::new(&p, 4, None).unwrap();
        assert!(clean.preserves_id && clean.preserves_swap && !clean.has_noise());
        let noise = NoiseSpec::uniform(4, 0.1, ReplicaMask::Replica1Only);
        let noisy = Propagator::new(&p, 4, Some(&noise)).unwrap();
        assert!(noisy.preserves_id && !noisy.preserves_swap && noisy.has_noise());
        assert!(Propagator::new(&p, 5, Some(&noise)).is_err());
        let bad = EvolutionParams { j: 0.0, ..p };
        assert!(Propagator::new(&bad, 4, None).is_err());
    }

    #[test]
    fn id_and_swap_chains_are_invariant_under_a_step() {
        let n = 8;
        let prop = Propagator::new(&EvolutionParams::default(), n, None).unwrap();
        let probes = [
            vec![label_vec(BoundaryLabel::Zero4); n],
            vec![label_vec(BoundaryLabel::Coll); n],
            (0..n).map(|i| if i % 2 == 0 { label_vec(BoundaryLabel::Encode) } else { label_vec(BoundaryLabel::Zero4) }).collect(),
        ];
        for label in [BoundaryLabel::Id, BoundaryLabel::Swap] {
            let sites = vec![label_vec(label); n];
            let mut mps = ReplicaMPS::product(&sites).unwrap();
            let before: Vec<LogAmp> = probes.iter().map(|b| mps.overlap_numeric(b).unwrap()).collect();
            trotter_step(&mut mps, &prop, &TruncationPolicy::default()).unwrap();
            for (b, x) in probes.iter().zip(before) {
                let y = mps.overlap_numeric(b).unwrap();
                if x.is_zero() {
                    assert!(y.value().abs() < 1e-8);
                } else {
                    assert!((y.ln_abs - x.ln_abs).abs() < 1e-8 && y.sign == x.sign, "{label}: {x:?} vs {y:?}");
                }
            }
        }
    }

    #[test]
    fn zero_strength_noise_layer_is_bit_identical() {
        let n = 6;
        let p = EvolutionParams::default();
        let a = Propagator::new(&p, n, None).unwrap();
        let b = Propagator::new(&p, n, Some(&NoiseSpec::uniform(n, 0.0, ReplicaMask::Replica1Only))).unwrap();
        let start = vec![label_vec(BoundaryLabel::Zero4); n];
        let mut x = ReplicaMPS::product(&start).unwrap();
        let mut y = ReplicaMPS::product(&start).unwrap();
        for _ in 0..3 {
            trotter_step(&mut x, &a, &TruncationPolicy::default()).unwrap();
            trotter_step(&mut y, &b, &TruncationPolicy::default()).unwrap();
        }
        assert_eq!(x.tensors(), y.tensors());
        assert_eq!(x.log_magnitude.to_bits(), y.log_magnitude.to_bits());
    }

    #[test]
    fn checkpoint_round_trip() {
        let n = 6;
        let prop = Propagator::new(&EvolutionParams::default(), n, None).unwrap();
        let mut mps = ReplicaMPS::product(&vec![label_vec(BoundaryLabel::Zero4); n]).unwrap();
        for _ in 0..3 {
            trotter_step(&mut mps, &prop, &TruncationPolicy::default()).unwrap();
        }
        let mut buf = Vec::new();
        write_checkpoint(&mps, &mut buf).unwrap();
        assert_eq!(&buf[..6], CHECKPOINT_MAGIC);
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.tensors(), mps.tensors());
        assert_eq!(back.log_magnitude, mps.log_magnitude);
        assert_eq!(back.canonical_center(), mps.canonical_center());
        let bra = vec![label_vec(BoundaryLabel::Coll); n];
        assert_eq!(back.overlap(&bra).unwrap(), mps.overlap(&bra).unwrap());

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&bad[..]), Err(Error::Checkpoint(_))));
        let mut bad = buf.clone();
        bad[7] = 2;
        assert!(matches!(read_checkpoint(&bad[..]), Err(Error::Checkpoint(_))));
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn energy_decreases_under_imaginary_time() {
        let n = 6;
        let p = EvolutionParams { j: 1.0, delta_t: 0.05, ..Default::default() };
        let prop = Propagator::new(&p, n, None).unwrap();
        let h = bond_hamiltonian_sector(1.0).unwrap();
        let start: Vec<SiteVec> = (0..n).map(|i| [0.3, -0.1 * i as f64, 0.5, 0.2, -0.4, 0.1 + 0.05 * i as f64]).collect();
        let mut mps = ReplicaMPS::product(&start).unwrap();
        let mut prev = mps.energy(&h).unwrap();
        for _ in 0..30 {
            trotter_step(&mut mps, &prop, &exact()).unwrap();
            let e = mps.energy(&h).unwrap();
            assert!(e <= prev + 1e-6, "{e} > {prev}");
            prev = e;
        }
        assert!(prev >= -1e-12);
    }

    #[test]
    fn large_chain_keeps_tensor_entries_bounded() {
        let n = 64;
        let prop = Propagator::new(&EvolutionParams::default(), n, None).unwrap();
        let mut mps = ReplicaMPS::product(&vec![label_vec(BoundaryLabel::Zero4); n]).unwrap();
        for _ in 0..100 {
            let r = trotter_step(&mut mps, &prop, &TruncationPolicy::default()).unwrap();
            assert!(r.max_bond <= 64);
        }
        for m in mps.tensor_magnitudes() {
            assert!((1e-3..=1e3).contains(&m), "{m}");
        }
        assert!(mps.log_magnitude.is_finite());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn product_overlap_matches_dense(ket in chain(2..6), seed in chain(6..7)) {
            let n = ket.len();
            let bra: Vec<SiteVec> = seed.iter().cycle().take(n).cloned().collect();
            let mps = ReplicaMPS::product(&ket).unwrap();
            let want = dense_overlap(&bra, &dense_terms(&[(1.0, ket.clone())]));
            let got = mps.overlap(&bra).unwrap().value();
            prop_assert!((got - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }

        #[test]
        fn sum_of_products_matches_dense(a in chain(3..5), b in chain(3..5), c in -2.0f64..2.0) {
            prop_assume!(a.len() == b.len());
            let terms = vec![(1.0, a.clone()), (c, b.clone())];
            let mps = ReplicaMPS::from_terms(&terms).unwrap();
            let want = dense_terms(&terms);
            let got = mps.to_dense();
            let scale = want.iter().fold(1.0f64, |m, x| m.max(x.abs()));
            for (g, w) in got.iter().zip(&want) {
                prop_assert!((g - w).abs() < 1e-12 * scale);
            }
        }

        #[test]
        fn bond_dimension_respects_chi(chi in 1usize..6, steps in 1usize..4) {
            let n = 8;
            let prop = Propagator::new(&EvolutionParams::default(), n, None).unwrap();
            let policy = TruncationPolicy { chi_max: chi, discard_tolerance: 0.0 };
            let mut mps = ReplicaMPS::product(&vec![label_vec(BoundaryLabel::Zero4); n]).unwrap();
            for _ in 0..steps {
                let r = trotter_step(&mut mps, &prop, &policy).unwrap();
                prop_assert!(r.max_bond <= chi);
                prop_assert!(mps.bond_dims().iter().all(|&d| d <= chi));
            }
        }

        #[test]
        fn gates_fix_both_zero_modes(j in 0.1f64..4.0, dt in 0.01f64..2.0) {
            let prop = Propagator::new(&EvolutionParams { j, delta_t: dt, ..Default::default() }, 3, None).unwrap();
            prop_assert!(prop.preserves_id && prop.preserves_swap);
        }
    }
}
