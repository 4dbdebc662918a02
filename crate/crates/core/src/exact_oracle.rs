//! Small-N ground truth: dense replica evolution and Brownian trajectories.
//!
//! `dense_evolve` in the full basis builds its gates from the complex
//! 16-dimensional operators directly, so it shares no code path with the
//! sector-restricted MPS engine beyond `replica_algebra`.

use ndarray::Array2;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{expm_neg_herm, expm_neg_i_herm, kron};
use crate::mps_engine::{EvolutionParams, Propagator, TrotterOrder};
use crate::replica_algebra::{
    build_bond_hamiltonian, build_noise_perturbation, Axis, NoiseSpec, SiteState, SECTOR, SECTOR_DIM, SITE_DIM,
};

pub const DENSE_CAP: usize = 6;
pub const EXACT_EXP_CAP: usize = 4096;
pub const TRAJECTORY_CAP: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenseBasis {
    /// All 16 contour states per site, complex gates.
    Full,
    /// The six charge-neutral states per site.
    Sector,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DenseMode {
    /// The same Trotterized gate sequence the MPS engine applies.
    Trotter,
    /// exp(-t H) of the full generator by dense diagonalization.
    ExactExponential,
}

#[derive(Clone, Debug)]
pub struct DenseReplicaState {
    pub amplitudes: Vec<Complex64>,
    pub log_magnitude: f64,
    pub n: usize,
    pub basis: DenseBasis,
}

impl DenseReplicaState {
    fn local_dim(&self) -> usize {
        local_dim(self.basis)
    }

    /// <bra|state> for a product bra, including log_magnitude.
    pub fn overlap(&self, bra: &[SiteState]) -> Result<Complex64> {
        if bra.len() != self.n {
            return Err(Error::InvalidParameter("bra length mismatch".into()));
        }
        let sites: Vec<Vec<Complex64>> = bra.iter().map(|s| restrict_site(s, self.basis)).collect::<Result<_>>()?;
        let d = self.local_dim();
        let mut total = Complex64::new(0.0, 0.0);
        for (idx, amp) in self.amplitudes.iter().enumerate() {
            if amp.norm_sqr() == 0.0 {
                continue;
            }
            let mut w = Complex64::new(1.0, 0.0);
            let mut rest = idx;
            for k in (0..self.n).rev() {
                w *= sites[k][rest % d].conj();
                rest /= d;
            }
            total += w * amp;
        }
        Ok(total * self.log_magnitude.exp())
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt() * self.log_magnitude.exp()
    }

    fn renormalize(&mut self) -> Result<()> {
        let mx = self.amplitudes.iter().fold(0.0f64, |a, z| a.max(z.norm()));
        if !mx.is_finite() {
            return Err(Error::NonFinite(0));
        }
        if mx > 0.0 {
            self.amplitudes.iter_mut().for_each(|z| *z /= mx);
            self.log_magnitude += mx.ln();
        }
        Ok(())
    }
}

fn local_dim(basis: DenseBasis) -> usize {
    match basis {
        DenseBasis::Full => SITE_DIM,
        DenseBasis::Sector => SECTOR_DIM,
    }
}

fn restrict_site(s: &SiteState, basis: DenseBasis) -> Result<Vec<Complex64>> {
    match basis {
        DenseBasis::Full => Ok(s.amplitudes.to_vec()),
        DenseBasis::Sector => Ok(s.to_sector()?.iter().map(|&x| Complex64::new(x, 0.0)).collect()),
    }
}

fn to_complex(a: &Array2<f64>) -> Array2<Complex64> {
    a.mapv(|x| Complex64::new(x, 0.0))
}

struct DenseGates {
    bond_full: Array2<Complex64>,
    bond_half: Array2<Complex64>,
    site: Vec<Option<Array2<Complex64>>>,
    order: TrotterOrder,
}

fn build_gates(n: usize, params: &EvolutionParams, noise: Option<&NoiseSpec>, basis: DenseBasis) -> Result<DenseGates> {
    match basis {
        DenseBasis::Sector => {
            let p = Propagator::new(params, n, noise)?;
            Ok(DenseGates {
                bond_full: to_complex(&p.bond_full),
                bond_half: to_complex(&p.bond_half),
                site: p.site_gates.iter().map(|g| g.as_ref().map(to_complex)).collect(),
                order: p.order,
            })
        }
        DenseBasis::Full => {
            params.validate()?;
            let h = build_bond_hamiltonian(params.j)?.matrix;
            let bond_full = expm_neg_herm(&h, params.delta_t)?;
            let bond_half = expm_neg_herm(&h, params.delta_t / 2.0)?;
            let mut site = vec![None; n];
            if let Some(spec) = noise {
                if spec.site_mask.len() != n {
                    return Err(Error::InvalidParameter("noise mask length mismatch".into()));
                }
                if !spec.is_trivial() {
                    let g = build_noise_perturbation(spec, params.noise_period())?.matrix;
                    let gate = expm_neg_herm(&g, params.delta_t)?;
                    for (k, &on) in spec.site_mask.iter().enumerate() {
                        if on {
                            site[k] = Some(gate.clone());
                        }
                    }
                }
            }
            Ok(DenseGates { bond_full, bond_half, site, order: params.order })
        }
    }
}

/// Applies a (d^k x d^k) operator on sites first..first+k.
fn apply_local(v: &mut [Complex64], n: usize, d: usize, first: usize, k: usize, op: &Array2<Complex64>) {
    let block = d.pow(k as u32);
    let right = d.pow((n - first - k) as u32);
    let left = d.pow(first as u32);
    let mut buf = vec![Complex64::new(0.0, 0.0); block];
    let mut out = vec![Complex64::new(0.0, 0.0); block];
    for l in 0..left {
        for r in 0..right {
            let base = l * block * right + r;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = v[base + j * right];
            }
            for (i, o) in out.iter_mut().enumerate() {
                let row = op.row(i);
                *o = row.iter().zip(&buf).map(|(a, b)| a * b).sum();
            }
            for (j, o) in out.iter().enumerate() {
                v[base + j * right] = *o;
            }
        }
    }
}

fn product_vector(terms: &[(f64, Vec<SiteState>)], basis: DenseBasis) -> Result<(Vec<Complex64>, usize)> {
    let n = terms.first().map(|(_, s)| s.len()).ok_or_else(|| Error::InvalidParameter("empty input".into()))?;
    if n > DENSE_CAP {
        return Err(Error::SizeCap { n, cap: DENSE_CAP });
    }
    let d = local_dim(basis);
    let mut total = vec![Complex64::new(0.0, 0.0); d.pow(n as u32)];
    for (c, sites) in terms {
        if sites.len() != n {
            return Err(Error::InvalidParameter("term length mismatch".into()));
        }
        let mut v = vec![Complex64::new(*c, 0.0)];
        for s in sites {
            let local = restrict_site(s, basis)?;
            let mut next = Vec::with_capacity(v.len() * d);
            for a in &v {
                for b in &local {
                    next.push(a * b);
                }
            }
            v = next;
        }
        for (t, x) in total.iter_mut().zip(v) {
            *t += x;
        }
    }
    Ok((total, n))
}

/// Evolves a sum of product boundary states for `steps` Trotter steps.
pub fn dense_evolve(
    boundary_in: &[(f64, Vec<SiteState>)],
    steps: usize,
    params: &EvolutionParams,
    noise: Option<&NoiseSpec>,
    basis: DenseBasis,
    mode: DenseMode,
) -> Result<DenseReplicaState> {
    let (amplitudes, n) = product_vector(boundary_in, basis)?;
    let mut state = DenseReplicaState { amplitudes, log_magnitude: 0.0, n, basis };
    state.renormalize()?;
    let d = local_dim(basis);
    match mode {
        DenseMode::Trotter => {
            let gates = build_gates(n, params, noise, basis)?;
            let layer = |state: &mut DenseReplicaState, parity: usize, g: &Array2<Complex64>| {
                let mut b = parity;
                while b + 1 < n {
                    apply_local(&mut state.amplitudes, n, d, b, 2, g);
                    b += 2;
                }
            };
            for _ in 0..steps {
                match gates.order {
                    TrotterOrder::Second => {
                        layer(&mut state, 0, &gates.bond_half);
                        layer(&mut state, 1, &gates.bond_full);
                        layer(&mut state, 0, &gates.bond_half);
                    }
                    TrotterOrder::First => {
                        layer(&mut state, 0, &gates.bond_full);
                        layer(&mut state, 1, &gates.bond_full);
                    }
                }
                for (i, g) in gates.site.iter().enumerate() {
                    if let Some(g) = g {
                        apply_local(&mut state.amplitudes, n, d, i, 1, g);
                    }
                }
                state.renormalize()?;
            }
        }
        DenseMode::ExactExponential => {
            let dim = d.pow(n as u32);
            if dim > EXACT_EXP_CAP {
                return Err(Error::SizeCap { n, cap: DENSE_CAP });
            }
            let h = full_generator(n, params, noise, basis)?;
            let u = expm_neg_herm(&h, steps as f64 * params.delta_t)?;
            let v = ndarray::Array1::from(state.amplitudes.clone());
            state.amplitudes = u.dot(&v).to_vec();
            state.renormalize()?;
        }
    }
    Ok(state)
}

/// Sum of all bond terms and noise generators as a dense matrix.
pub fn full_generator(
    n: usize,
    params: &EvolutionParams,
    noise: Option<&NoiseSpec>,
    basis: DenseBasis,
) -> Result<Array2<Complex64>> {
    let d = local_dim(basis);
    let dim = d.pow(n as u32);
    let hb = build_bond_hamiltonian(params.j)?.matrix;
    let hb = match basis {
        DenseBasis::Full => hb,
        DenseBasis::Sector => to_complex(&crate::replica_algebra::bond_to_sector(&hb)?),
    };
    let mut h = Array2::<Complex64>::zeros((dim, dim));
    for b in 0..n - 1 {
        let left = Array2::<Complex64>::eye(d.pow(b as u32));
        let right = Array2::<Complex64>::eye(d.pow((n - b - 2) as u32));
        h = h + kron(&kron(&left, &hb), &right);
    }
    if let Some(spec) = noise {
        if !spec.is_trivial() {
            let g = build_noise_perturbation(spec, params.noise_period())?.matrix;
            let g = match basis {
                DenseBasis::Full => g,
                DenseBasis::Sector => to_complex(&crate::replica_algebra::site_to_sector(&g)?),
            };
            for (i, &on) in spec.site_mask.iter().enumerate() {
                if on {
                    let left = Array2::<Complex64>::eye(d.pow(i as u32));
                    let right = Array2::<Complex64>::eye(d.pow((n - i - 1) as u32));
                    h = h + kron(&kron(&left, &g), &right);
                }
            }
        }
    }
    Ok(h)
}

/// Dense sector-basis embedding of a site index list, for tests.
pub fn sector_full_index(digits: &[usize]) -> usize {
    digits.iter().fold(0, |acc, &k| acc * SITE_DIM + SECTOR[k])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub n: usize,
    pub delta_t: f64,
    pub n_steps: usize,
    pub n_trajectories: usize,
    pub rng_seed: u64,
    pub j: f64,
    /// Time over which a channel of the nominal strength acts; defaults to
    /// `delta_t`.
    #[serde(default)]
    pub noise_period: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryObservable {
    Collision,
    Xeb { lambda: f64 },
    Fidelity { lambda: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 || self.n > TRAJECTORY_CAP {
            return Err(Error::SizeCap { n: self.n, cap: TRAJECTORY_CAP });
        }
        if self.n_trajectories == 0 {
            return Err(Error::InvalidParameter("n_trajectories must be positive".into()));
        }
        if !(self.delta_t > 0.0) || !(self.j >= 0.0) {
            return Err(Error::InvalidParameter("need delta_t > 0 and J >= 0".into()));
        }
        Ok(())
    }

    /// Per-step channel strength giving the nominal lambda per noise period.
    pub fn step_lambda(&self, lambda: f64) -> f64 {
        let period = self.noise_period.unwrap_or(self.delta_t);
        0.75 * (1.0 - (1.0 - 4.0 * lambda / 3.0).powf(self.delta_t / period))
    }
}

/// Pauli string operator sigma^a_i sigma^b_j on n qubits (qubit 0 most significant).
fn two_site_pauli(n: usize, i: usize, a: Axis, j: usize, b: Axis) -> Array2<Complex64> {
    let mut m = Array2::<Complex64>::eye(1);
    for k in 0..n {
        let f = if k == i {
            a.pauli()
        } else if k == j {
            b.pauli()
        } else {
            Array2::eye(2)
        };
        m = kron(&m, &f);
    }
    m
}

fn single_site_pauli(n: usize, i: usize, a: Axis) -> Array2<Complex64> {
    let mut m = Array2::<Complex64>::eye(1);
    for k in 0..n {
        m = kron(&m, &if k == i { a.pauli() } else { Array2::eye(2) });
    }
    m
}

fn dagger(m: &Array2<Complex64>) -> Array2<Complex64> {
    m.t().mapv(|z| z.conj())
}

/// Draws Brownian trajectories and averages the requested estimator.
/// Each trajectory uses its own ChaCha stream (seed, index), so results are
/// reproducible and independent of the thread count.
pub fn sample_brownian_trajectories(cfg: &TrajectoryConfig, observable: TrajectoryObservable) -> Result<McEstimate> {
    cfg.validate()?;
    let values = trajectory_values(cfg, observable, 0..cfg.n_trajectories)?;
    Ok(summarize(&values))
}

pub fn summarize(values: &[f64]) -> McEstimate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    McEstimate { mean, stderr: (var / n).sqrt(), samples: values.len() }
}

/// Per-trajectory estimator values in index order.
pub fn trajectory_values(
    cfg: &TrajectoryConfig,
    observable: TrajectoryObservable,
    indices: std::ops::Range<usize>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = cfg.n;
    let mut terms = Vec::new();
    for b in 0..n.saturating_sub(1) {
        for a in Axis::ALL {
            for c in Axis::ALL {
                terms.push(two_site_pauli(n, b, a, b + 1, c));
            }
        }
    }
    let paulis: Vec<Vec<Array2<Complex64>>> =
        (0..n).map(|i| Axis::ALL.iter().map(|&a| single_site_pauli(n, i, a)).collect()).collect();
    let lambda = match observable {
        TrajectoryObservable::Collision => 0.0,
        TrajectoryObservable::Xeb { lambda } | TrajectoryObservable::Fidelity { lambda } => lambda,
    };
    if !(0.0..0.75).contains(&lambda) {
        return Err(Error::NoiseOutOfRange(lambda));
    }
    let lam_step = cfg.step_lambda(lambda);
    let sigma = (cfg.j / cfg.delta_t).sqrt();
    let dim = 1usize << n;

    let run = |index: usize| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        rng.set_stream(index as u64);
        let mut psi = ndarray::Array1::<Complex64>::zeros(dim);
        psi[0] = Complex64::new(1.0, 0.0);
        let noisy = !matches!(observable, TrajectoryObservable::Collision);
        let mut rho = Array2::<Complex64>::zeros((dim, dim));
        rho[[0, 0]] = Complex64::new(1.0, 0.0);
        for _ in 0..cfg.n_steps {
            let mut h = Array2::<Complex64>::zeros((dim, dim));
            for t in &terms {
                let x: f64 = StandardNormal.sample(&mut rng);
                h.scaled_add(Complex64::new(sigma * x, 0.0), t);
            }
            // With J = 0 the step is the identity exactly, not up to rounding.
            if cfg.j != 0.0 {
                let u = expm_neg_i_herm(&h, cfg.delta_t)?;
                psi = u.dot(&psi);
                if noisy {
                    rho = u.dot(&rho).dot(&dagger(&u));
                }
            }
            if noisy {
                if lam_step > 0.0 {
                    for site in &paulis {
                        let mut acc = rho.mapv(|z| z * (1.0 - lam_step));
                        for p in site {
                            acc = acc + p.dot(&rho).dot(p).mapv(|z| z * (lam_step / 3.0));
                        }
                        rho = acc;
                    }
                }
            }
        }
        let p: Vec<f64> = psi.iter().map(|z| z.norm_sqr()).collect();
        let value = match observable {
            TrajectoryObservable::Collision => p.iter().map(|x| x * x).sum(),
            TrajectoryObservable::Xeb { .. } => {
                dim as f64 * p.iter().enumerate().map(|(s, x)| x * rho[[s, s]].re).sum::<f64>() - 1.0
            }
            TrajectoryObservable::Fidelity { .. } => {
                let rpsi = rho.dot(&psi);
                psi.iter().zip(rpsi.iter()).map(|(a, b)| a.conj() * b).sum::<Complex64>().re
            }
        };
        if !value.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "non-finite estimator in trajectory {index} (seed {})",
                cfg.rng_seed
            )));
        }
        Ok(value)
    };
    let idx: Vec<usize> = indices.collect();
    idx.par_iter().map(|&i| run(i)).collect()
}

/// Replica-side prediction for the trajectory observables on the same time
/// grid, from the dense Trotterized evolution.
pub fn replica_prediction(cfg: &TrajectoryConfig, observable: TrajectoryObservable, mode: DenseMode) -> Result<f64> {
    use crate::replica_algebra::{boundary_state, BoundaryLabel, ReplicaMask};
    let n = cfg.n;
    let params = EvolutionParams { j: cfg.j, delta_t: cfg.delta_t, order: TrotterOrder::Second, noise_period: cfg.noise_period };
    let zero = vec![boundary_state(BoundaryLabel::Zero4); n];
    let (noise, bra, shift) = match observable {
        TrajectoryObservable::Collision => (None, boundary_state(BoundaryLabel::Coll), 0.0),
        TrajectoryObservable::Xeb { lambda } => (
            Some(NoiseSpec::uniform(n, lambda, ReplicaMask::Replica1Only)),
            boundary_state(BoundaryLabel::Coll).scaled(2.0),
            -1.0,
        ),
        TrajectoryObservable::Fidelity { lambda } => (
            Some(NoiseSpec::uniform(n, lambda, ReplicaMask::Replica1Only)),
            boundary_state(BoundaryLabel::Swap).scaled(2.0),
            0.0,
        ),
    };
    let st = dense_evolve(&[(1.0, zero)], cfg.n_steps, &params, noise.as_ref(), DenseBasis::Sector, mode)?;
    Ok(st.overlap(&vec![bra; n])?.re + shift)
}
