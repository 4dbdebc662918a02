//! Experiment configuration files (JSON).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mps_engine::{EvolutionParams, TrotterOrder, TruncationPolicy};
use crate::observables::EnvironmentConvention;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Anticoncentration,
    Cmi,
    XebFixedNoise,
    XebScaledNoise,
    NoisyCmi,
    MutualPurityDepth,
    MutualPurityThreshold,
    LightconePurity,
    OracleCheck,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Anticoncentration => "anticoncentration",
            ExperimentKind::Cmi => "cmi",
            ExperimentKind::XebFixedNoise => "xeb_fixed_noise",
            ExperimentKind::XebScaledNoise => "xeb_scaled_noise",
            ExperimentKind::NoisyCmi => "noisy_cmi",
            ExperimentKind::MutualPurityDepth => "mutual_purity_depth",
            ExperimentKind::MutualPurityThreshold => "mutual_purity_threshold",
            ExperimentKind::LightconePurity => "lightcone_purity",
            ExperimentKind::OracleCheck => "oracle_check",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PlacementKind {
    #[default]
    LeftContiguous,
    Random,
    RightEncoded,
}

/// Settings for the Monte Carlo side of `oracle_check`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSettings {
    pub n_trajectories: usize,
    /// Brownian time step; the replica side uses the same grid.
    pub delta_t: f64,
    /// Total evolution time.
    pub time: f64,
    #[serde(default)]
    pub rng_seed: u64,
    /// Noise strengths for the XEB and fidelity comparisons.
    #[serde(default)]
    pub lambda_list: Vec<f64>,
    /// Time over which one channel of strength lambda acts.
    #[serde(default = "one")]
    pub noise_period: f64,
}

fn one() -> f64 {
    1.0
}

fn default_alpha() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(rename = "N_list")]
    pub n_list: Vec<usize>,
    /// Record every step up to t_max. When absent, t_max = t_alpha * N.
    #[serde(default)]
    pub t_max: Option<usize>,
    #[serde(default = "default_alpha")]
    pub t_alpha: f64,
    /// Measurement time for single-time experiments, as a multiple of N.
    #[serde(default = "default_alpha")]
    pub t_meas_alpha: f64,
    #[serde(rename = "J", default = "one")]
    pub j: f64,
    #[serde(default = "one")]
    pub delta_t: f64,
    #[serde(default)]
    pub trotter_order: TrotterOrder,
    /// Fixed noise strengths.
    #[serde(default)]
    pub lambda_list: Vec<f64>,
    /// Scaled noise strengths mu; the per-site strength is mu / N.
    #[serde(default)]
    pub mu_list: Vec<f64>,
    /// Fractions of noisy sites.
    #[serde(default)]
    pub p_list: Vec<f64>,
    #[serde(default)]
    pub placement: PlacementKind,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "default_encoded")]
    pub encoded_qubits: usize,
    #[serde(default)]
    pub d_e_convention: EnvironmentConvention,
    #[serde(default)]
    pub truncation: TruncationPolicy,
    #[serde(default)]
    pub oracle: Option<OracleSettings>,
    pub output: PathBuf,
}

fn default_encoded() -> usize {
    1
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn params(&self) -> EvolutionParams {
        EvolutionParams { j: self.j, delta_t: self.delta_t, order: self.trotter_order, noise_period: None }
    }

    pub fn t_max_for(&self, n: usize) -> usize {
        self.t_max.unwrap_or_else(|| (self.t_alpha * n as f64).round() as usize)
    }

    pub fn t_meas_for(&self, n: usize) -> usize {
        (self.t_meas_alpha * n as f64).round() as usize
    }

    /// Everything an experiment needs, checked before any evolution runs.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("{}: {m}", self.experiment.name())));
        if self.n_list.is_empty() || self.n_list.contains(&0) {
            return bad("N_list must be non-empty with positive entries");
        }
        if !(self.j >= 0.0 && self.j.is_finite()) || !(self.delta_t > 0.0 && self.delta_t.is_finite()) {
            return bad("need J >= 0 and delta_t > 0");
        }
        if !(self.t_alpha > 0.0) || !(self.t_meas_alpha > 0.0) {
            return bad("t_alpha and t_meas_alpha must be positive");
        }
        if self.t_max == Some(0) {
            return bad("t_max must be positive");
        }
        self.truncation.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.lambda_list.iter().any(|&l| !(l > 0.0 && l <= 0.75)) {
            return bad("lambda_list entries must lie in (0, 3/4]");
        }
        if self.mu_list.iter().any(|&m| !(m > 0.0)) {
            return bad("mu_list entries must be positive");
        }
        if self.p_list.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return bad("p_list entries must lie in (0, 1]");
        }
        let min_n = *self.n_list.iter().min().unwrap();
        let max_n = *self.n_list.iter().max().unwrap();
        match self.experiment {
            ExperimentKind::Anticoncentration => {}
            ExperimentKind::Cmi => {
                if min_n < 3 {
                    return bad("the tripartition needs N >= 3");
                }
            }
            ExperimentKind::XebFixedNoise => {
                if self.lambda_list.is_empty() || self.lambda_list.iter().any(|&l| l >= 0.75) {
                    return bad("lambda_list is required, entries below 3/4");
                }
            }
            ExperimentKind::XebScaledNoise => {
                if self.mu_list.is_empty() {
                    return bad("mu_list is required");
                }
                if self.mu_list.iter().any(|&m| m / min_n as f64 >= 0.75) {
                    return bad("mu / N must stay below 3/4");
                }
            }
            ExperimentKind::NoisyCmi => {
                if min_n < 3 || self.mu_list.is_empty() {
                    return bad("needs N >= 3 and a mu_list");
                }
                if self.mu_list.iter().any(|&m| m / min_n as f64 >= 0.75) {
                    return bad("mu / N must stay below 3/4");
                }
            }
            ExperimentKind::MutualPurityDepth
            | ExperimentKind::MutualPurityThreshold
            | ExperimentKind::LightconePurity => {
                if self.lambda_list.is_empty() || self.p_list.is_empty() {
                    return bad("lambda_list and p_list are required");
                }
                if self.encoded_qubits == 0 || self.encoded_qubits >= min_n {
                    return bad("need 1 <= encoded_qubits < N");
                }
                if self.placement == PlacementKind::Random && self.seeds.is_empty() {
                    return bad("random placement needs a seed list");
                }
                if self.experiment == ExperimentKind::LightconePurity
                    && self.placement != PlacementKind::RightEncoded
                {
                    return bad("the light-cone setup uses right_encoded placement");
                }
            }
            ExperimentKind::OracleCheck => {
                let Some(o) = &self.oracle else {
                    return bad("an `oracle` section is required");
                };
                if max_n > crate::exact_oracle::TRAJECTORY_CAP {
                    return bad("trajectory sampling is limited to N <= 4");
                }
                if o.n_trajectories < 100 {
                    return bad("n_trajectories must be at least 100");
                }
                if !(o.delta_t > 0.0) || !(o.time > 0.0) || !(o.noise_period > 0.0) {
                    return bad("oracle delta_t, time and noise_period must be positive");
                }
                if o.lambda_list.iter().any(|&l| !(0.0..0.75).contains(&l)) {
                    return bad("oracle lambda_list entries must lie in [0, 3/4)");
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn csv_path(&self) -> PathBuf {
        self.output.with_extension("csv")
    }

    pub fn summary_path(&self) -> PathBuf {
        self.output.with_extension("json")
    }

    pub fn progress_path(&self) -> PathBuf {
        self.output.with_extension("progress")
    }
}
