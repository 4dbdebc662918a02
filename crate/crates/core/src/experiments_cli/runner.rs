//! Grid execution: one evolution per (N, lambda, p, seed), stepped
//! incrementally through all recorded times.

use std::collections::BTreeMap;
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ExperimentKind, PlacementKind};
use super::records::{read_rows, signed_log2, tagged, Failure, RecordWriter, Row, RunRecord};
use super::report::analyze;
use crate::error::{Error, Result};
use crate::exact_oracle::{replica_prediction, sample_brownian_trajectories, DenseMode, TrajectoryConfig, TrajectoryObservable};
use crate::mps_engine::{EvolutionParams, LogAmp};
use crate::observables::{
    haar_mutual_purity, measure_cmi, measure_collision, measure_mutual_purity, measure_xeb, qec_bound_log2,
    EncodingLayout, EnvironmentConvention, Partition, Placement, Tracker,
};
use crate::replica_algebra::{NoiseSpec, ReplicaMask};

/// One grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub n: usize,
    pub lambda: f64,
    pub mu: Option<f64>,
    pub p: Option<f64>,
    pub seed: u64,
}

impl Job {
    fn label(&self) -> String {
        let mut s = format!("N={} lambda={}", self.n, self.lambda);
        if let Some(mu) = self.mu {
            s += &format!(" mu={mu}");
        }
        if let Some(p) = self.p {
            s += &format!(" p={p}");
        }
        s + &format!(" seed={}", self.seed)
    }
}

pub fn jobs(cfg: &ExperimentConfig) -> Vec<Job> {
    let plain = |n: usize| Job { n, lambda: 0.0, mu: None, p: None, seed: 0 };
    let mut out = Vec::new();
    for &n in &cfg.n_list {
        match cfg.experiment {
            ExperimentKind::Anticoncentration | ExperimentKind::Cmi => out.push(plain(n)),
            ExperimentKind::OracleCheck => {
                out.push(Job { seed: cfg.oracle.as_ref().map_or(0, |o| o.rng_seed), ..plain(n) })
            }
            ExperimentKind::XebFixedNoise => {
                for &lambda in &cfg.lambda_list {
                    out.push(Job { lambda, ..plain(n) });
                }
            }
            ExperimentKind::XebScaledNoise | ExperimentKind::NoisyCmi => {
                for &mu in &cfg.mu_list {
                    out.push(Job { lambda: mu / n as f64, mu: Some(mu), ..plain(n) });
                }
            }
            ExperimentKind::MutualPurityDepth
            | ExperimentKind::MutualPurityThreshold
            | ExperimentKind::LightconePurity => {
                let seeds = if cfg.placement == PlacementKind::Random { cfg.seeds.clone() } else { vec![0] };
                for &lambda in &cfg.lambda_list {
                    for &p in &cfg.p_list {
                        for &seed in &seeds {
                            out.push(Job { lambda, p: Some(p), seed, ..plain(n) });
                        }
                    }
                }
            }
        }
    }
    out
}

struct RowSink<'a> {
    cfg: &'a ExperimentConfig,
    job: &'a Job,
    rows: Vec<Row>,
}

impl RowSink<'_> {
    fn push(&mut self, t: usize, observable: String, log2_value: f64, discarded: f64) {
        self.rows.push(Row {
            experiment: self.cfg.experiment.name().to_string(),
            n: self.job.n,
            t,
            lambda: self.job.lambda,
            seed: self.job.seed,
            observable,
            log2_value,
            discarded_weight: discarded,
        });
    }

    /// Log-form value without a round trip through f64, so values far
    /// below the f64 range keep their magnitude.
    fn push_amp(&mut self, t: usize, name: &str, a: LogAmp, discarded: f64) {
        let obs = if a.sign < 0.0 { format!("{name}_neg") } else { name.to_string() };
        self.push(t, obs, a.log2_abs(), discarded);
    }

    fn push_signed(&mut self, t: usize, name: &str, value: f64, discarded: f64) {
        let (obs, v) = signed_log2(name, value);
        self.push(t, obs, v, discarded);
    }
}

fn placement(cfg: &ExperimentConfig, seed: u64) -> Placement {
    match cfg.placement {
        PlacementKind::LeftContiguous => Placement::LeftContiguous,
        PlacementKind::RightEncoded => Placement::RightEncoded,
        PlacementKind::Random => Placement::Random { seed },
    }
}

pub fn run_job(cfg: &ExperimentConfig, job: &Job) -> Result<Vec<Row>> {
    let params = cfg.params();
    let policy = cfg.truncation;
    let n = job.n;
    let mut sink = RowSink { cfg, job, rows: Vec::new() };
    match cfg.experiment {
        ExperimentKind::Anticoncentration => {
            let mut tr = Tracker::zero_state(n, &params, None, policy)?;
            for t in 0..=cfg.t_max_for(n) {
                tr.advance_to(t)?;
                let z = measure_collision(&tr)?;
                sink.push(t, "collision".into(), z.log2_z, tr.max_discarded);
            }
        }
        ExperimentKind::Cmi | ExperimentKind::NoisyCmi => {
            let noise = job.mu.map(|mu| NoiseSpec::scaled(n, mu, ReplicaMask::BothReplicas));
            let part = Partition::equal(n)?;
            let mut tr = Tracker::zero_state(n, &params, noise.as_ref(), policy)?;
            for t in 0..=cfg.t_max_for(n) {
                tr.advance_to(t)?;
                // log2 of the CMI in nats.
                let i = measure_cmi(&tr, &part)?;
                sink.push_signed(t, "cmi", i, tr.max_discarded);
            }
        }
        ExperimentKind::XebFixedNoise | ExperimentKind::XebScaledNoise => {
            let noise = NoiseSpec::uniform(n, job.lambda, ReplicaMask::Replica1Only);
            let mut tr = Tracker::zero_state(n, &params, Some(&noise), policy)?;
            let times: Vec<usize> = if cfg.experiment == ExperimentKind::XebFixedNoise {
                (0..=cfg.t_max_for(n)).collect()
            } else {
                vec![cfg.t_meas_for(n)]
            };
            for t in times {
                tr.advance_to(t)?;
                let x = measure_xeb(&tr)?;
                let d = tr.max_discarded;
                sink.push_amp(t, "chi", x.chi, d);
                sink.push_amp(t, "fidelity", x.fidelity, d);
                if cfg.experiment == ExperimentKind::XebScaledNoise {
                    let ratio = LogAmp { ln_abs: x.fidelity.ln_abs - x.chi.ln_abs, sign: x.fidelity.sign * x.chi.sign };
                    sink.push_amp(t, "ratio", ratio, d);
                }
            }
        }
        ExperimentKind::MutualPurityDepth
        | ExperimentKind::MutualPurityThreshold
        | ExperimentKind::LightconePurity => {
            let p = job.p.expect("purity jobs carry p");
            let layout = EncodingLayout::new(n, p, cfg.encoded_qubits, placement(cfg, job.seed))?;
            let haar = haar_mutual_purity(layout.log2_d_r(), n, job.lambda, layout.noisy.len())?;
            let mut tr = Tracker::new(layout.input_terms(), &params, None, policy)?;
            let threshold = cfg.experiment == ExperimentKind::MutualPurityThreshold;
            let times: Vec<usize> =
                if threshold { vec![cfg.t_meas_for(n)] } else { (0..=cfg.t_max_for(n)).collect() };
            for t in times {
                tr.advance_to(t)?;
                let f = measure_mutual_purity(&tr, &layout, job.lambda)?;
                let d = tr.max_discarded;
                let name = if f.sign < 0.0 { "mutual_purity_neg" } else { "mutual_purity" };
                sink.push(t, tagged(name, p), f.log2_abs(), d);
                sink.push(t, tagged("haar_mutual_purity", p), haar.ln_exact / std::f64::consts::LN_2, 0.0);
                if threshold {
                    for (conv, label) in [
                        (EnvironmentConvention::NoisyOnly, "qec_bound_noisy_only"),
                        (EnvironmentConvention::AllSites, "qec_bound_all_sites"),
                    ] {
                        let b = qec_bound_log2(f, layout.log2_d_r(), layout.log2_d_e(conv));
                        sink.push(t, tagged(label, p), b, d);
                    }
                }
            }
        }
        ExperimentKind::OracleCheck => oracle_rows(cfg, job, &mut sink)?,
    }
    Ok(sink.rows)
}

fn oracle_rows(cfg: &ExperimentConfig, job: &Job, sink: &mut RowSink) -> Result<()> {
    let o = cfg.oracle.as_ref().expect("validated");
    let n_steps = (o.time / o.delta_t).round() as usize;
    let tc = TrajectoryConfig {
        n: job.n,
        delta_t: o.delta_t,
        n_steps,
        n_trajectories: o.n_trajectories,
        rng_seed: o.rng_seed,
        j: cfg.j,
        noise_period: Some(o.noise_period),
    };
    let params = EvolutionParams { j: cfg.j, delta_t: o.delta_t, order: cfg.trotter_order, noise_period: Some(o.noise_period) };
    let mut observables = vec![(TrajectoryObservable::Collision, "collision", 0.0)];
    for &l in &o.lambda_list {
        observables.push((TrajectoryObservable::Xeb { lambda: l }, "xeb", l));
        observables.push((TrajectoryObservable::Fidelity { lambda: l }, "fidelity", l));
    }
    for (obs, name, lambda) in observables {
        let mc = sample_brownian_trajectories(&tc, obs)?;
        let replica = replica_prediction(&tc, obs, DenseMode::Trotter)?;
        let push = |sink: &mut RowSink, tag: &str, v: f64, d: f64| {
            let (o, x) = signed_log2(&format!("oracle_{tag}:{name}"), v);
            sink.rows.push(Row { lambda, ..row_template(sink, n_steps, o, x, d) });
        };
        push(sink, "mc", mc.mean, 0.0);
        push(sink, "mc_stderr", mc.stderr, 0.0);
        push(sink, "replica", replica, 0.0);
        if job.n >= 2 {
            let noise = (lambda > 0.0).then(|| NoiseSpec::uniform(job.n, lambda, ReplicaMask::Replica1Only));
            let mut tr = Tracker::zero_state(job.n, &params, noise.as_ref(), cfg.truncation)?;
            tr.advance_to(n_steps)?;
            let v = match obs {
                TrajectoryObservable::Collision => measure_collision(&tr)?.log2_z.exp2(),
                TrajectoryObservable::Xeb { .. } => measure_xeb(&tr)?.chi.value(),
                TrajectoryObservable::Fidelity { .. } => measure_xeb(&tr)?.fidelity.value(),
            };
            push(sink, "mps", v, tr.max_discarded);
        }
    }
    Ok(())
}

fn row_template(sink: &RowSink, t: usize, observable: String, log2_value: f64, d: f64) -> Row {
    Row {
        experiment: sink.cfg.experiment.name().to_string(),
        n: sink.job.n,
        t,
        lambda: sink.job.lambda,
        seed: sink.job.seed,
        observable,
        log2_value,
        discarded_weight: d,
    }
}

/// Worker count: BRREP_THREADS overrides the --jobs flag.
pub fn worker_count(flag: Option<usize>) -> usize {
    std::env::var("BRREP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .or(flag)
        .unwrap_or(1)
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub jobs: Option<usize>,
    /// Discard any previous output instead of resuming.
    pub fresh: bool,
}

/// Runs the grid, writing rows as jobs finish (in job order) and the JSON
/// summary at the end. Failed points are recorded and the run continues.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    if let Some(dir) = cfg.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let hash = cfg.hash();
    let mut writer = RecordWriter::open(&cfg.csv_path(), &cfg.progress_path(), &hash, opts.fresh)?;
    let all = jobs(cfg);
    let pending: Vec<(usize, Job)> =
        all.iter().cloned().enumerate().filter(|(i, _)| !writer.completed.contains(i)).collect();
    if pending.len() < all.len() {
        log::info!("resuming: {} of {} grid points already done", all.len() - pending.len(), all.len());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count(opts.jobs))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let (tx, rx) = mpsc::channel::<(usize, std::result::Result<Vec<Row>, String>)>();
    let mut failures = Vec::new();
    let failed_job = |i: usize, e: &str| Failure { job: format!("#{i} {}", all[i].label()), error: e.to_string() };
    std::thread::scope(|scope| -> Result<()> {
        let pending_ref = &pending;
        scope.spawn(move || {
            pool.install(|| {
                use rayon::prelude::*;
                pending_ref.par_iter().for_each_with(tx, |tx, (i, job)| {
                    let r = run_job(cfg, job).map_err(|e| e.to_string());
                    let _ = tx.send((*i, r));
                });
            })
        });
        // Single writer; results are reordered so the CSV follows job order.
        let mut buffer: BTreeMap<usize, std::result::Result<Vec<Row>, String>> = BTreeMap::new();
        let mut order = pending.iter().map(|(i, _)| *i).peekable();
        for (i, r) in rx {
            buffer.insert(i, r);
            while let Some(&next) = order.peek() {
                let Some(r) = buffer.remove(&next) else { break };
                match r {
                    Ok(rows) => writer.write_job(next, &rows)?,
                    Err(e) => {
                        log::error!("grid point {} failed: {e}", all[next].label());
                        failures.push(failed_job(next, &e));
                        let row = Row {
                            experiment: cfg.experiment.name().to_string(),
                            n: all[next].n,
                            t: 0,
                            lambda: all[next].lambda,
                            seed: all[next].seed,
                            observable: "error".into(),
                            log2_value: f64::NAN,
                            discarded_weight: f64::NAN,
                        };
                        writer.write_job(next, &[row])?;
                    }
                }
                order.next();
            }
        }
        Ok(())
    })?;
    let rows = read_rows(&cfg.csv_path())?;
    let analysis = analyze(cfg, &rows).unwrap_or_else(|e| serde_json::json!({ "error": e.to_string() }));
    let record = RunRecord {
        experiment: cfg.experiment.name().to_string(),
        config_hash: hash,
        engine_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_s: start.elapsed().as_secs_f64(),
        rows: writer.rows(),
        failures,
        conventions: conventions(cfg),
        analysis,
    };
    record.write(&cfg.summary_path())?;
    Ok(record)
}

fn conventions(cfg: &ExperimentConfig) -> serde_json::Value {
    serde_json::json!({
        "log2_value": "log2 of the annealed observable; CMI values are in nats before the log2",
        "anticoncentration_threshold": "2^N Z <= 3",
        "time_unit": "Trotter steps of length delta_t",
        "J": cfg.j,
        "delta_t": cfg.delta_t,
        "d_e_convention": cfg.d_e_convention,
        "t_meas": format!("{} * N", cfg.t_meas_alpha),
        "truncation": cfg.truncation,
    })
}
