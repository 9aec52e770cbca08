use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::Serialize;

use hmm_vrso::bench::{benchmark_matrix, BenchConfig, BenchRow, Init, Method};
use hmm_vrso::driver::{baseline_gd, em_vrso_v1, FitConfig, GdConfig, HalvingTrigger, RunTrace};
use hmm_vrso::sim::{init_params, simulate_dives, simulate_hmm, InitScheme, ASCENT, BOTTOM, INITIAL_LIPSCHITZ, PHASES};
use hmm_vrso::{e_step, posterior_decode, Algorithm, HmmParams, Observations, StepSizes, TransitionModel};

use crate::config::{self, ModelKind, RunConfig};
use crate::error::{CliError, Result};
use crate::files::{self, RunManifest, Table};

fn phase_name(p: usize) -> &'static str {
    match p {
        BOTTOM => "bottom",
        ASCENT => "ascent",
        _ => "descent",
    }
}

fn finish(mut manifest: RunManifest, dir: &Path, start: Instant, outputs: &[&str]) -> Result<()> {
    manifest.wall_clock_secs = start.elapsed().as_secs_f64();
    manifest.outputs = outputs.iter().map(PathBuf::from).collect();
    manifest.save(dir)
}

pub fn simulate(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let start = Instant::now();
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    files::create_dir(out)?;
    let mut truth;
    let (obs, params) = match cfg.model {
        ModelKind::Sim => {
            let sim = simulate_hmm(&cfg.sim(cfg.seed)?)?;
            truth = Table::new("truth", &["t", "state"]);
            for (t, x) in sim.states.iter().enumerate() {
                truth.row([(t + 1).to_string(), (x + 1).to_string()]);
            }
            (sim.obs, sim.truth)
        }
        ModelKind::Dive => {
            let sim = simulate_dives(&cfg.dive(cfg.seed)?)?;
            truth = Table::new("truth", &["t", "state", "dive_type", "phase"]);
            for (t, (a, p)) in sim.dive_type.iter().zip(&sim.phase).enumerate() {
                let s = a * PHASES + p;
                truth.row([(t + 1).to_string(), (s + 1).to_string(), (a + 1).to_string(), phase_name(*p).to_string()]);
            }
            (sim.obs, sim.truth)
        }
    };
    files::write_observations(&out.join("observations.csv"), &obs)?;
    truth.save(&out.join("truth.csv"))?;
    files::save_json(&out.join("true_params.json"), &params)?;
    info!("simulated {} observations into {}", obs.len, out.display());

    let mut m = RunManifest::new("simulate", &cfg, cfg.seed);
    m.inputs = vec![config.to_path_buf()];
    finish(m, out, start, &["observations.csv", "truth.csv", "true_params.json"])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AlgorithmArg {
    Svrg,
    Saga,
    Gd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum HalvingArg {
    OnFailure,
    OnIncrease,
}

#[derive(Debug, Clone, clap::Args)]
pub struct FitArgs {
    /// Observations CSV.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "svrg")]
    pub algorithm: AlgorithmArg,
    /// Refresh posterior weights inside the M step.
    #[arg(long)]
    pub partial_e: bool,
    /// Stochastic iterations per M step (default: T).
    #[arg(long = "iters-per-update")]
    pub iters_per_update: Option<usize>,
    /// Outer iterations, or gradient steps for `gd`.
    #[arg(long, default_value_t = 100)]
    pub updates: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Wall-clock limit in seconds.
    #[arg(long)]
    pub time_budget: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<f64>,
    /// Hidden states for Gaussian data. Dive data always use the 3×3 model.
    #[arg(long, default_value_t = 3)]
    pub states: usize,
    /// Starting parameters instead of a random initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Stop once the gradient norm over T drops below this.
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long, value_enum, default_value = "on-failure")]
    pub halving: HalvingArg,
}

#[derive(Serialize)]
struct FitSettings<'a> {
    data_sha256: String,
    init_sha256: Option<String>,
    algorithm: AlgorithmArg,
    partial_e: bool,
    iters_per_update: usize,
    updates: usize,
    seed: u64,
    states: usize,
    time_budget: Option<f64>,
    max_epochs: Option<f64>,
    tolerance: Option<f64>,
    halving: &'a HalvingArg,
}

fn trace_table(trace: &RunTrace) -> Table {
    let mut t = Table::new("trace", &["epoch", "loglik", "grad_norm_over_T", "attempt", "halvings"]);
    for r in &trace.rows {
        t.row([files::num(r.epoch), files::num(r.loglik), files::num(r.grad_norm_over_t), r.attempt.to_string(), r.halvings.to_string()]);
    }
    t
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(files::sha256_hex(&std::fs::read(path).map_err(|e| CliError::io(path, e))?))
}

pub fn fit(a: &FitArgs) -> Result<()> {
    let start = Instant::now();
    if a.algorithm == AlgorithmArg::Gd && a.partial_e {
        return Err(CliError::invalid("--partial-e applies only to the stochastic M steps of svrg and saga, not gd"));
    }
    if a.updates == 0 {
        return Err(CliError::invalid("--updates must be positive"));
    }
    let budget = config::budget(a.max_epochs, a.time_budget)?;
    let obs = files::read_observations(&a.data)?;
    let m = a.iters_per_update.unwrap_or(obs.len);
    let (params, steps) = match &a.init {
        Some(p) => (files::read_params(p)?, StepSizes::new(INITIAL_LIPSCHITZ)),
        None => {
            let scheme = if obs.is_structured() { InitScheme::Dive } else { InitScheme::Sim { n_states: a.states } };
            init_params(&obs, scheme, a.seed)?
        }
    };
    obs.check_against(&params.emission, params.transitions.n_regimes())?;
    files::create_dir(&a.out)?;

    let settings = FitSettings {
        data_sha256: file_hash(&a.data)?,
        init_sha256: a.init.as_deref().map(file_hash).transpose()?,
        algorithm: a.algorithm,
        partial_e: a.partial_e,
        iters_per_update: m,
        updates: a.updates,
        seed: a.seed,
        states: params.n_states(),
        time_budget: a.time_budget,
        max_epochs: a.max_epochs,
        tolerance: a.tolerance,
        halving: &a.halving,
    };
    let mut manifest = RunManifest::new("fit", &settings, a.seed);
    manifest.inputs = std::iter::once(a.data.clone()).chain(a.init.clone()).collect();

    let result = match a.algorithm {
        AlgorithmArg::Gd => {
            let mut g = GdConfig::new(a.updates);
            g.lipschitz = steps.lipschitz_theta;
            g.budget = budget;
            g.tolerance = a.tolerance;
            baseline_gd(params, &obs, &g)
        }
        AlgorithmArg::Svrg | AlgorithmArg::Saga => {
            let alg = if a.algorithm == AlgorithmArg::Svrg { Algorithm::Svrg } else { Algorithm::Saga };
            let mut f = FitConfig::new(alg, a.partial_e, m, a.updates, a.seed);
            f.budget = budget;
            f.tolerance = a.tolerance;
            f.halving = match a.halving {
                HalvingArg::OnFailure => HalvingTrigger::OnFailure,
                HalvingArg::OnIncrease => HalvingTrigger::OnIncrease,
            };
            em_vrso_v1(params, &obs, steps, &f)
        }
    };
    match result {
        Ok(fit) => {
            files::save_json(&a.out.join("params.json"), &fit.params)?;
            trace_table(&fit.trace).save(&a.out.join("trace.csv"))?;
            manifest.epochs = Some(fit.epochs);
            info!("log-likelihood {} after {} epochs ({:?})", fit.loglik, fit.epochs, fit.trace.stop);
            finish(manifest, &a.out, start, &["params.json", "trace.csv"])
        }
        Err(e) => {
            trace_table(&e.trace).save(&a.out.join("trace.csv"))?;
            manifest.status = format!("failed: {}", e.error);
            manifest.epochs = e.trace.rows.last().map(|r| r.epoch);
            finish(manifest, &a.out, start, &["trace.csv"])?;
            Err(CliError::Model(e.error))
        }
    }
}

pub fn decode(data: &Path, params: &Path, out: &Path) -> Result<()> {
    let start = Instant::now();
    let obs = files::read_observations(data)?;
    let p: HmmParams = files::read_params(params)?;
    obs.check_against(&p.emission, p.transitions.n_regimes())?;
    let cache = e_step(&p, &obs)?;
    let states = posterior_decode(&cache);
    let n = p.n_states();
    let dive = matches!(p.transitions, TransitionModel::DiveStructured { .. });

    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("gamma_{i}")));
    header.push("decoded_state".into());
    if dive {
        header.extend(["dive_id", "dive_type", "phase"].map(String::from));
    }
    let mut table = Table::new("decode", &header);
    let mut dive_id = 1;
    for (t, &s) in states.iter().enumerate() {
        let mut row = vec![(t + 1).to_string()];
        row.extend(cache.gamma(t).iter().map(|&g| files::num(g)));
        row.push((s + 1).to_string());
        if dive {
            if obs.boundary[t] {
                dive_id += 1;
            }
            row.extend([dive_id.to_string(), (s / PHASES + 1).to_string(), phase_name(s % PHASES).to_string()]);
        }
        table.row(row);
    }
    files::create_dir(out)?;
    table.save(&out.join("decode.csv"))?;

    #[derive(Serialize)]
    struct DecodeSettings {
        data_sha256: String,
        params_sha256: String,
    }
    let settings = DecodeSettings { data_sha256: file_hash(data)?, params_sha256: file_hash(params)? };
    let mut m = RunManifest::new("decode", &settings, 0);
    m.inputs = vec![data.to_path_buf(), params.to_path_buf()];
    finish(m, out, start, &["decode.csv"])
}

fn simulated(cfg: &RunConfig, seed: u64) -> Result<Observations> {
    Ok(match cfg.model {
        ModelKind::Sim => simulate_hmm(&cfg.sim(seed)?)?.obs,
        ModelKind::Dive => simulate_dives(&cfg.dive(seed)?)?.obs,
    })
}

fn matrix_row(t: &mut Table, r: &BenchRow) {
    let status = match &r.error {
        None => "ok".to_string(),
        Some(e) => format!("failed: {e}"),
    };
    t.row([
        r.experiment.clone(),
        r.algorithm.clone(),
        files::opt(r.partial_e),
        files::opt(r.iterations),
        r.seed.to_string(),
        r.epochs_to_converge.map_or_else(String::new, files::num),
        r.loglik_gap_over_t.map_or_else(String::new, files::num),
        r.data_seed.to_string(),
        status,
    ]);
}

/// Every standard method on `inits` shared starting points for each of
/// `data_sets` simulated data sets. Data set `k` uses seed `seed + k`.
pub fn benchmark(config: &Path, out: &Path, jobs: Option<usize>) -> Result<()> {
    let start = Instant::now();
    let cfg = RunConfig::load(config)?;
    if cfg.data_sets == 0 || cfg.inits == 0 || cfg.outer == 0 {
        return Err(CliError::invalid("data_sets, inits and outer must be positive"));
    }
    let scheme = cfg.init_scheme()?;
    let budget = cfg.budget()?;
    let methods = Method::standard();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    files::create_dir(&out.join("traces"))?;
    let mut rows = Vec::new();
    for k in 0..cfg.data_sets as u64 {
        let data_seed = cfg.seed + k;
        let obs = simulated(&cfg, data_seed)?;
        let inits = (0..cfg.inits as u64)
            .map(|i| {
                let seed = data_seed * 1000 + i;
                let (params, steps) = init_params(&obs, scheme, seed)?;
                Ok(Init { seed, params, steps })
            })
            .collect::<Result<Vec<_>>>()?;
        let bench = BenchConfig {
            experiment: cfg.label(),
            data_seed,
            outer: cfg.outer,
            gd_iterations: cfg.gd_iterations,
            budget,
            run_seed: data_seed,
        };
        info!("data set {data_seed}: {} cells", inits.len() * methods.len());
        rows.extend(pool.install(|| benchmark_matrix(&obs, &methods, &inits, &bench)));
    }

    let mut outputs = vec!["matrix.csv".to_string()];
    let mut matrix = Table::new(
        "matrix",
        &["experiment", "algorithm", "P", "M", "seed", "epochs_to_converge", "loglik_gap_over_T", "data_seed", "status"],
    );
    for r in &rows {
        matrix_row(&mut matrix, r);
        if let Some(tr) = &r.trace {
            let name = format!("traces/{}_data{}_init{}.csv", r.algorithm, r.data_seed, r.seed);
            trace_table(tr).save(&out.join(&name))?;
            outputs.push(name);
        }
    }
    matrix.save(&out.join("matrix.csv"))?;

    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    let mut m = RunManifest::new("benchmark", &cfg, cfg.seed);
    m.inputs = vec![config.to_path_buf()];
    m.epochs = Some(rows.iter().filter_map(|r| r.trace.as_ref()?.rows.last().map(|x| x.epoch)).sum());
    if failed > 0 {
        warn!("{failed} of {} cells failed", rows.len());
        m.status = format!("{failed} of {} cells failed", rows.len());
    }
    m.wall_clock_secs = start.elapsed().as_secs_f64();
    m.outputs = outputs.iter().map(PathBuf::from).collect();
    m.save(out)?;
    if failed == rows.len() {
        return Err(CliError::Runtime("every benchmark cell failed".into()));
    }
    Ok(())
}
