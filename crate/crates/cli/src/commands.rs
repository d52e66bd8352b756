//! Subcommand implementations. Every run resolves its settings as
//! flag, then config file, then default (the seed also falls back to
//! `MBSAEM_SEED`), writes `manifest.toml` into the output directory and then
//! its CSV/SVG outputs.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use mbsaem::analysis::{self, confidence_band, mse_series, svg_line_plot, Series};
use mbsaem::engine::{run, Init, SaemConfig, StepSizeSchedule};
use mbsaem::experiment::{
    self, EpochConvergenceConfig, NlkConfig, PkRecoveryConfig, ReplicateFailure, TimingConfig,
    VarianceScalingConfig,
};
use mbsaem::frailty::{self, FrailtyDesign, FrailtyModel, FrailtyTheta};
use mbsaem::pk::{self, PkDesign, PkModel, PkTheta};
use mbsaem::sbm::{self, SbmData, SbmModel, SbmTheta};
use mbsaem::{datafile, LatentModel, RngStream};

use crate::config::{pick, ConfigFile, DesignSection, RunManifest, RunSection, Settings};
use crate::error::CliError;
use crate::{DesignArgs, ExperimentArgs, ExperimentKind, ModelId, RunArgs};

pub const SEED_ENV: &str = "MBSAEM_SEED";

/// Band level of the epoch-convergence reports.
const BAND_LEVEL: f64 = 0.9;
/// Relative tolerance of the settling epoch.
const SETTLE_TOL: f64 = 0.1;
const MIN_TIMING_STEPS: usize = 100;

pub struct FitArgs {
    pub data: Option<PathBuf>,
    pub init: Option<Vec<f64>>,
    pub thin: Option<usize>,
    pub timing: bool,
}

pub fn init_threads(threads: Option<usize>) -> Result<(), CliError> {
    match threads {
        None => Ok(()),
        Some(0) => Err(CliError::usage("--threads must be at least 1")),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::usage(format!("cannot start {t} threads: {e}"))),
    }
}

// ---------------------------------------------------------------------------
// Resolution helpers

fn load_config(run: &RunArgs, id: &str) -> Result<ConfigFile, CliError> {
    match &run.config {
        Some(p) => ConfigFile::load(p, id),
        None => Ok(ConfigFile::default()),
    }
}

fn resolve_model(
    positional: Option<ModelId>,
    flag: Option<ModelId>,
    file: Option<&String>,
) -> Result<Option<ModelId>, CliError> {
    if let (Some(a), Some(b)) = (positional, flag) {
        if a != b {
            return Err(CliError::usage(format!(
                "model given twice: `{}` and --model {}",
                a.as_str(),
                b.as_str()
            )));
        }
    }
    match positional.or(flag) {
        Some(m) => Ok(Some(m)),
        None => file.map(|s| ModelId::parse(s)).transpose(),
    }
}

fn resolve_seed(flag: Option<u64>, file: Option<u64>, default: u64) -> Result<u64, CliError> {
    if let Some(s) = pick(flag, file) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(default),
    }
}

fn resolve_schedule(run: &RunArgs, file: &RunSection, settings: &mut RunSection) -> Result<StepSizeSchedule, CliError> {
    let d = StepSizeSchedule::default();
    let s = StepSizeSchedule::new(
        pick(run.schedule_burnin, file.schedule_burnin).unwrap_or(d.burn_in),
        pick(run.schedule_exp, file.schedule_exp).unwrap_or(d.exponent),
    )?;
    settings.schedule_burnin = Some(s.burn_in);
    settings.schedule_exp = Some(s.exponent);
    Ok(s)
}

fn check_alpha_grid(grid: &[f64]) -> Result<(), CliError> {
    if grid.is_empty() || grid.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
        return Err(CliError::usage(format!("alpha grid {grid:?} must be non-empty within (0, 1]")));
    }
    Ok(())
}

fn reject(cmd: &str, flags: &[(&str, bool)]) -> Result<(), CliError> {
    let bad: Vec<&str> = flags.iter().filter(|(_, set)| *set).map(|(name, _)| *name).collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(CliError::usage(format!("`{cmd}` does not take {}", bad.join(", "))))
    }
}

fn require_model(cmd: &str, model: Option<ModelId>, allowed: ModelId) -> Result<ModelId, CliError> {
    match model {
        None => Ok(allowed),
        Some(m) if m == allowed => Ok(m),
        Some(m) => Err(CliError::usage(format!(
            "`{cmd}` runs on the {} model, not {}",
            allowed.as_str(),
            m.as_str()
        ))),
    }
}

/// Create (or, with `--force`, reuse) the output directory and write the
/// manifest into it.
fn prepare_out(run: &RunArgs, id: &str, model: Option<ModelId>, settings: &Settings) -> Result<PathBuf, CliError> {
    let out = match &run.out {
        Some(p) => p.clone(),
        None => {
            let sum = settings.checksum()?;
            let tag = model.map(|m| format!("-{}", m.as_str())).unwrap_or_default();
            PathBuf::from("mbsaem-runs").join(format!("{id}{tag}-{}", &sum[..12]))
        }
    };
    if out.exists() {
        if !out.is_dir() {
            return Err(CliError::usage(format!("{} exists and is not a directory", out.display())));
        }
        if fs::read_dir(&out)?.next().is_some() && !run.force {
            return Err(CliError::usage(format!(
                "output directory {} is not empty; pass --force to reuse it",
                out.display()
            )));
        }
    }
    fs::create_dir_all(&out)?;
    let manifest = RunManifest {
        experiment: id.to_string(),
        model: model.map(|m| m.as_str().to_string()),
        out: out.display().to_string(),
        settings: settings.clone(),
    };
    fs::write(out.join("manifest.toml"), manifest.to_toml()?)?;
    Ok(out)
}

fn write_file<E>(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<(), E>) -> Result<(), CliError>
where
    CliError: From<E>,
{
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn open_data(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_theta(path: &Path, names: &[String], values: &[f64]) -> Result<(), CliError> {
    write_file(path, |w| -> std::io::Result<()> {
        writeln!(w, "param,value")?;
        for (n, v) in names.iter().zip(values) {
            writeln!(w, "{n},{v:.17e}")?;
        }
        Ok(())
    })
}

fn write_failures(out: &Path, failed: &[ReplicateFailure]) -> Result<(), CliError> {
    write_file(&out.join("failures.csv"), |w| -> std::io::Result<()> {
        writeln!(w, "replicate,alpha,message")?;
        for f in failed {
            let alpha = f.alpha.map(|a| a.to_string()).unwrap_or_default();
            writeln!(w, "{},{alpha},\"{}\"", f.replicate, f.message.replace('"', "'"))?;
        }
        Ok(())
    })?;
    if !failed.is_empty() {
        eprintln!("warning: {} replicate(s) failed; see failures.csv", failed.len());
    }
    Ok(())
}

fn names_of<M: LatentModel>(model: &M) -> Vec<String> {
    model.param_descriptor().into_iter().map(|p| p.name).collect()
}

// ---------------------------------------------------------------------------
// Parameter vectors and designs

fn sbm_theta_from(v: &[f64], q_hint: Option<usize>) -> Result<SbmTheta, CliError> {
    let q = (1..=v.len()).find(|q| q + q * q == v.len()).ok_or_else(|| {
        CliError::usage(format!("SBM parameter vector needs Q + Q² entries, got {}", v.len()))
    })?;
    if let Some(h) = q_hint.filter(|&h| h != q) {
        return Err(CliError::usage(format!("--q {h} disagrees with a parameter vector for Q = {q}")));
    }
    Ok(SbmTheta::new(v[..q].to_vec(), v[q..].to_vec())?)
}

fn sbm_vec(theta: &SbmTheta) -> Vec<f64> {
    theta.p().iter().chain(theta.nu_matrix()).copied().collect()
}

/// Equal block sizes, `ν = 0.25` within and `0.1` between blocks.
fn sbm_default_theta(q: usize) -> Result<SbmTheta, CliError> {
    if q == 2 {
        return Ok(SbmTheta::reference());
    }
    let nu = (0..q * q).map(|k| if k / q == k % q { 0.25 } else { 0.1 }).collect();
    Ok(SbmTheta::new(vec![1.0 / q as f64; q], nu)?)
}

fn pk_theta_from(v: &[f64]) -> Result<PkTheta, CliError> {
    if v.len() != 7 {
        return Err(CliError::usage(format!("PK parameter vector needs 7 entries, got {}", v.len())));
    }
    let t = PkTheta {
        mu: [v[0], v[1], v[2]],
        omega2: [v[3], v[4], v[5]],
        sigma2: v[6],
    };
    t.validate()?;
    Ok(t)
}

fn pk_vec(t: &PkTheta) -> Vec<f64> {
    t.mu.iter().chain(&t.omega2).chain([&t.sigma2]).copied().collect()
}

fn frailty_theta_from(v: &[f64]) -> Result<FrailtyTheta, CliError> {
    if v.len() < 4 {
        return Err(CliError::usage(format!(
            "frailty parameter vector needs p + 3 entries with p ≥ 1, got {}",
            v.len()
        )));
    }
    let p = v.len() - 3;
    let t = FrailtyTheta {
        beta: v[..p].to_vec(),
        sigma2: v[p],
        lambda0: v[p + 1],
        rho: v[p + 2],
    };
    t.validate()?;
    Ok(t)
}

fn frailty_vec(t: &FrailtyTheta) -> Vec<f64> {
    t.beta.iter().chain([&t.sigma2, &t.lambda0, &t.rho]).copied().collect()
}

fn sbm_design(
    args: &DesignArgs,
    file: &DesignSection,
    default_n: usize,
    rec: &mut DesignSection,
) -> Result<(SbmTheta, usize), CliError> {
    let q = pick(args.q, file.q);
    let theta = match pick(args.theta.clone(), file.theta.clone()) {
        Some(v) => sbm_theta_from(&v, q)?,
        None => sbm_default_theta(q.unwrap_or(2))?,
    };
    let n = pick(args.n, file.n).unwrap_or(default_n);
    rec.n = Some(n);
    rec.q = Some(theta.q());
    rec.theta = Some(sbm_vec(&theta));
    Ok((theta, n))
}

fn pk_design(args: &DesignArgs, file: &DesignSection, rec: &mut DesignSection) -> Result<(PkTheta, PkDesign), CliError> {
    let theta = match pick(args.theta.clone(), file.theta.clone()) {
        Some(v) => pk_theta_from(&v)?,
        None => PkTheta::reference(),
    };
    let base = PkDesign::default();
    let n = pick(args.n, file.n).unwrap_or(base.n);
    let j = pick(args.j, file.j).unwrap_or(base.times.len());
    rec.n = Some(n);
    rec.j = Some(j);
    rec.theta = Some(pk_vec(&theta));
    let design = PkDesign {
        n,
        times: (1..=j).map(|t| t as f64).collect(),
        ..base
    };
    Ok((theta, design))
}

fn frailty_design(
    args: &DesignArgs,
    file: &DesignSection,
    defaults: FrailtyDesign,
    rec: &mut DesignSection,
) -> Result<(FrailtyTheta, FrailtyDesign), CliError> {
    let theta = match pick(args.theta.clone(), file.theta.clone()) {
        Some(v) => frailty_theta_from(&v)?,
        None => FrailtyTheta::reference(),
    };
    let design = FrailtyDesign {
        n: pick(args.n, file.n).unwrap_or(defaults.n),
        m: pick(args.m, file.m).unwrap_or(defaults.m),
    };
    rec.n = Some(design.n);
    rec.m = Some(design.m);
    rec.theta = Some(frailty_vec(&theta));
    Ok((theta, design))
}

// ---------------------------------------------------------------------------
// simulate

pub fn simulate(positional: Option<ModelId>, run: &RunArgs, design: &DesignArgs) -> Result<(), CliError> {
    let id = "simulate";
    let file = load_config(run, id)?;
    let model = resolve_model(positional, run.model, file.run.model.as_ref())?
        .ok_or_else(|| CliError::usage("simulate needs a model: sbm, pk or frailty"))?;
    reject(
        id,
        &[
            ("--alpha", run.alpha.is_some()),
            ("--iters", run.iters.is_some()),
            ("--schedule-burnin", run.schedule_burnin.is_some()),
            ("--schedule-exp", run.schedule_exp.is_some()),
            ("--replicates", run.replicates.is_some()),
            ("--alpha-grid", run.alpha_grid.is_some()),
        ],
    )?;
    let seed = resolve_seed(run.seed, file.run.seed, 1)?;
    let mut settings = Settings::default();
    settings.run.model = Some(model.as_str().into());
    settings.run.seed = Some(seed);
    let mut rng = RngStream::new(seed, 1);
    let out = match model {
        ModelId::Sbm => {
            let (theta, n) = sbm_design(design, &file.design, 100, &mut settings.design)?;
            let (data, labels) = SbmModel::simulate(&theta, n, &mut rng)?;
            let m = SbmModel::new(data, theta.q())?;
            let out = prepare_out(run, id, Some(model), &settings)?;
            write_file(&out.join("data.edges"), |w| sbm::write_edge_list(w, m.data(), m.q()))?;
            write_file(&out.join("labels.txt"), |w| datafile::write_labels(w, &labels))?;
            write_theta(&out.join("truth.csv"), &names_of(&m), &sbm_vec(&theta))?;
            out
        }
        ModelId::Pk => {
            let (theta, d) = pk_design(design, &file.design, &mut settings.design)?;
            let (data, phis) = PkModel::simulate(&theta, &d, &mut rng)?;
            let m = PkModel::new(data);
            let out = prepare_out(run, id, Some(model), &settings)?;
            write_file(&out.join("data.csv"), |w| pk::write_csv(w, m.data()))?;
            write_file(&out.join("latent.csv"), |w| -> std::io::Result<()> {
                writeln!(w, "i,log_V,log_ka,log_Cl")?;
                for (i, p) in phis.iter().enumerate() {
                    writeln!(w, "{i},{:.17e},{:.17e},{:.17e}", p[0], p[1], p[2])?;
                }
                Ok(())
            })?;
            write_theta(&out.join("truth.csv"), &names_of(&m), &pk_vec(&theta))?;
            out
        }
        ModelId::Frailty => {
            let (theta, d) = frailty_design(design, &file.design, FrailtyDesign::default(), &mut settings.design)?;
            let (data, z) = FrailtyModel::simulate(&theta, &d, &mut rng)?;
            let m = FrailtyModel::new(data);
            let out = prepare_out(run, id, Some(model), &settings)?;
            write_file(&out.join("data.csv"), |w| frailty::write_csv(w, m.data()))?;
            write_file(&out.join("latent.csv"), |w| -> std::io::Result<()> {
                writeln!(w, "i,z")?;
                for (i, v) in z.iter().enumerate() {
                    writeln!(w, "{i},{v:.17e}")?;
                }
                Ok(())
            })?;
            write_theta(&out.join("truth.csv"), &names_of(&m), &frailty_vec(&theta))?;
            out
        }
    };
    println!("simulated {} dataset in {}", model.as_str(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// fit

/// `p` uniform, `ν` at 1.5 (within) and 0.5 (between) times the edge density.
fn sbm_default_init(model: &SbmModel) -> Result<SbmTheta, CliError> {
    let (n, q) = (model.data().n(), model.q());
    let density = model.data().edge_count() as f64 / (n * (n - 1)) as f64;
    let nu = (0..q * q)
        .map(|k| {
            let f = if q == 1 || k / q == k % q { 1.5 } else { 0.5 };
            (f * density).clamp(1e-3, 0.999)
        })
        .collect();
    Ok(SbmTheta::new(vec![1.0 / q as f64; q], nu)?)
}

fn fit_and_write<M: LatentModel>(
    model: &M,
    theta0: M::Theta,
    config: &SaemConfig,
    out: &Path,
    timing: bool,
) -> Result<(), CliError> {
    let (theta, trace) = run(model, config, Init::fixed(theta0))?;
    write_file(&out.join("trace.csv"), |w| trace.write_csv(w, timing))?;
    let v = model.theta_to_vec(&theta);
    write_theta(&out.join("theta.csv"), &trace.param_names, &v)?;
    for (n, x) in trace.param_names.iter().zip(&v) {
        println!("{n:<8} {x:.6}");
    }
    if trace.clamped > 0 {
        eprintln!("note: {} parameter entries were clamped into their domain", trace.clamped);
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn fit(positional: Option<ModelId>, args: &FitArgs, run: &RunArgs, design: &DesignArgs) -> Result<(), CliError> {
    let id = "fit";
    let file = load_config(run, id)?;
    let model = resolve_model(positional, run.model, file.run.model.as_ref())?
        .ok_or_else(|| CliError::usage("fit needs a model: sbm, pk or frailty"))?;
    reject(
        id,
        &[
            ("--replicates", run.replicates.is_some()),
            ("--alpha-grid", run.alpha_grid.is_some()),
        ],
    )?;
    let data_path = pick(args.data.as_ref().map(|p| p.display().to_string()), file.design.data.clone());
    if data_path.is_some() {
        reject(
            "fit --data",
            &[
                ("--n", design.n.is_some()),
                ("--m", design.m.is_some()),
                ("--j", design.j.is_some()),
                ("--theta", design.theta.is_some()),
            ],
        )?;
    }

    let mut settings = Settings::default();
    let seed = resolve_seed(run.seed, file.run.seed, 1)?;
    let alpha = pick(run.alpha, file.run.alpha).unwrap_or(1.0);
    let iterations = pick(run.iters, file.run.iters).unwrap_or(1000);
    let thin = pick(args.thin, file.run.thin).unwrap_or(1);
    let timing = args.timing || file.run.timing.unwrap_or(false);
    let schedule = resolve_schedule(run, &file.run, &mut settings.run)?;
    settings.run.model = Some(model.as_str().into());
    settings.run.seed = Some(seed);
    settings.run.alpha = Some(alpha);
    settings.run.iters = Some(iterations);
    settings.run.thin = Some(thin);
    settings.run.timing = Some(timing);
    settings.design.data = data_path.clone();
    let config = SaemConfig {
        alpha,
        iterations,
        schedule,
        seed,
        thin,
        ..SaemConfig::default()
    };
    config.validate()?;
    let init = pick(args.init.clone(), file.init.theta.clone());
    let mut rng = RngStream::new(seed, 1);

    match model {
        ModelId::Sbm => {
            let (data, q): (SbmData, usize) = match &data_path {
                Some(p) => {
                    let (data, q_file) = sbm::read_edge_list(open_data(Path::new(p))?)?;
                    let q = pick(design.q, file.design.q).unwrap_or(q_file);
                    settings.design.q = Some(q);
                    (data, q)
                }
                None => {
                    let (theta, n) = sbm_design(design, &file.design, 100, &mut settings.design)?;
                    (SbmModel::simulate(&theta, n, &mut rng)?.0, theta.q())
                }
            };
            let m = SbmModel::new(data, q)?;
            let theta0 = match init {
                Some(v) => m.theta_from_vec(&v)?,
                None => sbm_default_init(&m)?,
            };
            settings.init.theta = Some(m.theta_to_vec(&theta0));
            let out = prepare_out(run, id, Some(model), &settings)?;
            fit_and_write(&m, theta0, &config, &out, timing)
        }
        ModelId::Pk => {
            let data = match &data_path {
                Some(p) => pk::read_csv(open_data(Path::new(p))?)?,
                None => {
                    let (theta, d) = pk_design(design, &file.design, &mut settings.design)?;
                    PkModel::simulate(&theta, &d, &mut rng)?.0
                }
            };
            let m = PkModel::new(data);
            let theta0 = match init {
                Some(v) => m.theta_from_vec(&v)?,
                None => PkRecoveryConfig::default().init,
            };
            settings.init.theta = Some(m.theta_to_vec(&theta0));
            let out = prepare_out(run, id, Some(model), &settings)?;
            fit_and_write(&m, theta0, &config, &out, timing)
        }
        ModelId::Frailty => {
            let data = match &data_path {
                Some(p) => frailty::read_csv(open_data(Path::new(p))?)?,
                None => {
                    let (theta, d) =
                        frailty_design(design, &file.design, FrailtyDesign::default(), &mut settings.design)?;
                    FrailtyModel::simulate(&theta, &d, &mut rng)?.0
                }
            };
            let m = FrailtyModel::new(data);
            let theta0 = match init {
                Some(v) => m.theta_from_vec(&v)?,
                None => FrailtyTheta {
                    beta: vec![1.0; m.data().p()],
                    ..EpochConvergenceConfig::default().init
                },
            };
            settings.init.theta = Some(m.theta_to_vec(&theta0));
            let out = prepare_out(run, id, Some(model), &settings)?;
            fit_and_write(&m, theta0, &config, &out, timing)
        }
    }
}

// ---------------------------------------------------------------------------
// experiment

pub fn experiment(
    kind: ExperimentKind,
    run: &RunArgs,
    design: &DesignArgs,
    exp: &ExperimentArgs,
) -> Result<(), CliError> {
    let id = kind.as_str();
    let file = load_config(run, id)?;
    let model = resolve_model(None, run.model, file.run.model.as_ref())?;
    reject(id, &[("--alpha (use --alpha-grid)", run.alpha.is_some())])?;
    match kind {
        ExperimentKind::VarianceScaling => variance_scaling(run, design, exp, &file, model),
        ExperimentKind::EpochConvergence => epoch_convergence(run, design, exp, &file, model),
        ExperimentKind::Timing => timing(run, design, exp, &file, model),
        ExperimentKind::NlkPmf => nlk_pmf(run, design, exp, &file, model),
    }
}

fn alpha_tag(a: f64) -> String {
    format!("alpha_{a}")
}

fn variance_scaling(
    run: &RunArgs,
    design: &DesignArgs,
    exp: &ExperimentArgs,
    file: &ConfigFile,
    model: Option<ModelId>,
) -> Result<(), CliError> {
    let id = "variance-scaling";
    let model = require_model(id, model, ModelId::Sbm)?;
    reject(
        id,
        &[
            ("--m", design.m.is_some()),
            ("--j", design.j.is_some()),
            ("--epochs", exp.epochs.is_some()),
            ("--sizes", exp.sizes.is_some()),
            ("--steps", exp.steps.is_some()),
            ("--warmup", exp.warmup.is_some()),
            ("--gap", exp.gap.is_some()),
            ("--draws", exp.draws.is_some()),
            ("--window", exp.window.is_some()),
            ("--windows", exp.windows.is_some()),
        ],
    )?;
    let d = VarianceScalingConfig::default();
    let mut settings = Settings::default();
    let (theta, n) = sbm_design(design, &file.design, d.n, &mut settings.design)?;
    let cfg = VarianceScalingConfig {
        n,
        theta,
        iterations: pick(run.iters, file.run.iters).unwrap_or(d.iterations),
        replicates: pick(run.replicates, file.run.replicates).unwrap_or(d.replicates),
        alphas: pick(run.alpha_grid.clone(), file.run.alpha_grid.clone()).unwrap_or(d.alphas),
        base_seed: resolve_seed(run.seed, file.run.seed, d.base_seed)?,
        schedule: resolve_schedule(run, &file.run, &mut settings.run)?,
    };
    check_alpha_grid(&cfg.alphas)?;
    if cfg.replicates < 2 {
        return Err(CliError::usage("variance-scaling needs at least 2 replicates"));
    }
    settings.run.model = Some(model.as_str().into());
    settings.run.iters = Some(cfg.iterations);
    settings.run.replicates = Some(cfg.replicates);
    settings.run.alpha_grid = Some(cfg.alphas.clone());
    settings.run.seed = Some(cfg.base_seed);
    let out = prepare_out(run, id, Some(model), &settings)?;

    let res = experiment::variance_scaling(&cfg)?;
    write_failures(&out, &res.failed)?;
    write_file(&out.join("variance_scaling.csv"), |w| res.fit.write_csv(w))?;
    write_file(&out.join("finals.csv"), |w| -> std::io::Result<()> {
        writeln!(w, "alpha,row,{}", res.fit.param_names.join(","))?;
        for e in &res.ensembles {
            for (r, f) in e.finals.iter().enumerate() {
                let vals: Vec<String> = f.iter().map(|v| format!("{v:.17e}")).collect();
                writeln!(w, "{},{r},{}", e.alpha, vals.join(","))?;
            }
        }
        Ok(())
    })?;
    // V̂_α / ĉ against (2-α)/α
    let mut series: Vec<Series> = res
        .fit
        .param_names
        .iter()
        .enumerate()
        .map(|(c, name)| Series {
            label: name.clone(),
            x: res.fit.alphas.clone(),
            y: res.fit.variances.iter().map(|v| v[c] / res.fit.c_hat[c]).collect(),
        })
        .collect();
    let grid: Vec<f64> = (1..=100).map(|k| k as f64 / 100.0).filter(|&a| a >= cfg.alphas.iter().copied().fold(1.0, f64::min)).collect();
    series.push(Series {
        label: "(2-a)/a".into(),
        y: grid.iter().map(|&a| analysis::scaling_factor(a)).collect(),
        x: grid,
    });
    fs::write(
        out.join("variance_scaling.svg"),
        svg_line_plot("Variance of the final estimate", "alpha", "V / c", &series),
    )?;
    if let Some(ratios) = res.fit.ratios_to_batch() {
        for (a, &alpha) in res.fit.alphas.iter().enumerate() {
            let r: Vec<String> = ratios[a].iter().map(|x| format!("{x:.3}")).collect();
            println!("alpha={alpha:<6} V/V_1 = [{}] target {:.3}", r.join(", "), analysis::scaling_factor(alpha));
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn epoch_convergence(
    run: &RunArgs,
    design: &DesignArgs,
    exp: &ExperimentArgs,
    file: &ConfigFile,
    model: Option<ModelId>,
) -> Result<(), CliError> {
    let id = "epoch-convergence";
    let model = require_model(id, model, ModelId::Frailty)?;
    reject(
        id,
        &[
            ("--iters (use --epochs)", run.iters.is_some()),
            ("--q", design.q.is_some()),
            ("--j", design.j.is_some()),
            ("--sizes", exp.sizes.is_some()),
            ("--steps", exp.steps.is_some()),
            ("--warmup", exp.warmup.is_some()),
            ("--gap", exp.gap.is_some()),
            ("--draws", exp.draws.is_some()),
            ("--window", exp.window.is_some()),
            ("--windows", exp.windows.is_some()),
        ],
    )?;
    let d = EpochConvergenceConfig::default();
    let mut settings = Settings::default();
    let (theta, fd) = frailty_design(design, &file.design, d.design, &mut settings.design)?;
    let init = match file.init.theta.clone() {
        Some(v) => frailty_theta_from(&v)?,
        None => FrailtyTheta {
            beta: vec![1.0; theta.beta.len()],
            ..d.init.clone()
        },
    };
    if init.beta.len() != theta.beta.len() {
        return Err(CliError::usage("initial and generating parameter vectors differ in length"));
    }
    let cfg = EpochConvergenceConfig {
        design: fd,
        theta,
        init,
        alphas: pick(run.alpha_grid.clone(), file.run.alpha_grid.clone()).unwrap_or(d.alphas),
        replicates: pick(run.replicates, file.run.replicates).unwrap_or(d.replicates),
        epochs: pick(exp.epochs, file.experiment.epochs).unwrap_or(d.epochs),
        coordinate: 0,
        base_seed: resolve_seed(run.seed, file.run.seed, d.base_seed)?,
        schedule: resolve_schedule(run, &file.run, &mut settings.run)?,
    };
    check_alpha_grid(&cfg.alphas)?;
    settings.run.model = Some(model.as_str().into());
    settings.run.replicates = Some(cfg.replicates);
    settings.run.alpha_grid = Some(cfg.alphas.clone());
    settings.run.seed = Some(cfg.base_seed);
    settings.init.theta = Some(frailty_vec(&cfg.init));
    settings.experiment.epochs = Some(cfg.epochs);
    let out = prepare_out(run, id, Some(model), &settings)?;

    let res = experiment::epoch_convergence(&cfg)?;
    write_failures(&out, &res.failed)?;
    let truth = cfg.theta.beta[0];
    write_file(&out.join("median_error.csv"), |w| -> std::io::Result<()> {
        writeln!(w, "alpha,epoch,median_abs_error")?;
        for c in &res.curves {
            for (e, v) in c.epochs.iter().zip(&c.median_abs_error) {
                writeln!(w, "{},{e},{v:e}", c.alpha)?;
            }
        }
        Ok(())
    })?;
    write_file(&out.join("settling.csv"), |w| -> std::io::Result<()> {
        writeln!(w, "alpha,settling_epoch,final_median_abs_error")?;
        for c in &res.curves {
            let fin = c.median_abs_error.last().copied().unwrap_or(f64::NAN);
            writeln!(w, "{},{},{fin:e}", c.alpha, c.settling_epoch(SETTLE_TOL))?;
        }
        Ok(())
    })?;
    for c in &res.curves {
        let tag = alpha_tag(c.alpha);
        let band = confidence_band(&c.series, BAND_LEVEL);
        write_file(&out.join(format!("band_{tag}.csv")), |w| analysis::write_band_csv(w, &c.epochs, &band))?;
        let mse = mse_series(&c.series, truth);
        write_file(&out.join(format!("log_mse_{tag}.csv")), |w| analysis::write_log_mse_csv(w, &c.epochs, &mse))?;
        println!(
            "alpha={:<6} settling epoch {} final median error {:.4}",
            c.alpha,
            c.settling_epoch(SETTLE_TOL),
            c.median_abs_error.last().copied().unwrap_or(f64::NAN)
        );
    }
    let series: Vec<Series> = res
        .curves
        .iter()
        .map(|c| Series {
            label: format!("alpha = {}", c.alpha),
            x: c.epochs.clone(),
            y: c.median_abs_error.clone(),
        })
        .collect();
    fs::write(
        out.join("epoch_convergence.svg"),
        svg_line_plot("Median |running mean - truth| of beta_1", "epoch", "error", &series),
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

fn timing(
    run: &RunArgs,
    design: &DesignArgs,
    exp: &ExperimentArgs,
    file: &ConfigFile,
    model: Option<ModelId>,
) -> Result<(), CliError> {
    let id = "timing";
    let model = require_model(id, model, ModelId::Sbm)?;
    reject(
        id,
        &[
            ("--iters (use --steps)", run.iters.is_some()),
            ("--replicates", run.replicates.is_some()),
            ("--schedule-burnin", run.schedule_burnin.is_some()),
            ("--schedule-exp", run.schedule_exp.is_some()),
            ("--n (use --sizes)", design.n.is_some()),
            ("--m", design.m.is_some()),
            ("--j", design.j.is_some()),
            ("--epochs", exp.epochs.is_some()),
            ("--gap", exp.gap.is_some()),
            ("--draws", exp.draws.is_some()),
            ("--window", exp.window.is_some()),
            ("--windows", exp.windows.is_some()),
        ],
    )?;
    let d = TimingConfig::default();
    let mut settings = Settings::default();
    let (theta, _) = sbm_design(design, &file.design, 0, &mut settings.design)?;
    settings.design.n = None;
    let cfg = TimingConfig {
        sizes: pick(exp.sizes.clone(), file.experiment.sizes.clone()).unwrap_or(d.sizes),
        alphas: pick(run.alpha_grid.clone(), file.run.alpha_grid.clone()).unwrap_or(d.alphas),
        warmup: pick(exp.warmup, file.experiment.warmup).unwrap_or(d.warmup),
        steps: pick(exp.steps, file.experiment.steps).unwrap_or(d.steps),
        theta,
        base_seed: resolve_seed(run.seed, file.run.seed, d.base_seed)?,
    };
    check_alpha_grid(&cfg.alphas)?;
    if cfg.steps < MIN_TIMING_STEPS {
        return Err(CliError::usage(format!("timing needs at least {MIN_TIMING_STEPS} steps")));
    }
    if cfg.sizes.is_empty() || cfg.sizes.iter().any(|&n| n < 2) {
        return Err(CliError::usage("timing sizes must be at least 2"));
    }
    settings.run.model = Some(model.as_str().into());
    settings.run.alpha_grid = Some(cfg.alphas.clone());
    settings.run.seed = Some(cfg.base_seed);
    settings.experiment.sizes = Some(cfg.sizes.clone());
    settings.experiment.steps = Some(cfg.steps);
    settings.experiment.warmup = Some(cfg.warmup);
    let out = prepare_out(run, id, Some(model), &settings)?;

    let rows = experiment::sae_timing(&cfg)?;
    write_file(&out.join("timing.csv"), |w| -> std::io::Result<()> {
        writeln!(w, "n,alpha,median_ns,batch_median_ns,ratio,ref_alpha,ref_alpha_2_minus_alpha")?;
        for r in &rows {
            writeln!(
                w,
                "{},{},{},{},{:.6},{},{}",
                r.n,
                r.alpha,
                r.median_ns,
                r.batch_median_ns,
                r.ratio,
                r.alpha,
                r.alpha * (2.0 - r.alpha)
            )?;
        }
        Ok(())
    })?;
    let mut series: Vec<Series> = cfg
        .sizes
        .iter()
        .map(|&n| {
            let rs: Vec<_> = rows.iter().filter(|r| r.n == n).collect();
            Series {
                label: format!("n = {n}"),
                x: rs.iter().map(|r| r.alpha).collect(),
                y: rs.iter().map(|r| r.ratio).collect(),
            }
        })
        .collect();
    let grid: Vec<f64> = (0..=20).map(|k| k as f64 / 20.0).collect();
    series.push(Series {
        label: "alpha".into(),
        x: grid.clone(),
        y: grid.clone(),
    });
    series.push(Series {
        label: "alpha(2-alpha)".into(),
        y: grid.iter().map(|a| a * (2.0 - a)).collect(),
        x: grid,
    });
    fs::write(
        out.join("timing.svg"),
        svg_line_plot("Median SAE-step time relative to batch", "alpha", "ratio", &series),
    )?;
    for r in &rows {
        println!("n={:<5} alpha={:<5} ratio={:.3}", r.n, r.alpha, r.ratio);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn nlk_pmf(
    run: &RunArgs,
    design: &DesignArgs,
    exp: &ExperimentArgs,
    file: &ConfigFile,
    model: Option<ModelId>,
) -> Result<(), CliError> {
    let id = "nlk-pmf";
    reject(
        id,
        &[
            ("--model", model.is_some()),
            ("--iters", run.iters.is_some()),
            ("--replicates", run.replicates.is_some()),
            ("--schedule-burnin", run.schedule_burnin.is_some()),
            ("--schedule-exp", run.schedule_exp.is_some()),
            ("--n", design.n.is_some()),
            ("--q", design.q.is_some()),
            ("--m", design.m.is_some()),
            ("--j", design.j.is_some()),
            ("--theta", design.theta.is_some()),
            ("--epochs", exp.epochs.is_some()),
            ("--sizes", exp.sizes.is_some()),
            ("--steps", exp.steps.is_some()),
            ("--warmup", exp.warmup.is_some()),
        ],
    )?;
    let d = NlkConfig::default();
    let cfg = NlkConfig {
        alphas: pick(run.alpha_grid.clone(), file.run.alpha_grid.clone()).unwrap_or(d.alphas),
        gap: pick(exp.gap, file.experiment.gap).unwrap_or(d.gap),
        draws: pick(exp.draws, file.experiment.draws).unwrap_or(d.draws),
        window: pick(exp.window, file.experiment.window).unwrap_or(d.window),
        windows: pick(exp.windows, file.experiment.windows).unwrap_or(d.windows),
        seed: resolve_seed(run.seed, file.run.seed, d.seed)?,
    };
    check_alpha_grid(&cfg.alphas)?;
    if cfg.draws == 0 {
        return Err(CliError::usage("nlk-pmf needs at least one draw"));
    }
    let mut settings = Settings::default();
    settings.run.alpha_grid = Some(cfg.alphas.clone());
    settings.run.seed = Some(cfg.seed);
    settings.experiment.gap = Some(cfg.gap);
    settings.experiment.draws = Some(cfg.draws);
    settings.experiment.window = Some(cfg.window);
    settings.experiment.windows = Some(cfg.windows);
    let out = prepare_out(run, id, None, &settings)?;

    let rows = experiment::nlk_distribution(&cfg)?;
    write_file(&out.join("nlk.csv"), |w| -> std::io::Result<()> {
        writeln!(w, "alpha,chi2,df,p_value,sum_rule_violations,mean_sq,target")?;
        for r in &rows {
            writeln!(
                w,
                "{},{:e},{},{:e},{},{:e},{:e}",
                r.alpha,
                r.gof.statistic,
                r.gof.df,
                r.gof.p_value,
                r.sum_rule_violations,
                r.mean_sq,
                analysis::scaling_factor(r.alpha)
            )?;
        }
        Ok(())
    })?;
    for r in &rows {
        write_file(&out.join(format!("cells_{}.csv", alpha_tag(r.alpha))), |w| -> std::io::Result<()> {
            writeln!(w, "cell,observed,expected")?;
            for (c, (o, e)) in r.gof.observed.iter().zip(&r.gof.expected).enumerate() {
                writeln!(w, "{c},{o},{e:e}")?;
            }
            Ok(())
        })?;
        let kind = if r.gof.df == 0 { " (point mass)" } else { "" };
        println!(
            "alpha={:<6} chi2={:.3} df={} p={:.4}{kind}  sum-rule violations={}  mean (1/k)ΣN²={:.4} target {:.4}",
            r.alpha,
            r.gof.statistic,
            r.gof.df,
            r.gof.p_value,
            r.sum_rule_violations,
            r.mean_sq,
            analysis::scaling_factor(r.alpha)
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_vectors_round_trip() {
        let t = SbmTheta::reference();
        assert_eq!(sbm_theta_from(&sbm_vec(&t), Some(2)).unwrap(), t);
        assert!(sbm_theta_from(&[0.5, 0.5, 0.1], None).is_err());
        assert!(matches!(sbm_theta_from(&sbm_vec(&t), Some(3)), Err(CliError::Usage(_))));
        let p = PkTheta::reference();
        assert_eq!(pk_theta_from(&pk_vec(&p)).unwrap(), p);
        let f = FrailtyTheta::reference();
        assert_eq!(frailty_theta_from(&frailty_vec(&f)).unwrap(), f);
        assert!(frailty_theta_from(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn default_sbm_theta_is_valid_for_any_q() {
        for q in 1..5 {
            assert_eq!(sbm_default_theta(q).unwrap().q(), q);
        }
        assert_eq!(sbm_default_theta(2).unwrap(), SbmTheta::reference());
    }

    #[test]
    fn model_given_twice_must_agree() {
        assert!(resolve_model(Some(ModelId::Pk), Some(ModelId::Sbm), None).is_err());
        assert_eq!(resolve_model(None, None, Some(&"frailty".to_string())).unwrap(), Some(ModelId::Frailty));
        assert_eq!(resolve_model(Some(ModelId::Pk), Some(ModelId::Pk), None).unwrap(), Some(ModelId::Pk));
    }

    #[test]
    fn irrelevant_flags_are_reported() {
        let err = reject("x", &[("--a", true), ("--b", false), ("--c", true)]).unwrap_err();
        assert!(err.to_string().contains("--a, --c"));
        assert!(reject("x", &[("--a", false)]).is_ok());
    }
}
