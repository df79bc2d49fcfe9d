use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use tlmest::datagen::{generate, ScenarioConfig};
use tlmest::experiments::{
    aggregate, best_frequencies, preset, run_experiment, Aggregate, ExperimentConfig, Failure, FrequencyRow, Record,
    Scale, PRESETS,
};
use tlmest::io::{read_records_csv, read_study, write_records_csv, write_study, ParameterFile, StudyManifest};
use tlmest::selection::{dc_truncated, DcStep, SelectionConfig};
use tlmest::solvers::fit_dataset;
use tlmest::transfer::{oracle_transfer, FineTune, TransferConfig, TransferDiagnostics};
use tlmest::tuning::{cv_select, cv_vanilla, Criterion, CvOutcome};
use tlmest::{Dataset, LossFamily, Regularizer, SolverOptions};

use crate::config::{resolve_seed, DataSpec, FitSettings, RunConfig};
use crate::{Cli, Command, DataArgs, FamilyArg, FinetuneArg, RegularizerArg};

/// Outcome of a successful command; `converged = false` becomes exit
/// status 2 under `--strict`.
pub struct Status {
    pub converged: bool,
    pub notes: Vec<String>,
}

impl Status {
    fn ok() -> Status {
        Status {
            converged: true,
            notes: Vec::new(),
        }
    }

    fn check(converged: bool, note: impl Into<String>) -> Status {
        Status {
            converged,
            notes: if converged { Vec::new() } else { vec![note.into()] },
        }
    }
}

pub fn run(cli: &Cli) -> Result<Status> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let seed = resolve_seed(cli.seed, cfg.seed)?;
    match &cli.command {
        Command::Generate(a) => generate_cmd(cli, cfg, seed, a),
        Command::Fit(a) => fit_cmd(cli, cfg, seed, a),
        Command::Transfer(a) => transfer_cmd(cli, cfg, a),
        Command::Select(a) => select_cmd(cli, cfg, a),
        Command::Experiment(a) => experiment_cmd(cli, cfg, seed, a),
        Command::Report(a) => report_cmd(a),
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    argv: Vec<String>,
    seed: Option<u64>,
    config: &'a RunConfig,
}

fn write_manifest(path: &Path, command: &str, seed: Option<u64>, config: &RunConfig) -> Result<()> {
    let m = Manifest {
        tool: "tlmest",
        version: env!("CARGO_PKG_VERSION"),
        command,
        argv: std::env::args().collect(),
        seed,
        config,
    };
    write_json(path, &m)
}

/// `out.json` -> `out.manifest.json`.
fn sidecar(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.manifest.json"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    use std::io::Write;
    w.write_all(b"\n")?;
    Ok(())
}

fn required_out(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| anyhow!("missing output path: pass --out or set \"out\" in the config"))
}

fn family_of(arg: FamilyArg) -> LossFamily {
    match arg {
        FamilyArg::Linear => LossFamily::SquaredIdentity,
        FamilyArg::Logit => LossFamily::LogisticLogit,
    }
}

fn regularizer_of(arg: Option<RegularizerArg>, configured: Option<Regularizer>, d: &Dataset) -> Regularizer {
    match arg {
        Some(RegularizerArg::L1) => Regularizer::L1,
        Some(RegularizerArg::Nuclear) => Regularizer::Nuclear,
        None => configured.unwrap_or(if d.shape().is_matrix() {
            Regularizer::Nuclear
        } else {
            Regularizer::L1
        }),
    }
}

/// Merges data flags over the config and loads the datasets.
fn load_data(args: &DataArgs, cfg: &mut RunConfig) -> Result<(Vec<Dataset>, Option<StudyManifest>)> {
    let mut spec = cfg.data.clone().unwrap_or_default();
    if args.study.is_some() || !args.files.is_empty() {
        spec.study = args.study.clone();
        spec.files = args.files.clone();
    }
    if let Some(f) = args.family {
        spec.family = Some(family_of(f));
    }
    let out = match (&spec.study, spec.files.is_empty()) {
        (Some(_), false) => bail!("give either a study or dataset files, not both"),
        (Some(study), true) => {
            let (manifest, datasets) = read_study(study).with_context(|| format!("reading study {}", study.display()))?;
            if let Some(f) = spec.family {
                if f != manifest.family {
                    bail!("--family {f} disagrees with the study's {}", manifest.family);
                }
            }
            spec.family = Some(manifest.family);
            (datasets, Some(manifest))
        }
        (None, false) => {
            let family = *spec.family.get_or_insert(LossFamily::SquaredIdentity);
            let datasets = spec
                .files
                .iter()
                .map(|p| tlmest::io::load_dataset(p, family).with_context(|| format!("reading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            let shape = datasets[0].shape();
            if let Some(bad) = datasets.iter().find(|d| d.shape() != shape) {
                bail!("datasets disagree in shape: {} vs {}", shape, bad.shape());
            }
            (datasets, None)
        }
        (None, true) => bail!("no data: pass --study or --data, or set \"data\" in the config"),
    };
    cfg.data = Some(DataSpec { ..spec });
    Ok(out)
}

// ---------------------------------------------------------------- generate

fn generate_cmd(cli: &Cli, mut cfg: RunConfig, seed: Option<u64>, a: &crate::GenerateArgs) -> Result<Status> {
    let mut scenario: ScenarioConfig = match &a.preset {
        Some(name) => {
            let p = preset(name)?;
            let named = match &a.scenario {
                Some(id) => p
                    .scenarios
                    .iter()
                    .find(|s| &s.id == id)
                    .ok_or_else(|| anyhow!("preset {name} has no scenario '{id}'"))?,
                None => &p.scenarios[0],
            };
            named.scenario.with_seed(p.seed)
        }
        None => cfg
            .scenario
            .clone()
            .ok_or_else(|| anyhow!("no scenario: pass --preset or set \"scenario\" in the config"))?,
    };
    if let Some(s) = seed {
        scenario = scenario.with_seed(s);
    }
    scenario.validate()?;
    let out = required_out(&a.out, &cfg)?;
    let study = generate(&scenario)?;
    write_study(&out, &study, Some(&scenario)).with_context(|| format!("writing study to {}", out.display()))?;
    cfg.seed = Some(scenario.seed);
    cfg.scenario = Some(scenario.clone());
    cfg.out = Some(out.clone());
    write_manifest(&out.join("manifest.json"), command_name(cli), Some(scenario.seed), &cfg)?;
    Ok(Status::ok())
}

fn command_name(cli: &Cli) -> &'static str {
    match cli.command {
        Command::Generate(_) => "generate",
        Command::Fit(_) => "fit",
        Command::Transfer(_) => "transfer",
        Command::Select(_) => "select",
        Command::Experiment(_) => "experiment",
        Command::Report(_) => "report",
    }
}

// --------------------------------------------------------------------- fit

#[derive(Serialize)]
struct FitReport {
    lambda: f64,
    regularizer: Regularizer,
    converged: bool,
    iterations: usize,
    cv: Option<CvOutcome>,
    parameter: ParameterFile,
}

fn fit_cmd(cli: &Cli, mut cfg: RunConfig, seed: Option<u64>, a: &crate::FitArgs) -> Result<Status> {
    let (datasets, _) = load_data(&a.data, &mut cfg)?;
    let d = datasets
        .get(a.index)
        .ok_or_else(|| anyhow!("dataset index {} out of range for {} datasets", a.index, datasets.len()))?;
    let mut settings: FitSettings = cfg.fit.clone().unwrap_or_default();
    settings.solver.validate()?;
    let r = regularizer_of(a.regularizer, settings.regularizer, d);
    settings.regularizer = Some(r);
    let opts = settings.solver;
    let cv_seed = seed.unwrap_or(0);
    let (lambda, cv) = match a.lambda.or(settings.lambda) {
        Some(l) => (l, None),
        None => {
            let cv = match &cfg.tuning {
                Some(grid) => {
                    grid.validate()?;
                    cv_select(d, |train, l, warm| Ok(fit_dataset(train, r, l, warm, &opts)?.param), grid, cv_seed)?
                }
                None => cv_vanilla(d, r, Criterion::default(), cv_seed, &opts)?,
            };
            (cv.lambda, Some(cv))
        }
    };
    settings.lambda = Some(lambda);
    let fit = fit_dataset(d, r, lambda, None, &opts)?;
    let out = required_out(&a.out, &cfg)?;
    cfg.fit = Some(settings);
    cfg.out = Some(out.clone());
    cfg.seed = seed;
    write_json(
        &out,
        &FitReport {
            lambda,
            regularizer: r,
            converged: fit.converged,
            iterations: fit.iterations,
            cv,
            parameter: (&fit.param).into(),
        },
    )?;
    write_manifest(&sidecar(&out), command_name(cli), seed, &cfg)?;
    Ok(Status::check(fit.converged, format!("fit stopped after {} iterations without converging", fit.iterations)))
}

// ---------------------------------------------------------------- transfer

#[derive(Serialize)]
struct TransferReport {
    pooled: Vec<usize>,
    primal: ParameterFile,
    finetuned: ParameterFile,
    delta: ParameterFile,
    diagnostics: TransferDiagnostics,
}

fn transfer_cmd(cli: &Cli, mut cfg: RunConfig, a: &crate::TransferArgs) -> Result<Status> {
    let (datasets, manifest) = load_data(&a.data, &mut cfg)?;
    let pooled: Vec<usize> = if a.oracle {
        let truth = manifest
            .as_ref()
            .and_then(|m| m.true_informative.clone())
            .ok_or_else(|| anyhow!("--oracle needs a study whose manifest lists the informative sources"))?;
        if truth.len() + 1 != datasets.len() {
            bail!("study lists {} informative flags for {} sources", truth.len(), datasets.len() - 1);
        }
        std::iter::once(0).chain((1..datasets.len()).filter(|&k| truth[k - 1])).collect()
    } else {
        (0..datasets.len()).collect()
    };
    let chosen: Vec<Dataset> = pooled.iter().map(|&k| datasets[k].clone()).collect();
    let mut tc = cfg.transfer.unwrap_or(TransferConfig {
        lambda_pool: f64::NAN,
        finetune: FineTune::None,
        regularizer: regularizer_of(None, None, &chosen[0]),
        solver: SolverOptions::default(),
    });
    if a.regularizer.is_some() {
        tc.regularizer = regularizer_of(a.regularizer, None, &chosen[0]);
    }
    if let Some(l) = a.lambda_pool {
        tc.lambda_pool = l;
    }
    if tc.lambda_pool.is_nan() {
        bail!("missing lambda_pool: pass --lambda-pool or set transfer.lambda_pool in the config");
    }
    match a.finetune {
        Some(FinetuneArg::None) => tc.finetune = FineTune::None,
        Some(FinetuneArg::Lagrangian) => {
            let z = a.zeta.ok_or_else(|| anyhow!("--finetune lagrangian needs --zeta"))?;
            tc.finetune = FineTune::Lagrangian(z);
        }
        Some(FinetuneArg::Constrained) => {
            let r = a.radius.ok_or_else(|| anyhow!("--finetune constrained needs --radius"))?;
            tc.finetune = FineTune::Constrained(r);
        }
        None => {
            if a.zeta.is_some() || a.radius.is_some() {
                bail!("--zeta/--radius need --finetune lagrangian/constrained");
            }
        }
    }
    let fit = oracle_transfer(&chosen, 0, &tc)?;
    let out = required_out(&a.out, &cfg)?;
    cfg.transfer = Some(tc);
    cfg.out = Some(out.clone());
    let d = &fit.diagnostics;
    let converged = d.pool_converged && d.finetune_converged;
    write_json(
        &out,
        &TransferReport {
            pooled,
            primal: (&fit.primal).into(),
            finetuned: (&fit.finetuned).into(),
            delta: (&fit.delta).into(),
            diagnostics: fit.diagnostics.clone(),
        },
    )?;
    write_manifest(&sidecar(&out), command_name(cli), cfg.seed, &cfg)?;
    Ok(Status::check(converged, "pooling or fine-tuning did not converge"))
}

// ------------------------------------------------------------------ select

#[derive(Serialize)]
struct SelectReport {
    primal: ParameterFile,
    sources: Vec<ParameterFile>,
    informative_flags: Vec<bool>,
    dc_iterations: usize,
    converged: bool,
    objective_trace: Vec<f64>,
    steps: Vec<DcStep>,
}

fn select_cmd(cli: &Cli, mut cfg: RunConfig, a: &crate::SelectArgs) -> Result<Status> {
    let (datasets, _) = load_data(&a.data, &mut cfg)?;
    if datasets.len() < 2 {
        bail!("selection needs the target and at least one source");
    }
    let k = datasets.len() - 1;
    let mut sc = match cfg.selection.clone() {
        Some(s) => s,
        None => {
            let missing = |flag: &str| anyhow!("missing {flag}: pass it or set \"selection\" in the config");
            SelectionConfig::new(
                a.lambda_pool.ok_or_else(|| missing("--lambda-pool"))?,
                a.lambda_q.ok_or_else(|| missing("--lambda-q"))?,
                k,
                a.tau.ok_or_else(|| missing("--tau"))?,
                regularizer_of(a.regularizer, None, &datasets[0]),
            )
        }
    };
    if let Some(l) = a.lambda_pool {
        sc.lambda_pool = l;
    }
    if let Some(q) = a.lambda_q {
        sc.lambda_q = vec![q; k];
    }
    if let Some(t) = a.tau {
        sc.tau = t;
    }
    if a.regularizer.is_some() {
        sc.regularizer = regularizer_of(a.regularizer, None, &datasets[0]);
    }
    if sc.lambda_q.len() != k {
        bail!("selection.lambda_q has {} entries for {k} sources", sc.lambda_q.len());
    }
    let fit = dc_truncated(&datasets, &sc, None)?;
    let out = required_out(&a.out, &cfg)?;
    cfg.selection = Some(sc);
    cfg.out = Some(out.clone());
    write_json(
        &out,
        &SelectReport {
            primal: (&fit.primal).into(),
            sources: fit.sources.iter().map(ParameterFile::from).collect(),
            informative_flags: fit.informative_flags.clone(),
            dc_iterations: fit.dc_iterations,
            converged: fit.converged,
            objective_trace: fit.state.objective_trace.clone(),
            steps: fit.steps.clone(),
        },
    )?;
    write_manifest(&sidecar(&out), command_name(cli), cfg.seed, &cfg)?;
    Ok(Status::check(
        fit.converged,
        format!("selection stopped after {} DC iterations without converging", fit.dc_iterations),
    ))
}

// -------------------------------------------------------------- experiment

#[derive(Serialize)]
struct Summary<'a> {
    preset: &'a str,
    scale: Scale,
    seed: u64,
    replications: usize,
    aggregates: &'a [Aggregate],
    failures: &'a [Failure],
    frequencies: Option<Vec<FrequencyRow>>,
    metadata: &'a std::collections::BTreeMap<String, String>,
}

fn experiment_cmd(cli: &Cli, mut cfg: RunConfig, seed: Option<u64>, a: &crate::ExperimentArgs) -> Result<Status> {
    if a.list {
        for p in PRESETS {
            println!("{p}");
        }
        return Ok(Status::ok());
    }
    let mut exp: ExperimentConfig = match (&a.preset, &cfg.experiment) {
        (Some(name), _) => preset(name)?,
        (None, Some(e)) => e.clone(),
        (None, None) => bail!("no experiment: pass --preset or set \"experiment\" in the config"),
    };
    if let Some(s) = seed {
        exp.seed = s;
    }
    if let Some(r) = a.replications {
        exp.replications = r;
    }
    if a.timing {
        exp.settings.timing = true;
    }
    exp.validate()?;
    let jobs = cli.jobs.or(cfg.jobs).unwrap_or(1);
    if jobs == 0 {
        bail!("--jobs must be >= 1");
    }
    let out = required_out(&a.out, &cfg)?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let result = run_experiment(&exp, jobs)?;
    let records_path = out.join("records.csv");
    write_records_csv(BufWriter::new(File::create(&records_path)?), &result.records)?;
    let names: Vec<String> = exp.estimators.iter().map(|e| e.to_string()).collect();
    let sweep = exp.preset.starts_with("table4") || exp.preset.starts_with("fig3");
    write_json(
        &out.join("summary.json"),
        &Summary {
            preset: &result.preset,
            scale: result.scale,
            seed: result.seed,
            replications: result.replications,
            aggregates: &result.aggregates,
            failures: &result.failures,
            frequencies: sweep.then(|| best_frequencies(&result.records, &names)),
            metadata: &result.metadata,
        },
    )?;
    cfg.seed = Some(exp.seed);
    cfg.jobs = Some(jobs);
    cfg.out = Some(out.clone());
    cfg.experiment = Some(exp);
    write_manifest(&out.join("manifest.json"), command_name(cli), cfg.seed, &cfg)?;
    let notes: Vec<String> = result
        .failures
        .iter()
        .map(|f| format!("{} replication {} (seed {}) failed: {}", f.scenario, f.rep, f.seed, f.message))
        .collect();
    Ok(Status {
        converged: notes.is_empty(),
        notes,
    })
}

// ------------------------------------------------------------------ report

#[derive(Serialize)]
struct Report {
    records: usize,
    aggregates: Vec<Aggregate>,
    frequencies: Option<Vec<FrequencyRow>>,
}

fn report_cmd(a: &crate::ReportArgs) -> Result<Status> {
    let mut records: Vec<Record> = Vec::new();
    for path in &a.records {
        let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        records.extend(read_records_csv(f).with_context(|| format!("reading {}", path.display()))?);
    }
    let frequencies = a.frequencies.then(|| {
        let mut names: Vec<String> = Vec::new();
        for r in &records {
            if !names.contains(&r.estimator) {
                names.push(r.estimator.clone());
            }
        }
        best_frequencies(&records, &names)
    });
    let report = Report {
        records: records.len(),
        aggregates: aggregate(&records),
        frequencies,
    };
    match &a.out {
        Some(path) => write_json(path, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(Status::ok())
}
