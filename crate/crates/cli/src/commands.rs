use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use cdph_core::experiments::{
    draw_counts, run_study, study_data, BivPoissonSpec, FitReport, PoissonLindleySpec, StudySource,
    STUDY_DIMS,
};
use cdph_core::{
    em_fit, max_dph, min_dph, mixture, sum_dph, sum_of_vectors, CdphParams, CountDataset,
    DphParams, EmConfig, Shift,
};
use clap::ValueEnum;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::args::{
    Cli, Command, ConstructArgs, Construction, EvalArgs, EvalQuery, FitArgs, ReproduceArgs,
    SimulateArgs, SimulateSource, Study,
};
use crate::data::{read_pairs, read_table};
use crate::error::{CliError, CliResult};
use crate::model_file::{load_cdph, load_model, Model, ModelFile, Provenance};

pub fn run(cli: Cli, stdout: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Fit(args) => fit(&args, stdout),
        Command::Eval(args) => eval(&args, stdout),
        Command::Simulate(args) => simulate(&args, stdout),
        Command::Construct(args) => construct(&args, stdout),
        Command::Reproduce(args) => reproduce(&args, stdout),
    }
}

fn parse_shift(v: &[f64]) -> CliResult<Shift> {
    Shift::new(v[0], v[1], v[2], v[3]).map_err(|e| CliError::Usage(e.to_string()))
}

fn parse_dims(v: &[usize]) -> CliResult<(usize, usize)> {
    if v[0] == 0 || v[1] == 0 {
        return Err(CliError::Usage("--dims must be at least 1 1".into()));
    }
    Ok((v[0], v[1]))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn emit(output: Option<&PathBuf>, text: &str, stdout: &mut dyn Write) -> CliResult<()> {
    match output {
        Some(path) => write_file(path, text),
        None => match stdout.write_all(text.as_bytes()) {
            // a closed pipe (e.g. `| head`) is not an error
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
            other => other.map_err(|e| CliError::io("<stdout>", e)),
        },
    }
}

fn csv_text<T: Serialize>(rows: impl IntoIterator<Item = T>) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row).expect("plain records serialize");
    }
    String::from_utf8(writer.into_inner().expect("in-memory writer")).expect("csv output is utf-8")
}

#[derive(Serialize)]
struct TraceRow {
    iteration: usize,
    log_likelihood: f64,
}

fn trace_csv(trace: &[f64]) -> String {
    csv_text(trace.iter().enumerate().map(|(i, &ll)| TraceRow {
        iteration: i + 1,
        log_likelihood: ll,
    }))
}

#[derive(Serialize)]
struct DataRow {
    n1: f64,
    n2: f64,
    weight: u64,
}

fn data_csv(data: &CountDataset) -> String {
    let shift = data.shift();
    csv_text(data.pairs().iter().map(|p| DataRow {
        n1: shift.to_observed(p.n1, 1),
        n2: shift.to_observed(p.n2, 2),
        weight: p.weight,
    }))
}

fn fit(args: &FitArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let shift = parse_shift(&args.shift)?;
    let (e, s) = parse_dims(&args.dims)?;
    if args.iters == 0 {
        return Err(CliError::Usage("--iters must be at least 1".into()));
    }
    let data = if args.table {
        read_table(&args.input, shift)?
    } else {
        read_pairs(&args.input, shift)?
    };
    let mut config = EmConfig::new(e, s, args.seed);
    config.max_iters = args.iters;
    let fit = em_fit(&data, &config)?;
    create_dir(&args.output_dir)?;
    let provenance = Provenance {
        source: "fit".into(),
        seed: Some(args.seed),
        iterations: Some(fit.trace.len()),
        log_likelihood: Some(fit.log_lik()),
    };
    ModelFile::from_cdph(&fit.params, provenance).save(&args.output_dir.join("model.json"))?;
    write_file(&args.output_dir.join("trace.csv"), &trace_csv(&fit.trace))?;
    writeln!(stdout, "log-likelihood {}", fit.log_lik()).map_err(|e| CliError::io("<stdout>", e))
}

fn arity<T: Copy>(values: &[T], want: usize, what: &str) -> CliResult<Vec<T>> {
    if values.len() != want {
        return Err(CliError::Usage(format!(
            "{what} takes {want} argument(s) for this model, got {}",
            values.len()
        )));
    }
    Ok(values.to_vec())
}

fn step_arg(x: f64) -> CliResult<u64> {
    if x.fract() != 0.0 || x < 0.0 {
        return Err(CliError::Usage(format!(
            "{x} is not a non-negative integer step"
        )));
    }
    Ok(x as u64)
}

fn bivariate_only(query: &str) -> CliError {
    CliError::Usage(format!("{query} needs a bivariate (cdph) model"))
}

#[derive(Serialize)]
struct GridRow {
    tau1: u64,
    tau2: u64,
    x1: f64,
    x2: f64,
    pmf: f64,
}

#[derive(Serialize)]
struct DphRow {
    tau: u64,
    pmf: f64,
}

fn eval_cdph(m: &CdphParams, query: &EvalQuery, trunc_tol: f64) -> CliResult<String> {
    let value = match query {
        EvalQuery::Pmf { values } => {
            let v = arity(values, 2, "pmf")?;
            m.shifted_pmf(v[0], v[1])?
        }
        EvalQuery::Pgf { values } => {
            let v = arity(values, 2, "pgf")?;
            m.joint_pgf(v[0], v[1])?
        }
        EvalQuery::Moment { orders } => {
            let r = arity(orders, 2, "moment")?;
            m.cross_moment(r[0], r[1])?
        }
        EvalQuery::Factorial { orders } => {
            let n = arity(orders, 3, "factorial")?;
            m.factorial_moment_latent(n[0], n[1], n[2])?
        }
        EvalQuery::Min { step } => min_dph(m)?.pmf(*step)?,
        EvalQuery::Max { step } => max_dph(m)?.pmf(*step)?,
        EvalQuery::Sum { step } => sum_dph(m)?.pmf(*step)?,
        EvalQuery::Marginal { coord, step } => {
            if *coord != 1 && *coord != 2 {
                return Err(CliError::Usage(format!(
                    "marginal coordinate must be 1 or 2, got {coord}"
                )));
            }
            m.marginal(*coord)?.pmf(*step)?
        }
        EvalQuery::Grid => {
            let (l1, l2) = m.truncation(trunc_tol)?;
            let shift = m.shift();
            return Ok(csv_text(m.pmf_table(l1, l2).iter().map(|(a, b, f)| {
                GridRow {
                    tau1: a,
                    tau2: b,
                    x1: shift.to_observed(a, 1),
                    x2: shift.to_observed(b, 2),
                    pmf: f,
                }
            })));
        }
    };
    Ok(format!("{value}\n"))
}

fn eval_dph(d: &DphParams, query: &EvalQuery, trunc_tol: f64) -> CliResult<String> {
    let value = match query {
        EvalQuery::Pmf { values } => d.pmf(step_arg(arity(values, 1, "pmf")?[0])?)?,
        EvalQuery::Pgf { values } => d.pgf(arity(values, 1, "pgf")?[0])?,
        EvalQuery::Factorial { orders } => d.factorial_moment(arity(orders, 1, "factorial")?[0])?,
        EvalQuery::Grid => {
            let len = d.truncation_level(trunc_tol)?.max(1) as usize;
            return Ok(csv_text(d.pmf_table(len).into_iter().enumerate().map(
                |(i, pmf)| DphRow {
                    tau: i as u64 + 1,
                    pmf,
                },
            )));
        }
        EvalQuery::Moment { .. } => return Err(bivariate_only("moment")),
        EvalQuery::Min { .. } => return Err(bivariate_only("min")),
        EvalQuery::Max { .. } => return Err(bivariate_only("max")),
        EvalQuery::Sum { .. } => return Err(bivariate_only("sum")),
        EvalQuery::Marginal { .. } => return Err(bivariate_only("marginal")),
    };
    Ok(format!("{value}\n"))
}

fn eval(args: &EvalArgs, stdout: &mut dyn Write) -> CliResult<()> {
    if !(args.trunc_tol > 0.0 && args.trunc_tol < 1.0) {
        return Err(CliError::Usage("--trunc-tol must lie in (0, 1)".into()));
    }
    let text = match load_model(&args.input)? {
        Model::Cdph(m) => eval_cdph(&m, &args.query, args.trunc_tol)?,
        Model::Dph(d) => eval_dph(&d, &args.query, args.trunc_tol)?,
    };
    emit(args.output.as_ref(), &text, stdout)
}

#[derive(Serialize)]
struct CountRow {
    n1: u64,
    n2: u64,
}

#[derive(Serialize)]
struct ObservedRow {
    n1: f64,
    n2: f64,
}

#[derive(Serialize)]
struct LatentRow {
    tau1: u64,
    tau2: u64,
    m: u64,
    z1: u64,
    z2: u64,
}

#[derive(Serialize)]
struct StepRow {
    tau: u64,
}

fn simulate(args: &SimulateArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let (SimulateSource::BivPoisson { common, .. }
    | SimulateSource::PoissonLindley { common, .. }
    | SimulateSource::Model { common, .. }) = &args.source;
    if common.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let usage = |e: cdph_core::Error| CliError::Usage(e.to_string());
    let (text, common) = match &args.source {
        SimulateSource::BivPoisson {
            lambda_n,
            lambda_z,
            common,
        } => {
            let spec = BivPoissonSpec::from_marginals(lambda_n[0], lambda_n[1], *lambda_z)
                .map_err(usage)?;
            let rows = draw_counts(&spec, common.count, common.seed);
            (
                csv_text(rows.into_iter().map(|(n1, n2)| CountRow { n1, n2 })),
                common,
            )
        }
        SimulateSource::PoissonLindley {
            theta,
            rates,
            common,
        } => {
            let spec = PoissonLindleySpec::new(*theta, rates[0], rates[1]).map_err(usage)?;
            let rows = draw_counts(&spec, common.count, common.seed);
            (
                csv_text(rows.into_iter().map(|(n1, n2)| CountRow { n1, n2 })),
                common,
            )
        }
        SimulateSource::Model {
            input,
            latent,
            common,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(common.seed);
            let text = match load_model(input)? {
                Model::Cdph(m) => {
                    let sampler = m.sampler()?;
                    let draws = (0..common.count).map(|_| sampler.sample(&mut rng));
                    if *latent {
                        csv_text(draws.map(|d| LatentRow {
                            tau1: d.tau1,
                            tau2: d.tau2,
                            m: d.latent.m,
                            z1: d.latent.z1,
                            z2: d.latent.z2,
                        }))
                    } else {
                        let shift = m.shift();
                        csv_text(draws.map(|d| ObservedRow {
                            n1: shift.to_observed(d.tau1, 1),
                            n2: shift.to_observed(d.tau2, 2),
                        }))
                    }
                }
                Model::Dph(d) => {
                    if *latent {
                        return Err(bivariate_only("--latent"));
                    }
                    let sampler = d.sampler()?;
                    csv_text((0..common.count).map(|_| StepRow {
                        tau: sampler.sample(&mut rng),
                    }))
                }
            };
            (text, common)
        }
    };
    emit(common.output.as_ref(), &text, stdout)
}

fn construct(args: &ConstructArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let expect_inputs = |n: usize| -> CliResult<()> {
        if args.input.len() != n {
            return Err(CliError::Usage(format!(
                "{:?} takes {n} input model(s), got {}",
                args.operation,
                args.input.len()
            )));
        }
        Ok(())
    };
    if args.operation != Construction::Mixture && !args.weights.is_empty() {
        return Err(CliError::Usage("--weights only applies to mixture".into()));
    }
    let provenance = Provenance {
        source: format!("construct {:?}", args.operation).to_lowercase(),
        ..Provenance::default()
    };
    let file = match args.operation {
        Construction::Min | Construction::Max | Construction::Sum => {
            expect_inputs(1)?;
            let m = load_cdph(&args.input[0])?;
            let d = match args.operation {
                Construction::Min => min_dph(&m)?,
                Construction::Max => max_dph(&m)?,
                _ => sum_dph(&m)?,
            };
            ModelFile::from_dph(&d, provenance)
        }
        Construction::Mixture => {
            if args.weights.len() != args.input.len() {
                return Err(CliError::Usage(format!(
                    "mixture needs one weight per input: {} weights for {} inputs",
                    args.weights.len(),
                    args.input.len()
                )));
            }
            let components = args
                .input
                .iter()
                .zip(&args.weights)
                .map(|(path, &w)| Ok((w, load_cdph(path)?)))
                .collect::<CliResult<Vec<_>>>()?;
            let m = mixture(&components).map_err(|e| CliError::Usage(e.to_string()))?;
            ModelFile::from_cdph(&m, provenance)
        }
        Construction::Vecsum => {
            expect_inputs(2)?;
            let a = load_cdph(&args.input[0])?;
            let b = load_cdph(&args.input[1])?;
            let m = sum_of_vectors(&a, &b).map_err(|e| CliError::Usage(e.to_string()))?;
            ModelFile::from_cdph(&m, provenance)
        }
    };
    file.save(&args.output)?;
    let dims = match &file.body {
        crate::model_file::ModelBody::Cdph { dims, .. } => format!("cdph {} {}", dims[0], dims[1]),
        crate::model_file::ModelBody::Dph { dim, .. } => format!("dph {dim}"),
    };
    writeln!(stdout, "{dims}").map_err(|e| CliError::io("<stdout>", e))
}

#[derive(Serialize)]
struct DimsSummary {
    dims: [usize; 2],
    initial_log_likelihood: f64,
    log_likelihood: f64,
    init_retries: usize,
    tv_distance: f64,
    fitted_mass_outside: f64,
    window: [u64; 2],
}

#[derive(Serialize)]
struct StudySummary {
    study: String,
    source: StudySource,
    seed: u64,
    iterations: usize,
    observations: u64,
    shift: Shift,
    fits: Vec<DimsSummary>,
}

fn write_report(dir: &Path, report: &FitReport) -> CliResult<()> {
    write_file(&dir.join("grid.csv"), &csv_text(&report.grid))?;
    write_file(&dir.join("marginal_1.csv"), &csv_text(&report.marginals[0]))?;
    write_file(&dir.join("marginal_2.csv"), &csv_text(&report.marginals[1]))?;
    write_file(
        &dir.join("common_shock.csv"),
        &csv_text(&report.common_shock),
    )
}

fn reproduce(args: &ReproduceArgs, stdout: &mut dyn Write) -> CliResult<()> {
    if args.iters == 0 {
        return Err(CliError::Usage("--iters must be at least 1".into()));
    }
    let usage = |e: cdph_core::Error| CliError::Usage(e.to_string());
    let source = match args.study {
        Study::Poisson1 => StudySource::Poisson(BivPoissonSpec::study(1.0).map_err(usage)?),
        Study::Poisson2 => StudySource::Poisson(BivPoissonSpec::study(2.0).map_err(usage)?),
        Study::Poisson3 => StudySource::Poisson(BivPoissonSpec::study(3.0).map_err(usage)?),
        Study::Lindley => StudySource::Lindley(PoissonLindleySpec::study()),
        Study::Userdata => StudySource::Data,
    };
    let data = match (&source, &args.input) {
        (StudySource::Data, Some(path)) => read_table(path, parse_shift(&args.shift)?)?,
        (StudySource::Data, None) => {
            return Err(CliError::Usage(
                "userdata needs --input with a frequency table".into(),
            ))
        }
        (_, Some(_)) => {
            return Err(CliError::Usage("--input only applies to userdata".into()));
        }
        (_, None) => {
            if args.draws == 0 {
                return Err(CliError::Usage("--draws must be at least 1".into()));
            }
            study_data(&source, args.draws, args.seed)?
        }
    };
    let study = run_study(data, &STUDY_DIMS, args.iters, args.seed)?;

    create_dir(&args.output_dir)?;
    write_file(&args.output_dir.join("data.csv"), &data_csv(&study.data))?;
    let mut fits = Vec::new();
    for result in &study.results {
        let (e, s) = result.dims;
        let dir = args.output_dir.join(format!("dims_{e}_{s}"));
        create_dir(&dir)?;
        let provenance = Provenance {
            source: "reproduce".into(),
            seed: Some(args.seed),
            iterations: Some(result.fit.trace.len()),
            log_likelihood: Some(result.fit.log_lik()),
        };
        ModelFile::from_cdph(&result.fit.params, provenance).save(&dir.join("model.json"))?;
        write_file(&dir.join("trace.csv"), &trace_csv(&result.fit.trace))?;
        write_report(&dir, &result.report)?;
        fits.push(DimsSummary {
            dims: [e, s],
            initial_log_likelihood: result.fit.initial_log_lik,
            log_likelihood: result.fit.log_lik(),
            init_retries: result.fit.init_retries,
            tv_distance: result.report.tv_distance,
            fitted_mass_outside: result.report.fitted_mass_outside,
            window: [result.report.window.0, result.report.window.1],
        });
        writeln!(
            stdout,
            "dims ({e}, {s}): log-likelihood {} tv {}",
            result.fit.log_lik(),
            result.report.tv_distance
        )
        .map_err(|e| CliError::io("<stdout>", e))?;
    }
    let summary = StudySummary {
        study: args
            .study
            .to_possible_value()
            .map_or_else(String::new, |v| v.get_name().to_string()),
        source,
        seed: args.seed,
        iterations: args.iters,
        observations: study.data.total_weight(),
        shift: study.data.shift(),
        fits,
    };
    let mut json = serde_json::to_string_pretty(&summary)
        .map_err(|e| CliError::Numeric(format!("summary not representable: {e}")))?;
    json.push('\n');
    write_file(&args.output_dir.join("summary.json"), &json)
}
