use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use ttd_core::arima::{difference, sample_acf, select_model, write_diagnostics_csv, ArimaModel, ArimaOrder, SelectOptions};
use ttd_core::carma::{
    estimate_carma, kalman_filter, map_discrete_to_continuous, simulate_carma, CarmaModel, EstimateOptions,
};
use ttd_core::decomposition::{decompose, DecomposeOptions};
use ttd_core::pricing::{
    calibrate_theta, closed_form_ctt_future, mc_price, pde_price_asian_call, AsianCall, CalibrationOptions, Driver,
    Dynamics, MarketMeasure, McOptions, PdeGrid, Quote, QuotePricer, ThetaSchedule,
};
use ttd_core::products::{ContractSpec, DerivativeContract, Family, Settlement};
use ttd_core::series_io::{
    format_timestamp, ingest_csv, load_bundle, load_model, parse_timestamp, save_bundle, save_model,
    write_series_csv, BundleState, IngestOptions, ModelBundle, Provenance, SeriesInfo, TravelTimeSeries,
    SCHEMA_VERSION,
};
use ttd_core::Error;

use crate::output::{emit, per_minute, preamble, to_toml};
use crate::{CalibrateArgs, CalibrationMethod, FitArgs, IngestArgs, PriceArgs, PriceMethod, SimulateArgs};

/// Recent differenced residuals kept for restarting the ARIMA recursion.
const HISTORY_LEN: usize = 32;
const ACF_LAGS: usize = 20;
/// Standard deviations of the terminal law spanned by the CLI's PDE grid.
const PDE_SPAN_SD: f64 = 4.0;

fn read_series(path: &Path, h: f64, path_id: &str, max_gap: f64) -> anyhow::Result<(TravelTimeSeries, usize, usize)> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let opts = IngestOptions {
        path_id: path_id.to_string(),
        h,
        max_gap,
    };
    let report = ingest_csv(file, &opts).with_context(|| format!("reading {}", path.display()))?;
    Ok((report.series, report.rows, report.filled))
}

pub fn cmd_ingest(args: &IngestArgs, command: &str) -> anyhow::Result<()> {
    let (series, rows, filled) = read_series(&args.input, args.h, &args.path_id, args.max_gap)?;
    let out = File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_series_csv(&series, BufWriter::new(out), &preamble(command, None))?;
    println!("rows read: {rows}");
    println!("gaps filled: {filled}");
    println!("samples written: {}", series.len());
    Ok(())
}

fn parse_candidates(text: &str) -> anyhow::Result<Vec<ArimaOrder>> {
    text.split([';', ' '])
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            let parts: Vec<usize> = s
                .split(',')
                .map(|v| v.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| Error::InvalidInput(format!("candidate `{s}` is not p,d,q")))?;
            match parts.as_slice() {
                [p, d, q] => Ok(ArimaOrder::new(*p, *d, *q)),
                _ => Err(Error::InvalidInput(format!("candidate `{s}` is not p,d,q")).into()),
            }
        })
        .collect()
}

/// Start for an order with no closed coefficient map: `α(z) = (z + λ)^p`
/// with `λ = 1/h`, white-noise MA part.
fn binomial_init(p: usize, q: usize, h: f64, sigma: f64) -> anyhow::Result<CarmaModel> {
    let lambda = 1.0 / h;
    let mut alpha = Vec::with_capacity(p);
    let mut binom = 1.0;
    for k in 1..=p {
        binom = binom * (p - k + 1) as f64 / k as f64;
        alpha.push(binom * lambda.powi(k as i32));
    }
    let mut b = vec![1.0];
    b.extend(std::iter::repeat_n(0.0, q));
    Ok(CarmaModel::new(alpha, b, sigma, h)?)
}

pub fn cmd_fit(args: &FitArgs, command: &str) -> anyhow::Result<()> {
    let candidates = parse_candidates(&args.candidates)?;
    let (series, _, _) = read_series(&args.input, args.h, &args.path_id, f64::INFINITY)?;
    let h = series.h();
    let opts = DecomposeOptions {
        daily_only: args.daily_only,
        ..DecomposeOptions::default()
    };
    let dec = decompose(&series, &opts).context("decompose")?;
    let resid = dec.residual.values().to_vec();
    let mut warnings = Vec::new();

    let scale = resid.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let spread = resid.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v)) - resid.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    let level_scale = series.values().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let (arima, table) = if spread <= 1e-10 * level_scale {
        warnings.push(format!(
            "residual is constant (spread {spread:.3e}, max {scale:.3e}); using ARIMA(0,0,0) with a floor variance"
        ));
        (ArimaModel::new(ArimaOrder::new(0, 0, 0), vec![], vec![], f64::MIN_POSITIVE)?, Vec::new())
    } else {
        let selection = select_model(&resid, &candidates, SelectOptions::default()).context("select_model")?;
        warnings.extend(selection.warning.clone());
        for (order, reason) in &selection.failures {
            warnings.push(format!("{order} failed to fit: {reason}"));
        }
        (selection.model, selection.table)
    };

    let diffs = difference(&resid, arima.d).context("difference")?;
    let p_c = args.p_carma.unwrap_or(arima.p);
    let q_c = args.q_carma.unwrap_or(arima.q);
    let mut carma = None;
    let mut carma_state = Vec::new();
    if arima.sigma2 <= f64::MIN_POSITIVE {
        // Nothing stochastic to fit.
    } else if p_c == 0 || p_c <= q_c {
        warnings.push(format!(
            "CARMA({p_c},{q_c}) has p ≤ q; pricing uses Monte Carlo on the discrete {}",
            arima.order()
        ));
    } else {
        let sigma = (arima.sigma2 / h).sqrt();
        let mapped = if p_c == arima.p && p_c <= 2 && arima.d <= 1 {
            map_discrete_to_continuous(&arima, h, q_c, Some(&sample_acf(&diffs, ACF_LAGS)))
                .ok()
                .filter(|m| m.is_stationary())
        } else {
            None
        };
        let init = match mapped {
            Some(m) => m,
            None => binomial_init(p_c, q_c, h, sigma)?,
        };
        let est = estimate_carma(&diffs, p_c, q_c, h, &init, EstimateOptions::default()).context("estimate_carma")?;
        warnings.extend(est.warning.clone());
        let filtered = kalman_filter(&diffs, &est.model, h).context("kalman_filter")?;
        carma_state = filtered.filtered_states.last().cloned().unwrap_or_else(|| vec![0.0; p_c]);
        carma = Some(est.model);
    }

    let history_start = diffs.len().saturating_sub(HISTORY_LEN);
    let bundle = ModelBundle {
        schema_version: SCHEMA_VERSION,
        provenance: Provenance {
            command: command.to_string(),
            seed: None,
        },
        series: SeriesInfo {
            path_id: series.path_id().to_string(),
            start_time: format_timestamp(series.start_time()),
            h,
            n: series.len(),
            start_minute_of_day: series.start_minute_of_day(),
        },
        seasonal_trend: dec.model.clone(),
        discrete_only: carma.is_none(),
        arima,
        carma,
        state: BundleState {
            t0: (series.len() - 1) as f64 * h,
            level: *resid.last().expect("decomposed series is non-empty"),
            carma_state,
            arima_history: diffs[history_start..].to_vec(),
        },
        warnings,
    };
    save_bundle(&bundle, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    let diag = File::create(&args.diagnostics).with_context(|| format!("creating {}", args.diagnostics.display()))?;
    write_diagnostics_csv(&table, BufWriter::new(diag), &preamble(command, None))?;

    println!("selected: {}", bundle.arima.order());
    match &bundle.carma {
        Some(m) => println!(
            "carma: CARMA({},{}) alpha = {:?}, b = {:?}, sigma = {}",
            m.p(),
            m.q(),
            m.alpha(),
            m.b(),
            m.sigma()
        ),
        None => println!("carma: none (discrete Monte Carlo only)"),
    }
    for w in &bundle.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

/// Simulation inputs implied by a bundle, on the series clock (minutes from
/// the first sample).
pub fn bundle_dynamics(bundle: &ModelBundle) -> anyhow::Result<Dynamics> {
    let driver = match &bundle.carma {
        Some(model) => Driver::Carma {
            model: model.clone(),
            integrated: bundle.arima.d == 1,
            state: bundle.state.carma_state.clone(),
            level: bundle.state.level,
        },
        None => Driver::Arima {
            model: bundle.arima.clone(),
            history: bundle.state.arima_history.clone(),
            level: bundle.state.level,
        },
    };
    Ok(Dynamics::new(
        bundle.seasonal_trend.clone(),
        bundle.series.h,
        bundle.series.start_minute_of_day,
        driver,
    )?)
}

fn clock_start(bundle: &ModelBundle) -> anyhow::Result<chrono::NaiveDateTime> {
    parse_timestamp(&bundle.series.start_time)
        .ok_or_else(|| Error::Invariant(format!("bad start_time `{}` in bundle", bundle.series.start_time)).into())
}

fn load_contract(path: &Path, bundle: &ModelBundle) -> anyhow::Result<(ContractSpec, DerivativeContract)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let spec = ContractSpec::from_toml_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let contract = spec.resolve(clock_start(bundle)?)?;
    Ok((spec, contract))
}

#[derive(Serialize)]
struct RateReport {
    annual: f64,
    per_minute: f64,
}

#[derive(Serialize)]
struct PriceReport {
    schema_version: u32,
    command: String,
    /// Recorded for every method; only Monte Carlo consumes it.
    seed: u64,
    method: String,
    price: f64,
    std_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_paths: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<String>,
    valuation_time: String,
    warnings: Vec<String>,
    rate: RateReport,
    measure: ThetaSchedule,
    contract: ContractSpec,
}

/// The Asian call as a PDE problem: for an integrated CAR(1) driver the
/// scaled state `x/h`, the residual level and the accrued integral form
/// the `(x, y, z)` triple, and the seasonal integral shifts the strike.
fn pde_problem(
    contract: &DerivativeContract,
    dynamics: &Dynamics,
    measure: &MarketMeasure,
    t0: f64,
) -> anyhow::Result<AsianCall> {
    if contract.family() != Family::CttCall || contract.settlement() != Settlement::Continuous {
        return Err(Error::Unsupported(format!(
            "the PDE method prices continuously settled CTT calls only, not {:?} ({:?})",
            contract.family(),
            contract.settlement()
        ))
        .into());
    }
    if !measure.theta.is_constant() {
        return Err(Error::Unsupported("the PDE method needs a constant theta".into()).into());
    }
    let Driver::Carma {
        model,
        integrated: true,
        state,
        level,
    } = &dynamics.driver
    else {
        return Err(Error::Unsupported("the PDE method needs a CAR(1) model of the differenced series".into()).into());
    };
    if model.p() != 1 || model.q() != 0 {
        return Err(Error::Unsupported(format!(
            "the PDE method covers CAR(1) only, bundle holds CARMA({},{})",
            model.p(),
            model.q()
        ))
        .into());
    }
    let (t1, t2) = contract.window().expect("CTT contracts have windows");
    if t1 < t0 {
        return Err(Error::InvalidInput("contract window starts before the valuation time".into()).into());
    }
    let h = dynamics.h;
    Ok(AsianCall {
        a: model.alpha()[0],
        sigma: model.sigma() / h,
        theta: measure.theta.values()[0],
        r: measure.r,
        strike: contract.strike().expect("options have strikes") - dynamics.seasonal_integral(t1, t2),
        spot: [state[0] / h, *level, 0.0],
        delay: t1 - t0,
        duration: t2 - t1,
    })
}

pub fn cmd_price(args: &PriceArgs, command: &str) -> anyhow::Result<()> {
    let bundle = load_bundle(&args.bundle).with_context(|| format!("loading {}", args.bundle.display()))?;
    let (spec, contract) = load_contract(&args.contract, &bundle)?;
    let dynamics = bundle_dynamics(&bundle)?;
    let r = per_minute(args.rate);
    let measure = match &args.measure {
        Some(path) => {
            let mut m: MarketMeasure = load_model(path).with_context(|| format!("loading {}", path.display()))?;
            m.r = r;
            m
        }
        None => MarketMeasure::constant(args.theta, r)?,
    };
    let t0 = bundle.state.t0;
    let mut warnings = Vec::new();
    let quote = match args.method {
        PriceMethod::Mc => {
            let opts = McOptions {
                n_paths: args.paths,
                seed: args.seed,
                substeps: args.substeps,
            };
            mc_price(&contract, &dynamics, &measure, t0, opts)?
        }
        PriceMethod::Closed => closed_form_ctt_future(&contract, &dynamics, &measure, t0)?,
        PriceMethod::Pde => {
            let problem = pde_problem(&contract, &dynamics, &measure, t0)?;
            let grid = PdeGrid::covering(&problem, [args.grid; 3], PDE_SPAN_SD)?;
            let outcome = pde_price_asian_call(&problem, &grid)?;
            warnings.extend(outcome.warnings.iter().cloned());
            let mut q = outcome.quote(r, problem.theta);
            q.price *= contract.leverage();
            q
        }
    };
    let start = clock_start(&bundle)?;
    let report = PriceReport {
        schema_version: SCHEMA_VERSION,
        command: command.to_string(),
        seed: args.seed,
        method: quote.method.to_string(),
        price: quote.price,
        std_error: quote.std_error,
        n_paths: quote.n_paths,
        grid: quote.grid.clone(),
        valuation_time: format_timestamp(start + chrono::TimeDelta::milliseconds((t0 * 60_000.0).round() as i64)),
        warnings,
        rate: RateReport {
            annual: args.rate,
            per_minute: r,
        },
        measure: measure.theta.clone(),
        contract: spec,
    };
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    emit(args.out.as_deref(), &to_toml(&report)?)
}

/// One quote row: the contract file fields plus the quoted price.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuoteRow {
    family: Family,
    #[serde(default)]
    exercise: Option<String>,
    #[serde(default)]
    window_start: Option<String>,
    #[serde(default)]
    window_end: Option<String>,
    #[serde(default)]
    threshold: Option<f64>,
    #[serde(default)]
    strike: Option<f64>,
    leverage: f64,
    #[serde(default)]
    settlement: Option<Settlement>,
    price: f64,
}

impl QuoteRow {
    fn spec(&self) -> ContractSpec {
        ContractSpec {
            family: self.family,
            exercise: self.exercise.clone(),
            window_start: self.window_start.clone(),
            window_end: self.window_end.clone(),
            threshold: self.threshold,
            strike: self.strike,
            leverage: self.leverage,
            settlement: self.settlement.unwrap_or_default(),
        }
    }
}

fn read_quotes(path: &Path, bundle: &ModelBundle) -> anyhow::Result<Vec<Quote>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);
    let start = clock_start(bundle)?;
    let mut quotes = Vec::new();
    for record in reader.deserialize::<QuoteRow>() {
        let row = record.map_err(|e| Error::Row {
            row: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let contract = row
            .spec()
            .resolve(start)
            .with_context(|| format!("quote {} ({:?})", quotes.len() + 1, row.family))?;
        quotes.push(Quote {
            contract,
            price: row.price,
        });
    }
    if quotes.is_empty() {
        return Err(Error::Empty(format!("no quotes in {}", path.display())).into());
    }
    Ok(quotes)
}

#[derive(Serialize)]
struct QuoteFit {
    index: usize,
    family: String,
    market: f64,
    model: f64,
    error: f64,
}

#[derive(Serialize)]
struct CalibrationReport {
    schema_version: u32,
    command: String,
    /// Recorded for every method; only Monte Carlo consumes it.
    seed: u64,
    method: String,
    residual: f64,
    rms_relative_error: f64,
    evaluations: usize,
    warnings: Vec<String>,
    rate: RateReport,
    theta: ThetaSchedule,
    quotes: Vec<QuoteFit>,
}

pub fn cmd_calibrate(args: &CalibrateArgs, command: &str) -> anyhow::Result<()> {
    let bundle = load_bundle(&args.bundle).with_context(|| format!("loading {}", args.bundle.display()))?;
    let quotes = read_quotes(&args.quotes, &bundle)?;
    let dynamics = bundle_dynamics(&bundle)?;
    let r = per_minute(args.rate);
    let t0 = bundle.state.t0;
    let pricer = match args.method {
        CalibrationMethod::Mc => QuotePricer::Mc(McOptions {
            n_paths: args.paths,
            seed: args.seed,
            substeps: 1,
        }),
        CalibrationMethod::Closed => QuotePricer::ClosedForm,
    };

    // Every quote must be priceable before the search starts.
    let flat = MarketMeasure::physical(r)?;
    for (i, q) in quotes.iter().enumerate() {
        let check = match pricer {
            QuotePricer::ClosedForm => closed_form_ctt_future(&q.contract, &dynamics, &flat, t0).map(|_| ()),
            QuotePricer::Mc(_) => {
                if q.contract.start_time() < t0 {
                    Err(Error::InvalidInput("contract starts before the valuation time".into()))
                } else {
                    Ok(())
                }
            }
        };
        check.with_context(|| format!("quote {} ({:?}) cannot be priced", i + 1, q.contract.family()))?;
    }

    let start = clock_start(&bundle)?;
    let mut breaks = Vec::new();
    for b in &args.breaks {
        let t = parse_timestamp(b).ok_or_else(|| Error::InvalidInput(format!("cannot parse break `{b}`")))?;
        breaks.push(t.signed_duration_since(start).num_milliseconds() as f64 / 60_000.0);
    }
    let mut opts = CalibrationOptions::new(pricer);
    opts.breaks = breaks;
    let cal = calibrate_theta(&quotes, &dynamics, r, t0, &opts).context("calibrate_theta")?;

    let report = CalibrationReport {
        schema_version: SCHEMA_VERSION,
        command: command.to_string(),
        seed: args.seed,
        method: match args.method {
            CalibrationMethod::Mc => "mc".into(),
            CalibrationMethod::Closed => "closed_form".into(),
        },
        residual: cal.residual,
        rms_relative_error: cal.rms_relative_error,
        evaluations: cal.evaluations,
        warnings: cal.warning.iter().cloned().collect(),
        rate: RateReport {
            annual: args.rate,
            per_minute: r,
        },
        theta: cal.theta.clone(),
        quotes: quotes
            .iter()
            .zip(&cal.model_prices)
            .enumerate()
            .map(|(i, (q, m))| QuoteFit {
                index: i + 1,
                family: format!("{:?}", q.contract.family()),
                market: q.price,
                model: *m,
                error: m - q.price,
            })
            .collect(),
    };
    if let Some(path) = &args.measure_out {
        save_model(&MarketMeasure::new(cal.theta.clone(), r)?, path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    emit(args.out.as_deref(), &to_toml(&report)?)
}

#[derive(Serialize)]
struct SimulationSummary {
    schema_version: u32,
    command: String,
    seed: u64,
    model: String,
    n: usize,
    h: f64,
    mean: f64,
    variance: f64,
    /// Sample autocorrelations at lags 1..=10.
    acf: Vec<f64>,
}

pub fn cmd_simulate(args: &SimulateArgs, command: &str) -> anyhow::Result<()> {
    let bundle = load_bundle(&args.bundle).with_context(|| format!("loading {}", args.bundle.display()))?;
    if args.n < 2 {
        bail!(Error::InvalidInput("simulate needs n ≥ 2".into()));
    }
    let h = bundle.series.h;
    let head = preamble(command, Some(args.seed));
    let out = BufWriter::new(File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?);
    let (values, label) = match &bundle.carma {
        Some(model) => {
            let path = simulate_carma(model, h, args.n, args.seed, Some(&bundle.state.carma_state))?;
            path.write_csv(out, &head)?;
            (path.values, format!("CARMA({},{})", model.p(), model.q()))
        }
        None => {
            let values = ttd_core::arima::simulate_arima_from(&bundle.arima, args.n, args.seed, &bundle.state.arima_history);
            write_values(out, &head, h, &values)?;
            (values, bundle.arima.order().to_string())
        }
    };
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let acf = sample_acf(&values, 10).into_iter().skip(1).collect();
    let summary = SimulationSummary {
        schema_version: SCHEMA_VERSION,
        command: command.to_string(),
        seed: args.seed,
        model: label,
        n: values.len(),
        h,
        mean,
        variance,
        acf,
    };
    let text = to_toml(&summary)?;
    if let Some(path) = &args.summary {
        emit(Some(path), &text)?;
    }
    emit(None, &text)
}

fn write_values<W: std::io::Write>(mut out: W, head: &[String], h: f64, values: &[f64]) -> anyhow::Result<()> {
    for line in head {
        writeln!(out, "# {line}")?;
    }
    writeln!(out, "t,value")?;
    for (k, v) in values.iter().enumerate() {
        writeln!(out, "{},{v}", k as f64 * h)?;
    }
    Ok(())
}
