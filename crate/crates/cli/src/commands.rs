use std::fs::File;
use std::path::{Path, PathBuf};

use riskquant_core::config::SolverConfig;
use riskquant_core::credit::{
    exact_drc, exact_loss_distribution, mc_quantile_vs_exact, simulate_drc, tail_window, CreditPortfolio,
    LossScenarioSet,
};
use riskquant_core::distribution::{load_pnl, EmpiricalDistribution};
use riskquant_core::error::Result as CoreResult;
use riskquant_core::measures::{risk_report, RiskMeasureReport};
use riskquant_core::ot::{quantize_via_ot_detailed, OtQuantization, TransportPlan};
use riskquant_core::quantize2::solve_two_point;
use riskquant_core::quantize3::{
    criticality_check, solve_three_point, solve_three_point_constrained_with, solve_three_point_de, Method,
    Quantizer3,
};

use crate::args::{Cli, Command, DrcArgs, MeasureArgs, QuantizeArgs, SeriesArgs};
use crate::config::*;
use crate::report::*;
use crate::{emit, exit_code, to_json, Failure, EXIT_NOT_CONVERGED};

/// What a command reports back to `main` after writing its output.
#[derive(Debug, Default)]
pub struct Outcome {
    pub code: i32,
    /// Per-method failures and non-convergence notes, for stderr.
    pub warnings: Vec<String>,
}

impl Outcome {
    fn note(&mut self, code: i32, message: String) {
        self.code = self.code.max(code);
        self.warnings.push(message);
    }
}

pub fn run(cli: Cli) -> Result<Outcome, Failure> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Measure(a) => measure(a, &file),
        Command::Quantize(a) => quantize(a, &file),
        Command::Drc { mode, args } => drc(mode, args, &file),
        Command::ReportSeries(a) => series(a, &file),
    }
}

fn load(path: &Path, column: Option<&str>, convention: Convention) -> Result<EmpiricalDistribution, Failure> {
    let f = File::open(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    load_pnl(f, column, convention.into()).map_err(|e| Failure::from(e).in_file(path))
}

fn csv_bytes<F>(fill: F) -> Result<Vec<u8>, Failure>
where
    F: FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> csv::Result<()>,
{
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        fill(&mut w).map_err(|e| Failure::input(e.to_string()))?;
        w.flush().map_err(|e| Failure::input(e.to_string()))?;
    }
    Ok(buf)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn measure(a: MeasureArgs, file: &FileConfig) -> Result<Outcome, Failure> {
    let cfg = MeasureConfig {
        input: check_file(&a.input.input)?,
        column: a.input.column.or_else(|| file.column.clone()),
        convention: a.input.convention.or(file.convention).unwrap_or_default(),
        alpha: check_alpha(a.alpha.or(file.alpha).unwrap_or(DEFAULT_ALPHA))?,
        es_alpha: a.es_alpha.or(file.es_alpha).map(check_alpha).transpose()?,
        horizon: a.horizon.or(file.horizon).unwrap_or(1),
    };
    let dist = load(&cfg.input, cfg.column.as_deref(), cfg.convention)?;
    let measures = risk_report(&dist, cfg.alpha, cfg.es_alpha, cfg.horizon)?;
    let bytes = match a.output.format.or(file.format).unwrap_or_default() {
        Format::Json => to_json(&MeasureReport { config: cfg, measures })?.into_bytes(),
        Format::Csv => csv_bytes(|w| {
            w.write_record([
                "var", "es", "worst_case", "alpha", "es_alpha", "horizon_days", "var_horizon", "es_horizon",
                "sample_size",
            ])?;
            let m = &measures;
            w.write_record([
                m.var.to_string(),
                m.es.to_string(),
                m.worst_case.to_string(),
                m.alpha.to_string(),
                opt(m.es_alpha),
                m.horizon_days.to_string(),
                m.var_horizon.to_string(),
                m.es_horizon.to_string(),
                m.sample_size.to_string(),
            ])
        })?,
    };
    emit(a.output.output.as_deref(), &bytes)?;
    Ok(Outcome::default())
}

fn core_method(m: MethodChoice) -> Method {
    match m {
        MethodChoice::FixedPoint | MethodChoice::All => Method::FixedPoint,
        MethodChoice::De => Method::De,
        MethodChoice::Ot => Method::Ot,
    }
}

/// Runs one solver; OT also returns its diagnostics and plan.
fn solve(
    dist: &EmpiricalDistribution,
    method: MethodChoice,
    floor: Option<f64>,
    cfg: &SolverConfig,
) -> CoreResult<(Quantizer3, Option<OtQuantization>)> {
    match (method, floor) {
        (MethodChoice::Ot, _) => quantize_via_ot_detailed(dist, floor, cfg).map(|o| (o.quantizer.clone(), Some(o))),
        (m, Some(f)) => solve_three_point_constrained_with(dist, f, core_method(m), cfg).map(|q| (q, None)),
        (MethodChoice::De, None) => solve_three_point_de(dist, cfg).map(|q| (q, None)),
        (_, None) => solve_three_point(dist, cfg).map(|q| (q, None)),
    }
}

fn label(method: MethodChoice, constrained: bool) -> String {
    let name = serde_json::to_value(method)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default();
    if constrained {
        format!("{name}-constrained")
    } else {
        name
    }
}

fn comparison_table(runs: &[MethodRun], m: &RiskMeasureReport) -> ComparisonTable {
    let field = |f: &dyn Fn(&Quantizer3) -> f64| -> Vec<Option<f64>> {
        runs.iter().map(|r| r.quantizer.as_ref().map(f)).collect()
    };
    let constant = |v: f64| vec![Some(v); runs.len()];
    let rows = vec![
        ("m1", field(&|q| q.m1)),
        ("m2", field(&|q| q.m2)),
        ("p0", field(&|q| q.p0)),
        ("p1", field(&|q| q.p1)),
        ("p2", field(&|q| q.p2)),
        ("var", constant(m.var)),
        ("es", constant(m.es)),
        ("worst_case", constant(m.worst_case)),
    ];
    ComparisonTable {
        columns: runs.iter().map(|r| r.label.clone()).collect(),
        rows: rows
            .into_iter()
            .map(|(q, values)| TableRow {
                quantity: q.to_owned(),
                values,
            })
            .collect(),
    }
}

fn write_histogram(path: &Path, dist: &EmpiricalDistribution, bins: usize) -> Result<(), Failure> {
    if bins == 0 {
        return Err(Failure::input("--bins must be positive"));
    }
    let x = dist.clamp_nonnegative();
    let top = x.max();
    let width = if top > 0.0 { top / bins as f64 } else { 1.0 };
    let mut counts = vec![0u64; bins];
    let mut mass = vec![0.0; bins];
    for a in x.atoms() {
        let b = ((a.value / width) as usize).min(bins - 1);
        counts[b] += a.count;
        mass[b] += a.weight;
    }
    let bytes = csv_bytes(|w| {
        w.write_record(["bin_lower", "bin_upper", "count", "mass"])?;
        for b in 0..bins {
            w.write_record([
                (b as f64 * width).to_string(),
                ((b + 1) as f64 * width).to_string(),
                counts[b].to_string(),
                mass[b].to_string(),
            ])?;
        }
        Ok(())
    })?;
    emit(Some(path), &bytes)
}

fn write_plan(path: &Path, plan: &TransportPlan) -> Result<(), Failure> {
    let mut buf = Vec::new();
    plan.write_csv(&mut buf)?;
    emit(Some(path), &buf)
}

fn quantize(a: QuantizeArgs, file: &FileConfig) -> Result<Outcome, Failure> {
    let cfg = QuantizeConfig {
        input: check_file(&a.input.input)?,
        column: a.input.column.or_else(|| file.column.clone()),
        convention: a.input.convention.or(file.convention).unwrap_or_default(),
        alpha: check_alpha(a.alpha.or(file.alpha).unwrap_or(DEFAULT_ALPHA))?,
        method: a.method.or(file.method).unwrap_or(MethodChoice::All),
        constrained: a.constrained || file.constrained.unwrap_or(false),
        two_point: a.two_point || file.two_point.unwrap_or(false),
        directions: a.directions.or(file.directions).unwrap_or(DEFAULT_DIRECTIONS),
        solver: a.solver.resolve(file.solver.as_ref())?,
    };
    let dist = load(&cfg.input, cfg.column.as_deref(), cfg.convention)?;
    let measures = risk_report(&dist, cfg.alpha, None, 1)?;
    let var_floor = cfg.constrained.then_some(measures.var);

    let methods = match cfg.method {
        MethodChoice::All => vec![MethodChoice::FixedPoint, MethodChoice::De, MethodChoice::Ot],
        m => vec![m],
    };
    let mut plan_order: Vec<(MethodChoice, bool)> = Vec::new();
    if cfg.method == MethodChoice::All || !cfg.constrained {
        plan_order.extend(methods.iter().map(|&m| (m, false)));
    }
    if cfg.constrained {
        plan_order.extend(methods.iter().map(|&m| (m, true)));
    }

    let mut outcome = Outcome::default();
    let mut runs = Vec::new();
    let mut dumped_plan = false;
    for (method, constrained) in plan_order {
        let lbl = label(method, constrained);
        let floor = if constrained { var_floor } else { None };
        let mut run = MethodRun {
            label: lbl.clone(),
            method,
            constrained,
            quantizer: None,
            criticality: None,
            ot: None,
            error: None,
        };
        match solve(&dist, method, floor, &cfg.solver) {
            Ok((q, ot)) => {
                if !q.converged {
                    outcome.note(EXIT_NOT_CONVERGED, format!("{lbl}: solver did not converge"));
                }
                if !constrained {
                    run.criticality = Some(criticality_check(&dist, q.m1, q.m2, cfg.directions, cfg.solver.seed));
                }
                if let Some(o) = ot {
                    if let (Some(path), false) = (&a.plan, dumped_plan) {
                        write_plan(path, &o.plan)?;
                        dumped_plan = true;
                    }
                    run.ot = Some(OtDiagnostics {
                        entropic_optimum: o.entropic_optimum,
                        plan_masses: o.plan_masses,
                        w_epsilon: o.w_epsilon,
                        stages: o.stages,
                        monotonicity_violations: o.monotonicity_violations,
                    });
                }
                run.quantizer = Some(q);
            }
            Err(e) => {
                outcome.note(exit_code(&e), format!("{lbl}: {e}"));
                run.error = Some(e.to_string());
            }
        }
        runs.push(run);
    }

    let two_point = if cfg.two_point {
        match solve_two_point(&dist, &cfg.solver) {
            Ok(q) => {
                if !q.converged {
                    outcome.note(EXIT_NOT_CONVERGED, "two-point: solver did not converge".into());
                }
                Some(q)
            }
            Err(e) => {
                outcome.note(exit_code(&e), format!("two-point: {e}"));
                None
            }
        }
    } else {
        None
    };
    if let Some(path) = &a.histogram {
        write_histogram(path, &dist, a.bins)?;
    }

    let table = comparison_table(&runs, &measures);
    let format = a.output.format.or(file.format).unwrap_or_default();
    let bytes = match format {
        Format::Json => to_json(&QuantizeReport {
            config: cfg,
            measures,
            var_floor,
            runs,
            two_point,
            table,
        })?
        .into_bytes(),
        Format::Csv => csv_bytes(|w| {
            let mut header = vec!["quantity".to_owned()];
            header.extend(table.columns.iter().cloned());
            w.write_record(&header)?;
            for row in &table.rows {
                let mut rec = vec![row.quantity.clone()];
                rec.extend(row.values.iter().map(|v| opt(*v)));
                w.write_record(&rec)?;
            }
            Ok(())
        })?,
    };
    emit(a.output.output.as_deref(), &bytes)?;
    Ok(outcome)
}

fn read_portfolio(path: &Path, correlation: Option<&Path>) -> Result<CreditPortfolio, Failure> {
    let open = |p: &Path| File::open(p).map_err(|e| Failure::input(format!("{}: {e}", p.display())));
    let src = open(path)?;
    let corr = correlation.map(open).transpose()?;
    CreditPortfolio::read_csv(src, corr).map_err(|e| Failure::from(e).in_file(path))
}

fn write_scenarios(path: &Path, set: &LossScenarioSet) -> Result<(), Failure> {
    let mut buf = Vec::new();
    set.write_csv(&mut buf)?;
    emit(Some(path), &buf)
}

fn drc(mode: DrcMode, a: DrcArgs, file: &FileConfig) -> Result<Outcome, Failure> {
    let f = &file.drc;
    let cfg = DrcConfig {
        mode,
        portfolio: check_file(&a.portfolio)?,
        correlation: a.correlation.as_deref().map(check_file).transpose()?,
        alpha: check_alpha(a.alpha.or(f.alpha).unwrap_or(DEFAULT_DRC_ALPHA))?,
        n_scenarios: a.n.or(f.n_scenarios).unwrap_or(DEFAULT_SCENARIOS),
        quad_order: a.quad_order.or(f.quad_order).unwrap_or(DEFAULT_DRC_QUAD_ORDER),
        seed: a.seed.or(f.seed).unwrap_or(SolverConfig::default().seed),
        half_width: a.half_width.or(f.half_width).unwrap_or(DEFAULT_HALF_WIDTH),
    };
    let portfolio = read_portfolio(&cfg.portfolio, cfg.correlation.as_deref())?;
    let mut report = DrcReport {
        config: cfg.clone(),
        mode,
        alpha: cfg.alpha,
        drc: 0.0,
        obligors: portfolio.len(),
        n_scenarios: None,
        quad_order: None,
        seed: None,
        total_probability: None,
        comparison: None,
        tail_window: None,
    };
    let scenarios = match mode {
        DrcMode::Sim => {
            let set = simulate_drc(&portfolio, cfg.n_scenarios, cfg.seed)?;
            report.drc = set.quantile(cfg.alpha)?;
            report.n_scenarios = Some(cfg.n_scenarios);
            report.seed = Some(cfg.seed);
            Some(set)
        }
        DrcMode::Exact | DrcMode::TailWindow => {
            let set = exact_loss_distribution(&portfolio, cfg.quad_order)?;
            report.drc = exact_drc(&set, cfg.alpha)?;
            report.quad_order = Some(cfg.quad_order);
            report.total_probability = Some(set.total_probability());
            if mode == DrcMode::TailWindow {
                report.tail_window = Some(tail_window(&set, cfg.alpha, cfg.half_width)?);
            }
            Some(set)
        }
        DrcMode::Compare => {
            let c = mc_quantile_vs_exact(&portfolio, cfg.alpha, cfg.n_scenarios, cfg.quad_order, cfg.seed)?;
            report.drc = c.exact_drc;
            report.n_scenarios = Some(cfg.n_scenarios);
            report.quad_order = Some(cfg.quad_order);
            report.seed = Some(cfg.seed);
            report.comparison = Some(c);
            None
        }
    };
    if let (Some(path), Some(set)) = (&a.scenarios, &scenarios) {
        write_scenarios(path, set)?;
    }
    let format = a.output.format.or(file.format).unwrap_or_default();
    let bytes = match (&report.tail_window, format) {
        (Some(tw), Format::Csv) => csv_bytes(|w| {
            w.write_record(["rank", "mask", "cum_prob", "loss"])?;
            for r in &tw.rows {
                w.write_record([r.rank.to_string(), r.mask.to_string(), r.cum_prob.to_string(), r.loss.to_string()])?;
            }
            Ok(())
        })?,
        _ => to_json(&report)?.into_bytes(),
    };
    emit(a.output.output.as_deref(), &bytes)?;
    Ok(Outcome::default())
}

fn series_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let entries = std::fs::read_dir(dir).map_err(|e| Failure::input(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .filter(|p| !p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.')))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Failure::input(format!("{}: no PnL files", dir.display())));
    }
    Ok(files)
}

fn series(a: SeriesArgs, file: &FileConfig) -> Result<Outcome, Failure> {
    if !a.dir.is_dir() {
        return Err(Failure::input(format!("{}: no such directory", a.dir.display())));
    }
    let cfg = SeriesConfig {
        dir: a.dir.clone(),
        column: a.column.or_else(|| file.column.clone()),
        convention: a.convention.or(file.convention).unwrap_or_default(),
        alpha: check_alpha(a.alpha.or(file.alpha).unwrap_or(DEFAULT_ALPHA))?,
        method: a.method.or(file.method).unwrap_or(MethodChoice::FixedPoint),
        constrained: a.constrained || file.constrained.unwrap_or(false),
        solver: a.solver.resolve(file.solver.as_ref())?,
    };
    if cfg.method == MethodChoice::All {
        return Err(Failure::input("report-series needs a single method"));
    }
    let mut outcome = Outcome::default();
    let mut rows = Vec::new();
    for path in series_files(&cfg.dir)? {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let dist = load(&path, cfg.column.as_deref(), cfg.convention)?;
        let m = risk_report(&dist, cfg.alpha, None, 1).map_err(|e| Failure::from(e).in_file(&path))?;
        let floor = cfg.constrained.then_some(m.var);
        let mut row = SeriesRow {
            file: name.clone(),
            sample_size: m.sample_size,
            var: m.var,
            es: m.es,
            worst_case: m.worst_case,
            m1: None,
            m2: None,
            p0: None,
            p1: None,
            p2: None,
            converged: None,
            error: None,
        };
        match solve(&dist, cfg.method, floor, &cfg.solver) {
            Ok((q, _)) => {
                if !q.converged {
                    outcome.note(EXIT_NOT_CONVERGED, format!("{name}: solver did not converge"));
                }
                row.m1 = Some(q.m1);
                row.m2 = Some(q.m2);
                row.p0 = Some(q.p0);
                row.p1 = Some(q.p1);
                row.p2 = Some(q.p2);
                row.converged = Some(q.converged);
            }
            Err(e) => {
                outcome.note(exit_code(&e), format!("{name}: {e}"));
                row.error = Some(e.to_string());
            }
        }
        rows.push(row);
    }
    let format = a.output.format.or(file.format).unwrap_or_default();
    let bytes = match format {
        Format::Json => to_json(&SeriesReport { config: cfg, rows })?.into_bytes(),
        Format::Csv => csv_bytes(|w| {
            w.write_record(["file", "sample_size", "var", "es", "worst_case", "m1", "m2", "p0", "p1", "p2", "converged"])?;
            for r in &rows {
                w.write_record([
                    r.file.clone(),
                    r.sample_size.to_string(),
                    r.var.to_string(),
                    r.es.to_string(),
                    r.worst_case.to_string(),
                    opt(r.m1),
                    opt(r.m2),
                    opt(r.p0),
                    opt(r.p1),
                    opt(r.p2),
                    r.converged.map(|c| c.to_string()).unwrap_or_default(),
                ])?;
            }
            Ok(())
        })?,
    };
    emit(a.output.output.as_deref(), &bytes)?;
    Ok(outcome)
}
