//! One runner per subcommand. Each writes its files into `out` and returns
//! the lines printed as a summary, plus the metrics the acceptance suite
//! reads back.

use std::path::Path;
use std::time::Instant;

use cdlab_core::counterfactual::Theorem1Report;
use cdlab_core::diagnostics::{conditional_variance, crossing_curve, CrossingCurves, Fig1Spec, CURVE_TOL};
use cdlab_core::extrapolation::{
    check_prop32, extrapolate, price_ccs_check, saturated_design, solve_orthogonality, GmmReport, InstrumentBasis,
    MuBasis, PriceCcsReport, Prop32Report, RuleFamily, RuleKind,
};
use cdlab_core::micro::{
    identify_cells, instrument_step, parallel_residual, simulate_micro, verify_theorem2, CompletedMicroModel,
    MicroMarket, Theorem2Report, WGrid,
};
use cdlab_core::scalar::max_abs_diff;
use cdlab_core::{
    invert, sample_population, verify_theorem1, Bundle, CounterfactualEngine, HFamily, HomTriple, MarketDraw,
    PopulationSpec, ShareMap, SharesVector,
};
use rayon::prelude::*;

use crate::config::{
    ExperimentConfig, ExtrapolateSection, Fig2Section, InvertSection, MicroIdentifySection, PredictSection,
    PriceCcsSection, Thm1Section, Thm2Section,
};
use crate::error::{Check, CliError, CliResult};
use crate::output::{flag, num, write_csv, write_text, Frame, Report, Svg};

/// Slope gap above which two curves through a point count as crossing.
pub const SLOPE_GAP_FLOOR: f64 = 1e-3;

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// An observed market: shares at a treatment, with the latent draw when the
/// data were simulated here.
#[derive(Debug, Clone)]
pub struct Observed {
    pub id: usize,
    pub y: SharesVector,
    pub a: Bundle,
    pub draw: Option<MarketDraw>,
}

fn observed_from(draws: Vec<MarketDraw>) -> Vec<Observed> {
    draws
        .into_iter()
        .enumerate()
        .map(|(id, m)| Observed { id, y: m.y.clone(), a: m.a.clone(), draw: Some(m) })
        .collect()
}

fn sample(pop: &PopulationSpec) -> CliResult<Vec<MarketDraw>> {
    pop.validate().check("population")?;
    sample_population(pop).check("simulate")
}

pub fn run_simulate(cfg: &ExperimentConfig, out: &Path) -> CliResult<Vec<String>> {
    let pop = cfg.population()?;
    let data = sample(pop)?;
    write_markets(&out.join("markets.csv"), &data)?;
    let rows = data.iter().enumerate().flat_map(|(i, m)| {
        m.z.iter().enumerate().map(move |(k, z)| vec![i.to_string(), k.to_string(), num(*z)])
    });
    write_csv(&out.join("instruments.csv"), &["market_id", "k", "z"], rows)?;
    Ok(vec![format!("simulated {} markets with {} product(s)", data.len(), pop.j)])
}

pub fn write_markets(path: &Path, data: &[MarketDraw]) -> CliResult<()> {
    let x2_dim = data.first().map_or(0, |m| m.a.x2_dim());
    let mut header: Vec<String> =
        ["market_id", "type", "product", "share", "price", "x1", "xi"].iter().map(|s| s.to_string()).collect();
    header.extend((0..x2_dim).map(|k| format!("x2_{k}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = data.iter().enumerate().flat_map(|(i, m)| {
        (0..m.a.j()).map(move |j| {
            let mut r = vec![
                i.to_string(),
                m.zeta.to_string(),
                j.to_string(),
                num(m.y[j]),
                num(m.a.p[j]),
                num(m.a.x1[j]),
                num(m.xi[j]),
            ];
            r.extend(m.a.x2_row(j).iter().map(|v| num(*v)));
            r
        })
    });
    write_csv(path, &header, rows)
}

/// Reads `market_id, product, share, price` and optional `x1`, `x2_k`
/// columns; rows of a market must be consecutive with products `0..J`.
pub fn read_markets(path: &Path) -> CliResult<Vec<Observed>> {
    let bad = |msg: String| CliError::Validation(format!("{}: {msg}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    let headers = rdr.headers().map_err(|e| CliError::io(path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| bad(format!("missing column {name}")));
    let (c_id, c_prod, c_share, c_price) = (need("market_id")?, need("product")?, need("share")?, need("price")?);
    let c_x1 = col("x1");
    let x2_cols: Vec<usize> = (0..).map_while(|k| col(&format!("x2_{k}"))).collect();
    let mut markets: Vec<(usize, Vec<f64>, Bundle)> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::io(path, e))?;
        let field = |c: usize| -> CliResult<f64> {
            rec.get(c)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| bad(format!("row {}: column {} is not a number", line + 2, headers.get(c).unwrap_or("?"))))
        };
        let id = field(c_id)? as usize;
        let product = field(c_prod)? as usize;
        if markets.last().map(|m| m.0) != Some(id) {
            markets.push((id, Vec::new(), Bundle { x1: Vec::new(), p: Vec::new(), x2: Vec::new() }));
        }
        let m = markets.last_mut().expect("pushed above");
        if product != m.1.len() {
            return Err(bad(format!("row {}: products of market {id} out of order", line + 2)));
        }
        m.1.push(field(c_share)?);
        m.2.p.push(field(c_price)?);
        m.2.x1.push(match c_x1 {
            Some(c) => field(c)?,
            None => 0.0,
        });
        if !x2_cols.is_empty() {
            m.2.x2.push(x2_cols.iter().map(|c| field(*c)).collect::<CliResult<_>>()?);
        }
    }
    if markets.is_empty() {
        return Err(bad("no markets".into()));
    }
    markets
        .into_iter()
        .map(|(id, y, a)| {
            let y = SharesVector::new(y).map_err(|e| bad(format!("market {id}: {e}")))?;
            a.validate().map_err(|e| bad(format!("market {id}: {e}")))?;
            Ok(Observed { id, y, a, draw: None })
        })
        .collect()
}

fn demand_map(
    demand: &Option<cdlab_core::ShareMapConfig>,
    cfg: &ExperimentConfig,
) -> CliResult<ShareMap> {
    match demand {
        Some(d) => ShareMap::from_config(d.clone()).check("demand"),
        None => {
            let pop = cfg.population()?;
            pop.validate().check("population")?;
            Ok(pop.type_maps().check("demand")?.remove(0))
        }
    }
}

fn observed_data(input: &Option<std::path::PathBuf>, cfg: &ExperimentConfig) -> CliResult<Vec<Observed>> {
    match input {
        Some(path) => read_markets(path),
        None => Ok(observed_from(sample(cfg.population()?)?)),
    }
}

pub fn run_invert(cfg: &ExperimentConfig, out: &Path) -> CliResult<Vec<String>> {
    let InvertSection { demand, inversion, input } = cfg.invert_section()?;
    inversion.validate().check("inversion")?;
    let map = demand_map(demand, cfg)?;
    let data = observed_data(input, cfg)?;
    let solved: Vec<(Vec<f64>, f64)> = data
        .par_iter()
        .map(|m| {
            let delta = invert(&map, &m.y, &m.a, inversion)?;
            let back = map.shares(&delta, &m.a)?;
            Ok((delta, max_abs_diff(back.as_slice(), m.y.as_slice())))
        })
        .collect::<cdlab_core::Result<_>>()
        .check("invert")?;
    let rows = data.iter().zip(&solved).flat_map(|(m, (d, r))| {
        (0..m.a.j()).map(move |j| vec![m.id.to_string(), j.to_string(), num(d[j]), num(d[j] - m.a.x1[j]), num(*r)])
    });
    write_csv(&out.join("inversion.csv"), &["market_id", "product", "delta", "xi_hat", "share_residual"], rows)?;
    let worst = solved.iter().map(|s| s.1).fold(0.0, f64::max);
    Ok(vec![format!("inverted {} markets; largest share residual {worst:e}", data.len())])
}

pub fn write_targets(path: &Path, targets: &[Bundle]) -> CliResult<()> {
    let rows = targets.iter().enumerate().flat_map(|(t, b)| {
        (0..b.j()).map(move |j| vec![t.to_string(), j.to_string(), num(b.p[j]), num(b.x1[j])])
    });
    write_csv(path, &["target_a", "product", "price", "x1"], rows)
}

fn check_targets(targets: &[Bundle], j: usize) -> CliResult<()> {
    if targets.is_empty() {
        return Err(CliError::Validation("at least one target bundle is required".into()));
    }
    for t in targets {
        t.validate().and_then(|_| t.check_len(j)).check("targets")?;
    }
    Ok(())
}

pub fn run_predict(cfg: &ExperimentConfig, out: &Path) -> CliResult<Vec<String>> {
    let PredictSection { demand, inversion, input, targets } = cfg.predict_section()?;
    inversion.validate().check("inversion")?;
    let map = demand_map(demand, cfg)?;
    let data = observed_data(input, cfg)?;
    check_targets(targets, data[0].a.j())?;
    let truth = match input {
        None => {
            let pop = cfg.population()?;
            Some((pop, pop.type_maps().check("population")?))
        }
        Some(_) => None,
    };
    let engine = CounterfactualEngine::new(map, *inversion);
    let rows: Vec<Vec<Vec<String>>> = data
        .par_iter()
        .map(|m| {
            let mut rows = Vec::new();
            for (t, target) in targets.iter().enumerate() {
                let y_hat = engine.predict(&m.y, &m.a, target)?;
                let y_true = match (&truth, &m.draw) {
                    (Some((pop, maps)), Some(d)) => Some(pop.potential_outcome(maps, d.zeta, &d.xi, target)?),
                    _ => None,
                };
                for j in 0..target.j() {
                    rows.push(vec![
                        m.id.to_string(),
                        t.to_string(),
                        j.to_string(),
                        num(y_hat[j]),
                        y_true.as_ref().map_or_else(String::new, |y| num(y[j])),
                    ]);
                }
            }
            Ok(rows)
        })
        .collect::<cdlab_core::Result<_>>()
        .check("predict")?;
    write_csv(
        &out.join("predictions.csv"),
        &["market_id", "target_a", "product", "y_hat", "y_true"],
        rows.into_iter().flatten(),
    )?;
    write_targets(&out.join("targets.csv"), targets)?;
    Ok(vec![format!("predicted {} markets at {} target bundle(s)", data.len(), targets.len())])
}

/// What `fig1` measured.
#[derive(Debug, Clone, PartialEq)]
pub struct Fig1Outcome {
    pub markets: usize,
    /// Markets whose opposite-type curve exists, passes through the observed
    /// point within `CURVE_TOL` and differs in slope by more than
    /// [`SLOPE_GAP_FLOOR`].
    pub crossing: usize,
    pub variance_single: f64,
    pub variance_two: f64,
    /// Wall time of the crossing curves, in seconds.
    pub curve_seconds: f64,
}

impl Fig1Outcome {
    pub fn crossing_fraction(&self) -> f64 {
        self.crossing as f64 / self.markets.max(1) as f64
    }
}

fn crosses(c: &CrossingCurves) -> bool {
    c.opposite_residual <= CURVE_TOL && c.slope_gap() > SLOPE_GAP_FLOOR
}

const BLUE: &str = "#1f77b4";
const ORANGE: &str = "#ff7f0e";

fn type_color(zeta: usize) -> &'static str {
    if zeta == 0 {
        BLUE
    } else {
        ORANGE
    }
}

pub fn run_fig1(spec: &Fig1Spec, out: &Path) -> CliResult<(Fig1Outcome, Vec<String>)> {
    spec.validate().check("fig1 config")?;
    let pop_spec = spec.population();
    let maps = pop_spec.type_maps().check("fig1 demand")?;
    let started = Instant::now();
    let pop = sample_population(&pop_spec).check("fig1 simulate")?;
    let curves: Vec<cdlab_core::Result<CrossingCurves>> =
        pop.par_iter().map(|m| crossing_curve(spec, &maps, m)).collect();
    let curve_seconds = started.elapsed().as_secs_f64();

    let crossing = curves.iter().filter(|c| c.as_ref().is_ok_and(crosses)).count();
    let summary_rows = pop.iter().zip(&curves).enumerate().map(|(i, (m, c))| match c {
        Ok(c) => vec![
            i.to_string(),
            Fig1Spec::type_name(m.zeta).into(),
            num(c.price),
            num(c.share),
            num(c.opposite_xi),
            num(c.opposite_residual),
            num(c.own_slope),
            num(c.opposite_slope),
            flag(crosses(c)),
        ],
        Err(_) => {
            let mut r = vec![i.to_string(), Fig1Spec::type_name(m.zeta).into(), num(m.a.p[0]), num(m.y[0])];
            r.extend((0..4).map(|_| String::new()));
            r.push(flag(false));
            r
        }
    });
    write_csv(
        &out.join("crossings.csv"),
        &["market_id", "type", "price", "share", "opposite_xi", "opposite_residual", "own_slope", "opposite_slope", "crosses"],
        summary_rows,
    )?;

    let plotted = spec.plotted_markets.min(pop.len());
    let curve_rows = (0..plotted).filter_map(|i| curves[i].as_ref().ok().map(|c| (i, c))).flat_map(|(i, c)| {
        let name = Fig1Spec::type_name(pop[i].zeta);
        c.grid
            .iter()
            .zip(c.own.iter().zip(&c.opposite))
            .map(move |(p, (o, x))| vec![i.to_string(), name.into(), num(*p), num(*o), num(*x)])
    });
    write_csv(&out.join("curves.csv"), &["market_id", "type", "grid_price", "own_share", "opposite_share"], curve_rows)?;
    write_text(&out.join("fig1.svg"), &fig1_svg(spec, &pop[..plotted], &curves[..plotted]))?;

    let variance = |mut p: PopulationSpec| -> CliResult<f64> {
        p.market_count = spec.variance_markets;
        let draws = sample_population(&p).check("variance simulate")?;
        let a = p.median_bundle();
        let b = a.with_prices(a.p.iter().map(|v| v + spec.price_shift).collect());
        conditional_variance(&draws, &p, &a, &b, spec.variance_bins).check("conditional variance")
    };
    let single = variance(spec.single_type_population())?;
    let two = variance(spec.population())?;
    let base = spec.population().median_bundle().p[0];
    let vrows = [("single-type", single), ("two-type", two)].map(|(name, v)| {
        vec![
            name.to_string(),
            spec.variance_markets.to_string(),
            spec.variance_bins.to_string(),
            num(base),
            num(base + spec.price_shift),
            num(v),
        ]
    });
    write_csv(
        &out.join("variance_report.csv"),
        &["population", "markets", "bins", "price", "shifted_price", "conditional_variance"],
        vrows,
    )?;
    let outcome = Fig1Outcome { markets: pop.len(), crossing, variance_single: single, variance_two: two, curve_seconds };
    let lines = vec![
        format!(
            "{crossing} of {} markets have a crossing opposite-type curve ({:.2}%)",
            pop.len(),
            100.0 * outcome.crossing_fraction()
        ),
        format!("conditional variance: single type {single:e}, two types {two:e}"),
    ];
    Ok((outcome, lines))
}

fn fig1_svg(spec: &Fig1Spec, pop: &[MarketDraw], curves: &[cdlab_core::Result<CrossingCurves>]) -> String {
    let lo = spec.curve_grid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = spec.curve_grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut svg = Svg::new(720.0, 480.0);
    let frame = Frame { left: 70.0, top: 40.0, width: 620.0, height: 380.0, x: (lo, hi.max(lo + 1e-9)), y: (0.0, 1.0) };
    frame.axes(&mut svg, "Demand curves through observed points", "price", "share");
    for (m, c) in pop.iter().zip(curves) {
        let Ok(c) = c else { continue };
        frame.polyline(&mut svg, &c.grid, &c.own, type_color(m.zeta), false);
        frame.polyline(&mut svg, &c.grid, &c.opposite, type_color(1 - m.zeta), true);
        frame.marker(&mut svg, c.price, c.share, type_color(m.zeta));
    }
    frame.legend(
        &mut svg,
        &[
            ("blue market", BLUE, false),
            ("orange market", ORANGE, false),
            ("other type, same point", "#555555", true),
        ],
    );
    svg.finish()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fig2Outcome {
    pub residual_identity: f64,
    pub residual_truth: f64,
    pub seconds: f64,
}

/// Levels `h(Y_i[w], a_i)` at every grid point.
fn path_levels(h: &HFamily, markets: &[MicroMarket]) -> CliResult<Vec<Vec<Vec<f64>>>> {
    markets
        .par_iter()
        .map(|m| m.profile.shares.iter().map(|y| h.eval(y.as_slice(), &m.a)).collect())
        .collect::<cdlab_core::Result<_>>()
        .check("fig2 paths")
}

fn path_rows<'a>(
    name: &'a str,
    levels: &'a [Vec<Vec<f64>>],
    grid: &'a WGrid,
) -> impl Iterator<Item = Vec<String>> + 'a {
    levels.iter().enumerate().flat_map(move |(i, path)| {
        path.iter()
            .zip(&grid.points)
            .map(move |(v, w)| vec![i.to_string(), num(w[0]), num(v[0]), name.to_string()])
    })
}

pub fn run_fig2(section: &Fig2Section, out: &Path) -> CliResult<(Fig2Outcome, Vec<String>)> {
    let started = Instant::now();
    let micro = &section.micro;
    if micro.dgp.j != 1 {
        return Err(CliError::Validation("fig2 draws one-product paths; set dgp.j = 1".into()));
    }
    let (grid, markets) = simulate_micro(micro).check("fig2 simulate")?;
    let truth = micro.dgp.inverse_share_map(grid.w0()).check("fig2 true inverse")?;
    let candidates = [("identity", HFamily::Identity), ("true-inverse", truth)];
    let mut residuals = Vec::new();
    let mut levels = Vec::new();
    for (name, h) in &candidates {
        residuals.push(parallel_residual(h, &markets, &grid).check(&format!("parallel residual ({name})"))?);
        levels.push(path_levels(h, &markets)?);
    }
    write_csv(&out.join("paths_raw.csv"), &["market_id", "w", "value", "candidate_name"], path_rows("raw", &levels[0], &grid))?;
    write_csv(
        &out.join("paths_transformed.csv"),
        &["market_id", "w", "value", "candidate_name"],
        path_rows(candidates[0].0, &levels[0], &grid).chain(path_rows(candidates[1].0, &levels[1], &grid)),
    )?;
    let rrows = candidates
        .iter()
        .zip(&residuals)
        .map(|((name, _), r)| vec![name.to_string(), num(r.residual), r.markets.to_string()]);
    write_csv(&out.join("parallel_report.csv"), &["candidate_name", "residual", "markets"], rrows)?;
    let plotted = section.plotted_markets.min(markets.len());
    write_text(&out.join("fig2.svg"), &fig2_svg(&grid, &levels, &residuals.iter().map(|r| r.residual).collect::<Vec<_>>(), plotted))?;
    let outcome = Fig2Outcome {
        residual_identity: residuals[0].residual,
        residual_truth: residuals[1].residual,
        seconds: started.elapsed().as_secs_f64(),
    };
    let lines = vec![format!(
        "parallel residual: identity {:e}, true inverse {:e} ({} markets)",
        outcome.residual_identity,
        outcome.residual_truth,
        markets.len()
    )];
    Ok((outcome, lines))
}

fn fig2_svg(grid: &WGrid, levels: &[Vec<Vec<Vec<f64>>>], residuals: &[f64], plotted: usize) -> String {
    let ws: Vec<f64> = grid.points.iter().map(|w| w[0]).collect();
    let (wlo, whi) = (ws[0], ws[ws.len() - 1]);
    let mut svg = Svg::new(980.0, 440.0);
    let titles = ["(a) rejected: identity", "(b) accepted: true inverse"];
    let ylabels = ["share", "h(Y[w])"];
    for (k, panel) in levels.iter().enumerate() {
        let shown = &panel[..plotted];
        let vals = shown.iter().flatten().map(|v| v[0]);
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        let pad = 0.05 * (hi - lo).max(1e-9);
        let frame = Frame {
            left: 80.0 + 480.0 * k as f64,
            top: 40.0,
            width: 400.0,
            height: 340.0,
            x: (wlo, whi.max(wlo + 1e-9)),
            y: (lo - pad, hi + pad),
        };
        frame.axes(&mut svg, titles[k], "w", ylabels[k]);
        for path in shown {
            let ys: Vec<f64> = path.iter().map(|v| v[0]).collect();
            frame.polyline(&mut svg, &ws, &ys, if k == 0 { ORANGE } else { BLUE }, false);
        }
        svg.text(
            frame.left + 8.0,
            frame.top + 14.0,
            10.0,
            "start",
            &format!("parallel residual {:.3e}", residuals[k]),
        );
    }
    svg.finish()
}

fn report_rows(checks: &[(&str, f64, f64, bool)]) -> Vec<Vec<String>> {
    checks
        .iter()
        .map(|(name, v, tol, pass)| vec![name.to_string(), num(*v), num(*tol), flag(*pass)])
        .collect()
}

pub fn theorem1_report(
    pop: &PopulationSpec,
    section: &Thm1Section,
) -> CliResult<Theorem1Report> {
    let data = sample(pop)?;
    check_targets(&section.grid, pop.j)?;
    let h = match &section.h {
        Some(h) => h.clone(),
        None => HFamily::from_share_map(&pop.type_maps().check("population")?[0], Default::default()),
    };
    let a0 = section.a0.clone().unwrap_or_else(|| pop.median_bundle());
    let triple = HomTriple::new(h, a0).check("triple")?;
    verify_theorem1(&triple, &section.grid, &data, pop).check("aggregate equivalence")
}

pub fn run_thm1(cfg: &ExperimentConfig, out: &Path) -> CliResult<Vec<String>> {
    let r = theorem1_report(cfg.population()?, cfg.thm1_section()?)?;
    write_thm1(&out.join("thm1_report.csv"), &r)?;
    Ok(vec![format!(
        "linear index {:e}, invertible demand {:e}, homogeneity {:e}: {}",
        r.linear_index,
        r.invertible_demand,
        r.homogeneity,
        if r.passes() { "all hold" } else { "violated" }
    )])
}

pub fn write_thm1(path: &Path, r: &Theorem1Report) -> CliResult<()> {
    write_csv(
        path,
        &["check", "value", "tol", "pass"],
        report_rows(&[
            ("linear_index", r.linear_index, r.tol, r.linear_index_passes()),
            ("invertible_demand", r.invertible_demand, r.tol, r.invertible_demand_passes()),
            ("homogeneity", r.homogeneity, r.tol, r.homogeneity_passes()),
            ("failures", r.failures as f64, 0.0, r.failures == 0),
        ]),
    )
}

pub fn theorem2_report(section: &Thm2Section) -> CliResult<Theorem2Report> {
    let (grid, markets) = simulate_micro(&section.micro).check("micro simulate")?;
    check_targets(&section.treatments, section.micro.dgp.j)?;
    let a0 = match &section.a0 {
        Some(a) => a.clone(),
        None => markets.first().map(|m| m.a.clone()).ok_or_else(|| CliError::Validation("no markets".into()))?,
    };
    verify_theorem2(&section.micro.dgp, &markets, &grid, &section.treatments, &a0).check("micro equivalence")
}

pub fn run_thm2(cfg: &ExperimentConfig, out: &Path) -> CliResult<Vec<String>> {
    let r = theorem2_report(cfg.thm2_section()?)?;
    write_csv(
        &out.join("thm2_report.csv"),
        &["check", "value", "tol", "pass"],
        report_rows(&[
            ("conversion", r.conversion, r.tol, r.conversion_passes()),
            ("parallel_trends", r.parallel_trends, r.tol, r.parallel_trends_passes()),
            ("homogeneity", r.homogeneity, r.tol, r.homogeneity_passes()),
        ]),
    )?;
    Ok(vec![format!(
        "conversion {:e}, parallel trends {:e}, homogeneity {:e}: {}",
        r.conversion,
        r.parallel_trends,
        r.homogeneity,
        if r.passes() { "all hold" } else { "violated" }
    )])
}

/// A fitted extrapolation rule with the data and targets it was fitted for.
pub struct RuleFit {
    pub data: Vec<MarketDraw>,
    pub fitted: RuleFamily,
    pub report: GmmReport,
    pub targets: Vec<Bundle>,
}

/// Fills support-derived defaults, then solves the orthogonality conditions.
pub fn fit_rule(pop: &PopulationSpec, section: &ExtrapolateSection) -> CliResult<RuleFit> {
    let data = sample(pop)?;
    let support = saturated_design(pop).ok();
    let from_support = || {
        support
            .clone()
            .ok_or_else(|| CliError::Validation("empty cells, basis or targets need a finite-support population".into()))
    };
    let mut kind = section.family.clone();
    if let RuleKind::Demeaned { mu: MuBasis::CellIndicators { cells }, .. } = &mut kind {
        if cells.is_empty() {
            *cells = from_support()?.0;
        }
    }
    let mut gmm = section.gmm.clone();
    if matches!(&gmm.basis, InstrumentBasis::Indicators { values } if values.is_empty()) {
        gmm.basis = from_support()?.1;
    }
    let targets = if section.targets.is_empty() { from_support()?.0 } else { section.targets.clone() };
    check_targets(&targets, pop.j)?;
    let (fitted, report) =
        solve_orthogonality(&RuleFamily::new(kind), &section.tests, &data, &gmm).check("orthogonality fit")?;
    Ok(RuleFit { data, fitted, report, targets })
}

pub fn write_gmm_report(path: &Path, r: &GmmReport) -> CliResult<()> {
    Report::default()
        .values("theta", &r.theta)
        .value("criterion", r.criterion)
        .value("first_step_criterion", r.first_step_criterion)
        .count("starts", r.starts)
        .count("tied_starts", r.tied_starts)
        .count("unique", usize::from(r.unique))
        .count("moments", r.moments)
        .count("observations", r.observations)
        .write(path)
}

/// Accuracy of a fitted rule against the simulated truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtrapolationOutcome {
    /// `max |extrapolate(y, a, a) − y|`.
    pub identity_gap: f64,
    pub max_error: f64,
}

pub fn run_extrapolate(cfg: &ExperimentConfig, out: &Path) -> CliResult<(ExtrapolationOutcome, Vec<String>)> {
    let pop = cfg.population()?;
    let fit = fit_rule(pop, cfg.extrapolate_section()?)?;
    let maps = pop.type_maps().check("population")?;
    type Row = (f64, f64, Vec<Vec<String>>);
    let rows: Vec<Row> = fit
        .data
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            let y = m.y.as_slice();
            let identity_gap = max_abs_diff(&extrapolate(&fit.fitted, y, &m.a, &m.a)?, y);
            let mut err = 0.0_f64;
            let mut rows = Vec::new();
            for (t, target) in fit.targets.iter().enumerate() {
                let pred = extrapolate(&fit.fitted, y, &m.a, target)?;
                let truth = pop.potential_outcome(&maps, m.zeta, &m.xi, target)?;
                err = err.max(max_abs_diff(&pred, truth.as_slice()));
                for j in 0..pred.len() {
                    rows.push(vec![i.to_string(), t.to_string(), j.to_string(), num(pred[j]), num(truth[j])]);
                }
            }
            Ok((identity_gap, err, rows))
        })
        .collect::<cdlab_core::Result<_>>()
        .check("extrapolate")?;
    let outcome = ExtrapolationOutcome {
        identity_gap: rows.iter().map(|r| r.0).fold(0.0, f64::max),
        max_error: rows.iter().map(|r| r.1).fold(0.0, f64::max),
    };
    write_csv(
        &out.join("predictions.csv"),
        &["market_id", "target_a", "product", "y_tilde", "y_true"],
        rows.into_iter().flat_map(|r| r.2),
    )?;
    write_targets(&out.join("targets.csv"), &fit.targets)?;
    write_gmm_report(&out.join("gmm_report.csv"), &fit.report)?;
    Report::default()
        .value("identity_gap", outcome.identity_gap)
        .value("max_error_vs_truth", outcome.max_error)
        .write(&out.join("accuracy_report.csv"))?;
    let lines = vec![
        format!(
            "criterion {:e} over {} starts, unique: {}",
            fit.report.criterion, fit.report.starts, fit.report.unique
        ),
        format!(
            "identity gap {:e}, largest error against the truth {:e}",
            outcome.identity_gap, outcome.max_error
        ),
    ];
    Ok((outcome, lines))
}

pub fn write_prop32(path: &Path, r: &Prop32Report) -> CliResult<()> {
    Report::default()
        .value("max_gap", r.max_gap)
        .count("comparisons", r.comparisons)
        .count("failures", r.failures)
        .value("ranks_preserved", r.ranks_preserved.map_or(-1.0, |b| f64::from(u8::from(b))))
        .count("pass", usize::from(r.passes()))
        .write(path)
}

pub fn run_prop32(cfg: &ExperimentConfig, out: &Path) -> CliResult<(Prop32Report, Vec<String>)> {
    let fit = fit_rule(cfg.population()?, cfg.extrapolate_section()?)?;
    let r = check_prop32(&fit.fitted, &fit.data, &fit.targets);
    write_prop32(&out.join("prop32_report.csv"), &r)?;
    write_gmm_report(&out.join("gmm_report.csv"), &fit.report)?;
    let line = format!(
        "largest gap {:e} over {} comparisons ({} failures): {}",
        r.max_gap,
        r.comparisons,
        r.failures,
        if r.passes() { "pass" } else { "fail" }
    );
    Ok((r, vec![line]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroOutcome {
    pub model: CompletedMicroModel,
    /// Largest profile error per target against the true profiles.
    pub target_errors: Vec<f64>,
}

pub fn run_micro(section: &MicroIdentifySection, out: &Path) -> CliResult<(MicroOutcome, Vec<String>)> {
    let micro = &section.micro;
    let (grid, markets) = simulate_micro(micro).check("micro simulate")?;
    let y0 = micro.baseline_shares().check("baseline shares")?;
    let cells = identify_cells(&section.family, &markets, &grid, &y0).check("identify h and g")?;
    let w_index = section.w_index.unwrap_or(grid.base);
    let model =
        instrument_step(&cells, &markets, &grid, w_index, &section.level, &section.basis).check("instrument step")?;
    if !section.targets.is_empty() {
        check_targets(&section.targets, micro.dgp.j)?;
    }
    let j = micro.dgp.j;

    let g_rows = model.cells.iter().enumerate().flat_map(|(c, cell)| {
        cell.candidate.g_hat.iter().zip(&grid.points).enumerate().map(move |(k, (g, w))| {
            let mut r = vec![c.to_string(), k.to_string()];
            r.extend(w.iter().map(|v| num(*v)));
            r.extend(g.iter().map(|v| num(*v)));
            r
        })
    });
    let mut header: Vec<String> = vec!["cell".into(), "grid_index".into()];
    header.extend((0..j).map(|k| format!("w_{k}")));
    header.extend((0..j).map(|k| format!("g_{k}")));
    write_csv(&out.join("g_hat.csv"), &header.iter().map(String::as_str).collect::<Vec<_>>(), g_rows)?;

    let n = section.share_points.max(1);
    let mut h_rows = Vec::new();
    for (c, cell) in model.cells.iter().enumerate() {
        for k in 0..n {
            let s = (k + 1) as f64 / (n + 1) as f64;
            let y = vec![s / j as f64; j];
            let h = model.h(&y, &cell.a).check("h table")?;
            let mut r = vec![c.to_string(), num(cell.a.p[0]), num(cell.a.x1[0]), k.to_string()];
            r.extend(y.iter().chain(&h).map(|v| num(*v)));
            h_rows.push(r);
        }
    }
    let mut header: Vec<String> = vec!["cell".into(), "price_0".into(), "x1_0".into(), "point".into()];
    header.extend((0..j).map(|k| format!("y_{k}")));
    header.extend((0..j).map(|k| format!("h_{k}")));
    write_csv(&out.join("h_hat.csv"), &header.iter().map(String::as_str).collect::<Vec<_>>(), h_rows)?;

    let mut target_errors = Vec::new();
    let mut profile_rows = Vec::new();
    for (t, target) in section.targets.iter().enumerate() {
        let per: Vec<(f64, Vec<Vec<String>>)> = markets
            .par_iter()
            .enumerate()
            .map(|(i, m)| {
                let pred = model.predict_profile(&m.profile, &m.a, target)?;
                let truth = micro.dgp.profile(&m.xi, target, &grid)?;
                let mut err = 0.0_f64;
                let mut rows = Vec::new();
                for (k, (p, q)) in pred.shares.iter().zip(&truth.shares).enumerate() {
                    err = err.max(max_abs_diff(p.as_slice(), q.as_slice()));
                    for jj in 0..j {
                        rows.push(vec![i.to_string(), t.to_string(), k.to_string(), jj.to_string(), num(p[jj]), num(q[jj])]);
                    }
                }
                Ok((err, rows))
            })
            .collect::<cdlab_core::Result<_>>()
            .check("predict profiles")?;
        target_errors.push(per.iter().map(|p| p.0).fold(0.0, f64::max));
        profile_rows.extend(per.into_iter().flat_map(|p| p.1));
    }
    if !section.targets.is_empty() {
        write_csv(
            &out.join("profiles.csv"),
            &["market_id", "target_a", "grid_index", "product", "y_hat", "y_true"],
            profile_rows,
        )?;
        write_targets(&out.join("targets.csv"), &section.targets)?;
    }

    let mut report = Report::default();
    report
        .values("theta", &model.theta)
        .values("moments", &model.moments)
        .value("criterion", model.criterion)
        .count("observations", model.observations)
        .value("rank_ratio", model.rank_ratio)
        .count("cells", model.cells.len())
        .values("cell_residual", &model.cells.iter().map(|c| c.candidate.residual).collect::<Vec<_>>())
        .values("cell_theta", &model.cells.iter().flat_map(|c| c.candidate.theta.clone()).collect::<Vec<_>>())
        .values("target_max_error", &target_errors);
    if let Some(alpha) = model.price_coefficient() {
        report.value("price_coefficient", alpha);
    }
    report.write(&out.join("moment_report.csv"))?;

    let mut lines = vec![format!(
        "{} cells identified, level criterion {:e}, rank ratio {:e}",
        model.cells.len(),
        model.criterion,
        model.rank_ratio
    )];
    if let Some(alpha) = model.price_coefficient() {
        lines.push(format!("implied price coefficient {alpha}"));
    }
    for (t, e) in target_errors.iter().enumerate() {
        lines.push(format!("target {t}: largest profile error {e:e}"));
    }
    Ok((MicroOutcome { model, target_errors }, lines))
}

pub fn price_ccs_report(pop: &PopulationSpec, section: &PriceCcsSection) -> CliResult<PriceCcsReport> {
    let data = sample(pop)?;
    let a0 = section.a0.clone().unwrap_or_else(|| pop.median_bundle());
    let triple = HomTriple::new(section.h.clone(), a0).check("triple")?;
    price_ccs_check(&triple, &data, pop, &section.price_grid, &section.x1_shifts).check("price counterfactuals")
}

pub fn write_price_ccs(path: &Path, r: &PriceCcsReport) -> CliResult<()> {
    use cdlab_core::extrapolation::{PRICE_CCS_TOL, X1_ERROR_FLOOR};
    let mut rows = vec![("price_error".to_string(), r.price_error, PRICE_CCS_TOL, r.price_correct())];
    for (k, e) in r.x1_error_by_type.iter().enumerate() {
        rows.push((format!("x1_error_type_{k}"), *e, X1_ERROR_FLOOR, *e > X1_ERROR_FLOOR));
    }
    rows.push(("failures".into(), r.failures as f64, 0.0, r.failures == 0));
    let rows: Vec<(&str, f64, f64, bool)> = rows.iter().map(|(n, v, t, p)| (n.as_str(), *v, *t, *p)).collect();
    write_csv(path, &["check", "value", "threshold", "exceeds_or_passes"], report_rows(&rows))
}

pub fn run_price_ccs(cfg: &ExperimentConfig, out: &Path) -> CliResult<Vec<String>> {
    let r = price_ccs_report(cfg.population()?, cfg.price_ccs_section()?)?;
    write_price_ccs(&out.join("price_ccs_report.csv"), &r)?;
    Ok(vec![format!(
        "price counterfactual error {:e} ({}), x1 errors by type {:?} ({})",
        r.price_error,
        if r.price_correct() { "correct" } else { "wrong" },
        r.x1_error_by_type,
        if r.x1_wrong() { "wrong for some type" } else { "correct" }
    )])
}
