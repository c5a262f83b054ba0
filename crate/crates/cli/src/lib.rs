//! Batch front-end: job files in, JSON reports and CSV grids out.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 numerical
//! failure, 4 base point not regular.

pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bundleflag::flag::{derived_flag, gauge_align, FlagError, FlagOptions, FlagReport, StageDiagnostics};
use bundleflag::frobenius::{self, FrobeniusError, Polyline};
use bundleflag::metric::{metric_check, MetricError, MetricOptions, Verdict};
use bundleflag::bundle::{BundleError, Sample};
use bundleflag::{Connection, SectionField};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

pub use config::{ConfigError, JobConfig, Tolerances};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot write {path}: {source}")]
    Output {
        path: String,
        source: std::io::Error,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("base point is not regular: {0}")]
    Irregular(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Output { .. } => 2,
            CliError::Numerical(_) => 3,
            CliError::Irregular(_) => 4,
        }
    }
}

impl From<BundleError> for CliError {
    fn from(e: BundleError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<FlagError> for CliError {
    fn from(e: FlagError) -> Self {
        match e {
            FlagError::GridTooCoarse { .. } => CliError::Config(ConfigError::Invalid {
                section: "chart".into(),
                key: "grid".into(),
                message: e.to_string(),
            }),
            FlagError::Irregular(_) => CliError::Irregular(e.to_string()),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<FrobeniusError> for CliError {
    fn from(e: FrobeniusError) -> Self {
        match e {
            FrobeniusError::Flag(f) => f.into(),
            FrobeniusError::IrregularBase(_) => CliError::Irregular(e.to_string()),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::Bundle(b) => b.into(),
            MetricError::Flag(f) => f.into(),
            MetricError::Frobenius(f) => f.into(),
            MetricError::IrregularBase(_) => CliError::Irregular(e.to_string()),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Analyze,
    Sections,
    MetricCheck,
    Transport,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Analyze => "analyze",
            Command::Sections => "sections",
            Command::MetricCheck => "metric-check",
            Command::Transport => "transport",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ChartInfo {
    pub coords: Vec<String>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub grid: Vec<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct BasePoint {
    /// As given in the job file.
    pub requested: Vec<f64>,
    /// The lattice node the computation is anchored at.
    pub node: Vec<f64>,
    pub regular: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct AnalyzeReport {
    pub command: &'static str,
    pub chart: ChartInfo,
    pub tolerances: Tolerances,
    pub bundle_rank: usize,
    pub ranks: Vec<usize>,
    pub rank_final: usize,
    pub iterations: usize,
    pub regular_fraction: f64,
    pub stages: Vec<StageDiagnostics>,
    pub base: BasePoint,
    /// Orthonormal basis of the limit fiber at the base node, one vector per
    /// entry; `null` when the base node is not regular.
    pub basis: Option<Vec<Vec<f64>>>,
    pub caveat: &'static str,
}

#[derive(Clone, Debug, Serialize)]
pub struct SectionsReport {
    pub command: &'static str,
    pub chart: ChartInfo,
    pub tolerances: Tolerances,
    pub rank_final: usize,
    pub base: BasePoint,
    pub files: Vec<String>,
    /// Value of each section at the base node.
    pub initial_values: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    pub max_residual: f64,
    pub within_tolerance: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct WitnessReport {
    pub coefficients: Vec<f64>,
    /// Row-major symmetric matrix at the base node, largest eigenvalue 1.
    pub metric: Vec<Vec<f64>>,
    pub min_eigenvalue: f64,
    pub residual: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricCheckReport {
    pub command: &'static str,
    pub chart: ChartInfo,
    pub tolerances: Tolerances,
    pub verdict: Verdict,
    pub rank: usize,
    pub ranks: Vec<usize>,
    pub base: BasePoint,
    pub witness: Option<WitnessReport>,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct TransportReport {
    pub command: &'static str,
    pub chart: ChartInfo,
    pub tolerances: Tolerances,
    pub path: Vec<Vec<f64>>,
    pub max_step: f64,
    pub w0: Vec<f64>,
    pub w1: Vec<f64>,
    pub closed: bool,
    /// `w1 - w0`, only for closed paths.
    pub defect: Option<Vec<f64>>,
    pub defect_norm: Option<f64>,
}

fn chart_info(config: &JobConfig) -> ChartInfo {
    ChartInfo {
        coords: config.coords.clone(),
        lower: config.lower.clone(),
        upper: config.upper.clone(),
        grid: config.grid.clone(),
    }
}

fn flag_options(config: &JobConfig) -> FlagOptions {
    FlagOptions {
        tol_rank: config.tolerances.rank,
        tol_stab: config.tolerances.stab,
    }
}

fn columns(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.column_iter().map(|c| c.iter().copied().collect()).collect()
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn base_point(config: &JobConfig, conn: &Connection, flag: &FlagReport) -> Result<(usize, BasePoint)> {
    let chart = conn.chart();
    let node = chart.nearest_node(&config.base)?;
    Ok((
        node,
        BasePoint {
            requested: config.base.clone(),
            node: chart.point(node),
            regular: flag.limit().is_regular(node),
        },
    ))
}

pub fn analyze(config: &JobConfig) -> Result<AnalyzeReport> {
    let conn = config.connection_over(&config.chart()?)?;
    let flag = derived_flag(&conn, flag_options(config))?;
    let (node, base) = base_point(config, &conn, &flag)?;
    let basis = if !base.regular {
        None
    } else if flag.limit().fiber(node).is_some_and(|f| f.rank() == 0) {
        Some(Vec::new())
    } else {
        // aligning from the base fixes the sign convention there
        let frames = gauge_align(flag.limit(), node)?;
        frames.frame(node).map(columns)
    };
    Ok(AnalyzeReport {
        command: Command::Analyze.name(),
        chart: chart_info(config),
        tolerances: config.tolerances,
        bundle_rank: conn.rank(),
        ranks: flag.ranks.clone(),
        rank_final: flag.rank_final(),
        iterations: flag.iterations,
        regular_fraction: flag.regular_fraction(),
        stages: flag.diagnostics.clone(),
        base,
        basis,
        caveat: flag.caveat(),
    })
}

/// Parallel sections through the base node, one per limit basis vector.
pub struct Sections {
    pub connection: Connection,
    pub rank_final: usize,
    pub base_node: usize,
    pub base: BasePoint,
    pub sections: Vec<SectionField>,
}

pub fn parallel_sections(config: &JobConfig) -> Result<Sections> {
    let conn = config.connection_over(&config.chart()?)?;
    let flag = derived_flag(&conn, flag_options(config))?;
    let (node, base) = base_point(config, &conn, &flag)?;
    let Some(fiber) = flag.limit().fiber(node) else {
        return Err(CliError::Irregular(format!("node {:?} is excluded from the limit subbundle", base.node)));
    };
    let mut sections = Vec::new();
    if fiber.rank() > 0 {
        let adapted = frobenius::adapted_frame(&conn, flag.limit(), &base.node)?;
        let order: Vec<usize> = (0..conn.dim()).collect();
        let pf = frobenius::integrate_parallel_frame(&adapted, &order)?;
        let x = pf.frame(node).expect("base frame").clone();
        for a in 0..x.ncols() {
            sections.push(frobenius::make_parallel_section(&pf, &x.column(a).into_owned())?);
        }
    }
    Ok(Sections {
        connection: conn,
        rank_final: flag.rank_final(),
        base_node: node,
        base,
        sections,
    })
}

fn section_csv(conn: &Connection, coords: &[String], s: &SectionField) -> Result<String> {
    let chart = conn.chart();
    let mut out = String::new();
    let mut header: Vec<String> = coords.to_vec();
    header.extend((1..=s.rank()).map(|k| format!("f{k}")));
    out.push_str(&header.join(","));
    out.push('\n');
    let SectionField::Grid(grid) = s else {
        unreachable!("constructed sections are sampled on the lattice")
    };
    for idx in 0..chart.num_points() {
        let Some(v) = grid.value(idx) else { continue };
        let fields: Vec<String> = chart.point(idx).iter().chain(v.iter()).map(|x| format!("{x:e}")).collect();
        writeln!(out, "{}", fields.join(",")).expect("string write");
    }
    Ok(out)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| CliError::Output {
        path: path.display().to_string(),
        source,
    })
}

/// Writes `section_k.csv` (k from 1) into `out` and prints residuals to stderr.
pub fn sections(config: &JobConfig, out: &Path) -> Result<SectionsReport> {
    let s = parallel_sections(config)?;
    std::fs::create_dir_all(out).map_err(|source| CliError::Output {
        path: out.display().to_string(),
        source,
    })?;
    let mut files = Vec::new();
    let mut residuals = Vec::new();
    let mut initial_values = Vec::new();
    for (k, section) in s.sections.iter().enumerate() {
        let name = format!("section_{}.csv", k + 1);
        write_file(&out.join(&name), &section_csv(&s.connection, &config.coords, section)?)?;
        let residual = frobenius::parallelism_residual(&s.connection, section)?;
        eprintln!("{name}: parallelism residual {residual:.3e}");
        let v0 = section.value_at(s.connection.chart(), Sample::Node(s.base_node))?;
        initial_values.push(v0.iter().copied().collect());
        residuals.push(residual);
        files.push(name);
    }
    let max_residual = residuals.iter().copied().fold(0.0, f64::max);
    eprintln!(
        "{} section(s); max residual {max_residual:.3e} (tolerance {:.1e})",
        files.len(),
        config.tolerances.residual
    );
    Ok(SectionsReport {
        command: Command::Sections.name(),
        chart: chart_info(config),
        tolerances: config.tolerances,
        rank_final: s.rank_final,
        base: s.base,
        files,
        initial_values,
        residuals,
        max_residual,
        within_tolerance: max_residual <= config.tolerances.residual,
    })
}

pub fn metric(config: &JobConfig) -> Result<MetricCheckReport> {
    let tm = config.tangent_connection(&config.chart()?)?;
    let options = MetricOptions {
        flag: flag_options(config),
        residual_tol: config.tolerances.residual,
    };
    let report = metric_check(&tm, &config.base, options)?;
    Ok(MetricCheckReport {
        command: Command::MetricCheck.name(),
        chart: chart_info(config),
        tolerances: config.tolerances,
        verdict: report.verdict,
        rank: report.rank,
        ranks: report.flag.ranks.clone(),
        base: BasePoint {
            requested: config.base.clone(),
            node: report.base_point.clone(),
            regular: true,
        },
        witness: report.witness.map(|w| WitnessReport {
            coefficients: w.coefficients.iter().copied().collect(),
            metric: rows(&w.metric),
            min_eigenvalue: w.min_eigenvalue,
            residual: w.residual,
        }),
        detail: report.detail,
    })
}

pub fn transport(config: &JobConfig) -> Result<TransportReport> {
    let Some(spec) = &config.transport else {
        return Err(ConfigError::Missing {
            section: "transport",
            key: "path",
        }
        .into());
    };
    let conn = config.connection_over(&config.chart()?)?;
    let path = Polyline::new(spec.path.clone());
    let w0 = DVector::from_column_slice(&spec.vector);
    let w1 = frobenius::parallel_transport(&conn, &path, &w0, spec.options)?;
    let closed = path.is_closed();
    let defect = closed.then(|| &w1 - &w0);
    Ok(TransportReport {
        command: Command::Transport.name(),
        chart: chart_info(config),
        tolerances: config.tolerances,
        path: spec.path.clone(),
        max_step: spec.options.max_step,
        w0: spec.vector.clone(),
        w1: w1.iter().copied().collect(),
        closed,
        defect_norm: defect.as_ref().map(|d| d.norm()),
        defect: defect.map(|d| d.iter().copied().collect()),
    })
}

fn to_json<T: Serialize>(report: &T) -> String {
    let mut text = serde_json::to_string_pretty(report).expect("reports serialize");
    text.push('\n');
    text
}

/// Run one command and return its JSON report. With `out`, the report is also
/// saved as `<command>.json` there; `sections` writes its grids to `out`
/// (default: the working directory).
pub fn run(command: Command, config: &JobConfig, out: Option<&Path>) -> Result<String> {
    let json = match command {
        Command::Analyze => to_json(&analyze(config)?),
        Command::Sections => {
            let dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
            to_json(&sections(config, &dir)?)
        }
        Command::MetricCheck => to_json(&metric(config)?),
        Command::Transport => to_json(&transport(config)?),
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Output {
            path: dir.display().to_string(),
            source,
        })?;
        write_file(&dir.join(format!("{}.json", command.name())), &json)?;
    }
    Ok(json)
}
