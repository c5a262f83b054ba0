//! Job files: `key = value` lines grouped in `[section]`s.
//!
//! Comments (`#` or `;`) must sit on their own lines. Numeric values may be
//! constant expressions such as `pi/2` or `pi - 0.3`.

use std::collections::HashSet;
use std::path::Path;

use bundleflag::bundle::{connection_from_christoffel, induce_sym2, BundleError, Chart, Connection};
use bundleflag::flag::{DEFAULT_TOL_RANK, DEFAULT_TOL_STAB};
use bundleflag::frobenius::TransportOptions;
use bundleflag::ScalarField;
use ini::Ini;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed job file: {0}")]
    Syntax(String),
    #[error("missing [{section}] key `{key}`")]
    Missing { section: &'static str, key: &'static str },
    #[error("[{section}] {key}: {message}")]
    Invalid {
        section: String,
        key: String,
        message: String,
    },
    #[error("unknown section [{0}]")]
    UnknownSection(String),
    #[error("[{section}] has unknown key `{key}`")]
    UnknownKey { section: String, key: String },
    #[error(transparent)]
    Bundle(#[from] BundleError),
}

fn invalid(section: &str, key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        section: section.to_string(),
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BundleKind {
    Tangent,
    Sym2,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    /// `(i, j, mu, expression)`, zero-based.
    Omega { rank: usize, entries: Vec<(usize, usize, usize, String)> },
    /// `(i, mu, j, expression)` for `Gamma^i_{mu j}`, zero-based.
    Christoffel {
        bundle: BundleKind,
        entries: Vec<(usize, usize, usize, String)>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Tolerances {
    pub rank: f64,
    pub stab: f64,
    pub residual: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            rank: DEFAULT_TOL_RANK,
            stab: DEFAULT_TOL_STAB,
            residual: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportSpec {
    pub path: Vec<Vec<f64>>,
    pub vector: Vec<f64>,
    pub options: TransportOptions,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JobConfig {
    pub coords: Vec<String>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub grid: Vec<usize>,
    pub source: Source,
    pub tolerances: Tolerances,
    /// Defaults to the centre of the box.
    pub base: Vec<f64>,
    pub transport: Option<TransportSpec>,
}

const SECTIONS: &[(&str, &[&str])] = &[
    ("chart", &["coords", "lower", "upper", "grid"]),
    ("connection", &["source", "bundle"]),
    ("christoffel", &[]),
    ("omega", &["rank"]),
    ("tolerances", &["rank", "stab", "residual"]),
    ("base", &["point"]),
    ("transport", &["path", "vector", "max_step"]),
];

fn constant(section: &str, key: &str, text: &str) -> Result<f64, ConfigError> {
    let none: [&str; 0] = [];
    let f = ScalarField::parse(text.trim(), &none).map_err(|e| invalid(section, key, e.to_string()))?;
    f.eval(&[]).map_err(|e| invalid(section, key, e.to_string()))
}

fn list(section: &str, key: &str, text: &str) -> Result<Vec<f64>, ConfigError> {
    text.split(',').map(|t| constant(section, key, t)).collect()
}

/// `name[a][b][c]` -> (name, [a, b, c]).
fn indexed_key(key: &str) -> Option<(&str, Vec<&str>)> {
    let open = key.find('[')?;
    let (name, mut rest) = key.split_at(open);
    let mut parts = Vec::new();
    while !rest.is_empty() {
        let inner = rest.strip_prefix('[')?;
        let close = inner.find(']')?;
        parts.push(inner[..close].trim());
        rest = inner[close + 1..].trim_start();
    }
    Some((name.trim(), parts))
}

impl JobConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let ini = Ini::load_from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let mut seen = HashSet::new();
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((key, _)) = props.iter().next() {
                    return Err(ConfigError::UnknownKey {
                        section: String::new(),
                        key: key.to_string(),
                    });
                }
                continue;
            };
            let Some((_, keys)) = SECTIONS.iter().find(|(name, _)| *name == section) else {
                return Err(ConfigError::UnknownSection(section.to_string()));
            };
            for (key, _) in props.iter() {
                if !seen.insert((section.to_string(), key.to_string())) {
                    return Err(invalid(section, key, "given more than once"));
                }
                let indexed = matches!((section, indexed_key(key)), ("christoffel", Some(("Gamma", _))) | ("omega", Some(("omega", _))));
                if !keys.contains(&key) && !indexed {
                    return Err(ConfigError::UnknownKey {
                        section: section.to_string(),
                        key: key.to_string(),
                    });
                }
            }
        }
        let get = |section: &'static str, key: &'static str| ini.get_from(Some(section), key);
        let require = |section: &'static str, key: &'static str| {
            get(section, key).ok_or(ConfigError::Missing { section, key })
        };

        let coords: Vec<String> = require("chart", "coords")?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let m = coords.len();
        for (k, c) in coords.iter().enumerate() {
            if c.is_empty() || !c.chars().all(|ch| ch.is_alphanumeric() || ch == '_') {
                return Err(invalid("chart", "coords", format!("`{c}` is not a coordinate name")));
            }
            if coords[..k].contains(c) {
                return Err(invalid("chart", "coords", format!("`{c}` repeated")));
            }
        }
        let axis_count = |key: &str, v: &[f64]| {
            if v.len() == m {
                Ok(())
            } else {
                Err(invalid("chart", key, format!("expected {m} values, got {}", v.len())))
            }
        };
        let lower = list("chart", "lower", require("chart", "lower")?)?;
        axis_count("lower", &lower)?;
        let upper = list("chart", "upper", require("chart", "upper")?)?;
        axis_count("upper", &upper)?;
        if lower.iter().zip(&upper).any(|(a, b)| a >= b) {
            return Err(invalid("chart", "upper", "every upper bound must exceed its lower bound"));
        }
        let grid_values = list("chart", "grid", get("chart", "grid").unwrap_or("64"))?;
        let grid: Vec<usize> = match grid_values.len() {
            1 => vec![grid_values[0]; m],
            _ => {
                axis_count("grid", &grid_values)?;
                grid_values
            }
        }
        .into_iter()
        .map(|g| {
            if g.fract() != 0.0 || g < 3.0 {
                Err(invalid("chart", "grid", "grid sizes must be integers >= 3"))
            } else {
                Ok(g as usize)
            }
        })
        .collect::<Result<_, _>>()?;

        let axis = |section: &str, key: &str, name: &str| {
            coords
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| invalid(section, key, format!("unknown coordinate `{name}`")))
        };
        let source = match get("connection", "source").unwrap_or("christoffel") {
            "christoffel" => {
                let bundle = match get("connection", "bundle").unwrap_or("tangent") {
                    "tangent" => BundleKind::Tangent,
                    "sym2" => BundleKind::Sym2,
                    other => return Err(invalid("connection", "bundle", format!("`{other}` is not tangent or sym2"))),
                };
                let mut entries = Vec::new();
                if let Some(props) = ini.section(Some("christoffel")) {
                    for (key, value) in props.iter() {
                        let (_, idx) = indexed_key(key).expect("checked above");
                        if idx.len() != 3 {
                            return Err(invalid("christoffel", key, "expected Gamma[upper][lower][lower]"));
                        }
                        let (i, mu, j) = (
                            axis("christoffel", key, idx[0])?,
                            axis("christoffel", key, idx[1])?,
                            axis("christoffel", key, idx[2])?,
                        );
                        entries.push((i, mu, j, value.to_string()));
                    }
                }
                Source::Christoffel { bundle, entries }
            }
            "omega" => {
                if get("connection", "bundle").is_some() {
                    return Err(invalid("connection", "bundle", "only meaningful with source = christoffel"));
                }
                let rank_text = require("omega", "rank")?;
                let rank = constant("omega", "rank", rank_text)?;
                if rank.fract() != 0.0 || rank < 1.0 {
                    return Err(invalid("omega", "rank", "must be a positive integer"));
                }
                let rank = rank as usize;
                let mut entries = Vec::new();
                for (key, value) in ini.section(Some("omega")).expect("rank present").iter() {
                    if key == "rank" {
                        continue;
                    }
                    let (_, idx) = indexed_key(key).expect("checked above");
                    if idx.len() != 3 {
                        return Err(invalid("omega", key, "expected omega[i][j][coordinate]"));
                    }
                    let fiber = |t: &str| {
                        t.parse::<usize>()
                            .ok()
                            .filter(|&v| (1..=rank).contains(&v))
                            .map(|v| v - 1)
                            .ok_or_else(|| invalid("omega", key, format!("fiber index `{t}` outside 1..={rank}")))
                    };
                    entries.push((fiber(idx[0])?, fiber(idx[1])?, axis("omega", key, idx[2])?, value.to_string()));
                }
                Source::Omega { rank, entries }
            }
            other => return Err(invalid("connection", "source", format!("`{other}` is not omega or christoffel"))),
        };

        let mut tolerances = Tolerances::default();
        for (key, slot) in [
            ("rank", &mut tolerances.rank),
            ("stab", &mut tolerances.stab),
            ("residual", &mut tolerances.residual),
        ] {
            if let Some(text) = ini.get_from(Some("tolerances"), key) {
                let v = constant("tolerances", key, text)?;
                if v <= 0.0 {
                    return Err(invalid("tolerances", key, "must be positive"));
                }
                *slot = v;
            }
        }

        let base = match get("base", "point") {
            Some(text) => {
                let p = list("base", "point", text)?;
                if p.len() != m {
                    return Err(invalid("base", "point", format!("expected {m} values")));
                }
                if p.iter().zip(lower.iter().zip(&upper)).any(|(x, (a, b))| x < a || x > b) {
                    return Err(invalid("base", "point", "outside the chart"));
                }
                p
            }
            None => lower.iter().zip(&upper).map(|(a, b)| 0.5 * (a + b)).collect(),
        };

        let transport = match (get("transport", "path"), get("transport", "vector")) {
            (None, None) => None,
            (Some(path), Some(vector)) => {
                let path: Vec<Vec<f64>> = path
                    .split(';')
                    .map(|v| {
                        let v = v.trim().trim_start_matches('(').trim_end_matches(')');
                        list("transport", "path", v)
                    })
                    .collect::<Result<_, _>>()?;
                if path.len() < 2 || path.iter().any(|v| v.len() != m) {
                    return Err(invalid("transport", "path", format!("need at least two vertices of {m} values")));
                }
                let inside = |v: &Vec<f64>| v.iter().zip(lower.iter().zip(&upper)).all(|(x, (a, b))| x >= a && x <= b);
                if let Some(v) = path.iter().find(|v| !inside(v)) {
                    return Err(invalid("transport", "path", format!("vertex {v:?} outside the chart")));
                }
                let mut options = TransportOptions::default();
                if let Some(text) = get("transport", "max_step") {
                    options.max_step = constant("transport", "max_step", text)?;
                    if options.max_step <= 0.0 {
                        return Err(invalid("transport", "max_step", "must be positive"));
                    }
                }
                Some(TransportSpec {
                    path,
                    vector: list("transport", "vector", vector)?,
                    options,
                })
            }
            (None, Some(_)) => return Err(ConfigError::Missing { section: "transport", key: "path" }),
            (Some(_), None) => return Err(ConfigError::Missing { section: "transport", key: "vector" }),
        };

        let config = JobConfig {
            coords,
            lower,
            upper,
            grid,
            source,
            tolerances,
            base,
            transport,
        };
        // expressions are checked against the coordinates now, not at first use
        let conn = config.connection_over(&config.chart()?)?;
        if let Some(t) = &config.transport {
            if t.vector.len() != conn.rank() {
                return Err(invalid(
                    "transport",
                    "vector",
                    format!("expected {} components, got {}", conn.rank(), t.vector.len()),
                ));
            }
        }
        Ok(config)
    }

    pub fn chart(&self) -> Result<Chart, ConfigError> {
        Ok(Chart::new(&self.coords, self.lower.clone(), self.upper.clone(), self.grid.clone())?)
    }

    fn field(&self, chart: &Chart, section: &str, text: &str) -> Result<ScalarField, ConfigError> {
        ScalarField::parse_shared(text, chart.coords().clone()).map_err(|e| invalid(section, text, e.to_string()))
    }

    /// Tangent-bundle connection from the Christoffel table, or an `omega`
    /// table whose rank equals the chart dimension.
    pub fn tangent_connection(&self, chart: &Chart) -> Result<Connection, ConfigError> {
        let m = chart.dim();
        match &self.source {
            Source::Christoffel { entries, .. } => {
                let mut gamma = vec![ScalarField::zero(chart.coords().clone()); m * m * m];
                for (i, mu, j, text) in entries {
                    gamma[(i * m + mu) * m + j] = self.field(chart, "christoffel", text)?;
                }
                Ok(connection_from_christoffel(gamma, chart.clone())?)
            }
            Source::Omega { rank, .. } if *rank == m => self.connection_over(chart),
            Source::Omega { rank, .. } => Err(invalid(
                "omega",
                "rank",
                format!("a tangent-bundle connection needs rank {m}, got {rank}"),
            )),
        }
    }

    /// The connection the job analyzes.
    pub fn connection_over(&self, chart: &Chart) -> Result<Connection, ConfigError> {
        match &self.source {
            Source::Christoffel { bundle, .. } => {
                let tm = self.tangent_connection(chart)?;
                Ok(match bundle {
                    BundleKind::Tangent => tm,
                    BundleKind::Sym2 => induce_sym2(&tm)?,
                })
            }
            Source::Omega { rank, entries } => {
                let m = chart.dim();
                let mut omega = vec![ScalarField::zero(chart.coords().clone()); rank * rank * m];
                for (i, j, mu, text) in entries {
                    omega[(i * rank + j) * m + mu] = self.field(chart, "omega", text)?;
                }
                Ok(Connection::new(chart.clone(), *rank, omega)?)
            }
        }
    }

    pub fn with_grid(mut self, n: usize) -> Result<Self, ConfigError> {
        if n < 3 {
            return Err(invalid("chart", "grid", "grid sizes must be integers >= 3"));
        }
        self.grid = vec![n; self.coords.len()];
        Ok(self)
    }

    pub fn with_tol_rank(mut self, t: f64) -> Result<Self, ConfigError> {
        if !(t > 0.0 && t < 1.0) {
            return Err(invalid("tolerances", "rank", "must lie in (0, 1)"));
        }
        self.tolerances.rank = t;
        Ok(self)
    }
}
