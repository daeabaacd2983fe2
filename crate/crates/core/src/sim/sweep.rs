use std::path::Path;

use rayon::prelude::*;
use toml::{Table, Value};

use super::config::ScenarioConfig;
use super::engine::run_scenario;
use super::metrics::RunMetrics;
use super::SimError;

pub const SWEEP_CSV: &str = "sweep.csv";

/// Axes of a sweep: dotted config keys with the values to try. Every array
/// in the grid file is an axis; nested tables give dotted keys. Axes from a
/// file are ordered by key, and the last axis varies fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    axes: Vec<(String, Vec<Value>)>,
}

fn flatten(
    prefix: &str,
    table: &Table,
    out: &mut Vec<(String, Vec<Value>)>,
) -> Result<(), SimError> {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out)?,
            Value::Array(values) if values.is_empty() => {
                return Err(SimError::Grid(format!("axis {key} has no values")));
            }
            Value::Array(values) => out.push((key, values.clone())),
            _ => return Err(SimError::Grid(format!("axis {key} must be an array"))),
        }
    }
    Ok(())
}

impl Grid {
    pub fn new(axes: Vec<(String, Vec<Value>)>) -> Result<Self, SimError> {
        if axes.is_empty() {
            return Err(SimError::Grid("grid has no axes".into()));
        }
        if let Some((k, _)) = axes.iter().find(|(_, v)| v.is_empty()) {
            return Err(SimError::Grid(format!("axis {k} has no values")));
        }
        Ok(Self { axes })
    }

    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let table: Table = toml::from_str(text).map_err(|e| SimError::Grid(e.to_string()))?;
        let mut axes = Vec::new();
        flatten("", &table, &mut axes)?;
        Self::new(axes)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Grid(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.axes.iter().map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|(_, v)| v.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cartesian product, last axis varying fastest.
    pub fn cells(&self) -> Vec<Vec<(String, Value)>> {
        let mut cells = vec![Vec::new()];
        for (key, values) in &self.axes {
            cells = cells
                .into_iter()
                .flat_map(|prefix| {
                    values.iter().map(move |v| {
                        let mut c: Vec<(String, Value)> = prefix.clone();
                        c.push((key.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        cells
    }
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<(), String> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut t = table;
    for p in parts {
        t = t
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| format!("{p} in {key} is not a table"))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

/// `base` with the cell's assignments applied and validated.
pub fn apply_cell(
    base: &ScenarioConfig,
    cell: &[(String, Value)],
) -> Result<ScenarioConfig, SimError> {
    let mut table = Table::try_from(base).map_err(|e| SimError::Config(e.to_string()))?;
    for (k, v) in cell {
        set_path(&mut table, k, v.clone()).map_err(SimError::Config)?;
    }
    let mut config: ScenarioConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| SimError::Config(e.to_string()))?;
    config.output.escrow_files = false;
    config.validate()?;
    Ok(config)
}

/// Unknown keys and mistyped values are grid errors; values that only fail
/// validation are left to the individual cells.
fn check_axes(base: &ScenarioConfig, grid: &Grid) -> Result<(), SimError> {
    let base = Table::try_from(base).map_err(|e| SimError::Config(e.to_string()))?;
    for (key, values) in &grid.axes {
        let mut table = base.clone();
        set_path(&mut table, key, values[0].clone()).map_err(SimError::Grid)?;
        table
            .try_into::<ScenarioConfig>()
            .map_err(|e| SimError::Grid(format!("axis `{key}`: {e}")))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub assignments: Vec<(String, Value)>,
    pub outcome: Result<RunMetrics, String>,
}

/// One paired run per grid cell. A failing cell is recorded and the rest
/// still run.
pub fn run_matrix(base: &ScenarioConfig, grid: &Grid) -> Result<Vec<CellResult>, SimError> {
    if grid.is_empty() {
        return Err(SimError::Grid("empty grid".into()));
    }
    check_axes(base, grid)?;
    Ok(grid
        .cells()
        .into_par_iter()
        .map(|assignments| {
            let outcome = apply_cell(base, &assignments)
                .and_then(|c| run_scenario(&c))
                .map_err(|e| e.to_string());
            if let Err(e) = &outcome {
                log::warn!("sweep cell {assignments:?} failed: {e}");
            }
            CellResult {
                assignments,
                outcome,
            }
        })
        .collect())
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// The consolidated table: one row per cell.
pub fn sweep_csv(grid: &Grid, cells: &[CellResult]) -> Result<Vec<u8>, SimError> {
    let io = |e: csv::Error| SimError::Output(e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = vec!["cell".into()];
    header.extend(grid.keys().map(str::to_string));
    header.extend(
        [
            "acc_no_attack",
            "acc_attacked",
            "acc_defended",
            "acc_loc",
            "rate_false",
            "epochs_to_last_eviction",
            "error",
        ]
        .map(str::to_string),
    );
    w.write_record(&header).map_err(io)?;
    for (i, cell) in cells.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(cell.assignments.iter().map(|(_, v)| render(v)));
        match &cell.outcome {
            Ok(m) => {
                row.extend([
                    m.acc_no_attack.to_string(),
                    m.acc_attacked.to_string(),
                    m.acc_defended.to_string(),
                    m.acc_loc.to_string(),
                    m.rate_false.to_string(),
                    m.epochs_to_last_eviction.to_string(),
                    String::new(),
                ]);
            }
            Err(e) => {
                row.extend(std::iter::repeat_n(String::new(), 6));
                row.push(e.clone());
            }
        }
        w.write_record(&row).map_err(io)?;
    }
    w.into_inner().map_err(|e| SimError::Output(e.to_string()))
}
