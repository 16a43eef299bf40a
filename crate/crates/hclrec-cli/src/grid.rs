//! Sweep grid file: per-axis value sets plus a cell budget. Scalar axes
//! contribute their values directly; the lambda and tau sets are expanded to
//! level triples and filtered to equal-gap monotone ones (descending for
//! lambda, ascending for tau), the only shapes the loss weighting accepts as
//! a coherent hierarchy.

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use hclrec::objective::is_equal_gap_monotone;
use hclrec::{Error, Result};

fn default_budget() -> usize {
    32
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    /// Refuse to run more cells than this.
    #[serde(default = "default_budget")]
    pub budget: usize,
    pub lambda: Option<Vec<f64>>,
    pub tau: Option<Vec<f64>>,
    pub d: Option<Vec<usize>>,
    pub batch_size: Option<Vec<usize>>,
    pub threshold: Option<Vec<usize>>,
}

impl GridFile {
    pub fn from_file(path: &Path) -> Result<GridFile> {
        let text = std::fs::read_to_string(path)?;
        let grid: GridFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if grid.lambda.as_deref() == Some(&[])
            || grid.tau.as_deref() == Some(&[])
            || grid.d.as_deref() == Some(&[])
            || grid.batch_size.as_deref() == Some(&[])
            || grid.threshold.as_deref() == Some(&[])
        {
            return Err(Error::Config("sweep grid axes must be non-empty".into()));
        }
        if grid.lambda.is_none()
            && grid.tau.is_none()
            && grid.d.is_none()
            && grid.batch_size.is_none()
            && grid.threshold.is_none()
        {
            return Err(Error::Config("sweep grid declares no axes".into()));
        }
        Ok(grid)
    }
}

/// One configuration patch; `None` leaves the base config's value alone.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub lambda: Option<Vec<f64>>,
    pub tau: Option<Vec<f64>>,
    pub d: Option<usize>,
    pub batch_size: Option<usize>,
    pub threshold: Option<usize>,
}

impl Cell {
    pub fn label(&self) -> String {
        let mut s = String::new();
        let mut part = |name: &str, value: String| {
            if !s.is_empty() {
                s.push(' ');
            }
            let _ = write!(s, "{name}={value}");
        };
        if let Some(l) = &self.lambda {
            part("lambda", join(l));
        }
        if let Some(t) = &self.tau {
            part("tau", join(t));
        }
        if let Some(d) = self.d {
            part("d", d.to_string());
        }
        if let Some(b) = self.batch_size {
            part("batch_size", b.to_string());
        }
        if let Some(t) = self.threshold {
            part("threshold", t.to_string());
        }
        s
    }
}

fn join(xs: &[f64]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// All ordered triples over `set` that form an equal-gap monotone sequence.
fn tuple_options(set: &[f64], levels: usize, ascending: bool) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let mut pick = vec![0usize; levels];
    loop {
        let tuple: Vec<f64> = pick.iter().map(|&i| set[i]).collect();
        if is_equal_gap_monotone(&tuple, ascending) {
            out.push(tuple);
        }
        let mut pos = levels;
        loop {
            if pos == 0 {
                return out;
            }
            pos -= 1;
            pick[pos] += 1;
            if pick[pos] < set.len() {
                break;
            }
            pick[pos] = 0;
        }
    }
}

/// Cartesian product of the declared axes.
pub fn enumerate_cells(grid: &GridFile, levels: usize) -> Result<Vec<Cell>> {
    let lambdas: Vec<Option<Vec<f64>>> = match &grid.lambda {
        Some(set) => {
            let opts = tuple_options(set, levels, false);
            if opts.is_empty() {
                return Err(Error::Config(format!(
                    "lambda set {set:?} has no equal-gap descending {levels}-tuples"
                )));
            }
            opts.into_iter().map(Some).collect()
        }
        None => vec![None],
    };
    let taus: Vec<Option<Vec<f64>>> = match &grid.tau {
        Some(set) => {
            let opts = tuple_options(set, levels, true);
            if opts.is_empty() {
                return Err(Error::Config(format!(
                    "tau set {set:?} has no equal-gap ascending {levels}-tuples"
                )));
            }
            opts.into_iter().map(Some).collect()
        }
        None => vec![None],
    };
    let scalar = |axis: &Option<Vec<usize>>| -> Vec<Option<usize>> {
        match axis {
            Some(values) => values.iter().copied().map(Some).collect(),
            None => vec![None],
        }
    };
    let ds = scalar(&grid.d);
    let batches = scalar(&grid.batch_size);
    let thresholds = scalar(&grid.threshold);

    let mut cells = Vec::new();
    for l in &lambdas {
        for t in &taus {
            for &d in &ds {
                for &b in &batches {
                    for &th in &thresholds {
                        cells.push(Cell {
                            lambda: l.clone(),
                            tau: t.clone(),
                            d,
                            batch_size: b,
                            threshold: th,
                        });
                    }
                }
            }
        }
    }
    Ok(cells)
}
