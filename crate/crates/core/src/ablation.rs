//! One-at-a-time sweeps over the consistency weight, the average-model
//! dropout and the number of decoding iterations.

use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::experiment::{train_and_evaluate, EvalReport, ExperimentData};

pub const SWEEPABLE: [&str; 3] = ["lambda", "dropout_average", "iterations"];

/// Parameter name and the values to try, in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub axes: Vec<(String, Vec<String>)>,
}

impl Grid {
    /// Lines of the form `lambda = 0.1, 0.3, 0.5`.
    pub fn parse(text: &str) -> Result<Grid> {
        let mut axes: Vec<(String, Vec<String>)> = Vec::new();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("bad grid line {raw:?}")))?;
            let key = k.trim();
            if !SWEEPABLE.contains(&key) {
                return Err(Error::Config(format!("cannot sweep {key:?}; choose from {SWEEPABLE:?}")));
            }
            if axes.iter().any(|(a, _)| a == key) {
                return Err(Error::Config(format!("{key} listed twice in grid")));
            }
            let values: Vec<String> = v.split(',').map(|s| s.trim().to_owned()).filter(|s| !s.is_empty()).collect();
            if values.is_empty() {
                return Err(Error::Config(format!("no values for {key}")));
            }
            axes.push((key.to_owned(), values));
        }
        Ok(Grid { axes })
    }

    pub fn load(path: &Path) -> Result<Grid> {
        Grid::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub value: String,
    pub outcome: std::result::Result<(f64, EvalReport), String>,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub parameter: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},bleu,length_accuracy,exact_match,final_loss,status\n", self.parameter);
        for r in &self.rows {
            let _ = match &r.outcome {
                Ok((loss, e)) => writeln!(
                    s,
                    "{},{:.2},{:.4},{:.4},{:.6},ok",
                    r.value, e.bleu.bleu, e.length_accuracy, e.exact_match, loss
                ),
                Err(msg) => writeln!(s, "{},,,,,failed: {}", r.value, msg.replace([',', '\n'], ";")),
            };
        }
        s
    }
}

/// Runs every grid point against `base` (all other settings unchanged, same
/// seed) and writes `ablation_<parameter>.csv` into `out_dir`. A failing
/// point is recorded in its row and the sweep continues.
pub fn run_ablation(grid: &Grid, base: &RunConfig, out_dir: &Path) -> Result<Vec<AblationTable>> {
    base.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let data = ExperimentData::load(&base.data, base.model.n_max)?;
    let mut tables = Vec::new();
    for (param, values) in &grid.axes {
        let mut rows = Vec::new();
        if param == "iterations" {
            let parsed: Vec<std::result::Result<usize, String>> =
                values.iter().map(|v| v.parse::<usize>().map_err(|_| format!("bad iteration count {v:?}"))).collect();
            let good: Vec<usize> = parsed.iter().filter_map(|p| p.as_ref().ok().copied()).collect();
            let result = train_and_evaluate(base, &data, &out_dir.join("iterations-base"), &good);
            let mut reports = match result {
                Ok((loss, r)) => Ok((loss.total, r.into_iter())),
                Err(e) => Err(e.to_string()),
            };
            for (v, p) in values.iter().zip(parsed) {
                let outcome = match (&mut reports, p) {
                    (_, Err(msg)) => Err(msg),
                    (Ok((loss, it)), Ok(_)) => Ok((*loss, it.next().expect("one report per count"))),
                    (Err(msg), Ok(_)) => Err(msg.clone()),
                };
                rows.push(AblationRow { value: v.clone(), outcome });
            }
        } else {
            for v in values {
                let mut cfg = base.clone();
                let dir = out_dir.join(format!("{param}-{v}"));
                let outcome = cfg
                    .set(param, v)
                    .and_then(|_| cfg.validate())
                    .and_then(|_| train_and_evaluate(&cfg, &data, &dir, &[cfg.decode.iterations]))
                    .map(|(loss, mut r)| (loss.total, r.remove(0)))
                    .map_err(|e| e.to_string());
                match &outcome {
                    Ok((_, r)) => info!("{param}={v}: BLEU {:.2}", r.bleu.bleu),
                    Err(e) => warn!("{param}={v} failed: {e}"),
                }
                rows.push(AblationRow { value: v.clone(), outcome });
            }
        }
        let table = AblationTable { parameter: param.clone(), rows };
        let path = out_dir.join(format!("ablation_{param}.csv"));
        std::fs::write(&path, table.to_csv()).map_err(|e| Error::io(&path, e))?;
        tables.push(table);
    }
    Ok(tables)
}
