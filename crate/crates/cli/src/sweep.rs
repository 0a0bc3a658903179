//! Cartesian ablation sweeps over config keys.

use std::fs;
use std::path::Path;

use log::info;
use ossl_core::eval::Metrics;
use ossl_core::pipeline::TrainConfig;
use rayon::prelude::*;

use crate::args::SyntheticArgs;
use crate::commands::run_single;
use crate::source::DataSource;
use crate::{CliError, CliResult};

pub const SUMMARY: &str = "summary.csv";

const KEYS: [&str; 8] = ["p", "n", "lambda", "eta", "lr", "ema", "seed", "cl"];

#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

/// Parses `key=v1,v2` terms. Keys may not repeat.
pub fn parse_grid(terms: &[String]) -> CliResult<Vec<Axis>> {
    let mut grid: Vec<Axis> = Vec::new();
    for term in terms {
        let (key, values) = term
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("ablation term {term:?} is not KEY=V1,V2,...")))?;
        if !KEYS.contains(&key) {
            return Err(CliError::usage(format!("unknown ablation key {key:?}; expected one of {KEYS:?}")));
        }
        if grid.iter().any(|a| a.key == key) {
            return Err(CliError::usage(format!("ablation key {key:?} given twice")));
        }
        let values: Vec<String> = values.split(',').map(str::trim).map(String::from).collect();
        if values.iter().any(String::is_empty) {
            return Err(CliError::usage(format!("empty value in ablation term {term:?}")));
        }
        grid.push(Axis {
            key: key.to_string(),
            values,
        });
    }
    Ok(grid)
}

/// All combinations, first axis varying slowest.
pub fn points(grid: &[Axis]) -> Vec<Vec<(String, String)>> {
    grid.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push((axis.key.clone(), v.clone()));
                    p
                })
            })
            .collect()
    })
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .parse()
        .map_err(|_| CliError::usage(format!("invalid value {value:?} for ablation key {key:?}")))
}

pub fn apply(cfg: &TrainConfig, point: &[(String, String)]) -> CliResult<TrainConfig> {
    let mut c = cfg.clone();
    for (k, v) in point {
        match k.as_str() {
            "p" => c.p = parse(k, v)?,
            "n" => c.n_candidates = parse(k, v)?,
            "lambda" => c.lambda = parse(k, v)?,
            "eta" => c.eta = parse(k, v)?,
            "lr" => c.lr = parse(k, v)?,
            "ema" => c.ema_decay = parse(k, v)?,
            "seed" => c.seed = parse(k, v)?,
            "cl" => {
                c.use_cl = match v.as_str() {
                    "on" => true,
                    "off" => false,
                    _ => return Err(CliError::usage(format!("cl takes on/off, got {v:?}"))),
                }
            }
            _ => unreachable!("keys are checked by parse_grid"),
        }
    }
    c.validate()?;
    Ok(c)
}

pub fn run_name(point: &[(String, String)]) -> String {
    point.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join("_")
}

/// Runs every grid point into `out/<name>` and writes `out/summary.csv`.
pub fn run_sweep(
    out: &Path,
    data: Option<&Path>,
    synth: &SyntheticArgs,
    base: &TrainConfig,
    grid: &[Axis],
    parallel: bool,
) -> CliResult<Vec<Metrics>> {
    let points = points(grid);
    let configs = points.iter().map(|p| apply(base, p)).collect::<CliResult<Vec<_>>>()?;
    fs::create_dir_all(out)?;
    info!("sweep of {} runs into {}", points.len(), out.display());
    let one = |(point, cfg): (&Vec<(String, String)>, &TrainConfig)| {
        let run = out.join(run_name(point));
        info!("run {}", run.display());
        run_single(&run, data, &DataSource::Synthetic(synth.config(cfg.seed)), cfg)
    };
    let metrics: Vec<Metrics> = if parallel {
        points.par_iter().zip(configs.par_iter()).map(one).collect::<CliResult<_>>()?
    } else {
        points.iter().zip(configs.iter()).map(one).collect::<CliResult<_>>()?
    };

    let mut csv = String::from("run,");
    for axis in grid {
        csv.push_str(&axis.key);
        csv.push(',');
    }
    csv.push_str("seed,auroc,accuracy,n_id,n_ood\n");
    for (point, m) in points.iter().zip(&metrics) {
        csv.push_str(&run_name(point));
        csv.push(',');
        for (_, v) in point {
            csv.push_str(v);
            csv.push(',');
        }
        csv.push_str(&format!("{},{},{},{},{}\n", m.seed, m.auroc, m.accuracy, m.n_id, m.n_ood));
    }
    fs::write(out.join(SUMMARY), csv)?;
    Ok(metrics)
}
