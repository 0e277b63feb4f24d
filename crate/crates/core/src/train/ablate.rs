use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::info;

use super::config::TrainConfig;
use super::infer::evaluate_model;
use super::trainer::Trainer;
use crate::error::{Error, Result};
use crate::evaluate::{default_thresholds, EvalReport};
use crate::features::{Dataset, Subset};
use crate::localize::LocalizeConfig;

/// Averages reported per run, in column order.
pub const ABLATE_RANGES: [&str; 4] = ["0.1:0.7", "0.1:0.5", "0.3:0.7", "0.5:0.95"];

/// One trained-and-evaluated run of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct AblateRow {
    pub param: String,
    pub value: String,
    pub seed: u64,
    pub map_at_05: f64,
    /// Averages over [`ABLATE_RANGES`].
    pub averages: [f64; 4],
    pub final_loss: f64,
}

impl AblateRow {
    fn from_report(param: &str, value: &str, seed: u64, r: &EvalReport, final_loss: f64) -> Self {
        Self {
            param: param.to_string(),
            value: value.to_string(),
            seed,
            map_at_05: r.map_at(0.5).unwrap_or(f64::NAN),
            averages: ABLATE_RANGES.map(|k| r.average(k).unwrap_or(f64::NAN)),
            final_loss,
        }
    }
}

/// Config key addressed by a sweep parameter name (`K` is `k`).
pub fn sweep_key(param: &str) -> String {
    param.to_ascii_lowercase()
}

/// Trains one model per `(value, seed)` on the training videos of `ds` and
/// evaluates it on the test videos.
pub fn ablate(base: &TrainConfig, ds: &Dataset, param: &str, values: &[String], seeds: &[u64]) -> Result<Vec<AblateRow>> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config("a sweep needs at least one value and one seed".into()));
    }
    if ds.subset(Subset::Test).next().is_none() {
        return Err(Error::Data("sweeps evaluate on test videos and the dataset has none".into()));
    }
    let key = sweep_key(param);
    let mut rows = Vec::with_capacity(values.len() * seeds.len());
    for value in values {
        for &seed in seeds {
            let cfg = base.with_overrides(&[format!("{key}={value}"), format!("seed={seed}")])?;
            let mut t = Trainer::new(cfg.clone(), ds)?;
            let log = t.run()?;
            let final_loss = log.rows.last().map_or(f64::NAN, |r| r.losses.total);
            let (_, report) =
                evaluate_model(&t.state.params, &cfg, ds, Subset::Test, &LocalizeConfig::default(), &default_thresholds())?;
            let row = AblateRow::from_report(param, value, seed, &report, final_loss);
            info!("{param}={value} seed {seed}: mAP@0.5 {:.4} avg {:.4}", row.map_at_05, row.averages[0]);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// One line per run.
pub fn ablate_csv(rows: &[AblateRow]) -> String {
    let mut out = String::from("param,value,seed,map@0.5");
    for r in ABLATE_RANGES {
        let _ = write!(out, ",avg_{r}");
    }
    out.push_str(",final_loss\n");
    for r in rows {
        let _ = write!(out, "{},{},{},{}", r.param, r.value, r.seed, r.map_at_05);
        for a in r.averages {
            let _ = write!(out, ",{a}");
        }
        let _ = writeln!(out, ",{}", r.final_loss);
    }
    out
}

/// Seed means per value, in order of first appearance.
pub fn ablate_means(rows: &[AblateRow]) -> Vec<(String, usize, f64, [f64; 4])> {
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<String, (usize, f64, [f64; 4])> = BTreeMap::new();
    for r in rows {
        if !acc.contains_key(&r.value) {
            order.push(r.value.clone());
        }
        let e = acc.entry(r.value.clone()).or_insert((0, 0.0, [0.0; 4]));
        e.0 += 1;
        e.1 += r.map_at_05;
        for (s, a) in e.2.iter_mut().zip(r.averages) {
            *s += a;
        }
    }
    order
        .into_iter()
        .map(|v| {
            let (n, m, a) = acc[&v];
            (v, n, m / n as f64, a.map(|x| x / n as f64))
        })
        .collect()
}

/// Aligned plain-text table of the seed means, one row per value.
pub fn ablate_table(rows: &[AblateRow]) -> String {
    let param = rows.first().map_or("value", |r| r.param.as_str());
    let mut out = format!("{param:>14} {:>5} {:>9}", "seeds", "mAP@0.5");
    for r in ABLATE_RANGES {
        let _ = write!(out, " {:>9}", format!("avg{r}").chars().take(9).collect::<String>());
    }
    out.push('\n');
    for (v, n, m, a) in ablate_means(rows) {
        let _ = write!(out, "{v:>14} {n:>5} {:>9.4}", m);
        for x in a {
            let _ = write!(out, " {x:>9.4}");
        }
        out.push('\n');
    }
    out
}
