use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info};
use rand::seq::index::sample;

use super::adam::AdamConfig;
use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::infer::evaluate_model;
use super::model::{init_model, total_loss, BatchVideo, LossBreakdown, VideoDraws};
use crate::error::{Error, Result};
use crate::evaluate::{default_thresholds, EvalReport};
use crate::features::{Dataset, Subset};
use crate::localize::LocalizeConfig;
use crate::numcore::{Graph, NumError};
use crate::rng::{purpose, stream};

/// Held-out scores logged next to the losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSummary {
    pub map_at_05: f64,
    pub avg_01_07: f64,
}

impl EvalSummary {
    pub fn from_report(r: &EvalReport) -> Self {
        Self {
            map_at_05: r.map_at(0.5).unwrap_or(f64::NAN),
            avg_01_07: r.average("0.1:0.7").unwrap_or(f64::NAN),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    /// Number of updates applied when the row was recorded (1-based).
    pub step: usize,
    pub losses: LossBreakdown,
    pub eval: Option<EvalSummary>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    pub rows: Vec<MetricRow>,
}

impl MetricLog {
    pub fn header() -> String {
        let mut h = String::from("step");
        for c in LossBreakdown::COLUMNS {
            h.push(',');
            h.push_str(c);
        }
        h.push_str(",map@0.5,avg_map_0.1:0.7");
        h
    }

    pub fn to_csv(&self) -> String {
        let mut out = Self::header();
        out.push('\n');
        let cell = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for r in &self.rows {
            let _ = write!(out, "{}", r.step);
            for v in r.losses.values() {
                let _ = write!(out, ",{}", cell(v));
            }
            let _ = writeln!(
                out,
                ",{},{}",
                cell(r.eval.map(|e| e.map_at_05)),
                cell(r.eval.map(|e| e.avg_01_07))
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn last_eval(&self) -> Option<EvalSummary> {
        self.rows.iter().rev().find_map(|r| r.eval)
    }
}

/// Owns the parameters and optimizer state of one run.
pub struct Trainer<'a> {
    ds: &'a Dataset,
    train: Vec<usize>,
    pub state: Checkpoint,
    pub localize: LocalizeConfig,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, ds: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        let params = init_model(&cfg, &ds.text_bank)?;
        Self::resume(Checkpoint::new(cfg, params), ds)
    }

    pub fn resume(state: Checkpoint, ds: &'a Dataset) -> Result<Self> {
        state.verify()?;
        let cfg = &state.config;
        cfg.validate()?;
        if ds.dim != cfg.dim || ds.vlp_dim != cfg.vlp_dim || ds.num_classes() != cfg.num_classes {
            return Err(Error::Config(format!(
                "dataset is {}/{}/{} classes, config {}/{}/{}",
                ds.dim,
                ds.vlp_dim,
                ds.num_classes(),
                cfg.dim,
                cfg.vlp_dim,
                cfg.num_classes
            )));
        }
        let train: Vec<usize> = (0..ds.videos.len()).filter(|&i| ds.videos[i].subset == Subset::Train).collect();
        let need = if cfg.gamma > 0.0 { 2 } else { 1 };
        if train.len() < need {
            return Err(Error::Data(format!("{} training videos, need at least {need}", train.len())));
        }
        Ok(Self { ds, train, state, localize: LocalizeConfig::default() })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.state.config
    }

    /// Dataset indices of the videos used at the next step.
    fn batch_indices(&self) -> Vec<usize> {
        let cfg = self.config();
        let n = cfg.batch_size.min(self.train.len());
        let mut rng = stream(cfg.seed, &[purpose::BATCH, self.state.rng.next_step]);
        sample(&mut rng, self.train.len(), n).into_iter().map(|i| self.train[i]).collect()
    }

    /// One optimizer update; returns the losses before the update.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let cfg = self.state.config.clone();
        let step = self.state.rng.next_step;
        let idx = self.batch_indices();
        let batch: Vec<BatchVideo> = idx
            .iter()
            .enumerate()
            .map(|(slot, &i)| {
                let mut rng = stream(cfg.seed, &[purpose::SAMPLING, step, slot as u64]);
                BatchVideo::sample(&self.ds.videos[i], &cfg, Some(&mut rng))
            })
            .collect::<Result<_>>()?;
        let mut draws: Vec<VideoDraws> = (0..batch.len()).map(|slot| VideoDraws::for_step(&cfg, step, slot as u64)).collect();

        let mut g = Graph::new();
        let p = self.state.params.bind(&mut g);
        let diverged = |detail: String| Error::Diverged { step: step as usize, detail };
        let loss = total_loss(&mut g, &p, &self.ds.text_bank, &cfg, &batch, &mut draws).map_err(|e| match e {
            Error::Num(NumError::NonFinite { .. }) | Error::NonFinite(_) => diverged(e.to_string()),
            e => e,
        })?;
        let b = loss.breakdown;
        if !b.total.is_finite() {
            return Err(diverged(format!("loss terms {b:?}")));
        }
        let grads = p.collect(&g.backward(loss.loss)?);
        if let Some((name, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
            return Err(diverged(format!("non-finite gradient for {name}")));
        }
        let adam = AdamConfig { lr: cfg.lr, beta1: cfg.adam_beta1, beta2: cfg.adam_beta2, eps: cfg.adam_eps };
        self.state.optimizer.step(&mut self.state.params, &grads, &adam)?;
        self.state.step += 1;
        self.state.rng.next_step += 1;
        debug!("step {} total {:.5}", self.state.step, b.total);
        Ok(b)
    }

    /// Held-out evaluation with the current parameters.
    pub fn evaluate(&self) -> Result<Option<EvalReport>> {
        if self.ds.subset(Subset::Test).next().is_none() {
            return Ok(None);
        }
        let (_, report) = evaluate_model(
            &self.state.params,
            self.config(),
            self.ds,
            Subset::Test,
            &self.localize,
            &default_thresholds(),
        )?;
        Ok(Some(report))
    }

    /// Runs until `until` updates have been applied (capped at the configured
    /// step count), evaluating every `eval_every` steps and after the last one.
    pub fn run_until(&mut self, until: usize) -> Result<MetricLog> {
        let cfg = self.config().clone();
        let until = until.min(cfg.steps);
        let mut log = MetricLog::default();
        while self.state.step < until {
            let losses = self.step()?;
            let s = self.state.step;
            let periodic = cfg.eval_every > 0 && s % cfg.eval_every == 0;
            let eval = if periodic || s == cfg.steps {
                self.evaluate()?.map(|r| EvalSummary::from_report(&r))
            } else {
                None
            };
            if let Some(e) = eval {
                info!("step {s}: loss {:.4}, mAP@0.5 {:.4}, avg {:.4}", losses.total, e.map_at_05, e.avg_01_07);
            }
            log.rows.push(MetricRow { step: s, losses, eval });
        }
        Ok(log)
    }

    pub fn run(&mut self) -> Result<MetricLog> {
        self.run_until(self.config().steps)
    }
}

/// Trains from scratch for `cfg.steps` updates.
pub fn train(cfg: TrainConfig, ds: &Dataset) -> Result<(Checkpoint, MetricLog)> {
    let mut t = Trainer::new(cfg, ds)?;
    let log = t.run()?;
    Ok((t.state, log))
}
