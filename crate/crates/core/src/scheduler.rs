//! Drift-aware scheduling: walk elapsed time geometrically, estimate accuracy
//! over Monte-Carlo drift instances, and train a new scaling-vector set
//! whenever the lower confidence bound falls below the accuracy floor.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::compensation::{ScalingVectorSet, SharedProjections};
use crate::data::LabeledDataset;
use crate::drift::{ConductanceMap, DriftModel};
use crate::error::{Error, Result};
use crate::evaluate::evaluate_accuracy;
use crate::rng::{derive_seed, time_key, Stream};
use crate::training::{train_set_at_time, TrainConfig, TrainContext, TrainLogRow};

/// Ten years in seconds.
pub const TEN_YEARS_S: f64 = 10.0 * 365.0 * 24.0 * 3600.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub a_thr: f64,
    pub t_max: f64,
    pub multiplier: f64,
    pub n_eval: usize,
    pub confidence_k: f64,
    /// Re-evaluate right after each trigger with the new set (recorded only).
    pub verify_after: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            a_thr: 0.9,
            t_max: TEN_YEARS_S,
            multiplier: 1.5,
            n_eval: 100,
            confidence_k: 3.0,
            verify_after: true,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a_thr > 0.0 && self.a_thr < 1.0) {
            return Err(Error::Config(format!("a_thr must lie in (0, 1), got {}", self.a_thr)));
        }
        if !(self.multiplier > 1.0) || !self.multiplier.is_finite() {
            return Err(Error::Config(format!("multiplier must exceed 1, got {}", self.multiplier)));
        }
        if !(self.t_max >= 1.0) || !self.t_max.is_finite() {
            return Err(Error::Config(format!("t_max must be at least 1 s, got {}", self.t_max)));
        }
        if self.n_eval < 2 {
            return Err(Error::Config(format!("n_eval must be >= 2, got {}", self.n_eval)));
        }
        if !(self.confidence_k >= 0.0) {
            return Err(Error::Config("confidence_k must be non-negative".into()));
        }
        Ok(())
    }

    /// Evaluation times `multiplier^j`, `j ≥ 1`, through the first one at or past `t_max`.
    pub fn visited_times(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut j = 0i32;
        loop {
            let t = self.multiplier.powi(j);
            if t >= self.t_max {
                break;
            }
            j += 1;
            out.push(self.multiplier.powi(j));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub t: f64,
    pub mu: f64,
    pub sigma: f64,
    pub n: usize,
}

impl EvalStats {
    /// Sample mean and unbiased standard deviation.
    pub fn from_samples(t: f64, acc: &[f64]) -> Result<Self> {
        if acc.len() < 2 {
            return Err(Error::Config(format!("need at least 2 samples, got {}", acc.len())));
        }
        let n = acc.len() as f64;
        let mu = acc.iter().sum::<f64>() / n;
        let var = acc.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / (n - 1.0);
        Ok(Self {
            t,
            mu,
            sigma: var.sqrt(),
            n: acc.len(),
        })
    }
}

/// `mu − k·sigma < a_thr`.
pub fn should_trigger(stats: &EvalStats, a_thr: f64, confidence_k: f64) -> bool {
    stats.mu - confidence_k * stats.sigma < a_thr
}

/// Accuracy statistics at a drift time with a given set active.
pub trait Evaluator {
    fn eval_stats(&self, t: f64, active: &ScalingVectorSet) -> Result<EvalStats>;
}

/// Produces the set for a newly triggered drift point.
pub trait SetTrainer {
    fn train(&mut self, t: f64, set_id: u32, previous: &ScalingVectorSet) -> Result<ScalingVectorSet>;
}

/// Monte-Carlo evaluator over independent drift instances of the backbone.
pub struct DriftEvaluator<'a> {
    pub backbone: &'a Backbone,
    pub projections: &'a SharedProjections,
    pub drift: &'a DriftModel,
    pub map: &'a ConductanceMap,
    pub dataset: &'a LabeledDataset,
    pub n_eval: usize,
    pub seed: u64,
}

impl DriftEvaluator<'_> {
    /// Seed of drift instance `i` at time `t`; shared by every set evaluated at `t`.
    pub fn instance_seed(&self, t: f64, i: usize) -> u64 {
        derive_seed(self.seed, Stream::EvalDrift, &[time_key(t), i as u64])
    }

    /// Per-instance accuracies, in instance order.
    pub fn accuracies(&self, t: f64, active: Option<&ScalingVectorSet>) -> Result<Vec<f64>> {
        if self.dataset.is_empty() {
            return Err(Error::Config("evaluation dataset is empty".into()));
        }
        let active = active.filter(|s| s.layers.iter().any(|l| l.b_vec.iter().any(|b| *b != 0.0)));
        (0..self.n_eval)
            .into_par_iter()
            .map(|i| {
                let d = self.backbone.inject(t, self.drift, self.map, self.instance_seed(t, i))?;
                let w = self.backbone.with_drift(&d);
                evaluate_accuracy(
                    &self.backbone.spec,
                    &w,
                    active.map(|s| (self.projections, s)),
                    self.backbone.scheme.act_bits,
                    self.dataset,
                )
            })
            .collect()
    }

    pub fn stats(&self, t: f64, active: Option<&ScalingVectorSet>) -> Result<EvalStats> {
        if self.n_eval < 2 {
            return Err(Error::Config(format!("n_eval must be >= 2, got {}", self.n_eval)));
        }
        EvalStats::from_samples(t, &self.accuracies(t, active)?)
    }
}

impl Evaluator for DriftEvaluator<'_> {
    fn eval_stats(&self, t: f64, active: &ScalingVectorSet) -> Result<EvalStats> {
        self.stats(t, Some(active))
    }
}

/// Trains each new set with drift injected per mini-batch.
pub struct DriftTrainer<'a> {
    pub ctx: TrainContext<'a>,
    pub dataset: &'a LabeledDataset,
    pub cfg: TrainConfig,
    pub log: Vec<TrainLogRow>,
}

impl SetTrainer for DriftTrainer<'_> {
    fn train(&mut self, t: f64, set_id: u32, previous: &ScalingVectorSet) -> Result<ScalingVectorSet> {
        let init = if self.cfg.warm_start {
            ScalingVectorSet {
                set_id,
                ..previous.clone()
            }
        } else {
            let rank = self.ctx.projections.rank;
            let c_outs: Vec<usize> = previous.layers.iter().map(|l| l.b_vec.len()).collect();
            ScalingVectorSet::initial(set_id, t, rank, &c_outs)
        };
        let (mut set, log) = train_set_at_time(t, self.ctx, self.dataset, &self.cfg, init)
            .map_err(|e| Error::Domain(format!("training the set at t={t} s failed: {e}")))?;
        set.set_id = set_id;
        self.log.extend(log);
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub t: f64,
    pub set_id: u32,
    /// Stats that caused the trigger (absent for the initial entry).
    pub before: Option<EvalStats>,
    /// Stats with the new set active, when verification is enabled.
    pub after: Option<EvalStats>,
}

/// One visited time of the walk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStep {
    pub stats: EvalStats,
    pub active_set_id: u32,
    pub triggered: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleRun {
    pub entries: Vec<ScheduleEntry>,
    pub steps: Vec<ScheduleStep>,
    pub sets: Vec<ScalingVectorSet>,
}

impl ScheduleRun {
    pub fn drift_points(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.t).collect()
    }
}

/// The scheduling loop. `initial` is attached at t = 1 without training.
pub fn run_schedule<E: Evaluator, T: SetTrainer>(
    cfg: &SchedulerConfig,
    initial: ScalingVectorSet,
    evaluator: &E,
    trainer: &mut T,
) -> Result<ScheduleRun> {
    cfg.validate()?;
    let mut sets = vec![ScalingVectorSet {
        set_id: 0,
        drift_time: 1.0,
        ..initial
    }];
    let mut entries = vec![ScheduleEntry {
        t: 1.0,
        set_id: 0,
        before: None,
        after: None,
    }];
    let mut steps = Vec::new();
    for t in cfg.visited_times() {
        let active = sets.last().unwrap();
        let stats = evaluator.eval_stats(t, active)?;
        let triggered = should_trigger(&stats, cfg.a_thr, cfg.confidence_k);
        steps.push(ScheduleStep {
            stats,
            active_set_id: active.set_id,
            triggered,
        });
        if !triggered {
            continue;
        }
        let id = sets.len() as u32;
        let mut set = trainer.train(t, id, active)?;
        set.set_id = id;
        set.drift_time = t;
        let after = if cfg.verify_after {
            Some(evaluator.eval_stats(t, &set)?)
        } else {
            None
        };
        entries.push(ScheduleEntry {
            t,
            set_id: id,
            before: Some(stats),
            after,
        });
        sets.push(set);
    }
    Ok(ScheduleRun { entries, steps, sets })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToleranceRow {
    pub tolerance_pct: f64,
    pub a_thr: f64,
    pub num_sets: usize,
}

pub const TOLERANCE_HEADER: &str = "tolerance_pct,a_thr,num_sets";

/// Runs one schedule per tolerance, with `a_thr = (1 − tolerance)·drift_free`.
pub fn sets_vs_tolerance<F>(tolerances_pct: &[f64], drift_free: f64, mut run: F) -> Result<Vec<ToleranceRow>>
where
    F: FnMut(f64) -> Result<usize>,
{
    if tolerances_pct.is_empty() {
        return Err(Error::Config("tolerance grid is empty".into()));
    }
    tolerances_pct
        .iter()
        .map(|&tol| {
            if !(0.0..=100.0).contains(&tol) {
                return Err(Error::Config(format!("tolerance {tol}% outside [0, 100]")));
            }
            let a_thr = (1.0 - tol / 100.0) * drift_free;
            let num_sets = if a_thr <= 0.0 { 1 } else { run(a_thr)? };
            Ok(ToleranceRow {
                tolerance_pct: tol,
                a_thr,
                num_sets,
            })
        })
        .collect()
}

pub fn write_tolerance_csv(path: &Path, rows: &[ToleranceRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut out = format!("{TOLERANCE_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.tolerance_pct, r.a_thr, r.num_sets));
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// `mu(t) = 1 − slope·ln(t / t_active)`, sigma = 0.
    struct LogDecay {
        slope: f64,
        /// Ignore the active set (decay measured from t = 1).
        absolute: bool,
    }

    impl Evaluator for LogDecay {
        fn eval_stats(&self, t: f64, active: &ScalingVectorSet) -> Result<EvalStats> {
            let origin = if self.absolute { 1.0 } else { active.drift_time };
            Ok(EvalStats {
                t,
                mu: 1.0 - self.slope * (t / origin).ln(),
                sigma: 0.0,
                n: 2,
            })
        }
    }

    struct Recorder(Vec<f64>);

    impl SetTrainer for Recorder {
        fn train(&mut self, t: f64, set_id: u32, _: &ScalingVectorSet) -> Result<ScalingVectorSet> {
            self.0.push(t);
            Ok(ScalingVectorSet::initial(set_id, t, 1, &[2]))
        }
    }

    fn initial() -> ScalingVectorSet {
        ScalingVectorSet::initial(0, 1.0, 1, &[2])
    }

    fn cfg(a_thr: f64) -> SchedulerConfig {
        SchedulerConfig {
            a_thr,
            verify_after: false,
            ..Default::default()
        }
    }

    /// Closed form for the resetting decay: a trigger every `m` steps where
    /// `m` is the least integer with `slope·m·ln 1.5 > 1 − a_thr`.
    fn closed_form(a_thr: f64, slope: f64, cfg: &SchedulerConfig) -> Vec<f64> {
        let m = ((1.0 - a_thr) / (slope * cfg.multiplier.ln())).floor() as i32 + 1;
        let last = (cfg.t_max.ln() / cfg.multiplier.ln()).ceil() as i32;
        let mut t = vec![1.0];
        t.extend((1..=last).filter(|j| j % m == 0).map(|j| cfg.multiplier.powi(j)));
        t
    }

    #[test]
    fn trigger_examples() {
        let s = |mu, sigma| EvalStats { t: 1.0, mu, sigma, n: 100 };
        assert!(should_trigger(&s(0.90, 0.01), 0.88, 3.0));
        assert!(!should_trigger(&s(0.88, 0.0), 0.88, 3.0));
        assert!(!should_trigger(&s(0.95, 0.01), 0.88, 3.0));
    }

    #[test]
    fn two_point_sample_std() {
        let s = EvalStats::from_samples(1.0, &[0.8, 0.9]).unwrap();
        assert!((s.mu - 0.85).abs() < 1e-15);
        assert!((s.sigma - 0.005f64.sqrt()).abs() < 1e-15);
        assert!((s.sigma - 0.0707106781).abs() < 1e-9);
        assert!(EvalStats::from_samples(1.0, &[0.5]).is_err());
    }

    #[test]
    fn visited_times_are_geometric_through_t_max() {
        let c = cfg(0.5);
        let v = c.visited_times();
        assert_eq!(&v[..3], &[1.5, 2.25, 3.375]);
        assert!(*v.last().unwrap() >= c.t_max);
        assert!(v[v.len() - 2] < c.t_max);
        for (j, t) in v.iter().enumerate() {
            assert_eq!(*t, 1.5f64.powi(j as i32 + 1));
        }
    }

    #[test]
    fn no_drop_gives_initial_entry_only() {
        let eval = LogDecay { slope: 0.0, absolute: true };
        let mut tr = Recorder(vec![]);
        let run = run_schedule(&cfg(0.9), initial(), &eval, &mut tr).unwrap();
        assert_eq!(run.drift_points(), vec![1.0]);
        assert!(tr.0.is_empty());
        assert_eq!(run.steps.len(), cfg(0.9).visited_times().len());
    }

    #[test]
    fn resetting_decay_matches_closed_form() {
        for a_thr in [0.97, 0.93, 0.9, 0.85, 0.8, 0.6] {
            let c = cfg(a_thr);
            let eval = LogDecay { slope: 0.05, absolute: false };
            let run = run_schedule(&c, initial(), &eval, &mut Recorder(vec![])).unwrap();
            assert_eq!(run.drift_points(), closed_form(a_thr, 0.05, &c), "a_thr {a_thr}");
        }
    }

    #[test]
    fn absolute_decay_triggers_from_the_crossing_on() {
        let c = cfg(0.8);
        let eval = LogDecay { slope: 0.05, absolute: true };
        let run = run_schedule(&c, initial(), &eval, &mut Recorder(vec![])).unwrap();
        // 1 − 0.05·j·ln 1.5 < 0.8  ⇔  j > 4 / ln 1.5 = 9.865…
        let expected: Vec<f64> = std::iter::once(1.0)
            .chain(c.visited_times().into_iter().filter(|t| *t >= 1.5f64.powi(10)))
            .collect();
        assert_eq!(run.drift_points(), expected);
    }

    #[test]
    fn new_set_is_active_at_the_next_step() {
        let c = cfg(0.97);
        let eval = LogDecay { slope: 0.05, absolute: false };
        let run = run_schedule(&c, initial(), &eval, &mut Recorder(vec![])).unwrap();
        let mut active = 0;
        for step in &run.steps {
            assert_eq!(step.active_set_id, active);
            if step.triggered {
                active += 1;
            }
        }
        assert!(active >= 2);
    }

    #[test]
    fn tolerance_table() {
        let c = cfg(0.5);
        let rows = sets_vs_tolerance(&[100.0, 10.0, 2.5], 0.95, |a| {
            let eval = LogDecay { slope: 0.05, absolute: false };
            Ok(run_schedule(&SchedulerConfig { a_thr: a, ..c }, initial(), &eval, &mut Recorder(vec![]))?
                .entries
                .len())
        })
        .unwrap();
        assert_eq!(rows[0].num_sets, 1);
        assert!(rows[1].num_sets <= rows[2].num_sets);
        assert!(sets_vs_tolerance(&[], 0.9, |_| Ok(1)).is_err());
    }

    #[test]
    fn verification_records_after_stats() {
        let c = SchedulerConfig {
            verify_after: true,
            ..cfg(0.97)
        };
        let eval = LogDecay { slope: 0.05, absolute: false };
        let run = run_schedule(&c, initial(), &eval, &mut Recorder(vec![])).unwrap();
        for e in &run.entries[1..] {
            assert_eq!(e.after.unwrap().mu, 1.0);
        }
    }

    proptest! {
        #[test]
        fn set_count_non_increasing_as_threshold_loosens(
            slope in 0.005f64..0.1,
            hi in 0.5f64..0.99,
        ) {
            let grid: Vec<f64> = (0..10).map(|i| hi - i as f64 * 0.04).collect();
            let mut prev = usize::MAX;
            for a in grid {
                let c = cfg(a.max(0.01));
                let eval = LogDecay { slope, absolute: false };
                let n = run_schedule(&c, initial(), &eval, &mut Recorder(vec![])).unwrap().entries.len();
                prop_assert!(n <= prev);
                prev = n;
            }
        }

        #[test]
        fn trigger_is_monotone_in_threshold(mu in 0.0f64..1.0, sigma in 0.0f64..0.2, a in 0.01f64..0.99, da in 0.0f64..0.5) {
            let s = EvalStats { t: 1.0, mu, sigma, n: 10 };
            if should_trigger(&s, a, 3.0) {
                prop_assert!(should_trigger(&s, a + da, 3.0));
            }
        }
    }
}
