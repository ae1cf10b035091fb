//! The five verbs. Each returns `Ok(true)` on success and `Ok(false)` when a
//! contract check failed after its diagnostics were printed.

use std::fmt::Write as _;
use std::time::Instant;

use driftcomp::backbone::Backbone;
use driftcomp::compensation::{ScalingVectorSet, Variant};
use driftcomp::cost::{cost_report, CostReport, COST_HEADER};
use driftcomp::evaluate::normalized_accuracy;
use driftcomp::scheduler::{
    run_schedule, sets_vs_tolerance, write_tolerance_csv, DriftEvaluator, DriftTrainer, ScheduleEntry,
    ScheduleStep,
};
use driftcomp::training::{append_train_log, pretrain, TrainContext, TrainLogRow, TRAIN_LOG_HEADER};
use driftcomp::{CompensationArchive, Error, Result, SchedulerConfig};
use serde::Serialize;

use crate::config::RunConfig;
use crate::pipeline::*;

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<bool> {
    ensure_dir(&cfg.out_dir)?;
    let data = load_datasets(cfg)?;
    let spec = toy_spec(cfg, data.train.shape, data.train.classes)?;
    let drift = cfg.drift.model()?;
    let mut pcfg = cfg.pretrain;
    pcfg.seed = cfg.seed;
    let start = Instant::now();
    let (weights, losses) = pretrain(&spec, &data.train, &pcfg, &cfg.quant, &drift, &cfg.drift.map)?;
    let backbone = Backbone::quantize(&spec, &weights, cfg.quant)?;
    let ckpt = cfg.backbone_path();
    backbone.write(&ckpt)?;
    let reloaded = Backbone::read(&ckpt)?;
    let acc = drift_free_accuracy(&reloaded, &data.eval)?;

    let log = out_file(cfg, "pretrain_log.csv");
    let mut text = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(text, "{i},{l}").unwrap();
    }
    write_text(&log, &text)?;

    #[derive(Serialize)]
    struct Report<'a> {
        drift_free_accuracy: f64,
        epoch_losses: &'a [f64],
        parameters: usize,
        provenance: Provenance<'a>,
    }
    let mut provenance = Provenance::new("pretrain", cfg);
    provenance.record(&ckpt)?;
    provenance.record(&log)?;
    write_json(
        &out_file(cfg, "pretrain.json"),
        &Report {
            drift_free_accuracy: acc,
            epoch_losses: &losses,
            parameters: spec.param_count(),
            provenance,
        },
    )?;
    println!("backbone      {}", ckpt.display());
    println!("parameters    {}", spec.param_count());
    if let Some(l) = losses.last() {
        println!("final loss    {l:.4}");
    }
    println!("drift-free accuracy {acc:.4}  ({:.1} s)", start.elapsed().as_secs_f64());
    if acc < cfg.pretrain_min_accuracy {
        eprintln!(
            "error: drift-free accuracy {acc:.4} is below the required {:.4}; losses per epoch: {losses:?}",
            cfg.pretrain_min_accuracy
        );
        return Ok(false);
    }
    Ok(true)
}

/// Schedule file contents.
#[derive(Serialize)]
struct ScheduleDoc<'a> {
    drift_free_accuracy: f64,
    a_thr: f64,
    drift_points: Vec<f64>,
    archive: String,
    entries: &'a [ScheduleEntry],
    steps: &'a [ScheduleStep],
    provenance: Provenance<'a>,
}

pub fn cmd_schedule(cfg: &RunConfig) -> Result<bool> {
    if cfg.compensation.variant != Variant::VeraPlus {
        return Err(Error::Config(format!(
            "scheduling trains vera_plus sets only; {} is supported by `cost`",
            cfg.compensation.variant
        )));
    }
    ensure_dir(&cfg.out_dir)?;
    let data = load_datasets(cfg)?;
    let backbone = Backbone::read(&cfg.backbone_path())?;
    let drift = cfg.drift.model()?;
    let projections = projections_for(cfg, &backbone.spec)?;
    let a0 = drift_free_accuracy(&backbone, &data.eval)?;
    let sched = SchedulerConfig {
        a_thr: match cfg.schedule.a_thr_drop_pts {
            Some(p) => a0 - p / 100.0,
            None => cfg.scheduler.a_thr,
        },
        ..cfg.scheduler
    };
    sched.validate()?;
    let evaluator = DriftEvaluator {
        backbone: &backbone,
        projections: &projections,
        drift: &drift,
        map: &cfg.drift.map,
        dataset: &data.eval,
        n_eval: sched.n_eval,
        seed: cfg.seed,
    };
    let ctx = TrainContext {
        backbone: &backbone,
        projections: &projections,
        drift: &drift,
        map: &cfg.drift.map,
    };
    let train_cfg = driftcomp::TrainConfig {
        seed: cfg.seed,
        ..cfg.train
    };
    let c_outs: Vec<usize> = backbone.spec.compensated_dims().iter().map(|d| d.c_out).collect();
    let initial = ScalingVectorSet::initial(0, 1.0, projections.rank, &c_outs);

    let start = Instant::now();
    let mut trainer = DriftTrainer {
        ctx,
        dataset: &data.train,
        cfg: train_cfg,
        log: Vec::new(),
    };
    let run = run_schedule(&sched, initial.clone(), &evaluator, &mut trainer)?;

    let archive_path = cfg.archive_path();
    let archive = CompensationArchive {
        projections: projections.clone(),
        sets: run.sets.clone(),
    };
    archive.write(&archive_path)?;
    let log_path = out_file(cfg, "train_log.csv");
    write_train_log(&log_path, &trainer.log)?;
    let steps_path = out_file(cfg, "schedule_steps.csv");
    let mut steps = String::from("t_seconds,mu_acc,sigma_acc,active_set_id,triggered\n");
    for s in &run.steps {
        writeln!(
            steps,
            "{},{},{},{},{}",
            s.stats.t, s.stats.mu, s.stats.sigma, s.active_set_id, s.triggered
        )
        .unwrap();
    }
    write_text(&steps_path, &steps)?;

    let mut provenance = Provenance::new("schedule", cfg);
    provenance.record(&archive_path)?;
    provenance.record(&log_path)?;
    provenance.record(&steps_path)?;

    if !cfg.schedule.tolerance_grid_pct.is_empty() {
        let rows = sets_vs_tolerance(&cfg.schedule.tolerance_grid_pct, a0, |a_thr| {
            let c = SchedulerConfig {
                a_thr,
                verify_after: false,
                ..sched
            };
            let mut t = DriftTrainer {
                ctx,
                dataset: &data.train,
                cfg: train_cfg,
                log: Vec::new(),
            };
            Ok(run_schedule(&c, initial.clone(), &evaluator, &mut t)?.entries.len())
        })?;
        let p = out_file(cfg, "sets_vs_tolerance.csv");
        write_tolerance_csv(&p, &rows)?;
        provenance.record(&p)?;
    }

    write_json(
        &out_file(cfg, "schedule.json"),
        &ScheduleDoc {
            drift_free_accuracy: a0,
            a_thr: sched.a_thr,
            drift_points: run.drift_points(),
            archive: archive_path.file_name().unwrap().to_string_lossy().into_owned(),
            entries: &run.entries,
            steps: &run.steps,
            provenance,
        },
    )?;

    println!("drift-free accuracy {a0:.4}, a_thr {:.4}", sched.a_thr);
    println!("{:>14} {:>6} {:>10} {:>10} {:>10} {:>10}", "t_s", "set", "mu_before", "lcb_before", "mu_after", "sd_after");
    let k = sched.confidence_k;
    for e in &run.entries {
        let f = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        println!(
            "{:>14.4e} {:>6} {:>10} {:>10} {:>10} {:>10}",
            e.t,
            e.set_id,
            f(e.before.map(|s| s.mu)),
            f(e.before.map(|s| s.mu - k * s.sigma)),
            f(e.after.map(|s| s.mu)),
            f(e.after.map(|s| s.sigma))
        );
    }
    println!("{} drift points, {:.1} s", run.entries.len(), start.elapsed().as_secs_f64());
    Ok(true)
}

fn write_train_log(path: &std::path::Path, rows: &[TrainLogRow]) -> Result<()> {
    write_text(path, &format!("{TRAIN_LOG_HEADER}\n"))?;
    append_train_log(path, rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub t_seconds: f64,
    pub mu_acc: f64,
    pub sigma_acc: f64,
    pub normalized_acc: f64,
    pub active_set_id: u32,
    pub compensated: bool,
}

pub const SWEEP_HEADER: &str = "t_seconds,mu_acc,sigma_acc,normalized_acc,active_set_id,compensated";

pub fn cmd_sweep(cfg: &RunConfig) -> Result<bool> {
    ensure_dir(&cfg.out_dir)?;
    let data = load_datasets(cfg)?;
    let backbone = Backbone::read(&cfg.backbone_path())?;
    let drift = cfg.drift.model()?;
    let archive_path = cfg.archive_path();
    let archive = if cfg.paths.archive.is_some() || archive_path.exists() {
        Some(CompensationArchive::read(&archive_path)?)
    } else {
        None
    };
    let projections = match &archive {
        Some(a) => a.projections.clone(),
        None => projections_for(cfg, &backbone.spec)?,
    };
    let a0 = drift_free_accuracy(&backbone, &data.eval)?;
    let evaluator = DriftEvaluator {
        backbone: &backbone,
        projections: &projections,
        drift: &drift,
        map: &cfg.drift.map,
        dataset: &data.eval,
        n_eval: cfg.scheduler.n_eval,
        seed: cfg.seed,
    };
    let mut times = cfg.sweep.times.clone();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let mut rows = Vec::new();
    for &t in &times {
        let s = evaluator.stats(t, None)?;
        rows.push(SweepRow {
            t_seconds: t,
            mu_acc: s.mu,
            sigma_acc: s.sigma,
            normalized_acc: normalized_accuracy(s.mu, a0),
            active_set_id: 0,
            compensated: false,
        });
        if let Some(a) = &archive {
            let set = a.active_set(t)?;
            let s = evaluator.stats(t, Some(set))?;
            rows.push(SweepRow {
                t_seconds: t,
                mu_acc: s.mu,
                sigma_acc: s.sigma,
                normalized_acc: normalized_accuracy(s.mu, a0),
                active_set_id: set.set_id,
                compensated: true,
            });
        }
    }

    let mut provenance = Provenance::new("sweep", cfg);
    let csv = out_file(cfg, "sweep.csv");
    let mut text = format!("{SWEEP_HEADER}\n");
    for r in &rows {
        writeln!(
            text,
            "{},{},{},{},{},{}",
            r.t_seconds, r.mu_acc, r.sigma_acc, r.normalized_acc, r.active_set_id, r.compensated
        )
        .unwrap();
    }
    write_text(&csv, &text)?;
    provenance.record(&csv)?;
    for (name, comp) in [("uncompensated", false), ("compensated", true)] {
        let curve: Vec<&SweepRow> = rows.iter().filter(|r| r.compensated == comp).collect();
        if curve.is_empty() {
            continue;
        }
        let p = out_file(cfg, &format!("sweep_{name}.dat"));
        let mut dat = format!("# t_seconds mu_acc ({name})\n");
        for r in curve {
            writeln!(dat, "{} {}", r.t_seconds, r.mu_acc).unwrap();
        }
        write_text(&p, &dat)?;
        provenance.record(&p)?;
    }
    let gp = out_file(cfg, "sweep.gp");
    write_text(&gp, PLOT_SCRIPT)?;
    provenance.record(&gp)?;

    #[derive(Serialize)]
    struct Sidecar<'a> {
        drift_free_accuracy: f64,
        rows: &'a [SweepRow],
        provenance: Provenance<'a>,
    }
    write_json(
        &out_file(cfg, "sweep.json"),
        &Sidecar {
            drift_free_accuracy: a0,
            rows: &rows,
            provenance,
        },
    )?;

    println!("drift-free accuracy {a0:.4}");
    println!("{:>14} {:>8} {:>8} {:>8} {:>4} {:>5}", "t_s", "mu", "sigma", "norm", "set", "comp");
    for r in &rows {
        println!(
            "{:>14.4e} {:>8.4} {:>8.4} {:>8.4} {:>4} {:>5}",
            r.t_seconds, r.mu_acc, r.sigma_acc, r.normalized_acc, r.active_set_id, r.compensated
        );
    }
    Ok(true)
}

const PLOT_SCRIPT: &str = r#"# gnuplot -p sweep.gp
set logscale x
set xlabel "elapsed time (s)"
set ylabel "mean top-1 accuracy"
set key bottom left
plot "sweep_uncompensated.dat" using 1:2 with linespoints title "uncompensated", \
     "sweep_compensated.dat" using 1:2 with linespoints title "compensated"
"#;

pub fn cmd_cost(cfg: &RunConfig) -> Result<bool> {
    ensure_dir(&cfg.out_dir)?;
    let (topology, spec) = cost_spec(cfg)?;
    if cfg.cost.ranks.is_empty() || cfg.cost.set_counts.is_empty() {
        return Err(Error::Config("cost needs at least one rank and one set count".into()));
    }
    let mut reports: Vec<CostReport> = Vec::new();
    for &r in &cfg.cost.ranks {
        for &n in &cfg.cost.set_counts {
            for v in Variant::COMPARED {
                reports.push(cost_report(&spec, v, r, n, &cfg.cost.settings, &cfg.hardware)?);
            }
        }
    }
    let csv = out_file(cfg, "cost.csv");
    let mut text = format!("{COST_HEADER}\n");
    for r in &reports {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    write_text(&csv, &text)?;

    #[derive(Serialize)]
    struct Sidecar<'a> {
        topology: &'a str,
        conventions: [&'static str; 6],
        reports: &'a [CostReport],
        provenance: Provenance<'a>,
    }
    let mut provenance = Provenance::new("cost", cfg);
    provenance.record(&csv)?;
    write_json(
        &out_file(cfg, "cost.json"),
        &Sidecar {
            topology: &topology,
            conventions: [
                "one MAC = 2 ops; one Hadamard product element = 1 op",
                "backbone ops in RRAM, compensation ops in SRAM; only weight layers counted",
                "lora/vera compensate with K x K kernels, vera_plus with 1 x 1",
                "storage = (shared projections + num_sets x per-set vectors) x bits_comp / 8; 1 KB = 1000 B",
                "movement = one set plus the shared projections",
                "area = backbone bits / RRAM density + compensation bits / SRAM density; 1 Mb = 1e6 bits; approximate",
            ],
            reports: &reports,
            provenance,
        },
    )?;

    println!("topology {topology}, backbone weights {}", spec.weight_count());
    println!("{COST_HEADER}");
    print!("{text}", text = text.lines().skip(1).map(|l| format!("{l}\n")).collect::<String>());
    let ordered = reports.chunks(3).all(|c| {
        c[2].params_comp < c[1].params_comp.min(c[0].params_comp)
            && c[2].ops_sram < c[1].ops_sram.min(c[0].ops_sram)
            && c[2].storage_comp_bytes < c[1].storage_comp_bytes.min(c[0].storage_comp_bytes)
    });
    if !ordered {
        eprintln!("error: vera_plus is not the cheapest variant in every table");
    }
    Ok(ordered)
}

pub fn cmd_validate(cfg: &RunConfig) -> Result<bool> {
    let results = crate::validate::run_checks(cfg);
    println!("{:<30} {:<6} detail", "check", "status");
    for r in &results {
        println!("{:<30} {:<6} {}", r.name, if r.passed { "PASS" } else { "FAIL" }, r.detail);
    }
    let ok = results.iter().all(|r| r.passed);
    if std::fs::create_dir_all(&cfg.out_dir).is_ok() {
        #[derive(Serialize)]
        struct Report<'a> {
            passed: bool,
            checks: &'a [crate::validate::CheckResult],
            provenance: Provenance<'a>,
        }
        write_json(
            &out_file(cfg, "validate.json"),
            &Report {
                passed: ok,
                checks: &results,
                provenance: Provenance::new("validate", cfg),
            },
        )?;
    }
    if !ok {
        eprintln!("error: {} check(s) failed", results.iter().filter(|r| !r.passed).count());
    }
    Ok(ok)
}
