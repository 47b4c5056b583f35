use std::path::PathBuf;

use serde::Serialize;

use mupar_core::coordcheck::{
    entry_size_law_check, run_coord_check, CoordCheckConfig, EntrySizeLaw, Label, StepFit, Verdict,
};
use mupar_core::io::{fmt_f64, write_csv, write_json};
use mupar_core::numcore::{label, SeededRng};
use mupar_core::parametrize::Scheme;
use mupar_core::transfer::primer::PrimerProblem;
use mupar_core::transfer::{
    best_summary, mu_transfer, reverse_transfer, summarize, sweep as run_sweep,
    wider_is_better_scan, Experiment, HpPoint, HpSummary, SweepRecord, TransferChecks,
};
use mupar_core::{Error, Result};

use crate::config::RunConfig;
use crate::plotdata::{write_lr_loss, write_sweep};

/// Resolved runtime settings.
pub struct Env {
    pub workers: usize,
    pub output_dir: PathBuf,
}

impl Env {
    fn path(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}

fn experiment(cfg: &RunConfig) -> Result<Experiment> {
    let exp = Experiment::new(cfg.experiment()?.clone())?;
    Ok(match cfg.scheme {
        Some(s) => exp.with_scheme(s),
        None => exp,
    })
}

fn default_hp() -> HpPoint {
    HpPoint::new()
}

#[derive(Serialize)]
struct CoordCheckSummary<'a> {
    widths: &'a [usize],
    steps: usize,
    seeds: &'a [u64],
    tol: f64,
    diverged_widths: &'a [usize],
    fits: &'a [StepFit],
    labels: &'a [(String, Label)],
    verdict: Verdict,
}

pub fn coordcheck(cfg: &RunConfig, env: &Env) -> Result<()> {
    let exp = experiment(cfg)?;
    let section = cfg.coordcheck()?;
    let template = &exp.spec.model;
    let base = template.base_width();
    if let Some(w) = section.widths.iter().find(|&&w| w == 0 || w % base != 0) {
        return Err(Error::Config(format!(
            "coordcheck width {w} is not a multiple of the base width {base}"
        )));
    }
    let hp = cfg.hp.clone().unwrap_or_else(default_hp);
    let optimizer = hp.apply_optimizer(&exp.spec.optimizer)?;
    let family_kind = optimizer.family();
    let depth = cfg.scale.map_or(template.depth(), |s| s.depth);
    let family = |w: usize, seed: u64| {
        let mut m = template.at(w / base, depth)?;
        hp.apply_model(m.hp_mut())?;
        m.build(family_kind, &SeededRng::new(seed, label("init")))
    };
    let cc = CoordCheckConfig {
        widths: section.widths.clone(),
        steps: section.steps,
        batch_size: section.batch_size,
        seq_len: section.seq_len,
        seeds: cfg.seeds.clone(),
        tol: section.tol,
    };
    let report = run_coord_check(&family, &optimizer, &exp.train_source(), &cc, env.workers)?;
    report.write_csv(&env.path("coordcheck.csv"))?;
    write_json(
        &env.path("coordcheck.json"),
        &CoordCheckSummary {
            widths: &report.widths,
            steps: report.steps,
            seeds: &report.seeds,
            tol: report.tol,
            diverged_widths: &report.diverged_widths,
            fits: &report.fits,
            labels: &report.labels,
            verdict: report.verdict,
        },
    )?;
    for (name, l) in &report.labels {
        println!("{name}: {l:?}");
    }
    println!("verdict: {:?}", report.verdict);
    Ok(())
}

fn sweep_widths(exp: &Experiment, cfg: &RunConfig, env: &Env) -> Result<Vec<SweepRecord>> {
    let scale = cfg.scale()?;
    let widths = if cfg.widths.is_empty() {
        vec![scale.width_mult]
    } else {
        cfg.widths.clone()
    };
    let mut records = Vec::new();
    for w in widths {
        records.extend(run_sweep(
            exp,
            cfg.search()?,
            &scale.with_width(w),
            &cfg.seeds,
            env.workers,
        )?);
    }
    Ok(records)
}

fn write_records(
    env: &Env,
    records: &[SweepRecord],
    cfg: &RunConfig,
    base_width: usize,
) -> Result<()> {
    write_sweep(&env.path("sweep.csv"), records)?;
    write_lr_loss(&env.path("lr_vs_loss.csv"), records, cfg.metric, base_width)
}

pub fn sweep(cfg: &RunConfig, env: &Env) -> Result<()> {
    let exp = experiment(cfg)?;
    let records = sweep_widths(&exp, cfg, env)?;
    write_records(env, &records, cfg, exp.spec.model.base_width())?;
    let mut best: Vec<HpSummary> = Vec::new();
    let mut widths: Vec<usize> = records.iter().map(|r| r.scale.width_mult).collect();
    widths.dedup();
    for w in widths {
        let at_w: Vec<SweepRecord> = records
            .iter()
            .filter(|r| r.scale.width_mult == w)
            .cloned()
            .collect();
        match best_summary(&at_w, cfg.metric) {
            Ok(b) => {
                println!("width x{w}: best {} ({})", b.hp, fmt_f64(b.mean));
                best.push(b);
            }
            Err(Error::NoViableHp) => println!("width x{w}: every trial diverged"),
            Err(e) => return Err(e),
        }
    }
    write_json(&env.path("best.json"), &best)?;
    if best.is_empty() {
        return Err(Error::NoViableHp);
    }
    Ok(())
}

pub fn transfer(cfg: &RunConfig, env: &Env) -> Result<()> {
    let exp = experiment(cfg)?;
    let proxy = cfg.scale()?;
    let target = cfg.target()?;
    let search = cfg.search()?;
    let records = run_sweep(&exp, search, &proxy, &cfg.seeds, env.workers)?;
    write_records(env, &records, cfg, exp.spec.model.base_width())?;
    let best = best_summary(&records, cfg.metric)?.hp;
    let naive_sp = if cfg.transfer.naive_sp {
        let sp = run_sweep(
            &exp.with_scheme(Scheme::Sp),
            search,
            &proxy,
            &cfg.seeds,
            env.workers,
        )?;
        Some(best_summary(&sp, cfg.metric)?.hp)
    } else {
        None
    };
    let checks = TransferChecks {
        naive_sp,
        oracle: cfg.transfer.oracle.then(|| search.clone()),
    };
    let (_, report) = mu_transfer(
        &exp,
        &best,
        &target,
        &cfg.seeds,
        cfg.metric,
        &checks,
        env.workers,
    )?;
    write_json(&env.path("transfer_report.json"), &report)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "proxy best {best}; target loss {}",
        fmt_f64(report.target_loss)
    );
    if let Some(o) = &report.oracle {
        println!(
            "oracle {} loss {} (ratio {:.4})",
            o.best,
            fmt_f64(o.loss),
            o.ratio
        );
    }
    if let Some(l) = report.naive_sp_loss {
        println!("naive SP loss {}", fmt_f64(l));
    }
    Ok(())
}

pub fn widthscan(cfg: &RunConfig, env: &Env) -> Result<()> {
    let exp = experiment(cfg)?;
    let report = wider_is_better_scan(
        &exp,
        cfg.hp()?,
        &cfg.scale()?,
        cfg.widths()?,
        &cfg.widthscan.checkpoints,
        &cfg.seeds,
        cfg.widthscan.band,
        env.workers,
    )?;
    write_json(&env.path("widthscan.json"), &report)?;
    let base = exp.spec.model.base_width();
    let rows = report
        .checkpoints
        .iter()
        .zip(&report.mean_loss)
        .flat_map(|(c, row)| {
            report
                .width_mults
                .iter()
                .zip(row)
                .map(move |(w, l)| vec![c.to_string(), (w * base).to_string(), fmt_f64(*l)])
        });
    write_csv(
        &env.path("widthscan.csv"),
        &["step", "width", "mean_loss"],
        rows,
    )?;
    println!(
        "violations per checkpoint {:?}; monotone: {}",
        report.violations,
        report.monotone()
    );
    Ok(())
}

pub fn reverse(cfg: &RunConfig, env: &Env) -> Result<()> {
    let exp = experiment(cfg)?;
    let section = cfg.reverse()?;
    let scale = cfg.scale()?;
    let optimum = match (section.optimum, &cfg.search) {
        (Some(o), _) => Some(o),
        (None, Some(search)) => {
            let sim = exp.with_simulated_width(Some(section.to_width));
            let records = run_sweep(&sim, search, &scale, &cfg.seeds, env.workers)?;
            let o = summarize(&records, cfg.metric)
                .into_iter()
                .map(|s| s.mean)
                .filter(|m| m.is_finite())
                .fold(f64::INFINITY, f64::min);
            o.is_finite().then_some(o)
        }
        (None, None) => None,
    };
    let report = reverse_transfer(
        &exp,
        cfg.hp()?,
        &scale,
        section.from_width,
        section.to_width,
        optimum,
        &cfg.seeds,
        env.workers,
    )?;
    write_json(&env.path("reverse_report.json"), &report)?;
    println!(
        "{} of {} seeds unstable at simulated width {}",
        report.unstable_seeds(),
        report.outcomes.len(),
        report.to_width
    );
    Ok(())
}

pub fn primer(cfg: &RunConfig, env: &Env) -> Result<()> {
    let p = &cfg.primer;
    let grid = p.grid.values()?;
    if p.n.is_empty() {
        return Err(Error::Config("primer needs at least one n".into()));
    }
    let mut rows = Vec::new();
    for &n in &p.n {
        let mut rng = SeededRng::new(p.seed, label("primer")).fork(n as u64);
        let problem = PrimerProblem::new(p.f, n, p.samples, &mut rng)?;
        let (i, values) = if p.fixed.is_empty() {
            problem.argmin(&grid)?
        } else {
            problem.argmin_partial(&grid, &p.fixed)?
        };
        println!("n={n}: alpha*={}", fmt_f64(grid[i]));
        rows.push(vec![
            p.f.to_string(),
            n.to_string(),
            fmt_f64(grid[i]),
            fmt_f64(values[i]),
        ]);
    }
    write_csv(
        &env.path("primer.csv"),
        &["f", "n", "alpha_star", "objective"],
        rows,
    )
}

pub fn lawcheck(cfg: &RunConfig, env: &Env) -> Result<()> {
    let l = &cfg.lawcheck;
    let mut rng = SeededRng::new(l.seed, label("laws"));
    let laws: Vec<EntrySizeLaw> = l
        .cases
        .iter()
        .map(|c| entry_size_law_check(c.kind, &l.n, c.correlated, l.reps, &mut rng))
        .collect::<Result<_>>()?;
    let kind = |law: &EntrySizeLaw| {
        serde_json::to_value(law.kind).map(|v| v.as_str().unwrap_or_default().to_string())
    };
    let mut points = Vec::new();
    let mut fits = Vec::new();
    for law in &laws {
        let k = kind(law)?;
        for (n, size) in &law.points {
            points.push(vec![
                k.clone(),
                law.correlated.to_string(),
                n.to_string(),
                fmt_f64(*size),
            ]);
        }
        fits.push(vec![
            k.clone(),
            law.correlated.to_string(),
            fmt_f64(law.fit.slope),
            fmt_f64(law.expected_slope),
            fmt_f64(law.fit.residual),
        ]);
        println!(
            "{k} (correlated={}): slope {:.3}, expected {}",
            law.correlated, law.fit.slope, law.expected_slope
        );
    }
    write_csv(
        &env.path("lawcheck.csv"),
        &["kind", "correlated", "n", "coord_size"],
        points,
    )?;
    write_csv(
        &env.path("lawcheck_fits.csv"),
        &["kind", "correlated", "slope", "expected_slope", "residual"],
        fits,
    )
}
