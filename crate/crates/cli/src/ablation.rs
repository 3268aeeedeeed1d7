//! Ablation grids: named cells over training toggles, repeated over seeds,
//! with ordinal verdicts that are recomputed from the per-run CSVs.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sgtc::annotation::Strategy;
use sgtc::dataset::Manifest;
use sgtc::metrics::{aggregate, parse_metrics_csv};
use sgtc::objectives::AlphaMode;
use sgtc::semantic::PromptPreset;

use crate::commands::{evaluate_bundle, prepare_dataset, train_on};
use crate::config::{DatasetConfig, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::provenance::{record, write_atomic};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const VERDICTS_FILE: &str = "verdicts.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ERROR_FILE: &str = "error.txt";

/// One grid cell: the factors it changes relative to the base experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sgal_enabled: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tvdt_enabled: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<PromptPreset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<AlphaMode>,
}

/// Passes when `mean(better) - mean(worse) >= margin` and every run of
/// both cells succeeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictSpec {
    pub better: String,
    pub worse: String,
    #[serde(default)]
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationPlan {
    pub name: String,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Maximum number of runs in flight.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    pub base: ExperimentConfig,
    pub cells: Vec<CellSpec>,
    #[serde(default)]
    pub verdicts: Vec<VerdictSpec>,
}

fn default_parallelism() -> usize {
    1
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl AblationPlan {
    pub fn parse(text: &str) -> Result<Self> {
        let plan: Self = toml::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.len() < 2 {
            return Err(CliError::Config("an ablation plan needs at least two cells".into()));
        }
        if self.seeds.is_empty() || self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(CliError::Config("seeds must be non-empty and distinct".into()));
        }
        if self.parallelism == 0 {
            return Err(CliError::Config("parallelism must be >= 1".into()));
        }
        let mut names = BTreeSet::new();
        for c in &self.cells {
            if !valid_name(&c.name) {
                return Err(CliError::Config(format!("cell name {:?} must be [A-Za-z0-9_-]+", c.name)));
            }
            if !names.insert(c.name.as_str()) {
                return Err(CliError::Config(format!("duplicate cell name {:?}", c.name)));
            }
        }
        for v in &self.verdicts {
            for n in [&v.better, &v.worse] {
                if !names.contains(n.as_str()) {
                    return Err(CliError::Config(format!("verdict names unknown cell {n:?}")));
                }
            }
            if !v.margin.is_finite() {
                return Err(CliError::Config("verdict margin must be finite".into()));
            }
        }
        for s in &self.seeds {
            for c in &self.cells {
                self.run_config(c, *s)?;
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Runtime(format!("cannot serialize plan: {e}")))
    }

    pub fn run_dir(&self, cell: &str, seed: u64) -> PathBuf {
        self.output_dir.join("cells").join(cell).join(format!("seed_{seed}"))
    }

    fn data_root(&self, seed: u64) -> PathBuf {
        self.output_dir.join("datasets").join(format!("seed_{seed}"))
    }

    /// Dataset configuration shared by every cell of one seed.
    fn seed_config(&self, seed: u64) -> ExperimentConfig {
        let mut cfg = self.base.clone();
        cfg.output_dir = self.data_root(seed);
        if let DatasetConfig::Phantom { seed: ds, .. } = &mut cfg.dataset {
            *ds = ds.wrapping_add(seed);
        }
        cfg
    }

    /// Fully resolved configuration of one run.
    pub fn run_config(&self, cell: &CellSpec, seed: u64) -> Result<ExperimentConfig> {
        let mut cfg = self.seed_config(seed);
        cfg.output_dir = self.run_dir(&cell.name, seed);
        if let Some(v) = cell.sgal_enabled {
            cfg.train.semantic.enabled = v;
        }
        if let Some(v) = cell.tvdt_enabled {
            cfg.train.tvdt_enabled = v;
        }
        if let Some(v) = cell.strategy {
            cfg.strategy = v;
        }
        if let Some(v) = cell.prompt {
            cfg.prompt = v;
        }
        if let Some(v) = cell.alpha {
            cfg.train.alpha.mode = v;
        }
        cfg.train.seed = seed;
        cfg.train.net_seeds = [3 * seed + 1, 3 * seed + 2, 3 * seed + 3];
        cfg.resolved()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub name: String,
    /// Mean test Dice of each seed's run, `None` if the run failed.
    pub per_seed: Vec<Option<f64>>,
    pub mean: f64,
    /// Population standard deviation over successful seeds.
    pub std: f64,
}

impl CellSummary {
    pub fn failed(&self) -> usize {
        self.per_seed.iter().filter(|v| v.is_none()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub spec: VerdictSpec,
    pub better_mean: f64,
    pub worse_mean: f64,
    pub diff: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationOutcome {
    pub cells: Vec<CellSummary>,
    pub verdicts: Vec<Verdict>,
}

impl AblationOutcome {
    pub fn failed_verdicts(&self) -> usize {
        self.verdicts.iter().filter(|v| !v.pass).count()
    }

    pub fn cell(&self, name: &str) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.name == name)
    }
}

/// Mean test Dice recorded in a run's metrics CSV.
pub fn run_dice(path: &Path) -> Result<f64> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let rows = parse_metrics_csv(&text)?;
    if rows.is_empty() {
        return Err(CliError::Runtime(format!("{} has no rows", path.display())));
    }
    let dice: Vec<f64> = rows.iter().map(|r| r.dice).collect();
    Ok(aggregate(&dice).mean)
}

/// Rebuilds the summary and verdicts from the per-run CSVs alone.
pub fn summarize(plan: &AblationPlan) -> Result<AblationOutcome> {
    let mut cells = Vec::with_capacity(plan.cells.len());
    for c in &plan.cells {
        let mut per_seed = Vec::with_capacity(plan.seeds.len());
        for &s in &plan.seeds {
            let path = plan.run_dir(&c.name, s).join(METRICS_FILE);
            per_seed.push(if path.exists() { Some(run_dice(&path)?) } else { None });
        }
        let ok: Vec<f64> = per_seed.iter().flatten().copied().collect();
        let agg = aggregate(&ok);
        cells.push(CellSummary {
            name: c.name.clone(),
            per_seed,
            mean: agg.mean,
            std: agg.std,
        });
    }
    let find = |n: &str| cells.iter().find(|c| c.name == n).expect("validated cell name");
    let verdicts = plan
        .verdicts
        .iter()
        .map(|v| {
            let (b, w) = (find(&v.better), find(&v.worse));
            let diff = b.mean - w.mean;
            Verdict {
                spec: v.clone(),
                better_mean: b.mean,
                worse_mean: w.mean,
                diff,
                pass: b.failed() == 0 && w.failed() == 0 && diff >= v.margin,
            }
        })
        .collect();
    Ok(AblationOutcome { cells, verdicts })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "failed".into(), |x| x.to_string())
}

pub fn summary_csv(plan: &AblationPlan, outcome: &AblationOutcome) -> String {
    let mut s = String::from("cell,n_ok,n_failed,mean_dice,std_dice");
    for seed in &plan.seeds {
        let _ = write!(s, ",seed_{seed}");
    }
    s.push('\n');
    for c in &outcome.cells {
        let _ = write!(s, "{},{},{},{},{}", c.name, c.per_seed.len() - c.failed(), c.failed(), c.mean, c.std);
        for v in &c.per_seed {
            let _ = write!(s, ",{}", fmt_opt(*v));
        }
        s.push('\n');
    }
    s
}

pub fn verdicts_csv(outcome: &AblationOutcome) -> String {
    let mut s = String::from("better,worse,margin,better_mean,worse_mean,diff,pass\n");
    for v in &outcome.verdicts {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            v.spec.better, v.spec.worse, v.spec.margin, v.better_mean, v.worse_mean, v.diff, v.pass
        );
    }
    s
}

/// Parses `summary.csv` back into per-cell rows.
pub fn parse_summary_csv(text: &str) -> Result<Vec<CellSummary>> {
    let parse_err = |line: usize, message: String| sgtc::Error::Parse { line, message };
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(parse_err(1, "empty summary".into()).into());
    };
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 5 || cols[..5] != ["cell", "n_ok", "n_failed", "mean_dice", "std_dice"] {
        return Err(parse_err(1, format!("unexpected header {header:?}")).into());
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() {
            return Err(parse_err(i + 1, format!("expected {} fields, found {}", cols.len(), f.len())).into());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| parse_err(i + 1, format!("{s:?}: {e}")));
        let mut per_seed = Vec::new();
        for v in &f[5..] {
            per_seed.push(if *v == "failed" { None } else { Some(num(v)?) });
        }
        out.push(CellSummary {
            name: f[0].to_string(),
            per_seed,
            mean: num(f[3])?,
            std: num(f[4])?,
        });
    }
    if out.is_empty() {
        return Err(parse_err(1, "summary has no cells".into()).into());
    }
    Ok(out)
}

fn run_one(plan: &AblationPlan, cell: &CellSpec, seed: u64, manifest: &Manifest) -> Result<f64> {
    let cfg = plan.run_config(cell, seed)?;
    let dir = cfg.output_dir.clone();
    let trainer = train_on(&cfg, &plan.seed_config(seed).manifest_path(), manifest, &dir, None)?;
    let report = evaluate_bundle(trainer.bundle(), manifest, cfg.eval.fusion)?;
    write_atomic(&dir.join(METRICS_FILE), report.to_csv().as_bytes())?;
    Ok(report.dice.mean)
}

/// Runs every cell under every seed, then writes the summary and verdicts.
/// A failing run is recorded in its directory and counted, not fatal.
pub fn run_plan(plan: &AblationPlan) -> Result<AblationOutcome> {
    plan.validate()?;
    fs::create_dir_all(&plan.output_dir).map_err(|e| CliError::io(&plan.output_dir, e))?;
    record(&plan.output_dir, "plan", &plan.to_toml()?, &[])?;

    let mut manifests = Vec::with_capacity(plan.seeds.len());
    for &s in &plan.seeds {
        manifests.push(prepare_dataset(&plan.seed_config(s))?);
    }
    let jobs: Vec<(usize, usize)> = (0..plan.seeds.len())
        .flat_map(|si| (0..plan.cells.len()).map(move |ci| (si, ci)))
        .collect();
    for (si, ci) in &jobs {
        let dir = plan.run_dir(&plan.cells[*ci].name, plan.seeds[*si]);
        for stale in [METRICS_FILE, ERROR_FILE] {
            let _ = fs::remove_file(dir.join(stale));
        }
    }

    let next = AtomicUsize::new(0);
    let errors = Mutex::new(Vec::new());
    let worker = || loop {
        let j = next.fetch_add(1, Ordering::SeqCst);
        let Some(&(si, ci)) = jobs.get(j) else { break };
        let (cell, seed) = (&plan.cells[ci], plan.seeds[si]);
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| run_one(plan, cell, seed, &manifests[si])))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                Err(CliError::Runtime(format!("run panicked: {msg}")))
            });
        match result {
            Ok(d) => log::info!("{} seed {seed}: dice {d:.4} in {:.1?}", cell.name, t0.elapsed()),
            Err(e) => {
                log::error!("{} seed {seed} failed: {e}", cell.name);
                let dir = plan.run_dir(&cell.name, seed);
                let _ = fs::create_dir_all(&dir);
                let _ = fs::write(dir.join(ERROR_FILE), format!("{e}\n"));
                errors.lock().expect("error list").push((cell.name.clone(), seed));
            }
        }
    };
    std::thread::scope(|scope| {
        for _ in 0..plan.parallelism.min(jobs.len()) {
            scope.spawn(worker);
        }
    });

    let outcome = summarize(plan)?;
    write_atomic(&plan.output_dir.join(SUMMARY_FILE), summary_csv(plan, &outcome).as_bytes())?;
    write_atomic(&plan.output_dir.join(VERDICTS_FILE), verdicts_csv(&outcome).as_bytes())?;
    Ok(outcome)
}
