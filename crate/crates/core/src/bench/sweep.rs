use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{eval_quality, synth::SynthDatasetSpec, GaussianFit};
use crate::autodiff::Tensor;
use crate::controls::{ControlTarget, Task};
use crate::diffusion::{sample_with_model, SamplerConfig};
use crate::error::{Error, Result};
use crate::ito::{run_method, ItoConfig, ItoResult, Method, OptSteps};
use crate::scorenet::{load_checkpoint, Condition, DenoiserModel};
use crate::{BINS, FRAMES};

pub const SCHEMA_VERSION: u32 = 1;

/// One benchmark row. `control_metric` is MSE for the regression tasks and
/// frame accuracy for melody; `frechet` scores the cell's decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub task: String,
    pub method: String,
    pub m: String,
    pub t_decode: usize,
    pub k: usize,
    pub gamma: f64,
    pub w: f64,
    pub seed: u64,
    pub status: String,
    pub control_loss: f64,
    pub control_metric: f64,
    pub frechet: f64,
    pub forward_calls: u64,
    pub backward_calls: u64,
    pub accounted_units: u64,
    pub wall_clock_s: f64,
    pub error: String,
}

impl RunRecord {
    pub fn from_result(task: Task, config: &ItoConfig, r: &ItoResult, metric: f64, frechet: f64) -> Self {
        let calls = r.total_calls();
        Self {
            schema_version: SCHEMA_VERSION,
            task: task.name().into(),
            method: r.method.name().into(),
            m: if r.method == Method::Ditto { config.t_decode.to_string() } else { config.m.to_string() },
            t_decode: config.t_decode,
            k: config.k,
            gamma: if r.method == Method::Ditto2Cm { 1.0 } else { config.gamma },
            w: config.w,
            seed: config.seed,
            status: "ok".into(),
            control_loss: r.final_loss,
            control_metric: metric,
            frechet,
            forward_calls: calls.forward,
            backward_calls: calls.backward,
            accounted_units: r.accounted_units,
            wall_clock_s: r.wall_clock_s,
            error: String::new(),
        }
    }

    pub fn failed(task: Task, method: Method, config: &ItoConfig, err: &Error) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            task: task.name().into(),
            method: method.name().into(),
            m: config.m.to_string(),
            t_decode: config.t_decode,
            k: config.k,
            gamma: config.gamma,
            w: config.w,
            seed: config.seed,
            status: "failed".into(),
            control_loss: f64::NAN,
            control_metric: f64::NAN,
            frechet: f64::NAN,
            forward_calls: 0,
            backward_calls: 0,
            accounted_units: 0,
            wall_clock_s: f64::NAN,
            error: err.to_string(),
        }
    }
}

/// Appends records to a CSV file, writing the header only for a new file.
pub struct RecordAppender {
    writer: csv::Writer<File>,
}

impl RecordAppender {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let writer = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        Ok(Self { writer })
    }

    pub fn append(&mut self, record: &RunRecord) -> Result<()> {
        self.writer.serialize(record)?;
        self.writer.flush()?;
        Ok(())
    }
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let rows = rdr.deserialize().collect::<std::result::Result<Vec<RunRecord>, _>>()?;
    if let Some(r) = rows.iter().find(|r| r.schema_version != SCHEMA_VERSION) {
        return Err(Error::Parse {
            path: path.display().to_string(),
            detail: format!("schema version {} (expected {SCHEMA_VERSION})", r.schema_version),
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    pub method: String,
    /// Surrogate steps, a number or `"adaptive"`; ignored by the baseline.
    #[serde(default = "one")]
    pub m: String,
    pub t: usize,
}

fn one() -> String {
    "1".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub teacher: PathBuf,
    pub cm_student: Option<PathBuf>,
    pub ctm_student: Option<PathBuf>,
    pub tasks: Vec<String>,
    pub seeds: Vec<u64>,
    pub k: usize,
    pub w: f64,
    pub gamma: f64,
    pub lr: f64,
    pub workers: usize,
    pub timing_repeats: usize,
    pub reference_seed: u64,
    pub reference_count: usize,
    pub target_seed: u64,
    pub fad_samples: usize,
    pub cells: Vec<GridCell>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            teacher: "teacher.ckpt".into(),
            cm_student: None,
            ctm_student: None,
            tasks: vec!["intensity".into()],
            seeds: vec![0, 1, 2],
            k: crate::ito::DEFAULT_K,
            w: 4.0,
            gamma: crate::ito::DEFAULT_GAMMA,
            lr: crate::ito::DEFAULT_LR,
            workers: 1,
            timing_repeats: 3,
            reference_seed: 1,
            reference_count: 2000,
            target_seed: 7,
            fad_samples: 400,
            cells: Vec::new(),
        }
    }
}

impl SweepGrid {
    /// Reads a grid; relative model paths resolve against the grid's folder.
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let parse = |detail: String| Error::Parse {
            path: path.display().to_string(),
            detail,
        };
        let mut grid: Self = toml::from_str(&text).map_err(|e| parse(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [Some(&mut grid.teacher), grid.cm_student.as_mut(), grid.ctm_student.as_mut()]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        grid.validate().map_err(|e| parse(e.to_string()))?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() || self.seeds.is_empty() || self.tasks.is_empty() {
            return Err(Error::invalid("grid needs at least one cell, seed and task"));
        }
        if self.workers == 0 || self.timing_repeats == 0 {
            return Err(Error::invalid("workers and timing_repeats must be positive"));
        }
        for t in &self.tasks {
            t.parse::<Task>()?;
        }
        for c in &self.cells {
            let method: Method = c.method.parse()?;
            c.m.parse::<OptSteps>()?;
            let student = match method {
                Method::Ditto => continue,
                Method::Ditto2Cm => &self.cm_student,
                Method::Ditto2Ctm => &self.ctm_student,
            };
            if student.is_none() {
                return Err(Error::invalid(format!("cell {} needs a student checkpoint", c.method)));
            }
        }
        Ok(())
    }
}

/// Models a sweep can draw on.
pub struct ModelZoo {
    pub teacher: DenoiserModel,
    pub cm: Option<DenoiserModel>,
    pub ctm: Option<DenoiserModel>,
}

impl ModelZoo {
    pub fn load(grid: &SweepGrid) -> Result<Self> {
        let opt = |p: &Option<PathBuf>| p.as_deref().map(load_checkpoint).transpose();
        Ok(Self {
            teacher: load_checkpoint(&grid.teacher)?,
            cm: opt(&grid.cm_student)?,
            ctm: opt(&grid.ctm_student)?,
        })
    }

    pub fn for_method(&self, method: Method) -> Result<&DenoiserModel> {
        match method {
            Method::Ditto => Some(&self.teacher),
            Method::Ditto2Cm => self.cm.as_ref(),
            Method::Ditto2Ctm => self.ctm.as_ref(),
        }
        .ok_or_else(|| Error::invalid(format!("no model loaded for {method}")))
    }
}

/// Reference Gaussian fit of held-out synthetic data.
pub fn reference_fit(count: usize, seed: u64) -> Result<GaussianFit> {
    let data = SynthDatasetSpec::new(count, seed).generate();
    let x = Tensor::stack(&data.into_iter().map(|(x, _)| x).collect::<Vec<_>>())?;
    super::embed_fit(&x)
}

/// Fréchet distance of `n` samples drawn with the given decoder settings.
/// Conditions follow the tag distribution of the synthetic data.
pub fn sampler_quality(
    model: &DenoiserModel,
    steps: usize,
    gamma: f64,
    w: f64,
    n: usize,
    seed: u64,
    reference: &GaussianFit,
) -> Result<f64> {
    let z = Tensor::randn(&[n, BINS, FRAMES], &mut ChaCha8Rng::seed_from_u64(seed));
    let tags = SynthDatasetSpec::new(n, seed);
    let cond: Vec<Condition> = (0..n as u64).map(|i| tags.sample(i).1).collect();
    let mut cfg = SamplerConfig::evenly_spaced(model.schedule(), steps, w)?;
    if gamma > 0.0 && steps > 1 {
        cfg = cfg.with_gamma(gamma, seed.wrapping_add(1))?;
    }
    let (x, _) = sample_with_model(model, &z, &cond, &cfg)?;
    eval_quality(&x, reference)
}

/// Target and conditioning for a task, taken from held-out sample `seed`.
pub fn task_target(task: Task, target_seed: u64, seed: u64) -> Result<(ControlTarget, Condition)> {
    let (x, c) = SynthDatasetSpec::new(1, target_seed).sample(seed);
    let cond = if task == Task::Embed { Condition::Null } else { c };
    Ok((ControlTarget::from_reference(task, &x)?, cond))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn run_cell(
    zoo: &ModelZoo,
    grid: &SweepGrid,
    task: Task,
    cell: &GridCell,
    seed: u64,
    frechet: &BTreeMap<(String, String, usize), f64>,
) -> (ItoConfig, Method, Result<RunRecord>) {
    let method = cell.method.parse::<Method>().unwrap_or(Method::Ditto);
    let m = cell.m.parse::<OptSteps>().unwrap_or(OptSteps::Fixed(1));
    let mut config = ItoConfig {
        k: grid.k,
        m,
        t_decode: cell.t,
        gamma: grid.gamma,
        w: grid.w,
        seed,
        adam: crate::autodiff::AdamConfig::with_lr(grid.lr),
        ..ItoConfig::default()
    };
    let out = (|| {
        let (target, cond) = task_target(task, grid.target_seed, seed)?;
        config.cond = cond;
        let model = zoo.for_method(method)?;
        let first = run_method(model, method, &target, &config)?;
        let mut times = vec![first.wall_clock_s];
        for _ in 1..grid.timing_repeats {
            let again = run_method(model, method, &target, &config)?;
            if again.final_loss.to_bits() != first.final_loss.to_bits() {
                return Err(Error::invalid("repeated run changed its control loss"));
            }
            times.push(again.wall_clock_s);
        }
        let mut first = first;
        first.wall_clock_s = median(times);
        let metric = target.metric(&first.x0)?;
        let fd = frechet
            .get(&(cell.method.clone(), cell.m.clone(), cell.t))
            .copied()
            .unwrap_or(f64::NAN);
        Ok(RunRecord::from_result(task, &config, &first, metric, fd))
    })();
    (config, method, out)
}

/// Runs every (task, cell, seed) combination and appends the rows to
/// `out/results.csv` as they finish; failed runs become `failed` rows.
/// Returns all rows in grid order.
pub fn sweep(grid: &SweepGrid, zoo: &ModelZoo, out: &Path) -> Result<Vec<RunRecord>> {
    grid.validate()?;
    fs::create_dir_all(out)?;
    let reference = reference_fit(grid.reference_count, grid.reference_seed)?;

    let mut frechet = BTreeMap::new();
    for cell in &grid.cells {
        let key = (cell.method.clone(), cell.m.clone(), cell.t);
        if frechet.contains_key(&key) {
            continue;
        }
        let method: Method = cell.method.parse()?;
        let gamma = match method {
            Method::Ditto => 0.0,
            Method::Ditto2Cm => 1.0,
            Method::Ditto2Ctm => grid.gamma,
        };
        let fd = zoo
            .for_method(method)
            .and_then(|m| sampler_quality(m, cell.t, gamma, grid.w, grid.fad_samples, 11, &reference))
            .unwrap_or(f64::NAN);
        frechet.insert(key, fd);
    }

    let mut jobs = Vec::new();
    for t in &grid.tasks {
        let task: Task = t.parse()?;
        for cell in &grid.cells {
            for &seed in &grid.seeds {
                jobs.push((task, cell, seed));
            }
        }
    }
    let appender = Mutex::new(RecordAppender::open(&out.join("results.csv"))?);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(grid.workers)
        .build()
        .map_err(|e| Error::invalid(e.to_string()))?;
    let rows: Vec<Result<RunRecord>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(task, cell, seed)| {
                let (config, method, r) = run_cell(zoo, grid, task, cell, seed, &frechet);
                let row = r.unwrap_or_else(|e| RunRecord::failed(task, method, &config, &e));
                appender.lock().expect("appender poisoned").append(&row)?;
                Ok(row)
            })
            .collect()
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let summary = summarize(&rows);
    write_tradeoff_csv(&out.join("tradeoff.csv"), &summary)?;
    fs::write(out.join("tradeoff.svg"), tradeoff_svg(&summary))?;
    Ok(rows)
}

/// Per (task, method, M, T) aggregate of successful runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub task: String,
    pub method: String,
    pub m: String,
    pub t_decode: usize,
    pub runs: usize,
    pub failed: usize,
    pub control_metric: f64,
    pub frechet: f64,
    pub accounted_units: u64,
    pub wall_clock_s: f64,
    /// Baseline units (or seconds) divided by this cell's, for the same task.
    pub unit_speedup: f64,
    pub wall_speedup: f64,
}

pub fn summarize(rows: &[RunRecord]) -> Vec<TradeoffRow> {
    let mut order: Vec<(String, String, String, usize)> = Vec::new();
    let mut groups: BTreeMap<(String, String, String, usize), Vec<&RunRecord>> = BTreeMap::new();
    for r in rows {
        let key = (r.task.clone(), r.method.clone(), r.m.clone(), r.t_decode);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    let mut out: Vec<TradeoffRow> = order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let ok: Vec<&&RunRecord> = g.iter().filter(|r| r.status == "ok").collect();
            let mean = |f: fn(&RunRecord) -> f64| {
                if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
                }
            };
            TradeoffRow {
                task: key.0.clone(),
                method: key.1.clone(),
                m: key.2.clone(),
                t_decode: key.3,
                runs: ok.len(),
                failed: g.len() - ok.len(),
                control_metric: mean(|r| r.control_metric),
                frechet: mean(|r| r.frechet),
                accounted_units: ok.first().map_or(0, |r| r.accounted_units),
                wall_clock_s: if ok.is_empty() {
                    f64::NAN
                } else {
                    median(ok.iter().map(|r| r.wall_clock_s).collect())
                },
                unit_speedup: f64::NAN,
                wall_speedup: f64::NAN,
            }
        })
        .collect();
    let baselines: BTreeMap<String, (u64, f64)> = out
        .iter()
        .filter(|r| r.method == Method::Ditto.name() && r.runs > 0)
        .map(|r| (r.task.clone(), (r.accounted_units, r.wall_clock_s)))
        .collect();
    for r in &mut out {
        if let Some(&(units, secs)) = baselines.get(&r.task) {
            r.unit_speedup = units as f64 / r.accounted_units as f64;
            r.wall_speedup = secs / r.wall_clock_s;
        }
    }
    out
}

pub fn write_tradeoff_csv(path: &Path, rows: &[TradeoffRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Scatter of wall-clock seconds (log scale) against control metric, one
/// panel per task, points labelled `method M/T`.
pub fn tradeoff_svg(rows: &[TradeoffRow]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 56.0;
    let mut tasks: Vec<&str> = rows.iter().map(|r| r.task.as_str()).collect();
    tasks.dedup();
    let mut svg = String::new();
    let total_h = H * tasks.len().max(1) as f64;
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{total_h}" font-family="sans-serif" font-size="10">"#
    );
    for (i, task) in tasks.iter().enumerate() {
        let pts: Vec<&TradeoffRow> = rows
            .iter()
            .filter(|r| r.task == *task && r.wall_clock_s > 0.0 && r.control_metric.is_finite())
            .collect();
        let y0 = H * i as f64;
        let _ = writeln!(svg, r#"<g transform="translate(0,{y0})">"#);
        let _ = writeln!(svg, r#"<text x="{}" y="16" text-anchor="middle" font-size="12">{task}</text>"#, W / 2.0);
        let _ = writeln!(
            svg,
            r#"<rect x="{PAD}" y="{}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            PAD / 2.0,
            W - 1.5 * PAD,
            H - 1.5 * PAD
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">wall-clock seconds (log)</text>"#,
            W / 2.0,
            H - 6.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">control metric</text>"#,
            H / 2.0,
            H / 2.0
        );
        if !pts.is_empty() {
            let lx: Vec<f64> = pts.iter().map(|r| r.wall_clock_s.log10()).collect();
            let ys: Vec<f64> = pts.iter().map(|r| r.control_metric).collect();
            let span = |v: &[f64]| {
                let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if hi - lo < 1e-12 {
                    (lo - 0.5, hi + 0.5)
                } else {
                    (lo - 0.05 * (hi - lo), hi + 0.05 * (hi - lo))
                }
            };
            let (xl, xh) = span(&lx);
            let (yl, yh) = span(&ys);
            for (r, (x, y)) in pts.iter().zip(lx.iter().zip(&ys)) {
                let px = PAD + (x - xl) / (xh - xl) * (W - 1.5 * PAD);
                let py = PAD / 2.0 + (1.0 - (y - yl) / (yh - yl)) * (H - 1.5 * PAD);
                let _ = writeln!(svg, r#"<circle cx="{px:.1}" cy="{py:.1}" r="3"/>"#);
                let _ = writeln!(
                    svg,
                    r#"<text x="{:.1}" y="{:.1}">{} {}/{}</text>"#,
                    px + 5.0,
                    py - 4.0,
                    r.method,
                    r.m,
                    r.t_decode
                );
            }
            let _ = writeln!(svg, r#"<text x="{PAD}" y="{}">{:.3}s</text>"#, H - PAD + 12.0, 10f64.powf(xl));
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="end">{:.3}s</text>"#,
                W - PAD / 2.0,
                H - PAD + 12.0,
                10f64.powf(xh)
            );
            let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{yh:.3}</text>"#, PAD - 3.0, PAD / 2.0 + 8.0);
            let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{yl:.3}</text>"#, PAD - 3.0, H - PAD);
        }
        svg.push_str("</g>\n");
    }
    svg.push_str("</svg>\n");
    svg
}
