//! Configuration-driven experiment runner: scene generation, per-policy
//! active loops, aggregation, policy comparison and plot series.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::active::{run_active_loop, EstimatorConfig, OrientationSource, Policy, StepRecord, Trajectory};
use crate::geom::CameraIntrinsics;
use crate::measure::{write_records, NoiseProfile};
use crate::orientation::ComponentSnapshot;
use crate::scene::{
    generate_scene, hemisphere_catalog, make_cyclic_symmetry, synthetic_object, ObjectKind, ObjectModel,
    SymmetryGroup, SyntheticParams, ViewpointCatalog, WorkspaceBox,
};
use crate::template::{build_templates, TemplateCacheKey, TemplateSet};

/// Environment variable overriding the configured output directory.
pub const OUT_DIR_ENV: &str = "MVPOSE_OUT_DIR";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("summaries do not share settings:\n{0}")]
    Mismatch(String),
    #[error("{0}")]
    Input(String),
}

fn cfg_err(field: impl Into<String>, message: impl Into<String>) -> HarnessError {
    HarnessError::Config { field: field.into(), message: message.into() }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io { path: path.display().to_string(), message: e.to_string() }
}

/// An object in the experiment: a synthetic part or a point-cloud file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectSpec {
    Box { x: f64, y: f64, z: f64 },
    Lathe { radius_bottom: f64, radius_top: f64, height: f64, order: u32 },
    AsymmetricBracket { width: f64, depth: f64, height: f64, thickness: f64 },
    /// `x y z` lines in meters; symmetry is a cyclic group (order 1 if absent).
    Points { name: String, path: String, symmetry_axis: Option<[f64; 3]>, symmetry_order: Option<u32> },
}

impl ObjectSpec {
    pub fn build(&self, params: &SyntheticParams) -> Result<ObjectModel, String> {
        let synth = |k: ObjectKind| synthetic_object(&k, params).map_err(|e| e.to_string());
        match self.clone() {
            ObjectSpec::Box { x, y, z } => synth(ObjectKind::Box { x, y, z }),
            ObjectSpec::Lathe { radius_bottom, radius_top, height, order } => {
                synth(ObjectKind::Lathe { radius_bottom, radius_top, height, order })
            }
            ObjectSpec::AsymmetricBracket { width, depth, height, thickness } => {
                synth(ObjectKind::AsymmetricBracket { width, depth, height, thickness })
            }
            ObjectSpec::Points { name, path, symmetry_axis, symmetry_order } => {
                let text = fs::read_to_string(&path).map_err(|e| format!("{path}: {e}"))?;
                let symmetry = match symmetry_order {
                    None | Some(1) => SymmetryGroup::trivial(),
                    Some(n) => make_cyclic_symmetry(&symmetry_axis.unwrap_or([0.0, 0.0, 1.0]).into(), n)
                        .map_err(|e| e.to_string())?,
                };
                ObjectModel::from_xyz_text(name, &text, symmetry, params.canonical_distance, params.canonical_roi)
                    .map_err(|e| e.to_string())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CatalogConfig {
    pub center: [f64; 3],
    pub radius: f64,
    pub rings: usize,
    pub per_ring: usize,
    pub intrinsics: CameraIntrinsics,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        CatalogConfig { center: [0.0; 3], radius: 0.6, rings: 3, per_ring: 12, intrinsics: CameraIntrinsics::default() }
    }
}

impl CatalogConfig {
    pub fn build(&self) -> Result<ViewpointCatalog, String> {
        hemisphere_catalog(&self.center.into(), self.radius, self.rings, self.per_ring, &self.intrinsics)
            .map_err(|e| e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplateConfig {
    pub n_views: usize,
    pub n_inplane: usize,
    /// Directory for template bank files; `None` disables caching.
    pub cache_dir: Option<String>,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        TemplateConfig { n_views: 300, n_inplane: 36, cache_dir: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Scene label used in the aggregate table.
    pub name: String,
    pub objects: Vec<ObjectSpec>,
    pub synthetic: SyntheticParams,
    pub catalog: CatalogConfig,
    pub workspace: WorkspaceBox,
    pub objects_per_scene: usize,
    pub noise: NoiseProfile,
    pub policies: Vec<Policy>,
    /// View budget per trajectory, including the two bootstrap views.
    pub views: usize,
    pub seeds: Vec<u64>,
    pub estimator: EstimatorConfig,
    pub templates: TemplateConfig,
    pub output_dir: String,
    /// Also write the raw measurement streams for replay.
    pub write_measurements: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "default".into(),
            objects: vec![ObjectSpec::Box { x: 0.04, y: 0.03, z: 0.02 }],
            synthetic: SyntheticParams::default(),
            catalog: CatalogConfig::default(),
            workspace: WorkspaceBox::default(),
            objects_per_scene: 1,
            noise: NoiseProfile::default(),
            policies: Policy::ALL.to_vec(),
            views: 6,
            seeds: (0..10).collect(),
            estimator: EstimatorConfig::default(),
            templates: TemplateConfig::default(),
            output_dir: "mvpose_out".into(),
            write_measurements: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_json(&text)
    }

    /// Checks every field, reporting the first offending one by path.
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.is_empty() {
            return Err(cfg_err("seeds", "must list at least one seed"));
        }
        if self.views < 2 {
            return Err(cfg_err("views", format!("budget must be at least 2, got {}", self.views)));
        }
        if self.objects.is_empty() {
            return Err(cfg_err("objects", "must list at least one object"));
        }
        if self.policies.is_empty() {
            return Err(cfg_err("policies", "must list at least one policy"));
        }
        if self.objects_per_scene == 0 {
            return Err(cfg_err("objects_per_scene", "must be at least 1"));
        }
        let catalog = self.catalog.build().map_err(|m| cfg_err("catalog", m))?;
        if self.views > catalog.len() {
            return Err(cfg_err("views", format!("budget {} exceeds catalog size {}", self.views, catalog.len())));
        }
        self.noise.check().map_err(|(f, m)| cfg_err(format!("noise.{f}"), m))?;
        let e = &self.estimator;
        if !(e.gate > 0.0 && e.gate <= std::f64::consts::PI) {
            return Err(cfg_err("estimator.gate", "must lie in (0, π]"));
        }
        if e.max_components == 0 {
            return Err(cfg_err("estimator.max_components", "must be at least 1"));
        }
        if !(e.g_t >= 0.0 && e.g_phi >= 0.0) {
            return Err(cfg_err("estimator.g_t", "entropy weights must be non-negative"));
        }
        if !(e.solver.outlier_gate > 0.0) {
            return Err(cfg_err("estimator.solver.outlier_gate", "must be positive"));
        }
        if e.orientation_source == OrientationSource::Template {
            if self.templates.n_views < 4 {
                return Err(cfg_err("templates.n_views", "must be at least 4"));
            }
            if self.templates.n_inplane == 0 {
                return Err(cfg_err("templates.n_inplane", "must be at least 1"));
            }
        }
        for (i, o) in self.objects.iter().enumerate() {
            o.build(&self.synthetic).map_err(|m| cfg_err(format!("objects[{i}]"), m))?;
        }
        if self.workspace.half_extent.iter().any(|h| !(*h >= 0.0)) {
            return Err(cfg_err("workspace.half_extent", "must be non-negative"));
        }
        Ok(())
    }

    /// Settings that must agree for summaries to be comparable.
    pub fn settings(&self) -> Value {
        serde_json::json!({
            "objects": self.objects,
            "synthetic": self.synthetic,
            "catalog": self.catalog,
            "workspace": self.workspace,
            "objects_per_scene": self.objects_per_scene,
            "noise": self.noise,
            "thresholds": self.estimator.thresholds,
        })
    }
}

/// Parses `"0..100"`, `"3"` or `"1,2,5"`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|e| format!("seed range start: {e}"))?;
        let b: u64 = b.trim().parse().map_err(|e| format!("seed range end: {e}"))?;
        if b <= a {
            return Err(format!("empty seed range {a}..{b}"));
        }
        return Ok((a..b).collect());
    }
    s.split(',')
        .map(|p| p.trim().parse::<u64>().map_err(|e| format!("seed '{p}': {e}")))
        .collect()
}

/// One trajectory tagged with its scene context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub seed: u64,
    pub object_id: usize,
    pub model: String,
    pub trajectory: Trajectory,
}

/// One line of a trajectory file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLine {
    pub seed: u64,
    pub scene: String,
    pub object_id: usize,
    pub model: String,
    pub policy: Policy,
    pub record: StepRecord,
}

/// One line of a mixture-evolution file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureLine {
    pub seed: u64,
    pub object_id: usize,
    pub policy: Policy,
    pub views: usize,
    pub view_id: usize,
    pub components: Vec<ComponentSnapshot>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub policy: Policy,
    pub views: usize,
    pub trials: usize,
    pub add_rate: f64,
    pub five_ten_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub settings: Value,
    pub config: ExperimentConfig,
    pub rates: Vec<RateRow>,
    pub failures: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub entries: Vec<TrajectoryEntry>,
    pub failures: Vec<String>,
    pub summary: Summary,
}

fn template_bank(model: &ObjectModel, cfg: &ExperimentConfig) -> Result<TemplateSet, HarnessError> {
    let t = &cfg.templates;
    let intr = &cfg.catalog.intrinsics;
    let key = TemplateCacheKey {
        model_hash: model.content_hash(),
        n_views: t.n_views,
        n_inplane: t.n_inplane,
        canonical_distance: model.canonical_distance,
        canonical_roi: model.canonical_roi,
        fx: intr.fx,
        fy: intr.fy,
    };
    let path = t.cache_dir.as_ref().map(|d| {
        PathBuf::from(d).join(format!("templates_{:016x}_{}_{}.jsonl", key.model_hash, key.n_views, key.n_inplane))
    });
    if let Some(p) = &path {
        if let Ok(f) = fs::File::open(p) {
            if let Ok(Some(set)) = TemplateSet::read_cache(BufReader::new(f), &key) {
                return Ok(set);
            }
        }
    }
    let set = build_templates(model, t.n_views, t.n_inplane, intr.fx, intr.fy)
        .map_err(|e| cfg_err("templates", e.to_string()))?;
    if let Some(p) = &path {
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        let f = fs::File::create(p).map_err(|e| io_err(p, e))?;
        set.write_cache(BufWriter::new(f)).map_err(|e| io_err(p, e))?;
    }
    Ok(set)
}

/// Runs every (seed, object, policy) trajectory. Per-scene failures are
/// collected rather than aborting the run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let models: Vec<ObjectModel> = cfg
        .objects
        .iter()
        .enumerate()
        .map(|(i, o)| o.build(&cfg.synthetic).map_err(|m| cfg_err(format!("objects[{i}]"), m)))
        .collect::<Result<_, _>>()?;
    let catalog = cfg.catalog.build().map_err(|m| cfg_err("catalog", m))?;
    let banks: Vec<Option<TemplateSet>> = if cfg.estimator.orientation_source == OrientationSource::Template {
        models.iter().map(|m| template_bank(m, cfg).map(Some)).collect::<Result<_, _>>()?
    } else {
        vec![None; models.len()]
    };

    let per_seed: Vec<(Vec<TrajectoryEntry>, Vec<String>)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut entries = Vec::new();
            let mut failures = Vec::new();
            let scene = match generate_scene(&models, &catalog, cfg.objects_per_scene, seed, &cfg.workspace) {
                Ok(s) => s,
                Err(e) => {
                    failures.push(format!("seed {seed}: scene generation: {e}"));
                    return (entries, failures);
                }
            };
            for object in &scene.objects {
                let bank = banks[object.model].as_ref();
                for &policy in &cfg.policies {
                    match run_active_loop(&scene, object.id, policy, cfg.views, &cfg.estimator, &cfg.noise, seed, bank) {
                        Ok(t) => {
                            if t.steps.last().is_none_or(|s| s.t_wo.is_none() || s.r_wo.is_none()) {
                                failures.push(format!("seed {seed} object {} {policy}: no final pose", object.id));
                            }
                            entries.push(TrajectoryEntry {
                                seed,
                                object_id: object.id,
                                model: scene.models[object.model].name.clone(),
                                trajectory: t,
                            });
                        }
                        Err(e) => failures.push(format!("seed {seed} object {} {policy}: {e}", object.id)),
                    }
                }
            }
            (entries, failures)
        })
        .collect();
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for (e, f) in per_seed {
        entries.extend(e);
        failures.extend(f);
    }
    entries.sort_by(|a, b| {
        (a.seed, a.object_id, a.trajectory.policy).cmp(&(b.seed, b.object_id, b.trajectory.policy))
    });
    failures.sort();
    let summary = Summary {
        name: cfg.name.clone(),
        settings: cfg.settings(),
        config: cfg.clone(),
        rates: rate_rows(&entries),
        failures: failures.clone(),
    };
    Ok(RunOutput { entries, failures, summary })
}

#[derive(Default)]
struct Tally {
    trials: usize,
    add: usize,
    five_ten: usize,
}

impl Tally {
    fn push(&mut self, s: &StepRecord) {
        self.trials += 1;
        self.add += s.add_pass as usize;
        self.five_ten += s.five_ten_pass as usize;
    }

    fn rates(&self) -> (f64, f64) {
        let n = self.trials as f64;
        (100.0 * self.add as f64 / n, 100.0 * self.five_ten as f64 / n)
    }
}

/// Pass rates per `(policy, views)` over all trajectories.
pub fn rate_rows(entries: &[TrajectoryEntry]) -> Vec<RateRow> {
    let mut groups: BTreeMap<(Policy, usize), Tally> = BTreeMap::new();
    for e in entries {
        for s in &e.trajectory.steps {
            groups.entry((e.trajectory.policy, s.views)).or_default().push(s);
        }
    }
    groups
        .into_iter()
        .map(|((policy, views), t)| {
            let (add_rate, five_ten_rate) = t.rates();
            RateRow { policy, views, trials: t.trials, add_rate, five_ten_rate }
        })
        .collect()
}

/// Aggregate table rows: `(scene, object, views, policy, add_rate,
/// five_ten_rate, trials)`, sorted by the first four fields.
pub fn aggregate_csv(scene: &str, entries: &[TrajectoryEntry]) -> Result<String, HarnessError> {
    let mut groups: BTreeMap<(String, usize, Policy), Tally> = BTreeMap::new();
    for e in entries {
        for s in &e.trajectory.steps {
            groups.entry((e.model.clone(), s.views, e.trajectory.policy)).or_default().push(s);
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| HarnessError::Input(e.to_string());
    w.write_record(["scene", "object", "views", "policy", "add_rate", "five_ten_rate", "trials"]).map_err(csv_err)?;
    for ((model, views, policy), t) in groups {
        let (a, f) = t.rates();
        w.write_record([
            scene.to_string(),
            model,
            views.to_string(),
            policy.to_string(),
            format!("{a:.4}"),
            format!("{f:.4}"),
            t.trials.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Input(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn write_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), HarnessError> {
    let f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(f);
    for item in items {
        let line = serde_json::to_string(&item).map_err(|e| io_err(path, e))?;
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

/// Writes the run artifacts under `out`:
/// `config.json`, `summary.json`, `aggregate.csv`,
/// `trajectories/seed_<seed>_<policy>.jsonl`,
/// `mixture/seed_<seed>_<policy>.jsonl` and, when enabled,
/// `measurements/seed_<seed>_<policy>_object_<id>.jsonl`.
pub fn write_outputs(run: &RunOutput, out: &Path) -> Result<(), HarnessError> {
    let cfg = &run.summary.config;
    for sub in ["trajectories", "mixture", "measurements"] {
        let d = out.join(sub);
        if sub == "measurements" && !cfg.write_measurements {
            continue;
        }
        fs::create_dir_all(&d).map_err(|e| io_err(&d, e))?;
    }
    write_json(&out.join("config.json"), cfg)?;
    write_json(&out.join("summary.json"), &run.summary)?;
    let csv = aggregate_csv(&cfg.name, &run.entries)?;
    fs::write(out.join("aggregate.csv"), csv).map_err(|e| io_err(&out.join("aggregate.csv"), e))?;

    let mut by_file: BTreeMap<(u64, Policy), Vec<&TrajectoryEntry>> = BTreeMap::new();
    for e in &run.entries {
        by_file.entry((e.seed, e.trajectory.policy)).or_default().push(e);
    }
    for ((seed, policy), group) in by_file {
        let stem = format!("seed_{seed}_{policy}");
        let lines = group.iter().flat_map(|e| {
            e.trajectory.steps.iter().map(move |s| TrajectoryLine {
                seed,
                scene: cfg.name.clone(),
                object_id: e.object_id,
                model: e.model.clone(),
                policy,
                record: s.clone(),
            })
        });
        write_lines(&out.join("trajectories").join(format!("{stem}.jsonl")), lines)?;
        let mix = group.iter().flat_map(|e| {
            e.trajectory.steps.iter().map(move |s| MixtureLine {
                seed,
                object_id: e.object_id,
                policy,
                views: s.views,
                view_id: s.view_id,
                components: s.mixture.clone(),
            })
        });
        write_lines(&out.join("mixture").join(format!("{stem}.jsonl")), mix)?;
        if cfg.write_measurements {
            for e in group {
                let p = out.join("measurements").join(format!("{stem}_object_{}.jsonl", e.object_id));
                let f = fs::File::create(&p).map_err(|err| io_err(&p, err))?;
                write_records(BufWriter::new(f), &e.trajectory.measurements).map_err(|err| io_err(&p, err))?;
            }
        }
    }
    Ok(())
}

/// Reads every trajectory line from the given files or directories.
pub fn read_trajectory_lines(paths: &[PathBuf]) -> Result<Vec<TrajectoryLine>, HarnessError> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut inner: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| io_err(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|q| q.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            inner.sort();
            files.extend(inner);
        } else {
            files.push(p.clone());
        }
    }
    let mut out = Vec::new();
    for f in files {
        let file = fs::File::open(&f).map_err(|e| io_err(&f, e))?;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| io_err(&f, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TrajectoryLine = serde_json::from_str(&line)
                .map_err(|e| HarnessError::Input(format!("{}:{}: {e}", f.display(), i + 1)))?;
            out.push(rec);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub policy: Policy,
    pub views: usize,
    /// Number of seeds contributing.
    pub n: usize,
    pub add_rate: f64,
    pub add_stderr: f64,
    pub five_ten_rate: f64,
    pub five_ten_stderr: f64,
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Detection rate versus number of views per policy. Each seed contributes
/// its rate over objects; the row reports the mean over seeds and its
/// standard error.
pub fn plot_rows(lines: &[TrajectoryLine]) -> Result<Vec<PlotRow>, HarnessError> {
    if lines.is_empty() {
        return Err(HarnessError::Input("no trajectory records".into()));
    }
    let mut per_seed: BTreeMap<(Policy, usize), BTreeMap<u64, Tally>> = BTreeMap::new();
    for l in lines {
        per_seed.entry((l.policy, l.record.views)).or_default().entry(l.seed).or_default().push(&l.record);
    }
    Ok(per_seed
        .into_iter()
        .map(|((policy, views), seeds)| {
            let rates: Vec<(f64, f64)> = seeds.values().map(Tally::rates).collect();
            let (add_rate, add_stderr) = mean_stderr(&rates.iter().map(|r| r.0).collect::<Vec<_>>());
            let (five_ten_rate, five_ten_stderr) = mean_stderr(&rates.iter().map(|r| r.1).collect::<Vec<_>>());
            PlotRow { policy, views, n: seeds.len(), add_rate, add_stderr, five_ten_rate, five_ten_stderr }
        })
        .collect())
}

pub fn plot_csv(rows: &[PlotRow]) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::Input(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Input(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn read_summary(path: &Path) -> Result<Summary, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Input(format!("{}: {e}", path.display())))
}

/// Lists differing leaves between two JSON values as `path: a != b`.
pub fn json_diff(a: &Value, b: &Value, path: &str, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            for k in keys {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => json_diff(u, v, &p, out),
                    (u, v) => out.push(format!("{p}: {} != {}", show(u), show(v))),
                }
            }
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            for (i, (u, v)) in x.iter().zip(y).enumerate() {
                json_diff(u, v, &format!("{path}[{i}]"), out);
            }
        }
        _ if a != b => out.push(format!("{path}: {a} != {b}")),
        _ => {}
    }
}

fn show(v: Option<&Value>) -> String {
    v.map(|v| v.to_string()).unwrap_or_else(|| "<missing>".into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub views: usize,
    pub random: Option<f64>,
    pub max_distance: Option<f64>,
    pub nbv: Option<f64>,
    pub nbv_minus_random: Option<f64>,
    pub nbv_minus_max_distance: Option<f64>,
}

/// Aligns rates from several summaries into a views × policy table. Rates
/// for the same `(policy, views)` in several summaries are pooled by trial
/// count. Refuses summaries whose settings differ.
pub fn compare_policies(summaries: &[Summary]) -> Result<Vec<ComparisonRow>, HarnessError> {
    let first = summaries.first().ok_or_else(|| HarnessError::Input("no summaries given".into()))?;
    let mut diffs = Vec::new();
    for (i, s) in summaries.iter().enumerate().skip(1) {
        let mut d = Vec::new();
        json_diff(&first.settings, &s.settings, "", &mut d);
        diffs.extend(d.into_iter().map(|l| format!("summary {i}: {l}")));
    }
    if !diffs.is_empty() {
        return Err(HarnessError::Mismatch(diffs.join("\n")));
    }
    let mut pooled: BTreeMap<(usize, Policy), (f64, f64, usize)> = BTreeMap::new();
    for s in summaries {
        for r in &s.rates {
            let e = pooled.entry((r.views, r.policy)).or_insert((0.0, 0.0, 0));
            e.0 += r.add_rate * r.trials as f64;
            e.1 += r.five_ten_rate * r.trials as f64;
            e.2 += r.trials;
        }
    }
    let views: std::collections::BTreeSet<usize> = pooled.keys().map(|k| k.0).collect();
    let mut rows = Vec::new();
    for metric in ["add", "five_ten"] {
        for &v in &views {
            let get = |p: Policy| {
                pooled.get(&(v, p)).filter(|e| e.2 > 0).map(|e| if metric == "add" { e.0 } else { e.1 } / e.2 as f64)
            };
            let (r, m, n) = (get(Policy::Random), get(Policy::MaxDistance), get(Policy::Nbv));
            rows.push(ComparisonRow {
                metric: metric.into(),
                views: v,
                random: r,
                max_distance: m,
                nbv: n,
                nbv_minus_random: n.zip(r).map(|(a, b)| a - b),
                nbv_minus_max_distance: n.zip(m).map(|(a, b)| a - b),
            });
        }
    }
    Ok(rows)
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let f = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_default();
    let csv_err = |e: csv::Error| HarnessError::Input(e.to_string());
    w.write_record(["metric", "views", "random", "max_distance", "nbv", "nbv_minus_random", "nbv_minus_max_distance"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.metric.clone(),
            r.views.to_string(),
            f(r.random),
            f(r.max_distance),
            f(r.nbv),
            f(r.nbv_minus_random),
            f(r.nbv_minus_max_distance),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Input(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
