//! Pipeline stages. Each stage reads the config plus the outputs of earlier
//! stages under `out_dir`, and writes its own outputs atomically.
//!
//! ```text
//! out/
//!   atlases/atlas_00_{image,label}.mvol     phantom
//!   targets/target_00_{image,label}.mvol
//!   pipeline.json
//!   registration/target_00/atlas_00/...     register
//!   similarity/model.json                   train-similarity
//!   fusion/<method>/target_00_fused.mvol    fuse
//!   sweep/<method>.csv                      sweep
//!   eval/summary.csv                        eval
//!   manifest_<command>.json                 every command
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use mas_core::ddf::{warp_label, warp_scalar};
use mas_core::fusion::{lwf_fuse, majority_vote};
use mas_core::io::{read_labels, read_volume, write_atomic, write_ddf, write_labels, write_volume};
use mas_core::metrics::{dice_score, MetricReport};
use mas_core::phantom::{generate_subject, Subject};
use mas_core::registration::register_bidirectional;
use mas_core::similarity::{
    ground_truth_similarity, mi_patch_similarity, predict_similarity, train_similarity, FeatureConfig, PatchSpec,
    SimilarityMap, SimilarityModel, SimilarityPair, TrainReport,
};
use mas_core::volume::{center_align_translation, translate_labels, translate_volume, LabelMap, Volume};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{FusionMethod, PipelineConfig, SubjectPaths};
use crate::error::{CliError, Result};
use crate::manifest::Manifest;

/// File locations under an output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn registration_dir(&self, target: usize, atlas: usize) -> PathBuf {
        self.root.join("registration").join(format!("target_{target:02}")).join(format!("atlas_{atlas:02}"))
    }

    pub fn warped_label(&self, target: usize, atlas: usize) -> PathBuf {
        self.registration_dir(target, atlas).join("warped_label.mvol")
    }

    pub fn warped_image(&self, target: usize, atlas: usize) -> PathBuf {
        self.registration_dir(target, atlas).join("warped_image.mvol")
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("similarity").join("model.json")
    }

    pub fn fusion_dir(&self, method: FusionMethod) -> PathBuf {
        self.root.join("fusion").join(method.name())
    }

    pub fn fused(&self, method: FusionMethod, target: usize) -> PathBuf {
        self.fusion_dir(method).join(format!("target_{target:02}_fused.mvol"))
    }

    pub fn sweep_csv(&self, method: FusionMethod) -> PathBuf {
        self.root.join("sweep").join(format!("{}.csv", method.name()))
    }
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {jobs} worker threads: {e}")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("plain data serializes");
    text.push('\n');
    write_text(path, &text)
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput(path.to_path_buf()))
    }
}

fn load_volume(path: &Path) -> Result<Volume> {
    require(path)?;
    Ok(read_volume(path)?)
}

fn load_labels(path: &Path) -> Result<LabelMap> {
    require(path)?;
    Ok(read_labels(path)?)
}

/// Loads every subject and gives all label maps the union label set, so
/// atlases missing a structure still register against targets that have it.
fn load_subjects(cfg: &PipelineConfig) -> Result<(Vec<Subject>, Vec<Subject>)> {
    let load = |p: &SubjectPaths| -> Result<Subject> {
        let image = load_volume(&p.image)?;
        let label = load_labels(&p.label)?;
        if image.grid.dims != label.grid.dims {
            return Err(CliError::Core(mas_core::Error::DimMismatch { expected: image.grid.dims, found: label.grid.dims }));
        }
        Ok(Subject { image, label })
    };
    let mut atlases = cfg.atlases.iter().map(load).collect::<Result<Vec<_>>>()?;
    let mut targets = cfg.targets.iter().map(load).collect::<Result<Vec<_>>>()?;
    let mut set: Vec<i16> = atlases.iter().chain(&targets).flat_map(|s| s.label.label_set.iter().copied()).collect();
    set.sort_unstable();
    set.dedup();
    for s in atlases.iter_mut().chain(targets.iter_mut()) {
        s.label = LabelMap::with_label_set(s.label.grid, std::mem::take(&mut s.label.labels), set.clone())?;
    }
    Ok((atlases, targets))
}

fn with_label_set(labels: LabelMap, set: &[i16]) -> Result<LabelMap> {
    Ok(LabelMap::with_label_set(labels.grid, labels.labels, set.to_vec())?)
}

/// Mean Dice (%) over the nonzero labels of `gold`.
pub fn mean_dice(pred: &LabelMap, gold: &LabelMap) -> Result<f64> {
    let fg: Vec<i16> = gold.label_set.iter().copied().filter(|&l| l != 0).collect();
    let mut sum = 0.0;
    for &l in &fg {
        sum += dice_score(pred, gold, l)?;
    }
    Ok(sum / fg.len().max(1) as f64)
}

// ---------------------------------------------------------------- phantom

/// Writes the configured cohort plus a `pipeline.json` that points at it, and
/// returns that config (paths resolved) for chaining further stages.
pub fn cmd_phantom(cfg: &PipelineConfig) -> Result<PipelineConfig> {
    let cohort = &cfg.cohort;
    cohort.base.validate()?;
    let n = cohort.atlases + cohort.targets;
    let subjects = thread_pool(cfg.jobs)?
        .install(|| (0..n).into_par_iter().map(|i| generate_subject(cohort, i)).collect::<mas_core::Result<Vec<_>>>())?;

    let mut atlases = Vec::new();
    let mut targets = Vec::new();
    for (i, s) in subjects.iter().enumerate() {
        let (dir, name, list) = if i < cohort.atlases {
            ("atlases", format!("atlas_{i:02}"), &mut atlases)
        } else {
            ("targets", format!("target_{:02}", i - cohort.atlases), &mut targets)
        };
        let paths = SubjectPaths {
            image: PathBuf::from(dir).join(format!("{name}_image.mvol")),
            label: PathBuf::from(dir).join(format!("{name}_label.mvol")),
        };
        write_volume(&cfg.out_dir.join(&paths.image), &s.image)?;
        write_labels(&cfg.out_dir.join(&paths.label), &s.label)?;
        list.push(paths);
    }

    let written = PipelineConfig { atlases, targets, out_dir: PathBuf::from("."), ..cfg.clone() };
    write_json(&cfg.out_dir.join("pipeline.json"), &written)?;
    Manifest::build("phantom", cfg, &["atlases", "targets", "pipeline.json"])?.write(&cfg.out_dir)?;
    PipelineConfig::load(&cfg.out_dir.join("pipeline.json"))
}

// ----------------------------------------------------------- registration

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegistrationRow {
    pub target: usize,
    pub atlas: usize,
    /// Translation applied before registration (mm).
    pub offset_mm: [f64; 3],
    pub initial_ds: f64,
    pub final_ds: f64,
    pub iterations: usize,
    pub final_loss: f64,
}

fn register_job(cfg: &PipelineConfig, layout: &Layout, t: usize, a: usize, atlas: &Subject, target: &Subject) -> Result<(RegistrationRow, MetricReport)> {
    let offset = if cfg.center_align { center_align_translation(&atlas.label, &target.label)? } else { [0.0; 3] };
    let label = translate_labels(&atlas.label, offset);
    let image = translate_volume(&atlas.image, offset);
    let r = register_bidirectional(&image, &label, &target.image, &target.label, &cfg.registration)?;
    let warped_label = warp_label(&label, &r.u)?;
    let warped_image = warp_scalar(&image, &r.u)?;

    let dir = layout.registration_dir(t, a);
    write_ddf(&dir.join("u.ddf.json"), &r.u)?;
    write_ddf(&dir.join("v.ddf.json"), &r.v)?;
    write_text(&dir.join("trace.jsonl"), &r.trace_jsonl())?;
    write_labels(&layout.warped_label(t, a), &warped_label)?;
    write_volume(&layout.warped_image(t, a), &warped_image)?;
    let row = RegistrationRow {
        target: t,
        atlas: a,
        offset_mm: offset,
        initial_ds: r.initial_dice,
        final_ds: r.final_dice,
        iterations: r.iterations_run(),
        final_loss: r.trace.last().map_or(f64::NAN, |b| b.total),
    };
    write_json(&dir.join("result.json"), &row)?;
    let report = MetricReport::evaluate(&format!("target_{t:02}/atlas_{a:02}"), &warped_label, &target.label)?;
    Ok((row, report))
}

/// Registers every atlas to every target (training targets included).
pub fn cmd_register(cfg: &PipelineConfig) -> Result<Vec<RegistrationRow>> {
    cfg.validate()?;
    let (atlases, targets) = load_subjects(cfg)?;
    let layout = Layout::new(&cfg.out_dir);
    let jobs: Vec<(usize, usize)> = (0..targets.len()).flat_map(|t| (0..atlases.len()).map(move |a| (t, a))).collect();
    let results: Vec<Result<(RegistrationRow, MetricReport)>> = thread_pool(cfg.jobs)?.install(|| {
        jobs.par_iter().map(|&(t, a)| register_job(cfg, &layout, t, a, &atlases[a], &targets[t])).collect()
    });

    let mut rows = Vec::new();
    let mut report = MetricReport::default();
    let mut failures = Vec::new();
    for (&(t, a), res) in jobs.iter().zip(results) {
        match res {
            Ok((row, r)) => {
                rows.push(row);
                report.extend(r);
            }
            Err(e) => failures.push(format!("target {t} atlas {a}: {e}")),
        }
    }
    let mut csv = String::from("target,atlas,initial_ds,final_ds,iterations,final_loss\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{:.6},{:.6},{},{:.9}\n", r.target, r.atlas, r.initial_ds, r.final_ds, r.iterations, r.final_loss));
    }
    let dir = cfg.out_dir.join("registration");
    write_text(&dir.join("summary.csv"), &csv)?;
    write_text(&dir.join("metrics.csv"), &report.to_csv())?;
    write_text(&dir.join("metrics.json"), &report.to_json())?;
    Manifest::build("register", cfg, &["registration"])?.write(&cfg.out_dir)?;
    if failures.is_empty() {
        Ok(rows)
    } else {
        Err(CliError::JobsFailed(failures))
    }
}

// ------------------------------------------------------------- similarity

/// Trains the similarity model on the warped atlases of the training targets.
pub fn cmd_train_similarity(cfg: &PipelineConfig) -> Result<(PathBuf, TrainReport)> {
    cfg.validate()?;
    if cfg.training_targets.is_empty() {
        return Err(CliError::Config("training_targets is empty; nothing to train on".into()));
    }
    let (atlases, targets) = load_subjects(cfg)?;
    let layout = Layout::new(&cfg.out_dir);
    let set = targets[0].label.label_set.clone();
    let patch = PatchSpec::cube(cfg.patch_radius);
    let mut pairs = Vec::new();
    for &t in &cfg.training_targets {
        for a in 0..atlases.len() {
            let warped = with_label_set(load_labels(&layout.warped_label(t, a))?, &set)?;
            let w_gt = ground_truth_similarity(&warped, &targets[t].label, patch)?;
            pairs.push(SimilarityPair { target_img: targets[t].image.clone(), warped, w_gt });
        }
    }
    let features = FeatureConfig::new(set);
    let (model, report) = train_similarity(&pairs, &features, &cfg.similarity_training, cfg.seed)?;
    let path = layout.model();
    write_text(&path, &(model.to_json() + "\n"))?;
    let mut csv = String::from("iteration,cross_entropy\n");
    for (i, l) in report.loss_trace.iter().enumerate() {
        csv.push_str(&format!("{i},{l:.9}\n"));
    }
    write_text(&path.with_file_name("loss_trace.csv"), &csv)?;
    Manifest::build("train-similarity", cfg, &["similarity"])?.write(&cfg.out_dir)?;
    Ok((path, report))
}

// ----------------------------------------------------------------- fusion

fn load_model(cfg: &PipelineConfig) -> Result<Option<SimilarityModel>> {
    if cfg.fusion != FusionMethod::LwfLearned {
        return Ok(None);
    }
    let path = cfg.similarity_model.as_ref().ok_or_else(|| CliError::Config("lwf-learned requires similarity_model".into()))?;
    require(path)?;
    let text = fs::read_to_string(path).map_err(|e| CliError::Io { path: path.clone(), source: e })?;
    Ok(Some(SimilarityModel::from_json(&text)?))
}

/// Warped atlas labels of one target with their fusion weights (`None` for MV).
fn fusion_inputs(
    cfg: &PipelineConfig,
    model: Option<&SimilarityModel>,
    t: usize,
    target: &Subject,
    atlases: usize,
) -> Result<Vec<(LabelMap, Option<SimilarityMap>)>> {
    let layout = Layout::new(&cfg.out_dir);
    let set = &target.label.label_set;
    (0..atlases)
        .map(|a| {
            let warped = with_label_set(load_labels(&layout.warped_label(t, a))?, set)?;
            let weights = match cfg.fusion {
                FusionMethod::Mv => None,
                FusionMethod::LwfOracle => Some(ground_truth_similarity(&warped, &target.label, PatchSpec::cube(cfg.patch_radius))?),
                FusionMethod::LwfLearned => Some(predict_similarity(model.expect("model loaded for lwf-learned"), &target.image, &warped)?),
                FusionMethod::LwfMi => {
                    let image = load_volume(&layout.warped_image(t, a))?;
                    Some(mi_patch_similarity(&target.image, &image, PatchSpec::cube(cfg.mi_patch_radius), cfg.mi_bins)?)
                }
            };
            Ok((warped, weights))
        })
        .collect()
}

fn fuse(inputs: &[(LabelMap, Option<SimilarityMap>)]) -> Result<LabelMap> {
    if inputs.iter().all(|(_, w)| w.is_none()) {
        let labels: Vec<LabelMap> = inputs.iter().map(|(l, _)| l.clone()).collect();
        return Ok(majority_vote(&labels)?);
    }
    let weighted: Vec<(LabelMap, SimilarityMap)> = inputs
        .iter()
        .map(|(l, w)| (l.clone(), w.clone().expect("weights for every atlas")))
        .collect();
    Ok(lwf_fuse(&weighted)?)
}

/// Fuses all atlases for every evaluation target with the configured method.
pub fn cmd_fuse(cfg: &PipelineConfig) -> Result<MetricReport> {
    cfg.validate()?;
    let (atlases, targets) = load_subjects(cfg)?;
    let model = load_model(cfg)?;
    let layout = Layout::new(&cfg.out_dir);
    let eval = cfg.evaluation_targets();
    let reports = thread_pool(cfg.jobs)?.install(|| {
        eval.par_iter()
            .map(|&t| {
                let inputs = fusion_inputs(cfg, model.as_ref(), t, &targets[t], atlases.len())?;
                let fused = fuse(&inputs)?;
                write_labels(&layout.fused(cfg.fusion, t), &fused)?;
                Ok(MetricReport::evaluate(&format!("target_{t:02}"), &fused, &targets[t].label)?)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut report = MetricReport::default();
    reports.into_iter().for_each(|r| report.extend(r));
    let dir = layout.fusion_dir(cfg.fusion);
    write_text(&dir.join("metrics.csv"), &report.to_csv())?;
    write_text(&dir.join("metrics.json"), &report.to_json())?;
    let rel = format!("fusion/{}", cfg.fusion.name());
    Manifest::build(&format!("fuse-{}", cfg.fusion.name()), cfg, &[&rel])?.write(&cfg.out_dir)?;
    Ok(report)
}

// ------------------------------------------------------------------ sweep

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub atlases: usize,
    /// Mean over evaluation targets of the per-target mean Dice (%).
    pub mean_ds: f64,
    /// Population standard deviation of the per-target Dice.
    pub std_ds: f64,
}

/// Fused Dice as a function of atlas count, using the first `n` atlases.
pub fn cmd_sweep(cfg: &PipelineConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let (atlases, targets) = load_subjects(cfg)?;
    let model = load_model(cfg)?;
    let counts = cfg.sweep_counts();
    let eval = cfg.evaluation_targets();
    // per_target[k][c]: Dice of target eval[k] with counts[c] atlases
    let per_target = thread_pool(cfg.jobs)?.install(|| {
        eval.par_iter()
            .map(|&t| {
                let inputs = fusion_inputs(cfg, model.as_ref(), t, &targets[t], atlases.len())?;
                counts.iter().map(|&n| mean_dice(&fuse(&inputs[..n])?, &targets[t].label)).collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let rows: Vec<SweepRow> = counts
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            let v: Vec<f64> = per_target.iter().map(|row| row[c]).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
            SweepRow { atlases: n, mean_ds: mean, std_ds: var.sqrt() }
        })
        .collect();
    let layout = Layout::new(&cfg.out_dir);
    let mut csv = String::from("n,mean_ds,std_ds\n");
    for r in &rows {
        csv.push_str(&format!("{},{:.6},{:.6}\n", r.atlases, r.mean_ds, r.std_ds));
    }
    let path = layout.sweep_csv(cfg.fusion);
    write_text(&path, &csv)?;
    write_json(&path.with_extension("json"), &rows)?;
    let name = cfg.fusion.name();
    Manifest::build(&format!("sweep-{name}"), cfg, &[&format!("sweep/{name}.csv"), &format!("sweep/{name}.json")])?.write(&cfg.out_dir)?;
    Ok(rows)
}

// ------------------------------------------------------------------- eval

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub method: String,
    pub label: i16,
    pub ds: f64,
    pub asd_mm: Option<f64>,
    pub hd_mm: Option<f64>,
    pub vd_ml: f64,
}

fn mean_of(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for x in v.flatten() {
        sum += x;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Metrics of a single prediction against a gold label.
pub fn evaluate_pair(pred: &Path, gold: &Path, case: &str) -> Result<MetricReport> {
    let gold = load_labels(gold)?;
    let pred = with_label_set(load_labels(pred)?, &gold.label_set)
        .map_err(|_| CliError::Config("prediction holds labels absent from the gold label set".into()))?;
    Ok(MetricReport::evaluate(case, &pred, &gold)?)
}

/// Compares every fusion method with fused outputs on disk: per-label means
/// over the evaluation targets.
pub fn cmd_eval(cfg: &PipelineConfig) -> Result<Vec<EvalRow>> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    let eval = cfg.evaluation_targets();
    let mut rows = Vec::new();
    for method in FusionMethod::ALL {
        if !eval.iter().all(|&t| layout.fused(method, t).exists()) {
            continue;
        }
        let mut report = MetricReport::default();
        for &t in &eval {
            report.extend(evaluate_pair(&layout.fused(method, t), &cfg.targets[t].label, &format!("target_{t:02}"))?);
        }
        let mut labels: Vec<i16> = report.rows.iter().map(|r| r.label).collect();
        labels.sort_unstable();
        labels.dedup();
        for l in labels {
            let rs: Vec<_> = report.rows.iter().filter(|r| r.label == l).collect();
            rows.push(EvalRow {
                method: method.name().to_string(),
                label: l,
                ds: rs.iter().map(|r| r.ds).sum::<f64>() / rs.len() as f64,
                asd_mm: mean_of(rs.iter().map(|r| r.asd)),
                hd_mm: mean_of(rs.iter().map(|r| r.hd)),
                vd_ml: rs.iter().map(|r| r.vd).sum::<f64>() / rs.len() as f64,
            });
        }
    }
    if rows.is_empty() {
        return Err(CliError::MissingInput(layout.root.join("fusion")));
    }
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut csv = String::from("method,label,ds,asd_mm,hd_mm,vd_ml\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{:.6},{},{},{:.6}\n", r.method, r.label, r.ds, fmt(r.asd_mm), fmt(r.hd_mm), r.vd_ml));
    }
    write_text(&layout.root.join("eval").join("summary.csv"), &csv)?;
    write_json(&layout.root.join("eval").join("summary.json"), &rows)?;
    Manifest::build("eval", cfg, &["eval"])?.write(&cfg.out_dir)?;
    Ok(rows)
}
