//! Experiment orchestration: preparation, teacher and student training,
//! pseudo-labelling, evaluation and complete vast/scarce scenarios.
//!
//! Every trained or derived artifact is named after a content hash of the
//! inputs and configuration that produced it, so a rerun skips work that
//! already exists.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{student_samples, teacher_samples, CaseCache, PreparedCase};
use crate::distill::{pseudo_label, pseudo_label_case, DistillConfig, PseudoReport};
use crate::error::{invalid, Error, Result};
use crate::eval::{component_boxes, format_table, Aggregate, CaseMetrics, EvalReport, MatchConfig};
use crate::infer::segment;
use crate::ingest::{
    balance_by_size, populate_tumor_volumes, split_dataset, BalanceConfig, SplitConfig,
};
use crate::models::{build_model, Checkpoint, ModelSpec, Upsampling};
use crate::phantoms::{generate_cohort, CohortConfig};
use crate::preprocess::{GuidanceMode, PreprocessConfig};
use crate::train::{train_model, TrainConfig, TrainLog, TrainOutput, TrainSample};
use crate::volume::{
    load_volume, save_volume, AnnotationRecord, DatasetManifest, Split, SupervisionKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudentVariant {
    /// Trained on the strong set only.
    Baseline,
    /// Single output, trained on strong and pseudo labels.
    So,
    /// Second head supervised with the box masks.
    Do,
}

impl StudentVariant {
    pub const ALL: [StudentVariant; 3] = [
        StudentVariant::Baseline,
        StudentVariant::So,
        StudentVariant::Do,
    ];

    pub fn heads(self) -> usize {
        match self {
            StudentVariant::Do => 2,
            _ => 1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            StudentVariant::Baseline => "Baseline",
            StudentVariant::So => "SO",
            StudentVariant::Do => "DO",
        }
    }
}

impl fmt::Display for StudentVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StudentVariant::Baseline => "baseline",
            StudentVariant::So => "so",
            StudentVariant::Do => "do",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Vast,
    Scarce,
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScenarioKind::Vast => "vast",
            ScenarioKind::Scarce => "scarce",
        })
    }
}

/// Network size shared by all models of one role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub upsampling: Upsampling,
}

impl NetworkConfig {
    fn teacher() -> Self {
        let s = ModelSpec::teacher();
        NetworkConfig {
            levels: s.levels,
            base_channels: s.base_channels,
            upsampling: s.upsampling,
        }
    }

    fn student() -> Self {
        NetworkConfig {
            levels: ModelSpec::so_student().levels,
            ..NetworkConfig::teacher()
        }
    }

    pub fn spec(&self, in_channels: usize, heads: usize, seed: u64) -> ModelSpec {
        ModelSpec {
            levels: self.levels,
            base_channels: self.base_channels,
            in_channels,
            heads,
            upsampling: self.upsampling,
            seed,
        }
    }
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig::student()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSize {
    pub strong: usize,
    pub weak: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub vast: CohortSize,
    pub scarce: CohortSize,
    /// Strongly labelled phantom test cases generated on top of the
    /// strong and weak sets.
    pub test_cases: usize,
    pub variants: Vec<StudentVariant>,
    /// Teacher whose predictions become the pseudo labels.
    pub pseudo_guidance: GuidanceMode,
    /// Existing dataset to use instead of a generated phantom cohort.
    pub manifest: Option<PathBuf>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            vast: CohortSize {
                strong: 25,
                weak: 35,
            },
            scarce: CohortSize {
                strong: 10,
                weak: 40,
            },
            test_cases: 10,
            variants: StudentVariant::ALL.to_vec(),
            pseudo_guidance: GuidanceMode::Box,
            manifest: None,
        }
    }
}

/// Everything that determines an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub preprocess: PreprocessConfig,
    pub split: SplitConfig,
    pub balance_by_size: bool,
    pub balance: BalanceConfig,
    pub teacher: NetworkConfig,
    pub student: NetworkConfig,
    pub teacher_training: TrainConfig,
    pub student_training: TrainConfig,
    pub distill: DistillConfig,
    /// Probability threshold for student segmentation.
    pub threshold: f32,
    pub eval: MatchConfig,
    pub phantoms: CohortConfig,
    pub scenario: ScenarioConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            preprocess: PreprocessConfig::default(),
            split: SplitConfig::default(),
            balance_by_size: true,
            balance: BalanceConfig::default(),
            teacher: NetworkConfig::teacher(),
            student: NetworkConfig::student(),
            teacher_training: TrainConfig::default(),
            student_training: TrainConfig::default(),
            distill: DistillConfig::default(),
            threshold: 0.5,
            eval: MatchConfig::default(),
            phantoms: CohortConfig::default(),
            scenario: ScenarioConfig::default(),
        }
    }
}

/// Hex SHA-256 of the JSON form of `v`.
pub fn content_hash<T: Serialize + ?Sized>(v: &T) -> String {
    hex::encode(Sha256::digest(
        serde_json::to_vec(v).expect("value serializes"),
    ))
}

fn short(hash: &str) -> &str {
    &hash[..12]
}

fn write_json<T: Serialize + ?Sized>(path: &Path, v: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn in_split(manifest: &DatasetManifest, r: &AnnotationRecord, split: Split) -> bool {
    manifest.split_of(&r.case_id).unwrap_or(Split::Train) == split
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareReport {
    pub cases: usize,
    pub cache_hits: usize,
    pub cache_misses: usize,
    pub split_counts: BTreeMap<Split, usize>,
}

/// Validates, splits (unless the manifest already carries a split),
/// balances and caches every record.
pub fn prepare(
    manifest: &DatasetManifest,
    cfg: &ExperimentConfig,
    cache: &CaseCache,
    require_lungmask: bool,
) -> Result<(DatasetManifest, PrepareReport)> {
    manifest.validate()?;
    if require_lungmask {
        if let Some(r) = manifest.records.iter().find(|r| r.lungmask_path.is_none()) {
            return Err(invalid!(
                "case {} has no lung mask; student training and segmentation need one \
                 (labels 1 = right, 2 = left) via lungmask_path",
                r.case_id
            ));
        }
    }
    let mut m = populate_tumor_volumes(manifest)?;
    if m.split.is_empty() {
        m = split_dataset(&m, &cfg.split)?;
    }
    if cfg.balance_by_size {
        m = balance_by_size(&m, &cfg.balance)?;
    }
    let mut report = PrepareReport {
        cases: m.len(),
        cache_hits: 0,
        cache_misses: 0,
        split_counts: BTreeMap::new(),
    };
    for r in &m.records {
        let (_, hit) = cache.get(&m, r, &cfg.preprocess)?;
        if hit {
            report.cache_hits += 1;
        } else {
            report.cache_misses += 1;
        }
        *report
            .split_counts
            .entry(m.split_of(&r.case_id).unwrap_or(Split::Train))
            .or_default() += 1;
    }
    Ok((m, report))
}

/// Training and validation samples with per-sample repetition weights.
#[derive(Debug, Clone)]
pub struct SampleSets {
    pub train: Vec<TrainSample>,
    pub weights: Vec<u32>,
    pub validation: Vec<TrainSample>,
}

fn collect_samples<'a>(
    sources: impl IntoIterator<Item = (&'a DatasetManifest, &'a AnnotationRecord)>,
    cache: &CaseCache,
    pc: &PreprocessConfig,
    mut make: impl FnMut(&PreparedCase) -> Result<Vec<TrainSample>>,
) -> Result<(Vec<TrainSample>, Vec<u32>)> {
    let mut samples = Vec::new();
    let mut weights = Vec::new();
    for (m, r) in sources {
        let (case, _) = cache.get(m, r, pc)?;
        let s = make(&case)?;
        weights.extend(std::iter::repeat_n(m.weight_of(&r.case_id), s.len()));
        samples.extend(s);
    }
    Ok((samples, weights))
}

fn strong_in(
    m: &DatasetManifest,
    split: Split,
) -> impl Iterator<Item = (&DatasetManifest, &AnnotationRecord)> {
    m.records
        .iter()
        .filter(move |r| r.supervision_kind == SupervisionKind::Strong && in_split(m, r, split))
        .map(move |r| (m, r))
}

/// Tumor-centred teacher samples from the strong training and validation
/// records.
pub fn teacher_sets(
    manifest: &DatasetManifest,
    cache: &CaseCache,
    mode: GuidanceMode,
    cfg: &ExperimentConfig,
) -> Result<SampleSets> {
    let pc = &cfg.preprocess;
    let (train, weights) = collect_samples(strong_in(manifest, Split::Train), cache, pc, |c| {
        teacher_samples(c, mode, pc)
    })?;
    if train.is_empty() {
        return Err(invalid!(
            "no strongly annotated training records; the teacher needs voxel masks"
        ));
    }
    let (validation, _) =
        collect_samples(strong_in(manifest, Split::Validation), cache, pc, |c| {
            teacher_samples(c, mode, pc)
        })?;
    Ok(SampleSets {
        train,
        weights,
        validation,
    })
}

/// Per-lung student samples. Pseudo records are added for every variant
/// except the baseline.
pub fn student_sets(
    strong: &DatasetManifest,
    pseudo: Option<&DatasetManifest>,
    variant: StudentVariant,
    cache: &CaseCache,
    cfg: &ExperimentConfig,
) -> Result<SampleSets> {
    let pc = &cfg.preprocess;
    let divisor = 1 << cfg.student.levels;
    let heads = variant.heads();
    let pseudo = match (variant, pseudo) {
        (StudentVariant::Baseline, _) => None,
        (_, Some(p)) => Some(p),
        (_, None) => {
            return Err(invalid!(
                "student variant {variant} needs a pseudo-label manifest"
            ))
        }
    };
    let pseudo_records = pseudo.into_iter().flat_map(|m| {
        m.records
            .iter()
            .filter(move |r| {
                r.supervision_kind == SupervisionKind::Pseudo && in_split(m, r, Split::Train)
            })
            .map(move |r| (m, r))
    });
    let make = |c: &PreparedCase| student_samples(c, pc, divisor, heads);
    let (train, weights) = collect_samples(
        strong_in(strong, Split::Train).chain(pseudo_records),
        cache,
        pc,
        make,
    )?;
    if train.is_empty() {
        return Err(invalid!("no labelled training records for the student"));
    }
    let (validation, _) = collect_samples(strong_in(strong, Split::Validation), cache, pc, make)?;
    Ok(SampleSets {
        train,
        weights,
        validation,
    })
}

/// A trained model on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub best_validation_dsc: f64,
    pub best_epoch: usize,
    /// True when an existing artifact was reused.
    #[serde(skip)]
    pub reused: bool,
}

fn set_key(sets: &SampleSets) -> String {
    let mut h = Sha256::new();
    for s in sets.train.iter().chain(&sets.validation) {
        h.update(s.case_id.as_bytes());
        for v in s.input.data.iter().chain(&s.target.data) {
            h.update(v.to_le_bytes());
        }
    }
    h.update(serde_json::to_vec(&sets.weights).expect("weights serialize"));
    h.update(sets.validation.len().to_le_bytes());
    hex::encode(h.finalize())
}

fn train_stage(
    sets: &SampleSets,
    spec: ModelSpec,
    tc: &TrainConfig,
    metadata: serde_json::Value,
    dir: &Path,
    stem: &str,
) -> Result<TrainedModel> {
    let key = content_hash(&(set_key(sets), &spec, tc, &metadata));
    let ckpt = dir.join(format!("{stem}-{}.ckpt", short(&key)));
    let log = dir.join(format!("{stem}-{}.jsonl", short(&key)));
    if ckpt.exists() && log.exists() {
        let l = TrainLog::load(&log)?;
        // the summary line is written last, so a stop reason marks a finished run
        if !l.stop_reason.is_empty() {
            log::info!("reusing {}", ckpt.display());
            return Ok(TrainedModel {
                checkpoint: ckpt,
                log,
                best_validation_dsc: l.best_validation_dsc,
                best_epoch: l.best_epoch,
                reused: true,
            });
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let out = TrainOutput {
        checkpoint_path: Some(ckpt.clone()),
        log_path: Some(log.clone()),
        config_hash: key,
        metadata,
    };
    let model = build_model(&spec)?;
    let r = train_model(
        model,
        &sets.train,
        Some(&sets.weights),
        &sets.validation,
        tc,
        &out,
    )?;
    r.best.save(&ckpt)?;
    Ok(TrainedModel {
        checkpoint: ckpt,
        log,
        best_validation_dsc: r.log.best_validation_dsc,
        best_epoch: r.log.best_epoch,
        reused: false,
    })
}

pub fn train_teacher(
    manifest: &DatasetManifest,
    cache: &CaseCache,
    mode: GuidanceMode,
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<TrainedModel> {
    let sets = teacher_sets(manifest, cache, mode, cfg)?;
    let spec = cfg.teacher.spec(2, 1, cfg.seed);
    let meta = serde_json::json!({
        "role": "teacher",
        "guidance": mode,
        "preprocess": cfg.preprocess,
    });
    train_stage(
        &sets,
        spec,
        &cfg.teacher_training,
        meta,
        out_dir,
        &format!("teacher-{mode}"),
    )
}

pub fn train_student(
    strong: &DatasetManifest,
    pseudo: Option<&DatasetManifest>,
    variant: StudentVariant,
    cache: &CaseCache,
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<TrainedModel> {
    let sets = student_sets(strong, pseudo, variant, cache, cfg)?;
    let spec = cfg.student.spec(1, variant.heads(), cfg.seed);
    let meta = serde_json::json!({
        "role": "student",
        "variant": variant,
        "preprocess": cfg.preprocess,
    });
    train_stage(
        &sets,
        spec,
        &cfg.student_training,
        meta,
        out_dir,
        &format!("student-{variant}"),
    )
}

/// Pseudo-labels the weak records into a content-addressed directory under
/// `out_root`, reusing an earlier run with identical inputs.
pub fn pseudo_stage(
    teacher: &Checkpoint,
    manifest: &DatasetManifest,
    mode: GuidanceMode,
    cfg: &ExperimentConfig,
    out_root: &Path,
) -> Result<(DatasetManifest, Option<PseudoReport>)> {
    let weak: Vec<&AnnotationRecord> = manifest
        .records
        .iter()
        .filter(|r| r.supervision_kind == SupervisionKind::Weak)
        .collect();
    let key = content_hash(&(teacher.hash(), mode, &cfg.distill, &cfg.preprocess, &weak));
    let dir = out_root.join(format!("{mode}-{}", short(&key)));
    let manifest_path = dir.join("pseudo_manifest.json");
    if manifest_path.exists() {
        log::info!("reusing {}", manifest_path.display());
        return Ok((DatasetManifest::load(&manifest_path)?, None));
    }
    let out = pseudo_label(teacher, manifest, mode, &cfg.distill, &cfg.preprocess, &dir)?;
    Ok((out.manifest, Some(out.report)))
}

fn gt_mask(m: &DatasetManifest, r: &AnnotationRecord) -> Result<crate::volume::Volume> {
    let p = r
        .mask_path
        .as_ref()
        .ok_or_else(|| invalid!("case {} has no ground-truth mask", r.case_id))?;
    load_volume(m.resolve(p))
}

fn evaluated_records(m: &DatasetManifest, split: Option<Split>) -> Vec<&AnnotationRecord> {
    m.records
        .iter()
        .filter(|r| r.mask_path.is_some() && split.is_none_or(|s| in_split(m, r, s)))
        .collect()
}

/// Segments every labelled record of `split` with a student and scores the
/// predictions. Predictions are written to `out_dir` when given.
pub fn evaluate_student(
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    split: Option<Split>,
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    let model = ckpt.to_model()?;
    let pc: PreprocessConfig = ckpt
        .header
        .metadata
        .get("preprocess")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_else(|| cfg.preprocess.clone());
    let mut cases = Vec::new();
    for r in evaluated_records(manifest, split) {
        let lp = r.lungmask_path.as_ref().ok_or_else(|| {
            invalid!(
                "case {} has no lung mask; supply one (labels 1 = right, 2 = left)",
                r.case_id
            )
        })?;
        let image = load_volume(manifest.resolve(&r.image_path))?;
        let lungs = load_volume(manifest.resolve(lp))?;
        let pred = segment(&model, &image, &lungs, cfg.threshold, &pc)?;
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            save_volume(&pred, dir.join(format!("{}_pred.nii.gz", r.case_id)))?;
        }
        let gt = gt_mask(manifest, r)?;
        cases.push(CaseMetrics::compute(
            &r.case_id,
            r.source.clone(),
            pred.data(),
            gt.data(),
            &cfg.eval,
        )?);
    }
    Ok(EvalReport::from_cases(cfg.eval, cases, Vec::new()))
}

/// Scores a teacher on labelled records, guiding it with boxes (or
/// centroids) derived from the ground-truth masks.
pub fn evaluate_teacher(
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    split: Option<Split>,
    mode: GuidanceMode,
    cfg: &ExperimentConfig,
) -> Result<EvalReport> {
    let model = ckpt.to_model()?;
    let mut cases = Vec::new();
    for r in evaluated_records(manifest, split) {
        let image = load_volume(manifest.resolve(&r.image_path))?;
        let gt = gt_mask(manifest, r)?;
        let boxes = component_boxes(gt.data());
        let pred = if boxes.is_empty() {
            image.with_data(ndarray::Array3::zeros(image.shape()))?
        } else {
            pseudo_label_case(&model, &image, &boxes, mode, &cfg.distill, &cfg.preprocess)?.0
        };
        cases.push(CaseMetrics::compute(
            &r.case_id,
            r.source.clone(),
            pred.data(),
            gt.data(),
            &cfg.eval,
        )?);
    }
    Ok(EvalReport::from_cases(cfg.eval, cases, Vec::new()))
}

/// Scores pseudo masks against reference masks for the same cases.
pub fn audit_pseudo_labels(
    pseudo: &DatasetManifest,
    truth: &DatasetManifest,
    cfg: &MatchConfig,
) -> Result<EvalReport> {
    let mut cases = Vec::new();
    let mut missing = Vec::new();
    for r in &pseudo.records {
        let Some(t) = truth.get(&r.case_id).filter(|t| t.mask_path.is_some()) else {
            missing.push(r.case_id.clone());
            continue;
        };
        let p = gt_mask(pseudo, r)?;
        let g = gt_mask(truth, t)?;
        cases.push(CaseMetrics::compute(
            &r.case_id,
            r.source.clone(),
            p.data(),
            g.data(),
            cfg,
        )?);
    }
    Ok(EvalReport::from_cases(*cfg, cases, missing))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub checkpoint: PathBuf,
    pub best_validation_dsc: f64,
    pub best_epoch: usize,
    pub test: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub scenario: ScenarioKind,
    pub teachers: BTreeMap<GuidanceMode, ModelSummary>,
    pub students: BTreeMap<StudentVariant, ModelSummary>,
    /// Pseudo labels against hidden phantom truth, when available.
    pub pseudo_audit: Option<Aggregate>,
}

impl ScenarioSummary {
    pub fn teacher_table(&self) -> String {
        let rows: Vec<(String, &Aggregate)> = [
            (GuidanceMode::Point, "Point Guided"),
            (GuidanceMode::Box, "Box Guided"),
        ]
        .into_iter()
        .filter_map(|(m, name)| Some((name.to_string(), &self.teachers.get(&m)?.test)))
        .collect();
        format_table(&rows)
    }

    pub fn student_table(&self) -> String {
        let rows: Vec<(String, &Aggregate)> = self
            .students
            .iter()
            .map(|(v, s)| (v.label().to_string(), &s.test))
            .collect();
        format_table(&rows)
    }
}

/// Layout of one scenario's result tree.
#[derive(Debug, Clone)]
pub struct ScenarioTree {
    pub root: PathBuf,
}

impl ScenarioTree {
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn cache(&self) -> PathBuf {
        self.root.join("cache")
    }
    pub fn teachers(&self) -> PathBuf {
        self.root.join("teachers")
    }
    pub fn pseudo(&self) -> PathBuf {
        self.root.join("pseudo")
    }
    pub fn students(&self) -> PathBuf {
        self.root.join("students")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

/// Phantom cohort for a scenario: strong training/validation cases, then
/// strong test cases, then weak cases. The split is fixed here rather than
/// drawn at random so every scenario sees exactly the requested counts.
fn scenario_cohort(
    size: CohortSize,
    cfg: &ExperimentConfig,
    dir: &Path,
) -> Result<(DatasetManifest, Option<DatasetManifest>)> {
    let n_test = cfg.scenario.test_cases;
    if size.strong < 2 {
        return Err(invalid!(
            "a scenario needs at least 2 strong cases (training and validation)"
        ));
    }
    let n = size.strong + n_test + size.weak;
    let key = content_hash(&(
        size,
        n_test,
        &cfg.phantoms,
        cfg.seed,
        cfg.split.validation_fraction,
    ));
    let manifest_path = dir.join("manifest.json");
    let key_path = dir.join("cohort.key");
    if manifest_path.exists() && fs::read_to_string(&key_path).ok().as_deref() == Some(key.as_str())
    {
        let truth = dir.join("truth.json");
        return Ok((
            DatasetManifest::load(&manifest_path)?,
            Some(DatasetManifest::load(&truth)?),
        ));
    }
    let files = generate_cohort(n, size.weak, &cfg.phantoms, cfg.seed, dir)?;
    let mut m = files.manifest;
    let n_val = ((size.strong as f64 * cfg.split.validation_fraction).round() as usize)
        .clamp(1, size.strong - 1);
    for (i, r) in m.records.iter().enumerate() {
        let split = if i < size.strong - n_val {
            Split::Train
        } else if i < size.strong {
            Split::Validation
        } else if i < size.strong + n_test {
            Split::Test
        } else {
            Split::Train
        };
        m.split.insert(r.case_id.clone(), split);
    }
    m.save(&manifest_path)?;
    fs::write(&key_path, &key).map_err(|e| Error::io(&key_path, e))?;
    Ok((m, Some(files.truth)))
}

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    log::info!("stage {name}");
    f().map_err(|e| e.in_stage(name))
}

fn cached_report(
    path: &Path,
    ckpt_hash: &str,
    compute: impl FnOnce() -> Result<EvalReport>,
) -> Result<EvalReport> {
    #[derive(Serialize, Deserialize)]
    struct Stored {
        checkpoint: String,
        report: EvalReport,
    }
    if let Ok(s) = read_json::<Stored>(path) {
        if s.checkpoint == ckpt_hash {
            return Ok(s.report);
        }
    }
    let report = compute()?;
    write_json(
        path,
        &Stored {
            checkpoint: ckpt_hash.to_string(),
            report,
        },
    )?;
    Ok(read_json::<Stored>(path)?.report)
}

/// Runs prepare, both teachers, pseudo-labelling, the configured students
/// and all evaluations, writing the result tree under `root/<scenario>`.
/// Completed stages are reused on rerun.
pub fn run_scenario(
    kind: ScenarioKind,
    cfg: &ExperimentConfig,
    root: &Path,
) -> Result<ScenarioSummary> {
    let tree = ScenarioTree {
        root: root.join(kind.to_string()),
    };
    write_json(&tree.root.join("config.json"), cfg)?;
    let size = match kind {
        ScenarioKind::Vast => cfg.scenario.vast,
        ScenarioKind::Scarce => cfg.scenario.scarce,
    };
    let (manifest, truth) = stage("data", || match &cfg.scenario.manifest {
        Some(p) => Ok((DatasetManifest::load(p)?, None)),
        None => scenario_cohort(size, cfg, &tree.data()),
    })?;
    let cache = CaseCache::new(tree.cache())?;
    let (manifest, _) = stage("prepare", || prepare(&manifest, cfg, &cache, true))?;

    let mut summary = ScenarioSummary {
        scenario: kind,
        teachers: BTreeMap::new(),
        students: BTreeMap::new(),
        pseudo_audit: None,
    };
    let mut pseudo_teacher = None;
    for mode in [GuidanceMode::Point, GuidanceMode::Box] {
        let t = stage(&format!("train-teacher[{mode}]"), || {
            train_teacher(&manifest, &cache, mode, cfg, &tree.teachers())
        })?;
        let ckpt = Checkpoint::load(&t.checkpoint)?;
        let report = stage(&format!("evaluate-teacher[{mode}]"), || {
            cached_report(
                &tree.reports().join(format!("teacher_{mode}.json")),
                &ckpt.hash(),
                || evaluate_teacher(&ckpt, &manifest, Some(Split::Test), mode, cfg),
            )
        })?;
        summary.teachers.insert(
            mode,
            ModelSummary {
                checkpoint: t.checkpoint.clone(),
                best_validation_dsc: t.best_validation_dsc,
                best_epoch: t.best_epoch,
                test: report.overall,
            },
        );
        if mode == cfg.scenario.pseudo_guidance {
            pseudo_teacher = Some(ckpt);
        }
    }
    let teacher = pseudo_teacher.expect("pseudo guidance is one of the trained modes");

    let needs_pseudo = cfg
        .scenario
        .variants
        .iter()
        .any(|v| *v != StudentVariant::Baseline);
    let has_weak = manifest
        .records
        .iter()
        .any(|r| r.supervision_kind == SupervisionKind::Weak);
    let pseudo = if needs_pseudo && has_weak {
        let (p, report) = stage("pseudo-label", || {
            pseudo_stage(
                &teacher,
                &manifest,
                cfg.scenario.pseudo_guidance,
                cfg,
                &tree.pseudo(),
            )
        })?;
        if let Some(r) = report {
            if r.empty_stacks > 0 {
                log::warn!(
                    "{} of {} pseudo-labelled tumors came out empty",
                    r.empty_stacks,
                    r.stacks
                );
            }
        }
        if let Some(t) = &truth {
            summary.pseudo_audit = Some(audit_pseudo_labels(&p, t, &cfg.eval)?.overall);
        }
        Some(p)
    } else {
        None
    };

    for &variant in &cfg.scenario.variants {
        let s = stage(&format!("train-student[{variant}]"), || {
            train_student(
                &manifest,
                pseudo.as_ref(),
                variant,
                &cache,
                cfg,
                &tree.students(),
            )
        })?;
        let ckpt = Checkpoint::load(&s.checkpoint)?;
        let report = stage(&format!("evaluate-student[{variant}]"), || {
            cached_report(
                &tree.reports().join(format!("student_{variant}.json")),
                &ckpt.hash(),
                || evaluate_student(&ckpt, &manifest, Some(Split::Test), cfg, None),
            )
        })?;
        summary.students.insert(
            variant,
            ModelSummary {
                checkpoint: s.checkpoint,
                best_validation_dsc: s.best_validation_dsc,
                best_epoch: s.best_epoch,
                test: report.overall,
            },
        );
    }

    let reports = tree.reports();
    write_json(&reports.join("summary.json"), &summary)?;
    let write = |name: &str, text: String| -> Result<()> {
        let p = reports.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("teachers.md", summary.teacher_table())?;
    write("students.md", summary.student_table())?;
    Ok(summary)
}
