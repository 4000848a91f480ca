//! Declarative experiments: a JSON manifest describes the cohorts, the
//! acquisition and reconstruction settings, the training configurations and
//! the evaluation tasks; [`run_experiment`] executes it end to end and writes
//! every artifact with its provenance.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{sliding_window_predict, AugmentConfig, PatchSpec};
use crate::error::{Error, Result};
use crate::forward::{simulate_stacks, LRStack, Motion, SimulationSpec};
use crate::io::{write_atomic, write_json, write_labels, write_volume};
use crate::metrics::{dice, squared_distance_transform, TissueReport, TISSUE_CLASSES};
use crate::phantom::{generate_phantom_raw, make_cohort_with_prefix, subject_id, CohortSubject, PhantomParams, GA_MAX, GA_MIN};
use crate::registration::{register_rigid, RegistrationConfig};
use crate::rng::{derive_seed, stream_id};
use crate::segmenter::{run_cv, Configuration, FeatureConfig, FoldPlan, GaussianSegmenter, Normalization, TrainingSettings, TrainingVolume};
use crate::solver::{Problem, ReconConfig, ReconResult, Regularizer, WeightConvention};
use crate::stats::{bonferroni, ga_edges, stratify_by_ga, wilcoxon_rank_sum, wilcoxon_signed_rank, GaBin, PMethod};
use crate::volume::{normalize, resample, warp_labels, Geometry, Interpolation, LabelMap, RawLabelMap, RigidTransform, Volume, CLASS_NAMES};

pub const MANIFEST_VERSION: u32 = 1;

/// Number of per-class comparisons in the Bonferroni family.
pub const BONFERRONI_M: usize = 7;

/// Relabelling of raw annotation values into the canonical schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassMapping(pub BTreeMap<u8, u8>);

impl ClassMapping {
    pub fn identity() -> Self {
        ClassMapping((0..8).map(|c| (c, c)).collect())
    }

    /// Identity on the canonical classes plus the given extra rules.
    pub fn identity_with(extra: &[(u8, u8)]) -> Self {
        let mut m = ClassMapping::identity();
        m.0.extend(extra.iter().cloned());
        m
    }
}

pub fn merge_classes(raw: &RawLabelMap, mapping: &ClassMapping) -> Result<LabelMap> {
    let mut lut = [None; 256];
    for (&from, &to) in &mapping.0 {
        lut[from as usize] = Some(to);
    }
    let mut out = Vec::with_capacity(raw.labels.len());
    for &l in &raw.labels {
        out.push(lut[l as usize].ok_or_else(|| Error::Schema(format!("label {l} has no mapping")))?);
    }
    LabelMap::new(raw.geometry.clone(), out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub size: usize,
    pub spacing: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n: usize,
    pub ga_range: (f64, f64),
    pub prefix: String,
    #[serde(default)]
    pub corpus_callosum: bool,
}

impl CohortSpec {
    pub fn ids(&self) -> Vec<String> {
        (0..self.n).map(|i| subject_id(&self.prefix, i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiReconSpec {
    pub recon: ReconConfig,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub k: usize,
    /// Explicit subject → fold map; GA-stratified when absent.
    #[serde(default)]
    pub assignment: Option<BTreeMap<String, usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutOfDomainSpec {
    pub cohort: CohortSpec,
    pub simulation: SimulationSpec,
    pub recon: ReconConfig,
    /// Isotropic spacing the reconstructions are resampled to; labels are
    /// regenerated on that grid.
    #[serde(default)]
    pub resample_spacing: Option<f64>,
    pub label_mapping: ClassMapping,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaBinSpec {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSpec {
    /// Write reconstructions, label maps and predictions as NIfTI.
    pub volumes: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub version: u32,
    pub name: String,
    pub seed: u64,
    pub grid: GridSpec,
    pub cohort: CohortSpec,
    pub split: SplitSpec,
    pub simulation: SimulationSpec,
    /// Reconstruction that carries the manual labels (Baseline training data
    /// and in-domain test images).
    pub reference_recon: ReconConfig,
    pub multi_recon: BTreeMap<Configuration, MultiReconSpec>,
    pub configurations: Vec<Configuration>,
    pub folds: FoldSpec,
    pub training: TrainingSettings,
    pub registration: RegistrationConfig,
    /// Radius (mm) by which the brain support is grown to form the mask
    /// applied to every reconstruction.
    pub mask_dilation_mm: f64,
    #[serde(default)]
    pub out_of_domain: Option<OutOfDomainSpec>,
    pub ga_bins: GaBinSpec,
    pub outputs: OutputSpec,
}

fn schema(msg: impl Into<String>) -> Error {
    Error::Schema(msg.into())
}

impl ExperimentManifest {
    /// Desk-scale version of the two published experiments: 40 subjects
    /// (30 train / 10 test), λ-style and α-style multi-reconstruction with
    /// four weights each, and a 40-subject out-of-domain cohort.
    pub fn desk_scale() -> Self {
        let cohort = CohortSpec { n: 40, ga_range: (GA_MIN, GA_MAX), prefix: "sub".into(), corpus_callosum: false };
        let ids = cohort.ids();
        // Every fourth subject (by age rank) is held out.
        let test: Vec<String> = ids.iter().enumerate().filter(|(i, _)| i % 4 == 2).map(|(_, s)| s.clone()).collect();
        let train: Vec<String> = ids.iter().filter(|s| !test.contains(s)).cloned().collect();
        let mut lambda = ReconConfig::lambda_default();
        lambda.max_iters = 20;
        lambda.w_ref = 0.01;
        let mut alpha = ReconConfig::new(Regularizer::TikhonovGradient, WeightConvention::AlphaStyle, 0.02);
        alpha.max_iters = 30;
        let mut multi = BTreeMap::new();
        multi.insert(Configuration::MialsrtkAugmented, MultiReconSpec { recon: lambda.clone(), weights: vec![0.1, 0.75, 1.5, 3.0] });
        multi.insert(Configuration::NiftymicAugmented, MultiReconSpec { recon: alpha, weights: vec![0.01, 0.02, 0.05, 0.1] });
        let mut ood_recon = ReconConfig::new(Regularizer::HuberTv { delta: None }, WeightConvention::AlphaStyle, 0.002);
        ood_recon.max_iters = 20;
        let ood_sim = SimulationSpec { slice_thickness: 4.4, psf_fwhm_through: Some(3.5), noise_sd: 0.03, ..SimulationSpec::default() };
        ExperimentManifest {
            version: MANIFEST_VERSION,
            name: "desk-scale".into(),
            seed: 2023,
            grid: GridSpec { size: 48, spacing: 1.1 },
            cohort,
            split: SplitSpec { train, test },
            simulation: SimulationSpec::default(),
            reference_recon: lambda,
            multi_recon: multi,
            configurations: Configuration::ALL.to_vec(),
            folds: FoldSpec { k: 5, assignment: None },
            training: TrainingSettings {
                augment: AugmentConfig::default(),
                patch: PatchSpec::default(),
                patches_per_volume: 4,
                features: FeatureConfig::default(),
            },
            registration: RegistrationConfig::default(),
            mask_dilation_mm: 2.2,
            out_of_domain: Some(OutOfDomainSpec {
                cohort: CohortSpec { n: 40, ga_range: (GA_MIN, GA_MAX), prefix: "ood".into(), corpus_callosum: true },
                simulation: ood_sim,
                recon: ood_recon,
                resample_spacing: None,
                label_mapping: ClassMapping::identity_with(&[(8, 3)]),
            }),
            ga_bins: GaBinSpec { lo: GA_MIN, hi: GA_MAX, step: 2.0 },
            outputs: OutputSpec { volumes: true },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let m: ExperimentManifest = serde_json::from_str(&text).map_err(|e| schema(format!("{}: {e}", path.display())))?;
        Ok(m)
    }

    pub fn grid_geometry(&self) -> Result<Geometry> {
        Geometry::isotropic(self.grid.size, self.grid.spacing)
    }

    fn check_recon(&self, what: &str, r: &ReconConfig) -> Result<()> {
        r.derived_weight().map_err(|e| schema(format!("{what}: {e}")))?;
        if (r.hr_spacing - self.grid.spacing).abs() > 1e-9 {
            return Err(schema(format!("{what}: reconstruction spacing {} differs from the grid spacing {}", r.hr_spacing, self.grid.spacing)));
        }
        if r.max_iters == 0 {
            return Err(schema(format!("{what}: max_iters must be positive")));
        }
        Ok(())
    }

    fn training_recons(&self) -> Vec<ReconConfig> {
        let mut out = vec![self.reference_recon.clone()];
        for spec in self.multi_recon.values() {
            out.extend(spec.weights.iter().map(|&w| spec.recon.with_weight(w)));
        }
        out
    }

    /// Schema and leakage checks; nothing is computed before these pass.
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(schema(format!("manifest version {} (expected {MANIFEST_VERSION})", self.version)));
        }
        if self.grid.size < 8 || !(self.grid.spacing > 0.0 && self.grid.spacing.is_finite()) {
            return Err(schema("grid needs at least 8 voxels per axis and a positive spacing"));
        }
        let check_cohort = |c: &CohortSpec| -> Result<()> {
            let (lo, hi) = c.ga_range;
            if c.n == 0 || !(GA_MIN <= lo && lo <= hi && hi <= GA_MAX) || c.prefix.is_empty() {
                return Err(schema(format!("cohort {:?}: needs subjects and an age range inside [{GA_MIN}, {GA_MAX}]", c.prefix)));
            }
            Ok(())
        };
        check_cohort(&self.cohort)?;
        let ids: BTreeSet<String> = self.cohort.ids().into_iter().collect();
        let train: BTreeSet<&String> = self.split.train.iter().collect();
        let test: BTreeSet<&String> = self.split.test.iter().collect();
        if train.len() != self.split.train.len() || test.len() != self.split.test.len() {
            return Err(schema("duplicate subject in the split"));
        }
        if train.is_empty() {
            return Err(schema("no training subjects"));
        }
        if let Some(s) = self.split.train.iter().chain(&self.split.test).find(|s| !ids.contains(*s)) {
            return Err(schema(format!("subject {s} is not in the cohort")));
        }
        if let Some(s) = train.intersection(&test).next() {
            return Err(Error::Leakage(format!("held-out subject {s} is also a training subject")));
        }
        if self.folds.k == 0 || self.folds.k > train.len() {
            return Err(schema(format!("{} folds for {} training subjects", self.folds.k, train.len())));
        }
        if let Some(a) = &self.folds.assignment {
            if let Some(s) = a.keys().find(|s| test.contains(s)) {
                return Err(Error::Leakage(format!("held-out subject {s} is assigned to a training fold")));
            }
            if let Some(s) = a.keys().find(|s| !train.contains(s)) {
                return Err(schema(format!("fold assignment names unknown subject {s}")));
            }
            if let Some(s) = train.iter().find(|s| !a.contains_key(s.as_str())) {
                return Err(schema(format!("training subject {s} has no fold")));
            }
            FoldPlan { k: self.folds.k, assignment: a.clone() }.validate()?;
        }
        if self.configurations.is_empty() {
            return Err(schema("no training configurations"));
        }
        let unique: BTreeSet<_> = self.configurations.iter().collect();
        if unique.len() != self.configurations.len() {
            return Err(schema("duplicate training configuration"));
        }
        self.check_recon("reference reconstruction", &self.reference_recon)?;
        for c in &self.configurations {
            if *c == Configuration::Baseline {
                continue;
            }
            let spec = self.multi_recon.get(c).ok_or_else(|| schema(format!("{} has no multi-reconstruction spec", c.name())))?;
            if spec.weights.is_empty() {
                return Err(schema(format!("{} has no weights", c.name())));
            }
            for &w in &spec.weights {
                self.check_recon(c.name(), &spec.recon.with_weight(w))?;
            }
        }
        self.training.augment.validate()?;
        self.training.patch.validate()?;
        self.training.features.validate()?;
        if self.training.patches_per_volume == 0 {
            return Err(schema("patches_per_volume must be positive"));
        }
        if self.registration.levels == 0 {
            return Err(schema("registration needs at least one level"));
        }
        if !(self.mask_dilation_mm >= 0.0) {
            return Err(schema("mask dilation must be non-negative"));
        }
        if let Some(o) = &self.out_of_domain {
            check_cohort(&o.cohort)?;
            if o.cohort.prefix == self.cohort.prefix {
                return Err(schema("out-of-domain subjects need their own id prefix"));
            }
            self.check_recon("out-of-domain reconstruction", &o.recon)?;
            if self.training_recons().contains(&o.recon) && o.simulation == self.simulation {
                return Err(schema("out-of-domain images must come from a configuration no training set uses"));
            }
            if let Some(s) = o.resample_spacing {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(schema("out-of-domain resample spacing must be positive"));
                }
            }
        }
        if !(self.ga_bins.step > 0.0 && self.ga_bins.hi > self.ga_bins.lo) {
            return Err(schema("GA bins need increasing bounds and a positive step"));
        }
        Ok(())
    }

    pub fn fold_plan(&self, cohort: &[CohortSubject]) -> Result<FoldPlan> {
        if let Some(a) = &self.folds.assignment {
            return Ok(FoldPlan { k: self.folds.k, assignment: a.clone() });
        }
        let train: BTreeSet<&String> = self.split.train.iter().collect();
        let subjects: Vec<(String, f64)> =
            cohort.iter().filter(|s| train.contains(&s.id)).map(|s| (s.id.clone(), s.ga)).collect();
        FoldPlan::stratified(&subjects, self.folds.k)
    }
}

/// `<subject>_rec-<convention><weight>`.
pub fn recon_stem(subject: &str, cfg: &ReconConfig) -> String {
    format!("{subject}_rec-{}{}", cfg.convention.tag(), cfg.weight_value)
}

/// Brain mask: label support grown by `radius_mm`.
fn brain_mask(labels: &LabelMap, radius_mm: f64) -> Vec<bool> {
    let seeds: Vec<bool> = labels.labels().iter().map(|&l| l != 0).collect();
    let d2 = squared_distance_transform(&seeds, labels.dims(), labels.geometry().spacing());
    let r2 = radius_mm * radius_mm + 1e-9;
    d2.iter().map(|&d| d <= r2).collect()
}

fn apply_mask(v: &Volume, mask: &[bool]) -> Result<Volume> {
    Volume::new(v.geometry().clone(), v.data().iter().zip(mask).map(|(&x, &m)| if m { x } else { 0.0 }).collect())
}

fn stack_transform(s: &LRStack) -> Result<RigidTransform> {
    match &s.model.motion {
        Motion::Stack { transform } => Ok(*transform),
        Motion::PerSlice { .. } => Err(Error::Parameter("stack-frame reconstruction needs per-stack motion".into())),
    }
}

/// Transforms that reconstruct in the frame of the first stack.
fn stack0_frame(stacks: &[LRStack]) -> Result<(Vec<RigidTransform>, RigidTransform)> {
    let t0 = stack_transform(&stacks[0])?;
    let inv0 = t0.inverse();
    let ts = stacks.iter().map(|s| Ok(stack_transform(s)?.compose(&inv0))).collect::<Result<_>>()?;
    Ok((ts, t0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconRecord {
    pub subject: String,
    pub role: String,
    pub convention: WeightConvention,
    pub weight: f64,
    pub derived_weight: f64,
    pub regularizer: Regularizer,
    pub iterations: usize,
    pub converged: bool,
    pub data_residual: f64,
    pub regularizer_value: f64,
    pub file: Option<String>,
}

impl ReconRecord {
    fn new(subject: &str, role: &str, cfg: &ReconConfig, r: &ReconResult, file: Option<String>) -> Self {
        ReconRecord {
            subject: subject.into(),
            role: role.into(),
            convention: cfg.convention,
            weight: cfg.weight_value,
            derived_weight: r.derived_weight,
            regularizer: cfg.regularizer,
            iterations: r.iterations,
            converged: r.converged,
            data_residual: r.data_residual,
            regularizer_value: r.regularizer_value,
            file,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakLabelRecord {
    pub subject: String,
    pub configuration: Configuration,
    pub transform: RigidTransform,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Mean tissue DSC of the propagated labels against the exact labels of
    /// the target frame (quality control only).
    pub qc_mean_dsc: f64,
    pub file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub configuration: Configuration,
    pub fold: usize,
    pub file: String,
    pub training_volumes: Vec<String>,
    pub held_out_subjects: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub software: String,
    pub manifest: ExperimentManifest,
    pub subject_seeds: BTreeMap<String, u64>,
    pub fold_plan: FoldPlan,
    pub reconstructions: Vec<ReconRecord>,
    pub weak_labels: Vec<WeakLabelRecord>,
    pub models: Vec<ModelRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub task: String,
    pub configuration: Configuration,
    pub metric: String,
    pub class: String,
    pub baseline_mean: f64,
    pub augmented_mean: f64,
    pub n_pairs: usize,
    pub statistic: f64,
    pub n: usize,
    pub method: PMethod,
    pub p_value: f64,
    pub p_adjusted: f64,
    pub rank_sum_p: Option<f64>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaCurve {
    pub task: String,
    pub configuration: Configuration,
    pub bins: Vec<GaBin>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskResult {
    pub task: String,
    pub reports: BTreeMap<Configuration, Vec<TissueReport>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub tasks: Vec<TaskResult>,
    pub comparisons: Vec<Comparison>,
    pub curves: Vec<GaCurve>,
}

pub const IN_DOMAIN: &str = "in-domain";
pub const OUT_OF_DOMAIN: &str = "out-of-domain";

struct Layout {
    root: PathBuf,
}

impl Layout {
    fn dir(&self, rel: &str) -> Result<PathBuf> {
        let d = self.root.join(rel);
        fs::create_dir_all(&d)?;
        Ok(d)
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().into_owned()
    }
}

/// A test image with its reference labels.
struct TestImage {
    subject: String,
    ga: f64,
    volume: Volume,
    truth: LabelMap,
}

fn mean_dsc(a: &LabelMap, b: &LabelMap) -> Result<f64> {
    let mut s = 0.0;
    for c in TISSUE_CLASSES {
        s += dice(a, b, c)?;
    }
    Ok(s / TISSUE_CLASSES.len() as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

fn mean_sd(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 { (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (Some(m), Some(sd))
}

/// Per-subject values of one table row (`class` None = overall).
fn row_values(reports: &[TissueReport], metric: &str, class: Option<usize>) -> Vec<Option<f64>> {
    reports
        .iter()
        .map(|r| match (metric, class) {
            ("dsc", Some(c)) => Some(r.dsc[c]),
            ("dsc", None) => Some(r.mean_dsc),
            ("assd", Some(c)) => r.assd[c],
            _ => r.mean_assd,
        })
        .collect()
}

const TABLE_ROWS: [(&str, Option<usize>); 9] = [
    ("dsc", Some(0)),
    ("dsc", Some(1)),
    ("dsc", Some(2)),
    ("dsc", Some(3)),
    ("dsc", Some(4)),
    ("dsc", Some(5)),
    ("dsc", Some(6)),
    ("dsc", None),
    ("assd", None),
];

fn class_label(class: Option<usize>) -> String {
    class.map(|c| CLASS_NAMES[TISSUE_CLASSES[c] as usize].to_string()).unwrap_or_else(|| "overall".into())
}

fn compare(task: &TaskResult) -> Result<Vec<Comparison>> {
    let mut out = Vec::new();
    let Some(base) = task.reports.get(&Configuration::Baseline) else {
        return Ok(out);
    };
    for (cfg, reps) in &task.reports {
        if *cfg == Configuration::Baseline {
            continue;
        }
        for (metric, class) in TABLE_ROWS {
            let (bv, av) = (row_values(base, metric, class), row_values(reps, metric, class));
            let pairs: Vec<(f64, f64)> = bv.iter().zip(&av).filter_map(|(b, a)| Some(((*a)?, (*b)?))).collect();
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.iter().cloned().unzip();
            let (am, bm) = (mean_sd(&a).0.unwrap_or(f64::NAN), mean_sd(&b).0.unwrap_or(f64::NAN));
            let (statistic, n, method, p, degenerate) = if pairs.len() >= 5 {
                let w = wilcoxon_signed_rank(&a, &b)?;
                (w.statistic, w.n, w.method, w.p_value, w.degenerate)
            } else {
                (0.0, 0, PMethod::Degenerate, 1.0, true)
            };
            let rank_sum_p = if pairs.len() >= 5 { Some(wilcoxon_rank_sum(&a, &b)?.p_value) } else { None };
            out.push(Comparison {
                task: task.task.clone(),
                configuration: *cfg,
                metric: metric.into(),
                class: class_label(class),
                baseline_mean: bm,
                augmented_mean: am,
                n_pairs: pairs.len(),
                statistic,
                n,
                method,
                p_value: p,
                // Only the per-tissue rows are corrected for multiplicity.
                p_adjusted: if class.is_some() { bonferroni(&[p], BONFERRONI_M)?[0] } else { p },
                rank_sum_p,
                degenerate,
            });
        }
    }
    Ok(out)
}

/// Metric table laid out like the published one: one row per (metric,
/// class), one mean/sd/p column group per (task, configuration).
fn table_csv(tasks: &[TaskResult], comparisons: &[Comparison]) -> String {
    let mut header = vec!["metric".to_string(), "class".to_string()];
    let mut cols = Vec::new();
    for t in tasks {
        for cfg in t.reports.keys() {
            cols.push((t, *cfg));
            let key = format!("{}/{}", t.task, cfg.name());
            header.push(format!("{key}/mean"));
            header.push(format!("{key}/sd"));
            header.push(format!("{key}/p_adj"));
        }
    }
    let mut out = header.join(",");
    out.push('\n');
    for (metric, class) in TABLE_ROWS {
        let mut row = vec![metric.to_string(), class_label(class)];
        for (t, cfg) in &cols {
            let vals: Vec<f64> = row_values(&t.reports[cfg], metric, class).into_iter().flatten().collect();
            let (m, sd) = mean_sd(&vals);
            row.push(fmt_opt(m));
            row.push(fmt_opt(sd));
            let p = comparisons
                .iter()
                .find(|c| c.task == t.task && c.configuration == *cfg && c.metric == metric && c.class == class_label(class))
                .map(|c| c.p_adjusted);
            row.push(fmt_opt(p));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn reports_csv(reports: &[TissueReport]) -> String {
    let mut s = TissueReport::csv_header();
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

fn curves_csv(curves: &[GaCurve]) -> String {
    let mut s = String::from("task,configuration,ga_lo,ga_hi,count,mean_dsc,mean_assd\n");
    for c in curves {
        for b in &c.bins {
            s.push_str(&format!(
                "{},{},{:.1},{:.1},{},{},{}\n",
                c.task,
                c.configuration.name(),
                b.lo,
                b.hi,
                b.count,
                fmt_opt(b.mean_dsc),
                fmt_opt(b.mean_assd)
            ));
        }
    }
    s
}

/// Runs the manifest end to end, writing artifacts under `out_dir`.
pub fn run_experiment(m: &ExperimentManifest, out_dir: &Path) -> Result<ExperimentReport> {
    m.validate()?;
    let layout = Layout { root: out_dir.to_path_buf() };
    fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join("manifest.json"), m)?;
    let grid = m.grid_geometry()?;
    let save_volumes = m.outputs.volumes;

    let template = PhantomParams::new(30.0, 0).with_grid(grid.clone());
    let cohort = make_cohort_with_prefix(
        m.cohort.n,
        m.cohort.ga_range,
        derive_seed(m.seed, stream_id("cohort")),
        &PhantomParams { corpus_callosum: m.cohort.corpus_callosum, ..template.clone() },
        &m.cohort.prefix,
    )?;
    let plan = m.fold_plan(&cohort)?;
    let train: BTreeSet<&String> = m.split.train.iter().collect();
    let test: BTreeSet<&String> = m.split.test.iter().collect();
    info!("cohort of {} subjects generated", cohort.len());

    let mut subject_seeds: BTreeMap<String, u64> = cohort.iter().map(|s| (s.id.clone(), s.seed)).collect();
    let needed: Vec<&CohortSubject> = cohort.iter().filter(|s| train.contains(&s.id) || test.contains(&s.id)).collect();

    // Acquisition and reference reconstruction in the anatomical frame.
    let truth_dir = layout.dir("labels/truth")?;
    let ref_dir = layout.dir("recon/reference")?;
    struct Subject<'a> {
        s: &'a CohortSubject,
        stacks: Vec<LRStack>,
        reference: Volume,
        record: ReconRecord,
    }
    let subjects: Vec<Subject> = needed
        .par_iter()
        .map(|s| {
            let stacks = simulate_stacks(&s.volume, &m.simulation, derive_seed(s.seed, stream_id("simulate")))?;
            let r = Problem::from_models(&stacks)?.solve(&m.reference_recon)?;
            let reference = apply_mask(&r.volume, &brain_mask(&s.labels, m.mask_dilation_mm))?;
            let file = if save_volumes {
                let p = ref_dir.join(format!("{}.nii.gz", recon_stem(&s.id, &m.reference_recon)));
                write_volume(&reference, &p)?;
                write_labels(&s.labels, &truth_dir.join(format!("{}_dseg.nii.gz", s.id)))?;
                Some(layout.rel(&p))
            } else {
                None
            };
            let record = ReconRecord::new(&s.id, "reference", &m.reference_recon, &r, file);
            Ok(Subject { s, stacks, reference, record })
        })
        .collect::<Result<_>>()?;
    let mut recon_records: Vec<ReconRecord> = subjects.iter().map(|s| s.record.clone()).collect();
    info!("reference reconstructions done");

    // Training volumes per configuration.
    let mut weak_records = Vec::new();
    let mut training: BTreeMap<Configuration, Vec<TrainingVolume>> = BTreeMap::new();
    for &cfg in &m.configurations {
        let train_subjects: Vec<&Subject> = subjects.iter().filter(|s| train.contains(&s.s.id)).collect();
        let vols: Vec<TrainingVolume> = if cfg == Configuration::Baseline {
            train_subjects
                .iter()
                .map(|s| {
                    let id = recon_stem(&s.s.id, &m.reference_recon);
                    TrainingVolume {
                        seed: derive_seed(m.seed, stream_id(&format!("{}/{id}", cfg.name()))),
                        id,
                        subject: s.s.id.clone(),
                        volume: s.reference.clone(),
                        labels: s.s.labels.clone(),
                    }
                })
                .collect()
        } else {
            let spec = &m.multi_recon[&cfg];
            let recon_dir = layout.dir(&format!("recon/{}", cfg.name()))?;
            let weak_dir = layout.dir(&format!("labels/weak/{}", cfg.name()))?;
            let per_subject: Vec<(Vec<TrainingVolume>, Vec<ReconRecord>, WeakLabelRecord)> = train_subjects
                .par_iter()
                .map(|s| {
                    let (ts, t0) = stack0_frame(&s.stacks)?;
                    let problem = Problem::new(&s.stacks, &ts)?;
                    let frame_labels = warp_labels(&s.s.labels, &t0, &grid);
                    let mask = brain_mask(&frame_labels, m.mask_dilation_mm);
                    let mut recons = Vec::with_capacity(spec.weights.len());
                    for &w in &spec.weights {
                        let c = spec.recon.with_weight(w);
                        let r = problem.solve(&c)?;
                        let v = apply_mask(&r.volume, &mask)?;
                        recons.push((c, r, v));
                    }
                    // Manual labels travel from the reference reconstruction to
                    // the new frame by rigid registration.
                    let anchor = &recons[recons.len() / 2].2;
                    let reg = register_rigid(&s.reference, anchor, &RigidTransform::identity(), &m.registration)?;
                    let weak = warp_labels(&s.s.labels, &reg.transform, &grid);
                    let weak_file = if save_volumes {
                        let p = weak_dir.join(format!("{}_dseg.nii.gz", s.s.id));
                        write_labels(&weak, &p)?;
                        Some(layout.rel(&p))
                    } else {
                        None
                    };
                    let weak_rec = WeakLabelRecord {
                        subject: s.s.id.clone(),
                        configuration: cfg,
                        transform: reg.transform,
                        initial_cost: reg.initial_cost,
                        final_cost: reg.final_cost,
                        qc_mean_dsc: mean_dsc(&weak, &frame_labels)?,
                        file: weak_file,
                    };
                    let mut vols = Vec::new();
                    let mut recs = Vec::new();
                    for (c, r, v) in recons {
                        let id = recon_stem(&s.s.id, &c);
                        let file = if save_volumes {
                            let p = recon_dir.join(format!("{id}.nii.gz"));
                            write_volume(&v, &p)?;
                            Some(layout.rel(&p))
                        } else {
                            None
                        };
                        recs.push(ReconRecord::new(&s.s.id, cfg.name(), &c, &r, file));
                        vols.push(TrainingVolume {
                            seed: derive_seed(m.seed, stream_id(&format!("{}/{id}", cfg.name()))),
                            id,
                            subject: s.s.id.clone(),
                            volume: v,
                            labels: weak.clone(),
                        });
                    }
                    Ok((vols, recs, weak_rec))
                })
                .collect::<Result<_>>()?;
            let mut vols = Vec::new();
            for (v, r, w) in per_subject {
                vols.extend(v);
                recon_records.extend(r);
                weak_records.push(w);
            }
            vols
        };
        // Leakage guard on the assembled training set.
        if let Some(v) = vols.iter().find(|v| test.contains(&v.subject)) {
            return Err(Error::Leakage(format!("volume {} of held-out subject {} in the {} training set", v.id, v.subject, cfg.name())));
        }
        info!("{}: {} training volumes", cfg.name(), vols.len());
        training.insert(cfg, vols);
    }

    // Cross-validated training.
    let mut models: BTreeMap<Configuration, Vec<GaussianSegmenter>> = BTreeMap::new();
    let mut model_records = Vec::new();
    for (&cfg, vols) in &training {
        let cv = run_cv(vols, &plan, &m.training)?;
        let dir = layout.dir(&format!("models/{}", cfg.name()))?;
        for (i, (model, ids)) in cv.models.iter().zip(&cv.training_sets).enumerate() {
            let held_out: Vec<String> = plan.assignment.iter().filter(|(_, &f)| plan.k > 1 && f == i).map(|(s, _)| s.clone()).collect();
            for id in ids {
                let v = vols.iter().find(|v| &v.id == id).expect("training volume");
                if held_out.contains(&v.subject) {
                    return Err(Error::Leakage(format!("{id} trains model {i} but its subject is held out")));
                }
            }
            let p = dir.join(format!("fold-{i}.bin"));
            model.save(&p)?;
            model_records.push(ModelRecord {
                configuration: cfg,
                fold: i,
                file: layout.rel(&p),
                training_volumes: ids.clone(),
                held_out_subjects: held_out,
            });
        }
        models.insert(cfg, cv.models);
        info!("{}: {} models trained", cfg.name(), plan.k);
    }
    drop(training);

    // Test images.
    let mut tasks_images: Vec<(String, Vec<TestImage>)> = Vec::new();
    let in_domain: Vec<TestImage> = subjects
        .iter()
        .filter(|s| test.contains(&s.s.id))
        .map(|s| TestImage { subject: s.s.id.clone(), ga: s.s.ga, volume: s.reference.clone(), truth: s.s.labels.clone() })
        .collect();
    if !in_domain.is_empty() {
        tasks_images.push((IN_DOMAIN.into(), in_domain));
    }
    drop(subjects);
    if let Some(o) = &m.out_of_domain {
        let ood_cohort = make_cohort_with_prefix(
            o.cohort.n,
            o.cohort.ga_range,
            derive_seed(m.seed, stream_id("out-of-domain cohort")),
            &PhantomParams { corpus_callosum: o.cohort.corpus_callosum, ..template.clone() },
            &o.cohort.prefix,
        )?;
        let fine = match o.resample_spacing {
            Some(s) => Some(grid.resampled_isotropic(s)?),
            None => None,
        };
        let ood_dir = layout.dir("recon/out-of-domain")?;
        let ood_labels = layout.dir("labels/out-of-domain")?;
        let images: Vec<(TestImage, ReconRecord)> = ood_cohort
            .par_iter()
            .map(|s| {
                let stacks = simulate_stacks(&s.volume, &o.simulation, derive_seed(s.seed, stream_id("simulate")))?;
                let r = Problem::from_models(&stacks)?.solve(&o.recon)?;
                let mut v = apply_mask(&r.volume, &brain_mask(&s.labels, m.mask_dilation_mm))?;
                let raw = match &fine {
                    Some(g) => {
                        v = resample(&v, g, Interpolation::Linear);
                        let params = PhantomParams { ga: s.ga, seed: s.seed, corpus_callosum: o.cohort.corpus_callosum, ..template.clone() }
                            .with_grid(g.clone());
                        generate_phantom_raw(&params)?.1
                    }
                    None => s.raw_labels.clone(),
                };
                let truth = merge_classes(&raw, &o.label_mapping)?;
                let file = if save_volumes {
                    let p = ood_dir.join(format!("{}.nii.gz", recon_stem(&s.id, &o.recon)));
                    write_volume(&v, &p)?;
                    write_labels(&truth, &ood_labels.join(format!("{}_dseg.nii.gz", s.id)))?;
                    Some(layout.rel(&p))
                } else {
                    None
                };
                let rec = ReconRecord::new(&s.id, OUT_OF_DOMAIN, &o.recon, &r, file);
                Ok((TestImage { subject: s.id.clone(), ga: s.ga, volume: v, truth }, rec))
            })
            .collect::<Result<_>>()?;
        let mut imgs = Vec::new();
        for (i, r) in images {
            imgs.push(i);
            recon_records.push(r);
        }
        subject_seeds.extend(ood_cohort.iter().map(|s| (s.id.clone(), s.seed)));
        tasks_images.push((OUT_OF_DOMAIN.into(), imgs));
        info!("out-of-domain cohort reconstructed");
    }

    // Ensemble inference and evaluation.
    let metrics_dir = layout.dir("metrics")?;
    let mut tasks = Vec::new();
    for (task, images) in &tasks_images {
        let mut reports = BTreeMap::new();
        for (&cfg, ens) in &models {
            let pred_dir = layout.dir(&format!("predictions/{task}/{}", cfg.name()))?;
            let reps: Vec<TissueReport> = images
                .par_iter()
                .map(|img| {
                    let input = match m.training.features.normalization {
                        Normalization::PerVolume => normalize(&img.volume)?,
                        Normalization::PerPatch => img.volume.clone(),
                    };
                    let pred = sliding_window_predict(&input, ens, &m.training.patch)?.argmax();
                    if save_volumes {
                        write_labels(&pred, &pred_dir.join(format!("{}_dseg.nii.gz", img.subject)))?;
                    }
                    TissueReport::compute(&pred, &img.truth, img.subject.clone(), img.ga)
                })
                .collect::<Result<_>>()?;
            write_atomic(&metrics_dir.join(format!("{task}_{}.csv", cfg.name())), reports_csv(&reps).as_bytes())?;
            reports.insert(cfg, reps);
        }
        info!("{task}: evaluated");
        tasks.push(TaskResult { task: task.clone(), reports });
    }

    let mut comparisons = Vec::new();
    for t in &tasks {
        comparisons.extend(compare(t)?);
    }
    let edges = ga_edges(m.ga_bins.lo, m.ga_bins.hi, m.ga_bins.step);
    let mut curves = Vec::new();
    for t in &tasks {
        for (cfg, reps) in &t.reports {
            curves.push(GaCurve { task: t.task.clone(), configuration: *cfg, bins: stratify_by_ga(reps, &edges)? });
        }
    }
    write_atomic(&metrics_dir.join("table.csv"), table_csv(&tasks, &comparisons).as_bytes())?;
    write_json(&metrics_dir.join("stats.json"), &comparisons)?;
    write_json(&metrics_dir.join("ga_curves.json"), &curves)?;
    write_atomic(&metrics_dir.join("ga_curves.csv"), curves_csv(&curves).as_bytes())?;
    write_json(
        &out_dir.join("provenance.json"),
        &Provenance {
            software: format!("multirecon {}", env!("CARGO_PKG_VERSION")),
            manifest: m.clone(),
            subject_seeds,
            fold_plan: plan,
            reconstructions: recon_records,
            weak_labels: weak_records,
            models: model_records,
        },
    )?;
    Ok(ExperimentReport { tasks, comparisons, curves })
}
