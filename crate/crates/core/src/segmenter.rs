//! Voxelwise tissue segmentation: the [`Segmenter`] contract, a Gaussian
//! feature classifier that implements it, and the k-fold training driver.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian as LE};
use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_sample, sample_patches, AugmentConfig, PatchSpec};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::rng::{derive_seed, seeded};
use crate::volume::{normalize, smooth, Geometry, LabelMap, Volume, NUM_CLASSES};

/// Per-voxel class probabilities, voxel-major: `probs[v * 8 + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbField {
    pub geometry: Geometry,
    pub probs: Vec<f64>,
}

impl ProbField {
    pub fn new(geometry: Geometry, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != geometry.len() * NUM_CLASSES {
            return Err(Error::InvalidGeometry("probability field does not match its grid".into()));
        }
        Ok(ProbField { geometry, probs })
    }

    /// Field that puts all mass on `class` everywhere.
    pub fn one_hot(geometry: Geometry, class: u8) -> Self {
        let mut probs = vec![0.0; geometry.len() * NUM_CLASSES];
        probs.chunks_exact_mut(NUM_CLASSES).for_each(|p| p[class as usize] = 1.0);
        ProbField { geometry, probs }
    }

    pub fn voxel(&self, idx: usize) -> &[f64] {
        &self.probs[idx * NUM_CLASSES..(idx + 1) * NUM_CLASSES]
    }

    /// Most probable class per voxel, lowest class id on ties.
    pub fn argmax(&self) -> LabelMap {
        let labels = self
            .probs
            .chunks_exact(NUM_CLASSES)
            .map(|p| {
                let mut best = 0;
                for c in 1..NUM_CLASSES {
                    if p[c] > p[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap::from_parts_unchecked(self.geometry.clone(), labels)
    }
}

pub trait Segmenter: Sync {
    /// Probabilities over the 8 classes for every voxel of `patch`.
    fn predict_proba(&self, patch: &Volume) -> Result<ProbField>;

    /// Mean of the members' predictions. Implementations may override this
    /// to share per-patch work across members.
    fn predict_ensemble(models: &[Self], patch: &Volume) -> Result<ProbField>
    where
        Self: Sized,
    {
        let first = models.first().ok_or_else(|| Error::Input("empty model ensemble".into()))?;
        let mut acc = first.predict_proba(patch)?;
        for m in &models[1..] {
            let p = m.predict_proba(patch)?;
            acc.probs.iter_mut().zip(&p.probs).for_each(|(a, b)| *a += b);
        }
        let k = models.len() as f64;
        acc.probs.iter_mut().for_each(|a| *a /= k);
        Ok(acc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Z-score each patch over its nonzero voxels.
    PerPatch,
    /// Inputs are already normalized over the whole volume.
    PerVolume,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub sigma_fine_mm: f64,
    pub sigma_coarse_mm: f64,
    /// World coordinates are divided by this before entering the features.
    pub coord_scale_mm: f64,
    /// Added to every covariance diagonal.
    pub ridge: f64,
    pub normalization: Normalization,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sigma_fine_mm: 1.5,
            sigma_coarse_mm: 4.0,
            coord_scale_mm: 30.0,
            ridge: 1e-3,
            normalization: Normalization::PerPatch,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.sigma_fine_mm) && ok(self.sigma_coarse_mm) && ok(self.coord_scale_mm) && ok(self.ridge)) {
            return Err(Error::Parameter("feature scales and ridge must be positive".into()));
        }
        Ok(())
    }
}

pub const NUM_FEATURES: usize = 7;

/// Feature vectors of one patch. Voxels with raw intensity 0 are outside the
/// image support and carry no features.
pub struct PatchFeatures {
    pub support: Vec<bool>,
    /// `NUM_FEATURES` values per voxel, zero outside the support.
    pub values: Vec<f64>,
}

pub fn patch_features(patch: &Volume, cfg: &FeatureConfig) -> PatchFeatures {
    let support: Vec<bool> = patch.data().iter().map(|&x| x != 0.0).collect();
    let z = match cfg.normalization {
        Normalization::PerPatch => normalize(patch).unwrap_or_else(|_| patch.map(|_| 0.0).expect("finite")),
        Normalization::PerVolume => patch.clone(),
    };
    let sq = z.map(|x| x * x).expect("finite");
    let m1 = smooth(&z, cfg.sigma_fine_mm);
    let m2 = smooth(&z, cfg.sigma_coarse_mm);
    let s1 = smooth(&sq, cfg.sigma_fine_mm);
    let g = patch.geometry();
    let mut values = vec![0.0; g.len() * NUM_FEATURES];
    for (idx, f) in values.chunks_exact_mut(NUM_FEATURES).enumerate() {
        if !support[idx] {
            continue;
        }
        let [i, j, k] = g.coords(idx);
        let w = g.voxel_to_world([i as f64, j as f64, k as f64]);
        let m = m1.data()[idx];
        f[0] = z.data()[idx];
        f[1] = m;
        f[2] = m2.data()[idx];
        f[3] = (s1.data()[idx] - m * m).max(0.0).sqrt();
        for a in 0..3 {
            f[4 + a] = w[a] / cfg.coord_scale_mm;
        }
    }
    PatchFeatures { support, values }
}

/// Sufficient statistics (count, sum, sum of outer products) per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub count: [u64; NUM_CLASSES],
    pub sum: Vec<[f64; NUM_FEATURES]>,
    pub outer: Vec<[f64; NUM_FEATURES * NUM_FEATURES]>,
}

impl Default for ClassStats {
    fn default() -> Self {
        ClassStats {
            count: [0; NUM_CLASSES],
            sum: vec![[0.0; NUM_FEATURES]; NUM_CLASSES],
            outer: vec![[0.0; NUM_FEATURES * NUM_FEATURES]; NUM_CLASSES],
        }
    }
}

impl ClassStats {
    pub fn accumulate(&mut self, patch: &Volume, labels: &LabelMap, cfg: &FeatureConfig) -> Result<()> {
        if !patch.geometry().approx_eq(labels.geometry()) {
            return Err(Error::InvalidGeometry("patch and label grids differ".into()));
        }
        let feats = patch_features(patch, cfg);
        for (idx, f) in feats.values.chunks_exact(NUM_FEATURES).enumerate() {
            if !feats.support[idx] {
                continue;
            }
            let c = labels.labels()[idx] as usize;
            self.count[c] += 1;
            let (s, o) = (&mut self.sum[c], &mut self.outer[c]);
            for a in 0..NUM_FEATURES {
                s[a] += f[a];
                for b in 0..=a {
                    o[a * NUM_FEATURES + b] += f[a] * f[b];
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ClassStats) {
        for c in 0..NUM_CLASSES {
            self.count[c] += other.count[c];
            self.sum[c].iter_mut().zip(&other.sum[c]).for_each(|(a, b)| *a += b);
            self.outer[c].iter_mut().zip(&other.outer[c]).for_each(|(a, b)| *a += b);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ClassModel {
    prior: f64,
    count: u64,
    mean: [f64; NUM_FEATURES],
    cov: [f64; NUM_FEATURES * NUM_FEATURES],
    /// Inverse Cholesky factor (lower triangular) and `ln det Σ`.
    inv_chol: [f64; NUM_FEATURES * NUM_FEATURES],
    log_det: f64,
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
fn cholesky(a: &[f64; NUM_FEATURES * NUM_FEATURES]) -> Option<[f64; NUM_FEATURES * NUM_FEATURES]> {
    const N: usize = NUM_FEATURES;
    let mut l = [0.0; N * N];
    for j in 0..N {
        let d = a[j * N + j] - (0..j).map(|k| l[j * N + k] * l[j * N + k]).sum::<f64>();
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        l[j * N + j] = d;
        for i in j + 1..N {
            l[i * N + j] = (a[i * N + j] - (0..j).map(|k| l[i * N + k] * l[j * N + k]).sum::<f64>()) / d;
        }
    }
    Some(l)
}

fn invert_lower(l: &[f64; NUM_FEATURES * NUM_FEATURES]) -> [f64; NUM_FEATURES * NUM_FEATURES] {
    const N: usize = NUM_FEATURES;
    let mut inv = [0.0; N * N];
    for col in 0..N {
        for i in col..N {
            let rhs = if i == col { 1.0 } else { 0.0 };
            let s: f64 = (col..i).map(|k| l[i * N + k] * inv[k * N + col]).sum();
            inv[i * N + col] = (rhs - s) / l[i * N + i];
        }
    }
    inv
}

impl ClassModel {
    fn new(prior: f64, count: u64, mean: [f64; NUM_FEATURES], cov: [f64; NUM_FEATURES * NUM_FEATURES]) -> Result<Self> {
        let l = cholesky(&cov).ok_or_else(|| Error::Divergence("class covariance is not positive definite".into()))?;
        let log_det = 2.0 * (0..NUM_FEATURES).map(|i| l[i * NUM_FEATURES + i].ln()).sum::<f64>();
        Ok(ClassModel { prior, count, mean, cov, inv_chol: invert_lower(&l), log_det })
    }

    #[inline]
    fn log_likelihood(&self, f: &[f64]) -> f64 {
        let mut d = [0.0; NUM_FEATURES];
        for a in 0..NUM_FEATURES {
            d[a] = f[a] - self.mean[a];
        }
        let mut maha = 0.0;
        for i in 0..NUM_FEATURES {
            let row = &self.inv_chol[i * NUM_FEATURES..i * NUM_FEATURES + i + 1];
            let y: f64 = row.iter().zip(&d).map(|(a, b)| a * b).sum();
            maha += y * y;
        }
        self.prior.ln() - 0.5 * (self.log_det + maha)
    }
}

/// Per-class Gaussian model over patch features; prediction is the softmax of
/// the class log-posteriors. Voxels with raw intensity 0 are background.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSegmenter {
    pub features: FeatureConfig,
    classes: Vec<Option<ClassModel>>,
}

const MODEL_MAGIC: &[u8; 8] = b"MRGAUSS\0";
const MODEL_VERSION: u32 = 1;

impl GaussianSegmenter {
    /// Closed-form fit. Classes with too few samples to estimate a covariance
    /// are left out of the model and never predicted.
    pub fn from_stats(stats: &ClassStats, features: FeatureConfig) -> Result<Self> {
        features.validate()?;
        let total: u64 = stats.count.iter().sum();
        if total == 0 {
            return Err(Error::Input("no labelled voxels inside the image support".into()));
        }
        let mut classes = Vec::with_capacity(NUM_CLASSES);
        for c in 0..NUM_CLASSES {
            let n = stats.count[c];
            if n <= NUM_FEATURES as u64 {
                if n > 0 || c != 0 {
                    warn!("class {c} has {n} training voxels; it is left out of the model");
                }
                classes.push(None);
                continue;
            }
            let nf = n as f64;
            let mean = stats.sum[c].map(|s| s / nf);
            let mut cov = [0.0; NUM_FEATURES * NUM_FEATURES];
            for a in 0..NUM_FEATURES {
                for b in 0..=a {
                    let v = stats.outer[c][a * NUM_FEATURES + b] / nf - mean[a] * mean[b];
                    cov[a * NUM_FEATURES + b] = v;
                    cov[b * NUM_FEATURES + a] = v;
                }
                cov[a * NUM_FEATURES + a] += features.ridge;
            }
            classes.push(Some(ClassModel::new(nf / total as f64, n, mean, cov)?));
        }
        Ok(GaussianSegmenter { features, classes })
    }

    pub fn train(pairs: &[(Volume, LabelMap)], features: FeatureConfig) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Input("no training pairs".into()));
        }
        let mut stats = ClassStats::default();
        for (v, l) in pairs {
            stats.accumulate(v, l, &features)?;
        }
        GaussianSegmenter::from_stats(&stats, features)
    }

    pub fn present_classes(&self) -> Vec<u8> {
        (0..NUM_CLASSES).filter(|&c| self.classes[c].is_some()).map(|c| c as u8).collect()
    }

    fn posterior(&self, f: &[f64], out: &mut [f64]) {
        let mut best = f64::NEG_INFINITY;
        for (c, m) in self.classes.iter().enumerate() {
            out[c] = match m {
                Some(m) => m.log_likelihood(f),
                None => f64::NEG_INFINITY,
            };
            best = best.max(out[c]);
        }
        let mut total = 0.0;
        for o in out.iter_mut() {
            *o = if o.is_finite() { (*o - best).exp() } else { 0.0 };
            total += *o;
        }
        out.iter_mut().for_each(|o| *o /= total);
    }

    fn accumulate_prediction(&self, feats: &PatchFeatures, acc: &mut [f64]) {
        let mut p = [0.0; NUM_CLASSES];
        for (idx, f) in feats.values.chunks_exact(NUM_FEATURES).enumerate() {
            let dst = &mut acc[idx * NUM_CLASSES..(idx + 1) * NUM_CLASSES];
            if feats.support[idx] {
                self.posterior(f, &mut p);
                dst.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
            } else {
                dst[0] += 1.0;
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        let mut buf = [0u8; 8];
        let mut put_u32 = |out: &mut Vec<u8>, v: u32| {
            LE::write_u32(&mut buf[..4], v);
            out.extend_from_slice(&buf[..4]);
        };
        put_u32(&mut out, MODEL_VERSION);
        put_u32(&mut out, NUM_FEATURES as u32);
        put_u32(&mut out, NUM_CLASSES as u32);
        let put_f64 = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&v.to_le_bytes());
        let f = &self.features;
        for v in [f.sigma_fine_mm, f.sigma_coarse_mm, f.coord_scale_mm, f.ridge] {
            put_f64(&mut out, v);
        }
        out.push(match f.normalization {
            Normalization::PerPatch => 0,
            Normalization::PerVolume => 1,
        });
        for m in &self.classes {
            match m {
                None => out.push(0),
                Some(m) => {
                    out.push(1);
                    out.extend_from_slice(&m.count.to_le_bytes());
                    put_f64(&mut out, m.prior);
                    m.mean.iter().for_each(|v| put_f64(&mut out, *v));
                    m.cov.iter().for_each(|v| put_f64(&mut out, *v));
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        struct Reader<'a>(&'a [u8]);
        impl Reader<'_> {
            fn take(&mut self, n: usize) -> Result<&[u8]> {
                if self.0.len() < n {
                    return Err(Error::CorruptFile("truncated model file".into()));
                }
                let (a, b) = self.0.split_at(n);
                self.0 = b;
                Ok(a)
            }
            fn u32(&mut self) -> Result<u32> {
                Ok(LE::read_u32(self.take(4)?))
            }
            fn f64(&mut self) -> Result<f64> {
                Ok(LE::read_f64(self.take(8)?))
            }
        }
        let mut r = Reader(bytes);
        if r.take(8).map_err(|_| Error::UnsupportedFormat("not a segmenter model file".into()))? != MODEL_MAGIC {
            return Err(Error::UnsupportedFormat("not a segmenter model file".into()));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::UnsupportedFormat(format!("model file version {version}")));
        }
        if r.u32()? as usize != NUM_FEATURES || r.u32()? as usize != NUM_CLASSES {
            return Err(Error::UnsupportedFormat("model feature or class count differs".into()));
        }
        let mut features = FeatureConfig {
            sigma_fine_mm: r.f64()?,
            sigma_coarse_mm: r.f64()?,
            coord_scale_mm: r.f64()?,
            ridge: r.f64()?,
            normalization: Normalization::PerPatch,
        };
        features.normalization = match r.take(1)?[0] {
            0 => Normalization::PerPatch,
            1 => Normalization::PerVolume,
            other => return Err(Error::CorruptFile(format!("normalization code {other}"))),
        };
        features.validate().map_err(|e| Error::CorruptFile(e.to_string()))?;
        let mut classes = Vec::with_capacity(NUM_CLASSES);
        for _ in 0..NUM_CLASSES {
            match r.take(1)?[0] {
                0 => classes.push(None),
                1 => {
                    let count = LE::read_u64(r.take(8)?);
                    let prior = r.f64()?;
                    let mut mean = [0.0; NUM_FEATURES];
                    for v in mean.iter_mut() {
                        *v = r.f64()?;
                    }
                    let mut cov = [0.0; NUM_FEATURES * NUM_FEATURES];
                    for v in cov.iter_mut() {
                        *v = r.f64()?;
                    }
                    let m = ClassModel::new(prior, count, mean, cov).map_err(|e| Error::CorruptFile(e.to_string()))?;
                    classes.push(Some(m));
                }
                other => return Err(Error::CorruptFile(format!("class flag {other}"))),
            }
        }
        if !r.0.is_empty() {
            return Err(Error::CorruptFile("trailing bytes after model".into()));
        }
        if classes.iter().all(|c| c.is_none()) {
            return Err(Error::CorruptFile("model has no classes".into()));
        }
        Ok(GaussianSegmenter { features, classes })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        GaussianSegmenter::from_bytes(&std::fs::read(path)?)
    }
}

impl Segmenter for GaussianSegmenter {
    fn predict_proba(&self, patch: &Volume) -> Result<ProbField> {
        GaussianSegmenter::predict_ensemble(std::slice::from_ref(self), patch)
    }

    /// Features are computed once per patch when all members share a feature
    /// configuration.
    fn predict_ensemble(models: &[Self], patch: &Volume) -> Result<ProbField> {
        if models.is_empty() {
            return Err(Error::Input("empty model ensemble".into()));
        }
        let n = patch.geometry().len();
        let mut acc = vec![0.0; n * NUM_CLASSES];
        let mut cached: Option<(FeatureConfig, PatchFeatures)> = None;
        for m in models {
            if cached.as_ref().map(|(c, _)| *c != m.features).unwrap_or(true) {
                cached = Some((m.features, patch_features(patch, &m.features)));
            }
            m.accumulate_prediction(&cached.as_ref().expect("features").1, &mut acc);
        }
        let k = models.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        ProbField::new(patch.geometry().clone(), acc)
    }
}

/// Assignment of subjects to `k` folds. All volumes of a subject share its
/// fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldPlan {
    /// Subjects ranked by gestational age (ties by id) and dealt round-robin,
    /// so every fold spans the age range.
    pub fn stratified(subjects: &[(String, f64)], k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Plan("at least one fold is required".into()));
        }
        let mut order: Vec<&(String, f64)> = subjects.iter().collect();
        order.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        let assignment: BTreeMap<String, usize> = order.iter().enumerate().map(|(r, s)| (s.0.clone(), r % k)).collect();
        if assignment.len() != subjects.len() {
            return Err(Error::Plan("duplicate subject ids".into()));
        }
        let plan = FoldPlan { k, assignment };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Plan("at least one fold is required".into()));
        }
        for f in 0..self.k {
            if !self.assignment.values().any(|&v| v == f) {
                return Err(Error::Plan(format!("fold {f} has no subjects")));
            }
        }
        if let Some((s, f)) = self.assignment.iter().find(|(_, &f)| f >= self.k) {
            return Err(Error::Plan(format!("subject {s} assigned to fold {f} of {}", self.k)));
        }
        Ok(())
    }

    pub fn fold_of(&self, subject: &str) -> Option<usize> {
        self.assignment.get(subject).copied()
    }

    /// Subjects whose volumes may train model `i`. With a single fold the
    /// one model trains on everything.
    pub fn training_subjects(&self, i: usize) -> BTreeSet<String> {
        self.assignment
            .iter()
            .filter(|(_, &f)| self.k == 1 || f != i)
            .map(|(s, _)| s.clone())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Configuration {
    Baseline,
    #[serde(rename = "MIALSRTK-augmented")]
    MialsrtkAugmented,
    #[serde(rename = "NiftyMIC-augmented")]
    NiftymicAugmented,
}

impl Configuration {
    pub const ALL: [Configuration; 3] =
        [Configuration::Baseline, Configuration::MialsrtkAugmented, Configuration::NiftymicAugmented];

    pub fn name(self) -> &'static str {
        match self {
            Configuration::Baseline => "Baseline",
            Configuration::MialsrtkAugmented => "MIALSRTK-augmented",
            Configuration::NiftymicAugmented => "NiftyMIC-augmented",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Configuration::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parameter(format!("unknown training configuration {s:?}")))
    }
}

/// One training volume with the subject it belongs to and its own seed.
#[derive(Debug, Clone)]
pub struct TrainingVolume {
    pub id: String,
    pub subject: String,
    pub volume: Volume,
    pub labels: LabelMap,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSettings {
    pub augment: AugmentConfig,
    pub patch: PatchSpec,
    /// Patches drawn from each (augmented) volume.
    pub patches_per_volume: usize,
    pub features: FeatureConfig,
}

pub struct CvResult {
    pub models: Vec<GaussianSegmenter>,
    /// Ids of the volumes each model was trained on.
    pub training_sets: Vec<Vec<String>>,
}

/// Statistics contributed by one volume: one augmentation, then
/// `patches_per_volume` patches.
pub fn volume_stats(tv: &TrainingVolume, s: &TrainingSettings) -> Result<ClassStats> {
    let (v, l) = augment_sample(&tv.volume, &tv.labels, &s.augment, derive_seed(tv.seed, 1))?;
    let mut rng = seeded(derive_seed(tv.seed, 2));
    let mut stats = ClassStats::default();
    for p in sample_patches(&v, &l, &s.patch, s.patches_per_volume, &mut rng)? {
        stats.accumulate(&p.volume, &p.labels, &s.features)?;
    }
    Ok(stats)
}

/// Trains one model per fold, model `i` on the volumes of subjects outside
/// fold `i`.
pub fn run_cv(volumes: &[TrainingVolume], plan: &FoldPlan, s: &TrainingSettings) -> Result<CvResult> {
    plan.validate()?;
    s.augment.validate()?;
    s.patch.validate()?;
    s.features.validate()?;
    if s.patches_per_volume == 0 {
        return Err(Error::Parameter("patches_per_volume must be positive".into()));
    }
    for tv in volumes {
        if plan.fold_of(&tv.subject).is_none() {
            return Err(Error::Plan(format!("subject {} is not in the fold plan", tv.subject)));
        }
    }
    let per_volume: Vec<ClassStats> = volumes.par_iter().map(|tv| volume_stats(tv, s)).collect::<Result<_>>()?;
    let mut models = Vec::with_capacity(plan.k);
    let mut training_sets = Vec::with_capacity(plan.k);
    for i in 0..plan.k {
        let allowed = plan.training_subjects(i);
        let mut stats = ClassStats::default();
        let mut ids = Vec::new();
        for (tv, st) in volumes.iter().zip(&per_volume) {
            if allowed.contains(&tv.subject) {
                stats.merge(st);
                ids.push(tv.id.clone());
            }
        }
        if ids.is_empty() {
            return Err(Error::Plan(format!("model {i} has no training volumes")));
        }
        models.push(GaussianSegmenter::from_stats(&stats, s.features)?);
        training_sets.push(ids);
    }
    Ok(CvResult { models, training_sets })
}
