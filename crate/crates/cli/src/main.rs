//! Command-line front end: one subcommand per pipeline stage plus the full
//! experiment runner.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use multirecon::augment::{sliding_window_predict, PatchSpec};
use multirecon::experiment::{recon_stem, run_experiment, ExperimentManifest};
use multirecon::forward::{simulate_stacks, AcquisitionModel, LRStack, SimulationSpec};
use multirecon::io::{read_json, read_labels, read_volume, write_atomic, write_json, write_labels, write_volume};
use multirecon::metrics::TissueReport;
use multirecon::phantom::{make_cohort_with_prefix, PhantomParams, GA_MAX, GA_MIN};
use multirecon::registration::{propagate_labels, register_rigid, RegistrationConfig};
use multirecon::rng::{derive_seed, stream_id};
use multirecon::segmenter::{run_cv, Configuration, FoldPlan, GaussianSegmenter, TrainingSettings, TrainingVolume};
use multirecon::solver::{multi_reconstruct_problem, Problem, ReconConfig, Regularizer, SweepEntry, WeightConvention};
use multirecon::stats::{bonferroni, wilcoxon_rank_sum, wilcoxon_signed_rank, PMethod};
use multirecon::volume::{Geometry, RigidTransform};
use multirecon::{Error, Result};

const DEFAULT_SEED: u64 = 2023;

#[derive(Parser)]
#[command(name = "multirecon", version, about = "Multi-weight super-resolution reconstruction as segmentation data augmentation")]
struct Cli {
    /// Master seed; every stochastic stage derives its stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value = ".")]
    output_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom cohort (images, labels, cohort manifest).
    Phantom(PhantomArgs),
    /// Simulate motion-corrupted low-resolution stacks from an HR image.
    Simulate(SimulateArgs),
    /// Reconstruct one HR volume from stacks.
    Reconstruct(ReconArgs),
    /// Reconstruct the same stacks under several weights.
    Multirecon(ReconArgs),
    /// Rigidly register a moving image onto a fixed image.
    Register(RegisterArgs),
    /// Transfer labels from a source image onto a target image.
    Propagate(PropagateArgs),
    /// Train the fold models of one configuration.
    Train(TrainArgs),
    /// Segment an image with a model ensemble.
    Infer(InferArgs),
    /// Compute DSC and ASSD of predictions against reference labels.
    Evaluate(EvaluateArgs),
    /// Paired comparison of two evaluation tables.
    Stats(StatsArgs),
    /// Run a whole experiment from a manifest.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, default_value_t = GA_MIN)]
    ga_min: f64,
    #[arg(long, default_value_t = GA_MAX)]
    ga_max: f64,
    #[arg(long, default_value_t = 64)]
    grid_size: usize,
    #[arg(long, default_value_t = 1.1)]
    spacing: f64,
    #[arg(long, default_value = "sub")]
    prefix: String,
    #[arg(long)]
    noise_free: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// High-resolution image.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    subject: Option<String>,
    #[arg(long, default_value_t = 3)]
    n_stacks: usize,
    #[arg(long, default_value_t = 1.125)]
    in_plane: f64,
    #[arg(long, default_value_t = 3.3)]
    thickness: f64,
    #[arg(long)]
    psf_through: Option<f64>,
    #[arg(long, default_value_t = 2.0)]
    motion_deg: f64,
    #[arg(long, default_value_t = 1.0)]
    motion_mm: f64,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    #[arg(long)]
    per_slice_motion: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegularizerArg {
    Tikhonov,
    Huber,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConventionArg {
    Lambda,
    Alpha,
}

#[derive(Args)]
struct ReconArgs {
    /// Stack images; each needs its `.json` sidecar written by `simulate`.
    #[arg(long, num_args = 1.., required = true)]
    stacks: Vec<PathBuf>,
    #[arg(long)]
    subject: Option<String>,
    #[arg(long, value_enum, default_value = "huber")]
    regularizer: RegularizerArg,
    #[arg(long)]
    huber_delta: Option<f64>,
    #[arg(long, value_enum, default_value = "lambda")]
    convention: ConventionArg,
    /// Weights (λ or α); `reconstruct` uses the first one.
    #[arg(long, num_args = 1.., value_delimiter = ',', default_value = "0.75")]
    weights: Vec<f64>,
    #[arg(long, default_value_t = 0.75)]
    lambda_ref: f64,
    #[arg(long, default_value_t = 0.05)]
    w_ref: f64,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long, default_value_t = 100)]
    max_evaluations: usize,
    #[arg(long, default_value = "transform.json")]
    out: String,
}

#[derive(Args)]
struct PropagateArgs {
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long, default_value_t = 3)]
    levels: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Training manifest listing volumes per configuration.
    #[arg(long)]
    manifest: PathBuf,
    /// Configuration name (Baseline, MIALSRTK-augmented, NiftyMIC-augmented).
    #[arg(long)]
    configuration: String,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    models: Vec<PathBuf>,
    #[arg(long, default_value_t = 32)]
    patch_size: usize,
    #[arg(long, default_value_t = 0.5)]
    overlap: f64,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, num_args = 1.., required = true)]
    pred: Vec<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    truth: Vec<PathBuf>,
    /// Gestational ages in the order of `--pred`.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    ga: Vec<f64>,
    #[arg(long, default_value = "evaluation")]
    name: String,
}

#[derive(Args)]
struct StatsArgs {
    /// Evaluation CSV of the reference method.
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    augmented: PathBuf,
    /// Column to compare.
    #[arg(long, default_value = "dsc_overall")]
    metric: String,
    /// Number of comparisons for the Bonferroni correction.
    #[arg(long, default_value_t = 7)]
    comparisons: usize,
    /// Also report the unpaired rank-sum p-value.
    #[arg(long)]
    rank_sum: bool,
    #[arg(long, default_value = "stats.json")]
    out: String,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment manifest; the built-in desk-scale manifest when omitted.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Write the built-in manifest to the output directory and exit.
    #[arg(long)]
    print_manifest: bool,
}

fn stem(p: &Path) -> String {
    let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    for ext in [".nii.gz", ".nii", ".json"] {
        if let Some(s) = name.strip_suffix(ext) {
            return s.to_string();
        }
    }
    name
}

fn subject_of(p: &Path) -> String {
    stem(p).split('_').next().unwrap_or_default().to_string()
}

fn sidecar(p: &Path) -> PathBuf {
    p.with_file_name(format!("{}.json", stem(p)))
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    fs::create_dir_all(&cli.output_dir)?;
    Ok(cli.output_dir.clone())
}

#[derive(Serialize, Deserialize)]
struct CohortEntry {
    id: String,
    ga: f64,
    seed: u64,
    image: String,
    labels: String,
}

#[derive(Serialize, Deserialize)]
struct CohortManifest {
    version: u32,
    seed: u64,
    ga_range: (f64, f64),
    grid: Geometry,
    subjects: Vec<CohortEntry>,
}

fn phantom(cli: &Cli, a: &PhantomArgs) -> Result<()> {
    let dir = out_dir(cli)?;
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    let grid = Geometry::isotropic(a.grid_size, a.spacing)?;
    let mut template = PhantomParams::new(30.0, 0).with_grid(grid.clone());
    if a.noise_free {
        template = template.noise_free();
    }
    let cohort = make_cohort_with_prefix(a.n, (a.ga_min, a.ga_max), seed, &template, &a.prefix)?;
    let mut subjects = Vec::new();
    for s in &cohort {
        let image = format!("{}_T2w.nii.gz", s.id);
        let labels = format!("{}_dseg.nii.gz", s.id);
        write_volume(&s.volume, &dir.join(&image))?;
        write_labels(&s.labels, &dir.join(&labels))?;
        subjects.push(CohortEntry { id: s.id.clone(), ga: s.ga, seed: s.seed, image, labels });
    }
    write_json(&dir.join("cohort.json"), &CohortManifest { version: 1, seed, ga_range: (a.ga_min, a.ga_max), grid, subjects })?;
    info!("wrote {} phantoms", cohort.len());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct StackSidecar {
    subject: String,
    stack: usize,
    seed: u64,
    model: AcquisitionModel,
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Result<()> {
    let dir = out_dir(cli)?;
    let x = read_volume(&a.image)?;
    let subject = a.subject.clone().unwrap_or_else(|| subject_of(&a.image));
    let spec = SimulationSpec {
        n_stacks: a.n_stacks,
        in_plane_spacing: a.in_plane,
        slice_thickness: a.thickness,
        psf_fwhm_through: a.psf_through,
        psf_fwhm_inplane: None,
        motion_sd_deg: a.motion_deg,
        motion_sd_mm: a.motion_mm,
        noise_sd: a.noise,
        per_slice_motion: a.per_slice_motion,
    };
    let seed = derive_seed(cli.seed.unwrap_or(DEFAULT_SEED), stream_id(&format!("simulate/{subject}")));
    for (k, s) in simulate_stacks(&x, &spec, seed)?.into_iter().enumerate() {
        let name = format!("{subject}_stack-{k}");
        write_volume(&s.volume, &dir.join(format!("{name}.nii.gz")))?;
        write_json(&dir.join(format!("{name}.json")), &StackSidecar { subject: subject.clone(), stack: k, seed, model: s.model })?;
    }
    Ok(())
}

fn load_stacks(paths: &[PathBuf]) -> Result<Vec<LRStack>> {
    paths
        .iter()
        .map(|p| {
            let side: StackSidecar = read_json(&sidecar(p))?;
            let volume = read_volume(p)?;
            if !volume.geometry().approx_eq(&side.model.lr_geometry()?) {
                return Err(Error::InvalidGeometry(format!("{} does not match its sidecar model", p.display())));
            }
            Ok(LRStack { volume, model: side.model })
        })
        .collect()
}

#[derive(Serialize)]
struct Sweep {
    subject: String,
    stacks: Vec<String>,
    entries: Vec<SweepEntry>,
}

fn reconstruct(cli: &Cli, a: &ReconArgs, multi: bool) -> Result<()> {
    let dir = out_dir(cli)?;
    let stacks = load_stacks(&a.stacks)?;
    let subject = a.subject.clone().unwrap_or_else(|| subject_of(&a.stacks[0]));
    let regularizer = match a.regularizer {
        RegularizerArg::Tikhonov => Regularizer::TikhonovGradient,
        RegularizerArg::Huber => Regularizer::HuberTv { delta: a.huber_delta },
    };
    let convention = match a.convention {
        ConventionArg::Lambda => WeightConvention::LambdaStyle,
        ConventionArg::Alpha => WeightConvention::AlphaStyle,
    };
    let mut base = ReconConfig::new(regularizer, convention, a.weights[0]);
    base.lambda_ref = a.lambda_ref;
    base.w_ref = a.w_ref;
    base.max_iters = a.max_iters;
    base.tolerance = a.tolerance;
    base.hr_spacing = stacks[0].model.hr.spacing()[0];
    let weights = if multi { a.weights.clone() } else { vec![a.weights[0]] };
    let problem = Problem::from_models(&stacks)?;
    let mut entries = Vec::new();
    for (w, r) in multi_reconstruct_problem(&problem, &base, &weights)? {
        let cfg = base.with_weight(w);
        let file = format!("{}.nii.gz", recon_stem(&subject, &cfg));
        write_volume(&r.volume, &dir.join(&file))?;
        let mut e = SweepEntry::new(&cfg, &r);
        e.file = Some(file);
        entries.push(e);
    }
    let stacks = a.stacks.iter().map(|p| p.display().to_string()).collect();
    write_json(&dir.join(format!("{subject}_sweep.json")), &Sweep { subject, stacks, entries })
}

fn registration_config(levels: usize) -> RegistrationConfig {
    RegistrationConfig { levels, ..RegistrationConfig::default() }
}

fn register(cli: &Cli, a: &RegisterArgs) -> Result<()> {
    let dir = out_dir(cli)?;
    let cfg = RegistrationConfig { max_evaluations: a.max_evaluations, ..registration_config(a.levels) };
    let r = register_rigid(&read_volume(&a.moving)?, &read_volume(&a.fixed)?, &RigidTransform::identity(), &cfg)?;
    write_json(&dir.join(&a.out), &r)
}

fn propagate(cli: &Cli, a: &PropagateArgs) -> Result<()> {
    let dir = out_dir(cli)?;
    let (labels, r) = propagate_labels(
        &read_labels(&a.labels)?,
        &read_volume(&a.source)?,
        &read_volume(&a.target)?,
        &registration_config(a.levels),
    )?;
    let name = stem(&a.target);
    write_labels(&labels, &dir.join(format!("{name}_dseg.nii.gz")))?;
    write_json(&dir.join(format!("{name}_transform.json")), &r)
}

/// One labeled volume available for training.
#[derive(Serialize, Deserialize)]
struct TrainingEntry {
    configuration: Configuration,
    subject: String,
    ga: f64,
    image: String,
    labels: String,
}

#[derive(Serialize, Deserialize)]
struct TrainingManifest {
    version: u32,
    k: usize,
    settings: TrainingSettings,
    /// Paths are relative to the manifest.
    volumes: Vec<TrainingEntry>,
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let m: TrainingManifest = read_json(&a.manifest)?;
    let cfg = Configuration::parse(&a.configuration)?;
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    let entries: Vec<&TrainingEntry> = m.volumes.iter().filter(|e| e.configuration == cfg).collect();
    if entries.is_empty() {
        return Err(Error::Input(format!("manifest has no volumes for {}", cfg.name())));
    }
    let mut ages: BTreeMap<String, f64> = BTreeMap::new();
    let volumes = entries
        .iter()
        .map(|e| {
            ages.insert(e.subject.clone(), e.ga);
            let id = stem(Path::new(&e.image));
            Ok(TrainingVolume {
                seed: derive_seed(seed, stream_id(&format!("{}/{id}", cfg.name()))),
                id,
                subject: e.subject.clone(),
                volume: read_volume(&base.join(&e.image))?,
                labels: read_labels(&base.join(&e.labels))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let plan = FoldPlan::stratified(&ages.into_iter().collect::<Vec<_>>(), m.k)?;
    let cv = run_cv(&volumes, &plan, &m.settings)?;
    let dir = cli.output_dir.join(cfg.name());
    fs::create_dir_all(&dir)?;
    for (i, model) in cv.models.iter().enumerate() {
        model.save(&dir.join(format!("fold-{i}.bin")))?;
    }
    write_json(&dir.join("folds.json"), &serde_json::json!({ "plan": plan, "training_sets": cv.training_sets }))
}

fn infer(cli: &Cli, a: &InferArgs) -> Result<()> {
    let dir = out_dir(cli)?;
    let image = read_volume(&a.image)?;
    let models = a.models.iter().map(|p| GaussianSegmenter::load(p)).collect::<Result<Vec<_>>>()?;
    let spec = PatchSpec { size: a.patch_size, overlap: a.overlap };
    let labels = sliding_window_predict(&image, &models, &spec)?.argmax();
    let out = a.out.clone().unwrap_or_else(|| format!("{}_pred.nii.gz", stem(&a.image)));
    write_labels(&labels, &dir.join(out))
}

fn evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    if a.pred.len() != a.truth.len() || !(a.ga.is_empty() || a.ga.len() == a.pred.len()) {
        return Err(Error::Input("--pred, --truth and --ga must have equal lengths".into()));
    }
    let dir = out_dir(cli)?;
    let mut reports = Vec::new();
    for (i, (p, t)) in a.pred.iter().zip(&a.truth).enumerate() {
        let ga = a.ga.get(i).copied().unwrap_or(f64::NAN);
        reports.push(TissueReport::compute(&read_labels(p)?, &read_labels(t)?, subject_of(p), ga)?);
    }
    let mut csv = TissueReport::csv_header() + "\n";
    for r in &reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write_atomic(&dir.join(format!("{}.csv", a.name)), csv.as_bytes())?;
    write_json(&dir.join(format!("{}.json", a.name)), &reports)
}

fn read_column(path: &Path, column: &str) -> Result<BTreeMap<String, f64>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let col = header
        .iter()
        .position(|h| *h == column)
        .ok_or_else(|| Error::Input(format!("{}: no column {column}", path.display())))?;
    let mut out = BTreeMap::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let cells: Vec<&str> = line.split(',').collect();
        // Undefined distances are written as empty cells and drop the subject.
        if let Some(v) = cells.get(col).filter(|c| !c.is_empty()) {
            let v = v.parse::<f64>().map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
            out.insert(cells[0].to_string(), v);
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct StatsReport {
    metric: String,
    n_pairs: usize,
    baseline_mean: f64,
    augmented_mean: f64,
    statistic: f64,
    n: usize,
    method: PMethod,
    p_value: f64,
    p_adjusted: f64,
    comparisons: usize,
    degenerate: bool,
    rank_sum_p: Option<f64>,
}

fn stats(cli: &Cli, a: &StatsArgs) -> Result<()> {
    let dir = out_dir(cli)?;
    let b = read_column(&a.baseline, &a.metric)?;
    let g = read_column(&a.augmented, &a.metric)?;
    let (x, y): (Vec<f64>, Vec<f64>) = g.iter().filter_map(|(s, &v)| b.get(s).map(|&w| (v, w))).unzip();
    let w = wilcoxon_signed_rank(&x, &y)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let report = StatsReport {
        metric: a.metric.clone(),
        n_pairs: x.len(),
        baseline_mean: mean(&y),
        augmented_mean: mean(&x),
        statistic: w.statistic,
        n: w.n,
        method: w.method,
        p_value: w.p_value,
        p_adjusted: bonferroni(&[w.p_value], a.comparisons)?[0],
        comparisons: a.comparisons,
        degenerate: w.degenerate,
        rank_sum_p: if a.rank_sum { Some(wilcoxon_rank_sum(&x, &y)?.p_value) } else { None },
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    write_json(&dir.join(&a.out), &report)
}

fn experiment(cli: &Cli, a: &ExperimentArgs) -> Result<()> {
    let dir = out_dir(cli)?;
    if a.print_manifest {
        return write_json(&dir.join("desk_scale.json"), &ExperimentManifest::desk_scale());
    }
    let mut m = match &a.manifest {
        Some(p) => ExperimentManifest::load(p)?,
        None => ExperimentManifest::desk_scale(),
    };
    if let Some(s) = cli.seed {
        m.seed = s;
    }
    let report = run_experiment(&m, &dir)?;
    for c in report.comparisons.iter().filter(|c| c.class == "overall") {
        println!(
            "{:<14} {:<19} {:<4} baseline {:.4} augmented {:.4} p {:.3e} p_adj {:.3e}",
            c.task,
            c.configuration.name(),
            c.metric,
            c.baseline_mean,
            c.augmented_mean,
            c.p_value,
            c.p_adjusted
        );
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Phantom(a) => phantom(cli, a),
        Command::Simulate(a) => simulate(cli, a),
        Command::Reconstruct(a) => reconstruct(cli, a, false),
        Command::Multirecon(a) => reconstruct(cli, a, true),
        Command::Register(a) => register(cli, a),
        Command::Propagate(a) => propagate(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Infer(a) => infer(cli, a),
        Command::Evaluate(a) => evaluate(cli, a),
        Command::Stats(a) => stats(cli, a),
        Command::Experiment(a) => experiment(cli, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            // Unreadable inputs count as validation failures.
            if e.is_numerical() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
