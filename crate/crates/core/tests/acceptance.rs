//! End-to-end acceptance suite. Runs without the libtest harness so every
//! criterion prints one PASS/FAIL line; exits non-zero if any fails.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use common::{brute_assd, dense_acquisition, dense_gradient, dot, enumerate_signed_rank, norm, solve_spd, Dense};
use multirecon::experiment::{run_experiment, Comparison, ExperimentManifest, ExperimentReport, OUT_OF_DOMAIN, IN_DOMAIN};
use multirecon::forward::{apply, simulate_stacks, AcquisitionModel, LRStack, Motion, SimulationSpec, StackOperator};
use multirecon::metrics::{assd, dice};
use multirecon::phantom::{generate_phantom, PhantomParams};
use multirecon::registration::{register_rigid, RegistrationConfig};
use multirecon::segmenter::Configuration;
use multirecon::solver::{reconstruct, total_variation, Problem, ReconConfig, Regularizer, WeightConvention};
use multirecon::stats::{bonferroni, wilcoxon_signed_rank, PMethod};
use multirecon::volume::{resample_transformed, Axis, Geometry, Interpolation, LabelMap, RigidTransform, Volume};
use multirecon::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within_time(start: Instant, limit_s: f64, detail: String) -> Outcome {
    let t = start.elapsed().as_secs_f64();
    check(t < limit_s, format!("{detail}; took {t:.1}s, limit {limit_s}s"))?;
    Ok(format!("{detail}; {t:.1}s"))
}

fn random_model(rng: &mut ChaCha8Rng) -> AcquisitionModel {
    let h = [0.8, 1.0, 1.1][rng.random_range(0..3)];
    let dims = [0; 3].map(|_| rng.random_range(5..=12));
    let hr = Geometry::centered(dims, [h; 3]).unwrap();
    let mut m = AcquisitionModel::new(Axis::from_index(rng.random_range(0..3)), hr);
    m.slice_thickness = h * rng.random_range(1.6..3.4);
    m.in_plane_spacing = h * rng.random_range(0.8..1.6);
    m.psf_fwhm_through = m.slice_thickness * rng.random_range(0.5..1.2);
    m.psf_fwhm_inplane = m.in_plane_spacing * rng.random_range(0.0..1.5);
    let draw = |rng: &mut ChaCha8Rng| {
        RigidTransform::from_degrees(
            [0; 3].map(|_| rng.random_range(-6.0..6.0)),
            [0; 3].map(|_| rng.random_range(-2.0..2.0)),
        )
    };
    m.motion = match rng.random_range(0..3) {
        0 => Motion::none(),
        1 => Motion::Stack { transform: draw(rng) },
        _ => {
            let n = m.lr_geometry().unwrap().dims()[m.orientation.index()];
            Motion::PerSlice { transforms: (0..n).map(|_| draw(rng)).collect() }
        }
    };
    m
}

fn operator_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_adj, mut worst_dense) = (0.0f64, 0.0f64);
    let cases = 24;
    for _ in 0..cases {
        let model = random_model(&mut rng);
        let op = StackOperator::new(&model).unwrap();
        let x: Vec<f64> = (0..op.hr_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..op.lr_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (ax, aty) = (op.forward(&x), op.adjoint(&y));
        worst_adj = worst_adj.max((dot(&ax, &y) - dot(&x, &aty)).abs() / (norm(&x) * norm(&y)));
        let a = dense_acquisition(&model);
        let (dax, daty) = (a.mul_vec(&x), a.transpose().mul_vec(&y));
        for (got, want) in [(&ax, &dax), (&aty, &daty)] {
            let scale = norm(want).max(1.0);
            for (u, v) in got.iter().zip(want.iter()) {
                worst_dense = worst_dense.max((u - v).abs() / scale);
            }
        }
    }
    check(worst_adj <= 1e-6, format!("adjoint gap {worst_adj:.2e} > 1e-6"))?;
    check(worst_dense <= 1e-9, format!("dense mismatch {worst_dense:.2e} > 1e-9"))?;
    within_time(start, 10.0, format!("{cases} models, adjoint gap {worst_adj:.1e}, dense gap {worst_dense:.1e}"))
}

fn small_problem(seed: u64) -> (Vec<LRStack>, Vec<RigidTransform>, Vec<AcquisitionModel>) {
    let g = Geometry::isotropic(12, 1.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coarse = Geometry::isotropic(12, 4.0).unwrap();
    let (x, _) = generate_phantom(&PhantomParams::new(25.0, seed).with_grid(coarse)).unwrap();
    let x = Volume::new(g.clone(), x.data().to_vec()).unwrap();
    let (mut stacks, mut ts, mut models) = (Vec::new(), Vec::new(), Vec::new());
    for a in 0..3 {
        let mut m = AcquisitionModel::new(Axis::from_index(a), g.clone());
        m.slice_thickness = 2.2;
        m.in_plane_spacing = 1.1;
        m.psf_fwhm_through = 2.2;
        m.psf_fwhm_inplane = 1.3;
        let t = RigidTransform::from_degrees(
            [0; 3].map(|_| rng.random_range(-3.0..3.0)),
            [0; 3].map(|_| rng.random_range(-1.0..1.0)),
        );
        m.motion = Motion::Stack { transform: t };
        let clean = apply(&m, &x).unwrap();
        let data = clean.data().iter().map(|v| v + rng.random_range(-0.05..0.05)).collect();
        stacks.push(LRStack { volume: Volume::new(clean.geometry().clone(), data).unwrap(), model: m.clone() });
        ts.push(t);
        models.push(m);
    }
    (stacks, ts, models)
}

fn dense_tikhonov(stacks: &[LRStack], models: &[AcquisitionModel], w: f64) -> Vec<f64> {
    let n = models[0].hr.len();
    let mut h = Dense::zeros(n, n);
    let mut b = vec![0.0; n];
    for (s, m) in stacks.iter().zip(models) {
        let a = dense_acquisition(m);
        let at = a.transpose();
        h.add_scaled(&at.matmul(&a), 1.0);
        for (bi, v) in b.iter_mut().zip(at.mul_vec(s.volume.data())) {
            *bi += v;
        }
    }
    let d = dense_gradient(&models[0].hr);
    h.add_scaled(&d.transpose().matmul(&d), w);
    solve_spd(&h, &b)
}

fn solver_correctness() -> Outcome {
    let mut worst = 0.0f64;
    for (seed, alpha) in [(5, 0.02), (6, 0.3)] {
        let (stacks, ts, models) = small_problem(seed);
        let mut cfg = ReconConfig::new(Regularizer::TikhonovGradient, WeightConvention::AlphaStyle, alpha);
        cfg.max_iters = 2000;
        cfg.tolerance = 1e-14;
        let r = reconstruct(&stacks, &ts, &cfg).unwrap();
        let exact = dense_tikhonov(&stacks, &models, alpha);
        let diff: Vec<f64> = r.volume.data().iter().zip(&exact).map(|(a, b)| a - b).collect();
        worst = worst.max(norm(&diff) / norm(&exact));
    }
    check(worst <= 1e-4, format!("direct-solve relative error {worst:.2e} > 1e-4"))?;

    let (stacks, ts, _) = small_problem(13);
    let mut traces = 0;
    for reg in [Regularizer::TikhonovGradient, Regularizer::HuberTv { delta: None }] {
        for conv in [WeightConvention::LambdaStyle, WeightConvention::AlphaStyle] {
            for w in [0.1, 0.75, 3.0] {
                let mut cfg = ReconConfig::new(reg, conv, if conv == WeightConvention::AlphaStyle { w * 0.05 } else { w });
                cfg.max_iters = 60;
                let r = reconstruct(&stacks, &ts, &cfg).unwrap();
                check(
                    r.objective_trace.windows(2).all(|p| p[1] <= p[0]),
                    format!("{reg:?} {conv:?} {w}: objective increased"),
                )?;
                traces += 1;
            }
        }
    }

    let g = Geometry::isotropic(12, 1.1).unwrap();
    let x = Volume::filled(g.clone(), 0.7);
    let stacks: Vec<LRStack> = (0..3)
        .map(|a| {
            let m = AcquisitionModel::new(Axis::from_index(a), g.clone());
            LRStack { volume: apply(&m, &x).unwrap(), model: m }
        })
        .collect();
    let ident = vec![RigidTransform::identity(); 3];
    let mut drift = 0.0f64;
    for reg in [Regularizer::TikhonovGradient, Regularizer::HuberTv { delta: Some(0.01) }] {
        let r = reconstruct(&stacks, &ident, &ReconConfig::new(reg, WeightConvention::AlphaStyle, 0.1)).unwrap();
        drift = drift.max(r.volume.data().iter().map(|v| (v - 0.7).abs()).fold(0.0, f64::max));
    }
    check(drift <= 1e-6, format!("constant input drifted by {drift:.2e}"))?;
    Ok(format!("direct-solve error {worst:.1e}, {traces} monotone traces, fixed-point drift {drift:.1e}"))
}

fn regularization_path() -> Outcome {
    let start = Instant::now();
    let g = Geometry::isotropic(48, 1.1).unwrap();
    let (x, _) = generate_phantom(&PhantomParams::new(30.0, 4).with_grid(g)).unwrap();
    let stacks = simulate_stacks(&x, &SimulationSpec::default(), 9).unwrap();
    let problem = Problem::from_models(&stacks).unwrap();
    let lambda = ReconConfig::lambda_default();
    let alpha = ReconConfig::new(Regularizer::TikhonovGradient, WeightConvention::AlphaStyle, 0.02);
    let paths: [(&str, ReconConfig, Vec<f64>); 4] = [
        ("λ-style huber", ReconConfig { max_iters: 100, w_ref: 0.01, ..lambda.clone() }, vec![0.1, 0.75, 1.5, 3.0]),
        ("λ-style tikhonov", ReconConfig { regularizer: Regularizer::TikhonovGradient, w_ref: 0.01, tolerance: 1e-8, ..lambda }, vec![0.1, 0.75, 1.5, 3.0]),
        ("α-style tikhonov", ReconConfig { tolerance: 1e-8, ..alpha.clone() }, vec![0.01, 0.02, 0.05, 0.1]),
        ("α-style huber", ReconConfig { regularizer: Regularizer::HuberTv { delta: None }, max_iters: 100, ..alpha }, vec![0.001, 0.002, 0.005, 0.01]),
    ];
    let mut notes = Vec::new();
    for (name, base, weights) in paths {
        let mut configs: Vec<ReconConfig> = weights.iter().map(|&w| base.with_weight(w)).collect();
        configs.sort_by(|a, b| b.derived_weight().unwrap().total_cmp(&a.derived_weight().unwrap()));
        // (derived w, R, D, TV), smoothest first; capped Huber solves continue
        // from the previous point of the path
        let mut rows: Vec<(f64, f64, f64, f64)> = Vec::new();
        let mut prev: Option<Volume> = None;
        for c in &configs {
            let init = if matches!(c.regularizer, Regularizer::HuberTv { .. }) { prev.as_ref() } else { None };
            let r = problem.solve_from(c, init).unwrap();
            rows.push((r.derived_weight, r.regularizer_value, r.data_residual, total_variation(&r.volume)));
            prev = Some(r.volume);
        }
        rows.reverse();
        for p in rows.windows(2) {
            check(p[1].1 <= p[0].1, format!("{name}: R rose from {:.4e} to {:.4e} as w grew", p[0].1, p[1].1))?;
            check(p[1].2 >= p[0].2, format!("{name}: data residual fell as w grew"))?;
            // larger w means lower λ or higher α, i.e. a smoother volume
            check(p[1].3 <= p[0].3, format!("{name}: TV rose from {:.4e} to {:.4e} as w grew", p[0].3, p[1].3))?;
        }
        notes.push(format!("{name} TV {:.4}→{:.4}", rows[0].3, rows[3].3));
    }
    within_time(start, 60.0, notes.join(", "))
}

fn registration() -> Outcome {
    let g = Geometry::isotropic(48, 1.1).unwrap();
    let (x, _) = generate_phantom(&PhantomParams::new(29.0, 11).with_grid(g.clone())).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = RegistrationConfig::default();
    let (mut ok, mut worst_mm, mut worst_deg) = (0, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let dir: [f64; 3] = [0; 3].map(|_| rng.random_range(-1.0..1.0));
        let n = norm(&dir);
        let mag = rng.random_range(0.0..4.0);
        let rot = [0; 3].map(|_| rng.random_range(-5.0..5.0));
        let truth = RigidTransform::from_degrees(rot, dir.map(|v| v / n * mag));
        let fixed = resample_transformed(&x, &truth, &g, Interpolation::Linear);
        let r = register_rigid(&x, &fixed, &RigidTransform::identity(), &cfg).unwrap();
        let (deg, mm) = r.transform.compose(&truth.inverse()).magnitude();
        worst_mm = worst_mm.max(mm);
        worst_deg = worst_deg.max(deg);
        if mm <= 0.2 * 1.1 && deg <= 0.5 {
            ok += 1;
        }
    }
    check(ok >= 19, format!("{ok}/20 recovered"))?;
    Ok(format!("{ok}/20 recovered, worst residual {worst_mm:.3} mm / {worst_deg:.3}°"))
}

fn random_map(rng: &mut ChaCha8Rng, g: &Geometry) -> LabelMap {
    let l = (0..g.len()).map(|_| if rng.random_bool(0.6) { 0 } else { rng.random_range(1..4u8) }).collect();
    LabelMap::new(g.clone(), l).unwrap()
}

fn metrics_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let g = Geometry::centered([8; 3], [0; 3].map(|_| rng.random_range(0.5..2.0))).unwrap();
        let (p, t) = (random_map(&mut rng, &g), random_map(&mut rng, &g));
        for c in 1..4u8 {
            let pm: Vec<bool> = p.labels().iter().map(|&v| v == c).collect();
            let tm: Vec<bool> = t.labels().iter().map(|&v| v == c).collect();
            let inter = pm.iter().zip(&tm).filter(|(a, b)| **a && **b).count();
            let total = pm.iter().chain(&tm).filter(|b| **b).count();
            let want = if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 };
            check(dice(&p, &t, c).unwrap() == want, "DSC differs from voxel counting")?;
            match assd(&p, &t, c) {
                Ok(got) => worst = worst.max((got - brute_assd(&pm, &tm, [8; 3], g.spacing())).abs()),
                Err(Error::UndefinedDistance { .. }) => check(!pm.contains(&true) || !tm.contains(&true), "spurious undefined ASSD")?,
                Err(e) => return Err(e.to_string()),
            }
        }
    }
    check(worst <= 1e-9, format!("ASSD gap {worst:.2e}"))?;

    let mut worst_p = 0.0f64;
    let mut tests = 0;
    for n in 5..=12 {
        for _ in 0..20 {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 * 0.5).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 * 0.5).collect();
            let r = wilcoxon_signed_rank(&x, &y).unwrap();
            if r.degenerate {
                continue;
            }
            check(r.method == PMethod::Exact, "small sample not exact")?;
            let d: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
            worst_p = worst_p.max((r.p_value - enumerate_signed_rank(&d)).abs());
            tests += 1;
        }
    }
    check(worst_p <= 1e-12, format!("signed-rank p gap {worst_p:.2e}"))?;
    check(bonferroni(&[0.001, 0.2, 0.5], 7).unwrap() == vec![0.007, 1.0, 1.0], "Bonferroni does not clamp")?;
    check(bonferroni(&[1.5], 7).is_err(), "Bonferroni accepted p > 1")?;
    Ok(format!("ASSD gap {worst:.1e}, {tests} exact p-values within {worst_p:.1e}, clamping ok"))
}

fn leakage_guard() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut m = ExperimentManifest::desk_scale();
    let leaked = m.split.test[3].clone();
    m.split.train.push(leaked.clone());
    match run_experiment(&m, dir.path()) {
        Err(Error::Leakage(msg)) => {
            check(!dir.path().join("models").exists(), "models written before the leak was caught")?;
            Ok(format!("rejected: {msg}"))
        }
        Err(e) => Err(format!("wrong error: {e}")),
        Ok(_) => Err(format!("manifest training on {leaked} was accepted")),
    }
}

fn overall<'a>(r: &'a ExperimentReport, task: &str, cfg: Configuration, metric: &str) -> &'a Comparison {
    r.comparisons
        .iter()
        .find(|c| c.task == task && c.configuration == cfg && c.metric == metric && c.class == "overall")
        .expect("overall comparison present")
}

fn directional_reproduction(r: &ExperimentReport, elapsed: f64) -> Outcome {
    for task in &r.tasks {
        for (cfg, reps) in &task.reports {
            check(reps.len() == 10 || task.task == OUT_OF_DOMAIN, format!("{} {}: {} test subjects", task.task, cfg.name(), reps.len()))?;
            check(reps.len() == 40 || task.task == IN_DOMAIN, format!("{} {}: {} test subjects", task.task, cfg.name(), reps.len()))?;
        }
    }
    let cfg = Configuration::MialsrtkAugmented;
    let dsc = overall(r, OUT_OF_DOMAIN, cfg, "dsc");
    let asd = overall(r, OUT_OF_DOMAIN, cfg, "assd");
    let summary = format!(
        "out-of-domain DSC {:.4}→{:.4} (p {:.1e}), ASSD {:.4}→{:.4} (p {:.1e})",
        dsc.baseline_mean, dsc.augmented_mean, dsc.p_value, asd.baseline_mean, asd.augmented_mean, asd.p_value
    );
    check(dsc.augmented_mean > dsc.baseline_mean, format!("{summary}: DSC not higher"))?;
    check(asd.augmented_mean < asd.baseline_mean, format!("{summary}: ASSD not lower"))?;
    check(dsc.p_value < 0.05 && asd.p_value < 0.05, format!("{summary}: not significant"))?;
    let ind = overall(r, IN_DOMAIN, cfg, "dsc");
    let ina = overall(r, IN_DOMAIN, cfg, "assd");
    let in_summary = format!(
        "in-domain DSC {:.4}→{:.4}, ASSD {:.4}→{:.4}",
        ind.baseline_mean, ind.augmented_mean, ina.baseline_mean, ina.augmented_mean
    );
    check(ind.augmented_mean >= ind.baseline_mean, format!("{in_summary}: DSC dropped"))?;
    check(ina.augmented_mean <= ina.baseline_mean, format!("{in_summary}: ASSD rose"))?;
    check(elapsed < 600.0, format!("run took {elapsed:.0}s, limit 600s"))?;
    Ok(format!("{}: {summary}; {in_summary}; {elapsed:.0}s", cfg.name()))
}

fn metric_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir.join("metrics"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn determinism(a: &Path, b: &Path) -> Outcome {
    let (fa, fb) = (metric_files(a), metric_files(b));
    check(fa.keys().eq(fb.keys()), "runs produced different metric files")?;
    let csvs = fa.keys().filter(|k| k.ends_with(".csv")).count();
    check(csvs >= 7, format!("only {csvs} metric CSVs"))?;
    for (name, bytes) in &fa {
        check(fb[name] == *bytes, format!("{name} differs between runs"))?;
    }
    Ok(format!("{} metric files ({csvs} CSVs) identical, second run on 3 worker threads", fa.len()))
}

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    })
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, r: Outcome| {
        match &r {
            Ok(d) => println!("criterion {name}: PASS ({d})"),
            Err(d) => println!("criterion {name}: FAIL ({d})"),
        }
        results.push((name, r));
    };
    report("1 operator correctness", guarded(operator_correctness));
    report("2 solver correctness", guarded(solver_correctness));
    report("3 regularization path", guarded(regularization_path));
    report("4 registration", guarded(registration));
    report("5 metrics oracles", guarded(metrics_oracles));
    report("6 leakage guard", guarded(leakage_guard));

    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let manifest = ExperimentManifest::desk_scale();
    let first = guarded(|| {
        let start = Instant::now();
        let r = run_experiment(&manifest, da.path()).map_err(|e| e.to_string())?;
        Ok((r, start.elapsed().as_secs_f64()))
    });
    report(
        "7 directional reproduction",
        first.as_ref().map_err(Clone::clone).and_then(|(r, t)| guarded(|| directional_reproduction(r, *t))),
    );
    // the rerun uses a different worker count on purpose
    let second = guarded(|| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().map_err(|e| e.to_string())?;
        pool.install(|| run_experiment(&manifest, db.path())).map_err(|e| e.to_string())
    });
    report(
        "8 determinism",
        match (&first, &second) {
            (Ok(_), Ok(_)) => guarded(|| determinism(da.path(), db.path())),
            (Err(e), _) | (_, Err(e)) => Err(e.clone()),
        },
    );

    let failed = results.iter().filter(|(_, r)| r.is_err()).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
