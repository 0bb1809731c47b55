//! End-to-end acceptance checks. Runs without the libtest harness so that
//! every check prints exactly one PASS/FAIL line; the process exits nonzero
//! when any check fails.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use hsunmix::baselines::{fcls, fcls_pixel, nfindr, DEFAULT_MAX_SWEEPS};
use hsunmix::cli::{run_detection_trial, TrialOutcome};
use hsunmix::glup::{glup_solve, glup_x_step, GlupConfig, GramSolver};
use hsunmix::nglup::{nglup_solve, nglup_x_step, NglupConfig};
use hsunmix::prox::prox_positive_misto;
use hsunmix::synth::{abundance_rmse, generate_abundances, synthesize_scene, SynthConfig};
use hsunmix::{deduplicate, detect_endmembers, restrict_columns, SpectralScene};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use common::{fcls_enumeration, prox_objective, prox_oracle, rng, uniform};

type Check = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Check);

fn within(started: Instant, budget: Duration, detail: String) -> Check {
    let elapsed = started.elapsed();
    if elapsed <= budget {
        Ok(detail)
    } else {
        Err(format!("{detail}; took {elapsed:.1?}, budget {budget:?}"))
    }
}

fn prox_oracle_equivalence() -> Check {
    let started = Instant::now();
    let mut r = rng(101);
    let (mut worst_obj, mut worst_kkt) = (0.0f64, 0.0f64);
    let mut nonzero = 0;
    for _ in 0..1000 {
        let dim = r.random_range(1..=8);
        let v: Vec<f64> = (0..dim).map(|_| r.random_range(-2.0..2.0)).collect();
        let alpha = r.random_range(0.0..3.0);
        let z = prox_positive_misto(&v, alpha).map_err(|e| e.to_string())?;
        let reference = prox_oracle(&v, alpha, 4000);
        worst_obj = worst_obj.max((prox_objective(&z, &v, alpha) - prox_objective(&reference, &v, alpha)).abs());
        let nz: f64 = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nz > 0.0 {
            nonzero += 1;
            for i in 0..dim {
                let k = if z[i] > 0.0 {
                    (z[i] - v[i] + alpha * z[i] / nz).abs()
                } else {
                    v[i].max(0.0)
                };
                worst_kkt = worst_kkt.max(k);
            }
        }
    }
    let detail = format!("max objective gap {worst_obj:.1e}, max KKT violation {worst_kkt:.1e} over {nonzero} nonzero cases");
    if worst_obj > 1e-6 || worst_kkt > 1e-8 || nonzero == 0 {
        return Err(detail);
    }
    within(started, Duration::from_secs(10), detail)
}

fn glup_identity_property() -> Check {
    let started = Instant::now();
    let mut r = rng(202);
    let scene = SpectralScene::new(uniform(50, 20, 0.0, 1.0, &mut r)).map_err(|e| e.to_string())?;
    let config = GlupConfig {
        mu: 0.0,
        eps_primal: 1e-6,
        eps_dual: 1e-6,
        ..GlupConfig::default()
    };
    let out = glup_solve(&scene, &scene.all_candidates(), &config).map_err(|e| e.to_string())?;
    let dev = (out.abundance.x() - DMatrix::identity(20, 20)).norm() / 20.0;
    let detail = format!("|Z - I|_F / N = {dev:.2e} after {} iterations (converged: {})", out.iterations, out.converged);
    if dev > 1e-3 {
        return Err(detail);
    }
    within(started, Duration::from_secs(10), detail)
}

fn glup_three_endmembers() -> Check {
    let started = Instant::now();
    let config = SynthConfig {
        endmember_count: 3,
        pixel_count: 100,
        band_count: 420,
        snr_db: 50.0,
        seed: 1,
        ..SynthConfig::default()
    };
    let (scene, truth) = synthesize_scene(&config).map_err(|e| e.to_string())?;
    let all = scene.all_candidates();
    let out = glup_solve(&scene, &all, &GlupConfig::default()).map_err(|e| e.to_string())?;
    let detected = detect_endmembers(&out.abundance, &all, &scene, 0.01).map_err(|e| e.to_string())?;
    let got: BTreeSet<usize> = detected.pixel_indices.iter().copied().collect();
    let want: BTreeSet<usize> = truth.endmember_pixel_indices.iter().copied().collect();
    let rmse = abundance_rmse(out.abundance.x(), &truth.embedded_abundances(&all)).map_err(|e| e.to_string())?;
    let detail = format!("detected {got:?} (pure {want:?}), rmse {rmse:.2e}, {} iterations", out.iterations);
    if got != want || rmse > 0.01 {
        return Err(detail);
    }
    within(started, Duration::from_secs(120), detail)
}

fn table_one_trials(snr_db: f64) -> Result<Vec<TrialOutcome>, String> {
    let config = NglupConfig::default();
    (0..25u64)
        .into_par_iter()
        .map(|seed| {
            let synth = SynthConfig {
                endmember_count: 7,
                pixel_count: 100,
                band_count: 420,
                snr_db,
                seed,
                ..SynthConfig::default()
            };
            run_detection_trial(&synth, &config, 0.01)
        })
        .collect::<hsunmix::Result<Vec<_>>>()
        .map_err(|e| e.to_string())
}

type TimedTrials = (Result<Vec<TrialOutcome>, String>, Duration);

static TRIALS_20DB: OnceLock<TimedTrials> = OnceLock::new();

fn trials_20db() -> &'static TimedTrials {
    TRIALS_20DB.get_or_init(|| {
        let started = Instant::now();
        let trials = table_one_trials(20.0);
        (trials, started.elapsed())
    })
}

fn detection_rates() -> Check {
    let started = Instant::now();
    let at_30 = table_one_trials(30.0)?;
    let elapsed_30 = started.elapsed();
    let (at_20, elapsed_20) = trials_20db();
    let at_20 = at_20.as_ref().map_err(Clone::clone)?;
    let p = |t: &[TrialOutcome]| t.iter().filter(|o| o.m_hat == 7).count() as f64 / t.len() as f64;
    let (p30, p20) = (p(&at_30), p(at_20));
    let detail = format!("P(M_hat = 7) = {p30:.2} at 30 dB, {p20:.2} at 20 dB");
    if p30 < 0.88 || p20 < 0.88 {
        return Err(detail);
    }
    let elapsed = elapsed_30 + *elapsed_20;
    if elapsed > Duration::from_secs(45 * 60) {
        return Err(format!("{detail}; took {elapsed:.1?}"));
    }
    Ok(format!("{detail} ({elapsed:.1?})"))
}

fn jmax_insensitivity() -> Check {
    let synth = SynthConfig {
        endmember_count: 7,
        pixel_count: 100,
        band_count: 420,
        snr_db: 20.0,
        seed: 0,
        ..SynthConfig::default()
    };
    let (scene, _) = synthesize_scene(&synth).map_err(|e| e.to_string())?;
    let all = scene.all_candidates();
    let mut sets = Vec::new();
    for j_max in [1, 10, 100] {
        let config = NglupConfig {
            j_max,
            ..NglupConfig::default()
        };
        let out = nglup_solve(&scene, &all, &config).map_err(|e| e.to_string())?;
        let det = detect_endmembers(&out.report.abundance, &all, &scene, 0.01).map_err(|e| e.to_string())?;
        sets.push(det.pixel_indices.into_iter().collect::<BTreeSet<usize>>());
    }
    let detail = format!("detected sets for j_max 1, 10, 100: {:?}", sets);
    if sets.windows(2).all(|w| w[0] == w[1]) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sparsity_dominance() -> Check {
    let (trials, _) = trials_20db();
    let trials = trials.as_ref().map_err(Clone::clone)?;
    let n = trials.len() as f64;
    let sparser = trials.iter().filter(|o| o.m_hat <= o.glup_m_hat).count();
    let better = trials.iter().filter(|o| o.rmse <= o.glup_rmse).count();
    let detail = format!("NGLUP rows <= GLUP rows on {sparser}/25 seeds, rmse <= GLUP on {better}/25");
    if sparser as f64 >= 0.9 * n && better as f64 >= 0.7 * n {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// `A^T Lambda + rho A^T (B Z - C)` with the constraint matrices written out.
fn dense_pullback(z: &DMatrix<f64>, lambda: &DMatrix<f64>, rho: f64) -> DMatrix<f64> {
    let (np, n) = z.shape();
    let mut a = DMatrix::zeros(np + 1, np);
    let mut b = DMatrix::zeros(np + 1, np);
    let mut c = DMatrix::zeros(np + 1, n);
    for i in 0..np {
        a[(i, i)] = 1.0;
        a[(np, i)] = 1.0;
        b[(i, i)] = -1.0;
    }
    for j in 0..n {
        c[(np, j)] = 1.0;
    }
    a.tr_mul(lambda) + a.tr_mul(&(&b * z - c)) * rho
}

fn sylvester_back_substitution() -> Check {
    let mut r = rng(707);
    let (mut worst_rel, mut worst_ident) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = r.random_range(2..=12);
        let np = r.random_range(1..=n);
        let l = r.random_range(2..=15);
        let scene = SpectralScene::new(uniform(l, n, -1.0, 1.0, &mut r)).map_err(|e| e.to_string())?;
        let mut omega: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            omega.swap(i, r.random_range(0..=i));
        }
        omega.truncate(np);
        let cand = restrict_columns(&scene, &omega).map_err(|e| e.to_string())?;
        let g = uniform(n, n, -1.0, 1.0, &mut r);
        let w = g.tr_mul(&g) + DMatrix::identity(n, n) * 0.1;
        let z = uniform(np, n, 0.0, 1.0, &mut r);
        let lambda = uniform(np + 1, n, -1.0, 1.0, &mut r);
        let rho = r.random_range(0.1..10.0);
        let x = nglup_x_step(&cand, &scene, &w, &z, &lambda, rho).map_err(|e| e.to_string())?;

        let w_inv = w.clone().try_inverse().ok_or("random weight is singular")?;
        let m1 = cand.columns().tr_mul(cand.columns());
        let m2 = (DMatrix::identity(np, np) + DMatrix::from_element(np, np, 1.0)) * rho;
        let cross = cand.columns().tr_mul(scene.data());
        let lhs = &m1 * &x * &w_inv + &m2 * &x;
        let rhs = &cross * &w_inv - dense_pullback(&z, &lambda, rho);
        worst_rel = worst_rel.max((&lhs - &rhs).norm() / rhs.norm());

        let gram = GramSolver::new(cand.columns(), rho).map_err(|e| e.to_string())?;
        let x_glup = glup_x_step(&gram, &cross, &z, &lambda).map_err(|e| e.to_string())?;
        let x_ident = nglup_x_step(&cand, &scene, &DMatrix::identity(n, n), &z, &lambda, rho).map_err(|e| e.to_string())?;
        worst_ident = worst_ident.max((x_glup - x_ident).amax());
    }
    let detail = format!("max relative residual {worst_rel:.1e}, max |X_W=I - X_GLUP| {worst_ident:.1e}");
    if worst_rel <= 1e-8 && worst_ident <= 1e-10 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn feasibility_suite() -> Check {
    let eps = 1e-5;
    let mut checked = (0, 0);
    let mut failures = Vec::new();
    let mut inspect = |label: String, z: &DMatrix<f64>, primal: f64, converged: bool, is_glup: bool| {
        if !converged {
            return;
        }
        if is_glup {
            checked.0 += 1;
        } else {
            checked.1 += 1;
        }
        let n = z.ncols() as f64;
        let min = z.min();
        let sum_gap = z.row_sum().iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
        if min < 0.0 || sum_gap > eps * n.sqrt() || primal > eps {
            failures.push(format!("{label}: min {min:e}, column-sum gap {sum_gap:e}, primal {primal:e}"));
        }
    };
    for seed in 0..6u64 {
        let synth = SynthConfig {
            endmember_count: 3 + (seed as usize % 3),
            pixel_count: 40,
            band_count: 60,
            snr_db: [20.0, 30.0, 50.0][seed as usize % 3],
            seed,
            ..SynthConfig::default()
        };
        let (scene, _) = synthesize_scene(&synth).map_err(|e| e.to_string())?;
        let all = scene.all_candidates();
        let glup = glup_solve(&scene, &all, &GlupConfig::default()).map_err(|e| e.to_string())?;
        inspect(format!("GLUP seed {seed}"), glup.abundance.x(), glup.final_primal_residual, glup.converged, true);
        let config = NglupConfig {
            j_max: 10,
            max_outer_iterations: 1000,
            ..NglupConfig::default()
        };
        let out = nglup_solve(&scene, &all, &config).map_err(|e| e.to_string())?;
        let rep = &out.report;
        inspect(format!("NGLUP seed {seed}"), rep.abundance.x(), rep.final_primal_residual, rep.converged, false);
    }
    let detail = format!("{} converged GLUP runs and {} converged NGLUP runs checked", checked.0, checked.1);
    if !failures.is_empty() {
        return Err(format!("{detail}; violations: {}", failures.join("; ")));
    }
    if checked.0 == 0 || checked.1 == 0 {
        return Err(format!("{detail}; a solver never converged, nothing to certify"));
    }
    Ok(detail)
}

fn fcls_oracle_equivalence() -> Check {
    let mut r = rng(909);
    let (mut worst_obj, mut worst_feas) = (0.0f64, 0.0f64);
    for _ in 0..500 {
        let l = r.random_range(1..=6);
        let m = r.random_range(1..=4);
        let e = uniform(l, m, 0.0, 1.0, &mut r);
        let s = DVector::from_fn(l, |_, _| r.random_range(-0.2..1.2));
        let (a, _) = fcls_pixel(&e.tr_mul(&e), &e.tr_mul(&s)).map_err(|err| err.to_string())?;
        let (_, oracle) = fcls_enumeration(&e, &s);
        worst_obj = worst_obj.max(((&s - &e * &a).norm_squared() - oracle).abs());
        worst_feas = worst_feas.max((-a.min()).max(0.0)).max((a.sum() - 1.0).abs());
    }
    let detail = format!("max objective gap {worst_obj:.1e}, max simplex violation {worst_feas:.1e}");
    if worst_obj <= 1e-6 && worst_feas <= 1e-8 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn dirichlet_generator() -> Check {
    let a = generate_abundances(3, 100_000, 0).map_err(|e| e.to_string())?;
    let means: Vec<f64> = a.column_mean().iter().copied().collect();
    let worst_sum = a.row_sum().iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    let detail = format!("component means {means:.4?}, max column-sum error {worst_sum:.1e}");
    if means.iter().all(|m| (m - 1.0 / 3.0).abs() <= 0.01) && worst_sum <= 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn pipeline_vs_nfindr() -> Check {
    let started = Instant::now();
    let errors = (0..10u64)
        .map(|seed| -> Result<(f64, f64), String> {
            let synth = SynthConfig {
                endmember_count: 5,
                pixel_count: 300,
                band_count: 420,
                snr_db: 20.0,
                seed,
                ..SynthConfig::default()
            };
            let (scene, _) = synthesize_scene(&synth).map_err(|e| e.to_string())?;
            let all = scene.all_candidates();
            let out = nglup_solve(&scene, &all, &NglupConfig::default()).map_err(|e| e.to_string())?;
            let det = detect_endmembers(&out.report.abundance, &all, &scene, 0.01).map_err(|e| e.to_string())?;
            let kept = deduplicate(&det, 0.95).map_err(|e| e.to_string())?;
            let ours = fcls(&scene, &kept.spectra).map_err(|e| e.to_string())?;
            let vertices = nfindr(&scene, 5, seed, DEFAULT_MAX_SWEEPS).map_err(|e| e.to_string())?;
            let baseline = fcls(&scene, &vertices.endmembers.spectra).map_err(|e| e.to_string())?;
            Ok((ours.per_pixel_residual.norm(), baseline.per_pixel_residual.norm()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let wins = errors.iter().filter(|(a, b)| *a <= 1.1 * b).count();
    let ratios: Vec<String> = errors.iter().map(|(a, b)| format!("{:.3}", a / b)).collect();
    let detail = format!("error ratio <= 1.1 on {wins}/10 scenes (ratios {})", ratios.join(" "));
    if wins < 8 {
        return Err(detail);
    }
    within(started, Duration::from_secs(20 * 60), detail)
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_hsunmix"))
        .current_dir(dir)
        .args(["--threads", "1", "--allow-nonconverged"])
        .args(args)
        .status()
        .map_err(|e| e.to_string())?;
    if status.success() {
        Ok(())
    } else {
        Err(format!("`hsunmix {}` exited with {status}", args.join(" ")))
    }
}

/// Every file below `dir` as (relative path, contents). Manifests lose their
/// wall-clock duration.
fn snapshot(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let mut bytes = fs::read(&path).map_err(|e| e.to_string())?;
            if path.file_name().is_some_and(|n| n == "manifest.json") {
                let mut json: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
                json.as_object_mut().ok_or("manifest is not an object")?.remove("duration_seconds");
                bytes = serde_json::to_vec(&json).map_err(|e| e.to_string())?;
            }
            let rel = path.strip_prefix(dir).map_err(|e| e.to_string())?;
            files.push((rel.display().to_string(), bytes));
        }
    }
    files.sort();
    Ok(files)
}

fn cli_determinism() -> Check {
    let pipeline: &[&[&str]] = &[
        &["synth", "--endmembers", "3", "--pixels", "40", "--bands", "50", "--snr", "30", "--seed", "3", "-o", "s"],
        &["unmix", "--algo", "glup", "--scene", "s/scene.hsm", "--sample", "25", "--seed", "5", "-o", "g"],
        &["unmix", "--algo", "nglup", "--scene", "s/scene.hsm", "--all", "--max-outer", "20", "-o", "n"],
        &["detect", "--x", "n/X.hsm", "--scene", "s/scene.hsm", "--candidates", "n/candidates.csv", "-o", "d"],
        &["fcls", "--scene", "s/scene.hsm", "--endmembers", "d/E.hsm", "-o", "f"],
        &["nfindr", "--scene", "s/scene.hsm", "--m", "3", "--seed", "7", "-o", "v"],
        &["metrics", "--estimate", "n/X.hsm", "--truth", "s", "--candidates", "n/candidates.csv", "-o", "m"],
        &["bench-detect", "--endmembers", "3", "--pixels", "30", "--bands", "40", "--snr", "20,30", "--trials", "2", "--seed", "9", "-o", "b"],
    ];
    let runs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    for dir in &runs {
        for args in pipeline {
            run_cli(dir.path(), args)?;
        }
    }
    let (a, b) = (snapshot(runs[0].path())?, snapshot(runs[1].path())?);
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    if a.len() != b.len() || !differing.is_empty() {
        return Err(format!("outputs differ between identical serial runs: {differing:?}"));
    }
    Ok(format!("{} output files identical across two serial runs of {} commands", names.len(), pipeline.len()))
}

fn main() {
    let checks: [Criterion; 12] = [
        (1, "prox oracle equivalence", prox_oracle_equivalence),
        (2, "GLUP identity property", glup_identity_property),
        (3, "GLUP three-endmember detection", glup_three_endmembers),
        (4, "detection rate, 7 endmembers", detection_rates),
        (5, "j_max insensitivity", jmax_insensitivity),
        (6, "NGLUP sparsity dominance", sparsity_dominance),
        (7, "Sylvester back-substitution", sylvester_back_substitution),
        (8, "feasibility of converged runs", feasibility_suite),
        (9, "FCLS oracle equivalence", fcls_oracle_equivalence),
        (10, "Dirichlet generator", dirichlet_generator),
        (11, "pipeline vs N-FINDR", pipeline_vs_nfindr),
        (12, "CLI determinism", cli_determinism),
    ];
    let mut failed = 0;
    for (id, name, check) in checks {
        let started = Instant::now();
        let outcome = check();
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 12 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
