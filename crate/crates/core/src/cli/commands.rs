use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rayon::prelude::*;

use super::bench::{run_detection_trial, tabulate};
use super::manifest::{ManifestBuilder, SolverSummary};
use super::{
    Algo, BenchArgs, CliError, DetectArgs, FclsArgs, MetricsArgs, NfindrArgs, SynthArgs, UnmixArgs,
};
use crate::baselines;
use crate::glup::glup_solve;
use crate::matrix_io::{read_matrix, write_matrix, write_table};
use crate::nglup::nglup_solve;
use crate::scene::{restrict_columns, AbundanceEstimate, CandidateSet, SpectralScene};
use crate::selection::{deduplicate, detect_endmembers, EndmemberSet};
use crate::synth::{
    best_match_angles, coherence_stats, compute_metrics, generate_endmember_spectra, realized_snr_db, stream_rng,
    synthesize_with_spectra, SynthConfig,
};

const STREAM_CANDIDATE_SAMPLE: u64 = 21;

fn load_scene(path: &Path, mb: &mut ManifestBuilder) -> Result<SpectralScene, CliError> {
    mb.input(path);
    Ok(SpectralScene::new(read_matrix(path)?)?)
}

/// Reads 1-based pixel indices separated by commas or whitespace. A
/// non-numeric first line is taken as a header; `#` starts a comment line.
fn read_indices(path: &Path) -> Result<Vec<usize>, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut indices = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split([',', ' ', '\t']).filter(|t| !t.is_empty()).collect();
        if line_no == 0 && tokens.iter().any(|t| t.parse::<usize>().is_err()) {
            continue;
        }
        for t in tokens {
            let i: usize = t.parse().map_err(|_| {
                CliError::Usage(format!("{}: `{t}` is not a pixel index", path.display()))
            })?;
            if i == 0 {
                return Err(CliError::Usage(format!("{}: pixel indices are 1-based", path.display())));
            }
            indices.push(i - 1);
        }
    }
    Ok(indices)
}

fn write_indices(path: &Path, indices: &[usize]) -> Result<(), CliError> {
    let rows: Vec<Vec<String>> = indices.iter().map(|i| vec![(i + 1).to_string()]).collect();
    Ok(write_table(path, &["pixel"], &rows)?)
}

fn candidates_from(path: Option<&Path>, scene: &SpectralScene, mb: &mut ManifestBuilder) -> Result<CandidateSet, CliError> {
    match path {
        Some(p) => {
            mb.input(p);
            Ok(restrict_columns(scene, &read_indices(p)?)?)
        }
        None => Ok(scene.all_candidates()),
    }
}

fn write_endmember_table(path: &Path, set: &EndmemberSet, score_name: &str) -> Result<(), CliError> {
    let rows: Vec<Vec<String>> = set
        .pixel_indices
        .iter()
        .zip(&set.row_scores)
        .enumerate()
        .map(|(rank, (p, s))| vec![(rank + 1).to_string(), (p + 1).to_string(), s.to_string()])
        .collect();
    Ok(write_table(path, &["rank", "pixel", score_name], &rows)?)
}

pub(super) fn synth(a: &SynthArgs) -> Result<bool, CliError> {
    let mut mb = ManifestBuilder::new("synth", a, Some(a.seed), &a.output)?;
    let config = SynthConfig {
        band_count: a.bands,
        endmember_count: a.endmembers,
        pixel_count: a.pixels,
        snr_db: a.snr,
        seed: a.seed,
        placement: a.placement.into(),
        target_max_coherence: a.max_coherence,
    };
    let spectra = match &a.spectra {
        Some(path) => {
            mb.input(path);
            let spectra = read_matrix(path)?;
            let (max, mean) = coherence_stats(&spectra)?;
            mb.result("max_coherence", max)?;
            mb.result("mean_coherence", mean)?;
            spectra
        }
        None => {
            config.validate()?;
            let library = generate_endmember_spectra(&config)?;
            if !library.target_met {
                eprintln!(
                    "hsunmix: warning: no spectra draw met coherence {}; using the least coherent (max {:.4})",
                    a.max_coherence, library.max_coherence
                );
            }
            mb.result("max_coherence", library.max_coherence)?;
            mb.result("mean_coherence", library.mean_coherence)?;
            mb.result("coherence_target_met", library.target_met)?;
            library.spectra
        }
    };
    let (scene, truth) = synthesize_with_spectra(&config, spectra)?;

    write_matrix(mb.output("scene.hsm"), scene.data())?;
    write_matrix(mb.output("A.hsm"), &truth.true_abundances)?;
    write_matrix(mb.output("R.hsm"), &truth.endmember_spectra)?;
    write_indices(&mb.output("pure_pixels.csv"), &truth.endmember_pixel_indices)?;
    mb.result("noise_sigma", truth.noise_sigma)?;
    if truth.noise_sigma > 0.0 {
        mb.result("realized_snr_db", realized_snr_db(&scene, &truth))?;
    }
    mb.finish()
}

pub(super) fn unmix(a: &UnmixArgs) -> Result<bool, CliError> {
    let name = match a.algo {
        Algo::Glup => "unmix-glup",
        Algo::Nglup => "unmix-nglup",
    };
    let seed = a.sample.map(|_| a.seed);
    let mut mb = ManifestBuilder::new(name, a, seed, &a.output)?;
    let scene = load_scene(&a.scene, &mut mb)?;
    let candidates = match (a.omega.as_deref(), a.sample) {
        (Some(p), _) => candidates_from(Some(p), &scene, &mut mb)?,
        (None, Some(k)) => {
            let n = scene.pixel_count();
            if k == 0 || k > n {
                return Err(CliError::Usage(format!("--sample {k} must lie in 1..={n}")));
            }
            let mut rng = stream_rng(a.seed, STREAM_CANDIDATE_SAMPLE);
            let mut picked = sample(&mut rng, n, k).into_vec();
            picked.sort_unstable();
            restrict_columns(&scene, &picked)?
        }
        (None, None) => scene.all_candidates(),
    };

    let report = match a.algo {
        Algo::Glup => glup_solve(&scene, &candidates, &a.solver.glup_config())?,
        Algo::Nglup => {
            let out = nglup_solve(&scene, &candidates, &a.solver.nglup_config())?;
            let rows: Vec<Vec<String>> = out
                .outer_changes
                .iter()
                .zip(&out.sigma_history)
                .zip(&out.min_weight_eigenvalue)
                .enumerate()
                .map(|(k, ((c, s), e))| vec![(k + 1).to_string(), c.to_string(), s.to_string(), e.to_string()])
                .collect();
            write_table(
                mb.output("outer.csv"),
                &["outer_iteration", "change", "sigma_squared", "min_weight_eigenvalue"],
                &rows,
            )?;
            mb.result("outer_iterations", out.outer_iterations)?;
            mb.result("warm_start", SolverSummary::from(&out.warm_start))?;
            out.report
        }
    };

    let x = report.abundance.x();
    write_matrix(mb.output("X.hsm"), x)?;
    write_indices(&mb.output("candidates.csv"), candidates.indices())?;
    let rows: Vec<Vec<String>> = report
        .abundance
        .row_means()
        .iter()
        .zip(candidates.indices())
        .enumerate()
        .map(|(r, (m, p))| vec![(r + 1).to_string(), (p + 1).to_string(), m.to_string()])
        .collect();
    write_table(mb.output("row_means.csv"), &["row", "pixel", "mean"], &rows)?;
    mb.solver(SolverSummary::from(&report));
    mb.finish()
}

pub(super) fn detect(a: &DetectArgs) -> Result<bool, CliError> {
    let mut mb = ManifestBuilder::new("detect", a, None, &a.output)?;
    let scene = load_scene(&a.scene, &mut mb)?;
    let candidates = candidates_from(a.candidates.as_deref(), &scene, &mut mb)?;
    mb.input(&a.x);
    let x = AbundanceEstimate::with_measured_tolerance(read_matrix(&a.x)?);
    let detected = detect_endmembers(&x, &candidates, &scene, a.threshold)?;
    let kept = deduplicate(&detected, a.max_coherence)?;
    write_endmember_table(&mb.output("detected.csv"), &detected, "row_mean")?;
    write_endmember_table(&mb.output("endmembers.csv"), &kept, "row_mean")?;
    write_matrix(mb.output("E.hsm"), &kept.spectra)?;
    mb.result("detected", detected.len())?;
    mb.result("kept", kept.len())?;
    mb.finish()
}

pub(super) fn fcls(a: &FclsArgs) -> Result<bool, CliError> {
    let mut mb = ManifestBuilder::new("fcls", a, None, &a.output)?;
    let scene = load_scene(&a.scene, &mut mb)?;
    mb.input(&a.endmembers);
    let endmembers = read_matrix(&a.endmembers)?;
    let out = baselines::fcls(&scene, &endmembers)?;

    write_matrix(mb.output("abundances.hsm"), &out.abundances)?;
    let m = out.abundances.nrows();
    let mut header = vec!["pixel".to_string()];
    header.extend((1..=m).map(|k| format!("endmember_{k}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = out
        .abundances
        .column_iter()
        .enumerate()
        .map(|(j, col)| std::iter::once((j + 1).to_string()).chain(col.iter().map(|v| v.to_string())).collect())
        .collect();
    write_table(mb.output("abundance_maps.csv"), &header, &rows)?;

    mb.result("reconstruction_error", out.per_pixel_residual.norm())?;
    mb.result("max_kkt_residual", out.kkt_residual.max())?;
    mb.finish()
}

pub(super) fn nfindr(a: &NfindrArgs) -> Result<bool, CliError> {
    let mut mb = ManifestBuilder::new("nfindr", a, Some(a.seed), &a.output)?;
    let scene = load_scene(&a.scene, &mut mb)?;
    let out = baselines::nfindr(&scene, a.m, a.seed, a.max_sweeps)?;
    write_endmember_table(&mb.output("endmembers.csv"), &out.endmembers, "height")?;
    write_matrix(mb.output("E.hsm"), &out.endmembers.spectra)?;
    let rows: Vec<Vec<String>> = out
        .volume_history
        .iter()
        .enumerate()
        .map(|(k, v)| vec![k.to_string(), v.to_string()])
        .collect();
    write_table(mb.output("volume_history.csv"), &["swap", "volume"], &rows)?;
    mb.solver(SolverSummary {
        iterations: out.sweeps,
        converged: out.converged,
        primal_residual: None,
        dual_residual: None,
        objective: out.volume_history.last().copied(),
    });
    mb.finish()
}

/// `A` from a `synth` directory, embedded into the rows of `candidates`.
fn embedded_truth(dir: &Path, candidates: &[usize], mb: &mut ManifestBuilder) -> Result<DMatrix<f64>, CliError> {
    let a_path = dir.join("A.hsm");
    let pure_path = dir.join("pure_pixels.csv");
    mb.input(&a_path);
    mb.input(&pure_path);
    let a = read_matrix(&a_path)?;
    let pure = read_indices(&pure_path)?;
    if pure.len() != a.nrows() {
        return Err(CliError::Usage(format!(
            "{} lists {} pure pixels but A has {} rows",
            pure_path.display(),
            pure.len(),
            a.nrows()
        )));
    }
    let mut x = DMatrix::zeros(candidates.len(), a.ncols());
    for (row, pixel) in candidates.iter().enumerate() {
        if let Some(k) = pure.iter().position(|p| p == pixel) {
            x.row_mut(row).copy_from(&a.row(k));
        }
    }
    Ok(x)
}

pub(super) fn metrics(a: &MetricsArgs) -> Result<bool, CliError> {
    if a.estimate.is_none() && a.spectra.is_none() {
        return Err(CliError::Usage("nothing to compare: give --estimate or --spectra".into()));
    }
    let mut mb = ManifestBuilder::new("metrics", a, None, &a.output)?;
    let mut report = serde_json::Map::new();
    if let Some(est_path) = &a.estimate {
        mb.input(est_path);
        let estimate = read_matrix(est_path)?;
        let reference = match (&a.reference, &a.truth) {
            (Some(r), _) => {
                mb.input(r);
                read_matrix(r)?
            }
            (None, Some(dir)) => {
                let candidates = match &a.candidates {
                    Some(p) => {
                        mb.input(p);
                        read_indices(p)?
                    }
                    None => (0..estimate.ncols()).collect(),
                };
                embedded_truth(dir, &candidates, &mut mb)?
            }
            (None, None) => return Err(CliError::Usage("--estimate needs --reference or --truth".into())),
        };
        let m = compute_metrics(&estimate, &reference)?;
        report.insert("abundance".into(), serde_json::to_value(m).map_err(CliError::Json)?);
    }
    if let (Some(s), Some(r)) = (&a.spectra, &a.reference_spectra) {
        mb.input(s);
        mb.input(r);
        let angles = best_match_angles(&read_matrix(s)?, &read_matrix(r)?)?;
        let max = angles.iter().copied().fold(0.0, f64::max);
        let mean = angles.iter().sum::<f64>() / angles.len() as f64;
        report.insert(
            "spectra".into(),
            serde_json::json!({ "best_match_angles_rad": angles, "max_angle_rad": max, "mean_angle_rad": mean }),
        );
    }
    let path = mb.output("metrics.json");
    let text = serde_json::to_string_pretty(&report).map_err(CliError::Json)?;
    fs::write(&path, text + "\n").map_err(|source| CliError::Io { path, source })?;
    mb.result("metrics", &report)?;
    mb.finish()
}

pub(super) fn bench_detect(a: &BenchArgs) -> Result<bool, CliError> {
    if a.snr.is_empty() || a.trials == 0 {
        return Err(CliError::Usage("need at least one SNR and one trial".into()));
    }
    let mut mb = ManifestBuilder::new("bench-detect", a, Some(a.seed), &a.output)?;
    let config = a.solver.nglup_config();
    config.validate()?;
    let jobs: Vec<SynthConfig> = a
        .snr
        .iter()
        .flat_map(|&snr| {
            (0..a.trials as u64).map(move |i| SynthConfig {
                band_count: a.bands,
                endmember_count: a.endmembers,
                pixel_count: a.pixels,
                snr_db: snr,
                seed: a.seed + i,
                ..SynthConfig::default()
            })
        })
        .collect();
    let outcomes = jobs
        .par_iter()
        .map(|job| run_detection_trial(job, &config, a.threshold))
        .collect::<crate::Result<Vec<_>>>()?;

    let table: Vec<Vec<String>> = tabulate(&outcomes)
        .iter()
        .map(|r| vec![r.snr_db.to_string(), r.m_hat.to_string(), r.probability.to_string(), r.trials.to_string()])
        .collect();
    write_table(mb.output("bench.csv"), &["snr_db", "m_hat", "probability", "trials"], &table)?;
    let raw: Vec<Vec<String>> = outcomes
        .iter()
        .map(|o| {
            let detected: Vec<String> = o.detected.iter().map(|p| (p + 1).to_string()).collect();
            vec![
                o.snr_db.to_string(),
                o.seed.to_string(),
                o.m_hat.to_string(),
                detected.join(" "),
                o.rmse.to_string(),
                o.converged.to_string(),
                o.outer_iterations.to_string(),
                o.glup_m_hat.to_string(),
                o.glup_rmse.to_string(),
            ]
        })
        .collect();
    write_table(
        mb.output("trials.csv"),
        &["snr_db", "seed", "m_hat", "detected", "rmse", "converged", "outer_iterations", "glup_m_hat", "glup_rmse"],
        &raw,
    )?;

    let converged = outcomes.iter().filter(|o| o.converged).count();
    mb.result("converged_trials", converged)?;
    mb.solver(SolverSummary {
        iterations: outcomes.iter().map(|o| o.outer_iterations).sum(),
        converged: converged == outcomes.len(),
        primal_residual: None,
        dual_residual: None,
        objective: None,
    });
    mb.finish()
}
