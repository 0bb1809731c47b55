//! Synthetic scenes under the linear mixing model and quality metrics.
//!
//! Endmember spectra come from a parametric generator of smooth, nonnegative
//! curves (Gaussian absorption/reflection bumps over a gentle baseline). Mixed
//! pixels draw their abundances uniformly from the simplex, and i.i.d.
//! Gaussian noise is scaled to a requested total-energy SNR.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::{ensure_dims, Result, UnmixError};
use crate::scene::{SceneGroundTruth, SpectralScene};
use crate::selection::mutual_coherence;

/// Where the `M` pure pixels are placed among the `N` columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PurePixelPlacement {
    /// Columns `0..M`.
    #[default]
    FirstM,
    /// `M` distinct random columns.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub band_count: usize,
    pub endmember_count: usize,
    pub pixel_count: usize,
    /// `f64::INFINITY` disables noise.
    pub snr_db: f64,
    pub seed: u64,
    pub placement: PurePixelPlacement,
    pub target_max_coherence: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            band_count: 420,
            endmember_count: 3,
            pixel_count: 100,
            snr_db: 50.0,
            seed: 0,
            placement: PurePixelPlacement::FirstM,
            target_max_coherence: 0.95,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let m = self.endmember_count;
        if m == 0 || self.pixel_count < m || self.band_count < m {
            return Err(UnmixError::InvalidParameter(format!(
                "need 1 <= M <= N and M <= L, got M = {m}, N = {}, L = {}",
                self.pixel_count, self.band_count
            )));
        }
        if self.snr_db.is_nan() {
            return Err(UnmixError::InvalidParameter("SNR is NaN".into()));
        }
        if !(self.target_max_coherence > 0.0 && self.target_max_coherence <= 1.0) {
            return Err(UnmixError::InvalidParameter(format!(
                "target coherence {} outside (0, 1]",
                self.target_max_coherence
            )));
        }
        Ok(())
    }
}

// Independent random streams per generator stage.
const STREAM_SPECTRA: u64 = 1;
const STREAM_ABUNDANCES: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_PLACEMENT: u64 = 4;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const MAX_LIBRARY_ATTEMPTS: usize = 100;

/// A generated endmember library with its coherence statistics.
#[derive(Debug, Clone)]
pub struct SpectraLibrary {
    /// `L x M`, one spectrum per column.
    pub spectra: DMatrix<f64>,
    pub max_coherence: f64,
    pub mean_coherence: f64,
    pub attempts: usize,
    /// False when no attempt met the coherence target and the least coherent
    /// draw was returned instead.
    pub target_met: bool,
}

/// Range of Gaussian feature widths as a fraction of the band axis. Narrow
/// features, as in mineral absorption bands, keep each spectrum away from the
/// convex hull of the others.
const FEATURE_WIDTH: (f64, f64) = (0.005, 0.05);

fn draw_spectrum(bands: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let offset: f64 = rng.random_range(0.05..0.3);
    let slope: f64 = rng.random_range(-0.5 * offset..0.3);
    let bumps = rng.random_range(3..=8);
    let params: Vec<(f64, f64, f64)> = (0..bumps)
        .map(|_| {
            (
                rng.random_range(0.1..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(FEATURE_WIDTH.0..FEATURE_WIDTH.1),
            )
        })
        .collect();
    let denom = (bands.max(2) - 1) as f64;
    let mut s: Vec<f64> = (0..bands)
        .map(|b| {
            let t = b as f64 / denom;
            let base = offset + slope * t;
            base + params
                .iter()
                .map(|&(amp, centre, width)| amp * (-(t - centre).powi(2) / (2.0 * width * width)).exp())
                .sum::<f64>()
        })
        .collect();
    let peak = s.iter().copied().fold(0.0, f64::max);
    let level: f64 = rng.random_range(0.5..1.0);
    s.iter_mut().for_each(|v| *v *= level / peak);
    s
}

/// Pairwise coherence statistics `(max, mean)` over the columns of `spectra`.
pub fn coherence_stats(spectra: &DMatrix<f64>) -> Result<(f64, f64)> {
    let m = spectra.ncols();
    let mut max = 0.0f64;
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..m {
        for j in i + 1..m {
            let c = mutual_coherence(spectra.column(i).as_slice(), spectra.column(j).as_slice())?;
            max = max.max(c);
            sum += c;
            pairs += 1;
        }
    }
    Ok((max, if pairs == 0 { 0.0 } else { sum / pairs as f64 }))
}

/// Draws `M` smooth nonnegative spectra, retrying whole libraries until the
/// largest pairwise coherence is at most the configured target.
pub fn generate_endmember_spectra(config: &SynthConfig) -> Result<SpectraLibrary> {
    config.validate()?;
    let (l, m) = (config.band_count, config.endmember_count);
    let mut rng = stream_rng(config.seed, STREAM_SPECTRA);
    let mut best: Option<SpectraLibrary> = None;
    for attempt in 1..=MAX_LIBRARY_ATTEMPTS {
        let cols: Vec<Vec<f64>> = (0..m).map(|_| draw_spectrum(l, &mut rng)).collect();
        let spectra = DMatrix::from_fn(l, m, |i, j| cols[j][i]);
        let (max_coherence, mean_coherence) = coherence_stats(&spectra)?;
        let lib = SpectraLibrary {
            spectra,
            max_coherence,
            mean_coherence,
            attempts: attempt,
            target_met: max_coherence <= config.target_max_coherence,
        };
        if lib.target_met {
            return Ok(lib);
        }
        if best.as_ref().is_none_or(|b| lib.max_coherence < b.max_coherence) {
            best = Some(lib);
        }
    }
    let mut lib = best.expect("at least one attempt");
    lib.attempts = MAX_LIBRARY_ATTEMPTS;
    Ok(lib)
}

/// `m x n_mixed` matrix whose columns are i.i.d. uniform on the probability
/// simplex (Dirichlet with unit parameters, via normalized exponentials).
pub fn generate_abundances(m: usize, n_mixed: usize, seed: u64) -> Result<DMatrix<f64>> {
    let mut rng = stream_rng(seed, STREAM_ABUNDANCES);
    draw_abundances(m, n_mixed, &mut rng)
}

fn draw_abundances(m: usize, n_mixed: usize, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    if m == 0 {
        return Err(UnmixError::InvalidParameter("need at least one endmember".into()));
    }
    let mut a = DMatrix::zeros(m, n_mixed);
    for mut col in a.column_iter_mut() {
        if m == 1 {
            col[0] = 1.0;
            continue;
        }
        for v in col.iter_mut() {
            let e: f64 = Exp1.sample(rng);
            *v = e;
        }
        let total = col.sum();
        col /= total;
    }
    Ok(a)
}

/// Builds `S = R A + E`.
///
/// `A` holds an identity block at the pure-pixel columns and Dirichlet
/// columns elsewhere. The noise variance is
/// `|R A|_F^2 / (L N 10^(snr_db / 10))`.
pub fn synthesize_scene(config: &SynthConfig) -> Result<(SpectralScene, SceneGroundTruth)> {
    config.validate()?;
    let library = generate_endmember_spectra(config)?;
    synthesize_with_spectra(config, library.spectra)
}

/// As [`synthesize_scene`] with a caller-provided `L x M` library (for
/// example spectra loaded from a file).
pub fn synthesize_with_spectra(config: &SynthConfig, spectra: DMatrix<f64>) -> Result<(SpectralScene, SceneGroundTruth)> {
    let (l, m) = spectra.shape();
    let n = config.pixel_count;
    let cfg = SynthConfig {
        band_count: l,
        endmember_count: m,
        ..*config
    };
    cfg.validate()?;
    if spectra.iter().any(|v| !v.is_finite()) {
        return Err(UnmixError::InvalidInput("endmember spectra contain non-finite values".into()));
    }

    let pure: Vec<usize> = match config.placement {
        PurePixelPlacement::FirstM => (0..m).collect(),
        PurePixelPlacement::Random => {
            let mut rng = stream_rng(config.seed, STREAM_PLACEMENT);
            sample(&mut rng, n, m).into_vec()
        }
    };
    let mixed = generate_abundances(m, n - m, config.seed)?;
    let mut abundances = DMatrix::zeros(m, n);
    let mut next_mixed = 0;
    for j in 0..n {
        if let Some(k) = pure.iter().position(|&p| p == j) {
            abundances[(k, j)] = 1.0;
        } else {
            abundances.set_column(j, &mixed.column(next_mixed));
            next_mixed += 1;
        }
    }

    let clean = &spectra * &abundances;
    let (noisy, sigma) = if config.snr_db.is_infinite() && config.snr_db > 0.0 {
        (clean.clone(), 0.0)
    } else {
        let variance = clean.norm_squared() / ((l * n) as f64 * 10f64.powf(config.snr_db / 10.0));
        let sigma = variance.sqrt();
        let mut rng = stream_rng(config.seed, STREAM_NOISE);
        let noise = DMatrix::from_fn(l, n, |_, _| {
            let g: f64 = StandardNormal.sample(&mut rng);
            sigma * g
        });
        (&clean + noise, sigma)
    };
    let truth = SceneGroundTruth {
        endmember_spectra: spectra,
        true_abundances: abundances,
        endmember_pixel_indices: pure,
        noise_sigma: sigma,
        clean_scene: clean,
    };
    Ok((SpectralScene::new(noisy)?, truth))
}

/// Realized `10 log10(|S_clean|^2 / |S - S_clean|^2)`.
pub fn realized_snr_db(scene: &SpectralScene, truth: &SceneGroundTruth) -> f64 {
    let noise = scene.data() - &truth.clean_scene;
    10.0 * (truth.clean_scene.norm_squared() / noise.norm_squared()).log10()
}

/// Error statistics of an estimate against a reference of the same shape.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct QualityMetrics {
    /// `|X_hat - X|_F^2 / N^2` with `N` the column count (no square root).
    pub rmse: f64,
    /// `sqrt(|X_hat - X|_F^2 / (rows * cols))`.
    pub rmse_conventional: f64,
    /// Largest column-wise spectral angle, radians.
    pub max_spectral_angle_rad: f64,
    /// Mean column-wise spectral angle, radians.
    pub avg_spectral_angle_rad: f64,
}

/// Angle between two nonzero vectors, `acos` of their mutual coherence.
pub fn spectral_angle(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(mutual_coherence(a, b)?.clamp(-1.0, 1.0).acos())
}

/// `|X_hat - X|_F^2 / N^2`.
pub fn abundance_rmse(x_hat: &DMatrix<f64>, x_true: &DMatrix<f64>) -> Result<f64> {
    ensure_dims(x_hat.shape() == x_true.shape(), || {
        format!("estimate {:?} vs reference {:?}", x_hat.shape(), x_true.shape())
    })?;
    let n = x_true.ncols() as f64;
    Ok((x_hat - x_true).norm_squared() / (n * n))
}

/// RMSE plus column-wise spectral angles between `x_hat` and `x_true`.
pub fn compute_metrics(x_hat: &DMatrix<f64>, x_true: &DMatrix<f64>) -> Result<QualityMetrics> {
    let rmse = abundance_rmse(x_hat, x_true)?;
    let rmse_conventional = ((x_hat - x_true).norm_squared() / x_true.len() as f64).sqrt();
    let angles = x_hat
        .column_iter()
        .zip(x_true.column_iter())
        .map(|(a, b)| spectral_angle(a.as_slice(), b.as_slice()))
        .collect::<Result<Vec<_>>>()?;
    Ok(QualityMetrics {
        rmse,
        rmse_conventional,
        max_spectral_angle_rad: angles.iter().copied().fold(0.0, f64::max),
        avg_spectral_angle_rad: angles.iter().sum::<f64>() / angles.len() as f64,
    })
}

/// For each reference spectrum, the smallest angle to any estimated spectrum.
pub fn best_match_angles(estimated: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<Vec<f64>> {
    ensure_dims(estimated.nrows() == reference.nrows(), || "spectra have different band counts".into())?;
    if estimated.ncols() == 0 {
        return Err(UnmixError::InvalidInput("no estimated spectra to match".into()));
    }
    reference
        .column_iter()
        .map(|r| {
            estimated
                .column_iter()
                .map(|e| spectral_angle(e.as_slice(), r.as_slice()))
                .try_fold(f64::INFINITY, |best, a| a.map(|a| best.min(a)))
        })
        .collect()
}
