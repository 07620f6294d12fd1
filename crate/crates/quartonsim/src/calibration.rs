//! Resonator response, synthetic flux maps, and flux-axis calibration.
//!
//! Two kinds of synthetic scan are supported. A [`BiasScan`] sweeps probe
//! frequency against a single bias current and is calibrated from the
//! per-row dip trace. A [`FluxMap`] probes the readout resonator at one
//! fixed frequency over a rectangular grid of local and global coil
//! currents; [`calibrate`] recovers the current-to-flux rows for all three
//! loop fluxes from it in three stages: sharp fast features locate the
//! ground-loop zero lines, complex-reflection symmetry along lines parallel
//! to them locates the quarton-flux mirror lines, and Gaussian features
//! along constant-quarton-flux lines locate the SQUID half-quantum lines.
//! Each stage reduces to detecting points that fall on a family of equally
//! spaced parallel lines, whose spacing and placement give one flux row's
//! period and phase.

use nalgebra::{Complex, DMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::circuit::{assemble_reduced, BiasLineModel, CircuitSpec};
use crate::eigen::{solve_lowest, EigenOptions};
use crate::hamiltonian::{build_hamiltonian, BasisConfig};
use crate::spectra::{label_states, LabelOptions};
use crate::{Error, Result};

/// Complex transmission of a notch-type readout resonator:
/// `S21(f) = 1 - (2Q/Q_c) / (1 + 2iQ (f-f0)/f0)`.
///
/// On resonance this gives exactly `1 - 2Q/Q_c`; far off resonance the
/// transmission returns to unity.
pub fn s21_notch(f_ghz: f64, f0_ghz: f64, q_total: f64, q_coupling: f64) -> Complex<f64> {
    let den = Complex::new(1.0, 2.0 * q_total * (f_ghz - f0_ghz) / f0_ghz);
    Complex::new(1.0, 0.0) - Complex::new(2.0 * q_total / q_coupling, 0.0) / den
}

/// Depth of the magnitude dip `1 - |S21(f0)|` for a notch resonator. Equals
/// one at critical coupling (`2Q = Q_c`) and shrinks in both the under- and
/// over-coupled limits.
pub fn notch_contrast(q_total: f64, q_coupling: f64) -> f64 {
    1.0 - (1.0 - 2.0 * q_total / q_coupling).abs()
}

/// Dressed resonator frequency: the resonator-like branch of the two-level
/// avoided crossing between the qubit at `f_q` and the bare resonator at
/// `f_r` with coupling `g` (all GHz).
pub fn dressed_resonator_ghz(f_q_ghz: f64, f_r_ghz: f64, g_ghz: f64) -> f64 {
    let mean = 0.5 * (f_q_ghz + f_r_ghz);
    let half = 0.5 * (f_q_ghz - f_r_ghz);
    let split = (half * half + g_ghz * g_ghz).sqrt();
    // Pick the branch adiabatically connected to the bare resonator.
    if f_r_ghz >= f_q_ghz {
        mean + split
    } else {
        mean - split
    }
}

/// A rectangular scan of complex transmission over (bias current, probe
/// frequency).
#[derive(Debug, Clone, PartialEq)]
pub struct BiasScan {
    pub current_ma: Vec<f64>,
    pub freq_ghz: Vec<f64>,
    /// Row-major `n_currents × n_freqs`.
    pub data: DMatrix<Complex<f64>>,
}

impl BiasScan {
    pub fn n_currents(&self) -> usize {
        self.current_ma.len()
    }

    pub fn n_freqs(&self) -> usize {
        self.freq_ghz.len()
    }

    /// Write as CSV: comment header with the frequency axis, then one row
    /// per current as `current, re0, im0, re1, im1, ...`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        write!(w, "# freq_ghz:")?;
        for f in &self.freq_ghz {
            write!(w, " {f:.9}")?;
        }
        writeln!(w)?;
        writeln!(w, "# columns: current_ma, then re/im pairs per frequency")?;
        for (i, cur) in self.current_ma.iter().enumerate() {
            write!(w, "{cur:.9}")?;
            for j in 0..self.n_freqs() {
                let z = self.data[(i, j)];
                write!(w, ",{:.9e},{:.9e}", z.re, z.im)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Read the CSV format produced by [`BiasScan::write_csv`].
    pub fn read_csv(path: &Path) -> Result<BiasScan> {
        let r = BufReader::new(std::fs::File::open(path)?);
        let mut freq_ghz: Vec<f64> = Vec::new();
        let mut current_ma: Vec<f64> = Vec::new();
        let mut rows: Vec<Vec<Complex<f64>>> = Vec::new();
        for line in r.lines() {
            let line = line?;
            if let Some(rest) = line.strip_prefix("# freq_ghz:") {
                freq_ghz = rest
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Config(format!("bad frequency axis: {e}")))?;
                continue;
            }
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let mut toks = line.split(',');
            let cur: f64 = toks
                .next()
                .ok_or_else(|| Error::Config("empty row".into()))?
                .parse()
                .map_err(|e| Error::Config(format!("bad current: {e}")))?;
            let vals: Vec<f64> = toks
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("bad sample: {e}")))?;
            if vals.len() != 2 * freq_ghz.len() {
                return Err(Error::Config(format!(
                    "row has {} samples for {} frequencies",
                    vals.len() / 2,
                    freq_ghz.len()
                )));
            }
            current_ma.push(cur);
            rows.push(vals.chunks(2).map(|p| Complex::new(p[0], p[1])).collect());
        }
        if current_ma.is_empty() {
            return Err(Error::Config("empty flux map".into()));
        }
        let data = DMatrix::from_fn(current_ma.len(), freq_ghz.len(), |i, j| rows[i][j]);
        Ok(BiasScan { current_ma, freq_ghz, data })
    }

    /// Write a bit-exact little-endian binary: magic, dimensions, current
    /// axis, frequency axis, then interleaved re/im data row-major.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(b"FLXMAP01")?;
        w.write_all(&(self.n_currents() as u64).to_le_bytes())?;
        w.write_all(&(self.n_freqs() as u64).to_le_bytes())?;
        for v in self.current_ma.iter().chain(&self.freq_ghz) {
            w.write_all(&v.to_le_bytes())?;
        }
        for i in 0..self.n_currents() {
            for j in 0..self.n_freqs() {
                let z = self.data[(i, j)];
                w.write_all(&z.re.to_le_bytes())?;
                w.write_all(&z.im.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Read the binary format produced by [`BiasScan::write_binary`].
    pub fn read_binary(path: &Path) -> Result<BiasScan> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != b"FLXMAP01" {
            return Err(Error::Config("not a flux-map binary".into()));
        }
        let mut u = [0u8; 8];
        r.read_exact(&mut u)?;
        let n_i = u64::from_le_bytes(u) as usize;
        r.read_exact(&mut u)?;
        let n_f = u64::from_le_bytes(u) as usize;
        if n_i == 0 || n_f == 0 || n_i.saturating_mul(n_f) > 1 << 28 {
            return Err(Error::Config("implausible flux-map dimensions".into()));
        }
        let mut next = || -> Result<f64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        };
        let current_ma: Vec<f64> = (0..n_i).map(|_| next()).collect::<Result<_>>()?;
        let freq_ghz: Vec<f64> = (0..n_f).map(|_| next()).collect::<Result<_>>()?;
        let mut data = DMatrix::from_element(n_i, n_f, Complex::new(0.0, 0.0));
        for i in 0..n_i {
            for j in 0..n_f {
                let re = next()?;
                let im = next()?;
                data[(i, j)] = Complex::new(re, im);
            }
        }
        Ok(BiasScan { current_ma, freq_ghz, data })
    }
}

/// Synthetic flux-map generation parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasScanConfig {
    pub i_start_ma: f64,
    pub i_stop_ma: f64,
    pub n_currents: usize,
    pub f_start_ghz: f64,
    pub f_stop_ghz: f64,
    pub n_freqs: usize,
    /// Amplitude signal-to-noise ratio at the resonance contrast.
    pub snr: f64,
    pub seed: u64,
}

/// Simulate the readout-B flux map of a device: for each bias current the
/// reduced two-mode model supplies the B transition, the resonator is
/// dressed by the avoided crossing, and a noisy notch trace is synthesized
/// over the frequency axis.
pub fn simulate_bias_scan(spec: &CircuitSpec, cfg: &BiasScanConfig) -> Result<BiasScan> {
    if cfg.n_currents < 2 || cfg.n_freqs < 8 {
        return Err(Error::Config("flux map grid too small".into()));
    }
    if !(cfg.snr > 0.0) {
        return Err(Error::Config("snr must be positive".into()));
    }
    let currents: Vec<f64> = (0..cfg.n_currents)
        .map(|k| {
            cfg.i_start_ma
                + (cfg.i_stop_ma - cfg.i_start_ma) * k as f64 / (cfg.n_currents - 1) as f64
        })
        .collect();
    let freqs: Vec<f64> = (0..cfg.n_freqs)
        .map(|k| {
            cfg.f_start_ghz
                + (cfg.f_stop_ghz - cfg.f_start_ghz) * k as f64 / (cfg.n_freqs - 1) as f64
        })
        .collect();

    let ro = &spec.readout_b;
    let q_total = 1.0 / (1.0 / ro.q_internal + 1.0 / ro.q_coupling);
    let sigma = notch_contrast(q_total, ro.q_coupling).max(1e-3) / cfg.snr;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data = DMatrix::from_element(cfg.n_currents, cfg.n_freqs, Complex::new(0.0, 0.0));

    let basis = BasisConfig::oscillator(&[13, 13]);
    let eopts = EigenOptions::lowest(6);
    // A permissive label threshold: near an a-b degeneracy the states
    // hybridize and the map should follow whichever branch carries the
    // larger B weight rather than fail.
    let lopts = LabelOptions { threshold: 0.2, max_na: 2, max_nb: 2, ..Default::default() };
    for (i, &i_bias) in currents.iter().enumerate() {
        let flux = spec.bias_line.fluxes_at_bias(i_bias);
        let ac = assemble_reduced(spec, &flux)?;
        let built = build_hamiltonian(&ac, &basis)?;
        let sol = solve_lowest(&built.h, &eopts)?;
        let labeled = label_states(&built, &sol, &lopts)?;
        let f_b = labeled.transition(0, 1).ok_or_else(|| {
            Error::Convergence(format!("B transition unresolved at {i_bias:.4} mA"))
        })?;
        let f_dressed = dressed_resonator_ghz(f_b, ro.f0_ghz, ro.g_mhz * 1e-3);
        for (j, &f) in freqs.iter().enumerate() {
            let clean = s21_notch(f, f_dressed, q_total, ro.q_coupling);
            let (re, im): (f64, f64) =
                (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
            data[(i, j)] = clean + Complex::new(sigma * re, sigma * im);
        }
    }
    Ok(BiasScan { current_ma: currents, freq_ghz: freqs, data })
}

/// Per-row resonance-dip positions: the |S21| minimum refined by a
/// three-point parabola, giving sub-bin frequency resolution.
pub fn extract_dip_trace(map: &BiasScan) -> Vec<f64> {
    let nf = map.n_freqs();
    let mut out = Vec::with_capacity(map.n_currents());
    for i in 0..map.n_currents() {
        let mags: Vec<f64> = (0..nf).map(|j| map.data[(i, j)].norm()).collect();
        let jmin = mags
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(j, _)| j)
            .unwrap_or(0);
        let mut f = map.freq_ghz[jmin];
        if jmin > 0 && jmin + 1 < nf {
            let (ym, y0, yp) = (mags[jmin - 1], mags[jmin], mags[jmin + 1]);
            let den = ym - 2.0 * y0 + yp;
            if den.abs() > 1e-30 {
                let shift = 0.5 * (ym - yp) / den;
                let df = map.freq_ghz[1] - map.freq_ghz[0];
                f += shift.clamp(-0.5, 0.5) * df;
            }
        }
        out.push(f);
    }
    out
}

/// A detected reflection-symmetry center of a 1D trace.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SymmetryPoint {
    /// Sub-sample center position in index units.
    pub index: f64,
    /// Center position in current units.
    pub i_ma: f64,
    /// Mirror-correlation score in [-1, 1].
    pub score: f64,
    /// Mean trace value over the window (distinguishes crest from trough
    /// lobes far more robustly than the single center sample).
    pub value: f64,
}

/// Find locally reflection-symmetric points of `trace`: positions where the
/// mirrored window correlates with itself above `threshold`. Windows with
/// negligible variance are skipped (flat stretches are trivially symmetric),
/// and non-maximum suppression keeps one candidate per window.
pub fn find_mirror_centers(
    trace: &[f64],
    currents: &[f64],
    window: usize,
    threshold: f64,
) -> Vec<SymmetryPoint> {
    let n = trace.len();
    if n < 2 * window + 1 || window < 3 {
        return Vec::new();
    }
    // Variance floor from the noise level: flat stretches of pure noise are
    // trivially "symmetric" and must not count. The noise standard
    // deviation is estimated robustly from successive differences
    // (MAD · 1.4826 / √2), and a window must carry variance well above it.
    let mut diffs: Vec<f64> = trace.windows(2).map(|p| (p[1] - p[0]).abs()).collect();
    diffs.sort_by(f64::total_cmp);
    let sigma_noise = 1.4826 * diffs[diffs.len() / 2] / std::f64::consts::SQRT_2;
    let floor = 9.0 * sigma_noise * sigma_noise;

    let score_at = |c: usize| -> Option<f64> {
        let left: Vec<f64> = (1..=window).map(|k| trace[c - k]).collect();
        let right: Vec<f64> = (1..=window).map(|k| trace[c + k]).collect();
        let ml = left.iter().sum::<f64>() / window as f64;
        let mr = right.iter().sum::<f64>() / window as f64;
        let mut num = 0.0;
        let mut dl = 0.0;
        let mut dr = 0.0;
        for k in 0..window {
            num += (left[k] - ml) * (right[k] - mr);
            dl += (left[k] - ml).powi(2);
            dr += (right[k] - mr).powi(2);
        }
        let local_var = (dl + dr) / (2.0 * window as f64);
        if local_var < floor || dl <= 0.0 || dr <= 0.0 {
            return None;
        }
        Some(num / (dl * dr).sqrt())
    };

    let scores: Vec<Option<f64>> = (0..n)
        .map(|c| if c >= window && c + window < n { score_at(c) } else { None })
        .collect();
    let mut out = Vec::new();
    for c in window..n - window {
        let Some(s) = scores[c] else { continue };
        if s < threshold {
            continue;
        }
        // Non-maximum suppression over ±window.
        let lo = c.saturating_sub(window);
        let hi = (c + window + 1).min(n);
        let is_peak =
            (lo..hi).all(|k| k == c || scores[k].is_none_or(|v| v < s || (v == s && k > c)));
        if !is_peak {
            continue;
        }
        // Sub-sample refinement by parabola through the score triplet.
        let mut idx = c as f64;
        if let (Some(sm), Some(sp)) = (scores[c - 1], scores[c + 1]) {
            let den = sm - 2.0 * s + sp;
            if den.abs() > 1e-30 {
                idx += (0.5 * (sm - sp) / den).clamp(-0.5, 0.5);
            }
        }
        let i_ma = interp_axis(currents, idx);
        let value =
            trace[c - window..=c + window].iter().sum::<f64>() / (2 * window + 1) as f64;
        out.push(SymmetryPoint { index: idx, i_ma, score: s, value });
    }
    out
}

fn interp_axis(axis: &[f64], idx: f64) -> f64 {
    let lo = (idx.floor() as usize).min(axis.len() - 1);
    let hi = (lo + 1).min(axis.len() - 1);
    let t = idx - lo as f64;
    axis[lo] * (1.0 - t) + axis[hi] * t
}

/// Robust straight-line fit `y ≈ slope·x + intercept` by iteratively
/// reweighted least squares with Huber weights (delta = 1.345 σ, σ from the
/// median absolute deviation).
pub fn fit_line_robust(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Config("line fit needs at least two points".into()));
    }
    let n = x.len();
    let mut w = vec![1.0; n];
    let mut slope = 0.0;
    let mut intercept = 0.0;
    for iter in 0..50 {
        let sw: f64 = w.iter().sum();
        let sx: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
        let sy: f64 = y.iter().zip(&w).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().zip(&w).map(|(a, b)| a * a * b).sum();
        let sxy: f64 = x.iter().zip(y).zip(&w).map(|((a, c), b)| a * c * b).sum();
        let det = sw * sxx - sx * sx;
        if det.abs() < 1e-30 {
            return Err(Error::Solver("degenerate abscissas in line fit".into()));
        }
        let new_slope = (sw * sxy - sx * sy) / det;
        let new_intercept = (sxx * sy - sx * sxy) / det;
        let done = iter > 0
            && (new_slope - slope).abs() <= 1e-12 * slope.abs().max(1.0)
            && (new_intercept - intercept).abs() <= 1e-12 * intercept.abs().max(1.0);
        slope = new_slope;
        intercept = new_intercept;
        if done {
            break;
        }
        let mut resid: Vec<f64> =
            x.iter().zip(y).map(|(a, c)| (c - slope * a - intercept).abs()).collect();
        let mut sorted = resid.clone();
        sorted.sort_by(f64::total_cmp);
        let mad = sorted[sorted.len() / 2].max(1e-15);
        let sigma = 1.4826 * mad;
        let delta = 1.345 * sigma;
        for (wk, r) in w.iter_mut().zip(resid.drain(..)) {
            *wk = if r <= delta { 1.0 } else { delta / r };
        }
    }
    Ok((slope, intercept))
}

/// Gaussian-plus-offset fit result.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GaussianFit {
    pub amplitude: f64,
    pub center: f64,
    pub sigma: f64,
    pub offset: f64,
    pub rms_residual: f64,
}

/// Fit `y ≈ offset + amplitude · exp(-(x-center)²/(2σ²))` by
/// Levenberg-Marquardt with analytic Jacobian.
pub fn fit_gaussian_feature(x: &[f64], y: &[f64]) -> Result<GaussianFit> {
    if x.len() != y.len() || x.len() < 5 {
        return Err(Error::Config("gaussian fit needs at least five points".into()));
    }
    let n = x.len();
    // Moment-based initial guess.
    let y_min = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let y_max = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let median = {
        let mut s = y.to_vec();
        s.sort_by(f64::total_cmp);
        s[n / 2]
    };
    // Peak polarity: whichever extreme is farther from the median.
    let (amp0, off0) = if y_max - median >= median - y_min {
        (y_max - median, median)
    } else {
        (y_min - median, median)
    };
    let peak_idx = if amp0 >= 0.0 {
        y.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0
    } else {
        y.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0
    };
    let span = x[n - 1] - x[0];
    let mut p = [amp0, x[peak_idx], (span / 8.0).abs().max(1e-12), off0];

    let model = |p: &[f64; 4], xi: f64| -> (f64, [f64; 4]) {
        let z = (xi - p[1]) / p[2];
        let e = (-0.5 * z * z).exp();
        let f = p[3] + p[0] * e;
        let d_amp = e;
        let d_cen = p[0] * e * z / p[2];
        let d_sig = p[0] * e * z * z / p[2];
        (f, [d_amp, d_cen, d_sig, 1.0])
    };

    let chi2 = |p: &[f64; 4]| -> f64 {
        x.iter().zip(y).map(|(&xi, &yi)| (yi - model(p, xi).0).powi(2)).sum()
    };

    let mut lambda = 1e-3;
    let mut cost = chi2(&p);
    for _ in 0..200 {
        // Normal equations with damping.
        let mut jtj = nalgebra::Matrix4::<f64>::zeros();
        let mut jtr = nalgebra::Vector4::<f64>::zeros();
        for (&xi, &yi) in x.iter().zip(y) {
            let (f, grad) = model(&p, xi);
            let r = yi - f;
            for a in 0..4 {
                jtr[a] += grad[a] * r;
                for b in 0..4 {
                    jtj[(a, b)] += grad[a] * grad[b];
                }
            }
        }
        for a in 0..4 {
            jtj[(a, a)] *= 1.0 + lambda;
        }
        let Some(step) = jtj.lu().solve(&jtr) else {
            lambda *= 10.0;
            continue;
        };
        let cand = [p[0] + step[0], p[1] + step[1], (p[2] + step[2]).abs().max(1e-15), p[3] + step[3]];
        let c_cand = chi2(&cand);
        if c_cand < cost {
            let rel = (cost - c_cand) / cost.max(1e-300);
            p = cand;
            cost = c_cand;
            lambda = (lambda * 0.3).max(1e-12);
            if rel < 1e-12 {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
    }
    Ok(GaussianFit {
        amplitude: p[0],
        center: p[1],
        sigma: p[2],
        offset: p[3],
        rms_residual: (cost / n as f64).sqrt(),
    })
}

/// Recovered flux-axis calibration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasScanCalibration {
    /// Bias current per 2π of SQUID flux, mA.
    pub period_ma: f64,
    /// Bias current at which the SQUID flux crosses zero (a crest lobe), mA.
    pub zero_offset_ma: f64,
    /// All detected symmetry centers, in current units.
    pub centers_ma: Vec<f64>,
    pub scores: Vec<f64>,
    /// RMS residual of the lobe-index line fit, in current units.
    pub rms_residual_ma: f64,
}

/// Calibration controls.
#[derive(Debug, Clone)]
pub struct BiasScanOptions {
    pub window: usize,
    pub score_threshold: f64,
    /// Whether the qubit sits above the readout resonator at zero SQUID
    /// flux (its frequency maximum). When true — the common arrangement —
    /// zero-flux lobes repel the dressed resonator downward, so crests are
    /// the centers with the lower windowed dip value.
    pub qubit_above_resonator: bool,
}

impl Default for BiasScanOptions {
    fn default() -> Self {
        BiasScanOptions { window: 25, score_threshold: 0.75, qubit_above_resonator: true }
    }
}

/// Three-stage flux-map calibration: dip trace, symmetry centers, robust
/// period/offset line fit. Crest lobes (flux 0 mod 2π, maximum transition)
/// are told apart from trough lobes (π mod 2π) by the trace value at the
/// center; the Gaussian refinement sharpens each center before the fit.
pub fn calibrate_bias_scan(map: &BiasScan, opts: &BiasScanOptions) -> Result<BiasScanCalibration> {
    let trace = extract_dip_trace(map);
    let centers = find_mirror_centers(&trace, &map.current_ma, opts.window, opts.score_threshold);
    if centers.len() < 2 {
        return Err(Error::Convergence(format!(
            "found {} symmetry centers; need at least 2",
            centers.len()
        )));
    }
    // Classify lobes by trace value against the midpoint of the extremes.
    let vmin = centers.iter().map(|c| c.value).fold(f64::INFINITY, f64::min);
    let vmax = centers.iter().map(|c| c.value).fold(f64::NEG_INFINITY, f64::max);
    let vmid = 0.5 * (vmin + vmax);

    // Refine each center with a Gaussian fit on a half window around it.
    // The fit is only trusted as a small nudge: if it moves the center by
    // more than two grid steps (for instance by latching onto a sharp
    // crossing feature nearby), the mirror-score center is kept.
    let mut refined: Vec<(f64, bool, f64)> = Vec::new(); // (i_ma, crest?, score)
    let w2 = (opts.window / 2).max(4);
    let step = (map.current_ma[map.current_ma.len() - 1] - map.current_ma[0]).abs()
        / (map.current_ma.len() - 1) as f64;
    for c in &centers {
        let ci = c.index.round() as usize;
        let lo = ci.saturating_sub(w2);
        let hi = (ci + w2 + 1).min(trace.len());
        let xs = &map.current_ma[lo..hi];
        let ys = &trace[lo..hi];
        let center = match fit_gaussian_feature(xs, ys) {
            Ok(g) if (g.center - c.i_ma).abs() <= 2.0 * step => g.center,
            _ => c.i_ma,
        };
        let crest = if opts.qubit_above_resonator { c.value < vmid } else { c.value >= vmid };
        refined.push((center, crest, c.score));
    }
    refined.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Assign integer lobe indices: crests at even, troughs at odd
    // half-period positions. Estimate the half-period from consecutive
    // spacings, then anchor indices on the first center.
    let spacings: Vec<f64> = refined.windows(2).map(|p| p[1].0 - p[0].0).collect();
    let mut sp = spacings.clone();
    sp.sort_by(f64::total_cmp);
    let half_period = sp[sp.len() / 2];
    if !(half_period > 0.0) {
        return Err(Error::Solver("symmetry centers are not separated".into()));
    }
    let base = refined[0].0;
    let base_parity = if refined[0].1 { 0.0 } else { 1.0 };
    let mut xs: Vec<f64> = Vec::new(); // half-period index
    let mut ys: Vec<f64> = Vec::new(); // current
    for (c_ma, crest, _) in &refined {
        let k = ((c_ma - base) / half_period).round();
        // Parity consistency: crests must land on even indices.
        let idx = k + base_parity;
        let even = (idx.rem_euclid(2.0)) < 0.5;
        if even != *crest {
            continue; // mis-classified or spurious center
        }
        xs.push(idx);
        ys.push(*c_ma);
    }
    if xs.len() < 2 {
        return Err(Error::Convergence("not enough parity-consistent centers".into()));
    }
    let (slope, intercept) = fit_line_robust(&xs, &ys)?;
    let period_ma = 2.0 * slope;
    // Zero offset: the even-index line evaluated at the crest nearest the
    // map center.
    let mid = 0.5 * (map.current_ma[0] + map.current_ma[map.current_ma.len() - 1]);
    let k_near = ((mid - intercept) / period_ma).round();
    let zero_offset_ma = intercept + k_near * period_ma;
    let mut rms = 0.0;
    for (xk, yk) in xs.iter().zip(&ys) {
        rms += (yk - slope * xk - intercept).powi(2);
    }
    rms = (rms / xs.len() as f64).sqrt();
    Ok(BiasScanCalibration {
        period_ma,
        zero_offset_ma,
        centers_ma: refined.iter().map(|r| r.0).collect(),
        scores: refined.iter().map(|r| r.2).collect(),
        rms_residual_ma: rms,
    })
}

// ---------------------------------------------------------------------------
// Two-current flux maps and the three-stage flux-axis calibration.
// ---------------------------------------------------------------------------

/// A rectangular scan of complex transmission at one fixed probe frequency
/// over (local coil current, global coil current).
#[derive(Debug, Clone, PartialEq)]
pub struct FluxMap {
    pub i_l_ma: Vec<f64>,
    pub i_g_ma: Vec<f64>,
    pub probe_f_ghz: f64,
    /// Row-major `n_l × n_g`: `data[(il, ig)]`.
    pub data: DMatrix<Complex<f64>>,
    /// Grid indices where the circuit solve failed; S21 is set to unity
    /// there.
    pub failures: Vec<(usize, usize)>,
}

impl FluxMap {
    pub fn n_l(&self) -> usize {
        self.i_l_ma.len()
    }

    pub fn n_g(&self) -> usize {
        self.i_g_ma.len()
    }

    /// Superimpose complex Gaussian noise of the given per-component
    /// standard deviation.
    pub fn add_noise(&mut self, sigma: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in self.data.iter_mut() {
            let (re, im): (f64, f64) =
                (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
            *v += Complex::new(sigma * re, sigma * im);
        }
    }

    /// Long-format CSV: one `i_l,i_g,re,im` line per grid point, probe
    /// frequency in a header comment.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "# probe_f_ghz: {:.9e}", self.probe_f_ghz)?;
        writeln!(w, "# columns: i_l_ma,i_g_ma,re_s21,im_s21")?;
        for (il, &x) in self.i_l_ma.iter().enumerate() {
            for (ig, &y) in self.i_g_ma.iter().enumerate() {
                let v = self.data[(il, ig)];
                writeln!(w, "{x:.9e},{y:.9e},{:.9e},{:.9e}", v.re, v.im)?;
            }
        }
        Ok(())
    }

    /// Read the CSV format produced by [`FluxMap::write_csv`]. The grid is
    /// reconstructed from the coordinate columns and must be rectangular.
    pub fn read_csv(path: &Path) -> Result<FluxMap> {
        let r = BufReader::new(std::fs::File::open(path)?);
        let mut probe = None;
        let mut rows: Vec<(f64, f64, Complex<f64>)> = Vec::new();
        for line in r.lines() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            if let Some(rest) = t.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("probe_f_ghz:") {
                    probe = Some(v.trim().parse::<f64>().map_err(|e| {
                        Error::Config(format!("bad probe frequency header: {e}"))
                    })?);
                }
                continue;
            }
            let f: Vec<f64> = t
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("bad flux-map CSV line: {e}")))?;
            if f.len() != 4 {
                return Err(Error::Config(format!(
                    "flux-map CSV line has {} fields, expected 4",
                    f.len()
                )));
            }
            rows.push((f[0], f[1], Complex::new(f[2], f[3])));
        }
        let probe_f_ghz =
            probe.ok_or_else(|| Error::Config("missing probe_f_ghz header".into()))?;
        let mut i_l: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let mut i_g: Vec<f64> = rows.iter().map(|r| r.1).collect();
        for v in [&mut i_l, &mut i_g] {
            v.sort_by(f64::total_cmp);
            v.dedup();
        }
        if i_l.len() * i_g.len() != rows.len() {
            return Err(Error::Config(format!(
                "flux-map CSV is not rectangular: {}×{} grid vs {} rows",
                i_l.len(),
                i_g.len(),
                rows.len()
            )));
        }
        let mut data = DMatrix::from_element(i_l.len(), i_g.len(), Complex::new(1.0, 0.0));
        for (x, y, v) in rows {
            let il = i_l.partition_point(|&a| a < x).min(i_l.len() - 1);
            let ig = i_g.partition_point(|&a| a < y).min(i_g.len() - 1);
            data[(il, ig)] = v;
        }
        Ok(FluxMap { i_l_ma: i_l, i_g_ma: i_g, probe_f_ghz, data, failures: Vec::new() })
    }

    /// Compact binary format, bit-exact across round trips.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(b"FLXMAP02")?;
        w.write_all(&(self.n_l() as u64).to_le_bytes())?;
        w.write_all(&(self.n_g() as u64).to_le_bytes())?;
        w.write_all(&self.probe_f_ghz.to_le_bytes())?;
        for v in self.i_l_ma.iter().chain(self.i_g_ma.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        for il in 0..self.n_l() {
            for ig in 0..self.n_g() {
                let v = self.data[(il, ig)];
                w.write_all(&v.re.to_le_bytes())?;
                w.write_all(&v.im.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Read the binary format produced by [`FluxMap::write_binary`].
    pub fn read_binary(path: &Path) -> Result<FluxMap> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != b"FLXMAP02" {
            return Err(Error::Config("not a flux-map binary file".into()));
        }
        let mut u = [0u8; 8];
        let mut read_u64 = |r: &mut BufReader<std::fs::File>| -> Result<u64> {
            r.read_exact(&mut u)?;
            Ok(u64::from_le_bytes(u))
        };
        let n_l = read_u64(&mut r)? as usize;
        let n_g = read_u64(&mut r)? as usize;
        if n_l == 0 || n_g == 0 || n_l.saturating_mul(n_g) > 1 << 28 {
            return Err(Error::Config(format!("implausible flux-map dims {n_l}×{n_g}")));
        }
        let mut f = [0u8; 8];
        let mut read_f64 = |r: &mut BufReader<std::fs::File>| -> Result<f64> {
            r.read_exact(&mut f)?;
            Ok(f64::from_le_bytes(f))
        };
        let probe_f_ghz = read_f64(&mut r)?;
        let i_l_ma: Vec<f64> =
            (0..n_l).map(|_| read_f64(&mut r)).collect::<Result<_>>()?;
        let i_g_ma: Vec<f64> =
            (0..n_g).map(|_| read_f64(&mut r)).collect::<Result<_>>()?;
        let mut data = DMatrix::from_element(n_l, n_g, Complex::new(0.0, 0.0));
        for il in 0..n_l {
            for ig in 0..n_g {
                let re = read_f64(&mut r)?;
                let im = read_f64(&mut r)?;
                data[(il, ig)] = Complex::new(re, im);
            }
        }
        Ok(FluxMap { i_l_ma, i_g_ma, probe_f_ghz, data, failures: Vec::new() })
    }
}

/// Grid and noise settings for [`simulate_fluxmap`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FluxMapConfig {
    pub i_l_start_ma: f64,
    pub i_l_stop_ma: f64,
    pub n_l: usize,
    pub i_g_start_ma: f64,
    pub i_g_stop_ma: f64,
    pub n_g: usize,
    /// Fixed probe frequency (GHz).
    pub probe_f_ghz: f64,
    /// Amplitude signal-to-noise ratio at the resonance contrast.
    pub snr: f64,
    pub seed: u64,
    /// Oscillator truncation for the reduced two-mode solves.
    pub dims: [usize; 2],
}

/// Simulate a two-current flux map: at every grid point the reduced circuit
/// is diagonalized under `truth`, the readout resonator for transmon A is
/// dressed by the labeled A transition, and the complex transmission at the
/// fixed probe frequency is recorded. Points whose solve or labeling fails
/// are recorded in `failures` and left at unit transmission.
pub fn simulate_fluxmap(
    spec: &CircuitSpec,
    truth: &BiasLineModel,
    cfg: &FluxMapConfig,
) -> Result<FluxMap> {
    if cfg.n_l < 2 || cfg.n_g < 2 {
        return Err(Error::Config("flux-map grid needs at least 2×2 points".into()));
    }
    let lin = |a: f64, b: f64, n: usize, k: usize| a + (b - a) * k as f64 / (n - 1) as f64;
    let i_l: Vec<f64> =
        (0..cfg.n_l).map(|k| lin(cfg.i_l_start_ma, cfg.i_l_stop_ma, cfg.n_l, k)).collect();
    let i_g: Vec<f64> =
        (0..cfg.n_g).map(|k| lin(cfg.i_g_start_ma, cfg.i_g_stop_ma, cfg.n_g, k)).collect();

    let ro = &spec.readout_a;
    let q_total = 1.0 / (1.0 / ro.q_internal + 1.0 / ro.q_coupling);
    let sigma = notch_contrast(q_total, ro.q_coupling).max(1e-3) / cfg.snr;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let basis = BasisConfig::oscillator(&cfg.dims);
    let eopts = EigenOptions::lowest(6);
    let lopts = LabelOptions { threshold: 0.2, max_na: 2, max_nb: 2, ..Default::default() };

    let mut data = DMatrix::from_element(cfg.n_l, cfg.n_g, Complex::new(1.0, 0.0));
    let mut failures = Vec::new();
    for (il, &x) in i_l.iter().enumerate() {
        for (ig, &y) in i_g.iter().enumerate() {
            let flux = truth.fluxes_at(x, y);
            let f_a = assemble_reduced(spec, &flux)
                .and_then(|ac| build_hamiltonian(&ac, &basis))
                .and_then(|built| {
                    let sol = solve_lowest(&built.h, &eopts)?;
                    let labeled = label_states(&built, &sol, &lopts)?;
                    labeled.transition(1, 0).ok_or_else(|| {
                        Error::Convergence(format!("A transition unresolved at ({x:.4},{y:.4})"))
                    })
                });
            let clean = match f_a {
                Ok(f_a) => {
                    let f0 = dressed_resonator_ghz(f_a, ro.f0_ghz, ro.g_mhz * 1e-3);
                    s21_notch(cfg.probe_f_ghz, f0, q_total, ro.q_coupling)
                }
                Err(_) => {
                    failures.push((il, ig));
                    Complex::new(1.0, 0.0)
                }
            };
            let (re, im): (f64, f64) =
                (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
            data[(il, ig)] = clean + Complex::new(sigma * re, sigma * im);
        }
    }
    Ok(FluxMap { i_l_ma: i_l, i_g_ma: i_g, probe_f_ghz: cfg.probe_f_ghz, data, failures })
}

/// Find reflection-symmetric points of a complex trace: positions where the
/// window reflected about them matches itself, scored by the centered
/// normalized dot product between the original and reflected samples.
/// Windows whose variance sits at the noise floor are skipped, and
/// non-maximum suppression keeps one candidate per window.
pub fn find_symmetry_points(
    s21: &[Complex<f64>],
    positions: &[f64],
    window: usize,
    threshold: f64,
) -> Result<Vec<SymmetryPoint>> {
    let n = s21.len();
    if n < 16 {
        return Err(Error::Config(format!("symmetry path too short: {n} < 16 samples")));
    }
    if n != positions.len() {
        return Err(Error::Config("trace and position lengths differ".into()));
    }
    if n < 2 * window + 1 || window < 3 {
        return Ok(Vec::new());
    }
    // Symmetric binomial smoothing (two three-tap passes): mirror centers
    // are preserved exactly, while features only a sample or so wide are
    // broadened enough that a center falling between grid samples still
    // correlates with its own reflection.
    let mut z: Vec<Complex<f64>> = s21.to_vec();
    for _ in 0..2 {
        z = (0..n)
            .map(|i| {
                let a = z[i.saturating_sub(1)];
                let c = z[(i + 1).min(n - 1)];
                0.25 * (a + 2.0 * z[i] + c)
            })
            .collect();
    }

    // Noise scale from successive differences (complex Rayleigh median).
    let mut diffs: Vec<f64> = z.windows(2).map(|p| (p[1] - p[0]).norm()).collect();
    diffs.sort_by(f64::total_cmp);
    let sigma_noise = diffs[diffs.len() / 2] / 1.6651;
    let floor = 9.0 * sigma_noise * sigma_noise;

    // Twofold linear upsampling so that centers halfway between grid
    // samples are scored about an actual candidate point; midpoints of a
    // symmetric pair interpolate symmetrically, so true centers survive.
    let z: Vec<Complex<f64>> = (0..2 * n - 1)
        .map(|j| if j % 2 == 0 { z[j / 2] } else { 0.5 * (z[j / 2] + z[j / 2 + 1]) })
        .collect();
    let n = 2 * n - 1;
    let window = 2 * window;

    let score_at = |c: usize, w: usize| -> Option<f64> {
        let mut mean = Complex::new(0.0, 0.0);
        for k in 1..=w {
            mean += z[c - k] + z[c + k];
        }
        mean /= 2.0 * w as f64;
        let mut num = 0.0;
        let mut dl = 0.0;
        let mut dr = 0.0;
        for k in 1..=w {
            let l = z[c - k] - mean;
            let r = z[c + k] - mean;
            num += (l * r.conj()).re;
            dl += l.norm_sqr();
            dr += r.norm_sqr();
        }
        let local_var = (dl + dr) / (2.0 * w as f64);
        if local_var < floor || dl <= 0.0 || dr <= 0.0 {
            return None;
        }
        Some(num / (dl * dr).sqrt())
    };

    let scores: Vec<Option<f64>> = (0..n)
        .map(|c| if c >= window && c + window < n { score_at(c, window) } else { None })
        .collect();
    let mut out = Vec::new();
    for c in window..n - window {
        let Some(s) = scores[c] else { continue };
        if s < threshold {
            continue;
        }
        // Suppress non-maxima within half the correlation window; distinct
        // centers can sit as close as one window apart.
        let nms = (window / 2).max(1);
        let lo = c.saturating_sub(nms);
        let hi = (c + nms + 1).min(n);
        let is_peak =
            (lo..hi).all(|k| k == c || scores[k].is_none_or(|v| v < s || (v == s && k > c)));
        if !is_peak {
            continue;
        }
        // A genuine mirror stays symmetric when the window doubles; the
        // spurious midpoint between two similar features, or a center
        // dragged by an overlapping asymmetric feature, degrades instead.
        let w2 = (2 * window).min(c).min(n - 1 - c);
        if w2 > window
            && !score_at(c, w2).is_some_and(|s2| s2 >= threshold && s2 >= s - 0.1)
        {
            continue;
        }
        let mut idx = c as f64;
        if let (Some(sm), Some(sp)) = (scores[c - 1], scores[c + 1]) {
            let den = sm - 2.0 * s + sp;
            if den.abs() > 1e-30 {
                idx += (0.5 * (sm - sp) / den).clamp(-0.5, 0.5);
            }
        }
        let value = z[c - window..=c + window].iter().map(|v| v.norm()).sum::<f64>()
            / (2 * window + 1) as f64;
        // Back to the caller's sample coordinates.
        idx *= 0.5;
        out.push(SymmetryPoint { index: idx, i_ma: interp_axis(positions, idx), score: s, value });
    }
    Ok(out)
}

/// A complex trace sampled along a straight line through a [`FluxMap`],
/// parametrized by the global coil current.
#[derive(Debug, Clone)]
pub struct PathTrace {
    pub i_l_ma: Vec<f64>,
    pub i_g_ma: Vec<f64>,
    pub s21: Vec<Complex<f64>>,
}

/// Bilinearly interpolate the map along the line
/// `I_l = i_l_at_g0 + slope · I_g`, sampled every `step_ma` of global
/// current over the part of the line inside the grid.
pub fn extract_path_trace(
    map: &FluxMap,
    i_l_at_g0: f64,
    slope_l_per_g: f64,
    step_ma: f64,
) -> Result<PathTrace> {
    if step_ma <= 0.0 {
        return Err(Error::Config("path step must be positive".into()));
    }
    let (xl0, xl1) = (map.i_l_ma[0], *map.i_l_ma.last().unwrap());
    let (yg0, yg1) = (map.i_g_ma[0], *map.i_g_ma.last().unwrap());
    // Clip the I_g interval so that I_l(t) stays inside the grid.
    let (mut t0, mut t1) = (yg0, yg1);
    if slope_l_per_g.abs() > 1e-12 {
        let ta = (xl0 - i_l_at_g0) / slope_l_per_g;
        let tb = (xl1 - i_l_at_g0) / slope_l_per_g;
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    } else if i_l_at_g0 < xl0 || i_l_at_g0 > xl1 {
        return Err(Error::Config("path lies outside the grid".into()));
    }
    if t1 <= t0 {
        return Err(Error::Config("path lies outside the grid".into()));
    }
    let n = ((t1 - t0) / step_ma).floor() as usize + 1;
    if n < 16 {
        return Err(Error::Config(format!("symmetry path too short: {n} < 16 samples")));
    }
    let mut i_l = Vec::with_capacity(n);
    let mut i_g = Vec::with_capacity(n);
    let mut s21 = Vec::with_capacity(n);
    for k in 0..n {
        let y = t0 + k as f64 * step_ma;
        let x = i_l_at_g0 + slope_l_per_g * y;
        s21.push(bilinear(map, x, y));
        i_l.push(x);
        i_g.push(y);
    }
    Ok(PathTrace { i_l_ma: i_l, i_g_ma: i_g, s21 })
}

fn bilinear(map: &FluxMap, x: f64, y: f64) -> Complex<f64> {
    let frac = |axis: &[f64], v: f64| -> (usize, f64) {
        let j = axis.partition_point(|&a| a <= v).clamp(1, axis.len() - 1);
        let (a, b) = (axis[j - 1], axis[j]);
        (j - 1, ((v - a) / (b - a)).clamp(0.0, 1.0))
    };
    let (i0, tx) = frac(&map.i_l_ma, x);
    let (j0, ty) = frac(&map.i_g_ma, y);
    let d = &map.data;
    d[(i0, j0)] * ((1.0 - tx) * (1.0 - ty))
        + d[(i0 + 1, j0)] * (tx * (1.0 - ty))
        + d[(i0, j0 + 1)] * ((1.0 - tx) * ty)
        + d[(i0 + 1, j0 + 1)] * (tx * ty)
}

/// A family of equally spaced parallel lines `I_l = c_k + m · I_g` fitted
/// through detected feature points.
#[derive(Debug, Clone)]
pub struct LineFamily {
    /// Common slope m (mA of local current per mA of global current).
    pub slope_l_per_g: f64,
    /// Fitted intercepts of the observed family members, sorted.
    pub intercepts_ma: Vec<f64>,
    /// Spacing between adjacent family lines along the local-current axis.
    pub spacing_ma: f64,
    /// RMS residual of the points about their lines (mA).
    pub rms_ma: f64,
    /// The points used, as (I_l, I_g).
    pub points: Vec<(f64, f64)>,
}

/// Phase coherence of the line coordinates `u` against a candidate lattice
/// spacing: `|Σ exp(2πi·u/S)| / n`, equal to 1 when every point sits
/// exactly on the lattice.
fn lattice_coherence(u: &[f64], spacing: f64) -> f64 {
    let mut sum = Complex::new(0.0, 0.0);
    for &v in u {
        let phase = std::f64::consts::TAU * v / spacing;
        sum += Complex::new(phase.cos(), phase.sin());
    }
    sum.norm() / u.len() as f64
}

/// Periodogram of lattice coherence on a linear grid of spatial
/// frequencies 1/S, where the peak width is the constant Rayleigh
/// resolution (four grid samples per lobe). Returns (samples, f_lo, df).
fn spacing_periodogram(u: &[f64], s_min: f64, s_max: f64) -> (Vec<f64>, f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in u {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).max(1e-12);
    let f_lo = 1.0 / s_max;
    let df = 0.25 / span;
    let n = (((1.0 / s_min - f_lo) / df).ceil() as usize).clamp(2, 4000);
    let cs: Vec<f64> = (0..=n).map(|k| lattice_coherence(u, 1.0 / (f_lo + k as f64 * df))).collect();
    (cs, f_lo, df)
}

/// Circular-mean lattice anchor and integer site indices for a spacing.
fn lattice_indices(u: &[f64], spacing: f64) -> (f64, Vec<i64>) {
    let mut sum = Complex::new(0.0, 0.0);
    for &v in u {
        let phase = std::f64::consts::TAU * v / spacing;
        sum += Complex::new(phase.cos(), phase.sin());
    }
    let c0 = sum.arg() / std::f64::consts::TAU * spacing;
    let index = u.iter().map(|&v| ((v - c0) / spacing).round() as i64).collect();
    (c0, index)
}

/// Does a candidate spacing describe a densely occupied lattice? Integer
/// sub-harmonics of the true spacing leave every other site holding only
/// stray points, and an overfit micro-spacing gives every point its own
/// site; both fail this test. The site range is trimmed so a single
/// far-flung stray cannot dilute it.
fn occupancy_ok(u: &[f64], spacing: f64) -> bool {
    let (_, index) = lattice_indices(u, spacing);
    let mut ks = index;
    ks.sort_unstable();
    let trim = (ks.len() / 20).max(1).min((ks.len() - 1) / 2);
    let (k_lo, k_hi) = (ks[trim], ks[ks.len() - 1 - trim]);
    if k_hi <= k_lo {
        return false;
    }
    let sites = (k_hi - k_lo + 1) as f64;
    let inside: Vec<i64> = ks.iter().cloned().filter(|&k| k >= k_lo && k <= k_hi).collect();
    let per_site = (inside.len() as f64 / sites / 3.0).max(1.5);
    let mut substantial = 0usize;
    let mut run = 0usize;
    let mut prev = None;
    for &k in inside.iter().chain(std::iter::once(&i64::MAX)) {
        if prev == Some(k) {
            run += 1;
        } else {
            if run as f64 >= per_site {
                substantial += 1;
            }
            run = 1;
            prev = Some(k);
        }
    }
    substantial as f64 / sites >= 0.55
}

/// Choose the lattice spacing: among periodogram lobes of substantial
/// coherence, the largest spacing whose lattice is densely occupied wins;
/// if none passes, the most coherent lobe is used. Returns (spacing,
/// coherence at it, whether any lobe passed the occupancy test).
fn pick_spacing(u: &[f64], s_min: f64, s_max: f64) -> (f64, f64, bool) {
    let (cs, f_lo, df) = spacing_periodogram(u, s_min, s_max);
    let c_max = cs.iter().cloned().fold(0.0, f64::max);
    // Local maxima of the periodogram, strongest first, capped.
    let mut lobes: Vec<(usize, f64)> = (1..cs.len().saturating_sub(1))
        .filter(|&k| cs[k] >= cs[k - 1] && cs[k] >= cs[k + 1] && cs[k] >= 0.55 * c_max)
        .map(|k| (k, cs[k]))
        .collect();
    lobes.sort_by(|a, b| b.1.total_cmp(&a.1));
    lobes.truncate(12);
    // Smallest frequency (largest spacing) first.
    lobes.sort_by_key(|&(k, _)| k);
    let refine = |k: usize| -> f64 {
        let f0 = f_lo + k as f64 * df;
        let (mut a, mut b) = ((f0 - df).max(0.5 * f_lo), f0 + df);
        for _ in 0..50 {
            let f1 = a + 0.381_966 * (b - a);
            let f2 = b - 0.381_966 * (b - a);
            if lattice_coherence(u, 1.0 / f1) > lattice_coherence(u, 1.0 / f2) {
                b = f2;
            } else {
                a = f1;
            }
        }
        0.5 * (a + b)
    };
    let mut fallback = (s_max, 0.0);
    for &(k, c) in &lobes {
        let f = refine(k);
        let s = 1.0 / f;
        if occupancy_ok(u, s) {
            return (s, lattice_coherence(u, s), true);
        }
        if c > fallback.1 {
            fallback = (s, c);
        }
    }
    (fallback.0, fallback.1, false)
}

/// Fit a family of equally spaced parallel lines through `points`: search
/// slopes in `[slope_lo, slope_hi]` for maximal lattice coherence of the
/// intercept coordinates `u = x − m·y`, pick the spacing by the same
/// criterion, then refine anchor, spacing, and slope by Huber-weighted
/// least squares over integer line assignments, dropping far outliers.
pub fn fit_parallel_lines(
    points: &[(f64, f64)],
    slope_lo: f64,
    slope_hi: f64,
) -> Result<LineFamily> {
    if points.len() < 4 {
        return Err(Error::Config(format!(
            "parallel-line fit needs at least 4 points, got {}",
            points.len()
        )));
    }
    let proj = |m: f64| -> Vec<f64> { points.iter().map(|&(x, y)| x - m * y).collect() };
    let u_span = |u: &[f64]| -> f64 {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in u {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        hi - lo
    };
    // Slope scoring decimates large point sets; the refinement below uses
    // every point. Slopes whose best lattice fails the occupancy test are
    // strongly penalized: raw coherence alone would reward collapsing a
    // handful of points onto arbitrary micro-lattices.
    let stride = points.len().div_ceil(256);
    let score = |m: f64| -> f64 {
        let u: Vec<f64> = proj(m).into_iter().step_by(stride).collect();
        let span = u_span(&u);
        if span < 1e-12 {
            return 0.0;
        }
        let (_, c, occupied) = pick_spacing(&u, span / 64.0, 1.1 * span);
        if occupied {
            c
        } else {
            0.25 * c
        }
    };
    // Coarse slope grid, then golden-section refinement of the coherence.
    let n_grid = 241;
    let mut best_m = slope_lo;
    let mut best_c = f64::NEG_INFINITY;
    for k in 0..n_grid {
        let m = slope_lo + (slope_hi - slope_lo) * k as f64 / (n_grid - 1) as f64;
        let c = score(m);
        if c > best_c {
            best_c = c;
            best_m = m;
        }
    }
    let h = (slope_hi - slope_lo) / (n_grid - 1) as f64;
    let (mut a, mut b) = (best_m - h, best_m + h);
    for _ in 0..40 {
        let m1 = a + 0.381_966 * (b - a);
        let m2 = b - 0.381_966 * (b - a);
        if score(m1) > score(m2) {
            b = m2;
        } else {
            a = m1;
        }
    }
    let mut m = 0.5 * (a + b);

    // Lattice spacing and anchor at the chosen slope; integer indices by
    // rounding against them.
    let assign = |m: f64, spacing_hint: Option<f64>| -> Result<(Vec<i64>, f64, f64)> {
        let u = proj(m);
        let span = u_span(&u);
        if span < 1e-12 {
            return Err(Error::Convergence(
                "only one feature line detected; spacing unresolvable".into(),
            ));
        }
        let spacing = match spacing_hint {
            Some(s) => s,
            None => {
                let (s, _, _) = pick_spacing(&u, span / 64.0, 1.1 * span);
                s
            }
        };
        let (c0, index) = lattice_indices(&u, spacing);
        Ok((index, spacing, c0))
    };
    let (mut index, mut spacing, mut c0) = assign(m, None)?;

    // Joint Huber-weighted least squares for (c0, spacing, m) given integer
    // assignments, iterated with reassignment; points far off the lattice
    // are excluded outright.
    let mut keep = vec![true; points.len()];
    for round in 0..4 {
        let mut w: Vec<f64> = keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        for _irls in 0..20 {
            let mut ata = nalgebra::Matrix3::<f64>::zeros();
            let mut atb = nalgebra::Vector3::<f64>::zeros();
            for (i, &(x, y)) in points.iter().enumerate() {
                let row = nalgebra::Vector3::new(1.0, index[i] as f64, y);
                ata += row * row.transpose() * w[i];
                atb += row * (x * w[i]);
            }
            let Some(sol) = ata.lu().solve(&atb) else {
                return Err(Error::Convergence("degenerate parallel-line system".into()));
            };
            (c0, spacing, m) = (sol[0], sol[1], sol[2]);
            let res: Vec<f64> = points
                .iter()
                .enumerate()
                .map(|(i, &(x, y))| x - c0 - spacing * index[i] as f64 - m * y)
                .collect();
            let mut abs: Vec<f64> =
                res.iter().zip(&keep).filter(|(_, &k)| k).map(|(r, _)| r.abs()).collect();
            abs.sort_by(f64::total_cmp);
            let delta = (1.345 * 1.4826 * abs[abs.len() / 2]).max(1e-9);
            for (i, (wi, r)) in w.iter_mut().zip(&res).enumerate() {
                *wi = if !keep[i] {
                    0.0
                } else if r.abs() <= delta {
                    1.0
                } else {
                    delta / r.abs()
                };
            }
        }
        // Re-derive assignments and the outlier set from the refined fit.
        let (ni, _, _) = assign(m, Some(spacing))?;
        let mut changed = false;
        for (i, &(x, y)) in points.iter().enumerate() {
            let r = x - c0 - spacing * ni[i] as f64 - m * y;
            let k = r.abs() < 0.25 * spacing.abs();
            changed |= k != keep[i] || ni[i] != index[i];
            keep[i] = k;
        }
        index = ni;
        if !changed && round > 0 {
            break;
        }
        if keep.iter().filter(|&&k| k).count() < 4 {
            return Err(Error::Convergence(
                "parallel-line fit rejected nearly all points".into(),
            ));
        }
    }

    if spacing < 0.0 {
        // A negative spacing only flips index signs; normalize.
        spacing = -spacing;
        for k in index.iter_mut() {
            *k = -*k;
        }
    }
    let mut rms = 0.0;
    let mut kept_pts = Vec::new();
    let mut ks: Vec<i64> = Vec::new();
    for (i, &(x, y)) in points.iter().enumerate() {
        if !keep[i] {
            continue;
        }
        rms += (x - c0 - spacing * index[i] as f64 - m * y).powi(2);
        kept_pts.push((x, y));
        ks.push(index[i]);
    }
    rms = (rms / kept_pts.len() as f64).sqrt();
    ks.sort_unstable();
    ks.dedup();
    if ks.len() < 2 {
        return Err(Error::Convergence(
            "only one feature line detected; spacing unresolvable".into(),
        ));
    }
    let intercepts: Vec<f64> = ks.iter().map(|&k| c0 + spacing * k as f64).collect();
    Ok(LineFamily {
        slope_l_per_g: m,
        intercepts_ma: intercepts,
        spacing_ma: spacing,
        rms_ma: rms,
        points: kept_pts,
    })
}

/// One recovered current-to-flux row: `φ(I_l, I_g) = c_l·I_l + c_g·I_g + o`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveredRow {
    /// Coefficients (rad/mA) for the local and global coil currents.
    pub coeffs: [f64; 2],
    /// Offset (rad), reduced to (−π, π].
    pub offset_rad: f64,
    /// Spacing of the underlying feature lines along the local axis (mA).
    pub spacing_ma: f64,
    /// RMS residual of the feature points about the fitted lines (mA).
    pub residual_ma: f64,
    /// Feature points that produced this row.
    pub points: Vec<(f64, f64)>,
}

impl RecoveredRow {
    pub fn flux_at(&self, i_l_ma: f64, i_g_ma: f64) -> f64 {
        self.coeffs[0] * i_l_ma + self.coeffs[1] * i_g_ma + self.offset_rad
    }
}

fn wrap_angle(a: f64) -> f64 {
    let mut v = a.rem_euclid(std::f64::consts::TAU);
    if v > std::f64::consts::PI {
        v -= std::f64::consts::TAU;
    }
    v
}

/// Convert a fitted line family into a flux row whose value on the family
/// lines is `target` (mod 2π), anchored to the family member nearest the
/// reference point.
fn family_to_row(f: &LineFamily, target: f64, reference: (f64, f64)) -> RecoveredRow {
    let c_l = std::f64::consts::TAU / f.spacing_ma;
    let c_g = -f.slope_l_per_g * c_l;
    let u_ref = reference.0 - f.slope_l_per_g * reference.1;
    let c_star = f
        .intercepts_ma
        .iter()
        .cloned()
        .min_by(|a, b| (a - u_ref).abs().total_cmp(&(b - u_ref).abs()))
        .unwrap_or(0.0);
    RecoveredRow {
        coeffs: [c_l, c_g],
        offset_rad: wrap_angle(target - c_l * c_star),
        spacing_ma: f.spacing_ma,
        residual_ma: f.rms_ma,
        points: f.points.clone(),
    }
}

/// Recovered current-to-flux rows for the three loop fluxes, with the
/// gradiometric quarton imbalance fixed to zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub ground_delta: RecoveredRow,
    pub quarton_sigma: RecoveredRow,
    pub squid: RecoveredRow,
    pub probe_f_ghz: f64,
}

/// Tuning knobs for [`calibrate`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrateOptions {
    /// Mirror half-window (grid samples) for the fast ground-loop features.
    pub window_fast: usize,
    /// Mirror half-window (path samples) for the slow quarton features.
    pub window_slow: usize,
    /// Acceptance threshold on the reflection score.
    pub score_threshold: f64,
    /// Number of parallel extraction paths per stage.
    pub n_paths: usize,
    /// Path sampling step as a fraction of the global-current grid step.
    pub path_step_frac: f64,
    /// Bound on |slope| (mA/mA) searched for feature-line families.
    pub slope_bound: f64,
    /// Minimum separation (path samples) between SQUID features; 0 picks
    /// an eighth of the path length.
    pub feature_min_sep: usize,
    /// Half-width (rad) of the SQUID-flux band around half a quantum
    /// excluded from the loop-flux point sets in the final refit; the
    /// resonator feature there is mirror-symmetric on its own and would
    /// otherwise masquerade as a loop-flux center.
    pub s_exclusion_rad: f64,
}

impl Default for CalibrateOptions {
    fn default() -> Self {
        CalibrateOptions {
            window_fast: 5,
            window_slow: 30,
            score_threshold: 0.8,
            n_paths: 12,
            path_step_frac: 0.4,
            slope_bound: 8.0,
            feature_min_sep: 0,
            s_exclusion_rad: 0.9,
        }
    }
}

/// Path anchors for the next stage: up to `n` of the previous stage's
/// fitted line intercepts. Anchoring on detected feature lines keeps the
/// probe response strong along the extracted paths; an odd stride keeps
/// both alternating feature-line classes represented.
fn family_anchors(f: &LineFamily, n: usize) -> Vec<f64> {
    if f.intercepts_ma.len() <= 2 * n.max(1) {
        return f.intercepts_ma.clone();
    }
    let mut stride = f.intercepts_ma.len().div_ceil(n.max(1)).max(1);
    if stride % 2 == 0 {
        stride += 1;
    }
    f.intercepts_ma.iter().cloned().step_by(stride).collect()
}

/// Three-stage flux-axis calibration of a two-current flux map.
///
/// Stage 1 detects the mirror centers of the fast ground-loop oscillation
/// along every fixed-global-current row and fits the family of zero lines.
/// Stage 2 extracts complex traces along lines parallel to that family (on
/// which the ground-loop flux is constant), finds their reflection-symmetry
/// points, and fits the quarton-flux mirror-line family. Stage 3 extracts
/// magnitude traces along lines parallel to the quarton family, smooths out
/// the fast oscillation, fits Gaussians to the localized features where the
/// SQUID flux crosses half a quantum, and fits the SQUID line family. The
/// gradiometric quarton imbalance is taken as zero throughout.
pub fn calibrate(map: &FluxMap, opts: &CalibrateOptions) -> Result<CalibrationResult> {
    let stage = |name: &str, e: Error| -> Error {
        Error::Convergence(format!("{name} stage: {e}"))
    };
    let center = (
        0.5 * (map.i_l_ma[0] + map.i_l_ma.last().unwrap()),
        0.5 * (map.i_g_ma[0] + map.i_g_ma.last().unwrap()),
    );

    // Stage 1: fast features along every constant-I_g row.
    let mut pts_g: Vec<(f64, f64)> = Vec::new();
    for ig in 0..map.n_g() {
        let trace: Vec<Complex<f64>> = (0..map.n_l()).map(|il| map.data[(il, ig)]).collect();
        let found =
            find_symmetry_points(&trace, &map.i_l_ma, opts.window_fast, opts.score_threshold)
                .map_err(|e| stage("ground-loop", e))?;
        pts_g.extend(found.iter().map(|p| (p.i_ma, map.i_g_ma[ig])));
    }
    let fam_g = fit_parallel_lines(&pts_g, -opts.slope_bound, opts.slope_bound)
        .map_err(|e| stage("ground-loop", e))?;
    let row_g = family_to_row(&fam_g, 0.0, center);

    // Stage 2: reflection symmetry along constant-ground-flux paths
    // anchored on the detected ground-loop lines.
    let step = opts.path_step_frac * (map.i_g_ma[1] - map.i_g_ma[0]);
    let mut pts_q: Vec<(f64, f64)> = Vec::new();
    for &anchor in &family_anchors(&fam_g, opts.n_paths) {
        let Ok(path) = extract_path_trace(map, anchor, fam_g.slope_l_per_g, step) else {
            continue;
        };
        let found =
            find_symmetry_points(&path.s21, &path.i_g_ma, opts.window_slow, opts.score_threshold)
                .map_err(|e| stage("quarton", e))?;
        for p in &found {
            pts_q.push((anchor + fam_g.slope_l_per_g * p.i_ma, p.i_ma));
        }
    }
    let fam_q = fit_parallel_lines(&pts_q, -opts.slope_bound, opts.slope_bound)
        .map_err(|e| stage("quarton", e))?;

    // Stage 3: Gaussian features along constant-quarton-flux paths
    // anchored on the detected quarton mirror lines.
    let mut pts_s: Vec<(f64, f64)> = Vec::new();
    for &anchor in &family_anchors(&fam_q, opts.n_paths) {
        let Ok(path) = extract_path_trace(map, anchor, fam_q.slope_l_per_g, step) else {
            continue;
        };
        // Smooth |S21| over the fast oscillation along this path direction
        // (about two periods wide), using the stage-1 row for the rate.
        let rate = (row_g.coeffs[0] * fam_q.slope_l_per_g + row_g.coeffs[1]).abs();
        let half = if rate > 1e-9 {
            ((std::f64::consts::TAU / rate / step).round() as usize).max(1)
        } else {
            1
        };
        let mag: Vec<f64> = path.s21.iter().map(|z| z.norm()).collect();
        let smooth: Vec<f64> = (0..mag.len())
            .map(|i| {
                let lo = i.saturating_sub(half);
                let hi = (i + half + 1).min(mag.len());
                mag[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
            })
            .collect();
        let min_sep = if opts.feature_min_sep > 0 {
            opts.feature_min_sep
        } else {
            (smooth.len() / 8).max(8)
        };
        pts_s.extend(
            gaussian_features(&smooth, &path.i_g_ma, min_sep)
                .into_iter()
                .map(|t| (anchor + fam_q.slope_l_per_g * t, t)),
        );
    }
    let fam_s = fit_parallel_lines(&pts_s, -opts.slope_bound, opts.slope_bound)
        .map_err(|e| stage("squid", e))?;
    let row_s = family_to_row(&fam_s, std::f64::consts::PI, center);

    // Self-consistency pass: the resonator feature at half a SQUID quantum
    // is mirror-symmetric on its own, so centers detected inside that band
    // belong to the SQUID family, not the loop-flux ones. With the SQUID
    // row known, prune them and refit the loop-flux families.
    let off_s_band = |pts: &[(f64, f64)]| -> Vec<(f64, f64)> {
        pts.iter()
            .cloned()
            .filter(|&(x, y)| {
                wrap_angle(row_s.flux_at(x, y) - std::f64::consts::PI).abs()
                    > opts.s_exclusion_rad
            })
            .collect()
    };
    let refit = |pts: Vec<(f64, f64)>, fam: LineFamily, target: f64| -> (LineFamily, RecoveredRow) {
        if pts.len() >= 8 {
            if let Ok(f) = fit_parallel_lines(&pts, -opts.slope_bound, opts.slope_bound) {
                if f.intercepts_ma.len() >= 2 {
                    let row = family_to_row(&f, target, center);
                    return (f, row);
                }
            }
        }
        let row = family_to_row(&fam, target, center);
        (fam, row)
    };
    let (_, row_g) = refit(off_s_band(&fam_g.points), fam_g, 0.0);
    let (_, row_q) = refit(off_s_band(&fam_q.points), fam_q, 0.0);

    Ok(CalibrationResult {
        ground_delta: row_g,
        quarton_sigma: row_q,
        squid: row_s,
        probe_f_ghz: map.probe_f_ghz,
    })
}

/// Locate localized features of a smoothed magnitude trace and refine each
/// with a Gaussian fit; returns the fitted centers in position units.
fn gaussian_features(y: &[f64], positions: &[f64], min_sep: usize) -> Vec<f64> {
    let n = y.len();
    if n < 2 * min_sep + 1 {
        return Vec::new();
    }
    let mut sorted: Vec<f64> = y.to_vec();
    sorted.sort_by(f64::total_cmp);
    let med = sorted[n / 2];
    let mad = {
        let mut d: Vec<f64> = y.iter().map(|v| (v - med).abs()).collect();
        d.sort_by(f64::total_cmp);
        d[n / 2]
    };
    let dev: Vec<f64> = y.iter().map(|v| (v - med).abs()).collect();
    let peak = dev.iter().cloned().fold(0.0, f64::max);
    // No feature rises convincingly above the trace's own spread.
    if peak < 6.0 * 1.4826 * mad.max(1e-12) {
        return Vec::new();
    }
    let thresh = 0.35 * peak;
    let mut centers = Vec::new();
    for c in min_sep..n - min_sep {
        if dev[c] < thresh {
            continue;
        }
        let lo = c - min_sep;
        let hi = (c + min_sep + 1).min(n);
        if (lo..hi).any(|k| dev[k] > dev[c] || (dev[k] == dev[c] && k < c)) {
            continue;
        }
        // Gaussian refinement over the local window.
        let xs = &positions[lo..hi];
        let ys = &y[lo..hi];
        if let Ok(fit) = fit_gaussian_feature(xs, ys) {
            let span = xs[xs.len() - 1] - xs[0];
            let inside = fit.center > xs[0] + 0.15 * span && fit.center < xs[0] + 0.85 * span;
            if inside && fit.sigma < span {
                centers.push(fit.center);
            }
        }
    }
    centers
}
