//! Eigenstate labeling and spectral observables: transition tables, self-
//! and cross-Kerr coefficients, six-wave mixing shifts, readout-resonator
//! dispersive shifts, and bias-current sweeps.
//!
//! Labeling projects each eigenvector onto a product basis of 1D anharmonic
//! ladders, one per normal mode, built from slices of the full potential
//! along each mode direction. A state is labeled `(n_a, n_b)` (internal
//! modes in their ground states) when the dominant product component is
//! unambiguous; sweeps re-label low-confidence points by energy continuity
//! against a neighboring bias point.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit::{assemble_full, CircuitSpec, FluxState, ReadoutParams};
use crate::eigen::{solve_lowest, EigenOptions, EigenSolution};
use crate::hamiltonian::{apply_axis, build_hamiltonian, single_mode_slice, BasisConfig, BuiltSystem};
use crate::{Error, Result};

/// Labeling controls.
#[derive(Debug, Clone)]
pub struct LabelOptions {
    /// Minimum squared overlap with the assigned product state.
    pub threshold: f64,
    /// Highest island-mode quantum numbers considered.
    pub max_na: usize,
    pub max_nb: usize,
}

impl Default for LabelOptions {
    fn default() -> Self {
        LabelOptions { threshold: 0.55, max_na: 4, max_nb: 3 }
    }
}

/// Eigenvalues with `(n_a, n_b)` assignments and their confidences.
#[derive(Debug, Clone)]
pub struct LabeledSpectrum {
    pub energies_ghz: Vec<f64>,
    pub labels: Vec<Option<(usize, usize)>>,
    /// Squared overlap with the assigned product state (labeled states).
    pub confidence: Vec<f64>,
    index: HashMap<(usize, usize), usize>,
}

impl LabeledSpectrum {
    /// Absolute energy of the state labeled `(n_a, n_b)`.
    pub fn energy(&self, n_a: usize, n_b: usize) -> Option<f64> {
        self.index.get(&(n_a, n_b)).map(|&j| self.energies_ghz[j])
    }

    /// Transition energy from the labeled ground state, GHz.
    pub fn transition(&self, n_a: usize, n_b: usize) -> Option<f64> {
        Some(self.energy(n_a, n_b)? - self.energy(0, 0)?)
    }

    pub fn labeled_count(&self) -> usize {
        self.index.len()
    }
}

/// Label eigenstates of an oscillator-basis system against the decoupled
/// per-mode product ladders.
pub fn label_states(
    built: &BuiltSystem,
    sol: &EigenSolution,
    opts: &LabelOptions,
) -> Result<LabeledSpectrum> {
    let modes = built
        .modes
        .as_ref()
        .ok_or_else(|| Error::Config("labeling needs the oscillator scheme".into()))?;
    let dims = &built.dims;
    let n_modes = dims.len();

    // Per-mode ladder unitaries (columns = 1D eigenstates ascending), as
    // transposes ready for the change-of-basis contraction.
    let mut ladders_t: Vec<DMatrix<f64>> = Vec::with_capacity(n_modes);
    for k in 0..n_modes {
        let h_k = single_mode_slice(modes, dims, k, &built.assembled.branches);
        let eig = nalgebra::SymmetricEigen::new(h_k);
        let mut order: Vec<usize> = (0..dims[k]).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let u_t = DMatrix::from_fn(dims[k], dims[k], |r, c| eig.eigenvectors[(c, order[r])]);
        ladders_t.push(u_t);
    }

    let dim: usize = dims.iter().product();
    let n_states = sol.values_ghz.len();
    // Transform each eigenvector into the product-ladder basis.
    let mut buf = vec![0.0; dim];
    let mut buf2 = vec![0.0; dim];
    // Candidate (state, label, confidence) triples.
    let mut cands: Vec<(usize, (usize, usize), f64)> = Vec::new();
    let strides: Vec<usize> =
        (0..n_modes).map(|k| dims[k + 1..].iter().product::<usize>()).collect();
    for j in 0..n_states {
        let col = sol.vectors.column(j);
        buf.copy_from_slice(col.as_slice());
        for k in 0..n_modes {
            apply_axis(&ladders_t[k], dims, k, &buf, &mut buf2);
            std::mem::swap(&mut buf, &mut buf2);
        }
        let mut best: Option<((usize, usize), f64)> = None;
        for na in 0..opts.max_na.min(dims[0]) {
            for nb in 0..opts.max_nb.min(dims[1]) {
                // Internal modes in their ground states: index (na, nb, 0, 0).
                let idx = na * strides[0] + nb * strides[1];
                let w = buf[idx] * buf[idx];
                if best.is_none_or(|(_, bw)| w > bw) {
                    best = Some(((na, nb), w));
                }
            }
        }
        if let Some((lab, w)) = best {
            cands.push((j, lab, w));
        }
    }

    // Greedy unique assignment in descending confidence.
    cands.sort_by(|a, b| b.2.total_cmp(&a.2));
    let mut labels: Vec<Option<(usize, usize)>> = vec![None; n_states];
    let mut confidence = vec![0.0; n_states];
    let mut index: HashMap<(usize, usize), usize> = HashMap::new();
    for (j, lab, w) in cands {
        if w < opts.threshold || index.contains_key(&lab) {
            continue;
        }
        labels[j] = Some(lab);
        confidence[j] = w;
        index.insert(lab, j);
    }

    Ok(LabeledSpectrum { energies_ghz: sol.values_ghz.clone(), labels, confidence, index })
}

/// Re-assign missing labels by energy continuity against a reference
/// spectrum from a neighboring sweep point: a reference label is adopted by
/// the unlabeled state closest in transition energy, within `max_jump_ghz`.
pub fn relabel_with_reference(
    current: &mut LabeledSpectrum,
    reference: &LabeledSpectrum,
    max_jump_ghz: f64,
) {
    let (Some(e0_cur), Some(e0_ref)) = (current.energy(0, 0), reference.energy(0, 0)) else {
        return;
    };
    let ref_labels: Vec<((usize, usize), f64)> = reference
        .index
        .iter()
        .map(|(&lab, &j)| (lab, reference.energies_ghz[j] - e0_ref))
        .collect();
    for (lab, f_ref) in ref_labels {
        if current.index.contains_key(&lab) {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (j, l) in current.labels.iter().enumerate() {
            if l.is_some() {
                continue;
            }
            let gap = ((current.energies_ghz[j] - e0_cur) - f_ref).abs();
            if gap <= max_jump_ghz && best.is_none_or(|(_, bg)| gap < bg) {
                best = Some((j, gap));
            }
        }
        if let Some((j, _)) = best {
            current.labels[j] = Some(lab);
            current.confidence[j] = 0.0; // continuity-based, not overlap-based
            current.index.insert(lab, j);
        }
    }
}

/// Kerr-level observables extracted from a labeled spectrum. Frequencies in
/// GHz, Kerr-type quantities in MHz.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KerrReport {
    pub f_a_ghz: f64,
    pub f_b_ghz: f64,
    pub k_a_mhz: f64,
    pub k_b_mhz: f64,
    pub chi_mhz: f64,
    /// χ normalized by the larger qubit frequency (dimensionless).
    pub eta: f64,
    /// χ/√|K_A·K_B| carrying the sign of χ (dimensionless).
    pub kerr_ratio: f64,
    /// Six-wave shift `(f_{30}-f_{20}) - (f_{10}-f_{00})`, MHz.
    pub six_wave_a_mhz: Option<f64>,
    /// Same quantity by the cumulative convention `f_30 - 3 f_10 + 2 f_00`.
    pub six_wave_cum_a_mhz: Option<f64>,
}

/// Extract Kerr observables. Requires labels (0,0) (1,0) (0,1) (1,1) (2,0)
/// (0,2); (3,0) additionally enables the six-wave entries.
pub fn kerr_report(spec: &LabeledSpectrum) -> Result<KerrReport> {
    let need = |na: usize, nb: usize| {
        spec.energy(na, nb).ok_or_else(|| {
            Error::Convergence(format!("state ({na},{nb}) missing from the labeled spectrum"))
        })
    };
    let e00 = need(0, 0)?;
    let e10 = need(1, 0)?;
    let e01 = need(0, 1)?;
    let e11 = need(1, 1)?;
    let e20 = need(2, 0)?;
    let e02 = need(0, 2)?;
    let f_a = e10 - e00;
    let f_b = e01 - e00;
    let k_a = (e20 - 2.0 * e10 + e00) * 1e3;
    let k_b = (e02 - 2.0 * e01 + e00) * 1e3;
    let chi = (e11 - e10 - e01 + e00) * 1e3;
    let eta = chi * 1e-3 / f_a.max(f_b);
    let denom = (k_a * k_b).abs().sqrt();
    let kerr_ratio = if denom > 0.0 { chi / denom } else { f64::INFINITY * chi.signum() };
    let (sw, sw_cum) = match spec.energy(3, 0) {
        Some(e30) => (
            Some((e30 - e20 - e10 + e00) * 1e3),
            Some((e30 - 3.0 * e10 + 2.0 * e00) * 1e3),
        ),
        None => (None, None),
    };
    Ok(KerrReport {
        f_a_ghz: f_a,
        f_b_ghz: f_b,
        k_a_mhz: k_a,
        k_b_mhz: k_b,
        chi_mhz: chi,
        eta,
        kerr_ratio,
        six_wave_a_mhz: sw,
        six_wave_cum_a_mhz: sw_cum,
    })
}

/// Readout-resonator dispersive shifts for both qubits, MHz.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReadoutShifts {
    pub delta_a_mhz: f64,
    /// Linear resonator pull g²/Δ, MHz.
    pub pull_a_mhz: f64,
    /// Kerr-corrected dispersive shift 2g²K/(Δ(Δ+K)), MHz. Vanishes with
    /// the qubit anharmonicity.
    pub chi_a_mhz: f64,
    pub delta_b_mhz: f64,
    pub pull_b_mhz: f64,
    pub chi_b_mhz: f64,
}

/// Dispersive readout shifts from a Kerr report and the resonator
/// parameters. The qubit-resonator detuning defaults to `f_q - f_r` and can
/// be overridden per resonator.
pub fn readout_shifts(kerr: &KerrReport, ra: &ReadoutParams, rb: &ReadoutParams) -> ReadoutShifts {
    let shift = |f_q_ghz: f64, k_mhz: f64, r: &ReadoutParams| -> (f64, f64, f64) {
        let delta = r.delta_mhz.unwrap_or((f_q_ghz - r.f0_ghz) * 1e3);
        let pull = r.g_mhz * r.g_mhz / delta;
        let chi = 2.0 * r.g_mhz * r.g_mhz * k_mhz / (delta * (delta + k_mhz));
        (delta, pull, chi)
    };
    let (da, pa, ca) = shift(kerr.f_a_ghz, kerr.k_a_mhz, ra);
    let (db, pb, cb) = shift(kerr.f_b_ghz, kerr.k_b_mhz, rb);
    ReadoutShifts {
        delta_a_mhz: da,
        pull_a_mhz: pa,
        chi_a_mhz: ca,
        delta_b_mhz: db,
        pull_b_mhz: pb,
        chi_b_mhz: cb,
    }
}

/// One evaluated bias point of a sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub i_bias_ma: f64,
    pub flux: FluxState,
    pub kerr: KerrReport,
    pub readout: ReadoutShifts,
    /// True when every label came from overlaps above threshold (no
    /// continuity fallback was needed).
    pub labels_confident: bool,
}

/// Controls for a bias sweep.
#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub basis: BasisConfig,
    pub eigen: EigenOptions,
    pub labels: LabelOptions,
    /// Continuity fallback window for re-labeling, GHz.
    pub max_jump_ghz: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            basis: BasisConfig::default(),
            eigen: EigenOptions::lowest(18),
            labels: LabelOptions::default(),
            max_jump_ghz: 0.25,
        }
    }
}

/// Evaluate the Kerr observables at a single flux point.
pub fn kerr_at_flux(spec: &CircuitSpec, flux: &FluxState, opts: &SweepOptions) -> Result<KerrReport> {
    let ac = assemble_full(spec, flux)?;
    let built = build_hamiltonian(&ac, &opts.basis)?;
    let sol = solve_lowest(&built.h, &opts.eigen)?;
    let labeled = label_states(&built, &sol, &opts.labels)?;
    kerr_report(&labeled)
}

/// Sweep the bias current: solve, label, and extract observables at every
/// point, then repair low-confidence labelings by continuity against the
/// nearest successful neighbor.
pub fn kerr_sweep(
    spec: &CircuitSpec,
    i_start_ma: f64,
    i_stop_ma: f64,
    n_points: usize,
    opts: &SweepOptions,
) -> Result<Vec<SweepPoint>> {
    if n_points < 2 {
        return Err(Error::Config("sweep needs at least 2 points".into()));
    }
    let currents: Vec<f64> = (0..n_points)
        .map(|k| i_start_ma + (i_stop_ma - i_start_ma) * k as f64 / (n_points - 1) as f64)
        .collect();

    // Pass 1: independent solves (parallel across points).
    struct Raw {
        i_bias_ma: f64,
        flux: FluxState,
        labeled: LabeledSpectrum,
    }
    let mut raws: Vec<Result<Raw>> = currents
        .par_iter()
        .map(|&i_bias| -> Result<Raw> {
            let flux = spec.bias_line.fluxes_at_bias(i_bias);
            let ac = assemble_full(spec, &flux)?;
            let built = build_hamiltonian(&ac, &opts.basis)?;
            let sol = solve_lowest(&built.h, &opts.eigen)?;
            let labeled = label_states(&built, &sol, &opts.labels)?;
            Ok(Raw { i_bias_ma: i_bias, flux, labeled })
        })
        .collect();

    // Pass 2: continuity repair, walking outward from confident points.
    let complete =
        |l: &LabeledSpectrum| kerr_report(l).is_ok();
    for k in 0..raws.len() {
        let needs_fix = matches!(&raws[k], Ok(r) if !complete(&r.labeled));
        if !needs_fix {
            continue;
        }
        // Find the nearest complete neighbor as reference.
        let reference = raws
            .iter()
            .enumerate()
            .filter_map(|(j, r)| match r {
                Ok(r) if j != k && complete(&r.labeled) => Some((j, r.labeled.clone())),
                _ => None,
            })
            .min_by_key(|(j, _)| j.abs_diff(k))
            .map(|(_, l)| l);
        if let (Ok(raw), Some(refl)) = (&mut raws[k], reference) {
            relabel_with_reference(&mut raw.labeled, &refl, opts.max_jump_ghz);
        }
    }

    let mut out = Vec::with_capacity(raws.len());
    for raw in raws {
        let raw = raw?;
        let kerr = kerr_report(&raw.labeled).map_err(|e| {
            Error::Convergence(format!(
                "bias {:.4} mA: {e} (after continuity repair)",
                raw.i_bias_ma
            ))
        })?;
        let readout = readout_shifts(&kerr, &spec.readout_a, &spec.readout_b);
        let labels_confident = raw
            .labeled
            .labels
            .iter()
            .zip(&raw.labeled.confidence)
            .all(|(l, &c)| l.is_none() || c > 0.0);
        out.push(SweepPoint {
            i_bias_ma: raw.i_bias_ma,
            flux: raw.flux,
            kerr,
            readout,
            labels_confident,
        });
    }
    Ok(out)
}

/// Locate the self-Kerr zero crossing of qubit A by linear interpolation
/// between the two sweep points bracketing the sign change.
pub fn find_kerr_zero(points: &[SweepPoint]) -> Option<f64> {
    for w in points.windows(2) {
        let (p0, p1) = (&w[0], &w[1]);
        if p0.kerr.k_a_mhz == 0.0 {
            return Some(p0.i_bias_ma);
        }
        if p0.kerr.k_a_mhz * p1.kerr.k_a_mhz < 0.0 {
            let t = p0.kerr.k_a_mhz / (p0.kerr.k_a_mhz - p1.kerr.k_a_mhz);
            return Some(p0.i_bias_ma + t * (p1.i_bias_ma - p0.i_bias_ma));
        }
    }
    points.iter().find(|p| p.kerr.k_a_mhz == 0.0).map(|p| p.i_bias_ma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::assemble_reduced;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    /// Two weakly coupled anharmonic modes with known perturbative Kerr
    /// coefficients: a reduced-style circuit with two single-junction
    /// transmons and a weak cross capacitance.
    fn two_transmon_circuit(ec_ab: f64) -> crate::circuit::AssembledCircuit {
        use nalgebra::{DMatrix, DVector};
        let ec = DMatrix::from_row_slice(2, 2, &[0.25, ec_ab, ec_ab, 0.30]);
        crate::circuit::AssembledCircuit {
            ec_ghz: ec,
            branches: vec![
                crate::circuit::BranchTerm {
                    e_ghz: -12.0,
                    weights: DVector::from_column_slice(&[1.0, 0.0]),
                    offset_rad: 0.0,
                },
                crate::circuit::BranchTerm {
                    e_ghz: -20.0,
                    weights: DVector::from_column_slice(&[0.0, 1.0]),
                    offset_rad: 0.0,
                },
            ],
            node_names: vec!["a", "b"],
        }
    }

    #[test]
    fn decoupled_modes_label_with_full_confidence() {
        let ac = two_transmon_circuit(0.0);
        let built = build_hamiltonian(&ac, &BasisConfig::oscillator(&[12, 12])).unwrap();
        let sol = solve_lowest(&built.h, &EigenOptions::lowest(10)).unwrap();
        let labeled = label_states(&built, &sol, &LabelOptions::default()).unwrap();
        // With zero coupling the eigenstates ARE product states.
        for (j, lab) in labeled.labels.iter().enumerate() {
            if lab.is_some() {
                assert!(
                    labeled.confidence[j] > 0.999,
                    "state {j} confidence {}",
                    labeled.confidence[j]
                );
            }
        }
        assert!(labeled.labeled_count() >= 8);
        // And the cross-Kerr vanishes.
        let kerr = kerr_report(&labeled).unwrap();
        assert_abs_diff_eq!(kerr.chi_mhz, 0.0, epsilon = 1e-6);
        // Self-Kerr of a transmon ≈ -E_C to leading order; the exact values
        // run ~15% larger at these E_J/E_C ratios.
        assert_relative_eq!(kerr.k_a_mhz, -250.0, max_relative = 0.25);
        assert_relative_eq!(kerr.k_b_mhz, -300.0, max_relative = 0.25);
        assert!(kerr.k_a_mhz < -250.0 && kerr.k_b_mhz < -300.0);
    }

    #[test]
    fn charge_coupling_gives_perturbative_cross_kerr() {
        // Weak charge coupling: χ from second-order dispersive theory,
        //   χ ≈ 2 g² (K_a + K_b) / ((Δ + K_a)(Δ - K_b)) with
        //   g = 4 E_Cab ⟨n_a⟩⟨n_b⟩-matrix elements... rather than pin the
        // textbook closed form, check sign, scale, and quadratic growth in
        // the coupling strength.
        let kerr_for = |ec_ab: f64| {
            let ac = two_transmon_circuit(ec_ab);
            let built = build_hamiltonian(&ac, &BasisConfig::oscillator(&[12, 12])).unwrap();
            let sol = solve_lowest(&built.h, &EigenOptions::lowest(12)).unwrap();
            let labeled = label_states(&built, &sol, &LabelOptions::default()).unwrap();
            kerr_report(&labeled).unwrap()
        };
        let k1 = kerr_for(0.004);
        let k2 = kerr_for(0.008);
        assert!(k1.chi_mhz.abs() > 1e-3);
        // χ scales as the square of the coupling matrix element.
        assert_relative_eq!(k2.chi_mhz / k1.chi_mhz, 4.0, max_relative = 0.15);
        // Self-Kerr barely moves.
        assert_relative_eq!(k1.k_a_mhz, k2.k_a_mhz, max_relative = 0.05);
    }

    #[test]
    fn kerr_report_fields_are_consistent() {
        let ac = two_transmon_circuit(0.006);
        let built = build_hamiltonian(&ac, &BasisConfig::oscillator(&[12, 12])).unwrap();
        let sol = solve_lowest(&built.h, &EigenOptions::lowest(12)).unwrap();
        let labeled = label_states(&built, &sol, &LabelOptions::default()).unwrap();
        let kerr = kerr_report(&labeled).unwrap();
        assert_relative_eq!(
            kerr.eta,
            kerr.chi_mhz * 1e-3 / kerr.f_a_ghz.max(kerr.f_b_ghz),
            max_relative = 1e-12
        );
        assert_relative_eq!(
            kerr.kerr_ratio,
            kerr.chi_mhz / (kerr.k_a_mhz * kerr.k_b_mhz).abs().sqrt(),
            max_relative = 1e-12
        );
        // The two six-wave conventions differ by exactly the self-Kerr:
        // (f30-3f10+2f00) - ((f30-f20)-(f10-f00)) = f20-2f10+f00.
        let sw = kerr.six_wave_a_mhz.unwrap();
        let cum = kerr.six_wave_cum_a_mhz.unwrap();
        assert_relative_eq!(cum - sw, kerr.k_a_mhz, max_relative = 1e-9, epsilon = 1e-9);
    }

    #[test]
    fn readout_shift_vanishes_with_anharmonicity() {
        let mk = |k_a_mhz: f64| KerrReport {
            f_a_ghz: 4.3,
            f_b_ghz: 7.7,
            k_a_mhz,
            k_b_mhz: -180.0,
            chi_mhz: 30.0,
            eta: 0.004,
            kerr_ratio: 1.0,
            six_wave_a_mhz: None,
            six_wave_cum_a_mhz: None,
        };
        let ra = ReadoutParams {
            f0_ghz: 6.837,
            g_mhz: 80.0,
            delta_mhz: None,
            q_internal: 1e5,
            q_coupling: 1e4,
        };
        let rb = ReadoutParams { f0_ghz: 7.1, ..ra.clone() };
        let with_kerr = readout_shifts(&mk(-150.0), &ra, &rb);
        let without = readout_shifts(&mk(0.0), &ra, &rb);
        assert_abs_diff_eq!(without.chi_a_mhz, 0.0, epsilon = 1e-12);
        assert!(with_kerr.chi_a_mhz.abs() > 0.1);
        // Linear pull is independent of the Kerr.
        assert_relative_eq!(with_kerr.pull_a_mhz, without.pull_a_mhz, max_relative = 1e-12);
    }

    #[test]
    fn relabeling_adopts_reference_assignments() {
        let ac = two_transmon_circuit(0.006);
        let built = build_hamiltonian(&ac, &BasisConfig::oscillator(&[12, 12])).unwrap();
        let sol = solve_lowest(&built.h, &EigenOptions::lowest(12)).unwrap();
        let full = label_states(&built, &sol, &LabelOptions::default()).unwrap();
        // Cripple a copy by raising the threshold so nothing labels…
        let mut crippled =
            label_states(&built, &sol, &LabelOptions { threshold: 2.0, ..Default::default() })
                .unwrap();
        assert_eq!(crippled.labeled_count(), 0);
        // …except the ground state, which continuity repair needs anchored.
        crippled.labels[0] = Some((0, 0));
        crippled.confidence[0] = 1.0;
        crippled.index.insert((0, 0), 0);
        relabel_with_reference(&mut crippled, &full, 0.05);
        for (lab, j) in &full.index {
            assert_eq!(crippled.index.get(lab), Some(j), "label {lab:?} mismatch");
        }
    }

    #[test]
    fn reduced_model_sweep_smoke() {
        // End-to-end sweep on the reduced model with mild truncations:
        // checks plumbing, monotonic currents, and the K_A crossing finder
        // on a synthetic sign flip.
        let spec = crate::circuit::test_device();
        let red = assemble_reduced(&spec, &FluxState::ZERO).unwrap();
        let built = build_hamiltonian(&red, &BasisConfig::reduced_default()).unwrap();
        let sol = solve_lowest(&built.h, &EigenOptions::lowest(14)).unwrap();
        let labeled = label_states(&built, &sol, &LabelOptions::default()).unwrap();
        assert!(labeled.labeled_count() >= 6, "labeled {}", labeled.labeled_count());

        // Crossing finder on synthetic data.
        let mkpt = |i: f64, k: f64| SweepPoint {
            i_bias_ma: i,
            flux: FluxState::ZERO,
            kerr: KerrReport {
                f_a_ghz: 4.3,
                f_b_ghz: 7.7,
                k_a_mhz: k,
                k_b_mhz: -180.0,
                chi_mhz: 20.0,
                eta: 0.003,
                kerr_ratio: 1.0,
                six_wave_a_mhz: None,
                six_wave_cum_a_mhz: None,
            },
            readout: ReadoutShifts {
                delta_a_mhz: -2500.0,
                pull_a_mhz: -2.5,
                chi_a_mhz: 0.1,
                delta_b_mhz: 600.0,
                pull_b_mhz: 10.0,
                chi_b_mhz: -3.0,
            },
            labels_confident: true,
        };
        let pts = vec![mkpt(1.0, -20.0), mkpt(1.1, -5.0), mkpt(1.2, 10.0)];
        let zero = find_kerr_zero(&pts).unwrap();
        assert_relative_eq!(zero, 1.1 + 0.1 * (5.0 / 15.0), max_relative = 1e-12);
    }
}
