//! Developer helper: fit the operating-line flux map (SQUID and quarton
//! flux as affine functions of bias current) against the measured
//! transition table at the two operating points, then print device-file
//! ready bias-line parameters.
//!
//! The affine line through two bias points is fixed exactly by the flux
//! pair at each point, so the four-parameter problem decomposes into two
//! independent two-parameter fits. Each is seeded by a coarse grid scan of
//! the fast reduced model, polished there, then refined with the full
//! four-node model.

use quartonsim::circuit::{assemble_full, assemble_reduced, CircuitSpec, FluxState, JunctionSpec};
use quartonsim::eigen::{solve_lowest, EigenOptions};
use quartonsim::fitting::nelder_mead_bounded;
use quartonsim::hamiltonian::{build_hamiltonian, BasisConfig};
use quartonsim::spectra::{kerr_report, label_states, LabelOptions};
use quartonsim::{BiasLineModel, ReadoutParams};

fn device() -> CircuitSpec {
    let jc = 0.752;
    let cpa = 57.0;
    CircuitSpec {
        transmon_a: JunctionSpec::new("transmon_a", 0.026, jc, cpa),
        squid_b_top: JunctionSpec::new("squid_b_top", 0.037, jc, cpa),
        squid_b_bottom: JunctionSpec::new("squid_b_bottom", 0.049, jc, cpa),
        series: [
            JunctionSpec::new("series_bi", 0.350, jc, cpa),
            JunctionSpec::new("series_ij", 0.308, jc, cpa),
            JunctionSpec::new("series_ja", 0.360, jc, cpa),
        ],
        quarton_top: JunctionSpec::new("quarton_top", 0.077, jc, cpa),
        quarton_bottom: JunctionSpec::new("quarton_bottom", 0.077, jc, cpa),
        cap_a_ground_ff: 61.9,
        cap_b_ground_ff: 52.4,
        cap_ab_mutual_ff: 1.9,
        readout_a: ReadoutParams {
            f0_ghz: 6.837,
            g_mhz: 80.0,
            delta_mhz: None,
            q_internal: 1.0e5,
            q_coupling: 1.0e4,
        },
        readout_b: ReadoutParams {
            f0_ghz: 7.1,
            g_mhz: 80.0,
            delta_mhz: None,
            q_internal: 1.0e5,
            q_coupling: 1.0e4,
        },
        bias_line: BiasLineModel {
            transform: [[0.0; 2]; 4],
            offsets: [0.0; 4],
            line_slope: 0.254,
            line_intercept_ma: 1.243,
        },
    }
}

/// (upper (na,nb), lower (na,nb), measured MHz)
type Target = ((usize, usize), (usize, usize), f64);

const TARGETS_1285: &[Target] = &[
    ((1, 0), (0, 0), 5121.27),
    ((1, 1), (0, 1), 5486.70),
    ((1, 2), (0, 2), 5649.56),
    ((0, 1), (0, 0), 7554.41),
    ((1, 1), (1, 0), 7920.04),
    ((2, 1), (2, 0), 8148.99),
    ((3, 1), (3, 0), 8296.27),
];

/// The published model's own predictions at 1.285 mA; fitting these checks
/// whether this Hamiltonian is structurally equivalent to the published
/// one, independent of measurement error.
const TARGETS_1285_MODEL: &[Target] = &[
    ((1, 0), (0, 0), 5064.72),
    ((1, 1), (0, 1), 5461.57),
    ((1, 2), (0, 2), 5640.70),
    ((0, 1), (0, 0), 7512.94),
    ((1, 1), (1, 0), 7909.80),
    ((2, 1), (2, 0), 8150.86),
    ((3, 1), (3, 0), 8304.50),
];

const TARGETS_1224: &[Target] = &[
    ((1, 0), (0, 0), 4229.56),
    ((1, 1), (0, 1), 4809.72),
    ((0, 1), (0, 0), 7043.43),
    ((1, 1), (1, 0), 7623.98),
];

fn predict(
    spec: &CircuitSpec,
    phi_s: f64,
    phi_q: f64,
    targets: &[Target],
    full: bool,
) -> Option<Vec<f64>> {
    let flux = FluxState { phi_s, phi_q_sigma: phi_q, phi_q_delta: 0.0, phi_g_delta: 0.0 };
    let (basis, eigen) = if full {
        (BasisConfig::oscillator(&[15, 15, 5, 5]), EigenOptions::lowest(30))
    } else {
        (BasisConfig::oscillator(&[15, 15]), EigenOptions::lowest(26))
    };
    let labels = LabelOptions { threshold: 0.4, ..Default::default() };
    let ac = if full {
        assemble_full(spec, &flux).ok()?
    } else {
        assemble_reduced(spec, &flux).ok()?
    };
    let built = build_hamiltonian(&ac, &basis).ok()?;
    let sol = solve_lowest(&built.h, &eigen).ok()?;
    let labeled = label_states(&built, &sol, &labels).ok()?;
    targets
        .iter()
        .map(|&(hi, lo, _)| {
            Some((labeled.energy(hi.0, hi.1)? - labeled.energy(lo.0, lo.1)?) * 1e3)
        })
        .collect()
}

fn cost(spec: &CircuitSpec, phi_s: f64, phi_q: f64, targets: &[Target], full: bool) -> f64 {
    match predict(spec, phi_s, phi_q, targets, full) {
        Some(preds) => targets
            .iter()
            .zip(&preds)
            .map(|(&(_, _, meas), &pr)| ((pr - meas) / meas).powi(2))
            .sum(),
        None => 1e6,
    }
}

fn report(spec: &CircuitSpec, phi_s: f64, phi_q: f64, targets: &[Target], full: bool) {
    match predict(spec, phi_s, phi_q, targets, full) {
        Some(preds) => {
            for (&(hi, lo, meas), &pr) in targets.iter().zip(&preds) {
                let err = (pr - meas) / meas * 100.0;
                println!(
                    "  ({},{})-({},{})  pred {pr:9.2}  meas {meas:9.2}  err {err:+6.3}%",
                    hi.0, hi.1, lo.0, lo.1
                );
            }
        }
        None => println!("  (prediction failed)"),
    }
}

/// Fit one bias point's flux pair: coarse reduced-model grid scan, reduced
/// polish from the best cells, then full-model refinement.
fn fit_point(spec: &CircuitSpec, targets: &[Target], tag: &str) -> (f64, f64) {
    let t0 = std::time::Instant::now();
    // Grid scan over one full fundamental domain. Parity maps
    // (phi_s, phi_q) -> (-phi_s, -phi_q), so [0, 2pi) x [0, 2pi) covers
    // every inequivalent point including the sign-flipped junction lobes.
    let mut cells: Vec<(f64, f64, f64)> = Vec::new();
    let n_s = 30;
    let n_q = 48;
    let top = 2.0 * std::f64::consts::PI - 0.05;
    for i in 0..n_s {
        let phi_s = 0.05 + (top - 0.05) * i as f64 / (n_s - 1) as f64;
        for j in 0..n_q {
            let phi_q = 0.05 + (top - 0.05) * j as f64 / (n_q - 1) as f64;
            let c = cost(spec, phi_s, phi_q, targets, false);
            cells.push((c, phi_s, phi_q));
        }
    }
    cells.sort_by(|a, b| a.0.total_cmp(&b.0));
    println!(
        "[{tag}] grid best cells: {:?} ({:.0} s)",
        &cells[..4.min(cells.len())]
            .iter()
            .map(|c| (format!("{:.3e}", c.0), c.1, c.2))
            .collect::<Vec<_>>(),
        t0.elapsed().as_secs_f64()
    );

    // Reduced-model polish from the four best, well-separated cells.
    let mut seeds: Vec<(f64, f64)> = Vec::new();
    for &(_, s, q) in &cells {
        if seeds.iter().all(|&(s0, q0)| (s - s0).abs() > 0.4 || (q - q0).abs() > 0.4) {
            seeds.push((s, q));
        }
        if seeds.len() == 4 {
            break;
        }
    }
    let lo = [0.0, 0.0];
    let hi = [2.0 * std::f64::consts::PI, 2.0 * std::f64::consts::PI];
    let mut best: Option<(Vec<f64>, f64)> = None;
    for &(s, q) in &seeds {
        let (x, c, evals) = nelder_mead_bounded(
            |v| cost(spec, v[0], v[1], targets, false),
            &[s, q],
            &lo,
            &hi,
            &[0.08, 0.05],
            200,
            1e-10,
        );
        println!("[{tag}] polish from ({s:.3},{q:.3}): cost {c:.3e} after {evals} evals -> ({:.4},{:.4})", x[0], x[1]);
        if best.as_ref().is_none_or(|(_, bc)| c < *bc) {
            best = Some((x, c));
        }
    }
    let (xr, cr) = best.unwrap();
    println!("[{tag}] reduced optimum ({:.4},{:.4}) cost {cr:.3e}; transitions:", xr[0], xr[1]);
    report(spec, xr[0], xr[1], targets, false);

    // Full-model refinement.
    let t1 = std::time::Instant::now();
    let (xf, cf, evals) = nelder_mead_bounded(
        |v| cost(spec, v[0], v[1], targets, true),
        &xr,
        &lo,
        &hi,
        &[0.03, 0.02],
        70,
        1e-10,
    );
    println!(
        "[{tag}] full-model optimum ({:.5},{:.5}) cost {cf:.3e} after {evals} evals ({:.0} s); transitions:",
        xf[0], xf[1], t1.elapsed().as_secs_f64()
    );
    report(spec, xf[0], xf[1], targets, true);
    (xf[0], xf[1])
}

fn main() {
    let spec = device();
    let (s285, q285) = fit_point(&spec, TARGETS_1285, "1.285");
    println!("\n--- structural check: fit against the published model's own values ---");
    let (s285m, q285m) = fit_point(&spec, TARGETS_1285_MODEL, "1.285-model");
    println!("model-target optimum: ({s285m:.5},{q285m:.5})\n");
    let (s224, q224) = fit_point(&spec, TARGETS_1224, "1.224");

    // Affine line through the two calibrated points.
    let di = 1.285 - 1.224;
    let slope_s = (s285 - s224) / di;
    let slope_q = (q285 - q224) / di;
    const MID: f64 = 1.2545;
    let s0 = s224 + slope_s * (MID - 1.224);
    let q0 = q224 + slope_q * (MID - 1.224);
    println!("\nline: phi_s = {s0:+.5} {slope_s:+.5}*(I-{MID}); phi_q = {q0:+.5} {slope_q:+.5}*(I-{MID})");

    // Combined error table and Kerr observables from the full model.
    let basis = BasisConfig::oscillator(&[15, 15, 5, 5]);
    let eigen = EigenOptions::lowest(30);
    let labels = LabelOptions { threshold: 0.4, ..Default::default() };
    let mut n_15 = 0;
    let mut n_25 = 0;
    let mut n_tot = 0;
    for (bias, s, q, targets) in
        [(1.285, s285, q285, TARGETS_1285), (1.224, s224, q224, TARGETS_1224)]
    {
        if let Some(preds) = predict(&spec, s, q, targets, true) {
            for (&(_, _, meas), &pr) in targets.iter().zip(&preds) {
                let err = ((pr - meas) / meas * 100.0).abs();
                n_tot += 1;
                if err <= 1.5 {
                    n_15 += 1;
                }
                if err <= 2.5 {
                    n_25 += 1;
                }
            }
        }
        let flux = FluxState { phi_s: s, phi_q_sigma: q, phi_q_delta: 0.0, phi_g_delta: 0.0 };
        let ac = assemble_full(&spec, &flux).unwrap();
        let built = build_hamiltonian(&ac, &basis).unwrap();
        let sol = solve_lowest(&built.h, &eigen).unwrap();
        let labeled = label_states(&built, &sol, &labels).unwrap();
        match kerr_report(&labeled) {
            Ok(k) => println!(
                "{bias} mA: f_A {:.4} f_B {:.4}  K_A {:+.2} K_B {:+.2}  chi {:+.2} MHz  eta {:.4e}  ratio {:+.1}",
                k.f_a_ghz, k.f_b_ghz, k.k_a_mhz, k.k_b_mhz, k.chi_mhz, k.eta, k.kerr_ratio
            ),
            Err(e) => println!("{bias} mA: kerr report failed: {e}"),
        }
    }
    println!("acceptance: within 2.5% {n_25}/{n_tot}; within 1.5% {n_15}/{n_tot}");

    // Device-file bias-line decomposition: quarton flux driven by the
    // global coil, SQUID flux by the local coil, ground-loop flux zero on
    // the operating line with a fast off-line slope.
    let slope = 0.254;
    let intercept = 1.243;
    let t_s_l = slope_s * slope;
    let off_s = s0 - slope_s * (MID - intercept);
    let off_q = q0 - slope_q * MID;
    let g_l = 30.0;
    let g_g = -g_l / slope;
    let off_g = -g_g * intercept;
    println!("\ndevice-file bias line:");
    println!(
        "  transform = [[{t_s_l:.6}, 0.0], [0.0, {slope_q:.6}], [0.0, 0.0], [{g_l:.6}, {g_g:.6}]]"
    );
    println!("  offsets   = [{off_s:.6}, {off_q:.6}, 0.0, {off_g:.6}]");
    println!("  line_slope = {slope}, line_intercept_ma = {intercept}");
}
