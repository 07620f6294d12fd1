//! Scratch diagnostics: how the readout resonator tunes with each loop
//! flux in the real circuit — periodicity, mirror-class splitting, and
//! modulation spans, to size the flux-map calibration fixtures.

use std::time::Instant;

use quartonsim::calibration::dressed_resonator_ghz;
use quartonsim::circuit::{assemble_reduced, CircuitSpec, FluxState, JunctionSpec};
use quartonsim::eigen::{solve_lowest, EigenOptions};
use quartonsim::hamiltonian::{build_hamiltonian, BasisConfig};
use quartonsim::spectra::{label_states, LabelOptions};
use quartonsim::{BiasLineModel, ReadoutParams};

fn device() -> CircuitSpec {
    let jc = 0.752;
    let cpa = 57.0;
    CircuitSpec {
        transmon_a: JunctionSpec::new("transmon_a", 0.026, jc, cpa),
        squid_b_top: JunctionSpec::new("squid_b_top", 0.043, jc, cpa),
        squid_b_bottom: JunctionSpec::new("squid_b_bottom", 0.043, jc, cpa),
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
            q_internal: 4.0e3,
            q_coupling: 4.0e3,
        },
        readout_b: ReadoutParams {
            f0_ghz: 7.1,
            g_mhz: 80.0,
            delta_mhz: None,
            q_internal: 4.0e3,
            q_coupling: 4.0e3,
        },
        bias_line: BiasLineModel {
            transform: [[0.0; 2]; 4],
            offsets: [0.0; 4],
            line_slope: 0.254,
            line_intercept_ma: 1.243,
        },
    }
}

fn f0_at(spec: &CircuitSpec, flux: &FluxState) -> Option<f64> {
    let basis = BasisConfig::oscillator(&[9, 9]);
    let ac = assemble_reduced(spec, flux).ok()?;
    let built = build_hamiltonian(&ac, &basis).ok()?;
    let sol = solve_lowest(&built.h, &EigenOptions::lowest(6)).ok()?;
    let lopts = LabelOptions { threshold: 0.2, max_na: 2, max_nb: 2, ..Default::default() };
    let labeled = label_states(&built, &sol, &lopts).ok()?;
    let f_a = labeled.transition(1, 0)?;
    Some(dressed_resonator_ghz(f_a, spec.readout_a.f0_ghz, spec.readout_a.g_mhz * 1e-3))
}

fn sweep(spec: &CircuitSpec, name: &str, mk: impl Fn(f64) -> FluxState) {
    let n = 81;
    let t0 = Instant::now();
    let mut rows = Vec::new();
    for k in 0..n {
        let phi = 4.0 * std::f64::consts::PI * k as f64 / (n - 1) as f64;
        let f0 = f0_at(spec, &mk(phi));
        rows.push((phi, f0));
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("{name}: {:.1} ms/point", 1e3 * dt / n as f64);
    for (phi, f0) in &rows {
        match f0 {
            Some(f) => println!("  phi={phi:7.4}  f0={f:.6}"),
            None => println!("  phi={phi:7.4}  f0=FAIL"),
        }
    }
}

fn main() {
    let spec = device();
    sweep(&spec, "phi_g sweep (phi_q=0.9, phi_s=1.3)", |phi| FluxState {
        phi_s: 1.3,
        phi_q_sigma: 0.9,
        phi_q_delta: 0.0,
        phi_g_delta: phi,
    });
    sweep(&spec, "phi_q sweep (phi_g=0.4, phi_s=1.3)", |phi| FluxState {
        phi_s: 1.3,
        phi_q_sigma: phi,
        phi_q_delta: 0.0,
        phi_g_delta: 0.4,
    });
    sweep(&spec, "phi_s sweep (phi_g=0.4, phi_q=0.9)", |phi| FluxState {
        phi_s: phi,
        phi_q_sigma: 0.9,
        phi_q_delta: 0.0,
        phi_g_delta: 0.4,
    });
}
