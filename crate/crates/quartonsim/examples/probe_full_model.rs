//! Scratch probe: solve the full device at an operating-regime flux and
//! print the labeled spectrum and Kerr report with timing.

use quartonsim::circuit::{assemble_full, CircuitSpec, FluxState, JunctionSpec};
use quartonsim::eigen::{solve_lowest, EigenOptions};
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
            q_internal: 1e5,
            q_coupling: 1e4,
        },
        readout_b: ReadoutParams {
            f0_ghz: 7.1,
            g_mhz: 80.0,
            delta_mhz: None,
            q_internal: 1e5,
            q_coupling: 1e4,
        },
        bias_line: BiasLineModel {
            transform: [[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]],
            offsets: [0.0, 0.0, 0.0, 0.0],
            line_slope: 1.0,
            line_intercept_ma: 0.0,
        },
    }
}

fn main() {
    let spec = device();
    for (phi_s, phi_q) in [(0.84, 4.57), (0.84, 4.779), (0.0, 0.0)] {
        let flux =
            FluxState { phi_s, phi_q_sigma: phi_q, phi_q_delta: 0.0, phi_g_delta: 0.0 };
        let ac = assemble_full(&spec, &flux).unwrap();
        let t0 = std::time::Instant::now();
        let built = build_hamiltonian(&ac, &BasisConfig::default()).unwrap();
        let t_build = t0.elapsed();
        let modes = built.modes.as_ref().unwrap();
        println!("\n=== phi_s={phi_s} phi_q={phi_q} ===");
        println!(
            "modes (GHz): {:?}  terms: {}",
            modes.omega_ghz.iter().map(|w| (w * 1e3).round() / 1e3).collect::<Vec<_>>(),
            built.h.terms.len()
        );
        let t1 = std::time::Instant::now();
        let sol = solve_lowest(&built.h, &EigenOptions::lowest(18)).unwrap();
        let t_solve = t1.elapsed();
        let t2 = std::time::Instant::now();
        let labeled = label_states(&built, &sol, &LabelOptions::default()).unwrap();
        let t_label = t2.elapsed();
        println!(
            "build {:.2?}  solve {:.2?} ({} iters)  label {:.2?}",
            t_build, t_solve, sol.iterations, t_label
        );
        for j in 0..sol.values_ghz.len() {
            println!(
                "  E{j:2} = {:+10.5} GHz   label {:?} conf {:.3}",
                sol.values_ghz[j] - sol.values_ghz[0],
                labeled.labels[j],
                labeled.confidence[j]
            );
        }
        match kerr_report(&labeled) {
            Ok(k) => println!(
                "f_A {:.4}  f_B {:.4}  K_A {:+.3} MHz  K_B {:+.3} MHz  chi {:+.3} MHz  eta {:.3e}  ratio {:+.1}",
                k.f_a_ghz, k.f_b_ghz, k.k_a_mhz, k.k_b_mhz, k.chi_mhz, k.eta, k.kerr_ratio
            ),
            Err(e) => println!("kerr report failed: {e}"),
        }
    }
}
