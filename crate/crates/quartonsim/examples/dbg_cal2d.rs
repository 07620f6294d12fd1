//! Scratch diagnostics for the two-current calibration pipeline.

use nalgebra::{Complex, DMatrix};
use quartonsim::calibration::{
    extract_path_trace, find_symmetry_points, fit_parallel_lines, s21_notch, FluxMap,
};
use quartonsim::BiasLineModel;

fn toy_truth() -> BiasLineModel {
    BiasLineModel {
        transform: [[1.6, -3.4], [-2.0, -7.0], [0.0, 0.0], [14.0, -34.0]],
        offsets: [0.55, 1.10, 0.0, 0.37],
        line_slope: 1.0,
        line_intercept_ma: 0.0,
    }
}

fn toy_map(truth: &BiasLineModel, shift: (f64, f64)) -> FluxMap {
    let (q, q_c) = (300.0, 600.0);
    let probe = 7.008;
    let n_l = 105;
    let n_g = 89;
    let i_l: Vec<f64> =
        (0..n_l).map(|k| -2.6 + 5.2 * k as f64 / (n_l - 1) as f64 + shift.0).collect();
    let i_g: Vec<f64> =
        (0..n_g).map(|k| -1.1 + 2.2 * k as f64 / (n_g - 1) as f64 + shift.1).collect();
    let mut data = DMatrix::from_element(n_l, n_g, Complex::new(0.0, 0.0));
    for (il, &x) in i_l.iter().enumerate() {
        for (ig, &y) in i_g.iter().enumerate() {
            let f = truth.fluxes_at(x, y);
            let d_s = f.phi_s.rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI;
            let f0 = 7.0
                + 0.008 * f.phi_g_delta.cos()
                + 0.012 * (f.phi_g_delta / 2.0).cos()
                + 0.004 * f.phi_q_sigma.cos()
                + 0.007 * (f.phi_q_sigma / 2.0).cos()
                + 0.020 * (-(d_s / 0.35).powi(2)).exp();
            data[(il, ig)] = s21_notch(probe, f0, q, q_c);
        }
    }
    FluxMap { i_l_ma: i_l, i_g_ma: i_g, probe_f_ghz: probe, data, failures: Vec::new() }
}

fn main() {
    let truth = toy_truth();
    let map = toy_map(&truth, (0.0, 0.0));
    row_score_dump(&map, 44, 5);
    row_upsampled_dump(&map, 44, 5);
    row_detect_dump(&map, 44, 5);
    row_detect_dump(&map, 60, 5);

    // Stage 1 by hand.
    let mut pts_g: Vec<(f64, f64)> = Vec::new();
    for ig in 0..map.n_g() {
        let trace: Vec<Complex<f64>> = (0..map.n_l()).map(|il| map.data[(il, ig)]).collect();
        let found = find_symmetry_points(&trace, &map.i_l_ma, 5, 0.8).unwrap();
        pts_g.extend(found.iter().map(|p| (p.i_ma, map.i_g_ma[ig])));
    }
    println!("stage 1: {} points", pts_g.len());
    let fam_g = fit_parallel_lines(&pts_g, -8.0, 8.0).unwrap();
    println!(
        "stage 1: slope {:.4} (want 2.4286), spacing {:.4} (want {:.4}), {} lines, rms {:.4}",
        fam_g.slope_l_per_g,
        fam_g.spacing_ma,
        std::f64::consts::TAU / 14.0,
        fam_g.intercepts_ma.len(),
        fam_g.rms_ma
    );

    // Classify every stage-1 point by its true fluxes.
    let wrap = |a: f64| {
        (a + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI
    };
    let (mut on_g, mut on_pi, mut on_s, mut other) = (0, 0, 0, 0);
    for &(x, y) in &pts_g {
        let f = truth.fluxes_at(x, y);
        let wg = wrap(f.phi_g_delta).abs();
        let ws = wrap(f.phi_s - std::f64::consts::PI).abs();
        if wg < 0.3 {
            on_g += 1;
        } else if wg > 2.8 {
            on_pi += 1;
        } else if ws < 0.9 {
            on_s += 1;
        } else {
            other += 1;
            if other <= 8 {
                println!("  stray ({x:.3},{y:.3}): phi_g={:.3} phi_s-pi={ws:.3}", wrap(f.phi_g_delta));
            }
        }
    }
    println!("stage 1 classes: on_g={on_g} at_pi={on_pi} on_s_line={on_s} other={other}");
    // Coherence at candidate spacings for the true slope.
    let u: Vec<f64> = pts_g.iter().map(|&(x, y)| x - 2.428_571 * y).collect();
    for s in [0.448_799, 0.224_399, 0.897_598] {
        let mut sum = (0.0f64, 0.0f64);
        for &v in &u {
            let p = std::f64::consts::TAU * v / s;
            sum = (sum.0 + p.cos(), sum.1 + p.sin());
        }
        let c = (sum.0 * sum.0 + sum.1 * sum.1).sqrt() / u.len() as f64;
        println!("  coherence at S={s:.4}: {c:.3}");
    }

    // Stage 2 by hand: paths anchored on fam_g intercepts.
    let step = 0.4 * (map.i_g_ma[1] - map.i_g_ma[0]);
    println!("stage 2: step {step:.4}, intercepts {:?}", &fam_g.intercepts_ma);
    let mut pts_q: Vec<(f64, f64)> = Vec::new();
    for &anchor in &fam_g.intercepts_ma {
        match extract_path_trace(&map, anchor, fam_g.slope_l_per_g, step) {
            Ok(path) => {
                let found =
                    find_symmetry_points(&path.s21, &path.i_g_ma, 30, 0.8).unwrap();
                // Diagnose: what is the max |S21| variation along the path?
                let mags: Vec<f64> = path.s21.iter().map(|z| z.norm()).collect();
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for &m in &mags {
                    lo = lo.min(m);
                    hi = hi.max(m);
                }
                println!(
                    "  anchor {anchor:.3}: {} samples, |S21| in [{lo:.3},{hi:.3}], {} centers",
                    path.s21.len(),
                    found.len()
                );
                for p in &found {
                    let x = anchor + fam_g.slope_l_per_g * p.i_ma;
                    let f = truth.fluxes_at(x, p.i_ma);
                    let w = (f.phi_q_sigma + std::f64::consts::PI)
                        .rem_euclid(std::f64::consts::TAU)
                        - std::f64::consts::PI;
                    println!(
                        "    t={:.3} score={:.3} phi_q mod 2pi = {w:.3} phi_s={:.3}",
                        p.i_ma, p.score, f.phi_s
                    );
                    pts_q.push((x, p.i_ma));
                }
            }
            Err(e) => println!("  anchor {anchor:.3}: {e}"),
        }
    }
    println!("stage 2: {} points", pts_q.len());
    match fit_parallel_lines(&pts_q, -8.0, 8.0) {
        Ok(fam_q) => println!(
            "stage 2: slope {:.4} (want -3.5), spacing {:.4} (want {:.4}), {} lines, rms {:.4}",
            fam_q.slope_l_per_g,
            fam_q.spacing_ma,
            std::f64::consts::TAU / 2.0,
            fam_q.intercepts_ma.len(),
            fam_q.rms_ma
        ),
        Err(e) => println!("stage 2 fit failed: {e}"),
    }

    // Full pipeline.
    match quartonsim::calibrate(&map, &quartonsim::CalibrateOptions::default()) {
        Ok(cal) => {
            let show = |name: &str, row: &quartonsim::RecoveredRow, want: [f64; 2], off: f64| {
                println!(
                    "{name}: coeffs [{:+.4}, {:+.4}] want [{:+.1}, {:+.1}]  offset {:+.4} want {:+.3}  rms {:.4}  pts {}",
                    row.coeffs[0],
                    row.coeffs[1],
                    want[0],
                    want[1],
                    row.offset_rad,
                    off,
                    row.residual_ma,
                    row.points.len()
                );
            };
            show("g", &cal.ground_delta, [14.0, -34.0], 0.37);
            show("q", &cal.quarton_sigma, [-2.0, -7.0], 1.10);
            show("s", &cal.squid, [1.6, -3.4], 0.55);
        }
        Err(e) => println!("calibrate failed: {e}"),
    }
}

#[allow(dead_code)]
fn row_upsampled_dump(map: &FluxMap, ig: usize, window: usize) {
    let truth = toy_truth();
    let n0 = map.n_l();
    let mut z: Vec<Complex<f64>> = (0..n0).map(|il| map.data[(il, ig)]).collect();
    for _ in 0..2 {
        z = (0..n0)
            .map(|i| {
                let a = z[i.saturating_sub(1)];
                let c = z[(i + 1).min(n0 - 1)];
                0.25 * (a + 2.0 * z[i] + c)
            })
            .collect();
    }
    let mut diffs: Vec<f64> = z.windows(2).map(|p| (p[1] - p[0]).norm()).collect();
    diffs.sort_by(f64::total_cmp);
    let sigma = diffs[diffs.len() / 2] / 1.6651;
    let floor = 9.0 * sigma * sigma;
    let z: Vec<Complex<f64>> = (0..2 * n0 - 1)
        .map(|j| if j % 2 == 0 { z[j / 2] } else { 0.5 * (z[j / 2] + z[j / 2 + 1]) })
        .collect();
    let n = 2 * n0 - 1;
    let w = 2 * window;
    let score_at = |c: usize, w: usize| -> Option<f64> {
        if c < w || c + w >= n {
            return None;
        }
        let mut mean = Complex::new(0.0, 0.0);
        for k in 1..=w {
            mean += z[c - k] + z[c + k];
        }
        mean /= 2.0 * w as f64;
        let (mut num, mut dl, mut dr) = (0.0, 0.0, 0.0);
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
    println!("row {ig} upsampled candidates (s >= 0.5):");
    for c in w..n - w {
        let Some(s) = score_at(c, w) else { continue };
        if s < 0.5 {
            continue;
        }
        let idx = c as f64 * 0.5;
        let base = idx.floor() as usize;
        let frac = idx - base.min(n0 - 2) as f64;
        let i_l = map.i_l_ma[base.min(n0 - 2)]
            + frac * (map.i_l_ma[base.min(n0 - 2) + 1] - map.i_l_ma[base.min(n0 - 2)]);
        let f = truth.fluxes_at(i_l, map.i_g_ma[ig]);
        let pg = f.phi_g_delta.rem_euclid(2.0 * std::f64::consts::TAU);
        let w2 = (2 * w).min(c).min(n - 1 - c);
        let s2 = if w2 > w { score_at(c, w2).unwrap_or(f64::NAN) } else { f64::NAN };
        println!(
            "  c_up={c:3} i_l={i_l:+.3} phi_g(mod4pi)={pg:5.2} s={s:+.3} s2(w={w2})={s2:+.3}"
        );
    }
}

fn row_detect_dump(map: &FluxMap, ig: usize, window: usize) {
    let truth = toy_truth();
    let z: Vec<Complex<f64>> = (0..map.n_l()).map(|il| map.data[(il, ig)]).collect();
    let found = find_symmetry_points(&z, &map.i_l_ma, window, 0.8).unwrap();
    println!("row {ig} detector: {} centers", found.len());
    for p in &found {
        let f = truth.fluxes_at(p.i_ma, map.i_g_ma[ig]);
        let pg = f.phi_g_delta.rem_euclid(2.0 * std::f64::consts::TAU);
        println!("  i_l={:+.3} score={:.3} phi_g(mod4pi)={:5.2}", p.i_ma, p.score, pg);
    }
}

fn row_score_dump(map: &FluxMap, ig: usize, window: usize) {
    let n = map.n_l();
    let mut z: Vec<Complex<f64>> = (0..n).map(|il| map.data[(il, ig)]).collect();
    for _ in 0..2 {
        z = (0..n)
            .map(|i| {
                let a = z[i.saturating_sub(1)];
                let c = z[(i + 1).min(n - 1)];
                0.25 * (a + 2.0 * z[i] + c)
            })
            .collect();
    }
    let mut diffs: Vec<f64> = (1..n).map(|i| (z[i] - z[i - 1]).norm()).collect();
    diffs.sort_by(f64::total_cmp);
    let sigma = diffs[diffs.len() / 2] / 1.6651;
    let floor = 9.0 * sigma * sigma;
    let score_at = |c: usize, w: usize| -> Option<f64> {
        if c < w || c + w >= n {
            return None;
        }
        let mut mean = Complex::new(0.0, 0.0);
        for k in 0..=2 * w {
            mean += z[c - w + k];
        }
        mean /= (2 * w + 1) as f64;
        let (mut num, mut dl, mut dr) = (0.0, 0.0, 0.0);
        for k in 1..=w {
            let l = z[c - k] - mean;
            let r = z[c + k] - mean;
            num += (l * r.conj()).re;
            dl += l.norm_sqr();
            dr += r.norm_sqr();
        }
        let den = (dl.max(floor) * dr.max(floor)).sqrt();
        if den <= 0.0 {
            return None;
        }
        Some(num / den)
    };
    println!("row {ig}: i_g={:.4}, sigma={:.2e}", map.i_g_ma[ig], sigma);
    let truth = toy_truth();
    for c in window..n - window {
        let f = truth.fluxes_at(map.i_l_ma[c], map.i_g_ma[ig]);
        let pg = f.phi_g_delta.rem_euclid(2.0 * std::f64::consts::TAU);
        let wrapped = {
            let mut d = f.phi_g_delta.rem_euclid(std::f64::consts::TAU);
            if d > std::f64::consts::PI {
                d -= std::f64::consts::TAU;
            }
            d
        };
        if wrapped.abs() < 0.5 {
            let s1 = score_at(c, window).unwrap_or(f64::NAN);
            let w2 = (2 * window).min(c).min(n - 1 - c);
            let s2 = if w2 > window { score_at(c, w2).unwrap_or(f64::NAN) } else { f64::NAN };
            println!(
                "  c={c:3} i_l={:+.3} phi_g(mod4pi)={:5.2} |S21|={:.3} s({window})={:+.3} s({w2})={:+.3}",
                map.i_l_ma[c],
                pg,
                z[c].norm(),
                s1,
                s2
            );
        }
    }
}
