//! Bounded derivative-free fits of device parameters to measured
//! transition tables and Kerr observables.
//!
//! The optimizer is a Nelder-Mead simplex clipped into a parameter box,
//! with seeded random restarts and an evaluation cache. Parameters are
//! dimensionless multipliers on base device quantities (junction areas,
//! shunt capacitances), so bounds and sensitivities are directly
//! comparable across parameters. Tie groups force physically identical
//! elements (for instance the two quarton arms) to share one degree of
//! freedom.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::circuit::{assemble_full, assemble_reduced, CircuitSpec};
use crate::eigen::{solve_lowest, EigenOptions};
use crate::hamiltonian::{build_hamiltonian, BasisConfig};
use crate::spectra::{kerr_report, label_states, LabelOptions};
use crate::{Error, Result};

/// Which base quantity a fit parameter scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitField {
    /// Junction area, indexed in the fixed reporting order of
    /// [`CircuitSpec::junctions`]: A, quarton top, series b-i, i-j, j-a,
    /// quarton bottom, B top, B bottom.
    JunctionArea(usize),
    ShuntCapA,
    ShuntCapB,
    MutualCap,
}

/// One fit parameter: a multiplier on a base quantity, restricted to
/// `[lo, hi]`. Parameters sharing a `tie` id are locked to a common value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitParameter {
    pub field: FitField,
    pub lo: f64,
    pub hi: f64,
    #[serde(default)]
    pub tie: Option<usize>,
}

impl FitParameter {
    pub fn area(index: usize, lo: f64, hi: f64) -> Self {
        FitParameter { field: FitField::JunctionArea(index), lo, hi, tie: None }
    }

    pub fn tied(mut self, group: usize) -> Self {
        self.tie = Some(group);
        self
    }

    fn name(&self) -> String {
        match self.field {
            FitField::JunctionArea(i) => format!("area[{i}]"),
            FitField::ShuntCapA => "shunt_a".into(),
            FitField::ShuntCapB => "shunt_b".into(),
            FitField::MutualCap => "mutual_cap".into(),
        }
    }
}

/// A measured observable the fit should reproduce.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Observable {
    /// Transition energy from the ground state to `(na, nb)`, GHz.
    TransitionGhz(usize, usize),
    /// Self-Kerr of mode A, MHz.
    KerrAMhz,
    /// Self-Kerr of mode B, MHz.
    KerrBMhz,
    /// Cross-Kerr, MHz.
    CrossKerrMhz,
}

/// One target row: observable, bias point, measured value, fit weight.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FitTarget {
    pub i_bias_ma: f64,
    pub observable: Observable,
    pub value: f64,
    pub weight: f64,
}

/// Full fit specification.
#[derive(Debug, Clone)]
pub struct FitProblem {
    pub base: CircuitSpec,
    pub params: Vec<FitParameter>,
    pub targets: Vec<FitTarget>,
    /// Use the reduced two-node model (fast; adequate whenever the
    /// internal array modes are far detuned) instead of the full circuit.
    pub reduced: bool,
    pub basis: BasisConfig,
    pub eigen: EigenOptions,
    pub labels: LabelOptions,
    pub options: NelderMeadOptions,
}

/// Nelder-Mead controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Convergence: relative spread of simplex costs.
    pub rel_tol: f64,
    /// Random restarts beyond the first deterministic run.
    pub restarts: usize,
    pub seed: u64,
    /// Initial simplex step as a fraction of each box width.
    pub initial_scale: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions {
            max_evals: 400,
            rel_tol: 1e-6,
            restarts: 2,
            seed: 17,
            initial_scale: 0.15,
        }
    }
}

/// Cost assigned to a parameter point whose model evaluation fails
/// (unresolvable labels, solver failure): large enough to steer the
/// simplex away without poisoning it with infinities.
const PENALTY_COST: f64 = 1e6;

/// Fit outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    /// Parameter names in problem order.
    pub names: Vec<String>,
    /// Best multipliers, one per parameter (ties expanded).
    pub multipliers: Vec<f64>,
    /// Weighted squared-relative-error cost at the optimum.
    pub cost: f64,
    /// Model evaluations actually performed (cache misses).
    pub evals: usize,
    /// Cache hits during the search.
    pub cache_hits: usize,
    /// Cost curvature per unit fractional change of each parameter:
    /// large = stiff (well constrained), small = sloppy.
    pub sensitivities: Vec<f64>,
    /// Residual per target at the optimum: (predicted - value) / value.
    pub residuals: Vec<f64>,
}

impl FitResult {
    /// Apply the fitted multipliers back onto a copy of the base device.
    pub fn apply(&self, problem: &FitProblem) -> CircuitSpec {
        apply_multipliers(&problem.base, &problem.params, &self.multipliers)
    }
}

fn apply_multipliers(
    base: &CircuitSpec,
    params: &[FitParameter],
    mult: &[f64],
) -> CircuitSpec {
    let mut spec = base.clone();
    for (p, &m) in params.iter().zip(mult) {
        match p.field {
            FitField::JunctionArea(i) => {
                spec.junctions_mut()[i].area_um2 *= m;
            }
            FitField::ShuntCapA => spec.cap_a_ground_ff *= m,
            FitField::ShuntCapB => spec.cap_b_ground_ff *= m,
            FitField::MutualCap => spec.cap_ab_mutual_ff *= m,
        }
    }
    spec
}

/// Map free optimizer coordinates onto per-parameter multipliers,
/// expanding tie groups.
struct TieMap {
    /// For each parameter, the index of its free coordinate.
    param_to_free: Vec<usize>,
    n_free: usize,
}

impl TieMap {
    fn new(params: &[FitParameter]) -> TieMap {
        let mut group_to_free: HashMap<usize, usize> = HashMap::new();
        let mut param_to_free = Vec::with_capacity(params.len());
        let mut n_free = 0;
        for p in params {
            let idx = match p.tie {
                Some(g) => *group_to_free.entry(g).or_insert_with(|| {
                    let i = n_free;
                    n_free += 1;
                    i
                }),
                None => {
                    let i = n_free;
                    n_free += 1;
                    i
                }
            };
            param_to_free.push(idx);
        }
        TieMap { param_to_free, n_free }
    }

    fn expand(&self, free: &[f64]) -> Vec<f64> {
        self.param_to_free.iter().map(|&i| free[i]).collect()
    }

    /// Tightest bounds over each free coordinate's tied parameters.
    fn free_bounds(&self, params: &[FitParameter]) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::NEG_INFINITY; self.n_free];
        let mut hi = vec![f64::INFINITY; self.n_free];
        for (p, &i) in params.iter().zip(&self.param_to_free) {
            lo[i] = lo[i].max(p.lo);
            hi[i] = hi[i].min(p.hi);
        }
        (lo, hi)
    }
}

/// Evaluate every target for one candidate device. Shares one spectrum per
/// distinct bias point.
fn evaluate_targets(
    spec: &CircuitSpec,
    targets: &[FitTarget],
    reduced: bool,
    basis: &BasisConfig,
    eigen: &EigenOptions,
    labels: &LabelOptions,
) -> Result<Vec<f64>> {
    let mut by_bias: Vec<(f64, Vec<usize>)> = Vec::new();
    for (t_idx, t) in targets.iter().enumerate() {
        match by_bias.iter_mut().find(|(b, _)| *b == t.i_bias_ma) {
            Some((_, v)) => v.push(t_idx),
            None => by_bias.push((t.i_bias_ma, vec![t_idx])),
        }
    }
    let mut out = vec![0.0; targets.len()];
    for (bias, t_idxs) in by_bias {
        let flux = spec.bias_line.fluxes_at_bias(bias);
        let ac = if reduced {
            assemble_reduced(spec, &flux)?
        } else {
            assemble_full(spec, &flux)?
        };
        let built = build_hamiltonian(&ac, basis)?;
        let sol = solve_lowest(&built.h, eigen)?;
        let labeled = label_states(&built, &sol, labels)?;
        let needs_kerr = t_idxs
            .iter()
            .any(|&i| !matches!(targets[i].observable, Observable::TransitionGhz(..)));
        let kerr = if needs_kerr { Some(kerr_report(&labeled)?) } else { None };
        for &i in &t_idxs {
            out[i] = match targets[i].observable {
                Observable::TransitionGhz(na, nb) => {
                    labeled.transition(na, nb).ok_or_else(|| {
                        Error::Convergence(format!(
                            "state ({na},{nb}) unresolved at {bias:.4} mA"
                        ))
                    })?
                }
                Observable::KerrAMhz => kerr.as_ref().unwrap().k_a_mhz,
                Observable::KerrBMhz => kerr.as_ref().unwrap().k_b_mhz,
                Observable::CrossKerrMhz => kerr.as_ref().unwrap().chi_mhz,
            };
        }
    }
    Ok(out)
}

fn cost_from_predictions(targets: &[FitTarget], pred: &[f64]) -> f64 {
    targets
        .iter()
        .zip(pred)
        .map(|(t, &p)| {
            let denom = t.value.abs().max(1e-12);
            let r = (p - t.value) / denom;
            t.weight * r * r
        })
        .sum()
}

/// Bounded Nelder-Mead: candidate vertices are clipped into `[lo, hi]`
/// component-wise. Returns (best point, best cost, evaluations used).
pub fn nelder_mead_bounded<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    initial_step: &[f64],
    max_evals: usize,
    rel_tol: f64,
) -> (Vec<f64>, f64, usize) {
    let n = x0.len();
    let clip = |x: &mut Vec<f64>| {
        for k in 0..n {
            x[k] = x[k].clamp(lo[k], hi[k]);
        }
    };
    let mut evals = 0usize;
    let mut eval = |x: &Vec<f64>, evals: &mut usize| -> f64 {
        *evals += 1;
        f(x)
    };

    // Initial simplex: x0 plus one step along each coordinate (reflected
    // inward when the step would leave the box).
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let mut x0v = x0.to_vec();
    clip(&mut x0v);
    let c0 = eval(&x0v, &mut evals);
    simplex.push((x0v.clone(), c0));
    for k in 0..n {
        let mut v = x0v.clone();
        let step = if v[k] + initial_step[k] <= hi[k] { initial_step[k] } else { -initial_step[k] };
        v[k] = (v[k] + step).clamp(lo[k], hi[k]);
        let c = eval(&v, &mut evals);
        simplex.push((v, c));
    }

    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        let spread = (worst - best).abs() / best.abs().max(1e-300);
        if spread < rel_tol {
            break;
        }
        // Centroid of all but the worst vertex.
        let mut centroid = vec![0.0; n];
        for v in &simplex[..n] {
            for k in 0..n {
                centroid[k] += v.0[k] / n as f64;
            }
        }
        let worst_x = simplex[n].0.clone();
        let second_worst = simplex[n - 1].1;
        let make = |alpha: f64| -> Vec<f64> {
            let mut x: Vec<f64> =
                (0..n).map(|k| centroid[k] + alpha * (centroid[k] - worst_x[k])).collect();
            clip(&mut x);
            x
        };
        let xr = make(1.0);
        let cr = eval(&xr, &mut evals);
        if cr < best {
            // Try expanding.
            let xe = make(2.0);
            let ce = eval(&xe, &mut evals);
            simplex[n] = if ce < cr { (xe, ce) } else { (xr, cr) };
        } else if cr < second_worst {
            simplex[n] = (xr, cr);
        } else {
            // Contract (outside if the reflection helped at all).
            let xc = if cr < worst { make(0.5) } else { make(-0.5) };
            let cc = eval(&xc, &mut evals);
            if cc < worst.min(cr) {
                simplex[n] = (xc, cc);
            } else {
                // Shrink toward the best vertex.
                let best_x = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    for k in 0..n {
                        v.0[k] = best_x[k] + 0.5 * (v.0[k] - best_x[k]);
                    }
                    clip(&mut v.0);
                    v.1 = eval(&v.0, &mut evals);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, c) = simplex.swap_remove(0);
    (x, c, evals)
}

/// Run the fit: deterministic start at multiplier 1, then seeded random
/// restarts inside the box, keeping the best optimum. Evaluations are
/// cached on exact parameter bits so restarts revisiting the same simplex
/// points are free.
pub fn fit(problem: &FitProblem) -> Result<FitResult> {
    if problem.params.is_empty() {
        return Err(Error::Config("fit needs at least one parameter".into()));
    }
    if problem.targets.is_empty() {
        return Err(Error::Config("fit needs at least one target".into()));
    }
    for p in &problem.params {
        if !(p.lo < p.hi) {
            return Err(Error::Config(format!("parameter {}: empty box", p.name())));
        }
        if let FitField::JunctionArea(i) = p.field {
            if i >= 8 {
                return Err(Error::Config(format!("junction index {i} out of range")));
            }
        }
    }
    let ties = TieMap::new(&problem.params);
    let (lo, hi) = ties.free_bounds(&problem.params);
    for (l, h) in lo.iter().zip(&hi) {
        if !(l < h) {
            return Err(Error::Config("tied parameters have incompatible boxes".into()));
        }
    }

    let mut cache: HashMap<Vec<u64>, f64> = HashMap::new();
    let mut evals = 0usize;
    let mut cache_hits = 0usize;
    let mut cost_at = |free: &[f64], evals: &mut usize, hits: &mut usize| -> f64 {
        let key: Vec<u64> = free.iter().map(|v| v.to_bits()).collect();
        if let Some(&c) = cache.get(&key) {
            *hits += 1;
            return c;
        }
        let mult = ties.expand(free);
        let spec = apply_multipliers(&problem.base, &problem.params, &mult);
        let c = match spec.validate().and_then(|_| {
            evaluate_targets(
                &spec,
                &problem.targets,
                problem.reduced,
                &problem.basis,
                &problem.eigen,
                &problem.labels,
            )
        }) {
            Ok(pred) => cost_from_predictions(&problem.targets, &pred),
            Err(_) => PENALTY_COST,
        };
        *evals += 1;
        cache.insert(key, c);
        c
    };

    let opts = &problem.options;
    let steps: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| opts.initial_scale * (h - l)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for restart in 0..=opts.restarts {
        let x0: Vec<f64> = if restart == 0 {
            lo.iter().zip(&hi).map(|(l, h)| 1.0f64.clamp(*l, *h)).collect()
        } else {
            lo.iter().zip(&hi).map(|(l, h)| rng.random_range(*l..*h)).collect()
        };
        let (x, c, _) = nelder_mead_bounded(
            |v| cost_at(v, &mut evals, &mut cache_hits),
            &x0,
            &lo,
            &hi,
            &steps,
            opts.max_evals,
            opts.rel_tol,
        );
        if best.as_ref().is_none_or(|(_, bc)| c < *bc) {
            best = Some((x, c));
        }
    }
    let (free, cost) = best.unwrap();

    // Sensitivities: cost curvature along each free coordinate for a
    // 0.1% fractional change, reported per parameter (ties share values).
    let mut free_sens = vec![0.0; ties.n_free];
    let h = 1e-3;
    for k in 0..ties.n_free {
        let mut up = free.clone();
        let mut dn = free.clone();
        up[k] = (up[k] * (1.0 + h)).min(hi[k]);
        dn[k] = (dn[k] * (1.0 - h)).max(lo[k]);
        let cu = cost_at(&up, &mut evals, &mut cache_hits);
        let cd = cost_at(&dn, &mut evals, &mut cache_hits);
        free_sens[k] = (cu + cd - 2.0 * cost).abs() / (h * h);
    }

    let mult = ties.expand(&free);
    let spec = apply_multipliers(&problem.base, &problem.params, &mult);
    let residuals = match evaluate_targets(
        &spec,
        &problem.targets,
        problem.reduced,
        &problem.basis,
        &problem.eigen,
        &problem.labels,
    ) {
        Ok(pred) => problem
            .targets
            .iter()
            .zip(&pred)
            .map(|(t, &p)| (p - t.value) / t.value.abs().max(1e-12))
            .collect(),
        Err(_) => vec![f64::NAN; problem.targets.len()],
    };

    Ok(FitResult {
        names: problem.params.iter().map(|p| p.name()).collect(),
        multipliers: mult,
        cost,
        evals,
        cache_hits,
        sensitivities: ties.param_to_free.iter().map(|&i| free_sens[i]).collect(),
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::test_device;
    use approx::assert_relative_eq;

    #[test]
    fn nelder_mead_finds_rosenbrock_minimum_in_box() {
        let rosen = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let (x, c, _) = nelder_mead_bounded(
            rosen,
            &[-1.2, 1.0],
            &[-2.0, -2.0],
            &[2.0, 2.0],
            &[0.3, 0.3],
            4000,
            1e-14,
        );
        assert_relative_eq!(x[0], 1.0, max_relative = 1e-3);
        assert_relative_eq!(x[1], 1.0, max_relative = 2e-3);
        assert!(c < 1e-7);
    }

    #[test]
    fn nelder_mead_respects_bounds() {
        // Unconstrained minimum at (3, -5) lies outside the box.
        let f = |x: &[f64]| (x[0] - 3.0).powi(2) + (x[1] + 5.0).powi(2);
        let (x, _, _) = nelder_mead_bounded(
            f,
            &[0.0, 0.0],
            &[-1.0, -1.0],
            &[1.0, 1.0],
            &[0.4, 0.4],
            2000,
            1e-12,
        );
        assert!(x[0] <= 1.0 + 1e-12 && x[1] >= -1.0 - 1e-12);
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-6);
        assert_relative_eq!(x[1], -1.0, epsilon = 1e-6);
    }

    /// Synthetic self-consistency: perturb two junction areas of the
    /// device, generate noiseless observables from the perturbed truth,
    /// then fit starting from the unperturbed base. The optimizer must
    /// recover the truth multipliers.
    #[test]
    fn fit_recovers_synthetic_junction_areas() {
        let base = test_device();
        let truth_mults = [1.04, 0.97];
        let params = vec![
            FitParameter::area(0, 0.85, 1.15), // transmon A junction
            FitParameter::area(7, 0.85, 1.15), // B SQUID bottom arm
        ];
        let truth = apply_multipliers(&base, &params, &truth_mults);

        let basis = BasisConfig::oscillator(&[11, 11]);
        let eigen = EigenOptions::lowest(8);
        let labels = LabelOptions { threshold: 0.3, ..Default::default() };
        let biases = [0.9, 1.35];
        let mut targets = Vec::new();
        for &b in &biases {
            let flux = truth.bias_line.fluxes_at_bias(b);
            let ac = assemble_reduced(&truth, &flux).unwrap();
            let built = build_hamiltonian(&ac, &basis).unwrap();
            let sol = solve_lowest(&built.h, &eigen).unwrap();
            let labeled = label_states(&built, &sol, &labels).unwrap();
            for (na, nb) in [(1usize, 0usize), (0, 1)] {
                targets.push(FitTarget {
                    i_bias_ma: b,
                    observable: Observable::TransitionGhz(na, nb),
                    value: labeled.transition(na, nb).unwrap(),
                    weight: 1.0,
                });
            }
        }

        let problem = FitProblem {
            base,
            params,
            targets,
            reduced: true,
            basis,
            eigen,
            labels,
            options: NelderMeadOptions {
                max_evals: 220,
                restarts: 0,
                ..Default::default()
            },
        };
        let result = fit(&problem).unwrap();
        assert!(result.cost < 1e-9, "cost {:.3e}", result.cost);
        assert_relative_eq!(result.multipliers[0], truth_mults[0], max_relative = 2e-3);
        assert_relative_eq!(result.multipliers[1], truth_mults[1], max_relative = 2e-3);
        for r in &result.residuals {
            assert!(r.abs() < 1e-4);
        }
    }

    #[test]
    fn tie_groups_share_one_degree_of_freedom() {
        let params = vec![
            FitParameter::area(1, 0.9, 1.1).tied(0),
            FitParameter::area(5, 0.9, 1.1).tied(0),
            FitParameter::area(0, 0.8, 1.2),
        ];
        let ties = TieMap::new(&params);
        assert_eq!(ties.n_free, 2);
        let mult = ties.expand(&[1.07, 0.93]);
        assert_eq!(mult, vec![1.07, 1.07, 0.93]);
        let (lo, hi) = ties.free_bounds(&params);
        assert_eq!(lo, vec![0.9, 0.8]);
        assert_eq!(hi, vec![1.1, 1.2]);
    }

    #[test]
    fn cache_skips_repeated_points() {
        use std::cell::Cell;
        let calls = Cell::new(0usize);
        let mut cache: HashMap<Vec<u64>, f64> = HashMap::new();
        let mut lookup = |x: &[f64]| -> f64 {
            let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
            *cache.entry(key).or_insert_with(|| {
                calls.set(calls.get() + 1);
                x[0] * x[0]
            })
        };
        for _ in 0..3 {
            lookup(&[2.0]);
            lookup(&[3.0]);
        }
        assert_eq!(calls.get(), 2);
    }

    #[test]
    fn failed_evaluations_are_penalized_not_fatal() {
        // A one-target problem at a bias the driver maps to wild fluxes is
        // still expected to return (with penalty or real costs), never to
        // error out of the whole fit.
        let base = test_device();
        let problem = FitProblem {
            base,
            params: vec![FitParameter::area(0, 0.5, 1.5)],
            targets: vec![FitTarget {
                i_bias_ma: 1.2,
                observable: Observable::TransitionGhz(1, 0),
                value: 4.3,
                weight: 1.0,
            }],
            reduced: true,
            basis: BasisConfig::oscillator(&[9, 9]),
            eigen: EigenOptions::lowest(4),
            // Impossible threshold: every labeling "fails", every cost is
            // the penalty.
            labels: LabelOptions { threshold: 1.5, ..Default::default() },
            options: NelderMeadOptions { max_evals: 30, restarts: 0, ..Default::default() },
        };
        let result = fit(&problem).unwrap();
        assert_eq!(result.cost, PENALTY_COST);
    }
}
