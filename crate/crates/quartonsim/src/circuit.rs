//! Circuit-level bookkeeping: junction parameters, capacitance network,
//! flux-dependent branch list, and the quartic expansion of the coupler.
//!
//! Node ordering is fixed as `[a, b, i, j]`: the two transmon islands first,
//! then the two internal nodes of the three-junction series array. The full
//! potential is a sum of eight cosine branches (each junction or SQUID-arm
//! pair contributes one cosine and, for asymmetric pairs, one sine folded
//! into a phase-shifted cosine):
//!
//! ```text
//! U(φ) = -(E_b1+E_b2) cos(φ_s/2) cos(φ_b)  - (E_b2-E_b1) sin(φ_s/2) sin(φ_b)
//!        - E_s1 cos(φ_b-φ_i) - E_s2 cos(φ_i-φ_j) - E_s3 cos(φ_j-φ_a)
//!        - (E_q1+E_q2) cos(φ_qΣ/2) cos(φ_a-φ_b-φ_qΔ/2)
//!        - (E_q2-E_q1) sin(φ_qΣ/2) sin(φ_a-φ_b-φ_qΔ/2)
//!        - E_Ja cos(φ_a-φ_gΔ/2)
//! ```
//!
//! Kinetic term: `4 nᵀ E_C n` with `E_C = (e²/2h) C⁻¹`, i.e. 19.37 GHz·fF
//! divided by capacitance.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Node indices in every 4-node matrix/vector.
pub const NODE_A: usize = 0;
pub const NODE_B: usize = 1;
pub const NODE_I: usize = 2;
pub const NODE_J: usize = 3;

/// Elementary charge (C) and Planck constant (J·s), exact SI values.
const E_CHARGE: f64 = 1.602_176_634e-19;
const H_PLANCK: f64 = 6.626_070_15e-34;

/// Charging-energy conversion: `E_C[GHz] = EC_GHZ_FF / C[fF]` for a single
/// capacitor, `e²/2h` in GHz·fF. Numerically 19.37022.
pub const EC_GHZ_FF: f64 = E_CHARGE * E_CHARGE / (2.0 * H_PLANCK) * 1e6;

/// Josephson-energy conversion: `E_J[GHz] = EJ_GHZ_PER_UA * I_c[uA]`,
/// `Φ₀/(2πh) = 1/(4πe)` scaled to GHz/uA. Numerically 496.6833.
pub const EJ_GHZ_PER_UA: f64 = 1e-15 / (4.0 * std::f64::consts::PI * E_CHARGE);

/// One physical Josephson junction: geometry plus process constants.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct JunctionSpec {
    pub name: String,
    /// Drawn junction area in um^2.
    pub area_um2: f64,
    /// Critical-current density in uA/um^2.
    pub jc_ua_per_um2: f64,
    /// Self-capacitance per area in fF/um^2 (parallel-plate estimate).
    pub cap_ff_per_um2: f64,
}

impl JunctionSpec {
    pub fn new(name: &str, area_um2: f64, jc_ua_per_um2: f64, cap_ff_per_um2: f64) -> Self {
        Self { name: name.to_string(), area_um2, jc_ua_per_um2, cap_ff_per_um2 }
    }

    /// Critical current in uA.
    pub fn ic_ua(&self) -> f64 {
        self.area_um2 * self.jc_ua_per_um2
    }

    /// Josephson energy in GHz.
    pub fn ej_ghz(&self) -> f64 {
        EJ_GHZ_PER_UA * self.ic_ua()
    }

    /// Junction self-capacitance in fF.
    pub fn cap_ff(&self) -> f64 {
        self.area_um2 * self.cap_ff_per_um2
    }

    fn validate(&self) -> Result<()> {
        if !(self.area_um2 > 0.0 && self.jc_ua_per_um2 > 0.0 && self.cap_ff_per_um2 >= 0.0) {
            return Err(Error::Config(format!(
                "junction `{}`: area and J_c must be positive, cap/area non-negative",
                self.name
            )));
        }
        Ok(())
    }
}

/// Readout resonator attached to one transmon. The resonator is never a
/// Hamiltonian mode; it enters through perturbative dispersive shifts only.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReadoutParams {
    /// Bare resonator frequency in GHz.
    pub f0_ghz: f64,
    /// Linear transmon-resonator coupling in MHz.
    pub g_mhz: f64,
    /// Design detuning transmon-resonator in MHz. When absent, shift
    /// formulas use the detuning computed from the current spectrum.
    #[serde(default)]
    pub delta_mhz: Option<f64>,
    /// Internal quality factor.
    pub q_internal: f64,
    /// Coupling (external) quality factor.
    pub q_coupling: f64,
}

/// Reduced fluxes threading the four loops, in radians (2π = one flux
/// quantum through the corresponding loop). These enter the potential with
/// the half-angle conventions shown in the module docs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct FluxState {
    /// Transmon-B SQUID loop.
    pub phi_s: f64,
    /// Quarton common (sum) flux.
    pub phi_q_sigma: f64,
    /// Quarton differential flux.
    pub phi_q_delta: f64,
    /// Ground-loop differential flux.
    pub phi_g_delta: f64,
}

impl FluxState {
    pub const ZERO: FluxState =
        FluxState { phi_s: 0.0, phi_q_sigma: 0.0, phi_q_delta: 0.0, phi_g_delta: 0.0 };

    pub fn as_array(&self) -> [f64; 4] {
        [self.phi_s, self.phi_q_sigma, self.phi_q_delta, self.phi_g_delta]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        FluxState { phi_s: v[0], phi_q_sigma: v[1], phi_q_delta: v[2], phi_g_delta: v[3] }
    }
}

/// Affine map from bias-line currents to the four fluxes:
/// `flux = transform · (I_l, I_g) + offsets`, currents in mA.
///
/// `line_slope`/`line_intercept_ma` define the calibrated operating line
/// `I_g = slope · I_l + intercept` along which the single coordinate
/// "I_bias" equals `I_g`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BiasLineModel {
    /// Rows ordered as [phi_s, phi_q_sigma, phi_q_delta, phi_g_delta],
    /// columns as [I_l, I_g], entries in rad/mA.
    pub transform: [[f64; 2]; 4],
    /// Flux at zero applied current, radians.
    pub offsets: [f64; 4],
    /// Slope of the operating line (dimensionless, dI_g/dI_l).
    pub line_slope: f64,
    /// Intercept of the operating line in mA.
    pub line_intercept_ma: f64,
}

impl BiasLineModel {
    /// Fluxes at explicit coil currents (mA).
    pub fn fluxes_at(&self, i_l_ma: f64, i_g_ma: f64) -> FluxState {
        let mut v = [0.0; 4];
        for (k, row) in self.transform.iter().enumerate() {
            v[k] = row[0] * i_l_ma + row[1] * i_g_ma + self.offsets[k];
        }
        FluxState::from_array(v)
    }

    /// Coil currents on the operating line for a given bias coordinate
    /// (I_bias = I_g on the line).
    pub fn line_currents(&self, i_bias_ma: f64) -> (f64, f64) {
        let i_l = (i_bias_ma - self.line_intercept_ma) / self.line_slope;
        (i_l, i_bias_ma)
    }

    /// Fluxes on the operating line.
    pub fn fluxes_at_bias(&self, i_bias_ma: f64) -> FluxState {
        let (i_l, i_g) = self.line_currents(i_bias_ma);
        self.fluxes_at(i_l, i_g)
    }

    fn validate(&self) -> Result<()> {
        if self.line_slope == 0.0 {
            return Err(Error::Config("bias line: slope must be nonzero".into()));
        }
        Ok(())
    }
}

/// Full device description: the eight junctions in their fixed circuit
/// roles, the capacitance network, readout resonators, and the bias-line
/// flux model. Serializes to/from the on-disk device file (TOML or JSON).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CircuitSpec {
    /// Transmon A's single junction (node a to ground).
    pub transmon_a: JunctionSpec,
    /// Transmon B SQUID arms (node b to ground): `E_b1` and `E_b2`.
    pub squid_b_top: JunctionSpec,
    pub squid_b_bottom: JunctionSpec,
    /// Quarton arm junctions (a to b): `E_q1` and `E_q2`.
    pub quarton_top: JunctionSpec,
    pub quarton_bottom: JunctionSpec,
    /// Series array: [b-i, i-j, j-a].
    pub series: [JunctionSpec; 3],
    /// Island shunt capacitances to ground, fF.
    pub cap_a_ground_ff: f64,
    pub cap_b_ground_ff: f64,
    /// Direct island-island mutual capacitance, fF.
    pub cap_ab_mutual_ff: f64,
    pub readout_a: ReadoutParams,
    pub readout_b: ReadoutParams,
    pub bias_line: BiasLineModel,
}

impl CircuitSpec {
    pub fn validate(&self) -> Result<()> {
        for j in self.junctions() {
            j.validate()?;
        }
        if !(self.cap_a_ground_ff > 0.0 && self.cap_b_ground_ff > 0.0) {
            return Err(Error::Config("island shunt capacitances must be positive".into()));
        }
        if self.cap_ab_mutual_ff < 0.0 {
            return Err(Error::Config("mutual capacitance must be non-negative".into()));
        }
        self.bias_line.validate()
    }

    /// All junctions in a fixed reporting order (the order used by fit
    /// parameter vectors): A, quarton top, series b-i, i-j, j-a, quarton
    /// bottom, B top, B bottom.
    pub fn junctions(&self) -> [&JunctionSpec; 8] {
        [
            &self.transmon_a,
            &self.quarton_top,
            &self.series[0],
            &self.series[1],
            &self.series[2],
            &self.quarton_bottom,
            &self.squid_b_top,
            &self.squid_b_bottom,
        ]
    }

    pub fn junctions_mut(&mut self) -> [&mut JunctionSpec; 8] {
        let [s0, s1, s2] = &mut self.series;
        [
            &mut self.transmon_a,
            &mut self.quarton_top,
            s0,
            s1,
            s2,
            &mut self.quarton_bottom,
            &mut self.squid_b_top,
            &mut self.squid_b_bottom,
        ]
    }

    /// Load from a TOML or JSON device file (decided by extension, falling
    /// back to trying both).
    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        let spec: CircuitSpec = match ext {
            "json" => serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            _ => toml::from_str(&text).or_else(|te| {
                serde_json::from_str(&text)
                    .map_err(|_| Error::Config(format!("{}: {te}", path.display())))
            })?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Maxwell capacitance matrix over nodes [a, b, i, j] in fF.
    ///
    /// Diagonal entries are total capacitance attached to the node; the
    /// off-diagonals are minus the branch capacitance between node pairs.
    /// Junction self-capacitances sit across their own branches.
    pub fn capacitance_matrix_ff(&self) -> Matrix4<f64> {
        let c_ja = self.transmon_a.cap_ff();
        let c_jb = self.squid_b_top.cap_ff() + self.squid_b_bottom.cap_ff();
        let c_q = self.quarton_top.cap_ff() + self.quarton_bottom.cap_ff();
        let [c_s1, c_s2, c_s3] =
            [self.series[0].cap_ff(), self.series[1].cap_ff(), self.series[2].cap_ff()];
        let c_ab = self.cap_ab_mutual_ff + c_q;

        let mut c = Matrix4::zeros();
        c[(NODE_A, NODE_A)] = self.cap_a_ground_ff + c_ja + c_ab + c_s3;
        c[(NODE_B, NODE_B)] = self.cap_b_ground_ff + c_jb + c_ab + c_s1;
        c[(NODE_I, NODE_I)] = c_s1 + c_s2;
        c[(NODE_J, NODE_J)] = c_s2 + c_s3;
        c[(NODE_A, NODE_B)] = -c_ab;
        c[(NODE_B, NODE_A)] = -c_ab;
        c[(NODE_B, NODE_I)] = -c_s1;
        c[(NODE_I, NODE_B)] = -c_s1;
        c[(NODE_I, NODE_J)] = -c_s2;
        c[(NODE_J, NODE_I)] = -c_s2;
        c[(NODE_J, NODE_A)] = -c_s3;
        c[(NODE_A, NODE_J)] = -c_s3;
        c
    }

    /// Mean series-array Josephson energy in GHz (the three junctions are
    /// designed identical; the reduced two-node model uses their mean).
    pub fn series_mean_ej_ghz(&self) -> f64 {
        self.series.iter().map(|j| j.ej_ghz()).sum::<f64>() / 3.0
    }

    /// Harmonic-mean effective series energy `E_h = 1/Σ(1/E_si)` in GHz:
    /// the linearized (inductive) strength of the three-junction chain.
    pub fn series_harmonic_ej_ghz(&self) -> f64 {
        1.0 / self.series.iter().map(|j| 1.0 / j.ej_ghz()).sum::<f64>()
    }
}

/// Junction energies and the charging-energy matrix for one device.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyTable {
    pub ej_a_ghz: f64,
    pub ej_b1_ghz: f64,
    pub ej_b2_ghz: f64,
    pub ej_q1_ghz: f64,
    pub ej_q2_ghz: f64,
    pub ej_series_ghz: [f64; 3],
    /// `E_C = (e²/2h) C⁻¹` over nodes [a, b, i, j], GHz.
    pub ec_ghz: Matrix4<f64>,
    /// The capacitance matrix that was inverted, fF.
    pub cap_ff: Matrix4<f64>,
}

impl EnergyTable {
    pub fn from_spec(spec: &CircuitSpec) -> Result<Self> {
        spec.validate()?;
        let cap = spec.capacitance_matrix_ff();
        let inv = cap
            .try_inverse()
            .ok_or_else(|| Error::Solver("capacitance matrix is singular".into()))?;
        Ok(EnergyTable {
            ej_a_ghz: spec.transmon_a.ej_ghz(),
            ej_b1_ghz: spec.squid_b_top.ej_ghz(),
            ej_b2_ghz: spec.squid_b_bottom.ej_ghz(),
            ej_q1_ghz: spec.quarton_top.ej_ghz(),
            ej_q2_ghz: spec.quarton_bottom.ej_ghz(),
            ej_series_ghz: [
                spec.series[0].ej_ghz(),
                spec.series[1].ej_ghz(),
                spec.series[2].ej_ghz(),
            ],
            ec_ghz: inv * EC_GHZ_FF,
            cap_ff: cap,
        })
    }
}

/// One cosine branch of the potential: `e_ghz · cos(weightsᵀ φ + offset)`.
/// Sine terms are folded in as cosines with a -π/2 offset.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchTerm {
    pub e_ghz: f64,
    pub weights: DVector<f64>,
    pub offset_rad: f64,
}

impl BranchTerm {
    fn new(e_ghz: f64, weights: DVector<f64>, offset_rad: f64) -> Self {
        BranchTerm { e_ghz, weights, offset_rad }
    }
}

/// A circuit reduced to its node variables: charging matrix plus branch
/// list, with flux already folded into coefficients and offsets. Both the
/// full 4-node device and the 2-node reduced model assemble into this form,
/// and everything downstream (potential evaluation, minimum search, basis
/// construction) consumes it.
#[derive(Debug, Clone)]
pub struct AssembledCircuit {
    /// Charging-energy matrix, GHz, `dim x dim`.
    pub ec_ghz: DMatrix<f64>,
    pub branches: Vec<BranchTerm>,
    pub node_names: Vec<&'static str>,
}

impl AssembledCircuit {
    pub fn dim(&self) -> usize {
        self.ec_ghz.nrows()
    }

    /// Potential energy in GHz at node phases `phi` (radians).
    pub fn potential(&self, phi: &[f64]) -> f64 {
        self.branches
            .iter()
            .map(|b| {
                let arg: f64 =
                    b.weights.iter().zip(phi).map(|(w, p)| w * p).sum::<f64>() + b.offset_rad;
                b.e_ghz * arg.cos()
            })
            .sum()
    }

    /// Gradient of the potential, GHz/rad.
    pub fn potential_gradient(&self, phi: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim());
        for b in &self.branches {
            let arg: f64 =
                b.weights.iter().zip(phi).map(|(w, p)| w * p).sum::<f64>() + b.offset_rad;
            let s = -b.e_ghz * arg.sin();
            g.axpy(s, &b.weights, 1.0);
        }
        g
    }

    /// Hessian of the potential, GHz/rad^2.
    pub fn potential_hessian(&self, phi: &[f64]) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.dim(), self.dim());
        for b in &self.branches {
            let arg: f64 =
                b.weights.iter().zip(phi).map(|(w, p)| w * p).sum::<f64>() + b.offset_rad;
            let c = -b.e_ghz * arg.cos();
            h.syger(c, &b.weights, &b.weights, 1.0);
        }
        // syger fills the lower triangle; mirror it.
        for r in 0..self.dim() {
            for c in (r + 1)..self.dim() {
                h[(r, c)] = h[(c, r)];
            }
        }
        h
    }
}

/// Assemble the full 4-node circuit at a flux point: all eight branches,
/// including the SQUID/quarton asymmetry sine terms and the `phi_g_delta/2`
/// offset on the E_Ja branch.
pub fn assemble_full(spec: &CircuitSpec, flux: &FluxState) -> Result<AssembledCircuit> {
    let et = EnergyTable::from_spec(spec)?;
    let e_a = DVector::from_column_slice(&[1.0, 0.0, 0.0, 0.0]);
    let e_b = DVector::from_column_slice(&[0.0, 1.0, 0.0, 0.0]);
    let e_i = DVector::from_column_slice(&[0.0, 0.0, 1.0, 0.0]);
    let e_j = DVector::from_column_slice(&[0.0, 0.0, 0.0, 1.0]);
    let half = std::f64::consts::FRAC_PI_2;

    let branches = vec![
        // Transmon B SQUID, symmetric and asymmetric parts.
        BranchTerm::new(-(et.ej_b1_ghz + et.ej_b2_ghz) * (flux.phi_s / 2.0).cos(), e_b.clone(), 0.0),
        BranchTerm::new(-(et.ej_b2_ghz - et.ej_b1_ghz) * (flux.phi_s / 2.0).sin(), e_b.clone(), -half),
        // Series array b-i, i-j, j-a.
        BranchTerm::new(-et.ej_series_ghz[0], &e_b - &e_i, 0.0),
        BranchTerm::new(-et.ej_series_ghz[1], &e_i - &e_j, 0.0),
        BranchTerm::new(-et.ej_series_ghz[2], &e_j - &e_a, 0.0),
        // Quarton arms, symmetric and asymmetric parts.
        BranchTerm::new(
            -(et.ej_q1_ghz + et.ej_q2_ghz) * (flux.phi_q_sigma / 2.0).cos(),
            &e_a - &e_b,
            -flux.phi_q_delta / 2.0,
        ),
        BranchTerm::new(
            -(et.ej_q2_ghz - et.ej_q1_ghz) * (flux.phi_q_sigma / 2.0).sin(),
            &e_a - &e_b,
            -flux.phi_q_delta / 2.0 - half,
        ),
        // Transmon A junction with the ground-loop offset.
        BranchTerm::new(-et.ej_a_ghz, e_a.clone(), -flux.phi_g_delta / 2.0),
    ];

    Ok(AssembledCircuit {
        ec_ghz: DMatrix::from_fn(4, 4, |r, c| et.ec_ghz[(r, c)]),
        branches,
        node_names: vec!["a", "b", "i", "j"],
    })
}

/// Assemble the reduced 2-node model: internal nodes eliminated from the
/// capacitance network by Schur complement, the series array replaced by
/// the single branch `-3 Ē_J cos((φ_a-φ_b)/3)` with Ē_J the mean series
/// junction energy.
pub fn assemble_reduced(spec: &CircuitSpec, flux: &FluxState) -> Result<AssembledCircuit> {
    let et = EnergyTable::from_spec(spec)?;
    let cap = et.cap_ff;
    // Schur complement over the internal block: C_red = C_AA - C_AI C_II^-1 C_IA.
    let c_aa = Matrix2::new(
        cap[(NODE_A, NODE_A)],
        cap[(NODE_A, NODE_B)],
        cap[(NODE_B, NODE_A)],
        cap[(NODE_B, NODE_B)],
    );
    let c_ai = Matrix2::new(
        cap[(NODE_A, NODE_I)],
        cap[(NODE_A, NODE_J)],
        cap[(NODE_B, NODE_I)],
        cap[(NODE_B, NODE_J)],
    );
    let c_ii = Matrix2::new(
        cap[(NODE_I, NODE_I)],
        cap[(NODE_I, NODE_J)],
        cap[(NODE_J, NODE_I)],
        cap[(NODE_J, NODE_J)],
    );
    let c_ii_inv = c_ii
        .try_inverse()
        .ok_or_else(|| Error::Solver("internal capacitance block is singular".into()))?;
    let c_red = c_aa - c_ai * c_ii_inv * c_ai.transpose();
    let ec_red = c_red
        .try_inverse()
        .ok_or_else(|| Error::Solver("reduced capacitance matrix is singular".into()))?
        * EC_GHZ_FF;

    let e_a = DVector::from_column_slice(&[1.0, 0.0]);
    let e_b = DVector::from_column_slice(&[0.0, 1.0]);
    let half = std::f64::consts::FRAC_PI_2;
    let ej_series = spec.series_mean_ej_ghz();

    let branches = vec![
        BranchTerm::new(-(et.ej_b1_ghz + et.ej_b2_ghz) * (flux.phi_s / 2.0).cos(), e_b.clone(), 0.0),
        BranchTerm::new(-(et.ej_b2_ghz - et.ej_b1_ghz) * (flux.phi_s / 2.0).sin(), e_b.clone(), -half),
        BranchTerm::new(-3.0 * ej_series, (&e_a - &e_b) / 3.0, 0.0),
        BranchTerm::new(
            -(et.ej_q1_ghz + et.ej_q2_ghz) * (flux.phi_q_sigma / 2.0).cos(),
            &e_a - &e_b,
            -flux.phi_q_delta / 2.0,
        ),
        BranchTerm::new(
            -(et.ej_q2_ghz - et.ej_q1_ghz) * (flux.phi_q_sigma / 2.0).sin(),
            &e_a - &e_b,
            -flux.phi_q_delta / 2.0 - half,
        ),
        BranchTerm::new(-et.ej_a_ghz, e_a.clone(), -flux.phi_g_delta / 2.0),
    ];

    Ok(AssembledCircuit {
        ec_ghz: DMatrix::from_fn(2, 2, |r, c| ec_red[(r, c)]),
        branches,
        node_names: vec!["a", "b"],
    })
}

/// Taylor coefficients of the coupler branch (quarton arms plus series
/// array, internal phases relaxed) around `φ_a-φ_b = 0`, with the quarton
/// condition diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuarticExpansion {
    /// Coefficient of `(φ_a-φ_b)²`, GHz.
    pub c2_ghz: f64,
    /// Coefficient of `(φ_a-φ_b)⁴`, GHz.
    pub c4_ghz: f64,
    /// The flux-tunable quarton strength normalized to the linearized series
    /// energy: `(E_q1+E_q2) cos(φ_qΣ/2) / (3 E_h)`. The pure-quartic
    /// condition is `alpha_cos = -1/3` (then `c2 = 0` and, for equal series
    /// junctions, `24 c4 = (8/27)·3E_h`).
    pub alpha_cos: f64,
    /// Linearized series-array energy `E_h`, GHz.
    pub e_h_ghz: f64,
}

/// Quartic expansion of the coupler branch. Requires `phi_q_delta = 0`
/// (the expansion is taken about `φ_a-φ_b = 0`, which is only an even
/// point of the quarton cosine at zero differential flux).
///
/// Derivation: minimizing the series array `Σ -E_sk cos(θ_k)` at fixed
/// total phase `x` gives a loop current λ with `x(λ) = Σ asin(λ/E_sk)`;
/// series-reverting yields `U_series(x) = x²/(2 S1) - S3 x⁴/(24 S1⁴) + ...`
/// with `S_m = Σ E_sk^-m`. Adding the quarton arms `-E_qΣ cos x` gives
/// `c2 = (E_h + E_qΣ)/2`, `c4 = -S3 E_h⁴/24 - E_qΣ/24`, `E_h = 1/S1`.
pub fn quartic_expansion(spec: &CircuitSpec, flux: &FluxState) -> Result<QuarticExpansion> {
    if flux.phi_q_delta != 0.0 {
        return Err(Error::Config(
            "quartic_expansion requires phi_q_delta = 0 (expansion about φ_a-φ_b = 0)".into(),
        ));
    }
    let e_s: Vec<f64> = spec.series.iter().map(|j| j.ej_ghz()).collect();
    let s1: f64 = e_s.iter().map(|e| 1.0 / e).sum();
    let s3: f64 = e_s.iter().map(|e| 1.0 / (e * e * e)).sum();
    let e_h = 1.0 / s1;
    let e_q_sigma = (spec.quarton_top.ej_ghz() + spec.quarton_bottom.ej_ghz())
        * (flux.phi_q_sigma / 2.0).cos();
    Ok(QuarticExpansion {
        c2_ghz: 0.5 * (e_h + e_q_sigma),
        c4_ghz: -s3 * e_h.powi(4) / 24.0 - e_q_sigma / 24.0,
        alpha_cos: e_q_sigma / (3.0 * e_h),
        e_h_ghz: e_h,
    })
}

/// The `phi_q_sigma` value in `[0, 2π]` solving the quarton condition
/// `c2 = 0` (equivalently `alpha_cos = -1/3`), if the quarton arms are
/// strong enough to cancel the series array.
pub fn quarton_condition_flux(spec: &CircuitSpec) -> Option<f64> {
    let e_h = spec.series_harmonic_ej_ghz();
    let e_q_max = spec.quarton_top.ej_ghz() + spec.quarton_bottom.ej_ghz();
    let target = -e_h / e_q_max;
    if target.abs() > 1.0 {
        None
    } else {
        Some(2.0 * target.acos())
    }
}

/// Device with the as-designed junction areas and measured shunt
/// capacitances; bias-line numbers are placeholders for unit tests.
#[cfg(test)]
pub(crate) fn test_device() -> CircuitSpec {
    let jc = 0.752;
    let cpa = 57.0;
    CircuitSpec {
        transmon_a: JunctionSpec::new("transmon_a", 0.026, jc, cpa),
        squid_b_top: JunctionSpec::new("squid_b_top", 0.037, jc, cpa),
        squid_b_bottom: JunctionSpec::new("squid_b_bottom", 0.049, jc, cpa),
        quarton_top: JunctionSpec::new("quarton_top", 0.077, jc, cpa),
        quarton_bottom: JunctionSpec::new("quarton_bottom", 0.077, jc, cpa),
        series: [
            JunctionSpec::new("series_bi", 0.350, jc, cpa),
            JunctionSpec::new("series_ij", 0.308, jc, cpa),
            JunctionSpec::new("series_ja", 0.360, jc, cpa),
        ],
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
            transform: [[0.1, 0.2], [0.05, -1.8], [0.0, 0.0], [30.0, -7.5]],
            offsets: [0.3, 1.1, 0.0, 0.0],
            line_slope: 0.254,
            line_intercept_ma: 1.243,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    fn test_spec() -> CircuitSpec {
        test_device()
    }

    #[test]
    fn conversion_constants() {
        assert_relative_eq!(EC_GHZ_FF, 19.370, max_relative = 1e-4);
        assert_relative_eq!(EJ_GHZ_PER_UA, 496.68, max_relative = 1e-4);
        // 100 fF shunt -> 0.1937 GHz charging energy.
        assert_relative_eq!(EC_GHZ_FF / 100.0, 0.1937, max_relative = 1e-4);
        // Transmon A's junction: 0.026 um^2 at 0.752 uA/um^2 -> 9.71 GHz.
        let j = JunctionSpec::new("a", 0.026, 0.752, 57.0);
        assert_relative_eq!(j.ej_ghz(), 9.71, max_relative = 2e-3);
    }

    #[test]
    fn potential_at_origin_is_minus_total_ej() {
        let spec = test_spec();
        let ac = assemble_full(&spec, &FluxState::ZERO).unwrap();
        let total: f64 = spec.junctions().iter().map(|j| j.ej_ghz()).sum();
        assert_relative_eq!(ac.potential(&[0.0; 4]), -total, max_relative = 1e-12);
        // Eight branches present even when the sine terms carry zero weight.
        assert_eq!(ac.branches.len(), 8);
    }

    #[test]
    fn gradient_and_hessian_match_finite_differences() {
        let spec = test_spec();
        let flux = FluxState {
            phi_s: 0.9,
            phi_q_sigma: 4.4,
            phi_q_delta: 0.3,
            phi_g_delta: -0.7,
        };
        let ac = assemble_full(&spec, &flux).unwrap();
        let phi = [0.21, -0.43, 0.11, 0.05];
        let g = ac.potential_gradient(&phi);
        let h = ac.potential_hessian(&phi);
        let eps = 1e-4;
        for k in 0..4 {
            let mut p = phi;
            p[k] += eps;
            let up = ac.potential(&p);
            p[k] -= 2.0 * eps;
            let um = ac.potential(&p);
            assert_relative_eq!(g[k], (up - um) / (2.0 * eps), max_relative = 1e-6);
            for l in 0..4 {
                let mut pp = phi;
                pp[k] += eps;
                pp[l] += eps;
                let upp = ac.potential(&pp);
                let mut pm = phi;
                pm[k] += eps;
                pm[l] -= eps;
                let upm = ac.potential(&pm);
                let mut mp = phi;
                mp[k] -= eps;
                mp[l] += eps;
                let ump = ac.potential(&mp);
                let mut mm = phi;
                mm[k] -= eps;
                mm[l] -= eps;
                let umm = ac.potential(&mm);
                let fd = (upp - upm - ump + umm) / (4.0 * eps * eps);
                assert_abs_diff_eq!(h[(k, l)], fd, epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn capacitance_matrix_shape() {
        let spec = test_spec();
        let c = spec.capacitance_matrix_ff();
        // Symmetric, and row sums equal the ground capacitance at each node
        // (internal nodes have none).
        for r in 0..4 {
            for cc in 0..4 {
                assert_eq!(c[(r, cc)], c[(cc, r)]);
            }
        }
        let row_sum = |r: usize| (0..4).map(|k| c[(r, k)]).sum::<f64>();
        assert_relative_eq!(row_sum(NODE_A), 61.9 + spec.transmon_a.cap_ff(), epsilon = 1e-12);
        assert_relative_eq!(
            row_sum(NODE_B),
            52.4 + spec.squid_b_top.cap_ff() + spec.squid_b_bottom.cap_ff(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(row_sum(NODE_I), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(row_sum(NODE_J), 0.0, epsilon = 1e-12);
        // E_C comes out positive definite.
        let et = EnergyTable::from_spec(&spec).unwrap();
        let chol = nalgebra::Cholesky::new(et.ec_ghz);
        assert!(chol.is_some());
    }

    #[test]
    fn reduced_capacitance_matches_series_ladder() {
        // Eliminating i and j must reproduce the series combination of the
        // three junction capacitances in parallel with the direct a-b path.
        let spec = test_spec();
        let red = assemble_reduced(&spec, &FluxState::ZERO).unwrap();
        let c_series: f64 = 1.0
            / spec
                .series
                .iter()
                .map(|j| 1.0 / j.cap_ff())
                .sum::<f64>();
        let c_ab = spec.cap_ab_mutual_ff
            + spec.quarton_top.cap_ff()
            + spec.quarton_bottom.cap_ff()
            + c_series;
        let c_aa = 61.9 + spec.transmon_a.cap_ff() + c_ab;
        let c_bb = 52.4 + spec.squid_b_top.cap_ff() + spec.squid_b_bottom.cap_ff() + c_ab;
        let det = c_aa * c_bb - c_ab * c_ab;
        assert_relative_eq!(red.ec_ghz[(0, 0)], EC_GHZ_FF * c_bb / det, max_relative = 1e-10);
        assert_relative_eq!(red.ec_ghz[(1, 1)], EC_GHZ_FF * c_aa / det, max_relative = 1e-10);
        assert_relative_eq!(red.ec_ghz[(0, 1)], EC_GHZ_FF * c_ab / det, max_relative = 1e-10);
    }

    #[test]
    fn bias_line_maps_currents_to_fluxes() {
        let spec = test_spec();
        let bl = &spec.bias_line;
        // At I_bias = intercept the line passes through I_l = 0.
        let (i_l, i_g) = bl.line_currents(bl.line_intercept_ma);
        assert_abs_diff_eq!(i_l, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(i_g, 1.243, epsilon = 1e-12);
        let f = bl.fluxes_at_bias(1.243);
        assert_relative_eq!(f.phi_s, 0.3 + 0.2 * 1.243, max_relative = 1e-12);
        assert_relative_eq!(f.phi_q_sigma, 1.1 - 1.8 * 1.243, max_relative = 1e-12);
    }

    /// Exact reduced coupler-branch potential via the loop-current
    /// parametrization: at fixed total phase x across the series array, the
    /// internal minimum satisfies E_s1 sinθ1 = E_s2 sinθ2 = E_s3 sinθ3 = λ
    /// with θ1+θ2+θ3 = x. Solving for λ by bisection gives the relaxed
    /// series potential to machine precision; quarton arms are added on top.
    /// Returned as the difference U(x) - U(0) (via 1-cosθ = 2sin²(θ/2)) so
    /// finite-difference stencils don't lose digits to the large constant.
    /// This is the frozen oracle for the quartic-expansion coefficients.
    fn branch_delta_relaxed(spec: &CircuitSpec, flux: &FluxState, x: f64) -> f64 {
        let e: Vec<f64> = spec.series.iter().map(|j| j.ej_ghz()).collect();
        let x_of_lambda = |lam: f64| e.iter().map(|ei| (lam / ei).asin()).sum::<f64>();
        let e_min = e.iter().cloned().fold(f64::INFINITY, f64::min);
        let (mut lo, mut hi) = (-e_min * (1.0 - 1e-12), e_min * (1.0 - 1e-12));
        // Bisection: x(λ) is strictly increasing.
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if x_of_lambda(mid) < x {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let lam = 0.5 * (lo + hi);
        let du_series: f64 = e
            .iter()
            .map(|ei| {
                let theta = (lam / ei).asin();
                ei * 2.0 * (theta / 2.0).sin().powi(2)
            })
            .sum();
        let e_q = spec.quarton_top.ej_ghz() + spec.quarton_bottom.ej_ghz();
        let d_q = spec.quarton_bottom.ej_ghz() - spec.quarton_top.ej_ghz();
        du_series + e_q * (flux.phi_q_sigma / 2.0).cos() * 2.0 * (x / 2.0).sin().powi(2)
            - d_q * (flux.phi_q_sigma / 2.0).sin() * x.sin()
    }

    /// 4th-order-accurate central stencils for the 2nd and 4th derivatives.
    fn fd_c2_c4(f: impl Fn(f64) -> f64, h: f64) -> (f64, f64) {
        let v: Vec<f64> = (-3..=3).map(|k| f(k as f64 * h)).collect();
        let d2 = (-v[0] / 90.0 + 3.0 * v[1] / 20.0 - 3.0 * v[2] / 2.0 + 49.0 * v[3] / 18.0
            - 3.0 * v[4] / 2.0
            + 3.0 * v[5] / 20.0
            - v[6] / 90.0)
            / (-h * h);
        let d4 = (-v[0] / 6.0 + 2.0 * v[1] - 13.0 * v[2] / 2.0 + 28.0 * v[3] / 3.0
            - 13.0 * v[4] / 2.0
            + 2.0 * v[5]
            - v[6] / 6.0)
            / (h.powi(4));
        (d2 / 2.0, d4 / 24.0)
    }

    #[test]
    fn quartic_expansion_matches_finite_difference_oracle() {
        let spec = test_spec();
        for phi_q in [0.0, 2.0, 3.5, 4.4, 5.2] {
            let flux = FluxState { phi_q_sigma: phi_q, ..FluxState::ZERO };
            let q = quartic_expansion(&spec, &flux).unwrap();
            let f = |x: f64| branch_delta_relaxed(&spec, &flux, x);
            let (c2a, c4a) = fd_c2_c4(f, 0.10);
            let (c2b, c4b) = fd_c2_c4(f, 0.05);
            // Richardson-extrapolate the O(h^4) stencils.
            let c2 = (16.0 * c2b - c2a) / 15.0;
            let c4 = (16.0 * c4b - c4a) / 15.0;
            assert_relative_eq!(q.c2_ghz, c2, max_relative = 1e-8, epsilon = 1e-8);
            assert_relative_eq!(q.c4_ghz, c4, max_relative = 1e-8, epsilon = 1e-8);
        }
    }

    #[test]
    fn quarton_condition_zeroes_c2_and_sets_quartic() {
        // Equal series junctions: at the condition flux, c2 = 0 and the
        // surviving quartic is 24·c4 = (8/27)·E_J, with E_J = 3·E_h the
        // per-junction series energy.
        let mut spec = test_spec();
        for j in spec.series.iter_mut() {
            j.area_um2 = 0.34;
        }
        let phi_q = quarton_condition_flux(&spec).expect("condition reachable");
        let flux = FluxState { phi_q_sigma: phi_q, ..FluxState::ZERO };
        let q = quartic_expansion(&spec, &flux).unwrap();
        let e_j = 3.0 * q.e_h_ghz;
        assert_relative_eq!(e_j, spec.series[0].ej_ghz(), max_relative = 1e-12);
        assert_abs_diff_eq!(q.c2_ghz, 0.0, epsilon = 1e-8 * q.e_h_ghz);
        assert_relative_eq!(24.0 * q.c4_ghz, 8.0 / 27.0 * e_j, max_relative = 1e-8);
        assert_relative_eq!(q.alpha_cos, -1.0 / 3.0, max_relative = 1e-8);
    }

    #[test]
    fn quartic_expansion_rejects_differential_flux() {
        let spec = test_spec();
        let flux = FluxState { phi_q_delta: 0.1, ..FluxState::ZERO };
        assert!(quartic_expansion(&spec, &flux).is_err());
    }

    #[test]
    fn spec_serde_round_trip() {
        let spec = test_spec();
        let toml_text = toml::to_string(&spec).unwrap();
        let back: CircuitSpec = toml::from_str(&toml_text).unwrap();
        assert_eq!(spec, back);
        let json_text = serde_json::to_string(&spec).unwrap();
        let back: CircuitSpec = serde_json::from_str(&json_text).unwrap();
        assert_eq!(spec, back);
    }

    proptest! {
        /// Gauge invariance: shifting any node phase by whole 2π multiples
        /// leaves the full potential unchanged (all branch weights are
        /// integer in the node basis).
        #[test]
        fn potential_invariant_under_2pi_node_shifts(
            phi in proptest::array::uniform4(-3.0f64..3.0),
            shifts in proptest::array::uniform4(-3i32..=3),
            phi_s in -6.0f64..6.0,
            phi_q in -6.0f64..6.0,
        ) {
            let spec = test_spec();
            let flux = FluxState { phi_s, phi_q_sigma: phi_q, phi_q_delta: 0.4, phi_g_delta: 1.3 };
            let ac = assemble_full(&spec, &flux).unwrap();
            let shifted: Vec<f64> = phi
                .iter()
                .zip(shifts.iter())
                .map(|(p, s)| p + 2.0 * std::f64::consts::PI * (*s as f64))
                .collect();
            let u0 = ac.potential(&phi);
            let u1 = ac.potential(&shifted);
            prop_assert!((u0 - u1).abs() < 1e-9 * u0.abs().max(1.0));
        }

        /// The quartic expansion's c2 sign tracks alpha_cos against -1/3.
        #[test]
        fn c2_sign_matches_alpha_condition(phi_q in 0.0f64..(2.0 * std::f64::consts::PI)) {
            let spec = test_spec();
            let flux = FluxState { phi_q_sigma: phi_q, ..FluxState::ZERO };
            let q = quartic_expansion(&spec, &flux).unwrap();
            prop_assert!((q.c2_ghz > 0.0) == (q.alpha_cos > -1.0 / 3.0));
        }
    }
}
