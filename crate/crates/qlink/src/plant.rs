//! Rate-level simulation of the optical plant for the automation layer.
//!
//! Where the event simulator produces individual clicks, the plant exposes
//! expected count rates derived from the same physics (loss chain, singlet
//! statistics, gate/delay acceptance) plus the slow degrees of freedom the
//! control routines act on: six piezo axes with a drifting optimum, the
//! fiber birefringence drift driven by the temperature profile, a slow
//! drift of the H/V analysis arm, the two polarisation controllers and the
//! per-detector delay lines. Measurements are Poisson counts over a dwell
//! time, and every dwell advances simulated time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::linksim::{sample_poisson, window_acceptance, DetectorModel, SourceParams};
use crate::polmath::{sample_standard_normal, Basis, Port, RotationSU2, StokesVector, ALL_PORTS};

/// Scenario temperature profile, °C as a function of simulated seconds.
#[derive(Debug, Clone)]
pub enum TemperatureProfile {
    Constant(f64),
    /// base + amplitude·sin(2π·(t+phase)/period)
    Sine { base: f64, amplitude: f64, period_s: f64, phase_s: f64 },
    /// Linear ramp from `from` to `to` over `ramp_s`, then flat.
    Ramp { from: f64, to: f64, ramp_s: f64 },
}

impl TemperatureProfile {
    pub fn at(&self, t_s: f64) -> f64 {
        match self {
            Self::Constant(v) => *v,
            Self::Sine { base, amplitude, period_s, phase_s } => {
                base + amplitude * (2.0 * std::f64::consts::PI * (t_s + phase_s) / period_s).sin()
            }
            Self::Ramp { from, to, ramp_s } => {
                if t_s >= *ramp_s {
                    *to
                } else {
                    from + (to - from) * t_s / ramp_s
                }
            }
        }
    }
}

/// Which Alice detections fire the trigger channel (state alignment gates
/// on a single detector per phase).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    All,
    Only(Port),
}

impl GateMode {
    fn rate_factor(self) -> f64 {
        match self {
            GateMode::All => 1.0,
            GateMode::Only(_) => 0.25,
        }
    }
}

/// Slow-dynamics parameters of the plant.
#[derive(Debug, Clone)]
pub struct PlantDynamics {
    /// Total channel loss in dB (α·l plus any excess loss).
    pub total_loss_db: f64,
    /// Fiber birefringence drift per °C of temperature change.
    pub drift_kappa_rad_per_degc: f64,
    /// Slow rotation of the fiber-based H/V analysis arm (only PC2 can
    /// compensate it), rad/s.
    pub arm_drift_rad_per_s: f64,
    /// Gaussian width of the piezo coupling response, actuator units.
    pub piezo_width: f64,
    /// Random walk of the piezo optimum, units per √s.
    pub piezo_optimum_walk: f64,
    /// Angular noise of one polarimeter reading, radians.
    pub polarimeter_noise_rad: f64,
    /// Werner-mixture visibility of the source.
    pub intrinsic_visibility: f64,
    pub temperature: TemperatureProfile,
}

impl Default for PlantDynamics {
    fn default() -> Self {
        Self {
            total_loss_db: 0.0,
            drift_kappa_rad_per_degc: 2.6,
            arm_drift_rad_per_s: 0.0,
            piezo_width: 1.0,
            piezo_optimum_walk: 0.0,
            polarimeter_noise_rad: 0.006,
            intrinsic_visibility: 0.988,
            temperature: TemperatureProfile::Constant(20.0),
        }
    }
}

pub const PIEZO_AXES: usize = 6;
pub const PIEZO_BOUND: f64 = 10.0;

/// Expected per-detector rates of one Bob detector under the current state.
#[derive(Debug, Clone, Copy)]
pub struct DetectorRates {
    pub signal: f64,
    pub dark: f64,
    pub accidental: f64,
}

impl DetectorRates {
    pub fn total(&self) -> f64 {
        self.signal + self.dark + self.accidental
    }

    pub fn background(&self) -> f64 {
        self.dark + self.accidental
    }
}

/// Binomial sampler: exact Bernoulli sum for small n, normal approximation
/// with continuity clamp for large n.
pub fn sample_binomial<R: Rng>(rng: &mut R, n: u64, p: f64) -> u64 {
    if p <= 0.0 || n == 0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    if n < 64 {
        return (0..n).filter(|_| rng.random_bool(p)).count() as u64;
    }
    let mean = n as f64 * p;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    let g = sample_standard_normal(rng);
    (mean + g * sigma).round().clamp(0.0, n as f64) as u64
}

#[derive(Debug)]
pub struct Plant {
    pub source: SourceParams,
    pub detectors: DetectorModel,
    pub dynamics: PlantDynamics,
    now_s: f64,
    temperature_prev: f64,
    piezo: [f64; PIEZO_AXES],
    piezo_optimum: [f64; PIEZO_AXES],
    fiber: RotationSU2,
    drift_axis: [f64; 3],
    arm: RotationSU2,
    arm_axis: [f64; 3],
    pc1: [f64; 3],
    pc2: [f64; 3],
    true_delays_ps: [f64; 4],
    set_delays_ps: [f64; 4],
    gate_mode: GateMode,
    qkd_paused: bool,
    rng: ChaCha12Rng,
}

impl Plant {
    pub fn new(
        source: SourceParams,
        detectors: DetectorModel,
        dynamics: PlantDynamics,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x9d_1a_57);
        let drift_axis = crate::polmath::random_unit_axis(&mut rng);
        let arm_axis = crate::polmath::random_unit_axis(&mut rng);
        let temperature_prev = dynamics.temperature.at(0.0);
        Self {
            source,
            detectors,
            dynamics,
            now_s: 0.0,
            temperature_prev,
            piezo: [0.0; PIEZO_AXES],
            piezo_optimum: [0.0; PIEZO_AXES],
            fiber: RotationSU2::identity(),
            drift_axis,
            arm_axis,
            arm: RotationSU2::identity(),
            pc1: [0.0; 3],
            pc2: [0.0; 3],
            true_delays_ps: [0.0; 4],
            set_delays_ps: [0.0; 4],
            gate_mode: GateMode::All,
            qkd_paused: false,
            rng,
        }
    }

    // --- installation / scenario hooks -----------------------------------

    /// Fresh-install condition: detuned piezo axes, unknown delays, random
    /// controller settings and fiber state.
    pub fn apply_fresh_install(&mut self, piezo_detune: f64, delay_range_ps: f64) {
        if piezo_detune > 0.0 {
            for i in 0..PIEZO_AXES {
                let sign = if self.rng.random_bool(0.5) { 1.0 } else { -1.0 };
                self.piezo[i] = self.piezo_optimum[i]
                    + sign * piezo_detune * self.rng.random_range(0.6..1.0);
            }
        }
        if delay_range_ps > 0.0 {
            // Common bulk delay plus a small per-detector electronics spread.
            let base = self.rng.random_range(0.2 * delay_range_ps..0.8 * delay_range_ps);
            for d in &mut self.true_delays_ps {
                *d = base + self.rng.random_range(-400.0..400.0);
            }
        }
        self.set_delays_ps = [0.0; 4];
        self.pc1 = std::array::from_fn(|_| self.rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
        self.pc2 = std::array::from_fn(|_| self.rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
        let axis = crate::polmath::random_unit_axis(&mut self.rng);
        let angle = self.rng.random_range(0.5..2.5);
        self.fiber = RotationSU2::from_axis_angle(axis, angle);
        let axis = crate::polmath::random_unit_axis(&mut self.rng);
        let angle = self.rng.random_range(0.5..2.5);
        self.arm = RotationSU2::from_axis_angle(axis, angle);
    }

    /// Sudden mechanical perturbation of the quantum channel.
    pub fn apply_fiber_jump(&mut self, angle_rad: f64) {
        let axis = crate::polmath::random_unit_axis(&mut self.rng);
        self.fiber = RotationSU2::from_axis_angle(axis, angle_rad).compose(&self.fiber);
    }

    /// Shifts the true electronics delays (thermal drift of delay circuits).
    pub fn shift_true_delays(&mut self, shift_ps: f64) {
        for d in &mut self.true_delays_ps {
            *d += shift_ps * self.rng.random_range(0.5..1.5);
        }
    }

    /// Scenario hook: sets the true electronics delays exactly.
    pub fn force_true_delays(&mut self, delays_ps: [f64; 4]) {
        self.true_delays_ps = delays_ps;
    }

    // --- time -------------------------------------------------------------

    pub fn now_s(&self) -> f64 {
        self.now_s
    }

    pub fn temperature(&self) -> f64 {
        self.dynamics.temperature.at(self.now_s)
    }

    /// Advances simulated time: fiber drift follows the temperature change,
    /// the analysis arm creeps, the piezo optimum random-walks.
    pub fn advance(&mut self, dt_s: f64) {
        if dt_s <= 0.0 {
            return;
        }
        let t_new = self.dynamics.temperature.at(self.now_s + dt_s);
        let d_temp = (t_new - self.temperature_prev).abs();
        if d_temp > 0.0 && self.dynamics.drift_kappa_rad_per_degc > 0.0 {
            // Persistent drift axis with a small transverse jitter.
            let jitter = crate::polmath::random_unit_axis(&mut self.rng);
            let axis = [
                self.drift_axis[0] + 0.05 * jitter[0],
                self.drift_axis[1] + 0.05 * jitter[1],
                self.drift_axis[2] + 0.05 * jitter[2],
            ];
            let angle = self.dynamics.drift_kappa_rad_per_degc * d_temp;
            self.fiber = RotationSU2::from_axis_angle(axis, angle).compose(&self.fiber);
        }
        self.temperature_prev = t_new;
        if self.dynamics.arm_drift_rad_per_s > 0.0 {
            self.arm = RotationSU2::from_axis_angle(
                self.arm_axis,
                self.dynamics.arm_drift_rad_per_s * dt_s,
            )
            .compose(&self.arm);
        }
        if self.dynamics.piezo_optimum_walk > 0.0 {
            let sigma = self.dynamics.piezo_optimum_walk * dt_s.sqrt();
            for opt in &mut self.piezo_optimum {
                *opt += sigma * sample_standard_normal(&mut self.rng);
                *opt = opt.clamp(-PIEZO_BOUND, PIEZO_BOUND);
            }
        }
        self.now_s += dt_s;
    }

    // --- actuators ----------------------------------------------------------

    pub fn piezo_positions(&self) -> [f64; PIEZO_AXES] {
        self.piezo
    }

    pub fn set_piezo_axis(&mut self, axis: usize, position: f64) {
        self.piezo[axis] = position.clamp(-PIEZO_BOUND, PIEZO_BOUND);
    }

    pub fn pc1_angles(&self) -> [f64; 3] {
        self.pc1
    }

    pub fn pc2_angles(&self) -> [f64; 3] {
        self.pc2
    }

    pub fn set_pc1(&mut self, angles: [f64; 3]) {
        self.pc1 = angles;
    }

    pub fn set_pc2(&mut self, angles: [f64; 3]) {
        self.pc2 = angles;
    }

    pub fn set_delays(&mut self, delays_ps: [f64; 4]) {
        self.set_delays_ps = delays_ps;
    }

    pub fn set_delays_uniform(&mut self, delay_ps: f64) {
        self.set_delays_ps = [delay_ps; 4];
    }

    pub fn set_gate_mode(&mut self, mode: GateMode) {
        self.gate_mode = mode;
    }

    pub fn set_qkd_paused(&mut self, paused: bool) {
        self.qkd_paused = paused;
    }

    pub fn qkd_paused(&self) -> bool {
        self.qkd_paused
    }

    // --- derived optics -----------------------------------------------------

    /// Coupling efficiency of the free-space source optics, ≤ 1.
    pub fn coupling_factor(&self) -> f64 {
        let mut cost = 0.0;
        for i in 0..PIEZO_AXES {
            let d = (self.piezo[i] - self.piezo_optimum[i]) / self.dynamics.piezo_width;
            cost += d * d;
        }
        (-cost).exp()
    }

    fn trigger_observed(&self, coupling: f64) -> f64 {
        let r_true = self.source.pump_power_mw * self.source.pair_rate_per_mw * coupling;
        let tau = self.detectors.dead_time_ns * 1e-9;
        if r_true <= 0.0 {
            0.0
        } else {
            r_true / (1.0 + r_true * tau)
        }
    }

    /// Effective measurement chain for one Bob port: the state passes the
    /// fiber, PC1, and (for the H/V arm) the drifting arm plus PC2.
    fn chain_rotation(&self, basis: Basis) -> RotationSU2 {
        let pc1 = RotationSU2::from_retardations(self.pc1[0], self.pc1[1], self.pc1[2]);
        let base = pc1.compose(&self.fiber);
        match basis {
            Basis::PM => base,
            Basis::HV => {
                let pc2 = RotationSU2::from_retardations(self.pc2[0], self.pc2[1], self.pc2[2]);
                pc2.compose(&self.arm).compose(&base)
            }
        }
    }

    /// Conditional click probability of Bob port `j` given Alice fired port
    /// `i` (includes the 50:50 basis split, excludes losses).
    pub fn conditional_click_prob(&self, i: Port, j: Port) -> f64 {
        let chain = self.chain_rotation(j.basis());
        let b_eff = chain.inverse().apply_axis(j.poincare_axis());
        let a = i.poincare_axis();
        let dot = a[0] * b_eff[0] + a[1] * b_eff[1] + a[2] * b_eff[2];
        0.5 * (1.0 - self.dynamics.intrinsic_visibility * dot) / 2.0
    }

    /// Timing acceptance of detector `j`: probability that the jittered
    /// photon lands inside the coincidence window given the residual delay
    /// mismatch.
    fn delay_acceptance(&self, j: usize) -> f64 {
        let sigma = self.detectors.jitter_sigma_ps * std::f64::consts::SQRT_2;
        let w = self.source_window_ps();
        let delta = self.set_delays_ps[j] - self.true_delays_ps[j];
        0.5 * (crate::linksim::erf((w - delta) / (sigma * std::f64::consts::SQRT_2))
            + crate::linksim::erf((w + delta) / (sigma * std::f64::consts::SQRT_2)))
    }

    fn source_window_ps(&self) -> f64 {
        // Coincidence window half-width in ps (the ±window pairing cut).
        1500.0
    }

    fn fiber_transmission(&self) -> f64 {
        10f64.powf(-self.dynamics.total_loss_db / 10.0)
    }

    fn loss_chain(&self) -> f64 {
        self.source.coupling_1550
            * self.source.transmission_alice
            * self.source.transmission_bob
            * self.detectors.efficiency
            * self.fiber_transmission()
    }

    /// Expected rates of one Bob detector under the current plant state.
    pub fn detector_rates(&self, j: Port) -> DetectorRates {
        let coupling = self.coupling_factor();
        let trig = self.trigger_observed(coupling);
        let gates = trig * self.gate_mode.rate_factor();
        let chain = self.loss_chain();
        let accept = self.delay_acceptance(j.index());

        // Signal: sum over the Alice ports that can fire the trigger.
        let alice_ports: &[Port] = match self.gate_mode {
            GateMode::All => &ALL_PORTS,
            GateMode::Only(ref p) => std::slice::from_ref(p),
        };
        let mut signal = 0.0;
        for &i in alice_ports {
            // Each Alice port carries 1/4 of the trigger marginal; under
            // gated operation that quarter IS the gate rate.
            let share = match self.gate_mode {
                GateMode::All => trig * 0.25,
                GateMode::Only(_) => gates,
            };
            signal += share * chain * accept * self.conditional_click_prob(i, j);
        }

        // Backgrounds follow the gates: dark clicks per gate are a detector
        // property; accidentals scale with the square of the pair rate.
        let nominal_trig = self.trigger_observed(1.0);
        let dark = if nominal_trig > 0.0 {
            self.detectors.dark_rate * gates / nominal_trig * self.gate_mode.rate_factor().recip()
                * self.gate_mode.rate_factor()
        } else {
            0.0
        };
        let p_ratio = self.source.pump_power_mw / self.source.accidental_ref_power_mw;
        let acc_full = self.source.accidental_rate_ref
            * p_ratio
            * p_ratio
            * coupling
            * coupling
            * self.fiber_transmission();
        let accidental = acc_full * self.gate_mode.rate_factor();
        DetectorRates { signal, dark, accidental }
    }

    /// Total coincidence rate over the four detectors (signal plus
    /// background), mode All.
    pub fn total_coincidence_rate(&self) -> f64 {
        ALL_PORTS.iter().map(|&p| self.detector_rates(p).total()).sum()
    }

    /// Total signal coincidence rate with perfect coupling: the startup
    /// target the stabilisation is judged against.
    pub fn optimal_total_coincidence_rate(&self) -> f64 {
        let trig = self.trigger_observed(1.0);
        trig * self.loss_chain() * window_acceptance(1.5, self.detectors.jitter_sigma_ps * std::f64::consts::SQRT_2)
    }

    /// Expected QBER decomposition of the sifted key at the current state
    /// (mode All): polarisation term plus background terms.
    pub fn qber_components(&self) -> (f64, f64, f64) {
        let mut c_tot = 0.0;
        let mut d_tot = 0.0;
        let mut a_tot = 0.0;
        for &j in &ALL_PORTS {
            let r = self.detector_rates(j);
            c_tot += r.signal;
            d_tot += r.dark;
            a_tot += r.accidental;
        }
        // Polarisation error averaged over the two bases.
        let e_hv = self.basis_error(Basis::HV);
        let e_pm = self.basis_error(Basis::PM);
        let e_pol = 0.5 * (e_hv + e_pm);
        let total = c_tot + d_tot + a_tot;
        if total <= 0.0 {
            return (0.0, 0.0, 0.0);
        }
        (e_pol * c_tot / total, 0.5 * d_tot / total, 0.5 * a_tot / total)
    }

    /// Probability that a matched-basis signal coincidence is an error in
    /// the given basis.
    pub fn basis_error(&self, basis: Basis) -> f64 {
        let (i, j) = match basis {
            Basis::HV => (Port::H, Port::H),
            Basis::PM => (Port::P, Port::P),
        };
        // Error: Bob clicks the same port as Alice (singlet anticorrelates).
        let err = self.conditional_click_prob(i, j);
        let ok = self.conditional_click_prob(i, j.conjugate());
        err / (err + ok)
    }

    pub fn qber_expected(&self) -> f64 {
        let (p, d, a) = self.qber_components();
        p + d + a
    }

    /// Entanglement visibility as plotted in long-run telemetry: the
    /// background-diluted averaged two-basis correlation, equal to 1−2·QBER.
    pub fn visibility_measured(&self) -> f64 {
        1.0 - 2.0 * self.qber_expected()
    }

    // --- measurements -------------------------------------------------------

    /// Counts on one Bob detector over a dwell; Poisson statistics at the
    /// true rate, advancing simulated time.
    pub fn measure_detector(&mut self, j: Port, dwell_s: f64) -> u64 {
        let rate = self.detector_rates(j).total();
        self.advance(dwell_s);
        sample_poisson(&mut self.rng, rate * dwell_s)
    }

    /// Counts over the whole array (total coincidences) for a dwell.
    pub fn measure_total(&mut self, dwell_s: f64) -> u64 {
        let rate = self.total_coincidence_rate();
        self.advance(dwell_s);
        sample_poisson(&mut self.rng, rate * dwell_s)
    }

    /// Background estimate (dark + accidental) for one detector under the
    /// current gating; the real system measures this with the source
    /// blocked, so the controller may use it for subtraction.
    pub fn background_rate(&self, j: Port) -> f64 {
        self.detector_rates(j).background()
    }

    /// Measured QBER over a dwell: sifted-bit count from the coincidence
    /// rate, errors sampled binomially at the expected error probability.
    pub fn measure_qber(&mut self, dwell_s: f64) -> f64 {
        let sift_rate = self.total_coincidence_rate() / 2.0;
        let e = self.qber_expected();
        self.advance(dwell_s);
        let n = sample_poisson(&mut self.rng, sift_rate * dwell_s);
        if n == 0 {
            return 0.0;
        }
        let k = sample_binomial(&mut self.rng, n, e);
        k as f64 / n as f64
    }

    /// Classical polarimeter reading of a reference pulse launched with the
    /// given polarisation: the PM-arm transform applied, plus reading noise.
    pub fn polarimeter_read(&mut self, input: &StokesVector, read_time_s: f64) -> StokesVector {
        let out = self.chain_rotation(Basis::PM).apply(input);
        let noise_axis = crate::polmath::random_unit_axis(&mut self.rng);
        let noise_angle = self.dynamics.polarimeter_noise_rad
            * sample_standard_normal(&mut self.rng).abs();
        let noisy = RotationSU2::from_axis_angle(noise_axis, noise_angle).apply(&out);
        self.advance(read_time_s);
        noisy
    }

    /// Per-detector signal+background rate while scanning delays: used by
    /// the synchronisation routine.
    pub fn measure_detector_at_delay(&mut self, j: Port, delay_ps: f64, dwell_s: f64) -> u64 {
        let saved = self.set_delays_ps;
        self.set_delays_ps[j.index()] = delay_ps;
        let counts = self.measure_detector(j, dwell_s);
        self.set_delays_ps = saved;
        counts
    }

    /// All four counters in parallel at temporary delay settings over one
    /// dwell (the scan steps every delay line together).
    pub fn measure_all_at_delays(&mut self, delays_ps: [f64; 4], dwell_s: f64) -> [u64; 4] {
        let saved = self.set_delays_ps;
        self.set_delays_ps = delays_ps;
        let rates: [f64; 4] =
            std::array::from_fn(|i| self.detector_rates(Port::from_index(i)).total());
        self.set_delays_ps = saved;
        self.advance(dwell_s);
        std::array::from_fn(|i| sample_poisson(&mut self.rng, rates[i] * dwell_s))
    }

    pub fn true_delays_ps(&self) -> [f64; 4] {
        self.true_delays_ps
    }

    pub fn set_delays_ps(&self) -> [f64; 4] {
        self.set_delays_ps
    }

    /// Residual angular misalignment of the PM analysis chain, radians on
    /// the Poincaré sphere (diagnostic).
    pub fn pm_alignment_error(&self) -> f64 {
        self.chain_rotation(Basis::PM).rotation_angle()
    }

    pub fn hv_alignment_error(&self) -> f64 {
        self.chain_rotation(Basis::HV).rotation_angle()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lab_plant(seed: u64) -> Plant {
        let source = SourceParams::default();
        let mut detectors = DetectorModel::default();
        detectors.efficiency =
            crate::linksim::calibrated_efficiency(0.0361, &source, &detectors, 1.5);
        let dynamics = PlantDynamics {
            total_loss_db: 0.204 * 25.0,
            ..Default::default()
        };
        Plant::new(source, detectors, dynamics, seed)
    }

    #[test]
    fn aligned_plant_reproduces_analytic_qber() {
        let plant = lab_plant(5);
        // 25 km at the 6 mW budget: noise 2.63 % plus 0.6 % system floor.
        let e = plant.qber_expected();
        assert!((e - 0.0323).abs() < 0.0015, "QBER {e}");
        let (p, d, a) = plant.qber_components();
        assert!((p - 0.006).abs() < 0.0008, "e_pol {p}");
        assert!(d > a, "dark must dominate accidentals at 25 km: {d} vs {a}");
    }

    #[test]
    fn coupling_detuning_reduces_rates() {
        let mut plant = lab_plant(6);
        let full = plant.total_coincidence_rate();
        plant.set_piezo_axis(0, 0.8);
        plant.set_piezo_axis(3, -0.7);
        let detuned = plant.total_coincidence_rate();
        assert!(detuned < 0.5 * full, "detuned {detuned} vs {full}");
    }

    #[test]
    fn drift_collapses_visibility_after_temperature_excursion() {
        let mut plant = lab_plant(7);
        plant.dynamics.temperature =
            TemperatureProfile::Ramp { from: 20.0, to: 21.2, ramp_s: 3600.0 };
        plant.temperature_prev = 20.0;
        let before = plant.visibility_measured();
        assert!(before > 0.9);
        for _ in 0..3600 {
            plant.advance(1.0);
        }
        let after = plant.visibility_measured();
        assert!(after < 0.2, "visibility after 1.2 degC excursion: {after}");
    }

    #[test]
    fn gating_reduces_rates_by_a_quarter() {
        let mut plant = lab_plant(8);
        let all: f64 = ALL_PORTS.iter().map(|&p| plant.detector_rates(p).signal).sum();
        plant.set_gate_mode(GateMode::Only(Port::P));
        let gated: f64 = ALL_PORTS.iter().map(|&p| plant.detector_rates(p).signal).sum();
        assert!((gated - all / 4.0).abs() < all * 0.01, "gated {gated} vs all {all}");
    }

    #[test]
    fn delay_mismatch_suppresses_signal_only() {
        let mut plant = lab_plant(9);
        let aligned = plant.detector_rates(Port::H);
        plant.set_delays([5000.0; 4]);
        let misaligned = plant.detector_rates(Port::H);
        assert!(misaligned.signal < 0.01 * aligned.signal);
        assert!((misaligned.dark - aligned.dark).abs() < 1e-9);
    }

    #[test]
    fn pc1_rotation_breaks_and_restores_correlations() {
        let mut plant = lab_plant(10);
        let base = plant.qber_expected();
        // PC1 acts on both bases: rotating it away raises the QBER.
        plant.set_pc1([0.8, 0.4, -0.3]);
        assert!(plant.qber_expected() > base + 0.05);
        plant.set_pc1([0.0; 3]);
        assert!((plant.qber_expected() - base).abs() < 1e-9);
    }

    #[test]
    fn pc2_affects_only_hv_basis() {
        let mut plant = lab_plant(11);
        let pm_before = plant.basis_error(Basis::PM);
        let hv_before = plant.basis_error(Basis::HV);
        plant.set_pc2([0.3, 0.9, -0.2]);
        assert!((plant.basis_error(Basis::PM) - pm_before).abs() < 1e-12);
        assert!(plant.basis_error(Basis::HV) > hv_before + 0.05);
    }

    #[test]
    fn measurements_are_poissonian_and_advance_time(){
        let mut plant = lab_plant(12);
        let rate = plant.detector_rates(Port::V).total();
        let t0 = plant.now_s();
        let mut sum = 0u64;
        let dwells = 50;
        for _ in 0..dwells {
            sum += plant.measure_detector(Port::V, 1.0);
        }
        assert!((plant.now_s() - t0 - dwells as f64).abs() < 1e-9);
        let mean = sum as f64 / dwells as f64;
        let sigma = (rate / dwells as f64).sqrt();
        assert!((mean - rate).abs() < 5.0 * sigma, "mean {mean} rate {rate}");
    }

    #[test]
    fn polarimeter_tracks_fiber_rotation() {
        let mut plant = lab_plant(13);
        plant.dynamics.polarimeter_noise_rad = 0.0;
        let h_in = StokesVector::horizontal();
        let read0 = plant.polarimeter_read(&h_in, 0.05);
        assert!(read0.angle_to(&h_in) < 1e-9);
        plant.apply_fiber_jump(0.5);
        let read1 = plant.polarimeter_read(&h_in, 0.05);
        assert!(read1.angle_to(&h_in) > 0.05);
    }
}
