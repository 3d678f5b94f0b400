//! Polarisation-state algebra on the Poincaré sphere.
//!
//! Everything downstream (event simulator, rate-level plant, polarisation
//! control) reduces to three primitives defined here: Stokes vectors,
//! SO(3)/SU(2) rotations represented as unit quaternions, and the singlet
//! coincidence statistics with an intrinsic-visibility knob for source
//! imperfection.

use rand::Rng;
use thiserror::Error;

/// Half the square root machine-style tolerance used by the group-law
/// invariants (compose/inverse round trips hold to this).
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum PolMathError {
    #[error("visibility undefined: max and min rates are both zero")]
    UndefinedVisibility,
    #[error("rates must be non-negative (max={max}, min={min})")]
    NegativeRate { max: f64, min: f64 },
}

/// Measurement basis of a BB84 analysis module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Basis {
    /// 0°/90° linear basis.
    HV,
    /// +45°/−45° linear basis.
    PM,
}

impl Basis {
    pub fn index(self) -> usize {
        match self {
            Basis::HV => 0,
            Basis::PM => 1,
        }
    }

    pub fn from_index(i: usize) -> Basis {
        if i == 0 {
            Basis::HV
        } else {
            Basis::PM
        }
    }
}

/// Output port of a polarising beam splitter pair, i.e. the polarisation
/// outcome a detector is assigned to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Port {
    H,
    V,
    P,
    M,
}

pub const ALL_PORTS: [Port; 4] = [Port::H, Port::V, Port::P, Port::M];

impl Port {
    pub fn basis(self) -> Basis {
        match self {
            Port::H | Port::V => Basis::HV,
            Port::P | Port::M => Basis::PM,
        }
    }

    /// Key bit convention: H=0, V=1, P=0, M=1.
    pub fn bit(self) -> u8 {
        match self {
            Port::H | Port::P => 0,
            Port::V | Port::M => 1,
        }
    }

    /// Physical analyzer angle in radians (H = 0, V = 90°, P = +45°, M = −45°).
    pub fn analyzer_angle(self) -> f64 {
        match self {
            Port::H => 0.0,
            Port::V => std::f64::consts::FRAC_PI_2,
            Port::P => std::f64::consts::FRAC_PI_4,
            Port::M => -std::f64::consts::FRAC_PI_4,
        }
    }

    /// Poincaré-sphere axis of the transmitted state of this port.
    pub fn poincare_axis(self) -> [f64; 3] {
        match self {
            Port::H => [1.0, 0.0, 0.0],
            Port::V => [-1.0, 0.0, 0.0],
            Port::P => [0.0, 1.0, 0.0],
            Port::M => [0.0, -1.0, 0.0],
        }
    }

    pub fn index(self) -> usize {
        match self {
            Port::H => 0,
            Port::V => 1,
            Port::P => 2,
            Port::M => 3,
        }
    }

    pub fn from_index(i: usize) -> Port {
        ALL_PORTS[i & 3]
    }

    /// The orthogonal port in the same basis.
    pub fn conjugate(self) -> Port {
        match self {
            Port::H => Port::V,
            Port::V => Port::H,
            Port::P => Port::M,
            Port::M => Port::P,
        }
    }
}

/// Polarisation state as a Stokes vector; `(s1,s2,s3)` live on (or inside)
/// the Poincaré sphere, `intensity` carries relative power.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StokesVector {
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
    pub intensity: f64,
}

impl StokesVector {
    pub fn new(s1: f64, s2: f64, s3: f64, intensity: f64) -> Self {
        Self { s1, s2, s3, intensity }
    }

    /// Fully polarised unit state along a Poincaré axis.
    pub fn from_axis(axis: [f64; 3]) -> Self {
        Self::new(axis[0], axis[1], axis[2], 1.0)
    }

    pub fn horizontal() -> Self {
        Self::new(1.0, 0.0, 0.0, 1.0)
    }

    pub fn plus45() -> Self {
        Self::new(0.0, 1.0, 0.0, 1.0)
    }

    pub fn degree_of_polarization(&self) -> f64 {
        (self.s1 * self.s1 + self.s2 * self.s2 + self.s3 * self.s3).sqrt()
    }

    pub fn axis(&self) -> [f64; 3] {
        [self.s1, self.s2, self.s3]
    }

    /// Angle between two polarisation states on the Poincaré sphere, in
    /// radians. Both inputs are normalised first.
    pub fn angle_to(&self, other: &StokesVector) -> f64 {
        let a = self.degree_of_polarization();
        let b = other.degree_of_polarization();
        if a == 0.0 || b == 0.0 {
            return 0.0;
        }
        let dot = (self.s1 * other.s1 + self.s2 * other.s2 + self.s3 * other.s3) / (a * b);
        dot.clamp(-1.0, 1.0).acos()
    }
}

/// General polarisation rotation, stored as a unit quaternion. The public
/// constructors mirror the hardware: three retardation angles of a fiber
/// squeezer controller, or axis/angle for synthetic drift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationSU2 {
    /// (w, x, y, z), kept normalised.
    q: [f64; 4],
}

impl RotationSU2 {
    pub fn identity() -> Self {
        Self { q: [1.0, 0.0, 0.0, 0.0] }
    }

    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Self {
        let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if norm == 0.0 {
            return Self::identity();
        }
        let (s, c) = (angle / 2.0).sin_cos();
        Self {
            q: [c, s * axis[0] / norm, s * axis[1] / norm, s * axis[2] / norm],
        }
    }

    /// Builds the rotation of a three-stage retarder controller: a rotation
    /// by `c` about s1, then `b` about s2, then `a` about s1 (proper Euler
    /// x-y-x decomposition, which covers all of SO(3)).
    pub fn from_retardations(a: f64, b: f64, c: f64) -> Self {
        let ra = Self::from_axis_angle([1.0, 0.0, 0.0], a);
        let rb = Self::from_axis_angle([0.0, 1.0, 0.0], b);
        let rc = Self::from_axis_angle([1.0, 0.0, 0.0], c);
        ra.compose(&rb).compose(&rc)
    }

    /// `self.compose(other)` applies `other` first: `(a∘b)(s) = a(b(s))`.
    pub fn compose(&self, other: &RotationSU2) -> Self {
        let [w1, x1, y1, z1] = self.q;
        let [w2, x2, y2, z2] = other.q;
        let mut q = [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ];
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        for v in &mut q {
            *v /= n;
        }
        Self { q }
    }

    pub fn inverse(&self) -> Self {
        let [w, x, y, z] = self.q;
        Self { q: [w, -x, -y, -z] }
    }

    /// Rotation angle in radians, in [0, π].
    pub fn rotation_angle(&self) -> f64 {
        2.0 * self.q[0].abs().clamp(0.0, 1.0).acos()
    }

    /// Rotates the Poincaré part of a Stokes vector; intensity is untouched.
    pub fn apply(&self, s: &StokesVector) -> StokesVector {
        let v = self.apply_axis(s.axis());
        StokesVector::new(v[0], v[1], v[2], s.intensity)
    }

    /// Rotates a bare Poincaré axis: v' = v + 2w(u×v) + 2u×(u×v).
    pub fn apply_axis(&self, v: [f64; 3]) -> [f64; 3] {
        let [w, x, y, z] = self.q;
        let u = [x, y, z];
        let uv = cross(u, v);
        let uuv = cross(u, uv);
        [
            v[0] + 2.0 * (w * uv[0] + uuv[0]),
            v[1] + 2.0 * (w * uv[1] + uuv[1]),
            v[2] + 2.0 * (w * uv[2] + uuv[2]),
        ]
    }

    /// Angular distance to another rotation (angle of `self⁻¹∘other`).
    pub fn distance(&self, other: &RotationSU2) -> f64 {
        self.inverse().compose(other).rotation_angle()
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Two-photon source state after alignment onto the singlet target. `phase`
/// is the relative phase the raw source emits with; key statistics are
/// computed post-alignment so only `visibility_intrinsic` enters them.
#[derive(Debug, Clone, Copy)]
pub struct EntangledPairState {
    pub phase: f64,
    pub visibility_intrinsic: f64,
}

impl EntangledPairState {
    pub fn new(phase: f64, visibility_intrinsic: f64) -> Self {
        assert!(
            (0.0..=1.0).contains(&visibility_intrinsic),
            "intrinsic visibility must lie in [0,1]"
        );
        Self { phase, visibility_intrinsic }
    }

    pub fn ideal() -> Self {
        Self::new(0.0, 1.0)
    }
}

/// Analyzer orientation: measurement basis plus a misalignment offset from
/// the ideal angle.
#[derive(Debug, Clone, Copy)]
pub struct AnalyzerSetting {
    pub basis: Basis,
    pub angle_offset: f64,
}

/// Coincidence probability for a singlet-aligned pair analysed at physical
/// angles `theta_a` and `theta_b`: v·½·sin²(θA−θB) + (1−v)/4.
pub fn coincidence_probability(state: &EntangledPairState, theta_a: f64, theta_b: f64) -> f64 {
    let v = state.visibility_intrinsic;
    let d = theta_a - theta_b;
    v * 0.5 * d.sin().powi(2) + (1.0 - v) * 0.25
}

/// Classical visibility (Max−Min)/(Max+Min) of two coincidence rates.
pub fn visibility(max_rate: f64, min_rate: f64) -> Result<f64, PolMathError> {
    if max_rate < 0.0 || min_rate < 0.0 {
        return Err(PolMathError::NegativeRate { max: max_rate, min: min_rate });
    }
    if max_rate + min_rate == 0.0 {
        return Err(PolMathError::UndefinedVisibility);
    }
    Ok((max_rate - min_rate) / (max_rate + min_rate))
}

/// One step of thermally driven birefringence drift: composes `current` with
/// a random small rotation whose expected angle is `kappa·|temperature_rate|·dt`.
/// A zero temperature rate returns `current` unchanged.
pub fn drift_step<R: Rng>(
    current: &RotationSU2,
    kappa: f64,
    temperature_rate: f64,
    dt: f64,
    rng: &mut R,
) -> RotationSU2 {
    assert!(dt > 0.0, "dt must be positive");
    if temperature_rate == 0.0 {
        return *current;
    }
    let axis = random_unit_axis(rng);
    // |N(0,1)|·sqrt(π/2) has unit mean, so the expected step is κ·|dT/dt|·dt.
    let g: f64 = sample_standard_normal(rng);
    let angle = kappa * temperature_rate.abs() * dt * g.abs() * (std::f64::consts::PI / 2.0).sqrt();
    RotationSU2::from_axis_angle(axis, angle).compose(current)
}

pub fn random_unit_axis<R: Rng>(rng: &mut R) -> [f64; 3] {
    loop {
        let v = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n2: f64 = v.iter().map(|x| x * x).sum();
        if n2 > 1e-6 && n2 <= 1.0 {
            let n = n2.sqrt();
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Box-Muller standard normal; keeps the crate off rand_distr for the hot
/// per-event path.
pub fn sample_standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    const PI: f64 = std::f64::consts::PI;

    #[test]
    fn singlet_anticorrelation_and_orthogonal_settings() {
        let ideal = EntangledPairState::ideal();
        assert!(coincidence_probability(&ideal, 0.3, 0.3).abs() < 1e-12);
        assert!((coincidence_probability(&ideal, 0.0, PI / 2.0) - 0.5).abs() < 1e-12);
        assert!((coincidence_probability(&ideal, 0.0, PI / 4.0) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn coincidence_probability_is_symmetric_and_offset_invariant() {
        let st = EntangledPairState::new(0.0, 0.93);
        for k in 0..40 {
            let a = 0.17 * k as f64;
            let b = -0.05 * k as f64;
            let p = coincidence_probability(&st, a, b);
            assert!((p - coincidence_probability(&st, b, a)).abs() < 1e-12);
            assert!((p - coincidence_probability(&st, a + 1.234, b + 1.234)).abs() < 1e-12);
        }
    }

    #[test]
    fn visibility_links_back_to_intrinsic_visibility() {
        // max over Δ of P minus min, over their sum, recovers v.
        for &v in &[1.0, 0.93, 0.5, 0.988] {
            let st = EntangledPairState::new(0.0, v);
            let mut max = f64::MIN;
            let mut min = f64::MAX;
            for k in 0..=2000 {
                let p = coincidence_probability(&st, PI * k as f64 / 2000.0, 0.0);
                max = max.max(p);
                min = min.min(p);
            }
            let recovered = (max - min) / (max + min);
            assert!((recovered - v).abs() < 1e-6, "v={v} recovered={recovered}");
        }
    }

    #[test]
    fn visibility_arithmetic() {
        assert!((visibility(100.0, 0.0).unwrap() - 1.0).abs() < 1e-12);
        assert!(visibility(50.0, 50.0).unwrap().abs() < 1e-12);
        assert!((visibility(1200.0, 63.0).unwrap() - 0.9002).abs() < 5e-5);
        assert_eq!(visibility(0.0, 0.0), Err(PolMathError::UndefinedVisibility));
    }

    #[test]
    fn rotation_axis_flip() {
        let r = RotationSU2::from_axis_angle([1.0, 0.0, 0.0], PI);
        let s = StokesVector::new(0.0, 1.0, 0.0, 1.0);
        let out = r.apply(&s);
        assert!((out.s2 + 1.0).abs() < 1e-12 && out.s1.abs() < 1e-12 && out.s3.abs() < 1e-12);
    }

    #[test]
    fn identity_preserves_state() {
        let s = StokesVector::new(0.3, -0.8, 0.5, 2.0);
        let out = RotationSU2::identity().apply(&s);
        assert!((out.s1 - s.s1).abs() < 1e-15);
        assert!((out.intensity - s.intensity).abs() < 1e-15);
    }

    #[test]
    fn drift_step_zero_rate_is_identity_increment() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let r = RotationSU2::from_retardations(0.4, 1.1, -0.2);
        let out = drift_step(&r, 2.6, 0.0, 1.0, &mut rng);
        assert!(out.distance(&r) < 1e-15);
    }

    #[test]
    fn drift_step_is_deterministic_given_seed() {
        let run = |seed: u64| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut r = RotationSU2::identity();
            for _ in 0..50 {
                r = drift_step(&r, 2.6, 0.01, 1.0, &mut rng);
            }
            r
        };
        assert!(run(99).distance(&run(99)) < 1e-15);
        assert!(run(99).distance(&run(100)) > 1e-6);
    }

    #[test]
    fn drift_calibration_destroys_correlations_over_a_degree_excursion() {
        // κ = 2.6 rad/°C is the scenario default: a 1.2 °C excursion rotates
        // the state by κ·ΔT ≈ 3.12 rad > π/2, which collapses the averaged
        // H/V + P/M visibility regardless of the drift axis.
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let kappa = 2.6;
        let angle = kappa * 1.2;
        assert!(angle > PI / 2.0);
        for _ in 0..200 {
            let r = RotationSU2::from_axis_angle(random_unit_axis(&mut rng), angle);
            let vis_hv = r.apply_axis([1.0, 0.0, 0.0])[0];
            let vis_pm = r.apply_axis([0.0, 1.0, 0.0])[1];
            let avg = (vis_hv + vis_pm) / 2.0;
            assert!(avg < 0.2, "average visibility {avg} after excursion");
        }
    }

    proptest! {
        #[test]
        fn rotations_preserve_norm_and_intensity(
            a in -PI..PI, b in -PI..PI, c in -PI..PI,
            s1 in -1.0..1.0f64, s2 in -1.0..1.0f64, s3 in -1.0..1.0f64,
        ) {
            let r = RotationSU2::from_retardations(a, b, c);
            let s = StokesVector::new(s1, s2, s3, 1.5);
            let out = r.apply(&s);
            prop_assert!((out.degree_of_polarization() - s.degree_of_polarization()).abs() < ROTATION_TOL);
            prop_assert!((out.intensity - s.intensity).abs() == 0.0);
        }

        #[test]
        fn inverse_cancels(
            a in -PI..PI, b in -PI..PI, c in -PI..PI,
            s1 in -1.0..1.0f64, s2 in -1.0..1.0f64, s3 in -1.0..1.0f64,
        ) {
            let r = RotationSU2::from_retardations(a, b, c);
            let s = StokesVector::new(s1, s2, s3, 1.0);
            let out = r.compose(&r.inverse()).apply(&s);
            prop_assert!((out.s1 - s.s1).abs() < ROTATION_TOL);
            prop_assert!((out.s2 - s.s2).abs() < ROTATION_TOL);
            prop_assert!((out.s3 - s.s3).abs() < ROTATION_TOL);
        }

        #[test]
        fn composition_is_associative(
            a1 in -PI..PI, a2 in -PI..PI, a3 in -PI..PI,
            b1 in -PI..PI, b2 in -PI..PI, b3 in -PI..PI,
        ) {
            let r1 = RotationSU2::from_retardations(a1, a2, a3);
            let r2 = RotationSU2::from_retardations(b1, b2, b3);
            let r3 = RotationSU2::from_axis_angle([0.0, 0.0, 1.0], a1 + b2);
            let lhs = r1.compose(&r2).compose(&r3);
            let rhs = r1.compose(&r2.compose(&r3));
            prop_assert!(lhs.distance(&rhs) < ROTATION_TOL);
        }

        #[test]
        fn misalignment_qber_follows_sin_squared(delta in 0.0..0.6f64) {
            // Error probability for a relative analyzer misalignment δ with
            // perfect intrinsic visibility is sin²(δ).
            let st = EntangledPairState::ideal();
            let err = coincidence_probability(&st, 0.0, delta);
            let ok = coincidence_probability(&st, 0.0, PI / 2.0 + delta);
            let qber = err / (err + ok);
            prop_assert!((qber - delta.sin().powi(2)).abs() < 1e-9);
        }
    }
}
