//! Closed-form link model: exponential rate decay with fiber length, the
//! QBER decomposition into system/dark/accidental parts, the CASCADE
//! overhead table and the secure-key-rate formula, plus the pump-power
//! model with trigger-side dead-time saturation.
//!
//! These functions double as the oracle the event-level Monte Carlo in
//! [`crate::linksim`] is validated against.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AnalyticError {
    #[error("QBER {0} outside the privacy-amplification domain [0, 0.5)")]
    TauOutOfDomain(f64),
    #[error("binary entropy argument {0} outside [0, 1]")]
    EntropyOutOfDomain(f64),
}

/// Link budget of the distance model. Defaults are the measured values of
/// the 6 mW laboratory configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkBudget {
    /// Fiber attenuation, dB/km.
    pub alpha_db_per_km: f64,
    /// Coincidence rate per detector at 0 km, counts/s.
    pub c0: f64,
    /// Accidental coincidence rate per detector at 0 km, counts/s.
    pub a0: f64,
    /// Dark count rate per detector, counts/s.
    pub dark_rate: f64,
    /// Constant system error (optics, alignment, source imperfection).
    pub e_sys: f64,
}

impl Default for LinkBudget {
    fn default() -> Self {
        Self {
            alpha_db_per_km: 0.204,
            c0: 9000.0,
            a0: 240.0,
            dark_rate: 80.0,
            e_sys: 0.006,
        }
    }
}

impl LinkBudget {
    /// Budget variant with the best measured detector (d = 4 c/s).
    pub fn best_detector() -> Self {
        Self { dark_rate: 4.0, ..Self::default() }
    }
}

/// QBER split into its three physical sources plus the true/false bit
/// rates it was derived from. The components sum to the total exactly.
#[derive(Debug, Clone, Copy)]
pub struct QberBreakdown {
    pub e_system: f64,
    pub e_dark: f64,
    pub e_accidental: f64,
    /// Correct sifted bits per second.
    pub n_true: f64,
    /// Erroneous sifted bits per second.
    pub n_false: f64,
}

impl QberBreakdown {
    /// Builds the breakdown from component error fractions and the sifted
    /// bit rate; `n_false/(n_true+n_false)` then reproduces the component
    /// sum by construction.
    pub fn from_components(e_system: f64, e_dark: f64, e_accidental: f64, sifted_rate: f64) -> Self {
        let total = e_system + e_dark + e_accidental;
        let n_false = total * sifted_rate;
        Self {
            e_system,
            e_dark,
            e_accidental,
            n_true: sifted_rate - n_false,
            n_false,
        }
    }

    pub fn total(&self) -> f64 {
        self.n_false / (self.n_true + self.n_false)
    }
}

/// Signal coincidence rate per detector at fiber length `l_km`.
pub fn coincidence_rate(budget: &LinkBudget, l_km: f64) -> f64 {
    budget.c0 * 10f64.powf(-budget.alpha_db_per_km * l_km / 10.0)
}

/// Accidental (multi-pair) coincidence rate per detector at `l_km`.
pub fn accidental_rate(budget: &LinkBudget, l_km: f64) -> f64 {
    budget.a0 * 10f64.powf(-budget.alpha_db_per_km * l_km / 10.0)
}

/// Noise QBER from accidentals and dark counts: (a+d)/(2c+2a+2d).
pub fn qber_noise(budget: &LinkBudget, l_km: f64) -> f64 {
    let c = coincidence_rate(budget, l_km);
    let a = accidental_rate(budget, l_km);
    let d = budget.dark_rate;
    (a + d) / (2.0 * (c + a + d))
}

/// Total QBER at length `l_km`: noise term plus the constant system error.
pub fn qber_total(budget: &LinkBudget, l_km: f64) -> f64 {
    qber_noise(budget, l_km) + budget.e_sys
}

/// Binary entropy in bits, with h(0) = h(1) = 0.
pub fn binary_entropy(e: f64) -> Result<f64, AnalyticError> {
    if !(0.0..=1.0).contains(&e) {
        return Err(AnalyticError::EntropyOutOfDomain(e));
    }
    if e == 0.0 || e == 1.0 {
        return Ok(0.0);
    }
    Ok(-e * e.log2() - (1.0 - e) * (1.0 - e).log2())
}

/// Fraction of the reconciled key discarded by privacy amplification under
/// the individual-attack bound: τ(e) = log₂(1 + 4e − 4e²).
pub fn pa_fraction_tau(e: f64) -> Result<f64, AnalyticError> {
    if !(0.0..0.5).contains(&e) {
        return Err(AnalyticError::TauOutOfDomain(e));
    }
    Ok((1.0 + 4.0 * e - 4.0 * e * e).log2())
}

/// CASCADE disclosure overhead relative to the Shannon limit. Linear
/// between the two measured points (3 % → 1.16, 5 % → 1.18), clamped at
/// the endpoints.
pub fn cascade_overhead_f(e: f64) -> f64 {
    if e <= 0.03 {
        1.16
    } else if e >= 0.05 {
        1.18
    } else {
        1.16 + (e - 0.03) / 0.02 * 0.02
    }
}

/// Secure key rate after sifting, error correction and privacy
/// amplification: (4c/2)·(1 − τ(e) − f(e)·h(e)), clamped at zero.
pub fn secure_key_rate(budget: &LinkBudget, l_km: f64) -> f64 {
    let e = qber_total(budget, l_km);
    let sifted = 4.0 * coincidence_rate(budget, l_km) / 2.0;
    secure_fraction(e).map_or(0.0, |frac| (sifted * frac).max(0.0))
}

/// The per-sifted-bit secure fraction 1 − τ(e) − f(e)·h(e); `None` once the
/// QBER leaves the τ domain (the key rate is zero well before that).
pub fn secure_fraction(e: f64) -> Option<f64> {
    let tau = pa_fraction_tau(e).ok()?;
    let h = binary_entropy(e).ok()?;
    Some(1.0 - tau - cascade_overhead_f(e) * h)
}

/// Optional flat reduction for security against coherent attacks.
pub fn coherent_attack_adjustment(rate: f64, coherent_bound: bool) -> f64 {
    if coherent_bound {
        rate * 0.92
    } else {
        rate
    }
}

/// Calibration of the pump-power model, anchored at the published 2 mW
/// operating point.
#[derive(Debug, Clone, Copy)]
pub struct PowerCalibration {
    /// Observed trigger rate at the 2 mW anchor, counts/s.
    pub trigger_obs_at_anchor: f64,
    /// Anchor pump power, mW.
    pub anchor_power_mw: f64,
    /// Trigger-side array dead time, seconds.
    pub dead_time_s: f64,
    /// Probability that a trigger yields a coincidence (loss chain).
    pub coincidence_prob: f64,
    pub e_sys: f64,
    pub e_dark: f64,
    /// Accidental-error slope, QBER per mW.
    pub kappa_acc_per_mw: f64,
}

impl Default for PowerCalibration {
    fn default() -> Self {
        Self {
            trigger_obs_at_anchor: 415_000.0,
            anchor_power_mw: 2.0,
            dead_time_s: 300e-9,
            coincidence_prob: 0.04,
            e_sys: 0.006,
            e_dark: 0.004,
            kappa_acc_per_mw: 0.0025,
        }
    }
}

impl PowerCalibration {
    /// True (dead-time free) trigger rate per mW, recovered by inverting the
    /// non-paralyzable saturation at the anchor point.
    pub fn true_rate_per_mw(&self) -> f64 {
        let obs = self.trigger_obs_at_anchor;
        obs / (self.anchor_power_mw * (1.0 - obs * self.dead_time_s))
    }

    /// Observed trigger rate at pump power `p_mw`:
    /// R_obs = R_true / (1 + R_true·τ).
    pub fn trigger_rate(&self, p_mw: f64) -> f64 {
        let r_true = self.true_rate_per_mw() * p_mw;
        r_true / (1.0 + r_true * self.dead_time_s)
    }

    /// Total coincidence rate at pump power `p_mw` (constant coincidence
    /// probability over the power range).
    pub fn coincidence_rate_total(&self, p_mw: f64) -> f64 {
        self.coincidence_prob * self.trigger_rate(p_mw)
    }
}

/// QBER decomposition versus pump power: constant system and dark parts,
/// accidental part linear in power.
pub fn qber_vs_power(p_mw: f64, cal: &PowerCalibration) -> QberBreakdown {
    assert!(p_mw > 0.0, "pump power must be positive");
    let e_acc = cal.kappa_acc_per_mw * p_mw;
    let sifted = cal.coincidence_rate_total(p_mw) / 2.0;
    QberBreakdown::from_components(cal.e_sys, cal.e_dark, e_acc, sifted)
}

/// Secure key rate versus pump power; unimodal with an interior maximum
/// under the default calibration.
pub fn key_rate_vs_power(p_mw: f64, cal: &PowerCalibration) -> f64 {
    assert!(p_mw > 0.0, "pump power must be positive");
    let e = cal.e_sys + cal.e_dark + cal.kappa_acc_per_mw * p_mw;
    let sifted = cal.coincidence_rate_total(p_mw) / 2.0;
    secure_fraction(e).map_or(0.0, |frac| (sifted * frac).max(0.0))
}

/// One row of the distance-sweep curve.
#[derive(Debug, Clone, Copy)]
pub struct DistanceRow {
    pub l_km: f64,
    pub coincidence: f64,
    pub accidental: f64,
    pub e_noise: f64,
    pub e_total: f64,
    pub k_sec: f64,
}

pub fn distance_sweep(budget: &LinkBudget, lengths_km: &[f64], coherent_bound: bool) -> Vec<DistanceRow> {
    lengths_km
        .iter()
        .map(|&l| DistanceRow {
            l_km: l,
            coincidence: coincidence_rate(budget, l),
            accidental: accidental_rate(budget, l),
            e_noise: qber_noise(budget, l),
            e_total: qber_total(budget, l),
            k_sec: coherent_attack_adjustment(secure_key_rate(budget, l), coherent_bound),
        })
        .collect()
}

/// One row of the power-sweep curve.
#[derive(Debug, Clone, Copy)]
pub struct PowerRow {
    pub power_mw: f64,
    pub e_system: f64,
    pub e_dark: f64,
    pub e_accidental: f64,
    pub e_total: f64,
    pub trigger_rate: f64,
    pub coincidence_rate: f64,
    pub k_sec: f64,
}

pub fn power_sweep(cal: &PowerCalibration, powers_mw: &[f64], coherent_bound: bool) -> Vec<PowerRow> {
    powers_mw
        .iter()
        .map(|&p| {
            let q = qber_vs_power(p, cal);
            PowerRow {
                power_mw: p,
                e_system: q.e_system,
                e_dark: q.e_dark,
                e_accidental: q.e_accidental,
                e_total: q.total(),
                trigger_rate: cal.trigger_rate(p),
                coincidence_rate: cal.coincidence_rate_total(p),
                k_sec: coherent_attack_adjustment(key_rate_vs_power(p, cal), coherent_bound),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(actual: f64, expected: f64, tol: f64) -> bool {
        (actual - expected).abs() <= tol
    }

    fn close_rel(actual: f64, expected: f64, rel: f64) -> bool {
        (actual - expected).abs() <= rel * expected.abs()
    }

    #[test]
    fn coincidence_rate_anchors() {
        let b = LinkBudget::default();
        assert!(close(coincidence_rate(&b, 0.0), 9000.0, 1e-9));
        assert!(close(coincidence_rate(&b, 25.0), 2781.3, 0.5));
        assert!(close(coincidence_rate(&b, 50.0), 859.5, 0.5));
    }

    #[test]
    fn accidental_rate_anchors() {
        let b = LinkBudget::default();
        assert!(close(accidental_rate(&b, 0.0), 240.0, 1e-9));
        assert!(close(accidental_rate(&b, 25.0), 74.2, 0.5));
        assert!(accidental_rate(&b, 1e6) < 1e-12);
    }

    #[test]
    fn qber_noise_values() {
        let b = LinkBudget::default();
        assert!(close(qber_noise(&b, 25.0), 0.0263, 2e-4));
        assert!(close(qber_total(&b, 25.0), 0.0323, 2e-4));
        assert!(close(qber_noise(&b, 50.0), 0.0535, 2e-4));
        assert!(close(qber_total(&b, 50.0), 0.0595, 2e-4));
        let clean = LinkBudget { a0: 0.0, dark_rate: 0.0, ..b };
        assert_eq!(qber_noise(&clean, 10.0), 0.0);
    }

    #[test]
    fn binary_entropy_values() {
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        assert!(close(binary_entropy(0.5).unwrap(), 1.0, 1e-12));
        assert!(close(binary_entropy(0.023).unwrap(), 0.1580, 1e-4));
        assert!(binary_entropy(1.1).is_err());
    }

    #[test]
    fn tau_values() {
        assert_eq!(pa_fraction_tau(0.0).unwrap(), 0.0);
        assert!(close(pa_fraction_tau(0.023).unwrap(), 0.1242, 1e-4));
        assert!(close(pa_fraction_tau(0.5 - 1e-12).unwrap(), 1.0, 1e-9));
        assert_eq!(pa_fraction_tau(0.5), Err(AnalyticError::TauOutOfDomain(0.5)));
    }

    #[test]
    fn cascade_overhead_table() {
        assert!(close(cascade_overhead_f(0.03), 1.16, 1e-12));
        assert!(close(cascade_overhead_f(0.05), 1.18, 1e-12));
        assert!(close(cascade_overhead_f(0.04), 1.17, 1e-12));
        assert!(close(cascade_overhead_f(0.001), 1.16, 1e-12));
        assert!(close(cascade_overhead_f(0.12), 1.18, 1e-12));
    }

    #[test]
    fn key_rates_match_published_points_within_3_percent() {
        let b = LinkBudget::default();
        // Frozen oracle values from direct evaluation of the formulas.
        assert!(close(secure_key_rate(&b, 0.0), 12432.0, 2.0));
        assert!(close(secure_key_rate(&b, 25.0), 3289.0, 2.0));
        assert!(close(secure_key_rate(&b, 50.0), 558.4, 2.0));
        // Published rates.
        assert!(close_rel(secure_key_rate(&b, 0.0), 12500.0, 0.03));
        assert!(close_rel(secure_key_rate(&b, 25.0), 3300.0, 0.03));
        assert!(close_rel(secure_key_rate(&b, 50.0), 550.0, 0.03));
    }

    #[test]
    fn key_rate_is_monotone_decreasing_in_length() {
        let b = LinkBudget::default();
        let mut prev = f64::INFINITY;
        for i in 0..=600 {
            let k = secure_key_rate(&b, i as f64 * 0.25);
            assert!(k <= prev + 1e-9, "not monotone at {} km", i as f64 * 0.25);
            prev = k;
        }
    }

    #[test]
    fn best_detector_reaches_100_km() {
        let b = LinkBudget::best_detector();
        let k100 = secure_key_rate(&b, 100.0);
        assert!(k100 > 0.0 && (10.0..=100.0).contains(&k100), "k(100km)={k100}");
        // Frozen oracle value.
        assert!(close(k100, 82.0, 0.5));
    }

    #[test]
    fn qber_breakdown_sums_exactly() {
        for p in [0.5, 2.0, 6.0, 10.0, 14.0] {
            let q = qber_vs_power(p, &PowerCalibration::default());
            let total = q.e_system + q.e_dark + q.e_accidental;
            assert!((q.total() - total).abs() < 1e-12);
        }
    }

    #[test]
    fn power_model_anchor_points() {
        let cal = PowerCalibration::default();
        assert!(close(cal.trigger_rate(2.0), 415_000.0, 1.0));
        // Saturation: doubling the pump less than doubles the triggers.
        assert!(cal.trigger_rate(4.0) < 2.0 * cal.trigger_rate(2.0));
        let q2 = qber_vs_power(2.0, &cal);
        assert!(close(q2.total(), 0.014, 0.002), "QBER(2mW)={}", q2.total());
        let q10 = qber_vs_power(10.0, &cal);
        assert!(q10.e_accidental > 0.02, "e_acc(10mW)={}", q10.e_accidental);
        let k2 = key_rate_vs_power(2.0, &cal);
        assert!(close(k2, 6500.0, 200.0), "k(2mW)={k2}");
        // Limit check: at vanishing power the QBER approaches the 1.0 %
        // system+dark floor.
        let q0 = qber_vs_power(1e-9, &cal);
        assert!(close(q0.total(), 0.010, 1e-6));
    }

    #[test]
    fn key_rate_power_maximum_lies_between_8_and_12_mw() {
        let cal = PowerCalibration::default();
        let mut best = (0.0f64, 0.0f64);
        let mut prev = 0.0;
        let mut rises = 0;
        let mut falls = 0;
        for i in 1..=560 {
            let p = i as f64 * 0.025;
            let k = key_rate_vs_power(p, &cal);
            if k > best.1 {
                best = (p, k);
            }
            if i > 1 {
                if k > prev {
                    rises += 1;
                } else {
                    falls += 1;
                }
            }
            prev = k;
        }
        assert!((8.0..=12.0).contains(&best.0), "argmax at {} mW", best.0);
        assert!(rises > 0 && falls > 0, "curve must be unimodal with interior max");
    }

    #[test]
    fn key_rate_zero_when_error_saturates() {
        let cal = PowerCalibration::default();
        let p_half = (0.5 - cal.e_sys - cal.e_dark) / cal.kappa_acc_per_mw;
        assert_eq!(key_rate_vs_power(p_half + 1.0, &cal), 0.0);
    }

    #[test]
    fn coherent_adjustment() {
        assert!(close(coherent_attack_adjustment(1000.0, true), 920.0, 1e-9));
        assert_eq!(coherent_attack_adjustment(0.0, true), 0.0);
        assert_eq!(coherent_attack_adjustment(1000.0, false), 1000.0);
    }

    #[test]
    fn entropy_and_tau_vanish_at_zero_and_increase() {
        let mut prev_h = 0.0;
        let mut prev_t = 0.0;
        for i in 1..50 {
            let e = i as f64 * 0.01;
            let h = binary_entropy(e).unwrap();
            let t = pa_fraction_tau(e).unwrap();
            assert!(h > prev_h && t > prev_t, "not increasing at e={e}");
            prev_h = h;
            prev_t = t;
        }
    }

    #[test]
    fn distance_sweep_rows() {
        let rows = distance_sweep(&LinkBudget::default(), &[0.0, 25.0], false);
        assert_eq!(rows.len(), 2);
        assert!(close(rows[1].accidental, 74.2, 0.5));
        assert!(distance_sweep(&LinkBudget::default(), &[], false).is_empty());
    }
}
