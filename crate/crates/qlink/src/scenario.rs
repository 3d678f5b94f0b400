//! Flat key=value scenario files: link parameters, detector and source
//! settings, distillation knobs, campaign dynamics and the timed event
//! list. `#` starts a comment; repeated `event` keys build the script.

use std::path::Path;

use thiserror::Error;

use crate::campaign::{CampaignConfig, EventKind, ScenarioEvent, StartupMode};
use crate::endpoint::PipelineOptions;
use crate::linksim::{
    calibrated_efficiency, ChannelState, DetectorModel, LinkScenario, SourceParams,
};
use crate::mgmt::MgmtConfig;
use crate::plant::{Plant, PlantDynamics, TemperatureProfile};
use crate::polmath::EntangledPairState;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario file: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown scenario key `{0}`")]
    UnknownKey(String),
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub duration_s: f64,

    // Source.
    pub pump_mw: f64,
    pub pair_rate_per_mw: f64,
    pub coupling_1550: f64,
    pub transmission_alice: f64,
    pub transmission_bob: f64,
    pub coherence_time_ps: f64,
    pub accidental_rate_ref: f64,
    pub accidental_ref_power_mw: f64,

    // Detectors.
    pub detector_efficiency: f64,
    /// When set, overrides the efficiency so the full chain (including
    /// window acceptance) reaches this observed coincidence probability.
    pub target_coincidence_prob: Option<f64>,
    pub dark_rate: f64,
    pub jitter_ps: f64,
    pub dead_time_ns: f64,
    pub gate_separation_ns: f64,
    pub gate_width_ns: f64,

    // Channel.
    pub length_km: f64,
    pub attenuation_db_per_km: f64,
    pub excess_loss_db: f64,
    pub coincidence_window_ns: f64,
    pub visibility_intrinsic: f64,

    // Distillation.
    pub block_size: usize,
    pub initial_qber_estimate: f64,
    pub auth_replenish_bytes: usize,
    pub psk_bytes: usize,

    // Campaign dynamics.
    pub campaign_hours: f64,
    pub startup: StartupMode,
    pub controls_enabled: bool,
    pub drift_kappa_rad_per_degc: f64,
    pub arm_drift_rad_per_s: f64,
    pub piezo_width: f64,
    pub piezo_optimum_walk: f64,
    pub polarimeter_noise_rad: f64,
    pub fresh_piezo_detune: f64,
    pub fresh_delay_range_ps: f64,
    pub temperature: TemperatureProfile,
    pub events: Vec<ScenarioEvent>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let source = SourceParams::default();
        let detectors = DetectorModel::default();
        Self {
            seed: 1,
            duration_s: 10.0,
            pump_mw: source.pump_power_mw,
            pair_rate_per_mw: source.pair_rate_per_mw,
            coupling_1550: source.coupling_1550,
            transmission_alice: source.transmission_alice,
            transmission_bob: source.transmission_bob,
            coherence_time_ps: source.coherence_time_ps,
            accidental_rate_ref: source.accidental_rate_ref,
            accidental_ref_power_mw: source.accidental_ref_power_mw,
            detector_efficiency: detectors.efficiency,
            target_coincidence_prob: None,
            dark_rate: detectors.dark_rate,
            jitter_ps: detectors.jitter_sigma_ps,
            dead_time_ns: detectors.dead_time_ns,
            gate_separation_ns: detectors.min_gate_separation_ns,
            gate_width_ns: detectors.gate_width_ns,
            length_km: 0.0,
            attenuation_db_per_km: 0.204,
            excess_loss_db: 0.0,
            coincidence_window_ns: 1.5,
            visibility_intrinsic: 0.988,
            block_size: crate::keystack::DEFAULT_BLOCK_SIZE,
            initial_qber_estimate: 0.03,
            auth_replenish_bytes: 512,
            psk_bytes: 131_072,
            campaign_hours: 1.0,
            startup: StartupMode::AlreadyAligned,
            controls_enabled: true,
            drift_kappa_rad_per_degc: 2.6,
            arm_drift_rad_per_s: 0.0,
            piezo_width: 1.0,
            piezo_optimum_walk: 0.0,
            polarimeter_noise_rad: 0.006,
            fresh_piezo_detune: 0.45,
            fresh_delay_range_ps: 8000.0,
            temperature: TemperatureProfile::Constant(20.0),
            events: Vec::new(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_file(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_content(&text)
    }

    pub fn from_str_content(text: &str) -> Result<Self, ScenarioError> {
        let mut cfg = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ScenarioError::Parse {
                line: line_no,
                message: "expected `key = value`".into(),
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(key, value).map_err(|message| ScenarioError::Parse {
                line: line_no,
                message,
            })?;
        }
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num(v: &str) -> Result<f64, String> {
            v.parse::<f64>().map_err(|_| format!("not a number: `{v}`"))
        }
        fn int(v: &str) -> Result<u64, String> {
            v.parse::<u64>().map_err(|_| format!("not an integer: `{v}`"))
        }
        match key {
            "seed" => self.seed = int(value)?,
            "duration_s" => self.duration_s = num(value)?,
            "pump_mw" => self.pump_mw = num(value)?,
            "pair_rate_per_mw" => self.pair_rate_per_mw = num(value)?,
            "coupling_1550" => self.coupling_1550 = num(value)?,
            "transmission_alice" => self.transmission_alice = num(value)?,
            "transmission_bob" => self.transmission_bob = num(value)?,
            "coherence_time_ps" => self.coherence_time_ps = num(value)?,
            "accidental_rate_ref" => self.accidental_rate_ref = num(value)?,
            "accidental_ref_power_mw" => self.accidental_ref_power_mw = num(value)?,
            "detector_efficiency" => self.detector_efficiency = num(value)?,
            "target_coincidence_prob" => self.target_coincidence_prob = Some(num(value)?),
            "dark_rate" => self.dark_rate = num(value)?,
            "jitter_ps" => self.jitter_ps = num(value)?,
            "dead_time_ns" => self.dead_time_ns = num(value)?,
            "gate_separation_ns" => self.gate_separation_ns = num(value)?,
            "gate_width_ns" => self.gate_width_ns = num(value)?,
            "length_km" => self.length_km = num(value)?,
            "attenuation_db_per_km" => self.attenuation_db_per_km = num(value)?,
            "excess_loss_db" => self.excess_loss_db = num(value)?,
            "coincidence_window_ns" => self.coincidence_window_ns = num(value)?,
            "visibility_intrinsic" => self.visibility_intrinsic = num(value)?,
            "block_size" => self.block_size = int(value)? as usize,
            "initial_qber_estimate" => self.initial_qber_estimate = num(value)?,
            "auth_replenish_bytes" => self.auth_replenish_bytes = int(value)? as usize,
            "psk_bytes" => self.psk_bytes = int(value)? as usize,
            "campaign_hours" => self.campaign_hours = num(value)?,
            "startup" => {
                self.startup = match value {
                    "aligned" => StartupMode::AlreadyAligned,
                    "fresh" => StartupMode::Fresh,
                    "routine" => StartupMode::Routine,
                    other => return Err(format!("unknown startup mode `{other}`")),
                }
            }
            "controls" => {
                self.controls_enabled = match value {
                    "on" => true,
                    "off" => false,
                    other => return Err(format!("controls must be on/off, got `{other}`")),
                }
            }
            "drift_kappa_rad_per_degc" => self.drift_kappa_rad_per_degc = num(value)?,
            "arm_drift_rad_per_s" => self.arm_drift_rad_per_s = num(value)?,
            "piezo_width" => self.piezo_width = num(value)?,
            "piezo_optimum_walk" => self.piezo_optimum_walk = num(value)?,
            "polarimeter_noise_rad" => self.polarimeter_noise_rad = num(value)?,
            "fresh_piezo_detune" => self.fresh_piezo_detune = num(value)?,
            "fresh_delay_range_ps" => self.fresh_delay_range_ps = num(value)?,
            "temp_profile" => {
                let parts: Vec<&str> = value.split_whitespace().collect();
                self.temperature = match parts.as_slice() {
                    ["constant", t] => TemperatureProfile::Constant(num(t)?),
                    ["sine", base, amp, period] => TemperatureProfile::Sine {
                        base: num(base)?,
                        amplitude: num(amp)?,
                        period_s: num(period)?,
                        phase_s: 0.0,
                    },
                    ["sine", base, amp, period, phase] => TemperatureProfile::Sine {
                        base: num(base)?,
                        amplitude: num(amp)?,
                        period_s: num(period)?,
                        phase_s: num(phase)?,
                    },
                    ["ramp", from, to, ramp_s] => TemperatureProfile::Ramp {
                        from: num(from)?,
                        to: num(to)?,
                        ramp_s: num(ramp_s)?,
                    },
                    _ => return Err(format!("bad temp_profile `{value}`")),
                };
            }
            "event" => {
                let parts: Vec<&str> = value.split_whitespace().collect();
                let event = match parts.as_slice() {
                    [at, "network_down", dur] => ScenarioEvent {
                        at_s: num(at)?,
                        kind: EventKind::NetworkDown { duration_s: num(dur)? },
                    },
                    [at, "detector_down", dur] => ScenarioEvent {
                        at_s: num(at)?,
                        kind: EventKind::DetectorDown { duration_s: num(dur)? },
                    },
                    [at, "fiber_jump", angle] => ScenarioEvent {
                        at_s: num(at)?,
                        kind: EventKind::FiberJump { angle_rad: num(angle)? },
                    },
                    _ => return Err(format!("bad event `{value}`")),
                };
                self.events.push(event);
            }
            other => return Err(format!("unknown scenario key `{other}`")),
        }
        Ok(())
    }

    pub fn source_params(&self) -> SourceParams {
        SourceParams {
            pump_power_mw: self.pump_mw,
            pair_rate_per_mw: self.pair_rate_per_mw,
            coupling_1550: self.coupling_1550,
            transmission_alice: self.transmission_alice,
            transmission_bob: self.transmission_bob,
            coherence_time_ps: self.coherence_time_ps,
            accidental_rate_ref: self.accidental_rate_ref,
            accidental_ref_power_mw: self.accidental_ref_power_mw,
        }
    }

    pub fn detector_model(&self) -> DetectorModel {
        let mut d = DetectorModel {
            efficiency: self.detector_efficiency,
            dark_rate: self.dark_rate,
            jitter_sigma_ps: self.jitter_ps,
            dead_time_ns: self.dead_time_ns,
            min_gate_separation_ns: self.gate_separation_ns,
            gate_width_ns: self.gate_width_ns,
        };
        if let Some(target) = self.target_coincidence_prob {
            d.efficiency = calibrated_efficiency(
                target,
                &self.source_params(),
                &d,
                self.coincidence_window_ns,
            );
        }
        d
    }

    pub fn total_loss_db(&self) -> f64 {
        self.attenuation_db_per_km * self.length_km + self.excess_loss_db
    }

    /// Event-level scenario for the distillation pipeline. The excess loss
    /// is folded into an effective length so the event generator sees the
    /// same total attenuation as the rate model.
    pub fn link_scenario(&self) -> LinkScenario {
        let effective_length = if self.attenuation_db_per_km > 0.0 {
            self.total_loss_db() / self.attenuation_db_per_km
        } else {
            self.length_km
        };
        LinkScenario {
            source: self.source_params(),
            channel: ChannelState {
                length_km: effective_length,
                attenuation_db_per_km: self.attenuation_db_per_km,
                rotation: crate::polmath::RotationSU2::identity(),
                coincidence_window_ns: self.coincidence_window_ns,
                per_detector_delay_ps: [0; 4],
            },
            detectors: self.detector_model(),
            state: EntangledPairState::new(0.0, self.visibility_intrinsic),
            duration_s: self.duration_s,
            seed: self.seed,
            record_events: false,
        }
    }

    pub fn plant_dynamics(&self) -> PlantDynamics {
        PlantDynamics {
            total_loss_db: self.total_loss_db(),
            drift_kappa_rad_per_degc: self.drift_kappa_rad_per_degc,
            arm_drift_rad_per_s: self.arm_drift_rad_per_s,
            piezo_width: self.piezo_width,
            piezo_optimum_walk: self.piezo_optimum_walk,
            polarimeter_noise_rad: self.polarimeter_noise_rad,
            intrinsic_visibility: self.visibility_intrinsic,
            temperature: self.temperature.clone(),
        }
    }

    pub fn plant(&self) -> Plant {
        let mut plant = Plant::new(
            self.source_params(),
            self.detector_model(),
            self.plant_dynamics(),
            self.seed,
        );
        if matches!(self.startup, StartupMode::Fresh) {
            plant.apply_fresh_install(self.fresh_piezo_detune, self.fresh_delay_range_ps);
        }
        plant
    }

    pub fn campaign_config(&self) -> CampaignConfig {
        CampaignConfig {
            seed: self.seed,
            duration_s: self.campaign_hours * 3600.0,
            startup: self.startup,
            controls_enabled: self.controls_enabled,
            events: self.events.clone(),
            mgmt: MgmtConfig::default(),
        }
    }

    pub fn pipeline_options(&self) -> PipelineOptions {
        PipelineOptions {
            block_size: self.block_size,
            initial_qber_estimate: self.initial_qber_estimate,
            auth_replenish_bytes: self.auth_replenish_bytes,
        }
    }
}
