//! Management state machine: automated start-up, the periodic maintenance
//! cycle, QBER-triggered interrupts and availability bookkeeping. Exactly
//! one actuator-owning routine runs at a time; every simulated second is
//! attributed to exactly one availability category.

use std::collections::VecDeque;

use thiserror::Error;

use crate::control::{
    align_state, delay_scan, polarization_control, source_stabilize, standard_references,
    AlignSettings, ControlError, DelayScanSettings, PolControlSettings, RoutineLog,
    StabilizeSettings,
};
use crate::plant::Plant;

#[derive(Debug, Error)]
pub enum MgmtError {
    #[error("start-up stage {stage:?} failed twice: {source}")]
    StartupFailed { stage: MgmtNode, source: ControlError },
    #[error("availability report on an empty run")]
    EmptyLedger,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MgmtNode {
    Idle,
    StartupDelaySync,
    StartupSourceStab,
    StartupStateAlign,
    QkdActive,
    PolControlRunning,
    StateAlignRunning,
    DetectorShutdown,
    NetworkDown,
}

impl MgmtNode {
    pub fn name(self) -> &'static str {
        match self {
            MgmtNode::Idle => "idle",
            MgmtNode::StartupDelaySync => "startup_delay_sync",
            MgmtNode::StartupSourceStab => "startup_source_stab",
            MgmtNode::StartupStateAlign => "startup_state_align",
            MgmtNode::QkdActive => "qkd_active",
            MgmtNode::PolControlRunning => "pol_control_running",
            MgmtNode::StateAlignRunning => "state_align_running",
            MgmtNode::DetectorShutdown => "detector_shutdown",
            MgmtNode::NetworkDown => "network_down",
        }
    }

    /// Availability category of time spent in this node.
    pub fn category(self) -> Category {
        match self {
            MgmtNode::QkdActive | MgmtNode::PolControlRunning => Category::ActiveQkd,
            MgmtNode::NetworkDown => Category::NetworkInterruption,
            MgmtNode::DetectorShutdown => Category::DetectorShutdown,
            MgmtNode::StartupDelaySync
            | MgmtNode::StartupSourceStab
            | MgmtNode::StartupStateAlign
            | MgmtNode::StateAlignRunning => Category::Realignment,
            MgmtNode::Idle => Category::Other,
        }
    }

    /// Legal state machine edges.
    pub fn can_transition_to(self, to: MgmtNode) -> bool {
        use MgmtNode::*;
        matches!(
            (self, to),
            (Idle, StartupDelaySync)
                | (StartupDelaySync, StartupSourceStab)
                | (StartupDelaySync, Idle)
                | (StartupSourceStab, StartupStateAlign)
                | (StartupSourceStab, Idle)
                | (StartupStateAlign, QkdActive)
                | (StartupStateAlign, Idle)
                | (QkdActive, PolControlRunning)
                | (PolControlRunning, QkdActive)
                | (QkdActive, StateAlignRunning)
                | (StateAlignRunning, QkdActive)
                | (StateAlignRunning, Idle)
                | (QkdActive, NetworkDown)
                | (QkdActive, DetectorShutdown)
                | (NetworkDown, StartupDelaySync)
                | (NetworkDown, Idle)
                | (DetectorShutdown, PolControlRunning)
                | (DetectorShutdown, QkdActive)
                | (PolControlRunning, StateAlignRunning)
                | (Idle, QkdActive)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    ActiveQkd,
    NetworkInterruption,
    DetectorShutdown,
    Realignment,
    Other,
}

pub const ALL_CATEGORIES: [Category; 5] = [
    Category::ActiveQkd,
    Category::NetworkInterruption,
    Category::DetectorShutdown,
    Category::Realignment,
    Category::Other,
];

impl Category {
    pub fn index(self) -> usize {
        match self {
            Category::ActiveQkd => 0,
            Category::NetworkInterruption => 1,
            Category::DetectorShutdown => 2,
            Category::Realignment => 3,
            Category::Other => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::ActiveQkd => "active_qkd",
            Category::NetworkInterruption => "network_interruption",
            Category::DetectorShutdown => "detector_shutdown",
            Category::Realignment => "realignment",
            Category::Other => "other",
        }
    }
}

/// Integer-millisecond time accounting so the category sums always equal
/// the elapsed run time exactly.
#[derive(Debug, Clone, Copy, Default)]
pub struct AvailabilityLedger {
    pub ms: [u64; 5],
}

impl AvailabilityLedger {
    pub fn add(&mut self, category: Category, ms: u64) {
        self.ms[category.index()] += ms;
    }

    pub fn total_ms(&self) -> u64 {
        self.ms.iter().sum()
    }

    pub fn fractions(&self) -> Result<[f64; 5], MgmtError> {
        let total = self.total_ms();
        if total == 0 {
            return Err(MgmtError::EmptyLedger);
        }
        Ok(std::array::from_fn(|i| self.ms[i] as f64 / total as f64))
    }
}

/// What the interrupt handler wants done about the current QBER.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    None,
    PolControl,
    StateAlign,
}

#[derive(Debug, Clone)]
pub struct MgmtConfig {
    pub cycle_period_s: f64,
    /// QBER slope that counts as a fast rise, percentage points per minute.
    pub fast_rise_pp_per_min: f64,
    /// Sustained rise above baseline that escalates to state realignment.
    pub slow_rise_pp: f64,
    /// Band around the baseline where no action is taken.
    pub deadband_pp: f64,
    /// How long after a polarisation control the QBER may stay high before
    /// the rise counts as "persisting".
    pub persist_after_pol_s: f64,
    pub scan: DelayScanSettings,
    pub stabilize: StabilizeSettings,
    pub align: AlignSettings,
    pub pol: PolControlSettings,
}

impl Default for MgmtConfig {
    fn default() -> Self {
        Self {
            cycle_period_s: 600.0,
            fast_rise_pp_per_min: 2.0,
            slow_rise_pp: 1.0,
            deadband_pp: 0.5,
            persist_after_pol_s: 90.0,
            scan: DelayScanSettings::default(),
            stabilize: StabilizeSettings::default(),
            align: AlignSettings::default(),
            pol: PolControlSettings::default(),
        }
    }
}

/// Pure interrupt decision, exposed for direct testing: `slope` is the
/// QBER slope in pp/min over the last minute, `pol_control_tried` reports
/// whether polarisation control already ran since the rise began.
pub fn handle_qber_interrupt(
    current_qber: f64,
    baseline: f64,
    slope_pp_per_min: f64,
    pol_control_tried: bool,
    cfg: &MgmtConfig,
) -> Action {
    let rise_pp = (current_qber - baseline) * 100.0;
    if rise_pp.abs() <= cfg.deadband_pp {
        return Action::None;
    }
    if slope_pp_per_min > cfg.fast_rise_pp_per_min {
        return Action::PolControl;
    }
    if rise_pp >= cfg.slow_rise_pp {
        if pol_control_tried {
            Action::StateAlign
        } else {
            Action::PolControl
        }
    } else {
        Action::None
    }
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub at_s: f64,
    pub from: MgmtNode,
    pub to: MgmtNode,
    pub reason: String,
}

#[derive(Debug)]
pub struct StartupReport {
    pub duration_s: f64,
    pub stage_order: Vec<MgmtNode>,
    pub final_coincidence_rate: f64,
    pub optimal_coincidence_rate: f64,
    pub qber_baseline: f64,
    pub routine_logs: Vec<RoutineLog>,
}

#[derive(Debug)]
pub struct CycleReport {
    pub routine_logs: Vec<RoutineLog>,
    pub qkd_interruption_s: f64,
}

/// The management module: one owner of the state machine and the plant's
/// actuators.
#[derive(Debug)]
pub struct Mgmt {
    pub cfg: MgmtConfig,
    node: MgmtNode,
    transitions: Vec<Transition>,
    ledger: AvailabilityLedger,
    accounted_ms: u64,
    pub qber_baseline: f64,
    qber_window: VecDeque<(f64, f64)>,
    last_pol_control_s: Option<f64>,
    rise_started_s: Option<f64>,
    next_cycle_s: f64,
    routine_logs: Vec<RoutineLog>,
}

impl Mgmt {
    pub fn new(cfg: MgmtConfig) -> Self {
        let next_cycle = cfg.cycle_period_s;
        Self {
            cfg,
            node: MgmtNode::Idle,
            transitions: Vec::new(),
            ledger: AvailabilityLedger::default(),
            accounted_ms: 0,
            qber_baseline: 0.0,
            qber_window: VecDeque::new(),
            last_pol_control_s: None,
            rise_started_s: None,
            next_cycle_s: next_cycle,
            routine_logs: Vec::new(),
        }
    }

    pub fn node(&self) -> MgmtNode {
        self.node
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn routine_logs(&self) -> &[RoutineLog] {
        &self.routine_logs
    }

    pub fn ledger(&self) -> &AvailabilityLedger {
        &self.ledger
    }

    /// Attributes wall progress of the plant clock to the current node's
    /// category. Call before every state change and periodically in loops.
    pub fn account_to(&mut self, now_s: f64) {
        let now_ms = (now_s * 1000.0).round() as u64;
        if now_ms > self.accounted_ms {
            self.ledger.add(self.node.category(), now_ms - self.accounted_ms);
            self.accounted_ms = now_ms;
        }
    }

    fn set_node(&mut self, at_s: f64, to: MgmtNode, reason: &str) {
        self.account_to(at_s);
        debug_assert!(
            self.node.can_transition_to(to) || self.node == to,
            "illegal transition {:?} -> {to:?}",
            self.node
        );
        self.transitions.push(Transition {
            at_s,
            from: self.node,
            to,
            reason: reason.to_string(),
        });
        self.node = to;
    }

    /// Automated start-up: delay scan, source stabilisation, state
    /// alignment, then QKD. Each stage is retried once before giving up.
    pub fn startup_sequence(&mut self, plant: &mut Plant, fresh: bool) -> Result<StartupReport, MgmtError> {
        let t0 = plant.now_s();
        let reason = if fresh { "fresh install" } else { "routine restart" };

        // Stage 1: synchronisation delays.
        self.set_node(plant.now_s(), MgmtNode::StartupDelaySync, reason);
        let mut scan = self.cfg.scan;
        if !fresh {
            // Wide enough to see the whole coincidence dome (±1.5 ns) plus
            // its shoulders, so the center fit is sharply identified.
            scan.range = crate::control::ScanRange::Window {
                centers_ps: plant.set_delays_ps(),
                half_width_ps: 2_500.0,
            };
        }
        let scan_out = self.retry_stage(plant, MgmtNode::StartupDelaySync, |mgmt, plant| {
            delay_scan(plant, &scan).map(|o| {
                mgmt.routine_logs.push(o.log.clone());
                o.log
            })
        })?;
        let _ = scan_out;

        // Stage 2: source stabilisation.
        self.set_node(plant.now_s(), MgmtNode::StartupSourceStab, reason);
        let mut stab = self.cfg.stabilize;
        if fresh {
            stab.cycles = 2;
        }
        self.retry_stage(plant, MgmtNode::StartupSourceStab, |mgmt, plant| {
            source_stabilize(plant, &stab).map(|o| {
                mgmt.routine_logs.push(o.log.clone());
                o.log
            })
        })?;

        // Stage 3: state alignment, both bases. The channel is first pinned
        // to the polarimeter references so PC1's alignment solution stays
        // consistent with every later polarisation-control correction.
        self.set_node(plant.now_s(), MgmtNode::StartupStateAlign, reason);
        if let Ok(out) = polarization_control(plant, &standard_references(), &self.cfg.pol) {
            self.routine_logs.push(out.log);
            self.last_pol_control_s = Some(plant.now_s());
        }
        let align = self.cfg.align;
        self.retry_stage(plant, MgmtNode::StartupStateAlign, |mgmt, plant| {
            align_state(plant, &align).map(|o| {
                mgmt.routine_logs.push(o.log.clone());
                o.log
            })
        })?;

        self.set_node(plant.now_s(), MgmtNode::QkdActive, "startup complete");
        self.qber_baseline = plant.measure_qber(30.0);
        self.next_cycle_s = plant.now_s() + self.cfg.cycle_period_s;
        self.rise_started_s = None;
        self.last_pol_control_s = None;
        self.qber_window.clear();

        let stage_order: Vec<MgmtNode> = self
            .transitions
            .iter()
            .rev()
            .take_while(|t| t.to != MgmtNode::StartupDelaySync)
            .map(|t| t.to)
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
            .collect();
        let mut order = vec![MgmtNode::StartupDelaySync];
        order.extend(stage_order);
        Ok(StartupReport {
            duration_s: plant.now_s() - t0,
            stage_order: order,
            final_coincidence_rate: plant.total_coincidence_rate(),
            optimal_coincidence_rate: plant.optimal_total_coincidence_rate(),
            qber_baseline: self.qber_baseline,
            routine_logs: self.routine_logs.clone(),
        })
    }

    fn retry_stage<F>(&mut self, plant: &mut Plant, stage: MgmtNode, mut run: F) -> Result<RoutineLog, MgmtError>
    where
        F: FnMut(&mut Self, &mut Plant) -> Result<RoutineLog, ControlError>,
    {
        match run(self, plant) {
            Ok(log) => Ok(log),
            Err(_) => match run(self, plant) {
                Ok(log) => Ok(log),
                Err(e) => {
                    if std::env::var_os("QLINK_DEBUG_ALIGN").is_some() {
                        eprintln!(
                            "startup stage {stage:?} failed twice at t={:.0}: {e}; set={:?} true={:?}",
                            plant.now_s(),
                            plant.set_delays_ps(),
                            plant.true_delays_ps(),
                        );
                    }
                    self.set_node(plant.now_s(), MgmtNode::Idle, "startup stage failed twice");
                    Err(MgmtError::StartupFailed { stage, source: e })
                }
            },
        }
    }

    /// Whether the periodic maintenance cycle is due.
    pub fn cycle_due(&self, now_s: f64) -> bool {
        self.node == MgmtNode::QkdActive && now_s >= self.next_cycle_s
    }

    /// One maintenance cycle: source stabilisation and delay resync run
    /// with QKD live; polarisation control pauses it briefly. The cycle
    /// period is measured start to start.
    pub fn run_cycle(&mut self, plant: &mut Plant) -> CycleReport {
        debug_assert_eq!(self.node, MgmtNode::QkdActive);
        self.next_cycle_s = plant.now_s() + self.cfg.cycle_period_s;
        let mut logs = Vec::new();

        if let Ok(out) = source_stabilize(plant, &self.cfg.stabilize) {
            logs.push(out.log);
        }

        // Resync over the full coincidence dome around the current settings.
        let resync = DelayScanSettings {
            range: crate::control::ScanRange::Window {
                centers_ps: plant.set_delays_ps(),
                half_width_ps: 2_500.0,
            },
            step_ps: 20.0,
            dwell_s: 0.1,
            ..self.cfg.scan
        };
        if let Ok(out) = delay_scan(plant, &resync) {
            logs.push(out.log);
        }

        let interruption = self.pol_control(plant, "maintenance cycle", &mut logs);

        self.account_to(plant.now_s());
        for log in &logs {
            self.routine_logs.push(log.clone());
        }
        CycleReport { routine_logs: logs, qkd_interruption_s: interruption }
    }

    fn pol_control(&mut self, plant: &mut Plant, reason: &str, logs: &mut Vec<RoutineLog>) -> f64 {
        self.set_node(plant.now_s(), MgmtNode::PolControlRunning, reason);
        let interruption = match polarization_control(plant, &standard_references(), &self.cfg.pol)
        {
            Ok(out) => {
                logs.push(out.log.clone());
                self.last_pol_control_s = Some(plant.now_s());
                out.interruption_s
            }
            Err(_) => {
                // Escalate: a failed control hands over to realignment.
                self.last_pol_control_s = Some(plant.now_s());
                0.0
            }
        };
        self.set_node(plant.now_s(), MgmtNode::QkdActive, "pol control done");
        interruption
    }

    /// Feeds one QBER estimate into the interrupt logic and executes the
    /// resulting action on the plant. Returns what was done.
    pub fn qber_sample(&mut self, plant: &mut Plant, qber: f64) -> Action {
        let now = plant.now_s();
        self.qber_window.push_back((now, qber));
        while let Some(&(t, _)) = self.qber_window.front() {
            if now - t > 90.0 {
                self.qber_window.pop_front();
            } else {
                break;
            }
        }
        let slope = self.window_slope_pp_per_min();
        let rise_pp = (qber - self.qber_baseline) * 100.0;
        if rise_pp >= self.cfg.slow_rise_pp {
            if self.rise_started_s.is_none() {
                self.rise_started_s = Some(now);
            }
        } else if rise_pp.abs() <= self.cfg.deadband_pp {
            self.rise_started_s = None;
        }
        // Pol control counts as "tried" once it ran after the rise began;
        // while the persistence window is still open the verdict is pending
        // and nothing new is launched.
        let (pol_tried, verdict_pending) = match (self.rise_started_s, self.last_pol_control_s) {
            (Some(rise), Some(pol)) if pol >= rise => {
                (true, now - pol < self.cfg.persist_after_pol_s)
            }
            _ => (false, false),
        };
        let mut action = handle_qber_interrupt(qber, self.qber_baseline, slope, pol_tried, &self.cfg);
        if verdict_pending {
            action = Action::None;
        }
        match action {
            Action::None => {}
            Action::PolControl => {
                let mut logs = Vec::new();
                self.pol_control(plant, "qber interrupt", &mut logs);
                for log in logs {
                    self.routine_logs.push(log);
                }
            }
            Action::StateAlign => {
                self.state_realign(plant);
            }
        }
        action
    }

    /// Full state realignment triggered by a persistent QBER rise. The
    /// channel is pinned to the polarimeter references first so the PC1
    /// solution the alignment settles on survives later fast corrections.
    pub fn state_realign(&mut self, plant: &mut Plant) {
        self.set_node(plant.now_s(), MgmtNode::StateAlignRunning, "qber rise persisted");
        if let Ok(out) = polarization_control(plant, &standard_references(), &self.cfg.pol) {
            self.routine_logs.push(out.log);
        }
        self.last_pol_control_s = Some(plant.now_s());
        let mut aligned = false;
        for attempt in 0..2 {
            match align_state(plant, &self.cfg.align) {
                Ok(out) => {
                    self.routine_logs.push(out.log);
                    aligned = true;
                    break;
                }
                Err(e) => {
                    if std::env::var_os("QLINK_DEBUG_ALIGN").is_some() {
                        eprintln!(
                            "align attempt {attempt} failed at t={:.0}: {e}; qber={:.4} coupling={:.3} trig={:.0} pm_err={:.3} hv_err={:.3}",
                            plant.now_s(),
                            plant.qber_expected(),
                            plant.coupling_factor(),
                            plant.total_coincidence_rate(),
                            plant.pm_alignment_error(),
                            plant.hv_alignment_error(),
                        );
                    }
                    continue;
                }
            }
        }
        self.set_node(plant.now_s(), MgmtNode::QkdActive, "realignment done");
        if aligned {
            self.qber_baseline = plant.measure_qber(30.0);
        }
        self.rise_started_s = None;
        self.qber_window.clear();
    }

    fn window_slope_pp_per_min(&self) -> f64 {
        if self.qber_window.len() < 2 {
            return 0.0;
        }
        let (t0, q0) = *self.qber_window.front().unwrap();
        let (t1, q1) = *self.qber_window.back().unwrap();
        if t1 <= t0 {
            return 0.0;
        }
        (q1 - q0) * 100.0 / (t1 - t0) * 60.0
    }

    /// Retries a failed start-up from the Idle fault state; returns whether
    /// the system is active again.
    pub fn retry_startup_if_idle(&mut self, plant: &mut Plant) -> bool {
        if self.node != MgmtNode::Idle {
            return self.node == MgmtNode::QkdActive;
        }
        self.startup_sequence(plant, false).is_ok()
    }

    /// Places an already-aligned system directly into active operation
    /// (laboratory baseline runs skip the startup stages).
    pub fn force_active(&mut self, at_s: f64) {
        if self.node != MgmtNode::QkdActive {
            self.set_node(at_s, MgmtNode::QkdActive, "pre-aligned start");
            self.next_cycle_s = at_s + self.cfg.cycle_period_s;
        }
    }

    /// Scripted outage entry points.
    pub fn network_down(&mut self, at_s: f64) {
        if self.node == MgmtNode::QkdActive {
            self.set_node(at_s, MgmtNode::NetworkDown, "network interruption");
        }
    }

    pub fn network_up(&mut self, plant: &mut Plant) -> Result<(), MgmtError> {
        if self.node != MgmtNode::NetworkDown {
            return Ok(());
        }
        // Automatic routine restart; time spent counts as realignment.
        self.startup_sequence(plant, false).map(|_| ())
    }

    pub fn detector_down(&mut self, at_s: f64) {
        if self.node == MgmtNode::QkdActive {
            self.set_node(at_s, MgmtNode::DetectorShutdown, "detector over-temperature");
        }
    }

    pub fn detector_up(&mut self, plant: &mut Plant) {
        if self.node != MgmtNode::DetectorShutdown {
            return;
        }
        // Detectors come back; the channel drifted meanwhile, so run the
        // fast compensation before resuming.
        let mut logs = Vec::new();
        self.set_node(plant.now_s(), MgmtNode::PolControlRunning, "detector recovery");
        if let Ok(out) = polarization_control(plant, &standard_references(), &self.cfg.pol) {
            logs.push(out.log);
        }
        self.last_pol_control_s = Some(plant.now_s());
        self.set_node(plant.now_s(), MgmtNode::QkdActive, "detector recovery done");
        for log in logs {
            self.routine_logs.push(log);
        }
    }

    /// Availability fractions in category order
    /// (active, network, detector, realignment, other).
    pub fn availability_report(&self) -> Result<[f64; 5], MgmtError> {
        self.ledger.fractions()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linksim::{DetectorModel, SourceParams};
    use crate::plant::{PlantDynamics, TemperatureProfile};

    fn plant_25km(seed: u64) -> Plant {
        let source = SourceParams::default();
        let mut detectors = DetectorModel::default();
        detectors.efficiency =
            crate::linksim::calibrated_efficiency(0.0361, &source, &detectors, 1.5);
        let dynamics = PlantDynamics {
            total_loss_db: 0.204 * 25.0,
            temperature: TemperatureProfile::Constant(20.0),
            ..Default::default()
        };
        Plant::new(source, detectors, dynamics, seed)
    }

    #[test]
    fn fresh_startup_runs_stages_in_order_and_reaches_target() {
        let mut plant = plant_25km(42);
        plant.apply_fresh_install(0.45, 8000.0);
        let mut mgmt = Mgmt::new(MgmtConfig::default());
        let report = mgmt.startup_sequence(&mut plant, true).expect("startup");

        let kinds: Vec<MgmtNode> = report.stage_order.clone();
        assert_eq!(
            kinds,
            vec![
                MgmtNode::StartupDelaySync,
                MgmtNode::StartupSourceStab,
                MgmtNode::StartupStateAlign,
                MgmtNode::QkdActive
            ]
        );
        assert!(
            report.final_coincidence_rate >= 0.95 * report.optimal_coincidence_rate,
            "rate {} vs optimal {}",
            report.final_coincidence_rate,
            report.optimal_coincidence_rate
        );
        assert!(
            (report.qber_baseline - 0.035).abs() <= 0.005,
            "baseline {}",
            report.qber_baseline
        );
        let minutes = report.duration_s / 60.0;
        assert!((12.0..=28.0).contains(&minutes), "fresh startup took {minutes} min");
        assert_eq!(mgmt.node(), MgmtNode::QkdActive);
    }

    #[test]
    fn routine_startup_is_faster() {
        let mut plant = plant_25km(43);
        plant.apply_fresh_install(0.45, 8000.0);
        let mut mgmt = Mgmt::new(MgmtConfig::default());
        mgmt.startup_sequence(&mut plant, true).expect("fresh");
        // Simulate a temporary shutdown: drift a little, keep delays close.
        plant.apply_fiber_jump(0.3);
        let mut mgmt2 = Mgmt::new(MgmtConfig::default());
        let report = mgmt2.startup_sequence(&mut plant, false).expect("routine");
        let minutes = report.duration_s / 60.0;
        assert!((6.0..=14.0).contains(&minutes), "routine startup took {minutes} min");
    }

    #[test]
    fn interrupt_decisions_follow_the_rules() {
        let cfg = MgmtConfig::default();
        // Sudden 6 % after a fiber perturbation: fast slope fires control.
        assert_eq!(handle_qber_interrupt(0.06, 0.035, 2.5, false, &cfg), Action::PolControl);
        // Slow creep surviving pol control: realign.
        assert_eq!(handle_qber_interrupt(0.046, 0.035, 0.2, true, &cfg), Action::StateAlign);
        // Slow creep before pol control was tried: control first.
        assert_eq!(handle_qber_interrupt(0.046, 0.035, 0.2, false, &cfg), Action::PolControl);
        // Inside the deadband: nothing.
        assert_eq!(handle_qber_interrupt(0.038, 0.035, 0.0, false, &cfg), Action::None);
        assert_eq!(handle_qber_interrupt(0.032, 0.035, 0.0, false, &cfg), Action::None);
    }

    #[test]
    fn cycle_runs_all_routines_with_short_interruption() {
        let mut plant = plant_25km(44);
        let mut mgmt = Mgmt::new(MgmtConfig::default());
        mgmt.set_node(0.0, MgmtNode::StartupDelaySync, "test");
        mgmt.set_node(0.0, MgmtNode::StartupSourceStab, "test");
        mgmt.set_node(0.0, MgmtNode::StartupStateAlign, "test");
        mgmt.set_node(0.0, MgmtNode::QkdActive, "test");
        let report = mgmt.run_cycle(&mut plant);
        assert!(report.qkd_interruption_s <= 5.0, "interruption {}", report.qkd_interruption_s);
        assert!(report.routine_logs.len() >= 3);
        assert_eq!(mgmt.node(), MgmtNode::QkdActive);
    }

    #[test]
    fn ledger_attributes_every_second() {
        let mut mgmt = Mgmt::new(MgmtConfig::default());
        mgmt.set_node(0.0, MgmtNode::StartupDelaySync, "t");
        mgmt.account_to(10.0);
        mgmt.set_node(10.0, MgmtNode::StartupSourceStab, "t");
        mgmt.set_node(12.5, MgmtNode::StartupStateAlign, "t");
        mgmt.set_node(20.0, MgmtNode::QkdActive, "t");
        mgmt.account_to(50.0);
        mgmt.set_node(50.0, MgmtNode::NetworkDown, "t");
        mgmt.account_to(80.0);
        let ledger = mgmt.ledger();
        assert_eq!(ledger.total_ms(), 80_000);
        assert_eq!(ledger.ms[Category::Realignment.index()], 20_000);
        assert_eq!(ledger.ms[Category::ActiveQkd.index()], 30_000);
        assert_eq!(ledger.ms[Category::NetworkInterruption.index()], 30_000);
        let fr = ledger.fractions().unwrap();
        assert!((fr.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_ledger_reports_cleanly() {
        let mgmt = Mgmt::new(MgmtConfig::default());
        assert!(matches!(mgmt.availability_report(), Err(MgmtError::EmptyLedger)));
    }

    #[test]
    fn network_outage_recovers_to_previous_baseline() {
        let mut plant = plant_25km(45);
        plant.apply_fresh_install(0.45, 8000.0);
        let mut mgmt = Mgmt::new(MgmtConfig::default());
        let report = mgmt.startup_sequence(&mut plant, true).expect("startup");
        let baseline = report.qber_baseline;

        mgmt.network_down(plant.now_s());
        assert_eq!(mgmt.node(), MgmtNode::NetworkDown);
        // A long outage with drift accumulating, hour by hour.
        plant.dynamics.temperature = TemperatureProfile::Sine {
            base: 20.0,
            amplitude: 2.0,
            period_s: 3600.0,
            phase_s: 0.0,
        };
        for _ in 0..(4 * 60) {
            plant.advance(60.0);
        }
        // Conditions settle before the automatic restart.
        plant.dynamics.temperature = TemperatureProfile::Constant(plant.temperature());
        mgmt.network_up(&mut plant).expect("recovery");
        assert_eq!(mgmt.node(), MgmtNode::QkdActive);
        assert!(
            (mgmt.qber_baseline - baseline).abs() <= 0.005,
            "baseline {} -> {}",
            baseline,
            mgmt.qber_baseline
        );
    }

    #[test]
    fn fast_perturbation_triggers_pol_control_and_recovers() {
        let mut plant = plant_25km(46);
        let mut mgmt = Mgmt::new(MgmtConfig::default());
        mgmt.set_node(0.0, MgmtNode::StartupDelaySync, "t");
        mgmt.set_node(0.0, MgmtNode::StartupSourceStab, "t");
        mgmt.set_node(0.0, MgmtNode::StartupStateAlign, "t");
        mgmt.set_node(0.0, MgmtNode::QkdActive, "t");
        mgmt.qber_baseline = plant.qber_expected();

        // Feed a calm minute, then a violent fiber perturbation.
        for _ in 0..6 {
            plant.advance(10.0);
            let q = plant.measure_qber(1.0);
            assert_eq!(mgmt.qber_sample(&mut plant, q), Action::None);
        }
        plant.apply_fiber_jump(0.6);
        plant.advance(10.0);
        let q = plant.measure_qber(1.0);
        assert!(q > mgmt.qber_baseline + 0.02);
        let action = mgmt.qber_sample(&mut plant, q);
        assert_eq!(action, Action::PolControl);
        assert!(plant.qber_expected() < mgmt.qber_baseline + 0.005);
    }
}
