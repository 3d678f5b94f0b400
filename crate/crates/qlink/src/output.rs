//! CSV and binary artifact writers. Every tabular file starts with two
//! comment lines embedding the seed and the scenario hash, so outputs are
//! traceable and byte-identical across reruns of the same configuration.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::campaign::CampaignReport;
use crate::control::RoutineLog;
use crate::endpoint::{EndpointReport, LedgerRow, TruthSeries};
use crate::linksim::{DetectionEvent, Origin, RunTruth, Side};
use crate::mgmt::{Transition, ALL_CATEGORIES};

/// Identity stamp of a run: seed plus the SHA-256 of the scenario text.
#[derive(Debug, Clone)]
pub struct RunStamp {
    pub seed: u64,
    pub config_sha256: String,
}

impl RunStamp {
    pub fn new(seed: u64, scenario_text: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(scenario_text.as_bytes());
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for byte in digest {
            let _ = write!(hex, "{byte:02x}");
        }
        Self { seed, config_sha256: hex }
    }

    fn header(&self) -> String {
        format!("# seed={}\n# config_sha256={}\n", self.seed, self.config_sha256)
    }
}

fn write_csv(path: &Path, stamp: &RunStamp, header_row: &str, rows: &[String]) -> io::Result<()> {
    let mut text = stamp.header();
    text.push_str(header_row);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    std::fs::write(path, text)
}

pub fn write_distance_csv(
    path: &Path,
    stamp: &RunStamp,
    rows: &[crate::analytic::DistanceRow],
) -> io::Result<()> {
    let lines: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{:.3},{:.4},{:.4},{:.6},{:.6},{:.4}",
                r.l_km, r.coincidence, r.accidental, r.e_noise, r.e_total, r.k_sec
            )
        })
        .collect();
    write_csv(path, stamp, "l_km,c,a,e_noise,e_total,k_sec", &lines)
}

pub fn write_power_csv(
    path: &Path,
    stamp: &RunStamp,
    rows: &[crate::analytic::PowerRow],
) -> io::Result<()> {
    let lines: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{:.3},{:.6},{:.6},{:.6},{:.6},{:.2},{:.2},{:.4}",
                r.power_mw,
                r.e_system,
                r.e_dark,
                r.e_accidental,
                r.e_total,
                r.trigger_rate,
                r.coincidence_rate,
                r.k_sec
            )
        })
        .collect();
    write_csv(
        path,
        stamp,
        "power_mw,e_system,e_dark,e_accidental,e_total,trigger_rate,coincidence_rate,k_sec",
        &lines,
    )
}

/// Per-second rates and ground-truth QBER of a simulated run.
pub fn write_seconds_csv(path: &Path, stamp: &RunStamp, truth: &TruthSeries) -> io::Result<()> {
    let lines: Vec<String> = truth
        .seconds
        .iter()
        .enumerate()
        .map(|(t, s)| second_row(t as f64, s))
        .collect();
    write_csv(
        path,
        stamp,
        "t_s,triggers,coincidences,sifted,errors,qber,e_signal,e_dark,e_accidental",
        &lines,
    )
}

fn second_row(t: f64, s: &RunTruth) -> String {
    format!(
        "{:.0},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
        t,
        s.triggers,
        s.coincidences,
        s.sifted,
        s.errors_total(),
        s.qber(),
        s.qber_component(Origin::Signal),
        s.qber_component(Origin::Dark),
        s.qber_component(Origin::Accidental),
    )
}

/// Key ledger: one row per distilled block, identical on both endpoints.
pub fn write_ledger_csv(path: &Path, stamp: &RunStamp, ledger: &[LedgerRow]) -> io::Result<()> {
    let lines: Vec<String> = ledger
        .iter()
        .map(|r| {
            format!(
                "{},{},{:.6},{},{},{},{}",
                r.block_id, r.n, r.e_measured, r.disclosed_bits, r.m, r.m_delivered,
                r.end_timestamp_ps
            )
        })
        .collect();
    write_csv(path, stamp, "block_id,n,e_measured,disclosed_bits,m,m_delivered,end_timestamp_ps", &lines)
}

/// Binary key files, one per block, named by block id.
pub fn write_key_files(dir: &Path, report: &EndpointReport) -> io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for (row, key) in report.ledger.iter().zip(&report.keys) {
        let path = dir.join(format!("block_{:06}.key", row.block_id));
        std::fs::write(path, key.to_bytes())?;
    }
    Ok(())
}

/// Raw event dump: 64-bit little-endian timestamp, detector id byte
/// (Alice H,V,P,M = 0..3, Bob H,V,P,M = 4..7), origin byte
/// (signal=0, dark=1, accidental=2).
pub fn write_event_dump(path: &Path, events: &[DetectionEvent]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(events.len() * 10);
    for e in events {
        buf.extend_from_slice(&(e.timestamp_ps as u64).to_le_bytes());
        let det = match e.detector.side {
            Side::Alice => e.detector.port.index() as u8,
            Side::Bob => 4 + e.detector.port.index() as u8,
        };
        buf.push(det);
        buf.push(e.origin.index() as u8);
    }
    std::fs::write(path, buf)
}

pub fn write_qber_series_csv(
    path: &Path,
    stamp: &RunStamp,
    series: &[(u64, f64)],
) -> io::Result<()> {
    let lines: Vec<String> =
        series.iter().map(|(block, e)| format!("{block},{e:.6}")).collect();
    write_csv(path, stamp, "block_id,qber", &lines)
}

/// Campaign telemetry, one row per minute.
pub fn write_minutes_csv(path: &Path, stamp: &RunStamp, report: &CampaignReport) -> io::Result<()> {
    let lines: Vec<String> = report
        .minutes
        .iter()
        .map(|m| {
            format!(
                "{},{:.1},{},{},{:.6},{:.2},{:.4}",
                m.minute, m.producing_s, m.sifted_bits, m.error_bits, m.qber, m.key_rate,
                m.visibility
            )
        })
        .collect();
    write_csv(
        path,
        stamp,
        "minute,producing_s,sifted_bits,error_bits,qber,key_rate,visibility",
        &lines,
    )
}

pub fn write_transitions_csv(
    path: &Path,
    stamp: &RunStamp,
    transitions: &[Transition],
) -> io::Result<()> {
    let lines: Vec<String> = transitions
        .iter()
        .map(|t| format!("{:.3},{},{},{}", t.at_s, t.from.name(), t.to.name(), t.reason))
        .collect();
    write_csv(path, stamp, "t_s,from,to,reason", &lines)
}

pub fn write_routines_csv(path: &Path, stamp: &RunStamp, logs: &[RoutineLog]) -> io::Result<()> {
    let lines: Vec<String> = logs
        .iter()
        .map(|l| {
            format!(
                "{},{:.3},{:.3},{:.4},{:.4}",
                l.routine.name(),
                l.started_s,
                l.ended_s,
                l.metric_before,
                l.metric_after
            )
        })
        .collect();
    write_csv(path, stamp, "routine,started_s,ended_s,metric_before,metric_after", &lines)
}

pub fn write_availability_csv(
    path: &Path,
    stamp: &RunStamp,
    seconds: &[f64; 5],
    fractions: &[f64; 5],
) -> io::Result<()> {
    let lines: Vec<String> = ALL_CATEGORIES
        .iter()
        .map(|c| format!("{},{:.1},{:.6}", c.name(), seconds[c.index()], fractions[c.index()]))
        .collect();
    write_csv(path, stamp, "category,seconds,fraction", &lines)
}

pub fn write_histogram_csv(
    path: &Path,
    stamp: &RunStamp,
    histogram: &[(f64, u64)],
) -> io::Result<()> {
    let lines: Vec<String> =
        histogram.iter().map(|(center, n)| format!("{center:.1},{n}")).collect();
    write_csv(path, stamp, "qber_percent,minutes", &lines)
}

pub fn write_campaign_summary_csv(
    path: &Path,
    stamp: &RunStamp,
    report: &CampaignReport,
) -> io::Result<()> {
    let lines = vec![
        format!("elapsed_s,{:.1}", report.elapsed_s),
        format!("mean_qber,{:.6}", report.mean_qber),
        format!("mean_key_rate,{:.2}", report.mean_key_rate),
        format!("mean_visibility,{:.4}", report.mean_visibility),
        format!("visibility_above_90_fraction,{:.4}", report.visibility_above_90_fraction),
        format!("qber_fwhm_pp,{:.2}", report.qber_fwhm_pp),
        format!("total_key_bits,{:.0}", report.total_key_bits),
    ];
    write_csv(path, stamp, "metric,value", &lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stamp_is_deterministic_and_sensitive() {
        let a = RunStamp::new(7, "seed = 7\n");
        let b = RunStamp::new(7, "seed = 7\n");
        let c = RunStamp::new(7, "seed = 8\n");
        assert_eq!(a.config_sha256, b.config_sha256);
        assert_ne!(a.config_sha256, c.config_sha256);
        assert!(a.header().contains("seed=7"));
    }

    #[test]
    fn csv_files_carry_stamp_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let stamp = RunStamp::new(3, "x");
        let rows = vec![crate::analytic::DistanceRow {
            l_km: 25.0,
            coincidence: 2781.3,
            accidental: 74.2,
            e_noise: 0.0263,
            e_total: 0.0323,
            k_sec: 3289.0,
        }];
        let path = dir.path().join("distance.csv");
        write_distance_csv(&path, &stamp, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# seed=3\n# config_sha256="));
        assert!(text.contains("l_km,c,a,e_noise,e_total,k_sec"));
        assert!(text.contains("25.000,2781.3"));
    }

    #[test]
    fn event_dump_layout_is_ten_bytes_per_event() {
        let dir = tempfile::tempdir().unwrap();
        let events = vec![crate::linksim::DetectionEvent {
            timestamp_ps: 0x0102030405060708,
            detector: crate::linksim::DetectorId {
                side: Side::Bob,
                port: crate::polmath::Port::P,
            },
            origin: Origin::Accidental,
        }];
        let path = dir.path().join("events.bin");
        write_event_dump(&path, &events).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 10);
        assert_eq!(&bytes[0..8], &0x0102030405060708u64.to_le_bytes());
        assert_eq!(bytes[8], 4 + 2);
        assert_eq!(bytes[9], 2);
    }
}
