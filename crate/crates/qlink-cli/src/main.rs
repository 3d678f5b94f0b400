//! Operator entry point: analytic curve generation, single-process
//! simulation, the paired alice/bob endpoint services over TCP, and the
//! long-run campaign driver. All tabular output is CSV stamped with the
//! seed and scenario hash.

use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use qlink::analytic::{distance_sweep, power_sweep, LinkBudget, PowerCalibration};
use qlink::endpoint::{
    derive_psk, run_alice, run_bob, run_pipeline_loopback, EndpointConfig, EndpointError, Role,
};
use qlink::netchan::transport::TcpTransport;
use qlink::netchan::{NetChanError, SecureChannel};
use qlink::output;
use qlink::scenario::ScenarioConfig;

const EXIT_CONFIG: u8 = 2;
const EXIT_PROTOCOL: u8 = 3;
const EXIT_SCENARIO_FAULT: u8 = 4;

#[derive(Parser)]
#[command(
    name = "qlink",
    about = "Entanglement-based QKD link: simulator, key distillation endpoints and analytic model",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Scenario file (flat key=value).
    #[arg(long, env = "QLINK_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long, env = "QLINK_SEED")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "QLINK_OUT", default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Analytic rate/QBER curves versus distance and pump power.
    Model {
        #[command(flatten)]
        common: CommonArgs,
        /// Apply the coherent-attack key reduction.
        #[arg(long, env = "QLINK_COHERENT_BOUND")]
        coherent_bound: bool,
    },
    /// Event-level link simulation plus the full two-party key stack in
    /// one process.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Also write the raw detection event dump (events.bin).
        #[arg(long)]
        raw_dump: bool,
    },
    /// Run the Alice endpoint service (source side) over TCP.
    Alice {
        #[command(flatten)]
        common: CommonArgs,
        /// Listen address, e.g. 127.0.0.1:7001.
        #[arg(long, env = "QLINK_LISTEN")]
        listen: String,
        /// Pre-shared key file (defaults to seed-derived material).
        #[arg(long, env = "QLINK_PSK")]
        psk: Option<PathBuf>,
        /// Wall-time compression: simulated seconds per wall second
        /// (0 = as fast as possible).
        #[arg(long, env = "QLINK_COMPRESS", default_value_t = 0.0)]
        compress: f64,
    },
    /// Run the Bob endpoint service (receiver side) over TCP.
    Bob {
        #[command(flatten)]
        common: CommonArgs,
        /// Connect address, e.g. 127.0.0.1:7001.
        #[arg(long, env = "QLINK_CONNECT")]
        connect: String,
        #[arg(long, env = "QLINK_PSK")]
        psk: Option<PathBuf>,
    },
    /// Compressed-time long-run campaign under the management module.
    Campaign {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Model { common, coherent_bound } => cmd_model(&common, coherent_bound),
        Command::Simulate { common, raw_dump } => cmd_simulate(&common, raw_dump),
        Command::Alice { common, listen, psk, compress } => {
            cmd_alice(&common, &listen, psk.as_deref(), compress)
        }
        Command::Bob { common, connect, psk } => cmd_bob(&common, &connect, psk.as_deref()),
        Command::Campaign { common } => cmd_campaign(&common),
    };
    match code {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

struct CliError {
    code: u8,
    message: String,
}

fn config_error(message: impl Into<String>) -> CliError {
    CliError { code: EXIT_CONFIG, message: message.into() }
}

fn io_error(e: std::io::Error) -> CliError {
    CliError { code: EXIT_SCENARIO_FAULT, message: format!("i/o failure: {e}") }
}

/// Loads the scenario (or defaults), applies the seed override and returns
/// the config together with its stamp text.
fn load_scenario(common: &CommonArgs) -> Result<(ScenarioConfig, String), CliError> {
    let (mut cfg, text) = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
            let cfg = ScenarioConfig::from_str_content(&text)
                .map_err(|e| config_error(e.to_string()))?;
            (cfg, text)
        }
        None => (ScenarioConfig::default(), String::from("<defaults>")),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok((cfg, text))
}

fn ensure_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(io_error)
}

fn cmd_model(common: &CommonArgs, coherent_bound: bool) -> Result<(), CliError> {
    let (cfg, text) = load_scenario(common)?;
    ensure_out(&common.out)?;
    let stamp = output::RunStamp::new(cfg.seed, &text);

    let lengths: Vec<f64> = (0..=480).map(|i| i as f64 * 0.25).collect();
    let budget = LinkBudget::default();
    let best = LinkBudget::best_detector();
    output::write_distance_csv(
        &common.out.join("distance_d80.csv"),
        &stamp,
        &distance_sweep(&budget, &lengths, coherent_bound),
    )
    .map_err(io_error)?;
    output::write_distance_csv(
        &common.out.join("distance_d4.csv"),
        &stamp,
        &distance_sweep(&best, &lengths, coherent_bound),
    )
    .map_err(io_error)?;

    let powers: Vec<f64> = (2..=56).map(|i| i as f64 * 0.25).collect();
    output::write_power_csv(
        &common.out.join("power.csv"),
        &stamp,
        &power_sweep(&PowerCalibration::default(), &powers, coherent_bound),
    )
    .map_err(io_error)?;
    println!("model curves written to {}", common.out.display());
    Ok(())
}

fn map_endpoint_error(e: EndpointError) -> CliError {
    match e {
        EndpointError::Channel(NetChanError::ConnectionLost) => CliError {
            code: EXIT_SCENARIO_FAULT,
            message: "classical channel lost: peer unreachable (network down)".into(),
        },
        EndpointError::Channel(NetChanError::Io(e)) => CliError {
            code: EXIT_SCENARIO_FAULT,
            message: format!("classical channel i/o failure: {e}"),
        },
        EndpointError::Channel(e) => {
            CliError { code: EXIT_PROTOCOL, message: format!("protocol failure: {e}") }
        }
        EndpointError::KeyStack(e) => {
            CliError { code: EXIT_PROTOCOL, message: format!("key stack failure: {e}") }
        }
        EndpointError::LinkSim(e) => config_error(format!("bad scenario: {e}")),
        EndpointError::Desync(msg) => {
            CliError { code: EXIT_PROTOCOL, message: format!("protocol desync: {msg}") }
        }
    }
}

fn cmd_simulate(common: &CommonArgs, raw_dump: bool) -> Result<(), CliError> {
    let (cfg, text) = load_scenario(common)?;
    ensure_out(&common.out)?;
    let stamp = output::RunStamp::new(cfg.seed, &text);

    let mut link = cfg.link_scenario();
    link.record_events = raw_dump;
    let psk = derive_psk(cfg.seed, cfg.psk_bytes);
    let options = cfg.pipeline_options();
    let (alice, bob, truth) =
        run_pipeline_loopback(&link, &options, psk).map_err(map_endpoint_error)?;

    if alice.ledger != bob.ledger {
        return Err(CliError {
            code: EXIT_PROTOCOL,
            message: "endpoint ledgers differ after simulation".into(),
        });
    }
    output::write_seconds_csv(&common.out.join("seconds.csv"), &stamp, &truth).map_err(io_error)?;
    output::write_ledger_csv(&common.out.join("ledger.csv"), &stamp, &alice.ledger)
        .map_err(io_error)?;
    output::write_qber_series_csv(&common.out.join("qber_series.csv"), &stamp, &alice.qber_series)
        .map_err(io_error)?;
    output::write_key_files(&common.out.join("alice_keys"), &alice).map_err(io_error)?;
    output::write_key_files(&common.out.join("bob_keys"), &bob).map_err(io_error)?;
    if raw_dump {
        let record = qlink::linksim::run_link(&link)
            .map_err(|e| config_error(format!("bad scenario: {e}")))?;
        let mut events = record.alice_events;
        events.extend(record.bob_events);
        events.sort_by_key(|e| e.timestamp_ps);
        output::write_event_dump(&common.out.join("events.bin"), &events).map_err(io_error)?;
    }
    let blocks = alice.ledger.len();
    let key_bits: usize = alice.ledger.iter().map(|r| r.m_delivered).sum();
    println!(
        "simulated {:.0} s: {blocks} blocks, {key_bits} delivered key bits, {} security alerts",
        cfg.duration_s, alice.security_alerts
    );
    Ok(())
}

fn load_psk(path: Option<&Path>, seed: u64, bytes: usize) -> Result<Vec<u8>, CliError> {
    match path {
        Some(p) => {
            let data = std::fs::read(p)
                .map_err(|e| config_error(format!("cannot read PSK {}: {e}", p.display())))?;
            if data.len() < 1024 {
                return Err(config_error("pre-shared key file too small (< 1 KiB)"));
            }
            Ok(data)
        }
        None => Ok(derive_psk(seed, bytes)),
    }
}

fn endpoint_config(cfg: &ScenarioConfig, role: Role, psk: Vec<u8>) -> EndpointConfig {
    let mut c = cfg.pipeline_options().endpoint_config(role, cfg.seed, psk);
    c.send_heartbeats = true;
    c
}

fn write_endpoint_outputs(
    out: &Path,
    stamp: &output::RunStamp,
    report: &qlink::endpoint::EndpointReport,
) -> Result<(), CliError> {
    output::write_ledger_csv(&out.join("ledger.csv"), stamp, &report.ledger).map_err(io_error)?;
    output::write_qber_series_csv(&out.join("qber_series.csv"), stamp, &report.qber_series)
        .map_err(io_error)?;
    output::write_key_files(&out.join("keys"), report).map_err(io_error)?;
    Ok(())
}

fn cmd_alice(
    common: &CommonArgs,
    listen: &str,
    psk_path: Option<&Path>,
    compress: f64,
) -> Result<(), CliError> {
    let (cfg, text) = load_scenario(common)?;
    ensure_out(&common.out)?;
    let stamp = output::RunStamp::new(cfg.seed, &text);
    let psk = load_psk(psk_path, cfg.seed, cfg.psk_bytes)?;

    let listener = TcpListener::bind(listen)
        .map_err(|e| config_error(format!("cannot listen on {listen}: {e}")))?;
    println!("alice listening on {listen}");
    let (stream, peer) = listener.accept().map_err(io_error)?;
    println!("bob connected from {peer}");
    let transport = TcpTransport::new(stream).map_err(io_error)?;
    transport.set_read_timeout(Some(Duration::from_secs(3))).map_err(io_error)?;

    let mut ecfg = endpoint_config(&cfg, Role::Alice, psk);
    if compress > 0.0 {
        ecfg.pace_chunk = Some(Duration::from_secs_f64(ecfg.chunk_seconds / compress));
    }
    let (tx, rx) = ecfg.split_psk();
    let channel = SecureChannel::new(Box::new(transport), tx, rx);
    let link = cfg.link_scenario();
    let (report, truth) = run_alice(&link, &ecfg, channel).map_err(map_endpoint_error)?;

    output::write_seconds_csv(&common.out.join("seconds.csv"), &stamp, &truth).map_err(io_error)?;
    write_endpoint_outputs(&common.out, &stamp, &report)?;
    println!("alice done: {} blocks distilled", report.ledger.len());
    Ok(())
}

fn cmd_bob(common: &CommonArgs, connect: &str, psk_path: Option<&Path>) -> Result<(), CliError> {
    let (cfg, text) = load_scenario(common)?;
    ensure_out(&common.out)?;
    let stamp = output::RunStamp::new(cfg.seed, &text);
    let psk = load_psk(psk_path, cfg.seed, cfg.psk_bytes)?;

    // The peer may still be starting up; retry briefly.
    let mut stream: Option<TcpStream> = None;
    for _ in 0..50 {
        match TcpStream::connect(connect) {
            Ok(s) => {
                stream = Some(s);
                break;
            }
            Err(_) => std::thread::sleep(Duration::from_millis(200)),
        }
    }
    let stream = stream
        .ok_or_else(|| config_error(format!("cannot connect to alice at {connect}")))?;
    let transport = TcpTransport::new(stream).map_err(io_error)?;
    transport.set_read_timeout(Some(Duration::from_secs(3))).map_err(io_error)?;

    let ecfg = endpoint_config(&cfg, Role::Bob, psk);
    let (tx, rx) = ecfg.split_psk();
    let channel = SecureChannel::new(Box::new(transport), tx, rx);
    let report = run_bob(&ecfg, channel).map_err(map_endpoint_error)?;

    write_endpoint_outputs(&common.out, &stamp, &report)?;
    println!("bob done: {} blocks distilled", report.ledger.len());
    Ok(())
}

fn cmd_campaign(common: &CommonArgs) -> Result<(), CliError> {
    let (cfg, text) = load_scenario(common)?;
    ensure_out(&common.out)?;
    let stamp = output::RunStamp::new(cfg.seed, &text);

    let plant = cfg.plant();
    let report = qlink::campaign::run_campaign(plant, cfg.campaign_config())
        .map_err(|e| CliError { code: EXIT_SCENARIO_FAULT, message: format!("campaign: {e}") })?;

    output::write_minutes_csv(&common.out.join("minutes.csv"), &stamp, &report)
        .map_err(io_error)?;
    output::write_transitions_csv(&common.out.join("transitions.csv"), &stamp, &report.transitions)
        .map_err(io_error)?;
    output::write_routines_csv(&common.out.join("routines.csv"), &stamp, &report.routine_logs)
        .map_err(io_error)?;
    output::write_availability_csv(
        &common.out.join("availability.csv"),
        &stamp,
        &report.availability_seconds,
        &report.availability_fractions,
    )
    .map_err(io_error)?;
    output::write_histogram_csv(&common.out.join("qber_histogram.csv"), &stamp, &report.qber_histogram)
        .map_err(io_error)?;
    output::write_campaign_summary_csv(&common.out.join("summary.csv"), &stamp, &report)
        .map_err(io_error)?;
    println!(
        "campaign {:.0} h: mean QBER {:.2} %, mean key rate {:.0} bit/s, active {:.1} %",
        report.elapsed_s / 3600.0,
        report.mean_qber * 100.0,
        report.mean_key_rate,
        report.availability_fractions[0] * 100.0
    );
    Ok(())
}
