// calibration probe: network campaign statistics
use qlink::campaign::run_campaign;
use qlink::scenario::ScenarioConfig;

fn main() {
    let path = std::env::args().nth(1).unwrap();
    let hours: Option<f64> = std::env::args().nth(2).and_then(|s| s.parse().ok());
    let mut cfg = ScenarioConfig::from_file(std::path::Path::new(&path)).unwrap();
    if let Some(h) = hours { cfg.campaign_hours = h; }
    let plant = cfg.plant();
    let t0 = std::time::Instant::now();
    let report = run_campaign(plant, cfg.campaign_config()).unwrap();
    let fr = report.availability_fractions;
    println!("wall {:.1}s | mean_qber {:.4} | mean_k {:.0} | fwhm {:.2}pp | vis>90 {:.4} | mean_vis {:.4}",
        t0.elapsed().as_secs_f64(), report.mean_qber, report.mean_key_rate, report.qber_fwhm_pp,
        report.visibility_above_90_fraction, report.mean_visibility);
    println!("avail: active {:.3} network {:.3} detector {:.3} realign {:.3} other {:.3}",
        fr[0], fr[1], fr[2], fr[3], fr[4]);
    let aligns = report.routine_logs.iter().filter(|l| l.routine == qlink::control::RoutineKind::StateAlign).count();
    let align_entries = report.transitions.iter().filter(|t| t.to.name() == "state_align_running").count();
    let idles = report.transitions.iter().filter(|t| t.to.name() == "idle").count();
    let startup_aligns = report.transitions.iter().filter(|t| t.to.name() == "startup_state_align").count();
    println!("aligns_ok {} | align_entries {} | startup_align_entries {} | idles {} | transitions {} | elapsed {:.0} h",
        aligns, align_entries, startup_aligns, idles, report.transitions.len(), report.elapsed_s/3600.0);
    // worst stretch
    let mut worst = (0u64, 0.0f64);
    for m in &report.minutes { if m.qber > worst.1 { worst = (m.minute, m.qber); } }
    println!("worst minute {} qber {:.3}", worst.0, worst.1);
}
