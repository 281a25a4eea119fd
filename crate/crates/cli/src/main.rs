//! `qlink` command-line front end.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage or configuration error,
//! 3 empty link window, 4 I/O error, 5 malformed time-tag file, 6 no
//! correlation peak.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qlink::feasibility::{fig5_sweep, snr_analytic, write_fig5_csv, NoiseBudget, SweepInputs};
use qlink::geometry::{slant_range, EARTH_RADIUS_KM};
use qlink::link::{attenuation_curve, write_curve_csv, CurveRow};
use qlink::scenario::{analyze_eps_streams, PassReport, Results, Scenario, WindowSummary, SCHEMA_VERSION};
use qlink::source::{EpsSpec, FpsSpec, Source};
use qlink::timeline::DelayModel;
use qlink::timetag::{Segment, TimeTagStream};
use qlink::Error;

#[derive(Parser)]
#[command(name = "qlink", version, about = "Ground-to-orbit quantum uplink simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Uplink attenuation against transmitter aperture, with SNR columns.
    Linkbudget(LinkbudgetArgs),
    /// SNR and decoy key rate over attenuation and background.
    Feasibility(FeasibilityArgs),
    /// Pass profile and usable link window of a scenario.
    Pass(PassArgs),
    /// Simulate and analyze one pass, writing streams and reports.
    Simulate(SimulateArgs),
    /// Analyze time-tag files.
    Analyze(AnalyzeArgs),
    /// Print a saved JSON report as text.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy)]
struct Sweep {
    min: f64,
    max: f64,
    step: f64,
}

impl Sweep {
    fn values(&self) -> Vec<f64> {
        let n = ((self.max - self.min) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|i| self.min + i as f64 * self.step).collect()
    }
}

fn parse_sweep(s: &str) -> Result<Sweep, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [a, b, c] = parts.as_slice() else {
        return Err("expected min:max:step".into());
    };
    let num = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}"));
    let sw = Sweep {
        min: num(a)?,
        max: num(b)?,
        step: num(c)?,
    };
    if !(sw.step > 0.0) {
        return Err("step must be positive".into());
    }
    if !(sw.max >= sw.min) || !sw.min.is_finite() || !sw.max.is_finite() {
        return Err("need finite min <= max".into());
    }
    if (sw.max - sw.min) / sw.step > 1e6 {
        return Err("sweep has more than a million points".into());
    }
    Ok(sw)
}

#[derive(Args)]
struct LinkbudgetArgs {
    /// Transmitter aperture sweep in metres, `min:max:step`.
    #[arg(long, value_parser = parse_sweep, default_value = "0.05:0.50:0.01")]
    dt_sweep: Sweep,
    #[arg(long, default_value_t = 90.0)]
    elevation_deg: f64,
    #[arg(long, default_value_t = 400.0)]
    altitude_km: f64,
    /// Take link, source and detector parameters from this scenario.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FeasibilityArgs {
    /// Emit the full attenuation x background grid as CSV.
    #[arg(long)]
    fig5: bool,
    #[arg(long, value_parser = parse_sweep, default_value = "20:60:1")]
    att_db: Sweep,
    #[arg(long, value_delimiter = ',', default_value = "100,1000,10000")]
    backgrounds_cps: Vec<f64>,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PassArgs {
    #[arg(long, default_value = "iss_bell_default", env = "QLINK_SCENARIO")]
    scenario: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario file, or name of a scenario in $QLINK_CONFIG_DIR or bundled.
    #[arg(long)]
    scenario: String,
    #[arg(long)]
    out: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    ground: Option<PathBuf>,
    #[arg(long)]
    space: PathBuf,
    /// Coincidence window, full width in nanoseconds.
    #[arg(long)]
    tau: Option<f64>,
    /// Scenario that produced the files; supplies the light-time model and,
    /// for faint-pulse runs, the transmitted pulse pattern.
    #[arg(long)]
    scenario: Option<String>,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    input: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::EmptyWindow => 3,
        Error::Io(_) => 4,
        Error::Format { .. } => 5,
        Error::NoCorrelation { .. } | Error::PeakLost | Error::InsufficientSegments { .. } => 6,
        Error::Config(_) | Error::Domain { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.command {
        Command::Linkbudget(a) => linkbudget(a),
        Command::Feasibility(a) => feasibility(a),
        Command::Pass(a) => pass(a),
        Command::Simulate(a) => simulate(a),
        Command::Analyze(a) => analyze(a),
        Command::Report(a) => report(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qlink: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn output(path: &Option<PathBuf>) -> qlink::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(fs::File::create(p)?)),
        None => Box::new(io::BufWriter::new(io::stdout().lock())),
    })
}

fn scenario_or_default(name: &Option<String>) -> qlink::Result<Scenario> {
    match name {
        Some(n) => Scenario::load(n),
        None => Ok(Scenario::bundled("iss_bell_default").expect("bundled")),
    }
}

fn eps_of(s: &Scenario) -> EpsSpec {
    match s.source {
        Source::Eps(e) => e,
        Source::Fps(_) => EpsSpec::default(),
    }
}

fn fps_of(s: &Scenario) -> FpsSpec {
    match s.source {
        Source::Fps(f) => f,
        Source::Eps(_) => FpsSpec::default(),
    }
}

const SNR_BACKGROUNDS_CPS: [f64; 3] = [100.0, 1000.0, 10_000.0];

fn linkbudget(a: LinkbudgetArgs) -> qlink::Result<()> {
    let scn = scenario_or_default(&a.scenario)?;
    let l = slant_range(a.elevation_deg, a.altitude_km, EARTH_RADIUS_KM)?;
    let rows = attenuation_curve(&a.dt_sweep.values(), l, a.elevation_deg, &scn.link)?;
    let eps = eps_of(&scn);
    let mut csv = Vec::new();
    write_curve_csv(&rows, &mut csv)?;
    let csv = String::from_utf8(csv).expect("ascii");
    let mut w = output(&a.out)?;
    for (i, line) in csv.lines().enumerate() {
        if i == 0 {
            writeln!(w, "{line},snr_bg100,snr_bg1000,snr_bg10000")?;
            continue;
        }
        let row: &CurveRow = &rows[i - 1];
        let att = row.budget.total_db;
        let mut cols = Vec::new();
        for bg in SNR_BACKGROUNDS_CPS {
            let noise = NoiseBudget::for_eps(bg, &scn.detectors, &eps, att, scn.noise.coincidence_window_s);
            cols.push(format!("{:.4}", snr_analytic(&eps, &scn.detectors, att, &noise)?.snr));
        }
        writeln!(w, "{line},{}", cols.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn feasibility(a: FeasibilityArgs) -> qlink::Result<()> {
    let scn = scenario_or_default(&a.scenario)?;
    let (eps, fps) = (eps_of(&scn), fps_of(&scn));
    let inputs = SweepInputs {
        eps: &eps,
        fps: &fps,
        det: &scn.detectors,
        coincidence_window_s: scn.noise.coincidence_window_s,
        pulse_gate_s: scn.noise.pulse_gate_s,
    };
    let mut w = output(&a.out)?;
    if a.fig5 {
        let rows = fig5_sweep(&a.att_db.values(), &a.backgrounds_cps, inputs)?;
        write_fig5_csv(&rows, &mut w)?;
    } else {
        let rows = fig5_sweep(&[40.0], &a.backgrounds_cps, inputs)?;
        writeln!(w, "at 40 dB (entanglement threshold SNR {:.3}):", qlink::feasibility::bell_snr_threshold())?;
        for r in rows {
            writeln!(
                w,
                "  background {:>8.0} cps  SNR {:>7.2}  visibility {:.3}  key {:.1} bit/s",
                r.background_cps, r.snr, r.visibility, r.key.rate_cps
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

fn pass(a: PassArgs) -> qlink::Result<()> {
    let scn = Scenario::load(&a.scenario)?;
    let p = scn.prepare()?;
    let mut w = output(&a.out)?;
    p.pass.write_csv(&mut w)?;
    w.flush()?;
    eprintln!(
        "usable window {:.1}-{:.1} s ({:.0} s), limited by {:?} / {:?}",
        p.window.t_start_s, p.window.t_end_s, p.window.duration_s, p.window.start_edge, p.window.end_edge
    );
    Ok(())
}

fn simulate(a: SimulateArgs) -> qlink::Result<()> {
    let mut scn = Scenario::load(&a.scenario)?;
    if let Some(seed) = a.seed {
        scn.seed = seed;
    }
    let run = scn.simulate_to_dir(&a.out)?;
    print!("{}", run.report.render_text());
    eprintln!(
        "generation {:.2} s, analysis {:.2} s",
        run.performance.generation_s, run.performance.analysis_s
    );
    Ok(())
}

fn read_stream(path: &Path, hint: Segment) -> qlink::Result<TimeTagStream> {
    let s = TimeTagStream::read_path(path, hint)?;
    if s.segment != hint {
        return Err(Error::Format {
            offset: 6,
            reason: format!("{} holds {:?} records, expected {hint:?}", path.display(), s.segment),
        });
    }
    Ok(s)
}

fn analyze(a: AnalyzeArgs) -> qlink::Result<()> {
    let scn = a.scenario.as_deref().map(Scenario::load).transpose()?;
    let space = read_stream(&a.space, Segment::Space)?;
    let tau = match (a.tau, &scn) {
        (Some(ns), _) => ns * 1e-9,
        (None, Some(s)) => s.noise.coincidence_window_s,
        (None, None) => qlink::feasibility::DEFAULT_COINCIDENCE_WINDOW_S,
    };
    let (results, window) = match &scn {
        Some(s) => {
            let prepared = s.prepare()?;
            let results = match s.source {
                Source::Eps(_) => {
                    let Some(g) = &a.ground else {
                        return Err(Error::Config("entangled-source analysis needs --ground".into()));
                    };
                    let ground = read_stream(g, Segment::Ground)?;
                    Results::Bell(s.analyze_eps(&prepared, &ground, &space, tau)?.0)
                }
                Source::Fps(_) => Results::Qkd(s.analyze_fps(&prepared, &space)?.0),
            };
            let window = WindowSummary::new(&prepared, &s.link);
            (results, Some(window))
        }
        None => {
            let Some(g) = &a.ground else {
                return Err(Error::Config("without --scenario, --ground is required".into()));
            };
            let ground = read_stream(g, Segment::Ground)?;
            let sync = qlink::coincidence::SyncParams::default();
            (Results::Bell(analyze_eps_streams(&ground, &space, &DelayModel::zero(), &sync, tau)?.0), None)
        }
    };
    let report = PassReport {
        schema_version: SCHEMA_VERSION,
        seed: scn.as_ref().map(|s| s.seed),
        scenario: scn,
        window,
        results,
        truth: None,
    };
    if let Some(p) = &a.out {
        fs::write(p, report.to_json())?;
    }
    print!("{}", report.render_text());
    Ok(())
}

fn report(a: ReportArgs) -> qlink::Result<()> {
    let text = fs::read_to_string(&a.input)?;
    let r = PassReport::from_json(&text).map_err(|e| Error::Format {
        offset: 0,
        reason: e.to_string(),
    })?;
    print!("{}", r.render_text());
    Ok(())
}
