//! Scenario files, full-pass pipelines and pass reports.
//!
//! A scenario pins every parameter of one experiment plus a single seed.
//! Every random draw is taken from a generator keyed by that seed and a
//! fixed label (see [`crate::rng::derive_seed`]), so a scenario always
//! reproduces the same streams and the same report.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bell::{chsh_s, required_coincidences, ChshConvention, ChshResult, SettingCounts};
use crate::coincidence::{match_pairs, synchronize, ClockSolution, CoincidenceSet, SyncParams, SyncReport};
use crate::error::{Error, Result};
use crate::feasibility::{bell_snr_threshold, window_capture, DEFAULT_COINCIDENCE_WINDOW_S, DEFAULT_PULSE_GATE_S};
use crate::geometry::{synth_pass, usable_window, GroundStation, LinkWindow, LinkWindowConstraints, PassProfile, WindowEdge, ISS_ALTITUDE_KM};
use crate::link::LinkParams;
use crate::mc::{generate_eps_pass, generate_fps_pass, ClockModel, EpsTruth, FpsTruth, MeasurementSettings, PassConditions, PulseTrain};
use crate::pulsesync::{fps_sync, FpsSync, FpsSyncParams};
use crate::qkd::{
    decoy_gain_error, decoy_key_rate, events_sufficient, sift, BasisRecord, ClassObservation, DecoyObservables, KeyRateResult,
    Protocol, SiftedKey, DEFAULT_EC_INEFFICIENCY, E0,
};
use crate::source::{eps_local_rates, DetectorSpec, EpsSpec, FpsSpec, IntensityClass, Source};
use crate::timeline::{ChannelTimeline, DelayModel};
use crate::timetag::{basis_of, outcome_of, write_pulse_log_csv, PulseRecord, TimeTagStream};

pub const SCHEMA_VERSION: u32 = 1;

/// Directory searched for `<name>.toml` before the bundled scenarios.
pub const CONFIG_DIR_ENV: &str = "QLINK_CONFIG_DIR";

/// QBER above which no key can be distilled.
pub const QBER_LIMIT: f64 = 0.11;

/// CHSH violation needed to call a run a success, in standard deviations.
pub const VIOLATION_SIGMA: f64 = 3.0;

const BUNDLED: [(&str, &str); 2] = [
    ("iss_bell_default", include_str!("../scenarios/iss_bell_default.toml")),
    ("iss_qkd_default", include_str!("../scenarios/iss_qkd_default.toml")),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PassSpec {
    pub max_elevation_deg: f64,
    pub altitude_km: f64,
    pub sample_dt_s: f64,
}

impl Default for PassSpec {
    fn default() -> Self {
        PassSpec {
            max_elevation_deg: 90.0,
            altitude_km: ISS_ALTITUDE_KM,
            sample_dt_s: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSettings {
    /// Full width of the ground/space coincidence window.
    pub coincidence_window_s: f64,
    /// Full width of the detection gate around each expected pulse.
    pub pulse_gate_s: f64,
}

impl Default for NoiseSettings {
    fn default() -> Self {
        NoiseSettings {
            coincidence_window_s: DEFAULT_COINCIDENCE_WINDOW_S,
            pulse_gate_s: DEFAULT_PULSE_GATE_S,
        }
    }
}

/// True space clock; the analysis never reads it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClockSpec {
    pub offset_s: f64,
    pub drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub station: GroundStation,
    #[serde(default)]
    pub pass: PassSpec,
    #[serde(default)]
    pub constraints: LinkWindowConstraints,
    #[serde(default)]
    pub link: LinkParams,
    pub source: Source,
    #[serde(default)]
    pub detectors: DetectorSpec,
    #[serde(default)]
    pub noise: NoiseSettings,
    #[serde(default)]
    pub clock: ClockSpec,
    #[serde(default)]
    pub sync: SyncParams,
    #[serde(default)]
    pub pulse_sync: FpsSyncParams,
    #[serde(default)]
    pub settings: MeasurementSettings,
}

/// Pass geometry, usable window and channel timeline of a scenario.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub pass: PassProfile,
    pub window: LinkWindow,
    pub timeline: ChannelTimeline,
}

impl Scenario {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let scn: Scenario = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        scn.validate()?;
        Ok(scn)
    }

    pub fn bundled_names() -> impl Iterator<Item = &'static str> {
        BUNDLED.iter().map(|(n, _)| *n)
    }

    pub fn bundled(name: &str) -> Option<Self> {
        BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, s)| Scenario::from_toml_str(s).expect("bundled scenarios parse"))
    }

    /// Resolves a scenario argument: an existing file path, then
    /// `$QLINK_CONFIG_DIR/<name>.toml`, then a bundled scenario.
    pub fn load(spec: &str) -> Result<Self> {
        let direct = Path::new(spec);
        if direct.is_file() {
            return Scenario::from_toml_str(&fs::read_to_string(direct)?);
        }
        if let Some(dir) = std::env::var_os(CONFIG_DIR_ENV) {
            let p = PathBuf::from(dir).join(format!("{spec}.toml"));
            if p.is_file() {
                return Scenario::from_toml_str(&fs::read_to_string(p)?);
            }
        }
        Scenario::bundled(spec).ok_or_else(|| {
            let known: Vec<&str> = Scenario::bundled_names().collect();
            Error::Config(format!("no scenario file or bundled scenario named {spec:?} (bundled: {})", known.join(", ")))
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.station.validate()?;
        self.constraints.validate()?;
        self.link.validate()?;
        self.source.validate()?;
        self.detectors.validate()?;
        self.clock_model().validate()?;
        self.sync.validate()?;
        self.settings.validate()?;
        if !(self.noise.coincidence_window_s > 0.0) {
            return Err(Error::domain("coincidence_window_s", self.noise.coincidence_window_s, "> 0"));
        }
        if !(self.noise.pulse_gate_s > 0.0) {
            return Err(Error::domain("pulse_gate_s", self.noise.pulse_gate_s, "> 0"));
        }
        Ok(())
    }

    pub fn protocol(&self) -> Protocol {
        match self.source {
            Source::Eps(_) => Protocol::Bell,
            Source::Fps(_) => Protocol::Qkd,
        }
    }

    /// Detector jitter applies on both sides of the link.
    pub fn clock_model(&self) -> ClockModel {
        ClockModel {
            offset_s: self.clock.offset_s,
            drift: self.clock.drift,
            jitter_sigma_s: self.detectors.timing_jitter_s,
        }
    }

    pub fn prepare(&self) -> Result<Prepared> {
        let p = &self.pass;
        let pass = synth_pass(p.max_elevation_deg, p.altitude_km, p.sample_dt_s)?;
        let window = usable_window(&pass, &self.constraints).ok_or(Error::EmptyWindow)?;
        let timeline = ChannelTimeline::from_pass(&pass, &window, &self.link)?;
        Ok(Prepared { pass, window, timeline })
    }

    pub fn simulate(&self) -> Result<Simulation> {
        let prepared = self.prepare()?;
        let clock = self.clock_model();
        let cond = PassConditions {
            timeline: &prepared.timeline,
            detectors: &self.detectors,
            background_cps: self.station.background_cps,
            clock: &clock,
            seed: self.seed,
        };
        let started = Instant::now();
        let streams = match &self.source {
            Source::Eps(eps) => {
                let (ground, space, truth) = generate_eps_pass(eps, &self.settings, &cond)?;
                Streams::Eps { ground, space, truth }
            }
            Source::Fps(fps) => {
                let (train, space, truth) = generate_fps_pass(fps, &cond)?;
                Streams::Fps { train, space, truth }
            }
        };
        Ok(Simulation {
            prepared,
            streams,
            generation_s: started.elapsed().as_secs_f64(),
        })
    }

    /// Bell analysis of a ground/space stream pair with this scenario's
    /// light-time model and expectations.
    pub fn analyze_eps(&self, prepared: &Prepared, ground: &TimeTagStream, space: &TimeTagStream, tau_c_s: f64) -> Result<(BellResults, CoincidenceSet)> {
        let (mut results, set) = analyze_eps_streams(ground, space, &prepared.timeline.delay, &self.sync, tau_c_s)?;
        if let Source::Eps(eps) = &self.source {
            results.analytic_snr = Some(pass_snr_analytic(eps, &self.detectors, self.station.background_cps, &prepared.timeline, tau_c_s));
        }
        Ok((results, set))
    }

    pub fn analyze_fps(&self, prepared: &Prepared, space: &TimeTagStream) -> Result<(QkdResults, QkdArtifacts)> {
        let Source::Fps(fps) = &self.source else {
            return Err(Error::Config("QKD analysis needs a faint-pulse source".into()));
        };
        let tl = &prepared.timeline;
        let train = PulseTrain::new(fps, self.seed, tl.t_start_s, tl.t_end_s);
        let sync_params = FpsSyncParams {
            gate_s: self.noise.pulse_gate_s,
            ..self.pulse_sync
        };
        let sync = fps_sync(space, &train, &tl.delay, &sync_params)?;

        let mut detections = [0u64; 3];
        let mut records: [Vec<BasisRecord>; 3] = Default::default();
        for d in &sync.detections {
            let (class, bit, basis) = train.pulse(d.pulse);
            let ch = space.channels[d.space_index];
            detections[class.index()] += 1;
            records[class.index()].push(BasisRecord {
                ground_basis: basis,
                ground_bit: bit,
                space_basis: basis_of(ch),
                space_bit: outcome_of(ch),
            });
        }
        let keys: Vec<SiftedKey> = records.into_iter().map(sift).collect();
        let classes: Vec<ClassResult> = IntensityClass::ALL
            .iter()
            .map(|&c| {
                let i = c.index();
                let pulses = train.expected_count(c);
                ClassResult {
                    class: c,
                    mu: fps.mean_photon_number(c),
                    pulses_expected: pulses,
                    detections: detections[i],
                    gain: if pulses > 0.0 { detections[i] as f64 / pulses } else { 0.0 },
                    sifted: keys[i].len() as u64,
                    errors: keys[i].errors as u64,
                    error_rate: if keys[i].is_empty() { E0 } else { keys[i].qber },
                }
            })
            .collect();
        let obs = |c: &ClassResult| ClassObservation {
            mu: c.mu,
            gain: c.gain,
            error: c.error_rate,
        };
        let observables = DecoyObservables {
            signal: obs(&classes[0]),
            decoy: obs(&classes[1]),
            y0: classes[2].gain,
            ec_inefficiency: DEFAULT_EC_INEFFICIENCY,
        };
        let key = decoy_key_rate(&observables, 0.5, fps.rep_rate_hz)?;

        let y0_model = (self.station.background_cps + self.detectors.dark_total_cps()) * self.noise.pulse_gate_s;
        let expected_qber = pass_signal_error(fps, y0_model, tl);
        let signal_key = &keys[0];
        let sifted_total = classes[0].sifted + classes[1].sifted;
        let qber_sigma = signal_key.qber_sigma();
        let results = QkdResults {
            space_events: space.len() as u64,
            pulses: train.n_pulses,
            gated_detections: sync.detections.len() as u64,
            outside_gate: sync.outside_gate as u64,
            clock: ClockSummary::from_solution(&sync.clock),
            slot_shift: sync.slot_shift,
            sync_significance: sync.significance,
            phase_segments: sync.phase_segments as u64,
            classes,
            sifted_events: sifted_total,
            qber: signal_key.qber,
            qber_sigma,
            qber_interval: signal_key.qber_interval,
            expected_qber,
            qber_pull: if qber_sigma > 0.0 { (signal_key.qber - expected_qber) / qber_sigma } else { 0.0 },
            observables,
            key,
            key_bits: key.rate_per_pulse * train.n_pulses as f64,
            events_sufficient: events_sufficient(sifted_total, Protocol::Qkd),
            qber_below_limit: signal_key.qber < QBER_LIMIT,
        };
        let sifted_key = keys[0].clone();
        Ok((results, QkdArtifacts { train, sync, sifted_key }))
    }

    /// Simulates and analyzes one pass in-process.
    pub fn run(&self) -> Result<PassRun> {
        let t0 = Instant::now();
        let simulation = self.simulate()?;
        let t1 = Instant::now();
        let prepared = &simulation.prepared;
        let (results, truth, artifacts) = match &simulation.streams {
            Streams::Eps { ground, space, truth } => {
                let (r, set) = self.analyze_eps(prepared, ground, space, self.noise.coincidence_window_s)?;
                (Results::Bell(r), Truth::Eps(*truth), Artifacts::Bell(set))
            }
            Streams::Fps { space, truth, .. } => {
                let (r, a) = self.analyze_fps(prepared, space)?;
                (Results::Qkd(r), Truth::Fps(FpsTruthSummary::from(truth)), Artifacts::Qkd(a))
            }
        };
        let report = PassReport {
            schema_version: SCHEMA_VERSION,
            seed: Some(self.seed),
            scenario: Some(self.clone()),
            window: Some(WindowSummary::new(prepared, &self.link)),
            results,
            truth: Some(truth),
        };
        let performance = Performance {
            generation_s: simulation.generation_s,
            analysis_s: t1.elapsed().as_secs_f64(),
            total_s: t0.elapsed().as_secs_f64(),
        };
        Ok(PassRun {
            report,
            performance,
            simulation,
            artifacts,
        })
    }

    /// [`Scenario::run`], then writes every artifact into `dir`.
    pub fn simulate_to_dir(&self, dir: &Path) -> Result<PassRun> {
        let run = self.run()?;
        run.write_outputs(dir)?;
        Ok(run)
    }
}

/// Bell analysis without a scenario: synchronization, matching and CHSH.
pub fn analyze_eps_streams(
    ground: &TimeTagStream,
    space: &TimeTagStream,
    delay: &DelayModel,
    sync: &SyncParams,
    tau_c_s: f64,
) -> Result<(BellResults, CoincidenceSet)> {
    if !(tau_c_s > 0.0) {
        return Err(Error::domain("coincidence window", tau_c_s, "> 0"));
    }
    let report = synchronize(ground, space, delay, sync)?;
    let set = match_pairs(ground, space, delay, &report.clock, tau_c_s);
    let counts = SettingCounts::from_coincidences(&set, ground, space);
    let chsh = chsh_s(&counts, ChshConvention::Canonical)?;
    let visibility = chsh.s / (2.0 * std::f64::consts::SQRT_2);
    let threshold = bell_snr_threshold();
    let results = BellResults {
        ground_events: ground.len() as u64,
        space_events: space.len() as u64,
        clock: ClockSummary::from_solution(&report.clock),
        sync: SyncSummary::from(&report),
        tau_c_s,
        matched: set.len() as u64,
        peak_raw: set.peak_raw,
        sideband_mean: set.sideband_mean,
        accidental_cps: set.accidental_estimate_cps,
        duration_s: set.duration_s,
        measured_snr: set.measured_snr,
        measured_snr_sigma: set.measured_snr_sigma,
        analytic_snr: None,
        snr_threshold: threshold,
        snr_above_threshold: set.measured_snr > threshold,
        counts,
        chsh,
        violation: chsh.n_sigma > VIOLATION_SIGMA,
        required_coincidences: required_coincidences(VIOLATION_SIGMA, visibility).ok(),
        events_sufficient: events_sufficient(set.len() as u64, Protocol::Bell),
    };
    Ok((results, set))
}

/// Coincidence SNR expected over a whole pass: true and accidental
/// coincidences are integrated separately before taking the ratio.
pub fn pass_snr_analytic(eps: &EpsSpec, det: &DetectorSpec, background_cps: f64, timeline: &ChannelTimeline, tau_c_s: f64) -> f64 {
    let singles = eps_local_rates(eps).singles_per_arm;
    let capture = window_capture(tau_c_s, det.timing_jitter_s);
    let signal = timeline.average(|t| singles * t * eps.coupling_efficiency * capture);
    let accidental = timeline.average(|t| singles * (background_cps + det.dark_total_cps() + singles * t) * tau_c_s);
    if accidental > 0.0 {
        signal / accidental
    } else {
        f64::INFINITY
    }
}

/// Signal-class error rate expected from the decoy channel model, weighted
/// by detections over the pass.
pub fn pass_signal_error(fps: &FpsSpec, y0: f64, timeline: &ChannelTimeline) -> f64 {
    let gain = timeline.average(|t| decoy_gain_error(fps.mu_signal, t, y0, fps.intrinsic_error).0);
    let errors = timeline.average(|t| {
        let (q, e) = decoy_gain_error(fps.mu_signal, t, y0, fps.intrinsic_error);
        q * e
    });
    if gain > 0.0 {
        errors / gain
    } else {
        E0
    }
}

#[derive(Debug, Clone)]
pub enum Streams {
    Eps {
        ground: TimeTagStream,
        space: TimeTagStream,
        truth: EpsTruth,
    },
    Fps {
        train: PulseTrain,
        space: TimeTagStream,
        truth: FpsTruth,
    },
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub prepared: Prepared,
    pub streams: Streams,
    pub generation_s: f64,
}

#[derive(Debug, Clone)]
pub struct QkdArtifacts {
    pub train: PulseTrain,
    pub sync: FpsSync,
    /// Sifted signal-class key.
    pub sifted_key: SiftedKey,
}

#[derive(Debug, Clone)]
pub enum Artifacts {
    Bell(CoincidenceSet),
    Qkd(QkdArtifacts),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Performance {
    pub generation_s: f64,
    pub analysis_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClockSummary {
    pub offset_s: f64,
    pub ref_time_s: f64,
    pub drift: f64,
    pub residual_rms_s: f64,
    pub segments: u64,
}

impl ClockSummary {
    fn from_solution(c: &ClockSolution) -> Self {
        ClockSummary {
            offset_s: c.offset_s,
            ref_time_s: c.ref_time_s,
            drift: c.drift,
            residual_rms_s: c.residual_rms_s,
            segments: c.knots.len() as u64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncSummary {
    pub acquisition_offset_s: f64,
    pub acquisition_significance: f64,
    pub acquisition_local_significance: f64,
    pub drift_tracked: bool,
}

impl From<&SyncReport> for SyncSummary {
    fn from(r: &SyncReport) -> Self {
        SyncSummary {
            acquisition_offset_s: r.acquisition_offset_s,
            acquisition_significance: r.acquisition_significance,
            acquisition_local_significance: r.acquisition_local_significance,
            drift_tracked: r.drift_tracked,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BellResults {
    pub ground_events: u64,
    pub space_events: u64,
    pub clock: ClockSummary,
    pub sync: SyncSummary,
    pub tau_c_s: f64,
    pub matched: u64,
    pub peak_raw: u64,
    pub sideband_mean: f64,
    pub accidental_cps: f64,
    pub duration_s: f64,
    pub measured_snr: f64,
    pub measured_snr_sigma: f64,
    pub analytic_snr: Option<f64>,
    pub snr_threshold: f64,
    pub snr_above_threshold: bool,
    pub counts: SettingCounts,
    pub chsh: ChshResult,
    pub violation: bool,
    /// Coincidences needed for a 3 sigma violation at the measured
    /// visibility; absent when that visibility cannot violate at all.
    pub required_coincidences: Option<u64>,
    pub events_sufficient: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub class: IntensityClass,
    pub mu: f64,
    pub pulses_expected: f64,
    pub detections: u64,
    pub gain: f64,
    pub sifted: u64,
    pub errors: u64,
    pub error_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QkdResults {
    pub space_events: u64,
    pub pulses: u64,
    pub gated_detections: u64,
    pub outside_gate: u64,
    pub clock: ClockSummary,
    pub slot_shift: i64,
    pub sync_significance: f64,
    pub phase_segments: u64,
    pub classes: Vec<ClassResult>,
    /// Basis-matched signal and decoy detections.
    pub sifted_events: u64,
    /// Signal-class QBER.
    pub qber: f64,
    pub qber_sigma: f64,
    pub qber_interval: (f64, f64),
    pub expected_qber: f64,
    pub qber_pull: f64,
    pub observables: DecoyObservables,
    pub key: KeyRateResult,
    /// Secret bits expected from the whole pass.
    pub key_bits: f64,
    pub events_sufficient: bool,
    pub qber_below_limit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "snake_case")]
pub enum Results {
    Bell(BellResults),
    Qkd(QkdResults),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FpsTruthSummary {
    pub detected_pulses: u64,
    pub background: u64,
    pub dark: u64,
}

impl From<&FpsTruth> for FpsTruthSummary {
    fn from(t: &FpsTruth) -> Self {
        FpsTruthSummary {
            detected_pulses: t.detected_pulses.len() as u64,
            background: t.background,
            dark: t.dark,
        }
    }
}

/// Generator bookkeeping, only known to `simulate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Truth {
    Eps(EpsTruth),
    Fps(FpsTruthSummary),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    /// Ground-time interval carrying the link.
    pub t_start_s: f64,
    pub t_end_s: f64,
    pub duration_s: f64,
    pub start_edge: WindowEdge,
    pub end_edge: WindowEdge,
    pub max_elevation_deg: f64,
    pub min_attenuation_db: f64,
    pub max_attenuation_db: f64,
}

impl WindowSummary {
    pub fn new(p: &Prepared, link: &LinkParams) -> Self {
        let samples = p.window.samples(&p.pass);
        let att = |el: f64, l: f64| crate::link::attenuation_db(l, el, link).map(|b| b.total_db).unwrap_or(f64::INFINITY);
        let atts: Vec<f64> = samples.iter().map(|s| att(s.elevation_deg, s.slant_range_km)).collect();
        WindowSummary {
            t_start_s: p.timeline.t_start_s,
            t_end_s: p.timeline.t_end_s,
            duration_s: p.timeline.duration_s(),
            start_edge: p.window.start_edge,
            end_edge: p.window.end_edge,
            max_elevation_deg: samples.iter().map(|s| s.elevation_deg).fold(0.0, f64::max),
            min_attenuation_db: atts.iter().copied().fold(f64::INFINITY, f64::min),
            max_attenuation_db: atts.iter().copied().fold(0.0, f64::max),
        }
    }
}

/// Machine-readable outcome of one pass. Wall-clock timings are kept out
/// of it so that equal inputs give byte-identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassReport {
    pub schema_version: u32,
    pub seed: Option<u64>,
    pub scenario: Option<Scenario>,
    pub window: Option<WindowSummary>,
    pub results: Results,
    pub truth: Option<Truth>,
}

impl PassReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: PassReport = serde_json::from_str(s).map_err(|e| Error::Config(format!("report: {e}")))?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("report schema {} is not {SCHEMA_VERSION}", r.schema_version)));
        }
        Ok(r)
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let name = self.scenario.as_ref().map_or("(external streams)", |c| c.name.as_str());
        let _ = writeln!(s, "scenario        {name}");
        if let Some(seed) = self.seed {
            let _ = writeln!(s, "seed            {seed}");
        }
        if let Some(w) = &self.window {
            let _ = writeln!(
                s,
                "window          {:.1} s  [{:.1}, {:.1}]  peak elevation {:.1} deg  attenuation {:.2}-{:.2} dB",
                w.duration_s, w.t_start_s, w.t_end_s, w.max_elevation_deg, w.min_attenuation_db, w.max_attenuation_db
            );
        }
        match &self.results {
            Results::Bell(b) => {
                let _ = writeln!(s, "events          ground {}  space {}  matched {}", b.ground_events, b.space_events, b.matched);
                let _ = writeln!(
                    s,
                    "clock           offset {:.12} s  drift {:.3e}  ({} segments, acquisition {:.1} sigma)",
                    b.clock.offset_s, b.clock.drift, b.clock.segments, b.sync.acquisition_significance
                );
                let analytic = b.analytic_snr.map_or("n/a".to_string(), |x| format!("{x:.2}"));
                let _ = writeln!(
                    s,
                    "SNR             measured {:.2} +- {:.2}  analytic {analytic}  threshold {:.2}  {}",
                    b.measured_snr,
                    b.measured_snr_sigma,
                    b.snr_threshold,
                    flag(b.snr_above_threshold)
                );
                let _ = writeln!(
                    s,
                    "CHSH            S = {:.4} +- {:.4}  ({:.2} sigma)  {}",
                    b.chsh.s,
                    b.chsh.sigma_s,
                    b.chsh.n_sigma,
                    flag(b.violation)
                );
                let _ = writeln!(s, "enough events   {}", flag(b.events_sufficient));
            }
            Results::Qkd(q) => {
                let _ = writeln!(
                    s,
                    "events          space {}  gated {}  sifted {}",
                    q.space_events, q.gated_detections, q.sifted_events
                );
                let _ = writeln!(
                    s,
                    "clock           offset {:.12} s  drift {:.3e}  slot shift {}  ({:.1} sigma)",
                    q.clock.offset_s, q.clock.drift, q.slot_shift, q.sync_significance
                );
                for c in &q.classes {
                    let _ = writeln!(s, "  {:<8} gain {:.4e}  error {:.4}  sifted {}", c.class.name(), c.gain, c.error_rate, c.sifted);
                }
                let _ = writeln!(
                    s,
                    "QBER            {:.4} +- {:.4}  model {:.4}  {}",
                    q.qber,
                    q.qber_sigma,
                    q.expected_qber,
                    flag(q.qber_below_limit)
                );
                let _ = writeln!(
                    s,
                    "key rate        {:.4e} per pulse  {:.1} bit/s  {:.0} bits per pass",
                    q.key.rate_per_pulse, q.key.rate_cps, q.key_bits
                );
                let _ = writeln!(s, "enough events   {}", flag(q.events_sufficient));
            }
        }
        s
    }
}

fn flag(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}

#[derive(Debug, Clone)]
pub struct PassRun {
    pub report: PassReport,
    pub performance: Performance,
    pub simulation: Simulation,
    pub artifacts: Artifacts,
}

impl PassRun {
    /// Writes streams, pass profile, coincidences or pulse log, and the
    /// reports. Timings go to `performance.json` only.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let create = |name: &str| -> Result<BufWriter<fs::File>> { Ok(BufWriter::new(fs::File::create(dir.join(name))?)) };
        self.simulation.prepared.pass.write_csv(create("pass.csv")?)?;
        match (&self.simulation.streams, &self.artifacts) {
            (Streams::Eps { ground, space, .. }, Artifacts::Bell(set)) => {
                ground.write_path(&dir.join("ground.qtt"))?;
                space.write_path(&dir.join("space.qtt"))?;
                set.write_csv(ground, space, create("coincidences.csv")?)?;
            }
            (Streams::Fps { space, .. }, Artifacts::Qkd(a)) => {
                space.write_path(&dir.join("space.qtt"))?;
                let log: Vec<PulseRecord> = a.sync.detections.iter().map(|d| a.train.record(d.pulse)).collect();
                write_pulse_log_csv(&log, create("pulses.csv")?)?;
                a.sifted_key.write_csv(create("sifted_key.csv")?)?;
            }
            _ => unreachable!("artifacts follow the stream kind"),
        }
        fs::write(dir.join("report.json"), self.report.to_json())?;
        fs::write(dir.join("report.txt"), self.report.render_text())?;
        fs::write(
            dir.join("performance.json"),
            serde_json::to_string_pretty(&self.performance).expect("performance serializes"),
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenarios_parse_and_roundtrip() {
        for name in Scenario::bundled_names() {
            let s = Scenario::bundled(name).unwrap();
            assert_eq!(s.name, name);
            let back = Scenario::from_toml_str(&s.to_toml_string()).unwrap();
            assert_eq!(back, s);
        }
        assert_eq!(Scenario::bundled("iss_bell_default").unwrap().protocol(), Protocol::Bell);
        assert_eq!(Scenario::bundled("iss_qkd_default").unwrap().protocol(), Protocol::Qkd);
    }

    #[test]
    fn unknown_keys_rejected() {
        let base = BUNDLED[0].1;
        assert!(Scenario::from_toml_str(&format!("{base}\n[extra]\nx = 1\n")).is_err());
        let typo = base.replace("background_cps", "background_kcps");
        assert!(matches!(Scenario::from_toml_str(&typo), Err(Error::Config(_))));
        let typo = base.replace("pair_rate_pps", "pair_rate");
        assert!(Scenario::from_toml_str(&typo).is_err());
    }

    #[test]
    fn minimal_file_takes_defaults() {
        let s = Scenario::from_toml_str("name = \"x\"\nseed = 1\n[source]\nkind = \"fps\"\n").unwrap();
        assert_eq!(s.detectors, DetectorSpec::default());
        assert_eq!(s.source, Source::Fps(FpsSpec::default()));
    }

    #[test]
    fn bell_window_is_about_20_s() {
        let p = Scenario::bundled("iss_bell_default").unwrap().prepare().unwrap();
        assert!((18.0..=22.0).contains(&p.timeline.duration_s()), "{}", p.timeline.duration_s());
        let q = Scenario::bundled("iss_qkd_default").unwrap().prepare().unwrap();
        assert!((q.timeline.duration_s() - 70.0).abs() <= 1.0);
    }

    #[test]
    fn low_pass_has_empty_window() {
        let mut s = Scenario::bundled("iss_bell_default").unwrap();
        s.pass.max_elevation_deg = 30.0;
        assert!(matches!(s.prepare(), Err(Error::EmptyWindow)));
    }

    #[test]
    fn pass_error_model_matches_constant_channel() {
        let fps = FpsSpec::default();
        let tl = ChannelTimeline::constant(0.0, 10.0, 1e-4, 0.0).unwrap();
        let e = pass_signal_error(&fps, 3e-6, &tl);
        assert!((e - decoy_gain_error(0.5, 1e-4, 3e-6, 0.01).1).abs() < 1e-12);
    }
}
