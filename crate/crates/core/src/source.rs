//! Photon sources on the ground and the single-photon detectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link::db_to_transmittance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BellState {
    /// Polarization correlation `+V cos 2(a - b)`.
    #[default]
    PhiPlus,
    /// Singlet, `-V cos 2(a - b)`.
    PsiMinus,
}

impl BellState {
    /// Correlation coefficient of dichotomic outcomes for linear analyzers
    /// at `a_deg` and `b_deg`, given source visibility.
    pub fn correlation(self, visibility: f64, a_deg: f64, b_deg: f64) -> f64 {
        let e = visibility * (2.0 * (a_deg - b_deg).to_radians()).cos();
        match self {
            BellState::PhiPlus => e,
            BellState::PsiMinus => -e,
        }
    }
}

/// Entangled photon pair source. One photon of each pair is detected
/// locally, its twin is sent up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpsSpec {
    pub pair_rate_pps: f64,
    /// Per-arm probability that a generated photon ends up detected,
    /// including fiber coupling and detector efficiency.
    pub coupling_efficiency: f64,
    pub visibility: f64,
    pub state: BellState,
}

impl Default for EpsSpec {
    fn default() -> Self {
        EpsSpec {
            pair_rate_pps: 2.0e7,
            coupling_efficiency: 0.5,
            visibility: 0.95,
            state: BellState::PhiPlus,
        }
    }
}

impl EpsSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.pair_rate_pps >= 0.0) {
            return Err(Error::domain("pair_rate_pps", self.pair_rate_pps, ">= 0"));
        }
        unit("coupling_efficiency", self.coupling_efficiency)?;
        unit("visibility", self.visibility)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityClass {
    Signal,
    Decoy,
    Vacuum,
}

impl IntensityClass {
    pub const ALL: [IntensityClass; 3] = [
        IntensityClass::Signal,
        IntensityClass::Decoy,
        IntensityClass::Vacuum,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            IntensityClass::Signal => "signal",
            IntensityClass::Decoy => "decoy",
            IntensityClass::Vacuum => "vacuum",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        IntensityClass::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// Faint laser pulse source running a vacuum + weak decoy BB84 scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FpsSpec {
    pub rep_rate_hz: f64,
    pub mu_signal: f64,
    pub mu_decoy: f64,
    pub signal_fraction: f64,
    pub decoy_fraction: f64,
    pub vacuum_fraction: f64,
    /// Probability that a photon is flipped by optical misalignment.
    pub intrinsic_error: f64,
}

impl Default for FpsSpec {
    fn default() -> Self {
        FpsSpec {
            rep_rate_hz: 1.0e8,
            mu_signal: 0.5,
            mu_decoy: 0.1,
            signal_fraction: 0.5,
            decoy_fraction: 0.25,
            vacuum_fraction: 0.25,
            intrinsic_error: 0.01,
        }
    }
}

impl FpsSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.rep_rate_hz > 0.0) {
            return Err(Error::domain("rep_rate_hz", self.rep_rate_hz, "> 0"));
        }
        unit("signal_fraction", self.signal_fraction)?;
        unit("decoy_fraction", self.decoy_fraction)?;
        unit("vacuum_fraction", self.vacuum_fraction)?;
        let sum = self.signal_fraction + self.decoy_fraction + self.vacuum_fraction;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::domain("intensity fractions sum", sum, "= 1"));
        }
        // a dark transmitter (both zero) is allowed for noise-only runs
        let dark = self.mu_signal == 0.0 && self.mu_decoy == 0.0;
        if !(self.mu_decoy >= 0.0 && (self.mu_decoy < self.mu_signal || dark)) {
            return Err(Error::domain("mu_decoy", self.mu_decoy, "[0, mu_signal)"));
        }
        unit("intrinsic_error", self.intrinsic_error)
    }

    pub fn mean_photon_number(&self, class: IntensityClass) -> f64 {
        match class {
            IntensityClass::Signal => self.mu_signal,
            IntensityClass::Decoy => self.mu_decoy,
            IntensityClass::Vacuum => 0.0,
        }
    }

    pub fn fraction(&self, class: IntensityClass) -> f64 {
        match class {
            IntensityClass::Signal => self.signal_fraction,
            IntensityClass::Decoy => self.decoy_fraction,
            IntensityClass::Vacuum => self.vacuum_fraction,
        }
    }

    /// Mean detection probability per pulse behind a channel of
    /// transmittance `eta`.
    pub fn detection_probability(&self, eta: f64) -> f64 {
        IntensityClass::ALL
            .iter()
            .map(|&c| self.fraction(c) * (1.0 - (-self.mean_photon_number(c) * eta).exp()))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSpec {
    pub efficiency: f64,
    pub dark_cps: f64,
    pub n_detectors: u8,
    /// Gaussian timing jitter of one detection (detector plus tagger).
    pub timing_jitter_s: f64,
    pub fov_rad: f64,
    /// Non-paralyzable dead time per channel; 0 disables it.
    pub dead_time_s: f64,
}

impl Default for DetectorSpec {
    fn default() -> Self {
        DetectorSpec {
            efficiency: 0.5,
            dark_cps: 500.0,
            n_detectors: 4,
            timing_jitter_s: 0.1e-9,
            fov_rad: 1e-3,
            dead_time_s: 0.0,
        }
    }
}

impl DetectorSpec {
    pub fn validate(&self) -> Result<()> {
        unit("efficiency", self.efficiency)?;
        if !(self.dark_cps >= 0.0) {
            return Err(Error::domain("dark_cps", self.dark_cps, ">= 0"));
        }
        if self.n_detectors == 0 || self.n_detectors > 4 {
            return Err(Error::domain("n_detectors", self.n_detectors as f64, "1..=4"));
        }
        if !(self.timing_jitter_s >= 0.0) {
            return Err(Error::domain("timing_jitter_s", self.timing_jitter_s, ">= 0"));
        }
        if !(self.dead_time_s >= 0.0) {
            return Err(Error::domain("dead_time_s", self.dead_time_s, ">= 0"));
        }
        Ok(())
    }

    pub fn dark_total_cps(&self) -> f64 {
        self.dark_cps * self.n_detectors as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    Eps(EpsSpec),
    Fps(FpsSpec),
}

impl Source {
    pub fn validate(&self) -> Result<()> {
        match self {
            Source::Eps(s) => s.validate(),
            Source::Fps(s) => s.validate(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsLocalRates {
    pub singles_per_arm: f64,
    pub pairs_detected: f64,
}

pub fn eps_local_rates(s: &EpsSpec) -> EpsLocalRates {
    EpsLocalRates {
        singles_per_arm: s.pair_rate_pps * s.coupling_efficiency,
        pairs_detected: s.pair_rate_pps * s.coupling_efficiency * s.coupling_efficiency,
    }
}

/// Detection rate of a local monitor detector placed directly on the
/// source output.
pub fn fps_local_rate(s: &FpsSpec, d: &DetectorSpec) -> f64 {
    s.rep_rate_hz * s.detection_probability(d.efficiency)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemoteRates {
    pub singles: f64,
    /// EPS: ground/space coincidences. FPS: basis-sifted detections.
    pub coincidences_or_sifted: f64,
}

/// Rates at the orbiting receiver, linear in the channel transmittance.
pub fn expected_remote_rates(source: &Source, det: &DetectorSpec, attenuation_db: f64) -> Result<RemoteRates> {
    if !(attenuation_db >= 0.0) {
        return Err(Error::domain("attenuation_db", attenuation_db, ">= 0"));
    }
    let t = db_to_transmittance(attenuation_db);
    Ok(match source {
        Source::Eps(s) => {
            let singles = eps_local_rates(s).singles_per_arm * t;
            RemoteRates {
                singles,
                coincidences_or_sifted: singles * s.coupling_efficiency,
            }
        }
        Source::Fps(s) => {
            let singles = fps_local_rate(s, det) * t;
            RemoteRates {
                singles,
                coincidences_or_sifted: 0.5 * singles,
            }
        }
    })
}

fn unit(name: &'static str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::domain(name, v, "[0, 1]"))
    }
}
