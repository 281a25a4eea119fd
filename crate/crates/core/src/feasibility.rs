//! Closed-form signal-to-noise, visibility and QBER predictions.
//!
//! Accidental coincidences are a ground detection and an unrelated space
//! detection landing in the same window of full width `tau_c`:
//! `R_acc = R_ground * (R_background + R_dark + R_uncorrelated) * tau_c`.
//! Every remote signal photon counts as uncorrelated here: it is correlated
//! with exactly one ground detection, its own twin, and random with respect
//! to all the others.
//!
//! The noise-limited visibility is `V = SNR / (SNR + 2)`. This is the one
//! mapping under which the entanglement threshold `SNR = 2 / (sqrt 2 - 1)`
//! lands exactly on `V = 1/sqrt 2`, the point where the CHSH value of an
//! otherwise perfect source drops to 2.

use std::f64::consts::SQRT_2;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::link::db_to_transmittance;
use crate::qkd::{decoy_key_rate, DecoyObservables, KeyRateResult};
use crate::source::{eps_local_rates, expected_remote_rates, DetectorSpec, EpsSpec, FpsSpec, Source};

pub const DEFAULT_COINCIDENCE_WINDOW_S: f64 = 0.75e-9;
/// Detection gate around each expected pulse arrival.
pub const DEFAULT_PULSE_GATE_S: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseBudget {
    pub background_cps: f64,
    pub dark_total_cps: f64,
    pub uncorrelated_signal_cps: f64,
    /// Full width of the coincidence window.
    pub coincidence_window_s: f64,
}

impl Default for NoiseBudget {
    fn default() -> Self {
        NoiseBudget {
            background_cps: 1000.0,
            dark_total_cps: 2000.0,
            uncorrelated_signal_cps: 1000.0,
            coincidence_window_s: DEFAULT_COINCIDENCE_WINDOW_S,
        }
    }
}

impl NoiseBudget {
    pub fn for_eps(background_cps: f64, det: &DetectorSpec, eps: &EpsSpec, attenuation_db: f64, window_s: f64) -> Self {
        let remote = eps_local_rates(eps).singles_per_arm * db_to_transmittance(attenuation_db);
        NoiseBudget {
            background_cps,
            dark_total_cps: det.dark_total_cps(),
            uncorrelated_signal_cps: remote,
            coincidence_window_s: window_s,
        }
    }

    pub fn total_cps(&self) -> f64 {
        self.background_cps + self.dark_total_cps + self.uncorrelated_signal_cps
    }

    pub fn validate(&self) -> Result<()> {
        for (n, v) in [
            ("background_cps", self.background_cps),
            ("dark_total_cps", self.dark_total_cps),
            ("uncorrelated_signal_cps", self.uncorrelated_signal_cps),
        ] {
            if !(v >= 0.0) {
                return Err(Error::domain(n, v, ">= 0"));
            }
        }
        if !(self.coincidence_window_s > 0.0) {
            return Err(Error::domain("coincidence_window_s", self.coincidence_window_s, "> 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrResult {
    /// `f64::INFINITY` when there are no accidentals.
    pub snr: f64,
    pub signal_coinc_cps: f64,
    pub accidental_coinc_cps: f64,
    pub visibility: f64,
    pub qber: f64,
}

/// Fraction of true pairs whose time difference falls inside a window of
/// full width `window_s`, with each side jittered by `jitter_s`.
pub fn window_capture(window_s: f64, jitter_s: f64) -> f64 {
    let sigma = SQRT_2 * jitter_s;
    if sigma == 0.0 {
        return 1.0;
    }
    erf(window_s / (2.0 * SQRT_2 * sigma))
}

pub fn snr_analytic(eps: &EpsSpec, det: &DetectorSpec, attenuation_db: f64, noise: &NoiseBudget) -> Result<SnrResult> {
    noise.validate()?;
    let remote = expected_remote_rates(&Source::Eps(*eps), det, attenuation_db)?;
    let signal = remote.coincidences_or_sifted * window_capture(noise.coincidence_window_s, det.timing_jitter_s);
    let accidental = eps_local_rates(eps).singles_per_arm * noise.total_cps() * noise.coincidence_window_s;
    let snr = if accidental > 0.0 {
        signal / accidental
    } else {
        f64::INFINITY
    };
    let visibility = visibility_from_snr(snr);
    Ok(SnrResult {
        snr,
        signal_coinc_cps: signal,
        accidental_coinc_cps: accidental,
        visibility,
        qber: (1.0 - visibility) / 2.0,
    })
}

/// Smallest SNR at which entanglement can still be demonstrated.
pub fn bell_snr_threshold() -> f64 {
    2.0 / (SQRT_2 - 1.0)
}

pub fn visibility_from_snr(snr: f64) -> f64 {
    if snr.is_infinite() {
        1.0
    } else {
        snr / (snr + 2.0)
    }
}

/// `(1 - V)/2 + e_d V`; the second term is the intrinsic misalignment error.
pub fn qber_from_snr(snr: f64, intrinsic_error: f64) -> f64 {
    let v = visibility_from_snr(snr);
    (1.0 - v) / 2.0 + intrinsic_error * v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fig5Row {
    pub attenuation_db: f64,
    pub background_cps: f64,
    pub snr: f64,
    pub visibility: f64,
    pub qber: f64,
    pub key: KeyRateResult,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepInputs<'a> {
    pub eps: &'a EpsSpec,
    pub fps: &'a FpsSpec,
    pub det: &'a DetectorSpec,
    pub coincidence_window_s: f64,
    pub pulse_gate_s: f64,
}

pub fn decoy_point(fps: &FpsSpec, det: &DetectorSpec, attenuation_db: f64, background_cps: f64, gate_s: f64) -> Result<KeyRateResult> {
    let eta = db_to_transmittance(attenuation_db);
    let y0 = (background_cps + det.dark_total_cps()) * gate_s;
    let obs = DecoyObservables::analytic(fps.mu_signal, fps.mu_decoy, eta, y0, fps.intrinsic_error);
    decoy_key_rate(&obs, 0.5, fps.rep_rate_hz)
}

/// SNR and decoy key rate over an attenuation x background grid. Rows are
/// ordered background-major, then attenuation, as given.
pub fn fig5_sweep(attenuations_db: &[f64], backgrounds_cps: &[f64], inputs: SweepInputs<'_>) -> Result<Vec<Fig5Row>> {
    if attenuations_db.is_empty() || backgrounds_cps.is_empty() {
        return Err(Error::Config("empty sweep grid".into()));
    }
    let grid: Vec<(f64, f64)> = backgrounds_cps
        .iter()
        .flat_map(|&b| attenuations_db.iter().map(move |&a| (a, b)))
        .collect();
    grid.par_iter()
        .map(|&(a, b)| {
            let noise = NoiseBudget::for_eps(b, inputs.det, inputs.eps, a, inputs.coincidence_window_s);
            let s = snr_analytic(inputs.eps, inputs.det, a, &noise)?;
            Ok(Fig5Row {
                attenuation_db: a,
                background_cps: b,
                snr: s.snr,
                visibility: s.visibility,
                qber: s.qber,
                key: decoy_point(inputs.fps, inputs.det, a, b, inputs.pulse_gate_s)?,
            })
        })
        .collect()
}

pub fn write_fig5_csv<W: Write>(rows: &[Fig5Row], mut w: W) -> std::io::Result<()> {
    writeln!(w, "attenuation_db,background_cps,snr,visibility,qber,key_rate_per_pulse,key_rate_cps")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.6},{:.6e},{:.6}",
            r.attenuation_db, r.background_cps, r.snr, r.visibility, r.qber, r.key.rate_per_pulse, r.key.rate_cps
        )?;
    }
    Ok(())
}
