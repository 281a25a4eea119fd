//! Key-rate estimation: sifting, binary entropy, the Shor-Preskill bound
//! for entanglement-based key, and the vacuum + weak decoy bounds for the
//! pulsed protocol.
//!
//! Decoy observables follow the usual channel model: a pulse of mean photon
//! number `mu` sent through transmittance `eta` with background yield `Y0`
//! has gain `Q = Y0 + 1 - exp(-eta mu)` and error `E Q = e0 Y0 + e_d (1 - exp(-eta mu))`.
//! From the signal and decoy gains the single-photon yield is bounded below
//! and its error rate above; the key rate is then
//! `R >= q (Q1 (1 - H2(e1)) - f Q_mu H2(E_mu))`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Error rate of a detection carrying no information.
pub const E0: f64 = 0.5;
pub const DEFAULT_EC_INEFFICIENCY: f64 = 1.16;
pub const BELL_MIN_EVENTS: u64 = 1_000;
pub const QKD_MIN_EVENTS: u64 = 10_000;

pub fn binary_entropy(x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::domain("x", x, "[0, 1]"));
    }
    if x == 0.0 || x == 1.0 {
        return Ok(0.0);
    }
    Ok(-x * x.log2() - (1.0 - x) * (1.0 - x).log2())
}

fn h2(x: f64) -> f64 {
    binary_entropy(x.clamp(0.0, 1.0)).unwrap_or(0.0)
}

/// Asymptotic secret fraction per sifted bit, `max(0, 1 - 2 H2(qber))`.
pub fn shor_preskill_rate(qber: f64) -> f64 {
    (1.0 - 2.0 * h2(qber.clamp(0.0, 0.5))).max(0.0)
}

/// Gain and error rate of a coherent pulse class.
pub fn decoy_gain_error(mu: f64, eta: f64, y0: f64, e_d: f64) -> (f64, f64) {
    let signal = 1.0 - (-eta * mu).exp();
    let gain = y0 + signal;
    if gain == 0.0 {
        return (0.0, E0);
    }
    (gain, (E0 * y0 + e_d * signal) / gain)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassObservation {
    pub mu: f64,
    pub gain: f64,
    pub error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoyObservables {
    pub signal: ClassObservation,
    pub decoy: ClassObservation,
    /// Background yield, measured on vacuum pulses.
    pub y0: f64,
    pub ec_inefficiency: f64,
}

impl DecoyObservables {
    /// Observables a perfect experiment would report for this channel.
    pub fn analytic(mu: f64, nu: f64, eta: f64, y0: f64, e_d: f64) -> Self {
        let (qm, em) = decoy_gain_error(mu, eta, y0, e_d);
        let (qn, en) = decoy_gain_error(nu, eta, y0, e_d);
        DecoyObservables {
            signal: ClassObservation {
                mu,
                gain: qm,
                error: em,
            },
            decoy: ClassObservation {
                mu: nu,
                gain: qn,
                error: en,
            },
            y0,
            ec_inefficiency: DEFAULT_EC_INEFFICIENCY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyRateStatus {
    Positive,
    /// Error-correction cost exceeds the single-photon contribution.
    ZeroRate,
    /// The single-photon yield bound is not positive; channel too noisy.
    NoSinglePhotonYield,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyRateResult {
    pub rate_per_pulse: f64,
    pub rate_cps: f64,
    pub y1_lower: f64,
    pub e1_upper: f64,
    pub q1: f64,
    pub status: KeyRateStatus,
}

impl KeyRateResult {
    fn zero(status: KeyRateStatus) -> Self {
        KeyRateResult {
            rate_per_pulse: 0.0,
            rate_cps: 0.0,
            y1_lower: 0.0,
            e1_upper: E0,
            q1: 0.0,
            status,
        }
    }
}

pub fn single_photon_bounds(obs: &DecoyObservables) -> (f64, f64) {
    let mu = obs.signal.mu;
    let nu = obs.decoy.mu;
    let (qm, qn) = (obs.signal.gain, obs.decoy.gain);
    let y1 = mu / (mu * nu - nu * nu)
        * (qn * nu.exp() - qm * mu.exp() * nu * nu / (mu * mu) - (mu * mu - nu * nu) / (mu * mu) * obs.y0);
    let e1 = if y1 > 0.0 {
        (obs.decoy.error * qn * nu.exp() - E0 * obs.y0) / (y1 * nu)
    } else {
        E0
    };
    (y1, e1)
}

/// Lower bound on the secret key rate with `sifting` the basis-agreement
/// fraction and `rep_rate_hz` the pulse rate.
pub fn decoy_key_rate(obs: &DecoyObservables, sifting: f64, rep_rate_hz: f64) -> Result<KeyRateResult> {
    let (mu, nu) = (obs.signal.mu, obs.decoy.mu);
    if !(nu > 0.0 && nu < mu) {
        return Err(Error::domain("decoy mu", nu, "(0, signal mu)"));
    }
    let (y1, e1) = single_photon_bounds(obs);
    if !(y1 > 0.0) {
        return Ok(KeyRateResult {
            y1_lower: y1,
            ..KeyRateResult::zero(KeyRateStatus::NoSinglePhotonYield)
        });
    }
    let y1 = y1.min(1.0);
    let e1 = e1.clamp(0.0, E0);
    Ok(rate_from_single_photon(obs, y1, e1, sifting, rep_rate_hz))
}

fn rate_from_single_photon(obs: &DecoyObservables, y1: f64, e1: f64, sifting: f64, rep: f64) -> KeyRateResult {
    let mu = obs.signal.mu;
    let q1 = y1 * mu * (-mu).exp();
    let raw = sifting
        * (q1 * (1.0 - h2(e1)) - obs.ec_inefficiency * obs.signal.gain * h2(obs.signal.error));
    let rate = raw.max(0.0);
    KeyRateResult {
        rate_per_pulse: rate,
        rate_cps: rate * rep,
        y1_lower: y1,
        e1_upper: e1,
        q1,
        status: if rate > 0.0 {
            KeyRateStatus::Positive
        } else {
            KeyRateStatus::ZeroRate
        },
    }
}

/// Infinite-decoy limit: single-photon yield and error known exactly.
pub fn asymptotic_key_rate(mu: f64, eta: f64, y0: f64, e_d: f64, sifting: f64, rep_rate_hz: f64) -> KeyRateResult {
    let (gain, error) = decoy_gain_error(mu, eta, y0, e_d);
    let y1 = (y0 + eta).min(1.0);
    let e1 = if y1 > 0.0 { (E0 * y0 + e_d * eta) / y1 } else { E0 };
    let obs = DecoyObservables {
        signal: ClassObservation { mu, gain, error },
        decoy: ClassObservation {
            mu: 0.0,
            gain: y0,
            error: E0,
        },
        y0,
        ec_inefficiency: DEFAULT_EC_INEFFICIENCY,
    };
    rate_from_single_photon(&obs, y1, e1.clamp(0.0, E0), sifting, rep_rate_hz)
}

/// One detection event with the basis and bit seen on each side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisRecord {
    pub ground_basis: u8,
    pub ground_bit: u8,
    pub space_basis: u8,
    pub space_bit: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiftedKey {
    /// (ground bit, space bit).
    pub bits: Vec<(u8, u8)>,
    pub input_events: usize,
    pub errors: usize,
    pub qber: f64,
    /// Wilson score interval at 95 %.
    pub qber_interval: (f64, f64),
}

impl SiftedKey {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Standard error of the QBER estimate.
    pub fn qber_sigma(&self) -> f64 {
        let n = self.len() as f64;
        if n == 0.0 {
            return 0.0;
        }
        (self.qber * (1.0 - self.qber) / n).sqrt()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "ground_bit,space_bit")?;
        for (g, s) in &self.bits {
            writeln!(w, "{g},{s}")?;
        }
        Ok(())
    }
}

pub fn sift<I: IntoIterator<Item = BasisRecord>>(records: I) -> SiftedKey {
    let mut input_events = 0;
    let bits: Vec<(u8, u8)> = records
        .into_iter()
        .inspect(|_| input_events += 1)
        .filter(|r| r.ground_basis == r.space_basis)
        .map(|r| (r.ground_bit, r.space_bit))
        .collect();
    let errors = bits.iter().filter(|(g, s)| g != s).count();
    let n = bits.len() as f64;
    let qber = if bits.is_empty() { 0.0 } else { errors as f64 / n };
    SiftedKey {
        qber_interval: wilson(errors as f64, n, 1.96),
        bits,
        input_events,
        errors,
        qber,
    }
}

fn wilson(k: f64, n: f64, z: f64) -> (f64, f64) {
    if n == 0.0 {
        return (0.0, 1.0);
    }
    let p = k / n;
    let denom = 1.0 + z * z / n;
    let center = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Bell,
    Qkd,
}

pub fn events_sufficient(n: u64, protocol: Protocol) -> bool {
    match protocol {
        Protocol::Bell => n >= BELL_MIN_EVENTS,
        Protocol::Qkd => n >= QKD_MIN_EVENTS,
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn entropy_values() {
        assert_eq!(binary_entropy(0.5).unwrap(), 1.0);
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        assert_abs_diff_eq!(binary_entropy(0.11).unwrap(), 0.499_915_958, epsilon = 1e-8);
        assert!(binary_entropy(1.5).is_err());
        assert!(binary_entropy(-0.1).is_err());
    }

    #[test]
    fn shor_preskill_values() {
        assert!(shor_preskill_rate(0.11).abs() < 1e-3);
        assert_eq!(shor_preskill_rate(0.0), 1.0);
        assert_abs_diff_eq!(shor_preskill_rate(0.05), 0.427_206_086, epsilon = 1e-8);
        assert_eq!(shor_preskill_rate(0.3), 0.0);
    }

    #[test]
    fn gain_error_limits() {
        let (q, e) = decoy_gain_error(0.0, 1e-4, 3e-6, 0.01);
        assert_eq!(q, 3e-6);
        assert_eq!(e, 0.5);
        let (_, e) = decoy_gain_error(0.5, 1e-4, 0.0, 0.0);
        assert_eq!(e, 0.0);
        let (q, e) = decoy_gain_error(0.5, 1e-4, 3e-6, 0.01);
        assert!((q - 5.3e-5).abs() < 1e-7, "{q}");
        assert!((4e3..6e3).contains(&(q * 1e8)));
        assert!((0.01..=0.5).contains(&e));
    }

    #[test]
    fn noiseless_decoy_rate() {
        let obs = DecoyObservables::analytic(0.5, 0.1, 1e-4, 0.0, 0.0);
        let r = decoy_key_rate(&obs, 0.5, 1e8).unwrap();
        assert_abs_diff_eq!(r.e1_upper, 0.0, epsilon = 1e-12);
        assert!(r.rate_per_pulse > 0.0);
        assert_eq!(r.status, KeyRateStatus::Positive);
    }

    #[test]
    fn noisy_channel_flagged() {
        let obs = DecoyObservables::analytic(0.5, 0.1, 10f64.powf(-5.5), 10.0 * 13e3 * 1e-9, 0.01);
        let r = decoy_key_rate(&obs, 0.5, 1e8).unwrap();
        assert_eq!(r.rate_per_pulse, 0.0);
        assert_ne!(r.status, KeyRateStatus::Positive);
    }

    #[test]
    fn nominal_operating_point_positive() {
        let obs = DecoyObservables::analytic(0.5, 0.1, 1e-4, 3e-6, 0.01);
        let r = decoy_key_rate(&obs, 0.5, 1e8).unwrap();
        assert!(r.rate_cps > 0.0);
        assert!(r.y1_lower <= 3e-6 + 1e-4);
    }

    #[test]
    fn sift_behaviour() {
        let same: Vec<_> = (0..10)
            .map(|i| BasisRecord {
                ground_basis: (i % 2) as u8,
                ground_bit: 1,
                space_basis: (i % 2) as u8,
                space_bit: 1,
            })
            .collect();
        let k = sift(same);
        assert_eq!(k.len(), 10);
        assert_eq!(k.qber, 0.0);
        let mixed = [
            BasisRecord { ground_basis: 0, ground_bit: 0, space_basis: 1, space_bit: 1 },
            BasisRecord { ground_basis: 1, ground_bit: 0, space_basis: 1, space_bit: 1 },
        ];
        let k = sift(mixed);
        assert_eq!((k.len(), k.errors, k.input_events), (1, 1, 2));
    }

    #[test]
    fn sufficiency_boundaries() {
        assert!(!events_sufficient(999, Protocol::Bell));
        assert!(events_sufficient(1000, Protocol::Bell));
        assert!(!events_sufficient(9_999, Protocol::Qkd));
        assert!(events_sufficient(3500 * 20, Protocol::Qkd));
    }

    proptest! {
        #[test]
        fn entropy_shape(x in 0.0f64..=0.5, y in 0.0f64..=1.0, t in 0.0f64..=1.0) {
            let hx = binary_entropy(x).unwrap();
            prop_assert!((hx - binary_entropy(1.0 - x).unwrap()).abs() < 1e-12);
            prop_assert!(hx <= 1.0);
            // concavity along the chord
            let m = t * x + (1.0 - t) * y;
            let chord = t * hx + (1.0 - t) * binary_entropy(y).unwrap();
            prop_assert!(binary_entropy(m).unwrap() >= chord - 1e-12);
        }

        #[test]
        fn shor_preskill_monotone(a in 0.0f64..0.5, d in 0.0f64..0.1) {
            prop_assert!(shor_preskill_rate((a + d).min(0.5)) <= shor_preskill_rate(a));
        }
    }
}
