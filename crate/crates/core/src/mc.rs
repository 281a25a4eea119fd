//! Monte Carlo generation of ground and space time-tag streams.
//!
//! Ground time is the pass clock in seconds (picoseconds in the streams).
//! A photon leaving the ground at `g` is tagged on board at
//! `g + delay(g) + offset + drift * g + jitter`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Geometric, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for, splitmix64};
use crate::source::{eps_local_rates, DetectorSpec, EpsSpec, FpsSpec, IntensityClass};
use crate::timeline::ChannelTimeline;
use crate::timetag::{channel, PulseRecord, Segment, TimeTagStream};

/// Streams above this many expected records are refused.
pub const MAX_EVENTS: f64 = 4.0e8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClockModel {
    /// Space clock minus ground clock at ground time zero.
    pub offset_s: f64,
    pub drift: f64,
    /// Per-detection Gaussian jitter, applied on both sides.
    pub jitter_sigma_s: f64,
}

impl Default for ClockModel {
    fn default() -> Self {
        ClockModel {
            offset_s: 0.0,
            drift: 0.0,
            jitter_sigma_s: 0.1e-9,
        }
    }
}

impl ClockModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.jitter_sigma_s >= 0.0) {
            return Err(Error::domain("jitter_sigma_s", self.jitter_sigma_s, ">= 0"));
        }
        if !self.offset_s.is_finite() || !(self.drift.abs() < 1e-3) {
            return Err(Error::Config("clock offset must be finite and |drift| < 1e-3".into()));
        }
        Ok(())
    }
}

/// Analyzer angles for basis 0 and basis 1 on each side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasurementSettings {
    pub ground_angles_deg: [f64; 2],
    pub space_angles_deg: [f64; 2],
}

impl Default for MeasurementSettings {
    fn default() -> Self {
        MeasurementSettings {
            ground_angles_deg: [0.0, 45.0],
            space_angles_deg: [22.5, 67.5],
        }
    }
}

impl MeasurementSettings {
    /// H/V and +-45 on both sides, as used for key generation.
    pub fn bb84() -> Self {
        MeasurementSettings {
            ground_angles_deg: [0.0, 45.0],
            space_angles_deg: [0.0, 45.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for a in self.ground_angles_deg.iter().chain(&self.space_angles_deg) {
            if !(0.0..180.0).contains(a) {
                return Err(Error::domain("analyzer angle (deg)", *a, "[0, 180)"));
            }
        }
        Ok(())
    }
}

/// Everything a pass generator needs besides the source itself.
#[derive(Debug, Clone, Copy)]
pub struct PassConditions<'a> {
    pub timeline: &'a ChannelTimeline,
    pub detectors: &'a DetectorSpec,
    pub background_cps: f64,
    pub clock: &'a ClockModel,
    pub seed: u64,
}

impl PassConditions<'_> {
    fn space_time_ps(&self, g_s: f64, jitter_s: f64) -> Result<u64> {
        let s = g_s + self.timeline.delay_at(g_s) + self.clock.offset_s + self.clock.drift * g_s + jitter_s;
        to_ps(s)
    }

    /// Background and dark counts on board, uniformly spread over channels.
    fn noise(&self, rng: &mut ChaCha8Rng, out: &mut Vec<(u64, u8)>) -> Result<(u64, u64)> {
        let (t0, t1) = (self.timeline.t_start_s, self.timeline.t_end_s);
        let mut n_bg = 0;
        for t in poisson_times(rng, self.background_cps, t0, t1) {
            out.push((self.space_time_ps(t, 0.0)?, rng.gen_range(0..4)));
            n_bg += 1;
        }
        let mut n_dark = 0;
        for d in 0..self.detectors.n_detectors {
            for t in poisson_times(rng, self.detectors.dark_cps, t0, t1) {
                out.push((self.space_time_ps(t, 0.0)?, d % 4));
                n_dark += 1;
            }
        }
        Ok((n_bg, n_dark))
    }
}

fn to_ps(t_s: f64) -> Result<u64> {
    let ps = (t_s * 1e12).round();
    if !(0.0..1.8e19).contains(&ps) {
        return Err(Error::Config(format!("event time {t_s} s falls outside the clock range")));
    }
    Ok(ps as u64)
}

fn poisson_times(rng: &mut ChaCha8Rng, rate: f64, t0: f64, t1: f64) -> Vec<f64> {
    let mut v = Vec::new();
    if rate <= 0.0 {
        return v;
    }
    let mut t = t0;
    loop {
        let e: f64 = Exp1.sample(rng);
        t += e / rate;
        if t >= t1 {
            return v;
        }
        v.push(t);
    }
}

fn check_budget(expected: f64) -> Result<()> {
    if expected > MAX_EVENTS {
        Err(Error::TooManyEvents(expected))
    } else {
        Ok(())
    }
}

/// Restores time order after jitter; records are out of place by at most a
/// few neighbours, so insertion sort is linear in practice.
fn fix_order(s: &mut TimeTagStream) {
    let (t, c) = (&mut s.times_ps, &mut s.channels);
    for i in 1..t.len() {
        if t[i] >= t[i - 1] {
            continue;
        }
        let (ti, ci) = (t[i], c[i]);
        let mut j = i;
        while j > 0 && t[j - 1] > ti {
            t[j] = t[j - 1];
            c[j] = c[j - 1];
            j -= 1;
        }
        t[j] = ti;
        c[j] = ci;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpsTruth {
    pub ground_events: u64,
    pub delivered_twins: u64,
    pub uplink_only: u64,
    pub background: u64,
    pub dark: u64,
}

/// Entangled-source pass. Ground detections form a Poisson process at the
/// local singles rate; each one's twin reaches the space detectors with
/// probability `coupling * T(t)`. Photons whose local partner was lost
/// still arrive on board, uncorrelated with any ground record.
pub fn generate_eps_pass(
    eps: &EpsSpec,
    settings: &MeasurementSettings,
    cond: &PassConditions<'_>,
) -> Result<(TimeTagStream, TimeTagStream, EpsTruth)> {
    eps.validate()?;
    settings.validate()?;
    cond.clock.validate()?;
    cond.detectors.validate()?;
    let tl = cond.timeline;
    let (t0, t1) = (tl.t_start_s, tl.t_end_s);
    let rate = eps_local_rates(eps).singles_per_arm;
    let expected = rate * tl.duration_s();
    check_budget(expected)?;

    let t_max = tl.max_transmittance();
    let p_twin_max = eps.coupling_efficiency * t_max;
    let sigma = cond.clock.jitter_sigma_s;
    let mut rng = rng_for(cond.seed, "eps/ground");
    let mut twin_rng = rng_for(cond.seed, "eps/twins");
    let cap = (expected + 6.0 * expected.sqrt() + 16.0) as usize;
    let mut ground = TimeTagStream::with_capacity(Segment::Ground, cap);
    let mut space: Vec<(u64, u8)> = Vec::new();
    let mut truth = EpsTruth::default();

    let skip = (p_twin_max > 0.0).then(|| Geometric::new(p_twin_max.min(1.0)).expect("probability in (0, 1]"));
    let mut countdown = skip.as_ref().map_or(u64::MAX, |g| g.sample(&mut twin_rng));
    let mut bits = 0u64;
    let mut bits_left = 0u32;
    let mut t = t0;
    if rate > 0.0 {
        loop {
            let e: f64 = Exp1.sample(&mut rng);
            t += e / rate;
            if t >= t1 {
                break;
            }
            if bits_left == 0 {
                bits = rng.gen();
                bits_left = 32;
            }
            let gb = (bits & 1) as u8;
            let go = ((bits >> 1) & 1) as u8;
            bits >>= 2;
            bits_left -= 1;
            let jg: f64 = if sigma > 0.0 { sigma * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
            ground.push(to_ps(t + jg)?, channel(gb, go));

            if countdown > 0 {
                countdown -= 1;
                continue;
            }
            countdown = skip.as_ref().map_or(u64::MAX, |g| g.sample(&mut twin_rng));
            if twin_rng.gen::<f64>() * t_max >= tl.transmittance_at(t) {
                continue;
            }
            let sb: u8 = twin_rng.gen_range(0..2);
            let e = eps.state.correlation(
                eps.visibility,
                settings.ground_angles_deg[gb as usize],
                settings.space_angles_deg[sb as usize],
            );
            let so = if twin_rng.gen::<f64>() < 0.5 * (1.0 + e) { go } else { 1 - go };
            let js: f64 = if sigma > 0.0 { sigma * twin_rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
            space.push((cond.space_time_ps(t, js)?, channel(sb, so)));
            truth.delivered_twins += 1;
        }
    }
    truth.ground_events = ground.len() as u64;
    fix_order(&mut ground);

    let mut nrng = rng_for(cond.seed, "eps/space-noise");
    let uplink_only_max = eps.pair_rate_pps * (1.0 - eps.coupling_efficiency) * eps.coupling_efficiency * t_max;
    for u in poisson_times(&mut nrng, uplink_only_max, t0, t1) {
        if nrng.gen::<f64>() * t_max < tl.transmittance_at(u) {
            let js: f64 = if sigma > 0.0 { sigma * nrng.sample::<f64, _>(StandardNormal) } else { 0.0 };
            space.push((cond.space_time_ps(u, js)?, nrng.gen_range(0..4)));
            truth.uplink_only += 1;
        }
    }
    let (bg, dark) = cond.noise(&mut nrng, &mut space)?;
    truth.background = bg;
    truth.dark = dark;
    Ok((ground, TimeTagStream::from_records(Segment::Space, space), truth))
}

/// Implicit transmitter log: the class, bit and basis of pulse `k` are a
/// hash of a key and `k`, so any pulse can be looked up without storing
/// the log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseTrain {
    pub key: u64,
    pub t_start_s: f64,
    pub period_s: f64,
    pub n_pulses: u64,
    pub signal_fraction: f64,
    pub decoy_fraction: f64,
}

impl PulseTrain {
    pub fn new(fps: &FpsSpec, seed: u64, t_start_s: f64, t_end_s: f64) -> Self {
        PulseTrain {
            key: derive_seed(seed, "fps/pulses"),
            t_start_s,
            period_s: 1.0 / fps.rep_rate_hz,
            n_pulses: ((t_end_s - t_start_s) * fps.rep_rate_hz).floor().max(0.0) as u64,
            signal_fraction: fps.signal_fraction,
            decoy_fraction: fps.decoy_fraction,
        }
    }

    pub fn emission_time_s(&self, k: u64) -> f64 {
        self.t_start_s + k as f64 * self.period_s
    }

    /// `(class, bit, basis)` of pulse `k`.
    pub fn pulse(&self, k: u64) -> (IntensityClass, u8, u8) {
        let h = splitmix64(self.key ^ splitmix64(k));
        let u = (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let class = if u < self.signal_fraction {
            IntensityClass::Signal
        } else if u < self.signal_fraction + self.decoy_fraction {
            IntensityClass::Decoy
        } else {
            IntensityClass::Vacuum
        };
        (class, (h & 1) as u8, ((h >> 1) & 1) as u8)
    }

    pub fn record(&self, k: u64) -> PulseRecord {
        let (c, bit, basis) = self.pulse(k);
        PulseRecord {
            time_ps: (self.emission_time_s(k) * 1e12).round() as u64,
            intensity_class: c.index() as u8,
            bit,
            basis,
        }
    }

    /// Expected number of pulses of a class; exact up to `O(sqrt n)`.
    pub fn expected_count(&self, class: IntensityClass) -> f64 {
        let f = match class {
            IntensityClass::Signal => self.signal_fraction,
            IntensityClass::Decoy => self.decoy_fraction,
            IntensityClass::Vacuum => 1.0 - self.signal_fraction - self.decoy_fraction,
        };
        f * self.n_pulses as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FpsTruth {
    /// Indices of pulses that produced a detection, in emission order.
    pub detected_pulses: Vec<u64>,
    pub background: u64,
    pub dark: u64,
}

/// Faint-pulse decoy pass. A pulse of class `i` emitted at `t` is detected
/// with probability `1 - exp(-mu_i T(t))`; in the matching basis the bit is
/// flipped with probability `e_d`, otherwise it is random.
pub fn generate_fps_pass(fps: &FpsSpec, cond: &PassConditions<'_>) -> Result<(PulseTrain, TimeTagStream, FpsTruth)> {
    fps.validate()?;
    cond.clock.validate()?;
    cond.detectors.validate()?;
    let tl = cond.timeline;
    let train = PulseTrain::new(fps, cond.seed, tl.t_start_s, tl.t_end_s);
    let t_max = tl.max_transmittance();
    let mu_max = IntensityClass::ALL.iter().map(|&c| fps.mean_photon_number(c)).fold(0.0, f64::max);
    let p_max = 1.0 - (-mu_max * t_max).exp();
    check_budget(train.n_pulses as f64 * p_max)?;

    let sigma = cond.clock.jitter_sigma_s;
    let mut rng = rng_for(cond.seed, "fps/detections");
    let mut space: Vec<(u64, u8)> = Vec::new();
    let mut truth = FpsTruth::default();
    if p_max > 0.0 {
        let skip = Geometric::new(p_max).expect("probability in (0, 1]");
        let mut k = skip.sample(&mut rng);
        while k < train.n_pulses {
            let t = train.emission_time_s(k);
            let (class, bit, basis) = train.pulse(k);
            let p = 1.0 - (-fps.mean_photon_number(class) * tl.transmittance_at(t)).exp();
            if rng.gen::<f64>() * p_max < p {
                let sb: u8 = rng.gen_range(0..2);
                let sbit = if sb == basis {
                    bit ^ u8::from(rng.gen::<f64>() < fps.intrinsic_error)
                } else {
                    rng.gen_range(0..2)
                };
                let js: f64 = if sigma > 0.0 { sigma * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
                space.push((cond.space_time_ps(t, js)?, channel(sb, sbit)));
                truth.detected_pulses.push(k);
            }
            k = k.saturating_add(1).saturating_add(skip.sample(&mut rng));
        }
    }
    let mut nrng = rng_for(cond.seed, "fps/space-noise");
    let (bg, dark) = cond.noise(&mut nrng, &mut space)?;
    truth.background = bg;
    truth.dark = dark;
    Ok((train, TimeTagStream::from_records(Segment::Space, space), truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lab(tl: &ChannelTimeline, det: &DetectorSpec, bg: f64, clock: &ClockModel) -> PassConditions<'static> {
        // leak the small fixtures so the conditions can be returned
        PassConditions {
            timeline: Box::leak(Box::new(tl.clone())),
            detectors: Box::leak(Box::new(*det)),
            background_cps: bg,
            clock: Box::leak(Box::new(*clock)),
            seed: 11,
        }
    }

    fn small_eps() -> EpsSpec {
        EpsSpec {
            pair_rate_pps: 2e5,
            coupling_efficiency: 0.5,
            visibility: 1.0,
            ..Default::default()
        }
    }

    fn quiet() -> DetectorSpec {
        DetectorSpec {
            dark_cps: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn eps_rates_and_determinism() {
        let tl = ChannelTimeline::constant(2.0, 12.0, 0.1, 1e-3).unwrap();
        let det = DetectorSpec::default();
        let clock = ClockModel::default();
        let c = lab(&tl, &det, 1000.0, &clock);
        let (g, s, truth) = generate_eps_pass(&small_eps(), &MeasurementSettings::default(), &c).unwrap();
        g.validate().unwrap();
        s.validate().unwrap();
        let n = 1e5 * 10.0;
        assert!((g.len() as f64 - n).abs() < 5.0 * n.sqrt());
        let twins = 1e5 * 0.5 * 0.1 * 10.0;
        assert!((truth.delivered_twins as f64 - twins).abs() < 5.0 * twins.sqrt());
        let dark = 2000.0 * 10.0;
        assert!((truth.dark as f64 - dark).abs() < 5.0 * dark.sqrt());
        assert_eq!(
            s.len() as u64,
            truth.delivered_twins + truth.uplink_only + truth.background + truth.dark
        );
        let (g2, s2, _) = generate_eps_pass(&small_eps(), &MeasurementSettings::default(), &c).unwrap();
        assert_eq!(g, g2);
        assert_eq!(s, s2);
    }

    #[test]
    fn zero_transmittance_leaves_only_noise() {
        let tl = ChannelTimeline::constant(2.0, 4.0, 0.0, 0.0).unwrap();
        let det = DetectorSpec::default();
        let c = lab(&tl, &det, 500.0, &ClockModel::default());
        let (_, s, truth) = generate_eps_pass(&small_eps(), &MeasurementSettings::default(), &c).unwrap();
        assert_eq!(truth.delivered_twins + truth.uplink_only, 0);
        assert_eq!(s.len() as u64, truth.background + truth.dark);
    }

    #[test]
    fn perfect_correlation_at_equal_angles() {
        let tl = ChannelTimeline::constant(2.0, 4.0, 1.0, 0.0).unwrap();
        let det = quiet();
        let clock = ClockModel {
            jitter_sigma_s: 0.0,
            ..Default::default()
        };
        let c = lab(&tl, &det, 0.0, &clock);
        let eps = EpsSpec {
            pair_rate_pps: 2e4,
            coupling_efficiency: 1.0,
            ..small_eps()
        };
        let (g, s, _) = generate_eps_pass(&eps, &MeasurementSettings::bb84(), &c).unwrap();
        // every ground event has its twin at the identical time
        assert_eq!(g.len(), s.len());
        for i in 0..g.len() {
            assert_eq!(g.times_ps[i], s.times_ps[i]);
            if g.channels[i] >> 1 == s.channels[i] >> 1 {
                assert_eq!(g.channels[i], s.channels[i]);
            }
        }
    }

    #[test]
    fn causality_and_clock_mapping() {
        let tl = ChannelTimeline::constant(5.0, 6.0, 0.5, 2e-3).unwrap();
        let det = quiet();
        let clock = ClockModel {
            offset_s: -0.25,
            drift: 1e-7,
            jitter_sigma_s: 0.0,
        };
        let c = lab(&tl, &det, 0.0, &clock);
        let eps = EpsSpec {
            coupling_efficiency: 1.0,
            ..small_eps()
        };
        let (g, s, _) = generate_eps_pass(&eps, &MeasurementSettings::default(), &c).unwrap();
        let gset: std::collections::HashSet<u64> = g.times_ps.iter().copied().collect();
        for &st in &s.times_ps {
            // invert the clock model; exact up to rounding
            let t = st as f64 * 1e-12;
            let ge = (t - 2e-3 + 0.25) / (1.0 + 1e-7);
            let k = (ge * 1e12).round() as u64;
            assert!((k.saturating_sub(1)..=k + 1).any(|x| gset.contains(&x)));
            assert!(t - (-0.25 + 1e-7 * ge) >= ge);
        }
    }

    #[test]
    fn fps_rates_and_noise_only() {
        let tl = ChannelTimeline::constant(1.0, 3.0, 1e-4, 1e-3).unwrap();
        let det = DetectorSpec::default();
        let c = lab(&tl, &det, 1000.0, &ClockModel::default());
        let fps = FpsSpec::default();
        let (train, s, truth) = generate_fps_pass(&fps, &c).unwrap();
        s.validate().unwrap();
        assert_eq!(train.n_pulses, 200_000_000);
        let expected = fps.rep_rate_hz * fps.detection_probability(1e-4) * 2.0;
        let got = truth.detected_pulses.len() as f64;
        assert!((got - expected).abs() < 5.0 * expected.sqrt(), "{got} vs {expected}");

        let dark = FpsSpec {
            mu_signal: 0.0,
            mu_decoy: 0.0,
            ..fps
        };
        let (_, s, truth) = generate_fps_pass(&dark, &c).unwrap();
        assert!(truth.detected_pulses.is_empty());
        assert_eq!(s.len() as u64, truth.background + truth.dark);
    }

    #[test]
    fn pulse_classes_follow_fractions() {
        let train = PulseTrain::new(&FpsSpec::default(), 3, 0.0, 1e-3);
        let n = train.n_pulses;
        let mut counts = [0u64; 3];
        let mut ones = 0;
        for k in 0..n {
            let (c, bit, _) = train.pulse(k);
            counts[c.index()] += 1;
            ones += bit as u64;
        }
        let nf = n as f64;
        for (i, f) in [0.5, 0.25, 0.25].iter().enumerate() {
            let sd = (nf * f * (1.0 - f)).sqrt();
            assert!((counts[i] as f64 - nf * f).abs() < 5.0 * sd);
        }
        assert!((ones as f64 - nf / 2.0).abs() < 5.0 * (nf / 4.0).sqrt());
    }
}
