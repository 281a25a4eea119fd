//! Clock recovery for the faint-pulse source.
//!
//! A periodic pulse train only fixes the clock offset modulo the pulse
//! period. The sub-period phase comes from folding light-time-corrected
//! detection times onto the period, segment by segment so that clock drift
//! can be followed. The whole number of periods comes from the transmitted
//! bit pattern: within a search range around a prior offset, the shift that
//! maximizes bit agreement in matching bases wins.

use serde::{Deserialize, Serialize};

use crate::coincidence::{global_z, ClockSolution, SIGNIFICANCE_THRESHOLD};
use crate::error::{Error, Result};
use crate::mc::PulseTrain;
use crate::timeline::DelayModel;
use crate::timetag::{basis_of, outcome_of, TimeTagStream};

const PS: f64 = 1e12;
const PHASE_BINS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FpsSyncParams {
    /// Offset known beforehand to within `search_slots` pulse periods.
    pub prior_offset_s: f64,
    pub search_slots: u64,
    /// Detection gate centred on each expected arrival.
    pub gate_s: f64,
    /// Largest clock drift the phase tracking has to follow.
    pub drift_bound: f64,
    /// Gated detections used for the slot search.
    pub search_events: usize,
}

impl Default for FpsSyncParams {
    fn default() -> Self {
        FpsSyncParams {
            prior_offset_s: 0.0,
            search_slots: 1000,
            gate_s: 1e-9,
            drift_bound: 1e-7,
            search_events: 4000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatedDetection {
    pub space_index: usize,
    pub pulse: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpsSync {
    pub clock: ClockSolution,
    pub slot_shift: i64,
    /// Bit-agreement significance of the chosen shift, corrected for the
    /// number of shifts tried.
    pub significance: f64,
    pub phase_segments: usize,
    pub detections: Vec<GatedDetection>,
    pub outside_gate: usize,
}

fn wrap(x: f64, p: f64) -> f64 {
    x - p * (x / p).round()
}

fn fit(knots: &[(f64, f64, f64)]) -> (f64, f64, f64) {
    let sw: f64 = knots.iter().map(|k| k.2).sum();
    let t_ref = knots.iter().map(|k| k.2 * k.0).sum::<f64>() / sw;
    let y_ref = knots.iter().map(|k| k.2 * k.1).sum::<f64>() / sw;
    let stt: f64 = knots.iter().map(|k| k.2 * (k.0 - t_ref).powi(2)).sum();
    let sty: f64 = knots.iter().map(|k| k.2 * (k.0 - t_ref) * (k.1 - y_ref)).sum();
    (y_ref, t_ref, if stt > 0.0 { sty / stt } else { 0.0 })
}

pub fn fps_sync(space: &TimeTagStream, train: &PulseTrain, delay: &DelayModel, p: &FpsSyncParams) -> Result<FpsSync> {
    if space.is_empty() || train.n_pulses == 0 {
        return Err(Error::NoEvents);
    }
    if !(p.gate_s > 0.0 && p.gate_s <= train.period_s) {
        return Err(Error::domain("gate_s", p.gate_s, "(0, pulse period]"));
    }
    let period = train.period_s;
    let prior = ClockSolution::fixed(p.prior_offset_s, 0.0, 0.0);
    let g: Vec<f64> = space.times_ps.iter().map(|&s| prior.ground_time(s as f64 / PS, delay)).collect();

    // phase per segment
    let seg = (0.25 * period / p.drift_bound.max(1e-15)).clamp(5e-3, 1.0);
    let w = (0.5 * p.gate_s).min(0.5 * period);
    let mut knots: Vec<(f64, f64, f64)> = Vec::new();
    let mut i = 0;
    while i < g.len() {
        let end = g.partition_point(|&x| x < g[i] + seg).max(i + 1);
        let chunk = &g[i..end];
        i = end;
        if chunk.len() < 10 {
            continue;
        }
        let mut hist = [0u32; PHASE_BINS];
        for &x in chunk {
            let ph = (x - train.t_start_s).rem_euclid(period);
            hist[((ph / period * PHASE_BINS as f64) as usize).min(PHASE_BINS - 1)] += 1;
        }
        let best = (0..PHASE_BINS)
            .max_by_key(|&b| hist[(b + PHASE_BINS - 1) % PHASE_BINS] + hist[b] + hist[(b + 1) % PHASE_BINS])
            .unwrap();
        let phi0 = (best as f64 + 0.5) * period / PHASE_BINS as f64;
        let (mut n, mut s1, mut tg) = (0.0, 0.0, 0.0);
        for &x in chunk {
            let r = wrap(x - train.t_start_s - phi0, period);
            if r.abs() <= w {
                n += 1.0;
                s1 += r;
                tg += x;
            }
        }
        let floor = chunk.len() as f64 * 2.0 * w / period;
        let excess = n - floor;
        if excess < 3.0 || excess < 5.0 * floor.sqrt() {
            continue;
        }
        knots.push((tg / n, phi0 + s1 / excess, excess));
    }
    if knots.is_empty() {
        return Err(Error::NoCorrelation { significance: 0.0 });
    }
    // Unwrap against a line through the recent knots; a segment whose
    // peak is off that line by more than the gate is a noise peak.
    let mut kept: Vec<(f64, f64, f64)> = Vec::with_capacity(knots.len());
    for &(t, phi, wgt) in &knots {
        let pred = match kept.len() {
            0 => phi,
            1 => kept[0].1,
            n => {
                let (y, t0, d) = fit(&kept[n.saturating_sub(50)..]);
                y + d * (t - t0)
            }
        };
        let r = wrap(phi - pred, period);
        if r.abs() <= p.gate_s {
            kept.push((t, pred + r, wgt));
        } else if kept.len() < 3 {
            kept.clear();
            kept.push((t, phi, wgt));
        }
    }
    let knots = kept;
    let (phi_ref, t_ref, drift) = fit(&knots);
    let phase = |t: f64| phi_ref + drift * (t - t_ref);

    // gate and slot index relative to the prior
    let mut gated: Vec<(usize, i64)> = Vec::new();
    for (idx, &x) in g.iter().enumerate() {
        let v = (x - train.t_start_s - phase(x)) / period;
        let j = v.round();
        if ((v - j) * period).abs() <= 0.5 * p.gate_s {
            gated.push((idx, j as i64));
        }
    }
    let outside_gate = g.len() - gated.len();

    let m_max = p.search_slots as i64;
    let sample = &gated[..gated.len().min(p.search_events)];
    let n_pulses = train.n_pulses as i64;
    let mut best = (i64::MIN, 0i64, 0u64);
    for m in -m_max..=m_max {
        let (mut score, mut used) = (0i64, 0u64);
        for &(idx, j) in sample {
            let k = j - m;
            if k < 0 || k >= n_pulses {
                continue;
            }
            let (_, bit, basis) = train.pulse(k as u64);
            let ch = space.channels[idx];
            if basis_of(ch) == basis {
                used += 1;
                score += if outcome_of(ch) == bit { 1 } else { -1 };
            }
        }
        if score > best.0 {
            best = (score, m, used);
        }
    }
    let (score, m, used) = best;
    let local = if used > 0 { score as f64 / (used as f64).sqrt() } else { 0.0 };
    let significance = global_z(local, (2 * m_max + 1) as f64);
    if significance < SIGNIFICANCE_THRESHOLD {
        return Err(Error::NoCorrelation { significance });
    }

    let detections = gated
        .iter()
        .filter_map(|&(idx, j)| {
            let k = j - m;
            (0..n_pulses).contains(&k).then_some(GatedDetection {
                space_index: idx,
                pulse: k as u64,
            })
        })
        .collect();
    Ok(FpsSync {
        clock: ClockSolution::fixed(p.prior_offset_s + m as f64 * period + phi_ref, t_ref, drift),
        slot_shift: m,
        significance,
        phase_segments: knots.len(),
        detections,
        outside_gate,
    })
}
