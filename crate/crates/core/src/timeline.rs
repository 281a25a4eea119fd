//! Transmittance and light-time delay along a pass, as functions of ground
//! time in seconds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{synth_pass_with_radius, LinkWindow, PassProfile, SPEED_OF_LIGHT_KM_S};
use crate::link::{attenuation_db, LinkParams};

const DELAY_OVERSAMPLING: f64 = 20.0;

/// One-way light time, tabulated against ground time and interpolated with
/// a Catmull-Rom spline. An empty table means zero delay.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DelayModel {
    pub t_s: Vec<f64>,
    pub delay_s: Vec<f64>,
}

impl DelayModel {
    pub fn zero() -> Self {
        DelayModel::default()
    }

    pub fn constant(delay_s: f64) -> Self {
        DelayModel {
            t_s: vec![0.0],
            delay_s: vec![delay_s],
        }
    }

    /// Tabulates the pass geometry at a twentieth of its sampling step,
    /// where the spline error is well below a picosecond.
    pub fn from_pass(pass: &PassProfile) -> Result<Self> {
        let fine = synth_pass_with_radius(
            pass.max_elevation_deg,
            pass.altitude_km,
            pass.earth_radius_km,
            pass.sample_dt() / DELAY_OVERSAMPLING,
        )?;
        let shift = pass.samples[pass.peak_index()].t_s - fine.samples[fine.peak_index()].t_s;
        Ok(DelayModel {
            t_s: fine.samples.iter().map(|s| s.t_s + shift).collect(),
            delay_s: fine.samples.iter().map(|s| s.slant_range_km / SPEED_OF_LIGHT_KM_S).collect(),
        })
    }

    pub fn is_zero(&self) -> bool {
        self.delay_s.iter().all(|&d| d == 0.0)
    }

    pub fn at(&self, t: f64) -> f64 {
        spline(&self.t_s, &self.delay_s, t)
    }
}

fn locate(t_s: &[f64], t: f64) -> (usize, f64) {
    let n = t_s.len();
    let i = t_s.partition_point(|&x| x <= t).clamp(1, n - 1) - 1;
    let u = ((t - t_s[i]) / (t_s[i + 1] - t_s[i])).clamp(0.0, 1.0);
    (i, u)
}

fn spline(t_s: &[f64], y: &[f64], t: f64) -> f64 {
    match y.len() {
        0 => 0.0,
        1 => y[0],
        n => {
            let (i, u) = locate(t_s, t);
            let p1 = y[i];
            let p2 = y[i + 1];
            let p0 = if i > 0 { y[i - 1] } else { 2.0 * p1 - p2 };
            let p3 = if i + 2 < n { y[i + 2] } else { 2.0 * p2 - p1 };
            let u2 = u * u;
            let u3 = u2 * u;
            0.5 * (2.0 * p1 + (p2 - p0) * u + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u2 + (3.0 * p1 - p0 - 3.0 * p2 + p3) * u3)
        }
    }
}

fn linear(t_s: &[f64], y: &[f64], t: f64) -> f64 {
    match y.len() {
        0 => 0.0,
        1 => y[0],
        _ => {
            let (i, u) = locate(t_s, t);
            y[i] + u * (y[i + 1] - y[i])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelTimeline {
    /// Ground-time interval that carries the quantum link.
    pub t_start_s: f64,
    pub t_end_s: f64,
    pub t_s: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub delay: DelayModel,
}

impl ChannelTimeline {
    /// Fixed transmittance and delay, for lab-style runs.
    pub fn constant(t_start_s: f64, t_end_s: f64, transmittance: f64, delay_s: f64) -> Result<Self> {
        if !(t_end_s > t_start_s) {
            return Err(Error::Config(format!("empty interval [{t_start_s}, {t_end_s}]")));
        }
        if !(0.0..=1.0).contains(&transmittance) {
            return Err(Error::domain("transmittance", transmittance, "[0, 1]"));
        }
        Ok(ChannelTimeline {
            t_start_s,
            t_end_s,
            t_s: vec![t_start_s],
            transmittance: vec![transmittance],
            delay: DelayModel::constant(delay_s),
        })
    }

    /// Samples the link budget over a pass. The window's samples each stand
    /// for one sampling interval, so the link runs from half a step before
    /// the first to half a step after the last.
    pub fn from_pass(pass: &PassProfile, window: &LinkWindow, link: &LinkParams) -> Result<Self> {
        let half = 0.5 * pass.sample_dt();
        let mut t_s = Vec::with_capacity(pass.samples.len());
        let mut transmittance = Vec::with_capacity(pass.samples.len());
        for s in &pass.samples {
            let tr = if s.elevation_deg > 0.0 {
                attenuation_db(s.slant_range_km, s.elevation_deg, link)?.transmittance()
            } else {
                0.0
            };
            t_s.push(s.t_s);
            transmittance.push(tr);
        }
        Ok(ChannelTimeline {
            t_start_s: window.t_start_s - half,
            t_end_s: window.t_end_s + half,
            t_s,
            transmittance,
            delay: DelayModel::from_pass(pass)?,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.t_end_s - self.t_start_s
    }

    pub fn transmittance_at(&self, t: f64) -> f64 {
        linear(&self.t_s, &self.transmittance, t)
    }

    pub fn delay_at(&self, t: f64) -> f64 {
        self.delay.at(t)
    }

    /// Upper bound of the transmittance on the link interval.
    pub fn max_transmittance(&self) -> f64 {
        let ends = [self.transmittance_at(self.t_start_s), self.transmittance_at(self.t_end_s)];
        self.t_s
            .iter()
            .zip(&self.transmittance)
            .filter(|(&t, _)| t >= self.t_start_s && t <= self.t_end_s)
            .map(|(_, &v)| v)
            .chain(ends)
            .fold(0.0, f64::max)
    }

    /// Time average of `f(transmittance)` over the link interval.
    pub fn average<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        let n = 2000;
        let h = self.duration_s() / n as f64;
        (0..n)
            .map(|i| f(self.transmittance_at(self.t_start_s + (i as f64 + 0.5) * h)))
            .sum::<f64>()
            / n as f64
    }
}
