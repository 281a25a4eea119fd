//! Pass geometry for a circular low orbit over a ground station.
//!
//! The Earth is a sphere, the orbit is circular and the pass is generated
//! in the orbit plane's rotating frame (no Earth rotation). That is enough
//! to get elevation, slant range and off-nadir angle profiles; no ephemeris
//! propagation is attempted.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const ISS_ALTITUDE_KM: f64 = 400.0;
/// Earth gravitational parameter, km^3/s^2.
pub const GM_EARTH: f64 = 398_600.441_8;
pub const SPEED_OF_LIGHT_KM_S: f64 = 299_792.458;

/// Off-nadir limit when the pod is restricted to half its mechanical tilt.
pub const SAFETY_TILT_NADIR_DEG: f64 = 18.0;

// Tolerance for constraint comparisons, in degrees.
const ANGLE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundStation {
    pub name: String,
    pub altitude_m: f64,
    /// In-FOV background (sky and artificial light) seen by the receiver.
    pub background_cps: f64,
}

impl Default for GroundStation {
    fn default() -> Self {
        GroundStation {
            name: "OGS Tenerife".into(),
            altitude_m: 2393.0,
            background_cps: 1000.0,
        }
    }
}

impl GroundStation {
    pub fn validate(&self) -> Result<()> {
        if !(self.background_cps >= 0.0) {
            return Err(Error::domain("background_cps", self.background_cps, ">= 0"));
        }
        if !(self.altitude_m >= 0.0) {
            return Err(Error::domain("altitude_m", self.altitude_m, ">= 0"));
        }
        Ok(())
    }
}

fn check_elevation(elevation_deg: f64) -> Result<()> {
    if (0.0..=90.0).contains(&elevation_deg) {
        Ok(())
    } else {
        Err(Error::domain("elevation_deg", elevation_deg, "[0, 90]"))
    }
}

fn check_shell(h_km: f64, re_km: f64) -> Result<()> {
    if !(h_km >= 0.0) {
        return Err(Error::domain("altitude_km", h_km, ">= 0"));
    }
    if !(re_km > 0.0) {
        return Err(Error::domain("earth_radius_km", re_km, "> 0"));
    }
    Ok(())
}

/// Line-of-sight distance from the station to a spacecraft at altitude
/// `h_km`, seen at `elevation_deg`.
pub fn slant_range(elevation_deg: f64, h_km: f64, re_km: f64) -> Result<f64> {
    check_elevation(elevation_deg)?;
    check_shell(h_km, re_km)?;
    let s = elevation_deg.to_radians().sin();
    let r = (re_km * re_km * s * s + 2.0 * re_km * h_km + h_km * h_km).sqrt() - re_km * s;
    Ok(r.max(0.0))
}

/// Angle between the spacecraft nadir and its line of sight to the station.
pub fn nadir_angle(elevation_deg: f64, h_km: f64, re_km: f64) -> Result<f64> {
    check_elevation(elevation_deg)?;
    check_shell(h_km, re_km)?;
    if elevation_deg == 90.0 {
        return Ok(0.0);
    }
    let sin_nadir = re_km * elevation_deg.to_radians().cos() / (re_km + h_km);
    Ok(sin_nadir.clamp(0.0, 1.0).asin().to_degrees())
}

/// Inverse of [`nadir_angle`]: the elevation at which the station sits
/// `nadir_deg` off the spacecraft nadir.
pub fn elevation_at_nadir(nadir_deg: f64, h_km: f64, re_km: f64) -> Result<f64> {
    check_shell(h_km, re_km)?;
    let horizon = nadir_angle(0.0, h_km, re_km)?;
    if !(0.0..=horizon).contains(&nadir_deg) {
        return Err(Error::domain("nadir_deg", nadir_deg, "[0, horizon nadir angle]"));
    }
    let cos_el = nadir_deg.to_radians().sin() * (re_km + h_km) / re_km;
    Ok(cos_el.clamp(0.0, 1.0).acos().to_degrees())
}

/// Small-angle diameter of the receiver's field of view on the ground, in meters.
pub fn footprint_diameter(slant_range_km: f64, fov_rad: f64) -> f64 {
    slant_range_km * 1e3 * fov_rad
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PassSample {
    pub t_s: f64,
    pub elevation_deg: f64,
    pub slant_range_km: f64,
    pub nadir_angle_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassProfile {
    pub samples: Vec<PassSample>,
    pub max_elevation_deg: f64,
    pub altitude_km: f64,
    pub earth_radius_km: f64,
}

impl PassProfile {
    pub fn sample_dt(&self) -> f64 {
        match self.samples.as_slice() {
            [a, b, ..] => b.t_s - a.t_s,
            _ => 0.0,
        }
    }

    pub fn peak_index(&self) -> usize {
        self.samples
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.elevation_deg.total_cmp(&b.1.elevation_deg))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    /// Writes `t_s,elevation_deg,slant_range_km,nadir_angle_deg`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t_s,elevation_deg,slant_range_km,nadir_angle_deg")?;
        for s in &self.samples {
            writeln!(
                w,
                "{:.3},{:.6},{:.6},{:.6}",
                s.t_s, s.elevation_deg, s.slant_range_km, s.nadir_angle_deg
            )?;
        }
        Ok(())
    }
}

/// Symmetric overhead pass peaking at `max_elevation_deg`, sampled every
/// `sample_dt` seconds from horizon to horizon. Sample times start at 0.
pub fn synth_pass(max_elevation_deg: f64, h_km: f64, sample_dt: f64) -> Result<PassProfile> {
    synth_pass_with_radius(max_elevation_deg, h_km, EARTH_RADIUS_KM, sample_dt)
}

pub fn synth_pass_with_radius(
    max_elevation_deg: f64,
    h_km: f64,
    re_km: f64,
    sample_dt: f64,
) -> Result<PassProfile> {
    if !(max_elevation_deg > 0.0 && max_elevation_deg <= 90.0) {
        return Err(Error::domain("max_elevation_deg", max_elevation_deg, "(0, 90]"));
    }
    if !(h_km > 0.0) {
        return Err(Error::domain("altitude_km", h_km, "> 0"));
    }
    check_shell(h_km, re_km)?;
    if !(sample_dt > 0.0) {
        return Err(Error::domain("sample_dt", sample_dt, "> 0"));
    }

    let a = re_km + h_km;
    let omega = (GM_EARTH / (a * a * a)).sqrt();
    let ratio = re_km / a;
    // Earth-central angle between station and sub-satellite point.
    let central = |el: f64| (ratio * el.cos()).acos() - el;
    let cross_track = central(max_elevation_deg.to_radians());
    let horizon = ratio.acos();
    let along_max = (horizon.cos() / cross_track.cos()).clamp(-1.0, 1.0).acos();
    let half = (along_max / omega / sample_dt).floor() as i64;

    let samples = (-half..=half)
        .map(|k| {
            let tau = k as f64 * sample_dt;
            let elevation_deg = if k == 0 {
                max_elevation_deg
            } else {
                let gamma = (cross_track.cos() * (omega * tau).cos()).clamp(-1.0, 1.0).acos();
                (gamma.cos() - ratio)
                    .atan2(gamma.sin())
                    .to_degrees()
                    .clamp(0.0, 90.0)
            };
            Ok(PassSample {
                t_s: (k + half) as f64 * sample_dt,
                elevation_deg,
                slant_range_km: slant_range(elevation_deg, h_km, re_km)?,
                nadir_angle_deg: nadir_angle(elevation_deg, h_km, re_km)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(PassProfile {
        samples,
        max_elevation_deg,
        altitude_km: h_km,
        earth_radius_km: re_km,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkWindowConstraints {
    pub min_elevation_deg: f64,
    pub max_nadir_angle_deg: f64,
    /// Tighter off-nadir bound keeping photons near normal incidence on the
    /// window glass; only enforced when `apply_window_incidence` is set.
    pub max_window_incidence_deg: f64,
    pub apply_window_incidence: bool,
    pub max_duration_s: f64,
}

impl Default for LinkWindowConstraints {
    fn default() -> Self {
        LinkWindowConstraints {
            min_elevation_deg: 51.0,
            max_nadir_angle_deg: 36.0,
            max_window_incidence_deg: 10.0,
            apply_window_incidence: false,
            max_duration_s: 70.0,
        }
    }
}

impl LinkWindowConstraints {
    /// Defaults plus the window-incidence limit.
    pub fn worst_case() -> Self {
        LinkWindowConstraints {
            apply_window_incidence: true,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("min_elevation_deg", self.min_elevation_deg),
            ("max_nadir_angle_deg", self.max_nadir_angle_deg),
            ("max_window_incidence_deg", self.max_window_incidence_deg),
            ("max_duration_s", self.max_duration_s),
        ] {
            if !(v > 0.0) {
                return Err(Error::domain(name, v, "> 0"));
            }
        }
        if self.min_elevation_deg >= 90.0 {
            return Err(Error::domain("min_elevation_deg", self.min_elevation_deg, "< 90"));
        }
        Ok(())
    }

    pub fn effective_nadir_limit(&self) -> f64 {
        if self.apply_window_incidence {
            self.max_nadir_angle_deg.min(self.max_window_incidence_deg)
        } else {
            self.max_nadir_angle_deg
        }
    }

    pub fn admits(&self, s: &PassSample) -> bool {
        s.elevation_deg >= self.min_elevation_deg - ANGLE_EPS
            && s.nadir_angle_deg <= self.effective_nadir_limit() + ANGLE_EPS
    }

    fn failing(&self, s: &PassSample) -> WindowEdge {
        if s.elevation_deg < self.min_elevation_deg - ANGLE_EPS {
            WindowEdge::MinElevation
        } else if self.apply_window_incidence
            && self.max_window_incidence_deg < self.max_nadir_angle_deg
        {
            WindowEdge::WindowIncidence
        } else {
            WindowEdge::MaxNadir
        }
    }
}

/// What bounds one edge of a link window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowEdge {
    MinElevation,
    MaxNadir,
    WindowIncidence,
    MaxDuration,
    PassEdge,
}

/// Contiguous run of pass samples usable for the quantum link. Each sample
/// stands for one sampling interval, so a single-sample window lasts one
/// `dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkWindow {
    pub t_start_s: f64,
    pub t_end_s: f64,
    pub duration_s: f64,
    pub start_index: usize,
    pub end_index: usize,
    pub start_edge: WindowEdge,
    pub end_edge: WindowEdge,
}

impl LinkWindow {
    pub fn samples<'a>(&self, pass: &'a PassProfile) -> &'a [PassSample] {
        &pass.samples[self.start_index..=self.end_index]
    }
}

/// Longest contiguous interval satisfying every constraint, cut down to
/// `max_duration_s` around the elevation peak. `None` if no sample qualifies.
pub fn usable_window(pass: &PassProfile, c: &LinkWindowConstraints) -> Option<LinkWindow> {
    let n = pass.samples.len();
    let dt = pass.sample_dt();
    let ok: Vec<bool> = pass.samples.iter().map(|s| c.admits(s)).collect();

    let mut best: Option<(usize, usize)> = None;
    let mut i = 0;
    while i < n {
        if !ok[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i + 1 < n && ok[i + 1] {
            i += 1;
        }
        if best.map_or(true, |(a, b)| i - start > b - a) {
            best = Some((start, i));
        }
        i += 1;
    }
    let (mut lo, mut hi) = best?;

    let run_peak = (lo..=hi)
        .max_by(|&a, &b| {
            pass.samples[a]
                .elevation_deg
                .total_cmp(&pass.samples[b].elevation_deg)
        })
        .unwrap_or(lo);

    let mut start_edge = if lo == 0 {
        WindowEdge::PassEdge
    } else {
        c.failing(&pass.samples[lo - 1])
    };
    let mut end_edge = if hi + 1 == n {
        WindowEdge::PassEdge
    } else {
        c.failing(&pass.samples[hi + 1])
    };

    let max_samples = if dt > 0.0 {
        ((c.max_duration_s / dt) + 1e-9).floor().max(1.0) as usize
    } else {
        1
    };
    if hi - lo + 1 > max_samples {
        // Center the kept interval on the peak, sliding it inside the run.
        let half = (max_samples - 1) / 2;
        let mut a = run_peak.saturating_sub(half).max(lo);
        if a + max_samples - 1 > hi {
            a = hi + 1 - max_samples;
        }
        if a > lo {
            start_edge = WindowEdge::MaxDuration;
        }
        if a + max_samples - 1 < hi {
            end_edge = WindowEdge::MaxDuration;
        }
        lo = a;
        hi = a + max_samples - 1;
    }

    let t_start_s = pass.samples[lo].t_s;
    let t_end_s = pass.samples[hi].t_s;
    Some(LinkWindow {
        t_start_s,
        t_end_s,
        duration_s: (hi - lo + 1) as f64 * dt,
        start_index: lo,
        end_index: hi,
        start_edge,
        end_edge,
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;

    const RE: f64 = EARTH_RADIUS_KM;

    #[test]
    fn slant_range_anchors() {
        assert_abs_diff_eq!(slant_range(90.0, 400.0, RE).unwrap(), 400.0, epsilon = 1e-9);
        assert_eq!(slant_range(0.0, 0.0, RE).unwrap(), 0.0);
        let r51 = slant_range(51.0, 400.0, RE).unwrap();
        assert_abs_diff_eq!(r51, 505.097_696, epsilon = 1e-5);
    }

    #[test]
    fn slant_range_rejects_bad_elevation() {
        assert!(matches!(slant_range(-1.0, 400.0, RE), Err(Error::Domain { .. })));
        assert!(slant_range(90.5, 400.0, RE).is_err());
        assert!(slant_range(f64::NAN, 400.0, RE).is_err());
    }

    #[test]
    fn nadir_anchors() {
        assert_eq!(nadir_angle(90.0, 400.0, RE).unwrap(), 0.0);
        assert_abs_diff_eq!(nadir_angle(51.0, 400.0, RE).unwrap(), 36.309_229, epsilon = 1e-5);
        assert_abs_diff_eq!(nadir_angle(0.0, 400.0, RE).unwrap(), 70.207_403, epsilon = 1e-5);
    }

    #[test]
    fn nadir_36_elevation_between_50_and_52() {
        let el = elevation_at_nadir(36.0, 400.0, RE).unwrap();
        assert!((50.0..=52.0).contains(&el), "{el}");
        assert_abs_diff_eq!(nadir_angle(el, 400.0, RE).unwrap(), 36.0, epsilon = 1e-9);
    }

    #[test]
    fn footprint_values() {
        assert_abs_diff_eq!(footprint_diameter(400.0, 1e-3), 400.0, epsilon = 1e-9);
        let r51 = slant_range(51.0, 400.0, RE).unwrap();
        assert!((footprint_diameter(r51, 1e-3) - 500.0).abs() <= 10.0);
        assert_eq!(footprint_diameter(123.0, 0.0), 0.0);
    }

    #[test]
    fn zenith_pass_peak() {
        let p = synth_pass(90.0, 400.0, 0.1).unwrap();
        let peak = p.samples[p.peak_index()];
        assert_abs_diff_eq!(peak.slant_range_km, 400.0, epsilon = 1e-9);
        assert_eq!(peak.nadir_angle_deg, 0.0);
        assert!(p.samples.windows(2).all(|w| w[1].t_s > w[0].t_s));
        for s in &p.samples {
            assert_eq!(s.nadir_angle_deg, nadir_angle(s.elevation_deg, 400.0, RE).unwrap());
            assert!((0.0..=90.0).contains(&s.elevation_deg));
            assert!(s.nadir_angle_deg < 90.0);
        }
    }

    #[test]
    fn elevation_unimodal() {
        let p = synth_pass(70.0, 400.0, 0.5).unwrap();
        let k = p.peak_index();
        assert_eq!(p.samples[k].elevation_deg, 70.0);
        assert!(p.samples[..=k].windows(2).all(|w| w[1].elevation_deg >= w[0].elevation_deg));
        assert!(p.samples[k..].windows(2).all(|w| w[1].elevation_deg <= w[0].elevation_deg));
    }

    #[test]
    fn zenith_window_with_defaults() {
        let p = synth_pass(90.0, 400.0, 0.1).unwrap();
        let w = usable_window(&p, &LinkWindowConstraints::default()).unwrap();
        assert!((20.0..=70.0).contains(&w.duration_s), "{}", w.duration_s);
        // the 36 deg nadir cone alone would give ~83 s
        assert_eq!(w.start_edge, WindowEdge::MaxDuration);
        for s in w.samples(&p) {
            assert!(LinkWindowConstraints::default().admits(s));
        }
    }

    #[test]
    fn window_incidence_shrinks_window() {
        let p = synth_pass(90.0, 400.0, 0.1).unwrap();
        let wide = usable_window(&p, &LinkWindowConstraints::default()).unwrap();
        let narrow = usable_window(&p, &LinkWindowConstraints::worst_case()).unwrap();
        assert!(narrow.duration_s < wide.duration_s);
        assert!((15.0..=25.0).contains(&narrow.duration_s), "{}", narrow.duration_s);
        assert_eq!(narrow.start_edge, WindowEdge::WindowIncidence);
    }

    #[test]
    fn low_pass_has_no_window() {
        let p = synth_pass(45.0, 400.0, 0.1).unwrap();
        assert!(usable_window(&p, &LinkWindowConstraints::default()).is_none());
    }

    #[test]
    fn pass_at_min_elevation_collapses_to_peak() {
        let p = synth_pass(51.0, 400.0, 0.1).unwrap();
        // At 51 deg the station is 36.3 deg off nadir, so the nadir cone
        // must be opened to isolate the elevation boundary.
        let c = LinkWindowConstraints {
            max_nadir_angle_deg: 40.0,
            ..Default::default()
        };
        let w = usable_window(&p, &c).unwrap();
        assert_eq!(w.start_index, p.peak_index());
        assert_eq!(w.end_index, p.peak_index());
        assert_abs_diff_eq!(w.duration_s, 0.1, epsilon = 1e-12);
        assert!(usable_window(&p, &LinkWindowConstraints::default()).is_none());
    }

    #[test]
    fn pass_csv_header() {
        let p = synth_pass(60.0, 400.0, 10.0).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t_s,elevation_deg,slant_range_km,nadir_angle_deg\n"));
        assert_eq!(text.lines().count(), p.samples.len() + 1);
    }

    proptest! {
        #[test]
        fn slant_range_decreasing(a in 0.0f64..89.9, d in 0.01f64..10.0, h in 200.0f64..2000.0) {
            let b = (a + d).min(90.0);
            prop_assert!(slant_range(b, h, RE).unwrap() < slant_range(a, h, RE).unwrap());
            prop_assert!(nadir_angle(b, h, RE).unwrap() < nadir_angle(a, h, RE).unwrap());
        }

        #[test]
        fn window_never_violates(max_el in 52.0f64..90.0, min_el in 30.0f64..80.0, nadir in 5.0f64..50.0) {
            let p = synth_pass(max_el, 400.0, 0.5).unwrap();
            let c = LinkWindowConstraints { min_elevation_deg: min_el, max_nadir_angle_deg: nadir, ..Default::default() };
            if let Some(w) = usable_window(&p, &c) {
                prop_assert!(w.duration_s > 0.0 && w.duration_s <= c.max_duration_s + 1e-9);
                for s in w.samples(&p) {
                    prop_assert!(c.admits(s));
                }
            }
        }
    }
}
