//! Clock recovery and coincidence extraction between ground and space
//! time-tag streams.
//!
//! Times are compared in the ground frame after light-time compensation:
//! a ground record at `g` is expected on board at `g + delay(g) + o(g)`,
//! where `o(g) = offset + drift * (g - t_ref)` is the clock solution.
//!
//! Acquisition histograms `s - (g + delay(g))` over a wide span with
//! coarse bins, via FFT correlation of binned occupancies or by direct
//! enumeration; both give identical counts. Peak significance is the
//! Poisson tail of the best bin (or adjacent bin pair) against the exposure
//! floor, corrected for the number of lags searched.

use std::collections::HashSet;
use std::f64::consts::SQRT_2;
use std::io::Write;

use realfft::num_complex::Complex;
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc_inv;
use statrs::function::gamma::gamma_lr;

use crate::error::{Error, Result};
use crate::timeline::DelayModel;
use crate::timetag::TimeTagStream;

pub const SIGNIFICANCE_THRESHOLD: f64 = 6.0;
/// Sideband window centres for the accidental estimate, seconds.
pub const SIDEBAND_OFFSETS_S: [f64; 10] = [-15e-6, -12.5e-6, -10e-6, -7.5e-6, -5e-6, 5e-6, 7.5e-6, 10e-6, 12.5e-6, 15e-6];

const PS: f64 = 1e12;
// Above this many expected pair visits the FFT path is used.
/// Bin width of the coarse peak search inside `refine_in_range`.
const PEAK_SEARCH_BIN_S: f64 = 1e-9;
const DIRECT_LIMIT: f64 = 1.0e9;
// FFT length cap for the block size choice; longer only if the lag range
// alone needs it.
const FFT_LEN_CAP: usize = 1 << 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetKnot {
    pub t_s: f64,
    pub offset_s: f64,
    pub sigma_s: f64,
    pub excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClockSolution {
    /// Offset at `ref_time_s` (ground time).
    pub offset_s: f64,
    pub ref_time_s: f64,
    pub drift: f64,
    pub knots: Vec<OffsetKnot>,
    pub residual_rms_s: f64,
}

impl ClockSolution {
    pub fn fixed(offset_s: f64, ref_time_s: f64, drift: f64) -> Self {
        ClockSolution {
            offset_s,
            ref_time_s,
            drift,
            knots: Vec::new(),
            residual_rms_s: 0.0,
        }
    }

    pub fn offset_at(&self, t_s: f64) -> f64 {
        self.offset_s + self.drift * (t_s - self.ref_time_s)
    }

    /// Offset at ground time zero, the convention of the clock model.
    pub fn offset_at_epoch(&self) -> f64 {
        self.offset_at(0.0)
    }

    /// Expected on-board time of a ground event, seconds.
    pub fn space_time(&self, g_s: f64, delay: &DelayModel) -> f64 {
        g_s + delay.at(g_s) + self.offset_at(g_s)
    }

    /// Ground emission time whose photon would be tagged on board at `s_s`.
    pub fn ground_time(&self, s_s: f64, delay: &DelayModel) -> f64 {
        let k = self.offset_s - self.drift * self.ref_time_s;
        let mut g = (s_s - k - delay.at(s_s)) / (1.0 + self.drift);
        for _ in 0..3 {
            g = (s_s - k - delay.at(g)) / (1.0 + self.drift);
        }
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XcorrMethod {
    Auto,
    Direct,
    Fft,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XcorrParams {
    /// Lags scanned: `center_s +- span_s`.
    pub span_s: f64,
    pub center_s: f64,
    pub bin_s: f64,
    /// Only space records in `[lo, hi)` picoseconds take part.
    pub space_range_ps: Option<(u64, u64)>,
    pub method: XcorrMethod,
}

impl Default for XcorrParams {
    fn default() -> Self {
        XcorrParams {
            span_s: 1.0,
            center_s: 0.0,
            bin_s: 100e-9,
            space_range_ps: None,
            method: XcorrMethod::Auto,
        }
    }
}

/// Lag histogram. Bin `i` collects pairs whose binned times differ by
/// `i - k`, i.e. lags within one bin of `center + (i - k) * bin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationHistogram {
    pub bin_width_s: f64,
    pub center_s: f64,
    pub half_bins: i64,
    pub counts: Vec<u32>,
    pub expected: Vec<f32>,
    pub peak_bin: i64,
    pub peak_counts: u64,
    /// Best lag estimate, seconds.
    pub peak_offset_s: f64,
    pub floor_mean: f64,
    pub floor_sigma: f64,
    /// Gaussian-equivalent significance of the best bin or bin pair.
    pub local_significance: f64,
    /// The same after correcting for the number of lags searched.
    pub significance: f64,
    /// Mean ground time of the space records used, seconds.
    pub ref_time_s: f64,
    pub method: XcorrMethod,
}

impl CorrelationHistogram {
    pub fn detected(&self) -> bool {
        self.significance >= SIGNIFICANCE_THRESHOLD
    }

    pub fn lag_s(&self, bin: i64) -> f64 {
        self.center_s + bin as f64 * self.bin_width_s
    }

    pub fn count(&self, bin: i64) -> u32 {
        self.counts[(bin + self.half_bins) as usize]
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "lag_s,count,expected")?;
        for (i, (&c, &e)) in self.counts.iter().zip(&self.expected).enumerate() {
            writeln!(w, "{:.12e},{},{:.4}", self.lag_s(i as i64 - self.half_bins), c, e)?;
        }
        Ok(())
    }
}

/// Upper-tail probability `P(X >= k)` as a Gaussian-equivalent z.
pub fn poisson_excess_z(k: f64, mu: f64) -> f64 {
    if mu <= 0.0 {
        return if k > 0.0 { f64::INFINITY } else { 0.0 };
    }
    if k <= mu {
        return (k - mu) / mu.sqrt();
    }
    let p = gamma_lr(k, mu);
    if p > 1e-300 {
        z_from_upper_tail(p)
    } else {
        (k - mu) / mu.sqrt()
    }
}

fn z_from_upper_tail(p: f64) -> f64 {
    if p >= 1.0 {
        return f64::NEG_INFINITY;
    }
    SQRT_2 * erfc_inv(2.0 * p)
}

/// Look-elsewhere correction of a local z over `trials` independent tries.
pub fn global_z(local_z: f64, trials: f64) -> f64 {
    if !local_z.is_finite() || trials <= 1.0 {
        return local_z;
    }
    let p = 0.5 * statrs::function::erf::erfc(local_z / SQRT_2);
    if p > 1e-300 {
        let pg = -(trials * (-p).ln_1p()).exp_m1();
        z_from_upper_tail(pg.min(1.0))
    } else {
        (local_z * local_z - 2.0 * trials.ln()).max(0.0).sqrt()
    }
}

fn smooth_size(min: usize) -> usize {
    let mut n = min.max(2);
    loop {
        if n % 2 == 0 {
            let mut m = n;
            for p in [2, 3, 5, 7] {
                while m % p == 0 {
                    m /= p;
                }
            }
            if m == 1 {
                return n;
            }
        }
        n += 1;
    }
}

/// Ground times shifted by the light time, evaluated sequentially.
struct DelayCursor<'a> {
    m: &'a DelayModel,
}

impl DelayCursor<'_> {
    fn shifted_ps(&self, g_ps: u64) -> f64 {
        let g = g_ps as f64;
        g + self.m.at(g / PS) * PS
    }
}

fn floor_div(a: f64, w: f64) -> i64 {
    (a / w).floor() as i64
}

/// Cross-correlates the streams over `center +- span`.
pub fn xcorr_offset(
    ground: &TimeTagStream,
    space: &TimeTagStream,
    delay: &DelayModel,
    p: &XcorrParams,
) -> Result<CorrelationHistogram> {
    if !(p.bin_s > 0.0 && p.span_s > 0.0) {
        return Err(Error::Config("xcorr needs positive bin and span".into()));
    }
    if ground.is_empty() || space.is_empty() {
        return Err(Error::NoEvents);
    }
    let range = match p.space_range_ps {
        Some((lo, hi)) => space.range(lo, hi),
        None => 0..space.len(),
    };
    let s_times = &space.times_ps[range];
    if s_times.is_empty() {
        return Err(Error::NoEvents);
    }
    let w = p.bin_s * PS;
    let c = p.center_s * PS;
    let k = (p.span_s / p.bin_s).ceil() as i64;
    let cur = DelayCursor { m: delay };

    let ys: Vec<i64> = s_times.iter().map(|&s| floor_div(s as f64 - c, w)).collect();
    let (y_lo, y_hi) = (ys[0], ys[ys.len() - 1]);
    // ground records that can land within the lag range
    let g_first = cur.shifted_ps(ground.times_ps[0]);
    let g_last = cur.shifted_ps(*ground.times_ps.last().unwrap());
    let x_cov = (floor_div(g_first, w), floor_div(g_last, w) + 1);
    let lo_ps = ((y_lo - k - 2) as f64 * w - delay_bound(delay) * PS).max(0.0) as u64;
    let hi_ps = (((y_hi + k + 2) as f64 * w) + delay_bound(delay) * PS).max(0.0) as u64;
    let g_idx = ground.range(lo_ps, hi_ps.saturating_add(1));
    let xs: Vec<i64> = ground.times_ps[g_idx]
        .iter()
        .map(|&g| floor_div(cur.shifted_ps(g), w))
        .filter(|&x| x >= y_lo - k && x <= y_hi + k)
        .collect();
    let density = ground.len() as f64 / (x_cov.1 - x_cov.0).max(1) as f64;

    let n_lags = (2 * k + 1) as usize;
    let visits = ys.len() as f64 * density * n_lags as f64;
    let method = match p.method {
        XcorrMethod::Auto if visits <= DIRECT_LIMIT => XcorrMethod::Direct,
        XcorrMethod::Auto => XcorrMethod::Fft,
        m => m,
    };
    let counts = match method {
        XcorrMethod::Direct => direct_counts(&xs, &ys, k),
        _ => fft_counts(&xs, &ys, k),
    };

    // exposure: ground density times space records whose partner bin lies
    // inside the ground coverage
    let mut expected = vec![0f32; n_lags];
    let (mut a, mut b) = (0usize, 0usize);
    for (i, e) in expected.iter_mut().enumerate() {
        let l = i as i64 - k;
        let (lo, hi) = (x_cov.0 + l, x_cov.1 + l);
        while a < ys.len() && ys[a] < lo {
            a += 1;
        }
        while b < ys.len() && ys[b] < hi {
            b += 1;
        }
        *e = (density * (b.max(a) - a) as f64) as f32;
    }

    let screen = |r: f64, mu: f64, bar: f64| mu > 0.0 && (r - mu + 1.0) / mu.sqrt() > bar.max(4.0) - 1.0;
    let mut best = (f64::NEG_INFINITY, 0i64, false);
    for i in 0..n_lags {
        let mu = expected[i] as f64;
        let r = counts[i] as f64;
        if screen(r, mu, best.0) {
            let z = poisson_excess_z(r, mu);
            if z > best.0 {
                best = (z, i as i64, false);
            }
        }
        if i + 1 < n_lags {
            let (r2, mu2) = (r + counts[i + 1] as f64, mu + expected[i + 1] as f64);
            if screen(r2, mu2, best.0) {
                let z = poisson_excess_z(r2, mu2);
                if z > best.0 {
                    best = (z, i as i64, true);
                }
            }
        }
    }
    let (local, idx, pair) = if best.0.is_finite() || best.0 == f64::INFINITY {
        best
    } else {
        let i = (0..n_lags).max_by_key(|&i| counts[i]).unwrap_or(0);
        (poisson_excess_z(counts[i] as f64, expected[i] as f64), i as i64, false)
    };
    let peak_bin = if pair && counts[idx as usize + 1] > counts[idx as usize] { idx + 1 } else { idx };
    let peak_offset_s = if pair {
        p.center_s + (idx - k) as f64 * p.bin_s + 0.5 * p.bin_s
    } else {
        p.center_s + (idx - k) as f64 * p.bin_s
    };
    let floor_mean = expected.iter().map(|&e| e as f64).sum::<f64>() / n_lags as f64;
    let ref_time_s = s_times.iter().map(|&s| s as f64).sum::<f64>() / s_times.len() as f64 / PS - p.center_s;
    Ok(CorrelationHistogram {
        bin_width_s: p.bin_s,
        center_s: p.center_s,
        half_bins: k,
        peak_bin: peak_bin - k,
        peak_counts: counts[peak_bin as usize] as u64,
        counts,
        expected,
        peak_offset_s,
        floor_mean,
        floor_sigma: floor_mean.sqrt(),
        local_significance: local,
        significance: global_z(local, 2.0 * n_lags as f64),
        ref_time_s,
        method,
    })
}

fn delay_bound(delay: &DelayModel) -> f64 {
    delay.delay_s.iter().fold(0.0, |m: f64, &d| m.max(d.abs())) + 1e-6
}

fn direct_counts(xs: &[i64], ys: &[i64], k: i64) -> Vec<u32> {
    let mut counts = vec![0u32; (2 * k + 1) as usize];
    let mut start = 0usize;
    for &y in ys {
        while start < xs.len() && xs[start] < y - k {
            start += 1;
        }
        for &x in &xs[start..] {
            if x > y + k {
                break;
            }
            counts[(y - x + k) as usize] += 1;
        }
    }
    counts
}

/// Block-wise FFT correlation. For a space block of `B` bins starting at
/// `y0`, ground bins `[y0 - k, y0 + B + k)` are loaded; with an FFT length
/// of at least `B + 2k` the circular correlation has no wrap-around.
fn fft_counts(xs: &[i64], ys: &[i64], k: i64) -> Vec<u32> {
    let n_lags = (2 * k + 1) as usize;
    let mut counts = vec![0u32; n_lags];
    let extent = ys.last().map_or(1, |&y| y - ys[0] + 1);
    let room = FFT_LEN_CAP as i64 - 2 * k - 1;
    let block = extent.min(room).max(2 * k).max(1 << 12);
    let n = smooth_size((block + 2 * k + 1) as usize);
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut buf = fwd.make_input_vec();
    let mut yspec = fwd.make_output_vec();
    let mut xspec = fwd.make_output_vec();
    let mut scratch = fwd.make_scratch_vec();
    let mut iscratch = inv.make_scratch_vec();

    let mut yi = 0usize;
    while yi < ys.len() {
        let y0 = ys[yi];
        buf.iter_mut().for_each(|v| *v = 0.0);
        let mut yj = yi;
        while yj < ys.len() && ys[yj] < y0 + block {
            buf[(ys[yj] - y0) as usize] += 1.0;
            yj += 1;
        }
        fwd.process_with_scratch(&mut buf, &mut yspec, &mut scratch).expect("fft sizes match");

        buf.iter_mut().for_each(|v| *v = 0.0);
        let x_lo = y0 - k;
        let a = xs.partition_point(|&x| x < x_lo);
        let b = xs.partition_point(|&x| x < y0 + block + k);
        for &x in &xs[a..b] {
            buf[(x - x_lo) as usize] += 1.0;
        }
        fwd.process_with_scratch(&mut buf, &mut xspec, &mut scratch).expect("fft sizes match");

        for (xv, yv) in xspec.iter_mut().zip(&yspec) {
            *xv *= yv.conj();
        }
        let last = xspec.len() - 1;
        xspec[0] = Complex::new(xspec[0].re, 0.0);
        xspec[last] = Complex::new(xspec[last].re, 0.0);
        inv.process_with_scratch(&mut xspec, &mut buf, &mut iscratch).expect("fft sizes match");
        let scale = 1.0 / n as f64;
        // buf[m] = sum_j y[j] x[j + m]; lag l = k - m
        for (i, c) in counts.iter_mut().enumerate() {
            let m = (2 * k) as usize - i;
            *c += (buf[m] * scale).round().max(0.0) as u32;
        }
        yi = yj;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Refined {
    pub offset_s: f64,
    /// Ground time the offset refers to.
    pub t_ref_s: f64,
    /// Width of the coincidence peak.
    pub sigma_s: f64,
    pub excess: f64,
    pub floor: f64,
}

/// Offset residuals `s - (g + delay(g) + prior(g))` within `+-half_width_s`
/// for the space records in `range`, with the ground time of each pair.
fn collect_dts(
    ground: &TimeTagStream,
    space: &TimeTagStream,
    delay: &DelayModel,
    prior: &ClockSolution,
    range: std::ops::Range<usize>,
    half_width_s: f64,
) -> (Vec<(f64, f64)>, usize) {
    let g_first = ground.times_ps[0] as f64 / PS;
    let g_last = *ground.times_ps.last().unwrap() as f64 / PS;
    let margin = half_width_s * 1.001 + 1e-9;
    let mut out = Vec::new();
    let mut covered = 0usize;
    for &s in &space.times_ps[range] {
        let s_s = s as f64 / PS;
        let g_pred = prior.ground_time(s_s, delay);
        if g_pred - margin < g_first || g_pred + margin > g_last {
            continue;
        }
        covered += 1;
        let lo = ((g_pred - margin) * PS).max(0.0) as u64;
        let hi = ((g_pred + margin) * PS) as u64 + 1;
        for &g in &ground.times_ps[ground.range(lo, hi)] {
            let g_s = g as f64 / PS;
            let dt = (s as f64 - g as f64) / PS - delay.at(g_s) - prior.offset_at(g_s);
            if dt.abs() <= half_width_s {
                out.push((dt, g_s));
            }
        }
    }
    (out, covered)
}

fn ground_rate(ground: &TimeTagStream) -> f64 {
    match ground.span_ps() {
        Some((a, b)) if b > a => ground.len() as f64 / ((b - a) as f64 / PS),
        _ => 0.0,
    }
}

/// Floor-subtracted centroid of the coincidence peak, iterating on a
/// shrinking window around it. Differences are binned to `fine_bin_s`
/// before averaging.
pub fn refine_in_range(
    ground: &TimeTagStream,
    space: &TimeTagStream,
    delay: &DelayModel,
    prior: &ClockSolution,
    range: std::ops::Range<usize>,
    half_width_s: f64,
    fine_bin_s: f64,
) -> Result<Refined> {
    if ground.is_empty() || range.is_empty() {
        return Err(Error::NoEvents);
    }
    let (dts, covered) = collect_dts(ground, space, delay, prior, range, half_width_s);
    let binned: Vec<(f64, f64)> = dts
        .iter()
        .map(|&(dt, g)| ((dt / fine_bin_s).round() * fine_bin_s, g))
        .collect();
    let rho = ground_rate(ground) * covered as f64;
    let mut c = 0.0;
    let mut h = half_width_s;
    if h > 4.0 * PEAK_SEARCH_BIN_S {
        // At high ground rates the floor in a wide window swamps the
        // centroid, so locate the peak on a coarse histogram first.
        let b = PEAK_SEARCH_BIN_S;
        let nb = (2.0 * h / b).ceil() as usize + 1;
        let mut hist = vec![0u32; nb];
        for &(dt, _) in &dts {
            let k = ((dt + h) / b).floor();
            if k >= 0.0 && (k as usize) < nb {
                hist[k as usize] += 1;
            }
        }
        let bk = (1..nb - 1).max_by_key(|&k| (hist[k - 1] + hist[k] + hist[k + 1], std::cmp::Reverse(k))).unwrap_or(0);
        c = -h + (bk as f64 + 0.5) * b;
        h = 2.0 * b;
    }
    let mut out = None;
    for _ in 0..200 {
        let (mut n, mut s1, mut s2, mut tg) = (0.0, 0.0, 0.0, 0.0);
        for &(dt, g) in &binned {
            if (dt - c).abs() <= h {
                n += 1.0;
                s1 += dt - c;
                s2 += (dt - c) * (dt - c);
                tg += g;
            }
        }
        let floor = rho * 2.0 * h;
        let excess = n - floor;
        if excess < 3.0 || excess < 5.0 * floor.sqrt() {
            return Err(Error::PeakLost);
        }
        let shift = s1 / excess;
        let var = (s2 - floor * h * h / 3.0) / excess - shift * shift;
        let sigma = var.max(fine_bin_s * fine_bin_s / 12.0).sqrt();
        let new_c = c + shift;
        let new_h = (h / 2.0).max(4.0 * sigma).max(3.0 * fine_bin_s).min(h);
        out = Some(Refined {
            offset_s: 0.0,
            t_ref_s: tg / n,
            sigma_s: sigma,
            excess,
            floor,
        });
        let done = new_h == h && shift.abs() < 1e-3 * fine_bin_s;
        c = new_c;
        h = new_h;
        if done {
            break;
        }
    }
    let mut r = out.expect("loop runs at least once");
    r.offset_s = prior.offset_at(r.t_ref_s) + c;
    Ok(r)
}

/// Refines a coarse offset using the whole space stream. The coarse value
/// must be within about one coarse bin of the truth.
pub fn refine_offset(
    ground: &TimeTagStream,
    space: &TimeTagStream,
    delay: &DelayModel,
    coarse: &ClockSolution,
    coarse_bin_s: f64,
    fine_bin_s: f64,
) -> Result<Refined> {
    refine_in_range(ground, space, delay, coarse, 0..space.len(), 1.5 * coarse_bin_s, fine_bin_s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftParams {
    pub segment_s: f64,
    pub coarse_bin_s: f64,
    pub fine_bin_s: f64,
}

impl Default for DriftParams {
    fn default() -> Self {
        DriftParams {
            segment_s: 1.0,
            coarse_bin_s: 100e-9,
            fine_bin_s: 10e-12,
        }
    }
}

fn fit_line(knots: &[OffsetKnot]) -> (f64, f64, f64) {
    let w: Vec<f64> = knots
        .iter()
        .map(|k| {
            let e = k.sigma_s / k.excess.max(1.0).sqrt();
            1.0 / (e * e).max(1e-30)
        })
        .collect();
    let sw: f64 = w.iter().sum();
    let t_ref = knots.iter().zip(&w).map(|(k, w)| w * k.t_s).sum::<f64>() / sw;
    let o_ref = knots.iter().zip(&w).map(|(k, w)| w * k.offset_s).sum::<f64>() / sw;
    let stt: f64 = knots.iter().zip(&w).map(|(k, w)| w * (k.t_s - t_ref).powi(2)).sum();
    let sto: f64 = knots.iter().zip(&w).map(|(k, w)| w * (k.t_s - t_ref) * (k.offset_s - o_ref)).sum();
    let drift = if stt > 0.0 { sto / stt } else { 0.0 };
    (o_ref, t_ref, drift)
}

/// Offsets per segment of the space stream, each predicted from the fit so
/// far, then a weighted least-squares line. A second pass re-refines every
/// segment around the fitted line.
pub fn track_drift(
    ground: &TimeTagStream,
    space: &TimeTagStream,
    delay: &DelayModel,
    coarse: &ClockSolution,
    p: &DriftParams,
) -> Result<ClockSolution> {
    let Some((s0, s1)) = space.span_ps() else {
        return Err(Error::NoEvents);
    };
    let seg_ps = (p.segment_s * PS) as u64;
    let n_seg = ((s1 - s0) / seg_ps.max(1) + 1) as usize;
    let segments: Vec<_> = (0..n_seg)
        .map(|i| space.range(s0 + i as u64 * seg_ps, s0 + (i as u64 + 1) * seg_ps))
        .filter(|r| !r.is_empty())
        .collect();

    let mut knots: Vec<OffsetKnot> = Vec::new();
    let mut sol = coarse.clone();
    for r in &segments {
        if let Ok(f) = refine_in_range(ground, space, delay, &sol, r.clone(), 3.0 * p.coarse_bin_s, p.fine_bin_s) {
            knots.push(OffsetKnot {
                t_s: f.t_ref_s,
                offset_s: f.offset_s,
                sigma_s: f.sigma_s,
                excess: f.excess,
            });
            sol = if knots.len() >= 2 {
                let (o, t, d) = fit_line(&knots);
                ClockSolution::fixed(o, t, d)
            } else {
                ClockSolution::fixed(f.offset_s, f.t_ref_s, coarse.drift)
            };
        }
    }
    if knots.len() < 2 {
        return Err(Error::InsufficientSegments { found: knots.len() });
    }

    let first = sol.clone();
    let second: Vec<OffsetKnot> = segments
        .iter()
        .filter_map(|r| {
            let f = refine_in_range(ground, space, delay, &first, r.clone(), p.coarse_bin_s, p.fine_bin_s).ok()?;
            Some(OffsetKnot {
                t_s: f.t_ref_s,
                offset_s: f.offset_s,
                sigma_s: f.sigma_s,
                excess: f.excess,
            })
        })
        .collect();
    if second.len() >= 2 {
        knots = second;
    }
    let (o, t, d) = fit_line(&knots);
    let mut out = ClockSolution::fixed(o, t, d);
    let ss: f64 = knots.iter().map(|k| (k.offset_s - out.offset_at(k.t_s)).powi(2)).sum();
    out.residual_rms_s = (ss / knots.len() as f64).sqrt();
    out.knots = knots;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyncParams {
    pub acquisition_span_s: f64,
    pub acquisition_center_s: f64,
    /// Leading stretch of the space stream used for acquisition.
    pub acquisition_length_s: f64,
    pub coarse_bin_s: f64,
    pub fine_bin_s: f64,
    pub segment_s: f64,
}

impl Default for SyncParams {
    fn default() -> Self {
        SyncParams {
            acquisition_span_s: 1.0,
            acquisition_center_s: 0.0,
            acquisition_length_s: 4.0,
            coarse_bin_s: 100e-9,
            fine_bin_s: 10e-12,
            segment_s: 1.0,
        }
    }
}

impl SyncParams {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [
            ("acquisition_span_s", self.acquisition_span_s),
            ("acquisition_length_s", self.acquisition_length_s),
            ("coarse_bin_s", self.coarse_bin_s),
            ("fine_bin_s", self.fine_bin_s),
            ("segment_s", self.segment_s),
        ] {
            if !(v > 0.0) {
                return Err(Error::domain(n, v, "> 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncReport {
    pub clock: ClockSolution,
    pub acquisition_significance: f64,
    pub acquisition_local_significance: f64,
    pub acquisition_offset_s: f64,
    pub drift_tracked: bool,
}

/// Acquisition, then drift tracking when the stream spans at least two
/// segments, otherwise a single refinement.
pub fn synchronize(ground: &TimeTagStream, space: &TimeTagStream, delay: &DelayModel, p: &SyncParams) -> Result<SyncReport> {
    p.validate()?;
    let Some((s0, s1)) = space.span_ps() else {
        return Err(Error::NoEvents);
    };
    if ground.is_empty() {
        return Err(Error::NoEvents);
    }
    let acq = xcorr_offset(
        ground,
        space,
        delay,
        &XcorrParams {
            span_s: p.acquisition_span_s,
            center_s: p.acquisition_center_s,
            bin_s: p.coarse_bin_s,
            space_range_ps: Some((s0, s0 + (p.acquisition_length_s * PS) as u64)),
            method: XcorrMethod::Auto,
        },
    )?;
    if !acq.detected() {
        return Err(Error::NoCorrelation {
            significance: acq.significance,
        });
    }
    let coarse = ClockSolution::fixed(acq.peak_offset_s, acq.ref_time_s, 0.0);
    let span_s = (s1 - s0) as f64 / PS;
    let (clock, drift_tracked) = if span_s >= 2.0 * p.segment_s {
        let dp = DriftParams {
            segment_s: p.segment_s,
            coarse_bin_s: p.coarse_bin_s,
            fine_bin_s: p.fine_bin_s,
        };
        (track_drift(ground, space, delay, &coarse, &dp)?, true)
    } else {
        let r = refine_offset(ground, space, delay, &coarse, p.coarse_bin_s, p.fine_bin_s)?;
        (ClockSolution::fixed(r.offset_s, r.t_ref_s, 0.0), false)
    };
    Ok(SyncReport {
        clock,
        acquisition_significance: acq.significance,
        acquisition_local_significance: acq.local_significance,
        acquisition_offset_s: acq.peak_offset_s,
        drift_tracked,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub ground_index: usize,
    pub space_index: usize,
    /// Space time minus its predicted arrival, seconds.
    pub dt_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceSet {
    pub pairs: Vec<MatchedPair>,
    pub clock: ClockSolution,
    pub tau_c_s: f64,
    /// All ground/space combinations inside the central window.
    pub peak_raw: u64,
    pub sideband_counts: Vec<u64>,
    pub sideband_mean: f64,
    pub accidental_estimate_cps: f64,
    pub duration_s: f64,
    /// `(peak_raw - sideband_mean) / sideband_mean`.
    pub measured_snr: f64,
    pub measured_snr_sigma: f64,
}

impl CoincidenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn write_csv<W: Write>(&self, ground: &TimeTagStream, space: &TimeTagStream, w: W) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(w);
        writeln!(w, "ground_time_ps,space_time_ps,dt_ps,ground_channel,space_channel")?;
        for p in &self.pairs {
            writeln!(
                w,
                "{},{},{:.1},{},{}",
                ground.times_ps[p.ground_index],
                space.times_ps[p.space_index],
                p.dt_s * PS,
                ground.channels[p.ground_index],
                space.channels[p.space_index]
            )?;
        }
        w.flush()
    }
}

/// Visits every ground/space combination whose residual lies within
/// `[lo_s, hi_s]`.
fn for_each_candidate<F: FnMut(usize, usize, f64)>(
    ground: &TimeTagStream,
    space: &TimeTagStream,
    delay: &DelayModel,
    clock: &ClockSolution,
    lo_s: f64,
    hi_s: f64,
    mut f: F,
) {
    let margin = 1e-9 + 1e-3 * (hi_s - lo_s).abs();
    for (j, &s) in space.times_ps.iter().enumerate() {
        let g_pred = clock.ground_time(s as f64 / PS, delay);
        let lo = ((g_pred - hi_s - margin) * PS).max(0.0) as u64;
        let hi = ((g_pred - lo_s + margin) * PS).max(0.0) as u64 + 1;
        for i in ground.range(lo, hi) {
            let g = ground.times_ps[i];
            let g_s = g as f64 / PS;
            let dt = (s as f64 - g as f64) / PS - delay.at(g_s) - clock.offset_at(g_s);
            if dt >= lo_s && dt <= hi_s {
                f(i, j, dt);
            }
        }
    }
}

/// One-to-one matching within `|dt| <= tau_c / 2`, accepting candidate
/// pairs globally in order of increasing `|dt|`. Accidentals are estimated
/// from ten sideband windows of the same width.
pub fn match_pairs(
    ground: &TimeTagStream,
    space: &TimeTagStream,
    delay: &DelayModel,
    clock: &ClockSolution,
    tau_c_s: f64,
) -> CoincidenceSet {
    let duration_s = match (ground.span_ps(), space.span_ps()) {
        (Some((a, b)), Some(_)) => (b - a) as f64 / PS,
        _ => 0.0,
    };
    let mut set = CoincidenceSet {
        pairs: Vec::new(),
        clock: clock.clone(),
        tau_c_s,
        peak_raw: 0,
        sideband_counts: vec![0; SIDEBAND_OFFSETS_S.len()],
        sideband_mean: 0.0,
        accidental_estimate_cps: 0.0,
        duration_s,
        measured_snr: 0.0,
        measured_snr_sigma: 0.0,
    };
    if !(tau_c_s > 0.0) || ground.is_empty() || space.is_empty() {
        return set;
    }
    let half = tau_c_s / 2.0;
    let mut cands: Vec<MatchedPair> = Vec::new();
    for_each_candidate(ground, space, delay, clock, -half, half, |i, j, dt| {
        cands.push(MatchedPair {
            ground_index: i,
            space_index: j,
            dt_s: dt,
        })
    });
    set.peak_raw = cands.len() as u64;
    cands.sort_by(|a, b| {
        a.dt_s
            .abs()
            .total_cmp(&b.dt_s.abs())
            .then(a.ground_index.cmp(&b.ground_index))
            .then(a.space_index.cmp(&b.space_index))
    });
    let mut used_g = HashSet::new();
    let mut used_s = HashSet::new();
    for c in cands {
        if !used_g.contains(&c.ground_index) && !used_s.contains(&c.space_index) {
            used_g.insert(c.ground_index);
            used_s.insert(c.space_index);
            set.pairs.push(c);
        }
    }
    set.pairs.sort_by_key(|p| (p.ground_index, p.space_index));

    for (k, &off) in SIDEBAND_OFFSETS_S.iter().enumerate() {
        let mut n = 0u64;
        for_each_candidate(ground, space, delay, clock, off - half, off + half, |_, _, _| n += 1);
        set.sideband_counts[k] = n;
    }
    let nsb = SIDEBAND_OFFSETS_S.len() as f64;
    let a = set.sideband_counts.iter().sum::<u64>() as f64 / nsb;
    set.sideband_mean = a;
    if duration_s > 0.0 {
        set.accidental_estimate_cps = a / duration_s;
    }
    let np = set.peak_raw as f64;
    if a > 0.0 {
        set.measured_snr = (np - a) / a;
        set.measured_snr_sigma = (np / (a * a) + np * np / (a * a * a * nsb)).sqrt();
    } else {
        set.measured_snr = f64::INFINITY;
    }
    set
}
