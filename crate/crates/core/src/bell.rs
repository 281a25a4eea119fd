//! CHSH analysis of matched coincidences.
//!
//! With analyzer settings `a, a'` on the ground and `b, b'` on board,
//! `S = E(a,b) - E(a,b') + E(a',b) + E(a',b')`, which reaches `2 sqrt 2`
//! for a maximally entangled state at the default angles. Each `E` uses
//! the binomial error `sqrt((1 - E^2) / N)`; the exact multinomial error
//! differs at order `1/N`.

use std::f64::consts::SQRT_2;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::coincidence::CoincidenceSet;
use crate::error::{Error, Result};
use crate::mc::MeasurementSettings;
use crate::source::BellState;
use crate::timetag::{basis_of, outcome_of, TimeTagStream};

/// Outcome counts `[N++, N+-, N-+, N--]` for one settings pair.
pub type OutcomeCounts = [f64; 4];

/// Counts indexed `[ground basis][space basis]`. Counts are real so that
/// expected (analytic) tallies can be analysed too.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SettingCounts {
    pub counts: [[OutcomeCounts; 2]; 2],
}

impl SettingCounts {
    pub fn add(&mut self, ground_channel: u8, space_channel: u8) {
        let (gb, go) = (basis_of(ground_channel) as usize, outcome_of(ground_channel) as usize);
        let (sb, so) = (basis_of(space_channel) as usize, outcome_of(space_channel) as usize);
        self.counts[gb][sb][2 * go + so] += 1.0;
    }

    pub fn from_coincidences(set: &CoincidenceSet, ground: &TimeTagStream, space: &TimeTagStream) -> Self {
        let mut c = SettingCounts::default();
        for p in &set.pairs {
            c.add(ground.channels[p.ground_index], space.channels[p.space_index]);
        }
        c
    }

    /// Expected counts for `n_per_setting` pairs at each settings pair.
    pub fn analytic(n_per_setting: f64, visibility: f64, settings: &MeasurementSettings, state: BellState) -> Self {
        let mut c = SettingCounts::default();
        for i in 0..2 {
            for j in 0..2 {
                let e = state.correlation(visibility, settings.ground_angles_deg[i], settings.space_angles_deg[j]);
                let same = n_per_setting * (1.0 + e) / 4.0;
                let diff = n_per_setting * (1.0 - e) / 4.0;
                c.counts[i][j] = [same, diff, diff, same];
            }
        }
        c
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().flatten().flatten().sum()
    }

    pub fn scaled(&self, k: f64) -> Self {
        let mut c = *self;
        c.counts.iter_mut().flatten().flatten().for_each(|x| *x *= k);
        c
    }

    /// Swaps `+` and `-` on the ground side.
    pub fn flip_ground_outcomes(&self) -> Self {
        let mut c = *self;
        for row in c.counts.iter_mut() {
            for o in row.iter_mut() {
                *o = [o[2], o[3], o[0], o[1]];
            }
        }
        c
    }
}

/// `(E, sigma_E)` from one settings pair.
pub fn correlation_e(c: &OutcomeCounts) -> Result<(f64, f64)> {
    let n: f64 = c.iter().sum();
    if !(n > 0.0) {
        return Err(Error::NoEvents);
    }
    let e = ((c[0] + c[3] - c[1] - c[2]) / n).clamp(-1.0, 1.0);
    Ok((e, ((1.0 - e * e) / n).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChshConvention {
    /// The sign pattern maximal for the default angles.
    #[default]
    Canonical,
    /// Largest `|S|` over the four sign patterns; biased upward in noise.
    Maximize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChshResult {
    /// `[ground basis][space basis]`.
    pub e: [[f64; 2]; 2],
    pub sigma_e: [[f64; 2]; 2],
    pub s: f64,
    pub sigma_s: f64,
    pub n_sigma: f64,
    pub n_total: f64,
}

impl ChshResult {
    pub fn violates(&self) -> bool {
        self.s > 2.0
    }

    pub fn write_csv_row<W: Write>(&self, mut w: W, header: bool) -> std::io::Result<()> {
        if header {
            writeln!(w, "S,sigma_S,n_sigma,N,E_ab,E_ab',E_a'b,E_a'b'")?;
        }
        writeln!(
            w,
            "{:.6},{:.6},{:.4},{},{:.6},{:.6},{:.6},{:.6}",
            self.s, self.sigma_s, self.n_sigma, self.n_total, self.e[0][0], self.e[0][1], self.e[1][0], self.e[1][1]
        )
    }
}

// Sign of each E in the canonical combination, [a][b].
const CANONICAL: [[f64; 2]; 2] = [[1.0, -1.0], [1.0, 1.0]];

pub fn chsh_s(counts: &SettingCounts, convention: ChshConvention) -> Result<ChshResult> {
    let missing: Vec<(usize, usize)> = (0..2)
        .flat_map(|i| (0..2).map(move |j| (i, j)))
        .filter(|&(i, j)| !(counts.counts[i][j].iter().sum::<f64>() > 0.0))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingSettings(missing));
    }
    let mut e = [[0.0; 2]; 2];
    let mut se = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            (e[i][j], se[i][j]) = correlation_e(&counts.counts[i][j])?;
        }
    }
    let combo = |signs: [[f64; 2]; 2]| (0..2).flat_map(|i| (0..2).map(move |j| (i, j))).map(|(i, j)| signs[i][j] * e[i][j]).sum::<f64>();
    let s = match convention {
        ChshConvention::Canonical => combo(CANONICAL),
        ChshConvention::Maximize => {
            let mut best = 0.0f64;
            for neg in 0..4 {
                let mut signs = [[1.0; 2]; 2];
                signs[neg / 2][neg % 2] = -1.0;
                best = best.max(combo(signs).abs());
            }
            best
        }
    };
    let sigma_s = se.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    Ok(ChshResult {
        e,
        sigma_e: se,
        s,
        sigma_s,
        n_sigma: if sigma_s > 0.0 { (s - 2.0) / sigma_s } else { f64::INFINITY },
        n_total: counts.total(),
    })
}

/// Smallest total number of coincidences, spread evenly over the four
/// settings pairs, for which the expected violation at visibility `V`
/// reaches `target_sigma` standard deviations.
pub fn required_coincidences(target_sigma: f64, visibility: f64) -> Result<u64> {
    if !(visibility > 1.0 / SQRT_2 && visibility <= 1.0) {
        return Err(Error::NoViolation(visibility));
    }
    if !(target_sigma >= 0.0) {
        return Err(Error::domain("target_sigma", target_sigma, ">= 0"));
    }
    let excess = 2.0 * SQRT_2 * visibility - 2.0;
    // sigma_S^2 = 4 * (1 - V^2/2) / (N/4)
    let q = 16.0 * (1.0 - 0.5 * visibility * visibility);
    let ok = |n: u64| excess / (q / n as f64).sqrt() >= target_sigma;
    let mut n = (q * target_sigma * target_sigma / (excess * excess)).ceil().max(1.0) as u64;
    while n > 1 && ok(n - 1) {
        n -= 1;
    }
    while !ok(n) {
        n += 1;
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;
    use crate::feasibility::visibility_from_snr;

    #[test]
    fn correlation_examples() {
        let (e, s) = correlation_e(&[100.0, 0.0, 0.0, 100.0]).unwrap();
        assert_eq!((e, s), (1.0, 0.0));
        let (e, s) = correlation_e(&[50.0, 50.0, 50.0, 50.0]).unwrap();
        assert_eq!(e, 0.0);
        assert_abs_diff_eq!(s, 0.070_710_678, epsilon = 1e-8);
        assert!(correlation_e(&[0.0; 4]).is_err());
    }

    #[test]
    fn analytic_counts_hit_bounds() {
        let st = MeasurementSettings::default();
        let ideal = chsh_s(&SettingCounts::analytic(1000.0, 1.0, &st, BellState::PhiPlus), ChshConvention::Canonical).unwrap();
        assert_abs_diff_eq!(ideal.s, 2.0 * SQRT_2, epsilon = 1e-12);
        let edge = chsh_s(&SettingCounts::analytic(1000.0, 1.0 / SQRT_2, &st, BellState::PhiPlus), ChshConvention::Canonical).unwrap();
        assert_abs_diff_eq!(edge.s, 2.0, epsilon = 1e-12);
        let singlet = chsh_s(&SettingCounts::analytic(1000.0, 1.0, &st, BellState::PsiMinus), ChshConvention::Maximize).unwrap();
        assert_abs_diff_eq!(singlet.s, 2.0 * SQRT_2, epsilon = 1e-12);
    }

    #[test]
    fn missing_settings_listed() {
        let mut c = SettingCounts::analytic(100.0, 1.0, &MeasurementSettings::default(), BellState::PhiPlus);
        c.counts[1][0] = [0.0; 4];
        match chsh_s(&c, ChshConvention::Canonical) {
            Err(Error::MissingSettings(m)) => assert_eq!(m, vec![(1, 0)]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn required_counts() {
        let n = required_coincidences(3.0, visibility_from_snr(15.0)).unwrap();
        assert!((200..=3000).contains(&n), "{n}");
        // sigma_S^2 = 8/N at V = 1, so 3 sigma needs 72 / (2 sqrt 2 - 2)^2
        assert_eq!(required_coincidences(3.0, 1.0).unwrap(), 105);
        assert!(required_coincidences(3.0, 0.5).is_err());
    }

    #[test]
    fn flipping_one_side_negates_every_e() {
        let c = SettingCounts::analytic(400.0, 0.9, &MeasurementSettings::default(), BellState::PhiPlus);
        let a = chsh_s(&c, ChshConvention::Canonical).unwrap();
        let b = chsh_s(&c.flip_ground_outcomes(), ChshConvention::Canonical).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(a.e[i][j], -b.e[i][j], epsilon = 1e-15);
            }
        }
        assert_abs_diff_eq!(a.s, -b.s, epsilon = 1e-14);
        let m = chsh_s(&c.flip_ground_outcomes(), ChshConvention::Maximize).unwrap();
        assert_abs_diff_eq!(m.s, a.s, epsilon = 1e-14);
    }

    proptest! {
        #[test]
        fn scale_invariance(v in 0.0f64..1.0, n in 10.0f64..1e4, k in 0.5f64..20.0) {
            let c = SettingCounts::analytic(n, v, &MeasurementSettings::default(), BellState::PhiPlus);
            let a = chsh_s(&c, ChshConvention::Canonical).unwrap();
            let b = chsh_s(&c.scaled(k), ChshConvention::Canonical).unwrap();
            prop_assert!((a.s - b.s).abs() < 1e-12);
            prop_assert!((b.sigma_s * k.sqrt() - a.sigma_s).abs() < 1e-9 * a.sigma_s.max(1e-12));
        }

        #[test]
        fn e_in_range(c in prop::array::uniform4(0.0f64..1e3)) {
            prop_assume!(c.iter().sum::<f64>() > 0.0);
            let (e, s) = correlation_e(&c).unwrap();
            prop_assert!((-1.0..=1.0).contains(&e));
            prop_assert!(s >= 0.0);
        }
    }
}
