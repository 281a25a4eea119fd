//! Uplink attenuation budget.
//!
//! The far-field spot is treated as Gaussian with an effective divergence
//! that combines diffraction at the transmit aperture, turbulence-induced
//! broadening and pointing jitter in quadrature. The receiver collects
//! `D_R^2 / (2 (theta L)^2)` of the beam, clamped at unity.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkParams {
    pub wavelength_m: f64,
    pub tx_aperture_m: f64,
    pub rx_aperture_m: f64,
    /// Fried parameter at zenith; scaled by `sin(elevation)^(3/5)` off zenith.
    pub fried_r0_m: f64,
    pub pointing_jitter_rad: f64,
    pub diffraction_coeff: f64,
    /// Receiver optics, window and detector quantum efficiency.
    pub system_loss_db: f64,
    pub margin_db: f64,
    pub atm_transmission_zenith: f64,
}

impl Default for LinkParams {
    /// Calibrated so that a 0.20 m transmitter at zenith (400 km) gives 40 dB.
    fn default() -> Self {
        LinkParams {
            wavelength_m: 810e-9,
            tx_aperture_m: 0.20,
            rx_aperture_m: 0.143,
            fried_r0_m: 0.15,
            pointing_jitter_rad: 3e-6,
            diffraction_coeff: 1.22,
            // 3.01 dB detector efficiency (50 %) + 0.49 dB receiver optics.
            system_loss_db: 3.5,
            margin_db: 5.0,
            atm_transmission_zenith: 0.7,
        }
    }
}

impl LinkParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("wavelength_m", self.wavelength_m),
            ("tx_aperture_m", self.tx_aperture_m),
            ("rx_aperture_m", self.rx_aperture_m),
            ("fried_r0_m", self.fried_r0_m),
            ("diffraction_coeff", self.diffraction_coeff),
        ] {
            if !(v > 0.0) {
                return Err(Error::domain(name, v, "> 0"));
            }
        }
        if !(self.pointing_jitter_rad >= 0.0) {
            return Err(Error::domain("pointing_jitter_rad", self.pointing_jitter_rad, ">= 0"));
        }
        if !(self.atm_transmission_zenith > 0.0 && self.atm_transmission_zenith <= 1.0) {
            return Err(Error::domain(
                "atm_transmission_zenith",
                self.atm_transmission_zenith,
                "(0, 1]",
            ));
        }
        if !(self.margin_db >= 0.0) {
            return Err(Error::domain("margin_db", self.margin_db, ">= 0"));
        }
        if !(self.system_loss_db >= 0.0) {
            return Err(Error::domain("system_loss_db", self.system_loss_db, ">= 0"));
        }
        Ok(())
    }
}

/// Far-field divergence half-angle at zenith.
pub fn effective_divergence(p: &LinkParams) -> f64 {
    divergence_with_r0(p, p.fried_r0_m)
}

fn divergence_with_r0(p: &LinkParams, r0: f64) -> f64 {
    let diffraction = p.diffraction_coeff * p.wavelength_m / p.tx_aperture_m;
    let turbulence = p.wavelength_m / r0;
    (diffraction * diffraction + turbulence * turbulence + p.pointing_jitter_rad.powi(2)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    pub total_db: f64,
    pub geometric_db: f64,
    pub atmospheric_db: f64,
    pub system_db: f64,
    pub margin_db: f64,
    pub effective_divergence_rad: f64,
}

impl LinkBudget {
    pub fn transmittance(&self) -> f64 {
        db_to_transmittance(self.total_db)
    }
}

pub fn db_to_transmittance(db: f64) -> f64 {
    10f64.powf(-db / 10.0)
}

pub fn attenuation_db(slant_range_km: f64, elevation_deg: f64, p: &LinkParams) -> Result<LinkBudget> {
    if !(slant_range_km > 0.0) {
        return Err(Error::domain("slant_range_km", slant_range_km, "> 0"));
    }
    if !(elevation_deg > 0.0 && elevation_deg <= 90.0) {
        return Err(Error::domain("elevation_deg", elevation_deg, "(0, 90]"));
    }
    p.validate()?;

    let sin_el = elevation_deg.to_radians().sin();
    let theta = divergence_with_r0(p, p.fried_r0_m * sin_el.powf(0.6));
    let spot = theta * slant_range_km * 1e3;
    let collected = (p.rx_aperture_m.powi(2) / (2.0 * spot * spot)).min(1.0);
    let geometric_db = -10.0 * collected.log10();
    let atmospheric_db = -10.0 * p.atm_transmission_zenith.log10() / sin_el;

    Ok(LinkBudget {
        total_db: geometric_db + atmospheric_db + p.system_loss_db + p.margin_db,
        geometric_db,
        atmospheric_db,
        system_db: p.system_loss_db,
        margin_db: p.margin_db,
        effective_divergence_rad: theta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub tx_aperture_m: f64,
    pub budget: LinkBudget,
}

/// Attenuation against transmitter aperture at a fixed geometry. Rows come
/// back in input order.
pub fn attenuation_curve(
    tx_apertures_m: &[f64],
    slant_range_km: f64,
    elevation_deg: f64,
    p: &LinkParams,
) -> Result<Vec<CurveRow>> {
    if tx_apertures_m.is_empty() {
        return Err(Error::Config("empty aperture sweep".into()));
    }
    tx_apertures_m
        .par_iter()
        .map(|&d| {
            let q = LinkParams {
                tx_aperture_m: d,
                ..*p
            };
            Ok(CurveRow {
                tx_aperture_m: d,
                budget: attenuation_db(slant_range_km, elevation_deg, &q)?,
            })
        })
        .collect()
}

pub fn write_curve_csv<W: Write>(rows: &[CurveRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "D_T_m,total_db,geometric_db,atmospheric_db,system_db,margin_db")?;
    for r in rows {
        let b = &r.budget;
        writeln!(
            w,
            "{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            r.tx_aperture_m, b.total_db, b.geometric_db, b.atmospheric_db, b.system_db, b.margin_db
        )?;
    }
    Ok(())
}
