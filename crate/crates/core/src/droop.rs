//! Droop gains from first-order PCE coefficients.
//!
//! A droop converter answers a DC-voltage deviation `dV` with a power change
//! `-k dV`. The stochastic dispatch already tells how much of each germ's
//! fluctuation the converter should take (`p_hat_1i`) and how far its DC
//! voltage moves meanwhile (`v_hat_1i`); their ratio is the gain that makes
//! the local law reproduce the dispatch. With several germs the per-germ
//! ratios are averaged with weights proportional to `|v_hat_1i|`, which
//! collapses to `sum |p_hat_1i| / sum |v_hat_1i|`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{ConverterMode, NetworkModel};
use crate::pce::PceBasis;
use crate::powerflow::Layout;
use crate::sopf::SopfSolution;
use crate::wind::Zone;

#[derive(Debug, Error)]
pub enum DroopError {
    #[error("all voltage sensitivities are zero")]
    DegenerateDenominator,
    #[error("sensitivity vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("basis degree must be at least 1")]
    DegreeZero,
    #[error("converter {0} is not in voltage_droop mode")]
    NotDroop(String),
    #[error("unknown converter {0}")]
    UnknownConverter(String),
    #[error("calibration set for zone {0} is empty")]
    EmptyZone(Zone),
    #[error("nonpositive k_tilde {value} in zone {zone}")]
    NonpositiveKTilde { zone: Zone, value: f64 },
    #[error("k_base must be positive, got {0}")]
    NonpositiveBase(f64),
    #[error("calibration file: {0}")]
    Io(#[from] std::io::Error),
    #[error("calibration file: {0}")]
    Csv(#[from] csv::Error),
    #[error("calibration file is missing zone {0}")]
    MissingZone(Zone),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DroopExtraction {
    pub converter: String,
    pub p_hat: Vec<f64>,
    pub v_hat: Vec<f64>,
    pub weights: Vec<f64>,
    pub k_tilde: f64,
}

/// `sum |p| / sum |v|`.
pub fn k_tilde(p_hat: &[f64], v_hat: &[f64]) -> Result<f64, DroopError> {
    if p_hat.len() != v_hat.len() {
        return Err(DroopError::LengthMismatch(p_hat.len(), v_hat.len()));
    }
    let den: f64 = v_hat.iter().map(|v| v.abs()).sum();
    if den == 0.0 {
        return Err(DroopError::DegenerateDenominator);
    }
    Ok(p_hat.iter().map(|p| p.abs()).sum::<f64>() / den)
}

/// Voltage-sensitivity weights `|v_i| / sum |v_j|`.
pub fn weights(v_hat: &[f64]) -> Result<Vec<f64>, DroopError> {
    let den: f64 = v_hat.iter().map(|v| v.abs()).sum();
    if den == 0.0 {
        return Err(DroopError::DegenerateDenominator);
    }
    Ok(v_hat.iter().map(|v| v.abs() / den).collect())
}

/// Weighted mean of the per-germ ratios `|p_i| / |v_i|`. A germ with
/// `v_i = 0` has zero weight; its term is taken at its limit `|p_i| / sum |v|`.
pub fn k_tilde_weighted(p_hat: &[f64], v_hat: &[f64]) -> Result<f64, DroopError> {
    if p_hat.len() != v_hat.len() {
        return Err(DroopError::LengthMismatch(p_hat.len(), v_hat.len()));
    }
    let w = weights(v_hat)?;
    let den: f64 = v_hat.iter().map(|v| v.abs()).sum();
    Ok(p_hat
        .iter()
        .zip(v_hat)
        .zip(&w)
        .map(|((p, v), w)| if *v == 0.0 { p.abs() / den } else { w * (p.abs() / v.abs()) })
        .sum())
}

/// Reads the first-order coefficients of converter `c`'s AC power and DC
/// voltage off a stochastic dispatch.
pub fn extract_ktilde(
    model: &NetworkModel,
    basis: &PceBasis,
    sol: &SopfSolution,
    c: usize,
) -> Result<DroopExtraction, DroopError> {
    if basis.degree == 0 {
        return Err(DroopError::DegreeZero);
    }
    let conv = model.converters.get(c).ok_or_else(|| DroopError::UnknownConverter(c.to_string()))?;
    if conv.mode != ConverterMode::VoltageDroop {
        return Err(DroopError::NotDroop(conv.name.clone()));
    }
    let dc = model.dc_bus_index(conv.dc_bus).expect("validated model");
    let v = sol.states.var(Layout::of(model).vdc(dc));
    let p = &sol.dispatch.conv_p[c];
    let idx: Vec<usize> = (0..basis.n_dims).map(|i| basis.first_order_index(i).expect("degree >= 1")).collect();
    let p_hat: Vec<f64> = idx.iter().map(|&k| p[k]).collect();
    let v_hat: Vec<f64> = idx.iter().map(|&k| v[k]).collect();
    Ok(DroopExtraction {
        converter: conv.name.clone(),
        weights: weights(&v_hat)?,
        k_tilde: k_tilde(&p_hat, &v_hat)?,
        p_hat,
        v_hat,
    })
}

/// Lower median: the element of rank `(n - 1) / 2` after sorting.
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

pub fn k_opt(k_tilde: f64, alpha: f64) -> f64 {
    alpha * k_tilde
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneCalibration {
    pub zone: Zone,
    pub alpha_z: f64,
    pub n_cases: usize,
    pub median_k_tilde: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub k_base: f64,
    pub zones: BTreeMap<Zone, ZoneCalibration>,
}

impl Calibration {
    pub fn alpha(&self, zone: Zone) -> Option<f64> {
        self.zones.get(&zone).map(|z| z.alpha_z)
    }
}

/// Scales each zone so the lower-median `k_opt` equals `k_base`.
pub fn calibrate_alpha(k_tildes: &BTreeMap<Zone, Vec<f64>>, k_base: f64) -> Result<Calibration, DroopError> {
    if !(k_base > 0.0) {
        return Err(DroopError::NonpositiveBase(k_base));
    }
    let mut zones = BTreeMap::new();
    for zone in Zone::ALL {
        let ks = k_tildes.get(&zone).map(Vec::as_slice).unwrap_or(&[]);
        if let Some(&bad) = ks.iter().find(|k| !(**k > 0.0)) {
            return Err(DroopError::NonpositiveKTilde { zone, value: bad });
        }
        let med = lower_median(ks).ok_or(DroopError::EmptyZone(zone))?;
        zones.insert(zone, ZoneCalibration { zone, alpha_z: k_base / med, n_cases: ks.len(), median_k_tilde: med });
    }
    Ok(Calibration { k_base, zones })
}

#[derive(Debug, Serialize, Deserialize)]
struct CalibrationRow {
    zone: String,
    alpha_z: f64,
    n_cases: usize,
    median_k_tilde: f64,
}

pub fn write_calibration(cal: &Calibration, path: impl AsRef<Path>) -> Result<(), DroopError> {
    let mut w = csv::Writer::from_path(path)?;
    for z in cal.zones.values() {
        w.serialize(CalibrationRow {
            zone: z.zone.as_str().into(),
            alpha_z: z.alpha_z,
            n_cases: z.n_cases,
            median_k_tilde: z.median_k_tilde,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Reloads a calibration table. `k_base` is recovered as `alpha * median`.
pub fn read_calibration(path: impl AsRef<Path>) -> Result<Calibration, DroopError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut zones = BTreeMap::new();
    for row in r.deserialize::<CalibrationRow>() {
        let row = row?;
        let zone = Zone::parse(&row.zone).ok_or_else(|| {
            DroopError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, format!("unknown zone {}", row.zone)))
        })?;
        zones.insert(zone, ZoneCalibration { zone, alpha_z: row.alpha_z, n_cases: row.n_cases, median_k_tilde: row.median_k_tilde });
    }
    for zone in Zone::ALL {
        if !zones.contains_key(&zone) {
            return Err(DroopError::MissingZone(zone));
        }
    }
    let z = &zones[&Zone::Mid];
    Ok(Calibration { k_base: z.alpha_z * z.median_k_tilde, zones })
}

/// Per-converter extraction table as CSV.
pub fn write_extraction_csv(rows: &[DroopExtraction], path: impl AsRef<Path>) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "converter,germ,p_hat,v_hat,weight,k_tilde")?;
    for r in rows {
        for i in 0..r.p_hat.len() {
            writeln!(f, "{},{},{},{},{},{}", r.converter, i, r.p_hat[i], r.v_hat[i], r.weights[i], r.k_tilde)?;
        }
    }
    f.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_source() {
        assert!((k_tilde(&[0.4], &[0.02]).unwrap() - 20.0).abs() < 1e-12);
        assert!((k_tilde_weighted(&[0.4], &[0.02]).unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn two_sources() {
        let (p, v) = ([0.3, 0.1], [0.02, 0.02]);
        assert_eq!(weights(&v).unwrap(), vec![0.5, 0.5]);
        assert!((k_tilde_weighted(&p, &v).unwrap() - 10.0).abs() < 1e-12);
        assert!((k_tilde(&p, &v).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate() {
        assert!(matches!(k_tilde(&[0.1, 0.2], &[0.0, 0.0]), Err(DroopError::DegenerateDenominator)));
        assert!(matches!(k_tilde_weighted(&[0.1], &[0.0]), Err(DroopError::DegenerateDenominator)));
    }

    #[test]
    fn calibration_examples() {
        let mut m = BTreeMap::new();
        m.insert(Zone::Low, vec![0.8]);
        m.insert(Zone::Mid, vec![1.0, 1.0, 1.0]);
        m.insert(Zone::High, vec![2.0, 0.5, 1.0, 4.0]);
        let cal = calibrate_alpha(&m, 20.0).unwrap();
        assert!((cal.alpha(Zone::Low).unwrap() - 25.0).abs() < 1e-12);
        assert_eq!(cal.alpha(Zone::Mid), Some(20.0));
        // lower median of {0.5, 1, 2, 4} is 1
        assert_eq!(cal.alpha(Zone::High), Some(20.0));
        assert_eq!(k_opt(0.8, 25.0), 20.0);
        assert_eq!(k_opt(0.0, 3.0), 0.0);

        m.insert(Zone::Low, vec![]);
        assert!(matches!(calibrate_alpha(&m, 20.0), Err(DroopError::EmptyZone(Zone::Low))));
        m.insert(Zone::Low, vec![1.0, -1.0]);
        assert!(matches!(calibrate_alpha(&m, 20.0), Err(DroopError::NonpositiveKTilde { .. })));
    }

    #[test]
    fn calibration_round_trip() {
        let mut m = BTreeMap::new();
        for (z, k) in Zone::ALL.iter().zip([0.7, 1.3, 2.9]) {
            m.insert(*z, vec![k, 2.0 * k, 0.5 * k]);
        }
        let cal = calibrate_alpha(&m, 20.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cal.csv");
        write_calibration(&cal, &path).unwrap();
        let back = read_calibration(&path).unwrap();
        assert_eq!(back.zones, cal.zones);
        assert!((back.k_base - 20.0).abs() < 1e-12);
    }
}
