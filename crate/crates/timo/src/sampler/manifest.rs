use super::{derive_seed, sample_locations, sample_timestamp_grid, CityCenter, WINDOW_DAYS};
use crate::error::{Error, Result};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestRecord {
    pub location_id: u64,
    pub lat: f64,
    pub lon: f64,
    pub city: String,
    /// Ten ISO-8601 acquisition dates, strictly increasing.
    pub timestamps: Vec<String>,
    pub window_days: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct SampleManifest {
    pub records: Vec<ManifestRecord>,
}

impl SampleManifest {
    pub fn validate(&self) -> Result<()> {
        for rec in &self.records {
            if !(-90.0..=90.0).contains(&rec.lat) || !(-180.0..=180.0).contains(&rec.lon) {
                return Err(Error::Schema(format!(
                    "record {}: coordinates out of range",
                    rec.location_id
                )));
            }
            if rec.timestamps.len() != 10 {
                return Err(Error::Schema(format!(
                    "record {}: expected 10 timestamps, found {}",
                    rec.location_id,
                    rec.timestamps.len()
                )));
            }
            let mut prev: Option<NaiveDate> = None;
            for ts in &rec.timestamps {
                let date = NaiveDate::parse_from_str(ts, "%Y-%m-%d").map_err(|_| {
                    Error::Schema(format!(
                        "record {}: timestamp \"{ts}\" is not an ISO-8601 date",
                        rec.location_id
                    ))
                })?;
                if let Some(p) = prev {
                    if date <= p {
                        return Err(Error::Schema(format!(
                            "record {}: timestamps not strictly increasing at \"{ts}\"",
                            rec.location_id
                        )));
                    }
                }
                prev = Some(date);
            }
        }
        Ok(())
    }
}

/// Sample `n` locations and give each a jittered ten-date schedule.
/// Per-record seeds are derived from the base seed, so generation is
/// order-independent.
pub fn build_manifest(
    cities: &[CityCenter],
    n: usize,
    sigma_km: f64,
    jitter_days: u32,
    seed: u64,
) -> Result<SampleManifest> {
    let locations = sample_locations(cities, n, sigma_km, seed)?;
    let mut records = Vec::with_capacity(n);
    for (i, loc) in locations.into_iter().enumerate() {
        let dates = sample_timestamp_grid(derive_seed(seed, i as u64), jitter_days)?;
        records.push(ManifestRecord {
            location_id: i as u64,
            lat: loc.lat,
            lon: loc.lon,
            city: loc.city,
            timestamps: dates
                .iter()
                .map(|d| d.format("%Y-%m-%d").to_string())
                .collect(),
            window_days: WINDOW_DAYS,
        });
    }
    let manifest = SampleManifest { records };
    manifest.validate()?;
    Ok(manifest)
}

pub fn write_manifest(manifest: &SampleManifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, manifest)?;
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<SampleManifest> {
    let r = BufReader::new(File::open(path)?);
    let manifest: SampleManifest = serde_json::from_reader(r)?;
    manifest.validate()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cities() -> Vec<CityCenter> {
        vec![
            CityCenter {
                name: "Vigo".to_string(),
                lat: 42.2406,
                lon: -8.7207,
            },
            CityCenter {
                name: "Most".to_string(),
                lat: 50.5031,
                lon: 13.6362,
            },
        ]
    }

    #[test]
    fn manifest_round_trips_structurally() {
        let m = build_manifest(&cities(), 5, 50.0, 10, 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        write_manifest(&m, &path).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn empty_manifest_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.json");
        write_manifest(&SampleManifest::default(), &path).unwrap();
        let back = read_manifest(&path).unwrap();
        assert!(back.records.is_empty());
    }

    #[test]
    fn missing_timestamp_names_offending_record() {
        let mut m = build_manifest(&cities(), 2, 50.0, 0, 1).unwrap();
        m.records[1].timestamps.pop();
        let err = m.validate().unwrap_err().to_string();
        assert!(err.contains("record 1"), "error was: {err}");
        assert!(err.contains("expected 10 timestamps"));
    }

    #[test]
    fn non_increasing_timestamps_rejected() {
        let mut m = build_manifest(&cities(), 1, 50.0, 0, 1).unwrap();
        m.records[0].timestamps[5] = m.records[0].timestamps[4].clone();
        assert!(m.validate().is_err());
    }

    #[test]
    fn json_field_order_is_stable() {
        let m = build_manifest(&cities(), 1, 0.0, 0, 1).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let li = s.find("location_id").unwrap();
        let la = s.find("lat").unwrap();
        let ts = s.find("timestamps").unwrap();
        let wd = s.find("window_days").unwrap();
        assert!(li < la && la < ts && ts < wd);
    }
}
