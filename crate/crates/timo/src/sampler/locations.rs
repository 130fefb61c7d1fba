use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Kilometres per degree of latitude on a spherical Earth
/// (π·R/180 with R = 6371.0088 km).
pub const KM_PER_DEG_LAT: f64 = 111.194_926_644_558_74;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CityCenter {
    pub name: String,
    pub lat: f64,
    pub lon: f64,
}

impl CityCenter {
    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.lat) || !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::Schema(format!(
                "city {}: coordinates ({}, {}) out of range",
                self.name, self.lat, self.lon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SampledLocation {
    pub lat: f64,
    pub lon: f64,
    pub city: String,
}

fn wrap_lon(lon: f64) -> f64 {
    if (-180.0..=180.0).contains(&lon) {
        return lon;
    }
    let mut l = (lon + 180.0) % 360.0;
    if l < 0.0 {
        l += 360.0;
    }
    l - 180.0
}

/// Draw `n` locations: a city chosen uniformly, then an isotropic 2-D
/// Gaussian offset with per-axis standard deviation `sigma_km`,
/// converted to degrees in the local tangent plane at the city latitude.
pub fn sample_locations(
    cities: &[CityCenter],
    n: usize,
    sigma_km: f64,
    seed: u64,
) -> Result<Vec<SampledLocation>> {
    if cities.is_empty() {
        return Err(Error::config("city list is empty".to_string()));
    }
    if sigma_km < 0.0 {
        return Err(Error::config("sigma_km must be non-negative".to_string()));
    }
    for c in cities {
        c.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let city = &cities[rng.random_range(0..cities.len())];
        let east_km = normal.sample(&mut rng) * sigma_km;
        let north_km = normal.sample(&mut rng) * sigma_km;
        let km_per_deg_lon = KM_PER_DEG_LAT * (city.lat.to_radians()).cos();
        let lat = (city.lat + north_km / KM_PER_DEG_LAT).clamp(-90.0, 90.0);
        let lon = if km_per_deg_lon.abs() < 1e-9 {
            city.lon
        } else {
            wrap_lon(city.lon + east_km / km_per_deg_lon)
        };
        out.push(SampledLocation {
            lat,
            lon,
            city: city.name.clone(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_city() -> Vec<CityCenter> {
        vec![CityCenter {
            name: "Lugano".to_string(),
            lat: 46.0037,
            lon: 8.9511,
        }]
    }

    #[test]
    fn zero_sigma_pins_samples_to_center() {
        let cities = one_city();
        let samples = sample_locations(&cities, 50, 0.0, 1).unwrap();
        for s in samples {
            assert_eq!(s.lat, cities[0].lat);
            assert_eq!(s.lon, cities[0].lon);
            assert_eq!(s.city, "Lugano");
        }
    }

    #[test]
    fn empirical_std_matches_sigma_within_3_percent() {
        let cities = one_city();
        let sigma = 50.0;
        let samples = sample_locations(&cities, 10_000, sigma, 7).unwrap();
        let km_per_deg_lon = KM_PER_DEG_LAT * cities[0].lat.to_radians().cos();
        let north: Vec<f64> = samples
            .iter()
            .map(|s| (s.lat - cities[0].lat) * KM_PER_DEG_LAT)
            .collect();
        let east: Vec<f64> = samples
            .iter()
            .map(|s| (s.lon - cities[0].lon) * km_per_deg_lon)
            .collect();
        for axis in [&north, &east] {
            let mean: f64 = axis.iter().sum::<f64>() / axis.len() as f64;
            let var: f64 =
                axis.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / axis.len() as f64;
            let std = var.sqrt();
            assert!(
                (std - sigma).abs() / sigma < 0.03,
                "axis std {std} vs {sigma}"
            );
        }
    }

    #[test]
    fn same_seed_reproduces_list() {
        let cities = one_city();
        let a = sample_locations(&cities, 20, 50.0, 3).unwrap();
        let b = sample_locations(&cities, 20, 50.0, 3).unwrap();
        assert_eq!(a, b);
        let c = sample_locations(&cities, 20, 50.0, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_empty_city_list() {
        assert!(sample_locations(&[], 1, 50.0, 0).is_err());
    }

    #[test]
    fn offsets_are_isotropic_in_km() {
        let cities = one_city();
        let samples = sample_locations(&cities, 20_000, 50.0, 11).unwrap();
        let km_per_deg_lon = KM_PER_DEG_LAT * cities[0].lat.to_radians().cos();
        let std_of = |vals: Vec<f64>| {
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64).sqrt()
        };
        let north = std_of(
            samples
                .iter()
                .map(|s| (s.lat - cities[0].lat) * KM_PER_DEG_LAT)
                .collect(),
        );
        let east = std_of(
            samples
                .iter()
                .map(|s| (s.lon - cities[0].lon) * km_per_deg_lon)
                .collect(),
        );
        assert!((north - east).abs() / north < 0.05, "north {north} east {east}");
    }
}
