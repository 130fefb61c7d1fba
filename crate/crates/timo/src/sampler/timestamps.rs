use crate::error::{Error, Result};
use chrono::{Duration, Months, NaiveDate};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// First acquisition date of the ten-timestamp schedule.
pub const BASE_DATE: &str = "2017-06-30";
pub const NUM_TIMESTAMPS: usize = 10;
/// Acquisition window: ±15 days around each timestamp.
pub const WINDOW_DAYS: u32 = 15;

/// Ten dates at six-calendar-month intervals starting 2017-06-30, with a
/// single uniform integer offset in `[-jitter, +jitter]` days applied to
/// the whole schedule.
pub fn sample_timestamp_grid(seed: u64, jitter_days: u32) -> Result<Vec<NaiveDate>> {
    let base = NaiveDate::parse_from_str(BASE_DATE, "%Y-%m-%d").expect("valid base date");
    let offset = if jitter_days == 0 {
        0
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.random_range(-(jitter_days as i64)..=jitter_days as i64)
    };
    let mut out = Vec::with_capacity(NUM_TIMESTAMPS);
    for i in 0..NUM_TIMESTAMPS {
        let stepped = base
            .checked_add_months(Months::new(6 * i as u32))
            .ok_or_else(|| Error::config("date overflow".to_string()))?;
        out.push(stepped + Duration::days(offset));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_jitter_gives_calendar_grid() {
        let dates = sample_timestamp_grid(0, 0).unwrap();
        let expect = [
            "2017-06-30",
            "2017-12-30",
            "2018-06-30",
            "2018-12-30",
            "2019-06-30",
            "2019-12-30",
            "2020-06-30",
            "2020-12-30",
            "2021-06-30",
            "2021-12-30",
        ];
        let got: Vec<String> = dates.iter().map(|d| d.format("%Y-%m-%d").to_string()).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn gaps_stay_within_calendar_bounds() {
        for seed in 0..50 {
            let dates = sample_timestamp_grid(seed, 30).unwrap();
            assert_eq!(dates.len(), NUM_TIMESTAMPS);
            for w in dates.windows(2) {
                let gap = (w[1] - w[0]).num_days();
                assert!((181..=184).contains(&gap), "gap {gap} for seed {seed}");
                assert!(w[1] > w[0]);
            }
        }
    }

    #[test]
    fn jitter_shifts_whole_schedule_uniformly() {
        let a = sample_timestamp_grid(5, 15).unwrap();
        let b = sample_timestamp_grid(5, 15).unwrap();
        assert_eq!(a, b);
        let base = sample_timestamp_grid(5, 0).unwrap();
        let shift = (a[0] - base[0]).num_days();
        assert!(shift.abs() <= 15);
        for (x, y) in a.iter().zip(&base) {
            assert_eq!((*x - *y).num_days(), shift);
        }
    }
}
