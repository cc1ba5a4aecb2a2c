//! Deterministic synthetic datasets for demos, gallery bundles and tests.

use serde_json::{json, Value as Json};

use crate::rng::SplitMix64;

fn normal(rng: &mut SplitMix64) -> f64 {
    // Box-Muller; 1 - u keeps the logarithm finite.
    let u1 = 1.0 - rng.next_f64();
    let u2 = rng.next_f64();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// `n` points around `k` centres spread on a circle of radius 10.
pub fn blobs(n: usize, k: usize, seed: u64) -> Vec<Json> {
    let mut rng = SplitMix64::new(seed);
    let k = k.max(1);
    (0..n)
        .map(|i| {
            let c = i % k;
            let angle = std::f64::consts::TAU * c as f64 / k as f64;
            let x = 10.0 * angle.cos() + 1.5 * normal(&mut rng);
            let y = 10.0 * angle.sin() + 1.5 * normal(&mut rng);
            json!({"x": x, "y": y, "blob": c})
        })
        .collect()
}

/// Two correlated clusters plus a uniform background, for density views.
pub fn scatter(n: usize, seed: u64) -> Vec<Json> {
    let mut rng = SplitMix64::new(seed);
    (0..n)
        .map(|i| {
            let (x, y) = match i % 5 {
                0 | 1 => {
                    let a = normal(&mut rng);
                    (30.0 + 8.0 * a, 40.0 + 6.0 * a + 4.0 * normal(&mut rng))
                }
                2 | 3 => (70.0 + 6.0 * normal(&mut rng), 65.0 + 9.0 * normal(&mut rng)),
                _ => (100.0 * rng.next_f64(), 100.0 * rng.next_f64()),
            };
            json!({"x": x, "y": y})
        })
        .collect()
}

/// Points `{x, y}` on a noisy ring of radius 10. Lloyd iterations creep
/// around the ring, so k-means takes many steps to settle.
pub fn ring(n: usize, seed: u64) -> Vec<Json> {
    let mut rng = SplitMix64::new(seed);
    (0..n)
        .map(|_| {
            let a = std::f64::consts::TAU * rng.next_f64();
            let r = 10.0 + 0.8 * normal(&mut rng);
            json!({"x": r * a.cos(), "y": r * a.sin()})
        })
        .collect()
}

/// Taxi-pickup-like records: id, lat, lon, pickup_ts, hour, weekday.
pub fn taxi_trips(n: usize, seed: u64) -> Vec<Json> {
    let mut rng = SplitMix64::new(seed);
    let hotspots = [(40.7580, -73.9855), (40.7128, -74.0060), (40.7484, -73.9857), (40.6413, -73.7781)];
    // 2015-01-05 was a Monday.
    let epoch_day = 16_440u64;
    (0..n)
        .map(|i| {
            let (lat, lon) = hotspots[rng.below(hotspots.len() as u64) as usize];
            let lat = lat + 0.01 * normal(&mut rng);
            let lon = lon + 0.01 * normal(&mut rng);
            let secs = rng.below(28 * 86_400);
            let day = secs / 86_400;
            let hour = secs % 86_400 / 3600;
            let (y, m, d) = civil_from_days(epoch_day + day);
            let ts = format!(
                "{y:04}-{m:02}-{d:02}T{hour:02}:{:02}:{:02}",
                secs % 3600 / 60,
                secs % 60
            );
            json!({
                "id": i,
                "lat": lat,
                "lon": lon,
                "pickup_ts": ts,
                "hour": hour,
                "weekday": day % 7,
            })
        })
        .collect()
}

// Howard Hinnant's days-to-civil conversion.
fn civil_from_days(days: u64) -> (i64, u32, u32) {
    let z = days as i64 + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    let y = yoe + era * 400 + i64::from(m <= 2);
    (y, m, d)
}
