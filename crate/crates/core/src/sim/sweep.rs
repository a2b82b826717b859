//! Registration accuracy versus viewing distance and tag size.

use std::fmt::Write as _;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::colocation::{
    alignment_transform, default_probes, register, spatial_inconsistency, synthetic_observation, NoiseSpec,
    ObservationSetup, UserId,
};
use crate::geometry::{rotation_about, Pose, Vec3};

pub const SWEEP_CSV_HEADER: &str = "distance,tagSize,meanInconsistency";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SweepCell {
    pub distance: f64,
    pub tag_size: f64,
    /// Meters.
    pub mean_inconsistency: f64,
    pub std_inconsistency: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub fn cell(&self, distance: f64, tag_size: f64) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| (c.distance - distance).abs() < 1e-12 && (c.tag_size - tag_size).abs() < 1e-12)
    }

    /// Mean over all cells viewed from at most `max_distance`.
    pub fn mean_within(&self, max_distance: f64) -> Option<f64> {
        let v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.distance <= max_distance + 1e-12)
            .map(|c| c.mean_inconsistency)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{SWEEP_CSV_HEADER}\n");
        for c in &self.cells {
            let _ = writeln!(out, "{},{},{}", c.distance, c.tag_size, c.mean_inconsistency);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:>10} {:>10} {:>14} {:>12} {:>7}\n", "distance", "tagSize", "mean (cm)", "std (cm)", "trials");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{:>10.2} {:>10.2} {:>14.3} {:>12.3} {:>7}",
                c.distance,
                c.tag_size,
                c.mean_inconsistency * 100.0,
                c.std_inconsistency * 100.0,
                c.trials
            );
        }
        out
    }
}

/// A random pair of world frames viewing the same tag. Drawn from the trial
/// index alone so every cell sees the same placements.
fn placement(seed: u64, trial: usize) -> (Pose, Pose) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let pose = |rng: &mut ChaCha8Rng| {
        let p = Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(0.0..1.5), rng.random_range(-3.0..3.0));
        Pose::from_position(p).with_rotation(rotation_about(Vec3::y(), rng.random_range(-180.0..180.0)))
    };
    (pose(&mut rng), pose(&mut rng))
}

/// Registers two synthetic users per trial and measures how far the noisy
/// alignment moves the probe cube relative to the true one.
///
/// Trial `i` uses the same placement and the same noise draws in every
/// cell; only the distance and tag-size scaling differ between cells.
pub fn registration_sweep(
    distances: &[f64],
    tag_sizes: &[f64],
    noise: &NoiseSpec,
    trials: usize,
) -> Result<SweepTable, SimError> {
    if trials == 0 {
        return Err(SimError::Scenario("a sweep needs at least one trial".into()));
    }
    if distances.iter().chain(tag_sizes).any(|v| !(*v > 0.0)) {
        return Err(SimError::Scenario("distances and tag sizes must be positive".into()));
    }
    let (a, b) = (UserId::from("a"), UserId::from("b"));
    let mut cells = Vec::new();
    for &tag_size in tag_sizes {
        for &distance in distances {
            let setup = ObservationSetup {
                tag_id: 0,
                tag_size_meters: tag_size,
                observation_distance: distance,
                timestamp: 0.0,
            };
            let mut samples = Vec::with_capacity(trials);
            for i in 0..trials {
                let (ta, tb) = placement(noise.seed, i);
                let s = noise.seed.wrapping_mul(1_000_003).wrapping_add(2 * i as u64);
                let oa = synthetic_observation(&ta, &setup, &noise.with_seed(s));
                let ob = synthetic_observation(&tb, &setup, &noise.with_seed(s + 1));
                let est = alignment_transform(
                    &register(&a, Some(&oa)).map_err(|e| SimError::Scenario(e.to_string()))?,
                    &register(&b, Some(&ob)).map_err(|e| SimError::Scenario(e.to_string()))?,
                )
                .map_err(|e| SimError::Scenario(e.to_string()))?;
                let exact = |p: &Pose, u: &UserId| crate::colocation::RegistrationRecord {
                    user_id: u.clone(),
                    tag_id: 0,
                    tag_pose: *p,
                    registered_at: 0.0,
                };
                let truth = alignment_transform(&exact(&ta, &a), &exact(&tb, &b)).expect("same tag");
                let probes = default_probes(&ta.position);
                samples.push(spatial_inconsistency(&est, &truth, &probes).expect("probes"));
            }
            let n = samples.len() as f64;
            let mean = samples.iter().sum::<f64>() / n;
            let std = if samples.len() > 1 {
                (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            cells.push(SweepCell {
                distance,
                tag_size,
                mean_inconsistency: mean,
                std_inconsistency: std,
                trials,
            });
        }
    }
    Ok(SweepTable { cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_gives_zero() {
        let t = registration_sweep(&[0.5, 5.0], &[0.1], &NoiseSpec::zero(), 5).unwrap();
        assert!(t.cells.iter().all(|c| c.mean_inconsistency < 1e-9));
    }

    #[test]
    fn csv_header_only_when_empty() {
        assert_eq!(SweepTable::default().to_csv(), format!("{SWEEP_CSV_HEADER}\n"));
        assert!(registration_sweep(&[1.0], &[0.1], &NoiseSpec::default(), 0).is_err());
    }

    #[test]
    fn cells_follow_distance_and_size() {
        let t = registration_sweep(&[1.0, 5.0], &[0.1, 0.2], &NoiseSpec::default(), 40).unwrap();
        let m = |d, s| t.cell(d, s).unwrap().mean_inconsistency;
        assert!(m(5.0, 0.1) >= m(1.0, 0.1));
        assert!(m(5.0, 0.2) <= m(5.0, 0.1));
    }
}
