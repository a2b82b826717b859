use serde::{Deserialize, Serialize};

use crate::geometry::Pose;

/// Slack on the interval comparison so that ticks landing exactly on a
/// multiple of `min_interval` are not rejected by float rounding.
pub const TIME_EPSILON: f64 = 1e-9;

/// When an owner re-sends an object's state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ChangePolicy {
    /// Meters.
    pub position_threshold: f64,
    /// Degrees.
    pub rotation_threshold: f64,
    /// Relative change of any scale component.
    pub scale_threshold: f64,
    /// Seconds between sends of one object.
    pub min_interval: f64,
}

impl Default for ChangePolicy {
    fn default() -> Self {
        Self {
            position_threshold: 0.005,
            rotation_threshold: 1.0,
            scale_threshold: 0.01,
            min_interval: 1.0 / 60.0,
        }
    }
}

impl ChangePolicy {
    pub fn validate(&self) -> Result<(), String> {
        let nonneg = [self.position_threshold, self.rotation_threshold, self.scale_threshold];
        if nonneg.iter().any(|v| !(*v >= 0.0)) {
            return Err("thresholds must be nonnegative".into());
        }
        if !(self.min_interval > 0.0) {
            return Err("min interval must be positive".into());
        }
        Ok(())
    }

    pub fn max_rate_hz(&self) -> f64 {
        1.0 / self.min_interval
    }
}

/// Whether `current` differs enough from the last sent state `prev`, and
/// enough time has passed since it was sent.
pub fn should_sync(prev: &Pose, current: &Pose, last_sent: f64, now: f64, policy: &ChangePolicy) -> bool {
    if now - last_sent + TIME_EPSILON < policy.min_interval {
        return false;
    }
    let moved = (current.position - prev.position).norm() > policy.position_threshold;
    let turned = prev
        .unit_rotation()
        .angle_to(&current.unit_rotation())
        .to_degrees()
        > policy.rotation_threshold;
    let rescaled = prev
        .scale
        .iter()
        .zip(current.scale.iter())
        .map(|(p, c)| ((c - p) / p).abs())
        .fold(0.0, f64::max)
        > policy.scale_threshold;
    moved || turned || rescaled
}
