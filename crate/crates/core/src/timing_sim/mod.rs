//! Deterministic synthetic-world generation for sensor time-synchronization
//! studies: asynchronous LiDAR/camera schedules, per-point sweep timing,
//! timestamp bias and jitter, calibration noise — with exact ground-truth
//! pixel correspondences for every generated point.

mod scene;
mod simulate;

pub use scene::{demo_scene, lateral_wall_scene, ray_cast, SceneObject, Shape};
pub use simulate::{
    simulate, CameraFacing, GroundTruthRecord, SamplePair, SimulationOutput, SimulationSetup,
    SyntheticScene,
};

use thiserror::Error;

use crate::geometry::GeometryError;

#[derive(Debug, Error)]
pub enum TimingError {
    #[error("empty scene: no objects to ray-cast")]
    EmptyScene,
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Nominal sensor timing. In nuScenes the LiDAR spins at 20 Hz and the
/// cameras expose at 12 Hz; one sweep takes a full rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorSchedule {
    pub lidar_hz: f64,
    pub camera_hz: f64,
    /// Seconds for one full LiDAR rotation; at most one LiDAR period.
    pub lidar_sweep_duration: f64,
    /// Injected delay between a camera exposure and its recorded timestamp.
    pub camera_timestamp_bias: f64,
    /// Seconds of schedule to generate.
    pub duration: f64,
}

impl Default for SensorSchedule {
    fn default() -> Self {
        SensorSchedule {
            lidar_hz: 20.0,
            camera_hz: 12.0,
            lidar_sweep_duration: 0.05,
            camera_timestamp_bias: 0.0,
            duration: 1.0,
        }
    }
}

impl SensorSchedule {
    pub fn validate(&self) -> Result<(), TimingError> {
        if !(self.lidar_hz > 0.0) || !self.lidar_hz.is_finite() {
            return Err(TimingError::InvalidSchedule("lidar_hz must be > 0".into()));
        }
        if !(self.camera_hz > 0.0) || !self.camera_hz.is_finite() {
            return Err(TimingError::InvalidSchedule("camera_hz must be > 0".into()));
        }
        if self.lidar_sweep_duration < 0.0 || !self.lidar_sweep_duration.is_finite() {
            return Err(TimingError::InvalidSchedule(
                "lidar_sweep_duration must be >= 0".into(),
            ));
        }
        if self.lidar_sweep_duration > 1.0 / self.lidar_hz + 1e-12 {
            return Err(TimingError::InvalidSchedule(
                "lidar_sweep_duration exceeds one LiDAR period".into(),
            ));
        }
        if !self.camera_timestamp_bias.is_finite() {
            return Err(TimingError::InvalidSchedule(
                "camera_timestamp_bias must be finite".into(),
            ));
        }
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(TimingError::InvalidSchedule("duration must be > 0".into()));
        }
        Ok(())
    }
}

pub fn quantize_us(seconds: f64) -> i64 {
    (seconds * 1e6).round() as i64
}

/// Generate the schedule over `[0, duration)`, microsecond-quantized.
///
/// LiDAR sweeps start at `k / lidar_hz`; the returned camera times are the
/// recorded timestamps `j / camera_hz + camera_timestamp_bias` (the exposure
/// itself happens at the nominal instant).
pub fn generate_schedule(sched: &SensorSchedule) -> Result<(Vec<i64>, Vec<i64>), TimingError> {
    sched.validate()?;
    let mut lidar = Vec::new();
    let mut k = 0u64;
    loop {
        let t = k as f64 / sched.lidar_hz;
        if t >= sched.duration {
            break;
        }
        lidar.push(quantize_us(t));
        k += 1;
    }
    let mut camera = Vec::new();
    let mut j = 0u64;
    loop {
        let nominal = j as f64 / sched.camera_hz;
        if nominal >= sched.duration {
            break;
        }
        let recorded = nominal + sched.camera_timestamp_bias;
        if recorded >= 0.0 && recorded < sched.duration {
            camera.push(quantize_us(recorded));
        }
        j += 1;
    }
    Ok((lidar, camera))
}

/// Ego motion model for the simulator.
#[derive(Debug, Clone, PartialEq)]
pub enum EgoTrajectory {
    /// Start at the origin with identity heading-aligned orientation and move
    /// in a straight line.
    ConstantVelocity { speed: f64, heading: [f64; 3] },
    /// Linear + slerp interpolation of timestamped waypoints.
    PiecewiseLinear {
        waypoints: Vec<crate::calib_io::EgoPoseRecord>,
    },
}

impl EgoTrajectory {
    pub fn constant_velocity(speed: f64, heading: [f64; 3]) -> Result<Self, TimingError> {
        if !(speed >= 0.0) || !speed.is_finite() {
            return Err(TimingError::InvalidTrajectory("speed must be >= 0".into()));
        }
        let n = (heading[0] * heading[0] + heading[1] * heading[1] + heading[2] * heading[2])
            .sqrt();
        if !n.is_finite() || n == 0.0 {
            return Err(TimingError::InvalidTrajectory(
                "heading must be a nonzero vector".into(),
            ));
        }
        Ok(EgoTrajectory::ConstantVelocity {
            speed,
            heading: [heading[0] / n, heading[1] / n, heading[2] / n],
        })
    }

    pub fn validate(&self) -> Result<(), TimingError> {
        match self {
            EgoTrajectory::ConstantVelocity { speed, heading } => {
                if !(*speed >= 0.0) || !speed.is_finite() {
                    return Err(TimingError::InvalidTrajectory("speed must be >= 0".into()));
                }
                let n = (heading[0] * heading[0]
                    + heading[1] * heading[1]
                    + heading[2] * heading[2])
                    .sqrt();
                if (n - 1.0).abs() > 1e-9 {
                    return Err(TimingError::InvalidTrajectory(
                        "heading must be unit-norm".into(),
                    ));
                }
                Ok(())
            }
            EgoTrajectory::PiecewiseLinear { waypoints } => {
                if waypoints.is_empty() {
                    return Err(TimingError::InvalidTrajectory(
                        "waypoint list is empty".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    /// `global <- ego` pose at a continuous time in seconds.
    pub fn pose_at_secs(&self, t: f64) -> Result<crate::geometry::RigidTransform, TimingError> {
        use crate::geometry::{interpolate_pose, RigidTransform, Vec3};
        match self {
            EgoTrajectory::ConstantVelocity { speed, heading } => {
                Ok(RigidTransform::from_translation(Vec3::new(
                    heading[0] * speed * t,
                    heading[1] * speed * t,
                    heading[2] * speed * t,
                )))
            }
            EgoTrajectory::PiecewiseLinear { waypoints } => {
                Ok(interpolate_pose(waypoints, quantize_us(t))?)
            }
        }
    }
}

/// Perturbations applied to the corrupted (downstream-facing) outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// Std-dev of the calibration rotation perturbation angle, radians.
    pub extrinsic_rotation_sigma: f64,
    /// Per-axis std-dev of the calibration translation perturbation, meters.
    pub extrinsic_translation_sigma: f64,
    /// Std-dev of recorded-timestamp jitter, seconds.
    pub timestamp_jitter_sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none(seed: u64) -> Self {
        NoiseSpec {
            extrinsic_rotation_sigma: 0.0,
            extrinsic_translation_sigma: 0.0,
            timestamp_jitter_sigma: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), TimingError> {
        for (name, v) in [
            ("extrinsic_rotation_sigma", self.extrinsic_rotation_sigma),
            (
                "extrinsic_translation_sigma",
                self.extrinsic_translation_sigma,
            ),
            ("timestamp_jitter_sigma", self.timestamp_jitter_sigma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(TimingError::InvalidSchedule(format!(
                    "{name} must be >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// How LiDAR point times are paired with camera exposures when computing the
/// worst-case timing gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchingPolicy {
    /// Each sweep is paired with the exposure closest to its start time
    /// (keyframe-style association); per-point emission times then span the
    /// whole sweep relative to that one exposure.
    NearestExposure,
    /// The whole sweep is treated as an instant at its start time; the gap is
    /// measured from sweep start to its nearest exposure only.
    SweepStartToExposure,
}

/// Greatest common divisor on u128.
fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Best rational approximation p/q of `x` with q <= max_den, by continued
/// fractions. Returns None when the approximation is not essentially exact.
fn rationalize(x: f64, max_den: u64) -> Option<(u64, u64)> {
    if !(x > 0.0) || !x.is_finite() {
        return None;
    }
    let (mut h0, mut h1): (u128, u128) = (0, 1);
    let (mut k0, mut k1): (u128, u128) = (1, 0);
    let mut frac = x;
    for _ in 0..64 {
        let a = frac.floor();
        if a > u64::MAX as f64 {
            return None;
        }
        let a_int = a as u128;
        let h2 = a_int.checked_mul(h1)?.checked_add(h0)?;
        let k2 = a_int.checked_mul(k1)?.checked_add(k0)?;
        if k2 > max_den as u128 {
            break;
        }
        (h0, h1) = (h1, h2);
        (k0, k1) = (k1, k2);
        let rem = frac - a;
        if rem.abs() < 1e-12 {
            break;
        }
        frac = 1.0 / rem;
    }
    if k1 == 0 {
        return None;
    }
    let approx = h1 as f64 / k1 as f64;
    if ((approx - x) / x).abs() < 1e-9 {
        Some((h1 as u64, k1 as u64))
    } else {
        None
    }
}

/// Exact schedule hyperperiod in microseconds, when the two rates are
/// (close to) small rationals and the result is representable. The quantized
/// schedule repeats with this period, so enumerating one hyperperiod covers
/// the steady state exactly.
pub fn schedule_hyperperiod_us(lidar_hz: f64, camera_hz: f64) -> Option<i64> {
    // period of f = p/q Hz is 1e6 * q / p microseconds
    let (lp, lq) = rationalize(lidar_hz, 1_000_000)?;
    let (cp, cq) = rationalize(camera_hz, 1_000_000)?;
    // reduce each period numerator/denominator
    let reduce = |num: u128, den: u128| {
        let g = gcd(num, den);
        (num / g, den / g)
    };
    let (a, b) = reduce(1_000_000u128 * lq as u128, lp as u128);
    let (c, d) = reduce(1_000_000u128 * cq as u128, cp as u128);
    // lcm of rationals a/b and c/d is lcm(a, c) / gcd(b, d); the smallest
    // integer multiple of the reduced value A/B is A itself.
    let lcm_num = a / gcd(a, c) * c;
    let (hn, hd) = reduce(lcm_num, gcd(b, d));
    let _ = hd; // reduced denominator is 1 by construction of reduce
    if hn > 10_000_000_000u128 {
        return None; // > 10^4 seconds: fall back to the configured duration
    }
    Some(hn as i64)
}

/// Worst-case ego displacement between a LiDAR point's emission and the
/// camera exposure it is paired with.
///
/// The quantized schedule is treated as periodic and enumerated over one full
/// hyperperiod (or the configured duration when the hyperperiod is not
/// representable), so the returned gap is the exact steady-state maximum.
pub fn worst_case_displacement(
    sched: &SensorSchedule,
    speed: f64,
    matching: MatchingPolicy,
) -> Result<f64, TimingError> {
    sched.validate()?;
    if !(speed >= 0.0) || !speed.is_finite() {
        return Err(TimingError::InvalidTrajectory("speed must be >= 0".into()));
    }
    let window_us = schedule_hyperperiod_us(sched.lidar_hz, sched.camera_hz)
        .unwrap_or_else(|| quantize_us(sched.duration));
    let sweep_us = quantize_us(sched.lidar_sweep_duration);

    // Sweep starts within one window.
    let mut sweeps = Vec::new();
    let mut k = 0u64;
    loop {
        let t = quantize_us(k as f64 / sched.lidar_hz);
        if t >= window_us {
            break;
        }
        sweeps.push(t);
        k += 1;
    }
    // Recorded exposures extended one camera period beyond both window edges
    // so nearest-neighbor matching at the edges sees the periodic extension.
    let cam_period = 1.0 / sched.camera_hz;
    let mut exposures = Vec::new();
    let j_lo = ((-(sched.camera_timestamp_bias.abs()) - cam_period) * sched.camera_hz).floor()
        as i64
        - 2;
    let j_hi = ((window_us as f64 / 1e6 + sched.lidar_sweep_duration
        + sched.camera_timestamp_bias.abs()
        + cam_period)
        * sched.camera_hz)
        .ceil() as i64
        + 2;
    for j in j_lo..=j_hi {
        exposures.push(quantize_us(
            j as f64 / sched.camera_hz + sched.camera_timestamp_bias,
        ));
    }
    if sweeps.is_empty() || exposures.is_empty() {
        return Ok(0.0);
    }

    let mut max_gap_us: i64 = 0;
    for &s in &sweeps {
        // exposure nearest to the sweep start; ties take the earlier exposure
        let e = *exposures
            .iter()
            .min_by_key(|&&e| ((e - s).abs(), e))
            .expect("non-empty exposures");
        let gap = match matching {
            MatchingPolicy::NearestExposure => {
                // per-point times span [s, s + sweep]; |t - e| is maximized
                // at an interval endpoint
                (s - e).abs().max((s + sweep_us - e).abs())
            }
            MatchingPolicy::SweepStartToExposure => (s - e).abs(),
        };
        max_gap_us = max_gap_us.max(gap);
    }
    Ok(speed * max_gap_us as f64 / 1e6)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nominal_rates_give_expected_counts() {
        let sched = SensorSchedule::default();
        let (lidar, camera) = generate_schedule(&sched).unwrap();
        assert_eq!(lidar.len(), 20);
        assert_eq!(camera.len(), 12);
        assert_eq!(lidar[0], 0);
        assert_eq!(lidar[1], 50_000);
        assert_eq!(camera[1], 83_333);
        assert_eq!(camera[3], 250_000);
    }

    #[test]
    fn equal_rates_coincide() {
        let sched = SensorSchedule {
            camera_hz: 20.0,
            ..SensorSchedule::default()
        };
        let (lidar, camera) = generate_schedule(&sched).unwrap();
        assert_eq!(lidar, camera);
    }

    #[test]
    fn bias_shifts_every_exposure() {
        let base = SensorSchedule::default();
        let biased = SensorSchedule {
            camera_timestamp_bias: 0.01,
            ..base
        };
        let (_, cam0) = generate_schedule(&base).unwrap();
        let (_, cam1) = generate_schedule(&biased).unwrap();
        assert_eq!(cam0.len(), cam1.len());
        for (a, b) in cam0.iter().zip(&cam1) {
            assert_eq!(b - a, 10_000);
        }
    }

    #[test]
    fn invalid_schedules_rejected() {
        let bad_rate = SensorSchedule {
            lidar_hz: 0.0,
            ..SensorSchedule::default()
        };
        assert!(generate_schedule(&bad_rate).is_err());
        let bad_sweep = SensorSchedule {
            lidar_sweep_duration: 0.06,
            ..SensorSchedule::default()
        };
        assert!(generate_schedule(&bad_sweep).is_err());
    }

    #[test]
    fn hyperperiod_of_nominal_rates_is_250ms() {
        assert_eq!(schedule_hyperperiod_us(20.0, 12.0), Some(250_000));
        assert_eq!(schedule_hyperperiod_us(20.0, 20.0), Some(50_000));
        assert_eq!(schedule_hyperperiod_us(10.0, 12.5), Some(400_000));
    }

    #[test]
    fn worst_case_zero_speed_is_zero() {
        let sched = SensorSchedule::default();
        assert_eq!(
            worst_case_displacement(&sched, 0.0, MatchingPolicy::NearestExposure).unwrap(),
            0.0
        );
    }

    #[test]
    fn worst_case_matches_direct_enumeration() {
        // Independent oracle: brute-force the same definition over a 250 ms
        // window with exposures enumerated far beyond both edges.
        let sched = SensorSchedule::default();
        let speed = 40.0 / 3.6;
        let sweep_us = 50_000i64;
        let sweeps: Vec<i64> = (0..5).map(|k| k * 50_000).collect();
        let exposures: Vec<i64> = (-10..20)
            .map(|j| (j as f64 / 12.0 * 1e6).round() as i64)
            .collect();
        let mut expect_nearest = 0i64;
        let mut expect_instant = 0i64;
        for &s in &sweeps {
            let e = *exposures.iter().min_by_key(|&&e| ((e - s).abs(), e)).unwrap();
            expect_nearest = expect_nearest.max((s - e).abs().max((s + sweep_us - e).abs()));
            expect_instant = expect_instant.max((s - e).abs());
        }
        let got_nearest =
            worst_case_displacement(&sched, speed, MatchingPolicy::NearestExposure).unwrap();
        let got_instant =
            worst_case_displacement(&sched, speed, MatchingPolicy::SweepStartToExposure).unwrap();
        assert!((got_nearest - speed * expect_nearest as f64 / 1e6).abs() < 1e-12);
        assert!((got_instant - speed * expect_instant as f64 / 1e6).abs() < 1e-12);
        // hand-checked values for the 20 Hz / 12 Hz schedule
        assert_eq!(expect_nearest, 83_333);
        assert_eq!(expect_instant, 33_333);
    }

    #[test]
    fn worst_case_linear_in_speed() {
        let sched = SensorSchedule::default();
        for policy in [
            MatchingPolicy::NearestExposure,
            MatchingPolicy::SweepStartToExposure,
        ] {
            let d1 = worst_case_displacement(&sched, 3.7, policy).unwrap();
            let d2 = worst_case_displacement(&sched, 7.4, policy).unwrap();
            assert!((d2 - 2.0 * d1).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_velocity_pose() {
        let traj = EgoTrajectory::constant_velocity(10.0, [1.0, 0.0, 0.0]).unwrap();
        let pose = traj.pose_at_secs(0.5).unwrap();
        assert!((pose.translation.x - 5.0).abs() < 1e-12);
        assert_eq!(pose.translation.y, 0.0);
    }
}
