//! Synthetic sweep generation with exact per-point ground truth.
//!
//! The generator ray-casts LiDAR returns from the ego pose at each point's
//! emission time (azimuth-proportional across the sweep), while ground-truth
//! pixels project the same measured points with the exact camera pose at the
//! true exposure instant. The *corrupted* outputs — what a downstream
//! projection consumes — carry calibration noise, timestamp bias, and jitter.

use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::calib_io::{
    write_calibration, write_ego_poses, write_pointcloud_bin, CalibIoError, CalibrationRecord,
    EgoPoseRecord, Point, PointCloud, SampleManifest,
};
use crate::geometry::{project_positions, CameraIntrinsics, Quaternion, RigidTransform, Vec3};
use crate::pnm::{write_pgm8, PnmError};
use crate::rng::StreamRng;
use crate::timing_sim::scene::{ray_cast, SceneObject};
use crate::timing_sim::{quantize_us, EgoTrajectory, NoiseSpec, SensorSchedule, TimingError};

/// Which way the camera's optical axis points in the ego frame
/// (ego: x forward, y left, z up; camera: x right, y down, z forward).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CameraFacing {
    Forward,
    Left,
    Right,
}

impl CameraFacing {
    fn rotation(self) -> Quaternion {
        let m = match self {
            CameraFacing::Forward => [[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]],
            CameraFacing::Left => [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]],
            CameraFacing::Right => [[-1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, -1.0, 0.0]],
        };
        Quaternion::from_matrix(&m)
    }
}

/// Fixed world the simulator runs in: true sensor mounts, camera model, and
/// LiDAR beam pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSetup {
    pub camera_name: String,
    pub lidar_name: String,
    pub intrinsics: CameraIntrinsics,
    /// True `ego <- camera` mount.
    pub camera_mount: RigidTransform,
    /// True `ego <- lidar` mount.
    pub lidar_mount: RigidTransform,
    pub rings: u32,
    pub azimuth_steps: u32,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    /// Rate of the emitted ego-pose log (constant-velocity trajectories only;
    /// piecewise trajectories re-emit their waypoints).
    pub pose_hz: f64,
    /// Which sweep of the schedule to emit.
    pub sample_index: usize,
    pub seed: u64,
}

impl SimulationSetup {
    pub fn standard(facing: CameraFacing, intrinsics: CameraIntrinsics, seed: u64) -> Self {
        SimulationSetup {
            camera_name: "CAM".into(),
            lidar_name: "LIDAR".into(),
            intrinsics,
            camera_mount: RigidTransform::new(facing.rotation(), Vec3::new(1.5, 0.0, 1.6)),
            lidar_mount: RigidTransform::new(Quaternion::IDENTITY, Vec3::new(0.0, 0.0, 1.84)),
            rings: 32,
            azimuth_steps: 720,
            elevation_min_deg: -30.0,
            elevation_max_deg: 10.0,
            pose_hz: 100.0,
            sample_index: 0,
            seed,
        }
    }
}

/// True and recorded times for the emitted (sweep, exposure) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePair {
    pub sweep_index: usize,
    /// Exact sweep start, microseconds.
    pub lidar_true_us: i64,
    /// Exact matched exposure instant, microseconds.
    pub camera_true_us: i64,
    /// Sweep timestamp as recorded (jitter applied).
    pub lidar_recorded_us: i64,
    /// Exposure timestamp as recorded (bias + jitter applied).
    pub camera_recorded_us: i64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthRecord {
    pub point_index: usize,
    /// Exact pixel under the true pose at the true exposure instant;
    /// NaN when the point sits behind the camera at that instant.
    pub u: f64,
    pub v: f64,
    pub category: u8,
}

/// One generated sweep plus everything needed to verify it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub objects: Vec<SceneObject>,
    /// Measured returns in the LiDAR frame at each point's emission time.
    pub cloud: PointCloud,
    /// Emission time per point, microseconds.
    pub emission_times_us: Vec<i64>,
    /// World position of each measured return (reconstructed from the stored
    /// f32 measurement so ground truth matches the emitted file exactly).
    pub world_points: Vec<Vec3>,
    pub ground_truth: Vec<GroundTruthRecord>,
    /// Category id per pixel seen by the camera at the true exposure instant.
    pub category_raster: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOutput {
    pub scene: SyntheticScene,
    /// Calibration as a consumer would load it (noise applied).
    pub calibration: Vec<CalibrationRecord>,
    /// Ego pose log (exact trajectory samples).
    pub ego_poses: Vec<EgoPoseRecord>,
    pub sample: SamplePair,
    /// Full recorded schedule: (sweep starts, exposure timestamps).
    pub schedule: (Vec<i64>, Vec<i64>),
    pub setup: SimulationSetup,
}

#[derive(Debug, Error)]
pub enum EmitError {
    #[error(transparent)]
    Calib(#[from] CalibIoError),
    #[error(transparent)]
    Pnm(#[from] PnmError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

fn perturb_mount(mount: &RigidTransform, noise: &NoiseSpec, rng: &StreamRng, base: u64) -> RigidTransform {
    if noise.extrinsic_rotation_sigma == 0.0 && noise.extrinsic_translation_sigma == 0.0 {
        return *mount;
    }
    let axis = Vec3::new(
        rng.normal_at(base),
        rng.normal_at(base + 1),
        rng.normal_at(base + 2),
    );
    let axis = if axis.norm() < 1e-12 {
        Vec3::new(1.0, 0.0, 0.0)
    } else {
        axis.normalized()
    };
    let angle = noise.extrinsic_rotation_sigma * rng.normal_at(base + 3);
    let delta_rot = Quaternion::from_axis_angle(axis, angle);
    let delta_t = Vec3::new(
        noise.extrinsic_translation_sigma * rng.normal_at(base + 4),
        noise.extrinsic_translation_sigma * rng.normal_at(base + 5),
        noise.extrinsic_translation_sigma * rng.normal_at(base + 6),
    );
    RigidTransform::new(delta_rot.mul(mount.rotation), mount.translation + delta_t)
}

fn intensity_for(category: u8) -> f32 {
    (50.0 + 40.0 * category as f32).min(255.0)
}

/// Run the simulator for the sweep selected by `setup.sample_index`.
///
/// Fully deterministic given `noise.seed`: random draws are indexed by
/// consumer and position, and point generation is collected in beam order, so
/// results do not depend on thread count or call order.
pub fn simulate(
    objects: &[SceneObject],
    traj: &EgoTrajectory,
    sched: &SensorSchedule,
    noise: &NoiseSpec,
    setup: &SimulationSetup,
) -> Result<SimulationOutput, TimingError> {
    sched.validate()?;
    traj.validate()?;
    noise.validate()?;
    if objects.is_empty() {
        return Err(TimingError::EmptyScene);
    }
    if setup.rings == 0 || setup.azimuth_steps == 0 {
        return Err(TimingError::InvalidSchedule(
            "rings and azimuth_steps must be positive".into(),
        ));
    }

    // True (unbiased, unjittered) instants.
    let sweep_starts_true: Vec<f64> = (0..)
        .map(|k| k as f64 / sched.lidar_hz)
        .take_while(|t| *t < sched.duration)
        .collect();
    let exposures_true: Vec<f64> = (0..)
        .map(|j| j as f64 / sched.camera_hz)
        .take_while(|t| *t < sched.duration)
        .collect();
    if setup.sample_index >= sweep_starts_true.len() {
        return Err(TimingError::InvalidSchedule(format!(
            "sample_index {} out of range: schedule has {} sweeps",
            setup.sample_index,
            sweep_starts_true.len()
        )));
    }
    if exposures_true.is_empty() {
        return Err(TimingError::InvalidSchedule(
            "no camera exposures within duration".into(),
        ));
    }

    let sweep_start = sweep_starts_true[setup.sample_index];

    // Nearest-exposure association on true times; ties take the earlier one.
    let exposure_true = exposures_true
        .iter()
        .copied()
        .min_by(|a, b| {
            let da = (a - sweep_start).abs();
            let db = (b - sweep_start).abs();
            da.partial_cmp(&db)
                .unwrap()
                .then(a.partial_cmp(b).unwrap())
        })
        .expect("non-empty exposures");

    // Recorded timestamps: bias shifts the camera record; jitter perturbs both.
    let jitter = StreamRng::new(noise.seed, "time-jitter");
    let k = setup.sample_index as u64;
    let lidar_jitter = noise.timestamp_jitter_sigma * jitter.normal_at(2 * k);
    let camera_jitter = noise.timestamp_jitter_sigma * jitter.normal_at(2 * k + 1);
    let sample = SamplePair {
        sweep_index: setup.sample_index,
        lidar_true_us: quantize_us(sweep_start),
        camera_true_us: quantize_us(exposure_true),
        lidar_recorded_us: quantize_us(sweep_start + lidar_jitter),
        camera_recorded_us: quantize_us(
            exposure_true + sched.camera_timestamp_bias + camera_jitter,
        ),
    };

    // Beam pattern.
    let rings = setup.rings;
    let steps = setup.azimuth_steps;
    let elev_lo = setup.elevation_min_deg.to_radians();
    let elev_hi = setup.elevation_max_deg.to_radians();

    struct Hit {
        local: [f32; 4], // x, y, z, intensity
        ring: u32,
        emission_us: i64,
        world: Vec3,
        category: u8,
    }

    // One column of beams per azimuth step; collected in azimuth order so the
    // output is invariant to the rayon worker count.
    let columns: Vec<Result<Vec<Hit>, TimingError>> = (0..steps)
        .into_par_iter()
        .map(|a| {
            let frac = a as f64 / steps as f64;
            let t_emit = sweep_start + frac * sched.lidar_sweep_duration;
            let ego = traj.pose_at_secs(t_emit)?;
            let lidar_world = ego.compose(&setup.lidar_mount);
            let azimuth = 2.0 * std::f64::consts::PI * frac;
            let (sin_a, cos_a) = azimuth.sin_cos();
            let mut hits = Vec::new();
            for r in 0..rings {
                let elev = if rings == 1 {
                    elev_lo
                } else {
                    elev_lo + (elev_hi - elev_lo) * r as f64 / (rings - 1) as f64
                };
                let (sin_e, cos_e) = elev.sin_cos();
                let local_dir = Vec3::new(cos_e * cos_a, cos_e * sin_a, sin_e);
                let world_dir = lidar_world.rotation.rotate(local_dir);
                if let Some((dist, category)) = ray_cast(objects, lidar_world.translation, world_dir)
                {
                    // The stored measurement is f32; reconstruct the world
                    // point from the quantized values so ground truth refers
                    // to the point exactly as written to disk.
                    let exact = local_dir.scale(dist);
                    let local = [
                        exact.x as f32,
                        exact.y as f32,
                        exact.z as f32,
                        intensity_for(category),
                    ];
                    let measured = Vec3::new(local[0] as f64, local[1] as f64, local[2] as f64);
                    hits.push(Hit {
                        local,
                        ring: r,
                        emission_us: quantize_us(t_emit),
                        world: lidar_world.apply(measured),
                        category,
                    });
                }
            }
            Ok(hits)
        })
        .collect();

    let mut points = Vec::new();
    let mut emission_times_us = Vec::new();
    let mut world_points = Vec::new();
    let mut categories = Vec::new();
    for column in columns {
        for h in column? {
            points.push(Point {
                x: h.local[0],
                y: h.local[1],
                z: h.local[2],
                intensity: h.local[3],
                ring: h.ring,
            });
            emission_times_us.push(h.emission_us);
            world_points.push(h.world);
            categories.push(h.category);
        }
    }

    // Ground truth: exact camera pose at the true exposure instant, same
    // projection code path as the downstream pipeline.
    let ego_at_exposure = traj.pose_at_secs(exposure_true)?;
    let cam_from_world = ego_at_exposure.compose(&setup.camera_mount).invert();
    let gt_projected = project_positions(&world_points, &cam_from_world, &setup.intrinsics);
    let ground_truth: Vec<GroundTruthRecord> = gt_projected
        .iter()
        .zip(&categories)
        .map(|(p, &category)| GroundTruthRecord {
            point_index: p.source_index,
            u: p.u,
            v: p.v,
            category,
        })
        .collect();

    // Category raster seen by the camera at the same instant (pixel centers).
    let k_int = &setup.intrinsics;
    let world_from_cam = ego_at_exposure.compose(&setup.camera_mount);
    let width = k_int.width;
    let height = k_int.height;
    let category_raster: Vec<u8> = (0..height)
        .into_par_iter()
        .flat_map_iter(|y| {
            let world_from_cam = world_from_cam;
            (0..width).map(move |x| {
                let dir_cam = Vec3::new(
                    (x as f64 + 0.5 - k_int.cx) / k_int.fx,
                    (y as f64 + 0.5 - k_int.cy) / k_int.fy,
                    1.0,
                );
                let dir_world = world_from_cam.rotation.rotate(dir_cam).normalized();
                match ray_cast(objects, world_from_cam.translation, dir_world) {
                    Some((_, cat)) => cat,
                    None => crate::timing_sim::scene::category::BACKGROUND,
                }
            })
        })
        .collect();

    // Corrupted calibration.
    let calib_rng = StreamRng::new(noise.seed, "calib-noise");
    let cam_mount = perturb_mount(&setup.camera_mount, noise, &calib_rng, 0);
    let lidar_mount = perturb_mount(&setup.lidar_mount, noise, &calib_rng, 8);
    let calibration = vec![
        CalibrationRecord {
            sensor_name: setup.lidar_name.clone(),
            translation: lidar_mount.translation.to_array(),
            rotation: lidar_mount.rotation.to_array(),
            camera_intrinsic: None,
        },
        CalibrationRecord {
            sensor_name: setup.camera_name.clone(),
            translation: cam_mount.translation.to_array(),
            rotation: cam_mount.rotation.to_array(),
            camera_intrinsic: Some(setup.intrinsics.to_matrix()),
        },
    ];

    // Ego pose log: exact trajectory samples covering every recorded
    // timestamp with margin.
    let ego_poses = match traj {
        EgoTrajectory::PiecewiseLinear { waypoints } => waypoints.clone(),
        EgoTrajectory::ConstantVelocity { .. } => {
            let margin = 0.25
                + sched.camera_timestamp_bias.abs()
                + 6.0 * noise.timestamp_jitter_sigma;
            let step = 1.0 / setup.pose_hz;
            let mut records = Vec::new();
            let mut t = -margin;
            while t <= sched.duration + margin {
                let pose = traj.pose_at_secs(t)?;
                records.push(EgoPoseRecord {
                    timestamp: quantize_us(t),
                    translation: pose.translation.to_array(),
                    rotation: pose.rotation.to_array(),
                });
                t += step;
            }
            records
        }
    };

    // Recorded schedule (bias applied to camera records, no jitter: the
    // per-sample jitter lives on the emitted sample manifest).
    let schedule = crate::timing_sim::generate_schedule(sched)?;

    Ok(SimulationOutput {
        scene: SyntheticScene {
            objects: objects.to_vec(),
            cloud: PointCloud {
                points,
                frame: setup.lidar_name.clone(),
                timestamp: sample.lidar_recorded_us,
            },
            emission_times_us,
            world_points,
            ground_truth,
            category_raster,
        },
        calibration,
        ego_poses,
        sample,
        schedule,
        setup: setup.clone(),
    })
}

impl SimulationOutput {
    pub fn ground_truth_csv(&self) -> String {
        let mut out = String::from("point_index,u_true,v_true,category\n");
        for r in &self.scene.ground_truth {
            out.push_str(&format!("{},{},{},{}\n", r.point_index, r.u, r.v, r.category));
        }
        out
    }

    pub fn manifest(&self) -> SampleManifest {
        SampleManifest {
            lidar_sensor: self.setup.lidar_name.clone(),
            camera_sensor: self.setup.camera_name.clone(),
            lidar_timestamp_us: self.sample.lidar_recorded_us,
            camera_timestamp_us: self.sample.camera_recorded_us,
            image_width: self.setup.intrinsics.width,
            image_height: self.setup.intrinsics.height,
        }
    }

    /// Emit the calib-io file set consumed by the projection pipeline:
    /// `calibration.json`, `ego_poses.json`, `pointcloud.bin`,
    /// `ground_truth.csv`, `category_raster.pgm`, `sample.json`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<(), EmitError> {
        let dir = dir.as_ref();
        write_calibration(dir.join("calibration.json"), &self.calibration)?;
        write_ego_poses(dir.join("ego_poses.json"), &self.ego_poses)?;
        write_pointcloud_bin(dir.join("pointcloud.bin"), &self.scene.cloud)?;
        let gt_path = dir.join("ground_truth.csv");
        std::fs::write(&gt_path, self.ground_truth_csv()).map_err(|source| EmitError::Io {
            path: gt_path,
            source,
        })?;
        write_pgm8(
            dir.join("category_raster.pgm"),
            self.setup.intrinsics.width,
            self.setup.intrinsics.height,
            &self.scene.category_raster,
        )?;
        let manifest_path = dir.join("sample.json");
        let manifest = serde_json::to_vec_pretty(&self.manifest()).expect("manifest serializes");
        std::fs::write(&manifest_path, manifest).map_err(|source| EmitError::Io {
            path: manifest_path,
            source,
        })?;
        Ok(())
    }
}
