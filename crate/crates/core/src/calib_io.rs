//! Calibration, ego-pose, and point-cloud file I/O.
//!
//! File formats (see `docs/formats.md`):
//! - calibration: JSON array of `{sensor_name, translation, rotation, camera_intrinsic?}`
//!   with quaternions stored w-first `(w, x, y, z)` and translations in meters.
//!   Unknown extra fields are ignored so real nuScenes `calibrated_sensor` records
//!   (with `token` fields and `camera_intrinsic: []` for LiDAR) load unchanged.
//! - ego poses: JSON array of `{timestamp, translation, rotation}` with integer
//!   microsecond timestamps, strictly increasing.
//! - point clouds: headerless binary, consecutive little-endian f32 records
//!   `(x, y, z, intensity, ring)` — 20 bytes per point.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::ser::SerializeSeq;
use serde::{Serialize, Serializer};
use thiserror::Error;

/// Raw quaternion norm may deviate from 1 by at most this much before the
/// record is rejected as corrupt; smaller deviations are normalized away.
pub const QUAT_NORM_TOLERANCE: f64 = 1e-3;

/// Bytes per point record in the binary layout: five little-endian f32.
pub const POINT_RECORD_BYTES: usize = 20;

#[derive(Debug, Error)]
pub enum CalibIoError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed file: {detail}")]
    MalformedFile { detail: String },
    #[error("schema violation in record {index}: {detail}")]
    SchemaViolation { index: usize, detail: String },
    #[error("bad quaternion in record {index}: raw norm {norm} deviates from 1 by more than {QUAT_NORM_TOLERANCE}")]
    BadQuaternion { index: usize, norm: f64 },
    #[error("bad intrinsics in record {index}: {detail}")]
    BadIntrinsics { index: usize, detail: String },
    #[error("non-monotonic timestamps: record {index} has {current} after {previous}")]
    NonMonotonicTimestamps {
        index: usize,
        previous: i64,
        current: i64,
    },
    #[error("truncated point cloud: {size} bytes is not a multiple of {POINT_RECORD_BYTES}")]
    TruncatedFile { size: u64 },
    #[error("non-finite value in point {index}")]
    NonFiniteValue { index: usize },
    #[error("invalid ring index in point {index}: {value}")]
    InvalidRing { index: usize, value: f32 },
}

/// Static sensor mounting: the `ego ← sensor` transform, plus the pinhole
/// matrix for cameras.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationRecord {
    pub sensor_name: String,
    /// Meters, ego frame.
    pub translation: [f64; 3],
    /// Unit quaternion, w-first `(w, x, y, z)`.
    pub rotation: [f64; 4],
    /// Row-major 3x3 pinhole matrix in pixels; `None` for non-camera sensors.
    #[serde(serialize_with = "serialize_intrinsic")]
    pub camera_intrinsic: Option<[[f64; 3]; 3]>,
}

/// Timestamped `global ← ego` pose.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EgoPoseRecord {
    /// Integer microseconds since epoch.
    pub timestamp: i64,
    pub translation: [f64; 3],
    pub rotation: [f64; 4],
}

/// Sidecar manifest tying a point-cloud file to its sensors and recorded
/// timestamps (the binary cloud itself is headerless).
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleManifest {
    pub lidar_sensor: String,
    pub camera_sensor: String,
    pub lidar_timestamp_us: i64,
    pub camera_timestamp_us: i64,
    pub image_width: u32,
    pub image_height: u32,
}

pub fn load_sample_manifest(path: impl AsRef<Path>) -> Result<SampleManifest, CalibIoError> {
    let bytes = read_file(path.as_ref())?;
    serde_json::from_slice(&bytes).map_err(|e| CalibIoError::MalformedFile {
        detail: e.to_string(),
    })
}

/// One decoded point record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
    pub ring: u32,
}

/// A LiDAR sweep in its sensor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    /// Sensor frame identifier, e.g. `LIDAR_TOP`.
    pub frame: String,
    /// Sweep reference time, integer microseconds.
    pub timestamp: i64,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

// nuScenes writes `[]` for sensors without intrinsics; mirror that on output.
fn serialize_intrinsic<S: Serializer>(
    v: &Option<[[f64; 3]; 3]>,
    ser: S,
) -> Result<S::Ok, S::Error> {
    match v {
        Some(m) => m.serialize(ser),
        None => ser.serialize_seq(Some(0))?.end(),
    }
}

fn quat_norm(q: &[f64; 4]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Validate + normalize a raw quaternion read from a file.
fn ingest_quaternion(raw: [f64; 4], index: usize) -> Result<[f64; 4], CalibIoError> {
    let norm = quat_norm(&raw);
    if !norm.is_finite() || (norm - 1.0).abs() > QUAT_NORM_TOLERANCE {
        return Err(CalibIoError::BadQuaternion { index, norm });
    }
    Ok([raw[0] / norm, raw[1] / norm, raw[2] / norm, raw[3] / norm])
}

fn field<'a>(
    obj: &'a serde_json::Value,
    name: &str,
    index: usize,
) -> Result<&'a serde_json::Value, CalibIoError> {
    obj.get(name).ok_or_else(|| CalibIoError::SchemaViolation {
        index,
        detail: format!("missing field `{name}`"),
    })
}

fn as_f64(v: &serde_json::Value, name: &str, index: usize) -> Result<f64, CalibIoError> {
    v.as_f64().ok_or_else(|| CalibIoError::SchemaViolation {
        index,
        detail: format!("field `{name}` must be a number"),
    })
}

fn vec3_field(
    obj: &serde_json::Value,
    name: &str,
    index: usize,
) -> Result<[f64; 3], CalibIoError> {
    let arr = field(obj, name, index)?
        .as_array()
        .ok_or_else(|| CalibIoError::SchemaViolation {
            index,
            detail: format!("field `{name}` must be an array"),
        })?;
    if arr.len() != 3 {
        return Err(CalibIoError::SchemaViolation {
            index,
            detail: format!("field `{name}` must have 3 elements, got {}", arr.len()),
        });
    }
    let mut out = [0.0; 3];
    for (i, v) in arr.iter().enumerate() {
        out[i] = as_f64(v, name, index)?;
    }
    Ok(out)
}

fn quat_field(
    obj: &serde_json::Value,
    name: &str,
    index: usize,
) -> Result<[f64; 4], CalibIoError> {
    let arr = field(obj, name, index)?
        .as_array()
        .ok_or_else(|| CalibIoError::SchemaViolation {
            index,
            detail: format!("field `{name}` must be an array"),
        })?;
    if arr.len() != 4 {
        return Err(CalibIoError::SchemaViolation {
            index,
            detail: format!("field `{name}` must have 4 elements, got {}", arr.len()),
        });
    }
    let mut out = [0.0; 4];
    for (i, v) in arr.iter().enumerate() {
        out[i] = as_f64(v, name, index)?;
    }
    Ok(out)
}

fn intrinsic_field(
    obj: &serde_json::Value,
    index: usize,
) -> Result<Option<[[f64; 3]; 3]>, CalibIoError> {
    let v = match obj.get("camera_intrinsic") {
        None => return Ok(None),
        Some(serde_json::Value::Null) => return Ok(None),
        Some(v) => v,
    };
    let rows = v.as_array().ok_or_else(|| CalibIoError::SchemaViolation {
        index,
        detail: "field `camera_intrinsic` must be an array".into(),
    })?;
    if rows.is_empty() {
        return Ok(None);
    }
    if rows.len() != 3 {
        return Err(CalibIoError::SchemaViolation {
            index,
            detail: format!("camera_intrinsic must be 3x3, got {} rows", rows.len()),
        });
    }
    let mut out = [[0.0; 3]; 3];
    for (r, row) in rows.iter().enumerate() {
        let cols = row.as_array().ok_or_else(|| CalibIoError::SchemaViolation {
            index,
            detail: "camera_intrinsic rows must be arrays".into(),
        })?;
        if cols.len() != 3 {
            return Err(CalibIoError::SchemaViolation {
                index,
                detail: format!("camera_intrinsic row {r} must have 3 columns"),
            });
        }
        for (c, v) in cols.iter().enumerate() {
            out[r][c] = as_f64(v, "camera_intrinsic", index)?;
        }
    }
    Ok(Some(out))
}

fn validate_intrinsic(k: &[[f64; 3]; 3], index: usize) -> Result<(), CalibIoError> {
    let bad = |detail: &str| CalibIoError::BadIntrinsics {
        index,
        detail: detail.into(),
    };
    for row in k {
        for v in row {
            if !v.is_finite() {
                return Err(bad("non-finite entry"));
            }
        }
    }
    if k[0][0] <= 0.0 || k[1][1] <= 0.0 {
        return Err(bad("focal lengths must be positive"));
    }
    if k[2][2] != 1.0 {
        return Err(bad("entry (2,2) must equal 1"));
    }
    if k[2][0] != 0.0 || k[2][1] != 0.0 {
        return Err(bad("entries (2,0) and (2,1) must equal 0"));
    }
    Ok(())
}

fn parse_json_array(bytes: &[u8]) -> Result<Vec<serde_json::Value>, CalibIoError> {
    let value: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| CalibIoError::MalformedFile {
            detail: e.to_string(),
        })?;
    match value {
        serde_json::Value::Array(items) => Ok(items),
        other => Err(CalibIoError::MalformedFile {
            detail: format!("expected a JSON array at top level, got {}", kind(&other)),
        }),
    }
}

fn kind(v: &serde_json::Value) -> &'static str {
    match v {
        serde_json::Value::Null => "null",
        serde_json::Value::Bool(_) => "bool",
        serde_json::Value::Number(_) => "number",
        serde_json::Value::String(_) => "string",
        serde_json::Value::Array(_) => "array",
        serde_json::Value::Object(_) => "object",
    }
}

/// Parse calibration records from raw JSON bytes.
pub fn parse_calibration(bytes: &[u8]) -> Result<Vec<CalibrationRecord>, CalibIoError> {
    let items = parse_json_array(bytes)?;
    let mut records = Vec::with_capacity(items.len());
    for (index, item) in items.iter().enumerate() {
        if !item.is_object() {
            return Err(CalibIoError::SchemaViolation {
                index,
                detail: format!("record must be an object, got {}", kind(item)),
            });
        }
        let sensor_name = field(item, "sensor_name", index)?
            .as_str()
            .ok_or_else(|| CalibIoError::SchemaViolation {
                index,
                detail: "field `sensor_name` must be a string".into(),
            })?
            .to_owned();
        let translation = vec3_field(item, "translation", index)?;
        for v in translation {
            if !v.is_finite() {
                return Err(CalibIoError::SchemaViolation {
                    index,
                    detail: "field `translation` must be finite".into(),
                });
            }
        }
        let rotation = ingest_quaternion(quat_field(item, "rotation", index)?, index)?;
        let camera_intrinsic = intrinsic_field(item, index)?;
        if let Some(k) = &camera_intrinsic {
            validate_intrinsic(k, index)?;
        }
        records.push(CalibrationRecord {
            sensor_name,
            translation,
            rotation,
            camera_intrinsic,
        });
    }
    Ok(records)
}

/// Parse ego-pose records from raw JSON bytes.
pub fn parse_ego_poses(bytes: &[u8]) -> Result<Vec<EgoPoseRecord>, CalibIoError> {
    let items = parse_json_array(bytes)?;
    let mut records: Vec<EgoPoseRecord> = Vec::with_capacity(items.len());
    for (index, item) in items.iter().enumerate() {
        if !item.is_object() {
            return Err(CalibIoError::SchemaViolation {
                index,
                detail: format!("record must be an object, got {}", kind(item)),
            });
        }
        let timestamp = field(item, "timestamp", index)?.as_i64().ok_or_else(|| {
            CalibIoError::SchemaViolation {
                index,
                detail: "field `timestamp` must be an integer".into(),
            }
        })?;
        let translation = vec3_field(item, "translation", index)?;
        for v in translation {
            if !v.is_finite() {
                return Err(CalibIoError::SchemaViolation {
                    index,
                    detail: "field `translation` must be finite".into(),
                });
            }
        }
        let rotation = ingest_quaternion(quat_field(item, "rotation", index)?, index)?;
        if let Some(prev) = records.last() {
            if timestamp <= prev.timestamp {
                return Err(CalibIoError::NonMonotonicTimestamps {
                    index,
                    previous: prev.timestamp,
                    current: timestamp,
                });
            }
        }
        records.push(EgoPoseRecord {
            timestamp,
            translation,
            rotation,
        });
    }
    Ok(records)
}

/// Decode a headerless binary point cloud. `frame` and `timestamp` are not
/// stored in the file; the caller supplies them (e.g. from a sample manifest).
pub fn parse_pointcloud_bin(bytes: &[u8]) -> Result<Vec<Point>, CalibIoError> {
    if bytes.len() % POINT_RECORD_BYTES != 0 {
        return Err(CalibIoError::TruncatedFile {
            size: bytes.len() as u64,
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / POINT_RECORD_BYTES);
    for (index, rec) in bytes.chunks_exact(POINT_RECORD_BYTES).enumerate() {
        let f = |i: usize| f32::from_le_bytes([rec[4 * i], rec[4 * i + 1], rec[4 * i + 2], rec[4 * i + 3]]);
        let (x, y, z, intensity, ring) = (f(0), f(1), f(2), f(3), f(4));
        if !x.is_finite() || !y.is_finite() || !z.is_finite() || !intensity.is_finite() {
            return Err(CalibIoError::NonFiniteValue { index });
        }
        if !ring.is_finite() || ring < 0.0 || ring.fract() != 0.0 || ring > (1u32 << 24) as f32 {
            return Err(CalibIoError::InvalidRing { index, value: ring });
        }
        points.push(Point {
            x,
            y,
            z,
            intensity,
            ring: ring as u32,
        });
    }
    Ok(points)
}

fn read_file(path: &Path) -> Result<Vec<u8>, CalibIoError> {
    fs::read(path).map_err(|source| CalibIoError::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn load_calibration(path: impl AsRef<Path>) -> Result<Vec<CalibrationRecord>, CalibIoError> {
    parse_calibration(&read_file(path.as_ref())?)
}

pub fn load_ego_poses(path: impl AsRef<Path>) -> Result<Vec<EgoPoseRecord>, CalibIoError> {
    parse_ego_poses(&read_file(path.as_ref())?)
}

pub fn load_pointcloud_bin(path: impl AsRef<Path>) -> Result<PointCloud, CalibIoError> {
    let points = parse_pointcloud_bin(&read_file(path.as_ref())?)?;
    Ok(PointCloud {
        points,
        frame: String::new(),
        timestamp: 0,
    })
}

pub fn encode_pointcloud_bin(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.points.len() * POINT_RECORD_BYTES);
    for p in &cloud.points {
        out.extend_from_slice(&p.x.to_le_bytes());
        out.extend_from_slice(&p.y.to_le_bytes());
        out.extend_from_slice(&p.z.to_le_bytes());
        out.extend_from_slice(&p.intensity.to_le_bytes());
        out.extend_from_slice(&(p.ring as f32).to_le_bytes());
    }
    out
}

pub fn write_pointcloud_bin(
    path: impl AsRef<Path>,
    cloud: &PointCloud,
) -> Result<(), CalibIoError> {
    write_bytes(path.as_ref(), &encode_pointcloud_bin(cloud))
}

pub fn write_calibration(
    path: impl AsRef<Path>,
    records: &[CalibrationRecord],
) -> Result<(), CalibIoError> {
    let json = serde_json::to_vec_pretty(records).expect("calibration records serialize");
    write_bytes(path.as_ref(), &json)
}

pub fn write_ego_poses(
    path: impl AsRef<Path>,
    records: &[EgoPoseRecord],
) -> Result<(), CalibIoError> {
    let json = serde_json::to_vec_pretty(records).expect("ego pose records serialize");
    write_bytes(path.as_ref(), &json)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CalibIoError> {
    let mut f = fs::File::create(path).map_err(|source| CalibIoError::Io {
        path: path.to_owned(),
        source,
    })?;
    f.write_all(bytes).map_err(|source| CalibIoError::Io {
        path: path.to_owned(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SQ2: f64 = std::f64::consts::FRAC_1_SQRT_2;

    fn calib_json(rotation: &str, intrinsic: &str) -> String {
        format!(
            r#"[{{"sensor_name":"LIDAR_TOP","translation":[0.0,0.0,0.0],"rotation":{rotation},"camera_intrinsic":{intrinsic}}}]"#
        )
    }

    #[test]
    fn identity_record_loads() {
        let records = parse_calibration(calib_json("[1,0,0,0]", "[]").as_bytes()).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].rotation, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(records[0].translation, [0.0, 0.0, 0.0]);
        assert!(records[0].camera_intrinsic.is_none());
    }

    #[test]
    fn near_unit_quaternion_normalized() {
        // norm = sqrt(0.5 + 0.5) = 1 exactly in reals; float round-off is absorbed
        let json = calib_json("[0.70710678, 0, 0, 0.70710678]", "[]");
        let records = parse_calibration(json.as_bytes()).unwrap();
        let q = records[0].rotation;
        let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        assert!((norm - 1.0).abs() < 1e-6, "norm={norm}");
        assert!((q[0] - SQ2).abs() < 1e-8);
    }

    #[test]
    fn off_unit_quaternion_rejected() {
        let json = calib_json("[0.9, 0, 0, 0]", "[]");
        match parse_calibration(json.as_bytes()) {
            Err(CalibIoError::BadQuaternion { index: 0, norm }) => {
                assert!((norm - 0.9).abs() < 1e-12)
            }
            other => panic!("expected BadQuaternion, got {other:?}"),
        }
    }

    #[test]
    fn missing_field_names_record_index() {
        let json = r#"[{"sensor_name":"a","translation":[0,0,0],"rotation":[1,0,0,0]},
                       {"sensor_name":"b","translation":[0,0,0]}]"#;
        match parse_calibration(json.as_bytes()) {
            Err(CalibIoError::SchemaViolation { index: 1, detail }) => {
                assert!(detail.contains("rotation"))
            }
            other => panic!("expected SchemaViolation at 1, got {other:?}"),
        }
    }

    #[test]
    fn bad_intrinsics_rejected() {
        let json = calib_json("[1,0,0,0]", "[[500,0,320],[0,500,240],[0,0,2]]");
        assert!(matches!(
            parse_calibration(json.as_bytes()),
            Err(CalibIoError::BadIntrinsics { index: 0, .. })
        ));
        let json = calib_json("[1,0,0,0]", "[[-5,0,320],[0,500,240],[0,0,1]]");
        assert!(matches!(
            parse_calibration(json.as_bytes()),
            Err(CalibIoError::BadIntrinsics { index: 0, .. })
        ));
    }

    #[test]
    fn nuscenes_style_extra_fields_tolerated() {
        let json = r#"[{"token":"abc","sensor_token":"def",
            "sensor_name":"CAM_FRONT","translation":[1.7,0.0,1.5],
            "rotation":[0.5,-0.5,0.5,-0.5],
            "camera_intrinsic":[[1266.4,0.0,816.3],[0.0,1266.4,491.5],[0.0,0.0,1.0]]}]"#;
        let records = parse_calibration(json.as_bytes()).unwrap();
        assert_eq!(records[0].sensor_name, "CAM_FRONT");
        assert!(records[0].camera_intrinsic.is_some());
    }

    #[test]
    fn ego_poses_sorted_ok_and_unsorted_rejected() {
        let ok = r#"[{"timestamp":0,"translation":[0,0,0],"rotation":[1,0,0,0]},
                     {"timestamp":100000,"translation":[1,0,0],"rotation":[1,0,0,0]}]"#;
        assert_eq!(parse_ego_poses(ok.as_bytes()).unwrap().len(), 2);

        let bad = r#"[{"timestamp":100000,"translation":[0,0,0],"rotation":[1,0,0,0]},
                      {"timestamp":0,"translation":[1,0,0],"rotation":[1,0,0,0]}]"#;
        match parse_ego_poses(bad.as_bytes()) {
            Err(CalibIoError::NonMonotonicTimestamps {
                index: 1,
                previous: 100000,
                current: 0,
            }) => {}
            other => panic!("expected NonMonotonicTimestamps, got {other:?}"),
        }
    }

    #[test]
    fn empty_pose_array_is_empty_list() {
        assert!(parse_ego_poses(b"[]").unwrap().is_empty());
    }

    fn encode_points(vals: &[[f32; 5]]) -> Vec<u8> {
        let mut out = Vec::new();
        for rec in vals {
            for v in rec {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    #[test]
    fn pointcloud_bin_decodes_hand_encoded_records() {
        let bytes = encode_points(&[[1.0, 2.0, 3.0, 10.0, 0.0], [4.0, 5.0, 6.0, 20.0, 1.0]]);
        assert_eq!(bytes.len(), 40);
        let points = parse_pointcloud_bin(&bytes).unwrap();
        assert_eq!(points.len(), 2);
        assert_eq!(points[0].x, 1.0);
        assert_eq!(points[0].ring, 0);
        assert_eq!(points[1].intensity, 20.0);
        assert_eq!(points[1].ring, 1);
    }

    #[test]
    fn empty_bin_is_empty_cloud() {
        assert!(parse_pointcloud_bin(&[]).unwrap().is_empty());
    }

    #[test]
    fn truncated_bin_rejected() {
        match parse_pointcloud_bin(&[0u8; 30]) {
            Err(CalibIoError::TruncatedFile { size: 30 }) => {}
            other => panic!("expected TruncatedFile, got {other:?}"),
        }
    }

    #[test]
    fn nonfinite_coordinate_names_point() {
        let bytes = encode_points(&[[1.0, 2.0, 3.0, 10.0, 0.0], [f32::NAN, 0.0, 0.0, 0.0, 0.0]]);
        match parse_pointcloud_bin(&bytes) {
            Err(CalibIoError::NonFiniteValue { index: 1 }) => {}
            other => panic!("expected NonFiniteValue, got {other:?}"),
        }
    }

    #[test]
    fn fractional_ring_rejected() {
        let bytes = encode_points(&[[0.0, 0.0, 0.0, 0.0, 1.5]]);
        assert!(matches!(
            parse_pointcloud_bin(&bytes),
            Err(CalibIoError::InvalidRing { index: 0, .. })
        ));
    }

    #[test]
    fn pointcloud_roundtrip_bit_exact() {
        let cloud = PointCloud {
            points: vec![
                Point {
                    x: 1.25,
                    y: -3.5,
                    z: 0.1,
                    intensity: 200.0,
                    ring: 31,
                },
                Point {
                    x: f32::MIN_POSITIVE,
                    y: -0.0,
                    z: 1e30,
                    intensity: 0.0,
                    ring: 0,
                },
            ],
            frame: "LIDAR_TOP".into(),
            timestamp: 42,
        };
        let bytes = encode_pointcloud_bin(&cloud);
        let decoded = parse_pointcloud_bin(&bytes).unwrap();
        assert_eq!(decoded, cloud.points);
        // -0.0 must survive with its sign bit.
        assert_eq!(decoded[1].y.to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn calibration_json_roundtrip_exact() {
        let records = vec![
            CalibrationRecord {
                sensor_name: "LIDAR_TOP".into(),
                translation: [0.985793, 0.0, 1.84019],
                rotation: [SQ2, 0.0, 0.0, -SQ2],
                camera_intrinsic: None,
            },
            CalibrationRecord {
                sensor_name: "CAM_FRONT".into(),
                translation: [1.70079118954, 0.0159456324149, 1.51095763913],
                rotation: [0.5, -0.5, 0.5, -0.5],
                camera_intrinsic: Some([[1266.4, 0.0, 816.3], [0.0, 1266.4, 491.5], [0.0, 0.0, 1.0]]),
            },
        ];
        let json = serde_json::to_vec(&records).unwrap();
        let reloaded = parse_calibration(&json).unwrap();
        assert_eq!(reloaded, records);
    }
}
