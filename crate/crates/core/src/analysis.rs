//! Misalignment quantification and visualization: per-point pixel errors
//! against ground truth, category confusion under nearest-pixel label
//! transfer, error histograms, and point overlays on a category render.

use std::path::Path;

use thiserror::Error;

use crate::geometry::{ProjectedPoint, ProjectionStatus};
use crate::pnm::{self, RgbImage};
use crate::timing_sim::GroundTruthRecord;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("index mismatch at row {position}: projected point {projected} vs ground truth {truth}")]
    IndexMismatch {
        position: usize,
        projected: usize,
        truth: usize,
    },
    #[error("length mismatch: {projected} projected points vs {truth} ground-truth rows")]
    LengthMismatch { projected: usize, truth: usize },
    #[error("malformed ground truth: {0}")]
    MalformedGroundTruth(String),
    #[error(transparent)]
    Io(#[from] pnm::PnmError),
}

/// Category-id-per-pixel raster, as produced by the simulator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryRaster {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl CategoryRaster {
    pub fn get(&self, x: u32, y: u32) -> Option<u8> {
        if x < self.width && y < self.height {
            Some(self.data[y as usize * self.width as usize + x as usize])
        } else {
            None
        }
    }

    pub fn from_pgm_bytes(bytes: &[u8]) -> Result<Self, AnalysisError> {
        let (width, height, data) = pnm::decode_pgm8(bytes)?;
        Ok(CategoryRaster {
            width,
            height,
            data,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerPointError {
    pub index: usize,
    pub u_err: f64,
    pub v_err: f64,
    /// Euclidean pixel error.
    pub err: f64,
    pub category: u8,
    /// The projected pixel lands on a different category than the point's own.
    pub cross_category: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregates {
    pub mean: f64,
    /// Nearest-rank order statistics on the sorted euclidean errors.
    pub median: f64,
    pub p95: f64,
    pub max: f64,
    /// Absent when no category raster was supplied.
    pub cross_category_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MisalignmentReport {
    pub per_point: Vec<PerPointError>,
    /// Absent when no point could be scored.
    pub aggregates: Option<Aggregates>,
    pub scored: usize,
    /// Projected points that were not `Valid`.
    pub skipped_projection: usize,
    /// Points whose ground-truth pixel is undefined (behind the camera at
    /// the truth instant).
    pub skipped_truth: usize,
}

fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Score valid projected points against their ground-truth pixels.
///
/// Inputs must be index-aligned row by row. Only `Valid` projections with a
/// finite ground-truth pixel are scored; the rest are counted separately.
/// `raster` enables the cross-category metric; a displaced pixel outside the
/// raster counts as cross-category.
pub fn compare(
    projected: &[ProjectedPoint],
    truth: &[GroundTruthRecord],
    raster: Option<&CategoryRaster>,
) -> Result<MisalignmentReport, AnalysisError> {
    if projected.len() != truth.len() {
        return Err(AnalysisError::LengthMismatch {
            projected: projected.len(),
            truth: truth.len(),
        });
    }
    let mut per_point = Vec::new();
    let mut skipped_projection = 0usize;
    let mut skipped_truth = 0usize;
    for (position, (p, t)) in projected.iter().zip(truth).enumerate() {
        if p.source_index != t.point_index {
            return Err(AnalysisError::IndexMismatch {
                position,
                projected: p.source_index,
                truth: t.point_index,
            });
        }
        if p.status != ProjectionStatus::Valid {
            skipped_projection += 1;
            continue;
        }
        if !t.u.is_finite() || !t.v.is_finite() {
            skipped_truth += 1;
            continue;
        }
        let u_err = p.u - t.u;
        let v_err = p.v - t.v;
        let cross_category = match raster {
            None => false,
            Some(r) => {
                let x = p.u.floor();
                let y = p.v.floor();
                if x < 0.0 || y < 0.0 {
                    true
                } else {
                    match r.get(x as u32, y as u32) {
                        Some(cat) => cat != t.category,
                        None => true,
                    }
                }
            }
        };
        per_point.push(PerPointError {
            index: p.source_index,
            u_err,
            v_err,
            err: (u_err * u_err + v_err * v_err).sqrt(),
            category: t.category,
            cross_category,
        });
    }
    let aggregates = if per_point.is_empty() {
        None
    } else {
        let mut sorted: Vec<f64> = per_point.iter().map(|e| e.err).collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("errors are finite"));
        let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
        let cross_category_fraction = raster.map(|_| {
            per_point.iter().filter(|e| e.cross_category).count() as f64 / per_point.len() as f64
        });
        Some(Aggregates {
            mean,
            median: nearest_rank(&sorted, 0.5),
            p95: nearest_rank(&sorted, 0.95),
            max: *sorted.last().expect("non-empty"),
            cross_category_fraction,
        })
    };
    Ok(MisalignmentReport {
        scored: per_point.len(),
        per_point,
        aggregates,
        skipped_projection,
        skipped_truth,
    })
}

/// Report CSV: `index,u_err,v_err,err,category,cross_category`.
pub fn report_csv(report: &MisalignmentReport) -> String {
    let mut out = String::from("index,u_err,v_err,err,category,cross_category\n");
    for e in &report.per_point {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.index,
            e.u_err,
            e.v_err,
            e.err,
            e.category,
            if e.cross_category { 1 } else { 0 }
        ));
    }
    out
}

/// Histogram of euclidean errors with bins `[k*bin_width, (k+1)*bin_width)`,
/// contiguous from zero to the last non-empty bin. Counts sum to the number
/// of scored points.
pub fn error_histogram(report: &MisalignmentReport, bin_width: f64) -> Vec<(f64, u64)> {
    assert!(bin_width > 0.0, "bin width must be positive");
    if report.per_point.is_empty() {
        return Vec::new();
    }
    let mut counts: Vec<u64> = Vec::new();
    for e in &report.per_point {
        let bin = (e.err / bin_width).floor() as usize;
        if bin >= counts.len() {
            counts.resize(bin + 1, 0);
        }
        counts[bin] += 1;
    }
    counts
        .iter()
        .enumerate()
        .map(|(k, &c)| (k as f64 * bin_width, c))
        .collect()
}

/// Histogram CSV: `bin_low,count`.
pub fn histogram_csv(bins: &[(f64, u64)]) -> String {
    let mut out = String::from("bin_low,count\n");
    for (low, count) in bins {
        out.push_str(&format!("{low},{count}\n"));
    }
    out
}

/// Fixed category palette shared by rasters and overlays.
pub fn category_color(category: u8) -> [u8; 3] {
    match category {
        0 => [30, 30, 30],    // background
        1 => [105, 105, 105], // road
        2 => [70, 130, 180],  // building
        3 => [255, 140, 0],   // truck
        4 => [220, 20, 60],   // barrier
        5 => [154, 205, 50],  // wall
        c => [
            (37u32 * c as u32 + 80) as u8,
            (91u32 * c as u32 + 40) as u8,
            (53u32 * c as u32 + 160) as u8,
        ],
    }
}

/// Render a category raster to RGB with the fixed palette.
pub fn raster_to_rgb(raster: &CategoryRaster) -> RgbImage {
    let mut img = RgbImage::filled(raster.width, raster.height, [0, 0, 0]);
    for y in 0..raster.height {
        for x in 0..raster.width {
            img.set(x, y, category_color(raster.get(x, y).expect("in bounds")));
        }
    }
    img
}

/// Paint 2x2-pixel squares at each valid point's pixel onto a copy of the
/// base image, nearest point winning per painted pixel (depth, then source
/// index). Deterministic: identical inputs yield identical bytes.
pub fn render_overlay_image(
    base: &RgbImage,
    points: &[ProjectedPoint],
    categories: &[u8],
) -> RgbImage {
    assert_eq!(points.len(), categories.len(), "one category per point");
    let mut img = base.clone();
    let mut zbuf: Vec<Option<(f64, usize)>> =
        vec![None; base.width as usize * base.height as usize];
    for (p, &cat) in points.iter().zip(categories) {
        if p.status != ProjectionStatus::Valid {
            continue;
        }
        let x0 = p.u.floor() as i64;
        let y0 = p.v.floor() as i64;
        for (dx, dy) in [(0i64, 0i64), (1, 0), (0, 1), (1, 1)] {
            let (x, y) = (x0 + dx, y0 + dy);
            if x < 0 || y < 0 || x >= base.width as i64 || y >= base.height as i64 {
                continue;
            }
            let slot = &mut zbuf[y as usize * base.width as usize + x as usize];
            let replace = match slot {
                None => true,
                Some((d, idx)) => p.depth < *d || (p.depth == *d && p.source_index < *idx),
            };
            if replace {
                *slot = Some((p.depth, p.source_index));
                img.set(x as u32, y as u32, category_color(cat));
            }
        }
    }
    img
}

/// Write the overlay as binary PPM.
pub fn render_overlay(
    base: &RgbImage,
    points: &[ProjectedPoint],
    categories: &[u8],
    out: impl AsRef<Path>,
) -> Result<(), AnalysisError> {
    let img = render_overlay_image(base, points, categories);
    pnm::write_ppm(out, &img)?;
    Ok(())
}

/// Parse the simulator's ground-truth CSV (`point_index,u_true,v_true,category`).
pub fn parse_ground_truth_csv(text: &str) -> Result<Vec<GroundTruthRecord>, AnalysisError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header.trim() == "point_index,u_true,v_true,category" => {}
        other => {
            return Err(AnalysisError::MalformedGroundTruth(format!(
                "bad header: {other:?}"
            )))
        }
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(AnalysisError::MalformedGroundTruth(format!(
                "row {} has {} fields",
                lineno + 2,
                fields.len()
            )));
        }
        let parse_err = |what: &str| {
            AnalysisError::MalformedGroundTruth(format!("row {}: bad {what}", lineno + 2))
        };
        records.push(GroundTruthRecord {
            point_index: fields[0].parse().map_err(|_| parse_err("point_index"))?,
            u: fields[1].parse().map_err(|_| parse_err("u_true"))?,
            v: fields[2].parse().map_err(|_| parse_err("v_true"))?,
            category: fields[3].parse().map_err(|_| parse_err("category"))?,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vp(index: usize, u: f64, v: f64, depth: f64) -> ProjectedPoint {
        ProjectedPoint {
            source_index: index,
            u,
            v,
            depth,
            status: ProjectionStatus::Valid,
        }
    }

    fn gt(index: usize, u: f64, v: f64, category: u8) -> GroundTruthRecord {
        GroundTruthRecord {
            point_index: index,
            u,
            v,
            category,
        }
    }

    #[test]
    fn perfect_projection_scores_zero() {
        let projected = vec![vp(0, 10.0, 20.0, 5.0), vp(1, 30.5, 7.25, 2.0)];
        let truth = vec![gt(0, 10.0, 20.0, 1), gt(1, 30.5, 7.25, 2)];
        let raster = CategoryRaster {
            width: 64,
            height: 32,
            data: {
                let mut d = vec![1u8; 64 * 32];
                d[7 * 64 + 30] = 2;
                d
            },
        };
        let report = compare(&projected, &truth, Some(&raster)).unwrap();
        let agg = report.aggregates.unwrap();
        assert_eq!(agg.mean, 0.0);
        assert_eq!(agg.max, 0.0);
        assert_eq!(agg.cross_category_fraction, Some(0.0));
    }

    #[test]
    fn three_four_five_triangle() {
        let projected = vec![vp(0, 13.0, 24.0, 5.0)];
        let truth = vec![gt(0, 10.0, 20.0, 1)];
        let report = compare(&projected, &truth, None).unwrap();
        assert_eq!(report.per_point[0].u_err, 3.0);
        assert_eq!(report.per_point[0].v_err, 4.0);
        assert_eq!(report.per_point[0].err, 5.0);
        assert_eq!(report.aggregates.unwrap().cross_category_fraction, None);
    }

    #[test]
    fn empty_valid_set_reports_absent_aggregates() {
        let projected = vec![ProjectedPoint {
            source_index: 0,
            u: f64::NAN,
            v: f64::NAN,
            depth: -1.0,
            status: ProjectionStatus::BehindCamera,
        }];
        let truth = vec![gt(0, 1.0, 1.0, 1)];
        let report = compare(&projected, &truth, None).unwrap();
        assert!(report.aggregates.is_none());
        assert_eq!(report.scored, 0);
        assert_eq!(report.skipped_projection, 1);
    }

    #[test]
    fn nonfinite_truth_counted_separately() {
        let projected = vec![vp(0, 1.0, 1.0, 3.0), vp(1, 2.0, 2.0, 3.0)];
        let truth = vec![gt(0, f64::NAN, f64::NAN, 1), gt(1, 2.0, 2.0, 1)];
        let report = compare(&projected, &truth, None).unwrap();
        assert_eq!(report.scored, 1);
        assert_eq!(report.skipped_truth, 1);
    }

    #[test]
    fn index_mismatch_detected() {
        let projected = vec![vp(3, 1.0, 1.0, 3.0)];
        let truth = vec![gt(4, 1.0, 1.0, 1)];
        assert!(matches!(
            compare(&projected, &truth, None),
            Err(AnalysisError::IndexMismatch {
                position: 0,
                projected: 3,
                truth: 4
            })
        ));
    }

    #[test]
    fn translation_covariance_of_mean_errors() {
        let rng = crate::rng::StreamRng::new(5, "analysis-cov");
        let truth: Vec<GroundTruthRecord> = (0..200)
            .map(|i| {
                gt(
                    i as usize,
                    rng.uniform_in_at(2 * i, 5.0, 50.0),
                    rng.uniform_in_at(2 * i + 1, 5.0, 50.0),
                    1,
                )
            })
            .collect();
        let base: Vec<ProjectedPoint> = truth
            .iter()
            .map(|t| vp(t.point_index, t.u + 0.3, t.v - 0.2, 4.0))
            .collect();
        let (a, b) = (2.5, -1.75);
        let shifted: Vec<ProjectedPoint> = base
            .iter()
            .map(|p| vp(p.source_index, p.u + a, p.v + b, p.depth))
            .collect();
        let r0 = compare(&base, &truth, None).unwrap();
        let r1 = compare(&shifted, &truth, None).unwrap();
        let mean_uv = |r: &MisalignmentReport| {
            let n = r.per_point.len() as f64;
            (
                r.per_point.iter().map(|e| e.u_err).sum::<f64>() / n,
                r.per_point.iter().map(|e| e.v_err).sum::<f64>() / n,
            )
        };
        let (u0, v0) = mean_uv(&r0);
        let (u1, v1) = mean_uv(&r1);
        assert!((u1 - u0 - a).abs() < 1e-12);
        assert!((v1 - v0 - b).abs() < 1e-12);
    }

    #[test]
    fn aggregates_recomputable_from_per_point_table() {
        let rng = crate::rng::StreamRng::new(9, "analysis-agg");
        let truth: Vec<GroundTruthRecord> =
            (0..501).map(|i| gt(i as usize, 0.0, 0.0, 1)).collect();
        let projected: Vec<ProjectedPoint> = (0..501)
            .map(|i| {
                vp(
                    i as usize,
                    rng.uniform_in_at(2 * i, -9.0, 9.0),
                    rng.uniform_in_at(2 * i + 1, -9.0, 9.0),
                    1.0,
                )
            })
            .collect();
        let report = compare(&projected, &truth, None).unwrap();
        let agg = report.aggregates.unwrap();
        let mut errs: Vec<f64> = report.per_point.iter().map(|e| e.err).collect();
        errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        assert!((agg.mean - mean).abs() < 1e-12);
        assert_eq!(agg.median, errs[(0.5f64 * 501.0).ceil() as usize - 1]);
        assert_eq!(agg.p95, errs[(0.95f64 * 501.0).ceil() as usize - 1]);
        assert_eq!(agg.max, *errs.last().unwrap());
    }

    #[test]
    fn cross_category_fraction_counts_label_transfer_misses() {
        // raster: left half category 1, right half category 2
        let raster = CategoryRaster {
            width: 10,
            height: 4,
            data: (0..40).map(|i| if i % 10 < 5 { 1 } else { 2 }).collect(),
        };
        let truth = vec![gt(0, 2.0, 1.0, 1), gt(1, 3.0, 1.0, 1)];
        // first point stays on category 1, second is displaced onto category 2
        let projected = vec![vp(0, 2.2, 1.0, 1.0), vp(1, 7.0, 1.0, 1.0)];
        let report = compare(&projected, &truth, Some(&raster)).unwrap();
        assert!(!report.per_point[0].cross_category);
        assert!(report.per_point[1].cross_category);
        assert_eq!(
            report.aggregates.unwrap().cross_category_fraction,
            Some(0.5)
        );
    }

    #[test]
    fn histogram_bins_and_counts() {
        let truth = vec![gt(0, 0.0, 0.0, 1), gt(1, 0.0, 0.0, 1)];
        let projected = vec![vp(0, 0.5, 0.0, 1.0), vp(1, 1.5, 0.0, 1.0)];
        let report = compare(&projected, &truth, None).unwrap();
        let bins = error_histogram(&report, 1.0);
        assert_eq!(bins, vec![(0.0, 1), (1.0, 1)]);

        let zeroes = compare(&[vp(0, 0.0, 0.0, 1.0)], &[gt(0, 0.0, 0.0, 1)], None).unwrap();
        assert_eq!(error_histogram(&zeroes, 1.0), vec![(0.0, 1)]);
    }

    #[test]
    fn histogram_counts_sum_to_scored() {
        let rng = crate::rng::StreamRng::new(13, "analysis-hist");
        let truth: Vec<GroundTruthRecord> =
            (0..377).map(|i| gt(i as usize, 0.0, 0.0, 1)).collect();
        let projected: Vec<ProjectedPoint> = (0..377)
            .map(|i| vp(i as usize, rng.uniform_in_at(i, 0.0, 25.0), 0.0, 1.0))
            .collect();
        let report = compare(&projected, &truth, None).unwrap();
        let bins = error_histogram(&report, 0.7);
        let total: u64 = bins.iter().map(|(_, c)| c).sum();
        assert_eq!(total as usize, report.scored);
    }

    #[test]
    fn overlay_with_no_points_is_base_image() {
        let base = RgbImage::filled(8, 6, [9, 9, 9]);
        let img = render_overlay_image(&base, &[], &[]);
        assert_eq!(img, base);
        assert_eq!(pnm::encode_ppm(&img)[..11], *b"P6\n8 6\n255\n");
    }

    #[test]
    fn overlay_paints_2x2_square() {
        let base = RgbImage::filled(8, 6, [0, 0, 0]);
        let img = render_overlay_image(&base, &[vp(0, 0.0, 0.0, 1.0)], &[4]);
        let red = category_color(4);
        for (x, y) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            assert_eq!(img.get(x, y), red);
        }
        assert_eq!(img.get(2, 0), [0, 0, 0]);
        assert_eq!(img.get(2, 2), [0, 0, 0]);
    }

    #[test]
    fn overlay_depth_conflict_keeps_nearest() {
        let base = RgbImage::filled(8, 6, [0, 0, 0]);
        let img = render_overlay_image(
            &base,
            &[vp(0, 2.0, 2.0, 9.0), vp(1, 2.4, 2.4, 1.0)],
            &[2, 3],
        );
        assert_eq!(img.get(2, 2), category_color(3));
    }

    #[test]
    fn overlay_is_deterministic() {
        let base = RgbImage::filled(16, 16, [1, 2, 3]);
        let rng = crate::rng::StreamRng::new(3, "overlay");
        let points: Vec<ProjectedPoint> = (0..64)
            .map(|i| {
                vp(
                    i as usize,
                    rng.uniform_in_at(3 * i, 0.0, 16.0),
                    rng.uniform_in_at(3 * i + 1, 0.0, 16.0),
                    1.0 + rng.uniform_at(3 * i + 2),
                )
            })
            .collect();
        let cats: Vec<u8> = (0..64).map(|i| (i % 5) as u8).collect();
        let a = pnm::encode_ppm(&render_overlay_image(&base, &points, &cats));
        let b = pnm::encode_ppm(&render_overlay_image(&base, &points, &cats));
        assert_eq!(a, b);
    }

    #[test]
    fn ground_truth_csv_roundtrip_with_nan() {
        let text = "point_index,u_true,v_true,category\n0,1.5,2.5,3\n1,NaN,NaN,2\n";
        let records = parse_ground_truth_csv(text).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].u, 1.5);
        assert!(records[1].u.is_nan());
        assert_eq!(records[1].category, 2);
        assert!(parse_ground_truth_csv("nope\n").is_err());
    }
}
