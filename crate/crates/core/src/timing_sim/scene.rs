//! Analytic scene primitives for ray casting: axis-aligned boxes and
//! axis-aligned rectangles, enough to reproduce occlusion patterns
//! (a wall behind a box, barriers beside a road) without a mesh engine.

use crate::geometry::Vec3;

/// Hits closer than this along the ray are ignored (self-intersection guard).
const RAY_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Solid axis-aligned box.
    Box { min: [f64; 3], max: [f64; 3] },
    /// Axis-aligned rectangle: the plane `p[axis] == level`, bounded on the
    /// two remaining axes (in ascending axis order) by `min`/`max`.
    Rect {
        axis: usize,
        level: f64,
        min: [f64; 2],
        max: [f64; 2],
    },
}

impl Shape {
    /// Distance along the (unit) ray to the nearest intersection, if any.
    pub fn ray_hit(&self, origin: Vec3, dir: Vec3) -> Option<f64> {
        match *self {
            Shape::Box { min, max } => {
                let o = origin.to_array();
                let d = dir.to_array();
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                for a in 0..3 {
                    if d[a].abs() < 1e-15 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / d[a];
                    let (t0, t1) = {
                        let t0 = (min[a] - o[a]) * inv;
                        let t1 = (max[a] - o[a]) * inv;
                        if t0 <= t1 {
                            (t0, t1)
                        } else {
                            (t1, t0)
                        }
                    };
                    t_near = t_near.max(t0);
                    t_far = t_far.min(t1);
                    if t_near > t_far {
                        return None;
                    }
                }
                if t_near > RAY_EPSILON {
                    Some(t_near)
                } else if t_far > RAY_EPSILON {
                    Some(t_far)
                } else {
                    None
                }
            }
            Shape::Rect {
                axis,
                level,
                min,
                max,
            } => {
                let o = origin.to_array();
                let d = dir.to_array();
                if d[axis].abs() < 1e-15 {
                    return None;
                }
                let t = (level - o[axis]) / d[axis];
                if t <= RAY_EPSILON {
                    return None;
                }
                let others = [(axis + 1) % 3, (axis + 2) % 3];
                let mut uv = [0.0; 2];
                for (slot, &a) in others.iter().enumerate() {
                    uv[slot] = o[a] + t * d[a];
                }
                // report extents in ascending axis order
                let (lo_axis_val, hi_axis_val) = if others[0] < others[1] {
                    (uv[0], uv[1])
                } else {
                    (uv[1], uv[0])
                };
                if lo_axis_val >= min[0]
                    && lo_axis_val <= max[0]
                    && hi_axis_val >= min[1]
                    && hi_axis_val <= max[1]
                {
                    Some(t)
                } else {
                    None
                }
            }
        }
    }
}

/// A labeled scene primitive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub category: u8,
    pub shape: Shape,
}

/// Nearest hit over all objects: `(distance, category)`. Exact distance ties
/// resolve to the lower object index for determinism.
pub fn ray_cast(objects: &[SceneObject], origin: Vec3, dir: Vec3) -> Option<(f64, u8)> {
    let mut best: Option<(f64, u8)> = None;
    for obj in objects {
        if let Some(t) = obj.shape.ray_hit(origin, dir) {
            match best {
                Some((bt, _)) if bt <= t => {}
                _ => best = Some((t, obj.category)),
            }
        }
    }
    best
}

/// Category ids used by the built-in scenes.
pub mod category {
    pub const BACKGROUND: u8 = 0;
    pub const ROAD: u8 = 1;
    pub const BUILDING: u8 = 2;
    pub const TRUCK: u8 = 3;
    pub const BARRIER: u8 = 4;
    pub const WALL: u8 = 5;
}

/// Road scene with a wall behind a box and barriers to the right, viewed by
/// a forward-facing camera: the classic occlusion/misprojection layout.
pub fn demo_scene() -> Vec<SceneObject> {
    vec![
        SceneObject {
            category: category::ROAD,
            shape: Shape::Rect {
                axis: 2,
                level: 0.0,
                min: [-100.0, -100.0],
                max: [100.0, 100.0],
            },
        },
        SceneObject {
            category: category::BUILDING,
            shape: Shape::Rect {
                axis: 0,
                level: 25.0,
                min: [-30.0, 0.0],
                max: [30.0, 10.0],
            },
        },
        SceneObject {
            category: category::TRUCK,
            shape: Shape::Box {
                min: [12.0, -3.0, 0.0],
                max: [18.0, 1.0, 3.0],
            },
        },
        SceneObject {
            category: category::BARRIER,
            shape: Shape::Box {
                min: [5.0, -7.0, 0.0],
                max: [40.0, -6.5, 1.2],
            },
        },
    ]
}

/// A single wall parallel to the direction of travel at `distance` meters on
/// the +y (left) side; every wall point sits at the same camera depth for a
/// left-facing camera, which makes parallax effects uniform.
pub fn lateral_wall_scene(distance: f64) -> Vec<SceneObject> {
    vec![SceneObject {
        category: category::WALL,
        shape: Shape::Rect {
            axis: 1,
            level: distance,
            min: [-60.0, 0.0],
            max: [60.0, 8.0],
        },
    }]
}
