//! Egocentric observation: a 90-degree frontal cone with straight-line wall
//! occlusion, apparent size 1/(1+d) over Chebyshev distance d, and a coarse
//! frontal depth profile.

use alloc::vec::Vec;

use super::{
    Bearing, Cell, Heading, Observation, Pose, VisibleObject, World, DEPTH_PROFILE_WIDTH,
    VIEW_DEPTH,
};

/// Every cell the center-to-center segment passes through, in order. Axis
/// crossings are compared as exact rationals via cross-multiplication; only
/// an exact corner crossing moves both axes in one step.
pub(crate) fn ray_cells(from: Cell, to: Cell) -> Vec<Cell> {
    let dx = (to.0 - from.0).abs();
    let dy = (to.1 - from.1).abs();
    let sx = if from.0 < to.0 { 1 } else { -1 };
    let sy = if from.1 < to.1 { 1 } else { -1 };
    let (mut x, mut y) = from;
    let mut cells = alloc::vec![from];
    let (mut ix, mut iy) = (0, 0);
    while ix < dx || iy < dy {
        if iy == dy {
            x += sx;
            ix += 1;
        } else if ix == dx {
            y += sy;
            iy += 1;
        } else {
            // Next x crossing at t=(2ix+1)/(2dx), next y at t=(2iy+1)/(2dy).
            let cx = (2 * ix + 1) * dy;
            let cy = (2 * iy + 1) * dx;
            if cx < cy {
                x += sx;
                ix += 1;
            } else if cy < cx {
                y += sy;
                iy += 1;
            } else {
                x += sx;
                y += sy;
                ix += 1;
                iy += 1;
            }
        }
        cells.push((x, y));
    }
    cells
}

impl World {
    /// Sight crosses between consecutive ray cells only through open
    /// boundaries; a diagonal step needs one open two-leg route around its
    /// corner.
    pub fn line_of_sight(&self, from: Cell, to: Cell) -> bool {
        let chain = ray_cells(from, to);
        chain.windows(2).all(|pair| {
            let (a, b) = (pair[0], pair[1]);
            if (a.0 - b.0).abs() + (a.1 - b.1).abs() == 1 {
                self.open_between(a, b)
            } else {
                let m1 = (b.0, a.1);
                let m2 = (a.0, b.1);
                (self.open_between(a, m1) && self.open_between(m1, b))
                    || (self.open_between(a, m2) && self.open_between(m2, b))
            }
        })
    }

    /// Forward steps possible from `origin`, capped at the view depth.
    fn forward_clearance(&self, origin: Cell, heading: Heading) -> i32 {
        if !self.in_bounds(origin) {
            return 0;
        }
        let f = heading.forward();
        let mut cur = origin;
        let mut steps = 0;
        while steps < VIEW_DEPTH {
            let next = (cur.0 + f.0, cur.1 + f.1);
            if !self.open_between(cur, next) {
                break;
            }
            cur = next;
            steps += 1;
        }
        steps
    }

    /// Pure function of (scene, pose): same inputs give an identical
    /// observation.
    pub fn observe(&self, pose: &Pose, t: u32) -> Observation {
        let fwd_vec = pose.heading.forward();
        let right_vec = pose.heading.right_hand();
        let mut visible: Vec<VisibleObject> = Vec::new();
        for o in &self.scene.objects {
            let (dx, dy) = (o.cell.0 - pose.x, o.cell.1 - pose.y);
            let fwd = dx * fwd_vec.0 + dy * fwd_vec.1;
            let lat = dx * right_vec.0 + dy * right_vec.1;
            if fwd < lat.abs() {
                continue;
            }
            let d = dx.abs().max(dy.abs());
            if d > VIEW_DEPTH {
                continue;
            }
            if !self.line_of_sight(pose.cell(), o.cell) {
                continue;
            }
            let bearing = match lat.cmp(&0) {
                core::cmp::Ordering::Less => Bearing::Left,
                core::cmp::Ordering::Equal => Bearing::Center,
                core::cmp::Ordering::Greater => Bearing::Right,
            };
            visible.push(VisibleObject {
                object_id: o.object_id,
                category: o.category,
                attribute: o.attribute,
                apparent_size: 1.0 / (1.0 + d as f64),
                egocentric_bearing: bearing,
                distance: d as u32,
            });
        }
        visible.sort_by_key(|v| v.object_id);
        let mut depth_profile = Vec::with_capacity(DEPTH_PROFILE_WIDTH);
        let half = (DEPTH_PROFILE_WIDTH as i32 - 1) / 2;
        for k in -half..=half {
            let origin = (pose.x + k * right_vec.0, pose.y + k * right_vec.1);
            let clearance = self.forward_clearance(origin, pose.heading);
            depth_profile.push(clearance as f64 / VIEW_DEPTH as f64);
        }
        Observation {
            t,
            visible,
            depth_profile,
            region_id: self.region_at(pose.cell()).expect("pose in bounds"),
        }
    }
}
