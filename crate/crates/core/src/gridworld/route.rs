//! Shortest expert paths over (cell, heading) states and instruction text
//! synthesis from the rooms a path enters.

use alloc::collections::VecDeque;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::{Action, Cell, GridError, ObjectInstance, Pose, World};

impl World {
    /// Minimal-length action sequence from `start` to any heading at `goal`,
    /// ending with STOP. Among equal-length paths the one preferring
    /// FORWARD, then TURN_LEFT, then TURN_RIGHT at each step wins.
    pub fn expert_path(&self, start: Pose, goal: Cell) -> Result<Vec<Action>, GridError> {
        if !self.in_bounds(goal) {
            return Err(GridError::Unreachable);
        }
        if start.cell() == goal {
            return Ok(vec![Action::Stop]);
        }
        let w = self.scene.grid_width;
        let h = self.scene.grid_height;
        let encode = |p: &Pose| -> usize {
            ((p.y * w + p.x) * 4) as usize + p.heading as usize
        };
        let mut parent: Vec<Option<(usize, Action)>> = vec![None; (w * h * 4) as usize];
        let mut seen = vec![false; (w * h * 4) as usize];
        let mut queue = VecDeque::new();
        let start_idx = encode(&start);
        seen[start_idx] = true;
        queue.push_back(start);
        while let Some(pose) = queue.pop_front() {
            let from = encode(&pose);
            // Expansion order is the fixed tie-break priority.
            for &action in &[Action::Forward, Action::TurnLeft, Action::TurnRight] {
                let next = self.step(&pose, action);
                let to = encode(&next);
                if seen[to] {
                    continue;
                }
                seen[to] = true;
                parent[to] = Some((from, action));
                if next.cell() == goal {
                    let mut actions = vec![Action::Stop];
                    let mut cur = to;
                    while let Some((prev, a)) = parent[cur] {
                        actions.push(a);
                        cur = prev;
                    }
                    actions.reverse();
                    return Ok(actions);
                }
                queue.push_back(next);
            }
        }
        Err(GridError::Unreachable)
    }

    /// Fewest cell moves between two cells, headings ignored.
    pub fn geodesic(&self, from: Cell, to: Cell) -> Option<u32> {
        if !self.in_bounds(from) || !self.in_bounds(to) {
            return None;
        }
        if from == to {
            return Some(0);
        }
        let w = self.scene.grid_width;
        let mut dist = vec![u32::MAX; (w * self.scene.grid_height) as usize];
        let idx = |c: Cell| (c.1 * w + c.0) as usize;
        dist[idx(from)] = 0;
        let mut queue = VecDeque::new();
        queue.push_back(from);
        while let Some(c) = queue.pop_front() {
            let d = dist[idx(c)];
            for next in [(c.0 + 1, c.1), (c.0 - 1, c.1), (c.0, c.1 + 1), (c.0, c.1 - 1)] {
                if self.open_between(c, next) && dist[idx(next)] == u32::MAX {
                    if next == to {
                        return Some(d + 1);
                    }
                    dist[idx(next)] = d + 1;
                    queue.push_back(next);
                }
            }
        }
        None
    }

    /// Region sequence a path visits, consecutive duplicates removed.
    pub fn region_sequence(&self, start: Pose, actions: &[Action]) -> Vec<u32> {
        let mut pose = start;
        let mut seq = vec![self.region_at(pose.cell()).expect("pose in bounds")];
        for &a in actions {
            pose = self.step(&pose, a);
            let r = self.region_at(pose.cell()).expect("pose in bounds");
            if *seq.last().unwrap() != r {
                seq.push(r);
            }
        }
        seq
    }

    /// Landmark of a room: its lowest-numbered object.
    pub fn landmark(&self, region_id: u32) -> Option<&ObjectInstance> {
        self.scene
            .objects
            .iter()
            .filter(|o| o.region_id == region_id)
            .min_by_key(|o| o.object_id)
    }
}

/// Deterministic instruction over the fixed word list: names, in order, the
/// room types a path enters and one landmark object per room.
pub fn make_instruction(world: &World, path: &[Action], start: Pose) -> Vec<String> {
    let seq = world.region_sequence(start, path);
    let mut words: Vec<String> = Vec::new();
    if seq.len() == 1 {
        match world.landmark(seq[0]) {
            Some(obj) => {
                words.extend(
                    ["walk", "to", "the", obj.attribute.name(), obj.category.name()]
                        .iter()
                        .map(|s| s.to_string()),
                );
            }
            None => {
                words.extend(["turn", "around"].iter().map(|s| s.to_string()));
            }
        }
    } else {
        for (i, &region) in seq.iter().skip(1).enumerate() {
            if i > 0 {
                words.push("then".to_string());
            }
            let room = world.room(region).expect("region exists");
            words.extend(
                ["walk", "into", "the", room.room_type.name()]
                    .iter()
                    .map(|s| s.to_string()),
            );
            if let Some(obj) = world.landmark(region) {
                words.extend(
                    ["pass", "the", obj.attribute.name(), obj.category.name()]
                        .iter()
                        .map(|s| s.to_string()),
                );
            }
        }
    }
    words.extend(["and", "stop"].iter().map(|s| s.to_string()));
    words
}
