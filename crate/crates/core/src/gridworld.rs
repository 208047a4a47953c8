//! Deterministic multi-room gridworld: scene generation, egocentric
//! observation, discrete movement, shortest expert paths, and instruction
//! synthesis. Every operation is a pure function of its inputs.

mod generate;
mod route;
mod vision;


pub use generate::{generate_scene, SceneConfig};

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

/// Grid coordinate, serialized as `[x, y]`.
pub type Cell = (i32, i32);

/// View depth of the frontal cone, in cells.
pub const VIEW_DEPTH: i32 = 6;
/// Width of the depth profile: lateral offsets -2..=2.
pub const DEPTH_PROFILE_WIDTH: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GridError {
    /// Room rectangles could not be packed within the retry budget.
    InfeasibleLayout,
    /// No action sequence reaches the goal.
    Unreachable,
    /// A scene violates a structural invariant.
    InvalidScene(String),
}

impl fmt::Display for GridError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GridError::InfeasibleLayout => write!(f, "room layout infeasible for grid"),
            GridError::Unreachable => write!(f, "goal unreachable from start"),
            GridError::InvalidScene(d) => write!(f, "invalid scene: {d}"),
        }
    }
}

impl core::error::Error for GridError {}

macro_rules! named_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }
    };
}

named_enum!(RoomType {
    Kitchen => "kitchen",
    Bedroom => "bedroom",
    LivingRoom => "living_room",
    Bathroom => "bathroom",
    Hallway => "hallway",
    Office => "office",
});

named_enum!(Category {
    Chair => "chair",
    Lamp => "lamp",
    Sofa => "sofa",
    Sink => "sink",
    Bed => "bed",
    Vase => "vase",
    Shelf => "shelf",
    Table => "table",
    Desk => "desk",
    Mirror => "mirror",
    Rug => "rug",
    Plant => "plant",
});

named_enum!(Color {
    Red => "red",
    Blue => "blue",
    Green => "green",
    Yellow => "yellow",
    White => "white",
    Black => "black",
});

/// Facing direction. North points toward decreasing `y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Heading {
    N,
    E,
    S,
    W,
}

impl Heading {
    pub const ALL: &'static [Heading] = &[Heading::N, Heading::E, Heading::S, Heading::W];

    /// Unit vector of the facing direction.
    pub fn forward(self) -> (i32, i32) {
        match self {
            Heading::N => (0, -1),
            Heading::E => (1, 0),
            Heading::S => (0, 1),
            Heading::W => (-1, 0),
        }
    }

    /// Unit vector pointing to the agent's right.
    pub fn right_hand(self) -> (i32, i32) {
        self.turn_right().forward()
    }

    pub fn turn_left(self) -> Heading {
        match self {
            Heading::N => Heading::W,
            Heading::W => Heading::S,
            Heading::S => Heading::E,
            Heading::E => Heading::N,
        }
    }

    pub fn turn_right(self) -> Heading {
        match self {
            Heading::N => Heading::E,
            Heading::E => Heading::S,
            Heading::S => Heading::W,
            Heading::W => Heading::N,
        }
    }
}

/// Discrete action set. Listed in tie-break priority order for path search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    Forward,
    TurnLeft,
    TurnRight,
    Stop,
}

impl Action {
    pub const ALL: &'static [Action] =
        &[Action::Forward, Action::TurnLeft, Action::TurnRight, Action::Stop];

    pub fn name(self) -> &'static str {
        match self {
            Action::Forward => "FORWARD",
            Action::TurnLeft => "TURN_LEFT",
            Action::TurnRight => "TURN_RIGHT",
            Action::Stop => "STOP",
        }
    }
}

/// Axis-aligned room bounds in cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: i32,
    pub y: i32,
    pub w: i32,
    pub h: i32,
}

impl Rect {
    pub fn contains(&self, c: Cell) -> bool {
        c.0 >= self.x && c.0 < self.x + self.w && c.1 >= self.y && c.1 < self.y + self.h
    }

    pub fn area(&self) -> i32 {
        self.w * self.h
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        let (x0, y0, w, h) = (self.x, self.y, self.w, self.h);
        (0..h).flat_map(move |dy| (0..w).map(move |dx| (x0 + dx, y0 + dy)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Room {
    pub region_id: u32,
    pub room_type: RoomType,
    pub rectangle: Rect,
}

/// Passage between two adjacent cells of different rooms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Door {
    pub a: Cell,
    pub b: Cell,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub object_id: u32,
    pub category: Category,
    pub attribute: Color,
    pub cell: Cell,
    pub region_id: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub seed: u64,
    pub grid_width: i32,
    pub grid_height: i32,
    pub rooms: Vec<Room>,
    pub doors: Vec<Door>,
    pub objects: Vec<ObjectInstance>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pose {
    pub x: i32,
    pub y: i32,
    pub heading: Heading,
}

impl Pose {
    pub fn cell(&self) -> Cell {
        (self.x, self.y)
    }
}

/// One object as seen from a pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibleObject {
    pub object_id: u32,
    pub category: Category,
    pub attribute: Color,
    pub apparent_size: f64,
    pub egocentric_bearing: Bearing,
    pub distance: u32,
}

named_enum!(Bearing {
    Left => "left",
    Center => "center",
    Right => "right",
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: u32,
    pub visible: Vec<VisibleObject>,
    pub depth_profile: Vec<f64>,
    /// Ground-truth region at the pose; available to training only.
    pub region_id: u32,
}

/// Validated scene plus lookup structures for movement and sight.
#[derive(Debug, Clone)]
pub struct World {
    scene: SceneGraph,
    region_map: Vec<u32>,
    door_set: BTreeSet<(Cell, Cell)>,
}

fn canonical_pair(a: Cell, b: Cell) -> (Cell, Cell) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl World {
    /// Validates every structural invariant of the scene and builds the
    /// runtime index. Deserialized scenes go through here before use.
    pub fn new(scene: SceneGraph) -> Result<World, GridError> {
        let (w, h) = (scene.grid_width, scene.grid_height);
        if w <= 0 || h <= 0 {
            return Err(GridError::InvalidScene(alloc::format!("grid {w}x{h}")));
        }
        if scene.rooms.is_empty() {
            return Err(GridError::InvalidScene("no rooms".into()));
        }
        let mut region_of_room = BTreeMap::new();
        let mut region_map_opt: Vec<Option<u32>> = alloc::vec![None; (w * h) as usize];
        for room in &scene.rooms {
            if region_of_room.insert(room.region_id, room.room_type).is_some() {
                return Err(GridError::InvalidScene(alloc::format!(
                    "duplicate region_id {}",
                    room.region_id
                )));
            }
            let r = &room.rectangle;
            if r.w <= 0 || r.h <= 0 || r.x < 0 || r.y < 0 || r.x + r.w > w || r.y + r.h > h {
                return Err(GridError::InvalidScene(alloc::format!(
                    "room {} exceeds grid",
                    room.region_id
                )));
            }
            for c in r.cells() {
                let slot = &mut region_map_opt[(c.1 * w + c.0) as usize];
                if slot.is_some() {
                    return Err(GridError::InvalidScene(alloc::format!(
                        "cell {c:?} covered twice"
                    )));
                }
                *slot = Some(room.region_id);
            }
        }
        let mut door_set = BTreeSet::new();
        for d in &scene.doors {
            let manhattan =
                (d.a.0 - d.b.0).abs() + (d.a.1 - d.b.1).abs();
            if manhattan != 1 {
                return Err(GridError::InvalidScene(alloc::format!(
                    "door cells {:?} {:?} not adjacent",
                    d.a,
                    d.b
                )));
            }
            let ra = cell_region(&region_map_opt, w, h, d.a);
            let rb = cell_region(&region_map_opt, w, h, d.b);
            match (ra, rb) {
                (Some(ra), Some(rb)) if ra != rb => {}
                _ => {
                    return Err(GridError::InvalidScene(alloc::format!(
                        "door {:?} {:?} does not join two rooms",
                        d.a,
                        d.b
                    )))
                }
            }
            door_set.insert(canonical_pair(d.a, d.b));
        }
        for o in &scene.objects {
            match cell_region(&region_map_opt, w, h, o.cell) {
                Some(r) if r == o.region_id => {}
                _ => {
                    return Err(GridError::InvalidScene(alloc::format!(
                        "object {} region mismatch at {:?}",
                        o.object_id,
                        o.cell
                    )))
                }
            }
        }
        let mut ids = BTreeSet::new();
        if !scene.objects.iter().all(|o| ids.insert(o.object_id)) {
            return Err(GridError::InvalidScene("duplicate object_id".into()));
        }
        // Connectivity over the room graph induced by doors.
        let mut reached = BTreeSet::new();
        let first = scene.rooms[0].region_id;
        let mut stack = alloc::vec![first];
        reached.insert(first);
        while let Some(r) = stack.pop() {
            for d in &scene.doors {
                let ra = cell_region(&region_map_opt, w, h, d.a).unwrap();
                let rb = cell_region(&region_map_opt, w, h, d.b).unwrap();
                for (from, to) in [(ra, rb), (rb, ra)] {
                    if from == r && reached.insert(to) {
                        stack.push(to);
                    }
                }
            }
        }
        if reached.len() != scene.rooms.len() {
            return Err(GridError::InvalidScene("rooms not mutually reachable".into()));
        }
        let region_map = region_map_opt
            .iter()
            .map(|s| s.ok_or_else(|| GridError::InvalidScene("uncovered cell".into())))
            .collect::<Result<Vec<u32>, _>>()?;
        Ok(World { scene, region_map, door_set })
    }

    /// Builds the runtime index without invariant checks. Test-only escape
    /// hatch for deliberately malformed layouts.
    #[cfg(test)]
    pub(crate) fn new_unchecked(scene: SceneGraph) -> World {
        let w = scene.grid_width;
        let mut region_map = alloc::vec![0u32; (w * scene.grid_height) as usize];
        for room in &scene.rooms {
            for c in room.rectangle.cells() {
                region_map[(c.1 * w + c.0) as usize] = room.region_id;
            }
        }
        let door_set = scene.doors.iter().map(|d| canonical_pair(d.a, d.b)).collect();
        World { scene, region_map, door_set }
    }

    pub fn scene(&self) -> &SceneGraph {
        &self.scene
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.0 >= 0 && c.0 < self.scene.grid_width && c.1 >= 0 && c.1 < self.scene.grid_height
    }

    pub fn region_at(&self, c: Cell) -> Option<u32> {
        if self.in_bounds(c) {
            Some(self.region_map[(c.1 * self.scene.grid_width + c.0) as usize])
        } else {
            None
        }
    }

    pub fn room(&self, region_id: u32) -> Option<&Room> {
        self.scene.rooms.iter().find(|r| r.region_id == region_id)
    }

    pub fn room_type_at(&self, c: Cell) -> Option<RoomType> {
        self.region_at(c)
            .and_then(|r| self.room(r))
            .map(|r| r.room_type)
    }

    /// Region ids adjacent to `region_id` through at least one door.
    pub fn door_neighbors(&self, region_id: u32) -> BTreeSet<u32> {
        let mut out = BTreeSet::new();
        for (a, b) in self.door_set.iter() {
            let ra = self.region_at(*a).unwrap();
            let rb = self.region_at(*b).unwrap();
            if ra == region_id {
                out.insert(rb);
            } else if rb == region_id {
                out.insert(ra);
            }
        }
        out
    }

    /// Whether movement or sight may pass between two 4-adjacent cells.
    pub fn open_between(&self, a: Cell, b: Cell) -> bool {
        if !self.in_bounds(a) || !self.in_bounds(b) {
            return false;
        }
        debug_assert_eq!((a.0 - b.0).abs() + (a.1 - b.1).abs(), 1);
        self.region_at(a) == self.region_at(b)
            || self.door_set.contains(&canonical_pair(a, b))
    }

    /// Applies one action. FORWARD into a wall leaves the position unchanged.
    pub fn step(&self, pose: &Pose, action: Action) -> Pose {
        match action {
            Action::Forward => {
                let (dx, dy) = pose.heading.forward();
                let target = (pose.x + dx, pose.y + dy);
                if self.open_between(pose.cell(), target) {
                    Pose { x: target.0, y: target.1, heading: pose.heading }
                } else {
                    *pose
                }
            }
            Action::TurnLeft => Pose { heading: pose.heading.turn_left(), ..*pose },
            Action::TurnRight => Pose { heading: pose.heading.turn_right(), ..*pose },
            Action::Stop => *pose,
        }
    }
}

fn cell_region(map: &[Option<u32>], w: i32, h: i32, c: Cell) -> Option<u32> {
    if c.0 >= 0 && c.0 < w && c.1 >= 0 && c.1 < h {
        map[(c.1 * w + c.0) as usize]
    } else {
        None
    }
}

pub use route::make_instruction;
