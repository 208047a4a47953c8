//! Procedural scene construction: recursive rectangle splitting, a spanning
//! set of doors, room-type assignment, and object placement.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    Category, Color, Door, GridError, ObjectInstance, Rect, Room, RoomType, SceneGraph, World,
};

/// Knobs for [`generate_scene`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub grid_width: i32,
    pub grid_height: i32,
    pub rooms: usize,
    /// Chance of an extra door on each adjacent room pair beyond the
    /// spanning set.
    pub extra_door_prob: f64,
    pub objects_per_room_min: usize,
    pub objects_per_room_max: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            grid_width: 12,
            grid_height: 12,
            rooms: 4,
            extra_door_prob: 0.3,
            objects_per_room_min: 2,
            objects_per_room_max: 3,
        }
    }
}

const MIN_ROOM_SIDE: i32 = 3;
const LAYOUT_ATTEMPTS: usize = 32;

/// Builds a scene whose rooms tile the full grid. Identical seed and config
/// give a bit-identical scene.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<SceneGraph, GridError> {
    if config.grid_width < 8 || config.grid_height < 8 {
        return Err(GridError::InvalidScene(alloc::format!(
            "grid {}x{} below 8x8 minimum",
            config.grid_width,
            config.grid_height
        )));
    }
    if config.rooms == 0 {
        return Err(GridError::InvalidScene("rooms must be >= 1".into()));
    }
    if config.objects_per_room_min > config.objects_per_room_max {
        return Err(GridError::InvalidScene("object count range inverted".into()));
    }
    if !(0.0..=1.0).contains(&config.extra_door_prob) {
        return Err(GridError::InvalidScene("extra_door_prob outside [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..LAYOUT_ATTEMPTS {
        let Some(rects) = try_split(&mut rng, config) else { continue };
        let scene = assemble(seed, config, rects, &mut rng);
        // Construction is checked against the full invariant set before the
        // scene leaves this function.
        return World::new(scene).map(World::into_scene);
    }
    Err(GridError::InfeasibleLayout)
}

fn try_split(rng: &mut ChaCha8Rng, config: &SceneConfig) -> Option<Vec<Rect>> {
    let mut rects = vec![Rect {
        x: 0,
        y: 0,
        w: config.grid_width,
        h: config.grid_height,
    }];
    while rects.len() < config.rooms {
        let splittable: Vec<usize> = rects
            .iter()
            .enumerate()
            .filter(|(_, r)| r.w >= 2 * MIN_ROOM_SIDE || r.h >= 2 * MIN_ROOM_SIDE)
            .map(|(i, _)| i)
            .collect();
        let &pick = splittable.choose(rng)?;
        let r = rects[pick];
        let can_v = r.w >= 2 * MIN_ROOM_SIDE;
        let can_h = r.h >= 2 * MIN_ROOM_SIDE;
        let vertical = if can_v && can_h { r.w >= r.h } else { can_v };
        let (first, second) = if vertical {
            let cut = rng.gen_range(MIN_ROOM_SIDE..=r.w - MIN_ROOM_SIDE);
            (
                Rect { x: r.x, y: r.y, w: cut, h: r.h },
                Rect { x: r.x + cut, y: r.y, w: r.w - cut, h: r.h },
            )
        } else {
            let cut = rng.gen_range(MIN_ROOM_SIDE..=r.h - MIN_ROOM_SIDE);
            (
                Rect { x: r.x, y: r.y, w: r.w, h: cut },
                Rect { x: r.x, y: r.y + cut, w: r.w, h: r.h - cut },
            )
        };
        rects[pick] = first;
        rects.push(second);
    }
    Some(rects)
}

/// All 4-adjacent cell pairs straddling the boundary between two rectangles.
fn boundary_pairs(a: &Rect, b: &Rect) -> Vec<(super::Cell, super::Cell)> {
    let mut out = Vec::new();
    for ca in a.cells() {
        for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
            let cb = (ca.0 + dx, ca.1 + dy);
            if b.contains(cb) {
                out.push((ca, cb));
            }
        }
    }
    out
}

fn assemble(
    seed: u64,
    config: &SceneConfig,
    rects: Vec<Rect>,
    rng: &mut ChaCha8Rng,
) -> SceneGraph {
    // Distinct room types first so small scenes still carry variety.
    let mut type_order: Vec<RoomType> = RoomType::ALL.to_vec();
    type_order.shuffle(rng);
    let rooms: Vec<Room> = rects
        .iter()
        .enumerate()
        .map(|(i, &rectangle)| Room {
            region_id: i as u32,
            room_type: if i < type_order.len() {
                type_order[i]
            } else {
                *RoomType::ALL.choose(rng).unwrap()
            },
            rectangle,
        })
        .collect();

    let mut edges: Vec<(usize, usize)> = Vec::new();
    for i in 0..rooms.len() {
        for j in i + 1..rooms.len() {
            if !boundary_pairs(&rooms[i].rectangle, &rooms[j].rectangle).is_empty() {
                edges.push((i, j));
            }
        }
    }
    edges.shuffle(rng);
    let mut parent: Vec<usize> = (0..rooms.len()).collect();
    fn find(parent: &mut Vec<usize>, x: usize) -> usize {
        if parent[x] != x {
            let root = find(parent, parent[x]);
            parent[x] = root;
        }
        parent[x]
    }
    let mut doors: Vec<Door> = Vec::new();
    let mut leftover: Vec<(usize, usize)> = Vec::new();
    for (i, j) in edges {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri != rj {
            parent[ri] = rj;
            let pairs = boundary_pairs(&rooms[i].rectangle, &rooms[j].rectangle);
            let &(a, b) = pairs.choose(rng).unwrap();
            doors.push(Door { a, b });
        } else {
            leftover.push((i, j));
        }
    }
    for (i, j) in leftover {
        if rng.gen_bool(config.extra_door_prob) {
            let pairs = boundary_pairs(&rooms[i].rectangle, &rooms[j].rectangle);
            let &(a, b) = pairs.choose(rng).unwrap();
            doors.push(Door { a, b });
        }
    }

    let mut objects: Vec<ObjectInstance> = Vec::new();
    let mut next_id = 0u32;
    for room in &rooms {
        let span = config.objects_per_room_min..=config.objects_per_room_max;
        let want = rng.gen_range(span);
        let mut cells: Vec<super::Cell> = room.rectangle.cells().collect();
        cells.shuffle(rng);
        for &cell in cells.iter().take(want) {
            objects.push(ObjectInstance {
                object_id: next_id,
                category: sample_category(rng, room.room_type),
                attribute: *Color::ALL.choose(rng).unwrap(),
                cell,
                region_id: room.region_id,
            });
            next_id += 1;
        }
    }

    SceneGraph {
        seed,
        grid_width: config.grid_width,
        grid_height: config.grid_height,
        rooms,
        doors,
        objects,
    }
}

/// Categories typical of each room type. Placement favors these so room
/// identity is statistically recoverable from co-visible objects.
fn signature(room: RoomType) -> [Category; 4] {
    match room {
        RoomType::Kitchen => [Category::Sink, Category::Table, Category::Shelf, Category::Vase],
        RoomType::Bedroom => [Category::Bed, Category::Lamp, Category::Mirror, Category::Rug],
        RoomType::LivingRoom => {
            [Category::Sofa, Category::Chair, Category::Plant, Category::Table]
        }
        RoomType::Bathroom => [Category::Sink, Category::Mirror, Category::Shelf, Category::Rug],
        RoomType::Hallway => [Category::Plant, Category::Mirror, Category::Rug, Category::Shelf],
        RoomType::Office => [Category::Desk, Category::Chair, Category::Shelf, Category::Lamp],
    }
}

const SIGNATURE_PROB: f64 = 0.7;

fn sample_category(rng: &mut ChaCha8Rng, room: RoomType) -> Category {
    if rng.gen_bool(SIGNATURE_PROB) {
        *signature(room).choose(rng).unwrap()
    } else {
        *Category::ALL.choose(rng).unwrap()
    }
}

impl World {
    pub fn into_scene(self) -> SceneGraph {
        self.scene
    }
}
