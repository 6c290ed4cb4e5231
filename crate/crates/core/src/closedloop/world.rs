//! Kinematic pick-and-place world: a point gripper, spherical objects and
//! goal regions inside a unit-cube arena. No dynamics; a held object is
//! rigidly attached to the gripper.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Width of the raw world-state observation vector.
pub const OBS_DIM: usize = 17;
/// Proprioception: gripper position and closed flag.
pub const PROPRIO_DIM: usize = 4;
/// Object slots encoded in the observation.
pub const MAX_OBJECTS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldConfig {
    pub grasp_radius: f64,
    pub max_step: f64,
    pub goal_tolerance: f64,
    pub arena_lo: f64,
    pub arena_hi: f64,
    /// Height at which objects rest on the table.
    pub rest_height: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            grasp_radius: 0.05,
            max_step: 0.02,
            goal_tolerance: 0.05,
            arena_lo: 0.0,
            arena_hi: 1.0,
            rest_height: 0.03,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.grasp_radius > 0.0
            && self.max_step > 0.0
            && self.goal_tolerance > 0.0
            && self.arena_hi > self.arena_lo
            && (self.arena_lo..=self.arena_hi).contains(&self.rest_height);
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "invalid world config {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Object {
    pub id: usize,
    pub pos: [f64; 3],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoalRegion {
    pub object_id: usize,
    pub target: [f64; 3],
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub gripper_pos: [f64; 3],
    pub gripper_open: bool,
    pub held_object: Option<usize>,
    pub objects: Vec<Object>,
    pub goal_regions: Vec<GoalRegion>,
    pub step: u64,
}

pub fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

impl WorldState {
    pub fn object(&self, id: usize) -> Option<&Object> {
        self.objects.iter().find(|o| o.id == id)
    }

    fn object_mut(&mut self, id: usize) -> Option<&mut Object> {
        self.objects.iter_mut().find(|o| o.id == id)
    }

    /// Every goal region holds its object, released.
    pub fn is_success(&self) -> bool {
        !self.goal_regions.is_empty()
            && self.goal_regions.iter().all(|g| {
                self.held_object != Some(g.object_id)
                    && self
                        .object(g.object_id)
                        .is_some_and(|o| dist(o.pos, g.target) <= g.tolerance)
            })
    }

    /// Raw observation: gripper position, closed flag, then per object slot
    /// (position, held, present), then the first goal target.
    pub fn observation(&self) -> [f64; OBS_DIM] {
        let mut o = [0.0; OBS_DIM];
        o[..3].copy_from_slice(&self.gripper_pos);
        o[3] = if self.gripper_open { 0.0 } else { 1.0 };
        for slot in 0..MAX_OBJECTS {
            if let Some(obj) = self.objects.get(slot) {
                let base = 4 + slot * 5;
                o[base..base + 3].copy_from_slice(&obj.pos);
                o[base + 3] = if self.held_object == Some(obj.id) {
                    1.0
                } else {
                    0.0
                };
                o[base + 4] = 1.0;
            }
        }
        if let Some(g) = self.goal_regions.first() {
            o[14..17].copy_from_slice(&g.target);
        }
        o
    }

    pub fn proprioception(&self) -> [f64; PROPRIO_DIM] {
        let p = self.gripper_pos;
        [p[0], p[1], p[2], if self.gripper_open { 0.0 } else { 1.0 }]
    }

    /// Releases the held object, which falls straight down to the table.
    pub fn force_drop(&mut self, cfg: &WorldConfig) {
        if let Some(id) = self.held_object.take() {
            if let Some(o) = self.object_mut(id) {
                o.pos[2] = cfg.rest_height;
            }
        }
        self.gripper_open = true;
    }
}

/// Advances the world by one action `[dx, dy, dz, gripper]`.
///
/// The displacement is clamped per axis to `±max_step` and the gripper stays
/// in the arena. A command above 0.5 closes the gripper; closing within
/// `grasp_radius` of a free object attaches the nearest one. Opening detaches
/// the held object where it is.
pub fn world_step(state: &WorldState, action: [f64; 4], cfg: &WorldConfig) -> Result<WorldState> {
    if action.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite("world_step action".into()));
    }
    let mut s = state.clone();
    for a in 0..3 {
        let d = action[a].clamp(-cfg.max_step, cfg.max_step);
        s.gripper_pos[a] = (s.gripper_pos[a] + d).clamp(cfg.arena_lo, cfg.arena_hi);
    }
    let close = action[3] > 0.5;
    if close && s.gripper_open {
        s.gripper_open = false;
        let nearest = s
            .objects
            .iter()
            .map(|o| (o.id, dist(o.pos, s.gripper_pos)))
            .filter(|&(_, d)| d <= cfg.grasp_radius)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        s.held_object = nearest.map(|(id, _)| id);
    } else if !close && !s.gripper_open {
        s.gripper_open = true;
        s.held_object = None;
    }
    if let Some(id) = s.held_object {
        let p = s.gripper_pos;
        if let Some(o) = s.object_mut(id) {
            o.pos = p;
        }
    }
    s.step += 1;
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// One object, one goal region.
    PickPlace,
    /// Two objects; the task id names which one goes to the goal.
    Distractor { target: usize },
}

/// A grasp is broken after the gripper has held the target for this many
/// consecutive steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropEvent {
    pub after_grasp_steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task_id: usize,
    pub kind: TaskKind,
    /// xy range for object and goal placement.
    pub table_range: (f64, f64),
    /// Range for each coordinate of the initial gripper position (z uses
    /// `gripper_z_range`).
    pub gripper_xy_range: (f64, f64),
    pub gripper_z_range: (f64, f64),
    /// Minimum xy separation between any two of {objects, goal}.
    pub min_separation: f64,
    pub object_radius: f64,
    pub perturbation: Option<DropEvent>,
}

pub const PICK_PLACE_TASK: usize = 0;
pub const DISTRACTOR_TASKS: [usize; 2] = [1, 2];
/// Size of the task vocabulary (text-embedding rows).
pub const TASK_VOCAB: usize = 4;

impl TaskSpec {
    pub fn pick_place() -> Self {
        Self {
            task_id: PICK_PLACE_TASK,
            kind: TaskKind::PickPlace,
            table_range: (0.15, 0.85),
            gripper_xy_range: (0.2, 0.8),
            gripper_z_range: (0.15, 0.45),
            min_separation: 0.25,
            object_radius: 0.03,
            perturbation: None,
        }
    }

    /// Two-object task where the instruction selects object `target`.
    pub fn distractor(target: usize) -> Self {
        Self {
            task_id: DISTRACTOR_TASKS[target.min(1)],
            kind: TaskKind::Distractor {
                target: target.min(1),
            },
            ..Self::pick_place()
        }
    }

    pub fn with_drop(mut self, after_grasp_steps: u64) -> Self {
        self.perturbation = Some(DropEvent { after_grasp_steps });
        self
    }

    /// Task by vocabulary id.
    pub fn from_id(task_id: usize) -> Result<Self> {
        match task_id {
            PICK_PLACE_TASK => Ok(Self::pick_place()),
            1 => Ok(Self::distractor(0)),
            2 => Ok(Self::distractor(1)),
            _ => Err(Error::UnknownTask(task_id)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        if !(r(self.table_range) && r(self.gripper_xy_range) && r(self.gripper_z_range))
            || self.object_radius <= 0.0
            || self.min_separation < 0.0
            || self.task_id >= TASK_VOCAB
        {
            return Err(Error::InvalidArgument(format!(
                "invalid task spec {self:?}"
            )));
        }
        Ok(())
    }

    pub fn num_objects(&self) -> usize {
        match self.kind {
            TaskKind::PickPlace => 1,
            TaskKind::Distractor { .. } => 2,
        }
    }

    /// Object id the task asks to move.
    pub fn target_object(&self) -> usize {
        match self.kind {
            TaskKind::PickPlace => 0,
            TaskKind::Distractor { target } => target,
        }
    }

    /// Samples an initial world from the randomization ranges.
    pub fn reset(&self, seed: u64, cfg: &WorldConfig) -> WorldState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_3011d);
        let (lo, hi) = self.table_range;
        let mut placed: Vec<[f64; 2]> = Vec::new();
        // objects then goal, each separated from the others; after a bounded
        // number of rejections the last draw is kept
        for _ in 0..self.num_objects() + 1 {
            let mut p = [0.0; 2];
            for _ in 0..200 {
                p = [rng.random_range(lo..=hi), rng.random_range(lo..=hi)];
                let d_ok = placed.iter().all(|q| {
                    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() >= self.min_separation
                });
                if d_ok {
                    break;
                }
            }
            placed.push(p);
        }
        let objects = (0..self.num_objects())
            .map(|id| Object {
                id,
                pos: [placed[id][0], placed[id][1], cfg.rest_height],
                radius: self.object_radius,
            })
            .collect();
        let g = placed[self.num_objects()];
        let goal = GoalRegion {
            object_id: self.target_object(),
            target: [g[0], g[1], cfg.rest_height],
            tolerance: cfg.goal_tolerance,
        };
        let (gl, gh) = self.gripper_xy_range;
        let (zl, zh) = self.gripper_z_range;
        let gripper_pos = [
            rng.random_range(gl..=gh),
            rng.random_range(gl..=gh),
            rng.random_range(zl..=zh),
        ];
        WorldState {
            gripper_pos,
            gripper_open: true,
            held_object: None,
            objects,
            goal_regions: vec![goal],
            step: 0,
        }
    }
}

/// Fixed rigid offsets of the tracked keypoints relative to the gripper
/// center: two fingers of `n / 2` points each.
pub fn keypoint_offsets(n: usize) -> Vec<[f64; 3]> {
    let per_finger = n.div_ceil(2).max(1);
    (0..n)
        .map(|i| {
            let finger = if i % 2 == 0 { -1.0 } else { 1.0 };
            let j = (i / 2) as f64;
            let along = if per_finger > 1 {
                j / (per_finger - 1) as f64
            } else {
                0.0
            };
            [
                finger * 0.015,
                0.004 * ((i / 2) % 3) as f64 - 0.004,
                -0.03 * along,
            ]
        })
        .collect()
}

/// Keypoint positions for a gripper at `pos`.
pub fn keypoints_at(pos: [f64; 3], offsets: &[[f64; 3]]) -> Vec<[f64; 3]> {
    offsets
        .iter()
        .map(|o| [pos[0] + o[0], pos[1] + o[1], pos[2] + o[2]])
        .collect()
}
