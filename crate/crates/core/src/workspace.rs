//! Task-board geometry and state: pegs, triangular blocks, the instrument
//! tip, and the success predicates for pick and place.
//!
//! All positions are planar, in millimeters, in a fixed base frame whose
//! origin sits on peg 0. The board holds two 2x3 peg grids at 25 mm pitch
//! (ids 0-5 left, 6-11 right) and six blocks.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::rng::{rng_from_seed, sample_disc};

/// Planar position in millimeters.
#[derive(Copy, Clone, Debug, Default, PartialEq)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
}

impl Pose2 {
    pub const ZERO: Pose2 = Pose2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Pose2 { x, y }
    }

    pub fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y).sqrt()
    }

    pub fn dist(self, other: Pose2) -> f64 {
        (self - other).norm()
    }

    pub fn dot(self, other: Pose2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// Z component of the cross product `self x other`.
    pub fn cross(self, other: Pose2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn scaled(self, s: f64) -> Pose2 {
        Pose2::new(self.x * s, self.y * s)
    }

    /// Rescales to the given length; the zero vector stays zero.
    pub fn with_norm(self, len: f64) -> Pose2 {
        let n = self.norm();
        if n == 0.0 {
            Pose2::ZERO
        } else {
            self.scaled(len / n)
        }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl std::ops::Add for Pose2 {
    type Output = Pose2;
    fn add(self, rhs: Pose2) -> Pose2 {
        Pose2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Pose2 {
    type Output = Pose2;
    fn sub(self, rhs: Pose2) -> Pose2 {
        Pose2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

// Serialized as a bare `[x, y]` pair; dataset manifests and reports rely on
// this shape.
impl Serialize for Pose2 {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        [self.x, self.y].serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Pose2 {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = <[f64; 2]>::deserialize(deserializer)?;
        if !v[0].is_finite() || !v[1].is_finite() {
            return Err(D::Error::custom("non-finite pose component"));
        }
        Ok(Pose2::new(v[0], v[1]))
    }
}

pub const PEG_COUNT: usize = 12;
pub const BLOCK_COUNT: usize = 6;
pub const PEG_PITCH_MM: f64 = 25.0;
pub const PEG_RADIUS_MM: f64 = 1.125;
pub const OPENING_RADIUS_MM: f64 = 4.5;
pub const FOOTPRINT_SIDE_MM: f64 = 18.0;

/// Largest block-center offset from the peg axis that still counts as a
/// successful placement (opening radius minus peg radius).
pub const PLACE_CLEARANCE_MM: f64 = OPENING_RADIUS_MM - PEG_RADIUS_MM;

/// Rectangular motion bounds: the peg bounding box inflated by this margin.
pub const WORKSPACE_MARGIN_MM: f64 = 50.0;

/// Parking pose for the tip between trials, off the board's lower edge.
pub const HOME: Pose2 = Pose2 { x: 50.0, y: -30.0 };

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn peg_ids(self) -> std::ops::Range<usize> {
        match self {
            Side::Left => 0..6,
            Side::Right => 6..12,
        }
    }
}

/// Vertical level of the tip. Travel clears everything, the correction plane
/// hovers just above peg tops, board level is where jaws meet blocks.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZLevel {
    Travel,
    Plane,
    Board,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Jaw {
    Open,
    Closed,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockState {
    /// Resting around the peg with the given id.
    OnPeg(usize),
    /// Held by the instrument; the opening center tracks the true tip pose.
    Grasped,
    /// Released outside placement clearance. Terminal.
    Dropped,
}

#[derive(Copy, Clone, Debug, Serialize, Deserialize)]
pub struct Peg {
    pub id: usize,
    pub center: Pose2,
    pub radius_mm: f64,
}

#[derive(Copy, Clone, Debug, Serialize, Deserialize)]
pub struct Block {
    pub id: usize,
    pub opening_center: Pose2,
    /// Rotation of the triangular footprint, radians.
    pub orientation_rad: f64,
    pub opening_radius_mm: f64,
    pub footprint_side_mm: f64,
    pub state: BlockState,
}

impl Block {
    /// Distance from the footprint centroid to each vertex.
    pub fn circumradius_mm(&self) -> f64 {
        self.footprint_side_mm / 3f64.sqrt()
    }

    /// Vertices of the equilateral footprint, counter-clockwise. At
    /// orientation 0 one vertex points along +y.
    pub fn footprint_vertices(&self) -> [Pose2; 3] {
        let r = self.circumradius_mm();
        let base = self.orientation_rad + std::f64::consts::FRAC_PI_2;
        let step = std::f64::consts::TAU / 3.0;
        [0, 1, 2].map(|k| {
            let a = base + step * k as f64;
            self.opening_center + Pose2::new(r * a.cos(), r * a.sin())
        })
    }
}

/// Full simulation state for one trial.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskState {
    pub pegs: Vec<Peg>,
    pub blocks: Vec<Block>,
    /// True (physical) tip position; differs from the commanded pose by the
    /// actuator's transmission error.
    pub tip_true: Pose2,
    pub tip_z: ZLevel,
    pub jaw: Jaw,
    /// Simulated wall clock, seconds. Only ever advances.
    pub clock_s: f64,
    /// Set while a motion primitive is executing; perception is only valid
    /// between motions.
    pub tip_in_motion: bool,
}

impl TaskState {
    pub fn grasped_block(&self) -> Option<&Block> {
        self.blocks.iter().find(|b| b.state == BlockState::Grasped)
    }

    pub fn grasped_block_mut(&mut self) -> Option<&mut Block> {
        self.blocks
            .iter_mut()
            .find(|b| b.state == BlockState::Grasped)
    }

    pub fn block_on_peg(&self, peg_id: usize) -> Option<&Block> {
        assert!(peg_id < PEG_COUNT, "peg id {peg_id} out of range");
        self.blocks
            .iter()
            .find(|b| b.state == BlockState::OnPeg(peg_id))
    }

    pub fn advance_clock(&mut self, dt_s: f64) {
        debug_assert!(dt_s >= 0.0, "clock must be monotone");
        self.clock_s += dt_s;
    }

    /// Moves a grasped block along with the tip.
    pub fn sync_grasped_block(&mut self) {
        let tip = self.tip_true;
        if let Some(b) = self.grasped_block_mut() {
            b.opening_center = tip;
        }
    }
}

/// Centers of the 12 pegs: two 2x3 grids at 25 mm pitch, column-major ids.
pub fn peg_positions() -> [Pose2; PEG_COUNT] {
    let mut out = [Pose2::ZERO; PEG_COUNT];
    let cols = [0.0, 25.0, 75.0, 100.0];
    for (c, &x) in cols.iter().enumerate() {
        for row in 0..3 {
            out[c * 3 + row] = Pose2::new(x, PEG_PITCH_MM * row as f64);
        }
    }
    out
}

/// The matching peg on the other grid, used for transfers.
pub fn opposite_peg(peg_id: usize) -> usize {
    assert!(peg_id < PEG_COUNT, "peg id {peg_id} out of range");
    (peg_id + 6) % PEG_COUNT
}

/// Inclusive motion bounds `(min, max)` for commanded positions.
pub fn workspace_bounds() -> (Pose2, Pose2) {
    let pegs = peg_positions();
    let (mut min, mut max) = (pegs[0], pegs[0]);
    for p in pegs {
        min.x = min.x.min(p.x);
        min.y = min.y.min(p.y);
        max.x = max.x.max(p.x);
        max.y = max.y.max(p.y);
    }
    (
        min - Pose2::new(WORKSPACE_MARGIN_MM, WORKSPACE_MARGIN_MM),
        max + Pose2::new(WORKSPACE_MARGIN_MM, WORKSPACE_MARGIN_MM),
    )
}

pub fn in_workspace(p: Pose2) -> bool {
    let (min, max) = workspace_bounds();
    p.is_finite() && p.x >= min.x && p.x <= max.x && p.y >= min.y && p.y <= max.y
}

/// Random resting pose for a block on a peg: center offset uniform within
/// the placement clearance, orientation uniform. Used wherever a board is
/// staged with "a block sits on this peg, details unimportant".
pub fn random_block_config(rng: &mut rand_chacha::ChaCha8Rng, peg: Pose2) -> (Pose2, f64) {
    use rand::Rng;
    let (dx, dy) = sample_disc(rng, PLACE_CLEARANCE_MM);
    let orientation = rng.gen::<f64>() * std::f64::consts::TAU;
    (peg + Pose2::new(dx, dy), orientation)
}

pub fn make_block(id: usize, center: Pose2, orientation_rad: f64, state: BlockState) -> Block {
    Block {
        id,
        opening_center: center,
        orientation_rad,
        opening_radius_mm: OPENING_RADIUS_MM,
        footprint_side_mm: FOOTPRINT_SIDE_MM,
        state,
    }
}

/// Fresh trial state: six blocks on one side's pegs with seeded random
/// orientations and in-clearance offsets, tip parked at home.
pub fn init_board(seed: u64, side: Side) -> TaskState {
    let mut rng = rng_from_seed(seed);
    let pegs: Vec<Peg> = peg_positions()
        .iter()
        .enumerate()
        .map(|(id, &center)| Peg {
            id,
            center,
            radius_mm: PEG_RADIUS_MM,
        })
        .collect();

    let blocks = side
        .peg_ids()
        .enumerate()
        .map(|(block_id, peg_id)| {
            let (center, orientation) = random_block_config(&mut rng, pegs[peg_id].center);
            make_block(block_id, center, orientation, BlockState::OnPeg(peg_id))
        })
        .collect();

    TaskState {
        pegs,
        blocks,
        tip_true: HOME,
        tip_z: ZLevel::Travel,
        jaw: Jaw::Open,
        clock_s: 0.0,
        tip_in_motion: false,
    }
}

fn in_footprint(block: &Block, p: Pose2) -> bool {
    let v = block.footprint_vertices();
    (0..3).all(|i| {
        let a = v[i];
        let b = v[(i + 1) % 3];
        (b - a).cross(p - a) >= 0.0
    })
}

/// True on block material: inside the triangular footprint (boundary
/// inclusive) and strictly outside the central opening.
pub fn block_material_contains(block: &Block, p: Pose2) -> bool {
    in_footprint(block, p) && p.dist(block.opening_center) > block.opening_radius_mm
}

/// Grasp point for a resting block, in the base frame.
///
/// The returned point sits on the bisector toward one footprint vertex at the
/// depth that maximizes clearance to both the opening and the two adjacent
/// edges; of the material band between opening and boundary this is the
/// midpoint with the widest margin, about 1.96 mm for the default block.
/// Deterministic, and equivariant: rotating the block rotates the point.
pub fn grasp_target(block: &Block) -> Pose2 {
    let g = (block.circumradius_mm() + 2.0 * block.opening_radius_mm) / 3.0;
    let a = block.orientation_rad + std::f64::consts::FRAC_PI_2;
    block.opening_center + Pose2::new(g * a.cos(), g * a.sin())
}

/// Worst-case margin of the grasp point to the opening and footprint edges.
pub fn grasp_clearance_mm(block: &Block) -> f64 {
    (block.circumradius_mm() - block.opening_radius_mm) / 3.0
}

/// True iff a grasp-and-lift completion ended holding a block: some block is
/// grasped, the jaw is closed and the tip is back at travel level.
pub fn check_pick_success(state: &TaskState) -> bool {
    state.grasped_block().is_some() && state.tip_z == ZLevel::Travel && state.jaw == Jaw::Closed
}

/// True iff a block rests on the given peg. Release logic only files a block
/// under `OnPeg` when it lands within placement clearance, so presence is
/// success.
pub fn check_place_success(state: &TaskState, peg_id: usize) -> bool {
    assert!(peg_id < PEG_COUNT, "peg id {peg_id} out of range");
    state.block_on_peg(peg_id).is_some()
}

/// Geometric placement test applied at release.
pub fn place_within_clearance(opening_center: Pose2, peg: &Peg) -> bool {
    opening_center.dist(peg.center) <= OPENING_RADIUS_MM - peg.radius_mm
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn canonical_block() -> Block {
        make_block(0, Pose2::ZERO, 0.0, BlockState::OnPeg(0))
    }

    /// Independent point-in-material oracle: barycentric triangle test plus
    /// circle exclusion, written against the vertex list directly.
    fn material_oracle(block: &Block, p: Pose2) -> bool {
        let [a, b, c] = block.footprint_vertices();
        let d = (b.y - c.y) * (a.x - c.x) + (c.x - b.x) * (a.y - c.y);
        let l1 = ((b.y - c.y) * (p.x - c.x) + (c.x - b.x) * (p.y - c.y)) / d;
        let l2 = ((c.y - a.y) * (p.x - c.x) + (a.x - c.x) * (p.y - c.y)) / d;
        let l3 = 1.0 - l1 - l2;
        let inside = l1 >= -1e-12 && l2 >= -1e-12 && l3 >= -1e-12;
        inside && p.dist(block.opening_center) > block.opening_radius_mm
    }

    #[test]
    fn peg_layout_matches_expected_grid() {
        let pegs = peg_positions();
        assert_eq!(pegs[0], Pose2::new(0.0, 0.0));
        assert_eq!(pegs[7], Pose2::new(75.0, 25.0));
        assert_eq!(pegs[11], Pose2::new(100.0, 50.0));
        for i in 0..PEG_COUNT {
            for j in (i + 1)..PEG_COUNT {
                assert!(pegs[i].dist(pegs[j]) >= PEG_PITCH_MM - 1e-12);
            }
        }
    }

    #[test]
    fn init_board_is_deterministic_and_seed_sensitive() {
        let a = init_board(42, Side::Left);
        let b = init_board(42, Side::Left);
        let c = init_board(43, Side::Left);
        for (x, y) in a.blocks.iter().zip(&b.blocks) {
            assert_eq!(x.opening_center, y.opening_center);
            assert_eq!(x.orientation_rad, y.orientation_rad);
        }
        assert!(a
            .blocks
            .iter()
            .zip(&c.blocks)
            .any(|(x, y)| x.opening_center != y.opening_center));
    }

    #[test]
    fn init_board_places_blocks_within_clearance_on_one_side() {
        let state = init_board(7, Side::Left);
        assert_eq!(state.blocks.len(), BLOCK_COUNT);
        for (i, b) in state.blocks.iter().enumerate() {
            let BlockState::OnPeg(peg) = b.state else {
                panic!("block {i} not on a peg");
            };
            assert!(peg < 6, "expected left-side peg, got {peg}");
            let d = b.opening_center.dist(state.pegs[peg].center);
            assert!(d <= PLACE_CLEARANCE_MM + 1e-12, "offset {d} too large");
        }
        assert_eq!(state.tip_true, HOME);
        assert_eq!(state.jaw, Jaw::Open);
        assert_eq!(state.clock_s, 0.0);
    }

    #[test]
    fn material_test_matches_worked_points() {
        let block = canonical_block();
        // 1 mm inside the bottom edge, near the lower-right vertex: material.
        let inset = Pose2::new(6.0, -block.footprint_side_mm / (2.0 * 3f64.sqrt()) + 1.0);
        assert!(block_material_contains(&block, inset));
        assert!(material_oracle(&block, inset));
        // Center of the opening: hole, not material.
        assert!(!block_material_contains(&block, Pose2::ZERO));
        // 2 mm outside the bottom edge.
        let outside = Pose2::new(0.0, -block.footprint_side_mm / (2.0 * 3f64.sqrt()) - 2.0);
        assert!(!block_material_contains(&block, outside));
        assert!(!material_oracle(&block, outside));
    }

    #[test]
    fn grasp_target_lies_in_material_band() {
        let block = canonical_block();
        let g = grasp_target(&block);
        let d = g.dist(block.opening_center);
        assert!(d > OPENING_RADIUS_MM && d <= 9.0, "grasp depth {d}");
        assert!(block_material_contains(&block, g));
        assert_relative_eq!(grasp_clearance_mm(&block), 1.9641, epsilon = 1e-4);
    }

    #[test]
    fn grasp_target_rotates_with_the_block() {
        let third = std::f64::consts::TAU / 3.0;
        let base = make_block(0, Pose2::new(30.0, 40.0), 0.3, BlockState::OnPeg(2));
        let mut rotated = base;
        rotated.orientation_rad += third;
        let g0 = grasp_target(&base) - base.opening_center;
        let g1 = grasp_target(&rotated) - base.opening_center;
        let expect = Pose2::new(
            g0.x * third.cos() - g0.y * third.sin(),
            g0.x * third.sin() + g0.y * third.cos(),
        );
        assert_relative_eq!(g1.x, expect.x, epsilon = 1e-12);
        assert_relative_eq!(g1.y, expect.y, epsilon = 1e-12);
    }

    #[test]
    fn place_clearance_boundary_is_inclusive() {
        let peg = Peg {
            id: 7,
            center: Pose2::new(75.0, 25.0),
            radius_mm: PEG_RADIUS_MM,
        };
        assert!(place_within_clearance(peg.center, &peg));
        assert!(place_within_clearance(
            peg.center + Pose2::new(PLACE_CLEARANCE_MM, 0.0),
            &peg
        ));
        assert!(!place_within_clearance(
            peg.center + Pose2::new(3.5, 0.0),
            &peg
        ));
    }

    #[test]
    fn pick_success_requires_grasp_closed_jaw_and_travel() {
        let mut state = init_board(1, Side::Left);
        assert!(!check_pick_success(&state));
        state.blocks[0].state = BlockState::Grasped;
        state.jaw = Jaw::Closed;
        state.tip_z = ZLevel::Travel;
        assert!(check_pick_success(&state));
        state.tip_z = ZLevel::Board;
        assert!(!check_pick_success(&state));
    }

    #[test]
    #[should_panic(expected = "peg id")]
    fn place_check_rejects_invalid_peg() {
        let state = init_board(1, Side::Left);
        check_place_success(&state, 12);
    }

    #[test]
    fn workspace_bounds_cover_board_and_home() {
        let (min, max) = workspace_bounds();
        assert_eq!(min, Pose2::new(-50.0, -50.0));
        assert_eq!(max, Pose2::new(150.0, 100.0));
        assert!(in_workspace(HOME));
        assert!(!in_workspace(Pose2::new(200.0, 0.0)));
    }

    #[test]
    fn pose_serde_round_trips_as_pair() {
        let p = Pose2::new(12.345678, -0.125);
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(json, "[12.345678,-0.125]");
        let back: Pose2 = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }

    proptest! {
        #[test]
        fn material_matches_oracle_everywhere(
            orient in 0.0..std::f64::consts::TAU,
            cx in -3.0..3.0f64,
            cy in -3.0..3.0f64,
            px in -12.0..12.0f64,
            py in -12.0..12.0f64,
        ) {
            let block = make_block(0, Pose2::new(cx, cy), orient, BlockState::OnPeg(0));
            let p = Pose2::new(cx + px, cy + py);
            // Skip points within a hair of a boundary; the two formulations
            // may disagree there by rounding alone.
            let near_edge = {
                let v = block.footprint_vertices();
                (0..3).any(|i| {
                    let a = v[i];
                    let b = v[(i + 1) % 3];
                    let t = (b - a).with_norm(1.0);
                    ((p - a).cross(t)).abs() < 1e-9
                }) || (p.dist(block.opening_center) - block.opening_radius_mm).abs() < 1e-9
            };
            prop_assume!(!near_edge);
            prop_assert_eq!(block_material_contains(&block, p), material_oracle(&block, p));
        }

        #[test]
        fn grasp_target_keeps_clearance_for_any_pose(
            orient in 0.0..std::f64::consts::TAU,
            cx in -3.0..3.0f64,
            cy in -3.0..3.0f64,
        ) {
            let block = make_block(0, Pose2::new(cx, cy), orient, BlockState::OnPeg(0));
            let g = grasp_target(&block);
            prop_assert!(block_material_contains(&block, g));
            // Clearance to the opening.
            let hole_margin = g.dist(block.opening_center) - block.opening_radius_mm;
            prop_assert!(hole_margin >= grasp_clearance_mm(&block) - 1e-9);
            // Clearance to every footprint edge.
            let v = block.footprint_vertices();
            for i in 0..3 {
                let a = v[i];
                let b = v[(i + 1) % 3];
                let t = (b - a).with_norm(1.0);
                let edge_dist = (g - a).cross(t).abs();
                prop_assert!(edge_dist >= grasp_clearance_mm(&block) - 1e-9);
            }
        }
    }
}
