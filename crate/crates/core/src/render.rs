//! Top-down software rasterizer, and the coarse pose oracle standing in
//! for RGBD perception.
//!
//! Every pixel is shaded independently as a pure function of the scene, so
//! rendering a sub-rectangle is bit-identical to cropping a full-frame
//! render. No anti-aliasing: frames contain exactly the palette colors,
//! which keeps outputs reproducible across machines.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::image::{Image, PxRect};
use crate::rng::rng_from_seed;
use crate::workspace::{block_material_contains, Block, BlockState, Jaw, Pose2, TaskState};

/// Seconds consumed by one coarse pose estimate; RGBD runs at 1.6 Hz.
pub const PERCEIVE_S: f64 = 1.0 / 1.6;

/// Standard deviation of perceived block centers, millimeters.
pub const BLOCK_POSE_SD_MM: f64 = 1.0;

/// Standard deviation of perceived peg centers, millimeters.
pub const PEG_POSE_SD_MM: f64 = 0.3;

/// The five colors a frame can contain. Reds are deliberately close
/// together: a policy reading these images has to use shape, not hue.
pub mod palette {
    pub const BOARD: [u8; 3] = [200, 30, 30];
    pub const BLOCK: [u8; 3] = [235, 45, 45];
    pub const PEG: [u8; 3] = [180, 25, 25];
    pub const PEG_RIM: [u8; 3] = [150, 20, 20];
    pub const INSTRUMENT: [u8; 3] = [120, 120, 120];
    /// Never rendered; fills color-cropped areas during preprocessing.
    pub const BACKGROUND: [u8; 3] = [60, 60, 60];
}

const TIP_RADIUS_PX: f64 = 8.0;
const TICK_HALF_WIDTH_PX: f64 = 2.0;
const TICK_NEAR_PX: f64 = 8.0;
const TICK_FAR_PX: f64 = 14.0;

/// Orthographic top-down camera. Pixel (ix, iy) covers the square of side
/// `mm_per_px` whose top-left corner sits at `origin + (ix, iy)*mm_per_px`.
#[derive(Copy, Clone, Debug, Serialize, Deserialize)]
pub struct Camera {
    pub mm_per_px: f64,
    pub frame_w: usize,
    pub frame_h: usize,
    /// Base-frame position of the frame's top-left corner.
    pub origin: Pose2,
}

impl Default for Camera {
    fn default() -> Self {
        // 475 x 300 mm field centered on the board center (50, 25).
        Camera {
            mm_per_px: 0.25,
            frame_w: 1900,
            frame_h: 1200,
            origin: Pose2::new(-187.5, -125.0),
        }
    }
}

impl Camera {
    /// Continuous pixel coordinates of a base-frame point.
    pub fn mm_to_px(&self, p: Pose2) -> (f64, f64) {
        (
            (p.x - self.origin.x) / self.mm_per_px,
            (p.y - self.origin.y) / self.mm_per_px,
        )
    }

    /// Base-frame position of a pixel's center.
    pub fn px_center_to_mm(&self, ix: usize, iy: usize) -> Pose2 {
        Pose2::new(
            self.origin.x + (ix as f64 + 0.5) * self.mm_per_px,
            self.origin.y + (iy as f64 + 0.5) * self.mm_per_px,
        )
    }

    /// True when the peg board plus block overhang fits inside the frame.
    pub fn covers_board(&self) -> bool {
        let margin = 15.0;
        let far = Pose2::new(
            self.origin.x + self.frame_w as f64 * self.mm_per_px,
            self.origin.y + self.frame_h as f64 * self.mm_per_px,
        );
        crate::workspace::peg_positions().iter().all(|p| {
            p.x - margin >= self.origin.x
                && p.y - margin >= self.origin.y
                && p.x + margin <= far.x
                && p.y + margin <= far.y
        })
    }
}

#[inline]
fn shade(state: &TaskState, cam: &Camera, ix: usize, iy: usize) -> [u8; 3] {
    let cx = ix as f64 + 0.5;
    let cy = iy as f64 + 0.5;

    // Instrument tip, on top of everything.
    let (tx, ty) = cam.mm_to_px(state.tip_true);
    let (dx, dy) = (cx - tx, cy - ty);
    if dx * dx + dy * dy <= TIP_RADIUS_PX * TIP_RADIUS_PX {
        return palette::INSTRUMENT;
    }
    if dx.abs() <= TICK_HALF_WIDTH_PX {
        let along = match state.jaw {
            Jaw::Open => dy,
            Jaw::Closed => -dy,
        };
        if (TICK_NEAR_PX..=TICK_FAR_PX).contains(&along) {
            return palette::INSTRUMENT;
        }
    }

    let pmm = cam.px_center_to_mm(ix, iy);

    // A held block hangs above peg tops and hides them.
    if let Some(b) = state.grasped_block() {
        if near_block(b, pmm) && block_material_contains(b, pmm) {
            return palette::BLOCK;
        }
    }

    // Pegs poke through the openings of resting blocks.
    for peg in &state.pegs {
        let (px, py) = cam.mm_to_px(peg.center);
        let r = peg.radius_mm / cam.mm_per_px;
        let d2 = (cx - px).powi(2) + (cy - py).powi(2);
        if d2 <= r * r {
            return if d2 <= (r - 1.0) * (r - 1.0) {
                palette::PEG
            } else {
                palette::PEG_RIM
            };
        }
    }

    for b in &state.blocks {
        if b.state == BlockState::Grasped {
            continue;
        }
        if near_block(b, pmm) && block_material_contains(b, pmm) {
            return palette::BLOCK;
        }
    }

    palette::BOARD
}

/// Cheap bounding-box reject before the full triangle test.
#[inline]
fn near_block(b: &Block, p: Pose2) -> bool {
    (p.x - b.opening_center.x).abs() <= 11.0 && (p.y - b.opening_center.y).abs() <= 11.0
}

/// Renders the scene, or just `region` of it. The region must lie inside
/// the frame; callers compute windows from on-board peg positions, so a
/// violation is a bug.
pub fn render_rgb(state: &TaskState, cam: &Camera, region: Option<PxRect>) -> Image {
    debug_assert!(cam.covers_board(), "board must fit inside the frame");
    let rect = region.unwrap_or(PxRect {
        x0: 0,
        y0: 0,
        w: cam.frame_w,
        h: cam.frame_h,
    });
    assert!(
        rect.fits_in(cam.frame_w, cam.frame_h),
        "render region {rect} outside {}x{} frame",
        cam.frame_w,
        cam.frame_h
    );
    let mut pixels = Vec::with_capacity(rect.w * rect.h * 3);
    for iy in rect.y0..rect.y0 + rect.h {
        for ix in rect.x0..rect.x0 + rect.w {
            pixels.extend_from_slice(&shade(state, cam, ix, iy));
        }
    }
    Image::new(rect.w, rect.h, pixels)
}

/// Coarse scene estimate from the overhead sensor.
#[derive(Clone, Debug)]
pub struct Perception {
    /// Blocks with noised centers; orientation and state pass through.
    pub blocks: Vec<Block>,
    /// Noised peg centers, indexed by peg id.
    pub pegs: Vec<Pose2>,
}

/// Noise levels of the coarse pose estimator. The defaults model RGBD pose
/// estimation; zeroing both gives an exact oracle, which the benchmark
/// harness uses to validate its own geometry.
#[derive(Copy, Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptionModel {
    pub block_sd_mm: f64,
    pub peg_sd_mm: f64,
}

impl Default for PerceptionModel {
    fn default() -> Self {
        PerceptionModel {
            block_sd_mm: BLOCK_POSE_SD_MM,
            peg_sd_mm: PEG_POSE_SD_MM,
        }
    }
}

impl PerceptionModel {
    pub fn exact() -> Self {
        PerceptionModel {
            block_sd_mm: 0.0,
            peg_sd_mm: 0.0,
        }
    }
}

/// Estimates block and peg poses from a static scene. Ground truth plus
/// per-object gaussian noise; costs one RGBD cycle of sim time.
///
/// Panics if called while the tip is moving; depth capture needs a still
/// scene.
pub fn perceive_poses(state: &mut TaskState, seed: u64) -> Perception {
    perceive_poses_with(state, seed, &PerceptionModel::default())
}

/// [`perceive_poses`] with explicit noise levels.
pub fn perceive_poses_with(
    state: &mut TaskState,
    seed: u64,
    model: &PerceptionModel,
) -> Perception {
    assert!(
        !state.tip_in_motion,
        "pose estimation requires a static scene"
    );
    let mut rng = rng_from_seed(seed);
    let block_noise = Normal::new(0.0, model.block_sd_mm).expect("nonnegative sd");
    let peg_noise = Normal::new(0.0, model.peg_sd_mm).expect("nonnegative sd");
    let blocks = state
        .blocks
        .iter()
        .map(|b| {
            let mut b = *b;
            b.opening_center = b.opening_center
                + Pose2::new(block_noise.sample(&mut rng), block_noise.sample(&mut rng));
            b
        })
        .collect();
    let pegs = state
        .pegs
        .iter()
        .map(|p| p.center + Pose2::new(peg_noise.sample(&mut rng), peg_noise.sample(&mut rng)))
        .collect();
    state.advance_clock(PERCEIVE_S);
    Perception { blocks, pegs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workspace::{init_board, make_block, Side, ZLevel};
    use approx::assert_relative_eq;

    fn probe(state: &TaskState, cam: &Camera, ix: usize, iy: usize) -> [u8; 3] {
        render_rgb(
            state,
            cam,
            Some(PxRect {
                x0: ix,
                y0: iy,
                w: 1,
                h: 1,
            }),
        )
        .get(0, 0)
    }

    #[test]
    fn peg_centers_land_on_exact_pixel_corners() {
        let cam = Camera::default();
        for peg in crate::workspace::peg_positions() {
            let (px, py) = cam.mm_to_px(peg);
            assert_eq!(px, px.round());
            assert_eq!(py, py.round());
        }
        assert!(cam.covers_board());
    }

    #[test]
    fn pixel_mapping_round_trips() {
        let cam = Camera::default();
        for (ix, iy) in [(0, 0), (949, 599), (1899, 1199), (123, 1024)] {
            let mm = cam.px_center_to_mm(ix, iy);
            let (px, py) = cam.mm_to_px(mm);
            assert_relative_eq!(px, ix as f64 + 0.5, epsilon = 1e-9);
            assert_relative_eq!(py, iy as f64 + 0.5, epsilon = 1e-9);
        }
    }

    #[test]
    fn blockless_board_renders_only_board_peg_and_instrument_colors() {
        let mut state = init_board(1, Side::Left);
        state.blocks.clear();
        let img = render_rgb(&state, &Camera::default(), None);
        let mut seen = std::collections::BTreeSet::new();
        for i in (0..img.pixels().len()).step_by(3) {
            let px: [u8; 3] = img.pixels()[i..i + 3].try_into().unwrap();
            seen.insert(px);
        }
        for c in &seen {
            assert!(
                [
                    palette::BOARD,
                    palette::PEG,
                    palette::PEG_RIM,
                    palette::INSTRUMENT
                ]
                .contains(c),
                "unexpected color {c:?}"
            );
        }
        assert!(seen.contains(&palette::BOARD));
        assert!(seen.contains(&palette::PEG));
        assert!(!seen.contains(&palette::BLOCK));
    }

    #[test]
    fn rendering_is_deterministic() {
        let state = init_board(3, Side::Left);
        let cam = Camera::default();
        let rect = PxRect {
            x0: 600,
            y0: 350,
            w: 300,
            h: 300,
        };
        let a = render_rgb(&state, &cam, Some(rect));
        let b = render_rgb(&state, &cam, Some(rect));
        assert_eq!(a, b);
    }

    #[test]
    fn region_render_equals_crop_of_full_render() {
        let mut state = init_board(5, Side::Left);
        state.tip_true = Pose2::new(26.0, 24.0);
        let cam = Camera::default();
        let full = render_rgb(&state, &cam, None);
        for rect in [
            PxRect {
                x0: 675,
                y0: 425,
                w: 150,
                h: 150,
            },
            PxRect {
                x0: 801,
                y0: 333,
                w: 97,
                h: 41,
            },
        ] {
            let direct = render_rgb(&state, &cam, Some(rect));
            assert_eq!(direct, full.crop(rect).unwrap());
        }
    }

    #[test]
    #[should_panic(expected = "render region")]
    fn out_of_frame_region_panics() {
        let state = init_board(1, Side::Left);
        render_rgb(
            &state,
            &Camera::default(),
            Some(PxRect {
                x0: 1800,
                y0: 0,
                w: 200,
                h: 100,
            }),
        );
    }

    #[test]
    fn held_block_hides_pegs_except_through_its_opening() {
        let mut state = init_board(2, Side::Left);
        state.blocks[0].state = BlockState::Grasped;
        state.jaw = Jaw::Closed;
        state.tip_z = ZLevel::Plane;
        state.tip_true = Pose2::new(79.0, 3.0);
        state.sync_grasped_block();
        state.blocks[0].orientation_rad = 0.4;
        let cam = Camera::default();
        // Peg 6 center lies on block material (4.83 mm from the block
        // center, outside the opening, inside the incircle).
        assert_eq!(probe(&state, &cam, 1050, 500), palette::BLOCK);
        // A point inside the opening and within the peg's fill radius.
        assert_eq!(probe(&state, &cam, 1052, 501), palette::PEG);
    }

    #[test]
    fn jaw_state_flips_the_tick_side() {
        let mut state = init_board(4, Side::Left);
        state.blocks.clear();
        state.tip_true = Pose2::new(50.0, 25.0);
        let cam = Camera::default();
        state.jaw = Jaw::Open;
        assert_eq!(probe(&state, &cam, 950, 610), palette::INSTRUMENT);
        assert_eq!(probe(&state, &cam, 950, 589), palette::BOARD);
        state.jaw = Jaw::Closed;
        assert_eq!(probe(&state, &cam, 950, 610), palette::BOARD);
        assert_eq!(probe(&state, &cam, 950, 589), palette::INSTRUMENT);
    }

    #[test]
    fn resting_blocks_let_pegs_poke_through() {
        let mut state = init_board(1, Side::Left);
        // Pin block 0 concentric on peg 0 so probe positions are known.
        state.blocks[0] = make_block(0, Pose2::new(0.0, 0.0), 0.2, BlockState::OnPeg(0));
        let cam = Camera::default();
        // Peg 0 center pixel: peg fill, seen through the opening.
        assert_eq!(probe(&state, &cam, 750, 500), palette::PEG);
        // 7 mm out along +x from the peg: block material (inside incircle,
        // outside opening) regardless of orientation 0.2.
        assert_eq!(probe(&state, &cam, 750 + 20, 500), palette::BLOCK);
    }

    #[test]
    fn perception_is_seeded_and_advances_the_clock() {
        let mut state = init_board(6, Side::Left);
        let before = state.clock_s;
        let a = perceive_poses(&mut state, 99);
        let b = perceive_poses(&mut state, 99);
        assert_eq!(a.blocks[2].opening_center, b.blocks[2].opening_center);
        assert_eq!(a.pegs[7], b.pegs[7]);
        assert_relative_eq!(state.clock_s - before, 2.0 * PERCEIVE_S);
        assert_relative_eq!(PERCEIVE_S, 0.625);
    }

    #[test]
    fn perception_noise_has_the_advertised_spread() {
        let mut state = init_board(7, Side::Left);
        let truth_block = state.blocks[0].opening_center;
        let truth_peg = state.pegs[3].center;
        let (mut be, mut pe) = (Vec::new(), Vec::new());
        for seed in 0..1000 {
            let perc = perceive_poses(&mut state, seed);
            be.push(perc.blocks[0].opening_center.x - truth_block.x);
            pe.push(perc.pegs[3].x - truth_peg.x);
        }
        let sd = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
        };
        let bsd = sd(&be);
        let psd = sd(&pe);
        assert!((bsd - BLOCK_POSE_SD_MM).abs() < 0.1, "block sd {bsd}");
        assert!((psd - PEG_POSE_SD_MM).abs() < 0.03, "peg sd {psd}");
    }

    #[test]
    #[should_panic(expected = "static scene")]
    fn perception_rejects_a_moving_tip() {
        let mut state = init_board(8, Side::Left);
        state.tip_in_motion = true;
        perceive_poses(&mut state, 0);
    }
}
