//! Scripted demonstrator standing in for a human teleoperator.
//!
//! Each demonstration is one short corrective motion recorded at a fixed
//! capture rate: the operator watches the scene, creeps the tip toward the
//! goal in small deliberate steps, commits with one decisive motion once
//! aligned, and holds. All motion runs through the instrument model and the
//! operator reacts to the *true* tip it sees on screen, so the recorded
//! encoder positions carry the instrument's transmission error while the
//! images show the physical scene. Pick demos end above the grasp point of
//! the block on the target peg; place demos end with the held block's
//! center over the peg.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::actuator::InstrumentModel;
use crate::datapipe::{crop_window, Hyperparameters, RawFrame, RawTrajectory, Subtask};
use crate::error::{Error, Result};
use crate::image::PxRect;
use crate::render::{render_rgb, Camera};
use crate::rng::{derive_seed, rng_from_seed, sample_disc};
use crate::workspace::{
    grasp_target, make_block, peg_positions, random_block_config, BlockState, Jaw, Peg, Pose2,
    TaskState, ZLevel, HOME, PEG_COUNT, PEG_PITCH_MM, PEG_RADIUS_MM,
};

/// Observed-tip error below which the operator stops correcting: about one
/// camera pixel, the smallest offset visible on screen.
const CONVERGE_MM: f64 = 0.3;

/// Touch-up motions the operator allows after the committed approach before
/// accepting the pose as reached.
const TOUCH_UP_FRAMES: usize = 3;

/// Pegs closer than this to the target carry a block during demos: row and
/// column neighbors at one pitch plus diagonals, but not the far grid.
const NEIGHBOR_RADIUS_MM: f64 = 1.5 * PEG_PITCH_MM;

/// Hard bound on recorded frames per demo. Feedback converges far earlier;
/// this only guards against a misconfigured profile looping forever.
const MAX_DEMO_FRAMES: usize = 80;

/// Unrecorded feedback steps allowed to settle the tip onto the start pose.
const SETUP_STEPS: usize = 8;

/// Kinematic style of the demonstrator.
///
/// The defaults reproduce a careful operator: fine alignment at
/// `approach_speed` while outside `commit_radius`, one decisive motion to
/// the goal inside it, then a short hold. At 5 Hz this lands demos around
/// 10 to 14 frames with roughly 30% of frames inside the success radius.
#[derive(Copy, Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoProfile {
    /// Starts are sampled uniformly in a disc of this radius around the goal.
    pub start_radius_mm: f64,
    /// Creep speed of the fine-alignment phase.
    pub approach_speed_mm_s: f64,
    /// Speed cap for the final committed motion.
    pub commit_speed_mm_s: f64,
    /// Distance to the goal at which the operator stops creeping and commits.
    pub commit_radius_mm: f64,
    /// Per-frame sideways wobble during the creep phase.
    pub lateral_noise_sd_mm: f64,
    /// Frames held at the goal after arrival.
    pub dwell_frames: usize,
    pub capture_rate_hz: f64,
}

impl Default for DemoProfile {
    fn default() -> Self {
        DemoProfile {
            start_radius_mm: 5.0,
            approach_speed_mm_s: 1.6,
            commit_speed_mm_s: 12.5,
            commit_radius_mm: 2.0,
            lateral_noise_sd_mm: 0.3,
            dwell_frames: 2,
            capture_rate_hz: 5.0,
        }
    }
}

impl DemoProfile {
    /// `params` supplies the success radius; starts must be able to fall
    /// outside it or the termination label would always be positive.
    pub fn validate(&self, params: &Hyperparameters) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.start_radius_mm > params.success_radius_mm) {
            return bad("start_radius_mm must exceed the success radius");
        }
        if !(self.approach_speed_mm_s > 0.0) || !(self.commit_speed_mm_s > 0.0) {
            return bad("demo speeds must be positive");
        }
        if !(self.commit_radius_mm > 0.0) {
            return bad("commit_radius_mm must be positive");
        }
        if !(self.lateral_noise_sd_mm >= 0.0) {
            return bad("lateral_noise_sd_mm must be nonnegative");
        }
        if self.dwell_frames < 1 {
            return bad("dwell_frames must be at least 1");
        }
        if !(self.capture_rate_hz > 0.0) {
            return bad("capture_rate_hz must be positive");
        }
        Ok(())
    }
}

/// Uniform start pose in the disc of `start_radius_mm` around the goal.
pub fn sample_start(goal: Pose2, profile: &DemoProfile, seed: u64) -> Pose2 {
    draw_start(goal, profile, &mut rng_from_seed(seed))
}

fn draw_start(goal: Pose2, profile: &DemoProfile, rng: &mut ChaCha8Rng) -> Pose2 {
    let (dx, dy) = sample_disc(rng, profile.start_radius_mm);
    goal + Pose2::new(dx, dy)
}

/// Peg ids whose blocks are visible from the target peg's crop window.
pub fn neighbor_pegs(peg_id: usize) -> Vec<usize> {
    let pegs = peg_positions();
    (0..PEG_COUNT)
        .filter(|&other| other != peg_id && pegs[other].dist(pegs[peg_id]) <= NEIGHBOR_RADIUS_MM)
        .collect()
}

/// Fresh board for one demonstration: blocks on every neighbor peg, plus
/// the demo's own block, either resting on the target peg (pick) or held in
/// the closed jaw (place). The target peg stays empty for places.
pub fn stage_demo_state(subtask: Subtask, peg_id: usize, seed: u64) -> TaskState {
    assert!(peg_id < PEG_COUNT, "peg id {peg_id} out of range");
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

    let mut blocks = Vec::new();
    match subtask {
        Subtask::Pick => {
            let (center, orientation) = random_block_config(&mut rng, pegs[peg_id].center);
            blocks.push(make_block(0, center, orientation, BlockState::OnPeg(peg_id)));
        }
        Subtask::Place => {
            // Held block; its center snaps to the tip on the first motion.
            use rand::Rng;
            let orientation = rng.gen::<f64>() * std::f64::consts::TAU;
            blocks.push(make_block(0, HOME, orientation, BlockState::Grasped));
        }
    }
    for neighbor in neighbor_pegs(peg_id) {
        let (center, orientation) = random_block_config(&mut rng, pegs[neighbor].center);
        blocks.push(make_block(blocks.len(), center, orientation, BlockState::OnPeg(neighbor)));
    }

    TaskState {
        pegs,
        blocks,
        tip_true: HOME,
        tip_z: ZLevel::Plane,
        jaw: match subtask {
            Subtask::Pick => Jaw::Open,
            Subtask::Place => Jaw::Closed,
        },
        clock_s: 0.0,
        tip_in_motion: false,
    }
}

/// The goal pose the operator steers the true tip toward.
pub fn demo_goal(state: &TaskState, subtask: Subtask, peg_id: usize) -> Pose2 {
    match subtask {
        Subtask::Pick => grasp_target(
            state
                .block_on_peg(peg_id)
                .expect("pick demo needs a block on the target peg"),
        ),
        Subtask::Place => state.pegs[peg_id].center,
    }
}

/// Drives one instrument through demonstrations, carrying the commanded
/// pose and the cable transmission state across demos the way a single
/// recording session would.
pub struct Demonstrator<'a> {
    pub instrument: &'a mut InstrumentModel,
    pub cam: Camera,
    pub profile: DemoProfile,
    cmd: Pose2,
}

impl<'a> Demonstrator<'a> {
    pub fn new(instrument: &'a mut InstrumentModel, cam: Camera, profile: DemoProfile) -> Self {
        Demonstrator {
            instrument,
            cam,
            profile,
            cmd: HOME,
        }
    }

    /// Current commanded pose, equal to the encoder reading at rest.
    pub fn command(&self) -> Pose2 {
        self.cmd
    }

    fn drive(&mut self, state: &mut TaskState, command: Pose2, rng: &mut ChaCha8Rng) {
        self.cmd = command;
        state.tip_true = self.instrument.command_move(command, rng);
        state.sync_grasped_block();
    }

    /// Appends one frame: the peg window as the camera sees it now, plus the
    /// encoder reading of the commanded pose.
    fn capture(
        &self,
        state: &mut TaskState,
        dt: f64,
        window: PxRect,
        frames: &mut Vec<RawFrame>,
    ) {
        if !frames.is_empty() {
            state.advance_clock(dt);
        }
        frames.push(RawFrame {
            t_s: frames.len() as f64 * dt,
            image: render_rgb(state, &self.cam, Some(window)),
            p: self.instrument.encoder_estimate(self.cmd),
        });
    }

    /// One feedback nudge of the observed tip toward `target`, with the step
    /// length capped. Returns the remaining observed error after the move.
    fn nudge(
        &mut self,
        state: &mut TaskState,
        target: Pose2,
        step_cap: f64,
        lateral_sd: f64,
        rng: &mut ChaCha8Rng,
    ) -> f64 {
        let err = target - state.tip_true;
        let mut step = err.with_norm(err.norm().min(step_cap));
        if lateral_sd > 0.0 && err.norm() > 0.0 {
            let u = err.with_norm(1.0);
            let perp = Pose2::new(-u.y, u.x);
            let wobble = Normal::new(0.0, lateral_sd).unwrap().sample(rng);
            step = step + perp.scaled(wobble);
        }
        self.drive(state, self.cmd + step, rng);
        (target - state.tip_true).norm()
    }

    /// Records one demonstration on a staged board. The tip is first settled
    /// onto a sampled start pose (not recorded), then every subsequent frame
    /// captures the target peg's crop window and the encoder-side position.
    pub fn generate_demo(
        &mut self,
        state: &mut TaskState,
        subtask: Subtask,
        peg_id: usize,
        id: String,
        seed: u64,
    ) -> Result<RawTrajectory> {
        let profile = self.profile;
        let dt = 1.0 / profile.capture_rate_hz;
        let creep_cap = profile.approach_speed_mm_s * dt;
        let commit_cap = profile.commit_speed_mm_s * dt;
        let window = crop_window(&self.cam, state.pegs[peg_id].center)?;

        let mut rng = rng_from_seed(seed);
        let goal = demo_goal(state, subtask, peg_id);
        let start = draw_start(goal, &profile, &mut rng);

        // Settle the true tip onto the start pose before recording begins.
        self.drive(state, start, &mut rng);
        for _ in 0..SETUP_STEPS {
            if state.tip_true.dist(start) <= CONVERGE_MM {
                break;
            }
            let c = self.cmd + (start - state.tip_true);
            self.drive(state, c, &mut rng);
        }

        let mut frames = Vec::new();
        self.capture(state, dt, window, &mut frames);

        // Fine alignment: creep toward the goal with a little sideways
        // wobble until inside the commit radius. The hand steadies for the
        // last couple of steps so the cables stay tensioned along the final
        // approach direction.
        let steady_mm = profile.commit_radius_mm + 2.0 * creep_cap;
        while state.tip_true.dist(goal) > profile.commit_radius_mm
            && frames.len() < MAX_DEMO_FRAMES
        {
            let wobble = if state.tip_true.dist(goal) > steady_mm {
                profile.lateral_noise_sd_mm
            } else {
                0.0
            };
            self.nudge(state, goal, creep_cap, wobble, &mut rng);
            self.capture(state, dt, window, &mut frames);
        }

        // Commit: one decisive motion onto the goal, then at most a few
        // touch-ups. Sub-pixel residuals are invisible on screen, so the
        // operator accepts them rather than chasing noise into the slack.
        let mut touch_ups = 0;
        while state.tip_true.dist(goal) > CONVERGE_MM
            && touch_ups <= TOUCH_UP_FRAMES
            && frames.len() < MAX_DEMO_FRAMES
        {
            self.nudge(state, goal, commit_cap, 0.0, &mut rng);
            self.capture(state, dt, window, &mut frames);
            touch_ups += 1;
        }

        // Hold at the goal. The command stays fixed; only sensor noise on
        // the true tip varies between these frames.
        for _ in 0..profile.dwell_frames {
            let hold = self.cmd;
            self.drive(state, hold, &mut rng);
            self.capture(state, dt, window, &mut frames);
        }

        Ok(RawTrajectory {
            id,
            subtask,
            peg_id,
            instrument: self.instrument.name.clone(),
            capture_rate_hz: profile.capture_rate_hz,
            frames,
        })
    }
}

/// Records the full demonstration corpus: `demos_per_peg` pick and place
/// demos on every peg, with neighbor blocks re-randomized before each demo.
/// Returns the pick and place datasets in recording order.
pub fn collect_dataset(
    instrument: &mut InstrumentModel,
    cam: &Camera,
    profile: &DemoProfile,
    demos_per_peg: usize,
    seed: u64,
) -> Result<(Vec<RawTrajectory>, Vec<RawTrajectory>)> {
    profile.validate(&Hyperparameters::default())?;
    let mut demonstrator = Demonstrator::new(instrument, *cam, *profile);
    let mut stream = 0u64;
    let mut datasets: [Vec<RawTrajectory>; 2] = [Vec::new(), Vec::new()];
    for (slot, subtask) in [Subtask::Pick, Subtask::Place].into_iter().enumerate() {
        for peg_id in 0..PEG_COUNT {
            for demo in 0..demos_per_peg {
                let s = derive_seed(seed, stream);
                stream += 1;
                let mut state = stage_demo_state(subtask, peg_id, derive_seed(s, 0));
                let id = format!("{subtask}-p{peg_id:02}-d{demo:02}");
                let traj = demonstrator.generate_demo(
                    &mut state,
                    subtask,
                    peg_id,
                    id,
                    derive_seed(s, 1),
                )?;
                datasets[slot].push(traj);
            }
        }
    }
    let [picks, places] = datasets;
    Ok((picks, places))
}
