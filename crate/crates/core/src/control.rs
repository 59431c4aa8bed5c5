//! Three-phase subtask executors: an open-loop approach from coarse
//! perception, an optional learned correction loop at the fixed plane above
//! the pegs, and a scripted completion motion.
//!
//! The benchmarked methods differ only in how commands are produced. UNCAL
//! trusts raw encoder estimates, CAL routes desired poses through a fitted
//! transmission observer, and IVS tracks like UNCAL but runs the ensemble
//! correction loop before completing. All motion flows through one choke
//! point that logs every command, because the observer's play replay needs
//! the complete history since the instrument was last slack.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actuator::{InstrumentModel, Observer};
use crate::datapipe::{crop_window, preprocess, Subtask};
use crate::error::{Error, Result};
use crate::nn::Workspace;
use crate::policy::{image_to_input, EnsemblePolicy};
use crate::render::{perceive_poses_with, render_rgb, Camera, Perception, PerceptionModel};
use crate::workspace::{
    block_material_contains, check_pick_success, check_place_success, grasp_target, in_workspace,
    place_within_clearance, workspace_bounds, BlockState, Jaw, Pose2, TaskState, ZLevel, HOME,
};

/// Spacing of open-loop approach waypoints.
const WAYPOINT_MM: f64 = 2.0;

/// Measured correction-loop rates for the supported ensemble sizes, members
/// running sequentially on one core.
const RATE_TABLE: [(usize, f64); 4] = [(1, 15.6), (2, 12.8), (4, 10.0), (8, 7.1)];

/// Least-squares affine fit of the update period over the table above:
/// render-and-act overhead plus per-member inference time.
const PERIOD_OVERHEAD_S: f64 = 0.0553;
const PERIOD_PER_MEMBER_S: f64 = 0.0108;

/// Correction updates per second for a given ensemble size: table values
/// where measured, the fitted period model elsewhere.
pub fn update_rate_hz(ensemble_size: usize) -> f64 {
    assert!(ensemble_size >= 1, "rate of an empty ensemble");
    for (k, hz) in RATE_TABLE {
        if k == ensemble_size {
            return hz;
        }
    }
    1.0 / (PERIOD_OVERHEAD_S + PERIOD_PER_MEMBER_S * ensemble_size as f64)
}

/// Correction-loop execution parameters.
#[derive(Copy, Clone, Debug, Serialize, Deserialize)]
pub struct ServoConfig {
    pub rate_hz: f64,
    /// Updates after which an unterminated correction gives up.
    pub max_steps: usize,
}

impl ServoConfig {
    pub fn for_ensemble_size(k: usize) -> Self {
        ServoConfig {
            rate_hz: update_rate_hz(k),
            max_steps: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate_hz > 0.0) {
            return Err(Error::Config("servo rate must be positive".to_string()));
        }
        if self.max_steps < 1 {
            return Err(Error::Config("servo max_steps must be at least 1".to_string()));
        }
        Ok(())
    }
}

impl Default for ServoConfig {
    fn default() -> Self {
        ServoConfig::for_ensemble_size(4)
    }
}

/// What one correction phase did. Baselines without a correction phase
/// report the zero value.
#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrectionResult {
    pub steps: usize,
    /// Sum of executed step lengths.
    pub distance_mm: f64,
    /// Always exactly `steps / rate`.
    pub elapsed_s: f64,
    /// False when the loop hit `max_steps` without a termination vote.
    pub terminated: bool,
}

/// Durations charged to the simulated clock by scripted motion. These are
/// fixed per primitive rather than path-dependent, so methods that steer
/// differently still pay identical non-correction costs and timing
/// comparisons isolate the correction phase exactly. Defaults calibrate a
/// clean zero-correction transfer to 8.7 s:
/// 2 perceptions (0.625 each) + 2 approaches + 6 z-steps + 2 jaw moves.
#[derive(Copy, Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionTiming {
    /// One open-loop approach at travel level, regardless of path length.
    pub approach_s: f64,
    /// One z-level change.
    pub z_step_s: f64,
    /// One jaw open or close.
    pub jaw_s: f64,
}

impl Default for MotionTiming {
    fn default() -> Self {
        MotionTiming {
            approach_s: 1.925,
            z_step_s: 0.5,
            jaw_s: 0.3,
        }
    }
}

/// How desired poses become instrument commands.
#[derive(Copy, Clone)]
pub enum Method<'a> {
    /// Trust encoder estimates: command the desired pose directly.
    Uncal,
    /// Route desired poses through a fitted observer.
    Cal(&'a Observer),
    /// Encoder tracking plus the learned correction loop.
    Ivs(&'a EnsemblePolicy),
}

impl Method<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Uncal => "UNCAL",
            Method::Cal(_) => "CAL",
            Method::Ivs(_) => "IVS",
        }
    }
}

/// Every command issued on the instrument since it was last reset, in
/// order. The observer replays this to track the play state.
#[derive(Clone, Debug, Default)]
pub struct CommandLog {
    history: Vec<Pose2>,
}

impl CommandLog {
    pub fn new() -> Self {
        CommandLog::default()
    }

    pub fn history(&self) -> &[Pose2] {
        &self.history
    }

    /// Last commanded pose, or the parking pose before any command.
    pub fn last_or_home(&self) -> Pose2 {
        self.history.last().copied().unwrap_or(HOME)
    }
}

/// Outcome of one subtask execution.
#[derive(Copy, Clone, Debug)]
pub struct SubtaskResult {
    pub success: bool,
    pub correction: CorrectionResult,
    /// Sim-clock duration of the whole subtask.
    pub elapsed_s: f64,
}

fn clamp_to_workspace(p: Pose2) -> Pose2 {
    let (min, max) = workspace_bounds();
    Pose2::new(p.x.clamp(min.x, max.x), p.y.clamp(min.y, max.y))
}

/// The single choke point for instrument motion: logs the command, executes
/// it, and keeps a held block tracking the tip.
fn issue(
    state: &mut TaskState,
    instrument: &mut InstrumentModel,
    log: &mut CommandLog,
    command: Pose2,
    rng: &mut ChaCha8Rng,
) {
    log.history.push(command);
    state.tip_true = instrument.command_move(command, rng);
    state.sync_grasped_block();
}

fn set_z(state: &mut TaskState, z: ZLevel, timing: &MotionTiming) {
    let rank = |z: ZLevel| match z {
        ZLevel::Board => 0i32,
        ZLevel::Plane => 1,
        ZLevel::Travel => 2,
    };
    let levels = (rank(state.tip_z) - rank(z)).abs();
    state.tip_z = z;
    state.advance_clock(levels as f64 * timing.z_step_s);
}

/// Straight-line waypoints from `from` to the subtask's perceived goal:
/// above the grasp point of the block seen on the target peg for picks,
/// above the perceived peg center for places. Consecutive points are at
/// most 2 mm apart and the last one is exactly the goal.
pub fn plan_approach(
    subtask: Subtask,
    perception: &Perception,
    peg_id: usize,
    from: Pose2,
) -> Result<Vec<Pose2>> {
    let target = match subtask {
        Subtask::Pick => {
            let block = perception
                .blocks
                .iter()
                .find(|b| b.state == BlockState::OnPeg(peg_id))
                .expect("pick approach needs a block perceived on the target peg");
            grasp_target(block)
        }
        Subtask::Place => perception.pegs[peg_id],
    };
    if !in_workspace(target) {
        return Err(Error::TargetOutsideWorkspace {
            x: target.x,
            y: target.y,
        });
    }
    let dist = from.dist(target);
    if dist == 0.0 {
        return Ok(vec![target]);
    }
    let n = (dist / WAYPOINT_MM).ceil() as usize;
    Ok((1..=n)
        .map(|i| {
            if i == n {
                // Exactly the goal; lerp at f=1 can be off by one ulp.
                return target;
            }
            let f = i as f64 / n as f64;
            Pose2::new(
                from.x + (target.x - from.x) * f,
                from.y + (target.y - from.y) * f,
            )
        })
        .collect())
}

/// Tracks the waypoints open loop and charges one fixed approach duration.
/// The commanded pose per waypoint comes from the method.
fn track_approach(
    state: &mut TaskState,
    instrument: &mut InstrumentModel,
    log: &mut CommandLog,
    waypoints: &[Pose2],
    method: Method<'_>,
    timing: &MotionTiming,
    rng: &mut ChaCha8Rng,
) {
    state.tip_in_motion = true;
    for &w in waypoints {
        let c = match method {
            Method::Cal(observer) => {
                clamp_to_workspace(observer.compensating_command(log.history(), w))
            }
            _ => w,
        };
        issue(state, instrument, log, c, rng);
    }
    state.advance_clock(timing.approach_s);
    state.tip_in_motion = false;
}

/// The learned correction loop: render the target peg's crop window,
/// preprocess, query the ensemble, and either stop on a termination vote or
/// execute the predicted action renormalized to the supervision step
/// length. Checks before acting, so an immediate vote costs zero updates.
pub fn servo_correct(
    state: &mut TaskState,
    instrument: &mut InstrumentModel,
    log: &mut CommandLog,
    cam: &Camera,
    ensemble: &EnsemblePolicy,
    subtask: Subtask,
    peg_id: usize,
    cfg: &ServoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<CorrectionResult> {
    assert_eq!(
        state.tip_z,
        ZLevel::Plane,
        "correction runs at the fixed plane"
    );
    cfg.validate()?;
    let peg = state.pegs[peg_id].center;
    let window = crop_window(cam, peg)?;
    let mut ws = Workspace::new(ensemble.spec());
    let mut input = Vec::new();
    let step_mm = ensemble.hyper.action_step_mm;

    let mut result = CorrectionResult::default();
    loop {
        let raw = render_rgb(state, cam, Some(window));
        let img = preprocess(&raw, peg, cam)?;
        image_to_input(&img, &mut input);
        let (action, stop) = ensemble.query(&input, subtask, &mut ws);
        if stop {
            result.terminated = true;
            break;
        }
        if result.steps == cfg.max_steps {
            break;
        }
        // Renormalize to exactly the supervision step length; a zero
        // prediction commands no motion but still costs an update. The
        // workspace clamp only binds if a divergent policy walks off the
        // board, in which case the executed step is the clamped one.
        let desired = log.last_or_home() + action.with_norm(step_mm);
        let command = clamp_to_workspace(desired);
        let before = log.last_or_home();
        issue(state, instrument, log, command, rng);
        state.advance_clock(1.0 / cfg.rate_hz);
        result.steps += 1;
        result.distance_mm += command.dist(before);
    }
    result.elapsed_s = result.steps as f64 / cfg.rate_hz;
    Ok(result)
}

/// Scripted grasp: descend, close the jaw, ascend. Grasping succeeds when
/// the true tip is on block material; the block then rides the tip. On a
/// miss the jaw reopens so the state is ready for a retry, and the block
/// stays where it was.
pub fn complete_pick(state: &mut TaskState, timing: &MotionTiming) -> bool {
    assert_eq!(state.jaw, Jaw::Open, "pick completion starts jaw open");
    assert_eq!(
        state.tip_z,
        ZLevel::Plane,
        "pick completion starts at the correction plane"
    );
    set_z(state, ZLevel::Board, timing);
    state.jaw = Jaw::Closed;
    state.advance_clock(timing.jaw_s);

    let tip = state.tip_true;
    let grabbed = state
        .blocks
        .iter()
        .position(|b| matches!(b.state, BlockState::OnPeg(_)) && block_material_contains(b, tip));
    if let Some(i) = grabbed {
        state.blocks[i].state = BlockState::Grasped;
        state.sync_grasped_block();
    } else {
        state.jaw = Jaw::Open;
        state.advance_clock(timing.jaw_s);
    }
    set_z(state, ZLevel::Travel, timing);
    check_pick_success(state)
}

/// Scripted release over the target peg: open the jaw and let the block
/// drop. Within placement clearance it seats on the peg; otherwise it lands
/// dropped and takes no further part in the trial. Ascends to travel.
pub fn complete_place(state: &mut TaskState, peg_id: usize, timing: &MotionTiming) -> bool {
    assert!(
        state.grasped_block().is_some(),
        "place completion needs a held block"
    );
    assert_eq!(
        state.tip_z,
        ZLevel::Plane,
        "place completion starts at the correction plane"
    );
    assert_eq!(state.jaw, Jaw::Closed, "place completion starts jaw closed");

    state.jaw = Jaw::Open;
    state.advance_clock(timing.jaw_s);
    let peg = state.pegs[peg_id];
    let block = state.grasped_block_mut().expect("asserted above");
    block.state = if place_within_clearance(block.opening_center, &peg) {
        BlockState::OnPeg(peg_id)
    } else {
        BlockState::Dropped
    };
    set_z(state, ZLevel::Travel, timing);
    check_place_success(state, peg_id)
}

/// One full subtask: perceive, approach open loop, correct if the method
/// has a correction phase, then complete. Starts and ends at travel level.
#[allow(clippy::too_many_arguments)]
pub fn run_subtask(
    state: &mut TaskState,
    instrument: &mut InstrumentModel,
    log: &mut CommandLog,
    cam: &Camera,
    percept: &PerceptionModel,
    subtask: Subtask,
    peg_id: usize,
    method: Method<'_>,
    cfg: &ServoConfig,
    timing: &MotionTiming,
    rng: &mut ChaCha8Rng,
) -> Result<SubtaskResult> {
    assert_eq!(state.tip_z, ZLevel::Travel, "subtasks start at travel");
    let t0 = state.clock_s;

    let perception = perceive_poses_with(state, rng.gen(), percept);
    let from = match method {
        Method::Cal(observer) if !log.history().is_empty() => {
            observer.predict(log.history())
        }
        _ => log.last_or_home(),
    };
    let waypoints = plan_approach(subtask, &perception, peg_id, from)?;
    track_approach(state, instrument, log, &waypoints, method, timing, rng);
    set_z(state, ZLevel::Plane, timing);

    let correction = match method {
        Method::Ivs(ensemble) => servo_correct(
            state, instrument, log, cam, ensemble, subtask, peg_id, cfg, rng,
        )?,
        _ => CorrectionResult::default(),
    };

    let success = match subtask {
        Subtask::Pick => complete_pick(state, timing),
        Subtask::Place => complete_place(state, peg_id, timing),
    };
    Ok(SubtaskResult {
        success,
        correction,
        elapsed_s: state.clock_s - t0,
    })
}
