//! Cable-drive transmission model: the gap between where the motors think
//! the tip is and where it actually is.
//!
//! Each axis runs a play operator, the standard rate-independent hysteresis
//! primitive. The operator output `y` stays put until the input `x` escapes
//! a dead band of width `b` centered on `y`, then gets dragged along at the
//! band edge. The true tip position is an affine map of `y` plus a little
//! sensor noise; the motor-side encoders see only `x`, which is the entire
//! problem this project is about.
//!
//! The module also carries the calibration baseline: a least-squares fit of
//! the same play-operator family to logged (command, true pose) rollouts,
//! and the resulting observer that replays commands to predict where the
//! tip really went.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::workspace::{in_workspace, workspace_bounds, Pose2};

/// Default measurement noise on the true tip position, millimeters.
pub const TIP_NOISE_SD_MM: f64 = 0.05;

/// Minimum logged samples per axis for a calibration fit.
pub const MIN_CALIBRATION_SAMPLES: usize = 200;

/// One play-operator update. `deadband` is the full band width.
fn play_step(y: f64, x: f64, deadband: f64) -> f64 {
    let half = deadband / 2.0;
    if (x - y).abs() <= half {
        y
    } else {
        x - (x - y).signum() * half
    }
}

/// Per-axis cable transmission parameters plus the hidden hysteresis state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstrumentModel {
    pub name: String,
    /// Full deadband width per axis, millimeters.
    pub deadband_mm: [f64; 2],
    /// Unitless cable gain per axis.
    pub scale: [f64; 2],
    /// Static offset per axis, millimeters.
    pub offset_mm: [f64; 2],
    pub noise_sd_mm: f64,
    /// Play-operator output per axis. Not persisted; a loaded instrument
    /// starts slack.
    #[serde(skip)]
    play_state_mm: [f64; 2],
}

impl InstrumentModel {
    pub fn custom(
        name: impl Into<String>,
        deadband_mm: [f64; 2],
        scale: [f64; 2],
        offset_mm: [f64; 2],
        noise_sd_mm: f64,
    ) -> Self {
        assert!(
            deadband_mm.iter().all(|&b| b >= 0.0) && scale.iter().all(|&s| s > 0.0),
            "deadband must be nonnegative and scale positive"
        );
        assert!(noise_sd_mm >= 0.0, "noise sd must be nonnegative");
        InstrumentModel {
            name: name.into(),
            deadband_mm,
            scale,
            offset_mm,
            noise_sd_mm,
            play_state_mm: [0.0; 2],
        }
    }

    /// Ideal transmission: commands come out exactly as sent.
    pub fn perfect() -> Self {
        Self::custom("perfect", [0.0; 2], [1.0; 2], [0.0; 2], 0.0)
    }

    pub fn play_state_mm(&self) -> [f64; 2] {
        self.play_state_mm
    }

    /// Returns the transmission to the slack state it powers up in.
    pub fn reset(&mut self) {
        self.play_state_mm = [0.0; 2];
    }

    /// Executes a commanded move and returns the true tip pose.
    ///
    /// Updates the hidden play state, so call order matters. The command
    /// must lie within workspace bounds; planners clamp before commanding.
    pub fn command_move(&mut self, command: Pose2, rng: &mut ChaCha8Rng) -> Pose2 {
        assert!(
            in_workspace(command),
            "command ({:.2}, {:.2}) outside workspace",
            command.x,
            command.y
        );
        let noise = Normal::new(0.0, self.noise_sd_mm).expect("nonnegative sd");
        let x = [command.x, command.y];
        let mut out = [0.0; 2];
        for a in 0..2 {
            self.play_state_mm[a] = play_step(self.play_state_mm[a], x[a], self.deadband_mm[a]);
            out[a] = self.scale[a] * self.play_state_mm[a]
                + self.offset_mm[a]
                + noise.sample(rng);
        }
        Pose2::new(out[0], out[1])
    }

    /// Where the motor encoders claim the tip is: exactly the command.
    /// The uncalibrated controller trusts this.
    pub fn encoder_estimate(&self, command: Pose2) -> Pose2 {
        command
    }

    /// Worst-case steady-state |true - commanded| per axis over the
    /// workspace, ignoring noise. The error is affine in both the command
    /// and the play state, so checking band edges at the workspace corners
    /// is exact.
    pub fn worst_case_error_mm(&self) -> [f64; 2] {
        let (lo, hi) = workspace_bounds();
        let spans = [[lo.x, hi.x], [lo.y, hi.y]];
        let mut worst = [0.0f64; 2];
        for a in 0..2 {
            for x in spans[a] {
                for sign in [-1.0, 1.0] {
                    let y = x + sign * self.deadband_mm[a] / 2.0;
                    let err = (self.scale[a] * y + self.offset_mm[a] - x).abs();
                    worst[a] = worst[a].max(err);
                }
            }
        }
        worst
    }
}

/// Builds one of the three stock instruments. Parameter sets are ordered so
/// that open-loop accuracy ranks A best, then C, then B.
pub fn make_instrument(preset: &str) -> Result<InstrumentModel> {
    let (deadband, scale, offset) = match preset.trim().to_ascii_uppercase().as_str() {
        "A" => ([2.0, 1.6], [1.00, 1.00], [0.5, -0.3]),
        "B" => ([4.4, 3.6], [1.02, 0.98], [-1.0, 0.8]),
        "C" => ([3.0, 3.2], [0.99, 1.03], [1.2, 1.0]),
        _ => return Err(Error::UnknownPreset(preset.to_string())),
    };
    Ok(InstrumentModel::custom(
        preset.trim().to_ascii_uppercase(),
        deadband,
        scale,
        offset,
        TIP_NOISE_SD_MM,
    ))
}

/// Logged execution of a command sequence on a freshly reset instrument.
/// `true_poses[t]` is the measured tip pose right after `commands[t]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationRollout {
    pub commands: Vec<Pose2>,
    pub true_poses: Vec<Pose2>,
}

/// Fitted transmission parameters, used to predict true poses from command
/// history and to pre-distort commands.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Observer {
    pub deadband_mm: [f64; 2],
    pub scale: [f64; 2],
    pub offset_mm: [f64; 2],
    /// Root-mean-square prediction error on the held-out rollouts, mm.
    pub residual_rms_mm: f64,
}

impl Observer {
    /// Observer of an ideal transmission; predicts the last command.
    pub fn perfect() -> Self {
        Observer {
            deadband_mm: [0.0; 2],
            scale: [1.0; 2],
            offset_mm: [0.0; 2],
            residual_rms_mm: 0.0,
        }
    }

    fn replay_play(&self, history: &[Pose2]) -> [f64; 2] {
        let mut y = [0.0f64; 2];
        for p in history {
            let x = [p.x, p.y];
            for a in 0..2 {
                y[a] = play_step(y[a], x[a], self.deadband_mm[a]);
            }
        }
        y
    }

    /// Replays the fitted operator over the full command history (slack
    /// start) and returns the predicted true pose after the last command.
    pub fn predict(&self, history: &[Pose2]) -> Pose2 {
        assert!(!history.is_empty(), "observer needs at least one command");
        let y = self.replay_play(history);
        Pose2::new(
            self.scale[0] * y[0] + self.offset_mm[0],
            self.scale[1] * y[1] + self.offset_mm[1],
        )
    }

    /// Command that should park the true tip at `target`, given everything
    /// commanded so far: inverts the affine map, then leads the play state
    /// by half a deadband in the direction of travel. May fall outside the
    /// workspace for extreme targets; callers clamp before issuing.
    pub fn compensating_command(&self, history: &[Pose2], target: Pose2) -> Pose2 {
        let y_now = self.replay_play(history);
        let want = [target.x, target.y];
        let mut cmd = [0.0f64; 2];
        for a in 0..2 {
            let y_need = (want[a] - self.offset_mm[a]) / self.scale[a];
            let delta = y_need - y_now[a];
            cmd[a] = if delta == 0.0 {
                y_need
            } else {
                y_need + delta.signum() * self.deadband_mm[a] / 2.0
            };
        }
        Pose2::new(cmd[0], cmd[1])
    }
}

/// RMS of the 2D prediction error over whole rollouts.
pub fn observer_residual_rms(obs: &Observer, rollouts: &[CalibrationRollout]) -> f64 {
    let mut sum_sq = 0.0;
    let mut n = 0usize;
    for r in rollouts {
        let mut y = [0.0f64; 2];
        for (cmd, truth) in r.commands.iter().zip(&r.true_poses) {
            let x = [cmd.x, cmd.y];
            for a in 0..2 {
                y[a] = play_step(y[a], x[a], obs.deadband_mm[a]);
            }
            let pred = Pose2::new(
                obs.scale[0] * y[0] + obs.offset_mm[0],
                obs.scale[1] * y[1] + obs.offset_mm[1],
            );
            sum_sq += pred.dist(*truth).powi(2);
            n += 1;
        }
    }
    assert!(n > 0, "residual over empty rollouts");
    (sum_sq / n as f64).sqrt()
}

/// Scalar command/truth series for one axis of one rollout.
struct AxisSeries {
    cmds: Vec<f64>,
    truths: Vec<f64>,
}

/// Replays the play operator over `cmds` and least-squares fits the affine
/// output map. Returns (sse, scale, offset).
fn affine_fit_for_deadband(series: &[AxisSeries], deadband: f64) -> (f64, f64, f64) {
    let (mut sy, mut sw, mut syy, mut syw, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0f64);
    for s in series {
        let mut y = 0.0;
        for (&x, &w) in s.cmds.iter().zip(&s.truths) {
            y = play_step(y, x, deadband);
            sy += y;
            sw += w;
            syy += y * y;
            syw += y * w;
            n += 1.0;
        }
    }
    let var = syy - sy * sy / n;
    let (scale, offset) = if var.abs() < 1e-9 {
        (1.0, (sw - sy) / n)
    } else {
        let s = (syw - sy * sw / n) / var;
        (s, (sw - s * sy) / n)
    };
    let mut sse = 0.0;
    for s in series {
        let mut y = 0.0;
        for (&x, &w) in s.cmds.iter().zip(&s.truths) {
            y = play_step(y, x, deadband);
            sse += (scale * y + offset - w).powi(2);
        }
    }
    (sse, scale, offset)
}

/// Fits play-operator parameters per axis by deadband grid search with the
/// affine part solved in closed form at each candidate, then scores the fit
/// on held-out rollouts.
///
/// The last fifth of the rollouts is held out (for a single rollout, its
/// last fifth of samples). Fails if the training commands never reverse
/// direction on some axis; without a reversal the offset and the deadband
/// are not separately identifiable.
pub fn fit_observer(rollouts: &[CalibrationRollout]) -> Result<Observer> {
    for r in rollouts {
        assert_eq!(
            r.commands.len(),
            r.true_poses.len(),
            "rollout command/pose lengths differ"
        );
    }

    // Split train/holdout.
    let (train, holdout): (Vec<CalibrationRollout>, Vec<CalibrationRollout>) =
        if rollouts.len() >= 2 {
            let n_test = (rollouts.len() / 5).max(1);
            let cut = rollouts.len() - n_test;
            (rollouts[..cut].to_vec(), rollouts[cut..].to_vec())
        } else if rollouts.len() == 1 {
            let r = &rollouts[0];
            let cut = r.commands.len() - r.commands.len() / 5;
            (
                vec![CalibrationRollout {
                    commands: r.commands[..cut].to_vec(),
                    true_poses: r.true_poses[..cut].to_vec(),
                }],
                // Holdout keeps the full command prefix so the replayed play
                // state is right, but scoring counts only the tail.
                vec![r.clone()],
            )
        } else {
            (Vec::new(), Vec::new())
        };

    let got: usize = train.iter().map(|r| r.commands.len()).sum();
    if got < MIN_CALIBRATION_SAMPLES {
        return Err(Error::TooFewCalibrationSamples {
            needed: MIN_CALIBRATION_SAMPLES,
            got,
        });
    }

    let mut deadband = [0.0f64; 2];
    let mut scale = [1.0f64; 2];
    let mut offset = [0.0f64; 2];
    for axis in 0..2 {
        let series: Vec<AxisSeries> = train
            .iter()
            .map(|r| AxisSeries {
                cmds: r.commands.iter().map(|p| [p.x, p.y][axis]).collect(),
                truths: r.true_poses.iter().map(|p| [p.x, p.y][axis]).collect(),
            })
            .collect();

        let eps = 1e-9;
        let has_dir = |sign: f64| {
            series.iter().any(|s| {
                s.cmds
                    .windows(2)
                    .any(|w| (w[1] - w[0]) * sign > eps)
            })
        };
        if !has_dir(1.0) || !has_dir(-1.0) {
            return Err(Error::InsufficientExcitation { axis });
        }

        // Coarse-to-fine grid over the deadband.
        let (mut lo, mut hi, mut step) = (0.0f64, 12.0f64, 0.1f64);
        let mut best = (f64::INFINITY, 0.0, 1.0, 0.0);
        for _ in 0..3 {
            let mut b = lo;
            while b <= hi + 1e-12 {
                let (sse, s, d) = affine_fit_for_deadband(&series, b);
                if sse < best.0 {
                    best = (sse, b, s, d);
                }
                b += step;
            }
            lo = (best.1 - step).max(0.0);
            hi = best.1 + step;
            step /= 10.0;
        }
        deadband[axis] = best.1;
        scale[axis] = best.2;
        offset[axis] = best.3;
    }

    let mut obs = Observer {
        deadband_mm: deadband,
        scale,
        offset_mm: offset,
        residual_rms_mm: 0.0,
    };
    obs.residual_rms_mm = if rollouts.len() >= 2 {
        observer_residual_rms(&obs, &holdout)
    } else {
        // Single-rollout holdout: replay everything, score only the tail.
        let r = &holdout[0];
        let cut = r.commands.len() - r.commands.len() / 5;
        let mut y = [0.0f64; 2];
        let mut sum_sq = 0.0;
        let mut n = 0usize;
        for (t, (cmd, truth)) in r.commands.iter().zip(&r.true_poses).enumerate() {
            for a in 0..2 {
                y[a] = play_step(y[a], [cmd.x, cmd.y][a], obs.deadband_mm[a]);
            }
            if t >= cut {
                let pred = Pose2::new(
                    obs.scale[0] * y[0] + obs.offset_mm[0],
                    obs.scale[1] * y[1] + obs.offset_mm[1],
                );
                sum_sq += pred.dist(*truth).powi(2);
                n += 1;
            }
        }
        (sum_sq / n.max(1) as f64).sqrt()
    };
    Ok(obs)
}

/// Deterministic calibration path: opposed triangle waves on the two axes
/// at incommensurate periods, so each axis sweeps both directions many
/// times while staying on the board.
pub fn excitation_commands(samples: usize) -> Vec<Pose2> {
    fn tri(t: f64) -> f64 {
        let u = t - t.floor();
        if u < 0.5 {
            4.0 * u - 1.0
        } else {
            3.0 - 4.0 * u
        }
    }
    (0..samples)
        .map(|i| {
            let t = i as f64;
            Pose2::new(
                50.0 + 45.0 * tri(t / 97.0),
                25.0 + 32.0 * tri(t / 61.0 + 0.25),
            )
        })
        .collect()
}
