//! From raw capture to training data: peg-centered cropping, color
//! cropping, supervision extraction, and the on-disk dataset format.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, PxRect};
use crate::render::{palette, Camera};
use crate::workspace::{peg_positions, Pose2};

/// Side length of the policy's input images, pixels.
pub const CROP_PX: usize = 150;

/// Red content farther than this from the target peg is assumed to belong
/// to a neighboring block and is masked out.
pub const COLOR_CROP_RADIUS_MM: f64 = 12.0;

/// Which third of a transfer a sample belongs to.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subtask {
    Pick,
    Place,
}

impl Subtask {
    /// Dense-head slot this subtask trains and queries.
    pub fn head_index(self) -> usize {
        match self {
            Subtask::Pick => 0,
            Subtask::Place => 1,
        }
    }
}

impl std::fmt::Display for Subtask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Subtask::Pick => "pick",
            Subtask::Place => "place",
        })
    }
}

/// The quantities that define supervision extraction and ensemble voting.
#[derive(Copy, Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparameters {
    /// Length of every corrective step, millimeters.
    pub action_step_mm: f64,
    /// Distance to the demo endpoint below which a frame is labeled done.
    pub success_radius_mm: f64,
    /// Per-member probability needed to count as a termination vote.
    pub vote_threshold: f64,
    /// Members that must vote to stop the correction phase.
    pub vote_quorum: usize,
    /// Weight of the termination loss against the action loss.
    pub ce_weight: f64,
    pub ensemble_size: usize,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            action_step_mm: 1.0,
            success_radius_mm: 2.0,
            vote_threshold: 0.70,
            vote_quorum: 3,
            ce_weight: 1.0,
            ensemble_size: 4,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.action_step_mm > 0.0) {
            return bad("action_step_mm must be positive");
        }
        if !(self.success_radius_mm > 0.0) {
            return bad("success_radius_mm must be positive");
        }
        if !(0.0..=1.0).contains(&self.vote_threshold) {
            return bad("vote_threshold must lie in [0, 1]");
        }
        if self.vote_quorum < 1 || self.vote_quorum > self.ensemble_size {
            return bad("vote_quorum must lie in 1..=ensemble_size");
        }
        if !(self.ce_weight >= 0.0) {
            return bad("ce_weight must be nonnegative");
        }
        Ok(())
    }
}

/// One captured frame: sim time, the peg-window image, and the recorded
/// (encoder-side) tip position at capture. The image shows the true scene;
/// `p` carries whatever error the recording instrument had.
#[derive(Clone, Debug, PartialEq)]
pub struct RawFrame {
    pub t_s: f64,
    pub image: Image,
    pub p: Pose2,
}

/// A recorded demonstration segment for a single subtask on one peg.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTrajectory {
    pub id: String,
    pub subtask: Subtask,
    pub peg_id: usize,
    /// Label of the instrument the demo was recorded on.
    pub instrument: String,
    pub capture_rate_hz: f64,
    pub frames: Vec<RawFrame>,
}

impl RawTrajectory {
    pub fn positions(&self) -> Vec<Pose2> {
        self.frames.iter().map(|f| f.p).collect()
    }

    /// Capture invariants: at least two frames, timestamps strictly
    /// increasing with uniform spacing.
    fn check(&self) -> std::result::Result<(), String> {
        if self.frames.len() < 2 {
            return Err(format!("{} frames, need at least 2", self.frames.len()));
        }
        let dt0 = self.frames[1].t_s - self.frames[0].t_s;
        for w in self.frames.windows(2) {
            let dt = w[1].t_s - w[0].t_s;
            if dt <= 0.0 {
                return Err("timestamps not strictly increasing".to_string());
            }
            if (dt - dt0).abs() > 1e-6 {
                return Err(format!("uneven frame spacing: {dt} vs {dt0}"));
            }
        }
        Ok(())
    }
}

/// A preprocessed image with its extracted supervision.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub image: Image,
    /// Displacement toward the demo's goal; magnitude is the action step
    /// or exactly zero.
    pub action_mm: Pose2,
    pub termination: bool,
}

/// Is this pixel one of the red palette colors? Tuned so board, block and
/// peg all fire while instrument gray and background do not.
#[inline]
pub fn is_red(rgb: [u8; 3]) -> bool {
    rgb[0] >= 150 && rgb[0] as i16 - rgb[1].max(rgb[2]) as i16 >= 60
}

/// The 150x150 pixel window centered on a peg. Fails if the window would
/// leave the frame (a peg too close to the image border).
pub fn crop_window(cam: &Camera, peg_center: Pose2) -> Result<PxRect> {
    let (px, py) = cam.mm_to_px(peg_center);
    let half = (CROP_PX / 2) as i64;
    let x0 = px.round() as i64 - half;
    let y0 = py.round() as i64 - half;
    let side = CROP_PX as i64;
    if x0 < 0 || y0 < 0 || x0 + side > cam.frame_w as i64 || y0 + side > cam.frame_h as i64 {
        return Err(Error::CropOutOfBounds {
            window: format!("{CROP_PX}x{CROP_PX}+{x0}+{y0}"),
            frame_w: cam.frame_w,
            frame_h: cam.frame_h,
        });
    }
    Ok(PxRect {
        x0: x0 as usize,
        y0: y0 as usize,
        w: CROP_PX,
        h: CROP_PX,
    })
}

/// Masks red pixels farther than `radius_px` from the window center with
/// the background color. Non-red pixels (the instrument) survive anywhere.
pub fn color_crop(img: &Image, radius_px: f64) -> Image {
    assert_eq!(
        (img.width(), img.height()),
        (CROP_PX, CROP_PX),
        "color crop expects a peg window"
    );
    let c = CROP_PX as f64 / 2.0;
    let r2 = radius_px * radius_px;
    let mut out = img.clone();
    for iy in 0..CROP_PX {
        for ix in 0..CROP_PX {
            let d2 = (ix as f64 + 0.5 - c).powi(2) + (iy as f64 + 0.5 - c).powi(2);
            if d2 > r2 && is_red(img.get(ix, iy)) {
                out.put(ix, iy, palette::BACKGROUND);
            }
        }
    }
    out
}

/// Full preprocessing: crop the peg window out of a raw frame, then mask
/// far-away red content. An input that is already window-sized is taken to
/// be the peg window itself (the capture path renders windows directly)
/// and skips the crop.
pub fn preprocess(raw: &Image, peg_center: Pose2, cam: &Camera) -> Result<Image> {
    let window = crop_window(cam, peg_center)?;
    let cropped = if (raw.width(), raw.height()) == (CROP_PX, CROP_PX) {
        raw.clone()
    } else {
        raw.crop(window)?
    };
    Ok(color_crop(&cropped, COLOR_CROP_RADIUS_MM / cam.mm_per_px))
}

/// Index this frame's action points at: the first later frame at least
/// `step_mm` away, or the final frame.
fn target_index(ps: &[Pose2], t: usize, step_mm: f64) -> usize {
    (t + 1..ps.len())
        .find(|&u| ps[u].dist(ps[t]) >= step_mm)
        .unwrap_or(ps.len() - 1)
}

fn action_toward(from: Pose2, to: Pose2, step_mm: f64) -> Pose2 {
    let d = to - from;
    if d.norm() == 0.0 {
        Pose2::ZERO
    } else {
        d.with_norm(step_mm)
    }
}

/// Preprocesses every frame and attaches both labels.
pub fn extract_labels(
    traj: &RawTrajectory,
    cam: &Camera,
    params: &Hyperparameters,
) -> Result<Vec<LabeledSample>> {
    assert!(params.action_step_mm > 0.0 && params.success_radius_mm > 0.0);
    let peg = peg_positions()[traj.peg_id];
    let ps = traj.positions();
    let goal = *ps.last().expect("trajectories have at least 2 frames");
    traj.frames
        .iter()
        .enumerate()
        .map(|(t, frame)| {
            let image = preprocess(&frame.image, peg, cam)?;
            let tgt = target_index(&ps, t, params.action_step_mm);
            Ok(LabeledSample {
                image,
                action_mm: action_toward(ps[t], ps[tgt], params.action_step_mm),
                termination: goal.dist(ps[t]) <= params.success_radius_mm,
            })
        })
        .collect()
}

/// Action labels only; see [`extract_labels`].
pub fn extract_actions(
    traj: &RawTrajectory,
    cam: &Camera,
    step_mm: f64,
) -> Result<Vec<(Image, Pose2)>> {
    let params = Hyperparameters {
        action_step_mm: step_mm,
        ..Hyperparameters::default()
    };
    Ok(extract_labels(traj, cam, &params)?
        .into_iter()
        .map(|s| (s.image, s.action_mm))
        .collect())
}

/// Termination labels only; see [`extract_labels`].
pub fn extract_termination(
    traj: &RawTrajectory,
    cam: &Camera,
    radius_mm: f64,
) -> Result<Vec<(Image, bool)>> {
    let params = Hyperparameters {
        success_radius_mm: radius_mm,
        ..Hyperparameters::default()
    };
    Ok(extract_labels(traj, cam, &params)?
        .into_iter()
        .map(|s| (s.image, s.termination))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    id: String,
    subtask: Subtask,
    peg_id: usize,
    instrument: String,
    frames: Vec<ManifestFrame>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFrame {
    t: f64,
    image_path: String,
    p: Pose2,
}

/// Writes `manifest.jsonl` plus one PPM per frame under `dir`. Ids must be
/// unique and filesystem-safe; the recorder generates them that way.
pub fn write_dataset(trajs: &[RawTrajectory], dir: &Path) -> Result<()> {
    let mut ids = HashSet::new();
    for traj in trajs {
        assert!(
            !traj.id.is_empty()
                && traj
                    .id
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_'),
            "unsafe trajectory id {:?}",
            traj.id
        );
        assert!(ids.insert(&traj.id), "duplicate trajectory id {}", traj.id);
        if let Err(m) = traj.check() {
            panic!("invalid trajectory {}: {m}", traj.id);
        }
    }

    fs::create_dir_all(dir)?;
    let manifest = fs::File::create(dir.join("manifest.jsonl"))?;
    let mut manifest = std::io::BufWriter::new(manifest);
    for traj in trajs {
        let img_dir = dir.join("images").join(&traj.id);
        fs::create_dir_all(&img_dir)?;
        let mut frames = Vec::with_capacity(traj.frames.len());
        for (i, frame) in traj.frames.iter().enumerate() {
            let rel = format!("images/{}/f{i:04}.ppm", traj.id);
            frame.image.write_ppm(&dir.join(&rel))?;
            frames.push(ManifestFrame {
                t: frame.t_s,
                image_path: rel,
                p: frame.p,
            });
        }
        let record = ManifestRecord {
            id: traj.id.clone(),
            subtask: traj.subtask,
            peg_id: traj.peg_id,
            instrument: traj.instrument.clone(),
            frames,
        };
        let line = serde_json::to_string(&record).expect("manifest records serialize");
        manifest.write_all(line.as_bytes())?;
        manifest.write_all(b"\n")?;
    }
    manifest.flush()?;
    Ok(())
}

/// Loads a dataset written by [`write_dataset`]; `read(write(x)) = x`.
pub fn read_dataset(dir: &Path) -> Result<Vec<RawTrajectory>> {
    let manifest_path = dir.join("manifest.jsonl");
    let file = fs::File::open(&manifest_path).map_err(|e| Error::Manifest {
        record: manifest_path.display().to_string(),
        message: e.to_string(),
    })?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| Error::Manifest {
                record: format!("line {}", lineno + 1),
                message: e.to_string(),
            })?;
        if record.peg_id >= peg_positions().len() {
            return Err(Error::Manifest {
                record: record.id.clone(),
                message: format!("peg_id {} out of range", record.peg_id),
            });
        }
        let mut frames = Vec::with_capacity(record.frames.len());
        for mf in &record.frames {
            let image = Image::read_ppm(&dir.join(&mf.image_path)).map_err(|e| {
                Error::Manifest {
                    record: record.id.clone(),
                    message: e.to_string(),
                }
            })?;
            frames.push(RawFrame {
                t_s: mf.t,
                image,
                p: mf.p,
            });
        }
        let traj = RawTrajectory {
            id: record.id.clone(),
            subtask: record.subtask,
            peg_id: record.peg_id,
            instrument: record.instrument,
            capture_rate_hz: if frames.len() >= 2 {
                1.0 / (frames[1].t_s - frames[0].t_s)
            } else {
                0.0
            },
            frames,
        };
        if let Err(m) = traj.check() {
            return Err(Error::Manifest {
                record: record.id,
                message: m,
            });
        }
        out.push(traj);
    }
    Ok(out)
}
