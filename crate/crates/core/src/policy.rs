//! The learned feedback policy: an ensemble of small CNNs trained by
//! imitation on demonstration frames, queried by averaging actions and
//! voting on termination.
//!
//! Each member owns one conv stack and one dense head per subtask, so the
//! convolutional features are shared across pick and place within a member
//! while members stay fully independent of each other. Training is plain
//! minibatch SGD with momentum, alternating pick and place batches so the
//! shared stack sees both supervision sources every pass.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{Hyperparameters, LabeledSample, Subtask};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{
    output_loss_and_grad, sgd_momentum_step, DropoutMode, NetSpec, Network, Workspace,
};
use crate::rng::{derive_seed, rng_from_seed};
use crate::workspace::Pose2;

/// Labeled frames of one demonstration, in capture order. The trainer
/// splits by whole trajectories, never by frames, so held-out data is
/// genuinely unseen motion.
pub type TrajectorySamples = Vec<LabeledSample>;

/// Optimizer and split settings. Separate from [`Hyperparameters`], which
/// defines the task semantics; everything here only shapes the fit.
#[derive(Copy, Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Trajectories per subtask each member trains on.
    pub train_trajectories: usize,
    /// Trajectories per subtask held out for that member's evaluation.
    pub holdout_trajectories: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 32,
            // Holdout loss on the default corpus plateaus around epoch 12
            // (0.69 +- 0.02 thereafter); later epochs only buy train loss.
            epochs: 12,
            train_trajectories: 150,
            holdout_trajectories: 30,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.train_trajectories < 1 || self.holdout_trajectories < 1 {
            return bad("both split sizes must be at least 1");
        }
        Ok(())
    }
}

/// The trained policy: `ensemble_size` independent networks plus the
/// query-rule constants.
#[derive(Clone, Debug)]
pub struct EnsemblePolicy {
    pub hyper: Hyperparameters,
    pub members: Vec<Network<f32>>,
}

/// Fresh ensemble with Glorot-uniform weights; member `i` draws from
/// `seed + i`, so members differ from each other but every run from the
/// same seed is identical.
pub fn init_ensemble(spec: &NetSpec, hyper: &Hyperparameters, seed: u64) -> EnsemblePolicy {
    hyper.validate().expect("ensemble hyperparameters");
    let members = (0..hyper.ensemble_size)
        .map(|i| Network::init(spec.clone(), seed + i as u64))
        .collect();
    EnsemblePolicy {
        hyper: *hyper,
        members,
    }
}

impl EnsemblePolicy {
    pub fn spec(&self) -> &NetSpec {
        &self.members[0].spec
    }

    /// Evaluates every member on one preprocessed input and combines them:
    /// mean action, quorum vote on termination.
    pub fn query(
        &self,
        input: &[f32],
        subtask: Subtask,
        ws: &mut Workspace<f32>,
    ) -> (Pose2, bool) {
        let mut actions = Vec::with_capacity(self.members.len());
        let mut probs = Vec::with_capacity(self.members.len());
        for m in &self.members {
            let out = m.forward(input, subtask.head_index(), DropoutMode::Eval, ws);
            actions.push([out[0], out[1]]);
            probs.push(out[2]);
        }
        combine(&actions, &probs, &self.hyper)
    }
}

/// The ensemble query rule on raw member outputs: the action is the mean
/// across members, and the stop flag is set iff at least `vote_quorum`
/// members (clamped to the member count, so a 1-member ensemble reduces to
/// a plain threshold) report probability `>= vote_threshold`.
///
/// Member order must not matter, so each coordinate is summed in sorted
/// value order; the result is bit-identical under any permutation of the
/// members, not merely close.
pub fn combine(
    actions: &[[f32; 2]],
    term_probs: &[f32],
    hyper: &Hyperparameters,
) -> (Pose2, bool) {
    assert_eq!(actions.len(), term_probs.len(), "one probability per action");
    let k = actions.len();
    assert!(k >= 1, "ensemble cannot be empty");
    let mean_of = |axis: usize| {
        let mut vals: Vec<f64> = actions.iter().map(|a| a[axis] as f64).collect();
        vals.sort_by(f64::total_cmp);
        vals.iter().sum::<f64>() / k as f64
    };
    // The threshold comparison happens in the members' precision, so a
    // member reporting exactly the configured threshold counts as a vote.
    let threshold = hyper.vote_threshold as f32;
    let votes = term_probs.iter().filter(|&&p| p >= threshold).count();
    let quorum = hyper.vote_quorum.min(k);
    (Pose2::new(mean_of(0), mean_of(1)), votes >= quorum)
}

/// Scales an RGB byte image into the network input layout: row-major,
/// channels interleaved, bytes mapped to [0,1].
pub fn image_to_input(img: &Image, out: &mut Vec<f32>) {
    out.clear();
    out.extend(img.pixels().iter().map(|&b| f32::from(b) / 255.0));
}

/// Mean per-sample losses for one epoch. The train side is measured on the
/// fly (dropout active, weights moving); the holdout side is a clean
/// eval-mode pass after the epoch.
#[derive(Copy, Clone, Debug, Serialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub holdout_loss: f64,
}

/// Quality of a trained member on its held-out trajectories.
#[derive(Copy, Clone, Debug, Serialize)]
pub struct HoldoutMetrics {
    /// Mean angle between predicted and labeled action directions, over
    /// samples whose label is nonzero. Degrees.
    pub angular_error_deg: f64,
    /// Fraction of termination labels matched at a 0.5 cutoff.
    pub termination_accuracy: f64,
    /// Samples contributing to the angular mean.
    pub action_samples: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct MemberReport {
    pub epochs: Vec<EpochStats>,
    pub holdout: HoldoutMetrics,
}

// Stream tags for deriving a member's independent random sequences.
const SPLIT_STREAM: u64 = 1;
const ORDER_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;

/// Picks `train + holdout` distinct trajectory indices out of `n`,
/// shuffled by `rng`.
fn split_indices(
    n: usize,
    cfg: &TrainingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let need = cfg.train_trajectories + cfg.holdout_trajectories;
    if n < need {
        return Err(Error::EmptySplit);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let holdout = idx.split_off(cfg.train_trajectories)[..cfg.holdout_trajectories].to_vec();
    Ok((idx, holdout))
}

/// Batch schedule for one epoch: pick and place batches strictly
/// alternate while both remain, and whichever side has more finishes the
/// epoch in a run. Every batch appears exactly once.
fn alternation_order(pick_batches: usize, place_batches: usize) -> Vec<Subtask> {
    let mut order = Vec::with_capacity(pick_batches + place_batches);
    let (mut p, mut l) = (0, 0);
    while p < pick_batches || l < place_batches {
        if p < pick_batches {
            order.push(Subtask::Pick);
            p += 1;
        }
        if l < place_batches {
            order.push(Subtask::Place);
            l += 1;
        }
    }
    order
}

/// Flat sample handles for a set of trajectories.
fn flatten<'d>(data: &'d [TrajectorySamples], idx: &[usize]) -> Vec<&'d LabeledSample> {
    idx.iter().flat_map(|&i| data[i].iter()).collect()
}

/// Trains one member in place and reports per-epoch losses plus holdout
/// metrics. Deterministic in `member_seed`: the trajectory split, batch
/// order and dropout masks all derive from it, so retraining from the same
/// initial weights reproduces the final weights bit for bit.
pub fn train_member(
    net: &mut Network<f32>,
    pick: &[TrajectorySamples],
    place: &[TrajectorySamples],
    hyper: &Hyperparameters,
    cfg: &TrainingConfig,
    member_seed: u64,
) -> Result<MemberReport> {
    hyper.validate()?;
    cfg.validate()?;

    let mut split_rng = rng_from_seed(derive_seed(member_seed, SPLIT_STREAM));
    let (pick_train, pick_hold) = split_indices(pick.len(), cfg, &mut split_rng)?;
    let (place_train, place_hold) = split_indices(place.len(), cfg, &mut split_rng)?;

    let train: [Vec<&LabeledSample>; 2] =
        [flatten(pick, &pick_train), flatten(place, &place_train)];
    let holdout: Vec<(Subtask, &LabeledSample)> = flatten(pick, &pick_hold)
        .into_iter()
        .map(|s| (Subtask::Pick, s))
        .chain(
            flatten(place, &place_hold)
                .into_iter()
                .map(|s| (Subtask::Place, s)),
        )
        .collect();
    if train.iter().any(|t| t.is_empty()) || holdout.is_empty() {
        return Err(Error::EmptySplit);
    }

    let mut order_rng = rng_from_seed(derive_seed(member_seed, ORDER_STREAM));
    let mut drop_rng = rng_from_seed(derive_seed(member_seed, DROPOUT_STREAM));
    let mut ws = Workspace::new(&net.spec);
    let mut grad = Network::<f32>::zeroed(net.spec.clone());
    let mut velocity = Network::<f32>::zeroed(net.spec.clone());
    let mut input = Vec::new();
    let mut epochs = Vec::with_capacity(cfg.epochs);

    let mut sample_order: [Vec<usize>; 2] =
        [(0..train[0].len()).collect(), (0..train[1].len()).collect()];

    for _ in 0..cfg.epochs {
        sample_order[0].shuffle(&mut order_rng);
        sample_order[1].shuffle(&mut order_rng);
        let n_batches = |n: usize| n.div_ceil(cfg.batch_size);
        let order = alternation_order(
            n_batches(train[0].len()),
            n_batches(train[1].len()),
        );

        let mut cursor = [0usize; 2];
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for subtask in order {
            let side = subtask.head_index();
            let start = cursor[side];
            let end = (start + cfg.batch_size).min(sample_order[side].len());
            cursor[side] = end;
            let inv_batch = 1.0 / (end - start) as f64;

            grad.zero_all();
            for &si in &sample_order[side][start..end] {
                let sample = train[side][si];
                image_to_input(&sample.image, &mut input);
                let pred = net.forward(
                    &input,
                    side,
                    DropoutMode::Sample(&mut drop_rng),
                    &mut ws,
                );
                let (terms, d_out) = output_loss_and_grad(
                    pred,
                    [sample.action_mm.x as f32, sample.action_mm.y as f32],
                    sample.termination,
                    hyper.ce_weight,
                    inv_batch,
                );
                net.backward(&input, side, d_out, &mut ws, &mut grad);
                loss_sum += terms.total(hyper.ce_weight);
                loss_n += 1;
            }
            sgd_momentum_step(
                net,
                &grad,
                &mut velocity,
                cfg.learning_rate,
                cfg.momentum,
            );
        }

        let mut hold_sum = 0.0;
        for &(subtask, sample) in &holdout {
            image_to_input(&sample.image, &mut input);
            let pred = net.forward(&input, subtask.head_index(), DropoutMode::Eval, &mut ws);
            let (terms, _) = output_loss_and_grad(
                pred,
                [sample.action_mm.x as f32, sample.action_mm.y as f32],
                sample.termination,
                hyper.ce_weight,
                1.0,
            );
            hold_sum += terms.total(hyper.ce_weight);
        }
        epochs.push(EpochStats {
            train_loss: loss_sum / loss_n as f64,
            holdout_loss: hold_sum / holdout.len() as f64,
        });
    }

    let holdout_report = holdout_metrics(net, &holdout, &mut ws);
    Ok(MemberReport {
        epochs,
        holdout: holdout_report,
    })
}

/// Trains every member of the ensemble; member `i` trains with seed
/// `seed + i`, mirroring the initialization convention.
pub fn train_ensemble(
    ens: &mut EnsemblePolicy,
    pick: &[TrajectorySamples],
    place: &[TrajectorySamples],
    cfg: &TrainingConfig,
    seed: u64,
) -> Result<Vec<MemberReport>> {
    let hyper = ens.hyper;
    ens.members
        .iter_mut()
        .enumerate()
        .map(|(i, net)| train_member(net, pick, place, &hyper, cfg, seed + i as u64))
        .collect()
}

/// Angle in degrees between a predicted action and a nonzero label
/// direction; `None` when the label is the zero-action convention (no
/// direction to compare against). A zero prediction against a nonzero
/// label counts as fully wrong (180 degrees).
pub fn action_angle_deg(pred: [f32; 2], label: Pose2) -> Option<f64> {
    if label.norm() == 0.0 {
        return None;
    }
    let p = Pose2::new(pred[0] as f64, pred[1] as f64);
    if p.norm() == 0.0 {
        return Some(180.0);
    }
    let cos = (p.dot(label) / (p.norm() * label.norm())).clamp(-1.0, 1.0);
    Some(cos.acos().to_degrees())
}

/// Eval-mode quality of one network over labeled samples.
pub fn holdout_metrics(
    net: &Network<f32>,
    samples: &[(Subtask, &LabeledSample)],
    ws: &mut Workspace<f32>,
) -> HoldoutMetrics {
    assert!(!samples.is_empty(), "metrics need at least one sample");
    let mut input = Vec::new();
    let mut angle_sum = 0.0;
    let mut angle_n = 0usize;
    let mut correct = 0usize;
    for &(subtask, sample) in samples {
        image_to_input(&sample.image, &mut input);
        let out = net.forward(&input, subtask.head_index(), DropoutMode::Eval, ws);
        if let Some(a) = action_angle_deg([out[0], out[1]], sample.action_mm) {
            angle_sum += a;
            angle_n += 1;
        }
        if (out[2] >= 0.5) == sample.termination {
            correct += 1;
        }
    }
    HoldoutMetrics {
        angular_error_deg: if angle_n == 0 {
            0.0
        } else {
            angle_sum / angle_n as f64
        },
        termination_accuracy: correct as f64 / samples.len() as f64,
        action_samples: angle_n,
        samples: samples.len(),
    }
}

// ---- checkpoint container ----

const MAGIC: &[u8; 4] = b"IVSM";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec: NetSpec,
    members: usize,
    param_count: usize,
    hyper: Hyperparameters,
}

fn corrupt(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

impl EnsemblePolicy {
    /// Writes magic, version, a JSON descriptor and the members' flat
    /// weight vectors as little-endian f32. `load` reproduces the policy
    /// bit for bit.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            spec: self.spec().clone(),
            members: self.members.len(),
            param_count: self.spec().param_count(),
            hyper: self.hyper,
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut bytes =
            Vec::with_capacity(12 + json.len() + self.members.len() * header.param_count * 4);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&json);
        for m in &self.members {
            for v in m.to_flat() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(corrupt(path, "not a model checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(corrupt(path, format!("unsupported version {version}")));
        }
        let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = 12 + json_len;
        if bytes.len() < body {
            return Err(corrupt(path, "truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[12..body])
            .map_err(|e| corrupt(path, format!("bad header: {e}")))?;
        if header.param_count != header.spec.param_count() {
            return Err(corrupt(path, "parameter count does not match architecture"));
        }
        if header.members != header.hyper.ensemble_size {
            return Err(corrupt(path, "member count does not match hyperparameters"));
        }
        let expect = body + header.members * header.param_count * 4;
        if bytes.len() != expect {
            return Err(corrupt(
                path,
                format!("expected {expect} bytes, found {}", bytes.len()),
            ));
        }
        let mut members = Vec::with_capacity(header.members);
        let mut at = body;
        let mut flat = vec![0f32; header.param_count];
        for _ in 0..header.members {
            for slot in flat.iter_mut() {
                *slot = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
                at += 4;
            }
            let mut net = Network::<f32>::zeroed(header.spec.clone());
            net.set_from_flat(&flat);
            members.push(net);
        }
        Ok(EnsemblePolicy {
            hyper: header.hyper,
            members,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::OUTPUTS;

    fn tiny_hyper(k: usize) -> Hyperparameters {
        Hyperparameters {
            ensemble_size: k,
            vote_quorum: 3.min(k),
            ..Hyperparameters::default()
        }
    }

    /// Trajectories of gray-noise frames whose labels are a fixed action
    /// and a termination flag on the tail: enough structure for a loss to
    /// fall, cheap enough for unit tests.
    fn tiny_data(n_traj: usize, frames: usize, px: usize, seed: u64) -> Vec<TrajectorySamples> {
        use rand::Rng;
        let mut rng = rng_from_seed(seed);
        (0..n_traj)
            .map(|_| {
                (0..frames)
                    .map(|f| {
                        let pixels: Vec<u8> = (0..px * px * 3).map(|_| rng.gen()).collect();
                        LabeledSample {
                            image: Image::new(px, px, pixels),
                            action_mm: Pose2::new(1.0, 0.0),
                            termination: f + 2 >= frames,
                        }
                    })
                    .collect()
            })
            .collect()
    }

    fn tiny_cfg() -> TrainingConfig {
        TrainingConfig {
            epochs: 3,
            batch_size: 8,
            train_trajectories: 6,
            holdout_trajectories: 2,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic_and_members_differ() {
        let spec = NetSpec::reduced();
        let a = init_ensemble(&spec, &tiny_hyper(4), 11);
        let b = init_ensemble(&spec, &tiny_hyper(4), 11);
        assert_eq!(a.members.len(), 4);
        for (ma, mb) in a.members.iter().zip(&b.members) {
            assert_eq!(ma.to_flat(), mb.to_flat());
        }
        assert_ne!(a.members[0].to_flat(), a.members[1].to_flat());
    }

    #[test]
    fn combine_averages_actions_and_counts_votes() {
        let hyper = tiny_hyper(4);
        let cross = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
        let (mean, _) = combine(&cross, &[0.1; 4], &hyper);
        assert_eq!((mean.x, mean.y), (0.0, 0.0));

        let acts = [[0.5, 0.5]; 4];
        let (_, stop) = combine(&acts, &[0.9, 0.8, 0.75, 0.2], &hyper);
        assert!(stop, "three members at or above the threshold");
        let (_, stop) = combine(&acts, &[0.9, 0.9, 0.6, 0.6], &hyper);
        assert!(!stop, "two votes miss a quorum of three");
        // Threshold is inclusive; quorum clamps to the member count.
        let (_, stop) = combine(&acts, &[0.70, 0.70, 0.70, 0.1], &hyper);
        assert!(stop);
        let (_, stop) = combine(&[[0.0, 0.0]], &[0.71], &hyper);
        assert!(stop, "single member reduces to a plain threshold");
    }

    #[test]
    fn combine_is_bit_exact_under_member_permutation() {
        let hyper = tiny_hyper(4);
        let actions = [[0.13, -0.7], [0.001, 0.2], [-0.99, 0.5], [0.42, -0.01]];
        let probs = [0.71, 0.2, 0.9, 0.69];
        let (base_a, base_s) = combine(&actions, &probs, &hyper);
        // All 24 orderings of 4 members.
        let mut perm = [0usize, 1, 2, 3];
        let mut perms = Vec::new();
        heap_permutations(&mut perm, 4, &mut perms);
        assert_eq!(perms.len(), 24);
        for p in perms {
            let acts: Vec<[f32; 2]> = p.iter().map(|&i| actions[i]).collect();
            let prbs: Vec<f32> = p.iter().map(|&i| probs[i]).collect();
            let (a, s) = combine(&acts, &prbs, &hyper);
            assert_eq!(a.x.to_bits(), base_a.x.to_bits());
            assert_eq!(a.y.to_bits(), base_a.y.to_bits());
            assert_eq!(s, base_s);
        }
    }

    fn heap_permutations(a: &mut [usize; 4], k: usize, out: &mut Vec<[usize; 4]>) {
        if k == 1 {
            out.push(*a);
            return;
        }
        for i in 0..k {
            heap_permutations(a, k - 1, out);
            if k % 2 == 0 {
                a.swap(i, k - 1);
            } else {
                a.swap(0, k - 1);
            }
        }
    }

    #[test]
    fn query_matches_any_member_order() {
        let spec = NetSpec::reduced();
        let mut ens = init_ensemble(&spec, &tiny_hyper(3), 9);
        let mut ws = Workspace::new(&spec);
        let img = &tiny_data(1, 2, spec.input_px, 5)[0][0].image;
        let mut input = Vec::new();
        image_to_input(img, &mut input);
        let (a0, s0) = ens.query(&input, Subtask::Place, &mut ws);
        ens.members.rotate_left(1);
        let (a1, s1) = ens.query(&input, Subtask::Place, &mut ws);
        assert_eq!(a0.x.to_bits(), a1.x.to_bits());
        assert_eq!(a0.y.to_bits(), a1.y.to_bits());
        assert_eq!(s0, s1);
    }

    #[test]
    fn image_to_input_scales_and_keeps_layout() {
        let mut img = Image::filled(16, 16, [0, 0, 0]);
        img.put(3, 2, [255, 0, 51]);
        let mut input = Vec::new();
        image_to_input(&img, &mut input);
        assert_eq!(input.len(), 16 * 16 * 3);
        let at = (2 * 16 + 3) * 3;
        assert_eq!(input[at], 1.0);
        assert_eq!(input[at + 1], 0.0);
        assert_eq!(input[at + 2], 51.0 / 255.0);
    }

    #[test]
    fn training_reduces_holdout_loss_and_reproduces_bitwise() {
        let spec = NetSpec::reduced();
        let pick = tiny_data(8, 6, spec.input_px, 21);
        let place = tiny_data(8, 5, spec.input_px, 22);
        let hyper = tiny_hyper(2);
        let cfg = tiny_cfg();

        let mut net = Network::<f32>::init(spec.clone(), 33);
        let report = train_member(&mut net, &pick, &place, &hyper, &cfg, 70).unwrap();
        assert_eq!(report.epochs.len(), cfg.epochs);
        let first = report.epochs.first().unwrap().holdout_loss;
        let last = report.epochs.last().unwrap().holdout_loss;
        assert!(
            last < first,
            "holdout loss should fall: {first:.4} -> {last:.4}"
        );
        assert!(report.holdout.samples > 0);

        let mut again = Network::<f32>::init(spec.clone(), 33);
        train_member(&mut again, &pick, &place, &hyper, &cfg, 70).unwrap();
        let bits = |n: &Network<f32>| n.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&net), bits(&again));
    }

    #[test]
    fn zero_ce_weight_leaves_termination_outputs_untouched() {
        let spec = NetSpec::reduced();
        let pick = tiny_data(4, 5, spec.input_px, 31);
        let place = tiny_data(4, 5, spec.input_px, 32);
        let hyper = Hyperparameters {
            ce_weight: 0.0,
            ..tiny_hyper(1)
        };
        let cfg = TrainingConfig {
            epochs: 1,
            train_trajectories: 3,
            holdout_trajectories: 1,
            ..tiny_cfg()
        };
        let init = Network::<f32>::init(spec.clone(), 44);
        let mut net = init.clone();
        train_member(&mut net, &pick, &place, &hyper, &cfg, 55).unwrap();

        for (head, start) in net.heads.iter().zip(&init.heads) {
            assert_eq!(head.b2[2], start.b2[2], "termination bias frozen");
            for j in 0..spec.dense_hidden {
                assert_eq!(head.w2[j * OUTPUTS + 2], start.w2[j * OUTPUTS + 2]);
            }
            assert_ne!(head.w2, start.w2, "action outputs still learn");
        }
        assert_ne!(net.convs[0].w, init.convs[0].w, "conv stack moves via MSE");
    }

    #[test]
    fn split_rejects_datasets_smaller_than_the_split() {
        let spec = NetSpec::reduced();
        let pick = tiny_data(5, 4, spec.input_px, 61);
        let place = tiny_data(8, 4, spec.input_px, 62);
        let mut net = Network::<f32>::init(spec.clone(), 1);
        let err = train_member(
            &mut net,
            &pick,
            &place,
            &tiny_hyper(1),
            &tiny_cfg(),
            7,
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptySplit), "got {err}");
    }

    #[test]
    fn action_angles_follow_the_label_convention() {
        assert_eq!(action_angle_deg([1.0, 0.0], Pose2::ZERO), None);
        let a = action_angle_deg([0.0, 2.0], Pose2::new(1.0, 0.0)).unwrap();
        assert!((a - 90.0).abs() < 1e-9);
        assert_eq!(action_angle_deg([0.0, 0.0], Pose2::new(1.0, 0.0)), Some(180.0));
        let b = action_angle_deg([-3.0, 0.0], Pose2::new(1.0, 0.0)).unwrap();
        assert!((b - 180.0).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.ivsm");
        let spec = NetSpec::reduced();
        let ens = init_ensemble(&spec, &tiny_hyper(3), 17);
        ens.save(&path).unwrap();
        let back = EnsemblePolicy::load(&path).unwrap();

        assert_eq!(back.members.len(), 3);
        assert_eq!(back.spec(), &spec);
        assert_eq!(back.hyper.vote_quorum, ens.hyper.vote_quorum);
        for (a, b) in ens.members.iter().zip(&back.members) {
            let bits = |n: &Network<f32>| {
                n.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            };
            assert_eq!(bits(a), bits(b));
        }

        // Outputs agree bit for bit too.
        let mut ws = Workspace::new(&spec);
        let img = &tiny_data(1, 2, spec.input_px, 3)[0][0].image;
        let mut input = Vec::new();
        image_to_input(img, &mut input);
        let (pa, sa) = ens.query(&input, Subtask::Pick, &mut ws);
        let (pb, sb) = back.query(&input, Subtask::Pick, &mut ws);
        assert_eq!((pa.x.to_bits(), pa.y.to_bits(), sa), (pb.x.to_bits(), pb.y.to_bits(), sb));
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let spec = NetSpec::reduced();
        let ens = init_ensemble(&spec, &tiny_hyper(2), 2);

        let path = dir.path().join("truncated.ivsm");
        ens.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = EnsemblePolicy::load(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { .. }), "got {err}");

        let path = dir.path().join("not_a_model.ivsm");
        std::fs::write(&path, b"PK\x03\x04 definitely a zip").unwrap();
        let err = EnsemblePolicy::load(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "got {err}");
    }

    #[test]
    fn alternation_interleaves_then_drains_the_longer_side() {
        use Subtask::*;
        assert_eq!(
            alternation_order(3, 5),
            vec![Pick, Place, Pick, Place, Pick, Place, Place, Place]
        );
        assert_eq!(alternation_order(2, 0), vec![Pick, Pick]);
        assert_eq!(alternation_order(0, 0), Vec::<Subtask>::new());
    }
}
