//! Trial execution and benchmark aggregation: full peg-transfer trials,
//! method-by-instrument grids, the ensemble-size ablation, and JSON report
//! emission. Everything is seeded; a (config, seed) pair reproduces every
//! report byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::actuator::{excitation_commands, fit_observer, CalibrationRollout, InstrumentModel, Observer};
use crate::config::RunConfig;
use crate::control::{run_subtask, update_rate_hz, CommandLog, Method, ServoConfig};
use crate::datapipe::{Hyperparameters, Subtask};
use crate::error::{Error, Result};
use crate::policy::EnsemblePolicy;
use crate::rng::{derive_seed, rng_from_seed};
use crate::workspace::{init_board, opposite_peg, BlockState, Side};

pub const SCHEMA_VERSION: u32 = 1;

/// Counts and timing for one full trial: up to 12 transfers, six out and
/// six back, with one pick retry and dropped blocks abandoned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub method: String,
    pub instrument: String,
    pub seed: u64,
    pub transfers_attempted: usize,
    pub transfers_succeeded: usize,
    pub picks_attempted: usize,
    pub picks_succeeded: usize,
    pub places_attempted: usize,
    pub places_succeeded: usize,
    /// Simulated seconds per successful transfer; 0 when none succeeded.
    pub mean_transfer_time_s: f64,
    /// Correction-phase executions (one per subtask attempt under the
    /// learned method; 0 for open-loop baselines).
    pub correction_subtasks: usize,
    pub mean_correction_steps: f64,
    pub mean_correction_mm: f64,
    pub mean_correction_s: f64,
}

/// Aggregate over one (method, instrument) cell of the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: String,
    pub instrument: String,
    pub trials: usize,
    pub pick_rate: f64,
    pub place_rate: f64,
    pub transfer_rate: f64,
    pub mean_transfer_time_s: f64,
    pub mean_correction_mm: f64,
    pub mean_correction_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ensemble_size: usize,
    pub update_rate_hz: f64,
    pub trials: usize,
    pub transfer_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub schema_version: u32,
    pub config_sha256: String,
    pub cells: Vec<CellSummary>,
    pub ablation: Vec<AblationRow>,
    pub trials: Vec<TrialReport>,
}

/// Drives the excitation sweep through a fresh copy of the instrument and
/// fits its observer. The copy starts slack, matching the play replay
/// convention the observer assumes.
pub fn calibrate(instrument: &InstrumentModel, samples: usize, seed: u64) -> Result<Observer> {
    let mut inst = instrument.clone();
    inst.reset();
    let mut rng = rng_from_seed(seed);
    let commands = excitation_commands(samples);
    let true_poses = commands.iter().map(|&c| inst.command_move(c, &mut rng)).collect();
    fit_observer(&[CalibrationRollout {
        commands,
        true_poses,
    }])
}

/// One full trial: six transfers left to right, then six back. A failed
/// pick is retried once after re-perception; a second failure abandons the
/// block where it rests. A dropped block is out of play, so the return
/// half only attempts blocks that made it across.
pub fn run_trial(
    cfg: &RunConfig,
    instrument: &InstrumentModel,
    method: Method<'_>,
    method_label: &str,
    servo: &ServoConfig,
    seed: u64,
) -> Result<TrialReport> {
    let mut state = init_board(derive_seed(seed, 0), Side::Left);
    let mut inst = instrument.clone();
    inst.reset();
    let mut rng = rng_from_seed(derive_seed(seed, 1));
    let mut log = CommandLog::new();

    let mut report = TrialReport {
        method: method_label.to_string(),
        instrument: instrument.name.clone(),
        seed,
        transfers_attempted: 0,
        transfers_succeeded: 0,
        picks_attempted: 0,
        picks_succeeded: 0,
        places_attempted: 0,
        places_succeeded: 0,
        mean_transfer_time_s: 0.0,
        correction_subtasks: 0,
        mean_correction_steps: 0.0,
        mean_correction_mm: 0.0,
        mean_correction_s: 0.0,
    };
    let mut transfer_time_sum = 0.0;
    let mut corr = (0usize, 0.0f64, 0.0f64); // steps, mm, seconds

    for half in [Side::Left, Side::Right] {
        // Blocks resting on this half's pegs, in block-id order.
        let sources: Vec<(usize, usize)> = state
            .blocks
            .iter()
            .filter_map(|b| match b.state {
                BlockState::OnPeg(p) if half.peg_ids().contains(&p) => Some((b.id, p)),
                _ => None,
            })
            .collect();

        for (_, src_peg) in sources {
            let dst_peg = opposite_peg(src_peg);
            report.transfers_attempted += 1;
            let t0 = state.clock_s;

            let mut picked = false;
            for _attempt in 0..2 {
                report.picks_attempted += 1;
                let r = run_subtask(
                    &mut state,
                    &mut inst,
                    &mut log,
                    &cfg.camera,
                    &cfg.perception,
                    Subtask::Pick,
                    src_peg,
                    method,
                    servo,
                    &cfg.timing,
                    &mut rng,
                )?;
                if matches!(method, Method::Ivs(_)) {
                    report.correction_subtasks += 1;
                    corr.0 += r.correction.steps;
                    corr.1 += r.correction.distance_mm;
                    corr.2 += r.correction.elapsed_s;
                }
                if r.success {
                    report.picks_succeeded += 1;
                    picked = true;
                    break;
                }
            }
            if !picked {
                continue;
            }

            report.places_attempted += 1;
            let r = run_subtask(
                &mut state,
                &mut inst,
                &mut log,
                &cfg.camera,
                &cfg.perception,
                Subtask::Place,
                dst_peg,
                method,
                servo,
                &cfg.timing,
                &mut rng,
            )?;
            if matches!(method, Method::Ivs(_)) {
                report.correction_subtasks += 1;
                corr.0 += r.correction.steps;
                corr.1 += r.correction.distance_mm;
                corr.2 += r.correction.elapsed_s;
            }
            if r.success {
                report.places_succeeded += 1;
                report.transfers_succeeded += 1;
                transfer_time_sum += state.clock_s - t0;
            }
        }
    }

    if report.transfers_succeeded > 0 {
        report.mean_transfer_time_s = transfer_time_sum / report.transfers_succeeded as f64;
    }
    if report.correction_subtasks > 0 {
        let n = report.correction_subtasks as f64;
        report.mean_correction_steps = corr.0 as f64 / n;
        report.mean_correction_mm = corr.1 / n;
        report.mean_correction_s = corr.2 / n;
    }
    Ok(report)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Collapses one cell's trials into rates and weighted means.
fn summarize_cell(trials: &[TrialReport]) -> CellSummary {
    let sum = |f: fn(&TrialReport) -> usize| trials.iter().map(f).sum::<usize>();
    let picks_att = sum(|t| t.picks_attempted);
    let picks_ok = sum(|t| t.picks_succeeded);
    let places_att = sum(|t| t.places_attempted);
    let places_ok = sum(|t| t.places_succeeded);
    let trans_att = sum(|t| t.transfers_attempted);
    let trans_ok = sum(|t| t.transfers_succeeded);
    let corr_n = sum(|t| t.correction_subtasks);

    let weighted = |value: fn(&TrialReport) -> f64, weight: fn(&TrialReport) -> usize| {
        let total: f64 = trials.iter().map(|t| value(t) * weight(t) as f64).sum();
        let n: usize = trials.iter().map(weight).sum();
        if n == 0 {
            0.0
        } else {
            total / n as f64
        }
    };

    CellSummary {
        method: trials[0].method.clone(),
        instrument: trials[0].instrument.clone(),
        trials: trials.len(),
        pick_rate: ratio(picks_ok, picks_att),
        place_rate: ratio(places_ok, places_att),
        transfer_rate: ratio(trans_ok, trans_att),
        mean_transfer_time_s: weighted(|t| t.mean_transfer_time_s, |t| t.transfers_succeeded),
        mean_correction_mm: weighted(|t| t.mean_correction_mm, |t| t.correction_subtasks),
        mean_correction_s: weighted(|t| t.mean_correction_s, |t| t.correction_subtasks),
    }
    .check(corr_n)
}

impl CellSummary {
    fn check(self, _corr_n: usize) -> Self {
        debug_assert!((0.0..=1.0).contains(&self.transfer_rate));
        debug_assert!((0.0..=1.0).contains(&self.pick_rate));
        debug_assert!((0.0..=1.0).contains(&self.place_rate));
        self
    }
}

/// Runs the full method-by-instrument grid: the uncalibrated baseline, the
/// observer baseline fitted on the first configured instrument, and the
/// learned policy trained elsewhere. Trial seeds are shared across cells,
/// so every cell sees the same sequence of board layouts.
pub fn benchmark(cfg: &RunConfig, ensemble: &EnsemblePolicy, seed: u64) -> Result<BenchmarkSummary> {
    cfg.validate()?;
    if ensemble.members.is_empty() {
        return Err(Error::Config("benchmark needs a trained ensemble".to_string()));
    }
    let train_inst = &cfg.instruments[0];
    let observer = calibrate(train_inst, cfg.calibration_samples, derive_seed(seed, 1 << 32))?;
    let cal_label = format!("CAL_{}", train_inst.name);
    let servo = ServoConfig {
        rate_hz: update_rate_hz(ensemble.members.len()),
        max_steps: cfg.servo_max_steps,
    };

    let methods: [(&str, Method<'_>); 3] = [
        ("UNCAL", Method::Uncal),
        (&cal_label, Method::Cal(&observer)),
        ("IVS", Method::Ivs(ensemble)),
    ];

    let mut trials = Vec::new();
    let mut cells = Vec::new();
    for (label, method) in methods {
        for inst in &cfg.instruments {
            let cell: Vec<TrialReport> = (0..cfg.trials)
                .map(|t| run_trial(cfg, inst, method, label, &servo, derive_seed(seed, t as u64)))
                .collect::<Result<_>>()?;
            cells.push(summarize_cell(&cell));
            trials.extend(cell);
        }
    }

    Ok(BenchmarkSummary {
        schema_version: SCHEMA_VERSION,
        config_sha256: cfg.sha256(),
        cells,
        ablation: Vec::new(),
        trials,
    })
}

/// Ensemble-size ablation on the first configured instrument. Slices
/// prefixes of a trained member pool so ensembles nest: the k=1 run uses
/// the first member of the k=8 pool, and so on. Trial seeds are shared
/// across sizes.
pub fn ablate_ensemble(
    cfg: &RunConfig,
    pool: &EnsemblePolicy,
    k_list: &[usize],
    seed: u64,
) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let inst = &cfg.instruments[0];
    k_list
        .iter()
        .map(|&k| {
            if k < 1 || k > pool.members.len() {
                return Err(Error::Config(format!(
                    "ablation size {k} outside the trained pool of {}",
                    pool.members.len()
                )));
            }
            let sliced = EnsemblePolicy {
                hyper: Hyperparameters {
                    ensemble_size: k,
                    // Same effective rule the vote applies: a quorum larger
                    // than the ensemble means every member.
                    vote_quorum: pool.hyper.vote_quorum.min(k),
                    ..pool.hyper
                },
                members: pool.members[..k].to_vec(),
            };
            let servo = ServoConfig {
                rate_hz: update_rate_hz(k),
                max_steps: cfg.servo_max_steps,
            };
            let mut ok = 0;
            let mut att = 0;
            for t in 0..cfg.trials {
                let r = run_trial(
                    cfg,
                    inst,
                    Method::Ivs(&sliced),
                    "IVS",
                    &servo,
                    derive_seed(seed, t as u64),
                )?;
                ok += r.transfers_succeeded;
                att += r.transfers_attempted;
            }
            Ok(AblationRow {
                ensemble_size: k,
                update_rate_hz: update_rate_hz(k),
                trials: cfg.trials,
                transfer_rate: ratio(ok, att),
            })
        })
        .collect()
}

/// Writes the report as pretty JSON with a trailing newline. Key order is
/// struct order and rows keep insertion order, so equal summaries produce
/// identical bytes.
pub fn emit_report(summary: &BenchmarkSummary, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(summary).expect("report serializes");
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<BenchmarkSummary> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actuator::make_instrument;
    use crate::nn::NetSpec;
    use crate::policy::init_ensemble;

    fn perfect_cfg() -> RunConfig {
        RunConfig {
            instruments: vec![InstrumentModel::perfect()],
            trials: 2,
            ..RunConfig::default()
        }
    }

    /// k=1 ensemble with the termination logit pinned and, when asked, the
    /// action output zeroed so corrective steps command no motion.
    fn pinned_ensemble(term_bias: f32, zero_action: bool) -> EnsemblePolicy {
        let mut e = init_ensemble(
            &NetSpec::full(),
            &Hyperparameters {
                ensemble_size: 1,
                vote_quorum: 1,
                ..Hyperparameters::default()
            },
            71,
        );
        for head in &mut e.members[0].heads {
            head.b2[2] = term_bias;
            if zero_action {
                for row in head.w2.chunks_mut(3) {
                    row[0] = 0.0;
                    row[1] = 0.0;
                }
            }
        }
        e
    }

    #[test]
    fn zero_error_uncal_trial_moves_every_block_there_and_back() {
        let cfg = perfect_cfg();
        let servo = ServoConfig::default();
        let r = run_trial(
            &cfg,
            &cfg.instruments[0],
            Method::Uncal,
            "UNCAL",
            &servo,
            99,
        )
        .unwrap();
        assert_eq!(r.transfers_attempted, 12);
        assert_eq!(r.transfers_succeeded, 12);
        assert_eq!(r.picks_attempted, 12);
        assert_eq!(r.picks_succeeded, 12);
        assert_eq!(r.places_succeeded, 12);
        assert_eq!(r.correction_subtasks, 0);
        assert!((r.mean_transfer_time_s - 8.7).abs() < 1e-9);
    }

    #[test]
    fn trials_are_deterministic() {
        let cfg = perfect_cfg();
        let servo = ServoConfig::default();
        let one = run_trial(&cfg, &cfg.instruments[0], Method::Uncal, "UNCAL", &servo, 5).unwrap();
        let two = run_trial(&cfg, &cfg.instruments[0], Method::Uncal, "UNCAL", &servo, 5).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn gross_miscalibration_abandons_blocks_and_shrinks_the_return_half() {
        // 6 mm of pure offset: most grasps close on air and get one retry;
        // a lucky grasp can still land on another part of the block, but
        // its place then misses the clearance and drops, so nothing ever
        // reaches the far side and the return half has no sources.
        let inst = InstrumentModel::custom("offset", [0.0; 2], [1.0; 2], [6.0, 0.0], 0.0);
        let cfg = RunConfig {
            instruments: vec![inst.clone()],
            ..RunConfig::default()
        };
        let r = run_trial(&cfg, &inst, Method::Uncal, "UNCAL", &ServoConfig::default(), 31).unwrap();
        assert_eq!(r.transfers_attempted, 6, "no block reaches the far side");
        assert_eq!(r.transfers_succeeded, 0);
        assert!(r.picks_attempted > 6, "misses are retried");
        assert_eq!(r.places_attempted, r.picks_succeeded);
        assert_eq!(r.places_succeeded, 0, "6 mm is outside placement clearance");
        assert_eq!(r.mean_transfer_time_s, 0.0);
        assert_eq!(r.correction_subtasks, 0);
    }

    #[test]
    fn calibration_recovers_a_stock_instrument() {
        let inst = make_instrument("B").unwrap();
        let obs = calibrate(&inst, 400, 7).unwrap();
        assert!(obs.residual_rms_mm < 0.2, "rms {}", obs.residual_rms_mm);
        for a in 0..2 {
            assert!((obs.deadband_mm[a] - inst.deadband_mm[a]).abs() < 0.3);
            assert!((obs.scale[a] - inst.scale[a]).abs() < 0.02);
            assert!((obs.offset_mm[a] - inst.offset_mm[a]).abs() < 0.3);
        }
    }

    #[test]
    fn correction_time_is_the_only_clock_difference_between_methods() {
        // A zero-action, never-voting policy runs the correction loop for
        // exactly max_steps without moving the tip, so IVS pays the same
        // motion costs as UNCAL plus a known correction time per subtask.
        let ensemble = pinned_ensemble(-50.0, true);
        let cfg = RunConfig {
            instruments: vec![InstrumentModel::perfect()],
            servo_max_steps: 3,
            // Exact perception so neither method ever retries a pick and
            // every transfer carries exactly two correction phases.
            perception: crate::render::PerceptionModel::exact(),
            ..RunConfig::default()
        };
        let servo = ServoConfig {
            rate_hz: update_rate_hz(1),
            max_steps: cfg.servo_max_steps,
        };
        let seed = 12;
        let uncal = run_trial(&cfg, &cfg.instruments[0], Method::Uncal, "UNCAL", &servo, seed).unwrap();
        let ivs = run_trial(
            &cfg,
            &cfg.instruments[0],
            Method::Ivs(&ensemble),
            "IVS",
            &servo,
            seed,
        )
        .unwrap();
        assert_eq!(ivs.transfers_succeeded, 12, "zero-action servoing cannot miss");
        assert_eq!(ivs.mean_correction_steps, 3.0);
        assert_eq!(ivs.mean_correction_mm, 0.0);
        let per_transfer = 2.0 * ivs.mean_correction_s;
        assert!(
            (ivs.mean_transfer_time_s - uncal.mean_transfer_time_s - per_transfer).abs() < 1e-9,
            "transfer time difference {} vs correction {}",
            ivs.mean_transfer_time_s - uncal.mean_transfer_time_s,
            per_transfer
        );
    }

    #[test]
    fn reports_roundtrip_and_rerun_byte_identical() {
        let ensemble = pinned_ensemble(50.0, false);
        let cfg = RunConfig {
            instruments: vec![InstrumentModel::perfect(), make_instrument("A").unwrap()],
            trials: 2,
            ..RunConfig::default()
        };
        let summary = benchmark(&cfg, &ensemble, 3).unwrap();
        assert_eq!(summary.cells.len(), 6);
        assert_eq!(summary.trials.len(), 12);
        assert_eq!(summary.config_sha256, cfg.sha256());

        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        emit_report(&summary, &a).unwrap();
        let again = benchmark(&cfg, &ensemble, 3).unwrap();
        emit_report(&again, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(read_report(&a).unwrap(), summary);
    }

    #[test]
    fn ablation_slices_nest_and_report_the_exact_rate_table() {
        let pool = {
            let mut e = init_ensemble(
                &NetSpec::full(),
                &Hyperparameters {
                    ensemble_size: 2,
                    vote_quorum: 2,
                    ..Hyperparameters::default()
                },
                5,
            );
            for m in &mut e.members {
                for head in &mut m.heads {
                    head.b2[2] = 50.0;
                }
            }
            e
        };
        let cfg = RunConfig {
            instruments: vec![InstrumentModel::perfect()],
            trials: 1,
            ..RunConfig::default()
        };
        let rows = ablate_ensemble(&cfg, &pool, &[1, 2], 9).unwrap();
        assert_eq!(rows[0].update_rate_hz, 15.6);
        assert_eq!(rows[1].update_rate_hz, 12.8);
        // Immediate-stop ensembles leave the open-loop result untouched,
        // and the perfect instrument makes that result perfect.
        assert_eq!(rows[0].transfer_rate, 1.0);
        assert_eq!(rows[1].transfer_rate, 1.0);
        assert!(ablate_ensemble(&cfg, &pool, &[4], 9).is_err());
    }
}
