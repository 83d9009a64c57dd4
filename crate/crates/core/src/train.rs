//! Two-phase training over short clips, and whole-video inference.
//!
//! Phase 1 feeds ground-truth previous masks, phase 2 the model's own soft
//! outputs. Each clip starts from a zero temporal state and gradients stop at
//! clip boundaries; inference carries the state through the whole video.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::assign::{training_loss, LossOptions};
use crate::autograd::Tape;
use crate::checkpoint::{param_hash, Checkpoint};
use crate::config::RunConfig;
use crate::data::VideoSequence;
use crate::error::{Error, Result};
use crate::metrics::{binarize_exclusive, evaluate, region_j, Binding, EvalReport, DEFAULT_THRESHOLD};
use crate::model::{CarriedState, DecoderState, GivenMask, MaskFeed, Mode, Rvos};
use crate::nn::Adam;
use crate::tensor::Tensor;

/// Learning rate of the original recipe, logged next to the one in use.
pub const REFERENCE_LR: f64 = 1e-6;

/// Worker threads from `RVOS_THREADS` (default 1).
pub fn thread_count() -> usize {
    std::env::var("RVOS_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Phase {
    /// Ground-truth previous masks.
    Teacher = 1,
    /// The model's own previous masks.
    Inferred = 2,
}

/// Per-clip result: loss, parameter gradients, and the mean J of assigned pairs.
#[derive(Debug, Clone)]
pub struct ClipResult {
    pub loss: f64,
    pub grads: Vec<Vec<f32>>,
    pub train_j: f64,
}

fn to_flat(tape: &Tape<f32>, v: crate::autograd::Var) -> Vec<f32> {
    tape.data(v).to_vec()
}

/// Forward and backward pass on frames `start..start + len` of `seq`.
///
/// One-shot clips bind object `m` to slot `m`. Objects already present before the
/// clip start enter through the initial previous masks (their ground truth at
/// `start − 1`); objects appearing inside the clip are given at their first frame.
pub fn clip_step(
    model: &Rvos<f32>,
    cfg: &RunConfig,
    seq: &VideoSequence,
    start: usize,
    len: usize,
    phase: Phase,
) -> Result<ClipResult> {
    let slots = model.config().slots;
    let frames: Vec<Tensor<f32>> = (start..start + len).map(|t| seq.frame_tensor(t)).collect();
    let objects = match cfg.mode {
        Mode::OneShot => seq.num_objects.min(slots),
        Mode::ZeroShot => {
            if seq.num_objects > slots {
                return Err(Error::Config(format!(
                    "{}: {} objects exceed {slots} slots",
                    seq.id, seq.num_objects
                )));
            }
            seq.num_objects
        }
    };

    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape);
    let mut state = DecoderState::new(&mut tape, model.config())?;
    let mut given = Vec::new();
    let mut teacher = Vec::new();
    if cfg.mode == Mode::OneShot {
        for m in 0..objects {
            let first = seq.first_appearance[m];
            if first < start {
                let prev = tape.constant(seq.object_mask(start - 1, m));
                state.set_prev_mask(m, prev);
            } else if first < start + len {
                given.push(GivenMask {
                    slot: m,
                    frame: first - start,
                    mask: seq.object_mask(first, m),
                });
            }
        }
        if phase == Phase::Teacher {
            let hw = [1, seq.height, seq.width];
            teacher = (start..start + len)
                .map(|t| {
                    (0..slots)
                        .map(|s| {
                            if s < objects {
                                seq.object_mask(t, s)
                            } else {
                                Tensor::zeros(&hw).expect("valid")
                            }
                        })
                        .collect()
                })
                .collect::<Vec<Vec<Tensor<f32>>>>();
        }
    }
    let feed = if teacher.is_empty() {
        MaskFeed::Inferred
    } else {
        MaskFeed::Teacher(&teacher)
    };
    let preds = model.forward_clip(&mut tape, &p, &frames, cfg.mode, &given, feed, &mut state)?;
    let gts: Vec<Vec<_>> = (start..start + len)
        .map(|t| (0..objects).map(|m| tape.constant(seq.object_mask(t, m))).collect())
        .collect();
    let opts = LossOptions {
        mode: cfg.mode,
        first_frame_only: cfg.first_frame_only,
    };
    let (loss, assignment) = training_loss(&mut tape, &preds, &gts, opts)?;

    let mut js = Vec::new();
    for (pf, gf) in preds.iter().zip(&gts) {
        let soft: Vec<Vec<f32>> = pf.iter().map(|&v| to_flat(&tape, v)).collect();
        let bin = binarize_exclusive(&soft, DEFAULT_THRESHOLD);
        for (m, &s) in assignment.slots.iter().enumerate() {
            let g: Vec<bool> = tape.data(gf[m]).iter().map(|&v| v > 0.5).collect();
            js.push(region_j(&bin[s], &g)?);
        }
    }
    let loss_value = f64::from(tape.data(loss)[0]);
    tape.backward(loss)?;
    let grads = model.params().collect_grads(&mut tape, &p);
    Ok(ClipResult {
        loss: loss_value,
        grads,
        train_j: if js.is_empty() {
            1.0
        } else {
            js.iter().sum::<f64>() / js.len() as f64
        },
    })
}

/// Soft masks `[t][slot][pixel]` for a whole video, state carried across all frames.
///
/// In one-shot mode object `m` (for `m < N`) is given to slot `m` at its first frame.
pub fn infer_sequence(model: &Rvos<f32>, seq: &VideoSequence, mode: Mode) -> Result<Vec<Vec<Vec<f32>>>> {
    let cfg = model.config();
    if [seq.height, seq.width] != cfg.input_size {
        return Err(Error::Config(format!(
            "{}: {}x{} frames, model expects {}x{}",
            seq.id,
            seq.height,
            seq.width,
            cfg.height(),
            cfg.width()
        )));
    }
    let mut carried: Option<CarriedState<f32>> = None;
    let mut out = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        let mut tape = Tape::new();
        let p = model.params().bind_frozen(&mut tape);
        let mut state = match &carried {
            Some(c) => c.attach(&mut tape),
            None => DecoderState::new(&mut tape, cfg)?,
        };
        let given: Vec<GivenMask<f32>> = match mode {
            Mode::OneShot => (0..seq.num_objects.min(cfg.slots))
                .filter(|&m| seq.first_appearance[m] == t)
                .map(|m| GivenMask {
                    slot: m,
                    frame: 0,
                    mask: seq.object_mask(t, m),
                })
                .collect(),
            Mode::ZeroShot => Vec::new(),
        };
        let frame = [seq.frame_tensor(t)];
        let masks = model.forward_clip(&mut tape, &p, &frame, mode, &given, MaskFeed::Inferred, &mut state)?;
        out.push(masks[0].iter().map(|&v| to_flat(&tape, v)).collect());
        carried = Some(state.detach(&tape));
    }
    Ok(out)
}

/// Infers and scores every sequence with the mode's standard binding.
pub fn validate(model: &Rvos<f32>, seqs: &[VideoSequence], mode: Mode) -> Result<EvalReport> {
    evaluate_with(model, seqs, mode, Binding::for_mode(mode))
}

pub fn evaluate_with(model: &Rvos<f32>, seqs: &[VideoSequence], mode: Mode, binding: Binding) -> Result<EvalReport> {
    let preds = seqs
        .iter()
        .map(|s| infer_sequence(model, s, mode).map(Some))
        .collect::<Result<Vec<_>>>()?;
    evaluate(&preds, seqs, mode, binding, DEFAULT_THRESHOLD)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub steps: u64,
    pub mean_loss: f64,
    pub mean_train_j: f64,
    pub val_j: Option<f64>,
}

/// Everything a training run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Rvos<f32>,
    pub adam: Adam<f32>,
    pub epochs: Vec<EpochRecord>,
    /// Loss of every optimizer step, averaged over the batch.
    pub step_losses: Vec<f64>,
    pub phase1_val_j: Option<f64>,
    pub final_val_j: Option<f64>,
    pub best_val_j: Option<f64>,
    pub phase1_hash: String,
    pub phase2_start_hash: Option<String>,
}

fn log_line(log: &mut dyn Write, value: serde_json::Value) -> Result<()> {
    writeln!(log, "{value}").map_err(|e| Error::io("training log", e))
}

fn epoch_seed(seed: u64, phase: Phase, epoch: usize) -> u64 {
    seed ^ ((phase as u64) << 56) ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains from a fresh model seeded with `cfg.seed`. Checkpoints go under `out`
/// (`phase1/`, `phase2/`, `best/`) when it is given.
pub fn train(
    cfg: &RunConfig,
    train_seqs: &[VideoSequence],
    val_seqs: &[VideoSequence],
    out: Option<&Path>,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    let model = Rvos::<f32>::new(cfg.model.clone(), cfg.seed)?;
    train_from(cfg, model, train_seqs, val_seqs, out, log)
}

pub fn train_from(
    cfg: &RunConfig,
    mut model: Rvos<f32>,
    train_seqs: &[VideoSequence],
    val_seqs: &[VideoSequence],
    out: Option<&Path>,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_seqs.is_empty() {
        return Err(Error::Config("no training sequences".into()));
    }
    for s in train_seqs.iter().chain(val_seqs) {
        if [s.height, s.width] != cfg.model.input_size {
            return Err(Error::Config(format!("{}: resolution does not match the model", s.id)));
        }
        if s.len() < cfg.clip_len {
            return Err(Error::Config(format!(
                "{}: {} frames, clip_len is {}",
                s.id,
                s.len(),
                cfg.clip_len
            )));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut adam = Adam::new(cfg.optimizer, model.params());
    log_line(
        log,
        json!({"event": "start", "lr": cfg.optimizer.lr, "reference_lr": REFERENCE_LR, "seed": cfg.seed,
               "train_sequences": train_seqs.len(), "val_sequences": val_seqs.len(),
               "parameters": model.params().numel(), "threads": thread_count()}),
    )?;

    let mut epochs = Vec::new();
    let mut step_losses = Vec::new();
    let mut best: Option<f64> = None;
    let mut phase1_val_j = None;
    let mut last_val = None;
    let mut phase1_hash = param_hash(model.params());
    let mut phase2_start_hash = None;
    let batch = cfg.batch_clips;
    let budget_left = |steps: u64| cfg.max_steps.is_none_or(|m| steps < m);

    for (phase, count) in [
        (Phase::Teacher, cfg.epochs_phase1),
        (Phase::Inferred, cfg.epochs_phase2),
    ] {
        if count == 0 {
            continue;
        }
        if phase == Phase::Inferred && cfg.reset_moments {
            adam.reset_moments();
        }
        let start_hash = param_hash(model.params());
        if phase == Phase::Inferred {
            phase2_start_hash = Some(start_hash.clone());
        }
        log_line(
            log,
            json!({"event": "phase_start", "phase": phase as u8, "param_hash": start_hash}),
        )?;
        for epoch in 0..count {
            if !budget_left(adam.step) {
                break;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, phase, epoch));
            let mut order: Vec<usize> = (0..train_seqs.len()).collect();
            order.shuffle(&mut rng);
            let clips: Vec<(usize, usize)> = order
                .into_iter()
                .map(|i| (i, rng.gen_range(0..=train_seqs[i].len() - cfg.clip_len)))
                .collect();
            let (mut loss_sum, mut j_sum, mut n_clips) = (0.0, 0.0, 0usize);
            for chunk in clips.chunks(batch) {
                if !budget_left(adam.step) {
                    break;
                }
                let results = pool.install(|| {
                    chunk
                        .par_iter()
                        .map(|&(i, s)| clip_step(&model, cfg, &train_seqs[i], s, cfg.clip_len, phase))
                        .collect::<Vec<_>>()
                });
                let results = results.into_iter().collect::<Result<Vec<_>>>()?;
                let mut grads = results[0].grads.clone();
                for r in &results[1..] {
                    for (acc, g) in grads.iter_mut().zip(&r.grads) {
                        acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                    }
                }
                let scale = 1.0 / results.len() as f32;
                grads.iter_mut().flatten().for_each(|g| *g *= scale);
                adam.update(model.params_mut(), &grads)?;
                let batch_loss = results.iter().map(|r| r.loss).sum::<f64>() / results.len() as f64;
                step_losses.push(batch_loss);
                loss_sum += results.iter().map(|r| r.loss).sum::<f64>();
                j_sum += results.iter().map(|r| r.train_j).sum::<f64>();
                n_clips += results.len();
            }
            if n_clips == 0 {
                break;
            }
            let last_epoch = epoch + 1 == count || !budget_left(adam.step);
            let due = cfg.val_every > 0 && (epoch + 1) % cfg.val_every == 0;
            let val_j = if !val_seqs.is_empty() && (due || last_epoch) {
                Some(validate(&model, val_seqs, cfg.mode)?.corpus.j)
            } else {
                None
            };
            let record = EpochRecord {
                phase,
                epoch,
                steps: adam.step,
                mean_loss: loss_sum / n_clips as f64,
                mean_train_j: j_sum / n_clips as f64,
                val_j,
            };
            log_line(
                log,
                json!({"event": "epoch", "phase": phase as u8, "epoch": epoch, "steps": record.steps,
                       "mean_loss": record.mean_loss, "mean_train_j": record.mean_train_j, "val_j": val_j}),
            )?;
            epochs.push(record);
            if let Some(v) = val_j {
                last_val = Some(v);
                if best.is_none_or(|b| v > b) {
                    best = Some(v);
                    if let Some(dir) = out {
                        Checkpoint::new(cfg.clone(), &model, &adam).save(&dir.join("best"))?;
                    }
                    log_line(
                        log,
                        json!({"event": "best", "phase": phase as u8, "epoch": epoch, "val_j": v}),
                    )?;
                }
            }
        }
        let end_hash = param_hash(model.params());
        if phase == Phase::Teacher {
            phase1_hash = end_hash.clone();
            phase1_val_j = last_val;
        }
        if let Some(dir) = out {
            let name = if phase == Phase::Teacher { "phase1" } else { "phase2" };
            Checkpoint::new(cfg.clone(), &model, &adam).save(&dir.join(name))?;
        }
        log_line(
            log,
            json!({"event": "phase_end", "phase": phase as u8, "steps": adam.step, "param_hash": end_hash}),
        )?;
    }
    Ok(TrainOutcome {
        model,
        adam,
        epochs,
        step_losses,
        phase1_val_j,
        final_val_j: last_val,
        best_val_j: best,
        phase1_hash,
        phase2_start_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, GenConfig};
    use crate::model::{ModelConfig, Variant};

    fn tiny_cfg(mode: Mode) -> RunConfig {
        RunConfig {
            model: ModelConfig {
                variant: Variant::ST,
                slots: 3,
                blocks: 2,
                base_channels: 4,
                hidden_channels: vec![4, 4],
                use_prev_mask: mode == Mode::OneShot,
                input_size: [16, 16],
                lstm_kernel: 3,
            },
            mode,
            batch_clips: 2,
            clip_len: 3,
            epochs_phase1: 2,
            epochs_phase2: 1,
            seed: 5,
            val_every: 1,
            ..RunConfig::default()
        }
    }

    fn data() -> Vec<VideoSequence> {
        let g = GenConfig {
            height: 16,
            width: 16,
            frames: 4,
            max_objects: 3,
            ..GenConfig::default()
        };
        generate_corpus(&g, 3, 1).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_phases_chain() {
        let seqs = data();
        for mode in [Mode::ZeroShot, Mode::OneShot] {
            let cfg = tiny_cfg(mode);
            let mut log_a = Vec::new();
            let a = train(&cfg, &seqs[..2], &seqs[2..], None, &mut log_a).unwrap();
            let mut log_b = Vec::new();
            let b = train(&cfg, &seqs[..2], &seqs[2..], None, &mut log_b).unwrap();
            assert_eq!(log_a, log_b);
            assert_eq!(a.model.params(), b.model.params());
            assert_eq!(a.step_losses.len(), 3);
            assert_eq!(a.phase2_start_hash.as_deref(), Some(a.phase1_hash.as_str()));
            assert!(a.step_losses.iter().all(|l| l.is_finite() && (0.0..=1.0).contains(l)));
        }
    }

    #[test]
    fn max_steps_caps_training() {
        let seqs = data();
        let cfg = RunConfig {
            max_steps: Some(2),
            ..tiny_cfg(Mode::ZeroShot)
        };
        let out = train(&cfg, &seqs, &[], None, &mut Vec::new()).unwrap();
        assert_eq!(out.adam.step, 2);
    }

    #[test]
    fn oneshot_inference_reports_given_masks() {
        let seqs = data();
        let cfg = tiny_cfg(Mode::OneShot);
        let model = Rvos::<f32>::new(cfg.model.clone(), 1).unwrap();
        let preds = infer_sequence(&model, &seqs[0], Mode::OneShot).unwrap();
        assert_eq!(preds.len(), seqs[0].len());
        let m = 0;
        let t = seqs[0].first_appearance[m];
        assert_eq!(preds[t][m], seqs[0].object_mask::<f32>(t, m).data());
    }
}
