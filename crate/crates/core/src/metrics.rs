//! Region similarity J, boundary F-measure, and per-sequence evaluation of slot predictions.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::assign::{first_frame_assign, hungarian, CostMatrix};
use crate::data::VideoSequence;
use crate::error::{shape_err, Error, Result};
use crate::model::Mode;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const BOUNDARY_TOLERANCE: f64 = 0.008;

fn same_len(p: &[bool], g: &[bool]) -> Result<()> {
    if p.len() != g.len() {
        return Err(shape_err!("mask sizes differ: {} vs {}", p.len(), g.len()));
    }
    Ok(())
}

/// `|p ∩ g| / |p ∪ g|`, 1 when both are empty.
pub fn region_j(pred: &[bool], gt: &[bool]) -> Result<f64> {
    same_len(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Foreground pixels with a background 4-neighbor or on the image border.
pub fn boundary(mask: &[bool], height: usize, width: usize) -> Vec<bool> {
    let at = |y: usize, x: usize| mask[y * width + x];
    let mut out = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            if !at(y, x) {
                continue;
            }
            out[y * width + x] = y == 0
                || x == 0
                || y + 1 == height
                || x + 1 == width
                || !at(y - 1, x)
                || !at(y + 1, x)
                || !at(y, x - 1)
                || !at(y, x + 1);
        }
    }
    out
}

/// Match radius in pixels for an image of the given size.
pub fn boundary_radius(height: usize, width: usize, tol_ratio: f64) -> usize {
    (tol_ratio * ((height * height + width * width) as f64).sqrt()).ceil() as usize
}

/// Square (Chebyshev) dilation with radius `r`, done as two 1-D passes.
fn dilate(mask: &[bool], height: usize, width: usize, r: usize) -> Vec<bool> {
    let mut rows = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(width - 1);
            rows[y * width + x] = (lo..=hi).any(|xx| mask[y * width + xx]);
        }
    }
    let mut out = vec![false; mask.len()];
    for y in 0..height {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(height - 1);
        for x in 0..width {
            out[y * width + x] = (lo..=hi).any(|yy| rows[yy * width + x]);
        }
    }
    out
}

/// Boundary F-measure with Chebyshev match radius `ceil(tol_ratio · diagonal)`.
pub fn boundary_f(pred: &[bool], gt: &[bool], height: usize, width: usize, tol_ratio: f64) -> Result<f64> {
    same_len(pred, gt)?;
    if pred.len() != height * width {
        return Err(shape_err!("mask of {} pixels is not {height}x{width}", pred.len()));
    }
    let bp = boundary(pred, height, width);
    let bg = boundary(gt, height, width);
    let np = bp.iter().filter(|&&b| b).count();
    let ng = bg.iter().filter(|&&b| b).count();
    match (np, ng) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let r = boundary_radius(height, width, tol_ratio);
    let near_g = dilate(&bg, height, width, r);
    let near_p = dilate(&bp, height, width, r);
    let hit_p = bp.iter().zip(&near_g).filter(|(&b, &n)| b && n).count();
    let hit_g = bg.iter().zip(&near_p).filter(|(&b, &n)| b && n).count();
    let precision = hit_p as f64 / np as f64;
    let recall = hit_g as f64 / ng as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// Exclusive binarization: each pixel goes to the highest-scoring slot whose score
/// reaches `threshold` (ties to the lower slot), otherwise to background.
pub fn binarize_exclusive(slots: &[Vec<f32>], threshold: f64) -> Vec<Vec<bool>> {
    let pixels = slots.first().map_or(0, Vec::len);
    let mut out = vec![vec![false; pixels]; slots.len()];
    for p in 0..pixels {
        let mut best: Option<(usize, f32)> = None;
        for (n, s) in slots.iter().enumerate() {
            let v = s[p];
            if f64::from(v) >= threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((n, v));
            }
        }
        if let Some((n, _)) = best {
            out[n][p] = true;
        }
    }
    out
}

/// Per-pixel instance map: slot `n` becomes ID `n + 1`.
pub fn id_map(slots: &[Vec<f32>], threshold: f64) -> Vec<u8> {
    let bin = binarize_exclusive(slots, threshold);
    let pixels = slots.first().map_or(0, Vec::len);
    (0..pixels)
        .map(|p| bin.iter().position(|b| b[p]).map_or(0, |n| (n + 1) as u8))
        .collect()
}

/// How ground-truth objects are tied to prediction slots during scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binding {
    /// Object `m` is slot `m` (one-shot inputs are bound in annotation order).
    AnnotationOrder,
    /// Zero-shot protocol: match once at each object's first frame.
    FirstFrame,
    /// Re-match at every frame; an upper bound that ignores identity consistency.
    PerFrameOptimal,
}

impl Binding {
    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::OneShot => Binding::AnnotationOrder,
            Mode::ZeroShot => Binding::FirstFrame,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectScore {
    pub sequence: String,
    /// 1-based ID as stored in the masks.
    pub object: usize,
    pub slot: Option<usize>,
    pub j: f64,
    pub f: f64,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub sequence: String,
    pub j: f64,
    pub f: f64,
    pub objects: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusScore {
    pub j: f64,
    pub f: f64,
    pub objects: usize,
    pub sequences: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Mode,
    pub binding: Binding,
    pub objects: Vec<ObjectScore>,
    pub sequences: Vec<SequenceScore>,
    pub corpus: CorpusScore,
    /// Sequences without predictions; their objects are scored 0.
    pub missing: Vec<String>,
    /// `(sequence, object)` pairs that received no slot; scored 0.
    pub unassigned: Vec<(String, usize)>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn gt_masks(seq: &VideoSequence, t: usize) -> Vec<Vec<bool>> {
    (0..seq.num_objects)
        .map(|m| seq.masks[t].iter().map(|&v| usize::from(v) == m + 1).collect())
        .collect()
}

fn as_f64(masks: &[Vec<bool>]) -> Vec<Vec<f64>> {
    masks
        .iter()
        .map(|m| m.iter().map(|&b| f64::from(u8::from(b))).collect())
        .collect()
}

/// Scores one sequence. `preds[t][slot]` holds soft masks in `[0, 1]` at the
/// annotation resolution.
pub fn evaluate_sequence(
    preds: &[Vec<Vec<f32>>],
    seq: &VideoSequence,
    binding: Binding,
    threshold: f64,
) -> Result<(Vec<ObjectScore>, Vec<usize>)> {
    let hw = seq.height * seq.width;
    if preds.len() != seq.len() {
        return Err(shape_err!(
            "{}: {} predicted frames for {} annotated",
            seq.id,
            preds.len(),
            seq.len()
        ));
    }
    let slots = preds.first().map_or(0, Vec::len);
    if preds
        .iter()
        .any(|f| f.len() != slots || f.iter().any(|m| m.len() != hw))
    {
        return Err(shape_err!(
            "{}: predictions do not match {}x{} with a fixed slot count",
            seq.id,
            seq.height,
            seq.width
        ));
    }
    let bins: Vec<Vec<Vec<bool>>> = preds.iter().map(|f| binarize_exclusive(f, threshold)).collect();
    let gts: Vec<Vec<Vec<bool>>> = (0..seq.len()).map(|t| gt_masks(seq, t)).collect();
    let m = seq.num_objects;

    // per_frame[t][obj] = slot used at frame t
    let per_frame: Vec<Vec<Option<usize>>> = match binding {
        Binding::AnnotationOrder => {
            let fixed: Vec<Option<usize>> = (0..m).map(|o| (o < slots).then_some(o)).collect();
            vec![fixed; seq.len()]
        }
        Binding::FirstFrame => {
            let pf: Vec<Vec<Vec<f64>>> = bins.iter().map(|f| as_f64(f)).collect();
            let gf: Vec<Vec<Vec<f64>>> = gts.iter().map(|f| as_f64(f)).collect();
            let fixed = first_frame_assign(&pf, &gf, &seq.first_appearance)?;
            vec![fixed; seq.len()]
        }
        Binding::PerFrameOptimal => {
            let mut out = Vec::with_capacity(seq.len());
            for t in 0..seq.len() {
                let present: Vec<usize> = (0..m).filter(|&o| seq.first_appearance[o] <= t).collect();
                let mut row = vec![None; m];
                let k = present.len().min(slots);
                if k > 0 {
                    let mut data = Vec::with_capacity(k * slots);
                    for &o in &present[..k] {
                        for s in 0..slots {
                            data.push(1.0 - region_j(&bins[t][s], &gts[t][o])?);
                        }
                    }
                    let a = hungarian(&CostMatrix::new(k, slots, data)?)?;
                    for (&o, &s) in present[..k].iter().zip(&a.slots) {
                        row[o] = Some(s);
                    }
                }
                out.push(row);
            }
            out
        }
    };

    let mut scores = Vec::with_capacity(m);
    let mut unassigned = Vec::new();
    for o in 0..m {
        let frames: Vec<usize> = (seq.first_appearance[o]..seq.len()).collect();
        let bound_slot = per_frame.get(seq.first_appearance[o]).and_then(|r| r[o]);
        if bound_slot.is_none() {
            unassigned.push(o + 1);
        }
        let (mut js, mut fs) = (Vec::new(), Vec::new());
        for &t in &frames {
            match per_frame[t][o] {
                Some(s) => {
                    js.push(region_j(&bins[t][s], &gts[t][o])?);
                    fs.push(boundary_f(
                        &bins[t][s],
                        &gts[t][o],
                        seq.height,
                        seq.width,
                        BOUNDARY_TOLERANCE,
                    )?);
                }
                None => {
                    js.push(0.0);
                    fs.push(0.0);
                }
            }
        }
        scores.push(ObjectScore {
            sequence: seq.id.clone(),
            object: o + 1,
            slot: bound_slot,
            j: mean(js.into_iter()),
            f: mean(fs.into_iter()),
            frames: frames.len(),
        });
    }
    Ok((scores, unassigned))
}

/// Scores a corpus. `preds[i]` belongs to `seqs[i]`; `None` marks a missing sequence.
pub fn evaluate(
    preds: &[Option<Vec<Vec<Vec<f32>>>>],
    seqs: &[VideoSequence],
    mode: Mode,
    binding: Binding,
    threshold: f64,
) -> Result<EvalReport> {
    if preds.len() != seqs.len() {
        return Err(Error::Contract("one prediction entry per sequence is required".into()));
    }
    let mut objects = Vec::new();
    let mut sequences = Vec::new();
    let mut missing = Vec::new();
    let mut unassigned = Vec::new();
    for (pred, seq) in preds.iter().zip(seqs) {
        let scores = match pred {
            Some(p) => {
                let (scores, lost) = evaluate_sequence(p, seq, binding, threshold)?;
                unassigned.extend(lost.into_iter().map(|o| (seq.id.clone(), o)));
                scores
            }
            None => {
                missing.push(seq.id.clone());
                (0..seq.num_objects)
                    .map(|o| ObjectScore {
                        sequence: seq.id.clone(),
                        object: o + 1,
                        slot: None,
                        j: 0.0,
                        f: 0.0,
                        frames: seq.len() - seq.first_appearance[o].min(seq.len()),
                    })
                    .collect()
            }
        };
        sequences.push(SequenceScore {
            sequence: seq.id.clone(),
            j: mean(scores.iter().map(|s| s.j)),
            f: mean(scores.iter().map(|s| s.f)),
            objects: scores.len(),
            frames: seq.len(),
        });
        objects.extend(scores);
    }
    let corpus = CorpusScore {
        j: mean(objects.iter().map(|s| s.j)),
        f: mean(objects.iter().map(|s| s.f)),
        objects: objects.len(),
        sequences: sequences.len(),
        frames: seqs.iter().map(VideoSequence::len).sum(),
    };
    Ok(EvalReport {
        mode,
        binding,
        objects,
        sequences,
        corpus,
        missing,
        unassigned,
    })
}

impl EvalReport {
    /// One row per (sequence, object).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sequence,object,slot,j,f,frames\n");
        for o in &self.objects {
            let slot = o.slot.map_or(String::new(), |s| s.to_string());
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{}",
                o.sequence, o.object, slot, o.j, o.f, o.frames
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sequence, GenConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square(h: usize, w: usize, y0: usize, x0: usize, size: usize) -> Vec<bool> {
        let mut m = vec![false; h * w];
        for y in y0..(y0 + size).min(h) {
            for x in x0..(x0 + size).min(w) {
                m[y * w + x] = true;
            }
        }
        m
    }

    /// Pairwise boundary matching with Chebyshev distance.
    fn boundary_f_oracle(pred: &[bool], gt: &[bool], h: usize, w: usize) -> f64 {
        let pts = |m: &[bool]| -> Vec<(isize, isize)> {
            boundary(m, h, w)
                .iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(i, _)| ((i / w) as isize, (i % w) as isize))
                .collect()
        };
        let (bp, bg) = (pts(pred), pts(gt));
        if bp.is_empty() && bg.is_empty() {
            return 1.0;
        }
        if bp.is_empty() || bg.is_empty() {
            return 0.0;
        }
        let r = boundary_radius(h, w, BOUNDARY_TOLERANCE) as isize;
        let matched = |a: &[(isize, isize)], b: &[(isize, isize)]| {
            a.iter()
                .filter(|p| b.iter().any(|q| (p.0 - q.0).abs().max((p.1 - q.1).abs()) <= r))
                .count() as f64
                / a.len() as f64
        };
        let (p, rc) = (matched(&bp, &bg), matched(&bg, &bp));
        if p + rc == 0.0 {
            0.0
        } else {
            2.0 * p * rc / (p + rc)
        }
    }

    #[test]
    fn region_j_examples() {
        let a = square(30, 30, 0, 0, 10);
        assert_eq!(region_j(&a, &a).unwrap(), 1.0);
        assert_eq!(region_j(&a, &square(30, 30, 15, 15, 10)).unwrap(), 0.0);
        // 10×10 squares offset by 5 rows share a 5×10 strip
        let j = region_j(&a, &square(30, 30, 5, 0, 10)).unwrap();
        assert_eq!(j, 50.0 / 150.0);
        assert_eq!(region_j(&[false; 4], &[false; 4]).unwrap(), 1.0);
        assert!(region_j(&[false; 4], &[false; 3]).is_err());
    }

    #[test]
    fn boundary_f_examples() {
        let (h, w) = (64, 112);
        assert_eq!(boundary_radius(h, w, BOUNDARY_TOLERANCE), 2);
        let a = square(h, w, 20, 30, 20);
        assert_eq!(boundary_f(&a, &a, h, w, BOUNDARY_TOLERANCE).unwrap(), 1.0);
        assert_eq!(
            boundary_f(&vec![false; h * w], &a, h, w, BOUNDARY_TOLERANCE).unwrap(),
            0.0
        );
        let shifted1 = square(h, w, 20, 31, 20);
        assert_eq!(boundary_f(&shifted1, &a, h, w, BOUNDARY_TOLERANCE).unwrap(), 1.0);
        let shifted5 = square(h, w, 20, 35, 20);
        let f5 = boundary_f(&shifted5, &a, h, w, BOUNDARY_TOLERANCE).unwrap();
        assert!(f5 < 1.0);
        assert_eq!(f5, boundary_f_oracle(&shifted5, &a, h, w));
    }

    #[test]
    fn boundary_f_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..60 {
            let (h, w) = (rng.gen_range(1..=32), rng.gen_range(1..=32));
            let density = rng.gen_range(0.0..1.0);
            let mut gen = || (0..h * w).map(|_| rng.gen_bool(density)).collect::<Vec<bool>>();
            let (p, g) = (gen(), gen());
            assert_eq!(
                boundary_f(&p, &g, h, w, BOUNDARY_TOLERANCE).unwrap(),
                boundary_f_oracle(&p, &g, h, w)
            );
        }
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_symmetric(bits_p in prop::collection::vec(any::<bool>(), 48),
                                         bits_g in prop::collection::vec(any::<bool>(), 48)) {
            let j = region_j(&bits_p, &bits_g).unwrap();
            let f = boundary_f(&bits_p, &bits_g, 6, 8, BOUNDARY_TOLERANCE).unwrap();
            prop_assert!((0.0..=1.0).contains(&j) && (0.0..=1.0).contains(&f));
            prop_assert_eq!(j, region_j(&bits_g, &bits_p).unwrap());
            prop_assert_eq!(f, boundary_f(&bits_g, &bits_p, 6, 8, BOUNDARY_TOLERANCE).unwrap());
            prop_assert_eq!(region_j(&bits_p, &bits_p).unwrap(), 1.0);
            prop_assert_eq!(boundary_f(&bits_p, &bits_p, 6, 8, BOUNDARY_TOLERANCE).unwrap(), 1.0);
        }
    }

    fn seq() -> VideoSequence {
        let cfg = GenConfig {
            height: 16,
            width: 32,
            frames: 6,
            min_objects: 3,
            max_objects: 3,
            entry_exit_prob: 0.5,
            ..GenConfig::default()
        };
        generate_sequence(&cfg, 21, "s").unwrap()
    }

    /// One-hot predictions with object `m` in slot `perm[m]`.
    fn perfect(seq: &VideoSequence, slots: usize, perm: &[usize]) -> Vec<Vec<Vec<f32>>> {
        (0..seq.len())
            .map(|t| {
                let mut f = vec![vec![0.0f32; seq.height * seq.width]; slots];
                for (p, &v) in seq.masks[t].iter().enumerate() {
                    if v > 0 {
                        f[perm[usize::from(v) - 1]][p] = 1.0;
                    }
                }
                f
            })
            .collect()
    }

    #[test]
    fn perfect_predictions_score_one() {
        let s = seq();
        for (binding, perm) in [
            (Binding::AnnotationOrder, vec![0, 1, 2]),
            (Binding::FirstFrame, vec![4, 0, 2]),
        ] {
            let preds = perfect(&s, 5, &perm);
            let r = evaluate(
                &[Some(preds)],
                std::slice::from_ref(&s),
                Mode::ZeroShot,
                binding,
                DEFAULT_THRESHOLD,
            )
            .unwrap();
            assert_eq!(r.corpus.j, 1.0);
            assert_eq!(r.corpus.f, 1.0);
        }
    }

    #[test]
    fn zeroshot_report_ignores_slot_permutation() {
        let s = seq();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noisy: Vec<Vec<Vec<f32>>> = perfect(&s, 4, &[0, 1, 2])
            .into_iter()
            .map(|f| {
                f.into_iter()
                    .map(|m| {
                        m.into_iter()
                            .map(|v| (v * 0.7 + rng.gen_range(0.0..0.4)).min(1.0))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let base = evaluate(
            &[Some(noisy.clone())],
            std::slice::from_ref(&s),
            Mode::ZeroShot,
            Binding::FirstFrame,
            0.5,
        )
        .unwrap();
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<Vec<Vec<f32>>> = noisy
            .iter()
            .map(|f| {
                let mut out = vec![Vec::new(); 4];
                for (n, m) in f.iter().enumerate() {
                    out[perm[n]] = m.clone();
                }
                out
            })
            .collect();
        let other = evaluate(&[Some(permuted)], &[s], Mode::ZeroShot, Binding::FirstFrame, 0.5).unwrap();
        assert_eq!(base.corpus, other.corpus);
        let js = |r: &EvalReport| r.objects.iter().map(|o| (o.j, o.f)).collect::<Vec<_>>();
        assert_eq!(js(&base), js(&other));
    }

    #[test]
    fn absent_object_with_empty_prediction_scores_one() {
        let s = seq();
        let exited = (0..s.num_objects).find(|&m| (s.first_appearance[m]..s.len()).any(|t| s.area(t, m) == 0));
        let preds = perfect(&s, 3, &[0, 1, 2]);
        let r = evaluate(
            &[Some(preds)],
            std::slice::from_ref(&s),
            Mode::OneShot,
            Binding::AnnotationOrder,
            0.5,
        )
        .unwrap();
        if let Some(m) = exited {
            assert_eq!(r.objects[m].j, 1.0);
        }
        assert_eq!(r.corpus.j, 1.0);
    }

    #[test]
    fn missing_and_unassigned_are_reported() {
        let s = seq();
        let r = evaluate(
            &[None],
            std::slice::from_ref(&s),
            Mode::ZeroShot,
            Binding::FirstFrame,
            0.5,
        )
        .unwrap();
        assert_eq!(r.missing, vec![s.id.clone()]);
        assert_eq!(r.corpus.j, 0.0);
        let preds = perfect(&s, 2, &[0, 1, 1]);
        let r = evaluate(
            &[Some(preds)],
            std::slice::from_ref(&s),
            Mode::ZeroShot,
            Binding::FirstFrame,
            0.5,
        )
        .unwrap();
        assert_eq!(r.unassigned.len(), 1);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + s.num_objects);
    }

    #[test]
    fn per_frame_optimal_is_an_upper_bound() {
        let s = seq();
        let mut preds = perfect(&s, 3, &[0, 1, 2]);
        // swap two slots halfway through: identity is lost but each frame is still perfect
        for f in preds.iter_mut().skip(3) {
            f.swap(0, 1);
        }
        let ff = evaluate(
            &[Some(preds.clone())],
            std::slice::from_ref(&s),
            Mode::ZeroShot,
            Binding::FirstFrame,
            0.5,
        )
        .unwrap();
        let opt = evaluate(&[Some(preds)], &[s], Mode::ZeroShot, Binding::PerFrameOptimal, 0.5).unwrap();
        assert_eq!(opt.corpus.j, 1.0);
        assert!(ff.corpus.j <= opt.corpus.j);
    }

    #[test]
    fn exclusive_binarization() {
        let slots = vec![vec![0.6f32, 0.2, 0.7], vec![0.8, 0.4, 0.7]];
        let b = binarize_exclusive(&slots, 0.5);
        assert_eq!(b, vec![vec![false, false, true], vec![true, false, false]]);
        assert_eq!(id_map(&slots, 0.5), vec![2, 0, 1]);
    }
}
