//! Soft-IoU matching between ground-truth objects and prediction slots, and the
//! clip training loss built on it.
//!
//! Costs are `1 - softIoU`. Among equally optimal assignments the lexicographically
//! smallest slot vector wins, both in [`hungarian`] and in the exhaustive
//! [`brute_force_assign`] oracle.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::model::Mode;
use crate::tensor::Element;

pub const SOFT_IOU_EPS: f64 = 1e-6;

/// Largest row count [`brute_force_assign`] accepts.
pub const BRUTE_FORCE_MAX_ROWS: usize = 7;

/// `(Σpg + ε) / (Σp + Σg − Σpg + ε)` evaluated in 64-bit.
pub fn soft_iou_value<F: Element>(p: &[F], g: &[F]) -> Result<f64> {
    if p.len() != g.len() {
        return Err(shape_err!("soft_iou: {} vs {} values", p.len(), g.len()));
    }
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&a, &b) in p.iter().zip(g) {
        let (a, b) = (a.as_f64(), b.as_f64());
        inter += a * b;
        sp += a;
        sg += b;
    }
    Ok((inter + SOFT_IOU_EPS) / (sp + sg - inter + SOFT_IOU_EPS))
}

/// Differentiable soft IoU of two same-shaped tensors, as a scalar.
pub fn soft_iou<F: Element>(tape: &mut Tape<F>, p: Var, g: Var) -> Result<Var> {
    if tape.shape(p) != tape.shape(g) {
        return Err(shape_err!("soft_iou: {:?} vs {:?}", tape.shape(p), tape.shape(g)));
    }
    let eps = F::from_f64_lossy(SOFT_IOU_EPS);
    let pg = tape.mul(p, g)?;
    let inter = tape.sum(pg);
    let sp = tape.sum(p);
    let sg = tape.sum(g);
    let num = tape.add_scalar(inter, eps);
    let both = tape.add(sp, sg)?;
    let union = tape.sub(both, inter)?;
    let den = tape.add_scalar(union, eps);
    tape.div(num, den)
}

/// Rows are ground-truth objects, columns prediction slots.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    /// Frames summed into each entry.
    pub frames: usize,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err!(
                "cost matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("cost matrix entries must be finite".into()));
        }
        Ok(Self {
            rows,
            cols,
            data,
            frames: 1,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err!("ragged cost matrix"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Entry `(m, n) = Σ_t (1 − softIoU(pred[t][n], gt[t][m]))`.
    pub fn from_masks<F: Element>(preds: &[Vec<&[F]>], gts: &[Vec<&[F]>]) -> Result<Self> {
        if preds.len() != gts.len() {
            return Err(shape_err!(
                "{} prediction frames vs {} annotation frames",
                preds.len(),
                gts.len()
            ));
        }
        let cols = preds.first().map_or(0, Vec::len);
        let rows = gts.first().map_or(0, Vec::len);
        let mut data = vec![0.0; rows * cols];
        for (pf, gf) in preds.iter().zip(gts) {
            if pf.len() != cols || gf.len() != rows {
                return Err(shape_err!("object/slot counts change across frames"));
            }
            for (m, g) in gf.iter().enumerate() {
                for (n, p) in pf.iter().enumerate() {
                    data[m * cols + n] += 1.0 - soft_iou_value(p, g)?;
                }
            }
        }
        let mut c = Self::new(rows, cols, data)?;
        c.frames = preds.len();
        Ok(c)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            data: self.data.iter().map(|v| v * k).collect(),
            ..self.clone()
        }
    }

    /// Row-order sum of the entries picked by `slots`.
    pub fn total(&self, slots: &[usize]) -> f64 {
        slots.iter().enumerate().map(|(r, &c)| self.get(r, c)).sum()
    }

    fn check_rectangular(&self) -> Result<()> {
        if self.rows > self.cols {
            return Err(Error::Contract(format!(
                "{} objects cannot be assigned injectively to {} slots",
                self.rows, self.cols
            )));
        }
        Ok(())
    }
}

/// Injective map from object index to slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub slots: Vec<usize>,
    pub total: f64,
}

impl Assignment {
    pub fn empty() -> Self {
        Self {
            slots: Vec::new(),
            total: 0.0,
        }
    }

    pub fn is_injective(&self) -> bool {
        let mut s = self.slots.clone();
        s.sort_unstable();
        s.windows(2).all(|w| w[0] != w[1])
    }

    /// Inverse map: slot → object.
    pub fn slot_owner(&self, slots: usize) -> Vec<Option<usize>> {
        let mut owner = vec![None; slots];
        for (m, &n) in self.slots.iter().enumerate() {
            owner[n] = Some(m);
        }
        owner
    }
}

fn tie_tolerance(optimum: f64) -> f64 {
    1e-9 * (1.0 + optimum.abs())
}

/// Shortest-augmenting-path Hungarian method on the sub-matrix `rows × cols`.
/// Returns the chosen column for each listed row.
fn solve(cost: &CostMatrix, rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let (n, m) = (rows.len(), cols.len());
    if n == 0 {
        return Vec::new();
    }
    let a = |i: usize, j: usize| cost.get(rows[i - 1], cols[j - 1]);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = cols[j - 1];
        }
    }
    out
}

fn solve_total(cost: &CostMatrix, rows: &[usize], cols: &[usize]) -> f64 {
    solve(cost, rows, cols)
        .iter()
        .zip(rows)
        .map(|(&c, &r)| cost.get(r, c))
        .sum()
}

/// Minimum-cost injective assignment of rows to columns.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    cost.check_rectangular()?;
    let all_rows: Vec<usize> = (0..cost.rows).collect();
    let all_cols: Vec<usize> = (0..cost.cols).collect();
    let optimum = solve_total(cost, &all_rows, &all_cols);
    let tol = tie_tolerance(optimum);

    // Fix rows one at a time to the smallest column that still admits an optimal completion.
    let mut slots = Vec::with_capacity(cost.rows);
    let mut free = all_cols;
    let mut prefix = 0.0;
    for r in 0..cost.rows {
        let rest: Vec<usize> = (r + 1..cost.rows).collect();
        let pick = free
            .iter()
            .position(|&c| {
                let others: Vec<usize> = free.iter().copied().filter(|&x| x != c).collect();
                prefix + cost.get(r, c) + solve_total(cost, &rest, &others) <= optimum + tol
            })
            .expect("an optimal completion always exists");
        let c = free.remove(pick);
        prefix += cost.get(r, c);
        slots.push(c);
    }
    let total = cost.total(&slots);
    Ok(Assignment { slots, total })
}

/// Exhaustive search over all injective maps, visited in lexicographic order.
pub fn brute_force_assign(cost: &CostMatrix) -> Result<Assignment> {
    if cost.rows > BRUTE_FORCE_MAX_ROWS {
        return Err(Error::Contract(format!(
            "brute force limited to {BRUTE_FORCE_MAX_ROWS} rows, got {}",
            cost.rows
        )));
    }
    cost.check_rectangular()?;
    let mut all = Vec::new();
    let mut current = Vec::with_capacity(cost.rows);
    let mut used = vec![false; cost.cols];
    enumerate(cost, &mut current, &mut used, &mut all);
    let optimum = all.iter().map(|(_, t)| *t).fold(f64::INFINITY, f64::min);
    let optimum = if all.is_empty() { 0.0 } else { optimum };
    let tol = tie_tolerance(optimum);
    let (slots, total) = all
        .into_iter()
        .find(|(_, t)| *t <= optimum + tol)
        .unwrap_or((Vec::new(), 0.0));
    Ok(Assignment { slots, total })
}

fn enumerate(cost: &CostMatrix, current: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<(Vec<usize>, f64)>) {
    if current.len() == cost.rows {
        out.push((current.clone(), cost.total(current)));
        return;
    }
    for c in 0..cost.cols {
        if !used[c] {
            used[c] = true;
            current.push(c);
            enumerate(cost, current, used, out);
            current.pop();
            used[c] = false;
        }
    }
}

/// How ground-truth objects are matched to slots in the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossOptions {
    pub mode: Mode,
    /// Zero-shot only: match on the clip's first frame instead of summing over the clip.
    #[serde(default)]
    pub first_frame_only: bool,
}

/// Clip loss `1/(T·M) Σ_t Σ_m (1 − softIoU(S_{t,σ(m)}, G_{t,m}))`.
///
/// One-shot binds object `m` to slot `m`; zero-shot solves [`hungarian`] once per clip.
/// Slots outside the assignment never enter the loss. The assignment is a constant of
/// the forward pass.
pub fn training_loss<F: Element>(
    tape: &mut Tape<F>,
    preds: &[Vec<Var>],
    gts: &[Vec<Var>],
    opts: LossOptions,
) -> Result<(Var, Assignment)> {
    if preds.len() != gts.len() {
        return Err(shape_err!(
            "{} prediction frames vs {} annotation frames",
            preds.len(),
            gts.len()
        ));
    }
    let frames = preds.len();
    let m = gts.first().map_or(0, Vec::len);
    let n = preds.first().map_or(0, Vec::len);
    if m > n {
        return Err(Error::Contract(format!("{m} objects but only {n} slots")));
    }
    if m == 0 || frames == 0 {
        let zero = tape.zeros(&[1])?;
        return Ok((zero, Assignment::empty()));
    }
    let assignment = {
        let view = |frames: &[Vec<Var>]| -> Vec<Vec<&[F]>> {
            frames
                .iter()
                .map(|f| f.iter().map(|&v| tape.data(v)).collect())
                .collect()
        };
        let (pv, gv) = (view(preds), view(gts));
        match opts.mode {
            Mode::OneShot => {
                let cost = CostMatrix::from_masks(&pv, &gv)?;
                let slots: Vec<usize> = (0..m).collect();
                Assignment {
                    total: cost.total(&slots),
                    slots,
                }
            }
            Mode::ZeroShot if opts.first_frame_only => {
                let cost = CostMatrix::from_masks(&pv[..1], &gv[..1])?;
                hungarian(&cost)?
            }
            Mode::ZeroShot => hungarian(&CostMatrix::from_masks(&pv, &gv)?)?,
        }
    };
    let mut ious = Vec::with_capacity(frames * m);
    for (pf, gf) in preds.iter().zip(gts) {
        for (obj, &slot) in assignment.slots.iter().enumerate() {
            ious.push(soft_iou(tape, pf[slot], gf[obj])?);
        }
    }
    let total = tape.add_n(&ious)?;
    let scaled = tape.scale(total, F::from_f64_lossy(-1.0 / (frames * m) as f64));
    let loss = tape.add_scalar(scaled, F::one());
    Ok((loss, assignment))
}

/// Zero-shot evaluation binding: objects present at frame 0 are matched jointly on
/// frame 0; each later object takes the cheapest still-free slot at its first frame
/// (in order of appearance, then object index). `None` when no slot is left.
///
/// `preds[t][n]` and `gts[t][m]` are flat masks; `first_appearance[m]` indexes frames.
pub fn first_frame_assign(
    preds: &[Vec<Vec<f64>>],
    gts: &[Vec<Vec<f64>>],
    first_appearance: &[usize],
) -> Result<Vec<Option<usize>>> {
    let m = first_appearance.len();
    let n = preds.first().map_or(0, Vec::len);
    if preds.len() != gts.len() {
        return Err(shape_err!(
            "{} prediction frames vs {} annotation frames",
            preds.len(),
            gts.len()
        ));
    }
    if first_appearance.iter().any(|&t| t >= preds.len()) {
        return Err(Error::Contract("first appearance beyond the last frame".into()));
    }
    let mut binding = vec![None; m];
    let mut taken = vec![false; n];
    let cost_at =
        |obj: usize, slot: usize, t: usize| -> Result<f64> { Ok(1.0 - soft_iou_value(&preds[t][slot], &gts[t][obj])?) };

    let initial: Vec<usize> = (0..m).filter(|&o| first_appearance[o] == 0).collect();
    if !initial.is_empty() {
        // If there are more initial objects than slots, the trailing ones stay unassigned.
        let k = initial.len().min(n);
        let rows = &initial[..k];
        let mut data = Vec::with_capacity(k * n);
        for &o in rows {
            for s in 0..n {
                data.push(cost_at(o, s, 0)?);
            }
        }
        let a = hungarian(&CostMatrix::new(k, n, data)?)?;
        for (&o, &s) in rows.iter().zip(&a.slots) {
            binding[o] = Some(s);
            taken[s] = true;
        }
    }

    let mut later: Vec<usize> = (0..m).filter(|&o| first_appearance[o] > 0).collect();
    later.sort_by_key(|&o| (first_appearance[o], o));
    for o in later {
        let t = first_appearance[o];
        let mut best: Option<(f64, usize)> = None;
        for s in (0..n).filter(|&s| !taken[s]) {
            let c = cost_at(o, s, t)?;
            if best.is_none_or(|(bc, _)| c < bc) {
                best = Some((c, s));
            }
        }
        if let Some((_, s)) = best {
            binding[o] = Some(s);
            taken[s] = true;
        }
    }
    Ok(binding)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cost(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CostMatrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(0.0..5.0)).collect();
        CostMatrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn soft_iou_examples() {
        let g = [1.0f64, 1.0, 0.0, 0.0];
        assert_eq!(soft_iou_value(&g, &g).unwrap(), 1.0);
        let other = [0.0f64, 0.0, 1.0, 1.0];
        let d = soft_iou_value(&g, &other).unwrap();
        assert!((d - SOFT_IOU_EPS / (4.0 + SOFT_IOU_EPS)).abs() < 1e-18);
        let half = [0.5f64; 4];
        let one = [1.0f64, 0.0, 0.0, 0.0];
        let v = soft_iou_value(&half, &one).unwrap();
        assert!((v - (0.5 + SOFT_IOU_EPS) / (2.5 + SOFT_IOU_EPS)).abs() < 1e-15);
        assert!((v - 0.2).abs() < 1e-6);
        let empty = [0.0f64; 4];
        assert_eq!(soft_iou_value(&empty, &empty).unwrap(), 1.0);
        assert!(soft_iou_value(&empty, &[0.0f64; 3]).is_err());
    }

    #[test]
    fn soft_iou_tape_matches_value() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::from_vec(&[1, 2, 2], vec![0.5; 4]).unwrap());
        let g = tape.constant(Tensor::from_vec(&[1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let s = soft_iou(&mut tape, p, g).unwrap();
        let expect = soft_iou_value(tape.data(p), tape.data(g)).unwrap();
        assert!((tape.data(s)[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn hungarian_small_cases() {
        let one = CostMatrix::from_rows(&[vec![3.5]]).unwrap();
        assert_eq!(
            hungarian(&one).unwrap(),
            Assignment {
                slots: vec![0],
                total: 3.5
            }
        );
        let two = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert_eq!(
            hungarian(&two).unwrap(),
            Assignment {
                slots: vec![0, 1],
                total: 2.0
            }
        );
        let tall = CostMatrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        assert!(matches!(hungarian(&tall), Err(Error::Contract(_))));
    }

    #[test]
    fn brute_force_cases() {
        let diag = CostMatrix::from_rows(&[vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]]).unwrap();
        assert_eq!(
            brute_force_assign(&diag).unwrap(),
            Assignment {
                slots: vec![0, 1, 2],
                total: 0.0
            }
        );
        let flat = CostMatrix::new(3, 5, vec![2.0; 15]).unwrap();
        assert_eq!(brute_force_assign(&flat).unwrap().slots, vec![0, 1, 2]);
        assert_eq!(hungarian(&flat).unwrap().slots, vec![0, 1, 2]);
        let big = CostMatrix::new(8, 8, vec![1.0; 64]).unwrap();
        assert!(brute_force_assign(&big).is_err());
    }

    #[test]
    fn hungarian_matches_brute_force_on_random_3x5() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        for _ in 0..50 {
            let c = random_cost(&mut rng, 3, 5);
            assert_eq!(hungarian(&c).unwrap(), brute_force_assign(&c).unwrap());
        }
    }

    #[test]
    fn hungarian_matches_brute_force_on_6x7() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        for _ in 0..500 {
            let c = random_cost(&mut rng, 6, 7);
            assert_eq!(hungarian(&c).unwrap(), brute_force_assign(&c).unwrap());
        }
    }

    #[test]
    fn ties_on_integer_costs_agree_with_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (r, c) = (rng.gen_range(1..=4), rng.gen_range(4..=6));
            let data = (0..r * c).map(|_| rng.gen_range(0..3) as f64).collect();
            let m = CostMatrix::new(r, c, data).unwrap();
            assert_eq!(hungarian(&m).unwrap(), brute_force_assign(&m).unwrap());
        }
    }

    proptest! {
        #[test]
        fn scaling_keeps_argmin(seed in any::<u64>(), k in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_cost(&mut rng, 4, 6);
            prop_assert_eq!(hungarian(&c).unwrap().slots, hungarian(&c.scaled(k)).unwrap().slots);
        }

        #[test]
        fn soft_iou_symmetric_and_bounded(p in prop::collection::vec(0.0f64..=1.0, 12),
                                          bits in prop::collection::vec(any::<bool>(), 12)) {
            let g: Vec<f64> = bits.iter().map(|&b| f64::from(u8::from(b))).collect();
            let a = soft_iou_value(&p, &g).unwrap();
            let b = soft_iou_value(&g, &p).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert_eq!(a, b);
        }

        #[test]
        fn soft_iou_monotone_toward_target(p in prop::collection::vec(0.0f64..=1.0, 10),
                                           bits in prop::collection::vec(any::<bool>(), 10),
                                           idx in 0usize..10, step in 0.0f64..=1.0) {
            let g: Vec<f64> = bits.iter().map(|&b| f64::from(u8::from(b))).collect();
            let p: Vec<f64> = p.iter().zip(&g).map(|(a, b)| a.min(*b)).collect();
            let mut q = p.clone();
            q[idx] = p[idx] + step * (g[idx] - p[idx]);
            prop_assert!(soft_iou_value(&q, &g).unwrap() >= soft_iou_value(&p, &g).unwrap() - 1e-15);
        }
    }

    fn mask(tape: &mut Tape<f64>, v: &[f64]) -> Var {
        tape.constant(Tensor::from_vec(&[1, 1, v.len()], v.to_vec()).unwrap())
    }

    #[test]
    fn loss_is_zero_for_perfect_predictions() {
        let mut tape = Tape::new();
        let g0 = mask(&mut tape, &[1.0, 0.0, 0.0]);
        let g1 = mask(&mut tape, &[0.0, 1.0, 1.0]);
        let junk = mask(&mut tape, &[0.3, 0.3, 0.3]);
        let preds = vec![vec![junk, g1, g0]];
        let gts = vec![vec![g0, g1]];
        let opts = LossOptions {
            mode: Mode::ZeroShot,
            first_frame_only: false,
        };
        let (loss, a) = training_loss(&mut tape, &preds, &gts, opts).unwrap();
        assert_eq!(a.slots, vec![2, 1]);
        assert!(tape.data(loss)[0].abs() < 1e-9);
    }

    #[test]
    fn loss_hand_evaluated() {
        let mut tape = Tape::new();
        let p0 = mask(&mut tape, &[0.8, 0.2, 0.0, 0.0]);
        let p1 = mask(&mut tape, &[0.0, 0.1, 0.9, 0.6]);
        let g0 = mask(&mut tape, &[1.0, 0.0, 0.0, 0.0]);
        let g1 = mask(&mut tape, &[0.0, 0.0, 1.0, 1.0]);
        let opts = LossOptions {
            mode: Mode::ZeroShot,
            first_frame_only: false,
        };
        let (loss, a) = training_loss(&mut tape, &[vec![p0, p1]], &[vec![g0, g1]], opts).unwrap();
        assert_eq!(a.slots, vec![0, 1]);
        let e = SOFT_IOU_EPS;
        let iou0 = (0.8 + e) / (1.0 + 1.0 - 0.8 + e);
        let iou1 = (1.5 + e) / (1.6 + 2.0 - 1.5 + e);
        let expect = ((1.0 - iou0) + (1.0 - iou1)) / 2.0;
        assert!((tape.data(loss)[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn loss_edge_cases() {
        let mut tape = Tape::new();
        let p = mask(&mut tape, &[0.5, 0.5]);
        let opts = LossOptions {
            mode: Mode::ZeroShot,
            first_frame_only: false,
        };
        let (loss, a) = training_loss(&mut tape, &[vec![p]], &[vec![]], opts).unwrap();
        assert_eq!(tape.data(loss), &[0.0]);
        assert!(a.slots.is_empty());
        assert!(matches!(
            training_loss(&mut tape, &[vec![p]], &[vec![p, p]], opts),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn first_frame_assign_binds_late_objects_to_free_slots() {
        let a = vec![1.0, 1.0, 0.0, 0.0];
        let b = vec![0.0, 0.0, 1.0, 1.0];
        let z = vec![0.0; 4];
        // slot 0 predicts b, slot 1 predicts a, slot 2 predicts a at frame 3 too.
        let preds: Vec<Vec<Vec<f64>>> = (0..4)
            .map(|t| vec![b.clone(), a.clone(), if t == 3 { a.clone() } else { z.clone() }])
            .collect();
        let gts: Vec<Vec<Vec<f64>>> = (0..4)
            .map(|t| vec![a.clone(), if t >= 3 { a.clone() } else { z.clone() }])
            .collect();
        let bind = first_frame_assign(&preds, &gts, &[0, 3]).unwrap();
        assert_eq!(bind[0], Some(1));
        // slot 1 is the best match for object 1 at frame 3 but is already bound.
        assert_eq!(bind[1], Some(2));
    }

    #[test]
    fn first_frame_assign_reports_unassigned() {
        let a = vec![1.0, 0.0];
        let preds = vec![vec![a.clone()]];
        let gts = vec![vec![a.clone(), a.clone()]];
        assert_eq!(first_frame_assign(&preds, &gts, &[0, 0]).unwrap(), vec![Some(0), None]);
    }
}
