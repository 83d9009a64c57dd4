//! Finite-difference verification of the tape's analytic gradients, in 64-bit.

use serde::Serialize;

use crate::assign::{soft_iou, training_loss, LossOptions};
use crate::autograd::{CustomBackward, Tape, Var, DIFFERENTIABLE_OPS};
use crate::error::Result;
use crate::model::{DecoderState, GivenMask, MaskFeed, Mode, ModelConfig, Rvos, Variant};
use crate::nn::{Bound, ConvLstmCell, LstmState, ParamStore};
use crate::tensor::{Init, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Gradients smaller than this are compared in absolute rather than relative terms.
const ERROR_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

/// Central differences `(f(a + h·e_j) − f(a − h·e_j)) / 2h` for every element `j`.
pub fn finite_diff_grad(f: impl Fn(&Tensor<f64>) -> Result<f64>, a: &Tensor<f64>, h: f64) -> Result<Vec<f64>> {
    let mut probe = a.clone();
    let mut out = Vec::with_capacity(a.numel());
    for j in 0..a.numel() {
        let orig = probe.data()[j];
        probe.data_mut()[j] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[j] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[j] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Send + Sync>;

/// A scalar function of some input tensors, recorded on a tape.
pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    build: Build,
}

impl GradCase {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            inputs,
            build: Box::new(build),
        }
    }

    fn eval(&self, inputs: &[Tensor<f64>]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = (self.build)(&mut tape, &vars)?;
        Ok(tape.data(out)[0])
    }

    fn analytic(&self) -> Result<(Vec<Vec<f64>>, Vec<&'static str>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = (self.build)(&mut tape, &vars)?;
        let ops = tape.recorded_ops().into_iter().collect();
        tape.backward(out)?;
        let grads = vars
            .iter()
            .zip(&self.inputs)
            .map(|(&v, t)| tape.take_grad(v).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        Ok((grads, ops))
    }

    pub fn run(&self, h: f64, tol: f64) -> Result<CheckResult> {
        let (analytic, ops) = self.analytic()?;
        let mut max_err: f64 = 0.0;
        let mut elements = 0;
        for (i, a) in analytic.iter().enumerate() {
            let numeric = finite_diff_grad(
                |probe| {
                    let mut inputs = self.inputs.clone();
                    inputs[i] = probe.clone();
                    self.eval(&inputs)
                },
                &self.inputs[i],
                h,
            )?;
            for (&x, &y) in a.iter().zip(&numeric) {
                let e = rel_err(x, y);
                max_err = if e.is_nan() { f64::INFINITY } else { max_err.max(e) };
            }
            elements += a.len();
        }
        Ok(CheckResult {
            name: self.name.clone(),
            elements,
            max_rel_err: max_err,
            passed: max_err <= tol,
            ops,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
    pub passed: bool,
    /// Tape operations the case exercised.
    pub ops: Vec<&'static str>,
}

/// Registered differentiable ops that none of `results` exercised.
pub fn uncovered(results: &[CheckResult]) -> Vec<&'static str> {
    DIFFERENTIABLE_OPS
        .into_iter()
        .filter(|op| !results.iter().any(|r| r.ops.contains(op)))
        .collect()
}

fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::new(shape, Init::Uniform { seed, lo, hi }).expect("valid shape")
}

/// Values in `±[lo, hi]`, keeping clear of zero.
fn away_from_zero(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut t = uniform(shape, seed, lo, hi);
    let signs = uniform(shape, seed ^ 0x5eed, -1.0, 1.0);
    for (v, s) in t.data_mut().iter_mut().zip(signs.data()) {
        if *s < 0.0 {
            *v = -*v;
        }
    }
    t
}

fn binary(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut t = uniform(shape, seed, 0.0, 1.0);
    t.data_mut()
        .iter_mut()
        .for_each(|v| *v = if *v > 0.5 { 1.0 } else { 0.0 });
    t
}

/// Reduces a tensor to a scalar with fixed pseudo-random weights so that every
/// output element carries a distinct upstream gradient.
fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let w = uniform(tape.shape(v), seed ^ 0xabcd, -1.0, 1.0);
    let w = tape.constant(w);
    let prod = tape.mul(v, w)?;
    Ok(tape.sum(prod))
}

fn elementwise_cases(seed: u64) -> Vec<GradCase> {
    let s = [2, 3, 4];
    let a = uniform(&s, seed, -2.0, 2.0);
    let b = uniform(&s, seed + 1000, -2.0, 2.0);
    let denom = away_from_zero(&s, seed + 2000, 0.5, 2.0);
    let kinked = away_from_zero(&s, seed + 3000, 0.05, 2.0);
    // maximum operands whose difference stays clear of zero
    let mut other = a.clone();
    let gap = away_from_zero(&s, seed + 4000, 0.05, 1.0);
    for (o, g) in other.data_mut().iter_mut().zip(gap.data()) {
        *o += g;
    }
    let p = move |f: fn(&mut Tape<f64>, Var, Var) -> Result<Var>| {
        move |tape: &mut Tape<f64>, v: &[Var]| {
            let y = f(tape, v[0], v[1])?;
            project(tape, y, seed)
        }
    };
    let u = move |f: fn(&mut Tape<f64>, Var) -> Var| {
        move |tape: &mut Tape<f64>, v: &[Var]| {
            let y = f(tape, v[0]);
            project(tape, y, seed)
        }
    };
    vec![
        GradCase::new("add", vec![a.clone(), b.clone()], p(|t, x, y| t.add(x, y))),
        GradCase::new("sub", vec![a.clone(), b.clone()], p(|t, x, y| t.sub(x, y))),
        GradCase::new("mul", vec![a.clone(), b.clone()], p(|t, x, y| t.mul(x, y))),
        GradCase::new("div", vec![a.clone(), denom], p(|t, x, y| t.div(x, y))),
        GradCase::new("maximum", vec![a.clone(), other], p(|t, x, y| t.maximum(x, y))),
        GradCase::new("add_n", vec![a.clone(), b.clone(), a.clone()], move |tape, v| {
            let y = tape.add_n(v)?;
            project(tape, y, seed)
        }),
        GradCase::new("scale", vec![a.clone()], u(|t, x| t.scale(x, -1.7))),
        GradCase::new("add_scalar", vec![a.clone()], u(|t, x| t.add_scalar(x, 0.3))),
        GradCase::new("sigmoid", vec![a.clone()], u(|t, x| t.sigmoid(x))),
        GradCase::new("tanh", vec![a.clone()], u(|t, x| t.tanh(x))),
        GradCase::new("relu", vec![kinked], u(|t, x| t.relu(x))),
        GradCase::new("sum", vec![a.clone()], move |tape, v| {
            let sq = tape.mul(v[0], v[0])?;
            Ok(tape.sum(sq))
        }),
        GradCase::new("mean", vec![a], move |tape, v| {
            let sq = tape.mul(v[0], v[0])?;
            Ok(tape.mean(sq))
        }),
    ]
}

fn structural_cases(seed: u64) -> Vec<GradCase> {
    let parts = vec![
        uniform(&[2, 3, 4], seed, -1.0, 1.0),
        uniform(&[1, 3, 4], seed + 1, -1.0, 1.0),
        uniform(&[3, 3, 4], seed + 2, -1.0, 1.0),
    ];
    let img = uniform(&[5, 4, 6], seed + 3, -1.0, 1.0);
    let small = uniform(&[2, 3, 5], seed + 4, -1.0, 1.0);
    let big = uniform(&[2, 8, 8], seed + 5, -1.0, 1.0);
    vec![
        GradCase::new("concat_channels", parts, move |tape, v| {
            let y = tape.concat_channels(v)?;
            project(tape, y, seed)
        }),
        GradCase::new("slice_channels", vec![img], move |tape, v| {
            let y = tape.slice_channels(v[0], 1, 3)?;
            project(tape, y, seed)
        }),
        GradCase::new("bilinear_up2", vec![small], move |tape, v| {
            let y = tape.bilinear_up2(v[0])?;
            project(tape, y, seed)
        }),
        GradCase::new("area_down_2", vec![big.clone()], move |tape, v| {
            let y = tape.area_down(v[0], 2)?;
            project(tape, y, seed)
        }),
        GradCase::new("area_down_4", vec![big], move |tape, v| {
            let y = tape.area_down(v[0], 4)?;
            project(tape, y, seed)
        }),
        cube_case("custom", seed ^ 0xc0be, 3.0),
    ]
}

fn conv_cases(seed: u64) -> Vec<GradCase> {
    let conv = |name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, hw: [usize; 2]| {
        let x = uniform(&[c_in, hw[0], hw[1]], seed, -1.0, 1.0);
        let w = uniform(&[c_out, c_in, k, k], seed + 1, -0.5, 0.5);
        let b = uniform(&[c_out], seed + 2, -0.5, 0.5);
        GradCase::new(name, vec![x, w, b], move |tape, v| {
            let y = tape.conv2d(v[0], v[1], v[2], stride)?;
            project(tape, y, seed)
        })
    };
    vec![
        conv("conv2d_3x3", 2, 3, 3, 1, [5, 6]),
        conv("conv2d_3x3_stride2", 2, 3, 3, 2, [6, 8]),
        conv("conv2d_1x1", 3, 2, 1, 1, [4, 5]),
    ]
}

fn convlstm_cases(seed: u64) -> Vec<GradCase> {
    let (cx, hid, hw) = (2, 2, [4, 5]);
    let mut store = ParamStore::<f64>::new(seed);
    let cell = ConvLstmCell::new(&mut store, "cell", cx, hid, 3).expect("valid cell");
    let state = |s: u64| uniform(&[hid, hw[0], hw[1]], s, -1.0, 1.0);
    let x = uniform(&[cx, hw[0], hw[1]], seed + 10, -1.0, 1.0);
    let mut out = Vec::new();
    for (name, spatial, temporal) in [
        ("convlstm_both", true, true),
        ("convlstm_spatial_only", true, false),
        ("convlstm_temporal_only", false, true),
        ("convlstm_zero_state", false, false),
    ] {
        let mut inputs = store.tensors().to_vec();
        let np = inputs.len();
        inputs.push(x.clone());
        if spatial {
            inputs.extend([state(seed + 11), state(seed + 12)]);
        }
        if temporal {
            inputs.extend([state(seed + 13), state(seed + 14)]);
        }
        let cell = cell.clone();
        out.push(GradCase::new(name, inputs, move |tape, v| {
            let p = Bound::from_vars(v[..np].to_vec());
            let mut rest = v[np + 1..].chunks(2).map(|c| LstmState { h: c[0], c: c[1] });
            let s = if spatial { rest.next() } else { None };
            let t = if temporal { rest.next() } else { None };
            let st = cell.step(tape, &p, v[np], s.as_ref(), t.as_ref())?;
            let h = project(tape, st.h, seed)?;
            let c = project(tape, st.c, seed + 1)?;
            tape.add(h, c)
        }));
    }
    out
}

fn loss_cases(seed: u64) -> Vec<GradCase> {
    let shape = [1, 4, 5];
    let p = uniform(&shape, seed, 0.05, 0.95);
    let g = binary(&shape, seed + 1);
    let (frames, slots, objects) = (2, 3, 2);
    let preds: Vec<Tensor<f64>> = (0..frames * slots)
        .map(|i| uniform(&shape, seed + 10 + i as u64, 0.05, 0.95))
        .collect();
    let gts: Vec<Tensor<f64>> = (0..frames * objects)
        .map(|i| binary(&shape, seed + 100 + i as u64))
        .collect();
    let loss_case = move |name: &str, mode: Mode| {
        let gts = gts.clone();
        GradCase::new(name, preds.clone(), move |tape, v| {
            let pv: Vec<Vec<Var>> = v.chunks(slots).map(<[Var]>::to_vec).collect();
            let gv: Vec<Vec<Var>> = gts
                .chunks(objects)
                .map(|f| f.iter().map(|t| tape.constant(t.clone())).collect())
                .collect();
            let opts = LossOptions {
                mode,
                first_frame_only: false,
            };
            Ok(training_loss(tape, &pv, &gv, opts)?.0)
        })
    };
    vec![
        GradCase::new("soft_iou", vec![p, g], |tape, v| soft_iou(tape, v[0], v[1])),
        loss_case("training_loss_zeroshot", Mode::ZeroShot),
        loss_case("training_loss_oneshot", Mode::OneShot),
    ]
}

/// Tiny model (2 blocks, 8×8 frames, 2 slots) trained-loss gradient w.r.t. every parameter.
pub fn end_to_end_case(variant: Variant, mode: Mode, seed: u64) -> Result<GradCase> {
    let one_shot = mode == Mode::OneShot;
    let cfg = ModelConfig {
        variant,
        slots: 2,
        blocks: 2,
        base_channels: 2,
        hidden_channels: vec![2, 2],
        use_prev_mask: one_shot,
        input_size: [8, 8],
        lstm_kernel: 3,
    };
    let model = Rvos::<f64>::new(cfg.clone(), seed)?;
    let frames_n = if one_shot { 3 } else { 2 };
    let frames: Vec<Tensor<f64>> = (0..frames_n)
        .map(|t| uniform(&[3, 8, 8], seed * 31 + t as u64, 0.0, 1.0))
        .collect();
    let gts: Vec<Vec<Tensor<f64>>> = (0..frames_n)
        .map(|t| {
            (0..2)
                .map(|m| binary(&[1, 8, 8], seed * 97 + (t * 2 + m) as u64))
                .collect()
        })
        .collect();
    // Slot 1's annotation arrives one frame late, so frame 1 feeds back a predicted mask.
    let given: Vec<GivenMask<f64>> = if one_shot {
        vec![
            GivenMask {
                slot: 0,
                frame: 0,
                mask: gts[0][0].clone(),
            },
            GivenMask {
                slot: 1,
                frame: 1,
                mask: gts[1][1].clone(),
            },
        ]
    } else {
        Vec::new()
    };
    let name = format!("end_to_end_{variant:?}_{mode}");
    let inputs = model.params().tensors().to_vec();
    Ok(GradCase::new(name, inputs, move |tape, v| {
        let p = Bound::from_vars(v.to_vec());
        let mut state = DecoderState::new(tape, &cfg)?;
        let preds = model.forward_clip(tape, &p, &frames, mode, &given, MaskFeed::Inferred, &mut state)?;
        let gv: Vec<Vec<Var>> = gts
            .iter()
            .map(|f| f.iter().map(|t| tape.constant(t.clone())).collect())
            .collect();
        let opts = LossOptions {
            mode,
            first_frame_only: false,
        };
        Ok(training_loss(tape, &preds, &gv, opts)?.0)
    }))
}

/// Every differentiable op over `seeds` random draws, plus end-to-end model cases.
pub fn standard_suite(seeds: u64) -> Result<Vec<GradCase>> {
    let mut cases = Vec::new();
    for s in 0..seeds {
        let seed = 1 + s * 7919;
        cases.extend(elementwise_cases(seed));
        cases.extend(structural_cases(seed));
        cases.extend(conv_cases(seed));
        cases.extend(convlstm_cases(seed));
        cases.extend(loss_cases(seed));
    }
    for seed in 0..3 {
        cases.push(end_to_end_case(Variant::ST, Mode::ZeroShot, seed)?);
        cases.push(end_to_end_case(Variant::ST, Mode::OneShot, seed)?);
    }
    cases.push(end_to_end_case(Variant::S, Mode::ZeroShot, 3)?);
    cases.push(end_to_end_case(Variant::T, Mode::OneShot, 3)?);
    Ok(cases)
}

/// `sum(x³)` through a custom op with backward rule `slope · x² · g`.
fn cube_case(name: &str, seed: u64, slope: f64) -> GradCase {
    let x = uniform(&[2, 2, 2], seed, 0.5, 1.5);
    GradCase::new(name, vec![x], move |tape, v| {
        let value = tape.value(v[0]).clone();
        let mut cube = Tensor::from_vec(value.shape(), value.data().iter().map(|a| a * a * a).collect())?;
        cube.set_requires_grad(false);
        let backward: CustomBackward<f64> = Box::new(move |inputs, _out, g| {
            vec![inputs[0].data().iter().zip(g).map(|(a, g)| slope * a * a * g).collect()]
        });
        let y = tape.custom(&[v[0]], cube, backward);
        Ok(tape.sum(y))
    })
}

/// `y = x³` recorded with the backward rule `2x²`; the checker must reject it.
pub fn faulty_case() -> GradCase {
    cube_case("negative_control_cube", 42, 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_differences_of_a_quadratic() {
        let a = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|x| x * x).sum()), &a, 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] + 4.0).abs() < 1e-8);
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(rel_err(1e-9, 2e-9) < 1e-2);
    }

    #[test]
    fn single_seed_ops_pass() {
        for case in [
            elementwise_cases(5),
            structural_cases(5),
            conv_cases(5),
            convlstm_cases(5),
            loss_cases(5),
        ]
        .into_iter()
        .flatten()
        {
            let r = case.run(DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap();
            assert!(r.passed, "{} failed with {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn suite_covers_every_registered_op() {
        let results: Vec<CheckResult> = standard_suite(1)
            .unwrap()
            .iter()
            .map(|c| c.run(DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap())
            .collect();
        assert_eq!(uncovered(&results), Vec::<&str>::new());
        assert!(uncovered(&results[..1]).len() > 10);
    }

    #[test]
    fn negative_control_fails() {
        let r = faulty_case().run(DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_err > 0.1);
    }

    #[test]
    fn end_to_end_zeroshot_passes() {
        let r = end_to_end_case(Variant::ST, Mode::ZeroShot, 7)
            .unwrap()
            .run(DEFAULT_STEP, DEFAULT_TOLERANCE)
            .unwrap();
        assert!(r.passed, "max rel err {}", r.max_rel_err);
    }
}
