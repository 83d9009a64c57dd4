//! Layers and optimizer: parameter registry, 2-D convolution, the dual-state
//! ConvLSTM cell, and Adam.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Element, Init, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter registry. Registration order is the serialization order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    seed: u64,
}

/// Parameters recorded as leaves on one tape.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps leaves already on a tape, in registry order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl<F: Element> ParamStore<F> {
    pub fn new(seed: u64) -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            seed,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, mut t: Tensor<F>) -> ParamId {
        t.set_requires_grad(true);
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Registers a tensor drawn from `uniform(-bound, bound)` with a seed derived from
    /// the store seed and the registration index.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64) -> Result<ParamId> {
        let seed = mix_seed(self.seed, self.tensors.len() as u64);
        let t = Tensor::new(
            shape,
            Init::Uniform {
                seed,
                lo: F::from_f64_lossy(-bound),
                hi: F::from_f64_lossy(bound),
            },
        )?;
        Ok(self.add(name, t))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape` as a gradient-requiring leaf.
    pub fn bind(&self, tape: &mut Tape<F>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.param(t.clone())).collect())
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape<F>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.constant(t.clone())).collect())
    }

    /// Leaf gradients after [`Tape::backward`], in registry order.
    pub fn collect_grads(&self, tape: &mut Tape<F>, bound: &Bound) -> Vec<Vec<F>> {
        bound
            .0
            .iter()
            .zip(&self.tensors)
            .map(|(&v, t)| tape.take_grad(v).unwrap_or_else(|| vec![F::zero(); t.numel()]))
            .collect()
    }

    pub fn cast<G: Element>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| {
                    let mut c = t.cast::<G>();
                    c.set_requires_grad(true);
                    c
                })
                .collect(),
            seed: self.seed,
        }
    }
}

/// Square-kernel convolution with "same" zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    /// Registers `name.weight` / `name.bias` drawn from `uniform(-a, a)`, `a = 1/sqrt(fan_in)`.
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(shape_err!("kernel size {kernel} must be odd"));
        }
        if stride == 0 {
            return Err(shape_err!("stride must be positive"));
        }
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), &[c_out, c_in, kernel, kernel], bound)?;
        let bias = store.add_uniform(format!("{name}.bias"), &[c_out], bound)?;
        Ok(Self {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
            stride,
        })
    }

    pub fn forward<F: Element>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.weight), p.var(self.bias), self.stride)
    }
}

/// Hidden and cell state of one ConvLSTM, both `[C, H, W]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// ConvLSTM whose gates see the input and two hidden histories (spatial and temporal).
///
/// Gate channels are ordered input, forget, output, candidate. The previous cell
/// state is the mean of the cell states of whichever histories are present; an
/// absent history (`None`) contributes a zero hidden block and no cell state.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmCell {
    pub gates: Conv2d,
    pub input_channels: usize,
    pub hidden: usize,
}

impl ConvLstmCell {
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        name: &str,
        input_channels: usize,
        hidden: usize,
        kernel: usize,
    ) -> Result<Self> {
        let gates = Conv2d::new(store, name, input_channels + 2 * hidden, 4 * hidden, kernel, 1)?;
        let bias = store.get_mut(gates.bias).data_mut();
        bias[hidden..2 * hidden].iter_mut().for_each(|b| *b = F::one());
        Ok(Self {
            gates,
            input_channels,
            hidden,
        })
    }

    pub fn step<F: Element>(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        x: Var,
        spatial: Option<&LstmState>,
        temporal: Option<&LstmState>,
    ) -> Result<LstmState> {
        let (cx, h, w) = tape.value(x).chw()?;
        if cx != self.input_channels {
            return Err(shape_err!(
                "ConvLSTM expects {} input channels, got {cx}",
                self.input_channels
            ));
        }
        let state_shape = [self.hidden, h, w];
        for s in [spatial, temporal].into_iter().flatten() {
            if tape.shape(s.h) != state_shape || tape.shape(s.c) != state_shape {
                return Err(shape_err!(
                    "ConvLSTM state {:?}/{:?} does not match {state_shape:?}",
                    tape.shape(s.h),
                    tape.shape(s.c)
                ));
            }
        }
        let zero_h = if spatial.is_none() || temporal.is_none() {
            Some(tape.zeros(&state_shape)?)
        } else {
            None
        };
        let hs = spatial.map_or_else(|| zero_h.unwrap(), |s| s.h);
        let ht = temporal.map_or_else(|| zero_h.unwrap(), |s| s.h);
        let input = tape.concat_channels(&[x, hs, ht])?;
        let gates = self.gates.forward(tape, p, input)?;
        let c = self.hidden;
        let i = tape.slice_channels(gates, 0, c)?;
        let i = tape.sigmoid(i);
        let f = tape.slice_channels(gates, c, c)?;
        let f = tape.sigmoid(f);
        let o = tape.slice_channels(gates, 2 * c, c)?;
        let o = tape.sigmoid(o);
        let g = tape.slice_channels(gates, 3 * c, c)?;
        let g = tape.tanh(g);

        let prev = match (spatial, temporal) {
            (Some(s), Some(t)) => {
                let sum = tape.add(s.c, t.c)?;
                Some(tape.scale(sum, F::from_f64_lossy(0.5)))
            }
            (Some(s), None) => Some(s.c),
            (None, Some(t)) => Some(t.c),
            (None, None) => None,
        };
        let write = tape.mul(i, g)?;
        let c_new = match prev {
            Some(prev) => {
                let keep = tape.mul(f, prev)?;
                tape.add(keep, write)?
            }
            None => write,
        };
        let squashed = tape.tanh(c_new);
        let h_new = tape.mul(o, squashed)?;
        Ok(LstmState { h: h_new, c: c_new })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter in registry order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Element> Adam<F> {
    pub fn new(config: AdamConfig, store: &ParamStore<F>) -> Self {
        let zeros = || -> Vec<Vec<F>> { store.tensors().iter().map(|t| vec![F::zero(); t.numel()]).collect() };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn reset_moments(&mut self) {
        for buf in self.m.iter_mut().chain(self.v.iter_mut()) {
            buf.iter_mut().for_each(|x| *x = F::zero());
        }
        self.step = 0;
    }

    pub fn update(&mut self, store: &mut ParamStore<F>, grads: &[Vec<F>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(shape_err!(
                "adam: {} gradients / {} moment sets for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            ));
        }
        for (k, (t, g)) in store.tensors().iter().zip(grads).enumerate() {
            if t.numel() != g.len() || self.m[k].len() != g.len() {
                return Err(shape_err!(
                    "adam: parameter {k} has {} values but gradient has {}",
                    t.numel(),
                    g.len()
                ));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powf(self.step as f64);
        let bc2 = 1.0 - beta2.powf(self.step as f64);
        for (k, t) in store.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let g = grads[k][j].as_f64();
                let mj = beta1 * m[j].as_f64() + (1.0 - beta1) * g;
                let vj = beta2 * v[j].as_f64() + (1.0 - beta2) * g * g;
                m[j] = F::from_f64_lossy(mj);
                v[j] = F::from_f64_lossy(vj);
                let upd = lr * (mj / bc1) / ((vj / bc2).sqrt() + eps);
                *p = F::from_f64_lossy(p.as_f64() - upd);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn convlstm_zero_case() {
        let mut store = ParamStore::<f64>::new(0);
        let cell = ConvLstmCell::new(&mut store, "cell", 2, 3, 3).unwrap();
        for t in store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let b = store.get_mut(cell.gates.bias).data_mut();
        b[3..6].iter_mut().for_each(|v| *v = 1.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.zeros(&[2, 4, 5]).unwrap();
        let zs = LstmState {
            h: tape.zeros(&[3, 4, 5]).unwrap(),
            c: tape.zeros(&[3, 4, 5]).unwrap(),
        };
        let out = cell.step(&mut tape, &p, x, Some(&zs), Some(&zs)).unwrap();
        assert!(tape.data(out.h).iter().all(|&v| v == 0.0));
        assert!(tape.data(out.c).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn convlstm_output_shape_ignores_input_width() {
        for cx in [1, 4, 7] {
            let mut store = ParamStore::<f32>::new(3);
            let cell = ConvLstmCell::new(&mut store, "cell", cx, 2, 3).unwrap();
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let x = tape.zeros(&[cx, 3, 6]).unwrap();
            let s = cell.step(&mut tape, &p, x, None, None).unwrap();
            assert_eq!(tape.shape(s.h), &[2, 3, 6]);
            assert_eq!(tape.shape(s.c), &[2, 3, 6]);
        }
    }

    #[test]
    fn convlstm_rejects_mismatched_state() {
        let mut store = ParamStore::<f32>::new(3);
        let cell = ConvLstmCell::new(&mut store, "cell", 1, 2, 3).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.zeros(&[1, 4, 4]).unwrap();
        let bad = LstmState {
            h: tape.zeros(&[2, 2, 2]).unwrap(),
            c: tape.zeros(&[2, 2, 2]).unwrap(),
        };
        assert!(cell.step(&mut tape, &p, x, Some(&bad), None).is_err());
    }

    #[test]
    fn forget_bias_initialized_to_one() {
        let mut store = ParamStore::<f32>::new(11);
        let cell = ConvLstmCell::new(&mut store, "cell", 2, 4, 3).unwrap();
        let b = store.get(cell.gates.bias).data();
        assert!(b[4..8].iter().all(|&v| v == 1.0));
        let bound = 1.0 / ((2 + 8) as f32 * 9.0).sqrt();
        assert!(b[..4].iter().chain(&b[8..]).all(|v| v.abs() <= bound));
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut store = ParamStore::<f64>::new(1);
        store.add_uniform("w", &[3], 1.0).unwrap();
        let before = store.clone();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.update(&mut store, &[vec![0.0; 3]]).unwrap();
        assert_eq!(adam.step, 1);
        assert_eq!(store.tensors()[0].data(), before.tensors()[0].data());
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let mut store = ParamStore::<f64>::new(1);
        store.add("w", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &store);
        adam.update(&mut store, &[vec![0.3, -2.0]]).unwrap();
        let d = store.tensors()[0].data();
        // |Δ| = lr·g/(|g|+ε)
        assert!((d[0] - (1.0 - 0.01 * 0.3 / (0.3 + 1e-8))).abs() < 1e-12);
        assert!((d[1] - (-1.0 + 0.01 * 2.0 / (2.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn adam_rejects_mismatched_grads() {
        let mut store = ParamStore::<f32>::new(1);
        store.add_uniform("w", &[3], 1.0).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        assert!(adam.update(&mut store, &[vec![0.0; 2]]).is_err());
        assert!(adam.update(&mut store, &[]).is_err());
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut store = ParamStore::<f32>::new(5);
            store.add_uniform("w", &[16], 0.5).unwrap();
            let mut adam = Adam::new(AdamConfig::default(), &store);
            for s in 0..10 {
                let g: Vec<f32> = (0..16).map(|j| ((s * 16 + j) as f32 * 0.37).sin()).collect();
                adam.update(&mut store, &[g]).unwrap();
            }
            store.tensors()[0].data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
