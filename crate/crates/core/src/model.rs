//! The recurrent segmentation network.
//!
//! A stack of stride-2 convolution blocks produces a feature pyramid; a chain of
//! ConvLSTMs, one per pyramid level from coarse to fine, decodes one object mask
//! per slot. Each level sees the upsampled hidden state of the level below, the
//! projected encoder features, and (optionally) the slot's previous-frame mask.
//! Its recurrent state comes from the previous slot in the same frame (spatial)
//! and from the same slot in the previous frame (temporal).

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Bound, Conv2d, ConvLstmCell, LstmState, ParamStore};
use crate::tensor::{Element, Tensor};

/// Which recurrences the decoder uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Spatial only: temporal state is always the zero state.
    S,
    /// Temporal only: spatial state is always the zero state.
    T,
    /// Both recurrences.
    ST,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "S" => Ok(Variant::S),
            "T" => Ok(Variant::T),
            "ST" => Ok(Variant::ST),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

/// Whether object masks are supplied at their first appearance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    OneShot,
    ZeroShot,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::OneShot => "oneshot",
            Mode::ZeroShot => "zeroshot",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oneshot" => Ok(Mode::OneShot),
            "zeroshot" => Ok(Mode::ZeroShot),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Prediction slots per frame.
    pub slots: usize,
    /// Encoder blocks, equal to the number of decoder levels.
    pub blocks: usize,
    /// Channels of the first encoder block; doubled per block, capped at 128.
    pub base_channels: usize,
    /// ConvLSTM hidden channels per decoder level, coarsest first.
    pub hidden_channels: Vec<usize>,
    pub use_prev_mask: bool,
    /// `[H, W]` of input frames.
    pub input_size: [usize; 2],
    #[serde(default = "default_kernel")]
    pub lstm_kernel: usize,
}

fn default_kernel() -> usize {
    3
}

const MAX_ENCODER_CHANNELS: usize = 128;

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::ST,
            slots: 10,
            blocks: 4,
            base_channels: 32,
            hidden_channels: vec![32, 32, 16, 16],
            use_prev_mask: false,
            input_size: [64, 112],
            lstm_kernel: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.slots == 0 {
            return bad("slots must be at least 1".into());
        }
        if self.blocks < 2 {
            return bad(format!("need at least 2 encoder blocks, got {}", self.blocks));
        }
        if self.base_channels == 0 {
            return bad("base_channels must be positive".into());
        }
        if self.hidden_channels.len() != self.blocks || self.hidden_channels.contains(&0) {
            return bad(format!(
                "hidden_channels must list {} positive widths, got {:?}",
                self.blocks, self.hidden_channels
            ));
        }
        if self.lstm_kernel.is_multiple_of(2) {
            return bad(format!("lstm_kernel {} must be odd", self.lstm_kernel));
        }
        check_divisible(self.input_size, self.blocks)
    }

    pub fn height(&self) -> usize {
        self.input_size[0]
    }

    pub fn width(&self) -> usize {
        self.input_size[1]
    }

    /// Output channels of encoder block `j` (0-based).
    pub fn encoder_channels(&self, j: usize) -> usize {
        (self.base_channels << j.min(16)).min(MAX_ENCODER_CHANNELS)
    }

    /// Spatial size of decoder level `k` (0 = coarsest).
    pub fn level_size(&self, k: usize) -> (usize, usize) {
        let f = self.level_factor(k);
        (self.height() / f, self.width() / f)
    }

    /// Downsampling factor of level `k` relative to the input.
    pub fn level_factor(&self, k: usize) -> usize {
        1 << (self.blocks - k)
    }
}

/// Frame sizes must be divisible by `2^blocks`.
pub fn check_divisible(size: [usize; 2], blocks: usize) -> Result<()> {
    let f = 1usize << blocks;
    if size[0] == 0 || size[1] == 0 || !size[0].is_multiple_of(f) || !size[1].is_multiple_of(f) {
        return Err(Error::Config(format!(
            "input size {}x{} must be divisible by {f} for {blocks} blocks",
            size[0], size[1]
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderBlock {
    conv: Conv2d,
    down: Conv2d,
}

#[derive(Debug, Clone, PartialEq)]
struct Architecture {
    encoder: Vec<EncoderBlock>,
    projections: Vec<Conv2d>,
    cells: Vec<ConvLstmCell>,
    head: Conv2d,
}

impl Architecture {
    fn build<F: Element>(cfg: &ModelConfig, store: &mut ParamStore<F>) -> Result<Self> {
        let mut encoder = Vec::with_capacity(cfg.blocks);
        let mut c_in = if cfg.use_prev_mask { 4 } else { 3 };
        for j in 0..cfg.blocks {
            let c = cfg.encoder_channels(j);
            encoder.push(EncoderBlock {
                conv: Conv2d::new(store, &format!("encoder.{j}.conv"), c_in, c, 3, 1)?,
                down: Conv2d::new(store, &format!("encoder.{j}.down"), c, c, 3, 2)?,
            });
            c_in = c;
        }
        let mut projections = Vec::with_capacity(cfg.blocks);
        let mut cells = Vec::with_capacity(cfg.blocks);
        for k in 0..cfg.blocks {
            let hidden = cfg.hidden_channels[k];
            let feat = cfg.encoder_channels(cfg.blocks - 1 - k);
            projections.push(Conv2d::new(store, &format!("project.{k}"), feat, hidden, 1, 1)?);
            let below = if k > 0 { cfg.hidden_channels[k - 1] } else { 0 };
            let mask = usize::from(cfg.use_prev_mask);
            cells.push(ConvLstmCell::new(
                store,
                &format!("decoder.{k}"),
                below + hidden + mask,
                hidden,
                cfg.lstm_kernel,
            )?);
        }
        let head = Conv2d::new(store, "head", cfg.hidden_channels[cfg.blocks - 1], 1, 1, 1)?;
        Ok(Self {
            encoder,
            projections,
            cells,
            head,
        })
    }
}

/// Encoder outputs for one frame: `levels[k]` is `f_{t,k}`, `projected[k]` its 1×1 projection.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
    pub projected: Vec<Var>,
}

/// Decoder recurrent state on one tape.
///
/// `None` entries stand for the zero state: spatial state before the first slot of
/// a frame, temporal state before a slot's first frame.
#[derive(Debug, Clone)]
pub struct DecoderState {
    temporal: Vec<Option<Vec<LstmState>>>,
    spatial: Option<Vec<LstmState>>,
    prev_masks: Vec<Var>,
    writes: Vec<(usize, usize)>,
}

impl DecoderState {
    /// Fresh state: zero temporal history and empty previous masks.
    pub fn new<F: Element>(tape: &mut Tape<F>, cfg: &ModelConfig) -> Result<Self> {
        let zero = tape.zeros(&[1, cfg.height(), cfg.width()])?;
        Ok(Self {
            temporal: vec![None; cfg.slots],
            spatial: None,
            prev_masks: vec![zero; cfg.slots],
            writes: Vec::new(),
        })
    }

    pub fn prev_masks(&self) -> &[Var] {
        &self.prev_masks
    }

    pub fn set_prev_mask(&mut self, slot: usize, mask: Var) {
        self.prev_masks[slot] = mask;
    }

    pub fn temporal(&self, slot: usize) -> Option<&[LstmState]> {
        self.temporal[slot].as_deref()
    }

    /// Drops every slot's temporal history.
    pub fn clear_temporal(&mut self) {
        self.temporal.iter_mut().for_each(|t| *t = None);
    }

    /// `(decoded slot, written temporal slot)` for every temporal write so far.
    pub fn write_log(&self) -> &[(usize, usize)] {
        &self.writes
    }

    /// Copies the state off its tape so it can continue on another one.
    pub fn detach<F: Element>(&self, tape: &Tape<F>) -> CarriedState<F> {
        let grab = |v: Var| {
            let mut t = tape.value(v).clone();
            t.set_requires_grad(false);
            t.zero_grad();
            t
        };
        CarriedState {
            temporal: self
                .temporal
                .iter()
                .map(|slot| {
                    slot.as_ref()
                        .map(|levels| levels.iter().map(|s| (grab(s.h), grab(s.c))).collect())
                })
                .collect(),
            prev_masks: self.prev_masks.iter().map(|&m| grab(m)).collect(),
        }
    }
}

/// Tape-independent copy of a [`DecoderState`] between frames.
#[derive(Debug, Clone, PartialEq)]
pub struct CarriedState<F> {
    pub temporal: Vec<Option<Vec<(Tensor<F>, Tensor<F>)>>>,
    pub prev_masks: Vec<Tensor<F>>,
}

impl<F: Element> CarriedState<F> {
    pub fn attach(&self, tape: &mut Tape<F>) -> DecoderState {
        DecoderState {
            temporal: self
                .temporal
                .iter()
                .map(|slot| {
                    slot.as_ref().map(|levels| {
                        levels
                            .iter()
                            .map(|(h, c)| LstmState {
                                h: tape.constant(h.clone()),
                                c: tape.constant(c.clone()),
                            })
                            .collect()
                    })
                })
                .collect(),
            spatial: None,
            prev_masks: self.prev_masks.iter().map(|m| tape.constant(m.clone())).collect(),
            writes: Vec::new(),
        }
    }
}

/// Ground-truth mask supplied for a slot at a frame (one-shot input).
#[derive(Debug, Clone, PartialEq)]
pub struct GivenMask<F> {
    pub slot: usize,
    pub frame: usize,
    pub mask: Tensor<F>,
}

/// Source of the previous-frame masks fed to the decoder.
#[derive(Debug, Clone, Copy)]
pub enum MaskFeed<'a, F> {
    /// Ground truth per frame and slot (`[t][slot]`, each `[1,H,W]`).
    Teacher(&'a [Vec<Tensor<F>>]),
    /// The model's own soft outputs.
    Inferred,
}

/// Masks `S_{t,1..N}` for one frame, each `[1,H,W]`.
#[derive(Debug, Clone)]
pub struct FrameOutput {
    pub masks: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rvos<F> {
    config: ModelConfig,
    arch: Architecture,
    params: ParamStore<F>,
}

impl<F: Element> Rvos<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(seed);
        let arch = Architecture::build(&config, &mut params)?;
        Ok(Self { config, arch, params })
    }

    /// Rebuilds the architecture for `config` and adopts `params`, which must match
    /// the registry names and shapes exactly.
    pub fn from_params(config: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        let fresh = Self::new(config, 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, got {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for ((en, et), (gn, gt)) in fresh.params.iter().zip(params.iter()) {
            if en != gn || et.shape() != gt.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected {en} {:?}, got {gn} {:?}",
                    et.shape(),
                    gt.shape()
                )));
            }
        }
        Ok(Self {
            arch: fresh.arch,
            config: fresh.config,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn cast<G: Element>(&self) -> Rvos<G> {
        Rvos {
            config: self.config.clone(),
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    /// Switches the recurrence variant while keeping the parameters.
    pub fn set_variant(&mut self, variant: Variant) {
        self.config.variant = variant;
    }

    /// Bias of the 1×1 mask head.
    pub fn head_bias(&self) -> crate::nn::ParamId {
        self.arch.head.bias
    }

    pub fn encode(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        frame: Var,
        mask_summary: Option<Var>,
    ) -> Result<FeaturePyramid> {
        let (c, h, w) = tape.value(frame).chw()?;
        if c != 3 || [h, w] != self.config.input_size {
            return Err(shape_err!(
                "frame must be [3,{},{}], got [{c},{h},{w}]",
                self.config.height(),
                self.config.width()
            ));
        }
        let mut x = match (mask_summary, self.config.use_prev_mask) {
            (Some(m), true) => {
                if tape.shape(m) != [1, h, w] {
                    return Err(shape_err!("mask summary must be [1,{h},{w}], got {:?}", tape.shape(m)));
                }
                tape.concat_channels(&[frame, m])?
            }
            (None, false) => frame,
            (Some(_), false) => {
                return Err(Error::Contract(
                    "mask summary given to a model without mask input".into(),
                ))
            }
            (None, true) => return Err(Error::Contract("model with mask input needs a mask summary".into())),
        };
        let mut outputs = Vec::with_capacity(self.config.blocks);
        for block in &self.arch.encoder {
            let y = block.conv.forward(tape, p, x)?;
            let y = tape.relu(y);
            let y = block.down.forward(tape, p, y)?;
            x = tape.relu(y);
            outputs.push(x);
        }
        outputs.reverse();
        let projected = outputs
            .iter()
            .zip(&self.arch.projections)
            .map(|(&f, proj)| proj.forward(tape, p, f))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeaturePyramid {
            levels: outputs,
            projected,
        })
    }

    /// Pixelwise maximum over the slots' previous masks.
    pub fn mask_summary(&self, tape: &mut Tape<F>, masks: &[Var]) -> Result<Var> {
        let mut acc = *masks
            .first()
            .ok_or_else(|| Error::Contract("no masks to summarize".into()))?;
        for &m in &masks[1..] {
            acc = tape.maximum(acc, m)?;
        }
        Ok(acc)
    }

    /// Runs the decoder chain for one slot and returns its mask `[1,H,W]`.
    pub fn decode_object(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        pyramid: &FeaturePyramid,
        state: &mut DecoderState,
        slot: usize,
    ) -> Result<Var> {
        let cfg = &self.config;
        if state.prev_masks.len() != cfg.slots || state.temporal.len() != cfg.slots {
            return Err(Error::Contract(
                "decoder state was not initialized for this model".into(),
            ));
        }
        if slot >= cfg.slots {
            return Err(Error::Contract(format!(
                "slot {slot} out of range for {} slots",
                cfg.slots
            )));
        }
        if pyramid.projected.len() != cfg.blocks {
            return Err(Error::Contract("feature pyramid has the wrong number of levels".into()));
        }
        let temporal = match cfg.variant {
            Variant::S => None,
            _ => state.temporal[slot].clone(),
        };
        let spatial = match cfg.variant {
            Variant::T => None,
            _ => state.spatial.clone(),
        };
        let prev_mask = state.prev_masks[slot];
        let mut new_states: Vec<LstmState> = Vec::with_capacity(cfg.blocks);
        for k in 0..cfg.blocks {
            let mut parts = Vec::with_capacity(3);
            if let Some(below) = new_states.last() {
                parts.push(tape.bilinear_up2(below.h)?);
            }
            parts.push(pyramid.projected[k]);
            if cfg.use_prev_mask {
                parts.push(tape.area_down(prev_mask, cfg.level_factor(k))?);
            }
            let x = tape.concat_channels(&parts)?;
            let s = self.arch.cells[k].step(
                tape,
                p,
                x,
                spatial.as_ref().map(|v| &v[k]),
                temporal.as_ref().map(|v| &v[k]),
            )?;
            new_states.push(s);
        }
        let finest = new_states.last().expect("at least two levels").h;
        let logits = self.arch.head.forward(tape, p, finest)?;
        let prob = tape.sigmoid(logits);
        let mask = tape.bilinear_up2(prob)?;
        state.spatial = Some(new_states.clone());
        state.temporal[slot] = Some(new_states);
        state.writes.push((slot, slot));
        Ok(mask)
    }

    /// Encodes a frame and decodes all slots in fixed order, spatial state starting at zero.
    pub fn forward_frame(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        frame: Var,
        state: &mut DecoderState,
    ) -> Result<FrameOutput> {
        let summary = if self.config.use_prev_mask {
            let prev = state.prev_masks.clone();
            Some(self.mask_summary(tape, &prev)?)
        } else {
            None
        };
        let pyramid = self.encode(tape, p, frame, summary)?;
        state.spatial = None;
        let masks = (0..self.config.slots)
            .map(|i| self.decode_object(tape, p, &pyramid, state, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(FrameOutput { masks })
    }

    /// Runs consecutive frames, updating the previous-mask inputs between frames.
    ///
    /// Returns `masks[t][slot]`. A one-shot given mask replaces the slot's output at
    /// its frame and becomes the slot's previous mask for the next frame; otherwise
    /// the previous mask is the teacher mask or the model's own soft output.
    pub fn forward_clip(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        frames: &[Tensor<F>],
        mode: Mode,
        given: &[GivenMask<F>],
        feed: MaskFeed<'_, F>,
        state: &mut DecoderState,
    ) -> Result<Vec<Vec<Var>>> {
        let cfg = &self.config;
        match mode {
            Mode::OneShot => {
                if !cfg.use_prev_mask {
                    return Err(Error::Config("one-shot mode needs use_prev_mask".into()));
                }
                let mut slots: Vec<usize> = given.iter().map(|g| g.slot).collect();
                slots.sort_unstable();
                slots.dedup();
                if slots.len() != given.len() {
                    return Err(Error::Contract("given objects must be bound to distinct slots".into()));
                }
            }
            Mode::ZeroShot => {
                if cfg.use_prev_mask {
                    return Err(Error::Config("zero-shot mode requires use_prev_mask = false".into()));
                }
                if !given.is_empty() {
                    return Err(Error::Contract("zero-shot mode does not accept given masks".into()));
                }
            }
        }
        let mask_shape = [1, cfg.height(), cfg.width()];
        for g in given {
            if g.mask.shape() != mask_shape {
                return Err(shape_err!(
                    "given mask must be {mask_shape:?}, got {:?}",
                    g.mask.shape()
                ));
            }
            if g.slot >= cfg.slots {
                return Err(Error::Contract(format!(
                    "given mask bound to slot {} of {}",
                    g.slot, cfg.slots
                )));
            }
        }
        if let MaskFeed::Teacher(gt) = feed {
            if gt.len() < frames.len() || gt.iter().any(|f| f.len() != cfg.slots) {
                return Err(shape_err!("teacher masks must cover every frame and slot"));
            }
        }

        let mut out = Vec::with_capacity(frames.len());
        for (t, frame) in frames.iter().enumerate() {
            let fv = tape.constant(frame.clone());
            let mut masks = self.forward_frame(tape, p, fv, state)?.masks;
            if cfg.use_prev_mask {
                for (i, &m) in masks.iter().enumerate() {
                    state.prev_masks[i] = match feed {
                        MaskFeed::Teacher(gt) => tape.constant(gt[t][i].clone()),
                        MaskFeed::Inferred => m,
                    };
                }
                for g in given.iter().filter(|g| g.frame == t) {
                    let known = tape.constant(g.mask.clone());
                    state.prev_masks[g.slot] = known;
                    masks[g.slot] = known;
                }
            }
            out.push(masks);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    fn tiny(variant: Variant, use_mask: bool) -> ModelConfig {
        ModelConfig {
            variant,
            slots: 3,
            blocks: 2,
            base_channels: 4,
            hidden_channels: vec![3, 2],
            use_prev_mask: use_mask,
            input_size: [8, 12],
            lstm_kernel: 3,
        }
    }

    fn frame(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        Tensor::new(&[3, h, w], Init::Uniform { seed, lo: 0.0, hi: 1.0 }).unwrap()
    }

    #[test]
    fn pyramid_sizes_follow_stride_arithmetic() {
        let cfg = ModelConfig {
            slots: 1,
            hidden_channels: vec![2, 2, 2, 2],
            base_channels: 2,
            ..ModelConfig::default()
        };
        let model = Rvos::<f32>::new(cfg, 1).unwrap();
        let mut tape = Tape::new();
        let p = model.params().bind_frozen(&mut tape);
        let x = tape.zeros(&[3, 64, 112]).unwrap();
        let pyr = model.encode(&mut tape, &p, x, None).unwrap();
        let sizes: Vec<_> = pyr
            .levels
            .iter()
            .map(|&v| (tape.shape(v)[1], tape.shape(v)[2]))
            .collect();
        assert_eq!(sizes, vec![(4, 7), (8, 14), (16, 28), (32, 56)]);
        for (k, &v) in pyr.projected.iter().enumerate() {
            assert_eq!(&tape.shape(v)[1..], &[sizes[k].0, sizes[k].1]);
        }
    }

    #[test]
    fn zero_weights_give_zero_pyramid_and_constant_masks() {
        let mut model = Rvos::<f64>::new(tiny(Variant::ST, false), 2).unwrap();
        for t in model.params_mut().tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let hb = model.head_bias();
        model.params_mut().get_mut(hb).data_mut()[0] = 0.8;
        let mut tape = Tape::new();
        let p = model.params().bind_frozen(&mut tape);
        let x = tape.zeros(&[3, 8, 12]).unwrap();
        let pyr = model.encode(&mut tape, &p, x, None).unwrap();
        for &v in pyr.levels.iter().chain(&pyr.projected) {
            assert!(tape.data(v).iter().all(|&a| a == 0.0));
        }
        let mut state = DecoderState::new(&mut tape, model.config()).unwrap();
        let x = tape.constant(frame(3, 8, 12));
        let out = model.forward_frame(&mut tape, &p, x, &mut state).unwrap();
        let expect = 1.0 / (1.0 + (-0.8f64).exp());
        for &m in &out.masks {
            assert_eq!(tape.shape(m), &[1, 8, 12]);
            assert!(tape.data(m).iter().all(|&v| (v - expect).abs() < 1e-12));
        }
    }

    #[test]
    fn encode_rejects_wrong_size() {
        let model = Rvos::<f32>::new(tiny(Variant::ST, false), 2).unwrap();
        let mut tape = Tape::new();
        let p = model.params().bind_frozen(&mut tape);
        let x = tape.zeros(&[3, 8, 8]).unwrap();
        assert!(matches!(model.encode(&mut tape, &p, x, None), Err(Error::Shape(_))));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            input_size: [30, 30],
            ..ModelConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ModelConfig {
            blocks: 1,
            hidden_channels: vec![4],
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            slots: 0,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn masks_are_probabilities() {
        let model = Rvos::<f64>::new(tiny(Variant::ST, false), 5).unwrap();
        let mut tape = Tape::new();
        let p = model.params().bind_frozen(&mut tape);
        let mut state = DecoderState::new(&mut tape, model.config()).unwrap();
        let frames = vec![frame(1, 8, 12), frame(2, 8, 12)];
        let out = model
            .forward_clip(
                &mut tape,
                &p,
                &frames,
                Mode::ZeroShot,
                &[],
                MaskFeed::Inferred,
                &mut state,
            )
            .unwrap();
        assert_eq!(out.len(), 2);
        for m in out.iter().flatten() {
            assert_eq!(tape.shape(*m), &[1, 8, 12]);
            assert!(tape.data(*m).iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn slot_writes_stay_in_their_slot() {
        let model = Rvos::<f32>::new(tiny(Variant::ST, false), 5).unwrap();
        let mut tape = Tape::new();
        let p = model.params().bind_frozen(&mut tape);
        let mut state = DecoderState::new(&mut tape, model.config()).unwrap();
        let frames: Vec<_> = (0..3).map(|s| frame(s, 8, 12).cast::<f32>()).collect();
        model
            .forward_clip(
                &mut tape,
                &p,
                &frames,
                Mode::ZeroShot,
                &[],
                MaskFeed::Inferred,
                &mut state,
            )
            .unwrap();
        let log = state.write_log();
        assert_eq!(log.len(), 9);
        assert!(log.iter().all(|(writer, target)| writer == target));
        let order: Vec<usize> = log.iter().map(|w| w.0).collect();
        assert_eq!(order, vec![0, 1, 2, 0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn clip_mode_preconditions() {
        let zs = Rvos::<f64>::new(tiny(Variant::ST, false), 5).unwrap();
        let os = Rvos::<f64>::new(tiny(Variant::ST, true), 5).unwrap();
        let mut tape = Tape::new();
        let frames = vec![frame(1, 8, 12)];
        let given = vec![GivenMask {
            slot: 0,
            frame: 0,
            mask: Tensor::zeros(&[1, 8, 12]).unwrap(),
        }];

        let p = zs.params().bind_frozen(&mut tape);
        let mut st = DecoderState::new(&mut tape, zs.config()).unwrap();
        let r = zs.forward_clip(
            &mut tape,
            &p,
            &frames,
            Mode::ZeroShot,
            &given,
            MaskFeed::Inferred,
            &mut st,
        );
        assert!(matches!(r, Err(Error::Contract(_))));
        let r = zs.forward_clip(
            &mut tape,
            &p,
            &frames,
            Mode::OneShot,
            &given,
            MaskFeed::Inferred,
            &mut st,
        );
        assert!(matches!(r, Err(Error::Config(_))));

        let p = os.params().bind_frozen(&mut tape);
        let mut st = DecoderState::new(&mut tape, os.config()).unwrap();
        let wrong = vec![GivenMask {
            slot: 0,
            frame: 0,
            mask: Tensor::zeros(&[1, 4, 4]).unwrap(),
        }];
        let r = os.forward_clip(
            &mut tape,
            &p,
            &frames,
            Mode::OneShot,
            &wrong,
            MaskFeed::Inferred,
            &mut st,
        );
        assert!(matches!(r, Err(Error::Shape(_))));
        let dup = vec![given[0].clone(), given[0].clone()];
        let r = os.forward_clip(&mut tape, &p, &frames, Mode::OneShot, &dup, MaskFeed::Inferred, &mut st);
        assert!(matches!(r, Err(Error::Contract(_))));
        let r = os.forward_clip(
            &mut tape,
            &p,
            &frames,
            Mode::OneShot,
            &given,
            MaskFeed::Inferred,
            &mut st,
        );
        assert!(r.is_ok());
    }

    #[test]
    fn decode_requires_initialized_state() {
        let model = Rvos::<f64>::new(tiny(Variant::ST, false), 5).unwrap();
        let mut tape = Tape::new();
        let p = model.params().bind_frozen(&mut tape);
        let x = tape.constant(frame(1, 8, 12));
        let pyr = model.encode(&mut tape, &p, x, None).unwrap();
        let other = ModelConfig {
            slots: 1,
            ..tiny(Variant::ST, false)
        };
        let mut st = DecoderState::new(&mut tape, &other).unwrap();
        assert!(matches!(
            model.decode_object(&mut tape, &p, &pyr, &mut st, 0),
            Err(Error::Contract(_))
        ));
    }
}
