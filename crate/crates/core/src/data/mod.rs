//! Synthetic moving-shapes videos with per-pixel instance IDs, and their on-disk layout.

pub mod netpbm;
mod store;

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

pub use store::{has_meta, read_dataset, read_sequence, sequence_dirs, write_dataset, write_sequence, SequenceMeta};

/// Highest object count an 8-bit ID map can hold next to the background.
pub const MAX_OBJECTS: usize = 254;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disc,
    Rectangle,
    Triangle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub shapes: Vec<ShapeKind>,
    /// Speed range in pixels per frame.
    pub speed: [f64; 2],
    /// Shape radius range as a fraction of `min(height, width)`.
    pub size: [f64; 2],
    /// Chance that an object enters late or leaves early.
    pub entry_exit_prob: f64,
    pub background_seed: u64,
    /// Per-frame color noise amplitude, in `[0, 1]` intensity units.
    pub color_jitter: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 112,
            frames: 10,
            min_objects: 1,
            max_objects: 5,
            shapes: vec![ShapeKind::Disc, ShapeKind::Rectangle, ShapeKind::Triangle],
            speed: [0.5, 2.5],
            size: [0.12, 0.22],
            entry_exit_prob: 0.3,
            background_seed: 0,
            color_jitter: 0.03,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.height == 0 || self.width == 0 || self.frames == 0 {
            return bad("height, width and frames must be positive");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > MAX_OBJECTS {
            return bad("object count range must satisfy 1 <= min <= max <= 254");
        }
        if self.shapes.is_empty() {
            return bad("at least one shape kind is required");
        }
        if !(0.0 <= self.speed[0] && self.speed[0] <= self.speed[1]) {
            return bad("speed range must be non-negative and ordered");
        }
        if !(0.0 < self.size[0] && self.size[0] <= self.size[1]) {
            return bad("size range must be positive and ordered");
        }
        if !(0.0..=1.0).contains(&self.entry_exit_prob) || !(0.0..=1.0).contains(&self.color_jitter) {
            return bad("probabilities and jitter must lie in [0, 1]");
        }
        Ok(())
    }
}

/// One object's appearance and trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTrack {
    pub shape: ShapeKind,
    /// `(y, x)` of the center at frame 0, in pixels.
    pub center: [f64; 2],
    /// `(dy, dx)` per frame; the center reflects off the canvas borders.
    pub velocity: [f64; 2],
    pub radius: f64,
    /// Rectangle height/width ratio.
    pub aspect: f64,
    pub angle: f64,
    pub color: [f64; 3],
    /// 0 is nearest; nearer objects own overlapping pixels.
    pub depth: usize,
    /// Inclusive frame interval in which the object exists.
    pub start: usize,
    pub end: usize,
    /// Per-frame color offsets (empty for none).
    pub jitter: Vec<[f64; 3]>,
}

fn reflect(v: f64, len: f64) -> f64 {
    let m = v.rem_euclid(2.0 * len);
    if m > len {
        2.0 * len - m
    } else {
        m
    }
}

impl ObjectTrack {
    fn center_at(&self, t: usize, height: usize, width: usize) -> [f64; 2] {
        let t = t as f64;
        [
            reflect(self.center[0] + self.velocity[0] * t, height as f64),
            reflect(self.center[1] + self.velocity[1] * t, width as f64),
        ]
    }

    fn contains(&self, c: [f64; 2], y: f64, x: f64) -> bool {
        let (dy, dx) = (y - c[0], x - c[1]);
        let r = self.radius;
        match self.shape {
            ShapeKind::Disc => dy * dy + dx * dx <= r * r,
            ShapeKind::Rectangle => {
                let (s, co) = self.angle.sin_cos();
                let u = co * dx + s * dy;
                let v = -s * dx + co * dy;
                u.abs() <= r && v.abs() <= r * self.aspect
            }
            ShapeKind::Triangle => {
                let vert = |k: f64| {
                    let a = self.angle + k * 2.0 * PI / 3.0;
                    (r * a.cos(), r * a.sin())
                };
                let (p0, p1, p2) = (vert(0.0), vert(1.0), vert(2.0));
                let side = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (dy - a.1) - (b.1 - a.1) * (dx - a.0);
                let (d0, d1, d2) = (side(p0, p1), side(p1, p2), side(p2, p0));
                let neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
                let pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
                !(neg && pos)
            }
        }
    }
}

/// A video with per-pixel instance IDs (0 = background, `m + 1` = object `m`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoSequence {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Per frame, interleaved 8-bit RGB rows.
    pub frames: Vec<Vec<u8>>,
    /// Per frame, one ID byte per pixel.
    pub masks: Vec<Vec<u8>>,
    pub num_objects: usize,
    pub first_appearance: Vec<usize>,
    pub depth_order: Vec<usize>,
}

impl VideoSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frame `t` as `[3, H, W]` in `[0, 1]`.
    pub fn frame_tensor<F: Element>(&self, t: usize) -> Tensor<F> {
        let hw = self.height * self.width;
        let rgb = &self.frames[t];
        let mut data = vec![F::zero(); 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                data[c * hw + p] = F::from_f64_lossy(f64::from(rgb[3 * p + c]) / 255.0);
            }
        }
        Tensor::from_vec(&[3, self.height, self.width], data).expect("frame buffer matches its size")
    }

    /// Binary mask `[1, H, W]` of object `m` (0-based) at frame `t`.
    pub fn object_mask<F: Element>(&self, t: usize, m: usize) -> Tensor<F> {
        let id = (m + 1) as u8;
        let data = self.masks[t]
            .iter()
            .map(|&v| if v == id { F::one() } else { F::zero() })
            .collect();
        Tensor::from_vec(&[1, self.height, self.width], data).expect("mask buffer matches its size")
    }

    pub fn object_masks<F: Element>(&self, t: usize) -> Vec<Tensor<F>> {
        (0..self.num_objects).map(|m| self.object_mask(t, m)).collect()
    }

    pub fn area(&self, t: usize, m: usize) -> usize {
        let id = (m + 1) as u8;
        self.masks[t].iter().filter(|&&v| v == id).count()
    }

    /// Checks buffer sizes, the ID range, and that `first_appearance` matches the masks.
    pub fn validate(&self) -> Result<()> {
        let hw = self.height * self.width;
        if self.frames.len() != self.masks.len() {
            return Err(shape_err!(
                "{}: {} frames but {} masks",
                self.id,
                self.frames.len(),
                self.masks.len()
            ));
        }
        if self.frames.iter().any(|f| f.len() != 3 * hw) || self.masks.iter().any(|m| m.len() != hw) {
            return Err(shape_err!(
                "{}: buffers do not match {}x{}",
                self.id,
                self.height,
                self.width
            ));
        }
        if let Some(bad) = self
            .masks
            .iter()
            .flatten()
            .find(|&&v| usize::from(v) > self.num_objects)
        {
            return Err(Error::Validation(format!(
                "{}: mask ID {bad} exceeds the {} declared objects",
                self.id, self.num_objects
            )));
        }
        let seen = appearances(&self.masks, self.num_objects);
        if self.first_appearance.len() != self.num_objects {
            return Err(Error::Validation(format!(
                "{}: first_appearance length mismatch",
                self.id
            )));
        }
        for (m, (&declared, found)) in self.first_appearance.iter().zip(&seen).enumerate() {
            if *found != Some(declared) {
                return Err(Error::Validation(format!(
                    "{}: object {} declared to appear at frame {declared}, masks say {found:?}",
                    self.id,
                    m + 1
                )));
            }
        }
        Ok(())
    }
}

/// First frame with nonzero area for each of `num_objects` IDs.
pub fn appearances(masks: &[Vec<u8>], num_objects: usize) -> Vec<Option<usize>> {
    let mut first = vec![None; num_objects];
    for (t, mask) in masks.iter().enumerate() {
        for &v in mask {
            let v = usize::from(v);
            if v > 0 && v <= num_objects && first[v - 1].is_none() {
                first[v - 1] = Some(t);
            }
        }
    }
    first
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Static low-frequency gray texture with a faint tint, interleaved RGB in `[0, 1]`.
pub fn background(height: usize, width: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[f64; 3]> = (0..2)
        .map(|_| {
            [
                rng.gen_range(0.05..0.25),
                rng.gen_range(0.05..0.25),
                rng.gen_range(0.0..2.0 * PI),
            ]
        })
        .collect();
    let tint: [f64; 3] = [
        rng.gen_range(-0.04..0.04),
        rng.gen_range(-0.04..0.04),
        rng.gen_range(-0.04..0.04),
    ];
    let mut out = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        for x in 0..width {
            let base = 0.35
                + waves
                    .iter()
                    .map(|w| 0.07 * (w[0] * y as f64 + w[1] * x as f64 + w[2]).sin())
                    .sum::<f64>();
            let noise = rng.gen_range(-0.02..0.02);
            for t in tint {
                out.push(base + t + noise);
            }
        }
    }
    out
}

/// Rasterizes `tracks` over `frames` frames, nearer objects drawn last.
pub fn render_sequence(
    id: impl Into<String>,
    height: usize,
    width: usize,
    frames: usize,
    tracks: &[ObjectTrack],
    background: &[f64],
) -> VideoSequence {
    let hw = height * width;
    let mut order: Vec<usize> = (0..tracks.len()).collect();
    order.sort_by_key(|&m| std::cmp::Reverse(tracks[m].depth));
    let mut frame_bufs = Vec::with_capacity(frames);
    let mut mask_bufs = Vec::with_capacity(frames);
    for t in 0..frames {
        let mut ids = vec![0u8; hw];
        for &m in &order {
            let tr = &tracks[m];
            if t < tr.start || t > tr.end {
                continue;
            }
            let c = tr.center_at(t, height, width);
            let r = tr.radius.ceil() as isize + 1;
            let (cy, cx) = (c[0].floor() as isize, c[1].floor() as isize);
            for y in (cy - r).max(0)..(cy + r + 1).min(height as isize) {
                for x in (cx - r).max(0)..(cx + r + 1).min(width as isize) {
                    if tr.contains(c, y as f64 + 0.5, x as f64 + 0.5) {
                        ids[y as usize * width + x as usize] = (m + 1) as u8;
                    }
                }
            }
        }
        let mut rgb = Vec::with_capacity(3 * hw);
        for (p, &id) in ids.iter().enumerate() {
            for ch in 0..3 {
                let v = if id == 0 {
                    background[3 * p + ch]
                } else {
                    let tr = &tracks[usize::from(id) - 1];
                    tr.color[ch] + tr.jitter.get(t).map_or(0.0, |j| j[ch])
                };
                rgb.push(quantize(v));
            }
        }
        frame_bufs.push(rgb);
        mask_bufs.push(ids);
    }
    let first = appearances(&mask_bufs, tracks.len());
    VideoSequence {
        id: id.into(),
        height,
        width,
        frames: frame_bufs,
        masks: mask_bufs,
        num_objects: tracks.len(),
        first_appearance: first.iter().map(|f| f.unwrap_or(frames)).collect(),
        depth_order: tracks.iter().map(|t| t.depth).collect(),
    }
}

fn sample_tracks(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Vec<ObjectTrack> {
    let (h, w, frames) = (cfg.height as f64, cfg.width as f64, cfg.frames);
    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut depths: Vec<usize> = (0..count).collect();
    depths.shuffle(rng);
    let hue0: f64 = rng.gen();
    (0..count)
        .map(|m| {
            let shape = *cfg.shapes.choose(rng).expect("validated non-empty");
            let radius = rng.gen_range(cfg.size[0]..=cfg.size[1]) * h.min(w);
            let speed = rng.gen_range(cfg.speed[0]..=cfg.speed[1]);
            let heading = rng.gen_range(0.0..2.0 * PI);
            let (mut start, mut end) = (0, frames - 1);
            if frames > 1 && rng.gen_bool(cfg.entry_exit_prob) {
                if rng.gen_bool(0.5) {
                    start = rng.gen_range(1..=(frames / 2).max(1));
                } else {
                    end = rng.gen_range((frames / 2).min(frames - 2)..=frames - 2);
                }
            }
            let hue = hue0 + m as f64 / count as f64 + rng.gen_range(-0.05..0.05);
            let color = hsv(hue, rng.gen_range(0.65..0.95), rng.gen_range(0.75..1.0));
            let a = cfg.color_jitter;
            let jitter = (0..frames)
                .map(|_| {
                    if a > 0.0 {
                        [rng.gen_range(-a..=a), rng.gen_range(-a..=a), rng.gen_range(-a..=a)]
                    } else {
                        [0.0; 3]
                    }
                })
                .collect();
            ObjectTrack {
                shape,
                center: [rng.gen_range(0.0..h), rng.gen_range(0.0..w)],
                velocity: [speed * heading.sin(), speed * heading.cos()],
                radius,
                aspect: rng.gen_range(0.6..1.4),
                angle: rng.gen_range(0.0..PI),
                color,
                depth: depths[m],
                start,
                end,
                jitter,
            }
        })
        .collect()
}

/// Deterministic in `(cfg, seed)`. Draws are repeated until every object is visible
/// in at least one frame.
pub fn generate_sequence(cfg: &GenConfig, seed: u64, id: impl Into<String>) -> Result<VideoSequence> {
    cfg.validate()?;
    let id = id.into();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = background(cfg.height, cfg.width, cfg.background_seed ^ seed.rotate_left(17));
    loop {
        let tracks = sample_tracks(cfg, &mut rng);
        let seq = render_sequence(id.clone(), cfg.height, cfg.width, cfg.frames, &tracks, &bg);
        if appearances(&seq.masks, seq.num_objects).iter().all(Option::is_some) {
            return Ok(seq);
        }
    }
}

/// `count` sequences named `seq00000`, `seq00001`, … with seeds derived from `seed`.
pub fn generate_corpus(cfg: &GenConfig, count: usize, seed: u64) -> Result<Vec<VideoSequence>> {
    (0..count)
        .map(|i| {
            generate_sequence(
                cfg,
                seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
                format!("seq{i:05}"),
            )
        })
        .collect()
}

/// Deterministic shuffled partition; the first part holds `round(ratio · n)` items,
/// clamped so both parts are non-empty.
pub fn split<T: Clone>(items: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() < 2 {
        return Err(Error::Contract(format!("cannot split {} sequences", items.len())));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((ratio * items.len() as f64).round() as usize).clamp(1, items.len() - 1);
    let pick = |ids: &[usize]| ids.iter().map(|&i| items[i].clone()).collect();
    Ok((pick(&idx[..k]), pick(&idx[k..])))
}
