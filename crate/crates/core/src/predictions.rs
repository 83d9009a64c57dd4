//! Prediction files: `<dir>/<seq>/slots/<n:02>/<t:05>.pgm` soft masks quantized to
//! 0–255, `<dir>/<seq>/ids/<t:05>.pgm` ID maps and optional `overlay/<t:05>.ppm`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::netpbm::{self, Image};
use crate::data::VideoSequence;
use crate::error::{Error, Result};
use crate::metrics::id_map;

/// Soft masks of one sequence, `[t][slot][pixel]`.
pub type SoftMasks = Vec<Vec<Vec<f32>>>;

/// Instance colors for overlays; ID `k` uses entry `(k − 1) mod len`.
pub const PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 190],
];

const OVERLAY_ALPHA: f32 = 0.5;

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(v: u8) -> f32 {
    f32::from(v) / 255.0
}

fn slot_path(dir: &Path, slot: usize, t: usize) -> PathBuf {
    dir.join("slots").join(format!("{slot:02}")).join(format!("{t:05}.pgm"))
}

fn gray(height: usize, width: usize, data: Vec<u8>) -> Image {
    Image {
        width,
        height,
        channels: 1,
        data,
    }
}

/// Writes every slot mask and ID map of `seq`'s predictions under `root/<seq.id>`.
/// Returns the number of files written.
pub fn write_predictions(
    root: &Path,
    seq: &VideoSequence,
    preds: &SoftMasks,
    threshold: f64,
    overlay: bool,
) -> Result<usize> {
    let dir = root.join(&seq.id);
    let (h, w) = (seq.height, seq.width);
    let mut written = 0;
    for (t, slots) in preds.iter().enumerate() {
        for (n, mask) in slots.iter().enumerate() {
            let path = slot_path(&dir, n, t);
            ensure_parent(&path)?;
            netpbm::write(&path, &gray(h, w, mask.iter().map(|&v| quantize(v)).collect()))?;
            written += 1;
        }
        let ids = id_map(slots, threshold);
        let path = dir.join("ids").join(format!("{t:05}.pgm"));
        ensure_parent(&path)?;
        if overlay {
            let path = dir.join("overlay").join(format!("{t:05}.ppm"));
            ensure_parent(&path)?;
            let img = Image {
                width: w,
                height: h,
                channels: 3,
                data: blend(&seq.frames[t], &ids),
            };
            netpbm::write(&path, &img)?;
            written += 1;
        }
        netpbm::write(&path, &gray(h, w, ids))?;
        written += 1;
    }
    Ok(written)
}

fn ensure_parent(path: &Path) -> Result<()> {
    let parent = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))
}

/// Tints each labelled pixel of an RGB frame with its instance color.
pub fn blend(rgb: &[u8], ids: &[u8]) -> Vec<u8> {
    let mut out = rgb.to_vec();
    for (px, &id) in out.chunks_mut(3).zip(ids) {
        if id == 0 {
            continue;
        }
        let color = PALETTE[(usize::from(id) - 1) % PALETTE.len()];
        for (c, &k) in px.iter_mut().zip(&color) {
            *c = (f32::from(*c) * (1.0 - OVERLAY_ALPHA) + f32::from(k) * OVERLAY_ALPHA).round() as u8;
        }
    }
    out
}

/// Reads the slot masks stored for `seq`, or `None` when the directory is absent.
pub fn read_predictions(root: &Path, seq: &VideoSequence) -> Result<Option<SoftMasks>> {
    let dir = root.join(&seq.id);
    if !dir.join("slots").is_dir() {
        return Ok(None);
    }
    let mut slots = 0;
    while dir.join("slots").join(format!("{slots:02}")).is_dir() {
        slots += 1;
    }
    let mut out = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        let mut frame = Vec::with_capacity(slots);
        for n in 0..slots {
            let path = slot_path(&dir, n, t);
            let img = netpbm::read(&path)?;
            if img.channels != 1 || (img.height, img.width) != (seq.height, seq.width) {
                return Err(Error::Validation(format!(
                    "{}: expected a {}x{} gray mask",
                    path.display(),
                    seq.height,
                    seq.width
                )));
            }
            frame.push(img.data.into_iter().map(dequantize).collect());
        }
        out.push(frame);
    }
    Ok(Some(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sequence, GenConfig};

    #[test]
    fn quantization_round_trips_bytes() {
        for b in 0..=255u8 {
            assert_eq!(quantize(dequantize(b)), b);
        }
        assert_eq!((quantize(-1.0), quantize(2.0), quantize(0.5)), (0, 255, 128));
    }

    #[test]
    fn write_then_read() {
        let cfg = GenConfig {
            height: 8,
            width: 8,
            frames: 3,
            ..GenConfig::default()
        };
        let seq = generate_sequence(&cfg, 1, "a").unwrap();
        let preds: SoftMasks = (0..3)
            .map(|t| {
                (0..2)
                    .map(|n| (0..64).map(|p| ((p + t + n) % 5) as f32 / 4.0).collect())
                    .collect()
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(write_predictions(dir.path(), &seq, &preds, 0.5, true).unwrap(), 3 * 4);
        let back = read_predictions(dir.path(), &seq).unwrap().unwrap();
        for (a, b) in back.iter().flatten().flatten().zip(preds.iter().flatten().flatten()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6, "{a} vs {b}");
        }
        let other = VideoSequence { id: "b".into(), ..seq };
        assert!(read_predictions(dir.path(), &other).unwrap().is_none());
    }

    #[test]
    fn blend_leaves_background() {
        let rgb = vec![10, 20, 30, 10, 20, 30];
        let out = blend(&rgb, &[0, 1]);
        assert_eq!(&out[..3], &rgb[..3]);
        assert_eq!(&out[3..], &[120, 23, 53]);
    }
}
