//! Dataset layout: `<dir>/<seq_id>/frames/%05d.ppm`, `<dir>/<seq_id>/masks/%05d.pgm`,
//! `<dir>/<seq_id>/meta.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::netpbm::{self, Image};
use super::{appearances, VideoSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub num_objects: usize,
    pub first_appearance: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    #[serde(default)]
    pub depth_order: Vec<usize>,
}

fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join("frames").join(format!("{t:05}.ppm"))
}

fn mask_path(dir: &Path, t: usize) -> PathBuf {
    dir.join("masks").join(format!("{t:05}.pgm"))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_sequence(seq: &VideoSequence, root: &Path) -> Result<()> {
    let dir = root.join(&seq.id);
    create_dir(&dir.join("frames"))?;
    create_dir(&dir.join("masks"))?;
    for (t, (rgb, ids)) in seq.frames.iter().zip(&seq.masks).enumerate() {
        let img = |channels, data: &Vec<u8>| Image {
            width: seq.width,
            height: seq.height,
            channels,
            data: data.clone(),
        };
        netpbm::write(&frame_path(&dir, t), &img(3, rgb))?;
        netpbm::write(&mask_path(&dir, t), &img(1, ids))?;
    }
    let meta = SequenceMeta {
        num_objects: seq.num_objects,
        first_appearance: seq.first_appearance.clone(),
        height: seq.height,
        width: seq.width,
        frames: seq.len(),
        depth_order: seq.depth_order.clone(),
    };
    let path = dir.join("meta.json");
    let mut text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&path, e))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn write_dataset(seqs: &[VideoSequence], root: &Path) -> Result<()> {
    create_dir(root)?;
    seqs.iter().try_for_each(|s| write_sequence(s, root))
}

pub fn has_meta(seq_dir: &Path) -> bool {
    seq_dir.join("meta.json").is_file()
}

fn read_meta(dir: &Path) -> Result<SequenceMeta> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

fn expect_size(path: &Path, img: &Image, height: usize, width: usize) -> Result<()> {
    if (img.height, img.width) != (height, width) {
        return Err(Error::Validation(format!(
            "{}: {}x{} image in a {height}x{width} sequence",
            path.display(),
            img.height,
            img.width
        )));
    }
    Ok(())
}

/// Reads one sequence directory. Without `meta.json` the object count and first
/// appearances are derived from the masks.
pub fn read_sequence(dir: &Path) -> Result<VideoSequence> {
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let meta = if has_meta(dir) { Some(read_meta(dir)?) } else { None };
    let mut frames = Vec::new();
    let mut masks = Vec::new();
    let mut size = meta.as_ref().map(|m| (m.height, m.width));
    for t in 0.. {
        let fp = frame_path(dir, t);
        if !fp.is_file() {
            break;
        }
        let frame = netpbm::read(&fp)?;
        if frame.channels != 3 {
            return Err(Error::Validation(format!("{}: expected an RGB frame", fp.display())));
        }
        let (h, w) = *size.get_or_insert((frame.height, frame.width));
        expect_size(&fp, &frame, h, w)?;
        let mp = mask_path(dir, t);
        let mask = netpbm::read(&mp)?;
        if mask.channels != 1 {
            return Err(Error::Validation(format!("{}: expected a gray mask", mp.display())));
        }
        expect_size(&mp, &mask, h, w)?;
        frames.push(frame.data);
        masks.push(mask.data);
    }
    let (height, width) = size.ok_or_else(|| Error::Validation(format!("{}: no frames", dir.display())))?;
    let seq = match meta {
        Some(meta) => {
            if meta.frames != frames.len() {
                return Err(Error::Validation(format!(
                    "{}: meta declares {} frames, found {}",
                    dir.display(),
                    meta.frames,
                    frames.len()
                )));
            }
            VideoSequence {
                id,
                height,
                width,
                frames,
                masks,
                num_objects: meta.num_objects,
                first_appearance: meta.first_appearance,
                depth_order: meta.depth_order,
            }
        }
        None => {
            let num_objects = masks.iter().flatten().copied().max().map_or(0, usize::from);
            let first = appearances(&masks, num_objects);
            let count = frames.len();
            VideoSequence {
                id,
                height,
                width,
                frames,
                masks,
                num_objects,
                first_appearance: first.iter().map(|f| f.unwrap_or(count)).collect(),
                depth_order: Vec::new(),
            }
        }
    };
    seq.validate()?;
    Ok(seq)
}

/// Sequence directories under `root`, sorted by name.
pub fn sequence_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn read_dataset(root: &Path) -> Result<Vec<VideoSequence>> {
    sequence_dirs(root)?.iter().map(|d| read_sequence(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, GenConfig};

    fn small() -> GenConfig {
        GenConfig {
            height: 16,
            width: 24,
            frames: 4,
            ..GenConfig::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let seqs = generate_corpus(&small(), 3, 9).unwrap();
        write_dataset(&seqs, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), seqs);
    }

    #[test]
    fn empty_mask_is_all_zero_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let mut seq = generate_corpus(&small(), 1, 2).unwrap().remove(0);
        seq.masks[0].iter_mut().for_each(|v| *v = 0);
        write_sequence(&seq, dir.path()).unwrap();
        let bytes = fs::read(mask_path(&dir.path().join(&seq.id), 0)).unwrap();
        let header = b"P5\n24 16\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert!(bytes[header.len()..].iter().all(|&b| b == 0));
        assert_eq!(bytes.len(), header.len() + 16 * 24);
    }

    #[test]
    fn truncated_frame_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let seqs = generate_corpus(&small(), 1, 5).unwrap();
        write_dataset(&seqs, dir.path()).unwrap();
        let path = frame_path(&dir.path().join(&seqs[0].id), 1);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Parse { path: p, offset, .. }) => {
                assert_eq!(p, path);
                assert_eq!(offset, bytes.len() / 2);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ids_beyond_declared_count_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut seq = generate_corpus(&small(), 1, 6).unwrap().remove(0);
        seq.masks[2][0] = (seq.num_objects + 1) as u8;
        write_sequence(&seq, dir.path()).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn meta_is_optional() {
        let dir = tempfile::tempdir().unwrap();
        let seq = generate_corpus(&small(), 1, 7).unwrap().remove(0);
        write_sequence(&seq, dir.path()).unwrap();
        let sd = dir.path().join(&seq.id);
        fs::remove_file(sd.join("meta.json")).unwrap();
        assert!(!has_meta(&sd));
        let back = read_sequence(&sd).unwrap();
        assert_eq!(back.first_appearance, seq.first_appearance);
        assert_eq!(back.masks, seq.masks);
    }
}
