//! Dataset ingestion: 8-bit frame images or tensor containers in, latent
//! arrays out. The pixel-to-latent stub is a 2x average pool with values
//! scaled to [-1, 1]; the reverse direction nearest-upsamples for frame
//! dumps. Directory walks are sorted lexicographically so ingestion order
//! never depends on the filesystem.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgba};

use crate::error::{Error, Result};
use crate::latent::LatentVideo;
use crate::storage;

/// Downsample factor of the pixel stub: images are `2H x 2W` pixels for an
/// `H x W` latent.
pub const PIXEL_FACTOR: usize = 2;

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::invalid(format!("cannot read directory {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| !n.starts_with('.'))
                .unwrap_or(false)
        })
        .collect();
    entries.sort();
    Ok(entries)
}

fn is_frame_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("png") | Some("vt")
    )
}

/// Load one frame as latent-shaped `(H, W, C)` data, from a PNG (pooled) or
/// a tensor container (verbatim).
pub fn load_frame(path: &Path, h: usize, w: usize, c: usize) -> Result<Vec<f64>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("vt") => {
            let (data, shape) = storage::load_tensor(path)?;
            if shape != [h, w, c] {
                return Err(Error::ShapeMismatch {
                    context: "load_frame (container)",
                    expected: vec![h, w, c],
                    got: shape,
                });
            }
            Ok(data)
        }
        Some("png") => {
            let img = image::open(path)
                .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?
                .to_rgba8();
            pixels_to_latent(&img, h, w, c)
        }
        _ => Err(Error::invalid(format!("unsupported frame file {}", path.display()))),
    }
}

/// 2x average pool + rescale to [-1, 1], keeping the first `c` channels.
pub fn pixels_to_latent(
    img: &ImageBuffer<Rgba<u8>, Vec<u8>>,
    h: usize,
    w: usize,
    c: usize,
) -> Result<Vec<f64>> {
    if c > 4 {
        return Err(Error::invalid("latent channels > 4 cannot come from 8-bit images"));
    }
    let (pw, ph) = img.dimensions();
    if ph as usize != h * PIXEL_FACTOR || pw as usize != w * PIXEL_FACTOR {
        return Err(Error::ShapeMismatch {
            context: "pixels_to_latent",
            expected: vec![h * PIXEL_FACTOR, w * PIXEL_FACTOR],
            got: vec![ph as usize, pw as usize],
        });
    }
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for dy in 0..PIXEL_FACTOR {
                    for dx in 0..PIXEL_FACTOR {
                        let p = img.get_pixel((x * PIXEL_FACTOR + dx) as u32, (y * PIXEL_FACTOR + dy) as u32);
                        acc += p.0[ch] as f64;
                    }
                }
                let mean = acc / (PIXEL_FACTOR * PIXEL_FACTOR) as f64;
                out[(y * w + x) * c + ch] = mean / 127.5 - 1.0;
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour upsample + rescale to 8-bit for frame dumps. Channels
/// beyond the latent's are filled (alpha opaque, gray replicated).
pub fn latent_to_pixels(frame: &[f64], h: usize, w: usize, c: usize) -> Result<ImageBuffer<Rgba<u8>, Vec<u8>>> {
    if frame.len() != h * w * c {
        return Err(Error::invalid("frame data does not match dims"));
    }
    if !(c == 1 || c == 3 || c == 4) {
        return Err(Error::invalid(format!("cannot dump {c}-channel latents as images")));
    }
    let mut img = ImageBuffer::new((w * PIXEL_FACTOR) as u32, (h * PIXEL_FACTOR) as u32);
    for y in 0..h * PIXEL_FACTOR {
        for x in 0..w * PIXEL_FACTOR {
            let src = &frame[((y / PIXEL_FACTOR) * w + x / PIXEL_FACTOR) * c..];
            let to_u8 = |v: f64| ((v + 1.0) * 127.5).clamp(0.0, 255.0).round() as u8;
            let px = match c {
                1 => Rgba([to_u8(src[0]), to_u8(src[0]), to_u8(src[0]), 255]),
                3 => Rgba([to_u8(src[0]), to_u8(src[1]), to_u8(src[2]), 255]),
                _ => Rgba([to_u8(src[0]), to_u8(src[1]), to_u8(src[2]), to_u8(src[3])]),
            };
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    Ok(img)
}

/// Load a directory of images as single-frame latent videos, sorted by name.
pub fn ingest_subject(dir: &Path, h: usize, w: usize, c: usize) -> Result<Vec<LatentVideo>> {
    let files: Vec<PathBuf> = sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.is_file() && is_frame_file(p))
        .collect();
    if files.is_empty() {
        return Err(Error::invalid(format!("no frame files in {}", dir.display())));
    }
    let mut out = Vec::with_capacity(files.len());
    for f in files {
        let frame = load_frame(&f, h, w, c)?;
        out.push(LatentVideo::from_data(frame, [1, 1, h, w, c])?);
    }
    Ok(out)
}

/// Evenly stride-sample `len` source frames down to `target`.
pub fn stride_indices(len: usize, target: usize) -> Result<Vec<usize>> {
    if len < target {
        return Err(Error::invalid(format!(
            "video has {len} frames but {target} are required"
        )));
    }
    Ok((0..target).map(|i| i * len / target).collect())
}

/// One ingested motion clip: resampled video plus an optional caption read
/// from `caption.txt` in the clip directory.
pub struct IngestedClip {
    pub video: LatentVideo,
    pub caption: Option<String>,
    pub name: String,
}

/// Load a directory of videos, each a subdirectory of ordered frame files.
pub fn ingest_motion(dir: &Path, frames: usize, h: usize, w: usize, c: usize) -> Result<Vec<IngestedClip>> {
    let subdirs: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()).collect();
    if subdirs.is_empty() {
        return Err(Error::invalid(format!("no video directories in {}", dir.display())));
    }
    let mut out = Vec::with_capacity(subdirs.len());
    for sub in subdirs {
        let files: Vec<PathBuf> = sorted_entries(&sub)?
            .into_iter()
            .filter(|p| p.is_file() && is_frame_file(p))
            .collect();
        if files.is_empty() {
            return Err(Error::invalid(format!("no frame files in {}", sub.display())));
        }
        let picks = stride_indices(files.len(), frames)?;
        let mut data = Vec::with_capacity(frames * h * w * c);
        for &i in &picks {
            data.extend(load_frame(&files[i], h, w, c)?);
        }
        let caption_path = sub.join("caption.txt");
        let caption = if caption_path.is_file() {
            std::fs::read_to_string(&caption_path)
                .ok()
                .map(|s| s.lines().next().unwrap_or("").trim().to_string())
                .filter(|s| !s.is_empty())
        } else {
            None
        };
        out.push(IngestedClip {
            video: LatentVideo::from_data(data, [1, frames, h, w, c])?,
            caption,
            name: sub
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("clip")
                .to_string(),
        });
    }
    Ok(out)
}

/// Save a latent video as a rank-5 tensor container.
pub fn save_video(path: &Path, video: &LatentVideo) -> Result<()> {
    storage::save_tensor(path, &video.to_vec(), &video.dims())
}

pub fn load_video(path: &Path) -> Result<LatentVideo> {
    let (data, shape) = storage::load_tensor(path)?;
    if shape.len() != 5 {
        return Err(Error::ShapeMismatch {
            context: "load_video",
            expected: vec![0; 5],
            got: shape,
        });
    }
    LatentVideo::from_data(data, [shape[0], shape[1], shape[2], shape[3], shape[4]])
}

/// Dump a video's frames as PNGs (`frame_000.png`, ...) when the channel
/// count is image-representable.
pub fn dump_frames(dir: &Path, video: &LatentVideo) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let [_, f, h, w, c] = video.dims();
    let mut paths = Vec::with_capacity(f);
    for i in 0..f {
        let img = latent_to_pixels(&video.frame_data(0, i), h, w, c)?;
        let path = dir.join(format!("frame_{i:03}.png"));
        img.save(&path)
            .map_err(|e| Error::invalid(format!("cannot write {}: {e}", path.display())))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stride_sampling_examples() {
        assert_eq!(stride_indices(16, 8).unwrap(), vec![0, 2, 4, 6, 8, 10, 12, 14]);
        assert_eq!(stride_indices(8, 8).unwrap(), (0..8).collect::<Vec<_>>());
        assert!(stride_indices(4, 8).is_err());
    }

    #[test]
    fn pixel_round_trip_preserves_constant_frames() {
        // A constant latent survives pool(unpool(x)) exactly up to 8-bit
        // quantization.
        let frame = vec![0.5; 4 * 4 * 3];
        let img = latent_to_pixels(&frame, 4, 4, 3).unwrap();
        let back = pixels_to_latent(&img, 4, 4, 3).unwrap();
        for v in back {
            assert!((v - 0.5).abs() < 1.0 / 127.5);
        }
    }

    #[test]
    fn ingest_subject_sorted_and_validated() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b.png", "a.png", "c.png"] {
            let img = latent_to_pixels(&vec![0.0; 4 * 4 * 4], 4, 4, 4).unwrap();
            img.save(dir.path().join(name)).unwrap();
        }
        let videos = ingest_subject(dir.path(), 4, 4, 4).unwrap();
        assert_eq!(videos.len(), 3);
        let empty = tempfile::tempdir().unwrap();
        assert!(ingest_subject(empty.path(), 4, 4, 4).is_err());
    }

    #[test]
    fn ingest_motion_with_stride_and_caption() {
        let dir = tempfile::tempdir().unwrap();
        let clip = dir.path().join("clip0");
        std::fs::create_dir_all(&clip).unwrap();
        for i in 0..16 {
            let v = i as f64 / 8.0 - 1.0;
            let img = latent_to_pixels(&vec![v; 4 * 4 * 4], 4, 4, 4).unwrap();
            img.save(clip.join(format!("f{i:02}.png"))).unwrap();
        }
        std::fs::write(clip.join("caption.txt"), "a blob drifting\n").unwrap();
        let clips = ingest_motion(dir.path(), 8, 4, 4, 4).unwrap();
        assert_eq!(clips.len(), 1);
        assert_eq!(clips[0].video.dims(), [1, 8, 4, 4, 4]);
        assert_eq!(clips[0].caption.as_deref(), Some("a blob drifting"));
        // Frame 1 of the resampled clip is source frame 2.
        let want = 2.0 / 8.0 - 1.0;
        let got = clips[0].video.frame_data(0, 1)[0];
        assert!((got - want).abs() < 1.0 / 127.5);
    }

    #[test]
    fn video_container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let video = LatentVideo::from_data(
            crate::rng::normal_vec(&mut crate::rng::seeded(1), 2 * 3 * 2 * 2 * 2),
            [1, 2, 3, 2, 2 * 2],
        )
        .unwrap();
        let path = dir.path().join("v.vt");
        save_video(&path, &video).unwrap();
        let back = load_video(&path).unwrap();
        assert_eq!(back.to_vec(), video.to_vec());
        assert_eq!(back.dims(), video.dims());
    }

    #[test]
    fn frame_dump_writes_pngs() {
        let dir = tempfile::tempdir().unwrap();
        let video = LatentVideo::zeros([1, 3, 4, 4, 4]);
        let paths = dump_frames(&dir.path().join("out"), &video).unwrap();
        assert_eq!(paths.len(), 3);
        assert!(paths.iter().all(|p| p.is_file()));
        let odd = LatentVideo::zeros([1, 2, 4, 4, 2]);
        assert!(dump_frames(&dir.path().join("odd"), &odd).is_err());
    }
}
