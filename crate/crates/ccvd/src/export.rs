//! Video directories, lossless frame export, and attention heatmap dumps.

use std::collections::BTreeMap;
use std::path::Path;

use image::{GrayImage, RgbImage};
use ndarray::Array4;

use crate::config::{read_kv_file, write_kv_file, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::tensorio;
use crate::video::LatentVideo;

/// Write a generated video as `video.bin` plus a small metadata file.
pub fn save_video_dir(dir: &Path, video: &LatentVideo, meta: &[(&str, String)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    tensorio::write_array4(&dir.join("video.bin"), video.data())?;
    let mut pairs: Vec<(&str, String)> = vec![("version", FORMAT_VERSION.to_string())];
    pairs.extend(meta.iter().map(|(k, v)| (*k, format!("\"{v}\""))));
    write_kv_file(&dir.join("meta.cfg"), &pairs)
}

pub fn load_video_dir(dir: &Path) -> Result<(LatentVideo, BTreeMap<String, toml::Value>)> {
    let data = tensorio::read_array4(&dir.join("video.bin"))?;
    let meta = read_kv_file(&dir.join("meta.cfg")).unwrap_or_default();
    Ok((LatentVideo::from_array_unchecked(data), meta))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Export every frame as a lossless PNG plus an index file listing them.
pub fn export_frames(video: &LatentVideo, out: &Path) -> Result<Vec<String>> {
    let (n_v, h, w, c) = video.shape();
    if c != 3 && c != 1 {
        return Err(Error::Config(format!(
            "frame export supports 1 or 3 channels, video has {c}"
        )));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let mut names = Vec::with_capacity(n_v);
    for f in 0..n_v {
        let name = format!("frame_{f:03}.png");
        let path = out.join(&name);
        let mut img = RgbImage::new(w as u32, h as u32);
        for i in 0..h {
            for j in 0..w {
                let px = if c == 3 {
                    [
                        to_u8(video.data()[[f, i, j, 0]]),
                        to_u8(video.data()[[f, i, j, 1]]),
                        to_u8(video.data()[[f, i, j, 2]]),
                    ]
                } else {
                    let g = to_u8(video.data()[[f, i, j, 0]]);
                    [g, g, g]
                };
                img.put_pixel(j as u32, i as u32, image::Rgb(px));
            }
        }
        img.save(&path)
            .map_err(|e| Error::Config(format!("png write {}: {e}", path.display())))?;
        names.push(name);
    }
    let pairs: Vec<(String, String)> = std::iter::once(("version".to_string(), FORMAT_VERSION.to_string()))
        .chain(std::iter::once(("frames".to_string(), n_v.to_string())))
        .chain(
            names
                .iter()
                .enumerate()
                .map(|(i, n)| (format!("frame_{i}"), format!("\"{n}\""))),
        )
        .collect();
    let refs: Vec<(&str, String)> = pairs.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    write_kv_file(&out.join("index.cfg"), &refs)?;
    Ok(names)
}

/// Token-averaged attention maps rendered as one grayscale grid per region:
/// frames side by side, separated by a one-pixel gutter.
pub fn export_attention_grid(map: &Array4<f64>, path: &Path) -> Result<()> {
    let (n_v, h, w, e) = map.dim();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut mean = Array4::zeros((n_v, h, w, 1));
    for f in 0..n_v {
        for i in 0..h {
            for j in 0..w {
                let m = (0..e).map(|k| map[[f, i, j, k]]).sum::<f64>() / e as f64;
                mean[[f, i, j, 0]] = m;
                lo = lo.min(m);
                hi = hi.max(m);
            }
        }
    }
    let span = (hi - lo).max(1e-12);
    let gw = (w + 1) * n_v - 1;
    let mut img = GrayImage::new(gw as u32, h as u32);
    for f in 0..n_v {
        for i in 0..h {
            for j in 0..w {
                let v = (mean[[f, i, j, 0]] - lo) / span;
                let x = f * (w + 1) + j;
                img.put_pixel(x as u32, i as u32, image::Luma([to_u8(v)]));
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::Config(format!("png write {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn video_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = LatentVideo::standard_normal((2, 4, 4, 3), 1, 0);
        save_video_dir(dir.path(), &v, &[("prompt", "a [V1]".into())]).unwrap();
        let (back, meta) = load_video_dir(dir.path()).unwrap();
        assert_eq!(back, v);
        assert_eq!(meta["prompt"].as_str().unwrap(), "a [V1]");
    }

    #[test]
    fn frames_export_with_index() {
        let dir = tempfile::tempdir().unwrap();
        let v = LatentVideo::standard_normal((3, 4, 5, 3), 1, 0);
        let names = export_frames(&v, dir.path()).unwrap();
        assert_eq!(names.len(), 3);
        for n in &names {
            assert!(dir.path().join(n).exists());
        }
        let idx = read_kv_file(&dir.path().join("index.cfg")).unwrap();
        assert_eq!(idx["frames"].as_integer().unwrap(), 3);
    }

    #[test]
    fn attention_grid_writes_png() {
        let dir = tempfile::tempdir().unwrap();
        let map = Array4::from_shape_fn((2, 3, 3, 2), |(f, i, j, k)| {
            (f + i + j + k) as f64 * 0.1
        });
        let p = dir.path().join("attn.png");
        export_attention_grid(&map, &p).unwrap();
        assert!(p.exists());
    }
}
