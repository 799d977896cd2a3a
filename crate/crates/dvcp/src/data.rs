//! Frame-sequence ingestion, synthetic clip generation, and crop sampling.
//!
//! Frames are RGB with values in [0,1], held channel-first as (T, 3, H, W).
//! On disk the canonical form is a directory of 8-bit PNG frames in
//! lexicographic order; a planar YUV 4:2:0 reader with declared geometry is
//! provided for raw test clips.

use std::path::Path;

use ndarray::{Array3, Array4, ArrayView3, Axis, s};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

/// A short clip of frames with uniform spatial size; the unit of training
/// and evaluation.
#[derive(Debug, Clone)]
pub struct VideoSample {
    /// (T, 3, H, W), values in [0,1].
    frames: Array4<f32>,
    pub frame_rate: Option<f32>,
    pub source_id: String,
}

/// A shared crop window applied to every frame of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropSpec {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

impl VideoSample {
    pub fn new(frames: Array4<f32>, frame_rate: Option<f32>, source_id: String) -> Result<Self> {
        let (t, c, _, _) = frames.dim();
        if t == 0 {
            return Err(Error::EmptySample);
        }
        if c != 3 {
            return Err(Error::invalid(format!("expected 3 channels, got {c}")));
        }
        if frames.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("pixel values outside [0,1]"));
        }
        Ok(Self {
            frames,
            frame_rate,
            source_id,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.dim().2
    }

    pub fn width(&self) -> usize {
        self.frames.dim().3
    }

    pub fn frame(&self, t: usize) -> ArrayView3<'_, f32> {
        self.frames.index_axis(Axis(0), t)
    }

    pub fn frames(&self) -> &Array4<f32> {
        &self.frames
    }

    /// Crop all frames with one shared window.
    pub fn crop(&self, spec: CropSpec) -> Result<VideoSample> {
        let (h, w) = (self.height(), self.width());
        if spec.top + spec.size > h || spec.left + spec.size > w {
            return Err(Error::CropTooLarge {
                size: spec.size,
                h,
                w,
            });
        }
        let frames = self
            .frames
            .slice(s![
                ..,
                ..,
                spec.top..spec.top + spec.size,
                spec.left..spec.left + spec.size
            ])
            .to_owned();
        Ok(VideoSample {
            frames,
            frame_rate: self.frame_rate,
            source_id: self.source_id.clone(),
        })
    }
}

/// Load `count` frames starting at `start` from a directory of 8-bit RGB
/// images in lexicographic filename order.
pub fn load_frame_sequence(path: &Path, start: usize, count: usize) -> Result<VideoSample> {
    if count == 0 {
        return Err(Error::EmptySample);
    }
    let mut entries: Vec<_> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("PNG")
            )
        })
        .collect();
    entries.sort();
    if entries.len() < start + count {
        return Err(Error::FrameCount {
            what: format!("{}", path.display()),
            expected: start + count,
            found: entries.len(),
        });
    }
    let mut frames: Option<Array4<f32>> = None;
    for (i, file) in entries[start..start + count].iter().enumerate() {
        let img = image::open(file)
            .map_err(|e| Error::Image {
                path: file.clone(),
                source: e,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let store = frames.get_or_insert_with(|| Array4::zeros((count, 3, h, w)));
        let (_, _, sh, sw) = store.dim();
        if (h, w) != (sh, sw) {
            return Err(Error::InconsistentFrameSize {
                first_w: sw,
                first_h: sh,
                w,
                h,
            });
        }
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    store[[i, c, y, x]] = p.0[c] as f32 / 255.0;
                }
            }
        }
    }
    VideoSample::new(
        frames.expect("count > 0"),
        None,
        path.display().to_string(),
    )
}

/// Load `count` frames from a planar 8-bit YUV 4:2:0 file with declared
/// geometry, converting to RGB with BT.601 coefficients.
pub fn load_yuv420(
    path: &Path,
    width: usize,
    height: usize,
    start: usize,
    count: usize,
) -> Result<VideoSample> {
    if count == 0 {
        return Err(Error::EmptySample);
    }
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let frame_bytes = width * height + 2 * (width / 2) * (height / 2);
    let available = data.len() / frame_bytes;
    if available < start + count {
        return Err(Error::FrameCount {
            what: format!("{}", path.display()),
            expected: start + count,
            found: available,
        });
    }
    let mut frames = Array4::<f32>::zeros((count, 3, height, width));
    for t in 0..count {
        let base = (start + t) * frame_bytes;
        let y_plane = &data[base..base + width * height];
        let u_plane = &data[base + width * height..base + width * height + (width / 2) * (height / 2)];
        let v_plane = &data[base + width * height + (width / 2) * (height / 2)..base + frame_bytes];
        for yy in 0..height {
            for xx in 0..width {
                let y = y_plane[yy * width + xx] as f32;
                let u = u_plane[(yy / 2) * (width / 2) + xx / 2] as f32 - 128.0;
                let v = v_plane[(yy / 2) * (width / 2) + xx / 2] as f32 - 128.0;
                // BT.601 full-range conversion.
                let r = y + 1.402 * v;
                let g = y - 0.344136 * u - 0.714136 * v;
                let b = y + 1.772 * u;
                frames[[t, 0, yy, xx]] = (r / 255.0).clamp(0.0, 1.0);
                frames[[t, 1, yy, xx]] = (g / 255.0).clamp(0.0, 1.0);
                frames[[t, 2, yy, xx]] = (b / 255.0).clamp(0.0, 1.0);
            }
        }
    }
    VideoSample::new(frames, None, path.display().to_string())
}

/// Write a sample to `dir` as 8-bit PNG frames named `%06d.png`.
pub fn save_frame_sequence(sample: &VideoSample, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for t in 0..sample.len() {
        let frame = sample.frame(t);
        let (_, h, w) = frame.dim();
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    quantize_u8(frame[[0, y, x]]),
                    quantize_u8(frame[[1, y, x]]),
                    quantize_u8(frame[[2, y, x]]),
                ];
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        let file = dir.join(format!("{t:06}.png"));
        img.save(&file).map_err(|e| Error::Image {
            path: file.clone(),
            source: e,
        })?;
    }
    Ok(())
}

pub fn quantize_u8(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Draw one crop window from a seeded generator and apply it to all frames.
pub fn random_crop(sample: &VideoSample, size: usize, rng_seed: u64) -> Result<VideoSample> {
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    random_crop_with_rng(sample, size, &mut rng)
}

pub fn random_crop_with_rng<R: Rng>(
    sample: &VideoSample,
    size: usize,
    rng: &mut R,
) -> Result<VideoSample> {
    let (h, w) = (sample.height(), sample.width());
    if size > h || size > w {
        return Err(Error::CropTooLarge { size, h, w });
    }
    let top = if h == size { 0 } else { rng.random_range(0..=h - size) };
    let left = if w == size { 0 } else { rng.random_range(0..=w - size) };
    sample.crop(CropSpec { top, left, size })
}

/// Generate a clip whose first frame is a seeded smooth periodic texture and
/// whose frame t is frame 0 translated by (t*dx, t*dy) with wrap-around, so
/// ground-truth flow is exactly (dx, dy) everywhere.
pub fn synth_sequence(
    seed: u64,
    t: usize,
    h: usize,
    w: usize,
    motion: (f32, f32),
) -> Result<VideoSample> {
    if t == 0 {
        return Err(Error::EmptySample);
    }
    let (dx, dy) = motion;
    if (dx.abs() * (t as f32 - 1.0)) >= w as f32 || (dy.abs() * (t as f32 - 1.0)) >= h as f32 {
        return Err(Error::MotionTooLarge {
            dx,
            dy,
            t,
            h,
            w,
        });
    }
    let base = smooth_texture(seed, h, w);
    let mut frames = Array4::<f32>::zeros((t, 3, h, w));
    for ti in 0..t {
        let (sx, sy) = (ti as f32 * dx, ti as f32 * dy);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    frames[[ti, c, y, x]] =
                        sample_wrap_bilinear(&base, c, y as f32 - sy, x as f32 - sx);
                }
            }
        }
    }
    VideoSample::new(frames, None, format!("synth-{seed}"))
}

/// Periodic smooth texture: white noise circularly blurred per channel,
/// normalized into [0.05, 0.95].
fn smooth_texture(seed: u64, h: usize, w: usize) -> Array3<f32> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut tex = Array3::<f32>::zeros((3, h, w));
    for c in 0..3 {
        let noise: Vec<f32> = (0..h * w).map(|_| rng.random_range(0.0f32..1.0)).collect();
        // Two passes of a circular 5-tap box blur in each direction.
        let mut cur = noise;
        for _ in 0..2 {
            let mut next = vec![0.0f32; h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for k in -2i64..=2 {
                        let xx = (x as i64 + k).rem_euclid(w as i64) as usize;
                        acc += cur[y * w + xx];
                    }
                    next[y * w + x] = acc / 5.0;
                }
            }
            let mut next2 = vec![0.0f32; h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for k in -2i64..=2 {
                        let yy = (y as i64 + k).rem_euclid(h as i64) as usize;
                        acc += next[yy * w + x];
                    }
                    next2[y * w + x] = acc / 5.0;
                }
            }
            cur = next2;
        }
        let (mut lo, mut hi) = (f32::MAX, f32::MIN);
        for &v in &cur {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = (hi - lo).max(1e-6);
        for y in 0..h {
            for x in 0..w {
                tex[[c, y, x]] = 0.05 + 0.9 * (cur[y * w + x] - lo) / span;
            }
        }
    }
    tex
}

fn sample_wrap_bilinear(tex: &Array3<f32>, c: usize, y: f32, x: f32) -> f32 {
    let (_, h, w) = tex.dim();
    let y0 = y.floor();
    let x0 = x.floor();
    let wy = y - y0;
    let wx = x - x0;
    let yi = |v: f32| (v as i64).rem_euclid(h as i64) as usize;
    let xi = |v: f32| (v as i64).rem_euclid(w as i64) as usize;
    let (y0i, y1i) = (yi(y0), yi(y0 + 1.0));
    let (x0i, x1i) = (xi(x0), xi(x0 + 1.0));
    (1.0 - wy) * (1.0 - wx) * tex[[c, y0i, x0i]]
        + (1.0 - wy) * wx * tex[[c, y0i, x1i]]
        + wy * (1.0 - wx) * tex[[c, y1i, x0i]]
        + wy * wx * tex[[c, y1i, x1i]]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_zero_motion_is_constant() {
        let s = synth_sequence(7, 4, 16, 16, (0.0, 0.0)).unwrap();
        for t in 1..4 {
            assert_eq!(s.frame(0), s.frame(t));
        }
    }

    #[test]
    fn synth_integer_motion_is_column_shift() {
        let s = synth_sequence(3, 2, 12, 12, (1.0, 0.0)).unwrap();
        // frame1(y, x) = frame0(y, x-1) with wrap-around
        for c in 0..3 {
            for y in 0..12 {
                for x in 0..12 {
                    let src_x = (x + 12 - 1) % 12;
                    let got = s.frame(1)[[c, y, x]];
                    let want = s.frame(0)[[c, y, src_x]];
                    assert!(
                        (got - want).abs() < 1e-6,
                        "mismatch at c{c} y{y} x{x}: {got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn synth_seeds_differ() {
        let a = synth_sequence(1, 1, 16, 16, (0.0, 0.0)).unwrap();
        let b = synth_sequence(2, 1, 16, 16, (0.0, 0.0)).unwrap();
        assert_ne!(a.frame(0), b.frame(0));
    }

    #[test]
    fn synth_motion_too_large() {
        assert!(matches!(
            synth_sequence(1, 10, 8, 8, (1.0, 0.0)),
            Err(Error::MotionTooLarge { .. })
        ));
    }

    #[test]
    fn crop_identity_when_size_matches() {
        let s = synth_sequence(5, 3, 16, 16, (0.5, 0.0)).unwrap();
        for seed in [0u64, 1, 99] {
            let c = random_crop(&s, 16, seed).unwrap();
            assert_eq!(c.frames(), s.frames());
        }
    }

    #[test]
    fn crop_is_deterministic() {
        let s = synth_sequence(5, 3, 32, 32, (0.5, 0.0)).unwrap();
        let a = random_crop(&s, 16, 42).unwrap();
        let b = random_crop(&s, 16, 42).unwrap();
        assert_eq!(a.frames(), b.frames());
    }

    #[test]
    fn crop_too_large_errors() {
        let s = synth_sequence(5, 3, 16, 16, (0.0, 0.0)).unwrap();
        assert!(matches!(
            random_crop(&s, 17, 0),
            Err(Error::CropTooLarge { .. })
        ));
    }

    #[test]
    fn crop_offsets_shared_across_frames() {
        // Frames that are constant per frame index: any crop keeps each
        // output frame constant, and equal to its source frame's constant.
        let mut frames = Array4::<f32>::zeros((4, 3, 20, 20));
        for t in 0..4 {
            frames.index_axis_mut(Axis(0), t).fill(t as f32 / 10.0);
        }
        let s = VideoSample::new(frames, None, "const".into()).unwrap();
        let c = random_crop(&s, 8, 7).unwrap();
        for t in 0..4 {
            let f = c.frame(t);
            assert!(f.iter().all(|&v| (v - t as f32 / 10.0).abs() < 1e-7));
        }
    }

    #[test]
    fn empty_sample_requested() {
        assert!(matches!(
            synth_sequence(1, 0, 8, 8, (0.0, 0.0)),
            Err(Error::EmptySample)
        ));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_frame_sequence(dir.path(), 0, 0),
            Err(Error::EmptySample)
        ));
    }

    #[test]
    fn save_load_roundtrip_within_8bit() {
        let s = synth_sequence(11, 3, 16, 16, (0.3, 0.7)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_frame_sequence(&s, dir.path()).unwrap();
        let r = load_frame_sequence(dir.path(), 0, 3).unwrap();
        assert_eq!(r.len(), 3);
        for t in 0..3 {
            let d = (&s.frame(t) - &r.frame(t)).mapv(f32::abs);
            let max = d.iter().fold(0.0f32, |a, &b| a.max(b));
            assert!(max <= 1.0 / 255.0 + 1e-6, "max delta {max}");
        }
    }

    #[test]
    fn load_partial_range() {
        let s = synth_sequence(11, 7, 16, 16, (1.0, 0.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_frame_sequence(&s, dir.path()).unwrap();
        let r = load_frame_sequence(dir.path(), 2, 3).unwrap();
        assert_eq!(r.len(), 3);
        let d = (&s.frame(2) - &r.frame(0)).mapv(f32::abs);
        assert!(d.iter().all(|&v| v <= 1.0 / 255.0 + 1e-6));
    }

    #[test]
    fn load_too_few_frames_errors() {
        let s = synth_sequence(11, 2, 16, 16, (0.0, 0.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_frame_sequence(&s, dir.path()).unwrap();
        assert!(matches!(
            load_frame_sequence(dir.path(), 0, 7),
            Err(Error::FrameCount { .. })
        ));
    }

    #[test]
    fn pixel_range_mapping() {
        let mut img = image::RgbImage::new(4, 4);
        img.put_pixel(0, 0, image::Rgb([255, 0, 128]));
        let dir = tempfile::tempdir().unwrap();
        img.save(dir.path().join("000000.png")).unwrap();
        let s = load_frame_sequence(dir.path(), 0, 1).unwrap();
        assert_eq!(s.frame(0)[[0, 0, 0]], 1.0);
        assert_eq!(s.frame(0)[[1, 0, 0]], 0.0);
        assert!((s.frame(0)[[2, 0, 0]] - 128.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn yuv420_reader_geometry() {
        let (w, h) = (8usize, 6usize);
        let frame_bytes = w * h + 2 * (w / 2) * (h / 2);
        // Two frames: first gray (Y=128), second bright (Y=235). Neutral chroma.
        let mut raw = Vec::new();
        for y_val in [128u8, 235u8] {
            raw.extend(std::iter::repeat_n(y_val, w * h));
            raw.extend(std::iter::repeat_n(128u8, 2 * (w / 2) * (h / 2)));
        }
        assert_eq!(raw.len(), 2 * frame_bytes);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.yuv");
        std::fs::write(&path, &raw).unwrap();
        let s = load_yuv420(&path, w, h, 0, 2).unwrap();
        assert_eq!((s.len(), s.height(), s.width()), (2, h, w));
        assert!((s.frame(0)[[0, 0, 0]] - 128.0 / 255.0).abs() < 1e-5);
        assert!((s.frame(1)[[1, 3, 5]] - 235.0 / 255.0).abs() < 1e-5);
        assert!(matches!(
            load_yuv420(&path, w, h, 0, 3),
            Err(Error::FrameCount { .. })
        ));
    }
}
