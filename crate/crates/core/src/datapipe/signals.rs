//! Per-frame and per-clip measurements on raw pixels.

use crate::error::{Error, Result};
use crate::videovae::VideoClip;

pub const HIST_BINS: usize = 16;
/// Mean per-channel L1 histogram distance above which a cut is declared.
pub const DEFAULT_SCENE_THRESHOLD: f64 = 0.6;
pub const BLOCK: usize = 8;
pub const SEARCH: isize = 4;
pub const MIN_MOTION_FRAMES: usize = 6;

fn histograms(clip: &VideoClip, t: usize) -> Vec<[f64; HIST_BINS]> {
    let (_, c, h, w) = clip.dims();
    let plane = h * w;
    let frame = clip.frame(t);
    (0..c)
        .map(|ch| {
            let mut hist = [0.0; HIST_BINS];
            for &v in &frame[ch * plane..(ch + 1) * plane] {
                let bin = (((v as f64 + 1.0) * 0.5 * HIST_BINS as f64).floor()).clamp(0.0, (HIST_BINS - 1) as f64);
                hist[bin as usize] += 1.0;
            }
            hist.iter_mut().for_each(|b| *b /= plane as f64);
            hist
        })
        .collect()
}

/// Frame indices `t` where the histogram distance between frames `t − 1` and
/// `t` exceeds `threshold`. The distance is the channel mean of the L1
/// distance between normalized 16-bin histograms, so it lies in `[0, 2]`.
pub fn detect_scenes(clip: &VideoClip, threshold: f64) -> Vec<usize> {
    let t = clip.frames();
    if t < 2 {
        return Vec::new();
    }
    let hists: Vec<_> = (0..t).map(|i| histograms(clip, i)).collect();
    (1..t)
        .filter(|&i| {
            let d: f64 = hists[i - 1]
                .iter()
                .zip(&hists[i])
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
                .sum::<f64>()
                / hists[i].len() as f64;
            d > threshold
        })
        .collect()
}

/// Splits `[0, frames)` at the given cut indices.
pub fn scene_ranges(frames: usize, cuts: &[usize]) -> Vec<(usize, usize)> {
    let mut bounds = vec![0];
    bounds.extend(cuts.iter().copied().filter(|&c| c > 0 && c < frames));
    bounds.push(frames);
    bounds.windows(2).map(|w| (w[0], w[1])).collect()
}

fn reflect101(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Variance of the 5-point Laplacian over a row-major `h × w` grayscale
/// frame, with reflect-101 borders.
pub fn sharpness_score(frame: &[f64], h: usize, w: usize) -> Result<f64> {
    if frame.len() != h * w || h == 0 || w == 0 {
        return Err(Error::dim("H/W", format!("{} values for a {h}×{w} frame", frame.len())));
    }
    let at = |y: isize, x: isize| frame[reflect101(y, h) * w + reflect101(x, w)];
    let mut resp = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            resp.push(at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4.0 * at(y, x));
        }
    }
    let n = resp.len() as f64;
    let mean = resp.iter().sum::<f64>() / n;
    Ok(resp.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n)
}

/// Clip values in `[-1, 1]` rescaled to `[0, 255]`.
pub fn gray_8bit(clip: &VideoClip, t: usize) -> Vec<f64> {
    clip.gray_frame(t).into_iter().map(|v| (v + 1.0) * 127.5).collect()
}

/// First, middle and last frame.
pub fn sample_frames(frames: usize) -> [usize; 3] {
    [0, (frames - 1) / 2, frames - 1]
}

/// Mean sharpness of the three sampled frames on the 8-bit scale.
pub fn clip_sharpness(clip: &VideoClip) -> Result<f64> {
    let (t, _, h, w) = clip.dims();
    let mut total = 0.0;
    for f in sample_frames(t) {
        total += sharpness_score(&gray_8bit(clip, f), h, w)?;
    }
    Ok(total / 3.0)
}

/// Best integer displacement of every 8×8 block of `a` inside `b` within
/// ±4 px. Blocks start at offset 4 so every candidate stays in the frame.
/// Ties prefer the smaller displacement, then raster order.
pub fn block_displacements(a: &[f64], b: &[f64], h: usize, w: usize) -> Vec<(isize, isize)> {
    let s = SEARCH as usize;
    let mut out = Vec::new();
    let mut y0 = s;
    while y0 + BLOCK + s <= h {
        let mut x0 = s;
        while x0 + BLOCK + s <= w {
            let mut best = (f64::INFINITY, 0isize, (0isize, 0isize));
            for dy in -SEARCH..=SEARCH {
                for dx in -SEARCH..=SEARCH {
                    let mut sad = 0.0;
                    for y in 0..BLOCK {
                        let ra = (y0 + y) * w + x0;
                        let rb = ((y0 + y) as isize + dy) as usize * w;
                        for x in 0..BLOCK {
                            sad += (a[ra + x] - b[rb + ((x0 + x) as isize + dx) as usize]).abs();
                        }
                    }
                    let mag = dy * dy + dx * dx;
                    if sad < best.0 || (sad == best.0 && mag < best.1) {
                        best = (sad, mag, (dy, dx));
                    }
                }
            }
            out.push(best.2);
            x0 += BLOCK;
        }
        y0 += BLOCK;
    }
    out
}

/// Mean block displacement magnitude in pixels over the start, middle and
/// end frame pairs.
pub fn motion_amplitude(clip: &VideoClip) -> Result<f64> {
    let (t, _, h, w) = clip.dims();
    if t < MIN_MOTION_FRAMES {
        return Err(Error::Input(format!("motion needs at least {MIN_MOTION_FRAMES} frames, got {t}")));
    }
    if h < BLOCK + 2 * SEARCH as usize || w < BLOCK + 2 * SEARCH as usize {
        return Err(Error::dim("H/W", format!("{h}×{w} frame is too small for block matching")));
    }
    let mid = (t - 1) / 2;
    let mut sum = 0.0;
    let mut n = 0usize;
    for start in [0, mid, t - 2] {
        let a = clip.gray_frame(start);
        let b = clip.gray_frame(start + 1);
        for (dy, dx) in block_displacements(&a, &b, h, w) {
            sum += ((dy * dy + dx * dx) as f64).sqrt();
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

/// 64-bit mean-threshold hash of a grayscale frame averaged onto an 8×8 grid.
pub fn average_hash(frame: &[f64], h: usize, w: usize) -> u64 {
    let mut cells = [0.0f64; 64];
    let mut counts = [0usize; 64];
    for y in 0..h {
        for x in 0..w {
            let k = (y * 8 / h) * 8 + x * 8 / w;
            cells[k] += frame[y * w + x];
            counts[k] += 1;
        }
    }
    for (c, n) in cells.iter_mut().zip(counts) {
        *c /= n.max(1) as f64;
    }
    let mean = cells.iter().sum::<f64>() / 64.0;
    cells
        .iter()
        .enumerate()
        .fold(0u64, |acc, (i, &c)| if c > mean { acc | (1 << i) } else { acc })
}

/// Hashes of the three sampled frames.
pub fn clip_hash(clip: &VideoClip) -> [u64; 3] {
    let (t, _, h, w) = clip.dims();
    sample_frames(t).map(|f| average_hash(&clip.gray_frame(f), h, w))
}

pub fn hamming(a: &[u64; 3], b: &[u64; 3]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texture(y: f64, x: f64) -> f32 {
        (0.35 * (x * 0.9).sin() * (y * 0.7).cos() + 0.25 * (x * 0.37 + y * 0.53).sin() + 0.15 * (y * 1.3).sin()) as f32
    }

    #[test]
    fn hard_cut_detected_and_shift_equivariant() {
        for cut in [40usize, 13, 47] {
            let clip = VideoClip::from_fn(64, 3, 8, 8, 24.0, |t, _, _, _| if t < cut { -1.0 } else { 1.0 }).unwrap();
            assert_eq!(detect_scenes(&clip, DEFAULT_SCENE_THRESHOLD), vec![cut]);
            assert!(detect_scenes(&clip, f64::INFINITY).is_empty());
        }
        let flat = VideoClip::from_fn(10, 3, 8, 8, 24.0, |_, _, _, _| 0.2).unwrap();
        assert!(detect_scenes(&flat, DEFAULT_SCENE_THRESHOLD).is_empty());
        assert_eq!(scene_ranges(64, &[40]), vec![(0, 40), (40, 64)]);
    }

    #[test]
    fn laplacian_closed_forms() {
        assert_eq!(sharpness_score(&[3.0; 36], 6, 6).unwrap(), 0.0);
        let checker: Vec<f64> = (0..64).map(|i| if (i / 8 + i % 8) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert_eq!(sharpness_score(&checker, 8, 8).unwrap(), 64.0);
        let rect: Vec<f64> = (0..48).map(|i| if (i / 8 + i % 8) % 2 == 0 { 0.5 } else { -0.5 }).collect();
        assert_eq!(sharpness_score(&rect, 6, 8).unwrap(), 16.0);
        assert!(sharpness_score(&[1.0; 5], 2, 3).is_err());
    }

    #[test]
    fn reflect_101() {
        assert_eq!(reflect101(-1, 5), 1);
        assert_eq!(reflect101(5, 5), 3);
        assert_eq!(reflect101(-2, 5), 2);
        assert_eq!(reflect101(3, 1), 0);
    }

    #[test]
    fn motion_of_translation_and_static() {
        let moving = VideoClip::from_fn(8, 1, 32, 32, 24.0, |t, _, y, x| texture(y as f64, x as f64 - 2.0 * t as f64)).unwrap();
        let m = motion_amplitude(&moving).unwrap();
        assert!((m - 2.0).abs() <= 0.1, "{m}");
        let still = VideoClip::from_fn(8, 1, 32, 32, 24.0, |_, _, y, x| texture(y as f64, x as f64)).unwrap();
        assert_eq!(motion_amplitude(&still).unwrap(), 0.0);
        let short = VideoClip::from_fn(5, 1, 32, 32, 24.0, |_, _, _, _| 0.0).unwrap();
        assert!(matches!(motion_amplitude(&short), Err(Error::Input(_))));
    }

    #[test]
    fn hash_separates_and_matches() {
        let a = VideoClip::from_fn(6, 1, 32, 32, 24.0, |_, _, y, x| texture(y as f64, x as f64)).unwrap();
        let b = VideoClip::from_fn(6, 1, 32, 32, 24.0, |_, _, y, x| texture(y as f64 + 9.0, x as f64 * 1.7)).unwrap();
        assert_eq!(hamming(&clip_hash(&a), &clip_hash(&a)), 0);
        assert!(hamming(&clip_hash(&a), &clip_hash(&b)) > 12);
    }
}
