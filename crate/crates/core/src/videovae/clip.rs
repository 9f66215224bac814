use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense frame tensor in `(T, C, H, W)` order with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    data: Vec<f32>,
    t: usize,
    c: usize,
    h: usize,
    w: usize,
    pub fps: f64,
}

/// Sidecar describing a raw clip file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipHeader {
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub fps: f64,
}

impl VideoClip {
    pub fn new(data: Vec<f32>, t: usize, c: usize, h: usize, w: usize, fps: f64) -> Result<Self> {
        if t == 0 {
            return Err(Error::dim("T", "clip needs at least one frame"));
        }
        if c != 1 && c != 3 {
            return Err(Error::dim("C", format!("channels must be 1 or 3, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::dim("H/W", "spatial dims must be positive"));
        }
        if data.len() != t * c * h * w {
            return Err(Error::dim(
                "elements",
                format!("expected {} values, got {}", t * c * h * w, data.len()),
            ));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::Input(format!("fps must be positive, got {fps}")));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("clip contains non-finite values".into()));
        }
        Ok(Self { data, t, c, h, w, fps })
    }

    /// Builds a clip by evaluating `f(t, c, y, x)` at every site.
    pub fn from_fn(
        t: usize,
        c: usize,
        h: usize,
        w: usize,
        fps: f64,
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(t * c * h * w);
        for ti in 0..t {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(ti, ci, y, x));
                    }
                }
            }
        }
        Self::new(data, t, c, h, w, fps)
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.t, self.c, self.h, self.w)
    }

    pub fn frames(&self) -> usize {
        self.t
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, t: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[((t * self.c + c) * self.h + y) * self.w + x]
    }

    /// All channels of frame `t`, channel-major.
    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.c * self.h * self.w;
        &self.data[t * n..(t + 1) * n]
    }

    /// Channel-mean of frame `t`, row-major `H × W`.
    pub fn gray_frame(&self, t: usize) -> Vec<f64> {
        let plane = self.h * self.w;
        let frame = self.frame(t);
        (0..plane)
            .map(|p| (0..self.c).map(|c| frame[c * plane + p] as f64).sum::<f64>() / self.c as f64)
            .collect()
    }

    /// Frames `[start, end)` as a new clip.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.t {
            return Err(Error::dim("T", format!("bad frame range [{start}, {end}) for {} frames", self.t)));
        }
        let n = self.c * self.h * self.w;
        Self::new(self.data[start * n..end * n].to_vec(), end - start, self.c, self.h, self.w, self.fps)
    }

    /// Repeats the last frame until the frame count is a multiple of `k`.
    pub fn pad_to_multiple(&self, k: usize) -> Self {
        let target = self.t.div_ceil(k) * k;
        let mut data = self.data.clone();
        let last = self.frame(self.t - 1).to_vec();
        for _ in self.t..target {
            data.extend_from_slice(&last);
        }
        Self {
            data,
            t: target,
            ..self.clone()
        }
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.t, self.c, self.h, self.w), &Device::Cpu)?;
        Ok(t.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor, fps: f64) -> Result<Self> {
        let (tt, c, h, w) = t.dims4()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(data, tt, c, h, w, fps)
    }

    pub fn header(&self) -> ClipHeader {
        ClipHeader {
            t: self.t,
            c: self.c,
            h: self.h,
            w: self.w,
            fps: self.fps,
        }
    }

    /// Writes the little-endian f32 payload to `path` and the JSON sidecar next to it.
    pub fn write_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self.data.iter().flat_map(|x| x.to_le_bytes()).collect();
        fs::write(path, bytes)?;
        fs::write(sidecar_path(path), serde_json::to_vec(&self.header())?)?;
        Ok(())
    }

    pub fn read_raw(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let header: ClipHeader = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
        let data = read_f32_le(path)?;
        Self::new(data, header.t, header.c, header.h, header.w, header.fps)
    }
}

/// Three-channel test clip: a bright disc with a soft two-pixel rim drifting
/// right one pixel per frame over a colour gradient. `phase` shifts the start
/// position.
pub fn moving_blob_clip(t: usize, h: usize, w: usize, phase: usize) -> Result<VideoClip> {
    let (hf, wf) = (h as f32, w as f32);
    let r = hf.min(wf) * 0.19;
    VideoClip::from_fn(t, 3, h, w, 24.0, |ti, c, y, x| {
        let cx = (wf * 0.25 + (ti + phase) as f32) % wf;
        let d = ((x as f32 - cx).powi(2) + (y as f32 - hf * 0.5).powi(2)).sqrt();
        let blob = -0.2 + ((r + 1.0 - d) / 2.0).clamp(0.0, 1.0);
        let grad = (x as f32 / wf - 0.5) * (c as f32 - 1.0) * 0.5 + (y as f32 / hf - 0.5) * 0.3;
        (blob + grad).clamp(-1.0, 1.0)
    })
}

/// `clip.f32` → `clip.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn read_f32_le(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Input(format!(
            "{}: length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}
