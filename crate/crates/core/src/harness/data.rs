//! Synthetic moving-shape clips with structured captions.
//!
//! Each clip shows one colored shape on a dark background, moving at a
//! constant velocity (or standing still), plus additive Gaussian noise whose
//! level is recorded as the clip's quality proxy. Clip `i` draws everything
//! from the stream `Rng::derive(seed, i)`, so clips can be generated in any
//! order and regenerate bit-identically.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dit::text::{caption_tokens, COLORS, MOTIONS, SHAPES};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::vae3d::VideoSource;

pub const ALLOWED_FRAMES: [usize; 5] = [1, 5, 9, 13, 17];
pub const ALLOWED_SIZES: [usize; 2] = [32, 64];

/// RGB in `[-1, 1]` for each entry of [`COLORS`].
pub const PALETTE: [[f32; 3]; 6] = [
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, 1.0],
    [1.0, -1.0, 1.0],
];

pub const MAX_NOISE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_clips: usize,
    pub frames: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_clips: 512,
            frames: 17,
            size: 32,
            seed: 42,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !ALLOWED_FRAMES.contains(&self.frames) {
            return Err(Error::Config(format!("frames must be one of {ALLOWED_FRAMES:?}")));
        }
        if !ALLOWED_SIZES.contains(&self.size) {
            return Err(Error::Config(format!("size must be one of {ALLOWED_SIZES:?}")));
        }
        Ok(())
    }
}

/// Scene parameters of one clip, in pixels of a `size × size` frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipMeta {
    pub index: usize,
    pub frames: usize,
    pub size: usize,
    pub color: usize,
    pub shape: usize,
    pub motion: usize,
    pub noise: f64,
    pub radius: f64,
    pub start: (f64, f64),
    /// Pixels per frame.
    pub velocity: (f64, f64),
}

impl ClipMeta {
    pub fn caption(&self) -> Vec<u32> {
        caption_tokens(self.color, self.shape, self.motion).expect("indices drawn in range")
    }

    pub fn describe(&self) -> String {
        format!("{} {} {}", COLORS[self.color], SHAPES[self.shape], MOTIONS[self.motion])
    }
}

#[derive(Clone, Debug)]
pub struct Clip {
    pub meta: ClipMeta,
    pub video: Tensor<f32>,
}

fn direction(motion: usize) -> (f64, f64) {
    match MOTIONS[motion] {
        "left" => (-1.0, 0.0),
        "right" => (1.0, 0.0),
        "up" => (0.0, -1.0),
        "down" => (0.0, 1.0),
        _ => (0.0, 0.0),
    }
}

/// Draws the scene of clip `index`. Positions are drawn in units of the
/// frame size, so the same index gives the same scene at every resolution.
pub fn clip_meta(spec: &SynthSpec, index: usize) -> ClipMeta {
    let mut rng = Rng::derive(spec.seed, index as u64);
    let size = spec.size as f64;
    let color = rng.below(COLORS.len());
    let shape = rng.below(SHAPES.len());
    let motion = rng.below(MOTIONS.len());
    let noise = rng.uniform_range(0.0, MAX_NOISE);
    let radius = size * rng.uniform_range(0.13, 0.18);
    let speed = size / 32.0;
    let (dx, dy) = direction(motion);
    let travel = speed * (ALLOWED_FRAMES[ALLOWED_FRAMES.len() - 1] - 1) as f64;
    let margin = radius + 1.0;
    let axis = |rng: &mut Rng, d: f64| -> f64 {
        // keep the whole trajectory inside the frame
        let (lo, hi) = match d {
            d if d > 0.0 => (margin, size - margin - travel),
            d if d < 0.0 => (margin + travel, size - margin),
            _ => (margin, size - margin),
        };
        lo + (hi - lo) * rng.uniform()
    };
    let start = (axis(&mut rng, dx), axis(&mut rng, dy));
    ClipMeta {
        index,
        frames: spec.frames,
        size: spec.size,
        color,
        shape,
        motion,
        noise,
        radius,
        start,
        velocity: (dx * speed, dy * speed),
    }
}

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    match SHAPES[shape] {
        "square" => dx.abs() <= r && dy.abs() <= r,
        "circle" => dx * dx + dy * dy <= r * r,
        // apex up
        _ => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
    }
}

/// Renders a clip as `(T, size, size, 3)` in `[-1, 1]`.
pub fn render(spec: &SynthSpec, meta: &ClipMeta) -> Tensor<f32> {
    let (t, s) = (meta.frames, meta.size);
    let mut noise_rng = Rng::derive(spec.seed ^ 0x6e6f_6973_65, meta.index as u64);
    let rgb = PALETTE[meta.color];
    let mut data = Vec::with_capacity(t * s * s * 3);
    for f in 0..t {
        let cx = meta.start.0 + meta.velocity.0 * f as f64;
        let cy = meta.start.1 + meta.velocity.1 * f as f64;
        for y in 0..s {
            for x in 0..s {
                let on = inside(meta.shape, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, meta.radius);
                for c in rgb {
                    let base = if on { c } else { -1.0 };
                    let v = base as f64 + meta.noise * noise_rng.normal();
                    data.push(v.clamp(-1.0, 1.0) as f32);
                }
            }
        }
    }
    Tensor::new(&[t, s, s, 3], data).expect("sized by construction")
}

pub fn generate_clip(spec: &SynthSpec, index: usize) -> Clip {
    let meta = clip_meta(spec, index);
    let video = render(spec, &meta);
    Clip { meta, video }
}

pub fn generate(spec: &SynthSpec) -> Result<Vec<Clip>> {
    spec.validate()?;
    Ok((0..spec.num_clips).map(|i| generate_clip(spec, i)).collect())
}

/// Pixels must exceed the frame's median brightness by this much to count
/// toward the centroid.
pub const CENTROID_THRESHOLD: f32 = 0.25;

/// Brightness-weighted centroid `(x, y)` of a `(H, W, 3)` frame. A pixel's
/// brightness `m` is its largest channel and its weight is
/// `max(0, m - median(m) - CENTROID_THRESHOLD)`, so a uniform background
/// contributes nothing. `None` when no pixel stands out.
pub fn centroid(frame: &[f32], h: usize, w: usize) -> Option<(f64, f64)> {
    let m: Vec<f32> = frame
        .chunks_exact(3)
        .take(h * w)
        .map(|p| p[0].max(p[1]).max(p[2]))
        .collect();
    if m.is_empty() {
        return None;
    }
    let mut sorted = m.clone();
    sorted.sort_by(f32::total_cmp);
    let floor = sorted[sorted.len() / 2] + CENTROID_THRESHOLD;
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for (i, &v) in m.iter().enumerate() {
        let wt = (v - floor).max(0.0) as f64;
        sw += wt;
        sx += wt * ((i % w) as f64 + 0.5);
        sy += wt * ((i / w) as f64 + 0.5);
    }
    (sw > 0.0).then(|| (sx / sw, sy / sw))
}

/// Centroid of every frame of a `(T, H, W, 3)` video.
pub fn centroid_track(video: &Tensor<f32>) -> Vec<Option<(f64, f64)>> {
    let [t, h, w, _] = *video.shape() else { return Vec::new() };
    (0..t)
        .map(|f| centroid(&video.data()[f * h * w * 3..(f + 1) * h * w * 3], h, w))
        .collect()
}

/// Mean frame-to-frame x displacement of the centroid (frames without a
/// centroid are skipped).
pub fn mean_x_velocity(video: &Tensor<f32>) -> Option<f64> {
    let xs: Vec<f64> = centroid_track(video).into_iter().flatten().map(|c| c.0).collect();
    (xs.len() >= 2).then(|| (xs[xs.len() - 1] - xs[0]) / (xs.len() - 1) as f64)
}

/// Mean squared difference between consecutive frames.
pub fn smoothness(video: &Tensor<f32>) -> f64 {
    let t = video.shape()[0];
    if t < 2 {
        return 0.0;
    }
    let n = video.len() / t;
    let d = video.data();
    let mut s = 0.0;
    for f in 1..t {
        for i in 0..n {
            let x = (d[f * n + i] - d[(f - 1) * n + i]) as f64;
            s += x * x;
        }
    }
    s / ((t - 1) * n) as f64
}

/// Average-pools `(T, H, W, C)` by 2 spatially.
pub fn downsample2(video: &Tensor<f32>) -> Result<Tensor<f32>> {
    let [t, h, w, c] = *video.shape() else {
        return Err(Error::shape("video must be (T,H,W,C)"));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("odd spatial size"));
    }
    let (ho, wo) = (h / 2, w / 2);
    let d = video.data();
    let mut out = Vec::with_capacity(t * ho * wo * c);
    for f in 0..t {
        for y in 0..ho {
            for x in 0..wo {
                for ch in 0..c {
                    let at = |yy: usize, xx: usize| d[((f * h + yy) * w + xx) * c + ch];
                    out.push(0.25 * (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1)));
                }
            }
        }
    }
    Tensor::new(&[t, ho, wo, c], out)
}

/// A loaded or generated dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub clips: Vec<Clip>,
}

impl Dataset {
    pub fn generate(spec: SynthSpec) -> Result<Self> {
        let clips = generate(&spec)?;
        Ok(Self { spec, clips })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Indices of the `fraction` of clips with the lowest noise level.
    pub fn hq_subset(&self, fraction: f64) -> Result<Vec<usize>> {
        let noise: Vec<f64> = self.clips.iter().map(|c| c.meta.noise).collect();
        hq_indices(&noise, fraction)
    }

    /// Writes `clip_XXXXX.f32` (raw little-endian video), `clip_XXXXX.tok`
    /// (little-endian u32 caption ids) and `manifest.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::from(MANIFEST_HEADER);
        manifest.push('\n');
        for c in &self.clips {
            let m = &c.meta;
            let stem = format!("clip_{:05}", m.index);
            let bytes: Vec<u8> = c.video.data().iter().flat_map(|x| x.to_le_bytes()).collect();
            fs::write(dir.join(format!("{stem}.f32")), bytes)?;
            let tok: Vec<u8> = m.caption().iter().flat_map(|x| x.to_le_bytes()).collect();
            fs::write(dir.join(format!("{stem}.tok")), tok)?;
            writeln!(
                manifest,
                "{},{stem},{},{},{},{},{},{:.9}",
                m.index, m.frames, m.size, COLORS[m.color], SHAPES[m.shape], MOTIONS[m.motion], m.noise
            )
            .unwrap();
        }
        fs::write(dir.join("manifest.csv"), manifest)?;
        let spec = toml::to_string(&self.spec).map_err(|e| Error::Dataset(e.to_string()))?;
        fs::write(dir.join("spec.toml"), spec)?;
        Ok(())
    }

    /// Loads a directory written by [`Dataset::write`]; clip metadata is
    /// re-derived from the stored spec and checked against the manifest.
    pub fn load(dir: &Path) -> Result<Self> {
        let spec_text = fs::read_to_string(dir.join("spec.toml"))
            .map_err(|e| Error::Dataset(format!("{}: {e}", dir.join("spec.toml").display())))?;
        let spec: SynthSpec = toml::from_str(&spec_text).map_err(|e| Error::Dataset(e.to_string()))?;
        spec.validate()?;
        let manifest = fs::read_to_string(dir.join("manifest.csv"))?;
        let mut lines = manifest.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::Dataset("manifest header mismatch".into()));
        }
        let mut clips = Vec::new();
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 8 || fields[0].parse::<usize>().ok() != Some(i) {
                return Err(Error::Dataset(format!("bad manifest line {}: {line}", i + 2)));
            }
            let meta = clip_meta(&spec, i);
            if fields[4] != COLORS[meta.color] || fields[5] != SHAPES[meta.shape] || fields[6] != MOTIONS[meta.motion] {
                return Err(Error::Dataset(format!("manifest line {} disagrees with the spec", i + 2)));
            }
            let bytes = fs::read(dir.join(format!("{}.f32", fields[1])))?;
            let n = meta.frames * meta.size * meta.size * 3;
            if bytes.len() != 4 * n {
                return Err(Error::Dataset(format!("{}.f32 has {} bytes, expected {}", fields[1], bytes.len(), 4 * n)));
            }
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let video = Tensor::new(&[meta.frames, meta.size, meta.size, 3], data)?;
            clips.push(Clip { meta, video });
        }
        if clips.len() != spec.num_clips {
            return Err(Error::Dataset(format!("manifest lists {} of {} clips", clips.len(), spec.num_clips)));
        }
        Ok(Self { spec, clips })
    }
}

/// Indices kept by the high-quality filter: the `fraction` of clips with
/// the lowest noise level, in index order.
pub fn hq_indices(noise: &[f64], fraction: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("hq_fraction {fraction} outside [0, 1]")));
    }
    let n = noise.len();
    let keep = ((fraction * n as f64).round() as usize).clamp(usize::from(fraction > 0.0 && n > 0), n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| noise[a].total_cmp(&noise[b]).then(a.cmp(&b)));
    let mut out = order[..keep].to_vec();
    out.sort_unstable();
    Ok(out)
}

pub const MANIFEST_HEADER: &str = "index,file,frames,size,color,shape,motion,noise";

impl VideoSource for Dataset {
    fn num_clips(&self) -> usize {
        self.clips.len()
    }

    fn video(&self, index: usize, frames: usize) -> Result<Tensor<f32>> {
        let c = self
            .clips
            .get(index)
            .ok_or_else(|| Error::Dataset(format!("clip {index} out of range")))?;
        if frames > c.meta.frames {
            return Err(Error::Dataset(format!(
                "clip {index} has {} frames, {frames} requested",
                c.meta.frames
            )));
        }
        c.video.slice_outer(0, frames)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize) -> SynthSpec {
        SynthSpec {
            num_clips: n,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn right_motion_centroid_strictly_increases() {
        let s = spec(200);
        let mut seen = 0;
        for i in 0..s.num_clips {
            let c = generate_clip(&s, i);
            if MOTIONS[c.meta.motion] != "right" {
                continue;
            }
            seen += 1;
            let xs: Vec<f64> = centroid_track(&c.video).into_iter().map(|c| c.unwrap().0).collect();
            assert!(xs.windows(2).all(|w| w[1] > w[0]), "clip {i}: {xs:?}");
        }
        assert!(seen > 10);
    }

    #[test]
    fn values_in_range_and_deterministic() {
        let s = spec(4);
        let a = generate(&s).unwrap();
        let b = generate(&s).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.video, y.video);
            assert!(x.video.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn hq_fraction_examples() {
        let noise = [0.05, 0.01, 0.09, 0.02];
        assert_eq!(hq_indices(&noise, 1.0).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(hq_indices(&noise, 0.5).unwrap(), vec![1, 3]);
        assert_eq!(hq_indices(&noise, 0.0).unwrap(), Vec::<usize>::new());
        assert!(hq_indices(&noise, 1.5).is_err());
    }

    #[test]
    fn hq_subset_prefers_low_noise() {
        let d = Dataset::generate(spec(10)).unwrap();
        assert_eq!(d.hq_subset(1.0).unwrap(), (0..10).collect::<Vec<_>>());
        let hq = d.hq_subset(0.2).unwrap();
        assert_eq!(hq.len(), 2);
        let worst_kept = hq.iter().map(|&i| d.clips[i].meta.noise).fold(0.0, f64::max);
        let rest_min = (0..10)
            .filter(|i| !hq.contains(i))
            .map(|i| d.clips[i].meta.noise)
            .fold(f64::INFINITY, f64::min);
        assert!(worst_kept <= rest_min);
    }

    #[test]
    fn smoothness_of_static_video_is_zero() {
        let v = Tensor::<f32>::full(&[3, 8, 8, 3], 0.5);
        assert_eq!(smoothness(&v), 0.0);
        let p = downsample2(&v).unwrap();
        assert_eq!(p.shape(), &[3, 4, 4, 3]);
    }
}
