//! Text-to-video and image-to-video generation, frame dumps and the
//! temporal-smoothness score.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::diffusion::{ddim_sample, i2v_condition, DitPredictor, NoiseSchedule, SampleOptions};
use crate::dit::Dit;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Rng, Tensor};
use crate::vae3d::Vae;

use super::dit_train::latent_frames;

/// The trained pieces sampling needs.
pub struct Pipeline<'a> {
    pub dit: &'a Dit,
    pub dit_params: &'a ParamStore<f32>,
    pub vae: &'a Vae,
    pub vae_params: &'a ParamStore<f32>,
    pub schedule: &'a NoiseSchedule,
    /// Latents were divided by this before diffusion training.
    pub latent_scale: f64,
}

fn check_size(size: usize, vae: &Vae, dit: &Dit) -> Result<(usize, usize)> {
    let unit = 8 * dit.cfg.patch;
    if size == 0 || size % unit != 0 {
        return Err(Error::Config(format!("size {size} must be a positive multiple of {unit}")));
    }
    Ok((size / 8, vae.cfg.latent_channels))
}

impl Pipeline<'_> {
    fn decode(&self, latent: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = self.latent_scale as f32;
        self.vae.decode_latent(self.vae_params, &latent.map(|x| x * s))
    }

    /// DDIM sample of `frames` pixel frames at `size × size`, decoded.
    pub fn text_to_video(&self, text: &[u32], frames: usize, size: usize, opts: &SampleOptions, seed: u64) -> Result<Tensor<f32>> {
        if self.dit.cfg.cond_channels != 0 {
            return Err(Error::Config("model expects an image condition".into()));
        }
        let (side, c) = check_size(size, self.vae, self.dit)?;
        let shape = [latent_frames(frames)?, side, side, c];
        let model = DitPredictor { dit: self.dit, params: self.dit_params, cond: None };
        let latent = ddim_sample(&model, self.schedule, &shape, text, opts, &mut Rng::new(seed))?;
        self.decode(&latent)
    }

    /// Continues `image` (`(1, size, size, 3)`) into `frames` frames.
    pub fn image_to_video(&self, image: &Tensor<f32>, text: &[u32], frames: usize, opts: &SampleOptions, seed: u64) -> Result<Tensor<f32>> {
        if self.dit.cfg.cond_channels != self.vae.cfg.latent_channels {
            return Err(Error::Config("model was not built for image conditioning".into()));
        }
        let s = image.shape();
        if s.len() != 4 || s[0] != 1 || s[1] != s[2] || s[3] != 3 {
            return Err(Error::shape(format!("image must be (1, S, S, 3), got {s:?}")));
        }
        let (side, c) = check_size(s[1], self.vae, self.dit)?;
        let lf = latent_frames(frames)?;
        let inv = (1.0 / self.latent_scale) as f32;
        let first = self.vae.encode_video(self.vae_params, image)?.mean.map(|x| x * inv);
        let mut rng = Rng::new(seed);
        let mut aug = Rng::derive(seed, 0x6932_7600);
        let cond = i2v_condition(&first, lf, Some((self.schedule, &mut aug)))?;
        let model = DitPredictor { dit: self.dit, params: self.dit_params, cond: Some(&cond) };
        let latent = ddim_sample(&model, self.schedule, &[lf, side, side, c], text, opts, &mut rng)?;
        self.decode(&latent)
    }
}

/// Mean squared difference of an i.i.d. uniform `[-1, 1]` video of the
/// given shape.
pub fn noise_baseline(shape: &[usize], seed: u64) -> f64 {
    let noise: Tensor<f32> = Rng::new(seed).uniform_tensor(shape, -1.0, 1.0);
    super::data::smoothness(&noise)
}

/// Binary PPM of one `(H, W, 3)` frame in `[-1, 1]`.
pub fn ppm_bytes(frame: &[f32], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(frame.iter().map(|&x| (((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8));
    out
}

/// Writes `video.f32` (raw little-endian, shape in `video.shape`) and one
/// `frame_NNN.ppm` per frame.
pub fn dump_video(dir: &Path, video: &Tensor<f32>) -> Result<()> {
    let [t, h, w, c] = *video.shape() else {
        return Err(Error::shape("video must be (T,H,W,3)"));
    };
    if c != 3 {
        return Err(Error::shape("video must have 3 channels"));
    }
    fs::create_dir_all(dir)?;
    let mut raw = fs::File::create(dir.join("video.f32"))?;
    for x in video.data() {
        raw.write_all(&x.to_le_bytes())?;
    }
    fs::write(dir.join("video.shape"), format!("{t} {h} {w} {c}\n"))?;
    let n = h * w * 3;
    for f in 0..t {
        fs::write(dir.join(format!("frame_{f:03}.ppm")), ppm_bytes(&video.data()[f * n..(f + 1) * n], h, w))?;
    }
    Ok(())
}

/// Reads a binary PPM back into `(1, H, W, 3)` in `[-1, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    let bad = || Error::Dataset(format!("{}: not a binary 8-bit PPM", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_owned());
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let px = bytes.get(pos..pos + h * w * 3).ok_or_else(bad)?;
    let data = px.iter().map(|&b| b as f32 / 127.5 - 1.0).collect();
    Tensor::new(&[1, h, w, 3], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_quantized() {
        let frame: Tensor<f32> = Rng::new(1).uniform_tensor(&[1, 3, 5, 3], -1.0, 1.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        fs::write(&path, ppm_bytes(frame.data(), 3, 5)).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.shape(), &[1, 3, 5, 3]);
        assert!(back.max_abs_diff(&frame) <= 1.0 / 127.5 + 1e-6);
        assert_eq!(ppm_bytes(&[-1.0, 0.0, 1.0], 1, 1)[11..], [0, 128, 255]);
    }

    #[test]
    fn iid_noise_baseline_is_near_two_thirds() {
        // E[(x − y)²] = 2·Var(U[-1,1]) = 2/3
        let b = noise_baseline(&[9, 16, 16, 3], 4);
        assert!((b - 2.0 / 3.0).abs() < 0.02, "{b}");
    }
}
