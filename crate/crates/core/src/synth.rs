//! Seedable procedural degradations and clean textures.
//!
//! Rain is rendered as a layer of anti-aliased capsules (thick line
//! segments), softened by a Gaussian blur, and added to the clean image with
//! clipping. Low light is a gamma curve, a gain and Gaussian noise.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kernels::resize::resize_forward;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DegradationKind {
    Rain,
    LowLight,
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DegradationKind::Rain => "rain",
            DegradationKind::LowLight => "lowlight",
        })
    }
}

impl FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rain" => Ok(DegradationKind::Rain),
            "lowlight" => Ok(DegradationKind::LowLight),
            other => Err(Error::Config(format!("unknown degradation kind `{other}`"))),
        }
    }
}

/// Inclusive sampling range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.hi > self.lo {
            rng.gen_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }

    fn check(&self, what: &str, min: f64, max: f64) -> Result<()> {
        if !(self.lo <= self.hi && self.lo >= min && self.hi <= max) {
            return Err(Error::Config(format!(
                "{what} range [{}, {}] must be ordered and within [{min}, {max}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RainSpec {
    pub streak_count: (usize, usize),
    /// Degrees from vertical.
    pub angle: Range,
    /// Per-streak deviation from the image's dominant angle, in degrees.
    pub angle_jitter: f64,
    pub length: Range,
    pub width: Range,
    pub intensity: Range,
    pub blur_sigma: Range,
}

impl Default for RainSpec {
    fn default() -> Self {
        Self {
            streak_count: (40, 90),
            angle: Range::new(-20.0, 20.0),
            angle_jitter: 3.0,
            length: Range::new(8.0, 24.0),
            width: Range::new(0.8, 1.8),
            intensity: Range::new(0.2, 0.5),
            blur_sigma: Range::new(0.3, 1.2),
        }
    }
}

impl RainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.streak_count.0 > self.streak_count.1 {
            return Err(Error::Config("streak count range is reversed".into()));
        }
        self.angle.check("angle", -90.0, 90.0)?;
        self.length.check("length", 0.0, f64::MAX)?;
        self.width.check("width", 0.0, f64::MAX)?;
        self.intensity.check("intensity", 0.0, 0.6)?;
        self.blur_sigma.check("blur sigma", 0.0, f64::MAX)?;
        if !(self.angle_jitter >= 0.0) {
            return Err(Error::Config("angle jitter must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowLightSpec {
    pub gamma: Range,
    pub gain: Range,
    pub noise_sigma: f64,
}

impl Default for LowLightSpec {
    fn default() -> Self {
        Self {
            gamma: Range::new(1.5, 2.5),
            gain: Range::new(0.3, 0.6),
            noise_sigma: 0.02,
        }
    }
}

impl LowLightSpec {
    pub fn validate(&self) -> Result<()> {
        self.gamma.check("gamma", 1e-3, 10.0)?;
        self.gain.check("gain", 0.0, 10.0)?;
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise sigma must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub rain: RainSpec,
    pub lowlight: LowLightSpec,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self {
            kind: DegradationKind::Rain,
            rain: RainSpec::default(),
            lowlight: LowLightSpec::default(),
        }
    }
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        self.rain.validate()?;
        self.lowlight.validate()
    }
}

/// Clean, degraded and degradation layer, each `[3, H, W]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub clean: Tensor,
    pub degraded: Tensor,
    pub degradation_map: Tensor,
}

fn dims3(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [3, h, w] => Ok((h, w)),
        _ => Err(Error::invalid("synth", format!("expected [3, H, W], got {:?}", t.shape()))),
    }
}

/// One rain streak.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Streak {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub width: f64,
    pub intensity: f64,
}

fn segment_distance(px: f64, py: f64, s: &Streak) -> f64 {
    let (dx, dy) = (s.x1 - s.x0, s.y1 - s.y0);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - s.x0) * dx + (py - s.y0) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (s.x0 + t * dx, s.y0 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Rasterizes capsules with a one-pixel linear coverage ramp at the edge.
/// Overlapping streaks add; the layer saturates at 1.
pub fn render_streaks(h: usize, w: usize, streaks: &[Streak]) -> Vec<f64> {
    let mut layer = vec![0.0; h * w];
    for s in streaks {
        let r = s.width / 2.0;
        let reach = r + 1.0;
        let y_lo = (s.y0.min(s.y1) - reach).floor().max(0.0) as usize;
        let y_hi = ((s.y0.max(s.y1) + reach).ceil().max(0.0) as usize).min(h);
        let x_lo = (s.x0.min(s.x1) - reach).floor().max(0.0) as usize;
        let x_hi = ((s.x0.max(s.x1) + reach).ceil().max(0.0) as usize).min(w);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let d = segment_distance(x as f64 + 0.5, y as f64 + 0.5, s);
                let coverage = (r + 0.5 - d).clamp(0.0, 1.0);
                if coverage > 0.0 {
                    let v = &mut layer[y * w + x];
                    *v = (*v + coverage * s.intensity).min(1.0);
                }
            }
        }
    }
    layer
}

/// Separable Gaussian blur of one plane with replicated edges.
pub fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / total).collect();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * plane[y * w + clampi(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * tmp[clampi(y as isize + k as isize - radius, h) * w + x])
                .sum();
        }
    }
    out
}

/// Draws the streak set for an `h × w` image.
pub fn sample_streaks(h: usize, w: usize, spec: &RainSpec, rng: &mut ChaCha8Rng) -> Vec<Streak> {
    let count = rng.gen_range(spec.streak_count.0..=spec.streak_count.1);
    let base = spec.angle.sample(rng);
    (0..count)
        .map(|_| {
            let jitter = if spec.angle_jitter > 0.0 {
                rng.gen_range(-spec.angle_jitter..=spec.angle_jitter)
            } else {
                0.0
            };
            let theta = (base + jitter).clamp(spec.angle.lo, spec.angle.hi).to_radians();
            let len = spec.length.sample(rng);
            let cx = rng.gen_range(0.0..w as f64);
            let cy = rng.gen_range(0.0..h as f64);
            let (dx, dy) = (theta.sin() * len / 2.0, theta.cos() * len / 2.0);
            Streak {
                x0: cx - dx,
                y0: cy - dy,
                x1: cx + dx,
                y1: cy + dy,
                width: spec.width.sample(rng),
                intensity: spec.intensity.sample(rng),
            }
        })
        .collect()
}

/// Composites a single-plane rain layer onto all three channels.
pub fn composite_rain(clean: &Tensor, layer: &[f64]) -> Result<Sample> {
    let (h, w) = dims3(clean)?;
    if layer.len() != h * w {
        return Err(Error::invalid("composite_rain", "layer size does not match the image"));
    }
    let map: Vec<f32> = (0..3).flat_map(|_| layer.iter().map(|&v| v.clamp(0.0, 1.0) as f32)).collect();
    let map = Tensor::from_vec(vec![3, h, w], map)?;
    let degraded = clean.zip_map(&map, |c, r| (c + r).clamp(0.0, 1.0))?;
    Ok(Sample {
        clean: clean.clone(),
        degraded,
        degradation_map: map,
    })
}

pub fn synth_rain(clean: &Tensor, spec: &RainSpec, seed: u64) -> Result<Sample> {
    spec.validate()?;
    let (h, w) = dims3(clean)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let streaks = sample_streaks(h, w, spec, &mut rng);
    let sigma = spec.blur_sigma.sample(&mut rng);
    let layer = gaussian_blur(&render_streaks(h, w, &streaks), h, w, sigma);
    composite_rain(clean, &layer)
}

pub fn synth_lowlight(clean: &Tensor, spec: &LowLightSpec, seed: u64) -> Result<Sample> {
    spec.validate()?;
    dims3(clean)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = spec.gamma.sample(&mut rng) as f32;
    let gain = spec.gain.sample(&mut rng) as f32;
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let degraded: Vec<f32> = clean
        .data()
        .iter()
        .map(|&c| {
            let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) as f32 } else { 0.0 };
            (gain * c.powf(gamma) + n).clamp(0.0, 1.0)
        })
        .collect();
    let degraded = Tensor::from_vec(clean.shape().to_vec(), degraded)?;
    let degradation_map = clean.zip_map(&degraded, |c, d| c - d)?;
    Ok(Sample {
        clean: clean.clone(),
        degraded,
        degradation_map,
    })
}

pub fn synth(clean: &Tensor, spec: &DegradationSpec, seed: u64) -> Result<Sample> {
    match spec.kind {
        DegradationKind::Rain => synth_rain(clean, &spec.rain, seed),
        DegradationKind::LowLight => synth_lowlight(clean, &spec.lowlight, seed),
    }
}

/// Smooth random field: bilinear-interpolated lattice values with a
/// smoothstep blend.
fn value_noise(h: usize, w: usize, cell: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f64 / cell as f64;
        let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let at = |yy: usize, xx: usize| lattice[yy * gw + xx];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Procedural clean image `[3, h, w]`: a base colour, three oriented
/// sinusoids and two octaves of value noise.
pub fn texture(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e47_u64.rotate_left(32));
    let base: [f64; 3] = [rng.gen_range(0.25..0.65), rng.gen_range(0.25..0.65), rng.gen_range(0.25..0.65)];
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let freq = rng.gen_range(0.02..0.12) * std::f64::consts::TAU;
            let dir = rng.gen_range(0.0..std::f64::consts::PI);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = [rng.gen_range(0.03..0.12), rng.gen_range(0.03..0.12), rng.gen_range(0.03..0.12)];
            (freq * dir.cos(), freq * dir.sin(), phase, amp)
        })
        .collect();
    let coarse = value_noise(h, w, 16, &mut rng);
    let fine = value_noise(h, w, 4, &mut rng);
    let tint: [f64; 3] = [rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0)];

    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut v = base[c];
                for (kx, ky, phase, amp) in &waves {
                    v += amp[c] * (kx * x as f64 + ky * y as f64 + phase).sin();
                }
                let i = y * w + x;
                v += tint[c] * (0.15 * coarse[i] + 0.05 * fine[i]);
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Tensor::from_vec(vec![3, h, w], data).expect("shape matches")
}

/// Same window from all three tensors. `multiple` is the divisibility the
/// model needs (subsample · 8).
pub fn crop_patch(sample: &Sample, size: usize, multiple: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let (h, w) = dims3(&sample.clean)?;
    if size == 0 || size > h.min(w) {
        return Err(Error::invalid("crop_patch", format!("patch {size} does not fit a {h}x{w} image")));
    }
    if multiple > 0 && !size.is_multiple_of(multiple) {
        return Err(Error::invalid(
            "crop_patch",
            format!("patch {size} is not a multiple of {multiple}"),
        ));
    }
    let y0 = rng.gen_range(0..=h - size);
    let x0 = rng.gen_range(0..=w - size);
    let crop = |t: &Tensor| -> Result<Tensor> { t.narrow(1, y0, size)?.narrow(2, x0, size) };
    Ok(Sample {
        clean: crop(&sample.clean)?,
        degraded: crop(&sample.degraded)?,
        degradation_map: crop(&sample.degradation_map)?,
    })
}

pub fn flip_horizontal(t: &Tensor) -> Tensor {
    let w = *t.shape().last().unwrap_or(&1);
    let mut data = t.data().to_vec();
    for row in data.chunks_mut(w.max(1)) {
        row.reverse();
    }
    Tensor::from_vec(t.shape().to_vec(), data).expect("shape unchanged")
}

/// Horizontal flip with probability ½, applied to all three tensors.
pub fn augment(sample: &Sample, rng: &mut ChaCha8Rng) -> Sample {
    if rng.gen_bool(0.5) {
        Sample {
            clean: flip_horizontal(&sample.clean),
            degraded: flip_horizontal(&sample.degraded),
            degradation_map: flip_horizontal(&sample.degradation_map),
        }
    } else {
        sample.clone()
    }
}

/// Generates dataset entry `seed`: a texture and its degradation.
pub fn generate_sample(size: usize, seed: u64, spec: &DegradationSpec) -> Result<Sample> {
    let clean = texture(size, size, seed);
    synth(&clean, spec, seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1))
}

/// Rec. 601 luma histogram with `bins` equal bins over `[0, 1]`,
/// normalized to sum to 1.
pub fn luminance_histogram(image: &Tensor, bins: usize) -> Result<Vec<f64>> {
    let (h, w) = dims3(image)?;
    let d = image.data();
    let n = h * w;
    let mut hist = vec![0.0; bins];
    for i in 0..n {
        let y = 0.299 * d[i] as f64 + 0.587 * d[n + i] as f64 + 0.114 * d[2 * n + i] as f64;
        let b = ((y.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        hist[b] += 1.0;
    }
    for v in &mut hist {
        *v /= n.max(1) as f64;
    }
    Ok(hist)
}

pub fn histogram_l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Bilinear resize of a `[3, H, W]` image by `1 / factor` per side.
pub fn downsample(image: &Tensor, factor: usize) -> Result<Tensor> {
    let (h, w) = dims3(image)?;
    let (oh, ow) = (h / factor, w / factor);
    if oh == 0 || ow == 0 {
        return Err(Error::invalid("downsample", format!("{h}x{w} is too small for factor {factor}")));
    }
    Tensor::from_vec(vec![3, oh, ow], resize_forward(image.data(), 3, (h, w), (oh, ow)))
}

/// Histogram L1 distance between degraded images and their ×2
/// subsamples, averaged over `seeds`.
pub fn subspace_histogram_distance(size: usize, seeds: impl IntoIterator<Item = u64>, bins: usize) -> Result<f64> {
    let spec = DegradationSpec::default();
    let mut total = 0.0;
    let mut count = 0;
    for seed in seeds {
        let s = generate_sample(size, seed, &spec)?;
        let full = luminance_histogram(&s.degraded, bins)?;
        let sub = luminance_histogram(&downsample(&s.degraded, 2)?, bins)?;
        total += histogram_l1(&full, &sub);
        count += 1;
    }
    Ok(total / count.max(1) as f64)
}
