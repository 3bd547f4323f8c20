//! Procedural clean scenes, the haze and snow imaging models, and paired
//! augmentation.
//!
//! Images are `[N, 3, H, W]`; degradation fields are `[H, W]` planes (`C` is
//! `[3, H, W]`) shared by every sample of the batch.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::string_enum;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Transmission and atmospheric light of the haze model.
#[derive(Clone, Debug, PartialEq)]
pub struct HazeParams<T> {
    pub t: Tensor<T>,
    pub a: Tensor<T>,
}

/// Fields of the snow model: veil transmission `T`, atmospheric light `A`,
/// snow intensity `Z`, binary location mask `R` and snow colour `C`.
#[derive(Clone, Debug, PartialEq)]
pub struct SnowParams<T> {
    pub t: Tensor<T>,
    pub a: Tensor<T>,
    pub z: Tensor<T>,
    pub r: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Real> HazeParams<T> {
    pub fn uniform(h: usize, w: usize, t: f64, a: f64) -> Self {
        Self {
            t: Tensor::full(&[h, w], T::lit(t)),
            a: Tensor::full(&[h, w], T::lit(a)),
        }
    }
}

impl<T: Real> SnowParams<T> {
    pub fn uniform(h: usize, w: usize, t: f64, a: f64, z: f64, r: f64, c: f64) -> Self {
        Self {
            t: Tensor::full(&[h, w], T::lit(t)),
            a: Tensor::full(&[h, w], T::lit(a)),
            z: Tensor::full(&[h, w], T::lit(z)),
            r: Tensor::full(&[h, w], T::lit(r)),
            c: Tensor::full(&[3, h, w], T::lit(c)),
        }
    }
}

fn check_plane<T: Real>(op: &'static str, name: &str, f: &Tensor<T>, h: usize, w: usize) -> Result<()> {
    if f.shape() != [h, w] {
        return Err(Error::shape(op, format!("{} is {:?}, image is {}x{}", name, f.shape(), h, w)));
    }
    Ok(())
}

fn check_range<T: Real>(
    op: &'static str,
    name: &str,
    f: &Tensor<T>,
    ok: impl Fn(f64) -> bool,
    want: &str,
) -> Result<()> {
    if let Some(v) = f.data().iter().map(|v| v.as_f64()).find(|&v| !ok(v)) {
        return Err(Error::invalid(op, format!("{} = {} outside {}", name, v, want)));
    }
    Ok(())
}

fn image_dims<T: Real>(op: &'static str, j: &Tensor<T>) -> Result<[usize; 4]> {
    let dims = j.dims4()?;
    if dims[1] != 3 {
        return Err(Error::shape(op, format!("expected 3 channels, got {:?}", j.shape())));
    }
    Ok(dims)
}

/// `I = J·t + A·(1 − t)`, with `t` and `A` broadcast over channels.
pub fn synth_haze<T: Real>(j: &Tensor<T>, p: &HazeParams<T>) -> Result<Tensor<T>> {
    let [_, _, h, w] = image_dims("synth_haze", j)?;
    check_plane("synth_haze", "t", &p.t, h, w)?;
    check_plane("synth_haze", "A", &p.a, h, w)?;
    check_range("synth_haze", "t", &p.t, |v| v > 0.0 && v <= 1.0, "(0, 1]")?;
    check_range("synth_haze", "A", &p.a, |v| (0.0..=1.0).contains(&v), "[0, 1]")?;
    let plane = h * w;
    let (t, a) = (p.t.data(), p.a.data());
    Ok(Tensor::from_fn(j.shape(), |k| {
        let i = k % plane;
        j.data()[k] * t[i] + a[i] * (T::one() - t[i])
    }))
}

/// `K = J·(1 − Z·R) + C·Z·R`, then `I = K·T + A·(1 − T)`.
pub fn synth_snow<T: Real>(j: &Tensor<T>, p: &SnowParams<T>) -> Result<Tensor<T>> {
    let op = "synth_snow";
    let [_, _, h, w] = image_dims(op, j)?;
    for (name, f) in [("T", &p.t), ("A", &p.a), ("Z", &p.z), ("R", &p.r)] {
        check_plane(op, name, f, h, w)?;
    }
    if p.c.shape() != [3, h, w] {
        return Err(Error::shape(op, format!("C is {:?}, expected [3, {}, {}]", p.c.shape(), h, w)));
    }
    check_range(op, "R", &p.r, |v| v == 0.0 || v == 1.0, "{0, 1}")?;
    check_range(op, "T", &p.t, |v| v > 0.0 && v <= 1.0, "(0, 1]")?;
    for (name, f) in [("A", &p.a), ("Z", &p.z), ("C", &p.c)] {
        check_range(op, name, f, |v| (0.0..=1.0).contains(&v), "[0, 1]")?;
    }
    let plane = h * w;
    let one = T::one();
    Ok(Tensor::from_fn(j.shape(), |k| {
        let i = k % plane;
        let ch = (k / plane) % 3;
        let zr = p.z.data()[i] * p.r.data()[i];
        let snowy = j.data()[k] * (one - zr) + p.c.data()[ch * plane + i] * zr;
        let t = p.t.data()[i];
        snowy * t + p.a.data()[i] * (one - t)
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Haze,
    Snow,
    Mixed,
}

string_enum!(Mode {
    Haze => "haze",
    Snow => "snow",
    Mixed => "mixed",
});

/// Every knob of the field generators. Ranges are `(lo, hi)` and sampled
/// uniformly per image; lengths are in pixels at 32×32 and scale with size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub mode: Mode,
    pub seed: u64,
    pub size: usize,
    /// Fraction of haze pairs in mixed mode.
    pub mixed_ratio: f64,
    pub blob_count: (usize, usize),
    /// Blob standard deviation as a fraction of the image side.
    pub blob_sigma: (f64, f64),
    /// Share of the depth field present everywhere, so no pixel is clear.
    pub depth_floor: f64,
    /// Maximum optical depth of the haze; `t = exp(−depth)`.
    pub haze_density: (f64, f64),
    /// Maximum optical depth of the veil in snowy images.
    pub veil_density: (f64, f64),
    pub transmission_min: f64,
    pub airlight: (f64, f64),
    /// Target fraction of pixels with `R = 1`.
    pub snow_coverage: (f64, f64),
    pub streak_length: (f64, f64),
    pub streak_width: f64,
    /// Probability that a stamp is a streak rather than a flake.
    pub streak_share: f64,
    /// Flake radius range.
    pub flake_radius: (f64, f64),
    pub feather_sigma: f64,
    pub snow_opacity: (f64, f64),
    pub snow_base: (f64, f64),
    pub chroma_jitter: f64,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self {
            mode: Mode::Haze,
            seed: 0,
            size: 32,
            mixed_ratio: 0.5,
            blob_count: (3, 7),
            blob_sigma: (0.15, 0.4),
            depth_floor: 0.3,
            haze_density: (0.5, 1.6),
            veil_density: (0.15, 0.5),
            transmission_min: 0.2,
            airlight: (0.7, 1.0),
            snow_coverage: (0.03, 0.12),
            streak_length: (2.0, 8.0),
            streak_width: 1.0,
            streak_share: 0.6,
            flake_radius: (0.6, 1.5),
            feather_sigma: 0.7,
            snow_opacity: (0.75, 1.0),
            snow_base: (0.9, 1.0),
            chroma_jitter: 0.04,
        }
    }
}

impl DegradationSpec {
    pub fn new(mode: Mode, seed: u64, size: usize) -> Self {
        Self {
            mode,
            seed,
            size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::invalid("DegradationSpec", detail));
        check_size(self.size)?;
        let unit = |r: (f64, f64)| 0.0 <= r.0 && r.0 <= r.1 && r.1 <= 1.0;
        let pos = |r: (f64, f64)| 0.0 < r.0 && r.0 <= r.1 && r.1.is_finite();
        if !(0.0..=1.0).contains(&self.mixed_ratio) || !(0.0..=1.0).contains(&self.streak_share) {
            return bad("mixed_ratio and streak_share must lie in [0, 1]".into());
        }
        if self.blob_count.0 == 0 || self.blob_count.0 > self.blob_count.1 {
            return bad(format!("blob_count {:?}", self.blob_count));
        }
        for (name, r) in [
            ("blob_sigma", self.blob_sigma),
            ("haze_density", self.haze_density),
            ("veil_density", self.veil_density),
            ("streak_length", self.streak_length),
            ("flake_radius", self.flake_radius),
        ] {
            if !pos(r) {
                return bad(format!("{} {:?} must be positive and ordered", name, r));
            }
        }
        for (name, r) in [
            ("airlight", self.airlight),
            ("snow_opacity", self.snow_opacity),
            ("snow_base", self.snow_base),
        ] {
            if !unit(r) {
                return bad(format!("{} {:?} must be an ordered range in [0, 1]", name, r));
            }
        }
        let cov = self.snow_coverage;
        if !(0.0 < cov.0 && cov.0 <= cov.1 && cov.1 < 1.0) {
            return bad(format!("snow_coverage {:?}", cov));
        }
        if !(0.0 < self.transmission_min && self.transmission_min <= 1.0) {
            return bad(format!("transmission_min {}", self.transmission_min));
        }
        if !(0.0..=1.0).contains(&self.depth_floor)
            || !(self.streak_width > 0.0)
            || !(self.feather_sigma > 0.0)
            || !(0.0..=0.5).contains(&self.chroma_jitter)
        {
            return bad("depth_floor, streak_width, feather_sigma or chroma_jitter out of range".into());
        }
        Ok(())
    }

    /// Pixel lengths are specified at 32×32.
    fn scale(&self) -> f64 {
        self.size as f64 / 32.0
    }
}

pub fn check_size(size: usize) -> Result<()> {
    if size < 32 || !size.is_power_of_two() {
        return Err(Error::invalid("synth", format!("size {} must be a power of two >= 32", size)));
    }
    Ok(())
}

fn uniform(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.random_range(r.0..r.1)
    }
}

/// Separate generator streams for scene content and each degradation.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const STREAM_CLEAN: u64 = 1;
const STREAM_FIELDS: u64 = 2;

/// Sum of Gaussian blobs scaled to a maximum of 1.
fn blob_field(spec: &DegradationSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = spec.size;
    let n = rng.random_range(spec.blob_count.0..=spec.blob_count.1);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..n)
        .map(|_| {
            let cx = rng.random_range(0.0..s as f64);
            let cy = rng.random_range(0.0..s as f64);
            let sigma = uniform(rng, spec.blob_sigma) * s as f64;
            let amp = rng.random_range(0.5..1.0);
            (cx, cy, sigma, amp)
        })
        .collect();
    let mut f = vec![0.0; s * s];
    for (i, v) in f.iter_mut().enumerate() {
        let (y, x) = ((i / s) as f64 + 0.5, (i % s) as f64 + 0.5);
        *v = blobs
            .iter()
            .map(|&(cx, cy, sg, a)| a * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * sg * sg)).exp())
            .sum();
    }
    let max = f.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        f.iter_mut().for_each(|v| *v /= max);
    }
    f
}

fn transmission(spec: &DegradationSpec, rng: &mut ChaCha8Rng, density: (f64, f64)) -> Vec<f64> {
    let field = blob_field(spec, rng);
    let d = uniform(rng, density);
    let floor = spec.depth_floor;
    field
        .iter()
        .map(|f| (-d * (floor + (1.0 - floor) * f)).exp().clamp(spec.transmission_min, 1.0))
        .collect()
}

fn plane<T: Real>(s: usize, v: &[f64]) -> Tensor<T> {
    Tensor::from_fn(&[s, s], |i| T::lit(v[i]))
}

/// Clamp-to-edge separable Gaussian blur of one `s × s` plane.
fn blur(x: &[f64], s: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let ks: f64 = k.iter().sum();
    let at = |i: i64| i.clamp(0, s as i64 - 1) as usize;
    let mut rows = vec![0.0; s * s];
    for y in 0..s {
        for xx in 0..s {
            rows[y * s + xx] = (-r..=r).map(|d| k[(d + r) as usize] * x[y * s + at(xx as i64 + d)]).sum::<f64>() / ks;
        }
    }
    let mut out = vec![0.0; s * s];
    for y in 0..s {
        for xx in 0..s {
            out[y * s + xx] = (-r..=r).map(|d| k[(d + r) as usize] * rows[at(y as i64 + d) * s + xx]).sum::<f64>() / ks;
        }
    }
    out
}

/// Pixels covered by one random streak (a thick segment, mostly vertical)
/// or flake (an ellipse).
fn stamp(spec: &DegradationSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let s = spec.size as i64;
    let scale = spec.scale();
    let cx = rng.random_range(0.0..s as f64);
    let cy = rng.random_range(0.0..s as f64);
    let inside: Box<dyn Fn(f64, f64) -> bool>;
    let reach;
    if rng.random_bool(spec.streak_share) {
        let len = uniform(rng, spec.streak_length) * scale;
        let angle = PI / 2.0 + rng.random_range(-0.5..0.5);
        let (dx, dy) = (angle.cos() * len / 2.0, angle.sin() * len / 2.0);
        let half = spec.streak_width * scale / 2.0;
        reach = len / 2.0 + half + 1.0;
        inside = Box::new(move |x, y| {
            // distance from (x, y) to the segment centred at (cx, cy)
            let (px, py) = (x - cx, y - cy);
            let l2 = 4.0 * (dx * dx + dy * dy);
            let u = ((px * 2.0 * dx + py * 2.0 * dy) / l2).clamp(-0.5, 0.5);
            let (qx, qy) = (px - 2.0 * u * dx, py - 2.0 * u * dy);
            qx * qx + qy * qy <= half * half
        });
    } else {
        let rx = uniform(rng, spec.flake_radius) * scale;
        let ry = uniform(rng, spec.flake_radius) * scale;
        reach = rx.max(ry) + 1.0;
        inside = Box::new(move |x, y| ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0);
    }
    let lo = |c: f64| ((c - reach).floor() as i64).max(0);
    let hi = |c: f64| ((c + reach).ceil() as i64).min(s - 1);
    let mut px = Vec::new();
    for y in lo(cy)..=hi(cy) {
        for x in lo(cx)..=hi(cx) {
            if inside(x as f64 + 0.5, y as f64 + 0.5) {
                px.push((y * s + x) as usize);
            }
        }
    }
    px
}

/// Stamps shapes until the coverage target is met, never exceeding the
/// band's upper end. Returns the mask and its coverage as counted while
/// stamping.
fn snow_mask(spec: &DegradationSpec, rng: &mut ChaCha8Rng) -> (Vec<f64>, f64) {
    let total = spec.size * spec.size;
    let (lo, hi) = spec.snow_coverage;
    let target = uniform(rng, (lo, hi));
    let cap = (hi * total as f64).floor() as usize;
    let mut mask = vec![0.0; total];
    let mut count = 0usize;
    for _ in 0..100_000 {
        if count as f64 >= target * total as f64 {
            break;
        }
        let px = stamp(spec, rng);
        let fresh: Vec<usize> = px.into_iter().filter(|&i| mask[i] == 0.0).collect();
        if fresh.is_empty() || count + fresh.len() > cap {
            continue;
        }
        for i in fresh {
            mask[i] = 1.0;
            count += 1;
        }
    }
    (mask, count as f64 / total as f64)
}

/// Degradation fields for one image, with the coverage of `R` that the snow
/// generator counted.
#[derive(Clone, Debug, PartialEq)]
pub enum Fields<T> {
    Haze(HazeParams<T>),
    Snow { params: SnowParams<T>, coverage: f64 },
}

impl<T: Real> Fields<T> {
    pub fn mode(&self) -> Mode {
        match self {
            Fields::Haze(_) => Mode::Haze,
            Fields::Snow { .. } => Mode::Snow,
        }
    }

    pub fn apply(&self, j: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Fields::Haze(p) => synth_haze(j, p),
            Fields::Snow { params, .. } => synth_snow(j, params),
        }
    }
}

/// Random fields for `spec.seed`. Mixed mode draws haze with probability
/// `mixed_ratio`.
pub fn gen_fields<T: Real>(spec: &DegradationSpec) -> Result<Fields<T>> {
    spec.validate()?;
    let mut rng = stream(spec.seed, STREAM_FIELDS);
    let mode = match spec.mode {
        Mode::Mixed if rng.random_bool(spec.mixed_ratio) => Mode::Haze,
        Mode::Mixed => Mode::Snow,
        m => m,
    };
    let s = spec.size;
    let airlight = uniform(&mut rng, spec.airlight);
    let a = Tensor::full(&[s, s], T::lit(airlight));
    if mode == Mode::Haze {
        let t = transmission(spec, &mut rng, spec.haze_density);
        return Ok(Fields::Haze(HazeParams { t: plane(s, &t), a }));
    }
    let t = transmission(spec, &mut rng, spec.veil_density);
    let (r, coverage) = snow_mask(spec, &mut rng);
    let opacity = uniform(&mut rng, spec.snow_opacity);
    let z: Vec<f64> = blur(&r, s, spec.feather_sigma * spec.scale())
        .iter()
        .map(|v| (1.5 * v).min(1.0) * opacity)
        .collect();
    let base = uniform(&mut rng, spec.snow_base);
    let tint: Vec<f64> = (0..3).map(|_| base + rng.random_range(-1.0..1.0) * spec.chroma_jitter).collect();
    let jitter = spec.chroma_jitter / 2.0;
    let c = Tensor::from_fn(&[3, s, s], |k| {
        T::lit((tint[k / (s * s)] + rng.random_range(-jitter..=jitter)).clamp(0.0, 1.0))
    });
    Ok(Fields::Snow {
        params: SnowParams {
            t: plane(s, &t),
            a,
            z: plane(s, &z),
            r: plane(s, &r),
            c,
        },
        coverage,
    })
}

/// Smooth synthetic scene: a two-colour linear gradient, a low-frequency
/// ripple and a few flat rectangles and discs, as `[1, 3, size, size]`.
pub fn gen_clean<T: Real>(seed: u64, size: usize) -> Result<Tensor<T>> {
    check_size(size)?;
    let mut rng = stream(seed, STREAM_CLEAN);
    let s = size as f64;
    let color = |rng: &mut ChaCha8Rng| -> [f64; 3] { [0, 1, 2].map(|_| rng.random_range(0.05..0.85)) };
    let c0 = color(&mut rng);
    let c1 = color(&mut rng);
    let theta = rng.random_range(0.0..2.0 * PI);
    let (gx, gy) = (theta.cos(), theta.sin());
    let ripple_amp = rng.random_range(0.02..0.08);
    let ripple_freq = rng.random_range(0.5..2.0) * 2.0 * PI / s;
    let ripple_phase = rng.random_range(0.0..2.0 * PI);
    let mut img = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / s - 0.5, (y as f64 + 0.5) / s - 0.5);
            let along = ((u * gx + v * gy) / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
            let wave = ripple_amp * (ripple_freq * (x as f64 + y as f64) + ripple_phase).sin();
            for ch in 0..3 {
                img[ch * size * size + y * size + x] = c0[ch] + (c1[ch] - c0[ch]) * along + wave;
            }
        }
    }
    let shapes = rng.random_range(3..=6);
    for _ in 0..shapes {
        let col = color(&mut rng);
        let cx = rng.random_range(0.0..s);
        let cy = rng.random_range(0.0..s);
        let rx = rng.random_range(0.06..0.25) * s;
        let ry = rng.random_range(0.06..0.25) * s;
        let disc = rng.random_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                let hit = if disc { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 && dy.abs() <= 1.0 };
                if hit {
                    for ch in 0..3 {
                        img[ch * size * size + y * size + x] = col[ch];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_fn(&[1, 3, size, size], |k| T::lit(img[k].clamp(0.0, 1.0))))
}

/// One of the eight symmetries of the square: optional horizontal flip
/// followed by `quarter_turns` counter-clockwise rotations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transform {
    pub flip: bool,
    pub quarter_turns: u8,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        flip: false,
        quarter_turns: 0,
    };

    pub fn random(rng: &mut impl Rng) -> Self {
        let k = rng.random_range(0..8u8);
        Self {
            flip: k >= 4,
            quarter_turns: k % 4,
        }
    }

    pub fn apply<T: Real>(self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, _, h, w] = x.dims4()?;
        if h != w {
            return Err(Error::shape("augment", format!("non-square image {}x{}", h, w)));
        }
        let mut out = x.clone();
        if self.flip {
            out = flip_h(&out, h);
        }
        for _ in 0..self.quarter_turns % 4 {
            out = rot90(&out, h);
        }
        Ok(out)
    }
}

fn flip_h<T: Real>(x: &Tensor<T>, s: usize) -> Tensor<T> {
    Tensor::from_fn(x.shape(), |k| {
        let (p, i, j) = (k / (s * s), (k / s) % s, k % s);
        x.data()[p * s * s + i * s + (s - 1 - j)]
    })
}

fn rot90<T: Real>(x: &Tensor<T>, s: usize) -> Tensor<T> {
    Tensor::from_fn(x.shape(), |k| {
        let (p, i, j) = (k / (s * s), (k / s) % s, k % s);
        x.data()[p * s * s + j * s + (s - 1 - i)]
    })
}

/// The same random symmetry applied to both images of a pair.
pub fn augment<T: Real>(degraded: &Tensor<T>, clean: &Tensor<T>, seed: u64) -> Result<(Tensor<T>, Tensor<T>)> {
    if degraded.shape() != clean.shape() {
        return Err(Error::shape("augment", format!("{:?} vs {:?}", degraded.shape(), clean.shape())));
    }
    let t = Transform::random(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((t.apply(degraded)?, t.apply(clean)?))
}

/// Clean image, degraded image and fields for one pair seed.
pub fn render_pair<T: Real>(spec: &DegradationSpec, mode: Mode, pair_seed: u64) -> Result<(Tensor<T>, Tensor<T>, Fields<T>)> {
    if mode == Mode::Mixed {
        return Err(Error::invalid("render_pair", "a single pair is either haze or snow"));
    }
    let clean = gen_clean::<T>(pair_seed, spec.size)?;
    let fields = gen_fields::<T>(&DegradationSpec {
        mode,
        seed: pair_seed,
        ..spec.clone()
    })?;
    let degraded = fields.apply(&clean)?;
    Ok((degraded, clean, fields))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;
    use proptest::prelude::*;

    fn rand_image(seed: u64, s: usize) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(&[1, 3, s, s], 0.0, 1.0, &mut r)
    }

    #[test]
    fn haze_identities() {
        let j = rand_image(1, 8);
        let clear = HazeParams::uniform(8, 8, 1.0, 0.9);
        assert_eq!(synth_haze(&j, &clear).unwrap(), j);

        let full = HazeParams::uniform(8, 8, 1e-6, 0.8);
        let i = synth_haze(&j, &full).unwrap();
        assert!(i.data().iter().all(|v| (v - 0.8).abs() <= 1e-5));

        let half = Tensor::full(&[1, 3, 4, 4], 0.5);
        let i = synth_haze(&half, &HazeParams::uniform(4, 4, 0.5, 1.0)).unwrap();
        assert!(i.data().iter().all(|&v| v == 0.75));
        let i32 = synth_haze(&half.cast::<f32>(), &HazeParams::uniform(4, 4, 0.5, 1.0)).unwrap();
        assert!(i32.data().iter().all(|&v| v == 0.75f32));
    }

    #[test]
    fn haze_rejects_bad_transmission() {
        let j = rand_image(1, 4);
        for t in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(synth_haze(&j, &HazeParams::uniform(4, 4, t, 0.9)).is_err(), "t = {}", t);
        }
        assert!(synth_haze(&j, &HazeParams::uniform(8, 8, 0.5, 0.9)).is_err());
    }

    #[test]
    fn snow_identities() {
        let j = rand_image(2, 8);
        let no_snow = SnowParams::uniform(8, 8, 1.0, 0.8, 0.0, 1.0, 0.95);
        assert_eq!(synth_snow(&j, &no_snow).unwrap(), j);
        let nowhere = SnowParams::uniform(8, 8, 1.0, 0.8, 0.7, 0.0, 0.3);
        assert_eq!(synth_snow(&j, &nowhere).unwrap(), j);
    }

    #[test]
    fn snow_substitution() {
        let p = SnowParams::uniform(4, 4, 0.5, 0.8, 1.0, 1.0, 1.0);
        let j = Tensor::<f64>::full(&[1, 3, 4, 4], 0.2);
        assert!(synth_snow(&j, &p).unwrap().data().iter().all(|&v| v == 0.9));
        // veil-free snowy image is pure C
        let no_veil = SnowParams::uniform(4, 4, 1.0, 0.8, 1.0, 1.0, 1.0);
        assert!(synth_snow(&j, &no_veil).unwrap().data().iter().all(|&v| v == 1.0));
        let p32 = SnowParams::<f32>::uniform(4, 4, 0.5, 0.8, 1.0, 1.0, 1.0);
        let out = synth_snow(&j.cast::<f32>(), &p32).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5f32 + 0.8f32 * 0.5f32));
    }

    #[test]
    fn snow_rejects_non_binary_mask() {
        let j = rand_image(3, 4);
        let p = SnowParams::uniform(4, 4, 1.0, 0.8, 0.5, 0.5, 1.0);
        assert!(synth_snow(&j, &p).is_err());
    }

    fn spec(mode: Mode, seed: u64) -> DegradationSpec {
        DegradationSpec::new(mode, seed, 32)
    }

    #[test]
    fn fields_are_deterministic() {
        for mode in [Mode::Haze, Mode::Snow, Mode::Mixed] {
            let a = gen_fields::<f32>(&spec(mode, 11)).unwrap();
            let b = gen_fields::<f32>(&spec(mode, 11)).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, gen_fields::<f32>(&spec(mode, 12)).unwrap());
        }
        assert_eq!(gen_clean::<f32>(5, 32).unwrap(), gen_clean::<f32>(5, 32).unwrap());
    }

    #[test]
    fn transmission_clamped_over_many_seeds() {
        for seed in 0..1000 {
            for mode in [Mode::Haze, Mode::Snow] {
                let t = match gen_fields::<f64>(&spec(mode, seed)).unwrap() {
                    Fields::Haze(p) => p.t,
                    Fields::Snow { params, .. } => params.t,
                };
                assert!(t.data().iter().all(|&v| (0.2..=1.0).contains(&v)), "seed {}", seed);
            }
        }
    }

    #[test]
    fn snow_fields_respect_invariants() {
        for seed in 0..50 {
            let Fields::Snow { params: p, .. } = gen_fields::<f64>(&spec(Mode::Snow, seed)).unwrap() else {
                panic!("snow mode produced haze");
            };
            assert!(p.r.data().iter().all(|&v| v == 0.0 || v == 1.0));
            for f in [&p.z, &p.c, &p.a] {
                assert!(f.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
            let a = p.a.data()[0];
            assert!((0.7..=1.0).contains(&a));
            // near-white snow colour
            assert!(p.c.data().iter().all(|&v| v >= 0.84));
        }
    }

    #[test]
    fn snow_coverage_matches_independent_count() {
        let sp = spec(Mode::Snow, 0);
        let mut reported = 0.0;
        let mut counted = 0.0;
        for seed in 0..100 {
            let Fields::Snow { params, coverage } = gen_fields::<f64>(&spec(Mode::Snow, seed)).unwrap() else {
                unreachable!()
            };
            let ones = params.r.data().iter().filter(|&&v| v == 1.0).count();
            let count = ones as f64 / params.r.len() as f64;
            assert_eq!(count, coverage);
            reported += coverage;
            counted += count;
        }
        let mean = counted / 100.0;
        assert_eq!(reported, counted);
        assert!(sp.snow_coverage.0 <= mean && mean <= sp.snow_coverage.1, "mean coverage {}", mean);
    }

    #[test]
    fn streak_lengths_scale_with_size() {
        let mut small = spec(Mode::Snow, 3);
        small.streak_share = 1.0;
        let mut big = small.clone();
        big.size = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: usize = (0..200).map(|_| stamp(&small, &mut rng).len()).sum();
        let b: usize = (0..200).map(|_| stamp(&big, &mut rng).len()).sum();
        // area grows with the square of the scale, up to border clipping
        let ratio = b as f64 / a as f64;
        assert!((3.0..5.0).contains(&ratio), "{}", ratio);
    }

    #[test]
    fn clean_images_are_valid_scenes() {
        for seed in 0..1000 {
            let img = gen_clean::<f64>(seed, 32).unwrap();
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let mean = img.sum_f64() / img.len() as f64;
            let var = img.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / img.len() as f64;
            assert!(var > 1e-4, "seed {} variance {}", seed, var);
        }
        assert!(gen_clean::<f32>(0, 48).is_err());
        assert!(gen_clean::<f32>(0, 16).is_err());
    }

    #[test]
    fn degraded_images_in_range_and_measurably_worse() {
        for seed in 0..300 {
            for mode in [Mode::Haze, Mode::Snow] {
                let (deg, clean, _) = render_pair::<f64>(&spec(mode, 0), mode, seed).unwrap();
                assert!(deg.data().iter().all(|v| (0.0..=1.0).contains(v)));
                let p = psnr(&deg, &clean).unwrap();
                assert!(p < 35.0, "{} seed {}: {} dB", mode, seed, p);
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(DegradationSpec::default().validate().is_ok());
        let mut s = DegradationSpec::default();
        s.size = 40;
        assert!(s.validate().is_err());
        let mut s = DegradationSpec::default();
        s.airlight = (0.9, 0.7);
        assert!(s.validate().is_err());
        let mut s = DegradationSpec::default();
        s.snow_coverage = (0.0, 0.1);
        assert!(s.validate().is_err());
        let json = serde_json::to_string(&DegradationSpec::default()).unwrap();
        assert_eq!(serde_json::from_str::<DegradationSpec>(&json).unwrap(), DegradationSpec::default());
    }

    #[test]
    fn augment_group_laws() {
        let x = rand_image(4, 8);
        let turn = Transform { flip: false, quarter_turns: 1 };
        let mut y = x.clone();
        for _ in 0..4 {
            y = turn.apply(&y).unwrap();
        }
        assert_eq!(y, x);
        assert_ne!(turn.apply(&x).unwrap(), x);
        let flip = Transform { flip: true, quarter_turns: 0 };
        assert_eq!(flip.apply(&flip.apply(&x).unwrap()).unwrap(), x);
        let wide = Tensor::<f64>::zeros(&[1, 3, 4, 8]);
        assert!(augment(&wide, &wide, 0).is_err());
    }

    #[test]
    fn rotation_moves_pixels_counter_clockwise() {
        // top-right corner goes to top-left
        let mut x = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        x.data_mut()[3] = 1.0;
        let y = Transform { flip: false, quarter_turns: 1 }.apply(&x).unwrap();
        assert_eq!(y.data()[0], 1.0);
        let f = Transform { flip: true, quarter_turns: 0 }.apply(&x).unwrap();
        assert_eq!(f.data()[0], 1.0);
    }

    #[test]
    fn all_eight_transforms_reachable() {
        let mut seen = std::collections::HashSet::new();
        for seed in 0..200 {
            let t = Transform::random(&mut ChaCha8Rng::seed_from_u64(seed));
            seen.insert((t.flip, t.quarter_turns));
        }
        assert_eq!(seen.len(), 8);
    }

    proptest! {
        #[test]
        fn augment_preserves_psnr(seed in 0u64..500) {
            let (deg, clean, _) = render_pair::<f64>(&spec(Mode::Snow, 0), Mode::Snow, seed).unwrap();
            let (d2, c2) = augment(&deg, &clean, seed).unwrap();
            let before = psnr(&deg, &clean).unwrap();
            let after = psnr(&d2, &c2).unwrap();
            prop_assert!((before - after).abs() < 1e-9);
        }

        #[test]
        fn haze_stays_in_unit_range(j in 0.0f64..=1.0, t in 1e-6f64..=1.0, a in 0.0f64..=1.0) {
            let img = Tensor::full(&[1, 3, 2, 2], j);
            let i = synth_haze(&img, &HazeParams::uniform(2, 2, t, a)).unwrap();
            prop_assert!(i.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
