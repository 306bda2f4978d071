//! Pixel operations used by augmentation and corruption. Resampling is
//! bilinear with reflect padding; outputs are clipped to `[0, 1]`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::raster::Raster;

/// Mirrors `v` into `[0, n-1]` without repeating the edge sample.
fn reflect(v: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let last = (n - 1) as f64;
    let period = 2.0 * last;
    let mut m = v.rem_euclid(period);
    if m > last {
        m = period - m;
    }
    m
}

/// Bilinear sample at a real-valued position, reflect-padded.
pub fn sample_bilinear(img: &Raster, x: f64, y: f64, c: usize) -> f32 {
    let x = reflect(x, img.width());
    let y = reflect(y, img.height());
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(img.width() - 1);
    let y1 = (y0 + 1).min(img.height() - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = img.get(x0, y0, c) as f64 * (1.0 - fx) + img.get(x1, y0, c) as f64 * fx;
    let bottom = img.get(x0, y1, c) as f64 * (1.0 - fx) + img.get(x1, y1, c) as f64 * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

/// Output pixel (x, y) takes the input sampled at `map(x, y)`.
fn remap(img: &Raster, map: impl Fn(f64, f64) -> (f64, f64)) -> Raster {
    let mut out = Raster::filled(img.width(), img.height(), img.channels(), 0.0);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (sx, sy) = map(x as f64, y as f64);
            for c in 0..img.channels() {
                out.set(x, y, c, sample_bilinear(img, sx, sy, c).clamp(0.0, 1.0));
            }
        }
    }
    out
}

fn center(img: &Raster) -> (f64, f64) {
    ((img.width() as f64 - 1.0) / 2.0, (img.height() as f64 - 1.0) / 2.0)
}

/// Exact sine/cosine at multiples of 90°.
fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let quarter = deg / 90.0;
    if quarter == quarter.round() {
        match (quarter as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        deg.to_radians().sin_cos()
    }
}

/// Rotates about the image center by `degrees` (counter-clockwise on screen),
/// resampled back to the input size.
pub fn rotate(img: &Raster, degrees: f64) -> Raster {
    let (cx, cy) = center(img);
    let (s, c) = sin_cos_deg(degrees);
    remap(img, |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        (cx + c * dx - s * dy, cy + s * dx + c * dy)
    })
}

/// Horizontal shear about the center row: x' = x + k (y − cy).
pub fn shear(img: &Raster, k: f64) -> Raster {
    let (_, cy) = center(img);
    remap(img, |x, y| (x - k * (y - cy), y))
}

pub fn flip_h(img: &Raster) -> Raster {
    let mut out = img.clone();
    let w = img.width();
    for y in 0..img.height() {
        for x in 0..w {
            for c in 0..img.channels() {
                out.set(x, y, c, img.get(w - 1 - x, y, c));
            }
        }
    }
    out
}

pub fn flip_v(img: &Raster) -> Raster {
    let mut out = img.clone();
    let h = img.height();
    for y in 0..h {
        for x in 0..img.width() {
            for c in 0..img.channels() {
                out.set(x, y, c, img.get(x, h - 1 - y, c));
            }
        }
    }
    out
}

/// v → clip(α v).
pub fn brightness(img: &Raster, factor: f32) -> Raster {
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v * factor).clamp(0.0, 1.0);
    }
    out
}

/// v → clip(μ + α (v − μ)) with μ the mean over all samples.
pub fn contrast(img: &Raster, factor: f32) -> Raster {
    let mu = img.mean() as f32;
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (mu + factor * (*v - mu)).clamp(0.0, 1.0);
    }
    out
}

/// Adds Uniform(−a, a) noise per sample, clipped.
pub fn uniform_noise<R: Rng + ?Sized>(img: &Raster, amplitude: f32, rng: &mut R) -> Raster {
    let mut out = img.clone();
    for v in out.data_mut() {
        let n: f32 = rng.random_range(-amplitude..=amplitude);
        *v = (*v + n).clamp(0.0, 1.0);
    }
    out
}

/// Standard normal draws, one per sample.
pub fn standard_normal_field<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// Adds `sqrt(variance) · z` elementwise in float space, then clips.
pub fn add_scaled_noise(img: &Raster, z: &[f64], variance: f64) -> Raster {
    let sd = variance.sqrt();
    let mut out = img.clone();
    for (v, zi) in out.data_mut().iter_mut().zip(z) {
        *v = ((*v as f64) + sd * zi).clamp(0.0, 1.0) as f32;
    }
    out
}

/// Normalized Gaussian taps for radius ⌈3σ⌉.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(0.0) as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / z).collect()
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(img: &Raster, sigma: f64) -> Raster {
    if sigma <= 0.0 {
        return img.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let reflect_idx = |i: i64, n: usize| reflect(i as f64, n) as usize;

    let mut tmp = vec![0.0f64; w * h * ch];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let acc: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * img.get(reflect_idx(x as i64 + k as i64 - radius, w), y, c) as f64)
                    .sum();
                tmp[(y * w + x) * ch + c] = acc;
            }
        }
    }
    let mut out = Raster::filled(w, h, ch, 0.0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let acc: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * tmp[(reflect_idx(y as i64 + k as i64 - radius, h) * w + x) * ch + c])
                    .sum();
                out.set(x, y, c, (acc as f32).clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Fills the rectangle `[x0, x0+w) × [y0, y0+h)` with `value`.
pub fn fill_rect(img: &Raster, x0: usize, y0: usize, w: usize, h: usize, value: f32) -> Raster {
    let mut out = img.clone();
    for y in y0..(y0 + h).min(img.height()) {
        for x in x0..(x0 + w).min(img.width()) {
            for c in 0..img.channels() {
                out.set(x, y, c, value);
            }
        }
    }
    out
}
