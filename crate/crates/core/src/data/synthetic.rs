use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

fn check(n: usize, classes: usize, noise: f64) -> Result<()> {
    if classes == 0 || n < 2 * classes {
        return Err(Error::InvalidArgument(format!(
            "need n >= 2 * classes, got n = {n}, classes = {classes}"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise must be non-negative, got {noise}")));
    }
    Ok(())
}

/// Examples per class, differing by at most one.
fn balanced(n: usize, classes: usize) -> Vec<usize> {
    (0..classes)
        .map(|c| n / classes + usize::from(c < n % classes))
        .collect()
}

fn linspace(n: usize, end: f64) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| if n > 1 { end * i as f64 / (n - 1) as f64 } else { 0.0 })
}

fn points(coords: Vec<f64>, labels: Vec<usize>, classes: usize) -> Result<Dataset> {
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, 2], coords)?, labels, classes, Split::Train)
}

/// Two interleaving half circles: class 0 on the unit upper half circle,
/// class 1 on the lower half circle centred at (1, 0.5). Coordinates get
/// isotropic Gaussian noise of std `noise_sigma`.
pub fn gen_two_moons(n: usize, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    check(n, 2, noise_sigma)?;
    let mut rng = stream_rng(seed, Stream::DataNoise, 0);
    let gauss = Normal::new(0.0, noise_sigma).unwrap();
    let counts = balanced(n, 2);
    let mut coords = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for t in linspace(counts[0], PI) {
        coords.extend([t.cos(), t.sin()]);
        labels.push(0);
    }
    for t in linspace(counts[1], PI) {
        coords.extend([1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    if noise_sigma > 0.0 {
        coords.iter_mut().for_each(|v| *v += gauss.sample(&mut rng));
    }
    points(coords, labels, 2)
}

/// `k` isotropic Gaussian blobs of std `spread` around centres evenly spaced
/// on the unit circle.
pub fn gen_gaussian_blobs(n: usize, k_classes: usize, spread: f64, seed: u64) -> Result<Dataset> {
    check(n, k_classes, spread)?;
    let mut rng = stream_rng(seed, Stream::DataNoise, 0);
    let gauss = Normal::new(0.0, spread).unwrap();
    let mut coords = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for (c, count) in balanced(n, k_classes).into_iter().enumerate() {
        let angle = 2.0 * PI * c as f64 / k_classes as f64;
        for _ in 0..count {
            coords.push(angle.cos() + gauss.sample(&mut rng));
            coords.push(angle.sin() + gauss.sample(&mut rng));
            labels.push(c);
        }
    }
    points(coords, labels, k_classes)
}

/// Blob centres used by [`gen_gaussian_blobs`].
pub fn blob_centres(k_classes: usize) -> Vec<[f64; 2]> {
    (0..k_classes)
        .map(|c| {
            let a = 2.0 * PI * c as f64 / k_classes as f64;
            [a.cos(), a.sin()]
        })
        .collect()
}

/// Two interleaved Archimedean spiral arms with `turns` revolutions.
pub fn gen_spirals(n: usize, turns: f64, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    check(n, 2, noise_sigma)?;
    if turns.is_nan() || turns <= 0.0 {
        return Err(Error::InvalidArgument("spirals need positive turns".into()));
    }
    let mut rng = stream_rng(seed, Stream::DataNoise, 0);
    let gauss = Normal::new(0.0, noise_sigma).unwrap();
    let mut coords = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for (c, count) in balanced(n, 2).into_iter().enumerate() {
        for i in 0..count {
            let t = (i as f64 + 0.5) / count as f64;
            let angle = 2.0 * PI * turns * t + PI * c as f64;
            coords.push(t * angle.cos() + gauss.sample(&mut rng));
            coords.push(t * angle.sin() + gauss.sample(&mut rng));
            labels.push(c);
        }
    }
    points(coords, labels, 2)
}

/// Small single-channel images of oriented stripes. Class `c` has stripe
/// orientation `pi * c / classes`; each example gets a random phase and
/// per-pixel Gaussian noise, and intensities are clipped to `[0, 1]`.
pub fn gen_glyphs(n: usize, classes: usize, size: usize, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    check(n, classes, noise_sigma)?;
    if size < 4 {
        return Err(Error::InvalidArgument("glyph images need size >= 4".into()));
    }
    let mut rng = stream_rng(seed, Stream::DataNoise, 0);
    let gauss = Normal::new(0.0, noise_sigma).unwrap();
    let freq = 2.0 * PI / (size as f64 / 2.0);
    let mut pixels = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for (c, count) in balanced(n, classes).into_iter().enumerate() {
        let theta = PI * c as f64 / classes as f64;
        let (dx, dy) = (theta.cos(), theta.sin());
        for _ in 0..count {
            let phase = rng.random_range(0.0..2.0 * PI);
            for y in 0..size {
                for x in 0..size {
                    let clean = 0.5 + 0.5 * (freq * (x as f64 * dx + y as f64 * dy) + phase).sin();
                    let noisy = clean + if noise_sigma > 0.0 { gauss.sample(&mut rng) } else { 0.0 };
                    pixels.push(noisy.clamp(0.0, 1.0));
                }
            }
            labels.push(c);
        }
    }
    let features = Tensor::new(vec![n, 1, size, size], pixels)?;
    Dataset::new(features, labels, classes, Split::Train)
}
