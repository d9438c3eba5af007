//! Stochastic views of a sample: scale-and-noise for feature vectors, crop / flip /
//! jitter / grayscale for images, and in-batch sample repetition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DcdcError, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMode {
    Vector,
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VectorAugment {
    pub noise_sigma: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
}

impl Default for VectorAugment {
    fn default() -> Self {
        VectorAugment {
            noise_sigma: 0.5,
            scale_lo: 0.8,
            scale_hi: 1.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageAugment {
    pub crop_padding: usize,
    pub flip_prob: f64,
    pub jitter_strength: f64,
    pub grayscale_prob: f64,
}

impl Default for ImageAugment {
    fn default() -> Self {
        ImageAugment {
            crop_padding: 4,
            flip_prob: 0.5,
            jitter_strength: 0.4,
            grayscale_prob: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec {
    pub mode: AugmentMode,
    pub vector: VectorAugment,
    pub image: ImageAugment,
    pub repeat: usize,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            mode: AugmentMode::Vector,
            vector: VectorAugment::default(),
            image: ImageAugment::default(),
            repeat: 3,
        }
    }
}

impl AugmentSpec {
    /// A spec under which every transform is the identity.
    pub fn identity(mode: AugmentMode) -> Self {
        AugmentSpec {
            mode,
            vector: VectorAugment {
                noise_sigma: 0.0,
                scale_lo: 1.0,
                scale_hi: 1.0,
            },
            image: ImageAugment {
                crop_padding: 0,
                flip_prob: 0.0,
                jitter_strength: 0.0,
                grayscale_prob: 0.0,
            },
            repeat: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = &self.vector;
        if !(v.noise_sigma >= 0.0) || !v.noise_sigma.is_finite() {
            return Err(DcdcError::config("noise_sigma must be >= 0"));
        }
        if !(v.scale_lo > 0.0 && v.scale_lo <= v.scale_hi && v.scale_hi.is_finite()) {
            return Err(DcdcError::config("scale range must satisfy 0 < lo <= hi"));
        }
        let im = &self.image;
        for (name, p) in [("flip_prob", im.flip_prob), ("grayscale_prob", im.grayscale_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(DcdcError::config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&im.jitter_strength) {
            return Err(DcdcError::config("jitter_strength must lie in [0, 1]"));
        }
        if self.repeat == 0 {
            return Err(DcdcError::config("repeat must be >= 1"));
        }
        Ok(())
    }
}

/// Independent rng stream for one sample of one batch.
pub fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `s * x + noise`, `s ~ U[lo, hi]`, `noise ~ N(0, sigma^2 I)`.
pub fn augment_vector<R: Rng + ?Sized>(x: &[f64], spec: &VectorAugment, rng: &mut R) -> Vec<f64> {
    let scale = if spec.scale_lo == spec.scale_hi {
        spec.scale_lo
    } else {
        rng.random_range(spec.scale_lo..=spec.scale_hi)
    };
    if spec.noise_sigma == 0.0 {
        return x.iter().map(|v| scale * v).collect();
    }
    let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
    x.iter().map(|v| scale * v + noise.sample(rng)).collect()
}

/// Augments every row with its own rng stream, so the result does not depend on
/// evaluation order.
pub fn augment_rows(x: &Matrix, spec: &VectorAugment, seed: u64, streams: &[u64]) -> Matrix {
    assert_eq!(x.rows(), streams.len());
    let mut out = x.clone();
    for (i, &stream) in streams.iter().enumerate() {
        let mut rng = sample_rng(seed, stream);
        let row = augment_vector(x.row(i), spec, &mut rng);
        out.row_mut(i).copy_from_slice(&row);
    }
    out
}

/// Interleaved `H x W x 3` byte image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Image> {
        if height == 0 || width == 0 {
            return Err(DcdcError::shape("image dimensions must be positive"));
        }
        if data.len() != height * width * 3 {
            return Err(DcdcError::shape(format!(
                "{} bytes for a {height}x{width}x3 image",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Pixels scaled to [0, 1], row-major, channels interleaved.
    pub fn to_unit_floats(&self) -> Vec<f64> {
        self.data.iter().map(|&b| b as f64 / 255.0).collect()
    }
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Pad-and-crop, horizontal flip, brightness/contrast jitter, grayscale; in that order.
pub fn augment_image<R: Rng + ?Sized>(img: &Image, spec: &ImageAugment, rng: &mut R) -> Result<Image> {
    let (h, w) = (img.height, img.width);
    if h == 0 || w == 0 || img.data.len() != h * w * 3 {
        return Err(DcdcError::shape("degenerate image"));
    }
    let pad = spec.crop_padding;
    let (dy, dx) = if pad > 0 {
        (rng.random_range(0..=2 * pad), rng.random_range(0..=2 * pad))
    } else {
        (pad, pad)
    };
    let flip = spec.flip_prob > 0.0 && rng.random_bool(spec.flip_prob);

    let mut px = vec![0.0f64; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            // Source coordinates in the zero-padded image, shifted back to the original.
            let sx = if flip { w - 1 - x } else { x };
            let (py, pxx) = (y + dy, sx + dx);
            if py < pad || pxx < pad || py - pad >= h || pxx - pad >= w {
                continue;
            }
            let src = img.pixel(py - pad, pxx - pad);
            let o = (y * w + x) * 3;
            for c in 0..3 {
                px[o + c] = src[c] as f64;
            }
        }
    }

    let s = spec.jitter_strength;
    if s > 0.0 {
        let brightness = rng.random_range(1.0 - s..=1.0 + s);
        let contrast = rng.random_range(1.0 - s..=1.0 + s);
        px.iter_mut().for_each(|v| *v *= brightness);
        let mean = px.iter().sum::<f64>() / px.len() as f64;
        px.iter_mut().for_each(|v| *v = (*v - mean) * contrast + mean);
    }

    if spec.grayscale_prob > 0.0 && rng.random_bool(spec.grayscale_prob) {
        for p in px.chunks_exact_mut(3) {
            let luma = LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2];
            p.fill(luma);
        }
    }

    let data = px.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    Image::new(h, w, data)
}

/// Each index repeated `r` times consecutively.
pub fn repeat_batch(indices: &[usize], r: usize) -> Vec<usize> {
    indices
        .iter()
        .flat_map(|&i| std::iter::repeat_n(i, r))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, (0..h * w * 3).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn identity_vector_spec() {
        let x = vec![1.5, -2.0, 0.25, 1e6];
        let spec = AugmentSpec::identity(AugmentMode::Vector).vector;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment_vector(&x, &spec, &mut rng), x);
    }

    #[test]
    fn vector_augment_is_deterministic() {
        let x = vec![1.0, 2.0, 3.0];
        let spec = VectorAugment::default();
        let a = augment_vector(&x, &spec, &mut ChaCha8Rng::seed_from_u64(9));
        let b = augment_vector(&x, &spec, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_ne!(a, x);
    }

    #[test]
    fn vector_noise_has_requested_std() {
        let spec = VectorAugment {
            noise_sigma: 0.1,
            scale_lo: 1.0,
            scale_hi: 1.0,
        };
        let x = vec![0.5, -1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut resid = Vec::new();
        for _ in 0..5_000 {
            let y = augment_vector(&x, &spec, &mut rng);
            resid.extend(y.iter().zip(&x).map(|(a, b)| a - b));
        }
        let n = resid.len() as f64;
        let mean = resid.iter().sum::<f64>() / n;
        let std = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std - 0.1).abs() < 0.005, "{std}");
    }

    #[test]
    fn augment_rows_uses_per_row_streams() {
        let x = Matrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64);
        let spec = VectorAugment::default();
        let a = augment_rows(&x, &spec, 5, &[0, 1, 2, 3]);
        let reversed = augment_rows(&x.select_rows(&[3, 2, 1, 0]), &spec, 5, &[3, 2, 1, 0]);
        assert_eq!(a, reversed.select_rows(&[3, 2, 1, 0]));
        assert_eq!(a.shape(), x.shape());
    }

    #[test]
    fn identity_image_spec() {
        let img = test_image(6, 5, 3);
        let spec = AugmentSpec::identity(AugmentMode::Image).image;
        let out = augment_image(&img, &spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn grayscale_of_gray_image_is_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<u8> = (0..16).flat_map(|_| [rng.random::<u8>(); 3]).collect();
        let img = Image::new(4, 4, data).unwrap();
        let spec = ImageAugment {
            crop_padding: 0,
            flip_prob: 0.0,
            jitter_strength: 0.0,
            grayscale_prob: 1.0,
        };
        assert_eq!(augment_image(&img, &spec, &mut rng).unwrap(), img);
    }

    #[test]
    fn crop_keeps_shape() {
        let img = test_image(8, 8, 6);
        let spec = ImageAugment::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let out = augment_image(&img, &spec, &mut rng).unwrap();
            assert_eq!((out.height(), out.width()), (8, 8));
        }
    }

    #[test]
    fn flip_mirrors_columns() {
        let img = test_image(3, 4, 8);
        let spec = ImageAugment {
            crop_padding: 0,
            flip_prob: 1.0,
            jitter_strength: 0.0,
            grayscale_prob: 0.0,
        };
        let out = augment_image(&img, &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(out.pixel(y, x), img.pixel(y, 3 - x));
            }
        }
    }

    #[test]
    fn crop_is_a_shift_with_zero_fill() {
        let img = test_image(8, 8, 9);
        let spec = ImageAugment {
            crop_padding: 2,
            flip_prob: 0.0,
            jitter_strength: 0.0,
            grayscale_prob: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..10 {
            let out = augment_image(&img, &spec, &mut rng).unwrap();
            // Some shift (dy, dx) in [-2, 2]^2 must explain every pixel.
            let explained = (-2i64..=2).any(|dy| {
                (-2i64..=2).any(|dx| {
                    (0..8i64).all(|y| {
                        (0..8i64).all(|x| {
                            let (sy, sx) = (y + dy, x + dx);
                            let want = if (0..8).contains(&sy) && (0..8).contains(&sx) {
                                img.pixel(sy as usize, sx as usize)
                            } else {
                                [0, 0, 0]
                            };
                            out.pixel(y as usize, x as usize) == want
                        })
                    })
                })
            });
            assert!(explained);
        }
    }

    #[test]
    fn degenerate_image_is_rejected() {
        assert!(Image::new(0, 4, vec![]).is_err());
        assert!(Image::new(2, 2, vec![0; 11]).is_err());
    }

    #[test]
    fn repeat_batch_examples() {
        let idx: Vec<usize> = (0..10).rev().collect();
        assert_eq!(repeat_batch(&idx, 1), idx);
        let rep = repeat_batch(&idx, 3);
        assert_eq!(rep.len(), 30);
        for (k, chunk) in rep.chunks(3).enumerate() {
            assert_eq!(chunk, &[idx[k]; 3]);
        }
        let mut sorted = rep.clone();
        sorted.sort();
        let mut expect: Vec<usize> = idx.iter().flat_map(|&i| [i; 3]).collect();
        expect.sort();
        assert_eq!(sorted, expect);
    }

    #[test]
    fn spec_validation() {
        let mut s = AugmentSpec::default();
        assert!(s.validate().is_ok());
        s.vector.scale_lo = 2.0;
        assert!(s.validate().is_err());
        let mut s = AugmentSpec::default();
        s.image.flip_prob = 1.5;
        assert!(s.validate().is_err());
        let mut s = AugmentSpec::default();
        s.repeat = 0;
        assert!(s.validate().is_err());
    }
}
