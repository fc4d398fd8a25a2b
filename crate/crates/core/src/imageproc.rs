//! Image preprocessing: percentile clipping, the two normalisation schemes,
//! and multi-crop augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

/// Linear-interpolated percentile of an unsorted sample (`pct` in [0, 100]).
/// Uses the `(n - 1) * q` position convention.
pub fn percentile(values: &mut [f32], pct: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty sample");
    let n = values.len();
    let pos = (pct / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let (_, lo_v, rest) = values.select_nth_unstable_by(lo, |a, b| a.total_cmp(b));
    let lo_v = *lo_v as f64;
    if hi == lo {
        return lo_v;
    }
    // The element at `hi = lo + 1` is the minimum of the upper partition.
    let hi_v = rest.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    lo_v + (pos - lo as f64) * (hi_v - lo_v)
}

/// Per-channel clipping window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipBounds {
    pub lo: [f64; CHANNELS],
    pub hi: [f64; CHANNELS],
}

impl ClipBounds {
    /// Percentile window per channel over the pooled pixels of `images`
    /// (the analogue of clipping a whole field of view).
    pub fn from_pool<'a>(
        images: impl IntoIterator<Item = &'a Image>,
        lo_pct: f64,
        hi_pct: f64,
    ) -> Result<Self> {
        check_pcts(lo_pct, hi_pct)?;
        let mut pooled: Vec<Vec<f32>> = vec![Vec::new(); CHANNELS];
        for img in images {
            check_channels(img)?;
            for (c, pool) in pooled.iter_mut().enumerate() {
                pool.extend_from_slice(img.channel(c));
            }
        }
        if pooled[0].is_empty() {
            return Err(Error::Shape("no pixels to compute clip bounds from".into()));
        }
        let mut lo = [0.0; CHANNELS];
        let mut hi = [0.0; CHANNELS];
        for c in 0..CHANNELS {
            lo[c] = percentile(&mut pooled[c], lo_pct);
            hi[c] = percentile(&mut pooled[c], hi_pct);
        }
        Ok(ClipBounds { lo, hi })
    }

    /// Clip to the window and map it linearly onto [0, 1]; a zero-width
    /// window maps to zeros.
    pub fn apply(&self, image: &Image) -> Result<Image> {
        check_channels(image)?;
        let mut out = image.clone();
        for c in 0..CHANNELS {
            let (lo, hi) = (self.lo[c], self.hi[c]);
            let width = hi - lo;
            for v in out.channel_mut(c) {
                *v = if width > 0.0 {
                    ((*v as f64).clamp(lo, hi) - lo) as f32 / width as f32
                } else {
                    0.0
                };
            }
        }
        Ok(out)
    }
}

fn check_pcts(lo: f64, hi: f64) -> Result<()> {
    if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo >= hi {
        return Err(Error::config(
            "clip_percentiles",
            format!("need 0 <= lo < hi <= 100, got ({lo}, {hi})"),
        ));
    }
    Ok(())
}

fn check_channels(image: &Image) -> Result<()> {
    if image.is_empty() {
        return Err(Error::Shape("empty image".into()));
    }
    if image.channels != CHANNELS {
        return Err(Error::Shape(format!(
            "expected {CHANNELS} channels, got {}",
            image.channels
        )));
    }
    Ok(())
}

/// Per-image, per-channel percentile clipping followed by rescaling to [0, 1].
pub fn clip_and_rescale(image: &Image, lo_pct: f64, hi_pct: f64) -> Result<Image> {
    ClipBounds::from_pool([image], lo_pct, hi_pct)?.apply(image)
}

/// Image-wise, channel-wise z-score with population standard deviation.
/// Zero-variance channels become zeros (with a warning).
pub fn zscore_normalize(image: &Image) -> Result<Image> {
    check_channels(image)?;
    let mut out = image.clone();
    for c in 0..CHANNELS {
        let mean = image.channel_mean(c);
        let std = image.channel_std(c);
        let ch = out.channel_mut(c);
        if std <= f64::EPSILON * mean.abs().max(1.0) {
            log::warn!("zero-variance channel {c} normalised to zeros");
            ch.iter_mut().for_each(|v| *v = 0.0);
        } else {
            ch.iter_mut()
                .for_each(|v| *v = ((*v as f64 - mean) / std) as f32);
        }
    }
    Ok(out)
}

/// Pooled pixel statistics of the non-targeting controls of one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NtcStats {
    pub batch_id: u32,
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
    pub n_cells: usize,
}

/// Pool every pixel of the given NTC images of `batch_id`, per channel.
pub fn compute_ntc_stats<'a>(
    ntc_images: impl IntoIterator<Item = &'a Image>,
    batch_id: u32,
) -> Result<NtcStats> {
    let mut sum = [0.0f64; CHANNELS];
    let mut sum_sq = [0.0f64; CHANNELS];
    let mut count = 0usize;
    let mut n_cells = 0usize;
    let images: Vec<&Image> = ntc_images.into_iter().collect();
    for img in &images {
        check_channels(img)?;
        n_cells += 1;
        count += img.plane_len();
        for c in 0..CHANNELS {
            sum[c] += img.channel(c).iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    if n_cells == 0 {
        return Err(Error::MissingControls(format!(
            "batch {batch_id} has no NTC cells"
        )));
    }
    let mut mean = [0.0; CHANNELS];
    for c in 0..CHANNELS {
        mean[c] = sum[c] / count as f64;
    }
    for img in &images {
        for c in 0..CHANNELS {
            sum_sq[c] += img
                .channel(c)
                .iter()
                .map(|&v| (v as f64 - mean[c]).powi(2))
                .sum::<f64>();
        }
    }
    let mut std = [0.0; CHANNELS];
    for c in 0..CHANNELS {
        std[c] = (sum_sq[c] / count as f64).sqrt();
        if std[c] <= 0.0 {
            return Err(Error::MissingVariance(format!(
                "NTC pixels of batch {batch_id} have zero variance in channel {c}"
            )));
        }
    }
    Ok(NtcStats {
        batch_id,
        mean,
        std,
        n_cells,
    })
}

/// `(image - mean) / std` per channel, using the NTC statistics of the image's batch.
pub fn ntc_zscore_normalize(image: &Image, batch_id: u32, stats: &NtcStats) -> Result<Image> {
    check_channels(image)?;
    if stats.batch_id != batch_id {
        return Err(Error::Misuse(format!(
            "image of batch {batch_id} normalised with NTC statistics of batch {}",
            stats.batch_id
        )));
    }
    if stats.std.iter().any(|&s| s <= 0.0) {
        return Err(Error::MissingVariance(format!(
            "NTC statistics of batch {batch_id} have zero variance"
        )));
    }
    let mut out = image.clone();
    for c in 0..CHANNELS {
        let (m, s) = (stats.mean[c], stats.std[c]);
        out.channel_mut(c)
            .iter_mut()
            .for_each(|v| *v = ((*v as f64 - m) / s) as f32);
    }
    Ok(out)
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return image.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = (image.height as isize, image.width as isize);
    let mut tmp = image.clone();
    let mut out = image.clone();
    for c in 0..image.channels {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let xx = (x + k as isize - radius).clamp(0, w - 1);
                    acc += kv * image.at(c, y as usize, xx as usize) as f64;
                }
                *tmp.at_mut(c, y as usize, x as usize) = acc as f32;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let yy = (y + k as isize - radius).clamp(0, h - 1);
                    acc += kv * tmp.at(c, yy as usize, x as usize) as f64;
                }
                *out.at_mut(c, y as usize, x as usize) = acc as f32;
            }
        }
    }
    out
}

/// Bilinear resample of the square window `[x0, x0+side) x [y0, y0+side)`
/// to `out x out` pixels (half-pixel centres, replicated borders).
pub fn crop_resize(image: &Image, x0: f64, y0: f64, side: f64, out: usize) -> Image {
    let mut dst = Image::zeros(image.channels, out, out);
    let scale = side / out as f64;
    let (h, w) = (image.height, image.width);
    let coord = |o: usize, origin: f64, limit: usize| {
        let s = (origin + (o as f64 + 0.5) * scale - 0.5).clamp(0.0, (limit - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(limit - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let xs: Vec<_> = (0..out).map(|o| coord(o, x0, w)).collect();
    let ys: Vec<_> = (0..out).map(|o| coord(o, y0, h)).collect();
    for c in 0..image.channels {
        for (oy, &(y0i, y1i, fy)) in ys.iter().enumerate() {
            for (ox, &(x0i, x1i, fx)) in xs.iter().enumerate() {
                let a = image.at(c, y0i, x0i);
                let b = image.at(c, y0i, x1i);
                let cc = image.at(c, y1i, x0i);
                let d = image.at(c, y1i, x1i);
                let top = a + (b - a) * fx;
                let bottom = cc + (d - cc) * fx;
                *dst.at_mut(c, oy, ox) = top + (bottom - top) * fy;
            }
        }
    }
    dst
}

/// Resize a whole image to `out x out`.
pub fn resize(image: &Image, out: usize) -> Image {
    if image.height == out && image.width == out {
        return image.clone();
    }
    crop_resize(image, 0.0, 0.0, image.width as f64, out)
}

/// Horizontal flip followed by `quarter_turns` counter-clockwise 90-degree rotations.
pub fn flip_rotate(image: &Image, flip: bool, quarter_turns: u8) -> Image {
    let n = image.width;
    debug_assert_eq!(image.height, n);
    let mut out = Image::zeros(image.channels, n, n);
    for c in 0..image.channels {
        for y in 0..n {
            for x in 0..n {
                let (mut ry, mut rx) = (y, if flip { n - 1 - x } else { x });
                for _ in 0..quarter_turns % 4 {
                    (ry, rx) = (n - 1 - rx, ry);
                }
                *out.at_mut(c, ry, rx) = image.at(c, y, x);
            }
        }
    }
    out
}

/// Crop geometry of the multi-crop augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultiCropConfig {
    pub n_global: usize,
    pub n_local: usize,
    pub global_size: usize,
    pub local_size: usize,
    /// Area fraction range of global crops.
    pub global_scale: (f64, f64),
    /// Area fraction range of local crops.
    pub local_scale: (f64, f64),
}

impl Default for MultiCropConfig {
    fn default() -> Self {
        MultiCropConfig {
            n_global: 2,
            n_local: 8,
            global_size: 48,
            local_size: 24,
            global_scale: (0.5, 1.0),
            local_scale: (0.15, 0.4),
        }
    }
}

fn random_crop(image: &Image, scale: (f64, f64), out: usize, rng: &mut impl Rng) -> Image {
    let s = image.width as f64;
    let frac = if scale.1 > scale.0 {
        rng.random_range(scale.0..scale.1)
    } else {
        scale.0
    };
    let side = (frac.sqrt() * s).clamp(1.0, s);
    let x0 = rng.random_range(0.0..=(s - side));
    let y0 = rng.random_range(0.0..=(s - side));
    let flip = rng.random::<bool>();
    let turns = rng.random_range(0..4u8);
    let crop = crop_resize(image, x0, y0, side, out);
    flip_rotate(&crop, flip, turns)
}

/// Global and local crops of one image, drawn in that order from `rng`.
pub fn multicrop(
    image: &Image,
    config: &MultiCropConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<Image>, Vec<Image>)> {
    check_channels(image)?;
    if config.global_size == 0 || config.local_size == 0 {
        return Err(Error::config("crop size", "crop sizes must be positive"));
    }
    let globals = (0..config.n_global)
        .map(|_| random_crop(image, config.global_scale, config.global_size, rng))
        .collect();
    let locals = (0..config.n_local)
        .map(|_| random_crop(image, config.local_scale, config.local_size, rng))
        .collect();
    Ok((globals, locals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn image_from_fn(mut f: impl FnMut(usize, usize, usize) -> f32, n: usize) -> Image {
        let mut img = Image::zeros(CHANNELS, n, n);
        for c in 0..CHANNELS {
            for y in 0..n {
                for x in 0..n {
                    *img.at_mut(c, y, x) = f(c, y, x);
                }
            }
        }
        img
    }

    #[test]
    fn percentile_matches_sorted_interpolation() {
        let mut v: Vec<f32> = vec![5.0, 1.0, 4.0, 2.0, 3.0];
        assert_eq!(percentile(&mut v, 0.0), 1.0);
        assert_eq!(percentile(&mut v, 100.0), 5.0);
        assert!((percentile(&mut v, 50.0) - 3.0).abs() < 1e-12);
        assert!((percentile(&mut v, 10.0) - 1.4).abs() < 1e-6);
    }

    #[test]
    fn constant_channel_clips_to_zeros() {
        let img = image_from_fn(|_, _, _| 5.0, 8);
        let out = clip_and_rescale(&img, 0.1, 99.9).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ramp_maps_to_unit_interval() {
        // 1000 pixels would need a non-square image; use a 4-channel 1x1000 ramp.
        let data: Vec<f32> = (0..4).flat_map(|_| (0..1000).map(|i| i as f32)).collect();
        let img = Image::from_vec(4, 1, 1000, data).unwrap();
        let out = clip_and_rescale(&img, 0.1, 99.9).unwrap();
        let ch = out.channel(0);
        assert_eq!(ch.iter().copied().fold(f32::INFINITY, f32::min), 0.0);
        assert_eq!(ch.iter().copied().fold(f32::NEG_INFINITY, f32::max), 1.0);
        let mut sorted = ch.to_vec();
        let median = percentile(&mut sorted, 50.0);
        assert!((median - 0.5).abs() < 2.0 / 1000.0, "median {median}");
    }

    #[test]
    fn unit_noise_stays_in_unit_interval() {
        let mut rng = seed::rng(1, &[]);
        let img = image_from_fn(|_, _, _| rng.random::<f32>(), 16);
        let out = clip_and_rescale(&img, 0.1, 99.9).unwrap();
        assert!(out.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn empty_image_is_a_shape_error() {
        let img = Image::zeros(4, 0, 0);
        assert!(matches!(clip_and_rescale(&img, 0.1, 99.9), Err(Error::Shape(_))));
    }

    #[test]
    fn zscore_hand_computed_and_affine_invariant() {
        let data: Vec<f32> = (0..4).flat_map(|_| [0.0, 0.0, 1.0, 1.0]).collect();
        let img = Image::from_vec(4, 2, 2, data).unwrap();
        let out = zscore_normalize(&img).unwrap();
        assert_eq!(out.channel(0), &[-1.0, -1.0, 1.0, 1.0]);

        let mut rng = seed::rng(2, &[]);
        let x = image_from_fn(|_, _, _| rng.random::<f32>(), 12);
        let mut y = x.clone();
        y.data.iter_mut().for_each(|v| *v = 3.0 * *v + 7.0);
        let zx = zscore_normalize(&x).unwrap();
        let zy = zscore_normalize(&y).unwrap();
        for c in 0..4 {
            assert!(zx.channel_mean(c).abs() < 1e-5);
            assert!((zx.channel_std(c) - 1.0).abs() < 1e-5);
        }
        for (a, b) in zx.data.iter().zip(&zy.data) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn zscore_zero_variance_channel_becomes_zeros() {
        let img = image_from_fn(|c, y, x| if c == 0 { 2.0 } else { (x + y) as f32 }, 4);
        let out = zscore_normalize(&img).unwrap();
        assert!(out.channel(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ntc_stats_errors_and_pooling() {
        assert!(matches!(
            compute_ntc_stats(std::iter::empty(), 0),
            Err(Error::MissingControls(_))
        ));
        let constant = image_from_fn(|c, _, _| c as f32 + 1.0, 4);
        assert!(matches!(
            compute_ntc_stats([&constant], 0),
            Err(Error::MissingVariance(_))
        ));
        // Oracle: concatenate pixels and compute mean/std directly.
        let a = image_from_fn(|c, y, x| (c + y * 4 + x) as f32, 4);
        let b = image_from_fn(|c, y, x| ((c + 1) * (y + x)) as f32 * 0.5, 6);
        let stats = compute_ntc_stats([&a, &b], 3).unwrap();
        for c in 0..4 {
            let pooled: Vec<f64> = a
                .channel(c)
                .iter()
                .chain(b.channel(c))
                .map(|&v| v as f64)
                .collect();
            let mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
            let var = pooled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / pooled.len() as f64;
            let weighted = (a.channel_mean(c) * 16.0 + b.channel_mean(c) * 36.0) / 52.0;
            assert!((stats.mean[c] - mean).abs() < 1e-9);
            assert!((stats.mean[c] - weighted).abs() < 1e-9);
            assert!((stats.std[c] - var.sqrt()).abs() < 1e-9);
        }
        assert_eq!(stats.n_cells, 2);
    }

    #[test]
    fn ntc_zscore_maps_mean_to_zero_and_rejects_wrong_batch() {
        let a = image_from_fn(|c, y, x| (c + y * 3 + x) as f32, 5);
        let stats = compute_ntc_stats([&a], 1).unwrap();
        let mean_img = image_from_fn(|c, _, _| stats.mean[c] as f32, 5);
        let out = ntc_zscore_normalize(&mean_img, 1, &stats).unwrap();
        assert!(out.data.iter().all(|v| v.abs() < 1e-6));
        assert!(matches!(
            ntc_zscore_normalize(&a, 2, &stats),
            Err(Error::Misuse(_))
        ));
    }

    #[test]
    fn normalisation_commutes_with_channel_permutation() {
        let mut rng = seed::rng(5, &[]);
        let img = image_from_fn(|c, _, _| rng.random::<f32>() * (c + 1) as f32, 8);
        let perm = [2usize, 0, 3, 1];
        let mut permuted = img.clone();
        for (dst, &src) in perm.iter().enumerate() {
            permuted.channel_mut(dst).copy_from_slice(img.channel(src));
        }
        let a = zscore_normalize(&img).unwrap();
        let b = zscore_normalize(&permuted).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(b.channel(dst), a.channel(src));
        }
        let ca = clip_and_rescale(&img, 0.1, 99.9).unwrap();
        let cb = clip_and_rescale(&permuted, 0.1, 99.9).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(cb.channel(dst), ca.channel(src));
        }
    }

    #[test]
    fn multicrop_shapes_and_determinism() {
        let mut rng = seed::rng(9, &[]);
        let img = image_from_fn(|_, _, _| rng.random::<f32>(), 64);
        let cfg = MultiCropConfig::default();
        let (g1, l1) = multicrop(&img, &cfg, &mut seed::rng(3, &[])).unwrap();
        let (g2, l2) = multicrop(&img, &cfg, &mut seed::rng(3, &[])).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(l1, l2);
        assert_eq!(g1.len(), 2);
        assert_eq!(l1.len(), 8);
        assert!(g1.iter().all(|g| g.shape() == [4, 48, 48]));
        assert!(l1.iter().all(|l| l.shape() == [4, 24, 24]));
        let none = MultiCropConfig { n_local: 0, ..cfg };
        let (_, l0) = multicrop(&img, &none, &mut seed::rng(3, &[])).unwrap();
        assert!(l0.is_empty());
    }

    #[test]
    fn flip_rotate_is_a_pixel_permutation() {
        let img = image_from_fn(|c, y, x| (c * 100 + y * 10 + x) as f32, 5);
        for flip in [false, true] {
            for turns in 0..4 {
                let out = flip_rotate(&img, flip, turns);
                let mut a = img.data.clone();
                let mut b = out.data.clone();
                a.sort_by(f32::total_cmp);
                b.sort_by(f32::total_cmp);
                assert_eq!(a, b);
            }
        }
        assert_eq!(flip_rotate(&img, false, 0), img);
        let four = (0..4).fold(img.clone(), |acc, _| flip_rotate(&acc, false, 1));
        assert_eq!(four, img);
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = image_from_fn(|c, _, _| c as f32 + 0.5, 10);
        let out = gaussian_blur(&img, 1.3);
        for (a, b) in img.data.iter().zip(&out.data) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
