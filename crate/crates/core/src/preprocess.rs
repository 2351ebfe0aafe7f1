//! Aspect-ratio aware image preprocessing.
//!
//! Images whose long/short side ratio reaches `target_ratio` are zero-padded
//! on the short side until the ratio is (approximately) `target_ratio`; every
//! image is then resized so its shorter side equals `dim` and center cropped
//! to `dim x dim`. A target ratio of 1 pads to a square; an infinite target
//! never pads (the plain resize + crop pipeline).

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_TARGET_RATIO: f64 = 1.25;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidConfig(format!("image size {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidConfig(format!(
                "{channels} channels, expected 1 or 3"
            )));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} bytes for {width}x{height}x{channels}",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
        )
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> u8,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    pixels.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Nearest,
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_ratio: f64,
    pub dim: usize,
    pub interpolation: Interpolation,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_ratio: DEFAULT_TARGET_RATIO,
            dim: 224,
            interpolation: Interpolation::Bilinear,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_ratio >= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "target_ratio must be >= 1, got {}",
                self.target_ratio
            )));
        }
        if self.dim == 0 {
            return Err(Error::InvalidConfig("dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// Zero padding `(horizontal, vertical)` applied on each side of a `w x h` image.
///
/// Returns `(0, 0)` when the aspect ratio is below the target. Otherwise the
/// padding is `floor((max(w, h) / target - side) / 2)` clamped at zero, so the
/// padded short side falls at most 2 pixels short of `max(w, h) / target`.
pub fn padding_for(w: usize, h: usize, target_ratio: f64) -> (usize, usize) {
    let (wf, hf) = (w as f64, h as f64);
    let long = wf.max(hf);
    let aspect = long / wf.min(hf);
    if aspect < target_ratio {
        return (0, 0);
    }
    let scaled = long / target_ratio;
    let pad = |side: f64| ((scaled - side) / 2.0).floor().max(0.0) as usize;
    (pad(wf), pad(hf))
}

pub fn pad_to_ratio(img: &ImageBuffer, target_ratio: f64) -> ImageBuffer {
    let (hp, vp) = padding_for(img.width, img.height, target_ratio);
    if hp == 0 && vp == 0 {
        return img.clone();
    }
    let c = img.channels;
    let w = img.width + 2 * hp;
    let h = img.height + 2 * vp;
    let mut pixels = vec![0u8; w * h * c];
    let row_len = img.width * c;
    for y in 0..img.height {
        let src = &img.pixels[y * row_len..(y + 1) * row_len];
        let start = ((y + vp) * w + hp) * c;
        pixels[start..start + row_len].copy_from_slice(src);
    }
    ImageBuffer {
        width: w,
        height: h,
        channels: c,
        pixels,
    }
}

/// Output size when the shorter side becomes `dim`; the longer side is scaled
/// by the same factor and rounded half up.
pub fn resized_dims(w: usize, h: usize, dim: usize) -> (usize, usize) {
    let scale = |long: usize, short: usize| ((2 * long * dim + short) / (2 * short)).max(1);
    if w <= h {
        (dim, scale(h, w))
    } else {
        (scale(w, h), dim)
    }
}

pub fn resize_shorter_side(
    img: &ImageBuffer,
    dim: usize,
    interpolation: Interpolation,
) -> ImageBuffer {
    let (nw, nh) = resized_dims(img.width, img.height, dim);
    if (nw, nh) == img.dims() {
        return img.clone();
    }
    match interpolation {
        Interpolation::Nearest => resize_nearest(img, nw, nh),
        Interpolation::Bilinear => resize_bilinear(img, nw, nh),
    }
}

fn resize_nearest(img: &ImageBuffer, nw: usize, nh: usize) -> ImageBuffer {
    let c = img.channels;
    let src_index = |dst: usize, dst_len: usize, src_len: usize| {
        (((dst as f64 + 0.5) * src_len as f64 / dst_len as f64).floor() as usize).min(src_len - 1)
    };
    let xs: Vec<usize> = (0..nw).map(|x| src_index(x, nw, img.width)).collect();
    let mut pixels = Vec::with_capacity(nw * nh * c);
    for y in 0..nh {
        let sy = src_index(y, nh, img.height);
        for &sx in &xs {
            let base = (sy * img.width + sx) * c;
            pixels.extend_from_slice(&img.pixels[base..base + c]);
        }
    }
    ImageBuffer {
        width: nw,
        height: nh,
        channels: c,
        pixels,
    }
}

/// Half-pixel-centre bilinear sampling, edge clamped.
fn resize_bilinear(img: &ImageBuffer, nw: usize, nh: usize) -> ImageBuffer {
    let c = img.channels;
    let taps = |dst_len: usize, src_len: usize| -> Vec<(usize, usize, f64)> {
        (0..dst_len)
            .map(|i| {
                let s = ((i as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5)
                    .clamp(0.0, (src_len - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src_len - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let xt = taps(nw, img.width);
    let yt = taps(nh, img.height);
    let mut pixels = Vec::with_capacity(nw * nh * c);
    for &(y0, y1, fy) in &yt {
        for &(x0, x1, fx) in &xt {
            for ch in 0..c {
                let p = |x: usize, y: usize| img.get(x, y, ch) as f64;
                let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageBuffer {
        width: nw,
        height: nh,
        channels: c,
        pixels,
    }
}

/// Top-left corner of a centered `dim x dim` window; odd margins lose their
/// extra pixel on the right/bottom.
pub fn crop_origin(w: usize, h: usize, dim: usize) -> (usize, usize) {
    ((w - dim) / 2, (h - dim) / 2)
}

pub fn center_crop(img: &ImageBuffer, dim: usize) -> Result<ImageBuffer> {
    if img.width.min(img.height) < dim || dim == 0 {
        return Err(Error::ShapeMismatch(format!(
            "cannot crop {dim}x{dim} from {}x{}",
            img.width, img.height
        )));
    }
    let (x0, y0) = crop_origin(img.width, img.height, dim);
    let c = img.channels;
    let mut pixels = Vec::with_capacity(dim * dim * c);
    for y in y0..y0 + dim {
        let start = (y * img.width + x0) * c;
        pixels.extend_from_slice(&img.pixels[start..start + dim * c]);
    }
    Ok(ImageBuffer {
        width: dim,
        height: dim,
        channels: c,
        pixels,
    })
}

pub fn preprocess(img: &ImageBuffer, cfg: &PreprocessConfig) -> Result<ImageBuffer> {
    cfg.validate()?;
    let padded = pad_to_ratio(img, cfg.target_ratio);
    let resized = resize_shorter_side(&padded, cfg.dim, cfg.interpolation);
    center_crop(&resized, cfg.dim)
}

/// Fraction of the original image area that survives pad + resize + crop,
/// computed on the continuous geometry (resize is a uniform scale, so it
/// cancels out).
pub fn retained_fraction(w: usize, h: usize, target_ratio: f64) -> f64 {
    let (hp, vp) = padding_for(w, h, target_ratio);
    let pw = (w + 2 * hp) as f64;
    let ph = (h + 2 * vp) as f64;
    let side = pw.min(ph);
    let overlap = |padded: f64, offset: usize, len: usize| {
        let lo = (padded - side) / 2.0;
        let hi = lo + side;
        let a = offset as f64;
        let b = a + len as f64;
        (hi.min(b) - lo.max(a)).max(0.0)
    };
    overlap(pw, hp, w) * overlap(ph, vp, h) / (w as f64 * h as f64)
}

/// The three pipelines compared in the retained-area analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    /// Resize + center crop, never pad.
    Standard,
    /// Always pad to a square.
    Square,
    /// Pad to the configured target ratio when exceeded.
    Proposed,
}

impl Pipeline {
    pub const ALL: [Pipeline; 3] = [Pipeline::Standard, Pipeline::Square, Pipeline::Proposed];

    pub fn target_ratio(self, proposed: f64) -> f64 {
        match self {
            Pipeline::Standard => f64::INFINITY,
            Pipeline::Square => 1.0,
            Pipeline::Proposed => proposed,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Pipeline::Standard => "standard",
            Pipeline::Square => "square",
            Pipeline::Proposed => "proposed",
        }
    }
}

/// Counts of `max(w,h)/min(w,h)` in bins `[start + i*width, start + (i+1)*width)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectHistogram {
    pub first_bin_start: f64,
    pub bin_width: f64,
    pub counts: Vec<u64>,
}

impl AspectHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let lo = self.first_bin_start + i as f64 * self.bin_width;
        (lo, lo + self.bin_width)
    }
}

pub fn aspect_ratio(w: usize, h: usize) -> f64 {
    w.max(h) as f64 / w.min(h) as f64
}

pub fn aspect_histogram(
    dims: &[(usize, usize)],
    bin_width: f64,
    first_bin_start: f64,
) -> Result<AspectHistogram> {
    if dims.is_empty() {
        return Err(Error::Empty("no image sizes".into()));
    }
    if !(bin_width > 0.0) {
        return Err(Error::InvalidConfig(format!("bin width {bin_width}")));
    }
    if let Some((w, h)) = dims.iter().find(|(w, h)| *w == 0 || *h == 0) {
        return Err(Error::InvalidConfig(format!("image size {w}x{h}")));
    }
    let bins: Vec<usize> = dims
        .iter()
        .map(|&(w, h)| {
            let r = aspect_ratio(w, h);
            ((r - first_bin_start) / bin_width).floor().max(0.0) as usize
        })
        .collect();
    let mut counts = vec![0u64; bins.iter().max().map_or(0, |m| m + 1)];
    for b in bins {
        counts[b] += 1;
    }
    Ok(AspectHistogram {
        first_bin_start,
        bin_width,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, 3, |x, y, c| ((x * 7 + y * 13 + c * 31) % 251) as u8).unwrap()
    }

    #[test]
    fn below_target_unchanged() {
        let img = gradient(300, 250);
        assert_eq!(pad_to_ratio(&img, 1.25), img);
    }

    #[test]
    fn wide_image_pads_vertically() {
        assert_eq!(padding_for(400, 200, 1.25), (0, 60));
        let out = pad_to_ratio(&gradient(400, 200), 1.25);
        assert_eq!(out.dims(), (400, 320));
    }

    #[test]
    fn tall_image_square_pad() {
        assert_eq!(padding_for(200, 400, 1.0), (100, 0));
        assert_eq!(pad_to_ratio(&gradient(200, 400), 1.0).dims(), (400, 400));
    }

    #[test]
    fn padding_keeps_original_pixels_centered() {
        let img = gradient(40, 10);
        let out = pad_to_ratio(&img, 1.25);
        let (hp, vp) = padding_for(40, 10, 1.25);
        assert_eq!((hp, vp), (0, 11));
        for y in 0..img.height() {
            for x in 0..img.width() {
                for c in 0..3 {
                    assert_eq!(out.get(x + hp, y + vp, c), img.get(x, y, c));
                }
            }
        }
        assert_eq!(out.get(0, 0, 0), 0);
        assert_eq!(out.get(39, 31, 2), 0);
    }

    #[test]
    fn resize_dims() {
        assert_eq!(resized_dims(400, 320, 224), (280, 224));
        assert_eq!(resized_dims(100, 50, 100), (200, 100));
        assert_eq!(resized_dims(224, 224, 224), (224, 224));
        let img = gradient(224, 224);
        assert_eq!(resize_shorter_side(&img, 224, Interpolation::Nearest), img);
    }

    #[test]
    fn nearest_upscale_by_two_duplicates_pixels() {
        let img = gradient(3, 2);
        let out = resize_shorter_side(&img, 4, Interpolation::Nearest);
        assert_eq!(out.dims(), (6, 4));
        for y in 0..4 {
            for x in 0..6 {
                assert_eq!(out.get(x, y, 1), img.get(x / 2, y / 2, 1));
            }
        }
    }

    #[test]
    fn bilinear_preserves_constant_images() {
        let img = ImageBuffer::filled(37, 23, 3, 91).unwrap();
        let out = resize_shorter_side(&img, 50, Interpolation::Bilinear);
        assert_eq!(out.dims(), (80, 50));
        assert!(out.pixels().iter().all(|&p| p == 91));
    }

    #[test]
    fn crop_offsets() {
        let img = gradient(280, 224);
        let out = center_crop(&img, 224).unwrap();
        assert_eq!(out.get(0, 0, 0), img.get(28, 0, 0));
        assert_eq!(out.get(223, 223, 2), img.get(251, 223, 2));
        assert_eq!(
            center_crop(&gradient(224, 224), 224).unwrap(),
            gradient(224, 224)
        );
        assert!(center_crop(&gradient(223, 224), 224).is_err());
        // odd margin: one extra pixel dropped on the right
        assert_eq!(crop_origin(5, 4, 4), (0, 0));
        assert_eq!(crop_origin(7, 4, 4), (1, 0));
    }

    #[test]
    fn full_chain_on_wide_image() {
        let cfg = PreprocessConfig {
            target_ratio: 1.25,
            dim: 224,
            interpolation: Interpolation::Nearest,
        };
        let img = gradient(400, 200);
        let padded = pad_to_ratio(&img, 1.25);
        assert_eq!(padded.dims(), (400, 320));
        let resized = resize_shorter_side(&padded, 224, Interpolation::Nearest);
        assert_eq!(resized.dims(), (280, 224));
        assert_eq!(preprocess(&img, &cfg).unwrap().dims(), (224, 224));
        let square = gradient(224, 224);
        assert_eq!(preprocess(&square, &cfg).unwrap(), square);
    }

    #[test]
    fn retained_fractions() {
        assert_eq!(retained_fraction(300, 300, 1.25), 1.0);
        assert!((retained_fraction(400, 200, f64::INFINITY) - 0.5).abs() < 1e-12);
        assert!((retained_fraction(400, 200, 1.25) - 0.8).abs() < 1e-12);
        assert!((retained_fraction(400, 200, 1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aspect_bins() {
        let h = aspect_histogram(&[(10, 10), (14, 10), (16, 10), (21, 10)], 0.5, 1.0).unwrap();
        assert_eq!(h.counts, vec![2, 1, 1]);
        let sq = aspect_histogram(&[(5, 5), (7, 7)], 0.5, 1.0).unwrap();
        assert_eq!(sq.counts, vec![2]);
        assert_eq!(aspect_histogram(&[(3, 9)], 0.5, 1.0).unwrap().total(), 1);
        assert!(aspect_histogram(&[], 0.5, 1.0).is_err());
    }

    #[test]
    fn buffer_validation() {
        assert!(ImageBuffer::new(2, 2, 3, vec![0; 11]).is_err());
        assert!(ImageBuffer::new(2, 2, 2, vec![0; 8]).is_err());
        assert!(ImageBuffer::new(0, 2, 1, vec![]).is_err());
    }
}
