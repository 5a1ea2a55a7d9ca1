use std::io::Cursor;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use image::{ImageFormat, RgbImage};
use sha2::{Digest, Sha256};

use super::{BBox, GeometryError};

pub type Rgb = [u8; 3];

pub const GREEN: Rgb = [0, 255, 0];

/// 8-bit RGB raster, row-major, three bytes per pixel.
#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Image").field("width", &self.width).field("height", &self.height).finish()
    }
}

impl Image {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self, GeometryError> {
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(GeometryError::BufferSize { expected, actual: data.len() });
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: u32, height: u32, color: Rgb) -> Self {
        let data = color.iter().copied().cycle().take(width as usize * height as usize * 3).collect();
        Image { width, height, data }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> Rgb {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put_pixel(&mut self, x: u32, y: u32, c: Rgb) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// Fills the axis-aligned pixel rectangle `[x0, x1) x [y0, y1)`, clipped to the image.
    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb) {
        let (x0, x1) = (x0.max(0), x1.min(self.width as i64));
        let (y0, y1) = (y0.max(0), y1.min(self.height as i64));
        for y in y0..y1 {
            for x in x0..x1 {
                self.put_pixel(x as u32, y as u32, c);
            }
        }
    }

    /// Hex SHA-256 over dimensions and pixel buffer.
    pub fn content_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.width.to_le_bytes());
        h.update(self.height.to_le_bytes());
        h.update(&self.data);
        hex::encode(h.finalize())
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        let img = image::open(path).map_err(|e| GeometryError::Decode(format!("{}: {e}", path.display())))?;
        Ok(Image::from(img.to_rgb8()))
    }

    /// Writes PNG or JPEG depending on the file extension.
    pub fn save(&self, path: &Path) -> Result<(), GeometryError> {
        self.to_rgb_image().save(path).map_err(|e| GeometryError::Encode(format!("{}: {e}", path.display())))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, GeometryError> {
        let mut buf = Cursor::new(Vec::new());
        self.to_rgb_image().write_to(&mut buf, ImageFormat::Png).map_err(|e| GeometryError::Encode(e.to_string()))?;
        Ok(buf.into_inner())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, GeometryError> {
        let img = image::load_from_memory(bytes).map_err(|e| GeometryError::Decode(e.to_string()))?;
        Ok(Image::from(img.to_rgb8()))
    }

    pub fn to_png_base64(&self) -> Result<String, GeometryError> {
        Ok(BASE64.encode(self.encode_png()?))
    }

    pub fn from_base64(b64: &str) -> Result<Self, GeometryError> {
        let bytes = BASE64.decode(b64.trim()).map_err(|e| GeometryError::Decode(e.to_string()))?;
        Image::decode(&bytes)
    }

    /// Downscales (never upscales) so that the longer side is at most `max_side`.
    pub fn fit_within(&self, max_side: u32) -> Image {
        let longest = self.width.max(self.height);
        if longest <= max_side || max_side == 0 {
            return self.clone();
        }
        let scale = max_side as f64 / longest as f64;
        let w = ((self.width as f64 * scale).round() as u32).max(1);
        let h = ((self.height as f64 * scale).round() as u32).max(1);
        let resized = image::imageops::resize(&self.to_rgb_image(), w, h, image::imageops::FilterType::Triangle);
        Image::from(resized)
    }

    fn to_rgb_image(&self) -> RgbImage {
        RgbImage::from_raw(self.width, self.height, self.data.clone()).expect("buffer length checked on construction")
    }
}

impl From<RgbImage> for Image {
    fn from(img: RgbImage) -> Self {
        let (width, height) = img.dimensions();
        Image { width, height, data: img.into_raw() }
    }
}

/// Integer pixel rectangle, `[x, x + w) x [y, y + h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

/// Region that [`crop`] would extract: `bbox` scaled about its centre, clamped and rounded.
pub fn crop_region(width: u32, height: u32, bbox: &BBox, context_factor: f64) -> Result<PixelRect, GeometryError> {
    if !(context_factor.is_finite() && context_factor >= 1.0) {
        return Err(GeometryError::ContextFactor(context_factor));
    }
    let (cx, cy) = bbox.center();
    let (hw, hh) = (bbox.w * context_factor / 2.0, bbox.h * context_factor / 2.0);
    let x0 = (cx - hw).clamp(0.0, width as f64);
    let x1 = (cx + hw).clamp(0.0, width as f64);
    let y0 = (cy - hh).clamp(0.0, height as f64);
    let y1 = (cy + hh).clamp(0.0, height as f64);

    let left = (x0.round() as u32).min(width);
    let top = (y0.round() as u32).min(height);
    let w = ((x1 - x0).round() as u32).min(width - left);
    let h = ((y1 - y0).round() as u32).min(height - top);
    if w == 0 || h == 0 {
        return Err(GeometryError::EmptyCrop(*bbox));
    }
    Ok(PixelRect { x: left, y: top, w, h })
}

pub fn crop(img: &Image, bbox: &BBox, context_factor: f64) -> Result<Image, GeometryError> {
    let r = crop_region(img.width, img.height, bbox, context_factor)?;
    let mut data = Vec::with_capacity(r.w as usize * r.h as usize * 3);
    let stride = img.width as usize * 3;
    for row in r.y..r.y + r.h {
        let start = row as usize * stride + r.x as usize * 3;
        data.extend_from_slice(&img.data[start..start + r.w as usize * 3]);
    }
    Ok(Image { width: r.w, height: r.h, data })
}

/// Outline thickness used for the target marker, growing with frame size.
pub fn annotation_thickness(width: u32, height: u32) -> u32 {
    let scaled = (0.004 * width.min(height) as f64).round() as u32;
    scaled.max(3)
}

/// Returns a copy of `img` with a rectangle outline drawn inward from the box edges.
///
/// A box thinner than `thickness` in either direction is widened to `thickness`,
/// so a zero-area box becomes a solid `thickness x thickness` dot at its corner.
pub fn annotate(img: &Image, bbox: &BBox, color: Rgb, thickness: u32) -> Image {
    let mut out = img.clone();
    let t = thickness.max(1) as i64;
    let x0 = bbox.x.round() as i64;
    let y0 = bbox.y.round() as i64;
    let x1 = (bbox.right().round() as i64).max(x0 + t);
    let y1 = (bbox.bottom().round() as i64).max(y0 + t);
    out.fill_rect(x0, y0, x1, y0 + t, color);
    out.fill_rect(x0, y1 - t, x1, y1, color);
    out.fill_rect(x0, y0, x0 + t, y1, color);
    out.fill_rect(x1 - t, y0, x1, y1, color);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: u32, h: u32) -> Image {
        let mut img = Image::filled(w, h, [0, 0, 0]);
        for y in 0..h {
            for x in 0..w {
                img.put_pixel(x, y, [x as u8, y as u8, 7]);
            }
        }
        img
    }

    #[test]
    fn crop_identity_region() {
        let img = gradient(100, 100);
        let c = crop(&img, &BBox::new(10.0, 10.0, 20.0, 20.0).unwrap(), 1.0).unwrap();
        assert_eq!((c.width(), c.height()), (20, 20));
        assert_eq!(c.pixel(0, 0), [10, 10, 7]);
        assert_eq!(c.pixel(19, 19), [29, 29, 7]);
    }

    #[test]
    fn crop_clamps_at_border() {
        let img = gradient(100, 100);
        let c = crop(&img, &BBox::new(90.0, 90.0, 20.0, 20.0).unwrap(), 1.0).unwrap();
        assert_eq!((c.width(), c.height()), (10, 10));
        assert_eq!(c.pixel(0, 0), [90, 90, 7]);
    }

    #[test]
    fn crop_with_context() {
        // half-extent 10 -> 20 about centre (50, 50)
        let img = gradient(100, 100);
        let c = crop(&img, &BBox::new(40.0, 40.0, 20.0, 20.0).unwrap(), 2.0).unwrap();
        assert_eq!((c.width(), c.height()), (40, 40));
        assert_eq!(c.pixel(0, 0), [30, 30, 7]);
    }

    #[test]
    fn crop_outside_is_empty() {
        let img = gradient(50, 50);
        let err = crop(&img, &BBox::new(60.0, 60.0, 10.0, 10.0).unwrap(), 1.0).unwrap_err();
        assert!(matches!(err, GeometryError::EmptyCrop(_)));
        assert!(crop(&img, &BBox::new(5.0, 5.0, 0.0, 10.0).unwrap(), 1.0).is_err());
        assert!(crop(&img, &BBox::new(5.0, 5.0, 4.0, 4.0).unwrap(), 0.5).is_err());
    }

    #[test]
    fn crop_top_left_is_rounded_origin() {
        let img = gradient(64, 64);
        let b = BBox::new(10.4, 20.6, 8.0, 8.0).unwrap();
        let r = crop_region(64, 64, &b, 1.0).unwrap();
        assert_eq!((r.x, r.y), (10, 21));
        let c = crop(&img, &b, 1.0).unwrap();
        assert_eq!(c.pixel(0, 0), [10, 21, 7]);
    }

    #[test]
    fn annotate_draws_outline_only() {
        let img = Image::filled(64, 64, [9, 9, 9]);
        let b = BBox::new(10.0, 10.0, 30.0, 20.0).unwrap();
        let out = annotate(&img, &b, GREEN, 3);
        for i in 0..3 {
            assert_eq!(out.pixel(10 + i, 15), GREEN);
            assert_eq!(out.pixel(39 - i, 15), GREEN);
            assert_eq!(out.pixel(20, 10 + i), GREEN);
            assert_eq!(out.pixel(20, 29 - i), GREEN);
        }
        assert_eq!(out.pixel(13, 13), [9, 9, 9]);
        assert_eq!(out.pixel(36, 26), [9, 9, 9]);
        assert_eq!(out.pixel(40, 15), [9, 9, 9]);
        assert_eq!(img.pixel(10, 10), [9, 9, 9], "input untouched");
    }

    #[test]
    fn annotate_degenerate_box_is_dot() {
        let img = Image::filled(16, 16, [0, 0, 0]);
        let out = annotate(&img, &BBox::new(5.0, 6.0, 0.0, 0.0).unwrap(), GREEN, 3);
        let green: Vec<(u32, u32)> =
            (0..16).flat_map(|y| (0..16).map(move |x| (x, y))).filter(|&(x, y)| out.pixel(x, y) == GREEN).collect();
        assert_eq!(green.len(), 9);
        assert!(green.iter().all(|&(x, y)| (5..8).contains(&x) && (6..9).contains(&y)));
    }

    #[test]
    fn annotate_clips_to_bounds() {
        let img = Image::filled(10, 10, [0, 0, 0]);
        let out = annotate(&img, &BBox::new(-5.0, -5.0, 30.0, 30.0).unwrap(), GREEN, 3);
        assert_eq!(out.pixel(5, 5), [0, 0, 0]);
    }

    #[test]
    fn thickness_scales_with_frame() {
        assert_eq!(annotation_thickness(256, 256), 3);
        assert_eq!(annotation_thickness(1920, 1080), 4);
        assert_eq!(annotation_thickness(4000, 3000), 12);
    }

    #[test]
    fn png_base64_round_trip() {
        let img = gradient(13, 7);
        let back = Image::from_base64(&img.to_png_base64().unwrap()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn fit_within_downscales_only() {
        let img = gradient(200, 100);
        let small = img.fit_within(50);
        assert_eq!((small.width(), small.height()), (50, 25));
        assert_eq!(img.fit_within(500), img);
    }
}
