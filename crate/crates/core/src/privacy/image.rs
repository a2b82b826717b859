use serde::{Deserialize, Serialize};

use super::PrivacyError;

/// Pixel rectangle `(x, y, width, height)`, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl Rect {
    pub fn new(x: f64, y: f64, width: f64, height: f64) -> Self {
        Self { x, y, width, height }
    }

    pub fn right(&self) -> f64 {
        self.x + self.width
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.height
    }

    pub fn area(&self) -> f64 {
        self.width.max(0.0) * self.height.max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.width > 0.0 && self.height > 0.0 && self.x.is_finite() && self.y.is_finite()
    }

    pub fn intersection(&self, other: &Rect) -> Option<Rect> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        (x1 > x0 && y1 > y0).then(|| Rect::new(x0, y0, x1 - x0, y1 - y0))
    }

    pub fn overlaps(&self, other: &Rect) -> bool {
        self.intersection(other).is_some()
    }
}

/// Intersection over union; 0 for disjoint rectangles.
pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let inter = a.intersection(b).map_or(0.0, |r| r.area());
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Uninterpreted pixel matrix, row-major, `channels` bytes per pixel.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageBuffer {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub data: Vec<u8>,
}

impl std::fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageBuffer")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .field("bytes", &self.data.len())
            .finish()
    }
}

/// Magic prefix of the portable image container.
pub const IMAGE_MAGIC: &[u8; 4] = b"SSPX";
pub const IMAGE_HEADER_LEN: usize = 16;

impl ImageBuffer {
    pub fn new(width: u32, height: u32, channels: u8, data: Vec<u8>) -> Result<Self, PrivacyError> {
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected || width == 0 || height == 0 || channels == 0 {
            return Err(PrivacyError::Image(format!(
                "{width}x{height}x{channels} needs {expected} bytes, got {}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Deterministic test pattern; every pixel differs from its neighbours.
    pub fn pattern(width: u32, height: u32, channels: u8, seed: u8) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize * channels as usize);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    let v = (x.wrapping_mul(31) ^ y.wrapping_mul(17)).wrapping_add(c as u32 * 7 + seed as u32);
                    data.push(v as u8);
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let c = self.channels as usize;
        let at = (y as usize * self.width as usize + x as usize) * c;
        &self.data[at..at + c]
    }

    pub fn bounds(&self) -> Rect {
        Rect::new(0.0, 0.0, self.width as f64, self.height as f64)
    }

    /// Container layout: `"SSPX"`, version `1` (u8), channels (u8), two zero
    /// bytes, width (u32 LE), height (u32 LE), then raw row-major pixels.
    pub fn to_container(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(IMAGE_HEADER_LEN + self.data.len());
        out.extend_from_slice(IMAGE_MAGIC);
        out.push(1);
        out.push(self.channels);
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_container(bytes: &[u8]) -> Result<Self, PrivacyError> {
        if bytes.len() < IMAGE_HEADER_LEN || &bytes[0..4] != IMAGE_MAGIC {
            return Err(PrivacyError::Image("missing container header".into()));
        }
        if bytes[4] != 1 {
            return Err(PrivacyError::Image(format!("unsupported container version {}", bytes[4])));
        }
        let channels = bytes[5];
        let width = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        let height = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes"));
        Self::new(width, height, channels, bytes[IMAGE_HEADER_LEN..].to_vec())
    }
}

/// Integer pixel window of `rect` clamped to the frame: `(x0, y0, x1, y1)`.
fn pixel_window(frame: &ImageBuffer, rect: &Rect) -> Option<(u32, u32, u32, u32)> {
    if !(rect.x.is_finite() && rect.y.is_finite() && rect.width.is_finite() && rect.height.is_finite()) {
        return None;
    }
    let clamp = |v: f64, max: u32| v.max(0.0).min(max as f64);
    let x0 = clamp(rect.x.floor(), frame.width) as u32;
    let y0 = clamp(rect.y.floor(), frame.height) as u32;
    let x1 = clamp(rect.right().ceil(), frame.width) as u32;
    let y1 = clamp(rect.bottom().ceil(), frame.height) as u32;
    (x1 > x0 && y1 > y0).then_some((x0, y0, x1, y1))
}

/// Copies the part of `frame` under `rect`, clamped to the frame bounds.
/// Fractional edges are expanded outward to whole pixels.
pub fn crop_frame(frame: &ImageBuffer, rect: &Rect) -> Result<ImageBuffer, PrivacyError> {
    if frame.data.is_empty() {
        return Err(PrivacyError::Image("empty frame".into()));
    }
    let (x0, y0, x1, y1) = pixel_window(frame, rect).ok_or(PrivacyError::EmptyCrop)?;
    let c = frame.channels as usize;
    let row_bytes = (x1 - x0) as usize * c;
    let mut data = Vec::with_capacity(row_bytes * (y1 - y0) as usize);
    for y in y0..y1 {
        let start = (y as usize * frame.width as usize + x0 as usize) * c;
        data.extend_from_slice(&frame.data[start..start + row_bytes]);
    }
    Ok(ImageBuffer {
        width: x1 - x0,
        height: y1 - y0,
        channels: frame.channels,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame() -> ImageBuffer {
        ImageBuffer::pattern(100, 100, 3, 1)
    }

    #[test]
    fn identity_crop() {
        assert_eq!(crop_frame(&frame(), &Rect::new(0.0, 0.0, 100.0, 100.0)).unwrap(), frame());
    }

    #[test]
    fn interior_crop_copies_region() {
        let f = frame();
        let c = crop_frame(&f, &Rect::new(10.0, 10.0, 20.0, 20.0)).unwrap();
        assert_eq!((c.width, c.height), (20, 20));
        for y in 0..20 {
            for x in 0..20 {
                assert_eq!(c.pixel(x, y), f.pixel(x + 10, y + 10));
            }
        }
    }

    #[test]
    fn crop_is_clamped() {
        let c = crop_frame(&frame(), &Rect::new(95.0, 95.0, 20.0, 20.0)).unwrap();
        assert_eq!((c.width, c.height), (5, 5));
        assert_eq!(c.pixel(4, 4), frame().pixel(99, 99));
    }

    #[test]
    fn crop_outside_is_error() {
        assert_eq!(
            crop_frame(&frame(), &Rect::new(100.0, 0.0, 5.0, 5.0)),
            Err(PrivacyError::EmptyCrop)
        );
        assert_eq!(
            crop_frame(&frame(), &Rect::new(-10.0, -10.0, 5.0, 5.0)),
            Err(PrivacyError::EmptyCrop)
        );
    }

    #[test]
    fn iou_examples() {
        let a = Rect::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &Rect::new(20.0, 20.0, 5.0, 5.0)), 0.0);
        // Intersection 50, union 150.
        let b = Rect::new(5.0, 0.0, 10.0, 10.0);
        assert!((iou(&a, &b) - 50.0 / 150.0).abs() < 1e-12);
    }

    #[test]
    fn iou_grows_as_gap_closes() {
        let a = Rect::new(0.0, 0.0, 10.0, 10.0);
        let mut last = -1.0;
        for shift in [15.0, 10.0, 8.0, 5.0, 2.0, 0.0] {
            let v = iou(&a, &Rect::new(shift, 0.0, 10.0, 10.0));
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn container_round_trip() {
        let f = ImageBuffer::pattern(7, 3, 4, 9);
        let bytes = f.to_container();
        assert_eq!(&bytes[..4], b"SSPX");
        assert_eq!(bytes.len(), 16 + 7 * 3 * 4);
        assert_eq!(ImageBuffer::from_container(&bytes).unwrap(), f);
        assert!(ImageBuffer::from_container(&bytes[..20]).is_err());
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(
            ax in -50.0f64..50.0, ay in -50.0f64..50.0, aw in 0.1f64..50.0, ah in 0.1f64..50.0,
            bx in -50.0f64..50.0, by in -50.0f64..50.0, bw in 0.1f64..50.0, bh in 0.1f64..50.0,
        ) {
            let a = Rect::new(ax, ay, aw, ah);
            let b = Rect::new(bx, by, bw, bh);
            prop_assert!((iou(&a, &b) - iou(&b, &a)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&iou(&a, &b)));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn crop_never_exceeds_source(
            x in -200.0f64..200.0, y in -200.0f64..200.0, w in 0.5f64..300.0, h in 0.5f64..300.0,
        ) {
            let f = ImageBuffer::pattern(64, 48, 1, 0);
            if let Ok(c) = crop_frame(&f, &Rect::new(x, y, w, h)) {
                prop_assert!(c.width <= f.width && c.height <= f.height);
                prop_assert_eq!(c.data.len(), (c.width * c.height) as usize);
                let x0 = x.floor().max(0.0) as u32;
                let y0 = y.floor().max(0.0) as u32;
                prop_assert_eq!(c.pixel(0, 0), f.pixel(x0, y0));
            }
        }
    }
}
