//! Visualizations: density maps as grayscale, tracks as colored polylines.

use crowdtrack_core::geometry::Point2;
use crowdtrack_core::synth::ImageFrame;
use crowdtrack_core::tracking::TrackSet;
use crowdtrack_core::Tensor;

use crate::formats::pnm::{quantize, RgbImage};

/// Grayscale image scaled so the largest value maps to 1; all-zero and
/// negative maps render black.
pub fn density_image(map: &Tensor) -> ImageFrame {
    let (h, w) = match map.shape() {
        [h, w] | [1, h, w] => (*h, *w),
        _ => (1, map.len()),
    };
    let max = map.data().iter().copied().fold(0.0f64, f64::max);
    let data = if max > 0.0 {
        map.data().iter().map(|&v| (v / max).max(0.0)).collect()
    } else {
        vec![0.0; map.len()]
    };
    ImageFrame { width: w, height: h, data }
}

/// Stable, bright color per track id.
pub fn id_color(id: u32) -> [u8; 3] {
    let mut z = u64::from(id).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    let b = z.to_le_bytes();
    [64 + b[0] % 192, 64 + b[1] % 192, 64 + b[2] % 192]
}

fn pixel(p: Point2) -> (i64, i64) {
    (p.x.round() as i64, p.y.round() as i64)
}

fn line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), c: [u8; 3]) {
    let (dx, dy) = ((b.0 - a.0).abs(), -(b.1 - a.1).abs());
    let (sx, sy) = ((b.0 - a.0).signum(), (b.1 - a.1).signum());
    let (mut x, mut y, mut err) = (a.0, a.1, dx + dy);
    loop {
        img.put(x, y, c);
        if (x, y) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Draws every track over an optional grayscale background. Each point lands
/// on the pixel nearest its coordinates.
pub fn tracks_image(tracks: &TrackSet, width: usize, height: usize, background: Option<&ImageFrame>) -> RgbImage {
    let mut img = RgbImage::new(width, height);
    if let Some(bg) = background {
        for y in 0..height.min(bg.height) {
            for x in 0..width.min(bg.width) {
                let v = quantize(bg.get(x, y));
                img.put(x as i64, y as i64, [v; 3]);
            }
        }
    }
    for t in &tracks.tracklets {
        let c = id_color(t.id);
        match t.points.as_slice() {
            [only] => img.put(pixel(only.pos).0, pixel(only.pos).1, c),
            pts => {
                for w in pts.windows(2) {
                    line(&mut img, pixel(w[0].pos), pixel(w[1].pos), c);
                }
            }
        }
    }
    img
}
