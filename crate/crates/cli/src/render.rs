//! Assignment-map overlays as binary PPM.

use visa_core::sgm::AssignmentMap;

/// Group colors in group-index order; wraps for larger K.
pub const PALETTE: [[u8; 3]; 8] = [
    [255, 0, 0],
    [0, 255, 0],
    [0, 0, 255],
    [255, 255, 0],
    [255, 0, 255],
    [0, 255, 255],
    [255, 128, 0],
    [128, 0, 255],
];

pub fn color(group: usize) -> [u8; 3] {
    PALETTE[group % PALETTE.len()]
}

/// `round((a + b) / 2)`
fn blend(a: u8, b: u8) -> u8 {
    ((u16::from(a) + u16::from(b) + 1) / 2) as u8
}

/// Overlays timestep `t` of `map`, upsampled to `width x height` by nearest
/// neighbor, at 50% over a grayscale frame. Returns interleaved RGB.
pub fn overlay(frame: &[u8], width: usize, height: usize, map: &AssignmentMap, t: usize) -> Vec<u8> {
    let mut rgb = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        let i = y * map.h / height;
        for x in 0..width {
            let j = x * map.w / width;
            let gray = frame[y * width + x];
            for c in color(map.label(t, i, j)) {
                rgb.push(blend(gray, c));
            }
        }
    }
    rgb
}

pub fn ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}
