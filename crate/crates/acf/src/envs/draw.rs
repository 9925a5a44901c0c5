//! Tiny software canvas plus the fixed color palette. Golden-image tests
//! byte-compare renders, so every constant here is part of the contract.

use super::{OBS_BYTES, OBS_SIZE};

pub type Rgb = [u8; 3];

// Shared palette
pub const FLOOR: Rgb = [24, 24, 24];
pub const WALL: Rgb = [110, 110, 110];
pub const AGENT_BODY: Rgb = [200, 50, 50];
pub const AGENT_NOSE: Rgb = [250, 250, 250];

// Grid2D
pub const G2_BG: Rgb = [18, 18, 18];
pub const G2_AGENT: Rgb = [240, 200, 60];

// Taxi
pub const TAXI_BORDER: Rgb = [40, 40, 40];
pub const TAXI_STRIPE: Rgb = [230, 200, 40];
pub const TAXI_SQUARE: Rgb = [235, 235, 235];
pub const GOAL_COLORS: [Rgb; 4] = [[200, 60, 60], [70, 180, 90], [70, 110, 220], [190, 80, 190]];

// DoorKey
pub const KEY: Rgb = [230, 200, 40];
pub const DOOR: Rgb = [160, 110, 40];

pub struct Canvas {
    pub px: Vec<u8>,
}

impl Canvas {
    pub fn filled(color: Rgb) -> Self {
        let mut px = vec![0u8; OBS_BYTES];
        for p in px.chunks_exact_mut(3) {
            p.copy_from_slice(&color);
        }
        Self { px }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, color: Rgb) {
        debug_assert!(x < OBS_SIZE && y < OBS_SIZE);
        let i = (y * OBS_SIZE + x) * 3;
        self.px[i..i + 3].copy_from_slice(&color);
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = (y * OBS_SIZE + x) * 3;
        [self.px[i], self.px[i + 1], self.px[i + 2]]
    }

    pub fn fill_rect(&mut self, x0: usize, y0: usize, w: usize, h: usize, color: Rgb) {
        for y in y0..(y0 + h).min(OBS_SIZE) {
            for x in x0..(x0 + w).min(OBS_SIZE) {
                self.set(x, y, color);
            }
        }
    }

    pub fn outline_rect(&mut self, x0: usize, y0: usize, w: usize, h: usize, color: Rgb) {
        for x in x0..(x0 + w).min(OBS_SIZE) {
            self.set(x, y0, color);
            self.set(x, y0 + h - 1, color);
        }
        for y in y0..(y0 + h).min(OBS_SIZE) {
            self.set(x0, y, color);
            self.set(x0 + w - 1, y, color);
        }
    }

    pub fn fill_disc(&mut self, cx: f32, cy: f32, r: f32, color: Rgb) {
        let x0 = (cx - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil() as usize).min(OBS_SIZE - 1);
        let y0 = (cy - r).floor().max(0.0) as usize;
        let y1 = ((cy + r).ceil() as usize).min(OBS_SIZE - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = x as f32 + 0.5 - cx;
                let dy = y as f32 + 0.5 - cy;
                if dx * dx + dy * dy <= r * r {
                    self.set(x, y, color);
                }
            }
        }
    }

    /// Axis-aligned square with subpixel position: each pixel gets the exact
    /// coverage fraction of the square over its cell, blended over what is
    /// already there. Continuous positions stay distinguishable in pixels.
    pub fn fill_square_aa(&mut self, left: f32, top: f32, side: f32, color: Rgb) {
        let x0 = left.floor().max(0.0) as usize;
        let x1 = ((left + side).ceil() as usize).min(OBS_SIZE);
        let y0 = top.floor().max(0.0) as usize;
        let y1 = ((top + side).ceil() as usize).min(OBS_SIZE);
        for y in y0..y1 {
            let oy = overlap(y as f32, y as f32 + 1.0, top, top + side);
            for x in x0..x1 {
                let ox = overlap(x as f32, x as f32 + 1.0, left, left + side);
                let a = ox * oy;
                if a <= 0.0 {
                    continue;
                }
                let base = self.get(x, y);
                let mut blended = [0u8; 3];
                for c in 0..3 {
                    let v = base[c] as f32 + a * (color[c] as f32 - base[c] as f32);
                    blended[c] = v.round() as u8;
                }
                self.set(x, y, blended);
            }
        }
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.px
    }
}

#[inline]
fn overlap(a0: f32, a1: f32, b0: f32, b1: f32) -> f32 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

pub fn blend(base: Rgb, over: Rgb, alpha: f32) -> Rgb {
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (base[c] as f32 + alpha * (over[c] as f32 - base[c] as f32)).round() as u8;
    }
    out
}

/// Write pixels as a binary PPM (P6). Fixed header, byte-stable.
pub fn write_ppm(path: &std::path::Path, width: usize, height: usize, rgb: &[u8]) -> std::io::Result<()> {
    use std::io::Write;
    assert_eq!(rgb.len(), width * height * 3);
    let mut f = std::fs::File::create(path)?;
    write!(f, "P6\n{width} {height}\n255\n")?;
    f.write_all(rgb)?;
    Ok(())
}

/// Read a binary PPM written by [`write_ppm`].
pub fn read_ppm(path: &std::path::Path) -> std::io::Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let header_end = bytes
        .windows(4)
        .position(|w| w == b"255\n")
        .map(|p| p + 4)
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidData, "bad ppm header"))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidData, "bad ppm header"))?;
    let mut it = header.split_whitespace();
    let magic = it.next().unwrap_or("");
    if magic != "P6" {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "not a P6 ppm"));
    }
    let w: usize = it.next().and_then(|v| v.parse().ok()).unwrap_or(0);
    let h: usize = it.next().and_then(|v| v.parse().ok()).unwrap_or(0);
    Ok((w, h, bytes[header_end..].to_vec()))
}
