//! Raster pianoroll plots: time runs left to right, pitch bottom to top,
//! note colour darkens with velocity and beat markers become vertical lines.

use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};

use crate::error::Result;
use crate::notes::PerformedNote;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Style {
    pub pixels_per_second: f64,
    pub pixels_per_semitone: u32,
    pub margin: u32,
}

impl Default for Style {
    fn default() -> Self {
        Self {
            pixels_per_second: 100.0,
            pixels_per_semitone: 4,
            margin: 8,
        }
    }
}

pub const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
pub const GRID: Rgb<u8> = Rgb([200, 200, 200]);

/// Colour of a note of the given velocity.
pub fn note_colour(velocity: u8) -> Rgb<u8> {
    let k = velocity.min(127) as f64 / 127.0;
    let lerp = |lo: f64, hi: f64| (lo + (hi - lo) * k).round() as u8;
    Rgb([lerp(170.0, 10.0), lerp(200.0, 40.0), lerp(255.0, 150.0)])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Summary {
    pub width: u32,
    pub height: u32,
    pub rectangles: usize,
    pub grid_lines: usize,
}

/// Geometry shared by the renderer and by callers that need to locate a
/// note in the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub t0: f64,
    pub low: u8,
    pub high: u8,
    pub style: Style,
}

impl Frame {
    pub fn x(&self, t: f64) -> u32 {
        self.style.margin + ((t - self.t0) * self.style.pixels_per_second).round().max(0.0) as u32
    }

    /// Top row of the cell of `pitch`.
    pub fn y(&self, pitch: u8) -> u32 {
        self.style.margin + (self.high - pitch) as u32 * self.style.pixels_per_semitone
    }
}

pub fn frame_for(notes: &[PerformedNote], beat_times: &[f64], style: Style) -> Option<(Frame, u32, u32)> {
    if notes.is_empty() {
        return None;
    }
    let low = notes.iter().map(|n| n.pitch).min()?.saturating_sub(2);
    let high = notes.iter().map(|n| n.pitch).max()?.saturating_add(2).min(127);
    let t0 = notes
        .iter()
        .map(|n| n.onset)
        .chain(beat_times.iter().copied())
        .fold(f64::INFINITY, f64::min);
    let t1 = notes
        .iter()
        .map(|n| n.offset())
        .chain(beat_times.iter().copied())
        .fold(f64::NEG_INFINITY, f64::max);
    let frame = Frame { t0, low, high, style };
    let width = frame.x(t1) + style.margin + 1;
    let height = frame.y(low) + style.pixels_per_semitone + style.margin;
    Some((frame, width, height))
}

/// Draws the notes over a beat grid.
pub fn render(notes: &[PerformedNote], beat_times: &[f64], style: Style) -> (RgbImage, Summary) {
    let Some((frame, width, height)) = frame_for(notes, beat_times, style) else {
        log::warn!("pianoroll of an empty piece");
        let (w, h) = (2 * style.margin + 1, 2 * style.margin + 1);
        let img = RgbImage::from_pixel(w, h, BACKGROUND);
        return (
            img,
            Summary {
                width: w,
                height: h,
                rectangles: 0,
                grid_lines: 0,
            },
        );
    };
    let mut img = RgbImage::from_pixel(width, height, BACKGROUND);
    for &b in beat_times {
        let x = frame.x(b);
        for y in style.margin..height - style.margin {
            img.put_pixel(x, y, GRID);
        }
    }
    for n in notes {
        let colour = note_colour(n.velocity);
        let (x0, x1) = (frame.x(n.onset), frame.x(n.offset()).max(frame.x(n.onset) + 1));
        let y0 = frame.y(n.pitch);
        for y in y0..y0 + style.pixels_per_semitone {
            for x in x0..x1.min(width) {
                img.put_pixel(x, y, colour);
            }
        }
    }
    (
        img,
        Summary {
            width,
            height,
            rectangles: notes.len(),
            grid_lines: beat_times.len(),
        },
    )
}

pub fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    std::fs::write(path, png_bytes(img)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_note_rectangle() {
        let note = PerformedNote::new(60, 1.0, 0.5, 100).unwrap();
        let style = Style::default();
        let (img, summary) = render(&[note], &[], style);
        assert_eq!(summary.rectangles, 1);
        let (frame, _, _) = frame_for(&[note], &[], style).unwrap();
        let colour = note_colour(100);
        let (x0, x1, y0) = (frame.x(1.0), frame.x(1.5), frame.y(60));
        assert_eq!(x1 - x0, 50);
        for y in 0..summary.height {
            for x in 0..summary.width {
                let inside = (x0..x1).contains(&x) && (y0..y0 + 4).contains(&y);
                assert_eq!(*img.get_pixel(x, y) == colour, inside, "({x}, {y})");
            }
        }
    }

    #[test]
    fn grid_and_stability() {
        let notes: Vec<_> = (0..8)
            .map(|i| PerformedNote::new(60 + i, i as f64 * 0.5, 0.4, 20 + 10 * i).unwrap())
            .collect();
        let beats = [0.0, 0.5, 1.0, 1.5];
        let (a, summary) = render(&notes, &beats, Style::default());
        assert_eq!(summary.grid_lines, 4);
        let (b, _) = render(&notes, &beats, Style::default());
        assert_eq!(png_bytes(&a).unwrap(), png_bytes(&b).unwrap());
    }

    #[test]
    fn empty_is_blank() {
        let (img, summary) = render(&[], &[], Style::default());
        assert_eq!(summary.rectangles, 0);
        assert!(img.pixels().all(|p| *p == BACKGROUND));
    }

    #[test]
    fn louder_is_darker() {
        let sum = |c: Rgb<u8>| c.0.iter().map(|&v| v as u32).sum::<u32>();
        assert!(sum(note_colour(120)) < sum(note_colour(20)));
    }
}
