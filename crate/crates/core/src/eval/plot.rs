use std::path::Path;

use crate::error::{Error, Result};

const WIDTH: usize = 480;
const HEIGHT: usize = 320;
const MARGIN: usize = 32;
const PALETTE: [[u8; 3]; 6] = [
    [66, 103, 172],
    [221, 132, 82],
    [85, 168, 104],
    [196, 78, 82],
    [129, 114, 179],
    [147, 120, 96],
];

struct Canvas {
    pixels: Vec<u8>,
}

impl Canvas {
    fn new() -> Self {
        Self {
            pixels: vec![255; WIDTH * HEIGHT * 3],
        }
    }

    fn fill(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, color: [u8; 3]) {
        for y in y0.min(HEIGHT)..y1.min(HEIGHT) {
            for x in x0.min(WIDTH)..x1.min(WIDTH) {
                let k = (y * WIDTH + x) * 3;
                self.pixels[k..k + 3].copy_from_slice(&color);
            }
        }
    }
}

/// Rounds `max` up to 1, 2 or 5 times a power of ten.
fn nice_ceiling(max: f64) -> f64 {
    if !(max > 0.0) {
        return 1.0;
    }
    let mag = 10f64.powf(max.log10().floor());
    [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|v| *v >= max)
        .unwrap_or(10.0 * mag)
}

/// A bar per value on a white canvas, with light gridlines at tenths of the
/// axis maximum. Bars take colours from a fixed palette in input order.
pub fn bar_chart_png(values: &[f64], path: &Path) -> Result<()> {
    let mut c = Canvas::new();
    let top = nice_ceiling(
        values
            .iter()
            .cloned()
            .filter(|v| v.is_finite())
            .fold(0.0, f64::max),
    );
    let plot_h = HEIGHT - 2 * MARGIN;
    for i in 0..=10 {
        let y = HEIGHT - MARGIN - plot_h * i / 10;
        c.fill(MARGIN, y, WIDTH - MARGIN, y + 1, [225, 225, 225]);
    }
    let n = values.len().max(1);
    let slot = (WIDTH - 2 * MARGIN) / n;
    for (i, v) in values.iter().enumerate() {
        let h = if v.is_finite() {
            ((v.max(0.0) / top) * plot_h as f64).round() as usize
        } else {
            0
        };
        let x0 = MARGIN + i * slot + slot / 6;
        let x1 = MARGIN + (i + 1) * slot - slot / 6;
        c.fill(
            x0,
            HEIGHT - MARGIN - h,
            x1,
            HEIGHT - MARGIN,
            PALETTE[i % PALETTE.len()],
        );
    }
    c.fill(MARGIN, MARGIN, MARGIN + 1, HEIGHT - MARGIN + 1, [0, 0, 0]);
    c.fill(
        MARGIN,
        HEIGHT - MARGIN,
        WIDTH - MARGIN,
        HEIGHT - MARGIN + 1,
        [0, 0, 0],
    );

    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), WIDTH as u32, HEIGHT as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let image_err = |e: png::EncodingError| Error::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(image_err)?;
    writer.write_image_data(&c.pixels).map_err(image_err)?;
    writer.finish().map_err(image_err)
}
