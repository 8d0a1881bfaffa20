use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use plotters::prelude::*;
use probsam_core::image::{BinaryMask, BoxPrompt, Image};
use probsam_core::training::TrainHistory;

const CURVE_SIZE: (u32, u32) = (800, 480);
const TILE_SCALE: usize = 3;
const GAP: usize = 4;
const SAMPLES_PER_ROW: usize = 8;

fn write_rgb(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header()?;
    w.write_image_data(rgb)?;
    w.finish()?;
    Ok(())
}

/// Per-step total loss (grey) with its 50-step moving average (blue) and the
/// KL term (red), on a log scale.
pub fn loss_curve(history: &TrainHistory, path: &Path) -> Result<()> {
    let (w, h) = CURVE_SIZE;
    let mut buf = vec![255u8; (w * h * 3) as usize];
    {
        let root = BitMapBackend::with_buffer(&mut buf, (w, h)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
        let floor = 1e-6;
        let total: Vec<(f64, f64)> = history.steps.iter().map(|r| (r.step as f64, r.total.max(floor).log10())).collect();
        let smooth: Vec<(f64, f64)> = (1..=history.len())
            .filter_map(|s| history.smoothed_total(s, 50).map(|v| (s as f64, v.max(floor).log10())))
            .collect();
        let kl: Vec<(f64, f64)> = history.steps.iter().map(|r| (r.step as f64, r.kl.max(floor).log10())).collect();
        let (lo, hi) = total
            .iter()
            .chain(&kl)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, v)| (lo.min(v), hi.max(v)));
        let (lo, hi) = if lo.is_finite() { (lo - 0.1, hi + 0.1) } else { (-1.0, 1.0) };
        let x_max = history.len().max(2) as f64;
        let mut chart = ChartBuilder::on(&root)
            .margin(20)
            .build_cartesian_2d(1.0..x_max, lo..hi)
            .map_err(|e| anyhow!("{e}"))?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(0)
            .y_labels(0)
            .draw()
            .map_err(|e| anyhow!("{e}"))?;
        for (series, color) in [(total, RGBColor(170, 170, 170)), (kl, RED), (smooth, BLUE)] {
            chart.draw_series(LineSeries::new(series, &color)).map_err(|e| anyhow!("{e}"))?;
        }
        root.present().map_err(|e| anyhow!("{e}"))?;
    }
    write_rgb(path, w as usize, h as usize, &buf)
}

struct Canvas {
    width: usize,
    height: usize,
    rgb: Vec<u8>,
}

impl Canvas {
    fn new(width: usize, height: usize) -> Self {
        Self { width, height, rgb: vec![255; width * height * 3] }
    }

    fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        if x < self.width && y < self.height {
            let i = (y * self.width + x) * 3;
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    /// Image tile, optionally tinting `mask` pixels and outlining `bx`.
    fn tile(&mut self, x0: usize, y0: usize, img: &Image, mask: Option<(&BinaryMask, [u8; 3])>, bx: Option<&BoxPrompt>) {
        for y in 0..img.height() {
            for x in 0..img.width() {
                let g = (img.get(y, x) * 255.0).round() as u8;
                let mut c = [g, g, g];
                if let Some((m, tint)) = mask {
                    if m.get(y, x) {
                        for k in 0..3 {
                            c[k] = ((c[k] as u16 + tint[k] as u16) / 2) as u8;
                        }
                    }
                }
                if let Some(b) = bx {
                    let on_x = (x == b.x1 || x + 1 == b.x2) && (b.y1..b.y2).contains(&y);
                    let on_y = (y == b.y1 || y + 1 == b.y2) && (b.x1..b.x2).contains(&x);
                    if on_x || on_y {
                        c = [230, 40, 40];
                    }
                }
                for dy in 0..TILE_SCALE {
                    for dx in 0..TILE_SCALE {
                        self.put(x0 + x * TILE_SCALE + dx, y0 + y * TILE_SCALE + dy, c);
                    }
                }
            }
        }
    }
}

/// First row: input with its box prompt, then each annotator mask; following
/// rows: the sampled masks.
pub fn sample_grid(
    img: &Image,
    bx: &BoxPrompt,
    annotations: &[BinaryMask],
    samples: &[BinaryMask],
    path: &Path,
) -> Result<()> {
    let tw = img.width() * TILE_SCALE;
    let th = img.height() * TILE_SCALE;
    let cols = (1 + annotations.len()).max(samples.len().min(SAMPLES_PER_ROW)).max(1);
    let rows = 1 + samples.len().div_ceil(SAMPLES_PER_ROW);
    let mut canvas = Canvas::new(cols * (tw + GAP) + GAP, rows * (th + GAP) + GAP);
    let at = |c: usize, r: usize| (GAP + c * (tw + GAP), GAP + r * (th + GAP));
    let (x, y) = at(0, 0);
    canvas.tile(x, y, img, None, Some(bx));
    for (k, m) in annotations.iter().enumerate() {
        let (x, y) = at(k + 1, 0);
        canvas.tile(x, y, img, Some((m, [40, 200, 60])), None);
    }
    for (i, m) in samples.iter().enumerate() {
        let (x, y) = at(i % SAMPLES_PER_ROW, 1 + i / SAMPLES_PER_ROW);
        canvas.tile(x, y, img, Some((m, [250, 160, 20])), None);
    }
    write_rgb(path, canvas.width, canvas.height, &canvas.rgb)
}
