//! PNG output: convergence curves and grayscale slice grids.

use std::path::Path;

use image::{GrayImage, Luma, RgbImage};
use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::eval::{median_curve, CompareRow};
use crate::pretrain::Mode;

pub const PLOT_SIZE: (u32, u32) = (640, 400);

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::InvalidArgument(format!("plotting failed: {e}"))
}

/// Median mean-Dice curves against pre-training epochs: GL-MAE in blue,
/// MAE3D in red, on a 0-100 Dice axis with gridlines every 10 points.
pub fn convergence_plot(rows: &[CompareRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Empty("comparison rows"));
    }
    let (w, h) = PLOT_SIZE;
    let mut buf = vec![0u8; (w * h * 3) as usize];
    {
        let root = BitMapBackend::with_buffer(&mut buf, (w, h)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let max_epoch = rows.iter().map(|r| r.epoch).max().unwrap_or(1).max(1);
        let mut chart = ChartBuilder::on(&root)
            .margin(20)
            .build_cartesian_2d(0f64..max_epoch as f64 * 1.05, 0f64..100f64)
            .map_err(plot_err)?;
        for d in (0..=10).map(|i| i as f64 * 10.0) {
            chart
                .draw_series(LineSeries::new([(0.0, d), (max_epoch as f64 * 1.05, d)], RGBColor(225, 225, 225)))
                .map_err(plot_err)?;
        }
        chart
            .draw_series(LineSeries::new([(0.0, 0.0), (0.0, 100.0)], BLACK))
            .map_err(plot_err)?;
        chart
            .draw_series(LineSeries::new([(0.0, 0.0), (max_epoch as f64 * 1.05, 0.0)], BLACK))
            .map_err(plot_err)?;
        for (mode, color) in [(Mode::Glmae, BLUE), (Mode::Mae3d, RED)] {
            let pts: Vec<(f64, f64)> = median_curve(rows, mode).into_iter().map(|(e, d)| (e as f64, d)).collect();
            chart.draw_series(LineSeries::new(pts.clone(), color.stroke_width(2))).map_err(plot_err)?;
            chart
                .draw_series(pts.into_iter().map(|p| Circle::new(p, 4, color.filled())))
                .map_err(plot_err)?;
        }
        root.present().map_err(plot_err)?;
    }
    let img = RgbImage::from_raw(w, h, buf).ok_or_else(|| plot_err("buffer size"))?;
    img.save(path)?;
    Ok(())
}

/// A grayscale panel with values in [0, 1].
#[derive(Debug, Clone)]
pub struct Panel {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

/// Tiles panels row by row, each scaled by nearest neighbour to the largest
/// panel size, with a 2-pixel white gutter.
pub fn write_panel_grid(rows: &[Vec<Panel>], path: &Path) -> Result<()> {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    if rows.is_empty() || cols == 0 {
        return Err(Error::Empty("panel grid"));
    }
    let cell_w = rows.iter().flatten().map(|p| p.width).max().unwrap();
    let cell_h = rows.iter().flatten().map(|p| p.height).max().unwrap();
    let gutter = 2;
    let w = cols * (cell_w + gutter) + gutter;
    let h = rows.len() * (cell_h + gutter) + gutter;
    let mut img = GrayImage::from_pixel(w as u32, h as u32, Luma([255]));
    for (r, row) in rows.iter().enumerate() {
        for (c, panel) in row.iter().enumerate() {
            let (x0, y0) = (gutter + c * (cell_w + gutter), gutter + r * (cell_h + gutter));
            for y in 0..cell_h {
                for x in 0..cell_w {
                    let sx = x * panel.width / cell_w;
                    let sy = y * panel.height / cell_h;
                    let v = panel.pixels[sy * panel.width + sx].clamp(0.0, 1.0);
                    img.put_pixel((x0 + x) as u32, (y0 + y) as u32, Luma([(v * 255.0).round() as u8]));
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}
