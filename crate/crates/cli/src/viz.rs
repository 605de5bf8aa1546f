//! Error heatmaps and spectral curve plots rendered without a plotting
//! dependency.

use hprn_core::data::RgbImage;

/// Fixed five-stop colormap (dark blue through red), t in [0,1].
pub fn colormap(t: f64) -> (f64, f64, f64) {
    const STOPS: [(f64, f64, f64); 5] = [
        (0.05, 0.03, 0.35), // deep blue
        (0.02, 0.60, 0.85), // cyan
        (0.15, 0.80, 0.25), // green
        (0.95, 0.85, 0.10), // yellow
        (0.80, 0.05, 0.05), // red
    ];
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    let (r0, g0, b0) = STOPS[i];
    let (r1, g1, b1) = STOPS[i + 1];
    (
        r0 + (r1 - r0) * f,
        g0 + (g1 - g0) * f,
        b0 + (b1 - b0) * f,
    )
}

/// Map per-pixel values to a colormapped image, normalized by the maximum
/// (an all-zero map renders the uniform minimum color).
pub fn render_heatmap(values: &[f64], height: usize, width: usize) -> RgbImage {
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    let hw = height * width;
    let mut data = vec![0.0f64; 3 * hw];
    for (p, &v) in values.iter().enumerate() {
        let t = if max > 0.0 { v / max } else { 0.0 };
        let (r, g, b) = colormap(t);
        data[p] = r;
        data[hw + p] = g;
        data[2 * hw + p] = b;
    }
    RgbImage::new(height, width, data).expect("heatmap dims consistent")
}

const SERIES_COLORS: [(f64, f64, f64); 6] = [
    (0.85, 0.10, 0.10),
    (0.10, 0.35, 0.85),
    (0.10, 0.65, 0.20),
    (0.85, 0.55, 0.05),
    (0.55, 0.15, 0.70),
    (0.05, 0.60, 0.60),
];

/// Simple line plot: one polyline per series over a white canvas with a
/// thin frame. Axes are scaled to the data's bounding box.
pub fn render_curves(series: &[Vec<(f64, f64)>], height: usize, width: usize) -> RgbImage {
    let hw = height * width;
    let mut data = vec![1.0f64; 3 * hw];
    let margin = 8usize;

    let mut set_px = |x: isize, y: isize, (r, g, b): (f64, f64, f64)| {
        if x >= 0 && (x as usize) < width && y >= 0 && (y as usize) < height {
            let p = y as usize * width + x as usize;
            data[p] = r;
            data[hw + p] = g;
            data[2 * hw + p] = b;
        }
    };

    // Frame
    let frame = (0.2, 0.2, 0.2);
    for x in margin..width - margin {
        set_px(x as isize, margin as isize, frame);
        set_px(x as isize, (height - margin) as isize, frame);
    }
    for y in margin..height - margin {
        set_px(margin as isize, y as isize, frame);
        set_px((width - margin) as isize, y as isize, frame);
    }

    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for &(x, y) in s {
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
    }
    if !x_min.is_finite() || x_max <= x_min {
        x_max = x_min + 1.0;
    }
    if !y_min.is_finite() || y_max <= y_min {
        y_max = y_min + 1.0;
    }

    let plot_w = (width - 2 * margin) as f64;
    let plot_h = (height - 2 * margin) as f64;
    let to_px = |x: f64, y: f64| -> (isize, isize) {
        let px = margin as f64 + (x - x_min) / (x_max - x_min) * plot_w;
        let py = (height - margin) as f64 - (y - y_min) / (y_max - y_min) * plot_h;
        (px.round() as isize, py.round() as isize)
    };

    for (si, s) in series.iter().enumerate() {
        let color = SERIES_COLORS[si % SERIES_COLORS.len()];
        for pair in s.windows(2) {
            let (x0, y0) = to_px(pair[0].0, pair[0].1);
            let (x1, y1) = to_px(pair[1].0, pair[1].1);
            draw_line(&mut set_px, x0, y0, x1, y1, color);
        }
    }
    RgbImage::new(height, width, data).expect("plot dims consistent")
}

fn draw_line(
    set_px: &mut impl FnMut(isize, isize, (f64, f64, f64)),
    mut x0: isize,
    mut y0: isize,
    x1: isize,
    y1: isize,
    color: (f64, f64, f64),
) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        set_px(x0, y0, color);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}
