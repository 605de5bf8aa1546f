//! SLIC superpixel segmentation of the RGB input.
//!
//! Localized k-means in (CIELAB, x/S, y/S) space with grid step
//! `S = sqrt(H*W/K)`, a 2S x 2S search window per cluster, distance
//! `d = d_color + m * d_spatial` (both squared), followed by connectivity
//! enforcement. Deterministic: grid initialization, fixed iteration order,
//! lowest-index tie-breaking.

use crate::data::RgbImage;
use crate::error::{HprnError, Result};

/// Per-pixel category assignment. Labels are dense in `[0, n_labels)` and
/// every label occupies a single 4-connected region.
#[derive(Clone, Debug)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub n_labels: usize,
    /// Requested category count this map was built for.
    pub scale: usize,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>, scale: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(HprnError::dimension(
                "LabelMap::new",
                format!("{height}x{width}"),
                format!("labels of length {}", labels.len()),
            ));
        }
        let n_labels = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
        Ok(LabelMap {
            height,
            width,
            labels,
            n_labels,
            scale,
        })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Pixel count per label.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_labels];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// True when every label forms one 4-connected region and labels are
    /// dense from 0.
    pub fn is_connected(&self) -> bool {
        let comps = connected_components(&self.labels, self.height, self.width);
        let n_comps = comps.iter().copied().max().map_or(0, |m| m as usize + 1);
        n_comps == self.n_labels
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SlicParams {
    /// Target superpixel count K.
    pub scale: usize,
    /// Compactness weight m on the spatial term.
    pub compactness: f64,
    pub max_iters: usize,
    /// Cluster in CIELAB (true) or raw RGB (false).
    pub use_lab: bool,
}

impl Default for SlicParams {
    fn default() -> Self {
        SlicParams {
            scale: 8,
            compactness: 10.0,
            max_iters: 10,
            use_lab: true,
        }
    }
}

impl SlicParams {
    pub fn with_scale(scale: usize) -> Self {
        SlicParams {
            scale,
            ..Default::default()
        }
    }
}

// -------------------------------------------------------------------
// Color conversion
// -------------------------------------------------------------------

/// sRGB component in [0,1] to linear.
fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// RGB in [0,1] to CIELAB under D65.
pub fn rgb_to_lab(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let (rl, gl, bl) = (srgb_to_linear(r), srgb_to_linear(g), srgb_to_linear(b));
    let x = 0.4124564 * rl + 0.3575761 * gl + 0.1804375 * bl;
    let y = 0.2126729 * rl + 0.7151522 * gl + 0.0721750 * bl;
    let z = 0.0193339 * rl + 0.1191920 * gl + 0.9503041 * bl;
    // D65 white point
    let (xn, yn, zn) = (0.95047, 1.0, 1.08883);
    let f = |t: f64| {
        if t > 0.008856 {
            t.cbrt()
        } else {
            7.787 * t + 16.0 / 116.0
        }
    };
    let (fx, fy, fz) = (f(x / xn), f(y / yn), f(z / zn));
    (116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))
}

// -------------------------------------------------------------------
// Segmentation
// -------------------------------------------------------------------

struct Center {
    l: f64,
    a: f64,
    b: f64,
    y: f64,
    x: f64,
}

/// Choose a grid of roughly K centers, preferring near-square cells; on a
/// tie, more columns than rows.
fn grid_layout(height: usize, width: usize, k: usize) -> (usize, usize) {
    let mut best = (1usize, k.max(1));
    let mut best_score = (usize::MAX, f64::INFINITY);
    for nx in 1..=k.max(1) {
        let ny = ((k as f64 / nx as f64).round() as usize).max(1);
        let count_err = (nx * ny).abs_diff(k);
        let aspect_err = (width as f64 / nx as f64 - height as f64 / ny as f64).abs();
        let score = (count_err, aspect_err);
        // Strictly-less comparison keeps the largest nx among exact ties.
        if score.0 < best_score.0
            || (score.0 == best_score.0 && score.1 < best_score.1)
            || (score.0 == best_score.0 && score.1 == best_score.1)
        {
            best_score = score;
            best = (nx, ny);
        }
    }
    best
}

/// Segment an RGB image (values in [0,1]) into roughly `params.scale`
/// superpixels.
pub fn slic_segment(rgb: &RgbImage, params: &SlicParams) -> Result<LabelMap> {
    let (h, w) = (rgb.height, rgb.width);
    let hw = h * w;
    let k = params.scale;
    if k == 0 || k > hw {
        return Err(HprnError::contract(
            "slic_segment",
            format!("scale {k} invalid for {h}x{w} image"),
        ));
    }

    // Per-pixel color features.
    let mut feat = vec![0.0f64; 3 * hw];
    for p in 0..hw {
        let (r, g, b) = (rgb.data[p], rgb.data[hw + p], rgb.data[2 * hw + p]);
        let (l, a, bb) = if params.use_lab {
            rgb_to_lab(r, g, b)
        } else {
            (r * 100.0, g * 100.0, b * 100.0)
        };
        feat[3 * p] = l;
        feat[3 * p + 1] = a;
        feat[3 * p + 2] = bb;
    }

    let s = (hw as f64 / k as f64).sqrt();
    let (nx, ny) = grid_layout(h, w, k);
    let mut centers: Vec<Center> = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            let cy = ((iy as f64 + 0.5) * h as f64 / ny as f64 - 0.5)
                .clamp(0.0, h as f64 - 1.0);
            let cx = ((ix as f64 + 0.5) * w as f64 / nx as f64 - 0.5)
                .clamp(0.0, w as f64 - 1.0);
            let p = (cy.round() as usize) * w + cx.round() as usize;
            centers.push(Center {
                l: feat[3 * p],
                a: feat[3 * p + 1],
                b: feat[3 * p + 2],
                y: cy,
                x: cx,
            });
        }
    }

    let m = params.compactness;
    let mut labels = vec![u32::MAX; hw];
    let mut dists = vec![f64::INFINITY; hw];

    for _ in 0..params.max_iters.max(1) {
        labels.fill(u32::MAX);
        dists.fill(f64::INFINITY);

        for (ci, c) in centers.iter().enumerate() {
            let y0 = ((c.y - s).floor().max(0.0)) as usize;
            let y1 = ((c.y + s).ceil().min(h as f64 - 1.0)) as usize;
            let x0 = ((c.x - s).floor().max(0.0)) as usize;
            let x1 = ((c.x + s).ceil().min(w as f64 - 1.0)) as usize;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = y * w + x;
                    let dl = feat[3 * p] - c.l;
                    let da = feat[3 * p + 1] - c.a;
                    let db = feat[3 * p + 2] - c.b;
                    let dy = (y as f64 - c.y) / s;
                    let dx = (x as f64 - c.x) / s;
                    let d = dl * dl + da * da + db * db + m * (dy * dy + dx * dx);
                    // Strict < keeps the lowest cluster index on ties.
                    if d < dists[p] {
                        dists[p] = d;
                        labels[p] = ci as u32;
                    }
                }
            }
        }

        // Window search can strand pixels once centers drift; assign those
        // to the nearest center globally.
        for p in 0..hw {
            if labels[p] != u32::MAX {
                continue;
            }
            let (y, x) = (p / w, p % w);
            let mut best = 0u32;
            let mut best_d = f64::INFINITY;
            for (ci, c) in centers.iter().enumerate() {
                let dl = feat[3 * p] - c.l;
                let da = feat[3 * p + 1] - c.a;
                let db = feat[3 * p + 2] - c.b;
                let dy = (y as f64 - c.y) / s;
                let dx = (x as f64 - c.x) / s;
                let d = dl * dl + da * da + db * db + m * (dy * dy + dx * dx);
                if d < best_d {
                    best_d = d;
                    best = ci as u32;
                }
            }
            labels[p] = best;
        }

        // Recompute centers; empty clusters keep their previous position.
        let mut acc = vec![[0.0f64; 6]; centers.len()];
        for p in 0..hw {
            let ci = labels[p] as usize;
            let a = &mut acc[ci];
            a[0] += feat[3 * p];
            a[1] += feat[3 * p + 1];
            a[2] += feat[3 * p + 2];
            a[3] += (p / w) as f64;
            a[4] += (p % w) as f64;
            a[5] += 1.0;
        }
        let mut movement: f64 = 0.0;
        for (c, a) in centers.iter_mut().zip(acc.iter()) {
            if a[5] == 0.0 {
                continue;
            }
            let (nl, na, nb) = (a[0] / a[5], a[1] / a[5], a[2] / a[5]);
            let (nyc, nxc) = (a[3] / a[5], a[4] / a[5]);
            let d = (nl - c.l).powi(2)
                + (na - c.a).powi(2)
                + (nb - c.b).powi(2)
                + (nyc - c.y).powi(2)
                + (nxc - c.x).powi(2);
            movement = movement.max(d.sqrt());
            *c = Center {
                l: nl,
                a: na,
                b: nb,
                y: nyc,
                x: nxc,
            };
        }
        if movement < 1e-3 {
            break;
        }
    }

    let lm = LabelMap::new(h, w, labels, k)?;
    enforce_connectivity(&lm)
}

fn connected_components(labels: &[u32], h: usize, w: usize) -> Vec<u32> {
    let mut comp = vec![u32::MAX; labels.len()];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..labels.len() {
        if comp[start] != u32::MAX {
            continue;
        }
        let id = next;
        next += 1;
        comp[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            let mut push = |q: usize| {
                if comp[q] == u32::MAX && labels[q] == labels[start] {
                    comp[q] = id;
                    stack.push(q);
                }
            };
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
        }
    }
    comp
}

/// Merge orphan components smaller than `(H*W/K)/4` into their largest
/// adjacent component, then re-index labels densely from 0 in raster order
/// of first appearance.
pub fn enforce_connectivity(lm: &LabelMap) -> Result<LabelMap> {
    let (h, w) = (lm.height, lm.width);
    let hw = h * w;
    let threshold = (hw / lm.scale.max(1) / 4).max(1);

    let mut comp = connected_components(&lm.labels, h, w);
    loop {
        let n_comps = comp.iter().copied().max().unwrap() as usize + 1;
        if n_comps == 1 {
            break;
        }
        let mut sizes = vec![0usize; n_comps];
        for &c in &comp {
            sizes[c as usize] += 1;
        }
        let mut merged_any = false;
        for small in 0..n_comps {
            if sizes[small] == 0 || sizes[small] >= threshold {
                continue;
            }
            // Largest adjacent component wins; lowest id on ties.
            let mut best: Option<(usize, usize)> = None; // (size, id)
            for p in 0..hw {
                if comp[p] as usize != small {
                    continue;
                }
                let (y, x) = (p / w, p % w);
                let mut consider = |q: usize| {
                    let other = comp[q] as usize;
                    if other != small && sizes[other] > 0 {
                        let cand = (sizes[other], other);
                        best = Some(match best {
                            None => cand,
                            Some((bs, bi)) => {
                                if cand.0 > bs || (cand.0 == bs && cand.1 < bi) {
                                    cand
                                } else {
                                    (bs, bi)
                                }
                            }
                        });
                    }
                };
                if y > 0 {
                    consider(p - w);
                }
                if y + 1 < h {
                    consider(p + w);
                }
                if x > 0 {
                    consider(p - 1);
                }
                if x + 1 < w {
                    consider(p + 1);
                }
            }
            if let Some((_, target)) = best {
                for c in comp.iter_mut() {
                    if *c as usize == small {
                        *c = target as u32;
                    }
                }
                sizes[target] += sizes[small];
                sizes[small] = 0;
                merged_any = true;
            }
        }
        if !merged_any {
            break;
        }
    }

    // Dense re-index in raster order of first appearance.
    let mut remap = vec![u32::MAX; comp.iter().copied().max().unwrap() as usize + 1];
    let mut next = 0u32;
    let mut labels = vec![0u32; hw];
    for p in 0..hw {
        let c = comp[p] as usize;
        if remap[c] == u32::MAX {
            remap[c] = next;
            next += 1;
        }
        labels[p] = remap[c];
    }
    LabelMap::new(h, w, labels, lm.scale)
}

/// One label map per requested scale.
pub fn multiscale_labels(rgb: &RgbImage, scales: &[usize], params: &SlicParams) -> Result<Vec<LabelMap>> {
    if scales.is_empty() {
        return Err(HprnError::contract(
            "multiscale_labels",
            "no scales requested".to_string(),
        ));
    }
    scales
        .iter()
        .map(|&k| {
            slic_segment(
                rgb,
                &SlicParams {
                    scale: k,
                    ..*params
                },
            )
        })
        .collect()
}
