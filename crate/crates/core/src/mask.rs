//! Face-mask inference from image-prompt cross-attention:
//! aggregate → threshold → keep the largest region → binarize.

use crate::backbone::AttnRecord;
use crate::error::{Error, Result};
use crate::image::RegionMask;

/// Aggregated, max-normalized attention mass of the image-prompt tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Running mean of per-layer image-attention maps at a target resolution.
#[derive(Clone, Debug)]
pub struct HeatmapAccumulator {
    height: usize,
    width: usize,
    sum: Vec<f64>,
    count: usize,
}

impl HeatmapAccumulator {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            sum: vec![0.0; height * width],
            count: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Fold in batch item `item` of a record. Records without image
    /// attention are ignored; returns whether the record contributed.
    pub fn add(&mut self, record: &AttnRecord, item: usize) -> Result<bool> {
        let Some(img) = &record.image else {
            return Ok(false);
        };
        let s = img.shape();
        let (batch, heads, n, keys) = (s[0], s[1], s[2], s[3]);
        if item >= batch {
            return Err(Error::Index(format!("batch item {item} of {batch}")));
        }
        let (h, w) = (record.height, record.width);
        if n != h * w || !self.height.is_multiple_of(h) || !self.width.is_multiple_of(w) {
            return Err(Error::Structural(format!(
                "attention grid {h}x{w} ({n} queries) cannot map onto {}x{}",
                self.height, self.width
            )));
        }
        let first = usize::from(record.null_key);
        if keys <= first {
            return Err(Error::Structural("image attention without prompt tokens".into()));
        }
        let tokens = keys - first;
        let norm = 1.0 / (heads * tokens) as f64;
        let mut grid = vec![0.0; n];
        let d = img.data();
        for hd in 0..heads {
            let base = (item * heads + hd) * n * keys;
            for (q, g) in grid.iter_mut().enumerate() {
                let row = &d[base + q * keys..base + (q + 1) * keys];
                *g += row[first..].iter().map(|&v| v as f64).sum::<f64>() * norm;
            }
        }
        let (fy, fx) = (self.height / h, self.width / w);
        for y in 0..self.height {
            for x in 0..self.width {
                self.sum[y * self.width + x] += grid[(y / fy) * w + x / fx];
            }
        }
        self.count += 1;
        Ok(true)
    }

    pub fn finish(&self) -> Result<Heatmap> {
        if self.count == 0 {
            return Err(Error::State("no image-attention maps were recorded".into()));
        }
        let mean: Vec<f64> = self.sum.iter().map(|v| v / self.count as f64).collect();
        let max = mean.iter().fold(0.0f64, |m, &v| m.max(v));
        let values = if max > 0.0 {
            mean.iter().map(|v| v / max).collect()
        } else {
            mean
        };
        Ok(Heatmap {
            height: self.height,
            width: self.width,
            values,
        })
    }
}

/// Mean over heads, prompt tokens, layers and steps of the image attention,
/// upsampled to `target` and normalized to a maximum of 1.
pub fn aggregate_attention(
    records: &[AttnRecord],
    target: (usize, usize),
    item: usize,
) -> Result<Heatmap> {
    let mut acc = HeatmapAccumulator::new(target.0, target.1);
    for r in records {
        acc.add(r, item)?;
    }
    acc.finish()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThresholdMethod {
    Fixed(f64),
    Otsu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Thresholded {
    pub bits: Vec<bool>,
    pub threshold: f64,
    /// Histogram bin of the Otsu split, when it was used.
    pub otsu_bin: Option<usize>,
    /// Otsu found no split (constant map) and fell back to 0.5.
    pub fallback: bool,
}

pub const OTSU_BINS: usize = 256;

pub fn histogram_bin(v: f64) -> usize {
    ((v * OTSU_BINS as f64).floor().max(0.0) as usize).min(OTSU_BINS - 1)
}

/// Otsu split over the 256-bin histogram of values in `[0, 1]`: pixels in
/// bins `≥ k` form the foreground. Between-class variances are compared
/// exactly in integer arithmetic; ties keep the smallest `k`. Returns
/// `None` when no split leaves both classes nonempty.
pub fn otsu_bin(values: &[f64]) -> Option<usize> {
    let mut hist = [0i128; OTSU_BINS];
    for &v in values {
        hist[histogram_bin(v)] += 1;
    }
    let total_n: i128 = hist.iter().sum();
    let total_s: i128 = hist.iter().enumerate().map(|(i, &c)| i as i128 * c).sum();
    // Score for split k is (S0·N1 − S1·N0)² / (N0·N1), proportional to the
    // between-class variance; kept as a numerator/denominator pair.
    let mut best: Option<(usize, i128, i128)> = None;
    let (mut n0, mut s0) = (0i128, 0i128);
    for k in 1..OTSU_BINS {
        n0 += hist[k - 1];
        s0 += (k as i128 - 1) * hist[k - 1];
        let (n1, s1) = (total_n - n0, total_s - s0);
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let diff = s0 * n1 - s1 * n0;
        let (num, den) = (diff * diff, n0 * n1);
        let better = match best {
            None => true,
            Some((_, bn, bd)) => num * bd > bn * den,
        };
        if better {
            best = Some((k, num, den));
        }
    }
    best.map(|(k, _, _)| k)
}

pub fn threshold_map(h: &Heatmap, method: ThresholdMethod) -> Thresholded {
    let (threshold, otsu, fallback) = match method {
        ThresholdMethod::Fixed(t) => (t, None, false),
        ThresholdMethod::Otsu => match otsu_bin(&h.values) {
            Some(k) => (k as f64 / OTSU_BINS as f64, Some(k), false),
            None => (0.5, None, true),
        },
    };
    let bits = match otsu {
        // Compare on bins so the split is exactly the histogram partition.
        Some(k) => h.values.iter().map(|&v| histogram_bin(v) >= k).collect(),
        None => h.values.iter().map(|&v| v >= threshold).collect(),
    };
    Thresholded {
        bits,
        threshold,
        otsu_bin: otsu,
        fallback,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Result<Self> {
        match n {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            _ => Err(Error::Parameter(format!("connectivity must be 4 or 8, got {n}"))),
        }
    }

    pub fn count(self) -> u32 {
        match self {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Keep only the largest connected component. Components are numbered by
/// their first pixel in raster order and ties go to the lowest number.
pub fn largest_region(bits: &[bool], height: usize, width: usize, conn: Connectivity) -> Result<Vec<bool>> {
    if bits.len() != height * width {
        return Err(Error::Structural(format!(
            "{} bits for a {height}x{width} grid",
            bits.len()
        )));
    }
    // Two-pass union-find; each pixel's provisional root is its own index.
    let mut parent: Vec<usize> = (0..bits.len()).collect();
    let back: &[(isize, isize)] = match conn {
        Connectivity::Four => &[(-1, 0), (0, -1)],
        Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1)],
    };
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !bits[i] {
                continue;
            }
            for &(dy, dx) in back {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || nx >= width as isize {
                    continue;
                }
                let j = ny as usize * width + nx as usize;
                if bits[j] {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    // Keep the smaller index as root: it is the first pixel.
                    let (lo, hi) = (ri.min(rj), ri.max(rj));
                    parent[hi] = lo;
                }
            }
        }
    }
    let mut size = vec![0usize; bits.len()];
    for i in 0..bits.len() {
        if bits[i] {
            let r = find(&mut parent, i);
            size[r] += 1;
        }
    }
    let mut best: Option<(usize, usize)> = None;
    for (root, &s) in size.iter().enumerate() {
        if s > 0 && best.is_none_or(|(_, bs)| s > bs) {
            best = Some((root, s));
        }
    }
    let Some((keep, _)) = best else {
        return Ok(vec![false; bits.len()]);
    };
    Ok((0..bits.len())
        .map(|i| bits[i] && find(&mut parent, i) == keep)
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskConfig {
    pub threshold: ThresholdMethod,
    pub connectivity: Connectivity,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            threshold: ThresholdMethod::Otsu,
            connectivity: Connectivity::Four,
        }
    }
}

/// Every intermediate of the mask pipeline.
#[derive(Clone, Debug)]
pub struct MaskResult {
    pub heatmap: Heatmap,
    pub thresholded: Thresholded,
    pub filtered: Vec<bool>,
    pub mask: RegionMask,
    /// The filtered mask was empty or covered the whole image, and the
    /// centered default box was used instead.
    pub fallback_box: bool,
}

/// Centered box covering a quarter of the image.
pub fn default_box(height: usize, width: usize) -> RegionMask {
    let (bh, bw) = (height.div_ceil(2), width.div_ceil(2));
    let (y0, x0) = ((height - bh) / 2, (width - bw) / 2);
    RegionMask::from_fn(height, width, |y, x| {
        ((y0..y0 + bh).contains(&y) && (x0..x0 + bw).contains(&x)) as u8 as f32
    })
}

/// Threshold, filter and binarize an aggregated heatmap.
pub fn mask_from_heatmap(heatmap: Heatmap, cfg: &MaskConfig) -> Result<MaskResult> {
    let (h, w) = (heatmap.height, heatmap.width);
    let thresholded = threshold_map(&heatmap, cfg.threshold);
    let filtered = largest_region(&thresholded.bits, h, w, cfg.connectivity)?;
    // A mask covering nothing or everything gives no face/background split.
    let fallback_box = filtered.iter().all(|&b| !b) || filtered.iter().all(|&b| b);
    let mask = if fallback_box {
        log::debug!("attention mask came out degenerate; using the centered default box");
        default_box(h, w)
    } else {
        RegionMask::from_bools(h, w, &filtered)?
    };
    Ok(MaskResult {
        heatmap,
        thresholded,
        filtered,
        mask,
        fallback_box,
    })
}
