//! Pixel-level (IoU, F1) and target-level (Pd, Fa) detection metrics.
//!
//! Two target-matching rules are provided, see [`MatchRule`]. The default is
//! pixel based and therefore monotone in the decision threshold; the
//! component rule is the greedy one-to-one convention and is not.

use std::collections::VecDeque;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_MATCH_RADIUS: f64 = 3.0;
/// False-alarm rates are reported in units of `1e-6`.
pub const FA_SCALE: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(
                "binary_mask",
                format!("{} bits for {height}x{width}", bits.len()),
            ));
        }
        Ok(BinaryMask { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        BinaryMask { height, width, bits }
    }

    /// Pixels strictly above `threshold`.
    pub fn threshold(image: &GrayImage, threshold: f64) -> Self {
        BinaryMask {
            height: image.height,
            width: image.width,
            bits: image.pixels.iter().map(|&v| v > threshold).collect(),
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage {
            height: self.height,
            width: self.width,
            pixels: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Thresholds a probability map: `prob > threshold`.
pub fn predict_mask(prob: &GrayImage, threshold: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Invalid(format!("threshold must be in [0, 1], got {threshold}")));
    }
    Ok(BinaryMask::threshold(prob, threshold))
}

/// One mask per sample of an `(N, 1, H, W)` probability tensor.
pub fn predict_masks<T: Scalar>(prob: &Tensor<T>, threshold: f64) -> Result<Vec<BinaryMask>> {
    prob_maps(prob).iter().map(|p| predict_mask(p, threshold)).collect()
}

/// Splits an `(N, 1, H, W)` tensor into per-sample images.
pub fn prob_maps<T: Scalar>(prob: &Tensor<T>) -> Vec<GrayImage> {
    let s = prob.shape();
    (0..s.n())
        .map(|n| GrayImage {
            height: s.h(),
            width: s.w(),
            pixels: prob.plane(n, 0).iter().map(|v| v.as_f64()).collect(),
        })
        .collect()
}

/// An 8-connected set of foreground pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetComponent {
    /// `(row, col)` in discovery order; the first is the topmost-leftmost.
    pub pixels: Vec<(usize, usize)>,
    pub centroid: (f64, f64),
}

impl TargetComponent {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

/// Flood-fill labeling, ordered by each component's first pixel in raster order.
pub fn connected_components(mask: &BinaryMask) -> Vec<TargetComponent> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(i) = queue.pop_front() {
            let (y, x) = (i / w, i % w);
            pixels.push((y, x));
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.bits[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        let k = pixels.len() as f64;
        let cy = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / k;
        let cx = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / k;
        out.push(TargetComponent {
            pixels,
            centroid: (cy, cx),
        });
    }
    out
}

fn check_pairs(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::shape(
            "metrics",
            format!("{} predictions for {} ground truths", preds.len(), gts.len()),
        ));
    }
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        if (p.height, p.width) != (g.height, g.width) {
            return Err(Error::shape(
                "metrics",
                format!("pair {i}: {}x{} vs {}x{}", p.height, p.width, g.height, g.width),
            ));
        }
    }
    Ok(())
}

/// Dataset-global pixel confusion counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PixelCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl PixelCounts {
    /// `TP / (TP + FP + FN)`; 1 when both sides are empty everywhere.
    pub fn iou(&self) -> f64 {
        let d = self.tp + self.fp + self.fn_;
        if d == 0 {
            1.0
        } else {
            self.tp as f64 / d as f64
        }
    }

    /// `2TP / (2TP + FP + FN)`; 1 when both sides are empty everywhere.
    pub fn f1(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / d as f64
        }
    }
}

pub fn pixel_counts(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<PixelCounts> {
    check_pairs(preds, gts)?;
    let mut c = PixelCounts::default();
    for (p, g) in preds.iter().zip(gts) {
        for (&a, &b) in p.bits.iter().zip(&g.bits) {
            match (a, b) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(c)
}

/// `(IoU, F1)` from dataset-global counts.
pub fn pixel_metrics(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<(f64, f64)> {
    let c = pixel_counts(preds, gts)?;
    Ok((c.iou(), c.f1()))
}

/// Target-level tallies, summable across images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TargetCounts {
    pub detected: u64,
    pub targets: u64,
    pub false_alarm_pixels: u64,
    pub pixels: u64,
}

impl TargetCounts {
    /// Detected over total targets; 0 when there are no targets.
    pub fn pd(&self) -> f64 {
        if self.targets == 0 {
            0.0
        } else {
            self.detected as f64 / self.targets as f64
        }
    }

    /// False-alarm pixel rate in units of `1e-6`.
    pub fn fa(&self) -> f64 {
        if self.pixels == 0 {
            0.0
        } else {
            self.false_alarm_pixels as f64 / self.pixels as f64 * FA_SCALE
        }
    }

    fn add(&mut self, o: TargetCounts) {
        self.detected += o.detected;
        self.targets += o.targets;
        self.false_alarm_pixels += o.false_alarm_pixels;
        self.pixels += o.pixels;
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// How predictions are matched to ground-truth targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MatchRule {
    /// A target is detected when any predicted pixel lies on it or within the
    /// radius of its centroid; predicted pixels outside every such
    /// neighborhood are false alarms. Adding predicted pixels can only raise
    /// both counts, so ROC sweeps are monotone.
    #[default]
    Neighborhood,
    /// Predicted components are paired one-to-one with targets they overlap
    /// or whose centroid is within the radius, greedily by centroid distance;
    /// pixels of unpaired components are false alarms. Merging components as
    /// the threshold drops can lower both counts.
    GreedyComponent,
}

/// Matches the targets of one image pair.
pub fn match_targets(pred: &BinaryMask, gt: &BinaryMask, radius: f64, rule: MatchRule) -> TargetCounts {
    let gc = connected_components(gt);
    let pixels = (pred.height * pred.width) as u64;
    match rule {
        MatchRule::Neighborhood => match_neighborhood(pred, gt, &gc, radius, pixels),
        MatchRule::GreedyComponent => match_greedy(pred, gt, &gc, radius, pixels),
    }
}

fn match_neighborhood(pred: &BinaryMask, gt: &BinaryMask, gc: &[TargetComponent], radius: f64, pixels: u64) -> TargetCounts {
    let w = pred.width;
    let mut covered = gt.bits.clone();
    let mut detected = 0;
    for g in gc {
        let near = |y: usize, x: usize| dist(g.centroid, (y as f64, x as f64)) <= radius;
        let (cy, cx) = g.centroid;
        let r = radius.max(0.0);
        let y0 = (cy - r).floor().max(0.0) as usize;
        let y1 = ((cy + r).ceil() as usize).min(pred.height - 1);
        let x0 = (cx - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil() as usize).min(w - 1);
        let mut hit = g.pixels.iter().any(|&(y, x)| pred.get(y, x));
        for y in y0..=y1 {
            for x in x0..=x1 {
                if near(y, x) {
                    covered[y * w + x] = true;
                    hit |= pred.get(y, x);
                }
            }
        }
        detected += u64::from(hit);
    }
    let false_alarm_pixels = pred.bits.iter().zip(&covered).filter(|(&p, &c)| p && !c).count() as u64;
    TargetCounts {
        detected,
        targets: gc.len() as u64,
        false_alarm_pixels,
        pixels,
    }
}

fn match_greedy(pred: &BinaryMask, gt: &BinaryMask, gc: &[TargetComponent], radius: f64, pixels: u64) -> TargetCounts {
    let pc = connected_components(pred);
    let mut label = vec![usize::MAX; gt.height * gt.width];
    for (gi, g) in gc.iter().enumerate() {
        for &(y, x) in &g.pixels {
            label[y * gt.width + x] = gi;
        }
    }
    let mut pairs = Vec::new();
    for (gi, g) in gc.iter().enumerate() {
        for (pi, p) in pc.iter().enumerate() {
            let d = dist(g.centroid, p.centroid);
            if d <= radius || p.pixels.iter().any(|&(y, x)| label[y * gt.width + x] == gi) {
                pairs.push((d, gi, pi));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut g_used = vec![false; gc.len()];
    let mut p_used = vec![false; pc.len()];
    let mut detected = 0;
    for (_, gi, pi) in pairs {
        if !g_used[gi] && !p_used[pi] {
            g_used[gi] = true;
            p_used[pi] = true;
            detected += 1;
        }
    }
    let false_alarm_pixels = pc
        .iter()
        .zip(&p_used)
        .filter(|(_, &u)| !u)
        .map(|(c, _)| c.area() as u64)
        .sum();
    TargetCounts {
        detected,
        targets: gc.len() as u64,
        false_alarm_pixels,
        pixels,
    }
}

pub fn target_counts(preds: &[BinaryMask], gts: &[BinaryMask], radius: f64, rule: MatchRule) -> Result<TargetCounts> {
    check_pairs(preds, gts)?;
    let mut total = TargetCounts::default();
    for (p, g) in preds.iter().zip(gts) {
        total.add(match_targets(p, g, radius, rule));
    }
    Ok(total)
}

/// `(Pd, Fa)` with Fa in units of `1e-6`.
pub fn target_metrics(preds: &[BinaryMask], gts: &[BinaryMask], radius: f64, rule: MatchRule) -> Result<(f64, f64)> {
    let c = target_counts(preds, gts, radius, rule)?;
    Ok((c.pd(), c.fa()))
}

/// Full evaluation of thresholded predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub name: String,
    pub iou: f64,
    pub f1: f64,
    pub pd: f64,
    /// Units of `1e-6`.
    pub fa: f64,
    pub pixels: PixelCounts,
    pub targets: TargetCounts,
}

impl EvalReport {
    pub fn compute(name: &str, preds: &[BinaryMask], gts: &[BinaryMask], radius: f64, rule: MatchRule) -> Result<Self> {
        let pixels = pixel_counts(preds, gts)?;
        let targets = target_counts(preds, gts, radius, rule)?;
        Ok(EvalReport {
            name: name.to_string(),
            iou: pixels.iou(),
            f1: pixels.f1(),
            pd: targets.pd(),
            fa: targets.fa(),
            pixels,
            targets,
        })
    }

    pub const CSV_HEADER: &'static str =
        "dataset,iou,f1,pd,fa_e6,tp,fp,fn,detected,targets,false_alarm_pixels,pixels";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{},{},{}",
            self.name,
            self.iou,
            self.f1,
            self.pd,
            self.fa,
            self.pixels.tp,
            self.pixels.fp,
            self.pixels.fn_,
            self.targets.detected,
            self.targets.targets,
            self.targets.false_alarm_pixels,
            self.targets.pixels
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub pd: f64,
    /// Units of `1e-6`.
    pub fa: f64,
}

/// Target metrics at each threshold of a strictly descending list.
pub fn roc_sweep(
    probs: &[GrayImage],
    gts: &[BinaryMask],
    thresholds: &[f64],
    radius: f64,
    rule: MatchRule,
) -> Result<Vec<RocPoint>> {
    if thresholds.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Invalid("roc thresholds must be strictly descending".into()));
    }
    thresholds
        .iter()
        .map(|&t| {
            let preds = probs.iter().map(|p| predict_mask(p, t)).collect::<Result<Vec<_>>>()?;
            let (pd, fa) = target_metrics(&preds, gts, radius, rule)?;
            Ok(RocPoint { threshold: t, pd, fa })
        })
        .collect()
}

/// `steps + 1` evenly spaced thresholds from 1 down to 0.
pub fn default_thresholds(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| 1.0 - i as f64 / steps as f64).collect()
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut s = String::from("threshold,pd,fa_e6\n");
    for p in points {
        writeln!(s, "{:.6},{:.6},{:.6}", p.threshold, p.pd, p.fa).expect("write to string");
    }
    s
}
