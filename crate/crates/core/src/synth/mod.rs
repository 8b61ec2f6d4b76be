//! Procedural infrared-like scenes from controllable domain styles, with
//! exact target masks.
//!
//! A background is power-law filtered noise whose Fourier phase is a fixed
//! per-domain field plus per-image jitter, so the jitter amplitude controls
//! how consistent the phase is across a domain while the amplitude spectrum
//! stays put. Clutter blobs and sensor noise go on top, then Gaussian targets
//! whose amplitude is solved to hit a requested signal-to-clutter ratio.

pub mod manifest;
pub mod pgm;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::metrics::BinaryMask;
use crate::spectral::fft::fft2_planes;

pub use manifest::{DatasetManifest, ManifestEntry, Sample, Split, MANIFEST_FILE};
pub use pgm::{encode_pgm, load_pgm, parse_pgm, save_pgm, Depth};

/// Side of the square window local clutter statistics are taken over.
pub const SCR_WINDOW: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct DomainStyle {
    pub id: usize,
    /// Background amplitude falls off as `1 / f^beta`.
    pub beta: f64,
    /// Background mean and standard deviation, in `[0, 1]` units.
    pub mean: f64,
    pub spread: f64,
    /// Expected clutter blobs per 64x64 area.
    pub clutter_density: f64,
    /// Clutter blob standard deviation in pixels.
    pub clutter_scale: f64,
    pub noise_sigma: f64,
    /// Half-width (radians) of the uniform per-image phase perturbation.
    pub phase_jitter: f64,
    /// Seed of the domain's base phase field.
    pub layout_seed: u64,
}

impl DomainStyle {
    /// Three stock domains with distinct spectra, contrast, clutter and phase consistency.
    pub fn preset(id: usize) -> Self {
        let base = DomainStyle {
            id,
            beta: 1.5,
            mean: 0.25,
            spread: 0.08,
            clutter_density: 2.0,
            clutter_scale: 2.5,
            noise_sigma: 0.01,
            phase_jitter: 0.4,
            layout_seed: 1000 + id as u64,
        };
        match id % 3 {
            0 => base,
            1 => DomainStyle {
                beta: 2.2,
                mean: 0.35,
                spread: 0.1,
                clutter_density: 4.0,
                clutter_scale: 3.5,
                noise_sigma: 0.02,
                phase_jitter: 1.2,
                ..base
            },
            _ => DomainStyle {
                beta: 1.0,
                mean: 0.3,
                spread: 0.12,
                clutter_density: 3.0,
                clutter_scale: 2.0,
                noise_sigma: 0.015,
                phase_jitter: 2.5,
                ..base
            },
        }
    }

    /// Two domains identical except for phase jitter (ids 0 and 1).
    pub fn phase_pair(jitter: (f64, f64)) -> [DomainStyle; 2] {
        let base = DomainStyle::preset(0);
        [
            DomainStyle {
                phase_jitter: jitter.0,
                ..base.clone()
            },
            DomainStyle {
                id: 1,
                phase_jitter: jitter.1,
                ..base
            },
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, v: f64, range: &str| Err(Error::Invalid(format!("{k} = {v} outside {range}")));
        if !(0.5..=3.0).contains(&self.beta) {
            return bad("beta", self.beta, "[0.5, 3]");
        }
        if !(0.0..=1.0).contains(&self.mean) {
            return bad("mean", self.mean, "[0, 1]");
        }
        if !(0.0..=1.0).contains(&self.spread) {
            return bad("spread", self.spread, "[0, 1]");
        }
        if !(self.clutter_density >= 0.0 && self.clutter_density.is_finite()) {
            return bad("clutter_density", self.clutter_density, "[0, inf)");
        }
        if !(self.clutter_scale > 0.0 && self.clutter_scale.is_finite()) {
            return bad("clutter_scale", self.clutter_scale, "(0, inf)");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma", self.noise_sigma, "[0, inf)");
        }
        if !(0.0..=std::f64::consts::PI).contains(&self.phase_jitter) {
            return bad("phase_jitter", self.phase_jitter, "[0, pi]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    /// Square image side, a power of two.
    pub size: usize,
    /// Inclusive range of targets per image.
    pub targets: (usize, usize),
    /// Inclusive range of target diameters in pixels.
    pub diameter: (usize, usize),
    pub scr: (f64, f64),
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            size: 64,
            targets: (1, 3),
            diameter: (2, 9),
            scr: (2.0, 10.0),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if !self.size.is_power_of_two() || self.size < 8 {
            return bad(format!("size {} must be a power of two >= 8", self.size));
        }
        if self.targets.0 > self.targets.1 || self.diameter.0 > self.diameter.1 || self.scr.0 > self.scr.1 {
            return bad("scene ranges must be ordered (min <= max)".into());
        }
        if self.diameter.0 == 0 || self.diameter.1 * 4 >= self.size {
            return bad(format!(
                "diameters {:?} must be positive and below size / 4 = {}",
                self.diameter,
                self.size / 4
            ));
        }
        if self.scr.0 <= 1.0 {
            return bad(format!("scr must exceed 1, got {}", self.scr.0));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlacedTarget {
    pub row: usize,
    pub col: usize,
    pub diameter: usize,
    pub amplitude: f64,
    pub requested_scr: f64,
    /// Mask pixels of this target.
    pub pixels: Vec<(usize, usize)>,
}

impl PlacedTarget {
    pub fn sigma(&self) -> f64 {
        self.diameter as f64 / 4.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedScene {
    pub image: GrayImage,
    pub mask: BinaryMask,
    /// The image before targets were added (clamped to `[0, 1]`).
    pub background: GrayImage,
    pub targets: Vec<PlacedTarget>,
}

/// SplitMix64 finalizer; derives independent seeds from structured inputs.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn signed_freq(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Zero-mean real field with amplitude `1/f^beta` and Hermitian-symmetric phase.
fn power_law_background(style: &DomainStyle, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut layout = ChaCha8Rng::seed_from_u64(mix_seed(style.layout_seed, n as u64));
    let mut re = vec![0.0; n * n];
    let mut im = vec![0.0; n * n];
    let pi = std::f64::consts::PI;
    for ky in 0..n {
        for kx in 0..n {
            let (my, mx) = ((n - ky) % n, (n - kx) % n);
            let k = ky * n + kx;
            let mirror = my * n + mx;
            // both draws happen for every bin so the stream does not depend on symmetry
            let base = layout.random_range(-pi..pi);
            let jitter = style.phase_jitter * rng.random_range(-1.0..1.0);
            if mirror < k {
                continue;
            }
            let f = signed_freq(ky, n).hypot(signed_freq(kx, n));
            if f == 0.0 {
                continue;
            }
            let amp = f.powf(-style.beta);
            let phase = base + jitter;
            if mirror == k {
                re[k] = amp * phase.cos();
            } else {
                re[k] = amp * phase.cos();
                im[k] = amp * phase.sin();
                re[mirror] = re[k];
                im[mirror] = -im[k];
            }
        }
    }
    fft2_planes(&mut re, &mut im, n, n, true);
    re
}

fn add_gaussian(img: &mut [f64], n: usize, cy: f64, cx: f64, sigma: f64, amp: f64, cutoff: f64) {
    let r = (cutoff * sigma).ceil() as isize;
    let (iy, ix) = (cy.round() as isize, cx.round() as isize);
    for y in (iy - r).max(0)..=(iy + r).min(n as isize - 1) {
        for x in (ix - r).max(0)..=(ix + r).min(n as isize - 1) {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            if d2 <= (cutoff * sigma).powi(2) {
                img[y as usize * n + x as usize] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
}

/// Unit-peak truncated Gaussian of a target, as `(index, value)` pairs.
fn target_profile(row: usize, col: usize, sigma: f64, n: usize) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    let r = (3.0 * sigma).ceil() as isize;
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = (dy * dy + dx * dx) as f64;
            let (y, x) = (row as isize + dy, col as isize + dx);
            if d2 <= 9.0 * sigma * sigma && y >= 0 && x >= 0 && (y as usize) < n && (x as usize) < n {
                out.push((y as usize * n + x as usize, (-d2 / (2.0 * sigma * sigma)).exp()));
            }
        }
    }
    out
}

/// `(peak - mean) / std` with the peak over `target` pixels and the
/// statistics over the `SCR_WINDOW`-square window around `(row, col)`,
/// excluding every pixel of `exclude`.
pub fn local_scr(image: &GrayImage, exclude: &BinaryMask, target: &[(usize, usize)], row: usize, col: usize) -> f64 {
    let half = SCR_WINDOW / 2;
    let (y0, x0) = (row.saturating_sub(half), col.saturating_sub(half));
    let (y1, x1) = ((row + half).min(image.height), (col + half).min(image.width));
    let mut vals = Vec::with_capacity(SCR_WINDOW * SCR_WINDOW);
    for y in y0..y1 {
        for x in x0..x1 {
            if !exclude.get(y, x) {
                vals.push(image.get(y, x));
            }
        }
    }
    let k = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / k;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k).sqrt();
    let peak = target.iter().map(|&(y, x)| image.get(y, x)).fold(f64::NEG_INFINITY, f64::max);
    (peak - mean) / std
}

pub fn render_scene(style: &DomainStyle, spec: &SceneSpec, seed: u64) -> Result<RenderedScene> {
    style.validate()?;
    spec.validate()?;
    let n = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let raw = power_law_background(style, n, &mut rng);
    let m = raw.iter().sum::<f64>() / raw.len() as f64;
    let s = (raw.iter().map(|v| (v - m).powi(2)).sum::<f64>() / raw.len() as f64).sqrt();
    let mut bg: Vec<f64> = raw.iter().map(|v| style.mean + style.spread * (v - m) / s.max(1e-300)).collect();

    let expected = style.clutter_density * (n * n) as f64 / 4096.0;
    let blobs = if expected > 0.0 {
        Poisson::new(expected).expect("positive rate").sample(&mut rng) as usize
    } else {
        0
    };
    for _ in 0..blobs {
        let cy = rng.random_range(0.0..n as f64);
        let cx = rng.random_range(0.0..n as f64);
        let sigma = style.clutter_scale * rng.random_range(0.7..1.3);
        let amp = style.spread * rng.random_range(0.5..1.5);
        add_gaussian(&mut bg, n, cy, cx, sigma, amp, 4.0);
    }
    if style.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, style.noise_sigma).expect("finite sigma");
        bg.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }

    // placement
    let count = rng.random_range(spec.targets.0..=spec.targets.1);
    let mut placed: Vec<PlacedTarget> = Vec::new();
    let mut profiles = Vec::new();
    for _ in 0..count {
        let d = rng.random_range(spec.diameter.0..=spec.diameter.1);
        let scr = rng.random_range(spec.scr.0..=spec.scr.1);
        let sigma = d as f64 / 4.0;
        let margin = (3.0 * sigma).ceil() as usize;
        let mut spot = None;
        for _ in 0..100 {
            let r = rng.random_range(margin..n - margin);
            let c = rng.random_range(margin..n - margin);
            let clear = placed.iter().all(|t| {
                let gap = 3.0 * t.sigma() + 3.0 * sigma + 1.0;
                (t.row as f64 - r as f64).hypot(t.col as f64 - c as f64) > gap
            });
            if clear {
                spot = Some((r, c));
                break;
            }
        }
        let Some((row, col)) = spot else {
            log::debug!("scene {seed}: no room for another target after 100 attempts");
            continue;
        };
        let profile = target_profile(row, col, sigma, n);
        let pixels = profile
            .iter()
            .filter(|(_, v)| *v >= 0.5)
            .map(|&(i, _)| (i / n, i % n))
            .collect();
        placed.push(PlacedTarget {
            row,
            col,
            diameter: d,
            amplitude: 0.0,
            requested_scr: scr,
            pixels,
        });
        profiles.push(profile);
    }

    let mut mask = BinaryMask::empty(n, n);
    for t in &placed {
        for &(y, x) in &t.pixels {
            mask.set(y, x, true);
        }
    }
    let compose = |amps: &[f64]| -> GrayImage {
        let mut px = bg.clone();
        for (p, &a) in profiles.iter().zip(amps) {
            for &(i, v) in p {
                px[i] += a * v;
            }
        }
        px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        GrayImage {
            height: n,
            width: n,
            pixels: px,
        }
    };

    // solve amplitudes target by target, two sweeps so later tails are accounted for
    let mut amps = vec![0.0; placed.len()];
    for _ in 0..2 {
        for i in 0..placed.len() {
            let t = &placed[i];
            let scr_at = |a: f64, amps: &mut Vec<f64>| {
                amps[i] = a;
                local_scr(&compose(amps), &mask, &t.pixels, t.row, t.col)
            };
            let (mut lo, mut hi) = (0.0, 2.0);
            if scr_at(hi, &mut amps) < t.requested_scr {
                log::debug!("scene {seed}: requested scr {} unreachable before clipping", t.requested_scr);
                amps[i] = hi;
                continue;
            }
            for _ in 0..50 {
                let mid = 0.5 * (lo + hi);
                if scr_at(mid, &mut amps) < t.requested_scr {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            amps[i] = hi;
        }
    }
    for (t, &a) in placed.iter_mut().zip(&amps) {
        t.amplitude = a;
    }
    let image = compose(&amps);
    let background = compose(&vec![0.0; amps.len()]);
    Ok(RenderedScene {
        image,
        mask,
        background,
        targets: placed,
    })
}

/// Renders `n` scenes into `out_dir/domain-{id}/{img,mask}/NNNN.pgm` plus a
/// manifest. A seeded shuffle puts every fifth position into the
/// validation split.
pub fn generate_domain_dataset(
    style: &DomainStyle,
    spec: &SceneSpec,
    n: usize,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::Invalid("dataset size must be at least 1".into()));
    }
    style.validate()?;
    spec.validate()?;
    let dir = out_dir.as_ref().join(format!("domain-{}", style.id));
    for sub in ["img", "mask"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let domain_seed = mix_seed(seed, style.id as u64);
    let scenes: Vec<RenderedScene> = (0..n)
        .into_par_iter()
        .map(|i| render_scene(style, spec, mix_seed(domain_seed, i as u64 + 1)))
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..n).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(mix_seed(domain_seed, 0));
    for i in (1..n).rev() {
        order.swap(i, split_rng.random_range(0..=i));
    }
    let mut split = vec![Split::Train; n];
    for (pos, &i) in order.iter().enumerate() {
        if pos % 5 == 4 {
            split[i] = Split::Val;
        }
    }

    let mut entries = Vec::with_capacity(n);
    for (i, scene) in scenes.iter().enumerate() {
        let img = format!("img/{i:04}.pgm");
        let mask = format!("mask/{i:04}.pgm");
        save_pgm(&scene.image, dir.join(&img), Depth::Sixteen)?;
        save_pgm(&scene.mask.to_image(), dir.join(&mask), Depth::Eight)?;
        entries.push(ManifestEntry {
            image: img.into(),
            mask: mask.into(),
            domain: style.id,
            split: split[i],
        });
    }
    let manifest = DatasetManifest { root: dir.clone(), entries };
    manifest.save(dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::connected_components;

    #[test]
    fn background_is_real_and_deterministic() {
        let style = DomainStyle::preset(1);
        let a = power_law_background(&style, 16, &mut ChaCha8Rng::seed_from_u64(3));
        let b = power_law_background(&style, 16, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert!(a.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn components_match_targets() {
        for seed in 0..20 {
            let s = render_scene(&DomainStyle::preset(seed as usize), &SceneSpec::default(), seed).unwrap();
            assert!(!s.targets.is_empty() && s.mask.count() > 0);
            assert_eq!(connected_components(&s.mask).len(), s.targets.len());
            assert!(s.image.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn validation() {
        let mut st = DomainStyle::preset(0);
        st.beta = 3.5;
        assert!(st.validate().is_err());
        let sp = SceneSpec {
            size: 16,
            ..SceneSpec::default()
        };
        assert!(sp.validate().is_err());
    }

    #[test]
    fn split_counts() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec {
            size: 32,
            diameter: (2, 5),
            ..SceneSpec::default()
        };
        let m = generate_domain_dataset(&DomainStyle::preset(0), &spec, 10, 1, dir.path()).unwrap();
        assert_eq!(m.counts_per_domain()[&0], (8, 2));
        assert_eq!(std::fs::read_dir(dir.path().join("domain-0/img")).unwrap().count(), 10);
    }
}
