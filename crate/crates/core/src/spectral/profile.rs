//! Radial amplitude and phase-congruency profiles of an image collection.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::spectral::fft::{check_pow2, fft2_planes};

/// Per radial frequency bin (width 1, centered spectrum): mean `log(1 + A)`
/// and `1 - circular variance` of the phase across images.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumProfile {
    pub radial_magnitude: Vec<f64>,
    /// Entries in `[0, 1]`; 1 means every image has the same phase.
    pub phase_congruency: Vec<f64>,
    pub image_count: usize,
}

impl SpectrumProfile {
    pub fn bins(&self) -> usize {
        self.radial_magnitude.len()
    }

    /// CSV with header `bin_radius,mean_log_magnitude,phase_congruency`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_radius,mean_log_magnitude,phase_congruency\n");
        for (i, (m, c)) in self.radial_magnitude.iter().zip(&self.phase_congruency).enumerate() {
            writeln!(s, "{i},{m:.9},{c:.9}").expect("write to string");
        }
        s
    }

    /// Least-squares slope of the magnitude profile against `ln(radius)` over
    /// bins `1..`, a proxy for how steeply energy falls off with frequency.
    pub fn magnitude_slope(&self) -> f64 {
        let pts: Vec<(f64, f64)> = self
            .radial_magnitude
            .iter()
            .enumerate()
            .skip(1)
            .map(|(r, &m)| ((r as f64).ln(), m))
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let cov: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let var: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        cov / var
    }
}

/// Mean absolute differences `(magnitude, congruency)` between two profiles
/// of the same bin count.
pub fn profile_divergence(a: &SpectrumProfile, b: &SpectrumProfile) -> Result<(f64, f64)> {
    if a.bins() != b.bins() {
        return Err(Error::shape(
            "profile_divergence",
            format!("{} vs {} bins", a.bins(), b.bins()),
        ));
    }
    let mad = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>() / x.len() as f64;
    Ok((
        mad(&a.radial_magnitude, &b.radial_magnitude),
        mad(&a.phase_congruency, &b.phase_congruency),
    ))
}

/// Radial bin of every position of an `h x w` spectrum after centering.
fn radial_bins(h: usize, w: usize) -> (Vec<usize>, usize) {
    let mut bins = Vec::with_capacity(h * w);
    let mut max = 0;
    for y in 0..h {
        // fftshift: frequency index y sits at (y + h/2) mod h
        let sy = ((y + h / 2) % h) as f64 - (h / 2) as f64;
        for x in 0..w {
            let sx = ((x + w / 2) % w) as f64 - (w / 2) as f64;
            let b = (sy * sy + sx * sx).sqrt().floor() as usize;
            max = max.max(b);
            bins.push(b);
        }
    }
    (bins, max + 1)
}

pub fn dataset_spectrum_profile(images: &[GrayImage]) -> Result<SpectrumProfile> {
    if images.len() < 2 {
        return Err(Error::Invalid(format!(
            "spectrum profile needs at least 2 images, got {}",
            images.len()
        )));
    }
    let (h, w) = (images[0].height, images[0].width);
    check_pow2("dataset_spectrum_profile", h, w)?;
    let (bins, nbins) = radial_bins(h, w);
    let mut counts = vec![0usize; nbins];
    for &b in &bins {
        counts[b] += 1;
    }

    let mut log_mag = vec![0.0; nbins];
    let mut phasor_re = vec![0.0; h * w];
    let mut phasor_im = vec![0.0; h * w];
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::shape(
                "dataset_spectrum_profile",
                format!("image {}x{} in a {h}x{w} collection", img.height, img.width),
            ));
        }
        let mut re = img.pixels.clone();
        let mut im = vec![0.0; h * w];
        fft2_planes(&mut re, &mut im, h, w, false);
        let mut per_bin = vec![0.0; nbins];
        for k in 0..h * w {
            let a = re[k].hypot(im[k]);
            per_bin[bins[k]] += (1.0 + a).ln();
            let imk = if im[k] == 0.0 { 0.0 } else { im[k] };
            let p = imk.atan2(re[k]);
            phasor_re[k] += p.cos();
            phasor_im[k] += p.sin();
        }
        for b in 0..nbins {
            log_mag[b] += per_bin[b] / counts[b] as f64;
        }
    }
    let n = images.len() as f64;
    let mut congruency = vec![0.0; nbins];
    for k in 0..h * w {
        let r = (phasor_re[k] / n).hypot(phasor_im[k] / n);
        congruency[bins[k]] += r;
    }
    for b in 0..nbins {
        congruency[b] = (congruency[b] / counts[b] as f64).clamp(0.0, 1.0);
        log_mag[b] /= n;
    }
    Ok(SpectrumProfile {
        radial_magnitude: log_mag,
        phase_congruency: congruency,
        image_count: images.len(),
    })
}
