//! Cartesian and polar views of a per-channel 2-D spectrum.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::spectral::fft::{check_pow2, fft2_planes};
use crate::tensor::graph::wrapped_atan2;
use crate::tensor::{Graph, Shape, Tensor, Var};

/// Smoothing inside the magnitude `sqrt(re^2 + im^2 + delta^2)`; keeps the
/// gradient finite at empty frequency bins.
pub const MAGNITUDE_DELTA: f64 = 1e-8;

/// Spectrum held as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct ComplexVar {
    pub re: Var,
    pub im: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct PolarVar {
    pub amplitude: Var,
    pub phase: Var,
}

/// Forward transform of a real feature map.
pub fn real_fft2<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<ComplexVar> {
    let (re, im) = g.fft2(x, None)?;
    Ok(ComplexVar { re, im })
}

pub fn fft2<T: Scalar>(g: &mut Graph<T>, z: ComplexVar) -> Result<ComplexVar> {
    let (re, im) = g.fft2(z.re, Some(z.im))?;
    Ok(ComplexVar { re, im })
}

pub fn ifft2<T: Scalar>(g: &mut Graph<T>, z: ComplexVar) -> Result<ComplexVar> {
    let (re, im) = g.ifft2(z.re, z.im)?;
    Ok(ComplexVar { re, im })
}

pub fn to_polar<T: Scalar>(g: &mut Graph<T>, z: ComplexVar) -> Result<PolarVar> {
    Ok(PolarVar {
        amplitude: g.magnitude(z.re, z.im, MAGNITUDE_DELTA)?,
        phase: g.phase(z.re, z.im)?,
    })
}

/// `re = A cos P`, `im = A sin P`. The phase is not re-wrapped first.
pub fn from_polar<T: Scalar>(g: &mut Graph<T>, s: PolarVar) -> Result<ComplexVar> {
    let c = g.cos(s.phase)?;
    let sn = g.sin(s.phase)?;
    Ok(ComplexVar {
        re: g.mul(s.amplitude, c)?,
        im: g.mul(s.amplitude, sn)?,
    })
}

/// Plain (non-differentiable) complex planes, for analysis and tests.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexGrid<T: Scalar> {
    pub re: Tensor<T>,
    pub im: Tensor<T>,
}

/// Amplitude `A >= 0` and phase `P` in `(-pi, pi]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolarSpectrum<T: Scalar> {
    pub amplitude: Tensor<T>,
    pub phase: Tensor<T>,
}

impl<T: Scalar> ComplexGrid<T> {
    pub fn new(re: Tensor<T>, im: Tensor<T>) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(Error::shape(
                "complex_grid",
                format!("re {:?} vs im {:?}", re.shape(), im.shape()),
            ));
        }
        Ok(ComplexGrid { re, im })
    }

    pub fn shape(&self) -> Shape {
        self.re.shape()
    }

    /// Unnormalized forward transform of a real tensor.
    pub fn fft2(x: &Tensor<T>) -> Result<Self> {
        Self::new(x.clone(), Tensor::zeros(x.shape()))?.transform(false)
    }

    /// Inverse transform including the `1/(H*W)` factor.
    pub fn ifft2(&self) -> Result<Self> {
        self.transform(true)
    }

    pub fn fft2_complex(&self) -> Result<Self> {
        self.transform(false)
    }

    fn transform(&self, inverse: bool) -> Result<Self> {
        let s = self.shape();
        check_pow2(if inverse { "ifft2" } else { "fft2" }, s.h(), s.w())?;
        let mut re = self.re.clone();
        let mut im = self.im.clone();
        fft2_planes(re.data_mut(), im.data_mut(), s.h(), s.w(), inverse);
        if inverse {
            let k = T::of(1.0 / s.plane() as f64);
            re.data_mut().iter_mut().for_each(|v| *v = *v * k);
            im.data_mut().iter_mut().for_each(|v| *v = *v * k);
        }
        Ok(ComplexGrid { re, im })
    }

    pub fn to_polar(&self) -> PolarSpectrum<T> {
        let d2 = T::of(MAGNITUDE_DELTA * MAGNITUDE_DELTA);
        let amp = self
            .re
            .data()
            .iter()
            .zip(self.im.data())
            .map(|(&a, &b)| (a * a + b * b + d2).sqrt())
            .collect();
        let ph = self
            .re
            .data()
            .iter()
            .zip(self.im.data())
            .map(|(&a, &b)| wrapped_atan2(b, a))
            .collect();
        PolarSpectrum {
            amplitude: Tensor::from_vec(self.shape(), amp).expect("same shape"),
            phase: Tensor::from_vec(self.shape(), ph).expect("same shape"),
        }
    }
}

impl<T: Scalar> PolarSpectrum<T> {
    pub fn to_complex(&self) -> ComplexGrid<T> {
        let re = self
            .amplitude
            .data()
            .iter()
            .zip(self.phase.data())
            .map(|(&a, &p)| a * p.cos())
            .collect();
        let im = self
            .amplitude
            .data()
            .iter()
            .zip(self.phase.data())
            .map(|(&a, &p)| a * p.sin())
            .collect();
        let s = self.amplitude.shape();
        ComplexGrid {
            re: Tensor::from_vec(s, re).expect("same shape"),
            im: Tensor::from_vec(s, im).expect("same shape"),
        }
    }

    /// Phase wrapped into `(-pi, pi]` for reporting.
    pub fn wrapped_phase(&self) -> Tensor<T> {
        self.phase.map(wrap_phase)
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_phase<T: Scalar>(p: T) -> T {
    let two_pi = T::PI() + T::PI();
    let mut q = p - two_pi * ((p + T::PI()) / two_pi).floor();
    // q is in [-pi, pi); move the closed end to +pi
    if q <= -T::PI() {
        q = q + two_pi;
    }
    q
}
