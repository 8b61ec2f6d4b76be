//! Phase rectification: a frequency-domain branch that perturbs the phase,
//! re-weights the amplitude and turns the recombined spectrum into a
//! multiplicative indication map on the encoder features.

use rand::Rng;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::spectral::polar::{from_polar, ifft2, real_fft2, to_polar, PolarVar};
use crate::tensor::{BatchNorm, Conv2d, Graph, Init, ParamStore, Var};

/// How the two-conv modulation branches start out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PrmInit {
    /// Fan-in uniform for every branch convolution.
    #[default]
    Kaiming,
    /// Every branch convolution zero: the module is the identity.
    Zero,
    /// Fan-in uniform first convolution, zero second: identity at start but
    /// every weight receives gradient after one step.
    ZeroLast,
}

impl PrmInit {
    fn split(self) -> (Init, Init) {
        match self {
            PrmInit::Kaiming => (Init::Kaiming, Init::Kaiming),
            PrmInit::Zero => (Init::Zero, Init::Zero),
            PrmInit::ZeroLast => (Init::Kaiming, Init::Zero),
        }
    }
}

/// Parameters of one phase-rectification module. The batch norm is private
/// to the module.
#[derive(Clone, Debug)]
pub struct Prm<T: Scalar> {
    pub bn: BatchNorm<T>,
    pub phase1: Conv2d,
    pub phase2: Conv2d,
    pub amp1: Conv2d,
    pub amp2: Conv2d,
}

/// Bottleneck width of the modulation branches.
pub fn hidden_width(channels: usize) -> usize {
    (channels / 2).max(4)
}

impl<T: Scalar> Prm<T> {
    pub fn new(store: &mut ParamStore<T>, prefix: &str, channels: usize, init: PrmInit, rng: &mut impl Rng) -> Self {
        let hidden = hidden_width(channels);
        let (first, second) = init.split();
        Prm {
            bn: BatchNorm::new(store, &format!("{prefix}.bn"), channels),
            phase1: Conv2d::new(store, &format!("{prefix}.phase1"), channels, hidden, 1, first, rng),
            phase2: Conv2d::new(store, &format!("{prefix}.phase2"), hidden, channels, 1, second, rng),
            amp1: Conv2d::new(store, &format!("{prefix}.amp1"), channels, hidden, 1, first, rng),
            amp2: Conv2d::new(store, &format!("{prefix}.amp2"), hidden, channels, 1, second, rng),
        }
    }

    /// `E + M ⊙ E` where `M` is the real part of the inverse transform of the
    /// modulated spectrum of `BN(E)`.
    pub fn forward(&mut self, g: &mut Graph<T>, store: &ParamStore<T>, e: Var, train: bool) -> Result<Var> {
        let normed = self.bn.forward(g, store, e, train)?;
        let spectrum = real_fft2(g, normed)?;
        let polar = to_polar(g, spectrum)?;

        let h = self.phase1.forward(g, store, polar.phase)?;
        let h = g.leaky_relu(h)?;
        let h = self.phase2.forward(g, store, h)?;
        let shift = g.tanh(h)?;
        let phase = g.add(polar.phase, shift)?;

        let a = self.amp1.forward(g, store, polar.amplitude)?;
        let a = g.leaky_relu(a)?;
        let amplitude = self.amp2.forward(g, store, a)?;

        let z = from_polar(g, PolarVar { amplitude, phase })?;
        let m = ifft2(g, z)?.re;
        let gated = g.mul(m, e)?;
        g.add(gated, e)
    }
}
