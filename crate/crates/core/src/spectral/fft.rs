//! Radix-2 Cooley–Tukey transforms on split real/imaginary planes.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) fn check_pow2(op: &'static str, h: usize, w: usize) -> Result<()> {
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::shape(
            op,
            format!("spatial size {h}x{w} must be powers of two"),
        ));
    }
    Ok(())
}

/// Precomputed bit-reversal permutation and twiddles for one length.
pub(crate) struct Plan<T> {
    n: usize,
    rev: Vec<usize>,
    // e^{-2πik/n} for k < n/2
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> Plan<T> {
    pub fn new(n: usize) -> Self {
        assert!(n.is_power_of_two(), "fft length {n} is not a power of two");
        let bits = n.trailing_zeros();
        let rev = (0..n)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        let half = n / 2;
        let cos = (0..half)
            .map(|k| T::of((2.0 * std::f64::consts::PI * k as f64 / n as f64).cos()))
            .collect();
        let sin = (0..half)
            .map(|k| T::of(-(2.0 * std::f64::consts::PI * k as f64 / n as f64).sin()))
            .collect();
        Plan { n, rev, cos, sin }
    }

    /// Unnormalized in-place transform; `inverse` conjugates the twiddles.
    #[cfg(test)]
    pub fn run(&self, re: &mut [T], im: &mut [T], inverse: bool) {
        let n = self.n;
        debug_assert!(re.len() == n && im.len() == n);
        for i in 0..n {
            let j = self.rev[i];
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            for start in (0..n).step_by(len) {
                // k = 0 uses the exact unit twiddle so purely real inputs keep
                // exactly real DC and Nyquist bins.
                let (a, b) = (start, start + half);
                let (tr, ti) = (re[b], im[b]);
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] = re[a] + tr;
                im[a] = im[a] + ti;
                for k in 1..half {
                    let wr = self.cos[k * step];
                    let wi = if inverse { -self.sin[k * step] } else { self.sin[k * step] };
                    let (a, b) = (start + k, start + k + half);
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] = re[a] + tr;
                    im[a] = im[a] + ti;
                }
            }
            len *= 2;
        }
    }
}

/// In-place 1-D transforms down the columns of a row-major `rows x width`
/// block: butterflies combine whole rows, so the inner loop runs over
/// contiguous memory.
fn fft_columns<T: Scalar>(plan: &Plan<T>, re: &mut [T], im: &mut [T], width: usize, inverse: bool) {
    let n = plan.n;
    for i in 0..n {
        let j = plan.rev[i];
        if j > i {
            let (lo, hi) = re.split_at_mut(j * width);
            lo[i * width..(i + 1) * width].swap_with_slice(&mut hi[..width]);
            let (lo, hi) = im.split_at_mut(j * width);
            lo[i * width..(i + 1) * width].swap_with_slice(&mut hi[..width]);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let (wr, wi) = if k == 0 {
                    (T::one(), T::zero())
                } else {
                    let s = plan.sin[k * step];
                    (plan.cos[k * step], if inverse { -s } else { s })
                };
                let (a, b) = ((start + k) * width, (start + k + half) * width);
                let (ra, rb) = re.split_at_mut(b);
                let (ia, ib) = im.split_at_mut(b);
                let (ra, rb) = (&mut ra[a..a + width], &mut rb[..width]);
                let (ia, ib) = (&mut ia[a..a + width], &mut ib[..width]);
                if k == 0 {
                    // exact unit twiddle keeps real inputs' DC and Nyquist bins exactly real
                    for x in 0..width {
                        let (tr, ti) = (rb[x], ib[x]);
                        rb[x] = ra[x] - tr;
                        ib[x] = ia[x] - ti;
                        ra[x] = ra[x] + tr;
                        ia[x] = ia[x] + ti;
                    }
                } else {
                    for x in 0..width {
                        let tr = rb[x] * wr - ib[x] * wi;
                        let ti = rb[x] * wi + ib[x] * wr;
                        rb[x] = ra[x] - tr;
                        ib[x] = ia[x] - ti;
                        ra[x] = ra[x] + tr;
                        ia[x] = ia[x] + ti;
                    }
                }
            }
        }
        len *= 2;
    }
}

fn transpose<T: Copy>(src: &[T], dst: &mut [T], h: usize, w: usize) {
    for y in 0..h {
        for x in 0..w {
            dst[x * h + y] = src[y * w + x];
        }
    }
}

/// 2-D transform of every `h x w` plane in `re`/`im`: columns in place,
/// then rows via a transpose. Unnormalized in both directions; callers
/// apply `1/(h*w)` for the inverse.
pub(crate) fn fft2_planes<T: Scalar>(re: &mut [T], im: &mut [T], h: usize, w: usize, inverse: bool) {
    let row_plan = Plan::<T>::new(w);
    let col_plan = Plan::<T>::new(h);
    let mut tr = vec![T::zero(); h * w];
    let mut ti = vec![T::zero(); h * w];
    for (pr, pi) in re.chunks_exact_mut(h * w).zip(im.chunks_exact_mut(h * w)) {
        fft_columns(&col_plan, pr, pi, w, inverse);
        transpose(pr, &mut tr, h, w);
        transpose(pi, &mut ti, h, w);
        fft_columns(&row_plan, &mut tr, &mut ti, h, inverse);
        transpose(&tr, pr, w, h);
        transpose(&ti, pi, w, h);
    }
}
