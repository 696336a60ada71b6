//! Exact-length complex DFT: iterative radix-2 for powers of two, direct
//! summation otherwise.

use alloc::vec::Vec;
use core::f64::consts::PI;
use num_complex::Complex64;

pub(crate) struct Fft {
    len: usize,
    // exp(-j 2 pi k / len) for k in 0..len
    twiddles: Vec<Complex64>,
    radix2: bool,
}

impl Fft {
    pub(crate) fn new(len: usize) -> Self {
        let twiddles = (0..len)
            .map(|k| {
                let angle = -2.0 * PI * k as f64 / len as f64;
                Complex64::new(libm::cos(angle), libm::sin(angle))
            })
            .collect();
        Fft {
            len,
            twiddles,
            radix2: len.is_power_of_two(),
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.len
    }

    /// Forward transform, `X[f] = sum_n x[n] exp(-j 2 pi n f / N)`.
    pub(crate) fn forward(&self, buf: &mut [Complex64]) {
        self.transform(buf, false);
    }

    /// Unscaled inverse transform; the caller divides by `N`.
    pub(crate) fn inverse(&self, buf: &mut [Complex64]) {
        self.transform(buf, true);
    }

    fn twiddle(&self, k: usize, inverse: bool) -> Complex64 {
        let w = self.twiddles[k % self.len];
        if inverse {
            w.conj()
        } else {
            w
        }
    }

    fn transform(&self, buf: &mut [Complex64], inverse: bool) {
        debug_assert_eq!(buf.len(), self.len);
        if self.len <= 1 {
            return;
        }
        if !self.radix2 {
            let input: Vec<Complex64> = buf.to_vec();
            for (f, out) in buf.iter_mut().enumerate() {
                *out = input
                    .iter()
                    .enumerate()
                    .map(|(n, &x)| x * self.twiddle(n * f, inverse))
                    .sum();
            }
            return;
        }

        let n = self.len;
        let bits = n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if j > i {
                buf.swap(i, j);
            }
        }
        let mut size = 2;
        while size <= n {
            let half = size / 2;
            let stride = n / size;
            for start in (0..n).step_by(size) {
                for k in 0..half {
                    let w = self.twiddle(k * stride, inverse);
                    let a = buf[start + k];
                    let b = buf[start + k + half] * w;
                    buf[start + k] = a + b;
                    buf[start + k + half] = a - b;
                }
            }
            size *= 2;
        }
    }
}
