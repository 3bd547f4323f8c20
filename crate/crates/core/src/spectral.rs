//! Two-dimensional real FFT (radix-2, decimation in time).
//!
//! Conventions: the forward transform is unnormalized, the inverse carries
//! the `1/(H·W)` factor. Real spectra keep `⌊W/2⌋+1` columns along width.

use num_complex::Complex;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Half-width spectrum of a batch of real planes.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum<T> {
    /// `[N, C, H, Wf]`
    pub shape: [usize; 4],
    pub re: Vec<T>,
    pub im: Vec<T>,
    pub original_width: usize,
}

impl<T: Real> Spectrum<T> {
    pub fn half_width(width: usize) -> usize {
        width / 2 + 1
    }

    pub fn zeros(n: usize, c: usize, h: usize, width: usize) -> Self {
        let wf = Self::half_width(width);
        let len = n * c * h * wf;
        Self {
            shape: [n, c, h, wf],
            re: vec![T::zero(); len],
            im: vec![T::zero(); len],
            original_width: width,
        }
    }

    pub fn bin(&self, n: usize, c: usize, kh: usize, kw: usize) -> Complex<T> {
        let [_, cc, hh, wf] = self.shape;
        let i = ((n * cc + c) * hh + kh) * wf + kw;
        Complex::new(self.re[i], self.im[i])
    }
}

fn bit_reverse<T: Copy>(buf: &mut [T]) {
    let n = buf.len();
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }
}

/// Twiddle table `e^{∓2πik/n}` for `k < n/2`.
fn twiddles<T: Real>(n: usize, inverse: bool) -> Vec<Complex<T>> {
    let sign = if inverse { 1.0 } else { -1.0 };
    (0..n / 2)
        .map(|k| {
            let a = sign * 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            Complex::new(T::lit(a.cos()), T::lit(a.sin()))
        })
        .collect()
}

/// In-place unnormalized complex FFT of a power-of-two length.
fn fft_with<T: Real>(buf: &mut [Complex<T>], tw: &[Complex<T>]) {
    let n = buf.len();
    bit_reverse(buf);
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let w = tw[k * step];
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

/// Unnormalized 2-D transform of an `h × w` row-major complex plane.
pub(crate) fn fft2d_inplace<T: Real>(plane: &mut [Complex<T>], h: usize, w: usize, inverse: bool) {
    let tw_w = twiddles(w, inverse);
    for row in plane.chunks_mut(w) {
        fft_with(row, &tw_w);
    }
    let tw_h = twiddles(h, inverse);
    let mut column = vec![Complex::new(T::zero(), T::zero()); h];
    for j in 0..w {
        for i in 0..h {
            column[i] = plane[i * w + j];
        }
        fft_with(&mut column, &tw_h);
        for i in 0..h {
            plane[i * w + j] = column[i];
        }
    }
}

fn check_pow2(op: &'static str, h: usize, w: usize) -> Result<()> {
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::invalid(
            op,
            format!("spatial dims {}x{} must be powers of two", h, w),
        ));
    }
    Ok(())
}

/// Forward real FFT over the last two axes of `[N, C, H, W]`.
pub fn rfft2d<T: Real>(x: &Tensor<T>) -> Result<Spectrum<T>> {
    let [n, c, h, w] = x.dims4()?;
    check_pow2("rfft2d", h, w)?;
    let mut s = Spectrum::zeros(n, c, h, w);
    let wf = s.shape[3];
    let mut plane = vec![Complex::new(T::zero(), T::zero()); h * w];
    for (p, src) in x.data().chunks(h * w).enumerate() {
        for (d, &v) in plane.iter_mut().zip(src) {
            *d = Complex::new(v, T::zero());
        }
        fft2d_inplace(&mut plane, h, w, false);
        for i in 0..h {
            for j in 0..wf {
                let o = (p * h + i) * wf + j;
                s.re[o] = plane[i * w + j].re;
                s.im[o] = plane[i * w + j].im;
            }
        }
    }
    Ok(s)
}

/// Hermitian multiplicity of half-spectrum column `kw`.
fn column_weight(kw: usize, width: usize) -> f64 {
    if kw == 0 || (width.is_multiple_of(2) && kw == width / 2) {
        1.0
    } else {
        2.0
    }
}

/// `Re(Σ_k scale_k · Z_k · e^{+iθ})` over the half spectrum, per plane.
/// With `scale_k = c_k/(H·W)` this is the inverse real transform; with
/// `scale_k = 1` it is the adjoint of [`rfft2d`].
fn synthesize_half<T: Real>(
    re: &[T],
    im: &[T],
    planes: usize,
    h: usize,
    width: usize,
    scale: impl Fn(usize) -> T,
) -> Vec<T> {
    let wf = Spectrum::<T>::half_width(width);
    let mut out = vec![T::zero(); planes * h * width];
    let mut plane = vec![Complex::new(T::zero(), T::zero()); h * width];
    for p in 0..planes {
        plane.fill(Complex::new(T::zero(), T::zero()));
        for i in 0..h {
            for j in 0..wf {
                let s = scale(j);
                let o = (p * h + i) * wf + j;
                plane[i * width + j] = Complex::new(re[o] * s, im[o] * s);
            }
        }
        fft2d_inplace(&mut plane, h, width, true);
        for (d, v) in out[p * h * width..(p + 1) * h * width].iter_mut().zip(&plane) {
            *d = v.re;
        }
    }
    out
}

/// Inverse real FFT. Columns `0` and `W/2` contribute only their real
/// response, matching the usual C2R convention, so any spectrum maps to a
/// real image and Hermitian-consistent spectra round-trip exactly.
pub fn irfft2d<T: Real>(s: &Spectrum<T>, width: usize) -> Result<Tensor<T>> {
    let [n, c, h, wf] = s.shape;
    if width != s.original_width || Spectrum::<T>::half_width(width) != wf {
        return Err(Error::shape(
            "irfft2d",
            format!(
                "width {} inconsistent with spectrum of {} columns (original width {})",
                width, wf, s.original_width
            ),
        ));
    }
    check_pow2("irfft2d", h, width)?;
    let norm = 1.0 / (h * width) as f64;
    let out = synthesize_half(&s.re, &s.im, n * c, h, width, |j| {
        T::lit(column_weight(j, width) * norm)
    });
    Tensor::new(&[n, c, h, width], out)
}

/// Full `H × W` DFT by the direct double sum, in double precision. Test
/// reference only.
pub fn dft2d_naive<T: Real>(x: &Tensor<T>) -> Result<Vec<Complex<f64>>> {
    let (h, w) = match x.shape() {
        &[h, w] => (h, w),
        s => return Err(Error::shape("dft2d_naive", format!("expected 2-D, got {:?}", s))),
    };
    if h > 16 || w > 16 {
        return Err(Error::invalid("dft2d_naive", format!("{}x{} exceeds 16x16 cap", h, w)));
    }
    let tau = 2.0 * std::f64::consts::PI;
    let mut out = vec![Complex::new(0.0, 0.0); h * w];
    for kh in 0..h {
        for kw in 0..w {
            let mut acc = Complex::new(0.0, 0.0);
            for i in 0..h {
                for j in 0..w {
                    let theta = -tau * ((kh * i) as f64 / h as f64 + (kw * j) as f64 / w as f64);
                    acc += Complex::from_polar(x.data()[i * w + j].as_f64(), theta);
                }
            }
            out[kh * w + kw] = acc;
        }
    }
    Ok(out)
}

/// Differentiable forward transform with real and imaginary parts stacked
/// along channels: `[N, C, H, W] → [N, 2C, H, ⌊W/2⌋+1]`, reals first.
pub fn rfft2d_stacked<T: Real>(x: &Var<T>) -> Result<Var<T>> {
    let [n, c, h, w] = x.dims4()?;
    let s = rfft2d(x.value())?;
    let wf = s.shape[3];
    let out = Tensor::new(&[n, 2 * c, h, wf], stack(&s.re, &s.im, n, c * h * wf))?;
    Var::from_op("rfft2d", out, &[x], move |g, _| {
        let (gr, gi) = unstack(g.data(), n, c * h * wf);
        let dx = synthesize_half(&gr, &gi, n * c, h, w, |_| T::one());
        vec![Some(Tensor::new(&[n, c, h, w], dx).expect("shape"))]
    })
}

/// Inverse of [`rfft2d_stacked`]: `[N, 2C, H, Wf] → [N, C, H, width]`.
pub fn irfft2d_stacked<T: Real>(z: &Var<T>, width: usize) -> Result<Var<T>> {
    let [n, c2, h, wf] = z.dims4()?;
    if c2 % 2 != 0 {
        return Err(Error::shape("irfft2d", format!("{} stacked channels is odd", c2)));
    }
    let c = c2 / 2;
    let (re, im) = unstack(z.value().data(), n, c * h * wf);
    let spec = Spectrum {
        shape: [n, c, h, wf],
        re,
        im,
        original_width: width,
    };
    let out = irfft2d(&spec, width)?;
    Var::from_op("irfft2d", out, &[z], move |g, _| {
        let gs = rfft2d(g).expect("validated in forward");
        let norm = 1.0 / (h * width) as f64;
        let mut re = gs.re;
        let mut im = gs.im;
        for (i, (r, m)) in re.iter_mut().zip(im.iter_mut()).enumerate() {
            let s = T::lit(column_weight(i % wf, width) * norm);
            *r *= s;
            *m *= s;
        }
        let dz = stack(&re, &im, n, c * h * wf);
        vec![Some(Tensor::new(&[n, c2, h, wf], dz).expect("shape"))]
    })
}

fn stack<T: Real>(re: &[T], im: &[T], n: usize, per: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(2 * n * per);
    for b in 0..n {
        out.extend_from_slice(&re[b * per..(b + 1) * per]);
        out.extend_from_slice(&im[b * per..(b + 1) * per]);
    }
    out
}

fn unstack<T: Real>(d: &[T], n: usize, per: usize) -> (Vec<T>, Vec<T>) {
    let mut re = Vec::with_capacity(n * per);
    let mut im = Vec::with_capacity(n * per);
    for b in 0..n {
        re.extend_from_slice(&d[2 * b * per..(2 * b + 1) * per]);
        im.extend_from_slice(&d[(2 * b + 1) * per..(2 * b + 2) * per]);
    }
    (re, im)
}
