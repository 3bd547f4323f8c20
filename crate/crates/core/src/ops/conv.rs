use std::rc::Rc;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &Geometry, col: &mut [T]) {
    let cols = g.cols();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, d) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *d = if iw < 0 || iw >= g.w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &Geometry, dx: &mut [T]) {
    let cols = g.cols();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.wo {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += src[oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation over `[N, Cin, H, W]` with a `[Cout, Cin, kh, kw]`
/// kernel and per-output-channel bias. Zero padding.
pub fn conv2d<T: Real>(
    input: &Var<T>,
    weight: &Var<T>,
    bias: &Var<T>,
    stride: usize,
    padding: usize,
) -> Result<Var<T>> {
    let [n, cin, h, w] = input.dims4()?;
    let [cout, wcin, kh, kw] = weight.dims4()?;
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input has {} channels but weight {:?} expects {}",
                cin,
                weight.shape(),
                wcin
            ),
        ));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?}, expected [{}]", bias.shape(), cout),
        ));
    }
    if !matches!(kh, 1 | 3) || !matches!(kw, 1 | 3) {
        return Err(Error::invalid("conv2d", format!("kernel {}x{} not supported", kh, kw)));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::shape("conv2d", "kernel larger than padded input"));
    }
    let g = Geometry {
        cin,
        h,
        w,
        kh,
        kw,
        stride,
        pad: padding,
        ho: (h + 2 * padding - kh) / stride + 1,
        wo: (w + 2 * padding - kw) / stride + 1,
    };
    let (k, cols) = (g.k(), g.cols());
    let in_per = cin * h * w;
    let out_per = cout * cols;

    let x = input.value_rc().clone();
    let wt = weight.value_rc().clone();
    let b = bias.value().data();
    let mut out = vec![T::zero(); n * out_per];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * cols] };
    for s in 0..n {
        let xs = &x.data()[s * in_per..(s + 1) * in_per];
        let col_ref: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut col);
            &col
        };
        let os = &mut out[s * out_per..(s + 1) * out_per];
        for (co, row) in os.chunks_mut(cols).enumerate() {
            row.fill(b[co]);
        }
        T::gemm(
            cout,
            k,
            cols,
            T::one(),
            wt.data(),
            k as isize,
            1,
            col_ref,
            cols as isize,
            1,
            T::one(),
            os,
            cols as isize,
            1,
        );
    }
    let out = Tensor::new(&[n, cout, g.ho, g.wo], out)?;
    Var::from_op("conv2d", out, &[input, weight, bias], move |grad, needs| {
        conv2d_backward(grad, needs, &x, &wt, &g, n, cout)
    })
}

fn conv2d_backward<T: Real>(
    grad: &Tensor<T>,
    needs: &[bool],
    x: &Rc<Tensor<T>>,
    wt: &Rc<Tensor<T>>,
    g: &Geometry,
    n: usize,
    cout: usize,
) -> Vec<Option<Tensor<T>>> {
    let (k, cols) = (g.k(), g.cols());
    let in_per = g.cin * g.h * g.w;
    let out_per = cout * cols;
    let gd = grad.data();

    let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
    let mut dw = needs[1].then(|| Tensor::zeros(wt.shape()));
    let db = needs[2].then(|| {
        let mut acc = vec![0.0f64; cout];
        for s in 0..n {
            for (co, a) in acc.iter_mut().enumerate() {
                let start = s * out_per + co * cols;
                *a += gd[start..start + cols].iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
        Tensor::new(&[cout], acc.into_iter().map(T::lit).collect()).expect("shape")
    });

    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * cols] };
    let mut dcol = if dx.is_some() && !g.is_pointwise() {
        vec![T::zero(); k * cols]
    } else {
        Vec::new()
    };
    for s in 0..n {
        let gs = &gd[s * out_per..(s + 1) * out_per];
        if let Some(dw) = dw.as_mut() {
            let xs = &x.data()[s * in_per..(s + 1) * in_per];
            let col_ref: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, g, &mut col);
                &col
            };
            // dW += dOut · colᵀ
            T::gemm(
                cout,
                cols,
                k,
                T::one(),
                gs,
                cols as isize,
                1,
                col_ref,
                1,
                cols as isize,
                T::one(),
                dw.data_mut(),
                k as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[s * in_per..(s + 1) * in_per];
            // dcol = Wᵀ · dOut
            let target: &mut [T] = if g.is_pointwise() { dxs } else { &mut dcol };
            T::gemm(
                k,
                cout,
                cols,
                T::one(),
                wt.data(),
                1,
                k as isize,
                gs,
                cols as isize,
                1,
                T::zero(),
                target,
                cols as isize,
                1,
            );
            if !g.is_pointwise() {
                col2im(&dcol, g, dxs);
            }
        }
    }
    vec![dx, dw, db]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let [n, cin, h, wd] = x.dims4().unwrap();
        let [cout, _, kh, kw] = w.dims4().unwrap();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        for s in 0..n {
            for co in 0..cout {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let ih = (oh * stride + i) as isize - pad as isize;
                                    let iw = (ow * stride + j) as isize - pad as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((s * cin + ci) * h + ih as usize) * wd + iw as usize]
                                        * w.data()[((co * cin + ci) * kh + i) * kw + j];
                                }
                            }
                        }
                        out.data_mut()[((s * cout + co) * ho + oh) * wo + ow] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let x = Tensor::<f32>::from_fn(&[1, 1, 3, 3], |i| i as f32 * 0.1);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let y = conv2d(&Var::constant(x.clone()), &Var::constant(k), &Var::constant(Tensor::zeros(&[1])), 1, 1).unwrap();
        assert_eq!(y.value(), &x);
    }

    #[test]
    fn pointwise_ones_sums_channels() {
        let x = Var::constant(Tensor::<f32>::full(&[1, 2, 2, 2], 1.0));
        let k = Var::constant(Tensor::full(&[1, 2, 1, 1], 1.0));
        let y = conv2d(&x, &k, &Var::constant(Tensor::zeros(&[1])), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.value().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
            let x = Tensor::<f64>::randn(&[1, 2, 5, 5], 1.0, &mut rng);
            let w = Tensor::<f64>::randn(&[3, 2, k, k], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(&[3], 1.0, &mut rng);
            let want = naive_conv(&x, &w, &b, stride, pad);
            let got = conv2d(
                &Var::constant(x.cast::<f32>()),
                &Var::constant(w.cast::<f32>()),
                &Var::constant(b.cast::<f32>()),
                stride,
                pad,
            )
            .unwrap();
            assert_eq!(got.shape(), want.shape());
            assert!(got.value().cast::<f64>().max_abs_diff(&want) <= 1e-5);
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = Var::constant(Tensor::<f32>::zeros(&[1, 2, 4, 4]));
        let w = Var::constant(Tensor::zeros(&[1, 3, 3, 3]));
        let err = conv2d(&x, &w, &Var::constant(Tensor::zeros(&[1])), 1, 1).unwrap_err();
        assert!(err.to_string().contains("expects 3"));
    }

    #[test]
    fn strided_output_size() {
        let x = Var::constant(Tensor::<f32>::zeros(&[2, 1, 8, 8]));
        let w = Var::constant(Tensor::zeros(&[4, 1, 3, 3]));
        let y = conv2d(&x, &w, &Var::constant(Tensor::zeros(&[4])), 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 4]);
    }

    #[test]
    fn linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::<f32>::randn(&[1, 2, 6, 6], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[1, 2, 6, 6], 1.0, &mut rng);
        let w = Var::constant(Tensor::<f32>::randn(&[3, 2, 3, 3], 0.5, &mut rng));
        let zb = Var::constant(Tensor::zeros(&[3]));
        let (sa, sb) = (0.7f32, -1.3f32);
        let mix = a.zip_map(&b, |x, y| sa * x + sb * y).unwrap();
        let lhs = conv2d(&Var::constant(mix), &w, &zb, 1, 1).unwrap();
        let ca = conv2d(&Var::constant(a), &w, &zb, 1, 1).unwrap();
        let cb = conv2d(&Var::constant(b), &w, &zb, 1, 1).unwrap();
        let rhs = ca.value().zip_map(cb.value(), |x, y| sa * x + sb * y).unwrap();
        assert!(lhs.value().max_abs_diff(&rhs) <= 1e-5);
    }
}
