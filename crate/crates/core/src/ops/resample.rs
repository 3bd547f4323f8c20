use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResampleMode {
    DownHalfBilinear,
    UpDoubleBilinear,
}

/// One output sample of a 1-D linear interpolation: `w0·x[i0] + w1·x[i1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

/// Half-pixel-centred (align-corners false) taps, source coordinates clamped
/// at the borders.
pub fn bilinear_weights(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            Tap {
                i0,
                i1,
                w0: 1.0 - frac,
                w1: frac,
            }
        })
        .collect()
}

struct Taps<T> {
    rows: Vec<(usize, usize, T, T)>,
    cols: Vec<(usize, usize, T, T)>,
}

fn cast_taps<T: Real>(t: Vec<Tap>) -> Vec<(usize, usize, T, T)> {
    t.into_iter()
        .map(|t| (t.i0, t.i1, T::lit(t.w0), T::lit(t.w1)))
        .collect()
}

fn apply<T: Real>(x: &[T], planes: usize, h: usize, w: usize, taps: &Taps<T>) -> Vec<T> {
    let (ho, wo) = (taps.rows.len(), taps.cols.len());
    let mut tmp = vec![T::zero(); h * wo];
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for (j, &(a, b, wa, wb)) in taps.cols.iter().enumerate() {
                tmp[i * wo + j] = wa * src[i * w + a] + wb * src[i * w + b];
            }
        }
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (i, &(a, b, wa, wb)) in taps.rows.iter().enumerate() {
            for j in 0..wo {
                dst[i * wo + j] = wa * tmp[a * wo + j] + wb * tmp[b * wo + j];
            }
        }
    }
    out
}

fn apply_transpose<T: Real>(g: &[T], planes: usize, h: usize, w: usize, taps: &Taps<T>) -> Vec<T> {
    let (ho, wo) = (taps.rows.len(), taps.cols.len());
    let mut tmp = vec![T::zero(); h * wo];
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        tmp.fill(T::zero());
        let gp = &g[p * ho * wo..(p + 1) * ho * wo];
        for (i, &(a, b, wa, wb)) in taps.rows.iter().enumerate() {
            for j in 0..wo {
                let v = gp[i * wo + j];
                tmp[a * wo + j] += wa * v;
                tmp[b * wo + j] += wb * v;
            }
        }
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for (j, &(a, b, wa, wb)) in taps.cols.iter().enumerate() {
                let v = tmp[i * wo + j];
                dst[i * w + a] += wa * v;
                dst[i * w + b] += wb * v;
            }
        }
    }
    dx
}

/// Bilinear ×½ or ×2 rescaling of `[N, C, H, W]`.
pub fn resample<T: Real>(x: &Var<T>, mode: ResampleMode) -> Result<Var<T>> {
    let [n, c, h, w] = x.dims4()?;
    let (ho, wo) = match mode {
        ResampleMode::DownHalfBilinear => {
            if h < 2 || w < 2 {
                return Err(Error::shape("resample", format!("{}x{} too small to halve", h, w)));
            }
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::shape("resample", format!("{}x{} not even", h, w)));
            }
            (h / 2, w / 2)
        }
        ResampleMode::UpDoubleBilinear => {
            if h == 0 || w == 0 {
                return Err(Error::shape("resample", "empty spatial extent"));
            }
            (h * 2, w * 2)
        }
    };
    let taps = Taps {
        rows: cast_taps(bilinear_weights(h, ho)),
        cols: cast_taps(bilinear_weights(w, wo)),
    };
    let planes = n * c;
    let out = apply(x.value().data(), planes, h, w, &taps);
    let out = Tensor::new(&[n, c, ho, wo], out)?;
    Var::from_op("resample", out, &[x], move |g, _| {
        let dx = apply_transpose(g.data(), planes, h, w, &taps);
        vec![Some(Tensor::new(&[n, c, h, w], dx).expect("shape"))]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct evaluation of the half-pixel bilinear formula, one output
    /// pixel at a time.
    fn oracle(x: &[f64], h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
        let coord = |o: usize, inl: usize, outl: usize| -> (usize, usize, f64) {
            let s = (o as f64 + 0.5) * inl as f64 / outl as f64 - 0.5;
            let s = s.clamp(0.0, (inl - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(inl - 1);
            (lo, hi, s - lo as f64)
        };
        let mut out = vec![0.0; ho * wo];
        for i in 0..ho {
            let (r0, r1, fr) = coord(i, h, ho);
            for j in 0..wo {
                let (c0, c1, fc) = coord(j, w, wo);
                let top = x[r0 * w + c0] * (1.0 - fc) + x[r0 * w + c1] * fc;
                let bot = x[r1 * w + c0] * (1.0 - fc) + x[r1 * w + c1] * fc;
                out[i * wo + j] = top * (1.0 - fr) + bot * fr;
            }
        }
        out
    }

    #[test]
    fn constant_stays_constant() {
        let x = Var::constant(Tensor::<f32>::full(&[1, 2, 4, 4], 0.4));
        for m in [ResampleMode::DownHalfBilinear, ResampleMode::UpDoubleBilinear] {
            let y = resample(&x, m).unwrap();
            assert!(y.value().data().iter().all(|&v| (v - 0.4).abs() < 1e-7));
        }
    }

    #[test]
    fn single_pixel_upsamples_to_block() {
        let x = Var::constant(Tensor::<f32>::full(&[1, 1, 1, 1], 0.7));
        let y = resample(&x, ResampleMode::UpDoubleBilinear).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.value().data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn down_rejects_tiny() {
        let x = Var::constant(Tensor::<f32>::zeros(&[1, 1, 1, 4]));
        assert!(resample(&x, ResampleMode::DownHalfBilinear).is_err());
    }

    #[test]
    fn ramp_down_up_matches_oracle() {
        let ramp: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
        let x = Tensor::<f64>::new(&[1, 1, 4, 4], ramp.clone()).unwrap();
        let down = resample(&Var::constant(x), ResampleMode::DownHalfBilinear).unwrap();
        let down_oracle = oracle(&ramp, 4, 4, 2, 2);
        assert!(down.value().data().iter().zip(&down_oracle).all(|(a, b)| (a - b).abs() < 1e-12));
        let up = resample(&down, ResampleMode::UpDoubleBilinear).unwrap();
        let up_oracle = oracle(&down_oracle, 2, 2, 4, 4);
        assert!(up.value().data().iter().zip(&up_oracle).all(|(a, b)| (a - b).abs() < 1e-12));
        let dev = up.value().data().iter().zip(&ramp).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        // corners of the ramp lose the most: 0 vs mean of the first 2x2 block
        let expected = ramp.iter().zip(&up_oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!((dev - expected).abs() < 1e-12);
        assert!(dev > 0.0 && dev < 0.2, "low-pass deviation {}", dev);
    }

    #[test]
    fn halving_is_block_average() {
        let taps = bilinear_weights(8, 4);
        for (o, t) in taps.iter().enumerate() {
            assert_eq!((t.i0, t.i1), (2 * o, 2 * o + 1));
            assert!((t.w0 - 0.5).abs() < 1e-15 && (t.w1 - 0.5).abs() < 1e-15);
        }
    }
}
