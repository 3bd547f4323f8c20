use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    /// Mean over H×W → `[N, C, 1, 1]`.
    AvgGlobal,
    /// Max over H×W → `[N, C, 1, 1]`. Ties go to the first index.
    MaxGlobal,
    /// Non-overlapping 2×2 means.
    Avg2x,
}

pub fn pool<T: Real>(kind: PoolKind, x: &Var<T>) -> Result<Var<T>> {
    let [n, c, h, w] = x.dims4()?;
    let plane = h * w;
    if plane == 0 {
        return Err(Error::shape("pool", "empty spatial extent"));
    }
    let xd = x.value().data();
    match kind {
        PoolKind::AvgGlobal => {
            let out: Vec<T> = xd
                .chunks(plane)
                .map(|p| T::lit(p.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64))
                .collect();
            let out = Tensor::new(&[n, c, 1, 1], out)?;
            Var::from_op("avg_pool_global", out, &[x], move |g, _| {
                let inv = T::lit(1.0 / plane as f64);
                let mut dx = Vec::with_capacity(n * c * plane);
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv * inv, plane));
                }
                vec![Some(Tensor::new(&[n, c, h, w], dx).expect("shape"))]
            })
        }
        PoolKind::MaxGlobal => {
            let mut arg = Vec::with_capacity(n * c);
            let mut out = Vec::with_capacity(n * c);
            for p in xd.chunks(plane) {
                let mut best = 0;
                for (i, v) in p.iter().enumerate() {
                    if *v > p[best] {
                        best = i;
                    }
                }
                arg.push(best);
                out.push(p[best]);
            }
            let out = Tensor::new(&[n, c, 1, 1], out)?;
            Var::from_op("max_pool_global", out, &[x], move |g, _| {
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                let dd = dx.data_mut();
                for (i, (&gv, &a)) in g.data().iter().zip(&arg).enumerate() {
                    dd[i * plane + a] = gv;
                }
                vec![Some(dx)]
            })
        }
        PoolKind::Avg2x => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::shape(
                    "avg_pool_2x",
                    format!("spatial dims {}x{} must be even", h, w),
                ));
            }
            let (ho, wo) = (h / 2, w / 2);
            let quarter = T::lit(0.25);
            let mut out = vec![T::zero(); n * c * ho * wo];
            for (pi, p) in xd.chunks(plane).enumerate() {
                let o = &mut out[pi * ho * wo..(pi + 1) * ho * wo];
                for i in 0..ho {
                    for j in 0..wo {
                        let a = p[2 * i * w + 2 * j];
                        let b = p[2 * i * w + 2 * j + 1];
                        let cc = p[(2 * i + 1) * w + 2 * j];
                        let d = p[(2 * i + 1) * w + 2 * j + 1];
                        o[i * wo + j] = (a + b + cc + d) * quarter;
                    }
                }
            }
            let out = Tensor::new(&[n, c, ho, wo], out)?;
            Var::from_op("avg_pool_2x", out, &[x], move |g, _| {
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                let dd = dx.data_mut();
                for (pi, gp) in g.data().chunks(ho * wo).enumerate() {
                    let base = pi * plane;
                    for i in 0..ho {
                        for j in 0..wo {
                            let v = gp[i * wo + j] * quarter;
                            dd[base + 2 * i * w + 2 * j] = v;
                            dd[base + 2 * i * w + 2 * j + 1] = v;
                            dd[base + (2 * i + 1) * w + 2 * j] = v;
                            dd[base + (2 * i + 1) * w + 2 * j + 1] = v;
                        }
                    }
                }
                vec![Some(dx)]
            })
        }
    }
}
