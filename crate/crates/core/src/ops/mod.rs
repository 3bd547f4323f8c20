//! Differentiable operations on [`Var`].

mod conv;
mod pool;
mod resample;

pub use conv::conv2d;
pub use pool::{pool, PoolKind};
pub use resample::{bilinear_weights, resample, ResampleMode};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Sigmoid,
}

pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// ELU with `alpha = 1`.
pub fn elu_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        x
    } else {
        x.exp_m1()
    }
}

pub fn activation<T: Real>(kind: Activation, x: &Var<T>) -> Result<Var<T>> {
    if !x.value().all_finite() {
        return Err(Error::NonFinite { op: "activation" });
    }
    match kind {
        Activation::Elu => elu(x),
        Activation::Sigmoid => sigmoid(x),
    }
}

pub fn elu<T: Real>(x: &Var<T>) -> Result<Var<T>> {
    let out = x.value().map(elu_scalar);
    let saved = x.value_rc().clone();
    Var::from_op("elu", out, &[x], move |g, _| {
        let dx = g
            .zip_map(&saved, |g, x| if x >= T::zero() { g } else { g * x.exp() })
            .expect("shape");
        vec![Some(dx)]
    })
}

pub fn sigmoid<T: Real>(x: &Var<T>) -> Result<Var<T>> {
    let out = x.value().map(sigmoid_scalar);
    let y = out.clone();
    Var::from_op("sigmoid", out, &[x], move |g, _| {
        let dx = g
            .zip_map(&y, |g, y| g * y * (T::one() - y))
            .expect("shape");
        vec![Some(dx)]
    })
}

pub fn abs<T: Real>(x: &Var<T>) -> Result<Var<T>> {
    let out = x.value().map(|v| v.abs());
    let saved = x.value_rc().clone();
    Var::from_op("abs", out, &[x], move |g, _| {
        let dx = g
            .zip_map(&saved, |g, x| {
                if x > T::zero() {
                    g
                } else if x < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            })
            .expect("shape");
        vec![Some(dx)]
    })
}

pub fn scale<T: Real>(x: &Var<T>, s: T) -> Result<Var<T>> {
    let out = x.value().map(|v| v * s);
    Var::from_op("scale", out, &[x], move |g, _| vec![Some(g.map(|v| v * s))])
}

/// Mean over every element, accumulated in double precision.
pub fn mean<T: Real>(x: &Var<T>) -> Result<Var<T>> {
    let n = x.value().len();
    if n == 0 {
        return Err(Error::invalid("mean", "empty tensor"));
    }
    let m = x.value().sum_f64() / n as f64;
    let shape = x.shape().to_vec();
    Var::from_op("mean", Tensor::scalar(T::lit(m)), &[x], move |g, _| {
        let gv = g.data()[0] / T::lit(n as f64);
        vec![Some(Tensor::full(&shape, gv))]
    })
}

pub fn sum<T: Real>(x: &Var<T>) -> Result<Var<T>> {
    let s = x.value().sum_f64();
    let shape = x.shape().to_vec();
    Var::from_op("sum", Tensor::scalar(T::lit(s)), &[x], move |g, _| {
        vec![Some(Tensor::full(&shape, g.data()[0]))]
    })
}

/// Weighted sum `Σ w·x` with a constant weight tensor; used to project a
/// block output onto a scalar for gradient checks.
pub fn dot_const<T: Real>(x: &Var<T>, w: &Tensor<T>) -> Result<Var<T>> {
    if x.shape() != w.shape() {
        return Err(Error::shape(
            "dot_const",
            format!("{:?} vs {:?}", x.shape(), w.shape()),
        ));
    }
    let s: f64 = x
        .value()
        .data()
        .iter()
        .zip(w.data())
        .map(|(a, b)| a.as_f64() * b.as_f64())
        .sum();
    let w = w.clone();
    Var::from_op("dot_const", Tensor::scalar(T::lit(s)), &[x], move |g, _| {
        let gv = g.data()[0];
        vec![Some(w.map(|v| v * gv))]
    })
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<[usize; 4]> {
    if a.len() != 4 || b.len() != 4 {
        return Err(Error::shape(op, format!("broadcast needs 4-D, got {:?} and {:?}", a, b)));
    }
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = match (a[i], b[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, format!("{:?} vs {:?}", a, b))),
        };
    }
    Ok(out)
}

fn strides_for(shape: &[usize]) -> [usize; 4] {
    let full = [
        shape[1] * shape[2] * shape[3],
        shape[2] * shape[3],
        shape[3],
        1,
    ];
    let mut s = [0; 4];
    for i in 0..4 {
        s[i] = if shape[i] == 1 { 0 } else { full[i] };
    }
    s
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn for_each_broadcast(out: [usize; 4], sa: [usize; 4], sb: [usize; 4], mut f: impl FnMut(usize, usize, usize)) {
    let mut o = 0;
    for n in 0..out[0] {
        for c in 0..out[1] {
            for h in 0..out[2] {
                let ia = n * sa[0] + c * sa[1] + h * sa[2];
                let ib = n * sb[0] + c * sb[1] + h * sb[2];
                for w in 0..out[3] {
                    f(o, ia + w * sa[3], ib + w * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

fn binary<T: Real>(op: Binary, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let name = match op {
        Binary::Add => "add",
        Binary::Sub => "sub",
        Binary::Mul => "mul",
    };
    if a.shape() == b.shape() {
        let out = a.value().zip_map(b.value(), |x, y| match op {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        })?;
        let (sa, sb) = (a.value_rc().clone(), b.value_rc().clone());
        return Var::from_op(name, out, &[a, b], move |g, needs| match op {
            Binary::Add => vec![Some(g.clone()), Some(g.clone())],
            Binary::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
            Binary::Mul => vec![
                needs[0].then(|| g.zip_map(&sb, |g, y| g * y).expect("shape")),
                needs[1].then(|| g.zip_map(&sa, |g, x| g * x).expect("shape")),
            ],
        });
    }
    let out_shape = broadcast_shape(name, a.shape(), b.shape())?;
    let (sa, sb) = (strides_for(a.shape()), strides_for(b.shape()));
    let mut out = Tensor::zeros(&out_shape);
    {
        let (da, db) = (a.value().data(), b.value().data());
        let od = out.data_mut();
        for_each_broadcast(out_shape, sa, sb, |o, i, j| {
            od[o] = match op {
                Binary::Add => da[i] + db[j],
                Binary::Sub => da[i] - db[j],
                Binary::Mul => da[i] * db[j],
            }
        });
    }
    let (va, vb) = (a.value_rc().clone(), b.value_rc().clone());
    Var::from_op(name, out, &[a, b], move |g, needs| {
        let gd = g.data();
        let mut ga = needs[0].then(|| Tensor::zeros(va.shape()));
        let mut gb = needs[1].then(|| Tensor::zeros(vb.shape()));
        let (da, db) = (va.data(), vb.data());
        for_each_broadcast(out_shape, sa, sb, |o, i, j| {
            let (wa, wb) = match op {
                Binary::Add => (T::one(), T::one()),
                Binary::Sub => (T::one(), -T::one()),
                Binary::Mul => (db[j], da[i]),
            };
            if let Some(ga) = ga.as_mut() {
                ga.data_mut()[i] += gd[o] * wa;
            }
            if let Some(gb) = gb.as_mut() {
                gb.data_mut()[j] += gd[o] * wb;
            }
        });
        vec![ga, gb]
    })
}

/// Elementwise sum; 4-D operands broadcast over unit dimensions.
pub fn add<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    binary(Binary::Add, a, b)
}

pub fn sub<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    binary(Binary::Sub, a, b)
}

/// Elementwise product; 4-D operands broadcast over unit dimensions.
pub fn mul<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    binary(Binary::Mul, a, b)
}

/// Concatenation along the channel axis of 4-D tensors.
pub fn concat_channels<T: Real>(xs: &[&Var<T>]) -> Result<Var<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?
        .dims4()?;
    let [n, _, h, w] = first;
    let mut chans = Vec::with_capacity(xs.len());
    for x in xs {
        let [xn, xc, xh, xw] = x.dims4()?;
        if (xn, xh, xw) != (n, h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", first, x.shape()),
            ));
        }
        chans.push(xc);
    }
    let ctot: usize = chans.iter().sum();
    let plane = h * w;
    let mut out = Vec::with_capacity(n * ctot * plane);
    for b in 0..n {
        for (x, &c) in xs.iter().zip(&chans) {
            out.extend_from_slice(&x.value().data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    let out = Tensor::new(&[n, ctot, h, w], out)?;
    Var::from_op("concat_channels", out, xs, move |g, needs| {
        let gd = g.data();
        let mut offset = 0;
        let mut res = Vec::with_capacity(chans.len());
        for (&c, &need) in chans.iter().zip(needs) {
            if need {
                let mut part = Vec::with_capacity(n * c * plane);
                for b in 0..n {
                    let start = (b * ctot + offset) * plane;
                    part.extend_from_slice(&gd[start..start + c * plane]);
                }
                res.push(Some(Tensor::new(&[n, c, h, w], part).expect("shape")));
            } else {
                res.push(None);
            }
            offset += c;
        }
        res
    })
}

/// Channels `start..start+len` of a 4-D tensor.
pub fn slice_channels<T: Real>(x: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
    let [n, c, h, w] = x.dims4()?;
    if start + len > c || len == 0 {
        return Err(Error::shape(
            "slice_channels",
            format!("range {}..{} of {} channels", start, start + len, c),
        ));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * len * plane);
    for b in 0..n {
        let s = (b * c + start) * plane;
        out.extend_from_slice(&x.value().data()[s..s + len * plane]);
    }
    let out = Tensor::new(&[n, len, h, w], out)?;
    Var::from_op("slice_channels", out, &[x], move |g, _| {
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        let dd = dx.data_mut();
        for b in 0..n {
            let s = (b * c + start) * plane;
            dd[s..s + len * plane].copy_from_slice(&g.data()[b * len * plane..(b + 1) * len * plane]);
        }
        vec![Some(dx)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{backward, Tape};
    use std::rc::Rc;

    #[test]
    fn activation_examples() {
        let x = Var::constant(Tensor::<f32>::new(&[3], vec![0.0, 2.0, -1.0]).unwrap());
        let s = activation(Activation::Sigmoid, &x).unwrap();
        assert_eq!(s.value().data()[0], 0.5);
        let e = activation(Activation::Elu, &x).unwrap();
        assert_eq!(e.value().data()[1], 2.0);
        let oracle = (-1.0f64).exp() - 1.0;
        assert!((e.value().data()[2] as f64 - oracle).abs() < 1e-7);
        assert!((oracle + 0.6321).abs() < 1e-4);
    }

    #[test]
    fn sigmoid_stays_inside_unit_interval() {
        let x = Var::constant(Tensor::<f64>::new(&[4], vec![-30.0, -5.0, 5.0, 30.0]).unwrap());
        let s = sigmoid(&x).unwrap();
        assert!(s.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn non_finite_input_rejected() {
        let x = Var::constant(Tensor::<f32>::new(&[2], vec![0.0, f32::NAN]).unwrap());
        assert!(matches!(
            activation(Activation::Elu, &x),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Rc::new(Tensor::scalar(3.0)));
        let y = mul(&x, &x).unwrap();
        let g = backward(&y).unwrap();
        assert_eq!(g.get(&x).unwrap().data()[0], 6.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Rc::new(Tensor::scalar(0.0)));
        let y = sigmoid(&x).unwrap();
        let g = backward(&y).unwrap();
        assert_eq!(g.get(&x).unwrap().data()[0], 0.25);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Rc::new(Tensor::zeros(&[2])));
        assert!(backward(&x).is_err());
    }

    #[test]
    fn broadcast_mul_gradients() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Rc::new(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64)));
        let b = tape.leaf(Rc::new(Tensor::from_fn(&[1, 2, 1, 1], |i| 1.0 + i as f64)));
        let y = sum(&mul(&a, &b).unwrap()).unwrap();
        assert_eq!(y.value().data()[0], (0. + 1. + 2. + 3.) + 2. * (4. + 5. + 6. + 7.));
        let g = backward(&y).unwrap();
        assert_eq!(g.get(&b).unwrap().data(), &[6.0, 22.0]);
        assert_eq!(g.get(&a).unwrap().data()[5], 2.0);
    }

    #[test]
    fn concat_then_slice_recovers_parts() {
        let a = Var::constant(Tensor::<f32>::from_fn(&[2, 1, 2, 2], |i| i as f32));
        let b = Var::constant(Tensor::<f32>::from_fn(&[2, 3, 2, 2], |i| 100.0 + i as f32));
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[2, 4, 2, 2]);
        assert_eq!(slice_channels(&cat, 0, 1).unwrap().value(), a.value());
        assert_eq!(slice_channels(&cat, 1, 3).unwrap().value(), b.value());
    }
}
