//! Training objectives: Charbonnier, frequency-domain L1 and their sum.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Real;
use crate::spectral::rfft2d_stacked;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub epsilon: f64,
    pub lambda_st: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            lambda_st: 0.2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !(self.lambda_st >= 0.0) {
            return Err(Error::invalid(
                "LossConfig",
                format!("epsilon {} must be > 0 and lambda_st {} >= 0", self.epsilon, self.lambda_st),
            ));
        }
        Ok(())
    }
}

fn same_shape<T: Real>(op: &'static str, x: &Var<T>, y: &Var<T>) -> Result<()> {
    if x.shape() != y.shape() || x.shape().is_empty() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    Ok(())
}

/// `mean_i sqrt(‖x_i − y_i‖² + ε²)` over the leading batch dimension.
pub fn charbonnier<T: Real>(x: &Var<T>, y: &Var<T>, eps: f64) -> Result<Var<T>> {
    same_shape("charbonnier", x, y)?;
    let n = x.shape()[0];
    let per = x.value().len() / n;
    let (xv, yv) = (x.value_rc().clone(), y.value_rc().clone());
    let roots: Vec<f64> = (0..n)
        .map(|i| {
            let r = i * per..(i + 1) * per;
            let ss: f64 = xv.data()[r.clone()]
                .iter()
                .zip(&yv.data()[r])
                .map(|(a, b)| {
                    let d = a.as_f64() - b.as_f64();
                    d * d
                })
                .sum();
            (ss + eps * eps).sqrt()
        })
        .collect();
    let value = roots.iter().sum::<f64>() / n as f64;
    Var::from_op("charbonnier", Tensor::scalar(T::lit(value)), &[x, y], move |g, needs| {
        let g0 = g.data()[0].as_f64() / n as f64;
        let mut dx = Tensor::<T>::zeros(xv.shape());
        for (i, root) in roots.iter().enumerate() {
            let k = g0 / root;
            for j in i * per..(i + 1) * per {
                dx.data_mut()[j] = T::lit(k * (xv.data()[j].as_f64() - yv.data()[j].as_f64()));
            }
        }
        let dy = needs[1].then(|| dx.map(|v| -v));
        vec![needs[0].then_some(dx), dy]
    })
}

/// Mean absolute value over the real and imaginary parts of
/// `rfft2d(j − j_gt)`.
pub fn spectral_loss<T: Real>(j: &Var<T>, j_gt: &Var<T>) -> Result<Var<T>> {
    same_shape("spectral_loss", j, j_gt)?;
    let spec = rfft2d_stacked(&ops::sub(j, j_gt)?)?;
    ops::mean(&ops::abs(&spec)?)
}

/// Both terms and their weighted sum.
pub struct LossParts<T> {
    pub total: Var<T>,
    pub charbonnier: f64,
    pub spectral: f64,
}

pub fn total_loss<T: Real>(j: &Var<T>, j_gt: &Var<T>, cfg: &LossConfig) -> Result<LossParts<T>> {
    let c = charbonnier(j, j_gt, cfg.epsilon)?;
    let s = spectral_loss(j, j_gt)?;
    let charb = c.value().item()?.as_f64();
    let spec = s.value().item()?.as_f64();
    let total = ops::add(&c, &ops::scale(&s, T::lit(cfg.lambda_st))?)?;
    Ok(LossParts {
        total,
        charbonnier: charb,
        spectral: spec,
    })
}
