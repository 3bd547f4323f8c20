//! Central finite-difference gradient checking.
//!
//! Analytic gradients are taken at the precision under test. The
//! finite-difference side always evaluates in `f64` at the same
//! (precision-rounded) point, so the oracle itself adds no single-precision
//! round-off.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{backward, Tape, Var};
use crate::blocks::{AttentionVariant, CrossLayerGate, DualPoolAttention, MstVariant, MultiBranchSpectral};
use crate::error::Result;
use crate::expert::{ExpertConfig, ExpertTail};
use crate::ops::{self, PoolKind, ResampleMode};
use crate::params::{Bound, ParamStore};
use crate::scalar::Real;
use crate::spectral::{irfft2d_stacked, rfft2d_stacked};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    /// Precision of the analytic gradients.
    pub precision: &'static str,
    /// `max |analytic − fd| / (|fd| + floor)`
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub floor: f64,
    /// Upper bound on probed elements per input; `None` probes all.
    pub max_per_input: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            floor: 1e-6,
            max_per_input: None,
        }
    }
}

/// A scalar function that can be evaluated at any precision.
pub trait Objective {
    fn eval<T: Real>(&self, inputs: &[Var<T>]) -> Result<Var<T>>;
}

/// Rounds through `T` so both precisions see the same point.
fn representable<T: Real>(x: &Tensor<f64>) -> Tensor<f64> {
    x.cast::<T>().cast::<f64>()
}

/// Compares reverse-mode gradients of the scalar objective, computed in
/// `T`, against central differences `(f(x+h) − f(x−h)) / 2h` in `f64`,
/// element by element.
pub fn check_gradients<T: Real>(
    name: &str,
    inputs: &[Tensor<f64>],
    opts: GradCheckOptions,
    obj: &impl Objective,
) -> Result<GradCheckReport> {
    let base: Vec<Tensor<f64>> = inputs.iter().map(representable::<T>).collect();

    let tape = Tape::<T>::new();
    let leaves: Vec<Var<T>> = base.iter().map(|t| tape.leaf(Rc::new(t.cast()))).collect();
    let loss = obj.eval(&leaves)?;
    let grads = backward(&loss)?;
    let analytic: Vec<Tensor<T>> = leaves
        .iter()
        .map(|v| grads.get(v).expect("leaf recorded"))
        .collect();

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let vars: Vec<Var<f64>> = values.iter().cloned().map(Var::constant).collect();
        obj.eval(&vars)?.value().item()
    };

    let mut report = GradCheckReport {
        name: name.to_string(),
        precision: T::NAME,
        max_rel_err: 0.0,
        worst_input: 0,
        worst_index: 0,
        checked: 0,
    };
    let mut work = base.clone();
    for (ii, input) in base.iter().enumerate() {
        let n = input.len();
        let stride = match opts.max_per_input {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for idx in (0..n).step_by(stride) {
            let orig = input.data()[idx];
            let hi = orig + opts.step;
            let lo = orig - opts.step;
            work[ii].data_mut()[idx] = hi;
            let plus = eval(&work)?;
            work[ii].data_mut()[idx] = lo;
            let minus = eval(&work)?;
            work[ii].data_mut()[idx] = orig;
            // divide by the representable step, not the requested one
            let fd = (plus - minus) / (hi - lo);
            let an = analytic[ii].data()[idx].as_f64();
            let rel = (an - fd).abs() / (fd.abs() + opts.floor);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_input = ii;
                report.worst_index = idx;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Parameterised module whose forward pass can run at any precision.
pub trait Block {
    fn forward<T: Real>(&self, p: &Bound<T>, inputs: &[Var<T>]) -> Result<Var<T>>;
}

impl Block for DualPoolAttention {
    fn forward<T: Real>(&self, p: &Bound<T>, x: &[Var<T>]) -> Result<Var<T>> {
        DualPoolAttention::forward(self, p, &x[0])
    }
}

impl Block for MultiBranchSpectral {
    fn forward<T: Real>(&self, p: &Bound<T>, x: &[Var<T>]) -> Result<Var<T>> {
        MultiBranchSpectral::forward(self, p, &x[0])
    }
}

impl Block for CrossLayerGate {
    fn forward<T: Real>(&self, p: &Bound<T>, x: &[Var<T>]) -> Result<Var<T>> {
        CrossLayerGate::forward(self, p, &x[0], &x[1])
    }
}

/// Tensor-valued function of all checked inputs.
trait Tensorial {
    fn apply<T: Real>(&self, inputs: &[Var<T>]) -> Result<Var<T>>;
}

/// `Σ proj · g(inputs)`: a fixed random projection makes any tensor-valued
/// function scalar without symmetric cancellation.
struct Projected<'a, F> {
    inner: &'a F,
    proj: Tensor<f64>,
}

impl<F: Tensorial> Objective for Projected<'_, F> {
    fn eval<T: Real>(&self, inputs: &[Var<T>]) -> Result<Var<T>> {
        ops::dot_const(&self.inner.apply(inputs)?, &self.proj.cast())
    }
}

fn projected<'a, T: Real, F: Tensorial>(
    inner: &'a F,
    inputs: &[Tensor<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<Projected<'a, F>> {
    let consts: Vec<Var<f64>> = inputs.iter().cloned().map(Var::constant).collect();
    let shape = inner.apply(&consts)?.shape().to_vec();
    Ok(Projected {
        inner,
        proj: representable::<T>(&Tensor::randn(&shape, 1.0, rng)),
    })
}

/// Block inputs first, then every parameter in store order.
struct BlockCall<'a, B> {
    block: &'a B,
    k: usize,
}

impl<B: Block> Tensorial for BlockCall<'_, B> {
    fn apply<T: Real>(&self, vars: &[Var<T>]) -> Result<Var<T>> {
        let bound = Bound::from_vars(vars[self.k..].to_vec());
        self.block.forward(&bound, &vars[..self.k])
    }
}

/// Checks a block over its inputs and every parameter. Parameters are drawn
/// by `build`; biases are then randomised so activations do not all share
/// one operating point.
pub fn check_block<T: Real, B: Block>(
    name: &str,
    input_shapes: &[&[usize]],
    seed: u64,
    opts: GradCheckOptions,
    build: impl FnOnce(&mut ParamStore<f64>, &mut ChaCha8Rng) -> Result<B>,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let block = build(&mut store, &mut rng)?;
    for id in store.ids().collect::<Vec<_>>() {
        if store.names()[id.index()].ends_with(".bias") {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::randn(&shape, 0.1, &mut rng))?;
        }
    }
    let mut inputs: Vec<Tensor<f64>> = input_shapes
        .iter()
        .map(|s| Tensor::randn(s, 1.0, &mut rng))
        .collect();
    let call = BlockCall {
        block: &block,
        k: inputs.len(),
    };
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    let obj = projected::<T, _>(&call, &inputs, &mut rng)?;
    check_gradients::<T>(name, &inputs, opts, &obj)
}

#[derive(Clone, Copy, Debug)]
enum Primitive {
    Elu,
    Sigmoid,
    Abs,
    Scale,
    Mean,
    Sum,
    Add,
    Sub,
    Mul,
    Concat,
    Slice,
    Conv { stride: usize, pad: usize },
    Pool(PoolKind),
    Resample(ResampleMode),
    Rfft,
    Irfft(usize),
}

impl Tensorial for Primitive {
    fn apply<T: Real>(&self, v: &[Var<T>]) -> Result<Var<T>> {
        match *self {
            Primitive::Elu => ops::elu(&v[0]),
            Primitive::Sigmoid => ops::sigmoid(&v[0]),
            Primitive::Abs => ops::abs(&v[0]),
            Primitive::Scale => ops::scale(&v[0], T::lit(-1.5)),
            Primitive::Mean => ops::mean(&v[0]),
            Primitive::Sum => ops::sum(&v[0]),
            Primitive::Add => ops::add(&v[0], &v[1]),
            Primitive::Sub => ops::sub(&v[0], &v[1]),
            Primitive::Mul => ops::mul(&v[0], &v[1]),
            Primitive::Concat => ops::concat_channels(&[&v[0], &v[1]]),
            Primitive::Slice => ops::slice_channels(&v[0], 1, 2),
            Primitive::Conv { stride, pad } => ops::conv2d(&v[0], &v[1], &v[2], stride, pad),
            Primitive::Pool(kind) => ops::pool(kind, &v[0]),
            Primitive::Resample(mode) => ops::resample(&v[0], mode),
            Primitive::Rfft => rfft2d_stacked(&v[0]),
            Primitive::Irfft(w) => irfft2d_stacked(&v[0], w),
        }
    }
}

/// Every differentiable primitive, on shapes up to `1×8×16×16`.
pub fn primitive_suite<T: Real>(seed: u64, opts: GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| Tensor::<f64>::randn(shape, 1.0, &mut rng);
    let x = r(&[1, 4, 8, 8]);
    let y = r(&[1, 4, 8, 8]);
    let col = r(&[1, 4, 1, 1]);
    let w3 = r(&[4, 4, 3, 3]).map(|v| v * 0.3);
    let w1 = r(&[8, 4, 1, 1]).map(|v| v * 0.5);
    let b4 = r(&[4]);
    let b8 = r(&[8]);
    let big = r(&[1, 8, 16, 16]);
    let spec = r(&[1, 8, 8, 5]);
    // |x| is not differentiable at 0; keep samples at least 0.1 away
    let away = x.map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 });

    use Primitive as P;
    let cases: Vec<(&str, P, Vec<Tensor<f64>>)> = vec![
        ("elu", P::Elu, vec![x.clone()]),
        ("sigmoid", P::Sigmoid, vec![x.clone()]),
        ("abs", P::Abs, vec![away]),
        ("scale", P::Scale, vec![x.clone()]),
        ("mean", P::Mean, vec![x.clone()]),
        ("sum", P::Sum, vec![x.clone()]),
        ("add", P::Add, vec![x.clone(), y.clone()]),
        ("sub", P::Sub, vec![x.clone(), y.clone()]),
        ("mul", P::Mul, vec![x.clone(), y.clone()]),
        ("mul_broadcast", P::Mul, vec![x.clone(), col]),
        ("concat_channels", P::Concat, vec![x.clone(), y]),
        ("slice_channels", P::Slice, vec![x.clone()]),
        ("conv3x3", P::Conv { stride: 1, pad: 1 }, vec![x.clone(), w3.clone(), b4.clone()]),
        ("conv3x3_stride2", P::Conv { stride: 2, pad: 1 }, vec![x.clone(), w3, b4]),
        ("conv1x1", P::Conv { stride: 1, pad: 0 }, vec![x.clone(), w1, b8]),
        ("avg_pool_global", P::Pool(PoolKind::AvgGlobal), vec![x.clone()]),
        ("max_pool_global", P::Pool(PoolKind::MaxGlobal), vec![x.clone()]),
        ("avg_pool_2x", P::Pool(PoolKind::Avg2x), vec![x.clone()]),
        ("resample_down", P::Resample(ResampleMode::DownHalfBilinear), vec![big.clone()]),
        ("resample_up", P::Resample(ResampleMode::UpDoubleBilinear), vec![x]),
        ("rfft2d", P::Rfft, vec![big]),
        ("irfft2d", P::Irfft(8), vec![spec]),
    ];
    let mut pr = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    cases
        .into_iter()
        .map(|(name, prim, inputs)| {
            let obj = projected::<T, _>(&prim, &inputs, &mut pr)?;
            check_gradients::<T>(name, &inputs, opts, &obj)
        })
        .collect()
}

/// Every composite block in every variant, on `1×4×8×8` features.
pub fn block_suite<T: Real>(seed: u64, opts: GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    const X: &[usize] = &[1, 4, 8, 8];
    const GUIDE: &[usize] = &[1, 3, 8, 8];
    let mut out = Vec::new();
    for &v in AttentionVariant::ALL {
        let name = format!("dual_pool_attention/{}", v);
        out.push(check_block::<T, _>(&name, &[X], seed, opts, |s, r| {
            DualPoolAttention::new(s, "a", 4, v, r)
        })?);
    }
    for &v in MstVariant::ALL {
        let name = format!("mst_block/{}", v);
        out.push(check_block::<T, _>(&name, &[X], seed, opts, |s, r| {
            MultiBranchSpectral::new(s, "m", 4, v, r)
        })?);
    }
    out.push(check_block::<T, _>("clagm", &[X, GUIDE], seed, opts, |s, r| {
        Ok(CrossLayerGate::new(s, "g", 4, r))
    })?);
    let cfg = ExpertConfig::with_channels(4);
    out.push(check_block::<T, _>("expert_tail", &[X, X], seed, opts, |s, r| {
        ExpertTail::new(s, "t", 4, &cfg, r)
    })?);
    Ok(out)
}
