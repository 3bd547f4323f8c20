//! The adaptive gate network and the expert mixture built on it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::expert::{check_image_size, Expert, TaskTag};
use crate::ops;
use crate::params::{Bound, Conv, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Per-pixel expert weights, each `[N, 1, H, W]`.
pub struct GateMaps<T> {
    pub w_h: Var<T>,
    pub w_s: Var<T>,
}

impl<T: Real> GateMaps<T> {
    /// Spatially constant gates shaped like `image`.
    pub fn constant(image_shape: &[usize], w_h: f64, w_s: f64) -> Result<Self> {
        let [n, _, h, w] = crate::tensor::dims4(image_shape)?;
        Ok(Self {
            w_h: Var::constant(Tensor::full(&[n, 1, h, w], T::lit(w_h))),
            w_s: Var::constant(Tensor::full(&[n, 1, h, w], T::lit(w_s))),
        })
    }
}

/// Three 3×3 convolutions `3 → 16 → 16 → 2` with ELU between and a sigmoid
/// head. Channel 0 weights the dehazing expert, channel 1 the desnowing one.
#[derive(Clone, Debug)]
pub struct GateLayout {
    convs: [Conv; 3],
}

impl GateLayout {
    pub const WIDTH: usize = 16;

    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let w = Self::WIDTH;
        Self {
            convs: [
                Conv::new(store, "agn.0", 3, w, 3, 1, rng),
                Conv::new(store, "agn.1", w, w, 3, 1, rng),
                Conv::new(store, "agn.2", w, 2, 3, 1, rng),
            ],
        }
    }

    pub fn forward<T: Real>(&self, p: &Bound<T>, image: &Var<T>) -> Result<GateMaps<T>> {
        let mut h = self.convs[0].forward(p, image)?;
        h = ops::elu(&h)?;
        h = self.convs[1].forward(p, &h)?;
        h = ops::elu(&h)?;
        let g = ops::sigmoid(&self.convs[2].forward(p, &h)?)?;
        Ok(GateMaps {
            w_h: ops::slice_channels(&g, 0, 1)?,
            w_s: ops::slice_channels(&g, 1, 1)?,
        })
    }
}

/// `J = w_h·J_dehaze + w_s·J_desnow`, gates broadcast over colour channels
/// and deliberately not normalised to sum to one.
pub fn compose<T: Real>(g: &GateMaps<T>, j_dehaze: &Var<T>, j_desnow: &Var<T>) -> Result<Var<T>> {
    let [n, _, h, w] = j_dehaze.dims4()?;
    let want = [n, 1, h, w];
    if j_desnow.shape() != j_dehaze.shape() || g.w_h.shape() != want || g.w_s.shape() != want {
        return Err(Error::shape(
            "compose",
            format!(
                "experts {:?} / {:?}, gates {:?} / {:?}",
                j_dehaze.shape(),
                j_desnow.shape(),
                g.w_h.shape(),
                g.w_s.shape()
            ),
        ));
    }
    ops::add(&ops::mul(&g.w_h, j_dehaze)?, &ops::mul(&g.w_s, j_desnow)?)
}

/// Two experts and the gate network that mixes them.
#[derive(Clone, Debug)]
pub struct DanNet<T> {
    pub dehaze: Expert<T>,
    pub desnow: Expert<T>,
    pub gate: GateLayout,
    pub gate_params: ParamStore<T>,
    /// When set, gate training never touches expert parameters.
    pub frozen: bool,
    /// Replaces the predicted gates with constants (diagnostics only).
    pub forced_gates: Option<(f64, f64)>,
}

/// Output of a mixture forward pass.
pub struct DanOutput<T> {
    pub restored: Var<T>,
    pub gates: GateMaps<T>,
    pub j_dehaze: Var<T>,
    pub j_desnow: Var<T>,
}

impl<T: Real> DanNet<T> {
    pub fn new(dehaze: Expert<T>, desnow: Expert<T>, gate_seed: u64) -> Result<Self> {
        if dehaze.task != TaskTag::Dehaze || desnow.task != TaskTag::Desnow {
            return Err(Error::invalid(
                "DanNet",
                format!("expert tasks {} / {}, expected dehaze / desnow", dehaze.task, desnow.task),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(gate_seed);
        let mut gate_params = ParamStore::new();
        let gate = GateLayout::new(&mut gate_params, &mut rng);
        // training starts from the even mix w_h = w_s = 0.5
        gate_params.fill_prefix("agn.2.", T::zero());
        Ok(Self {
            dehaze,
            desnow,
            gate,
            gate_params,
            frozen: true,
            forced_gates: None,
        })
    }

    pub fn gates(&self, p: &Bound<T>, image: &Var<T>) -> Result<GateMaps<T>> {
        let [_, c, h, w] = image.dims4()?;
        check_image_size(c, h, w)?;
        match self.forced_gates {
            Some((wh, ws)) => GateMaps::constant(image.shape(), wh, ws),
            None => self.gate.forward(p, image),
        }
    }

    /// Runs both experts and the gate on the same image. Each parameter set
    /// is bound by the caller, so any subset may be on a tape.
    pub fn forward(
        &self,
        dehaze: &Bound<T>,
        desnow: &Bound<T>,
        gate: &Bound<T>,
        image: &Var<T>,
    ) -> Result<DanOutput<T>> {
        let gates = self.gates(gate, image)?;
        let j_dehaze = self.dehaze.forward(dehaze, image)?;
        let j_desnow = self.desnow.forward(desnow, image)?;
        let restored = compose(&gates, &j_dehaze, &j_desnow)?;
        Ok(DanOutput {
            restored,
            gates,
            j_dehaze,
            j_desnow,
        })
    }

    /// Inference: restored image plus the two gate maps.
    pub fn infer(&self, image: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let out = self.forward(
            &self.dehaze.params.bind(None),
            &self.desnow.params.bind(None),
            &self.gate_params.bind(None),
            &Var::constant(image.clone()),
        )?;
        Ok((
            out.restored.value().clone(),
            out.gates.w_h.value().clone(),
            out.gates.w_s.value().clone(),
        ))
    }

    pub fn count_params(&self) -> usize {
        self.dehaze.count_params() + self.desnow.count_params() + self.gate_params.numel()
    }
}
