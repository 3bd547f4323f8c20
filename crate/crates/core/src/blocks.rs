//! Composite building blocks of the expert network: dual-pool attention,
//! the multi-branch spectral transform block and the cross-layer activation
//! gated module.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::ops::{self, PoolKind};
use crate::params::{Bound, Conv, ConvEluConv, ParamStore};
use crate::scalar::Real;
use crate::spectral::{irfft2d_stacked, rfft2d_stacked};

macro_rules! string_enum {
    ($ty:ident { $($variant:ident => $s:literal),+ $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($ty::$variant => $s),+
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($ty::$variant),)+
                    other => Err(Error::invalid(
                        stringify!($ty),
                        format!("unknown value {:?}", other),
                    )),
                }
            }
        }
    };
}
pub(crate) use string_enum;

/// Which halves of dual-pool attention are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    Full,
    /// Attention removed entirely (identity).
    NoDp,
    /// Channel gate only.
    CaOnly,
    /// Spatial (pixel) gate only.
    PaOnly,
}

string_enum!(AttentionVariant {
    Full => "full",
    NoDp => "no_dp",
    CaOnly => "ca_only",
    PaOnly => "pa_only",
});

/// Channel gate from pooled statistics and a spatial gate from the
/// features, both applied multiplicatively.
#[derive(Clone, Debug)]
pub struct DualPoolAttention {
    pub channels: usize,
    channel_path: Option<ConvEluConv>,
    spatial_path: Option<ConvEluConv>,
}

impl DualPoolAttention {
    pub const REDUCTION: usize = 4;

    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        variant: AttentionVariant,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if channels == 0 || !channels.is_multiple_of(Self::REDUCTION) {
            return Err(Error::invalid(
                "dual_pool_attention",
                format!("{} channels not divisible by {}", channels, Self::REDUCTION),
            ));
        }
        let use_channel = matches!(variant, AttentionVariant::Full | AttentionVariant::CaOnly);
        let use_spatial = matches!(variant, AttentionVariant::Full | AttentionVariant::PaOnly);
        let c = channels;
        Ok(Self {
            channels,
            channel_path: use_channel
                .then(|| ConvEluConv::new(store, &format!("{}.channel", name), [c, c, c], 1, rng)),
            spatial_path: use_spatial.then(|| {
                ConvEluConv::new(
                    store,
                    &format!("{}.spatial", name),
                    [c, c / Self::REDUCTION, 1],
                    1,
                    rng,
                )
            }),
        })
    }

    /// `sigmoid(conv∘elu∘conv(avgpool(x) + maxpool(x)))`, shape `[N, C, 1, 1]`.
    pub fn channel_weights<T: Real>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Option<Var<T>>> {
        let Some(path) = &self.channel_path else {
            return Ok(None);
        };
        let pooled = ops::add(
            &ops::pool(PoolKind::AvgGlobal, x)?,
            &ops::pool(PoolKind::MaxGlobal, x)?,
        )?;
        Ok(Some(ops::sigmoid(&path.forward(p, &pooled)?)?))
    }

    /// `sigmoid(conv∘elu∘conv(x))` with `C → C/r → 1`, shape `[N, 1, H, W]`.
    pub fn spatial_weights<T: Real>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Option<Var<T>>> {
        let Some(path) = &self.spatial_path else {
            return Ok(None);
        };
        Ok(Some(ops::sigmoid(&path.forward(p, x)?)?))
    }

    pub fn forward<T: Real>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let [_, c, _, _] = x.dims4()?;
        if c != self.channels {
            return Err(Error::shape(
                "dual_pool_attention",
                format!("built for {} channels, got {}", self.channels, c),
            ));
        }
        let mut out = x.clone();
        if let Some(rc) = self.channel_weights(p, x)? {
            out = ops::mul(&out, &rc)?;
        }
        if let Some(rs) = self.spatial_weights(p, x)? {
            out = ops::mul(&out, &rs)?;
        }
        Ok(out)
    }
}

/// Configurations of the spectral transform block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MstVariant {
    /// Split into a frequency-domain half and a multi-scale local half.
    Full,
    /// One 3×3 `conv∘elu∘conv` with residual.
    Vc,
    /// Both local paths over all channels, no global branch.
    LocalOnly,
    /// Frequency-domain branch over all channels, no local branch.
    GlobalOnly,
    /// Like `Full`, with the global half processed in the spatial domain.
    NoSpectral,
}

string_enum!(MstVariant {
    Full => "full",
    Vc => "vc",
    LocalOnly => "local_only",
    GlobalOnly => "global_only",
    NoSpectral => "no_spectral",
});

impl MstVariant {
    pub fn uses_fft(self) -> bool {
        matches!(self, MstVariant::Full | MstVariant::GlobalOnly)
    }
}

#[derive(Clone, Debug)]
pub struct MultiBranchSpectral {
    pub variant: MstVariant,
    pub channels: usize,
    global: Option<ConvEluConv>,
    local_1x1: Option<ConvEluConv>,
    local_3x3: Option<ConvEluConv>,
    fuse: Option<Conv>,
    plain: Option<ConvEluConv>,
}

impl MultiBranchSpectral {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        variant: MstVariant,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c = channels;
        if c == 0 || (!c.is_multiple_of(2) && matches!(variant, MstVariant::Full | MstVariant::NoSpectral)) {
            return Err(Error::invalid(
                "mst_block",
                format!("{} channels cannot be split in halves", c),
            ));
        }
        let h = c / 2;
        let n = |s: &str| format!("{}.{}", name, s);
        let mut blk = Self {
            variant,
            channels,
            global: None,
            local_1x1: None,
            local_3x3: None,
            fuse: None,
            plain: None,
        };
        match variant {
            MstVariant::Full => {
                // h complex channels → 2h = c stacked real channels
                blk.global = Some(ConvEluConv::new(store, &n("global"), [c, c, c], 1, rng));
                blk.local_1x1 = Some(ConvEluConv::new(store, &n("local1"), [h, h, h], 1, rng));
                blk.local_3x3 = Some(ConvEluConv::new(store, &n("local3"), [h, h, h], 3, rng));
                blk.fuse = Some(Conv::new(store, &n("fuse"), 3 * h, c, 1, 1, rng));
            }
            MstVariant::NoSpectral => {
                blk.global = Some(ConvEluConv::new(store, &n("global"), [h, h, h], 1, rng));
                blk.local_1x1 = Some(ConvEluConv::new(store, &n("local1"), [h, h, h], 1, rng));
                blk.local_3x3 = Some(ConvEluConv::new(store, &n("local3"), [h, h, h], 3, rng));
                blk.fuse = Some(Conv::new(store, &n("fuse"), 3 * h, c, 1, 1, rng));
            }
            MstVariant::Vc => {
                blk.plain = Some(ConvEluConv::new(store, &n("plain"), [c, c, c], 3, rng));
            }
            MstVariant::LocalOnly => {
                blk.local_1x1 = Some(ConvEluConv::new(store, &n("local1"), [c, c, c], 1, rng));
                blk.local_3x3 = Some(ConvEluConv::new(store, &n("local3"), [c, c, c], 3, rng));
                blk.fuse = Some(Conv::new(store, &n("fuse"), 2 * c, c, 1, 1, rng));
            }
            MstVariant::GlobalOnly => {
                blk.global = Some(ConvEluConv::new(store, &n("global"), [2 * c, 2 * c, 2 * c], 1, rng));
                blk.fuse = Some(Conv::new(store, &n("fuse"), c, c, 1, 1, rng));
            }
        }
        Ok(blk)
    }

    fn spectral_branch<T: Real>(path: &ConvEluConv, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let [_, _, _, w] = x.dims4()?;
        let spec = rfft2d_stacked(x)?;
        let mixed = path.forward(p, &spec)?;
        irfft2d_stacked(&mixed, w)
    }

    pub fn forward<T: Real>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let [_, c, h, w] = x.dims4()?;
        if c != self.channels {
            return Err(Error::shape(
                "mst_block",
                format!("built for {} channels, got {}", self.channels, c),
            ));
        }
        if self.variant.uses_fft() && (!h.is_power_of_two() || !w.is_power_of_two()) {
            return Err(Error::invalid(
                "mst_block",
                format!("spatial dims {}x{} must be powers of two", h, w),
            ));
        }
        let expect = |o: &Option<ConvEluConv>| *o.as_ref().expect("branch built for variant");
        let branch = match self.variant {
            MstVariant::Vc => expect(&self.plain).forward(p, x)?,
            MstVariant::Full | MstVariant::NoSpectral => {
                let half = c / 2;
                let global_in = ops::slice_channels(x, 0, half)?;
                let local_in = ops::slice_channels(x, half, half)?;
                let global = expect(&self.global);
                let r_global = if self.variant == MstVariant::Full {
                    Self::spectral_branch(&global, p, &global_in)?
                } else {
                    global.forward(p, &global_in)?
                };
                let r3 = expect(&self.local_3x3).forward(p, &local_in)?;
                let r1 = expect(&self.local_1x1).forward(p, &local_in)?;
                let cat = ops::concat_channels(&[&r_global, &r3, &r1])?;
                self.fuse.expect("fuse").forward(p, &cat)?
            }
            MstVariant::LocalOnly => {
                let r3 = expect(&self.local_3x3).forward(p, x)?;
                let r1 = expect(&self.local_1x1).forward(p, x)?;
                let cat = ops::concat_channels(&[&r3, &r1])?;
                self.fuse.expect("fuse").forward(p, &cat)?
            }
            MstVariant::GlobalOnly => {
                let r = Self::spectral_branch(&expect(&self.global), p, x)?;
                self.fuse.expect("fuse").forward(p, &r)?
            }
        };
        ops::add(x, &branch)
    }
}

/// Gates features with a map predicted from a rescaled copy of the input
/// image, then merges gated and original features.
#[derive(Clone, Debug)]
pub struct CrossLayerGate {
    pub channels: usize,
    map_path: ConvEluConv,
    merge: Conv,
}

impl CrossLayerGate {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let c = channels;
        Self {
            channels,
            map_path: ConvEluConv::new(store, &format!("{}.map", name), [3, c, c], 3, rng),
            merge: Conv::new(store, &format!("{}.merge", name), 2 * c, c, 3, 1, rng),
        }
    }

    /// Activation gated map `M`, values in (0, 1).
    pub fn gate_map<T: Real>(&self, p: &Bound<T>, guide: &Var<T>) -> Result<Var<T>> {
        ops::sigmoid(&self.map_path.forward(p, guide)?)
    }

    pub fn forward<T: Real>(&self, p: &Bound<T>, features: &Var<T>, guide: &Var<T>) -> Result<Var<T>> {
        let [n, c, h, w] = features.dims4()?;
        let [gn, gc, gh, gw] = guide.dims4()?;
        if (gn, gh, gw) != (n, h, w) || gc != 3 {
            return Err(Error::shape(
                "clagm",
                format!("features {:?} vs guide {:?}", features.shape(), guide.shape()),
            ));
        }
        if c != self.channels {
            return Err(Error::shape(
                "clagm",
                format!("built for {} channels, got {}", self.channels, c),
            ));
        }
        let m = self.gate_map(p, guide)?;
        let gated = ops::mul(&m, features)?;
        let cat = ops::concat_channels(&[features, &gated])?;
        self.merge.forward(p, &cat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{conv2d, elu};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn param(store: &ParamStore<f64>, name: &str) -> Tensor<f64> {
        store.get(store.find(name).unwrap_or_else(|| panic!("{}", name))).clone()
    }

    /// Straight-line conv∘elu∘conv from named weights.
    fn cec(store: &ParamStore<f64>, name: &str, x: &Tensor<f64>, pad: usize) -> Tensor<f64> {
        let c = |s: &str| Var::constant(param(store, &format!("{}.{}", name, s)));
        let h = conv2d(&Var::constant(x.clone()), &c("0.weight"), &c("0.bias"), 1, pad).unwrap();
        let h = elu(&h).unwrap();
        conv2d(&h, &c("1.weight"), &c("1.bias"), 1, pad).unwrap().value().clone()
    }

    fn randomize_biases(store: &mut ParamStore<f64>, r: &mut ChaCha8Rng) {
        for id in store.ids().collect::<Vec<_>>() {
            if store.names()[id.index()].ends_with(".bias") {
                let shape = store.get(id).shape().to_vec();
                store.set(id, Tensor::randn(&shape, 0.1, r)).unwrap();
            }
        }
    }

    #[test]
    fn dpa_zero_weights_quarter() {
        let mut store = ParamStore::<f32>::new();
        let dpa = DualPoolAttention::new(&mut store, "a", 4, AttentionVariant::Full, &mut rng(1)).unwrap();
        store.fill_prefix("a", 0.0);
        let x = Tensor::<f32>::randn(&[1, 4, 8, 8], 1.0, &mut rng(2));
        let y = dpa.forward(&store.bind(None), &Var::constant(x.clone())).unwrap();
        for (a, b) in y.value().data().iter().zip(x.data()) {
            assert!((a - b / 4.0).abs() < 1e-7);
        }
    }

    #[test]
    fn dpa_bounded_by_input() {
        let mut store = ParamStore::<f32>::new();
        let dpa = DualPoolAttention::new(&mut store, "a", 8, AttentionVariant::Full, &mut rng(3)).unwrap();
        let x = Tensor::<f32>::randn(&[2, 8, 8, 8], 2.0, &mut rng(4));
        let y = dpa.forward(&store.bind(None), &Var::constant(x.clone())).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.value().data().iter().zip(x.data()).all(|(a, b)| a.abs() <= b.abs()));
    }

    #[test]
    fn dpa_rejects_indivisible_channels() {
        let mut store = ParamStore::<f32>::new();
        assert!(DualPoolAttention::new(&mut store, "a", 6, AttentionVariant::Full, &mut rng(0)).is_err());
    }

    #[test]
    fn dpa_matches_loop_oracle() {
        let mut r = rng(5);
        let mut store = ParamStore::<f64>::new();
        let dpa = DualPoolAttention::new(&mut store, "a", 4, AttentionVariant::Full, &mut r).unwrap();
        randomize_biases(&mut store, &mut r);
        let x = Tensor::<f64>::randn(&[1, 4, 8, 8], 1.0, &mut r);
        let got = dpa.forward(&store.bind(None), &Var::constant(x.clone())).unwrap();

        // pooled statistics by hand
        let mut pooled = Tensor::zeros(&[1, 4, 1, 1]);
        for c in 0..4 {
            let plane = &x.data()[c * 64..(c + 1) * 64];
            let avg = plane.iter().sum::<f64>() / 64.0;
            let max = plane.iter().cloned().fold(f64::MIN, f64::max);
            pooled.data_mut()[c] = avg + max;
        }
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let rc: Vec<f64> = cec(&store, "a.channel", &pooled, 0).data().iter().map(|&v| sig(v)).collect();
        let rs: Vec<f64> = cec(&store, "a.spatial", &x, 0).data().iter().map(|&v| sig(v)).collect();
        for c in 0..4 {
            for i in 0..64 {
                let want = x.data()[c * 64 + i] * rc[c] * rs[i];
                assert!((got.value().data()[c * 64 + i] - want).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn mst_zero_weights_identity() {
        for &v in MstVariant::ALL {
            let mut store = ParamStore::<f32>::new();
            let mst = MultiBranchSpectral::new(&mut store, "m", 4, v, &mut rng(7)).unwrap();
            store.fill_prefix("m", 0.0);
            let x = Tensor::<f32>::randn(&[1, 4, 8, 8], 1.0, &mut rng(8));
            let y = mst.forward(&store.bind(None), &Var::constant(x.clone())).unwrap();
            assert_eq!(y.value(), &x, "variant {}", v);
        }
    }

    #[test]
    fn mst_rejects_bad_inputs() {
        let mut store = ParamStore::<f32>::new();
        assert!(MultiBranchSpectral::new(&mut store, "m", 3, MstVariant::Full, &mut rng(0)).is_err());
        let mst = MultiBranchSpectral::new(&mut store, "n", 4, MstVariant::Full, &mut rng(0)).unwrap();
        let x = Var::constant(Tensor::<f32>::zeros(&[1, 4, 6, 8]));
        assert!(mst.forward(&store.bind(None), &x).is_err());
    }

    #[test]
    fn mst_full_matches_compositional_oracle() {
        let mut r = rng(9);
        let mut store = ParamStore::<f64>::new();
        let mst = MultiBranchSpectral::new(&mut store, "m", 4, MstVariant::Full, &mut r).unwrap();
        randomize_biases(&mut store, &mut r);
        let x = Tensor::<f64>::randn(&[1, 4, 8, 8], 1.0, &mut r);
        let got = mst.forward(&store.bind(None), &Var::constant(x.clone())).unwrap();

        let g_in = Tensor::new(&[1, 2, 8, 8], x.data()[..128].to_vec()).unwrap();
        let l_in = Tensor::new(&[1, 2, 8, 8], x.data()[128..].to_vec()).unwrap();
        let spec = crate::spectral::rfft2d(&g_in).unwrap();
        let mut stacked = spec.re.clone();
        stacked.extend_from_slice(&spec.im);
        let stacked = Tensor::new(&[1, 4, 8, 5], stacked).unwrap();
        let mixed = cec(&store, "m.global", &stacked, 0);
        let back = crate::spectral::Spectrum {
            shape: [1, 2, 8, 5],
            re: mixed.data()[..80].to_vec(),
            im: mixed.data()[80..].to_vec(),
            original_width: 8,
        };
        let r_ffc = crate::spectral::irfft2d(&back, 8).unwrap();
        let r3 = cec(&store, "m.local3", &l_in, 1);
        let r1 = cec(&store, "m.local1", &l_in, 0);
        let mut cat = r_ffc.data().to_vec();
        cat.extend_from_slice(r3.data());
        cat.extend_from_slice(r1.data());
        let cat = Var::constant(Tensor::new(&[1, 6, 8, 8], cat).unwrap());
        let fused = conv2d(
            &cat,
            &Var::constant(param(&store, "m.fuse.weight")),
            &Var::constant(param(&store, "m.fuse.bias")),
            1,
            0,
        )
        .unwrap();
        let want = fused.value().zip_map(&x, |a, b| a + b).unwrap();
        assert!(got.value().max_abs_diff(&want) <= 1e-5);
    }

    #[test]
    fn clagm_zero_map_halves_features() {
        let mut store = ParamStore::<f32>::new();
        let g = CrossLayerGate::new(&mut store, "g", 4, &mut rng(1));
        store.fill_prefix("g.map", 0.0);
        let guide = Var::constant(Tensor::<f32>::rand_uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng(2)));
        let m = g.gate_map(&store.bind(None), &guide).unwrap();
        assert!(m.value().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn clagm_constructed_identity() {
        let mut store = ParamStore::<f32>::new();
        let g = CrossLayerGate::new(&mut store, "g", 4, &mut rng(1));
        // merge conv copies the first C input channels through its centre tap
        let wid = store.find("g.merge.weight").unwrap();
        let mut w = Tensor::zeros(&[4, 8, 3, 3]);
        for c in 0..4 {
            w.data_mut()[((c * 8 + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        store.set(wid, w).unwrap();
        store.fill_prefix("g.merge.bias", 0.0);
        let f = Tensor::<f32>::randn(&[1, 4, 8, 8], 1.0, &mut rng(3));
        let guide = Var::constant(Tensor::rand_uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng(4)));
        let y = g.forward(&store.bind(None), &Var::constant(f.clone()), &guide).unwrap();
        assert_eq!(y.value(), &f);
    }

    #[test]
    fn clagm_matches_oracle_and_rejects_mismatch() {
        let mut r = rng(11);
        let mut store = ParamStore::<f64>::new();
        let g = CrossLayerGate::new(&mut store, "g", 4, &mut r);
        randomize_biases(&mut store, &mut r);
        let f = Tensor::<f64>::randn(&[1, 4, 8, 8], 1.0, &mut r);
        let guide = Tensor::<f64>::rand_uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut r);
        let p = store.bind(None);
        let got = g.forward(&p, &Var::constant(f.clone()), &Var::constant(guide.clone())).unwrap();

        let m = cec(&store, "g.map", &guide, 1).map(|v| 1.0 / (1.0 + (-v).exp()));
        let gated = m.zip_map(&f, |a, b| a * b).unwrap();
        let mut cat = f.data().to_vec();
        cat.extend_from_slice(gated.data());
        let want = conv2d(
            &Var::constant(Tensor::new(&[1, 8, 8, 8], cat).unwrap()),
            &Var::constant(param(&store, "g.merge.weight")),
            &Var::constant(param(&store, "g.merge.bias")),
            1,
            1,
        )
        .unwrap();
        assert!(got.value().max_abs_diff(want.value()) <= 1e-5);

        let small = Var::constant(Tensor::zeros(&[1, 3, 4, 4]));
        assert!(g.forward(&p, &Var::constant(f), &small).is_err());
    }
}
