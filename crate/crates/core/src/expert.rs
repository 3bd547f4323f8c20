//! The three-level task-specific expert network.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::blocks::{
    string_enum, AttentionVariant, CrossLayerGate, DualPoolAttention, MstVariant, MultiBranchSpectral,
};
use crate::error::{Error, Result};
use crate::gradcheck::Block;
use crate::ops::{self, resample, ResampleMode};
use crate::params::{Bound, Conv, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTag {
    Dehaze,
    Desnow,
}

string_enum!(TaskTag {
    Dehaze => "dehaze",
    Desnow => "desnow",
});

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertConfig {
    pub base_channels: usize,
    pub mst_variant: MstVariant,
    pub attention_variant: AttentionVariant,
}

impl ExpertConfig {
    pub const FULL_CHANNELS: usize = 32;
    pub const TINY_CHANNELS: usize = 16;

    pub fn full() -> Self {
        Self::with_channels(Self::FULL_CHANNELS)
    }

    pub fn tiny() -> Self {
        Self::with_channels(Self::TINY_CHANNELS)
    }

    pub fn with_channels(base_channels: usize) -> Self {
        Self {
            base_channels,
            mst_variant: MstVariant::Full,
            attention_variant: AttentionVariant::Full,
        }
    }

    /// Channel widths of levels 1 to 3.
    pub fn ladder(&self) -> [usize; 3] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c]
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.base_channels;
        if c == 0 || !c.is_multiple_of(DualPoolAttention::REDUCTION) {
            return Err(Error::invalid(
                "ExpertConfig",
                format!("base_channels {} must be a positive multiple of 4", c),
            ));
        }
        Ok(())
    }
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self::full()
    }
}

/// Named preset accepted on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Full,
    Tiny,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "tiny" => Ok(Preset::Tiny),
            other => Err(Error::invalid("Preset", format!("unknown preset {:?}", other))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Full => "full",
            Preset::Tiny => "tiny",
        })
    }
}

impl From<Preset> for ExpertConfig {
    fn from(p: Preset) -> Self {
        match p {
            Preset::Full => ExpertConfig::full(),
            Preset::Tiny => ExpertConfig::tiny(),
        }
    }
}

/// Level-1 tail: attention on the shallow features, merge with the decoded
/// features, two spectral blocks and the output projection.
#[derive(Clone, Debug)]
pub struct ExpertTail {
    attention: DualPoolAttention,
    merge: Conv,
    blocks: [MultiBranchSpectral; 2],
    out: Conv,
}

impl ExpertTail {
    /// The output projection starts at a tenth of the He scale. The network
    /// adds its input back, so a full-scale random correction would bury
    /// the identity path at initialisation.
    pub const OUT_INIT_SCALE: f64 = 0.1;

    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        cfg: &ExpertConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let n = |s: &str| format!("{}.{}", name, s);
        let attention = DualPoolAttention::new(store, &n("attention"), c, cfg.attention_variant, rng)?;
        let merge = Conv::new(store, &n("merge"), 2 * c, c, 3, 1, rng);
        let blocks = [
            MultiBranchSpectral::new(store, &n("mst0"), c, cfg.mst_variant, rng)?,
            MultiBranchSpectral::new(store, &n("mst1"), c, cfg.mst_variant, rng)?,
        ];
        let out = Conv::new(store, &n("out"), c, 3, 3, 1, rng);
        let scale = T::lit(Self::OUT_INIT_SCALE);
        store.get_mut(out.weight).data_mut().iter_mut().for_each(|w| *w *= scale);
        Ok(Self {
            attention,
            merge,
            blocks,
            out,
        })
    }

    pub fn forward<T: Real>(&self, p: &Bound<T>, shallow: &Var<T>, decoded: &Var<T>) -> Result<Var<T>> {
        let a = self.attention.forward(p, shallow)?;
        let mut h = self.merge.forward(p, &ops::concat_channels(&[&a, decoded])?)?;
        for b in &self.blocks {
            h = b.forward(p, &h)?;
        }
        self.out.forward(p, &h)
    }
}

impl Block for ExpertTail {
    fn forward<T: Real>(&self, p: &Bound<T>, x: &[Var<T>]) -> Result<Var<T>> {
        ExpertTail::forward(self, p, &x[0], &x[1])
    }
}

/// Parameter layout of an expert; the parameter values live in a
/// [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ExpertLayout {
    head: Conv,
    down12: Conv,
    l2_block: MultiBranchSpectral,
    l2_attention: DualPoolAttention,
    l2_gate: CrossLayerGate,
    down23: Conv,
    l3_blocks: [MultiBranchSpectral; 2],
    l3_attention: DualPoolAttention,
    l3_gate: CrossLayerGate,
    up32: Conv,
    l2_merge: Conv,
    l2_up_block: MultiBranchSpectral,
    up21: Conv,
    tail: ExpertTail,
}

impl ExpertLayout {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ExpertConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let [c1, c2, c3] = cfg.ladder();
        let (mv, av) = (cfg.mst_variant, cfg.attention_variant);
        Ok(Self {
            head: Conv::new(store, "l1.head", 3, c1, 3, 1, rng),
            down12: Conv::new(store, "l1.down", c1, c2, 3, 2, rng),
            l2_block: MultiBranchSpectral::new(store, "l2.mst", c2, mv, rng)?,
            l2_attention: DualPoolAttention::new(store, "l2.attention", c2, av, rng)?,
            l2_gate: CrossLayerGate::new(store, "l2.clagm", c2, rng),
            down23: Conv::new(store, "l2.down", c2, c3, 3, 2, rng),
            l3_blocks: [
                MultiBranchSpectral::new(store, "l3.mst0", c3, mv, rng)?,
                MultiBranchSpectral::new(store, "l3.mst1", c3, mv, rng)?,
            ],
            l3_attention: DualPoolAttention::new(store, "l3.attention", c3, av, rng)?,
            l3_gate: CrossLayerGate::new(store, "l3.clagm", c3, rng),
            up32: Conv::new(store, "l3.up", c3, c2, 1, 1, rng),
            l2_merge: Conv::new(store, "l2.merge", 2 * c2, c2, 3, 1, rng),
            l2_up_block: MultiBranchSpectral::new(store, "l2.up_mst", c2, mv, rng)?,
            up21: Conv::new(store, "l2.up", c2, c1, 1, 1, rng),
            tail: ExpertTail::new(store, "l1.tail", c1, cfg, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, p: &Bound<T>, image: &Var<T>) -> Result<Var<T>> {
        let [_, c, h, w] = image.dims4()?;
        check_image_size(c, h, w)?;

        let half = resample(image, ResampleMode::DownHalfBilinear)?;
        let quarter = resample(&half, ResampleMode::DownHalfBilinear)?;

        let f1 = self.head.forward(p, image)?;

        let mut f2 = self.down12.forward(p, &f1)?;
        f2 = self.l2_block.forward(p, &f2)?;
        f2 = self.l2_attention.forward(p, &f2)?;
        f2 = self.l2_gate.forward(p, &f2, &half)?;

        let mut f3 = self.down23.forward(p, &f2)?;
        for b in &self.l3_blocks {
            f3 = b.forward(p, &f3)?;
        }
        f3 = self.l3_attention.forward(p, &f3)?;
        f3 = self.l3_gate.forward(p, &f3, &quarter)?;

        let u2 = self.up32.forward(p, &resample(&f3, ResampleMode::UpDoubleBilinear)?)?;
        let mut d2 = self.l2_merge.forward(p, &ops::concat_channels(&[&u2, &f2])?)?;
        d2 = self.l2_up_block.forward(p, &d2)?;

        let d1 = self.up21.forward(p, &resample(&d2, ResampleMode::UpDoubleBilinear)?)?;
        // the tail predicts a correction to the input image
        ops::add(&self.tail.forward(p, &f1, &d1)?, image)
    }

    pub fn tail_out_conv(&self) -> Conv {
        self.tail.out
    }
}

/// Three-channel images with power-of-two sides of at least 4, so both
/// halvings and every FFT are exact.
pub fn check_image_size(c: usize, h: usize, w: usize) -> Result<()> {
    if c != 3 {
        return Err(Error::shape("expert_forward", format!("expected 3 channels, got {}", c)));
    }
    let ok = |d: usize| d >= 4 && d.is_power_of_two();
    if !ok(h) || !ok(w) {
        return Err(Error::invalid(
            "expert_forward",
            format!("image size {}x{} must be powers of two divisible by 4", h, w),
        ));
    }
    Ok(())
}

/// An expert with its own parameters.
#[derive(Clone, Debug)]
pub struct Expert<T> {
    pub config: ExpertConfig,
    pub task: TaskTag,
    pub layout: ExpertLayout,
    pub params: ParamStore<T>,
}

impl<T: Real> Expert<T> {
    /// He-normal weights and zero biases, deterministic in `seed`.
    pub fn build(config: ExpertConfig, task: TaskTag, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layout = ExpertLayout::new(&mut params, &config, &mut rng)?;
        Ok(Self {
            config,
            task,
            layout,
            params,
        })
    }

    pub fn count_params(&self) -> usize {
        self.params.numel()
    }

    pub fn forward(&self, p: &Bound<T>, image: &Var<T>) -> Result<Var<T>> {
        self.layout.forward(p, image)
    }

    /// Forward pass without a tape.
    pub fn infer(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.layout.forward(&self.params.bind(None), &Var::constant(image.clone()))?;
        Ok(out.value().clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{backward, Tape};
    use crate::gradcheck::{check_block, GradCheckOptions};
    use crate::params::checksum_tensor;

    fn image(seed: u64, size: usize) -> Tensor<f32> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(&[1, 3, size, size], 0.0, 1.0, &mut r)
    }

    #[test]
    fn shape_preserved() {
        let e = Expert::<f32>::build(ExpertConfig::with_channels(8), TaskTag::Dehaze, 1).unwrap();
        for size in [32, 64] {
            let y = e.infer(&image(2, size)).unwrap();
            assert_eq!(y.shape(), &[1, 3, size, size]);
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        let e = Expert::<f32>::build(ExpertConfig::with_channels(8), TaskTag::Dehaze, 1).unwrap();
        let bad = Tensor::<f32>::zeros(&[1, 3, 48, 48]);
        assert!(e.infer(&bad).is_err());
        let gray = Tensor::<f32>::zeros(&[1, 1, 32, 32]);
        assert!(e.infer(&gray).is_err());
        assert!(ExpertConfig::with_channels(6).validate().is_err());
    }

    #[test]
    fn same_seed_same_params() {
        let a = Expert::<f32>::build(ExpertConfig::tiny(), TaskTag::Desnow, 9).unwrap();
        let b = Expert::<f32>::build(ExpertConfig::tiny(), TaskTag::Desnow, 9).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
        let c = Expert::<f32>::build(ExpertConfig::tiny(), TaskTag::Desnow, 10).unwrap();
        assert_ne!(a.params.checksum(), c.params.checksum());
        assert_eq!(a.count_params(), c.count_params());
    }

    #[test]
    fn tiny_smaller_than_full() {
        let tiny = Expert::<f32>::build(ExpertConfig::tiny(), TaskTag::Dehaze, 0).unwrap();
        let full = Expert::<f32>::build(ExpertConfig::full(), TaskTag::Dehaze, 0).unwrap();
        assert!(tiny.count_params() < full.count_params());
        // widths scale by 2 so weights scale by about 4
        let ratio = full.count_params() as f64 / tiny.count_params() as f64;
        assert!(ratio > 3.5 && ratio < 4.1, "{}", ratio);
    }

    #[test]
    fn zero_output_conv_gives_identity() {
        let mut e = Expert::<f32>::build(ExpertConfig::with_channels(8), TaskTag::Dehaze, 3).unwrap();
        let out = e.layout.tail_out_conv();
        e.params.get_mut(out.weight).data_mut().fill(0.0);
        e.params.get_mut(out.bias).data_mut().fill(0.0);
        let x = image(4, 32);
        assert_eq!(e.infer(&x).unwrap(), x);
    }

    #[test]
    fn every_parameter_receives_gradient() {
        for seed in 0..3 {
            let e = Expert::<f32>::build(ExpertConfig::with_channels(8), TaskTag::Dehaze, seed).unwrap();
            let tape = Tape::new();
            let p = e.params.bind(Some(&tape));
            let x = Var::constant(image(seed + 10, 32));
            let gt = Var::constant(image(seed + 20, 32));
            let y = e.forward(&p, &x).unwrap();
            let d = ops::sub(&y, &gt).unwrap();
            let loss = ops::mean(&ops::mul(&d, &d).unwrap()).unwrap();
            let g = backward(&loss).unwrap();
            for (name, v) in e.params.names().iter().zip(p.vars()) {
                let gr = g.get(v).unwrap();
                assert!(gr.data().iter().any(|&x| x != 0.0), "dead parameter {} (seed {})", name, seed);
            }
        }
    }

    #[test]
    fn variants_build_and_run() {
        for &mv in MstVariant::ALL {
            for &av in AttentionVariant::ALL {
                let cfg = ExpertConfig {
                    base_channels: 4,
                    mst_variant: mv,
                    attention_variant: av,
                };
                let e = Expert::<f32>::build(cfg, TaskTag::Dehaze, 0).unwrap();
                assert_eq!(e.infer(&image(1, 32)).unwrap().shape(), &[1, 3, 32, 32]);
            }
        }
    }

    #[test]
    fn golden_forward_checksum() {
        let e = Expert::<f32>::build(ExpertConfig::tiny(), TaskTag::Dehaze, 2024).unwrap();
        let y = e.infer(&image(7, 32)).unwrap();
        assert_eq!(checksum_tensor(&y), GOLDEN_FORWARD);
    }

    const GOLDEN_FORWARD: &str = "1946b381a2e3c20e74bed09c7cfd32e9";

    #[test]
    fn tail_gradcheck() {
        let cfg = ExpertConfig::with_channels(4);
        let rep = check_block::<f64, _>("tail", &[&[1, 4, 16, 16], &[1, 4, 16, 16]], 0, GradCheckOptions { step: 1e-4, ..Default::default() }, |s, r| {
            ExpertTail::new(s, "t", 4, &cfg, r)
        })
        .unwrap();
        assert!(rep.passes(1e-4), "{:?}", rep);
    }
}
