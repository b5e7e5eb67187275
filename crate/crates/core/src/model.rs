//! Model configuration, parameter construction, and subband bookkeeping.
//!
//! Parameters are registered in one fixed order (lifting, quantizer, luma
//! context, shared upsampler, chroma context, reconstruction net), so the
//! weights container and its digest are canonical for a given config.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamRegistry, Tensor};
use crate::error::{Error, Result};

/// Order the three recurrent units consume data in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackOrder {
    /// The narrow unit reads the subband, wider units read hidden states.
    InsideOut,
    /// The wide unit reads the subband and feeds inward.
    Pipeline,
}

#[derive(Debug, Clone)]
pub struct ModelCfg {
    /// Wavelet decomposition depth.
    pub levels: usize,
    /// Gaussian mixture components per coefficient.
    pub mixtures: usize,
    pub stack_order: StackOrder,
    /// Feature width of the context fusion trunk.
    pub fuse_width: usize,
    /// Hidden widths of recurrent units 1..3. Unit 3 carries the prediction
    /// channels and needs at least 3.
    pub rnn_hidden: [usize; 3],
    /// Residual width inside each lifting filter.
    pub lifting_width: usize,
    /// Feature width of the reconstruction net.
    pub dequant_width: usize,
    /// Residual blocks in the reconstruction net.
    pub dequant_depth: usize,
    /// Initial quantizer gain: coefficients are scaled by this before
    /// rounding, so smaller means coarser.
    pub delta_init: f32,
    pub seed: u64,
}

impl Default for ModelCfg {
    fn default() -> Self {
        ModelCfg {
            levels: 4,
            mixtures: 3,
            stack_order: StackOrder::InsideOut,
            fuse_width: 128,
            rnn_hidden: [32, 32, 3],
            lifting_width: 16,
            dequant_width: 32,
            dequant_depth: 6,
            delta_init: 0.0625,
            seed: 7,
        }
    }
}

impl ModelCfg {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 8 {
            return Err(Error::Config(format!("levels {} out of range 1..=8", self.levels)));
        }
        if self.mixtures == 0 || self.mixtures > 8 {
            return Err(Error::Config(format!("mixtures {} out of range 1..=8", self.mixtures)));
        }
        if self.rnn_hidden[2] < 3 {
            return Err(Error::Config("unit 3 needs at least 3 hidden channels".into()));
        }
        if self.fuse_width == 0 || self.lifting_width == 0 || self.dequant_width == 0 {
            return Err(Error::Config("zero feature width".into()));
        }
        if !(self.delta_init > 0.0) {
            return Err(Error::Config(format!("delta_init {} must be positive", self.delta_init)));
        }
        Ok(())
    }

    pub fn subband_count(&self) -> usize {
        3 * self.levels + 1
    }

    /// Spatial downscale factor of subband `i` relative to the padded plane.
    pub fn subband_scale(&self, i: usize) -> usize {
        1 << self.subband_level(i)
    }

    /// Decomposition level of subband `i` (coding order, 1-based). The
    /// coarsest level comes first.
    pub fn subband_level(&self, i: usize) -> usize {
        debug_assert!(i >= 1 && i <= self.subband_count());
        if i == 1 {
            self.levels
        } else {
            self.levels - (i - 2) / 3
        }
    }

    /// True right after subband `i` if the schedule moves one level finer,
    /// i.e. the remaining subbands live on a doubled grid.
    pub fn level_ends_after(&self, i: usize) -> bool {
        i >= 4 && (i - 4) % 3 == 0 && i < self.subband_count()
    }
}

/// Subband role within its level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubbandKind {
    Ll,
    Hl,
    Lh,
    Hh,
}

pub fn subband_kind(i: usize) -> SubbandKind {
    debug_assert!(i >= 1);
    if i == 1 {
        SubbandKind::Ll
    } else {
        match (i - 2) % 3 {
            0 => SubbandKind::Hl,
            1 => SubbandKind::Lh,
            _ => SubbandKind::Hh,
        }
    }
}

/// Context channels entering the luma fusion trunk at subband `i`:
/// prediction from step 2 on, coarser-scale upsample past the first level.
pub fn y_bundle_width(i: usize) -> usize {
    match i {
        1 => 0,
        2..=4 => 1,
        _ => 2,
    }
}

/// Context channels entering the shared chroma fusion trunk: co-located luma
/// subband, co-located first-chroma subband, prediction, then upsample past
/// the first level. Slots a component lacks are zero-filled, which keeps one
/// set of fusion weights valid for both chroma components.
pub fn c_bundle_width(i: usize) -> usize {
    if i <= 4 {
        3
    } else {
        4
    }
}

pub fn fuse_prefix(group: &str, i: usize) -> String {
    format!("ctx.{group}.fuse.i{i:02}")
}

/// Uniform fan-in initialization for a convolution kernel.
pub(crate) fn conv_init(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let a = 1.0 / (fan_in as f32).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(shape.to_vec(), data).expect("static shape")
}

pub(crate) fn zeros_init(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape.to_vec()).expect("static shape")
}

pub fn init_model(cfg: &ModelCfg) -> Result<ParamRegistry> {
    cfg.validate()?;
    let mut reg = ParamRegistry::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    crate::lifting::register_params(&mut reg, &mut rng, cfg)?;
    crate::context::register_params(&mut reg, &mut rng, cfg, "y")?;
    crate::context::register_upsampler(&mut reg)?;
    crate::context::register_params(&mut reg, &mut rng, cfg, "c")?;
    crate::dequant::register_params(&mut reg, &mut rng, cfg)?;
    Ok(reg)
}

/// Recovers the structural configuration from a loaded weight set, so a
/// weights file is self-describing. `base` supplies the fields weights
/// cannot carry (seed). Errors if the registry does not have exactly the
/// layout the recovered configuration implies.
pub fn infer_cfg(reg: &ParamRegistry, base: &ModelCfg) -> Result<ModelCfg> {
    let dim = |name: &str, axis: usize| -> Result<usize> {
        let shape = reg.get(name)?.shape().to_vec();
        shape.get(axis).copied().ok_or_else(|| {
            Error::Shape(format!("{name} has rank {}, wanted axis {axis}", shape.len()))
        })
    };
    let mut count = 0;
    while reg.contains(&format!("{}.maskA.kernel", fuse_prefix("y", count + 1))) {
        count += 1;
    }
    if count == 0 || (count - 1) % 3 != 0 {
        return Err(Error::Config(format!("weights describe {count} fusion trunks")));
    }
    let mut depth = 0;
    while reg.contains(&format!("dequant.res{depth}.conv0.kernel")) {
        depth += 1;
    }
    let h = [
        dim("ctx.y.rnn.u1.kernel", 0)? / 4,
        dim("ctx.y.rnn.u2.kernel", 0)? / 4,
        dim("ctx.y.rnn.u3.kernel", 0)? / 4,
    ];
    let u3_in = dim("ctx.y.rnn.u3.kernel", 1)?;
    let stack_order = if u3_in == 1 + h[2] {
        StackOrder::InsideOut
    } else if u3_in == h[1] + h[2] {
        StackOrder::Pipeline
    } else {
        return Err(Error::Config(format!(
            "narrow unit input width {u3_in} fits no known stack order"
        )));
    };
    let k3 = dim(&format!("{}.head1.kernel", fuse_prefix("y", 1)), 0)?;
    if k3 % 3 != 0 {
        return Err(Error::Config(format!("head width {k3} is not 3 per mixture")));
    }
    let cfg = ModelCfg {
        levels: (count - 1) / 3,
        mixtures: k3 / 3,
        stack_order,
        fuse_width: dim(&format!("{}.maskA.kernel", fuse_prefix("y", 1)), 0)?,
        rnn_hidden: h,
        lifting_width: dim("lifting.p1.res0.kernel", 0)?,
        dequant_width: dim("dequant.head.kernel", 0)?,
        dequant_depth: depth,
        delta_init: reg.get("quant.delta")?.data()[0],
        seed: base.seed,
    };
    cfg.validate()?;
    let expected = init_model(&cfg)?;
    if expected.len() != reg.len() {
        return Err(Error::Config(format!(
            "weights hold {} tensors, inferred layout needs {}",
            reg.len(),
            expected.len()
        )));
    }
    for (name, t) in expected.iter() {
        let got = reg
            .get(name)
            .map_err(|_| Error::Config(format!("weights are missing {name}")))?;
        if got.shape() != t.shape() {
            return Err(Error::Config(format!(
                "{name} has shape {:?}, inferred layout needs {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    Ok(cfg)
}

/// Seeds the chroma context from the trained luma context. Kernels whose
/// input widths differ (the fusion entry convs see different bundles) copy
/// the overlapping leading input channels and zero the remainder; chroma
/// modules with no luma counterpart keep their fresh initialization.
pub fn init_chroma_from_luma(reg: &mut ParamRegistry) -> Result<()> {
    let names: Vec<String> = reg
        .names()
        .filter(|n| n.starts_with("ctx.c."))
        .map(|n| n.to_string())
        .collect();
    for cname in names {
        let yname = cname.replacen("ctx.c.", "ctx.y.", 1);
        if !reg.contains(&yname) {
            continue;
        }
        let src = reg.get(&yname)?.clone();
        let dst = reg.get_mut(&cname)?;
        if dst.shape() == src.shape() {
            dst.data_mut().copy_from_slice(src.data());
            continue;
        }
        let (ds, ss) = (dst.shape().to_vec(), src.shape().to_vec());
        let compatible = ds.len() == 4
            && ss.len() == 4
            && ds[0] == ss[0]
            && ds[2] == ss[2]
            && ds[3] == ss[3];
        if !compatible {
            return Err(Error::Shape(format!(
                "cannot seed {cname} {ds:?} from {yname} {ss:?}"
            )));
        }
        let (cout, kh, kw) = (ds[0], ds[2], ds[3]);
        let (dcin, scin) = (ds[1], ss[1]);
        let copy = dcin.min(scin);
        let sdata = src.data().to_vec();
        let ddata = dst.data_mut();
        ddata.fill(0.0);
        for co in 0..cout {
            for ci in 0..copy {
                for t in 0..kh * kw {
                    ddata[(co * dcin + ci) * kh * kw + t] = sdata[(co * scin + ci) * kh * kw + t];
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::weights::weights_digest;

    #[test]
    fn default_config_validates_and_counts_subbands() {
        let cfg = ModelCfg::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.subband_count(), 13);
        assert_eq!(cfg.subband_level(1), 4);
        assert_eq!(cfg.subband_level(4), 4);
        assert_eq!(cfg.subband_level(5), 3);
        assert_eq!(cfg.subband_level(13), 1);
        assert!(cfg.level_ends_after(4));
        assert!(cfg.level_ends_after(7));
        assert!(cfg.level_ends_after(10));
        assert!(!cfg.level_ends_after(13));
        assert!(!cfg.level_ends_after(5));
    }

    #[test]
    fn subband_kinds_follow_coding_order() {
        use SubbandKind::*;
        let kinds: Vec<SubbandKind> = (1..=7).map(subband_kind).collect();
        assert_eq!(kinds, vec![Ll, Hl, Lh, Hh, Hl, Lh, Hh]);
    }

    #[test]
    fn bundle_widths_match_schedule_position() {
        assert_eq!(y_bundle_width(1), 0);
        assert_eq!(y_bundle_width(2), 1);
        assert_eq!(y_bundle_width(4), 1);
        assert_eq!(y_bundle_width(5), 2);
        assert_eq!(y_bundle_width(13), 2);
        assert_eq!(c_bundle_width(1), 3);
        assert_eq!(c_bundle_width(4), 3);
        assert_eq!(c_bundle_width(5), 4);
    }

    #[test]
    fn initialization_is_deterministic_per_seed() {
        let cfg = ModelCfg::default();
        let a = init_model(&cfg).unwrap();
        let b = init_model(&cfg).unwrap();
        assert_eq!(weights_digest(&a), weights_digest(&b));
        let other = ModelCfg { seed: 8, ..ModelCfg::default() };
        let c = init_model(&other).unwrap();
        assert_ne!(weights_digest(&a), weights_digest(&c));
    }

    #[test]
    fn chroma_seeding_copies_and_zero_extends() {
        let cfg = ModelCfg::default();
        let mut reg = init_model(&cfg).unwrap();
        // Make luma weights recognizably different from the chroma init.
        for v in reg.get_mut("ctx.y.rnn.u1.kernel").unwrap().data_mut() {
            *v = 0.5;
        }
        for v in reg.get_mut("ctx.y.fuse.i02.lower_in.kernel").unwrap().data_mut() {
            *v = 0.25;
        }
        init_chroma_from_luma(&mut reg).unwrap();
        assert!(reg.get("ctx.c.rnn.u1.kernel").unwrap().data().iter().all(|&v| v == 0.5));
        let seeded = reg.get("ctx.c.fuse.i02.lower_in.kernel").unwrap();
        // Luma bundle at step 2 is 1 channel; chroma is 3. Channel 0 copies,
        // channels 1 and 2 zero out.
        assert_eq!(seeded.shape()[1], 3);
        let kk = 9;
        for co in 0..seeded.shape()[0] {
            let base = co * 3 * kk;
            assert!(seeded.data()[base..base + kk].iter().all(|&v| v == 0.25));
            assert!(seeded.data()[base + kk..base + 3 * kk].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn weight_layout_roundtrips_through_inference() {
        for cfg in [
            ModelCfg::default(),
            ModelCfg {
                levels: 2,
                mixtures: 2,
                stack_order: StackOrder::Pipeline,
                fuse_width: 16,
                rnn_hidden: [6, 5, 4],
                lifting_width: 4,
                dequant_width: 8,
                dequant_depth: 2,
                delta_init: 0.5,
                seed: 3,
            },
        ] {
            let reg = init_model(&cfg).unwrap();
            let got = infer_cfg(&reg, &ModelCfg { seed: cfg.seed, ..ModelCfg::default() }).unwrap();
            assert_eq!(got.levels, cfg.levels);
            assert_eq!(got.mixtures, cfg.mixtures);
            assert_eq!(got.stack_order, cfg.stack_order);
            assert_eq!(got.fuse_width, cfg.fuse_width);
            assert_eq!(got.rnn_hidden, cfg.rnn_hidden);
            assert_eq!(got.lifting_width, cfg.lifting_width);
            assert_eq!(got.dequant_width, cfg.dequant_width);
            assert_eq!(got.dequant_depth, cfg.dequant_depth);
            assert_eq!(got.delta_init, cfg.delta_init);
        }
    }

    #[test]
    fn damaged_weight_sets_fail_inference() {
        let cfg = ModelCfg::default();
        let reg = init_model(&cfg).unwrap();
        let mut extra = init_model(&cfg).unwrap();
        extra.insert("stray", Tensor::scalar(1.0)).unwrap();
        assert!(infer_cfg(&extra, &cfg).is_err());
        let mut renamed = ParamRegistry::new();
        for (name, t) in reg.iter() {
            let name = if name == "dequant.tail.bias" { "dequant.tail.bias2" } else { name };
            renamed.insert(name, t.clone()).unwrap();
        }
        assert!(infer_cfg(&renamed, &cfg).is_err());
    }
}
