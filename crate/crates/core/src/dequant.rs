//! Post-inverse reconstruction network.
//!
//! A narrow residual net applied per component plane after synthesis. The
//! tail convolution starts at zero, so an untrained net is exactly the
//! identity and training only ever learns a correction.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::kernels::Pad;
use crate::autodiff::{BufId, Graph, ParamRegistry, Real};
use crate::error::Result;
use crate::model::{self, ModelCfg};

pub fn register_params(reg: &mut ParamRegistry, rng: &mut ChaCha8Rng, cfg: &ModelCfg) -> Result<()> {
    let w = cfg.dequant_width;
    reg.insert("dequant.head.kernel", model::conv_init(rng, &[w, 1, 3, 3]))?;
    reg.insert("dequant.head.bias", model::zeros_init(&[w]))?;
    for r in 0..cfg.dequant_depth {
        reg.insert(&format!("dequant.res{r}.conv0.kernel"), model::conv_init(rng, &[w, w, 3, 3]))?;
        reg.insert(&format!("dequant.res{r}.conv0.bias"), model::zeros_init(&[w]))?;
        reg.insert(&format!("dequant.res{r}.conv1.kernel"), model::conv_init(rng, &[w, w, 3, 3]))?;
        reg.insert(&format!("dequant.res{r}.conv1.bias"), model::zeros_init(&[w]))?;
    }
    reg.insert("dequant.tail.kernel", model::zeros_init(&[1, w, 3, 3]))?;
    reg.insert("dequant.tail.bias", model::zeros_init(&[1]))?;
    Ok(())
}

/// Applies the net to one [1, H, W] plane.
pub fn apply<T: Real>(g: &mut Graph<T>, x: BufId, cfg: &ModelCfg) -> Result<BufId> {
    let hk = g.param("dequant.head.kernel")?;
    let hb = g.param("dequant.head.bias")?;
    let mut f = g.conv2d(x, hk, Some(hb), Pad::Symmetric, None)?;
    for r in 0..cfg.dequant_depth {
        let k0 = g.param(&format!("dequant.res{r}.conv0.kernel"))?;
        let b0 = g.param(&format!("dequant.res{r}.conv0.bias"))?;
        let t = g.conv2d(f, k0, Some(b0), Pad::Symmetric, None)?;
        let t = g.tanh(t)?;
        let k1 = g.param(&format!("dequant.res{r}.conv1.kernel"))?;
        let b1 = g.param(&format!("dequant.res{r}.conv1.bias"))?;
        let t = g.conv2d(t, k1, Some(b1), Pad::Symmetric, None)?;
        f = g.add(f, t)?;
    }
    let tk = g.param("dequant.tail.kernel")?;
    let tb = g.param("dequant.tail.bias")?;
    let corr = g.conv2d(f, tk, Some(tb), Pad::Symmetric, None)?;
    g.add(x, corr)
}
