//! Trainable lifting-scheme wavelet transform.
//!
//! Each of the four lifting filters is a fixed 3-tap skip convolution plus a
//! small gated residual net. The residual gains start at zero, so a freshly
//! initialized transform computes the classic 9/7 filter bank exactly, and
//! the structure stays invertible for any weights: synthesis re-evaluates
//! the same filters on the same operands and undoes each add.
//!
//! Filters run on half-rate signals along the last axis with whole-sample
//! symmetric extension. Column passes transpose, filter, transpose back.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BufId, Graph, ParamRegistry, Real, Tensor};
use crate::autodiff::kernels::Pad;
use crate::error::{Error, Result};
use crate::model::{self, ModelCfg};

pub const ALPHA: f64 = -1.586134342059924;
pub const BETA: f64 = -0.052980118572961;
pub const GAMMA: f64 = 0.882911075530934;
pub const DELTA: f64 = 0.443506852043971;

/// Skip taps at half-rate offsets (-1, 0, +1). Predict filters look forward,
/// update filters look backward.
fn skip_taps(step: &str) -> [f64; 3] {
    match step {
        "p1" => [0.0, -ALPHA, -ALPHA],
        "u1" => [BETA, BETA, 0.0],
        "p2" => [0.0, -GAMMA, -GAMMA],
        "u2" => [DELTA, DELTA, 0.0],
        _ => unreachable!("unknown lifting step"),
    }
}

pub fn register_params(reg: &mut ParamRegistry, rng: &mut ChaCha8Rng, cfg: &ModelCfg) -> Result<()> {
    let lw = cfg.lifting_width;
    for step in ["p1", "u1", "p2", "u2"] {
        let taps = skip_taps(step);
        let skip: Vec<f32> = taps.iter().map(|&t| t as f32).collect();
        reg.insert(&format!("lifting.{step}.skip"), Tensor::new(vec![1, 1, 1, 3], skip)?)?;
        reg.insert(&format!("lifting.{step}.res0.kernel"), model::conv_init(rng, &[lw, 1, 1, 3]))?;
        reg.insert(&format!("lifting.{step}.res0.bias"), model::zeros_init(&[lw]))?;
        reg.insert(&format!("lifting.{step}.res1.kernel"), model::conv_init(rng, &[lw, lw, 1, 3]))?;
        reg.insert(&format!("lifting.{step}.res1.bias"), model::zeros_init(&[lw]))?;
        reg.insert(&format!("lifting.{step}.res2.kernel"), model::conv_init(rng, &[1, lw, 1, 3]))?;
        reg.insert(&format!("lifting.{step}.res2.bias"), model::zeros_init(&[1]))?;
        reg.insert(&format!("lifting.{step}.gain"), Tensor::scalar(0.0))?;
    }
    reg.insert("quant.delta", Tensor::scalar(cfg.delta_init))?;
    Ok(())
}

/// One lifting filter: skip conv plus gain-gated residual branch.
fn lifting_filter<T: Real>(g: &mut Graph<T>, x: BufId, step: &str) -> Result<BufId> {
    let skip_k = g.param(&format!("lifting.{step}.skip"))?;
    let skip = g.conv2d(x, skip_k, None, Pad::Symmetric, None)?;
    let k0 = g.param(&format!("lifting.{step}.res0.kernel"))?;
    let b0 = g.param(&format!("lifting.{step}.res0.bias"))?;
    let r = g.conv2d(x, k0, Some(b0), Pad::Symmetric, None)?;
    let r = g.tanh(r)?;
    let k1 = g.param(&format!("lifting.{step}.res1.kernel"))?;
    let b1 = g.param(&format!("lifting.{step}.res1.bias"))?;
    let r = g.conv2d(r, k1, Some(b1), Pad::Symmetric, None)?;
    let r = g.tanh(r)?;
    let k2 = g.param(&format!("lifting.{step}.res2.kernel"))?;
    let b2 = g.param(&format!("lifting.{step}.res2.bias"))?;
    let r = g.conv2d(r, k2, Some(b2), Pad::Symmetric, None)?;
    let gain = g.param(&format!("lifting.{step}.gain"))?;
    let r = g.mul_scalar_t(r, gain)?;
    g.add(skip, r)
}

/// Analysis along the last axis: [1, H, W] -> (lowpass, highpass), each half
/// width.
pub fn analyze_w<T: Real>(g: &mut Graph<T>, x: BufId) -> Result<(BufId, BufId)> {
    let even = g.deinterleave_w(x, 0)?;
    let odd = g.deinterleave_w(x, 1)?;
    let p1 = lifting_filter(g, even, "p1")?;
    let hp0 = g.sub(odd, p1)?;
    let u1 = lifting_filter(g, hp0, "u1")?;
    let even1 = g.add(even, u1)?;
    let p2 = lifting_filter(g, even1, "p2")?;
    let hp = g.sub(hp0, p2)?;
    let u2 = lifting_filter(g, hp, "u2")?;
    let lp = g.add(even1, u2)?;
    Ok((lp, hp))
}

/// Exact structural inverse of `analyze_w`.
pub fn synthesize_w<T: Real>(g: &mut Graph<T>, lp: BufId, hp: BufId) -> Result<BufId> {
    let u2 = lifting_filter(g, hp, "u2")?;
    let even1 = g.sub(lp, u2)?;
    let p2 = lifting_filter(g, even1, "p2")?;
    let hp0 = g.add(hp, p2)?;
    let u1 = lifting_filter(g, hp0, "u1")?;
    let even = g.sub(even1, u1)?;
    let p1 = lifting_filter(g, even, "p1")?;
    let odd = g.add(hp0, p1)?;
    g.interleave_w(even, odd)
}

/// One 2D analysis level: rows first, then columns of each half.
/// Returns (ll, hl, lh, hh); hl is row-highpass col-lowpass.
pub fn analyze_level<T: Real>(g: &mut Graph<T>, x: BufId) -> Result<[BufId; 4]> {
    let (lo_r, hi_r) = analyze_w(g, x)?;
    let lo_t = g.transpose_hw(lo_r)?;
    let (ll_t, lh_t) = analyze_w(g, lo_t)?;
    let hi_t = g.transpose_hw(hi_r)?;
    let (hl_t, hh_t) = analyze_w(g, hi_t)?;
    let ll = g.transpose_hw(ll_t)?;
    let lh = g.transpose_hw(lh_t)?;
    let hl = g.transpose_hw(hl_t)?;
    let hh = g.transpose_hw(hh_t)?;
    Ok([ll, hl, lh, hh])
}

pub fn synthesize_level<T: Real>(
    g: &mut Graph<T>,
    bands: [BufId; 4],
) -> Result<BufId> {
    let [ll, hl, lh, hh] = bands;
    let ll_t = g.transpose_hw(ll)?;
    let lh_t = g.transpose_hw(lh)?;
    let lo_t = synthesize_w(g, ll_t, lh_t)?;
    let lo_r = g.transpose_hw(lo_t)?;
    let hl_t = g.transpose_hw(hl)?;
    let hh_t = g.transpose_hw(hh)?;
    let hi_t = synthesize_w(g, hl_t, hh_t)?;
    let hi_r = g.transpose_hw(hi_t)?;
    synthesize_w(g, lo_r, hi_r)
}

/// Full decomposition of a [1, H, W] plane. Output is in coding order:
/// coarsest level first, LL only at the coarsest level, then HL, LH, HH per
/// level moving finer. H and W must be multiples of 2^levels.
pub fn forward_2d<T: Real>(g: &mut Graph<T>, plane: BufId, cfg: &ModelCfg) -> Result<Vec<BufId>> {
    let (_, h, w) = {
        let s = g.shape(plane);
        if s.len() != 3 || s[0] != 1 {
            return Err(Error::Shape(format!("expected [1, H, W] plane, found {s:?}")));
        }
        (s[0], s[1], s[2])
    };
    let m = 1 << cfg.levels;
    if h % m != 0 || w % m != 0 {
        return Err(Error::Shape(format!(
            "plane {h}x{w} is not a multiple of {m} required by {} levels",
            cfg.levels
        )));
    }
    let mut detail = Vec::with_capacity(cfg.levels);
    let mut ll = plane;
    for _ in 0..cfg.levels {
        let [next_ll, hl, lh, hh] = analyze_level(g, ll)?;
        detail.push([hl, lh, hh]);
        ll = next_ll;
    }
    let mut out = Vec::with_capacity(cfg.subband_count());
    out.push(ll);
    for level_bands in detail.into_iter().rev() {
        out.extend_from_slice(&level_bands);
    }
    Ok(out)
}

pub fn inverse_2d<T: Real>(g: &mut Graph<T>, subbands: &[BufId], cfg: &ModelCfg) -> Result<BufId> {
    if subbands.len() != cfg.subband_count() {
        return Err(Error::Shape(format!(
            "expected {} subbands, found {}",
            cfg.subband_count(),
            subbands.len()
        )));
    }
    let mut ll = subbands[0];
    // Detail groups sit coarsest-first after the base band.
    for group in 0..cfg.levels {
        let base = 1 + 3 * group;
        ll = synthesize_level(g, [ll, subbands[base], subbands[base + 1], subbands[base + 2]])?;
    }
    Ok(ll)
}

/// Scales by the quantizer gain and rounds. Returns the integer-valued
/// symbol tensor and the dequantized reconstruction the rest of the model
/// consumes.
pub fn quantize<T: Real>(g: &mut Graph<T>, y: BufId) -> Result<(BufId, BufId)> {
    let delta = g.param("quant.delta")?;
    let scaled = g.mul_scalar_t(y, delta)?;
    let symbols = g.round_ste(scaled)?;
    let recon = g.div_scalar_t(symbols, delta)?;
    Ok((symbols, recon))
}

/// Converts a rounded symbol tensor to i16, refusing out-of-range values.
pub fn extract_symbols<T: Real>(data: &[T]) -> Result<Vec<i16>> {
    let mut out = Vec::with_capacity(data.len());
    for &v in data {
        let v = v.to_f64();
        if v.abs() > i16::MAX as f64 {
            return Err(Error::Numeric(format!(
                "quantized symbol {v} exceeds the 16-bit alphabet"
            )));
        }
        out.push(v as i16);
    }
    Ok(out)
}
