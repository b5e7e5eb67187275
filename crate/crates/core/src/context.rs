//! Cross-component recurrent context model.
//!
//! A stack of convolutional LSTM units consumes subbands as they are coded
//! and carries long-term context across scales and components. Per subband,
//! a fusion trunk combines that context with a strictly causal masked view
//! of the subband being coded and emits raw mixture parameters.
//!
//! Everything exists twice on purpose. The graph builders are
//! differentiable and drive training. The plain f32 path below them is
//! shared verbatim by encoder and decoder, so coded bitstreams depend only
//! on deterministic scalar arithmetic; parity between the two paths is
//! asserted bit-for-bit in the tests.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::graph::sigmoid;
use crate::autodiff::kernels::{self, ConvDims, Mask, Pad};
use crate::autodiff::{BufId, Graph, ParamRegistry, ParamSnapshot, Real, Tensor};
use crate::error::{Error, Result};
use crate::model::{self, ModelCfg, StackOrder, SubbandKind};

/// Initial log standard deviation of the mixture heads, ln 32.
const LOG_SIGMA_INIT: f32 = 3.465_735_9;

/// Input channel width of each recurrent unit, indexed by unit - 1.
pub fn unit_input_widths(cfg: &ModelCfg) -> [usize; 3] {
    let [h1, h2, h3] = cfg.rnn_hidden;
    match cfg.stack_order {
        StackOrder::InsideOut => [h2, h3, 1],
        StackOrder::Pipeline => [1, h1, h2],
    }
}

/// Unit indices (0-based) in the order they consume data.
pub fn consume_order(cfg: &ModelCfg) -> [usize; 3] {
    match cfg.stack_order {
        StackOrder::InsideOut => [2, 1, 0],
        StackOrder::Pipeline => [0, 1, 2],
    }
}

/// Context channels expected by the fusion trunk of `group` at subband `i`.
pub fn bundle_width(group: &str, i: usize) -> Result<usize> {
    match group {
        "y" => Ok(model::y_bundle_width(i)),
        "c" => Ok(model::c_bundle_width(i)),
        other => Err(Error::Config(format!("unknown context group {other:?}"))),
    }
}

/// Prediction channel feeding a subband of the given orientation.
pub fn kind_channel(kind: SubbandKind) -> usize {
    match kind {
        SubbandKind::Ll | SubbandKind::Hl => 0,
        SubbandKind::Lh => 1,
        SubbandKind::Hh => 2,
    }
}

fn masked_init(rng: &mut ChaCha8Rng, cout: usize, cin: usize, mask: Mask) -> Tensor {
    let mut t = model::conv_init(rng, &[cout, cin, 3, 3]);
    let data = t.data_mut();
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..3 {
                for kx in 0..3 {
                    if !mask.allows(ky, kx) {
                        data[((co * cin + ci) * 3 + ky) * 3 + kx] = 0.0;
                    }
                }
            }
        }
    }
    t
}

/// Registers the recurrent stack and all fusion trunks of one group.
pub fn register_params(
    reg: &mut ParamRegistry,
    rng: &mut ChaCha8Rng,
    cfg: &ModelCfg,
    group: &str,
) -> Result<()> {
    let widths = unit_input_widths(cfg);
    for u in 0..3 {
        let h = cfg.rnn_hidden[u];
        let kernel = model::conv_init(rng, &[4 * h, widths[u] + h, 3, 3]);
        let mut bias = model::zeros_init(&[4 * h]);
        // Forget gates open at the start so early training keeps memory.
        bias.data_mut()[h..2 * h].fill(1.0);
        reg.insert(&format!("ctx.{group}.rnn.u{}.kernel", u + 1), kernel)?;
        reg.insert(&format!("ctx.{group}.rnn.u{}.bias", u + 1), bias)?;
    }
    let f = cfg.fuse_width;
    let k3 = 3 * cfg.mixtures;
    for i in 1..=cfg.subband_count() {
        let p = model::fuse_prefix(group, i);
        let bw = bundle_width(group, i)?;
        if bw > 0 {
            reg.insert(&format!("{p}.lower_in.kernel"), model::conv_init(rng, &[f, bw, 3, 3]))?;
            reg.insert(&format!("{p}.lower_in.bias"), model::zeros_init(&[f]))?;
            for rb in ["rb1", "rb2"] {
                reg.insert(&format!("{p}.{rb}.conv0.kernel"), model::conv_init(rng, &[f, f, 3, 3]))?;
                reg.insert(&format!("{p}.{rb}.conv0.bias"), model::zeros_init(&[f]))?;
                reg.insert(&format!("{p}.{rb}.conv1.kernel"), model::conv_init(rng, &[f, f, 3, 3]))?;
                reg.insert(&format!("{p}.{rb}.conv1.bias"), model::zeros_init(&[f]))?;
            }
        }
        reg.insert(&format!("{p}.maskA.kernel"), masked_init(rng, f, 1, Mask::A))?;
        reg.insert(&format!("{p}.maskA.bias"), model::zeros_init(&[f]))?;
        reg.insert(&format!("{p}.maskB.kernel"), masked_init(rng, f, f, Mask::B))?;
        reg.insert(&format!("{p}.maskB.bias"), model::zeros_init(&[f]))?;
        reg.insert(&format!("{p}.head0.kernel"), model::conv_init(rng, &[f, f, 1, 1]))?;
        reg.insert(&format!("{p}.head0.bias"), model::zeros_init(&[f]))?;
        reg.insert(&format!("{p}.head1.kernel"), model::conv_init(rng, &[k3, f, 1, 1]))?;
        let mut hb = model::zeros_init(&[k3]);
        // Wide initial deviations keep early bin masses off the floor.
        hb.data_mut()[2 * cfg.mixtures..].fill(LOG_SIGMA_INIT);
        reg.insert(&format!("{p}.head1.bias"), hb)?;
    }
    Ok(())
}

/// Registers the shared scale upsampler, initialized to exact nearest ×2.
pub fn register_upsampler(reg: &mut ParamRegistry) -> Result<()> {
    let mut k = model::zeros_init(&[1, 1, 3, 3]);
    k.data_mut()[4] = 1.0;
    reg.insert("ctx.up.kernel", k)?;
    reg.insert("ctx.up.bias", model::zeros_init(&[1]))?;
    Ok(())
}

/// Recurrent state as graph buffers; index u holds unit u+1.
#[derive(Clone, Copy)]
pub struct StateNodes {
    pub h: [BufId; 3],
    pub c: [BufId; 3],
}

pub fn fresh_state_nodes<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelCfg,
    h: usize,
    w: usize,
) -> Result<StateNodes> {
    let h1 = g.zeros(&[cfg.rnn_hidden[0], h, w])?;
    let h2 = g.zeros(&[cfg.rnn_hidden[1], h, w])?;
    let h3 = g.zeros(&[cfg.rnn_hidden[2], h, w])?;
    let c1 = g.zeros(&[cfg.rnn_hidden[0], h, w])?;
    let c2 = g.zeros(&[cfg.rnn_hidden[1], h, w])?;
    let c3 = g.zeros(&[cfg.rnn_hidden[2], h, w])?;
    Ok(StateNodes { h: [h1, h2, h3], c: [c1, c2, c3] })
}

fn cell_step<T: Real>(
    g: &mut Graph<T>,
    group: &str,
    unit: usize,
    hch: usize,
    x: BufId,
    h: BufId,
    c: BufId,
) -> Result<(BufId, BufId)> {
    let cat = g.concat_c(&[x, h])?;
    let k = g.param(&format!("ctx.{group}.rnn.u{}.kernel", unit + 1))?;
    let b = g.param(&format!("ctx.{group}.rnn.u{}.bias", unit + 1))?;
    let gates = g.conv2d(cat, k, Some(b), Pad::Symmetric, None)?;
    let i = g.slice_c(gates, 0, hch)?;
    let i = g.sigmoid(i)?;
    let f = g.slice_c(gates, hch, 2 * hch)?;
    let f = g.sigmoid(f)?;
    let cand = g.slice_c(gates, 2 * hch, 3 * hch)?;
    let cand = g.tanh(cand)?;
    let o = g.slice_c(gates, 3 * hch, 4 * hch)?;
    let o = g.sigmoid(o)?;
    let fc = g.mul(f, c)?;
    let ig = g.mul(i, cand)?;
    let c2 = g.add(fc, ig)?;
    let tc = g.tanh(c2)?;
    let h2 = g.mul(o, tc)?;
    Ok((h2, c2))
}

/// One consumption step: the stack reads a 1-channel subband map.
pub fn rnn_step<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelCfg,
    group: &str,
    state: &StateNodes,
    input: BufId,
) -> Result<StateNodes> {
    let mut next = *state;
    let mut feed = input;
    for &u in consume_order(cfg).iter() {
        let (h2, c2) = cell_step(g, group, u, cfg.rnn_hidden[u], feed, state.h[u], state.c[u])?;
        next.h[u] = h2;
        next.c[u] = c2;
        feed = h2;
    }
    Ok(next)
}

/// Doubles the spatial dims of every state map at a scale boundary.
pub fn level_transition<T: Real>(g: &mut Graph<T>, state: &StateNodes) -> Result<StateNodes> {
    let mut next = *state;
    for u in 0..3 {
        next.h[u] = g.upsample2x(state.h[u])?;
        next.c[u] = g.upsample2x(state.c[u])?;
    }
    Ok(next)
}

/// The 3-channel prediction source: the narrow unit's hidden state.
pub fn prediction<T: Real>(state: &StateNodes) -> BufId {
    state.h[2]
}

/// Picks the prediction channel matching the target orientation.
pub fn select_prediction<T: Real>(
    g: &mut Graph<T>,
    state: &StateNodes,
    kind: SubbandKind,
) -> Result<BufId> {
    let ch = kind_channel(kind);
    g.slice_c(state.h[2], ch, ch + 1)
}

/// Nearest ×2 followed by the shared learned 3x3 refinement.
pub fn learned_upsample<T: Real>(g: &mut Graph<T>, x: BufId) -> Result<BufId> {
    let up = g.upsample2x(x)?;
    let k = g.param("ctx.up.kernel")?;
    let b = g.param("ctx.up.bias")?;
    g.conv2d(up, k, Some(b), Pad::Symmetric, None)
}

fn resblock<T: Real>(g: &mut Graph<T>, prefix: &str, name: &str, x: BufId) -> Result<BufId> {
    let k0 = g.param(&format!("{prefix}.{name}.conv0.kernel"))?;
    let b0 = g.param(&format!("{prefix}.{name}.conv0.bias"))?;
    let t = g.conv2d(x, k0, Some(b0), Pad::Symmetric, None)?;
    let t = g.tanh(t)?;
    let k1 = g.param(&format!("{prefix}.{name}.conv1.kernel"))?;
    let b1 = g.param(&format!("{prefix}.{name}.conv1.bias"))?;
    let t = g.conv2d(t, k1, Some(b1), Pad::Symmetric, None)?;
    g.add(x, t)
}

/// Fusion trunk for subband `i`: raw mixture parameters [3K, H, W].
///
/// `current` is the subband being coded (dequantized values); parameters at
/// any position depend on it only strictly before that position in raster
/// order. `bundle` carries the non-causal context and must match the
/// group's width table, which is zero for the very first subband of luma.
pub fn fuse<T: Real>(
    g: &mut Graph<T>,
    group: &str,
    i: usize,
    current: BufId,
    bundle: Option<BufId>,
) -> Result<BufId> {
    let p = model::fuse_prefix(group, i);
    let expected = bundle_width(group, i)?;
    let lower = match (bundle, expected) {
        (None, 0) => None,
        (Some(_), 0) => {
            return Err(Error::Shape(format!("{group} subband {i} takes no context bundle")))
        }
        (None, n) => {
            return Err(Error::Shape(format!("{group} subband {i} needs a {n}-channel bundle")))
        }
        (Some(b), n) => {
            let got = g.shape(b)[0];
            if got != n {
                return Err(Error::Shape(format!(
                    "context bundle for {group} subband {i} has {got} channels, needs {n}"
                )));
            }
            let k = g.param(&format!("{p}.lower_in.kernel"))?;
            let bias = g.param(&format!("{p}.lower_in.bias"))?;
            let r0 = g.conv2d(b, k, Some(bias), Pad::Symmetric, None)?;
            let r1 = resblock(g, &p, "rb1", r0)?;
            let r2 = resblock(g, &p, "rb2", r1)?;
            Some((r1, r2))
        }
    };
    let ka = g.param(&format!("{p}.maskA.kernel"))?;
    let ba = g.param(&format!("{p}.maskA.bias"))?;
    let a = g.conv2d(current, ka, Some(ba), Pad::Zero, Some(Mask::A))?;
    let t1 = match lower {
        Some((r1, _)) => {
            let s = g.add(a, r1)?;
            g.tanh(s)?
        }
        None => g.tanh(a)?,
    };
    let kb = g.param(&format!("{p}.maskB.kernel"))?;
    let bb = g.param(&format!("{p}.maskB.bias"))?;
    let bmap = g.conv2d(t1, kb, Some(bb), Pad::Zero, Some(Mask::B))?;
    let t2 = match lower {
        Some((_, r2)) => {
            let s = g.add(bmap, r2)?;
            g.tanh(s)?
        }
        None => g.tanh(bmap)?,
    };
    let k0 = g.param(&format!("{p}.head0.kernel"))?;
    let b0 = g.param(&format!("{p}.head0.bias"))?;
    let hid = g.conv2d(t2, k0, Some(b0), Pad::Zero, None)?;
    let hid = g.tanh(hid)?;
    let k1 = g.param(&format!("{p}.head1.kernel"))?;
    let b1 = g.param(&format!("{p}.head1.bias"))?;
    g.conv2d(hid, k1, Some(b1), Pad::Zero, None)
}

/// Dense channel-major f32 map used on the coding path.
#[derive(Clone, Debug)]
pub struct FeatMap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl FeatMap {
    pub fn zeros(c: usize, h: usize, w: usize) -> FeatMap {
        FeatMap { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn from_plane(data: Vec<f32>, h: usize, w: usize) -> Result<FeatMap> {
        if data.len() != h * w {
            return Err(Error::Shape(format!("plane of {} values is not {h}x{w}", data.len())));
        }
        Ok(FeatMap { c: 1, h, w, data })
    }

    pub fn channel(&self, i: usize) -> &[f32] {
        let plane = self.h * self.w;
        &self.data[i * plane..(i + 1) * plane]
    }
}

fn snap_kernel(
    snap: &ParamSnapshot<f32>,
    name: &str,
) -> Result<(Arc<[f32]>, usize, usize, usize, usize)> {
    let e = snap.get(name)?;
    if e.shape.len() != 4 {
        return Err(Error::Shape(format!("{name} is not a convolution kernel: {:?}", e.shape)));
    }
    Ok((e.data.clone(), e.shape[0], e.shape[1], e.shape[2], e.shape[3]))
}

fn conv_map(
    snap: &ParamSnapshot<f32>,
    kernel: &str,
    bias: Option<&str>,
    x: &FeatMap,
    pad: Pad,
    mask: Option<Mask>,
) -> Result<FeatMap> {
    let (k, cout, cin, kh, kw) = snap_kernel(snap, kernel)?;
    if cin != x.c {
        return Err(Error::Shape(format!(
            "{kernel} expects {cin} input channels, map has {}",
            x.c
        )));
    }
    let b = match bias {
        Some(n) => Some(snap.get(n)?.data.clone()),
        None => None,
    };
    let dims = ConvDims { batch: 1, cin, cout, h: x.h, w: x.w, kh, kw };
    let mut out = vec![0.0f32; cout * x.h * x.w];
    kernels::conv2d_stable(dims, &x.data, &k, b.as_deref(), pad, mask, &mut out);
    Ok(FeatMap { c: cout, h: x.h, w: x.w, data: out })
}

fn resblock_map(
    snap: &ParamSnapshot<f32>,
    prefix: &str,
    name: &str,
    x: &FeatMap,
) -> Result<FeatMap> {
    let mut t = conv_map(
        snap,
        &format!("{prefix}.{name}.conv0.kernel"),
        Some(&format!("{prefix}.{name}.conv0.bias")),
        x,
        Pad::Symmetric,
        None,
    )?;
    for v in t.data.iter_mut() {
        *v = v.tanh();
    }
    let mut t = conv_map(
        snap,
        &format!("{prefix}.{name}.conv1.kernel"),
        Some(&format!("{prefix}.{name}.conv1.bias")),
        &t,
        Pad::Symmetric,
        None,
    )?;
    for (o, &i) in t.data.iter_mut().zip(x.data.iter()) {
        *o = i + *o;
    }
    Ok(t)
}

/// Recurrent state on the coding path; index u holds unit u+1.
#[derive(Clone, Debug)]
pub struct StateMaps {
    pub h: [FeatMap; 3],
    pub c: [FeatMap; 3],
}

pub fn fresh_state_maps(cfg: &ModelCfg, h: usize, w: usize) -> StateMaps {
    let mk = |u: usize| FeatMap::zeros(cfg.rnn_hidden[u], h, w);
    StateMaps { h: [mk(0), mk(1), mk(2)], c: [mk(0), mk(1), mk(2)] }
}

pub(crate) fn concat_maps(a: &FeatMap, b: &FeatMap) -> FeatMap {
    debug_assert!(a.h == b.h && a.w == b.w);
    let mut data = Vec::with_capacity((a.c + b.c) * a.h * a.w);
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    FeatMap { c: a.c + b.c, h: a.h, w: a.w, data }
}

/// Coding-path mirror of [`rnn_step`]; bit-identical to the graph in
/// coding mode.
pub fn rnn_step_maps(
    snap: &ParamSnapshot<f32>,
    cfg: &ModelCfg,
    group: &str,
    state: &StateMaps,
    input: &FeatMap,
) -> Result<StateMaps> {
    let mut next = state.clone();
    let mut feed = input.clone();
    for &u in consume_order(cfg).iter() {
        let hch = cfg.rnn_hidden[u];
        if state.h[u].h != feed.h || state.h[u].w != feed.w {
            return Err(Error::Shape(format!(
                "state is {}x{}, unit input is {}x{}",
                state.h[u].h, state.h[u].w, feed.h, feed.w
            )));
        }
        let cat = concat_maps(&feed, &state.h[u]);
        let gates = conv_map(
            snap,
            &format!("ctx.{group}.rnn.u{}.kernel", u + 1),
            Some(&format!("ctx.{group}.rnn.u{}.bias", u + 1)),
            &cat,
            Pad::Symmetric,
            None,
        )?;
        let plane = feed.h * feed.w;
        let mut hn = FeatMap::zeros(hch, feed.h, feed.w);
        let mut cn = FeatMap::zeros(hch, feed.h, feed.w);
        for ch in 0..hch {
            for j in 0..plane {
                let iv = sigmoid(gates.data[ch * plane + j]);
                let fv = sigmoid(gates.data[(hch + ch) * plane + j]);
                let cand = gates.data[(2 * hch + ch) * plane + j].tanh();
                let ov = sigmoid(gates.data[(3 * hch + ch) * plane + j]);
                let cv = fv * state.c[u].data[ch * plane + j] + iv * cand;
                cn.data[ch * plane + j] = cv;
                hn.data[ch * plane + j] = ov * cv.tanh();
            }
        }
        next.c[u] = cn;
        next.h[u] = hn;
        feed = next.h[u].clone();
    }
    Ok(next)
}

pub fn upsample2x_map(x: &FeatMap) -> FeatMap {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut out = FeatMap::zeros(x.c, h2, w2);
    for c in 0..x.c {
        for y in 0..h2 {
            for xx in 0..w2 {
                out.data[(c * h2 + y) * w2 + xx] = x.data[(c * x.h + y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn level_transition_maps(state: &StateMaps) -> StateMaps {
    let up = |m: &FeatMap| upsample2x_map(m);
    StateMaps {
        h: [up(&state.h[0]), up(&state.h[1]), up(&state.h[2])],
        c: [up(&state.c[0]), up(&state.c[1]), up(&state.c[2])],
    }
}

pub fn learned_upsample_map(snap: &ParamSnapshot<f32>, x: &FeatMap) -> Result<FeatMap> {
    let up = upsample2x_map(x);
    conv_map(snap, "ctx.up.kernel", Some("ctx.up.bias"), &up, Pad::Symmetric, None)
}

/// Extracts the prediction channel for the target orientation.
pub fn prediction_map(state: &StateMaps, kind: SubbandKind) -> FeatMap {
    let src = &state.h[2];
    let ch = kind_channel(kind);
    FeatMap { c: 1, h: src.h, w: src.w, data: src.channel(ch).to_vec() }
}

struct FuseWeights {
    ka: Arc<[f32]>,
    ba: Arc<[f32]>,
    kb: Arc<[f32]>,
    bb: Arc<[f32]>,
    k0: Arc<[f32]>,
    b0: Arc<[f32]>,
    k1: Arc<[f32]>,
    b1: Arc<[f32]>,
}

/// Incremental causal evaluation of one subband's fusion trunk.
///
/// Encoder and decoder drive the same object identically: ask for the raw
/// mixture parameters at the next raster position, code one symbol, push
/// the dequantized value back. The non-causal lower path is fixed up
/// front; causal activations are memoized per position, which keeps a full
/// subband pass linear in pixels.
pub struct SubbandCoder {
    weights: FuseWeights,
    fw: usize,
    k3: usize,
    h: usize,
    w: usize,
    lower: Option<(FeatMap, FeatMap)>,
    cur: FeatMap,
    t1: FeatMap,
    t1_done: Vec<bool>,
    scratch: Vec<f32>,
    hidden: Vec<f32>,
    raw: Vec<f32>,
}

impl SubbandCoder {
    pub fn new(
        snap: &ParamSnapshot<f32>,
        group: &str,
        i: usize,
        bundle: Option<&FeatMap>,
        h: usize,
        w: usize,
    ) -> Result<SubbandCoder> {
        let p = model::fuse_prefix(group, i);
        let expected = bundle_width(group, i)?;
        let lower = match (bundle, expected) {
            (None, 0) => None,
            (Some(_), 0) => {
                return Err(Error::Shape(format!("{group} subband {i} takes no context bundle")))
            }
            (None, n) => {
                return Err(Error::Shape(format!("{group} subband {i} needs a {n}-channel bundle")))
            }
            (Some(b), n) => {
                if b.c != n || b.h != h || b.w != w {
                    return Err(Error::Shape(format!(
                        "bundle {}x{}x{} for {group} subband {i}, needs {n}x{h}x{w}",
                        b.c, b.h, b.w
                    )));
                }
                let r0 = conv_map(
                    snap,
                    &format!("{p}.lower_in.kernel"),
                    Some(&format!("{p}.lower_in.bias")),
                    b,
                    Pad::Symmetric,
                    None,
                )?;
                let r1 = resblock_map(snap, &p, "rb1", &r0)?;
                let r2 = resblock_map(snap, &p, "rb2", &r1)?;
                Some((r1, r2))
            }
        };
        let (ka, fw, cin_a, _, _) = snap_kernel(snap, &format!("{p}.maskA.kernel"))?;
        if cin_a != 1 {
            return Err(Error::Shape(format!("mask A of {p} must read one channel")));
        }
        let ba = snap.get(&format!("{p}.maskA.bias"))?.data.clone();
        let (kb, _, _, _, _) = snap_kernel(snap, &format!("{p}.maskB.kernel"))?;
        let bb = snap.get(&format!("{p}.maskB.bias"))?.data.clone();
        let (k0, _, _, _, _) = snap_kernel(snap, &format!("{p}.head0.kernel"))?;
        let b0 = snap.get(&format!("{p}.head0.bias"))?.data.clone();
        let (k1, k3, _, _, _) = snap_kernel(snap, &format!("{p}.head1.kernel"))?;
        let b1 = snap.get(&format!("{p}.head1.bias"))?.data.clone();
        Ok(SubbandCoder {
            weights: FuseWeights { ka, ba, kb, bb, k0, b0, k1, b1 },
            fw,
            k3,
            h,
            w,
            lower,
            cur: FeatMap::zeros(1, h, w),
            t1: FeatMap::zeros(fw, h, w),
            t1_done: vec![false; h * w],
            scratch: vec![0.0; fw],
            hidden: vec![0.0; fw],
            raw: vec![0.0; k3],
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn raw_len(&self) -> usize {
        self.k3
    }

    fn ensure_t1(&mut self, y: usize, x: usize) {
        let pos = y * self.w + x;
        if self.t1_done[pos] {
            return;
        }
        kernels::conv_at(
            &self.cur.data,
            1,
            self.h,
            self.w,
            &self.weights.ka,
            self.fw,
            3,
            3,
            Some(&self.weights.ba),
            Pad::Zero,
            Some(Mask::A),
            y,
            x,
            &mut self.scratch,
        );
        let plane = self.h * self.w;
        match &self.lower {
            Some((r1, _)) => {
                for f in 0..self.fw {
                    self.t1.data[f * plane + pos] =
                        (self.scratch[f] + r1.data[f * plane + pos]).tanh();
                }
            }
            None => {
                for f in 0..self.fw {
                    self.t1.data[f * plane + pos] = self.scratch[f].tanh();
                }
            }
        }
        self.t1_done[pos] = true;
    }

    /// Raw mixture parameters at (y, x); the position itself must not have
    /// been pushed yet.
    pub fn raw_params_at(&mut self, y: usize, x: usize) -> Result<&[f32]> {
        if y >= self.h || x >= self.w {
            return Err(Error::Shape(format!(
                "position ({y}, {x}) outside {}x{} subband",
                self.h, self.w
            )));
        }
        if y > 0 {
            if x > 0 {
                self.ensure_t1(y - 1, x - 1);
            }
            self.ensure_t1(y - 1, x);
            if x + 1 < self.w {
                self.ensure_t1(y - 1, x + 1);
            }
        }
        if x > 0 {
            self.ensure_t1(y, x - 1);
        }
        self.ensure_t1(y, x);
        kernels::conv_at(
            &self.t1.data,
            self.fw,
            self.h,
            self.w,
            &self.weights.kb,
            self.fw,
            3,
            3,
            Some(&self.weights.bb),
            Pad::Zero,
            Some(Mask::B),
            y,
            x,
            &mut self.scratch,
        );
        let pos = y * self.w + x;
        let plane = self.h * self.w;
        match &self.lower {
            Some((_, r2)) => {
                for f in 0..self.fw {
                    self.scratch[f] = (self.scratch[f] + r2.data[f * plane + pos]).tanh();
                }
            }
            None => {
                for f in 0..self.fw {
                    self.scratch[f] = self.scratch[f].tanh();
                }
            }
        }
        kernels::conv_at(
            &self.scratch,
            self.fw,
            1,
            1,
            &self.weights.k0,
            self.fw,
            1,
            1,
            Some(&self.weights.b0),
            Pad::Zero,
            None,
            0,
            0,
            &mut self.hidden,
        );
        for v in self.hidden.iter_mut() {
            *v = v.tanh();
        }
        kernels::conv_at(
            &self.hidden,
            self.fw,
            1,
            1,
            &self.weights.k1,
            self.k3,
            1,
            1,
            Some(&self.weights.b1),
            Pad::Zero,
            None,
            0,
            0,
            &mut self.raw,
        );
        Ok(&self.raw)
    }

    /// Records the dequantized value of a just-coded position.
    pub fn push(&mut self, y: usize, x: usize, value: f32) {
        self.cur.data[y * self.w + x] = value;
    }
}
