//! End-to-end encode and decode pipelines.
//!
//! One scheduler drives the whole subband pass: it walks components in
//! Y, Cb, Cr order, assembles each subband's context bundle, evaluates the
//! causal fusion trunk position by position, and hands every position's
//! integer table to a symbol adapter. The encoder adapter feeds known
//! symbols into the range coder; the decoder adapter pulls them out. All
//! distribution math lives on the shared path, so the two sides cannot
//! diverge.
//!
//! The graph-side mirror of the same schedule ([`luma_pass`],
//! [`chroma_pass`]) produces differentiable code-length estimates for
//! training.

use std::sync::Arc;

use crate::autodiff::weights::weights_digest;
use crate::autodiff::{BufId, Graph, GraphFlags, ParamRegistry, ParamSnapshot, Real, TrainFilter};
use crate::bitstream::{self, Header, FLAG_CONTEXT_DISABLED};
use crate::coder::{self, RangeDecoder, RangeEncoder};
use crate::context::{self, FeatMap, StateMaps, StateNodes, SubbandCoder};
use crate::dequant;
use crate::entropy::{self, GmmPoint};
use crate::error::{Error, Result};
use crate::lifting;
use crate::model::{self, ModelCfg};
use crate::pixel::{self, ImageU8, Planes};

pub struct Codec {
    cfg: ModelCfg,
    snap: Arc<ParamSnapshot<f32>>,
    digest: u64,
    delta: f32,
}

#[derive(Debug, Clone)]
pub struct EncodeStats {
    /// Integer-table code length per component and subband, in bits. Sums
    /// to the payload size up to coder flush and checksum overhead.
    pub subband_bits: [Vec<f64>; 3],
    /// Model cross-entropy of the coded symbols per component, in bits.
    /// Diverges from `subband_bits` when the model spreads mass outside
    /// the coded alphabet; the table renormalizes that away.
    pub model_bits: [f64; 3],
    pub payload_bytes: usize,
    pub stream_bytes: usize,
}

impl EncodeStats {
    /// Total code length the integer tables charge, in bits.
    pub fn estimate_bits(&self) -> f64 {
        self.subband_bits.iter().flatten().sum()
    }
}

pub struct EncodeResult {
    pub stream: Vec<u8>,
    /// The reconstruction a decoder will produce, bit for bit.
    pub recon: ImageU8,
    pub symbols: [Vec<Vec<i16>>; 3],
    pub stats: EncodeStats,
}

pub struct DecodeResult {
    pub image: ImageU8,
    pub symbols: [Vec<Vec<i16>>; 3],
}

impl Codec {
    pub fn new(reg: &ParamRegistry, cfg: &ModelCfg) -> Result<Codec> {
        cfg.validate()?;
        let digest = weights_digest(reg);
        let snap = reg.snapshot::<f32>();
        let delta = snap.get("quant.delta")?.data[0];
        if !delta.is_finite() || delta <= 0.0 {
            return Err(Error::Numeric(format!("quantizer gain {delta} is unusable")));
        }
        Ok(Codec { cfg: cfg.clone(), snap, digest, delta })
    }

    pub fn cfg(&self) -> &ModelCfg {
        &self.cfg
    }

    pub fn digest(&self) -> u64 {
        self.digest
    }

    fn graph(&self) -> Graph<f32> {
        let flags = GraphFlags { round_as_identity: false, coding_mode: true };
        Graph::new(self.snap.clone(), TrainFilter::None, flags)
    }

    pub fn encode(&self, img: &ImageU8, context_disabled: bool) -> Result<EncodeResult> {
        if img.w < 2 || img.h < 2 {
            return Err(Error::Shape(format!("{}x{} image is too small to code", img.w, img.h)));
        }
        let planes = pixel::rgb_to_planes(img);
        let m = 1usize << self.cfg.levels;
        let (py, pw, ph) = pixel::pad_reflect(&planes.y, img.w, img.h, m);
        let (pcb, _, _) = pixel::pad_reflect(&planes.cb, img.w, img.h, m);
        let (pcr, _, _) = pixel::pad_reflect(&planes.cr, img.w, img.h, m);

        let count = self.cfg.subband_count();
        let mut symbols: [Vec<Vec<i16>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        let mut bounds: [Vec<(i16, i16)>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for (ci, plane) in [py, pcb, pcr].into_iter().enumerate() {
            let mut g = self.graph();
            let xb = g.input(&[1, ph, pw], plane)?;
            let bands = lifting::forward_2d(&mut g, xb, &self.cfg)?;
            for &b in &bands {
                let (sym, _) = lifting::quantize(&mut g, b)?;
                let s = lifting::extract_symbols(g.data(sym))?;
                let lo = *s.iter().min().expect("subbands are never empty");
                let hi = *s.iter().max().expect("subbands are never empty");
                bounds[ci].push((lo, hi));
                symbols[ci].push(s);
            }
        }

        let mut io = EncoderIo {
            symbols: &symbols,
            enc: RangeEncoder::new(),
            subband_bits: [vec![0.0; count], vec![0.0; count], vec![0.0; count]],
            model_bits: [0.0; 3],
        };
        let recon = self.run_schedule(ph, pw, self.delta, context_disabled, &bounds, &mut io)?;
        let payload = coder::seal_payload(&io.enc.finish());

        let header = Header {
            flags: if context_disabled { FLAG_CONTEXT_DISABLED } else { 0 },
            orig_w: img.w as u32,
            orig_h: img.h as u32,
            padded_w: pw as u32,
            padded_h: ph as u32,
            levels: self.cfg.levels as u8,
            mixtures: self.cfg.mixtures as u8,
            delta: self.delta,
            weights_digest: self.digest,
            bounds,
        };
        let stats = EncodeStats {
            subband_bits: io.subband_bits,
            model_bits: io.model_bits,
            payload_bytes: payload.len(),
            stream_bytes: 0,
        };
        let stream = bitstream::encode_stream(&header, &payload)?;
        let recon_img = self.reconstruct(&recon, pw, img.w, img.h)?;
        Ok(EncodeResult {
            stats: EncodeStats { stream_bytes: stream.len(), ..stats },
            stream,
            recon: recon_img,
            symbols,
        })
    }

    pub fn decode(&self, stream: &[u8], force: bool) -> Result<ImageU8> {
        Ok(self.decode_full(stream, force)?.image)
    }

    pub fn decode_full(&self, stream: &[u8], force: bool) -> Result<DecodeResult> {
        let (header, payload) = bitstream::parse_stream(stream)?;
        if header.weights_digest != self.digest && !force {
            return Err(Error::DigestMismatch { stream: header.weights_digest, model: self.digest });
        }
        if header.levels as usize != self.cfg.levels
            || header.mixtures as usize != self.cfg.mixtures
        {
            return Err(Error::Format(format!(
                "stream was coded with levels={} mixtures={}, loaded model expects levels={} mixtures={}",
                header.levels, header.mixtures, self.cfg.levels, self.cfg.mixtures
            )));
        }
        let (pw, ph) = (header.padded_w as usize, header.padded_h as usize);
        let rc = coder::open_payload(payload)?;
        let mut io = DecoderIo {
            dec: RangeDecoder::new(rc)?,
            symbols: [Vec::new(), Vec::new(), Vec::new()],
        };
        let recon = self.run_schedule(
            ph,
            pw,
            header.delta,
            header.context_disabled(),
            &header.bounds,
            &mut io,
        )?;
        if io.dec.consumed() != rc.len() {
            return Err(Error::Format(format!(
                "payload has {} unread bytes after the last symbol",
                rc.len() - io.dec.consumed()
            )));
        }
        let image =
            self.reconstruct(&recon, pw, header.orig_w as usize, header.orig_h as usize)?;
        Ok(DecodeResult { image, symbols: io.symbols })
    }

    /// Walks the full coding schedule, calling `io` once per position in
    /// coding order. Returns the dequantized subband maps per component.
    fn run_schedule(
        &self,
        ph: usize,
        pw: usize,
        delta: f32,
        context_disabled: bool,
        bounds: &[Vec<(i16, i16)>; 3],
        io: &mut dyn SymbolIo,
    ) -> Result<[Vec<FeatMap>; 3]> {
        let cfg = &self.cfg;
        let count = cfg.subband_count();
        for comp in bounds {
            if comp.len() != count {
                return Err(Error::Shape(format!(
                    "expected {count} subband bounds, found {}",
                    comp.len()
                )));
            }
        }
        let (bh0, bw0) = (ph >> cfg.levels, pw >> cfg.levels);
        if bh0 == 0 || bw0 == 0 {
            return Err(Error::Shape(format!(
                "{ph}x{pw} padded plane vanishes after {} levels",
                cfg.levels
            )));
        }

        let mut recon: [Vec<FeatMap>; 3] =
            [Vec::with_capacity(count), Vec::with_capacity(count), Vec::with_capacity(count)];
        let mut y_snapshots: Vec<StateMaps> = Vec::with_capacity(cfg.levels);
        let mut pred_after_first: Option<FeatMap> = None;

        for comp in 0..3 {
            let group = if comp == 0 { "y" } else { "c" };
            let mut state = if comp == 0 {
                context::fresh_state_maps(cfg, bh0, bw0)
            } else {
                y_snapshots
                    .first()
                    .cloned()
                    .ok_or_else(|| Error::Shape("luma state snapshot missing".into()))?
            };
            for i in 1..=count {
                let scale = cfg.subband_scale(i);
                let (bh, bw) = (ph / scale, pw / scale);
                let bundle = self.assemble_bundle(
                    comp,
                    i,
                    bh,
                    bw,
                    &recon,
                    &state,
                    pred_after_first.as_ref(),
                    context_disabled,
                )?;
                let mut coder = SubbandCoder::new(&self.snap, group, i, bundle.as_ref(), bh, bw)?;
                let (lo, hi) = bounds[comp][i - 1];
                let (lo, hi) = (lo as i32, hi as i32);
                let mut map = FeatMap::zeros(1, bh, bw);
                for y in 0..bh {
                    for x in 0..bw {
                        let raw = coder.raw_params_at(y, x)?;
                        let point = entropy::activate_at(raw, cfg.mixtures);
                        let masses: Vec<f64> =
                            (lo..=hi).map(|s| entropy::mass_at(&point, s)).collect();
                        let cdf = entropy::integer_cdf(&masses)?;
                        let s = io.step(comp, i, y * bw + x, &point, &cdf, lo)?;
                        let v = s as f32 / delta;
                        coder.push(y, x, v);
                        map.data[y * bw + x] = v;
                    }
                }
                state = context::rnn_step_maps(&self.snap, cfg, group, &state, &map)?;
                if comp == 0 && i == 1 {
                    pred_after_first = Some(state.h[2].clone());
                }
                if cfg.level_ends_after(i) {
                    if comp == 0 {
                        y_snapshots.push(state.clone());
                    }
                    state = context::level_transition_maps(&state);
                }
                recon[comp].push(map);
            }
            if comp == 0 {
                y_snapshots.push(state);
            }
        }
        Ok(recon)
    }

    /// Builds the context bundle entering subband `i` of component `comp`.
    /// Channel order: luma [prediction, upsample]; chroma [co-located luma,
    /// co-located first chroma, prediction, upsample]. Slots a component
    /// lacks are zero maps; disabling the cross-component context zeroes the
    /// two co-located-subband slots.
    #[allow(clippy::too_many_arguments)]
    fn assemble_bundle(
        &self,
        comp: usize,
        i: usize,
        bh: usize,
        bw: usize,
        recon: &[Vec<FeatMap>; 3],
        state: &StateMaps,
        pred_after_first: Option<&FeatMap>,
        context_disabled: bool,
    ) -> Result<Option<FeatMap>> {
        let kind = model::subband_kind(i);
        if comp == 0 {
            if i == 1 {
                return Ok(None);
            }
            let mut out = context::prediction_map(state, kind);
            if i >= 5 {
                let up = context::learned_upsample_map(&self.snap, &recon[0][i - 4])?;
                out = context::concat_maps(&out, &up);
            }
            return Ok(Some(out));
        }
        let zeros = || FeatMap::zeros(1, bh, bw);
        let ysub = if context_disabled { zeros() } else { recon[0][i - 1].clone() };
        let cbsub = if comp == 2 && !context_disabled { recon[1][i - 1].clone() } else { zeros() };
        let pred = if i > 1 {
            context::prediction_map(state, kind)
        } else if comp == 1 {
            // The first chroma subband predicts from the luma stack's state
            // right after it consumed the base band.
            let src = pred_after_first
                .ok_or_else(|| Error::Shape("luma prediction cache missing".into()))?;
            let ch = context::kind_channel(kind);
            FeatMap { c: 1, h: src.h, w: src.w, data: src.channel(ch).to_vec() }
        } else {
            zeros()
        };
        let mut out = context::concat_maps(&context::concat_maps(&ysub, &cbsub), &pred);
        if i >= 5 {
            let up = context::learned_upsample_map(&self.snap, &recon[comp][i - 4])?;
            out = context::concat_maps(&out, &up);
        }
        Ok(Some(out))
    }

    /// Inverse transform, refinement, color conversion, crop. Encoder and
    /// decoder both call this with identical inputs, so their outputs agree
    /// bit for bit.
    fn reconstruct(
        &self,
        recon: &[Vec<FeatMap>; 3],
        pw: usize,
        w: usize,
        h: usize,
    ) -> Result<ImageU8> {
        let mut planes: Vec<Vec<f32>> = Vec::with_capacity(3);
        for comp in 0..3 {
            let mut g = self.graph();
            let mut bufs = Vec::with_capacity(recon[comp].len());
            for m in &recon[comp] {
                bufs.push(g.input(&[1, m.h, m.w], m.data.clone())?);
            }
            let plane = lifting::inverse_2d(&mut g, &bufs, &self.cfg)?;
            let refined = dequant::apply(&mut g, plane, &self.cfg)?;
            planes.push(pixel::crop_plane(g.data(refined), pw, w, h));
        }
        let cr = planes.pop().expect("three components");
        let cb = planes.pop().expect("three components");
        let y = planes.pop().expect("three components");
        let p = Planes { w, h, y, cb, cr };
        let rgb = pixel::rgb_f32_to_u8(&pixel::planes_to_rgb_f32(&p));
        ImageU8::new(w, h, rgb)
    }
}

/// Per-position symbol source/sink. The scheduler owns all distribution
/// math; implementations only move one symbol.
trait SymbolIo {
    fn step(
        &mut self,
        comp: usize,
        i: usize,
        pos: usize,
        point: &GmmPoint,
        cdf: &[u32],
        lo: i32,
    ) -> Result<i32>;
}

struct EncoderIo<'a> {
    symbols: &'a [Vec<Vec<i16>>; 3],
    enc: RangeEncoder,
    subband_bits: [Vec<f64>; 3],
    model_bits: [f64; 3],
}

impl SymbolIo for EncoderIo<'_> {
    fn step(
        &mut self,
        comp: usize,
        i: usize,
        pos: usize,
        point: &GmmPoint,
        cdf: &[u32],
        lo: i32,
    ) -> Result<i32> {
        let s = self.symbols[comp][i - 1][pos] as i32;
        let index = (s - lo) as usize;
        self.enc.encode(cdf, index)?;
        self.subband_bits[comp][i - 1] += entropy::span_bits(cdf[index + 1] - cdf[index]);
        self.model_bits[comp] += entropy::bits_at(point, s);
        Ok(s)
    }
}

struct DecoderIo<'a> {
    dec: RangeDecoder<'a>,
    symbols: [Vec<Vec<i16>>; 3],
}

impl SymbolIo for DecoderIo<'_> {
    fn step(
        &mut self,
        comp: usize,
        i: usize,
        pos: usize,
        _point: &GmmPoint,
        cdf: &[u32],
        lo: i32,
    ) -> Result<i32> {
        let s = lo + self.dec.decode(cdf)? as i32;
        let subs = &mut self.symbols[comp];
        if subs.len() < i {
            subs.push(Vec::new());
        }
        debug_assert_eq!(subs[i - 1].len(), pos);
        subs[i - 1].push(s as i16);
        Ok(s)
    }
}

/// Differentiable luma coding pass: transform, quantize, and accumulate the
/// model code length over all subbands. Mirrors the scheduler exactly.
pub struct LumaPass {
    /// Scalar total code length in bits.
    pub rate: BufId,
    /// Scalar code length per subband, coding order.
    pub subband_bits: Vec<BufId>,
    pub recon: Vec<BufId>,
    /// Recurrent state at each resolution, coarsest first.
    pub snapshots: Vec<StateNodes>,
    /// Narrow-unit hidden state right after the base band was consumed.
    pub pred_after_first: BufId,
}

pub fn luma_pass<T: Real>(g: &mut Graph<T>, cfg: &ModelCfg, plane: BufId) -> Result<LumaPass> {
    let (ph, pw) = {
        let s = g.shape(plane);
        (s[1], s[2])
    };
    let bands = lifting::forward_2d(g, plane, cfg)?;
    let count = cfg.subband_count();
    let mut sym = Vec::with_capacity(count);
    let mut recon = Vec::with_capacity(count);
    for &b in &bands {
        let (s, r) = lifting::quantize(g, b)?;
        sym.push(s);
        recon.push(r);
    }
    let mut state = context::fresh_state_nodes(g, cfg, ph >> cfg.levels, pw >> cfg.levels)?;
    let mut snapshots = Vec::with_capacity(cfg.levels);
    let mut pred_after_first = None;
    let mut subband_bits = Vec::with_capacity(count);
    let mut rate: Option<BufId> = None;
    for i in 1..=count {
        let bundle = if i == 1 {
            None
        } else {
            let kind = model::subband_kind(i);
            let pred = context::select_prediction(g, &state, kind)?;
            if i >= 5 {
                let up = context::learned_upsample(g, recon[i - 4])?;
                Some(g.concat_c(&[pred, up])?)
            } else {
                Some(pred)
            }
        };
        let raw = context::fuse(g, "y", i, recon[i - 1], bundle)?;
        let bits = entropy::rate_bits(g, sym[i - 1], raw, cfg.mixtures)?;
        subband_bits.push(bits);
        rate = Some(match rate {
            Some(r) => g.add(r, bits)?,
            None => bits,
        });
        state = context::rnn_step(g, cfg, "y", &state, recon[i - 1])?;
        if i == 1 {
            pred_after_first = Some(context::prediction::<T>(&state));
        }
        if cfg.level_ends_after(i) {
            snapshots.push(state);
            state = context::level_transition(g, &state)?;
        }
    }
    snapshots.push(state);
    Ok(LumaPass {
        rate: rate.expect("at least one subband"),
        subband_bits,
        recon,
        snapshots,
        pred_after_first: pred_after_first.expect("base band consumed"),
    })
}

/// Luma context handed to a chroma pass: the co-located reconstructions,
/// the coarsest-resolution state, and the post-base-band prediction. Built
/// from a same-graph [`LumaPass`], or from plain inputs when the luma side
/// was evaluated elsewhere and is frozen.
pub struct LumaFeed<'a> {
    pub recon: &'a [BufId],
    pub start: StateNodes,
    pub pred_after_first: BufId,
}

impl LumaPass {
    pub fn feed(&self) -> Result<LumaFeed<'_>> {
        let start = *self
            .snapshots
            .first()
            .ok_or_else(|| Error::Shape("luma state snapshot missing".into()))?;
        Ok(LumaFeed { recon: &self.recon, start, pred_after_first: self.pred_after_first })
    }
}

pub struct ChromaPass {
    pub rate: BufId,
    pub subband_bits: Vec<BufId>,
    pub recon: Vec<BufId>,
}

/// Differentiable chroma coding pass. `sibling` is the first chroma
/// component's reconstruction when coding the second one.
pub fn chroma_pass<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelCfg,
    plane: BufId,
    luma: &LumaFeed,
    sibling: Option<&[BufId]>,
) -> Result<ChromaPass> {
    let bands = lifting::forward_2d(g, plane, cfg)?;
    let count = cfg.subband_count();
    if luma.recon.len() != count {
        return Err(Error::Shape(format!(
            "luma feed has {} subbands, schedule needs {count}",
            luma.recon.len()
        )));
    }
    let mut sym = Vec::with_capacity(count);
    let mut recon = Vec::with_capacity(count);
    for &b in &bands {
        let (s, r) = lifting::quantize(g, b)?;
        sym.push(s);
        recon.push(r);
    }
    let mut state = luma.start;
    let mut subband_bits = Vec::with_capacity(count);
    let mut rate: Option<BufId> = None;
    for i in 1..=count {
        let kind = model::subband_kind(i);
        let dims = g.shape(recon[i - 1]).to_vec();
        let ysub = luma.recon[i - 1];
        let cbsub = match sibling {
            Some(s) => s[i - 1],
            None => g.zeros(&dims)?,
        };
        let pred = if i > 1 {
            context::select_prediction(g, &state, kind)?
        } else if sibling.is_none() {
            let ch = context::kind_channel(kind);
            g.slice_c(luma.pred_after_first, ch, ch + 1)?
        } else {
            g.zeros(&dims)?
        };
        let mut parts = vec![ysub, cbsub, pred];
        if i >= 5 {
            parts.push(context::learned_upsample(g, recon[i - 4])?);
        }
        let bundle = g.concat_c(&parts)?;
        let raw = context::fuse(g, "c", i, recon[i - 1], Some(bundle))?;
        let bits = entropy::rate_bits(g, sym[i - 1], raw, cfg.mixtures)?;
        subband_bits.push(bits);
        rate = Some(match rate {
            Some(r) => g.add(r, bits)?,
            None => bits,
        });
        state = context::rnn_step(g, cfg, "c", &state, recon[i - 1])?;
        if cfg.level_ends_after(i) {
            state = context::level_transition(g, &state)?;
        }
    }
    Ok(ChromaPass { rate: rate.expect("at least one subband"), subband_bits, recon })
}

/// Inverse transform plus refinement on graph buffers, for training losses.
pub fn reconstruct_graph<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelCfg,
    recon: &[BufId],
) -> Result<BufId> {
    let plane = lifting::inverse_2d(g, recon, cfg)?;
    dequant::apply(g, plane, cfg)
}
