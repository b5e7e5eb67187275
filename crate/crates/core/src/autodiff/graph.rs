//! Eager-tape reverse-mode autodiff over `Real` scalars.
//!
//! Graphs are built per work item (one image crop, one component pass), so
//! tensors carry no batch dimension: feature maps are [C, H, W], scalars are
//! rank 0. Parameters come from an immutable `ParamSnapshot`; gradients are
//! returned per parameter name and summed externally, which keeps training
//! trajectories independent of thread count.

use std::sync::Arc;

use indexmap::IndexMap;

use super::kernels::{self, ConvDims, Mask, Pad};
use super::registry::ParamSnapshot;
use super::scalar::Real;
use crate::error::{Error, Result};

/// Handle to a tape buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufId(usize);

/// Which parameters receive gradients.
#[derive(Debug, Clone)]
pub enum TrainFilter {
    None,
    All,
    /// Parameter names matching any listed prefix train; the rest are frozen.
    Prefixes(Vec<String>),
}

impl TrainFilter {
    pub fn wants(&self, name: &str) -> bool {
        match self {
            TrainFilter::None => false,
            TrainFilter::All => true,
            TrainFilter::Prefixes(ps) => ps.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// Forward-behavior switches.
#[derive(Debug, Clone, Copy, Default)]
pub struct GraphFlags {
    /// Replace rounding with identity in the forward pass. Used by gradient
    /// checks, where the straight-through estimator would otherwise disagree
    /// with finite differences at every step discontinuity.
    pub round_as_identity: bool,
    /// Run convolutions on the order-stable path so full-map outputs match
    /// single-position decoder evaluation bit for bit.
    pub coding_mode: bool,
}

struct Buf<T> {
    shape: Vec<usize>,
    data: Data<T>,
    wants_grad: bool,
}

enum Data<T> {
    Owned(Vec<T>),
    Shared(Arc<[T]>),
}

impl<T> Data<T> {
    fn as_slice(&self) -> &[T] {
        match self {
            Data::Owned(v) => v,
            Data::Shared(a) => a,
        }
    }
}

#[derive(Clone)]
enum Op<T: Real> {
    Conv2d {
        input: BufId,
        kernel: BufId,
        bias: Option<BufId>,
        out: BufId,
        pad: Pad,
        mask: Option<Mask>,
    },
    TransposeHw { input: BufId, out: BufId },
    DeinterleaveW { input: BufId, out: BufId, parity: usize },
    InterleaveW { even: BufId, odd: BufId, out: BufId },
    ConcatC { inputs: Vec<BufId>, out: BufId },
    SliceC { input: BufId, out: BufId, from: usize },
    Upsample2x { input: BufId, out: BufId },
    Add { a: BufId, b: BufId, out: BufId },
    Sub { a: BufId, b: BufId, out: BufId },
    Mul { a: BufId, b: BufId, out: BufId },
    Div { a: BufId, b: BufId, out: BufId },
    AddScalar { input: BufId, out: BufId },
    Scale { input: BufId, out: BufId, c: T },
    MulScalarT { input: BufId, scalar: BufId, out: BufId },
    DivScalarT { input: BufId, scalar: BufId, out: BufId },
    Tanh { input: BufId, out: BufId },
    Sigmoid { input: BufId, out: BufId },
    Exp { input: BufId, out: BufId },
    Ln { input: BufId, out: BufId },
    Erf { input: BufId, out: BufId },
    Clamp { input: BufId, out: BufId, lo: T, hi: T },
    SoftmaxC { input: BufId, out: BufId },
    RoundSte { input: BufId, out: BufId },
    SumAll { input: BufId, out: BufId },
    MeanAll { input: BufId, out: BufId },
}

pub struct Graph<T: Real> {
    snapshot: Arc<ParamSnapshot<T>>,
    filter: TrainFilter,
    pub flags: GraphFlags,
    bufs: Vec<Buf<T>>,
    grads: Vec<Option<Vec<T>>>,
    tape: Vec<Op<T>>,
    params: IndexMap<String, BufId>,
}

impl<T: Real> Graph<T> {
    pub fn new(snapshot: Arc<ParamSnapshot<T>>, filter: TrainFilter, flags: GraphFlags) -> Self {
        Graph {
            snapshot,
            filter,
            flags,
            bufs: Vec::new(),
            grads: Vec::new(),
            tape: Vec::new(),
            params: IndexMap::new(),
        }
    }

    fn push_buf(&mut self, shape: Vec<usize>, data: Data<T>, wants_grad: bool) -> BufId {
        self.bufs.push(Buf { shape, data, wants_grad });
        self.grads.push(None);
        BufId(self.bufs.len() - 1)
    }

    /// External data entering the graph. Inputs never receive gradients.
    pub fn input(&mut self, shape: &[usize], data: Vec<T>) -> Result<BufId> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Shape(format!(
                "input data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push_buf(shape.to_vec(), Data::Owned(data), false))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Result<BufId> {
        let numel: usize = shape.iter().product();
        self.input(shape, vec![T::ZERO; numel])
    }

    pub fn scalar_input(&mut self, v: T) -> BufId {
        self.push_buf(Vec::new(), Data::Owned(vec![v]), false)
    }

    /// Looks up a parameter by name. Repeated lookups share one buffer, so
    /// a parameter used in several places accumulates a single gradient.
    pub fn param(&mut self, name: &str) -> Result<BufId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let entry = self.snapshot.get(name)?;
        let wants = self.filter.wants(name);
        let (shape, data) = (entry.shape.clone(), Arc::clone(&entry.data));
        let id = self.push_buf(shape, Data::Shared(data), wants);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn shape(&self, id: BufId) -> &[usize] {
        &self.bufs[id.0].shape
    }

    pub fn data(&self, id: BufId) -> &[T] {
        self.bufs[id.0].data.as_slice()
    }

    pub fn scalar_value(&self, id: BufId) -> Result<T> {
        let d = self.data(id);
        if d.len() != 1 {
            return Err(Error::Shape(format!("expected scalar, found {:?}", self.shape(id))));
        }
        Ok(d[0])
    }

    fn wants(&self, id: BufId) -> bool {
        self.bufs[id.0].wants_grad
    }

    fn numel(&self, id: BufId) -> usize {
        self.bufs[id.0].shape.iter().product()
    }

    fn chw(&self, id: BufId) -> Result<(usize, usize, usize)> {
        let s = self.shape(id);
        if s.len() != 3 {
            return Err(Error::Shape(format!("expected [C, H, W] tensor, found {s:?}")));
        }
        Ok((s[0], s[1], s[2]))
    }

    fn record(&mut self, op: Op<T>) {
        self.tape.push(op);
    }

    fn out_like(&mut self, shape: Vec<usize>, data: Vec<T>, wants: bool) -> BufId {
        self.push_buf(shape, Data::Owned(data), wants)
    }

    // ---- ops ----

    pub fn conv2d(
        &mut self,
        input: BufId,
        kernel: BufId,
        bias: Option<BufId>,
        pad: Pad,
        mask: Option<Mask>,
    ) -> Result<BufId> {
        let (cin, h, w) = self.chw(input)?;
        let ks = self.shape(kernel);
        if ks.len() != 4 || ks[1] != cin {
            return Err(Error::Shape(format!(
                "kernel {ks:?} does not apply to input with {cin} channels"
            )));
        }
        let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Shape(format!("kernel extents must be odd, found {kh}x{kw}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::Shape(format!(
                    "bias {:?} does not match {cout} output channels",
                    self.shape(b)
                )));
            }
        }
        if mask.is_some() && pad != Pad::Zero {
            return Err(Error::Shape("masked convolution requires zero padding".into()));
        }
        let dims = ConvDims { batch: 1, cin, cout, h, w, kh, kw };
        let mut out = vec![T::ZERO; cout * h * w];
        let bias_data = bias.map(|b| self.data(b));
        if self.flags.coding_mode {
            kernels::conv2d_stable(dims, self.data(input), self.data(kernel), bias_data, pad, mask, &mut out);
        } else {
            kernels::conv2d_gemm(dims, self.data(input), self.data(kernel), bias_data, pad, mask, &mut out);
        }
        let wants = self.wants(input) || self.wants(kernel) || bias.map(|b| self.wants(b)).unwrap_or(false);
        let id = self.out_like(vec![cout, h, w], out, wants);
        if wants {
            self.record(Op::Conv2d { input, kernel, bias, out: id, pad, mask });
        }
        Ok(id)
    }

    pub fn transpose_hw(&mut self, input: BufId) -> Result<BufId> {
        let s = self.shape(input).to_vec();
        if s.len() < 2 {
            return Err(Error::Shape(format!("transpose needs rank >= 2, found {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let lead: usize = s[..s.len() - 2].iter().product();
        let src = self.data(input);
        let mut out = vec![T::ZERO; src.len()];
        for n in 0..lead {
            let sp = &src[n * h * w..][..h * w];
            let dp = &mut out[n * h * w..][..h * w];
            for y in 0..h {
                for x in 0..w {
                    dp[x * h + y] = sp[y * w + x];
                }
            }
        }
        let mut os = s;
        let r = os.len();
        os.swap(r - 2, r - 1);
        let wants = self.wants(input);
        let id = self.out_like(os, out, wants);
        if wants {
            self.record(Op::TransposeHw { input, out: id });
        }
        Ok(id)
    }

    /// Keeps every second column starting at `parity` (0 or 1).
    pub fn deinterleave_w(&mut self, input: BufId, parity: usize) -> Result<BufId> {
        let s = self.shape(input).to_vec();
        let w = *s.last().ok_or_else(|| Error::Shape("deinterleave needs rank >= 1".into()))?;
        if w % 2 != 0 {
            return Err(Error::Shape(format!("deinterleave needs even width, found {w}")));
        }
        debug_assert!(parity < 2);
        let rows: usize = s[..s.len() - 1].iter().product();
        let w2 = w / 2;
        let src = self.data(input);
        let mut out = vec![T::ZERO; rows * w2];
        for r in 0..rows {
            let sp = &src[r * w..][..w];
            let dp = &mut out[r * w2..][..w2];
            for j in 0..w2 {
                dp[j] = sp[2 * j + parity];
            }
        }
        let mut os = s;
        *os.last_mut().unwrap() = w2;
        let wants = self.wants(input);
        let id = self.out_like(os, out, wants);
        if wants {
            self.record(Op::DeinterleaveW { input, out: id, parity });
        }
        Ok(id)
    }

    pub fn interleave_w(&mut self, even: BufId, odd: BufId) -> Result<BufId> {
        let s = self.shape(even).to_vec();
        if self.shape(odd) != s.as_slice() {
            return Err(Error::Shape(format!(
                "interleave halves differ: {:?} vs {:?}",
                s,
                self.shape(odd)
            )));
        }
        let w2 = *s.last().ok_or_else(|| Error::Shape("interleave needs rank >= 1".into()))?;
        let rows: usize = s[..s.len() - 1].iter().product();
        let (se, so) = (self.data(even), self.data(odd));
        let mut out = vec![T::ZERO; rows * w2 * 2];
        for r in 0..rows {
            let dp = &mut out[r * w2 * 2..][..w2 * 2];
            for j in 0..w2 {
                dp[2 * j] = se[r * w2 + j];
                dp[2 * j + 1] = so[r * w2 + j];
            }
        }
        let mut os = s;
        *os.last_mut().unwrap() = w2 * 2;
        let wants = self.wants(even) || self.wants(odd);
        let id = self.out_like(os, out, wants);
        if wants {
            self.record(Op::InterleaveW { even, odd, out: id });
        }
        Ok(id)
    }

    pub fn concat_c(&mut self, inputs: &[BufId]) -> Result<BufId> {
        if inputs.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let (_, h, w) = self.chw(inputs[0])?;
        let mut ctotal = 0;
        for &id in inputs {
            let (c, ih, iw) = self.chw(id)?;
            if (ih, iw) != (h, w) {
                return Err(Error::Shape(format!(
                    "concat spatial mismatch: {h}x{w} vs {ih}x{iw}"
                )));
            }
            ctotal += c;
        }
        let mut out = Vec::with_capacity(ctotal * h * w);
        for &id in inputs {
            out.extend_from_slice(self.data(id));
        }
        let wants = inputs.iter().any(|&id| self.wants(id));
        let id = self.out_like(vec![ctotal, h, w], out, wants);
        if wants {
            self.record(Op::ConcatC { inputs: inputs.to_vec(), out: id });
        }
        Ok(id)
    }

    pub fn slice_c(&mut self, input: BufId, from: usize, to: usize) -> Result<BufId> {
        let (c, h, w) = self.chw(input)?;
        if from >= to || to > c {
            return Err(Error::Shape(format!("channel slice {from}..{to} out of range for {c}")));
        }
        let plane = h * w;
        let out = self.data(input)[from * plane..to * plane].to_vec();
        let wants = self.wants(input);
        let id = self.out_like(vec![to - from, h, w], out, wants);
        if wants {
            self.record(Op::SliceC { input, out: id, from });
        }
        Ok(id)
    }

    /// Nearest-neighbor doubling of both spatial dims.
    pub fn upsample2x(&mut self, input: BufId) -> Result<BufId> {
        let (c, h, w) = self.chw(input)?;
        let src = self.data(input);
        let mut out = vec![T::ZERO; c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for ch in 0..c {
            let sp = &src[ch * h * w..][..h * w];
            let dp = &mut out[ch * oh * ow..][..oh * ow];
            for y in 0..h {
                for x in 0..w {
                    let v = sp[y * w + x];
                    dp[(2 * y) * ow + 2 * x] = v;
                    dp[(2 * y) * ow + 2 * x + 1] = v;
                    dp[(2 * y + 1) * ow + 2 * x] = v;
                    dp[(2 * y + 1) * ow + 2 * x + 1] = v;
                }
            }
        }
        let wants = self.wants(input);
        let id = self.out_like(vec![c, oh, ow], out, wants);
        if wants {
            self.record(Op::Upsample2x { input, out: id });
        }
        Ok(id)
    }

    fn binary_shapes(&self, a: BufId, b: BufId) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "elementwise shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let s = self.binary_shapes(a, b)?;
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let wants = self.wants(a) || self.wants(b);
        let id = self.out_like(s, out, wants);
        if wants {
            self.record(Op::Add { a, b, out: id });
        }
        Ok(id)
    }

    pub fn sub(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let s = self.binary_shapes(a, b)?;
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        let wants = self.wants(a) || self.wants(b);
        let id = self.out_like(s, out, wants);
        if wants {
            self.record(Op::Sub { a, b, out: id });
        }
        Ok(id)
    }

    pub fn mul(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let s = self.binary_shapes(a, b)?;
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let wants = self.wants(a) || self.wants(b);
        let id = self.out_like(s, out, wants);
        if wants {
            self.record(Op::Mul { a, b, out: id });
        }
        Ok(id)
    }

    pub fn div(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let s = self.binary_shapes(a, b)?;
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x / y).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("division produced a non-finite value".into()));
        }
        let wants = self.wants(a) || self.wants(b);
        let id = self.out_like(s, out, wants);
        if wants {
            self.record(Op::Div { a, b, out: id });
        }
        Ok(id)
    }

    pub fn add_scalar(&mut self, input: BufId, c: T) -> Result<BufId> {
        let s = self.shape(input).to_vec();
        let out: Vec<T> = self.data(input).iter().map(|&x| x + c).collect();
        let wants = self.wants(input);
        let id = self.out_like(s, out, wants);
        if wants {
            self.record(Op::AddScalar { input, out: id });
        }
        Ok(id)
    }

    pub fn scale(&mut self, input: BufId, c: T) -> Result<BufId> {
        let s = self.shape(input).to_vec();
        let out: Vec<T> = self.data(input).iter().map(|&x| c * x).collect();
        let wants = self.wants(input);
        let id = self.out_like(s, out, wants);
        if wants {
            self.record(Op::Scale { input, out: id, c });
        }
        Ok(id)
    }

    /// Multiplies every element by a rank-0 graph value.
    pub fn mul_scalar_t(&mut self, input: BufId, scalar: BufId) -> Result<BufId> {
        let sv = self.scalar_value(scalar)?;
        let s = self.shape(input).to_vec();
        let out: Vec<T> = self.data(input).iter().map(|&x| x * sv).collect();
        let wants = self.wants(input) || self.wants(scalar);
        let id = self.out_like(s, out, wants);
        if wants {
            self.record(Op::MulScalarT { input, scalar, out: id });
        }
        Ok(id)
    }

    pub fn div_scalar_t(&mut self, input: BufId, scalar: BufId) -> Result<BufId> {
        let sv = self.scalar_value(scalar)?;
        let s = self.shape(input).to_vec();
        let out: Vec<T> = self.data(input).iter().map(|&x| x / sv).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("scalar division produced a non-finite value".into()));
        }
        let wants = self.wants(input) || self.wants(scalar);
        let id = self.out_like(s, out, wants);
        if wants {
            self.record(Op::DivScalarT { input, scalar, out: id });
        }
        Ok(id)
    }

    pub fn tanh(&mut self, input: BufId) -> Result<BufId> {
        let s = self.shape(input).to_vec();
        let out: Vec<T> = self.data(input).iter().map(|&x| x.tanh()).collect();
        let wants = self.wants(input);
        let id = self.out_like(s, out, wants);
        if wants {
            self.record(Op::Tanh { input, out: id });
        }
        Ok(id)
    }

    pub fn sigmoid(&mut self, input: BufId) -> Result<BufId> {
        let s = self.shape(input).to_vec();
        let out: Vec<T> = self.data(input).iter().map(|&x| sigmoid(x)).collect();
        let wants = self.wants(input);
        let id = self.out_like(s, out, wants);
        if wants {
            self.record(Op::Sigmoid { input, out: id });
        }
        Ok(id)
    }

    pub fn exp(&mut self, input: BufId) -> Result<BufId> {
        let s = self.shape(input).to_vec();
        let out: Vec<T> = self.data(input).iter().map(|&x| x.exp()).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("exp overflowed".into()));
        }
        let wants = self.wants(input);
        let id = self.out_like(s, out, wants);
        if wants {
            self.record(Op::Exp { input, out: id });
        }
        Ok(id)
    }

    pub fn ln(&mut self, input: BufId) -> Result<BufId> {
        let s = self.shape(input).to_vec();
        let out: Vec<T> = self.data(input).iter().map(|&x| x.ln()).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("log of a non-positive value".into()));
        }
        let wants = self.wants(input);
        let id = self.out_like(s, out, wants);
        if wants {
            self.record(Op::Ln { input, out: id });
        }
        Ok(id)
    }

    pub fn erf(&mut self, input: BufId) -> Result<BufId> {
        let s = self.shape(input).to_vec();
        let out: Vec<T> = self.data(input).iter().map(|&x| x.erf()).collect();
        let wants = self.wants(input);
        let id = self.out_like(s, out, wants);
        if wants {
            self.record(Op::Erf { input, out: id });
        }
        Ok(id)
    }

    /// Clamps to [lo, hi]. The gradient passes wherever the input lies inside
    /// the closed interval, including exactly at the bounds.
    pub fn clamp(&mut self, input: BufId, lo: T, hi: T) -> Result<BufId> {
        let s = self.shape(input).to_vec();
        let out: Vec<T> = self
            .data(input)
            .iter()
            .map(|&x| if x < lo { lo } else if x > hi { hi } else { x })
            .collect();
        let wants = self.wants(input);
        let id = self.out_like(s, out, wants);
        if wants {
            self.record(Op::Clamp { input, out: id, lo, hi });
        }
        Ok(id)
    }

    /// Softmax across the full channel dimension, per spatial position.
    pub fn softmax_c(&mut self, input: BufId) -> Result<BufId> {
        let (c, h, w) = self.chw(input)?;
        let plane = h * w;
        let src = self.data(input);
        let mut out = vec![T::ZERO; c * plane];
        for p in 0..plane {
            let mut m = src[p];
            for ch in 1..c {
                let v = src[ch * plane + p];
                if v > m {
                    m = v;
                }
            }
            let mut sum = T::ZERO;
            for ch in 0..c {
                let e = (src[ch * plane + p] - m).exp();
                out[ch * plane + p] = e;
                sum += e;
            }
            for ch in 0..c {
                out[ch * plane + p] = out[ch * plane + p] / sum;
            }
        }
        let wants = self.wants(input);
        let id = self.out_like(vec![c, h, w], out, wants);
        if wants {
            self.record(Op::SoftmaxC { input, out: id });
        }
        Ok(id)
    }

    /// Round half away from zero with a straight-through gradient.
    pub fn round_ste(&mut self, input: BufId) -> Result<BufId> {
        let s = self.shape(input).to_vec();
        let out: Vec<T> = if self.flags.round_as_identity {
            self.data(input).to_vec()
        } else {
            self.data(input).iter().map(|&x| x.round_half_away()).collect()
        };
        let wants = self.wants(input);
        let id = self.out_like(s, out, wants);
        if wants {
            self.record(Op::RoundSte { input, out: id });
        }
        Ok(id)
    }

    pub fn sum_all(&mut self, input: BufId) -> Result<BufId> {
        let mut s = T::ZERO;
        for &v in self.data(input) {
            s += v;
        }
        let wants = self.wants(input);
        let id = self.out_like(Vec::new(), vec![s], wants);
        if wants {
            self.record(Op::SumAll { input, out: id });
        }
        Ok(id)
    }

    pub fn mean_all(&mut self, input: BufId) -> Result<BufId> {
        let n = self.numel(input);
        let mut s = T::ZERO;
        for &v in self.data(input) {
            s += v;
        }
        let mean = s / T::from_f64(n as f64);
        let wants = self.wants(input);
        let id = self.out_like(Vec::new(), vec![mean], wants);
        if wants {
            self.record(Op::MeanAll { input, out: id });
        }
        Ok(id)
    }

    // ---- backward ----

    fn ensure_grad(&mut self, id: BufId) {
        if self.wants(id) && self.grads[id.0].is_none() {
            self.grads[id.0] = Some(vec![T::ZERO; self.numel(id)]);
        }
    }

    fn add_to_grad(&mut self, id: BufId, f: impl FnOnce(&mut [T])) {
        if !self.wants(id) {
            return;
        }
        self.ensure_grad(id);
        f(self.grads[id.0].as_mut().unwrap());
    }

    /// Runs reverse-mode accumulation from a scalar loss. Returns the
    /// gradient of every touched trainable parameter, in first-use order.
    pub fn backward(&mut self, loss: BufId) -> Result<Vec<(String, Vec<T>)>> {
        if self.numel(loss) != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, found {:?}",
                self.shape(loss)
            )));
        }
        if !self.wants(loss) {
            return Err(Error::Shape("loss does not depend on any trainable parameter".into()));
        }
        self.ensure_grad(loss);
        self.grads[loss.0].as_mut().unwrap()[0] = T::ONE;

        for i in (0..self.tape.len()).rev() {
            let op = self.tape[i].clone();
            self.backward_op(op);
        }

        let mut out = Vec::new();
        for (name, &id) in self.params.iter() {
            if let Some(g) = self.grads[id.0].take() {
                out.push((name.clone(), g));
            }
        }
        Ok(out)
    }

    fn backward_op(&mut self, op: Op<T>) {
        match op {
            Op::Conv2d { input, kernel, bias, out, pad, mask } => {
                let Some(gout) = self.grads[out.0].take() else { return };
                let (cin, h, w) = match self.chw(input) {
                    Ok(v) => v,
                    Err(_) => unreachable!("validated at record time"),
                };
                let ks = self.shape(kernel);
                let dims = ConvDims { batch: 1, cin, cout: ks[0], h, w, kh: ks[2], kw: ks[3] };
                let wi = self.wants(input);
                let wk = self.wants(kernel);
                let wb = bias.map(|b| self.wants(b)).unwrap_or(false);
                let mut din = if wi { Some(vec![T::ZERO; self.numel(input)]) } else { None };
                let mut dker = if wk { Some(vec![T::ZERO; self.numel(kernel)]) } else { None };
                let mut dbias = if wb { Some(vec![T::ZERO; dims.cout]) } else { None };
                kernels::conv2d_backward(
                    dims,
                    self.data(input),
                    self.data(kernel),
                    pad,
                    mask,
                    &gout,
                    din.as_deref_mut(),
                    dker.as_deref_mut(),
                    dbias.as_deref_mut(),
                );
                if let Some(d) = din {
                    self.add_to_grad(input, |g| add_into(g, &d));
                }
                if let Some(d) = dker {
                    self.add_to_grad(kernel, |g| add_into(g, &d));
                }
                if let (Some(d), Some(b)) = (dbias, bias) {
                    self.add_to_grad(b, |g| add_into(g, &d));
                }
            }
            Op::TransposeHw { input, out } => {
                let Some(gout) = self.grads[out.0].take() else { return };
                let s = self.shape(input).to_vec();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let lead: usize = s[..s.len() - 2].iter().product();
                self.add_to_grad(input, |g| {
                    for n in 0..lead {
                        let gp = &gout[n * h * w..][..h * w];
                        let dp = &mut g[n * h * w..][..h * w];
                        for y in 0..h {
                            for x in 0..w {
                                dp[y * w + x] += gp[x * h + y];
                            }
                        }
                    }
                });
            }
            Op::DeinterleaveW { input, out, parity } => {
                let Some(gout) = self.grads[out.0].take() else { return };
                let s = self.shape(input).to_vec();
                let w = *s.last().unwrap();
                let rows: usize = s[..s.len() - 1].iter().product();
                let w2 = w / 2;
                self.add_to_grad(input, |g| {
                    for r in 0..rows {
                        for j in 0..w2 {
                            g[r * w + 2 * j + parity] += gout[r * w2 + j];
                        }
                    }
                });
            }
            Op::InterleaveW { even, odd, out } => {
                let Some(gout) = self.grads[out.0].take() else { return };
                let s = self.shape(even).to_vec();
                let w2 = *s.last().unwrap();
                let rows: usize = s[..s.len() - 1].iter().product();
                self.add_to_grad(even, |g| {
                    for r in 0..rows {
                        for j in 0..w2 {
                            g[r * w2 + j] += gout[r * 2 * w2 + 2 * j];
                        }
                    }
                });
                self.add_to_grad(odd, |g| {
                    for r in 0..rows {
                        for j in 0..w2 {
                            g[r * w2 + j] += gout[r * 2 * w2 + 2 * j + 1];
                        }
                    }
                });
            }
            Op::ConcatC { inputs, out } => {
                let Some(gout) = self.grads[out.0].take() else { return };
                let mut offset = 0;
                for id in inputs {
                    let n = self.numel(id);
                    let piece = &gout[offset..offset + n];
                    self.add_to_grad(id, |g| add_into(g, piece));
                    offset += n;
                }
            }
            Op::SliceC { input, out, from } => {
                let Some(gout) = self.grads[out.0].take() else { return };
                let (_, h, w) = self.chw(input).unwrap();
                let plane = h * w;
                self.add_to_grad(input, |g| add_into(&mut g[from * plane..from * plane + gout.len()], &gout));
            }
            Op::Upsample2x { input, out } => {
                let Some(gout) = self.grads[out.0].take() else { return };
                let (c, h, w) = self.chw(input).unwrap();
                let ow = 2 * w;
                self.add_to_grad(input, |g| {
                    for ch in 0..c {
                        let gp = &gout[ch * 4 * h * w..][..4 * h * w];
                        let dp = &mut g[ch * h * w..][..h * w];
                        for y in 0..h {
                            for x in 0..w {
                                dp[y * w + x] += gp[(2 * y) * ow + 2 * x]
                                    + gp[(2 * y) * ow + 2 * x + 1]
                                    + gp[(2 * y + 1) * ow + 2 * x]
                                    + gp[(2 * y + 1) * ow + 2 * x + 1];
                            }
                        }
                    }
                });
            }
            Op::Add { a, b, out } => {
                let Some(gout) = self.grads[out.0].take() else { return };
                self.add_to_grad(a, |g| add_into(g, &gout));
                self.add_to_grad(b, |g| add_into(g, &gout));
            }
            Op::Sub { a, b, out } => {
                let Some(gout) = self.grads[out.0].take() else { return };
                self.add_to_grad(a, |g| add_into(g, &gout));
                self.add_to_grad(b, |g| {
                    for (gi, &go) in g.iter_mut().zip(&gout) {
                        *gi -= go;
                    }
                });
            }
            Op::Mul { a, b, out } => {
                let Some(gout) = self.grads[out.0].take() else { return };
                let bd = self.data(b).to_vec();
                self.add_to_grad(a, |g| {
                    for ((gi, &go), &bv) in g.iter_mut().zip(&gout).zip(&bd) {
                        *gi += go * bv;
                    }
                });
                let ad = self.data(a).to_vec();
                self.add_to_grad(b, |g| {
                    for ((gi, &go), &av) in g.iter_mut().zip(&gout).zip(&ad) {
                        *gi += go * av;
                    }
                });
            }
            Op::Div { a, b, out } => {
                let Some(gout) = self.grads[out.0].take() else { return };
                let bd = self.data(b).to_vec();
                self.add_to_grad(a, |g| {
                    for ((gi, &go), &bv) in g.iter_mut().zip(&gout).zip(&bd) {
                        *gi += go / bv;
                    }
                });
                let od = self.data(out).to_vec();
                self.add_to_grad(b, |g| {
                    for (((gi, &go), &bv), &ov) in g.iter_mut().zip(&gout).zip(&bd).zip(&od) {
                        *gi -= go * ov / bv;
                    }
                });
            }
            Op::AddScalar { input, out } => {
                let Some(gout) = self.grads[out.0].take() else { return };
                self.add_to_grad(input, |g| add_into(g, &gout));
            }
            Op::Scale { input, out, c } => {
                let Some(gout) = self.grads[out.0].take() else { return };
                self.add_to_grad(input, |g| {
                    for (gi, &go) in g.iter_mut().zip(&gout) {
                        *gi += c * go;
                    }
                });
            }
            Op::MulScalarT { input, scalar, out } => {
                let Some(gout) = self.grads[out.0].take() else { return };
                let sv = self.data(scalar)[0];
                self.add_to_grad(input, |g| {
                    for (gi, &go) in g.iter_mut().zip(&gout) {
                        *gi += sv * go;
                    }
                });
                let xd = self.data(input).to_vec();
                self.add_to_grad(scalar, |g| {
                    let mut s = T::ZERO;
                    for (&go, &x) in gout.iter().zip(&xd) {
                        s += go * x;
                    }
                    g[0] += s;
                });
            }
            Op::DivScalarT { input, scalar, out } => {
                let Some(gout) = self.grads[out.0].take() else { return };
                let sv = self.data(scalar)[0];
                self.add_to_grad(input, |g| {
                    for (gi, &go) in g.iter_mut().zip(&gout) {
                        *gi += go / sv;
                    }
                });
                let od = self.data(out).to_vec();
                self.add_to_grad(scalar, |g| {
                    let mut s = T::ZERO;
                    for (&go, &o) in gout.iter().zip(&od) {
                        s += go * o;
                    }
                    g[0] -= s / sv;
                });
            }
            Op::Tanh { input, out } => {
                let Some(gout) = self.grads[out.0].take() else { return };
                let od = self.data(out).to_vec();
                self.add_to_grad(input, |g| {
                    for ((gi, &go), &y) in g.iter_mut().zip(&gout).zip(&od) {
                        *gi += go * (T::ONE - y * y);
                    }
                });
            }
            Op::Sigmoid { input, out } => {
                let Some(gout) = self.grads[out.0].take() else { return };
                let od = self.data(out).to_vec();
                self.add_to_grad(input, |g| {
                    for ((gi, &go), &y) in g.iter_mut().zip(&gout).zip(&od) {
                        *gi += go * y * (T::ONE - y);
                    }
                });
            }
            Op::Exp { input, out } => {
                let Some(gout) = self.grads[out.0].take() else { return };
                let od = self.data(out).to_vec();
                self.add_to_grad(input, |g| {
                    for ((gi, &go), &y) in g.iter_mut().zip(&gout).zip(&od) {
                        *gi += go * y;
                    }
                });
            }
            Op::Ln { input, out } => {
                let Some(gout) = self.grads[out.0].take() else { return };
                let xd = self.data(input).to_vec();
                self.add_to_grad(input, |g| {
                    for ((gi, &go), &x) in g.iter_mut().zip(&gout).zip(&xd) {
                        *gi += go / x;
                    }
                });
            }
            Op::Erf { input, out } => {
                let Some(gout) = self.grads[out.0].take() else { return };
                let xd = self.data(input).to_vec();
                let c = T::from_f64(std::f64::consts::FRAC_2_SQRT_PI);
                self.add_to_grad(input, |g| {
                    for ((gi, &go), &x) in g.iter_mut().zip(&gout).zip(&xd) {
                        let e = (T::ZERO - x * x).exp();
                        *gi += go * c * e;
                    }
                });
            }
            Op::Clamp { input, out, lo, hi } => {
                let Some(gout) = self.grads[out.0].take() else { return };
                let xd = self.data(input).to_vec();
                self.add_to_grad(input, |g| {
                    for ((gi, &go), &x) in g.iter_mut().zip(&gout).zip(&xd) {
                        if x >= lo && x <= hi {
                            *gi += go;
                        }
                    }
                });
            }
            Op::SoftmaxC { input, out } => {
                let Some(gout) = self.grads[out.0].take() else { return };
                let (c, h, w) = self.chw(input).unwrap();
                let plane = h * w;
                let od = self.data(out).to_vec();
                self.add_to_grad(input, |g| {
                    for p in 0..plane {
                        let mut dot = T::ZERO;
                        for ch in 0..c {
                            dot += gout[ch * plane + p] * od[ch * plane + p];
                        }
                        for ch in 0..c {
                            let y = od[ch * plane + p];
                            g[ch * plane + p] += y * (gout[ch * plane + p] - dot);
                        }
                    }
                });
            }
            Op::RoundSte { input, out } => {
                let Some(gout) = self.grads[out.0].take() else { return };
                self.add_to_grad(input, |g| add_into(g, &gout));
            }
            Op::SumAll { input, out } => {
                let Some(gout) = self.grads[out.0].take() else { return };
                let go = gout[0];
                self.add_to_grad(input, |g| {
                    for gi in g.iter_mut() {
                        *gi += go;
                    }
                });
            }
            Op::MeanAll { input, out } => {
                let Some(gout) = self.grads[out.0].take() else { return };
                let n = self.numel(input);
                let go = gout[0] / T::from_f64(n as f64);
                self.add_to_grad(input, |g| {
                    for gi in g.iter_mut() {
                        *gi += go;
                    }
                });
            }
        }
    }
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (T::ZERO - x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::registry::ParamRegistry;
    use crate::autodiff::tensor::Tensor;

    fn snapshot_with(params: &[(&str, Vec<usize>, Vec<f64>)]) -> Arc<ParamSnapshot<f64>> {
        let mut reg = ParamRegistry::new();
        for (name, shape, data) in params {
            let data32: Vec<f32> = data.iter().map(|&v| v as f32).collect();
            reg.insert(name, Tensor::new(shape.clone(), data32).unwrap()).unwrap();
        }
        reg.snapshot()
    }

    #[test]
    fn shared_operand_accumulates_both_paths() {
        let snap = snapshot_with(&[("x", vec![2], vec![3.0, -1.0])]);
        let mut g = Graph::<f64>::new(snap, TrainFilter::All, GraphFlags::default());
        let x = g.param("x").unwrap();
        let y = g.mul(x, x).unwrap();
        let s = g.sum_all(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].0, "x");
        assert_eq!(grads[0].1, vec![6.0, -2.0]);
    }

    #[test]
    fn param_lookup_is_memoized() {
        let snap = snapshot_with(&[("w", vec![1], vec![2.0])]);
        let mut g = Graph::<f64>::new(snap, TrainFilter::All, GraphFlags::default());
        let a = g.param("w").unwrap();
        let b = g.param("w").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_filter_freezes_unlisted_params() {
        let snap = snapshot_with(&[
            ("a.w", vec![1], vec![2.0]),
            ("b.w", vec![1], vec![3.0]),
        ]);
        let filter = TrainFilter::Prefixes(vec!["a.".to_string()]);
        let mut g = Graph::<f64>::new(snap, filter, GraphFlags::default());
        let a = g.param("a.w").unwrap();
        let b = g.param("b.w").unwrap();
        let p = g.mul(a, b).unwrap();
        let s = g.sum_all(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].0, "a.w");
        assert_eq!(grads[0].1, vec![3.0]);
    }

    #[test]
    fn round_ste_passes_gradient_unchanged() {
        let snap = snapshot_with(&[("x", vec![3], vec![0.2, 1.5, -2.7])]);
        let mut g = Graph::<f64>::new(snap, TrainFilter::All, GraphFlags::default());
        let x = g.param("x").unwrap();
        let r = g.round_ste(x).unwrap();
        assert_eq!(g.data(r), &[0.0, 2.0, -3.0]);
        let s = g.sum_all(r).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads[0].1, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn round_as_identity_flag_disables_rounding() {
        let snap = snapshot_with(&[("x", vec![1], vec![0.75])]);
        let flags = GraphFlags { round_as_identity: true, ..Default::default() };
        let mut g = Graph::<f64>::new(snap, TrainFilter::All, flags);
        let x = g.param("x").unwrap();
        let r = g.round_ste(x).unwrap();
        assert_eq!(g.data(r), &[0.75]);
    }

    #[test]
    fn clamp_gradient_is_inclusive_at_bounds() {
        let snap = snapshot_with(&[("x", vec![4], vec![-2.0, -1.0, 0.5, 1.0])]);
        let mut g = Graph::<f64>::new(snap, TrainFilter::All, GraphFlags::default());
        let x = g.param("x").unwrap();
        let c = g.clamp(x, -1.0, 1.0).unwrap();
        let s = g.sum_all(c).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads[0].1, vec![0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let snap = snapshot_with(&[("x", vec![3, 1, 2], vec![0.1, -3.0, 2.0, 0.0, -1.0, 5.0])]);
        let mut g = Graph::<f64>::new(snap, TrainFilter::All, GraphFlags::default());
        let x = g.param("x").unwrap();
        let y = g.softmax_c(x).unwrap();
        let d = g.data(y);
        for p in 0..2 {
            let s: f64 = (0..3).map(|c| d[c * 2 + p]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_ops_roundtrip() {
        let snap = snapshot_with(&[("x", vec![1, 2, 4], (0..8).map(|v| v as f64).collect())]);
        let mut g = Graph::<f64>::new(snap, TrainFilter::All, GraphFlags::default());
        let x = g.param("x").unwrap();
        let t = g.transpose_hw(x).unwrap();
        assert_eq!(g.shape(t), &[1, 4, 2]);
        let back = g.transpose_hw(t).unwrap();
        assert_eq!(g.data(back), g.data(x));
        let even = g.deinterleave_w(x, 0).unwrap();
        let odd = g.deinterleave_w(x, 1).unwrap();
        assert_eq!(g.data(even), &[0.0, 2.0, 4.0, 6.0]);
        assert_eq!(g.data(odd), &[1.0, 3.0, 5.0, 7.0]);
        let merged = g.interleave_w(even, odd).unwrap();
        assert_eq!(g.data(merged), g.data(x));
    }

    #[test]
    fn concat_slice_roundtrip_and_grads() {
        let snap = snapshot_with(&[
            ("a", vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]),
            ("b", vec![2, 2, 2], (5..13).map(|v| v as f64).collect()),
        ]);
        let mut g = Graph::<f64>::new(snap, TrainFilter::All, GraphFlags::default());
        let a = g.param("a").unwrap();
        let b = g.param("b").unwrap();
        let cat = g.concat_c(&[a, b]).unwrap();
        assert_eq!(g.shape(cat), &[3, 2, 2]);
        let mid = g.slice_c(cat, 1, 2).unwrap();
        assert_eq!(g.data(mid), &[5.0, 6.0, 7.0, 8.0]);
        let s = g.sum_all(mid).unwrap();
        let grads = g.backward(s).unwrap();
        // Only b's first channel is in the sliced window.
        assert_eq!(grads.iter().find(|(n, _)| n == "b").unwrap().1, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(grads.iter().all(|(n, _)| n != "a") || grads.iter().find(|(n, _)| n == "a").unwrap().1.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upsample_doubles_and_backward_pools() {
        let snap = snapshot_with(&[("x", vec![1, 1, 2], vec![3.0, 7.0])]);
        let mut g = Graph::<f64>::new(snap, TrainFilter::All, GraphFlags::default());
        let x = g.param("x").unwrap();
        let u = g.upsample2x(x).unwrap();
        assert_eq!(g.shape(u), &[1, 2, 4]);
        assert_eq!(g.data(u), &[3.0, 3.0, 7.0, 7.0, 3.0, 3.0, 7.0, 7.0]);
        let s = g.sum_all(u).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads[0].1, vec![4.0, 4.0]);
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let snap = snapshot_with(&[("x", vec![1], vec![1.0])]);
        let mut g = Graph::<f64>::new(snap, TrainFilter::All, GraphFlags::default());
        let x = g.param("x").unwrap();
        let z = g.zeros(&[1]).unwrap();
        assert!(g.div(x, z).is_err());
    }

    #[test]
    fn ln_of_negative_is_an_error() {
        let snap = snapshot_with(&[("x", vec![1], vec![-1.0])]);
        let mut g = Graph::<f64>::new(snap, TrainFilter::All, GraphFlags::default());
        let x = g.param("x").unwrap();
        assert!(g.ln(x).is_err());
    }

    #[test]
    fn scalar_chain_matches_hand_derivative() {
        // loss = mean((x * s) / s) with s trainable: d loss / d s = 0 in
        // exact arithmetic; check both branches receive gradients.
        let snap = snapshot_with(&[
            ("x", vec![2], vec![1.0, 3.0]),
            ("s", Vec::new(), vec![4.0]),
        ]);
        let mut g = Graph::<f64>::new(snap, TrainFilter::All, GraphFlags::default());
        let x = g.param("x").unwrap();
        let s = g.param("s").unwrap();
        let m = g.mul_scalar_t(x, s).unwrap();
        let d = g.div_scalar_t(m, s).unwrap();
        let loss = g.mean_all(d).unwrap();
        let grads = g.backward(loss).unwrap();
        let gx = &grads.iter().find(|(n, _)| n == "x").unwrap().1;
        assert!((gx[0] - 0.5).abs() < 1e-12 && (gx[1] - 0.5).abs() < 1e-12);
        let gs = grads.iter().find(|(n, _)| n == "s").unwrap().1[0];
        assert!(gs.abs() < 1e-12);
    }
}
