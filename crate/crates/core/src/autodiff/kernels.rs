//! Convolution kernels.
//!
//! Two forward paths with one contract each:
//!
//! * `conv2d_stable` sweeps taps in (cin, ky, kx) order with per-position
//!   slice loops, so every output element accumulates its products in exactly
//!   that order. `conv_at` replays the same order for a single position; the
//!   decoder uses it to reproduce encoder-side values bit for bit.
//! * `conv2d_gemm` lowers to im2col + GEMM. Reduction order is unspecified;
//!   training graphs use it for speed.
//!
//! Backward passes always go through the GEMM route (gradients have no
//! bit-exactness contract, only determinism for a fixed build).

use super::scalar::Real;

/// Spatial padding for same-size convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pad {
    /// Whole-sample reflection: index -1 maps to 1, index n to n-2.
    /// The edge sample is not repeated. Length-1 axes replicate.
    Symmetric,
    Zero,
}

/// Raster-scan causal masks for 3x3 kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    /// Strictly-before-center taps only.
    A,
    /// Before-center taps plus the center.
    B,
}

impl Mask {
    #[inline]
    pub fn allows(self, ky: usize, kx: usize) -> bool {
        match self {
            Mask::A => ky == 0 || (ky == 1 && kx == 0),
            Mask::B => ky == 0 || (ky == 1 && kx <= 1),
        }
    }
}

/// Whole-sample reflection of a possibly out-of-range index.
#[inline]
pub fn reflect(mut i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    #[inline]
    fn plane(&self) -> usize {
        self.h * self.w
    }
    #[inline]
    fn ksize(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

/// Order-stable forward. `out` must hold batch*cout*h*w elements and is
/// overwritten. Masked taps and zero-pad out-of-range taps contribute by
/// being skipped, never by adding a zero product.
pub fn conv2d_stable<T: Real>(
    dims: ConvDims,
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    pad: Pad,
    mask: Option<Mask>,
    out: &mut [T],
) {
    let ConvDims { batch, cin, cout, h, w, kh, kw } = dims;
    let plane = dims.plane();
    let ry = (kh / 2) as isize;
    let rx = (kw / 2) as isize;
    out.fill(T::ZERO);
    for b in 0..batch {
        for co in 0..cout {
            let out_plane = &mut out[(b * cout + co) * plane..][..plane];
            for ci in 0..cin {
                let in_plane = &input[(b * cin + ci) * plane..][..plane];
                for ky in 0..kh {
                    let dy = ky as isize - ry;
                    for kx in 0..kw {
                        let dx = kx as isize - rx;
                        if let Some(m) = mask {
                            if !m.allows(ky, kx) {
                                continue;
                            }
                        }
                        let k = kernel[((co * cin + ci) * kh + ky) * kw + kx];
                        accumulate_tap(in_plane, out_plane, h, w, dy, dx, k, pad);
                    }
                }
            }
            if let Some(bias) = bias {
                let bv = bias[co];
                for v in out_plane.iter_mut() {
                    *v += bv;
                }
            }
        }
    }
}

/// Adds k * input shifted by (dy, dx) into out, honoring the padding rule.
#[inline]
fn accumulate_tap<T: Real>(
    in_plane: &[T],
    out_plane: &mut [T],
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
    k: T,
    pad: Pad,
) {
    // Column range whose source column is in-bounds without reflection.
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx.max(0)).max(lo as isize) as usize;
    for oy in 0..h {
        let iy = oy as isize + dy;
        let iy = match pad {
            Pad::Zero => {
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                iy as usize
            }
            Pad::Symmetric => reflect(iy, h),
        };
        let in_row = &in_plane[iy * w..][..w];
        let out_row = &mut out_plane[oy * w..][..w];
        if pad == Pad::Symmetric {
            for ox in 0..lo {
                out_row[ox] += k * in_row[reflect(ox as isize + dx, w)];
            }
        }
        // Interior: contiguous slices, vectorizable, no reduction reorder.
        let src = &in_row[(lo as isize + dx) as usize..(hi as isize + dx) as usize];
        for (o, &i) in out_row[lo..hi].iter_mut().zip(src) {
            *o += k * i;
        }
        if pad == Pad::Symmetric {
            for ox in hi..w {
                out_row[ox] += k * in_row[reflect(ox as isize + dx, w)];
            }
        }
    }
}

/// Single-position forward matching `conv2d_stable` bit for bit: the
/// accumulation order per output channel is (cin, ky, kx) with skipped
/// masked/out-of-range taps, bias added last. Input is one batch element
/// [cin, h, w]; `out` receives cout values.
#[allow(clippy::too_many_arguments)]
pub fn conv_at<T: Real>(
    input: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kernel: &[T],
    cout: usize,
    kh: usize,
    kw: usize,
    bias: Option<&[T]>,
    pad: Pad,
    mask: Option<Mask>,
    y: usize,
    x: usize,
    out: &mut [T],
) {
    let plane = h * w;
    let ry = (kh / 2) as isize;
    let rx = (kw / 2) as isize;
    for co in 0..cout {
        let mut acc = T::ZERO;
        for ci in 0..cin {
            let in_plane = &input[ci * plane..][..plane];
            for ky in 0..kh {
                for kx in 0..kw {
                    if let Some(m) = mask {
                        if !m.allows(ky, kx) {
                            continue;
                        }
                    }
                    let iy = y as isize + ky as isize - ry;
                    let ix = x as isize + kx as isize - rx;
                    let (iy, ix) = match pad {
                        Pad::Zero => {
                            if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                continue;
                            }
                            (iy as usize, ix as usize)
                        }
                        Pad::Symmetric => (reflect(iy, h), reflect(ix, w)),
                    };
                    let k = kernel[((co * cin + ci) * kh + ky) * kw + kx];
                    acc += k * in_plane[iy * w + ix];
                }
            }
        }
        if let Some(bias) = bias {
            acc += bias[co];
        }
        out[co] = acc;
    }
}

/// Fills the im2col matrix: row r = (ci, ky, kx), column n = (b, oy, ox),
/// row-major with stride batch*h*w.
fn im2col<T: Real>(dims: ConvDims, input: &[T], pad: Pad, col: &mut [T]) {
    let ConvDims { batch, cin, h, w, kh, kw, .. } = dims;
    let plane = dims.plane();
    let n = batch * plane;
    let ry = (kh / 2) as isize;
    let rx = (kw / 2) as isize;
    let mut row = 0usize;
    for ci in 0..cin {
        for ky in 0..kh {
            let dy = ky as isize - ry;
            for kx in 0..kw {
                let dx = kx as isize - rx;
                let dst_row = &mut col[row * n..][..n];
                for b in 0..batch {
                    let in_plane = &input[(b * cin + ci) * plane..][..plane];
                    let dst = &mut dst_row[b * plane..][..plane];
                    fill_shifted(in_plane, dst, h, w, dy, dx, pad);
                }
                row += 1;
            }
        }
    }
}

#[inline]
fn fill_shifted<T: Real>(
    in_plane: &[T],
    dst: &mut [T],
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
    pad: Pad,
) {
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx.max(0)).max(lo as isize) as usize;
    for oy in 0..h {
        let iy = oy as isize + dy;
        let dst_row = &mut dst[oy * w..][..w];
        let iy = match pad {
            Pad::Zero => {
                if iy < 0 || iy >= h as isize {
                    dst_row.fill(T::ZERO);
                    continue;
                }
                iy as usize
            }
            Pad::Symmetric => reflect(iy, h),
        };
        let in_row = &in_plane[iy * w..][..w];
        match pad {
            Pad::Zero => {
                dst_row[..lo].fill(T::ZERO);
                dst_row[hi..].fill(T::ZERO);
            }
            Pad::Symmetric => {
                for ox in 0..lo {
                    dst_row[ox] = in_row[reflect(ox as isize + dx, w)];
                }
                for ox in hi..w {
                    dst_row[ox] = in_row[reflect(ox as isize + dx, w)];
                }
            }
        }
        dst_row[lo..hi].copy_from_slice(&in_row[(lo as isize + dx) as usize..(hi as isize + dx) as usize]);
    }
}

/// GEMM forward. Masked kernels are zeroed at the masked taps before the
/// multiply, which keeps outputs value-identical to skipping those taps.
pub fn conv2d_gemm<T: Real>(
    dims: ConvDims,
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    pad: Pad,
    mask: Option<Mask>,
    out: &mut [T],
) {
    let ConvDims { batch, cout, .. } = dims;
    let plane = dims.plane();
    let k = dims.ksize();
    let n = batch * plane;
    let mut col = vec![T::ZERO; k * n];
    im2col(dims, input, pad, &mut col);
    let masked_kernel;
    let kmat: &[T] = match mask {
        Some(m) => {
            masked_kernel = apply_mask(dims, kernel, m);
            &masked_kernel
        }
        None => kernel,
    };
    for b in 0..batch {
        // C[co, (oy,ox)] for this batch element.
        unsafe {
            T::gemm(
                cout,
                k,
                plane,
                T::ONE,
                kmat.as_ptr(),
                k as isize,
                1,
                col.as_ptr().add(b * plane),
                n as isize,
                1,
                T::ZERO,
                out.as_mut_ptr().add(b * cout * plane),
                plane as isize,
                1,
            );
        }
    }
    if let Some(bias) = bias {
        for b in 0..batch {
            for co in 0..cout {
                let bv = bias[co];
                for v in out[(b * cout + co) * plane..][..plane].iter_mut() {
                    *v += bv;
                }
            }
        }
    }
}

fn apply_mask<T: Real>(dims: ConvDims, kernel: &[T], mask: Mask) -> Vec<T> {
    let ConvDims { cin, cout, kh, kw, .. } = dims;
    let mut k = kernel.to_vec();
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    if !mask.allows(ky, kx) {
                        k[((co * cin + ci) * kh + ky) * kw + kx] = T::ZERO;
                    }
                }
            }
        }
    }
    k
}

/// Backward pass. Accumulates into the provided gradient buffers.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    dims: ConvDims,
    input: &[T],
    kernel: &[T],
    pad: Pad,
    mask: Option<Mask>,
    gout: &[T],
    dinput: Option<&mut [T]>,
    dkernel: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let ConvDims { batch, cin, cout, kh, kw, .. } = dims;
    let plane = dims.plane();
    let k = dims.ksize();
    let n = batch * plane;

    if let Some(dbias) = dbias {
        for b in 0..batch {
            for co in 0..cout {
                let mut s = T::ZERO;
                for &g in &gout[(b * cout + co) * plane..][..plane] {
                    s += g;
                }
                dbias[co] += s;
            }
        }
    }

    if let Some(dkernel) = dkernel {
        let mut col = vec![T::ZERO; k * n];
        im2col(dims, input, pad, &mut col);
        for b in 0..batch {
            // dK[co, r] += G[co, pos] * col[r, pos]^T
            unsafe {
                T::gemm(
                    cout,
                    plane,
                    k,
                    T::ONE,
                    gout.as_ptr().add(b * cout * plane),
                    plane as isize,
                    1,
                    col.as_ptr().add(b * plane),
                    1,
                    n as isize,
                    T::ONE,
                    dkernel.as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
        }
        if let Some(m) = mask {
            // Masked taps never contribute forward; their gradient is zero.
            for co in 0..cout {
                for ci in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            if !m.allows(ky, kx) {
                                dkernel[((co * cin + ci) * kh + ky) * kw + kx] = T::ZERO;
                            }
                        }
                    }
                }
            }
        }
    }

    if let Some(dinput) = dinput {
        let masked_kernel;
        let kmat: &[T] = match mask {
            Some(m) => {
                masked_kernel = apply_mask(dims, kernel, m);
                &masked_kernel
            }
            None => kernel,
        };
        let mut dcol = vec![T::ZERO; k * n];
        for b in 0..batch {
            // dcol[r, pos] = K^T[r, co] * G[co, pos]
            unsafe {
                T::gemm(
                    k,
                    cout,
                    plane,
                    T::ONE,
                    kmat.as_ptr(),
                    1,
                    k as isize,
                    gout.as_ptr().add(b * cout * plane),
                    plane as isize,
                    1,
                    T::ZERO,
                    dcol.as_mut_ptr().add(b * plane),
                    n as isize,
                    1,
                );
            }
        }
        col2im_add(dims, &dcol, pad, dinput);
    }
}

/// Scatter-adds the column gradient back onto input positions. Reflected
/// taps accumulate onto their mirror source; zero-pad taps vanish.
fn col2im_add<T: Real>(dims: ConvDims, dcol: &[T], pad: Pad, dinput: &mut [T]) {
    let ConvDims { batch, cin, h, w, kh, kw, .. } = dims;
    let plane = dims.plane();
    let n = batch * plane;
    let ry = (kh / 2) as isize;
    let rx = (kw / 2) as isize;
    let mut row = 0usize;
    for ci in 0..cin {
        for ky in 0..kh {
            let dy = ky as isize - ry;
            for kx in 0..kw {
                let dx = kx as isize - rx;
                let src_row = &dcol[row * n..][..n];
                for b in 0..batch {
                    let dst = &mut dinput[(b * cin + ci) * plane..][..plane];
                    let src = &src_row[b * plane..][..plane];
                    for oy in 0..h {
                        let iy = oy as isize + dy;
                        let iy = match pad {
                            Pad::Zero => {
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                iy as usize
                            }
                            Pad::Symmetric => reflect(iy, h),
                        };
                        for ox in 0..w {
                            let ix = ox as isize + dx;
                            let ix = match pad {
                                Pad::Zero => {
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    ix as usize
                                }
                                Pad::Symmetric => reflect(ix, w),
                            };
                            dst[iy * w + ix] += src[oy * w + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(
        dims: ConvDims,
        input: &[f64],
        kernel: &[f64],
        bias: Option<&[f64]>,
        pad: Pad,
        mask: Option<Mask>,
    ) -> Vec<f64> {
        let ConvDims { batch, cin, cout, h, w, kh, kw } = dims;
        let plane = h * w;
        let mut out = vec![0.0; batch * cout * plane];
        for b in 0..batch {
            for co in 0..cout {
                for oy in 0..h {
                    for ox in 0..w {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    if let Some(m) = mask {
                                        if !m.allows(ky, kx) {
                                            continue;
                                        }
                                    }
                                    let iy = oy as isize + ky as isize - (kh / 2) as isize;
                                    let ix = ox as isize + kx as isize - (kw / 2) as isize;
                                    let (iy, ix) = match pad {
                                        Pad::Zero => {
                                            if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            (iy as usize, ix as usize)
                                        }
                                        Pad::Symmetric => (reflect(iy, h), reflect(ix, w)),
                                    };
                                    acc += kernel[((co * cin + ci) * kh + ky) * kw + kx]
                                        * input[(b * cin + ci) * plane + iy * w + ix];
                                }
                            }
                        }
                        if let Some(bias) = bias {
                            acc += bias[co];
                        }
                        out[(b * cout + co) * plane + oy * w + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(seq: &mut u64) -> f64 {
        // Small deterministic generator for test data.
        *seq = seq.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seq >> 33) as f64 / (1u64 << 31) as f64) - 0.5
    }

    #[test]
    fn reflect_examples() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(0, 1), 0);
        assert_eq!(reflect(-1, 1), 0);
        assert_eq!(reflect(-1, 2), 1);
        assert_eq!(reflect(2, 2), 0);
    }

    #[test]
    fn stable_and_gemm_match_brute_force() {
        let mut seq = 7u64;
        for &(h, w, cin, cout, kh, kw) in
            &[(5, 7, 1, 2, 3, 3), (4, 4, 3, 2, 3, 1), (1, 6, 2, 1, 1, 3), (3, 3, 2, 2, 1, 1), (2, 2, 1, 1, 3, 3)]
        {
            for &pad in &[Pad::Zero, Pad::Symmetric] {
                let dims = ConvDims { batch: 2, cin, cout, h, w, kh, kw };
                let input: Vec<f64> = (0..2 * cin * h * w).map(|_| pseudo(&mut seq)).collect();
                let kernel: Vec<f64> = (0..cout * cin * kh * kw).map(|_| pseudo(&mut seq)).collect();
                let bias: Vec<f64> = (0..cout).map(|_| pseudo(&mut seq)).collect();
                let want = brute_force(dims, &input, &kernel, Some(&bias), pad, None);
                let mut got = vec![0.0; want.len()];
                conv2d_stable(dims, &input, &kernel, Some(&bias), pad, None, &mut got);
                for (a, b) in got.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-12, "stable mismatch {a} vs {b}");
                }
                conv2d_gemm(dims, &input, &kernel, Some(&bias), pad, None, &mut got);
                for (a, b) in got.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-9, "gemm mismatch {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn masked_paths_match_brute_force() {
        let mut seq = 21u64;
        for &mask in &[Mask::A, Mask::B] {
            let dims = ConvDims { batch: 1, cin: 2, cout: 3, h: 5, w: 4, kh: 3, kw: 3 };
            let input: Vec<f64> = (0..2 * 20).map(|_| pseudo(&mut seq)).collect();
            let kernel: Vec<f64> = (0..3 * 2 * 9).map(|_| pseudo(&mut seq)).collect();
            let want = brute_force(dims, &input, &kernel, None, Pad::Zero, Some(mask));
            let mut got = vec![0.0; want.len()];
            conv2d_stable(dims, &input, &kernel, None, Pad::Zero, Some(mask), &mut got);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
            conv2d_gemm(dims, &input, &kernel, None, Pad::Zero, Some(mask), &mut got);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn conv_at_is_bit_identical_to_stable_full_map() {
        // f32 on purpose: this is the encoder/decoder agreement contract.
        let mut seq = 3u64;
        for &(mask, kh, kw, cin, cout) in &[
            (Some(Mask::A), 3, 3, 1, 8),
            (Some(Mask::B), 3, 3, 8, 8),
            (None, 1, 1, 8, 4),
            (None, 3, 3, 2, 3),
        ] {
            let (h, w) = (6, 5);
            let pad = if mask.is_some() { Pad::Zero } else { Pad::Symmetric };
            let dims = ConvDims { batch: 1, cin, cout, h, w, kh, kw };
            let input: Vec<f32> = (0..cin * h * w).map(|_| pseudo(&mut seq) as f32).collect();
            let kernel: Vec<f32> = (0..cout * cin * kh * kw).map(|_| pseudo(&mut seq) as f32).collect();
            let bias: Vec<f32> = (0..cout).map(|_| pseudo(&mut seq) as f32).collect();
            let mut full = vec![0.0f32; cout * h * w];
            conv2d_stable(dims, &input, &kernel, Some(&bias), pad, mask, &mut full);
            let mut at = vec![0.0f32; cout];
            for y in 0..h {
                for x in 0..w {
                    conv_at(&input, cin, h, w, &kernel, cout, kh, kw, Some(&bias), pad, mask, y, x, &mut at);
                    for co in 0..cout {
                        let a = full[co * h * w + y * w + x];
                        assert!(
                            a.to_bits() == at[co].to_bits(),
                            "bit mismatch at co={co} y={y} x={x}: {a} vs {}",
                            at[co]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut seq = 11u64;
        let dims = ConvDims { batch: 1, cin: 2, cout: 2, h: 4, w: 3, kh: 3, kw: 3 };
        let plane = 12;
        let input: Vec<f64> = (0..dims.cin * plane).map(|_| pseudo(&mut seq)).collect();
        let kernel: Vec<f64> = (0..dims.cout * dims.cin * 9).map(|_| pseudo(&mut seq)).collect();
        let bias: Vec<f64> = (0..dims.cout).map(|_| pseudo(&mut seq)).collect();
        // Loss = sum(out * weights) for a fixed random weighting.
        let lw: Vec<f64> = (0..dims.cout * plane).map(|_| pseudo(&mut seq)).collect();
        for &pad in &[Pad::Zero, Pad::Symmetric] {
            let loss = |inp: &[f64], ker: &[f64], bia: &[f64]| -> f64 {
                let mut out = vec![0.0; dims.cout * plane];
                conv2d_gemm(dims, inp, ker, Some(bia), pad, None, &mut out);
                out.iter().zip(&lw).map(|(o, w)| o * w).sum()
            };
            let mut din = vec![0.0; input.len()];
            let mut dker = vec![0.0; kernel.len()];
            let mut dbias = vec![0.0; bias.len()];
            conv2d_backward(
                dims, &input, &kernel, pad, None, &lw,
                Some(&mut din), Some(&mut dker), Some(&mut dbias),
            );
            let eps = 1e-6;
            for idx in [0usize, 5, 11, input.len() - 1] {
                let mut ip = input.clone();
                ip[idx] += eps;
                let up = loss(&ip, &kernel, &bias);
                ip[idx] -= 2.0 * eps;
                let dn = loss(&ip, &kernel, &bias);
                let fd = (up - dn) / (2.0 * eps);
                assert!((fd - din[idx]).abs() < 1e-6, "dinput[{idx}] fd={fd} got={}", din[idx]);
            }
            for idx in [0usize, 7, kernel.len() - 1] {
                let mut kp = kernel.clone();
                kp[idx] += eps;
                let up = loss(&input, &kp, &bias);
                kp[idx] -= 2.0 * eps;
                let dn = loss(&input, &kp, &bias);
                let fd = (up - dn) / (2.0 * eps);
                assert!((fd - dker[idx]).abs() < 1e-6, "dkernel[{idx}] fd={fd} got={}", dker[idx]);
            }
            for idx in 0..bias.len() {
                let mut bp = bias.clone();
                bp[idx] += eps;
                let up = loss(&input, &kernel, &bp);
                bp[idx] -= 2.0 * eps;
                let dn = loss(&input, &kernel, &bp);
                let fd = (up - dn) / (2.0 * eps);
                assert!((fd - dbias[idx]).abs() < 1e-6);
            }
        }
    }
}
