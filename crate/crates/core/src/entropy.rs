//! Mixture entropy model over quantized coefficients.
//!
//! The context model emits raw per-position parameters for a K-component
//! Gaussian mixture: channels [0, K) are weight logits, [K, 2K) means,
//! [2K, 3K) log standard deviations. Integer symbol bins get probability
//! mass from the mixture CDF difference across the bin edges.
//!
//! Two incarnations coexist on purpose. The graph builders run on tensors
//! and are differentiable; they drive training and the coder-side rate
//! estimate. The scalar helpers run in f64 on raw f32 parameters and feed
//! the arithmetic coder; encoder and decoder both call them on bit-identical
//! inputs, so the integer frequency tables agree without any side channel.

use crate::autodiff::scalar::erf_f64;
use crate::autodiff::{BufId, Graph, Real};
use crate::error::{Error, Result};

/// Smallest bin probability used in rate estimates.
pub const MASS_FLOOR: f64 = 1.0 / 65536.0;
/// Clamp bounds for log standard deviation, ln(1e-3) and ln(1e4).
pub const LOG_SIGMA_LO: f64 = -6.907755278982137;
pub const LOG_SIGMA_HI: f64 = 9.210340371976184;
/// Total span of an integer frequency table.
pub const CDF_TOTAL: u32 = 1 << 16;
/// Symbol magnitudes above this cannot be coded.
pub const MAX_SYMBOL: i32 = i16::MAX as i32;

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Activated mixture parameters as graph buffers, each [K, H, W].
pub struct GmmBufs {
    pub weights: BufId,
    pub means: BufId,
    /// Standard deviations pre-scaled by sqrt(2) for the erf argument.
    pub sigmas_x2: BufId,
}

/// Splits and activates raw [3K, H, W] parameters.
pub fn activate<T: Real>(g: &mut Graph<T>, raw: BufId, k: usize) -> Result<GmmBufs> {
    let logits = g.slice_c(raw, 0, k)?;
    let weights = g.softmax_c(logits)?;
    let means = g.slice_c(raw, k, 2 * k)?;
    let log_sigma = g.slice_c(raw, 2 * k, 3 * k)?;
    let log_sigma = g.clamp(log_sigma, T::from_f64(LOG_SIGMA_LO), T::from_f64(LOG_SIGMA_HI))?;
    let sigmas = g.exp(log_sigma)?;
    let sigmas_x2 = g.scale(sigmas, T::from_f64(SQRT_2))?;
    Ok(GmmBufs { weights, means, sigmas_x2 })
}

/// Per-position bin mass for integer symbols, floored; [1, H, W].
///
/// `symbols` holds the integer values as floats (the straight-through
/// quantizer output divided by the gain is already on that lattice).
pub fn bin_mass<T: Real>(g: &mut Graph<T>, symbols: BufId, gmm: &GmmBufs, k: usize) -> Result<BufId> {
    let half = T::from_f64(0.5);
    let mut acc: Option<BufId> = None;
    for i in 0..k {
        let mu = g.slice_c(gmm.means, i, i + 1)?;
        let s2 = g.slice_c(gmm.sigmas_x2, i, i + 1)?;
        let w = g.slice_c(gmm.weights, i, i + 1)?;
        let hi = g.add_scalar(symbols, half)?;
        let hi = g.sub(hi, mu)?;
        let hi = g.div(hi, s2)?;
        let hi = g.erf(hi)?;
        let lo = g.add_scalar(symbols, T::from_f64(-0.5))?;
        let lo = g.sub(lo, mu)?;
        let lo = g.div(lo, s2)?;
        let lo = g.erf(lo)?;
        let d = g.sub(hi, lo)?;
        let d = g.scale(d, half)?;
        let term = g.mul(w, d)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    let mass = acc.expect("mixture count is validated nonzero");
    g.clamp(mass, T::from_f64(MASS_FLOOR), T::ONE)
}

/// Total estimated bits for one subband: sum of -log2(mass).
pub fn rate_bits<T: Real>(g: &mut Graph<T>, symbols: BufId, raw: BufId, k: usize) -> Result<BufId> {
    let gmm = activate(g, raw, k)?;
    let mass = bin_mass(g, symbols, &gmm, k)?;
    let ln_mass = g.ln(mass)?;
    let total = g.sum_all(ln_mass)?;
    g.scale(total, T::from_f64(-std::f64::consts::LOG2_E))
}

/// Activated mixture parameters at one position, in f64.
#[derive(Debug, Clone)]
pub struct GmmPoint {
    pub k: usize,
    pub w: [f64; 8],
    pub mu: [f64; 8],
    /// sigma * sqrt(2)
    pub sigma_x2: [f64; 8],
}

/// Activates one position's raw parameters (length 3K, channel order as
/// produced by the context model). All arithmetic is f64 so encoder and
/// decoder reach identical values from identical f32 inputs.
pub fn activate_at(raw: &[f32], k: usize) -> GmmPoint {
    debug_assert!(k >= 1 && k <= 8 && raw.len() == 3 * k);
    let mut p = GmmPoint { k, w: [0.0; 8], mu: [0.0; 8], sigma_x2: [0.0; 8] };
    let mut max_logit = f64::NEG_INFINITY;
    for i in 0..k {
        let l = raw[i] as f64;
        if l > max_logit {
            max_logit = l;
        }
    }
    let mut total = 0.0;
    for i in 0..k {
        let e = (raw[i] as f64 - max_logit).exp();
        p.w[i] = e;
        total += e;
    }
    for i in 0..k {
        p.w[i] /= total;
        p.mu[i] = raw[k + i] as f64;
        let ls = (raw[2 * k + i] as f64).clamp(LOG_SIGMA_LO, LOG_SIGMA_HI);
        p.sigma_x2[i] = ls.exp() * SQRT_2;
    }
    p
}

/// Unfloored mass of integer bin `s` under the mixture.
pub fn mass_at(p: &GmmPoint, s: i32) -> f64 {
    let s = s as f64;
    let mut m = 0.0;
    for i in 0..p.k {
        let hi = ((s + 0.5) - p.mu[i]) / p.sigma_x2[i];
        let lo = ((s - 0.5) - p.mu[i]) / p.sigma_x2[i];
        m += p.w[i] * (0.5 * (erf_f64(hi) - erf_f64(lo)));
    }
    m
}

/// Estimate-side bits for one bin.
pub fn bits_at(p: &GmmPoint, s: i32) -> f64 {
    -(mass_at(p, s).max(MASS_FLOOR).min(1.0)).log2()
}

/// Builds an integer frequency table summing exactly to 2^16.
///
/// Every symbol keeps a span of at least 1 so anything stays codable.
/// The remaining budget is split proportionally by floor, leftovers going
/// to the largest fractional remainders, ties to the lowest symbol.
/// Returns the cumulative table, length `masses.len() + 1`.
pub fn integer_cdf(masses: &[f64]) -> Result<Vec<u32>> {
    let n = masses.len();
    if n == 0 || n > (CDF_TOTAL / 2) as usize {
        return Err(Error::Numeric(format!("alphabet size {n} outside 1..=32768")));
    }
    let mut clean = vec![0.0f64; n];
    let mut total = 0.0;
    for (i, &m) in masses.iter().enumerate() {
        if !m.is_finite() {
            return Err(Error::Numeric(format!("non-finite mass at symbol {i}")));
        }
        clean[i] = m.max(0.0);
        total += clean[i];
    }
    let budget = CDF_TOTAL - n as u32;
    let mut spans = vec![1u32; n];
    let mut rem: Vec<(usize, f64)> = Vec::with_capacity(n);
    let mut used = 0u32;
    for i in 0..n {
        let share = if total > 0.0 {
            budget as f64 * (clean[i] / total)
        } else {
            budget as f64 / n as f64
        };
        let fl = share.floor();
        spans[i] += fl as u32;
        used += fl as u32;
        rem.push((i, share - fl));
    }
    let mut left = budget - used;
    rem.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for &(i, _) in rem.iter() {
        if left == 0 {
            break;
        }
        spans[i] += 1;
        left -= 1;
    }
    let mut cdf = Vec::with_capacity(n + 1);
    let mut acc = 0u32;
    cdf.push(0);
    for s in spans {
        acc += s;
        cdf.push(acc);
    }
    debug_assert_eq!(acc, CDF_TOTAL);
    Ok(cdf)
}

/// Exact bits the coder spends on a symbol with the given span.
pub fn span_bits(span: u32) -> f64 {
    -((span as f64) / CDF_TOTAL as f64).log2()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{assert_all_pass, finite_difference_check, GradCheckCfg};
    use crate::autodiff::{GraphFlags, ParamRegistry, ParamSnapshot, Tensor, TrainFilter};
    use std::sync::Arc;

    fn unit_gaussian() -> GmmPoint {
        let raw: Vec<f32> = vec![3.0, -20.0, -20.0, 0.0, 5.0, -5.0, 0.0, 2.0, 2.0];
        activate_at(&raw, 3)
    }

    #[test]
    fn zero_bin_of_unit_gaussian_matches_reference() {
        let p = unit_gaussian();
        // erf(0.5 / sqrt(2)) = 0.3829249...
        assert!((mass_at(&p, 0) - 0.382925).abs() < 1e-5);
    }

    #[test]
    fn mass_is_exactly_symmetric_under_negation() {
        for &(mu, ls, s) in &[(3.7f32, 0.2f32, 5i32), (-12.25, -1.0, -11), (0.1, 2.5, 0), (100.0, 1.3, 97)] {
            let p = activate_at(&[0.7, -0.4, 0.1, mu, mu * 0.5, -mu, ls, ls + 0.5, ls - 0.25], 3);
            let n = activate_at(&[0.7, -0.4, 0.1, -mu, -mu * 0.5, mu, ls, ls + 0.5, ls - 0.25], 3);
            assert_eq!(mass_at(&p, s).to_bits(), mass_at(&n, -s).to_bits());
        }
    }

    #[test]
    fn masses_sum_to_one_over_a_wide_alphabet() {
        let p = activate_at(&[0.0, 1.0, -1.0, -2.0, 0.0, 3.0, 0.4, -0.3, 0.9], 3);
        let total: f64 = (-60..=60).map(|s| mass_at(&p, s)).sum();
        assert!((total - 1.0).abs() < 1e-9, "total {total}");
    }

    #[test]
    fn weights_are_a_distribution_and_sigma_is_clamped() {
        let p = activate_at(&[5.0, -3.0, 1.0, 0.0, 0.0, 0.0, -30.0, 30.0, 0.0], 3);
        let ws: f64 = p.w[..3].iter().sum();
        assert!((ws - 1.0).abs() < 1e-12);
        assert!((p.sigma_x2[0] - 1e-3 * SQRT_2).abs() < 1e-12);
        assert!((p.sigma_x2[1] - 1e4 * SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn frequency_table_hand_cases() {
        let cdf = integer_cdf(&[0.5, 0.25, 0.25]).unwrap();
        assert_eq!(cdf, vec![0, 32768, 32768 + 16384, 65536]);
        let cdf = integer_cdf(&[0.5, 0.5]).unwrap();
        assert_eq!(cdf, vec![0, 32768, 65536]);
    }

    #[test]
    fn frequency_table_never_starves_a_symbol() {
        let mut masses = vec![1e-300; 100];
        masses[7] = 1.0;
        let cdf = integer_cdf(&masses).unwrap();
        assert_eq!(*cdf.last().unwrap(), CDF_TOTAL);
        for w in cdf.windows(2) {
            assert!(w[1] > w[0]);
        }
        assert!(cdf[8] - cdf[7] > 65_000);
    }

    #[test]
    fn frequency_table_handles_all_zero_mass() {
        let cdf = integer_cdf(&[0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(cdf, vec![0, 16384, 32768, 49152, 65536]);
    }

    #[test]
    fn frequency_table_rejects_bad_inputs() {
        assert!(integer_cdf(&[]).is_err());
        assert!(integer_cdf(&vec![1.0; 40000]).is_err());
        assert!(integer_cdf(&[0.5, f64::NAN]).is_err());
    }

    #[test]
    fn graph_rate_matches_scalar_estimate() {
        let k = 3;
        let h = 4;
        let w = 5;
        let mut raw = Vec::new();
        for c in 0..3 * k {
            for i in 0..h * w {
                raw.push(((c * 31 + i * 7) as f32 * 0.13).sin() * 1.5);
            }
        }
        let symbols: Vec<f32> = (0..h * w).map(|i| ((i as i32 % 7) - 3) as f32).collect();

        let snap: Arc<ParamSnapshot<f64>> = ParamRegistry::new().snapshot();
        let mut g = Graph::new(snap, TrainFilter::None, GraphFlags::default());
        let raw_f64: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
        let sym_f64: Vec<f64> = symbols.iter().map(|&v| v as f64).collect();
        let rb = g.input(&[3 * k, h, w], raw_f64).unwrap();
        let sb = g.input(&[1, h, w], sym_f64).unwrap();
        let rate = rate_bits(&mut g, sb, rb, k).unwrap();
        let graph_bits = g.scalar_value(rate).unwrap();

        let mut scalar_bits = 0.0;
        for i in 0..h * w {
            let mut at = Vec::with_capacity(3 * k);
            for c in 0..3 * k {
                at.push(raw[c * h * w + i]);
            }
            let p = activate_at(&at, k);
            scalar_bits += bits_at(&p, symbols[i] as i32);
        }
        assert!(
            (graph_bits - scalar_bits).abs() < 1e-6 * scalar_bits.max(1.0),
            "graph {graph_bits} scalar {scalar_bits}"
        );
    }

    #[test]
    fn rate_gradients_match_finite_differences() {
        let mut reg = ParamRegistry::new();
        let k = 2;
        let raw: Vec<f32> = (0..6 * 9).map(|i| (i as f32 * 0.37).sin()).collect();
        reg.insert("raw", Tensor::new(vec![3 * k, 3, 3], raw).unwrap()).unwrap();
        let probes = crate::autodiff::gradcheck::default_probes(&reg, 6);
        let reports = finite_difference_check(&reg, &probes, GradCheckCfg::default(), |g| {
            let raw = g.param("raw")?;
            let sym: Vec<f64> = (0..9).map(|i| ((i % 5) as f64) - 2.0).collect();
            let s = g.input(&[1, 3, 3], sym)?;
            rate_bits(g, s, raw, k)
        })
        .unwrap();
        assert_all_pass(&reports);
    }
}
