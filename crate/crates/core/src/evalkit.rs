//! Rate-distortion measurement: PSNR, Bjøntegaard delta rate, and CSV
//! import/export of RD curves.

use std::path::Path;

use crate::codec::EncodeStats;
use crate::error::{Error, Result};
use crate::pixel::ImageU8;

/// Pooled-RGB peak signal-to-noise ratio in dB. Identical images report
/// positive infinity.
pub fn psnr(reference: &ImageU8, test: &ImageU8) -> Result<f64> {
    if reference.w != test.w || reference.h != test.h {
        return Err(Error::Shape(format!(
            "psnr dims differ: {}x{} vs {}x{}",
            reference.w, reference.h, test.w, test.h
        )));
    }
    let mut sum = 0.0f64;
    for (&a, &b) in reference.rgb.iter().zip(&test.rgb) {
        let d = a as f64 - b as f64;
        sum += d * d;
    }
    let mse = sum / reference.rgb.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RdPoint {
    pub codec: String,
    pub lambda: f64,
    pub bpp: f64,
    pub psnr_db: f64,
}

/// Bjøntegaard delta rate of `test` against `anchor`, in percent; negative
/// means the test codec spends less rate at equal quality. Classic variant:
/// cubic fit of log10(bpp) as a function of PSNR, integrated over the
/// overlapping PSNR span. Point order does not matter.
pub fn bd_rate(anchor: &[RdPoint], test: &[RdPoint]) -> Result<f64> {
    let a = curve_checked(anchor)?;
    let t = curve_checked(test)?;
    let lo = a.0.first().unwrap().max(*t.0.first().unwrap());
    let hi = a.0.last().unwrap().min(*t.0.last().unwrap());
    if lo >= hi {
        return Err(Error::Numeric(format!(
            "PSNR ranges do not overlap: [{:.3}, {:.3}] vs [{:.3}, {:.3}]",
            a.0.first().unwrap(),
            a.0.last().unwrap(),
            t.0.first().unwrap(),
            t.0.last().unwrap()
        )));
    }
    let ia = integral_of_fit(&a.0, &a.1, lo, hi)?;
    let it = integral_of_fit(&t.0, &t.1, lo, hi)?;
    let mean_diff = (it - ia) / (hi - lo);
    Ok((10.0f64.powf(mean_diff) - 1.0) * 100.0)
}

/// Sorted (psnr, log10 bpp) with the preconditions enforced.
fn curve_checked(points: &[RdPoint]) -> Result<(Vec<f64>, Vec<f64>)> {
    if points.len() < 4 {
        return Err(Error::Numeric(format!(
            "BD rate needs at least 4 points per curve, got {}",
            points.len()
        )));
    }
    let mut sorted: Vec<(f64, f64)> = Vec::with_capacity(points.len());
    for p in points {
        if !p.bpp.is_finite() || p.bpp <= 0.0 || !p.psnr_db.is_finite() {
            return Err(Error::Numeric(format!(
                "unusable RD point bpp={} psnr={}",
                p.bpp, p.psnr_db
            )));
        }
        sorted.push((p.psnr_db, p.bpp.log10()));
    }
    sorted.sort_by(|x, y| x.0.total_cmp(&y.0));
    for w in sorted.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(Error::Numeric(format!("duplicate PSNR {:.6} in RD curve", w[0].0)));
        }
        if w[0].1 >= w[1].1 {
            return Err(Error::Numeric(
                "RD curve is not strictly increasing in rate with quality".into(),
            ));
        }
    }
    Ok(sorted.into_iter().unzip())
}

/// Integrates the least-squares cubic through (d, r) over [lo, hi]. The fit
/// is centered on the mean PSNR to keep the normal equations conditioned.
fn integral_of_fit(d: &[f64], r: &[f64], lo: f64, hi: f64) -> Result<f64> {
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let c = fit_cubic(&d.iter().map(|v| v - mean).collect::<Vec<_>>(), r)?;
    let anti = |u: f64| {
        c[0] * u + c[1] * u * u / 2.0 + c[2] * u * u * u / 3.0 + c[3] * u * u * u * u / 4.0
    };
    Ok(anti(hi - mean) - anti(lo - mean))
}

fn fit_cubic(x: &[f64], y: &[f64]) -> Result<[f64; 4]> {
    // Normal equations for the monomial basis, solved directly.
    let mut m = [[0.0f64; 5]; 4];
    for (&xi, &yi) in x.iter().zip(y) {
        let p = [1.0, xi, xi * xi, xi * xi * xi];
        for i in 0..4 {
            for j in 0..4 {
                m[i][j] += p[i] * p[j];
            }
            m[i][4] += p[i] * yi;
        }
    }
    solve4(&mut m)
}

fn solve4(m: &mut [[f64; 5]; 4]) -> Result<[f64; 4]> {
    for col in 0..4 {
        let pivot = (col..4)
            .max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))
            .unwrap();
        if m[pivot][col].abs() < 1e-12 {
            return Err(Error::Numeric("degenerate RD curve: singular fit".into()));
        }
        m.swap(col, pivot);
        for row in 0..4 {
            if row == col {
                continue;
            }
            let f = m[row][col] / m[col][col];
            for k in col..5 {
                m[row][k] -= f * m[col][k];
            }
        }
    }
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = m[i][4] / m[i][i];
    }
    Ok(out)
}

/// Writes points as `codec,lambda,bpp,psnr_db`, preserving input order.
pub fn export_rd(path: &Path, points: &[RdPoint]) -> Result<()> {
    let mut out = String::from("codec,lambda,bpp,psnr_db\n");
    for p in points {
        out.push_str(&format!("{},{},{},{}\n", p.codec, p.lambda, p.bpp, p.psnr_db));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn parse_rd_csv(path: &Path) -> Result<Vec<RdPoint>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("codec,lambda,bpp,psnr_db") => {}
        other => {
            return Err(Error::Format(format!(
                "{}: expected RD header, found {:?}",
                path.display(),
                other.unwrap_or("")
            )))
        }
    }
    let mut points = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| {
                Error::Format(format!("{} line {}: bad number {s:?}", path.display(), n + 2))
            })
        };
        if fields.len() != 4 {
            return Err(Error::Format(format!(
                "{} line {}: expected 4 fields, found {}",
                path.display(),
                n + 2,
                fields.len()
            )));
        }
        points.push(RdPoint {
            codec: fields[0].to_string(),
            lambda: parse(fields[1])?,
            bpp: parse(fields[2])?,
            psnr_db: parse(fields[3])?,
        });
    }
    Ok(points)
}

#[derive(Debug, Clone)]
pub struct RateShares {
    /// Fraction of total bits per component (Y, Cb, Cr).
    pub component: [f64; 3],
    /// Fraction of total bits per subband within the stream, coding order.
    pub subband: [Vec<f64>; 3],
}

/// Bit shares from encoder diagnostics. A zero-rate stream reports zeros.
pub fn component_rate_report(stats: &EncodeStats) -> RateShares {
    let total: f64 = stats.subband_bits.iter().flatten().sum();
    let scale = if total > 0.0 { 1.0 / total } else { 0.0 };
    let mut component = [0.0; 3];
    let mut subband: [Vec<f64>; 3] = Default::default();
    for c in 0..3 {
        subband[c] = stats.subband_bits[c].iter().map(|b| b * scale).collect();
        component[c] = subband[c].iter().sum();
    }
    RateShares { component, subband }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flat(w: usize, h: usize, v: u8) -> ImageU8 {
        ImageU8::new(w, h, vec![v; 3 * w * h]).unwrap()
    }

    #[test]
    fn psnr_matches_hand_values() {
        let a = flat(8, 8, 100);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = flat(8, 8, 101);
        let one = psnr(&a, &b).unwrap();
        assert!((one - 20.0 * 255.0f64.log10()).abs() < 1e-9, "{one}");
        let c = flat(8, 8, 102);
        let two = psnr(&a, &c).unwrap();
        assert!((one - two - 20.0 * 2.0f64.log10()).abs() < 1e-9);
        assert!(psnr(&a, &flat(4, 4, 0)).is_err());
    }

    #[test]
    fn psnr_decreases_with_error_magnitude() {
        let a = flat(8, 8, 10);
        let mut prev = f64::INFINITY;
        for amp in [1u8, 3, 9, 27, 81] {
            let v = psnr(&a, &flat(8, 8, 10 + amp)).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    fn curve(scale: f64, psnr_shift: f64) -> Vec<RdPoint> {
        [(0.1, 28.0), (0.25, 31.0), (0.5, 33.5), (1.0, 35.5), (2.0, 37.0)]
            .iter()
            .map(|&(bpp, q)| RdPoint {
                codec: "x".into(),
                lambda: 0.0,
                bpp: bpp * scale,
                psnr_db: q + psnr_shift,
            })
            .collect()
    }

    #[test]
    fn identical_curves_give_zero() {
        let c = curve(1.0, 0.0);
        assert!(bd_rate(&c, &c).unwrap().abs() <= 1e-9);
    }

    #[test]
    fn uniform_rate_scaling_gives_the_scale() {
        let v = bd_rate(&curve(1.0, 0.0), &curve(1.1, 0.0)).unwrap();
        assert!((v - 10.0).abs() <= 0.1, "{v}");
        let w = bd_rate(&curve(1.0, 0.0), &curve(0.5, 0.0)).unwrap();
        assert!((w + 50.0).abs() <= 0.1, "{w}");
    }

    #[test]
    fn quality_gain_saves_rate() {
        let v = bd_rate(&curve(1.0, 0.0), &curve(1.0, 1.0)).unwrap();
        assert!(v < 0.0, "{v}");
    }

    #[test]
    fn point_order_does_not_matter() {
        let a = curve(1.0, 0.0);
        let mut shuffled = curve(1.07, 0.0);
        shuffled.swap(0, 4);
        shuffled.swap(1, 3);
        let fwd = bd_rate(&a, &curve(1.07, 0.0)).unwrap();
        assert_eq!(fwd, bd_rate(&a, &shuffled).unwrap());
    }

    #[test]
    fn antisymmetry_holds_on_random_monotone_curves() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let mut a = Vec::new();
            let mut b = Vec::new();
            let mut bpp_a = 0.1 + rng.gen_range(0.0..0.05);
            let mut bpp_b = bpp_a * rng.gen_range(0.98..1.02);
            let mut q = 28.0ной + rng.gen_range(0.0..0.5);
            for _ in 0..6 {
                a.push(RdPoint { codec: "a".into(), lambda: 0.0, bpp: bpp_a, psnr_db: q });
                b.push(RdPoint { codec: "b".into(), lambda: 0.0, bpp: bpp_b, psnr_db: q });
                bpp_a *= rng.gen_range(1.3..1.6);
                bpp_b = bpp_a * rng.gen_range(0.98..1.02);
                q += rng.gen_range(1.0..2.5);
            }
            let fwd = bd_rate(&a, &b).unwrap();
            let rev = bd_rate(&b, &a).unwrap();
            assert!((fwd + rev).abs() <= 0.05, "fwd {fwd} rev {rev}");
        }
    }

    #[test]
    fn exact_cubic_curves_integrate_in_closed_form() {
        // log10 bpp is an exact cubic in PSNR, so the fit is exact and the
        // BD rate equals the constant log-offset in closed form.
        let base = |q: f64| -1.5 + 0.06 * q + 2e-4 * q * q + 1e-6 * q * q * q;
        let mk = |off: f64| -> Vec<RdPoint> {
            (0..5)
                .map(|k| {
                    let q = 30.0 + 2.0 * k as f64;
                    RdPoint {
                        codec: "c".into(),
                        lambda: 0.0,
                        bpp: 10f64.powf(base(q) + off),
                        psnr_db: q,
                    }
                })
                .collect()
        };
        let v = bd_rate(&mk(0.0), &mk(-0.02)).unwrap();
        let want = (10f64.powf(-0.02) - 1.0) * 100.0;
        assert!((v - want).abs() < 1e-6, "{v} vs {want}");
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let c = curve(1.0, 0.0);
        assert!(bd_rate(&c[..3], &c).is_err());
        assert!(bd_rate(&c, &curve(1.0, 40.0)).is_err());
        let mut dup = curve(1.0, 0.0);
        dup[1].psnr_db = dup[0].psnr_db;
        assert!(bd_rate(&dup, &c).is_err());
        let mut falling = curve(1.0, 0.0);
        falling[2].bpp = 10.0;
        assert!(bd_rate(&falling, &c).is_err());
    }

    #[test]
    fn rd_csv_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rd.csv");
        let points: Vec<RdPoint> = (0..6)
            .map(|k| RdPoint {
                codec: "wavecc".into(),
                lambda: 0.003 * (k + 1) as f64,
                bpp: 0.1 * (k + 1) as f64,
                psnr_db: 30.0 + k as f64,
            })
            .collect();
        export_rd(&path, &points).unwrap();
        assert_eq!(parse_rd_csv(&path).unwrap(), points);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 7);

        export_rd(&path, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "codec,lambda,bpp,psnr_db\n");
        assert_eq!(parse_rd_csv(&path).unwrap(), vec![]);
        std::fs::write(&path, "nope\n1,2,3,4\n").unwrap();
        assert!(parse_rd_csv(&path).is_err());
    }

    #[test]
    fn rate_shares_sum_to_one() {
        let stats = EncodeStats {
            subband_bits: [vec![600.0, 200.0], vec![100.0, 50.0], vec![30.0, 20.0]],
            model_bits: [800.0, 150.0, 50.0],
            payload_bytes: 125,
            stream_bytes: 160,
        };
        let shares = component_rate_report(&stats);
        let total: f64 = shares.component.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((shares.component[0] - 0.8).abs() < 1e-12);
        let sub_total: f64 = shares.subband.iter().flatten().sum();
        assert!((sub_total - 1.0).abs() < 1e-12);
    }
}
