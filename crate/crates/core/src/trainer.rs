//! Rate-distortion objective and the two-stage training procedure.
//!
//! Stage 1 trains the transform, quantizer gain, reconstruction net, and
//! luma context on luma patches. Stage 2 freezes all of that, seeds the
//! chroma context from the trained luma weights, and trains only the
//! chroma context on full-color patches. One optimization step builds a
//! single graph over the whole batch, so trajectories are deterministic
//! for a given seed.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::optim::{cosine_lr, AdamW, AdamWCfg};
use crate::autodiff::weights::{encode_weights, fnv1a64, load_weights};
use crate::autodiff::{BufId, Graph, GraphFlags, ParamRegistry, Real, TrainFilter};
use crate::codec::{self, LumaFeed};
use crate::context::StateNodes;
use crate::error::{Error, Result};
use crate::model::{self, ModelCfg};
use crate::pixel::{self, Planes};

#[derive(Debug, Clone)]
pub struct TrainCfg {
    /// Distortion weight in the stage-1 objective.
    pub lambda: f32,
    pub steps: usize,
    pub batch_size: usize,
    /// Square patch side. Must be a multiple of the transform's coarsest
    /// stride.
    pub crop: usize,
    pub lr_max: f32,
    pub lr_min: f32,
    pub weight_decay: f32,
    /// Seeds batch sampling only; weights carry their own seed.
    pub seed: u64,
}

impl Default for TrainCfg {
    fn default() -> Self {
        TrainCfg {
            lambda: 0.01,
            steps: 300,
            batch_size: 16,
            crop: 64,
            lr_max: 1e-4,
            lr_min: 1e-6,
            weight_decay: 1e-5,
            seed: 7,
        }
    }
}

/// Training images, converted to YCbCr planes once at load.
pub struct Dataset {
    items: Vec<Planes>,
}

impl Dataset {
    pub fn from_images(images: &[pixel::ImageU8]) -> Result<Dataset> {
        if images.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        Ok(Dataset { items: images.iter().map(pixel::rgb_to_planes).collect() })
    }

    /// Loads every readable image in the directory, sorted by file name.
    /// Unreadable entries are skipped with a warning on stderr.
    pub fn from_dir(dir: &Path) -> Result<Dataset> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        let mut items = Vec::new();
        for p in &paths {
            match pixel::read_image(p) {
                Ok(img) => items.push(pixel::rgb_to_planes(&img)),
                Err(e) => eprintln!("warning: skipping {}: {e}", p.display()),
            }
        }
        if items.is_empty() {
            return Err(Error::Config(format!("no readable images in {}", dir.display())));
        }
        Ok(Dataset { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// One square training patch in YCbCr.
pub struct Patch {
    pub side: usize,
    pub y: Vec<f32>,
    pub cb: Vec<f32>,
    pub cr: Vec<f32>,
}

/// Seeded, reproducible patch sampler. Images smaller than the crop are
/// reflected up; matching sizes come back verbatim.
pub struct BatchStream<'a> {
    data: &'a Dataset,
    crop: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl<'a> BatchStream<'a> {
    pub fn new(data: &'a Dataset, crop: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if crop == 0 || batch_size == 0 {
            return Err(Error::Config("crop and batch size must be positive".into()));
        }
        Ok(BatchStream { data, crop, batch_size, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn next_batch(&mut self) -> Vec<Patch> {
        (0..self.batch_size).map(|_| self.next_patch()).collect()
    }

    fn next_patch(&mut self) -> Patch {
        let idx = self.rng.gen_range(0..self.data.items.len());
        let p = &self.data.items[idx];
        let c = self.crop;
        let grown;
        let (w, h, y, cb, cr) = if p.w < c || p.h < c {
            let (y, pw, ph) = pixel::pad_reflect(&p.y, p.w, p.h, c);
            let (cb, _, _) = pixel::pad_reflect(&p.cb, p.w, p.h, c);
            let (cr, _, _) = pixel::pad_reflect(&p.cr, p.w, p.h, c);
            grown = (y, cb, cr);
            (pw, ph, &grown.0, &grown.1, &grown.2)
        } else {
            (p.w, p.h, &p.y, &p.cb, &p.cr)
        };
        let x0 = self.rng.gen_range(0..=w - c);
        let y0 = self.rng.gen_range(0..=h - c);
        let cut = |src: &[f32]| {
            let mut out = Vec::with_capacity(c * c);
            for row in y0..y0 + c {
                out.extend_from_slice(&src[row * w + x0..row * w + x0 + c]);
            }
            out
        };
        Patch { side: c, y: cut(y), cb: cut(cb), cr: cut(cr) }
    }
}

/// Graph nodes of the rate-distortion objective for one luma plane.
pub struct RdNodes {
    pub loss: BufId,
    /// Bits per pixel.
    pub rate_norm: BufId,
    /// Total bits before normalization.
    pub rate_bits: BufId,
    pub mse: BufId,
    pub subband_bits: Vec<BufId>,
}

/// loss = bits/pixel + lambda * MSE, with MSE on the unclamped
/// reconstruction.
pub fn rd_loss<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelCfg,
    plane: BufId,
    lambda: T,
) -> Result<RdNodes> {
    let (ph, pw) = {
        let s = g.shape(plane);
        (s[1], s[2])
    };
    let pass = codec::luma_pass(g, cfg, plane)?;
    let rec = codec::reconstruct_graph(g, cfg, &pass.recon)?;
    let diff = g.sub(rec, plane)?;
    let sq = g.mul(diff, diff)?;
    let mse = g.mean_all(sq)?;
    let rate_norm = g.scale(pass.rate, T::from_f64(1.0 / (ph * pw) as f64))?;
    let weighted = g.scale(mse, lambda)?;
    let loss = g.add(rate_norm, weighted)?;
    Ok(RdNodes { loss, rate_norm, rate_bits: pass.rate, mse, subband_bits: pass.subband_bits })
}

#[derive(Debug, Clone)]
pub struct LossReport {
    pub loss: f64,
    /// Mean total bits per batch element.
    pub rate_bits: f64,
    pub rate_bpp: f64,
    pub mse: f64,
    pub lambda: f64,
    /// Mean bits per subband in coding order; stage 2 sums both chroma
    /// components.
    pub subband_bits: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct StepEntry {
    pub step: usize,
    pub lr: f32,
    pub report: LossReport,
}

pub fn stage1_filter() -> TrainFilter {
    TrainFilter::Prefixes(vec![
        "lifting.".into(),
        "quant.".into(),
        "dequant.".into(),
        "ctx.y.".into(),
        "ctx.up.".into(),
    ])
}

pub fn stage2_filter() -> TrainFilter {
    TrainFilter::Prefixes(vec!["ctx.c.".into()])
}

fn train_flags() -> GraphFlags {
    GraphFlags { round_as_identity: false, coding_mode: false }
}

fn check_finite(step: usize, loss: f64, rate: f64, mse: f64) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    Err(Error::Numeric(format!(
        "loss diverged at step {step}: rate/pixel {rate}, mse {mse}"
    )))
}

/// Trains transform, quantizer gain, reconstruction net, and luma context
/// on luma patches.
pub fn train_stage1(
    reg: &mut ParamRegistry,
    model: &ModelCfg,
    data: &Dataset,
    tc: &TrainCfg,
) -> Result<Vec<StepEntry>> {
    let stride = 1usize << model.levels;
    if tc.crop % stride != 0 {
        return Err(Error::Config(format!(
            "crop {} is not a multiple of the transform stride {stride}",
            tc.crop
        )));
    }
    let mut stream = BatchStream::new(data, tc.crop, tc.batch_size, tc.seed)?;
    let mut opt = AdamW::new(AdamWCfg { weight_decay: tc.weight_decay, ..Default::default() });
    let mut log = Vec::with_capacity(tc.steps);
    let count = model.subband_count();
    let pixels = (tc.crop * tc.crop) as f64;
    for step in 0..tc.steps {
        let batch = stream.next_batch();
        let snap = reg.snapshot::<f32>();
        let mut g: Graph<f32> = Graph::new(snap, stage1_filter(), train_flags());
        let inv_b = 1.0 / tc.batch_size as f32;
        let mut batch_loss: Option<BufId> = None;
        let mut sums = (0.0f64, 0.0f64, 0.0f64, vec![0.0f64; count]);
        for patch in &batch {
            let plane = g.input(&[1, patch.side, patch.side], patch.y.clone())?;
            let rd = rd_loss(&mut g, model, plane, tc.lambda)?;
            sums.0 += g.scalar_value(rd.loss)? as f64;
            sums.1 += g.scalar_value(rd.rate_bits)? as f64;
            sums.2 += g.scalar_value(rd.mse)? as f64;
            for (acc, &b) in sums.3.iter_mut().zip(&rd.subband_bits) {
                *acc += g.scalar_value(b)? as f64;
            }
            batch_loss = Some(match batch_loss {
                Some(acc) => g.add(acc, rd.loss)?,
                None => rd.loss,
            });
        }
        let total = batch_loss.expect("batch is never empty");
        let objective = g.scale(total, inv_b)?;
        let grads = g.backward(objective)?;
        reg.zero_grads();
        reg.accumulate_grads(&grads)?;
        opt.cfg.lr = cosine_lr(step, tc.steps, tc.lr_max, tc.lr_min);
        opt.step(reg)?;

        let b = tc.batch_size as f64;
        let report = LossReport {
            loss: sums.0 / b,
            rate_bits: sums.1 / b,
            rate_bpp: sums.1 / b / pixels,
            mse: sums.2 / b,
            lambda: tc.lambda as f64,
            subband_bits: sums.3.iter().map(|s| s / b).collect(),
        };
        check_finite(step, report.loss, report.rate_bpp, report.mse)?;
        log.push(StepEntry { step, lr: opt.cfg.lr, report });
    }
    Ok(log)
}

/// Seeds the chroma context from luma, then trains only the chroma context
/// on full-color patches; the loss is the mean chroma bits per pixel,
/// averaged over both components. Everything else is frozen and verified
/// unchanged.
pub fn train_stage2(
    reg: &mut ParamRegistry,
    model: &ModelCfg,
    data: &Dataset,
    tc: &TrainCfg,
) -> Result<Vec<StepEntry>> {
    let stride = 1usize << model.levels;
    if tc.crop % stride != 0 {
        return Err(Error::Config(format!(
            "crop {} is not a multiple of the transform stride {stride}",
            tc.crop
        )));
    }
    model::init_chroma_from_luma(reg)?;
    let frozen: Vec<(String, u64)> = reg
        .iter()
        .filter(|(n, _)| !n.starts_with("ctx.c."))
        .map(|(n, t)| (n.to_string(), tensor_digest(t.data())))
        .collect();

    let mut stream = BatchStream::new(data, tc.crop, tc.batch_size, tc.seed)?;
    let mut opt = AdamW::new(AdamWCfg { weight_decay: tc.weight_decay, ..Default::default() });
    let mut log = Vec::with_capacity(tc.steps);
    let count = model.subband_count();
    let pixels = (tc.crop * tc.crop) as f64;
    for step in 0..tc.steps {
        let batch = stream.next_batch();
        let snap = reg.snapshot::<f32>();
        let mut g: Graph<f32> = Graph::new(snap.clone(), stage2_filter(), train_flags());
        let mut batch_loss: Option<BufId> = None;
        let mut sums = (0.0f64, 0.0f64, vec![0.0f64; count]);
        for patch in &batch {
            // The luma pass is frozen, so it runs forward-only in its own
            // graph and enters the training graph as constants.
            let mut yg: Graph<f32> = Graph::new(snap.clone(), TrainFilter::None, train_flags());
            let yb = yg.input(&[1, patch.side, patch.side], patch.y.clone())?;
            let ypass = codec::luma_pass(&mut yg, model, yb)?;
            let mut yrecon = Vec::with_capacity(count);
            for &r in &ypass.recon {
                yrecon.push(g.input(&yg.shape(r).to_vec(), yg.data(r).to_vec())?);
            }
            let start = ypass.snapshots.first().expect("at least one snapshot");
            let mut carry = |ids: [BufId; 3]| -> Result<[BufId; 3]> {
                let mut out = [ids[0]; 3];
                for (o, &id) in out.iter_mut().zip(&ids) {
                    *o = g.input(&yg.shape(id).to_vec(), yg.data(id).to_vec())?;
                }
                Ok(out)
            };
            let start = StateNodes { h: carry(start.h)?, c: carry(start.c)? };
            let pred = g.input(
                &yg.shape(ypass.pred_after_first).to_vec(),
                yg.data(ypass.pred_after_first).to_vec(),
            )?;
            let feed = LumaFeed { recon: &yrecon, start, pred_after_first: pred };

            let cbb = g.input(&[1, patch.side, patch.side], patch.cb.clone())?;
            let cb = codec::chroma_pass(&mut g, model, cbb, &feed, None)?;
            let crb = g.input(&[1, patch.side, patch.side], patch.cr.clone())?;
            let cr = codec::chroma_pass(&mut g, model, crb, &feed, Some(&cb.recon))?;
            let both = g.add(cb.rate, cr.rate)?;
            let loss = g.scale(both, (0.5 / pixels) as f32)?;
            sums.0 += g.scalar_value(loss)? as f64;
            sums.1 += g.scalar_value(both)? as f64;
            for (k, acc) in sums.2.iter_mut().enumerate() {
                *acc += g.scalar_value(cb.subband_bits[k])? as f64;
                *acc += g.scalar_value(cr.subband_bits[k])? as f64;
            }
            batch_loss = Some(match batch_loss {
                Some(acc) => g.add(acc, loss)?,
                None => loss,
            });
        }
        let total = batch_loss.expect("batch is never empty");
        let objective = g.scale(total, 1.0 / tc.batch_size as f32)?;
        let grads = g.backward(objective)?;
        reg.zero_grads();
        reg.accumulate_grads(&grads)?;
        opt.cfg.lr = cosine_lr(step, tc.steps, tc.lr_max, tc.lr_min);
        opt.step(reg)?;

        let b = tc.batch_size as f64;
        let report = LossReport {
            loss: sums.0 / b,
            rate_bits: sums.1 / b,
            rate_bpp: sums.1 / b / pixels,
            mse: 0.0,
            lambda: 0.0,
            subband_bits: sums.2.iter().map(|s| s / b).collect(),
        };
        check_finite(step, report.loss, report.rate_bpp, report.mse)?;
        log.push(StepEntry { step, lr: opt.cfg.lr, report });
    }

    for (name, digest) in &frozen {
        let now = tensor_digest(reg.get(name)?.data());
        if now != *digest {
            return Err(Error::Numeric(format!("frozen tensor {name} changed during stage 2")));
        }
    }
    Ok(log)
}

fn tensor_digest(data: &[f32]) -> u64 {
    let mut bytes = Vec::with_capacity(4 * data.len());
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fnv1a64(&bytes)
}

pub fn write_log_csv(path: &Path, log: &[StepEntry]) -> Result<()> {
    let mut out = String::from("step,lr,loss,rate_bpp,mse\n");
    for e in log {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.step, e.lr, e.report.loss, e.report.rate_bpp, e.report.mse
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub stage: u8,
    pub lambda: f32,
    pub steps: usize,
    pub seed: u64,
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta");
    std::path::PathBuf::from(s)
}

/// Writes weights plus a metadata sidecar, each atomically.
pub fn save_checkpoint(path: &Path, reg: &ParamRegistry, meta: &CheckpointMeta) -> Result<()> {
    let write_atomic = |target: &Path, bytes: &[u8]| -> Result<()> {
        let tmp = target.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, target).map_err(|e| Error::io(target, e))
    };
    write_atomic(path, &encode_weights(reg))?;
    let side = format!(
        "stage={}\nlambda={}\nsteps={}\nseed={}\n",
        meta.stage, meta.lambda, meta.steps, meta.seed
    );
    write_atomic(&meta_path(path), side.as_bytes())
}

/// Loads weights; the sidecar is optional and ignored when malformed.
pub fn load_checkpoint(path: &Path) -> Result<(ParamRegistry, Option<CheckpointMeta>)> {
    let reg = load_weights(path)?;
    let meta = std::fs::read_to_string(meta_path(path)).ok().and_then(|text| {
        let mut m = CheckpointMeta { stage: 0, lambda: 0.0, steps: 0, seed: 0 };
        for line in text.lines() {
            let (k, v) = line.split_once('=')?;
            match k {
                "stage" => m.stage = v.parse().ok()?,
                "lambda" => m.lambda = v.parse().ok()?,
                "steps" => m.steps = v.parse().ok()?,
                "seed" => m.seed = v.parse().ok()?,
                _ => return None,
            }
        }
        Some(m)
    });
    Ok((reg, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::weights::weights_digest;
    use crate::model::init_model;
    use crate::pixel::ImageU8;

    fn tiny_cfg() -> ModelCfg {
        ModelCfg {
            levels: 2,
            mixtures: 2,
            fuse_width: 8,
            rnn_hidden: [4, 4, 3],
            lifting_width: 4,
            dequant_width: 8,
            dequant_depth: 1,
            seed: 5,
            ..ModelCfg::default()
        }
    }

    fn gradient_image(w: usize, h: usize, phase: usize) -> ImageU8 {
        let mut rgb = Vec::with_capacity(3 * w * h);
        for y in 0..h {
            for x in 0..w {
                let v = ((x * 7 + y * 3 + phase * 11) % 256) as u8;
                rgb.push(v);
                rgb.push(v.wrapping_add(40));
                rgb.push(255 - v);
            }
        }
        ImageU8::new(w, h, rgb).unwrap()
    }

    fn tiny_dataset(n: usize, side: usize) -> Dataset {
        let imgs: Vec<ImageU8> = (0..n).map(|k| gradient_image(side, side, k)).collect();
        Dataset::from_images(&imgs).unwrap()
    }

    fn tiny_train_cfg(steps: usize) -> TrainCfg {
        TrainCfg { steps, batch_size: 3, crop: 16, seed: 11, ..TrainCfg::default() }
    }

    #[test]
    fn loss_decomposes_into_rate_and_distortion() {
        let cfg = tiny_cfg();
        let reg = init_model(&cfg).unwrap();
        let snap = reg.snapshot::<f32>();
        let mut g: Graph<f32> = Graph::new(snap, TrainFilter::None, train_flags());
        let data: Vec<f32> = (0..256).map(|i| (i % 37) as f32 * 3.0).collect();
        let plane = g.input(&[1, 16, 16], data).unwrap();
        let rd = rd_loss(&mut g, &cfg, plane, 0.01).unwrap();
        let loss = g.scalar_value(rd.loss).unwrap() as f64;
        let rate = g.scalar_value(rd.rate_norm).unwrap() as f64;
        let mse = g.scalar_value(rd.mse).unwrap() as f64;
        assert!((loss - (rate + 0.01 * mse)).abs() <= 1e-5 * loss.abs());
        let per_band: f64 =
            rd.subband_bits.iter().map(|&b| g.scalar_value(b).unwrap() as f64).sum();
        let bits = g.scalar_value(rd.rate_bits).unwrap() as f64;
        assert!((per_band - bits).abs() <= 1e-5 * bits.abs());
    }

    #[test]
    fn zero_lambda_loss_is_pure_rate() {
        let cfg = tiny_cfg();
        let reg = init_model(&cfg).unwrap();
        let snap = reg.snapshot::<f32>();
        let mut g: Graph<f32> = Graph::new(snap, TrainFilter::None, train_flags());
        let data: Vec<f32> = (0..256).map(|i| (i as f32 * 0.7).sin() * 100.0).collect();
        let plane = g.input(&[1, 16, 16], data).unwrap();
        let rd = rd_loss(&mut g, &cfg, plane, 0.0).unwrap();
        assert_eq!(g.scalar_value(rd.loss).unwrap(), g.scalar_value(rd.rate_norm).unwrap());
    }

    #[test]
    fn quantizer_gain_gradient_is_alive() {
        let cfg = tiny_cfg();
        let reg = init_model(&cfg).unwrap();
        let snap = reg.snapshot::<f32>();
        let mut g: Graph<f32> = Graph::new(snap, stage1_filter(), train_flags());
        let data: Vec<f32> = (0..256).map(|i| ((i * 31) % 256) as f32).collect();
        let plane = g.input(&[1, 16, 16], data).unwrap();
        let rd = rd_loss(&mut g, &cfg, plane, 0.01).unwrap();
        let grads = g.backward(rd.loss).unwrap();
        let delta = grads.iter().find(|(n, _)| n == "quant.delta").expect("gain is trainable");
        assert!(delta.1[0] != 0.0);
    }

    #[test]
    fn batch_stream_is_reproducible_and_exact_for_matching_crop() {
        let data = tiny_dataset(3, 16);
        let mut a = BatchStream::new(&data, 16, 4, 9).unwrap();
        let mut b = BatchStream::new(&data, 16, 4, 9).unwrap();
        for _ in 0..5 {
            let (ba, bb) = (a.next_batch(), b.next_batch());
            for (pa, pb) in ba.iter().zip(&bb) {
                assert_eq!(pa.y, pb.y);
                assert_eq!(pa.cb, pb.cb);
                assert_eq!(pa.cr, pb.cr);
            }
        }
        // A crop matching the image size returns the image itself.
        let one = tiny_dataset(1, 16);
        let mut s = BatchStream::new(&one, 16, 1, 1).unwrap();
        let p = s.next_batch().remove(0);
        let planes = pixel::rgb_to_planes(&gradient_image(16, 16, 0));
        assert_eq!(p.y, planes.y);
    }

    #[test]
    fn undersized_images_are_reflected_up() {
        let imgs = vec![gradient_image(10, 6, 0)];
        let data = Dataset::from_images(&imgs).unwrap();
        let mut s = BatchStream::new(&data, 16, 2, 3).unwrap();
        for p in s.next_batch() {
            assert_eq!(p.y.len(), 256);
            assert!(p.y.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn stage1_runs_deterministically() {
        let cfg = tiny_cfg();
        let data = tiny_dataset(4, 16);
        let tc = tiny_train_cfg(6);
        let mut reg_a = init_model(&cfg).unwrap();
        let log_a = train_stage1(&mut reg_a, &cfg, &data, &tc).unwrap();
        let mut reg_b = init_model(&cfg).unwrap();
        let log_b = train_stage1(&mut reg_b, &cfg, &data, &tc).unwrap();
        assert_eq!(log_a.len(), 6);
        for (a, b) in log_a.iter().zip(&log_b) {
            assert_eq!(a.report.loss, b.report.loss);
            assert_eq!(a.report.rate_bits, b.report.rate_bits);
            assert_eq!(a.report.mse, b.report.mse);
        }
        assert_eq!(weights_digest(&reg_a), weights_digest(&reg_b));
        // Chroma context must not move in stage 1.
        let fresh = init_model(&cfg).unwrap();
        for (name, t) in fresh.iter() {
            if name.starts_with("ctx.c.") {
                assert_eq!(reg_a.get(name).unwrap().data(), t.data(), "{name} moved");
            }
        }
    }

    #[test]
    fn stage2_trains_chroma_and_freezes_the_rest() {
        let cfg = tiny_cfg();
        let data = tiny_dataset(4, 16);
        let mut reg = init_model(&cfg).unwrap();
        let tc = tiny_train_cfg(4);
        train_stage1(&mut reg, &cfg, &data, &tc).unwrap();
        let before: Vec<(String, Vec<f32>)> = reg
            .iter()
            .filter(|(n, _)| !n.starts_with("ctx.c."))
            .map(|(n, t)| (n.to_string(), t.data().to_vec()))
            .collect();
        let log = train_stage2(&mut reg, &cfg, &data, &tc).unwrap();
        assert_eq!(log.len(), 4);
        assert!(log.iter().all(|e| e.report.loss.is_finite()));
        for (name, data) in &before {
            assert_eq!(reg.get(name).unwrap().data(), &data[..], "{name} moved");
        }
        // The seeded chroma weights must have moved somewhere.
        let seeded = {
            let mut r = init_model(&cfg).unwrap();
            train_stage1(&mut r, &cfg, &data, &tc).unwrap();
            model::init_chroma_from_luma(&mut r).unwrap();
            r
        };
        let moved = reg.iter().any(|(n, t)| {
            n.starts_with("ctx.c.") && seeded.get(n).map(|s| s.data() != t.data()).unwrap_or(true)
        });
        assert!(moved, "no chroma weight changed");
    }

    #[test]
    fn checkpoints_roundtrip_with_metadata() {
        let cfg = tiny_cfg();
        let reg = init_model(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.wts");
        let meta = CheckpointMeta { stage: 1, lambda: 0.01, steps: 12, seed: 9 };
        save_checkpoint(&path, &reg, &meta).unwrap();
        let (back, got) = load_checkpoint(&path).unwrap();
        assert_eq!(weights_digest(&back), weights_digest(&reg));
        assert_eq!(got, Some(meta));
    }

    #[test]
    fn csv_log_has_header_and_rows() {
        let entries = vec![StepEntry {
            step: 0,
            lr: 1e-4,
            report: LossReport {
                loss: 2.5,
                rate_bits: 512.0,
                rate_bpp: 2.0,
                mse: 50.0,
                lambda: 0.01,
                subband_bits: vec![],
            },
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        write_log_csv(&path, &entries).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("step,lr,loss,rate_bpp,mse"));
        assert_eq!(lines.next(), Some("0,0.0001,2.5,2,50"));
    }
}
