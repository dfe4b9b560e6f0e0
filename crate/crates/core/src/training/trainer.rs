use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::synth::{synth_batch, Batch, SynthSpec};
use crate::alignment::{BlockMatchParams, RfaMode};
use crate::diffops::{bicubic_resize, Scale};
use crate::error::{param_err, Error, Result};
use crate::imaging::{format_psnr, psnr, save_image, ssim};
use crate::losses::{combined_loss_vjp, LossWeights};
use crate::model::{estimate_flows, save_checkpoint, HimeConfig, HimeModel};
use crate::tensor::Tensor;
use crate::util::write_atomic;

/// Loss beyond which a run counts as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e3;

/// Held-out samples are drawn from this index onwards, far past any
/// training index.
pub const HOLDOUT_OFFSET: u64 = 1 << 40;

pub const LOG_HEADER: &str = "iter,l_rec,l_cor,l_per,total,psnr_holdout";

/// Training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    /// Charbonnier only.
    #[serde(rename = "rec")]
    Rec,
    /// Charbonnier plus 0.1 × correlation loss.
    #[serde(rename = "rec+cor")]
    RecCor,
    /// Perceptual variant without the adversarial term: Charbonnier,
    /// 0.01 × feature L1 under the frozen initial LR extractor, and
    /// 0.1 × correlation loss.
    #[serde(rename = "p")]
    Perceptual,
}

impl LossMode {
    pub fn weights(self) -> LossWeights {
        let base = LossWeights::reconstruction_only();
        match self {
            LossMode::Rec => base,
            LossMode::RecCor => LossWeights {
                lambda_cor: 0.1,
                ..base
            },
            LossMode::Perceptual => LossWeights {
                lambda_per: 0.01,
                lambda_cor: 0.1,
                ..base
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossMode::Rec => "rec",
            LossMode::RecCor => "rec+cor",
            LossMode::Perceptual => "p",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rec" => Ok(LossMode::Rec),
            "rec+cor" => Ok(LossMode::RecCor),
            "p" => Ok(LossMode::Perceptual),
            other => Err(Error::Configuration(format!(
                "unknown loss `{other}` (expected rec, rec+cor or p)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iters: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub loss: LossMode,
    /// Correlation window and dilation.
    pub corr_k: usize,
    pub corr_dilation: usize,
    /// Held-out evaluation cadence, in iterations. The last iteration is
    /// always evaluated.
    pub eval_every: usize,
    pub holdout_size: usize,
    /// Cadence of checkpoints and sample triplets when `out_dir` is set.
    pub checkpoint_every: usize,
    pub out_dir: Option<PathBuf>,
    /// Flow estimation for the flow-guided alignment mode.
    pub block_match: BlockMatchParams,
    /// Replay the first batch every iteration instead of streaming.
    pub fixed_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iters: 1000,
            batch_size: 4,
            adam: AdamConfig::default(),
            loss: LossMode::Rec,
            corr_k: 3,
            corr_dilation: 1,
            eval_every: 100,
            holdout_size: 16,
            checkpoint_every: 100,
            out_dir: None,
            block_match: BlockMatchParams::default(),
            fixed_batch: false,
        }
    }
}

/// One row of the training log. Loss terms that are not part of the
/// objective are `None`; `psnr_holdout` is only set on evaluation
/// iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub l_rec: f64,
    pub l_cor: Option<f64>,
    pub l_per: Option<f64>,
    pub total: f64,
    pub psnr_holdout: Option<f64>,
}

/// Held-out quality of the model and of plain bicubic upsampling, averaged
/// over images. SR output is clamped to `[0, 1]` first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub bicubic_psnr: f64,
    pub bicubic_ssim: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: HimeModel<f32>,
    pub log: Vec<LogRow>,
    pub eval: EvalMetrics,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.8}")).unwrap_or_default();
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.8},{},{},{:.8},{}",
            r.iter,
            r.l_rec,
            opt(r.l_cor),
            opt(r.l_per),
            r.total,
            r.psnr_holdout.map(format_psnr).unwrap_or_default()
        );
    }
    out
}

/// Mean of the last `width` totals over the mean of the first `width`.
pub fn window_ratio(rows: &[LogRow], width: usize) -> Option<f64> {
    if width == 0 || rows.len() < width {
        return None;
    }
    let mean = |r: &[LogRow]| r.iter().map(|x| x.total).sum::<f64>() / r.len() as f64;
    Some(mean(&rows[rows.len() - width..]) / mean(&rows[..width]))
}

fn flows_for(
    model: &HimeModel<f32>,
    lr: &Tensor<f32>,
    refs: &[Tensor<f32>],
    bm: BlockMatchParams,
) -> Result<Option<Vec<Tensor<f32>>>> {
    if model.config().rfa_mode == RfaMode::Large && !refs.is_empty() {
        Ok(Some(estimate_flows(lr, refs, model.config().scale, bm)?))
    } else {
        Ok(None)
    }
}

/// Super-resolves a batch, estimating flows when the alignment mode needs
/// them.
pub fn predict(
    model: &HimeModel<f32>,
    lr: &Tensor<f32>,
    refs: &[Tensor<f32>],
    bm: BlockMatchParams,
) -> Result<Tensor<f32>> {
    let flows = flows_for(model, lr, refs, bm)?;
    model.forward(lr, refs, flows.as_deref())
}

fn per_image(a: &Tensor<f32>, b: &Tensor<f32>, f: impl Fn(&Tensor<f32>, &Tensor<f32>) -> Result<f64>) -> Result<f64> {
    let n = a.shape()[0];
    let mut sum = 0.0;
    for i in 0..n {
        sum += f(&a.batch_item(i)?, &b.batch_item(i)?)?;
    }
    Ok(sum / n as f64)
}

/// Scores `model` on a held-out batch.
pub fn evaluate(model: &HimeModel<f32>, batch: &Batch<f32>, bm: BlockMatchParams) -> Result<EvalMetrics> {
    let sr = predict(model, &batch.lr, &batch.refs, bm)?.map(|v| v.clamp(0.0, 1.0));
    let bic = bicubic_resize(&batch.lr, Scale::up(model.config().scale as u32)?)?.map(|v| v.clamp(0.0, 1.0));
    let p = |a: &Tensor<f32>, b: &Tensor<f32>| psnr(a, b, 1.0);
    Ok(EvalMetrics {
        psnr: per_image(&sr, &batch.hr, p)?,
        ssim: per_image(&sr, &batch.hr, ssim)?,
        bicubic_psnr: per_image(&bic, &batch.hr, p)?,
        bicubic_ssim: per_image(&bic, &batch.hr, ssim)?,
    })
}

/// The held-out batch used by [`train_toy`].
pub fn holdout_batch(spec: &SynthSpec, size: usize) -> Result<Batch<f32>> {
    synth_batch(spec, HOLDOUT_OFFSET, size)
}

fn write_samples(
    dir: &Path,
    iter: usize,
    model: &HimeModel<f32>,
    hold: &Batch<f32>,
    bm: BlockMatchParams,
) -> Result<()> {
    let lr = hold.lr.batch_item(0)?;
    let refs = hold.refs.iter().map(|r| r.batch_item(0)).collect::<Result<Vec<_>>>()?;
    let sr = predict(model, &lr, &refs, bm)?;
    let bic = bicubic_resize(&lr, Scale::up(model.config().scale as u32)?)?;
    let dir = dir.join("samples");
    save_image(&sr, dir.join(format!("iter{iter:06}_sr.png")))?;
    save_image(&bic, dir.join(format!("iter{iter:06}_bicubic.png")))?;
    save_image(&hold.hr.batch_item(0)?, dir.join(format!("iter{iter:06}_gt.png")))
}

pub fn train_toy(model_cfg: &HimeConfig, data: &SynthSpec, tc: &TrainConfig) -> Result<TrainOutcome> {
    train_toy_with(model_cfg, data, tc, |_| {})
}

/// Trains a fresh model on the synthetic stream. Iteration `t` (1-based)
/// uses samples `(t-1)·B .. t·B`, or `0 .. B` with `fixed_batch`;
/// `progress` sees every log row.
///
/// With `out_dir` set, `checkpoint.hmc`, `log.csv` and sample triplets are
/// written every `checkpoint_every` iterations and at the end. A loss above
/// [`DIVERGENCE_THRESHOLD`] or a non-finite loss aborts with
/// [`Error::Diverged`] naming the last checkpoint written.
pub fn train_toy_with(
    model_cfg: &HimeConfig,
    data: &SynthSpec,
    tc: &TrainConfig,
    mut progress: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    if tc.iters == 0 || tc.batch_size == 0 || tc.holdout_size == 0 {
        return Err(param_err!("iters, batch size and holdout size must all be at least 1"));
    }
    if tc.eval_every == 0 || tc.checkpoint_every == 0 {
        return Err(param_err!("evaluation and checkpoint intervals must be at least 1"));
    }
    if model_cfg.scale != data.scale || model_cfg.n_refs != data.n_refs {
        return Err(Error::Configuration(format!(
            "model expects scale {} with {} references, data provides scale {} with {}",
            model_cfg.scale, model_cfg.n_refs, data.scale, data.n_refs
        )));
    }
    data.validate()?;
    let weights = tc.loss.weights();
    let mut model = HimeModel::<f32>::new(model_cfg.clone())?;
    let frozen = (tc.loss == LossMode::Perceptual).then(|| model.clone());
    let mut adam = AdamState::new(model.params(), tc.adam);
    let hold = holdout_batch(data, tc.holdout_size)?;
    let bm = tc.block_match;

    let mut log = Vec::with_capacity(tc.iters);
    let mut last_ckpt: Option<PathBuf> = None;
    let mut eval = None;
    for iter in 1..=tc.iters {
        let start = if tc.fixed_batch {
            0
        } else {
            (iter as u64 - 1) * tc.batch_size as u64
        };
        let batch = synth_batch::<f32>(data, start, tc.batch_size)?;
        let flows = flows_for(&model, &batch.lr, &batch.refs, bm)?;
        let (sr, back) = model.forward_vjp(&batch.lr, &batch.refs, flows.as_deref())?;
        let feats = match &frozen {
            Some(f) => Some((f.extract_lr_vjp(&sr)?, f.extract_lr(&batch.hr)?)),
            None => None,
        };
        let feat_pair = feats.as_ref().map(|((fs, _), fh)| (fs, fh));
        let (loss, lback) = combined_loss_vjp(&sr, &batch.hr, feat_pair, None, &weights, tc.corr_k, tc.corr_dilation)?;

        let mut row = LogRow {
            iter,
            l_rec: loss.rec,
            l_cor: (weights.lambda_cor > 0.0).then_some(loss.cor),
            l_per: loss.per,
            total: loss.total,
            psnr_holdout: None,
        };
        if !loss.total.is_finite() || loss.total > DIVERGENCE_THRESHOLD {
            log.push(row);
            if let Some(dir) = &tc.out_dir {
                write_atomic(&dir.join("log.csv"), log_csv(&log).as_bytes())?;
            }
            return Err(Error::Diverged {
                iter,
                loss: loss.total,
                checkpoint: last_ckpt,
            });
        }

        let g = lback(1.0)?;
        let mut dsr = g.sr;
        if let (Some(((_, fback), _)), Some(dfea)) = (&feats, &g.fea_sr) {
            dsr.add_assign(&fback(dfea)?.input)?;
        }
        let grads = back(&dsr)?;
        model.params_mut().accumulate(&grads.params)?;
        adam.step(model.params_mut())?;

        if iter % tc.eval_every == 0 || iter == tc.iters {
            let m = evaluate(&model, &hold, bm)?;
            row.psnr_holdout = Some(m.psnr);
            eval = Some(m);
        }
        progress(&row);
        log.push(row);

        if let Some(dir) = &tc.out_dir {
            if iter % tc.checkpoint_every == 0 || iter == tc.iters {
                let path = dir.join("checkpoint.hmc");
                save_checkpoint(&model, &path)?;
                last_ckpt = Some(path);
                write_atomic(&dir.join("log.csv"), log_csv(&log).as_bytes())?;
                write_samples(dir, iter, &model, &hold, bm)?;
            }
        }
    }
    let eval = match eval {
        Some(e) => e,
        None => evaluate(&model, &hold, bm)?,
    };
    Ok(TrainOutcome { model, log, eval })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (HimeConfig, SynthSpec, TrainConfig) {
        let cfg = HimeConfig {
            n_refs: 1,
            c_f: 4,
            k_l: 1,
            k_h: 1,
            k_r: 1,
            ..HimeConfig::toy(2)
        };
        let data = SynthSpec {
            hr_size: 16,
            scale: 2,
            n_refs: 1,
            ..SynthSpec::default()
        };
        let tc = TrainConfig {
            iters: 6,
            batch_size: 2,
            eval_every: 3,
            holdout_size: 2,
            ..TrainConfig::default()
        };
        (cfg, data, tc)
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let (cfg, data, mut tc) = tiny();
        tc.adam.lr = 0.0;
        tc.fixed_batch = true;
        let out = train_toy(&cfg, &data, &tc).unwrap();
        assert!(out.log.iter().all(|r| r.total == out.log[0].total));
        let fresh = HimeModel::<f32>::new(cfg).unwrap();
        assert_eq!(
            out.model.params().iter().map(|p| &p.value).collect::<Vec<_>>(),
            fresh.params().iter().map(|p| &p.value).collect::<Vec<_>>()
        );
    }

    #[test]
    fn fixed_batch_overfits() {
        let (cfg, data, mut tc) = tiny();
        tc.fixed_batch = true;
        tc.iters = 30;
        tc.adam.lr = 1e-3;
        let out = train_toy(&cfg, &data, &tc).unwrap();
        assert!(out.log[29].total < out.log[0].total);
    }

    #[test]
    fn logs_are_seed_deterministic() {
        let (cfg, data, tc) = tiny();
        let a = train_toy(&cfg, &data, &tc).unwrap();
        let b = train_toy(&cfg, &data, &tc).unwrap();
        assert_eq!(log_csv(&a.log), log_csv(&b.log));
        let csv = log_csv(&a.log);
        assert!(csv.starts_with(LOG_HEADER));
        assert_eq!(csv.lines().count(), 7);
        assert_eq!(a.log.iter().filter(|r| r.psnr_holdout.is_some()).count(), 2);
    }

    #[test]
    fn loss_modes_fill_their_columns() {
        let (cfg, data, mut tc) = tiny();
        tc.iters = 1;
        for (mode, cor, per) in [
            (LossMode::Rec, false, false),
            (LossMode::RecCor, true, false),
            (LossMode::Perceptual, true, true),
        ] {
            tc.loss = mode;
            let row = &train_toy(&cfg, &data, &tc).unwrap().log[0];
            assert_eq!(row.l_cor.is_some(), cor, "{mode:?}");
            assert_eq!(row.l_per.is_some(), per, "{mode:?}");
        }
        assert_eq!("rec+cor".parse::<LossMode>().unwrap(), LossMode::RecCor);
        assert!("gan".parse::<LossMode>().is_err());
    }

    #[test]
    fn flow_guided_mode_trains() {
        let (mut cfg, data, mut tc) = tiny();
        cfg.rfa_mode = RfaMode::Large;
        tc.iters = 2;
        train_toy(&cfg, &data, &tc).unwrap();
    }

    #[test]
    fn mismatched_reference_count_is_rejected() {
        let (cfg, data, tc) = tiny();
        let data = SynthSpec { n_refs: 2, ..data };
        assert!(matches!(train_toy(&cfg, &data, &tc), Err(Error::Configuration(_))));
    }

    #[test]
    fn divergence_reports_last_checkpoint() {
        let (cfg, data, mut tc) = tiny();
        let dir = tempfile::tempdir().unwrap();
        tc.out_dir = Some(dir.path().to_path_buf());
        tc.checkpoint_every = 2;
        tc.iters = 40;
        tc.adam.lr = 1e6;
        match train_toy(&cfg, &data, &tc) {
            Err(Error::Diverged { iter, checkpoint, .. }) => {
                if iter > 2 {
                    let ck = checkpoint.unwrap();
                    crate::model::load_checkpoint::<f32>(&ck).unwrap();
                }
            }
            other => panic!("expected divergence, got {:?}", other.map(|o| o.log.len())),
        }
        assert!(dir.path().join("log.csv").exists());
    }

    #[test]
    fn window_ratio_edges() {
        let rows: Vec<_> = (0..4)
            .map(|i| LogRow {
                iter: i + 1,
                l_rec: 0.0,
                l_cor: None,
                l_per: None,
                total: (4 - i) as f64,
                psnr_holdout: None,
            })
            .collect();
        assert_eq!(window_ratio(&rows, 2), Some(1.5 / 3.5));
        assert_eq!(window_ratio(&rows, 5), None);
    }
}
