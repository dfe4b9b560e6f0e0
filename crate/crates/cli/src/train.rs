use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use hime_core::alignment::{AggregationMode, RfaMode};
use hime_core::imaging::format_psnr;
use hime_core::model::HimeConfig;
use hime_core::training::{train_toy_with, AdamConfig, FlipMode, LossMode, SynthSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::Outcome;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowSource {
    /// Coarse-to-fine block matching against the downscaled reference.
    BlockMatch,
    None,
}

/// Every setting of a training run. A JSON config file holds any subset of
/// these keys; command-line flags take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub iters: Option<usize>,
    pub out: Option<PathBuf>,
    pub refs: Option<usize>,
    pub rfa: Option<RfaMode>,
    pub agg: Option<AggregationMode>,
    pub flip: Option<FlipMode>,
    pub loss: Option<LossMode>,
    pub flow_source: Option<FlowSource>,
    pub seed: Option<u64>,
    pub scale: Option<usize>,
    pub hr_size: Option<usize>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub c_f: Option<usize>,
    pub k_l: Option<usize>,
    pub k_h: Option<usize>,
    pub k_r: Option<usize>,
    pub max_translation: Option<f64>,
    pub max_rotation: Option<f64>,
    pub eval_every: Option<usize>,
    pub checkpoint_every: Option<usize>,
    pub holdout: Option<usize>,
}

impl TrainSettings {
    /// Fields set in `self` win over `other`.
    fn or(self, other: TrainSettings) -> TrainSettings {
        TrainSettings {
            iters: self.iters.or(other.iters),
            out: self.out.or(other.out),
            refs: self.refs.or(other.refs),
            rfa: self.rfa.or(other.rfa),
            agg: self.agg.or(other.agg),
            flip: self.flip.or(other.flip),
            loss: self.loss.or(other.loss),
            flow_source: self.flow_source.or(other.flow_source),
            seed: self.seed.or(other.seed),
            scale: self.scale.or(other.scale),
            hr_size: self.hr_size.or(other.hr_size),
            lr: self.lr.or(other.lr),
            batch: self.batch.or(other.batch),
            c_f: self.c_f.or(other.c_f),
            k_l: self.k_l.or(other.k_l),
            k_h: self.k_h.or(other.k_h),
            k_r: self.k_r.or(other.k_r),
            max_translation: self.max_translation.or(other.max_translation),
            max_rotation: self.max_rotation.or(other.max_rotation),
            eval_every: self.eval_every.or(other.eval_every),
            checkpoint_every: self.checkpoint_every.or(other.checkpoint_every),
            holdout: self.holdout.or(other.holdout),
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Flat JSON object with any of the settings below (snake_case keys).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training iterations [default: 1000].
    #[arg(long)]
    pub iters: Option<usize>,
    /// Output directory for checkpoint.hmc, log.csv and samples/ (required
    /// here or in the config file).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// References per sample; 0 trains the no-reference baseline [default: 3].
    #[arg(long)]
    pub refs: Option<usize>,
    /// Reference alignment: small, large (flow-guided) or conv [default: small].
    #[arg(long)]
    pub rfa: Option<String>,
    /// Aggregation: cofa, average or maxpool [default: cofa].
    #[arg(long)]
    pub agg: Option<String>,
    /// Horizontal-flip augmentation: none, uneven or even [default: none].
    #[arg(long)]
    pub flip: Option<String>,
    /// Objective: rec, rec+cor or p [default: rec].
    #[arg(long)]
    pub loss: Option<String>,
    /// Flow source for --rfa large [default: block-match].
    #[arg(long, value_enum)]
    pub flow_source: Option<FlowSource>,
    /// Seed for weights and data [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Upscaling factor: 2, 4 or 8 [default: 4].
    #[arg(long)]
    pub scale: Option<usize>,
    /// HR side length of synthetic samples [default: 64].
    #[arg(long)]
    pub hr_size: Option<usize>,
    /// Adam learning rate [default: 1e-4].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Batch size [default: 4].
    #[arg(long)]
    pub batch: Option<usize>,
    /// Feature width [default: 16].
    #[arg(long)]
    pub c_f: Option<usize>,
    /// LR extractor residual blocks [default: 2].
    #[arg(long)]
    pub k_l: Option<usize>,
    /// Reference extractor residual blocks [default: 1].
    #[arg(long)]
    pub k_h: Option<usize>,
    /// Reconstructor residual blocks [default: 4].
    #[arg(long)]
    pub k_r: Option<usize>,
    /// Largest reference translation, HR pixels [default: 0.5].
    #[arg(long)]
    pub max_translation: Option<f64>,
    /// Largest reference rotation, degrees [default: 1].
    #[arg(long)]
    pub max_rotation: Option<f64>,
    /// Held-out evaluation interval [default: 100].
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Checkpoint and sample interval [default: 100].
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Held-out batch size [default: 16].
    #[arg(long)]
    pub holdout: Option<usize>,
}

fn parse_opt<T: std::str::FromStr<Err = hime_core::Error>>(v: &Option<String>) -> Result<Option<T>> {
    Ok(match v {
        Some(s) => Some(s.parse()?),
        None => None,
    })
}

impl TrainArgs {
    fn settings(&self) -> Result<TrainSettings> {
        Ok(TrainSettings {
            iters: self.iters,
            out: self.out.clone(),
            refs: self.refs,
            rfa: parse_opt(&self.rfa)?,
            agg: parse_opt(&self.agg)?,
            flip: parse_opt(&self.flip)?,
            loss: parse_opt(&self.loss)?,
            flow_source: self.flow_source,
            seed: self.seed,
            scale: self.scale,
            hr_size: self.hr_size,
            lr: self.lr,
            batch: self.batch,
            c_f: self.c_f,
            k_l: self.k_l,
            k_h: self.k_h,
            k_r: self.k_r,
            max_translation: self.max_translation,
            max_rotation: self.max_rotation,
            eval_every: self.eval_every,
            checkpoint_every: self.checkpoint_every,
            holdout: self.holdout,
        })
    }
}

/// Resolved run description.
pub struct TrainPlan {
    pub model: HimeConfig,
    pub data: SynthSpec,
    pub train: TrainConfig,
}

pub fn resolve(s: TrainSettings) -> Result<TrainPlan> {
    let scale = s.scale.unwrap_or(4);
    let refs = s.refs.unwrap_or(3);
    let seed = s.seed.unwrap_or(0);
    let toy = HimeConfig::toy(scale);
    let model = HimeConfig {
        n_refs: refs,
        rfa_mode: s.rfa.unwrap_or(RfaMode::Small),
        aggregation: s.agg.unwrap_or(AggregationMode::Cofa),
        c_f: s.c_f.unwrap_or(toy.c_f),
        k_l: s.k_l.unwrap_or(toy.k_l),
        k_h: s.k_h.unwrap_or(toy.k_h),
        k_r: s.k_r.unwrap_or(toy.k_r),
        seed,
        ..toy
    };
    model.validate()?;
    if model.rfa_mode == RfaMode::Large && s.flow_source == Some(FlowSource::None) {
        bail!(hime_core::Error::Configuration(
            "flow-guided alignment (--rfa large) needs a flow source".into()
        ));
    }
    let defaults = SynthSpec::default();
    let data = SynthSpec {
        hr_size: s.hr_size.unwrap_or(defaults.hr_size),
        scale,
        n_refs: refs,
        max_translation: s.max_translation.unwrap_or(defaults.max_translation),
        max_rotation_deg: s.max_rotation.unwrap_or(defaults.max_rotation_deg),
        seed,
        flip_mode: s.flip.unwrap_or(FlipMode::None),
        ..defaults
    };
    data.validate()?;
    let Some(out) = s.out else {
        bail!(hime_core::Error::Configuration(
            "an output directory (--out) is required".into()
        ));
    };
    let td = TrainConfig::default();
    let train = TrainConfig {
        iters: s.iters.unwrap_or(td.iters),
        batch_size: s.batch.unwrap_or(td.batch_size),
        adam: AdamConfig {
            lr: s.lr.unwrap_or(td.adam.lr),
            ..td.adam
        },
        loss: s.loss.unwrap_or(td.loss),
        eval_every: s.eval_every.unwrap_or(td.eval_every),
        checkpoint_every: s.checkpoint_every.unwrap_or(td.checkpoint_every),
        holdout_size: s.holdout.unwrap_or(td.holdout_size),
        out_dir: Some(out),
        ..td
    };
    Ok(TrainPlan { model, data, train })
}

pub fn train(a: TrainArgs) -> Result<Outcome> {
    let flags = a.settings()?;
    let file = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<TrainSettings>(&text)
                .map_err(|e| hime_core::Error::Configuration(format!("{}: {e}", path.display())))?
        }
        None => TrainSettings::default(),
    };
    let plan = resolve(flags.or(file))?;
    let out = plan
        .train
        .out_dir
        .clone()
        .expect("resolved plan has an output directory");
    hime_core::write_atomic(
        &out.join("config.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "model": plan.model,
            "data": plan.data,
            "iters": plan.train.iters,
            "batch": plan.train.batch_size,
            "lr": plan.train.adam.lr,
            "loss": plan.train.loss,
        }))?
        .as_bytes(),
    )?;
    let result = train_toy_with(&plan.model, &plan.data, &plan.train, |row| {
        if let Some(p) = row.psnr_holdout {
            eprintln!(
                "iter {:>6}  loss {:.6}  holdout psnr {}",
                row.iter,
                row.total,
                format_psnr(p)
            );
        }
    })?;
    let e = result.eval;
    println!(
        "holdout psnr {} (bicubic {}), ssim {:.4} (bicubic {:.4})",
        format_psnr(e.psnr),
        format_psnr(e.bicubic_psnr),
        e.ssim,
        e.bicubic_ssim
    );
    Ok(Outcome::Ok)
}
