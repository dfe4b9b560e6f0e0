use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use hime_core::alignment::{block_match_flow, BlockMatchParams, RfaMode};
use hime_core::imaging::{corrmap_visualize, format_psnr, load_image, psnr, save_image, ssim};
use hime_core::losses::correlation_map;
use hime_core::model::{estimate_flows, load_checkpoint};
use hime_core::tensor::{read_htf_file, write_htf_file};
use hime_core::training::GradOp;
use hime_core::Tensor;

use crate::Outcome;

#[derive(Args, Debug)]
pub struct CorrmapArgs {
    /// Input image (PNG, PPM or PGM).
    #[arg(long)]
    pub input: PathBuf,
    /// Correlation window size; must be odd.
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Spacing between window taps.
    #[arg(long, default_value_t = 1)]
    pub dilation: usize,
    /// Output visualisation (PNG, PPM).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the raw (1, k², H, W) map as HTF.
    #[arg(long)]
    pub raw: Option<PathBuf>,
}

pub fn corrmap(a: CorrmapArgs) -> Result<Outcome> {
    let img = load_image::<f64>(&a.input)?;
    let map = correlation_map(&img, a.k, a.dilation)?;
    corrmap_visualize(&map, &a.out)?;
    if let Some(raw) = &a.raw {
        write_htf_file(map.tensor(), raw)?;
    }
    Ok(Outcome::Ok)
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Check a single operator instead of the whole suite.
    #[arg(long)]
    pub op: Option<String>,
    /// Relative-error bound [default: 1e-4, 1e-3 for end_to_end].
    #[arg(long)]
    pub tolerance: Option<f64>,
}

pub fn gradcheck(a: GradcheckArgs) -> Result<Outcome> {
    let ops = match &a.op {
        Some(name) => vec![GradOp::from_name(name)?],
        None => GradOp::ALL.to_vec(),
    };
    if let Some(t) = a.tolerance {
        if !(t > 0.0 && t.is_finite()) {
            bail!(hime_core::Error::Parameter(format!(
                "tolerance must be positive, got {t}"
            )));
        }
    }
    println!("{:<22} {:>10}  {:>11}  status", "op", "max_rel_err", "tolerance");
    let mut all_ok = true;
    for op in ops {
        let report = op.check(a.tolerance.unwrap_or(op.default_tolerance()))?;
        all_ok &= report.passed();
        println!("{report}");
    }
    Ok(if all_ok { Outcome::Ok } else { Outcome::Failed })
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Model checkpoint (HMC1).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Low-resolution input image.
    #[arg(long)]
    pub lr: PathBuf,
    /// Reference images; any number, including none.
    #[arg(long = "ref", num_args = 1..)]
    pub refs: Vec<PathBuf>,
    /// Flow fields (HTF, (1, 2, h, w)), one per reference, for flow-guided
    /// checkpoints. Estimated by block matching when omitted.
    #[arg(long = "flow", num_args = 1..)]
    pub flows: Vec<PathBuf>,
    /// Output SR image.
    #[arg(long)]
    pub out: PathBuf,
    /// Ground truth; PSNR and SSIM are printed when given.
    #[arg(long)]
    pub gt: Option<PathBuf>,
}

pub fn infer(a: InferArgs) -> Result<Outcome> {
    let model = load_checkpoint::<f32>(&a.checkpoint)?;
    let lr = load_image::<f32>(&a.lr)?;
    let refs = a
        .refs
        .iter()
        .map(load_image::<f32>)
        .collect::<hime_core::Result<Vec<_>>>()?;
    let large = model.config().rfa_mode == RfaMode::Large;
    let flows: Option<Vec<Tensor<f32>>> = if !a.flows.is_empty() {
        if !large {
            bail!(hime_core::Error::Configuration(
                "--flow given but the checkpoint does not use flow-guided alignment".into()
            ));
        }
        if a.flows.len() != refs.len() {
            bail!(hime_core::Error::Configuration(format!(
                "{} flow fields for {} references",
                a.flows.len(),
                refs.len()
            )));
        }
        Some(
            a.flows
                .iter()
                .map(|p| read_htf_file(p).map(|t| t.into_tensor::<f32>()))
                .collect::<hime_core::Result<_>>()?,
        )
    } else if large && !refs.is_empty() {
        Some(estimate_flows(
            &lr,
            &refs,
            model.config().scale,
            BlockMatchParams::default(),
        )?)
    } else {
        None
    };
    let sr = model.forward(&lr, &refs, flows.as_deref())?;
    save_image(&sr, &a.out)?;
    if let Some(gt) = &a.gt {
        let gt = load_image::<f32>(gt)?;
        let sr = sr.map(|v| v.clamp(0.0, 1.0));
        println!("psnr {}", format_psnr(psnr(&sr, &gt, 1.0)?));
        println!("ssim {:.6}", ssim(&sr, &gt)?);
    }
    Ok(Outcome::Ok)
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    /// Reference image.
    #[arg(long)]
    pub a: PathBuf,
    /// Image(s) to score against --a.
    #[arg(long, num_args = 1.., required = true)]
    pub b: Vec<PathBuf>,
    /// Also write the table to this CSV file.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Prints `file,psnr,ssim` rows, one per `--b` image.
pub fn metrics(a: MetricsArgs) -> Result<Outcome> {
    let reference = load_image::<f64>(&a.a)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["file", "psnr", "ssim"])?;
    for path in &a.b {
        let img = load_image::<f64>(path)?;
        let p = psnr(&reference, &img, 1.0)?;
        let s = ssim(&reference, &img)?;
        w.write_record([path.display().to_string(), format_psnr(p), format!("{s:.6}")])?;
    }
    let bytes = w.into_inner().context("flushing csv")?;
    print!("{}", String::from_utf8_lossy(&bytes));
    if let Some(out) = &a.csv {
        hime_core::write_atomic(out, &bytes)?;
    }
    Ok(Outcome::Ok)
}

#[derive(Args, Debug)]
pub struct FlowArgs {
    /// Image whose content the flow points into.
    #[arg(long)]
    pub src: PathBuf,
    /// Image on whose grid the flow is defined.
    #[arg(long)]
    pub dst: PathBuf,
    /// Output flow (HTF, (1, 2, H, W), row then column displacement).
    #[arg(long)]
    pub out: PathBuf,
    /// Search radius per pyramid level, pixels.
    #[arg(long, default_value_t = 2)]
    pub radius: usize,
    /// Matching block size, pixels.
    #[arg(long, default_value_t = 4)]
    pub block: usize,
    /// Pyramid levels.
    #[arg(long, default_value_t = 2)]
    pub levels: usize,
}

pub fn flow(a: FlowArgs) -> Result<Outcome> {
    let src = load_image::<f32>(&a.src)?;
    let dst = load_image::<f32>(&a.dst)?;
    let params = BlockMatchParams {
        search_radius: a.radius,
        block: a.block,
        levels: a.levels,
    };
    let flow = block_match_flow(&src, &dst, params)?;
    write_htf_file(&flow, &a.out)?;
    Ok(Outcome::Ok)
}
