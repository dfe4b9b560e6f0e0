//! Central finite-difference checks of every analytic vjp.
//!
//! For a random cotangent `c` and each checked coordinate `j`,
//! the analytic value `(Jᵀc)_j` is compared with
//! `Σ_k c_k (f(x + h e_j)_k − f(x − h e_j)_k) / 2h`. The relative error of
//! an input is `max|a − n| / max(max|a|, max|n|, 1e-8)` over its checked
//! coordinates.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::{
    aggregate_baseline_vjp, cofa_aggregate_vjp, rfa_align_vjp, similarity_score_vjp, BaselineKind, CofaParams, RfaMode,
    RfaParams,
};
use crate::diffops::{
    bicubic_resize_vjp, bilinear_warp_vjp, conv2d_vjp, deformable_conv_vjp, pixel_shuffle_vjp, residual_block_vjp,
    space_to_depth_vjp, Conv2dParams, Scale,
};
use crate::error::{Error, Result};
use crate::losses::{
    charbonnier_vjp, combined_loss_vjp, correlation_loss_vjp, correlation_map_vjp, feature_l1_vjp, LossWeights,
    DEFAULT_CHARBONNIER_EPS,
};
use crate::model::{HimeConfig, HimeModel};
use crate::tensor::{activation_vjp, channel_mean_vjp, ew_binary_vjp, Activation, BinaryOp, Grads, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

/// Coordinates checked per operator; inputs with more are subsampled.
const COORD_BUDGET: usize = 400;

/// Error statistics for one named input.
#[derive(Clone, Debug, PartialEq)]
pub struct InputError {
    pub name: String,
    pub coords: usize,
    pub max_abs_err: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub op: String,
    pub tolerance: f64,
    pub inputs: Vec<InputError>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|i| i.rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|i| i.rel_err <= self.tolerance)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<22} {:>10.3e}  tol {:>7.1e}  {}",
            self.op,
            self.max_rel_err(),
            self.tolerance,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

/// Inputs of an operator under test, each with a group name; errors are
/// reported per group.
pub type NamedInputs = Vec<(String, Tensor<f64>)>;

/// Settings of one finite-difference check.
#[derive(Clone, Copy, Debug)]
pub struct CheckSettings {
    pub tolerance: f64,
    pub step: f64,
    pub coord_budget: usize,
    pub seed: u64,
}

impl Default for CheckSettings {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_TOLERANCE,
            step: DEFAULT_STEP,
            coord_budget: COORD_BUDGET,
            seed: 0,
        }
    }
}

/// Checks `backward(inputs, c)` against finite differences of `forward`.
pub fn gradcheck<F, B>(
    op: &str,
    inputs: &NamedInputs,
    forward: F,
    backward: B,
    s: CheckSettings,
) -> Result<GradcheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    B: Fn(&[Tensor<f64>], &Tensor<f64>) -> Result<Vec<Tensor<f64>>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0x9e37_79b9);
    let values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let out = forward(&values)?;
    let cot = Tensor::from_fn(out.shape(), |_, _, _, _| rng.random_range(-1.0..1.0));
    let analytic = backward(&values, &cot)?;
    if analytic.len() != values.len() {
        return Err(Error::Shape(format!(
            "{op}: backward returned {} cotangents for {} inputs",
            analytic.len(),
            values.len()
        )));
    }
    for (a, v) in analytic.iter().zip(&values) {
        a.expect_same_shape(v, op)?;
    }

    let offsets: Vec<usize> = values
        .iter()
        .scan(0, |acc, v| {
            let start = *acc;
            *acc += v.len();
            Some(start)
        })
        .collect();
    let total: usize = values.iter().map(Tensor::len).sum();
    let mut coords: Vec<usize> = if total <= s.coord_budget {
        (0..total).collect()
    } else {
        sample(&mut rng, total, s.coord_budget).into_vec()
    };
    coords.sort_unstable();

    let mut pairs: Vec<Vec<(f64, f64)>> = vec![Vec::new(); values.len()];
    for flat in coords {
        let i = offsets.partition_point(|&o| o <= flat) - 1;
        let j = flat - offsets[i];
        let eval = |delta: f64| -> Result<Tensor<f64>> {
            let mut v = values.clone();
            v[i].data_mut()[j] += delta;
            forward(&v)
        };
        let plus = eval(s.step)?;
        let minus = eval(-s.step)?;
        let numeric = plus
            .data()
            .iter()
            .zip(minus.data())
            .zip(cot.data())
            .map(|((p, m), c)| c * (p - m))
            .sum::<f64>()
            / (2.0 * s.step);
        pairs[i].push((analytic[i].data()[j], numeric));
    }

    let mut groups: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for ((name, _), p) in inputs.iter().zip(pairs) {
        match groups.iter_mut().find(|(n, _)| n == name) {
            Some((_, acc)) => acc.extend(p),
            None => groups.push((name.clone(), p)),
        }
    }
    let inputs = groups
        .into_iter()
        .filter(|(_, p)| !p.is_empty())
        .map(|(name, p)| {
            let max_abs_err = p.iter().map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
            let scale = p.iter().map(|(a, n)| a.abs().max(n.abs())).fold(1e-8, f64::max);
            InputError {
                name,
                coords: p.len(),
                max_abs_err,
                rel_err: max_abs_err / scale,
            }
        })
        .collect();
    Ok(GradcheckReport {
        op: op.to_string(),
        tolerance: s.tolerance,
        inputs,
    })
}

/// Every operator with an analytic vjp.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GradOp {
    EwAdd,
    EwMulBroadcast,
    ChannelMean,
    Relu,
    Sigmoid,
    Conv2d,
    ResidualBlock,
    SpaceToDepth,
    PixelShuffle,
    BilinearWarp,
    DeformableConv,
    BicubicResize,
    Charbonnier,
    CorrelationMap,
    CorrelationLoss,
    FeatureL1,
    CombinedLoss,
    RfaSmall,
    RfaLarge,
    RfaConv,
    SimilarityScore,
    CofaAggregate,
    AggregateAverage,
    AggregateMaxPool,
    ExtractLr,
    ExtractRef,
    Reconstruct,
    EndToEnd,
}

/// Operators without a vjp, known by name so asking for them is an
/// explicit unsupported error rather than an unknown name.
pub const VALUE_ONLY_OPS: &[&str] = &["relativistic_losses", "block_match_flow"];

impl GradOp {
    pub const ALL: [GradOp; 28] = [
        GradOp::EwAdd,
        GradOp::EwMulBroadcast,
        GradOp::ChannelMean,
        GradOp::Relu,
        GradOp::Sigmoid,
        GradOp::Conv2d,
        GradOp::ResidualBlock,
        GradOp::SpaceToDepth,
        GradOp::PixelShuffle,
        GradOp::BilinearWarp,
        GradOp::DeformableConv,
        GradOp::BicubicResize,
        GradOp::Charbonnier,
        GradOp::CorrelationMap,
        GradOp::CorrelationLoss,
        GradOp::FeatureL1,
        GradOp::CombinedLoss,
        GradOp::RfaSmall,
        GradOp::RfaLarge,
        GradOp::RfaConv,
        GradOp::SimilarityScore,
        GradOp::CofaAggregate,
        GradOp::AggregateAverage,
        GradOp::AggregateMaxPool,
        GradOp::ExtractLr,
        GradOp::ExtractRef,
        GradOp::Reconstruct,
        GradOp::EndToEnd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradOp::EwAdd => "ew_add",
            GradOp::EwMulBroadcast => "ew_mul_broadcast",
            GradOp::ChannelMean => "channel_mean",
            GradOp::Relu => "relu",
            GradOp::Sigmoid => "sigmoid",
            GradOp::Conv2d => "conv2d",
            GradOp::ResidualBlock => "residual_block",
            GradOp::SpaceToDepth => "space_to_depth",
            GradOp::PixelShuffle => "pixel_shuffle",
            GradOp::BilinearWarp => "bilinear_warp",
            GradOp::DeformableConv => "deformable_conv",
            GradOp::BicubicResize => "bicubic_resize",
            GradOp::Charbonnier => "charbonnier",
            GradOp::CorrelationMap => "correlation_map",
            GradOp::CorrelationLoss => "correlation_loss",
            GradOp::FeatureL1 => "feature_l1",
            GradOp::CombinedLoss => "combined_loss",
            GradOp::RfaSmall => "rfa_align_small",
            GradOp::RfaLarge => "rfa_align_large",
            GradOp::RfaConv => "rfa_align_conv",
            GradOp::SimilarityScore => "similarity_score",
            GradOp::CofaAggregate => "cofa_aggregate",
            GradOp::AggregateAverage => "aggregate_average",
            GradOp::AggregateMaxPool => "aggregate_maxpool",
            GradOp::ExtractLr => "extract_lr",
            GradOp::ExtractRef => "extract_ref",
            GradOp::Reconstruct => "reconstruct",
            GradOp::EndToEnd => "end_to_end",
        }
    }

    /// Looks up an operator; value-only operators are `Unsupported`,
    /// anything else unknown is a `Parameter` error listing the names.
    pub fn from_name(name: &str) -> Result<GradOp> {
        if let Some(op) = GradOp::ALL.iter().find(|o| o.name() == name) {
            return Ok(*op);
        }
        if VALUE_ONLY_OPS.contains(&name) {
            return Err(Error::Unsupported(format!("`{name}` has no vjp to check")));
        }
        let names: Vec<&str> = GradOp::ALL.iter().map(|o| o.name()).collect();
        Err(Error::Parameter(format!(
            "unknown op `{name}`; available: {}",
            names.join(", ")
        )))
    }

    pub fn default_tolerance(self) -> f64 {
        match self {
            GradOp::EndToEnd => END_TO_END_TOLERANCE,
            _ => DEFAULT_TOLERANCE,
        }
    }

    /// Runs the check at `tolerance`.
    pub fn check(self, tolerance: f64) -> Result<GradcheckReport> {
        let s = CheckSettings {
            tolerance,
            seed: 17 + self as u64,
            ..CheckSettings::default()
        };
        run(self, s)
    }
}

/// Runs every check at its default tolerance.
pub fn run_suite() -> Result<Vec<GradcheckReport>> {
    GradOp::ALL.iter().map(|op| op.check(op.default_tolerance())).collect()
}

fn uniform(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

fn named(items: Vec<(&str, Tensor<f64>)>) -> NamedInputs {
    items.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

fn scalar(v: f64) -> Tensor<f64> {
    Tensor::full([1, 1, 1, 1], v)
}

fn conv_from(w: &Tensor<f64>, b: &Tensor<f64>) -> Result<Conv2dParams<f64>> {
    Conv2dParams::same(w.clone(), b.clone())
}

fn rfa_case(rng: &mut ChaCha8Rng, mode: RfaMode, s: CheckSettings) -> Result<GradcheckReport> {
    let (c, k) = (4, 3);
    let shape = [1, c, 6, 6];
    let flow = (mode == RfaMode::Large).then(|| uniform(rng, [1, 2, 6, 6], -1.2, 1.2));
    let inputs = named(vec![
        ("f_ref", uniform(rng, shape, -1.0, 1.0)),
        ("f_lr", uniform(rng, shape, -1.0, 1.0)),
        ("offset1.weight", uniform(rng, [c, 2 * c, 3, 3], -0.2, 0.2)),
        ("offset1.bias", uniform(rng, [1, c, 1, 1], -0.1, 0.1)),
        ("offset2.weight", uniform(rng, [2 * k * k, c, 3, 3], -0.3, 0.3)),
        ("offset2.bias", uniform(rng, [1, 2 * k * k, 1, 1], -0.3, 0.3)),
        ("dconv.weight", uniform(rng, [c, c, k, k], -0.3, 0.3)),
        ("dconv.bias", uniform(rng, [1, c, 1, 1], -0.1, 0.1)),
    ]);
    let params = move |x: &[Tensor<f64>]| -> Result<RfaParams<f64>> {
        Ok(RfaParams {
            offset1: conv_from(&x[2], &x[3])?,
            offset2: conv_from(&x[4], &x[5])?,
            dconv: conv_from(&x[6], &x[7])?,
            mode,
        })
    };
    let flow2 = flow.clone();
    gradcheck(
        GradOp::from(mode).name(),
        &inputs,
        |x| Ok(rfa_align_vjp(&x[0], &x[1], flow.as_ref(), &params(x)?)?.0),
        |x, g| {
            let (_, back) = rfa_align_vjp(&x[0], &x[1], flow2.as_ref(), &params(x)?)?;
            let r = back(g)?;
            Ok(vec![
                r.f_ref,
                r.f_lr,
                r.offset1.weight,
                r.offset1.bias,
                r.offset2.weight,
                r.offset2.bias,
                r.dconv.weight,
                r.dconv.bias,
            ])
        },
        s,
    )
}

impl From<RfaMode> for GradOp {
    fn from(mode: RfaMode) -> Self {
        match mode {
            RfaMode::Small => GradOp::RfaSmall,
            RfaMode::Large => GradOp::RfaLarge,
            RfaMode::Conv => GradOp::RfaConv,
        }
    }
}

/// A small network so stage checks stay fast.
fn stage_model(rng: &mut ChaCha8Rng, scale: usize) -> Result<HimeModel<f64>> {
    let cfg = HimeConfig {
        k_l: 1,
        k_h: 1,
        k_r: 1,
        c_f: 4,
        seed: rng.random(),
        ..HimeConfig::toy(scale)
    };
    let mut m = HimeModel::<f64>::new(cfg)?;
    // Non-zero biases so every path carries signal.
    let keys: Vec<_> = m.params().keys().collect();
    for k in keys {
        if m.params().get(k).id.ends_with(".bias") {
            let shape = m.params().value(k).shape();
            m.params_mut().set_value(k, uniform(rng, shape, -0.1, 0.1))?;
        }
    }
    Ok(m)
}

fn with_values(model: &HimeModel<f64>, values: &[Tensor<f64>]) -> Result<HimeModel<f64>> {
    let mut m = model.clone();
    let keys: Vec<_> = m.params().keys().collect();
    for (k, v) in keys.into_iter().zip(values) {
        m.params_mut().set_value(k, v.clone())?;
    }
    Ok(m)
}

fn param_inputs(model: &HimeModel<f64>) -> NamedInputs {
    model
        .params()
        .iter()
        .map(|p| ("params".to_string(), p.value.clone()))
        .collect()
}

fn grads_vec(model: &HimeModel<f64>, g: &Grads<f64>) -> Vec<Tensor<f64>> {
    model
        .params()
        .keys()
        .map(|k| {
            g.get(k)
                .cloned()
                .unwrap_or_else(|| model.params().value(k).zeros_like())
        })
        .collect()
}

#[derive(Clone, Copy)]
enum Stage {
    Lr,
    Ref,
    Rec,
}

fn stage_case(rng: &mut ChaCha8Rng, stage: Stage, s: CheckSettings) -> Result<GradcheckReport> {
    let model = stage_model(rng, 2)?;
    let np = model.params().len();
    let input = match stage {
        Stage::Lr => uniform(rng, [1, 3, 6, 6], 0.0, 1.0),
        Stage::Ref => uniform(rng, [1, 3, 8, 8], 0.0, 1.0),
        Stage::Rec => uniform(rng, [1, 4, 4, 4], -1.0, 1.0),
    };
    let mut inputs = param_inputs(&model);
    inputs.push(("input".to_string(), input));
    let op = match stage {
        Stage::Lr => GradOp::ExtractLr,
        Stage::Ref => GradOp::ExtractRef,
        Stage::Rec => GradOp::Reconstruct,
    };
    let run_stage = |m: &HimeModel<f64>, x: &Tensor<f64>| match stage {
        Stage::Lr => m.extract_lr_vjp(x),
        Stage::Ref => m.extract_ref_vjp(x),
        Stage::Rec => m.reconstruct_vjp(x),
    };
    gradcheck(
        op.name(),
        &inputs,
        |x| Ok(run_stage(&with_values(&model, &x[..np])?, &x[np])?.0),
        |x, g| {
            let m = with_values(&model, &x[..np])?;
            let (_, back) = run_stage(&m, &x[np])?;
            let sg = back(g)?;
            let mut out = grads_vec(&m, &sg.params);
            out.push(sg.input);
            Ok(out)
        },
        s,
    )
}

/// Charbonnier + correlation loss of the toy network, 2 references, checked
/// on 20 randomly chosen parameter coordinates.
fn end_to_end_case(rng: &mut ChaCha8Rng, s: CheckSettings) -> Result<GradcheckReport> {
    let mut model = HimeModel::<f64>::new(HimeConfig {
        seed: rng.random(),
        ..HimeConfig::toy(4)
    })?;
    let keys: Vec<_> = model.params().keys().collect();
    for k in keys {
        if model.params().get(k).id.ends_with(".bias") {
            let shape = model.params().value(k).shape();
            model.params_mut().set_value(k, uniform(rng, shape, -0.05, 0.05))?;
        }
    }
    let lr = uniform(rng, [1, 3, 8, 8], 0.0, 1.0);
    let refs = vec![
        uniform(rng, [1, 3, 32, 32], 0.0, 1.0),
        uniform(rng, [1, 3, 32, 32], 0.0, 1.0),
    ];
    let hr = uniform(rng, [1, 3, 32, 32], 0.0, 1.0);
    let weights = LossWeights {
        lambda_rec: 1.0,
        lambda_adv: 0.0,
        lambda_per: 0.0,
        lambda_cor: 0.1,
    };
    let np = model.params().len();
    let inputs = param_inputs(&model);
    let loss = |m: &HimeModel<f64>| -> Result<f64> {
        let sr = m.forward(&lr, &refs, None)?;
        Ok(combined_loss_vjp(&sr, &hr, None, None, &weights, 3, 1)?.0.total)
    };
    gradcheck(
        GradOp::EndToEnd.name(),
        &inputs,
        |x| Ok(scalar(loss(&with_values(&model, &x[..np])?)?)),
        |x, g| {
            let m = with_values(&model, &x[..np])?;
            let (sr, back) = m.forward_vjp(&lr, &refs, None)?;
            let (_, lback) = combined_loss_vjp(&sr, &hr, None, None, &weights, 3, 1)?;
            let dsr = lback(g.data()[0])?.sr;
            Ok(grads_vec(&m, &back(&dsr)?.params))
        },
        CheckSettings { coord_budget: 20, ..s },
    )
}

fn run(op: GradOp, s: CheckSettings) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let rng = &mut rng;
    let name = op.name();
    match op {
        GradOp::EwAdd => {
            let inputs = named(vec![
                ("a", uniform(rng, [1, 3, 4, 4], -1.0, 1.0)),
                ("b", uniform(rng, [1, 1, 4, 4], -1.0, 1.0)),
            ]);
            gradcheck(
                name,
                &inputs,
                |x| Ok(ew_binary_vjp(&x[0], &x[1], BinaryOp::Add)?.0),
                |x, g| {
                    let (a, b) = ew_binary_vjp(&x[0], &x[1], BinaryOp::Add)?.1(g)?;
                    Ok(vec![a, b])
                },
                s,
            )
        }
        GradOp::EwMulBroadcast => {
            let inputs = named(vec![
                ("a", uniform(rng, [1, 3, 4, 4], -1.0, 1.0)),
                ("b", uniform(rng, [1, 3, 1, 1], -1.0, 1.0)),
            ]);
            gradcheck(
                name,
                &inputs,
                |x| Ok(ew_binary_vjp(&x[0], &x[1], BinaryOp::Mul)?.0),
                |x, g| {
                    let (a, b) = ew_binary_vjp(&x[0], &x[1], BinaryOp::Mul)?.1(g)?;
                    Ok(vec![a, b])
                },
                s,
            )
        }
        GradOp::ChannelMean => {
            let inputs = named(vec![("x", uniform(rng, [1, 4, 5, 5], -1.0, 1.0))]);
            gradcheck(
                name,
                &inputs,
                |x| Ok(channel_mean_vjp(&x[0])?.0),
                |x, g| Ok(vec![channel_mean_vjp(&x[0])?.1(g)?]),
                s,
            )
        }
        GradOp::Relu | GradOp::Sigmoid => {
            let kind = if op == GradOp::Relu {
                Activation::Relu
            } else {
                Activation::Sigmoid
            };
            // keep clear of the relu kink
            let x = uniform(rng, [1, 3, 5, 5], -2.0, 2.0).map(|u| u.signum() * (0.05 + u.abs()));
            let inputs = named(vec![("x", x)]);
            gradcheck(
                name,
                &inputs,
                |x| Ok(activation_vjp(&x[0], kind).0),
                |x, g| Ok(vec![activation_vjp(&x[0], kind).1(g)?]),
                s,
            )
        }
        GradOp::Conv2d => {
            let inputs = named(vec![
                ("x", uniform(rng, [1, 3, 6, 6], -1.0, 1.0)),
                ("weight", uniform(rng, [4, 3, 3, 3], -0.5, 0.5)),
                ("bias", uniform(rng, [1, 4, 1, 1], -0.5, 0.5)),
            ]);
            gradcheck(
                name,
                &inputs,
                |x| conv2d_vjp(&x[0], &conv_from(&x[1], &x[2])?).map(|r| r.0),
                |x, g| {
                    let r = conv2d_vjp(&x[0], &conv_from(&x[1], &x[2])?)?.1(g)?;
                    Ok(vec![r.x, r.weight, r.bias])
                },
                s,
            )
        }
        GradOp::ResidualBlock => {
            let inputs = named(vec![
                ("x", uniform(rng, [1, 4, 5, 5], -1.0, 1.0)),
                ("conv1.weight", uniform(rng, [4, 4, 3, 3], -0.4, 0.4)),
                ("conv1.bias", uniform(rng, [1, 4, 1, 1], -0.2, 0.2)),
                ("conv2.weight", uniform(rng, [4, 4, 3, 3], -0.4, 0.4)),
                ("conv2.bias", uniform(rng, [1, 4, 1, 1], -0.2, 0.2)),
            ]);
            let convs = |x: &[Tensor<f64>]| Ok::<_, Error>((conv_from(&x[1], &x[2])?, conv_from(&x[3], &x[4])?));
            gradcheck(
                name,
                &inputs,
                |x| {
                    let (p1, p2) = convs(x)?;
                    Ok(residual_block_vjp(&x[0], &p1, &p2)?.0)
                },
                |x, g| {
                    let (p1, p2) = convs(x)?;
                    let r = residual_block_vjp(&x[0], &p1, &p2)?.1(g)?;
                    Ok(vec![r.x, r.conv1.weight, r.conv1.bias, r.conv2.weight, r.conv2.bias])
                },
                s,
            )
        }
        GradOp::SpaceToDepth => {
            let inputs = named(vec![("x", uniform(rng, [1, 2, 6, 6], -1.0, 1.0))]);
            gradcheck(
                name,
                &inputs,
                |x| space_to_depth_vjp(&x[0], 2).map(|r| r.0),
                |x, g| Ok(vec![space_to_depth_vjp(&x[0], 2)?.1(g)?]),
                s,
            )
        }
        GradOp::PixelShuffle => {
            let inputs = named(vec![("x", uniform(rng, [1, 4, 3, 3], -1.0, 1.0))]);
            gradcheck(
                name,
                &inputs,
                |x| pixel_shuffle_vjp(&x[0], 2).map(|r| r.0),
                |x, g| Ok(vec![pixel_shuffle_vjp(&x[0], 2)?.1(g)?]),
                s,
            )
        }
        GradOp::BilinearWarp => {
            let inputs = named(vec![
                ("x", uniform(rng, [1, 2, 5, 5], -1.0, 1.0)),
                ("flow", uniform(rng, [1, 2, 5, 5], -1.4, 1.4)),
            ]);
            gradcheck(
                name,
                &inputs,
                |x| bilinear_warp_vjp(&x[0], &x[1]).map(|r| r.0),
                |x, g| {
                    let r = bilinear_warp_vjp(&x[0], &x[1])?.1(g)?;
                    Ok(vec![r.x, r.flow])
                },
                s,
            )
        }
        GradOp::DeformableConv => {
            let inputs = named(vec![
                ("x", uniform(rng, [1, 2, 5, 5], -1.0, 1.0)),
                ("weight", uniform(rng, [3, 2, 3, 3], -0.5, 0.5)),
                ("bias", uniform(rng, [1, 3, 1, 1], -0.5, 0.5)),
                ("offsets", uniform(rng, [1, 18, 5, 5], -1.4, 1.4)),
            ]);
            gradcheck(
                name,
                &inputs,
                |x| deformable_conv_vjp(&x[0], &conv_from(&x[1], &x[2])?, &x[3]).map(|r| r.0),
                |x, g| {
                    let r = deformable_conv_vjp(&x[0], &conv_from(&x[1], &x[2])?, &x[3])?.1(g)?;
                    Ok(vec![r.x, r.weight, r.bias, r.offsets])
                },
                s,
            )
        }
        GradOp::BicubicResize => {
            let inputs = named(vec![("x", uniform(rng, [1, 2, 4, 6], -1.0, 1.0))]);
            let up = Scale::up(2)?;
            gradcheck(
                name,
                &inputs,
                |x| bicubic_resize_vjp(&x[0], up).map(|r| r.0),
                |x, g| Ok(vec![bicubic_resize_vjp(&x[0], up)?.1(g)?]),
                s,
            )
        }
        GradOp::Charbonnier => {
            let hr = uniform(rng, [1, 3, 4, 4], 0.0, 1.0);
            let inputs = named(vec![("sr", uniform(rng, [1, 3, 4, 4], 0.0, 1.0))]);
            let eps = DEFAULT_CHARBONNIER_EPS;
            gradcheck(
                name,
                &inputs,
                |x| Ok(scalar(charbonnier_vjp(&x[0], &hr, eps)?.0)),
                |x, g| Ok(vec![charbonnier_vjp(&x[0], &hr, eps)?.1(g.data()[0])?]),
                s,
            )
        }
        GradOp::CorrelationMap => {
            let inputs = named(vec![("img", uniform(rng, [1, 3, 6, 6], 0.0, 1.0))]);
            let mut reports = Vec::new();
            for d in [1, 2] {
                reports.push(gradcheck(
                    name,
                    &inputs,
                    |x| Ok(correlation_map_vjp(&x[0], 3, d)?.0.into_tensor()),
                    |x, g| Ok(vec![correlation_map_vjp(&x[0], 3, d)?.1(g)?]),
                    CheckSettings {
                        seed: s.seed + d as u64,
                        ..s
                    },
                )?);
            }
            Ok(merge_reports(name, s.tolerance, reports))
        }
        GradOp::CorrelationLoss => {
            let hr = uniform(rng, [1, 3, 6, 6], 0.0, 1.0);
            let inputs = named(vec![("sr", uniform(rng, [1, 3, 6, 6], 0.0, 1.0))]);
            gradcheck(
                name,
                &inputs,
                |x| Ok(scalar(correlation_loss_vjp(&x[0], &hr, 3, 1)?.0)),
                |x, g| Ok(vec![correlation_loss_vjp(&x[0], &hr, 3, 1)?.1(g.data()[0])?]),
                s,
            )
        }
        GradOp::FeatureL1 => {
            let hr = uniform(rng, [1, 4, 5, 5], -1.0, 1.0);
            // differences stay at least 0.01 away from the kink
            let sr = hr.zip_map(&uniform(rng, [1, 4, 5, 5], -1.0, 1.0), |h, u| {
                h + u.signum() * (0.01 + u.abs())
            })?;
            let inputs = named(vec![("fea_sr", sr)]);
            gradcheck(
                name,
                &inputs,
                |x| Ok(scalar(feature_l1_vjp(&x[0], &hr)?.0)),
                |x, g| Ok(vec![feature_l1_vjp(&x[0], &hr)?.1(g.data()[0])?]),
                s,
            )
        }
        GradOp::CombinedLoss => {
            let hr = uniform(rng, [1, 3, 6, 6], 0.0, 1.0);
            let fea_hr = uniform(rng, [1, 4, 3, 3], -1.0, 1.0);
            let fea_sr = fea_hr.zip_map(&uniform(rng, [1, 4, 3, 3], 0.01, 1.0), |h, d| h + d)?;
            let inputs = named(vec![("sr", uniform(rng, [1, 3, 6, 6], 0.0, 1.0)), ("fea_sr", fea_sr)]);
            let w = LossWeights {
                lambda_adv: 0.0,
                ..LossWeights::default()
            };
            gradcheck(
                name,
                &inputs,
                |x| {
                    Ok(scalar(
                        combined_loss_vjp(&x[0], &hr, Some((&x[1], &fea_hr)), None, &w, 3, 1)?
                            .0
                            .total,
                    ))
                },
                |x, g| {
                    let r = combined_loss_vjp(&x[0], &hr, Some((&x[1], &fea_hr)), None, &w, 3, 1)?.1(g.data()[0])?;
                    Ok(vec![r.sr, r.fea_sr.expect("perceptual pair supplied")])
                },
                s,
            )
        }
        GradOp::RfaSmall => rfa_case(rng, RfaMode::Small, s),
        GradOp::RfaLarge => rfa_case(rng, RfaMode::Large, s),
        GradOp::RfaConv => rfa_case(rng, RfaMode::Conv, s),
        GradOp::SimilarityScore => {
            let inputs = named(vec![
                ("f_ref", uniform(rng, [1, 4, 6, 6], -1.0, 1.0)),
                ("f_lr", uniform(rng, [1, 4, 6, 6], -1.0, 1.0)),
                ("g1.weight", uniform(rng, [4, 4, 1, 1], -0.8, 0.8)),
                ("g1.bias", uniform(rng, [1, 4, 1, 1], -0.2, 0.2)),
                ("g2.weight", uniform(rng, [4, 4, 1, 1], -0.8, 0.8)),
                ("g2.bias", uniform(rng, [1, 4, 1, 1], -0.2, 0.2)),
            ]);
            let params = |x: &[Tensor<f64>]| -> Result<CofaParams<f64>> {
                Ok(CofaParams {
                    g1: conv_from(&x[2], &x[3])?,
                    g2: conv_from(&x[4], &x[5])?,
                })
            };
            gradcheck(
                name,
                &inputs,
                |x| Ok(similarity_score_vjp(&x[0], &x[1], &params(x)?)?.0),
                |x, g| {
                    let r = similarity_score_vjp(&x[0], &x[1], &params(x)?)?.1(g)?;
                    Ok(vec![r.f_ref, r.f_lr, r.g1.weight, r.g1.bias, r.g2.weight, r.g2.bias])
                },
                s,
            )
        }
        GradOp::CofaAggregate => {
            let mut items = Vec::new();
            for _ in 0..3 {
                items.push(("features", uniform(rng, [1, 4, 6, 6], -1.0, 1.0)));
            }
            for _ in 0..3 {
                items.push(("scores", uniform(rng, [1, 1, 6, 6], 0.05, 0.95)));
            }
            let inputs = named(items);
            gradcheck(
                name,
                &inputs,
                |x| cofa_aggregate_vjp(&x[..3], &x[3..]).map(|r| r.0),
                |x, g| {
                    let r = cofa_aggregate_vjp(&x[..3], &x[3..])?.1(g)?;
                    Ok(r.features.into_iter().chain(r.scores).collect())
                },
                s,
            )
        }
        GradOp::AggregateAverage | GradOp::AggregateMaxPool => {
            let kind = if op == GradOp::AggregateAverage {
                BaselineKind::Average
            } else {
                BaselineKind::MaxPool
            };
            let inputs = named(
                (0..3)
                    .map(|_| ("features", uniform(rng, [1, 4, 6, 6], -1.0, 1.0)))
                    .collect(),
            );
            gradcheck(
                name,
                &inputs,
                |x| aggregate_baseline_vjp(x, kind).map(|r| r.0),
                |x, g| aggregate_baseline_vjp(x, kind)?.1(g),
                s,
            )
        }
        GradOp::ExtractLr => stage_case(rng, Stage::Lr, s),
        GradOp::ExtractRef => stage_case(rng, Stage::Ref, s),
        GradOp::Reconstruct => stage_case(rng, Stage::Rec, s),
        GradOp::EndToEnd => end_to_end_case(rng, s),
    }
}

fn merge_reports(op: &str, tolerance: f64, reports: Vec<GradcheckReport>) -> GradcheckReport {
    let mut inputs: Vec<InputError> = Vec::new();
    for r in reports {
        for i in r.inputs {
            match inputs.iter_mut().find(|e| e.name == i.name) {
                Some(e) => {
                    e.coords += i.coords;
                    e.max_abs_err = e.max_abs_err.max(i.max_abs_err);
                    e.rel_err = e.rel_err.max(i.rel_err);
                }
                None => inputs.push(i),
            }
        }
    }
    GradcheckReport {
        op: op.to_string(),
        tolerance,
        inputs,
    }
}

/// The conv2d check with its analytic vjp scaled by `factor`; used to
/// confirm the harness notices a wrong gradient.
pub fn corrupted_conv2d_check(factor: f64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = named(vec![
        ("x", uniform(&mut rng, [1, 3, 6, 6], -1.0, 1.0)),
        ("weight", uniform(&mut rng, [4, 3, 3, 3], -0.5, 0.5)),
        ("bias", uniform(&mut rng, [1, 4, 1, 1], -0.5, 0.5)),
    ]);
    gradcheck(
        "conv2d_corrupted",
        &inputs,
        |x| conv2d_vjp(&x[0], &conv_from(&x[1], &x[2])?).map(|r| r.0),
        |x, g| {
            let r = conv2d_vjp(&x[0], &conv_from(&x[1], &x[2])?)?.1(g)?;
            Ok(vec![r.x.scale(factor), r.weight.scale(factor), r.bias.scale(factor)])
        },
        CheckSettings::default(),
    )
}
