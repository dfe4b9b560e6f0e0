use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::HimeConfig;
use crate::alignment::{
    aggregate_baseline_vjp, block_match_flow, cofa_aggregate_vjp, rfa_align_vjp, similarity_score_vjp, AggregationMode,
    BaselineKind, BlockMatchParams, CofaParams, RfaMode, RfaParams,
};
use crate::diffops::{
    bicubic_resize, bicubic_resize_vjp, conv2d_vjp, fan_in_uniform, icnr_init, pixel_shuffle_vjp, residual_block_vjp,
    space_to_depth_vjp, Conv2dGrads, Conv2dParams, ResidualGrads, Scale,
};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Grads, ParamKey, ParamStore, Scalar, Tensor, VjpFn};

#[derive(Clone, Copy, Debug)]
struct ConvKeys {
    weight: ParamKey,
    bias: ParamKey,
}

#[derive(Clone, Copy, Debug)]
struct BlockKeys {
    conv1: ConvKeys,
    conv2: ConvKeys,
}

#[derive(Clone, Debug)]
struct Layout {
    lr_conv0: ConvKeys,
    lr_blocks: Vec<BlockKeys>,
    ref_mono: ConvKeys,
    ref_conv0: ConvKeys,
    ref_blocks: Vec<BlockKeys>,
    rfa_offset1: ConvKeys,
    rfa_offset2: ConvKeys,
    rfa_dconv: ConvKeys,
    cofa_g1: ConvKeys,
    cofa_g2: ConvKeys,
    rec_blocks: Vec<BlockKeys>,
    rec_up: Vec<ConvKeys>,
    rec_out: ConvKeys,
}

/// Input cotangent plus parameter gradients of one network stage.
#[derive(Clone, Debug)]
pub struct StageGrads<T> {
    pub input: Tensor<T>,
    pub params: Grads<T>,
}

/// Gradients of a full forward pass.
#[derive(Clone, Debug)]
pub struct ForwardGrads<T> {
    pub params: Grads<T>,
    pub lr: Tensor<T>,
    pub refs: Vec<Tensor<T>>,
}

/// The full network: LR and reference extractors, alignment, aggregation
/// and the upsampling reconstructor with a bicubic skip.
#[derive(Clone, Debug)]
pub struct HimeModel<T> {
    config: HimeConfig,
    params: ParamStore<T>,
    layout: Layout,
}

struct Builder<T> {
    store: ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<T> {
    fn register(&mut self, id: &str, weight: Tensor<T>) -> Result<ConvKeys> {
        let c_out = weight.shape()[0];
        Ok(ConvKeys {
            weight: self.store.register(format!("{id}.weight"), weight)?,
            bias: self
                .store
                .register(format!("{id}.bias"), Tensor::zeros([1, c_out, 1, 1]))?,
        })
    }

    fn conv(&mut self, id: &str, c_out: usize, c_in: usize, k: usize) -> Result<ConvKeys> {
        let w = fan_in_uniform([c_out, c_in, k, k], &mut self.rng);
        self.register(id, w)
    }

    fn icnr(&mut self, id: &str, c_out: usize, c_in: usize, k: usize, r: usize) -> Result<ConvKeys> {
        let rng = &mut self.rng;
        let w = icnr_init([c_out, c_in, k, k], r, |shape| fan_in_uniform(shape, rng))?;
        self.register(id, w)
    }

    fn blocks(&mut self, prefix: &str, count: usize, c: usize) -> Result<Vec<BlockKeys>> {
        (0..count)
            .map(|i| {
                Ok(BlockKeys {
                    conv1: self.conv(&format!("{prefix}.block{i}.conv1"), c, c, 3)?,
                    conv2: self.conv(&format!("{prefix}.block{i}.conv2"), c, c, 3)?,
                })
            })
            .collect()
    }
}

fn put_conv<T: Scalar>(grads: &mut Grads<T>, keys: ConvKeys, g: Conv2dGrads<T>) -> Result<()> {
    grads.add(keys.weight, g.weight)?;
    grads.add(keys.bias, g.bias)
}

fn put_block<T: Scalar>(grads: &mut Grads<T>, keys: BlockKeys, g: ResidualGrads<T>) -> Result<Tensor<T>> {
    put_conv(grads, keys.conv1, g.conv1)?;
    put_conv(grads, keys.conv2, g.conv2)?;
    Ok(g.x)
}

type BlockBack<T> = (BlockKeys, VjpFn<'static, T, ResidualGrads<T>>);

fn back_blocks<T: Scalar>(mut g: Tensor<T>, backs: &[BlockBack<T>], grads: &mut Grads<T>) -> Result<Tensor<T>> {
    for (keys, back) in backs.iter().rev() {
        g = put_block(grads, *keys, back(&g)?)?;
    }
    Ok(g)
}

impl<T: Scalar> HimeModel<T> {
    /// Deterministic initialisation from `config.seed`: ICNR for the
    /// upsampling convs, fan-in uniform for every other weight, zero biases.
    pub fn new(config: HimeConfig) -> Result<Self> {
        config.validate()?;
        let c = config.c_f;
        let k = config.deform_kernel;
        let mut b = Builder {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let lr_conv0 = b.conv("lr_extract.conv0", c, 3, 3)?;
        let lr_blocks = b.blocks("lr_extract", config.k_l, c)?;
        let ref_mono = b.conv("ref_extract.mono", 1, 3, 1)?;
        let ref_conv0 = b.conv("ref_extract.conv0", c, config.scale * config.scale, 3)?;
        let ref_blocks = b.blocks("ref_extract", config.k_h, c)?;
        let rfa_offset1 = b.conv("rfa.offset1", c, 2 * c, 3)?;
        // zero offsets at init: the aligner starts as a plain conv
        let rfa_offset2 = b.register("rfa.offset2", Tensor::zeros([2 * k * k, c, 3, 3]))?;
        let rfa_dconv = b.conv("rfa.dconv", c, c, k)?;
        let cofa_g1 = b.conv("cofa.g1", c, c, 1)?;
        let cofa_g2 = b.conv("cofa.g2", c, c, 1)?;
        let rec_blocks = b.blocks("reconstruct", config.k_r, c)?;
        let rec_up = (0..config.up_stages())
            .map(|i| b.icnr(&format!("reconstruct.up{i}"), 4 * c, c, 3, 2))
            .collect::<Result<_>>()?;
        let rec_out = b.conv("reconstruct.out", 3, c, 3)?;
        Ok(Self {
            config,
            params: b.store,
            layout: Layout {
                lr_conv0,
                lr_blocks,
                ref_mono,
                ref_conv0,
                ref_blocks,
                rfa_offset1,
                rfa_offset2,
                rfa_dconv,
                cofa_g1,
                cofa_g2,
                rec_blocks,
                rec_up,
                rec_out,
            },
        })
    }

    pub fn config(&self) -> &HimeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// The same network in another precision.
    pub fn cast<U: Scalar>(&self) -> HimeModel<U> {
        HimeModel {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Zeroes every weight and bias of the reconstructor, leaving the
    /// bicubic skip as the whole output.
    pub fn zero_reconstructor(&mut self) {
        let prefix = "reconstruct.";
        let keys: Vec<ParamKey> = self
            .params
            .keys()
            .filter(|&k| self.params.get(k).id.starts_with(prefix))
            .collect();
        for k in keys {
            let p = self.params.get_mut(k);
            p.value = p.value.zeros_like();
        }
    }

    fn conv(&self, keys: ConvKeys) -> Conv2dParams<T> {
        let weight = self.params.value(keys.weight).clone();
        let padding = weight.shape()[2].saturating_sub(1) / 2;
        Conv2dParams {
            weight,
            bias: self.params.value(keys.bias).clone(),
            stride: 1,
            padding,
        }
    }

    fn rfa_params(&self) -> RfaParams<T> {
        RfaParams {
            offset1: self.conv(self.layout.rfa_offset1),
            offset2: self.conv(self.layout.rfa_offset2),
            dconv: self.conv(self.layout.rfa_dconv),
            mode: self.config.rfa_mode,
        }
    }

    fn cofa_params(&self) -> CofaParams<T> {
        CofaParams {
            g1: self.conv(self.layout.cofa_g1),
            g2: self.conv(self.layout.cofa_g2),
        }
    }

    fn run_blocks(&self, mut x: Tensor<T>, blocks: &[BlockKeys]) -> Result<(Tensor<T>, Vec<BlockBack<T>>)> {
        let mut backs = Vec::with_capacity(blocks.len());
        for &keys in blocks {
            let (y, back) = residual_block_vjp(&x, &self.conv(keys.conv1), &self.conv(keys.conv2))?;
            backs.push((keys, back));
            x = y;
        }
        Ok((x, backs))
    }

    pub fn extract_lr(&self, lr: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.extract_lr_vjp(lr)?.0)
    }

    /// `F^L`: conv to `c_f` then `k_l` residual blocks, at LR resolution.
    pub fn extract_lr_vjp(&self, lr: &Tensor<T>) -> Result<(Tensor<T>, VjpFn<'static, T, StageGrads<T>>)> {
        if lr.shape()[1] != 3 {
            return Err(shape_err!("LR image must have 3 channels, got {:?}", lr.shape()));
        }
        let keys0 = self.layout.lr_conv0;
        let (h, back0) = conv2d_vjp(lr, &self.conv(keys0))?;
        let (out, backs) = self.run_blocks(h, &self.layout.lr_blocks)?;
        let len = self.params.len();
        let vjp = Box::new(move |g: &Tensor<T>| {
            let mut grads = Grads::with_len(len);
            let g = back_blocks(g.clone(), &backs, &mut grads)?;
            let c0 = back0(&g)?;
            let input = c0.x.clone();
            put_conv(&mut grads, keys0, c0)?;
            Ok(StageGrads { input, params: grads })
        });
        Ok((out, vjp))
    }

    pub fn extract_ref(&self, reference: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.extract_ref_vjp(reference)?.0)
    }

    /// Reference features on the LR grid: learned mono conversion,
    /// space-to-depth by the scale factor, conv to `c_f`, `k_h` blocks.
    pub fn extract_ref_vjp(&self, reference: &Tensor<T>) -> Result<(Tensor<T>, VjpFn<'static, T, StageGrads<T>>)> {
        let [_, c, h, w] = reference.shape();
        let s = self.config.scale;
        if c != 3 {
            return Err(shape_err!("reference image must have 3 channels, got {c}"));
        }
        if h % s != 0 || w % s != 0 {
            return Err(shape_err!("reference {h}x{w} is not divisible by scale {s}"));
        }
        let (mono_keys, keys0) = (self.layout.ref_mono, self.layout.ref_conv0);
        let (mono, back_mono) = conv2d_vjp(reference, &self.conv(mono_keys))?;
        let (packed, back_s2d) = space_to_depth_vjp(&mono, s)?;
        let (h0, back0) = conv2d_vjp(&packed, &self.conv(keys0))?;
        let (out, backs) = self.run_blocks(h0, &self.layout.ref_blocks)?;
        let len = self.params.len();
        let vjp = Box::new(move |g: &Tensor<T>| {
            let mut grads = Grads::with_len(len);
            let g = back_blocks(g.clone(), &backs, &mut grads)?;
            let c0 = back0(&g)?;
            let g = back_s2d(&c0.x)?;
            put_conv(&mut grads, keys0, c0)?;
            let cm = back_mono(&g)?;
            let input = cm.x.clone();
            put_conv(&mut grads, mono_keys, cm)?;
            Ok(StageGrads { input, params: grads })
        });
        Ok((out, vjp))
    }

    pub fn reconstruct(&self, f_f: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.reconstruct_vjp(f_f)?.0)
    }

    /// Residual image at HR size: `k_r` blocks, one conv + pixel shuffle per
    /// ×2 stage, then a conv to RGB.
    pub fn reconstruct_vjp(&self, f_f: &Tensor<T>) -> Result<(Tensor<T>, VjpFn<'static, T, StageGrads<T>>)> {
        if f_f.shape()[1] != self.config.c_f {
            return Err(shape_err!(
                "fused features have {} channels, expected {}",
                f_f.shape()[1],
                self.config.c_f
            ));
        }
        let (mut x, backs) = self.run_blocks(f_f.clone(), &self.layout.rec_blocks)?;
        let mut ups = Vec::with_capacity(self.layout.rec_up.len());
        for &keys in &self.layout.rec_up {
            let (y, back_conv) = conv2d_vjp(&x, &self.conv(keys))?;
            let (z, back_shuffle) = pixel_shuffle_vjp(&y, 2)?;
            ups.push((keys, back_conv, back_shuffle));
            x = z;
        }
        let out_keys = self.layout.rec_out;
        let (out, back_out) = conv2d_vjp(&x, &self.conv(out_keys))?;
        let len = self.params.len();
        let vjp = Box::new(move |g: &Tensor<T>| {
            let mut grads = Grads::with_len(len);
            let co = back_out(g)?;
            let mut g = co.x.clone();
            put_conv(&mut grads, out_keys, co)?;
            for (keys, back_conv, back_shuffle) in ups.iter().rev() {
                let cg = back_conv(&back_shuffle(&g)?)?;
                g = cg.x.clone();
                put_conv(&mut grads, *keys, cg)?;
            }
            let input = back_blocks(g, &backs, &mut grads)?;
            Ok(StageGrads { input, params: grads })
        });
        Ok((out, vjp))
    }

    fn check_flows<'a>(
        &self,
        refs: &[Tensor<T>],
        flows: Option<&'a [Tensor<T>]>,
    ) -> Result<Vec<Option<&'a Tensor<T>>>> {
        let flows = flows.unwrap_or(&[]);
        let large = self.config.rfa_mode == RfaMode::Large;
        if large && flows.len() != refs.len() {
            return Err(Error::Configuration(format!(
                "large RFA needs one flow per reference: {} flows for {} references",
                flows.len(),
                refs.len()
            )));
        }
        if !large && !flows.is_empty() {
            return Err(Error::Configuration(format!(
                "{:?} RFA does not take flow fields",
                self.config.rfa_mode
            )));
        }
        Ok((0..refs.len()).map(|i| flows.get(i)).collect())
    }

    /// Super-resolves `lr` using any number of references.
    pub fn forward(&self, lr: &Tensor<T>, refs: &[Tensor<T>], flows: Option<&[Tensor<T>]>) -> Result<Tensor<T>> {
        Ok(self.forward_vjp(lr, refs, flows)?.0)
    }

    /// `I^SR = bicubic(I^L) + reconstruct(F_a + F^L)`; with no references
    /// the fused features are `F^L` alone.
    pub fn forward_vjp(
        &self,
        lr: &Tensor<T>,
        refs: &[Tensor<T>],
        flows: Option<&[Tensor<T>]>,
    ) -> Result<(Tensor<T>, VjpFn<'static, T, ForwardGrads<T>>)> {
        let flows = self.check_flows(refs, flows)?;
        let (f_lr, back_lr) = self.extract_lr_vjp(lr)?;

        let rfa = self.rfa_params();
        let mut ref_backs = Vec::with_capacity(refs.len());
        let mut rfa_backs = Vec::with_capacity(refs.len());
        let mut aligned = Vec::with_capacity(refs.len());
        for (r, flow) in refs.iter().zip(&flows) {
            let (f_ref, back_ref) = self.extract_ref_vjp(r)?;
            let (a, back_rfa) = rfa_align_vjp(&f_ref, &f_lr, *flow, &rfa)?;
            ref_backs.push(back_ref);
            rfa_backs.push(back_rfa);
            aligned.push(a);
        }

        enum AggBack<T> {
            None,
            Cofa {
                sims: Vec<VjpFn<'static, T, crate::alignment::SimilarityGrads<T>>>,
                agg: VjpFn<'static, T, crate::alignment::AggregateGrads<T>>,
            },
            Baseline(VjpFn<'static, T, Vec<Tensor<T>>>),
        }

        let (fused, agg_back) = if aligned.is_empty() {
            (f_lr.clone(), AggBack::None)
        } else {
            let (f_a, back) = match self.config.aggregation {
                AggregationMode::Cofa => {
                    let cofa = self.cofa_params();
                    let mut scores = Vec::with_capacity(aligned.len());
                    let mut sims = Vec::with_capacity(aligned.len());
                    for a in &aligned {
                        let (mu, back) = similarity_score_vjp(a, &f_lr, &cofa)?;
                        scores.push(mu);
                        sims.push(back);
                    }
                    let (f_a, agg) = cofa_aggregate_vjp(&aligned, &scores)?;
                    (f_a, AggBack::Cofa { sims, agg })
                }
                AggregationMode::Average | AggregationMode::MaxPool => {
                    let kind = if self.config.aggregation == AggregationMode::Average {
                        BaselineKind::Average
                    } else {
                        BaselineKind::MaxPool
                    };
                    let (f_a, back) = aggregate_baseline_vjp(&aligned, kind)?;
                    (f_a, AggBack::Baseline(back))
                }
            };
            (f_a.zip_map(&f_lr, |a, b| a + b)?, back)
        };

        let (residual, back_rec) = self.reconstruct_vjp(&fused)?;
        let (up, back_up) = bicubic_resize_vjp(lr, Scale::up(self.config.scale as u32)?)?;
        let sr = up.zip_map(&residual, |a, b| a + b)?;

        let layout = self.layout.clone();
        let len = self.params.len();
        let vjp = Box::new(move |g: &Tensor<T>| {
            let mut params = Grads::with_len(len);
            let mut d_lr_img = back_up(g)?;
            let rec = back_rec(g)?;
            params.merge(rec.params)?;
            let d_fused = rec.input;
            let mut d_flr = d_fused.clone();

            let d_aligned: Vec<Tensor<T>> = match &agg_back {
                AggBack::None => Vec::new(),
                AggBack::Cofa { sims, agg } => {
                    let ag = agg(&d_fused)?;
                    let mut out = Vec::with_capacity(sims.len());
                    for ((back, mut da), dmu) in sims.iter().zip(ag.features).zip(ag.scores) {
                        let sg = back(&dmu)?;
                        da.add_assign(&sg.f_ref)?;
                        d_flr.add_assign(&sg.f_lr)?;
                        put_conv(&mut params, layout.cofa_g1, sg.g1)?;
                        put_conv(&mut params, layout.cofa_g2, sg.g2)?;
                        out.push(da);
                    }
                    out
                }
                AggBack::Baseline(back) => back(&d_fused)?,
            };

            let mut d_refs = Vec::with_capacity(d_aligned.len());
            for ((da, back_rfa), back_ref) in d_aligned.iter().zip(&rfa_backs).zip(&ref_backs) {
                let rg = back_rfa(da)?;
                d_flr.add_assign(&rg.f_lr)?;
                put_conv(&mut params, layout.rfa_offset1, rg.offset1)?;
                put_conv(&mut params, layout.rfa_offset2, rg.offset2)?;
                put_conv(&mut params, layout.rfa_dconv, rg.dconv)?;
                let sg = back_ref(&rg.f_ref)?;
                params.merge(sg.params)?;
                d_refs.push(sg.input);
            }

            let lg = back_lr(&d_flr)?;
            params.merge(lg.params)?;
            d_lr_img.add_assign(&lg.input)?;
            Ok(ForwardGrads {
                params,
                lr: d_lr_img,
                refs: d_refs,
            })
        });
        Ok((sr, vjp))
    }
}

/// Flow from the LR grid into each reference, estimated by block matching
/// against the reference downscaled to LR size.
pub fn estimate_flows<T: Scalar>(
    lr: &Tensor<T>,
    refs: &[Tensor<T>],
    scale: usize,
    params: BlockMatchParams,
) -> Result<Vec<Tensor<T>>> {
    let down = Scale::down(scale as u32)?;
    refs.iter()
        .map(|r| block_match_flow(&bicubic_resize(r, down)?, lr, params))
        .collect()
}
