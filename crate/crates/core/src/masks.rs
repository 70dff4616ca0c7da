//! Level 2: heatmaps, part embeddings and the positional-encoding start tensor
//! become `K + 1` softmax masks through spatially-adaptive normalization blocks.

use std::collections::HashMap;

use tch::{nn, nn::ModuleT, Kind, Tensor};

use crate::config::{Activation, Interpolation, TrainConfig};
use crate::error::{Error, Result};
use crate::fields::{crop_margin, gaussian_heatmaps, upsample_and_crop, MarginGrid, PositionalEncoder};
use crate::image::{run_adain_stack, AdainConvBlock};
use crate::latent::PartLayout;
use crate::nn_util::{activate, conv1x1, conv3x3, plain_batch_norm};

/// Per-pixel categorical masks; channel 0 is the background.
#[derive(Debug)]
pub struct MaskStack {
    /// Interior masks, `[B, K + 1, H, W]`.
    pub probs: Tensor,
    /// Masks including the margin, `[B, K + 1, H + 2m, W + 2m]`.
    pub full: Tensor,
    pub margin: usize,
}

impl MaskStack {
    /// Channel softmax of margin-padded logits. The softmax is per pixel, so
    /// cropping before or after it gives the same interior masks.
    pub fn from_logits(logits: &Tensor, margin: usize) -> Self {
        let full = logits.softmax(1, logits.kind());
        let probs = crop_margin(&full, margin);
        Self { probs, full, margin }
    }

    pub fn num_parts(&self) -> i64 {
        self.probs.size()[1] - 1
    }

    /// `M_bg`, `[B, H, W]`.
    pub fn background(&self) -> Tensor {
        self.probs.select(1, 0)
    }

    /// `M_1..M_K`, `[B, K, H, W]`.
    pub fn parts(&self) -> Tensor {
        self.probs.narrow(1, 1, self.num_parts())
    }

    /// Hard labels in `0..=K`, `[B, H, W]`.
    pub fn labels(&self) -> Tensor {
        self.probs.argmax(1, false)
    }
}

/// `W_mask(p) = sum_k H_k(p) w_k`: `[B, K, H, W] x [B, K, D] -> [B, D, H, W]`.
pub fn mask_embedding_map(heatmaps: &Tensor, embeddings: &Tensor) -> Result<Tensor> {
    let (hs, es) = (heatmaps.size(), embeddings.size());
    if hs.len() != 4 || es.len() != 3 || hs[0] != es[0] || hs[1] != es[1] {
        return Err(Error::Shape(format!("heatmaps {hs:?} and embeddings {es:?} disagree on batch or K")));
    }
    Ok(Tensor::einsum("bkhw,bkd->bdhw", &[heatmaps, embeddings], None::<i64>))
}

/// Batch normalization (no affine) followed by per-element `gamma`, `beta` predicted from a style map.
#[derive(Debug)]
pub struct SpadeNorm {
    bn: nn::BatchNorm,
    shared: nn::Conv2D,
    gamma: nn::Conv2D,
    beta: nn::Conv2D,
}

impl SpadeNorm {
    pub fn new(vs: nn::Path, channels: usize, style_channels: usize, hidden: usize) -> Self {
        Self {
            bn: plain_batch_norm(&vs / "bn", channels),
            shared: conv3x3(&vs / "shared", style_channels, hidden),
            gamma: conv3x3(&vs / "gamma", hidden, channels),
            beta: conv3x3(&vs / "beta", hidden, channels),
        }
    }

    pub fn forward(&self, xs: &Tensor, style: &Tensor, train: bool) -> Tensor {
        let normalized = self.bn.forward_t(xs, train);
        let hidden = style.apply(&self.shared).relu();
        normalized * hidden.apply(&self.gamma) + hidden.apply(&self.beta)
    }

    pub fn convs_mut(&mut self) -> (&mut nn::Conv2D, &mut nn::Conv2D, &mut nn::Conv2D) {
        (&mut self.shared, &mut self.gamma, &mut self.beta)
    }

    pub fn batch_norm(&self) -> &nn::BatchNorm {
        &self.bn
    }
}

/// Residual block with two modulated conv stages and a modulated 1x1 skip path.
#[derive(Debug)]
pub struct SpadeResBlock {
    pub norm0: SpadeNorm,
    pub conv0: nn::Conv2D,
    pub norm1: SpadeNorm,
    pub conv1: nn::Conv2D,
    pub norm_skip: SpadeNorm,
    pub conv_skip: nn::Conv2D,
    activation: Activation,
}

impl SpadeResBlock {
    pub fn new(
        vs: nn::Path,
        c_in: usize,
        c_out: usize,
        style_channels: usize,
        hidden: usize,
        activation: Activation,
    ) -> Self {
        let c_mid = c_in.min(c_out);
        Self {
            norm0: SpadeNorm::new(&vs / "norm0", c_in, style_channels, hidden),
            conv0: conv3x3(&vs / "conv0", c_in, c_mid),
            norm1: SpadeNorm::new(&vs / "norm1", c_mid, style_channels, hidden),
            conv1: conv3x3(&vs / "conv1", c_mid, c_out),
            norm_skip: SpadeNorm::new(&vs / "norm_skip", c_in, style_channels, hidden),
            conv_skip: conv1x1(&vs / "conv_skip", c_in, c_out, false),
            activation,
        }
    }

    pub fn forward(&self, xs: &Tensor, style: &Tensor, train: bool) -> Result<Tensor> {
        let (xsz, ssz) = (xs.size(), style.size());
        if xsz.len() != 4 || ssz.len() != 4 || xsz[2..] != ssz[2..] || xsz[0] != ssz[0] {
            return Err(Error::Shape(format!("SPADE input {xsz:?} vs style {ssz:?}")));
        }
        let dx = activate(&self.norm0.forward(xs, style, train), self.activation).apply(&self.conv0);
        let dx = activate(&self.norm1.forward(&dx, style, train), self.activation).apply(&self.conv1);
        let skip = self.norm_skip.forward(xs, style, train).apply(&self.conv_skip);
        Ok(skip + dx)
    }
}

/// Runs SPADE blocks over the resolution schedule, upsampling and cropping
/// whenever the resolution doubles. `style_at(res)` supplies the style map
/// on the margin grid of that resolution.
pub fn run_spade_stack(
    start: Tensor,
    blocks: &[SpadeResBlock],
    schedule: &[usize],
    margin: usize,
    interpolation: Interpolation,
    mut style_at: impl FnMut(usize) -> Result<Tensor>,
    train: bool,
) -> Result<Tensor> {
    if blocks.len() != schedule.len() {
        return Err(Error::config("resolution_schedule", "block count does not match the schedule"));
    }
    let mut h = start;
    for (i, block) in blocks.iter().enumerate() {
        if i > 0 && schedule[i] != schedule[i - 1] {
            h = upsample_and_crop(&h, margin, interpolation)?;
        }
        let style = style_at(schedule[i])?;
        h = block.forward(&h, &style, train)?;
    }
    Ok(h)
}

#[derive(Debug)]
enum MaskBackbone {
    Spade { encoder: PositionalEncoder, blocks: Vec<SpadeResBlock> },
    /// Points ablation: learned constant start, per-channel modulation by the mean part embedding.
    Adain { start: Tensor, blocks: Vec<AdainConvBlock> },
}

/// What the mask generator hands to the rest of the pipeline.
#[derive(Debug)]
pub struct MaskOutput {
    pub masks: MaskStack,
    /// Heatmaps on the interior grid at mask resolution, `[B, K, H, W]`.
    pub heatmaps: Option<Tensor>,
    /// Pre-softmax logits including margins.
    pub logits: Tensor,
}

#[derive(Debug)]
pub struct MaskGenerator {
    backbone: MaskBackbone,
    to_logits: nn::Conv2D,
    schedule: Vec<usize>,
    margin: usize,
    interpolation: Interpolation,
    k: usize,
}

impl MaskGenerator {
    pub fn new(vs: nn::Path, cfg: &TrainConfig) -> Result<Self> {
        let widths = &cfg.channel_widths;
        let backbone = if cfg.disable_points {
            let s0 = (cfg.resolution_schedule[0] + 2 * cfg.margin_px) as i64;
            let start = vs.var("start", &[1, cfg.d_emb as i64, s0, s0], nn::Init::Randn { mean: 0., stdev: 1. });
            let blocks = (0..widths.len())
                .map(|i| {
                    let c_in = if i == 0 { cfg.d_emb } else { widths[i - 1] };
                    AdainConvBlock::new(&vs / format!("block{i}"), c_in, widths[i], cfg.d_emb, cfg.activation)
                })
                .collect();
            MaskBackbone::Adain { start, blocks }
        } else {
            let encoder = PositionalEncoder::new(&vs / "encoder", cfg.k * cfg.n_per, cfg.d_emb)?;
            let blocks = (0..widths.len())
                .map(|i| {
                    let c_in = if i == 0 { cfg.d_emb } else { widths[i - 1] };
                    SpadeResBlock::new(
                        &vs / format!("block{i}"),
                        c_in,
                        widths[i],
                        cfg.d_emb,
                        cfg.spade_hidden,
                        cfg.activation,
                    )
                })
                .collect();
            MaskBackbone::Spade { encoder, blocks }
        };
        let to_logits = conv1x1(&vs / "to_logits", *widths.last().expect("validated"), cfg.k + 1, true);
        Ok(Self {
            backbone,
            to_logits,
            schedule: cfg.resolution_schedule.clone(),
            margin: cfg.margin_px,
            interpolation: cfg.interpolation,
            k: cfg.k,
        })
    }

    pub fn spade_blocks_mut(&mut self) -> Option<&mut Vec<SpadeResBlock>> {
        match &mut self.backbone {
            MaskBackbone::Spade { blocks, .. } => Some(blocks),
            MaskBackbone::Adain { .. } => None,
        }
    }

    pub fn to_logits(&self) -> &nn::Conv2D {
        &self.to_logits
    }

    pub fn generate(&self, layout: &PartLayout, train: bool) -> Result<MaskOutput> {
        let embeddings = &layout.appearance.embeddings;
        if embeddings.size()[1] != self.k as i64 {
            return Err(Error::Shape(format!("embeddings carry {} parts, expected {}", embeddings.size()[1], self.k)));
        }
        let (kind, device) = (embeddings.kind(), embeddings.device());
        let b = embeddings.size()[0];
        let last_res = *self.schedule.last().expect("validated");
        let (h, heatmaps) = match &self.backbone {
            MaskBackbone::Spade { encoder, blocks } => {
                let geom = layout.geometry()?;
                let grid0 = MarginGrid::square(self.schedule[0], self.margin)?;
                let points = geom.points.view([b, -1, 2]);
                let start = encoder.forward(&grid0.coords(kind, device), &points)?;
                let mut heatmap_cache: HashMap<usize, Tensor> = HashMap::new();
                let mut style_cache: HashMap<usize, Tensor> = HashMap::new();
                let h = run_spade_stack(
                    start,
                    blocks,
                    &self.schedule,
                    self.margin,
                    self.interpolation,
                    |res| {
                        if let Some(s) = style_cache.get(&res) {
                            return Ok(s.shallow_clone());
                        }
                        let grid = MarginGrid::square(res, self.margin)?;
                        let hm = gaussian_heatmaps(&grid.coords(kind, device), &geom.centers, &geom.scales)?;
                        let style = mask_embedding_map(&hm.values, embeddings)?;
                        heatmap_cache.insert(res, hm.values);
                        style_cache.insert(res, style.shallow_clone());
                        Ok(style)
                    },
                    train,
                )?;
                let hm = heatmap_cache.remove(&last_res).map(|t| crop_margin(&t, self.margin));
                (h, hm)
            }
            MaskBackbone::Adain { start, blocks } => {
                let style = embeddings.mean_dim(1, false, kind);
                let start = start.expand([b, -1, -1, -1], true);
                let h =
                    run_adain_stack(start, blocks, &self.schedule, self.margin, self.interpolation, &style, train)?;
                (h, None)
            }
        };
        let logits = h.apply(&self.to_logits);
        Ok(MaskOutput { masks: MaskStack::from_logits(&logits, self.margin), heatmaps, logits })
    }
}

/// Per-pixel channel sums of a mask tensor, `[B, H, W]`.
pub fn channel_sums(probs: &Tensor) -> Tensor {
    probs.sum_dim_intlist(1, false, Kind::Double)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn_util::{fill_tensor, init_var_store, set_identity_conv, to_vec_f64};
    use tch::Device;

    const D: (Kind, Device) = (Kind::Double, Device::Cpu);

    #[test]
    fn embedding_map_single_term_and_zero() {
        let hm = Tensor::full([1, 1, 2, 2], 0.25, D);
        let w = Tensor::from_slice(&[2.0f64, -4.0]).view([1, 1, 2]);
        let out = mask_embedding_map(&hm, &w).unwrap();
        assert_eq!(to_vec_f64(&out.select(3, 1).select(2, 0)), vec![0.5, -1.0]);
        let zero = mask_embedding_map(&hm, &w.zeros_like()).unwrap();
        assert_eq!(zero.abs().sum(Kind::Double).double_value(&[]), 0.0);
        assert!(mask_embedding_map(&Tensor::zeros([1, 2, 2, 2], D), &w).is_err());
    }

    #[test]
    fn embedding_map_matches_loop() {
        let (b, k, h, w, d) = (2usize, 3usize, 4usize, 5usize, 6usize);
        let hm = Tensor::rand([b as i64, k as i64, h as i64, w as i64], D);
        let emb = Tensor::randn([b as i64, k as i64, d as i64], D);
        let out = to_vec_f64(&mask_embedding_map(&hm, &emb).unwrap());
        let (hv, ev) = (to_vec_f64(&hm), to_vec_f64(&emb));
        for bi in 0..b {
            for di in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for ki in 0..k {
                            acc += hv[((bi * k + ki) * h + y) * w + x] * ev[(bi * k + ki) * d + di];
                        }
                        let got = out[((bi * d + di) * h + y) * w + x];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_saturation_and_simplex() {
        let logits = Tensor::randn([2, 4, 6, 6], D);
        let boosted = &logits + Tensor::from_slice(&[0.0f64, 0.0, 1e3, 0.0]).view([1, 4, 1, 1]);
        let m = MaskStack::from_logits(&boosted, 1);
        assert_eq!(m.probs.size(), vec![2, 4, 4, 4]);
        assert!(m.probs.select(1, 2).min().double_value(&[]) > 1.0 - 1e-9);
        let plain = MaskStack::from_logits(&logits, 1);
        let sums = channel_sums(&plain.probs);
        assert!((sums - 1.0).abs().max().double_value(&[]) < 1e-12);
    }

    fn identity_block(c: usize, style_ch: usize) -> (nn::VarStore, SpadeResBlock) {
        let vs = nn::VarStore::new(Device::Cpu);
        let mut block = SpadeResBlock::new(vs.root() / "b", c, c, style_ch, 4, Activation::LeakyRelu);
        init_var_store(&vs, 0);
        for norm in [&mut block.norm0, &mut block.norm1, &mut block.norm_skip] {
            let (shared, gamma, beta) = norm.convs_mut();
            fill_tensor(&mut shared.ws, 0.0);
            fill_tensor(&mut gamma.ws, 0.0);
            fill_tensor(gamma.bs.as_mut().unwrap(), 1.0);
            fill_tensor(&mut beta.ws, 0.0);
            fill_tensor(beta.bs.as_mut().unwrap(), 0.0);
        }
        set_identity_conv(&mut block.conv0);
        set_identity_conv(&mut block.conv1);
        tch::no_grad(|| {
            let w = Tensor::eye(c as i64, (Kind::Float, Device::Cpu)).view([c as i64, c as i64, 1, 1]);
            block.conv_skip.ws.copy_(&w);
        });
        (vs, block)
    }

    #[test]
    fn identity_modulation_wiring() {
        let (mut vs, block) = identity_block(3, 2);
        vs.double();
        let x = Tensor::randn([2, 3, 5, 5], D);
        let style = Tensor::randn([2, 2, 5, 5], D);
        let out = block.forward(&x, &style, false).unwrap();
        // Inference-mode normalization with fresh statistics divides by sqrt(1 + eps).
        let s = (1.0f64 + 1e-5).sqrt();
        let lk = |t: &Tensor| t.maximum(&(t * 0.2));
        let expected = lk(&(lk(&(&x / s)) / s)) + &x / s;
        assert!(out.allclose(&expected, 1e-10, 1e-10, false));
    }

    #[test]
    fn zero_input_is_driven_by_beta() {
        let (mut vs, mut block) = identity_block(2, 1);
        // beta = bias 0.5 everywhere on every path.
        for norm in [&mut block.norm0, &mut block.norm1, &mut block.norm_skip] {
            let (_, _, beta) = norm.convs_mut();
            fill_tensor(beta.bs.as_mut().unwrap(), 0.5);
        }
        vs.double();
        let x = Tensor::zeros([1, 2, 4, 4], D);
        let style = Tensor::randn([1, 1, 4, 4], D);
        let out = block.forward(&x, &style, false).unwrap();
        // Main path: leaky(0.5) -> identity conv -> norm (0.5/s) + 0.5 -> leaky -> identity conv. Skip: 0.5.
        let s = (1.0f64 + 1e-5).sqrt();
        let expected = (0.5 / s + 0.5) + 0.5;
        // Identity 3x3 convs keep interior and border values alike because the kernel is a delta.
        assert!((out - expected).abs().max().double_value(&[]) < 1e-12);
    }

    #[test]
    fn shape_contract_and_mismatch() {
        let vs = nn::VarStore::new(Device::Cpu);
        let block = SpadeResBlock::new(vs.root(), 4, 6, 3, 5, Activation::LeakyRelu);
        init_var_store(&vs, 2);
        let x = Tensor::randn([2, 4, 7, 7], (Kind::Float, Device::Cpu));
        let s = Tensor::randn([2, 3, 7, 7], (Kind::Float, Device::Cpu));
        assert_eq!(block.forward(&x, &s, true).unwrap().size(), vec![2, 6, 7, 7]);
        let bad = Tensor::randn([2, 3, 6, 7], (Kind::Float, Device::Cpu));
        assert!(matches!(block.forward(&x, &bad, true), Err(Error::Shape(_))));
    }
}
