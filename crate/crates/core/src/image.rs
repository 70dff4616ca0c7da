//! Level 3: foreground from masks, background from an independent latent at a
//! random position, and the blend that produces the image.

use std::collections::BTreeMap;

use tch::{nn, nn::Module, nn::ModuleT, Tensor};

use crate::config::{Activation, Interpolation, TrainConfig};
use crate::error::{Error, Result};
use crate::fields::{crop_margin, downsample_with_margin, upsample_and_crop, MarginGrid, PositionalEncoder};
use crate::latent::{LatentBatch, PartLayout, PointGenerator};
use crate::masks::{mask_embedding_map, run_spade_stack, MaskGenerator, MaskStack, SpadeResBlock};
use crate::nn_util::{activate, conv3x3, plain_batch_norm, Mlp3};

/// `W_fg(p) = sum_k M_k(p) w_k` over part channels: `[B, K, H, W] x [B, K, D] -> [B, D, H, W]`.
pub fn foreground_embedding_map(part_masks: &Tensor, embeddings: &Tensor) -> Result<Tensor> {
    mask_embedding_map(part_masks, embeddings)
}

/// Normalization, per-channel affine predicted from a style vector, activation, 3x3 conv.
#[derive(Debug)]
pub struct AdainConvBlock {
    bn: nn::BatchNorm,
    pub gamma: nn::Linear,
    pub beta: nn::Linear,
    pub conv: nn::Conv2D,
    activation: Activation,
}

impl AdainConvBlock {
    pub fn new(vs: nn::Path, c_in: usize, c_out: usize, style_dim: usize, activation: Activation) -> Self {
        Self {
            bn: plain_batch_norm(&vs / "bn", c_in),
            gamma: nn::linear(&vs / "gamma", style_dim as i64, c_in as i64, Default::default()),
            beta: nn::linear(&vs / "beta", style_dim as i64, c_in as i64, Default::default()),
            conv: conv3x3(&vs / "conv", c_in, c_out),
            activation,
        }
    }

    /// Output of the modulation, before activation and convolution.
    pub fn modulate(&self, xs: &Tensor, style: &Tensor, train: bool) -> Result<Tensor> {
        let (xsz, ssz) = (xs.size(), style.size());
        let style_dim = self.gamma.ws.size()[1];
        if xsz.len() != 4 || ssz.len() != 2 || ssz[0] != xsz[0] || ssz[1] != style_dim {
            return Err(Error::Shape(format!("AdaIN input {xsz:?} vs style {ssz:?} (style dim {style_dim})")));
        }
        let gamma = style.apply(&self.gamma).unsqueeze(-1).unsqueeze(-1);
        let beta = style.apply(&self.beta).unsqueeze(-1).unsqueeze(-1);
        Ok(self.bn.forward_t(xs, train) * gamma + beta)
    }

    pub fn forward(&self, xs: &Tensor, style: &Tensor, train: bool) -> Result<Tensor> {
        Ok(activate(&self.modulate(xs, style, train)?, self.activation).apply(&self.conv))
    }
}

/// AdaIN counterpart of [`run_spade_stack`]: one style vector for every block.
pub fn run_adain_stack(
    start: Tensor,
    blocks: &[AdainConvBlock],
    schedule: &[usize],
    margin: usize,
    interpolation: Interpolation,
    style: &Tensor,
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
        h = block.forward(&h, style, train)?;
    }
    Ok(h)
}

/// Output widths of the foreground/background stacks: the schedule widths, ending at `D_emb`.
fn feature_widths(cfg: &TrainConfig) -> Vec<usize> {
    let mut w = cfg.channel_widths.clone();
    if let Some(last) = w.last_mut() {
        *last = cfg.d_emb;
    }
    w
}

/// Style maps for every resolution of the schedule, built by area-downsampling the finest one.
pub fn style_pyramid(finest: &Tensor, schedule: &[usize], margin: usize) -> Result<BTreeMap<usize, Tensor>> {
    let mut out = BTreeMap::new();
    let mut res = *schedule.last().expect("non-empty schedule");
    let mut current = finest.shallow_clone();
    out.insert(res, current.shallow_clone());
    let coarsest = *schedule.first().expect("non-empty schedule");
    while res > coarsest {
        current = downsample_with_margin(&current, margin)?;
        res /= 2;
        out.insert(res, current.shallow_clone());
    }
    Ok(out)
}

#[derive(Debug)]
enum Start {
    /// Positional encoding relative to the `K` part centers.
    Centers(PositionalEncoder),
    /// Learned constant, used when no geometry is generated.
    Constant(Tensor),
}

#[derive(Debug)]
pub struct ForegroundGenerator {
    start: Start,
    blocks: Vec<SpadeResBlock>,
    schedule: Vec<usize>,
    margin: usize,
    interpolation: Interpolation,
}

impl ForegroundGenerator {
    pub fn new(vs: nn::Path, cfg: &TrainConfig) -> Result<Self> {
        let start = if cfg.disable_points {
            let s0 = (cfg.resolution_schedule[0] + 2 * cfg.margin_px) as i64;
            Start::Constant(vs.var("start", &[1, cfg.d_emb as i64, s0, s0], nn::Init::Randn { mean: 0., stdev: 1. }))
        } else {
            Start::Centers(PositionalEncoder::new(&vs / "encoder", cfg.k, cfg.d_emb)?)
        };
        let widths = feature_widths(cfg);
        let blocks = (0..widths.len())
            .map(|i| {
                let c_in = if i == 0 { cfg.d_emb } else { widths[i - 1] };
                SpadeResBlock::new(&vs / format!("block{i}"), c_in, widths[i], cfg.d_emb, cfg.spade_hidden, cfg.activation)
            })
            .collect();
        Ok(Self {
            start,
            blocks,
            schedule: cfg.resolution_schedule.clone(),
            margin: cfg.margin_px,
            interpolation: cfg.interpolation,
        })
    }

    pub fn blocks_mut(&mut self) -> &mut Vec<SpadeResBlock> {
        &mut self.blocks
    }

    pub fn start_encoder(&self) -> Option<&PositionalEncoder> {
        match &self.start {
            Start::Centers(enc) => Some(enc),
            Start::Constant(_) => None,
        }
    }

    /// `masks_full` holds the conditioning channels with margins at the finest
    /// resolution and `embeddings` their vectors; returns `F` with margins.
    pub fn forward(
        &self,
        centers: Option<&Tensor>,
        masks_full: &Tensor,
        embeddings: &Tensor,
        train: bool,
    ) -> Result<Tensor> {
        let b = masks_full.size()[0];
        let (kind, device) = (masks_full.kind(), masks_full.device());
        let start = match (&self.start, centers) {
            (Start::Centers(enc), Some(c)) => {
                let grid = MarginGrid::square(self.schedule[0], self.margin)?;
                enc.forward(&grid.coords(kind, device), c)?
            }
            (Start::Centers(_), None) => {
                return Err(Error::config("disable_points", "foreground start needs part centers"));
            }
            (Start::Constant(t), _) => t.expand([b, -1, -1, -1], true),
        };
        let w_fg = foreground_embedding_map(masks_full, embeddings)?;
        let pyramid = style_pyramid(&w_fg, &self.schedule, self.margin)?;
        run_spade_stack(
            start,
            &self.blocks,
            &self.schedule,
            self.margin,
            self.interpolation,
            |res| pyramid.get(&res).map(|t| t.shallow_clone()).ok_or_else(|| Error::Invariant(format!("no style at {res}"))),
            train,
        )
    }
}

#[derive(Debug)]
pub struct BackgroundGenerator {
    pub mlp: Mlp3,
    encoder: PositionalEncoder,
    blocks: Vec<AdainConvBlock>,
    schedule: Vec<usize>,
    margin: usize,
    interpolation: Interpolation,
}

impl BackgroundGenerator {
    pub fn new(vs: nn::Path, cfg: &TrainConfig) -> Result<Self> {
        let widths = feature_widths(cfg);
        let blocks = (0..widths.len())
            .map(|i| {
                let c_in = if i == 0 { cfg.d_emb } else { widths[i - 1] };
                AdainConvBlock::new(&vs / format!("block{i}"), c_in, widths[i], cfg.d_emb, cfg.activation)
            })
            .collect();
        Ok(Self {
            mlp: Mlp3::new(&vs / "mlp", cfg.d_noise, cfg.mlp_hidden, cfg.d_emb, cfg.activation),
            encoder: PositionalEncoder::new(&vs / "encoder", 1, cfg.d_emb)?,
            blocks,
            schedule: cfg.resolution_schedule.clone(),
            margin: cfg.margin_px,
            interpolation: cfg.interpolation,
        })
    }

    pub fn blocks_mut(&mut self) -> &mut Vec<AdainConvBlock> {
        &mut self.blocks
    }

    /// `B` with margins from `z_bg_app` (`[B, D_noise]`) and `u_bg_pos` (`[B, 2]`).
    pub fn forward(&self, z_bg_app: &Tensor, u_bg_pos: &Tensor, train: bool) -> Result<Tensor> {
        let (zs, us) = (z_bg_app.size(), u_bg_pos.size());
        if zs.len() != 2 || zs[1] != self.mlp.input_dim() || us != [zs[0], 2] {
            return Err(Error::Shape(format!("background latents {zs:?} / {us:?}")));
        }
        let w_bg = self.mlp.forward(z_bg_app);
        let grid = MarginGrid::square(self.schedule[0], self.margin)?;
        let start = self.encoder.forward(&grid.coords(u_bg_pos.kind(), u_bg_pos.device()), &u_bg_pos.unsqueeze(1))?;
        run_adain_stack(start, &self.blocks, &self.schedule, self.margin, self.interpolation, &w_bg, train)
    }
}

/// Two 3x3 convolutions with one nonlinearity between them, then `tanh`.
#[derive(Debug)]
pub struct Compositor {
    pub conv0: nn::Conv2D,
    pub conv1: nn::Conv2D,
    activation: Activation,
    margin: usize,
}

impl Compositor {
    pub fn new(vs: nn::Path, channels: usize, hidden: usize, margin: usize, activation: Activation) -> Self {
        Self { conv0: conv3x3(&vs / "conv0", channels, hidden), conv1: conv3x3(&vs / "conv1", hidden, 3), activation, margin }
    }

    /// `(1 - M_bg) F + M_bg B` on the margin grid. `m_bg` is `[B, H, W]`.
    pub fn blend(f: &Tensor, b: &Tensor, m_bg: &Tensor) -> Result<Tensor> {
        let (fs, bs, ms) = (f.size(), b.size(), m_bg.size());
        if fs != bs || ms.len() != 3 || ms[0] != fs[0] || ms[1..] != fs[2..] {
            return Err(Error::Shape(format!("blend F {fs:?}, B {bs:?}, M_bg {ms:?}")));
        }
        let m = m_bg.unsqueeze(1);
        Ok(f * (1.0 - &m) + b * m)
    }

    /// Two-layer CNN on a blended (or pure foreground) map; returns the interior image in `[-1, 1]`.
    pub fn render(&self, blended: &Tensor) -> Tensor {
        let h = activate(&blended.apply(&self.conv0), self.activation).apply(&self.conv1);
        crop_margin(&h, self.margin).tanh()
    }

    pub fn composite(&self, f: &Tensor, b: &Tensor, m_bg: &Tensor) -> Result<Tensor> {
        Ok(self.render(&Self::blend(f, b, m_bg)?))
    }
}

/// Everything produced for one batch of latents.
#[derive(Debug)]
pub struct GeneratorOutput {
    /// `[B, 3, H, W]` in `[-1, 1]`.
    pub image: Tensor,
    pub masks: MaskStack,
    pub layout: PartLayout,
    /// Interior heatmaps at mask resolution; absent without geometry.
    pub heatmaps: Option<Tensor>,
    /// Foreground map with margins.
    pub foreground: Tensor,
    /// Background map with margins; absent when the background is merged into the parts.
    pub background: Option<Tensor>,
}

#[derive(Debug)]
enum BackgroundPath {
    Separate(BackgroundGenerator),
    /// The background channel is conditioned like a part, with its own embedding from `z_bg_app`.
    Merged(Mlp3),
}

/// Points, masks, foreground, background and compositor under one variable store path.
#[derive(Debug)]
pub struct Generator {
    pub points: PointGenerator,
    pub masks: MaskGenerator,
    pub foreground: ForegroundGenerator,
    background: BackgroundPath,
    pub compositor: Compositor,
    k: usize,
}

impl Generator {
    pub fn new(vs: nn::Path, cfg: &TrainConfig) -> Result<Self> {
        let background = if cfg.merged_background {
            BackgroundPath::Merged(Mlp3::new(&vs / "bg_embed", cfg.d_noise, cfg.mlp_hidden, cfg.d_emb, cfg.activation))
        } else {
            BackgroundPath::Separate(BackgroundGenerator::new(&vs / "background", cfg)?)
        };
        let hidden = *cfg.channel_widths.last().expect("validated");
        Ok(Self {
            points: PointGenerator::new(&vs / "points", cfg),
            masks: MaskGenerator::new(&vs / "masks", cfg)?,
            foreground: ForegroundGenerator::new(&vs / "foreground", cfg)?,
            background,
            compositor: Compositor::new(&vs / "compositor", cfg.d_emb, hidden, cfg.margin_px, cfg.activation),
            k: cfg.k,
        })
    }

    pub fn background(&self) -> Option<&BackgroundGenerator> {
        match &self.background {
            BackgroundPath::Separate(bg) => Some(bg),
            BackgroundPath::Merged(_) => None,
        }
    }

    pub fn forward(&self, latents: &LatentBatch, train: bool) -> Result<GeneratorOutput> {
        let layout = self.points.layout(latents)?;
        let mask_out = self.masks.generate(&layout, train)?;
        let masks = mask_out.masks;
        let centers = layout.geometry.as_ref().map(|g| &g.centers);
        let k = self.k as i64;
        let (foreground, background, image) = match &self.background {
            BackgroundPath::Separate(bg) => {
                let parts_full = masks.full.narrow(1, 1, k);
                let f = self.foreground.forward(centers, &parts_full, &layout.appearance.embeddings, train)?;
                let b = bg.forward(&latents.z_bg_app, &latents.u_bg_pos, train)?;
                let image = self.compositor.composite(&f, &b, &masks.full.select(1, 0))?;
                (f, Some(b), image)
            }
            BackgroundPath::Merged(mlp) => {
                let w_bg = mlp.forward(&latents.z_bg_app).unsqueeze(1);
                let embeddings = Tensor::cat(&[&w_bg, &layout.appearance.embeddings], 1);
                let f = self.foreground.forward(centers, &masks.full, &embeddings, train)?;
                let image = self.compositor.render(&f);
                (f, None, image)
            }
        };
        Ok(GeneratorOutput { image, masks, layout, heatmaps: mask_out.heatmaps, foreground, background })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::LatentBatch;
    use crate::nn_util::{all_finite, fill_tensor, init_var_store, set_identity_conv, to_vec_f64};
    use tch::{Device, Kind};

    const D: (Kind, Device) = (Kind::Double, Device::Cpu);

    #[test]
    fn foreground_map_selects_and_empties() {
        let emb = Tensor::randn([1, 3, 4], D);
        let mut masks = Tensor::zeros([1, 3, 2, 2], D);
        let _ = masks.get(0).get(1).get(0).get(1).fill_(1.0);
        let w = foreground_embedding_map(&masks, &emb).unwrap();
        assert!(w.get(0).select(1, 0).select(1, 1).equal(&emb.get(0).get(1)));
        assert_eq!(w.get(0).select(1, 1).abs().sum(Kind::Double).double_value(&[]), 0.0);
        masks = masks.narrow(1, 0, 2);
        assert!(foreground_embedding_map(&masks, &emb).is_err());
    }

    fn identity_adain(c: usize, style: usize) -> (nn::VarStore, AdainConvBlock) {
        let mut vs = nn::VarStore::new(Device::Cpu);
        let mut block = AdainConvBlock::new(vs.root(), c, c, style, Activation::LeakyRelu);
        init_var_store(&vs, 0);
        fill_tensor(&mut block.gamma.ws, 0.0);
        fill_tensor(&mut block.beta.ws, 0.0);
        set_identity_conv(&mut block.conv);
        vs.double();
        (vs, block)
    }

    #[test]
    fn adain_unit_modulation_is_plain_norm_conv() {
        let (_vs, block) = identity_adain(3, 2);
        let x = Tensor::randn([4, 3, 5, 5], D);
        let s = Tensor::randn([4, 2], D);
        let out = block.forward(&x, &s, true).unwrap();
        let mean = x.mean_dim(&[0i64, 2, 3][..], true, Kind::Double);
        let var = x.var_dim(&[0i64, 2, 3][..], false, true);
        let norm = (&x - mean) / (var + 1e-5).sqrt();
        let expected = norm.maximum(&(&norm * 0.2));
        assert!(out.allclose(&expected, 1e-10, 1e-10, false));
    }

    #[test]
    fn adain_beta_only_on_constant_input_is_constant() {
        let (_vs, mut block) = identity_adain(2, 3);
        fill_tensor(&mut block.gamma.ws, 0.0);
        fill_tensor(block.gamma.bs.as_mut().unwrap(), 0.0);
        tch::no_grad(|| block.beta.ws.copy_(&Tensor::randn([2, 3], D)));
        let x = Tensor::full([2, 2, 4, 4], 3.0, D);
        let s = Tensor::randn([2, 3], D);
        let pre = block.modulate(&x, &s, true).unwrap();
        let flat = pre.view([2, 2, 16]);
        let spread = flat.amax(&[-1i64][..], false) - flat.amin(&[-1i64][..], false);
        assert_eq!(spread.abs().max().double_value(&[]), 0.0);
    }

    #[test]
    fn adain_matches_manual_per_channel_affine() {
        let vs = nn::VarStore::new(Device::Cpu);
        let block = AdainConvBlock::new(vs.root(), 3, 4, 2, Activation::LeakyRelu);
        init_var_store(&vs, 5);
        let mut vs = vs;
        vs.double();
        let x = Tensor::randn([2, 3, 3, 3], D);
        let s = Tensor::randn([2, 2], D);
        let pre = to_vec_f64(&block.modulate(&x, &s, false).unwrap());
        let (xv, sv) = (to_vec_f64(&x), to_vec_f64(&s));
        let (gw, gb) = (to_vec_f64(&block.gamma.ws), to_vec_f64(block.gamma.bs.as_ref().unwrap()));
        let (bw, bb) = (to_vec_f64(&block.beta.ws), to_vec_f64(block.beta.bs.as_ref().unwrap()));
        let norm = 1.0 / (1.0f64 + 1e-5).sqrt();
        for b in 0..2 {
            for c in 0..3 {
                let g = gb[c] + (0..2).map(|j| gw[c * 2 + j] * sv[b * 2 + j]).sum::<f64>();
                let be = bb[c] + (0..2).map(|j| bw[c * 2 + j] * sv[b * 2 + j]).sum::<f64>();
                for p in 0..9 {
                    let i = (b * 3 + c) * 9 + p;
                    assert!((pre[i] - (xv[i] * norm * g + be)).abs() < 1e-12);
                }
            }
        }
        assert!(block.forward(&x, &Tensor::randn([2, 3], D), false).is_err());
    }

    #[test]
    fn blend_endpoints_and_midpoint() {
        let f = Tensor::randn([1, 2, 3, 3], D);
        let b = Tensor::randn([1, 2, 3, 3], D);
        let zero = Tensor::zeros([1, 3, 3], D);
        assert!(Compositor::blend(&f, &b, &zero).unwrap().equal(&f));
        assert!(Compositor::blend(&f, &b, &(&zero + 1.0)).unwrap().equal(&b));
        let half = Compositor::blend(&f, &b, &(&zero + 0.5)).unwrap();
        assert!(half.allclose(&((&f + &b) * 0.5), 1e-15, 1e-15, false));
        assert!(Compositor::blend(&f, &b.narrow(1, 0, 1), &zero).is_err());
    }

    #[test]
    fn generator_shapes_and_simplex() {
        let cfg = TrainConfig::tiny();
        let vs = nn::VarStore::new(Device::Cpu);
        let gen = Generator::new(vs.root(), &cfg).unwrap();
        init_var_store(&vs, 3);
        let lat = LatentBatch::sample(&cfg, 1, 0, 2, Kind::Float, Device::Cpu);
        let out = gen.forward(&lat, true).unwrap();
        let s = cfg.image_size() as i64;
        assert_eq!(out.image.size(), vec![2, 3, s, s]);
        assert_eq!(out.masks.probs.size(), vec![2, cfg.k as i64 + 1, s, s]);
        assert_eq!(out.heatmaps.as_ref().unwrap().size(), vec![2, cfg.k as i64, s, s]);
        let m = cfg.margin_px as i64;
        assert_eq!(out.foreground.size(), vec![2, cfg.d_emb as i64, s + 2 * m, s + 2 * m]);
        assert!(out.image.abs().max().double_value(&[]) <= 1.0);
        let sums = out.masks.probs.sum_dim_intlist(1, false, Kind::Double);
        assert!((sums - 1.0).abs().max().double_value(&[]) < 1e-5);
    }

    #[test]
    fn background_ignores_part_latents() {
        let cfg = TrainConfig::tiny();
        let vs = nn::VarStore::new(Device::Cpu);
        let gen = Generator::new(vs.root(), &cfg).unwrap();
        init_var_store(&vs, 3);
        let lat = LatentBatch::sample(&cfg, 1, 0, 2, Kind::Float, Device::Cpu);
        let lat = LatentBatch {
            z_point: lat.z_point.set_requires_grad(true),
            z_app: lat.z_app.set_requires_grad(true),
            ..lat
        };
        let out = gen.forward(&lat, true).unwrap();
        let bsum = out.background.unwrap().sum(Kind::Float);
        let g = Tensor::run_backward(&[bsum], &[&lat.z_point, &lat.z_app], true, false);
        assert!(g.iter().all(|t| !t.defined() || t.abs().max().double_value(&[]) == 0.0));
    }

    #[test]
    fn merged_background_and_no_points_variants_run() {
        for (merged, nopoints) in [(true, false), (false, true), (true, true)] {
            let cfg = TrainConfig { merged_background: merged, disable_points: nopoints, ..TrainConfig::tiny() };
            cfg.validate().unwrap();
            let vs = nn::VarStore::new(Device::Cpu);
            let gen = Generator::new(vs.root(), &cfg).unwrap();
            init_var_store(&vs, 4);
            let lat = LatentBatch::sample(&cfg, 2, 0, 2, Kind::Float, Device::Cpu);
            let out = gen.forward(&lat, true).unwrap();
            assert_eq!(out.background.is_none(), merged);
            assert_eq!(out.layout.geometry.is_none(), nopoints);
            assert!(all_finite(&out.image));
        }
    }
}
