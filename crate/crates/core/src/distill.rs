//! Mask-image pair synthesis from a trained generator and the segmentation
//! network trained on those pairs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tch::{nn, Device, Kind, Tensor};

use crate::checkpoint::{collect_vars, load_archive, restore_vars, save_archive, CheckpointMeta, CHECKPOINT_VERSION};
use crate::config::SegConfig;
use crate::corpus::{Dataset, Manifest};
use crate::error::{Error, Result};
use crate::imageio;
use crate::latent::derive_seed;
use crate::nn_util::{init_var_store, leaky};
use crate::optim::Adam;
use crate::trainer::GanModel;

const PAIR_BATCH: usize = 32;

/// Part centers of generated samples in pixel coordinates, `[B, K, 2]`.
fn centers_to_pixels(centers: &Tensor, resolution: usize) -> Tensor {
    (centers.to_kind(Kind::Double) + 1.0) * (resolution as f64 / 2.0) - 0.5
}

/// Generates `n` inference-mode samples with labels = argmax over the `K + 1` masks.
///
/// Latents for sample `i` derive from `(seed, i)`, so the archive depends only on the
/// generator weights, `n` and `seed`. Part centers are stored as keypoints when available.
pub fn synthesize_pairs(model: &GanModel, checkpoint_hash: Option<String>, n: usize, seed: u64) -> Result<Dataset> {
    let s = model.cfg.image_size() as i64;
    let k = model.cfg.k;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut keypoints = Vec::new();
    let mut start = 0;
    while start < n {
        let count = PAIR_BATCH.min(n - start);
        let bundles: Vec<_> = (start..start + count)
            .map(|i| {
                crate::latent::LatentBundle::sample(
                    derive_seed(&[seed, i as u64]),
                    model.cfg.d_noise,
                    model.cfg.background_position,
                )
            })
            .collect();
        let latents = crate::latent::LatentBatch::from_bundles(&bundles, Kind::Float, Device::Cpu);
        let out = tch::no_grad(|| model.generate(&latents, false))?;
        images.push(imageio::to_u8(&out.image));
        labels.push(out.masks.labels().to_kind(Kind::Uint8));
        if let Some(g) = &out.layout.geometry {
            keypoints.push(centers_to_pixels(&g.centers, s as usize));
        }
        start += count;
    }
    let manifest = Manifest {
        count: n,
        resolution: s as usize,
        num_parts: k,
        source: "generator".into(),
        seed: Some(seed),
        checkpoint_hash,
        seeds: vec![seed],
        spec: Some(serde_json::json!({ "config_hash": model.cfg.hash() })),
    };
    let (images, labels) = if n == 0 {
        (Tensor::zeros([0, 3, s, s], (Kind::Uint8, Device::Cpu)), Tensor::zeros([0, s, s], (Kind::Uint8, Device::Cpu)))
    } else {
        (Tensor::cat(&images, 0), Tensor::cat(&labels, 0))
    };
    let keypoints = (!keypoints.is_empty()).then(|| Tensor::cat(&keypoints, 0));
    Dataset::new(images, Some(labels), keypoints, manifest)
}

/// Compact encoder-decoder with a dilated-convolution context block.
#[derive(Debug)]
pub struct Segmenter {
    pub vs: nn::VarStore,
    enc: [nn::Conv2D; 3],
    context: [nn::Conv2D; 3],
    fuse: nn::Conv2D,
    dec: [nn::Conv2D; 2],
    head: nn::Conv2D,
    pub num_classes: usize,
    pub resolution: usize,
    pub cfg: SegConfig,
}

impl Segmenter {
    pub fn new(cfg: &SegConfig, num_parts: usize, resolution: usize) -> Result<Self> {
        cfg.validate()?;
        if resolution % 4 != 0 {
            return Err(Error::config("resolution", "segmenter input side must be divisible by 4"));
        }
        let vs = nn::VarStore::new(Device::Cpu);
        let root = vs.root();
        let w = cfg.width as i64;
        let same = |p: nn::Path, i: i64, o: i64, d: i64| {
            nn::conv2d(p, i, o, 3, nn::ConvConfig { padding: d, dilation: d, ..Default::default() })
        };
        let down = |p: nn::Path, i: i64, o: i64| {
            nn::conv2d(p, i, o, 3, nn::ConvConfig { padding: 1, stride: 2, ..Default::default() })
        };
        let enc = [same(&root / "enc0", 3, w, 1), down(&root / "enc1", w, 2 * w), down(&root / "enc2", 2 * w, 4 * w)];
        let context = [
            same(&root / "ctx1", 4 * w, 4 * w, 1),
            same(&root / "ctx2", 4 * w, 4 * w, 2),
            same(&root / "ctx4", 4 * w, 4 * w, 4),
        ];
        let fuse = nn::conv2d(&root / "fuse", 12 * w, 4 * w, 1, Default::default());
        let dec = [same(&root / "dec1", 6 * w, 2 * w, 1), same(&root / "dec0", 3 * w, w, 1)];
        let head = nn::conv2d(&root / "head", w, num_parts as i64 + 1, 1, Default::default());
        init_var_store(&vs, derive_seed(&[cfg.seed, 0x5e6]));
        Ok(Self { vs, enc, context, fuse, dec, head, num_classes: num_parts + 1, resolution, cfg: cfg.clone() })
    }

    /// Per-class logits `[B, K + 1, H, W]` for images in `[-1, 1]`.
    pub fn logits(&self, images: &Tensor) -> Tensor {
        let f0 = leaky(&images.apply(&self.enc[0]));
        let f1 = leaky(&f0.apply(&self.enc[1]));
        let f2 = leaky(&f1.apply(&self.enc[2]));
        let ctx: Vec<Tensor> = self.context.iter().map(|c| leaky(&f2.apply(c))).collect();
        let f2 = leaky(&Tensor::cat(&ctx, 1).apply(&self.fuse));
        let up = |t: &Tensor, like: &Tensor| {
            let s = like.size();
            t.upsample_bilinear2d([s[2], s[3]], false, None, None)
        };
        let d1 = leaky(&Tensor::cat(&[up(&f2, &f1), f1.shallow_clone()], 1).apply(&self.dec[0]));
        let d0 = leaky(&Tensor::cat(&[up(&d1, &f0), f0.shallow_clone()], 1).apply(&self.dec[1]));
        d0.apply(&self.head)
    }

    fn prepare(&self, images: &Tensor) -> Result<Tensor> {
        let s = images.size();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!("segmenter expects [B, 3, H, W], got {s:?}")));
        }
        let r = self.resolution as i64;
        if s[2] == r && s[3] == r {
            return Ok(images.shallow_clone());
        }
        if !self.cfg.resample_input {
            return Err(Error::Shape(format!("input is {}x{}, segmenter expects {r}x{r}", s[2], s[3])));
        }
        Ok(images.upsample_bilinear2d([r, r], false, None, None))
    }

    /// Argmax labels `[B, H, W]` in `0..=K` and per-class probabilities `[B, K + 1, H, W]`.
    pub fn segment(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let x = self.prepare(images)?;
        let probs = tch::no_grad(|| self.logits(&x).softmax(1, Kind::Float));
        Ok((probs.argmax(1, false), probs))
    }

    pub fn save(&self, path: &Path, iterations_done: u64) -> Result<()> {
        let meta = CheckpointMeta {
            version: CHECKPOINT_VERSION,
            kind: "segmenter".into(),
            config: serde_json::to_value(&self.cfg)?,
            step: iterations_done,
            seed: self.cfg.seed,
            extra: serde_json::json!({ "num_parts": self.num_classes - 1, "resolution": self.resolution }),
        };
        save_archive(path, &meta, &collect_vars(&self.vs, "seg/"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = load_archive(path)?;
        if meta.kind != "segmenter" {
            return Err(Error::Checkpoint(format!("expected a segmenter checkpoint, found `{}`", meta.kind)));
        }
        let cfg: SegConfig = serde_json::from_value(meta.config.clone())?;
        let field = |k: &str| {
            meta.extra[k].as_u64().ok_or_else(|| Error::Checkpoint(format!("segmenter checkpoint lacks `{k}`")))
        };
        let seg = Self::new(&cfg, field("num_parts")? as usize, field("resolution")? as usize)?;
        restore_vars(&seg.vs, "seg/", &tensors)?;
        Ok(seg)
    }
}

/// Per-pixel cross-entropy against hard labels `[B, H, W]` (int64) or soft targets `[B, C, H, W]`.
pub fn cross_entropy(logits: &Tensor, target: &Tensor) -> Tensor {
    let logp = logits.log_softmax(1, logits.kind());
    if target.dim() == 3 {
        -logp.gather(1, &target.unsqueeze(1), false).mean(logits.kind())
    } else {
        -(logp * target).sum_dim_intlist(1, false, logits.kind()).mean(logits.kind())
    }
}

/// Where training pairs come from.
pub enum PairSource<'a> {
    /// Fresh inference-mode generator samples every iteration.
    Streaming(&'a GanModel),
    /// A fixed labeled collection.
    Archive(&'a Dataset),
}

/// Trains a segmenter with per-pixel cross-entropy for `cfg.iterations` iterations.
pub fn train_segmenter(source: PairSource<'_>, cfg: &SegConfig, num_parts: usize) -> Result<Segmenter> {
    let resolution = match &source {
        PairSource::Streaming(model) => {
            if model.cfg.k != num_parts {
                return Err(Error::config("k", format!("generator has {} parts, segmenter expects {num_parts}", model.cfg.k)));
            }
            model.cfg.image_size()
        }
        PairSource::Archive(ds) => {
            if ds.manifest.num_parts != num_parts {
                return Err(Error::config(
                    "k",
                    format!("archive has {} parts, segmenter expects {num_parts}", ds.manifest.num_parts),
                ));
            }
            if ds.labels.is_none() || ds.is_empty() {
                return Err(Error::Dataset("segmenter training needs a non-empty labeled archive".into()));
            }
            ds.resolution()
        }
    };
    let seg = Segmenter::new(cfg, num_parts, resolution)?;
    let mut opt = Adam::new(&seg.vs, cfg.lr, cfg.beta1, cfg.beta2);
    for it in 0..cfg.iterations as u64 {
        let (images, target) = match &source {
            PairSource::Streaming(model) => {
                let out = model.sample(cfg.seed, derive_seed(&[0x5ea, it]), cfg.batch_size)?;
                let target = if cfg.soft_labels { out.masks.probs.detach() } else { out.masks.labels() };
                (out.image.detach(), target)
            }
            PairSource::Archive(ds) => {
                let idx = ds.sample_indices(cfg.seed, it, cfg.batch_size);
                (ds.batch(&idx, Kind::Float), ds.label_batch(&idx).expect("checked above"))
            }
        };
        let (images, target) = if cfg.augment { augment(&images, &target, derive_seed(&[cfg.seed, it, 0xa09])) } else { (images, target) };
        let loss = cross_entropy(&seg.logits(&images), &target);
        if !loss.double_value(&[]).is_finite() {
            return Err(Error::NonFinite(format!("segmenter loss at iteration {it}")));
        }
        opt.minimize(&loss)?;
        if it % 500 == 0 {
            log::info!("segmenter iteration {it}: loss {:.4}", loss.double_value(&[]));
        }
    }
    Ok(seg)
}

/// Random horizontal flip and a small random translation (with edge padding) applied jointly.
fn augment(images: &Tensor, target: &Tensor, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut x, mut y) = (images.shallow_clone(), target.shallow_clone());
    if rng.random_bool(0.5) {
        x = x.flip([-1]);
        y = y.flip([-1]);
    }
    let (dx, dy): (i64, i64) = (rng.random_range(-2..=2), rng.random_range(-2..=2));
    x = x.roll([dy, dx], [-2, -1]);
    y = y.roll([dy, dx], [-2, -1]);
    (x, y)
}

/// Pixel accuracy of `seg` on a labeled collection.
pub fn pixel_accuracy(seg: &Segmenter, ds: &Dataset) -> Result<f64> {
    let labels = ds.labels.as_ref().ok_or_else(|| Error::Dataset("collection has no labels".into()))?;
    let mut correct = 0i64;
    let n = ds.len() as i64;
    for start in (0..n).step_by(PAIR_BATCH) {
        let idx: Vec<i64> = (start..(start + PAIR_BATCH as i64).min(n)).collect();
        let (pred, _) = seg.segment(&ds.batch(&idx, Kind::Float))?;
        let gt = labels.index_select(0, &Tensor::from_slice(&idx)).to_kind(Kind::Int64);
        correct += pred.eq_tensor(&gt).sum(Kind::Int64).int64_value(&[]);
    }
    let r = ds.resolution() as i64;
    Ok(correct as f64 / (n * r * r).max(1) as f64)
}
