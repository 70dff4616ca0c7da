//! Level 1: noise to grouped 2D points, part locations/scales and part appearance embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use tch::{nn, nn::Module, Device, Kind, Tensor};

use crate::config::{BackgroundPosition, ScaleFormula, TrainConfig, SCALE_EPS};
use crate::error::{Error, Result};
use crate::nn_util::Mlp3;

/// Mixes several integers into one seed (splitmix64 finalizer over a running state).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        state ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(state << 6).wrapping_add(state >> 2);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        state = z ^ (z >> 31);
    }
    state
}

/// The four independent noise sources behind one generated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentBundle {
    pub z_point: Vec<f32>,
    pub z_app: Vec<f32>,
    pub z_bg_app: Vec<f32>,
    pub u_bg_pos: [f32; 2],
    pub seed: u64,
}

impl LatentBundle {
    pub fn sample(seed: u64, d_noise: usize, mode: BackgroundPosition) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
        let z_point = normal(d_noise);
        let z_app = normal(d_noise);
        let z_bg_app = normal(d_noise);
        let ux: f32 = rng.random_range(-1.0..=1.0);
        let uy: f32 = match mode {
            BackgroundPosition::Uniform => rng.random_range(-1.0..=1.0),
            BackgroundPosition::HorizontalOnly => 0.0,
        };
        Self { z_point, z_app, z_bg_app, u_bg_pos: [ux, uy], seed }
    }
}

/// A batch of latents as tensors, `[B, D_noise]` for the noise vectors and `[B, 2]` for the background position.
#[derive(Debug)]
pub struct LatentBatch {
    pub z_point: Tensor,
    pub z_app: Tensor,
    pub z_bg_app: Tensor,
    pub u_bg_pos: Tensor,
}

impl LatentBatch {
    pub fn from_bundles(bundles: &[LatentBundle], kind: Kind, device: Device) -> Self {
        let stack = |f: &dyn Fn(&LatentBundle) -> &[f32]| {
            let rows: Vec<Tensor> = bundles.iter().map(|b| Tensor::from_slice(f(b))).collect();
            Tensor::stack(&rows, 0).to_kind(kind).to_device(device)
        };
        Self {
            z_point: stack(&|b| &b.z_point),
            z_app: stack(&|b| &b.z_app),
            z_bg_app: stack(&|b| &b.z_bg_app),
            u_bg_pos: stack(&|b| &b.u_bg_pos),
        }
    }

    /// Samples `batch` bundles with seeds derived from `seed` and `stream`.
    pub fn sample(cfg: &TrainConfig, seed: u64, stream: u64, batch: usize, kind: Kind, device: Device) -> Self {
        let bundles: Vec<LatentBundle> = (0..batch)
            .map(|i| LatentBundle::sample(derive_seed(&[seed, stream, i as u64]), cfg.d_noise, cfg.background_position))
            .collect();
        Self::from_bundles(&bundles, kind, device)
    }

    pub fn batch_size(&self) -> i64 {
        self.z_point.size()[0]
    }

    pub fn shallow_clone(&self) -> Self {
        Self {
            z_point: self.z_point.shallow_clone(),
            z_app: self.z_app.shallow_clone(),
            z_bg_app: self.z_bg_app.shallow_clone(),
            u_bg_pos: self.u_bg_pos.shallow_clone(),
        }
    }
}

/// Where the parts are: grouped points and the statistics derived from them.
#[derive(Debug)]
pub struct PartGeometry {
    /// `[B, K, n_per, 2]`, `(x, y)` in normalized coordinates.
    pub points: Tensor,
    /// `[B, K, 2]`.
    pub centers: Tensor,
    /// `[B, K]`.
    pub scales: Tensor,
}

/// What the parts look like.
#[derive(Debug)]
pub struct PartAppearance {
    /// Shared per-sample vector, `[B, D_emb]`.
    pub dynamic: Tensor,
    /// Learned per-part constants, `[K, D_emb]`.
    pub const_embeddings: Tensor,
    /// Elementwise products, `[B, K, D_emb]`.
    pub embeddings: Tensor,
}

#[derive(Debug)]
pub struct PartLayout {
    /// Absent when the points ablation is active.
    pub geometry: Option<PartGeometry>,
    pub appearance: PartAppearance,
}

impl PartLayout {
    pub fn geometry(&self) -> Result<&PartGeometry> {
        self.geometry
            .as_ref()
            .ok_or_else(|| Error::config("disable_points", "part geometry is not generated in this configuration"))
    }
}

/// Maps `[B, D_noise]` through `mlp` and reshapes into `[B, K, n_per, 2]`.
pub fn generate_points(mlp: &Mlp3, z_point: &Tensor, k: usize, n_per: usize) -> Result<Tensor> {
    let expected = 2 * k * n_per;
    if mlp.output_dim() != expected as i64 {
        return Err(Error::config(
            "k/n_per",
            format!("point MLP emits {} values but K={k}, n_per={n_per} needs {expected}", mlp.output_dim()),
        ));
    }
    check_noise(z_point, mlp, "z_point")?;
    let b = z_point.size()[0];
    Ok(mlp.forward(z_point).view([b, k as i64, n_per as i64, 2]))
}

fn check_noise(z: &Tensor, mlp: &Mlp3, name: &str) -> Result<()> {
    let size = z.size();
    if size.len() != 2 || size[1] != mlp.input_dim() {
        return Err(Error::Shape(format!("{name} has shape {size:?}, MLP expects [B, {}]", mlp.input_dim())));
    }
    Ok(())
}

/// Group means and spreads. `points` is `[B, K, n_per, 2]`; returns `([B, K, 2], [B, K])`.
///
/// The clamp at `eps` is applied inside the square root so collapsed groups
/// produce a zero gradient instead of NaN.
pub fn part_stats(points: &Tensor, formula: ScaleFormula, eps: f64) -> Result<(Tensor, Tensor)> {
    let size = points.size();
    if size.len() != 4 || size[3] != 2 {
        return Err(Error::Shape(format!("points must be [B, K, n_per, 2], got {size:?}")));
    }
    let n = size[2];
    if n < 2 {
        return Err(Error::config("n_per", "part statistics need at least two points per group"));
    }
    let centers = points.mean_dim(2, false, points.kind());
    let spread = (points - centers.unsqueeze(2)).square().sum_dim_intlist(&[2i64, 3][..], false, points.kind());
    let denom = (n - 1) as f64;
    let scales = match formula {
        ScaleFormula::Typeset => spread.clamp_min((eps * denom).powi(2)).sqrt() / denom,
        ScaleFormula::SampleStd => (spread / denom).clamp_min(eps * eps).sqrt(),
    };
    Ok((centers, scales))
}

/// `w_k = w_dynamic * w_k_const`, broadcast over the batch: `[B, D] x [K, D] -> [B, K, D]`.
pub fn combine_embeddings(dynamic: &Tensor, const_embeddings: &Tensor) -> Result<Tensor> {
    let (d1, d2) = (dynamic.size(), const_embeddings.size());
    if d1.len() != 2 || d2.len() != 2 || d1[1] != d2[1] {
        return Err(Error::Shape(format!("dynamic {d1:?} vs const {d2:?}")));
    }
    Ok(dynamic.unsqueeze(1) * const_embeddings.unsqueeze(0))
}

/// Point and appearance MLPs plus the per-part constant embeddings.
#[derive(Debug)]
pub struct PointGenerator {
    point_mlp: Option<Mlp3>,
    app_mlp: Mlp3,
    const_embeddings: Tensor,
    k: usize,
    n_per: usize,
    formula: ScaleFormula,
    fixed_sigma: Option<f64>,
}

impl PointGenerator {
    pub fn new(vs: nn::Path, cfg: &TrainConfig) -> Self {
        let point_mlp = (!cfg.disable_points).then(|| {
            Mlp3::new(&vs / "point_mlp", cfg.d_noise, cfg.mlp_hidden, 2 * cfg.k * cfg.n_per, cfg.activation)
        });
        let app_mlp = Mlp3::new(&vs / "app_mlp", cfg.d_noise, cfg.mlp_hidden, cfg.d_emb, cfg.activation);
        let const_embeddings =
            vs.var("const_embeddings", &[cfg.k as i64, cfg.d_emb as i64], nn::Init::Randn { mean: 0., stdev: 1. });
        Self {
            point_mlp,
            app_mlp,
            const_embeddings,
            k: cfg.k,
            n_per: cfg.n_per,
            formula: cfg.scale_formula,
            fixed_sigma: cfg.fixed_sigma,
        }
    }

    pub fn point_mlp(&self) -> Option<&Mlp3> {
        self.point_mlp.as_ref()
    }

    pub fn app_mlp(&self) -> &Mlp3 {
        &self.app_mlp
    }

    pub fn geometry(&self, z_point: &Tensor) -> Result<Option<PartGeometry>> {
        let Some(mlp) = &self.point_mlp else { return Ok(None) };
        let points = generate_points(mlp, z_point, self.k, self.n_per)?;
        let (centers, scales) = part_stats(&points, self.formula, SCALE_EPS)?;
        let scales = match self.fixed_sigma {
            Some(sigma) => scales.zeros_like() + sigma,
            None => scales,
        };
        Ok(Some(PartGeometry { points, centers, scales }))
    }

    pub fn appearance(&self, z_app: &Tensor) -> Result<PartAppearance> {
        check_noise(z_app, &self.app_mlp, "z_app")?;
        let dynamic = self.app_mlp.forward(z_app);
        let embeddings = combine_embeddings(&dynamic, &self.const_embeddings)?;
        Ok(PartAppearance { dynamic, const_embeddings: self.const_embeddings.shallow_clone(), embeddings })
    }

    pub fn layout(&self, latents: &LatentBatch) -> Result<PartLayout> {
        Ok(PartLayout { geometry: self.geometry(&latents.z_point)?, appearance: self.appearance(&latents.z_app)? })
    }
}
