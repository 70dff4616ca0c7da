//! Coordinate grids with margins and the fields evaluated on them.
//!
//! Every field here reads coordinates only through differences `p - x`
//! between a grid site and a point. Shifting all points and the grid by a
//! common offset therefore leaves the outputs unchanged, bit for bit when
//! the offset and coordinates are exactly representable.
//!
//! Conventions: a point is `(x, y)` with `x` horizontal. Grid site `(i, j)`
//! sits at the center of pixel `(row i, col j)`, so an interior of `n`
//! pixels tiles `[-1, 1]` with pitch `2 / n` and the margin extends it by
//! `margin * 2 / n` on each side.

use std::f64::consts::PI;

use tch::{nn, nn::Module, Device, Kind, Tensor};

use crate::config::{Interpolation, SCALE_EPS};
use crate::error::{Error, Result};

/// Pixel-center coordinates of an interior grid surrounded by a margin.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginGrid {
    pub interior_h: usize,
    pub interior_w: usize,
    pub margin_px: usize,
    /// Row coordinates, top to bottom, length `interior_h + 2 * margin_px`.
    pub ys: Vec<f64>,
    /// Column coordinates, left to right, length `interior_w + 2 * margin_px`.
    pub xs: Vec<f64>,
}

fn axis(n: usize, margin: usize) -> Vec<f64> {
    let m = margin as i64;
    (-m..n as i64 + m).map(|j| (2 * j + 1) as f64 / n as f64 - 1.0).collect()
}

impl MarginGrid {
    pub fn new(interior_h: usize, interior_w: usize, margin_px: usize) -> Result<Self> {
        if interior_h < 4 || interior_w < 4 {
            return Err(Error::config(
                "resolution_schedule",
                format!("grid interior must be at least 4x4, got {interior_h}x{interior_w}"),
            ));
        }
        Ok(Self {
            interior_h,
            interior_w,
            margin_px,
            ys: axis(interior_h, margin_px),
            xs: axis(interior_w, margin_px),
        })
    }

    pub fn square(size: usize, margin_px: usize) -> Result<Self> {
        Self::new(size, size, margin_px)
    }

    pub fn height(&self) -> usize {
        self.ys.len()
    }

    pub fn width(&self) -> usize {
        self.xs.len()
    }

    pub fn pitch_y(&self) -> f64 {
        2.0 / self.interior_h as f64
    }

    pub fn pitch_x(&self) -> f64 {
        2.0 / self.interior_w as f64
    }

    /// Outer edges of the covered range along rows: `[-1 - 2m/H0, 1 + 2m/H0]`.
    pub fn y_range(&self) -> (f64, f64) {
        let e = 1.0 + 2.0 * self.margin_px as f64 / self.interior_h as f64;
        (-e, e)
    }

    pub fn x_range(&self) -> (f64, f64) {
        let e = 1.0 + 2.0 * self.margin_px as f64 / self.interior_w as f64;
        (-e, e)
    }

    /// The same grid with every coordinate offset by `(dx, dy)`.
    pub fn shifted(&self, dx: f64, dy: f64) -> Self {
        Self {
            xs: self.xs.iter().map(|x| x + dx).collect(),
            ys: self.ys.iter().map(|y| y + dy).collect(),
            ..self.clone()
        }
    }

    /// `[H, W, 2]` tensor of `(x, y)` site coordinates.
    pub fn coords(&self, kind: Kind, device: Device) -> Tensor {
        let (h, w) = (self.height() as i64, self.width() as i64);
        let xs = Tensor::from_slice(&self.xs).view([1, w]).expand([h, w], true);
        let ys = Tensor::from_slice(&self.ys).view([h, 1]).expand([h, w], true);
        Tensor::stack(&[xs, ys], -1).to_kind(kind).to_device(device)
    }

    /// Coordinates of the interior sites only, `[H0, W0, 2]`.
    pub fn interior_coords(&self, kind: Kind, device: Device) -> Tensor {
        crop_margin_hw(&self.coords(kind, device).permute([2, 0, 1]), self.margin_px as i64).permute([1, 2, 0])
    }
}

fn crop_margin_hw(t: &Tensor, m: i64) -> Tensor {
    let nd = t.dim() as i64;
    let h = t.size()[nd as usize - 2];
    let w = t.size()[nd as usize - 1];
    t.narrow(nd - 2, m, h - 2 * m).narrow(nd - 1, m, w - 2 * m)
}

/// Removes a margin of `m` sites from the last two dimensions.
pub fn crop_margin(t: &Tensor, margin: usize) -> Tensor {
    crop_margin_hw(t, margin as i64)
}

/// Per-part Gaussian heatmaps together with the statistics that produced them.
#[derive(Debug)]
pub struct HeatmapStack {
    /// `[B, K, H, W]`, values in `(0, 1]`.
    pub values: Tensor,
    pub centers: Tensor,
    pub scales: Tensor,
}

/// `H_k(p) = exp(-|p - x_k|^2 / sigma_k^2)` on every site of `coords` (`[H, W, 2]`).
///
/// `centers` is `[B, K, 2]`, `scales` is `[B, K]` and must respect the scale clamp.
pub fn gaussian_heatmaps(coords: &Tensor, centers: &Tensor, scales: &Tensor) -> Result<HeatmapStack> {
    let cs = centers.size();
    if cs.len() != 3 || cs[2] != 2 || scales.size() != cs[..2] {
        return Err(Error::Shape(format!("centers {cs:?} / scales {:?}", scales.size())));
    }
    let min_scale = scales.min().double_value(&[]);
    // f32 rounding of the clamp value is tolerated.
    if !(min_scale >= SCALE_EPS * (1.0 - 1e-5)) {
        return Err(Error::Invariant(format!("part scale {min_scale} is below the clamp {SCALE_EPS}")));
    }
    let (h, w) = (coords.size()[0], coords.size()[1]);
    let diff = coords.view([1, 1, h, w, 2]) - centers.view([cs[0], cs[1], 1, 1, 2]);
    let dist2 = diff.square().sum_dim_intlist(-1, false, diff.kind());
    let var = scales.square().view([cs[0], cs[1], 1, 1]);
    let values = (-(dist2 / var)).exp();
    Ok(HeatmapStack { values, centers: centers.shallow_clone(), scales: scales.shallow_clone() })
}

/// Sinusoidal encoding of linearly projected pixel-minus-point differences.
#[derive(Debug)]
pub struct PositionalEncoder {
    proj: nn::Linear,
    n_points: usize,
    out_dim: usize,
}

impl PositionalEncoder {
    /// `n_points` 2D points in, `out_dim` channels out (half sine, half cosine).
    pub fn new(vs: nn::Path, n_points: usize, out_dim: usize) -> Result<Self> {
        if out_dim == 0 || out_dim % 2 != 0 {
            return Err(Error::config("d_emb", format!("positional encoding width {out_dim} must be even")));
        }
        let proj = nn::linear(vs / "proj", 2 * n_points as i64, (out_dim / 2) as i64, Default::default());
        Ok(Self { proj, n_points, out_dim })
    }

    pub fn proj(&self) -> &nn::Linear {
        &self.proj
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// `coords` is `[H, W, 2]`, `points` is `[B, n_points, 2]`; returns `[B, out_dim, H, W]`.
    pub fn forward(&self, coords: &Tensor, points: &Tensor) -> Result<Tensor> {
        let ps = points.size();
        if ps.len() != 3 || ps[1] != self.n_points as i64 || ps[2] != 2 {
            return Err(Error::Shape(format!("encoder expects [B, {}, 2] points, got {ps:?}", self.n_points)));
        }
        Ok(relative_positional_encoding(coords, points, &self.proj))
    }
}

/// `[sin(pi * FC(p - x_1, ..., p - x_J)), cos(pi * FC(...))]` at every site.
pub fn relative_positional_encoding(coords: &Tensor, points: &Tensor, proj: &nn::Linear) -> Tensor {
    let (h, w) = (coords.size()[0], coords.size()[1]);
    let (b, j) = (points.size()[0], points.size()[1]);
    let diff = coords.view([1, 1, h, w, 2]) - points.view([b, j, 1, 1, 2]);
    let flat = diff.permute([0, 2, 3, 1, 4]).reshape([b, h, w, 2 * j]);
    let phase = proj.forward(&flat) * PI;
    Tensor::cat(&[phase.sin(), phase.cos()], -1).permute([0, 3, 1, 2])
}

/// 2x upsampling followed by a symmetric crop that restores a margin of `margin` sites.
///
/// Input `[B, C, H + 2m, W + 2m]` becomes `[B, C, 2H + 2m, 2W + 2m]`.
pub fn upsample_and_crop(feature: &Tensor, margin: usize, mode: Interpolation) -> Result<Tensor> {
    let size = feature.size();
    let m = margin as i64;
    if size.len() != 4 || size[2] < 2 * m + 1 || size[3] < 2 * m + 1 {
        return Err(Error::Shape(format!("feature {size:?} is too small for margin {margin}")));
    }
    let (h, w) = (2 * size[2], 2 * size[3]);
    let up = match mode {
        Interpolation::Bilinear => feature.upsample_bilinear2d([h, w], false, None, None),
        Interpolation::Nearest => feature.upsample_nearest2d([h, w], None, None),
    };
    Ok(crop_margin_hw(&up, m))
}

/// 2x area downsampling that keeps a margin of `margin` sites, zero-filling the part of the
/// coarser margin that the finer grid does not cover.
pub fn downsample_with_margin(feature: &Tensor, margin: usize) -> Result<Tensor> {
    let size = feature.size();
    let m = margin as i64;
    if size.len() != 4 || (size[2] - 2 * m) % 2 != 0 || (size[3] - 2 * m) % 2 != 0 || size[2] < 2 * m + 2 {
        return Err(Error::Shape(format!("cannot halve feature {size:?} with margin {margin}")));
    }
    // Pooling pairs must align with interior pixels, so drop one site when m is odd.
    let even = m - m % 2;
    let trimmed = crop_margin_hw(feature, m - even);
    let pooled = trimmed.avg_pool2d([2, 2], [2, 2], [0, 0], false, true, None::<i64>);
    let pad = m - even / 2;
    Ok(pooled.constant_pad_nd([pad, pad, pad, pad]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn_util::to_vec_f64;

    const D: (Kind, Device) = (Kind::Double, Device::Cpu);

    #[test]
    fn margin_grid_sizes_and_ranges() {
        let g = MarginGrid::square(32, 10).unwrap();
        assert_eq!((g.height(), g.width()), (52, 52));
        assert_eq!(g.y_range(), (-1.625, 1.625));
        let g = MarginGrid::new(64, 32, 10).unwrap();
        assert_eq!((g.height(), g.width()), (84, 52));
        assert_eq!(g.y_range(), (-1.3125, 1.3125));
        assert_eq!(g.x_range(), (-1.625, 1.625));
        let g = MarginGrid::square(32, 0).unwrap();
        assert_eq!(g.y_range(), (-1.0, 1.0));
        assert_eq!(g.xs[0], -1.0 + 1.0 / 32.0);
        assert_eq!(*g.xs.last().unwrap(), 1.0 - 1.0 / 32.0);
        assert!(MarginGrid::new(3, 8, 1).is_err());
    }

    #[test]
    fn interior_matches_unpadded_grid() {
        let plain = MarginGrid::new(16, 8, 0).unwrap();
        let padded = MarginGrid::new(16, 8, 10).unwrap();
        assert_eq!(&padded.ys[10..26], plain.ys.as_slice());
        assert_eq!(&padded.xs[10..18], plain.xs.as_slice());
        assert!(padded.interior_coords(Kind::Double, Device::Cpu).equal(&plain.coords(Kind::Double, Device::Cpu)));
        // Uniform spacing and monotone.
        for w in padded.ys.windows(2) {
            assert!((w[1] - w[0] - padded.pitch_y()).abs() < 1e-15);
        }
    }

    #[test]
    fn heatmap_values() {
        let coords = Tensor::from_slice(&[0.25f64, -0.5, 0.25 + 0.1, -0.5]).view([1, 2, 2]);
        let centers = Tensor::from_slice(&[0.25f64, -0.5]).view([1, 1, 2]);
        let scales = Tensor::from_slice(&[0.1f64]).view([1, 1]);
        let h = gaussian_heatmaps(&coords, &centers, &scales).unwrap();
        let v = to_vec_f64(&h.values);
        assert_eq!(v[0], 1.0);
        assert!((v[1] - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn heatmap_rejects_small_scales() {
        let coords = MarginGrid::square(4, 0).unwrap().coords(D.0, D.1);
        let centers = Tensor::zeros([1, 1, 2], D);
        let scales = Tensor::from_slice(&[1e-4f64]).view([1, 1]);
        assert!(matches!(gaussian_heatmaps(&coords, &centers, &scales), Err(Error::Invariant(_))));
    }

    #[test]
    fn heatmap_mass_grows_with_scale() {
        let coords = MarginGrid::square(16, 2).unwrap().coords(D.0, D.1);
        let centers = Tensor::from_slice(&[0.1f64, -0.2]).view([1, 1, 2]);
        let mut last = 0.0;
        for s in [0.01, 0.05, 0.1, 0.3, 0.8] {
            let scales = Tensor::from_slice(&[s]).view([1, 1]);
            let mass = gaussian_heatmaps(&coords, &centers, &scales).unwrap().values.sum(Kind::Double).double_value(&[]);
            assert!(mass > last);
            last = mass;
        }
    }

    fn zero_encoder(n_points: usize, out_dim: usize) -> (nn::VarStore, PositionalEncoder) {
        let vs = nn::VarStore::new(Device::Cpu);
        let enc = PositionalEncoder::new(vs.root(), n_points, out_dim).unwrap();
        (vs, enc)
    }

    #[test]
    fn zero_projection_gives_sin0_cos1() {
        let (mut vs, enc) = zero_encoder(3, 6);
        vs.double();
        tch::no_grad(|| {
            for (_, mut t) in vs.variables() {
                let _ = t.zero_();
            }
        });
        let coords = MarginGrid::square(4, 1).unwrap().coords(D.0, D.1);
        let pts = Tensor::randn([2, 3, 2], D);
        let out = enc.forward(&coords, &pts).unwrap();
        assert_eq!(out.size(), vec![2, 6, 6, 6]);
        assert_eq!(out.narrow(1, 0, 3).abs().max().double_value(&[]), 0.0);
        assert_eq!(out.narrow(1, 3, 3).min().double_value(&[]), 1.0);
    }

    #[test]
    fn odd_width_is_rejected() {
        let vs = nn::VarStore::new(Device::Cpu);
        assert!(PositionalEncoder::new(vs.root(), 1, 5).is_err());
    }

    #[test]
    fn single_point_identity_projection() {
        let (mut vs, enc) = zero_encoder(1, 2);
        vs.double();
        tch::no_grad(|| {
            let mut ws = enc.proj().ws.shallow_clone();
            let _ = ws.copy_(&Tensor::from_slice(&[1.0f64, 0.0]).view([1, 2]));
            let _ = enc.proj().bs.as_ref().unwrap().shallow_clone().zero_();
        });
        let grid = MarginGrid::square(4, 0).unwrap();
        let coords = grid.coords(D.0, D.1);
        let point = [0.3f64, -0.1];
        let out = enc.forward(&coords, &Tensor::from_slice(&point).view([1, 1, 2])).unwrap();
        for (i, j) in [(0usize, 0usize), (1, 2), (3, 3)] {
            let expected = (PI * (grid.xs[j] - point[0])).sin();
            let got = out.double_value(&[0, 0, i as i64, j as i64]);
            assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        }
    }

    #[test]
    fn upsample_crop_margin_arithmetic() {
        let x = Tensor::zeros([1, 2, 52, 52], D);
        let y = upsample_and_crop(&x, 10, Interpolation::Bilinear).unwrap();
        assert_eq!(y.size(), vec![1, 2, 84, 84]);
        let z = upsample_and_crop(&y, 10, Interpolation::Nearest).unwrap();
        assert_eq!(z.size(), vec![1, 2, 148, 148]);
        assert!(upsample_and_crop(&Tensor::zeros([1, 1, 20, 20], D), 10, Interpolation::Bilinear).is_err());
    }

    #[test]
    fn constants_survive_upsampling() {
        let x = Tensor::full([1, 1, 12, 12], 0.7, D);
        for mode in [Interpolation::Bilinear, Interpolation::Nearest] {
            let y = upsample_and_crop(&x, 2, mode).unwrap();
            assert!((y - 0.7).abs().max().double_value(&[]) < 1e-15);
        }
    }

    #[test]
    fn impulse_stays_centered() {
        // Interior 8 with margin 2; impulse at the interior center pixel block.
        let x = Tensor::zeros([1, 1, 12, 12], D);
        let _ = x.get(0).get(0).narrow(0, 5, 2).narrow(1, 5, 2).fill_(1.0);
        let y = upsample_and_crop(&x, 2, Interpolation::Bilinear).unwrap();
        let interior = crop_margin(&y, 2).squeeze();
        let v = to_vec_f64(&interior);
        let n = 16usize;
        let (mut mass, mut cy, mut cx) = (0.0, 0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                mass += v[i * n + j];
                cy += v[i * n + j] * i as f64;
                cx += v[i * n + j] * j as f64;
            }
        }
        let center = (n as f64 - 1.0) / 2.0;
        assert!((cy / mass - center).abs() < 1.0 && (cx / mass - center).abs() < 1.0);
    }

    #[test]
    fn downsample_keeps_margin() {
        let x = Tensor::ones([1, 1, 148, 148], D);
        let y = downsample_with_margin(&x, 10).unwrap();
        assert_eq!(y.size(), vec![1, 1, 84, 84]);
        // Interior and the covered part of the margin are 1, the rest is 0.
        assert_eq!(y.double_value(&[0, 0, 42, 42]), 1.0);
        assert_eq!(y.double_value(&[0, 0, 5, 42]), 1.0);
        assert_eq!(y.double_value(&[0, 0, 4, 42]), 0.0);
        let odd = downsample_with_margin(&Tensor::ones([1, 1, 22, 22], D), 3).unwrap();
        assert_eq!(odd.size(), vec![1, 1, 14, 14]);
    }
}
