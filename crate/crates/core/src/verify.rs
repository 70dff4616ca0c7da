//! Self-checks: every loss against naive loops, autodiff against finite
//! differences, the mask simplex, translation equivariance, margin
//! arithmetic, the published hyperparameters, the R1 linear case and
//! training determinism.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tch::{nn, Device, Kind, Tensor};

use crate::adversary::{area_loss, concentration_loss, discriminator_gan_loss, generator_gan_loss, r1_gradient_penalty};
use crate::config::{lambda_con_for_parts, DatasetPreset, Interpolation, ScaleFormula, SegConfig, TrainConfig, SCALE_EPS};
use crate::corpus::{synth_benchmark, BenchmarkSpec};
use crate::error::Result;
use crate::fields::{gaussian_heatmaps, relative_positional_encoding, upsample_and_crop, MarginGrid, PositionalEncoder};
use crate::latent::{part_stats, LatentBatch};
use crate::nn_util::{init_var_store, to_vec_f64};
use crate::trainer::{training_step, GanModel, TrainState};

const F64: (Kind, Device) = (Kind::Double, Device::Cpu);

/// Outcome of one self-check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!("{} {} ({:.1}s): {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.seconds, self.detail)
    }
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult { name: name.into(), passed, detail, seconds: start.elapsed().as_secs_f64() }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn tensor(values: &[f64], shape: &[i64]) -> Tensor {
    Tensor::from_slice(values).view(shape)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Pixel-center coordinates of an `h x w` interior, `[(x, y)]` row-major.
fn pixel_coords(h: usize, w: usize) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            out.push([(2 * j + 1) as f64 / w as f64 - 1.0, (2 * i + 1) as f64 / h as f64 - 1.0]);
        }
    }
    out
}

fn loop_concentration(m: &[f64], c: &[f64], b: usize, k: usize, h: usize, w: usize) -> f64 {
    let coords = pixel_coords(h, w);
    let mut total = 0.0;
    for bi in 0..b {
        for ki in 0..k {
            let base = (bi * k + ki) * h * w;
            let mass: f64 = m[base..base + h * w].iter().sum::<f64>() + crate::config::MASS_EPS;
            let (cx, cy) = (c[(bi * k + ki) * 2], c[(bi * k + ki) * 2 + 1]);
            for (p, xy) in coords.iter().enumerate() {
                total += m[base + p] / mass * ((xy[0] - cx).powi(2) + (xy[1] - cy).powi(2));
            }
        }
    }
    total / b as f64
}

fn loop_area(hm: &[f64], m: &[f64], b: usize, k: usize, hw: usize) -> f64 {
    let mut total = 0.0;
    for bk in 0..b * k {
        let sh: f64 = hm[bk * hw..(bk + 1) * hw].iter().sum();
        let sm: f64 = m[bk * hw..(bk + 1) * hw].iter().sum();
        total += (sh - sm).max(0.0);
    }
    total / b as f64
}

/// Losses against loop implementations on random small tensors, 100 cases each, tolerance 1e-8.
pub fn check_formula_oracles(cases: usize) -> CheckResult {
    timed("formula oracles (losses vs naive loops, abs 1e-8)", || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst = [0.0f64; 5];
        for _ in 0..cases {
            let b = rng.random_range(1..4usize);
            let k = rng.random_range(1..5usize);
            let (h, w) = (rng.random_range(4..8usize), rng.random_range(4..8usize));

            let s = uniform(&mut rng, b, -6.0, 6.0);
            let s2 = uniform(&mut rng, b, -6.0, 6.0);
            let g = generator_gan_loss(&tensor(&s, &[b as i64])).double_value(&[]);
            let g_loop = s.iter().map(|v| softplus(-v)).sum::<f64>() / b as f64;
            worst[0] = worst[0].max((g - g_loop).abs());
            let d = discriminator_gan_loss(&tensor(&s, &[b as i64]), &tensor(&s2, &[b as i64])).double_value(&[]);
            let d_loop = (s2.iter().map(|v| softplus(*v)).sum::<f64>() + s.iter().map(|v| softplus(-v)).sum::<f64>()) / b as f64;
            worst[1] = worst[1].max((d - d_loop).abs());

            // Quadratic critic D(x) = sum(a x + q x^2): gradient a + 2 q x.
            let n = 3 * h * w;
            let (a, q) = (uniform(&mut rng, n, -1.0, 1.0), uniform(&mut rng, n, -1.0, 1.0));
            let x = uniform(&mut rng, b * n, -1.0, 1.0);
            let (at, qt) = (tensor(&a, &[1, 3, h as i64, w as i64]), tensor(&q, &[1, 3, h as i64, w as i64]));
            let critic = |x: &Tensor| Ok((x * &at + x.square() * &qt).sum_dim_intlist(&[1i64, 2, 3][..], false, Kind::Double));
            let gp = r1_gradient_penalty(critic, &tensor(&x, &[b as i64, 3, h as i64, w as i64]))?.double_value(&[]);
            let mut gp_loop = 0.0;
            for bi in 0..b {
                for i in 0..n {
                    gp_loop += (a[i] + 2.0 * q[i] * x[bi * n + i]).powi(2);
                }
            }
            worst[2] = worst[2].max((gp - gp_loop / b as f64).abs());

            let m = uniform(&mut rng, b * k * h * w, 0.0, 1.0);
            let c = uniform(&mut rng, b * k * 2, -1.0, 1.0);
            let shape = [b as i64, k as i64, h as i64, w as i64];
            let grid = MarginGrid::new(h, w, 0)?.coords(Kind::Double, Device::Cpu);
            let con = concentration_loss(&tensor(&m, &shape), &tensor(&c, &[b as i64, k as i64, 2]), &grid)?.double_value(&[]);
            worst[3] = worst[3].max((con - loop_concentration(&m, &c, b, k, h, w)).abs());

            let hm = uniform(&mut rng, b * k * h * w, 0.0, 1.0);
            let area = area_loss(&tensor(&hm, &shape), &tensor(&m, &shape))?.double_value(&[]);
            worst[4] = worst[4].max((area - loop_area(&hm, &m, b, k, h * w)).abs());
        }
        let max = worst.iter().cloned().fold(0.0, f64::max);
        Ok((
            max <= 1e-8,
            format!(
                "{cases} cases each; max abs error g_gan {:.1e}, d_gan {:.1e}, r1 {:.1e}, con {:.1e}, area {:.1e}",
                worst[0], worst[1], worst[2], worst[3], worst[4]
            ),
        ))
    })
}

/// Max over coordinates of `|autodiff - central difference| / max(|fd|, floor)`.
fn gradient_gap(input: &Tensor, f: &dyn Fn(&Tensor) -> Result<Tensor>, step: f64) -> Result<f64> {
    let x = input.detach().copy().set_requires_grad(true);
    let y = f(&x)?;
    let auto = to_vec_f64(&Tensor::run_backward(&[y], &[&x], false, false)[0]);
    let base = to_vec_f64(input);
    let shape = input.size();
    let mut worst = 0.0f64;
    let scale = auto.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-6);
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let fp = tch::no_grad(|| f(&tensor(&plus, &shape)))?.double_value(&[]);
        let fm = tch::no_grad(|| f(&tensor(&minus, &shape)))?.double_value(&[]);
        let fd = (fp - fm) / (2.0 * step);
        // Relative to the coordinate itself, with the gradient's overall scale as floor for near-zero entries.
        let denom = fd.abs().max(auto[i].abs()).max(1e-3 * scale);
        worst = worst.max((auto[i] - fd).abs() / denom);
    }
    Ok(worst)
}

/// Autodiff against central differences (step 1e-4, relative tolerance 1e-4).
pub fn check_gradients() -> CheckResult {
    timed("gradient suite (autodiff vs central differences, rel 1e-4)", || {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let step = 1e-4;
        let (b, k, h, w) = (2i64, 2i64, 5i64, 4i64);
        let n = (b * k * h * w) as usize;
        let grid = MarginGrid::new(h as usize, w as usize, 0)?.coords(Kind::Double, Device::Cpu);
        let masks = tensor(&uniform(&mut rng, n, 0.1, 1.0), &[b, k, h, w]);
        let centers = tensor(&uniform(&mut rng, (b * k * 2) as usize, -0.8, 0.8), &[b, k, 2]);
        let mut gaps = Vec::new();

        gaps.push(("con/masks", gradient_gap(&masks, &|m| concentration_loss(m, &centers, &grid), step)?));
        gaps.push(("con/centers", gradient_gap(&centers, &|c| concentration_loss(&masks, c, &grid), step)?));

        // Area: two parts above the hinge, two below, all at least 0.5 away from the kink.
        let mut hm = uniform(&mut rng, n, 0.0, 1.0);
        let m = to_vec_f64(&masks);
        let hw = (h * w) as usize;
        for part in 0..(b * k) as usize {
            let sm: f64 = m[part * hw..(part + 1) * hw].iter().sum();
            let target = if part % 2 == 0 { sm + 2.0 } else { sm - 2.0 };
            let sh: f64 = hm[part * hw..(part + 1) * hw].iter().sum();
            for v in &mut hm[part * hw..(part + 1) * hw] {
                *v *= target / sh;
            }
        }
        let hm = tensor(&hm, &[b, k, h, w]);
        gaps.push(("area/masks", gradient_gap(&masks, &|m| area_loss(&hm, m), step)?));
        gaps.push(("area/heatmaps", gradient_gap(&hm, &|x| area_loss(x, &masks), step)?));

        let weights = tensor(&uniform(&mut rng, n, -1.0, 1.0), &[b, k, h, w]);
        let scales = tensor(&uniform(&mut rng, (b * k) as usize, 0.3, 0.9), &[b, k]);
        let heat = |c: &Tensor, s: &Tensor| -> Result<Tensor> {
            Ok((gaussian_heatmaps(&grid, c, s)?.values * &weights).sum(Kind::Double))
        };
        gaps.push(("heatmap/centers", gradient_gap(&centers, &|c| heat(c, &scales), step)?));
        gaps.push(("heatmap/scales", gradient_gap(&scales, &|s| heat(&centers, s), step)?));

        let points = tensor(&uniform(&mut rng, (b * k * 4 * 2) as usize, -0.9, 0.9), &[b, k, 4, 2]);
        let (wc, ws) = (
            tensor(&uniform(&mut rng, (b * k * 2) as usize, -1.0, 1.0), &[b, k, 2]),
            tensor(&uniform(&mut rng, (b * k) as usize, -1.0, 1.0), &[b, k]),
        );
        let stats = |p: &Tensor| -> Result<Tensor> {
            let (c, s) = part_stats(p, ScaleFormula::Typeset, SCALE_EPS)?;
            Ok((c * &wc).sum(Kind::Double) + (s * &ws).sum(Kind::Double))
        };
        gaps.push(("part_stats/points", gradient_gap(&points, &stats, step)?));

        let worst = gaps.iter().map(|g| g.1).fold(0.0, f64::max);
        let detail = gaps.iter().map(|(n, g)| format!("{n} {g:.1e}")).collect::<Vec<_>>().join(", ");
        Ok((worst <= 1e-4, format!("max rel error: {detail}")))
    })
}

/// Per-pixel mask sums over `latents` samples from randomly initialized tiny generators.
pub fn check_simplex(latents: usize) -> CheckResult {
    timed("simplex invariant (mask sums = 1 +- 1e-6)", || {
        let cfg = TrainConfig::tiny();
        let per_model = 100;
        let mut worst = 0.0f64;
        let mut done = 0;
        let mut model_seed = 0;
        while done < latents {
            let model = GanModel::new(&cfg, model_seed)?;
            let count = per_model.min(latents - done);
            for chunk_start in (0..count).step_by(50) {
                let n = 50.min(count - chunk_start);
                let lat = LatentBatch::sample(&cfg, model_seed, chunk_start as u64, n, Kind::Float, Device::Cpu);
                let out = tch::no_grad(|| model.generate(&lat, true))?;
                let sums = out.masks.probs.to_kind(Kind::Double).sum_dim_intlist(1, false, Kind::Double);
                worst = worst.max((sums - 1.0).abs().max().double_value(&[]));
            }
            done += count;
            model_seed += 1;
        }
        Ok((worst <= 1e-6, format!("{latents} latents over {model_seed} random models; max |sum - 1| = {worst:.2e}")))
    })
}

/// Exact equivariance: encoding and heatmaps on a shifted grid with shifted points are bit-identical.
pub fn check_exact_equivariance() -> CheckResult {
    timed("equivariance (a): exact under common shift", || {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let grid = MarginGrid::square(8, 3)?;
        let vs = nn::VarStore::new(Device::Cpu);
        let enc = PositionalEncoder::new(vs.root() / "pe", 3, 8)?;
        init_var_store(&vs, 4);
        let mut all_equal = true;
        let mut cases = 0;
        for _ in 0..20 {
            // Points on the 1/16 lattice and shifts by whole pixels keep every difference exact.
            let pts: Vec<f64> = (0..6).map(|_| rng.random_range(-16i32..16) as f64 / 16.0).collect();
            let (sx, sy) = (rng.random_range(-4i32..=4) as f64 * grid.pitch_x(), rng.random_range(-4i32..=4) as f64 * grid.pitch_y());
            let shifted_pts: Vec<f64> = pts.chunks(2).flat_map(|p| [p[0] + sx, p[1] + sy]).collect();
            let shifted = grid.shifted(sx, sy);
            for kind in [Kind::Float, Kind::Double] {
                let (p0, p1) = (tensor(&pts, &[1, 3, 2]).to_kind(kind), tensor(&shifted_pts, &[1, 3, 2]).to_kind(kind));
                let (g0, g1) = (grid.coords(kind, Device::Cpu), shifted.coords(kind, Device::Cpu));
                let mut enc_local = enc.proj().clone_shallow();
                if kind == Kind::Double {
                    enc_local.ws = enc_local.ws.to_kind(kind);
                    enc_local.bs = enc_local.bs.map(|b| b.to_kind(kind));
                }
                let e0 = relative_positional_encoding(&g0, &p0, &enc_local);
                let e1 = relative_positional_encoding(&g1, &p1, &enc_local);
                let scales = Tensor::full([1, 3], 0.4, (kind, Device::Cpu));
                let h0 = gaussian_heatmaps(&g0, &p0, &scales)?.values;
                let h1 = gaussian_heatmaps(&g1, &p1, &scales)?.values;
                all_equal &= e0.equal(&e1) && h0.equal(&h1);
                cases += 1;
            }
        }
        Ok((all_equal, format!("{cases} shifted grids, f32 and f64, bit-identical: {all_equal}")))
    })
}

trait CloneShallow {
    fn clone_shallow(&self) -> Self;
}

impl CloneShallow for nn::Linear {
    fn clone_shallow(&self) -> Self {
        nn::Linear { ws: self.ws.shallow_clone(), bs: self.bs.as_ref().map(|b| b.shallow_clone()) }
    }
}

/// Mismatch energy between `shifted` and `base` translated by `(dy, dx)` pixels,
/// plus the normalized cross-correlation at every offset in `-r..=r` along x.
pub fn shift_statistics(base: &Tensor, shifted: &Tensor, dx: i64, dy: i64, r: i64) -> (f64, Vec<(i64, f64)>) {
    let s = base.size();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let window = |t: &Tensor, oy: i64, ox: i64| t.narrow(-2, r + oy, h - 2 * r).narrow(-1, r + ox, w - 2 * r).to_kind(Kind::Double);
    let target = window(shifted, 0, 0);
    let centered = &target - target.mean(Kind::Double);
    let energy = centered.square().sum(Kind::Double).double_value(&[]).max(1e-300);
    let mismatch = (&target - window(base, -dy, -dx)).square().sum(Kind::Double).double_value(&[]) / energy;
    let corr = (-r..=r)
        .map(|o| {
            let cand = window(base, -dy, -o);
            let cand = &cand - cand.mean(Kind::Double);
            let num = (&cand * &centered).sum(Kind::Double).double_value(&[]);
            let den = (cand.square().sum(Kind::Double).double_value(&[]) * energy).sqrt().max(1e-300);
            (o, num / den)
        })
        .collect();
    (mismatch, corr)
}

/// Approximate equivariance: shifting every point by one output pixel shifts the masks by one pixel.
pub fn check_approx_equivariance() -> CheckResult {
    timed("equivariance (b): one-pixel point shift, frozen statistics", || {
        // An 8x8 start grid is too coarse for sub-pixel shifts to survive upsampling; the toy schedule starts at 16x16.
        let cfg = TrainConfig::toy();
        let res = cfg.image_size();
        let pitch = 2.0 / res as f64;
        let mut worst_mismatch = 0.0f64;
        let mut peaks_ok = true;
        let mut details = Vec::new();
        for seed in 0..5u64 {
            let model = GanModel::new(&cfg, seed)?;
            let lat = LatentBatch::sample(&cfg, seed, 77, 4, Kind::Float, Device::Cpu);
            let masks = |shift: f64| -> Result<Tensor> {
                tch::no_grad(|| {
                    let mut layout = model.generator.points.layout(&lat)?;
                    if let Some(g) = &mut layout.geometry {
                        let delta = Tensor::from_slice(&[shift as f32, 0.0]);
                        g.points = &g.points + &delta;
                        g.centers = &g.centers + &delta;
                    }
                    Ok(model.generator.masks.generate(&layout, false)?.masks.probs)
                })
            };
            let (m0, m1) = (masks(0.0)?, masks(pitch)?);
            let (mismatch, corr) = shift_statistics(&m0, &m1, 1, 0, 3);
            let peak = corr.iter().cloned().fold((0, f64::MIN), |a, b| if b.1 > a.1 { b } else { a }).0;
            peaks_ok &= peak == 1;
            worst_mismatch = worst_mismatch.max(mismatch);
            details.push(format!("seed {seed}: peak {peak}, mismatch {:.2}%", 100.0 * mismatch));
        }
        Ok((peaks_ok && worst_mismatch < 0.05, details.join("; ")))
    })
}

/// Grid sizes and ranges along the default schedule.
pub fn check_margin_arithmetic() -> CheckResult {
    timed("margin arithmetic (52 -> 84 -> 148)", || {
        let cfg = TrainConfig::default();
        let m = cfg.margin_px;
        let mut ok = true;
        let mut sizes = Vec::new();
        let mut feature = Tensor::zeros([1, 1, 52, 52], F64);
        for &res in &cfg.resolution_schedule {
            let grid = MarginGrid::square(res, m)?;
            let expected = res + 2 * m;
            let (lo, hi) = grid.y_range();
            let bound = 1.0 + 2.0 * m as f64 / res as f64;
            ok &= grid.height() == expected && grid.width() == expected && lo == -bound && hi == bound;
            ok &= grid.ys[0] - grid.pitch_y() / 2.0 == -bound;
            if feature.size()[2] as usize != expected {
                let up = upsample_and_crop(&feature, m, Interpolation::Bilinear)?;
                ok &= up.size()[2] as usize == expected;
                feature = up;
            }
            sizes.push(grid.height());
        }
        ok &= sizes == [52, 52, 84, 148];
        Ok((ok, format!("grid sides {sizes:?}")))
    })
}

/// Default configuration against constants transcribed from the published hyperparameters.
pub fn check_hyperparameters() -> CheckResult {
    timed("hyperparameter fidelity", || {
        let c = TrainConfig::default();
        let s = SegConfig::default();
        let mut failures = Vec::new();
        let mut expect = |name: &str, got: f64, want: f64| {
            if got != want {
                failures.push(format!("{name}: {got} != {want}"));
            }
        };
        expect("lr_g", c.lr_g, 0.0001);
        expect("lr_d", c.lr_d, 0.0004);
        expect("beta1", c.beta1, 0.5);
        expect("beta2", c.beta2, 0.9);
        expect("lambda_gp", c.lambda_gp, 10.0);
        expect("n_per", c.n_per as f64, 4.0);
        expect("total_updates", c.total_updates as f64, 30_000.0);
        expect("margin_px", c.margin_px as f64, 10.0);
        expect("seg lr", s.lr, 0.0003);
        expect("seg beta1", s.beta1, 0.9);
        expect("seg beta2", s.beta2, 0.999);
        expect("seg iterations", s.iterations as f64, 10_000.0);
        // (preset, lambda_con, lambda_area, C_con, K, fixed sigma)
        let table = [
            (DatasetPreset::CelebaWild, 10.0, 1.0, 1.25, 8, 0.00725),
            (DatasetPreset::Taichi, 30.0, 1.0, 3.0, 10, 0.010),
            (DatasetPreset::Cub, 10.0, 1.0, 1.25, 8, 0.0016),
            (DatasetPreset::Flowers, 30.0, 1.0, 3.75, 8, 0.0065),
        ];
        for (p, lc, la, cc, k, sigma) in table {
            let name = format!("{p:?}");
            expect(&format!("{name} lambda_con"), p.lambda_con(), lc);
            expect(&format!("{name} lambda_area"), p.lambda_area(), la);
            expect(&format!("{name} C_con"), p.c_con(), cc);
            expect(&format!("{name} K"), p.parts() as f64, k as f64);
            expect(&format!("{name} fixed sigma"), p.fixed_sigma(), sigma);
            let cfg = TrainConfig::with_preset(p);
            expect(&format!("{name} preset lambda_con"), cfg.effective_lambda_con(), lc);
        }
        expect("lambda_con(1.25, 8)", lambda_con_for_parts(1.25, 8), 10.0);
        for k in [1usize, 4, 8, 12, 16, 32] {
            for (_, _, _, cc, _, _) in table {
                let cfg = TrainConfig { k, c_con: Some(cc), ..TrainConfig::default() };
                expect(&format!("lambda_con(K={k}, C={cc})"), cfg.effective_lambda_con(), cc * k as f64);
            }
        }
        if c.resolution_schedule != [32, 32, 64, 128] {
            failures.push(format!("schedule {:?}", c.resolution_schedule));
        }
        let ok = failures.is_empty();
        Ok((ok, if ok { "all constants match".into() } else { failures.join("; ") }))
    })
}

/// `D(x) = <a, x>` gives a penalty of exactly `|a|^2`.
pub fn check_r1_linear() -> CheckResult {
    timed("R1 analytic linear case (rel 1e-6)", || {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let a = tensor(&uniform(&mut rng, 3 * 8 * 8, -1.0, 1.0), &[1, 3, 8, 8]).to_kind(Kind::Float);
            let real = tensor(&uniform(&mut rng, 4 * 3 * 8 * 8, -1.0, 1.0), &[4, 3, 8, 8]).to_kind(Kind::Float);
            let critic = |x: &Tensor| Ok((x * &a).sum_dim_intlist(&[1i64, 2, 3][..], false, Kind::Float));
            let gp = r1_gradient_penalty(critic, &real)?.double_value(&[]);
            let want = a.to_kind(Kind::Double).square().sum(Kind::Double).double_value(&[]);
            worst = worst.max((gp - want).abs() / want);
        }
        Ok((worst <= 1e-6, format!("max rel error {worst:.2e}")))
    })
}

/// Two identical runs give identical loss records; a saved checkpoint reproduces inference outputs.
pub fn check_determinism(steps: u64) -> CheckResult {
    timed("determinism (loss records, checkpoint round-trip)", || {
        let cfg = TrainConfig { total_updates: steps as usize, seed: 5, ..TrainConfig::tiny() };
        let data = synth_benchmark(&BenchmarkSpec { n: 64, resolution: cfg.image_size(), seed: 2, ..Default::default() })?;
        let run = || -> Result<(Vec<crate::adversary::LossReport>, TrainState)> {
            let mut state = TrainState::new(&cfg)?;
            let mut out = Vec::new();
            for _ in 0..steps {
                out.push(training_step(&mut state, &data)?);
            }
            Ok((out, state))
        };
        let (a, state) = run()?;
        let (b, _) = run()?;
        let identical = a.iter().zip(&b).all(|(x, y)| x.to_json_line() == y.to_json_line() && x == y) && a.len() == b.len();

        let dir = tempfile_dir()?;
        let path = dir.join("roundtrip.pt");
        state.save(&path)?;
        let loaded = TrainState::load(&path)?;
        let lat = LatentBatch::sample(&cfg, 9, 9, 4, Kind::Float, Device::Cpu);
        let before = tch::no_grad(|| state.model.generate(&lat, false))?;
        let after = tch::no_grad(|| loaded.model.generate(&lat, false))?;
        let same_out = before.image.equal(&after.image) && before.masks.probs.equal(&after.masks.probs);
        let real = data.batch(&[0, 1], Kind::Float);
        let same_disc = state.model.discriminator.logits(&real).equal(&loaded.model.discriminator.logits(&real));
        let same_step = loaded.step == state.step && loaded.opt_g.steps_taken() == state.opt_g.steps_taken();
        let _ = std::fs::remove_dir_all(&dir);
        Ok((
            identical && same_out && same_disc && same_step,
            format!("{} records identical: {identical}; checkpoint outputs identical: {}", a.len(), same_out && same_disc && same_step),
        ))
    })
}

fn tempfile_dir() -> Result<std::path::PathBuf> {
    let dir = std::env::temp_dir().join(format!("partseg-verify-{}-{}", std::process::id(), rand::rng().random::<u64>()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// The full suite in a fixed order.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        check_formula_oracles(100),
        check_gradients(),
        check_simplex(1000),
        check_exact_equivariance(),
        check_approx_equivariance(),
        check_margin_arithmetic(),
        check_hyperparameters(),
        check_r1_linear(),
        check_determinism(100),
    ]
}
