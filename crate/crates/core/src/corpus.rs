//! Image collections: folder ingestion, the procedural benchmark, and the
//! shared on-disk layout (`images/`, `labels/`, `manifest.json`, `keypoints.csv`).

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};
use crate::imageio;
use crate::latent::derive_seed;
use crate::nn_util::to_vec_f64;

/// Header stored next to every collection written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub resolution: usize,
    /// Number of non-background classes in the label maps (0 when unlabeled).
    pub num_parts: usize,
    pub source: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub checkpoint_hash: Option<String>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub spec: Option<serde_json::Value>,
}

/// Same-resolution images with optional label maps and keypoints, indexed deterministically.
#[derive(Debug)]
pub struct Dataset {
    /// `[N, 3, H, W]`, bytes.
    images: Tensor,
    /// `[N, H, W]`, bytes with values in `0..=num_parts`.
    pub labels: Option<Tensor>,
    /// `[N, P, 2]` pixel coordinates `(x, y)`, pixel centers at integer positions.
    pub keypoints: Option<Tensor>,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Option<Tensor>, keypoints: Option<Tensor>, manifest: Manifest) -> Result<Self> {
        let s = images.size();
        if s.len() != 4 || s[1] != 3 || s[2] != s[3] {
            return Err(Error::Dataset(format!("images must be [N, 3, S, S], got {s:?}")));
        }
        if let Some(l) = &labels {
            if l.size() != [s[0], s[2], s[3]] {
                return Err(Error::Dataset(format!("labels {:?} do not match images {s:?}", l.size())));
            }
        }
        if let Some(k) = &keypoints {
            let ks = k.size();
            if ks.len() != 3 || ks[0] != s[0] || ks[2] != 2 {
                return Err(Error::Dataset(format!("keypoints {ks:?} do not match images {s:?}")));
            }
        }
        let manifest = Manifest { count: s[0] as usize, resolution: s[2] as usize, ..manifest };
        Ok(Self { images: images.to_kind(Kind::Uint8), labels, keypoints, manifest })
    }

    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn resolution(&self) -> usize {
        self.manifest.resolution
    }

    pub fn images_u8(&self) -> &Tensor {
        &self.images
    }

    /// Images at `indices` mapped to `[-1, 1]`.
    pub fn batch(&self, indices: &[i64], kind: Kind) -> Tensor {
        imageio::from_u8(&self.images.index_select(0, &Tensor::from_slice(indices)), kind)
    }

    pub fn label_batch(&self, indices: &[i64]) -> Option<Tensor> {
        self.labels.as_ref().map(|l| l.index_select(0, &Tensor::from_slice(indices)).to_kind(Kind::Int64))
    }

    /// `batch` distinct indices drawn from a stream determined by `(seed, step)`.
    pub fn sample_indices(&self, seed: u64, step: u64, batch: usize) -> Vec<i64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, step, 0xda7a]));
        rand::seq::index::sample(&mut rng, self.len(), batch.min(self.len()))
            .into_iter()
            .map(|i| i as i64)
            .collect()
    }

    /// Writes the collection to `dir`, replacing any previous content in one rename.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tmp = sibling(dir, ".partial");
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(tmp.join("images"))?;
        if self.labels.is_some() {
            fs::create_dir_all(tmp.join("labels"))?;
        }
        for i in 0..self.len() as i64 {
            imageio::save_rgb(&tmp.join("images").join(stem_png(i)), &self.images.get(i))?;
            if let Some(l) = &self.labels {
                imageio::save_labels(&tmp.join("labels").join(stem_png(i)), &l.get(i))?;
            }
        }
        if let Some(k) = &self.keypoints {
            let (n, p) = (k.size()[0] as usize, k.size()[1] as usize);
            let v = to_vec_f64(k);
            let mut csv = String::from("index,part,x,y\n");
            for i in 0..n {
                for j in 0..p {
                    let o = (i * p + j) * 2;
                    csv.push_str(&format!("{i},{},{},{}\n", j + 1, v[o], v[o + 1]));
                }
            }
            fs::write(tmp.join("keypoints.csv"), csv)?;
        }
        fs::write(tmp.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::rename(&tmp, dir)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let n = manifest.count as i64;
        let mut images = Vec::with_capacity(manifest.count);
        let mut labels = Vec::new();
        let has_labels = dir.join("labels").is_dir();
        for i in 0..n {
            images.push(imageio::load_rgb(&dir.join("images").join(stem_png(i)))?);
            if has_labels {
                labels.push(imageio::load_labels(&dir.join("labels").join(stem_png(i)))?);
            }
        }
        let s = manifest.resolution as i64;
        let images = if n == 0 { Tensor::zeros([0, 3, s, s], (Kind::Uint8, tch::Device::Cpu)) } else { Tensor::stack(&images, 0) };
        let labels = match (has_labels, n) {
            (false, _) => None,
            (true, 0) => Some(Tensor::zeros([0, s, s], (Kind::Uint8, tch::Device::Cpu))),
            (true, _) => Some(Tensor::stack(&labels, 0)),
        };
        let keypoints = match fs::read_to_string(dir.join("keypoints.csv")) {
            Ok(text) => Some(parse_keypoints(&text, manifest.count, manifest.num_parts)?),
            Err(_) => None,
        };
        Self::new(images, labels, keypoints, manifest)
    }

    /// Ground-truth foreground (`label != 0`), `[N, H, W]` booleans.
    pub fn foreground(&self) -> Option<Tensor> {
        self.labels.as_ref().map(|l| l.ne(0))
    }
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    dir.with_file_name(name)
}

fn stem_png(i: i64) -> String {
    format!("{i:05}.png")
}

fn parse_keypoints(text: &str, n: usize, p: usize) -> Result<Tensor> {
    let mut out = vec![f64::NAN; n * p * 2];
    for (line_no, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Dataset(format!("keypoints.csv line {} is malformed", line_no + 1));
        if f.len() != 4 {
            return Err(bad());
        }
        let i: usize = f[0].parse().map_err(|_| bad())?;
        let j: usize = f[1].parse().map_err(|_| bad())?;
        if i >= n || j == 0 || j > p {
            return Err(bad());
        }
        let o = (i * p + j - 1) * 2;
        out[o] = f[2].parse().map_err(|_| bad())?;
        out[o + 1] = f[3].parse().map_err(|_| bad())?;
    }
    Ok(Tensor::from_slice(&out).view([n as i64, p as i64, 2]))
}

/// Loads up to `limit` images from `path` (sorted by file name), center-cropped
/// to a square and resized to `resolution`. Undecodable files are skipped with a warning.
pub fn ingest_folder(path: &Path, resolution: usize, limit: Option<usize>) -> Result<Dataset> {
    let mut entries: Vec<PathBuf> =
        fs::read_dir(path)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Dataset(format!("{} contains no files", path.display())));
    }
    let limit = limit.unwrap_or(usize::MAX);
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for file in &entries {
        if images.len() >= limit {
            break;
        }
        match image::open(file) {
            Ok(img) => {
                let rgb = img.to_rgb8();
                let (w, h) = rgb.dimensions();
                let side = w.min(h);
                let cropped = image::imageops::crop_imm(&rgb, (w - side) / 2, (h - side) / 2, side, side).to_image();
                let sized = if side as usize == resolution {
                    cropped
                } else {
                    image::imageops::resize(&cropped, resolution as u32, resolution as u32, FilterType::Triangle)
                };
                let r = resolution as i64;
                images.push(Tensor::from_slice(sized.as_raw()).view([r, r, 3]).permute([2, 0, 1]).contiguous());
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", file.display());
                skipped.push(file.display().to_string());
            }
        }
    }
    if images.is_empty() {
        return Err(Error::Dataset(format!("no decodable images in {} (skipped {})", path.display(), skipped.len())));
    }
    let manifest = Manifest {
        count: images.len(),
        resolution,
        num_parts: 0,
        source: format!("folder:{}", path.display()),
        seed: None,
        checkpoint_hash: None,
        seeds: Vec::new(),
        spec: None,
    };
    Dataset::new(Tensor::stack(&images, 0), None, None, manifest)
}

/// Parameters of the procedural benchmark: a blob figure over a wavy background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    /// Number of parts, at most 4 (body, head, two arms).
    pub parts: usize,
    pub n: usize,
    pub resolution: usize,
    pub seed: u64,
    /// Maximum figure translation per axis, as a fraction of the image side.
    pub translate: f64,
    pub scale_jitter: f64,
    /// Maximum rotation in radians.
    pub rotation_jitter: f64,
    pub color_jitter: f64,
    /// Width of the soft shape edge, pixels.
    pub feather_px: f64,
    /// Sinusoid amplitude of the background texture.
    pub texture_amplitude: f64,
    /// How far (fraction of the side) a shape may extend beyond the frame before resampling.
    pub overflow_tolerance: f64,
    pub max_retries: usize,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            parts: 2,
            n: 5000,
            resolution: 64,
            seed: 0,
            translate: 0.18,
            scale_jitter: 0.1,
            rotation_jitter: 0.15,
            color_jitter: 0.08,
            feather_px: 2.0,
            texture_amplitude: 0.12,
            overflow_tolerance: 0.0,
            max_retries: 64,
        }
    }
}

struct PartTemplate {
    center: [f64; 2],
    axes: [f64; 2],
    color: [f64; 3],
}

const TEMPLATES: [PartTemplate; 4] = [
    PartTemplate { center: [0.0, 0.08], axes: [0.15, 0.21], color: [0.80, 0.22, 0.20] },
    PartTemplate { center: [0.0, -0.23], axes: [0.10, 0.10], color: [0.96, 0.82, 0.55] },
    PartTemplate { center: [-0.21, 0.04], axes: [0.05, 0.14], color: [0.20, 0.45, 0.90] },
    PartTemplate { center: [0.21, 0.04], axes: [0.05, 0.14], color: [0.20, 0.70, 0.35] },
];

/// Per-sample draw of the benchmark's random factors.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleParams {
    /// Figure origin in pixels.
    pub origin: [f64; 2],
    pub scale: f64,
    pub rotation: f64,
    pub colors: Vec<[f64; 3]>,
    pub bg_base: [f64; 3],
    /// `(fx, fy, phase)` per wave, frequencies in cycles per image.
    pub waves: [[f64; 3]; 3],
    pub wave_tint: [f64; 3],
}

/// One rendered sample: bytes `[3, S, S]`, labels `[S, S]` and part keypoints in pixels.
#[derive(Debug)]
pub struct RenderedSample {
    pub image: Vec<u8>,
    pub labels: Vec<u8>,
    pub keypoints: Vec<[f64; 2]>,
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.parts == 0 || self.parts > TEMPLATES.len() {
            return Err(Error::config("parts", format!("must be in 1..={}", TEMPLATES.len())));
        }
        if self.resolution < 8 {
            return Err(Error::config("resolution", "must be at least 8"));
        }
        if !(self.feather_px > 0.0) {
            return Err(Error::config("feather_px", "must be positive"));
        }
        Ok(())
    }

    pub fn draw_params(&self, rng: &mut impl Rng) -> SampleParams {
        let s = self.resolution as f64;
        let mut sym = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let origin = [(s - 1.0) / 2.0 + sym(self.translate) * s, (s - 1.0) / 2.0 + sym(self.translate) * s];
        let scale = 1.0 + sym(self.scale_jitter);
        let rotation = sym(self.rotation_jitter);
        let colors = TEMPLATES[..self.parts]
            .iter()
            .map(|t| t.color.map(|c| (c + sym(self.color_jitter)).clamp(0.0, 1.0)))
            .collect();
        let bg_base = [0.0; 3].map(|_: f64| rng.random_range(0.25..0.65));
        let mut waves = [[0.0; 3]; 3];
        for w in &mut waves {
            let angle = rng.random_range(0.0..2.0 * PI);
            let freq = rng.random_range(0.5..2.0);
            *w = [freq * angle.cos(), freq * angle.sin(), rng.random_range(0.0..2.0 * PI)];
        }
        let wave_tint = [0.0; 3].map(|_: f64| rng.random_range(0.5..1.0));
        SampleParams { origin, scale, rotation, colors, bg_base, waves, wave_tint }
    }

    /// Whether every part's bounding circle stays inside the frame (within the tolerance).
    pub fn fits(&self, p: &SampleParams) -> bool {
        let s = self.resolution as f64;
        let tol = self.overflow_tolerance * s;
        TEMPLATES[..self.parts].iter().all(|t| {
            let c = part_center(t, p, s);
            let r = t.axes[0].max(t.axes[1]) * p.scale * s + self.feather_px;
            c.iter().all(|&v| v - r >= -tol && v + r <= s - 1.0 + tol)
        })
    }

    pub fn render(&self, p: &SampleParams) -> RenderedSample {
        let n = self.resolution;
        let s = n as f64;
        let k = self.parts;
        let mut image = vec![0u8; 3 * n * n];
        let mut labels = vec![0u8; n * n];
        let mut sums = vec![[0.0f64; 3]; k];
        let (sin, cos) = p.rotation.sin_cos();
        for y in 0..n {
            for x in 0..n {
                let (px, py) = (x as f64, y as f64);
                let mut color = [0.0; 3];
                let texture: f64 = p
                    .waves
                    .iter()
                    .map(|w| (2.0 * PI * (w[0] * px + w[1] * py) / s + w[2]).sin())
                    .sum::<f64>()
                    * self.texture_amplitude;
                for c in 0..3 {
                    color[c] = p.bg_base[c] + texture * p.wave_tint[c];
                }
                // Layer weights: part j is covered by every later part.
                let mut weights = vec![0.0; k + 1];
                let mut remaining = 1.0;
                for j in (0..k).rev() {
                    let t = &TEMPLATES[j];
                    let c = part_center(t, p, s);
                    let (dx, dy) = (px - c[0], py - c[1]);
                    let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
                    let (a, b) = (t.axes[0] * p.scale * s, t.axes[1] * p.scale * s);
                    let r = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
                    let sd = (r - 1.0) * a.min(b);
                    let alpha = (0.5 - sd / self.feather_px).clamp(0.0, 1.0);
                    weights[j + 1] = alpha * remaining;
                    remaining *= 1.0 - alpha;
                }
                weights[0] = remaining;
                for c in 0..3 {
                    let mut v = weights[0] * color[c];
                    for j in 0..k {
                        v += weights[j + 1] * p.colors[j][c];
                    }
                    image[(c * n + y) * n + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
                let mut best = 0;
                for j in 1..=k {
                    if weights[j] > weights[best] {
                        best = j;
                    }
                }
                labels[y * n + x] = best as u8;
                if best > 0 {
                    sums[best - 1][0] += px;
                    sums[best - 1][1] += py;
                    sums[best - 1][2] += 1.0;
                }
            }
        }
        let keypoints = sums
            .iter()
            .map(|t| if t[2] > 0.0 { [t[0] / t[2], t[1] / t[2]] } else { [f64::NAN, f64::NAN] })
            .collect();
        RenderedSample { image, labels, keypoints }
    }

    /// Sample `index`, resampling the random factors while a part overflows the frame or vanishes.
    pub fn sample(&self, index: usize) -> Result<RenderedSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, index as u64]));
        for _ in 0..=self.max_retries {
            let params = self.draw_params(&mut rng);
            if !self.fits(&params) {
                continue;
            }
            let out = self.render(&params);
            if out.keypoints.iter().all(|k| k[0].is_finite()) {
                return Ok(out);
            }
        }
        Err(Error::Dataset(format!("sample {index}: no valid layout after {} retries", self.max_retries)))
    }
}

fn part_center(t: &PartTemplate, p: &SampleParams, s: f64) -> [f64; 2] {
    let (sin, cos) = p.rotation.sin_cos();
    let (cx, cy) = (t.center[0] * p.scale * s, t.center[1] * p.scale * s);
    [p.origin[0] + cos * cx - sin * cy, p.origin[1] + sin * cx + cos * cy]
}

/// Renders `spec.n` samples of the procedural benchmark.
pub fn synth_benchmark(spec: &BenchmarkSpec) -> Result<Dataset> {
    spec.validate()?;
    let (n, r, p) = (spec.n as i64, spec.resolution as i64, spec.parts as i64);
    let mut images = Vec::with_capacity(spec.n * 3 * spec.resolution.pow(2));
    let mut labels = Vec::with_capacity(spec.n * spec.resolution.pow(2));
    let mut keypoints = Vec::with_capacity(spec.n * spec.parts * 2);
    for i in 0..spec.n {
        let s = spec.sample(i)?;
        images.extend_from_slice(&s.image);
        labels.extend_from_slice(&s.labels);
        keypoints.extend(s.keypoints.iter().flat_map(|k| k.iter().copied()));
    }
    let manifest = Manifest {
        count: spec.n,
        resolution: spec.resolution,
        num_parts: spec.parts,
        source: "synthetic".into(),
        seed: Some(spec.seed),
        checkpoint_hash: None,
        seeds: Vec::new(),
        spec: Some(serde_json::to_value(spec)?),
    };
    Dataset::new(
        Tensor::from_slice(&images).view([n, 3, r, r]),
        Some(Tensor::from_slice(&labels).view([n, r, r])),
        Some(Tensor::from_slice(&keypoints).view([n, p, 2])),
        manifest,
    )
}
