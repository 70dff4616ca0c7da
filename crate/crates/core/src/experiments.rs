//! Training-scale checks on the synthetic benchmark: the distilled
//! segmenter's quality, and the direction of the regularizer ablations.

use std::collections::VecDeque;
use std::time::Instant;

use tch::{Kind, Tensor};

use crate::config::{SegConfig, TrainConfig};
use crate::corpus::{synth_benchmark, BenchmarkSpec, Dataset};
use crate::distill::{synthesize_pairs, train_segmenter, PairSource, Segmenter};
use crate::error::Result;
use crate::eval::{evaluate, LandmarkNorm, MetricReport, Predictions};
use crate::nn_util::to_vec_i64;
use crate::trainer::{train_gan, GanModel, TrainOutputs};
use crate::verify::CheckResult;

/// Sizes of a toy run.
#[derive(Debug, Clone)]
pub struct ExperimentScale {
    pub name: String,
    pub train: TrainConfig,
    pub images: usize,
    pub pairs: usize,
    pub seg_iterations: usize,
    pub eval_images: usize,
    pub seeds: Vec<u64>,
}

impl ExperimentScale {
    /// 64x64 images with the 16/16/32/64 schedule.
    pub fn full() -> Self {
        Self {
            name: "full".into(),
            train: TrainConfig::toy(),
            images: 5000,
            pairs: 2000,
            seg_iterations: 2000,
            eval_images: 500,
            seeds: vec![0, 1, 2],
        }
    }

    /// Same counts at 32x32, for CPU-only machines.
    pub fn half() -> Self {
        Self { name: "half".into(), train: TrainConfig::toy_half(), ..Self::full() }
    }

    /// Plumbing check only; far too short to learn anything.
    pub fn smoke() -> Self {
        Self {
            name: "smoke".into(),
            train: TrainConfig { total_updates: 20, ..TrainConfig::tiny() },
            images: 64,
            pairs: 32,
            seg_iterations: 20,
            eval_images: 32,
            seeds: vec![0],
        }
    }

    /// `PARTSEG_SCALE` picks `full`, `half` (default) or `smoke`; `PARTSEG_SEEDS`,
    /// `PARTSEG_GAN_UPDATES` and `PARTSEG_SEG_ITERS` override individual sizes.
    pub fn from_env() -> Self {
        let mut s = match std::env::var("PARTSEG_SCALE").as_deref() {
            Ok("full") => Self::full(),
            Ok("smoke") => Self::smoke(),
            _ => Self::half(),
        };
        let num = |key: &str| std::env::var(key).ok().and_then(|v| v.parse::<usize>().ok());
        if let Some(n) = num("PARTSEG_SEEDS") {
            s.seeds = (0..n as u64).collect();
        }
        if let Some(n) = num("PARTSEG_GAN_UPDATES") {
            s.train.total_updates = n;
        }
        if let Some(n) = num("PARTSEG_SEG_ITERS") {
            s.seg_iterations = n;
        }
        s
    }

    fn benchmark(&self, seed: u64, n: usize) -> Result<Dataset> {
        synth_benchmark(&BenchmarkSpec { n, resolution: self.train.image_size(), seed, ..Default::default() })
    }
}

/// Metrics of one toy pipeline run.
#[derive(Debug, Clone)]
pub struct ToyOutcome {
    pub seed: u64,
    pub foreground_iou: f64,
    pub landmark_error_percent: f64,
    pub seconds: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn train_model(scale: &ExperimentScale, cfg: &TrainConfig, seed: u64) -> Result<GanModel> {
    let data = scale.benchmark(seed, scale.images)?;
    let cfg = TrainConfig { seed, ..cfg.clone() };
    let state = train_gan(&cfg, &data, &TrainOutputs::default(), |_| {})?;
    Ok(state.model)
}

/// Segmenter predictions for every image of `ds`.
pub fn predict(seg: &Segmenter, ds: &Dataset) -> Result<Predictions> {
    let n = ds.len() as i64;
    let (mut labels, mut probs) = (Vec::new(), Vec::new());
    for start in (0..n).step_by(32) {
        let idx: Vec<i64> = (start..(start + 32).min(n)).collect();
        let (l, p) = tch::no_grad(|| seg.segment(&ds.batch(&idx, Kind::Float)))?;
        labels.push(l);
        probs.push(p);
    }
    Ok(Predictions { labels: Tensor::cat(&labels, 0), probs: Some(Tensor::cat(&probs, 0)), num_parts: seg.num_classes - 1 })
}

/// Benchmark, generator, pairs, segmenter and evaluation for one seed.
pub fn run_toy(scale: &ExperimentScale, seed: u64) -> Result<ToyOutcome> {
    let start = Instant::now();
    let model = train_model(scale, &scale.train, seed)?;
    let pairs = synthesize_pairs(&model, None, scale.pairs, seed)?;
    let seg_cfg = SegConfig { iterations: scale.seg_iterations, streaming: false, seed, ..SegConfig::default() };
    let seg = train_segmenter(PairSource::Archive(&pairs), &seg_cfg, scale.train.k)?;
    let eval_set = scale.benchmark(seed + 10_000, scale.eval_images)?;
    let reports = evaluate(&predict(&seg, &eval_set)?, &eval_set, 0.5, LandmarkNorm::Diagonal, &scale.train.hash())?;
    let value = |name: &str| reports.iter().find(|r: &&MetricReport| r.metric == name).map_or(f64::NAN, |r| r.value);
    let outcome = ToyOutcome {
        seed,
        foreground_iou: value("foreground_iou"),
        landmark_error_percent: value("landmark_error_percent"),
        seconds: start.elapsed().as_secs_f64(),
    };
    log::info!("toy seed {seed}: {outcome:?}");
    Ok(outcome)
}

/// Median foreground IoU >= 0.60 and median landmark error <= 8% of the diagonal.
pub fn toy_end_to_end(scale: &ExperimentScale) -> CheckResult {
    let start = Instant::now();
    let outcome: Result<Vec<ToyOutcome>> = scale.seeds.iter().map(|&s| run_toy(scale, s)).collect();
    let (passed, detail) = match outcome {
        Ok(runs) => {
            let iou = median(&mut runs.iter().map(|r| r.foreground_iou).collect::<Vec<_>>());
            let err = median(&mut runs.iter().map(|r| r.landmark_error_percent).collect::<Vec<_>>());
            (iou >= 0.60 && err <= 8.0, format!("scale {}, {} seeds: median IoU {iou:.3}, median landmark error {err:.2}%", scale.name, runs.len()))
        }
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult { name: "toy end-to-end".into(), passed, detail, seconds: start.elapsed().as_secs_f64() }
}

/// Counts of 4-connected components per class of a `[H, W]` label map.
pub fn connected_components(labels: &[i64], h: usize, w: usize, num_classes: usize) -> Vec<usize> {
    let mut seen = vec![false; labels.len()];
    let mut counts = vec![0; num_classes];
    let mut queue = VecDeque::new();
    for start in 0..labels.len() {
        if seen[start] {
            continue;
        }
        let class = labels[start];
        if let Some(c) = counts.get_mut(class as usize) {
            *c += 1;
        }
        seen[start] = true;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (i, j) = (p / w, p % w);
            let mut visit = |q: usize| {
                if !seen[q] && labels[q] == class {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if i > 0 {
                visit(p - w);
            }
            if i + 1 < h {
                visit(p + w);
            }
            if j > 0 {
                visit(p - 1);
            }
            if j + 1 < w {
                visit(p + 1);
            }
        }
    }
    counts
}

/// Mask statistics of a batch of generated label maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskStats {
    /// Mean number of parts covering at least `min_area` of the image.
    pub nonempty_parts: f64,
    /// Mean connected-component count of the non-empty parts.
    pub fragmentation: f64,
}

/// Statistics of `[N, H, W]` label maps with parts `1..=k`.
pub fn mask_stats(labels: &Tensor, k: usize, min_area: f64) -> MaskStats {
    let s = labels.size();
    let (n, h, w) = (s[0] as usize, s[1] as usize, s[2] as usize);
    let v = to_vec_i64(labels);
    let (mut nonempty, mut comps, mut counted) = (0usize, 0usize, 0usize);
    for i in 0..n {
        let map = &v[i * h * w..(i + 1) * h * w];
        let cc = connected_components(map, h, w, k + 1);
        for part in 1..=k {
            let area = map.iter().filter(|&&l| l == part as i64).count() as f64 / (h * w) as f64;
            if area >= min_area {
                nonempty += 1;
                comps += cc[part];
                counted += 1;
            }
        }
    }
    MaskStats {
        nonempty_parts: nonempty as f64 / n.max(1) as f64,
        fragmentation: if counted == 0 { 0.0 } else { comps as f64 / counted as f64 },
    }
}

fn generated_stats(model: &GanModel, seed: u64) -> Result<MaskStats> {
    let out = model.sample(seed, 0xab1, 256)?;
    Ok(mask_stats(&out.masks.labels(), model.cfg.k, 0.01))
}

/// Without the area loss fewer parts survive; without the concentration loss parts fragment more.
pub fn ablation_direction(scale: &ExperimentScale) -> CheckResult {
    let start = Instant::now();
    let run = || -> Result<(bool, String)> {
        let (mut full_parts, mut no_area_parts, mut full_frag, mut no_con_frag) = (vec![], vec![], vec![], vec![]);
        for &seed in &scale.seeds {
            let full = generated_stats(&train_model(scale, &scale.train, seed)?, seed)?;
            let no_area = generated_stats(&train_model(scale, &TrainConfig { disable_area: true, ..scale.train.clone() }, seed)?, seed)?;
            let no_con = generated_stats(&train_model(scale, &TrainConfig { disable_con: true, ..scale.train.clone() }, seed)?, seed)?;
            log::info!("ablation seed {seed}: full {full:?}, no area {no_area:?}, no concentration {no_con:?}");
            full_parts.push(full.nonempty_parts);
            no_area_parts.push(no_area.nonempty_parts);
            full_frag.push(full.fragmentation);
            no_con_frag.push(no_con.fragmentation);
        }
        let (fp, ap) = (median(&mut full_parts), median(&mut no_area_parts));
        let (ff, cf) = (median(&mut full_frag), median(&mut no_con_frag));
        Ok((
            ap < fp && cf > ff,
            format!("scale {}: non-empty parts full {fp:.2} vs no-area {ap:.2}; fragmentation full {ff:.2} vs no-concentration {cf:.2}", scale.name),
        ))
    };
    let (passed, detail) = run().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckResult { name: "ablation direction".into(), passed, detail, seconds: start.elapsed().as_secs_f64() }
}
