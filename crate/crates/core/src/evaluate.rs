//! Dice, ground-truth threshold calibration, throughput and rotation sweeps,
//! and the CSV report.

use std::fmt::Write as _;
use std::time::Instant;

use crate::augment::SpatialParams;
use crate::error::{Error, Result};
use crate::postprocess::BinaryMask;
use crate::volume::Volume;

/// `2|a∩b| / (|a|+|b|)`; two empty masks agree perfectly.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> f64 {
    assert_eq!(a.dims(), b.dims(), "dice of masks on different grids");
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

/// Lower median for even counts. `NaN` for an empty list.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

pub fn default_threshold_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// Median Dice of `pred` against each ground truth binarized at `t`.
pub fn median_dice_at(gt: &[Volume], pred: &[BinaryMask], t: f64) -> f64 {
    let scores: Vec<f64> = gt
        .iter()
        .zip(pred)
        .map(|(g, p)| dice(p, &BinaryMask::from_volume(g, t as f32)))
        .collect();
    median(&scores)
}

/// The grid threshold that maximizes median Dice; ties go to the lowest.
pub fn calibrate_threshold(gt: &[Volume], pred: &[BinaryMask], grid: &[f64]) -> Result<f64> {
    if gt.is_empty() || gt.len() != pred.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} ground truths against {} predictions",
            gt.len(),
            pred.len()
        )));
    }
    let mut best: Option<(f64, f64)> = None;
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    for t in sorted {
        let m = median_dice_at(gt, pred, t);
        if best.is_none_or(|(_, bm)| m > bm) {
            best = Some((t, m));
        }
    }
    best.map(|(t, _)| t)
        .ok_or_else(|| Error::InvalidConfig("empty threshold grid".into()))
}

/// CPU model and the worker-thread count a measurement ran with.
pub fn hardware_descriptor() -> String {
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{model}; {cores} cores available; {} worker threads", rayon::current_num_threads())
}

#[derive(Clone, Debug)]
pub struct Throughput {
    /// Median over repetitions.
    pub images_per_minute: f64,
    pub per_repetition: Vec<f64>,
    pub hardware: String,
}

/// Times `extract` over all `volumes`, `repetitions` times. Whatever the
/// closure does is what gets measured; callers keep file I/O and weight
/// loading outside it.
pub fn benchmark<T>(
    mut extract: impl FnMut(&Volume) -> Result<T>,
    volumes: &[Volume],
    repetitions: usize,
) -> Result<Throughput> {
    if volumes.is_empty() || repetitions == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rates = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        for v in volumes {
            std::hint::black_box(extract(v)?);
        }
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        rates.push(volumes.len() as f64 * 60.0 / secs);
    }
    Ok(Throughput {
        images_per_minute: median(&rates),
        per_repetition: rates,
        hardware: hardware_descriptor(),
    })
}

/// Rotation about the left-right (sagittal-normal) axis.
pub fn rotate_sagittal(v: &Volume, angle_deg: f64) -> Volume {
    SpatialParams::rotation([1.0, 0.0, 0.0], angle_deg).apply(v)
}

/// (angle, Dice) for each angle: image and ground truth are rotated together,
/// the ground truth binarized at `threshold` after interpolation.
pub fn rotation_sweep(
    v: &Volume,
    gt: &Volume,
    angles: &[f64],
    threshold: f64,
    mut extract: impl FnMut(&Volume) -> Result<BinaryMask>,
) -> Result<Vec<(f64, f64)>> {
    angles
        .iter()
        .map(|&a| {
            let (img, truth) = if a == 0.0 {
                (v.clone(), gt.clone())
            } else {
                (rotate_sagittal(v, a), rotate_sagittal(gt, a))
            };
            let pred = extract(&img)?;
            Ok((a, dice(&pred, &BinaryMask::from_volume(&truth, threshold as f32))))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiceReport {
    pub samples: Vec<(String, f64)>,
    pub threshold: f64,
    pub images_per_minute: Option<f64>,
    pub hardware: Option<String>,
}

impl DiceReport {
    pub fn new(samples: Vec<(String, f64)>, threshold: f64) -> Self {
        DiceReport {
            samples,
            threshold,
            images_per_minute: None,
            hardware: None,
        }
    }

    fn scores(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.1).collect()
    }

    pub fn median(&self) -> f64 {
        median(&self.scores())
    }

    pub fn min(&self) -> f64 {
        self.scores().into_iter().fold(f64::NAN, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.scores().into_iter().fold(f64::NAN, f64::max)
    }

    /// `id,dice,threshold` rows, then `# key=value` summary lines.
    /// Floats use Rust's shortest round-trip form so parsing is lossless.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,dice,threshold\n");
        for (id, d) in &self.samples {
            writeln!(s, "{id},{d:?},{:?}", self.threshold).unwrap();
        }
        writeln!(s, "# median={:?}", self.median()).unwrap();
        writeln!(s, "# min={:?}", self.min()).unwrap();
        writeln!(s, "# max={:?}", self.max()).unwrap();
        if let Some(r) = self.images_per_minute {
            writeln!(s, "# images_per_minute={r:?}").unwrap();
        }
        if let Some(h) = &self.hardware {
            writeln!(s, "# hardware={h}").unwrap();
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::InvalidConfig(format!("dice report: {msg}"));
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("id,dice,threshold") {
            return Err(bad("missing header".into()));
        }
        let mut report = DiceReport::new(Vec::new(), f64::NAN);
        for line in lines {
            if let Some(kv) = line.strip_prefix("# ") {
                let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("summary line '{line}'")))?;
                match k {
                    "images_per_minute" => {
                        report.images_per_minute = Some(v.parse().map_err(|_| bad(format!("rate '{v}'")))?)
                    }
                    "hardware" => report.hardware = Some(v.to_string()),
                    _ => {}
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.rsplitn(3, ',');
            let (t, d, id) = match (parts.next(), parts.next(), parts.next()) {
                (Some(t), Some(d), Some(id)) => (t, d, id),
                _ => return Err(bad(format!("row '{line}'"))),
            };
            let d: f64 = d.parse().map_err(|_| bad(format!("dice '{d}'")))?;
            let t: f64 = t.parse().map_err(|_| bad(format!("threshold '{t}'")))?;
            report.threshold = t;
            report.samples.push((id.to_string(), d));
        }
        Ok(report)
    }
}
