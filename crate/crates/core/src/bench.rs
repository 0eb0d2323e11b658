//! Single-threaded inference throughput.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Scenario;
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::fusion::Variant;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    /// Images timed per repeat (warmup images come on top).
    pub n_images: usize,
    pub warmup: usize,
    pub repeats: usize,
    pub conf_threshold: f64,
    pub nms_iou: f64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            n_images: 200,
            warmup: 20,
            repeats: 3,
            conf_threshold: 0.25,
            nms_iou: 0.45,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub variant: Variant,
    pub params: usize,
    pub n_images: usize,
    pub warmup: usize,
    /// Images per second of each repeat.
    pub samples: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Measures several models one image at a time, on the calling thread.
/// Within a repeat the models take turns on every image, so drift in
/// machine speed is shared by all of them; the starting model rotates.
pub fn throughput_bench<T: Scalar>(
    models: &[&Detector<T>],
    images: &[Scenario],
    settings: &BenchSettings,
) -> Result<Vec<Throughput>> {
    if images.is_empty() || settings.n_images == 0 || settings.repeats == 0 {
        return Err(Error::Usage("benchmark needs images, a positive image count and repeats".into()));
    }
    let run = |m: &Detector<T>, s: &Scenario| {
        m.detect_chunk(std::slice::from_ref(s), settings.conf_threshold, settings.nms_iou)
    };
    let mut samples = vec![Vec::with_capacity(settings.repeats); models.len()];
    for _ in 0..settings.repeats {
        for s in images.iter().cycle().take(settings.warmup) {
            for m in models {
                run(m, s)?;
            }
        }
        let mut secs = vec![0.0; models.len()];
        for (i, s) in images.iter().cycle().take(settings.n_images).enumerate() {
            for k in 0..models.len() {
                let j = (i + k) % models.len();
                let started = Instant::now();
                run(models[j], s)?;
                secs[j] += started.elapsed().as_secs_f64();
            }
        }
        for (out, t) in samples.iter_mut().zip(secs) {
            out.push(settings.n_images as f64 / t);
        }
    }
    Ok(models
        .iter()
        .zip(samples)
        .map(|(m, s)| {
            let (mean, std) = mean_std(&s);
            Throughput {
                variant: m.variant(),
                params: m.param_count(),
                n_images: settings.n_images,
                warmup: settings.warmup,
                mean,
                std,
                median: median(&s),
                samples: s,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetSpec};
    use crate::detector::ModelConfig;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn reports_one_sample_per_repeat() {
        let scenes = generate(1, 2, &DatasetSpec::default()).unwrap();
        let m = Detector::<f32>::new(ModelConfig::default(), 1).unwrap();
        let settings = BenchSettings {
            n_images: 3,
            warmup: 1,
            repeats: 2,
            ..BenchSettings::default()
        };
        let r = throughput_bench(&[&m], &scenes, &settings).unwrap();
        assert_eq!(r[0].samples.len(), 2);
        assert!(r[0].mean > 0.0 && r[0].std >= 0.0);
    }
}
