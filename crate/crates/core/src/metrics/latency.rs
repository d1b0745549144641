//! Wall-clock latency: untimed warmups, then timed repeats of one forward
//! pass on a pre-built batch, inside a dedicated worker pool.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Classifier;
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub warmups: usize,
    pub repeats: usize,
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmups: 10,
            repeats: 100,
            threads: 1,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats < 2 {
            return Err(Error::config(format!(
                "need at least 2 timed repeats for a variance estimate, got {}",
                self.repeats
            )));
        }
        if self.threads == 0 {
            return Err(Error::config("thread count must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    /// Sample standard deviation (n − 1).
    pub std_ms: f64,
    pub cv: f64,
    pub warmups: usize,
    pub repeats: usize,
    pub threads: usize,
    /// Shape of the timed input batch.
    pub batch: Vec<usize>,
}

impl LatencyReport {
    pub fn from_samples(
        samples_ms: Vec<f64>,
        warmups: usize,
        threads: usize,
        batch: Vec<usize>,
    ) -> Result<Self> {
        if samples_ms.len() < 2 {
            return Err(Error::config("a latency report needs at least 2 samples"));
        }
        let n = samples_ms.len() as f64;
        let mean = samples_ms.iter().sum::<f64>() / n;
        let var = samples_ms.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        Ok(Self {
            repeats: samples_ms.len(),
            samples_ms,
            mean_ms: mean,
            std_ms: std,
            cv: if mean > 0.0 { std / mean } else { 0.0 },
            warmups,
            threads,
            batch,
        })
    }

    pub fn median_ms(&self) -> f64 {
        let mut s = self.samples_ms.clone();
        s.sort_by(f64::total_cmp);
        let m = s.len() / 2;
        if s.len() % 2 == 1 {
            s[m]
        } else {
            0.5 * (s[m - 1] + s[m])
        }
    }
}

pub fn measure_latency<M>(model: &M, x: &DenseTensor, cfg: &BenchConfig) -> Result<LatencyReport>
where
    M: Classifier + Sync + ?Sized,
{
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::config(format!("cannot build a {}-thread pool: {e}", cfg.threads)))?;
    let samples = pool.install(|| -> Result<Vec<f64>> {
        for _ in 0..cfg.warmups {
            std::hint::black_box(model.logits(x)?);
        }
        let mut samples = Vec::with_capacity(cfg.repeats);
        for _ in 0..cfg.repeats {
            let start = Instant::now();
            let out = model.logits(x);
            let elapsed = start.elapsed();
            std::hint::black_box(out?);
            samples.push(elapsed.as_secs_f64() * 1e3);
        }
        Ok(samples)
    })?;
    LatencyReport::from_samples(samples, cfg.warmups, cfg.threads, x.shape().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Zero;

    impl Classifier for Zero {
        fn logits(&self, x: &DenseTensor) -> Result<DenseTensor> {
            Ok(DenseTensor::zeros(&[x.shape()[0], 2]))
        }
        fn num_classes(&self) -> usize {
            2
        }
    }

    #[test]
    fn statistics_match_samples() {
        let r = LatencyReport::from_samples(vec![1.0, 2.0, 3.0, 4.0], 0, 1, vec![1]).unwrap();
        assert_eq!(r.mean_ms, 2.5);
        assert!((r.std_ms - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(r.cv, r.std_ms / r.mean_ms);
        assert_eq!(r.median_ms(), 2.5);
    }

    #[test]
    fn single_repeat_rejected() {
        let x = DenseTensor::zeros(&[1, 1]);
        let cfg = BenchConfig {
            repeats: 1,
            ..BenchConfig::default()
        };
        assert!(measure_latency(&Zero, &x, &cfg).is_err());
    }

    #[test]
    fn records_configuration() {
        let x = DenseTensor::zeros(&[3, 1]);
        let cfg = BenchConfig {
            warmups: 2,
            repeats: 5,
            threads: 1,
        };
        let r = measure_latency(&Zero, &x, &cfg).unwrap();
        assert_eq!((r.samples_ms.len(), r.warmups, r.threads), (5, 2, 1));
        assert_eq!(r.batch, vec![3, 1]);
    }
}
