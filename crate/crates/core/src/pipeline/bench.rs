//! Inference throughput with a per-layer breakdown.

use std::fmt;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::network::{build_network, BlockPolicy, InitRule, NetworkGraph};
use crate::tensor::ClipTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub label: String,
    pub threads: usize,
    pub geometry: [usize; 3],
    /// Wall time of every timed run, in seconds.
    pub runs: Vec<f64>,
    /// Median time of every layer group, in forward order.
    pub layers: Vec<(String, f64)>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => 0.0,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

impl BenchReport {
    pub fn median_seconds(&self) -> f64 {
        median(&self.runs)
    }

    pub fn clips_per_second(&self) -> f64 {
        1.0 / self.median_seconds()
    }

    pub fn layer_sum(&self) -> f64 {
        self.layers.iter().map(|l| l.1).sum()
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [t, h, w] = self.geometry;
        writeln!(
            f,
            "{}: {t}x{h}x{w}, {} thread(s), {} run(s): median {:.4} s, {:.3} clips/s",
            self.label,
            self.threads,
            self.runs.len(),
            self.median_seconds(),
            self.clips_per_second()
        )?;
        let width = self.layers.iter().map(|l| l.0.len()).max().unwrap_or(0);
        let total = self.median_seconds();
        for (name, secs) in &self.layers {
            writeln!(f, "  {name:<width$}  {:>9.3} ms  {:>5.1}%", secs * 1e3, 100.0 * secs / total)?;
        }
        write!(f, "  {:<width$}  {:>9.3} ms", "sum", self.layer_sum() * 1e3)
    }
}

/// One untimed warm-up pass, then `iters` timed single-clip forwards on a
/// pool of `threads` workers.
pub fn bench(net: &NetworkGraph<f32>, geometry: [usize; 3], iters: usize, threads: usize) -> Result<BenchReport> {
    if iters == 0 || threads == 0 {
        return Err(Error::Invalid("iters and threads must be positive".into()));
    }
    let [t, h, w] = geometry;
    let x = ClipTensor::uniform([1, 3, t, h, w], 0.0, 1.0, 0)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    pool.install(|| {
        net.forward(&x)?;
        let mut runs = Vec::with_capacity(iters);
        let mut per_layer: Vec<(String, Vec<f64>)> = Vec::new();
        for _ in 0..iters {
            let start = Instant::now();
            let (_, times) = net.forward_timed(&x)?;
            runs.push(start.elapsed().as_secs_f64());
            if per_layer.is_empty() {
                per_layer = times.iter().map(|(n, _)| (n.clone(), Vec::new())).collect();
            }
            for ((_, acc), (_, d)) in per_layer.iter_mut().zip(&times) {
                acc.push(Duration::as_secs_f64(d));
            }
        }
        Ok(BenchReport {
            label: format!("{}-{}", net.arch.policy, net.arch.base_depth),
            threads,
            geometry,
            runs,
            layers: per_layer.into_iter().map(|(n, v)| (n, median(&v))).collect(),
        })
    })
}

/// Benches freshly built all-A, all-B and all-C variants of `net`'s
/// architecture, for side-by-side comparison.
pub fn bench_policies(net: &NetworkGraph<f32>, geometry: [usize; 3], iters: usize, threads: usize) -> Result<Vec<BenchReport>> {
    [BlockPolicy::AllA, BlockPolicy::AllB, BlockPolicy::AllC]
        .into_iter()
        .map(|p| {
            let variant: NetworkGraph<f32> = build_network(net.arch.with_policy(p), InitRule::seeded(0))?;
            bench(&variant, geometry, iters, threads)
        })
        .collect()
}

pub fn comparison_table(reports: &[BenchReport]) -> String {
    let mut out = String::from("policy        clips/s   median s\n");
    for r in reports {
        out.push_str(&format!("{:<12}  {:>7.3}   {:>8.4}\n", r.label, r.clips_per_second(), r.median_seconds()));
    }
    out
}
