//! Wall-clock benchmark of the forward and backward passes.

use std::io::Write;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::gradcheck::random_problem;
use crate::operator::{nlroi_backward, nlroi_forward, NlRoiConfig};
use crate::prng::Prng;
use crate::tensor::Tensor;

pub const MIN_REPS: usize = 5;
pub const WARMUP_RUNS: usize = 2;
pub const CSV_HEADER: &str = "n,d,d_f,d_g,h,w,reps,forward_ms,backward_ms";

/// Refuse grid entries whose working set would exceed this many bytes.
const MAX_BYTES: usize = 8 << 30;

/// One grid entry. The bottleneck width `D_mid` equals `D_f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchSize {
    pub n: usize,
    pub d: usize,
    pub d_f: usize,
    pub d_g: usize,
    pub h: usize,
    pub w: usize,
}

impl BenchSize {
    pub fn config(&self) -> NlRoiConfig {
        NlRoiConfig {
            d: self.d,
            d_f: self.d_f,
            d_mid: self.d_f,
            d_g: self.d_g,
            h: self.h,
            w: self.w,
            ..NlRoiConfig::default()
        }
    }

    /// Rough upper bound on the bytes the forward cache and gradients hold.
    fn working_set_bytes(&self) -> Option<usize> {
        let plane = self.h.checked_mul(self.w)?;
        let per_roi =
            (self.d + 2 * self.d_f + 2 * self.d_f + self.d + self.d_g).checked_mul(plane)?;
        let blobs = self.n.checked_mul(per_roi)?.checked_mul(4)?;
        let pairs = self.n.checked_mul(self.n)?.checked_mul(4)?;
        blobs
            .checked_add(pairs)?
            .checked_mul(std::mem::size_of::<f64>())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub size: BenchSize,
    pub reps: usize,
    /// Median forward time in milliseconds.
    pub forward_ms: f64,
    pub backward_ms: f64,
}

/// Times every grid entry in order, strictly sequentially.
pub fn run_bench(grid: &[BenchSize], reps: usize, seed: u64) -> Result<Vec<BenchRecord>> {
    if reps < MIN_REPS {
        return Err(Error::Config(format!(
            "reps must be at least {MIN_REPS}, got {reps}"
        )));
    }
    let mut records = Vec::with_capacity(grid.len());
    for (index, size) in grid.iter().enumerate() {
        records.push(bench_one(size, reps, seed, index as u64)?);
    }
    Ok(records)
}

fn bench_one(size: &BenchSize, reps: usize, seed: u64, index: u64) -> Result<BenchRecord> {
    let config = size.config();
    config.validate()?;
    let resource = || Error::Resource(format!("grid entry {size:?} is too large to benchmark"));
    let bytes = size.working_set_bytes().ok_or_else(resource)?;
    if bytes > MAX_BYTES {
        return Err(resource());
    }
    let mut probe: Vec<u8> = Vec::new();
    probe.try_reserve_exact(bytes).map_err(|_| resource())?;
    drop(probe);

    let problem_seed = Prng::derived(seed, index).next_u64();
    let (x, params) = random_problem(&config, size.n, problem_seed);
    let (out, _) = nlroi_forward(&x, &params, &config)?;
    let mut prng = Prng::derived(problem_seed, 1);
    let upstream = Tensor::from_fn(out.shape(), |_| prng.normal());

    let mut forward = Vec::with_capacity(reps);
    let mut backward = Vec::with_capacity(reps);
    for run in 0..WARMUP_RUNS + reps {
        let t0 = Instant::now();
        let (out, cache) = nlroi_forward(&x, &params, &config)?;
        let t1 = Instant::now();
        let grads = nlroi_backward(&cache, &params, &config, &upstream)?;
        let t2 = Instant::now();
        std::hint::black_box((&out, &grads));
        if run >= WARMUP_RUNS {
            forward.push((t1 - t0).as_secs_f64() * 1e3);
            backward.push((t2 - t1).as_secs_f64() * 1e3);
        }
    }
    Ok(BenchRecord {
        size: *size,
        reps,
        forward_ms: median(&mut forward),
        backward_ms: median(&mut backward),
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

/// Least-squares slope of `ln(forward_ms)` against `ln(n)`.
pub fn fit_scaling_exponent(records: &[BenchRecord]) -> Result<f64> {
    let mut ns: Vec<usize> = records.iter().map(|r| r.size.n).collect();
    ns.sort_unstable();
    ns.dedup();
    if ns.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "need at least 4 distinct N values, got {}",
            ns.len()
        )));
    }
    let first = records[0].size;
    let same_rest = |s: &BenchSize| {
        (s.d, s.d_f, s.d_g, s.h, s.w) == (first.d, first.d_f, first.d_g, first.h, first.w)
    };
    if !records.iter().all(|r| same_rest(&r.size)) {
        return Err(Error::Config("records differ in sizes other than n".into()));
    }
    if records
        .iter()
        .any(|r| !(r.forward_ms > 0.0 && r.forward_ms.is_finite()))
    {
        return Err(Error::Numerical(
            "forward times must be positive and finite".into(),
        ));
    }

    let pts: Vec<(f64, f64)> = records
        .iter()
        .map(|r| ((r.size.n as f64).ln(), r.forward_ms.ln()))
        .collect();
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

/// Writes the header and one line per record.
pub fn write_csv(records: &[BenchRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        let s = r.size;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{:.3},{:.3}",
            s.n, s.d, s.d_f, s.d_g, s.h, s.w, r.reps, r.forward_ms, r.backward_ms
        )?;
    }
    Ok(())
}

/// Sizes used to measure how the cost grows with `N`.
pub fn scaling_grid() -> Vec<BenchSize> {
    [64, 128, 256, 512, 1024]
        .into_iter()
        .map(|n| BenchSize {
            n,
            d: 8,
            d_f: 2,
            d_g: 2,
            h: 2,
            w: 2,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(n: usize, ms: f64) -> BenchRecord {
        BenchRecord {
            size: BenchSize {
                n,
                d: 4,
                d_f: 1,
                d_g: 1,
                h: 1,
                w: 1,
            },
            reps: 5,
            forward_ms: ms,
            backward_ms: ms,
        }
    }

    #[test]
    fn exact_power_law_slope() {
        let recs: Vec<_> = [8, 16, 32, 64, 128]
            .iter()
            .map(|&n| record(n, 3e-4 * (n * n) as f64))
            .collect();
        assert!((fit_scaling_exponent(&recs).unwrap() - 2.0).abs() < 1e-9);
        let flat: Vec<_> = [8, 16, 32, 64].iter().map(|&n| record(n, 1.5)).collect();
        assert!(fit_scaling_exponent(&flat).unwrap().abs() < 1e-12);
    }

    #[test]
    fn too_few_points() {
        let recs: Vec<_> = [8, 16, 16, 32].iter().map(|&n| record(n, 1.0)).collect();
        assert!(matches!(
            fit_scaling_exponent(&recs),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn grid_cardinality_and_duplicates() {
        let size = BenchSize {
            n: 4,
            d: 4,
            d_f: 1,
            d_g: 1,
            h: 2,
            w: 2,
        };
        let recs = run_bench(&[size], 5, 0).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].reps, 5);
        let recs = run_bench(&[size, size], 5, 0).unwrap();
        assert_eq!(recs[0].size, recs[1].size);
        assert!(run_bench(&[size], 4, 0).is_err());
    }

    #[test]
    fn oversized_entry_is_resource_error() {
        let size = BenchSize {
            n: 1 << 40,
            d: 4,
            d_f: 1,
            d_g: 1,
            h: 2,
            w: 2,
        };
        assert!(matches!(run_bench(&[size], 5, 0), Err(Error::Resource(_))));
    }

    #[test]
    fn csv_format() {
        let mut buf = Vec::new();
        write_csv(&[record(8, 1.23456)], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "n,d,d_f,d_g,h,w,reps,forward_ms,backward_ms\n8,4,1,1,1,1,5,1.235,1.235\n"
        );
    }
}
