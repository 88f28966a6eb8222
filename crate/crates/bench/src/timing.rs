use crate::artifact::KernelTiming;
use std::hint::black_box;
use std::time::Instant;

/// Run `f` `warmup` times untimed, then `repeats` times timed.
pub fn time_kernel<T>(name: &str, repeats: usize, warmup: usize, mut f: impl FnMut() -> T) -> KernelTiming {
    for _ in 0..warmup {
        black_box(f());
    }
    let mut samples: Vec<u64> = (0..repeats.max(1))
        .map(|_| {
            let start = Instant::now();
            black_box(f());
            start.elapsed().as_nanos() as u64
        })
        .collect();
    samples.sort_unstable();
    let n = samples.len();
    let median = if n % 2 == 1 {
        samples[n / 2]
    } else {
        (samples[n / 2 - 1] + samples[n / 2]) / 2
    };
    KernelTiming {
        name: name.to_string(),
        median_ns: median,
        min_ns: samples[0],
        max_ns: samples[n - 1],
    }
}
