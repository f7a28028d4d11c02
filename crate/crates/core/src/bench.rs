//! Timing harness for the dense engine and the patch-by-patch oracle.
//!
//! Dense timings are medians over repetitions after one warm-up run. The
//! oracle is timed on a regular sub-grid of pixels and scaled up linearly to
//! the whole image. Numbers are CPU wall times; they show trends, not the
//! magnitudes a GPU implementation would reach.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bwd::{backward_profiled, BackwardOptions, ErrorMask};
use crate::dilate::{compile, PlanLayer};
use crate::error::{Error, Result};
use crate::fwd::forward_profiled;
use crate::netspec::NetworkSpec;
use crate::oracle::scan_pixels;
use crate::tensor::{FeatureMap, Shape};
use crate::{ExecMode, Scalar};

/// `s^2 m^2 / (s + m)^2` for every layer, where `m` is the side of the
/// layer's input within one patch. Conv layers are the ones the cost model
/// describes; the same ratio is reported for pooling and pointwise rows.
pub fn theoretical_speedup<T: Scalar>(spec: &NetworkSpec<T>, image_side: usize) -> Result<Vec<f64>> {
    if image_side == 0 {
        return Err(Error::InvalidSpec("image side must be at least 1".into()));
    }
    let sizes = spec.layer_sizes(spec.patch_size()?)?;
    let s = image_side as f64;
    Ok(sizes[..spec.layers.len()]
        .iter()
        .map(|&m| {
            let m = m as f64;
            s * s * m * m / ((s + m) * (s + m))
        })
        .collect())
}

#[derive(Clone, Copy, Debug)]
pub struct BenchConfig {
    pub image_side: usize,
    pub reps: usize,
    pub with_oracle: bool,
    /// Oracle pixels are taken every `oracle_step` rows and columns.
    pub oracle_step: usize,
    pub mode: ExecMode,
    pub seed: u64,
}

impl BenchConfig {
    pub fn new(image_side: usize) -> Self {
        BenchConfig {
            image_side,
            reps: 5,
            with_oracle: false,
            oracle_step: 8,
            mode: ExecMode::Serial,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerTiming {
    pub layer: String,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub dense_fwd_ms: f64,
    pub dense_bwd_ms: f64,
    pub oracle_fwd_ms: Option<f64>,
    pub speedup_fwd: Option<f64>,
    pub speedup_theory: f64,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub layers: Vec<LayerTiming>,
    pub dense_fwd_total_ms: f64,
    pub dense_bwd_total_ms: f64,
    pub oracle_fwd_total_ms: Option<f64>,
    pub image_side: usize,
    pub patch_size: usize,
    pub reps: usize,
    pub scalar_bits: u32,
    pub mode: ExecMode,
    /// Oracle pixels timed and total pixels they stand for.
    pub oracle_pixels: Option<(usize, usize)>,
    pub warnings: Vec<String>,
}

impl BenchReport {
    /// Overall oracle-to-dense forward time ratio.
    pub fn speedup_fwd(&self) -> Option<f64> {
        self.oracle_fwd_total_ms.map(|o| o / self.dense_fwd_total_ms)
    }

    /// Tab-separated table with a commented header.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str("# CPU wall times in ms; GPU speedup magnitudes are not targets\n");
        out.push_str(&format!(
            "# image {s}x{s}, patch {p}x{p}, {r} reps, f{b}, {m:?}\n",
            s = self.image_side,
            p = self.patch_size,
            r = self.reps,
            b = self.scalar_bits,
            m = self.mode
        ));
        if let Some((n, total)) = self.oracle_pixels {
            out.push_str(&format!("# oracle timed on {n} of {total} pixels, scaled linearly\n"));
        }
        for w in &self.warnings {
            out.push_str(&format!("# warning: {w}\n"));
        }
        out.push_str(
            "layer\tkernel\tstride\tdilation\tdense_fwd_ms\tdense_bwd_ms\toracle_fwd_ms\tspeedup_fwd\tspeedup_theory\n",
        );
        let opt = |v: Option<f64>, prec: usize| v.map_or("-".to_string(), |v| format!("{v:.prec$}"));
        for l in &self.layers {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{:.3}\t{:.3}\t{}\t{}\t{:.1}\n",
                l.layer,
                l.kernel,
                l.stride,
                l.dilation,
                l.dense_fwd_ms,
                l.dense_bwd_ms,
                opt(l.oracle_fwd_ms, 3),
                opt(l.speedup_fwd, 1),
                l.speedup_theory
            ));
        }
        out.push_str(&format!(
            "overall\t-\t-\t-\t{:.3}\t{:.3}\t{}\t{}\t-\n",
            self.dense_fwd_total_ms,
            self.dense_bwd_total_ms,
            opt(self.oracle_fwd_total_ms, 3),
            opt(self.speedup_fwd(), 1)
        ));
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let wrap = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        let mut w = csv::Writer::from_path(path).map_err(wrap)?;
        for l in &self.layers {
            w.serialize(l).map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Smallest observable step of the monotonic clock.
fn timer_tick() -> Duration {
    (0..100)
        .filter_map(|_| {
            let a = Instant::now();
            loop {
                let d = a.elapsed();
                if !d.is_zero() {
                    break Some(d);
                }
            }
        })
        .min()
        .unwrap_or(Duration::from_nanos(1))
}

/// Times dense forward and backward (full error mask) per layer and, when
/// asked, the oracle on a sub-grid of pixels.
pub fn run_bench<T: Scalar>(spec: &NetworkSpec<T>, config: &BenchConfig) -> Result<BenchReport> {
    if config.reps < 3 {
        return Err(Error::InvalidSpec("a benchmark needs at least 3 repetitions".into()));
    }
    if config.image_side == 0 || config.oracle_step == 0 {
        return Err(Error::InvalidSpec("image side and oracle step must be positive".into()));
    }
    let plan = compile(spec)?;
    let s = config.image_side;
    let image = FeatureMap::<T>::random(Shape::new(spec.input_channels, s, s)?, config.seed)?;
    let delta = FeatureMap::<T>::random(
        Shape::new(spec.output_channels(), s, s)?,
        config.seed.wrapping_add(1),
    )?;
    let mask = ErrorMask::all(s, s);
    let opts = BackwardOptions {
        mode: config.mode,
        input_delta: false,
    };
    let n_layers = spec.layers.len();

    let mut fwd_layers = vec![Vec::new(); n_layers];
    let mut bwd_layers = vec![Vec::new(); n_layers];
    let (mut fwd_total, mut bwd_total) = (Vec::new(), Vec::new());
    for rep in 0..=config.reps {
        let mut tf = Vec::with_capacity(n_layers);
        let start = Instant::now();
        let cache = forward_profiled(&plan, &image, config.mode, Some(&mut tf))?;
        let f = start.elapsed();
        let mut tb = Vec::with_capacity(n_layers);
        let start = Instant::now();
        backward_profiled(&plan, &cache, &delta, &mask, opts, Some(&mut tb))?;
        let b = start.elapsed();
        if rep == 0 {
            continue;
        }
        fwd_total.push(ms(f));
        bwd_total.push(ms(b));
        for k in 0..n_layers {
            fwd_layers[k].push(ms(tf[k]));
            bwd_layers[k].push(ms(tb[k]));
        }
    }

    let mut warnings = Vec::new();
    let tick_ms = ms(timer_tick());
    let fwd_ms: Vec<f64> = fwd_layers.into_iter().map(median).collect();
    let bwd_ms: Vec<f64> = bwd_layers.into_iter().map(median).collect();
    for (k, &t) in fwd_ms.iter().enumerate() {
        if t < 10.0 * tick_ms {
            warnings.push(format!(
                "layer {} forward time is under 10 timer ticks ({tick_ms:.6} ms each)",
                plan.layer_names()[k]
            ));
        }
    }

    let mut oracle_ms = None;
    let mut oracle_pixels = None;
    if config.with_oracle {
        let pixels: Vec<(usize, usize)> = (0..s)
            .step_by(config.oracle_step)
            .flat_map(|y| (0..s).step_by(config.oracle_step).map(move |x| (y, x)))
            .collect();
        let scale = (s * s) as f64 / pixels.len() as f64;
        let mut per_layer = vec![Duration::ZERO; n_layers];
        let start = Instant::now();
        scan_pixels(spec, &image, &pixels, Some(&mut per_layer))?;
        let total = ms(start.elapsed()) * scale;
        oracle_ms = Some((per_layer.iter().map(|&d| ms(d) * scale).collect::<Vec<_>>(), total));
        oracle_pixels = Some((pixels.len(), s * s));
    }

    let theory = theoretical_speedup(spec, s)?;
    let layers = plan
        .layers()
        .iter()
        .enumerate()
        .map(|(k, layer)| {
            let (kernel, stride) = spec.layers[k].window().unwrap_or((1, 1));
            let oracle = oracle_ms.as_ref().map(|(v, _)| v[k]);
            LayerTiming {
                layer: plan.layer_names()[k].clone(),
                kernel,
                stride,
                dilation: match layer {
                    PlanLayer::Nonlin(_) => 1,
                    _ => plan.dilations()[k],
                },
                dense_fwd_ms: fwd_ms[k],
                dense_bwd_ms: bwd_ms[k],
                oracle_fwd_ms: oracle,
                speedup_fwd: oracle.map(|o| o / fwd_ms[k]),
                speedup_theory: theory[k],
            }
        })
        .collect();

    Ok(BenchReport {
        layers,
        dense_fwd_total_ms: median(fwd_total),
        dense_bwd_total_ms: median(bwd_total),
        oracle_fwd_total_ms: oracle_ms.map(|(_, t)| t),
        image_side: s,
        patch_size: plan.patch_size(),
        reps: config.reps,
        scalar_bits: T::BITS,
        mode: config.mode,
        oracle_pixels,
        warnings,
    })
}

/// Number of error-map pixels kept by a mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSize {
    Count(usize),
    All,
}

impl std::fmt::Display for MaskSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MaskSize::Count(n) => write!(f, "{n}"),
            MaskSize::All => f.write_str("all"),
        }
    }
}

impl std::str::FromStr for MaskSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "all" => Ok(MaskSize::All),
            t => t
                .parse()
                .map(MaskSize::Count)
                .map_err(|_| Error::Mask(format!("bad mask size {t:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MaskSweep {
    /// Median backward wall time per mask size, in ms.
    pub entries: Vec<(MaskSize, f64)>,
    /// `(max - min) / min` over the medians.
    pub spread: f64,
    /// Limit the spread is checked against.
    pub tolerance: f64,
}

impl MaskSweep {
    pub fn violation(&self) -> bool {
        self.spread >= self.tolerance
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("mask\tdense_bwd_ms\n");
        for (m, t) in &self.entries {
            out.push_str(&format!("{m}\t{t:.3}\n"));
        }
        out.push_str(&format!(
            "# spread {:.2}% (limit {:.0}%){}\n",
            self.spread * 100.0,
            self.tolerance * 100.0,
            if self.violation() { " VIOLATED" } else { "" }
        ));
        out
    }
}

pub const MASK_SPREAD_TOLERANCE: f64 = 0.10;

/// Times whole-network backward propagation for each mask size. Repetitions
/// cycle through the sizes so slow drifts of the machine hit all of them.
pub fn bench_mask_sweep<T: Scalar>(
    spec: &NetworkSpec<T>,
    image_side: usize,
    mask_sizes: &[MaskSize],
    reps: usize,
    mode: ExecMode,
    seed: u64,
) -> Result<MaskSweep> {
    let s = image_side;
    let total = s * s;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks = mask_sizes
        .iter()
        .map(|&m| match m {
            MaskSize::All => Ok(ErrorMask::all(s, s)),
            MaskSize::Count(n) if n <= total => {
                let pixels: Vec<_> = sample(&mut rng, total, n)
                    .into_iter()
                    .map(|i| (i / s, i % s))
                    .collect();
                ErrorMask::from_pixels(s, s, &pixels)
            }
            MaskSize::Count(n) => Err(Error::Mask(format!("mask size {n} exceeds {total} pixels"))),
        })
        .collect::<Result<Vec<_>>>()?;

    let plan = compile(spec)?;
    let image = FeatureMap::<T>::random(Shape::new(spec.input_channels, s, s)?, seed)?;
    let delta = FeatureMap::<T>::random(Shape::new(spec.output_channels(), s, s)?, seed.wrapping_add(1))?;
    let cache = forward_profiled(&plan, &image, mode, None)?;
    let opts = BackwardOptions {
        mode,
        input_delta: false,
    };
    let mut times = vec![Vec::new(); masks.len()];
    for rep in 0..=reps.max(1) {
        // rotate the order so drift does not favour one position
        for j in 0..masks.len() {
            let i = (j + rep) % masks.len();
            let mask = &masks[i];
            let start = Instant::now();
            let out = backward_profiled(&plan, &cache, &delta, mask, opts, None)?;
            let t = ms(start.elapsed());
            std::hint::black_box(out);
            if rep > 0 {
                times[i].push(t);
            }
        }
    }
    let entries: Vec<_> = mask_sizes
        .iter()
        .copied()
        .zip(times.into_iter().map(median))
        .collect();
    let lo = entries.iter().map(|e| e.1).fold(f64::INFINITY, f64::min);
    let hi = entries.iter().map(|e| e.1).fold(0.0, f64::max);
    Ok(MaskSweep {
        spread: if entries.is_empty() { 0.0 } else { (hi - lo) / lo },
        entries,
        tolerance: MASK_SPREAD_TOLERANCE,
    })
}
