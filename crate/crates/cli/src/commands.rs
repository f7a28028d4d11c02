use std::path::Path;

use densecnn::bench::{bench_mask_sweep, run_bench, BenchConfig, MaskSize};
use densecnn::bwd::{dense_backward_with, squared_error_delta, BackwardOptions};
use densecnn::fwd::dense_forward_with;
use densecnn::netspec::{load_spec, LayerSpec, WeightSource};
use densecnn::oracle::{patch_backward_batch, scan_forward};
use densecnn::{presets, ErrorMask, ExecMode, FeatureMap, NetworkSpec, Scalar, Shape};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::files::{create_dir, read_mask, require_file, require_parent, write_gradients, write_text};
use crate::{BackwardArgs, BenchArgs, CheckArgs, CmdResult, Failure, FixtureArgs, FixtureKind, ForwardArgs};

const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
const FD_REL_FLOOR: f64 = 1e-6;
/// One-sided slopes further apart than this (relative) mean the step
/// crossed a max-pool switch, so the entry is skipped.
const FD_KINK: f64 = 1e-3;

fn load<T: Scalar>(path: &Path) -> Result<NetworkSpec<T>, Failure> {
    require_file(path)?;
    Ok(load_spec(path)?)
}

fn read_image<T: Scalar>(path: &Path) -> Result<FeatureMap<T>, Failure> {
    require_file(path)?;
    Ok(FeatureMap::read_fmap(path)?)
}

pub fn compile(spec_path: &Path) -> CmdResult {
    let spec = load::<f64>(spec_path)?;
    let plan = densecnn::compile(&spec)?;
    let mut out = String::from("layer\tkind\tkernel\tstride\tdilation\textent\n");
    for (k, layer) in spec.layers.iter().enumerate() {
        let kind = match layer {
            LayerSpec::Conv(_) => "conv".to_string(),
            LayerSpec::Pool(p) => format!("{:?}pool", p.kind).to_lowercase(),
            LayerSpec::Nonlin(n) => n.kind.name().to_string(),
        };
        let kernel = layer.window().map_or(1, |w| w.0);
        out.push_str(&format!(
            "{}\t{kind}\t{kernel}\t{}\t{}\t{}\n",
            plan.layer_names()[k],
            layer.stride(),
            plan.dilations()[k],
            plan.layers()[k].extent()
        ));
    }
    let schedule: Vec<String> = plan.window_dilations().iter().map(usize::to_string).collect();
    let (lead, trail) = plan.padding();
    out.push_str(&format!("schedule\t{}\n", schedule.join(",")));
    out.push_str(&format!("patch_size\t{}\n", plan.patch_size()));
    out.push_str(&format!("padding\t{lead}\t{trail}\n"));
    print!("{out}");
    Ok(())
}

pub fn forward<T: Scalar>(a: &ForwardArgs, mode: ExecMode) -> CmdResult {
    let spec = load::<T>(&a.spec)?;
    let image = read_image::<T>(&a.image)?;
    require_parent(&a.out)?;
    let plan = densecnn::compile(&spec)?;
    let cache = dense_forward_with(&plan, &image, mode)?;
    cache.output.write_fmap(&a.out)?;
    if let Some(dir) = &a.dump_layers {
        create_dir(dir)?;
        cache.inputs[0].write_fmap(dir.join("00_input.fmap"))?;
        for (k, name) in plan.layer_names().iter().enumerate() {
            cache.layer_output(k).write_fmap(dir.join(format!("{:02}_{name}.fmap", k + 1)))?;
        }
    }
    Ok(())
}

pub fn oracle_forward<T: Scalar>(a: &ForwardArgs) -> CmdResult {
    if a.dump_layers.is_some() {
        return Err(Failure::Invalid("--dump-layers applies to the dense pass only".into()));
    }
    let spec = load::<T>(&a.spec)?;
    let image = read_image::<T>(&a.image)?;
    require_parent(&a.out)?;
    scan_forward(&spec, &image)?.write_fmap(&a.out)?;
    Ok(())
}

struct BackwardInputs<T> {
    spec: NetworkSpec<T>,
    image: FeatureMap<T>,
    target: FeatureMap<T>,
    mask: ErrorMask,
}

fn backward_inputs<T: Scalar>(a: &BackwardArgs) -> Result<BackwardInputs<T>, Failure> {
    let spec = load::<T>(&a.spec)?;
    let image = read_image::<T>(&a.image)?;
    let target = read_image::<T>(&a.target)?;
    require_file(&a.mask)?;
    let mask = read_mask(&a.mask, image.height(), image.width())?;
    Ok(BackwardInputs {
        spec,
        image,
        target,
        mask,
    })
}

pub fn backward<T: Scalar>(a: &BackwardArgs, mode: ExecMode) -> CmdResult {
    let BackwardInputs {
        spec,
        image,
        target,
        mask,
    } = backward_inputs::<T>(a)?;
    let plan = densecnn::compile(&spec)?;
    let cache = dense_forward_with(&plan, &image, mode)?;
    let delta = squared_error_delta(&cache.output, &target)?;
    let opts = BackwardOptions {
        mode,
        input_delta: a.input_delta,
    };
    let out = dense_backward_with(&plan, &cache, &delta, &mask, opts)?;
    write_gradients(&a.out, &spec, &out.gradients)?;
    if let Some(dx) = out.input_delta {
        dx.write_fmap(a.out.join("input.delta.fmap"))?;
    }
    Ok(())
}

pub fn oracle_backward<T: Scalar>(a: &BackwardArgs) -> CmdResult {
    if a.input_delta {
        return Err(Failure::Invalid("--input-delta applies to the dense pass only".into()));
    }
    let BackwardInputs {
        spec,
        image,
        target,
        mask,
    } = backward_inputs::<T>(a)?;
    let delta = squared_error_delta(&scan_forward(&spec, &image)?, &target)?;
    let pixels = mask.pixels();
    let deltas: Vec<Vec<T>> = pixels
        .iter()
        .map(|&(y, x)| (0..delta.channels()).map(|c| delta.get(c, y, x)).collect())
        .collect();
    let grads = patch_backward_batch(&spec, &image, &pixels, &deltas)?;
    write_gradients(&a.out, &spec, &grads)
}

pub fn bench<T: Scalar>(a: &BenchArgs, mode: ExecMode) -> CmdResult {
    if a.size == 0 || a.reps == 0 || a.oracle_step == 0 {
        return Err(Failure::Invalid("--size, --reps and --oracle-step must be positive".into()));
    }
    let sizes = a
        .mask_sweep
        .as_ref()
        .map(|list| list.iter().map(|s| s.parse::<MaskSize>()).collect::<Result<Vec<_>, _>>())
        .transpose()?;
    if let Some(csv) = &a.csv {
        require_parent(csv)?;
    }
    let spec = load::<T>(&a.spec)?;
    let config = BenchConfig {
        image_side: a.size,
        reps: a.reps,
        with_oracle: a.oracle,
        oracle_step: a.oracle_step,
        mode,
        seed: a.seed,
    };
    let report = run_bench(&spec, &config)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", report.to_table());
    if let Some(csv) = &a.csv {
        report.write_csv(csv)?;
    }
    if let Some(sizes) = sizes {
        let sweep = bench_mask_sweep(&spec, a.size, &sizes, a.reps, mode, a.seed)?;
        print!("{}", sweep.to_table());
    }
    Ok(())
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn random_mask(h: usize, w: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<ErrorMask, Failure> {
    let pixels: Vec<_> = sample(rng, h * w, n.min(h * w)).into_iter().map(|i| (i / w, i % w)).collect();
    Ok(ErrorMask::from_pixels(h, w, &pixels)?)
}

pub fn check<T: Scalar>(a: &CheckArgs, mode: ExecMode) -> CmdResult {
    if a.size == 0 {
        return Err(Failure::Invalid("--size must be positive".into()));
    }
    let spec = load::<T>(&a.spec)?;
    let (fwd_tol, bwd_tol) = if T::BITS == 64 { (0.0, 1e-10) } else { (1e-6, 1e-6) };
    let s = a.size;
    let image = FeatureMap::<T>::random(Shape::new(spec.input_channels, s, s)?, a.seed)?;
    let plan = densecnn::compile(&spec)?;
    let cache = dense_forward_with(&plan, &image, mode)?;
    let mut ok = true;

    // non-finite values never compare as equal
    let scan = scan_forward(&spec, &image)?;
    let finite = cache.output.is_finite() && scan.is_finite();
    let fwd = cache.output.max_abs_diff(&scan)?.as_f64();
    let fwd_ok = finite && fwd <= fwd_tol;
    ok &= fwd_ok;
    println!("forward\tmax_abs_diff {fwd:e}\ttol {fwd_tol:e}\t{}", verdict(fwd_ok));

    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let masks = [
        ("1", random_mask(s, s, 1, &mut rng)?),
        ("5", random_mask(s, s, 5, &mut rng)?),
        ("all", ErrorMask::all(s, s)),
    ];
    for (i, (label, mask)) in masks.iter().enumerate() {
        let delta = FeatureMap::<T>::random(cache.output.shape(), a.seed.wrapping_add(1 + i as u64))?;
        let opts = BackwardOptions {
            mode,
            input_delta: false,
        };
        let dense = dense_backward_with(&plan, &cache, &delta, mask, opts)?.gradients;
        let pixels = mask.pixels();
        let deltas: Vec<Vec<T>> = pixels
            .iter()
            .map(|&(y, x)| (0..delta.channels()).map(|c| delta.get(c, y, x)).collect())
            .collect();
        let oracle = patch_backward_batch(&spec, &image, &pixels, &deltas)?;
        let diff = dense.max_abs_diff(&oracle)?.as_f64();
        let bwd_ok = dense.is_finite() && oracle.is_finite() && diff < bwd_tol;
        ok &= bwd_ok;
        println!("backward mask={label}\tmax_abs_diff {diff:e}\ttol {bwd_tol:e}\t{}", verdict(bwd_ok));
    }

    let fd = finite_differences(&spec.cast::<f64>(), &image.cast::<f64>(), a.fd_params, a.seed)?;
    let fd_ok = fd.worst < FD_REL_TOL;
    ok &= fd_ok;
    println!(
        "gradient\t{} params ({} skipped at pool switches)\tmax_rel_err {:e}\ttol {FD_REL_TOL:e}\t{}",
        fd.checked,
        fd.skipped,
        fd.worst,
        verdict(fd_ok)
    );
    if ok {
        Ok(())
    } else {
        Err(Failure::Verification)
    }
}

struct FdSummary {
    checked: usize,
    skipped: usize,
    worst: f64,
}

/// Central differences of `sum(g * y)` against the dense gradients, over up
/// to `per_layer` seeded parameters of each conv layer.
fn finite_differences(
    spec: &NetworkSpec<f64>,
    image: &FeatureMap<f64>,
    per_layer: usize,
    seed: u64,
) -> Result<FdSummary, Failure> {
    let plan = densecnn::compile(spec)?;
    let cache = dense_forward_with(&plan, image, ExecMode::Serial)?;
    let g = FeatureMap::random(cache.output.shape(), seed ^ 0xfd)?;
    let mask = ErrorMask::all(image.height(), image.width());
    let grads = dense_backward_with(&plan, &cache, &g, &mask, BackwardOptions::default())?.gradients;
    let loss = |s: &NetworkSpec<f64>| -> Result<f64, Failure> {
        let y = dense_forward_with(&densecnn::compile(s)?, image, ExecMode::Serial)?.output;
        Ok(y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum())
    };
    let base = loss(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = FdSummary {
        checked: 0,
        skipped: 0,
        worst: 0.0,
    };
    for (k, grad) in grads.conv_gradients() {
        let n_weights = grad.kernel.len();
        let total = n_weights + grad.bias.len();
        for idx in sample(&mut rng, total, per_layer.min(total)) {
            let bumped = |h: f64| {
                let mut s = spec.clone();
                let LayerSpec::Conv(c) = &mut s.layers[k] else { unreachable!() };
                match idx.checked_sub(n_weights) {
                    None => c.weights[idx] += h,
                    Some(b) => c.bias[b] += h,
                }
                loss(&s)
            };
            let up = (bumped(FD_STEP)? - base) / FD_STEP;
            let down = (base - bumped(-FD_STEP)?) / FD_STEP;
            if (up - down).abs() > FD_KINK * up.abs().max(down.abs()).max(1.0) {
                summary.skipped += 1;
                continue;
            }
            let numeric = 0.5 * (up + down);
            let analytic = if idx < n_weights { grad.kernel[idx] } else { grad.bias[idx - n_weights] };
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_REL_FLOOR);
            summary.worst = if rel.is_finite() { summary.worst.max(rel) } else { f64::INFINITY };
            summary.checked += 1;
        }
    }
    Ok(summary)
}

pub fn fixture(a: &FixtureArgs) -> CmdResult {
    if a.size == 0 {
        return Err(Failure::Invalid("--size must be positive".into()));
    }
    let mut spec: NetworkSpec<f32> = match a.kind {
        FixtureKind::ExampleNet => presets::example_net(a.seed),
        FixtureKind::PlainCnn1 => presets::plain_cnn1(a.seed, 8),
        FixtureKind::Rcnn3Chain => presets::rcnn3_chain(a.seed),
        FixtureKind::RandomSmall => presets::random_small(a.seed),
    };
    create_dir(&a.out)?;
    let names = spec.layer_names();
    for (k, layer) in spec.layers.iter_mut().enumerate() {
        if let LayerSpec::Conv(c) = layer {
            let file = format!("{}.weights.fmap", names[k]);
            c.write_weights(a.out.join(&file))?;
            c.source = WeightSource::File(file);
        }
    }
    write_text(&a.out.join("net.spec"), &spec.to_document())?;
    let s = a.size;
    FeatureMap::<f32>::random(Shape::new(spec.input_channels, s, s)?, a.seed)?.write_fmap(a.out.join("image.fmap"))?;
    FeatureMap::<f32>::random(Shape::new(spec.output_channels(), s, s)?, a.seed.wrapping_add(1))?
        .write_fmap(a.out.join("target.fmap"))?;
    write_text(&a.out.join("mask.txt"), "all\n")?;
    Ok(())
}
