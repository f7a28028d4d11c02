use densecnn::bwd::{dense_backward_with, BackwardOptions};
use densecnn::oracle::{patch_backward_batch, patch_forward, scan_forward};
use densecnn::{compile, dense_backward, dense_forward, presets, ErrorMask, FeatureMap, NetworkSpec, Scalar, Shape};
use proptest::prelude::*;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn image<T: Scalar>(spec: &NetworkSpec<T>, h: usize, w: usize, seed: u64) -> FeatureMap<T> {
    FeatureMap::random(Shape::new(spec.input_channels, h, w).unwrap(), seed).unwrap()
}

fn forward_diff<T: Scalar>(spec: &NetworkSpec<T>, img: &FeatureMap<T>) -> T {
    let dense = dense_forward(&compile(spec).unwrap(), img).unwrap().output;
    dense.max_abs_diff(&scan_forward(spec, img).unwrap()).unwrap()
}

/// Dense gradients against the summed oracle patch gradients for `mask`.
fn backward_diff<T: Scalar>(spec: &NetworkSpec<T>, img: &FeatureMap<T>, mask: &ErrorMask, seed: u64) -> T {
    let plan = compile(spec).unwrap();
    let cache = dense_forward(&plan, img).unwrap();
    let delta = FeatureMap::random(cache.output.shape(), seed).unwrap();
    let dense = dense_backward(&plan, &cache, &delta, mask).unwrap();
    let pixels = mask.pixels();
    let deltas: Vec<Vec<T>> = pixels
        .iter()
        .map(|&(y, x)| (0..delta.channels()).map(|c| delta.get(c, y, x)).collect())
        .collect();
    let oracle = patch_backward_batch(spec, img, &pixels, &deltas).unwrap();
    dense.max_abs_diff(&oracle).unwrap()
}

fn random_mask(h: usize, w: usize, n: usize, seed: u64) -> ErrorMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels: Vec<_> = sample(&mut rng, h * w, n).into_iter().map(|i| (i / w, i % w)).collect();
    ErrorMask::from_pixels(h, w, &pixels).unwrap()
}

const STRIDED_CONV: &str = "input channels=2
conv out=3 in=2 k=3 stride=2 weights=seed:1
nonlin kind=tanh
conv out=2 in=3 k=2 stride=1 weights=seed:2
pool kind=max k=2 stride=2
conv out=2 in=2 k=2 stride=1 weights=seed:3
";

const OVERLAPPING_POOL: &str = "input channels=1
conv out=2 in=1 k=2 stride=1 weights=seed:4
pool kind=max k=3 stride=2
nonlin kind=relu
conv out=2 in=2 k=3 stride=1 weights=seed:5
pool kind=avg k=2 stride=1
conv out=1 in=2 k=1 stride=1 weights=seed:6
";

#[test]
fn example_net_dense_matches_scan() {
    let spec = presets::example_net::<f64>(3);
    assert_eq!(forward_diff(&spec, &image(&spec, 5, 5, 1)), 0.0);
    assert_eq!(forward_diff(&spec, &image(&spec, 13, 9, 2)), 0.0);
}

#[test]
fn strided_conv_and_overlapping_pool() {
    for doc in [STRIDED_CONV, OVERLAPPING_POOL] {
        let spec = densecnn::parse_spec::<f64>(doc, None).unwrap();
        let img = image(&spec, 11, 14, 7);
        assert_eq!(forward_diff(&spec, &img), 0.0);
        for mask in [ErrorMask::all(11, 14), random_mask(11, 14, 4, 8)] {
            assert!(backward_diff(&spec, &img, &mask, 9) < 1e-10);
        }
    }
}

#[test]
fn each_pixel_equals_its_patch() {
    let spec = presets::plain_cnn1_with_channels::<f64>(2, 2, [3, 2, 2]);
    let img = image(&spec, 6, 7, 3);
    let out = dense_forward(&compile(&spec).unwrap(), &img).unwrap().output;
    let n = spec.patch_size().unwrap();
    let (lead, trail) = spec.padding().unwrap();
    let padded = img.pad_asym(lead, trail, 0.0);
    for y in 0..6 {
        for x in 0..7 {
            let r = patch_forward(&spec, &padded.crop_patch(y + lead, x + lead, n).unwrap()).unwrap();
            let dense: Vec<f64> = (0..out.channels()).map(|c| out.get(c, y, x)).collect();
            assert_eq!(dense, r.scores);
        }
    }
}

#[test]
fn rcnn3_chain_single_pixel() {
    let spec = presets::rcnn3_chain::<f32>(1);
    assert_eq!(spec.patch_size().unwrap(), 155);
    // channel counts are large, so one pixel is enough
    assert_eq!(forward_diff(&spec, &image(&spec, 1, 1, 4)), 0.0);
}

#[test]
fn input_delta_is_forward_adjoint() {
    let spec = densecnn::parse_spec::<f64>(
        "input channels=1\nconv out=1 in=1 k=2 stride=1 weights=seed:1\npool kind=avg k=2 stride=2\nconv out=1 in=1 k=2 stride=1 weights=seed:2\n",
        None,
    )
    .unwrap();
    let plan = compile(&spec).unwrap();
    let x = image(&spec, 5, 6, 1);
    let cache = dense_forward(&plan, &x).unwrap();
    let g = FeatureMap::random(cache.output.shape(), 2).unwrap();
    let out = dense_backward_with(
        &plan,
        &cache,
        &g,
        &ErrorMask::all(5, 6),
        BackwardOptions {
            input_delta: true,
            ..Default::default()
        },
    )
    .unwrap();
    let dx = out.input_delta.unwrap();
    assert_eq!(dx.shape(), x.shape());
    let probe = |m: &FeatureMap<f64>| -> f64 {
        let y = dense_forward(&plan, m).unwrap().output;
        y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
    };
    let h = 1e-5;
    for idx in 0..x.data().len() {
        let mut p = x.clone();
        p.data_mut()[idx] += h;
        let mut m = x.clone();
        m.data_mut()[idx] -= h;
        let numeric = (probe(&p) - probe(&m)) / (2.0 * h);
        assert!((numeric - dx.data()[idx]).abs() < 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn random_nets_forward_f64(seed in 0u64..10_000, h in 1usize..=16, w in 1usize..=16) {
        let spec = presets::random_small::<f64>(seed);
        prop_assert_eq!(forward_diff(&spec, &image(&spec, h, w, seed)), 0.0);
    }

    #[test]
    fn random_nets_forward_f32(seed in 0u64..10_000, h in 1usize..=16, w in 1usize..=16) {
        let spec = presets::random_small::<f32>(seed);
        prop_assert!(forward_diff(&spec, &image(&spec, h, w, seed)) < 1e-6);
    }

    #[test]
    fn random_nets_backward_f64(seed in 0u64..10_000, h in 1usize..=12, w in 1usize..=12, n in 1usize..=5) {
        let spec = presets::random_small::<f64>(seed);
        let img = image(&spec, h, w, seed);
        let mask = random_mask(h, w, n.min(h * w), seed);
        prop_assert!(backward_diff(&spec, &img, &mask, seed) < 1e-10);
        prop_assert!(backward_diff(&spec, &img, &ErrorMask::all(h, w), seed) < 1e-10);
    }
}
