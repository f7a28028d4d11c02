//! Ready-made network documents used by fixtures, tests and benchmarks.
//!
//! Every conv layer gets `weights=seed:<s>` where `s` is derived from the
//! preset seed and the layer position, so a preset is fully determined by
//! its seed.

use std::fmt::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::netspec::{parse_spec, NetworkSpec};
use crate::Scalar;

fn layer_seed(seed: u64, layer: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(layer as u64)
}

fn parse<T: Scalar>(doc: &str) -> NetworkSpec<T> {
    parse_spec(doc, None).expect("preset documents are valid")
}

/// Single-channel net: 2x2 conv, 2x2/2 max pool, 2x2 conv, 3x3/3 max pool,
/// 2x2 conv. Takes 15x15 patches.
pub fn example_net_document(seed: u64) -> String {
    format!(
        "input channels=1\n\
         conv out=1 in=1 k=2 stride=1 weights=seed:{}\n\
         pool kind=max k=2 stride=2\n\
         conv out=1 in=1 k=2 stride=1 weights=seed:{}\n\
         pool kind=max k=3 stride=3\n\
         conv out=1 in=1 k=2 stride=1 weights=seed:{}\n",
        layer_seed(seed, 0),
        layer_seed(seed, 2),
        layer_seed(seed, 4)
    )
}

pub fn example_net<T: Scalar>(seed: u64) -> NetworkSpec<T> {
    parse(&example_net_document(seed))
}

/// The three-stage scene-labelling net with 50, 50 and 32 feature maps.
/// `pool1` is the first pooling kernel and stride: 8 gives 133x133
/// patches, 4 gives 69x69 and 2 gives 37x37.
pub fn plain_cnn1_document(seed: u64, pool1: usize) -> String {
    plain_cnn1_with_channels_document(seed, pool1, [50, 50, 32])
}

pub fn plain_cnn1<T: Scalar>(seed: u64, pool1: usize) -> NetworkSpec<T> {
    parse(&plain_cnn1_document(seed, pool1))
}

/// The same layer chain with custom channel counts, for quicker runs.
pub fn plain_cnn1_with_channels_document(seed: u64, pool1: usize, channels: [usize; 3]) -> String {
    let [c1, c2, c3] = channels;
    format!(
        "input channels=3\n\
         conv out={c1} in=3 k=6 stride=1 weights=seed:{}\n\
         pool kind=max k={pool1} stride={pool1}\n\
         nonlin kind=tanh\n\
         conv out={c2} in={c1} k=3 stride=1 weights=seed:{}\n\
         pool kind=max k=2 stride=2\n\
         nonlin kind=tanh\n\
         conv out={c3} in={c2} k=7 stride=1 weights=seed:{}\n",
        layer_seed(seed, 0),
        layer_seed(seed, 3),
        layer_seed(seed, 6)
    )
}

pub fn plain_cnn1_with_channels<T: Scalar>(
    seed: u64,
    pool1: usize,
    channels: [usize; 3],
) -> NetworkSpec<T> {
    parse(&plain_cnn1_with_channels_document(seed, pool1, channels))
}

/// The three-instance recurrent scene-labelling net unrolled into a plain
/// feed-forward chain (no weight sharing). Takes 155x155 patches.
pub fn rcnn3_chain_document(seed: u64) -> String {
    let mut doc = String::from("input channels=3\n");
    let mut layer = 0;
    let mut in_ch = 3;
    let mut conv = |doc: &mut String, layer: &mut usize, out: usize, k: usize| {
        writeln!(
            doc,
            "conv out={out} in={in_ch} k={k} stride=1 weights=seed:{}",
            layer_seed(seed, *layer)
        )
        .unwrap();
        in_ch = out;
        *layer += 1;
    };
    for _ in 0..3 {
        conv(&mut doc, &mut layer, 25, 8);
        doc.push_str("pool kind=max k=2 stride=2\nnonlin kind=tanh\n");
        layer += 2;
        conv(&mut doc, &mut layer, 50, 8);
        conv(&mut doc, &mut layer, 32, 1);
    }
    doc
}

pub fn rcnn3_chain<T: Scalar>(seed: u64) -> NetworkSpec<T> {
    parse(&rcnn3_chain_document(seed))
}

/// A small random net: 1-3 conv layers with kernels in {1, 2, 3}, 0-2
/// pooling layers with kernel = stride in {2, 3}, tanh/relu after most convs,
/// 1-3 channels everywhere.
pub fn random_small_document(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    let n_conv = rng.gen_range(1..=3);
    let n_pool = rng.gen_range(0..=2);
    let mut rest: Vec<bool> = std::iter::repeat_n(true, n_conv - 1)
        .chain(std::iter::repeat_n(false, n_pool))
        .collect();
    rest.shuffle(&mut rng);

    let input = rng.gen_range(1..=3);
    let mut doc = format!("input channels={input}\n");
    let mut in_ch = input;
    let mut layer = 0;
    for is_conv in std::iter::once(true).chain(rest) {
        if is_conv {
            let out = rng.gen_range(1..=3);
            let k = rng.gen_range(1..=3);
            writeln!(
                doc,
                "conv out={out} in={in_ch} k={k} stride=1 weights=seed:{}",
                layer_seed(seed, layer)
            )
            .unwrap();
            in_ch = out;
            layer += 1;
            if rng.gen_bool(0.75) {
                let kind = if rng.gen_bool(0.5) { "tanh" } else { "relu" };
                writeln!(doc, "nonlin kind={kind}").unwrap();
                layer += 1;
            }
        } else {
            let p = rng.gen_range(2..=3);
            let kind = if rng.gen_bool(0.7) { "max" } else { "avg" };
            writeln!(doc, "pool kind={kind} k={p} stride={p}").unwrap();
            layer += 1;
        }
    }
    doc
}

pub fn random_small<T: Scalar>(seed: u64) -> NetworkSpec<T> {
    parse(&random_small_document(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::LayerSpec;

    #[test]
    fn random_small_family_bounds() {
        for seed in 0..200 {
            let spec: NetworkSpec<f64> = random_small(seed);
            let convs: Vec<_> = spec.conv_layers().map(|(_, c)| c.clone()).collect();
            let pools = spec
                .layers
                .iter()
                .filter(|l| matches!(l, LayerSpec::Pool(_)))
                .count();
            assert!((1..=3).contains(&convs.len()));
            assert!(pools <= 2);
            assert!(convs.iter().all(|c| (1..=3).contains(&c.kernel_size) && c.stride == 1));
            assert!(matches!(spec.layers[0], LayerSpec::Conv(_)));
        }
    }

    #[test]
    fn presets_are_deterministic() {
        assert_eq!(random_small_document(3), random_small_document(3));
        assert_eq!(plain_cnn1_document(1, 8), plain_cnn1_document(1, 8));
        assert_eq!(rcnn3_chain::<f64>(2).layers.len(), 15);
    }
}
