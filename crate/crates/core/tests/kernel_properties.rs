use compkernel::arch::{ArchSpec, Layer};
use compkernel::data::{flip_augment, ImageDataset};
use compkernel::engine::{compose_kernel, ComposeOptions};
use compkernel::kernel::{self, KernelBlock};
use compkernel::oracles::{
    check_properties, naive_input, naive_layer, random_arch, random_case, relative_gap,
};
use compkernel::rng;
use proptest::prelude::*;
use rand::Rng;

fn images(seed: u64, n: usize, side: (usize, usize), c: usize) -> ImageDataset {
    let mut r = rng::stream(seed, 0);
    let pixels = (0..n * side.0 * side.1 * c)
        .map(|_| r.random_range(-1.0f32..1.0))
        .collect();
    ImageDataset::new(pixels, side, c, vec![0; n], 1, "random").unwrap()
}

fn self_block(ds: &ImageDataset) -> KernelBlock {
    let all = ds.batch(0..ds.len());
    kernel::input_kernel(&all, &all).unwrap()
}

fn as_f64(block: &KernelBlock) -> Vec<f64> {
    block.values().iter().map(|&v| v as f64).collect()
}

fn combine(a: &KernelBlock, b: &KernelBlock, alpha: f32, beta: f32) -> KernelBlock {
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| alpha * x + beta * y)
        .collect();
    KernelBlock::from_values(values, a.batch_a(), a.batch_b(), a.spatial(), a.stage()).unwrap()
}

#[test]
fn each_operator_matches_the_loop_reference() {
    let ds = images(1, 3, (4, 4), 2);
    let block = self_block(&ds);
    let diag = kernel::update_diag(&block).unwrap();
    let layers = [
        Layer::conv(3),
        Layer::conv(5),
        Layer::pool(2),
        Layer::pool(4),
        Layer::GlobalPool,
        Layer::ReluEmbed,
        Layer::GaussEmbed,
    ];
    for layer in layers {
        let fast = kernel::apply_layer(&block, &layer, Some((&diag, &diag))).unwrap();
        let slow = naive_layer(&naive_input(&ds), &layer).unwrap();
        let gap = relative_gap(&as_f64(&fast), &slow.data);
        assert!(gap <= 1e-5, "{layer}: {gap:e}");
    }
}

#[test]
fn input_kernel_matches_reference_on_rectangular_cross_batches() {
    let a = images(2, 2, (2, 3), 3);
    let b = images(3, 3, (2, 3), 3);
    let block = kernel::input_kernel(&a.batch(0..2), &b.batch(0..3)).unwrap();
    for i in 0..2 {
        for l in 0..3 {
            for p in 0..6 {
                for q in 0..6 {
                    let x = &a.image(i)[p * 3..p * 3 + 3];
                    let z = &b.image(l)[q * 3..q * 3 + 3];
                    let dot: f64 = x.iter().zip(z).map(|(u, v)| *u as f64 * *v as f64).sum();
                    let got = block.get(i, p / 3, p % 3, l, q / 3, q % 3) as f64;
                    assert!((got - dot).abs() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn global_pool_equals_full_width_pool() {
    let ds = images(4, 2, (4, 4), 1);
    let block = self_block(&ds);
    let a = kernel::global_pool(&block);
    let b = kernel::pool(&block, 4).unwrap();
    let c = kernel::pool(&kernel::pool(&block, 2).unwrap(), 2).unwrap();
    assert!(relative_gap(&as_f64(&a), &as_f64(&b)) < 1e-6);
    assert!(relative_gap(&as_f64(&a), &as_f64(&c)) < 1e-6);
}

#[test]
fn myrtle_on_cifar_sized_images_has_valid_stage_kernels() {
    // Full-size but few images: every stage stays PSD and symmetric.
    let ds = images(5, 1, (8, 8), 3);
    let arch = ArchSpec::new(
        "mini-myrtle",
        vec![
            Layer::conv(3),
            Layer::ReluEmbed,
            Layer::conv(3),
            Layer::ReluEmbed,
            Layer::pool(2),
            Layer::conv(3),
            Layer::GaussEmbed,
            Layer::pool(2),
            Layer::pool(2),
        ],
    );
    check_properties(&ds, &arch).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stage_kernels_stay_psd_symmetric_and_embeddings_keep_the_diagonal(seed in any::<u64>()) {
        let (arch, ds, _) = random_case(seed, 4, 4);
        prop_assert!(check_properties(&ds, &arch).is_ok(), "{:?}", check_properties(&ds, &arch));
    }

    #[test]
    fn conv_and_pool_are_linear(seed in any::<u64>(), alpha in -3.0f32..3.0, beta in -3.0f32..3.0) {
        let k1 = self_block(&images(seed, 2, (4, 4), 2));
        let k2 = self_block(&images(seed ^ 0xabcd, 2, (4, 4), 2));
        let mixed = combine(&k1, &k2, alpha, beta);
        let ops: [fn(&KernelBlock) -> KernelBlock; 3] = [
            |b| kernel::conv(b, 1),
            |b| kernel::pool(b, 2).unwrap(),
            |b| kernel::global_pool(b),
        ];
        for op in ops {
            let lhs = op(&mixed);
            let rhs = combine(&op(&k1), &op(&k2), alpha, beta);
            let scale = 1.0 + rhs.values().iter().fold(0.0f32, |m, v| m.max(v.abs()));
            let gap = lhs.values().iter().zip(rhs.values()).fold(0.0f32, |m, (x, y)| m.max((x - y).abs()));
            prop_assert!(gap <= 1e-5 * scale, "gap {}", gap);
        }
    }

    #[test]
    fn flipping_both_images_leaves_the_kernel_unchanged(seed in any::<u64>()) {
        let mut r = rng::stream(seed, 9);
        let side = (r.random_range(1..=6), r.random_range(1..=6));
        let a = images(seed, 3, side, 2);
        let b = images(seed.wrapping_add(1), 2, side, 2);
        let arch = random_arch(&mut r, side, 5);
        let flip = |ds: &ImageDataset| {
            let both = flip_augment(ds);
            both.select(&(ds.len()..2 * ds.len()).collect::<Vec<_>>())
        };
        let opts = ComposeOptions { tile: Some(2), threads: Some(1), ..Default::default() };
        let (plain, _) = compose_kernel(&a, &b, &arch, &opts).unwrap();
        let (flipped, _) = compose_kernel(&flip(&a), &flip(&b), &arch, &opts).unwrap();
        prop_assert!(relative_gap(flipped.values(), plain.values()) <= 1e-5);
    }

    #[test]
    fn cauchy_schwarz_on_cross_blocks(seed in any::<u64>()) {
        let a = images(seed, 2, (3, 3), 2);
        let b = images(seed.wrapping_add(7), 3, (3, 3), 2);
        let cross = kernel::conv(&kernel::input_kernel(&a.batch(0..2), &b.batch(0..3)).unwrap(), 1);
        let da = kernel::update_diag(&kernel::conv(&self_block(&a), 1)).unwrap();
        let db = kernel::update_diag(&kernel::conv(&self_block(&b), 1)).unwrap();
        let out = kernel::relu_embed(&cross, &da, &db).unwrap();
        for i in 0..2 { for j in 0..3 { for k in 0..3 { for l in 0..3 { for m in 0..3 { for n in 0..3 {
            let bound = da.image(i)[j * 3 + k] * db.image(l)[m * 3 + n];
            let v = out.get(i, j, k, l, m, n) as f64;
            prop_assert!(v.abs() <= bound * (1.0 + 1e-5) + 1e-6, "{} vs {}", v, bound);
        }}}}}}
    }
}
