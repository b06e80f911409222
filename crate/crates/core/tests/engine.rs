use std::fs;

use compkernel::arch::{ArchSpec, Layer};
use compkernel::data::{flip_augment, ImageDataset};
use compkernel::engine::{compose_kernel, ComposeOptions, EngineError, GramMatrix, TileCache};
use compkernel::engine::{gram_key, schedule_tiles};
use compkernel::oracles::{naive_compose, relative_gap};
use compkernel::rng;
use nalgebra::SymmetricEigen;
use rand::Rng;

fn images(seed: u64, n: usize, side: usize, c: usize) -> ImageDataset {
    let mut r = rng::stream(seed, 0);
    let pixels = (0..n * side * side * c)
        .map(|_| r.random_range(-1.0f32..1.0))
        .collect();
    let labels = (0..n).map(|i| i % 3).collect();
    ImageDataset::new(pixels, (side, side), c, labels, 3, "random").unwrap()
}

fn opts(tile: usize, threads: usize) -> ComposeOptions {
    ComposeOptions {
        tile: Some(tile),
        threads: Some(threads),
        ..Default::default()
    }
}

fn small_arch() -> ArchSpec {
    ArchSpec::new(
        "small",
        vec![
            Layer::conv(3),
            Layer::ReluEmbed,
            Layer::pool(2),
            Layer::conv(3),
            Layer::GaussEmbed,
            Layer::GlobalPool,
        ],
    )
}

#[test]
fn empty_arch_on_single_pixels_is_the_dot_product() {
    let ds = ImageDataset::new(vec![0.6, 0.8, 0.6, 0.8], (1, 1), 2, vec![0, 1], 2, "t").unwrap();
    let (g, stats) = compose_kernel(&ds, &ds, &ArchSpec::new("id", vec![]), &opts(1, 1)).unwrap();
    assert!(g.symmetric);
    assert!(g.values().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    assert_eq!(stats.tiles, 3);
}

#[test]
fn result_is_independent_of_tile_and_threads() {
    let ds = images(1, 10, 4, 3);
    let (base, _) = compose_kernel(&ds, &ds, &small_arch(), &opts(1, 1)).unwrap();
    for tile in [1, 2, 5] {
        for threads in [1, 4] {
            let (g, _) = compose_kernel(&ds, &ds, &small_arch(), &opts(tile, threads)).unwrap();
            assert_eq!(g.values(), base.values(), "tile {tile}, threads {threads}");
        }
    }
    let test = images(2, 7, 4, 3);
    let (cross, _) = compose_kernel(&test, &ds, &small_arch(), &opts(3, 2)).unwrap();
    let (cross1, _) = compose_kernel(&test, &ds, &small_arch(), &opts(1, 1)).unwrap();
    assert_eq!(cross.values(), cross1.values());
    assert!(!cross.symmetric);
}

#[test]
fn symmetric_gram_is_mirrored_and_psd() {
    let ds = images(3, 9, 4, 2);
    let (g, _) = compose_kernel(&ds, &ds, &small_arch(), &opts(2, 1)).unwrap();
    assert_eq!(g.asymmetry(), 0.0);
    let m = g.to_dmatrix();
    let n = m.nrows() as f64;
    let min = SymmetricEigen::new(m.clone()).eigenvalues.min();
    assert!(min >= -1e-5 * m.trace() / n);
}

#[test]
fn cross_kernel_rows_match_the_symmetric_computation() {
    let ds = images(4, 6, 4, 2);
    let (full, _) = compose_kernel(&ds, &ds, &small_arch(), &opts(4, 1)).unwrap();
    let head = ds.select(&[0, 1]);
    let (cross, _) = compose_kernel(&head, &ds, &small_arch(), &opts(4, 1)).unwrap();
    for r in 0..2 {
        for c in 0..6 {
            assert!(
                (cross.get(r, c) - full.get(r, c)).abs() <= 1e-6 * full.get(r, r).abs().max(1.0)
            );
        }
    }
}

#[test]
fn myrtle5_on_four_cifar_sized_images_matches_the_reference() {
    let ds = images(5, 4, 32, 3);
    let arch = ArchSpec::myrtle(5, Layer::ReluEmbed).unwrap();
    let (g, _) = compose_kernel(&ds, &ds, &arch, &opts(2, 4)).unwrap();
    let reference = naive_compose(&ds, &ds, &arch).unwrap();
    let gap = relative_gap(g.values(), reference.values());
    assert!(gap <= 1e-5, "gap {gap:e}");
}

#[test]
fn flipped_block_equals_original_block() {
    let ds = images(6, 4, 4, 3);
    let both = flip_augment(&ds);
    let (g, _) = compose_kernel(&both, &both, &small_arch(), &opts(3, 2)).unwrap();
    let n = ds.len();
    for i in 0..n {
        for j in 0..n {
            let orig = g.get(i, j);
            let flip = g.get(n + i, n + j);
            assert!(
                (orig - flip).abs() <= 1e-5 * orig.abs().max(1e-3),
                "({i},{j})"
            );
        }
    }
}

#[test]
fn mismatched_architecture_is_a_validation_error() {
    let ds = images(7, 2, 6, 1);
    let arch = ArchSpec::new("bad", vec![Layer::pool(4), Layer::GlobalPool]);
    let err = compose_kernel(&ds, &ds, &arch, &opts(1, 1)).unwrap_err();
    match err {
        EngineError::Validation {
            d1: 6,
            d2: 6,
            ref source,
            ..
        } => {
            assert!(source.to_string().contains("layer 0 (pool 4)"), "{source}");
        }
        other => panic!("unexpected {other:?}"),
    }
    let not_scalar = ArchSpec::new("ns", vec![Layer::pool(2)]);
    assert!(matches!(
        compose_kernel(&ds, &ds, &not_scalar, &opts(1, 1)),
        Err(EngineError::Validation { .. })
    ));
    let other = images(8, 2, 4, 1);
    assert!(matches!(
        compose_kernel(
            &ds,
            &other,
            &ArchSpec::new("g", vec![Layer::GlobalPool]),
            &opts(1, 1)
        ),
        Err(EngineError::DatasetMismatch(_))
    ));
}

fn cached(dir: &std::path::Path, tile: usize) -> ComposeOptions {
    ComposeOptions {
        cache_dir: Some(dir.to_path_buf()),
        ..opts(tile, 2)
    }
}

#[test]
fn warm_cache_gives_the_same_matrix_without_computing() {
    let dir = tempfile::tempdir().unwrap();
    let ds = images(9, 7, 4, 2);
    let (cold, s1) = compose_kernel(&ds, &ds, &small_arch(), &cached(dir.path(), 2)).unwrap();
    assert_eq!((s1.cached, s1.computed), (0, s1.tiles));
    let (warm, s2) = compose_kernel(&ds, &ds, &small_arch(), &cached(dir.path(), 2)).unwrap();
    assert_eq!((s2.cached, s2.computed), (s2.tiles, 0));
    assert_eq!(cold, warm);
}

#[test]
fn corrupt_tile_is_recomputed() {
    let dir = tempfile::tempdir().unwrap();
    let ds = images(10, 5, 4, 2);
    let arch = small_arch();
    let (cold, _) = compose_kernel(&ds, &ds, &arch, &cached(dir.path(), 2)).unwrap();
    let cache = TileCache::new(dir.path(), gram_key(&ds, &ds, &arch));
    let path = cache.path(&(0..2), &(2..4));
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 6;
    bytes[last] ^= 0x55;
    fs::write(&path, bytes).unwrap();
    let (again, stats) = compose_kernel(&ds, &ds, &arch, &cached(dir.path(), 2)).unwrap();
    assert_eq!(stats.computed, 1);
    assert_eq!(again, cold);
}

#[test]
fn interrupted_run_resumes_to_the_same_matrix() {
    let ds = images(11, 8, 4, 2);
    let arch = small_arch();
    let (reference, _) = compose_kernel(&ds, &ds, &arch, &opts(2, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let total = schedule_tiles(8, 8, 2, true).len();
    let half = ComposeOptions {
        max_new_tiles: Some(total / 2),
        ..cached(dir.path(), 2)
    };
    match compose_kernel(&ds, &ds, &arch, &half) {
        Err(EngineError::Interrupted {
            completed,
            total: t,
        }) => {
            assert_eq!(t, total);
            assert_eq!(completed, total / 2);
        }
        other => panic!("expected interruption, got {other:?}"),
    }
    let (resumed, stats) = compose_kernel(&ds, &ds, &arch, &cached(dir.path(), 2)).unwrap();
    assert_eq!(stats.cached, total / 2);
    assert_eq!(stats.computed, total - total / 2);
    assert_eq!(resumed.values(), reference.values());
}

#[test]
fn gram_file_round_trip_keeps_ids_and_key() {
    let dir = tempfile::tempdir().unwrap();
    let ds = images(12, 3, 4, 1);
    let (g, _) = compose_kernel(&ds, &ds, &small_arch(), &opts(2, 1)).unwrap();
    let key = gram_key(&ds, &ds, &small_arch());
    let path = dir.path().join("train.ckgm");
    g.write(&path, &key).unwrap();
    let (back, k2) = GramMatrix::read(&path).unwrap();
    assert_eq!(back, g);
    assert_eq!(k2, key);
}
