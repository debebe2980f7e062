#![allow(dead_code)]

use std::fs;
use std::path::Path;

use astro_repair::dataset::{Dataset, Split, IMAGE_MAGIC, LABEL_MAGIC};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Balanced 10-class images: each class lights its own pixel stripes.
pub fn patterned(n: usize, side: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = side * side;
    let mut pixels = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for k in 0..n {
        let class = k % 10;
        for p in 0..per {
            let on = (p + class * 3) % 10 < 3;
            let base: f64 = if on { 220.0 } else { 15.0 };
            pixels.push((base + rng.random_range(-15.0..15.0)).clamp(0.0, 255.0) as u8);
        }
        labels.push(class as u8);
    }
    Dataset::new(pixels, labels, side, side, Split::Train).unwrap()
}

/// Balanced labels on images that carry no information about them.
pub fn uninformative(n: usize, side: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = side * side;
    let pixels = (0..n * per).map(|_| rng.random_range(0..=255u8)).collect();
    let labels = (0..n).map(|k| (k % 10) as u8).collect();
    Dataset::new(pixels, labels, side, side, Split::Test).unwrap()
}

fn write_idx(dir: &Path, prefix: &str, data: &Dataset) {
    let mut img = IMAGE_MAGIC.to_be_bytes().to_vec();
    for d in [data.len(), data.rows, data.cols] {
        img.extend((d as u32).to_be_bytes());
    }
    for k in 0..data.len() {
        img.extend(data.image(k));
    }
    fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), img).unwrap();
    let mut lbl = LABEL_MAGIC.to_be_bytes().to_vec();
    lbl.extend((data.len() as u32).to_be_bytes());
    lbl.extend(data.labels());
    fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), lbl).unwrap();
}

/// Write a 28×28 patterned dataset with standard file names.
pub fn write_idx_dataset(dir: &Path, n_train: usize, n_test: usize, seed: u64) {
    write_idx(dir, "train", &patterned(n_train, 28, seed));
    write_idx(dir, "t10k", &patterned(n_test, 28, seed ^ 0xabcdef));
}
