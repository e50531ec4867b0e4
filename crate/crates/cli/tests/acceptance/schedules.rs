//! Criterion 1: the shipped schedule files reproduce the published per-class
//! counts through `prepare-data`, quickly and deterministically.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bagan::data::{read_container, write_container, ImageBatch, LabelBatch};
use bagan::rng;
use bagan_cli::{run, Cli};
use clap::Parser;
use rand::Rng;

use crate::Verdict;

const FASHION_B: [usize; 10] = [4166, 73, 139, 210, 287, 370, 422, 387, 545, 651];
const CIFAR_D: [usize; 10] = [3490, 71, 130, 221, 269, 349, 435, 485, 572, 628];
const CELLS_TOTAL: [usize; 4] = [7000, 365, 133, 1109];
const CELLS_TRAIN: [usize; 4] = [5600, 292, 106, 887];
const CELLS_TEST: [usize; 4] = [1400, 73, 27, 222];
const CELLS_NAMES: [&str; 4] = ["normal", "ring", "schizont", "trophozoite"];
const TIME_LIMIT_SECS: f64 = 60.0;

fn schedule(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schedules").join(name)
}

fn noise_pool(per_class: usize, classes: usize, (h, w, c): (usize, usize, usize), seed: u64) -> (ImageBatch, LabelBatch) {
    let n = per_class * classes;
    let mut rng = rng::seeded(seed);
    let pixels: Vec<u8> = (0..n * h * w * c).map(|_| rng.gen()).collect();
    let labels = (0..n).map(|i| (i % classes) as i64).collect();
    (
        ImageBatch::from_u8(&pixels, (n, h, w, c)).unwrap(),
        LabelBatch::new(labels, classes).unwrap(),
    )
}

fn cells_folder(root: &Path) {
    let mut rng = rng::seeded(11);
    for (name, &count) in CELLS_NAMES.iter().zip(&CELLS_TOTAL) {
        let dir = root.join(name);
        fs::create_dir_all(&dir).unwrap();
        for i in 0..count {
            let pixels: Vec<u8> = (0..8 * 8 * 3).map(|_| rng.gen()).collect();
            image::save_buffer(dir.join(format!("{i:05}.png")), &pixels, 8, 8, image::ColorType::Rgb8).unwrap();
        }
    }
}

struct Prepared {
    counts: Vec<usize>,
    container_counts: Vec<usize>,
    bytes: Vec<u8>,
    secs: f64,
}

fn prepare(tmp: &Path, source: &Path, schedule: &Path, shape: [usize; 3], out: &str) -> bagan::Result<Prepared> {
    let config = tmp.join(format!("{out}.toml"));
    fs::write(
        &config,
        format!(
            "[dataset]\nname = \"{out}\"\nimage_shape = [{}, {}, {}]\nsource = \"{}\"\nschedule = \"{}\"\n",
            shape[0],
            shape[1],
            shape[2],
            source.display(),
            schedule.display()
        ),
    )?;
    let out_dir = tmp.join(out);
    let cli = Cli::try_parse_from([
        "bagan",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "prepare-data",
    ])
    .unwrap();
    let start = Instant::now();
    let table = run(&cli)?;
    let secs = start.elapsed().as_secs_f64();
    let counts = table
        .lines()
        .skip(1)
        .filter_map(|l| l.rsplit(',').next()?.parse().ok())
        .collect();
    let container = out_dir.join("data.safetensors");
    let (_, labels) = read_container(&container)?;
    let mut container_counts = vec![0; labels.iter().max().map_or(0, |m| *m as usize + 1)];
    for l in labels {
        container_counts[l as usize] += 1;
    }
    Ok(Prepared {
        counts,
        container_counts,
        bytes: fs::read(&container)?,
        secs,
    })
}

pub fn criterion() -> bagan::Result<Verdict> {
    let tmp = tempfile::tempdir()?;
    let t = tmp.path();

    let (images, labels) = noise_pool(6000, 10, (28, 28, 1), 1);
    let fashion = t.join("fashion.safetensors");
    write_container(&fashion, &images, &labels)?;
    drop(images);
    let (images, labels) = noise_pool(5000, 10, (32, 32, 3), 2);
    let cifar = t.join("cifar.safetensors");
    write_container(&cifar, &images, &labels)?;
    drop(images);
    let cells = t.join("cells");
    cells_folder(&cells);

    let cases: [(&str, &Path, &str, [usize; 3], &[usize]); 4] = [
        ("fashion_b", &fashion, "fashion_mnist_b.txt", [28, 28, 1], &FASHION_B),
        ("cifar_d", &cifar, "cifar10_d.txt", [32, 32, 3], &CIFAR_D),
        ("cells_train", &cells, "cells_train.txt", [8, 8, 3], &CELLS_TRAIN),
        ("cells_test", &cells, "cells_test.txt", [8, 8, 3], &CELLS_TEST),
    ];
    let mut pass = true;
    let mut notes = Vec::new();
    for (name, source, file, shape, expected) in cases {
        let first = prepare(t, source, &schedule(file), shape, name)?;
        let again = prepare(t, source, &schedule(file), shape, &format!("{name}_rerun"))?;
        let exact = first.counts == expected && first.container_counts == expected;
        let fast = first.secs < TIME_LIMIT_SECS;
        let same = first.bytes == again.bytes;
        pass &= exact && fast && same;
        notes.push(format!(
            "{name} counts {} in {:.1}s, rerun {}",
            if exact { "exact" } else { "WRONG" },
            first.secs,
            if same { "identical" } else { "DIFFERS" }
        ));
        if !exact {
            notes.push(format!("{name} got {:?}", first.counts));
        }
    }
    Ok(Verdict::new(pass, notes.join("; ")))
}
