//! Fixture helpers shared by the CLI integration tests: synthetic PPM
//! corpora, manifests, config files, and a wrapper around the binary.

#![allow(dead_code)]

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::Command;

use covernet::data::{write_manifest, BookRecord};
use covernet::image::{encode_ppm, RgbImage};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_covernet")
}

pub struct CmdOut {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Runs the binary with `dir` as the working directory so configs can
/// use relative paths, and captures both streams.
pub fn run(dir: &Path, args: &[&str]) -> CmdOut {
    let out = Command::new(bin())
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary spawns");
    CmdOut {
        code: out.status.code().expect("no signal"),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Well-separated deterministic color per class.
pub fn class_color(class: usize) -> [u8; 3] {
    [
        ((class * 53 + 11) % 256) as u8,
        ((class * 101 + 37) % 256) as u8,
        ((class * 197 + 73) % 256) as u8,
    ]
}

/// Writes a solid-color PPM with one pixel perturbed by `index` so
/// images within a class are distinct.
pub fn write_ppm(path: &Path, size: usize, color: [u8; 3], index: usize) -> io::Result<()> {
    let mut pixels = Vec::with_capacity(size * size * 3);
    for _ in 0..size * size {
        pixels.extend_from_slice(&color);
    }
    let slot = (index * 7) % (size * size);
    pixels[slot * 3] = pixels[slot * 3].wrapping_add(1 + (index % 16) as u8);
    fs::write(path, encode_ppm(&RgbImage::new(size, size, pixels)))
}

pub struct Corpus {
    pub root: PathBuf,
    pub manifest: PathBuf,
    pub class_table: PathBuf,
}

/// Builds `root/img/*.ppm`, `root/books.csv`, and `root/classes.csv`
/// with `per_class` images for each of `class_count` classes.
pub fn write_corpus(
    root: &Path,
    class_count: usize,
    per_class: usize,
    size: usize,
) -> io::Result<Corpus> {
    let img_dir = root.join("img");
    fs::create_dir_all(&img_dir)?;
    let mut records = Vec::with_capacity(class_count * per_class);
    for class in 0..class_count {
        for index in 0..per_class {
            let file = format!("img/c{class:02}_{index:04}.ppm");
            write_ppm(&root.join(&file), size, class_color(class), index)?;
            records.push(record(class, index, file));
        }
    }
    let manifest = root.join("books.csv");
    fs::write(&manifest, write_manifest(&records))?;
    let class_table = root.join("classes.csv");
    fs::write(&class_table, table_bytes(class_count))?;
    Ok(Corpus {
        root: root.to_path_buf(),
        manifest,
        class_table,
    })
}

pub fn record(class: usize, index: usize, image_file: String) -> BookRecord {
    BookRecord {
        id: format!("b{class:02}-{index:05}"),
        image_file,
        image_url: format!("http://covers.invalid/{class}/{index}"),
        // A comma in some titles keeps the CSV quoting path honest.
        title: if index % 7 == 0 {
            format!("Tome {index}, volume {class}")
        } else {
            format!("Tome {index} of {class}")
        },
        author: format!("Author {class}"),
        class_id: class as u32,
        class_name: class_name(class),
    }
}

pub fn class_name(class: usize) -> String {
    format!("genre{class:02}")
}

pub fn table_bytes(class_count: usize) -> Vec<u8> {
    let mut text = String::new();
    for class in 0..class_count {
        text.push_str(&format!("{class},{}\n", class_name(class)));
    }
    text.into_bytes()
}

/// Writes `key = value` lines to `path`.
pub fn write_config(path: &Path, pairs: &[(&str, &str)]) -> io::Result<()> {
    let mut text = String::from("# test fixture\n");
    for (key, value) in pairs {
        text.push_str(&format!("{key} = {value}\n"));
    }
    fs::write(path, text)
}
