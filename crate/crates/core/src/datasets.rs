//! Source datasets: Fashion-MNIST (IDX), CIFAR-10 (binary batches), image
//! folders with optional segmentations, and a small synthetic shape set.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoygen::{LabeledImage, ObjectMaskStrategy};
use crate::error::{Error, Result};

pub const DATA_DIR_ENV: &str = "XBLD_DATA_DIR";

#[derive(Clone, Debug)]
pub struct SourceImage {
    pub image: LabeledImage,
    /// Grayscale `H×W` segmentation in `[0,1]`, when the source ships one.
    pub segmentation: Option<Vec<f32>>,
}

impl SourceImage {
    pub fn plain(image: LabeledImage) -> Self {
        SourceImage { image, segmentation: None }
    }
}

/// A labelled dataset with disjoint train/test splits.
#[derive(Clone, Debug)]
pub struct SourceDataset {
    /// Directory name used for the decoyed copy.
    pub name: String,
    /// Where the data came from (builtin name or path).
    pub origin: String,
    pub num_classes: usize,
    pub train: Vec<SourceImage>,
    pub test: Vec<SourceImage>,
    /// Object-mask strategy to use when the caller does not pick one.
    pub default_strategy: ObjectMaskStrategy,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Limits {
    pub train: Option<usize>,
    pub test: Option<usize>,
}

/// `$XBLD_DATA_DIR`, else `~/.cache/xbld`.
pub fn data_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
        return PathBuf::from(dir);
    }
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    home.join(".cache").join("xbld")
}

/// Resolves a builtin name (`fashion-mnist`, `cifar10`, `toy[:train:test]`)
/// or a directory path.
pub fn load_source(spec: &str, limits: Limits, patch_size: usize) -> Result<SourceDataset> {
    let mut ds = match spec {
        "fashion-mnist" | "fmnist" => {
            let dir = data_dir().join("fashion-mnist");
            load_idx_dir(&dir, "decoy-fashion-mnist", limits).map_err(|e| missing_hint(e, &dir))?
        }
        "cifar10" | "cifar-10" => {
            let dir = data_dir().join("cifar-10-batches-bin");
            let mut ds = load_cifar_dir(&dir, limits).map_err(|e| missing_hint(e, &dir))?;
            ds.default_strategy = ObjectMaskStrategy::ComplementOfCorners { patch_size };
            ds
        }
        s if s == "toy" || s.starts_with("toy:") => {
            let mut parts = s.split(':').skip(1);
            let mut num = |d: usize| -> Result<usize> {
                parts
                    .next()
                    .map(|p| p.parse().map_err(|_| Error::InvalidConfig(format!("bad toy spec `{s}`"))))
                    .transpose()
                    .map(|v| v.unwrap_or(d))
            };
            let (tr, te) = (num(800)?, num(200)?);
            toy_shapes(tr, te, 0)
        }
        path => {
            let dir = Path::new(path);
            if !dir.is_dir() {
                return Err(Error::Dataset(format!("`{path}` is neither a builtin dataset nor a directory")));
            }
            if find_file(dir, "train-images-idx3-ubyte").is_some() {
                let name = format!("decoy-{}", dir_name(dir));
                load_idx_dir(dir, &name, limits)?
            } else if dir.join("data_batch_1.bin").exists() {
                let mut ds = load_cifar_dir(dir, limits)?;
                ds.default_strategy = ObjectMaskStrategy::ComplementOfCorners { patch_size };
                ds
            } else {
                load_image_folder(dir, limits)?
            }
        }
    };
    apply_limits(&mut ds, limits);
    Ok(ds)
}

fn missing_hint(e: Error, dir: &Path) -> Error {
    match e {
        Error::Io { .. } | Error::Dataset(_) => Error::Dataset(format!(
            "{e}; expected the dataset files under {} (set {DATA_DIR_ENV} to relocate the cache)",
            dir.display()
        )),
        other => other,
    }
}

fn dir_name(dir: &Path) -> String {
    dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into())
}

fn apply_limits(ds: &mut SourceDataset, limits: Limits) {
    if let Some(n) = limits.train {
        ds.train.truncate(n);
    }
    if let Some(n) = limits.test {
        ds.test.truncate(n);
    }
}

fn find_file(dir: &Path, stem: &str) -> Option<PathBuf> {
    [stem.to_string(), format!("{stem}.gz")]
        .into_iter()
        .map(|n| dir.join(n))
        .find(|p| p.exists())
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn read_idx_images(path: &Path, limit: Option<usize>) -> Result<(usize, usize, Vec<Vec<u8>>)> {
    let b = read_maybe_gz(path)?;
    let bad = |m: &str| Error::Format {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    if b.len() < 16 || be_u32(&b, 0) != 2051 {
        return Err(bad("not an IDX image file"));
    }
    let (n, rows, cols) = (be_u32(&b, 4) as usize, be_u32(&b, 8) as usize, be_u32(&b, 12) as usize);
    if b.len() < 16 + n * rows * cols {
        return Err(bad("truncated IDX image file"));
    }
    let n = limit.map_or(n, |l| l.min(n));
    let imgs = (0..n).map(|i| b[16 + i * rows * cols..16 + (i + 1) * rows * cols].to_vec()).collect();
    Ok((rows, cols, imgs))
}

fn read_idx_labels(path: &Path, limit: Option<usize>) -> Result<Vec<u8>> {
    let b = read_maybe_gz(path)?;
    if b.len() < 8 || be_u32(&b, 0) != 2049 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "not an IDX label file".into(),
        });
    }
    let n = be_u32(&b, 4) as usize;
    let n = limit.map_or(n, |l| l.min(n));
    Ok(b[8..8 + n].to_vec())
}

/// Reads the four standard (optionally gzipped) IDX files.
pub fn load_idx_dir(dir: &Path, name: &str, limits: Limits) -> Result<SourceDataset> {
    let need = |stem: &str| {
        find_file(dir, stem).ok_or_else(|| Error::Dataset(format!("missing {stem}[.gz] in {}", dir.display())))
    };
    let mut splits = Vec::new();
    for (img, lab, limit) in [
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", limits.train),
        ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", limits.test),
    ] {
        let (rows, cols, imgs) = read_idx_images(&need(img)?, limit)?;
        let labels = read_idx_labels(&need(lab)?, limit)?;
        if labels.len() != imgs.len() {
            return Err(Error::Dataset(format!("{img}: {} images but {} labels", imgs.len(), labels.len())));
        }
        let items = imgs
            .into_iter()
            .zip(labels)
            .map(|(px, y)| {
                let px = px.into_iter().map(|v| f32::from(v) / 255.0).collect();
                LabeledImage::new(rows, cols, 1, px, y as usize).map(SourceImage::plain)
            })
            .collect::<Result<Vec<_>>>()?;
        splits.push(items);
    }
    let test = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    let num_classes = train.iter().chain(&test).map(|s| s.image.label + 1).max().unwrap_or(0).max(10);
    Ok(SourceDataset {
        name: name.to_string(),
        origin: dir.display().to_string(),
        num_classes,
        train,
        test,
        default_strategy: ObjectMaskStrategy::IntensityThreshold { tau: 0.1 },
    })
}

/// CIFAR-10 binary version: `data_batch_{1..5}.bin` and `test_batch.bin`.
pub fn load_cifar_dir(dir: &Path, limits: Limits) -> Result<SourceDataset> {
    const REC: usize = 1 + 3 * 1024;
    let read = |files: &[String], limit: Option<usize>| -> Result<Vec<SourceImage>> {
        let mut out = Vec::new();
        for f in files {
            if limit.is_some_and(|l| out.len() >= l) {
                break;
            }
            let path = dir.join(f);
            let b = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            for rec in b.chunks_exact(REC) {
                if limit.is_some_and(|l| out.len() >= l) {
                    break;
                }
                let mut px = vec![0.0f32; 3 * 1024];
                for p in 0..1024 {
                    for c in 0..3 {
                        px[p * 3 + c] = f32::from(rec[1 + c * 1024 + p]) / 255.0;
                    }
                }
                out.push(SourceImage::plain(LabeledImage::new(32, 32, 3, px, rec[0] as usize)?));
            }
        }
        Ok(out)
    };
    let train_files: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
    Ok(SourceDataset {
        name: "decoy-cifar10".into(),
        origin: dir.display().to_string(),
        num_classes: 10,
        train: read(&train_files, limits.train)?,
        test: read(&["test_batch.bin".to_string()], limits.test)?,
        default_strategy: ObjectMaskStrategy::ComplementOfCorners { patch_size: 4 },
    })
}

/// `<root>/{train,test}/<class>/<file>.png`, with optional segmentations at
/// `<root>/{train,test}/_masks/<class>/<file>.png`. Class indices follow the
/// sorted class directory names.
pub fn load_image_folder(root: &Path, limits: Limits) -> Result<SourceDataset> {
    let class_dirs = |split: &Path| -> Result<Vec<String>> {
        let mut names: Vec<String> = fs::read_dir(split)
            .map_err(|e| Error::io(split, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n != "_masks")
            .collect();
        names.sort();
        Ok(names)
    };
    let classes = class_dirs(&root.join("train"))?;
    if classes.is_empty() {
        return Err(Error::Dataset(format!("no class directories under {}", root.join("train").display())));
    }
    let mut any_seg = false;
    let mut read_split = |split: &str, limit: Option<usize>| -> Result<Vec<SourceImage>> {
        let mut items = Vec::new();
        for (label, class) in classes.iter().enumerate() {
            let dir = root.join(split).join(class);
            if !dir.is_dir() {
                continue;
            }
            let mut files: Vec<PathBuf> = fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "png" || e == "jpg" || e == "jpeg"))
                .collect();
            files.sort();
            for f in files {
                let image = crate::imageio::read_image(&f, label)?;
                let seg_path = root.join(split).join("_masks").join(class).join(f.with_extension("png").file_name().unwrap_or_default());
                let segmentation = if seg_path.exists() {
                    any_seg = true;
                    Some(crate::imageio::read_gray(&seg_path)?.2)
                } else {
                    None
                };
                items.push(SourceImage { image, segmentation });
            }
        }
        // Interleave classes so prefix limits stay balanced.
        let mut by_class: Vec<Vec<SourceImage>> = vec![Vec::new(); classes.len()];
        for it in items {
            by_class[it.image.label].push(it);
        }
        let mut out = Vec::new();
        let mut iters: Vec<_> = by_class.into_iter().map(|v| v.into_iter()).collect();
        loop {
            let before = out.len();
            for it in &mut iters {
                if let Some(x) = it.next() {
                    out.push(x);
                }
            }
            if out.len() == before || limit.is_some_and(|l| out.len() >= l) {
                break;
            }
        }
        Ok(out)
    };
    let train = read_split("train", limits.train)?;
    let test = read_split("test", limits.test)?;
    Ok(SourceDataset {
        name: format!("decoy-{}", dir_name(root)),
        origin: root.display().to_string(),
        num_classes: classes.len(),
        train,
        test,
        default_strategy: if any_seg {
            ObjectMaskStrategy::ProvidedSegmentation
        } else {
            ObjectMaskStrategy::IntensityThreshold { tau: 0.1 }
        },
    })
}

/// Synthetic 28×28 grayscale shapes on black: 0 square, 1 horizontal bar,
/// 2 vertical bar, 3 plus sign. Shapes stay clear of the 4-pixel corners.
pub fn toy_shapes(n_train: usize, n_test: usize, seed: u64) -> SourceDataset {
    let make = |n: usize, stream: u64| -> Vec<SourceImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        (0..n)
            .map(|i| {
                let label = i % 4;
                let (cy, cx) = (14 + rng.random_range(-4i32..=4), 14 + rng.random_range(-4i32..=4));
                let level = rng.random_range(0.5f32..1.0);
                let inside = |r: i32, c: i32| -> bool {
                    let (dy, dx) = (r - cy, c - cx);
                    match label {
                        0 => dy.abs() <= 4 && dx.abs() <= 4,
                        1 => dy.abs() <= 1 && dx.abs() <= 7,
                        2 => dy.abs() <= 7 && dx.abs() <= 1,
                        _ => (dy.abs() <= 1 && dx.abs() <= 6) || (dx.abs() <= 1 && dy.abs() <= 6),
                    }
                };
                let mut px = vec![0.0f32; 28 * 28];
                for r in 0..28 {
                    for c in 0..28 {
                        if inside(r as i32, c as i32) {
                            px[r * 28 + c] = (level + rng.random_range(-0.1f32..0.1)).clamp(0.2, 1.0);
                        }
                    }
                }
                SourceImage::plain(LabeledImage::new(28, 28, 1, px, label).expect("valid toy image"))
            })
            .collect()
    };
    SourceDataset {
        name: "decoy-toy".into(),
        origin: format!("toy:{n_train}:{n_test}"),
        num_classes: 4,
        train: make(n_train, 1),
        test: make(n_test, 2),
        default_strategy: ObjectMaskStrategy::IntensityThreshold { tau: 0.1 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn toy_set_is_balanced_and_deterministic() {
        let a = toy_shapes(40, 8, 3);
        let b = toy_shapes(40, 8, 3);
        assert_eq!(a.train.len(), 40);
        assert_eq!(a.test.len(), 8);
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.image, y.image);
        }
        for k in 0..4 {
            assert_eq!(a.train.iter().filter(|s| s.image.label == k).count(), 10);
        }
        // corners untouched
        for s in &a.train {
            for r in 0..4 {
                for c in 0..4 {
                    assert_eq!(s.image.at(r, c, 0), 0.0);
                    assert_eq!(s.image.at(27 - r, 27 - c, 0), 0.0);
                }
            }
        }
    }

    #[test]
    fn idx_round_trip_with_gzip_and_limits() {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str, bytes: Vec<u8>| {
            let f = fs::File::create(dir.path().join(name)).unwrap();
            let mut gz = flate2::write::GzEncoder::new(f, flate2::Compression::fast());
            gz.write_all(&bytes).unwrap();
            gz.finish().unwrap();
        };
        let images = |n: u32| {
            let mut b = Vec::new();
            for v in [2051u32, n, 8, 8] {
                b.extend(v.to_be_bytes());
            }
            b.extend((0..n * 64).map(|i| (i % 256) as u8));
            b
        };
        let labels = |n: u32| {
            let mut b = Vec::new();
            for v in [2049u32, n] {
                b.extend(v.to_be_bytes());
            }
            b.extend((0..n).map(|i| (i % 10) as u8));
            b
        };
        write("train-images-idx3-ubyte.gz", images(5));
        write("train-labels-idx1-ubyte.gz", labels(5));
        write("t10k-images-idx3-ubyte.gz", images(3));
        write("t10k-labels-idx1-ubyte.gz", labels(3));
        let ds = load_idx_dir(
            dir.path(),
            "x",
            Limits {
                train: Some(4),
                test: None,
            },
        )
        .unwrap();
        assert_eq!(ds.train.len(), 4);
        assert_eq!(ds.test.len(), 3);
        assert_eq!(ds.train[1].image.label, 1);
        assert_eq!(ds.train[0].image.at(0, 1, 0), 1.0 / 255.0);
    }

    #[test]
    fn unknown_source_is_reported() {
        assert!(matches!(load_source("/definitely/not/here", Limits::default(), 4), Err(Error::Dataset(_))));
    }
}
