//! Decoyed dataset construction: confounder patches stamped into random
//! corners of training images, object masks derived per strategy, and the
//! on-disk dataset layout with its `manifest.jsonl`.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{SourceDataset, SourceImage};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};

/// An image with values in `[0, 1]`, stored row-major as `H×W×C`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
    pub label: usize,
}

impl LabeledImage {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>, label: usize) -> Result<Self> {
        if height < 8 || width < 8 {
            return Err(Error::Size(format!("image must be at least 8x8, got {height}x{width}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Size(format!("channels must be 1 or 3, got {channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::shape(
                format!("{height}x{width}x{channels} = {}", height * width * channels),
                pixels.len(),
            ));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Size(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(LabeledImage {
            height,
            width,
            channels,
            pixels,
            label,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn at(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.pixels[(row * self.width + col) * self.channels + ch]
    }

    /// Mean over channels at one pixel.
    pub fn intensity(&self, row: usize, col: usize) -> f32 {
        let base = (row * self.width + col) * self.channels;
        self.pixels[base..base + self.channels].iter().sum::<f32>() / self.channels as f32
    }

    /// Channel-major copy (`C×H×W`), the network's input layout.
    pub fn to_chw(&self) -> Vec<f32> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0.0; h * w * c];
        for r in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    out[(ch * h + r) * w + col] = self.pixels[(r * w + col) * c + ch];
                }
            }
        }
        out
    }
}

/// A binary `H×W` mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            values: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            values: vec![1; height * width],
        }
    }

    /// Any nonzero entry counts as set.
    pub fn from_values(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(format!("{height}x{width}"), values.len()));
        }
        Ok(BinaryMask {
            height,
            width,
            values: values.into_iter().map(|v| u8::from(v != 0)).collect(),
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(u8::from(f(r, c)));
            }
        }
        BinaryMask { height, width, values }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[row * self.width + col] != 0
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.values[row * self.width + col] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// `(row, col)` of every set entry in row-major order.
    pub fn support(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(move |(i, _)| (i / w, i % w))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Corner {
    #[serde(rename = "TL")]
    TopLeft,
    #[serde(rename = "TR")]
    TopRight,
    #[serde(rename = "BL")]
    BottomLeft,
    #[serde(rename = "BR")]
    BottomRight,
}

impl Corner {
    pub const ALL: [Corner; 4] = [Corner::TopLeft, Corner::TopRight, Corner::BottomLeft, Corner::BottomRight];

    /// Top-left coordinate of a `patch`-sized square aligned to this corner.
    pub fn origin(self, height: usize, width: usize, patch: usize) -> (usize, usize) {
        match self {
            Corner::TopLeft => (0, 0),
            Corner::TopRight => (0, width - patch),
            Corner::BottomLeft => (height - patch, 0),
            Corner::BottomRight => (height - patch, width - patch),
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Corner::TopLeft => "TL",
            Corner::TopRight => "TR",
            Corner::BottomLeft => "BL",
            Corner::BottomRight => "BR",
        }
    }
}

impl fmt::Display for Corner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// One (possibly decoyed) training or test instance.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoyInstance {
    pub id: String,
    pub image: LabeledImage,
    pub obj_mask: BinaryMask,
    pub con_mask: BinaryMask,
    pub corner: Option<Corner>,
    pub patch_size: usize,
    pub seed_trace: u64,
}

/// Replaces a random corner-aligned `patch_size²` square with uniform noise.
///
/// Corner first, then pixel values (row-major, channels innermost), all from
/// `rng`. `patch_size == 0` is the identity.
pub fn stamp_confounder<R: Rng + ?Sized>(
    image: &LabeledImage,
    patch_size: usize,
    rng: &mut R,
) -> Result<(LabeledImage, BinaryMask, Option<Corner>)> {
    let (h, w, c) = (image.height, image.width, image.channels);
    if patch_size * 4 > h.min(w) {
        return Err(Error::Size(format!(
            "patch size {patch_size} exceeds a quarter of the smaller image side ({})",
            h.min(w)
        )));
    }
    if patch_size == 0 {
        return Ok((image.clone(), BinaryMask::zeros(h, w), None));
    }
    let corner = Corner::ALL[rng.random_range(0..4)];
    let (r0, c0) = corner.origin(h, w, patch_size);
    let mut out = image.clone();
    let mut mask = BinaryMask::zeros(h, w);
    for r in r0..r0 + patch_size {
        for col in c0..c0 + patch_size {
            mask.set(r, col, true);
            for ch in 0..c {
                out.pixels[(r * w + col) * c + ch] = rng.random::<f32>();
            }
        }
    }
    Ok((out, mask, Some(corner)))
}

/// How the object-of-interest mask is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectMaskStrategy {
    IntensityThreshold { tau: f32 },
    ProvidedSegmentation,
    ComplementOfCorners { patch_size: usize },
}

impl fmt::Display for ObjectMaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectMaskStrategy::IntensityThreshold { tau } => write!(f, "intensity:{tau}"),
            ObjectMaskStrategy::ProvidedSegmentation => f.write_str("segmentation"),
            ObjectMaskStrategy::ComplementOfCorners { patch_size } => write!(f, "corners:{patch_size}"),
        }
    }
}

impl FromStr for ObjectMaskStrategy {
    type Err = Error;

    /// Accepts `intensity[:tau]`, `segmentation`, `corners[:patch]`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        let bad = || Error::InvalidConfig(format!("bad object-mask strategy `{s}`"));
        match kind {
            "intensity" | "intensity_threshold" => Ok(ObjectMaskStrategy::IntensityThreshold {
                tau: arg.map(str::parse).transpose().map_err(|_| bad())?.unwrap_or(0.1),
            }),
            "segmentation" | "provided_segmentation" => Ok(ObjectMaskStrategy::ProvidedSegmentation),
            "corners" | "complement_of_corners" => Ok(ObjectMaskStrategy::ComplementOfCorners {
                patch_size: arg.map(str::parse).transpose().map_err(|_| bad())?.unwrap_or(4),
            }),
            _ => Err(bad()),
        }
    }
}

/// Derives `A_obj`. `segmentation` is a grayscale `H×W` map in `[0,1]`,
/// required (and only used) for [`ObjectMaskStrategy::ProvidedSegmentation`].
pub fn derive_object_mask(image: &LabeledImage, strategy: &ObjectMaskStrategy, segmentation: Option<&[f32]>) -> Result<BinaryMask> {
    let (h, w) = (image.height, image.width);
    match *strategy {
        ObjectMaskStrategy::IntensityThreshold { tau } => Ok(BinaryMask::from_fn(h, w, |r, c| image.intensity(r, c) > tau)),
        ObjectMaskStrategy::ComplementOfCorners { patch_size } => {
            let p = patch_size;
            Ok(BinaryMask::from_fn(h, w, |r, c| {
                let in_rows = r < p || r >= h.saturating_sub(p);
                let in_cols = c < p || c >= w.saturating_sub(p);
                !(in_rows && in_cols)
            }))
        }
        ObjectMaskStrategy::ProvidedSegmentation => {
            let seg = segmentation.ok_or_else(|| Error::Dataset("provided segmentation strategy needs a segmentation map".into()))?;
            if seg.len() != h * w {
                return Err(Error::shape(format!("{h}x{w} segmentation"), seg.len()));
            }
            Ok(BinaryMask::from_fn(h, w, |r, c| seg[r * w + c] >= 0.5))
        }
    }
}

/// Centre of gravity `(row, col)` of the set entries.
pub fn centroid(mask: &BinaryMask) -> Result<(f64, f64)> {
    let (mut sr, mut sc, mut n) = (0.0, 0.0, 0usize);
    for (r, c) in mask.support() {
        sr += r as f64;
        sc += c as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask("centroid of an all-zero mask".into()));
    }
    Ok((sr / n as f64, sc / n as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoyParams {
    pub patch_size: usize,
    pub obj_mask_strategy: ObjectMaskStrategy,
    pub seed: u64,
}

/// Per-instance stream seed; generation of instance `index` depends only on
/// this value and the source image.
pub fn instance_seed(global: u64, index: usize) -> u64 {
    let mut z = global ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn make_instance(src: &SourceImage, split: Split, index: usize, params: &DecoyParams) -> Result<DecoyInstance> {
    let id = format!("{}-{index:06}", split.as_str());
    let obj_mask = derive_object_mask(&src.image, &params.obj_mask_strategy, src.segmentation.as_deref())?;
    let seed_trace = instance_seed(params.seed, index);
    let (image, con_mask, corner, patch_size) = match split {
        Split::Train => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed_trace);
            let (img, mask, corner) = stamp_confounder(&src.image, params.patch_size, &mut rng)?;
            (img, mask, corner, if corner.is_some() { params.patch_size } else { 0 })
        }
        Split::Test => (
            src.image.clone(),
            BinaryMask::zeros(src.image.height, src.image.width),
            None,
            0,
        ),
    };
    Ok(DecoyInstance {
        id,
        image,
        obj_mask,
        con_mask,
        corner,
        patch_size,
        seed_trace,
    })
}

/// Generates instances in memory (train decoyed, test clean).
pub fn generate_instances(source: &SourceDataset, params: &DecoyParams, exec: Execution) -> Result<(Vec<DecoyInstance>, Vec<DecoyInstance>)> {
    if source.train.is_empty() {
        return Err(Error::Dataset("source has an empty train split".into()));
    }
    let train = exec::map_indices(exec, source.train.len(), |i| make_instance(&source.train[i], Split::Train, i, params))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let test = exec::map_indices(exec, source.test.len(), |i| make_instance(&source.test[i], Split::Test, i, params))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordPaths {
    pub image: String,
    pub obj_mask: String,
    pub con_mask: String,
}

/// One line of `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    pub label: usize,
    /// `TL`/`TR`/`BL`/`BR`, or `none` for clean instances.
    pub corner: String,
    pub patch_size: usize,
    pub paths: RecordPaths,
}

/// Creation parameters, stored next to the manifest as `dataset.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub source: String,
    pub seed: u64,
    pub params: DecoyParams,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub train_count: usize,
    pub test_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoyDatasetManifest {
    pub root: PathBuf,
    pub info: DatasetInfo,
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const INFO_FILE: &str = "dataset.json";

impl DecoyDatasetManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let info_path = root.join(INFO_FILE);
        let info: DatasetInfo = serde_json::from_reader(BufReader::new(fs::File::open(&info_path).map_err(|e| Error::io(&info_path, e))?))
            .map_err(|e| Error::Format {
                path: info_path.clone(),
                message: e.to_string(),
            })?;
        let man_path = root.join(MANIFEST_FILE);
        let file = fs::File::open(&man_path).map_err(|e| Error::io(&man_path, e))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&man_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
                path: man_path.clone(),
                message: format!("line {}: {e}", n + 1),
            })?;
            records.push(rec);
        }
        Ok(DecoyDatasetManifest {
            root: root.to_path_buf(),
            info,
            records,
        })
    }

    pub fn records(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Reads every instance of a split back from disk.
    pub fn load_instances(&self, split: Split, exec: Execution) -> Result<Vec<DecoyInstance>> {
        let recs: Vec<&ManifestRecord> = self.records(split).collect();
        exec::map_slice(exec, &recs, |r| self.load_record(r)).into_iter().collect()
    }

    pub fn load_record(&self, rec: &ManifestRecord) -> Result<DecoyInstance> {
        let image = crate::imageio::read_image(&self.root.join(&rec.paths.image), rec.label)?;
        let obj_mask = crate::imageio::read_mask(&self.root.join(&rec.paths.obj_mask))?;
        let con_mask = crate::imageio::read_mask(&self.root.join(&rec.paths.con_mask))?;
        let corner = match rec.corner.as_str() {
            "none" => None,
            code => Some(
                Corner::ALL
                    .into_iter()
                    .find(|c| c.code() == code)
                    .ok_or_else(|| Error::Format {
                        path: self.root.join(MANIFEST_FILE),
                        message: format!("unknown corner `{code}`"),
                    })?,
            ),
        };
        let index: usize = rec.id.rsplit('-').next().and_then(|s| s.parse().ok()).unwrap_or(0);
        Ok(DecoyInstance {
            id: rec.id.clone(),
            image,
            obj_mask,
            con_mask,
            corner,
            patch_size: rec.patch_size,
            seed_trace: if rec.split == Split::Train {
                instance_seed(self.info.seed, index)
            } else {
                0
            },
        })
    }
}

fn record_for(inst: &DecoyInstance, split: Split) -> ManifestRecord {
    let s = split.as_str();
    ManifestRecord {
        id: inst.id.clone(),
        split,
        label: inst.image.label,
        corner: inst.corner.map_or_else(|| "none".to_string(), |c| c.code().to_string()),
        patch_size: inst.patch_size,
        paths: RecordPaths {
            image: format!("{s}/images/{}.png", inst.id),
            obj_mask: format!("{s}/obj_masks/{}.png", inst.id),
            con_mask: format!("{s}/con_masks/{}.png", inst.id),
        },
    }
}

/// Builds `<out_root>/<source.name>/` with images, masks, `manifest.jsonl` and
/// `dataset.json`. Files are staged in a sibling directory and moved into
/// place only after everything is written; on failure the staging directory
/// is removed.
pub fn build_decoy_dataset(source: &SourceDataset, params: &DecoyParams, out_root: &Path, exec: Execution) -> Result<DecoyDatasetManifest> {
    let (train, test) = generate_instances(source, params, exec)?;
    let final_dir = out_root.join(&source.name);
    let staging = out_root.join(format!(".{}.partial-{}", source.name, std::process::id()));
    let result = write_dataset(&staging, source, params, &train, &test, exec);
    match result {
        Ok((info, records)) => {
            if final_dir.exists() {
                fs::remove_dir_all(&final_dir).map_err(|e| Error::io(&final_dir, e))?;
            }
            fs::rename(&staging, &final_dir).map_err(|e| Error::io(&final_dir, e))?;
            Ok(DecoyDatasetManifest {
                root: final_dir,
                info,
                records,
            })
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

fn write_dataset(
    dir: &Path,
    source: &SourceDataset,
    params: &DecoyParams,
    train: &[DecoyInstance],
    test: &[DecoyInstance],
    exec: Execution,
) -> Result<(DatasetInfo, Vec<ManifestRecord>)> {
    for split in ["train", "test"] {
        for sub in ["images", "obj_masks", "con_masks"] {
            let d = dir.join(split).join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
    }
    let mut records = Vec::with_capacity(train.len() + test.len());
    for (split, insts) in [(Split::Train, train), (Split::Test, test)] {
        let recs: Vec<ManifestRecord> = insts.iter().map(|i| record_for(i, split)).collect();
        exec::map_indices(exec, insts.len(), |i| -> Result<()> {
            let (inst, rec) = (&insts[i], &recs[i]);
            crate::imageio::write_image(&dir.join(&rec.paths.image), &inst.image)?;
            crate::imageio::write_mask(&dir.join(&rec.paths.obj_mask), &inst.obj_mask)?;
            crate::imageio::write_mask(&dir.join(&rec.paths.con_mask), &inst.con_mask)
        })
        .into_iter()
        .collect::<Result<()>>()?;
        records.extend(recs);
    }
    let first = &source.train[0].image;
    let info = DatasetInfo {
        name: source.name.clone(),
        source: source.origin.clone(),
        seed: params.seed,
        params: params.clone(),
        num_classes: source.num_classes,
        height: first.height(),
        width: first.width(),
        channels: first.channels(),
        train_count: train.len(),
        test_count: test.len(),
    };
    let man_path = dir.join(MANIFEST_FILE);
    let mut w = BufWriter::new(fs::File::create(&man_path).map_err(|e| Error::io(&man_path, e))?);
    for rec in &records {
        let line = serde_json::to_string(rec).expect("manifest record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(&man_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&man_path, e))?;
    let info_path = dir.join(INFO_FILE);
    let text = serde_json::to_string_pretty(&info).expect("dataset info serializes");
    fs::write(&info_path, text + "\n").map_err(|e| Error::io(&info_path, e))?;
    Ok((info, records))
}
