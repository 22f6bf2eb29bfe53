//! Dataset ingestion (directory-per-class image trees), manifest handling,
//! batching, and a synthetic shape dataset for desk-scale experiments.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use image::imageops::FilterType;
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Result, SydError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ManifestEntry {
    /// Path relative to the dataset root, forward slashes.
    pub path: String,
    pub class: usize,
    pub split: Split,
}

/// Deterministic view of a dataset tree: classes sorted lexicographically,
/// entries sorted by path within each split.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn absolute_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// JSON-lines export: one {"path", "class", "split"} object per entry.
    pub fn export_jsonl(&self, out: &mut dyn Write) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            path: &'a str,
            class: usize,
            split: Split,
        }
        for e in &self.entries {
            let row = Row {
                path: &e.path,
                class: e.class,
                split: e.split,
            };
            serde_json::to_writer(&mut *out, &row)
                .map_err(|err| SydError::Data(format!("manifest export: {err}")))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn is_supported_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref e) if e == "png" || e == "jpg" || e == "jpeg"
    )
}

/// Scan a `root/{train,test}/<class>/*` tree. Returns the manifest plus
/// warnings for skipped files and empty class directories; zero usable
/// classes is fatal.
pub fn scan_dataset(root: &Path) -> Result<(DatasetManifest, Vec<String>)> {
    let mut warnings = Vec::new();
    let mut class_names: BTreeMap<String, ()> = BTreeMap::new();
    let mut raw: Vec<(Split, String, String)> = Vec::new(); // (split, class, rel path)

    for split in [Split::Train, Split::Test] {
        let split_dir = root.join(split.dir_name());
        if !split_dir.is_dir() {
            warnings.push(format!("missing split directory {}", split_dir.display()));
            continue;
        }
        let mut class_dirs: Vec<PathBuf> = fs::read_dir(&split_dir)
            .map_err(|e| SydError::from(e).with_path(&split_dir))?
            .filter_map(|d| d.ok().map(|d| d.path()))
            .filter(|p| p.is_dir())
            .collect();
        class_dirs.sort();
        for class_dir in class_dirs {
            let class = class_dir
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string();
            if class.is_empty() {
                continue;
            }
            let mut files: Vec<PathBuf> = fs::read_dir(&class_dir)
                .map_err(|e| SydError::from(e).with_path(&class_dir))?
                .filter_map(|d| d.ok().map(|d| d.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            let mut kept = 0usize;
            for file in files {
                if !is_supported_image(&file) {
                    warnings.push(format!("skipping unsupported file {}", file.display()));
                    continue;
                }
                if fs::metadata(&file).map(|m| m.len()).unwrap_or(0) == 0 {
                    warnings.push(format!("skipping empty file {}", file.display()));
                    continue;
                }
                let rel = format!(
                    "{}/{}/{}",
                    split.dir_name(),
                    class,
                    file.file_name().and_then(|n| n.to_str()).unwrap_or_default()
                );
                raw.push((split, class.clone(), rel));
                kept += 1;
            }
            if kept == 0 {
                warnings.push(format!("class directory {} has no usable images", class_dir.display()));
            } else {
                class_names.insert(class, ());
            }
        }
    }

    if class_names.is_empty() {
        return Err(SydError::Data(format!(
            "no classes with usable images under {}",
            root.display()
        )));
    }
    let classes: Vec<String> = class_names.into_keys().collect();
    let class_index: BTreeMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();

    let mut entries: Vec<ManifestEntry> = raw
        .into_iter()
        .filter_map(|(split, class, path)| {
            class_index.get(class.as_str()).map(|&idx| ManifestEntry {
                path,
                class: idx,
                split,
            })
        })
        .collect();
    entries.sort_by(|a, b| a.path.cmp(&b.path));

    Ok((
        DatasetManifest {
            root: root.to_path_buf(),
            classes,
            entries,
        },
        warnings,
    ))
}

// ── Image loading ───────────────────────────────────────────────────────

/// Decodes manifest entries to square RGB byte buffers at `source_size`,
/// caching the result so repeated epochs do not re-decode.
pub struct ImageStore {
    manifest: DatasetManifest,
    source_size: usize,
    cache: Mutex<BTreeMap<usize, Arc<Vec<u8>>>>,
}

impl ImageStore {
    pub fn new(manifest: DatasetManifest, source_size: usize) -> Self {
        Self {
            manifest,
            source_size,
            cache: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn source_size(&self) -> usize {
        self.source_size
    }

    pub fn load(&self, entry_index: usize) -> Result<Arc<Vec<u8>>> {
        if let Some(hit) = self.cache.lock().unwrap().get(&entry_index) {
            return Ok(hit.clone());
        }
        let entry = &self.manifest.entries[entry_index];
        let path = self.manifest.absolute_path(entry);
        let decoded = image::open(&path)
            .map_err(|e| SydError::Data(format!("decode {}: {e}", path.display())))?
            .to_rgb8();
        let size = self.source_size as u32;
        let resized = if decoded.width() != size || decoded.height() != size {
            image::imageops::resize(&decoded, size, size, FilterType::Triangle)
        } else {
            decoded
        };
        let buf = Arc::new(resized.into_raw());
        self.cache.lock().unwrap().insert(entry_index, buf.clone());
        Ok(buf)
    }
}

/// One mini-batch of decoded images with their labels and manifest indices.
pub struct Batch {
    pub images: Vec<Arc<Vec<u8>>>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Epoch-seeded batch stream over one split. A decode failure skips the
/// sample with a warning and never aborts the epoch; the final partial batch
/// is kept.
pub struct BatchIterator<'a> {
    store: &'a ImageStore,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    pub skipped: usize,
}

impl<'a> BatchIterator<'a> {
    pub fn new(
        store: &'a ImageStore,
        split: Split,
        batch_size: usize,
        shuffle_seed: Option<u64>,
    ) -> Result<Self> {
        let mut order = store.manifest().split_indices(split);
        if order.is_empty() {
            return Err(SydError::Data(format!(
                "split '{}' of {} is empty",
                split.dir_name(),
                store.manifest().root.display()
            )));
        }
        if let Some(seed) = shuffle_seed {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..order.len()).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
        }
        Ok(Self {
            store,
            order,
            batch_size: batch_size.max(1),
            cursor: 0,
            skipped: 0,
        })
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Self::Item> {
        while self.cursor < self.order.len() {
            let end = (self.cursor + self.batch_size).min(self.order.len());
            let mut batch = Batch {
                images: Vec::with_capacity(end - self.cursor),
                labels: Vec::with_capacity(end - self.cursor),
                indices: Vec::with_capacity(end - self.cursor),
            };
            for &idx in &self.order[self.cursor..end] {
                match self.store.load(idx) {
                    Ok(img) => {
                        batch.images.push(img);
                        batch.labels.push(self.store.manifest().entries[idx].class);
                        batch.indices.push(idx);
                    }
                    Err(e) => {
                        eprintln!("warning: {e}; sample skipped");
                        self.skipped += 1;
                    }
                }
            }
            self.cursor = end;
            if !batch.images.is_empty() {
                return Some(batch);
            }
        }
        None
    }
}

// ── Synthetic dataset ───────────────────────────────────────────────────

/// Spec of the generated shape dataset: `samples_per_class` training images
/// per class plus a quarter of that as test images (an 80/20 split).
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            samples_per_class: 100,
            image_size: 64,
            seed: 0,
        }
    }
}

const SHAPE_KINDS: [&str; 6] = ["disk", "square", "triangle", "cross", "ring", "bar"];

fn class_name(index: usize) -> String {
    format!("c{:02}_{}", index, SHAPE_KINDS[index % SHAPE_KINDS.len()])
}

/// Signed "inside" coverage of a pixel for one shape kind, in the shape's
/// local frame (rotated, scaled). Returns 0..1 edge coverage.
fn shape_coverage(kind: usize, lx: f64, ly: f64, radius: f64) -> f64 {
    // distance-like functions: negative inside, positive outside
    let d = match kind % SHAPE_KINDS.len() {
        // disk
        0 => (lx * lx + ly * ly).sqrt() - radius,
        // square
        1 => lx.abs().max(ly.abs()) - radius * 0.9,
        // triangle (equilateral, pointing up)
        2 => {
            let r = radius * 1.1;
            let d1 = -ly - r * 0.5;
            let d2 = 0.866 * lx + 0.5 * ly - r * 0.5;
            let d3 = -0.866 * lx + 0.5 * ly - r * 0.5;
            d1.max(d2).max(d3)
        }
        // cross: two perpendicular bars
        3 => {
            let bar = radius * 0.35;
            let arm = radius * 1.1;
            let horiz = (lx.abs() - arm).max(ly.abs() - bar);
            let vert = (lx.abs() - bar).max(ly.abs() - arm);
            horiz.min(vert)
        }
        // ring: annulus
        4 => {
            let r = (lx * lx + ly * ly).sqrt();
            (r - radius).max(radius * 0.55 - r)
        }
        // bar: single thick stripe
        _ => (lx.abs() - radius * 1.2).max(ly.abs() - radius * 0.4),
    };
    // one-pixel soft edge
    (0.5 - d).clamp(0.0, 1.0)
}

fn render_shape_image(kind: usize, size: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let s = size as f64;
    // background: random mid gray with per-pixel noise and a random tint
    let bg_level = rng.random_range(80.0..120.0);
    let noise_amp = rng.random_range(6.0..14.0);
    let tint: [f64; 3] = [
        rng.random_range(0.92..1.08),
        rng.random_range(0.92..1.08),
        rng.random_range(0.92..1.08),
    ];
    // shapes are always brighter than the background; the contrast range is
    // shared by all classes so intensity alone separates nothing
    let contrast = rng.random_range(60.0..100.0);
    let radius = rng.random_range(0.16..0.28) * s;
    let margin = radius * 1.4;
    let cx = rng.random_range(margin..s - margin);
    let cy = rng.random_range(margin..s - margin);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (sin, cos) = angle.sin_cos();

    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let lx = cos * dx + sin * dy;
            let ly = -sin * dx + cos * dy;
            let cov = shape_coverage(kind, lx, ly, radius);
            let level = bg_level + cov * contrast + rng.random_range(-noise_amp..noise_amp);
            let px = image::Rgb([
                (level * tint[0]).clamp(0.0, 255.0) as u8,
                (level * tint[1]).clamp(0.0, 255.0) as u8,
                (level * tint[2]).clamp(0.0, 255.0) as u8,
            ]);
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    img
}

/// Render the synthetic tree under `out_root` in the `scan_dataset` layout.
/// The same spec (including seed) produces a byte-identical tree.
pub fn generate_synthetic(spec: &SynthSpec, out_root: &Path) -> Result<DatasetManifest> {
    if spec.num_classes < 2 {
        return Err(SydError::Parameter(format!(
            "synthetic dataset needs at least 2 classes, got {}",
            spec.num_classes
        )));
    }
    if spec.image_size < 16 {
        return Err(SydError::Parameter(format!(
            "synthetic image size {} is too small",
            spec.image_size
        )));
    }
    let test_per_class = (spec.samples_per_class / 4).max(1);
    for class in 0..spec.num_classes {
        let name = class_name(class);
        for (split, count) in [
            (Split::Train, spec.samples_per_class),
            (Split::Test, test_per_class),
        ] {
            let dir = out_root.join(split.dir_name()).join(&name);
            fs::create_dir_all(&dir).map_err(|e| SydError::from(e).with_path(&dir))?;
            for i in 0..count {
                // one independent stream per image: stable under count changes
                let stream = (class as u64) << 40
                    | (matches!(split, Split::Test) as u64) << 32
                    | i as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ stream.wrapping_mul(0x9E3779B97F4A7C15));
                let img = render_shape_image(class, spec.image_size, &mut rng);
                let path = dir.join(format!("{i:05}.png"));
                img.save(&path)
                    .map_err(|e| SydError::Data(format!("write {}: {e}", path.display())))?;
            }
        }
    }
    let (manifest, _warnings) = scan_dataset(out_root)?;
    Ok(manifest)
}
