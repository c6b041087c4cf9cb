//! Datasets and class-incremental stream schedules.
//!
//! A [`Dataset`] holds labelled images plus a train/test split. Streams are
//! single-pass permutations of the train split: either disjoint tasks that
//! partition the classes, or a boundary-free schedule where each class's
//! arrival times follow a Gaussian centred at `label / num_classes`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Dense `channels x height x width` image, row-major within a channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(channels * height * width, data.len(), "image data length");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::new(channels, height, width, vec![0.0; channels * height * width])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, c: usize, r: usize, col: usize) -> f64 {
        self.data[(c * self.height + r) * self.width + col]
    }

    pub fn at_mut(&mut self, c: usize, r: usize, col: usize) -> &mut f64 {
        &mut self.data[(c * self.height + r) * self.width + col]
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset, splitting each class 80/20 into train/test in
    /// sample order. Classes with at least two samples land in both splits.
    pub fn with_class_split(images: Vec<Image>, labels: Vec<usize>) -> Self {
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in labels.iter().enumerate() {
            by_class.entry(y).or_default().push(i);
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for idxs in by_class.values() {
            let n = idxs.len();
            let n_train = if n < 2 {
                n
            } else {
                ((0.8 * n as f64).round() as usize).clamp(1, n - 1)
            };
            train.extend_from_slice(&idxs[..n_train]);
            test.extend_from_slice(&idxs[n_train..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Self {
            images,
            labels,
            num_classes,
            train,
            test,
        }
    }

    /// Concatenates separate train and test sets.
    pub fn from_splits(train: (Vec<Image>, Vec<usize>), test: (Vec<Image>, Vec<usize>)) -> Self {
        let n_train = train.0.len();
        let n_test = test.0.len();
        let mut images = train.0;
        images.extend(test.0);
        let mut labels = train.1;
        labels.extend(test.1);
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        Self {
            images,
            labels,
            num_classes,
            train: (0..n_train).collect(),
            test: (n_train..n_train + n_test).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn input_len(&self) -> usize {
        self.images.first().map_or(0, Image::len)
    }

    /// Checks that labels are in range and every class has both train and
    /// test samples.
    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(Error::CountMismatch {
                images: self.images.len(),
                labels: self.labels.len(),
            });
        }
        let mut in_train = vec![false; self.num_classes];
        let mut in_test = vec![false; self.num_classes];
        for &i in &self.train {
            in_train[self.labels[i]] = true;
        }
        for &i in &self.test {
            in_test[self.labels[i]] = true;
        }
        if let Some(c) = (0..self.num_classes).find(|&c| !in_train[c] || !in_test[c]) {
            return Err(Error::ConfigInvalid(format!(
                "class {c} is missing from the train or test split"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Disjoint,
    Gaussian,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamSchedule {
    pub kind: ScheduleKind,
    /// Dataset indices in arrival order.
    pub order: Vec<usize>,
    /// Stream positions at which a new task starts (disjoint only, first task
    /// excluded).
    pub task_boundaries: Vec<usize>,
}

impl StreamSchedule {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Partitions classes into `n_tasks` contiguous label groups and streams
/// each task's train samples in shuffled order.
pub fn disjoint_schedule(ds: &Dataset, n_tasks: usize, rng: &mut Rng) -> Result<StreamSchedule> {
    if n_tasks == 0 || !ds.num_classes.is_multiple_of(n_tasks) {
        return Err(Error::IndivisibleClasses {
            classes: ds.num_classes,
            tasks: n_tasks,
        });
    }
    let per_task = ds.num_classes / n_tasks;
    let mut order = Vec::with_capacity(ds.train.len());
    let mut task_boundaries = Vec::new();
    for task in 0..n_tasks {
        let classes = task * per_task..(task + 1) * per_task;
        let mut chunk: Vec<usize> = ds
            .train
            .iter()
            .copied()
            .filter(|&i| classes.contains(&ds.labels[i]))
            .collect();
        rng.shuffle(&mut chunk);
        if task > 0 {
            task_boundaries.push(order.len());
        }
        order.extend(chunk);
    }
    Ok(StreamSchedule {
        kind: ScheduleKind::Disjoint,
        order,
        task_boundaries,
    })
}

/// Boundary-free schedule: each train sample of class `i` draws an arrival
/// time from `Normal(i / num_classes, sigma)` clipped to `[0, 1]`; samples
/// stream in order of arrival time, ties broken by index.
pub fn gaussian_schedule(ds: &Dataset, sigma: f64, rng: &mut Rng) -> Result<StreamSchedule> {
    if !(sigma > 0.0) {
        return Err(Error::ConfigInvalid(format!("sigma must be positive, got {sigma}")));
    }
    let n = ds.num_classes.max(1) as f64;
    let mut timed: Vec<(f64, usize)> = ds
        .train
        .iter()
        .map(|&i| {
            let mean = ds.labels[i] as f64 / n;
            ((mean + sigma * rng.normal()).clamp(0.0, 1.0), i)
        })
        .collect();
    timed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(StreamSchedule {
        kind: ScheduleKind::Gaussian,
        order: timed.into_iter().map(|(_, i)| i).collect(),
        task_boundaries: Vec::new(),
    })
}

const GLYPH_GRID: usize = 4;
/// Minimum number of coarse cells by which any glyph differs from its own
/// rotations and from every rotation of any other glyph.
const GLYPH_MIN_CELL_DIFF: usize = 5;
pub const MAX_GLYPHS: usize = 24;

type Glyph = [[bool; GLYPH_GRID]; GLYPH_GRID];

fn rotate_glyph(g: &Glyph) -> Glyph {
    let mut out = [[false; GLYPH_GRID]; GLYPH_GRID];
    for (r, row) in g.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            out[c][GLYPH_GRID - 1 - r] = v;
        }
    }
    out
}

fn glyph_diff(a: &Glyph, b: &Glyph) -> usize {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .filter(|(x, y)| x != y)
        .count()
}

/// The fixed glyph alphabet: blocky 4x4 shapes, each far from its own
/// quarter-turn rotations and from every rotation of the other glyphs, so a
/// rotated glyph never looks like a real class. Greedy over a seeded
/// permutation of all 4x4 patterns.
fn glyph_templates() -> &'static [Glyph] {
    static TEMPLATES: OnceLock<Vec<Glyph>> = OnceLock::new();
    TEMPLATES.get_or_init(|| {
        let mut candidates: Vec<u16> = (0..=u16::MAX).collect();
        Rng::stream(0x6c79_7068, 0).shuffle(&mut candidates);
        let mut accepted: Vec<Glyph> = Vec::with_capacity(MAX_GLYPHS);
        for bits in candidates {
            if accepted.len() == MAX_GLYPHS {
                break;
            }
            if !(6..=10).contains(&bits.count_ones()) {
                continue;
            }
            let mut g = [[false; GLYPH_GRID]; GLYPH_GRID];
            for (i, cell) in g.iter_mut().flatten().enumerate() {
                *cell = bits >> i & 1 == 1;
            }
            let mut rot = g;
            let mut ok = true;
            for _ in 1..4 {
                rot = rotate_glyph(&rot);
                ok &= glyph_diff(&g, &rot) >= GLYPH_MIN_CELL_DIFF;
            }
            for other in &accepted {
                let mut r = *other;
                for _ in 0..4 {
                    ok &= glyph_diff(&g, &r) >= GLYPH_MIN_CELL_DIFF;
                    r = rotate_glyph(&r);
                }
            }
            if ok {
                accepted.push(g);
            }
        }
        assert_eq!(accepted.len(), MAX_GLYPHS, "glyph alphabet search came up short");
        accepted
    })
}

/// Noise-free rendering of glyph `class` at `size x size`.
pub fn glyph_template(class: usize, size: usize) -> Result<Image> {
    if class >= MAX_GLYPHS {
        return Err(Error::TooManyClasses {
            requested: class + 1,
            available: MAX_GLYPHS,
        });
    }
    Ok(render_glyph(&glyph_templates()[class], size))
}

fn render_glyph(g: &Glyph, size: usize) -> Image {
    let mut img = Image::zeros(1, size, size);
    for r in 0..size {
        for c in 0..size {
            if g[r * GLYPH_GRID / size][c * GLYPH_GRID / size] {
                *img.at_mut(0, r, c) = 1.0;
            }
        }
    }
    img
}

/// Synthetic grayscale glyph dataset: class `k` is a fixed rotation-asymmetric
/// glyph plus per-pixel Gaussian noise. Each class is split 80/20 into
/// train/test.
pub fn synth_glyphs(
    n_classes: usize,
    per_class: usize,
    size: usize,
    noise_sd: f64,
    rng: &mut Rng,
) -> Result<Dataset> {
    if n_classes > MAX_GLYPHS {
        return Err(Error::TooManyClasses {
            requested: n_classes,
            available: MAX_GLYPHS,
        });
    }
    if size < 8 {
        return Err(Error::ConfigInvalid(format!("glyph size must be >= 8, got {size}")));
    }
    if per_class < 2 {
        return Err(Error::ConfigInvalid(
            "need at least two samples per class for a train/test split".into(),
        ));
    }
    let templates: Vec<Image> = glyph_templates()
        .iter()
        .take(n_classes)
        .map(|g| render_glyph(g, size))
        .collect();
    let mut images = Vec::with_capacity(n_classes * per_class);
    let mut labels = Vec::with_capacity(n_classes * per_class);
    for (class, template) in templates.iter().enumerate() {
        for _ in 0..per_class {
            let mut img = template.clone();
            if noise_sd > 0.0 {
                for px in &mut img.data {
                    *px += noise_sd * rng.normal();
                }
            }
            images.push(img);
            labels.push(class);
        }
    }
    Ok(Dataset::with_class_split(images, labels))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::TruncatedFile {
            path: path.to_path_buf(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = read_be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Parses an unsigned-byte IDX image file (`n x rows x cols`), scaling pixels
/// to `[0, 1]`.
pub fn read_idx_images(path: &Path) -> Result<Vec<Image>> {
    let bytes = fs::read(path)?;
    check_magic(&bytes, IDX_IMAGES_MAGIC, path)?;
    let n = read_be_u32(&bytes, 4, path)? as usize;
    let rows = read_be_u32(&bytes, 8, path)? as usize;
    let cols = read_be_u32(&bytes, 12, path)? as usize;
    let pixels = &bytes[16..];
    let per_image = rows * cols;
    let needed = n.checked_mul(per_image);
    if needed.is_none_or(|needed| pixels.len() < needed) {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
        });
    }
    Ok(pixels
        .chunks_exact(per_image.max(1))
        .take(n)
        .map(|px| Image::new(1, rows, cols, px.iter().map(|&p| f64::from(p) / 255.0).collect()))
        .collect())
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path)?;
    check_magic(&bytes, IDX_LABELS_MAGIC, path)?;
    let n = read_be_u32(&bytes, 4, path)? as usize;
    let labels = &bytes[8..];
    if labels.len() < n {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
        });
    }
    Ok(labels[..n].iter().map(|&l| usize::from(l)).collect())
}

fn read_idx_pair(images_path: &Path, labels_path: &Path) -> Result<(Vec<Image>, Vec<usize>)> {
    let images = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if images.len() != labels.len() {
        return Err(Error::CountMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    Ok((images, labels))
}

/// Loads an IDX image/label pair and splits each class 80/20.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (images, labels) = read_idx_pair(images_path, labels_path)?;
    Ok(Dataset::with_class_split(images, labels))
}

/// Loads separate IDX train and test pairs (MNIST layout).
pub fn load_idx_splits(
    train_images: &Path,
    train_labels: &Path,
    test_images: &Path,
    test_labels: &Path,
) -> Result<Dataset> {
    Ok(Dataset::from_splits(
        read_idx_pair(train_images, train_labels)?,
        read_idx_pair(test_images, test_labels)?,
    ))
}

/// Writes single-channel images as an unsigned-byte IDX file, clamping
/// pixels to `[0, 1]` before quantizing.
pub fn write_idx_images(path: &Path, images: &[Image]) -> Result<()> {
    let (rows, cols) = images.first().map_or((0, 0), |im| (im.height, im.width));
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for dim in [images.len(), rows, cols] {
        out.extend_from_slice(&(dim as u32).to_be_bytes());
    }
    for im in images {
        if im.channels != 1 || im.height != rows || im.width != cols {
            return Err(Error::ConfigInvalid(
                "IDX export needs single-channel images of one size".into(),
            ));
        }
        out.extend(im.data.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        let byte = u8::try_from(l)
            .map_err(|_| Error::ConfigInvalid(format!("label {l} does not fit in a byte")))?;
        out.push(byte);
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_permutation(order: &[usize], train: &[usize]) {
        let mut a = order.to_vec();
        a.sort_unstable();
        assert_eq!(a, train);
    }

    fn small_dataset(n_classes: usize, per_class: usize) -> Dataset {
        let mut rng = Rng::new(1);
        synth_glyphs(n_classes, per_class, 8, 0.1, &mut rng).unwrap()
    }

    #[test]
    fn disjoint_groups_classes_by_label_order() {
        let ds = small_dataset(10, 20);
        let sched = disjoint_schedule(&ds, 5, &mut Rng::new(2)).unwrap();
        assert_permutation(&sched.order, &ds.train);
        assert_eq!(sched.task_boundaries.len(), 4);
        let per_task = ds.train.len() / 5;
        for (pos, &i) in sched.order.iter().enumerate() {
            assert_eq!(ds.labels[i] / 2, pos / per_task);
        }
    }

    #[test]
    fn single_task_is_a_shuffle() {
        let ds = small_dataset(4, 10);
        let sched = disjoint_schedule(&ds, 1, &mut Rng::new(3)).unwrap();
        assert_permutation(&sched.order, &ds.train);
        assert!(sched.task_boundaries.is_empty());
        assert_ne!(sched.order, ds.train);
    }

    #[test]
    fn indivisible_tasks_rejected() {
        let ds = small_dataset(10, 5);
        assert!(matches!(
            disjoint_schedule(&ds, 3, &mut Rng::new(0)),
            Err(Error::IndivisibleClasses { classes: 10, tasks: 3 })
        ));
    }

    #[test]
    fn tiny_sigma_gives_class_ordered_blocks() {
        let ds = small_dataset(6, 10);
        let sched = gaussian_schedule(&ds, 1e-6, &mut Rng::new(4)).unwrap();
        assert_permutation(&sched.order, &ds.train);
        let labels: Vec<usize> = sched.order.iter().map(|&i| ds.labels[i]).collect();
        assert!(labels.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn schedules_are_seed_deterministic() {
        let ds = small_dataset(10, 10);
        let a = gaussian_schedule(&ds, 0.1, &mut Rng::new(9)).unwrap();
        let b = gaussian_schedule(&ds, 0.1, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        let c = disjoint_schedule(&ds, 5, &mut Rng::new(9)).unwrap();
        let d = disjoint_schedule(&ds, 5, &mut Rng::new(9)).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn noiseless_glyphs_are_identical_within_class() {
        let ds = synth_glyphs(5, 10, 12, 0.0, &mut Rng::new(0)).unwrap();
        for (im, &y) in ds.images.iter().zip(&ds.labels) {
            assert_eq!(im, &glyph_template(y, 12).unwrap());
        }
        ds.validate().unwrap();
        assert_eq!(ds.train.len(), 40);
        assert_eq!(ds.test.len(), 10);
    }

    #[test]
    fn glyph_limits() {
        assert!(matches!(
            synth_glyphs(MAX_GLYPHS + 1, 4, 12, 0.0, &mut Rng::new(0)),
            Err(Error::TooManyClasses { .. })
        ));
        assert!(synth_glyphs(2, 4, 7, 0.0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn glyphs_differ_from_their_rotations() {
        for size in [8, 10, 12, 16, 28] {
            for class in 0..MAX_GLYPHS {
                let t = glyph_template(class, size).unwrap();
                let mut r = t.clone();
                for _ in 1..4 {
                    r = crate::prep::rotate(&r, 1).unwrap();
                    let differing = t.data.iter().zip(&r.data).filter(|(a, b)| a != b).count();
                    assert!(
                        differing * 4 >= size * size,
                        "class {class} size {size}: {differing} differing pixels"
                    );
                }
            }
        }
    }
}
