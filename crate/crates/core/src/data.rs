//! Datasets: IDX ingestion, the synthetic subtle-lesion generator,
//! pad-and-crop augmentation and deterministic batching.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;
use crate::{Error, Result};

pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// Four-dimensional unsigned-byte IDX, used for multi-channel images.
pub const IDX_IMAGES4_MAGIC: u32 = 0x0000_0804;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub split: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_names: Vec<String>, split: impl Into<String>) -> Result<Self> {
        let ds = Dataset { images, labels, class_names, split: split.into() };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.images.shape();
        if shape.len() != 4 {
            return Err(Error::invalid(format!("dataset images must be [N, C, H, W], got {shape:?}")));
        }
        if shape[0] != self.labels.len() {
            return Err(Error::CountMismatch { images: shape[0], labels: self.labels.len() });
        }
        let k = self.class_names.len();
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        if self.images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("dataset pixel outside [0, 1]"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> Tensor {
        self.images.select(i)
    }

    /// Images and labels at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Batch {
        let per = self.image_shape().iter().product::<usize>();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let [c, h, w] = self.image_shape();
        Batch {
            images: Tensor::new(vec![indices.len(), c, h, w], data).expect("gathered batch has a consistent shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            indices: indices.to_vec(),
        }
    }

    pub fn subset(&self, indices: &[usize], split: impl Into<String>) -> Dataset {
        let b = self.gather(indices);
        Dataset { images: b.images, labels: b.labels, class_names: self.class_names.clone(), split: split.into() }
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

// ---- IDX ----------------------------------------------------------------

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() < self.pos + n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

fn check_magic(path: &Path, expected: &[u32], found: u32) -> Result<()> {
    if expected.contains(&found) {
        Ok(())
    } else {
        Err(Error::BadMagic { path: path.to_path_buf(), expected: expected[0], found })
    }
}

/// Decode an IDX image file into `[N, C, H, W]` scaled to `[0, 1]`.
pub fn read_idx_images(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let mut r = Reader { path, bytes: &bytes, pos: 0 };
    let magic = r.u32()?;
    check_magic(path, &[IDX_IMAGES_MAGIC, IDX_IMAGES4_MAGIC], magic)?;
    let n = r.u32()? as usize;
    let c = if magic == IDX_IMAGES4_MAGIC { r.u32()? as usize } else { 1 };
    let (h, w) = (r.u32()? as usize, r.u32()? as usize);
    let payload = r.take(n * c * h * w)?;
    let data = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(vec![n, c, h, w], data)
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let mut r = Reader { path, bytes: &bytes, pos: 0 };
    check_magic(path, &[IDX_LABELS_MAGIC], r.u32()?)?;
    let n = r.u32()? as usize;
    Ok(r.take(n)?.iter().map(|&b| usize::from(b)).collect())
}

/// Load an image/label IDX pair. Classes are named by index, `K` is
/// `max(label) + 1` unless `num_classes` says more.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Dataset> {
    let imgs = read_idx_images(images)?;
    let labels = read_idx_labels(labels)?;
    if imgs.shape()[0] != labels.len() {
        return Err(Error::CountMismatch { images: imgs.shape()[0], labels: labels.len() });
    }
    let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    Dataset::new(imgs, labels, (0..k).map(|i| format!("class{i}")).collect(), "idx")
}

/// Pixel to byte: `round(255·v)`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_idx_images(images: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let &[n, c, h, w] = images.shape() else {
        return Err(Error::invalid(format!("IDX images must be [N, C, H, W], got {:?}", images.shape())));
    };
    let mut out = BufWriter::new(fs::File::create(path)?);
    let dims: Vec<usize> = if c == 1 { vec![n, h, w] } else { vec![n, c, h, w] };
    out.write_all(&(if c == 1 { IDX_IMAGES_MAGIC } else { IDX_IMAGES4_MAGIC }).to_be_bytes())?;
    for d in dims {
        out.write_all(&u32::try_from(d).map_err(|_| Error::invalid("IDX extent exceeds u32"))?.to_be_bytes())?;
    }
    let bytes: Vec<u8> = images.data().iter().map(|&v| quantize(v)).collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

pub fn write_idx_labels(labels: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    out.write_all(&(labels.len() as u32).to_be_bytes())?;
    let bytes = labels
        .iter()
        .map(|&y| u8::try_from(y).map_err(|_| Error::invalid(format!("label {y} does not fit in a byte"))))
        .collect::<Result<Vec<u8>>>()?;
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

// ---- synthetic lesions --------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SynthTask {
    /// K=2: lesion absent (0) or present (1).
    Presence,
    /// K=5: absent (0) or in quadrant 1..=4 (row-major).
    Quadrant,
}

string_enum!(SynthTask {
    SynthTask::Presence => "presence",
    SynthTask::Quadrant => "quadrant",
});

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub size: usize,
    pub patch: usize,
    /// Intensity added inside the lesion patch (δ_c).
    pub contrast: f64,
    /// Standard deviation σ of the per-pixel Gaussian noise.
    pub noise: f64,
    pub task: SynthTask,
    pub count: usize,
    pub seed: u64,
}

impl SynthSpec {
    /// 28x28, 6x6 patch, δ_c = 0.08, σ = 0.05, 2000 presence samples.
    pub fn lesion28(seed: u64) -> Self {
        SynthSpec { size: 28, patch: 6, contrast: 0.08, noise: 0.05, task: SynthTask::Presence, count: 2000, seed }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "lesion28" => Ok(Self::lesion28(seed)),
            "quadrant28" => Ok(SynthSpec { task: SynthTask::Quadrant, ..Self::lesion28(seed) }),
            other => Err(Error::invalid(format!("unknown synth preset '{other}' (lesion28, quadrant28)"))),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.task {
            SynthTask::Presence => 2,
            SynthTask::Quadrant => 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let room = match self.task {
            SynthTask::Presence => self.size,
            SynthTask::Quadrant => self.size / 2,
        };
        if self.patch == 0 || self.patch > room {
            return Err(Error::invalid(format!("lesion patch {} does not fit in {room} pixels", self.patch)));
        }
        if !(self.contrast >= 0.0 && self.noise >= 0.0) || self.count == 0 {
            return Err(Error::invalid("synthetic spec needs contrast >= 0, noise >= 0 and count > 0"));
        }
        Ok(())
    }
}

/// Lesion rectangle in pixel coordinates (`x` is the column).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Lesion {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl Lesion {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y0 + self.h).contains(&y) && (self.x0..self.x0 + self.w).contains(&x)
    }

    /// Row-major mask over an `(h, w)` feature map computed from an
    /// `(image_h, image_w)` input: a cell is inside when its centre, mapped
    /// back to input pixels, lies in the rectangle.
    pub fn mask(&self, image: (usize, usize), map: (usize, usize)) -> Vec<bool> {
        let (sy, sx) = (image.0 as f64 / map.0 as f64, image.1 as f64 / map.1 as f64);
        let inside = |c: f64, lo: usize, len: usize| c >= lo as f64 && c < (lo + len) as f64;
        (0..map.0 * map.1)
            .map(|p| {
                let (i, j) = (p / map.1, p % map.1);
                inside((i as f64 + 0.5) * sy, self.y0, self.h) && inside((j as f64 + 0.5) * sx, self.x0, self.w)
            })
            .collect()
    }
}

/// Generated images with the per-image lesion placement.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub dataset: Dataset,
    pub lesions: Vec<Option<Lesion>>,
}

impl SynthData {
    /// The first `n` samples and the rest, as two splits.
    pub fn split(&self, n: usize, first: &str, second: &str) -> (SynthData, SynthData) {
        let n = n.min(self.dataset.len());
        let part = |range: std::ops::Range<usize>, name: &str| {
            let idx: Vec<usize> = range.collect();
            SynthData {
                dataset: self.dataset.subset(&idx, name),
                lesions: idx.iter().map(|&i| self.lesions[i]).collect(),
            }
        };
        (part(0..n, first), part(n..self.dataset.len(), second))
    }
}

/// Smooth sinusoidal background plus Gaussian noise; lesion images add
/// `contrast` on a random patch. Values are clipped to `[0, 1]` and
/// quantised to bytes so that an IDX round trip is exact.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.num_classes();
    let mut labels: Vec<usize> = (0..spec.count).map(|i| i % k).collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::invalid(e.to_string()))?;
    let n = spec.size;
    let mut data = Vec::with_capacity(spec.count * n * n);
    let mut lesions = Vec::with_capacity(spec.count);
    for &label in &labels {
        let (fx, fy) = (rng.random_range(0.02..0.12), rng.random_range(0.02..0.12));
        let (px, py) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
        let amplitude = rng.random_range(0.05..0.15);
        let mut img: Vec<f64> = (0..n * n)
            .map(|p| {
                let (y, x) = ((p / n) as f64, (p % n) as f64);
                0.5 + amplitude * (fx * x + px).sin() * (fy * y + py).cos() + noise.sample(&mut rng)
            })
            .collect();
        let lesion = match (spec.task, label) {
            (_, 0) => None,
            (SynthTask::Presence, _) => {
                let span = n - spec.patch + 1;
                Some((rng.random_range(0..span), rng.random_range(0..span)))
            }
            (SynthTask::Quadrant, q) => {
                let half = n / 2;
                let span = half - spec.patch + 1;
                let (qy, qx) = ((q - 1) / 2, (q - 1) % 2);
                Some((qx * half + rng.random_range(0..span), qy * half + rng.random_range(0..span)))
            }
        }
        .map(|(x0, y0)| Lesion { x0, y0, w: spec.patch, h: spec.patch });
        if let Some(l) = lesion {
            for y in l.y0..l.y0 + l.h {
                for x in l.x0..l.x0 + l.w {
                    img[y * n + x] += spec.contrast;
                }
            }
        }
        data.extend(img.into_iter().map(|v| f64::from(quantize(v)) / 255.0));
        lesions.push(lesion);
    }
    let class_names = match spec.task {
        SynthTask::Presence => vec!["absent".to_string(), "lesion".to_string()],
        SynthTask::Quadrant => ["absent", "q1", "q2", "q3", "q4"].map(String::from).to_vec(),
    };
    let dataset = Dataset::new(Tensor::new(vec![spec.count, 1, n, n], data)?, labels, class_names, "synth")?;
    Ok(SynthData { dataset, lesions })
}

pub fn write_lesions(lesions: &[Option<Lesion>], path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "index,x0,y0,w,h")?;
    for (i, l) in lesions.iter().enumerate() {
        if let Some(l) = l {
            writeln!(out, "{i},{},{},{},{}", l.x0, l.y0, l.w, l.h)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_lesions(path: impl AsRef<Path>, count: usize) -> Result<Vec<Option<Lesion>>> {
    let text = fs::read_to_string(path)?;
    let mut out = vec![None; count];
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<usize> = line
            .split(',')
            .map(|v| v.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format { what: "lesion csv", detail: format!("bad row '{line}'") })?;
        let [i, x0, y0, w, h] = f[..] else {
            return Err(Error::Format { what: "lesion csv", detail: format!("bad row '{line}'") });
        };
        if i >= count {
            return Err(Error::Format { what: "lesion csv", detail: format!("index {i} beyond {count} images") });
        }
        out[i] = Some(Lesion { x0, y0, w, h });
    }
    Ok(out)
}

// ---- dataset directories --------------------------------------------------

/// A directory of IDX splits described by `dataset.txt`:
///
/// ```text
/// splits = train,val
/// classes = absent,lesion
/// train.images = train-images.idx
/// train.labels = train-labels.idx
/// train.lesions = train-lesions.csv
/// ```
pub struct DatasetDir {
    root: PathBuf,
    entries: HashMap<String, String>,
}

pub const DATASET_MANIFEST: &str = "dataset.txt";

impl DatasetDir {
    /// Write every split and the manifest; `extra` lines (generator
    /// settings, say) are appended verbatim as `key = value`.
    pub fn write(root: impl AsRef<Path>, splits: &[&SynthData], extra: &[(String, String)]) -> Result<()> {
        let root = root.as_ref();
        fs::create_dir_all(root)?;
        let mut lines = vec![
            format!("splits = {}", splits.iter().map(|s| s.dataset.split.as_str()).collect::<Vec<_>>().join(",")),
            format!("classes = {}", splits.first().map(|s| s.dataset.class_names.join(",")).unwrap_or_default()),
        ];
        for s in splits {
            let name = &s.dataset.split;
            write_idx_images(&s.dataset.images, root.join(format!("{name}-images.idx")))?;
            write_idx_labels(&s.dataset.labels, root.join(format!("{name}-labels.idx")))?;
            write_lesions(&s.lesions, root.join(format!("{name}-lesions.csv")))?;
            lines.push(format!("{name}.images = {name}-images.idx"));
            lines.push(format!("{name}.labels = {name}-labels.idx"));
            lines.push(format!("{name}.lesions = {name}-lesions.csv"));
            lines.push(format!("{name}.count = {}", s.dataset.len()));
        }
        lines.extend(extra.iter().map(|(k, v)| format!("{k} = {v}")));
        fs::write(root.join(DATASET_MANIFEST), lines.join("\n") + "\n")?;
        Ok(())
    }

    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let text = fs::read_to_string(root.join(DATASET_MANIFEST))?;
        let entries = parse_key_values(&text, "dataset manifest")?;
        Ok(DatasetDir { root, entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn splits(&self) -> Vec<String> {
        self.get("splits").map(|s| s.split(',').map(|p| p.trim().to_string()).collect()).unwrap_or_default()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.get("classes").map(|s| s.split(',').map(|p| p.trim().to_string()).collect()).unwrap_or_default()
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// SHA-256 over the manifest and every file it references, in manifest
    /// order.
    pub fn digest(&self) -> Result<String> {
        let mut parts = vec![fs::read(self.root.join(DATASET_MANIFEST))?];
        for split in self.splits() {
            for what in ["images", "labels", "lesions"] {
                if let Some(f) = self.get(&format!("{split}.{what}")) {
                    parts.push(fs::read(self.root.join(f))?);
                }
            }
        }
        Ok(crate::sha256_hex(&parts.iter().map(Vec::as_slice).collect::<Vec<_>>()))
    }

    /// Load one split, with its lesion sidecar when present.
    pub fn load(&self, split: &str) -> Result<SynthData> {
        let path = |what: &str| -> Result<PathBuf> {
            let key = format!("{split}.{what}");
            self.get(&key)
                .map(|f| self.root.join(f))
                .ok_or_else(|| Error::Format { what: "dataset manifest", detail: format!("missing key '{key}'") })
        };
        let names = self.class_names();
        let mut ds = load_idx(path("images")?, path("labels")?, Some(names.len()).filter(|&k| k > 0))?;
        if !names.is_empty() {
            ds.class_names = names;
        }
        ds.split = split.to_string();
        let lesions = match self.get(&format!("{split}.lesions")) {
            Some(_) => read_lesions(path("lesions")?, ds.len())?,
            None => vec![None; ds.len()],
        };
        Ok(SynthData { dataset: ds, lesions })
    }
}

/// `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str, what: &'static str) -> Result<HashMap<String, String>> {
    let mut out = HashMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format { what, detail: format!("expected key = value, got '{line}'") })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

// ---- augmentation -------------------------------------------------------

/// Zero-pad `x: [C, H, W]` by `pad` on every side and crop the `H x W`
/// window whose top-left corner is `(dy, dx)` in padded coordinates.
pub fn pad_crop_at(x: &Tensor, pad: usize, dy: usize, dx: usize) -> Tensor {
    let &[c, h, w] = x.shape() else { panic!("pad_crop_at expects [C, H, W], got {:?}", x.shape()) };
    assert!(dy <= 2 * pad && dx <= 2 * pad, "crop offset outside the padded image");
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for i in 0..h {
            let src_i = (i + dy).checked_sub(pad).filter(|&v| v < h);
            let Some(si) = src_i else { continue };
            for j in 0..w {
                if let Some(sj) = (j + dx).checked_sub(pad).filter(|&v| v < w) {
                    out.data_mut()[(ch * h + i) * w + j] = x.data()[(ch * h + si) * w + sj];
                }
            }
        }
    }
    out
}

/// Random pad-and-crop with offsets uniform in `[0, 2·pad]`.
pub fn augment_pad_crop<R: Rng + ?Sized>(x: &Tensor, pad: usize, rng: &mut R) -> Tensor {
    if pad == 0 {
        return x.clone();
    }
    let (dy, dx) = (rng.random_range(0..=2 * pad), rng.random_range(0..=2 * pad));
    pad_crop_at(x, pad, dy, dx)
}

// ---- batching -----------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Dataset indices of the rows.
    pub indices: Vec<usize>,
}

/// Index batches for one epoch: a permutation drawn from `(seed, epoch)`
/// when shuffling, chunked into `batch_size` with the final partial batch
/// kept.
pub fn batch_indices(n: usize, batch_size: usize, shuffle: bool, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = epoch_rng(seed, epoch);
        order.shuffle(&mut rng);
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Independent stream per epoch from one seed.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// How an epoch's batches are assembled.
#[derive(Clone, Copy, Debug)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub shuffle: bool,
    /// Pad-and-crop padding; 0 disables augmentation.
    pub pad: usize,
    pub seed: u64,
    pub epoch: usize,
}

/// Assemble the epoch's batches on a helper thread that runs at most two
/// batches ahead, handing each to `f` in order. Stops at the first error
/// returned by `f`.
pub fn for_each_batch<E>(ds: &Dataset, plan: BatchPlan, mut f: impl FnMut(usize, Batch) -> std::result::Result<(), E>) -> std::result::Result<(), E> {
    let order = batch_indices(ds.len(), plan.batch_size, plan.shuffle, plan.seed, plan.epoch);
    thread::scope(|scope| {
        let (tx, rx) = mpsc::sync_channel::<Batch>(2);
        scope.spawn(move || {
            // a separate stream from the shuffle so both stay reproducible
            let mut rng = epoch_rng(plan.seed ^ 0x5eed_a116, plan.epoch);
            for idx in order {
                let mut batch = ds.gather(&idx);
                if plan.pad > 0 {
                    let per = batch.images.len() / idx.len();
                    for (r, &i) in idx.iter().enumerate() {
                        let aug = augment_pad_crop(&ds.image(i), plan.pad, &mut rng);
                        batch.images.data_mut()[r * per..(r + 1) * per].copy_from_slice(aug.data());
                    }
                }
                if tx.send(batch).is_err() {
                    return;
                }
            }
        });
        for (i, batch) in rx.iter().enumerate() {
            f(i, batch)?;
        }
        Ok(())
    })
}
