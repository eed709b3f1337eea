//! Procedural fine-grained dataset.
//!
//! Every image shows the same body (an ellipse) at a random position. The
//! only class evidence is a small black-and-white textured patch placed
//! somewhere on the body. Class textures differ in how many cells are inked,
//! spread evenly between nearly empty and nearly full. Look-alike clutter
//! patches with random textures, drawn at reduced contrast, are scattered off
//! the body. Each sample carries the patch footprint as its part mask.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::KvMap;
use crate::container::{sha256_hex, Reader, Writer};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::pnm;
use crate::rng::{derive_seed, rng_for};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"GGDS";
const VERSION: u32 = 1;

const BACKGROUND: [f64; 3] = [40.0, 40.0, 40.0];
const BODY: [f64; 3] = [150.0, 110.0, 80.0];
const INK_ON: [f64; 3] = [255.0, 255.0, 255.0];
const INK_OFF: [f64; 3] = [0.0, 0.0, 0.0];

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Square image side in pixels.
    pub size: usize,
    /// Ellipse semi-axes of the body, rows then columns.
    pub body_radii: [usize; 2],
    pub patch_size: usize,
    /// Texture cells are `cell_size × cell_size` pixel blocks.
    pub cell_size: usize,
    /// Off-body look-alike patches per image.
    pub clutter: usize,
    /// Peak-to-peak amplitude of the additive pixel noise, in 0..255 units.
    pub noise: f64,
    /// Clutter ink is blended toward the background; 1 draws it like the patch.
    pub clutter_contrast: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            classes: 8,
            train_per_class: 32,
            test_per_class: 16,
            size: 64,
            body_radii: [14, 20],
            patch_size: 8,
            cell_size: 2,
            clutter: 3,
            noise: 8.0,
            clutter_contrast: 0.5,
            seed: 0,
        }
    }
}

pub const DATA_KEYS: &[&str] = &[
    "data.classes",
    "data.train_per_class",
    "data.test_per_class",
    "data.size",
    "data.body_rows",
    "data.body_cols",
    "data.patch_size",
    "data.cell_size",
    "data.clutter",
    "data.noise",
    "data.clutter_contrast",
    "data.seed",
];

impl DatasetSpec {
    pub const CHANNELS: usize = 3;

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return bad("per-class sample counts must be at least 1".into());
        }
        if self.cell_size == 0 || self.patch_size == 0 || !self.patch_size.is_multiple_of(self.cell_size) {
            return bad(format!("patch size {} is not a multiple of cell size {}", self.patch_size, self.cell_size));
        }
        let [ry, rx] = self.body_radii;
        if ry == 0 || rx == 0 || 2 * ry + 2 >= self.size || 2 * rx + 2 >= self.size {
            return bad(format!("body radii {:?} do not fit a {} pixel image", self.body_radii, self.size));
        }
        // Largest axis-aligned square inside the ellipse has half-side r/√2.
        let inner = (ry.min(rx) as f64 * std::f64::consts::SQRT_2) as usize;
        if self.patch_size > inner {
            return bad(format!("patch {} does not fit inside the body", self.patch_size));
        }
        if !(0.0..=255.0).contains(&self.noise) {
            return bad(format!("noise amplitude {} outside 0..255", self.noise));
        }
        if !(0.0..=1.0).contains(&self.clutter_contrast) {
            return bad(format!("clutter contrast {} outside 0..1", self.clutter_contrast));
        }
        let cells = self.cells_per_side() * self.cells_per_side();
        if cells <= self.classes {
            return bad(format!("{cells} texture cells cannot give {} classes distinct ink counts", self.classes));
        }
        Ok(())
    }

    fn cells_per_side(&self) -> usize {
        self.patch_size / self.cell_size
    }

    pub fn train_len(&self) -> usize {
        self.classes * self.train_per_class
    }

    pub fn test_len(&self) -> usize {
        self.classes * self.test_per_class
    }

    pub fn to_kv(&self, kv: &mut KvMap) {
        kv.set("data.classes", self.classes);
        kv.set("data.train_per_class", self.train_per_class);
        kv.set("data.test_per_class", self.test_per_class);
        kv.set("data.size", self.size);
        kv.set("data.body_rows", self.body_radii[0]);
        kv.set("data.body_cols", self.body_radii[1]);
        kv.set("data.patch_size", self.patch_size);
        kv.set("data.cell_size", self.cell_size);
        kv.set("data.clutter", self.clutter);
        kv.set("data.noise", self.noise);
        kv.set("data.clutter_contrast", self.clutter_contrast);
        kv.set("data.seed", self.seed);
    }

    pub fn from_kv(kv: &KvMap, base: &DatasetSpec) -> Result<Self> {
        let spec = DatasetSpec {
            classes: kv.get_or("data.classes", base.classes)?,
            train_per_class: kv.get_or("data.train_per_class", base.train_per_class)?,
            test_per_class: kv.get_or("data.test_per_class", base.test_per_class)?,
            size: kv.get_or("data.size", base.size)?,
            body_radii: [
                kv.get_or("data.body_rows", base.body_radii[0])?,
                kv.get_or("data.body_cols", base.body_radii[1])?,
            ],
            patch_size: kv.get_or("data.patch_size", base.patch_size)?,
            cell_size: kv.get_or("data.cell_size", base.cell_size)?,
            clutter: kv.get_or("data.clutter", base.clutter)?,
            noise: kv.get_or("data.noise", base.noise)?,
            clutter_contrast: kv.get_or("data.clutter_contrast", base.clutter_contrast)?,
            seed: kv.get_or("data.seed", base.seed)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn canonical_text(&self) -> String {
        let mut kv = KvMap::new();
        self.to_kv(&mut kv);
        kv.render()
    }

    /// Hex SHA-256 of the canonical `key=value` rendering.
    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_text().as_bytes())
    }
}

/// Binary mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn area_fraction(&self) -> f64 {
        self.area() as f64 / self.bits.len() as f64
    }

    /// Run lengths alternating false/true, starting with a (possibly empty)
    /// false run.
    pub fn runs(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &b in &self.bits {
            if b != current {
                runs.push(len);
                current = b;
                len = 0;
            }
            len += 1;
        }
        runs.push(len);
        runs
    }

    pub fn from_runs(rows: usize, cols: usize, runs: &[u32]) -> Result<Self> {
        let mut bits = Vec::with_capacity(rows * cols);
        for (i, &r) in runs.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, r as usize));
        }
        if bits.len() != rows * cols {
            return Err(Error::Format(format!("mask runs cover {} of {} pixels", bits.len(), rows * cols)));
        }
        Ok(Mask { rows, cols, bits })
    }

    /// Area-averaged downscale to a `rows × cols` grid. Dimensions must
    /// divide evenly.
    pub fn downscale(&self, rows: usize, cols: usize) -> Result<Vec<f64>> {
        if rows == 0 || cols == 0 || !self.rows.is_multiple_of(rows) || !self.cols.is_multiple_of(cols) {
            return Err(Error::shape(format!("cannot area-average {}x{} onto {rows}x{cols}", self.rows, self.cols)));
        }
        let (fr, fc) = (self.rows / rows, self.cols / cols);
        let mut out = vec![0.0; rows * cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                if self.bits[r * self.cols + c] {
                    out[(r / fr) * cols + c / fc] += 1.0;
                }
            }
        }
        let cell = (fr * fc) as f64;
        out.iter_mut().for_each(|v| *v /= cell);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3, size, size]`, values `k/255`.
    pub image: Tensor,
    pub label: usize,
    pub part_mask: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Mean part-mask area fraction over a split: the localization score of
    /// a uniform attention map.
    pub fn chance_localization(&self, split: Split) -> f64 {
        let s = self.split(split);
        s.iter().map(|x| x.part_mask.area_fraction()).sum::<f64>() / s.len() as f64
    }
}

type Pattern = Vec<bool>;

/// One texture per class. Class `k` inks `(k+1)/(K+1)` of the cells (rounded)
/// at seeded positions, so ink counts are distinct and never 0 or all cells.
fn class_patterns(spec: &DatasetSpec) -> Vec<Pattern> {
    let n = spec.cells_per_side() * spec.cells_per_side();
    let k = spec.classes;
    let mut rng = rng_for(spec.seed, "class-patterns");
    (0..k)
        .map(|class| {
            let on = ((class + 1) * n + k.div_ceil(2)) / (k + 1);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let mut p = vec![false; n];
            for &i in &idx[..on] {
                p[i] = true;
            }
            p
        })
        .collect()
}

struct Canvas {
    size: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn put(&mut self, r: usize, c: usize, color: [f64; 3], jitter: [f64; 3]) {
        let hw = self.size * self.size;
        for ch in 0..3 {
            self.px[ch * hw + r * self.size + c] = color[ch] + jitter[ch];
        }
    }

    fn stamp(&mut self, spec: &DatasetSpec, top: usize, left: usize, pattern: &[bool], contrast: f64, rng: &mut impl Rng) {
        let cps = spec.cells_per_side();
        for dr in 0..spec.patch_size {
            for dc in 0..spec.patch_size {
                let bit = pattern[(dr / spec.cell_size) * cps + dc / spec.cell_size];
                let ink = if bit { INK_ON } else { INK_OFF };
                let color = [0, 1, 2].map(|i| BACKGROUND[i] + contrast * (ink[i] - BACKGROUND[i]));
                self.put(top + dr, left + dc, color, jitter(spec.noise * 0.5, rng));
            }
        }
    }
}

fn jitter(amplitude: f64, rng: &mut impl Rng) -> [f64; 3] {
    if amplitude == 0.0 {
        return [0.0; 3];
    }
    let h = amplitude / 2.0;
    [rng.gen_range(-h..=h), rng.gen_range(-h..=h), rng.gen_range(-h..=h)]
}

fn in_ellipse(r: f64, c: f64, cy: f64, cx: f64, ry: f64, rx: f64) -> bool {
    let (dy, dx) = ((r - cy) / ry, (c - cx) / rx);
    dy * dy + dx * dx <= 1.0
}

fn generate_sample(spec: &DatasetSpec, patterns: &[Pattern], split: Split, index: usize) -> Result<Sample> {
    let mut rng = rng_for(spec.seed, &format!("sample/{}/{index}", split.as_str()));
    let label = index % spec.classes;
    let n = spec.size;
    let (ry, rx) = (spec.body_radii[0] as f64, spec.body_radii[1] as f64);
    let cy = rng.gen_range(ry + 1.0..=n as f64 - ry - 2.0).floor() + 0.5;
    let cx = rng.gen_range(rx + 1.0..=n as f64 - rx - 2.0).floor() + 0.5;
    let on_body = |r: usize, c: usize| in_ellipse(r as f64 + 0.5, c as f64 + 0.5, cy, cx, ry, rx);

    let mut canvas = Canvas { size: n, px: vec![0.0; 3 * n * n] };
    for r in 0..n {
        for c in 0..n {
            let j = jitter(spec.noise, &mut rng);
            let base = if on_body(r, c) { BODY } else { BACKGROUND };
            canvas.put(r, c, base, j);
        }
    }

    let p = spec.patch_size;
    let square_inside = |top: usize, left: usize, pred: &dyn Fn(usize, usize) -> bool| {
        (top..top + p).all(|r| (left..left + p).all(|c| pred(r, c)))
    };
    let mut placed = None;
    for _ in 0..1000 {
        let top = rng.gen_range(0..=n - p);
        let left = rng.gen_range(0..=n - p);
        if square_inside(top, left, &on_body) {
            placed = Some((top, left));
            break;
        }
    }
    let (top, left) = placed.ok_or_else(|| Error::Config("class patch cannot be placed on the body".into()))?;
    canvas.stamp(spec, top, left, &patterns[label], 1.0, &mut rng);

    // Clutter stays a pixel clear of the body and of other clutter.
    let cells = spec.cells_per_side() * spec.cells_per_side();
    let mut taken: Vec<(usize, usize)> = Vec::new();
    for _ in 0..spec.clutter {
        for _ in 0..200 {
            let t = rng.gen_range(0..=n - p);
            let l = rng.gen_range(0..=n - p);
            let clear_of_body = (t.saturating_sub(1)..(t + p + 1).min(n))
                .all(|r| (l.saturating_sub(1)..(l + p + 1).min(n)).all(|c| !on_body(r, c)));
            let overlaps = taken.iter().any(|&(tt, ll)| t < tt + p + 1 && tt < t + p + 1 && l < ll + p + 1 && ll < l + p + 1);
            if clear_of_body && !overlaps {
                let texture: Vec<bool> = (0..cells).map(|_| rng.gen()).collect();
                canvas.stamp(spec, t, l, &texture, spec.clutter_contrast, &mut rng);
                taken.push((t, l));
                break;
            }
        }
    }

    let data = canvas.px.iter().map(|&v| f64::from(v.round().clamp(0.0, 255.0) as u8) / 255.0).collect();
    let image = Tensor::from_vec(&[3, n, n], data)?;
    let mut bits = vec![false; n * n];
    for r in top..top + p {
        bits[r * n + left..r * n + left + p].fill(true);
    }
    Ok(Sample { image, label, part_mask: Mask { rows: n, cols: n, bits } })
}

/// Deterministic in `spec`; per-sample seeds make the result independent of
/// the execution policy.
pub fn generate(spec: &DatasetSpec, exec: Exec) -> Result<Dataset> {
    spec.validate()?;
    let patterns = class_patterns(spec);
    let make = |split: Split, count: usize| -> Result<Vec<Sample>> {
        exec.map_range(count, |i| generate_sample(spec, &patterns, split, i)).into_iter().collect()
    };
    Ok(Dataset { spec: spec.clone(), train: make(Split::Train, spec.train_len())?, test: make(Split::Test, spec.test_len())? })
}

/// Seeded shuffle of `0..n` cut into batches; the last may be short.
pub fn batches(n: usize, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(epoch_seed, "batch-order"));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Per-epoch shuffle seed under a run's master seed.
pub fn epoch_seed(master: u64, epoch: usize) -> u64 {
    derive_seed(master, &format!("epoch/{epoch}"))
}

pub fn to_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    let text = ds.spec.canonical_text();
    let mut w = Writer::new(MAGIC, VERSION);
    w.bytes(&hex::decode(ds.spec.hash()).expect("hex digest"));
    w.str(&text)?;
    w.len_u32(ds.train.len())?;
    w.len_u32(ds.test.len())?;
    w.len_u32(DatasetSpec::CHANNELS)?;
    w.len_u32(ds.spec.size)?;
    w.len_u32(ds.spec.size)?;
    for s in ds.train.iter().chain(&ds.test) {
        w.len_u32(s.label)?;
        let bytes: Vec<u8> = s.image.data().iter().map(|&v| (v * 255.0).round() as u8).collect();
        w.bytes(&bytes);
        let runs = s.part_mask.runs();
        w.len_u32(runs.len())?;
        for r in runs {
            w.u32(r);
        }
    }
    Ok(w.finish())
}

pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::open(bytes, MAGIC, VERSION, "dataset")?;
    let hash = hex::encode(r.take(32)?);
    let spec = DatasetSpec::from_kv(&KvMap::parse(&r.str()?)?, &DatasetSpec::default())?;
    if spec.hash() != hash {
        return Err(Error::Format("dataset spec hash does not match its spec".into()));
    }
    let (n_train, n_test) = (r.usize()?, r.usize()?);
    let (ch, rows, cols) = (r.usize()?, r.usize()?, r.usize()?);
    if n_train != spec.train_len() || n_test != spec.test_len() || ch != 3 || rows != spec.size || cols != spec.size {
        return Err(Error::Format("dataset header disagrees with its spec".into()));
    }
    let mut read = |count: usize| -> Result<Vec<Sample>> {
        (0..count)
            .map(|_| {
                let label = r.usize()?;
                if label >= spec.classes {
                    return Err(Error::Format(format!("label {label} out of range")));
                }
                let px = r.take(ch * rows * cols)?;
                let image = Tensor::from_vec(&[ch, rows, cols], px.iter().map(|&b| f64::from(b) / 255.0).collect())?;
                let nruns = r.usize()?;
                let runs = (0..nruns).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                Ok(Sample { image, label, part_mask: Mask::from_runs(rows, cols, &runs)? })
            })
            .collect()
    };
    let train = read(n_train)?;
    let test = read(n_test)?;
    r.finish()?;
    Ok(Dataset { spec, train, test })
}

pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(ds)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset> {
    from_bytes(&fs::read(path)?)
}

/// Writes one sample as a binary PPM.
pub fn export_sample_ppm(sample: &Sample, path: &Path) -> Result<()> {
    let &[_, rows, cols] = sample.image.shape() else {
        return Err(Error::shape("sample image must be [3, rows, cols]"));
    };
    pnm::write_ppm(path, cols, rows, &pnm::planar_to_rgb(sample.image.data(), rows, cols))
}
