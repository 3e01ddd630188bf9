//! Synthetic unpaired multimodal slice data: phantom generation, the
//! preprocessing/augmentation pipeline and the on-disk slice format.

use std::f32::consts::TAU;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use uagan_autograd::{exec, Shape, Tensor};

use crate::error::{IoContext, Result, UaganError};

pub const SLICE_MAGIC: &[u8; 4] = b"UAG1";
pub const MANIFEST_VERSION: &str = "1";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Slices whose brain covers less than this fraction of the frame are dropped.
pub const DEFAULT_MIN_BRAIN_FRACTION: f32 = 0.05;

/// Row-major 2D array.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != h * w {
            return Err(UaganError::Shape(format!("{} values for a {h}×{w} grid", data.len())));
        }
        Ok(Grid { h, w, data })
    }

    pub fn filled(h: usize, w: usize, v: T) -> Self {
        Grid { h, w, data: vec![v; h * w] }
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.w + x]
    }
}

pub fn modality_name(index: usize) -> String {
    const NAMES: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ";
    match NAMES.get(index) {
        Some(&c) => (c as char).to_string(),
        None => format!("M{index}"),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalityLabel {
    index: usize,
    count: usize,
}

impl ModalityLabel {
    pub fn new(index: usize, count: usize) -> Result<Self> {
        if index >= count {
            return Err(UaganError::Argument(format!("modality index {index} out of range 0..{count}")));
        }
        Ok(ModalityLabel { index, count })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn name(&self) -> String {
        modality_name(self.index)
    }

    pub fn one_hot(&self) -> Vec<f32> {
        one_hot_modality(self.index, self.count).expect("index validated at construction")
    }
}

pub fn one_hot_modality(index: usize, count: usize) -> Result<Vec<f32>> {
    if index >= count {
        return Err(UaganError::Argument(format!("modality index {index} out of range 0..{count}")));
    }
    let mut v = vec![0.0; count];
    v[index] = 1.0;
    Ok(v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample {
    pub image: Grid<f32>,
    pub mask: Grid<u8>,
    pub modality: ModalityLabel,
    pub patient_id: String,
    pub slice_index: usize,
    /// Fraction of the frame covered by brain, when the generator recorded it.
    pub brain_fraction: Option<f32>,
}

impl SliceSample {
    /// Brain-support fraction: the recorded value, or else the fraction of
    /// pixels with nonzero intensity.
    pub fn brain_fraction(&self) -> f32 {
        self.brain_fraction.unwrap_or_else(|| {
            let n = self.image.data.iter().filter(|v| v.abs() > 0.0).count();
            n as f32 / self.image.data.len().max(1) as f32
        })
    }
}

/// Intensities of one modality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contrast {
    pub brain: f32,
    pub tumor: f32,
    pub edema: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomParams {
    pub image_size: usize,
    /// Brain semi-axes in pixels at the central slice.
    pub brain_radius_range: (f32, f32),
    /// Tumor-core radius in pixels at its widest.
    pub tumor_radius_range: (f32, f32),
    /// Edema ring width as a fraction of the tumor radius.
    pub edema_width: f32,
    pub modality_contrast_table: Vec<Contrast>,
    pub noise_sigma: f32,
    pub slices_per_patient: usize,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            image_size: 64,
            brain_radius_range: (22.0, 28.0),
            tumor_radius_range: (4.0, 8.0),
            edema_width: 0.5,
            modality_contrast_table: vec![
                Contrast { brain: 0.55, tumor: 0.95, edema: 0.40 },
                Contrast { brain: 0.45, tumor: 0.75, edema: 0.90 },
                Contrast { brain: 0.35, tumor: 0.85, edema: 0.95 },
            ],
            noise_sigma: 0.03,
            slices_per_patient: 8,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self, modalities: usize) -> Result<()> {
        let (bmin, bmax) = self.brain_radius_range;
        let (tmin, tmax) = self.tumor_radius_range;
        if self.image_size < 8 || self.slices_per_patient == 0 {
            return Err(UaganError::Config("image_size must be ≥ 8 and slices_per_patient ≥ 1".into()));
        }
        if !(0.0 < bmin && bmin <= bmax && 0.0 < tmin && tmin <= tmax) {
            return Err(UaganError::Config("radius ranges must be positive and ordered".into()));
        }
        if tmax >= bmin {
            return Err(UaganError::Config(format!(
                "tumor radius up to {tmax} does not fit inside brain radius {bmin}"
            )));
        }
        if tmax * (1.0 + self.edema_width) >= 0.9 * bmin {
            return Err(UaganError::Config("tumor plus edema ring does not fit inside the brain".into()));
        }
        if 2.0 * bmax >= self.image_size as f32 {
            return Err(UaganError::Config(format!("brain radius {bmax} exceeds the {0}×{0} frame", self.image_size)));
        }
        if self.noise_sigma < 0.0 || self.edema_width < 0.0 {
            return Err(UaganError::Config("noise_sigma and edema_width must be ≥ 0".into()));
        }
        if self.modality_contrast_table.len() < modalities {
            return Err(UaganError::Config(format!(
                "contrast table has {} entries for {modalities} modalities",
                self.modality_contrast_table.len()
            )));
        }
        let table = &self.modality_contrast_table[..modalities];
        for (i, a) in table.iter().enumerate() {
            if table[i + 1..].iter().any(|b| b == a) {
                return Err(UaganError::Config(format!("modality {} repeats another contrast", modality_name(i))));
            }
        }
        Ok(())
    }
}

/// Lumpy ellipse: radius along angle θ is `r(θ) = base(θ)·(1 + Σ a_k cos(kθ + φ_k))`.
#[derive(Clone, Debug)]
struct Blob {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
    harmonics: [(f32, f32); 2],
}

impl Blob {
    /// Normalized radial coordinate; < 1 inside. `scale` shrinks the blob.
    fn rho(&self, x: f32, y: f32, scale: f32) -> f32 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let theta = dy.atan2(dx);
        let mut wobble = 1.0;
        for (k, &(a, phi)) in self.harmonics.iter().enumerate() {
            wobble += a * ((k as f32 + 2.0) * theta + phi).cos();
        }
        let e = ((dx / self.rx).powi(2) + (dy / self.ry).powi(2)).sqrt();
        e / (wobble * scale)
    }
}

struct PatientGeometry {
    brain: Blob,
    tumor: Blob,
    /// Tumor-center depth and radius, in units of the brain's half-depth.
    tumor_z: f32,
    tumor_depth: f32,
}

impl PatientGeometry {
    fn sample(params: &PhantomParams, rng: &mut ChaCha8Rng) -> Self {
        let size = params.image_size as f32;
        let c = size / 2.0;
        let (bmin, bmax) = params.brain_radius_range;
        let (tmin, tmax) = params.tumor_radius_range;
        let mut range = |lo: f32, hi: f32| if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let brain = Blob {
            cx: c + range(-1.0, 1.0),
            cy: c + range(-1.0, 1.0),
            rx: range(bmin, bmax),
            ry: range(bmin, bmax),
            harmonics: [(range(0.0, 0.03), range(0.0, TAU)), (range(0.0, 0.02), range(0.0, TAU))],
        };
        let r = range(tmin, tmax);
        let outer = r * (1.0 + params.edema_width);
        // Keep the edema ring inside the brain's inner 90%.
        let max_offset = (0.9 * bmin - outer).max(0.0);
        let dist = range(0.0, max_offset);
        let ang = range(0.0, TAU);
        let tumor = Blob {
            cx: brain.cx + dist * ang.cos(),
            cy: brain.cy + dist * ang.sin(),
            rx: r * range(0.85, 1.0),
            ry: r * range(0.85, 1.0),
            harmonics: [(range(0.0, 0.12), range(0.0, TAU)), (range(0.0, 0.08), range(0.0, TAU))],
        };
        PatientGeometry { brain, tumor, tumor_z: range(-0.25, 0.25), tumor_depth: range(0.45, 0.7) }
    }
}

/// Depth of slice `k` of `n` in units of the brain's half-depth.
fn slice_depth(k: usize, n: usize) -> f32 {
    if n == 1 {
        0.0
    } else {
        -0.7 + 1.4 * k as f32 / (n - 1) as f32
    }
}

fn derive_seed(seed: u64, salt: u64) -> u64 {
    // SplitMix64 finalizer.
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders one patient's slices. Geometry depends only on `seed`; intensities
/// and noise depend on the modality as well.
pub fn generate_phantom_patient(
    params: &PhantomParams,
    modality: ModalityLabel,
    seed: u64,
) -> Result<Vec<SliceSample>> {
    params.validate(modality.count())?;
    let mut geo_rng = ChaCha8Rng::seed_from_u64(seed);
    let geo = PatientGeometry::sample(params, &mut geo_rng);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1 + modality.index() as u64));
    let noise = Normal::new(0.0f32, params.noise_sigma.max(0.0)).map_err(|e| UaganError::Config(e.to_string()))?;
    let contrast = params.modality_contrast_table[modality.index()];
    let size = params.image_size;
    let n = params.slices_per_patient;

    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let z = slice_depth(k, n);
        let brain_scale = (1.0 - z * z).max(0.0).sqrt();
        let dz = (z - geo.tumor_z) / geo.tumor_depth;
        let tumor_scale = (1.0 - dz * dz).max(0.0).sqrt();
        let mut image = vec![0.0f32; size * size];
        let mut mask = vec![0u8; size * size];
        let mut brain_px = 0usize;
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                if brain_scale <= 0.0 || geo.brain.rho(px, py, brain_scale) >= 1.0 {
                    continue;
                }
                brain_px += 1;
                let i = y * size + x;
                let mut v = contrast.brain;
                if tumor_scale > 0.0 {
                    let rho = geo.tumor.rho(px, py, tumor_scale);
                    if rho < 1.0 {
                        v = contrast.tumor;
                        mask[i] = 1;
                    } else if rho < 1.0 + params.edema_width {
                        v = contrast.edema;
                        mask[i] = 1;
                    }
                }
                if params.noise_sigma > 0.0 {
                    v += noise.sample(&mut noise_rng);
                }
                // Keep brain pixels distinguishable from the zero background.
                image[i] = if v == 0.0 { f32::MIN_POSITIVE } else { v };
            }
        }
        out.push(SliceSample {
            image: Grid::new(size, size, image)?,
            mask: Grid::new(size, size, mask)?,
            modality,
            patient_id: format!("patient-{seed:016x}"),
            slice_index: k,
            brain_fraction: Some(brain_px as f32 / (size * size) as f32),
        });
    }
    Ok(out)
}

/// Z-scores a whole volume with population statistics over all voxels.
pub fn zscore_normalize(volume: &[f32]) -> Result<Vec<f32>> {
    if volume.len() < 2 {
        return Err(UaganError::Argument("z-score needs at least 2 voxels".into()));
    }
    let n = volume.len() as f64;
    let mean = volume.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = volume.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-8 {
        return Err(UaganError::DegenerateVolume(std));
    }
    Ok(volume.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect())
}

fn center_crop<T: Copy>(g: &Grid<T>, crop: usize) -> Result<Grid<T>> {
    if crop == 0 || crop > g.h || crop > g.w {
        return Err(UaganError::Shape(format!("crop {crop} exceeds {}×{} slice", g.h, g.w)));
    }
    let (oy, ox) = ((g.h - crop) / 2, (g.w - crop) / 2);
    let mut data = Vec::with_capacity(crop * crop);
    for y in 0..crop {
        data.extend_from_slice(&g.data[(oy + y) * g.w + ox..(oy + y) * g.w + ox + crop]);
    }
    Grid::new(crop, crop, data)
}

/// Pixel-center source coordinate for output index `i` when resizing `from → to`.
fn src_coord(i: usize, from: usize, to: usize) -> f32 {
    ((i as f32 + 0.5) * from as f32 / to as f32 - 0.5).clamp(0.0, (from - 1) as f32)
}

fn bilinear_at(g: &Grid<f32>, sy: f32, sx: f32) -> f32 {
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(g.h - 1), (x0 + 1).min(g.w - 1));
    let (fy, fx) = (sy - y0 as f32, sx - x0 as f32);
    let top = g.get(y0, x0) + (g.get(y0, x1) - g.get(y0, x0)) * fx;
    let bot = g.get(y1, x0) + (g.get(y1, x1) - g.get(y1, x0)) * fx;
    top + (bot - top) * fy
}

fn resize_bilinear(g: &Grid<f32>, out: usize) -> Grid<f32> {
    if g.h == out && g.w == out {
        return g.clone();
    }
    let mut data = Vec::with_capacity(out * out);
    for y in 0..out {
        let sy = src_coord(y, g.h, out);
        for x in 0..out {
            data.push(bilinear_at(g, sy, src_coord(x, g.w, out)));
        }
    }
    Grid { h: out, w: out, data }
}

fn resize_nearest<T: Copy>(g: &Grid<T>, out: usize) -> Grid<T> {
    let mut data = Vec::with_capacity(out * out);
    for y in 0..out {
        let sy = ((y as f32 + 0.5) * g.h as f32 / out as f32).floor() as usize;
        for x in 0..out {
            let sx = ((x as f32 + 0.5) * g.w as f32 / out as f32).floor() as usize;
            data.push(g.get(sy.min(g.h - 1), sx.min(g.w - 1)));
        }
    }
    Grid { h: out, w: out, data }
}

/// Center crop to `crop×crop`, then bilinear resize to `out_size×out_size`.
pub fn crop_and_resize(slice: &Grid<f32>, crop: usize, out_size: usize) -> Result<Grid<f32>> {
    if out_size == 0 {
        return Err(UaganError::Shape("output size must be ≥ 1".into()));
    }
    Ok(resize_bilinear(&center_crop(slice, crop)?, out_size))
}

/// Mask counterpart of [`crop_and_resize`] using nearest-neighbour sampling.
pub fn crop_and_resize_mask(mask: &Grid<u8>, crop: usize, out_size: usize) -> Result<Grid<u8>> {
    if out_size == 0 {
        return Err(UaganError::Shape("output size must be ≥ 1".into()));
    }
    Ok(resize_nearest(&center_crop(mask, crop)?, out_size))
}

/// Keeps slices whose brain-support fraction is at least `min_brain_fraction`.
pub fn filter_small_brain_slices(samples: Vec<SliceSample>, min_brain_fraction: f32) -> Vec<SliceSample> {
    samples.into_iter().filter(|s| s.brain_fraction() >= min_brain_fraction).collect()
}

/// One concrete draw of the augmentation transforms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub rotation_deg: Option<f32>,
    pub flip_vertical: bool,
    pub flip_horizontal: bool,
    pub scale: Option<f32>,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams =
        AugmentParams { rotation_deg: None, flip_vertical: false, flip_horizontal: false, scale: None };

    /// Each transform is selected independently with probability 0.5.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let rotation_deg = rng.gen_bool(0.5).then(|| rng.gen_range(-15.0..=15.0));
        let flip_vertical = rng.gen_bool(0.5);
        let flip_horizontal = rng.gen_bool(0.5);
        let scale = rng.gen_bool(0.5).then(|| rng.gen_range(0.9..=1.1));
        AugmentParams { rotation_deg, flip_vertical, flip_horizontal, scale }
    }
}

fn flip<T: Copy>(g: &Grid<T>, vertical: bool, horizontal: bool) -> Grid<T> {
    let mut data = Vec::with_capacity(g.data.len());
    for y in 0..g.h {
        let sy = if vertical { g.h - 1 - y } else { y };
        for x in 0..g.w {
            let sx = if horizontal { g.w - 1 - x } else { x };
            data.push(g.get(sy, sx));
        }
    }
    Grid { h: g.h, w: g.w, data }
}

/// Rotation by `deg` and isotropic zoom by `scale` about the center, by inverse mapping.
fn warp<T: Copy>(g: &Grid<T>, deg: f32, scale: f32, sample: impl Fn(&Grid<T>, f32, f32) -> T) -> Grid<T> {
    let (cy, cx) = ((g.h as f32 - 1.0) / 2.0, (g.w as f32 - 1.0) / 2.0);
    let (s, c) = deg.to_radians().sin_cos();
    let mut data = Vec::with_capacity(g.data.len());
    for y in 0..g.h {
        for x in 0..g.w {
            let (dy, dx) = (y as f32 - cy, x as f32 - cx);
            let sx = (c * dx + s * dy) / scale + cx;
            let sy = (-s * dx + c * dy) / scale + cy;
            data.push(sample(g, sy.clamp(0.0, (g.h - 1) as f32), sx.clamp(0.0, (g.w - 1) as f32)));
        }
    }
    Grid { h: g.h, w: g.w, data }
}

/// Applies `p` identically to image (bilinear) and mask (nearest neighbour).
pub fn apply_augment(sample: &SliceSample, p: &AugmentParams) -> SliceSample {
    let mut out = sample.clone();
    if p.flip_vertical || p.flip_horizontal {
        out.image = flip(&out.image, p.flip_vertical, p.flip_horizontal);
        out.mask = flip(&out.mask, p.flip_vertical, p.flip_horizontal);
    }
    if p.rotation_deg.is_some() || p.scale.is_some() {
        let (deg, scale) = (p.rotation_deg.unwrap_or(0.0), p.scale.unwrap_or(1.0));
        out.image = warp(&out.image, deg, scale, bilinear_at);
        out.mask = warp(&out.mask, deg, scale, |g, y, x| g.get(y.round() as usize, x.round() as usize));
    }
    out
}

pub fn augment(sample: &SliceSample, rng: &mut impl Rng) -> SliceSample {
    apply_augment(sample, &AugmentParams::sample(rng))
}

/// Image `[1, 1, H, W]` followed by one constant plane per label component.
pub fn expand_and_concat(image: &Grid<f32>, label: &[f32]) -> Tensor {
    let hw = image.h * image.w;
    let mut data = Vec::with_capacity(hw * (1 + label.len()));
    data.extend_from_slice(&image.data);
    for &l in label {
        data.extend(std::iter::repeat_n(l, hw));
    }
    Tensor::from_vec(Shape::new(1, 1 + label.len(), image.h, image.w), data).expect("sized by construction")
}

/// Writes the bit-exact slice format: magic, u32 LE H, u32 LE W, f32 LE image, u8 mask.
pub fn write_slice(path: &Path, image: &Grid<f32>, mask: &Grid<u8>) -> Result<()> {
    fs::write(path, encode_slice(image, mask)?).at(path)
}

pub fn encode_slice(image: &Grid<f32>, mask: &Grid<u8>) -> Result<Vec<u8>> {
    if (image.h, image.w) != (mask.h, mask.w) {
        return Err(UaganError::Shape(format!("image {}×{} and mask {}×{} differ", image.h, image.w, mask.h, mask.w)));
    }
    let mut buf = Vec::with_capacity(12 + image.data.len() * 5);
    buf.extend_from_slice(SLICE_MAGIC);
    buf.extend_from_slice(&(image.h as u32).to_le_bytes());
    buf.extend_from_slice(&(image.w as u32).to_le_bytes());
    for v in &image.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&mask.data);
    Ok(buf)
}

pub fn read_slice(path: &Path) -> Result<(Grid<f32>, Grid<u8>)> {
    let bytes = fs::read(path).at(path)?;
    decode_slice(&bytes).map_err(|e| UaganError::Config(format!("{}: {e}", path.display())))
}

pub fn decode_slice(bytes: &[u8]) -> Result<(Grid<f32>, Grid<u8>)> {
    if bytes.len() < 12 || &bytes[..4] != SLICE_MAGIC {
        return Err(UaganError::Shape("not a UAG1 slice file".into()));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let n = h * w;
    if bytes.len() != 12 + 5 * n {
        return Err(UaganError::Shape(format!("slice file of {} bytes for {h}×{w}", bytes.len())));
    }
    let image =
        bytes[12..12 + 4 * n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    let mask = bytes[12 + 4 * n..].to_vec();
    if mask.iter().any(|&m| m > 1) {
        return Err(UaganError::Argument("mask values must be 0 or 1".into()));
    }
    Ok((Grid::new(h, w, image)?, Grid::new(h, w, mask)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientEntry {
    pub patient_id: String,
    pub modality: String,
    pub slices: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub modalities: Vec<String>,
    pub split: Split,
    pub image_size: usize,
    pub patients: Vec<PatientEntry>,
}

impl DatasetManifest {
    pub fn modality_index(&self, name: &str) -> Result<usize> {
        self.modalities
            .iter()
            .position(|m| m == name)
            .ok_or_else(|| UaganError::Config(format!("unknown modality '{name}' in manifest")))
    }

    pub fn patients_per_modality(&self) -> Vec<usize> {
        self.modalities.iter().map(|m| self.patients.iter().filter(|p| &p.modality == m).count()).collect()
    }

    pub fn num_slices(&self) -> usize {
        self.patients.iter().map(|p| p.slices.len()).sum()
    }

    /// Each patient carries exactly one known modality and appears once.
    pub fn check_unpaired(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for p in &self.patients {
            self.modality_index(&p.modality)?;
            if !seen.insert(&p.patient_id) {
                return Err(UaganError::Config(format!("patient {} listed twice", p.patient_id)));
            }
        }
        Ok(())
    }
}

/// Generates `n_patients` unpaired patients, z-scores each volume and writes
/// the slice files plus `manifest.json` under `out_dir`.
pub fn build_unpaired_dataset(
    params: &PhantomParams,
    n_patients: usize,
    modalities: usize,
    seed: u64,
    split: Split,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n_patients == 0 || modalities == 0 {
        return Err(UaganError::Argument("need at least one patient and one modality".into()));
    }
    params.validate(modalities)?;
    if n_patients < modalities {
        log::warn!("{n_patients} patients cannot cover all {modalities} modalities");
    }
    let split_salt = match split {
        Split::Train => 0x7124,
        Split::Test => 0x7E57,
    };
    let mut assign_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, split_salt));
    let assignment: Vec<usize> = (0..n_patients).map(|_| assign_rng.gen_range(0..modalities)).collect();

    let volumes = exec::map_collect(n_patients, |i| -> Result<(String, usize, Vec<SliceSample>)> {
        let modality = ModalityLabel::new(assignment[i], modalities)?;
        let pid = format!("{}-{i:03}", split.name());
        let patient_seed = derive_seed(seed, split_salt ^ ((i as u64 + 1) << 16));
        let mut slices = generate_phantom_patient(params, modality, patient_seed)?;
        slices = filter_small_brain_slices(slices, DEFAULT_MIN_BRAIN_FRACTION);
        let flat: Vec<f32> = slices.iter().flat_map(|s| s.image.data.iter().copied()).collect();
        let normalized = zscore_normalize(&flat)?;
        let hw = params.image_size * params.image_size;
        for (k, (s, chunk)) in slices.iter_mut().zip(normalized.chunks(hw)).enumerate() {
            s.image.data.copy_from_slice(chunk);
            s.patient_id = pid.clone();
            s.slice_index = k;
        }
        Ok((pid, assignment[i], slices))
    });

    fs::create_dir_all(out_dir).at(out_dir)?;
    let mut patients = Vec::with_capacity(n_patients);
    for v in volumes {
        let (pid, m, slices) = v?;
        let dir = out_dir.join(&pid);
        fs::create_dir_all(&dir).at(&dir)?;
        let mut names = Vec::with_capacity(slices.len());
        for s in &slices {
            let rel = format!("{pid}/s{:03}.uag", s.slice_index);
            write_slice(&out_dir.join(&rel), &s.image, &s.mask)?;
            names.push(rel);
        }
        patients.push(PatientEntry { patient_id: pid, modality: modality_name(m), slices: names });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION.into(),
        modalities: (0..modalities).map(modality_name).collect(),
        split,
        image_size: params.image_size,
        patients,
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = fs::File::create(path).at(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| UaganError::Json { path: path.into(), source })?;
    w.write_all(b"\n").at(path)?;
    w.flush().at(path)
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).at(path)?;
    serde_json::from_str(&text).map_err(|source| UaganError::Json { path: path.into(), source })
}

/// A loaded dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub samples: Vec<SliceSample>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest: DatasetManifest = read_json(&root.join(MANIFEST_FILE))?;
        manifest.check_unpaired()?;
        let m = manifest.modalities.len();
        let mut samples = Vec::with_capacity(manifest.num_slices());
        for p in &manifest.patients {
            let modality = ModalityLabel::new(manifest.modality_index(&p.modality)?, m)?;
            for (k, rel) in p.slices.iter().enumerate() {
                let (image, mask) = read_slice(&root.join(rel))?;
                if image.h != manifest.image_size || image.w != manifest.image_size {
                    return Err(UaganError::Config(format!(
                        "{rel}: {}×{} slice in a {} dataset",
                        image.h, image.w, manifest.image_size
                    )));
                }
                samples.push(SliceSample {
                    image,
                    mask,
                    modality,
                    patient_id: p.patient_id.clone(),
                    slice_index: k,
                    brain_fraction: None,
                });
            }
        }
        Ok(Dataset { root: root.to_path_buf(), manifest, samples })
    }

    pub fn modalities(&self) -> usize {
        self.manifest.modalities.len()
    }
}
