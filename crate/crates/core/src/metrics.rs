//! Volume assembly, overlap and surface-distance metrics, reports and heatmaps.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use uagan_autograd::Tensor;

use crate::error::{IoContext, Result, UaganError};
use crate::phantom::{Grid, SliceSample};

/// Voxel size in millimetres along x (width), y (height) and z (slice).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub sx: f64,
    pub sy: f64,
    pub sz: f64,
}

impl Default for Spacing {
    fn default() -> Self {
        Spacing { sx: 1.0, sy: 1.0, sz: 1.0 }
    }
}

impl Spacing {
    pub fn scaled(&self, k: f64) -> Self {
        Spacing { sx: self.sx * k, sy: self.sy * k, sz: self.sz * k }
    }
}

/// Binary volume indexed `[z][y][x]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask3 {
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Mask3 {
    pub fn new(d: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != d * h * w {
            return Err(UaganError::Shape(format!("{} voxels for a {d}×{h}×{w} volume", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(UaganError::Argument("mask values must be 0 or 1".into()));
        }
        Ok(Mask3 { d, h, w, data })
    }

    pub fn zeros(d: usize, h: usize, w: usize) -> Self {
        Mask3 { d, h, w, data: vec![0; d * h * w] }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d, self.h, self.w)
    }

    pub fn idx(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.h + y) * self.w + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[self.idx(z, y, x)]
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, v: u8) {
        let i = self.idx(z, y, x);
        self.data[i] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn from_slices(slices: &[&Grid<u8>]) -> Result<Self> {
        let first = slices.first().ok_or_else(|| UaganError::Assembly("no slices".into()))?;
        let (h, w) = (first.h, first.w);
        let mut data = Vec::with_capacity(slices.len() * h * w);
        for s in slices {
            if (s.h, s.w) != (h, w) {
                return Err(UaganError::Shape(format!("slice {}×{} in a {h}×{w} volume", s.h, s.w)));
            }
            data.extend_from_slice(&s.data);
        }
        Mask3::new(slices.len(), h, w, data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumePrediction {
    pub patient_id: String,
    pub modality: String,
    pub pred: Mask3,
    pub gt: Mask3,
    pub spacing: Spacing,
}

/// Stacks per-slice predictions and annotations of one patient in slice order.
pub fn assemble_volume(slices: &[(&SliceSample, &Grid<u8>)]) -> Result<VolumePrediction> {
    let (first, _) = slices.first().ok_or_else(|| UaganError::Assembly("no slices to assemble".into()))?;
    if let Some((s, _)) = slices.iter().find(|(s, _)| s.patient_id != first.patient_id) {
        return Err(UaganError::Assembly(format!(
            "slices of patients {} and {} mixed",
            first.patient_id, s.patient_id
        )));
    }
    let mut ordered: Vec<_> = slices.to_vec();
    ordered.sort_by_key(|(s, _)| s.slice_index);
    let start = ordered[0].0.slice_index;
    for (k, pair) in ordered.windows(2).enumerate() {
        let (a, b) = (pair[0].0.slice_index, pair[1].0.slice_index);
        if b == a {
            return Err(UaganError::Assembly(format!("patient {}: slice {a} given twice", first.patient_id)));
        }
        if b != a + 1 {
            return Err(UaganError::Assembly(format!(
                "patient {}: slice {} missing (after position {k})",
                first.patient_id,
                a + 1
            )));
        }
    }
    debug_assert_eq!(ordered.last().map(|p| p.0.slice_index), Some(start + ordered.len() - 1));
    let pred = Mask3::from_slices(&ordered.iter().map(|(_, p)| *p).collect::<Vec<_>>())?;
    let gt = Mask3::from_slices(&ordered.iter().map(|(s, _)| &s.mask).collect::<Vec<_>>())?;
    if pred.dims() != gt.dims() {
        return Err(UaganError::Shape("prediction and annotation sizes differ".into()));
    }
    Ok(VolumePrediction {
        patient_id: first.patient_id.clone(),
        modality: first.modality.name(),
        pred,
        gt,
        spacing: Spacing::default(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion_counts(pred: &Mask3, gt: &Mask3) -> Result<Counts> {
    if pred.dims() != gt.dims() {
        return Err(UaganError::Shape(format!("pred {:?} vs gt {:?}", pred.dims(), gt.dims())));
    }
    let mut c = Counts::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

/// `2TP / (2TP + FP + FN)`; 1 when both masks are empty.
pub fn dice(c: &Counts) -> f64 {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, 1.0)
}

/// `TP / (TP + FP)`; with an empty prediction, 1 if the annotation is empty too, else 0.
pub fn precision(c: &Counts) -> f64 {
    ratio(c.tp, c.tp + c.fp, if c.fn_ == 0 { 1.0 } else { 0.0 })
}

/// `TP / (TP + FN)`; 1 when the annotation is empty.
pub fn sensitivity(c: &Counts) -> f64 {
    ratio(c.tp, c.tp + c.fn_, 1.0)
}

/// `TN / (TN + FP)`; 1 when there is no background.
pub fn specificity(c: &Counts) -> f64 {
    ratio(c.tn, c.tn + c.fp, 1.0)
}

/// Foreground voxels with a face neighbour that is background or outside the volume.
pub fn surface_voxels(m: &Mask3) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for z in 0..m.d {
        for y in 0..m.h {
            for x in 0..m.w {
                if m.get(z, y, x) == 0 {
                    continue;
                }
                let border = z == 0 || y == 0 || x == 0 || z + 1 == m.d || y + 1 == m.h || x + 1 == m.w;
                let open = border
                    || m.get(z - 1, y, x) == 0
                    || m.get(z + 1, y, x) == 0
                    || m.get(z, y - 1, x) == 0
                    || m.get(z, y + 1, x) == 0
                    || m.get(z, y, x - 1) == 0
                    || m.get(z, y, x + 1) == 0;
                if open {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

fn check_assd_inputs(pred: &Mask3, gt: &Mask3) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(UaganError::Shape(format!("pred {:?} vs gt {:?}", pred.dims(), gt.dims())));
    }
    if pred.is_empty() || gt.is_empty() {
        return Err(UaganError::UndefinedMetric("ASSD needs nonempty prediction and annotation".into()));
    }
    Ok(())
}

fn symmetric_mean(a_to_b: &[f64], b_to_a: &[f64]) -> f64 {
    let total: f64 = a_to_b.iter().chain(b_to_a).sum();
    total / (a_to_b.len() + b_to_a.len()) as f64
}

/// Reference ASSD by comparing every pair of surface voxels.
pub fn assd_brute_force(pred: &Mask3, gt: &Mask3, spacing: Spacing) -> Result<f64> {
    check_assd_inputs(pred, gt)?;
    let (sa, sb) = (surface_voxels(pred), surface_voxels(gt));
    let dist = |p: &[usize; 3], q: &[usize; 3]| {
        let dz = (p[0] as f64 - q[0] as f64) * spacing.sz;
        let dy = (p[1] as f64 - q[1] as f64) * spacing.sy;
        let dx = (p[2] as f64 - q[2] as f64) * spacing.sx;
        (dz * dz + dy * dy + dx * dx).sqrt()
    };
    let nearest = |from: &[[usize; 3]], to: &[[usize; 3]]| -> Vec<f64> {
        from.iter().map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min)).collect()
    };
    Ok(symmetric_mean(&nearest(&sa, &sb), &nearest(&sb, &sa)))
}

/// Exact 1D squared-distance transform (lower envelope of parabolas) over
/// samples spaced `s` apart. Infinite entries contribute no parabola.
fn edt_1d(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        let xq = q as f64 * s;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let xp = p as f64 * s;
                    let cross = ((fq + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
                    if cross <= *z.last().expect("paired with v") {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(cross);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let xq = q as f64 * s;
        while k + 1 < v.len() && z[k + 1] < xq {
            k += 1;
        }
        let xp = v[k] as f64 * s;
        *o = (xq - xp) * (xq - xp) + f[v[k]];
    }
}

/// Squared distance from every voxel to the nearest of `seeds`, separably per axis.
fn squared_distance_map(dims: (usize, usize, usize), seeds: &[[usize; 3]], spacing: Spacing) -> Vec<f64> {
    let (d, h, w) = dims;
    let mut f = vec![f64::INFINITY; d * h * w];
    for s in seeds {
        f[(s[0] * h + s[1]) * w + s[2]] = 0.0;
    }
    let (mut v, mut zbuf) = (Vec::new(), Vec::new());
    let mut pass = |len: usize, stride: usize, starts: Vec<usize>, s: f64, f: &mut Vec<f64>| {
        let (mut line, mut out) = (vec![0.0; len], vec![0.0; len]);
        for start in starts {
            for i in 0..len {
                line[i] = f[start + i * stride];
            }
            edt_1d(&line, s, &mut out, &mut v, &mut zbuf);
            for i in 0..len {
                f[start + i * stride] = out[i];
            }
        }
    };
    let x_starts = (0..d * h).map(|r| r * w).collect();
    pass(w, 1, x_starts, spacing.sx, &mut f);
    let y_starts = (0..d).flat_map(|z| (0..w).map(move |x| z * h * w + x)).collect();
    pass(h, w, y_starts, spacing.sy, &mut f);
    let z_starts = (0..h * w).collect();
    pass(d, h * w, z_starts, spacing.sz, &mut f);
    f
}

/// ASSD via exact Euclidean distance transforms of each surface.
pub fn assd(pred: &Mask3, gt: &Mask3, spacing: Spacing) -> Result<f64> {
    check_assd_inputs(pred, gt)?;
    let (sa, sb) = (surface_voxels(pred), surface_voxels(gt));
    let dims = pred.dims();
    let (h, w) = (dims.1, dims.2);
    let lookup = |map: &[f64], pts: &[[usize; 3]]| -> Vec<f64> {
        pts.iter().map(|p| map[(p[0] * h + p[1]) * w + p[2]].sqrt()).collect()
    };
    let to_b = squared_distance_map(dims, &sb, spacing);
    let to_a = squared_distance_map(dims, &sa, spacing);
    Ok(symmetric_mean(&lookup(&to_b, &sa), &lookup(&to_a, &sb)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientMetrics {
    pub patient_id: String,
    pub modality: String,
    pub dice: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// Missing when either mask is empty.
    pub assd: Option<f64>,
}

pub const METRIC_NAMES: [&str; 5] = ["dice", "precision", "sensitivity", "specificity", "assd"];

impl PatientMetrics {
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "dice" => Some(self.dice),
            "precision" => Some(self.precision),
            "sensitivity" => Some(self.sensitivity),
            "specificity" => Some(self.specificity),
            "assd" => self.assd,
            _ => None,
        }
    }
}

pub fn patient_metrics(v: &VolumePrediction) -> Result<PatientMetrics> {
    let c = confusion_counts(&v.pred, &v.gt)?;
    let assd = match assd(&v.pred, &v.gt, v.spacing) {
        Ok(d) => Some(d),
        Err(UaganError::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(PatientMetrics {
        patient_id: v.patient_id.clone(),
        modality: v.modality.clone(),
        dice: dice(&c),
        precision: precision(&c),
        sensitivity: sensitivity(&c),
        specificity: specificity(&c),
        assd,
    })
}

/// Mean and sample standard deviation (0 for a single value) of the defined values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub excluded: usize,
}

impl Aggregate {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let mut defined = Vec::new();
        let mut excluded = 0;
        for v in values {
            match v {
                Some(x) => defined.push(x),
                None => excluded += 1,
            }
        }
        let n = defined.len();
        if n == 0 {
            return Aggregate { mean: f64::NAN, std: f64::NAN, n, excluded };
        }
        let mean = defined.iter().sum::<f64>() / n as f64;
        let std =
            if n > 1 { (defined.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Aggregate { mean, std, n, excluded }
    }
}

/// Aggregates of all five metrics for one group of patients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub patients: usize,
    pub metrics: BTreeMap<String, Aggregate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub seed: u64,
    pub rows: Vec<PatientMetrics>,
}

pub const OVERALL: &str = "overall";

impl MetricsReport {
    pub fn modalities(&self) -> Vec<String> {
        let mut m: Vec<String> = self.rows.iter().map(|r| r.modality.clone()).collect();
        m.sort();
        m.dedup();
        m
    }

    /// Summary over one modality, or over every patient for `None`.
    pub fn summarize(&self, modality: Option<&str>) -> GroupSummary {
        let rows: Vec<&PatientMetrics> =
            self.rows.iter().filter(|r| modality.is_none_or(|m| r.modality == m)).collect();
        let metrics = METRIC_NAMES
            .iter()
            .map(|&name| (name.to_string(), Aggregate::of(rows.iter().map(|r| r.metric(name)))))
            .collect();
        GroupSummary { group: modality.unwrap_or(OVERALL).to_string(), patients: rows.len(), metrics }
    }

    pub fn summaries(&self) -> Vec<GroupSummary> {
        let mut out: Vec<GroupSummary> = self.modalities().iter().map(|m| self.summarize(Some(m))).collect();
        out.push(self.summarize(None));
        out
    }

    pub fn mean_dice(&self) -> f64 {
        self.summarize(None).metrics["dice"].mean
    }

    /// Per-patient CSV with one row per patient and the five metrics.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "variant",
            "seed",
            "patient_id",
            "modality",
            "dice",
            "precision",
            "sensitivity",
            "specificity",
            "assd",
        ])?;
        for r in &self.rows {
            w.write_record([
                self.variant.clone(),
                self.seed.to_string(),
                r.patient_id.clone(),
                r.modality.clone(),
                fmt_f64(r.dice),
                fmt_f64(r.precision),
                fmt_f64(r.sensitivity),
                fmt_f64(r.specificity),
                r.assd.map(fmt_f64).unwrap_or_default(),
            ])?;
        }
        w.flush().at(path)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut variant = None;
        let mut seed = 0;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or_default().to_string();
            let num = |i: usize| -> Result<f64> {
                field(i)
                    .parse()
                    .map_err(|_| UaganError::Config(format!("{}: bad number '{}'", path.display(), field(i))))
            };
            variant.get_or_insert_with(|| field(0));
            seed = field(1).parse().map_err(|_| UaganError::Config(format!("{}: bad seed", path.display())))?;
            rows.push(PatientMetrics {
                patient_id: field(2),
                modality: field(3),
                dice: num(4)?,
                precision: num(5)?,
                sensitivity: num(6)?,
                specificity: num(7)?,
                assd: if field(8).is_empty() { None } else { Some(num(8)?) },
            });
        }
        Ok(MetricsReport { variant: variant.unwrap_or_default(), seed, rows })
    }

    /// Per-patient Dice only, for box plots.
    pub fn write_dice_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["variant", "modality", "patient_id", "dice"])?;
        for r in &self.rows {
            w.write_record([&self.variant, &r.modality, &r.patient_id, &fmt_f64(r.dice)])?;
        }
        w.flush().at(path)
    }

    /// JSON summary; aggregates are checked against the rows before writing.
    pub fn write_summary(&self, path: &Path) -> Result<()> {
        let summaries = self.summaries();
        for s in &summaries {
            let modality = (s.group != OVERALL).then_some(s.group.as_str());
            let rows: Vec<&PatientMetrics> =
                self.rows.iter().filter(|r| modality.is_none_or(|m| r.modality == m)).collect();
            let dice_mean = rows.iter().map(|r| r.dice).sum::<f64>() / rows.len().max(1) as f64;
            if (dice_mean - s.metrics["dice"].mean).abs() > 1e-9 {
                return Err(UaganError::Assembly(format!("aggregate for {} drifted from its rows", s.group)));
            }
        }
        #[derive(Serialize)]
        struct Summary<'a> {
            variant: &'a str,
            seed: u64,
            groups: Vec<GroupSummary>,
        }
        crate::phantom::write_json(path, &Summary { variant: &self.variant, seed: self.seed, groups: summaries })
    }
}

/// Column headers of the comparison layout.
pub const TABLE_COLUMNS: [&str; 7] =
    ["Modality", "Method", "Dice(%)", "Precision(%)", "Sens(%)", "Spec(%)", "ASSD(mm)"];

/// `mean±std` with ratios in percent and ASSD in millimetres.
pub fn format_cell(name: &str, a: &Aggregate) -> String {
    let k = if name == "assd" { 1.0 } else { 100.0 };
    format!("{:.2}±{:.2}", a.mean * k, a.std * k)
}

impl MetricsReport {
    /// Plain-text table, one block per modality plus the overall row; std is across patients.
    pub fn summary_text(&self) -> String {
        let mut lines = vec![TABLE_COLUMNS.join("\t")];
        for s in self.summaries() {
            let mut cells = vec![s.group.clone(), self.variant.clone()];
            cells.extend(METRIC_NAMES.iter().map(|&n| format_cell(n, &s.metrics[n])));
            lines.push(cells.join("\t"));
        }
        lines.push(String::new());
        lines.join("\n")
    }

    pub fn write_summary_text(&self, path: &Path) -> Result<()> {
        fs::write(path, self.summary_text()).at(path)
    }
}

fn fmt_f64(v: f64) -> String {
    // Round-trippable shortest representation.
    format!("{v:?}")
}

/// One line of the variant × modality table: per-seed group means, then mean ± std across seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TableRow {
    pub modality: String,
    pub method: String,
    pub seeds: usize,
    pub metrics: BTreeMap<String, Aggregate>,
}

/// Builds the comparison table from per-run reports. For each variant and
/// modality the patient mean is taken per seed, then mean and sample std across seeds.
pub fn comparison_table(reports: &[MetricsReport]) -> Vec<TableRow> {
    let mut modalities: Vec<String> = reports.iter().flat_map(|r| r.modalities()).collect();
    modalities.sort();
    modalities.dedup();
    let mut variants: Vec<&str> = Vec::new();
    for r in reports {
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
    }
    let mut rows = Vec::new();
    for m in &modalities {
        for &v in &variants {
            let runs: Vec<&MetricsReport> = reports.iter().filter(|r| r.variant == v).collect();
            let metrics = METRIC_NAMES
                .iter()
                .map(|&name| {
                    let per_seed = runs.iter().map(|r| {
                        let a = r.summarize(Some(m)).metrics[name];
                        (a.n > 0).then_some(a.mean)
                    });
                    (name.to_string(), Aggregate::of(per_seed))
                })
                .collect();
            rows.push(TableRow { modality: m.clone(), method: v.to_string(), seeds: runs.len(), metrics });
        }
    }
    rows
}

/// Writes the table with formatted `mean±std` cells (ratios in percent, ASSD in mm)
/// followed by the raw numeric columns.
pub fn write_comparison_table(rows: &[TableRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = TABLE_COLUMNS.map(String::from).to_vec();
    header.push("seeds".into());
    for name in METRIC_NAMES {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_std"));
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.modality.clone(), r.method.clone()];
        rec.extend(METRIC_NAMES.iter().map(|&n| format_cell(n, &r.metrics[n])));
        rec.push(r.seeds.to_string());
        for name in METRIC_NAMES {
            let a = r.metrics[name];
            rec.push(fmt_f64(a.mean));
            rec.push(fmt_f64(a.std));
        }
        w.write_record(&rec)?;
    }
    w.flush().at(path)
}

/// Channel sum of a `[1, C, h, w]` feature map, min-max normalized to [0, 1].
/// A constant sum maps to all zeros.
pub fn export_feature_heatmap(feature: &Tensor) -> Result<Grid<f32>> {
    let [n, c, h, w] = feature.shape().0;
    if n != 1 || c == 0 {
        return Err(UaganError::Shape(format!("heatmap needs a single [1, C, h, w] map, got {}", feature.shape())));
    }
    let hw = h * w;
    let mut sum = vec![0.0f64; hw];
    for plane in feature.data().chunks(hw) {
        for (s, &v) in sum.iter_mut().zip(plane) {
            *s += v as f64;
        }
    }
    let (lo, hi) = sum.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let data = if hi > lo { sum.iter().map(|&v| ((v - lo) / (hi - lo)) as f32).collect() } else { vec![0.0; hw] };
    Grid::new(h, w, data)
}

/// Writes a binary 8-bit PGM; values are clamped to [0, 1].
pub fn write_pgm(path: &Path, img: &Grid<f32>) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n255\n", img.w, img.h).into_bytes();
    buf.extend(img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, buf).at(path)
}

/// Grayscale overlay: image rescaled to [0, 0.8] with the mask boundary drawn at full intensity.
pub fn segmentation_overlay(image: &Grid<f32>, mask: &Grid<u8>) -> Result<Grid<f32>> {
    if (image.h, image.w) != (mask.h, mask.w) {
        return Err(UaganError::Shape("overlay image and mask sizes differ".into()));
    }
    let (lo, hi) = image.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut data: Vec<f32> = image.data.iter().map(|&v| 0.8 * (v - lo) / span).collect();
    let vol = Mask3::new(1, mask.h, mask.w, mask.data.clone())?;
    for [_, y, x] in surface_voxels(&vol) {
        data[y * mask.w + x] = 1.0;
    }
    Grid::new(image.h, image.w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::ModalityLabel;

    fn points(d: usize, h: usize, w: usize, pts: &[[usize; 3]]) -> Mask3 {
        let mut m = Mask3::zeros(d, h, w);
        for p in pts {
            m.set(p[0], p[1], p[2], 1);
        }
        m
    }

    #[test]
    fn confusion_examples() {
        let gt = points(1, 8, 8, &[[0, 0, 2], [0, 0, 3], [0, 0, 4], [0, 0, 5]]);
        assert_eq!(confusion_counts(&gt, &gt).unwrap(), Counts { tp: 4, fp: 0, fn_: 0, tn: 60 });
        let empty = Mask3::zeros(1, 8, 8);
        assert_eq!(confusion_counts(&empty, &gt).unwrap(), Counts { tp: 0, fp: 0, fn_: 4, tn: 60 });
        let pred = points(1, 8, 8, &[[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 0, 3]]);
        let c = confusion_counts(&pred, &gt).unwrap();
        assert_eq!(c, Counts { tp: 2, fp: 2, fn_: 2, tn: 58 });
        assert_eq!((dice(&c), precision(&c), sensitivity(&c)), (0.5, 0.5, 0.5));
        assert_eq!(specificity(&c), 58.0 / 60.0);
        assert!(confusion_counts(&Mask3::zeros(1, 8, 7), &gt).is_err());
    }

    #[test]
    fn empty_conventions() {
        let e = confusion_counts(&Mask3::zeros(1, 2, 2), &Mask3::zeros(1, 2, 2)).unwrap();
        assert_eq!((dice(&e), precision(&e), sensitivity(&e), specificity(&e)), (1.0, 1.0, 1.0, 1.0));
        let miss = Counts { tp: 0, fp: 0, fn_: 3, tn: 1 };
        assert_eq!((dice(&miss), precision(&miss), sensitivity(&miss)), (0.0, 0.0, 0.0));
    }

    #[test]
    fn assd_examples() {
        let a = points(4, 1, 1, &[[0, 0, 0]]);
        let b = points(4, 1, 1, &[[3, 0, 0]]);
        assert_eq!(assd_brute_force(&a, &b, Spacing::default()).unwrap(), 3.0);
        assert_eq!(assd(&a, &b, Spacing::default()).unwrap(), 3.0);
        let sq1 = points(3, 2, 2, &[[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1]]);
        let sq2 = points(3, 2, 2, &[[2, 0, 0], [2, 0, 1], [2, 1, 0], [2, 1, 1]]);
        assert_eq!(assd_brute_force(&sq1, &sq2, Spacing::default()).unwrap(), 2.0);
        assert_eq!(assd(&sq1, &sq2, Spacing::default()).unwrap(), 2.0);
        assert_eq!(assd(&sq1, &sq1, Spacing::default()).unwrap(), 0.0);
        assert!(matches!(assd(&Mask3::zeros(3, 2, 2), &sq1, Spacing::default()), Err(UaganError::UndefinedMetric(_))));
    }

    fn sample(pid: &str, k: usize, mask: Vec<u8>) -> SliceSample {
        SliceSample {
            image: Grid::filled(2, 2, 0.0),
            mask: Grid::new(2, 2, mask).unwrap(),
            modality: ModalityLabel::new(1, 3).unwrap(),
            patient_id: pid.into(),
            slice_index: k,
            brain_fraction: None,
        }
    }

    #[test]
    fn assembly_orders_and_detects_gaps() {
        let s: Vec<SliceSample> = (0..4).map(|k| sample("p", k, vec![k as u8 % 2, 0, 0, 1])).collect();
        let preds: Vec<Grid<u8>> = (0..4).map(|k| Grid::filled(2, 2, (k % 2) as u8)).collect();
        let fwd: Vec<_> = s.iter().zip(&preds).collect();
        let mut rev = fwd.clone();
        rev.reverse();
        let a = assemble_volume(&fwd).unwrap();
        assert_eq!(a.pred.dims(), (4, 2, 2));
        assert_eq!(a, assemble_volume(&rev).unwrap());
        assert_eq!(a.modality, "B");
        let gap: Vec<_> = fwd.iter().copied().filter(|(s, _)| s.slice_index != 2).collect();
        assert!(matches!(assemble_volume(&gap), Err(UaganError::Assembly(_))));
    }

    #[test]
    fn heatmap_examples() {
        let t = Tensor::from_vec(uagan_autograd::Shape::new(1, 2, 1, 2), vec![0.0, 2.0, 2.0, 4.0]).unwrap();
        assert_eq!(export_feature_heatmap(&t).unwrap().data, vec![0.0, 1.0]);
        let t = Tensor::from_vec(uagan_autograd::Shape::new(1, 2, 1, 2), vec![1.0, -3.0, -1.0, 3.0]).unwrap();
        assert_eq!(export_feature_heatmap(&t).unwrap().data, vec![0.0, 0.0]);
        let t = Tensor::from_vec(uagan_autograd::Shape::new(1, 1, 1, 3), vec![0.0, 0.25, 1.0]).unwrap();
        assert_eq!(export_feature_heatmap(&t).unwrap().data, vec![0.0, 0.25, 1.0]);
    }

    #[test]
    fn aggregate_sample_std() {
        let a = Aggregate::of([Some(1.0), Some(3.0), None]);
        assert_eq!((a.mean, a.std, a.n, a.excluded), (2.0, 2f64.sqrt(), 2, 1));
    }
}
