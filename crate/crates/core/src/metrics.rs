//! Overlap and surface-distance metrics on integer label maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `height × width` class ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Data(format!(
                "{} labels for a {height}x{width} map",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn mask(&self, class: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == class).collect()
    }

    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v as usize >= num_classes) {
            Some(v) => Err(Error::Data(format!(
                "class id {v} out of range for {num_classes} classes"
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_maps(pred: &LabelMap, gt: &LabelMap, class: u8) -> Self {
        let mut c = Self::default();
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            match (p == class, g == class) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        c
    }

    /// `2TP / (2TP + FP + FN)`; 1 when both sets are empty.
    pub fn dsc(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / d as f64
        }
    }

    /// `TP / (TP + FP + FN)`; 1 when both sets are empty.
    pub fn iou(&self) -> f64 {
        let d = self.tp + self.fp + self.fn_;
        if d == 0 {
            1.0
        } else {
            self.tp as f64 / d as f64
        }
    }

    /// `TP / (TP + FN)`; 1 when the ground truth is empty.
    pub fn recall(&self) -> f64 {
        let d = self.tp + self.fn_;
        if d == 0 {
            1.0
        } else {
            self.tp as f64 / d as f64
        }
    }
}

pub fn dsc(pred: &LabelMap, gt: &LabelMap, class: u8) -> f64 {
    ConfusionCounts::from_maps(pred, gt, class).dsc()
}

/// Which pixels of a mask take part in surface distances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceMode {
    /// Foreground pixels with a 4-neighbour outside the mask or on the image edge.
    #[default]
    Boundary,
    /// Every foreground pixel.
    FullMask,
}

/// Surface pixels of `mask` (`h × w`, row-major) as a flag raster.
pub fn surface(mask: &[bool], h: usize, w: usize, mode: SurfaceMode) -> Vec<bool> {
    if mode == SurfaceMode::FullMask {
        return mask.to_vec();
    }
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
            out[y * w + x] = edge
                || !mask[(y - 1) * w + x]
                || !mask[(y + 1) * w + x]
                || !mask[y * w + x - 1]
                || !mask[y * w + x + 1];
        }
    }
    out
}

/// Exact squared Euclidean distance transform of a 1-D sampled function
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            let p = v[k];
            let s =
                ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    // only reachable when the current seed sample is infinite
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Squared distance from every pixel to the nearest set pixel; infinite when
/// the set is empty.
pub fn squared_distance_transform(set: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut g: Vec<f64> = set
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let m = h.max(w);
    let (mut f, mut out, mut v, mut z) = (vec![0.0; m], vec![0.0; m], vec![0; m], vec![0.0; m + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = g[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            g[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&g[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        g[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    g
}

/// Linear-interpolation percentile (`p` in `[0, 1]`) of an ascending slice.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let rank = p * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

fn directed(from: &[bool], to_sq: &[f64]) -> Vec<f64> {
    let mut d: Vec<f64> = from
        .iter()
        .zip(to_sq)
        .filter(|(&f, _)| f)
        .map(|(_, &s)| s.sqrt())
        .collect();
    d.sort_by(f64::total_cmp);
    d
}

/// 95th-percentile symmetric Hausdorff distance between the surfaces of
/// class `class` in `pred` and `gt`, in pixels. Both empty gives 0; exactly
/// one empty gives the image diagonal.
pub fn hd95(pred: &LabelMap, gt: &LabelMap, class: u8, mode: SurfaceMode) -> f64 {
    let (h, w) = (gt.height, gt.width);
    let a = surface(&pred.mask(class), h, w, mode);
    let b = surface(&gt.mask(class), h, w, mode);
    let (ea, eb) = (!a.contains(&true), !b.contains(&true));
    match (ea, eb) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return ((h * h + w * w) as f64).sqrt(),
        _ => {}
    }
    let da = squared_distance_transform(&a, h, w);
    let db = squared_distance_transform(&b, h, w);
    let ab = percentile_sorted(&directed(&a, &db), 0.95);
    let ba = percentile_sorted(&directed(&b, &da), 0.95);
    ab.max(ba)
}

/// Metrics of one class on one case.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: u8,
    /// Class appears in the prediction or the ground truth.
    pub present: bool,
    pub dsc: f64,
    pub hd95: f64,
    pub recall: f64,
    pub iou: f64,
}

pub fn class_metrics(pred: &LabelMap, gt: &LabelMap, class: u8, mode: SurfaceMode) -> ClassMetrics {
    let c = ConfusionCounts::from_maps(pred, gt, class);
    ClassMetrics {
        class,
        present: c.tp + c.fp + c.fn_ > 0,
        dsc: c.dsc(),
        hd95: hd95(pred, gt, class, mode),
        recall: c.recall(),
        iou: c.iou(),
    }
}

/// Foreground-class metrics of one case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case: usize,
    pub classes: Vec<ClassMetrics>,
}

pub fn case_metrics(
    case: usize,
    pred: &LabelMap,
    gt: &LabelMap,
    num_classes: usize,
    mode: SurfaceMode,
) -> Result<CaseMetrics> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::Data(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    pred.check_classes(num_classes)?;
    gt.check_classes(num_classes)?;
    let classes = (1..num_classes as u8)
        .map(|c| class_metrics(pred, gt, c, mode))
        .collect();
    Ok(CaseMetrics { case, classes })
}

/// One report row: a foreground class, or the mean over them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub dsc: f64,
    pub hd95: f64,
    pub recall: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cases: Vec<CaseMetrics>,
    /// One row per foreground class followed by the aggregate `mean` row.
    pub rows: Vec<ReportRow>,
}

impl MetricReport {
    /// Per class, the mean over cases where the class is present in either
    /// map; a class that never appears scores as a perfect match.
    pub fn aggregate(cases: Vec<CaseMetrics>, num_classes: usize) -> Self {
        let mut rows: Vec<ReportRow> = (1..num_classes)
            .map(|c| {
                let seen: Vec<&ClassMetrics> = cases
                    .iter()
                    .flat_map(|k| &k.classes)
                    .filter(|m| m.class as usize == c && m.present)
                    .collect();
                let mean = |f: fn(&ClassMetrics) -> f64, empty: f64| {
                    if seen.is_empty() {
                        empty
                    } else {
                        seen.iter().map(|m| f(m)).sum::<f64>() / seen.len() as f64
                    }
                };
                ReportRow {
                    name: format!("class{c}"),
                    dsc: mean(|m| m.dsc, 1.0),
                    hd95: mean(|m| m.hd95, 0.0),
                    recall: mean(|m| m.recall, 1.0),
                    iou: mean(|m| m.iou, 1.0),
                }
            })
            .collect();
        let k = rows.len() as f64;
        let avg = |f: fn(&ReportRow) -> f64| rows.iter().map(f).sum::<f64>() / k;
        let mean = ReportRow {
            name: "mean".into(),
            dsc: avg(|r| r.dsc),
            hd95: avg(|r| r.hd95),
            recall: avg(|r| r.recall),
            iou: avg(|r| r.iou),
        };
        rows.push(mean);
        Self { cases, rows }
    }

    pub fn mean(&self) -> &ReportRow {
        self.rows.last().expect("report has an aggregate row")
    }

    /// Mean foreground DSC in `[0, 1]`.
    pub fn mean_dsc(&self) -> f64 {
        self.mean().dsc
    }

    /// Fixed-width table: DSC, Recall and IoU in percent, HD95 in pixels.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<8} {:>8} {:>8} {:>8} {:>8}\n",
            "class", "DSC%", "HD95", "Recall%", "IoU%"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<8} {:>8.2} {:>8.3} {:>8.2} {:>8.2}\n",
                r.name,
                100.0 * r.dsc,
                r.hd95,
                100.0 * r.recall,
                100.0 * r.iou
            ));
        }
        s
    }

    /// One JSON record per case, then one per row.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for c in &self.cases {
            s.push_str(&serde_json::to_string(c)?);
            s.push('\n');
        }
        for r in &self.rows {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }
}
