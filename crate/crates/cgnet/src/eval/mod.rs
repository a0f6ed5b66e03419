//! Confusion-matrix accumulation and segmentation metrics: per-class IoU,
//! mean IoU, category mean IoU, pixel accuracy, plus whole-manifest
//! evaluation of a trained network.

use crate::data::{LabelMap, Manifest, Sample, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::tensor::Tensor;

/// K x K matrix of 64-bit counts; entry `[truth][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            k: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Count every non-ignored pixel of `pred` against `gt`.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.h, pred.w) != (gt.h, gt.w) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.h, pred.w, gt.h, gt.w
            )));
        }
        for (&p, &t) in pred.data.iter().zip(&gt.data) {
            if t == IGNORE_INDEX {
                continue;
            }
            if t as usize >= self.k {
                return Err(Error::InvalidArg(format!(
                    "ground-truth label {t} out of range for {} classes",
                    self.k
                )));
            }
            if p as usize >= self.k {
                return Err(Error::InvalidArg(format!(
                    "prediction {p} out of range for {} classes",
                    self.k
                )));
            }
            self.counts[t as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.k, other.k);
        for (a, &b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Collapse classes into categories by summing rows and columns.
    pub fn collapse(&self, class_to_category: &[usize]) -> Result<ConfusionMatrix> {
        if class_to_category.len() != self.k {
            return Err(Error::InvalidArg(format!(
                "category map covers {} of {} classes",
                class_to_category.len(),
                self.k
            )));
        }
        let cats = class_to_category.iter().max().map(|&m| m + 1).unwrap_or(0);
        let mut out = ConfusionMatrix::new(cats);
        for t in 0..self.k {
            for p in 0..self.k {
                out.counts[class_to_category[t] * cats + class_to_category[p]] +=
                    self.counts[t * self.k + p];
            }
        }
        Ok(out)
    }
}

/// Per-class IoU (None where a class appears in neither prediction nor
/// ground truth) and their mean over the defined classes.
pub fn miou(cm: &ConfusionMatrix) -> Result<(Vec<Option<f64>>, f64)> {
    let k = cm.k;
    let mut per_class = Vec::with_capacity(k);
    let mut sum = 0.0;
    let mut defined = 0usize;
    for c in 0..k {
        let diag = cm.get(c, c);
        let row: u64 = (0..k).map(|p| cm.get(c, p)).sum();
        let col: u64 = (0..k).map(|t| cm.get(t, c)).sum();
        let denom = row + col - diag;
        if denom == 0 {
            per_class.push(None);
        } else {
            let iou = diag as f64 / denom as f64;
            per_class.push(Some(iou));
            sum += iou;
            defined += 1;
        }
    }
    if defined == 0 {
        return Err(Error::InvalidArg(
            "every class has an empty union; mIoU undefined".into(),
        ));
    }
    Ok((per_class, sum / defined as f64))
}

/// Mean IoU after collapsing classes into categories.
pub fn category_miou(cm: &ConfusionMatrix, class_to_category: &[usize]) -> Result<f64> {
    Ok(miou(&cm.collapse(class_to_category)?)?.1)
}

pub fn pixel_accuracy(cm: &ConfusionMatrix) -> f64 {
    let total = cm.total();
    if total == 0 {
        return 0.0;
    }
    let correct: u64 = (0..cm.k).map(|c| cm.get(c, c)).sum();
    correct as f64 / total as f64
}

/// Argmax over the class axis of a `[1, K, H, W]` score map; ties resolve to
/// the lowest class index.
pub fn argmax_labels(scores: &Tensor<f32>) -> Result<LabelMap> {
    let (n, k, h, w) = scores.dims4()?;
    if n != 1 {
        return Err(Error::Shape("argmax expects a single-image batch".into()));
    }
    let plane = h * w;
    let d = scores.data();
    let mut out = LabelMap::filled(h, w, 0);
    for p in 0..plane {
        let mut best = 0usize;
        let mut best_v = d[p];
        for c in 1..k {
            let v = d[c * plane + p];
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        out.data[p] = best as u8;
    }
    Ok(out)
}

/// Mean-subtract, zero-pad to a multiple of 8, run inference at native
/// resolution and crop the prediction back.
pub fn predict(net: &Network<f32>, sample: &Sample, means: &[f64; 3]) -> Result<LabelMap> {
    let dims = sample.image.dims();
    let (h, w) = (dims[1], dims[2]);
    let hp = h.div_ceil(8) * 8;
    let wp = w.div_ceil(8) * 8;
    let mut data = vec![0.0f32; 3 * hp * wp];
    let src = sample.image.data();
    for c in 0..3 {
        let mean = means[c] as f32;
        for y in 0..h {
            for x in 0..w {
                data[(c * hp + y) * wp + x] = src[(c * h + y) * w + x] - mean;
            }
        }
    }
    let input = Tensor::from_vec(&[1, 3, hp, wp], data)?;
    let scores = net.forward_infer(&input)?;
    let full = argmax_labels(&scores)?;
    let mut pred = LabelMap::filled(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            pred.set(y, x, full.get(y, x));
        }
    }
    Ok(pred)
}

#[derive(Debug, Clone)]
pub struct Metrics {
    pub per_class: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub category_mean_iou: Option<f64>,
    pub pixel_accuracy: f64,
    pub confusion: ConfusionMatrix,
}

impl Metrics {
    /// Plain-text report: one `class <id> <IoU>` line per class, then the
    /// aggregate rows.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (c, iou) in self.per_class.iter().enumerate() {
            match iou {
                Some(v) => out.push_str(&format!("class {c} {v:.6}\n")),
                None => out.push_str(&format!("class {c} n/a\n")),
            }
        }
        out.push_str(&format!("mIoU {:.6}\n", self.mean_iou));
        if let Some(cat) = self.category_mean_iou {
            out.push_str(&format!("mIoU_cat {cat:.6}\n"));
        }
        out.push_str(&format!("pixel_acc {:.6}\n", self.pixel_accuracy));
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (c, iou) in self.per_class.iter().enumerate() {
            match iou {
                Some(v) => out.push_str(&format!("class_{c},{v:.6}\n")),
                None => out.push_str(&format!("class_{c},\n")),
            }
        }
        out.push_str(&format!("miou,{:.6}\n", self.mean_iou));
        if let Some(cat) = self.category_mean_iou {
            out.push_str(&format!("miou_cat,{cat:.6}\n"));
        }
        out.push_str(&format!("pixel_acc,{:.6}\n", self.pixel_accuracy));
        out
    }
}

/// Single-scale evaluation of every sample in the manifest.
pub fn evaluate(
    net: &Network<f32>,
    manifest: &Manifest,
    means: &[f64; 3],
    class_to_category: Option<&[usize]>,
) -> Result<Metrics> {
    if manifest.num_classes != net.config().num_classes {
        return Err(Error::Config(format!(
            "manifest has {} classes but the model was built for {}",
            manifest.num_classes,
            net.config().num_classes
        )));
    }
    let mut cm = ConfusionMatrix::new(manifest.num_classes);
    for (img, lab) in &manifest.pairs {
        let sample = Sample {
            image: crate::data::read_ppm(img)?,
            labels: crate::data::read_pgm(lab)?,
        };
        sample.validate(manifest.num_classes)?;
        let pred = predict(net, &sample, means)?;
        cm.accumulate(&pred, &sample.labels)?;
    }
    let (per_class, mean_iou) = miou(&cm)?;
    let category_mean_iou = match class_to_category {
        Some(map) => Some(category_miou(&cm, map)?),
        None => None,
    };
    Ok(Metrics {
        per_class,
        mean_iou,
        category_mean_iou,
        pixel_accuracy: pixel_accuracy(&cm),
        confusion: cm,
    })
}
