//! Zero-shot segmentation: compose stage assignments into a patch-to-group
//! map, label groups by text similarity, rasterize, and score.

pub mod pipeline;

use rand::Rng;

use crate::config::AssignMode;
use crate::error::{Error, Result};
use crate::grouping::AssignmentMatrix;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use pipeline::{evaluate, labeling_temperature, segment_batch, EvalOptions, EvalReport, ImageScores, ImageSegmentation};

/// Ground-truth pixels with this value are left out of every score.
pub const IGNORE: usize = 255;

/// Product `A^L ... A^1` of hard stage assignments: final group of every patch.
#[derive(Clone, Debug, PartialEq)]
pub struct ComposedAssignment<T> {
    values: Tensor<T>,
    grid: (usize, usize),
}

impl<T: Scalar> ComposedAssignment<T> {
    /// `[M_L, N]`.
    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    /// Patch grid `(rows, cols)`, `rows * cols = N`.
    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn groups(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn patches(&self) -> usize {
        self.values.shape()[1]
    }

    /// Final group of every patch, in row-major grid order.
    pub fn labels(&self) -> Vec<usize> {
        self.values.argmax(0).expect("rank-2 composition")
    }

    pub fn is_one_hot(&self) -> bool {
        AssignmentMatrix::new(self.values.clone(), AssignMode::Hard)
            .map(|a| a.is_one_hot())
            .unwrap_or(false)
    }
}

/// Multiplies stage assignments `[M_1, N], [M_2, M_1], ...` (first stage first).
pub fn compose_assignments<T: Scalar>(
    assignments: &[AssignmentMatrix<T>],
    grid: (usize, usize),
) -> Result<ComposedAssignment<T>> {
    let first = assignments
        .first()
        .ok_or_else(|| Error::shape("compose_assignments", "no stages"))?;
    for (l, a) in assignments.iter().enumerate() {
        if a.mode() != AssignMode::Hard {
            return Err(Error::Domain {
                op: "compose_assignments",
                msg: format!("stage {l} is a soft assignment"),
            });
        }
    }
    if grid.0 * grid.1 != first.segments() {
        return Err(Error::dim("compose_assignments", &[grid.0 * grid.1], first.values().shape()));
    }
    let mut acc = first.values().clone();
    for a in &assignments[1..] {
        if a.segments() != acc.shape()[0] {
            return Err(Error::dim("compose_assignments", a.values().shape(), acc.shape()));
        }
        acc = a.values().matmul(&acc)?;
    }
    Ok(ComposedAssignment { values: acc, grid })
}

/// Text embeddings of the labelable classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbeddingTable<T> {
    pub class_names: Vec<String>,
    /// Label written for each row, e.g. its index in a dataset class list.
    pub class_ids: Vec<usize>,
    /// `[C, P]`, unit-norm rows.
    pub embeddings: Tensor<T>,
    /// Label of groups below the confidence threshold.
    pub background: usize,
}

impl<T: Scalar> ClassEmbeddingTable<T> {
    pub fn new(
        class_names: Vec<String>,
        class_ids: Vec<usize>,
        embeddings: Tensor<T>,
        background: usize,
    ) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::Config("class embedding table is empty".into()));
        }
        let s = embeddings.shape();
        if s.len() != 2 || s[0] != class_names.len() || class_ids.len() != class_names.len() {
            return Err(Error::shape(
                "class_table",
                format!("{} names, {} ids, embeddings {:?}", class_names.len(), class_ids.len(), s),
            ));
        }
        let p = s[1];
        for (c, row) in embeddings.data().chunks(p.max(1)).enumerate() {
            let n: f64 = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Domain {
                    op: "class_table",
                    msg: format!("row {c} ({}) has norm {n}", class_names[c]),
                });
            }
        }
        Ok(ClassEmbeddingTable {
            class_names,
            class_ids,
            embeddings,
            background,
        })
    }

    pub fn len(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_names.is_empty()
    }
}

/// Per-group labels and the maximum class probability behind each.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupLabels {
    pub labels: Vec<usize>,
    pub confidences: Vec<f64>,
}

/// Labels each segment `[M, P]` with its most similar class, or with the
/// table's background label when the softmax (temperature `tau`) over class
/// similarities peaks below `threshold`.
pub fn label_segments<T: Scalar>(
    segments: &Tensor<T>,
    table: &ClassEmbeddingTable<T>,
    tau: f64,
    threshold: f64,
) -> Result<GroupLabels> {
    if table.is_empty() {
        return Err(Error::Config("class embedding table is empty".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Domain {
            op: "label_segments",
            msg: format!("temperature {tau} must be positive"),
        });
    }
    if segments.rank() != 2 || segments.shape()[1] != table.embeddings.shape()[1] {
        return Err(Error::dim("label_segments", segments.shape(), table.embeddings.shape()));
    }
    let logits = segments
        .matmul(&table.embeddings.transpose()?)?
        .map(|v| v / T::lit(tau));
    let probs = logits.softmax(1)?;
    let c = table.len();
    let mut out = GroupLabels {
        labels: Vec::with_capacity(segments.shape()[0]),
        confidences: Vec::with_capacity(segments.shape()[0]),
    };
    for row in probs.data().chunks(c) {
        let (best, p) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v.as_f64() > acc.1 { (i, v.as_f64()) } else { acc });
        out.labels.push(if p >= threshold { table.class_ids[best] } else { table.background });
        out.confidences.push(p);
    }
    Ok(out)
}

/// Pixel-level prediction for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationResult {
    pub width: usize,
    pub height: usize,
    /// Class label per pixel, row-major.
    pub labels: Vec<usize>,
    /// Final group per pixel, row-major.
    pub group_map: Vec<usize>,
    /// Per-group confidence, empty when groups were labeled without scores.
    pub confidences: Vec<f64>,
}

/// Group of every pixel: nearest patch of the grid.
pub fn pixel_groups(patch_groups: &[usize], grid: (usize, usize), width: usize, height: usize) -> Result<Vec<usize>> {
    let (rows, cols) = grid;
    if patch_groups.len() != rows * cols || height < rows || width < cols {
        return Err(Error::dim("rasterize", &[rows, cols, patch_groups.len()], &[height, width]));
    }
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let r = y * rows / height;
        for x in 0..width {
            out.push(patch_groups[r * cols + x * cols / width]);
        }
    }
    Ok(out)
}

pub fn rasterize<T: Scalar>(
    composed: &ComposedAssignment<T>,
    group_labels: &GroupLabels,
    width: usize,
    height: usize,
) -> Result<SegmentationResult> {
    if group_labels.labels.len() != composed.groups() {
        return Err(Error::dim("rasterize", &[group_labels.labels.len()], &[composed.groups()]));
    }
    let group_map = pixel_groups(&composed.labels(), composed.grid(), width, height)?;
    Ok(SegmentationResult {
        width,
        height,
        labels: group_map.iter().map(|&g| group_labels.labels[g]).collect(),
        group_map,
        confidences: group_labels.confidences.clone(),
    })
}

/// Per-class intersection and union counts, summable over images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

/// Per-class IoU (`None` for classes absent from both prediction and truth)
/// and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl IouCounts {
    pub fn new(num_classes: usize) -> Self {
        IouCounts {
            intersection: vec![0; num_classes],
            union: vec![0; num_classes],
        }
    }

    /// Adds one image. Pixels whose truth is [`IGNORE`] are skipped.
    pub fn add(&mut self, pred: &[usize], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::dim("mean_iou", &[pred.len()], &[truth.len()]));
        }
        let c = self.union.len();
        for (&p, &t) in pred.iter().zip(truth) {
            let t = t as usize;
            if t == IGNORE {
                continue;
            }
            if p >= c || t >= c {
                return Err(Error::shape("mean_iou", format!("label {} outside {c} classes", p.max(t))));
            }
            if p == t {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[t] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &IouCounts) {
        for (a, b) in self.intersection.iter_mut().zip(&other.intersection) {
            *a += b;
        }
        for (a, b) in self.union.iter_mut().zip(&other.union) {
            *a += b;
        }
    }

    pub fn report(&self) -> IouReport {
        let per_class: Vec<Option<f64>> = self
            .intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect();
        let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = if scored.is_empty() {
            0.0
        } else {
            scored.iter().sum::<f64>() / scored.len() as f64
        };
        IouReport { per_class, mean }
    }
}

pub fn mean_iou(pred: &[usize], truth: &[u8], num_classes: usize) -> Result<IouReport> {
    let mut c = IouCounts::new(num_classes);
    c.add(pred, truth)?;
    Ok(c.report())
}

/// Best Jaccard index between a binary truth mask and any single group's
/// pixels.
pub fn mask_probe(group_map: &[usize], groups: usize, truth: &[bool]) -> Result<f64> {
    if group_map.len() != truth.len() {
        return Err(Error::dim("mask_probe", &[group_map.len()], &[truth.len()]));
    }
    let positives = truth.iter().filter(|&&t| t).count();
    if positives == 0 {
        return Err(Error::Domain {
            op: "mask_probe",
            msg: "empty ground-truth mask".into(),
        });
    }
    let mut inter = vec![0usize; groups];
    let mut size = vec![0usize; groups];
    for (&g, &t) in group_map.iter().zip(truth) {
        if g >= groups {
            return Err(Error::shape("mask_probe", format!("group {g} >= {groups}")));
        }
        size[g] += 1;
        inter[g] += usize::from(t);
    }
    Ok((0..groups)
        .map(|g| inter[g] as f64 / (size[g] + positives - inter[g]) as f64)
        .fold(0.0, f64::max))
}

/// Labels every group with the class whose ground-truth mask it overlaps with
/// the highest IoU (lowest class index on ties). Groups that cover no scored
/// pixel get `fallback`.
pub fn oracle_assign(
    group_map: &[usize],
    groups: usize,
    truth: &[u8],
    num_classes: usize,
    fallback: usize,
) -> Result<Vec<usize>> {
    if group_map.len() != truth.len() {
        return Err(Error::dim("oracle_assign", &[group_map.len()], &[truth.len()]));
    }
    let mut inter = vec![vec![0usize; num_classes]; groups];
    let mut group_size = vec![0usize; groups];
    let mut class_size = vec![0usize; num_classes];
    for (&g, &t) in group_map.iter().zip(truth) {
        let t = t as usize;
        if t == IGNORE {
            continue;
        }
        if g >= groups || t >= num_classes {
            return Err(Error::shape("oracle_assign", format!("group {g} or class {t} out of range")));
        }
        inter[g][t] += 1;
        group_size[g] += 1;
        class_size[t] += 1;
    }
    Ok((0..groups)
        .map(|g| {
            if group_size[g] == 0 {
                return fallback;
            }
            let mut best = (fallback, -1.0);
            for c in 0..num_classes {
                let u = group_size[g] + class_size[c] - inter[g][c];
                let iou = if u == 0 { 0.0 } else { inter[g][c] as f64 / u as f64 };
                if iou > best.1 {
                    best = (c, iou);
                }
            }
            best.0
        })
        .collect())
}

/// Labels every group uniformly at random among `num_classes` labels.
pub fn random_labels(groups: usize, num_classes: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..groups).map(|_| rng.gen_range(0..num_classes)).collect()
}
