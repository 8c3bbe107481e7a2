//! Model-driven segmentation of images and evaluation over a dataset split.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    compose_assignments, label_segments, mask_probe, oracle_assign, random_labels, rasterize, ClassEmbeddingTable,
    ComposedAssignment, GroupLabels, IouCounts, IouReport, SegmentationResult, IGNORE,
};
use crate::autograd::Graph;
use crate::data::Dataset;
use crate::encoders::{encode_image_segments, encode_text, GroupVit, Vocab};
use crate::error::{Error, Result};
use crate::grouping::AssignmentMatrix;
use crate::objectives::prompts::PLACEHOLDER;
use crate::objectives::{TAU_MAX, TAU_MIN};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<T: Scalar> ClassEmbeddingTable<T> {
    /// Embeds every class except `background` by filling each template with
    /// its name, encoding, averaging over templates and renormalizing.
    pub fn build<S: AsRef<str>>(
        model: &GroupVit<T>,
        vocab: &Vocab,
        class_names: &[S],
        templates: &[S],
        background: usize,
    ) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::Config("no prompt templates".into()));
        }
        let cfg = &model.config;
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let mut names = Vec::new();
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for (id, name) in class_names.iter().enumerate() {
            if id == background {
                continue;
            }
            let texts: Vec<_> = templates
                .iter()
                .map(|t| vocab.tokenize(&t.as_ref().replace(PLACEHOLDER, name.as_ref()), cfg.max_text_length))
                .collect();
            let z = encode_text(&mut g, &texts, &bound.text, cfg)?;
            let mean = g.mean(z, 0)?;
            let unit = g.l2_normalize(mean)?;
            rows.extend_from_slice(g.value(unit).data());
            names.push(name.as_ref().to_string());
            ids.push(id);
        }
        let c = names.len();
        let p = rows.len().checked_div(c).unwrap_or(0);
        Self::new(names, ids, Tensor::new(&[c, p], rows)?, background)
    }
}

/// Everything computed for one image.
#[derive(Clone, Debug)]
pub struct ImageSegmentation<T> {
    /// Hard assignment of every stage, first stage first.
    pub stages: Vec<AssignmentMatrix<T>>,
    pub composed: ComposedAssignment<T>,
    /// `[M_L, P]` unit-norm segment embeddings.
    pub segment_embeddings: Tensor<T>,
    pub group_labels: GroupLabels,
    pub result: SegmentationResult,
}

impl<T: Scalar> ImageSegmentation<T> {
    /// Pixel group map after the first `stages` stages.
    pub fn stage_group_map(&self, stages: usize) -> Result<Vec<usize>> {
        let c = compose_assignments(&self.stages[..stages], self.composed.grid())?;
        super::pixel_groups(&c.labels(), c.grid(), self.result.width, self.result.height)
    }
}

/// Labeling temperature: the explicit one, else the model's clamped `τ`.
pub fn labeling_temperature<T: Scalar>(model: &GroupVit<T>, explicit: Option<f64>) -> f64 {
    explicit.unwrap_or_else(|| model.temperature().clamp(TAU_MIN, TAU_MAX))
}

/// Segments a `[B, H, W, C]` batch.
pub fn segment_batch<T: Scalar>(
    model: &GroupVit<T>,
    images: &Tensor<T>,
    table: &ClassEmbeddingTable<T>,
    tau: f64,
    threshold: f64,
) -> Result<Vec<ImageSegmentation<T>>> {
    let cfg = &model.config;
    let shape = images.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("segment_batch", format!("expected [B, H, W, C], got {shape:?}")));
    }
    let (b, h, w) = (shape[0], shape[1], shape[2]);
    let grid = (h / cfg.patch_size, w / cfg.patch_size);
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let (z, state) = encode_image_segments(&mut g, images, &bound.vision, cfg)?;
    let z = g.value(z).clone();
    let (m, p) = (z.shape()[1], z.shape()[2]);
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let stages = state.assignment_matrices(&g, i)?;
        let composed = compose_assignments(&stages, grid)?;
        let segment_embeddings = z.slice(0, i, i + 1)?.reshape(&[m, p])?;
        let group_labels = label_segments(&segment_embeddings, table, tau, threshold)?;
        let result = rasterize(&composed, &group_labels, w, h)?;
        out.push(ImageSegmentation {
            stages,
            composed,
            segment_embeddings,
            group_labels,
            result,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub threshold: f64,
    /// `None` reuses the model's contrastive temperature.
    pub label_temperature: Option<f64>,
    pub batch_size: usize,
    pub baseline_trials: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            threshold: 0.9,
            label_temperature: None,
            batch_size: 32,
            baseline_trials: 100,
            seed: 0,
        }
    }
}

/// Scores of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScores {
    pub text_miou: f64,
    pub oracle_miou: f64,
    /// Best single-group Jaccard against the foreground; `None` without
    /// foreground pixels.
    pub probe: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    /// Text-labeled predictions, counts pooled over the split.
    pub text: IouReport,
    pub oracle: IouReport,
    /// Mean over trials of the split mIoU under uniformly random group labels.
    pub random_baseline: f64,
    pub mean_probe: f64,
    pub per_image: Vec<ImageScores>,
}

impl EvalReport {
    /// One line per class, then the summary lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        for (c, name) in self.class_names.iter().enumerate() {
            s.push_str(&format!(
                "class\t{c}\t{name}\tiou={}\toracle_iou={}\n",
                fmt(self.text.per_class[c]),
                fmt(self.oracle.per_class[c])
            ));
        }
        s.push_str(&format!("miou\t{:.4}\n", self.text.mean));
        s.push_str(&format!("oracle_miou\t{:.4}\n", self.oracle.mean));
        s.push_str(&format!("random_baseline_miou\t{:.4}\n", self.random_baseline));
        s.push_str(&format!("mask_probe_jaccard\t{:.4}\n", self.mean_probe));
        s
    }
}

/// Segments every sample of `dataset` (all must carry masks) and scores the
/// text labeling, the oracle labeling, random labelings and the mask probe.
pub fn evaluate<T: Scalar>(
    model: &GroupVit<T>,
    dataset: &Dataset,
    table: &ClassEmbeddingTable<T>,
    class_names: &[String],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let nc = class_names.len();
    let tau = labeling_temperature(model, opts.label_temperature);
    let mut text = IouCounts::new(nc);
    let mut oracle = IouCounts::new(nc);
    let mut baseline: Vec<IouCounts> = vec![IouCounts::new(nc); opts.baseline_trials];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut per_image = Vec::with_capacity(dataset.len());
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(opts.batch_size.max(1)) {
        let images = dataset.images::<T>(chunk)?;
        let segs = segment_batch(model, &images, table, tau, opts.threshold)?;
        for (&i, seg) in chunk.iter().zip(&segs) {
            let sample = &dataset.samples[i];
            let truth = sample.mask.as_ref().ok_or_else(|| Error::Format {
                kind: "dataset",
                path: dataset.dir.join(&sample.name),
                msg: "no ground-truth mask".into(),
            })?;
            let r = &seg.result;
            let groups = seg.composed.groups();
            let mut t_img = IouCounts::new(nc);
            t_img.add(&r.labels, truth)?;
            let oracle_labels = oracle_assign(&r.group_map, groups, truth, nc, table.background)?;
            let oracle_pixels: Vec<usize> = r.group_map.iter().map(|&g| oracle_labels[g]).collect();
            let mut o_img = IouCounts::new(nc);
            o_img.add(&oracle_pixels, truth)?;
            for counts in baseline.iter_mut() {
                let labels = random_labels(groups, nc, &mut rng);
                let pixels: Vec<usize> = r.group_map.iter().map(|&g| labels[g]).collect();
                counts.add(&pixels, truth)?;
            }
            let fg: Vec<bool> = truth
                .iter()
                .map(|&t| t as usize != table.background && t as usize != IGNORE)
                .collect();
            let probe = if fg.iter().any(|&f| f) {
                Some(mask_probe(&r.group_map, groups, &fg)?)
            } else {
                None
            };
            per_image.push(ImageScores {
                text_miou: t_img.report().mean,
                oracle_miou: o_img.report().mean,
                probe,
            });
            text.merge(&t_img);
            oracle.merge(&o_img);
        }
    }
    let probes: Vec<f64> = per_image.iter().filter_map(|s| s.probe).collect();
    let mean_probe = if probes.is_empty() {
        0.0
    } else {
        probes.iter().sum::<f64>() / probes.len() as f64
    };
    let random_baseline = if baseline.is_empty() {
        0.0
    } else {
        baseline.iter().map(|c| c.report().mean).sum::<f64>() / baseline.len() as f64
    };
    Ok(EvalReport {
        class_names: class_names.to_vec(),
        text: text.report(),
        oracle: oracle.report(),
        random_baseline,
        mean_probe,
        per_image,
    })
}
