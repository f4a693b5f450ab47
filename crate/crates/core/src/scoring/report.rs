use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::map::{anomaly_map, AnomalyResult};
use super::metrics::{aupro, auroc, average_precision, Connectivity, MapView};
use crate::config::EvalConfig;
use crate::encoders::Backends;
use crate::error::{Error, Result, StageExt};
use crate::pipeline::ModelState;
use crate::sample::ImageSample;

/// The five metrics for one category (or their mean).
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryMetrics {
    pub category: String,
    pub i_auroc: f64,
    pub p_auroc: f64,
    pub aupro: f64,
    pub i_map: f64,
    pub p_map: f64,
}

impl CategoryMetrics {
    pub fn values(&self) -> [f64; 5] {
        [self.i_auroc, self.p_auroc, self.aupro, self.i_map, self.p_map]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub categories: Vec<CategoryMetrics>,
    /// Unweighted mean over the category rows.
    pub mean: CategoryMetrics,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "category,i_auroc,p_auroc,aupro,i_map,p_map";

    pub fn from_categories(categories: Vec<CategoryMetrics>) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::Input("no categories to report".into()));
        }
        let n = categories.len() as f64;
        let mut sums = [0.0; 5];
        for c in &categories {
            for (s, v) in sums.iter_mut().zip(c.values()) {
                *s += v;
            }
        }
        let [i_auroc, p_auroc, aupro, i_map, p_map] = sums.map(|s| s / n);
        Ok(Self {
            categories,
            mean: CategoryMetrics {
                category: "mean".into(),
                i_auroc,
                p_auroc,
                aupro,
                i_map,
                p_map,
            },
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for row in self.categories.iter().chain(std::iter::once(&self.mean)) {
            let _ = write!(s, "{}", row.category);
            for v in row.values() {
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn in_category(category: &str, e: Error) -> Error {
    match e {
        Error::UndefinedMetric(msg) => Error::UndefinedMetric(format!("category {category}: {msg}")),
        other => other,
    }
}

/// Metrics for one category from per-image results. Pixel metrics pool all
/// pixels of the category.
pub fn category_metrics(
    category: &str,
    samples: &[&ImageSample],
    results: &[&AnomalyResult],
    eval: &EvalConfig,
) -> Result<CategoryMetrics> {
    let conn = Connectivity::from_neighbours(eval.connectivity)?;
    let masks: Vec<Vec<u8>> = samples.iter().map(|s| s.mask_or_zeros()).collect();
    let mut pixel_scores = Vec::new();
    let mut pixel_labels = Vec::new();
    let mut views = Vec::with_capacity(samples.len());
    for ((s, r), mask) in samples.iter().zip(results).zip(&masks) {
        if (r.height, r.width) != (s.height, s.width) {
            return Err(Error::Input(format!(
                "map {}×{} does not match image {} ({}×{})",
                r.height, r.width, s.name, s.height, s.width
            )));
        }
        pixel_scores.extend_from_slice(&r.pixel_map);
        pixel_labels.extend(mask.iter().map(|&m| m != 0));
        views.push(MapView {
            height: r.height,
            width: r.width,
            scores: &r.pixel_map,
            mask,
        });
    }
    let image_scores: Vec<f64> = results.iter().map(|r| r.image_score).collect();
    let image_labels: Vec<bool> = samples.iter().map(|s| s.is_anomalous).collect();
    let wrap = |r: Result<f64>| r.map_err(|e| in_category(category, e));
    Ok(CategoryMetrics {
        category: category.to_string(),
        i_auroc: wrap(auroc(&image_scores, &image_labels))?,
        p_auroc: wrap(auroc(&pixel_scores, &pixel_labels))?,
        aupro: wrap(aupro(&views, eval.fpr_limit, conn))?,
        i_map: wrap(average_precision(&image_scores, &image_labels))?,
        p_map: wrap(average_precision(&pixel_scores, &pixel_labels))?,
    })
}

/// Groups samples by category (sorted by name) and reports each plus the mean.
pub fn report_from_results(samples: &[ImageSample], results: &[AnomalyResult], eval: &EvalConfig) -> Result<MetricsReport> {
    if samples.len() != results.len() {
        return Err(Error::Input(format!("{} results for {} samples", results.len(), samples.len())));
    }
    let mut groups: BTreeMap<&str, (Vec<&ImageSample>, Vec<&AnomalyResult>)> = BTreeMap::new();
    for (s, r) in samples.iter().zip(results) {
        let g = groups.entry(s.category.as_str()).or_default();
        g.0.push(s);
        g.1.push(r);
    }
    let rows = groups
        .into_iter()
        .map(|(cat, (s, r))| category_metrics(cat, &s, &r, eval))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_categories(rows)
}

/// Eval-mode anomaly maps at each image's own resolution.
pub fn score_samples(state: &ModelState, backends: &Backends, samples: &[ImageSample]) -> Result<Vec<AnomalyResult>> {
    let model = state.model(backends)?;
    let eval = &state.config.eval;
    // Eval mode draws no random numbers; the generator only satisfies the signature.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(eval.batch_size.max(1)) {
        let size = (chunk[0].height, chunk[0].width);
        if chunk.iter().any(|s| (s.height, s.width) != size) {
            return Err(Error::Input("images in a batch must share a resolution".into()));
        }
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        let fwd = model.forward(&refs, false, &mut rng)?;
        out.extend(anomaly_map(&fwd.encoded_promoted, &fwd.decoded_promoted, size, eval.smoothing_sigma).stage("score")?);
    }
    Ok(out)
}

pub fn evaluate(state: &ModelState, backends: &Backends, samples: &[ImageSample]) -> Result<MetricsReport> {
    let results = score_samples(state, backends, samples)?;
    report_from_results(samples, &results, &state.config.eval).stage("metrics")
}

/// A detector whose map equals the ground-truth mask.
pub fn ground_truth_results(samples: &[ImageSample]) -> Result<Vec<AnomalyResult>> {
    samples
        .iter()
        .map(|s| {
            let map = s.mask_or_zeros().iter().map(|&m| m as f64).collect();
            AnomalyResult::from_map(s.height, s.width, map, 0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(cat: &str, idx: usize, anomalous: bool) -> ImageSample {
        let mut s = ImageSample::new(6, 6, vec![0.5; 108]).unwrap();
        s.category = cat.into();
        s.name = format!("{idx:03}");
        if anomalous {
            let mut mask = vec![0u8; 36];
            for i in 0..(idx % 3 + 1) {
                mask[7 + i + (idx % 2) * 12] = 1;
            }
            s.mask = Some(mask);
            s.is_anomalous = true;
            s.defect = "blot".into();
        }
        s
    }

    fn fixture() -> Vec<ImageSample> {
        let mut v = Vec::new();
        for cat in ["b", "a"] {
            for i in 0..6 {
                v.push(sample(cat, i, i % 2 == 1));
            }
        }
        v
    }

    #[test]
    fn perfect_detector_scores_one_everywhere() {
        let samples = fixture();
        let results = ground_truth_results(&samples).unwrap();
        let report = report_from_results(&samples, &results, &EvalConfig::default()).unwrap();
        assert_eq!(report.categories.iter().map(|c| c.category.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        for row in report.categories.iter().chain([&report.mean]) {
            assert_eq!(row.values(), [1.0; 5]);
        }
        let csv = report.to_csv();
        assert_eq!(csv.lines().next().unwrap(), MetricsReport::CSV_HEADER);
        assert_eq!(csv.lines().last().unwrap(), "mean,1.000000,1.000000,1.000000,1.000000,1.000000");
    }

    #[test]
    fn inverted_detector_scores_zero_auroc() {
        let samples = fixture();
        let results: Vec<AnomalyResult> = samples
            .iter()
            .map(|s| {
                let map: Vec<f64> = s.mask_or_zeros().iter().map(|&m| 1.0 - m as f64).collect();
                // Image score from the inverted mask is 1 for every image; use the
                // mean instead so normal images outrank anomalous ones.
                let mut r = AnomalyResult::from_map(6, 6, map.clone(), 0).unwrap();
                r.image_score = map.iter().sum::<f64>() / 36.0;
                r
            })
            .collect();
        let report = report_from_results(&samples, &results, &EvalConfig::default()).unwrap();
        for row in &report.categories {
            assert_eq!(row.i_auroc, 0.0);
            assert_eq!(row.p_auroc, 0.0);
        }
    }

    #[test]
    fn mean_row_is_the_unweighted_mean() {
        let rows = vec![
            CategoryMetrics { category: "x".into(), i_auroc: 0.5, p_auroc: 1.0, aupro: 0.2, i_map: 0.4, p_map: 0.1 },
            CategoryMetrics { category: "y".into(), i_auroc: 1.0, p_auroc: 0.5, aupro: 0.6, i_map: 0.8, p_map: 0.3 },
        ];
        let r = MetricsReport::from_categories(rows).unwrap();
        assert_eq!(r.mean.values(), [0.75, 0.75, 0.4, 0.6000000000000001, 0.2]);
    }

    #[test]
    fn categories_without_anomalies_name_the_category() {
        let samples: Vec<ImageSample> = (0..3).map(|i| sample("solo", i * 2, false)).collect();
        let results = ground_truth_results(&samples).unwrap();
        let err = report_from_results(&samples, &results, &EvalConfig::default()).unwrap_err();
        assert!(matches!(&err, Error::UndefinedMetric(m) if m.contains("solo")), "{err}");
    }
}
