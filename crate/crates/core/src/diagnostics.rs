//! Per-filter moments of normalized held-out features.
//!
//! For every selected normalization layer we record, per filter, the mean
//! and standard deviation of `x̂` (the normalized input before γ and β)
//! over all evaluated samples and positions. A perfect statistics match
//! yields mean 0 and std 1 for every filter.

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::data::{csv_error, TaggedDataset};
use crate::error::{config_err, data_err, Error, Result};
use crate::models::{Mode, Model, StatsPolicy};
use crate::normalization::ChannelStats;
use crate::rng::{stream, Purpose};
use crate::tape::Tape;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatsMode {
    NonAdaptiveStats,
    AdaptiveGroupStats,
}

impl fmt::Display for StatsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StatsMode::NonAdaptiveStats => "non_adaptive",
            StatsMode::AdaptiveGroupStats => "adaptive_group",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum GroupId {
    All,
    Id(usize),
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupId::All => f.write_str("all"),
            GroupId::Id(i) => write!(f, "{i}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterMoment {
    pub filter: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentReport {
    pub layer_index: usize,
    pub layer_id: String,
    pub mode: StatsMode,
    pub group: GroupId,
    pub sample_count: usize,
    pub filters: Vec<FilterMoment>,
}

impl MomentReport {
    /// Standard deviation of the per-filter means.
    pub fn mean_dispersion(&self) -> f64 {
        dispersion(self.filters.iter().map(|f| f.mean))
    }
}

fn dispersion(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mu = values.clone().sum::<f64>() / n;
    (values.map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt()
}

/// Dispersion of per-filter means pooled over several reports.
pub fn pooled_dispersion(reports: &[MomentReport]) -> f64 {
    dispersion(reports.iter().flat_map(|r| r.filters.iter().map(|f| f.mean)))
}

/// Where normalization statistics come from.
#[derive(Clone, Copy, Debug)]
pub enum MomentSource<'a> {
    /// The running buffers stored in the model.
    TrainRunning,
    /// Statistics recomputed on a reference subset, pooled over samples and
    /// positions; each layer sees inputs normalized by the reference
    /// statistics of the layers before it.
    FromReference(&'a TaggedDataset),
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSelection {
    All,
    Indices(Vec<usize>),
    /// Layers whose name starts with the prefix.
    Prefix(String),
}

impl LayerSelection {
    fn resolve<T: Scalar>(&self, model: &Model<T>) -> Result<Vec<usize>> {
        let layers = model.norm_layers();
        let picked: Vec<usize> = match self {
            LayerSelection::All => (0..layers.len()).collect(),
            LayerSelection::Indices(idx) => {
                if let Some(&bad) = idx.iter().find(|&&i| i >= layers.len()) {
                    return Err(config_err!(
                        "layer index {bad} out of range ({} normalization layers)",
                        layers.len()
                    ));
                }
                idx.clone()
            }
            LayerSelection::Prefix(p) => (0..layers.len())
                .filter(|&i| layers[i].name.starts_with(p.as_str()))
                .collect(),
        };
        if picked.is_empty() {
            return Err(config_err!("layer selection {self:?} matches no normalization layer"));
        }
        Ok(picked)
    }
}

/// Statistics of every normalization layer on `reference`, computed in one
/// pooled pass.
pub fn reference_stats<T: Scalar>(model: &Model<T>, reference: &TaggedDataset) -> Result<Vec<ChannelStats<T>>> {
    if reference.is_empty() {
        return Err(data_err!("reference subset is empty"));
    }
    let idx: Vec<usize> = (0..reference.len()).collect();
    let (x, _) = reference.batch::<T>(&idx);
    let mut tape = Tape::new();
    let trace = model.forward_with(&mut tape, x, StatsPolicy::BatchPooled)?;
    Ok(trace
        .norm_outputs
        .iter()
        .map(|&v| tape.norm_cache(v).expect("normalization node").stats().clone())
        .collect())
}

struct Accum {
    sum: Vec<f64>,
    sq: Vec<f64>,
    count: usize,
}

pub fn collect_normalized_moments<T: Scalar>(
    model: &Model<T>,
    dataset: &TaggedDataset,
    source: MomentSource<'_>,
    layers: &LayerSelection,
    batch_size: usize,
) -> Result<Vec<MomentReport>> {
    if dataset.is_empty() {
        return Err(data_err!("cannot collect moments of an empty dataset"));
    }
    let picked = layers.resolve(model)?;
    let fixed = match source {
        MomentSource::TrainRunning => None,
        MomentSource::FromReference(r) => Some(reference_stats(model, r)?),
    };
    let mode = if fixed.is_some() {
        StatsMode::AdaptiveGroupStats
    } else {
        StatsMode::NonAdaptiveStats
    };
    let mut acc: Vec<Accum> = picked
        .iter()
        .map(|&i| {
            let c = model.norm_layers()[i].running.channels();
            Accum {
                sum: vec![0.0; c],
                sq: vec![0.0; c],
                count: 0,
            }
        })
        .collect();
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let (x, _) = dataset.batch::<T>(chunk);
        let mut tape = Tape::new();
        let policy = match &fixed {
            Some(stats) => StatsPolicy::Fixed(stats),
            None => StatsPolicy::Mode(Mode::EvalNonAdaptive),
        };
        let trace = model.forward_with(&mut tape, x, policy)?;
        for (a, &li) in acc.iter_mut().zip(&picked) {
            let cache = tape.norm_cache(trace.norm_outputs[li]).expect("normalization node");
            let shape = cache.shape();
            let (nb, nc) = (shape[0], shape[1]);
            let nl: usize = shape[2..].iter().product();
            let xh = cache.xhat();
            for b in 0..nb {
                for c in 0..nc {
                    for &v in &xh[(b * nc + c) * nl..(b * nc + c + 1) * nl] {
                        let v = v.to_f64_lossy();
                        a.sum[c] += v;
                        a.sq[c] += v * v;
                    }
                }
            }
            a.count += nb * nl;
        }
    }
    Ok(acc
        .into_iter()
        .zip(&picked)
        .map(|(a, &li)| {
            let n = a.count as f64;
            let filters = a
                .sum
                .iter()
                .zip(&a.sq)
                .enumerate()
                .map(|(filter, (&s, &q))| {
                    let mean = s / n;
                    FilterMoment {
                        filter,
                        mean,
                        std: (q / n - mean * mean).max(0.0).sqrt(),
                    }
                })
                .collect();
            MomentReport {
                layer_index: li,
                layer_id: model.norm_layers()[li].name.clone(),
                mode,
                group: GroupId::All,
                sample_count: dataset.len(),
                filters,
            }
        })
        .collect())
}

/// Per extraneous group: a seeded random half supplies the statistics that
/// normalize the other half.
pub fn half_split_protocol<T: Scalar>(
    model: &Model<T>,
    dataset: &TaggedDataset,
    seed: u64,
    layers: &LayerSelection,
    batch_size: usize,
) -> Result<Vec<MomentReport>> {
    let mut out = Vec::new();
    for (gid, mut idx) in dataset.groups() {
        if idx.len() < 2 {
            return Err(data_err!(
                "extraneous group {gid} has {} sample(s); the half split needs at least 2",
                idx.len()
            ));
        }
        idx.shuffle(&mut stream(seed, Purpose::HalfSplit, gid as u64));
        let half = idx.len() / 2;
        let reference = dataset.subset(&idx[..half]);
        let evaluated = dataset.subset(&idx[half..]);
        for mut r in collect_normalized_moments(
            model,
            &evaluated,
            MomentSource::FromReference(&reference),
            layers,
            batch_size,
        )? {
            r.group = GroupId::Id(gid);
            out.push(r);
        }
    }
    Ok(out)
}

/// Fractions of filters with `|mean| < τ_mean` and `|std − 1| < τ_std`.
pub fn concentration_metric(report: &MomentReport, tau_mean: f64, tau_std: f64) -> (f64, f64) {
    pooled_concentration(std::slice::from_ref(report), tau_mean, tau_std)
}

/// [`concentration_metric`] over the filters of several reports together.
pub fn pooled_concentration(reports: &[MomentReport], tau_mean: f64, tau_std: f64) -> (f64, f64) {
    let filters: Vec<&FilterMoment> = reports.iter().flat_map(|r| &r.filters).collect();
    if filters.is_empty() {
        return (0.0, 0.0);
    }
    let n = filters.len() as f64;
    let m = filters.iter().filter(|f| f.mean.abs() < tau_mean).count() as f64;
    let s = filters.iter().filter(|f| (f.std - 1.0).abs() < tau_std).count() as f64;
    (m / n, s / n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub underflow: usize,
    /// Values above the last edge, plus NaNs.
    pub overflow: usize,
}

impl Histogram {
    /// Uniform bins over `[lo, hi]`; the last bin includes `hi`.
    pub fn new(lo: f64, hi: f64, bins: usize, values: impl IntoIterator<Item = f64>) -> Self {
        assert!(hi > lo && bins > 0, "histogram needs lo < hi and bins > 0");
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut h = Self {
            edges,
            counts: vec![0; bins],
            underflow: 0,
            overflow: 0,
        };
        for v in values {
            if v < lo {
                h.underflow += 1;
            } else if v <= hi {
                let k = (((v - lo) / width) as usize).min(bins - 1);
                h.counts[k] += 1;
            } else {
                h.overflow += 1;
            }
        }
        h
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.underflow + self.overflow
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_left,bin_right,count\n");
        for (k, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{},{},{c}", self.edges[k], self.edges[k + 1]);
        }
        s
    }

    /// Bar chart in a fixed 800×400 viewport, one rect per nonempty bin.
    pub fn to_svg(&self, title: &str) -> String {
        let (w, h, margin) = (800.0, 400.0, 40.0);
        let max = self.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        let bar = (w - 2.0 * margin) / self.counts.len() as f64;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="800" height="400" viewBox="0 0 800 400">"#
        );
        let _ = writeln!(s, r#"<title>{}</title>"#, xml_escape(title));
        let _ = writeln!(
            s,
            r##"<line x1="{margin}" y1="{y}" x2="{x2}" y2="{y}" stroke="#000"/>"##,
            y = h - margin,
            x2 = w - margin
        );
        for (k, &c) in self.counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let height = (h - 2.0 * margin) * c as f64 / max;
            let _ = writeln!(
                s,
                r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4a7ab5"/>"##,
                margin + bar * k as f64,
                h - margin - height,
                bar,
                height
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{margin}" y="{}" font-size="12">{}</text>"#,
            h - 10.0,
            self.edges[0]
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="end">{}</text>"#,
            w - margin,
            h - 10.0,
            self.edges[self.edges.len() - 1]
        );
        s.push_str("</svg>\n");
        s
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub const HIST_BINS: usize = 50;
pub const MEAN_RANGE: (f64, f64) = (-1.5, 1.5);
pub const STD_RANGE: (f64, f64) = (0.0, 3.0);
pub const DEFAULT_TAU: f64 = 0.1;

pub fn mean_histogram(report: &MomentReport, bins: usize) -> Histogram {
    Histogram::new(MEAN_RANGE.0, MEAN_RANGE.1, bins, report.filters.iter().map(|f| f.mean))
}

pub fn std_histogram(report: &MomentReport, bins: usize) -> Histogram {
    Histogram::new(STD_RANGE.0, STD_RANGE.1, bins, report.filters.iter().map(|f| f.std))
}

/// Merges the layers of each (mode, group) into one report named `all`.
pub fn pool_layers(reports: &[MomentReport]) -> Vec<MomentReport> {
    let mut out: Vec<MomentReport> = Vec::new();
    for r in reports {
        match out.iter_mut().find(|o| o.mode == r.mode && o.group == r.group) {
            Some(o) => {
                let base = o.filters.len();
                o.filters.extend(r.filters.iter().enumerate().map(|(i, f)| FilterMoment {
                    filter: base + i,
                    ..*f
                }));
            }
            None => out.push(MomentReport {
                layer_index: usize::MAX,
                layer_id: "all".into(),
                ..r.clone()
            }),
        }
    }
    out
}

fn file_stem(r: &MomentReport) -> String {
    let layer: String = r
        .layer_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    format!("{}_{}_g{}", r.mode, layer, r.group)
}

fn write(path: PathBuf, text: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Writes mean/std histogram CSVs and SVGs for every report and a
/// `summary.csv` of concentration metrics at τ = 0.1.
pub fn emit_report(reports: &[MomentReport], bins: usize, svg: bool, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for r in reports {
        let stem = file_stem(r);
        for (kind, hist) in [("means", mean_histogram(r, bins)), ("stds", std_histogram(r, bins))] {
            write(out_dir.join(format!("{stem}_{kind}.csv")), &hist.to_csv(), &mut written)?;
            if svg {
                let title = format!("{} {} group {} {kind}", r.mode, r.layer_id, r.group);
                write(out_dir.join(format!("{stem}_{kind}.svg")), &hist.to_svg(&title), &mut written)?;
            }
        }
    }
    let path = out_dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    w.write_record([
        "layer",
        "mode",
        "group",
        "filters",
        "sample_count",
        "frac_mean_ok",
        "frac_std_ok",
        "mean_dispersion",
    ])
    .map_err(|e| csv_error(&path, e))?;
    for r in reports {
        let (m, s) = concentration_metric(r, DEFAULT_TAU, DEFAULT_TAU);
        w.write_record([
            r.layer_id.clone(),
            r.mode.to_string(),
            r.group.to_string(),
            r.filters.len().to_string(),
            r.sample_count.to_string(),
            m.to_string(),
            s.to_string(),
            r.mean_dispersion().to_string(),
        ])
        .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetKind, Provenance, Sample};
    use crate::models::{build_model, ModelConfig, SensorConfig};
    use crate::normalization::NormSpec;
    use crate::tape::PaddingMode;
    use rand::Rng;

    fn model() -> Model<f32> {
        let mut cfg = ModelConfig::sensor(2, 3, NormSpec::batch_norm());
        cfg.sensor = SensorConfig {
            per_channel_blocks: 1,
            merged_blocks: 1,
            convs_per_block: 2,
            per_channel_growth: 3,
            merged_growth: 4,
            kernel_size: 3,
            padding: PaddingMode::Zero,
        };
        build_model(&cfg).unwrap()
    }

    fn dataset(n: usize, groups: usize, seed: u64) -> TaggedDataset {
        let mut rng = stream(seed, Purpose::Subset, 0);
        let samples = (0..n)
            .map(|i| Sample {
                data: (0..2 * 12).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                labels: vec![0; 12],
                extraneous: i % groups,
            })
            .collect();
        TaggedDataset::new(
            DatasetKind::Sequence,
            vec![2, 12],
            samples,
            3,
            groups,
            Provenance {
                source: "test".into(),
                standardized: false,
            },
        )
        .unwrap()
    }

    #[test]
    fn self_reference_gives_zero_means() {
        let m = model();
        let ds = dataset(9, 1, 1);
        let reports =
            collect_normalized_moments(&m, &ds, MomentSource::FromReference(&ds), &LayerSelection::All, 4).unwrap();
        assert_eq!(reports.len(), m.norm_layers().len());
        for r in &reports {
            for f in &r.filters {
                assert!(f.mean.abs() < 1e-6, "{} {}", r.layer_id, f.mean);
                assert!((f.std - 1.0).abs() < 1e-3);
            }
        }
        assert_eq!(concentration_metric(&reports[0], 0.1, 0.1).0, 1.0);
    }

    #[test]
    fn duplicated_halves_are_exact() {
        let m = model();
        let base = dataset(4, 1, 2);
        let mut doubled = base.clone();
        doubled.samples.extend(base.samples.clone());
        // Duplicating every sample leaves the pooled statistics unchanged.
        let r = collect_normalized_moments(&m, &base, MomentSource::FromReference(&doubled), &LayerSelection::All, 8)
            .unwrap();
        for f in r.iter().flat_map(|r| &r.filters) {
            assert!(f.mean.abs() < 1e-6);
        }
    }

    #[test]
    fn half_split_is_seeded() {
        let m = model();
        let ds = dataset(12, 3, 3);
        let a = half_split_protocol(&m, &ds, 5, &LayerSelection::All, 8).unwrap();
        let b = half_split_protocol(&m, &ds, 5, &LayerSelection::All, 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3 * m.norm_layers().len());
        assert_eq!(a[0].group, GroupId::Id(0));
        let lonely = dataset(4, 4, 3);
        assert!(matches!(
            half_split_protocol(&m, &lonely, 5, &LayerSelection::All, 8),
            Err(Error::Data(msg)) if msg.contains("group 0")
        ));
    }

    #[test]
    fn running_stats_required() {
        let m = model();
        let ds = dataset(3, 1, 4);
        assert!(matches!(
            collect_normalized_moments(&m, &ds, MomentSource::TrainRunning, &LayerSelection::All, 4),
            Err(Error::State(_))
        ));
        let empty = ds.subset(&[]);
        assert!(matches!(
            collect_normalized_moments(&m, &empty, MomentSource::FromReference(&ds), &LayerSelection::All, 4),
            Err(Error::Data(_))
        ));
        assert!(LayerSelection::Indices(vec![99]).resolve(&m).is_err());
        assert_eq!(LayerSelection::Prefix("merged".into()).resolve(&m).unwrap().len(), 2);
    }

    fn report(means: &[f64]) -> MomentReport {
        MomentReport {
            layer_index: 0,
            layer_id: "l".into(),
            mode: StatsMode::NonAdaptiveStats,
            group: GroupId::All,
            sample_count: 2,
            filters: means
                .iter()
                .enumerate()
                .map(|(filter, &mean)| FilterMoment { filter, mean, std: 1.0 + mean })
                .collect(),
        }
    }

    #[test]
    fn concentration_examples() {
        assert_eq!(concentration_metric(&report(&[0.0; 5]), 1e-9, 0.1).0, 1.0);
        assert_eq!(concentration_metric(&report(&[0.0, 1.0]), 0.5, 0.5), (0.5, 0.5));
    }

    #[test]
    fn histogram_conserves_counts() {
        let values = [-2.0, -1.5, 0.0, 0.3, 1.5, 1.6, f64::NAN];
        let h = Histogram::new(-1.5, 1.5, 50, values);
        assert_eq!(h.total(), values.len());
        assert_eq!((h.underflow, h.overflow), (1, 2));
        assert!(h.edges.windows(2).all(|w| w[1] > w[0]));
        let r = report(&[0.0, 0.01, 0.5, -0.7]);
        let csv_counts: usize = mean_histogram(&r, 50)
            .to_csv()
            .lines()
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap())
            .sum();
        assert_eq!(csv_counts, 4);
    }

    #[test]
    fn svg_has_one_rect_per_nonempty_bin() {
        let h = Histogram::new(0.0, 3.0, 50, [0.1, 0.1, 1.0, 2.9]);
        let svg = h.to_svg("t <x>");
        assert_eq!(svg.matches("<rect").count(), 3);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("t &lt;x&gt;"));
    }

    #[test]
    fn emitted_files_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let reports = vec![report(&[0.0, 0.2]), report(&[0.4])];
        let pooled = pool_layers(&reports);
        assert_eq!(pooled.len(), 1);
        assert_eq!(pooled[0].filters.len(), 3);
        let a = emit_report(&pooled, 50, true, dir.path()).unwrap();
        let first: Vec<Vec<u8>> = a.iter().map(|p| std::fs::read(p).unwrap()).collect();
        let b = emit_report(&pooled, 50, true, dir.path()).unwrap();
        let second: Vec<Vec<u8>> = b.iter().map(|p| std::fs::read(p).unwrap()).collect();
        assert_eq!(first, second);
    }
}
