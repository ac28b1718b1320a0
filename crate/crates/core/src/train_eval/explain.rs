//! Attention-based cause identification.
//!
//! For each class, the input-side attention weights of its test windows are
//! collapsed into a per-feature importance profile (column mass, see
//! [`crate::attention::importance_profile`]) and the top-k channels are
//! ranked. By default only correctly classified windows contribute; classes
//! with no qualifying window are flagged and omitted.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;

use crate::attention::importance_profile_per_window;
use crate::data::{make_batches, Window};
use crate::error::{Error, Result};
use crate::model::{predictions, Mode, Model};
use crate::tensor::Graph;

/// Importance profile of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProfile {
    pub class: usize,
    /// Mean per-feature attention mass; sums to 1.
    pub importance: Vec<f64>,
    /// Feature indices by descending importance, `top_k` of them.
    pub top: Vec<usize>,
    /// Windows that contributed.
    pub window_count: usize,
}

#[derive(Debug, Clone)]
pub struct CauseReport {
    pub top_k: usize,
    pub correct_only: bool,
    pub num_features: usize,
    /// Indexed by class id; `None` when no window qualified.
    pub profiles: Vec<Option<ClassProfile>>,
}

/// Ranks feature indices by descending importance (ties toward the lower
/// index).
fn rank_features(importance: &[f64], top_k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..importance.len()).collect();
    idx.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    idx.truncate(top_k);
    idx
}

/// Aggregates per-class input-attention importance over the test windows.
pub fn explain(model: &Model, test: &[Window], batch_size: usize, top_k: usize, correct_only: bool) -> Result<CauseReport> {
    if test.is_empty() {
        return Err(Error::Contract("explain: empty test set".into()));
    }
    let nf = model.config.num_features;
    if top_k == 0 || top_k > nf {
        return Err(Error::Parameter(format!("explain: top_k {top_k} outside 1..={nf}")));
    }
    let classes = model.config.num_classes;
    let mut sums = vec![vec![0.0; nf]; classes];
    let mut counts = vec![0usize; classes];

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0); // untouched in eval mode
    for batch in make_batches(test, batch_size, false, &mut rng)? {
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch.inputs, Mode::Eval, &mut rng)?;
        let preds = predictions(&g.value(out.logits))?;
        let profiles = importance_profile_per_window(&g.value(out.attn_in))?;
        for ((&truth, &pred), profile) in batch.labels.iter().zip(&preds).zip(&profiles) {
            if truth >= classes {
                return Err(Error::Contract(format!("explain: label {truth} out of range")));
            }
            if !correct_only || truth == pred {
                for (s, &v) in sums[truth].iter_mut().zip(profile) {
                    *s += v;
                }
                counts[truth] += 1;
            }
        }
    }

    let profiles = sums
        .into_iter()
        .zip(&counts)
        .enumerate()
        .map(|(class, (sum, &count))| {
            if count == 0 {
                return None;
            }
            let importance: Vec<f64> = sum.iter().map(|v| v / count as f64).collect();
            let top = rank_features(&importance, top_k);
            Some(ClassProfile { class, importance, top, window_count: count })
        })
        .collect();

    Ok(CauseReport { top_k, correct_only, num_features: nf, profiles })
}

impl CauseReport {
    /// Classes that produced no profile (flagged rather than silently absent).
    pub fn omitted_classes(&self) -> Vec<usize> {
        self.profiles
            .iter()
            .enumerate()
            .filter_map(|(c, p)| p.is_none().then_some(c))
            .collect()
    }

    /// One CSV with a row per profiled class: `class,windows,f00..f{F-1}`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("class,windows");
        for i in 0..self.num_features {
            let _ = write!(s, ",f{i:02}");
        }
        s.push('\n');
        for profile in self.profiles.iter().flatten() {
            let _ = write!(s, "{},{}", profile.class, profile.window_count);
            for v in &profile.importance {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        fs::write(path, s)?;
        Ok(())
    }

    /// Numeric table: per class, the ranked top-k feature indices.
    pub fn table_string(&self) -> String {
        let mut s = String::from("class windows top_features\n");
        for (c, profile) in self.profiles.iter().enumerate() {
            match profile {
                Some(p) => {
                    let tops: Vec<String> =
                        p.top.iter().map(|&i| format!("f{i:02}={:.4}", p.importance[i])).collect();
                    let _ = writeln!(s, "{c} {} {}", p.window_count, tops.join(" "));
                }
                None => {
                    let _ = writeln!(s, "{c} 0 (no qualifying windows)");
                }
            }
        }
        s
    }

    /// One SVG heatmap per profiled class, named `class_NN.svg`.
    ///
    /// Layout: 13 cells per row, feature `j` at row `j / 13`, column
    /// `j % 13`; fill is a linear white-to-dark-blue scale over the profile's
    /// min..max range.
    pub fn write_heatmaps(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for profile in self.profiles.iter().flatten() {
            let path = dir.join(format!("class_{:02}.svg", profile.class));
            fs::write(&path, heatmap_svg(&profile.importance, profile.class))?;
            written.push(path);
        }
        Ok(written)
    }
}

const CELL: usize = 28;
const GAP: usize = 2;
const COLS: usize = 13;

fn heatmap_svg(importance: &[f64], class: usize) -> String {
    let n = importance.len();
    let rows = n.div_ceil(COLS);
    let width = COLS * (CELL + GAP) + GAP;
    let height = rows * (CELL + GAP) + GAP + 18;
    let min = importance.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = importance.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if max > min { max - min } else { 1.0 };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(s, r#"<text x="{GAP}" y="12" font-family="monospace" font-size="11">class {class} feature importance</text>"#);
    for (j, &v) in importance.iter().enumerate() {
        let t = (v - min) / span;
        // white (255,255,255) -> dark blue (8,48,107), linear
        let r = (255.0 + t * (8.0 - 255.0)).round() as u8;
        let gr = (255.0 + t * (48.0 - 255.0)).round() as u8;
        let b = (255.0 + t * (107.0 - 255.0)).round() as u8;
        let x = GAP + (j % COLS) * (CELL + GAP);
        let y = 18 + GAP + (j / COLS) * (CELL + GAP);
        let _ = writeln!(
            s,
            r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({r},{gr},{b})" stroke="#999" stroke-width="0.5"><title>f{j:02}: {v}</title></rect>"##
        );
        let tx = x + 2;
        let ty = y + CELL - 3;
        let text_fill = if t > 0.6 { "#eee" } else { "#333" };
        let _ = writeln!(
            s,
            r#"<text x="{tx}" y="{ty}" font-family="monospace" font-size="8" fill="{text_fill}">{j:02}</text>"#
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::random_windows;
    use crate::model::{ModelConfig, Pooling};
    use crate::seeding;

    fn tiny_model(classes: usize) -> Model {
        let config = ModelConfig {
            seq_len: 4,
            num_features: 6,
            hidden: 5,
            fc1: 6,
            fc2: 4,
            num_classes: classes,
            dropout: 0.0,
            pooling: Pooling::MeanOverTime,
        };
        Model::new(config, 3).unwrap()
    }

    #[test]
    fn frozen_zero_lambda_gives_uniform_profiles() {
        let mut model = tiny_model(3);
        model.registry.get_mut("lambda_in").unwrap().data_mut()[0] = 0.0;
        let mut rng = seeding::rng_for(5, "test");
        let windows = random_windows(12, 4, 6, 3, &mut rng);
        let report = explain(&model, &windows, 8, 3, false).unwrap();
        for profile in report.profiles.iter().flatten() {
            for &v in &profile.importance {
                assert!((v - 1.0 / 6.0).abs() < 0.02, "profile entry {v}");
            }
            let sum: f64 = profile.importance.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn top_k_count_and_ranking() {
        let ranked = rank_features(&[0.1, 0.4, 0.2, 0.3], 2);
        assert_eq!(ranked, vec![1, 3]);
        // ties resolve toward the lower index
        let tied = rank_features(&[0.3, 0.3, 0.4], 3);
        assert_eq!(tied, vec![2, 0, 1]);
    }

    #[test]
    fn class_without_windows_is_flagged() {
        let model = tiny_model(4);
        let mut rng = seeding::rng_for(6, "test");
        // only classes 0..3 present, class 3 absent
        let windows = random_windows(9, 4, 6, 3, &mut rng);
        let report = explain(&model, &windows, 8, 2, false).unwrap();
        assert!(report.omitted_classes().contains(&3));
        assert!(report.profiles[3].is_none());
    }

    #[test]
    fn files_are_written() {
        let model = tiny_model(3);
        let mut rng = seeding::rng_for(7, "test");
        let windows = random_windows(9, 4, 6, 3, &mut rng);
        let report = explain(&model, &windows, 8, 3, false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        report.write_csv(&dir.path().join("cause.csv")).unwrap();
        let files = report.write_heatmaps(dir.path()).unwrap();
        assert_eq!(files.len(), report.profiles.iter().flatten().count());
        let svg = fs::read_to_string(&files[0]).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("class 0"));
        let csv = fs::read_to_string(dir.path().join("cause.csv")).unwrap();
        assert!(csv.starts_with("class,windows,f00"));
        let table = report.table_string();
        assert!(table.contains("top_features"));
    }

    #[test]
    fn rejects_bad_top_k() {
        let model = tiny_model(3);
        let mut rng = seeding::rng_for(8, "test");
        let windows = random_windows(3, 4, 6, 3, &mut rng);
        assert!(explain(&model, &windows, 8, 0, false).is_err());
        assert!(explain(&model, &windows, 8, 7, false).is_err());
    }
}
