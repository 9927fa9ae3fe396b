//! Self-supervised uncertainty regressor: a bagged forest of regression
//! trees mapping single-generation features to the multi-generation
//! normalized entropy target.
//!
//! Tree `i` draws from RNG stream `i` of the model seed, so a model is a
//! pure function of (data, hyperparameters, seed) whatever the thread count.

pub(crate) mod cv;
mod tree;

use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cv::{
    cross_validate, cross_validate_pairs, fit_fold, grouped_kfold, verify_group_integrity, CvGrouping,
    CvOptions, CvResult, FoldAssignment, GenerationScore, PromptScore,
};
pub use tree::{Node, RegressionTree};

use crate::error::{Error, Result};
use crate::features::{FeatureVector, TrainingPair};
use crate::measures::TargetKind;
use crate::stats::{mean, stream_rng};
use tree::{BinnedMatrix, Grower};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestHyperparams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Fraction of features considered at each split.
    pub feature_subsample_ratio: f64,
    /// Bootstrap sample size as a fraction of the rows, drawn with replacement.
    pub bootstrap_row_fraction: f64,
    /// Upper bound on histogram bins per feature.
    pub max_bins: usize,
    pub seed: u64,
}

impl Default for ForestHyperparams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 8,
            min_samples_leaf: 5,
            feature_subsample_ratio: 0.8,
            bootstrap_row_fraction: 1.0,
            max_bins: 256,
            seed: 0,
        }
    }
}

impl ForestHyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidHyperparams(m.to_owned()));
        if self.n_trees == 0 {
            return bad("n_trees must be at least 1");
        }
        if !(self.feature_subsample_ratio > 0.0 && self.feature_subsample_ratio <= 1.0) {
            return bad("feature_subsample_ratio must be in (0, 1]");
        }
        if !(self.bootstrap_row_fraction > 0.0 && self.bootstrap_row_fraction.is_finite()) {
            return bad("bootstrap_row_fraction must be positive");
        }
        if self.max_bins < 2 {
            return bad("max_bins must be at least 2");
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Row-major design matrix with targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_rows: usize,
    pub n_cols: usize,
    pub features: Vec<f64>,
    pub targets: Vec<f64>,
    pub config_digest: String,
}

impl Dataset {
    pub fn from_rows(rows: &[Vec<f64>], targets: &[f64]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        if rows.len() != targets.len() {
            return Err(Error::LengthMismatch(rows.len(), targets.len()));
        }
        let n_cols = rows[0].len();
        if let Some(r) = rows.iter().find(|r| r.len() != n_cols) {
            return Err(Error::LengthMismatch(r.len(), n_cols));
        }
        Ok(Self {
            n_rows: rows.len(),
            n_cols,
            features: rows.concat(),
            targets: targets.to_vec(),
            config_digest: String::new(),
        })
    }

    /// Rejects pairs whose vectors come from different feature configs.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = &'a TrainingPair>) -> Result<Self> {
        let mut it = pairs.into_iter().peekable();
        let first = it.peek().ok_or(Error::EmptyTrainingSet)?;
        let digest = first.features.config_digest.clone();
        let n_cols = first.features.values.len();
        let mut features = Vec::new();
        let mut targets = Vec::new();
        for p in it {
            if p.features.config_digest != digest {
                return Err(Error::ConfigMismatch(format!(
                    "training pairs mix feature configs {digest} and {}",
                    p.features.config_digest
                )));
            }
            if p.features.values.len() != n_cols {
                return Err(Error::LengthMismatch(p.features.values.len(), n_cols));
            }
            features.extend_from_slice(&p.features.values);
            targets.push(p.target);
        }
        Ok(Self {
            n_rows: targets.len(),
            n_cols,
            features,
            targets,
            config_digest: digest,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_cols..(i + 1) * self.n_cols]
    }

    /// Copies the given rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let mut features = Vec::with_capacity(rows.len() * self.n_cols);
        for &r in rows {
            features.extend_from_slice(self.row(r));
        }
        Self {
            n_rows: rows.len(),
            n_cols: self.n_cols,
            features,
            targets: rows.iter().map(|&r| self.targets[r]).collect(),
            config_digest: self.config_digest.clone(),
        }
    }
}

/// Provenance of a fitted model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub trace_set_hash: Option<String>,
    pub pair_count: usize,
    pub prompt_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub format_version: u32,
    pub hyperparams: ForestHyperparams,
    pub config_digest: String,
    pub feature_count: usize,
    pub target_kind: Option<TargetKind>,
    pub training_manifest: TrainingManifest,
    pub trees: Vec<RegressionTree>,
}

fn grow(
    binned: &BinnedMatrix,
    targets: &[f64],
    rows: Vec<u32>,
    hp: &ForestHyperparams,
    rng: &mut impl Rng,
) -> RegressionTree {
    Grower::new(binned, targets, hp, rng).grow(rows)
}

/// Fits a single tree on all rows of `data` (no bootstrap).
pub fn fit_tree(data: &Dataset, hp: &ForestHyperparams, rng: &mut impl Rng) -> Result<RegressionTree> {
    if data.n_rows == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    hp.validate()?;
    let binned = BinnedMatrix::new(&data.features, data.n_rows, data.n_cols, hp.max_bins);
    let rows = (0..data.n_rows as u32).collect();
    Ok(grow(&binned, &data.targets, rows, hp, rng))
}

pub fn fit_forest(data: &Dataset, hp: &ForestHyperparams) -> Result<ForestModel> {
    if data.n_rows == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    hp.validate()?;
    let binned = BinnedMatrix::new(&data.features, data.n_rows, data.n_cols, hp.max_bins);
    let n = data.n_rows;
    let sample = ((hp.bootstrap_row_fraction * n as f64).round() as usize).max(1);
    let trees = (0..hp.n_trees)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(hp.seed, i as u64);
            let rows: Vec<u32> = (0..sample).map(|_| rng.random_range(0..n) as u32).collect();
            grow(&binned, &data.targets, rows, hp, &mut rng)
        })
        .collect();
    Ok(ForestModel {
        format_version: MODEL_FORMAT_VERSION,
        hyperparams: hp.clone(),
        config_digest: data.config_digest.clone(),
        feature_count: data.n_cols,
        target_kind: None,
        training_manifest: TrainingManifest {
            trace_set_hash: None,
            pair_count: n,
            prompt_count: 0,
        },
        trees,
    })
}

impl ForestModel {
    /// Unclamped mean of tree outputs, summed in sorted order so the result
    /// does not depend on tree order.
    pub fn predict_raw(&self, x: &[f64]) -> f64 {
        let mut outputs: Vec<f64> = self.trees.iter().map(|t| t.predict(x)).collect();
        outputs.sort_by(f64::total_cmp);
        mean(&outputs)
    }

    /// Mean tree output clamped to `[0, 1]`.
    pub fn predict_values(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.feature_count {
            return Err(Error::ConfigMismatch(format!(
                "vector has {} features, model expects {}",
                x.len(),
                self.feature_count
            )));
        }
        Ok(self.predict_raw(x).clamp(0.0, 1.0))
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format_version: u32,
        }
        let header: Header = serde_json::from_slice(bytes)?;
        if header.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::ModelVersion {
                found: header.format_version,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read(path)?)
    }
}

/// Scores one feature vector; the vector must come from the model's config.
pub fn predict(model: &ForestModel, fv: &FeatureVector) -> Result<f64> {
    if !model.config_digest.is_empty() && fv.config_digest != model.config_digest {
        return Err(Error::ConfigMismatch(format!(
            "vector digest {} differs from model digest {}",
            fv.config_digest, model.config_digest
        )));
    }
    model.predict_values(&fv.values)
}

/// Scores many vectors in parallel, preserving order.
pub fn predict_many(model: &ForestModel, fvs: &[FeatureVector]) -> Result<Vec<f64>> {
    fvs.par_iter().map(|fv| predict(model, fv)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hp(n_trees: usize) -> ForestHyperparams {
        ForestHyperparams {
            n_trees,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn constant_target_gives_single_leaf() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * 7 % 5) as f64]).collect();
        let data = Dataset::from_rows(&rows, &[0.4; 20]).unwrap();
        let tree = fit_tree(&data, &hp(1), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(tree.nodes, vec![Node::Leaf { value: 0.4 }]);
    }

    #[test]
    fn depth_zero_is_global_mean() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let targets: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        let data = Dataset::from_rows(&rows, &targets).unwrap();
        let params = ForestHyperparams {
            max_depth: 0,
            ..hp(1)
        };
        let tree = fit_tree(&data, &params, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(tree.nodes.len(), 1);
        assert!((tree.predict(&[3.0]) - 0.45).abs() < 1e-15);
    }

    /// Exhaustive search over every midpoint threshold of a 1-D problem.
    fn brute_force_split(xs: &[f64], ys: &[f64], min_leaf: usize) -> f64 {
        let mut uniq = xs.to_vec();
        uniq.sort_by(f64::total_cmp);
        uniq.dedup();
        let sse = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|y| (y - m).powi(2)).sum::<f64>()
        };
        let mut best = (f64::INFINITY, f64::NAN);
        for w in uniq.windows(2) {
            let t = (w[0] + w[1]) / 2.0;
            let left: Vec<f64> = xs.iter().zip(ys).filter(|(x, _)| **x <= t).map(|(_, y)| *y).collect();
            let right: Vec<f64> = xs.iter().zip(ys).filter(|(x, _)| **x > t).map(|(_, y)| *y).collect();
            if left.len() < min_leaf || right.len() < min_leaf {
                continue;
            }
            let cost = sse(&left) + sse(&right);
            if cost < best.0 {
                best = (cost, t);
            }
        }
        best.1
    }

    #[test]
    fn step_function_split_matches_brute_force() {
        let xs = [-2.5, -1.75, -0.5, -0.25, 0.3, 0.9, 1.4, 2.0];
        let ys: Vec<f64> = xs.iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect();
        let rows: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        let data = Dataset::from_rows(&rows, &ys).unwrap();
        let params = ForestHyperparams {
            max_depth: 1,
            min_samples_leaf: 1,
            feature_subsample_ratio: 1.0,
            ..hp(1)
        };
        let tree = fit_tree(&data, &params, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let oracle = brute_force_split(&xs, &ys, 1);
        match &tree.nodes[0] {
            Node::Split { threshold, left, right, .. } => {
                assert_eq!(*threshold, oracle);
                assert!(*threshold > -0.25 && *threshold < 0.3);
                assert_eq!(tree.nodes[*left], Node::Leaf { value: 0.0 });
                assert_eq!(tree.nodes[*right], Node::Leaf { value: 1.0 });
            }
            other => panic!("expected split, got {other:?}"),
        }
    }

    #[test]
    fn noisy_split_matches_brute_force() {
        let xs: Vec<f64> = (0..40).map(|i| ((i * 17) % 40) as f64 * 0.1).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| (x * 1.3).sin() + 0.2 * x).collect();
        let rows: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        let data = Dataset::from_rows(&rows, &ys).unwrap();
        let params = ForestHyperparams {
            max_depth: 1,
            min_samples_leaf: 3,
            feature_subsample_ratio: 1.0,
            ..hp(1)
        };
        let tree = fit_tree(&data, &params, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let Node::Split { threshold, .. } = tree.nodes[0] else {
            panic!("expected split")
        };
        assert_eq!(threshold, brute_force_split(&xs, &ys, 3));
    }

    #[test]
    fn forest_on_constant_target_predicts_constant() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64, (i % 3) as f64]).collect();
        let data = Dataset::from_rows(&rows, &[0.25; 30]).unwrap();
        let model = fit_forest(&data, &hp(10)).unwrap();
        for r in &rows {
            assert_eq!(model.predict_values(r).unwrap(), 0.25);
        }
    }

    #[test]
    fn fit_is_thread_count_independent() {
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos(), (i % 7) as f64])
            .collect();
        let targets: Vec<f64> = rows.iter().map(|r| (r[0] + r[1]).abs() / 2.0).collect();
        let data = Dataset::from_rows(&rows, &targets).unwrap();
        let fit_in = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| fit_forest(&data, &hp(20)).unwrap())
        };
        let a = fit_in(1);
        let b = fit_in(4);
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn model_json_round_trips_losslessly() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 / 7.0, (i as f64).sqrt()]).collect();
        let targets: Vec<f64> = rows.iter().map(|r| (r[0] / 8.0).min(1.0)).collect();
        let data = Dataset::from_rows(&rows, &targets).unwrap();
        let model = fit_forest(&data, &hp(5)).unwrap();
        let back = ForestModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn mismatched_version_is_refused() {
        let model = ForestModel {
            format_version: 99,
            hyperparams: hp(1),
            config_digest: String::new(),
            feature_count: 1,
            target_kind: None,
            training_manifest: TrainingManifest::default(),
            trees: vec![RegressionTree::leaf(0.5)],
        };
        let bytes = serde_json::to_vec(&model).unwrap();
        assert!(matches!(
            ForestModel::from_json(&bytes),
            Err(Error::ModelVersion { found: 99, .. })
        ));
    }

    fn leaf_forest(values: &[f64]) -> ForestModel {
        ForestModel {
            format_version: MODEL_FORMAT_VERSION,
            hyperparams: hp(values.len()),
            config_digest: "d".into(),
            feature_count: 1,
            target_kind: Some(TargetKind::Pe),
            training_manifest: TrainingManifest::default(),
            trees: values.iter().map(|&v| RegressionTree::leaf(v)).collect(),
        }
    }

    fn fv(digest: &str) -> FeatureVector {
        FeatureVector {
            values: vec![0.0],
            config_digest: digest.into(),
            prompt_id: "p".into(),
            gen_index: 0,
        }
    }

    #[test]
    fn predictions_are_tree_means_clamped() {
        assert_eq!(predict(&leaf_forest(&[0.3, 0.3, 0.3]), &fv("d")).unwrap(), 0.3);
        assert_eq!(predict(&leaf_forest(&[1.07]), &fv("d")).unwrap(), 1.0);
        assert_eq!(predict(&leaf_forest(&[-0.2]), &fv("d")).unwrap(), 0.0);
        let a = predict(&leaf_forest(&[0.25, 0.5, 0.125]), &fv("d")).unwrap();
        let b = predict(&leaf_forest(&[0.125, 0.25, 0.5]), &fv("d")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn digest_mismatch_is_rejected() {
        assert!(matches!(
            predict(&leaf_forest(&[0.3]), &fv("other")),
            Err(Error::ConfigMismatch(_))
        ));
    }

    #[test]
    fn empty_training_set_is_an_error() {
        assert!(matches!(Dataset::from_rows(&[], &[]), Err(Error::EmptyTrainingSet)));
    }
}
