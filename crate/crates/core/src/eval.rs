//! Ranking metrics, the k-fold cross-validation driver with its ablation
//! variants, and top-k disease recommendation.

use std::cmp::Ordering;
use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_eval_set, make_train_matrix, split_folds, AssociationMatrix, Dataset};
use crate::error::{Error, Result};
use crate::featurize::{featurize_all_cached, FeatureConfig, ViewVectors};
use crate::model::{reconstruction_error, Latents, ModelParams, TowerInputs};
use crate::train::{fit, EpochRecord, TrainConfig};

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Metric(format!("score {i} is NaN")));
    }
    if let Some(i) = labels.iter().position(|&l| l > 1) {
        return Err(Error::Metric(format!("label {i} is not 0/1")));
    }
    Ok(())
}

/// Indices sorted by descending score, ties by ascending index.
fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    order
}

/// Rank-sum AUC with midranks for ties: `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("AUC needs at least one positive and one negative".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut pos_rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1..=end share their mean.
        let midrank = (start + 1 + end) as f64 / 2.0;
        let tied_pos = order[start..end].iter().filter(|&&i| labels[i] == 1).count();
        pos_rank_sum += midrank * tied_pos as f64;
        start = end;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision: mean over positives of the precision at their rank,
/// ranking by descending score with ties broken by original index.
pub fn aupr(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 {
        return Err(Error::Metric("AUPR needs at least one positive".into()));
    }
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in descending_order(scores).iter().enumerate() {
        if labels[i] == 1 {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / pos as f64)
}

fn f1_from_counts(tp: usize, fp: usize, positives: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / positives as f64;
    2.0 * precision * recall / (precision + recall)
}

/// F1 of the predictions `score ≥ threshold`; 0 when nothing is predicted
/// positive or nothing predicted is correct.
pub fn f1(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check_inputs(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let (mut tp, mut fp) = (0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        if s >= threshold {
            if l == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    Ok(f1_from_counts(tp, fp, positives))
}

/// Best F1 over every distinct score used as threshold, with that threshold.
/// The lowest threshold wins ties; with no achievable positive F1 the
/// result is `(0, F1_THRESHOLD)`.
pub fn best_f1(scores: &[f64], labels: &[u8]) -> Result<(f64, f64)> {
    check_inputs(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let order = descending_order(scores);
    let (mut tp, mut fp) = (0, 0);
    let mut best = (0.0, F1_THRESHOLD);
    let mut k = 0;
    while k < order.len() {
        let threshold = scores[order[k]];
        while k < order.len() && scores[order[k]] == threshold {
            if labels[order[k]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let f = f1_from_counts(tp, fp, positives);
        if f >= best.0 && f > 0.0 {
            best = (f, threshold);
        }
    }
    Ok(best)
}

/// Default decision threshold on predicted probabilities.
pub const F1_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Full model.
    Ssldr,
    /// Without the auxiliary task.
    SsldrM,
    /// With plain decoders.
    SsldrA,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Ssldr => "ssldr",
            Variant::SsldrM => "ssldr_m",
            Variant::SsldrA => "ssldr_a",
        }
    }

    /// The training configuration this variant actually runs with.
    pub fn apply(self, config: &TrainConfig) -> TrainConfig {
        let mut c = config.clone();
        match self {
            Variant::Ssldr => {}
            Variant::SsldrM => c.alpha = 0.0,
            Variant::SsldrA => c.beta = 0.0,
        }
        c.aux_enabled = c.aux_enabled && c.alpha > 0.0;
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssldr" => Ok(Variant::Ssldr),
            "ssldr_m" => Ok(Variant::SsldrM),
            "ssldr_a" => Ok(Variant::SsldrA),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected ssldr, ssldr_m or ssldr_a)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub auc: f64,
    pub aupr: f64,
    pub f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_f1_threshold: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub auc: f64,
    pub aupr: f64,
    pub f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub variant: Variant,
    pub folds: Vec<FoldMetrics>,
    pub mean: Aggregate,
    /// Sample standard deviation across folds (0 for a single fold).
    pub std: Aggregate,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl MetricReport {
    pub fn from_folds(variant: Variant, folds: Vec<FoldMetrics>) -> Result<Self> {
        if folds.is_empty() {
            return Err(Error::Metric("report needs at least one fold".into()));
        }
        let column = |f: fn(&FoldMetrics) -> f64| mean_std(&folds.iter().map(f).collect::<Vec<_>>());
        let (auc_m, auc_s) = column(|f| f.auc);
        let (aupr_m, aupr_s) = column(|f| f.aupr);
        let (f1_m, f1_s) = column(|f| f.f1);
        let best: Option<Vec<f64>> = folds.iter().map(|f| f.best_f1).collect();
        let best = best.map(|b| mean_std(&b));
        Ok(Self {
            variant,
            mean: Aggregate {
                auc: auc_m,
                aupr: aupr_m,
                f1: f1_m,
                best_f1: best.map(|b| b.0),
            },
            std: Aggregate {
                auc: auc_s,
                aupr: aupr_s,
                f1: f1_s,
                best_f1: best.map(|b| b.1),
            },
            folds,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One row per fold followed by `mean` and `std` rows.
    pub fn to_tsv(&self) -> String {
        let sweep = self.mean.best_f1.is_some();
        let mut out = String::from("fold\tauc\taupr\tf1");
        if sweep {
            out.push_str("\tbest_f1\tbest_f1_threshold");
        }
        out.push('\n');
        for f in &self.folds {
            let _ = write!(out, "{}\t{}\t{}\t{}", f.fold, f.auc, f.aupr, f.f1);
            if sweep {
                let _ = write!(
                    out,
                    "\t{}\t{}",
                    f.best_f1.unwrap_or(0.0),
                    f.best_f1_threshold.unwrap_or(f64::NAN)
                );
            }
            out.push('\n');
        }
        for (label, a) in [("mean", &self.mean), ("std", &self.std)] {
            let _ = write!(out, "{label}\t{}\t{}\t{}", a.auc, a.aupr, a.f1);
            if sweep {
                let _ = write!(out, "\t{}\t", a.best_f1.unwrap_or(0.0));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvOptions {
    pub num_folds: usize,
    /// Worker threads for folds; 0 or 1 runs them in order.
    pub parallel_folds: usize,
    /// Also report the best F1 over all thresholds.
    pub f1_sweep: bool,
    pub features: FeatureConfig,
    pub feature_cache: Option<PathBuf>,
}

impl CvOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            num_folds: 10,
            parallel_folds: 1,
            f1_sweep: false,
            features: FeatureConfig::with_seed(seed),
            feature_cache: None,
        }
    }
}

/// How often each cell was evaluated, by label, across all folds.
#[derive(Debug, Clone, PartialEq)]
pub struct Coverage {
    pub num_folds: usize,
    pub positive_hits: Vec<u32>,
    pub negative_hits: Vec<u32>,
    pub num_diseases: usize,
}

impl Coverage {
    fn new(num_drugs: usize, num_diseases: usize, num_folds: usize) -> Self {
        Self {
            num_folds,
            positive_hits: vec![0; num_drugs * num_diseases],
            negative_hits: vec![0; num_drugs * num_diseases],
            num_diseases,
        }
    }

    fn record(&mut self, pairs: &[(usize, usize, u8)]) {
        for &(i, j, label) in pairs {
            let cell = i * self.num_diseases + j;
            if label == 1 {
                self.positive_hits[cell] += 1;
            } else {
                self.negative_hits[cell] += 1;
            }
        }
    }

    /// Every positive tested exactly once as a positive, every zero tested
    /// in every fold as a negative.
    pub fn check(&self, r: &AssociationMatrix) -> Result<()> {
        for i in 0..r.num_drugs() {
            for j in 0..r.num_diseases() {
                let cell = i * self.num_diseases + j;
                let (p, n) = (self.positive_hits[cell], self.negative_hits[cell]);
                let ok = if r.get(i, j) {
                    p == 1 && n == 0
                } else {
                    p == 0 && n as usize == self.num_folds
                };
                if !ok {
                    return Err(Error::Validation(format!(
                        "cell ({i}, {j}) evaluated {p} times as positive and {n} times as negative"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub metrics: FoldMetrics,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    /// Unweighted reconstruction error on the training inputs after the
    /// last completed epoch.
    pub train_reconstruction: f64,
    pub eval_pairs: Vec<(usize, usize, u8)>,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub report: MetricReport,
    pub folds: Vec<FoldOutcome>,
    pub coverage: Coverage,
    pub config: TrainConfig,
}

/// `num_folds`-fold cross-validation of one variant. Fold `f` trains with
/// seed `config.seed + f`, so running folds in parallel changes nothing.
pub fn cross_validate(
    dataset: &Dataset,
    config: &TrainConfig,
    variant: Variant,
    options: &CvOptions,
) -> Result<CvOutcome> {
    let config = variant.apply(config);
    config.validate()?;
    let plan = split_folds(dataset, options.num_folds, config.seed)?;
    let views = if config.aux_enabled {
        Some(featurize_all_cached(
            dataset,
            &options.features,
            options.feature_cache.as_deref(),
        )?)
    } else {
        None
    };

    let run_fold = |fold: usize| -> Result<FoldOutcome> {
        let cfg = TrainConfig {
            seed: config.seed.wrapping_add(fold as u64),
            ..config.clone()
        };
        run_one_fold(dataset, &plan, fold, views.as_ref(), &cfg, options.f1_sweep)
            .map_err(|e| Error::Fold { fold, source: Box::new(e) })
    };
    let results: Vec<Result<FoldOutcome>> = if options.parallel_folds > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.parallel_folds)
            .build()
            .map_err(|e| Error::Config(format!("cannot start fold workers: {e}")))?;
        pool.install(|| (0..options.num_folds).into_par_iter().map(run_fold).collect())
    } else {
        (0..options.num_folds).map(run_fold).collect()
    };
    let folds = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut coverage = Coverage::new(dataset.num_drugs(), dataset.num_diseases(), options.num_folds);
    for f in &folds {
        coverage.record(&f.eval_pairs);
    }
    let report = MetricReport::from_folds(variant, folds.iter().map(|f| f.metrics).collect())?;
    Ok(CvOutcome {
        report,
        folds,
        coverage,
        config,
    })
}

fn run_one_fold(
    dataset: &Dataset,
    plan: &crate::data::FoldPlan,
    fold: usize,
    views: Option<&ViewVectors>,
    cfg: &TrainConfig,
    f1_sweep: bool,
) -> Result<FoldOutcome> {
    let train_matrix = make_train_matrix(dataset, plan, fold)?;
    let eval_set = make_eval_set(dataset, plan, fold)?;
    let state = fit(&train_matrix, &dataset.drug_sim, views, cfg)?;
    let latents = Latents::compute(&state.params, &TowerInputs::new(&train_matrix));
    let scores: Vec<f64> = eval_set.pairs.iter().map(|&(i, j, _)| latents.score(i, j)).collect();
    let labels = eval_set.labels();
    let (best, threshold) = if f1_sweep {
        let (b, t) = best_f1(&scores, &labels)?;
        (Some(b), Some(t))
    } else {
        (None, None)
    };
    Ok(FoldOutcome {
        metrics: FoldMetrics {
            fold,
            auc: auc(&scores, &labels)?,
            aupr: aupr(&scores, &labels)?,
            f1: f1(&scores, &labels, F1_THRESHOLD)?,
            best_f1: best,
            best_f1_threshold: threshold,
        },
        train_reconstruction: reconstruction_error(&state.final_params, &state.inputs),
        history: state.history,
        best_epoch: state.best_epoch,
        eval_pairs: eval_set.pairs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recommendation {
    pub drug_id: String,
    /// `(disease_id, score)`, best first.
    pub items: Vec<(String, f64)>,
}

impl Recommendation {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("rank\tdisease_id\tscore\n");
        for (rank, (id, score)) in self.items.iter().enumerate() {
            let _ = writeln!(out, "{}\t{id}\t{score}", rank + 1);
        }
        out
    }
}

/// Top `n` diseases not yet associated with `drug_id`, by predicted score;
/// ties keep disease file order.
pub fn recommend_topk(params: &ModelParams, dataset: &Dataset, drug_id: &str, n: usize) -> Result<Recommendation> {
    if n == 0 {
        return Err(Error::Input("number of recommendations must be ≥ 1".into()));
    }
    let i = dataset
        .drug_index(drug_id)
        .ok_or_else(|| Error::Lookup(format!("unknown drug id `{drug_id}`")))?;
    if params.num_drugs() != dataset.num_drugs() || params.num_diseases() != dataset.num_diseases() {
        return Err(Error::Dimension {
            op: "recommend",
            left: (params.num_drugs(), params.num_diseases()),
            right: (dataset.num_drugs(), dataset.num_diseases()),
        });
    }
    let inputs = TowerInputs::new(&dataset.associations);
    let latents = Latents::compute(params, &inputs);
    let mut candidates: Vec<(usize, f64)> = (0..dataset.num_diseases())
        .filter(|&j| !dataset.associations.get(i, j))
        .map(|j| (j, latents.score(i, j)))
        .collect();
    candidates.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    candidates.truncate(n);
    Ok(Recommendation {
        drug_id: drug_id.to_string(),
        items: candidates
            .into_iter()
            .map(|(j, s)| (dataset.disease_ids[j].clone(), s))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DrugText, SynthConfig};
    use crate::model::{Hyper, ModelParams};
    use crate::numerics::{logistic, Matrix};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Fraction of (positive, negative) pairs ordered correctly, ties ½.
    fn pair_counting_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li == 1 && lj == 0 {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    /// Walks the ranking item by item, tracking precision and recall, and
    /// adds precision times each recall increment.
    fn rank_walk_ap(scores: &[f64], labels: &[u8]) -> f64 {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        // Selection sort: highest score first, lowest index among equals.
        for a in 0..idx.len() {
            let mut best = a;
            for b in (a + 1)..idx.len() {
                let (x, y) = (idx[b], idx[best]);
                if scores[x] > scores[y] || (scores[x] == scores[y] && x < y) {
                    best = b;
                }
            }
            idx.swap(a, best);
        }
        let total = labels.iter().filter(|&&l| l == 1).count() as f64;
        let (mut tp, mut prev_recall, mut ap) = (0.0, 0.0, 0.0);
        for (seen, &i) in idx.iter().enumerate() {
            if labels[i] == 1 {
                tp += 1.0;
            }
            let precision = tp / (seen + 1) as f64;
            let recall = tp / total;
            ap += precision * (recall - prev_recall);
            prev_recall = recall;
        }
        ap
    }

    fn random_case(rng: &mut ChaCha8Rng, n: usize, coarse: bool) -> (Vec<f64>, Vec<u8>) {
        loop {
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    if coarse {
                        rng.random_range(0..5) as f64 / 4.0
                    } else {
                        rng.random::<f64>()
                    }
                })
                .collect();
            let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
            if labels.contains(&1) && labels.contains(&0) {
                return (scores, labels);
            }
        }
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.4; 5], &[1, 0, 1, 0, 0]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::Metric(_))));
        assert!(matches!(auc(&[0.1, f64::NAN], &[1, 0]), Err(Error::Metric(_))));
        assert!(matches!(auc(&[0.1], &[1, 0]), Err(Error::Metric(_))));
    }

    #[test]
    fn auc_matches_pair_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for coarse in [false, true] {
            let (s, l) = random_case(&mut rng, 30, coarse);
            assert!((auc(&s, &l).unwrap() - pair_counting_auc(&s, &l)).abs() < 1e-12);
        }
    }

    #[test]
    fn aupr_examples() {
        assert_eq!(aupr(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        let n = 8;
        let scores: Vec<f64> = (0..n).map(|i| 1.0 - i as f64 / n as f64).collect();
        let mut labels = vec![0u8; n];
        labels[n - 1] = 1;
        assert!((aupr(&scores, &labels).unwrap() - 1.0 / n as f64).abs() < 1e-15);
        assert!(matches!(aupr(&[0.3, 0.2], &[0, 0]), Err(Error::Metric(_))));
    }

    #[test]
    fn aupr_breaks_ties_by_index() {
        assert_eq!(aupr(&[0.5, 0.5], &[1, 0]).unwrap(), 1.0);
        assert_eq!(aupr(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn aupr_matches_rank_walk() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for coarse in [false, true] {
            let (s, l) = random_case(&mut rng, 30, coarse);
            assert!((aupr(&s, &l).unwrap() - rank_walk_ap(&s, &l)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn ranking_metrics_ignore_monotone_transforms(seed in any::<u64>(), n in 2usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (s, l) = random_case(&mut rng, n, seed % 2 == 0);
            let affine: Vec<f64> = s.iter().map(|x| 2.0 * x + 1.0).collect();
            let squashed: Vec<f64> = s.iter().map(|&x| logistic(x)).collect();
            for t in [&affine, &squashed] {
                prop_assert_eq!(auc(&s, &l).unwrap(), auc(t, &l).unwrap());
                prop_assert_eq!(aupr(&s, &l).unwrap(), aupr(t, &l).unwrap());
            }
        }

        #[test]
        fn auc_of_negated_scores_complements(seed in any::<u64>(), n in 2usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (s, l) = random_case(&mut rng, n, false);
            let neg: Vec<f64> = s.iter().map(|x| -x).collect();
            prop_assert!((auc(&s, &l).unwrap() + auc(&neg, &l).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn best_f1_matches_threshold_scan(seed in any::<u64>(), n in 2usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (s, l) = random_case(&mut rng, n, seed % 2 == 0);
            let brute = s.iter().map(|&t| f1(&s, &l, t).unwrap()).fold(0.0, f64::max);
            let (best, threshold) = best_f1(&s, &l).unwrap();
            prop_assert!((best - brute).abs() < 1e-12);
            prop_assert!((f1(&s, &l, threshold).unwrap() - best).abs() < 1e-12);
        }
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1(&[0.9, 0.8, 0.1], &[1, 1, 0], 0.5).unwrap(), 1.0);
        assert_eq!(f1(&[0.2, 0.3, 0.1], &[1, 1, 0], 0.5).unwrap(), 0.0);
        // TP = 2, FP = 1, FN = 1.
        let f = f1(&[0.9, 0.8, 0.7, 0.2, 0.1], &[1, 1, 0, 1, 0], 0.5).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1(&[0.9, 0.8], &[0, 0], 0.5).unwrap(), 0.0);
    }

    #[test]
    fn report_aggregates_are_fold_means() {
        let folds: Vec<FoldMetrics> = (0..4)
            .map(|f| FoldMetrics {
                fold: f,
                auc: 0.7 + 0.05 * f as f64,
                aupr: 0.1 * (f + 1) as f64,
                f1: 0.2,
                best_f1: None,
                best_f1_threshold: None,
            })
            .collect();
        let r = MetricReport::from_folds(Variant::Ssldr, folds.clone()).unwrap();
        let mean_auc = folds.iter().map(|f| f.auc).sum::<f64>() / 4.0;
        assert!((r.mean.auc - mean_auc).abs() < 1e-12);
        assert!((r.mean.aupr - 0.25).abs() < 1e-12);
        assert_eq!(r.std.f1, 0.0);
        let sd = (folds.iter().map(|f| (f.aupr - 0.25).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert!((r.std.aupr - sd).abs() < 1e-12);
        assert!(r.mean.best_f1.is_none());

        let back: MetricReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        let tsv = r.to_tsv();
        assert_eq!(tsv.lines().count(), 1 + 4 + 2);
        assert!(tsv.lines().nth(5).unwrap().starts_with("mean\t"));
        assert!(MetricReport::from_folds(Variant::Ssldr, vec![]).is_err());
    }

    #[test]
    fn variants_parse_and_apply() {
        for v in [Variant::Ssldr, Variant::SsldrM, Variant::SsldrA] {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("full".parse::<Variant>().is_err());
        let base = TrainConfig::default();
        let m = Variant::SsldrM.apply(&base);
        assert_eq!((m.alpha, m.aux_enabled), (0.0, false));
        let a = Variant::SsldrA.apply(&base);
        assert_eq!((a.beta, a.alpha, a.aux_enabled), (0.0, base.alpha, true));
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            k: 8,
            encoder_hidden: 16,
            max_epochs: 5,
            learning_rate: 0.01,
            ..TrainConfig::default()
        }
    }

    fn quick_options(seed: u64, folds: usize) -> CvOptions {
        let mut o = CvOptions::new(seed);
        o.num_folds = folds;
        o.features.skipgram.dim = 16;
        o.features.skipgram.epochs = 2;
        o
    }

    #[test]
    fn cross_validation_covers_every_cell() {
        let syn = SynthConfig::new(40, 30, 0.05, 4, 1).generate().unwrap();
        let out = cross_validate(&syn.dataset, &quick(), Variant::Ssldr, &quick_options(1, 5)).unwrap();
        assert_eq!(out.report.folds.len(), 5);
        out.coverage.check(&syn.dataset.associations).unwrap();
        let mut broken = out.coverage.clone();
        broken.negative_hits[0] += 1;
        assert!(broken.check(&syn.dataset.associations).is_err());
    }

    #[test]
    fn main_only_variant_equals_full_model_without_aux_weight() {
        let syn = SynthConfig::new(40, 30, 0.05, 4, 2).generate().unwrap();
        let cfg = TrainConfig { alpha: 0.0, ..quick() };
        let opts = quick_options(2, 3);
        let full = cross_validate(&syn.dataset, &cfg, Variant::Ssldr, &opts).unwrap();
        let main = cross_validate(&syn.dataset, &cfg, Variant::SsldrM, &opts).unwrap();
        assert_eq!(full.report.folds, main.report.folds);
    }

    #[test]
    fn parallel_folds_do_not_change_results() {
        let syn = SynthConfig::new(40, 30, 0.05, 4, 3).generate().unwrap();
        let mut opts = quick_options(3, 4);
        opts.f1_sweep = true;
        let serial = cross_validate(&syn.dataset, &quick(), Variant::Ssldr, &opts).unwrap();
        opts.parallel_folds = 3;
        let parallel = cross_validate(&syn.dataset, &quick(), Variant::Ssldr, &opts).unwrap();
        assert_eq!(serial.report.to_json(), parallel.report.to_json());
        assert!(serial.report.folds.iter().all(|f| f.best_f1.unwrap() >= f.f1));
    }

    #[test]
    fn fold_failures_name_the_fold() {
        // Three positives in three folds leave two training positives, too
        // few to hold any out for validation.
        let n = 4;
        let ds = Dataset::new(
            (0..n).map(|i| format!("D{i}")).collect(),
            (0..n).map(|j| format!("S{j}")).collect(),
            AssociationMatrix::from_pairs(n, n, &[(0, 1), (1, 2), (2, 3)]),
            Matrix::identity(n),
            Matrix::identity(n),
            (0..n)
                .map(|_| DrugText {
                    smiles: "CCO".into(),
                    inchi: "InChI=1S/C2H6O".into(),
                })
                .collect(),
        )
        .unwrap();
        let cfg = TrainConfig { aux_enabled: false, ..quick() };
        let err = cross_validate(&ds, &cfg, Variant::Ssldr, &quick_options(0, 3)).unwrap_err();
        assert!(matches!(err, Error::Fold { fold: 0, .. }), "{err}");
    }

    #[test]
    fn recommendations_exclude_known_and_are_sorted() {
        let syn = SynthConfig::new(30, 20, 0.1, 4, 4).generate().unwrap();
        let ds = &syn.dataset;
        let params = ModelParams::init(30, 20, None, Hyper { k: 4, hidden: 8, ..Hyper::default() }, 4).unwrap();
        let drug = (0..30).max_by_key(|&i| (0..20).filter(|&j| ds.associations.get(i, j)).count()).unwrap();
        let known = (0..20).filter(|&j| ds.associations.get(drug, j)).count();
        let rec = recommend_topk(&params, ds, &ds.drug_ids[drug], 100).unwrap();
        assert_eq!(rec.items.len(), 20 - known);
        assert!(rec.items.windows(2).all(|w| w[0].1 >= w[1].1));
        for (id, _) in &rec.items {
            let j = ds.disease_ids.iter().position(|d| d == id).unwrap();
            assert!(!ds.associations.get(drug, j));
        }
        let top = recommend_topk(&params, ds, &ds.drug_ids[drug], 3).unwrap();
        assert_eq!(top.items[..], rec.items[..3]);
        assert_eq!(top.to_tsv().lines().count(), 4);
        assert!(matches!(recommend_topk(&params, ds, "nope", 3), Err(Error::Lookup(_))));
        assert!(matches!(recommend_topk(&params, ds, &ds.drug_ids[0], 0), Err(Error::Input(_))));
    }

    #[test]
    fn recommendations_follow_planted_structure() {
        let syn = SynthConfig::new(100, 80, 0.01, 8, 5).generate().unwrap();
        let ds = &syn.dataset;
        let cfg = TrainConfig { seed: 5, aux_enabled: false, ..TrainConfig::default() };
        let state = fit(&ds.associations, &ds.drug_sim, None, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut top_sum, mut random_sum) = (0.0, 0.0);
        for (i, id) in ds.drug_ids.iter().enumerate() {
            let rec = recommend_topk(&state.params, ds, id, 5).unwrap();
            for (d, _) in &rec.items {
                let j = ds.disease_ids.iter().position(|x| x == d).unwrap();
                top_sum += syn.truth.score(i, j);
            }
            let unknown: Vec<usize> = (0..80).filter(|&j| !ds.associations.get(i, j)).collect();
            for _ in 0..5 {
                random_sum += syn.truth.score(i, unknown[rng.random_range(0..unknown.len())]);
            }
        }
        assert!(top_sum > random_sum, "top-5 {top_sum:.2} vs random {random_sum:.2}");
    }
}
