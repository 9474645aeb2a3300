//! Cross-validated experiment runs, run artifacts and grid search.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bkt::{self, BktConfig, BktPredictor};
use crate::corpus::{AnnotatedDialogue, Fold, Part, SkippedDialogue, SplitPlan};
use crate::dkt_sem::{self, DktConfig, InputKind};
use crate::encoder::EncoderConfig;
use crate::error::{write_string, Error, Result};
use crate::eval::curves::{knowledge_curves, write_plots, CurveReport};
use crate::eval::metrics::{compute_metrics, majority_rate, MetricReport, Scores};
use crate::kt::{collect_predictions, write_records, Aggregation, ConstantPredictor, PredictionRecord};
use crate::llmkt::{LlmktConfig, LlmktModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Bkt,
    Dkt,
    DktSem,
    Llmkt,
    Majority,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Bkt, Method::Dkt, Method::DktSem, Method::Llmkt, Method::Majority];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Bkt => "bkt",
            Method::Dkt => "dkt",
            Method::DktSem => "dkt-sem",
            Method::Llmkt => "llmkt",
            Method::Majority => "majority",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (expected bkt, dkt, dkt-sem, llmkt or majority)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodConfigs {
    pub bkt: BktConfig,
    pub dkt: DktConfig,
    pub dkt_sem: DktConfig,
    pub llmkt: LlmktConfig,
    pub encoder: EncoderConfig,
}

impl Default for MethodConfigs {
    fn default() -> Self {
        MethodConfigs {
            bkt: BktConfig::default(),
            dkt: DktConfig {
                input: InputKind::KcIds,
                ..Default::default()
            },
            dkt_sem: DktConfig::default(),
            llmkt: LlmktConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub method: Method,
    /// Base seed; fold `i` trains with `seed + i`.
    pub seed: u64,
    pub aggregation: Aggregation,
    pub curves_top_n: usize,
    pub methods: MethodConfigs,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::Majority,
            seed: 0,
            aggregation: Aggregation::Mean,
            curves_top_n: 15,
            methods: MethodConfigs::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub scores: Option<Scores>,
    pub val_auc: Option<f64>,
    pub error: Option<String>,
    pub prediction_failures: Vec<SkippedDialogue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMetrics {
    pub method: Method,
    pub report: Option<MetricReport>,
    pub folds: Vec<FoldOutcome>,
    pub incomplete_folds: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub metrics: ExperimentMetrics,
    /// Test records of every completed fold.
    pub records: Vec<PredictionRecord>,
    pub curves: CurveReport,
}

/// Validation and test predictions of one trained fold.
#[derive(Debug, Clone, Default)]
pub struct FoldRun {
    pub val: Vec<PredictionRecord>,
    pub test: Vec<PredictionRecord>,
    pub failures: Vec<SkippedDialogue>,
}

fn owned(ds: &[&AnnotatedDialogue]) -> Vec<AnnotatedDialogue> {
    ds.iter().map(|d| (*d).clone()).collect()
}

fn all_kcs(dialogues: &[&AnnotatedDialogue]) -> Vec<String> {
    dkt_sem::corpus_kcs(dialogues.iter().copied())
}

fn reaggregate(records: &mut [PredictionRecord], aggregation: Aggregation) -> Result<()> {
    if aggregation != Aggregation::Mean {
        for r in records.iter_mut() {
            r.y_hat = aggregation.apply(&r.z_hats)?;
        }
    }
    Ok(())
}

/// Trains `cfg.method` on the fold's training part and predicts its
/// validation and test parts.
pub fn run_fold(cfg: &ExperimentConfig, dialogues: &[AnnotatedDialogue], fold: &Fold, descriptions: &BTreeMap<String, String>) -> Result<FoldRun> {
    let train = fold.select(Part::Train, dialogues);
    let val = fold.select(Part::Val, dialogues);
    let test = fold.select(Part::Test, dialogues);
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid(format!("fold {} has an empty train or test part", fold.index)));
    }
    let seed = cfg.seed.wrapping_add(fold.index as u64);
    let (val_o, test_o) = (owned(&val), owned(&test));
    let mut run = FoldRun::default();
    let predict = |p: &dyn crate::kt::KtPredictor, run: &mut FoldRun| {
        let v = collect_predictions(p, &val_o, cfg.aggregation);
        let t = collect_predictions(p, &test_o, cfg.aggregation);
        run.val = v.records;
        run.test = t.records;
        run.failures.extend(v.failures);
        run.failures.extend(t.failures);
    };
    match cfg.method {
        Method::Majority => {
            let train_records = collect_predictions(&ConstantPredictor(0.5), &owned(&train), Aggregation::Mean).records;
            let rate = majority_rate(&train_records)?;
            predict(&ConstantPredictor(rate), &mut run);
        }
        Method::Bkt => {
            let mut bcfg = cfg.methods.bkt;
            bcfg.seed = seed;
            let fit = bkt::fit(train.iter().copied().chain(val.iter().copied()), &bcfg)?;
            predict(&BktPredictor::new(fit.params), &mut run);
        }
        Method::Dkt | Method::DktSem => {
            let mut dcfg = if cfg.method == Method::Dkt { cfg.methods.dkt.clone() } else { cfg.methods.dkt_sem.clone() };
            dcfg.input = if cfg.method == Method::Dkt { InputKind::KcIds } else { InputKind::Text };
            dcfg.seed = seed;
            let encoder = cfg.methods.encoder.build()?;
            let everything: Vec<&AnnotatedDialogue> = train.iter().chain(&val).chain(&test).copied().collect();
            let (model, _) = dkt_sem::fit(dcfg, &train, &val, &all_kcs(&everything), descriptions, encoder.clone())?;
            run.val = dkt_sem::predict_records(&model, &val, Some(encoder.as_ref()))?;
            run.test = dkt_sem::predict_records(&model, &test, Some(encoder.as_ref()))?;
            reaggregate(&mut run.val, cfg.aggregation)?;
            reaggregate(&mut run.test, cfg.aggregation)?;
        }
        Method::Llmkt => {
            let mut lcfg = cfg.methods.llmkt.clone();
            lcfg.decoder.seed = seed;
            lcfg.finetune.seed = seed;
            let vocab: Vec<&AnnotatedDialogue> = train.iter().chain(&val).copied().collect();
            let mut model = LlmktModel::new(lcfg, &vocab, descriptions.clone())?;
            model.finetune(&train, &val)?;
            predict(&model.predictor(), &mut run);
        }
    }
    Ok(run)
}

fn auc_of(records: &[PredictionRecord]) -> Option<f64> {
    compute_metrics(records).ok().and_then(|s| s.auc)
}

/// Runs every fold of `plan`, aggregating test metrics. A failing fold is
/// recorded and the rest continue. With `out_dir`, writes config.json,
/// metrics.json, records.jsonl and curves/.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    dialogues: &[AnnotatedDialogue],
    plan: &SplitPlan,
    descriptions: &BTreeMap<String, String>,
    out_dir: Option<&Path>,
) -> Result<ExperimentOutcome> {
    if plan.folds.is_empty() {
        return Err(Error::invalid("split plan has no folds"));
    }
    if let Some(dir) = out_dir {
        write_string(&dir.join("config.json"), &(serde_json::to_string_pretty(cfg)? + "\n"))?;
    }
    let mut folds = Vec::new();
    let mut records = Vec::new();
    let mut scores = Vec::new();
    for fold in &plan.folds {
        let mut outcome = FoldOutcome {
            fold: fold.index,
            n_train: fold.count(Part::Train),
            n_val: fold.count(Part::Val),
            n_test: fold.count(Part::Test),
            scores: None,
            val_auc: None,
            error: None,
            prediction_failures: Vec::new(),
        };
        match run_fold(cfg, dialogues, fold, descriptions).and_then(|run| compute_metrics(&run.test).map(|s| (run, s))) {
            Ok((run, s)) => {
                log::info!("{} fold {}: {}", cfg.method, fold.index, MetricReport::single(s));
                outcome.scores = Some(s);
                outcome.val_auc = auc_of(&run.val);
                outcome.prediction_failures = run.failures;
                scores.push(s);
                records.extend(run.test);
            }
            Err(e) => {
                log::error!("{} fold {} failed: {e}", cfg.method, fold.index);
                outcome.error = Some(e.to_string());
            }
        }
        folds.push(outcome);
    }
    let incomplete = folds.iter().filter(|f| f.error.is_some()).count();
    let report = if scores.is_empty() { None } else { Some(MetricReport::from_folds(scores)?) };
    let metrics = ExperimentMetrics {
        method: cfg.method,
        report,
        folds,
        incomplete_folds: incomplete,
    };
    let curves = knowledge_curves(&records, cfg.curves_top_n);
    if let Some(dir) = out_dir {
        write_string(&dir.join("metrics.json"), &(serde_json::to_string_pretty(&metrics)? + "\n"))?;
        write_records(&dir.join("records.jsonl"), &records)?;
        write_plots(&curves, &dir.join("curves"))?;
        write_string(&dir.join("curves").join("curves.json"), &serde_json::to_string_pretty(&curves)?)?;
    }
    Ok(ExperimentOutcome { metrics, records, curves })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: Vec<GridAxis>,
}

impl GridSpec {
    pub fn new(axes: &[(&str, &[f64])]) -> Self {
        GridSpec {
            axes: axes
                .iter()
                .map(|(n, v)| GridAxis {
                    name: n.to_string(),
                    values: v.to_vec(),
                })
                .collect(),
        }
    }

    /// Learning rate × adapter rank.
    pub fn llmkt_default() -> Self {
        Self::new(&[("lr", &[5e-5, 1e-4, 2e-4, 3e-4]), ("rank", &[4.0, 8.0, 16.0, 32.0])])
    }

    /// Learning rate × embedding size.
    pub fn dkt_default() -> Self {
        Self::new(&[("lr", &[1e-4, 2e-4, 5e-4, 1e-3, 2e-3, 5e-3]), ("hidden", &[8.0, 16.0, 32.0, 64.0, 128.0, 256.0, 512.0])])
    }

    /// Every combination, last axis varying fastest.
    pub fn settings(&self) -> Vec<BTreeMap<String, f64>> {
        let mut out = vec![BTreeMap::new()];
        for axis in &self.axes {
            out = out
                .into_iter()
                .flat_map(|base| {
                    axis.values.iter().map(move |&v| {
                        let mut m = base.clone();
                        m.insert(axis.name.clone(), v);
                        m
                    })
                })
                .collect();
        }
        out
    }
}

fn as_count(name: &str, v: f64) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::Config(format!("`{name}` must be a positive integer, got {v}")))
    }
}

/// Sets hyperparameter `name` of the configured method.
pub fn apply_setting(cfg: &mut ExperimentConfig, name: &str, v: f64) -> Result<()> {
    let m = &mut cfg.methods;
    match (cfg.method, name) {
        (Method::Dkt | Method::DktSem, "lr") => {
            m.dkt.lr = v;
            m.dkt_sem.lr = v;
        }
        (Method::Dkt | Method::DktSem, "hidden") => {
            let n = as_count(name, v)?;
            m.dkt.hidden = n;
            m.dkt.id_dim = n;
            m.dkt_sem.hidden = n;
        }
        (Method::Dkt | Method::DktSem, "weight_decay") => {
            m.dkt.weight_decay = v;
            m.dkt_sem.weight_decay = v;
        }
        (Method::Llmkt, "lr") => m.llmkt.finetune.lr = v,
        (Method::Llmkt, "rank") => m.llmkt.lora.rank = as_count(name, v)?,
        (Method::Llmkt, "alpha") => m.llmkt.lora.alpha = v,
        (Method::Llmkt, "epochs") => m.llmkt.finetune.epochs = as_count(name, v)?,
        (Method::Bkt, "max_iter") => m.bkt.max_iter = as_count(name, v)?,
        (Method::Bkt, "restarts") => m.bkt.restarts = as_count(name, v)?,
        (method, _) => return Err(Error::Config(format!("`{name}` is not a tunable setting of {method}"))),
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub settings: BTreeMap<String, f64>,
    pub score: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: ExperimentConfig,
    pub best_settings: BTreeMap<String, f64>,
    /// Best first; unscored entries last.
    pub leaderboard: Vec<GridEntry>,
}

/// Exhaustive search over `grid`; `scorer` returns the validation score of
/// a configuration (higher is better). Ties keep the earlier setting.
pub fn grid_search(base: &ExperimentConfig, grid: &GridSpec, scorer: &mut dyn FnMut(&ExperimentConfig) -> Result<Option<f64>>) -> Result<GridResult> {
    let settings = grid.settings();
    if grid.axes.is_empty() || settings.is_empty() {
        return Err(Error::Config("grid spec is empty".into()));
    }
    let mut entries = Vec::with_capacity(settings.len());
    let mut best: Option<(f64, usize, ExperimentConfig)> = None;
    for (i, s) in settings.into_iter().enumerate() {
        let mut cfg = base.clone();
        for (name, v) in &s {
            apply_setting(&mut cfg, name, *v)?;
        }
        let (score, error) = match scorer(&cfg) {
            Ok(score) => (score, None),
            Err(e) => (None, Some(e.to_string())),
        };
        if let Some(sc) = score {
            if best.as_ref().is_none_or(|(b, _, _)| sc > *b) {
                best = Some((sc, i, cfg));
            }
        }
        entries.push(GridEntry {
            settings: s,
            score,
            error,
        });
    }
    let (_, best_idx, best_cfg) = best.ok_or_else(|| Error::invalid("no grid setting produced a score"))?;
    let best_settings = entries[best_idx].settings.clone();
    let mut leaderboard = entries;
    leaderboard.sort_by(|a, b| match (a.score, b.score) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    Ok(GridResult {
        best: best_cfg,
        best_settings,
        leaderboard,
    })
}

/// Mean validation AUC across the folds of `plan`.
pub fn validation_auc(cfg: &ExperimentConfig, dialogues: &[AnnotatedDialogue], plan: &SplitPlan, descriptions: &BTreeMap<String, String>) -> Result<Option<f64>> {
    let mut aucs = Vec::new();
    for fold in &plan.folds {
        let run = run_fold(cfg, dialogues, fold, descriptions)?;
        aucs.extend(auc_of(&run.val));
    }
    Ok((!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::make_splits;
    use crate::synthetic::{generate, SyntheticConfig};

    fn corpus() -> (Vec<AnnotatedDialogue>, BTreeMap<String, String>) {
        let c = generate(&SyntheticConfig {
            dialogues: 20,
            ..Default::default()
        })
        .unwrap();
        (c.dialogues, c.descriptions)
    }

    #[test]
    fn majority_run_is_reproducible_and_writes_artifacts() {
        let (ds, desc) = corpus();
        let plan = make_splits(&ds, 4, 0.2, 1).unwrap();
        let cfg = ExperimentConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let a = run_experiment(&cfg, &ds, &plan, &desc, Some(dir.path())).unwrap();
        for f in ["config.json", "metrics.json", "records.jsonl"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let first = std::fs::read_to_string(dir.path().join("metrics.json")).unwrap();
        let report = a.metrics.report.as_ref().unwrap();
        assert_eq!(report.folds.len(), 4);
        assert_eq!(report.auc.unwrap().mean, 0.5);
        let dir2 = tempfile::tempdir().unwrap();
        run_experiment(&cfg, &ds, &plan, &desc, Some(dir2.path())).unwrap();
        assert_eq!(first, std::fs::read_to_string(dir2.path().join("metrics.json")).unwrap());
        let n_test: usize = plan.folds.iter().map(|f| f.count(Part::Test)).sum();
        assert_eq!(a.records.iter().filter(|r| r.excluded).count(), n_test);
    }

    #[test]
    fn bkt_run_and_failed_fold_reporting() {
        let (ds, desc) = corpus();
        let mut plan = make_splits(&ds, 2, 0.2, 1).unwrap();
        let cfg = ExperimentConfig {
            method: Method::Bkt,
            ..Default::default()
        };
        let ok = run_experiment(&cfg, &ds, &plan, &desc, None).unwrap();
        assert_eq!(ok.metrics.incomplete_folds, 0);
        assert!(ok.metrics.report.unwrap().auc.unwrap().mean > 0.5);
        for part in plan.folds[1].assignments.values_mut() {
            *part = Part::Val;
        }
        let partial = run_experiment(&cfg, &ds, &plan, &desc, None).unwrap();
        assert_eq!(partial.metrics.incomplete_folds, 1);
        assert!(partial.metrics.folds[1].error.is_some());
        assert_eq!(partial.metrics.report.unwrap().folds.len(), 1);
    }

    #[test]
    fn grids() {
        assert_eq!(GridSpec::llmkt_default().settings().len(), 16);
        assert_eq!(GridSpec::dkt_default().settings().len(), 42);
        let base = ExperimentConfig {
            method: Method::Llmkt,
            ..Default::default()
        };
        let one = GridSpec::new(&[("lr", &[3e-4])]);
        let r = grid_search(&base, &one, &mut |_| Ok(Some(0.6))).unwrap();
        assert_eq!(r.best.methods.llmkt.finetune.lr, 3e-4);

        let mut seen = 0;
        let r = grid_search(&base, &GridSpec::llmkt_default(), &mut |c| {
            seen += 1;
            let hit = c.methods.llmkt.finetune.lr == 1e-4 && c.methods.llmkt.lora.rank == 8;
            Ok(Some(if hit { 0.9 } else { 0.5 }))
        })
        .unwrap();
        assert_eq!(seen, 16);
        assert_eq!(r.best_settings["rank"], 8.0);
        assert_eq!(r.leaderboard[0].score, Some(0.9));
        assert!(apply_setting(&mut base.clone(), "hidden", 8.0).is_err());
        assert!(apply_setting(&mut ExperimentConfig { method: Method::Dkt, ..Default::default() }, "hidden", 2.5).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.as_str()));
        }
    }
}
