//! Recurrent knowledge tracing over sentence embeddings with a bilinear
//! KC-mastery readout, plus the plain KC-ID variant.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{add_into, clip_grad_norm, scale_grads, AdamW, Bound, GradMap, Mat, ParamStore, Tape, Var};
use crate::corpus::AnnotatedDialogue;
use crate::encoder::{normalize, SentenceEncoder};
use crate::error::{read_to_string, write_string, Error, Result};
use crate::eval::metrics::{auc, compute_metrics};
use crate::kt::{bce_loss, Aggregation, DialogueContext, KtPredictor, PredictionRecord, BCE_EPS};

pub const CHECKPOINT_VERSION: u32 = 1;
/// Correctness embedding row for turn pairs without a label.
pub const NA_ROW: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// Tutor, student and KC-description embeddings.
    #[default]
    Text,
    /// Learned KC ID embeddings only.
    KcIds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    /// Element-wise sum of the projection and the correctness embedding.
    #[default]
    Add,
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DktConfig {
    pub input: InputKind,
    pub combine: Combine,
    pub hidden: usize,
    /// Width of learned KC embeddings in the ID variant.
    pub id_dim: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub grad_clip: Option<f64>,
    /// Drop unlabeled pairs from the input sequence.
    pub labeled_only: bool,
    pub seed: u64,
}

impl Default for DktConfig {
    fn default() -> Self {
        DktConfig {
            input: InputKind::Text,
            combine: Combine::Add,
            hidden: 64,
            id_dim: 32,
            lr: 1e-3,
            weight_decay: 1e-2,
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            grad_clip: None,
            labeled_only: false,
            seed: 0,
        }
    }
}

/// KC vocabulary with unit-norm description embeddings (rows of C).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KcTable {
    pub ids: Vec<String>,
    pub embeddings: Mat,
}

impl KcTable {
    /// Encodes each KC's description (the id itself when none is known).
    pub fn build(ids: &[String], descriptions: &BTreeMap<String, String>, encoder: &dyn SentenceEncoder) -> Result<Self> {
        let mut ids = ids.to_vec();
        ids.sort();
        ids.dedup();
        let mut embeddings = Mat::zeros((ids.len(), encoder.dim()));
        for (i, id) in ids.iter().enumerate() {
            let text = descriptions.get(id).map(String::as_str).unwrap_or(id);
            let mut v = encoder.encode(text)?;
            normalize(&mut v);
            embeddings.row_mut(i).assign(&ndarray::Array1::from(v));
        }
        Ok(KcTable { ids, embeddings })
    }

    pub fn index(&self, id: &str) -> Option<usize> {
        self.ids.binary_search_by(|k| k.as_str().cmp(id)).ok()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Every KC id appearing in `dialogues`.
pub fn corpus_kcs<'a>(dialogues: impl IntoIterator<Item = &'a AnnotatedDialogue>) -> Vec<String> {
    let mut set = std::collections::BTreeSet::new();
    for d in dialogues {
        for p in &d.pairs {
            set.extend(p.kcs.iter().cloned());
        }
    }
    set.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInput {
    pub j: usize,
    pub label: Option<u8>,
    /// Rows of the KC table; the ID variant maps unknown KCs to its spare row.
    pub kcs: Vec<usize>,
    pub kc_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialogueFeatures {
    pub id: String,
    /// [t_j; s_j; c_j] per step (text variant only).
    pub text: Option<Mat>,
    pub steps: Vec<StepInput>,
}

impl DialogueFeatures {
    pub fn labeled(&self) -> usize {
        self.steps.iter().filter(|s| s.label.is_some()).count()
    }
}

pub struct DktSemModel {
    pub config: DktConfig,
    pub kcs: KcTable,
    pub params: ParamStore,
    pub encoder_id: String,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config: DktConfig,
    encoder_id: String,
    kcs: KcTable,
    params: ParamStore,
}

fn normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Mat {
    let n = Normal::new(0.0, std).expect("positive std");
    Mat::from_shape_fn((rows, cols), |_| n.sample(rng))
}

struct Forward {
    /// Mastery of every KC before each step (row i is read from h_{i-1}).
    masteries: Var,
    y_hat: Option<Var>,
    targets: Mat,
}

impl DktSemModel {
    pub fn new(config: DktConfig, kcs: KcTable, encoder_id: impl Into<String>) -> Result<Self> {
        if config.hidden == 0 {
            return Err(Error::Config("hidden size must be positive".into()));
        }
        let e = match config.input {
            InputKind::Text => kcs.embeddings.ncols(),
            InputKind::KcIds => config.id_dim,
        };
        if e == 0 {
            return Err(Error::Config("embedding width must be positive".into()));
        }
        let h = config.hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let in_dim = match config.input {
            InputKind::Text => 3 * e,
            InputKind::KcIds => e,
        };
        let x_dim = match config.combine {
            Combine::Add => h,
            Combine::Concat => 2 * h,
        };
        let mut params = ParamStore::new();
        params.insert("W", normal(in_dim, h, 1.0 / (in_dim as f64).sqrt(), &mut rng));
        params.insert("emb", normal(3, h, 0.1, &mut rng));
        params.insert("lstm.wx", normal(x_dim, 4 * h, 1.0 / (x_dim as f64).sqrt(), &mut rng));
        params.insert("lstm.wh", normal(h, 4 * h, 1.0 / (h as f64).sqrt(), &mut rng));
        let mut bias = Mat::zeros((1, 4 * h));
        bias.slice_mut(ndarray::s![.., h..2 * h]).fill(1.0);
        params.insert("lstm.b", bias);
        params.insert("B", normal(h, e, 1.0 / (h as f64).sqrt(), &mut rng));
        if config.input == InputKind::KcIds {
            let mut q = normal(kcs.len() + 1, e, 1.0 / (e as f64).sqrt(), &mut rng);
            q.row_mut(kcs.len()).fill(0.0);
            params.insert("Q", q);
        }
        Ok(DktSemModel {
            config,
            kcs,
            params,
            encoder_id: encoder_id.into(),
        })
    }

    fn kc_row(&self, id: &str) -> Result<usize> {
        match (self.kcs.index(id), self.config.input) {
            (Some(i), _) => Ok(i),
            (None, InputKind::KcIds) => Ok(self.kcs.len()),
            (None, InputKind::Text) => Err(Error::invalid(format!("KC `{id}` has no description embedding"))),
        }
    }

    /// Per-step inputs for `pairs` (opener excluded; it carries no label).
    pub fn build_inputs(&self, id: &str, pairs: &[crate::corpus::TurnPair], encoder: Option<&dyn SentenceEncoder>) -> Result<DialogueFeatures> {
        let pairs: Vec<_> = pairs
            .iter()
            .filter(|p| !self.config.labeled_only || p.is_labeled())
            .collect();
        let mut steps = Vec::with_capacity(pairs.len());
        for p in &pairs {
            let kcs = p.kcs.iter().map(|k| self.kc_row(k)).collect::<Result<Vec<_>>>()?;
            steps.push(StepInput {
                j: p.j,
                label: p.correctness.label(),
                kcs,
                kc_ids: p.kcs.clone(),
            });
        }
        let text = match self.config.input {
            InputKind::KcIds => None,
            InputKind::Text => {
                let encoder = encoder.ok_or_else(|| Error::Config("text inputs need a sentence encoder".into()))?;
                if encoder.model_id() != self.encoder_id {
                    return Err(Error::Config(format!("model was built with encoder `{}`, got `{}`", self.encoder_id, encoder.model_id())));
                }
                let e = self.kcs.embeddings.ncols();
                let mut m = Mat::zeros((pairs.len(), 3 * e));
                for (i, (p, step)) in pairs.iter().zip(&steps).enumerate() {
                    let t = encoder.encode(&p.tutor_text)?;
                    let s = encoder.encode(&p.student_text)?;
                    let mut row = m.row_mut(i);
                    for k in 0..e {
                        row[k] = t[k];
                        row[e + k] = s[k];
                    }
                    if !step.kcs.is_empty() {
                        let c = self.kcs.embeddings.select(Axis(0), &step.kcs).mean_axis(Axis(0)).unwrap();
                        row.slice_mut(ndarray::s![2 * e..]).assign(&c);
                    }
                }
                Some(m)
            }
        };
        Ok(DialogueFeatures {
            id: id.to_string(),
            text,
            steps,
        })
    }

    pub fn features(&self, dialogue: &AnnotatedDialogue, encoder: Option<&dyn SentenceEncoder>) -> Result<DialogueFeatures> {
        self.build_inputs(&dialogue.id, &dialogue.pairs, encoder)
    }

    fn readout(&self, tape: &Tape, p: &Bound) -> (Var, Var) {
        // Returns (E×|KC| KC matrix transposed, the input-side KC table).
        match self.config.input {
            InputKind::Text => {
                let c = tape.constant(self.kcs.embeddings.clone());
                (tape.transpose(c), c)
            }
            InputKind::KcIds => {
                let q = p.var("Q");
                (tape.transpose(q), q)
            }
        }
    }

    fn forward(&self, tape: &Tape, p: &Bound, f: &DialogueFeatures) -> Forward {
        let h = self.config.hidden;
        let n = f.steps.len();
        let ncols = self.kcs.len() + usize::from(self.config.input == InputKind::KcIds);
        let (ct, table) = self.readout(tape, p);
        let bc = tape.matmul(p.var("B"), ct);

        let raw = match self.config.input {
            InputKind::Text => tape.constant(f.text.clone().expect("text features")),
            InputKind::KcIds => {
                let mut sel = Mat::zeros((n, ncols));
                for (i, s) in f.steps.iter().enumerate() {
                    for &k in &s.kcs {
                        sel[[i, k]] = 1.0 / s.kcs.len() as f64;
                    }
                }
                tape.matmul(tape.constant(sel), table)
            }
        };
        let proj = tape.tanh(tape.matmul(raw, p.var("W")));
        let rows: Vec<usize> = f
            .steps
            .iter()
            .map(|s| s.label.map(usize::from).unwrap_or(NA_ROW))
            .collect();
        let y_emb = tape.select_rows(p.var("emb"), &rows);
        let x = match self.config.combine {
            Combine::Add => tape.add(proj, y_emb),
            Combine::Concat => tape.concat_cols(&[proj, y_emb]),
        };
        let xw = tape.add_row(tape.matmul(x, p.var("lstm.wx")), p.var("lstm.b"));

        let mut hidden = tape.constant(Mat::zeros((1, h)));
        let mut cell = tape.constant(Mat::zeros((1, h)));
        let mut before = Vec::with_capacity(n);
        for t in 0..n {
            before.push(hidden);
            let gates = tape.add(tape.select_rows(xw, &[t]), tape.matmul(hidden, p.var("lstm.wh")));
            let i = tape.sigmoid(tape.slice_cols(gates, 0, h));
            let fg = tape.sigmoid(tape.slice_cols(gates, h, 2 * h));
            let g = tape.tanh(tape.slice_cols(gates, 2 * h, 3 * h));
            let o = tape.sigmoid(tape.slice_cols(gates, 3 * h, 4 * h));
            cell = tape.add(tape.mul(fg, cell), tape.mul(i, g));
            hidden = tape.mul(o, tape.tanh(cell));
        }
        let hs = if before.is_empty() {
            tape.constant(Mat::zeros((0, h)))
        } else {
            tape.concat_rows(&before)
        };
        let masteries = tape.sigmoid(tape.matmul(hs, bc));

        let labeled: Vec<usize> = (0..n).filter(|&i| f.steps[i].label.is_some()).collect();
        let mut targets = Mat::zeros((labeled.len(), 1));
        let y_hat = (!labeled.is_empty()).then(|| {
            let mut sel = Mat::zeros((labeled.len(), ncols));
            for (r, &i) in labeled.iter().enumerate() {
                let s = &f.steps[i];
                targets[[r, 0]] = f64::from(s.label.unwrap());
                for &k in &s.kcs {
                    sel[[r, k]] = 1.0 / s.kcs.len() as f64;
                }
            }
            let z = tape.select_rows(masteries, &labeled);
            let ones = tape.constant(Mat::ones((ncols, 1)));
            tape.matmul(tape.mul(z, tape.constant(sel)), ones)
        });
        Forward { masteries, y_hat, targets }
    }

    /// Summed BCE over one dialogue's labeled steps and its gradients.
    fn dialogue_loss(&self, params: &ParamStore, f: &DialogueFeatures, with_grads: bool) -> (f64, GradMap) {
        let tape = Tape::new();
        let bound = params.bind(&tape, |_| with_grads);
        let out = self.forward(&tape, &bound, f);
        let Some(y_hat) = out.y_hat else {
            return (0.0, GradMap::new());
        };
        let loss = tape.bce(y_hat, out.targets, BCE_EPS);
        let value = tape.scalar(loss);
        let grads = if with_grads { bound.collect(&tape.backward(loss)) } else { GradMap::new() };
        (value, grads)
    }

    /// Batch objective: per-dialogue summed BCE, averaged over dialogues.
    pub fn loss_and_grads(&self, params: &ParamStore, batch: &[&DialogueFeatures]) -> (f64, GradMap) {
        let parts: Vec<(f64, GradMap)> = batch.par_iter().map(|f| self.dialogue_loss(params, f, true)).collect();
        let mut total = 0.0;
        let mut grads = GradMap::new();
        for (l, g) in parts {
            total += l;
            add_into(&mut grads, g);
        }
        let n = batch.len().max(1) as f64;
        scale_grads(&mut grads, 1.0 / n);
        (total / n, grads)
    }

    pub fn loss(&self, params: &ParamStore, batch: &[&DialogueFeatures]) -> f64 {
        let total: f64 = batch.iter().map(|f| self.dialogue_loss(params, f, false).0).sum();
        total / batch.len().max(1) as f64
    }

    /// Mastery of every table KC before each step.
    pub fn masteries(&self, f: &DialogueFeatures) -> Mat {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, |_| false);
        let out = self.forward(&tape, &bound, f);
        let m = tape.value(out.masteries).clone();
        m
    }

    /// Records for every labeled step; the first is flagged excluded.
    pub fn records(&self, f: &DialogueFeatures) -> Result<Vec<PredictionRecord>> {
        let m = self.masteries(f);
        let mut out = Vec::new();
        for (i, s) in f.steps.iter().enumerate() {
            let Some(y) = s.label else { continue };
            let z: Vec<f64> = s.kcs.iter().map(|&k| m[[i, k]]).collect();
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("mastery at {}#{}", f.id, s.j)));
            }
            let mut r = PredictionRecord::new(&f.id, s.j, y, z, s.kc_ids.clone(), Aggregation::Mean)?;
            r.excluded = out.is_empty();
            out.push(r);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            encoder_id: self.encoder_id.clone(),
            kcs: self.kcs.clone(),
            params: self.params.clone(),
        };
        write_string(path, &serde_json::to_string(&ck)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&read_to_string(path)?)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!("unsupported checkpoint version {}", ck.version)));
        }
        let model = DktSemModel {
            config: ck.config,
            kcs: ck.kcs,
            params: ck.params,
            encoder_id: ck.encoder_id,
        };
        let h = model.config.hidden;
        if model.params.get("lstm.wh").map(Array2::dim) != Some((h, 4 * h)) {
            return Err(Error::invalid("checkpoint parameter shapes do not match its config"));
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub initial_train_loss: f64,
}

fn validation_score(model: &DktSemModel, val: &[DialogueFeatures]) -> Result<(Option<f64>, Option<f64>)> {
    if val.is_empty() {
        return Ok((None, None));
    }
    let mut records = Vec::new();
    for f in val {
        records.extend(model.records(f)?);
    }
    let loss = bce_loss(&records);
    let scored: Vec<&PredictionRecord> = records.iter().filter(|r| !r.excluded).collect();
    let labels: Vec<u8> = scored.iter().map(|r| r.y).collect();
    let preds: Vec<f64> = scored.iter().map(|r| r.y_hat).collect();
    Ok((Some(loss), auc(&labels, &preds)))
}

/// Minibatch AdamW on the BCE objective with early stopping on validation
/// AUC (first labels excluded; validation loss when AUC is undefined).
/// The best validation checkpoint is kept.
pub fn train(model: &mut DktSemModel, train: &[DialogueFeatures], val: &[DialogueFeatures]) -> Result<TrainLog> {
    let cfg = model.config.clone();
    if train.is_empty() {
        return Err(Error::invalid("no training dialogues"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let all: Vec<&DialogueFeatures> = train.iter().collect();
    let mut log = TrainLog {
        initial_train_loss: model.loss(&model.params, &all),
        ..Default::default()
    };
    let mut best: Option<(f64, ParamStore, usize)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&DialogueFeatures> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, mut grads) = model.loss_and_grads(&model.params, &batch);
            if !loss.is_finite() || grads.values().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite(format!("loss {loss} at epoch {epoch}, batch {b}")));
            }
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            opt.step(&mut model.params, &grads);
            epoch_loss += loss * batch.len() as f64;
        }
        let (val_loss, val_auc) = validation_score(model, val)?;
        log.epochs.push(EpochLog {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_loss,
            val_auc,
        });
        log::debug!("epoch {epoch}: train {:.4} val auc {:?}", epoch_loss / train.len() as f64, val_auc);
        let score = match (val_auc, val_loss) {
            (Some(a), _) => a,
            (None, Some(l)) => -l,
            (None, None) => epoch as f64,
        };
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, model.params.clone(), epoch));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience.max(1) {
                break;
            }
        }
    }
    if let Some((_, params, epoch)) = best {
        model.params = params;
        log.best_epoch = epoch;
    }
    Ok(log)
}

/// Builds features for every dialogue.
pub fn featurize(model: &DktSemModel, dialogues: &[&AnnotatedDialogue], encoder: Option<&dyn SentenceEncoder>) -> Result<Vec<DialogueFeatures>> {
    dialogues.iter().map(|d| model.features(d, encoder)).collect()
}

/// Fold-level convenience: build the KC table over train + test, train with
/// early stopping on `val`, return the model and its log.
pub fn fit(
    config: DktConfig,
    train_set: &[&AnnotatedDialogue],
    val_set: &[&AnnotatedDialogue],
    all_kcs: &[String],
    descriptions: &BTreeMap<String, String>,
    encoder: Arc<dyn SentenceEncoder>,
) -> Result<(DktSemModel, TrainLog)> {
    let table = match config.input {
        InputKind::Text => KcTable::build(all_kcs, descriptions, encoder.as_ref())?,
        InputKind::KcIds => KcTable {
            ids: corpus_kcs(train_set.iter().copied()),
            embeddings: Mat::zeros((0, 0)),
        },
    };
    let mut model = DktSemModel::new(config, table, encoder.model_id())?;
    let enc = Some(encoder.as_ref());
    let train_f = featurize(&model, train_set, enc)?;
    let val_f = featurize(&model, val_set, enc)?;
    let log = train(&mut model, &train_f, &val_f)?;
    Ok((model, log))
}

/// Scores turn pairs by running the recurrence over the causal history.
pub struct DktSemPredictor {
    pub model: DktSemModel,
    pub encoder: Option<Arc<dyn SentenceEncoder>>,
}

impl KtPredictor for DktSemPredictor {
    fn predict_masteries(&self, context: &DialogueContext<'_>, kcs: &[String]) -> Result<Vec<f64>> {
        let mut pairs = context.history.to_vec();
        // A placeholder step whose own inputs never reach its readout.
        pairs.push(crate::corpus::TurnPair::new(context.j, context.tutor_text, "").labeled(crate::corpus::Correctness::Correct, &[]));
        pairs.last_mut().unwrap().kcs = kcs.to_vec();
        let f = self.model.build_inputs(context.dialogue_id, &pairs, self.encoder.as_deref())?;
        let m = self.model.masteries(&f);
        let last = f.steps.len() - 1;
        Ok(f.steps[last].kcs.iter().map(|&k| m[[last, k]]).collect())
    }
}

/// Scores every labeled pair of `dialogues` in one pass each.
pub fn predict_records(model: &DktSemModel, dialogues: &[&AnnotatedDialogue], encoder: Option<&dyn SentenceEncoder>) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for d in dialogues {
        out.extend(model.records(&model.features(d, encoder)?)?);
    }
    Ok(out)
}

pub fn validation_metrics(model: &DktSemModel, val: &[DialogueFeatures]) -> Result<Option<f64>> {
    let mut records = Vec::new();
    for f in val {
        records.extend(model.records(f)?);
    }
    Ok(compute_metrics(&records).ok().and_then(|s| s.auc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use crate::corpus::{Correctness, TurnPair};
    use crate::encoder::HashingEncoder;

    fn toy(id: &str, spec: &[(Correctness, &[&str], &str)]) -> AnnotatedDialogue {
        AnnotatedDialogue {
            id: id.into(),
            opener: None,
            pairs: spec
                .iter()
                .enumerate()
                .map(|(i, (c, kcs, s))| {
                    let p = TurnPair::new(i + 1, format!("tutor asks {i} about {}", kcs.join(" ")), *s);
                    if *c == Correctness::Na {
                        p
                    } else {
                        p.labeled(*c, kcs)
                    }
                })
                .collect(),
            meta: Default::default(),
        }
    }

    fn corpus() -> Vec<AnnotatedDialogue> {
        vec![
            toy("a", &[(Correctness::Correct, &["k1", "k2"], "it is 12"), (Correctness::Incorrect, &["k2"], "maybe 7")]),
            toy("b", &[(Correctness::Na, &[], "hello"), (Correctness::Incorrect, &["k1"], "no idea"), (Correctness::Correct, &["k3"], "x = 4")]),
        ]
    }

    fn model(input: InputKind, combine: Combine, e: usize, h: usize) -> (DktSemModel, HashingEncoder) {
        let enc = HashingEncoder::new(e);
        let kcs = corpus_kcs(&corpus());
        let table = KcTable::build(&kcs, &BTreeMap::new(), &enc).unwrap();
        let cfg = DktConfig {
            input,
            combine,
            hidden: h,
            id_dim: e,
            ..Default::default()
        };
        (DktSemModel::new(cfg, table, enc.model_id()).unwrap(), enc)
    }

    #[test]
    fn shapes_and_single_kc_mean() {
        let (m, enc) = model(InputKind::Text, Combine::Add, 8, 16);
        let f = m.features(&corpus()[1], Some(&enc)).unwrap();
        let text = f.text.as_ref().unwrap();
        assert_eq!(text.dim(), (3, 24));
        let k3 = m.kcs.index("k3").unwrap();
        assert_eq!(text.row(2).slice(ndarray::s![16..]), m.kcs.embeddings.row(k3));
        assert!(text.row(0).slice(ndarray::s![16..]).iter().all(|v| *v == 0.0));

        let tape = Tape::new();
        let bound = m.params.bind(&tape, |_| false);
        let xw = tape.matmul(tape.constant(text.clone()), bound.var("W"));
        assert_eq!(tape.shape(xw), (3, 16));
    }

    #[test]
    fn first_step_reads_zero_state() {
        let (m, enc) = model(InputKind::Text, Combine::Add, 8, 16);
        let f = m.features(&corpus()[0], Some(&enc)).unwrap();
        let z = m.masteries(&f);
        assert!(z.row(0).iter().all(|v| *v == 0.5));
        assert!(z.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn identical_texts_give_identical_inputs() {
        let (m, enc) = model(InputKind::Text, Combine::Add, 8, 4);
        let mut other = corpus()[0].clone();
        other.id = "copy".into();
        let a = m.features(&corpus()[0], Some(&enc)).unwrap();
        let b = m.features(&other, Some(&enc)).unwrap();
        assert_eq!(a.text, b.text);
    }

    fn grad_error(input: InputKind, combine: Combine) -> f64 {
        let (m, enc) = model(input, combine, 6, 5);
        let feats: Vec<DialogueFeatures> = corpus().iter().map(|d| m.features(d, Some(&enc)).unwrap()).collect();
        let batch: Vec<&DialogueFeatures> = feats.iter().collect();
        let (_, grads) = m.loss_and_grads(&m.params, &batch);
        let names: Vec<&str> = m.params.names().collect();
        finite_difference_check(&m.params, &names, &grads, 1e-5, |p| m.loss(p, &batch))
    }

    #[test]
    fn gradients_match_finite_differences() {
        for input in [InputKind::Text, InputKind::KcIds] {
            for combine in [Combine::Add, Combine::Concat] {
                let err = grad_error(input, combine);
                assert!(err < 1e-4, "{input:?}/{combine:?}: {err}");
            }
        }
    }

    #[test]
    fn no_peek_at_current_label_or_future() {
        let (m, enc) = model(InputKind::Text, Combine::Add, 8, 8);
        let d = corpus()[1].clone();
        let base = m.records(&m.features(&d, Some(&enc)).unwrap()).unwrap();
        let mut flipped = d.clone();
        flipped.pairs[2].correctness = Correctness::Incorrect;
        flipped.pairs[2].student_text = "something else entirely".into();
        let after = m.records(&m.features(&flipped, Some(&enc)).unwrap()).unwrap();
        assert_eq!(base[1].z_hats, after[1].z_hats);
        assert_eq!(base[0].z_hats, after[0].z_hats);
    }

    #[test]
    fn swapping_kc_texts_swaps_readout_columns() {
        let (m, enc) = model(InputKind::Text, Combine::Add, 8, 8);
        let f = m.features(&corpus()[0], Some(&enc)).unwrap();
        let mut swapped = m.kcs.embeddings.clone();
        let (i, k) = (0, 2);
        let (ri, rk) = (swapped.row(i).to_owned(), swapped.row(k).to_owned());
        swapped.row_mut(i).assign(&rk);
        swapped.row_mut(k).assign(&ri);
        // Same recurrent inputs, swapped readout table.
        let m2 = DktSemModel {
            config: m.config.clone(),
            kcs: KcTable { ids: m.kcs.ids.clone(), embeddings: swapped },
            params: m.params.clone(),
            encoder_id: m.encoder_id.clone(),
        };
        let a = m.masteries(&f);
        let b = m2.masteries(&f);
        for r in 0..a.nrows() {
            assert!((a[[r, i]] - b[[r, k]]).abs() < 1e-12 && (a[[r, k]] - b[[r, i]]).abs() < 1e-12);
        }
    }

    #[test]
    fn predictor_matches_batch_records() {
        let (m, enc) = model(InputKind::Text, Combine::Add, 8, 8);
        let d = corpus()[1].clone();
        let batch = m.records(&m.features(&d, Some(&enc)).unwrap()).unwrap();
        let p = DktSemPredictor {
            model: m,
            encoder: Some(Arc::new(enc)),
        };
        let via_trait = crate::kt::collect_predictions(&p, &[d], Aggregation::Mean).records;
        assert_eq!(batch.len(), via_trait.len());
        for (a, b) in batch.iter().zip(&via_trait) {
            for (x, y) in a.z_hats.iter().zip(&b.z_hats) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn training_reduces_loss_and_round_trips() {
        let enc = HashingEncoder::new(8);
        let mut dialogues = Vec::new();
        for i in 0..20 {
            let good = i % 2 == 0;
            let lab = if good { Correctness::Correct } else { Correctness::Incorrect };
            let answer = if good { "the answer is 12" } else { "i do not know" };
            dialogues.push(toy(&format!("d{i}"), &[(lab, &["k1"], answer), (lab, &["k1", "k2"], answer), (lab, &["k2"], answer)]));
        }
        let refs: Vec<&AnnotatedDialogue> = dialogues.iter().collect();
        let kcs = corpus_kcs(refs.iter().copied());
        let cfg = DktConfig {
            hidden: 8,
            lr: 1e-2,
            max_epochs: 200,
            patience: 1000,
            ..Default::default()
        };
        let (model, log) = fit(cfg, &refs, &[], &kcs, &BTreeMap::new(), Arc::new(enc.clone())).unwrap();
        let last = log.epochs.last().unwrap().train_loss;
        assert!(last < log.initial_train_loss, "{last} vs {}", log.initial_train_loss);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dkt.json");
        model.save(&path).unwrap();
        let back = DktSemModel::load(&path).unwrap();
        let f = model.features(refs[0], Some(&enc)).unwrap();
        assert_eq!(model.masteries(&f), back.masteries(&f));
    }

    #[test]
    fn id_variant_handles_unseen_kc() {
        let (m, _) = model(InputKind::KcIds, Combine::Add, 4, 4);
        let d = toy("u", &[(Correctness::Correct, &["k1"], "ok"), (Correctness::Correct, &["brand-new"], "ok")]);
        let recs = m.records(&m.features(&d, None).unwrap()).unwrap();
        assert_eq!(recs[1].z_hats, vec![0.5]);
    }
}
