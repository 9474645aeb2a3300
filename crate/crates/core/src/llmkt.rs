//! Mastery scoring with a decoder LM: each KC gets a query whose verdict is
//! a softmax over the "True"/"False" logits. All KCs of a turn share one
//! packed prompt; queries see the dialogue context and themselves only.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::ops::Range;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{add_into, clip_grad_norm, scale_grads, AdamW, Bound, GradMap, Mat, ParamStore, Tape, Var};
use crate::corpus::AnnotatedDialogue;
use crate::error::{read_to_string, write_string, Error, Result};
use crate::eval::metrics::auc;
use crate::kt::{bce_loss, Aggregation, DialogueContext, KtPredictor, PredictionRecord, BCE_EPS};

pub const PROMPT_VERSION: &str = "llmkt-prompt-v1";
const INSTRUCTION: &str = "Read the tutoring dialogue. For the skill below, answer whether the student will respond correctly to the last tutor turn.";

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const TUTOR: &str = "<tutor>";
pub const STUDENT: &str = "<student>";
pub const KC: &str = "<kc>";
pub const ANSWER: &str = "<answer>";
const SPECIALS: [&str; 7] = [PAD, UNK, BOS, TUTOR, STUDENT, KC, ANSWER];

/// Lower-cased word and punctuation pieces.
pub fn pieces(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Word-level vocabulary. Markup and verdict tokens are reserved entries
/// that plain text can never produce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    vocab: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
    verdicts: (u32, u32),
}

impl Tokenizer {
    /// Reserves `verdicts`, then keeps the `max_vocab` most frequent pieces.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, verdicts: (&str, &str), max_vocab: usize) -> Result<Self> {
        for v in [verdicts.0, verdicts.1] {
            if v.is_empty() || v.chars().any(|c| !c.is_alphanumeric()) {
                return Err(Error::Config(format!("verdict `{v}` does not render as a single token")));
            }
        }
        if verdicts.0 == verdicts.1 {
            return Err(Error::Config("verdict tokens must differ".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for p in pieces(t) {
                *counts.entry(p).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        vocab.push(verdicts.0.to_string());
        vocab.push(verdicts.1.to_string());
        vocab.extend(ranked.into_iter().take(max_vocab).map(|(p, _)| p));
        let n = SPECIALS.len() as u32;
        let mut tok = Tokenizer {
            vocab,
            index: HashMap::new(),
            verdicts: (n, n + 1),
        };
        tok.reindex();
        Ok(tok)
    }

    fn reindex(&mut self) {
        let n = SPECIALS.len() + 2;
        // Text pieces first so a reserved spelling always wins.
        self.index = self.vocab.iter().enumerate().skip(n).map(|(i, w)| (w.clone(), i as u32)).collect();
        for (i, w) in self.vocab.iter().enumerate().take(n) {
            self.index.insert(w.clone(), i as u32);
        }
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn special(&self, token: &str) -> u32 {
        self.index[token]
    }

    pub fn token(&self, id: u32) -> &str {
        &self.vocab[id as usize]
    }

    /// (true, false) verdict ids.
    pub fn verdicts(&self) -> (u32, u32) {
        self.verdicts
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        let unk = self.index[UNK];
        let reserved = SPECIALS.len() as u32 + 2;
        pieces(text)
            .iter()
            .map(|p| self.index.get(p).copied().filter(|&i| i >= reserved).unwrap_or(unk))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_string(path, &serde_json::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut t: Tokenizer = serde_json::from_str(&read_to_string(path)?)?;
        if t.vocab.len() < SPECIALS.len() + 2 || SPECIALS.iter().zip(&t.vocab).any(|(a, b)| a != b) {
            return Err(Error::invalid(format!("{}: not a tokenizer file", path.display())));
        }
        t.reindex();
        Ok(t)
    }
}

/// Token ids, positions and attention mask ready for scoring; `verdicts`
/// holds the index of each query's final token.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedInput {
    pub tokens: Vec<u32>,
    pub positions: Vec<usize>,
    /// `mask[[i, k]]`: token i may attend to token k.
    pub mask: Array2<bool>,
    pub verdicts: Vec<usize>,
    pub queries: Vec<Range<usize>>,
}

impl PackedInput {
    /// Directed query pairs (a, b), a ≠ b, with no token of `a` seeing `b`.
    pub fn blocked_query_pairs(&self) -> usize {
        let mut n = 0;
        for (a, ra) in self.queries.iter().enumerate() {
            for (b, rb) in self.queries.iter().enumerate() {
                if a != b && ra.clone().all(|i| rb.clone().all(|k| !self.mask[[i, k]])) {
                    n += 1;
                }
            }
        }
        n
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KtPrompt {
    pub context: Vec<u32>,
    pub queries: Vec<Vec<u32>>,
    pub kcs: Vec<String>,
    /// Oldest turns dropped to fit the context budget.
    pub dropped_turns: usize,
}

impl KtPrompt {
    fn assemble(&self, which: &[usize]) -> PackedInput {
        let c = self.context.len();
        let total = c + which.iter().map(|&k| self.queries[k].len()).sum::<usize>();
        let mut tokens = self.context.clone();
        let mut positions: Vec<usize> = (0..c).collect();
        let mut mask = Array2::from_elem((total, total), false);
        for i in 0..c {
            for k in 0..=i {
                mask[[i, k]] = true;
            }
        }
        let mut queries = Vec::new();
        let mut verdicts = Vec::new();
        for &q in which {
            let start = tokens.len();
            for (off, &t) in self.queries[q].iter().enumerate() {
                let i = start + off;
                tokens.push(t);
                positions.push(c + off);
                for k in 0..c {
                    mask[[i, k]] = true;
                }
                for k in start..=i {
                    mask[[i, k]] = true;
                }
            }
            queries.push(start..tokens.len());
            verdicts.push(tokens.len() - 1);
        }
        PackedInput {
            tokens,
            positions,
            mask,
            verdicts,
            queries,
        }
    }

    /// All queries in one sequence, each placed right after the context.
    pub fn packed(&self) -> PackedInput {
        self.assemble(&(0..self.queries.len()).collect::<Vec<_>>())
    }

    /// Context followed by query `k` alone.
    pub fn single(&self, k: usize) -> PackedInput {
        self.assemble(&[k])
    }

    pub fn unpacked(&self) -> Vec<PackedInput> {
        (0..self.queries.len()).map(|k| self.single(k)).collect()
    }

    pub fn max_len(&self) -> usize {
        self.context.len() + self.queries.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Renders dialogue contexts and KC queries into token ids.
#[derive(Debug, Clone)]
pub struct PromptBuilder {
    pub tokenizer: Tokenizer,
    /// KC id → description; ids without an entry are described by the id itself.
    pub descriptions: BTreeMap<String, String>,
    pub max_context_tokens: usize,
    pub max_positions: usize,
}

impl PromptBuilder {
    pub fn description<'a>(&'a self, kc: &'a str) -> &'a str {
        self.descriptions.get(kc).map(String::as_str).unwrap_or(kc)
    }

    /// Transcript of the opener, earlier pairs and the current tutor turn.
    /// Labels and KCs of earlier pairs are not shown.
    pub fn build(&self, ctx: &DialogueContext<'_>, kcs: &[String]) -> Result<KtPrompt> {
        if kcs.is_empty() {
            return Err(Error::invalid("a prompt needs at least one KC"));
        }
        let tok = &self.tokenizer;
        let mut header = vec![tok.special(BOS)];
        header.extend(tok.encode_text(INSTRUCTION));
        let turn = |role: &str, text: &str| {
            let mut v = vec![tok.special(role)];
            v.extend(tok.encode_text(text));
            v
        };
        let mut turns = Vec::new();
        if let Some(s0) = ctx.opener {
            turns.push(turn(STUDENT, s0));
        }
        for p in ctx.history {
            turns.push(turn(TUTOR, &p.tutor_text));
            turns.push(turn(STUDENT, &p.student_text));
        }
        turns.push(turn(TUTOR, ctx.tutor_text));

        let mut total = header.len() + turns.iter().map(Vec::len).sum::<usize>();
        let mut dropped = 0;
        while total > self.max_context_tokens && dropped + 1 < turns.len() {
            total -= turns[dropped].len();
            dropped += 1;
        }
        if total > self.max_context_tokens {
            return Err(Error::Budget(format!(
                "{}#{}: context needs {total} tokens with only the current turn, budget is {}",
                ctx.dialogue_id, ctx.j, self.max_context_tokens
            )));
        }
        let mut context = header;
        for t in &turns[dropped..] {
            context.extend_from_slice(t);
        }
        let queries = kcs
            .iter()
            .map(|k| {
                let mut q = vec![tok.special(KC)];
                q.extend(tok.encode_text(self.description(k)));
                q.push(tok.special(ANSWER));
                q
            })
            .collect();
        let prompt = KtPrompt {
            context,
            queries,
            kcs: kcs.to_vec(),
            dropped_turns: dropped,
        };
        if prompt.max_len() > self.max_positions {
            return Err(Error::Budget(format!(
                "{}#{}: prompt spans {} positions, the model has {}",
                ctx.dialogue_id,
                ctx.j,
                prompt.max_len(),
                self.max_positions
            )));
        }
        Ok(prompt)
    }
}

/// exp(v_T) / (exp(v_T) + exp(v_F)).
pub fn verdict_probability(v_true: f64, v_false: f64) -> f64 {
    crate::autodiff::sigmoid(v_true - v_false)
}

/// A language model that exposes verdict-token logits under a caller-given
/// attention mask and position ids, with trainable low-rank adapters over a
/// frozen base.
pub trait ScorableLm: Send + Sync {
    fn adapters(&self) -> &ParamStore;

    fn adapters_mut(&mut self) -> &mut ParamStore;

    /// Logits of (true, false) at each verdict position, as a K×2 matrix on
    /// `tape`, using `adapters` for the adapter weights.
    fn verdict_logits_on(&self, tape: &Tape, adapters: &Bound, input: &PackedInput) -> Result<Var>;

    fn verdict_logits(&self, input: &PackedInput) -> Result<Mat> {
        let tape = Tape::new();
        let bound = self.adapters().bind(&tape, |_| false);
        let v = self.verdict_logits_on(&tape, &bound, input)?;
        let out = tape.value(v).clone();
        Ok(out)
    }
}

/// ẑ for every query of `prompt`, scored in one packed pass.
pub fn score_masteries(lm: &dyn ScorableLm, prompt: &KtPrompt) -> Result<Vec<f64>> {
    let logits = lm.verdict_logits(&prompt.packed())?;
    Ok(logits.rows().into_iter().map(|r| verdict_probability(r[0], r[1])).collect())
}

/// ẑ with each query scored in its own prompt.
pub fn score_masteries_unpacked(lm: &dyn ScorableLm, prompt: &KtPrompt) -> Result<Vec<f64>> {
    prompt
        .unpacked()
        .iter()
        .map(|p| {
            let l = lm.verdict_logits(p)?;
            Ok(verdict_probability(l[[0, 0]], l[[0, 1]]))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            d_model: 32,
            layers: 2,
            heads: 2,
            d_ff: 64,
            max_positions: 1024,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 16, alpha: 16.0 }
    }
}

/// Pre-norm transformer decoder with learned positions, SiLU MLPs, a head
/// tied to the token embeddings and LoRA adapters on the query and value
/// projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyDecoder {
    pub config: DecoderConfig,
    pub lora: LoraConfig,
    pub vocab_size: usize,
    pub verdicts: (u32, u32),
    pub base: ParamStore,
    pub adapters: ParamStore,
}

fn normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Mat {
    let n = Normal::new(0.0, std).expect("positive std");
    Mat::from_shape_fn((rows, cols), |_| n.sample(rng))
}

impl TinyDecoder {
    pub fn new(config: DecoderConfig, lora: LoraConfig, vocab_size: usize, verdicts: (u32, u32)) -> Result<Self> {
        let d = config.d_model;
        if d == 0 || config.heads == 0 || d % config.heads != 0 {
            return Err(Error::Config(format!("d_model {d} must be a positive multiple of heads {}", config.heads)));
        }
        if lora.rank == 0 {
            return Err(Error::Config("adapter rank must be positive".into()));
        }
        if verdicts.0 == verdicts.1 || verdicts.0 as usize >= vocab_size || verdicts.1 as usize >= vocab_size {
            return Err(Error::Config("verdict tokens must be two distinct vocabulary entries".into()));
        }
        let seed = config.seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (d as f64).sqrt();
        let mut base = ParamStore::new();
        base.insert("tok_emb", normal(vocab_size, d, s, &mut rng));
        base.insert("pos_emb", normal(config.max_positions, d, 0.5 * s, &mut rng));
        for l in 0..config.layers {
            for w in ["wq", "wk", "wv", "wo"] {
                base.insert(format!("{l}.{w}"), normal(d, d, s, &mut rng));
            }
            base.insert(format!("{l}.w1"), normal(d, config.d_ff, s, &mut rng));
            base.insert(format!("{l}.w2"), normal(config.d_ff, d, 1.0 / (config.d_ff as f64).sqrt(), &mut rng));
        }
        let mut model = TinyDecoder {
            config,
            lora,
            vocab_size,
            verdicts,
            base,
            adapters: ParamStore::new(),
        };
        model.reset_adapters(seed.wrapping_add(1));
        Ok(model)
    }

    /// Fresh adapters: random A, zero B, so the adapted model equals the base.
    pub fn reset_adapters(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, r) = (self.config.d_model, self.lora.rank);
        let mut adapters = ParamStore::new();
        for l in 0..self.config.layers {
            for w in ["q", "v"] {
                adapters.insert(format!("{l}.{w}.a"), normal(d, r, 1.0 / (d as f64).sqrt(), &mut rng));
                adapters.insert(format!("{l}.{w}.b"), Mat::zeros((r, d)));
            }
        }
        self.adapters = adapters;
    }

    fn base(&self, name: &str) -> &Mat {
        self.base.get(name).unwrap_or_else(|| panic!("base weight `{name}` missing"))
    }

    fn adapted(&self, tape: &Tape, adapters: &Bound, h: Var, l: usize, w: &str) -> Var {
        let base = tape.matmul(h, tape.constant(self.base(&format!("{l}.w{w}")).clone()));
        let (Some(a), Some(b)) = (adapters.try_var(&format!("{l}.{w}.a")), adapters.try_var(&format!("{l}.{w}.b"))) else {
            return base;
        };
        let low = tape.matmul(tape.matmul(h, a), b);
        tape.add(base, tape.scale(low, self.lora.alpha / self.lora.rank as f64))
    }
}

impl ScorableLm for TinyDecoder {
    fn adapters(&self) -> &ParamStore {
        &self.adapters
    }

    fn adapters_mut(&mut self) -> &mut ParamStore {
        &mut self.adapters
    }

    fn verdict_logits_on(&self, tape: &Tape, adapters: &Bound, input: &PackedInput) -> Result<Var> {
        let n = input.tokens.len();
        if n == 0 || input.positions.len() != n || input.mask.dim() != (n, n) {
            return Err(Error::invalid("malformed packed input"));
        }
        if let Some(&p) = input.positions.iter().find(|&&p| p >= self.config.max_positions) {
            return Err(Error::Budget(format!("position {p} exceeds the model's {} positions", self.config.max_positions)));
        }
        if input.tokens.iter().any(|&t| t as usize >= self.vocab_size) {
            return Err(Error::invalid("token id outside the vocabulary"));
        }
        let d = self.config.d_model;
        let dh = d / self.config.heads;
        let tok_emb = self.base("tok_emb");
        let pos_emb = self.base("pos_emb");
        let ids: Vec<usize> = input.tokens.iter().map(|&t| t as usize).collect();
        let x0 = tok_emb.select(Axis(0), &ids) + pos_emb.select(Axis(0), &input.positions);
        let mut x = tape.constant(x0);
        let scale = 1.0 / (dh as f64).sqrt();
        for l in 0..self.config.layers {
            let h = tape.rms_norm(x, 1e-6);
            let q = self.adapted(tape, adapters, h, l, "q");
            let k = tape.matmul(h, tape.constant(self.base(&format!("{l}.wk")).clone()));
            let v = self.adapted(tape, adapters, h, l, "v");
            let heads: Vec<Var> = (0..self.config.heads)
                .map(|i| {
                    let (a, b) = (i * dh, (i + 1) * dh);
                    let scores = tape.scale(tape.matmul(tape.slice_cols(q, a, b), tape.transpose(tape.slice_cols(k, a, b))), scale);
                    let att = tape.masked_softmax(scores, &input.mask);
                    tape.matmul(att, tape.slice_cols(v, a, b))
                })
                .collect();
            let att = tape.matmul(tape.concat_cols(&heads), tape.constant(self.base(&format!("{l}.wo")).clone()));
            x = tape.add(x, att);
            let h2 = tape.rms_norm(x, 1e-6);
            let up = tape.silu(tape.matmul(h2, tape.constant(self.base(&format!("{l}.w1")).clone())));
            x = tape.add(x, tape.matmul(up, tape.constant(self.base(&format!("{l}.w2")).clone())));
        }
        let last = tape.select_rows(tape.rms_norm(x, 1e-6), &input.verdicts);
        let head = tok_emb.select(Axis(0), &[self.verdicts.0 as usize, self.verdicts.1 as usize]).t().to_owned();
        Ok(tape.matmul(last, tape.constant(head)))
    }
}

/// One labeled turn pair rendered as a packed prompt.
#[derive(Debug, Clone)]
pub struct Example {
    pub dialogue_id: String,
    pub j: usize,
    pub y: u8,
    pub kcs: Vec<String>,
    pub input: PackedInput,
    /// First labeled pair of its dialogue.
    pub first: bool,
}

/// Examples for every labeled pair. Dialogues with a prompt over budget are
/// skipped and returned by id.
pub fn build_examples(builder: &PromptBuilder, dialogues: &[&AnnotatedDialogue]) -> (Vec<Example>, Vec<(String, Error)>) {
    let mut out = Vec::new();
    let mut skipped = Vec::new();
    for d in dialogues {
        let mut mine = Vec::new();
        let mut failed = None;
        for (idx, p) in d.pairs.iter().enumerate() {
            let Some(y) = p.correctness.label() else { continue };
            let ctx = DialogueContext::at(d, idx + 1);
            match builder.build(&ctx, &p.kcs) {
                Ok(prompt) => mine.push(Example {
                    dialogue_id: d.id.clone(),
                    j: p.j,
                    y,
                    kcs: p.kcs.clone(),
                    input: prompt.packed(),
                    first: mine.is_empty(),
                }),
                Err(e) => {
                    failed = Some(e);
                    break;
                }
            }
        }
        match failed {
            Some(e) => {
                log::warn!("skipping dialogue {}: {e}", d.id);
                skipped.push((d.id.clone(), e));
            }
            None => out.extend(mine),
        }
    }
    (out, skipped)
}

fn example_loss(lm: &dyn ScorableLm, ex: &Example, with_grads: bool) -> Result<(f64, GradMap)> {
    let tape = Tape::new();
    let bound = lm.adapters().bind(&tape, |_| with_grads);
    let logits = lm.verdict_logits_on(&tape, &bound, &ex.input)?;
    let k = ex.kcs.len();
    let diff = tape.matmul(logits, tape.constant(ndarray::array![[1.0], [-1.0]]));
    let z = tape.sigmoid(diff);
    let mean = tape.matmul(tape.constant(Mat::from_elem((1, k), 1.0 / k as f64)), z);
    let loss = tape.bce(mean, Mat::from_elem((1, 1), f64::from(ex.y)), BCE_EPS);
    let value = tape.scalar(loss);
    let grads = if with_grads { bound.collect(&tape.backward(loss)) } else { GradMap::new() };
    Ok((value, grads))
}

/// Mean BCE over `batch` and its adapter gradients.
pub fn batch_loss_and_grads(lm: &dyn ScorableLm, batch: &[&Example]) -> Result<(f64, GradMap)> {
    let parts: Vec<(f64, GradMap)> = batch.par_iter().map(|ex| example_loss(lm, ex, true)).collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut grads = GradMap::new();
    for (l, g) in parts {
        total += l;
        add_into(&mut grads, g);
    }
    let n = batch.len().max(1) as f64;
    scale_grads(&mut grads, 1.0 / n);
    Ok((total / n, grads))
}

/// Records for `examples`; the first labeled pair of each dialogue is excluded.
pub fn predict_examples(lm: &dyn ScorableLm, examples: &[Example]) -> Result<Vec<PredictionRecord>> {
    examples
        .par_iter()
        .map(|ex| {
            let logits = lm.verdict_logits(&ex.input)?;
            let z: Vec<f64> = logits.rows().into_iter().map(|r| verdict_probability(r[0], r[1])).collect();
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("mastery at {}#{}", ex.dialogue_id, ex.j)));
            }
            let mut r = PredictionRecord::new(&ex.dialogue_id, ex.j, ex.y, z, ex.kcs.clone(), Aggregation::Mean)?;
            r.excluded = ex.first;
            Ok(r)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub lr: f64,
    /// Effective batch size, reached by accumulating micro-batches.
    pub batch_size: usize,
    pub micro_batch: usize,
    pub grad_clip: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lr: 2e-4,
            batch_size: 64,
            micro_batch: 8,
            grad_clip: 1.0,
            epochs: 5,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    /// Training objective before the first update.
    pub initial_train_loss: f64,
    /// Training objective with the kept adapters.
    pub final_train_loss: f64,
    pub epochs: Vec<FinetuneEpoch>,
    pub best_epoch: usize,
}

/// Per-dialogue summed BCE averaged over dialogues.
pub fn objective(lm: &dyn ScorableLm, examples: &[Example]) -> Result<f64> {
    Ok(bce_loss(&predict_examples(lm, examples)?))
}

/// Trains the adapters on the BCE of ŷ = mean ẑ. Adapters from the epoch
/// with the best validation AUC (first labels excluded) are kept.
pub fn finetune(lm: &mut dyn ScorableLm, train: &[Example], val: &[Example], cfg: &FinetuneConfig) -> Result<FinetuneLog> {
    if train.is_empty() {
        return Err(Error::invalid("no training prompts"));
    }
    if cfg.batch_size == 0 || cfg.micro_batch == 0 {
        return Err(Error::Config("batch sizes must be positive".into()));
    }
    let mut log = FinetuneLog {
        initial_train_loss: objective(lm, train)?,
        ..Default::default()
    };
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dialogues = train.iter().map(|e| &e.dialogue_id).collect::<std::collections::BTreeSet<_>>().len();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, ParamStore, usize)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut summed = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = GradMap::new();
            for micro in batch.chunks(cfg.micro_batch) {
                let exs: Vec<&Example> = micro.iter().map(|&i| &train[i]).collect();
                let (loss, mut g) = batch_loss_and_grads(lm, &exs)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("loss {loss} at epoch {epoch}")));
                }
                summed += loss * exs.len() as f64;
                scale_grads(&mut g, exs.len() as f64 / batch.len() as f64);
                add_into(&mut grads, g);
            }
            if grads.values().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite(format!("gradient at epoch {epoch}")));
            }
            clip_grad_norm(&mut grads, cfg.grad_clip);
            opt.step(lm.adapters_mut(), &grads);
        }
        let (val_loss, val_auc) = if val.is_empty() {
            (None, None)
        } else {
            let records = predict_examples(lm, val)?;
            let scored: Vec<&PredictionRecord> = records.iter().filter(|r| !r.excluded).collect();
            let labels: Vec<u8> = scored.iter().map(|r| r.y).collect();
            let preds: Vec<f64> = scored.iter().map(|r| r.y_hat).collect();
            (Some(bce_loss(&records)), auc(&labels, &preds))
        };
        log.epochs.push(FinetuneEpoch {
            epoch,
            train_loss: summed / dialogues as f64,
            val_loss,
            val_auc,
        });
        let score = match (val_auc, val_loss) {
            (Some(a), _) => a,
            (None, Some(l)) => -l,
            (None, None) => epoch as f64,
        };
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, lm.adapters().clone(), epoch));
        }
    }
    if let Some((_, adapters, epoch)) = best {
        *lm.adapters_mut() = adapters;
        log.best_epoch = epoch;
    }
    log.final_train_loss = objective(lm, train)?;
    Ok(log)
}

/// Everything needed to rebuild a trained tracer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmktConfig {
    pub model_id: String,
    pub decoder: DecoderConfig,
    pub lora: LoraConfig,
    pub finetune: FinetuneConfig,
    pub max_context_tokens: usize,
    pub max_vocab: usize,
    pub verdict_true: String,
    pub verdict_false: String,
    pub prompt_version: String,
}

impl Default for LlmktConfig {
    fn default() -> Self {
        LlmktConfig {
            model_id: "tiny-decoder".into(),
            decoder: DecoderConfig::default(),
            lora: LoraConfig::default(),
            finetune: FinetuneConfig::default(),
            max_context_tokens: 768,
            max_vocab: 4000,
            verdict_true: "True".into(),
            verdict_false: "False".into(),
            prompt_version: PROMPT_VERSION.into(),
        }
    }
}

pub struct LlmktModel {
    pub config: LlmktConfig,
    pub builder: PromptBuilder,
    pub lm: TinyDecoder,
}

impl LlmktModel {
    /// Untrained model with a vocabulary built from `dialogues` and the KC descriptions.
    pub fn new(config: LlmktConfig, dialogues: &[&AnnotatedDialogue], descriptions: BTreeMap<String, String>) -> Result<Self> {
        if config.prompt_version != PROMPT_VERSION {
            return Err(Error::Config(format!("unsupported prompt version `{}`", config.prompt_version)));
        }
        let mut texts: Vec<&str> = vec![INSTRUCTION];
        for d in dialogues {
            texts.extend(d.opener.as_deref());
            for p in &d.pairs {
                texts.push(&p.tutor_text);
                texts.push(&p.student_text);
                texts.extend(p.kcs.iter().map(String::as_str));
            }
        }
        texts.extend(descriptions.values().map(String::as_str));
        let tokenizer = Tokenizer::build(texts, (&config.verdict_true, &config.verdict_false), config.max_vocab)?;
        let lm = TinyDecoder::new(config.decoder.clone(), config.lora, tokenizer.len(), tokenizer.verdicts())?;
        let builder = PromptBuilder {
            tokenizer,
            descriptions,
            max_context_tokens: config.max_context_tokens,
            max_positions: config.decoder.max_positions,
        };
        Ok(LlmktModel { config, builder, lm })
    }

    pub fn examples(&self, dialogues: &[&AnnotatedDialogue]) -> (Vec<Example>, Vec<(String, Error)>) {
        build_examples(&self.builder, dialogues)
    }

    pub fn finetune(&mut self, train: &[&AnnotatedDialogue], val: &[&AnnotatedDialogue]) -> Result<FinetuneLog> {
        let (train_ex, _) = self.examples(train);
        let (val_ex, _) = self.examples(val);
        let cfg = self.config.finetune.clone();
        finetune(&mut self.lm, &train_ex, &val_ex, &cfg)
    }

    /// Writes config.json, tokenizer.json, base.json, adapters.json and descriptions.json.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_string(&dir.join("config.json"), &serde_json::to_string_pretty(&self.config)?)?;
        self.builder.tokenizer.save(&dir.join("tokenizer.json"))?;
        write_string(&dir.join("base.json"), &serde_json::to_string(&self.lm.base)?)?;
        write_string(&dir.join("adapters.json"), &serde_json::to_string(&self.lm.adapters)?)?;
        write_string(&dir.join("descriptions.json"), &serde_json::to_string_pretty(&self.builder.descriptions)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: LlmktConfig = serde_json::from_str(&read_to_string(&dir.join("config.json"))?)?;
        let tokenizer = Tokenizer::load(&dir.join("tokenizer.json"))?;
        let base: ParamStore = serde_json::from_str(&read_to_string(&dir.join("base.json"))?)?;
        let adapters: ParamStore = serde_json::from_str(&read_to_string(&dir.join("adapters.json"))?)?;
        let descriptions = serde_json::from_str(&read_to_string(&dir.join("descriptions.json"))?)?;
        let mut lm = TinyDecoder::new(config.decoder.clone(), config.lora, tokenizer.len(), tokenizer.verdicts())?;
        if base.get("tok_emb").map(Array2::dim) != lm.base.get("tok_emb").map(Array2::dim) {
            return Err(Error::invalid("base weights do not match the tokenizer"));
        }
        lm.base = base;
        lm.adapters = adapters;
        let builder = PromptBuilder {
            tokenizer,
            descriptions,
            max_context_tokens: config.max_context_tokens,
            max_positions: config.decoder.max_positions,
        };
        Ok(LlmktModel { config, builder, lm })
    }
}

/// Builds a prompt per turn pair and scores it with the language model.
pub struct LlmktPredictor<'a, L: ScorableLm + ?Sized> {
    pub lm: &'a L,
    pub builder: &'a PromptBuilder,
}

impl<L: ScorableLm + ?Sized> KtPredictor for LlmktPredictor<'_, L> {
    fn predict_masteries(&self, context: &DialogueContext<'_>, kcs: &[String]) -> Result<Vec<f64>> {
        let prompt = self.builder.build(context, kcs)?;
        let logits = self.lm.verdict_logits(&prompt.packed())?;
        Ok(logits.rows().into_iter().map(|r| verdict_probability(r[0], r[1])).collect())
    }
}

impl LlmktModel {
    pub fn predictor(&self) -> LlmktPredictor<'_, TinyDecoder> {
        LlmktPredictor {
            lm: &self.lm,
            builder: &self.builder,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use crate::corpus::{Correctness, TurnPair};
    use crate::kt::collect_predictions;
    use proptest::prelude::*;

    fn dialogue(id: &str, good: bool, n: usize) -> AnnotatedDialogue {
        let (hint, reply, lab) = if good {
            ("nice work so far", "it is twelve", Correctness::Correct)
        } else {
            ("let us try again slowly", "i am not sure", Correctness::Incorrect)
        };
        AnnotatedDialogue {
            id: id.into(),
            opener: Some("hi can you help".into()),
            pairs: (1..=n)
                .map(|j| TurnPair::new(j, format!("{hint} what is {j} times 3"), reply).labeled(lab, &["3.OA.A.1", "3.OA.C.7"][..1 + j % 2]))
                .collect(),
            meta: Default::default(),
        }
    }

    fn model(dialogues: &[AnnotatedDialogue]) -> LlmktModel {
        let refs: Vec<&AnnotatedDialogue> = dialogues.iter().collect();
        let mut desc = BTreeMap::new();
        desc.insert("3.OA.A.1".to_string(), "Interpret products of whole numbers".to_string());
        desc.insert("3.OA.C.7".to_string(), "Fluently multiply and divide within 100".to_string());
        let cfg = LlmktConfig {
            decoder: DecoderConfig { d_model: 16, layers: 2, heads: 2, d_ff: 32, max_positions: 256, seed: 3 },
            lora: LoraConfig { rank: 4, alpha: 8.0 },
            ..Default::default()
        };
        LlmktModel::new(cfg, &refs, desc).unwrap()
    }

    #[test]
    fn verdicts_are_reserved_single_tokens() {
        let t = Tokenizer::build(["True or false, the answer is true"], ("True", "False"), 100).unwrap();
        let (vt, vf) = t.verdicts();
        assert_eq!((t.token(vt), t.token(vf)), ("True", "False"));
        assert!(!t.encode_text("True False").contains(&vt));
        assert!(matches!(Tokenizer::build([""], ("Tr ue", "False"), 10), Err(Error::Config(_))));
        assert!(matches!(Tokenizer::build([""], ("Yes", "Yes"), 10), Err(Error::Config(_))));
    }

    #[test]
    fn two_way_softmax_values() {
        assert!((verdict_probability(2.0, 0.0) - 0.880797).abs() < 1e-6);
        assert_eq!(verdict_probability(1.3, 1.3), 0.5);
    }

    proptest! {
        #[test]
        fn verdict_probability_increases_in_true_logit(a in -10.0f64..10.0, d in 0.01f64..5.0, f in -10.0f64..10.0) {
            prop_assert!(verdict_probability(a + d, f) > verdict_probability(a, f));
        }
    }

    #[test]
    fn packing_plan() {
        let ds = vec![dialogue("a", true, 3)];
        let m = model(&ds);
        let kcs: Vec<String> = ["3.OA.A.1", "3.OA.C.7", "4.NBT.B.5"].iter().map(|s| s.to_string()).collect();
        let ctx = DialogueContext::at(&ds[0], 2);
        let p = m.builder.build(&ctx, &kcs).unwrap();
        let packed = p.packed();
        assert_eq!(packed.verdicts.len(), 3);
        assert_eq!(packed.blocked_query_pairs(), 6);
        for (q, r) in packed.queries.iter().enumerate() {
            assert_eq!(packed.positions[r.start], p.context.len(), "query {q}");
        }
        assert_eq!(p, m.builder.build(&ctx, &kcs).unwrap());

        let one = m.builder.build(&ctx, &kcs[..1]).unwrap();
        assert_eq!(one.packed(), one.single(0));
    }

    #[test]
    fn context_hides_labels_and_truncates_oldest() {
        let ds = vec![dialogue("a", true, 6)];
        let mut m = model(&ds);
        let ctx = DialogueContext::at(&ds[0], 5);
        let kcs = vec!["3.OA.A.1".to_string()];
        let full = m.builder.build(&ctx, &kcs).unwrap();
        assert_eq!(full.dropped_turns, 0);
        let kc_tok = m.builder.tokenizer.special(KC);
        assert_eq!(full.context.iter().filter(|&&t| t == kc_tok).count(), 0);

        m.builder.max_context_tokens = full.context.len() - 1;
        let cut = m.builder.build(&ctx, &kcs).unwrap();
        assert_eq!(cut.dropped_turns, 1);
        assert!(cut.context.len() < full.context.len());
        assert!(full.context.ends_with(&cut.context[cut.context.len() - 10..]));

        m.builder.max_context_tokens = 5;
        assert!(matches!(m.builder.build(&ctx, &kcs), Err(Error::Budget(_))));
    }

    #[test]
    fn packed_matches_unpacked_and_permutes_with_kcs() {
        let ds = vec![dialogue("a", true, 4), dialogue("b", false, 3)];
        let mut m = model(&ds);
        // Non-zero adapters so they take part in the comparison.
        let names: Vec<String> = m.lm.adapters.names().map(String::from).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in names {
            let shape = m.lm.adapters.get(&n).unwrap().dim();
            *m.lm.adapters.get_mut(&n).unwrap() = normal(shape.0, shape.1, 0.3, &mut rng);
        }
        let kcs: Vec<String> = ["3.OA.C.7", "3.OA.A.1", "5.NF.A.1", "6.EE.B.5"].iter().map(|s| s.to_string()).collect();
        for d in &ds {
            for j in 1..=d.pairs.len() {
                let ctx = DialogueContext::at(d, j);
                let p = m.builder.build(&ctx, &kcs).unwrap();
                let packed = score_masteries(&m.lm, &p).unwrap();
                let single = score_masteries_unpacked(&m.lm, &p).unwrap();
                for (a, b) in packed.iter().zip(&single) {
                    assert!((a - b).abs() < 1e-10, "{a} vs {b}");
                }
                let mut rev = kcs.clone();
                rev.reverse();
                let back = score_masteries(&m.lm, &m.builder.build(&ctx, &rev).unwrap()).unwrap();
                for (k, v) in back.iter().rev().enumerate() {
                    assert!((v - packed[k]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn predictor_is_causal_and_runs_zero_shot() {
        let ds = vec![dialogue("a", true, 4)];
        let m = model(&ds);
        let base = collect_predictions(&m.predictor(), &ds, Aggregation::Mean);
        assert_eq!(base.records.len(), 4);
        assert!(base.records[0].excluded);
        assert!(base.records.iter().all(|r| (0.0..=1.0).contains(&r.y_hat)));
        let mut changed = ds.clone();
        changed[0].pairs[3].tutor_text = "completely different ending".into();
        changed[0].pairs[2].student_text = "no".into();
        changed[0].pairs[2].correctness = Correctness::Incorrect;
        let after = collect_predictions(&m.predictor(), &changed, Aggregation::Mean);
        for k in 0..3 {
            assert_eq!(base.records[k].z_hats, after.records[k].z_hats);
        }
        assert_ne!(base.records[3].z_hats, after.records[3].z_hats);
    }

    #[test]
    fn unseen_kc_with_description_is_scored() {
        let ds = vec![dialogue("a", true, 2)];
        let mut m = model(&ds);
        m.builder.descriptions.insert("8.G.B.7".into(), "Apply the Pythagorean Theorem".into());
        let ctx = DialogueContext::at(&ds[0], 1);
        let z = m.predictor().predict_masteries(&ctx, &["8.G.B.7".into()]).unwrap();
        assert!(z[0] > 0.0 && z[0] < 1.0);
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let ds = vec![dialogue("a", true, 2), dialogue("b", false, 2)];
        let mut m = model(&ds);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let names: Vec<String> = m.lm.adapters.names().map(String::from).collect();
        for n in &names {
            let shape = m.lm.adapters.get(n).unwrap().dim();
            *m.lm.adapters.get_mut(n).unwrap() = normal(shape.0, shape.1, 0.2, &mut rng);
        }
        let refs: Vec<&AnnotatedDialogue> = ds.iter().collect();
        let (ex, _) = m.examples(&refs);
        let batch: Vec<&Example> = ex.iter().collect();
        let (_, grads) = batch_loss_and_grads(&m.lm, &batch).unwrap();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let lm = m.lm.clone();
        let err = finite_difference_check(&m.lm.adapters, &names, &grads, 1e-5, |p| {
            let mut probe = lm.clone();
            probe.adapters = p.clone();
            batch_loss_and_grads(&probe, &batch).unwrap().0
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn finetuning_reduces_loss_and_round_trips() {
        let ds: Vec<AnnotatedDialogue> = (0..8).map(|i| dialogue(&format!("d{i}"), i % 2 == 0, 3)).collect();
        let mut m = model(&ds);
        m.config.finetune = FinetuneConfig {
            lr: 2e-2,
            batch_size: 8,
            micro_batch: 4,
            ..Default::default()
        };
        let refs: Vec<&AnnotatedDialogue> = ds.iter().collect();
        let log = m.finetune(&refs, &[]).unwrap();
        assert_eq!(log.epochs.len(), 5);
        assert!(log.final_train_loss <= 0.7 * log.initial_train_loss, "{log:?}");

        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = LlmktModel::load(dir.path()).unwrap();
        let a = collect_predictions(&m.predictor(), &ds, Aggregation::Mean).records;
        let b = collect_predictions(&back.predictor(), &ds, Aggregation::Mean).records;
        assert_eq!(a, b);
    }
}
