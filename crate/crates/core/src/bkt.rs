//! Bayesian knowledge tracing: a two-state HMM per KC (no forgetting),
//! fit by Baum–Welch on pseudo-turn sequences.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::AnnotatedDialogue;
use crate::error::{read_to_string, write_string, Error, Result};
use crate::kt::{expand_pseudo_turns, DialogueContext, KtPredictor};

pub const PARAM_MIN: f64 = 0.01;
pub const PARAM_MAX: f64 = 0.99;
/// Upper bound for slip and guess.
pub const SLIP_GUESS_MAX: f64 = 0.49;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KcParams {
    pub init: f64,
    pub learn: f64,
    pub slip: f64,
    pub guess: f64,
}

impl Default for KcParams {
    fn default() -> Self {
        KcParams {
            init: 0.5,
            learn: 0.2,
            slip: 0.1,
            guess: 0.2,
        }
    }
}

impl KcParams {
    pub fn clamped(self) -> Self {
        KcParams {
            init: self.init.clamp(PARAM_MIN, PARAM_MAX),
            learn: self.learn.clamp(PARAM_MIN, PARAM_MAX),
            slip: self.slip.clamp(PARAM_MIN, SLIP_GUESS_MAX),
            guess: self.guess.clamp(PARAM_MIN, SLIP_GUESS_MAX),
        }
    }

    fn random(rng: &mut impl Rng) -> Self {
        KcParams {
            init: rng.random_range(0.05..0.95),
            learn: rng.random_range(0.02..0.6),
            slip: rng.random_range(0.02..0.35),
            guess: rng.random_range(0.02..0.35),
        }
    }

    fn emission(&self, mastered: bool, y: u8) -> f64 {
        let p1 = if mastered { 1.0 - self.slip } else { self.guess };
        if y == 1 {
            p1
        } else {
            1.0 - p1
        }
    }
}

/// P(correct) given prior mastery `l`.
pub fn predict_step(l: f64, p: &KcParams) -> f64 {
    l * (1.0 - p.slip) + (1.0 - l) * p.guess
}

/// Posterior on observing `y`, followed by the learning transition.
pub fn update(l: f64, y: u8, p: &KcParams) -> f64 {
    let num = l * p.emission(true, y);
    let den = num + (1.0 - l) * p.emission(false, y);
    let post = if den > 0.0 { num / den } else { l };
    post + (1.0 - post) * p.learn
}

/// Samples one observation sequence from the generative model.
pub fn sample_sequence(p: &KcParams, len: usize, rng: &mut impl Rng) -> Vec<u8> {
    let mut mastered = rng.random::<f64>() < p.init;
    (0..len)
        .map(|_| {
            let y = u8::from(rng.random::<f64>() < p.emission(mastered, 1));
            if !mastered {
                mastered = rng.random::<f64>() < p.learn;
            }
            y
        })
        .collect()
}

#[derive(Debug, Default, Clone, Copy)]
struct Counts {
    ll: f64,
    seqs: f64,
    init1: f64,
    trans01: f64,
    from0: f64,
    occ1: f64,
    wrong1: f64,
    occ0: f64,
    right0: f64,
}

/// Scaled forward–backward over one sequence, accumulating expected counts.
fn e_step(seq: &[u8], p: &KcParams, acc: &mut Counts) {
    let t_len = seq.len();
    if t_len == 0 {
        return;
    }
    let trans = [[1.0 - p.learn, p.learn], [0.0, 1.0]];
    let mut alpha = vec![[0.0f64; 2]; t_len];
    let mut scale = vec![0.0f64; t_len];
    let prior = [1.0 - p.init, p.init];
    for t in 0..t_len {
        for s in 0..2 {
            let pred = if t == 0 {
                prior[s]
            } else {
                alpha[t - 1][0] * trans[0][s] + alpha[t - 1][1] * trans[1][s]
            };
            alpha[t][s] = pred * p.emission(s == 1, seq[t]);
        }
        scale[t] = alpha[t][0] + alpha[t][1];
        alpha[t][0] /= scale[t];
        alpha[t][1] /= scale[t];
    }
    let mut beta = vec![[1.0f64; 2]; t_len];
    for t in (0..t_len - 1).rev() {
        for s in 0..2 {
            beta[t][s] = (0..2)
                .map(|n| trans[s][n] * p.emission(n == 1, seq[t + 1]) * beta[t + 1][n])
                .sum::<f64>()
                / scale[t + 1];
        }
    }
    acc.ll += scale.iter().map(|c| c.ln()).sum::<f64>();
    acc.seqs += 1.0;
    for t in 0..t_len {
        let g0 = alpha[t][0] * beta[t][0];
        let g1 = alpha[t][1] * beta[t][1];
        let norm = g0 + g1;
        let (g0, g1) = (g0 / norm, g1 / norm);
        if t == 0 {
            acc.init1 += g1;
        }
        if seq[t] == 1 {
            acc.right0 += g0;
        } else {
            acc.wrong1 += g1;
        }
        acc.occ0 += g0;
        acc.occ1 += g1;
        if t + 1 < t_len {
            acc.from0 += g0;
            acc.trans01 += alpha[t][0] * trans[0][1] * p.emission(true, seq[t + 1]) * beta[t + 1][1] / scale[t + 1];
        }
    }
}

fn expected_counts(seqs: &[Vec<u8>], p: &KcParams) -> Counts {
    let mut acc = Counts::default();
    for s in seqs {
        e_step(s, p, &mut acc);
    }
    acc
}

/// Log-likelihood of `seqs` under `p`.
pub fn log_likelihood(seqs: &[Vec<u8>], p: &KcParams) -> f64 {
    expected_counts(seqs, p).ll
}

fn ratio(num: f64, den: f64, fallback: f64) -> f64 {
    if den > 1e-12 {
        num / den
    } else {
        fallback
    }
}

/// Closed-form maximizers, clamped to the parameter bounds.
fn m_step(c: &Counts, prev: &KcParams) -> KcParams {
    KcParams {
        init: ratio(c.init1, c.seqs, prev.init),
        learn: ratio(c.trans01, c.from0, prev.learn),
        slip: ratio(c.wrong1, c.occ1, prev.slip),
        guess: ratio(c.right0, c.occ0, prev.guess),
    }
    .clamped()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BktConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for BktConfig {
    fn default() -> Self {
        BktConfig {
            max_iter: 200,
            tol: 1e-6,
            restarts: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmRun {
    pub params: KcParams,
    /// Log-likelihood before the first and after every M-step.
    pub trace: Vec<f64>,
}

impl EmRun {
    pub fn log_likelihood(&self) -> f64 {
        *self.trace.last().expect("trace is never empty")
    }
}

/// One EM run from `start`.
pub fn em(seqs: &[Vec<u8>], start: KcParams, max_iter: usize, tol: f64) -> EmRun {
    let mut params = start.clamped();
    let mut counts = expected_counts(seqs, &params);
    let mut trace = vec![counts.ll];
    for _ in 0..max_iter {
        params = m_step(&counts, &params);
        counts = expected_counts(seqs, &params);
        let prev = *trace.last().unwrap();
        trace.push(counts.ll);
        if counts.ll - prev < tol {
            break;
        }
    }
    EmRun { params, trace }
}

/// EM with restarts (the first from the default start); keeps the best run.
pub fn fit_sequences(seqs: &[Vec<u8>], config: &BktConfig, seed: u64) -> EmRun {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<EmRun> = None;
    for r in 0..config.restarts.max(1) {
        let start = if r == 0 { KcParams::default() } else { KcParams::random(&mut rng) };
        let run = em(seqs, start, config.max_iter, config.tol);
        if best.as_ref().is_none_or(|b| run.log_likelihood() > b.log_likelihood()) {
            best = Some(run);
        }
    }
    best.expect("at least one restart")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BktParams {
    pub kcs: BTreeMap<String, KcParams>,
    /// Used for KCs never seen in training.
    pub fallback: KcParams,
}

impl BktParams {
    pub fn get(&self, kc: &str) -> &KcParams {
        self.kcs.get(kc).unwrap_or(&self.fallback)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_string(path, &(serde_json::to_string_pretty(self)? + "\n"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let params: BktParams = serde_json::from_str(&read_to_string(path)?)?;
        for (kc, p) in params.kcs.iter().chain([(&"<fallback>".to_string(), &params.fallback)]) {
            let ok = [p.init, p.learn, p.slip, p.guess].iter().all(|v| *v > 0.0 && *v < 1.0);
            if !ok {
                return Err(Error::invalid(format!("BKT parameters for {kc} are not probabilities in (0, 1)")));
            }
        }
        Ok(params)
    }
}

#[derive(Debug, Clone)]
pub struct BktFit {
    pub params: BktParams,
    pub traces: BTreeMap<String, Vec<f64>>,
    pub fallback_trace: Vec<f64>,
}

/// Per-KC observation sequences: the KC's pseudo-turns within each dialogue.
pub fn kc_sequences<'a, I>(dialogues: I) -> BTreeMap<String, Vec<Vec<u8>>>
where
    I: IntoIterator<Item = &'a AnnotatedDialogue>,
{
    let mut out: BTreeMap<String, Vec<Vec<u8>>> = BTreeMap::new();
    for d in dialogues {
        let mut per_kc: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        for pt in expand_pseudo_turns(d) {
            per_kc.entry(pt.kc).or_default().push(pt.y);
        }
        for (kc, seq) in per_kc {
            out.entry(kc).or_default().push(seq);
        }
    }
    out
}

fn kc_seed(base: u64, kc: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(kc.as_bytes());
    base ^ u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Fits every KC in parallel plus a pooled fallback.
pub fn fit<'a, I>(dialogues: I, config: &BktConfig) -> Result<BktFit>
where
    I: IntoIterator<Item = &'a AnnotatedDialogue>,
{
    let sequences = kc_sequences(dialogues);
    if sequences.is_empty() {
        return Err(Error::invalid("no labeled pseudo-turns to fit BKT on"));
    }
    let runs: Vec<(String, EmRun)> = sequences
        .par_iter()
        .map(|(kc, seqs)| (kc.clone(), fit_sequences(seqs, config, kc_seed(config.seed, kc))))
        .collect();
    let pooled: Vec<Vec<u8>> = sequences.values().flatten().cloned().collect();
    let fallback = fit_sequences(&pooled, config, config.seed);
    let mut kcs = BTreeMap::new();
    let mut traces = BTreeMap::new();
    for (kc, run) in runs {
        kcs.insert(kc.clone(), run.params);
        traces.insert(kc, run.trace);
    }
    Ok(BktFit {
        params: BktParams {
            kcs,
            fallback: fallback.params,
        },
        traces,
        fallback_trace: fallback.trace,
    })
}

/// Teacher-forced BKT tracer; each KC's state evolves independently.
#[derive(Debug, Clone)]
pub struct BktPredictor {
    pub params: BktParams,
}

impl BktPredictor {
    pub fn new(params: BktParams) -> Self {
        BktPredictor { params }
    }
}

impl KtPredictor for BktPredictor {
    fn predict_masteries(&self, context: &DialogueContext<'_>, kcs: &[String]) -> Result<Vec<f64>> {
        Ok(kcs
            .iter()
            .map(|kc| {
                let p = self.params.get(kc);
                let l = context
                    .history
                    .iter()
                    .filter(|pair| pair.kcs.iter().any(|k| k == kc))
                    .filter_map(|pair| pair.correctness.label())
                    .fold(p.init, |l, y| update(l, y, p));
                predict_step(l, p)
            })
            .collect())
    }
}
