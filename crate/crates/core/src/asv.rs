//! Toy speaker verifier: a frame-wise MLP embedding net with mean pooling
//! over time, trained with additive-angular-margin softmax, scored by cosine
//! of length-normalized embeddings. An optional defense chain (purifier
//! cascade and/or fixed filters) runs on the test side before scoring.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::Error;
use crate::features::FeatureMatrix;
use crate::filters::{apply_filter, FilterSpec};
use crate::format::Checkpoint;
use crate::mix_seed;
use crate::recon::{cascade_apply, ReconNet};
use crate::synth::{Trial, TrialLabel, TrialSet, Utterance};
use crate::tensor::{AdamState, Graph, LrSchedule, NodeId, Tensor};

pub const AAM_MARGIN: f64 = 0.2;
pub const AAM_SCALE: f64 = 30.0;

const SALT_INIT: u64 = 0x6173_7630;
const SALT_SHUFFLE: u64 = 0x6173_7631;

// ─── embedding net ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AsvConfig {
    pub channels: usize,
    pub hidden: usize,
    pub emb_dim: usize,
    pub n_speakers: usize,
}

impl Default for AsvConfig {
    fn default() -> Self {
        AsvConfig {
            channels: 24,
            hidden: 64,
            emb_dim: 32,
            n_speakers: 20,
        }
    }
}

impl AsvConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.channels == 0 || self.hidden == 0 || self.emb_dim == 0 {
            return Err(Error::Invalid(format!("asv config has a zero field: {self:?}")));
        }
        if self.n_speakers < 2 {
            return Err(Error::Invalid(format!(
                "training head needs at least 2 speakers, got {}",
                self.n_speakers
            )));
        }
        Ok(())
    }
}

/// Two gelu hidden layers applied per frame, mean pooling over time, a
/// projection to the embedding space, and length normalization. The class
/// weight matrix is used only by the training loss.
#[derive(Debug, Clone)]
pub struct EmbeddingNet {
    cfg: AsvConfig,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    w3: Tensor,
    b3: Tensor,
    class_w: Tensor,
}

impl EmbeddingNet {
    pub fn new(cfg: &AsvConfig, seed: u64) -> Result<Self, Error> {
        cfg.validate()?;
        let (c, h, d) = (cfg.channels, cfg.hidden, cfg.emb_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, SALT_INIT));
        Ok(EmbeddingNet {
            cfg: *cfg,
            w1: Tensor::randn(vec![c, h], 1.0 / (c as f64).sqrt(), &mut rng)?,
            b1: Tensor::zeros(vec![h])?,
            w2: Tensor::randn(vec![h, h], 1.0 / (h as f64).sqrt(), &mut rng)?,
            b2: Tensor::zeros(vec![h])?,
            w3: Tensor::randn(vec![h, d], 1.0 / (h as f64).sqrt(), &mut rng)?,
            b3: Tensor::zeros(vec![d])?,
            class_w: Tensor::randn(vec![cfg.n_speakers, d], 1.0 / (d as f64).sqrt(), &mut rng)?,
        })
    }

    pub fn config(&self) -> &AsvConfig {
        &self.cfg
    }

    /// Builds the embedding path from a TxC input node to a unit-norm [1, D]
    /// node. Returns the embedding node and the parameter nodes in canonical
    /// order (w1, b1, w2, b2, w3, b3).
    pub fn build_embed(&self, g: &mut Graph, x: NodeId) -> Result<(NodeId, Vec<NodeId>), Error> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.channels {
            return Err(Error::Invalid(format!(
                "expected a Tx{} input, got shape {shape:?}",
                self.cfg.channels
            )));
        }
        let w1 = g.input(&self.w1)?;
        let b1 = g.input(&self.b1)?;
        let w2 = g.input(&self.w2)?;
        let b2 = g.input(&self.b2)?;
        let w3 = g.input(&self.w3)?;
        let b3 = g.input(&self.b3)?;

        let h1 = g.linear(x, w1, b1)?;
        let a1 = g.gelu(h1);
        let h2 = g.linear(a1, w2, b2)?;
        let a2 = g.gelu(h2);
        let pooled = g.mean_rows(a2)?;
        let proj = g.linear(pooled, w3, b3)?;
        let emb = g.l2_normalize(proj)?;
        Ok((emb, vec![w1, b1, w2, b2, w3, b3]))
    }

    /// Unit-norm embedding of one utterance.
    pub fn embed(&self, x: &FeatureMatrix) -> Result<Tensor, Error> {
        let mut g = Graph::new();
        let xid = g.input(&x.to_tensor())?;
        let (emb, _) = self.build_embed(&mut g, xid)?;
        Ok(g.to_tensor(emb).reshaped(vec![self.cfg.emb_dim])?)
    }

    /// Cosine score of two utterances, clamped to [-1, 1].
    pub fn score(&self, enroll: &FeatureMatrix, test: &FeatureMatrix) -> Result<f64, Error> {
        let e = self.embed(enroll)?;
        let t = self.embed(test)?;
        Ok(dot(e.values(), t.values()))
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
            &mut self.class_w,
        ]
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("w1".into(), &self.w1),
            ("b1".into(), &self.b1),
            ("w2".into(), &self.w2),
            ("b2".into(), &self.b2),
            ("w3".into(), &self.w3),
            ("b3".into(), &self.b3),
            ("class_w".into(), &self.class_w),
        ]
    }

    pub fn to_checkpoint(&self, config_hash: u64) -> Checkpoint {
        let mut ck = Checkpoint::new(config_hash);
        for (name, t) in self.named_params() {
            ck.push(name, t.clone());
        }
        ck
    }

    pub fn from_checkpoint(cfg: &AsvConfig, ck: &Checkpoint) -> Result<Self, Error> {
        let mut net = EmbeddingNet::new(cfg, 0)?;
        let names: Vec<String> = net.named_params().iter().map(|(n, _)| n.clone()).collect();
        for (name, slot) in names.iter().zip(net.params_mut()) {
            let stored = ck
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint is missing tensor `{name}`")))?;
            if stored.shape() != slot.shape() {
                return Err(Error::Invalid(format!(
                    "checkpoint tensor `{name}` has shape {:?}, expected {:?}",
                    stored.shape(),
                    slot.shape()
                )));
            }
            *slot = stored.clone();
        }
        Ok(net)
    }
}

/// Cosine of two unit vectors, clamped so rounding can never push a score
/// outside [-1, 1].
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0)
}

// ─── training ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsvTrainConfig {
    pub epochs: u32,
    pub batch: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
}

impl Default for AsvTrainConfig {
    fn default() -> Self {
        AsvTrainConfig {
            epochs: 12,
            batch: 16,
            peak_lr: 1e-3,
            warmup_frac: 0.07,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsvTrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Trains a fresh embedding net with AAM-softmax (m = 0.2, s = 30) and Adam
/// under a warmup/decay schedule. Single-threaded, deterministic in `seed`.
pub fn train_asv(
    utterances: &[Utterance],
    cfg: &AsvConfig,
    train: &AsvTrainConfig,
    seed: u64,
) -> Result<(EmbeddingNet, AsvTrainReport), Error> {
    cfg.validate()?;
    if utterances.is_empty() {
        return Err(Error::Invalid("training corpus is empty".into()));
    }
    if train.epochs == 0 || train.batch == 0 {
        return Err(Error::Invalid(format!(
            "training needs epochs >= 1 and batch >= 1, got {} and {}",
            train.epochs, train.batch
        )));
    }
    let speakers: BTreeSet<u32> = utterances.iter().map(|u| u.speaker_id).collect();
    if speakers.len() < 2 {
        return Err(Error::Invalid(format!(
            "training corpus has {} distinct speakers, need at least 2",
            speakers.len()
        )));
    }
    for u in utterances {
        if u.speaker_id as usize >= cfg.n_speakers {
            return Err(Error::Invalid(format!(
                "speaker id {} does not fit a {}-way training head",
                u.speaker_id, cfg.n_speakers
            )));
        }
        if u.features.channels() != cfg.channels {
            return Err(Error::Invalid(format!(
                "utterance has {} channels, net expects {}",
                u.features.channels(),
                cfg.channels
            )));
        }
    }

    let mut net = EmbeddingNet::new(cfg, seed)?;
    let sizes: Vec<usize> = net.named_params().iter().map(|(_, t)| t.len()).collect();
    let batches_per_epoch = utterances.len().div_ceil(train.batch) as u64;
    let sched = LrSchedule::new(
        train.peak_lr,
        train.warmup_frac,
        train.epochs as u64 * batches_per_epoch,
    )?;
    let mut opt = AdamState::new(sched, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, SALT_SHUFFLE));

    let mut epoch_losses = Vec::with_capacity(train.epochs as usize);
    let mut order: Vec<usize> = (0..utterances.len()).collect();
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(train.batch) {
            let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            let mut batch_loss = 0.0;
            for &idx in chunk {
                let u = &utterances[idx];
                let mut g = Graph::new();
                let xid = g.input(&u.features.to_tensor())?;
                let (emb, pids) = net.build_embed(&mut g, xid)?;
                let wc = g.input(&net.class_w)?;
                let loss = g.aam_softmax_loss(
                    emb,
                    wc,
                    u.speaker_id as usize,
                    AAM_MARGIN,
                    AAM_SCALE,
                )?;
                g.backward(loss)?;
                batch_loss += g.scalar_value(loss);
                for (acc, pid) in grads.iter_mut().zip(pids.iter().chain([&wc])) {
                    for (a, &d) in acc.iter_mut().zip(g.grad(*pid)) {
                        *a += d;
                    }
                }
            }
            batch_loss /= chunk.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "training loss became {batch_loss} in epoch {epoch}"
                )));
            }
            epoch_loss += batch_loss;
            batches += 1.0;

            let scale = 1.0 / chunk.len() as f64;
            let mut params = net.params_mut();
            for (p, mut acc) in params.iter_mut().zip(grads) {
                acc.iter_mut().for_each(|v| *v *= scale);
                p.set_grad(acc)?;
            }
            opt.step(&mut params)?;
            for p in params {
                p.clear_grad();
            }
        }
        epoch_losses.push(epoch_loss / batches);
    }

    let (first, last) = (epoch_losses[0], *epoch_losses.last().unwrap());
    if !(last < first) && train.epochs > 1 {
        return Err(Error::Diverged(format!(
            "no improvement over {} epochs: first {first}, last {last}",
            train.epochs
        )));
    }
    Ok((net, AsvTrainReport { epoch_losses }))
}

// ─── pipeline & trial evaluation ────────────────────────────────────────────

/// One step of the defense chain applied before scoring.
#[derive(Debug, Clone)]
pub enum DefenseStage<'a> {
    /// Frozen purifier applied k times.
    Cascade { net: &'a ReconNet, k: usize },
    /// Fixed smoothing filter.
    Filter(FilterSpec),
}

impl DefenseStage<'_> {
    pub fn apply(&self, x: &FeatureMatrix) -> Result<FeatureMatrix, Error> {
        match self {
            DefenseStage::Cascade { net, k } => cascade_apply(net, *k, x),
            DefenseStage::Filter(spec) => apply_filter(spec, x),
        }
    }
}

/// Frozen verifier plus an ordered defense chain. The chain runs on the test
/// utterance only; enrollment is always scored raw.
#[derive(Debug, Clone)]
pub struct ASVPipeline<'a> {
    pub net: &'a EmbeddingNet,
    pub defense: Vec<DefenseStage<'a>>,
}

impl ASVPipeline<'_> {
    pub fn defend(&self, x: &FeatureMatrix) -> Result<FeatureMatrix, Error> {
        let mut cur = x.clone();
        for stage in &self.defense {
            cur = stage.apply(&cur)?;
        }
        Ok(cur)
    }

    pub fn score_trial(
        &self,
        enroll: &FeatureMatrix,
        test: &FeatureMatrix,
    ) -> Result<f64, Error> {
        let defended = self.defend(test)?;
        self.net.score(enroll, &defended)
    }
}

/// Scores every trial, returning (score, label) pairs in trial order. When
/// `test_override` is given it supplies the test-side features of trial i
/// (adversarial evaluation); enrollment features always come from the
/// utterance list. Work is parallel across distinct utterances, with results
/// identical to a serial pass.
pub fn eval_trials(
    pipeline: &ASVPipeline<'_>,
    utterances: &[Utterance],
    trials: &TrialSet,
    test_override: Option<&[FeatureMatrix]>,
) -> Result<Vec<(f64, TrialLabel)>, Error> {
    trials.validate(utterances)?;
    if let Some(ov) = test_override {
        if ov.len() != trials.trials.len() {
            return Err(Error::Invalid(format!(
                "test override supplies {} matrices for {} trials",
                ov.len(),
                trials.trials.len()
            )));
        }
    }

    let enroll_ids: Vec<usize> = trials
        .trials
        .iter()
        .map(|t| t.enroll)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let enroll_embs: HashMap<usize, Vec<f64>> = enroll_ids
        .par_iter()
        .map(|&i| {
            let e = pipeline.net.embed(&utterances[i].features)?;
            Ok((i, e.values().to_vec()))
        })
        .collect::<Result<_, Error>>()?;

    match test_override {
        None => {
            let test_ids: Vec<usize> = trials
                .trials
                .iter()
                .map(|t| t.test)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let test_embs: HashMap<usize, Vec<f64>> = test_ids
                .par_iter()
                .map(|&i| {
                    let defended = pipeline.defend(&utterances[i].features)?;
                    let e = pipeline.net.embed(&defended)?;
                    Ok((i, e.values().to_vec()))
                })
                .collect::<Result<_, Error>>()?;
            Ok(trials
                .trials
                .iter()
                .map(|t| (dot(&enroll_embs[&t.enroll], &test_embs[&t.test]), t.label))
                .collect())
        }
        Some(ov) => trials
            .trials
            .par_iter()
            .zip(ov)
            .map(|(t, x)| {
                let defended = pipeline.defend(x)?;
                let e = pipeline.net.embed(&defended)?;
                Ok((dot(&enroll_embs[&t.enroll], e.values()), t.label))
            })
            .collect(),
    }
}

/// Builds the full ordered-pair trial list for a small utterance set; test
/// helper shared with the harness.
pub fn exhaustive_trials(utterances: &[Utterance]) -> TrialSet {
    let mut trials = Vec::new();
    for e in 0..utterances.len() {
        for t in 0..utterances.len() {
            if e == t {
                continue;
            }
            let label = if utterances[e].speaker_id == utterances[t].speaker_id {
                TrialLabel::Target
            } else {
                TrialLabel::Nontarget
            };
            trials.push(Trial {
                enroll: e,
                test: t,
                label,
            });
        }
    }
    TrialSet { trials }
}

// ─── tests ──────────────────────────────────────────────────────────────────
