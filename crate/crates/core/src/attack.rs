//! Iterative sign-gradient attack on trial scores: perturb the test
//! utterance inside an ∞-norm ball to push its similarity with the
//! enrollment up (nontarget trials) or down (target trials). The victim is
//! either the bare verifier or a substitute defense chain in front of it.

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;

use crate::asv::{dot, DefenseStage, EmbeddingNet};
use crate::error::Error;
use crate::features::FeatureMatrix;
use crate::filters::FilterKind;
use crate::synth::{TrialLabel, TrialSet, Utterance};
use crate::tensor::{Graph, NodeId};

// ─── configuration ──────────────────────────────────────────────────────────

/// Perturbation budget and step rule. `alpha` defaults to `epsilon /
/// n_iters`. A zero budget is allowed as the degenerate no-op attack; any
/// positive budget requires `0 < alpha <= epsilon`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub n_iters: u32,
    pub alpha: f64,
}

impl AttackConfig {
    pub fn new(epsilon: f64, n_iters: u32) -> Result<Self, Error> {
        let cfg = AttackConfig {
            epsilon,
            n_iters,
            alpha: if n_iters > 0 {
                epsilon / n_iters as f64
            } else {
                0.0
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_alpha(epsilon: f64, n_iters: u32, alpha: f64) -> Result<Self, Error> {
        let cfg = AttackConfig {
            epsilon,
            n_iters,
            alpha,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Error> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Invalid(format!(
                "epsilon must be finite and nonnegative, got {}",
                self.epsilon
            )));
        }
        if self.n_iters == 0 {
            return Err(Error::Invalid("attack needs at least one iteration".into()));
        }
        if self.epsilon > 0.0 {
            if !(self.alpha > 0.0) || self.alpha > self.epsilon {
                return Err(Error::Invalid(format!(
                    "step size must satisfy 0 < alpha <= epsilon, got alpha {} epsilon {}",
                    self.alpha, self.epsilon
                )));
            }
        } else if self.alpha != 0.0 {
            return Err(Error::Invalid(format!(
                "a zero budget requires a zero step size, got alpha {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 0.3,
            n_iters: 5,
            alpha: 0.3 / 5.0,
        }
    }
}

// ─── victim ─────────────────────────────────────────────────────────────────

/// What the attacker differentiates through: zero or more substitute defense
/// stages followed by the embedding net and cosine scoring. Every stage must
/// be differentiable, so the median filter is rejected at construction.
#[derive(Debug, Clone)]
pub struct VictimPipeline<'a> {
    asv: &'a EmbeddingNet,
    stages: Vec<DefenseStage<'a>>,
}

pub fn make_victim<'a>(
    asv: &'a EmbeddingNet,
    stages: Vec<DefenseStage<'a>>,
) -> Result<VictimPipeline<'a>, Error> {
    for stage in &stages {
        if let DefenseStage::Filter(spec) = stage {
            spec.validate()?;
            if spec.kind == FilterKind::Median {
                return Err(Error::Invalid(format!(
                    "substitute stage `{}` is not differentiable",
                    spec.kind.name()
                )));
            }
        }
    }
    Ok(VictimPipeline { asv, stages })
}

impl<'a> VictimPipeline<'a> {
    pub fn asv(&self) -> &'a EmbeddingNet {
        self.asv
    }

    pub fn stages(&self) -> &[DefenseStage<'a>] {
        &self.stages
    }

    /// Graph from the raw test input through every substitute stage.
    fn build_defended(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, Error> {
        let mut cur = x;
        for stage in &self.stages {
            match stage {
                DefenseStage::Cascade { net, k } => {
                    for _ in 0..*k {
                        cur = net.build_forward(g, cur)?.0;
                    }
                }
                DefenseStage::Filter(spec) => {
                    let kern = spec.kernel2d()?.ok_or_else(|| {
                        Error::Invalid(format!(
                            "substitute stage `{}` is not differentiable",
                            spec.kind.name()
                        ))
                    })?;
                    cur = g.correlate2d(cur, &kern, spec.window, spec.window)?;
                }
            }
        }
        Ok(cur)
    }

    /// Similarity of a fixed enrollment embedding with the defended test
    /// input, plus its gradient w.r.t. the raw test features.
    pub fn score_and_grad(
        &self,
        enroll_emb: &[f64],
        test: &FeatureMatrix,
    ) -> Result<(f64, Vec<f64>), Error> {
        let mut g = Graph::new();
        let xid = g.input(&test.to_tensor())?;
        let defended = self.build_defended(&mut g, xid)?;
        let (emb, _) = self.asv.build_embed(&mut g, defended)?;
        let e = g.input(&crate::tensor::Tensor::matrix(
            1,
            enroll_emb.len(),
            enroll_emb.to_vec(),
        )?)?;
        let prod = g.mul(emb, e)?;
        let sim = g.sum_all(prod);
        g.backward(sim)?;
        Ok((g.scalar_value(sim), g.grad(xid).to_vec()))
    }

    /// Similarity scored the same way the evaluation path scores trials.
    pub fn score(&self, enroll: &FeatureMatrix, test: &FeatureMatrix) -> Result<f64, Error> {
        let enroll_emb = self.asv.embed(enroll)?;
        let mut g = Graph::new();
        let xid = g.input(&test.to_tensor())?;
        let defended = self.build_defended(&mut g, xid)?;
        let (emb, _) = self.asv.build_embed(&mut g, defended)?;
        Ok(dot(enroll_emb.values(), g.value(emb)))
    }
}

// ─── attack ─────────────────────────────────────────────────────────────────

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn bim_attack_from_emb(
    victim: &VictimPipeline<'_>,
    enroll_emb: &[f64],
    test: &FeatureMatrix,
    label: TrialLabel,
    cfg: &AttackConfig,
) -> Result<FeatureMatrix, Error> {
    if cfg.epsilon == 0.0 {
        return Ok(test.clone());
    }
    let direction = match label {
        TrialLabel::Nontarget => 1.0,
        TrialLabel::Target => -1.0,
    };
    let mut cur = test.clone();
    for iter in 0..cfg.n_iters {
        let (_, grad) = victim.score_and_grad(enroll_emb, &cur)?;
        if let Some(bad) = grad.iter().find(|v| !v.is_finite()) {
            return Err(Error::Diverged(format!(
                "gradient became {bad} at attack iteration {iter}"
            )));
        }
        let step = direction * cfg.alpha;
        for (v, (&orig, &g)) in cur
            .data_mut()
            .iter_mut()
            .zip(test.data().iter().zip(&grad))
        {
            *v = (*v + step * sign(g)).clamp(orig - cfg.epsilon, orig + cfg.epsilon);
        }
    }
    Ok(cur)
}

/// Iterated sign-gradient perturbation of the test utterance. Each step
/// moves by `alpha` along the per-cell gradient sign — ascending similarity
/// on nontarget trials, descending on target trials — then clips back into
/// the ∞-norm ball of radius `epsilon` around the original features.
pub fn bim_attack(
    victim: &VictimPipeline<'_>,
    enroll: &FeatureMatrix,
    test: &FeatureMatrix,
    label: TrialLabel,
    cfg: &AttackConfig,
) -> Result<FeatureMatrix, Error> {
    cfg.validate()?;
    let enroll_emb = victim.asv.embed(enroll)?;
    bim_attack_from_emb(victim, enroll_emb.values(), test, label, cfg)
}

/// Attacks every trial, returning the adversarial test features in trial
/// order. Enrollment utterances are untouched. Trials run in parallel; the
/// attack is deterministic, so the result equals a serial pass bit-for-bit.
pub fn attack_trialset(
    victim: &VictimPipeline<'_>,
    utterances: &[Utterance],
    trials: &TrialSet,
    cfg: &AttackConfig,
) -> Result<Vec<FeatureMatrix>, Error> {
    cfg.validate()?;
    trials.validate(utterances)?;

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
            let e = victim.asv.embed(&utterances[i].features)?;
            Ok((i, e.values().to_vec()))
        })
        .collect::<Result<_, Error>>()?;

    trials
        .trials
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            bim_attack_from_emb(
                victim,
                &enroll_embs[&t.enroll],
                &utterances[t.test].features,
                t.label,
                cfg,
            )
            .map_err(|e| match e {
                Error::Diverged(m) => Error::Diverged(format!("trial {i}: {m}")),
                Error::Invalid(m) => Error::Invalid(format!("trial {i}: {m}")),
                other => other,
            })
        })
        .collect()
}

// ─── tests ──────────────────────────────────────────────────────────────────
