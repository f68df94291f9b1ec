//! Seeded synthetic corpus: speakers with per-channel spectral templates,
//! utterances as T×C feature matrices, and enrollment/test trial lists.

use crate::error::Error;
use crate::features::FeatureMatrix;
use crate::mix_seed;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// One synthetic speaker: a fixed spectral template plus a slow sinusoidal
/// modulation that gives frames within an utterance temporal structure.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerSpec {
    pub id: u32,
    pub template: Vec<f64>,
    pub modulation: Vec<f64>,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub speaker_id: u32,
    pub features: FeatureMatrix,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrialLabel {
    Target,
    Nontarget,
}

/// One verification trial: indices into an utterance list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trial {
    pub enroll: usize,
    pub test: usize,
    pub label: TrialLabel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
}

impl TrialSet {
    /// Checks every trial against the utterance list: indices in range, no
    /// self-pairs, labels consistent with speaker ids.
    pub fn validate(&self, utterances: &[Utterance]) -> Result<(), Error> {
        for (i, t) in self.trials.iter().enumerate() {
            if t.enroll >= utterances.len() || t.test >= utterances.len() {
                return Err(Error::Invalid(format!(
                    "trial {i} references utterance out of range ({} utterances)",
                    utterances.len()
                )));
            }
            if t.enroll == t.test {
                return Err(Error::Invalid(format!(
                    "trial {i} pairs utterance {} with itself",
                    t.enroll
                )));
            }
            let same = utterances[t.enroll].speaker_id == utterances[t.test].speaker_id;
            let ok = match t.label {
                TrialLabel::Target => same,
                TrialLabel::Nontarget => !same,
            };
            if !ok {
                return Err(Error::Invalid(format!(
                    "trial {i} label {:?} contradicts speaker ids {} vs {}",
                    t.label, utterances[t.enroll].speaker_id, utterances[t.test].speaker_id
                )));
            }
        }
        Ok(())
    }
}

/// Draws a speaker bank. Templates are per-channel standard normals,
/// modulation amplitudes folded normals scaled by 0.3, rates uniform in
/// [8, 32] frames per cycle. Deterministic in (n_speakers, channels, seed).
pub fn make_speakers(
    n_speakers: usize,
    channels: usize,
    seed: u64,
) -> Result<Vec<SpeakerSpec>, Error> {
    if n_speakers < 2 {
        return Err(Error::Invalid(format!(
            "need at least 2 speakers for nontarget trials, got {n_speakers}"
        )));
    }
    if channels == 0 {
        return Err(Error::Invalid("channel count must be positive".into()));
    }
    let mut out = Vec::with_capacity(n_speakers);
    for i in 0..n_speakers {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
        let template: Vec<f64> = (0..channels)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let modulation: Vec<f64> = (0..channels)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z.abs() * 0.3
            })
            .collect();
        let rate = rng.random_range(8.0..32.0);
        out.push(SpeakerSpec {
            id: i as u32,
            template,
            modulation,
            rate,
        });
    }
    Ok(out)
}

/// Synthesizes one utterance: template plus sinusoidal modulation with a
/// seeded phase, plus per-cell Gaussian noise.
pub fn synth_utterance(
    spk: &SpeakerSpec,
    frames: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Utterance, Error> {
    if frames < 16 {
        return Err(Error::Invalid(format!(
            "utterance needs at least 16 frames, got {frames}"
        )));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::Invalid(format!(
            "noise sigma must be nonnegative, got {noise_sigma}"
        )));
    }
    let channels = spk.template.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut data = Vec::with_capacity(frames * channels);
    for t in 0..frames {
        let osc = (std::f64::consts::TAU * t as f64 / spk.rate + phase).sin();
        for c in 0..channels {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(spk.template[c] + spk.modulation[c] * osc + noise_sigma * z);
        }
    }
    Ok(Utterance {
        speaker_id: spk.id,
        features: FeatureMatrix::new(frames, channels, data)?,
        seed,
    })
}

/// Generates `utts_per_speaker` utterances for every speaker. Each utterance
/// derives its own stream from (seed, flat index), so generation order never
/// affects the result.
pub fn synth_corpus(
    speakers: &[SpeakerSpec],
    utts_per_speaker: usize,
    frames: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<Utterance>, Error> {
    let mut out = Vec::with_capacity(speakers.len() * utts_per_speaker);
    for (si, spk) in speakers.iter().enumerate() {
        for u in 0..utts_per_speaker {
            let flat = (si * utts_per_speaker + u) as u64;
            out.push(synth_utterance(
                spk,
                frames,
                noise_sigma,
                mix_seed(seed, flat),
            )?);
        }
    }
    Ok(out)
}

/// Shifts and scales every cell of every utterance so the pooled corpus has
/// mean 0 and variance 1. Returns the (mean, std) that was removed.
pub fn standardize_all(utterances: &mut [Utterance]) -> Result<(f64, f64), Error> {
    let n: usize = utterances
        .iter()
        .map(|u| u.features.data().len())
        .sum();
    if n == 0 {
        return Err(Error::Invalid("cannot standardize an empty corpus".into()));
    }
    let mut sum = 0.0;
    for u in utterances.iter() {
        sum += u.features.data().iter().sum::<f64>();
    }
    let mean = sum / n as f64;
    let mut ss = 0.0;
    for u in utterances.iter() {
        ss += u
            .features
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>();
    }
    let std = (ss / n as f64).sqrt();
    if !(std > 0.0) {
        return Err(Error::Invalid(
            "corpus has zero variance; cannot standardize".into(),
        ));
    }
    for u in utterances.iter_mut() {
        for v in u.features.data_mut() {
            *v = (*v - mean) / std;
        }
    }
    Ok((mean, std))
}

/// Samples exactly `n_target` same-speaker and `n_nontarget` cross-speaker
/// ordered (enroll, test) pairs without replacement, deterministically.
pub fn make_trials(
    utterances: &[Utterance],
    n_target: usize,
    n_nontarget: usize,
    seed: u64,
) -> Result<TrialSet, Error> {
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for i in 0..utterances.len() {
        for j in 0..utterances.len() {
            if i == j {
                continue;
            }
            if utterances[i].speaker_id == utterances[j].speaker_id {
                targets.push((i, j));
            } else {
                nontargets.push((i, j));
            }
        }
    }
    if targets.len() < n_target || nontargets.len() < n_nontarget {
        return Err(Error::InsufficientPairs {
            need_target: n_target,
            have_target: targets.len(),
            need_nontarget: n_nontarget,
            have_nontarget: nontargets.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7261_6c73));
    targets.shuffle(&mut rng);
    nontargets.shuffle(&mut rng);
    let mut trials = Vec::with_capacity(n_target + n_nontarget);
    for &(enroll, test) in targets.iter().take(n_target) {
        trials.push(Trial {
            enroll,
            test,
            label: TrialLabel::Target,
        });
    }
    for &(enroll, test) in nontargets.iter().take(n_nontarget) {
        trials.push(Trial {
            enroll,
            test,
            label: TrialLabel::Nontarget,
        });
    }
    let set = TrialSet { trials };
    set.validate(utterances)?;
    Ok(set)
}
