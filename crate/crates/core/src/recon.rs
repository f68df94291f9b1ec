//! Masked-reconstruction purifier: corrupt random regions of a feature
//! matrix, pretrain a small transformer encoder to restore them, then apply
//! the frozen net as a cascade of K denoising passes in front of the
//! verifier.

use crate::error::Error;
use crate::features::FeatureMatrix;
use crate::format::Checkpoint;
use crate::mix_seed;
use crate::tensor::{AdamState, AttentionWeights, Graph, LrSchedule, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const LN_EPS: f64 = 1e-5;
const SALT_INIT: u64 = 0x7265_636f_6e30;
const SALT_BATCH: u64 = 0x7265_636f_6e31;
const SALT_ALTER: u64 = 0x7265_636f_6e32;

// ─── alteration ─────────────────────────────────────────────────────────────

/// Corruption scheme for pretraining: zeroed time blocks, an optional zeroed
/// channel band, and per-cell Gaussian magnitude replacement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlterationPolicy {
    /// Width of one zeroed time block, in frames.
    pub w_t: usize,
    /// Width of the zeroed channel band, in channels.
    pub w_c: usize,
    /// Per-cell probability of replacement by unit Gaussian noise.
    pub p_n: f64,
    /// Per-frame probability of starting a time block.
    pub p_t: f64,
    /// Probability that the utterance receives one channel band.
    pub p_cb: f64,
}

impl Default for AlterationPolicy {
    fn default() -> Self {
        AlterationPolicy {
            w_t: 7,
            w_c: 5,
            p_n: 0.0,
            p_t: 0.15 / 7.0,
            p_cb: 0.2,
        }
    }
}

impl AlterationPolicy {
    pub fn validate(&self) -> Result<(), Error> {
        if self.w_t == 0 || self.w_c == 0 {
            return Err(Error::Invalid(format!(
                "alteration widths must be at least 1, got w_t={} w_c={}",
                self.w_t, self.w_c
            )));
        }
        for (name, p) in [("p_n", self.p_n), ("p_t", self.p_t), ("p_cb", self.p_cb)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Invalid(format!(
                    "alteration probability {name} must lie in [0, 1], got {p}"
                )));
            }
        }
        Ok(())
    }
}

/// Applies the alteration policy to one utterance. Returns the corrupted
/// copy and a row-major mask marking every altered cell.
///
/// Draw order is fixed so masks are reproducible: one uniform per frame for
/// time-block starts, one uniform for the channel-band trigger (plus a band
/// start when it fires), then per-cell uniforms for magnitude replacement
/// (skipped entirely when `p_n == 0`).
pub fn alter(
    x: &FeatureMatrix,
    policy: &AlterationPolicy,
    seed: u64,
) -> Result<(FeatureMatrix, Vec<bool>), Error> {
    policy.validate()?;
    let (t, c) = (x.frames(), x.channels());
    if t < policy.w_t || c < policy.w_c {
        return Err(Error::Invalid(format!(
            "utterance is {t}x{c} but the policy needs at least {}x{}",
            policy.w_t, policy.w_c
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = x.clone();
    let mut mask = vec![false; t * c];

    for start in 0..t {
        let u: f64 = rng.random();
        if u < policy.p_t {
            for frame in start..(start + policy.w_t).min(t) {
                for ch in 0..c {
                    out.set(frame, ch, 0.0);
                    mask[frame * c + ch] = true;
                }
            }
        }
    }

    let u: f64 = rng.random();
    if u < policy.p_cb {
        let band = rng.random_range(0..=c - policy.w_c);
        for frame in 0..t {
            for ch in band..band + policy.w_c {
                out.set(frame, ch, 0.0);
                mask[frame * c + ch] = true;
            }
        }
    }

    if policy.p_n > 0.0 {
        for frame in 0..t {
            for ch in 0..c {
                let u: f64 = rng.random();
                if u < policy.p_n {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    out.set(frame, ch, z);
                    mask[frame * c + ch] = true;
                }
            }
        }
    }

    Ok((out, mask))
}

// ─── network ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReconConfig {
    pub channels: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_hidden: usize,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            channels: 24,
            d_model: 32,
            heads: 4,
            layers: 3,
            ff_hidden: 64,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.channels == 0
            || self.d_model == 0
            || self.heads == 0
            || self.layers == 0
            || self.ff_hidden == 0
        {
            return Err(Error::Invalid(format!("recon config has a zero field: {self:?}")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct EncoderParams {
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    ln1_g: Tensor,
    ln1_b: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
}

/// Post-norm transformer encoder over projected features, with a two-layer
/// prediction head back to channel space. Input and output are both TxC.
#[derive(Debug, Clone)]
pub struct ReconNet {
    cfg: ReconConfig,
    w_in: Tensor,
    b_in: Tensor,
    layers: Vec<EncoderParams>,
    head_w1: Tensor,
    head_b1: Tensor,
    head_w2: Tensor,
    head_b2: Tensor,
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).expect("nonzero length")
}

/// Interleaved sine/cosine frame-position code, added after the input
/// projection so attention can distinguish positions.
fn positional_encoding(frames: usize, d: usize) -> Tensor {
    let mut v = vec![0.0; frames * d];
    for pos in 0..frames {
        for j in 0..d {
            let pair = (j / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
            v[pos * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(frames, d, v).expect("nonzero dims")
}

impl ReconNet {
    /// Fresh net with seeded normal init scaled by 1/sqrt(fan_in); biases
    /// zero, layer-norm gains one.
    pub fn new(cfg: &ReconConfig, seed: u64) -> Result<Self, Error> {
        cfg.validate()?;
        let (c, d, ff) = (cfg.channels, cfg.d_model, cfg.ff_hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, SALT_INIT));
        let w = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            Tensor::randn(vec![rows, cols], 1.0 / (rows as f64).sqrt(), rng)
        };
        let w_in = w(c, d, &mut rng)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            layers.push(EncoderParams {
                wq: w(d, d, &mut rng)?,
                bq: Tensor::zeros(vec![d])?,
                wk: w(d, d, &mut rng)?,
                bk: Tensor::zeros(vec![d])?,
                wv: w(d, d, &mut rng)?,
                bv: Tensor::zeros(vec![d])?,
                wo: w(d, d, &mut rng)?,
                bo: Tensor::zeros(vec![d])?,
                ln1_g: ones(d),
                ln1_b: Tensor::zeros(vec![d])?,
                w1: w(d, ff, &mut rng)?,
                b1: Tensor::zeros(vec![ff])?,
                w2: w(ff, d, &mut rng)?,
                b2: Tensor::zeros(vec![d])?,
                ln2_g: ones(d),
                ln2_b: Tensor::zeros(vec![d])?,
            });
        }
        let head_w1 = w(d, ff, &mut rng)?;
        let head_w2 = w(ff, c, &mut rng)?;
        Ok(ReconNet {
            cfg: *cfg,
            w_in,
            b_in: Tensor::zeros(vec![d])?,
            layers,
            head_w1,
            head_b1: Tensor::zeros(vec![ff])?,
            head_w2,
            head_b2: Tensor::zeros(vec![c])?,
        })
    }

    pub fn config(&self) -> &ReconConfig {
        &self.cfg
    }

    /// Registers every parameter in the graph and builds the full forward
    /// pass from a TxC input node to a TxC prediction node. Returns the
    /// output node and parameter nodes in canonical order (the same order
    /// `params_mut` yields).
    pub fn build_forward(
        &self,
        g: &mut Graph,
        x: NodeId,
    ) -> Result<(NodeId, Vec<NodeId>), Error> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.channels {
            return Err(Error::Invalid(format!(
                "expected a Tx{} input, got shape {shape:?}",
                self.cfg.channels
            )));
        }
        let frames = shape[0];
        let mut params = Vec::with_capacity(4 + 16 * self.layers.len() + 2);
        let w_in = g.input(&self.w_in)?;
        let b_in = g.input(&self.b_in)?;
        params.extend([w_in, b_in]);

        let mut h = g.linear(x, w_in, b_in)?;
        let pe = g.input(&positional_encoding(frames, self.cfg.d_model))?;
        h = g.add(h, pe)?;

        for layer in &self.layers {
            let wq = g.input(&layer.wq)?;
            let bq = g.input(&layer.bq)?;
            let wk = g.input(&layer.wk)?;
            let bk = g.input(&layer.bk)?;
            let wv = g.input(&layer.wv)?;
            let bv = g.input(&layer.bv)?;
            let wo = g.input(&layer.wo)?;
            let bo = g.input(&layer.bo)?;
            let ln1_g = g.input(&layer.ln1_g)?;
            let ln1_b = g.input(&layer.ln1_b)?;
            let w1 = g.input(&layer.w1)?;
            let b1 = g.input(&layer.b1)?;
            let w2 = g.input(&layer.w2)?;
            let b2 = g.input(&layer.b2)?;
            let ln2_g = g.input(&layer.ln2_g)?;
            let ln2_b = g.input(&layer.ln2_b)?;
            params.extend([
                wq, bq, wk, bk, wv, bv, wo, bo, ln1_g, ln1_b, w1, b1, w2, b2, ln2_g, ln2_b,
            ]);

            let attn = AttentionWeights {
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
            };
            let a = g.multihead_attention(h, &attn, self.cfg.heads)?;
            let r1 = g.add(h, a)?;
            h = g.layer_norm(r1, ln1_g, ln1_b, LN_EPS)?;

            let f1 = g.linear(h, w1, b1)?;
            let fa = g.gelu(f1);
            let f2 = g.linear(fa, w2, b2)?;
            let r2 = g.add(h, f2)?;
            h = g.layer_norm(r2, ln2_g, ln2_b, LN_EPS)?;
        }

        let head_w1 = g.input(&self.head_w1)?;
        let head_b1 = g.input(&self.head_b1)?;
        let head_w2 = g.input(&self.head_w2)?;
        let head_b2 = g.input(&self.head_b2)?;
        params.extend([head_w1, head_b1, head_w2, head_b2]);
        let h1 = g.linear(h, head_w1, head_b1)?;
        let ha = g.gelu(h1);
        let out = g.linear(ha, head_w2, head_b2)?;
        Ok((out, params))
    }

    /// One denoising pass.
    pub fn reconstruct(&self, x: &FeatureMatrix) -> Result<FeatureMatrix, Error> {
        let mut g = Graph::new();
        let xid = g.input(&x.to_tensor())?;
        let (out, _) = self.build_forward(&mut g, xid)?;
        Ok(FeatureMatrix::from_tensor(&g.to_tensor(out))?)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = vec![&mut self.w_in, &mut self.b_in];
        for l in &mut self.layers {
            v.extend([
                &mut l.wq,
                &mut l.bq,
                &mut l.wk,
                &mut l.bk,
                &mut l.wv,
                &mut l.bv,
                &mut l.wo,
                &mut l.bo,
                &mut l.ln1_g,
                &mut l.ln1_b,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
                &mut l.ln2_g,
                &mut l.ln2_b,
            ]);
        }
        v.extend([
            &mut self.head_w1,
            &mut self.head_b1,
            &mut self.head_w2,
            &mut self.head_b2,
        ]);
        v
    }

    /// Parameters with their checkpoint names, in canonical order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = vec![
            ("w_in".into(), &self.w_in),
            ("b_in".into(), &self.b_in),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (suffix, t) in [
                ("wq", &l.wq),
                ("bq", &l.bq),
                ("wk", &l.wk),
                ("bk", &l.bk),
                ("wv", &l.wv),
                ("bv", &l.bv),
                ("wo", &l.wo),
                ("bo", &l.bo),
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
            ] {
                v.push((format!("l{i}.{suffix}"), t));
            }
        }
        v.extend([
            ("head.w1".to_string(), &self.head_w1),
            ("head.b1".to_string(), &self.head_b1),
            ("head.w2".to_string(), &self.head_w2),
            ("head.b2".to_string(), &self.head_b2),
        ]);
        v
    }

    pub fn to_checkpoint(&self, config_hash: u64) -> Checkpoint {
        let mut ck = Checkpoint::new(config_hash);
        for (name, t) in self.named_params() {
            ck.push(name, t.clone());
        }
        ck
    }

    /// Rebuilds a net from checkpoint tensors; every expected name must be
    /// present with the exact shape the config implies.
    pub fn from_checkpoint(cfg: &ReconConfig, ck: &Checkpoint) -> Result<Self, Error> {
        let mut net = ReconNet::new(cfg, 0)?;
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

// ─── cascade ────────────────────────────────────────────────────────────────

/// A frozen net applied `k` times; `k = 0` is the identity.
#[derive(Debug, Clone, Copy)]
pub struct Cascade<'a> {
    pub net: &'a ReconNet,
    pub k: usize,
}

impl Cascade<'_> {
    pub fn apply(&self, x: &FeatureMatrix) -> Result<FeatureMatrix, Error> {
        cascade_apply(self.net, self.k, x)
    }
}

pub fn cascade_apply(net: &ReconNet, k: usize, x: &FeatureMatrix) -> Result<FeatureMatrix, Error> {
    let mut cur = x.clone();
    for _ in 0..k {
        cur = net.reconstruct(&cur)?;
    }
    Ok(cur)
}

// ─── pretraining ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2400,
            batch: 8,
            peak_lr: 1e-3,
            warmup_frac: 0.07,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Pretrains a fresh net to restore altered utterances, minimizing mean L1
/// between the prediction and the clean input over every cell. Adam with
/// linear warmup and decay; single-threaded and deterministic in `seed`.
pub fn pretrain_recon(
    corpus: &[FeatureMatrix],
    policy: &AlterationPolicy,
    net_cfg: &ReconConfig,
    train: &PretrainConfig,
    seed: u64,
) -> Result<(ReconNet, PretrainReport), Error> {
    policy.validate()?;
    if corpus.is_empty() {
        return Err(Error::Invalid("pretraining corpus is empty".into()));
    }
    if train.steps == 0 || train.batch == 0 {
        return Err(Error::Invalid(format!(
            "pretraining needs steps >= 1 and batch >= 1, got {} and {}",
            train.steps, train.batch
        )));
    }
    for (i, x) in corpus.iter().enumerate() {
        if x.channels() != net_cfg.channels {
            return Err(Error::Invalid(format!(
                "corpus utterance {i} has {} channels, net expects {}",
                x.channels(),
                net_cfg.channels
            )));
        }
    }

    let mut net = ReconNet::new(net_cfg, seed)?;
    let sizes: Vec<usize> = net.named_params().iter().map(|(_, t)| t.len()).collect();
    let sched = LrSchedule::new(train.peak_lr, train.warmup_frac, train.steps)?;
    let mut opt = AdamState::new(sched, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, SALT_BATCH));
    let alter_base = mix_seed(seed, SALT_ALTER);

    let mut initial_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    for step in 0..train.steps {
        let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
        let mut batch_loss = 0.0;
        for b in 0..train.batch {
            let idx = rng.random_range(0..corpus.len());
            let clean = &corpus[idx];
            let sample = step * train.batch as u64 + b as u64;
            let (altered, _) = alter(clean, policy, mix_seed(alter_base, sample))?;

            let mut g = Graph::new();
            let xid = g.input(&altered.to_tensor())?;
            let (out, pids) = net.build_forward(&mut g, xid)?;
            let target = g.input(&clean.to_tensor())?;
            let loss = g.l1_loss(out, target)?;
            g.backward(loss)?;
            batch_loss += g.scalar_value(loss);
            for (acc, pid) in grads.iter_mut().zip(&pids) {
                for (a, &d) in acc.iter_mut().zip(g.grad(*pid)) {
                    *a += d;
                }
            }
        }
        batch_loss /= train.batch as f64;
        if !batch_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "pretraining loss became {batch_loss} at step {step}"
            )));
        }
        if step == 0 {
            initial_loss = batch_loss;
        }
        final_loss = batch_loss;

        let scale = 1.0 / train.batch as f64;
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

    if !(final_loss < initial_loss) && train.steps > 1 {
        return Err(Error::Diverged(format!(
            "no improvement after {} steps: initial L1 {initial_loss}, final L1 {final_loss}",
            train.steps
        )));
    }
    Ok((
        net,
        PretrainReport {
            initial_loss,
            final_loss,
        },
    ))
}

// ─── tests ──────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_speakers, standardize_all, synth_corpus};
    use crate::tensor::grad_check;

    fn small_cfg() -> ReconConfig {
        ReconConfig {
            channels: 4,
            d_model: 8,
            heads: 2,
            layers: 2,
            ff_hidden: 12,
        }
    }

    fn ramp(frames: usize, channels: usize) -> FeatureMatrix {
        let data = (0..frames * channels)
            .map(|i| (i as f64 * 0.37).sin())
            .collect();
        FeatureMatrix::new(frames, channels, data).unwrap()
    }

    #[test]
    fn noop_policy_returns_input_unchanged() {
        let x = ramp(12, 6);
        let policy = AlterationPolicy {
            w_t: 3,
            w_c: 2,
            p_n: 0.0,
            p_t: 0.0,
            p_cb: 0.0,
        };
        let (altered, mask) = alter(&x, &policy, 9).unwrap();
        assert_eq!(altered.data(), x.data());
        assert!(mask.iter().all(|&m| !m));
    }

    #[test]
    fn alteration_is_deterministic_per_seed() {
        let x = ramp(20, 8);
        let policy = AlterationPolicy {
            w_t: 3,
            w_c: 2,
            p_n: 0.1,
            p_t: 0.5,
            p_cb: 0.5,
        };
        let (a1, m1) = alter(&x, &policy, 77).unwrap();
        let (a2, m2) = alter(&x, &policy, 77).unwrap();
        assert_eq!(a1.data(), a2.data());
        assert_eq!(m1, m2);
        let (_, m3) = alter(&x, &policy, 78).unwrap();
        assert_ne!(m1, m3);
    }

    #[test]
    fn unmasked_cells_are_untouched() {
        let x = ramp(24, 10);
        let policy = AlterationPolicy {
            w_t: 4,
            w_c: 3,
            p_n: 0.3,
            p_t: 0.1,
            p_cb: 1.0,
        };
        for seed in 0..20 {
            let (altered, mask) = alter(&x, &policy, seed).unwrap();
            assert!(mask.iter().any(|&m| m));
            for i in 0..mask.len() {
                if mask[i] {
                    continue;
                }
                assert_eq!(altered.data()[i], x.data()[i], "cell {i} moved without mask");
            }
        }
    }

    #[test]
    fn altered_frame_fraction_matches_expectation() {
        // Time masking only: each frame start fires with 0.15/7, covering 7
        // frames, so roughly 15% of frames end up altered.
        let x = ramp(96, 24);
        let policy = AlterationPolicy {
            w_t: 7,
            w_c: 5,
            p_n: 0.0,
            p_t: 0.15 / 7.0,
            p_cb: 0.0,
        };
        let mut altered_frames = 0usize;
        let total = 1000usize;
        for seed in 0..total as u64 {
            let (_, mask) = alter(&x, &policy, seed).unwrap();
            for frame in 0..x.frames() {
                if (0..x.channels()).any(|c| mask[frame * x.channels() + c]) {
                    altered_frames += 1;
                }
            }
        }
        let fraction = altered_frames as f64 / (total * x.frames()) as f64;
        assert!(
            (fraction - 0.15).abs() <= 0.03,
            "altered-frame fraction {fraction}"
        );
    }

    #[test]
    fn alter_rejects_undersized_inputs_and_bad_policies() {
        let policy = AlterationPolicy::default();
        assert!(alter(&ramp(6, 24), &policy, 0).is_err());
        assert!(alter(&ramp(96, 4), &policy, 0).is_err());
        let bad = AlterationPolicy {
            p_t: 1.5,
            ..AlterationPolicy::default()
        };
        assert!(alter(&ramp(96, 24), &bad, 0).is_err());
    }

    #[test]
    fn reconstruct_preserves_shape_and_rejects_wrong_width() {
        let net = ReconNet::new(&small_cfg(), 3).unwrap();
        let x = ramp(9, 4);
        let y = net.reconstruct(&x).unwrap();
        assert_eq!((y.frames(), y.channels()), (9, 4));
        assert!(y.data().iter().all(|v| v.is_finite()));
        assert!(net.reconstruct(&ramp(9, 5)).is_err());
    }

    #[test]
    fn reconstruct_is_deterministic() {
        let net = ReconNet::new(&small_cfg(), 3).unwrap();
        let x = ramp(7, 4);
        let a = net.reconstruct(&x).unwrap();
        let b = net.reconstruct(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn reconstruct_gradient_matches_finite_differences() {
        let net = ReconNet::new(&small_cfg(), 11).unwrap();
        let x = ramp(5, 4);

        let mut g = Graph::new();
        let xid = g.input(&x.to_tensor()).unwrap();
        let (out, _) = net.build_forward(&mut g, xid).unwrap();
        let s = g.sum_all(out);
        g.backward(s).unwrap();
        let analytic = g.grad(xid).to_vec();

        let f = |vals: &[f64]| {
            let t = Tensor::matrix(5, 4, vals.to_vec()).unwrap();
            let mut g = Graph::new();
            let xid = g.input(&t).unwrap();
            let (out, _) = net.build_forward(&mut g, xid).unwrap();
            let s = g.sum_all(out);
            g.scalar_value(s)
        };
        let err = grad_check(x.data(), &analytic, 1e-5, f).unwrap();
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let cfg = small_cfg();
        let net = ReconNet::new(&cfg, 4).unwrap();
        let x = ramp(5, 4);

        let mut g = Graph::new();
        let xid = g.input(&x.to_tensor()).unwrap();
        let (out, pids) = net.build_forward(&mut g, xid).unwrap();
        let s = g.sum_all(out);
        g.backward(s).unwrap();
        // b_in sits early in the graph, the head bias late; check both.
        for (slot, name) in [(1usize, "b_in"), (pids.len() - 1, "head.b2")] {
            let analytic = g.grad(pids[slot]).to_vec();
            let base = net.named_params()[slot].1.clone();
            let f = |vals: &[f64]| {
                let mut copy = net.clone();
                copy.params_mut()[slot]
                    .values_mut()
                    .copy_from_slice(vals);
                let mut g = Graph::new();
                let xid = g.input(&x.to_tensor()).unwrap();
                let (out, _) = copy.build_forward(&mut g, xid).unwrap();
                let s = g.sum_all(out);
                g.scalar_value(s)
            };
            let err = grad_check(base.values(), &analytic, 1e-5, f).unwrap();
            assert!(err < 1e-5, "{name}: max relative error {err}");
        }
    }

    #[test]
    fn cascade_zero_is_identity() {
        let net = ReconNet::new(&small_cfg(), 5).unwrap();
        let x = ramp(8, 4);
        let y = cascade_apply(&net, 0, &x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn cascade_composes() {
        let net = ReconNet::new(&small_cfg(), 5).unwrap();
        let x = ramp(8, 4);
        let twice = net.reconstruct(&net.reconstruct(&x).unwrap()).unwrap();
        let k2 = Cascade { net: &net, k: 2 }.apply(&x).unwrap();
        assert_eq!(k2.data(), twice.data());
        let split = cascade_apply(&net, 2, &cascade_apply(&net, 1, &x).unwrap()).unwrap();
        let k3 = cascade_apply(&net, 3, &x).unwrap();
        assert_eq!(k3.data(), split.data());
    }

    #[test]
    fn bounded_inputs_produce_finite_outputs() {
        let net = ReconNet::new(&ReconConfig::default(), 6).unwrap();
        let extremes = [
            FeatureMatrix::new(20, 24, vec![10.0; 480]).unwrap(),
            FeatureMatrix::new(20, 24, vec![-10.0; 480]).unwrap(),
            FeatureMatrix::new(
                20,
                24,
                (0..480).map(|i| if i % 2 == 0 { 10.0 } else { -10.0 }).collect(),
            )
            .unwrap(),
        ];
        for x in &extremes {
            let y = net.reconstruct(x).unwrap();
            assert!(y.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_behavior() {
        let net = ReconNet::new(&small_cfg(), 21).unwrap();
        let ck = net.to_checkpoint(0xABCD);
        let back = ReconNet::from_checkpoint(&small_cfg(), &ck).unwrap();
        let x = ramp(6, 4);
        assert_eq!(
            net.reconstruct(&x).unwrap().data(),
            back.reconstruct(&x).unwrap().data()
        );

        let mut missing = Checkpoint::new(0);
        missing.push("w_in", Tensor::zeros(vec![4, 8]).unwrap());
        assert!(ReconNet::from_checkpoint(&small_cfg(), &missing).is_err());
    }

    #[test]
    fn pretraining_rejects_bad_inputs() {
        let cfg = small_cfg();
        let policy = AlterationPolicy::default();
        let train = PretrainConfig {
            steps: 1,
            batch: 1,
            ..PretrainConfig::default()
        };
        assert!(pretrain_recon(&[], &policy, &cfg, &train, 0).is_err());
        let zero_steps = PretrainConfig {
            steps: 0,
            ..train
        };
        assert!(pretrain_recon(&[ramp(16, 4)], &policy, &cfg, &zero_steps, 0).is_err());
        // channel mismatch
        assert!(pretrain_recon(&[ramp(16, 5)], &policy, &cfg, &train, 0).is_err());
    }

    #[test]
    fn pretraining_improves_loss_and_is_deterministic() {
        let cfg = small_cfg();
        let corpus: Vec<FeatureMatrix> = (0..4).map(|i| ramp(16 + 2 * i, 4)).collect();
        let policy = AlterationPolicy {
            w_t: 3,
            w_c: 2,
            p_n: 0.0,
            p_t: 0.1,
            p_cb: 0.5,
        };
        let train = PretrainConfig {
            steps: 25,
            batch: 4,
            peak_lr: 2e-3,
            warmup_frac: 0.1,
        };
        let (net1, report) = pretrain_recon(&corpus, &policy, &cfg, &train, 9).unwrap();
        assert!(
            report.final_loss < report.initial_loss,
            "initial {} final {}",
            report.initial_loss,
            report.final_loss
        );
        let (net2, _) = pretrain_recon(&corpus, &policy, &cfg, &train, 9).unwrap();
        for ((n1, t1), (_, t2)) in net1.named_params().iter().zip(net2.named_params()) {
            assert_eq!(t1.values(), t2.values(), "{n1} differs between runs");
        }
    }

    #[test]
    fn pretrained_net_beats_zero_fill_on_masked_cells() {
        // Two easily separable speakers; the net must learn to fill a zeroed
        // channel band from the visible channels.
        let speakers = make_speakers(2, 8, 404).unwrap();
        let mut utts = synth_corpus(&speakers, 6, 24, 0.2, 404).unwrap();
        standardize_all(&mut utts).unwrap();
        let features: Vec<FeatureMatrix> =
            utts.iter().map(|u| u.features.clone()).collect();
        let (train_set, held_out) = features.split_at(10);

        let cfg = ReconConfig {
            channels: 8,
            d_model: 16,
            heads: 2,
            layers: 2,
            ff_hidden: 32,
        };
        let policy = AlterationPolicy {
            w_t: 4,
            w_c: 3,
            p_n: 0.0,
            p_t: 0.05,
            p_cb: 1.0,
        };
        let train = PretrainConfig {
            steps: 400,
            batch: 8,
            peak_lr: 2e-3,
            warmup_frac: 0.07,
        };
        let (net, _) = pretrain_recon(train_set, &policy, &cfg, &train, 31).unwrap();

        let mut net_err = 0.0;
        let mut zero_err = 0.0;
        let mut cells = 0usize;
        for (i, clean) in held_out.iter().enumerate() {
            let (altered, mask) = alter(clean, &policy, 9000 + i as u64).unwrap();
            let restored = net.reconstruct(&altered).unwrap();
            for j in 0..mask.len() {
                if mask[j] {
                    net_err += (restored.data()[j] - clean.data()[j]).abs();
                    zero_err += clean.data()[j].abs();
                    cells += 1;
                }
            }
        }
        assert!(cells > 0);
        let (net_l1, zero_l1) = (net_err / cells as f64, zero_err / cells as f64);
        assert!(
            net_l1 < zero_l1,
            "masked L1 {net_l1} not below zero-fill {zero_l1}"
        );
    }
}
