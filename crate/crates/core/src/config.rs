//! Experiment configuration: one flat `key = value` file drives every stage.
//!
//! Keys use dotted section prefixes (`attack.epsilon`). `#` starts a comment,
//! blank lines are ignored, unknown keys are errors. The config hash is a
//! 64-bit digest of the canonical rendering (sorted keys, one normalized
//! `key = value` per line); `out_dir` is cosmetic and excluded, so moving the
//! output directory never invalidates previously generated artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::asv::{AsvConfig, AsvTrainConfig};
use crate::attack::AttackConfig;
use crate::error::Error;
use crate::filters::{FilterKind, FilterSpec};
use crate::metrics::DcfParams;
use crate::recon::{AlterationPolicy, PretrainConfig, ReconConfig};

/// Everything the harness needs to run an experiment end to end.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    // corpus
    pub speakers: usize,
    pub train_utts: usize,
    pub eval_utts: usize,
    pub frames: usize,
    pub channels: usize,
    pub noise_sigma: f64,
    pub target_trials: usize,
    pub nontarget_trials: usize,
    // verifier
    pub asv_hidden: usize,
    pub asv_emb_dim: usize,
    pub asv_epochs: usize,
    pub asv_batch: usize,
    pub asv_lr: f64,
    pub asv_warmup_frac: f64,
    // purifier
    pub recon_d_model: usize,
    pub recon_heads: usize,
    pub recon_layers: usize,
    pub recon_ff_hidden: usize,
    pub recon_steps: usize,
    pub recon_batch: usize,
    pub recon_lr: f64,
    pub recon_warmup_frac: f64,
    // pretraining alteration
    pub alter_w_t: usize,
    pub alter_w_c: usize,
    pub alter_p_n: f64,
    pub alter_p_t: f64,
    pub alter_p_cb: f64,
    // attack
    pub attack_epsilon: f64,
    pub attack_n_iters: usize,
    /// `None` means the conventional step size epsilon / n_iters.
    pub attack_alpha: Option<f64>,
    // defense
    pub k_list: Vec<usize>,
    pub filter_window: usize,
    pub filter_sigma: f64,
    // scoring
    pub dcf_p_target: f64,
    // run identity
    pub seed: u64,
    /// Output directory; not part of the config hash.
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            speakers: 20,
            train_utts: 10,
            eval_utts: 10,
            frames: 96,
            channels: 24,
            noise_sigma: 1.5,
            target_trials: 500,
            nontarget_trials: 500,
            asv_hidden: 64,
            asv_emb_dim: 32,
            asv_epochs: 12,
            asv_batch: 16,
            asv_lr: 1e-3,
            asv_warmup_frac: 0.07,
            recon_d_model: 32,
            recon_heads: 4,
            recon_layers: 3,
            recon_ff_hidden: 64,
            recon_steps: 2400,
            recon_batch: 8,
            recon_lr: 1e-3,
            recon_warmup_frac: 0.07,
            alter_w_t: 7,
            alter_w_c: 5,
            alter_p_n: 0.0,
            alter_p_t: 0.15 / 7.0,
            alter_p_cb: 0.2,
            attack_epsilon: 0.3,
            attack_n_iters: 5,
            attack_alpha: None,
            k_list: (0..=7).collect(),
            filter_window: 3,
            filter_sigma: 1.0,
            dcf_p_target: 0.01,
            seed: 42,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T, Error> {
    raw.parse()
        .map_err(|_| Error::Invalid(format!("config key `{key}`: cannot parse `{raw}`")))
}

fn parse_k_list(raw: &str) -> Result<Vec<usize>, Error> {
    let ks: Vec<usize> = raw
        .split(',')
        .map(|p| parse_num("defense.k_list", p.trim()))
        .collect::<Result<_, _>>()?;
    Ok(ks)
}

impl ExperimentConfig {
    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, Error> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = match line.find('#') {
                Some(i) => &line[..i],
                None => line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Invalid(format!("config line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Error> {
        match key {
            "corpus.speakers" => self.speakers = parse_num(key, value)?,
            "corpus.train_utts" => self.train_utts = parse_num(key, value)?,
            "corpus.eval_utts" => self.eval_utts = parse_num(key, value)?,
            "corpus.frames" => self.frames = parse_num(key, value)?,
            "corpus.channels" => self.channels = parse_num(key, value)?,
            "corpus.noise_sigma" => self.noise_sigma = parse_num(key, value)?,
            "corpus.target_trials" => self.target_trials = parse_num(key, value)?,
            "corpus.nontarget_trials" => self.nontarget_trials = parse_num(key, value)?,
            "asv.hidden" => self.asv_hidden = parse_num(key, value)?,
            "asv.emb_dim" => self.asv_emb_dim = parse_num(key, value)?,
            "asv.epochs" => self.asv_epochs = parse_num(key, value)?,
            "asv.batch" => self.asv_batch = parse_num(key, value)?,
            "asv.lr" => self.asv_lr = parse_num(key, value)?,
            "asv.warmup_frac" => self.asv_warmup_frac = parse_num(key, value)?,
            "recon.d_model" => self.recon_d_model = parse_num(key, value)?,
            "recon.heads" => self.recon_heads = parse_num(key, value)?,
            "recon.layers" => self.recon_layers = parse_num(key, value)?,
            "recon.ff_hidden" => self.recon_ff_hidden = parse_num(key, value)?,
            "recon.steps" => self.recon_steps = parse_num(key, value)?,
            "recon.batch" => self.recon_batch = parse_num(key, value)?,
            "recon.lr" => self.recon_lr = parse_num(key, value)?,
            "recon.warmup_frac" => self.recon_warmup_frac = parse_num(key, value)?,
            "alter.w_t" => self.alter_w_t = parse_num(key, value)?,
            "alter.w_c" => self.alter_w_c = parse_num(key, value)?,
            "alter.p_n" => self.alter_p_n = parse_num(key, value)?,
            "alter.p_t" => self.alter_p_t = parse_num(key, value)?,
            "alter.p_cb" => self.alter_p_cb = parse_num(key, value)?,
            "attack.epsilon" => self.attack_epsilon = parse_num(key, value)?,
            "attack.n_iters" => self.attack_n_iters = parse_num(key, value)?,
            "attack.alpha" => self.attack_alpha = Some(parse_num(key, value)?),
            "defense.k_list" => self.k_list = parse_k_list(value)?,
            "filters.window" => self.filter_window = parse_num(key, value)?,
            "filters.sigma" => self.filter_sigma = parse_num(key, value)?,
            "dcf.p_target" => self.dcf_p_target = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(Error::Invalid(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Cross-field checks plus delegation to every sub-config's validator.
    pub fn validate(&self) -> Result<(), Error> {
        if self.speakers < 2 {
            return Err(Error::Invalid("corpus.speakers must be >= 2".into()));
        }
        if self.train_utts == 0 || self.eval_utts == 0 {
            return Err(Error::Invalid("utterances per speaker must be >= 1".into()));
        }
        if self.frames < 16 {
            return Err(Error::Invalid("corpus.frames must be >= 16".into()));
        }
        if self.target_trials == 0 || self.nontarget_trials == 0 {
            return Err(Error::Invalid("trial counts must be >= 1".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma > 0.0) {
            return Err(Error::Invalid("corpus.noise_sigma must be positive".into()));
        }
        if self.frames < self.alter_w_t || self.channels < self.alter_w_c {
            return Err(Error::Invalid(
                "alteration blocks must fit inside an utterance".into(),
            ));
        }
        if self.k_list.is_empty() {
            return Err(Error::Invalid("defense.k_list must be nonempty".into()));
        }
        for w in [self.asv_warmup_frac, self.recon_warmup_frac] {
            if !(w.is_finite() && (0.0..1.0).contains(&w)) {
                return Err(Error::Invalid("warmup_frac must be in [0, 1)".into()));
            }
        }
        for lr in [self.asv_lr, self.recon_lr] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Invalid("learning rates must be positive".into()));
            }
        }
        if self.asv_epochs == 0 || self.asv_batch == 0 || self.recon_steps == 0 || self.recon_batch == 0
        {
            return Err(Error::Invalid("training sizes must be >= 1".into()));
        }
        self.asv_config().validate()?;
        self.recon_config().validate()?;
        self.alter_policy().validate()?;
        self.attack_config()?.validate()?;
        self.dcf_params().validate()?;
        for spec in self.filter_specs() {
            spec.validate()?;
        }
        Ok(())
    }

    // ─── canonical form and hash ────────────────────────────────────────

    /// Sorted `key = value` lines; the sole input to the config hash.
    /// `out_dir` is deliberately absent.
    pub fn canonical_string(&self) -> String {
        let mut pairs: Vec<(&str, String)> = vec![
            ("alter.p_cb", format!("{:?}", self.alter_p_cb)),
            ("alter.p_n", format!("{:?}", self.alter_p_n)),
            ("alter.p_t", format!("{:?}", self.alter_p_t)),
            ("alter.w_c", self.alter_w_c.to_string()),
            ("alter.w_t", self.alter_w_t.to_string()),
            ("asv.batch", self.asv_batch.to_string()),
            ("asv.emb_dim", self.asv_emb_dim.to_string()),
            ("asv.epochs", self.asv_epochs.to_string()),
            ("asv.hidden", self.asv_hidden.to_string()),
            ("asv.lr", format!("{:?}", self.asv_lr)),
            ("asv.warmup_frac", format!("{:?}", self.asv_warmup_frac)),
            ("attack.alpha", format!("{:?}", self.attack_alpha_value())),
            ("attack.epsilon", format!("{:?}", self.attack_epsilon)),
            ("attack.n_iters", self.attack_n_iters.to_string()),
            ("corpus.channels", self.channels.to_string()),
            ("corpus.eval_utts", self.eval_utts.to_string()),
            ("corpus.frames", self.frames.to_string()),
            ("corpus.noise_sigma", format!("{:?}", self.noise_sigma)),
            ("corpus.nontarget_trials", self.nontarget_trials.to_string()),
            ("corpus.speakers", self.speakers.to_string()),
            ("corpus.target_trials", self.target_trials.to_string()),
            ("corpus.train_utts", self.train_utts.to_string()),
            ("dcf.p_target", format!("{:?}", self.dcf_p_target)),
            (
                "defense.k_list",
                self.k_list
                    .iter()
                    .map(|k| k.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("filters.sigma", format!("{:?}", self.filter_sigma)),
            ("filters.window", self.filter_window.to_string()),
            ("recon.batch", self.recon_batch.to_string()),
            ("recon.d_model", self.recon_d_model.to_string()),
            ("recon.ff_hidden", self.recon_ff_hidden.to_string()),
            ("recon.heads", self.recon_heads.to_string()),
            ("recon.layers", self.recon_layers.to_string()),
            ("recon.lr", format!("{:?}", self.recon_lr)),
            ("recon.steps", self.recon_steps.to_string()),
            ("recon.warmup_frac", format!("{:?}", self.recon_warmup_frac)),
            ("seed", self.seed.to_string()),
        ];
        pairs.sort_by_key(|&(k, _)| k);
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// First eight bytes (little-endian) of SHA-256 over the canonical form.
    pub fn config_hash(&self) -> u64 {
        let digest = Sha256::digest(self.canonical_string().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    // ─── typed views ────────────────────────────────────────────────────

    fn attack_alpha_value(&self) -> f64 {
        self.attack_alpha
            .unwrap_or(self.attack_epsilon / self.attack_n_iters.max(1) as f64)
    }

    pub fn asv_config(&self) -> AsvConfig {
        AsvConfig {
            channels: self.channels,
            hidden: self.asv_hidden,
            emb_dim: self.asv_emb_dim,
            n_speakers: self.speakers,
        }
    }

    pub fn asv_train_config(&self) -> AsvTrainConfig {
        AsvTrainConfig {
            epochs: self.asv_epochs as u32,
            batch: self.asv_batch,
            peak_lr: self.asv_lr,
            warmup_frac: self.asv_warmup_frac,
        }
    }

    pub fn recon_config(&self) -> ReconConfig {
        ReconConfig {
            channels: self.channels,
            d_model: self.recon_d_model,
            heads: self.recon_heads,
            layers: self.recon_layers,
            ff_hidden: self.recon_ff_hidden,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.recon_steps as u64,
            batch: self.recon_batch,
            peak_lr: self.recon_lr,
            warmup_frac: self.recon_warmup_frac,
        }
    }

    pub fn alter_policy(&self) -> AlterationPolicy {
        AlterationPolicy {
            w_t: self.alter_w_t,
            w_c: self.alter_w_c,
            p_n: self.alter_p_n,
            p_t: self.alter_p_t,
            p_cb: self.alter_p_cb,
        }
    }

    pub fn attack_config(&self) -> Result<AttackConfig, Error> {
        let n_iters = u32::try_from(self.attack_n_iters)
            .map_err(|_| Error::Invalid("attack.n_iters is too large".into()))?;
        match self.attack_alpha {
            Some(a) => AttackConfig::with_alpha(self.attack_epsilon, n_iters, a),
            None => AttackConfig::new(self.attack_epsilon, n_iters),
        }
    }

    /// The three smoothing baselines at the configured window/sigma.
    pub fn filter_specs(&self) -> Vec<FilterSpec> {
        [FilterKind::Gaussian, FilterKind::Median, FilterKind::Mean]
            .into_iter()
            .map(|kind| FilterSpec {
                kind,
                window: self.filter_window,
                sigma: self.filter_sigma,
            })
            .collect()
    }

    pub fn dcf_params(&self) -> DcfParams {
        DcfParams {
            p_target: self.dcf_p_target,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_hash_is_stable_across_runs() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.config_hash(), cfg.clone().config_hash());
    }

    #[test]
    fn parse_applies_overrides_and_ignores_comments() {
        let text = "\
# speakers
corpus.speakers = 6   # inline comment
attack.epsilon = 0.1

defense.k_list = 0, 2, 4
";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.speakers, 6);
        assert_eq!(cfg.attack_epsilon, 0.1);
        assert_eq!(cfg.k_list, vec![0, 2, 4]);
        assert_eq!(cfg.frames, 96);
    }

    #[test]
    fn unknown_keys_and_malformed_lines_are_rejected() {
        assert!(matches!(
            ExperimentConfig::parse("corpus.speaker = 5"),
            Err(Error::Invalid(msg)) if msg.contains("unknown config key")
        ));
        assert!(matches!(
            ExperimentConfig::parse("just some text"),
            Err(Error::Invalid(msg)) if msg.contains("expected `key = value`")
        ));
        assert!(matches!(
            ExperimentConfig::parse("corpus.speakers = many"),
            Err(Error::Invalid(msg)) if msg.contains("cannot parse")
        ));
    }

    #[test]
    fn hash_ignores_out_dir_but_tracks_semantic_fields() {
        let base = ExperimentConfig::default();
        let mut moved = base.clone();
        moved.out_dir = PathBuf::from("/tmp/elsewhere");
        assert_eq!(base.config_hash(), moved.config_hash());

        let mut seeded = base.clone();
        seeded.seed = 43;
        assert_ne!(base.config_hash(), seeded.config_hash());

        let mut eps = base.clone();
        eps.attack_epsilon = 0.2;
        assert_ne!(base.config_hash(), eps.config_hash());
    }

    #[test]
    fn hash_is_independent_of_file_key_order() {
        let a = ExperimentConfig::parse("corpus.speakers = 8\nattack.epsilon = 0.2").unwrap();
        let b = ExperimentConfig::parse("attack.epsilon = 0.2\ncorpus.speakers = 8").unwrap();
        assert_eq!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn explicit_alpha_equal_to_derived_hashes_identically() {
        let derived = ExperimentConfig::default();
        let mut explicit = derived.clone();
        explicit.attack_alpha = Some(derived.attack_epsilon / derived.attack_n_iters as f64);
        assert_eq!(derived.config_hash(), explicit.config_hash());
    }

    #[test]
    fn invalid_cross_field_combinations_fail_validation() {
        assert!(ExperimentConfig::parse("corpus.speakers = 1").is_err());
        assert!(ExperimentConfig::parse("corpus.frames = 4").is_err());
        assert!(ExperimentConfig::parse("alter.w_t = 200").is_err());
        assert!(ExperimentConfig::parse("defense.k_list = ").is_err());
        assert!(ExperimentConfig::parse("attack.alpha = 0.9").is_err());
    }

    #[test]
    fn typed_views_mirror_the_flat_fields() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.asv_config().channels, cfg.channels);
        assert_eq!(cfg.recon_config().d_model, cfg.recon_d_model);
        assert_eq!(cfg.attack_config().unwrap().alpha, 0.06);
        assert_eq!(cfg.filter_specs().len(), 3);
        assert_eq!(cfg.alter_policy().w_t, 7);
    }
}
