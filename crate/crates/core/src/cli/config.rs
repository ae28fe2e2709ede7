//! Experiment config files: line-oriented `key = value` with dotted
//! section paths. Unknown keys are rejected with their line number; every
//! resolved value is echoed back so runs are self-describing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::PositionMode;
use crate::defense::DefenseConfig;
use crate::federation::{FederationConfig, ScheduleMode};
use crate::model::Pooling;
use crate::{Error, Result};

/// Raw key/value pairs with their source lines.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    pub path: String,
    entries: BTreeMap<String, (String, usize)>,
}

impl RawConfig {
    /// Override a key (used by parameter sweeps). Line 0 marks synthetic
    /// entries.
    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), (value.to_string(), 0));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }
}

/// Parse a config file into raw entries. Lines are `key = value`; blank
/// lines and `#` comments are skipped.
pub fn parse_config_file(path: &Path) -> Result<RawConfig> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
    parse_config_text(&display, &text)
}

pub(crate) fn parse_config_text(path: &str, text: &str) -> Result<RawConfig> {
    let mut raw = RawConfig {
        path: path.to_string(),
        entries: BTreeMap::new(),
    };
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_string(),
            line: lineno,
            msg: "expected 'key = value'".into(),
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(Error::Parse {
                path: path.to_string(),
                line: lineno,
                msg: "empty key".into(),
            });
        }
        if let Some((_, first)) = raw.entries.get(&key) {
            return Err(Error::Parse {
                path: path.to_string(),
                line: lineno,
                msg: format!("duplicate key '{key}' (first set on line {first})"),
            });
        }
        raw.entries.insert(key, (value, lineno));
    }
    Ok(raw)
}

#[derive(Debug, Clone)]
pub struct ModelSection {
    pub hidden: usize,
    pub pooling: Pooling,
}

#[derive(Debug, Clone)]
pub struct DataSection {
    pub vocab: usize,
    pub classes: usize,
    pub examples: usize,
    pub seq_len: usize,
    pub skew: f64,
    pub alpha: f64,
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub corpus_file: Option<PathBuf>,
}

/// Attack strategy named in the config; parameters live alongside.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    None,
    RareEmbedding,
    RareEmbeddingGe,
    EntireEmbedding,
    DataPoisoning,
    ModelReplacement,
    Dba,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::RareEmbedding => "rare-embedding",
            AttackKind::RareEmbeddingGe => "rare-embedding+ge",
            AttackKind::EntireEmbedding => "entire-embedding",
            AttackKind::DataPoisoning => "data-poisoning",
            AttackKind::ModelReplacement => "model-replacement",
            AttackKind::Dba => "dba",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttackSection {
    pub kind: AttackKind,
    pub epsilon: f64,
    pub schedule: ScheduleMode,
    /// How many rare token ids to select as the trigger vocabulary.
    pub trigger_tokens: usize,
    /// How many triggers are inserted per input.
    pub trigger_count: usize,
    pub range_lo: usize,
    pub range_hi: usize,
    pub position_mode: PositionMode,
    pub norm_bound: Option<f64>,
    pub target_label: usize,
    pub backdoor_steps: usize,
    pub backdoor_lr: f64,
    pub ensemble_size: usize,
    pub decay: f64,
    pub early_stop_acc: f64,
    pub mix_ratio: f64,
    /// Model-replacement scale; defaults to clients-per-round.
    pub replace_scale: f64,
    pub dba_adversaries: usize,
}

/// Fully resolved experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub data: DataSection,
    /// Seed field is a placeholder; each run substitutes its own seed.
    pub federation: FederationConfig,
    pub attack: AttackSection,
    pub defense: DefenseConfig,
    pub thresholds: Vec<f64>,
    pub seeds: Vec<u64>,
    pub sweep: Option<(String, Vec<String>)>,
}

/// Tracks consumed keys so leftovers can be reported as unknown.
struct Reader<'a> {
    raw: &'a RawConfig,
    used: std::collections::BTreeSet<String>,
}

impl<'a> Reader<'a> {
    fn new(raw: &'a RawConfig) -> Self {
        Reader {
            raw,
            used: Default::default(),
        }
    }

    fn field_err(&self, key: &str, msg: String) -> Error {
        let line = self.raw.entries.get(key).map(|&(_, l)| l).unwrap_or(0);
        Error::Parse {
            path: self.raw.path.clone(),
            line,
            msg: format!("{key}: {msg}"),
        }
    }

    fn take_raw(&mut self, key: &str) -> Option<&'a str> {
        self.used.insert(key.to_string());
        self.raw.entries.get(key).map(|(v, _)| v.as_str())
    }

    fn take<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.take_raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| self.field_err(key, format!("cannot parse {v:?}"))),
        }
    }

    fn finish(self) -> Result<()> {
        for (key, &(_, line)) in &self.raw.entries {
            if !self.used.contains(key) {
                return Err(Error::Parse {
                    path: self.raw.path.clone(),
                    line,
                    msg: format!("unknown key '{key}'"),
                });
            }
        }
        Ok(())
    }
}

fn parse_list<T: std::str::FromStr>(value: &str) -> std::result::Result<Vec<T>, ()> {
    value
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| ()))
        .collect()
}

/// Resolve raw entries into a validated [`ExperimentConfig`].
pub fn resolve(raw: &RawConfig) -> Result<ExperimentConfig> {
    let mut r = Reader::new(raw);

    let model = ModelSection {
        hidden: r.take("model.hidden", 16usize)?,
        pooling: match r.take_raw("model.pooling").unwrap_or("mean") {
            "mean" => Pooling::Mean,
            "position-decay" => Pooling::PositionDecay,
            other => {
                return Err(r.field_err(
                    "model.pooling",
                    format!("expected 'mean' or 'position-decay', got {other:?}"),
                ))
            }
        },
    };
    if model.hidden == 0 {
        return Err(r.field_err("model.hidden", "must be >= 1".into()));
    }

    let data = DataSection {
        vocab: r.take("data.vocab", 500usize)?,
        classes: r.take("data.classes", 4usize)?,
        examples: r.take("data.examples", 4000usize)?,
        seq_len: r.take("data.seq_len", 20usize)?,
        skew: r.take("data.skew", 0.9f64)?,
        alpha: r.take("data.alpha", 1.0f64)?,
        test_fraction: r.take("data.test_fraction", 0.15f64)?,
        val_fraction: r.take("data.val_fraction", 0.05f64)?,
        corpus_file: r
            .take_raw("data.corpus_file")
            .filter(|&v| v != "none")
            .map(PathBuf::from),
    };
    if data.classes < 2 {
        return Err(r.field_err("data.classes", "must be >= 2".into()));
    }
    if data.vocab < data.classes * 10 {
        return Err(r.field_err("data.vocab", "must be >= 10 * classes".into()));
    }
    if !(data.skew > 0.0 && data.skew <= 1.0) {
        return Err(r.field_err("data.skew", "must be in (0, 1]".into()));
    }
    if data.alpha <= 0.0 {
        return Err(r.field_err("data.alpha", "must be > 0".into()));
    }
    if !(data.test_fraction > 0.0
        && data.val_fraction > 0.0
        && data.test_fraction + data.val_fraction < 1.0)
    {
        return Err(r.field_err(
            "data.test_fraction",
            "test and val fractions must be positive and sum below 1".into(),
        ));
    }

    let federation = FederationConfig {
        num_clients: r.take("federation.clients", 100usize)?,
        clients_per_round: r.take("federation.clients_per_round", 10usize)?,
        rounds: r.take("federation.rounds", 100usize)?,
        server_lr: r.take("federation.server_lr", 1.0f64)?,
        server_momentum: r.take("federation.server_momentum", 0.9f64)?,
        client_lr: r.take("federation.client_lr", 0.3f64)?,
        client_steps: r.take("federation.client_steps", 30usize)?,
        batch_size: r.take("federation.batch_size", 16usize)?,
        seed: 0,
    };
    if let Err(Error::Config(msg)) = federation.validate() {
        return Err(r.field_err("federation.clients", msg));
    }

    let kind = match r.take_raw("attack.strategy").unwrap_or("none") {
        "none" => AttackKind::None,
        "rare-embedding" => AttackKind::RareEmbedding,
        "rare-embedding+ge" => AttackKind::RareEmbeddingGe,
        "entire-embedding" => AttackKind::EntireEmbedding,
        "data-poisoning" => AttackKind::DataPoisoning,
        "model-replacement" => AttackKind::ModelReplacement,
        "dba" => AttackKind::Dba,
        other => {
            return Err(r.field_err("attack.strategy", format!("unknown strategy {other:?}")))
        }
    };
    let position_mode = match r.take_raw("attack.position").unwrap_or("uniform") {
        "uniform" => PositionMode::UniformInRange,
        fixed if fixed.starts_with("fixed:") => {
            let p = fixed["fixed:".len()..].parse().map_err(|_| {
                r.field_err("attack.position", format!("bad fixed index in {fixed:?}"))
            })?;
            PositionMode::FixedStart(p)
        }
        other => {
            return Err(r.field_err(
                "attack.position",
                format!("expected 'uniform' or 'fixed:<index>', got {other:?}"),
            ))
        }
    };
    let norm_bound = match r.take_raw("attack.norm_bound").unwrap_or("none") {
        "none" => None,
        v => Some(v.parse::<f64>().map_err(|_| {
            r.field_err("attack.norm_bound", format!("expected 'none' or float, got {v:?}"))
        })?),
    };
    let attack = AttackSection {
        kind,
        epsilon: r.take("attack.epsilon", 0.01f64)?,
        schedule: match r.take_raw("attack.schedule").unwrap_or("fixed-frequency") {
            "fixed-frequency" => ScheduleMode::FixedFrequency,
            "random" => ScheduleMode::Random,
            other => {
                return Err(r.field_err(
                    "attack.schedule",
                    format!("expected 'fixed-frequency' or 'random', got {other:?}"),
                ))
            }
        },
        trigger_tokens: r.take("attack.trigger_tokens", 3usize)?,
        trigger_count: r.take("attack.trigger_count", 3usize)?,
        range_lo: r.take("attack.range_lo", 0usize)?,
        range_hi: r.take("attack.range_hi", 30usize)?,
        position_mode,
        norm_bound,
        target_label: r.take("attack.target_label", 0usize)?,
        backdoor_steps: r.take("attack.backdoor_steps", 400usize)?,
        backdoor_lr: r.take("attack.backdoor_lr", 1.0f64)?,
        ensemble_size: r.take("attack.ensemble_size", 3usize)?,
        decay: r.take("attack.decay", 0.5f64)?,
        early_stop_acc: r.take("attack.early_stop_acc", 0.99f64)?,
        mix_ratio: r.take("attack.mix_ratio", 0.5f64)?,
        replace_scale: r.take(
            "attack.replace_scale",
            federation.clients_per_round as f64,
        )?,
        dba_adversaries: r.take("attack.dba_adversaries", 2usize)?,
    };
    if !(0.0..=1.0).contains(&attack.epsilon) {
        return Err(r.field_err("attack.epsilon", "must be in [0, 1]".into()));
    }
    if attack.trigger_tokens == 0 || attack.trigger_tokens > data.vocab {
        return Err(r.field_err("attack.trigger_tokens", "must be in [1, vocab]".into()));
    }
    if attack.range_lo >= attack.range_hi {
        return Err(r.field_err("attack.range_lo", "range must be nonempty".into()));
    }
    if attack.trigger_count > attack.range_hi - attack.range_lo {
        return Err(r.field_err("attack.trigger_count", "exceeds range width".into()));
    }
    if attack.target_label >= data.classes {
        return Err(r.field_err("attack.target_label", "must be < classes".into()));
    }
    if !(attack.decay > 0.0 && attack.decay < 1.0) {
        return Err(r.field_err("attack.decay", "must be in (0, 1)".into()));
    }
    if attack.ensemble_size == 0 {
        return Err(r.field_err("attack.ensemble_size", "must be >= 1".into()));
    }
    if !(attack.mix_ratio > 0.0 && attack.mix_ratio <= 1.0) {
        return Err(r.field_err("attack.mix_ratio", "must be in (0, 1]".into()));
    }
    if attack.replace_scale <= 0.0 {
        return Err(r.field_err("attack.replace_scale", "must be > 0".into()));
    }
    if !(attack.early_stop_acc > 0.0 && attack.early_stop_acc <= 1.0) {
        return Err(r.field_err("attack.early_stop_acc", "must be in (0, 1]".into()));
    }
    if attack.backdoor_lr <= 0.0 {
        return Err(r.field_err("attack.backdoor_lr", "must be > 0".into()));
    }
    if kind == AttackKind::Dba && attack.dba_adversaries == 0 {
        return Err(r.field_err("attack.dba_adversaries", "must be >= 1".into()));
    }

    let defense = match r.take_raw("defense.kind").unwrap_or("none") {
        "none" => {
            // consume defense params so they are not "unknown" when a sweep
            // toggles the kind, but reject contradictory leftovers otherwise
            DefenseConfig::None
        }
        "norm-clip" => DefenseConfig::NormClip {
            delta: r.take("defense.delta", 0.5f64)?,
            literal: r.take("defense.literal_clip", false)?,
        },
        "weak-dp" => DefenseConfig::WeakDp {
            delta: r.take("defense.delta", 0.5f64)?,
            sigma: r.take("defense.sigma", 5e-4f64)?,
        },
        "coord-median" => DefenseConfig::CoordMedian {
            embedding_only: r.take("defense.embedding_only", false)?,
        },
        "multi-krum" => {
            let f_byz = r.take("defense.f_byz", 1usize)?;
            let default_k = federation
                .clients_per_round
                .saturating_sub(f_byz + 2)
                .max(1);
            DefenseConfig::MultiKrum {
                f_byz,
                k_select: r.take("defense.k_select", default_k)?,
            }
        }
        "accuracy-check" => DefenseConfig::AccuracyCheck {
            tau: r.take("defense.tau", 0.05f64)?,
        },
        other => return Err(r.field_err("defense.kind", format!("unknown defense {other:?}"))),
    };
    if let Err(Error::Config(msg)) = defense.validate(federation.clients_per_round) {
        return Err(r.field_err("defense.kind", msg));
    }

    let thresholds: Vec<f64> = match r.take_raw("metrics.thresholds") {
        None => vec![0.5, 0.8, 0.9],
        Some(v) => parse_list(v)
            .map_err(|_| r.field_err("metrics.thresholds", format!("bad list {v:?}")))?,
    };

    let seeds: Vec<u64> = match r.take_raw("seeds") {
        None => vec![0],
        Some(v) => {
            parse_list(v).map_err(|_| r.field_err("seeds", format!("bad seed list {v:?}")))?
        }
    };
    if seeds.is_empty() {
        return Err(r.field_err("seeds", "need at least one seed".into()));
    }

    let sweep = match (r.take_raw("sweep.param"), r.take_raw("sweep.values")) {
        (None, None) => None,
        (Some(param), Some(values)) => {
            let values: Vec<String> = values
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            if values.is_empty() {
                return Err(r.field_err("sweep.values", "empty sweep value list".into()));
            }
            Some((param.to_string(), values))
        }
        _ => {
            return Err(r.field_err(
                "sweep.param",
                "sweep.param and sweep.values must be set together".into(),
            ))
        }
    };

    r.finish()?;

    let cfg = ExperimentConfig {
        model,
        data,
        federation,
        attack,
        defense,
        thresholds,
        seeds,
        sweep,
    };

    // A sweep must name a key this resolver understands.
    if let Some((param, values)) = &cfg.sweep {
        let mut probe = raw.clone();
        probe.entries.remove("sweep.param");
        probe.entries.remove("sweep.values");
        probe.set(param, values[0].as_str());
        // Re-run resolution on the probe to confirm the key is known.
        resolve(&probe).map_err(|e| match e {
            Error::Parse { msg, .. } => Error::Parse {
                path: raw.path.clone(),
                line: 0,
                msg: format!("sweep.param '{param}': {msg}"),
            },
            other => other,
        })?;
    }

    Ok(cfg)
}

impl ExperimentConfig {
    /// Canonical echo of every resolved value, one `key = value` per line.
    /// Also the input to the run-directory hash.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("model.hidden", self.model.hidden.to_string());
        kv(
            "model.pooling",
            match self.model.pooling {
                Pooling::Mean => "mean".into(),
                Pooling::PositionDecay => "position-decay".into(),
            },
        );
        kv("data.vocab", self.data.vocab.to_string());
        kv("data.classes", self.data.classes.to_string());
        kv("data.examples", self.data.examples.to_string());
        kv("data.seq_len", self.data.seq_len.to_string());
        kv("data.skew", format!("{}", self.data.skew));
        kv("data.alpha", format!("{}", self.data.alpha));
        kv("data.test_fraction", format!("{}", self.data.test_fraction));
        kv("data.val_fraction", format!("{}", self.data.val_fraction));
        kv(
            "data.corpus_file",
            self.data
                .corpus_file
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "none".into()),
        );
        kv("federation.clients", self.federation.num_clients.to_string());
        kv(
            "federation.clients_per_round",
            self.federation.clients_per_round.to_string(),
        );
        kv("federation.rounds", self.federation.rounds.to_string());
        kv("federation.server_lr", format!("{}", self.federation.server_lr));
        kv(
            "federation.server_momentum",
            format!("{}", self.federation.server_momentum),
        );
        kv("federation.client_lr", format!("{}", self.federation.client_lr));
        kv(
            "federation.client_steps",
            self.federation.client_steps.to_string(),
        );
        kv("federation.batch_size", self.federation.batch_size.to_string());
        kv("attack.strategy", self.attack.kind.as_str().to_string());
        kv("attack.epsilon", format!("{}", self.attack.epsilon));
        kv(
            "attack.schedule",
            match self.attack.schedule {
                ScheduleMode::FixedFrequency => "fixed-frequency".into(),
                ScheduleMode::Random => "random".into(),
            },
        );
        kv("attack.trigger_tokens", self.attack.trigger_tokens.to_string());
        kv("attack.trigger_count", self.attack.trigger_count.to_string());
        kv("attack.range_lo", self.attack.range_lo.to_string());
        kv("attack.range_hi", self.attack.range_hi.to_string());
        kv(
            "attack.position",
            match self.attack.position_mode {
                PositionMode::UniformInRange => "uniform".into(),
                PositionMode::FixedStart(p) => format!("fixed:{p}"),
            },
        );
        kv(
            "attack.norm_bound",
            self.attack
                .norm_bound
                .map(|x| format!("{x}"))
                .unwrap_or_else(|| "none".into()),
        );
        kv("attack.target_label", self.attack.target_label.to_string());
        kv("attack.backdoor_steps", self.attack.backdoor_steps.to_string());
        kv("attack.backdoor_lr", format!("{}", self.attack.backdoor_lr));
        kv("attack.ensemble_size", self.attack.ensemble_size.to_string());
        kv("attack.decay", format!("{}", self.attack.decay));
        kv("attack.early_stop_acc", format!("{}", self.attack.early_stop_acc));
        kv("attack.mix_ratio", format!("{}", self.attack.mix_ratio));
        kv("attack.replace_scale", format!("{}", self.attack.replace_scale));
        kv(
            "attack.dba_adversaries",
            self.attack.dba_adversaries.to_string(),
        );
        match &self.defense {
            DefenseConfig::None => kv("defense.kind", "none".into()),
            DefenseConfig::NormClip { delta, literal } => {
                kv("defense.kind", "norm-clip".into());
                kv("defense.delta", format!("{delta}"));
                kv("defense.literal_clip", format!("{literal}"));
            }
            DefenseConfig::WeakDp { delta, sigma } => {
                kv("defense.kind", "weak-dp".into());
                kv("defense.delta", format!("{delta}"));
                kv("defense.sigma", format!("{sigma}"));
            }
            DefenseConfig::CoordMedian { embedding_only } => {
                kv("defense.kind", "coord-median".into());
                kv("defense.embedding_only", format!("{embedding_only}"));
            }
            DefenseConfig::MultiKrum { f_byz, k_select } => {
                kv("defense.kind", "multi-krum".into());
                kv("defense.f_byz", f_byz.to_string());
                kv("defense.k_select", k_select.to_string());
            }
            DefenseConfig::AccuracyCheck { tau } => {
                kv("defense.kind", "accuracy-check".into());
                kv("defense.tau", format!("{tau}"));
            }
        }
        kv(
            "metrics.thresholds",
            self.thresholds
                .iter()
                .map(|t| format!("{t}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        kv(
            "seeds",
            self.seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        if let Some((param, values)) = &self.sweep {
            kv("sweep.param", param.clone());
            kv("sweep.values", values.join(","));
        }
        out
    }
}
