//! Flat key=value config files for the CLI: one namespace per command,
//! keys named exactly after the config struct fields. Unknown keys are
//! rejected; omitted keys fall back to the documented defaults and the
//! fully resolved config is echoed into manifests and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::training::{CheckpointRule, JobConfig, OptimizerKind};

/// Parses `key = value` lines; `#` starts a comment, blank lines are
/// ignored. Duplicate keys are an error.
pub fn parse_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text, path)
}

pub fn parse_kv(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            msg,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(format!("expected key=value, got {line:?}")))?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(parse_err("empty key".to_string()));
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(parse_err(format!("duplicate key {key:?}")));
        }
    }
    Ok(map)
}

struct KvReader<'a> {
    map: &'a BTreeMap<String, String>,
    known: Vec<&'static str>,
}

impl<'a> KvReader<'a> {
    fn new(map: &'a BTreeMap<String, String>) -> KvReader<'a> {
        KvReader {
            map,
            known: Vec::new(),
        }
    }

    fn get<T: std::str::FromStr>(&mut self, key: &'static str, default: T) -> Result<T> {
        self.known.push(key);
        match self.map.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::validation(format!("config key {key}: cannot parse {raw:?}"))),
        }
    }

    fn get_with<T>(
        &mut self,
        key: &'static str,
        default: T,
        parse: impl Fn(&str) -> Result<T>,
    ) -> Result<T> {
        self.known.push(key);
        match self.map.get(key) {
            None => Ok(default),
            Some(raw) => parse(raw),
        }
    }

    fn reject_unknown(&self) -> Result<()> {
        for key in self.map.keys() {
            if !self.known.contains(&key.as_str()) {
                return Err(Error::validation(format!(
                    "unknown config key {key:?} (known keys: {})",
                    self.known.join(", ")
                )));
            }
        }
        Ok(())
    }
}

/// Reads a SyntheticSpec from parsed key=value pairs, validating it.
pub fn synthetic_spec_from_kv(map: &BTreeMap<String, String>) -> Result<SyntheticSpec> {
    let d = SyntheticSpec::default();
    let mut r = KvReader::new(map);
    let spec = SyntheticSpec {
        n_examples: r.get("n_examples", d.n_examples)?,
        length: r.get("length", d.length)?,
        n_neutral: r.get("n_neutral", d.n_neutral)?,
        n_toxmark: r.get("n_toxmark", d.n_toxmark)?,
        n_dialmark: r.get("n_dialmark", d.n_dialmark)?,
        k_tox: r.get("k_tox", d.k_tox)?,
        k_dial: r.get("k_dial", d.k_dial)?,
        p_z: r.get("p_z", d.p_z)?,
        q1: r.get("q1", d.q1)?,
        q0: r.get("q0", d.q0)?,
        marker_noise: r.get("marker_noise", d.marker_noise)?,
        seed: r.get("seed", d.seed)?,
    };
    r.reject_unknown()?;
    spec.validate()?;
    Ok(spec)
}

fn parse_toxic_classes(raw: &str) -> Result<Vec<usize>> {
    if raw.trim().is_empty() {
        return Err(Error::validation("toxic_classes must not be empty"));
    }
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::validation(format!("bad toxic class {s:?}")))
        })
        .collect()
}

/// Reads the full training job config (schedule + model dims + data
/// options) from parsed key=value pairs, validating it.
pub fn job_config_from_kv(map: &BTreeMap<String, String>) -> Result<JobConfig> {
    let d = JobConfig::default();
    let dt = d.training.clone();
    let mut r = KvReader::new(map);
    let job = JobConfig {
        training: crate::training::TrainingConfig {
            alpha: r.get("alpha", dt.alpha)?,
            rounds: r.get("rounds", dt.rounds)?,
            epochs_per_phase_per_round: r
                .get("epochs_per_phase_per_round", dt.epochs_per_phase_per_round)?,
            pretrain_max_epochs: r.get("pretrain_max_epochs", dt.pretrain_max_epochs)?,
            pretrain_patience: r.get("pretrain_patience", dt.pretrain_patience)?,
            batch_size: r.get("batch_size", dt.batch_size)?,
            learning_rate: r.get("learning_rate", dt.learning_rate)?,
            optimizer: r.get_with("optimizer", dt.optimizer, OptimizerKind::parse)?,
            grad_clip_norm: r.get_with("grad_clip_norm", dt.grad_clip_norm, |raw| {
                if raw == "none" {
                    Ok(None)
                } else {
                    raw.parse()
                        .map(Some)
                        .map_err(|_| Error::validation(format!("bad grad_clip_norm {raw:?}")))
                }
            })?,
            seed: r.get("seed", dt.seed)?,
            n_adversaries: r.get("n_adversaries", dt.n_adversaries)?,
            checkpoint_rule: r.get_with("checkpoint_rule", dt.checkpoint_rule, CheckpointRule::parse)?,
        },
        d_emb: r.get("d_emb", d.d_emb)?,
        d_h: r.get("d_h", d.d_h)?,
        d_mlp: r.get("d_mlp", d.d_mlp)?,
        k_y: r.get("k_y", d.k_y)?,
        k_z: r.get("k_z", d.k_z)?,
        toxic_classes: r.get_with("toxic_classes", d.toxic_classes.clone(), parse_toxic_classes)?,
        min_freq: r.get("min_freq", d.min_freq)?,
        max_len: r.get("max_len", d.max_len)?,
        posterior_threshold: r.get("posterior_threshold", d.posterior_threshold)?,
    };
    r.reject_unknown()?;
    job.validate()?;
    Ok(job)
}

fn fmt_usizes(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// The fully resolved config as flat key=value pairs, for manifests and
/// checkpoint echoes.
pub fn job_config_echo(job: &JobConfig) -> BTreeMap<String, String> {
    let t = &job.training;
    let mut m = BTreeMap::new();
    m.insert("alpha".into(), t.alpha.to_string());
    m.insert("rounds".into(), t.rounds.to_string());
    m.insert(
        "epochs_per_phase_per_round".into(),
        t.epochs_per_phase_per_round.to_string(),
    );
    m.insert("pretrain_max_epochs".into(), t.pretrain_max_epochs.to_string());
    m.insert("pretrain_patience".into(), t.pretrain_patience.to_string());
    m.insert("batch_size".into(), t.batch_size.to_string());
    m.insert("learning_rate".into(), t.learning_rate.to_string());
    m.insert("optimizer".into(), t.optimizer.as_str().to_string());
    m.insert(
        "grad_clip_norm".into(),
        t.grad_clip_norm.map(|c| c.to_string()).unwrap_or_else(|| "none".into()),
    );
    m.insert("seed".into(), t.seed.to_string());
    m.insert("n_adversaries".into(), t.n_adversaries.to_string());
    m.insert("checkpoint_rule".into(), t.checkpoint_rule.as_str().to_string());
    m.insert("d_emb".into(), job.d_emb.to_string());
    m.insert("d_h".into(), job.d_h.to_string());
    m.insert("d_mlp".into(), job.d_mlp.to_string());
    m.insert("k_y".into(), job.k_y.to_string());
    m.insert("k_z".into(), job.k_z.to_string());
    m.insert("toxic_classes".into(), fmt_usizes(&job.toxic_classes));
    m.insert("min_freq".into(), job.min_freq.to_string());
    m.insert("max_len".into(), job.max_len.to_string());
    m.insert("posterior_threshold".into(), job.posterior_threshold.to_string());
    m
}

pub fn synthetic_spec_echo(spec: &SyntheticSpec) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("n_examples".into(), spec.n_examples.to_string());
    m.insert("length".into(), spec.length.to_string());
    m.insert("n_neutral".into(), spec.n_neutral.to_string());
    m.insert("n_toxmark".into(), spec.n_toxmark.to_string());
    m.insert("n_dialmark".into(), spec.n_dialmark.to_string());
    m.insert("k_tox".into(), spec.k_tox.to_string());
    m.insert("k_dial".into(), spec.k_dial.to_string());
    m.insert("p_z".into(), spec.p_z.to_string());
    m.insert("q1".into(), spec.q1.to_string());
    m.insert("q0".into(), spec.q0.to_string());
    m.insert("marker_noise".into(), spec.marker_noise.to_string());
    m.insert("seed".into(), spec.seed.to_string());
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn kv(text: &str) -> BTreeMap<String, String> {
        parse_kv(text, &PathBuf::from("test.conf")).unwrap()
    }

    #[test]
    fn parses_comments_and_whitespace() {
        let map = kv("# header\n alpha = 0.1 # trailing\n\nrounds=3\n");
        assert_eq!(map["alpha"], "0.1");
        assert_eq!(map["rounds"], "3");
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(parse_kv("a=1\na=2\n", &PathBuf::from("x")).is_err());
        assert!(parse_kv("just words\n", &PathBuf::from("x")).is_err());
    }

    #[test]
    fn synthetic_spec_defaults_and_overrides() {
        let spec = synthetic_spec_from_kv(&kv("q1=0.7\nseed=5\n")).unwrap();
        assert_eq!(spec.q1, 0.7);
        assert_eq!(spec.seed, 5);
        assert_eq!(spec.q0, SyntheticSpec::default().q0);

        let err = synthetic_spec_from_kv(&kv("q1=1.5\n")).unwrap_err();
        assert!(err.to_string().contains("q1"), "{err}");

        let err = synthetic_spec_from_kv(&kv("bogus=1\n")).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn job_config_round_trips_through_echo() {
        let job = job_config_from_kv(&kv(
            "alpha=0.1\noptimizer=plain-sgd\ngrad_clip_norm=none\ntoxic_classes=1,2\nk_y=3\n",
        ))
        .unwrap();
        assert_eq!(job.training.alpha, 0.1);
        assert_eq!(job.training.optimizer, OptimizerKind::PlainSgd);
        assert_eq!(job.training.grad_clip_norm, None);
        assert_eq!(job.toxic_classes, vec![1, 2]);

        let echo = job_config_echo(&job);
        let reparsed = job_config_from_kv(&echo).unwrap();
        assert_eq!(reparsed, job);
    }

    #[test]
    fn job_config_rejects_bad_values() {
        assert!(job_config_from_kv(&kv("alpha=0\n")).is_err());
        assert!(job_config_from_kv(&kv("optimizer=adam\n")).is_err());
        assert!(job_config_from_kv(&kv("toxic_classes=\n")).is_err());
        assert!(job_config_from_kv(&kv("toxic_classes=0\n")).is_err());
        assert!(job_config_from_kv(&kv("mystery_knob=7\n")).is_err());
    }
}
