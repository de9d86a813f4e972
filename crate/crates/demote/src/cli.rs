//! CLI subcommands wiring data, model, training, and metrics into
//! reproducible experiments: gen-data, train, eval, compare. Every command
//! appends a run manifest next to its primary output and never mutates its
//! input files. Exit codes: 0 success, 2 validation error, 3 numeric
//! failure during training.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{
    job_config_echo, parse_kv_file, synthetic_spec_echo, synthetic_spec_from_kv,
};
use crate::data::{encode_dataset, generate_synthetic, load_jsonl, save_jsonl};
use crate::error::{Error, Result};
use crate::manifest::{append_manifest, file_hash, now_rfc3339, RunManifest};
use crate::metrics::{audit, AuditReport};
use crate::model::{init_params, Checkpoint};
use crate::training::{alternate, derive_seed, pretrain, TrainingLog};

#[derive(Parser)]
#[command(
    name = "demote",
    version,
    about = "Train text classifiers that predict a target attribute while demoting a protected one"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic confounded corpus from a key=value spec file
    GenData {
        /// Spec file (keys: n_examples, length, n_neutral, n_toxmark,
        /// n_dialmark, k_tox, k_dial, p_z, q1, q0, marker_noise, seed)
        #[arg(long)]
        spec: PathBuf,
        /// Output JSONL path
        #[arg(long)]
        out: PathBuf,
        /// Override the spec's seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a classifier: --baseline (pre-training only) or --demote
    /// (full two-phase adversarial procedure)
    Train {
        /// Key=value config covering the training schedule, model dims and
        /// data options
        #[arg(long)]
        config: PathBuf,
        /// Training JSONL
        #[arg(long)]
        train: PathBuf,
        /// Validation JSONL (checkpoint selection)
        #[arg(long)]
        dev: PathBuf,
        /// Output directory (checkpoint.json, training_log.csv, manifest)
        #[arg(long)]
        out: PathBuf,
        #[arg(long, conflicts_with = "demote")]
        baseline: bool,
        #[arg(long)]
        demote: bool,
        /// Override the config seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Audit a checkpoint on a dataset, writing report.json and report.csv
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset JSONL
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated toxic class ids; defaults to the checkpoint's
        #[arg(long)]
        toxic_classes: Option<String>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-cell deltas (ours minus base) between two report.json files
    Compare {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        ours: PathBuf,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out, seed } => cmd_gen_data(&spec, &out, seed),
        Command::Train {
            config,
            train,
            dev,
            out,
            baseline,
            demote,
            seed,
        } => cmd_train(&config, &train, &dev, &out, baseline, demote, seed),
        Command::Eval {
            checkpoint,
            data,
            toxic_classes,
            out,
        } => cmd_eval(&checkpoint, &data, toxic_classes.as_deref(), &out),
        Command::Compare { base, ours, out } => cmd_compare(&base, &ours, &out),
    }
}

fn out_dir_of(path: &Path) -> PathBuf {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    if parent.as_os_str().is_empty() {
        PathBuf::from(".")
    } else {
        parent.to_path_buf()
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn cmd_gen_data(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let started_at = now_rfc3339();
    let kv = parse_kv_file(spec_path)?;
    let mut spec = synthetic_spec_from_kv(&kv)?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let dataset = generate_synthetic(&spec)?;
    ensure_dir(&out_dir_of(out))?;
    let meta = serde_json::json!({
        "spec": synthetic_spec_echo(&spec),
        "seed": spec.seed,
    });
    save_jsonl(&dataset, out, Some(meta))?;

    let manifest = RunManifest {
        command: "gen-data".into(),
        config: synthetic_spec_echo(&spec),
        data_hashes: BTreeMap::from([(spec_path.display().to_string(), file_hash(spec_path)?)]),
        seed: Some(spec.seed),
        started_at,
        finished_at: now_rfc3339(),
        outputs: vec![out.display().to_string()],
        checkpoint_hash: None,
    };
    append_manifest(&out_dir_of(out), &manifest)?;
    println!(
        "wrote {} examples to {} (seed {})",
        dataset.len(),
        out.display(),
        spec.seed
    );
    Ok(())
}

fn cmd_train(
    config_path: &Path,
    train_path: &Path,
    dev_path: &Path,
    out_dir: &Path,
    baseline: bool,
    demote: bool,
    seed: Option<u64>,
) -> Result<()> {
    let started_at = now_rfc3339();
    if baseline == demote {
        return Err(Error::validation(
            "exactly one of --baseline and --demote is required",
        ));
    }
    let kv = parse_kv_file(config_path)?;
    let mut job = crate::config::job_config_from_kv(&kv)?;
    if let Some(seed) = seed {
        job.training.seed = seed;
    }
    let cfg = job.training.clone();

    let train_ds = load_jsonl(train_path, job.k_y, job.k_z, job.posterior_threshold)?;
    let dev_ds = load_jsonl(dev_path, job.k_y, job.k_z, job.posterior_threshold)?;

    let vocab = crate::data::Vocabulary::build(&train_ds, job.min_freq)?;
    let train = encode_dataset(&train_ds, &vocab, job.max_len);
    let dev = encode_dataset(&dev_ds, &vocab, job.max_len);
    let dims = job.dims(vocab.len());
    let init = init_params(&dims, cfg.n_adversaries, derive_seed(cfg.seed, "init"))?;

    ensure_dir(out_dir)?;
    let log_path = out_dir.join("training_log.csv");
    let mut log = TrainingLog::new(job.toxic_classes.clone(), job.k_z);

    // on a numeric failure the partial log is still written before exiting
    let trained = (|| -> Result<(crate::model::ModelParams, usize, &'static str)> {
        let pre = pretrain(&init, &train, &dev, &cfg, &job.toxic_classes, &mut log)?;
        if baseline {
            return Ok((pre.by_rule, pre.by_rule_epoch, "baseline"));
        }
        let alt = alternate(&pre.best_acc, &train, &dev, &cfg, &job.toxic_classes, &mut log)?;
        Ok((alt.selected, alt.selected_epoch, "demoted"))
    })();
    log.write_csv(&log_path)?;
    let (params, selected_epoch, mode) = trained?;

    for r in &log.records {
        println!(
            "epoch {:>3} [{:>9}] dev_acc={:.4} dev_fpr(protected)={}",
            r.epoch,
            r.phase.to_string(),
            r.dev_acc,
            r.dev_fpr
                .iter()
                .filter(|((_, g), _)| *g == 1)
                .map(|(_, v)| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into()))
                .collect::<Vec<_>>()
                .join("/")
        );
    }
    println!("selected checkpoint from epoch {selected_epoch} ({mode})");

    let mut echo = job_config_echo(&job);
    echo.insert("mode".into(), mode.to_string());
    let ckpt = Checkpoint::new(params, &vocab, echo.clone(), Some(selected_epoch));
    let ckpt_path = out_dir.join("checkpoint.json");
    ckpt.save(&ckpt_path)?;

    let manifest = RunManifest {
        command: format!("train --{mode}"),
        config: echo,
        data_hashes: BTreeMap::from([
            (train_path.display().to_string(), file_hash(train_path)?),
            (dev_path.display().to_string(), file_hash(dev_path)?),
            (config_path.display().to_string(), file_hash(config_path)?),
        ]),
        seed: Some(cfg.seed),
        started_at,
        finished_at: now_rfc3339(),
        outputs: vec![ckpt_path.display().to_string(), log_path.display().to_string()],
        checkpoint_hash: Some(ckpt.params.content_hash()),
    };
    append_manifest(out_dir, &manifest)?;
    println!("wrote {} and {}", ckpt_path.display(), log_path.display());
    Ok(())
}

fn parse_toxic_flag(raw: &str) -> Result<Vec<usize>> {
    if raw.trim().is_empty() {
        return Err(Error::validation("--toxic-classes must not be empty"));
    }
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::validation(format!("bad toxic class {s:?}")))
        })
        .collect()
}

fn cmd_eval(
    ckpt_path: &Path,
    data_path: &Path,
    toxic_classes: Option<&str>,
    out_dir: &Path,
) -> Result<()> {
    let started_at = now_rfc3339();
    let ckpt = Checkpoint::load(ckpt_path)?;
    let vocab = ckpt.vocabulary();
    if vocab.hash() != ckpt.vocab_hash {
        return Err(Error::validation(format!(
            "vocabulary mismatch: checkpoint carries {} but tokens hash to {}",
            ckpt.vocab_hash,
            vocab.hash()
        )));
    }

    let echo_get = |key: &str| ckpt.config_echo.get(key).map(|s| s.as_str());
    let max_len: usize = echo_get("max_len").unwrap_or("64").parse().unwrap_or(64);
    let posterior_threshold: f64 = echo_get("posterior_threshold")
        .unwrap_or("0.8")
        .parse()
        .unwrap_or(0.8);
    let toxic: Vec<usize> = match toxic_classes {
        Some(raw) => parse_toxic_flag(raw)?,
        None => match echo_get("toxic_classes") {
            Some(raw) => parse_toxic_flag(raw)?,
            None => vec![1],
        },
    };
    let include_adversary = echo_get("mode") == Some("demoted");

    let dims = ckpt.params.dims;
    let dataset = load_jsonl(data_path, dims.k_y, dims.k_z, posterior_threshold)?;
    let data = encode_dataset(&dataset, &vocab, max_len);
    let report = audit(&ckpt.params, &data, &toxic, &dataset.name, include_adversary)?;

    ensure_dir(out_dir)?;
    let json_path = out_dir.join("report.json");
    let csv_path = out_dir.join("report.csv");
    std::fs::write(&json_path, report.to_json()).map_err(|e| Error::io(&json_path, e))?;
    std::fs::write(&csv_path, report.to_csv()).map_err(|e| Error::io(&csv_path, e))?;

    let manifest = RunManifest {
        command: "eval".into(),
        config: ckpt.config_echo.clone(),
        data_hashes: BTreeMap::from([
            (data_path.display().to_string(), file_hash(data_path)?),
            (ckpt_path.display().to_string(), file_hash(ckpt_path)?),
        ]),
        seed: None,
        started_at,
        finished_at: now_rfc3339(),
        outputs: vec![json_path.display().to_string(), csv_path.display().to_string()],
        checkpoint_hash: Some(ckpt.params.content_hash()),
    };
    append_manifest(out_dir, &manifest)?;
    println!(
        "accuracy {:.4}, macro-F1 {:.4}; wrote {} and {}",
        report.accuracy,
        report.macro_f1,
        json_path.display(),
        csv_path.display()
    );
    Ok(())
}

fn load_report(path: &Path) -> Result<AuditReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::validation(format!("cannot parse report {}: {e}", path.display())))
}

/// Delta CSV: ours minus base per cell, so a negative FPR delta means the
/// demoted model produces fewer false positives.
fn cmd_compare(base_path: &Path, ours_path: &Path, out: &Path) -> Result<()> {
    let started_at = now_rfc3339();
    let base = load_report(base_path)?;
    let ours = load_report(ours_path)?;
    if base.k_y != ours.k_y || base.k_z != ours.k_z || base.toxic_classes != ours.toxic_classes {
        return Err(Error::validation(format!(
            "report schemas differ: k_y {}/{}, k_z {}/{}, toxic_classes {:?}/{:?}",
            base.k_y, ours.k_y, base.k_z, ours.k_z, base.toxic_classes, ours.toxic_classes
        )));
    }

    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let delta = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) => Some(b - a),
        _ => None,
    };
    let mut csv = String::from("metric,class,group,base,ours,delta\n");
    csv.push_str(&format!(
        "accuracy,,,{},{},{}\n",
        base.accuracy,
        ours.accuracy,
        ours.accuracy - base.accuracy
    ));
    csv.push_str(&format!(
        "macro_f1,,,{},{},{}\n",
        base.macro_f1,
        ours.macro_f1,
        ours.macro_f1 - base.macro_f1
    ));
    for (b, o) in base.fpr.iter().zip(&ours.fpr) {
        if (b.class, b.group) != (o.class, o.group) {
            return Err(Error::validation("report FPR cells are not aligned"));
        }
        csv.push_str(&format!(
            "fpr,{},{},{},{},{}\n",
            b.class,
            b.group,
            fmt(b.value),
            fmt(o.value),
            fmt(delta(b.value, o.value))
        ));
    }
    for (b, o) in base.fpr_gap.iter().zip(&ours.fpr_gap) {
        csv.push_str(&format!(
            "fpr_gap,{},,{},{},{}\n",
            b.class,
            fmt(b.value),
            fmt(o.value),
            fmt(delta(b.value, o.value))
        ));
    }
    for (b, o) in base.eoo_gap.iter().zip(&ours.eoo_gap) {
        csv.push_str(&format!(
            "eoo_gap,{},,{},{},{}\n",
            b.class,
            fmt(b.value),
            fmt(o.value),
            fmt(delta(b.value, o.value))
        ));
    }
    if let (Some(b), Some(o)) = (base.adversary_dev_accuracy, ours.adversary_dev_accuracy) {
        csv.push_str(&format!("adversary_dev_accuracy,,,{b},{o},{}\n", o - b));
    }

    ensure_dir(&out_dir_of(out))?;
    std::fs::write(out, &csv).map_err(|e| Error::io(out, e))?;

    let manifest = RunManifest {
        command: "compare".into(),
        config: BTreeMap::new(),
        data_hashes: BTreeMap::from([
            (base_path.display().to_string(), file_hash(base_path)?),
            (ours_path.display().to_string(), file_hash(ours_path)?),
        ]),
        seed: None,
        started_at,
        finished_at: now_rfc3339(),
        outputs: vec![out.display().to_string()],
        checkpoint_hash: None,
    };
    append_manifest(&out_dir_of(out), &manifest)?;
    println!("wrote {}", out.display());
    Ok(())
}
