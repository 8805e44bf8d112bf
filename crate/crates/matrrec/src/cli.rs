//! Command-line front door: run configuration, artifact wiring, and the
//! preprocess / train / evaluate / ablate / sweep / synth commands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, Split, SyntheticPattern, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{self, MetricsReport};
use crate::model::{
    apply_ablation, build_model, config_hash, AblationFlags, MaTrRecConfig, MaTrRecModel,
};
use crate::synth::{run_horizon_suite, HorizonSpec};
use crate::train::{fit, TrainConfig, TrainReport};

/// Everything one run needs, as a flat key set mirrored 1:1 by CLI flags.
/// Flag values override file values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // data source: a TSV path, or a synthetic generator spec
    pub dataset: Option<String>,
    pub dataset_name: String,
    pub synthetic_pattern: Option<String>, // "cyclic" | "markov"
    pub markov_order: usize,
    pub n_items: usize,
    pub n_users: usize,
    pub seq_len: usize,
    pub noise: f64,
    // architecture
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_mamba_blocks: usize,
    pub d_state: usize,
    pub conv_kernel: usize,
    pub expand: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub seed: u64,
    // ablation flags
    pub add_positional_encoding: bool,
    pub remove_ffn: bool,
    pub remove_residual: bool,
    pub remove_dropout: bool,
    pub mamba_only: bool,
    pub attention_only: bool,
    // training
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub grad_clip: Option<f64>,
    // evaluation
    pub exclude_seen: bool,
    // horizon suite
    pub copy_distances: Vec<usize>,
    pub horizon_seq_len: usize,
    pub horizon_n_items: usize,
    pub horizon_n_users: usize,
    pub horizon_seeds: usize,
    pub horizon_tolerance: f64,
    // artifacts
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            dataset: None,
            dataset_name: "dataset".into(),
            synthetic_pattern: None,
            markov_order: 1,
            n_items: 20,
            n_users: 64,
            seq_len: 30,
            noise: 0.0,
            d_model: 64,
            n_layers: 1,
            n_heads: 1,
            n_mamba_blocks: 2,
            d_state: 32,
            conv_kernel: 4,
            expand: 2,
            dropout: 0.4,
            max_len: 50,
            seed: 42,
            add_positional_encoding: false,
            remove_ffn: false,
            remove_residual: false,
            remove_dropout: false,
            mamba_only: false,
            attention_only: false,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps_adam: t.eps_adam,
            batch_size: t.batch_size,
            eval_batch_size: t.eval_batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            grad_clip: None,
            exclude_seen: true,
            copy_distances: vec![1, 20],
            horizon_seq_len: 30,
            horizon_n_items: 30,
            horizon_n_users: 64,
            horizon_seeds: 3,
            horizon_tolerance: 0.02,
            output_dir: "out".into(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn ablation(&self) -> AblationFlags {
        AblationFlags {
            add_positional_encoding: self.add_positional_encoding,
            remove_ffn: self.remove_ffn,
            remove_residual: self.remove_residual,
            remove_dropout: self.remove_dropout,
            mamba_only: self.mamba_only,
            attention_only: self.attention_only,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<MaTrRecConfig> {
        let base = MaTrRecConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            n_mamba_blocks: self.n_mamba_blocks,
            d_state: self.d_state,
            conv_kernel: self.conv_kernel,
            expand: self.expand,
            dropout: self.dropout,
            max_len: self.max_len,
            vocab_size,
            ablation: AblationFlags::default(),
            seed: self.seed,
        };
        apply_ablation(&base, self.ablation())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps_adam: self.eps_adam,
            batch_size: self.batch_size,
            eval_batch_size: self.eval_batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            grad_clip: self.grad_clip,
        }
    }

    /// Hash over only the fields that determine the processed dataset;
    /// stamps the cache so stale caches are rejected.
    pub fn preprocess_hash(&self) -> String {
        config_hash(&(
            &self.dataset,
            &self.synthetic_pattern,
            self.markov_order,
            self.n_items,
            self.n_users,
            self.seq_len,
            self.noise.to_bits(),
            self.seed,
        ))
    }

    fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        let pattern = match self.synthetic_pattern.as_deref() {
            Some("cyclic") => SyntheticPattern::Cyclic,
            Some("markov") => SyntheticPattern::Markov { order: self.markov_order },
            Some(other) => {
                return Err(Error::Config(format!(
                    "unknown synthetic_pattern {other:?}, expected cyclic or markov"
                )))
            }
            None => {
                return Err(Error::Config(
                    "no data source: set dataset or synthetic_pattern".into(),
                ))
            }
        };
        Ok(SyntheticSpec {
            n_items: self.n_items,
            n_users: self.n_users,
            pattern,
            seq_len: self.seq_len,
            noise: self.noise,
        })
    }

    /// Loads records from the configured source (file or generator).
    pub fn load_records(&self) -> Result<Vec<data::InteractionRecord>> {
        match &self.dataset {
            Some(path) => data::parse_interactions(Path::new(path)),
            None => data::generate_synthetic(&self.synthetic_spec()?, self.seed),
        }
    }

    pub fn cache_path(&self) -> PathBuf {
        Path::new(&self.output_dir).join(format!("{}.cache", self.dataset_name))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        Path::new(&self.output_dir).join(format!("{}.ckpt", self.dataset_name))
    }
}

fn ensure_output_dir(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    Ok(())
}

/// Loads the processed dataset, preferring a cache stamped with the
/// current preprocessing hash; otherwise preprocesses and writes it.
pub fn load_or_build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    ensure_output_dir(cfg)?;
    let cache = cfg.cache_path();
    if cache.exists() {
        if let Ok(ds) = data::load_dataset_cache(&cache, &cfg.preprocess_hash()) {
            return Ok(ds);
        }
    }
    let records = cfg.load_records()?;
    let ds = data::preprocess(&records);
    data::save_dataset_cache(&ds, &cfg.preprocess_hash(), &cache)?;
    Ok(ds)
}

/// Parse, filter, sequence, split; report corpus statistics.
pub fn cmd_preprocess(cfg: &RunConfig) -> Result<String> {
    ensure_output_dir(cfg)?;
    let records = cfg.load_records()?;
    let ds = data::preprocess(&records);
    data::save_dataset_cache(&ds, &cfg.preprocess_hash(), &cfg.cache_path())?;
    let users = ds.user_vocab.len();
    let items = ds.vocab_size();
    let n = ds.n_interactions;
    let sparsity = if users * items > 0 {
        100.0 * (1.0 - n as f64 / (users as f64 * items as f64))
    } else {
        0.0
    };
    let split = data::leave_one_out_split(&ds.sequences);
    Ok(format!(
        "dataset={} users={} items={} interactions={} sparsity={:.2}% \
         short_sequences_skipped={} cache={} hash={}",
        cfg.dataset_name,
        users,
        items,
        n,
        sparsity,
        split.skipped_short,
        cfg.cache_path().display(),
        cfg.preprocess_hash()
    ))
}

fn split_of(ds: &Dataset) -> Split {
    data::leave_one_out_split(&ds.sequences)
}

/// Train on the configured dataset; write best checkpoint and report.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    let ds = load_or_build_dataset(cfg)?;
    let split = split_of(&ds);
    let mc = cfg.model_config(ds.vocab_size())?;
    let model = build_model::<f32>(&mc)?;
    let report = fit(&model, &split, &cfg.train_config())?;
    ensure_output_dir(cfg)?;
    model.save_checkpoint(&cfg.checkpoint_path())?;
    let mut value = serde_json::to_value(&report)?;
    value["run_config_hash"] = serde_json::Value::String(cfg.hash());
    std::fs::write(
        Path::new(&cfg.output_dir).join("train_report.json"),
        serde_json::to_string_pretty(&value)?,
    )?;
    Ok(report)
}

/// Evaluate a trained checkpoint on the test part.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<MetricsReport> {
    let ds = load_or_build_dataset(cfg)?;
    let model = MaTrRecModel::<f32>::load_checkpoint(&cfg.checkpoint_path())?;
    let expected = cfg.model_config(ds.vocab_size())?;
    if model.config != expected {
        return Err(Error::ArtifactMismatch(format!(
            "checkpoint was trained under configuration {} but the current \
             run expects {}",
            model.config.hash(),
            expected.hash()
        )));
    }
    let split = split_of(&ds);
    let report = eval::evaluate(
        &model,
        &split.test,
        cfg.exclude_seen,
        cfg.eval_batch_size,
        &cfg.dataset_name,
        cfg.seed,
    )?;
    ensure_output_dir(cfg)?;
    let mut value = serde_json::to_value(&report)?;
    value["run_config_hash"] = serde_json::Value::String(cfg.hash());
    std::fs::write(
        Path::new(&cfg.output_dir).join("metrics.json"),
        serde_json::to_string_pretty(&value)?,
    )?;
    std::fs::write(
        Path::new(&cfg.output_dir).join("metrics.csv"),
        format!("{}\n{}\n", MetricsReport::csv_header(), report.csv_row()),
    )?;
    Ok(report)
}

/// The ablation table's row set: label plus the tweak applied to the
/// base run configuration.
fn ablation_rows() -> Vec<(&'static str, Box<dyn Fn(&mut RunConfig)>)> {
    vec![
        ("default", Box::new(|_: &mut RunConfig| {})),
        ("add_pe", Box::new(|c: &mut RunConfig| c.add_positional_encoding = true)),
        ("remove_ffn", Box::new(|c: &mut RunConfig| c.remove_ffn = true)),
        ("remove_rc", Box::new(|c: &mut RunConfig| c.remove_residual = true)),
        ("remove_dropout", Box::new(|c: &mut RunConfig| c.remove_dropout = true)),
        ("heads_2", Box::new(|c: &mut RunConfig| c.n_heads = 2)),
        ("layers_2", Box::new(|c: &mut RunConfig| c.n_layers = 2)),
    ]
}

/// Trains the default model plus one run per ablation row and emits a
/// CSV table with parameter counts and test metrics.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<String> {
    let ds = load_or_build_dataset(cfg)?;
    let split = split_of(&ds);
    let mut csv =
        String::from("variant,param_count,recall@5,recall@10,recall@20,ndcg@10,seconds\n");
    for (label, tweak) in ablation_rows() {
        let start = Instant::now();
        let mut row_cfg = cfg.clone();
        tweak(&mut row_cfg);
        let mc = row_cfg.model_config(ds.vocab_size())?;
        let model = build_model::<f32>(&mc)?;
        fit(&model, &split, &row_cfg.train_config())?;
        let ranks =
            eval::full_rank(&model, &split.test, cfg.exclude_seen, cfg.eval_batch_size)?;
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.3}\n",
            label,
            model.param_count(),
            eval::recall_at_k(&ranks, 5)?,
            eval::recall_at_k(&ranks, 10)?,
            eval::recall_at_k(&ranks, 20)?,
            eval::ndcg_at_k(&ranks, 10)?,
            start.elapsed().as_secs_f64(),
        ));
    }
    ensure_output_dir(cfg)?;
    std::fs::write(Path::new(&cfg.output_dir).join("ablation.csv"), &csv)?;
    Ok(csv)
}

/// Rough per-run memory footprint: parameters plus the activations one
/// training batch materializes, in bytes at 32-bit precision.
pub fn memory_estimate_bytes(mc: &MaTrRecConfig, batch_size: usize) -> usize {
    let model = build_model::<f32>(mc).expect("config validated earlier");
    let param_bytes = model.param_count() * 4;
    // per position: embedding, per-sublayer inputs/outputs, attention
    // scores, and the final logits dominate
    let d = mc.d_model;
    let per_pos = d * (4 + 10 * mc.n_layers) + mc.vocab_size;
    let scores = mc.max_len; // attention row per position
    let act_bytes = batch_size * mc.max_len * (per_pos + scores) * 4;
    param_bytes + act_bytes
}

/// One train+eval per value of the chosen axis; CSV with metrics, wall
/// time, and a memory estimate.
pub fn cmd_sweep(cfg: &RunConfig, axis: &str, values: &[f64]) -> Result<String> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let ds = load_or_build_dataset(cfg)?;
    let mut csv = String::from(
        "axis,value,recall@5,recall@10,recall@20,ndcg@10,seconds,memory_bytes\n",
    );
    for &value in values {
        let mut row_cfg = cfg.clone();
        match axis {
            "dropout" => {
                if !(0.0..1.0).contains(&value) {
                    return Err(Error::Config(format!("dropout value {value} out of range")));
                }
                row_cfg.dropout = value;
            }
            "max_len" => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!(
                        "max_len value {value} must be a positive integer"
                    )));
                }
                row_cfg.max_len = value as usize;
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown sweep axis {other:?}, expected dropout or max_len"
                )))
            }
        }
        let start = Instant::now();
        let split = split_of(&ds);
        let mc = row_cfg.model_config(ds.vocab_size())?;
        let model = build_model::<f32>(&mc)?;
        fit(&model, &split, &row_cfg.train_config())?;
        let ranks =
            eval::full_rank(&model, &split.test, cfg.exclude_seen, cfg.eval_batch_size)?;
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.3},{}\n",
            axis,
            value,
            eval::recall_at_k(&ranks, 5)?,
            eval::recall_at_k(&ranks, 10)?,
            eval::recall_at_k(&ranks, 20)?,
            eval::ndcg_at_k(&ranks, 10)?,
            start.elapsed().as_secs_f64(),
            memory_estimate_bytes(&mc, row_cfg.batch_size.min(split.train.len().max(1))),
        ));
    }
    ensure_output_dir(cfg)?;
    std::fs::write(
        Path::new(&cfg.output_dir).join(format!("sweep_{axis}.csv")),
        &csv,
    )?;
    Ok(csv)
}

/// Runs the dependency-horizon comparison and writes its CSV table.
pub fn cmd_synth(cfg: &RunConfig) -> Result<String> {
    let specs: Vec<HorizonSpec> = cfg
        .copy_distances
        .iter()
        .map(|&d| HorizonSpec {
            copy_distance: d,
            seq_len: cfg.horizon_seq_len,
            n_items: cfg.horizon_n_items,
            n_users: cfg.horizon_n_users,
            noise: cfg.noise,
        })
        .collect();
    let mc = cfg.model_config(cfg.horizon_n_items)?;
    let seeds: Vec<u64> = (0..cfg.horizon_seeds as u64).map(|s| cfg.seed + s).collect();
    let report = run_horizon_suite(
        &specs,
        &mc,
        &cfg.train_config(),
        &seeds,
        cfg.horizon_tolerance,
    )?;
    ensure_output_dir(cfg)?;
    let csv = report.csv();
    std::fs::write(Path::new(&cfg.output_dir).join("horizon.csv"), &csv)?;
    let mut out = csv.clone();
    for w in &report.warnings {
        out.push_str(&format!("WARNING: {w}\n"));
    }
    Ok(out)
}

/// Maps errors onto the documented process exit codes.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Format { .. } => 2,
        Error::Diverged(_) => 3,
        Error::ArtifactMismatch(_) => 4,
        _ => 1,
    }
}
