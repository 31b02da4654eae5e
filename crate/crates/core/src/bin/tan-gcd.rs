use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use tan_gcd::dataset::{self, Dataset, Split};
use tan_gcd::evaluation::{self, MetricsReport};
use tan_gcd::manifest::RunManifest;
use tan_gcd::synthetic::{self, LabeledSampling, SyntheticConfig};
use tan_gcd::trainer::{self, ClusterCount, TrainConfig, Variant};
use tan_gcd::{EncoderHead, Error, Result};

#[derive(Parser)]
#[command(name = "tan-gcd", version, about = "Generalized category discovery over embedding vectors")]
struct Cli {
    /// Worker threads for clustering (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic feature file and its truth sidecar.
    Generate(GenerateArgs),
    /// Supervised pretraining on the labeled split.
    Pretrain(RunArgs),
    /// Alignment training (pretrains first unless --checkpoint is given).
    Train(RunArgs),
    /// Score a checkpoint on the test split.
    Evaluate(EvaluateArgs),
    /// Estimate the number of categories.
    EstimateK(EstimateArgs),
    /// Per-cluster prototype distances to the true centers, before and after calibration.
    CalibrateReport(CalibrateArgs),
    /// Train every variant from one pretrained head and tabulate the results.
    Ablate(RunArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// acceptance | banking
    #[arg(long, default_value = "acceptance")]
    preset: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    n_categories: Option<usize>,
    #[arg(long)]
    novel_fraction: Option<f64>,
    #[arg(long)]
    labeled_fraction: Option<f64>,
    #[arg(long)]
    per_category_count: Option<usize>,
    #[arg(long)]
    center_scale: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    test_fraction: Option<f64>,
    /// per-category | global
    #[arg(long)]
    labeled_sampling: Option<String>,
}

/// Training flags. Unset flags fall back to the JSON config, then to defaults.
#[derive(Args, Default)]
struct ConfigArgs {
    /// JSON file with TrainConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k_top: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_pretrain: Option<f64>,
    #[arg(long)]
    lr_train: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// N | known | estimate | overcluster_<factor>
    #[arg(long)]
    k_clusters: Option<ClusterCount>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    early_stop_patience: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    input_noise: Option<f64>,
    #[arg(long)]
    normalize_distances: Option<bool>,
    #[arg(long)]
    refresh_every: Option<usize>,
    /// full | no_p2i | no_p2p | no_ce | no_i2i | no_u | no_i2p
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    drop_ratio: Option<f64>,
    #[arg(long)]
    per_subset_mapping: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    data: PathBuf,
    /// Pretrained head to start from.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Truth sidecar; defaults to the one next to --data when present.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Run directory for all outputs.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Number of test clusters; defaults to the classifier width.
    #[arg(long)]
    k_clusters: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    per_subset_mapping: bool,
    /// Write Eval-mode test features in the feature-file format.
    #[arg(long)]
    dump_features: Option<PathBuf>,
    /// Write a two-column principal projection of the test features.
    #[arg(long)]
    dump_2d: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Cluster head features instead of raw embeddings.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Defaults to twice the number of categories in the file.
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    drop_ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Cluster head features instead of raw embeddings.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Defaults to the number of categories in the file.
    #[arg(long)]
    k_clusters: Option<usize>,
    #[arg(long, default_value_t = 5)]
    k_top: usize,
    #[arg(long, default_value_t = 0.8)]
    alpha: f64,
    /// Std of Gaussian noise added to the unlabeled prototypes.
    #[arg(long, default_value_t = 0.0)]
    proto_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::EstimateK(a) => estimate_k(a),
        Command::CalibrateReport(a) => calibrate_report(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) => 2,
        Error::Io { .. } => 3,
        Error::Parse { .. } | Error::Json(_) => 4,
        Error::InvalidInput(_) | Error::Shape { .. } | Error::NonFinite(_) => 5,
        Error::Checkpoint(_) => 6,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut cfg = SyntheticConfig::preset(&a.preset, a.seed)?;
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
    }
    set!(dim, n_categories, novel_fraction, labeled_fraction, per_category_count, center_scale, noise_sigma, test_fraction);
    if let Some(s) = &a.labeled_sampling {
        cfg.labeled_sampling = match s.as_str() {
            "per-category" | "per_category" => LabeledSampling::PerCategory,
            "global" => LabeledSampling::Global,
            other => return Err(Error::InvalidConfig(format!("unknown labeled sampling {other:?}"))),
        };
    }
    let (ds, truth) = synthetic::make_synthetic(&cfg)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    dataset::save_feature_file(&ds, &a.out)?;
    let truth_path = synthetic::truth_path_for(&a.out);
    synthetic::save_truth(&truth, &ds, &truth_path)?;

    let mut m = RunManifest::new("generate", Some(cfg.seed), serde_json::to_value(&cfg)?);
    m.add_output(&a.out)?;
    m.add_output(&truth_path)?;
    let mpath = a.out.with_extension("manifest.json");
    write_json(&mpath, &m)?;
    let s = ds.summary();
    println!(
        "wrote {} ({} labeled, {} unlabeled, {} test; {} known / {} categories)",
        a.out.display(),
        s.labeled,
        s.unlabeled,
        s.test,
        s.known,
        s.total_categories
    );
    for w in &s.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

/// Defaults, then the JSON file, then explicit flags.
fn resolve_config(c: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = c.$f.clone() { cfg.$f = v; })* };
    }
    set!(
        seed, k_top, alpha, beta, tau, epochs, batch_size, lr_pretrain, lr_train, weight_decay, k_clusters,
        pretrain_epochs, early_stop_patience, dropout, input_noise, normalize_distances, refresh_every, variant,
        drop_ratio
    );
    if c.k_max.is_some() {
        cfg.k_max = c.k_max;
    }
    if c.per_subset_mapping {
        cfg.per_subset_mapping = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Prepared {
    ds: Dataset,
    cfg: TrainConfig,
    truth: Option<tan_gcd::PrototypeSet>,
    manifest: RunManifest,
}

fn prepare(command: &str, a: &RunArgs) -> Result<Prepared> {
    let cfg = resolve_config(&a.cfg)?;
    let ds = dataset::load_feature_file(&a.data)?;
    create_dir(&a.out_dir)?;
    let mut manifest = RunManifest::new(command, Some(cfg.seed), serde_json::to_value(&cfg)?);
    manifest.add_input(&a.data)?;
    let truth_path = a.truth.clone().or_else(|| {
        let p = synthetic::truth_path_for(&a.data);
        p.exists().then_some(p)
    });
    let truth = match truth_path {
        Some(p) => {
            manifest.add_input(&p)?;
            Some(synthetic::load_truth(&p)?)
        }
        None => None,
    };
    if let Some(c) = &a.checkpoint {
        manifest.add_input(c)?;
    }
    for w in ds.summary().warnings {
        eprintln!("warning: {w}");
    }
    Ok(Prepared {
        ds,
        cfg,
        truth,
        manifest,
    })
}

fn pretrained_head(a: &RunArgs, p: &Prepared) -> Result<EncoderHead> {
    match &a.checkpoint {
        Some(c) => EncoderHead::load(c),
        None => {
            info!("pretraining on {} labeled instances", p.ds.split_indices(Split::Labeled).len());
            Ok(trainer::pretrain(trainer::init_head(&p.ds, &p.cfg)?, &p.ds, &p.cfg)?.0)
        }
    }
}

fn finish(mut m: RunManifest, dir: &Path, outputs: &[PathBuf]) -> Result<()> {
    for o in outputs {
        m.add_output(o)?;
    }
    m.write(dir)?;
    Ok(())
}

fn pretrain(a: RunArgs) -> Result<()> {
    let p = prepare("pretrain", &a)?;
    let head = match &a.checkpoint {
        Some(c) => EncoderHead::load(c)?,
        None => trainer::init_head(&p.ds, &p.cfg)?,
    };
    let (head, report) = trainer::pretrain(head, &p.ds, &p.cfg)?;
    let ckpt = a.out_dir.join("head.json");
    head.save(&ckpt)?;
    let rpath = a.out_dir.join("pretrain.json");
    write_json(&rpath, &report)?;
    println!(
        "pretrained {} epochs (best {}, hold-out accuracy {})",
        report.epochs_run,
        report.best_epoch,
        report.best_holdout_acc.map_or("n/a".into(), |v| format!("{:.2}", 100.0 * v))
    );
    finish(p.manifest, &a.out_dir, &[ckpt, rpath])
}

fn metrics_tsv(rows: impl IntoIterator<Item = (String, MetricsReport)>, key: &str) -> String {
    let mut s = format!("{key}\t{}\n", MetricsReport::TSV_HEADER);
    for (k, m) in rows {
        s.push_str(&format!("{k}\t{}\n", m.tsv_row()));
    }
    s
}

fn train(a: RunArgs) -> Result<()> {
    let p = prepare("train", &a)?;
    let head = pretrained_head(&a, &p)?;
    let out = trainer::train(head, &p.ds, &p.cfg, p.truth.as_ref())?;

    let ckpt = a.out_dir.join("head.json");
    out.head.save(&ckpt)?;
    let metrics_path = a.out_dir.join("metrics.tsv");
    write_text(
        &metrics_path,
        &metrics_tsv(out.epochs.iter().map(|e| (e.epoch.to_string(), e.metrics.clone())), "epoch"),
    )?;
    let loss_path = a.out_dir.join("loss_trace.tsv");
    let mut trace = String::from("epoch\tl_p2i\tl_i2p\tl_i2i\tl_u\tl_ce\ttotal\n");
    for e in &out.epochs {
        let l = &e.loss;
        trace.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            e.epoch, l.l_p2i, l.l_i2p, l.l_i2i, l.l_u, l.l_ce, l.total
        ));
    }
    write_text(&loss_path, &trace)?;
    let json_path = a.out_dir.join("metrics.json");
    write_json(&json_path, &json!({ "k_clusters": out.k_clusters, "epochs": out.epochs }))?;

    let mut m = p.manifest;
    m.extra.insert("k_clusters".into(), json!(out.k_clusters));
    if let Some(f) = out.final_metrics() {
        print_metrics(f);
    }
    finish(m, &a.out_dir, &[ckpt, metrics_path, loss_path, json_path])
}

fn print_metrics(m: &MetricsReport) {
    let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
    println!(
        "H-score {:.2}  Known {}  Novel {}  Overall {:.2}  Pseudo-label {}",
        100.0 * m.h_score,
        pct(m.known_acc),
        pct(m.novel_acc),
        100.0 * m.overall_acc,
        pct(m.pseudo_label_acc)
    );
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let ds = dataset::load_feature_file(&a.data)?;
    let head = EncoderHead::load(&a.checkpoint)?;
    create_dir(&a.out_dir)?;
    let k = a.k_clusters.unwrap_or(head.n_classes());
    let mut report = trainer::evaluate(&head, &ds, k, a.seed, a.per_subset_mapping)?;

    let mut m = RunManifest::new(
        "evaluate",
        Some(a.seed),
        json!({ "k_clusters": k, "per_subset_mapping": a.per_subset_mapping }),
    );
    m.add_input(&a.data)?;
    m.add_input(&a.checkpoint)?;
    let truth_path = a.truth.clone().or_else(|| {
        let p = synthetic::truth_path_for(&a.data);
        p.exists().then_some(p)
    });
    if let Some(tp) = truth_path {
        m.add_input(&tp)?;
        let truth = synthetic::load_truth(&tp)?;
        let cfg = TrainConfig {
            seed: a.seed,
            ..TrainConfig::default()
        };
        if truth.dim() == ds.dim() && ds.split_indices(Split::Unlabeled).len() >= k {
            let protos = trainer::estimate_prototypes(&head, &ds, &cfg, k, 0, None)?;
            let r = trainer::input_space_report(&ds, &protos.clustering, cfg.k_top, cfg.alpha, &truth, 0.0, 0)?;
            report.proto_dist_before = Some(r.before);
            report.proto_dist_after = Some(r.after);
            let unl = ds.split_indices(Split::Unlabeled);
            let gt: Vec<_> = unl.iter().map(|&i| ds.instances()[i].gt_label).collect();
            report.pseudo_label_acc = Some(evaluation::pseudo_label_accuracy(&protos.clustering.assignment, &gt)?);
        }
    }

    let json_path = a.out_dir.join("metrics.json");
    write_json(&json_path, &report)?;
    let tsv_path = a.out_dir.join("metrics.tsv");
    write_text(&tsv_path, &metrics_tsv([("test".to_string(), report.clone())], "split"))?;
    let mut outputs = vec![json_path, tsv_path];

    if a.dump_features.is_some() || a.dump_2d.is_some() {
        let test = ds.split_indices(Split::Test);
        let feats = head.embed_all(&ds.embeddings(&test))?;
        if let Some(path) = &a.dump_features {
            let insts = test
                .iter()
                .zip(&feats)
                .map(|(&i, f)| tan_gcd::Instance {
                    embedding: f.clone(),
                    ..ds.instances()[i].clone()
                })
                .collect();
            dataset::save_feature_file(&Dataset::new(head.output_dim(), insts)?, path)?;
            outputs.push(path.clone());
        }
        if let Some(path) = &a.dump_2d {
            let proj = evaluation::project_2d(&feats);
            let mut s = String::from("id\tgt_label\tx\ty\n");
            for (&i, [x, y]) in test.iter().zip(&proj) {
                let inst = &ds.instances()[i];
                s.push_str(&format!("{}\t{}\t{x:.6}\t{y:.6}\n", inst.id, inst.gt_label));
            }
            write_text(path, &s)?;
            outputs.push(path.clone());
        }
    }
    print_metrics(&report);
    finish(m, &a.out_dir, &outputs)
}

fn features_for(ds: &Dataset, checkpoint: Option<&Path>) -> Result<Vec<Vec<f64>>> {
    let raw: Vec<Vec<f64>> = ds.instances().iter().map(|i| i.embedding.clone()).collect();
    match checkpoint {
        Some(c) => EncoderHead::load(c)?.embed_all(&raw),
        None => Ok(raw),
    }
}

fn estimate_k(a: EstimateArgs) -> Result<()> {
    let ds = dataset::load_feature_file(&a.data)?;
    create_dir(&a.out_dir)?;
    let feats = features_for(&ds, a.checkpoint.as_deref())?;
    let points: Vec<Vec<f64>> = ds
        .instances()
        .iter()
        .zip(feats)
        .filter(|(i, _)| i.split != Split::Test)
        .map(|(_, f)| f)
        .collect();
    let k_max = a.k_max.unwrap_or(2 * ds.num_categories()).min(points.len());
    let k = tan_gcd::clustering::estimate_k(&points, k_max, a.drop_ratio, a.seed)?;
    println!("{k}");
    let cfg = json!({ "k_max": k_max, "drop_ratio": a.drop_ratio });
    let out = a.out_dir.join("estimate.json");
    write_json(&out, &json!({ "k": k, "k_max": k_max, "drop_ratio": a.drop_ratio, "seed": a.seed }))?;
    let mut m = RunManifest::new("estimate-k", Some(a.seed), cfg);
    m.add_input(&a.data)?;
    if let Some(c) = &a.checkpoint {
        m.add_input(c)?;
    }
    finish(m, &a.out_dir, &[out])
}

fn calibrate_report(a: CalibrateArgs) -> Result<()> {
    let ds = dataset::load_feature_file(&a.data)?;
    create_dir(&a.out_dir)?;
    let truth_path = a
        .truth
        .clone()
        .unwrap_or_else(|| synthetic::truth_path_for(&a.data));
    let truth = synthetic::load_truth(&truth_path)?;
    let feats = features_for(&ds, a.checkpoint.as_deref())?;
    let k = a.k_clusters.unwrap_or(ds.num_categories());
    let cfg = TrainConfig {
        k_top: a.k_top,
        alpha: a.alpha,
        seed: a.seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let protos = trainer::prototypes_from_features(&feats, &ds, &cfg, k, 0, None)?;
    let r = trainer::input_space_report(
        &ds,
        &protos.clustering,
        a.k_top,
        a.alpha,
        &truth,
        a.proto_noise,
        trainer::derive_seed(a.seed, &[9]),
    )?;

    let mut s = String::from("cluster\tmatched_labeled\ttruth\tbefore\tafter\n");
    let opt = |v: Option<f64>| v.map_or("NA".to_string(), |v| format!("{v:.6}"));
    for row in &r.rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            row.cluster,
            row.matched_labeled.map_or(-1, |c| c as i64),
            row.truth.map_or(-1, |c| c as i64),
            opt(row.before),
            opt(row.after)
        ));
    }
    let tsv = a.out_dir.join("calibration.tsv");
    write_text(&tsv, &s)?;
    let json_path = a.out_dir.join("calibration.json");
    write_json(&json_path, &r)?;
    println!(
        "mean distance to true centers: before {:.4} after {:.4} (known clusters: {} -> {})",
        r.before,
        r.after,
        opt(r.known_before),
        opt(r.known_after)
    );
    let mut m = RunManifest::new(
        "calibrate-report",
        Some(a.seed),
        json!({ "k_clusters": k, "k_top": a.k_top, "alpha": a.alpha, "proto_noise": a.proto_noise }),
    );
    m.add_input(&a.data)?;
    m.add_input(&truth_path)?;
    if let Some(c) = &a.checkpoint {
        m.add_input(c)?;
    }
    finish(m, &a.out_dir, &[tsv, json_path])
}

fn ablate(a: RunArgs) -> Result<()> {
    let p = prepare("ablate", &a)?;
    let head = pretrained_head(&a, &p)?;
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    for v in Variant::ALL {
        info!("variant {v}");
        let r = trainer::run_ablation_from(&head, v, &p.ds, &p.cfg)?;
        let mut out = std::io::stdout().lock();
        let _ = writeln!(
            out,
            "{v:<8} H {:.2}  Known {}  Novel {}",
            100.0 * r.h_score,
            r.known_acc.map_or("n/a".into(), |x| format!("{:.2}", 100.0 * x)),
            r.novel_acc.map_or("n/a".into(), |x| format!("{:.2}", 100.0 * x)),
        );
        rows.push((v.to_string(), r));
    }
    let tsv = a.out_dir.join("ablation.tsv");
    write_text(&tsv, &metrics_tsv(rows, "variant"))?;
    finish(p.manifest, &a.out_dir, &[tsv])
}
