use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use mad_core::codec::{one_hot_probs, Codec};
use mad_core::harness::bench::{benchmark_decode, to_csv, BenchSpec};
use mad_core::harness::dataset::{load_dataset, save_dataset, LoadOptions};
use mad_core::harness::inference::evaluate;
use mad_core::harness::shapes::{generate_dataset, DatasetRecord, Split};
use mad_core::harness::ExperimentConfig;
use mad_core::masking::RefinementSchedule;
use mad_core::model::{checkpoint, Model};
use mad_core::training::{build_batch, check_gradients, train, Objective, Sample, TrainConfig};
use mad_core::vocab::TaskKind;

#[derive(Parser, Debug)]
#[command(name = "mad", version, about = "Masked auto-decoding on a synthetic shapes world")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides data, training and evaluation seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Decoding / training mode.
    #[arg(long, global = true, value_parser = ["mad", "ar"])]
    mode: Option<String>,
    /// Refinement ratios for keypoints and captioning, e.g. 0.8,0.6,0.4 (empty: none).
    #[arg(long, global = true)]
    refine_ratios: Option<String>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Start from the small configuration used by the smoke tests.
    #[arg(long, global = true)]
    smoke: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a shapes-world dataset (PNG images + annotations.json).
    GenData,
    /// Train a model; writes a checkpoint, the config and a JSONL log.
    Train {
        /// Dataset directory; generated in memory from the config if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write loss curves as CSV.
        #[arg(long)]
        dump_plots_data: bool,
    },
    /// Evaluate a checkpoint and print an EvalReport.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "val", value_parser = ["train", "val"])]
        split: String,
        /// Also benchmark detection decoding in both modes.
        #[arg(long)]
        latency: bool,
    },
    /// Decode-latency benchmark over modes and refinement depths; prints CSV.
    Bench {
        /// Random weights are used without a checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "detection", value_parser = ["detection", "segmentation", "keypoint", "captioning"])]
        task: String,
        /// MAD refinement depths to time.
        #[arg(long, default_value = "0,3", value_delimiter = ',')]
        k: Vec<usize>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Annotation → tokens → annotation round trips; reports violations.
    Tokenize {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Scenes to generate when no dataset is given.
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
    /// Finite-difference check of the training loss gradients.
    Gradcheck {
        #[arg(long, default_value_t = 4)]
        coords: usize,
    },
}

fn experiment(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = if common.smoke { ExperimentConfig::smoke() } else { ExperimentConfig::default() };
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text)?;
    }
    if let Some(seed) = common.seed {
        for key in ["data.seed", "train.seed", "eval.seed"] {
            cfg.set(key, &seed.to_string())?;
        }
    }
    if let Some(mode) = &common.mode {
        cfg.set("train.objective", mode)?;
    }
    if let Some(r) = &common.refine_ratios {
        RefinementSchedule::parse(r)?;
        cfg.set("eval.caption_ratios", r)?;
        cfg.set("eval.keypoint_ratios", r)?;
    }
    Ok(cfg.with_overrides(&common.set)?)
}

fn out_dir(common: &Common, default: &str) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn records(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<Vec<DatasetRecord>> {
    match data {
        Some(dir) => {
            let loaded = load_dataset(dir, LoadOptions::default())?;
            if loaded.class_names != cfg.data.class_names() {
                bail!("dataset classes {:?} differ from the configured {:?}", loaded.class_names, cfg.data.class_names());
            }
            Ok(loaded.records)
        }
        None => Ok(generate_dataset(&cfg.data, cfg.dataset.train_images, cfg.dataset.val_images)?),
    }
}

fn objective(cfg: &ExperimentConfig) -> Objective {
    cfg.train.objective
}

fn cmd_gen_data(common: &Common) -> Result<serde_json::Value> {
    let cfg = experiment(common)?;
    let dir = out_dir(common, "data")?;
    let recs = generate_dataset(&cfg.data, cfg.dataset.train_images, cfg.dataset.val_images)?;
    save_dataset(&dir, &recs, &cfg.data.class_names())?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    let instances: usize = recs.iter().map(|r| r.annotation.instances.len()).sum();
    Ok(json!({"command": "gen-data", "out": dir, "images": recs.len(), "instances": instances}))
}

fn cmd_train(common: &Common, data: Option<&Path>, dump_plots: bool) -> Result<serde_json::Value> {
    let cfg = experiment(common)?;
    let dir = out_dir(common, "run")?;
    let codec = cfg.codec()?;
    let recs = records(&cfg, data)?;
    let samples: Vec<Sample> = recs
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| Sample { image: r.image.clone(), annotation: r.annotation.clone() })
        .collect();
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    let mut model: Model<f32> = Model::new(cfg.model_config()?, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
    let mut log = fs::File::create(dir.join("train_log.jsonl"))?;
    let mut curve = if dump_plots {
        let mut f = fs::File::create(dir.join("curve.csv"))?;
        writeln!(f, "step,lr,total,detection,segmentation,keypoint,captioning,elapsed_ms")?;
        Some(f)
    } else {
        None
    };
    let ckpt = dir.join("model.ckpt");
    let every = cfg.train.checkpoint_every;
    let log_every = cfg.train.log_every.max(1);
    let summary = train(&mut model, &codec, &samples, &cfg.train, &mut |rec, m| {
        writeln!(log, "{}", serde_json::to_string(rec)?)?;
        if let Some(f) = curve.as_mut() {
            let t = &rec.loss.per_task;
            writeln!(f, "{},{},{},{},{},{},{},{:.1}", rec.step, rec.lr, rec.loss.total, t[0], t[1], t[2], t[3], rec.elapsed_ms)?;
        }
        if rec.step % log_every == 0 {
            eprintln!("step {:>6}  loss {:.4}  lr {:.2e}  {:.0} s", rec.step, rec.loss.total, rec.lr, rec.elapsed_ms / 1e3);
        }
        if every > 0 && (rec.step + 1) % every == 0 {
            checkpoint::save(&ckpt, m, &codec.vocab)?;
        }
        Ok(())
    })?;
    checkpoint::save(&ckpt, &model, &codec.vocab)?;
    Ok(json!({
        "command": "train",
        "checkpoint": ckpt,
        "steps": summary.history.len(),
        "final_loss": summary.recent_loss(50),
        "objective": objective(&cfg),
    }))
}

/// The config stored next to a checkpoint, unless one was given explicitly.
fn eval_experiment(common: &Common, ckpt: &Path) -> Result<ExperimentConfig> {
    let stored = ckpt.parent().map(|p| p.join("config.txt")).filter(|p| p.exists());
    match (&common.config, stored) {
        (None, Some(path)) => experiment(&Common { config: Some(path), ..common.clone() }),
        _ => experiment(common),
    }
}

fn load_model(path: &Path, codec: &Codec) -> Result<Model<f32>> {
    Ok(checkpoint::load_for::<f32>(path, &codec.vocab)?.model)
}

fn cmd_eval(common: &Common, ckpt: &Path, data: Option<&Path>, split: &str, latency: bool) -> Result<serde_json::Value> {
    let cfg = eval_experiment(common, ckpt)?;
    let codec = cfg.codec()?;
    let model = load_model(ckpt, &codec)?;
    let split = Split::parse(split)?;
    let recs = records(&cfg, data)?;
    let chosen: Vec<&DatasetRecord> = recs.iter().filter(|r| r.split == split).collect();
    let report = evaluate(&model, &codec, &chosen, &cfg.eval, objective(&cfg), cfg.data.person_class(), latency)?;
    let value = serde_json::to_value(&report)?;
    if let Some(dir) = &common.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&value)? + "\n")?;
    }
    Ok(json!({"command": "eval", "split": split.name(), "report": value}))
}

fn task_named(name: &str) -> TaskKind {
    TaskKind::ALL.into_iter().find(|t| t.name() == name).expect("restricted by clap")
}

fn cmd_bench(common: &Common, ckpt: Option<&Path>, task: &str, ks: &[usize], trials: Option<usize>) -> Result<String> {
    let cfg = match ckpt {
        Some(p) => eval_experiment(common, p)?,
        None => experiment(common)?,
    };
    let codec = cfg.codec()?;
    let model = match ckpt {
        Some(p) => load_model(p, &codec)?,
        None => Model::new(cfg.model_config()?, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?,
    };
    let image = &generate_dataset(&cfg.data, 1, 0)?[0].image;
    let task = task_named(task);
    let trials = trials.unwrap_or(cfg.eval.bench_trials);
    let modes: Vec<Objective> = match &common.mode {
        Some(m) => vec![m.parse()?],
        None => vec![Objective::Mad, Objective::Ar],
    };
    let mut rows = Vec::new();
    for mode in modes {
        let ks: Vec<usize> = if mode == Objective::Mad { ks.to_vec() } else { vec![0] };
        for k in ks {
            let spec = BenchSpec { task, mode, refine_k: k, trials, warmup: cfg.eval.bench_warmup };
            rows.push(benchmark_decode(&model, &codec, image, &spec)?);
        }
    }
    let csv = to_csv(&rows);
    if let Some(dir) = &common.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("bench.csv"), &csv)?;
    }
    Ok(csv)
}

/// Encodes every task of every scene and decodes the targets again.
fn cmd_tokenize(common: &Common, data: Option<&Path>, count: usize) -> Result<serde_json::Value> {
    let mut cfg = experiment(common)?;
    cfg.codec.caption_augment = false;
    let codec = cfg.codec()?;
    let recs = match data {
        Some(_) => records(&cfg, data)?,
        None => generate_dataset(&cfg.data, count, 0)?,
    };
    let v = cfg.vocab()?;
    let size = v.total_size();
    let half_bin = 0.5 / v.num_bins() as f64 + 1e-12;
    let mut violations = Vec::new();
    let mut sequences = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data.seed);
    for r in &recs {
        let ann = &r.annotation;
        let mut seq = codec.encode_detection(ann, &mut rng)?;
        sequences += 1;
        for (slot, &gt) in seq.slot_is_gt.iter().enumerate() {
            if !gt {
                seq.body[5 * slot + 4] = v.noise_class();
            }
        }
        let (boxes, _) = codec.decode_detection(&seq.body, one_hot_probs(&seq.body, size).view());
        let kept = ann.instances.len().min(codec.config.num_slots);
        if boxes.len() != kept {
            violations.push(format!("image {}: {} boxes decoded, {} encoded", r.id, boxes.len(), kept));
        }
        for inst in ann.instances.iter().take(kept) {
            let hit = boxes.iter().any(|b| {
                b.class_id == inst.class_id && b.bbox.coords().iter().zip(inst.bbox.coords()).all(|(x, y)| (x - y).abs() <= half_bin)
            });
            if !hit {
                violations.push(format!("image {}: box {:?} not recovered", r.id, inst.bbox));
            }
        }
        for inst in &ann.instances {
            if let Some(mask) = &inst.mask {
                let seq = codec.encode_segmentation(inst)?;
                sequences += 1;
                let side = codec.config.mask_side;
                let decoded = codec.decode_segmentation(one_hot_probs(&seq.body, size).view());
                if decoded.mask != mask.resample(side, side) {
                    violations.push(format!("image {}: mask round trip differs", r.id));
                }
            }
            if let Some(kps) = &inst.keypoints {
                let seq = codec.encode_keypoint(inst, &mut rng)?;
                sequences += 1;
                let (decoded, _) = codec.decode_keypoint(&seq.body, one_hot_probs(&seq.body, size).view());
                for (d, k) in decoded.iter().zip(kps) {
                    let vis_ok = (d.visibility > 0.5) == k.visible;
                    let pos_ok = !k.visible || ((d.x - k.x).abs() <= half_bin && (d.y - k.y).abs() <= half_bin);
                    if !vis_ok || !pos_ok {
                        violations.push(format!("image {}: keypoint {:?} decoded as {:?}", r.id, k, d));
                    }
                }
            }
        }
        for cap in &ann.captions {
            let seq = codec.encode_caption(cap, &mut rng)?;
            sequences += 1;
            let (words, _) = codec.decode_caption(&seq.body);
            let expect: Vec<String> = cap.iter().take(codec.config.caption_len).cloned().collect();
            if words != expect {
                violations.push(format!("image {}: caption {:?} decoded as {:?}", r.id, cap, words));
            }
        }
    }
    Ok(json!({"command": "tokenize", "images": recs.len(), "sequences": sequences, "violations": violations.len(), "examples": violations.iter().take(10).collect::<Vec<_>>()}))
}

fn cmd_gradcheck(common: &Common, coords: usize) -> Result<serde_json::Value> {
    let mut cfg = experiment(common)?;
    cfg.data.image_size = (64, 64);
    cfg.dataset.num_bins = 16;
    cfg.codec.num_slots = 3;
    cfg.codec.mask_side = 4;
    cfg.codec.caption_len = 8;
    cfg.model.embed_dim = 16;
    cfg.model.num_heads = 2;
    cfg.model.ffn_dim = 32;
    cfg.model.enc_layers = 1;
    cfg.model.dec_layers = 2;
    cfg.model.stem_channels = (4, 8);
    let codec = cfg.codec()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut model: Model<f64> = Model::new(cfg.model_config()?, &mut rng)?;
    for id in model.params().ids().collect::<Vec<_>>() {
        model.params_mut().get_mut(id).mapv_inplace(|x| x * 3.0);
    }
    let stickman = cfg.data.person_class().context("gradcheck needs the stickman class")?;
    let mut scene = None;
    for rec in generate_dataset(&cfg.data, 50, 0)? {
        if rec.annotation.instances.iter().any(|i| i.class_id == stickman) {
            scene = Some(rec);
            break;
        }
    }
    let mut rec = scene.context("no scene with a stickman among 50")?;
    rec.annotation.captions.truncate(1);
    let sample = Sample { image: rec.image, annotation: rec.annotation };
    let mut reports = Vec::new();
    let mut worst: f64 = 0.0;
    for objective in [Objective::Mad, Objective::Ar] {
        let tc = TrainConfig { objective, matching: false, ..cfg.train.clone() };
        let batch = build_batch(&[&sample], &codec, &tc, &mut rng)?;
        let r = check_gradients(&model, &batch, &codec, &tc, coords, &mut rng)?;
        worst = worst.max(r.max_rel_error);
        reports.push(json!({"objective": objective, "max_rel_error": r.max_rel_error, "worst_tensor": r.worst, "coordinates": r.coordinates}));
    }
    if worst >= 1e-4 {
        bail!("gradient check failed: max relative error {worst:e} ≥ 1e-4");
    }
    Ok(json!({"command": "gradcheck", "max_rel_error": worst, "checks": reports}))
}

fn run(cli: &Cli) -> Result<()> {
    let c = &cli.common;
    let value = match &cli.command {
        Command::GenData => cmd_gen_data(c)?,
        Command::Train { data, dump_plots_data } => cmd_train(c, data.as_deref(), *dump_plots_data)?,
        Command::Eval { checkpoint, data, split, latency } => cmd_eval(c, checkpoint, data.as_deref(), split, *latency)?,
        Command::Bench { checkpoint, task, k, trials } => {
            print!("{}", cmd_bench(c, checkpoint.as_deref(), task, k, *trials)?);
            return Ok(());
        }
        Command::Tokenize { data, count } => {
            let v = cmd_tokenize(c, data.as_deref(), *count)?;
            let bad = v["violations"].as_u64().unwrap_or(0);
            println!("{v}");
            if bad > 0 {
                bail!("{bad} round-trip violation(s)");
            }
            return Ok(());
        }
        Command::Gradcheck { coords } => cmd_gradcheck(c, *coords)?,
    };
    println!("{value}");
    Ok(())
}

fn error_record(kind: &str, message: &str) -> String {
    json!({"error": kind, "message": message}).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            eprintln!("{}", error_record("usage", &e.kind().to_string()));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<mad_core::Error>().map_or("runtime", |e| e.kind());
            eprintln!("{}", error_record(kind, &format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
