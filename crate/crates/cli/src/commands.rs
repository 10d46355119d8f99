use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use cxr_core::data::{ingest, sha256_hex, split, synthesize_dataset, ClassLabel, DatasetArchive};
use cxr_core::models::{encode_model, ModelSpec};
use cxr_core::predict::Predictor;
use cxr_core::train::{
    evaluate, majority_baseline, train_with_progress, ClassWeighting, OptimizerConfig, TrainConfig,
    REFERENCE_CLASS_COUNTS,
};
use cxr_core::verify::{self, Level};
use serde_json::{json, Map, Value};

use crate::args::*;
use crate::error::{Category, CliError};

type Result<T> = std::result::Result<T, CliError>;

/// Output sink honoring `--log` and `--quiet`. Machine-facing results go to
/// stdout; the configuration header goes to stderr.
struct Out {
    json: bool,
    quiet: bool,
}

impl Out {
    /// Prints the resolved configuration and input/output content hashes.
    fn header(&self, command: &str, fields: Value) {
        if self.quiet {
            return;
        }
        let mut obj = Map::new();
        obj.insert("cxr".into(), env!("CARGO_PKG_VERSION").into());
        obj.insert("command".into(), command.into());
        if let Value::Object(f) = fields {
            obj.extend(f);
        }
        if self.json {
            eprintln!("{}", Value::Object(obj));
        } else {
            let line: Vec<String> = obj.iter().map(|(k, v)| format!("{k}={}", plain(v))).collect();
            eprintln!("# {}", line.join(" "));
        }
    }

    /// Emits one result: `value` as a JSON line, or `text` in text mode.
    fn result(&self, value: Value, text: impl FnOnce() -> String) {
        if self.json {
            println!("{value}");
        } else {
            println!("{}", text());
        }
    }
}

fn plain(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => "-".into(),
        other => other.to_string(),
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::new(Category::Runtime, format!("cannot write {}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<String> {
    fs::write(path, bytes).map_err(|e| io_error(path, e))?;
    Ok(sha256_hex(&[bytes]))
}

fn read_archive(path: &Path, channels: Option<usize>) -> Result<DatasetArchive> {
    let archive = DatasetArchive::read(path)?;
    match channels {
        Some(c) if c != archive.channels() => Err(CliError::new(
            Category::Data,
            format!("{} holds {}-channel samples but --channels is {c}", path.display(), archive.channels()),
        )),
        _ => Ok(archive),
    }
}

fn load_predictor(path: &Path, channels: Option<usize>) -> Result<Predictor> {
    Ok(cxr_serve::load_predictor(path, channels)?)
}

pub fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let out = Out {
        json: g.log == LogFormat::Json,
        quiet: g.quiet,
    };
    match &cli.command {
        Command::Ingest(a) => run_ingest(g, &out, a),
        Command::Synth(a) => run_synth(g, &out, a),
        Command::Train(a) => run_train(g, &out, a),
        Command::Eval(a) => run_eval(g, &out, a),
        Command::Predict(a) => run_predict(g, &out, a),
        Command::Serve(a) => run_serve(g, &out, a),
        Command::Verify(a) => run_verify(&out, a),
    }
}

fn run_ingest(g: &Global, out: &Out, a: &IngestArgs) -> Result<()> {
    let channels = g.channels.unwrap_or(1);
    out.header(
        "ingest",
        json!({"root": a.root.display().to_string(), "out": a.out.display().to_string(), "channels": channels}),
    );
    let (archive, report) = ingest(&a.root, channels)?;
    for w in &report.warnings {
        tracing::warn!("{w}");
    }
    for f in &report.failures {
        tracing::warn!(path = %f.path, "skipped: {}", f.error);
    }
    let file_hash = write_file(&a.out, &archive.encode())?;
    let report_json = serde_json::to_value(&report).expect("report serializes");
    if let Some(path) = &a.report {
        let text = serde_json::to_string_pretty(&report_json).expect("report serializes");
        fs::write(path, text + "\n").map_err(|e| io_error(path, e))?;
    }
    let c = report.class_counts;
    out.result(json!({"report": report_json, "out": a.out.display().to_string(), "file_sha256": file_hash}), || {
        format!(
            "ingested {} images (Normal {}, Pneumonia {}, Tuberculosis {}), {} failed\ncontent sha256 {}\nwrote {} (file sha256 {file_hash})",
            report.total,
            c[0],
            c[1],
            c[2],
            report.failures.len(),
            report.content_sha256,
            a.out.display()
        )
    });
    Ok(())
}

fn run_synth(g: &Global, out: &Out, a: &SynthArgs) -> Result<()> {
    let channels = g.channels.unwrap_or(1);
    out.header(
        "synth",
        json!({"out": a.out.display().to_string(), "per_class": a.per_class, "seed": g.seed, "channels": channels}),
    );
    let archive = synthesize_dataset(a.per_class, g.seed, channels)?;
    let file_hash = write_file(&a.out, &archive.encode())?;
    out.result(
        json!({"out": a.out.display().to_string(), "samples": archive.len(), "content_sha256": archive.content_hash(), "file_sha256": file_hash}),
        || format!("wrote {} synthetic images to {} (file sha256 {file_hash})", archive.len(), a.out.display()),
    );
    Ok(())
}

fn optimizer(a: &TrainArgs) -> OptimizerConfig {
    match a.opt {
        Opt::Adam => OptimizerConfig::adam(a.lr),
        Opt::Sgd => OptimizerConfig::sgd(a.lr, a.momentum),
    }
}

fn run_train(g: &Global, out: &Out, a: &TrainArgs) -> Result<()> {
    let start = Instant::now();
    let archive = read_archive(&a.data, g.channels)?;
    let spec = ModelSpec::new(a.arch, archive.channels(), a.width_mult)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        val_fraction: a.val,
        optimizer: optimizer(a),
        seed: g.seed,
        class_weighting: match a.class_weights {
            Weighting::Off => ClassWeighting::Off,
            Weighting::InverseFrequency => ClassWeighting::InverseFrequency,
        },
    };
    cfg.validate()?;
    let plan = split(archive.labels(), a.val, g.seed, true)?;
    out.header(
        "train",
        json!({
            "data": a.data.display().to_string(),
            "data_sha256": archive.content_hash(),
            "arch": a.arch.name(),
            "width_mult": a.width_mult,
            "channels": archive.channels(),
            "epochs": a.epochs,
            "batch": a.batch,
            "val": a.val,
            "optimizer": serde_json::to_value(cfg.optimizer).expect("config serializes"),
            "class_weights": serde_json::to_value(cfg.class_weighting).expect("config serializes"),
            "seed": g.seed,
            "train_samples": plan.train.len(),
            "val_samples": plan.val.len(),
        }),
    );
    let mut net = spec.network(g.seed)?;
    let epochs = a.epochs;
    let history = train_with_progress(&mut net, &archive, &plan, &cfg, |r| {
        tracing::info!(
            "epoch {}/{epochs} train_loss={:.4} train_acc={:.4} val_loss={:.4} val_acc={:.4}",
            r.epoch,
            r.train_loss,
            r.train_acc,
            r.val_loss,
            r.val_acc
        );
    })?;
    let model_hash = write_file(&a.out, &encode_model(&spec, &net)?)?;
    if let Some(path) = &a.history {
        history.export(path)?;
    }
    let last = *history.last().expect("at least one epoch");
    let seconds = start.elapsed().as_secs_f64();
    out.result(
        json!({
            "model": a.out.display().to_string(),
            "model_sha256": model_hash,
            "history": a.history.as_ref().map(|p| p.display().to_string()),
            "final": last,
            "seconds": seconds,
        }),
        || {
            format!(
                "final epoch {}: train_acc {:.4} val_acc {:.4} (train_loss {:.4}, val_loss {:.4})\nwrote {} (sha256 {model_hash}) in {seconds:.1}s",
                last.epoch,
                last.train_acc,
                last.val_acc,
                last.train_loss,
                last.val_loss,
                a.out.display()
            )
        },
    );
    Ok(())
}

fn run_eval(g: &Global, out: &Out, a: &EvalArgs) -> Result<()> {
    let archive = read_archive(&a.data, g.channels)?;
    let predictor = load_predictor(&a.model, g.channels)?;
    if predictor.channels() != archive.channels() {
        return Err(CliError::new(
            Category::Model,
            format!(
                "model expects {}-channel input but {} holds {}-channel samples",
                predictor.channels(),
                a.data.display(),
                archive.channels()
            ),
        ));
    }
    let indices = match a.split {
        Split::All => (0..archive.len()).collect(),
        Split::Val => split(archive.labels(), a.val, g.seed, true)?.val,
    };
    out.header(
        "eval",
        json!({
            "data": a.data.display().to_string(),
            "data_sha256": archive.content_hash(),
            "model": a.model.display().to_string(),
            "model_sha256": predictor.model_hash(),
            "split": if a.split == Split::Val { "val" } else { "all" },
            "val": a.val,
            "seed": g.seed,
        }),
    );
    let eval = evaluate(predictor.network(), &archive, &indices)?;
    let mut counts = [0usize; 3];
    for &i in &indices {
        counts[archive.labels()[i].id()] += 1;
    }
    let (split_major, split_base) = majority_baseline(counts);
    let (ref_major, ref_base) = majority_baseline(REFERENCE_CLASS_COUNTS);
    let ref_total: usize = REFERENCE_CLASS_COUNTS.iter().sum();
    let ref_top = REFERENCE_CLASS_COUNTS[ref_major.id()];
    out.result(
        json!({
            "evaluation": eval,
            "majority_baseline": {"label": split_major.name(), "accuracy": split_base},
            "reference_majority_baseline": {
                "class_counts": REFERENCE_CLASS_COUNTS,
                "label": ref_major.name(),
                "accuracy": ref_base,
            },
        }),
        || {
            let mut s = format!(
                "samples {}  accuracy {:.4}  mean loss {:.4}\nconfusion (rows true, columns predicted):\n",
                eval.samples, eval.accuracy, eval.mean_loss
            );
            for (id, row) in eval.confusion.iter().enumerate() {
                let name = ClassLabel::from_id(id).expect("id < 3").name();
                s += &format!("  {name:<13}{:>7}{:>7}{:>7}\n", row[0], row[1], row[2]);
            }
            s += &format!("majority baseline on this split: {} {:.4}\n", split_major.name(), split_base);
            s += &format!(
                "reference majority baseline (class counts {}/{}/{}): {} {ref_top}/{ref_total} = {ref_base:.3}",
                REFERENCE_CLASS_COUNTS[0],
                REFERENCE_CLASS_COUNTS[1],
                REFERENCE_CLASS_COUNTS[2],
                ref_major.name()
            );
            s
        },
    );
    Ok(())
}

fn run_predict(g: &Global, out: &Out, a: &PredictArgs) -> Result<()> {
    let predictor = load_predictor(&a.model, g.channels)?;
    let bytes = fs::read(&a.image).map_err(|e| {
        CliError::new(Category::Data, format!("cannot read {}: {e}", a.image.display()))
    })?;
    out.header(
        "predict",
        json!({
            "model": a.model.display().to_string(),
            "model_sha256": predictor.model_hash(),
            "image": a.image.display().to_string(),
            "image_sha256": sha256_hex(&[&bytes]),
        }),
    );
    let report = predictor.predict_bytes(&bytes)?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn run_serve(g: &Global, out: &Out, a: &ServeArgs) -> Result<()> {
    let predictor = Arc::new(load_predictor(&a.model, g.channels)?);
    out.header(
        "serve",
        json!({
            "model": a.model.display().to_string(),
            "model_sha256": predictor.model_hash(),
            "bind": a.bind.to_string(),
            "max_body": a.max_body,
            "ui": a.ui.as_ref().map(|p| p.display().to_string()),
        }),
    );
    let opts = cxr_serve::ServeOptions {
        max_body_bytes: a.max_body,
        ui_dir: a.ui.clone(),
    };
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::new(Category::Runtime, e))?;
    runtime.block_on(async {
        let (listener, addr) = cxr_serve::bind(&a.bind.to_string()).await?;
        // Scripts read this line to find the port when binding to port 0.
        eprintln!("listening on http://{addr}");
        cxr_serve::serve(listener, cxr_serve::app(predictor, &opts)).await?;
        Ok(())
    })
}

fn run_verify(out: &Out, a: &VerifyArgs) -> Result<()> {
    let level = match a.level {
        VerifyLevel::Fast => Level::Fast,
        VerifyLevel::Full => Level::Full,
    };
    out.header("verify", json!({"level": serde_json::to_value(level).expect("level serializes")}));
    let report = verify::run(level);
    out.result(serde_json::to_value(&report).expect("report serializes"), || {
        let mut s = String::new();
        for c in &report.checks {
            let verdict = if c.passed { "ok  " } else { "FAIL" };
            s += &format!("{verdict} {:<32} {:.3e} (tolerance {:.0e})\n", c.name, c.value, c.tolerance);
        }
        s += &format!("{} checks in {:.1}s", report.checks.len(), report.seconds);
        s
    });
    if report.passed() {
        Ok(())
    } else {
        let failed = report.checks.iter().filter(|c| !c.passed).count();
        Err(CliError::new(Category::Runtime, format!("{failed} verification checks failed")))
    }
}
