use std::fs::{self, File};
use std::io::BufWriter;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

use tbscreen_core::bundle::{ModelBundle, Scorer};
use tbscreen_core::data::{load_cohort_dir, synth_cohort, Cohort, Dataset, SynthConfig};
use tbscreen_core::dsp::{wav, DspConfig};
use tbscreen_core::evaluation::{
    ablate_features, ablation_table, attribution_heatmap, confusion_metrics, registered_features, welch_t_test,
    write_ablation_csv, AblationRow,
};
use tbscreen_core::fusion::Modality;
use tbscreen_core::stats::{
    acoustic_profiles, euclidean_distances, logistic_fit, mantel_test, tsne, wald_test, TsneConfig,
};
use tbscreen_core::tabular::{TabularRecord, FEATURE_KEYS};
use tbscreen_core::training::{cross_validate, Exclusion, LossKind, PipelineConfig};
use tbscreen_core::CoreError;

use crate::args::*;
use crate::manifest::Recorder;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

/// A config document, or the resolved config inside a run manifest.
fn config_section(v: Value) -> Value {
    match v {
        Value::Object(ref m) if m.contains_key("subcommand") && m.contains_key("config") => m["config"].clone(),
        other => other,
    }
}

fn load_cohort(dir: &Path) -> Result<Cohort> {
    load_cohort_dir(dir).with_context(|| format!("loading cohort {}", dir.display()))
}

pub fn resolve_pipeline(args: &PipelineArgs) -> Result<PipelineConfig> {
    let mut cfg: PipelineConfig = match &args.config {
        Some(p) => serde_json::from_value(config_section(read_json(p)?))
            .with_context(|| format!("config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(l) = args.lambda {
        cfg.trbl.lambda = l;
    }
    if let Some(k) = args.loss {
        cfg.trbl.kind = match k {
            LossArg::Trbl => LossKind::Trbl,
            LossArg::Bce => LossKind::Bce,
        };
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(f) = args.folds {
        cfg.train.folds = f;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(m) = args.modality {
        cfg.model.modality = match m {
            ModalityArg::Fused => Modality::Fused,
            ModalityArg::Tabular => Modality::TabularOnly,
            ModalityArg::Audio => Modality::AudioOnly,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &args.config {
        Some(p) => serde_json::from_value(config_section(read_json(p)?))?,
        None => SynthConfig::default(),
    };
    cfg.n = args.n;
    cfg.seed = args.seed;
    if let Some(v) = args.clip_secs {
        cfg.clip_secs = v;
    }
    if let Some(v) = args.tabular_coupling {
        cfg.tabular_coupling = v;
    }
    if let Some(v) = args.audio_coupling {
        cfg.audio_coupling = v;
    }
    if let Some(v) = &args.informative {
        cfg.informative = Some(v.clone());
    }
    let mut rec = Recorder::new("synth", &cfg, cfg.seed)?;
    let cohort = synth_cohort(&cfg)?;
    rec.lap("generate");
    create_dir(&args.out)?;
    cohort.write_dir(&args.out)?;
    rec.lap("write");
    rec.output("cohort.csv");
    rec.output(format!("audio/ ({} files)", cohort.len()));
    rec.write(&args.out)?;
    let positives = cohort.labels().iter().filter(|&&l| l == 1).count();
    println!("wrote {} patients ({positives} positive) to {}", cohort.len(), args.out.display());
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let cfg = resolve_pipeline(&args.pipeline)?;
    let mut rec = Recorder::new("train", &cfg, cfg.train.seed)?;
    rec.input("cohort", &args.cohort);
    let cohort = load_cohort(&args.cohort)?;
    let data = Dataset::from_cohort(&cohort, &cfg.dsp)?;
    rec.lap("features");
    let run = cross_validate(&data, &cfg, &Exclusion::none())?;
    rec.lap("cross_validation");

    create_dir(&args.out)?;
    let mut preds = BufWriter::new(File::create(args.out.join("predictions.csv"))?);
    writeln!(preds, "fold,patient_id,label,probability")?;
    let mut folds = Vec::new();
    for f in &run.folds {
        let dir = args.out.join(format!("fold{}", f.fold));
        create_dir(&dir)?;
        f.bundle.save(&dir.join("model.tbb"))?;
        f.history.write_csv(BufWriter::new(File::create(dir.join("history.csv"))?))?;
        rec.output(format!("fold{}/model.tbb", f.fold));
        rec.output(format!("fold{}/history.csv", f.fold));
        for ((id, y), p) in f.val_ids.iter().zip(&f.val_labels).zip(&f.val_probs) {
            writeln!(preds, "{},{id},{y},{p}", f.fold)?;
        }
        folds.push(json!({ "fold": f.fold, "report": f.report, "n_val": f.val_ids.len() }));
        match f.report {
            Some(r) => println!("fold {}: AUROC {:.4}  F1 {:.4}  TPR {:.4}  TNR {:.4}", f.fold, r.auroc, r.f1, r.tpr, r.tnr),
            None => println!("fold {}: validation split holds one class, no metrics", f.fold),
        }
    }
    preds.flush()?;
    let overall = AblationRow::from_reports(None, &run.reports());
    println!("mean AUROC {:.4} ± {:.4}", overall.auroc.mean, overall.auroc.sd);
    write_json(&args.out.join("summary.json"), &json!({ "folds": folds, "mean_sd": overall }))?;
    rec.output("predictions.csv");
    rec.output("summary.json");
    rec.lap("write");
    rec.write(&args.out)
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let mut rec = Recorder::new("eval", json!({ "threshold": args.threshold, "heatmap": args.heatmap }), 0)?;
    rec.input("bundle", &args.bundle);
    rec.input("cohort", &args.cohort);
    let bundle = ModelBundle::load(&args.bundle)?;
    let cohort = load_cohort(&args.cohort)?;
    let data = Dataset::from_cohort(&cohort, &bundle.dsp)?;
    rec.lap("features");
    let samples: Vec<_> = data.samples.iter().collect();
    let preds = bundle.predict_samples(&samples)?;
    let probs: Vec<f64> = preds.iter().map(|p| p.risk()).collect();
    let report = confusion_metrics(&data.labels(), &probs, args.threshold)?;
    rec.lap("predict");
    create_dir(&args.out)?;
    write_json(&args.out.join("metrics.json"), &report)?;
    let mut w = BufWriter::new(File::create(args.out.join("predictions.csv"))?);
    writeln!(w, "patient_id,label,probability")?;
    for (s, p) in data.samples.iter().zip(&probs) {
        writeln!(w, "{},{},{p}", s.record.patient_id, s.label)?;
    }
    w.flush()?;
    rec.output("metrics.json");
    rec.output("predictions.csv");
    if let Some(n) = args.heatmap {
        let batch: Vec<_> = samples.iter().copied().take(n.max(1)).collect();
        let map = attribution_heatmap(&bundle, &batch)?;
        map.write_csv(BufWriter::new(File::create(args.out.join("heatmap.csv"))?))?;
        map.write_png(&args.out.join("heatmap.png"))?;
        rec.output("heatmap.csv");
        rec.output("heatmap.png");
        rec.lap("heatmap");
    }
    println!(
        "accuracy {:.4}  TPR {:.4}  TNR {:.4}  F1 {:.4}  AUROC {:.4}",
        report.accuracy, report.tpr, report.tnr, report.f1, report.auroc
    );
    rec.write(&args.out)
}

/// Builds a record from a JSON object keyed by column name. Absent keys are
/// errors; `null` marks a missing value.
pub fn parse_tabular(v: &Value) -> Result<TabularRecord> {
    let Value::Object(m) = v else {
        bail!(CoreError::InvalidConfig("tabular input must be a JSON object".into()));
    };
    let missing: Vec<String> = FEATURE_KEYS
        .iter()
        .filter(|k| !m.contains_key(**k))
        .map(|k| k.to_string())
        .collect();
    if !missing.is_empty() {
        bail!(CoreError::MissingFields(missing));
    }
    let features = FEATURE_KEYS
        .iter()
        .map(|k| match &m[*k] {
            Value::Null => Ok(f64::NAN),
            Value::Number(n) => Ok(n.as_f64().expect("finite JSON number")),
            other => Err(CoreError::InvalidConfig(format!("{k} must be a number or null, got {other}"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let id = m.get("patient_id").and_then(Value::as_str).unwrap_or("input");
    Ok(TabularRecord::new(id, features))
}

pub fn score(args: &ScoreArgs) -> Result<()> {
    let mut rec = Recorder::new("score", json!({}), 0)?;
    rec.input("bundle", &args.bundle);
    rec.input("wav", &args.wav);
    rec.input("tabular_json", &args.tabular_json);
    let record = parse_tabular(&read_json(&args.tabular_json)?)?;
    let signal = wav::read_wav(&args.wav).with_context(|| format!("reading {}", args.wav.display()))?;
    let scorer = Scorer::new(ModelBundle::load(&args.bundle)?)?;
    rec.lap("load");
    let start = Instant::now();
    let scored = scorer.score(&signal, &record)?;
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    rec.lap("score");
    let mut out = json!({
        "probability": scored.prediction.risk(),
        "logits": scored.prediction.logits,
        "latency_ms": latency_ms,
        "p_gbm": scored.p_gbm,
    });
    if scored.silent {
        eprintln!("warning: silent input; the score rests on the tabular record");
        out["warning"] = json!("silent input");
    }
    println!("{}", serde_json::to_string(&out)?);
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write_json(&dir.join("score.json"), &out)?;
        rec.output("score.json");
        rec.write(dir)?;
    }
    Ok(())
}

pub fn ablate(args: &AblateArgs) -> Result<()> {
    let cfg = resolve_pipeline(&args.pipeline)?;
    let features: Vec<String> = match &args.features {
        Some(f) => f.clone(),
        None => registered_features().into_iter().map(String::from).collect(),
    };
    let mut rec = Recorder::new("ablate", json!({ "pipeline": &cfg, "features": &features }), cfg.train.seed)?;
    rec.input("cohort", &args.cohort);
    for f in &features {
        Exclusion::feature(f)?;
    }
    let cohort = load_cohort(&args.cohort)?;
    let data = Dataset::from_cohort(&cohort, &cfg.dsp)?;
    rec.lap("features");
    let names: Vec<&str> = features.iter().map(String::as_str).collect();
    let rows = ablate_features(&data, &cfg, &names)?;
    rec.lap("ablation");
    create_dir(&args.out)?;
    write_ablation_csv(&rows, BufWriter::new(File::create(args.out.join("ablation.csv"))?))?;
    let table = ablation_table(&rows);
    fs::write(args.out.join("ablation.txt"), &table)?;
    print!("{table}");
    rec.output("ablation.csv");
    rec.output("ablation.txt");
    rec.write(&args.out)
}

#[derive(Serialize)]
struct TestRecord {
    test: String,
    statistic: Option<f64>,
    p: Option<f64>,
    config: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

pub fn stats(args: &StatsArgs) -> Result<()> {
    let tsne_cfg = TsneConfig {
        perplexity: args.perplexity,
        n_iter: args.n_iter,
        seed: args.seed,
        ..TsneConfig::default()
    };
    let mut rec = Recorder::new("stats", json!({ "tsne": &tsne_cfg, "mantel_perms": args.perms }), args.seed)?;
    rec.input("cohort", &args.cohort);
    let cohort = load_cohort(&args.cohort)?;
    let data = Dataset::from_cohort(&cohort, &DspConfig::default())?;
    let profiles = acoustic_profiles(&data);
    rec.lap("features");
    let emb = tsne(&profiles, &tsne_cfg)?;
    rec.lap("tsne");
    create_dir(&args.out)?;
    let mut w = BufWriter::new(File::create(args.out.join("tsne.csv"))?);
    writeln!(w, "id,x,y,label")?;
    for (s, p) in data.samples.iter().zip(&emb.points) {
        writeln!(w, "{},{},{},{}", s.record.patient_id, p[0], p[1], s.label)?;
    }
    w.flush()?;

    let layout: Vec<Vec<f64>> = emb.points.iter().map(|p| p.to_vec()).collect();
    let mantel = mantel_test(&euclidean_distances(&profiles), &euclidean_distances(&layout), args.perms, args.seed)?;
    write_json(
        &args.out.join("mantel.json"),
        &TestRecord {
            test: "mantel: acoustic-profile vs embedding distances".into(),
            statistic: Some(mantel.r),
            p: Some(mantel.p),
            config: json!({ "n_perms": mantel.n_perms, "seed": args.seed }),
            error: None,
        },
    )?;
    rec.lap("mantel");

    let labels = data.labels();
    let logistic: Vec<TestRecord> = match logistic_fit(&layout, &labels) {
        Ok(fit) => ["intercept", "x", "y"]
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let w = wald_test(&fit.coefficients, &fit.covariance, i);
                TestRecord {
                    test: format!("wald: {name}"),
                    statistic: w.as_ref().ok().map(|w| w.z),
                    p: w.as_ref().ok().map(|w| w.p),
                    config: json!({ "coefficient": fit.coefficients[i], "se": fit.covariance[i][i].sqrt() }),
                    error: w.err().map(|e| e.to_string()),
                }
            })
            .collect(),
        Err(e) => vec![TestRecord {
            test: "wald".into(),
            statistic: None,
            p: None,
            config: json!({}),
            error: Some(e.to_string()),
        }],
    };
    write_json(&args.out.join("logistic.json"), &logistic)?;

    let welch: Vec<TestRecord> = (0..2)
        .map(|axis| {
            let by = |c: u8| -> Vec<f64> {
                emb.points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p[axis]).collect()
            };
            let t = welch_t_test(&by(1), &by(0));
            TestRecord {
                test: format!("welch: embedding axis {}", ["x", "y"][axis]),
                statistic: t.as_ref().ok().map(|t| t.t),
                p: t.as_ref().ok().map(|t| t.p),
                config: json!({ "df": t.as_ref().ok().map(|t| t.df) }),
                error: t.err().map(|e| e.to_string()),
            }
        })
        .collect();
    write_json(&args.out.join("welch.json"), &welch)?;
    rec.lap("tests");
    for f in ["tsne.csv", "mantel.json", "logistic.json", "welch.json"] {
        rec.output(f);
    }
    println!(
        "t-SNE KL {:.4} -> {:.4}; Mantel r {:.4}, p {:.5}",
        emb.initial_kl, emb.final_kl, mantel.r, mantel.p
    );
    rec.write(&args.out)
}

pub fn bench(args: &BenchArgs) -> Result<()> {
    if args.runs < 2 {
        bail!(CoreError::InvalidConfig("bench needs at least 2 runs".into()));
    }
    let mut rec = Recorder::new("bench", json!({ "runs": args.runs }), 0)?;
    rec.input("bundle", &args.bundle);
    rec.input("cohort", &args.cohort);
    let scorer = Scorer::new(ModelBundle::load(&args.bundle)?)?;
    let cohort = load_cohort(&args.cohort)?;
    let records = &cohort.records;
    // one untimed call settles allocations
    scorer.score(&records[0].audio, &records[0].record)?;
    let times: Vec<f64> = (0..args.runs)
        .map(|i| {
            let r = &records[i % records.len()];
            let start = Instant::now();
            scorer.score(&r.audio, &r.record)?;
            Ok(start.elapsed().as_secs_f64() * 1e3)
        })
        .collect::<Result<_>>()?;
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let std = (times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    let out = json!({
        "runs": times.len(),
        "mean_ms": mean,
        "std_ms": std,
        "min_ms": times.iter().cloned().fold(f64::INFINITY, f64::min),
        "max_ms": times.iter().cloned().fold(0.0, f64::max),
    });
    rec.lap("bench");
    create_dir(&args.out)?;
    write_json(&args.out.join("bench.json"), &out)?;
    rec.output("bench.json");
    println!("{} runs: mean {mean:.3} ms, std {std:.3} ms", times.len());
    rec.write(&args.out)
}
