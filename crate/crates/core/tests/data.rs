use std::fs;

use tbscreen_core::bundle::{ModelBundle, Scorer, BUNDLE_VERSION};
use tbscreen_core::data::{load_cohort, load_cohort_dir, synth_cohort, Cohort, Dataset, SynthConfig, COHORT_HEADER};
use tbscreen_core::dsp::{wav, AudioSignal, DspConfig};
use tbscreen_core::evaluation::auroc;
use tbscreen_core::fusion::ModelConfig;
use tbscreen_core::gbdt::{fit_rows, GbdtParams};
use tbscreen_core::training::{train_fold, Exclusion, PipelineConfig, TrainConfig};
use tbscreen_core::CoreError;

fn header() -> String {
    COHORT_HEADER.join(",")
}

fn write_tone(path: &std::path::Path) {
    let samples = (0..8000).map(|i| 0.3 * (i as f32 * 0.05).sin()).collect();
    wav::write_wav(path, &AudioSignal::new(samples, 16_000).unwrap()).unwrap();
}

#[test]
fn header_only_csv_is_an_empty_cohort() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("c.csv");
    fs::write(&csv, format!("{}\n", header())).unwrap();
    let e = load_cohort(&csv, dir.path()).unwrap_err();
    assert!(matches!(e, CoreError::EmptyCohort));
    assert_eq!(e.to_string(), "empty cohort");
}

#[test]
fn three_valid_rows_load() {
    let dir = tempfile::tempdir().unwrap();
    for f in ["a.wav", "b.wav", "c.wav"] {
        write_tone(&dir.path().join(f));
    }
    let csv = dir.path().join("c.csv");
    fs::write(
        &csv,
        format!(
            "{}\nA,1,0,1,0,1,0,35,170,60,3,88,37.2,1,a.wav\nB,0,0,0,0,0,0,50,160,70,2,78,36.7,0,b.wav\nC,0,1,,0,0,1,41,,55,5,90,37.9,1,c.wav\n",
            header()
        ),
    )
    .unwrap();
    let c = load_cohort(&csv, dir.path()).unwrap();
    assert_eq!(c.len(), 3);
    c.validate().unwrap();
    assert_eq!(c.labels(), vec![1, 0, 1]);
    assert!(c.records[2].record.features[2].is_nan());
    assert!(c.records[2].record.features[7].is_nan());
    assert_eq!(c.records[0].record.features[11], 37.2);
}

#[test]
fn problems_are_itemized() {
    let dir = tempfile::tempdir().unwrap();
    write_tone(&dir.path().join("a.wav"));
    let csv = dir.path().join("c.csv");
    fs::write(
        &csv,
        format!(
            "{}\nA,1,0,1,0,1,0,35,170,60,3,88,37.2,1,a.wav\nA,0,0,0,0,0,0,50,160,70,2,78,36.7,0,a.wav\nB,0,0,0,0,0,0,x,160,70,2,78,36.7,2,missing.wav\n",
            header()
        ),
    )
    .unwrap();
    let CoreError::CohortValidation(problems) = load_cohort(&csv, dir.path()).unwrap_err() else {
        panic!("expected validation error");
    };
    let all = problems.join("\n");
    assert!(all.contains("row 3: duplicate patient_id A"), "{all}");
    assert!(all.contains("row 4") && all.contains("missing.wav"), "{all}");
    assert!(all.contains("age value \"x\""), "{all}");
    assert!(all.contains("label \"2\""), "{all}");
}

#[test]
fn wrong_header_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("c.csv");
    fs::write(&csv, "patient_id,label\nA,1\n").unwrap();
    assert!(matches!(load_cohort(&csv, dir.path()), Err(CoreError::CohortValidation(_))));
}

#[test]
fn synthetic_prevalence_matches_targets() {
    let c = synth_cohort(&SynthConfig {
        n: 10_000,
        seed: 5,
        clip_secs: 0.5,
        ..SynthConfig::default()
    })
    .unwrap();
    let rate = |pred: &dyn Fn(&tbscreen_core::data::CohortRecord) -> bool, cond: &dyn Fn(&tbscreen_core::data::CohortRecord) -> bool| {
        let sel: Vec<_> = c.records.iter().filter(|r| cond(r)).collect();
        sel.iter().filter(|r| pred(r)).count() as f64 / sel.len() as f64
    };
    let male = rate(&|r| r.label == 1, &|r| r.record.features[0] == 1.0);
    let female = rate(&|r| r.label == 1, &|r| r.record.features[0] == 0.0);
    assert!((male - 0.332).abs() <= 0.015, "male prevalence {male}");
    assert!((female - 0.197).abs() <= 0.015, "female prevalence {female}");
    // symptom bits: column, positive rate, negative rate
    for (col, pos, neg) in [(1, 0.432, 0.243), (5, 0.390, 0.173), (4, 0.400, 0.161), (2, 0.365, 0.119)] {
        let p = rate(&|r| r.record.features[col] == 1.0, &|r| r.label == 1);
        let n = rate(&|r| r.record.features[col] == 1.0, &|r| r.label == 0);
        assert!((p - pos).abs() <= 0.03, "col {col} positive rate {p}");
        assert!((n - neg).abs() <= 0.02, "col {col} negative rate {n}");
    }
}

#[test]
fn synthesis_is_deterministic() {
    let cfg = SynthConfig {
        n: 30,
        seed: 9,
        ..SynthConfig::default()
    };
    let a = synth_cohort(&cfg).unwrap();
    let b = synth_cohort(&cfg).unwrap();
    assert_eq!(a, b);
    let c = synth_cohort(&SynthConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a, c);
    assert!(synth_cohort(&SynthConfig {
        n: 5,
        ..SynthConfig::default()
    })
    .unwrap_err()
    .to_string()
    .contains("n >= 20"));
}

#[test]
fn cohort_directory_round_trip_is_bitwise() {
    let c = synth_cohort(&SynthConfig {
        n: 25,
        seed: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    c.write_dir(dir.path()).unwrap();
    let back = load_cohort_dir(dir.path()).unwrap();
    assert_eq!(back.len(), c.len());
    for (x, y) in back.records.iter().zip(&c.records) {
        assert_eq!(x.record, y.record);
        assert_eq!(x.label, y.label);
        assert_eq!(x.audio, y.audio);
    }
}

/// Per-channel means and standard deviations of the raw frame features.
fn audio_summary(data: &Dataset) -> Vec<Vec<f64>> {
    data.samples
        .iter()
        .map(|s| {
            let a = &s.audio;
            (0..a.n_channels)
                .flat_map(|c| {
                    let row = a.row(c);
                    let m = row.iter().sum::<f64>() / row.len() as f64;
                    let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / row.len() as f64;
                    [m, v.sqrt()]
                })
                .collect()
        })
        .collect()
}

fn audio_only_holdout_auroc(coupling: f64) -> f64 {
    let cohort = synth_cohort(&SynthConfig {
        n: 1200,
        seed: 21,
        audio_coupling: coupling,
        ..SynthConfig::default()
    })
    .unwrap();
    let data = Dataset::from_cohort(&cohort, &DspConfig::default()).unwrap();
    let x = audio_summary(&data);
    let y = data.labels();
    let params = GbdtParams {
        n_trees: 60,
        ..GbdtParams::default()
    };
    let rows: Vec<&[f64]> = x[..600].iter().map(Vec::as_slice).collect();
    let fit = fit_rows(&rows, &y[..600], &params).unwrap();
    let scores: Vec<f64> = x[600..].iter().map(|r| fit.ensemble.predict_proba(r).unwrap()).collect();
    auroc(&y[600..], &scores).unwrap()
}

#[test]
fn uncoupled_audio_carries_no_signal() {
    let null = audio_only_holdout_auroc(0.0);
    assert!((0.45..=0.55).contains(&null), "null AUROC {null}");
    let signal = audio_only_holdout_auroc(1.0);
    assert!(signal > 0.7, "coupled AUROC {signal}");
}

fn trained_bundle() -> (ModelBundle, Cohort) {
    let cohort = synth_cohort(&SynthConfig {
        n: 40,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let data = Dataset::from_cohort(&cohort, &DspConfig::default()).unwrap();
    let cfg = PipelineConfig {
        gbdt: GbdtParams {
            n_trees: 10,
            min_leaf: 3,
            ..GbdtParams::default()
        },
        model: ModelConfig {
            d: 16,
            heads: 2,
            d_ff: 32,
            conv_channels: [8, 8, 8],
            ..ModelConfig::default()
        },
        train: TrainConfig {
            epochs: 2,
            batch_size: 8,
            folds: 2,
            inner_folds: 2,
            ..TrainConfig::default()
        },
        ..PipelineConfig::default()
    };
    let train: Vec<usize> = (0..30).collect();
    let val: Vec<usize> = (30..40).collect();
    let r = train_fold(&data, &train, &val, &cfg, &Exclusion::none(), 0, 1).unwrap();
    (r.bundle, cohort)
}

#[test]
fn bundle_round_trip_preserves_predictions_bitwise() {
    let (bundle, cohort) = trained_bundle();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.tbb");
    bundle.save(&path).unwrap();
    let loaded = ModelBundle::load(&path).unwrap();
    assert_eq!(loaded, bundle);
    let (a, b) = (Scorer::new(bundle).unwrap(), Scorer::new(loaded).unwrap());
    for r in cohort.records.iter().take(10) {
        let x = a.score(&r.audio, &r.record).unwrap();
        let y = b.score(&r.audio, &r.record).unwrap();
        assert_eq!(x.prediction.probs.map(f64::to_bits), y.prediction.probs.map(f64::to_bits));
        assert_eq!(x, y);
    }
}

#[test]
fn damaged_bundles_are_rejected() {
    let (bundle, _) = trained_bundle();
    let bytes = bundle.to_bytes().unwrap();

    let truncated = &bytes[..bytes.len() - 7];
    let e = ModelBundle::from_bytes(truncated).unwrap_err();
    assert!(e.to_string().starts_with("corrupt bundle"), "{e}");

    let mut flipped = bytes.clone();
    let last = flipped.len() - 3;
    flipped[last] ^= 0x40;
    assert!(ModelBundle::from_bytes(&flipped).unwrap_err().to_string().starts_with("corrupt bundle"));

    let mut future = bytes.clone();
    future[8..12].copy_from_slice(&(BUNDLE_VERSION + 1).to_le_bytes());
    let e = ModelBundle::from_bytes(&future).unwrap_err();
    assert!(e.to_string().starts_with("unsupported version"), "{e}");

    assert!(ModelBundle::from_bytes(b"not a bundle at all").unwrap_err().to_string().starts_with("corrupt bundle"));
}

#[test]
fn silent_audio_is_flagged_but_scored() {
    let (bundle, cohort) = trained_bundle();
    let scorer = Scorer::new(bundle).unwrap();
    let silence = AudioSignal::new(vec![0.0; 16_000], 16_000).unwrap();
    let s = scorer.score(&silence, &cohort.records[0].record).unwrap();
    assert!(s.silent);
    assert!((s.prediction.probs[0] + s.prediction.probs[1] - 1.0).abs() < 1e-6);
}
