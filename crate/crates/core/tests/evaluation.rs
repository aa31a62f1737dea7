use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tbscreen_core::bundle::ModelBundle;
use tbscreen_core::data::{synth_cohort, Dataset, SynthConfig};
use tbscreen_core::dsp::DspConfig;
use tbscreen_core::evaluation::{
    ablate_features, ablation_table, attribution_heatmap, auroc, confusion_metrics, registered_features,
    welch_t_test, write_ablation_csv, AblationRow, MeanSd, MetricReport,
};
use tbscreen_core::fusion::ModelConfig;
use tbscreen_core::gbdt::GbdtParams;
use tbscreen_core::training::{train_fold, Exclusion, PipelineConfig, TrainConfig};
use tbscreen_core::CoreError;

/// P(score+ > score-) + P(tie)/2 by enumerating every pair.
fn pairwise_auroc(labels: &[u8], scores: &[f64]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &yi) in labels.iter().enumerate() {
        for (j, &yj) in labels.iter().enumerate() {
            if yi == 1 && yj == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<f64>) {
    let n = rng.gen_range(2..=200);
    let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
    labels[0] = 0;
    labels[1] = 1;
    // a coarse grid forces plenty of ties
    let levels = rng.gen_range(2..20);
    let scores = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
    (labels, scores)
}

#[test]
fn auroc_matches_pairwise_enumeration_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100 {
        let (labels, scores) = random_instance(&mut rng);
        assert_eq!(auroc(&labels, &scores).unwrap(), pairwise_auroc(&labels, &scores));
    }
}

#[test]
fn auroc_examples() {
    assert_eq!(auroc(&[1, 1, 0, 0], &[0.8, 0.4, 0.6, 0.2]).unwrap(), 0.75);
    assert_eq!(auroc(&[0, 1, 0, 1], &[0.1, 0.7, 0.3, 0.9]).unwrap(), 1.0);
    assert_eq!(auroc(&[0, 1, 0, 1], &[0.4; 4]).unwrap(), 0.5);
}

fn labelled_scores() -> impl Strategy<Value = (Vec<u8>, Vec<f64>)> {
    (2usize..120).prop_flat_map(|n| {
        (
            proptest::collection::vec(0u8..2, n).prop_map(|mut l| {
                l[0] = 0;
                l[1] = 1;
                l
            }),
            proptest::collection::vec(-5.0f64..5.0, n),
        )
    })
}

proptest! {
    #[test]
    fn auroc_is_invariant_under_monotone_transforms((labels, scores) in labelled_scores()) {
        let base = auroc(&labels, &scores).unwrap();
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        let affine: Vec<f64> = scores.iter().map(|s| 3.0 * s - 7.0).collect();
        let cube: Vec<f64> = scores.iter().map(|s| s * s * s).collect();
        prop_assert_eq!(auroc(&labels, &exp).unwrap(), base);
        prop_assert_eq!(auroc(&labels, &affine).unwrap(), base);
        prop_assert_eq!(auroc(&labels, &cube).unwrap(), base);
    }

    #[test]
    fn metric_report_is_consistent_with_counts((labels, raw) in labelled_scores(), threshold in 0.05f64..0.95) {
        let probs: Vec<f64> = raw.iter().map(|s| 1.0 / (1.0 + (-s).exp())).collect();
        let r: MetricReport = match confusion_metrics(&labels, &probs, threshold) {
            Ok(r) => r,
            Err(_) => return Ok(()),
        };
        let c = r.counts;
        prop_assert_eq!(c.n(), labels.len());
        prop_assert_eq!(r.accuracy, (c.tp + c.tn) as f64 / c.n() as f64);
        prop_assert_eq!(r.tpr, c.tp as f64 / (c.tp + c.fn_) as f64);
        prop_assert_eq!(r.tnr, c.tn as f64 / (c.tn + c.fp) as f64);
        let den = 2 * c.tp + c.fp + c.fn_;
        prop_assert_eq!(r.f1, if den == 0 { 0.0 } else { 2.0 * c.tp as f64 / den as f64 });
        for v in [r.accuracy, r.tpr, r.tnr, r.f1, r.auroc] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn welch_p_is_a_probability_and_symmetric(
        a in proptest::collection::vec(-10.0f64..10.0, 2..20),
        b in proptest::collection::vec(-10.0f64..10.0, 2..20),
    ) {
        if let Ok(r) = welch_t_test(&a, &b) {
            prop_assert!((0.0..=1.0).contains(&r.p));
            let s = welch_t_test(&b, &a).unwrap();
            prop_assert!((r.p - s.p).abs() < 1e-12);
            prop_assert!((r.t + s.t).abs() < 1e-12);
        }
        if let Ok(r) = welch_t_test(&a, &a) {
            prop_assert_eq!(r.p, 1.0);
        }
    }
}

/// Two-sided tail of Student's t with 8 degrees of freedom by Simpson
/// integration of the density.
fn t8_two_sided(t: f64) -> f64 {
    // Γ(4.5) / (sqrt(8π) Γ(4))
    let norm = 11.631_728_396_567_45 / ((8.0 * std::f64::consts::PI).sqrt() * 6.0);
    let density = |x: f64| norm * (1.0 + x * x / 8.0).powf(-4.5);
    // substitute x = t / u on (0, 1] to map the tail onto a finite interval
    let f = |u: f64| if u == 0.0 { 0.0 } else { density(t / u) * t / (u * u) };
    let n = 20_000;
    let h = 1.0 / n as f64;
    let mut s = f(0.0) + f(1.0);
    for k in 1..n {
        s += f(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    2.0 * s * h / 3.0
}

#[test]
fn welch_hand_example_matches_independent_integration() {
    let r = welch_t_test(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    // means differ by 1, each variance 2.5 over 5 values: se = sqrt(0.5 + 0.5)
    assert!((r.t + 1.0).abs() < 1e-12);
    assert!((r.df - 8.0).abs() < 1e-12);
    let oracle = t8_two_sided(1.0);
    assert!((r.p - oracle).abs() < 1e-8, "{} vs {oracle}", r.p);
    assert!((r.p - 0.347).abs() < 1e-3);
}

#[test]
fn mean_sd_hand_values() {
    let m = MeanSd::of(&[0.8, 0.9, 1.0]);
    assert!((m.mean - 0.9).abs() < 1e-12);
    assert!((m.sd - 0.1).abs() < 1e-12);
    assert_eq!(MeanSd::of(&[0.7]).sd, 0.0);
}

#[test]
fn registry_lists_tabular_columns_then_channel_groups() {
    let names = registered_features();
    assert_eq!(names.len(), 19);
    assert_eq!(names[0], "Gender");
    assert_eq!(names[10], "Heart Rate");
    assert_eq!(&names[12..], ["ZCR", "Centroid", "F0", "Energy", "Chroma Vector", "MFCCs", "Mel-Spectrogram"]);
    for n in names {
        Exclusion::feature(n).unwrap();
    }
}

fn tiny_pipeline(epochs: usize, folds: usize) -> PipelineConfig {
    PipelineConfig {
        gbdt: GbdtParams {
            n_trees: 20,
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
            epochs,
            batch_size: 16,
            lr_init: 3e-3,
            folds,
            inner_folds: 3,
            ..TrainConfig::default()
        },
        ..PipelineConfig::default()
    }
}

fn dataset(cfg: SynthConfig) -> Dataset {
    Dataset::from_cohort(&synth_cohort(&cfg).unwrap(), &DspConfig::default()).unwrap()
}

#[test]
fn ablation_rows_have_the_table_shape() {
    let data = dataset(SynthConfig {
        n: 60,
        seed: 4,
        clip_secs: 0.5,
        ..SynthConfig::default()
    });
    let cfg = tiny_pipeline(2, 3);
    let e = ablate_features(&data, &cfg, &["Smoke", "no such feature"]).unwrap_err();
    assert!(matches!(e, CoreError::UnknownFeature(ref n) if n == "no such feature"), "{e}");

    let rows = ablate_features(&data, &cfg, &["Smoke", "ZCR"]).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].excluded_feature, None);
    assert_eq!(rows[0].p_value, None);
    assert_eq!(rows[1].excluded_feature.as_deref(), Some("Smoke"));
    for r in &rows[1..] {
        let p = r.p_value.expect("p-value for ablated rows");
        assert!((0.0..=1.0).contains(&p));
    }
    for r in &rows {
        assert_eq!(r.fold_aurocs.len(), 3);
        for m in [r.accuracy, r.tpr, r.tnr, r.f1, r.auroc] {
            assert!(m.sd >= 0.0 && (0.0..=1.0).contains(&m.mean));
        }
    }
    let mut csv = Vec::new();
    write_ablation_csv(&rows, &mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().nth(1).unwrap().starts_with("baseline,"));
    assert!(csv.lines().nth(1).unwrap().ends_with(','));
    let table = ablation_table(&rows);
    assert!(table.contains("(baseline)") && table.contains("ZCR") && table.contains(" ± "));
}

#[test]
fn ablation_rows_from_fixed_reports() {
    let report = |auroc: f64| MetricReport {
        accuracy: 0.5,
        tpr: 0.5,
        tnr: 0.5,
        f1: 0.5,
        auroc,
        threshold: 0.5,
        counts: Default::default(),
    };
    let row = AblationRow::from_reports(None, &[report(0.7), report(0.8), report(0.9)]);
    assert!((row.auroc.mean - 0.8).abs() < 1e-12);
    assert!((row.auroc.sd - 0.1).abs() < 1e-12);
    assert_eq!(row.accuracy.sd, 0.0);
    assert_eq!(row.label(), "(baseline)");
}

fn trained(data: &Dataset, epochs: usize, exclusion: &Exclusion) -> ModelBundle {
    let n = data.len();
    let train: Vec<usize> = (0..n * 3 / 4).collect();
    let val: Vec<usize> = (n * 3 / 4..n).collect();
    train_fold(data, &train, &val, &tiny_pipeline(epochs, 3), exclusion, 0, 5)
        .unwrap()
        .bundle
}

#[test]
fn zero_output_model_gives_a_flagged_uniform_map() {
    let data = dataset(SynthConfig {
        n: 40,
        seed: 8,
        clip_secs: 0.5,
        ..SynthConfig::default()
    });
    let mut bundle = trained(&data, 1, &Exclusion::none());
    for name in ["head.fc.w", "head.fc.b"] {
        bundle.model.params.by_name_mut(name).unwrap().data_mut().fill(0.0);
    }
    let batch: Vec<_> = data.samples.iter().take(6).collect();
    let map = attribution_heatmap(&bundle, &batch).unwrap();
    assert!(map.uniform.iter().all(|&u| u));
    assert!(map.values.iter().flatten().all(|&v| v == 1.0));
}

#[test]
fn heatmap_rows_follow_the_registry_and_skip_withheld_features() {
    let data = dataset(SynthConfig {
        n: 40,
        seed: 9,
        clip_secs: 0.5,
        ..SynthConfig::default()
    });
    let exclusion = Exclusion {
        columns: vec![3],
        groups: vec![tbscreen_core::dsp::ChannelGroup::F0],
    };
    let bundle = trained(&data, 1, &exclusion);
    let batch: Vec<_> = data.samples.iter().take(5).collect();
    let map = attribution_heatmap(&bundle, &batch).unwrap();
    let expected: Vec<&str> = registered_features()
        .into_iter()
        .filter(|n| *n != "Smoke" && *n != "F0")
        .collect();
    assert_eq!(map.features, expected);
    assert_eq!(map.samples.len(), 5);
    for s in 0..5 {
        let col: Vec<f64> = map.values.iter().map(|r| r[s]).collect();
        assert!(col.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(col.iter().cloned().fold(0.0, f64::max), 1.0);
    }

    let dir = tempfile::tempdir().unwrap();
    let png_path = dir.path().join("h.png");
    map.write_png(&png_path).unwrap();
    let decoder = png::Decoder::new(std::fs::File::open(&png_path).unwrap());
    let reader = decoder.read_info().unwrap();
    assert_eq!((reader.info().width, reader.info().height), (5 * 12, 17 * 12));
    let mut csv = Vec::new();
    map.write_csv(&mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    assert_eq!(csv.lines().count(), 18);
    assert!(csv.lines().nth(1).unwrap().starts_with("Gender,"));
}

#[test]
fn heart_rate_only_cohort_attributes_most_to_heart_rate() {
    let data = dataset(SynthConfig {
        n: 400,
        seed: 12,
        clip_secs: 0.5,
        audio_coupling: 0.0,
        informative: Some(vec!["heart_rate".into()]),
        ..SynthConfig::default()
    });
    let bundle = trained(&data, 15, &Exclusion::none());
    let batch: Vec<_> = data.samples.iter().skip(300).collect();
    let map = attribution_heatmap(&bundle, &batch).unwrap();
    let means = map.feature_means();
    let hr = map.features.iter().position(|f| f == "Heart Rate").unwrap();
    let top = (0..means.len()).max_by(|&a, &b| means[a].total_cmp(&means[b])).unwrap();
    assert_eq!(map.features[top], "Heart Rate", "means {:?}", map.features.iter().zip(&means).collect::<Vec<_>>());
    assert!(means[hr] > 0.0);
}
