use segkit::config::RunConfig;
use segkit::data::{synth_blobs, SynthParams};
use segkit::loss_metrics::JaccardVariant;
use segkit::nets::Style;
use segkit::postprocess::ProbabilityMap;
use segkit::report::{area_histogram, count_histogram, ModelReport, Report, REPORT_COLUMNS};
use segkit::trainer::{evaluate_maps, EvalConfig};

#[test]
fn default_config_round_trips_through_toml() {
    let cfg = RunConfig::default();
    let text = cfg.to_toml().unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
}

#[test]
fn partial_config_keeps_other_defaults() {
    let cfg = RunConfig::from_toml(
        "crop = 64\njaccard = \"per_pixel\"\n[network]\nstyle = \"vgg_concat_11\"\nbase_width = 4\ndepth = 3\n[eval]\nmin_area = 50\n",
    )
    .unwrap();
    assert_eq!(cfg.crop, 64);
    assert_eq!(cfg.jaccard, JaccardVariant::PerPixel);
    assert_eq!(cfg.network.style, Style::VggConcat11);
    assert_eq!(cfg.eval.min_area, 50);
    assert_eq!(cfg.eval.threshold, 0.3);
    assert_eq!(cfg.schedule.total_epochs(), 15);
}

#[test]
fn every_problem_is_reported_at_once() {
    let err = RunConfig::from_toml(
        "colour = 1\nfolds = \"five\"\n[network]\nstyle = \"unet\"\nbase_width = 4\ndepth = 3\nwdith = 2\n[eval]\nthreshold = 2.0\n",
    )
    .unwrap_err()
    .to_string();
    for needle in ["colour", "folds", "network.wdith", "eval"] {
        assert!(err.contains(needle), "missing {needle} in {err}");
    }
}

#[test]
fn range_errors_are_collected() {
    let err = RunConfig::from_toml("crop = 60\nfolds = 3\nval_fold = 3\n[schedule]\nbatch_size = 0\n")
        .unwrap_err()
        .to_string();
    for needle in ["crop", "val_fold", "batch_size"] {
        assert!(err.contains(needle), "missing {needle} in {err}");
    }
}

#[test]
fn shipped_desk_config_is_valid() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.crop, 64);
    assert_eq!(cfg.synth.count, 200);
    assert_eq!(cfg.schedule.batch_size, 32);
    assert_eq!(cfg.train_config().schedule.seed, cfg.seed);
}

#[test]
fn histograms_conserve_counts() {
    let per_image = [0, 2, 1, 1, 3, 0, 1];
    let h = count_histogram(&per_image);
    assert_eq!(h.len(), 4);
    assert_eq!(h.iter().map(|b| b.images).sum::<usize>(), per_image.len());
    assert_eq!(h.iter().map(|b| b.lesions * b.images).sum::<usize>(), per_image.iter().sum::<usize>());
    let areas = [10, 499, 500, 1200, 0];
    let a = area_histogram(&areas, 500);
    assert_eq!(a.iter().map(|b| b.lesions).collect::<Vec<_>>(), vec![3, 1, 1]);
    assert_eq!((a[2].min, a[2].max), (1000, 1500));
    assert!(area_histogram(&[], 500).is_empty());
}

#[test]
fn report_files_are_written() {
    let samples = synth_blobs(4, 10, &SynthParams::default()).unwrap();
    let maps: Vec<ProbabilityMap> = samples
        .iter()
        .map(|s| {
            let m = s.mask.as_ref().unwrap();
            ProbabilityMap::from_fn(s.height(), s.width(), |r, c| if m.get(r, c) { 0.9 } else { 0.1 })
        })
        .collect();
    let eval = evaluate_maps(&samples, &maps, &EvalConfig::default()).unwrap();
    let model = ModelReport::new("oracle", &eval, 500);
    assert_eq!(model.row.iou, 100.0);
    assert_eq!(model.truth_histograms, model.predicted_histograms);
    let dir = tempfile::tempdir().unwrap();
    Report::new(vec![model], 30.0, false).write(dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), REPORT_COLUMNS.join(","));
    assert!(csv.lines().nth(1).unwrap().starts_with("oracle,100.00,100.00,,1.0000,1.0000,1.0000,10"));
    let per_image = std::fs::read_to_string(dir.path().join("per_image.csv")).unwrap();
    assert_eq!(per_image.lines().count(), 11);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["notes"].as_array().unwrap().len(), 1);
}
