use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use alan_core::feature_store::{write_mask, MaskRef};
use alan_core::head::encode_head;
use alan_core::synthetic::{synth_dataset, write_dataset, SynthConfig};
use alan_core::{read_parcels, write_head, write_manifest, write_parcels, HeadParams, ParcelMap, SegmenterSpec};

fn alan(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alan"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn small_dataset(dir: &Path, channels: usize) {
    let cfg = SynthConfig {
        frames: 8,
        channels,
        ..SynthConfig::default()
    };
    let seqs = synth_dataset("s", 3, &cfg, 4).unwrap();
    write_dataset(dir, "train", &seqs, false).unwrap();
}

#[test]
fn missing_manifest_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = alan(&["train-head", "--manifest", "nope/train.toml"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nope/train.toml"));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path(), 8);
    fs::write(dir.path().join("cfg.toml"), "[train]\nlearning_rat = 1.0\n").unwrap();
    let out = alan(&["train-head", "--manifest", "train.toml", "--config", "cfg.toml"], dir.path());
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn zero_learning_rate_keeps_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path(), 8);
    let out = alan(
        &["train-head", "--manifest", "train.toml", "--lr", "0", "--epochs", "2", "-k", "5", "--seed", "13"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let written = fs::read(dir.path().join("alan-out/head.alanhead")).unwrap();
    assert_eq!(written, encode_head(&HeadParams::init(8, 5, 13)).unwrap());
    let report = fs::read_to_string(dir.path().join("alan-out/train_report.toml")).unwrap();
    let report: toml::Value = toml::from_str(&report).unwrap();
    assert_eq!(report["epoch_losses"].as_array().unwrap().len(), 2);
}

#[test]
fn exploding_learning_rate_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path(), 8);
    let out = alan(&["train-head", "--manifest", "train.toml", "--lr", "1e300", "--epochs", "3", "-k", "4"], dir.path());
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn channel_mismatch_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path(), 6);
    write_head(&HeadParams::init(8, 4, 0), dir.path().join("head.alanhead")).unwrap();
    let out = alan(&["parcelize", "--manifest", "train.toml", "--head", "head.alanhead"], dir.path());
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn zero_head_gives_all_zero_maps() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path(), 8);
    write_head(&HeadParams::zeros(8, 4), dir.path().join("head.alanhead")).unwrap();
    let out = alan(&["parcelize", "--manifest", "train.toml", "--head", "head.alanhead", "--frames", "0,7"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for t in [0, 7] {
        let map = read_parcels(dir.path().join(format!("alan-out/parcels/s-000/{t}.alanpmap"))).unwrap();
        assert_eq!(map.classes, 4);
        assert!(map.labels.iter().all(|&l| l == 0));
    }
}

/// Hand-made parcel maps where only parcel 3 sits inside the masks.
fn fixture_with_one_interior_parcel(dir: &Path) {
    let cfg = SynthConfig {
        frames: 2,
        ..SynthConfig::default()
    };
    let seqs = synth_dataset("f", 1, &cfg, 0).unwrap();
    let mut manifest = write_dataset(dir, "fit", &seqs, false).unwrap();
    let entry = &mut manifest.entries[0];
    entry.masks.clear();
    let labels: Vec<u16> = (0..64 * 64)
        .map(|i| {
            let (r, c) = (i / 64, i % 64);
            if (20..40).contains(&r) && (20..40).contains(&c) {
                3
            } else if r < 32 {
                1
            } else {
                2
            }
        })
        .collect();
    let map = ParcelMap::new(64, 64, 5, labels).unwrap();
    let mask = alan_core::BinaryMask::from_fn(64, 64, |r, c| (18..42).contains(&r) && (18..42).contains(&c));
    for t in 0..2 {
        fs::create_dir_all(dir.join("parcels/f-000")).unwrap();
        write_parcels(&map, dir.join(format!("parcels/f-000/{t}.alanpmap"))).unwrap();
        let mask_path = dir.join(format!("masks/f-000_{t}.alanmask"));
        write_mask(&mask, &mask_path).unwrap();
        entry.masks.push(MaskRef {
            frame_idx: t,
            region_label: "LV".into(),
            mask_path,
            phase: None,
        });
    }
    write_manifest(&manifest, dir.join("fit.toml")).unwrap();
}

#[test]
fn fit_segments_finds_the_single_interior_parcel_and_echoes_overrides() {
    let dir = tempfile::tempdir().unwrap();
    fixture_with_one_interior_parcel(dir.path());
    let out = alan(
        &["fit-segments", "--manifest", "fit.toml", "--parcels", "parcels", "--overlap-frac", "0.9", "--closing-radius", "4"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let spec = SegmenterSpec::read(dir.path().join("alan-out/segmenter.toml")).unwrap();
    assert_eq!(spec.interior_ids, vec![3]);
    assert_eq!(spec.classes, 5);
    assert_eq!(spec.thresholds.overlap_frac, 0.9);
    assert_eq!(spec.postproc.closing_radius, 4);
    assert_eq!(spec.region_label, "LV");
}

#[test]
fn fit_segments_without_masks_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    fixture_with_one_interior_parcel(dir.path());
    let text = fs::read_to_string(dir.path().join("fit.toml")).unwrap();
    let stripped: String = text.split("[[entries.masks]]").next().unwrap().to_string();
    fs::write(dir.path().join("bare.toml"), stripped).unwrap();
    let out = alan(&["fit-segments", "--manifest", "bare.toml", "--parcels", "parcels"], dir.path());
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn segment_and_eval_report_mean_dice() {
    let dir = tempfile::tempdir().unwrap();
    fixture_with_one_interior_parcel(dir.path());
    let run = |args: &[&str]| {
        let out = alan(args, dir.path());
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        out
    };
    run(&["fit-segments", "--manifest", "fit.toml", "--parcels", "parcels"]);
    run(&["segment", "--manifest", "fit.toml", "--parcels", "parcels", "--segmenter", "alan-out/segmenter.toml"]);
    let out = run(&["eval-dice", "--manifest", "fit.toml", "--pred", "alan-out/masks"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("LV untagged: DICE"));
    let report: toml::Value =
        toml::from_str(&fs::read_to_string(dir.path().join("alan-out/dice_report.toml")).unwrap()).unwrap();
    let mean = report["groups"][0]["mean"].as_float().unwrap();
    assert!(mean > 0.8 && mean <= 1.0, "mean {mean}");
    let csv = fs::read_to_string(dir.path().join("alan-out/dice_histogram.csv")).unwrap();
    assert!(csv.starts_with("bin_start,count\n"));
    assert_eq!(csv.lines().count(), 21);
}

#[test]
fn classify_views_on_indexed_sequences_returns_stored_labels() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        frames: 3,
        ..SynthConfig::default()
    };
    let seqs = synth_dataset("v", 4, &cfg, 2).unwrap();
    write_dataset(dir.path(), "views", &seqs, false).unwrap();
    let out = alan(&["index-views", "--manifest", "views.toml"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = alan(
        &["classify-views", "--manifest", "views.toml", "--index", "alan-out/views.alanknn", "-k", "1"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let preds: toml::Value =
        toml::from_str(&fs::read_to_string(dir.path().join("alan-out/view_predictions.toml")).unwrap()).unwrap();
    for s in preds["sequences"].as_array().unwrap() {
        assert_eq!(s["label"], s["truth"]);
    }
    assert_eq!(preds["frame_accuracy"]["accuracy"].as_float(), Some(1.0));
}

#[test]
fn render_overlay_counts_match_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let pred = alan_core::BinaryMask::from_fn(4, 5, |r, _| r < 2);
    let truth = alan_core::BinaryMask::from_fn(4, 5, |_, c| c < 2);
    write_mask(&pred, dir.path().join("pred.alanmask")).unwrap();
    write_mask(&truth, dir.path().join("truth.alanmask")).unwrap();
    let out = alan(&["render-overlay", "--pred", "pred.alanmask", "--truth", "truth.alanmask"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("overlap 4 px, prediction only 6 px, annotation only 4 px"), "{stdout}");
    let ppm = fs::read(dir.path().join("alan-out/overlay.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n5 4\n255\n"));
}

#[test]
fn help_lists_config_keys_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let help = |cmd: &str| String::from_utf8_lossy(&alan(&[cmd, "--help"], dir.path()).stdout).into_owned();
    let train = help("train-head");
    for key in ["learning_rate = 0.005", "epochs = 40", "frames_per_clip = 16", "frame_stride = 2", "classes = 64", "b_repulsive = 0.7"] {
        assert!(train.contains(key), "train-head --help lacks {key}");
    }
    let fit = help("fit-segments");
    for key in ["overlap_frac = 0.75", "hit_rate = 0.5", "presence_rate = 0.3", "enclave_cutoff = 8", "closing_radius = 10", "max_iters = 10"] {
        assert!(fit.contains(key), "fit-segments --help lacks {key}");
    }
    let knn = help("classify-views");
    assert!(knn.contains("k = 2") && knn.contains("temperature = 0.07"));
    let global = help("parcelize");
    assert!(global.contains("--threads") && global.contains("[default: 1]"));
}
