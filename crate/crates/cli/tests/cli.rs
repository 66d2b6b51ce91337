//! End-to-end CLI tests against generated fixtures.

use std::path::Path;
use std::process::Command;

fn smicqa() -> Command {
    Command::new(env!("CARGO_BIN_EXE_smicqa"))
}

fn write_images(dir: &Path, n: usize) {
    let mut state = 42u64;
    let mut next = || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (state >> 33) as u8
    };
    let mut reference = image::RgbImage::new(64, 64);
    for p in reference.pixels_mut() {
        *p = image::Rgb([next(), next(), next()]);
    }
    reference.save(dir.join("ref.png")).unwrap();
    for i in 0..n {
        let mut distorted = reference.clone();
        for p in distorted.pixels_mut() {
            for c in 0..3 {
                let delta = (next() as i16 - 128) / (8 - (i as i16 % 8)).max(1);
                p[c] = (p[c] as i16 + delta).clamp(0, 255) as u8;
            }
        }
        distorted.save(dir.join(format!("dist{i}.png"))).unwrap();
    }
}

#[test]
fn score_emits_json_with_expected_fields() {
    let dir = tempfile::tempdir().unwrap();
    write_images(dir.path(), 1);
    let output = smicqa()
        .args([
            "score",
            "--metric",
            "psnr",
            "--ref",
            dir.path().join("ref.png").to_str().unwrap(),
            "--dist",
            dir.path().join("dist0.png").to_str().unwrap(),
            "--smic",
            "on",
            "--k",
            "2",
            "--trad-stride",
            "7",
            "--seed",
            "3",
            "--out",
            "json",
        ])
        .output()
        .unwrap();
    assert!(output.status.success(), "{output:?}");
    let json: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(json["metric"], "psnr");
    assert_eq!(json["smic"], true);
    assert_eq!(json["seed"], 3);
    assert!(json["value"].as_f64().unwrap() > 0.0);
    assert!(json["db"].as_f64().is_some());
    assert!(json["per_stage_terms"].is_object());
}

#[test]
fn score_identical_pair_ssim_baseline_is_one() {
    let dir = tempfile::tempdir().unwrap();
    write_images(dir.path(), 1);
    let reference = dir.path().join("ref.png");
    let output = smicqa()
        .args([
            "score",
            "--metric",
            "ssim",
            "--ref",
            reference.to_str().unwrap(),
            "--dist",
            reference.to_str().unwrap(),
            "--smic",
            "off",
        ])
        .output()
        .unwrap();
    assert!(output.status.success());
    let json: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(json["value"], 1.0);
}

#[test]
fn evaluate_writes_report_and_nonzero_exit_on_aborted_cells() {
    let dir = tempfile::tempdir().unwrap();
    write_images(dir.path(), 12);
    let mut manifest = String::from("ref,dist,mos\n");
    for i in 0..12 {
        manifest.push_str(&format!("ref.png,dist{i}.png,{}\n", 80.0 - i as f64));
    }
    std::fs::write(dir.path().join("set.csv"), &manifest).unwrap();

    let report_path = dir.path().join("report.json");
    let output = smicqa()
        .args([
            "evaluate",
            "--manifest",
            dir.path().join("set.csv").to_str().unwrap(),
            "--root",
            dir.path().to_str().unwrap(),
            "--metrics",
            "psnr,ssim",
            "--smic",
            "on,off",
            "--k",
            "2",
            "--trad-stride",
            "7",
            "--out",
            report_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["cells"].as_array().unwrap().len(), 4);
    assert_eq!(report["polarity"], "mos");

    // deep metric on 64x64 inputs cannot tile stage 5: the cell aborts and
    // the process exits nonzero while other cells keep their reports
    let csv_path = dir.path().join("report.csv");
    let output = smicqa()
        .args([
            "evaluate",
            "--manifest",
            dir.path().join("set.csv").to_str().unwrap(),
            "--root",
            dir.path().to_str().unwrap(),
            "--metrics",
            "lpips,psnr",
            "--smic",
            "off",
            "--out",
            csv_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!output.status.success());
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert!(csv.lines().any(|l| l.contains("lpips") && l.contains("error")));
    assert!(csv.lines().any(|l| l.contains("psnr") && l.contains("ok")));
}

#[test]
fn attention_dump_writes_stage_images() {
    let dir = tempfile::tempdir().unwrap();
    write_images(dir.path(), 1);
    let out_dir = dir.path().join("maps");
    let output = smicqa()
        .args([
            "attention-dump",
            "--ref",
            dir.path().join("ref.png").to_str().unwrap(),
            "--dist",
            dir.path().join("dist0.png").to_str().unwrap(),
            "--k",
            "2",
            "--stride",
            "7",
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );
    for stage in [3, 4] {
        let path = out_dir.join(format!("attention_stage{stage}.png"));
        let img = image::open(&path).unwrap().to_luma8();
        assert!(img.width() >= 1 && img.height() >= 1);
    }
}
