//! File inputs and containers through the public API: IDX and CSV data
//! sources end to end, checkpoint and perturbation-set diagnostics.

use std::fs;
use std::process::Command;

use malign::checkpoint::{load_checkpoint, load_checkpoint_with_manifest, quantize, save_checkpoint};
use malign::idx::{encode_images, encode_labels};
use malign::perturbation::{load_perturbations, save_perturbations, PerturbationSet};
use malign::source::DataSource;
use malign::Error;
use malign_core::attacks::AttackConfig;
use malign_core::zoo::{build_model, ArchFamily};
use malign_core::Tensor;
use serde_json::json;
use tempfile::TempDir;

/// Two classes of 6x6 images: bright left half vs bright right half.
fn idx_pair(n: usize, offset: usize) -> (Vec<u8>, Vec<u8>) {
    let mut px = Vec::new();
    let mut lb = Vec::new();
    for i in 0..n {
        let y = (i + offset) % 2;
        for r in 0..6 {
            for c in 0..6 {
                let bright = (c < 3) == (y == 0);
                px.push(if bright { 200 + ((r * 7 + c + i) % 50) as u8 } else { ((r + c * 3 + i) % 40) as u8 });
            }
        }
        lb.push(y as u8);
    }
    (encode_images(n, 6, 6, &px), encode_labels(&lb))
}

#[test]
fn idx_source_trains_from_the_command_line() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let (ti, tl) = idx_pair(120, 0);
    let (vi, vl) = idx_pair(40, 1);
    for (name, bytes) in [("tr-img", ti), ("tr-lbl", tl), ("te-img", vi), ("te-lbl", vl)] {
        fs::write(d.join(name), bytes).unwrap();
    }
    let spec = "idx:tr-img,tr-lbl,te-img,te-lbl";
    let src: DataSource = format!("idx:{0}/tr-img,{0}/tr-lbl,{0}/te-img,{0}/te-lbl", d.display()).parse().unwrap();
    let (tr, te) = src.load().unwrap();
    assert_eq!(tr.inputs.shape(), &[120, 1, 6, 6]);
    assert_eq!((te.len(), te.num_classes), (40, 2));
    assert!(tr.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));

    let out = Command::new(env!("CARGO_BIN_EXE_malign"))
        .current_dir(d)
        .args(["train", "--arch", "cnn-S", "--data", spec, "--epochs", "4", "--seed", "1", "--name", "m"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(s["test_accuracy"].as_f64().unwrap() > 0.9, "{s}");
    assert_eq!(load_checkpoint(&d.join("m.ckpt")).unwrap().input_shape(), &[1, 6, 6]);

    // mismatched counts are diagnosed against the label file
    fs::write(d.join("short-lbl"), encode_labels(&[0, 1])).unwrap();
    let bad: DataSource = format!("idx:{0}/tr-img,{0}/short-lbl,{0}/te-img,{0}/te-lbl", d.display()).parse().unwrap();
    assert!(matches!(bad.load(), Err(Error::CountMismatch { images: 120, labels: 2, .. })));
    // images and labels swapped
    let swapped: DataSource = format!("idx:{0}/tr-lbl,{0}/tr-img,{0}/te-img,{0}/te-lbl", d.display()).parse().unwrap();
    assert!(matches!(swapped.load(), Err(Error::BadMagic { .. })));
}

#[test]
fn csv_source_with_header_scale_and_shape() {
    let dir = TempDir::new().unwrap();
    let mut train = String::from("label,p0,p1,p2,p3\n");
    for i in 0..30 {
        let y = i % 3;
        train.push_str(&format!("{y},{},{},{},{}\n", y * 100, 255 - y * 100, i % 7, 10));
    }
    fs::write(dir.path().join("train.csv"), &train).unwrap();
    fs::write(dir.path().join("test.csv"), "label,p0,p1,p2,p3\n1,100,155,0,10\n").unwrap();
    let src: DataSource = format!(
        "csv:{0}/train.csv,{0}/test.csv,header,scale=255,shape=1x2x2",
        dir.path().display()
    )
    .parse()
    .unwrap();
    let (tr, te) = src.load().unwrap();
    assert_eq!(tr.inputs.shape(), &[30, 1, 2, 2]);
    assert_eq!(tr.num_classes, 3);
    assert_eq!(te.num_classes, 3);
    assert_eq!(te.inputs.data(), &[100.0 / 255.0, 155.0 / 255.0, 0.0, 10.0 / 255.0]);

    fs::write(dir.path().join("test.csv"), "label,p0,p1,p2,p3\n1,100,155,0\n").unwrap();
    assert!(matches!(src.load(), Err(Error::RowWidth { line: 2, .. }) | Err(Error::Csv(_))));
    fs::write(dir.path().join("test.csv"), "label,p0,p1,p2,p3\n1,100,x,0,1\n").unwrap();
    assert!(matches!(src.load(), Err(Error::Parse { .. })));
}

#[test]
fn containers_round_trip_and_reject_each_other() {
    let dir = TempDir::new().unwrap();
    let fam = ArchFamily::new("cnn-S".parse().unwrap(), 10, &[1, 8, 8]);
    let m = build_model(&fam, 4).unwrap();
    let ck = dir.path().join("deep/m.ckpt");
    save_checkpoint(&m, &ck, json!({"note": "x"})).unwrap();
    let (back, manifest) = load_checkpoint_with_manifest(&ck).unwrap();
    assert_eq!(back, quantize(&m));
    assert_eq!(manifest.arch_id, "cnn-S");
    assert_eq!(manifest.provenance["note"], "x");

    let delta = Tensor::new(vec![2, 1, 2, 2], vec![0.01, -0.02, 0.0, 0.03, -0.01, 0.0, 0.02, 0.0]).unwrap();
    let set = PerturbationSet::new(AttackConfig::default().fingerprint(), vec![m.id()], vec![3, 9], delta).unwrap();
    let pp = dir.path().join("p.pert");
    save_perturbations(&set, &pp).unwrap();
    let again = load_perturbations(&pp).unwrap();
    assert_eq!(again.manifest, set.manifest);
    assert!(matches!(load_checkpoint(&pp), Err(Error::BadMagic { .. })));
    assert!(matches!(load_perturbations(&ck), Err(Error::BadMagic { .. })));

    let bytes = fs::read(&ck).unwrap();
    fs::write(&ck, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(load_checkpoint(&ck), Err(Error::Truncated { .. })));
    fs::write(&ck, &bytes[..12]).unwrap();
    assert!(load_checkpoint(&ck).is_err());

    // wrong sample-id count for the delta
    let bad = PerturbationSet::new(
        AttackConfig::default().fingerprint(),
        vec![],
        vec![1],
        Tensor::zeros(&[2, 1, 2, 2]),
    );
    assert!(bad.is_err());
}
