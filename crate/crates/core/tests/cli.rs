//! Runs the `mrt` binary end to end on a tiny model.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mrt_core::codec;
use mrt_core::image::{read_ppm, write_ppm};
use mrt_core::model::MrtModel;
use mrt_core::Tensor;

fn mrt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrt")).args(args).output().expect("run mrt")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn train_tiny(dir: &Path) -> PathBuf {
    let ckpt = dir.join("tiny.ckpt");
    let cfg = dir.join("s1.cfg");
    std::fs::write(&cfg, format!("preset=tiny\nsteps=2\nbatch=1\ncorpus_size=1\noutput={}\n", ckpt.display())).unwrap();
    let out = mrt(&["--seed", "3", "train", "--stage", "1", "--config", s(&cfg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    ckpt
}

#[test]
fn encode_decode_roundtrip_and_failures() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path());
    let img = Tensor::rand_uniform(&[3, 200, 300], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let input = dir.path().join("in.ppm");
    write_ppm(&img, &input).unwrap();
    let stream = dir.path().join("x.mrt");
    let decoded = dir.path().join("out.ppm");

    let out = mrt(&["encode", s(&input), s(&stream), "--model", s(&ckpt), "--lambda-index", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let fields: Vec<&str> = stdout.split_whitespace().collect();
    assert_eq!(fields[0], "bpp");
    assert_eq!(fields[2], "bytes");
    let bytes = std::fs::read(&stream).unwrap();
    assert_eq!(fields[3].parse::<usize>().unwrap(), bytes.len());
    let bpp: f64 = fields[1].parse().unwrap();
    assert!((bpp - 8.0 * bytes.len() as f64 / (200.0 * 300.0)).abs() < 1e-6);

    let out = mrt(&["decode", s(&stream), s(&decoded), "--model", s(&ckpt)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_ppm(&decoded).unwrap().shape(), &[3, 200, 300]);

    // The file written by the binary decodes to the same latents the
    // library encoder produces, and is byte-identical to a fresh encode.
    let (model, store) = MrtModel::from_checkpoint(&ckpt).unwrap();
    let quantized = read_ppm(&input).unwrap();
    let enc = codec::encode(&model, &store, &quantized, 2).unwrap();
    assert_eq!(enc.bytes, bytes);
    assert_eq!(codec::decode(&model, &store, &bytes).unwrap().y_hat, enc.y_hat);

    let truncated = dir.path().join("cut.mrt");
    std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    let target = dir.path().join("never.ppm");
    let out = mrt(&["decode", s(&truncated), s(&target), "--model", s(&ckpt)]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
    assert!(!target.exists());
    assert!(!dir.path().join("never.ppm.partial").exists());

    let missing = dir.path().join("missing.ppm");
    assert_eq!(mrt(&["encode", s(&missing), s(&stream), "--model", s(&ckpt)]).status.code(), Some(2));
    assert_eq!(mrt(&["encode", "--bogus"]).status.code(), Some(2));
    assert_eq!(mrt(&["train", "--stage", "3", "--config", s(&input)]).status.code(), Some(2));
}

#[test]
fn analysis_output_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path());
    let corpus = dir.path().join("corpus");
    std::fs::create_dir(&corpus).unwrap();
    for (i, img) in mrt_core::training::synthetic_corpus(2, 256, 256, 5).iter().enumerate() {
        write_ppm(img, &corpus.join(format!("img{i}.ppm"))).unwrap();
    }
    let image = corpus.join("img0.ppm");
    let checkpoint_arg = format!("10={}", ckpt.display());
    let commands: Vec<Vec<&str>> = vec![
        vec!["analyze", "erf", "--model", s(&ckpt), "--image", s(&image)],
        vec!["analyze", "redundancy", "--model", s(&ckpt), "--corpus", s(&corpus)],
        vec!["analyze", "rd", "--corpus", s(&corpus), "--checkpoint", &checkpoint_arg],
        vec!["analyze", "codebook-entropy", "--model", s(&ckpt), "--corpus", s(&corpus)],
    ];
    for args in commands {
        let run = |name: &str| {
            let path = dir.path().join(name);
            let mut full = vec!["--seed", "9"];
            full.extend(&args);
            full.extend(["--output", s(&path)]);
            let out = mrt(&full);
            assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
            std::fs::read(&path).unwrap()
        };
        let first = run("a.csv");
        assert_eq!(first, run("b.csv"), "{args:?}");
        let text = String::from_utf8(first).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.contains(','), "{args:?}: {header}");
        assert!(lines.next().is_some(), "{args:?} wrote no rows");
    }
}
