use std::fs::File;
use std::path::Path;
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use revmark::harness::imageio::{read_image, write_image};
use revmark::iflow::{save_checkpoint, Geometry, IIWNParams};
use revmark::subnets::FINAL_INIT_SCALE;
use revmark::training::synthetic_cover;

fn revmark(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_revmark")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Checkpoint whose network visibly moves pixels.
fn write_model(path: &Path) {
    let mut theta = IIWNParams::init(Geometry::new(32, 1, 8, 2, 4).unwrap(), 1).unwrap();
    for layer in &mut theta.layers {
        for sub in [&mut layer.u, &mut layer.s, &mut layer.q] {
            sub.last
                .weight
                .data_mut()
                .iter_mut()
                .for_each(|w| *w /= FINAL_INIT_SCALE);
        }
    }
    save_checkpoint(&theta, File::create(path).unwrap()).unwrap();
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn embed_extract_recover_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let model = d.join("m.iiwn");
    write_model(&model);
    let cover = synthetic_cover(32, 1, &mut ChaCha8Rng::seed_from_u64(3));
    write_image(&d.join("cover.png"), &cover).unwrap();
    let hex = "0123456789abcdef";

    let out = stdout(&revmark(&[
        "embed",
        "--model",
        p(&model),
        "--in",
        p(&d.join("cover.png")),
        "--bits",
        hex,
        "--out",
        p(&d.join("stego.png")),
    ]));
    assert!(out.contains("aux_bits="), "{out}");
    assert_ne!(read_image(&d.join("stego.png")).unwrap(), cover);

    let out = stdout(&revmark(&[
        "recover",
        "--model",
        p(&model),
        "--in",
        p(&d.join("stego.png")),
        "--out-cover",
        p(&d.join("back.png")),
        "--out-bits",
        p(&d.join("bits.bin")),
    ]));
    assert_eq!(out.trim(), hex);
    assert_eq!(read_image(&d.join("back.png")).unwrap(), cover);
    assert_eq!(
        std::fs::read(d.join("bits.bin")).unwrap(),
        [0x01, 0x23, 0x45, 0x67, 0x89, 0xab, 0xcd, 0xef]
    );

    // the recovered bits file is accepted as a watermark source
    stdout(&revmark(&[
        "embed",
        "--model",
        p(&model),
        "--in",
        p(&d.join("cover.png")),
        "--bits",
        p(&d.join("bits.bin")),
        "--out",
        p(&d.join("stego2.png")),
    ]));
    assert_eq!(
        std::fs::read(d.join("stego.png")).unwrap(),
        std::fs::read(d.join("stego2.png")).unwrap()
    );

    let out = stdout(&revmark(&[
        "extract",
        "--model",
        p(&model),
        "--in",
        p(&d.join("stego.png")),
    ]));
    assert_eq!(out.trim().len(), 16);
}

#[test]
fn failures_exit_nonzero_with_the_error_name() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let model = d.join("m.iiwn");
    write_model(&model);
    let cover = synthetic_cover(32, 1, &mut ChaCha8Rng::seed_from_u64(4));
    write_image(&d.join("cover.png"), &cover).unwrap();

    let o = revmark(&[
        "embed",
        "--model",
        p(&model),
        "--in",
        p(&d.join("cover.png")),
        "--bits",
        "abc",
        "--out",
        p(&d.join("s.png")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("BadParams:"));

    // an unwatermarked image carries no embedding to recover
    let o = revmark(&[
        "recover",
        "--model",
        p(&model),
        "--in",
        p(&d.join("cover.png")),
        "--out-cover",
        p(&d.join("c.png")),
        "--out-bits",
        p(&d.join("b.bin")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr).into_owned();
    let name = err.split(':').next().unwrap();
    assert!(
        [
            "MalformedHeader",
            "ChecksumMismatch",
            "TruncatedStream",
            "CapacityExceeded"
        ]
        .contains(&name),
        "{err}"
    );

    let o = revmark(&[
        "extract",
        "--model",
        p(&d.join("cover.png")),
        "--in",
        p(&d.join("cover.png")),
    ]);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("Checkpoint:"));
    assert_eq!(revmark(&["extract"]).status.code(), Some(2));
}

#[test]
fn eval_csv_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let model = d.join("m.iiwn");
    write_model(&model);
    std::fs::create_dir(d.join("imgs")).unwrap();
    for i in 0..3 {
        let img = synthetic_cover(32, 1, &mut ChaCha8Rng::seed_from_u64(i));
        write_image(&d.join(format!("imgs/{i}.png")), &img).unwrap();
    }
    let run = |csv: &str| {
        stdout(&revmark(&[
            "eval",
            "--model",
            p(&model),
            "--dir",
            p(&d.join("imgs")),
            "--noise",
            "jpeg:70,dropout:0.3,gn:0.01",
            "--csv",
            p(&d.join(csv)),
            "--seed",
            "9",
        ]));
        std::fs::read(d.join(csv)).unwrap()
    };
    let a = run("a.csv");
    assert_eq!(a, run("b.csv"));
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 1 + 3 * 3);
    assert!(d.join("a.timing.csv").exists());
}
