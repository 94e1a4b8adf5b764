use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

const CONFIG: &str = r#"{"views": {"count": 4, "mode": "hemisphere", "resolution": 128},
    "diffusion": {"steps": 6, "seed": 42}, "inversion": {"steps": 3},
    "latent_texture_size": 32, "rgb_texture_size": 64}"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_meshtex"));
    c.env_remove("MESHTEX_BACKEND");
    c
}

fn cube() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/cube.obj")
}

fn texture(dir: &Path, out: &str, extra: &[&str]) -> std::process::Output {
    let config = dir.join("config.json");
    fs::write(&config, CONFIG).unwrap();
    bin()
        .args(["texture", "--prompt", "a crate", "--mesh"])
        .arg(cube())
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join(out))
        .args(extra)
        .output()
        .unwrap()
}

#[test]
fn backend_check_against_toy() {
    let out = bin().args(["backend-check", "--backend", "toy"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["predict_noise", "decode", "decode_pullback"] {
        assert!(text.lines().any(|l| l.starts_with("PASS") && l.contains(name)), "{text}");
    }
    assert!(!text.contains("FAIL"));
}

#[test]
fn texture_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = texture(dir.path(), "out", &["--debug"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let o = dir.path().join("out");
    for f in ["texture.png", "mesh_out.obj", "mesh_out.mtl", "report.json", "debug/view_00_mask.png"] {
        assert!(o.join(f).exists(), "missing {f}");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(o.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["prompt"], "a crate");
    assert_eq!(report["steps"].as_array().unwrap().len(), 6);
    assert_eq!(report["seed"], 42);
}

#[test]
fn single_threaded_runs_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let out = texture(dir.path(), name, &["--threads", "1"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = fs::read(dir.path().join("a/texture.png")).unwrap();
    let b = fs::read(dir.path().join("b/texture.png")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn skip_inversion_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = texture(dir.path(), "out", &["--skip-inversion"]);
    assert!(out.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap();
    assert_eq!(report["inversion"]["skipped"], true);
}

#[test]
fn consistent2d_writes_one_image_per_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let prompts = dir.path().join("prompts.txt");
    fs::write(&prompts, "a cat\n\na dog\na bird\n").unwrap();
    let out = bin()
        .args(["consistent2d", "--mask", "center", "--alpha", "0.5", "--steps", "5", "--size", "8", "--prompts"])
        .arg(&prompts)
        .arg("--out")
        .arg(dir.path().join("imgs"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for i in 0..3 {
        let img = image::open(dir.path().join(format!("imgs/image_{i:02}.png"))).unwrap();
        assert_eq!((img.width(), img.height()), (64, 64));
    }
}

#[test]
fn bad_arguments_fail() {
    let dir = tempfile::tempdir().unwrap();
    let out = texture(dir.path(), "out", &["--backend", "gpu"]);
    assert!(!out.status.success());
    let out = bin()
        .args(["consistent2d", "--mask", "diagonal", "--prompts", "/nonexistent", "--out", "/tmp/x"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn texture_through_toy_server() {
    let mut server = bin()
        .args(["toy-server", "--listen", "127.0.0.1:0", "--seed", "42"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stderr.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().rsplit(' ').next().unwrap().to_string();

    let dir = tempfile::tempdir().unwrap();
    let remote = texture(dir.path(), "remote", &["--backend", &format!("remote:{addr}")]);
    let check = bin().args(["backend-check", "--backend", &format!("remote:{addr}")]).output().unwrap();
    server.kill().unwrap();
    server.wait().unwrap();
    assert!(remote.status.success(), "{}", String::from_utf8_lossy(&remote.stderr));
    assert!(check.status.success());

    let local = texture(dir.path(), "local", &[]);
    assert!(local.status.success());
    let a = image::open(dir.path().join("remote/texture.png")).unwrap().to_rgb8();
    let b = image::open(dir.path().join("local/texture.png")).unwrap().to_rgb8();
    let max = a.as_raw().iter().zip(b.as_raw()).map(|(x, y)| x.abs_diff(*y)).max().unwrap();
    assert!(max <= 1, "max byte difference {max}");
}
