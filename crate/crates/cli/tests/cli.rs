use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use fepll::{synth, Image};

fn fepll(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fepll")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[track_caller]
fn ok(args: &[&str]) -> String {
    let out = fepll(args);
    assert_eq!(code(&out), 0, "{args:?} failed: {}", stderr(&out));
    stdout(&out)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/natural/train")
}

/// Directory shared by the tests, holding small trained models.
fn workspace() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        for k in ["6", "8"] {
            let out = dir.join(format!("k{k}.gmm"));
            let corpus = train_corpus();
            ok(&["train", "--corpus", s(&corpus), "-k", k, "--iters", "3", "--stride", "6", "--seed", "1", "-o", s(&out)]);
        }
        dir
    })
}

fn model(k: usize) -> PathBuf {
    workspace().join(format!("k{k}.gmm"))
}

/// A synthetic clean image written to a fresh directory.
fn clean_image(dir: &Path, h: usize, w: usize, seed: u64) -> PathBuf {
    let p = dir.join(format!("clean{seed}.pgm"));
    synth::scene(h, w, seed).unwrap().write(&p).unwrap();
    p
}

#[test]
fn train_reports_likelihood_and_rejects_bad_corpora() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.gmm");
    let corpus = train_corpus();
    let text = ok(&["train", "--corpus", s(&corpus), "-k", "1", "--iters", "2", "--stride", "8", "-o", s(&out)]);
    assert!(text.contains("final mean log-likelihood"));
    assert!(ok(&["inspect", s(&out)]).contains("1 components, patch 8x8, full rank"));

    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(code(&fepll(&["train", "--corpus", s(&empty), "-o", s(&out)])), 3);
    // more components than patches
    let tiny = dir.path().join("tiny");
    fs::create_dir(&tiny).unwrap();
    clean_image(&tiny, 10, 10, 1);
    assert_eq!(code(&fepll(&["train", "--corpus", s(&tiny), "-k", "50", "-o", s(&out)])), 3);
}

#[test]
fn flatten_reports_mean_rank() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("flat.gmm");
    assert!(ok(&["flatten", "--model", s(&model(6)), "--rho", "1", "-o", s(&out)]).contains("mean rank 64.00 of 64"));
    let text = ok(&["flatten", "--model", s(&model(6)), "-o", s(&out)]);
    let rank: f64 = text.split("mean rank ").nth(1).unwrap().split(' ').next().unwrap().parse().unwrap();
    assert!(rank > 1.0 && rank < 64.0);
    assert!(ok(&["inspect", s(&out)]).contains("flattened at rho = 0.95"));
}

#[test]
fn eight_components_in_three_levels_form_a_binary_tree() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.tree");
    let text = ok(&["build-tree", "--model", s(&model(8)), "--levels", "4,2,1", "-o", s(&out)]);
    assert!(text.contains("level sizes [1, 2, 4, 8]"), "{text}");
    assert!(ok(&["inspect", s(&out)]).contains("8 leaves"));
}

#[test]
fn denoising_writes_a_manifest_that_replays() {
    let dir = tempfile::tempdir().unwrap();
    let clean = clean_image(dir.path(), 48, 40, 3);
    let noisy = dir.path().join("noisy.pgm");
    ok(&["degrade", "denoise", "-i", s(&clean), "-o", s(&noisy), "--sigma", "20", "--seed", "4"]);
    let out = dir.path().join("out.png");
    let text = ok(&[
        "restore", "denoise", "-i", s(&noisy), "-o", s(&out), "--model", s(&model(6)), "--sigma", "20", "--reference",
        s(&clean),
    ]);
    assert!(text.contains("PSNR"), "{text}");
    let manifest = dir.path().join("out.png.manifest.json");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    for key in ["input", "model", "tree", "output", "reference"] {
        assert_eq!(json["digests"][key].as_str().unwrap().len(), 64, "{key}");
    }
    assert_eq!(json["tree_source"], "built");
    assert_eq!(json["job"]["config"]["beta_multipliers"].as_array().unwrap().len(), 5);
    assert_eq!(json["stats"]["iterations"].as_array().unwrap().len(), 5);

    // the restoration beats the noisy input
    let psnr_out = json["metrics"]["psnr"].as_f64().unwrap();
    let noisy_img = Image::read(&noisy).unwrap();
    let psnr_in = fepll::metrics::psnr(&noisy_img, &Image::read(&clean).unwrap(), 1.0).unwrap();
    assert!(psnr_out > psnr_in + 3.0, "{psnr_out} vs {psnr_in}");

    let replayed = dir.path().join("again.png");
    let text = ok(&["replay", s(&manifest), "-o", s(&replayed)]);
    assert!(text.contains("output digest matches"));
    assert_eq!(fs::read(&out).unwrap(), fs::read(&replayed).unwrap());
    assert!(ok(&["inspect", s(&manifest)]).contains("denoise (identity)"));

    // a changed input is detected
    synth::add_noise(&noisy_img, 1.0, 9).clamped().write(&noisy).unwrap();
    let r = fepll(&["replay", s(&manifest), "-o", s(&replayed)]);
    assert_eq!(code(&r), 3);
    assert!(stderr(&r).contains("input differs"), "{}", stderr(&r));
}

#[test]
fn prebuilt_trees_must_match_the_profile() {
    let dir = tempfile::tempdir().unwrap();
    let clean = clean_image(dir.path(), 40, 40, 5);
    let noisy = dir.path().join("noisy.pgm");
    ok(&["degrade", "denoise", "-i", s(&clean), "-o", s(&noisy), "--sigma", "15"]);
    let good = dir.path().join("good.tree");
    let bad = dir.path().join("bad.tree");
    let m = model(6);
    ok(&["build-tree", "--model", s(&m), "-o", s(&good)]);
    ok(&["build-tree", "--model", s(&m), "--rho", "0.9", "-o", s(&bad)]);
    let base = ["restore", "denoise", "-i", s(&noisy), "--model", s(&m), "--sigma", "15"];
    let with = |tree: &Path, out: &Path| {
        let mut a = base.to_vec();
        a.extend_from_slice(&["--tree", s(tree), "-o", s(out)]);
        fepll(&a)
    };
    let (a, b) = (dir.path().join("a.pgm"), dir.path().join("b.pgm"));
    assert_eq!(code(&with(&good, &a)), 0);
    let r = with(&bad, &b);
    assert_eq!(code(&r), 3);
    assert!(stderr(&r).contains("rebuild it with build-tree --rho 0.95"), "{}", stderr(&r));
    // the tree built on the fly is the same one
    let mut auto = base.to_vec();
    auto.extend_from_slice(&["-o", s(&b)]);
    ok(&auto);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    // and --no-tree with a tree is contradictory
    let mut both = base.to_vec();
    both.extend_from_slice(&["--tree", s(&good), "--no-tree", "-o", s(&b)]);
    assert_eq!(code(&fepll(&both)), 2);
}

#[test]
fn super_resolution_triples_the_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let obs = clean_image(dir.path(), 64, 64, 6);
    let out = dir.path().join("hi.pgm");
    ok(&["restore", "sr", "--factor", "3", "-i", s(&obs), "-o", s(&out), "--model", s(&model(6)), "--sigma", "2"]);
    assert_eq!(Image::read(&out).unwrap().dims(), (192, 192));
    let r = fepll(&["restore", "sr", "-i", s(&obs), "-o", s(&out), "--model", s(&model(6)), "--sigma", "2"]);
    assert_eq!(code(&r), 2);
}

#[test]
fn inpainting_deblurring_and_devignetting_run_with_their_assets() {
    let dir = tempfile::tempdir().unwrap();
    let clean = clean_image(dir.path(), 48, 48, 7);
    let m = model(6);
    let run = |task: &str, obs: &Path, extra: &[&str]| {
        let out = dir.path().join(format!("{task}.out.pgm"));
        let mut a = vec!["restore", task, "-i", s(obs), "-o", s(&out), "--model", s(&m), "--sigma", "2", "--reference", s(&clean)];
        a.extend_from_slice(extra);
        fepll(&a)
    };

    let obs = dir.path().join("holes.pgm");
    let mask = dir.path().join("mask.pgm");
    ok(&["degrade", "inpaint", "-i", s(&clean), "-o", s(&obs), "--sigma", "2", "--mask-out", s(&mask)]);
    assert_eq!(code(&run("inpaint", &obs, &["--mask", s(&mask)])), 0);
    assert_eq!(code(&run("inpaint", &obs, &[])), 2);

    let obs = dir.path().join("blurry.pgm");
    ok(&["degrade", "deblur", "-i", s(&clean), "-o", s(&obs), "--sigma", "2", "--blur-sigma", "1.2"]);
    assert_eq!(code(&run("deblur", &obs, &["--blur-sigma", "1.2"])), 0);
    let kernel = dir.path().join("box.txt");
    fs::write(&kernel, "3 3\n1 1 1\n1 1 1\n1 1 1\n").unwrap();
    assert_eq!(code(&run("deblur", &obs, &["--kernel", s(&kernel)])), 0);
    assert_eq!(code(&run("deblur", &obs, &[])), 2);
    assert_eq!(code(&run("deblur", &obs, &["--mask", s(&mask), "--blur-sigma", "1"])), 2);

    let obs = dir.path().join("dark.pgm");
    ok(&["degrade", "devignette", "-i", s(&clean), "-o", s(&obs), "--sigma", "2"]);
    let out = run("devignette", &obs, &["--exact"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let wrong = clean_image(dir.path(), 40, 48, 8);
    assert_eq!(code(&run("devignette", &obs, &["--gain", s(&wrong)])), 3);
}

#[test]
fn usage_and_data_errors_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let img = clean_image(dir.path(), 32, 32, 9);
    let out = dir.path().join("o.pgm");
    let m = model(6);
    let base = ["restore", "denoise", "-i", s(&img), "-o", s(&out), "--model", s(&m), "--sigma", "10"];
    let with = |extra: &[&str]| {
        let mut a = base.to_vec();
        a.extend_from_slice(extra);
        code(&fepll(&a))
    };
    assert_eq!(with(&["--bogus"]), 2);
    assert_eq!(with(&["--iters", "0"]), 2);
    assert_eq!(with(&["--exact", "--rho", "0.9"]), 2);
    assert_eq!(with(&["--spacing", "9"]), 3);
    assert_eq!(code(&fepll(&["restore", "denoise", "-i", "missing.pgm", "-o", s(&out), "--model", s(&m), "--sigma", "1"])), 3);
    assert_eq!(code(&fepll(&["inspect", s(&img.with_extension("nope"))])), 3);

    let rgb = dir.path().join("rgb.png");
    image::RgbImage::from_pixel(16, 16, image::Rgb([10, 200, 30])).save(&rgb).unwrap();
    let r = fepll(&["restore", "denoise", "-i", s(&rgb), "-o", s(&out), "--model", s(&m), "--sigma", "1"]);
    assert_eq!(code(&r), 3);
    assert!(stderr(&r).contains("grayscale"), "{}", stderr(&r));
    assert_eq!(with(&["--iters", "7", "--no-tree"]), 0);
}

#[test]
fn benchmark_writes_one_row_per_image_and_profile() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    fs::create_dir(&corpus).unwrap();
    clean_image(&corpus, 40, 40, 10);
    clean_image(&corpus, 36, 44, 11);
    let (csv, md) = (dir.path().join("r.csv"), dir.path().join("r.md"));
    let m = model(6);
    ok(&["benchmark", "--corpus", s(&corpus), "--model", s(&m), "--profiles", "fepll,fepll-prime", "--csv", s(&csv), "--markdown", s(&md)]);
    let mut reader = csv::Reader::from_path(&csv).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    let headers = reader.headers().unwrap().clone();
    let err = headers.iter().position(|h| h == "error").unwrap();
    assert!(rows.iter().all(|r| r[err].is_empty()));
    assert!(fs::read_to_string(&md).unwrap().contains("| fepll-prime | 2/2 |"));

    // ablation over all toggle combinations, with a failing image recorded
    clean_image(&corpus, 6, 6, 12);
    let text = ok(&[
        "benchmark", "--corpus", s(&corpus), "--model", s(&m), "--profiles", "", "--ablation", "--tasks", "denoise:25,inpaint",
        "--crop", "32", "--csv", s(&csv), "--markdown", s(&md),
    ]);
    for p in ["exact", "flat", "tree", "jitter", "flat+tree", "flat+jitter", "tree+jitter", "fepll"] {
        assert!(text.contains(&format!("| {p} | 2/3 |")), "{p}: {text}");
    }
    assert!(text.contains("## Failures") && text.contains("smaller than the 32x32 crop"));
    assert_eq!(csv::Reader::from_path(&csv).unwrap().records().count(), 3 * 2 * 8);

    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(code(&fepll(&["benchmark", "--corpus", s(&empty), "--model", s(&m), "--csv", s(&csv), "--markdown", s(&md)])), 3);
}
