//! End-to-end behaviour of the `attrbridge` binary on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use attrbridge::imageio::read_image;

const CONFIG: &str = "\
attributes = bright_background,square_shape,stripes
code_channels = 4
enc_channels = 4,4,4
map_hidden = 8
map_channels = 4
gen_channels = 4,4,4
spade_hidden = 4
disc_channels = 4,4,4,4
batch_size = 2
dataset = synthetic
n_train = 64
n_test = 32
feature_steps = 20
log_every = 1
checkpoint_every = 2
sample_every = 3
";

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::write(root.join("run.cfg"), config).unwrap();
        Self { _dir: dir, root }
    }

    fn config(&self) -> String {
        self.root.join("run.cfg").display().to_string()
    }

    fn out(&self) -> PathBuf {
        self.root.join("out")
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_attrbridge"))
            .args(args)
            .env("ATTRBRIDGE_OUTPUT_DIR", self.out())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn ckpt(&self, step: u64) -> String {
        self.out().join("checkpoints").join(format!("step_{step:08}.ckpt")).display().to_string()
    }

    fn trained(config: &str, steps: &str) -> Self {
        let ws = Self::new(config);
        ws.ok(&["train", "--config", &ws.config(), "--steps", steps]);
        ws
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn files_under(root: &Path) -> Vec<String> {
    let mut found = Vec::new();
    let mut pending = vec![root.to_path_buf()];
    while let Some(dir) = pending.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                pending.push(path);
            } else {
                found.push(path.strip_prefix(root).unwrap().display().to_string());
            }
        }
    }
    found.sort();
    found
}

#[test]
fn train_writes_checkpoints_log_and_samples() {
    let ws = Workspace::trained(CONFIG, "3");
    let out = ws.out();
    for step in [0, 2, 3] {
        assert!(Path::new(&ws.ckpt(step)).exists(), "checkpoint {step}");
    }
    assert!(!Path::new(&ws.ckpt(1)).exists());
    let log = fs::read_to_string(out.join("train_log.tsv")).unwrap();
    let steps: std::collections::BTreeSet<&str> = log.lines().filter_map(|l| l.split('\t').next()).collect();
    assert_eq!(steps.into_iter().collect::<Vec<_>>(), ["1", "2", "3"]);
    assert!(log.lines().any(|l| l.contains("total_G")));
    let grid = read_image(&out.join("samples").join("step_00000003.ppm")).unwrap();
    assert!(grid.size() > 32);
}

#[test]
fn zero_step_budget_writes_only_the_initial_checkpoint() {
    let ws = Workspace::trained(CONFIG, "0");
    assert_eq!(files_under(&ws.out()), ["checkpoints/step_00000000.ckpt"]);
}

#[test]
fn same_seed_gives_identical_logs_and_other_seeds_differ() {
    let run = |seed: &str| {
        let ws = Workspace::new(CONFIG);
        ws.ok(&["train", "--config", &ws.config(), "--steps", "4", "--seed", seed]);
        fs::read_to_string(ws.out().join("train_log.tsv")).unwrap()
    };
    let a = run("7");
    assert_eq!(a, run("7"));
    assert_ne!(a, run("8"));
}

#[test]
fn resume_continues_the_uninterrupted_run() {
    let full = Workspace::trained(CONFIG, "4");
    let resumed = Workspace::new(CONFIG);
    resumed.ok(&["train", "--config", &resumed.config(), "--steps", "4", "--resume", &full.ckpt(2)]);
    let tail = |ws: &Workspace| {
        let log = fs::read_to_string(ws.out().join("train_log.tsv")).unwrap();
        log.lines().filter(|l| l.starts_with("3\t") || l.starts_with("4\t")).map(str::to_string).collect::<Vec<_>>()
    };
    assert!(!tail(&full).is_empty());
    assert_eq!(tail(&full), tail(&resumed));
    assert_eq!(fs::read(full.ckpt(4)).unwrap(), fs::read(resumed.ckpt(4)).unwrap());
}

#[test]
fn eval_is_deterministic_and_reports_every_key() {
    let ws = Workspace::trained(CONFIG, "2");
    let report = |name: &str| {
        let path = ws.root.join(name);
        let stdout = ws.ok(&[
            "eval",
            "--checkpoint",
            &ws.ckpt(2),
            "--sources",
            "16",
            "--diversity-sources",
            "4",
            "--output",
            &path.display().to_string(),
        ]);
        assert_eq!(stdout.lines().count(), 2, "{stdout}");
        fs::read_to_string(path).unwrap()
    };
    let a = report("a.txt");
    assert_eq!(a, report("b.txt"));
    for key in [
        "cases",
        "fid_label",
        "fid_reference",
        "fid_real_split",
        "diversity",
        "recon_l1_label",
        "recon_l1_reference",
        "accuracy_label",
        "accuracy_reference.excluded",
        "keep_label.stripes",
        "keep_reference.stripes.count",
    ] {
        assert!(a.lines().any(|l| l.starts_with(&format!("{key} = "))), "missing {key} in\n{a}");
    }
}

#[test]
fn eval_rejects_a_checkpoint_from_another_config() {
    let ws = Workspace::trained(CONFIG, "0");
    let other = ws.root.join("other.cfg");
    fs::write(&other, CONFIG.replace("spade_hidden = 4", "spade_hidden = 6")).unwrap();
    let out = ws.run(&["eval", "--checkpoint", &ws.ckpt(0), "--config", &other.display().to_string()]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).starts_with("error[config-mismatch]"), "{}", stderr(&out));
}

#[test]
fn usage_and_argument_errors_exit_with_two() {
    let ws = Workspace::trained(CONFIG, "0");
    let ckpt = ws.ckpt(0);
    let cases: [&[&str]; 5] = [
        &["train", "--bogus"],
        &["infer", "--checkpoint", &ckpt, "--mode", "reference", "--source", "0"],
        &[
            "infer",
            "--checkpoint",
            &ckpt,
            "--mode",
            "interp",
            "--source",
            "0",
            "--reference",
            "1",
            "--alpha",
            "0.5,1.5",
        ],
        &["infer", "--checkpoint", &ckpt, "--mode", "label", "--source", "0", "--edit", "unknown=1"],
        &["infer", "--checkpoint", &ckpt, "--mode", "label", "--source", "0", "--edit", "stripes=1", "--alpha", "0.5"],
    ];
    for args in cases {
        let out = ws.run(args);
        assert_eq!(code(&out), 2, "{args:?}: {}", stderr(&out));
        assert_eq!(stderr(&out).lines().count(), 1, "{args:?}: {}", stderr(&out));
    }
}

#[test]
fn config_problems_exit_with_three() {
    let ws = Workspace::new(CONFIG);
    let missing = ws.run(&["train", "--config", &ws.root.join("absent.cfg").display().to_string()]);
    assert_eq!(code(&missing), 3, "{}", stderr(&missing));
    let no_data = Workspace::new(&CONFIG.replace("dataset = synthetic\n", ""));
    let out = no_data.run(&["train", "--config", &no_data.config(), "--steps", "1"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn infer_modes_write_grids() {
    let ws = Workspace::trained(CONFIG, "0");
    let ckpt = ws.ckpt(0);
    let grid = |name: &str| ws.root.join(name).display().to_string();
    let runs: [(&str, Vec<&str>); 5] = [
        ("label.ppm", vec!["--mode", "label", "--edit", "stripes=1", "--samples", "3"]),
        ("ref.ppm", vec!["--mode", "reference", "--reference", "70"]),
        ("interp.ppm", vec!["--mode", "interp", "--reference", "70", "--alpha-count", "4"]),
        ("avg.ppm", vec!["--mode", "multiref-avg", "--reference", "70", "--reference", "71"]),
        ("mix.ppm", vec!["--mode", "multiref-mix", "--reference", "70", "--reference", "71"]),
    ];
    for (name, extra) in runs {
        let path = grid(name);
        let mut args = vec!["infer", "--checkpoint", &ckpt, "--source", "64", "--output", &path];
        args.extend(extra);
        let stdout = ws.ok(&args);
        assert!(stdout.contains("wrote"), "{stdout}");
        assert!(read_image(Path::new(&path)).unwrap().size() > 32);
    }
    let path = grid("rec.ppm");
    let stdout = ws.ok(&["infer", "--checkpoint", &ckpt, "--mode", "reconstruct", "--source", "64", "--output", &path]);
    for key in ["recon_l1_label", "recon_l1_reference"] {
        assert!(stdout.lines().any(|l| l.starts_with(&format!("{key} = "))), "{stdout}");
    }
}

#[test]
fn infer_reads_pixmap_sources() {
    let ws = Workspace::trained(CONFIG, "0");
    ws.ok(&["gen-data", "--config", &ws.config(), "--images"]);
    let data = ws.out().join("data");
    let manifest = fs::read_to_string(data.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().filter(|l| !l.starts_with('#') && !l.starts_with("id")).count(), 96);
    let source = data.join("test").join("000064.ppm").display().to_string();
    let reference = data.join("test").join("000070.ppm").display().to_string();
    let path = ws.root.join("g.ppm").display().to_string();
    ws.ok(&[
        "infer",
        "--checkpoint",
        &ws.ckpt(0),
        "--mode",
        "reference",
        "--source",
        &source,
        "--reference",
        &reference,
        "--output",
        &path,
    ]);
}
