use std::path::Path;
use std::process::{Command, Output};

use glad::engine::{load_synset, Space, SynSet};

const TINY: &[&str] = &[
    "--per_class=20",
    "--image_size=16",
    "--expert_count=1",
    "--expert_epochs=4",
    "--expert_batch=32",
    "--iterations=2",
    "--real_batch=4",
    "--init_samples=16",
    "--eval_repeats=1",
    "--eval_warmup=1",
    "--eval_decay=1",
];

fn glad(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glad"))
        .current_dir(dir)
        .args(args)
        .env("GLAD_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn tiny(dir: &Path, cmd: &str, extra: &[&str]) -> Output {
    let mut args = vec![cmd];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    let out = glad(dir, &args);
    assert!(
        out.status.success(),
        "{cmd} {extra:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(glad(d, &[]).status.code(), Some(2));
    assert_eq!(glad(d, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(glad(d, &["distill", "--bogus=1"]).status.code(), Some(2));
    assert_eq!(glad(d, &["distill", "--ipc=many"]).status.code(), Some(2));
    assert_eq!(glad(d, &["distill", "--space=f9"]).status.code(), Some(2));
    assert_eq!(glad(d, &["distill", "--config=missing.cfg"]).status.code(), Some(2));
    let missing = glad(d, &["distill"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("gendata"));
}

#[test]
fn help_lists_every_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = glad(dir.path(), &["--help"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for key in ["method", "space", "ipc", "eval_preset", "sweep_spaces", "mtt_n"] {
        assert!(text.contains(key), "{key} missing from help");
    }
}

#[test]
fn corrupt_inputs_are_runtime_failures() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::create_dir_all(d.join("out")).unwrap();
    std::fs::write(d.join("out/data.bin"), b"not a dataset").unwrap();
    let out = glad(d, &["distill"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

#[test]
fn pipeline_writes_validated_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny(d, "gendata", &[]);
    tiny(d, "train-experts", &[]);
    tiny(d, "distill", &["--method", "mtt", "--space", "pixel", "--ipc", "1"]);
    let run = d.join("out/desk");
    let syn: SynSet<f32> = load_synset(&run.join("synset.bin")).unwrap();
    assert_eq!(syn.len(), 10);
    assert_eq!(syn.space, Space::Pixel);
    for f in ["config.echo", "losses.tsv", "grids/synset.ppm"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let echo = std::fs::read_to_string(run.join("config.echo")).unwrap();
    assert!(echo.contains("method = mtt"));

    let eval = tiny(d, "eval", &[]);
    assert!(stdout(&eval).contains("Unseen architectures"));
    assert!(run.join("eval.tsv").is_file() && run.join("report.md").is_file());
    tiny(d, "export", &[]);
    assert!(run.join("grids/real.ppm").is_file());

    tiny(d, "pretrain-gen", &["--pretrain_epochs=1"]);
    assert_eq!(&std::fs::read(d.join("out/generator.bin")).unwrap()[..8], b"GLADGENW");
    tiny(d, "distill", &["--run=gen", "--generator=out/generator.bin", "--space=f2", "--ipc=2"]);
    tiny(d, "eval", &["--run=gen", "--generator=out/generator.bin"]);
    let mismatch = glad(d, &["eval", "--run=gen"]);
    assert_eq!(mismatch.status.code(), Some(2));

    let report = tiny(d, "report", &[]);
    let text = stdout(&report);
    assert!(text.contains("| desk |") && text.contains("| gen |"));
    assert!(d.join("out/report.md").is_file() && d.join("out/report.tsv").is_file());
}

#[test]
fn identical_configs_give_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        tiny(d, "gendata", &[]);
        tiny(d, "distill", &["--method=dc", "--space=wplus"]);
    }
    for f in ["out/data.bin", "out/desk/synset.bin", "out/desk/losses.tsv", "out/desk/config.echo", "out/desk/grids/synset.ppm"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_files_and_overrides_compose() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.cfg"), "# tiny run\nmethod = dm\nspace = f1\nipc = 3\n").unwrap();
    tiny(d, "gendata", &[]);
    tiny(d, "distill", &["--config=run.cfg", "--ipc=2"]);
    let syn: SynSet<f32> = load_synset(&d.join("out/desk/synset.bin")).unwrap();
    assert_eq!((syn.space, syn.ipc, syn.len()), (Space::F(1), 2, 20));
}

#[test]
fn sweep_has_one_row_per_space() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny(d, "gendata", &[]);
    tiny(d, "sweep-spaces", &["--run=sw"]);
    let tsv = std::fs::read_to_string(d.join("out/sw/sweep.tsv")).unwrap();
    let rows: Vec<&str> = tsv.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(rows, ["pixel", "wplus", "f0", "f1", "f2", "f3", "f4"]);
    assert!(tsv.lines().next().unwrap().ends_with("cross_arch_mean"));
    assert!(d.join("out/sw-f2/synset.bin").is_file());
}

#[test]
fn selftest_passes_on_a_fresh_checkout() {
    let dir = tempfile::tempdir().unwrap();
    let out = glad(dir.path(), &["selftest"]);
    let text = stdout(&out);
    print!("{text}");
    assert!(out.status.success(), "{text}");
    assert!(!text.contains("FAIL "));
}
